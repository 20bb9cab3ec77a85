//! Acoustic model interface and the trainable reference model.

use std::collections::BTreeMap;

use super::PhoneError;

/// Maps one feature row to a probability distribution over phones.
///
/// Implementations must be deterministic for fixed weights and return
/// `n_phones()` non-negative values summing to one.
pub trait AcousticModel: Send + Sync {
    fn input_dim(&self) -> usize;
    fn n_phones(&self) -> usize;
    fn posteriors(&self, row: &[f64]) -> Vec<f64>;
}

/// Every phone equally likely. Used when no trained model is configured.
#[derive(Debug, Clone, Copy)]
pub struct UniformModel {
    pub input_dim: usize,
    pub n_phones: usize,
}

impl AcousticModel for UniformModel {
    fn input_dim(&self) -> usize {
        self.input_dim
    }

    fn n_phones(&self) -> usize {
        self.n_phones
    }

    fn posteriors(&self, _row: &[f64]) -> Vec<f64> {
        vec![1.0 / self.n_phones as f64; self.n_phones]
    }
}

/// Minimum training rows for a phone to get its own Gaussian.
pub const MIN_EXAMPLES_PER_PHONE: usize = 10;
pub const VARIANCE_FLOOR: f64 = 1e-4;
/// Prior weight of an untrained phone relative to a trained one.
pub const UNTRAINED_PRIOR_WEIGHT: f64 = 1e-3;

const MODEL_MAGIC: [u8; 4] = *b"PHGM";
const MODEL_VERSION: u32 = 1;

/// Diagonal-covariance Gaussian per phone. Phones without enough training
/// data share a background Gaussian fit to all rows.
#[derive(Debug, Clone, PartialEq)]
pub struct GaussianPhoneModel {
    phones: Vec<String>,
    trained: Vec<bool>,
    log_prior: Vec<f64>,
    means: Vec<Vec<f64>>,
    variances: Vec<Vec<f64>>,
    background_mean: Vec<f64>,
    background_var: Vec<f64>,
}

fn mean_and_variance(rows: &[&[f64]], dim: usize) -> (Vec<f64>, Vec<f64>) {
    let n = rows.len() as f64;
    let mut mean = vec![0.0; dim];
    for row in rows {
        for (m, x) in mean.iter_mut().zip(row.iter()) {
            *m += x;
        }
    }
    mean.iter_mut().for_each(|m| *m /= n);
    let mut var = vec![0.0; dim];
    for row in rows {
        for ((v, x), m) in var.iter_mut().zip(row.iter()).zip(&mean) {
            *v += (x - m) * (x - m);
        }
    }
    var.iter_mut()
        .for_each(|v| *v = (*v / n).max(VARIANCE_FLOOR));
    (mean, var)
}

/// Fits a [`GaussianPhoneModel`] to `(feature row, phone index)` pairs.
///
/// `phones` names every output phone; indices in `labeled` refer to it.
pub fn train_reference_model(
    labeled: &[(Vec<f64>, usize)],
    phones: &[String],
) -> Result<GaussianPhoneModel, PhoneError> {
    let dim = labeled.first().map_or(0, |(row, _)| row.len());
    if let Some((row, _)) = labeled.iter().find(|(row, _)| row.len() != dim) {
        return Err(PhoneError::DimensionMismatch {
            expected: dim,
            found: row.len(),
        });
    }
    if let Some((_, p)) = labeled.iter().find(|(_, p)| *p >= phones.len()) {
        return Err(PhoneError::UnknownPhone(p.to_string()));
    }
    let mut by_phone: BTreeMap<usize, Vec<&[f64]>> = BTreeMap::new();
    for (row, phone) in labeled {
        by_phone.entry(*phone).or_default().push(row);
    }
    let trained: Vec<bool> = (0..phones.len())
        .map(|p| {
            by_phone
                .get(&p)
                .is_some_and(|rows| rows.len() >= MIN_EXAMPLES_PER_PHONE)
        })
        .collect();
    if !trained.iter().any(|&t| t) {
        return Err(PhoneError::InsufficientData {
            min_per_phone: MIN_EXAMPLES_PER_PHONE,
        });
    }
    let all: Vec<&[f64]> = labeled.iter().map(|(r, _)| r.as_slice()).collect();
    let (background_mean, background_var) = mean_and_variance(&all, dim);

    let mut means = Vec::with_capacity(phones.len());
    let mut variances = Vec::with_capacity(phones.len());
    for (p, &is_trained) in trained.iter().enumerate() {
        if is_trained {
            let (m, v) = mean_and_variance(&by_phone[&p], dim);
            means.push(m);
            variances.push(v);
        } else {
            means.push(background_mean.clone());
            variances.push(background_var.clone());
        }
    }
    let weights: Vec<f64> = trained
        .iter()
        .map(|&t| if t { 1.0 } else { UNTRAINED_PRIOR_WEIGHT })
        .collect();
    let total: f64 = weights.iter().sum();
    Ok(GaussianPhoneModel {
        phones: phones.to_vec(),
        trained,
        log_prior: weights.iter().map(|w| (w / total).ln()).collect(),
        means,
        variances,
        background_mean,
        background_var,
    })
}

fn log_gaussian(x: &[f64], mean: &[f64], var: &[f64]) -> f64 {
    let ln_2pi = (2.0 * std::f64::consts::PI).ln();
    x.iter()
        .zip(mean)
        .zip(var)
        .map(|((x, m), v)| -0.5 * (ln_2pi + v.ln() + (x - m) * (x - m) / v))
        .sum()
}

impl GaussianPhoneModel {
    pub fn phones(&self) -> &[String] {
        &self.phones
    }

    pub fn is_trained(&self, phone: usize) -> bool {
        self.trained[phone]
    }

    pub fn mean(&self, phone: usize) -> &[f64] {
        &self.means[phone]
    }

    pub fn variance(&self, phone: usize) -> &[f64] {
        &self.variances[phone]
    }

    pub fn prior(&self, phone: usize) -> f64 {
        self.log_prior[phone].exp()
    }

    pub fn background(&self) -> (&[f64], &[f64]) {
        (&self.background_mean, &self.background_var)
    }

    /// Little-endian binary layout:
    ///
    /// ```text
    /// magic "PHGM" | version u32 | n_phones u32 | dim u32
    /// n_phones x (len u8, utf-8 symbol)
    /// n_phones x trained u8
    /// n_phones x log_prior f64
    /// dim x background mean f64 | dim x background variance f64
    /// n_phones x (dim x mean f64, dim x variance f64)
    /// ```
    pub fn to_bytes(&self) -> Vec<u8> {
        let dim = self.background_mean.len();
        let mut out = Vec::new();
        out.extend_from_slice(&MODEL_MAGIC);
        out.extend_from_slice(&MODEL_VERSION.to_le_bytes());
        out.extend_from_slice(&(self.phones.len() as u32).to_le_bytes());
        out.extend_from_slice(&(dim as u32).to_le_bytes());
        for p in &self.phones {
            out.push(p.len() as u8);
            out.extend_from_slice(p.as_bytes());
        }
        out.extend(self.trained.iter().map(|&t| t as u8));
        let mut put = |values: &[f64]| {
            for v in values {
                out.extend_from_slice(&v.to_le_bytes());
            }
        };
        put(&self.log_prior);
        put(&self.background_mean);
        put(&self.background_var);
        for (m, v) in self.means.iter().zip(&self.variances) {
            put(m);
            put(v);
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, PhoneError> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(4)? != MODEL_MAGIC {
            return Err(PhoneError::ModelFormat("bad magic".into()));
        }
        let version = r.u32()?;
        if version != MODEL_VERSION {
            return Err(PhoneError::ModelFormat(format!(
                "unsupported version {version}"
            )));
        }
        let n = r.u32()? as usize;
        let dim = r.u32()? as usize;
        let mut phones = Vec::with_capacity(n);
        for _ in 0..n {
            let len = r.take(1)?[0] as usize;
            let sym = std::str::from_utf8(r.take(len)?)
                .map_err(|_| PhoneError::ModelFormat("phone symbol is not utf-8".into()))?;
            phones.push(sym.to_string());
        }
        let trained = r.take(n)?.iter().map(|&b| b != 0).collect();
        let log_prior = r.f64s(n)?;
        let background_mean = r.f64s(dim)?;
        let background_var = r.f64s(dim)?;
        let mut means = Vec::with_capacity(n);
        let mut variances = Vec::with_capacity(n);
        for _ in 0..n {
            means.push(r.f64s(dim)?);
            variances.push(r.f64s(dim)?);
        }
        if r.pos != bytes.len() {
            return Err(PhoneError::ModelFormat("trailing bytes".into()));
        }
        Ok(Self {
            phones,
            trained,
            log_prior,
            means,
            variances,
            background_mean,
            background_var,
        })
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], PhoneError> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.bytes.len())
            .ok_or_else(|| PhoneError::ModelFormat("truncated model file".into()))?;
        let out = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(out)
    }

    fn u32(&mut self) -> Result<u32, PhoneError> {
        let b = self.take(4)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
    }

    fn f64s(&mut self, n: usize) -> Result<Vec<f64>, PhoneError> {
        let len = n
            .checked_mul(8)
            .ok_or_else(|| PhoneError::ModelFormat("size overflow".into()))?;
        Ok(self
            .take(len)?
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
            .collect())
    }
}

impl AcousticModel for GaussianPhoneModel {
    fn input_dim(&self) -> usize {
        self.background_mean.len()
    }

    fn n_phones(&self) -> usize {
        self.phones.len()
    }

    fn posteriors(&self, row: &[f64]) -> Vec<f64> {
        let scores: Vec<f64> = (0..self.phones.len())
            .map(|p| self.log_prior[p] + log_gaussian(row, &self.means[p], &self.variances[p]))
            .collect();
        let max = scores.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let exp: Vec<f64> = scores.iter().map(|s| (s - max).exp()).collect();
        let total: f64 = exp.iter().sum();
        exp.into_iter().map(|e| e / total).collect()
    }
}
