#![allow(dead_code)]

use std::path::Path;
use std::sync::{Arc, Condvar, Mutex, OnceLock};
use std::time::Duration;

use axum::body::{to_bytes, Body};
use axum::http::{Method, Request, StatusCode};
use axum::Router;
use serde_json::Value;
use stutter_core::audio::{encode_wav, AudioClip};
use stutter_core::features::FeatureExtractor;
use stutter_core::phones::{
    labeled_rows, parse_label_track, train_reference_model, AcousticModel, GaussianPhoneModel,
    PhoneSet,
};
use stutter_core::{Pipeline, PipelineConfig};
use stutter_service::jobs::{Clock, SystemClock};
use stutter_service::{router, App};
use stutter_testkit as kit;
use tempfile::TempDir;
use tower::ServiceExt;

pub const RATE: u32 = 16_000;

/// Reference phone model trained once per test binary on a session that is
/// never analyzed.
pub fn trained_model() -> Arc<GaussianPhoneModel> {
    static MODEL: OnceLock<Arc<GaussianPhoneModel>> = OnceLock::new();
    MODEL
        .get_or_init(|| {
            let set = PhoneSet::standard();
            let training = kit::thirty_second_session(100);
            let clip = AudioClip::new(training.samples.clone(), training.rate, "train");
            let features = FeatureExtractor::default().extract(&clip);
            let track = parse_label_track(&kit::label_track(&training)).unwrap();
            let rows = labeled_rows(&features, &track, &set).unwrap();
            Arc::new(train_reference_model(&rows, set.phones()).unwrap())
        })
        .clone()
}

pub fn pipeline_with(model: Arc<dyn AcousticModel>) -> Pipeline {
    Pipeline::new(PipelineConfig::default(), model, PhoneSet::standard()).unwrap()
}

/// Holds every analysis inside its forward pass until opened, so tests can
/// observe sessions mid-analysis.
pub struct Gate {
    open: Mutex<bool>,
    cv: Condvar,
}

impl Gate {
    pub fn closed() -> Arc<Self> {
        Arc::new(Self {
            open: Mutex::new(false),
            cv: Condvar::new(),
        })
    }

    pub fn open(&self) {
        *self.open.lock().unwrap() = true;
        self.cv.notify_all();
    }

    fn wait(&self) {
        let mut open = self.open.lock().unwrap();
        while !*open {
            open = self.cv.wait(open).unwrap();
        }
    }
}

pub struct GatedModel {
    pub inner: Arc<GaussianPhoneModel>,
    pub gate: Arc<Gate>,
}

impl AcousticModel for GatedModel {
    fn input_dim(&self) -> usize {
        self.inner.input_dim()
    }

    fn n_phones(&self) -> usize {
        self.inner.n_phones()
    }

    fn posteriors(&self, row: &[f64]) -> Vec<f64> {
        self.gate.wait();
        self.inner.posteriors(row)
    }
}

pub struct Server {
    pub app: Arc<App>,
    pub router: Router,
    pub dir: TempDir,
}

pub struct Reply {
    pub status: StatusCode,
    pub body: Vec<u8>,
}

impl Reply {
    pub fn json(&self) -> Value {
        serde_json::from_slice(&self.body)
            .unwrap_or_else(|e| panic!("{e}: {}", String::from_utf8_lossy(&self.body)))
    }

    /// The error code of a JSON error body.
    pub fn code(&self) -> String {
        self.json()["error"].as_str().unwrap_or("").to_string()
    }
}

impl Server {
    pub fn new() -> Self {
        Self::with(pipeline_with(trained_model()), 2)
    }

    pub fn gated(gate: Arc<Gate>) -> Self {
        Self::with(
            pipeline_with(Arc::new(GatedModel {
                inner: trained_model(),
                gate,
            })),
            2,
        )
    }

    pub fn with(pipeline: Pipeline, workers: usize) -> Self {
        let dir = tempfile::tempdir().unwrap();
        Self::at(dir, pipeline, workers, Arc::new(SystemClock))
    }

    pub fn at(dir: TempDir, pipeline: Pipeline, workers: usize, clock: Arc<dyn Clock>) -> Self {
        let app = App::open(dir.path(), pipeline, workers, clock).unwrap();
        app.recover().unwrap();
        let router = router(app.clone(), 64 << 20);
        Self { app, router, dir }
    }

    pub fn data_dir(&self) -> &Path {
        self.dir.path()
    }

    pub async fn call(&self, method: Method, uri: &str, body: Vec<u8>) -> Reply {
        let req = Request::builder()
            .method(method)
            .uri(uri)
            .body(Body::from(body))
            .unwrap();
        let res = self.router.clone().oneshot(req).await.unwrap();
        let status = res.status();
        let body = to_bytes(res.into_body(), usize::MAX)
            .await
            .unwrap()
            .to_vec();
        Reply { status, body }
    }

    pub async fn get(&self, uri: &str) -> Reply {
        self.call(Method::GET, uri, Vec::new()).await
    }

    pub async fn post(&self, uri: &str, body: Vec<u8>) -> Reply {
        self.call(Method::POST, uri, body).await
    }

    pub async fn post_json(&self, uri: &str, body: Value) -> Reply {
        let req = Request::builder()
            .method(Method::POST)
            .uri(uri)
            .header("content-type", "application/json")
            .body(Body::from(body.to_string()))
            .unwrap();
        let res = self.router.clone().oneshot(req).await.unwrap();
        let status = res.status();
        let body = to_bytes(res.into_body(), usize::MAX)
            .await
            .unwrap()
            .to_vec();
        Reply { status, body }
    }

    pub async fn create(&self, task: &str, text: Option<&str>) -> String {
        let mut body = serde_json::json!({ "task": task });
        if let Some(text) = text {
            body["reading_text"] = text.into();
        }
        let reply = self.post_json("/sessions", body).await;
        assert_eq!(
            reply.status,
            StatusCode::CREATED,
            "{}",
            String::from_utf8_lossy(&reply.body)
        );
        reply.json()["id"].as_str().unwrap().to_string()
    }

    /// Polls the job until it leaves the active states.
    pub async fn wait_job(&self, job_id: &str) -> Value {
        for _ in 0..3000 {
            let job = self.get(&format!("/jobs/{job_id}")).await.json();
            if job["state"] == "done" || job["state"] == "failed" {
                return job;
            }
            tokio::time::sleep(Duration::from_millis(10)).await;
        }
        panic!("job {job_id} did not finish");
    }
}

pub fn wav(samples: Vec<f64>) -> Vec<u8> {
    encode_wav(&AudioClip::new(samples, RATE, "upload"))
}

pub fn therapist_wav(dur_s: f64, seed: u64) -> Vec<u8> {
    wav(kit::voice_clip(kit::Voice::Therapist, dur_s, RATE, seed))
}

pub fn client_wav(dur_s: f64, seed: u64) -> Vec<u8> {
    wav(kit::voice_clip(kit::Voice::Client, dur_s, RATE, seed))
}

pub fn session_wav(seed: u64) -> Vec<u8> {
    wav(kit::thirty_second_session(seed).samples)
}

fn load_schema(name: &str) -> Value {
    let path = Path::new(env!("CARGO_MANIFEST_DIR")).join(format!("../../docs/{name}.schema.json"));
    let mut schema: Value = serde_json::from_slice(&std::fs::read(path).unwrap()).unwrap();
    inline_refs(&mut schema);
    schema
}

/// Replaces references to sibling schema files with their contents.
fn inline_refs(v: &mut Value) {
    match v {
        Value::Object(map) => {
            let target = map
                .get("$ref")
                .and_then(Value::as_str)
                .and_then(|r| r.strip_prefix("urn:stan:schema:"))
                .map(str::to_string);
            if let Some(name) = target {
                let mut other = load_schema(&name);
                let other = other.as_object_mut().unwrap();
                other.remove("$id");
                other.remove("$schema");
                *map = other.clone();
            } else {
                map.values_mut().for_each(inline_refs);
            }
        }
        Value::Array(items) => items.iter_mut().for_each(inline_refs),
        _ => {}
    }
}

pub fn validator(name: &str) -> jsonschema::Validator {
    jsonschema::validator_for(&load_schema(name)).unwrap()
}

pub fn assert_valid(name: &str, value: &Value) {
    let v = validator(name);
    let errors: Vec<String> = v
        .iter_errors(value)
        .map(|e| format!("{e} at {}", e.instance_path()))
        .collect();
    assert!(errors.is_empty(), "{name} schema: {errors:?}");
}
