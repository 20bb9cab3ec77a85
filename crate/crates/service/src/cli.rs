//! The `stan` command line: run the local service, analyze one recording,
//! or train the reference phone model from labeled recordings.

use std::io::Write;
use std::net::SocketAddr;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use clap::{Args, Parser, Subcommand};
use stutter_core::audio::load_canonical;
use stutter_core::features::{FeatureExtractor, N_MFCC};
use stutter_core::phones::{
    labeled_rows, parse_label_track, train_reference_model, AcousticModel, GaussianPhoneModel,
    PhoneSet, UniformModel,
};
use stutter_core::speaker::SpeakerLabel;
use stutter_core::{AudioClip, Enrollment, Pipeline};

use crate::app::App;
use crate::bind::check_bind;
use crate::config::Settings;
use crate::jobs::SystemClock;
use crate::routes::router;

#[derive(Debug, Parser)]
#[command(
    name = "stan",
    version,
    about = "Stuttering-therapy session analysis, on device"
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Serve the HTTP API on the local network.
    Serve(ServeArgs),
    /// Analyze one recording and print its analysis JSON.
    Analyze(AnalyzeArgs),
    /// Train the reference phone model from recordings with label tracks.
    TrainModel(TrainArgs),
}

#[derive(Debug, Args)]
pub struct ModelArgs {
    /// TOML file with analysis and service settings.
    #[arg(long, env = "STAN_CONFIG")]
    pub config: Option<PathBuf>,
    /// Phone model written by `stan train-model`.
    #[arg(long, env = "STAN_MODEL")]
    pub model: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct ServeArgs {
    #[arg(long, env = "STAN_DATA_DIR", default_value = "./stan-data")]
    pub data_dir: PathBuf,
    /// Loopback or private address only.
    #[arg(long, env = "STAN_BIND", default_value = "127.0.0.1:8080")]
    pub bind: SocketAddr,
    #[command(flatten)]
    pub model: ModelArgs,
}

#[derive(Debug, Args)]
pub struct AnalyzeArgs {
    /// WAV recording of the session.
    pub recording: PathBuf,
    /// Therapist enrollment WAV; without it nothing is filtered out.
    #[arg(long)]
    pub therapist: Option<PathBuf>,
    /// Client enrollment WAV; defaults to the start of the recording.
    #[arg(long, requires = "therapist")]
    pub client: Option<PathBuf>,
    /// Output file; standard output if omitted.
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[command(flatten)]
    pub model: ModelArgs,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    /// Training recording; pair each with a --labels file, in order.
    #[arg(long, required = true)]
    pub audio: Vec<PathBuf>,
    /// Label track with `start end phone` lines.
    #[arg(long, required = true)]
    pub labels: Vec<PathBuf>,
    #[arg(long)]
    pub out: PathBuf,
}

type CliResult<T> = Result<T, String>;

fn read(path: &Path) -> CliResult<Vec<u8>> {
    std::fs::read(path).map_err(|e| format!("reading {}: {e}", path.display()))
}

fn read_audio(path: &Path) -> CliResult<AudioClip> {
    load_canonical(&read(path)?).map_err(|e| format!("{}: {e}", path.display()))
}

/// The phone model at `path`, which must cover the standard phone set, or a
/// uniform model when no path is given.
pub fn load_model(path: Option<&Path>, set: &PhoneSet) -> CliResult<Arc<dyn AcousticModel>> {
    let Some(path) = path else {
        tracing::warn!("no --model given; phone posteriors are uniform and events will be sparse");
        return Ok(Arc::new(UniformModel {
            input_dim: N_MFCC,
            n_phones: set.len(),
        }));
    };
    let model = GaussianPhoneModel::from_bytes(&read(path)?)
        .map_err(|e| format!("{}: {e}", path.display()))?;
    if model.phones() != set.phones() {
        return Err(format!(
            "{}: model phones do not match the standard phone set",
            path.display()
        ));
    }
    Ok(Arc::new(model))
}

pub fn build_pipeline(args: &ModelArgs) -> CliResult<(Settings, Pipeline)> {
    let settings = Settings::load(args.config.as_deref()).map_err(|e| e.to_string())?;
    let set = PhoneSet::standard();
    let model = load_model(args.model.as_deref(), &set)?;
    let pipeline =
        Pipeline::new(settings.pipeline.clone(), model, set).map_err(|e| e.to_string())?;
    Ok((settings, pipeline))
}

fn analyze(args: &AnalyzeArgs) -> CliResult<()> {
    let (_, pipeline) = build_pipeline(&args.model)?;
    let enroll = |path: &Option<PathBuf>, label| -> CliResult<_> {
        path.as_deref()
            .map(|p| {
                pipeline
                    .enroll(&read_audio(p)?, label)
                    .map_err(|e| format!("{}: {e}", p.display()))
            })
            .transpose()
    };
    let enrollment = Enrollment {
        therapist: enroll(&args.therapist, SpeakerLabel::Therapist)?,
        client: enroll(&args.client, SpeakerLabel::Client)?,
    };
    let clip = read_audio(&args.recording)?;
    let out = pipeline
        .run(&clip, &enrollment, &mut |_| {})
        .map_err(|e| e.to_string())?;
    let json = out.bundle.to_json();
    match &args.out {
        Some(path) => {
            std::fs::write(path, &json).map_err(|e| format!("writing {}: {e}", path.display()))
        }
        None => std::io::stdout()
            .write_all(&json)
            .map_err(|e| e.to_string()),
    }
}

fn train(args: &TrainArgs) -> CliResult<()> {
    if args.audio.len() != args.labels.len() {
        return Err(format!(
            "{} --audio files but {} --labels files",
            args.audio.len(),
            args.labels.len()
        ));
    }
    let set = PhoneSet::standard();
    let extractor = FeatureExtractor::default();
    let mut rows = Vec::new();
    for (audio, labels) in args.audio.iter().zip(&args.labels) {
        let features = extractor.extract(&read_audio(audio)?);
        let text = String::from_utf8(read(labels)?)
            .map_err(|_| format!("{}: not UTF-8", labels.display()))?;
        let track = parse_label_track(&text).map_err(|e| format!("{}: {e}", labels.display()))?;
        rows.extend(
            labeled_rows(&features, &track, &set)
                .map_err(|e| format!("{}: {e}", labels.display()))?,
        );
    }
    let model = train_reference_model(&rows, set.phones()).map_err(|e| e.to_string())?;
    let trained = (0..set.len()).filter(|&p| model.is_trained(p)).count();
    std::fs::write(&args.out, model.to_bytes())
        .map_err(|e| format!("writing {}: {e}", args.out.display()))?;
    eprintln!(
        "trained {trained} of {} phones from {} frames",
        set.len(),
        rows.len()
    );
    Ok(())
}

async fn serve(args: &ServeArgs) -> CliResult<()> {
    check_bind(args.bind)?;
    let (settings, pipeline) = build_pipeline(&args.model)?;
    let app = App::open(
        &args.data_dir,
        pipeline,
        settings.service.workers,
        Arc::new(SystemClock),
    )
    .map_err(|e| e.to_string())?;
    let recovery = app.recover().map_err(|e| e.to_string())?;
    for id in &recovery.unreadable {
        tracing::warn!(session = %id, "session directory is unreadable and was skipped");
    }
    if !recovery.requeued.is_empty() {
        tracing::info!(
            count = recovery.requeued.len(),
            "restarted interrupted analyses"
        );
    }
    let listener = tokio::net::TcpListener::bind(args.bind)
        .await
        .map_err(|e| format!("binding {}: {e}", args.bind))?;
    tracing::info!(addr = %args.bind, data_dir = %args.data_dir.display(), "listening");
    axum::serve(listener, router(app, settings.service.max_upload_bytes()))
        .with_graceful_shutdown(async {
            let _ = tokio::signal::ctrl_c().await;
        })
        .await
        .map_err(|e| e.to_string())
}

pub fn run(cli: Cli) -> CliResult<()> {
    match &cli.command {
        Command::Serve(args) => tokio::runtime::Runtime::new()
            .map_err(|e| e.to_string())?
            .block_on(serve(args)),
        Command::Analyze(args) => analyze(args),
        Command::TrainModel(args) => train(args),
    }
}
