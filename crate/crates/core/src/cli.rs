//! Command-line pipeline: synthesize or ingest PSD data, train, explain and
//! verify. Every command writes under `--out` and records a manifest.
//!
//! Exit codes: 0 success, 1 runtime failure, 2 usage error.

use std::ffi::OsString;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use clap::{Args, Parser, Subcommand, ValueEnum};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use serde_json::Value;
use sha2::{Digest, Sha256};

use crate::data::{
    bursts_csv, decode_csv, decode_raw, encode_csv, encode_raw, labels_csv, prepare_segments,
    region_count, synth_generate, to_pgm, PsdFormat, PsdMatrix, ScalingMode, SegmentationConfig,
    SpectrogramSegment, SynthConfig,
};
use crate::error::Error;
use crate::gbp::{cluster_attribution, guided_backprop, map_csv, predicted_cluster, render_ppm, subsample};
use crate::gradcheck::{gradient_check, GradCheckOptions};
use crate::kmeans::{decode_kmeans, encode_kmeans, kmeans_fit, nmi, KmeansInit, KmeansModel, KmeansOptions};
use crate::linalg::Matrix;
use crate::nn::{decode_checkpoint, encode_checkpoint, ArchConfig, CnnModel, Tensor};
use crate::pca::{decode_pca, encode_pca, evr_csv, pca_fit, PcaModel, Reduction};
use crate::report::{cluster_reports, render_report, ReportOptions, DEFAULT_ATTRIBUTION_CAP, DEFAULT_SPECTROGRAM_CAP};
use crate::trainer::{derive_seed, extract_features, train, TrainConfig};
use crate::tree::{build_tree, fidelity, DEFAULT_LAMBDA};
use crate::tsne::{embedding_csv, tsne_embed, TsneConfig};

pub const SEED_ENV: &str = "SPECTRUM_XAI_SEED";

#[derive(Parser, Debug)]
#[command(name = "spectrum-xai", version, about = "Explainable clustering of spectrum segments")]
pub struct Cli {
    /// Output directory.
    #[arg(long, global = true, default_value = "out")]
    pub out: PathBuf,
    /// JSON file of flag values; explicit flags take precedence.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Worker threads (default: all cores).
    #[arg(long, global = true)]
    pub threads: Option<usize>,
    /// Only write artifacts that are missing.
    #[arg(long, global = true)]
    pub resume: bool,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Generate a synthetic PSD matrix with ground-truth tile labels.
    Synth(SynthArgs),
    /// Cut a PSD file into scaled tiles and dump them for inspection.
    Segment(SegmentArgs),
    /// Train the CNN with periodic re-clustering.
    Train(TrainArgs),
    /// Build the shallow tree, attribution maps and per-cluster report.
    Explain(ExplainArgs),
    /// Gradient check, EVR curve and t-SNE embeddings.
    Verify(VerifyArgs),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Preset {
    Desk,
    Wide,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FileFormat {
    Raw,
    Csv,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Scaling {
    GlobalMinmax,
    PerSegmentMinmax,
}

impl From<Scaling> for ScalingMode {
    fn from(s: Scaling) -> Self {
        match s {
            Scaling::GlobalMinmax => ScalingMode::GlobalMinmax,
            Scaling::PerSegmentMinmax => ScalingMode::PerSegmentMinmax,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Init {
    RandomPoints,
    KmeansPp,
}

impl From<Init> for KmeansInit {
    fn from(i: Init) -> Self {
        match i {
            Init::RandomPoints => KmeansInit::RandomPoints,
            Init::KmeansPp => KmeansInit::KmeansPp,
        }
    }
}

fn is_false(b: &bool) -> bool {
    !*b
}

#[derive(Args, Debug, Clone, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SynthArgs {
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
    /// Number of time samples (required).
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub duration: Option<usize>,
    /// Geometry preset: desk (128 bins, W = 16) or wide (1024 bins, W = 128).
    #[arg(long, value_enum)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub preset: Option<Preset>,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub bins: Option<usize>,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub window: Option<usize>,
    /// Archetypes to emit (1-4).
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub n_classes: Option<usize>,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub burst_rate: Option<f64>,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub burst_power: Option<f64>,
    #[arg(long, value_enum)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub format: Option<FileFormat>,
}

#[derive(Args, Debug, Clone, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SegmentArgs {
    /// PSD file (`.csv` or raw).
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub data: Option<PathBuf>,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub window: Option<usize>,
    #[arg(long, value_enum)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub scaling: Option<Scaling>,
    /// Number of segments dumped as PGM images.
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub pgm_limit: Option<usize>,
}

#[derive(Args, Debug, Clone, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainArgs {
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub data: Option<PathBuf>,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub window: Option<usize>,
    #[arg(long, value_enum)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub scaling: Option<Scaling>,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub epochs: Option<usize>,
    /// Epochs between clustering events.
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub clustering_cycle: Option<usize>,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub clusters: Option<usize>,
    #[arg(long, conflicts_with = "evr_threshold")]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub pca_dims: Option<usize>,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub evr_threshold: Option<f64>,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub lr: Option<f64>,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub momentum: Option<f64>,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub batch_size: Option<usize>,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
    /// Conv widths, comma-separated.
    #[arg(long, value_delimiter = ',')]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub channels: Option<Vec<usize>>,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub feature_dim: Option<usize>,
    #[arg(long, value_enum)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub kmeans_init: Option<Init>,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub kmeans_restarts: Option<usize>,
    #[arg(long)]
    #[serde(default, skip_serializing_if = "is_false")]
    pub whiten: bool,
    /// Keep the classifier head across clustering events.
    #[arg(long)]
    #[serde(default, skip_serializing_if = "is_false")]
    pub keep_head: bool,
}

#[derive(Args, Debug, Clone, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExplainArgs {
    /// Checkpoint directory (default: OUT/checkpoint).
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub checkpoint: Option<PathBuf>,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub data: Option<PathBuf>,
    /// Depth penalty of the shallow tree.
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub lambda: Option<f64>,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub run_id: Option<String>,
    /// Logit explained in per-sample maps (default: predicted cluster).
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub target: Option<usize>,
    /// Per-sample maps written for each cluster.
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub samples_per_cluster: Option<usize>,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub attribution_cap: Option<usize>,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub spectrogram_cap: Option<usize>,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
}

#[derive(Args, Debug, Clone, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct VerifyArgs {
    /// Checkpoint directory; without one the gradient check runs on a
    /// freshly initialized model.
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub checkpoint: Option<PathBuf>,
    /// PSD file for the EVR curve, t-SNE and NMI (needs --checkpoint).
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub data: Option<PathBuf>,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub eps: Option<f64>,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub tolerance: Option<f64>,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub evr_threshold: Option<f64>,
    /// Points embedded by t-SNE (seeded subsample).
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub tsne_points: Option<usize>,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub perplexity: Option<f64>,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub tsne_iterations: Option<usize>,
}

#[derive(Debug)]
pub enum CliError {
    Usage(String),
    Runtime(Error),
}

impl From<Error> for CliError {
    fn from(e: Error) -> Self {
        CliError::Runtime(e)
    }
}

type CliResult<T> = std::result::Result<T, CliError>;

fn usage<T>(msg: impl Into<String>) -> CliResult<T> {
    Err(CliError::Usage(msg.into()))
}

/// Configuration errors caused by flag values are usage errors.
fn config_check(r: crate::Result<()>) -> CliResult<()> {
    match r {
        Err(Error::InvalidConfig(m)) => usage(m),
        other => other.map_err(CliError::Runtime),
    }
}

const SECTIONS: [&str; 5] = ["synth", "segment", "train", "explain", "verify"];

/// Overlays explicitly given flags on the config file's values for
/// `section` (or the whole file when it has no per-command sections).
fn merge<T: Serialize + DeserializeOwned>(flags: &T, config: Option<&Value>, section: &str) -> CliResult<T> {
    let mut base = match config {
        None => serde_json::Map::new(),
        Some(Value::Object(obj)) => {
            if let Some(v) = obj.get(section) {
                match v {
                    Value::Object(o) => o.clone(),
                    _ => return usage(format!("config section '{section}' must be an object")),
                }
            } else if obj.keys().any(|k| SECTIONS.contains(&k.as_str())) {
                serde_json::Map::new()
            } else {
                obj.clone()
            }
        }
        Some(_) => return usage("config file must hold a JSON object"),
    };
    let Value::Object(explicit) = serde_json::to_value(flags).map_err(Error::from)? else {
        unreachable!("flag structs serialize to objects")
    };
    if explicit.contains_key("pca_dims") || explicit.contains_key("evr_threshold") {
        base.remove("pca_dims");
        base.remove("evr_threshold");
    }
    base.extend(explicit);
    serde_json::from_value(Value::Object(base)).map_err(|e| CliError::Usage(format!("config: {e}")))
}

/// Flag or config value, then the environment, then 0.
fn resolve_seed(seed: Option<u64>) -> CliResult<Option<u64>> {
    if seed.is_some() {
        return Ok(seed);
    }
    match std::env::var(SEED_ENV) {
        Ok(v) => match v.trim().parse() {
            Ok(s) => Ok(Some(s)),
            Err(_) => usage(format!("{SEED_ENV}={v:?} is not an unsigned integer")),
        },
        Err(_) => Ok(None),
    }
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Artifact {
    /// Relative to the output directory.
    pub path: String,
    pub sha256: String,
    pub bytes: u64,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct RunManifest {
    pub command: String,
    pub version: String,
    pub seed: Option<u64>,
    pub config: Value,
    pub dataset_sha256: Option<String>,
    pub started_unix_ms: u128,
    pub finished_unix_ms: u128,
    pub artifacts: Vec<Artifact>,
}

fn now_ms() -> u128 {
    SystemTime::now()
        .duration_since(UNIX_EPOCH)
        .map(|d| d.as_millis())
        .unwrap_or(0)
}

/// Collects artifacts written under the output directory.
struct Outputs {
    root: PathBuf,
    resume: bool,
    artifacts: Vec<Artifact>,
}

impl Outputs {
    fn new(root: &Path, resume: bool) -> Self {
        Outputs {
            root: root.to_path_buf(),
            resume,
            artifacts: Vec::new(),
        }
    }

    fn write(&mut self, rel: &str, body: &[u8]) -> crate::Result<PathBuf> {
        let p = self.root.join(rel);
        if !(self.resume && p.is_file()) {
            if let Some(parent) = p.parent() {
                std::fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
            }
            std::fs::write(&p, body).map_err(|e| Error::io(&p, e))?;
        }
        let on_disk = std::fs::read(&p).map_err(|e| Error::io(&p, e))?;
        self.artifacts.push(Artifact {
            path: rel.to_string(),
            sha256: sha256_hex(&on_disk),
            bytes: on_disk.len() as u64,
        });
        Ok(p)
    }

    fn finish(
        self,
        command: &str,
        seed: Option<u64>,
        config: &impl Serialize,
        dataset_sha256: Option<String>,
        started: u128,
    ) -> crate::Result<()> {
        let manifest = RunManifest {
            command: command.to_string(),
            version: env!("CARGO_PKG_VERSION").to_string(),
            seed,
            config: serde_json::to_value(config)?,
            dataset_sha256,
            started_unix_ms: started,
            finished_unix_ms: now_ms(),
            artifacts: self.artifacts,
        };
        let p = self.root.join(format!("manifest_{command}.json"));
        std::fs::write(&p, serde_json::to_vec_pretty(&manifest)?).map_err(|e| Error::io(&p, e))
    }
}

/// Reads a PSD file, returning the matrix and the file's sha256.
pub fn load_psd(path: &Path) -> crate::Result<(PsdMatrix, String)> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    let hash = sha256_hex(&bytes);
    let m = match PsdFormat::from_path(path) {
        PsdFormat::Csv => {
            let text = String::from_utf8(bytes)
                .map_err(|e| Error::parse(format!("offset {}", e.utf8_error().valid_up_to()), "not UTF-8"))?;
            decode_csv(&text)?
        }
        PsdFormat::RawF32Le => decode_raw(&bytes)?,
    };
    Ok((m, hash))
}

/// Training provenance stored next to the model files.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub train: TrainConfig,
    pub segmentation: SegmentationConfig,
    pub dataset_sha256: String,
    pub segment_count: usize,
}

pub struct Checkpoint {
    pub model: CnnModel,
    pub pca: PcaModel,
    pub kmeans: KmeansModel,
    pub labels: Vec<usize>,
    pub meta: CheckpointMeta,
}

pub const CNN_FILE: &str = "cnn.ckpt";
pub const PCA_FILE: &str = "pca.ckpt";
pub const KMEANS_FILE: &str = "kmeans.ckpt";
pub const LABELS_FILE: &str = "labels.csv";
pub const META_FILE: &str = "train_config.json";

fn cluster_labels_csv(segments: &[SpectrogramSegment], labels: &[usize]) -> String {
    let mut s = String::from("segment_id,cluster\n");
    for (seg, l) in segments.iter().zip(labels) {
        let _ = writeln!(s, "{},{l}", seg.segment_id);
    }
    s
}

/// Reads `labels.csv` as written by `train`: a header, then `segment_id,cluster`.
pub fn parse_cluster_labels(text: &str) -> crate::Result<Vec<usize>> {
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate().skip(1) {
        if line.trim().is_empty() {
            continue;
        }
        let cluster = line
            .split(',')
            .nth(1)
            .and_then(|c| c.trim().parse().ok())
            .ok_or_else(|| Error::parse(format!("line {}", i + 1), "expected segment_id,cluster"))?;
        out.push(cluster);
    }
    Ok(out)
}

pub fn load_checkpoint(dir: &Path) -> crate::Result<Checkpoint> {
    let read = |name: &str| {
        let p = dir.join(name);
        std::fs::read(&p).map_err(|e| Error::io(&p, e))
    };
    let model = decode_checkpoint(&read(CNN_FILE)?)?;
    let pca = decode_pca(&read(PCA_FILE)?)?;
    let kmeans = decode_kmeans(&read(KMEANS_FILE)?)?;
    let labels = parse_cluster_labels(&String::from_utf8_lossy(&read(LABELS_FILE)?))?;
    let meta: CheckpointMeta = serde_json::from_slice(&read(META_FILE)?)?;
    if pca.input_dim() != model.feature_dim() || kmeans.centroids.ncols() != pca.n_components() {
        return Err(Error::Structure("checkpoint parts have inconsistent dimensions".into()));
    }
    if kmeans.k != model.classes() {
        return Err(Error::Structure(format!(
            "K-means has {} clusters but the model head has {}",
            kmeans.k,
            model.classes()
        )));
    }
    Ok(Checkpoint {
        model,
        pca,
        kmeans,
        labels,
        meta,
    })
}

/// Parses `args` (including the program name) and runs the command.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return e.exit_code();
        }
    };
    let outcome = match cli.threads {
        Some(0) => Err(CliError::Usage("--threads must be positive".into())),
        Some(n) => match rayon::ThreadPoolBuilder::new().num_threads(n).build() {
            Ok(pool) => pool.install(|| dispatch(&cli)),
            Err(e) => Err(CliError::Runtime(Error::State(format!("thread pool: {e}")))),
        },
        None => dispatch(&cli),
    };
    match outcome {
        Ok(()) => 0,
        Err(CliError::Usage(m)) => {
            eprintln!("error: {m}");
            2
        }
        Err(CliError::Runtime(e)) => {
            eprintln!("error: {e}");
            1
        }
    }
}

fn dispatch(cli: &Cli) -> CliResult<()> {
    let config = match &cli.config {
        None => None,
        Some(p) => {
            let text = std::fs::read_to_string(p).map_err(|e| Error::io(p, e))?;
            Some(serde_json::from_str::<Value>(&text).map_err(|e| CliError::Usage(format!("config {}: {e}", p.display())))?)
        }
    };
    let cfg = config.as_ref();
    match &cli.command {
        Command::Synth(a) => cmd_synth(cli, &merge(a, cfg, "synth")?),
        Command::Segment(a) => cmd_segment(cli, &merge(a, cfg, "segment")?),
        Command::Train(a) => cmd_train(cli, &merge(a, cfg, "train")?),
        Command::Explain(a) => cmd_explain(cli, &merge(a, cfg, "explain")?),
        Command::Verify(a) => cmd_verify(cli, &merge(a, cfg, "verify")?),
    }
}

fn cmd_synth(cli: &Cli, a: &SynthArgs) -> CliResult<()> {
    let started = now_ms();
    let Some(duration) = a.duration else {
        return usage("synth requires --duration");
    };
    let seed = resolve_seed(a.seed)?.unwrap_or(0);
    let mut cfg = match a.preset.unwrap_or(Preset::Desk) {
        Preset::Desk => SynthConfig {
            duration,
            ..SynthConfig::desk(seed)
        },
        Preset::Wide => SynthConfig::wide(duration, seed),
    };
    if a.bins.is_some() || a.window.is_some() {
        let (bins, window) = (a.bins.unwrap_or(cfg.bins), a.window.unwrap_or(cfg.window));
        cfg = cfg.with_geometry(bins, window);
    }
    if let Some(n) = a.n_classes {
        cfg.n_classes = n;
    }
    if let Some(r) = a.burst_rate {
        cfg.burst_rate = r;
    }
    if let Some(p) = a.burst_power {
        cfg.burst_power = p;
    }
    config_check(cfg.validate())?;
    let out = synth_generate(&cfg)?;
    let mut outputs = Outputs::new(&cli.out, cli.resume);
    let (name, body) = match a.format.unwrap_or(FileFormat::Raw) {
        FileFormat::Raw => ("psd.bin", encode_raw(&out.matrix)),
        FileFormat::Csv => ("psd.csv", encode_csv(&out.matrix).into_bytes()),
    };
    let hash = sha256_hex(&body);
    outputs.write(name, &body)?;
    outputs.write("labels.csv", labels_csv(&out.labels).as_bytes())?;
    outputs.write("bursts.csv", bursts_csv(&out.bursts).as_bytes())?;
    println!(
        "wrote {} ({} bins x {} samples, {} tiles, {} bursts)",
        cli.out.join(name).display(),
        cfg.bins,
        cfg.duration,
        out.labels.len(),
        out.bursts.len()
    );
    outputs.finish("synth", Some(seed), &cfg, Some(hash), started)?;
    Ok(())
}

fn segmentation(window: Option<usize>, scaling: Option<Scaling>) -> CliResult<SegmentationConfig> {
    let cfg = SegmentationConfig {
        window: window.unwrap_or(16),
        scaling_mode: scaling.unwrap_or(Scaling::GlobalMinmax).into(),
    };
    config_check(cfg.validate())?;
    Ok(cfg)
}

fn require_data(data: &Option<PathBuf>, cmd: &str) -> CliResult<PathBuf> {
    match data {
        Some(p) => Ok(p.clone()),
        None => usage(format!("{cmd} requires --data")),
    }
}

fn load_segments(path: &Path, cfg: &SegmentationConfig) -> CliResult<(PsdMatrix, Vec<SpectrogramSegment>, String)> {
    let (m, hash) = load_psd(path)?;
    let segs = match prepare_segments(&m, cfg) {
        Err(Error::InvalidConfig(msg)) => return usage(msg),
        other => other?,
    };
    Ok((m, segs, hash))
}

fn cmd_segment(cli: &Cli, a: &SegmentArgs) -> CliResult<()> {
    let started = now_ms();
    let data = require_data(&a.data, "segment")?;
    let cfg = segmentation(a.window, a.scaling)?;
    let (m, segs, hash) = load_segments(&data, &cfg)?;
    let mut outputs = Outputs::new(&cli.out, cli.resume);
    let mut index = String::from("segment_id,freq_region,time_index\n");
    for s in &segs {
        let _ = writeln!(index, "{},{},{}", s.segment_id, s.freq_region, s.time_index);
    }
    outputs.write("segments/index.csv", index.as_bytes())?;
    for s in segs.iter().take(a.pgm_limit.unwrap_or(8)) {
        outputs.write(
            &format!("segments/seg_{}.pgm", s.segment_id),
            to_pgm(&s.pixels, cfg.window, cfg.window).as_bytes(),
        )?;
    }
    println!(
        "{} segments ({} regions x {} time steps)",
        segs.len(),
        region_count(m.bins(), cfg.window),
        segs.len() / region_count(m.bins(), cfg.window).max(1)
    );
    outputs.finish("segment", None, &cfg, Some(hash), started)?;
    Ok(())
}

pub fn train_config_from(a: &TrainArgs, seed: u64) -> CliResult<TrainConfig> {
    let base = TrainConfig::desk(seed);
    let reduction = match (a.pca_dims, a.evr_threshold) {
        (Some(_), Some(_)) => return usage("--pca-dims and --evr-threshold are mutually exclusive"),
        (Some(n), None) => Reduction::Fixed(n),
        (None, Some(t)) => Reduction::EvrThreshold(t),
        (None, None) => base.reduction,
    };
    if a.epochs == Some(0) {
        return usage("--epochs must be at least 1");
    }
    let epochs = a.epochs.unwrap_or(base.epochs_total);
    let cfg = TrainConfig {
        epochs_total: epochs,
        clustering_cycle: a.clustering_cycle.unwrap_or(base.clustering_cycle.min(epochs)),
        k: a.clusters.unwrap_or(base.k),
        reduction,
        whiten: a.whiten,
        lr: a.lr.unwrap_or(base.lr),
        momentum: a.momentum.unwrap_or(base.momentum),
        batch_size: a.batch_size.unwrap_or(base.batch_size),
        seed,
        reinit_head_on_cluster: !a.keep_head,
        kmeans_init: a.kmeans_init.map_or(base.kmeans_init, Into::into),
        kmeans_restarts: a.kmeans_restarts.unwrap_or(base.kmeans_restarts),
        arch: ArchConfig {
            channels: a.channels.clone().unwrap_or(base.arch.channels),
            feature_dim: a.feature_dim.unwrap_or(base.arch.feature_dim),
        },
    };
    config_check(cfg.validate())?;
    if cfg.kmeans_restarts == 0 {
        return usage("--kmeans-restarts must be at least 1");
    }
    Ok(cfg)
}

fn cmd_train(cli: &Cli, a: &TrainArgs) -> CliResult<()> {
    let started = now_ms();
    let data = require_data(&a.data, "train")?;
    let seed = resolve_seed(a.seed)?.unwrap_or(0);
    let cfg = train_config_from(a, seed)?;
    let seg_cfg = segmentation(a.window, a.scaling)?;
    let (_, segs, hash) = load_segments(&data, &seg_cfg)?;
    let mut outputs = Outputs::new(&cli.out, cli.resume);
    let result = match train(&segs, &cfg) {
        Err(Error::Diverged { epoch, loss, model }) => {
            let p = outputs.write("checkpoint/diverged_cnn.ckpt", &encode_checkpoint(&model))?;
            outputs.finish("train", Some(seed), &cfg, Some(hash), started)?;
            return Err(CliError::Runtime(Error::State(format!(
                "training diverged at epoch {epoch} (loss {loss}); diagnostic checkpoint at {}",
                p.display()
            ))));
        }
        Err(Error::InvalidConfig(m)) => return usage(m),
        other => other?,
    };
    let meta = CheckpointMeta {
        train: cfg.clone(),
        segmentation: seg_cfg,
        dataset_sha256: hash.clone(),
        segment_count: segs.len(),
    };
    outputs.write(&format!("checkpoint/{CNN_FILE}"), &encode_checkpoint(&result.model))?;
    outputs.write(&format!("checkpoint/{PCA_FILE}"), &encode_pca(&result.pca))?;
    outputs.write(&format!("checkpoint/{KMEANS_FILE}"), &encode_kmeans(&result.kmeans))?;
    outputs.write(
        &format!("checkpoint/{LABELS_FILE}"),
        cluster_labels_csv(&segs, &result.labels).as_bytes(),
    )?;
    outputs.write(&format!("checkpoint/{META_FILE}"), &serde_json::to_vec_pretty(&meta).map_err(Error::from)?)?;
    outputs.write("loss_history.csv", result.history.to_csv().as_bytes())?;
    println!(
        "trained {} epochs on {} segments: final loss {:.6}",
        cfg.epochs_total,
        segs.len(),
        result.history.final_loss().unwrap_or(f64::NAN)
    );
    outputs.finish("train", Some(seed), &meta, Some(hash), started)?;
    Ok(())
}

/// Cluster features of `segments` under a checkpoint: PCA-reduced features
/// and the K-means assignment of each row.
pub fn reduced_features(ck: &Checkpoint, segments: &[SpectrogramSegment]) -> crate::Result<(Matrix, Vec<usize>)> {
    let features = extract_features(&ck.model, segments)?;
    let reduced = ck.pca.transform(&features)?;
    let labels = reduced
        .rows()
        .map(|r| ck.kmeans.assign(r))
        .collect::<crate::Result<Vec<usize>>>()?;
    Ok((reduced, labels))
}

fn cmd_explain(cli: &Cli, a: &ExplainArgs) -> CliResult<()> {
    let started = now_ms();
    let data = require_data(&a.data, "explain")?;
    let ck_dir = a.checkpoint.clone().unwrap_or_else(|| cli.out.join("checkpoint"));
    if let Some(l) = a.lambda {
        if !(l >= 0.0 && l.is_finite()) {
            return usage(format!("--lambda must be a finite value >= 0, got {l}"));
        }
    }
    let ck = load_checkpoint(&ck_dir)?;
    let seed = resolve_seed(a.seed)?.unwrap_or(ck.meta.train.seed);
    let k = ck.kmeans.k;
    if let Some(t) = a.target {
        if t >= k {
            return usage(format!("--target {t} out of range for {k} clusters"));
        }
    }
    let (m, segs, hash) = load_segments(&data, &ck.meta.segmentation)?;
    if hash != ck.meta.dataset_sha256 {
        eprintln!("note: data differs from the training dataset");
    }
    let (reduced, labels) = reduced_features(&ck, &segs)?;
    let lambda = a.lambda.unwrap_or(DEFAULT_LAMBDA);
    let tree = build_tree(&reduced, &labels, k, lambda)?;
    let fid = fidelity(&tree, &reduced, &labels)?;

    let mut members: Vec<Vec<&SpectrogramSegment>> = vec![Vec::new(); k];
    for (s, &l) in segs.iter().zip(&labels) {
        members[l].push(s);
    }
    let attr_cap = a.attribution_cap.unwrap_or(DEFAULT_ATTRIBUTION_CAP);
    if attr_cap == 0 {
        return usage("--attribution-cap must be positive");
    }
    let attributions = members
        .iter()
        .enumerate()
        .map(|(c, ms)| cluster_attribution(&ck.model, ms, c, attr_cap, derive_seed(seed, 11, c as u64)))
        .collect::<crate::Result<Vec<_>>>()?;
    let regions = region_count(m.bins(), ck.meta.segmentation.window);
    let opts = ReportOptions {
        regions,
        spectrogram_cap: a.spectrogram_cap.unwrap_or(DEFAULT_SPECTROGRAM_CAP),
        seed,
    };
    if opts.spectrogram_cap == 0 {
        return usage("--spectrogram-cap must be positive");
    }
    let reports = cluster_reports(&tree, &segs, &labels, &attributions, &opts)?;
    let run_id = a.run_id.clone().unwrap_or_else(|| "run".into());
    if run_id.is_empty() || run_id.contains(['/', '\\']) || run_id == ".." {
        return usage(format!("invalid --run-id {run_id:?}"));
    }
    let (index, files) = render_report(&run_id, &tree, &reports, regions, fid.agreement)?;
    let base = format!("report/{run_id}");
    let mut outputs = Outputs::new(&cli.out, cli.resume);
    for (rel, body) in &files {
        outputs.write(&format!("{base}/{rel}"), body)?;
    }
    outputs.write(&format!("{base}/tree.txt"), tree.render_text().as_bytes())?;
    outputs.write(&format!("{base}/leaf_stats.csv"), tree.leaf_stats_csv().as_bytes())?;
    let per_cluster = a.samples_per_cluster.unwrap_or(1);
    for (c, ms) in members.iter().enumerate() {
        for s in subsample(ms, per_cluster, derive_seed(seed, 12, c as u64)) {
            let target = match a.target {
                Some(t) => t,
                None => predicted_cluster(&ck.model, s)?,
            };
            let map = guided_backprop(&ck.model, s, target)?;
            let stem = format!("{base}/samples/cluster_{c}_sample_{}", s.segment_id);
            outputs.write(&format!("{stem}.ppm"), render_ppm(&map).as_bytes())?;
            outputs.write(&format!("{stem}.csv"), map_csv(&map).as_bytes())?;
        }
    }
    print!("{}", tree.render_text());
    println!(
        "tree depth {} with lambda {lambda}; agreement with clusters {:.4}; report in {}",
        index.depth,
        fid.agreement,
        cli.out.join(&base).display()
    );
    #[derive(Serialize)]
    struct ExplainConfig<'a> {
        checkpoint: &'a Path,
        lambda: f64,
        run_id: &'a str,
        target: Option<usize>,
        attribution_cap: usize,
        spectrogram_cap: usize,
        samples_per_cluster: usize,
    }
    let snapshot = ExplainConfig {
        checkpoint: &ck_dir,
        lambda,
        run_id: &run_id,
        target: a.target,
        attribution_cap: attr_cap,
        spectrogram_cap: opts.spectrogram_cap,
        samples_per_cluster: per_cluster,
    };
    outputs.finish("explain", Some(seed), &snapshot, Some(hash), started)?;
    Ok(())
}

/// Small random batch and labels for a gradient check of `model`.
fn probe_batch(model: &CnnModel, n: usize, seed: u64) -> crate::Result<(Tensor, Vec<usize>)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let [c, h, w] = model.input_shape();
    let data = (0..n * c * h * w).map(|_| rng.gen::<f64>()).collect();
    let labels = (0..n).map(|_| rng.gen_range(0..model.classes())).collect();
    Ok((Tensor::new(vec![n, c, h, w], data)?, labels))
}

fn cmd_verify(cli: &Cli, a: &VerifyArgs) -> CliResult<()> {
    let started = now_ms();
    let seed = resolve_seed(a.seed)?.unwrap_or(0);
    let tol = a.tolerance.unwrap_or(1e-4);
    let eps = a.eps.unwrap_or(1e-3);
    if !(eps > 0.0) || !(tol > 0.0) {
        return usage("--eps and --tolerance must be positive");
    }
    if a.data.is_some() && a.checkpoint.is_none() {
        return usage("--data needs --checkpoint");
    }
    let ck = a.checkpoint.as_deref().map(load_checkpoint).transpose()?;
    let model = match &ck {
        Some(c) => c.model.clone(),
        None => CnnModel::compact(
            8,
            4,
            &ArchConfig {
                channels: vec![4, 8],
                feature_dim: 16,
            },
            seed,
        )?,
    };
    let (inputs, labels) = probe_batch(&model, 4, derive_seed(seed, 21, 0))?;
    let report = gradient_check(
        &model,
        &inputs,
        &labels,
        &GradCheckOptions {
            eps,
            seed,
            ..Default::default()
        },
    )?;
    let passed = report.passed(tol);
    let mut outputs = Outputs::new(&cli.out, cli.resume);
    let mut gc = String::from("check,probes,max_rel_err\n");
    for c in &report.checks {
        let name = c.layer.map_or_else(|| c.kind.clone(), |l| format!("layer{l}.{}", c.kind));
        let _ = writeln!(gc, "{name},{},{}", c.probes, c.max_rel_err);
    }
    outputs.write("verify/gradcheck.csv", gc.as_bytes())?;
    println!(
        "{} max_rel_err={:e}",
        if passed { "PASS" } else { "FAIL" },
        report.max_rel_err
    );

    let mut dataset_hash = None;
    if let (Some(ck), Some(data)) = (&ck, &a.data) {
        let (_, segs, hash) = load_segments(data, &ck.meta.segmentation)?;
        dataset_hash = Some(hash);
        let features = extract_features(&ck.model, &segs)?;
        let full_rank = features.nrows().min(features.ncols());
        let pca = pca_fit(&features, full_rank)?;
        outputs.write("verify/evr_cumsum.csv", evr_csv(&pca).as_bytes())?;
        let threshold = a.evr_threshold.unwrap_or(0.9);
        let n = match pca.select_dims(threshold) {
            Err(Error::InvalidConfig(m)) => return usage(m),
            other => other?,
        };
        let reduced = pca.truncate(n).transform(&features)?;
        let k = ck.kmeans.k;
        let km = |x: &Matrix| {
            kmeans_fit(
                x,
                &KmeansOptions {
                    init: KmeansInit::KmeansPp,
                    restarts: 10,
                    ..KmeansOptions::new(k, derive_seed(seed, 22, 0))
                },
            )
        };
        let (_, full_labels) = km(&features)?;
        let (_, reduced_labels) = km(&reduced)?;
        let score = nmi(&full_labels, &reduced_labels)?;
        println!("selected {n} of {full_rank} PCA dims for EVR >= {threshold}");
        println!("NMI full_vs_reduced={score:.6}");

        let cap = a.tsne_points.unwrap_or(500).min(crate::tsne::MAX_POINTS);
        let idx: Vec<usize> = subsample(&(0..segs.len()).collect::<Vec<_>>(), cap, derive_seed(seed, 23, 0))
            .into_iter()
            .copied()
            .collect();
        let tcfg = TsneConfig {
            perplexity: a.perplexity.unwrap_or(30.0),
            iterations: a.tsne_iterations.unwrap_or(1000),
            seed,
            ..Default::default()
        };
        let ids: Vec<usize> = idx.iter().map(|&i| segs[i].segment_id).collect();
        let clusters: Vec<usize> = idx.iter().map(|&i| full_labels[i]).collect();
        for (name, x) in [("full", &features), ("reduced", &reduced)] {
            let sub = x.select_rows(&idx);
            let emb = match tsne_embed(&sub, &tcfg) {
                Err(Error::InvalidConfig(m)) => return usage(m),
                other => other?,
            };
            outputs.write(
                &format!("verify/tsne_{name}.csv"),
                embedding_csv(&ids, &emb.embedding, &clusters).as_bytes(),
            )?;
        }
    }
    #[derive(Serialize)]
    struct VerifyConfig<'a> {
        checkpoint: Option<&'a Path>,
        eps: f64,
        tolerance: f64,
        args: &'a VerifyArgs,
    }
    outputs.finish(
        "verify",
        Some(seed),
        &VerifyConfig {
            checkpoint: a.checkpoint.as_deref(),
            eps,
            tolerance: tol,
            args: a,
        },
        dataset_hash,
        started,
    )?;
    if !passed {
        return Err(CliError::Runtime(Error::State(format!(
            "gradient check failed: max relative error {:e} >= {tol:e}",
            report.max_rel_err
        ))));
    }
    Ok(())
}
