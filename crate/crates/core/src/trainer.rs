//! Alternating feature learning and clustering: every `C` epochs the whole
//! dataset is embedded, PCA-reduced and clustered, and the cluster ids
//! become the classification targets for the following epochs.

use std::fmt::Write as _;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::data::SpectrogramSegment;
use crate::error::{Error, Result};
use crate::kmeans::{kmeans_fit, nmi, KmeansInit, KmeansModel, KmeansOptions};
use crate::linalg::Matrix;
use crate::nn::{loss_and_gradients, reinit_head, ArchConfig, CnnModel, Sgd, Tensor};
use crate::pca::{pca_fit_reduced, PcaModel, Reduction};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub epochs_total: usize,
    /// Epochs between clustering events (`C`).
    pub clustering_cycle: usize,
    pub k: usize,
    pub reduction: Reduction,
    pub whiten: bool,
    pub lr: f64,
    pub momentum: f64,
    pub batch_size: usize,
    pub seed: u64,
    pub reinit_head_on_cluster: bool,
    pub kmeans_init: KmeansInit,
    pub kmeans_restarts: usize,
    pub arch: ArchConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs_total: 100,
            clustering_cycle: 15,
            k: 24,
            reduction: Reduction::Fixed(20),
            whiten: false,
            lr: 0.01,
            momentum: 0.9,
            batch_size: 64,
            seed: 0,
            reinit_head_on_cluster: true,
            kmeans_init: KmeansInit::RandomPoints,
            kmeans_restarts: 1,
            arch: ArchConfig::default(),
        }
    }
}

impl TrainConfig {
    /// Single-core scale: k = 8, C = 5, 60 epochs, 8 PCA dimensions.
    ///
    /// The step size is lower than the default so that within a cycle the
    /// loss only falls; at 0.01 the fresh head overshoots and the loss can
    /// rise between clustering epochs.
    pub fn desk(seed: u64) -> Self {
        TrainConfig {
            epochs_total: 60,
            clustering_cycle: 5,
            k: 8,
            reduction: Reduction::Fixed(8),
            lr: 0.002,
            seed,
            ..TrainConfig::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidConfig(m));
        if self.clustering_cycle == 0 {
            return bad("clustering cycle must be at least 1".into());
        }
        if self.epochs_total < self.clustering_cycle {
            return bad(format!(
                "epochs ({}) must be at least the clustering cycle ({})",
                self.epochs_total, self.clustering_cycle
            ));
        }
        if self.k == 0 || self.batch_size == 0 {
            return bad("k and batch size must be positive".into());
        }
        if !(self.lr >= 0.0 && self.lr.is_finite()) || !(0.0..1.0).contains(&self.momentum) {
            return bad(format!(
                "lr must be >= 0 and momentum in [0, 1), got {} / {}",
                self.lr, self.momentum
            ));
        }
        match self.reduction {
            Reduction::Fixed(0) => bad("pca dims must be positive".into()),
            Reduction::EvrThreshold(t) if !(t > 0.0 && t <= 1.0) => {
                bad(format!("EVR threshold must lie in (0, 1], got {t}"))
            }
            _ => Ok(()),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    /// Mean per-sample cross-entropy over the epoch's mini-batches.
    pub loss: f64,
    pub is_clustering_epoch: bool,
    /// NMI between the new assignment and the one it replaced.
    pub nmi_vs_previous: Option<f64>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossHistory {
    pub records: Vec<EpochRecord>,
}

impl LossHistory {
    pub fn losses(&self) -> Vec<f64> {
        self.records.iter().map(|r| r.loss).collect()
    }

    pub fn final_loss(&self) -> Option<f64> {
        self.records.last().map(|r| r.loss)
    }

    /// Epochs whose loss exceeds the previous epoch's.
    pub fn spike_epochs(&self) -> Vec<usize> {
        self.records
            .windows(2)
            .filter(|w| w[1].loss > w[0].loss)
            .map(|w| w[1].epoch)
            .collect()
    }

    /// `loss[e] − loss[e−1]` for every clustering epoch after the first.
    pub fn clustering_jumps(&self) -> Vec<(usize, f64)> {
        self.records
            .windows(2)
            .filter(|w| w[1].is_clustering_epoch)
            .map(|w| (w[1].epoch, w[1].loss - w[0].loss))
            .collect()
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from("epoch,loss,is_clustering_epoch,nmi_vs_previous\n");
        for r in &self.records {
            let nmi = r.nmi_vs_previous.map(|v| v.to_string()).unwrap_or_default();
            let _ = writeln!(s, "{},{},{},{}", r.epoch, r.loss, r.is_clustering_epoch, nmi);
        }
        s
    }
}

#[derive(Clone, Debug)]
pub struct TrainOutput {
    pub model: CnnModel,
    /// PCA, K-means and labels fitted to the final model's features after
    /// the last epoch.
    pub pca: PcaModel,
    pub kmeans: KmeansModel,
    pub labels: Vec<usize>,
    pub history: LossHistory,
}

/// Hooks into the training loop, mainly for invariant checks.
pub trait TrainObserver {
    /// Called after the clustering step of a clustering epoch.
    fn clustered(&mut self, _epoch: usize, _before: &CnnModel, _after: &CnnModel, _labels: &[usize]) {}
    fn epoch_end(&mut self, _record: &EpochRecord, _labels: &[usize]) {}
}

struct NoObserver;
impl TrainObserver for NoObserver {}

/// Mixes a run seed with a purpose tag and an epoch into an independent seed.
pub fn derive_seed(seed: u64, tag: u64, epoch: u64) -> u64 {
    let mut z = seed
        ^ tag.wrapping_mul(0x9E37_79B9_7F4A_7C15)
        ^ epoch.wrapping_mul(0xD1B5_4A32_D192_ED03);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

const TAG_SHUFFLE: u64 = 1;
const TAG_KMEANS: u64 = 2;
const TAG_HEAD: u64 = 3;

/// Feature-tap outputs of every segment (no recording), one row each.
pub fn extract_features(model: &CnnModel, segments: &[SpectrogramSegment]) -> Result<Matrix> {
    let rows: Vec<Vec<f64>> = segments
        .par_iter()
        .map(|s| model.features_of(&s.pixels))
        .collect::<Result<_>>()?;
    if rows.is_empty() {
        return Ok(Matrix::zeros(0, model.feature_dim()));
    }
    Matrix::from_rows(&rows)
}

/// Stacks segments into a `B × 1 × W × W` tensor.
pub fn batch_tensor(segments: &[&SpectrogramSegment]) -> Result<Tensor> {
    let w = segments.first().map_or(0, |s| s.window);
    let mut data = Vec::with_capacity(segments.len() * w * w);
    for s in segments {
        if s.window != w {
            return Err(Error::Structure("segments of mixed window sizes".into()));
        }
        data.extend_from_slice(&s.pixels);
    }
    Tensor::new(vec![segments.len(), 1, w, w], data)
}

/// Features → PCA → K-means, producing fresh pseudo-labels.
pub fn cluster_features(
    model: &CnnModel,
    segments: &[SpectrogramSegment],
    cfg: &TrainConfig,
    kmeans_seed: u64,
) -> Result<(PcaModel, KmeansModel, Vec<usize>)> {
    let features = extract_features(model, segments)?;
    let mut pca = pca_fit_reduced(&features, cfg.reduction)?;
    pca.whiten = cfg.whiten;
    let reduced = pca.transform(&features)?;
    let opts = KmeansOptions {
        init: cfg.kmeans_init,
        restarts: cfg.kmeans_restarts,
        ..KmeansOptions::new(cfg.k, kmeans_seed)
    };
    let (km, labels) = kmeans_fit(&reduced, &opts)?;
    Ok((pca, km, labels))
}

/// The clustering [`train`] returns: features of the trained `model` with
/// the K-means seed of epoch `epochs_total`. Calling it again on the same
/// model and data reproduces the checkpoint's labels.
pub fn final_clustering(
    model: &CnnModel,
    segments: &[SpectrogramSegment],
    cfg: &TrainConfig,
) -> Result<(PcaModel, KmeansModel, Vec<usize>)> {
    cluster_features(
        model,
        segments,
        cfg,
        derive_seed(cfg.seed, TAG_KMEANS, cfg.epochs_total as u64),
    )
}

pub fn train(segments: &[SpectrogramSegment], cfg: &TrainConfig) -> Result<TrainOutput> {
    train_observed(segments, cfg, &mut NoObserver)
}

pub fn train_observed(
    segments: &[SpectrogramSegment],
    cfg: &TrainConfig,
    observer: &mut dyn TrainObserver,
) -> Result<TrainOutput> {
    cfg.validate()?;
    let n = segments.len();
    if n < cfg.k {
        return Err(Error::InvalidConfig(format!(
            "dataset of {n} segments is smaller than k = {}",
            cfg.k
        )));
    }
    let window = segments[0].window;
    let mut model = CnnModel::compact(window, cfg.k, &cfg.arch, cfg.seed)?;
    let mut opt = Sgd::new(&model, cfg.lr, cfg.momentum);
    let head = model.head_index();

    let mut labels: Vec<usize> = Vec::new();
    let mut history = LossHistory::default();

    for epoch in 0..cfg.epochs_total {
        let is_clustering = epoch % cfg.clustering_cycle == 0;
        let mut nmi_prev = None;
        if is_clustering {
            let before = model.clone();
            let (_, _, new_labels) =
                cluster_features(&model, segments, cfg, derive_seed(cfg.seed, TAG_KMEANS, epoch as u64))?;
            if !labels.is_empty() {
                nmi_prev = Some(nmi(&labels, &new_labels)?);
            }
            labels = new_labels;
            if cfg.reinit_head_on_cluster {
                reinit_head(&mut model, derive_seed(cfg.seed, TAG_HEAD, epoch as u64));
                opt.reset_layer(head);
            }
            observer.clustered(epoch, &before, &model, &labels);
        }

        let mut order: Vec<usize> = (0..n).collect();
        order.shuffle(&mut ChaCha8Rng::seed_from_u64(derive_seed(
            cfg.seed,
            TAG_SHUFFLE,
            epoch as u64,
        )));
        let mut loss_sum = 0.0;
        for chunk in order.chunks(cfg.batch_size) {
            let batch: Vec<&SpectrogramSegment> = chunk.iter().map(|&i| &segments[i]).collect();
            let targets: Vec<usize> = chunk.iter().map(|&i| labels[i]).collect();
            let inputs = batch_tensor(&batch)?;
            let (loss, grads) = match loss_and_gradients(&model, &inputs, &targets) {
                Ok(v) => v,
                Err(Error::NonFinite(_)) => {
                    return Err(Error::Diverged {
                        epoch,
                        loss: f64::NAN,
                        model: Box::new(model),
                    })
                }
                Err(e) => return Err(e),
            };
            if !loss.is_finite() {
                return Err(Error::Diverged {
                    epoch,
                    loss,
                    model: Box::new(model),
                });
            }
            loss_sum += loss * chunk.len() as f64;
            opt.step(&mut model, &grads)?;
        }
        let record = EpochRecord {
            epoch,
            loss: loss_sum / n as f64,
            is_clustering_epoch: is_clustering,
            nmi_vs_previous: nmi_prev,
        };
        observer.epoch_end(&record, &labels);
        history.records.push(record);
    }

    let (pca, kmeans, labels) = final_clustering(&model, segments, cfg)?;
    Ok(TrainOutput {
        model,
        pca,
        kmeans,
        labels,
        history,
    })
}

pub fn label_digest(labels: &[usize]) -> String {
    let mut h = Sha256::new();
    for &l in labels {
        h.update((l as u64).to_le_bytes());
    }
    hex::encode(h.finalize())
}

#[derive(Clone, Debug)]
pub struct CycleRun {
    pub cycle: usize,
    pub history: LossHistory,
}

#[derive(Clone, Debug, Default)]
pub struct CycleExperiment {
    pub runs: Vec<CycleRun>,
}

impl CycleExperiment {
    /// `cycle,epoch,loss,is_clustering_epoch` rows for every run.
    pub fn to_csv(&self) -> String {
        let mut s = String::from("cycle,epoch,loss,is_clustering_epoch\n");
        for run in &self.runs {
            for r in &run.history.records {
                let _ = writeln!(s, "{},{},{},{}", run.cycle, r.epoch, r.loss, r.is_clustering_epoch);
            }
        }
        s
    }
}

/// One training run per clustering cycle, all sharing seed and data order.
pub fn run_cycle_experiment(
    segments: &[SpectrogramSegment],
    base: &TrainConfig,
    cycles: &[usize],
) -> Result<CycleExperiment> {
    let mut out = CycleExperiment::default();
    for &cycle in cycles {
        let cfg = TrainConfig {
            clustering_cycle: cycle,
            ..base.clone()
        };
        out.runs.push(CycleRun {
            cycle,
            history: train(segments, &cfg)?.history,
        });
    }
    Ok(out)
}
