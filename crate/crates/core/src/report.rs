//! Per-cluster visual explanations bundled with the shallow tree.
//!
//! Layout written by [`write_report`]:
//!
//! ```text
//! <dir>/cluster_<id>/{avg_spec.pgm, origin_hist.csv, avg_attr.ppm, path.json}
//! <dir>/tree.json
//! <dir>/index.json
//! ```

use std::fmt::Write as _;
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::{to_pgm, SpectrogramSegment};
use crate::error::{Error, Result};
use crate::gbp::{render_ppm, subsample, AttributionMap};
use crate::tree::{PathStep, ShallowTree};

pub const DEFAULT_SPECTROGRAM_CAP: usize = 4096;
pub const DEFAULT_ATTRIBUTION_CAP: usize = 256;

/// Element-wise running mean over a seeded subsample of at most `cap`
/// members. Returns the `W × W` image and the number of segments averaged.
pub fn average_spectrogram(
    members: &[&SpectrogramSegment],
    cap: usize,
    seed: u64,
) -> Result<(Vec<f64>, usize)> {
    let first = members
        .first()
        .ok_or_else(|| Error::InvalidConfig("average spectrogram of an empty cluster".into()))?;
    if cap == 0 {
        return Err(Error::InvalidConfig("subsample cap must be positive".into()));
    }
    let len = first.pixels.len();
    let picked = subsample(members, cap, seed);
    let mut mean = vec![0.0; len];
    for (i, s) in picked.iter().enumerate() {
        if s.pixels.len() != len {
            return Err(Error::Structure("segments of mixed window sizes".into()));
        }
        let n = (i + 1) as f64;
        for (m, &p) in mean.iter_mut().zip(&s.pixels) {
            *m += (p - *m) / n;
        }
    }
    Ok((mean, picked.len()))
}

/// Member counts per frequency region.
pub fn origin_histogram(members: &[&SpectrogramSegment], regions: usize) -> Result<Vec<usize>> {
    let mut h = vec![0; regions];
    for s in members {
        *h.get_mut(s.freq_region).ok_or_else(|| {
            Error::Structure(format!(
                "segment {} from region {} of {regions}",
                s.segment_id, s.freq_region
            ))
        })? += 1;
    }
    Ok(h)
}

#[derive(Clone, Debug, PartialEq)]
pub struct ClusterReport {
    pub cluster: usize,
    pub sample_count: usize,
    pub avg_spectrogram: Vec<f64>,
    /// Segments behind `avg_spectrogram`; below `sample_count` when subsampled.
    pub averaged_count: usize,
    pub origin_histogram: Vec<usize>,
    pub path: Vec<PathStep>,
    pub avg_attribution: AttributionMap,
}

impl ClusterReport {
    /// Feature indices tested on the root-to-leaf path, in order.
    pub fn key_features(&self) -> Vec<usize> {
        self.path.iter().map(|s| s.feature).collect()
    }
}

#[derive(Clone, Debug)]
pub struct ReportOptions {
    pub regions: usize,
    pub spectrogram_cap: usize,
    pub seed: u64,
}

/// Builds one report per cluster id `0..tree.k`. `attributions[c]` must be
/// the averaged map targeting cluster `c`.
pub fn cluster_reports(
    tree: &ShallowTree,
    segments: &[SpectrogramSegment],
    labels: &[usize],
    attributions: &[AttributionMap],
    opts: &ReportOptions,
) -> Result<Vec<ClusterReport>> {
    let k = tree.k;
    if labels.len() != segments.len() {
        return Err(Error::Structure(format!(
            "{} segments but {} labels",
            segments.len(),
            labels.len()
        )));
    }
    if attributions.len() != k {
        return Err(Error::Structure(format!(
            "{} attribution maps for {k} clusters",
            attributions.len()
        )));
    }
    if let Some(&bad) = labels.iter().find(|&&l| l >= k) {
        return Err(Error::Structure(format!("cluster id {bad} not in the tree (k = {k})")));
    }
    let mut members: Vec<Vec<&SpectrogramSegment>> = vec![Vec::new(); k];
    for (s, &l) in segments.iter().zip(labels) {
        members[l].push(s);
    }
    (0..k)
        .into_par_iter()
        .map(|c| {
            let attr = &attributions[c];
            if attr.target != c {
                return Err(Error::Structure(format!(
                    "attribution map {c} targets cluster {}",
                    attr.target
                )));
            }
            let path = tree
                .path_to(c)
                .ok_or_else(|| Error::Structure(format!("no tree leaf for cluster {c}")))?;
            let (avg, averaged) =
                average_spectrogram(&members[c], opts.spectrogram_cap, opts.seed ^ c as u64)?;
            if attr.values.len() != avg.len() {
                return Err(Error::Structure(format!(
                    "attribution map {c} does not match the segment shape"
                )));
            }
            Ok(ClusterReport {
                cluster: c,
                sample_count: members[c].len(),
                avg_spectrogram: avg,
                averaged_count: averaged,
                origin_histogram: origin_histogram(&members[c], opts.regions)?,
                path,
                avg_attribution: attr.clone(),
            })
        })
        .collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct IndexEntry {
    pub cluster: usize,
    pub dir: String,
    pub sample_count: usize,
    pub averaged_count: usize,
    pub subsampled: bool,
    pub key_features: Vec<usize>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ReportIndex {
    pub run_id: String,
    pub k: usize,
    pub window: usize,
    pub regions: usize,
    pub lambda: f64,
    pub depth: usize,
    pub tree_agreement: f64,
    pub clusters: Vec<IndexEntry>,
}

#[derive(Serialize)]
struct PathDoc<'a> {
    cluster: usize,
    key_features: Vec<usize>,
    steps: &'a [PathStep],
}

fn histogram_csv(h: &[usize]) -> String {
    let mut s = String::from("freq_region,count\n");
    for (r, c) in h.iter().enumerate() {
        let _ = writeln!(s, "{r},{c}");
    }
    s
}

/// Report files as `(relative path, contents)`, cluster directories first,
/// then `tree.json` and `index.json` last. Contents depend only on the
/// inputs.
pub fn render_report(
    run_id: &str,
    tree: &ShallowTree,
    reports: &[ClusterReport],
    regions: usize,
    tree_agreement: f64,
) -> Result<(ReportIndex, Vec<(String, Vec<u8>)>)> {
    let window = reports.first().map_or(0, |r| r.avg_attribution.window);
    let per_cluster: Vec<Vec<(String, Vec<u8>)>> = reports
        .par_iter()
        .map(|r| -> Result<_> {
            let d = format!("cluster_{}", r.cluster);
            let doc = PathDoc {
                cluster: r.cluster,
                key_features: r.key_features(),
                steps: &r.path,
            };
            Ok(vec![
                (format!("{d}/avg_spec.pgm"), to_pgm(&r.avg_spectrogram, window, window).into_bytes()),
                (format!("{d}/origin_hist.csv"), histogram_csv(&r.origin_histogram).into_bytes()),
                (format!("{d}/avg_attr.ppm"), render_ppm(&r.avg_attribution).into_bytes()),
                (format!("{d}/path.json"), serde_json::to_vec_pretty(&doc)?),
            ])
        })
        .collect::<Result<_>>()?;
    let mut files: Vec<(String, Vec<u8>)> = per_cluster.into_iter().flatten().collect();
    files.push(("tree.json".into(), tree.to_json()?.into_bytes()));
    let index = ReportIndex {
        run_id: run_id.to_string(),
        k: tree.k,
        window,
        regions,
        lambda: tree.lambda,
        depth: tree.depth,
        tree_agreement,
        clusters: reports
            .iter()
            .map(|r| IndexEntry {
                cluster: r.cluster,
                dir: format!("cluster_{}", r.cluster),
                sample_count: r.sample_count,
                averaged_count: r.averaged_count,
                subsampled: r.averaged_count < r.sample_count,
                key_features: r.key_features(),
            })
            .collect(),
    };
    files.push(("index.json".into(), serde_json::to_vec_pretty(&index)?));
    Ok((index, files))
}

/// Renders the report and writes it under `dir`.
pub fn write_report(
    dir: &Path,
    run_id: &str,
    tree: &ShallowTree,
    reports: &[ClusterReport],
    regions: usize,
    tree_agreement: f64,
) -> Result<ReportIndex> {
    let (index, files) = render_report(run_id, tree, reports, regions, tree_agreement)?;
    for (rel, body) in files {
        let p = dir.join(rel);
        if let Some(parent) = p.parent() {
            std::fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
        }
        std::fs::write(&p, body).map_err(|e| Error::io(&p, e))?;
    }
    Ok(index)
}
