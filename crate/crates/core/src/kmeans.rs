//! Lloyd's K-means with farthest-point repair of empty clusters, plus
//! normalized mutual information for comparing partitions.

use std::collections::HashMap;
use std::fmt::Write as _;

use rand::seq::index;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::binfmt::{Reader, Writer};
use crate::error::{Error, Result};
use crate::linalg::{sq_dist, Matrix};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum KmeansInit {
    /// `k` distinct training points chosen uniformly.
    #[default]
    RandomPoints,
    KmeansPp,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct KmeansOptions {
    pub k: usize,
    pub seed: u64,
    pub max_iter: usize,
    /// Stop once no centroid moves farther than this.
    pub tol: f64,
    pub init: KmeansInit,
    /// Independent restarts; the lowest-inertia run wins.
    pub restarts: usize,
}

impl KmeansOptions {
    pub fn new(k: usize, seed: u64) -> Self {
        KmeansOptions {
            k,
            seed,
            max_iter: 300,
            tol: 1e-6,
            init: KmeansInit::RandomPoints,
            restarts: 1,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct KmeansModel {
    pub k: usize,
    pub centroids: Matrix,
    pub inertia: f64,
    pub iterations_run: usize,
    pub seed: u64,
    /// Inertia after every assignment step of the winning run.
    pub inertia_history: Vec<f64>,
}

impl KmeansModel {
    /// Nearest centroid by squared Euclidean distance, lowest index on ties.
    pub fn assign(&self, x: &[f64]) -> Result<usize> {
        if x.len() != self.centroids.ncols() {
            return Err(Error::Structure(format!(
                "vector of length {} given to centroids of dimension {}",
                x.len(),
                self.centroids.ncols()
            )));
        }
        Ok(nearest(&self.centroids, x).0)
    }
}

fn nearest(centroids: &Matrix, x: &[f64]) -> (usize, f64) {
    let mut best = (0, f64::INFINITY);
    for (j, c) in centroids.rows().enumerate() {
        let d = sq_dist(x, c);
        if d < best.1 {
            best = (j, d);
        }
    }
    best
}

fn init_centroids(x: &Matrix, k: usize, init: KmeansInit, rng: &mut ChaCha8Rng) -> Matrix {
    let n = x.nrows();
    match init {
        KmeansInit::RandomPoints => x.select_rows(&index::sample(rng, n, k).into_vec()),
        KmeansInit::KmeansPp => {
            let mut chosen = vec![rng.gen_range(0..n)];
            let mut d2: Vec<f64> = x.rows().map(|r| sq_dist(r, x.row(chosen[0]))).collect();
            while chosen.len() < k {
                let total: f64 = d2.iter().sum();
                let next = if total > 0.0 {
                    let mut target = rng.gen::<f64>() * total;
                    let mut pick = n - 1;
                    for (i, &d) in d2.iter().enumerate() {
                        if d > 0.0 && target < d {
                            pick = i;
                            break;
                        }
                        target -= d;
                    }
                    // Rounding can leave `target` past the last positive weight.
                    if d2[pick] == 0.0 {
                        pick = d2.iter().rposition(|&d| d > 0.0).unwrap_or(pick);
                    }
                    pick
                } else {
                    let free: Vec<usize> = (0..n).filter(|i| !chosen.contains(i)).collect();
                    free[rng.gen_range(0..free.len())]
                };
                chosen.push(next);
                for (d, r) in d2.iter_mut().zip(x.rows()) {
                    *d = d.min(sq_dist(r, x.row(next)));
                }
            }
            x.select_rows(&chosen)
        }
    }
}

/// Assigns every point, then gives each empty cluster the point currently
/// farthest from its centroid (taken from a cluster with more than one
/// member). Returns labels and per-point squared distances.
fn assign_and_repair(x: &Matrix, centroids: &mut Matrix) -> (Vec<usize>, Vec<f64>) {
    let k = centroids.nrows();
    let cref = &*centroids;
    let (mut labels, mut dists): (Vec<usize>, Vec<f64>) = (0..x.nrows())
        .into_par_iter()
        .map(|i| nearest(cref, x.row(i)))
        .unzip();
    let mut counts = vec![0usize; k];
    for &l in &labels {
        counts[l] += 1;
    }
    for j in 0..k {
        if counts[j] > 0 {
            continue;
        }
        let far = (0..x.nrows())
            .filter(|&i| counts[labels[i]] > 1)
            .fold(None, |best: Option<usize>, i| match best {
                Some(b) if dists[b] >= dists[i] => Some(b),
                _ => Some(i),
            });
        let Some(i) = far else { break };
        counts[labels[i]] -= 1;
        counts[j] = 1;
        labels[i] = j;
        dists[i] = 0.0;
        centroids.row_mut(j).copy_from_slice(x.row(i));
    }
    (labels, dists)
}

fn means(x: &Matrix, labels: &[usize], k: usize, previous: &Matrix) -> Matrix {
    let d = x.ncols();
    let mut sums = Matrix::zeros(k, d);
    let mut counts = vec![0usize; k];
    for (row, &l) in x.rows().zip(labels) {
        counts[l] += 1;
        for (s, v) in sums.row_mut(l).iter_mut().zip(row) {
            *s += v;
        }
    }
    for j in 0..k {
        if counts[j] == 0 {
            sums.row_mut(j).copy_from_slice(previous.row(j));
        } else {
            let c = counts[j] as f64;
            sums.row_mut(j).iter_mut().for_each(|s| *s /= c);
        }
    }
    sums
}

fn lloyd(x: &Matrix, opts: &KmeansOptions, rng: &mut ChaCha8Rng) -> (KmeansModel, Vec<usize>) {
    let k = opts.k;
    let mut centroids = init_centroids(x, k, opts.init, rng);
    let mut history = Vec::new();
    let mut iterations_run = 0;
    for _ in 0..opts.max_iter {
        let (labels, dists) = assign_and_repair(x, &mut centroids);
        history.push(dists.iter().sum());
        let updated = means(x, &labels, k, &centroids);
        let shift = centroids
            .rows()
            .zip(updated.rows())
            .map(|(a, b)| sq_dist(a, b).sqrt())
            .fold(0.0, f64::max);
        centroids = updated;
        iterations_run += 1;
        if shift < opts.tol {
            break;
        }
    }
    let (labels, dists) = assign_and_repair(x, &mut centroids);
    let inertia: f64 = dists.iter().sum();
    history.push(inertia);
    (
        KmeansModel {
            k,
            centroids,
            inertia,
            iterations_run,
            seed: opts.seed,
            inertia_history: history,
        },
        labels,
    )
}

/// Clusters the rows of `x` into `opts.k` groups.
pub fn kmeans_fit(x: &Matrix, opts: &KmeansOptions) -> Result<(KmeansModel, Vec<usize>)> {
    let n = x.nrows();
    if opts.k == 0 {
        return Err(Error::InvalidConfig("k must be positive".into()));
    }
    if n < opts.k {
        return Err(Error::InvalidConfig(format!(
            "K-means needs at least k = {} points, got {n}",
            opts.k
        )));
    }
    if let Some(v) = x.data().iter().find(|v| !v.is_finite()) {
        return Err(Error::NonFinite(format!("K-means input contains {v}")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let mut best: Option<(KmeansModel, Vec<usize>)> = None;
    for _ in 0..opts.restarts.max(1) {
        let run = lloyd(x, opts, &mut rng);
        if best.as_ref().map_or(true, |(b, _)| run.0.inertia < b.inertia) {
            best = Some(run);
        }
    }
    Ok(best.expect("at least one restart"))
}

/// Normalized mutual information with arithmetic-mean normalization.
/// Two constant labelings count as identical (1.0).
pub fn nmi(a: &[usize], b: &[usize]) -> Result<f64> {
    if a.is_empty() {
        return Err(Error::InvalidConfig("NMI of empty labelings".into()));
    }
    if a.len() != b.len() {
        return Err(Error::Structure(format!(
            "labelings have lengths {} and {}",
            a.len(),
            b.len()
        )));
    }
    let n = a.len() as f64;
    let mut joint: HashMap<(usize, usize), usize> = HashMap::new();
    let mut ca: HashMap<usize, usize> = HashMap::new();
    let mut cb: HashMap<usize, usize> = HashMap::new();
    for (&x, &y) in a.iter().zip(b) {
        *joint.entry((x, y)).or_default() += 1;
        *ca.entry(x).or_default() += 1;
        *cb.entry(y).or_default() += 1;
    }
    let entropy = |c: &HashMap<usize, usize>| {
        let mut counts: Vec<usize> = c.values().copied().collect();
        counts.sort_unstable();
        -counts
            .iter()
            .map(|&v| {
                let p = v as f64 / n;
                p * p.ln()
            })
            .sum::<f64>()
    };
    let (ha, hb) = (entropy(&ca), entropy(&cb));
    if ha == 0.0 && hb == 0.0 {
        return Ok(1.0);
    }
    let mut cells: Vec<(&(usize, usize), &usize)> = joint.iter().collect();
    cells.sort_unstable();
    let mi: f64 = cells
        .into_iter()
        .map(|(&(x, y), &c)| {
            let c = c as f64;
            c / n * (n * c / (ca[&x] as f64 * cb[&y] as f64)).ln()
        })
        .sum();
    Ok((mi / ((ha + hb) / 2.0)).clamp(0.0, 1.0))
}

pub fn centroids_csv(model: &KmeansModel) -> String {
    let mut s = String::from("cluster");
    for j in 0..model.centroids.ncols() {
        let _ = write!(s, ",c{j}");
    }
    s.push('\n');
    for (i, row) in model.centroids.rows().enumerate() {
        let _ = write!(s, "{i}");
        for v in row {
            let _ = write!(s, ",{v}");
        }
        s.push('\n');
    }
    s
}

const KMEANS_MAGIC: &[u8; 8] = b"SXAIKMN\0";
const KMEANS_VERSION: u32 = 1;

pub fn encode_kmeans(model: &KmeansModel) -> Vec<u8> {
    let mut w = Writer::new(KMEANS_MAGIC, KMEANS_VERSION);
    w.u32(model.k as u32);
    w.u32(model.centroids.ncols() as u32);
    w.u64(model.seed);
    w.u64(model.iterations_run as u64);
    w.f64(model.inertia);
    w.f64s(model.centroids.data());
    w.f64s(&model.inertia_history);
    w.finish()
}

pub fn decode_kmeans(data: &[u8]) -> Result<KmeansModel> {
    let mut r = Reader::open(data, KMEANS_MAGIC, KMEANS_VERSION)?;
    let k = r.u32()? as usize;
    let d = r.u32()? as usize;
    if k == 0 || k > 1 << 16 || d > 1 << 16 {
        return Err(Error::Structure(format!("{k} centroids of dimension {d}")));
    }
    let seed = r.u64()?;
    let iterations_run = r.u64()? as usize;
    let inertia = r.f64()?;
    let centroids = Matrix::new(k, d, r.f64s(k * d)?)?;
    let at = r.offset();
    let hist_len = r.u64()? as usize;
    if hist_len > iterations_run.saturating_add(1) {
        return Err(Error::Structure(format!(
            "history of {hist_len} entries at offset {at} exceeds {iterations_run} iterations"
        )));
    }
    let mut raw = Vec::with_capacity(hist_len);
    for _ in 0..hist_len {
        raw.push(r.f64()?);
    }
    r.finish()?;
    if inertia < 0.0 {
        return Err(Error::Structure("negative inertia".into()));
    }
    Ok(KmeansModel {
        k,
        centroids,
        inertia,
        iterations_run,
        seed,
        inertia_history: raw,
    })
}
