//! Exact t-SNE for visual checks of reduced feature spaces.

use std::fmt::Write as _;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{sq_dist, Matrix};

pub const MAX_POINTS: usize = 5000;
const BISECTION_STEPS: usize = 50;
const ENTROPY_TOL: f64 = 1e-5;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TsneConfig {
    pub perplexity: f64,
    pub iterations: usize,
    pub learning_rate: f64,
    pub early_exaggeration: f64,
    /// Iterations run with exaggerated affinities and the low momentum.
    pub exaggeration_iters: usize,
    pub seed: u64,
}

impl Default for TsneConfig {
    fn default() -> Self {
        TsneConfig {
            perplexity: 30.0,
            iterations: 1000,
            learning_rate: 200.0,
            early_exaggeration: 12.0,
            exaggeration_iters: 250,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug)]
pub struct TsneResult {
    /// `N × 2`.
    pub embedding: Matrix,
    /// `(iteration, KL(P || Q))`, sampled every 50 iterations and at the end.
    pub kl_history: Vec<(usize, f64)>,
}

impl TsneResult {
    pub fn kl_at(&self, iteration: usize) -> Option<f64> {
        self.kl_history
            .iter()
            .find(|(i, _)| *i == iteration)
            .map(|&(_, kl)| kl)
    }
}

/// Conditional affinities of point `i` whose perplexity matches the target.
fn conditional_row(dists: &[f64], i: usize, log_perp: f64) -> Vec<f64> {
    let dmin = dists
        .iter()
        .enumerate()
        .filter(|&(j, _)| j != i)
        .map(|(_, &d)| d)
        .fold(f64::INFINITY, f64::min);
    let mut beta = 1.0;
    let (mut lo, mut hi) = (f64::NEG_INFINITY, f64::INFINITY);
    let mut p = vec![0.0; dists.len()];
    for _ in 0..BISECTION_STEPS {
        let mut sum = 0.0;
        let mut weighted = 0.0;
        for (j, (&d, pj)) in dists.iter().zip(p.iter_mut()).enumerate() {
            if j == i {
                *pj = 0.0;
                continue;
            }
            let e = (-(d - dmin) * beta).exp();
            *pj = e;
            sum += e;
            weighted += (d - dmin) * e;
        }
        // H = log(sum) + beta * E[d - dmin]
        let entropy = sum.ln() + beta * weighted / sum;
        for pj in p.iter_mut() {
            *pj /= sum;
        }
        let diff = entropy - log_perp;
        if diff.abs() < ENTROPY_TOL {
            break;
        }
        if diff > 0.0 {
            lo = beta;
            beta = if hi.is_finite() { (beta + hi) / 2.0 } else { beta * 2.0 };
        } else {
            hi = beta;
            beta = if lo.is_finite() { (beta + lo) / 2.0 } else { beta / 2.0 };
        }
    }
    p
}

/// Symmetrized joint affinities `P` (row-major `N × N`).
fn joint_affinities(x: &Matrix, perplexity: f64) -> Vec<f64> {
    let n = x.nrows();
    let log_perp = perplexity.ln();
    let rows: Vec<Vec<f64>> = (0..n)
        .into_par_iter()
        .map(|i| {
            let d: Vec<f64> = (0..n).map(|j| sq_dist(x.row(i), x.row(j))).collect();
            conditional_row(&d, i, log_perp)
        })
        .collect();
    let mut p = vec![0.0; n * n];
    let denom = 2.0 * n as f64;
    for i in 0..n {
        for j in 0..n {
            if i != j {
                p[i * n + j] = ((rows[i][j] + rows[j][i]) / denom).max(1e-12);
            }
        }
    }
    p
}

/// Student-t kernel values `1 / (1 + |yi − yj|²)` and their total.
fn kernel(y: &[[f64; 2]]) -> (Vec<f64>, f64) {
    let n = y.len();
    let num: Vec<f64> = (0..n)
        .into_par_iter()
        .flat_map_iter(|i| {
            (0..n).map(move |j| {
                if i == j {
                    0.0
                } else {
                    let dx = y[i][0] - y[j][0];
                    let dy = y[i][1] - y[j][1];
                    1.0 / (1.0 + dx * dx + dy * dy)
                }
            })
        })
        .collect();
    let row_sums: Vec<f64> = num.chunks(n).map(|r| r.iter().sum()).collect();
    let total = row_sums.iter().sum();
    (num, total)
}

fn kl_divergence(p: &[f64], num: &[f64], total: f64) -> f64 {
    p.iter()
        .zip(num)
        .filter(|(&pij, _)| pij > 0.0)
        .map(|(&pij, &nij)| {
            let q = (nij / total).max(1e-12);
            pij * (pij / q).ln()
        })
        .sum()
}

/// Embeds the rows of `x` in two dimensions.
pub fn tsne_embed(x: &Matrix, cfg: &TsneConfig) -> Result<TsneResult> {
    let n = x.nrows();
    if n < 3 {
        return Err(Error::InvalidConfig(format!("t-SNE needs at least 3 points, got {n}")));
    }
    if n > MAX_POINTS {
        return Err(Error::InvalidConfig(format!(
            "exact t-SNE is capped at {MAX_POINTS} points, got {n}"
        )));
    }
    if !(cfg.perplexity > 0.0 && cfg.perplexity < n as f64) {
        return Err(Error::InvalidConfig(format!(
            "perplexity {} must lie in (0, {n})",
            cfg.perplexity
        )));
    }
    if cfg.iterations == 0 {
        return Err(Error::InvalidConfig("iterations must be positive".into()));
    }
    if x.data().iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("t-SNE input".into()));
    }
    if x.rows().all(|r| r == x.row(0)) {
        return Err(Error::InvalidConfig("all points are identical".into()));
    }

    let p = joint_affinities(x, cfg.perplexity);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let init = Normal::new(0.0, 1e-4).expect("valid");
    let mut y: Vec<[f64; 2]> = (0..n)
        .map(|_| [init.sample(&mut rng), init.sample(&mut rng)])
        .collect();
    let mut velocity = vec![[0.0f64; 2]; n];
    let mut gains = vec![[1.0f64; 2]; n];
    let mut kl_history = Vec::new();

    for it in 0..cfg.iterations {
        let early = it < cfg.exaggeration_iters;
        let exaggeration = if early { cfg.early_exaggeration } else { 1.0 };
        let momentum = if early { 0.5 } else { 0.8 };
        let (num, total) = kernel(&y);
        let grad: Vec<[f64; 2]> = (0..n)
            .into_par_iter()
            .map(|i| {
                let mut g = [0.0; 2];
                for j in 0..n {
                    if i == j {
                        continue;
                    }
                    let nij = num[i * n + j];
                    let mult = (exaggeration * p[i * n + j] - nij / total) * nij;
                    g[0] += 4.0 * mult * (y[i][0] - y[j][0]);
                    g[1] += 4.0 * mult * (y[i][1] - y[j][1]);
                }
                g
            })
            .collect();
        for i in 0..n {
            for d in 0..2 {
                let same_sign = (grad[i][d] > 0.0) == (velocity[i][d] > 0.0);
                gains[i][d] = if same_sign {
                    gains[i][d] * 0.8
                } else {
                    gains[i][d] + 0.2
                }
                .max(0.01);
                velocity[i][d] =
                    momentum * velocity[i][d] - cfg.learning_rate * gains[i][d] * grad[i][d];
                y[i][d] += velocity[i][d];
            }
        }
        for d in 0..2 {
            let mean = y.iter().map(|p| p[d]).sum::<f64>() / n as f64;
            y.iter_mut().for_each(|p| p[d] -= mean);
        }
        let done = it + 1;
        if done % 50 == 0 || done == cfg.iterations {
            let (num, total) = kernel(&y);
            kl_history.push((done, kl_divergence(&p, &num, total)));
        }
    }
    let embedding = Matrix::new(n, 2, y.iter().flat_map(|p| p.iter().copied()).collect())?;
    Ok(TsneResult {
        embedding,
        kl_history,
    })
}

/// `id,x,y,cluster` rows.
pub fn embedding_csv(ids: &[usize], embedding: &Matrix, clusters: &[usize]) -> String {
    let mut s = String::from("id,x,y,cluster\n");
    for ((id, row), c) in ids.iter().zip(embedding.rows()).zip(clusters) {
        let _ = writeln!(s, "{id},{},{},{c}", row[0], row[1]);
    }
    s
}
