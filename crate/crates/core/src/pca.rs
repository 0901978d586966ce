//! Principal component analysis by Jacobi eigendecomposition of the sample
//! covariance, with explained-variance-ratio bookkeeping.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::binfmt::{Reader, Writer};
use crate::error::{Error, Result};
use crate::linalg::Matrix;

/// Off-diagonal Frobenius norm (relative to the full norm) at which the
/// Jacobi sweeps stop.
const JACOBI_TOL: f64 = 1e-10;
const JACOBI_MAX_SWEEPS: usize = 100;

#[derive(Clone, Debug, PartialEq)]
pub struct PcaModel {
    pub mean: Vec<f64>,
    /// `n × D`, orthonormal rows in descending-eigenvalue order.
    pub components: Matrix,
    pub eigenvalues: Vec<f64>,
    /// `eigenvalue / total_variance` per kept component.
    pub evr: Vec<f64>,
    /// Sum of all `D` covariance eigenvalues (the covariance trace).
    pub total_variance: f64,
    pub whiten: bool,
}

/// How many components to keep.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Reduction {
    Fixed(usize),
    /// Smallest `n` whose cumulative EVR reaches the threshold.
    EvrThreshold(f64),
}

/// Eigenvalues and eigenvectors (as columns of the returned row-major
/// matrix) of a symmetric matrix, by cyclic Jacobi rotations.
pub fn symmetric_eigen(a: &Matrix) -> (Vec<f64>, Matrix) {
    let n = a.nrows();
    let mut m = a.clone();
    let mut v = Matrix::zeros(n, n);
    for i in 0..n {
        v.set(i, i, 1.0);
    }
    let total: f64 = m.data().iter().map(|x| x * x).sum::<f64>().sqrt();
    for _ in 0..JACOBI_MAX_SWEEPS {
        let off: f64 = (0..n)
            .flat_map(|i| (0..n).filter(move |&j| j != i).map(move |j| (i, j)))
            .map(|(i, j)| m.get(i, j).powi(2))
            .sum::<f64>()
            .sqrt();
        if off <= JACOBI_TOL * total || off == 0.0 {
            break;
        }
        for p in 0..n {
            for q in p + 1..n {
                let apq = m.get(p, q);
                if apq == 0.0 {
                    continue;
                }
                let theta = (m.get(q, q) - m.get(p, p)) / (2.0 * apq);
                let t = theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt());
                let c = 1.0 / (t * t + 1.0).sqrt();
                let s = t * c;
                for k in 0..n {
                    let akp = m.get(k, p);
                    let akq = m.get(k, q);
                    m.set(k, p, c * akp - s * akq);
                    m.set(k, q, s * akp + c * akq);
                }
                for k in 0..n {
                    let apk = m.get(p, k);
                    let aqk = m.get(q, k);
                    m.set(p, k, c * apk - s * aqk);
                    m.set(q, k, s * apk + c * aqk);
                }
                for k in 0..n {
                    let vkp = v.get(k, p);
                    let vkq = v.get(k, q);
                    v.set(k, p, c * vkp - s * vkq);
                    v.set(k, q, s * vkp + c * vkq);
                }
            }
        }
    }
    ((0..n).map(|i| m.get(i, i)).collect(), v)
}

/// Sample covariance with divisor `N − 1`, and the column means.
pub fn covariance(x: &Matrix) -> (Vec<f64>, Matrix) {
    let (n, d) = (x.nrows(), x.ncols());
    let mut mean = vec![0.0; d];
    for row in x.rows() {
        for (m, v) in mean.iter_mut().zip(row) {
            *m += v;
        }
    }
    for m in &mut mean {
        *m /= n as f64;
    }
    let mut cov = Matrix::zeros(d, d);
    let mut centered = vec![0.0; d];
    for row in x.rows() {
        for ((c, v), m) in centered.iter_mut().zip(row).zip(&mean) {
            *c = v - m;
        }
        for i in 0..d {
            let ci = centered[i];
            let out = cov.row_mut(i);
            for j in i..d {
                out[j] += ci * centered[j];
            }
        }
    }
    let denom = (n - 1) as f64;
    for i in 0..d {
        for j in i..d {
            let v = cov.get(i, j) / denom;
            cov.set(i, j, v);
            cov.set(j, i, v);
        }
    }
    (mean, cov)
}

/// Fits `n_components` principal axes of `x` (`N × D`).
pub fn pca_fit(x: &Matrix, n_components: usize) -> Result<PcaModel> {
    let (n, d) = (x.nrows(), x.ncols());
    if n < 2 {
        return Err(Error::InvalidConfig(format!("PCA needs at least 2 samples, got {n}")));
    }
    if n_components == 0 || n_components > n.min(d) {
        return Err(Error::InvalidConfig(format!(
            "n_components {n_components} must lie in 1..={}",
            n.min(d)
        )));
    }
    if let Some(v) = x.data().iter().find(|v| !v.is_finite()) {
        return Err(Error::NonFinite(format!("PCA input contains {v}")));
    }
    let (mean, cov) = covariance(x);
    let (vals, vecs) = symmetric_eigen(&cov);
    let mut order: Vec<usize> = (0..d).collect();
    order.sort_by(|&a, &b| vals[b].total_cmp(&vals[a]));
    let eig_all: Vec<f64> = order.iter().map(|&i| vals[i].max(0.0)).collect();
    let total_variance: f64 = eig_all.iter().sum();

    let mut comps = Vec::with_capacity(n_components * d);
    for &col in order.iter().take(n_components) {
        let mut axis: Vec<f64> = (0..d).map(|r| vecs.get(r, col)).collect();
        let lead = axis
            .iter()
            .enumerate()
            .fold((0, 0.0f64), |(bi, bv), (i, &v)| {
                if v.abs() > bv {
                    (i, v.abs())
                } else {
                    (bi, bv)
                }
            })
            .0;
        if axis[lead] < 0.0 {
            axis.iter_mut().for_each(|v| *v = -*v);
        }
        comps.extend(axis);
    }
    let eigenvalues = eig_all[..n_components].to_vec();
    let evr = eigenvalues
        .iter()
        .map(|l| if total_variance > 0.0 { l / total_variance } else { 0.0 })
        .collect();
    Ok(PcaModel {
        mean,
        components: Matrix::new(n_components, d, comps)?,
        eigenvalues,
        evr,
        total_variance,
        whiten: false,
    })
}

/// Fits PCA keeping the number of components `reduction` asks for.
pub fn pca_fit_reduced(x: &Matrix, reduction: Reduction) -> Result<PcaModel> {
    match reduction {
        Reduction::Fixed(n) => pca_fit(x, n),
        Reduction::EvrThreshold(t) => {
            let full = pca_fit(x, x.nrows().min(x.ncols()))?;
            let n = full.select_dims(t)?;
            Ok(full.truncate(n))
        }
    }
}

impl PcaModel {
    pub fn n_components(&self) -> usize {
        self.components.nrows()
    }

    pub fn input_dim(&self) -> usize {
        self.mean.len()
    }

    /// Keeps only the leading `n` components.
    pub fn truncate(mut self, n: usize) -> Self {
        let n = n.min(self.n_components());
        let d = self.input_dim();
        self.components = Matrix::new(n, d, self.components.data()[..n * d].to_vec())
            .expect("prefix of a valid matrix");
        self.eigenvalues.truncate(n);
        self.evr.truncate(n);
        self
    }

    /// `components · (x − mean)`, optionally scaled to unit variance.
    pub fn transform_one(&self, x: &[f64]) -> Result<Vec<f64>> {
        if x.len() != self.input_dim() {
            return Err(Error::Structure(format!(
                "vector of length {} given to a PCA fitted on {} dimensions",
                x.len(),
                self.input_dim()
            )));
        }
        let centered: Vec<f64> = x.iter().zip(&self.mean).map(|(v, m)| v - m).collect();
        Ok(self
            .components
            .rows()
            .zip(&self.eigenvalues)
            .map(|(c, &lambda)| {
                let y: f64 = c.iter().zip(&centered).map(|(a, b)| a * b).sum();
                if self.whiten {
                    if lambda > 0.0 {
                        y / lambda.sqrt()
                    } else {
                        0.0
                    }
                } else {
                    y
                }
            })
            .collect())
    }

    pub fn transform(&self, x: &Matrix) -> Result<Matrix> {
        let rows = x
            .rows()
            .map(|r| self.transform_one(r))
            .collect::<Result<Vec<_>>>()?;
        if rows.is_empty() {
            return Ok(Matrix::zeros(0, self.n_components()));
        }
        Matrix::from_rows(&rows)
    }

    /// Maps reduced coordinates back to the input space (no whitening).
    pub fn inverse_transform_one(&self, y: &[f64]) -> Vec<f64> {
        let mut x = self.mean.clone();
        for (c, &v) in self.components.rows().zip(y) {
            for (xi, ci) in x.iter_mut().zip(c) {
                *xi += v * ci;
            }
        }
        x
    }

    /// Smallest number of leading components whose EVR sums to `threshold`.
    pub fn select_dims(&self, threshold: f64) -> Result<usize> {
        if !(threshold > 0.0 && threshold <= 1.0) {
            return Err(Error::InvalidConfig(format!(
                "EVR threshold must lie in (0, 1], got {threshold}"
            )));
        }
        let cum = self.evr_cumsum();
        // Guards against the cumulative sum landing a rounding step short of 1.
        let slack = 1e-12;
        cum.iter()
            .position(|&c| c >= threshold - slack)
            .map(|i| i + 1)
            .ok_or_else(|| {
                Error::InvalidConfig(format!(
                    "EVR threshold {threshold} unreachable: fitted components explain at most {}",
                    cum.last().copied().unwrap_or(0.0)
                ))
            })
    }

    pub fn evr_cumsum(&self) -> Vec<f64> {
        self.evr
            .iter()
            .scan(0.0, |acc, v| {
                *acc += v;
                Some(*acc)
            })
            .collect()
    }
}

/// `index,evr,cumulative` per component.
pub fn evr_csv(model: &PcaModel) -> String {
    let mut s = String::from("index,evr,cumulative\n");
    for (i, (e, c)) in model.evr.iter().zip(model.evr_cumsum()).enumerate() {
        let _ = writeln!(s, "{i},{e},{c}");
    }
    s
}

const PCA_MAGIC: &[u8; 8] = b"SXAIPCA\0";
const PCA_VERSION: u32 = 1;
const MAX_PCA_DIM: usize = 1 << 16;

pub fn encode_pca(model: &PcaModel) -> Vec<u8> {
    let mut w = Writer::new(PCA_MAGIC, PCA_VERSION);
    w.u32(model.input_dim() as u32);
    w.u32(model.n_components() as u32);
    w.u8(model.whiten as u8);
    w.f64(model.total_variance);
    w.f64s(&model.mean);
    w.f64s(model.components.data());
    w.f64s(&model.eigenvalues);
    w.f64s(&model.evr);
    w.finish()
}

pub fn decode_pca(data: &[u8]) -> Result<PcaModel> {
    let mut r = Reader::open(data, PCA_MAGIC, PCA_VERSION)?;
    let d = r.u32()? as usize;
    let n = r.u32()? as usize;
    if d > MAX_PCA_DIM || n > d {
        return Err(Error::Structure(format!("{n} components over {d} dimensions")));
    }
    let whiten = match r.u8()? {
        0 => false,
        1 => true,
        b => return Err(Error::parse(format!("offset {}", r.offset() - 1), format!("bad flag {b}"))),
    };
    let total_variance = r.f64()?;
    let mean = r.f64s(d)?;
    let comps = r.f64s(n * d)?;
    let eigenvalues = r.f64s(n)?;
    let evr = r.f64s(n)?;
    r.finish()?;
    Ok(PcaModel {
        mean,
        components: Matrix::new(n, d, comps)?,
        eigenvalues,
        evr,
        total_variance,
        whiten,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use rand_distr::StandardNormal;

    fn random(n: usize, d: usize, seed: u64) -> Matrix {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let data = (0..n * d).map(|_| rng.sample::<f64, _>(StandardNormal)).collect();
        Matrix::new(n, d, data).unwrap()
    }

    fn diag(vals: &[f64]) -> PcaModel {
        let total: f64 = vals.iter().sum();
        PcaModel {
            mean: vec![0.0; vals.len()],
            components: Matrix::zeros(vals.len(), vals.len()),
            eigenvalues: vals.to_vec(),
            evr: vals.iter().map(|v| v / total).collect(),
            total_variance: total,
            whiten: false,
        }
    }

    #[test]
    fn identical_rows_have_no_variance() {
        let x = Matrix::from_rows(&vec![vec![1.0, -2.0, 3.0]; 5]).unwrap();
        let m = pca_fit(&x, 3).unwrap();
        assert!(m.eigenvalues.iter().all(|&l| l == 0.0));
        assert_eq!(m.transform_one(&[1.0, -2.0, 3.0]).unwrap(), vec![0.0; 3]);
        assert!(m.evr.iter().all(|&e| e == 0.0));
    }

    #[test]
    fn recovers_dominant_diagonal_direction() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let s = std::f64::consts::FRAC_1_SQRT_2;
        let rows: Vec<Vec<f64>> = (0..500)
            .map(|_| {
                let t: f64 = rng.sample(StandardNormal);
                let e: f64 = rng.sample::<f64, _>(StandardNormal) * 1e-3;
                vec![t * s - e * s, t * s + e * s]
            })
            .collect();
        let m = pca_fit(&Matrix::from_rows(&rows).unwrap(), 2).unwrap();
        let c = m.components.row(0);
        assert!((c[0] - s).abs() < 1e-3 && (c[1] - s).abs() < 1e-3, "{c:?}");
        assert!(m.evr[0] > 0.9999);
    }

    #[test]
    fn full_rank_reconstruction() {
        let x = random(30, 6, 1);
        let m = pca_fit(&x, 6).unwrap();
        for row in x.rows() {
            let back = m.inverse_transform_one(&m.transform_one(row).unwrap());
            for (a, b) in back.iter().zip(row) {
                assert!((a - b).abs() < 1e-8);
            }
        }
    }

    #[test]
    fn orthonormal_sorted_and_trace_preserving() {
        let x = random(40, 8, 2);
        let m = pca_fit(&x, 8).unwrap();
        for i in 0..8 {
            for j in 0..8 {
                let dot: f64 = m
                    .components
                    .row(i)
                    .iter()
                    .zip(m.components.row(j))
                    .map(|(a, b)| a * b)
                    .sum();
                let expect = if i == j { 1.0 } else { 0.0 };
                assert!((dot - expect).abs() < 1e-8);
            }
        }
        assert!(m.eigenvalues.windows(2).all(|w| w[0] >= w[1]));
        let (_, cov) = covariance(&x);
        let trace: f64 = (0..8).map(|i| cov.get(i, i)).sum();
        assert!((m.eigenvalues.iter().sum::<f64>() - trace).abs() < 1e-8);
        // Sign convention: largest-magnitude entry positive.
        for c in m.components.rows() {
            let lead = c.iter().copied().fold(0.0f64, |a, v| if v.abs() > a.abs() { v } else { a });
            assert!(lead > 0.0);
        }
    }

    #[test]
    fn rank_deficient_input_is_allowed() {
        // Five samples in ten dimensions: at most four nonzero eigenvalues.
        let x = random(5, 10, 3);
        let m = pca_fit(&x, 5).unwrap();
        assert!(m.eigenvalues[4].abs() < 1e-10);
        assert!(pca_fit(&x, 6).is_err());
        assert!(pca_fit(&random(1, 3, 0), 1).is_err());
    }

    #[test]
    fn select_dims_arithmetic() {
        let m = diag(&[4.0, 3.0, 2.0, 1.0]);
        assert_eq!(m.select_dims(0.65).unwrap(), 2);
        assert_eq!(m.select_dims(0.4).unwrap(), 1);
        assert_eq!(m.select_dims(1.0).unwrap(), 4);
        assert!(m.select_dims(0.0).is_err());
        assert!(m.select_dims(1.5).is_err());

        let single = diag(&[5.0, 0.0, 0.0]);
        assert_eq!(single.select_dims(0.5).unwrap(), 1);

        let partial = diag(&[4.0, 3.0, 2.0, 1.0]).truncate(2);
        let err = partial.select_dims(0.9).unwrap_err().to_string();
        assert!(err.contains("0.7"), "{err}");
    }

    #[test]
    fn cumulative_evr() {
        let m = diag(&[5.0, 3.0, 2.0]);
        let c = m.evr_cumsum();
        assert!((c[0] - 0.5).abs() < 1e-15 && (c[1] - 0.8).abs() < 1e-15);
        assert!((c[2] - 1.0).abs() < 1e-15);
    }

    #[test]
    fn transform_of_mean_is_zero_and_dims_checked() {
        let x = random(20, 4, 5);
        let m = pca_fit(&x, 2).unwrap();
        let y = m.transform_one(&m.mean).unwrap();
        assert!(y.iter().all(|v| v.abs() < 1e-12));
        assert!(matches!(m.transform_one(&[0.0; 3]), Err(Error::Structure(_))));
    }

    #[test]
    fn threshold_reduction_picks_smallest_n() {
        let x = random(50, 6, 8);
        let full = pca_fit(&x, 6).unwrap();
        let reduced = pca_fit_reduced(&x, Reduction::EvrThreshold(0.5)).unwrap();
        let n = reduced.n_components();
        let cum = full.evr_cumsum();
        assert!(cum[n - 1] >= 0.5 && (n == 1 || cum[n - 2] < 0.5));
    }

    #[test]
    fn whitening_gives_unit_variance() {
        let x = random(200, 3, 6);
        let mut m = pca_fit(&x, 3).unwrap();
        m.whiten = true;
        let y = m.transform(&x).unwrap();
        for j in 0..3 {
            let var = y.rows().map(|r| r[j] * r[j]).sum::<f64>() / 199.0;
            assert!((var - 1.0).abs() < 1e-8);
        }
    }

    #[test]
    fn checkpoint_round_trip() {
        let m = pca_fit(&random(20, 5, 7), 3).unwrap();
        let bytes = encode_pca(&m);
        assert_eq!(decode_pca(&bytes).unwrap(), m);
        assert!(decode_pca(&bytes[..20]).is_err());
    }
}
