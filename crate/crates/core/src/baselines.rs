//! Classical comparison detectors: PCA dimensionality reduction feeding a
//! Gaussian KDE or a diagonal-covariance GMM (components chosen by BIC),
//! plus the plain-VAE reconstruction-loss scorer. All baseline math runs in
//! f64 regardless of the model element type.

use alloc::vec;
use alloc::vec::Vec;

#[allow(unused_imports)]
use num_traits::Float;
use nalgebra::DMatrix;

use crate::error::{CoreError, CoreResult};
use crate::nn::DetectorVae;
use crate::objective::kl_to_precision_prior;
use crate::rng::substream;
use crate::tensor::{Scalar, Tensor};

/// Flattens an image batch `[n, C, H, W]` into f64 rows `[n, C*H*W]`.
pub fn flatten_images<T: Scalar>(x: &Tensor<T>) -> Tensor<f64> {
    let n = x.rows();
    let d = x.row_len();
    Tensor::from_vec(
        &[n, d],
        x.data().iter().map(|v| v.as_f64()).collect(),
    )
}

/// PCA basis: dataset mean plus the top-q principal axes (rows).
#[derive(Clone, Debug)]
pub struct PcaModel {
    pub mean: Vec<f64>,
    /// `[q, d]`, orthonormal rows in descending eigenvalue order.
    pub axes: Tensor<f64>,
    pub eigenvalues: Vec<f64>,
}

/// Eigendecomposition of the (1/n) covariance of `data` `[n, d]`.
pub fn pca_fit(data: &Tensor<f64>, q: usize) -> PcaModel {
    let (n, d) = (data.rows(), data.row_len());
    assert!(n >= 2, "pca_fit needs at least two samples");
    assert!(q >= 1 && q <= d, "pca_fit component count out of range");
    let mut mean = vec![0.0; d];
    for row in data.data().chunks(d) {
        for (m, &v) in mean.iter_mut().zip(row) {
            *m += v;
        }
    }
    for m in mean.iter_mut() {
        *m /= n as f64;
    }

    let mut centered = vec![0.0; n * d];
    for (i, row) in data.data().chunks(d).enumerate() {
        for j in 0..d {
            centered[i * d + j] = row[j] - mean[j];
        }
    }
    let mut cov = vec![0.0; d * d];
    crate::tensor::matmul_atb_acc(&centered, &centered, &mut cov, d, n, d);
    for v in cov.iter_mut() {
        *v /= n as f64;
    }

    let eig = DMatrix::from_row_slice(d, d, &cov).symmetric_eigen();
    let mut order: Vec<usize> = (0..d).collect();
    order.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]));

    let mut axes = Tensor::zeros(&[q, d]);
    let mut eigenvalues = Vec::with_capacity(q);
    for (row, &col) in order.iter().take(q).enumerate() {
        eigenvalues.push(eig.eigenvalues[col]);
        for j in 0..d {
            axes.data_mut()[row * d + j] = eig.eigenvectors[(j, col)];
        }
    }
    PcaModel {
        mean,
        axes,
        eigenvalues,
    }
}

impl PcaModel {
    pub fn q(&self) -> usize {
        self.axes.rows()
    }

    /// Restriction to the top `q` axes; the eigendecomposition is shared
    /// across a whole dimensionality grid this way.
    pub fn truncated(&self, q: usize) -> PcaModel {
        assert!(q >= 1 && q <= self.q(), "truncated({q}) of rank-{} PCA", self.q());
        let d = self.mean.len();
        PcaModel {
            mean: self.mean.clone(),
            axes: Tensor::from_vec(&[q, d], self.axes.data()[..q * d].to_vec()),
            eigenvalues: self.eigenvalues[..q].to_vec(),
        }
    }

    /// Projects `[n, d]` rows onto the retained axes: `[n, q]`.
    pub fn project(&self, data: &Tensor<f64>) -> Tensor<f64> {
        let (n, d) = (data.rows(), data.row_len());
        assert_eq!(d, self.mean.len(), "pca_project dimension mismatch");
        let q = self.q();
        let mut out = Tensor::zeros(&[n, q]);
        for i in 0..n {
            let row = data.row(i);
            for a in 0..q {
                let axis = self.axes.row(a);
                let mut acc = 0.0;
                for j in 0..d {
                    acc += (row[j] - self.mean[j]) * axis[j];
                }
                out.data_mut()[i * q + a] = acc;
            }
        }
        out
    }

    /// Mean squared reconstruction error of the rank-q approximation.
    pub fn reconstruction_mse(&self, data: &Tensor<f64>) -> f64 {
        let proj = self.project(data);
        let (n, d) = (data.rows(), data.row_len());
        let q = self.q();
        let mut acc = 0.0;
        for i in 0..n {
            for j in 0..d {
                let mut rec = self.mean[j];
                for a in 0..q {
                    rec += proj.data()[i * q + a] * self.axes.data()[a * d + j];
                }
                let diff = data.data()[i * d + j] - rec;
                acc += diff * diff;
            }
        }
        acc / (n * d) as f64
    }
}

/// Gaussian-kernel density estimate over projected training points.
#[derive(Clone, Debug)]
pub struct KdeModel {
    pub train: Tensor<f64>,
    pub bandwidth: f64,
}

pub const KDE_BANDWIDTH_GRID: [f64; 5] = [0.05, 0.1, 0.2, 0.5, 1.0];

impl KdeModel {
    pub fn new(train: Tensor<f64>, bandwidth: f64) -> Self {
        assert!(bandwidth > 0.0);
        KdeModel { train, bandwidth }
    }

    /// Log density at one query point.
    pub fn log_density(&self, x: &[f64]) -> f64 {
        let (m, q) = (self.train.rows(), self.train.row_len());
        assert_eq!(x.len(), q);
        let h2 = self.bandwidth * self.bandwidth;
        let mut max_e = f64::NEG_INFINITY;
        let mut exps = Vec::with_capacity(m);
        for row in self.train.data().chunks(q) {
            let mut d2 = 0.0;
            for (&a, &b) in x.iter().zip(row) {
                let d = a - b;
                d2 += d * d;
            }
            let e = -d2 / (2.0 * h2);
            if e > max_e {
                max_e = e;
            }
            exps.push(e);
        }
        let sum: f64 = exps.iter().map(|&e| (e - max_e).exp()).sum();
        max_e + sum.ln()
            - (m as f64).ln()
            - q as f64 * (self.bandwidth * (2.0 * core::f64::consts::PI).sqrt()).ln()
    }

    /// Anomaly score: negative log density (higher = more anomalous).
    pub fn score(&self, x: &[f64]) -> f64 {
        -self.log_density(x)
    }

    /// Mean log density over a holdout batch; used for bandwidth selection.
    pub fn mean_log_density(&self, batch: &Tensor<f64>) -> f64 {
        let q = batch.row_len();
        let mut acc = 0.0;
        for row in batch.data().chunks(q) {
            acc += self.log_density(row);
        }
        acc / batch.rows().max(1) as f64
    }
}

/// Picks the grid bandwidth with the best held-out log density.
pub fn kde_select_bandwidth(train: &Tensor<f64>, holdout: &Tensor<f64>) -> KdeModel {
    let mut best: Option<(f64, KdeModel)> = None;
    for &h in &KDE_BANDWIDTH_GRID {
        let model = KdeModel::new(train.clone(), h);
        let ll = model.mean_log_density(holdout);
        if best.as_ref().map(|(b, _)| ll > *b).unwrap_or(true) {
            best = Some((ll, model));
        }
    }
    best.unwrap().1
}

/// Diagonal-covariance Gaussian mixture fitted by EM.
#[derive(Clone, Debug)]
pub struct GmmModel {
    pub weights: Vec<f64>,
    /// `[c, q]`
    pub means: Tensor<f64>,
    /// `[c, q]` diagonal variances
    pub vars: Tensor<f64>,
    pub bic: f64,
    pub train_log_likelihood: f64,
    /// Total log-likelihood after each EM iteration.
    pub ll_history: Vec<f64>,
}

const GMM_VAR_FLOOR: f64 = 1e-6;
const GMM_MAX_ITERS: usize = 200;
const GMM_TOL: f64 = 1e-7;

fn log_gauss_diag(x: &[f64], mean: &[f64], var: &[f64]) -> f64 {
    let mut acc = 0.0;
    for j in 0..x.len() {
        let d = x[j] - mean[j];
        acc += -0.5 * (d * d / var[j] + var[j].ln() + (2.0 * core::f64::consts::PI).ln());
    }
    acc
}

impl GmmModel {
    /// Per-sample log-likelihood under the mixture.
    pub fn log_likelihood(&self, x: &[f64]) -> f64 {
        let c = self.weights.len();
        let mut max_e = f64::NEG_INFINITY;
        let mut terms = Vec::with_capacity(c);
        for k in 0..c {
            let e = self.weights[k].ln() + log_gauss_diag(x, self.means.row(k), self.vars.row(k));
            if e > max_e {
                max_e = e;
            }
            terms.push(e);
        }
        max_e + terms.iter().map(|&t| (t - max_e).exp()).sum::<f64>().ln()
    }

    /// Anomaly score: negative log-likelihood.
    pub fn score(&self, x: &[f64]) -> f64 {
        -self.log_likelihood(x)
    }
}

/// One EM fit with `c` components from a seeded random initialization.
pub fn gmm_fit(data: &Tensor<f64>, c: usize, seed: u64) -> CoreResult<GmmModel> {
    let (n, q) = (data.rows(), data.row_len());
    assert!(c >= 1 && n >= c, "gmm_fit needs n >= c >= 1");

    for restart in 0..5u64 {
        let mut rng = substream(seed, "gmm-init", restart * 1000 + c as u64);
        // Means from random data points; shared data variance to start.
        let mut col_var = vec![0.0; q];
        let mut col_mean = vec![0.0; q];
        for row in data.data().chunks(q) {
            for (m, &v) in col_mean.iter_mut().zip(row) {
                *m += v;
            }
        }
        for m in col_mean.iter_mut() {
            *m /= n as f64;
        }
        for row in data.data().chunks(q) {
            for j in 0..q {
                let d = row[j] - col_mean[j];
                col_var[j] += d * d;
            }
        }
        for v in col_var.iter_mut() {
            *v = (*v / n as f64).max(GMM_VAR_FLOOR);
        }

        let mut means = Tensor::zeros(&[c, q]);
        for k in 0..c {
            let pick = rand::Rng::random_range(&mut rng, 0..n);
            means.data_mut()[k * q..(k + 1) * q].copy_from_slice(data.row(pick));
        }
        let mut vars = Tensor::zeros(&[c, q]);
        for k in 0..c {
            vars.data_mut()[k * q..(k + 1) * q].copy_from_slice(&col_var);
        }
        let mut weights = vec![1.0 / c as f64; c];

        let mut resp = vec![0.0; n * c];
        let mut ll_history = Vec::new();
        let mut prev_ll = f64::NEG_INFINITY;
        let mut ok = true;
        for _iter in 0..GMM_MAX_ITERS {
            // E-step.
            let mut total_ll = 0.0;
            for (i, row) in data.data().chunks(q).enumerate() {
                let mut max_e = f64::NEG_INFINITY;
                for k in 0..c {
                    let e = weights[k].ln() + log_gauss_diag(row, means.row(k), vars.row(k));
                    resp[i * c + k] = e;
                    if e > max_e {
                        max_e = e;
                    }
                }
                let lse = max_e
                    + (0..c)
                        .map(|k| (resp[i * c + k] - max_e).exp())
                        .sum::<f64>()
                        .ln();
                total_ll += lse;
                for k in 0..c {
                    resp[i * c + k] = (resp[i * c + k] - lse).exp();
                }
            }
            if !total_ll.is_finite() {
                ok = false;
                break;
            }
            ll_history.push(total_ll);
            if (total_ll - prev_ll).abs() < GMM_TOL * total_ll.abs().max(1.0) {
                break;
            }
            prev_ll = total_ll;

            // M-step.
            for k in 0..c {
                let nk: f64 = (0..n).map(|i| resp[i * c + k]).sum::<f64>().max(1e-12);
                weights[k] = nk / n as f64;
                for j in 0..q {
                    let mut m = 0.0;
                    for i in 0..n {
                        m += resp[i * c + k] * data.data()[i * q + j];
                    }
                    means.data_mut()[k * q + j] = m / nk;
                }
                for j in 0..q {
                    let mj = means.data()[k * q + j];
                    let mut v = 0.0;
                    for i in 0..n {
                        let d = data.data()[i * q + j] - mj;
                        v += resp[i * c + k] * d * d;
                    }
                    vars.data_mut()[k * q + j] = (v / nk).max(GMM_VAR_FLOOR);
                }
            }
        }

        if ok && !ll_history.is_empty() {
            let ll = *ll_history.last().unwrap();
            let params = (c - 1) + 2 * c * q;
            let bic = -2.0 * ll + params as f64 * (n as f64).ln();
            return Ok(GmmModel {
                weights,
                means,
                vars,
                bic,
                train_log_likelihood: ll,
                ll_history,
            });
        }
    }
    Err(CoreError::EmNotConverged { restarts: 5 })
}

/// Fits every component count in `c_range` and keeps the min-BIC model.
pub fn gmm_fit_bic(
    data: &Tensor<f64>,
    c_range: impl Iterator<Item = usize>,
    seed: u64,
) -> CoreResult<GmmModel> {
    let mut best: Option<GmmModel> = None;
    for c in c_range {
        let model = gmm_fit(data, c, seed)?;
        if best.as_ref().map(|b| model.bic < b.bic).unwrap_or(true) {
            best = Some(model);
        }
    }
    best.ok_or_else(|| CoreError::InvalidArgument(alloc::string::String::from("empty component range")))
}

/// Plain-VAE anomaly score: per-sample summed squared reconstruction error
/// (through the posterior mean) plus the per-sample KL to the unit prior.
pub fn vae_baseline_scores<T: Scalar>(model: &DetectorVae<T>, x: &Tensor<T>) -> Vec<f64> {
    let post = model.encoder.encode(x);
    let recon = model.decoder.decode(&post.mu);
    let n = x.rows();
    let w = x.row_len();
    let d = post.mu.row_len();
    let beta = Tensor::<T>::full(&[d], T::one());
    let mut out = Vec::with_capacity(n);
    for i in 0..n {
        let mut sq = 0.0;
        for (&a, &b) in x.row(i).iter().zip(recon.row(i)) {
            let diff = (a - b).as_f64();
            sq += diff * diff;
        }
        let mu_i = Tensor::from_vec(&[1, d], post.mu.row(i).to_vec());
        let lv_i = Tensor::from_vec(&[1, d], post.logvar.row(i).to_vec());
        let kl = kl_to_precision_prior(&mu_i, &lv_i, &beta).unwrap().as_f64();
        out.push(sq + kl);
    }
    debug_assert_eq!(w * n, x.len());
    out
}
