//! Detector-VAE objective.
//!
//! Four terms, each also available as a pure tensor function so scoring and
//! tests can evaluate them without a graph:
//!
//! * `l_r`   — reconstruction: batch mean of per-sample summed squared error
//! * `l_kl`  — KL(q(z|x) || N(0, beta^-1)) in closed form, learned precisions
//! * `l_tc`  — total-correlation estimate from the discriminator's log-odds
//! * `l_reg` — precision regularizer sum_j (beta_j^-1 - 1)^2
//!
//! `total = l_r + lambda_lkd * l_kl + gamma * l_tc + eta * l_reg`, minimized.
//! The discriminator itself trains against [`tc_disc_loss`], a two-class
//! cross-entropy between q(z) samples and dimension-permuted samples.

use rand::Rng;

use crate::error::{CoreError, CoreResult};
use crate::graph::{Graph, Var};
use crate::nn::{BoundDecoder, BoundDisc, BoundEncoder, DetectorVae};
use crate::tensor::{pad_spatial, Scalar, Tensor};

/// Learned prior precisions, kept as log-precisions so optimization stays
/// unconstrained while beta stays positive.
#[derive(Clone, Debug)]
pub struct PrecisionVector<T> {
    pub log_beta: Tensor<T>,
}

impl<T: Scalar> PrecisionVector<T> {
    pub fn from_beta(beta: &Tensor<T>) -> CoreResult<Self> {
        if beta.data().iter().any(|&b| b <= T::zero()) {
            return Err(CoreError::NonPositivePrecision);
        }
        Ok(PrecisionVector {
            log_beta: beta.map(|b| b.ln()),
        })
    }

    pub fn beta(&self) -> Tensor<T> {
        self.log_beta.map(|v| v.exp())
    }
}

/// Loss weights; defaults follow the reference configuration
/// (gamma = 40, lambda_lkd = 0.1, eta = 0.1).
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Hyper {
    pub gamma: f64,
    pub eta: f64,
    pub lambda_lkd: f64,
}

impl Default for Hyper {
    fn default() -> Self {
        Hyper {
            gamma: 40.0,
            eta: 0.1,
            lambda_lkd: 0.1,
        }
    }
}

/// Per-term values of one objective evaluation. Terms are stored raw
/// (unweighted); `total` applies the weights.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossBreakdown {
    pub l_r: f64,
    pub l_kl: f64,
    pub l_tc: f64,
    pub l_reg: f64,
    pub total: f64,
}

impl LossBreakdown {
    pub fn all_finite(&self) -> bool {
        self.l_r.is_finite()
            && self.l_kl.is_finite()
            && self.l_tc.is_finite()
            && self.l_reg.is_finite()
            && self.total.is_finite()
    }
}

/// Batch mean of the per-sample summed squared error.
pub fn recon_loss<T: Scalar>(x: &Tensor<T>, x_hat: &Tensor<T>) -> CoreResult<T> {
    x_hat.check_shape(x.shape())?;
    let n = x.rows().max(1);
    let mut acc = T::zero();
    for (&a, &b) in x.data().iter().zip(x_hat.data()) {
        let d = a - b;
        acc += d * d;
    }
    Ok(acc / T::of_f64(n as f64))
}

/// Closed-form KL(N(mu, sigma^2) || N(0, beta^-1)) summed over dimensions,
/// averaged over the batch:
/// `0.5 * (beta*(mu^2 + sigma^2) - 1 - ln beta - ln sigma^2)`.
pub fn kl_to_precision_prior<T: Scalar>(
    mu: &Tensor<T>,
    logvar: &Tensor<T>,
    beta: &Tensor<T>,
) -> CoreResult<T> {
    logvar.check_shape(mu.shape())?;
    if beta.data().iter().any(|&b| b <= T::zero()) {
        return Err(CoreError::NonPositivePrecision);
    }
    let d = beta.len();
    let n = mu.rows().max(1);
    let log_beta: alloc::vec::Vec<T> = beta.data().iter().map(|b| b.ln()).collect();
    let mut acc = T::zero();
    for (mrow, lvrow) in mu.data().chunks(d).zip(logvar.data().chunks(d)) {
        for j in 0..d {
            let m = mrow[j];
            let lv = lvrow[j];
            let var = lv.exp();
            acc += beta.data()[j] * (m * m + var) - T::one() - log_beta[j] - lv;
        }
    }
    Ok(acc * T::of_f64(0.5 / n as f64))
}

/// TC(z) estimate from discriminator logits: mean log-odds
/// `log D(z) - log(1 - D(z)) = logit_0 - logit_1`.
pub fn tc_estimate<T: Scalar>(logits: &Tensor<T>) -> T {
    assert_eq!(logits.row_len(), 2, "tc_estimate expects [n,2] logits");
    let n = logits.rows().max(1);
    let mut acc = T::zero();
    for row in logits.data().chunks(2) {
        acc += row[0] - row[1];
    }
    acc / T::of_f64(n as f64)
}

/// Discriminator cross-entropy:
/// `-(mean log D(z) + mean log(1 - D(z_perm))) / 2` with softmax logits.
pub fn tc_disc_loss<T: Scalar>(logits_real: &Tensor<T>, logits_perm: &Tensor<T>) -> T {
    fn log_softmax_col<T: Scalar>(logits: &Tensor<T>, col: usize) -> T {
        let n = logits.rows().max(1);
        let mut acc = T::zero();
        for row in logits.data().chunks(2) {
            let m = if row[0] > row[1] { row[0] } else { row[1] };
            let lse = m + ((row[0] - m).exp() + (row[1] - m).exp()).ln();
            acc += row[col] - lse;
        }
        acc / T::of_f64(n as f64)
    }
    let half = T::of_f64(0.5);
    -(log_softmax_col(logits_real, 0) + log_softmax_col(logits_perm, 1)) * half
}

/// Independently permutes every latent column across the batch, producing
/// samples from the product of marginals.
pub fn permute_dims<T: Scalar, R: Rng + ?Sized>(z: &Tensor<T>, rng: &mut R) -> CoreResult<Tensor<T>> {
    let (n, d) = (z.rows(), z.row_len());
    if n < 2 {
        return Err(CoreError::BatchTooSmall(n));
    }
    let mut out = z.clone();
    let mut idx: alloc::vec::Vec<usize> = (0..n).collect();
    for j in 0..d {
        // Fisher-Yates on the index buffer, then write the column through it.
        for i in (1..n).rev() {
            let k = rng.random_range(0..=i);
            idx.swap(i, k);
        }
        for (i, &src) in idx.iter().enumerate() {
            out.data_mut()[i * d + j] = z.data()[src * d + j];
        }
    }
    Ok(out)
}

/// `sum_j (beta_j^-1 - 1)^2`.
pub fn precision_regularizer<T: Scalar>(beta: &Tensor<T>) -> CoreResult<T> {
    if beta.data().iter().any(|&b| b <= T::zero()) {
        return Err(CoreError::NonPositivePrecision);
    }
    Ok(beta
        .data()
        .iter()
        .map(|&b| {
            let e = T::one() / b - T::one();
            e * e
        })
        .sum())
}

/// Graph handles for the objective's terms.
pub struct ObjectiveVars {
    pub l_r: Var,
    pub l_kl: Var,
    pub l_tc: Var,
    pub l_reg: Var,
    pub total: Var,
    pub z: Var,
    pub mu: Var,
    pub logvar: Var,
}

/// Builds the full objective in `g`. `x_model` must be model-space pixels,
/// `noise` a standard-normal tensor of latent shape; both are constants.
/// With `include_tc = false` the discriminator is never evaluated and
/// `l_tc` is a constant zero (used when gamma = 0, e.g. plain-VAE training).
#[allow(clippy::too_many_arguments)]
pub fn build_objective<T: Scalar, S: Scalar>(
    g: &mut Graph<S>,
    model: &DetectorVae<T>,
    be: &BoundEncoder,
    bd: &BoundDecoder,
    bdisc: &BoundDisc,
    log_beta: Var,
    x_model: Var,
    noise: Var,
    hyper: &Hyper,
    include_tc: bool,
) -> ObjectiveVars {
    let n = g.value(x_model).shape()[0];

    let (mu, logvar) = model.encoder.forward(g, be, x_model);

    // z = mu + exp(logvar/2) * eps
    let half_lv = g.mul_scalar(logvar, 0.5);
    let std = g.exp(half_lv);
    let scaled = g.mul(std, noise);
    let z = g.add(mu, scaled);

    // Reconstruction.
    let x_hat = model.decoder.forward(g, bd, z);
    let diff = g.sub(x_model, x_hat);
    let sq = g.square(diff);
    let sum = g.sum_all(sq);
    let l_r = g.mul_scalar(sum, 1.0 / n as f64);

    // KL to the precision prior.
    let beta = g.exp(log_beta);
    let mu2 = g.square(mu);
    let var = g.exp(logvar);
    let second_moment = g.add(mu2, var);
    let weighted = g.row_mul(second_moment, beta);
    let minus_one = g.add_scalar(weighted, -1.0);
    let neg_log_beta = g.neg(log_beta);
    let minus_logb = g.row_add(minus_one, neg_log_beta);
    let elems = g.sub(minus_logb, logvar);
    let kl_sum = g.sum_all(elems);
    let l_kl = g.mul_scalar(kl_sum, 0.5 / n as f64);

    // TC estimate through the discriminator (log-odds of the two logits).
    let l_tc = if include_tc {
        let logits = model.disc.forward(g, bdisc, z);
        let l0 = g.col_sel2(logits, 0);
        let l1 = g.col_sel2(logits, 1);
        let odds = g.sub(l0, l1);
        g.mean_all(odds)
    } else {
        g.input(Tensor::scalar(S::zero()))
    };

    // Precision regularizer.
    let neg_lb = g.neg(log_beta);
    let inv_beta = g.exp(neg_lb);
    let centered = g.add_scalar(inv_beta, -1.0);
    let reg_sq = g.square(centered);
    let l_reg = g.sum_all(reg_sq);

    // Weighted total.
    let kl_w = g.mul_scalar(l_kl, hyper.lambda_lkd);
    let tc_w = g.mul_scalar(l_tc, hyper.gamma);
    let reg_w = g.mul_scalar(l_reg, hyper.eta);
    let t0 = g.add(l_r, kl_w);
    let t1 = g.add(t0, tc_w);
    let total = g.add(t1, reg_w);

    ObjectiveVars {
        l_r,
        l_kl,
        l_tc,
        l_reg,
        total,
        z,
        mu,
        logvar,
    }
}

/// Builds the discriminator loss in `g` from detached latent batches.
pub fn build_disc_loss<T: Scalar, S: Scalar>(
    g: &mut Graph<S>,
    model: &DetectorVae<T>,
    bdisc: &BoundDisc,
    z_real: Var,
    z_perm: Var,
) -> Var {
    let logits_real = model.disc.forward(g, bdisc, z_real);
    let ls_real = g.log_softmax2(logits_real);
    let real0 = g.col_sel2(ls_real, 0);
    let m_real = g.mean_all(real0);

    let logits_perm = model.disc.forward(g, bdisc, z_perm);
    let ls_perm = g.log_softmax2(logits_perm);
    let perm1 = g.col_sel2(ls_perm, 1);
    let m_perm = g.mean_all(perm1);

    let s = g.add(m_real, m_perm);
    g.mul_scalar(s, -0.5)
}

/// Evaluates the objective without touching gradients. `x` is a native-space
/// image batch; `noise` matches the latent shape.
pub fn total_objective<T: Scalar>(
    model: &DetectorVae<T>,
    x: &Tensor<T>,
    noise: &Tensor<T>,
    hyper: &Hyper,
) -> LossBreakdown {
    let (mh, mw) = model.arch.model_hw;
    let xm = pad_spatial(x, mh, mw);
    let mut g = Graph::<T>::new();
    let be = model.encoder.bind(&mut g, false);
    let bd = model.decoder.bind(&mut g, false);
    let bdisc = model.disc.bind(&mut g, false);
    let lb = g.input(model.log_beta.clone());
    let xv = g.input(xm);
    let nv = g.input(noise.clone());
    let vars = build_objective(&mut g, model, &be, &bd, &bdisc, lb, xv, nv, hyper, true);
    LossBreakdown {
        l_r: g.value(vars.l_r).item().as_f64(),
        l_kl: g.value(vars.l_kl).item().as_f64(),
        l_tc: g.value(vars.l_tc).item().as_f64(),
        l_reg: g.value(vars.l_reg).item().as_f64(),
        total: g.value(vars.total).item().as_f64(),
    }
}
