//! Structure-consistency scoring.
//!
//! A sample's score for one latent code is the average similarity between
//! the original image and that code's reconstructed morphs, under one of
//! three metrics: per-pixel MSE, the VAE loss (reconstruction + posterior
//! KL), or windowed SSIM. Normals land in a tight band per code; anomalies
//! fall outside (or fail the morph search entirely, which is recorded as a
//! sentinel and treated as maximal evidence downstream).

use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

#[allow(unused_imports)]
use num_traits::Float;
use crate::error::{CoreError, CoreResult};
use crate::morph::{CodeMorphs, MorphSet};
use crate::nn::DetectorVae;
use crate::objective::kl_to_precision_prior;
use crate::tensor::{Scalar, Tensor};

/// Similarity metric identifier.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Metric {
    Mse,
    Loss,
    Ssim,
}

impl Metric {
    pub const ALL: [Metric; 3] = [Metric::Mse, Metric::Loss, Metric::Ssim];

    pub fn name(&self) -> &'static str {
        match self {
            Metric::Mse => "mse",
            Metric::Loss => "loss",
            Metric::Ssim => "ssim",
        }
    }

    pub fn parse(s: &str) -> Option<Metric> {
        match s {
            "mse" => Some(Metric::Mse),
            "loss" => Some(Metric::Loss),
            "ssim" => Some(Metric::Ssim),
            _ => None,
        }
    }

    /// Whether larger scores mean more similar (true only for SSIM).
    pub fn higher_is_better(&self) -> bool {
        matches!(self, Metric::Ssim)
    }
}

/// Per-code structure-consistency scores of one sample under one metric.
#[derive(Clone, Debug, PartialEq)]
pub struct SCVector {
    pub metric: Metric,
    /// Selected code indices, aligned with `scores`.
    pub codes: Vec<usize>,
    pub scores: Vec<f64>,
    /// Codes whose morph search was exhausted; their score entry is
    /// meaningless and must be treated as a violation.
    pub sentinels: Vec<bool>,
}

impl SCVector {
    pub fn k(&self) -> usize {
        self.codes.len()
    }
}

/// Mean over morphs of the per-pixel mean squared difference.
pub fn mse_score<T: Scalar>(x: &Tensor<T>, morphs: &MorphSet<T>) -> f64 {
    let n = morphs.reconstructions.rows();
    let pixels = x.len();
    let mut acc = 0.0;
    for i in 0..n {
        let row = morphs.reconstructions.row(i);
        let mut s = 0.0;
        for (&a, &b) in x.data().iter().zip(row) {
            let d = (a - b).as_f64();
            s += d * d;
        }
        acc += s / pixels as f64;
    }
    acc / n as f64
}

/// Mean over morphs of summed squared error plus the sample's posterior KL
/// (constant across the sample's morphs).
pub fn loss_score<T: Scalar>(
    x: &Tensor<T>,
    morphs: &MorphSet<T>,
    model: &DetectorVae<T>,
) -> CoreResult<f64> {
    let post = model.encoder.encode(x);
    let kl = kl_to_precision_prior(&post.mu, &post.logvar, &model.beta())?.as_f64();
    Ok(loss_score_with_kl(x, morphs, kl))
}

/// LOSS metric with a precomputed posterior KL, so batch scoring encodes
/// each sample once.
pub fn loss_score_with_kl<T: Scalar>(x: &Tensor<T>, morphs: &MorphSet<T>, kl: f64) -> f64 {
    let n = morphs.reconstructions.rows();
    let mut acc = 0.0;
    for i in 0..n {
        let row = morphs.reconstructions.row(i);
        let mut s = 0.0;
        for (&a, &b) in x.data().iter().zip(row) {
            let d = (a - b).as_f64();
            s += d * d;
        }
        acc += s + kl;
    }
    acc / n as f64
}

pub const SSIM_WINDOW: usize = 11;
const SSIM_SIGMA: f64 = 1.5;
const SSIM_C1: f64 = 0.01 * 0.01; // (K1 * L)^2 with L = 1
const SSIM_C2: f64 = 0.03 * 0.03;

fn gaussian_kernel() -> [f64; SSIM_WINDOW] {
    let mut k = [0.0; SSIM_WINDOW];
    let c = (SSIM_WINDOW / 2) as f64;
    let mut sum = 0.0;
    for (i, v) in k.iter_mut().enumerate() {
        *v = (-((i as f64 - c) * (i as f64 - c)) / (2.0 * SSIM_SIGMA * SSIM_SIGMA)).exp();
        sum += *v;
    }
    for v in k.iter_mut() {
        *v /= sum;
    }
    k
}

/// Separable valid-region Gaussian filter: `[h, w] -> [h-10, w-10]`.
fn gauss_filter_valid(img: &[f64], h: usize, w: usize, k: &[f64; SSIM_WINDOW]) -> Vec<f64> {
    let wo = w - SSIM_WINDOW + 1;
    let ho = h - SSIM_WINDOW + 1;
    // rows
    let mut tmp = vec![0.0; h * wo];
    for r in 0..h {
        for c in 0..wo {
            let mut acc = 0.0;
            for (t, &kv) in k.iter().enumerate() {
                acc += img[r * w + c + t] * kv;
            }
            tmp[r * wo + c] = acc;
        }
    }
    // cols
    let mut out = vec![0.0; ho * wo];
    for c in 0..wo {
        for r in 0..ho {
            let mut acc = 0.0;
            for (t, &kv) in k.iter().enumerate() {
                acc += tmp[(r + t) * wo + c] * kv;
            }
            out[r * wo + c] = acc;
        }
    }
    out
}

/// Precomputed reference-side SSIM maps for one image, reused across all of
/// its morphs.
pub struct SsimReference {
    channels: usize,
    h: usize,
    w: usize,
    kernel: [f64; SSIM_WINDOW],
    x: Vec<f64>,
    mu_x: Vec<Vec<f64>>,
    sigma_x: Vec<Vec<f64>>,
}

impl SsimReference {
    /// `x` is a single image `[1, C, H, W]` (or `[C, H, W]`).
    pub fn new<T: Scalar>(x: &Tensor<T>) -> CoreResult<Self> {
        let shape = x.shape();
        let (c, h, w) = match shape.len() {
            4 => (shape[1], shape[2], shape[3]),
            3 => (shape[0], shape[1], shape[2]),
            _ => (1, shape[0], *shape.last().unwrap()),
        };
        if h < SSIM_WINDOW || w < SSIM_WINDOW {
            return Err(CoreError::ImageTooSmall {
                h,
                w,
                win: SSIM_WINDOW,
            });
        }
        let kernel = gaussian_kernel();
        let xf: Vec<f64> = x.data().iter().map(|v| v.as_f64()).collect();
        let mut mu_x = Vec::with_capacity(c);
        let mut sigma_x = Vec::with_capacity(c);
        for ch in 0..c {
            let plane = &xf[ch * h * w..(ch + 1) * h * w];
            let mu = gauss_filter_valid(plane, h, w, &kernel);
            let sq: Vec<f64> = plane.iter().map(|v| v * v).collect();
            let musq = gauss_filter_valid(&sq, h, w, &kernel);
            let sigma: Vec<f64> = musq
                .iter()
                .zip(&mu)
                .map(|(&m2, &m)| m2 - m * m)
                .collect();
            mu_x.push(mu);
            sigma_x.push(sigma);
        }
        Ok(SsimReference {
            channels: c,
            h,
            w,
            kernel,
            x: xf,
            mu_x,
            sigma_x,
        })
    }

    /// Mean SSIM of `y` (flat `[C*H*W]`) against the reference; channels
    /// averaged.
    pub fn score_flat<T: Scalar>(&self, y: &[T]) -> f64 {
        let (h, w) = (self.h, self.w);
        let yf: Vec<f64> = y.iter().map(|v| v.as_f64()).collect();
        let mut total = 0.0;
        for ch in 0..self.channels {
            let plane_y = &yf[ch * h * w..(ch + 1) * h * w];
            let plane_x = &self.x[ch * h * w..(ch + 1) * h * w];
            let mu_y = gauss_filter_valid(plane_y, h, w, &self.kernel);
            let sqy: Vec<f64> = plane_y.iter().map(|v| v * v).collect();
            let mu_y2 = gauss_filter_valid(&sqy, h, w, &self.kernel);
            let xy: Vec<f64> = plane_x.iter().zip(plane_y).map(|(&a, &b)| a * b).collect();
            let mu_xy = gauss_filter_valid(&xy, h, w, &self.kernel);
            let mu_x = &self.mu_x[ch];
            let sigma_x = &self.sigma_x[ch];
            let mut acc = 0.0;
            for i in 0..mu_y.len() {
                let sy = mu_y2[i] - mu_y[i] * mu_y[i];
                let sxy = mu_xy[i] - mu_x[i] * mu_y[i];
                let num = (2.0 * mu_x[i] * mu_y[i] + SSIM_C1) * (2.0 * sxy + SSIM_C2);
                let den = (mu_x[i] * mu_x[i] + mu_y[i] * mu_y[i] + SSIM_C1)
                    * (sigma_x[i] + sy + SSIM_C2);
                acc += num / den;
            }
            total += acc / mu_y.len() as f64;
        }
        total / self.channels as f64
    }
}

/// Mean SSIM between two single images of identical shape.
pub fn ssim<T: Scalar>(x: &Tensor<T>, y: &Tensor<T>) -> CoreResult<f64> {
    y.check_shape(x.shape())?;
    Ok(SsimReference::new(x)?.score_flat(y.data()))
}

/// Mean over morphs of windowed SSIM against the original.
pub fn ssim_score<T: Scalar>(x: &Tensor<T>, morphs: &MorphSet<T>) -> CoreResult<f64> {
    let reference = SsimReference::new(x)?;
    let n = morphs.reconstructions.rows();
    let mut acc = 0.0;
    for i in 0..n {
        acc += reference.score_flat(morphs.reconstructions.row(i));
    }
    Ok(acc / n as f64)
}

/// Applies `metric` to every code's morph set. Exhausted codes get a
/// sentinel flag and a NaN placeholder score.
pub fn sc_vector<T: Scalar>(
    x: &Tensor<T>,
    all_morphs: &[CodeMorphs<T>],
    metric: Metric,
    model: &DetectorVae<T>,
) -> CoreResult<SCVector> {
    // Posterior KL is per-sample, shared by all codes under LOSS.
    let kl = if metric == Metric::Loss {
        let post = model.encoder.encode(x);
        kl_to_precision_prior(&post.mu, &post.logvar, &model.beta())?.as_f64()
    } else {
        0.0
    };
    let ssim_ref = if metric == Metric::Ssim {
        Some(SsimReference::new(x)?)
    } else {
        None
    };

    let mut codes = Vec::with_capacity(all_morphs.len());
    let mut scores = Vec::with_capacity(all_morphs.len());
    let mut sentinels = Vec::with_capacity(all_morphs.len());
    for cm in all_morphs {
        codes.push(cm.code);
        match &cm.set {
            None => {
                scores.push(f64::NAN);
                sentinels.push(true);
            }
            Some(set) => {
                let s = match metric {
                    Metric::Mse => mse_score(x, set),
                    Metric::Loss => loss_score_with_kl(x, set, kl),
                    Metric::Ssim => {
                        let r = ssim_ref.as_ref().unwrap();
                        let n = set.reconstructions.rows();
                        let mut acc = 0.0;
                        for i in 0..n {
                            acc += r.score_flat(set.reconstructions.row(i));
                        }
                        acc / n as f64
                    }
                };
                scores.push(s);
                sentinels.push(false);
            }
        }
    }
    Ok(SCVector {
        metric,
        codes,
        scores,
        sentinels,
    })
}

/// CSV row for one sample's SC vector: `sample_id, metric, scores..., mask`.
pub fn sc_csv_row(sample_id: usize, sc: &SCVector) -> String {
    use core::fmt::Write;
    let mut s = String::new();
    let _ = write!(s, "{},{}", sample_id, sc.metric.name());
    for (v, &sent) in sc.scores.iter().zip(&sc.sentinels) {
        if sent {
            let _ = write!(s, ",nan");
        } else {
            let _ = write!(s, ",{v}");
        }
    }
    let mask: String = sc
        .sentinels
        .iter()
        .map(|&b| if b { '1' } else { '0' })
        .collect();
    let _ = write!(s, ",{mask}");
    s
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::ArchConfig;
    use crate::rng::substream;

    fn fake_morphs(code: usize, base_d: usize, recon: Tensor<f64>) -> MorphSet<f64> {
        let n = recon.rows();
        MorphSet {
            code,
            base: Tensor::zeros(&[base_d]),
            perturbed: Tensor::zeros(&[n, base_d]),
            reconstructions: recon,
            iters: 1,
            accept_history: vec![n],
        }
    }

    #[test]
    fn mse_on_identical_morphs_is_zero() {
        let x = Tensor::<f64>::full(&[1, 1, 16, 16], 0.3);
        let mut recon_data = x.data().to_vec();
        recon_data.extend_from_slice(x.data());
        let m = fake_morphs(0, 4, Tensor::from_vec(&[2, 1, 16, 16], recon_data));
        assert_eq!(mse_score(&x, &m), 0.0);
    }

    #[test]
    fn mse_all_ones_vs_all_zeros_is_one() {
        let x = Tensor::<f64>::zeros(&[1, 1, 16, 16]);
        let m = fake_morphs(0, 4, Tensor::full(&[1, 1, 16, 16], 1.0));
        assert_eq!(mse_score(&x, &m), 1.0);
    }

    #[test]
    fn mse_matches_double_loop_and_is_symmetric() {
        let mut rng = substream(1, "t", 0);
        let x = Tensor::<f64>::randn(&[1, 1, 16, 16], 0.3, &mut rng);
        let r = Tensor::<f64>::randn(&[3, 1, 16, 16], 0.3, &mut rng);
        let m = fake_morphs(0, 4, r.clone());
        let fast = mse_score(&x, &m);
        let mut acc = 0.0;
        for i in 0..3 {
            for p in 0..256 {
                let d = x.data()[p] - r.data()[i * 256 + p];
                acc += d * d / 256.0;
            }
        }
        assert!((fast - acc / 3.0).abs() < 1e-12);

        // Symmetry: swapping roles of the two images leaves MSE unchanged.
        let y = Tensor::<f64>::randn(&[1, 1, 16, 16], 0.3, &mut rng);
        let mx = fake_morphs(0, 4, y.clone());
        let my = fake_morphs(0, 4, x.clone());
        assert!((mse_score(&x, &mx) - mse_score(&y, &my)).abs() < 1e-12);
    }

    #[test]
    fn loss_score_is_mse_part_plus_kl_part() {
        let model = DetectorVae::<f64>::new(ArchConfig::tiny(1, 4), 2);
        let mut rng = substream(2, "t", 0);
        let x = Tensor::<f64>::randn(&[1, 1, 16, 16], 0.2, &mut rng).map(|v| v.abs().min(1.0));
        let r = Tensor::<f64>::randn(&[4, 1, 16, 16], 0.2, &mut rng).map(|v| v.abs().min(1.0));
        let m = fake_morphs(0, 4, r.clone());
        let total = loss_score(&x, &m, &model).unwrap();

        let post = model.encoder.encode(&x);
        let kl = kl_to_precision_prior(&post.mu, &post.logvar, &model.beta())
            .unwrap();
        let mut sq = 0.0;
        for i in 0..4 {
            for p in 0..256 {
                let d = x.data()[p] - r.data()[i * 256 + p];
                sq += d * d;
            }
        }
        assert!((total - (sq / 4.0 + kl)).abs() < 1e-10);
    }

    #[test]
    fn perfect_morphs_and_zero_kl_give_zero_loss() {
        let mut model = DetectorVae::<f64>::new(ArchConfig::tiny(1, 4), 3);
        // Zero encoder head -> mu = 0, logvar = 0; beta = 1 -> KL = 0.
        for v in model.encoder.head.w.data_mut() {
            *v = 0.0;
        }
        for v in model.encoder.head.b.data_mut() {
            *v = 0.0;
        }
        let x = Tensor::<f64>::full(&[1, 1, 16, 16], 0.5);
        let m = fake_morphs(0, 4, x.clone());
        let total = loss_score(&x, &m, &model).unwrap();
        assert!(total.abs() < 1e-12);
    }

    #[test]
    fn ssim_identity_is_one() {
        let mut rng = substream(4, "t", 0);
        let x = Tensor::<f64>::randn(&[1, 1, 20, 20], 0.3, &mut rng).map(|v| v.abs().min(1.0));
        let s = ssim(&x, &x).unwrap();
        assert!((s - 1.0).abs() < 1e-12);
    }

    #[test]
    fn ssim_of_inverted_binary_image_is_negative() {
        // Checkerboard-ish binary image; inversion anti-correlates windows.
        let mut x = Tensor::<f64>::zeros(&[1, 1, 16, 16]);
        for r in 0..16 {
            for c in 0..16 {
                if (r / 2 + c / 2) % 2 == 0 {
                    x.data_mut()[r * 16 + c] = 1.0;
                }
            }
        }
        let inv = x.map(|v| 1.0 - v);
        let s = ssim(&x, &inv).unwrap();
        assert!(s < 0.0, "SSIM of inverted image should be negative: {s}");
    }

    #[test]
    fn ssim_matches_naive_reference_on_fixed_pairs() {
        // Independent scalar implementation: direct per-window Gaussian
        // sums, no separable filtering.
        fn naive_ssim(x: &Tensor<f64>, y: &Tensor<f64>) -> f64 {
            let (h, w) = (x.shape()[2], x.shape()[3]);
            let k1d = gaussian_kernel();
            let mut kern = [[0.0; SSIM_WINDOW]; SSIM_WINDOW];
            for i in 0..SSIM_WINDOW {
                for j in 0..SSIM_WINDOW {
                    kern[i][j] = k1d[i] * k1d[j];
                }
            }
            let mut acc = 0.0;
            let mut count = 0.0;
            for r0 in 0..=(h - SSIM_WINDOW) {
                for c0 in 0..=(w - SSIM_WINDOW) {
                    let (mut mx, mut my, mut mxx, mut myy, mut mxy) = (0.0, 0.0, 0.0, 0.0, 0.0);
                    for i in 0..SSIM_WINDOW {
                        for j in 0..SSIM_WINDOW {
                            let a = x.data()[(r0 + i) * w + c0 + j];
                            let b = y.data()[(r0 + i) * w + c0 + j];
                            let g = kern[i][j];
                            mx += g * a;
                            my += g * b;
                            mxx += g * a * a;
                            myy += g * b * b;
                            mxy += g * a * b;
                        }
                    }
                    let (sx, sy, sxy) = (mxx - mx * mx, myy - my * my, mxy - mx * my);
                    let num = (2.0 * mx * my + SSIM_C1) * (2.0 * sxy + SSIM_C2);
                    let den = (mx * mx + my * my + SSIM_C1) * (sx + sy + SSIM_C2);
                    acc += num / den;
                    count += 1.0;
                }
            }
            acc / count
        }

        for trial in 0..5u64 {
            let mut rng = substream(5, "pair", trial);
            let x = Tensor::<f64>::randn(&[1, 1, 18, 22], 0.25, &mut rng).map(|v| (v + 0.5).clamp(0.0, 1.0));
            let y = Tensor::<f64>::randn(&[1, 1, 18, 22], 0.25, &mut rng).map(|v| (v + 0.5).clamp(0.0, 1.0));
            let fast = ssim(&x, &y).unwrap();
            let slow = naive_ssim(&x, &y);
            assert!(
                (fast - slow).abs() <= 1e-6,
                "trial {trial}: {fast} vs {slow}"
            );
        }
    }

    #[test]
    fn ssim_bounded_and_monotone_toward_identity() {
        let mut rng = substream(6, "t", 0);
        let x = Tensor::<f64>::randn(&[1, 1, 16, 16], 0.25, &mut rng).map(|v| (v + 0.5).clamp(0.0, 1.0));
        let noise = Tensor::<f64>::randn(&[1, 1, 16, 16], 1.0, &mut rng);
        let mut prev = -2.0;
        for &eps in &[0.3, 0.1, 0.03, 0.0] {
            let y = x.zip_map(&noise, |a, n| (a + eps * n).clamp(0.0, 1.0));
            let s = ssim(&x, &y).unwrap();
            assert!((-1.0..=1.0).contains(&s), "SSIM out of range: {s}");
            assert!(s >= prev, "SSIM not monotone: {s} after {prev}");
            prev = s;
        }
        assert!((prev - 1.0).abs() < 1e-12);
    }

    #[test]
    fn small_images_are_rejected() {
        let x = Tensor::<f64>::zeros(&[1, 1, 8, 8]);
        assert!(matches!(
            ssim(&x, &x),
            Err(CoreError::ImageTooSmall { .. })
        ));
    }

    #[test]
    fn sc_vector_marks_sentinels_and_keeps_length() {
        let model = DetectorVae::<f64>::new(ArchConfig::tiny(1, 4), 7);
        let mut rng = substream(7, "t", 0);
        let x = Tensor::<f64>::randn(&[1, 1, 16, 16], 0.2, &mut rng).map(|v| v.abs().min(1.0));
        let recon = Tensor::<f64>::randn(&[2, 1, 16, 16], 0.2, &mut rng).map(|v| v.abs().min(1.0));
        let morphs = vec![
            CodeMorphs {
                code: 0,
                set: Some(fake_morphs(0, 4, recon)),
            },
            CodeMorphs { code: 2, set: None },
        ];
        let sc = sc_vector(&x, &morphs, Metric::Mse, &model).unwrap();
        assert_eq!(sc.k(), 2);
        assert_eq!(sc.codes, vec![0, 2]);
        assert!(!sc.sentinels[0] && sc.sentinels[1]);
        assert!(sc.scores[1].is_nan());

        let all_gone = vec![
            CodeMorphs { code: 0, set: None },
            CodeMorphs { code: 1, set: None },
        ];
        let sc2 = sc_vector(&x, &all_gone, Metric::Ssim, &model).unwrap();
        assert!(sc2.sentinels.iter().all(|&s| s));
    }

    #[test]
    fn csv_row_is_stable() {
        let sc = SCVector {
            metric: Metric::Mse,
            codes: vec![0, 1],
            scores: vec![0.5, f64::NAN],
            sentinels: vec![false, true],
        };
        assert_eq!(sc_csv_row(3, &sc), "3,mse,0.5,nan,01");
    }
}
