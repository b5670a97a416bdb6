//! Latent-code morphing: normal value ranges, informative-code selection,
//! and the iterative stochastic search that produces natural perturbations.
//!
//! Each selected code of a sample's posterior mean is perturbed within its
//! empirical normal range (fractiles over validation normals). Candidates
//! are drawn uniformly from a window that grows by `delta_r` per iteration
//! until enough in-range ("natural") values have been accepted; the decoder
//! then reconstructs all of them in one batch.

use alloc::vec;
use alloc::vec::Vec;

#[allow(unused_imports)]
use num_traits::Float;
use rand::Rng;

use crate::detector::quantile_linear;
use crate::error::{CoreError, CoreResult};
use crate::nn::{DetectorVae, Encoder};
use crate::rng::substream;
use crate::tensor::{Scalar, Tensor};

/// Empirical normal value range of one latent code.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct CodeRange {
    pub code: usize,
    pub low: f64,
    pub high: f64,
}

/// Search parameters. `delta_r_frac` scales the per-iteration window growth
/// by the code's range width.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct MorphParams {
    pub delta_r_frac: f64,
    pub batch: usize,
    pub morphs_per_code: usize,
    pub r0: f64,
    pub max_iters: usize,
    pub fractile_p: f64,
}

impl Default for MorphParams {
    fn default() -> Self {
        MorphParams {
            delta_r_frac: 0.05,
            batch: 16,
            morphs_per_code: 100,
            r0: 0.0,
            max_iters: 200,
            fractile_p: 0.01,
        }
    }
}

/// Accepted perturbations of one code plus their reconstructions.
#[derive(Clone, Debug)]
pub struct MorphSet<T> {
    pub code: usize,
    pub base: Tensor<T>,
    /// `[N, d]`; differs from `base` only at `code`.
    pub perturbed: Tensor<T>,
    /// Native-space reconstructions `[N, C, H, W]`.
    pub reconstructions: Tensor<T>,
    /// Iterations the search needed.
    pub iters: usize,
    /// Cumulative accepted count after each iteration.
    pub accept_history: Vec<usize>,
}

/// Morph outcome for one code; `None` marks a failed (exhausted) search,
/// which downstream scoring treats as a sentinel.
pub struct CodeMorphs<T> {
    pub code: usize,
    pub set: Option<MorphSet<T>>,
}

/// Per-code `[p, 1-p]` fractiles of already-encoded posterior means.
pub fn ranges_from_codes<T: Scalar>(mu: &Tensor<T>, p: f64) -> CoreResult<Vec<CodeRange>> {
    if mu.rows() == 0 {
        return Err(CoreError::EmptyValidation);
    }
    if !(0.0..0.5).contains(&p) {
        return Err(CoreError::DegenerateFractile(p));
    }
    let (n, d) = (mu.rows(), mu.row_len());
    let mut out = Vec::with_capacity(d);
    let mut col = vec![0.0f64; n];
    for j in 0..d {
        for i in 0..n {
            col[i] = mu.data()[i * d + j].as_f64();
        }
        col.sort_by(f64::total_cmp);
        let mut low = quantile_linear(&col, p);
        let mut high = quantile_linear(&col, 1.0 - p);
        if low >= high {
            // Degenerate column (e.g. identical validation images): widen.
            let eps = 1e-3;
            low = col[n / 2] - eps;
            high = col[n / 2] + eps;
        }
        out.push(CodeRange { code: j, low, high });
    }
    Ok(out)
}

/// Encodes the validation normals and derives per-code ranges.
pub fn estimate_ranges<T: Scalar>(
    encoder: &Encoder<T>,
    val: &Tensor<T>,
    p: f64,
) -> CoreResult<Vec<CodeRange>> {
    if val.rows() == 0 {
        return Err(CoreError::EmptyValidation);
    }
    let post = encoder.encode(val);
    ranges_from_codes(&post.mu, p)
}

/// Mean per-dimension KL(q(z_j|x) || N(0, beta_j^-1)) over a batch:
/// the informativeness proxy used to rank codes.
pub fn code_informativeness<T: Scalar>(
    mu: &Tensor<T>,
    logvar: &Tensor<T>,
    beta: &Tensor<T>,
) -> Vec<f64> {
    let (n, d) = (mu.rows(), mu.row_len());
    let mut kl = vec![0.0f64; d];
    for i in 0..n {
        for j in 0..d {
            let m = mu.data()[i * d + j].as_f64();
            let lv = logvar.data()[i * d + j].as_f64();
            let b = beta.data()[j].as_f64();
            kl[j] += 0.5 * (b * (m * m + lv.exp()) - 1.0 - b.ln() - lv);
        }
    }
    for v in kl.iter_mut() {
        *v /= n as f64;
    }
    kl
}

/// Top-`k` codes by mean KL, descending. `k = 0` or `k >= d` returns all.
pub fn select_codes<T: Scalar>(model: &DetectorVae<T>, val: &Tensor<T>, k: usize) -> Vec<usize> {
    let post = model.encoder.encode(val);
    let kl = code_informativeness(&post.mu, &post.logvar, &model.beta());
    let d = kl.len();
    let mut order: Vec<usize> = (0..d).collect();
    order.sort_by(|&a, &b| kl[b].total_cmp(&kl[a]).then(a.cmp(&b)));
    let take = if k == 0 || k >= d { d } else { k };
    order.truncate(take);
    order
}

/// Builds `[N, d]` latents equal to `base` except at `code`, then decodes
/// them in one batch.
pub fn decode_perturbed<T: Scalar>(
    model: &DetectorVae<T>,
    base: &Tensor<T>,
    code: usize,
    values: &[T],
) -> (Tensor<T>, Tensor<T>) {
    let d = base.len();
    let n = values.len();
    let mut latents = Tensor::zeros(&[n, d]);
    for (i, &v) in values.iter().enumerate() {
        latents.data_mut()[i * d..(i + 1) * d].copy_from_slice(base.data());
        latents.data_mut()[i * d + code] = v;
    }
    let recon = model.decoder.decode(&latents);
    (latents, recon)
}

/// Iterative stochastic search around `base[code]`: the sampling window
/// grows by `delta_r` each iteration; only values inside the code's normal
/// range count as natural. Fails with `SearchExhausted` when `max_iters`
/// passes without `morphs_per_code` acceptances — itself a strong anomaly
/// signal for the caller.
pub fn stochastic_search<T: Scalar, R: Rng + ?Sized>(
    model: &DetectorVae<T>,
    base: &Tensor<T>,
    range: &CodeRange,
    params: &MorphParams,
    rng: &mut R,
) -> CoreResult<MorphSet<T>> {
    assert!(params.morphs_per_code >= 1 && params.batch >= 1);
    assert!(params.delta_r_frac > 0.0);
    let code = range.code;
    let zj = base.data()[code].as_f64();
    let width = range.high - range.low;
    let delta_r = params.delta_r_frac * width;
    let wanted = params.morphs_per_code;

    let mut accepted: Vec<T> = Vec::with_capacity(wanted);
    let mut history = Vec::new();
    let mut r = params.r0;
    let mut iters = 0;
    while accepted.len() < wanted {
        if iters >= params.max_iters {
            return Err(CoreError::SearchExhausted {
                iters,
                accepted: accepted.len(),
                wanted,
            });
        }
        iters += 1;
        r += delta_r;
        for _ in 0..params.batch {
            if accepted.len() >= wanted {
                break;
            }
            let dz = f64::uniform(rng, -r, r);
            let cand = zj + dz;
            if cand >= range.low && cand <= range.high {
                accepted.push(T::of_f64(cand));
            }
        }
        history.push(accepted.len());
    }

    let (perturbed, reconstructions) = decode_perturbed(model, base, code, &accepted);
    Ok(MorphSet {
        code,
        base: base.clone(),
        perturbed,
        reconstructions,
        iters,
        accept_history: history,
    })
}

/// Picks the entries of `ranges` matching `codes`, in `codes` order.
pub fn ranges_for_codes(ranges: &[CodeRange], codes: &[usize]) -> Vec<CodeRange> {
    codes
        .iter()
        .map(|&c| {
            *ranges
                .iter()
                .find(|r| r.code == c)
                .expect("selected code has no range")
        })
        .collect()
}

/// Morphs every selected code of a single image; `selected` carries one
/// range per code to perturb. The base latent is the posterior mean;
/// per-code failures are recorded rather than fatal. RNG streams derive
/// from `(seed, sample_id, code)` so (sample, code) pairs are independent
/// and reproducible.
pub fn generate_all_morphs<T: Scalar>(
    model: &DetectorVae<T>,
    x: &Tensor<T>,
    selected: &[CodeRange],
    params: &MorphParams,
    seed: u64,
    sample_id: u64,
) -> Vec<CodeMorphs<T>> {
    assert_eq!(x.rows(), 1, "generate_all_morphs takes a single image");
    let post = model.encoder.encode(x);
    let d = post.mu.row_len();
    let base = Tensor::from_vec(&[d], post.mu.data().to_vec());
    selected
        .iter()
        .map(|range| {
            let code = range.code;
            let mut rng = substream(seed, "morph", (sample_id << 8) | code as u64);
            let set = stochastic_search(model, &base, range, params, &mut rng).ok();
            CodeMorphs { code, set }
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::ArchConfig;

    fn tiny_model(seed: u64) -> DetectorVae<f64> {
        DetectorVae::new(ArchConfig::tiny(1, 4), seed)
    }

    #[test]
    fn gaussian_codes_recover_normal_quantiles() {
        let mut rng = substream(1, "g", 0);
        let mu = Tensor::<f64>::randn(&[40_000, 2], 1.0, &mut rng);
        let ranges = ranges_from_codes(&mu, 0.01).unwrap();
        for r in &ranges {
            assert!((r.low - (-2.326)).abs() < 0.08, "low {}", r.low);
            assert!((r.high - 2.326).abs() < 0.08, "high {}", r.high);
        }
    }

    #[test]
    fn identical_validation_images_widen_to_epsilon_band() {
        let mu = Tensor::<f64>::full(&[50, 3], 1.25);
        let ranges = ranges_from_codes(&mu, 0.01).unwrap();
        for r in &ranges {
            assert!((r.low - (1.25 - 1e-3)).abs() < 1e-12);
            assert!((r.high - (1.25 + 1e-3)).abs() < 1e-12);
            assert!(r.low < r.high);
        }
    }

    #[test]
    fn half_fractile_is_rejected() {
        let mu = Tensor::<f64>::zeros(&[10, 2]);
        assert!(matches!(
            ranges_from_codes(&mu, 0.5),
            Err(CoreError::DegenerateFractile(_))
        ));
        assert!(matches!(
            estimate_ranges(&tiny_model(1).encoder, &Tensor::<f64>::zeros(&[0, 1, 16, 16]), 0.01),
            Err(CoreError::EmptyValidation)
        ));
    }

    #[test]
    fn collapsed_dimension_ranks_last() {
        // Column 1 is exactly the prior (mu = 0, sigma^2 = 1, beta = 1).
        let mut rng = substream(2, "g", 0);
        let n = 200;
        let mut mu = Tensor::<f64>::randn(&[n, 3], 1.0, &mut rng);
        let mut logvar = Tensor::<f64>::randn(&[n, 3], 0.3, &mut rng);
        for i in 0..n {
            mu.data_mut()[i * 3 + 1] = 0.0;
            logvar.data_mut()[i * 3 + 1] = 0.0;
        }
        let beta = Tensor::<f64>::full(&[3], 1.0);
        let kl = code_informativeness(&mu, &logvar, &beta);
        assert!(kl[1].abs() < 1e-12);
        assert!(kl[0] > kl[1] && kl[2] > kl[1]);
    }

    #[test]
    fn select_codes_with_k_equal_d_is_identity_set() {
        let model = tiny_model(3);
        let mut rng = substream(3, "x", 0);
        let val = Tensor::<f64>::randn(&[6, 1, 16, 16], 0.3, &mut rng).map(|v| v.abs().min(1.0));
        let mut codes = select_codes(&model, &val, 4);
        codes.sort_unstable();
        assert_eq!(codes, vec![0, 1, 2, 3]);
        let all = select_codes(&model, &val, 0);
        assert_eq!(all.len(), 4);
    }

    #[test]
    fn ranking_matches_direct_recomputation() {
        let model = tiny_model(4);
        let mut rng = substream(4, "x", 0);
        let val = Tensor::<f64>::randn(&[8, 1, 16, 16], 0.3, &mut rng).map(|v| v.abs().min(1.0));
        let order = select_codes(&model, &val, 0);

        let post = model.encoder.encode(&val);
        let beta = model.beta();
        let (n, d) = (post.mu.rows(), 4);
        let mut brute = vec![0.0f64; d];
        for i in 0..n {
            for j in 0..d {
                let m = post.mu.data()[i * d + j];
                let lv = post.logvar.data()[i * d + j];
                let b = beta.data()[j];
                brute[j] += 0.5 * (b * (m * m + lv.exp()) - 1.0 - b.ln() - lv) / n as f64;
            }
        }
        for w in order.windows(2) {
            assert!(brute[w[0]] >= brute[w[1]] - 1e-12);
        }
    }

    #[test]
    fn centered_base_with_wide_initial_radius_finishes_immediately() {
        let model = tiny_model(5);
        let base = Tensor::<f64>::zeros(&[4]);
        let range = CodeRange {
            code: 2,
            low: -1.0,
            high: 1.0,
        };
        let params = MorphParams {
            batch: 16,
            morphs_per_code: 16,
            r0: 1.0 - 0.05 * 2.0, // one delta_r step reaches the halfwidth
            ..MorphParams::default()
        };
        let mut rng = substream(5, "s", 0);
        let set = stochastic_search(&model, &base, &range, &params, &mut rng).unwrap();
        assert_eq!(set.iters, 1);
        assert_eq!(set.accept_history, vec![16]);
    }

    #[test]
    fn unreachable_range_exhausts_search() {
        let model = tiny_model(6);
        let mut base = Tensor::<f64>::zeros(&[4]);
        base.data_mut()[1] = 100.0;
        let range = CodeRange {
            code: 1,
            low: -1.0,
            high: 1.0,
        };
        let params = MorphParams {
            max_iters: 10,
            ..MorphParams::default()
        };
        let mut rng = substream(6, "s", 0);
        match stochastic_search(&model, &base, &range, &params, &mut rng) {
            Err(CoreError::SearchExhausted { iters, accepted, wanted }) => {
                assert_eq!(iters, 10);
                assert_eq!(accepted, 0);
                assert_eq!(wanted, 100);
            }
            other => panic!("expected SearchExhausted, got {other:?}"),
        }
    }

    #[test]
    fn accepted_values_stay_in_range_and_history_is_monotone() {
        let model = tiny_model(7);
        let range = CodeRange {
            code: 0,
            low: -0.7,
            high: 0.4,
        };
        let params = MorphParams {
            morphs_per_code: 40,
            ..MorphParams::default()
        };
        let mut total = 0usize;
        for trial in 0..250u64 {
            let mut rng = substream(7, "s", trial);
            let mut base = Tensor::<f64>::zeros(&[4]);
            base.data_mut()[0] = f64::uniform(&mut rng, -1.0, 1.0);
            let set = stochastic_search(&model, &base, &range, &params, &mut rng).unwrap();
            for i in 0..set.perturbed.rows() {
                let v = set.perturbed.data()[i * 4];
                assert!(v >= range.low && v <= range.high, "value {v} escaped range");
                total += 1;
            }
            for w in set.accept_history.windows(2) {
                assert!(w[1] >= w[0], "acceptance count decreased");
            }
        }
        assert!(total >= 10_000);
    }

    #[test]
    fn morphs_touch_only_the_selected_dimension() {
        let model = tiny_model(8);
        let mut rng = substream(8, "s", 0);
        let base = Tensor::<f64>::randn(&[4], 1.0, &mut rng);
        let range = CodeRange {
            code: 3,
            low: base.data()[3] - 0.5,
            high: base.data()[3] + 0.5,
        };
        let params = MorphParams {
            morphs_per_code: 20,
            ..MorphParams::default()
        };
        let set = stochastic_search(&model, &base, &range, &params, &mut rng).unwrap();
        for i in 0..20 {
            for j in 0..4 {
                if j != 3 {
                    assert_eq!(set.perturbed.data()[i * 4 + j], base.data()[j]);
                }
            }
        }
        assert_eq!(set.reconstructions.shape(), [20, 1, 16, 16]);
    }

    #[test]
    fn zero_perturbation_control_reproduces_plain_reconstruction() {
        let model = tiny_model(9);
        let mut rng = substream(9, "z", 0);
        let base = Tensor::<f64>::randn(&[4], 1.0, &mut rng);
        let values = vec![base.data()[2]; 5];
        let (latents, recon) = decode_perturbed(&model, &base, 2, &values);
        for i in 0..5 {
            assert_eq!(latents.row(i), base.data());
        }
        let plain = model
            .decoder
            .decode(&Tensor::from_vec(&[1, 4], base.data().to_vec()));
        for i in 0..5 {
            assert_eq!(recon.row(i), plain.row(0));
        }
    }

    #[test]
    fn generate_all_morphs_counts_and_determinism() {
        let model = tiny_model(10);
        let mut rng = substream(10, "x", 0);
        let val = Tensor::<f64>::randn(&[20, 1, 16, 16], 0.3, &mut rng).map(|v| v.abs().min(1.0));
        let ranges = estimate_ranges(&model.encoder, &val, 0.05).unwrap();
        let x = val.gather_rows(&[0]);
        let params = MorphParams {
            morphs_per_code: 8,
            ..MorphParams::default()
        };
        let selected = ranges_for_codes(&ranges, &[0, 2]);
        let a = generate_all_morphs(&model, &x, &selected, &params, 10, 0);
        let b = generate_all_morphs(&model, &x, &selected, &params, 10, 0);
        assert_eq!(a.len(), 2);
        for (ca, cb) in a.iter().zip(&b) {
            let (sa, sb) = (ca.set.as_ref().unwrap(), cb.set.as_ref().unwrap());
            assert_eq!(sa.perturbed, sb.perturbed);
            assert_eq!(sa.reconstructions.rows(), 8);
        }
    }
}
