//! Alternating two-player training.
//!
//! Each step consumes two independent batches. The first drives the VAE
//! update: encoder trains on `lambda*L_KL + L_R + gamma*L_TC`, decoder on
//! `L_R`, log-precisions on `lambda*L_KL + eta*L_reg` — one backward pass
//! over the weighted total delivers exactly those routings because no other
//! term touches the respective parameters, and the discriminator is bound
//! as a constant so the TC gradient flows through it into the encoder
//! without updating it. The second batch is encoded, dimension-permuted and
//! used (detached) for the discriminator's own cross-entropy step.

use alloc::vec::Vec;

#[allow(unused_imports)]
use num_traits::Float;
use rand::Rng;

use crate::error::{CoreError, CoreResult};
use crate::graph::Graph;
use crate::nn::{ArchConfig, DetectorVae};
use crate::objective::{build_disc_loss, build_objective, permute_dims, Hyper, LossBreakdown};
use crate::rng::substream;
use crate::tensor::{pad_spatial, Scalar, Tensor};

/// Dataset identity; decides architecture and default epochs.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum DatasetId {
    Mnist,
    Fmnist,
    Cifar10,
}

impl DatasetId {
    pub fn arch(&self) -> ArchConfig {
        match self {
            DatasetId::Mnist => ArchConfig::mnist(),
            DatasetId::Fmnist => ArchConfig::fmnist(),
            DatasetId::Cifar10 => ArchConfig::cifar10(),
        }
    }

    pub fn default_epochs(&self) -> usize {
        match self {
            DatasetId::Cifar10 => 100,
            _ => 30,
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            DatasetId::Mnist => "mnist",
            DatasetId::Fmnist => "fmnist",
            DatasetId::Cifar10 => "cifar10",
        }
    }
}

/// Training hyperparameters.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr_vae: f64,
    pub lr_disc: f64,
    pub hyper: Hyper,
    pub seed: u64,
    pub latent_dim: usize,
    pub dataset: DatasetId,
    pub normal_class: u8,
    /// When false the prior precisions stay frozen at beta = 1
    /// (the plain-VAE baseline configuration).
    pub learn_precisions: bool,
}

impl TrainConfig {
    pub fn defaults(dataset: DatasetId, normal_class: u8, seed: u64) -> Self {
        TrainConfig {
            epochs: dataset.default_epochs(),
            batch_size: 64,
            lr_vae: 1e-4,
            lr_disc: 1e-4,
            hyper: Hyper::default(),
            seed,
            latent_dim: dataset.arch().latent_dim,
            dataset,
            normal_class,
            learn_precisions: true,
        }
    }

    /// Plain-VAE baseline: no TC term, no precision learning, unweighted KL.
    pub fn plain_vae(dataset: DatasetId, normal_class: u8, seed: u64) -> Self {
        TrainConfig {
            hyper: Hyper {
                gamma: 0.0,
                eta: 0.0,
                lambda_lkd: 1.0,
            },
            learn_precisions: false,
            ..Self::defaults(dataset, normal_class, seed)
        }
    }

    pub fn validate(&self) -> CoreResult<()> {
        use alloc::string::ToString;
        if self.epochs == 0 && false {
            // epochs = 0 is allowed: it produces an initialized checkpoint.
        }
        if self.batch_size < 2 {
            return Err(CoreError::InvalidArgument(
                "batch_size must be at least 2 (permute_dims needs a batch)".to_string(),
            ));
        }
        if self.lr_vae < 0.0 || self.lr_disc < 0.0 {
            return Err(CoreError::InvalidArgument(
                "learning rates must be non-negative".to_string(),
            ));
        }
        Ok(())
    }
}

/// Adam with per-block first/second moments.
pub struct Adam<T> {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub m: Vec<Tensor<T>>,
    pub v: Vec<Tensor<T>>,
    pub t: u64,
}

impl<T: Scalar> Adam<T> {
    pub fn new(lr: f64, shapes: &[Vec<usize>]) -> Self {
        Adam {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            m: shapes.iter().map(|s| Tensor::zeros(s)).collect(),
            v: shapes.iter().map(|s| Tensor::zeros(s)).collect(),
            t: 0,
        }
    }

    /// Applies one update. `grads[i] = None` means the block received no
    /// gradient this step and is left untouched (moments included).
    pub fn step(&mut self, params: &mut [&mut Tensor<T>], grads: &[Option<Tensor<T>>]) {
        assert_eq!(params.len(), self.m.len());
        assert_eq!(grads.len(), self.m.len());
        self.t += 1;
        let b1 = T::of_f64(self.beta1);
        let b2 = T::of_f64(self.beta2);
        let one = T::one();
        let bc1 = T::of_f64(1.0 - self.beta1.powi(self.t as i32));
        let bc2 = T::of_f64(1.0 - self.beta2.powi(self.t as i32));
        let lr = T::of_f64(self.lr);
        let eps = T::of_f64(self.eps);
        for ((p, g), (m, v)) in params
            .iter_mut()
            .zip(grads)
            .zip(self.m.iter_mut().zip(self.v.iter_mut()))
        {
            let g = match g {
                Some(g) => g,
                None => continue,
            };
            for i in 0..g.len() {
                let gi = g.data()[i];
                let mi = b1 * m.data()[i] + (one - b1) * gi;
                let vi = b2 * v.data()[i] + (one - b2) * gi * gi;
                m.data_mut()[i] = mi;
                v.data_mut()[i] = vi;
                let mh = mi / bc1;
                let vh = vi / bc2;
                p.data_mut()[i] = p.data()[i] - lr * mh / (vh.sqrt() + eps);
            }
        }
    }
}

/// Per-step diagnostics: the VAE loss terms plus the discriminator loss
/// (absent when the TC player is disabled by gamma = 0).
#[derive(Clone, Copy, Debug)]
pub struct StepStats {
    pub breakdown: LossBreakdown,
    pub disc_loss: Option<f64>,
}

/// Model plus optimizer state; owns sequencing and the RNG substreams.
pub struct TrainState<T: Scalar> {
    pub model: DetectorVae<T>,
    pub opt_vae: Adam<T>,
    pub opt_disc: Adam<T>,
    pub step: u64,
    pub seed: u64,
}

/// Blocks 0..24 of [`DetectorVae::visit_blocks`] belong to the VAE player
/// (12 encoder + 12 decoder + log_beta is last overall); the rest are the
/// discriminator's.
const ENC_BLOCKS: usize = 12;
const DEC_BLOCKS: usize = 12;

impl<T: Scalar> TrainState<T> {
    pub fn new(arch: ArchConfig, config: &TrainConfig) -> Self {
        let model = DetectorVae::<T>::new(arch, config.seed);
        Self::from_model(model, config)
    }

    pub fn from_model(model: DetectorVae<T>, config: &TrainConfig) -> Self {
        let mut all_shapes: Vec<Vec<usize>> = Vec::new();
        model.visit_blocks(|_, t| all_shapes.push(t.shape().to_vec()));
        let n = all_shapes.len();
        let disc_blocks = n - ENC_BLOCKS - DEC_BLOCKS - 1;
        let mut vae_shapes: Vec<Vec<usize>> =
            all_shapes[..ENC_BLOCKS + DEC_BLOCKS].to_vec();
        vae_shapes.push(all_shapes[n - 1].clone()); // log_beta
        let disc_shapes = all_shapes[ENC_BLOCKS + DEC_BLOCKS..n - 1].to_vec();
        debug_assert_eq!(disc_shapes.len(), disc_blocks);
        TrainState {
            model,
            opt_vae: Adam::new(config.lr_vae, &vae_shapes),
            opt_disc: Adam::new(config.lr_disc, &disc_shapes),
            step: 0,
            seed: config.seed,
        }
    }

    /// One alternating update from two native-space batches.
    pub fn train_step(
        &mut self,
        x: &Tensor<T>,
        x_second: &Tensor<T>,
        config: &TrainConfig,
    ) -> CoreResult<StepStats> {
        let hyper = &config.hyper;
        let with_tc = hyper.gamma != 0.0;
        let arch = self.model.arch;
        let (mh, mw) = arch.model_hw;
        let d = arch.latent_dim;
        let n = x.rows();
        let n2 = x_second.rows();
        if n2 < 2 {
            return Err(CoreError::BatchTooSmall(n2));
        }

        let mut noise_rng = substream(self.seed, "step-noise", self.step);
        let noise = Tensor::<T>::randn(&[n, d], T::one(), &mut noise_rng);

        // --- Player 1: encoder/decoder/precisions against the objective.
        let xm = pad_spatial(x, mh, mw);
        let mut g = Graph::<T>::new();
        let be = self.model.encoder.bind(&mut g, true);
        let bd = self.model.decoder.bind(&mut g, true);
        let bdisc = self.model.disc.bind(&mut g, false);
        let lb = g.param(self.model.log_beta.clone());
        let xv = g.input(xm);
        let nv = g.input(noise);
        let vars =
            build_objective(&mut g, &self.model, &be, &bd, &bdisc, lb, xv, nv, hyper, with_tc);
        let breakdown = LossBreakdown {
            l_r: g.value(vars.l_r).item().as_f64(),
            l_kl: g.value(vars.l_kl).item().as_f64(),
            l_tc: g.value(vars.l_tc).item().as_f64(),
            l_reg: g.value(vars.l_reg).item().as_f64(),
            total: g.value(vars.total).item().as_f64(),
        };
        if !breakdown.all_finite() {
            return Err(CoreError::NonFiniteLoss {
                step: self.step,
                term: non_finite_term(&breakdown),
            });
        }

        let z_real = g.value(vars.z).clone();
        let mut grads = g.backward(vars.total);
        let mut grad_list: Vec<Option<Tensor<T>>> = Vec::with_capacity(25);
        for v in be.param_vars().into_iter().chain(bd.param_vars()) {
            grad_list.push(grads.take(v));
        }
        grad_list.push(if config.learn_precisions {
            grads.take(lb)
        } else {
            None
        });
        drop(g);

        {
            let mut refs: Vec<&mut Tensor<T>> = Vec::with_capacity(25);
            let mut blocks: Vec<*mut Tensor<T>> = Vec::new();
            self.model.visit_blocks_mut(|_, t| blocks.push(t as *mut _));
            let total = blocks.len();
            // Safety: visit_blocks_mut yields distinct fields.
            unsafe {
                for &b in &blocks[..ENC_BLOCKS + DEC_BLOCKS] {
                    refs.push(&mut *b);
                }
                refs.push(&mut *blocks[total - 1]);
            }
            self.opt_vae.step(&mut refs, &grad_list);
        }

        // --- Player 2: discriminator on detached z vs permuted z'. Skipped
        // entirely when the TC term is disabled.
        let disc_loss = if with_tc {
            let post2 = self.model.encoder.encode(x_second);
            let mut noise2_rng = substream(self.seed, "step-noise2", self.step);
            let noise2 = Tensor::<T>::randn(&[n2, d], T::one(), &mut noise2_rng);
            let z_second = crate::nn::reparameterize(&post2, &noise2);
            let mut perm_rng = substream(self.seed, "step-perm", self.step);
            let z_perm = permute_dims(&z_second, &mut perm_rng)?;

            let mut g2 = Graph::<T>::new();
            let bdisc2 = self.model.disc.bind(&mut g2, true);
            let zr = g2.input(z_real);
            let zp = g2.input(z_perm);
            let dloss = build_disc_loss(&mut g2, &self.model, &bdisc2, zr, zp);
            let disc_loss = g2.value(dloss).item().as_f64();
            if !disc_loss.is_finite() {
                return Err(CoreError::NonFiniteLoss {
                    step: self.step,
                    term: "disc",
                });
            }
            let mut dgrads = g2.backward(dloss);
            let dgrad_list: Vec<Option<Tensor<T>>> = bdisc2
                .param_vars()
                .into_iter()
                .map(|v| dgrads.take(v))
                .collect();
            drop(g2);

            let mut blocks: Vec<*mut Tensor<T>> = Vec::new();
            self.model.visit_blocks_mut(|_, t| blocks.push(t as *mut _));
            let total = blocks.len();
            let mut refs: Vec<&mut Tensor<T>> = Vec::new();
            unsafe {
                for &b in &blocks[ENC_BLOCKS + DEC_BLOCKS..total - 1] {
                    refs.push(&mut *b);
                }
            }
            self.opt_disc.step(&mut refs, &dgrad_list);
            Some(disc_loss)
        } else {
            None
        };

        self.step += 1;
        Ok(StepStats {
            breakdown,
            disc_loss,
        })
    }
}

fn non_finite_term(b: &LossBreakdown) -> &'static str {
    if !b.l_r.is_finite() {
        "l_r"
    } else if !b.l_kl.is_finite() {
        "l_kl"
    } else if !b.l_tc.is_finite() {
        "l_tc"
    } else if !b.l_reg.is_finite() {
        "l_reg"
    } else {
        "total"
    }
}

/// Deterministic epoch shuffling: each epoch pairs up consecutive batches
/// from one pass over the shuffled indices.
pub fn epoch_batch_pairs(
    n: usize,
    batch_size: usize,
    seed: u64,
    epoch: u64,
) -> Vec<(Vec<usize>, Vec<usize>)> {
    let mut idx: Vec<usize> = (0..n).collect();
    let mut rng = substream(seed, "epoch-shuffle", epoch);
    for i in (1..n).rev() {
        let k = rng.random_range(0..=i);
        idx.swap(i, k);
    }
    let mut out = Vec::new();
    let mut chunks = idx.chunks_exact(batch_size);
    loop {
        let a = match chunks.next() {
            Some(c) => c.to_vec(),
            None => break,
        };
        let b = match chunks.next() {
            Some(c) => c.to_vec(),
            None => break,
        };
        out.push((a, b));
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::substream;

    fn synthetic_batch(n: usize, hw: usize, seed: u64) -> Tensor<f64> {
        // Bright square on dark background, position varies per sample.
        let mut rng = substream(seed, "data", 0);
        let mut t = Tensor::<f64>::zeros(&[n, 1, hw, hw]);
        for i in 0..n {
            let cx = 2 + (rng.random_range(0..(hw - 8)));
            let cy = 2 + (rng.random_range(0..(hw - 8)));
            for dy in 0..4 {
                for dx in 0..4 {
                    t.data_mut()[i * hw * hw + (cy + dy) * hw + (cx + dx)] = 0.9;
                }
            }
        }
        t
    }

    fn tiny_config(seed: u64) -> TrainConfig {
        TrainConfig {
            epochs: 1,
            batch_size: 8,
            lr_vae: 1e-3,
            lr_disc: 1e-3,
            hyper: Hyper {
                gamma: 2.0,
                eta: 0.1,
                lambda_lkd: 0.1,
            },
            seed,
            latent_dim: 4,
            dataset: DatasetId::Mnist,
            normal_class: 0,
            learn_precisions: true,
        }
    }

    #[test]
    fn loss_decreases_on_synthetic_data() {
        let arch = ArchConfig::tiny(1, 4);
        let cfg = tiny_config(21);
        let mut state = TrainState::<f64>::new(arch, &cfg);
        let data = synthetic_batch(64, 16, 21);
        let mut early = 0.0;
        let mut late = 0.0;
        let steps = 120;
        for s in 0..steps {
            let pairs = epoch_batch_pairs(64, 8, 21, s as u64);
            let (a, b) = &pairs[s % pairs.len()];
            let xa = data.gather_rows(a);
            let xb = data.gather_rows(b);
            let stats = state.train_step(&xa, &xb, &cfg).unwrap();
            if s < 10 {
                early += stats.breakdown.l_r;
            }
            if s >= steps - 10 {
                late += stats.breakdown.l_r;
            }
        }
        assert!(
            late < early,
            "reconstruction did not improve: early {early}, late {late}"
        );
    }

    #[test]
    fn zero_learning_rates_leave_parameters_unchanged() {
        let arch = ArchConfig::tiny(1, 4);
        let mut cfg = tiny_config(22);
        cfg.lr_vae = 0.0;
        cfg.lr_disc = 0.0;
        let mut state = TrainState::<f64>::new(arch, &cfg);
        let mut before = Vec::new();
        state.model.visit_blocks(|_, t| before.push(t.clone()));
        let data = synthetic_batch(16, 16, 22);
        let xa = data.gather_rows(&(0..8).collect::<Vec<_>>());
        let xb = data.gather_rows(&(8..16).collect::<Vec<_>>());
        state.train_step(&xa, &xb, &cfg).unwrap();
        let mut after = Vec::new();
        state.model.visit_blocks(|_, t| after.push(t.clone()));
        assert_eq!(before, after);
    }

    #[test]
    fn same_seed_gives_bitwise_identical_states() {
        let arch = ArchConfig::tiny(1, 4);
        let cfg = tiny_config(23);
        let data = synthetic_batch(32, 16, 23);
        let run = || {
            let mut state = TrainState::<f64>::new(arch, &cfg);
            for s in 0..5u64 {
                let pairs = epoch_batch_pairs(32, 8, cfg.seed, s);
                let (a, b) = &pairs[s as usize % pairs.len()];
                state
                    .train_step(&data.gather_rows(a), &data.gather_rows(b), &cfg)
                    .unwrap();
            }
            let mut blocks = Vec::new();
            state.model.visit_blocks(|_, t| blocks.push(t.clone()));
            blocks
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn decoder_gradient_ignores_discriminator_parameters() {
        // \nabla_theta(L_R) must not depend on the discriminator: gradient
        // isolation between the two players.
        let arch = ArchConfig::tiny(1, 4);
        let cfg = tiny_config(24);
        let data = synthetic_batch(8, 16, 24);
        let noise = Tensor::<f64>::randn(&[8, 4], 1.0, &mut substream(24, "n", 0));

        let dec_grads = |state: &TrainState<f64>| -> Vec<Tensor<f64>> {
            let mut g = Graph::<f64>::new();
            let be = state.model.encoder.bind(&mut g, true);
            let bd = state.model.decoder.bind(&mut g, true);
            let bdisc = state.model.disc.bind(&mut g, false);
            let lb = g.param(state.model.log_beta.clone());
            let xv = g.input(data.clone());
            let nv = g.input(noise.clone());
            let vars = build_objective(
                &mut g,
                &state.model,
                &be,
                &bd,
                &bdisc,
                lb,
                xv,
                nv,
                &cfg.hyper,
                true,
            );
            let mut grads = g.backward(vars.total);
            bd.param_vars()
                .into_iter()
                .map(|v| grads.take(v).unwrap())
                .collect()
        };

        let mut state = TrainState::<f64>::new(arch, &cfg);
        let before = dec_grads(&state);
        // Kick the discriminator hard.
        for l in state.model.disc.layers.iter_mut() {
            for v in l.w.data_mut() {
                *v += 0.5;
            }
        }
        let after = dec_grads(&state);
        assert_eq!(before, after);
    }

    #[test]
    fn precision_regularizer_pulls_beta_toward_one() {
        let arch = ArchConfig::tiny(1, 4);
        let mut cfg = tiny_config(25);
        cfg.hyper.eta = 10.0;
        cfg.lr_vae = 1e-2;
        let mut state = TrainState::<f64>::new(arch, &cfg);
        // Start away from beta = 1.
        for v in state.model.log_beta.data_mut() {
            *v = 0.8;
        }
        let data = synthetic_batch(32, 16, 25);
        let start =
            crate::objective::precision_regularizer(&state.model.beta()).unwrap();
        for s in 0..30u64 {
            let pairs = epoch_batch_pairs(32, 8, cfg.seed, s);
            let (a, b) = &pairs[s as usize % pairs.len()];
            state
                .train_step(&data.gather_rows(a), &data.gather_rows(b), &cfg)
                .unwrap();
        }
        let end = crate::objective::precision_regularizer(&state.model.beta()).unwrap();
        assert!(end < start, "beta did not drift toward 1: {start} -> {end}");
    }

    #[test]
    fn epoch_pairs_are_disjoint_and_deterministic() {
        let p1 = epoch_batch_pairs(20, 4, 7, 3);
        let p2 = epoch_batch_pairs(20, 4, 7, 3);
        assert_eq!(p1, p2);
        let mut seen = alloc::collections::BTreeSet::new();
        for (a, b) in &p1 {
            for &i in a.iter().chain(b) {
                assert!(seen.insert(i), "index {i} appeared twice in one epoch");
            }
        }
        assert_eq!(seen.len(), 16); // 2 pairs of 2 batches of 4; remainder dropped
    }

    #[test]
    fn discriminator_learns_correlated_vs_permuted() {
        // Synthetic task: strongly correlated 4-d Gaussians vs their
        // dimension-permuted counterparts; the discriminator should reach
        // high accuracy, and the TC estimate on factorized data should stay
        // near zero afterwards.
        let arch = ArchConfig::tiny(1, 4);
        let cfg = tiny_config(26);
        let mut state = TrainState::<f64>::new(arch, &cfg);
        let mut opt = Adam::new(
            1e-3,
            &{
                let mut shapes = Vec::new();
                state.model.disc.layers.iter().for_each(|l| {
                    shapes.push(l.w.shape().to_vec());
                    shapes.push(l.b.shape().to_vec());
                });
                shapes.push(state.model.disc.head.w.shape().to_vec());
                shapes.push(state.model.disc.head.b.shape().to_vec());
                shapes
            },
        );

        let correlated = |n: usize, rng: &mut rand_chacha::ChaCha8Rng| -> Tensor<f64> {
            let mut t = Tensor::<f64>::zeros(&[n, 4]);
            for i in 0..n {
                let shared = f64::standard_normal(rng);
                for j in 0..4 {
                    t.data_mut()[i * 4 + j] = shared + 0.1 * f64::standard_normal(rng);
                }
            }
            t
        };

        let mut rng = substream(26, "task", 0);
        for step in 0..300 {
            let z = correlated(32, &mut rng);
            let mut prng = substream(26, "taskperm", step);
            let zp = permute_dims(&z, &mut prng).unwrap();
            let mut g = Graph::<f64>::new();
            let b = state.model.disc.bind(&mut g, true);
            let zr = g.input(z);
            let zpv = g.input(zp);
            let loss = build_disc_loss(&mut g, &state.model, &b, zr, zpv);
            let mut grads = g.backward(loss);
            let glist: Vec<Option<Tensor<f64>>> =
                b.param_vars().into_iter().map(|v| grads.take(v)).collect();
            drop(g);
            let mut refs: Vec<&mut Tensor<f64>> = Vec::new();
            for l in state.model.disc.layers.iter_mut() {
                refs.push(&mut l.w);
                refs.push(&mut l.b);
            }
            refs.push(&mut state.model.disc.head.w);
            refs.push(&mut state.model.disc.head.b);
            opt.step(&mut refs, &glist);
        }

        // Accuracy on held-out data.
        let z = correlated(256, &mut rng);
        let mut prng = substream(26, "taskperm", 999);
        let zp = permute_dims(&z, &mut prng).unwrap();
        let lr = state.model.disc.discriminate(&z);
        let lp = state.model.disc.discriminate(&zp);
        let mut correct = 0;
        for row in lr.data().chunks(2) {
            if row[0] > row[1] {
                correct += 1;
            }
        }
        for row in lp.data().chunks(2) {
            if row[1] > row[0] {
                correct += 1;
            }
        }
        let acc = correct as f64 / 512.0;
        assert!(acc > 0.9, "discriminator accuracy {acc}");
    }

    #[test]
    fn converged_discriminator_on_factorized_data_estimates_zero_tc() {
        // When q(z) is already factorized, permuting dimensions does not
        // change the distribution, so a converged discriminator stays
        // uninformative and the TC estimate sits near zero.
        let arch = ArchConfig::tiny(1, 4);
        let cfg = tiny_config(27);
        let mut state = TrainState::<f64>::new(arch, &cfg);
        let mut shapes = Vec::new();
        state.model.disc.layers.iter().for_each(|l| {
            shapes.push(l.w.shape().to_vec());
            shapes.push(l.b.shape().to_vec());
        });
        shapes.push(state.model.disc.head.w.shape().to_vec());
        shapes.push(state.model.disc.head.b.shape().to_vec());
        let mut opt = Adam::new(1e-3, &shapes);

        let mut rng = substream(27, "task", 0);
        for step in 0..300 {
            let z = Tensor::<f64>::randn(&[32, 4], 1.0, &mut rng);
            let mut prng = substream(27, "taskperm", step);
            let zp = permute_dims(&z, &mut prng).unwrap();
            let mut g = Graph::<f64>::new();
            let b = state.model.disc.bind(&mut g, true);
            let zr = g.input(z);
            let zpv = g.input(zp);
            let loss = build_disc_loss(&mut g, &state.model, &b, zr, zpv);
            let mut grads = g.backward(loss);
            let glist: Vec<Option<Tensor<f64>>> =
                b.param_vars().into_iter().map(|v| grads.take(v)).collect();
            drop(g);
            let mut refs: Vec<&mut Tensor<f64>> = Vec::new();
            for l in state.model.disc.layers.iter_mut() {
                refs.push(&mut l.w);
                refs.push(&mut l.b);
            }
            refs.push(&mut state.model.disc.head.w);
            refs.push(&mut state.model.disc.head.b);
            opt.step(&mut refs, &glist);
        }

        let mut frng = substream(27, "fact", 0);
        let factorized = Tensor::<f64>::randn(&[512, 4], 1.0, &mut frng);
        let tc = crate::objective::tc_estimate(&state.model.disc.discriminate(&factorized));
        assert!(tc.abs() < 0.1, "TC estimate on factorized data: {tc}");
    }
}
