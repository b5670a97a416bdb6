//! Encoder, decoder and total-correlation discriminator.
//!
//! All datasets share one convolutional stack (inputs are zero-padded to
//! 32x32), with per-dataset latent width and decoder hidden width. Each
//! network knows how to bind its parameters into a [`Graph`] and build its
//! forward pass there; inference reuses the same graph-building path with
//! untracked parameters, so there is a single forward implementation.

use alloc::vec;
use alloc::vec::Vec;

#[allow(unused_imports)]
use num_traits::Float;
use rand::Rng;

use crate::graph::{Graph, Var};
use crate::rng::substream;
use crate::tensor::{crop_spatial, pad_spatial, ConvSpec, Scalar, Tensor};

/// Network geometry. `model_hw` is the shared convolutional input size;
/// `native_hw` is the dataset's own image size.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ArchConfig {
    pub channels: usize,
    pub native_hw: (usize, usize),
    pub model_hw: (usize, usize),
    pub latent_dim: usize,
    pub enc_hidden: usize,
    pub dec_hidden: usize,
    pub disc_hidden: usize,
    pub disc_depth: usize,
}

impl ArchConfig {
    pub fn mnist() -> Self {
        ArchConfig {
            channels: 1,
            native_hw: (28, 28),
            model_hw: (32, 32),
            latent_dim: 20,
            enc_hidden: 128,
            dec_hidden: 128,
            disc_hidden: 1000,
            disc_depth: 6,
        }
    }

    pub fn fmnist() -> Self {
        Self::mnist()
    }

    pub fn cifar10() -> Self {
        ArchConfig {
            channels: 3,
            native_hw: (32, 32),
            model_hw: (32, 32),
            latent_dim: 40,
            enc_hidden: 128,
            dec_hidden: 512,
            disc_hidden: 1000,
            disc_depth: 6,
        }
    }

    /// Tiny instantiation for fast tests; same topology, smaller widths.
    pub fn tiny(channels: usize, latent_dim: usize) -> Self {
        ArchConfig {
            channels,
            native_hw: (16, 16),
            model_hw: (16, 16),
            latent_dim,
            enc_hidden: 16,
            dec_hidden: 16,
            disc_hidden: 32,
            disc_depth: 2,
        }
    }
}

/// Per-sample Gaussian posterior over latent codes.
#[derive(Clone, Debug)]
pub struct LatentPosterior<T> {
    pub mu: Tensor<T>,
    pub logvar: Tensor<T>,
    /// Sampled codes; filled in by [`reparameterize`].
    pub z: Option<Tensor<T>>,
}

/// z = mu + exp(logvar/2) * noise, with externally supplied noise so tests
/// and training control the stream.
pub fn reparameterize<T: Scalar>(post: &LatentPosterior<T>, noise: &Tensor<T>) -> Tensor<T> {
    assert_eq!(post.mu.shape(), noise.shape(), "reparameterize noise shape");
    let half = T::of_f64(0.5);
    let std = post.logvar.map(|lv| (lv * half).exp());
    post.mu
        .zip_map(&std.zip_map(noise, |s, e| s * e), |m, se| m + se)
}

pub struct Dense<T> {
    pub w: Tensor<T>,
    pub b: Tensor<T>,
}

impl<T: Scalar> Dense<T> {
    fn new<R: Rng + ?Sized>(din: usize, dout: usize, rng: &mut R) -> Self {
        let std = T::of_f64((2.0 / din as f64).sqrt());
        Dense {
            w: Tensor::randn(&[din, dout], std, rng),
            b: Tensor::zeros(&[dout]),
        }
    }

    fn bind<S: Scalar>(&self, g: &mut Graph<S>, trainable: bool) -> (Var, Var) {
        bind_pair(g, &self.w, &self.b, trainable)
    }
}

pub struct Conv<T> {
    pub w: Tensor<T>,
    pub b: Tensor<T>,
    pub spec: ConvSpec,
}

impl<T: Scalar> Conv<T> {
    #[allow(clippy::too_many_arguments)]
    fn new<R: Rng + ?Sized>(
        in_ch: usize,
        out_ch: usize,
        kernel: usize,
        stride: usize,
        pad_lo: usize,
        pad_hi: usize,
        rng: &mut R,
    ) -> Self {
        let spec = ConvSpec {
            in_ch,
            out_ch,
            kernel,
            stride,
            pad_lo,
            pad_hi,
        };
        let fan_in = in_ch * kernel * kernel;
        let std = T::of_f64((2.0 / fan_in as f64).sqrt());
        Conv {
            w: Tensor::randn(&spec.weight_shape(), std, rng),
            b: Tensor::zeros(&[out_ch]),
            spec,
        }
    }

    fn bind_conv<S: Scalar>(&self, g: &mut Graph<S>, trainable: bool) -> (Var, Var) {
        bind_pair(g, &self.w, &self.b, trainable)
    }
}

/// Transposed convolution layer mapping `in_ch_t -> out_ch_t` while doubling
/// the spatial size. Stores the adjoint convolution's spec, whose "output"
/// side is this layer's input.
pub struct TConv<T> {
    pub w: Tensor<T>,
    pub b: Tensor<T>,
    pub spec: ConvSpec,
    pub out_hw: (usize, usize),
}

impl<T: Scalar> TConv<T> {
    fn new<R: Rng + ?Sized>(
        in_ch_t: usize,
        out_ch_t: usize,
        kernel: usize,
        stride: usize,
        out_hw: (usize, usize),
        rng: &mut R,
    ) -> Self {
        let spec = ConvSpec {
            in_ch: out_ch_t,
            out_ch: in_ch_t,
            kernel,
            stride,
            pad_lo: 1,
            pad_hi: 1,
        };
        let fan_in = in_ch_t * kernel * kernel;
        let std = T::of_f64((2.0 / fan_in as f64).sqrt());
        TConv {
            w: Tensor::randn(&spec.weight_shape(), std, rng),
            b: Tensor::zeros(&[out_ch_t]),
            spec,
            out_hw,
        }
    }

    fn bind_tconv<S: Scalar>(&self, g: &mut Graph<S>, trainable: bool) -> (Var, Var) {
        bind_pair(g, &self.w, &self.b, trainable)
    }
}

fn bind_pair<T: Scalar, S: Scalar>(
    g: &mut Graph<S>,
    w: &Tensor<T>,
    b: &Tensor<T>,
    trainable: bool,
) -> (Var, Var) {
    let (wt, bt) = (w.cast::<S>(), b.cast::<S>());
    if trainable {
        (g.param(wt), g.param(bt))
    } else {
        (g.input(wt), g.input(bt))
    }
}

/// Four stride-2 convs, a linear hidden layer, and a `2d`-wide head split
/// into posterior mean and log-variance.
pub struct Encoder<T> {
    pub arch: ArchConfig,
    pub c1: Conv<T>,
    pub c2: Conv<T>,
    pub c3: Conv<T>,
    pub c4: Conv<T>,
    pub hidden: Dense<T>,
    pub head: Dense<T>,
}

pub struct BoundEncoder {
    c1: (Var, Var),
    c2: (Var, Var),
    c3: (Var, Var),
    c4: (Var, Var),
    hidden: (Var, Var),
    head: (Var, Var),
}

impl BoundEncoder {
    pub fn param_vars(&self) -> Vec<Var> {
        vec![
            self.c1.0, self.c1.1, self.c2.0, self.c2.1, self.c3.0, self.c3.1, self.c4.0,
            self.c4.1, self.hidden.0, self.hidden.1, self.head.0, self.head.1,
        ]
    }
}

impl<T: Scalar> Encoder<T> {
    pub fn new<R: Rng + ?Sized>(arch: ArchConfig, rng: &mut R) -> Self {
        Encoder {
            arch,
            c1: Conv::new(arch.channels, 32, 4, 2, 1, 1, rng),
            c2: Conv::new(32, 32, 4, 2, 1, 1, rng),
            c3: Conv::new(32, 64, 4, 2, 1, 1, rng),
            c4: Conv::new(64, 64, 4, 2, 1, 1, rng),
            hidden: Dense::new(
                64 * (arch.model_hw.0 / 16) * (arch.model_hw.1 / 16),
                arch.enc_hidden,
                rng,
            ),
            head: Dense::new(arch.enc_hidden, 2 * arch.latent_dim, rng),
        }
    }

    pub fn bind<S: Scalar>(&self, g: &mut Graph<S>, trainable: bool) -> BoundEncoder {
        BoundEncoder {
            c1: self.c1.bind_conv(g, trainable),
            c2: self.c2.bind_conv(g, trainable),
            c3: self.c3.bind_conv(g, trainable),
            c4: self.c4.bind_conv(g, trainable),
            hidden: self.hidden.bind(g, trainable),
            head: self.head.bind(g, trainable),
        }
    }

    /// Builds the forward pass; `x` must already be in model space
    /// (`[n, C, 32, 32]`). Returns `(mu, logvar)`.
    pub fn forward<S: Scalar>(&self, g: &mut Graph<S>, b: &BoundEncoder, x: Var) -> (Var, Var) {
        let h1 = g.conv2d(x, b.c1.0, self.c1.spec);
        let h1 = g.chan_add(h1, b.c1.1);
        let h1 = g.relu(h1);
        let h2 = g.conv2d(h1, b.c2.0, self.c2.spec);
        let h2 = g.chan_add(h2, b.c2.1);
        let h2 = g.relu(h2);
        let h3 = g.conv2d(h2, b.c3.0, self.c3.spec);
        let h3 = g.chan_add(h3, b.c3.1);
        let h3 = g.relu(h3);
        let h4 = g.conv2d(h3, b.c4.0, self.c4.spec);
        let h4 = g.chan_add(h4, b.c4.1);
        let h4 = g.relu(h4);
        let n = g.value(h4).shape()[0];
        let flat_dim = g.value(h4).row_len();
        let flat = g.reshape(h4, &[n, flat_dim]);
        let hid = g.matmul(flat, b.hidden.0);
        let hid = g.row_add(hid, b.hidden.1);
        let out = g.matmul(hid, b.head.0);
        let out = g.row_add(out, b.head.1);
        let d = self.arch.latent_dim;
        let mu = g.slice_cols(out, 0, d);
        let logvar = g.slice_cols(out, d, 2 * d);
        (mu, logvar)
    }

    /// Inference: pads native input to model space and evaluates the
    /// posterior parameters.
    pub fn encode(&self, x: &Tensor<T>) -> LatentPosterior<T> {
        let (mh, mw) = self.arch.model_hw;
        let xm = pad_spatial(x, mh, mw);
        let mut g = Graph::<T>::new();
        let b = self.bind(&mut g, false);
        let xv = g.input(xm);
        let (mu, logvar) = self.forward(&mut g, &b, xv);
        LatentPosterior {
            mu: g.value(mu).clone(),
            logvar: g.value(logvar).clone(),
            z: None,
        }
    }
}

/// Two dense layers up to a 4x4x64 map, three stride-2 transposed convs,
/// and a stride-1 output conv with sigmoid pixels.
pub struct Decoder<T> {
    pub arch: ArchConfig,
    pub fc1: Dense<T>,
    pub fc2: Dense<T>,
    pub t1: TConv<T>,
    pub t2: TConv<T>,
    pub t3: TConv<T>,
    pub out: Conv<T>,
}

pub struct BoundDecoder {
    fc1: (Var, Var),
    fc2: (Var, Var),
    t1: (Var, Var),
    t2: (Var, Var),
    t3: (Var, Var),
    out: (Var, Var),
}

impl BoundDecoder {
    pub fn param_vars(&self) -> Vec<Var> {
        vec![
            self.fc1.0, self.fc1.1, self.fc2.0, self.fc2.1, self.t1.0, self.t1.1, self.t2.0,
            self.t2.1, self.t3.0, self.t3.1, self.out.0, self.out.1,
        ]
    }
}

impl<T: Scalar> Decoder<T> {
    pub fn new<R: Rng + ?Sized>(arch: ArchConfig, rng: &mut R) -> Self {
        let (mh, mw) = arch.model_hw;
        let (bh, bw) = (mh / 8, mw / 8);
        Decoder {
            arch,
            fc1: Dense::new(arch.latent_dim, arch.dec_hidden, rng),
            fc2: Dense::new(arch.dec_hidden, 64 * bh * bw, rng),
            t1: TConv::new(64, 64, 4, 2, (bh * 2, bw * 2), rng),
            t2: TConv::new(64, 32, 4, 2, (bh * 4, bw * 4), rng),
            t3: TConv::new(32, 32, 4, 2, (mh, mw), rng),
            // Stride-1 "same" conv with the even 4x4 kernel: asymmetric pad.
            out: Conv::new(32, arch.channels, 4, 1, 1, 2, rng),
        }
    }

    pub fn bind<S: Scalar>(&self, g: &mut Graph<S>, trainable: bool) -> BoundDecoder {
        BoundDecoder {
            fc1: self.fc1.bind(g, trainable),
            fc2: self.fc2.bind(g, trainable),
            t1: self.t1.bind_tconv(g, trainable),
            t2: self.t2.bind_tconv(g, trainable),
            t3: self.t3.bind_tconv(g, trainable),
            out: self.out.bind_conv(g, trainable),
        }
    }

    /// Builds the forward pass from latent codes `[n,d]` to model-space
    /// pixels `[n, C, 32, 32]` in (0,1).
    pub fn forward<S: Scalar>(&self, g: &mut Graph<S>, b: &BoundDecoder, z: Var) -> Var {
        let (mh, mw) = self.arch.model_hw;
        let (bh, bw) = (mh / 8, mw / 8);
        let n = g.value(z).shape()[0];
        let h = g.matmul(z, b.fc1.0);
        let h = g.row_add(h, b.fc1.1);
        let h = g.relu(h);
        let h = g.matmul(h, b.fc2.0);
        let h = g.row_add(h, b.fc2.1);
        let h = g.relu(h);
        let h = g.reshape(h, &[n, 64, bh, bw]);
        let h = g.conv_transpose2d(h, b.t1.0, self.t1.spec, self.t1.out_hw);
        let h = g.chan_add(h, b.t1.1);
        let h = g.relu(h);
        let h = g.conv_transpose2d(h, b.t2.0, self.t2.spec, self.t2.out_hw);
        let h = g.chan_add(h, b.t2.1);
        let h = g.relu(h);
        let h = g.conv_transpose2d(h, b.t3.0, self.t3.spec, self.t3.out_hw);
        let h = g.chan_add(h, b.t3.1);
        let h = g.relu(h);
        let h = g.conv2d(h, b.out.0, self.out.spec);
        let h = g.chan_add(h, b.out.1);
        g.sigmoid(h)
    }

    /// Inference: decodes latents and crops back to the dataset's native
    /// image size.
    pub fn decode(&self, z: &Tensor<T>) -> Tensor<T> {
        let mut g = Graph::<T>::new();
        let b = self.bind(&mut g, false);
        let zv = g.input(z.clone());
        let out = self.forward(&mut g, &b, zv);
        let (nh, nw) = self.arch.native_hw;
        crop_spatial(g.value(out), nh, nw)
    }
}

/// Dense ReLU stack over latent codes; two output logits
/// (index 0: "came from q(z)", index 1: "came from the permuted batch").
pub struct TcDiscriminator<T> {
    pub layers: Vec<Dense<T>>,
    pub head: Dense<T>,
}

pub struct BoundDisc {
    layers: Vec<(Var, Var)>,
    head: (Var, Var),
}

impl BoundDisc {
    pub fn param_vars(&self) -> Vec<Var> {
        let mut v = Vec::new();
        for l in &self.layers {
            v.push(l.0);
            v.push(l.1);
        }
        v.push(self.head.0);
        v.push(self.head.1);
        v
    }
}

impl<T: Scalar> TcDiscriminator<T> {
    pub fn new<R: Rng + ?Sized>(arch: ArchConfig, rng: &mut R) -> Self {
        let mut layers = Vec::with_capacity(arch.disc_depth);
        let mut din = arch.latent_dim;
        for _ in 0..arch.disc_depth {
            layers.push(Dense::new(din, arch.disc_hidden, rng));
            din = arch.disc_hidden;
        }
        TcDiscriminator {
            layers,
            head: Dense::new(din, 2, rng),
        }
    }

    pub fn bind<S: Scalar>(&self, g: &mut Graph<S>, trainable: bool) -> BoundDisc {
        BoundDisc {
            layers: self.layers.iter().map(|l| l.bind(g, trainable)).collect(),
            head: self.head.bind(g, trainable),
        }
    }

    pub fn forward<S: Scalar>(&self, g: &mut Graph<S>, b: &BoundDisc, z: Var) -> Var {
        let mut h = z;
        for l in &b.layers {
            h = g.matmul(h, l.0);
            h = g.row_add(h, l.1);
            h = g.relu(h);
        }
        let out = g.matmul(h, b.head.0);
        g.row_add(out, b.head.1)
    }

    /// Inference logits for a batch of latents.
    pub fn discriminate(&self, z: &Tensor<T>) -> Tensor<T> {
        let mut g = Graph::<T>::new();
        let b = self.bind(&mut g, false);
        let zv = g.input(z.clone());
        let out = self.forward(&mut g, &b, zv);
        g.value(out).clone()
    }
}

/// The full model: encoder, decoder, TC discriminator and the learned
/// log-precisions of the latent prior.
pub struct DetectorVae<T> {
    pub arch: ArchConfig,
    pub encoder: Encoder<T>,
    pub decoder: Decoder<T>,
    pub disc: TcDiscriminator<T>,
    /// log beta_j; beta = exp(log_beta) keeps precisions positive.
    pub log_beta: Tensor<T>,
}

impl<T: Scalar> DetectorVae<T> {
    pub fn new(arch: ArchConfig, seed: u64) -> Self {
        let mut rng = substream(seed, "init", 0);
        DetectorVae {
            arch,
            encoder: Encoder::new(arch, &mut rng),
            decoder: Decoder::new(arch, &mut rng),
            disc: TcDiscriminator::new(arch, &mut rng),
            log_beta: Tensor::zeros(&[arch.latent_dim]),
        }
    }

    pub fn beta(&self) -> Tensor<T> {
        self.log_beta.map(|v| v.exp())
    }

    /// Reconstruction through the posterior mean, in native image space.
    pub fn reconstruct(&self, x: &Tensor<T>) -> Tensor<T> {
        let post = self.encoder.encode(x);
        self.decoder.decode(&post.mu)
    }

    /// Stable block order used by checkpoints and the optimizer.
    pub fn visit_blocks(&self, mut f: impl FnMut(&'static str, &Tensor<T>)) {
        let e = &self.encoder;
        f("enc.c1.w", &e.c1.w);
        f("enc.c1.b", &e.c1.b);
        f("enc.c2.w", &e.c2.w);
        f("enc.c2.b", &e.c2.b);
        f("enc.c3.w", &e.c3.w);
        f("enc.c3.b", &e.c3.b);
        f("enc.c4.w", &e.c4.w);
        f("enc.c4.b", &e.c4.b);
        f("enc.hidden.w", &e.hidden.w);
        f("enc.hidden.b", &e.hidden.b);
        f("enc.head.w", &e.head.w);
        f("enc.head.b", &e.head.b);
        let d = &self.decoder;
        f("dec.fc1.w", &d.fc1.w);
        f("dec.fc1.b", &d.fc1.b);
        f("dec.fc2.w", &d.fc2.w);
        f("dec.fc2.b", &d.fc2.b);
        f("dec.t1.w", &d.t1.w);
        f("dec.t1.b", &d.t1.b);
        f("dec.t2.w", &d.t2.w);
        f("dec.t2.b", &d.t2.b);
        f("dec.t3.w", &d.t3.w);
        f("dec.t3.b", &d.t3.b);
        f("dec.out.w", &d.out.w);
        f("dec.out.b", &d.out.b);
        for l in &self.disc.layers {
            f("disc.layer.w", &l.w);
            f("disc.layer.b", &l.b);
        }
        f("disc.head.w", &self.disc.head.w);
        f("disc.head.b", &self.disc.head.b);
        f("prior.log_beta", &self.log_beta);
    }

    pub fn visit_blocks_mut(&mut self, mut f: impl FnMut(&'static str, &mut Tensor<T>)) {
        let e = &mut self.encoder;
        f("enc.c1.w", &mut e.c1.w);
        f("enc.c1.b", &mut e.c1.b);
        f("enc.c2.w", &mut e.c2.w);
        f("enc.c2.b", &mut e.c2.b);
        f("enc.c3.w", &mut e.c3.w);
        f("enc.c3.b", &mut e.c3.b);
        f("enc.c4.w", &mut e.c4.w);
        f("enc.c4.b", &mut e.c4.b);
        f("enc.hidden.w", &mut e.hidden.w);
        f("enc.hidden.b", &mut e.hidden.b);
        f("enc.head.w", &mut e.head.w);
        f("enc.head.b", &mut e.head.b);
        let d = &mut self.decoder;
        f("dec.fc1.w", &mut d.fc1.w);
        f("dec.fc1.b", &mut d.fc1.b);
        f("dec.fc2.w", &mut d.fc2.w);
        f("dec.fc2.b", &mut d.fc2.b);
        f("dec.t1.w", &mut d.t1.w);
        f("dec.t1.b", &mut d.t1.b);
        f("dec.t2.w", &mut d.t2.w);
        f("dec.t2.b", &mut d.t2.b);
        f("dec.t3.w", &mut d.t3.w);
        f("dec.t3.b", &mut d.t3.b);
        f("dec.out.w", &mut d.out.w);
        f("dec.out.b", &mut d.out.b);
        for l in self.disc.layers.iter_mut() {
            f("disc.layer.w", &mut l.w);
            f("disc.layer.b", &mut l.b);
        }
        f("disc.head.w", &mut self.disc.head.w);
        f("disc.head.b", &mut self.disc.head.b);
        f("prior.log_beta", &mut self.log_beta);
    }

    pub fn block_count(&self) -> usize {
        let mut n = 0;
        self.visit_blocks(|_, _| n += 1);
        n
    }
}
