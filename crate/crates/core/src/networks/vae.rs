use efe_autodiff::layers::join;
use efe_autodiff::{AutodiffError, BatchNorm, Conv2d, ConvTranspose2d, Graph, Linear, Module, Param, Real, StateMap, Tensor, Var};
use rand::Rng;

use super::observation::{from_internal, to_internal, LatentBelief};
use super::PomdpArch;
use crate::error::NetworkError;
use crate::numerics::{kl_standard_normal_rows, reparameterize_var, VAR_FLOOR};

/// Three convolutions, each followed by batch normalization and a rectifier.
#[derive(Clone, Debug)]
pub struct ConvTrunk<T: Real> {
    pub conv1: Conv2d<T>,
    pub bn1: BatchNorm<T>,
    pub conv2: Conv2d<T>,
    pub bn2: BatchNorm<T>,
    pub conv3: Conv2d<T>,
    pub bn3: BatchNorm<T>,
    arch: PomdpArch,
}

composite_module!(ConvTrunk { conv1, bn1, conv2, bn2, conv3, bn3 });

impl<T: Real> ConvTrunk<T> {
    pub fn new<R: Rng + ?Sized>(arch: PomdpArch, rng: &mut R) -> Self {
        let [c1, c2, c3] = arch.conv_channels;
        let conv = |i, o, rng: &mut R| Conv2d::new(i, o, arch.kernel, arch.stride, rng);
        ConvTrunk {
            conv1: conv(arch.frame[0], c1, rng),
            bn1: BatchNorm::new(c1),
            conv2: conv(c1, c2, rng),
            bn2: BatchNorm::new(c2),
            conv3: conv(c2, c3, rng),
            bn3: BatchNorm::new(c3),
            arch,
        }
    }

    pub fn arch(&self) -> &PomdpArch {
        &self.arch
    }

    /// `[B·T, C, H, W]` → `[B, flatten_len]`.
    pub fn forward<'a>(&'a self, g: &mut Graph<'a, T>, x: Var, training: bool) -> Var {
        let mut h = x;
        for (conv, bn) in [(&self.conv1, &self.bn1), (&self.conv2, &self.bn2), (&self.conv3, &self.bn3)] {
            h = conv.forward(g, h);
            h = bn.forward(g, h, training);
            h = g.relu(h);
        }
        let batch = g.shape(x)[0] / self.arch.stack;
        g.reshape(h, &[batch, self.arch.flatten_len()])
    }
}

/// Observation stack → Gaussian belief.
#[derive(Clone, Debug)]
pub struct Encoder<T: Real> {
    pub trunk: ConvTrunk<T>,
    pub fc: Linear<T>,
    pub mean_head: Linear<T>,
    pub logvar_head: Linear<T>,
}

composite_module!(Encoder { trunk, fc, mean_head, logvar_head });

impl<T: Real> Encoder<T> {
    pub fn new<R: Rng + ?Sized>(arch: PomdpArch, rng: &mut R) -> Self {
        Encoder {
            trunk: ConvTrunk::new(arch, rng),
            fc: Linear::new(arch.flatten_len(), arch.fc_hidden, rng),
            mean_head: Linear::new(arch.fc_hidden, arch.latent, rng),
            logvar_head: Linear::new(arch.fc_hidden, arch.latent, rng),
        }
    }

    pub fn arch(&self) -> &PomdpArch {
        self.trunk.arch()
    }

    /// Internal-layout batch → `(mean, variance)`, each `[B, latent]`.
    pub fn forward<'a>(&'a self, g: &mut Graph<'a, T>, x: Var, training: bool) -> (Var, Var) {
        let h = self.trunk.forward(g, x, training);
        let h = self.fc.forward(g, h);
        let h = g.relu(h);
        let mean = self.mean_head.forward(g, h);
        let logvar = self.logvar_head.forward(g, h);
        let var = g.exp(logvar);
        let var = g.clamp_min(var, T::of(VAR_FLOOR));
        (mean, var)
    }

    /// Beliefs for a `[C, H, W, T]` stack or a `[B, C, H, W, T]` batch, in
    /// evaluation mode.
    pub fn encode(&self, stacks: &Tensor<T>) -> Result<Vec<LatentBelief>, NetworkError> {
        let (x, _) = to_internal(stacks, self.arch().stack_shape())?;
        Ok(self.encode_internal(x))
    }

    /// Beliefs for an internal-layout batch, in evaluation mode.
    pub fn encode_internal(&self, x: Tensor<T>) -> Vec<LatentBelief> {
        let mut g = Graph::no_grad();
        let xv = g.constant(x);
        let (mean, var) = self.forward(&mut g, xv, false);
        let mean = g.value(mean);
        let var = g.value(var);
        mean.rows()
            .zip(var.rows())
            .map(|(m, v)| LatentBelief {
                s_mu: m.iter().map(|x| Real::to_f64(*x)).collect(),
                s_sigma: v.iter().map(|x| Real::to_f64(*x)).collect(),
            })
            .collect()
    }
}

/// Latent sample → reconstructed stack.
///
/// The last transposed convolution produces logits that a sigmoid maps into
/// `[0, 1]`; it has no normalization or rectifier of its own.
#[derive(Clone, Debug)]
pub struct Decoder<T: Real> {
    pub fc1: Linear<T>,
    pub fc2: Linear<T>,
    pub deconv1: ConvTranspose2d<T>,
    pub bn1: BatchNorm<T>,
    pub deconv2: ConvTranspose2d<T>,
    pub bn2: BatchNorm<T>,
    pub deconv3: ConvTranspose2d<T>,
    arch: PomdpArch,
}

composite_module!(Decoder { fc1, fc2, deconv1, bn1, deconv2, bn2, deconv3 });

impl<T: Real> Decoder<T> {
    pub fn new<R: Rng + ?Sized>(arch: PomdpArch, rng: &mut R) -> Self {
        let [d1, d2, d3] = arch.deconv_channels;
        let deconv = |i, o, rng: &mut R| ConvTranspose2d::new(i, o, arch.kernel, arch.stride, rng);
        Decoder {
            fc1: Linear::new(arch.latent, arch.fc_hidden, rng),
            fc2: Linear::new(arch.fc_hidden, arch.flatten_len(), rng),
            deconv1: deconv(arch.conv_channels[2], d1, rng),
            bn1: BatchNorm::new(d1),
            deconv2: deconv(d1, d2, rng),
            bn2: BatchNorm::new(d2),
            deconv3: deconv(d2, d3, rng),
            arch,
        }
    }

    pub fn arch(&self) -> &PomdpArch {
        &self.arch
    }

    /// `[B, latent]` → logits in the internal `[B·T, C, H, W]` layout.
    pub fn forward<'a>(&'a self, g: &mut Graph<'a, T>, z: Var, training: bool) -> Var {
        let batch = g.shape(z)[0];
        let h = self.fc1.forward(g, z);
        let h = g.relu(h);
        let h = self.fc2.forward(g, h);
        let h = g.relu(h);
        let [c, hh, ww] = self.arch.trunk_shapes().expect("valid architecture")[3];
        let mut h = g.reshape(h, &[batch * self.arch.stack, c, hh, ww]);
        for (deconv, bn) in [(&self.deconv1, &self.bn1), (&self.deconv2, &self.bn2)] {
            h = deconv.forward(g, h);
            h = bn.forward(g, h, training);
            h = g.relu(h);
        }
        self.deconv3.forward(g, h)
    }

    /// `[C, H, W, T]` reconstruction with pixels in `[0, 1]`, evaluation mode.
    pub fn decode(&self, z: &[f64]) -> Result<Tensor<T>, NetworkError> {
        if z.len() != self.arch.latent {
            return Err(NetworkError::InputShape { what: "latent sample", expected: vec![self.arch.latent], found: vec![z.len()] });
        }
        let mut g = Graph::no_grad();
        let zv = g.constant(Tensor::from_f64(&[1, z.len()], z)?);
        let logits = self.forward(&mut g, zv, false);
        let probs = g.sigmoid(logits);
        Ok(from_internal(g.value(probs).data(), self.arch.stack_shape()))
    }
}

/// Encoder and decoder trained together.
#[derive(Clone, Debug)]
pub struct Vae<T: Real> {
    pub encoder: Encoder<T>,
    pub decoder: Decoder<T>,
}

composite_module!(Vae { encoder, decoder });

/// Per-batch VAE loss terms, both averaged over the batch.
pub struct VaeTerms {
    /// Bernoulli negative log-likelihood summed over pixels.
    pub reconstruction: Var,
    /// `KL[q(s|o) ‖ N(0, I)]`.
    pub kl: Var,
    pub mean: Var,
    pub variance: Var,
}

impl<T: Real> Vae<T> {
    pub fn new<R: Rng + ?Sized>(arch: PomdpArch, rng: &mut R) -> Self {
        Vae { encoder: Encoder::new(arch, rng), decoder: Decoder::new(arch, rng) }
    }

    pub fn arch(&self) -> &PomdpArch {
        self.encoder.arch()
    }

    pub fn batch_norms_mut(&mut self) -> Vec<&mut BatchNorm<T>> {
        let t = &mut self.encoder.trunk;
        vec![&mut t.bn1, &mut t.bn2, &mut t.bn3, &mut self.decoder.bn1, &mut self.decoder.bn2]
    }

    /// Encodes `x` (internal layout), decodes a reparameterized sample drawn
    /// with `noise` (`[B, latent]`), and scores the reconstruction of `x`.
    pub fn terms<'a>(&'a self, g: &mut Graph<'a, T>, x: &Tensor<T>, noise: Tensor<T>, training: bool) -> VaeTerms {
        let batch = x.shape()[0] / self.arch().stack;
        let xv = g.constant(x.clone());
        let (mean, variance) = self.encoder.forward(g, xv, training);
        let z = reparameterize_var(g, mean, variance, noise);
        let logits = self.decoder.forward(g, z, training);
        let bce = g.bce_with_logits(logits, x.clone());
        let total = g.sum(bce);
        let reconstruction = g.scale(total, T::of(1.0 / batch as f64));
        let kl_rows = kl_standard_normal_rows(g, mean, variance);
        let kl = g.mean(kl_rows);
        VaeTerms { reconstruction, kl, mean, variance }
    }
}
