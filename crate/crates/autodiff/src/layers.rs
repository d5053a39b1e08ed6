use std::cell::RefCell;
use std::collections::BTreeMap;
use std::sync::atomic::{AtomicU64, Ordering};

use rand::Rng;

use crate::conv::ConvGeometry;
use crate::error::AutodiffError;
use crate::graph::{Graph, Normalization, Var};
use crate::tensor::{Real, Tensor};

static NEXT_PARAM_ID: AtomicU64 = AtomicU64::new(0);

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(u64);

impl ParamId {
    fn fresh() -> Self {
        ParamId(NEXT_PARAM_ID.fetch_add(1, Ordering::Relaxed))
    }
}

/// A trainable tensor. Every `Param` (including clones) has a distinct id,
/// so a copied network never aliases the original on a graph.
#[derive(Debug)]
pub struct Param<T> {
    id: ParamId,
    pub value: Tensor<T>,
}

impl<T: Real> Param<T> {
    pub fn new(value: Tensor<T>) -> Self {
        Param { id: ParamId::fresh(), value }
    }

    pub fn id(&self) -> ParamId {
        self.id
    }

    pub fn numel(&self) -> usize {
        self.value.len()
    }
}

impl<T: Real> Clone for Param<T> {
    fn clone(&self) -> Self {
        Param::new(self.value.clone())
    }
}

/// Uniform `±1/sqrt(fan_in)` initialization.
pub fn fan_in_uniform<T: Real, R: Rng + ?Sized>(shape: &[usize], fan_in: usize, rng: &mut R) -> Tensor<T> {
    let bound = 1.0 / (fan_in as f64).sqrt();
    let n: usize = shape.iter().product();
    let data = (0..n).map(|_| T::of(rng.random_range(-bound..bound))).collect();
    Tensor::new(shape, data).unwrap()
}

/// Named tensors of a module: trainable parameters plus non-trainable
/// buffers such as batch-norm running statistics.
pub type StateMap<T> = BTreeMap<String, Tensor<T>>;

pub trait Module<T: Real> {
    fn params(&self) -> Vec<&Param<T>>;
    fn params_mut(&mut self) -> Vec<&mut Param<T>>;
    fn save_state(&self, prefix: &str, out: &mut StateMap<T>);
    /// Removes this module's entries from `src`, checking every shape.
    fn load_state(&mut self, prefix: &str, src: &mut StateMap<T>) -> Result<(), AutodiffError>;

    fn num_params(&self) -> usize {
        self.params().iter().map(|p| p.numel()).sum()
    }

    fn state(&self) -> StateMap<T> {
        let mut out = StateMap::new();
        self.save_state("", &mut out);
        out
    }

    /// Loads a complete state; leftover entries are an error.
    fn load_full_state(&mut self, mut src: StateMap<T>) -> Result<(), AutodiffError> {
        self.load_state("", &mut src)?;
        match src.into_keys().next() {
            Some(extra) => Err(AutodiffError::UnexpectedState(extra)),
            None => Ok(()),
        }
    }

    /// Overwrites this module's state with another's (target-network sync).
    fn copy_state_from(&mut self, other: &Self)
    where
        Self: Sized,
    {
        self.load_full_state(other.state()).expect("modules of identical architecture")
    }
}

/// Dotted state key `prefix.name` (or `name` at the root).
pub fn join(prefix: &str, name: &str) -> String {
    if prefix.is_empty() {
        name.to_string()
    } else {
        format!("{prefix}.{name}")
    }
}

pub(crate) fn take_into<T: Real>(src: &mut StateMap<T>, key: String, dst: &mut Tensor<T>) -> Result<(), AutodiffError> {
    let t = src.remove(&key).ok_or_else(|| AutodiffError::MissingState(key.clone()))?;
    if t.shape() != dst.shape() {
        return Err(AutodiffError::ShapeMismatch { op: "load_state", expected: dst.shape().to_vec(), found: t.shape().to_vec() });
    }
    *dst = t;
    Ok(())
}

/// Fully connected layer, `y = x·W + b` with `W: [in, out]`.
#[derive(Clone, Debug)]
pub struct Linear<T: Real> {
    pub weight: Param<T>,
    pub bias: Param<T>,
}

impl<T: Real> Linear<T> {
    pub fn new<R: Rng + ?Sized>(inputs: usize, outputs: usize, rng: &mut R) -> Self {
        Linear {
            weight: Param::new(fan_in_uniform(&[inputs, outputs], inputs, rng)),
            bias: Param::new(fan_in_uniform(&[outputs], inputs, rng)),
        }
    }

    pub fn inputs(&self) -> usize {
        self.weight.value.shape()[0]
    }

    pub fn outputs(&self) -> usize {
        self.weight.value.shape()[1]
    }

    pub fn forward<'a>(&'a self, g: &mut Graph<'a, T>, x: Var) -> Var {
        let w = g.param(&self.weight);
        let b = g.param(&self.bias);
        let y = g.matmul(x, w);
        g.add_bias(y, b)
    }
}

impl<T: Real> Module<T> for Linear<T> {
    fn params(&self) -> Vec<&Param<T>> {
        vec![&self.weight, &self.bias]
    }

    fn params_mut(&mut self) -> Vec<&mut Param<T>> {
        vec![&mut self.weight, &mut self.bias]
    }

    fn save_state(&self, prefix: &str, out: &mut StateMap<T>) {
        out.insert(join(prefix, "weight"), self.weight.value.clone());
        out.insert(join(prefix, "bias"), self.bias.value.clone());
    }

    fn load_state(&mut self, prefix: &str, src: &mut StateMap<T>) -> Result<(), AutodiffError> {
        take_into(src, join(prefix, "weight"), &mut self.weight.value)?;
        take_into(src, join(prefix, "bias"), &mut self.bias.value)
    }
}

/// Strided, unpadded 2-D convolution. Weight layout `[out, in, kh, kw]`.
#[derive(Clone, Debug)]
pub struct Conv2d<T: Real> {
    pub weight: Param<T>,
    pub bias: Param<T>,
    pub stride: (usize, usize),
}

impl<T: Real> Conv2d<T> {
    pub fn new<R: Rng + ?Sized>(inputs: usize, outputs: usize, kernel: (usize, usize), stride: (usize, usize), rng: &mut R) -> Self {
        let fan_in = inputs * kernel.0 * kernel.1;
        Conv2d {
            weight: Param::new(fan_in_uniform(&[outputs, inputs, kernel.0, kernel.1], fan_in, rng)),
            bias: Param::new(fan_in_uniform(&[outputs], fan_in, rng)),
            stride,
        }
    }

    pub fn kernel(&self) -> (usize, usize) {
        let s = self.weight.value.shape();
        (s[2], s[3])
    }

    pub fn output_hw(&self, h: usize, w: usize) -> Option<(usize, usize)> {
        ConvGeometry::conv_output(h, w, self.kernel(), self.stride)
    }

    pub fn forward<'a>(&'a self, g: &mut Graph<'a, T>, x: Var) -> Var {
        let w = g.param(&self.weight);
        let b = g.param(&self.bias);
        g.conv2d(x, w, b, self.stride)
    }
}

impl<T: Real> Module<T> for Conv2d<T> {
    fn params(&self) -> Vec<&Param<T>> {
        vec![&self.weight, &self.bias]
    }

    fn params_mut(&mut self) -> Vec<&mut Param<T>> {
        vec![&mut self.weight, &mut self.bias]
    }

    fn save_state(&self, prefix: &str, out: &mut StateMap<T>) {
        out.insert(join(prefix, "weight"), self.weight.value.clone());
        out.insert(join(prefix, "bias"), self.bias.value.clone());
    }

    fn load_state(&mut self, prefix: &str, src: &mut StateMap<T>) -> Result<(), AutodiffError> {
        take_into(src, join(prefix, "weight"), &mut self.weight.value)?;
        take_into(src, join(prefix, "bias"), &mut self.bias.value)
    }
}

/// Strided transposed convolution. Weight layout `[in, out, kh, kw]`.
#[derive(Clone, Debug)]
pub struct ConvTranspose2d<T: Real> {
    pub weight: Param<T>,
    pub bias: Param<T>,
    pub stride: (usize, usize),
}

impl<T: Real> ConvTranspose2d<T> {
    pub fn new<R: Rng + ?Sized>(inputs: usize, outputs: usize, kernel: (usize, usize), stride: (usize, usize), rng: &mut R) -> Self {
        let fan_in = outputs * kernel.0 * kernel.1;
        ConvTranspose2d {
            weight: Param::new(fan_in_uniform(&[inputs, outputs, kernel.0, kernel.1], fan_in, rng)),
            bias: Param::new(fan_in_uniform(&[outputs], fan_in, rng)),
            stride,
        }
    }

    pub fn output_hw(&self, h: usize, w: usize) -> (usize, usize) {
        let s = self.weight.value.shape();
        ConvGeometry::transposed_output(h, w, (s[2], s[3]), self.stride)
    }

    pub fn forward<'a>(&'a self, g: &mut Graph<'a, T>, x: Var) -> Var {
        let w = g.param(&self.weight);
        let b = g.param(&self.bias);
        g.conv_transpose2d(x, w, b, self.stride)
    }
}

impl<T: Real> Module<T> for ConvTranspose2d<T> {
    fn params(&self) -> Vec<&Param<T>> {
        vec![&self.weight, &self.bias]
    }

    fn params_mut(&mut self) -> Vec<&mut Param<T>> {
        vec![&mut self.weight, &mut self.bias]
    }

    fn save_state(&self, prefix: &str, out: &mut StateMap<T>) {
        out.insert(join(prefix, "weight"), self.weight.value.clone());
        out.insert(join(prefix, "bias"), self.bias.value.clone());
    }

    fn load_state(&mut self, prefix: &str, src: &mut StateMap<T>) -> Result<(), AutodiffError> {
        take_into(src, join(prefix, "weight"), &mut self.weight.value)?;
        take_into(src, join(prefix, "bias"), &mut self.bias.value)
    }
}

#[derive(Clone, Debug)]
struct RunningStats<T> {
    mean: Tensor<T>,
    var: Tensor<T>,
}

/// Per-channel batch normalization over `[N, C, ...]`.
///
/// Running statistics live behind a `RefCell` so a training-mode forward
/// can update them while the graph borrows the affine parameters.
#[derive(Clone, Debug)]
pub struct BatchNorm<T: Real> {
    pub gamma: Param<T>,
    pub beta: Param<T>,
    running: RefCell<RunningStats<T>>,
    pub momentum: f64,
    pub eps: f64,
}

impl<T: Real> BatchNorm<T> {
    pub fn new(channels: usize) -> Self {
        BatchNorm {
            gamma: Param::new(Tensor::full(&[channels], T::one())),
            beta: Param::new(Tensor::zeros(&[channels])),
            running: RefCell::new(RunningStats { mean: Tensor::zeros(&[channels]), var: Tensor::full(&[channels], T::one()) }),
            momentum: 0.1,
            eps: 1e-5,
        }
    }

    pub fn running_mean(&self) -> Vec<T> {
        self.running.borrow().mean.data().to_vec()
    }

    pub fn running_var(&self) -> Vec<T> {
        self.running.borrow().var.data().to_vec()
    }

    /// `training` selects batch statistics (and updates the running ones);
    /// otherwise running statistics are used.
    pub fn forward<'a>(&'a self, g: &mut Graph<'a, T>, x: Var, training: bool) -> Var {
        let gamma = g.param(&self.gamma);
        let beta = g.param(&self.beta);
        let eps = T::of(self.eps);
        if training {
            let (y, stats) = g.batch_norm(x, gamma, beta, Normalization::Batch { eps });
            let (mean, var) = stats.expect("batch statistics");
            let s = g.shape(x);
            let count = s[0] * s[2..].iter().product::<usize>();
            let unbias = if count > 1 { T::of(count as f64 / (count - 1) as f64) } else { T::one() };
            let m = T::of(self.momentum);
            let mut running = self.running.borrow_mut();
            for (r, &b) in running.mean.data_mut().iter_mut().zip(&mean) {
                *r = (T::one() - m) * *r + m * b;
            }
            for (r, &b) in running.var.data_mut().iter_mut().zip(&var) {
                *r = (T::one() - m) * *r + m * b * unbias;
            }
            y
        } else {
            let running = self.running.borrow();
            let (y, _) = g.batch_norm(
                x,
                gamma,
                beta,
                Normalization::Running { mean: running.mean.data(), var: running.var.data(), eps },
            );
            y
        }
    }
}

impl<T: Real> Module<T> for BatchNorm<T> {
    fn params(&self) -> Vec<&Param<T>> {
        vec![&self.gamma, &self.beta]
    }

    fn params_mut(&mut self) -> Vec<&mut Param<T>> {
        vec![&mut self.gamma, &mut self.beta]
    }

    fn save_state(&self, prefix: &str, out: &mut StateMap<T>) {
        out.insert(join(prefix, "gamma"), self.gamma.value.clone());
        out.insert(join(prefix, "beta"), self.beta.value.clone());
        let running = self.running.borrow();
        out.insert(join(prefix, "running_mean"), running.mean.clone());
        out.insert(join(prefix, "running_var"), running.var.clone());
    }

    fn load_state(&mut self, prefix: &str, src: &mut StateMap<T>) -> Result<(), AutodiffError> {
        take_into(src, join(prefix, "gamma"), &mut self.gamma.value)?;
        take_into(src, join(prefix, "beta"), &mut self.beta.value)?;
        let running = self.running.get_mut();
        take_into(src, join(prefix, "running_mean"), &mut running.mean)?;
        take_into(src, join(prefix, "running_var"), &mut running.var)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn clones_get_fresh_ids() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let a = Linear::<f32>::new(3, 2, &mut rng);
        let b = a.clone();
        assert_ne!(a.weight.id(), b.weight.id());
        assert_eq!(a.weight.value, b.weight.value);
    }

    #[test]
    fn load_state_rejects_shape_mismatch() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let a = Linear::<f32>::new(3, 2, &mut rng);
        let mut b = Linear::<f32>::new(3, 4, &mut rng);
        assert!(matches!(b.load_full_state(a.state()), Err(AutodiffError::ShapeMismatch { .. })));
    }

    #[test]
    fn copy_state_includes_running_statistics() {
        let a = BatchNorm::<f64>::new(2);
        let mut g = Graph::new();
        let x = g.constant(Tensor::from_f64(&[2, 2, 1], &[1.0, 2.0, 3.0, 6.0]).unwrap());
        a.forward(&mut g, x, true);
        drop(g);
        let mut b = BatchNorm::<f64>::new(2);
        b.copy_state_from(&a);
        assert_eq!(a.running_mean(), b.running_mean());
        assert_eq!(a.running_var(), b.running_var());
        // mean of channel 0 is 2, running = 0.9·0 + 0.1·2
        assert!((a.running_mean()[0] - 0.2).abs() < 1e-12);
    }

    #[test]
    fn eval_mode_is_deterministic_per_sample() {
        let bn = BatchNorm::<f64>::new(1);
        let mut g = Graph::no_grad();
        let x1 = g.constant(Tensor::from_f64(&[1, 1, 2], &[1.0, 2.0]).unwrap());
        let x2 = g.constant(Tensor::from_f64(&[2, 1, 2], &[1.0, 2.0, 7.0, 9.0]).unwrap());
        let y1 = bn.forward(&mut g, x1, false);
        let y2 = bn.forward(&mut g, x2, false);
        assert_eq!(&g.value(y2).data()[..2], g.value(y1).data());
    }
}
