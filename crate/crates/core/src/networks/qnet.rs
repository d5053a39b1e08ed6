use efe_autodiff::layers::join;
use efe_autodiff::{AutodiffError, Graph, Linear, Module, Param, Real, StateMap, Tensor, Var};
use rand::Rng;

use super::observation::to_internal;
use super::vae::ConvTrunk;
use super::PomdpArch;
use crate::error::NetworkError;

/// Q-values from an observation stack: the encoder's trunk followed by
/// `flatten × hidden × actions` fully connected layers.
#[derive(Clone, Debug)]
pub struct ConvQNet<T: Real> {
    pub trunk: ConvTrunk<T>,
    pub fc: Linear<T>,
    pub output: Linear<T>,
}

composite_module!(ConvQNet { trunk, fc, output });

impl<T: Real> ConvQNet<T> {
    pub fn new<R: Rng + ?Sized>(arch: PomdpArch, rng: &mut R) -> Self {
        ConvQNet {
            trunk: ConvTrunk::new(arch, rng),
            fc: Linear::new(arch.flatten_len(), arch.fc_hidden, rng),
            output: Linear::new(arch.fc_hidden, arch.actions, rng),
        }
    }

    pub fn arch(&self) -> &PomdpArch {
        self.trunk.arch()
    }

    /// Internal-layout batch → `[B, actions]`.
    pub fn forward<'a>(&'a self, g: &mut Graph<'a, T>, x: Var, training: bool) -> Var {
        let h = self.trunk.forward(g, x, training);
        let h = self.fc.forward(g, h);
        let h = g.relu(h);
        self.output.forward(g, h)
    }

    /// Evaluation-mode Q-values for an internal-layout batch.
    pub fn eval_internal(&self, x: Tensor<T>) -> Tensor<T> {
        let mut g = Graph::no_grad();
        let xv = g.constant(x);
        let q = self.forward(&mut g, xv, false);
        g.value(q).clone()
    }

    /// Evaluation-mode Q-values for a `[C, H, W, T]` stack or batch of them.
    pub fn q_values(&self, stacks: &Tensor<T>) -> Result<Vec<Vec<f64>>, NetworkError> {
        let (x, _) = to_internal(stacks, self.arch().stack_shape())?;
        Ok(self.eval_internal(x).rows().map(|r| r.iter().map(|v| Real::to_f64(*v)).collect()).collect())
    }
}
