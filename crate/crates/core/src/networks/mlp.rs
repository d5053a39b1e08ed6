use efe_autodiff::{Graph, Linear, Module, Param, Real, StateMap, Tensor, Var};
use efe_autodiff::layers::join;
use efe_autodiff::AutodiffError;
use rand::Rng;

use crate::error::NetworkError;
use crate::numerics::Categorical;

/// `in × hidden × out` fully connected network with a rectifier between.
#[derive(Clone, Debug)]
pub struct Mlp<T: Real> {
    pub hidden: Linear<T>,
    pub output: Linear<T>,
}

composite_module!(Mlp { hidden, output });

/// `(belief or state, action) → predicted next mean`.
pub type TransitionNet<T> = Mlp<T>;
/// Logits over actions; [`Mlp::probabilities`] applies the softmax.
pub type PolicyNet<T> = Mlp<T>;
/// Per-action expected free energy.
pub type EfeValueNet<T> = Mlp<T>;
/// Per-action Q-values from a state vector.
pub type QMlp<T> = Mlp<T>;

impl<T: Real> Mlp<T> {
    pub fn new<R: Rng + ?Sized>(inputs: usize, hidden: usize, outputs: usize, rng: &mut R) -> Self {
        Mlp { hidden: Linear::new(inputs, hidden, rng), output: Linear::new(hidden, outputs, rng) }
    }

    pub fn inputs(&self) -> usize {
        self.hidden.inputs()
    }

    pub fn outputs(&self) -> usize {
        self.output.outputs()
    }

    pub fn forward<'a>(&'a self, g: &mut Graph<'a, T>, x: Var) -> Var {
        let h = self.hidden.forward(g, x);
        let h = g.relu(h);
        self.output.forward(g, h)
    }

    /// Row-wise softmax of the outputs.
    pub fn forward_probs<'a>(&'a self, g: &mut Graph<'a, T>, x: Var) -> Var {
        let logits = self.forward(g, x);
        g.softmax_rows(logits)
    }

    /// Outputs for a `[B, in]` batch without recording gradients.
    pub fn eval_rows(&self, x: Tensor<T>) -> Result<Tensor<T>, NetworkError> {
        self.check_input(x.shape())?;
        let mut g = Graph::no_grad();
        let xv = g.constant(x);
        let y = self.forward(&mut g, xv);
        Ok(g.value(y).clone())
    }

    /// Outputs for one input row.
    pub fn eval(&self, x: &[f64]) -> Result<Vec<f64>, NetworkError> {
        let x = Tensor::from_f64(&[1, x.len()], x)?;
        Ok(self.eval_rows(x)?.to_f64_vec())
    }

    /// Softmax of the outputs for one input row.
    pub fn probabilities(&self, x: &[f64]) -> Result<Categorical, NetworkError> {
        let logits = self.eval(x)?;
        let probs = efe_autodiff::graph::softmax(&logits);
        Ok(Categorical::new(probs).expect("softmax output"))
    }

    fn check_input(&self, shape: &[usize]) -> Result<(), NetworkError> {
        match shape {
            [_, n] if *n == self.inputs() => Ok(()),
            _ => Err(NetworkError::InputShape { what: "mlp input", expected: vec![0, self.inputs()], found: shape.to_vec() }),
        }
    }
}

/// Transition-network input `[features, action]` with the action as a
/// scalar 0 or 1 in the last column.
pub fn transition_input<T: Real>(g: &mut Graph<'_, T>, features: &[Var], actions: &[usize]) -> Var {
    let col = Tensor::new(&[actions.len(), 1], actions.iter().map(|&a| T::of(a as f64)).collect()).unwrap();
    let col = g.constant(col);
    let mut parts = features.to_vec();
    parts.push(col);
    g.concat_cols(&parts)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn probabilities_are_a_distribution_and_deterministic() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let net = Mlp::<f32>::new(4, 64, 2, &mut rng);
        let p = net.probabilities(&[0.1, -0.2, 0.03, 0.5]).unwrap();
        assert!((p.probs().iter().sum::<f64>() - 1.0).abs() < 1e-6);
        assert!(p.probs().iter().all(|&q| q > 0.0));
        assert_eq!(p, net.probabilities(&[0.1, -0.2, 0.03, 0.5]).unwrap());
    }

    #[test]
    fn wrong_input_width_is_rejected() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let net = Mlp::<f32>::new(4, 8, 2, &mut rng);
        assert!(matches!(net.eval(&[1.0, 2.0]), Err(NetworkError::InputShape { .. })));
    }

    #[test]
    fn action_column_is_scalar() {
        let mut g = Graph::<f64>::no_grad();
        let f = g.constant(Tensor::from_f64(&[2, 2], &[1.0, 2.0, 3.0, 4.0]).unwrap());
        let x = transition_input(&mut g, &[f], &[0, 1]);
        assert_eq!(g.value(x).data(), &[1.0, 2.0, 0.0, 3.0, 4.0, 1.0]);
    }
}
