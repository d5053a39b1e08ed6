use crate::graph::Gradients;
use crate::layers::Param;
use crate::tensor::{Real, Tensor};

/// Adam with bias correction. Moment buffers are keyed by parameter
/// position, so one optimizer must always see the same parameter list.
#[derive(Clone, Debug)]
pub struct Adam<T> {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    step: u64,
    moments: Vec<(Tensor<T>, Tensor<T>)>,
}

impl<T: Real> Adam<T> {
    pub fn new(lr: f64) -> Self {
        Adam { lr, beta1: 0.9, beta2: 0.999, eps: 1e-8, step: 0, moments: Vec::new() }
    }

    pub fn steps_taken(&self) -> u64 {
        self.step
    }

    /// Applies one update. Parameters without a gradient are left untouched.
    pub fn step(&mut self, params: Vec<&mut Param<T>>, grads: &Gradients<T>) {
        if self.moments.is_empty() {
            self.moments = params
                .iter()
                .map(|p| (Tensor::zeros(p.value.shape()), Tensor::zeros(p.value.shape())))
                .collect();
        }
        assert_eq!(self.moments.len(), params.len(), "optimizer bound to a different parameter list");
        self.step += 1;
        let t = self.step as f64;
        let c1 = 1.0 - self.beta1.powf(t);
        let c2 = 1.0 - self.beta2.powf(t);
        let (b1, b2) = (T::of(self.beta1), T::of(self.beta2));
        let (one_b1, one_b2) = (T::of(1.0 - self.beta1), T::of(1.0 - self.beta2));
        let step_size = T::of(self.lr / c1);
        let c2_sqrt = T::of(c2.sqrt());
        let eps = T::of(self.eps);
        for (p, (m, v)) in params.into_iter().zip(self.moments.iter_mut()) {
            let Some(g) = grads.param(p) else { continue };
            for (((w, &gi), mi), vi) in p
                .value
                .data_mut()
                .iter_mut()
                .zip(g.data())
                .zip(m.data_mut().iter_mut())
                .zip(v.data_mut().iter_mut())
            {
                *mi = b1 * *mi + one_b1 * gi;
                *vi = b2 * *vi + one_b2 * gi * gi;
                *w -= step_size * *mi / (vi.sqrt() / c2_sqrt + eps);
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::Graph;

    #[test]
    fn first_step_moves_by_learning_rate() {
        // With bias correction the first Adam step is lr · sign(g).
        let mut p = Param::new(Tensor::<f64>::from_f64(&[2], &[1.0, -1.0]).unwrap());
        let mut adam = Adam::new(0.1);
        let grads = {
            let mut g = Graph::new();
            let x = g.param(&p);
            let y = g.square(x);
            let s = g.sum(y);
            g.backward(s)
        };
        adam.step(vec![&mut p], &grads);
        assert!((p.value.data()[0] - 0.9).abs() < 1e-6);
        assert!((p.value.data()[1] + 0.9).abs() < 1e-6);
    }

    #[test]
    fn minimizes_a_quadratic() {
        let mut p = Param::new(Tensor::<f64>::from_f64(&[1], &[5.0]).unwrap());
        let mut adam = Adam::new(0.1);
        for _ in 0..500 {
            let grads = {
                let mut g = Graph::new();
                let x = g.param(&p);
                let d = g.add_scalar(x, -2.0);
                let y = g.square(d);
                let s = g.sum(y);
                g.backward(s)
            };
            adam.step(vec![&mut p], &grads);
        }
        assert!((p.value.data()[0] - 2.0).abs() < 1e-2);
    }
}
