//! Deep active inference agent.
//!
//! Each learning step draws one batch and makes two updates:
//!
//! * the EFE-value network regresses on the bootstrapped target
//!   `Ĝ = −r + KL[N(ŝ_t, I) ‖ N(μ_t, Σ_t)] + β Σ_a q(a|s_{t+1}) G̃_target(s_{t+1})[a]`;
//! * the transition and policy networks (and the VAE, when unfrozen)
//!   minimize the free energy
//!   `α·reconstruction + MSE(μ_t, f(s_{t−1}, a_{t−1})) + KL[q(a|s_t) ‖ σ(−γ G̃(s_t))]`.
//!
//! The loss builders are generic over precision so the finite-difference
//! checks run the same code as training.

use efe_autodiff::{Adam, Graph, Module, Real, Tensor, Var};
use rand::Rng;
use rand_distr::StandardNormal;

use crate::env::Action;
use crate::networks::{stacks_to_batch, transition_input, Checkpoint, MdpArch, Mlp, Vae};
use crate::numerics::{boltzmann, kl_categorical_rows, kl_diag_gaussian, Categorical, DiagGaussian};
use crate::replay::{Observation, ReplayBuffer, TargetSync, TransitionRecord, BATCH_SIZE, FREEZE_PERIOD};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct DaifHyper {
    /// Precision of the action prior.
    pub gamma: f64,
    /// Discount of the bootstrapped EFE.
    pub beta: f64,
    /// Scale of the reconstruction term.
    pub alpha: f64,
    pub batch: usize,
    pub freeze_period: u64,
    pub lr_transition: f64,
    pub lr_policy: f64,
    pub lr_efe: f64,
    pub lr_vae: f64,
    /// Keep training the encoder and decoder during reinforcement learning.
    pub train_vae: bool,
}

impl DaifHyper {
    pub fn mdp() -> Self {
        DaifHyper {
            gamma: 1.0,
            beta: 0.99,
            alpha: 4e-5,
            batch: BATCH_SIZE,
            freeze_period: FREEZE_PERIOD,
            lr_transition: 1e-3,
            lr_policy: 1e-3,
            lr_efe: 1e-4,
            lr_vae: 1e-5,
            train_vae: false,
        }
    }

    pub fn pomdp() -> Self {
        DaifHyper { gamma: 12.0, ..Self::mdp() }
    }

    pub fn validate(&self) -> Result<(), String> {
        if !(self.gamma > 0.0) {
            return Err(format!("precision must be positive, got {}", self.gamma));
        }
        if !(self.beta > 0.0 && self.beta <= 1.0) {
            return Err(format!("discount must lie in (0, 1], got {}", self.beta));
        }
        if !(self.alpha > 0.0) {
            return Err(format!("reconstruction scale must be positive, got {}", self.alpha));
        }
        if self.batch == 0 || self.freeze_period == 0 {
            return Err("batch size and freeze period must be positive".into());
        }
        for lr in [self.lr_transition, self.lr_policy, self.lr_efe, self.lr_vae] {
            if !(lr > 0.0) {
                return Err(format!("learning rates must be positive, got {lr}"));
            }
        }
        Ok(())
    }
}

/// `Ĝ_i = −r_i + kl_i + β (1 − done_i) Σ_a q_i[a] G_i[a]` over rows of
/// `next_policy` and `next_target`.
pub fn efe_targets(rewards: &[f64], kl: &[f64], done: &[bool], next_policy: &[Vec<f64>], next_target: &[Vec<f64>], beta: f64) -> Vec<f64> {
    (0..rewards.len())
        .map(|i| {
            let future = if done[i] { 0.0 } else { next_policy[i].iter().zip(&next_target[i]).map(|(q, g)| q * g).sum::<f64>() };
            -rewards[i] + kl[i] + beta * future
        })
        .collect()
}

/// `MSE(G̃[i, a_i], Ĝ_i)` on the graph; gradients reach the EFE network only.
pub fn value_loss<'a, T: Real>(g: &mut Graph<'a, T>, efe: &'a Mlp<T>, features: Tensor<T>, actions: &[usize], g_hat: &[f64]) -> (Var, Var) {
    let x = g.constant(features);
    let all = efe.forward(g, x);
    let taken = g.gather(all, actions);
    let target = g.constant(Tensor::from_f64(&[g_hat.len()], g_hat).expect("one target per record"));
    let d = g.sub(taken, target);
    let sq = g.square(d);
    (g.mean(sq), all)
}

/// Where the belief about `s_t` comes from in the free-energy graph.
#[derive(Clone, Debug)]
pub enum BeliefInput<T> {
    /// Precomputed features (`[μ, Σ]`, or the state in the MDP) and the
    /// prediction target `μ_t`; nothing upstream is trained.
    Fixed { features: Tensor<T>, means: Tensor<T> },
    /// Pixels in the internal layout plus reparameterization noise; the
    /// VAE is part of the graph.
    Encoded { pixels: Tensor<T>, noise: Tensor<T> },
}

#[derive(Clone, Debug)]
pub struct VfeInputs<T> {
    pub belief: BeliefInput<T>,
    /// Features one step earlier; rows without a predecessor are ignored.
    pub prev_features: Tensor<T>,
    pub prev_actions: Vec<usize>,
    pub has_prev: Vec<bool>,
    /// Boltzmann action prior `σ(−γ G̃(s_t))`, `[B, actions]`, detached.
    pub prior: Tensor<T>,
}

/// Free-energy terms, each a batch mean.
#[derive(Clone, Copy, Debug)]
pub struct VfeVars {
    pub reconstruction: Option<Var>,
    pub prediction: Var,
    pub energy: Var,
    pub entropy: Var,
    pub total: Var,
}

pub fn vfe_loss<'a, T: Real>(
    g: &mut Graph<'a, T>,
    transition: &'a Mlp<T>,
    policy: &'a Mlp<T>,
    vae: Option<&'a Vae<T>>,
    inputs: &VfeInputs<T>,
    alpha: f64,
) -> VfeVars {
    let (features, means, reconstruction) = match &inputs.belief {
        BeliefInput::Fixed { features, means } => (g.constant(features.clone()), g.constant(means.clone()), None),
        BeliefInput::Encoded { pixels, noise } => {
            let vae = vae.expect("encoded beliefs need a VAE");
            let terms = vae.terms(g, pixels, noise.clone(), true);
            let features = g.concat_cols(&[terms.mean, terms.variance]);
            (features, terms.mean, Some(terms.reconstruction))
        }
    };
    let batch = inputs.has_prev.len();

    let prev = g.constant(inputs.prev_features.clone());
    let x = transition_input(g, &[prev], &inputs.prev_actions);
    let predicted = transition.forward(g, x);
    let dim = g.shape(predicted)[1];
    let valid = inputs.has_prev.iter().filter(|&&h| h).count();
    let mask = Tensor::new(&[batch, dim], inputs.has_prev.iter().flat_map(|&h| std::iter::repeat_n(if h { T::one() } else { T::zero() }, dim)).collect()).unwrap();
    let mask = g.constant(mask);
    let diff = g.sub(predicted, means);
    let diff = g.mul(diff, mask);
    let sq = g.square(diff);
    let sum = g.sum(sq);
    let prediction = g.scale(sum, T::of(if valid == 0 { 0.0 } else { 1.0 / (valid * dim) as f64 }));

    let q = policy.forward_probs(g, features);
    let prior = g.constant(inputs.prior.clone());
    let (energy_rows, entropy_rows) = kl_categorical_rows(g, q, prior);
    let energy = g.mean(energy_rows);
    let entropy = g.mean(entropy_rows);

    let mut total = g.add(prediction, energy);
    total = g.add(total, entropy);
    if let Some(r) = reconstruction {
        let scaled = g.scale(r, T::of(alpha));
        total = g.add(total, scaled);
    }
    VfeVars { reconstruction, prediction, energy, entropy, total }
}

/// One learning step's loss values.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct DaifTelemetry {
    pub reconstruction: f64,
    pub state_prediction: f64,
    pub kl_energy: f64,
    pub kl_entropy: f64,
    pub vfe_total: f64,
    pub value_loss: f64,
}

impl DaifTelemetry {
    pub const COLUMNS: [&'static str; 6] = ["reconstruction", "state_prediction", "kl_energy", "kl_entropy", "vfe_total", "value_loss"];

    pub fn values(&self) -> [f64; 6] {
        [self.reconstruction, self.state_prediction, self.kl_energy, self.kl_entropy, self.vfe_total, self.value_loss]
    }
}

/// Batch tensors for one learning step.
#[derive(Clone, Debug)]
pub struct PreparedBatch<T> {
    pub features: Tensor<T>,
    pub means: Tensor<T>,
    pub next_features: Tensor<T>,
    pub prev_features: Tensor<T>,
    /// `o_t` stacks in the internal layout (pixel scenario only).
    pub pixels: Option<Tensor<T>>,
    pub actions: Vec<usize>,
    pub prev_actions: Vec<usize>,
    pub has_prev: Vec<bool>,
    pub rewards: Vec<f64>,
    pub done: Vec<bool>,
}

#[derive(Clone, Debug)]
pub struct DaifAgent<T: Real = f32> {
    pub hyper: DaifHyper,
    pub transition: Mlp<T>,
    pub policy: Mlp<T>,
    pub efe: Mlp<T>,
    pub efe_target: Mlp<T>,
    /// Present in the pixel scenario.
    pub vae: Option<Vae<T>>,
    opt_transition: Adam<T>,
    opt_policy: Adam<T>,
    opt_efe: Adam<T>,
    opt_vae: Adam<T>,
    sync: TargetSync,
}

impl<T: Real> DaifAgent<T> {
    pub fn mdp<R: Rng + ?Sized>(arch: MdpArch, hyper: DaifHyper, rng: &mut R) -> Self {
        let n = arch.state_dim;
        Self::build(n, n, arch.hidden, arch.actions, None, hyper, rng)
    }

    /// Pixel agent around a (typically pre-trained) VAE.
    pub fn pomdp<R: Rng + ?Sized>(vae: Vae<T>, hyper: DaifHyper, rng: &mut R) -> Self {
        let arch = *vae.arch();
        Self::build(arch.belief_dim(), arch.latent, arch.mlp_hidden, arch.actions, Some(vae), hyper, rng)
    }

    fn build<R: Rng + ?Sized>(features: usize, latent: usize, hidden: usize, actions: usize, vae: Option<Vae<T>>, hyper: DaifHyper, rng: &mut R) -> Self {
        let efe = Mlp::new(features, hidden, actions, rng);
        DaifAgent {
            transition: Mlp::new(features + 1, hidden, latent, rng),
            policy: Mlp::new(features, hidden, actions, rng),
            efe_target: efe.clone(),
            efe,
            vae,
            opt_transition: Adam::new(hyper.lr_transition),
            opt_policy: Adam::new(hyper.lr_policy),
            opt_efe: Adam::new(hyper.lr_efe),
            opt_vae: Adam::new(hyper.lr_vae),
            sync: TargetSync::new(hyper.freeze_period),
            hyper,
        }
    }

    pub fn learn_steps(&self) -> u64 {
        self.sync.steps()
    }

    /// Network input for observations: the state, or `[μ, Σ]` of the
    /// encoded stack.
    pub fn features(&self, obs: &[Observation], buffer: &ReplayBuffer) -> Tensor<T> {
        match &self.vae {
            None => {
                let data: Vec<T> = obs.iter().flat_map(|o| o.as_state().expect("state observation").to_array()).map(T::of).collect();
                Tensor::new(&[obs.len(), 4], data).unwrap()
            }
            Some(vae) => {
                let x = pixel_batch(obs, buffer);
                belief_features(vae, x)
            }
        }
    }

    pub fn action_distribution(&self, features: &[f64]) -> Categorical {
        self.policy.probabilities(features).expect("feature width matches the policy network")
    }

    /// Samples from the policy network.
    pub fn select_action<R: Rng + ?Sized>(&self, features: &[f64], rng: &mut R) -> Action {
        let u: f64 = rng.random();
        Action::from_index(self.action_distribution(features).sample_with(u)).expect("two actions")
    }

    pub fn prepare(&self, records: &[&TransitionRecord], buffer: &ReplayBuffer) -> PreparedBatch<T> {
        let obs: Vec<Observation> = records.iter().map(|r| r.obs).collect();
        let next: Vec<Observation> = records.iter().map(|r| r.next_obs).collect();
        let prev: Vec<Observation> = records.iter().map(|r| r.prev.map_or(r.obs, |(o, _)| o)).collect();
        let pixels = self.vae.as_ref().map(|_| pixel_batch(&obs, buffer));
        let features = match (&self.vae, &pixels) {
            (Some(vae), Some(x)) => belief_features(vae, x.clone()),
            _ => self.features(&obs, buffer),
        };
        let dim = self.transition.outputs();
        let width = features.shape()[1];
        let means: Vec<T> = features.rows().flat_map(|r| r[..dim].to_vec()).collect();
        let means = Tensor::new(&[records.len(), dim], means).unwrap();
        let has_prev: Vec<bool> = records.iter().map(|r| r.prev.is_some()).collect();
        let mut prev_features = self.features(&prev, buffer);
        for (row, &h) in prev_features.data_mut().chunks_mut(width).zip(&has_prev) {
            if !h {
                row.fill(T::zero());
            }
        }
        PreparedBatch {
            features,
            means,
            next_features: self.features(&next, buffer),
            prev_features,
            pixels,
            actions: records.iter().map(|r| r.action.index()).collect(),
            prev_actions: records.iter().map(|r| r.prev.map_or(0, |(_, a)| a.index())).collect(),
            has_prev,
            rewards: records.iter().map(|r| r.reward).collect(),
            done: records.iter().map(|r| r.done).collect(),
        }
    }

    /// Per-record `KL[N(ŝ_t, I) ‖ N(μ_t, Σ_t)]`; zero without a VAE or
    /// without a predecessor.
    pub fn state_divergence(&self, b: &PreparedBatch<T>) -> Vec<f64> {
        if self.vae.is_none() {
            return vec![0.0; b.rewards.len()];
        }
        let mut g = Graph::no_grad();
        let prev = g.constant(b.prev_features.clone());
        let x = transition_input(&mut g, &[prev], &b.prev_actions);
        let pred = self.transition.forward(&mut g, x);
        let dim = self.transition.outputs();
        g.value(pred)
            .rows()
            .zip(b.features.rows())
            .zip(&b.has_prev)
            .map(|((p, f), &h)| {
                if !h {
                    return 0.0;
                }
                let prior = DiagGaussian::unit(p.iter().map(|v| Real::to_f64(*v)).collect());
                let post = DiagGaussian::new(f[..dim].iter().map(|v| Real::to_f64(*v)).collect(), f[dim..].iter().map(|v| Real::to_f64(*v)).collect())
                    .expect("floored encoder variance");
                kl_diag_gaussian(&prior, &post).expect("equal dimensions")
            })
            .collect()
    }

    /// Bootstrapped EFE target of every record; nothing here is differentiated.
    pub fn efe_target(&self, b: &PreparedBatch<T>) -> Vec<f64> {
        let next_policy = rows_f64(&softmax_eval(&self.policy, b.next_features.clone()));
        let next_target = rows_f64(&self.efe_target.eval_rows(b.next_features.clone()).expect("feature width"));
        efe_targets(&b.rewards, &self.state_divergence(b), &b.done, &next_policy, &next_target, self.hyper.beta)
    }

    /// One update of every trained network from a batch; `None` when the
    /// buffer is not ready.
    pub fn learn_step<R: Rng + ?Sized>(&mut self, buffer: &ReplayBuffer, rng: &mut R) -> Option<DaifTelemetry> {
        let records = buffer.sample(self.hyper.batch, rng).ok()?;
        let b = self.prepare(&records, buffer);
        let g_hat = self.efe_target(&b);

        // value loss: ψ only
        let (value, prior, efe_grads) = {
            let mut g = Graph::new();
            let (loss, all) = value_loss(&mut g, &self.efe, b.features.clone(), &b.actions, &g_hat);
            let prior = boltzmann_rows(g.value(all), self.hyper.gamma);
            (g.value(loss).item().to_f64(), prior, g.backward(loss))
        };

        let latent = self.transition.outputs();
        let train_vae = self.hyper.train_vae && self.vae.is_some();
        let belief = match (&b.pixels, train_vae) {
            (Some(px), true) => BeliefInput::Encoded { pixels: px.clone(), noise: normal_noise(b.rewards.len(), latent, rng) },
            _ => BeliefInput::Fixed { features: b.features.clone(), means: b.means.clone() },
        };
        let inputs = VfeInputs { belief, prev_features: b.prev_features.clone(), prev_actions: b.prev_actions.clone(), has_prev: b.has_prev.clone(), prior };

        let mut telemetry = DaifTelemetry { value_loss: value, ..Default::default() };
        let frozen_reconstruction = match (&self.vae, &b.pixels, train_vae) {
            (Some(vae), Some(px), false) => {
                let noise = normal_noise(b.rewards.len(), latent, rng);
                let mut g = Graph::no_grad();
                let t = vae.terms(&mut g, px, noise, false);
                Some(g.value(t.reconstruction).item().to_f64())
            }
            _ => None,
        };
        let vfe_grads = {
            let mut g = Graph::new();
            let v = vfe_loss(&mut g, &self.transition, &self.policy, self.vae.as_ref(), &inputs, self.hyper.alpha);
            let read = |g: &Graph<T>, x: Var| g.value(x).item().to_f64();
            telemetry.state_prediction = read(&g, v.prediction);
            telemetry.kl_energy = read(&g, v.energy);
            telemetry.kl_entropy = read(&g, v.entropy);
            telemetry.vfe_total = read(&g, v.total);
            telemetry.reconstruction = v.reconstruction.map(|r| read(&g, r)).or(frozen_reconstruction).unwrap_or(0.0);
            if let (None, Some(r)) = (v.reconstruction, frozen_reconstruction) {
                telemetry.vfe_total += self.hyper.alpha * r;
            }
            g.backward(v.total)
        };

        self.opt_efe.step(self.efe.params_mut(), &efe_grads);
        self.opt_transition.step(self.transition.params_mut(), &vfe_grads);
        self.opt_policy.step(self.policy.params_mut(), &vfe_grads);
        if train_vae {
            if let Some(vae) = self.vae.as_mut() {
                self.opt_vae.step(vae.params_mut(), &vfe_grads);
            }
        }
        self.sync.maybe_sync(&self.efe, &mut self.efe_target);
        Some(telemetry)
    }

    pub fn checkpoint(&self) -> Checkpoint {
        let mut ck = Checkpoint::new();
        ck.insert("transition", &self.transition);
        ck.insert("policy", &self.policy);
        ck.insert("efe_value", &self.efe);
        ck.insert("efe_value_target", &self.efe_target);
        if let Some(vae) = &self.vae {
            ck.insert("encoder", &vae.encoder);
            ck.insert("decoder", &vae.decoder);
        }
        ck
    }
}

fn pixel_batch<T: Real>(obs: &[Observation], buffer: &ReplayBuffer) -> Tensor<T> {
    stacks_to_batch(obs.iter().map(|o| buffer.stack_frames(o.as_stack().expect("stack observation")).expect("frames of stored records")))
}

/// `[μ, Σ]` rows from the encoder in evaluation mode.
fn belief_features<T: Real>(vae: &Vae<T>, x: Tensor<T>) -> Tensor<T> {
    let mut g = Graph::no_grad();
    let xv = g.constant(x);
    let (m, v) = vae.encoder.forward(&mut g, xv, false);
    let f = g.concat_cols(&[m, v]);
    g.value(f).clone()
}

fn softmax_eval<T: Real>(net: &Mlp<T>, x: Tensor<T>) -> Tensor<T> {
    let mut g = Graph::no_grad();
    let xv = g.constant(x);
    let p = net.forward_probs(&mut g, xv);
    g.value(p).clone()
}

fn rows_f64<T: Real>(t: &Tensor<T>) -> Vec<Vec<f64>> {
    t.rows().map(|r| r.iter().map(|v| Real::to_f64(*v)).collect()).collect()
}

/// Row-wise `σ(−γ g)` as a tensor.
pub fn boltzmann_rows<T: Real>(g: &Tensor<T>, gamma: f64) -> Tensor<T> {
    let data: Vec<T> = g
        .rows()
        .flat_map(|r| boltzmann(&r.iter().map(|v| Real::to_f64(*v)).collect::<Vec<_>>(), gamma).probs().to_vec())
        .map(T::of)
        .collect();
    Tensor::new(g.shape(), data).unwrap()
}

pub fn normal_noise<T: Real, R: Rng + ?Sized>(rows: usize, cols: usize, rng: &mut R) -> Tensor<T> {
    let data = (0..rows * cols).map(|_| T::of(rng.sample::<f64, _>(StandardNormal))).collect();
    Tensor::new(&[rows, cols], data).unwrap()
}
