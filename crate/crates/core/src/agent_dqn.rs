//! DQN baseline: ε-greedy over an online Q-network, one-step TD targets
//! from a periodically synced copy.

use efe_autodiff::{Adam, AutodiffError, Graph, Module, Param, Real, StateMap, Tensor, Var};
use rand::Rng;

use crate::env::Action;
use crate::networks::{stacks_to_batch, Checkpoint, ConvQNet, MdpArch, Mlp, PomdpArch};
use crate::replay::{Observation, ReplayBuffer, TargetSync, TransitionRecord, BATCH_SIZE, FREEZE_PERIOD};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct DqnHyper {
    pub gamma_q: f64,
    pub epsilon_start: f64,
    pub epsilon_end: f64,
    /// Fraction of the configured episodes over which ε decays linearly.
    pub epsilon_decay_fraction: f64,
    pub batch: usize,
    pub freeze_period: u64,
    pub lr: f64,
}

impl DqnHyper {
    pub fn mdp() -> Self {
        DqnHyper {
            gamma_q: 0.98,
            epsilon_start: 1.0,
            epsilon_end: 0.05,
            epsilon_decay_fraction: 0.1,
            batch: BATCH_SIZE,
            freeze_period: FREEZE_PERIOD,
            lr: 1e-3,
        }
    }

    pub fn pomdp() -> Self {
        DqnHyper { gamma_q: 0.99, lr: 1e-5, ..Self::mdp() }
    }

    pub fn validate(&self) -> Result<(), String> {
        if !(self.gamma_q > 0.0 && self.gamma_q < 1.0) {
            return Err(format!("discount must lie in (0, 1), got {}", self.gamma_q));
        }
        for e in [self.epsilon_start, self.epsilon_end, self.epsilon_decay_fraction] {
            if !(0.0..=1.0).contains(&e) {
                return Err(format!("exploration settings must lie in [0, 1], got {e}"));
            }
        }
        if self.batch == 0 || self.freeze_period == 0 || !(self.lr > 0.0) {
            return Err("batch size, freeze period and learning rate must be positive".into());
        }
        Ok(())
    }

    /// ε for a zero-based episode index out of `total` episodes.
    pub fn epsilon(&self, episode: usize, total: usize) -> f64 {
        let span = self.epsilon_decay_fraction * total as f64;
        if span <= 0.0 || episode as f64 >= span {
            return self.epsilon_end;
        }
        let t = episode as f64 / span;
        self.epsilon_start + t * (self.epsilon_end - self.epsilon_start)
    }
}

/// Index of the largest value; ties go to the lowest index.
pub fn argmax(q: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in q.iter().enumerate() {
        if v > q[best] {
            best = i;
        }
    }
    best
}

/// Uniform random action with probability `epsilon`, else greedy.
pub fn select_action_eps<R: Rng + ?Sized>(q: &[f64], epsilon: f64, rng: &mut R) -> Action {
    let explore = rng.random::<f64>() < epsilon;
    let i = if explore { rng.random_range(0..Action::COUNT) } else { argmax(q) };
    Action::from_index(i).expect("two actions")
}

/// `r + γ max_a Q_target(s')[a]`, without the bootstrap at termination.
pub fn td_targets(rewards: &[f64], done: &[bool], next_max: &[f64], gamma_q: f64) -> Vec<f64> {
    (0..rewards.len()).map(|i| rewards[i] + if done[i] { 0.0 } else { gamma_q * next_max[i] }).collect()
}

#[derive(Clone, Debug)]
pub enum QNet<T: Real> {
    State(Mlp<T>),
    Pixels(ConvQNet<T>),
}

impl<T: Real> QNet<T> {
    /// Q-values `[B, actions]`; `x` is `[B, state]` or internal-layout pixels.
    pub fn forward<'a>(&'a self, g: &mut Graph<'a, T>, x: Var, training: bool) -> Var {
        match self {
            QNet::State(m) => m.forward(g, x),
            QNet::Pixels(c) => c.forward(g, x, training),
        }
    }

    pub fn eval(&self, x: Tensor<T>) -> Tensor<T> {
        let mut g = Graph::no_grad();
        let xv = g.constant(x);
        let q = self.forward(&mut g, xv, false);
        g.value(q).clone()
    }
}

impl<T: Real> Module<T> for QNet<T> {
    fn params(&self) -> Vec<&Param<T>> {
        match self {
            QNet::State(m) => m.params(),
            QNet::Pixels(c) => c.params(),
        }
    }

    fn params_mut(&mut self) -> Vec<&mut Param<T>> {
        match self {
            QNet::State(m) => m.params_mut(),
            QNet::Pixels(c) => c.params_mut(),
        }
    }

    fn save_state(&self, prefix: &str, out: &mut StateMap<T>) {
        match self {
            QNet::State(m) => m.save_state(prefix, out),
            QNet::Pixels(c) => c.save_state(prefix, out),
        }
    }

    fn load_state(&mut self, prefix: &str, src: &mut StateMap<T>) -> Result<(), AutodiffError> {
        match self {
            QNet::State(m) => m.load_state(prefix, src),
            QNet::Pixels(c) => c.load_state(prefix, src),
        }
    }
}

/// `MSE(Q[i, a_i], y_i)` with constant targets `y`.
pub fn td_loss<'a, T: Real>(g: &mut Graph<'a, T>, q: &'a QNet<T>, x: Tensor<T>, actions: &[usize], targets: &[f64]) -> Var {
    let xv = g.constant(x);
    let all = q.forward(g, xv, true);
    let taken = g.gather(all, actions);
    let y = g.constant(Tensor::from_f64(&[targets.len()], targets).expect("one target per record"));
    let d = g.sub(taken, y);
    let sq = g.square(d);
    g.mean(sq)
}

#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct DqnTelemetry {
    pub td_loss: f64,
    pub mean_q: f64,
}

impl DqnTelemetry {
    pub const COLUMNS: [&'static str; 2] = ["td_loss", "mean_q"];

    pub fn values(&self) -> [f64; 2] {
        [self.td_loss, self.mean_q]
    }
}

#[derive(Clone, Debug)]
pub struct DqnAgent<T: Real = f32> {
    pub hyper: DqnHyper,
    pub online: QNet<T>,
    pub target: QNet<T>,
    opt: Adam<T>,
    sync: TargetSync,
}

impl<T: Real> DqnAgent<T> {
    pub fn mdp<R: Rng + ?Sized>(arch: MdpArch, hyper: DqnHyper, rng: &mut R) -> Self {
        Self::from_net(QNet::State(Mlp::new(arch.state_dim, arch.hidden, arch.actions, rng)), hyper)
    }

    pub fn pomdp<R: Rng + ?Sized>(arch: PomdpArch, hyper: DqnHyper, rng: &mut R) -> Self {
        Self::from_net(QNet::Pixels(ConvQNet::new(arch, rng)), hyper)
    }

    fn from_net(online: QNet<T>, hyper: DqnHyper) -> Self {
        DqnAgent { target: online.clone(), online, opt: Adam::new(hyper.lr), sync: TargetSync::new(hyper.freeze_period), hyper }
    }

    pub fn learn_steps(&self) -> u64 {
        self.sync.steps()
    }

    /// Network input for a batch of observations.
    pub fn inputs(&self, obs: &[Observation], buffer: &ReplayBuffer) -> Tensor<T> {
        match &self.online {
            QNet::State(_) => {
                let data: Vec<T> = obs.iter().flat_map(|o| o.as_state().expect("state observation").to_array()).map(T::of).collect();
                Tensor::new(&[obs.len(), 4], data).unwrap()
            }
            QNet::Pixels(_) => stacks_to_batch(obs.iter().map(|o| buffer.stack_frames(o.as_stack().expect("stack observation")).expect("stored frames"))),
        }
    }

    pub fn q_values(&self, obs: &Observation, buffer: &ReplayBuffer) -> Vec<f64> {
        self.online.eval(self.inputs(std::slice::from_ref(obs), buffer)).to_f64_vec()
    }

    pub fn td_targets(&self, records: &[&TransitionRecord], buffer: &ReplayBuffer) -> Vec<f64> {
        let next: Vec<Observation> = records.iter().map(|r| r.next_obs).collect();
        let q = self.target.eval(self.inputs(&next, buffer));
        let next_max: Vec<f64> = q.rows().map(|r| r.iter().map(|v| Real::to_f64(*v)).fold(f64::NEG_INFINITY, f64::max)).collect();
        let rewards: Vec<f64> = records.iter().map(|r| r.reward).collect();
        let done: Vec<bool> = records.iter().map(|r| r.done).collect();
        td_targets(&rewards, &done, &next_max, self.hyper.gamma_q)
    }

    pub fn learn_step<R: Rng + ?Sized>(&mut self, buffer: &ReplayBuffer, rng: &mut R) -> Option<DqnTelemetry> {
        let records = buffer.sample(self.hyper.batch, rng).ok()?;
        let targets = self.td_targets(&records, buffer);
        let obs: Vec<Observation> = records.iter().map(|r| r.obs).collect();
        let actions: Vec<usize> = records.iter().map(|r| r.action.index()).collect();
        let x = self.inputs(&obs, buffer);
        let (telemetry, grads) = {
            let mut g = Graph::new();
            let loss = td_loss(&mut g, &self.online, x, &actions, &targets);
            let t = DqnTelemetry { td_loss: g.value(loss).item().to_f64(), mean_q: targets.iter().sum::<f64>() / targets.len() as f64 };
            (t, g.backward(loss))
        };
        self.opt.step(self.online.params_mut(), &grads);
        self.sync.maybe_sync(&self.online, &mut self.target);
        Some(telemetry)
    }

    pub fn checkpoint(&self) -> Checkpoint {
        let mut ck = Checkpoint::new();
        ck.insert("q_value", &self.online);
        ck.insert("q_value_target", &self.target);
        ck
    }
}
