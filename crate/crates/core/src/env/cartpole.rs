use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::EnvError;

pub const GRAVITY: f64 = 9.8;
pub const MASS_CART: f64 = 1.0;
pub const MASS_POLE: f64 = 0.1;
pub const TOTAL_MASS: f64 = MASS_CART + MASS_POLE;
/// Half the pole length.
pub const POLE_HALF_LENGTH: f64 = 0.5;
pub const POLE_MASS_LENGTH: f64 = MASS_POLE * POLE_HALF_LENGTH;
pub const FORCE_MAG: f64 = 10.0;
pub const TAU: f64 = 0.02;
pub const X_THRESHOLD: f64 = 2.4;
pub const THETA_THRESHOLD: f64 = 12.0 * 2.0 * std::f64::consts::PI / 360.0;
pub const MAX_STEPS: u32 = 500;
pub const RESET_MARGIN: f64 = 0.05;
pub const REWARD: f64 = 1.0;

/// Physical CartPole state. `theta_dot` is the pole's angular velocity.
#[derive(Clone, Copy, Debug, PartialEq, Default)]
pub struct State4 {
    pub x: f64,
    pub x_dot: f64,
    pub theta: f64,
    pub theta_dot: f64,
}

impl State4 {
    pub fn new(x: f64, x_dot: f64, theta: f64, theta_dot: f64) -> Self {
        State4 { x, x_dot, theta, theta_dot }
    }

    pub fn to_array(self) -> [f64; 4] {
        [self.x, self.x_dot, self.theta, self.theta_dot]
    }

    pub fn is_finite(&self) -> bool {
        self.to_array().iter().all(|v| v.is_finite())
    }

    /// Inside the position and angle bounds.
    pub fn is_live(&self) -> bool {
        self.is_finite() && self.x.abs() <= X_THRESHOLD && self.theta.abs() <= THETA_THRESHOLD
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Action {
    PushLeft,
    PushRight,
}

impl Action {
    pub const ALL: [Action; 2] = [Action::PushLeft, Action::PushRight];
    pub const COUNT: usize = 2;

    pub fn index(self) -> usize {
        match self {
            Action::PushLeft => 0,
            Action::PushRight => 1,
        }
    }

    pub fn from_index(i: usize) -> Option<Action> {
        match i {
            0 => Some(Action::PushLeft),
            1 => Some(Action::PushRight),
            _ => None,
        }
    }

    fn force(self) -> f64 {
        match self {
            Action::PushLeft => -FORCE_MAG,
            Action::PushRight => FORCE_MAG,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StepResult {
    pub next_state: State4,
    pub reward: f64,
    pub done: bool,
}

/// One explicit-Euler step of the cart-pole equations of motion under a
/// horizontal force.
pub fn integrate(s: State4, force: f64) -> State4 {
    let (sin, cos) = s.theta.sin_cos();
    let temp = (force + POLE_MASS_LENGTH * s.theta_dot * s.theta_dot * sin) / TOTAL_MASS;
    let theta_acc = (GRAVITY * sin - cos * temp) / (POLE_HALF_LENGTH * (4.0 / 3.0 - MASS_POLE * cos * cos / TOTAL_MASS));
    let x_acc = temp - POLE_MASS_LENGTH * theta_acc * cos / TOTAL_MASS;
    State4 {
        x: s.x + TAU * s.x_dot,
        x_dot: s.x_dot + TAU * x_acc,
        theta: s.theta + TAU * s.theta_dot,
        theta_dot: s.theta_dot + TAU * theta_acc,
    }
}

pub fn dynamics(s: State4, a: Action) -> State4 {
    integrate(s, a.force())
}

/// Initial state drawn uniformly within `±RESET_MARGIN` from a seed.
pub fn initial_state(seed: u64) -> State4 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut draw = || rng.random_range(-RESET_MARGIN..=RESET_MARGIN);
    State4 { x: draw(), x_dot: draw(), theta: draw(), theta_dot: draw() }
}

/// A single CartPole episode driver with the 500-step cap.
#[derive(Clone, Debug)]
pub struct CartPole {
    state: State4,
    steps: u32,
    done: bool,
}

impl Default for CartPole {
    fn default() -> Self {
        Self::new()
    }
}

impl CartPole {
    /// A finished environment; call [`CartPole::reset`] before stepping.
    pub fn new() -> Self {
        CartPole { state: State4::default(), steps: 0, done: true }
    }

    pub fn reset(&mut self, seed: u64) -> State4 {
        self.state = initial_state(seed);
        self.steps = 0;
        self.done = false;
        self.state
    }

    pub fn state(&self) -> State4 {
        self.state
    }

    pub fn steps(&self) -> u32 {
        self.steps
    }

    pub fn is_done(&self) -> bool {
        self.done
    }

    pub fn step(&mut self, action: Action) -> Result<StepResult, EnvError> {
        if self.done {
            return Err(EnvError::EpisodeFinished);
        }
        let next = dynamics(self.state, action);
        self.steps += 1;
        self.state = next;
        self.done = !next.is_live() || self.steps >= MAX_STEPS;
        Ok(StepResult { next_state: next, reward: REWARD, done: self.done })
    }
}
