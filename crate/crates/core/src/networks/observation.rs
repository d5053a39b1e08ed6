use efe_autodiff::{Real, Tensor};

use crate::env::{Frame, CHANNELS, FRAME_LEN, HEIGHT, WIDTH};
use crate::error::NetworkError;
use crate::numerics::{DiagGaussian, VAR_FLOOR};

pub const STACK_LEN: usize = 4;

/// Four consecutive frames, oldest first.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ObservationStack {
    frames: [Frame; STACK_LEN],
}

impl ObservationStack {
    pub fn new(frames: [Frame; STACK_LEN]) -> Self {
        ObservationStack { frames }
    }

    /// A stack at episode start: the first frame repeated.
    pub fn padded(first: Frame) -> Self {
        ObservationStack { frames: [first.clone(), first.clone(), first.clone(), first] }
    }

    pub fn frames(&self) -> &[Frame; STACK_LEN] {
        &self.frames
    }

    pub fn newest(&self) -> &Frame {
        &self.frames[STACK_LEN - 1]
    }

    /// The stack after appending `frame` and dropping the oldest.
    pub fn shifted(&self, frame: Frame) -> Self {
        let [_, a, b, c] = self.frames.clone();
        ObservationStack { frames: [a, b, c, frame] }
    }

    /// `[C, H, W, T]` tensor of real pixel values.
    pub fn to_tensor<T: Real>(&self) -> Tensor<T> {
        let mut data = vec![T::zero(); FRAME_LEN * STACK_LEN];
        for (t, frame) in self.frames.iter().enumerate() {
            for (i, &v) in frame.levels().iter().enumerate() {
                data[i * STACK_LEN + t] = level::<T>(v);
            }
        }
        Tensor::new(&[CHANNELS, HEIGHT, WIDTH, STACK_LEN], data).unwrap()
    }
}

fn level<T: Real>(v: u8) -> T {
    T::of(v as f64 / 255.0)
}

/// Rolling frame history of the current episode.
#[derive(Clone, Debug, Default)]
pub struct FrameHistory {
    current: Option<ObservationStack>,
}

impl FrameHistory {
    pub fn start(&mut self, first: Frame) -> &ObservationStack {
        self.current.insert(ObservationStack::padded(first))
    }

    /// Appends a frame; the first push of an episode pads.
    pub fn push(&mut self, frame: Frame) -> &ObservationStack {
        let next = match &self.current {
            Some(s) => s.shifted(frame),
            None => ObservationStack::padded(frame),
        };
        self.current.insert(next)
    }

    pub fn current(&self) -> Option<&ObservationStack> {
        self.current.as_ref()
    }
}

/// Internal `[B·T, C, H, W]` batch from frame stacks given oldest first.
pub fn stacks_to_batch<'f, T: Real, I>(stacks: I) -> Tensor<T>
where
    I: IntoIterator<Item = [&'f Frame; STACK_LEN]>,
{
    let mut data = Vec::new();
    let mut n = 0;
    for stack in stacks {
        for frame in stack {
            data.extend(frame.levels().iter().map(|&v| level::<T>(v)));
        }
        n += 1;
    }
    Tensor::new(&[n * STACK_LEN, CHANNELS, HEIGHT, WIDTH], data).unwrap()
}

/// `[C, H, W, T]` or `[B, C, H, W, T]` into the internal `[B·T, C, H, W]`
/// layout; returns the batch size.
pub(crate) fn to_internal<T: Real>(x: &Tensor<T>, stack_shape: [usize; 4]) -> Result<(Tensor<T>, usize), NetworkError> {
    let batch = match x.shape() {
        s if s == stack_shape => 1,
        [b, rest @ ..] if rest == stack_shape => *b,
        s => {
            return Err(NetworkError::InputShape { what: "observation stack", expected: stack_shape.to_vec(), found: s.to_vec() })
        }
    };
    let [c, h, w, t] = stack_shape;
    let plane = c * h * w;
    let src = x.data();
    let mut out = vec![T::zero(); src.len()];
    for b in 0..batch {
        for p in 0..plane {
            for k in 0..t {
                out[(b * t + k) * plane + p] = src[(b * plane + p) * t + k];
            }
        }
    }
    Ok((Tensor::new(&[batch * t, c, h, w], out).unwrap(), batch))
}

/// Inverse of [`to_internal`] for a single stack: `[T, C, H, W]` data into `[C, H, W, T]`.
pub(crate) fn from_internal<T: Real>(x: &[T], stack_shape: [usize; 4]) -> Tensor<T> {
    let [c, h, w, t] = stack_shape;
    let plane = c * h * w;
    let mut out = vec![T::zero(); plane * t];
    for k in 0..t {
        for p in 0..plane {
            out[p * t + k] = x[k * plane + p];
        }
    }
    Tensor::new(&stack_shape, out).unwrap()
}

/// Gaussian belief over the latent state.
#[derive(Clone, Debug, PartialEq)]
pub struct LatentBelief {
    pub s_mu: Vec<f64>,
    pub s_sigma: Vec<f64>,
}

impl LatentBelief {
    pub fn new(s_mu: Vec<f64>, s_sigma: Vec<f64>) -> Result<Self, NetworkError> {
        if s_mu.len() != s_sigma.len() {
            return Err(NetworkError::InputShape { what: "belief variance", expected: vec![s_mu.len()], found: vec![s_sigma.len()] });
        }
        if s_sigma.iter().any(|&v| !(v > 0.0)) {
            return Err(NetworkError::Format("belief variance must be positive".into()));
        }
        Ok(LatentBelief { s_mu, s_sigma })
    }

    pub fn dim(&self) -> usize {
        self.s_mu.len()
    }

    /// `[s_mu, s_sigma]`, the input of the policy and EFE-value networks.
    pub fn features(&self) -> Vec<f64> {
        self.s_mu.iter().chain(&self.s_sigma).copied().collect()
    }

    pub fn to_gaussian(&self) -> DiagGaussian {
        DiagGaussian::new(self.s_mu.clone(), self.s_sigma.iter().map(|v| v.max(VAR_FLOOR)).collect()).expect("validated belief")
    }
}
