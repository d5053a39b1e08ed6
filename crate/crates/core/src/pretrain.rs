//! Random-policy frame collection and VAE pre-training.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use efe_autodiff::{Adam, Graph, Module, Tensor};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::agent_daif::normal_noise;
use crate::env::{render, Action, CartPole, Frame, FRAME_LEN};
use crate::error::PretrainError;
use crate::networks::{stacks_to_batch, Vae, STACK_LEN};

const MAGIC: &[u8; 8] = b"EFELABDS";
const VERSION: u32 = 1;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PretrainConfig {
    pub episodes: usize,
    pub epochs: usize,
    pub batch: usize,
    pub lr: f64,
    /// Share of collected episodes held out for validation.
    pub validation_fraction: f64,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        PretrainConfig { episodes: 500, epochs: 50, batch: 32, lr: 1e-5, validation_fraction: 0.1 }
    }
}

impl PretrainConfig {
    pub fn validate(&self) -> Result<(), String> {
        if self.episodes == 0 || self.epochs == 0 || self.batch == 0 {
            return Err("pre-training episodes, epochs and batch size must be positive".into());
        }
        if !(self.lr > 0.0) {
            return Err(format!("pre-training learning rate must be positive, got {}", self.lr));
        }
        if !(0.0..1.0).contains(&self.validation_fraction) {
            return Err(format!("validation fraction must lie in [0, 1), got {}", self.validation_fraction));
        }
        Ok(())
    }
}

/// Position of one observation stack: episode and step within it.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct StackIndex {
    pub episode: usize,
    pub step: usize,
}

/// Frames of complete random-policy episodes. Episodes are split whole into
/// training and validation sets; the validation episodes come last.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct FrameDataset {
    /// Per episode, the frame observed before each action.
    episodes: Vec<Vec<Frame>>,
    validation_episodes: usize,
}

impl FrameDataset {
    pub fn new(episodes: Vec<Vec<Frame>>, validation_episodes: usize) -> Result<Self, PretrainError> {
        if episodes.iter().all(|e| e.is_empty()) {
            return Err(PretrainError::EmptyDataset);
        }
        if validation_episodes >= episodes.len() && validation_episodes > 0 {
            return Err(PretrainError::Format("validation split leaves no training episodes".into()));
        }
        Ok(FrameDataset { episodes, validation_episodes })
    }

    pub fn episodes(&self) -> &[Vec<Frame>] {
        &self.episodes
    }

    pub fn episode_lengths(&self) -> Vec<usize> {
        self.episodes.iter().map(Vec::len).collect()
    }

    /// Total number of stacks.
    pub fn len(&self) -> usize {
        self.episodes.iter().map(Vec::len).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn indices(&self, range: std::ops::Range<usize>) -> Vec<StackIndex> {
        range.flat_map(|episode| (0..self.episodes[episode].len()).map(move |step| StackIndex { episode, step })).collect()
    }

    pub fn train_indices(&self) -> Vec<StackIndex> {
        self.indices(0..self.episodes.len() - self.validation_episodes)
    }

    pub fn validation_indices(&self) -> Vec<StackIndex> {
        self.indices(self.episodes.len() - self.validation_episodes..self.episodes.len())
    }

    /// Stack ending at `i`, oldest first, padded with the episode's first frame.
    pub fn stack(&self, i: StackIndex) -> [&Frame; STACK_LEN] {
        let frames = &self.episodes[i.episode];
        std::array::from_fn(|k| &frames[(i.step + k + 1).saturating_sub(STACK_LEN)])
    }

    /// Internal-layout pixel batch for the given stacks.
    pub fn batch(&self, idx: &[StackIndex]) -> Tensor<f32> {
        stacks_to_batch(idx.iter().map(|&i| self.stack(i)))
    }

    pub fn write(&self, path: &Path) -> Result<(), PretrainError> {
        let mut w = BufWriter::new(File::create(path)?);
        w.write_all(MAGIC)?;
        w.write_all(&VERSION.to_le_bytes())?;
        w.write_all(&(self.episodes.len() as u32).to_le_bytes())?;
        w.write_all(&(self.validation_episodes as u32).to_le_bytes())?;
        for episode in &self.episodes {
            w.write_all(&(episode.len() as u32).to_le_bytes())?;
            for f in episode {
                w.write_all(f.levels())?;
            }
        }
        w.flush()?;
        Ok(())
    }

    pub fn read(path: &Path) -> Result<Self, PretrainError> {
        let mut r = BufReader::new(File::open(path)?);
        let mut magic = [0u8; 8];
        r.read_exact(&mut magic)?;
        if &magic != MAGIC {
            return Err(PretrainError::Format("not a frame dataset".into()));
        }
        let version = read_u32(&mut r)?;
        if version != VERSION {
            return Err(PretrainError::Format(format!("unsupported version {version}")));
        }
        let n = read_u32(&mut r)? as usize;
        let validation = read_u32(&mut r)? as usize;
        let mut episodes = Vec::with_capacity(n);
        for _ in 0..n {
            let len = read_u32(&mut r)? as usize;
            let mut frames = Vec::with_capacity(len);
            for _ in 0..len {
                let mut levels = vec![0u8; FRAME_LEN];
                r.read_exact(&mut levels)?;
                frames.push(Frame::from_levels(levels).expect("frame length"));
            }
            episodes.push(frames);
        }
        if r.read(&mut [0u8])? != 0 {
            return Err(PretrainError::Format("trailing bytes".into()));
        }
        Self::new(episodes, validation)
    }
}

fn read_u32(r: &mut impl Read) -> Result<u32, PretrainError> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)?;
    Ok(u32::from_le_bytes(b))
}

/// Runs `n_episodes` uniform-random episodes and keeps every stack the agent
/// would have acted on.
pub fn collect(n_episodes: usize, validation_fraction: f64, seed: u64) -> Result<FrameDataset, PretrainError> {
    if n_episodes == 0 {
        return Err(PretrainError::NoEpisodes);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut env = CartPole::new();
    let mut episodes = Vec::with_capacity(n_episodes);
    for _ in 0..n_episodes {
        let mut s = env.reset(rng.random());
        let mut frames = Vec::new();
        while !env.is_done() {
            frames.push(render(&s));
            let a = Action::ALL[rng.random_range(0..Action::COUNT)];
            s = env.step(a).expect("live episode").next_state;
        }
        episodes.push(frames);
    }
    let validation = (n_episodes as f64 * validation_fraction).floor() as usize;
    FrameDataset::new(episodes, validation.min(n_episodes - 1))
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EpochLoss {
    /// Mean per-stack training loss over the epoch's batches.
    pub train: f64,
    /// Loss on held-out episodes after the epoch, if any are held out.
    pub validation: Option<f64>,
    pub validation_reconstruction: Option<f64>,
}

/// Mean (reconstruction + KL, reconstruction) per stack in evaluation mode,
/// decoding the latent mean.
pub fn evaluate(vae: &Vae<f32>, dataset: &FrameDataset, idx: &[StackIndex], batch: usize) -> Option<(f64, f64)> {
    if idx.is_empty() {
        return None;
    }
    let latent = vae.arch().latent;
    let (mut total, mut recon) = (0.0, 0.0);
    for chunk in idx.chunks(batch) {
        let x = dataset.batch(chunk);
        let mut g = Graph::no_grad();
        let t = vae.terms(&mut g, &x, Tensor::zeros(&[chunk.len(), latent]), false);
        let (r, k) = (g.value(t.reconstruction).item() as f64, g.value(t.kl).item() as f64);
        total += (r + k) * chunk.len() as f64;
        recon += r * chunk.len() as f64;
    }
    let n = idx.len() as f64;
    Some((total / n, recon / n))
}

/// Recomputes every batch-norm running statistic as the plain average of the
/// batch statistics over `idx` under the current weights.
pub fn recalibrate_batch_norm(vae: &mut Vae<f32>, dataset: &FrameDataset, idx: &[StackIndex], batch: usize) {
    let momenta: Vec<f64> = vae.batch_norms_mut().iter().map(|bn| bn.momentum).collect();
    let latent = vae.arch().latent;
    for (k, chunk) in idx.chunks(batch).enumerate() {
        for bn in vae.batch_norms_mut() {
            bn.momentum = 1.0 / (k + 1) as f64;
        }
        let x = dataset.batch(chunk);
        let mut g = Graph::no_grad();
        vae.terms(&mut g, &x, Tensor::zeros(&[chunk.len(), latent]), true);
    }
    for (bn, m) in vae.batch_norms_mut().into_iter().zip(momenta) {
        bn.momentum = m;
    }
}

/// Trains encoder and decoder on reconstruction plus the KL to a standard
/// normal; returns one entry per epoch. Batch-norm running statistics are
/// recomputed over the training set before each validation pass and after
/// the final epoch, so evaluation-mode encoding matches the trained weights.
pub fn train<R: Rng + ?Sized>(vae: &mut Vae<f32>, dataset: &FrameDataset, cfg: &PretrainConfig, rng: &mut R) -> Result<Vec<EpochLoss>, PretrainError> {
    let mut train_idx = dataset.train_indices();
    if train_idx.is_empty() {
        return Err(PretrainError::EmptyDataset);
    }
    let validation_idx = dataset.validation_indices();
    let latent = vae.arch().latent;
    let mut opt = Adam::new(cfg.lr);
    let mut history = Vec::with_capacity(cfg.epochs);
    for _ in 0..cfg.epochs {
        train_idx.shuffle(rng);
        let mut sum = 0.0;
        for chunk in train_idx.chunks(cfg.batch) {
            let x = dataset.batch(chunk);
            let noise = normal_noise(chunk.len(), latent, rng);
            let (loss, grads) = {
                let mut g = Graph::new();
                let t = vae.terms(&mut g, &x, noise, true);
                let loss = g.add(t.reconstruction, t.kl);
                (g.value(loss).item() as f64, g.backward(loss))
            };
            opt.step(vae.params_mut(), &grads);
            sum += loss * chunk.len() as f64;
        }
        let last = history.len() + 1 == cfg.epochs;
        if last || !validation_idx.is_empty() {
            recalibrate_batch_norm(vae, dataset, &train_idx, cfg.batch);
        }
        let eval = evaluate(vae, dataset, &validation_idx, cfg.batch);
        history.push(EpochLoss { train: sum / train_idx.len() as f64, validation: eval.map(|e| e.0), validation_reconstruction: eval.map(|e| e.1) });
    }
    Ok(history)
}
