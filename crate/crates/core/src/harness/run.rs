use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use super::config::{AgentKind, RunConfig, Scenario};
use super::csv::{fmt_sig, write_episodes};
use super::metrics::{records_for_run, EpisodeRecord};
use crate::agent_daif::{DaifAgent, DaifTelemetry};
use crate::agent_dqn::{select_action_eps, DqnAgent, DqnTelemetry};
use crate::env::{render, Action, CartPole, State4};
use crate::error::HarnessError;
use crate::networks::{Checkpoint, MdpArch, PomdpArch, Vae};
use crate::pretrain::{self, EpochLoss, FrameDataset};
use crate::replay::{Observation, ReplayBuffer, StackRef, TransitionRecord};

/// Name of the marker file present in an output directory while an
/// experiment has not finished successfully.
pub const INCOMPLETE_MARKER: &str = "INCOMPLETE";

/// Independent random streams of one run.
const STREAM_INIT: u64 = 0;
const STREAM_ENV: u64 = 1;
const STREAM_ACT: u64 = 2;
const STREAM_REPLAY: u64 = 3;

pub fn stream(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut r = ChaCha8Rng::seed_from_u64(seed);
    r.set_stream(stream);
    r
}

/// What the run loop needs from a learner.
pub trait Agent {
    fn act(&mut self, obs: &Observation, buffer: &ReplayBuffer, episode: usize, rng: &mut ChaCha8Rng) -> Action;
    /// One gradient step; `None` until the buffer holds a full batch.
    fn learn(&mut self, buffer: &ReplayBuffer, rng: &mut ChaCha8Rng) -> Option<Vec<f64>>;
    fn telemetry_columns(&self) -> &'static [&'static str];
    fn checkpoint(&self) -> Option<Checkpoint>;
    /// Whether transitions need to be stored at all.
    fn learns(&self) -> bool {
        true
    }
}

impl Agent for DaifAgent<f32> {
    fn act(&mut self, obs: &Observation, buffer: &ReplayBuffer, _episode: usize, rng: &mut ChaCha8Rng) -> Action {
        let features = self.features(std::slice::from_ref(obs), buffer).to_f64_vec();
        self.select_action(&features, rng)
    }

    fn learn(&mut self, buffer: &ReplayBuffer, rng: &mut ChaCha8Rng) -> Option<Vec<f64>> {
        self.learn_step(buffer, rng).map(|t| t.values().to_vec())
    }

    fn telemetry_columns(&self) -> &'static [&'static str] {
        &DaifTelemetry::COLUMNS
    }

    fn checkpoint(&self) -> Option<Checkpoint> {
        Some(DaifAgent::checkpoint(self))
    }
}

/// DQN with its exploration schedule over the configured episode budget.
pub struct ScheduledDqn {
    pub agent: DqnAgent<f32>,
    pub total_episodes: usize,
}

impl Agent for ScheduledDqn {
    fn act(&mut self, obs: &Observation, buffer: &ReplayBuffer, episode: usize, rng: &mut ChaCha8Rng) -> Action {
        let eps = self.agent.hyper.epsilon(episode, self.total_episodes);
        // Skip the forward pass when the action is certainly random.
        let q = if eps >= 1.0 { vec![0.0; Action::COUNT] } else { self.agent.q_values(obs, buffer) };
        select_action_eps(&q, eps, rng)
    }

    fn learn(&mut self, buffer: &ReplayBuffer, rng: &mut ChaCha8Rng) -> Option<Vec<f64>> {
        self.agent.learn_step(buffer, rng).map(|t| t.values().to_vec())
    }

    fn telemetry_columns(&self) -> &'static [&'static str] {
        &DqnTelemetry::COLUMNS
    }

    fn checkpoint(&self) -> Option<Checkpoint> {
        Some(self.agent.checkpoint())
    }
}

/// Uniform random actions; the reference baseline.
pub struct RandomAgent;

impl Agent for RandomAgent {
    fn act(&mut self, _obs: &Observation, _buffer: &ReplayBuffer, _episode: usize, rng: &mut ChaCha8Rng) -> Action {
        Action::ALL[rng.random_range(0..Action::COUNT)]
    }

    fn learn(&mut self, _buffer: &ReplayBuffer, _rng: &mut ChaCha8Rng) -> Option<Vec<f64>> {
        None
    }

    fn telemetry_columns(&self) -> &'static [&'static str] {
        &[]
    }

    fn checkpoint(&self) -> Option<Checkpoint> {
        None
    }

    fn learns(&self) -> bool {
        false
    }
}

/// Observation construction for a scenario, interning frames as needed.
enum Observer {
    State,
    Pixels(Option<StackRef>),
}

impl Observer {
    fn start(&mut self, s: State4, buffer: &mut ReplayBuffer) -> Observation {
        match self {
            Observer::State => Observation::State(s),
            Observer::Pixels(stack) => {
                let id = buffer.intern_frame(render(&s));
                Observation::Stack(*stack.insert(StackRef::padded(id)))
            }
        }
    }

    fn next(&mut self, s: State4, buffer: &mut ReplayBuffer) -> Observation {
        match self {
            Observer::State => Observation::State(s),
            Observer::Pixels(stack) => {
                let id = buffer.intern_frame(render(&s));
                let next = stack.map_or(StackRef::padded(id), |st| st.shifted(id));
                Observation::Stack(*stack.insert(next))
            }
        }
    }
}

/// Result of a single run.
#[derive(Clone, Debug)]
pub struct RunOutput {
    pub run: usize,
    pub records: Vec<EpisodeRecord>,
    pub checkpoint: Option<Checkpoint>,
}

fn telemetry_path(cfg: &RunConfig, run: usize) -> PathBuf {
    cfg.out.join(format!("{}_run{run}_telemetry.csv", cfg.stem()))
}

pub fn checkpoint_path(cfg: &RunConfig, run: usize) -> PathBuf {
    cfg.out.join(format!("{}_run{run}.ck", cfg.stem()))
}

fn build_agent(cfg: &RunConfig, vae: Option<&Vae<f32>>, rng: &mut ChaCha8Rng) -> Box<dyn Agent> {
    match (cfg.agent, cfg.scenario) {
        (AgentKind::Random, _) => Box::new(RandomAgent),
        (AgentKind::Daif, Scenario::Mdp) => Box::new(DaifAgent::<f32>::mdp(MdpArch::default(), cfg.daif, rng)),
        (AgentKind::Daif, Scenario::Pomdp) => {
            let vae = vae.cloned().unwrap_or_else(|| Vae::new(PomdpArch::default(), rng));
            Box::new(DaifAgent::<f32>::pomdp(vae, cfg.daif, rng))
        }
        (AgentKind::Dqn, Scenario::Mdp) => Box::new(ScheduledDqn { agent: DqnAgent::mdp(MdpArch::default(), cfg.dqn, rng), total_episodes: cfg.episodes }),
        (AgentKind::Dqn, Scenario::Pomdp) => Box::new(ScheduledDqn { agent: DqnAgent::pomdp(PomdpArch::default(), cfg.dqn, rng), total_episodes: cfg.episodes }),
    }
}

/// One seeded run: select, step, store, learn at every environment step.
/// Telemetry is written to `telemetry` when given.
pub fn run_single(cfg: &RunConfig, run: usize, vae: Option<&Vae<f32>>, telemetry: Option<&mut dyn Write>) -> Result<RunOutput, HarnessError> {
    let seed = cfg.seed.wrapping_add(run as u64);
    let mut init_rng = stream(seed, STREAM_INIT);
    let mut env_rng = stream(seed, STREAM_ENV);
    let mut act_rng = stream(seed, STREAM_ACT);
    let mut replay_rng = stream(seed, STREAM_REPLAY);

    let mut agent = build_agent(cfg, vae, &mut init_rng);
    let mut buffer = ReplayBuffer::new(cfg.buffer_capacity);
    let mut env = CartPole::new();
    let mut observer = match cfg.scenario {
        Scenario::Mdp => Observer::State,
        Scenario::Pomdp => Observer::Pixels(None),
    };
    let stores = agent.learns();
    let mut telemetry = telemetry;
    if let Some(w) = telemetry.as_deref_mut() {
        let header = std::iter::once("learn_step").chain(agent.telemetry_columns().iter().copied()).collect::<Vec<_>>().join(",");
        writeln!(w, "{header}").map_err(|e| HarnessError::io(telemetry_path(cfg, run), e))?;
    }

    let mut learn_steps = 0u64;
    let mut crs = Vec::with_capacity(cfg.episodes);
    for episode in 0..cfg.episodes {
        let s0 = env.reset(env_rng.random());
        let mut obs = if stores { observer.start(s0, &mut buffer) } else { Observation::State(s0) };
        let mut prev: Option<(Observation, Action)> = None;
        let mut cr = 0.0;
        while !env.is_done() {
            let action = agent.act(&obs, &buffer, episode, &mut act_rng);
            let step = env.step(action).expect("episode is live");
            cr += step.reward;
            if !stores {
                continue;
            }
            let next_obs = observer.next(step.next_state, &mut buffer);
            let rec = TransitionRecord { prev, obs, action, reward: step.reward, next_obs, done: step.done };
            buffer.push(rec).expect("records built by the run loop are well formed");
            if let Some(values) = agent.learn(&buffer, &mut replay_rng) {
                learn_steps += 1;
                if let Some(w) = telemetry.as_deref_mut() {
                    if cfg.telemetry_interval > 0 && learn_steps % cfg.telemetry_interval == 0 {
                        let row: Vec<String> = std::iter::once(learn_steps.to_string()).chain(values.iter().map(|v| fmt_sig(*v, 6))).collect();
                        writeln!(w, "{}", row.join(",")).map_err(|e| HarnessError::io(telemetry_path(cfg, run), e))?;
                    }
                }
            }
            prev = Some((obs, action));
            obs = next_obs;
        }
        crs.push(cr);
        if cfg.log_interval > 0 && (episode + 1) % cfg.log_interval == 0 {
            let mar = super::metrics::mar_series(&crs).last().copied().unwrap_or(cr);
            eprintln!("{} run {run} episode {}: cr {cr} mar {mar:.1}", cfg.stem(), episode + 1);
        }
    }
    Ok(RunOutput { run, records: records_for_run(run, &crs), checkpoint: agent.checkpoint() })
}

/// Collected and trained encoder/decoder for the pixel agent.
#[derive(Clone, Debug)]
pub struct Pretrained {
    pub vae: Vae<f32>,
    pub history: Vec<EpochLoss>,
}

fn vae_cache_path(cache: &Path) -> PathBuf {
    let mut s = cache.as_os_str().to_owned();
    s.push(".vae");
    PathBuf::from(s)
}

/// Loads or builds the frame dataset and the pre-trained VAE. With a cache
/// path, both are reused when present and written when absent.
pub fn pretrain_vae(cfg: &RunConfig) -> Result<Pretrained, HarnessError> {
    let dataset = match &cfg.pretrain_cache {
        Some(p) if p.exists() => FrameDataset::read(p)?,
        cache => {
            let d = pretrain::collect(cfg.pretrain.episodes, cfg.pretrain.validation_fraction, cfg.seed)?;
            if let Some(p) = cache {
                d.write(p)?;
            }
            d
        }
    };
    let mut rng = stream(cfg.seed, STREAM_INIT);
    let mut vae = Vae::<f32>::new(PomdpArch::default(), &mut rng);
    if let Some(p) = cfg.pretrain_cache.as_deref().map(vae_cache_path).filter(|p| p.exists()) {
        let f = File::open(&p).map_err(|e| HarnessError::io(&p, e))?;
        let ck = Checkpoint::read(std::io::BufReader::new(f))?;
        ck.load_into("encoder", &mut vae.encoder)?;
        ck.load_into("decoder", &mut vae.decoder)?;
        return Ok(Pretrained { vae, history: Vec::new() });
    }
    let history = pretrain::train(&mut vae, &dataset, &cfg.pretrain, &mut rng)?;
    if let Some(p) = cfg.pretrain_cache.as_deref().map(vae_cache_path) {
        write_vae(&vae, &p)?;
    }
    Ok(Pretrained { vae, history })
}

pub fn write_vae(vae: &Vae<f32>, path: &Path) -> Result<(), HarnessError> {
    let mut ck = Checkpoint::new();
    ck.insert("encoder", &vae.encoder);
    ck.insert("decoder", &vae.decoder);
    write_checkpoint(&ck, path)
}

fn write_checkpoint(ck: &Checkpoint, path: &Path) -> Result<(), HarnessError> {
    let f = File::create(path).map_err(|e| HarnessError::io(path, e))?;
    let mut w = BufWriter::new(f);
    ck.write(&mut w)?;
    w.flush().map_err(|e| HarnessError::io(path, e))
}

/// Everything an experiment produced.
#[derive(Clone, Debug)]
pub struct ExperimentOutput {
    pub records: Vec<EpisodeRecord>,
    pub episodes_csv: PathBuf,
}

/// Validates `cfg`, then executes every run (up to `jobs` at a time) and
/// writes the episode CSV, telemetry and checkpoints under `cfg.out`.
/// The incomplete marker stays behind if anything fails.
pub fn run_experiment(cfg: &RunConfig) -> Result<ExperimentOutput, HarnessError> {
    cfg.validate()?;
    fs::create_dir_all(&cfg.out).map_err(|e| HarnessError::io(&cfg.out, e))?;
    let marker = cfg.out.join(INCOMPLETE_MARKER);
    fs::write(&marker, format!("{} runs={} episodes={} seed={}\n", cfg.stem(), cfg.runs, cfg.episodes, cfg.seed)).map_err(|e| HarnessError::io(&marker, e))?;

    let pretrained = match (cfg.agent, cfg.scenario) {
        (AgentKind::Daif, Scenario::Pomdp) => Some(pretrain_vae(cfg)?),
        _ => None,
    };
    // Each run owns its copy: batch norm statistics are not shareable.
    let tasks: Vec<(usize, Option<Vae<f32>>)> = (0..cfg.runs).map(|r| (r, pretrained.as_ref().map(|p| p.vae.clone()))).collect();

    let one = |(run, vae): (usize, Option<Vae<f32>>)| -> Result<RunOutput, HarnessError> {
        let vae = vae.as_ref();
        let out = if cfg.telemetry_interval > 0 && cfg.agent != AgentKind::Random {
            let path = telemetry_path(cfg, run);
            let f = File::create(&path).map_err(|e| HarnessError::io(&path, e))?;
            let mut w = BufWriter::new(f);
            let out = run_single(cfg, run, vae, Some(&mut w))?;
            w.flush().map_err(|e| HarnessError::io(&path, e))?;
            out
        } else {
            run_single(cfg, run, vae, None)?
        };
        if cfg.checkpoints {
            if let Some(ck) = &out.checkpoint {
                write_checkpoint(ck, &checkpoint_path(cfg, run))?;
            }
        }
        Ok(out)
    };

    let outputs: Vec<RunOutput> = if cfg.jobs == 1 {
        tasks.into_iter().map(one).collect::<Result<_, _>>()?
    } else {
        let pool = rayon::ThreadPoolBuilder::new().num_threads(cfg.jobs).build().map_err(|e| HarnessError::Aggregate(e.to_string()))?;
        pool.install(|| tasks.into_par_iter().map(one).collect::<Result<_, _>>())?
    };

    let records: Vec<EpisodeRecord> = outputs.into_iter().flat_map(|o| o.records).collect();
    let episodes_csv = cfg.episodes_path();
    write_episodes(&episodes_csv, &records)?;
    fs::remove_file(&marker).map_err(|e| HarnessError::io(&marker, e))?;
    Ok(ExperimentOutput { records, episodes_csv })
}
