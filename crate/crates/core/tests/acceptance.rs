//! Acceptance checks, one line per criterion.
//!
//! Runs without the libtest harness so the PASS/FAIL lines always reach the
//! terminal. The extended tier (pixel learning) only runs when
//! `--include-ignored` or `--ignored` is passed; `--ignored` runs it alone.
//! Positional arguments filter criteria by name.

use std::fs;
use std::process::ExitCode;
use std::time::Instant;

use efe_autodiff::gradcheck::{check_params, GradCheck};
use efe_autodiff::{Graph, Module, Param, Tensor};
use efe_lab::agent_daif::{efe_targets, value_loss, vfe_loss, BeliefInput, VfeInputs};
use efe_lab::agent_dqn::{td_loss, QNet};
use efe_lab::env::{dynamics, integrate, render, Action, State4};
use efe_lab::harness::{mar_series, pretrain_vae, run_experiment, AgentKind, EpisodeRecord, RunConfig, Scenario};
use efe_lab::networks::{stacks_to_batch, ConvQNet, ConvTrunk, Decoder, Encoder, MdpArch, Mlp, ObservationStack, PomdpArch, Vae};
use efe_lab::numerics::{boltzmann, kl_categorical, kl_diag_gaussian, Categorical, DiagGaussian};
use efe_lab::replay::{Observation, ReplayBuffer, TransitionRecord};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

// ---- pinned tolerances and thresholds ----------------------------------------

const DYNAMICS_TOL: f64 = 1e-9;
const GRAD_TOL: f64 = 1e-4;
const GRAD_STEP: f64 = 1e-6;
/// Both gradient norms below this count as a structural zero.
const GRAD_ZERO: f64 = 1e-6;
const ARITH_TOL: f64 = 1e-12;
const SIMPLEX_TOL: f64 = 1e-6;
const SHIFT_TOL: f64 = 1e-9;
const RANDOM_INPUTS: usize = 1000;
/// chi-square 99th percentile, 99 degrees of freedom.
const CHI2_99_DF_P01: f64 = 134.641_616_855_789_15;
/// Mean episode length of the uniform random policy.
const RANDOM_BASELINE: f64 = 22.0;
const MDP_RUNS: usize = 3;
const MDP_EPISODES: usize = 2000;
const MDP_MEDIAN_MIN: f64 = 300.0;
const MDP_RUN_MIN: f64 = 10.0 * RANDOM_BASELINE;
const POMDP_RUNS: usize = 3;
const POMDP_EPISODES: usize = 500;
const POMDP_RUN_MIN: f64 = 1.5 * RANDOM_BASELINE;
const POMDP_RUNS_NEEDED: usize = 2;
const SMOKE_EPISODES: usize = 20;

type Outcome = Result<String, String>;

fn check(ok: bool, msg: impl Into<String>) -> Result<(), String> {
    if ok {
        Ok(())
    } else {
        Err(msg.into())
    }
}

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

fn random(shape: &[usize], r: &mut ChaCha8Rng, lo: f64, hi: f64) -> Tensor<f64> {
    let n = shape.iter().product();
    Tensor::new(shape, (0..n).map(|_| r.random_range(lo..hi)).collect()).unwrap()
}

// ---- 1 -------------------------------------------------------------------------

fn dynamics_oracle() -> Outcome {
    let expected = [0.0, 0.195_121_95, 0.0, -0.292_682_93];
    // closed form from rest: x_acc = F/M - m l θ_acc/M, θ_acc = -F/M / (l (4/3 - m/M))
    let m = 1.1;
    let theta_acc = -(10.0 / m) / (0.5 * (4.0 / 3.0 - 0.1 / m));
    let x_acc = 10.0 / m - 0.05 * theta_acc / m;
    let exact = [0.0, 0.02 * x_acc, 0.0, 0.02 * theta_acc];
    let right = dynamics(State4::default(), Action::PushRight).to_array();
    for i in 0..4 {
        check((right[i] - exact[i]).abs() < DYNAMICS_TOL, format!("component {i}: {} vs closed form {}", right[i], exact[i]))?;
        check((right[i] - expected[i]).abs() < 1e-8, format!("component {i}: {} vs {}", right[i], expected[i]))?;
    }
    let left = dynamics(State4::default(), Action::PushLeft).to_array();
    check(left.iter().zip(&right).all(|(l, r)| *l == -r), "PushLeft is not the exact mirror of PushRight")?;
    Ok(format!("x_dot {:.8}, theta_dot {:.8}, mirror exact", right[1], right[3]))
}

// ---- 2 -------------------------------------------------------------------------

fn fc(i: usize, o: usize) -> usize {
    i * o + o
}
fn conv(i: usize, o: usize) -> usize {
    i * o * 25 + o
}
fn bn(c: usize) -> usize {
    2 * c
}

fn architecture() -> Outcome {
    let arch = PomdpArch::default();
    let mut r = rng(0);
    let trunk = ConvTrunk::<f32>::new(arch, &mut r);
    let mut s = State4::new(0.1, 0.2, 0.05, -0.3);
    let frames: Vec<_> = (0..4)
        .map(|_| {
            let f = render(&s);
            s = integrate(s, 10.0);
            f
        })
        .collect();
    let stack = ObservationStack::new(frames.try_into().unwrap());
    check(stack.to_tensor::<f32>().shape() == [3, 37, 85, 4], "stack shape")?;
    let f = stack.frames();
    let x = stacks_to_batch::<f32, _>([[&f[0], &f[1], &f[2], &f[3]]]);
    let mut g = Graph::no_grad();
    let xv = g.constant(x);
    let h = trunk.forward(&mut g, xv, false);
    let flat = g.shape(h).to_vec();
    check(flat == [1, 2048], format!("flattened trunk output {flat:?}"))?;

    let (n_l, n_a) = (32, 2);
    let trunk_n = conv(3, 16) + bn(16) + conv(16, 32) + bn(32) + conv(32, 32) + bn(32);
    let counts = [
        ("conv trunk", trunk.num_params(), trunk_n),
        ("encoder", Encoder::<f32>::new(arch, &mut r).num_params(), trunk_n + fc(2048, 1024) + 2 * fc(1024, n_l)),
        ("decoder", Decoder::<f32>::new(arch, &mut r).num_params(), fc(n_l, 1024) + fc(1024, 2048) + conv(32, 16) + bn(16) + conv(16, 3) + bn(3) + conv(3, 3)),
        ("pomdp transition", Mlp::<f32>::new(2 * n_l + 1, 64, n_l, &mut r).num_params(), fc(2 * n_l + 1, 64) + fc(64, n_l)),
        ("pomdp policy", Mlp::<f32>::new(2 * n_l, 64, n_a, &mut r).num_params(), fc(2 * n_l, 64) + fc(64, n_a)),
        ("pomdp efe value", Mlp::<f32>::new(2 * n_l, 64, n_a, &mut r).num_params(), fc(2 * n_l, 64) + fc(64, n_a)),
        ("pomdp q network", ConvQNet::<f32>::new(arch, &mut r).num_params(), trunk_n + fc(2048, 1024) + fc(1024, n_a)),
    ];
    let m = MdpArch::default();
    let mdp = [
        ("mdp transition", Mlp::<f32>::new(m.state_dim + 1, m.hidden, m.state_dim, &mut r).num_params(), fc(5, 64) + fc(64, 4)),
        ("mdp policy/value/q", Mlp::<f32>::new(m.state_dim, m.hidden, m.actions, &mut r).num_params(), fc(4, 64) + fc(64, 2)),
    ];
    for (name, got, want) in counts.iter().chain(&mdp) {
        check(got == want, format!("{name}: {got} parameters, table gives {want}"))?;
    }
    Ok(format!("flatten 2048, {} parameter counts match", counts.len() + mdp.len()))
}

// ---- 3 -------------------------------------------------------------------------

fn tagged<'m>(tag: &str, m: &'m mut impl Module<f64>) -> Vec<(String, &'m mut Param<f64>)> {
    m.params_mut().into_iter().enumerate().map(|(i, p)| (format!("{tag}{i}"), p)).collect()
}

fn distribution_rows(rows: usize, r: &mut ChaCha8Rng) -> Tensor<f64> {
    let data = (0..rows).flat_map(|_| {
        let a: f64 = r.random_range(0.05..0.95);
        [a, 1.0 - a]
    });
    Tensor::new(&[rows, 2], data.collect()).unwrap()
}

struct VfeNets {
    transition: Mlp<f64>,
    policy: Mlp<f64>,
    vae: Vae<f64>,
}

fn summarize(label: &str, checks: &[GradCheck], worst: &mut f64) -> Result<usize, String> {
    check(!checks.is_empty(), format!("{label}: nothing checked"))?;
    for c in checks {
        if !c.vanishes(GRAD_ZERO) {
            *worst = worst.max(c.relative_error);
        }
        check(c.passes(GRAD_TOL) || c.vanishes(GRAD_ZERO), format!("{label}/{}: relative error {:.3e}", c.name, c.relative_error))?;
    }
    Ok(checks.len())
}

fn gradient_checks() -> Outcome {
    let arch = PomdpArch::miniature();
    check(arch.latent == 4 && arch.frame == [3, 9, 9] && arch.stack == 4, "miniature is not latent 4 on 3x9x9x4 frames")?;
    let mut r = rng(3);
    let mut worst = 0.0f64;
    let mut n = 0;
    let h = arch.mlp_hidden;
    let feat = 2 * arch.latent;

    let pixels = random(&[3 * 4, 3, 9, 9], &mut r, 0.0, 1.0);
    let noise = random(&[3, arch.latent], &mut r, -1.0, 1.0);
    let mut nets = VfeNets { transition: Mlp::new(feat + 1, h, arch.latent, &mut r), policy: Mlp::new(feat, h, 2, &mut r), vae: Vae::new(arch, &mut r) };
    let inputs = VfeInputs {
        belief: BeliefInput::Encoded { pixels: pixels.clone(), noise: noise.clone() },
        prev_features: random(&[3, feat], &mut r, -1.0, 1.0),
        prev_actions: vec![1, 0, 1],
        has_prev: vec![true, true, false],
        prior: distribution_rows(3, &mut r),
    };
    let checks = check_params(
        &mut nets,
        GRAD_STEP,
        24,
        |m, g| vfe_loss(g, &m.transition, &m.policy, Some(&m.vae), &inputs, 1.0).total,
        |m| {
            let mut v = tagged("transition", &mut m.transition);
            v.extend(tagged("policy", &mut m.policy));
            v.extend(tagged("vae", &mut m.vae));
            v
        },
    );
    n += summarize("free energy", &checks, &mut worst)?;

    let mut efe = Mlp::<f64>::new(feat, h, 2, &mut r);
    let x = random(&[6, feat], &mut r, -1.0, 1.0);
    let g_hat: Vec<f64> = (0..6).map(|_| r.random_range(-3.0..3.0)).collect();
    let actions = [0, 1, 1, 0, 0, 1];
    let checks = check_params(&mut efe, GRAD_STEP, 64, |m, g| value_loss(g, m, x.clone(), &actions, &g_hat).0, |m| tagged("efe", m));
    n += summarize("value loss", &checks, &mut worst)?;

    let targets: Vec<f64> = (0..3).map(|_| r.random_range(-2.0..2.0)).collect();
    let mut q = QNet::Pixels(ConvQNet::<f64>::new(arch, &mut r));
    let checks = check_params(&mut q, GRAD_STEP, 64, |m, g| td_loss(g, m, pixels.clone(), &[1, 0, 1], &targets), |m| tagged("q", m));
    n += summarize("td loss", &checks, &mut worst)?;

    let mut vae = Vae::<f64>::new(arch, &mut r);
    let checks = check_params(
        &mut vae,
        GRAD_STEP,
        24,
        |m, g| {
            let t = m.terms(g, &pixels, noise.clone(), true);
            g.add(t.reconstruction, t.kl)
        },
        |m| tagged("vae", m),
    );
    n += summarize("vae pre-training", &checks, &mut worst)?;
    Ok(format!("{n} parameter tensors, worst relative error {worst:.2e}"))
}

// ---- 4 -------------------------------------------------------------------------

fn arithmetic_oracles() -> Outcome {
    let g = efe_targets(&[1.0], &[0.0], &[false], &[vec![0.5, 0.5]], &[vec![4.0, 6.0]], 0.99);
    check((g[0] - 3.95).abs() < ARITH_TOL, format!("bootstrapped target {} vs 3.95", g[0]))?;

    let mut efe = Mlp::<f64>::new(1, 3, 2, &mut rng(7));
    for p in efe.params_mut() {
        p.value.data_mut().fill(0.0);
    }
    efe.output.bias.value.data_mut().copy_from_slice(&[1.0, 2.0]);
    let mut graph = Graph::new();
    let (loss, _) = value_loss(&mut graph, &efe, Tensor::zeros(&[2, 1]), &[0, 1], &[3.0, 2.0]);
    let loss = graph.value(loss).item();
    check((loss - 2.0).abs() < ARITH_TOL, format!("value loss {loss} vs 2.0"))?;

    let mar = mar_series(&[10.0, 20.0]);
    check(mar == [10.0, 11.0], format!("MAR {mar:?} vs [10, 11]"))?;
    Ok(format!("target {:.2}, value loss {loss}, MAR {mar:?}", g[0]))
}

// ---- 5 -------------------------------------------------------------------------

fn record(i: usize) -> TransitionRecord {
    let s = State4::new(i as f64, 0.0, 0.0, 0.0);
    TransitionRecord { prev: None, obs: Observation::State(s), action: Action::PushRight, reward: 1.0, next_obs: Observation::State(s), done: false }
}

fn distribution_properties() -> Outcome {
    let mut r = rng(5);
    for _ in 0..RANDOM_INPUTS {
        let g = [r.random_range(-100.0..100.0), r.random_range(-100.0..100.0)];
        let gamma = r.random_range(0.01..12.0);
        let c = r.random_range(-100.0..100.0);
        let p = boltzmann(&g, gamma);
        check((p.probs().iter().sum::<f64>() - 1.0).abs() < SIMPLEX_TOL && p.probs().iter().all(|v| *v >= 0.0), format!("boltzmann({g:?}, {gamma}) not normalized"))?;
        let shifted = boltzmann(&[g[0] + c, g[1] + c], gamma);
        check(p.probs().iter().zip(shifted.probs()).all(|(a, b)| (a - b).abs() < SHIFT_TOL), format!("boltzmann({g:?}, {gamma}) changes under shift {c}"))?;

        let cat = |r: &mut ChaCha8Rng| {
            let a: f64 = r.random_range(1e-3..1.0);
            Categorical::new(vec![a, 1.0 - a]).unwrap()
        };
        let kl = kl_categorical(&cat(&mut r), &cat(&mut r)).unwrap().total();
        check(kl >= 0.0, format!("categorical KL {kl}"))?;
        let gauss = |r: &mut ChaCha8Rng| DiagGaussian::new((0..4).map(|_| r.random_range(-5.0..5.0)).collect(), (0..4).map(|_| r.random_range(1e-3..10.0)).collect()).unwrap();
        let kl = kl_diag_gaussian(&gauss(&mut r), &gauss(&mut r)).unwrap();
        check(kl >= 0.0, format!("gaussian KL {kl}"))?;
    }

    let mut buf = ReplayBuffer::new(100);
    for i in 0..100 {
        buf.push(record(i)).unwrap();
    }
    let mut counts = [0u64; 100];
    let draws = 1_000_000;
    for _ in 0..draws / 100 {
        for rec in buf.sample(100, &mut r).unwrap() {
            counts[rec.obs.as_state().unwrap().x as usize] += 1;
        }
    }
    let expected = draws as f64 / 100.0;
    let stat: f64 = counts.iter().map(|&c| (c as f64 - expected).powi(2) / expected).sum();
    check(stat < CHI2_99_DF_P01, format!("replay chi-square {stat:.1} exceeds {CHI2_99_DF_P01:.1}"))?;
    Ok(format!("{RANDOM_INPUTS} random inputs, replay chi-square {stat:.1} < {CHI2_99_DF_P01:.1}"))
}

// ---- 6, 7 ----------------------------------------------------------------------

fn final_mars(records: &[EpisodeRecord], runs: usize) -> Vec<f64> {
    (0..runs).map(|run| records.iter().filter(|r| r.run == run).max_by_key(|r| r.episode).map_or(0.0, |r| r.mar)).collect()
}

fn median(v: &[f64]) -> f64 {
    let mut s = v.to_vec();
    s.sort_by(f64::total_cmp);
    let n = s.len();
    if n % 2 == 1 {
        s[n / 2]
    } else {
        0.5 * (s[n / 2 - 1] + s[n / 2])
    }
}

fn mdp_learning() -> Outcome {
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let mut cfg = RunConfig::new(AgentKind::Daif, Scenario::Mdp);
    cfg.runs = MDP_RUNS;
    cfg.episodes = MDP_EPISODES;
    cfg.seed = 0;
    cfg.out = dir.path().to_path_buf();
    cfg.checkpoints = false;
    let out = run_experiment(&cfg).map_err(|e| e.to_string())?;
    let finals = final_mars(&out.records, MDP_RUNS);
    let med = median(&finals);
    let shown: Vec<String> = finals.iter().map(|v| format!("{v:.1}")).collect();
    let summary = format!("final MAR [{}], median {med:.1}", shown.join(", "));
    check(med >= MDP_MEDIAN_MIN, format!("{summary}; median below {MDP_MEDIAN_MIN}"))?;
    check(finals.iter().all(|&v| v >= MDP_RUN_MIN), format!("{summary}; a run is below {MDP_RUN_MIN} (10x random)"))?;
    Ok(summary)
}

fn pomdp_learning() -> Outcome {
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let mut cfg = RunConfig::new(AgentKind::Daif, Scenario::Pomdp);
    cfg.runs = POMDP_RUNS;
    cfg.episodes = POMDP_EPISODES;
    cfg.seed = 0;
    cfg.out = dir.path().join("runs");
    cfg.pretrain_cache = Some(dir.path().join("frames.ds"));
    cfg.checkpoints = false;

    let pre = pretrain_vae(&cfg).map_err(|e| e.to_string())?;
    let first = pre.history.first().and_then(|h| h.validation).ok_or("no validation loss")?;
    let last = pre.history.last().and_then(|h| h.validation).ok_or("no validation loss")?;
    check(last < first, format!("validation loss {first:.2} -> {last:.2} did not decrease"))?;

    // the experiment reuses the cached weights
    let out = run_experiment(&cfg).map_err(|e| e.to_string())?;
    let finals = final_mars(&out.records, POMDP_RUNS);
    let above = finals.iter().filter(|&&v| v > POMDP_RUN_MIN).count();
    let shown: Vec<String> = finals.iter().map(|v| format!("{v:.1}")).collect();
    let summary = format!("validation {first:.2} -> {last:.2}, MAR after {POMDP_EPISODES} episodes [{}]", shown.join(", "));
    check(above >= POMDP_RUNS_NEEDED, format!("{summary}; {above} runs above {POMDP_RUN_MIN}"))?;
    Ok(summary)
}

// ---- 8 -------------------------------------------------------------------------

fn determinism() -> Outcome {
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let cache = dir.path().join("frames.ds");
    let mut compared = Vec::new();
    for (agent, scenario) in [
        (AgentKind::Daif, Scenario::Mdp),
        (AgentKind::Dqn, Scenario::Mdp),
        (AgentKind::Random, Scenario::Mdp),
        (AgentKind::Daif, Scenario::Pomdp),
        (AgentKind::Dqn, Scenario::Pomdp),
    ] {
        let mut bytes = Vec::new();
        for attempt in 0..2 {
            let mut cfg = RunConfig::new(agent, scenario);
            cfg.runs = 1;
            cfg.episodes = SMOKE_EPISODES;
            cfg.seed = 11;
            cfg.jobs = 1;
            cfg.out = dir.path().join(format!("{}-{attempt}", cfg.stem()));
            // pre-training at smoke scale, recomputed on each attempt
            cfg.pretrain.episodes = 4;
            cfg.pretrain.epochs = 1;
            cfg.pretrain_cache = Some(cache.with_extension(attempt.to_string()));
            let out = run_experiment(&cfg).map_err(|e| e.to_string())?;
            bytes.push(fs::read(&out.episodes_csv).map_err(|e| e.to_string())?);
        }
        check(bytes[0] == bytes[1], format!("{agent} {scenario}: episode CSVs differ"))?;
        compared.push(format!("{agent}_{scenario}"));
    }
    Ok(format!("byte-identical CSVs for {}", compared.join(", ")))
}

// ---- driver --------------------------------------------------------------------

struct Criterion {
    id: u32,
    name: &'static str,
    extended: bool,
    run: fn() -> Outcome,
}

const CRITERIA: [Criterion; 8] = [
    Criterion { id: 1, name: "dynamics oracle", extended: false, run: dynamics_oracle },
    Criterion { id: 2, name: "architecture conformance", extended: false, run: architecture },
    Criterion { id: 3, name: "gradient checks", extended: false, run: gradient_checks },
    Criterion { id: 4, name: "arithmetic oracles", extended: false, run: arithmetic_oracles },
    Criterion { id: 5, name: "distribution properties", extended: false, run: distribution_properties },
    Criterion { id: 6, name: "mdp learning", extended: false, run: mdp_learning },
    Criterion { id: 7, name: "pomdp learning", extended: true, run: pomdp_learning },
    Criterion { id: 8, name: "determinism", extended: false, run: determinism },
];

fn main() -> ExitCode {
    let args: Vec<String> = std::env::args().skip(1).collect();
    let include_extended = args.iter().any(|a| a == "--include-ignored" || a == "--ignored");
    let only_extended = args.iter().any(|a| a == "--ignored");
    let filters: Vec<&String> = args.iter().filter(|a| !a.starts_with('-')).collect();
    // `cargo test --list` expects no output beyond the listing
    if args.iter().any(|a| a == "--list") {
        for c in &CRITERIA {
            println!("criterion_{}: test", c.id);
        }
        return ExitCode::SUCCESS;
    }

    let mut failed = 0;
    for c in &CRITERIA {
        let label = format!("criterion {} ({})", c.id, c.name);
        if !filters.is_empty() && !filters.iter().any(|f| label.contains(f.as_str()) || format!("criterion_{}", c.id).contains(f.as_str())) {
            continue;
        }
        if c.extended && !include_extended {
            println!("{label}: SKIP extended tier, pass --include-ignored to run");
            continue;
        }
        if only_extended && !c.extended {
            continue;
        }
        let start = Instant::now();
        let outcome = (c.run)();
        let secs = start.elapsed().as_secs_f64();
        match outcome {
            Ok(detail) => println!("{label}: PASS {detail} [{secs:.1}s]"),
            Err(detail) => {
                failed += 1;
                println!("{label}: FAIL {detail} [{secs:.1}s]");
            }
        }
    }
    if failed > 0 {
        println!("acceptance: {failed} criteria failed");
        ExitCode::FAILURE
    } else {
        ExitCode::SUCCESS
    }
}
