use efe_autodiff::gradcheck::{check_params, GradCheck};
use efe_autodiff::{Graph, Module, Param, Tensor, Var};
use efe_lab::env::{render, State4};
use efe_lab::networks::{
    stacks_to_batch, transition_input, Checkpoint, ConvQNet, ConvTrunk, Decoder, Encoder, Mlp, MdpArch, ObservationStack, PomdpArch, Vae,
};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

// Parameter counts straight from the layer tables.
fn fc(inputs: usize, outputs: usize) -> usize {
    inputs * outputs + outputs
}
fn conv(inputs: usize, outputs: usize) -> usize {
    inputs * outputs * 5 * 5 + outputs
}
fn bn(channels: usize) -> usize {
    2 * channels
}

#[test]
fn trunk_shapes_and_flatten_length() {
    let arch = PomdpArch::default();
    let shapes = arch.trunk_shapes().unwrap();
    assert_eq!(shapes, [[3, 37, 85], [16, 17, 41], [32, 7, 19], [32, 2, 8]]);
    assert_eq!(arch.flatten_len(), 2048);
    arch.validate().unwrap();
    PomdpArch::miniature().validate().unwrap();
}

#[test]
fn pomdp_parameter_counts_match_tables() {
    let arch = PomdpArch::default();
    let n_l = 32;
    let n_a = 2;
    let trunk = conv(3, 16) + bn(16) + conv(16, 32) + bn(32) + conv(32, 32) + bn(32);
    let encoder = trunk + fc(2048, 1024) + 2 * fc(1024, n_l);
    let decoder = fc(n_l, 1024) + fc(1024, 2048) + conv(32, 16) + bn(16) + conv(16, 3) + bn(3) + conv(3, 3);
    let mut r = rng(0);
    assert_eq!(ConvTrunk::<f32>::new(arch, &mut r).num_params(), trunk);
    assert_eq!(Encoder::<f32>::new(arch, &mut r).num_params(), encoder);
    assert_eq!(Decoder::<f32>::new(arch, &mut r).num_params(), decoder);
    assert_eq!(Mlp::<f32>::new(2 * n_l + 1, 64, n_l, &mut r).num_params(), fc(65, 64) + fc(64, 32));
    assert_eq!(Mlp::<f32>::new(2 * n_l, 64, n_a, &mut r).num_params(), fc(64, 64) + fc(64, 2));
    assert_eq!(ConvQNet::<f32>::new(arch, &mut r).num_params(), trunk + fc(2048, 1024) + fc(1024, n_a));
}

#[test]
fn mdp_parameter_counts_match_tables() {
    let MdpArch { state_dim: n_s, hidden, actions: n_a } = MdpArch::default();
    assert_eq!((n_s, hidden, n_a), (4, 64, 2));
    let mut r = rng(1);
    assert_eq!(Mlp::<f32>::new(n_s + 1, 64, n_s, &mut r).num_params(), 5 * 64 + 64 + 64 * 4 + 4);
    assert_eq!(Mlp::<f32>::new(n_s, 64, n_a, &mut r).num_params(), 4 * 64 + 64 + 64 * 2 + 2);
}

fn sample_stack(seed: u64) -> ObservationStack {
    let mut r = rng(seed);
    let mut s = State4::new(r.random_range(-1.0..1.0), 0.3, r.random_range(-0.2..0.2), -0.5);
    let mut frames = Vec::new();
    for _ in 0..4 {
        frames.push(render(&s));
        s = efe_lab::env::integrate(s, 10.0);
    }
    ObservationStack::new(frames.try_into().unwrap())
}

#[test]
fn encode_is_positive_and_deterministic() {
    let arch = PomdpArch::default();
    let enc = Encoder::<f32>::new(arch, &mut rng(2));
    let o = sample_stack(3).to_tensor::<f32>();
    let a = enc.encode(&o).unwrap();
    let b = enc.encode(&o).unwrap();
    assert_eq!(a, b);
    assert_eq!(a[0].dim(), 32);
    assert!(a[0].s_sigma.iter().all(|&v| v > 0.0));
    assert!(enc.encode(&Tensor::zeros(&[3, 37, 85, 3])).is_err());
}

#[test]
fn decode_restores_stack_shape_in_unit_range() {
    let arch = PomdpArch::default();
    let vae = Vae::<f32>::new(arch, &mut rng(4));
    let o = sample_stack(5).to_tensor::<f32>();
    let belief = vae.encoder.encode(&o).unwrap().remove(0);
    let x = vae.decoder.decode(&belief.s_mu).unwrap();
    assert_eq!(x.shape(), o.shape());
    assert!(x.data().iter().all(|v| (0.0..=1.0).contains(v)));
    assert!(vae.decoder.decode(&[0.0; 31]).is_err());
}

#[test]
fn q_values_have_one_entry_per_action() {
    let arch = PomdpArch::default();
    let q = ConvQNet::<f32>::new(arch, &mut rng(6));
    let o = sample_stack(7).to_tensor::<f32>();
    let v = q.q_values(&o).unwrap();
    assert_eq!(v.len(), 1);
    assert_eq!(v[0].len(), 2);
    assert_eq!(v, q.q_values(&o).unwrap());
    assert!(q.q_values(&Tensor::zeros(&[2, 3, 37, 85])).is_err());

    let mdp = Mlp::<f32>::new(4, 64, 2, &mut rng(8));
    assert_eq!(mdp.eval(&[0.01, 0.0, -0.02, 0.1]).unwrap().len(), 2);
}

#[test]
fn batched_frames_match_single_stack_encoding() {
    let arch = PomdpArch::default();
    let enc = Encoder::<f32>::new(arch, &mut rng(9));
    let stacks = [sample_stack(10), sample_stack(11)];
    let batch = stacks_to_batch::<f32, _>(stacks.iter().map(|s| {
        let f = s.frames();
        [&f[0], &f[1], &f[2], &f[3]]
    }));
    let together = enc.encode_internal(batch);
    for (s, b) in stacks.iter().zip(&together) {
        let alone = enc.encode(&s.to_tensor()).unwrap().remove(0);
        for (x, y) in alone.s_mu.iter().zip(&b.s_mu) {
            assert!((x - y).abs() < 1e-5);
        }
    }
}

#[test]
fn checkpoint_round_trip_and_shape_rejection() {
    let mut r = rng(12);
    let arch = PomdpArch::miniature();
    let enc = Encoder::<f32>::new(arch, &mut r);
    let pol = Mlp::<f32>::new(8, 5, 2, &mut r);
    let mut ck = Checkpoint::new();
    ck.insert("encoder", &enc);
    ck.insert("policy", &pol);
    let mut bytes = Vec::new();
    ck.write(&mut bytes).unwrap();
    let back = Checkpoint::read(bytes.as_slice()).unwrap();
    assert_eq!(back, ck);

    let mut fresh = Encoder::<f32>::new(arch, &mut r);
    back.load_into("encoder", &mut fresh).unwrap();
    assert_eq!(fresh.state(), enc.state());

    let mut wrong = Mlp::<f32>::new(8, 6, 2, &mut r);
    assert!(back.load_into("policy", &mut wrong).is_err());
    assert!(back.load_into("missing", &mut wrong).is_err());
    assert!(Checkpoint::read(&bytes[..bytes.len() - 1]).is_err());
    assert!(Checkpoint::read(&b"NOTACKPT"[..]).is_err());
}

// ---- miniature finite-difference checks --------------------------------

const TOL: f64 = 1e-4;
const STEP: f64 = 1e-6;
/// Below this norm both gradients count as zero; finite differences of a
/// flat direction return rounding noise of order `1e-16 · |loss| / STEP`.
const ZERO: f64 = 1e-6;

fn named<M: Module<f64>>(m: &mut M) -> Vec<(String, &mut Param<f64>)> {
    m.params_mut().into_iter().enumerate().map(|(i, p)| (format!("p{i}"), p)).collect()
}

fn random(shape: &[usize], r: &mut ChaCha8Rng, lo: f64, hi: f64) -> Tensor<f64> {
    let n = shape.iter().product();
    Tensor::new(shape, (0..n).map(|_| r.random_range(lo..hi)).collect()).unwrap()
}

fn project(g: &mut Graph<'_, f64>, y: Var, seed: u64) -> Var {
    let w = random(g.shape(y), &mut rng(seed), -1.0, 1.0);
    let w = g.constant(w);
    let p = g.mul(y, w);
    g.sum(p)
}

fn assert_pass(label: &str, checks: &[GradCheck]) {
    assert!(!checks.is_empty());
    for c in checks {
        assert!(
            c.passes(TOL) || c.vanishes(ZERO),
            "{label}/{}: relative error {:.3e} (norms {:.3e} / {:.3e})",
            c.name,
            c.relative_error,
            c.analytic_norm,
            c.numeric_norm
        );
    }
}

#[test]
fn miniature_vae_gradients() {
    let arch = PomdpArch::miniature();
    let mut r = rng(13);
    let mut vae = Vae::<f64>::new(arch, &mut r);
    let x = random(&[3 * 4, 3, 9, 9], &mut r, 0.0, 1.0);
    let noise = random(&[3, 4], &mut r, -1.0, 1.0);
    let checks = check_params(
        &mut vae,
        STEP,
        24,
        |m, g| {
            let t = m.terms(g, &x, noise.clone(), true);
            let l = g.add(t.reconstruction, t.kl);
            g.sum(l)
        },
        named,
    );
    assert_pass("vae", &checks);
}

#[test]
fn miniature_encoder_eval_and_q_gradients() {
    let arch = PomdpArch::miniature();
    let mut r = rng(14);
    let x = random(&[2 * 4, 3, 9, 9], &mut r, 0.0, 1.0);
    let mut enc = Encoder::<f64>::new(arch, &mut r);
    let checks = check_params(
        &mut enc,
        STEP,
        24,
        |m, g| {
            let xv = g.constant(x.clone());
            let (mean, var) = m.forward(g, xv, false);
            let a = project(g, mean, 1);
            let b = project(g, var, 2);
            g.add(a, b)
        },
        named,
    );
    assert_pass("encoder-eval", &checks);

    let mut q = ConvQNet::<f64>::new(arch, &mut r);
    let checks = check_params(
        &mut q,
        STEP,
        24,
        |m, g| {
            let xv = g.constant(x.clone());
            let y = m.forward(g, xv, true);
            project(g, y, 3)
        },
        named,
    );
    assert_pass("conv-q", &checks);
}

#[test]
fn miniature_mlp_gradients() {
    let mut r = rng(15);
    let feats = random(&[5, 8], &mut r, -1.0, 1.0);
    let mut trans = Mlp::<f64>::new(9, 5, 4, &mut r);
    let checks = check_params(
        &mut trans,
        STEP,
        32,
        |m, g| {
            let f = g.constant(feats.clone());
            let x = transition_input(g, &[f], &[0, 1, 1, 0, 1]);
            let y = m.forward(g, x);
            project(g, y, 4)
        },
        named,
    );
    assert_pass("transition", &checks);

    let mut policy = Mlp::<f64>::new(8, 5, 2, &mut r);
    let checks = check_params(
        &mut policy,
        STEP,
        32,
        |m, g| {
            let f = g.constant(feats.clone());
            let y = m.forward_probs(g, f);
            project(g, y, 5)
        },
        named,
    );
    assert_pass("policy", &checks);
}
