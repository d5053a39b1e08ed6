use std::path::PathBuf;

use efe_lab::env::{dynamics, initial_state, render, Action, CartPole, Frame, State4, BACKGROUND, CART, HEIGHT, MAX_STEPS, POLE, WIDTH};
use proptest::prelude::*;

#[test]
fn push_left_mirrors_push_right_exactly() {
    let r = dynamics(State4::default(), Action::PushRight);
    let l = dynamics(State4::default(), Action::PushLeft);
    for (a, b) in r.to_array().iter().zip(l.to_array()) {
        assert_eq!(*a, -b);
    }
    let s = State4::new(0.1, -0.2, 0.03, 0.4);
    let m = State4::new(-0.1, 0.2, -0.03, -0.4);
    let (a, b) = (dynamics(s, Action::PushRight).to_array(), dynamics(m, Action::PushLeft).to_array());
    for (a, b) in a.iter().zip(b) {
        assert_eq!(*a, -b);
    }
}

#[test]
fn first_step_from_rest() {
    let mut env = CartPole::new();
    env.reset(0);
    let r = dynamics(State4::default(), Action::PushRight);
    let expected = [0.0, 0.195_121_951_219_512_2, 0.0, -0.292_682_926_829_268_3];
    for (a, b) in r.to_array().iter().zip(expected) {
        assert!((a - b).abs() < 1e-9, "{a} vs {b}");
    }
    let out = env.step(Action::PushRight).unwrap();
    assert_eq!(out.reward, 1.0);
}

#[test]
fn distinct_seeds_give_distinct_states() {
    let differ = (0..1000u64).filter(|&s| initial_state(2 * s) != initial_state(2 * s + 1)).count();
    assert_eq!(differ, 1000);
}

/// Alternating pushes keep the pole up long enough to reach the step cap.
fn balancing_action(s: &State4) -> Action {
    if s.theta + 0.5 * s.theta_dot > 0.0 {
        Action::PushRight
    } else {
        Action::PushLeft
    }
}

#[test]
fn episode_ends_at_the_step_cap() {
    let mut env = CartPole::new();
    let mut s = env.reset(1);
    let mut steps = 0;
    loop {
        let out = env.step(balancing_action(&s)).unwrap();
        steps += 1;
        s = out.next_state;
        if out.done {
            break;
        }
    }
    assert_eq!(steps, MAX_STEPS);
    assert!(s.is_live());
    assert!(env.step(Action::PushLeft).is_err());
}

proptest! {
    #[test]
    fn episodes_terminate_and_frames_stay_valid(seed in any::<u64>(), actions in proptest::collection::vec(0usize..2, 500)) {
        let mut env = CartPole::new();
        env.reset(seed);
        let mut steps = 0u32;
        for a in actions {
            let out = env.step(Action::from_index(a).unwrap()).unwrap();
            steps += 1;
            prop_assert!(out.next_state.is_finite());
            let f = render(&out.next_state);
            prop_assert_eq!(f.shape(), [3, HEIGHT, WIDTH]);
            prop_assert!(f.to_real().iter().all(|v| (0.0..=1.0).contains(v)));
            prop_assert_eq!(out.done, !out.next_state.is_live() || steps == MAX_STEPS);
            if out.done {
                break;
            }
        }
        prop_assert!(steps <= MAX_STEPS);
    }

    #[test]
    fn dynamics_are_deterministic(x in -2.4f64..2.4, v in -3.0f64..3.0, t in -0.2f64..0.2, w in -3.0f64..3.0, a in 0usize..2) {
        let s = State4::new(x, v, t, w);
        let a = Action::from_index(a).unwrap();
        prop_assert_eq!(dynamics(s, a), dynamics(s, a));
    }
}

#[test]
fn pixel_encoding_constants() {
    let f = render(&State4::default());
    assert_eq!(f.rgb(0, 0), BACKGROUND);
    assert_eq!(f.get(0, 0, 0), 1.0);
    assert_eq!(f.rgb(30, 42), CART);
    assert!(POLE.iter().any(|&c| c != POLE[0]), "pole channels differ");
}

fn golden_dir() -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("tests/golden")
}

const GOLDEN: [(&str, [f64; 4]); 4] = [
    ("rest", [0.0, 0.0, 0.0, 0.0]),
    ("tilted", [0.3, 0.0, 0.1, 0.0]),
    ("right_edge", [2.3, 0.0, -0.15, 0.0]),
    ("left_edge", [-2.3, 0.0, 0.2, 0.0]),
];

/// Set `EFE_LAB_BLESS=1` to rewrite the stored frames after an intended
/// renderer change.
#[test]
fn golden_frames() {
    let bless = std::env::var_os("EFE_LAB_BLESS").is_some();
    for (name, [x, v, t, w]) in GOLDEN {
        let frame = render(&State4::new(x, v, t, w));
        let path = golden_dir().join(format!("{name}.ppm"));
        if bless {
            std::fs::create_dir_all(golden_dir()).unwrap();
            frame.write_ppm(std::fs::File::create(&path).unwrap()).unwrap();
        }
        let stored = Frame::read_ppm(&std::fs::read(&path).unwrap()).expect("valid PPM");
        assert!(stored == frame, "{name} differs from {}", path.display());
    }
}
