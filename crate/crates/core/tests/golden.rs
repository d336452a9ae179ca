//! Fixed-seed actor and critic outputs recorded in `fixtures/golden_nn.json`.
//!
//! Regenerate with `cargo test -p sociallight --test golden -- --ignored`.

use std::path::PathBuf;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use sociallight::mdp::encode_neighbor_actions;
use sociallight::nn::{actor_forward, actor_spec, critic_forward, critic_spec, Activation, Mlp};

const SEED: u64 = 20240611;
const AUG: usize = 10;
const ACTIONS: usize = 4;

#[derive(Serialize, Deserialize)]
struct Case {
    z_aug: Vec<f64>,
    neighbor_actions: [Option<usize>; 4],
    policy: Vec<f64>,
    q: Vec<f64>,
}

#[derive(Serialize, Deserialize)]
struct Golden {
    seed: u64,
    actor: Mlp,
    critic: Mlp,
    cases: Vec<Case>,
}

fn fixture_path() -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("tests/fixtures/golden_nn.json")
}

fn networks() -> (Mlp, Mlp) {
    let mut rng = ChaCha8Rng::seed_from_u64(SEED);
    let actor = Mlp::init(actor_spec(AUG, &[6, 5], Activation::Tanh, ACTIONS), &mut rng).unwrap();
    let mut critic = Mlp::init(critic_spec(AUG, &[7], Activation::Relu, ACTIONS), &mut rng).unwrap();
    // non-zero biases so the fixture exercises them
    for k in 0..2 {
        for (j, b) in critic.bias_mut(k).data.iter_mut().enumerate() {
            *b = 0.05 * (j as f64 - 2.0);
        }
    }
    (actor, critic)
}

fn inputs() -> Vec<(Vec<f64>, [Option<usize>; 4])> {
    vec![
        (vec![0.0; AUG], [None; 4]),
        ((0..AUG).map(|k| k as f64 * 0.5).collect(), [Some(0), None, Some(3), Some(1)]),
        ((0..AUG).map(|k| ((k * 7) % 5) as f64 - 2.0).collect(), [Some(2), Some(2), None, None]),
    ]
}

fn load() -> Golden {
    let text = std::fs::read_to_string(fixture_path()).expect("fixture present");
    serde_json::from_str(&text).unwrap()
}

#[test]
#[ignore]
fn regenerate_fixture() {
    let (actor, critic) = networks();
    let cases = inputs()
        .into_iter()
        .map(|(z, nb)| Case {
            policy: actor_forward(&actor, &z).unwrap(),
            q: critic_forward(&critic, &z, &encode_neighbor_actions(&nb, ACTIONS)).unwrap(),
            z_aug: z,
            neighbor_actions: nb,
        })
        .collect();
    let g = Golden {
        seed: SEED,
        actor,
        critic,
        cases,
    };
    std::fs::create_dir_all(fixture_path().parent().unwrap()).unwrap();
    std::fs::write(fixture_path(), serde_json::to_string_pretty(&g).unwrap() + "\n").unwrap();
}

#[test]
fn initialization_matches_fixture() {
    let g = load();
    let (actor, critic) = networks();
    assert_eq!(g.seed, SEED);
    assert_eq!(actor, g.actor);
    assert_eq!(critic, g.critic);
}

#[test]
fn actor_outputs_match_fixture() {
    let g = load();
    for c in &g.cases {
        let p = actor_forward(&g.actor, &c.z_aug).unwrap();
        assert_eq!(p.len(), ACTIONS);
        assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-9);
        for (a, b) in p.iter().zip(&c.policy) {
            assert!((a - b).abs() < 1e-12, "{p:?} vs {:?}", c.policy);
        }
    }
}

#[test]
fn critic_outputs_match_fixture() {
    let g = load();
    for c in &g.cases {
        let q = critic_forward(&g.critic, &c.z_aug, &encode_neighbor_actions(&c.neighbor_actions, ACTIONS)).unwrap();
        assert_eq!(q.len(), ACTIONS);
        for (a, b) in q.iter().zip(&c.q) {
            assert!((a - b).abs() < 1e-12, "{q:?} vs {:?}", c.q);
        }
    }
}

#[test]
fn padded_slots_encode_as_zero_rows() {
    let g = load();
    let c = &g.cases[2];
    let enc = encode_neighbor_actions(&c.neighbor_actions, ACTIONS);
    assert!(enc[2 * ACTIONS..].iter().all(|&x| x == 0.0));
    // a padded slot contributes nothing, so two distinct pads agree
    let q = critic_forward(&g.critic, &c.z_aug, &enc).unwrap();
    let mut manual = enc.clone();
    manual[3 * ACTIONS..].fill(0.0);
    assert_eq!(q, critic_forward(&g.critic, &c.z_aug, &manual).unwrap());
}
