use novelty_sac::adam::{adam_step, AdamConfig, AdamState};
use novelty_sac::sac::{actor_loss_graph, critic_loss, draw_noise, CriticPair, SacHyper};
use novelty_sac::{Graph, PolicyParams, Tensor};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Critic whose output layer is `0 * h + c`.
fn constant_critic(c: f64, rng: &mut ChaCha8Rng) -> CriticPair {
    let mut critics = CriticPair::init(&[8], true, rng);
    for net in [&mut critics.q1, &mut critics.q2, &mut critics.q1_target, &mut critics.q2_target] {
        let last = net.tensors_mut().count() - 2;
        for (i, t) in net.tensors_mut().enumerate() {
            if i == last {
                t.data_mut().iter_mut().for_each(|v| *v = 0.0);
            } else if i == last + 1 {
                t.data_mut().iter_mut().for_each(|v| *v = c);
            }
        }
    }
    critics
}

fn mean_log_std(actor: &PolicyParams, states: &Tensor) -> f64 {
    let heads = actor.heads(states).unwrap();
    heads.iter().flat_map(|h| h.log_std.iter()).sum::<f64>() / (2 * heads.len()) as f64
}

#[test]
fn entropy_only_objective_widens_the_policy() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mut actor = PolicyParams::init(2, 2, &[16], &mut rng);
    // start narrow: the squashed density is widest at a finite std, so a
    // policy already wider than that narrows under this objective
    let bias = actor.net.tensors_mut().last().unwrap();
    bias.data_mut()[2..].iter_mut().for_each(|v| *v = -1.5);
    let critics = constant_critic(0.0, &mut rng);
    let hyper = SacHyper {
        alpha: 1.0,
        ..SacHyper::default()
    };
    let states = Tensor::matrix(64, 2, (0..128).map(|_| rng.random()).collect()).unwrap();
    let before = mean_log_std(&actor, &states);
    let fixed = draw_noise(64, 2, &mut ChaCha8Rng::seed_from_u64(7));
    let mean_log_prob = |actor: &PolicyParams| {
        let mut g = Graph::new();
        let vars = actor.net.bind(&mut g, false);
        let out = actor_loss_graph(&mut g, actor, &vars, &critics, &states, &fixed, &hyper).unwrap();
        g.value(out.loss).item()
    };
    let lp_before = mean_log_prob(&actor);

    let mut opt = AdamState::new(actor.net.tensors());
    let cfg = AdamConfig::with_lr(1e-3);
    for _ in 0..100 {
        let noise = draw_noise(64, 2, &mut rng);
        let mut g = Graph::new();
        let vars = actor.net.bind(&mut g, true);
        let out = actor_loss_graph(&mut g, &actor, &vars, &critics, &states, &noise, &hyper).unwrap();
        // with a zero critic the loss is the mean log-density
        let lp = g.value(out.sampled.log_prob).data().iter().sum::<f64>() / 64.0;
        assert!((g.value(out.loss).item() - lp).abs() < 1e-12);
        let grads = g.backward(out.loss).unwrap();
        actor.net.store_grads(&vars, &grads).unwrap();
        let mut params: Vec<&mut Tensor> = actor.net.tensors_mut().collect();
        adam_step(&mut params, &mut opt, &cfg).unwrap();
    }
    let after = mean_log_std(&actor, &states);
    assert!(after > before + 0.05, "log_std {before} -> {after}");
    assert!(mean_log_prob(&actor) < lp_before);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn constant_critic_without_temperature_gives_no_actor_gradient(seed in any::<u64>(), c in -5.0f64..5.0) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let actor = PolicyParams::init(2, 2, &[8], &mut rng);
        let critics = constant_critic(c, &mut rng);
        let hyper = SacHyper { alpha: 0.0, ..SacHyper::default() };
        let states = Tensor::matrix(8, 2, (0..16).map(|_| rng.random()).collect()).unwrap();
        let noise = draw_noise(8, 2, &mut rng);
        let mut g = Graph::new();
        let vars = actor.net.bind(&mut g, true);
        let out = actor_loss_graph(&mut g, &actor, &vars, &critics, &states, &noise, &hyper).unwrap();
        let grads = g.backward(out.loss).unwrap();
        for v in vars.handles() {
            if let Some(d) = grads.get(v) {
                prop_assert!(d.iter().all(|&x| x == 0.0));
            }
        }
    }

    #[test]
    fn critic_loss_is_non_negative(seed in any::<u64>(), targets in prop::collection::vec(-50.0f64..50.0, 5)) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let critics = CriticPair::init(&[8], true, &mut rng);
        let items: Vec<_> = (0..5)
            .map(|_| novelty_sac::Transition {
                s: [rng.random(), rng.random()],
                a: [rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0)],
                r: 0.0,
                s_next: [0.0, 0.0],
                done: true,
            })
            .collect();
        let batch = novelty_sac::sac::Batch::from_transitions(&items);
        prop_assert!(critic_loss(&batch, &targets, &critics).unwrap() >= 0.0);
    }
}
