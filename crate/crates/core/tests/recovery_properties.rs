use novelty_sac::nn::Layer;
use novelty_sac::recovery::run_with_policies;
use novelty_sac::{
    run_with_random_recovery, Controller, Corridor, Env, EnvConfig, MlpParams, PolicyParams, ProjectedPolicy,
    RecoveryConfig, RecoveryTrace, Tensor,
};
use proptest::prelude::*;

/// `mean = w s + b` with a narrow constant spread.
fn linear(w: [[f64; 2]; 2], b: [f64; 2]) -> ProjectedPolicy {
    let weight = Tensor::new(vec![4, 2], vec![w[0][0], w[0][1], w[1][0], w[1][1], 0.0, 0.0, 0.0, 0.0]).unwrap();
    let bias = Tensor::new(vec![4], vec![b[0], b[1], -5.0, -5.0]).unwrap();
    ProjectedPolicy::unconstrained(PolicyParams {
        net: MlpParams::new(vec![Layer { weight, bias }]).unwrap(),
        action_dim: 2,
    })
}

fn to_goal() -> ProjectedPolicy {
    linear([[-20.0, 0.0], [0.0, -20.0]], [10.0, 18.5])
}

fn go_left() -> ProjectedPolicy {
    linear([[0.0; 2]; 2], [-5.0, 5.0])
}

fn go_right() -> ProjectedPolicy {
    linear([[0.0; 2]; 2], [5.0, 5.0])
}

fn blocked() -> Env {
    let mut env = Env::new(EnvConfig::default()).unwrap();
    env.set_blockade(Corridor::Middle, true);
    env
}

fn check_annotations(t: &RecoveryTrace) {
    let restores = t.steps.iter().filter(|s| s.controller == Controller::Backtrack).count();
    assert_eq!(t.steps.len(), 1 + t.env_steps() + restores);
    assert!(t.steps.windows(2).all(|p| p[0].round <= p[1].round));
    assert!(t.steps.iter().all(|s| s.round <= t.rounds));
}

#[test]
fn stuck_is_detected_soon_after_contact() {
    let env = blocked();
    let cfg = RecoveryConfig::default();
    for seed in 0..20 {
        let t = run_with_policies(&env, &[to_goal(), go_left()], &cfg, seed).unwrap();
        let contact = t
            .steps
            .windows(2)
            .position(|p| {
                let d = [p[1].position[0] - p[0].position[0], p[1].position[1] - p[0].position[1]];
                d[0].hypot(d[1]) < cfg.stuck_threshold
            })
            .expect("the blockade stops the optimal policy");
        let switch = t.steps.iter().position(|s| s.controller != Controller::Optimal).unwrap();
        // `contact` indexes the move into row `contact + 1`
        assert!(switch <= contact + 1 + cfg.stuck_window + 3, "seed {seed}: contact {contact}, switch {switch}");
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn runs_terminate_within_the_switch_bound(
        seed in 0u64..1000,
        k in 1usize..20,
        m in 0usize..40,
        rounds in 1usize..6,
        right_first in any::<bool>(),
    ) {
        let env = blocked();
        let cfg = RecoveryConfig { k, m, max_rounds: rounds, ..RecoveryConfig::default() };
        let lib = if right_first {
            vec![to_goal(), go_right(), go_left()]
        } else {
            vec![to_goal(), go_left(), go_right()]
        };
        for t in [
            run_with_policies(&env, &lib, &cfg, seed).unwrap(),
            run_with_random_recovery(&env, &lib[0], &cfg, seed).unwrap(),
        ] {
            check_annotations(&t);
            let first_stop = t.steps.iter().position(|s| s.controller != Controller::Optimal).unwrap_or(t.steps.len());
            let checkpoints = (first_stop - 1) / k + 1;
            // hand-overs to a contingency controller
            let switches = t.steps.windows(2)
                .filter(|p| p[0].controller != p[1].controller)
                .filter(|p| matches!(p[1].controller, Controller::Contingency(_) | Controller::Random))
                .count();
            prop_assert!(switches <= checkpoints * lib.len() * rounds, "{switches} switches");
            prop_assert!(t.rounds <= rounds);
            prop_assert!(t.env_steps() <= cfg.step_cap);
            let restores: Vec<f64> = t.steps.iter()
                .filter(|s| s.controller == Controller::Backtrack)
                .map(|s| s.position[1])
                .collect();
            prop_assert!(restores.iter().all(|y| y.is_finite()));
        }
    }
}
