use std::hint::black_box;

use criterion::{criterion_group, criterion_main, BatchSize, Criterion};
use novelty_sac::novelty::{constrained_actor_loss_graph, rejection_sample, KlBranch, RejectionConfig};
use novelty_sac::sac::{actor_loss_graph, critic_td_target, draw_noise};
use novelty_sac::{Env, EnvConfig, Graph, SacHyper};
use novelty_sac_bench::{actor, batch, constraints, critics, rng};

fn env_step(c: &mut Criterion) {
    let mut env = Env::new(EnvConfig::default()).unwrap();
    env.reset(0);
    let mut r = rng(1);
    c.bench_function("env_step_random", |b| {
        b.iter(|| {
            let a = novelty_sac::sac::uniform_action(&mut r);
            let res = env.step(&a);
            if res.terminal {
                env.reset(0);
            }
            black_box(res.reward)
        })
    });
}

fn actor_update(c: &mut Criterion) {
    let (pi, q) = (actor(0), critics(1));
    let hyper = SacHyper::default();
    let b128 = batch(128, 2);
    let noise = draw_noise(128, 2, &mut rng(3));
    c.bench_function("actor_loss_forward_backward_b128", |b| {
        b.iter(|| {
            let mut g = Graph::new();
            let vars = pi.net.bind(&mut g, true);
            let out = actor_loss_graph(&mut g, &pi, &vars, &q, &b128.states, &noise, &hyper).unwrap();
            black_box(g.backward(out.loss).unwrap())
        })
    });
    c.bench_function("critic_td_target_b128", |b| {
        b.iter_batched(
            || rng(4),
            |mut r| black_box(critic_td_target(&b128, &pi, &q, &hyper, &mut r).unwrap()),
            BatchSize::SmallInput,
        )
    });

    let priors = constraints(2, 1e-2);
    c.bench_function("constrained_actor_loss_two_priors_b128", |b| {
        b.iter(|| {
            let mut g = Graph::new();
            let vars = pi.net.bind(&mut g, true);
            let states = &b128.states;
            let out = constrained_actor_loss_graph(&mut g, &pi, &vars, &q, &priors, states, &noise, &hyper, KlBranch::Repel)
                .unwrap();
            black_box(g.backward(out.loss).unwrap())
        })
    });
}

fn rejection(c: &mut Criterion) {
    let pi = actor(0);
    let cfg = RejectionConfig {
        max_attempts: 64,
        fallback: true,
    };
    for n in [1, 2] {
        let priors = constraints(n, 1e-1);
        let mut r = rng(5);
        c.bench_function(&format!("rejection_sample_{n}_priors"), |b| {
            b.iter(|| black_box(rejection_sample(&pi, &[0.5, 0.1], &priors, cfg, &mut r).unwrap()))
        });
    }
}

criterion_group!(benches, env_step, actor_update, rejection);
criterion_main!(benches);
