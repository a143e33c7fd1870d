use rand::Rng;
use rand_distr::StandardNormal;

use super::{Batch, CriticPair, SacHyper};
use crate::autodiff::{Graph, Var};
use crate::error::{Error, Result};
use crate::nn::{mlp_forward, MlpParams, MlpVars};
use crate::policy::{gaussian_tanh_sample, sample_actions, PolicyParams, SampledActions};
use crate::tensor::Tensor;

/// `[rows, dim]` standard-normal draws in row-major order.
pub fn draw_noise<R: Rng + ?Sized>(rows: usize, dim: usize, rng: &mut R) -> Tensor {
    let data = (0..rows * dim).map(|_| rng.sample(StandardNormal)).collect();
    Tensor::matrix(rows, dim, data).expect("noise shape")
}

/// One reparameterised action per row of `states`, with its log-density.
pub fn sample_next_actions<R: Rng + ?Sized>(
    actor: &PolicyParams,
    states: &Tensor,
    rng: &mut R,
) -> Result<(Tensor, Vec<f64>)> {
    let heads = actor.heads(states)?;
    let mut actions = Vec::with_capacity(heads.len() * actor.action_dim);
    let mut log_probs = Vec::with_capacity(heads.len());
    for h in &heads {
        let noise: Vec<f64> = (0..actor.action_dim).map(|_| rng.sample(StandardNormal)).collect();
        let (a, lp) = gaussian_tanh_sample(h, &noise)?;
        actions.extend(a);
        log_probs.push(lp);
    }
    Ok((Tensor::matrix(heads.len(), actor.action_dim, actions)?, log_probs))
}

/// `min(q1, q2)` (or `q1` alone) on `inputs: [batch, s|a]`.
pub fn min_q_graph(g: &mut Graph, q1: &MlpVars, q2: Option<&MlpVars>, inputs: Var) -> Result<Var> {
    let a = mlp_forward(g, q1, inputs)?;
    match q2 {
        Some(q2) => {
            let b = mlp_forward(g, q2, inputs)?;
            Ok(g.min(a, b))
        }
        None => Ok(a),
    }
}

fn target_min_q(critics: &CriticPair, states: &Tensor, actions: &Tensor) -> Result<Vec<f64>> {
    let mut g = Graph::new();
    let q1 = critics.q1_target.bind(&mut g, false);
    let q2 = critics.twin.then(|| critics.q2_target.bind(&mut g, false));
    let s = g.constant(states);
    let a = g.constant(actions);
    let sa = g.concat_cols(s, a);
    let q = min_q_graph(&mut g, &q1, q2.as_ref(), sa)?;
    Ok(g.value(q).data().to_vec())
}

/// Soft TD targets with a caller-supplied successor-action sampler.
///
/// Rows with `done` get `target = r` and their successor states are never
/// passed to any network. `next_actions` receives the successor states of
/// the remaining rows, in batch order, and returns one action and one
/// log-density per row.
pub fn bootstrap_targets(
    batch: &Batch,
    critics: &CriticPair,
    hyper: &SacHyper,
    next_actions: impl FnOnce(&Tensor) -> Result<(Tensor, Vec<f64>)>,
) -> Result<Vec<f64>> {
    if batch.is_empty() {
        return Err(Error::Structural("empty batch".into()));
    }
    let mut targets = batch.rewards.clone();
    let live: Vec<usize> = (0..batch.len()).filter(|&i| !batch.dones[i]).collect();
    if !live.is_empty() {
        let cols = batch.next_states.cols();
        let data = live
            .iter()
            .flat_map(|&i| batch.next_states.row_slice(i).iter().copied())
            .collect();
        let s_next = Tensor::matrix(live.len(), cols, data)?;
        let (a_next, log_probs) = next_actions(&s_next)?;
        let q = target_min_q(critics, &s_next, &a_next)?;
        let coef = hyper.entropy_coef();
        for (k, &row) in live.iter().enumerate() {
            targets[row] = batch.rewards[row] + hyper.gamma * (q[k] - coef * log_probs[k]);
        }
    }
    if let Some(row) = targets.iter().position(|t| !t.is_finite()) {
        return Err(Error::Numeric(format!("TD target of batch row {row}")));
    }
    Ok(targets)
}

/// `r + gamma * (1 - done) * (min Q_target(s', a') - alpha * log pi(a'|s'))`
/// with `a' ~ pi(.|s')`.
pub fn critic_td_target<R: Rng + ?Sized>(
    batch: &Batch,
    actor: &PolicyParams,
    critics: &CriticPair,
    hyper: &SacHyper,
    rng: &mut R,
) -> Result<Vec<f64>> {
    bootstrap_targets(batch, critics, hyper, |s| sample_next_actions(actor, s, rng))
}

/// Mean over the batch of `0.5 (q1 - y)^2 + 0.5 (q2 - y)^2`.
pub fn critic_loss_graph(
    g: &mut Graph,
    q1: &MlpVars,
    q2: Option<&MlpVars>,
    batch: &Batch,
    targets: &[f64],
) -> Result<Var> {
    if targets.len() != batch.len() {
        return Err(Error::Structural(format!(
            "{} targets for a batch of {}",
            targets.len(),
            batch.len()
        )));
    }
    let s = g.constant(&batch.states);
    let a = g.constant(&batch.actions);
    let sa = g.concat_cols(s, a);
    let y = g.constant_owned(Tensor::matrix(targets.len(), 1, targets.to_vec())?);
    let mut per_row = {
        let q = mlp_forward(g, q1, sa)?;
        let d = g.sub(q, y);
        let sq = g.square(d);
        g.scale(sq, 0.5)
    };
    if let Some(q2) = q2 {
        let q = mlp_forward(g, q2, sa)?;
        let d = g.sub(q, y);
        let sq = g.square(d);
        let half = g.scale(sq, 0.5);
        per_row = g.add(per_row, half);
    }
    Ok(g.mean(per_row))
}

pub fn critic_loss(batch: &Batch, targets: &[f64], critics: &CriticPair) -> Result<f64> {
    let mut g = Graph::new();
    let q1 = critics.q1.bind(&mut g, false);
    let q2 = critics.twin.then(|| critics.q2.bind(&mut g, false));
    let loss = critic_loss_graph(&mut g, &q1, q2.as_ref(), batch, targets)?;
    Ok(g.value(loss).item())
}

/// Handles produced by [`actor_loss_graph`].
#[derive(Debug, Clone, Copy)]
pub struct ActorLossGraph {
    pub loss: Var,
    /// Per-row `alpha * log pi(a|s) - min Q(s, a)`, `[batch, 1]`.
    pub sac_term: Var,
    pub sampled: SampledActions,
    pub min_q: Var,
}

/// Reparameterised actor objective `E[alpha log pi(a|s) - min Q(s, a)]`.
///
/// Critics are bound as constants, so only `actor_vars` receive gradients.
pub fn actor_loss_graph(
    g: &mut Graph,
    actor: &PolicyParams,
    actor_vars: &MlpVars,
    critics: &CriticPair,
    states: &Tensor,
    noise: &Tensor,
    hyper: &SacHyper,
) -> Result<ActorLossGraph> {
    let s = g.constant(states);
    let out = actor.forward(g, actor_vars, s)?;
    let sampled = sample_actions(g, out, noise);
    let q1 = critics.q1.bind(g, false);
    let q2 = critics.twin.then(|| critics.q2.bind(g, false));
    let sa = g.concat_cols(s, sampled.action);
    let min_q = min_q_graph(g, &q1, q2.as_ref(), sa)?;
    let weighted = g.scale(sampled.log_prob, hyper.entropy_coef());
    let sac_term = g.sub(weighted, min_q);
    let loss = g.mean(sac_term);
    Ok(ActorLossGraph {
        loss,
        sac_term,
        sampled,
        min_q,
    })
}

pub fn actor_loss<R: Rng + ?Sized>(
    batch: &Batch,
    actor: &PolicyParams,
    critics: &CriticPair,
    hyper: &SacHyper,
    rng: &mut R,
) -> Result<f64> {
    if batch.is_empty() {
        return Err(Error::Structural("empty batch".into()));
    }
    let noise = draw_noise(batch.len(), actor.action_dim, rng);
    let mut g = Graph::new();
    let vars = actor.net.bind(&mut g, false);
    let out = actor_loss_graph(&mut g, actor, &vars, critics, &batch.states, &noise, hyper)?;
    Ok(g.value(out.loss).item())
}

/// Polyak averaging `target <- (1 - tau) target + tau online`.
pub fn soft_update(critics: &mut CriticPair, tau: f64) {
    let CriticPair {
        q1,
        q2,
        q1_target,
        q2_target,
        ..
    } = critics;
    blend(q1_target, q1, tau);
    blend(q2_target, q2, tau);
}

fn blend(target: &mut MlpParams, online: &MlpParams, tau: f64) {
    target.blend_from(online, tau);
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::sac::Transition;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn setup(seed: u64) -> (PolicyParams, CriticPair, ChaCha8Rng) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let actor = PolicyParams::init(2, 2, &[8, 8], &mut rng);
        let critics = CriticPair::init(&[8, 8], true, &mut rng);
        (actor, critics, rng)
    }

    fn batch(rng: &mut ChaCha8Rng, n: usize, done: bool) -> Batch {
        let items: Vec<Transition> = (0..n)
            .map(|_| Transition {
                s: [rng.random(), rng.random()],
                a: [rng.random_range(-0.9..0.9), rng.random_range(-0.9..0.9)],
                r: rng.random_range(-1.0..1.0),
                s_next: [rng.random(), rng.random()],
                done,
            })
            .collect();
        Batch::from_transitions(&items)
    }

    #[test]
    fn terminal_rows_take_the_reward() {
        let (actor, critics, mut rng) = setup(1);
        let b = batch(&mut rng, 5, true);
        let y = critic_td_target(&b, &actor, &critics, &SacHyper::default(), &mut rng).unwrap();
        assert_eq!(y, b.rewards);
    }

    #[test]
    fn terminal_rows_never_touch_successor_states() {
        let (actor, critics, mut rng) = setup(2);
        let mut b = batch(&mut rng, 4, false);
        b.dones[1] = true;
        b.dones[3] = true;
        let poisoned = [f64::NAN, f64::INFINITY];
        for r in [1, 3] {
            let c = b.next_states.cols();
            b.next_states.data_mut()[r * c..r * c + 2].copy_from_slice(&poisoned);
        }
        let y = critic_td_target(&b, &actor, &critics, &SacHyper::default(), &mut rng).unwrap();
        assert_eq!(y[1], b.rewards[1]);
        assert_eq!(y[3], b.rewards[3]);
        assert!(y.iter().all(|v| v.is_finite()));
    }

    #[test]
    fn zero_discount_gives_reward() {
        let (actor, critics, mut rng) = setup(3);
        let b = batch(&mut rng, 6, false);
        let hyper = SacHyper {
            gamma: 0.0,
            ..SacHyper::default()
        };
        let y = critic_td_target(&b, &actor, &critics, &hyper, &mut rng).unwrap();
        for (t, r) in y.iter().zip(&b.rewards) {
            assert_eq!(t, r);
        }
    }

    #[test]
    fn single_row_target_matches_hand_arithmetic() {
        let (actor, critics, mut rng) = setup(4);
        let b = batch(&mut rng, 1, false);
        let hyper = SacHyper::default();
        let mut r1 = ChaCha8Rng::seed_from_u64(77);
        let y = critic_td_target(&b, &actor, &critics, &hyper, &mut r1).unwrap();

        // Recompute independently: head, noise, squash, density, two target
        // networks by straight-line arithmetic.
        let mut r2 = ChaCha8Rng::seed_from_u64(77);
        let s_next = b.next_states.row_slice(0).to_vec();
        let head = actor.head(&s_next).unwrap();
        let z: Vec<f64> = (0..2).map(|_| r2.sample(StandardNormal)).collect();
        let mut a = [0.0; 2];
        let mut lp = 0.0;
        for k in 0..2 {
            let std = head.log_std[k].exp();
            let u = head.mean[k] + std * z[k];
            a[k] = u.tanh();
            let gauss = -0.5 * z[k] * z[k] - head.log_std[k] - 0.5 * (2.0 * std::f64::consts::PI).ln();
            lp += gauss - (1.0 - a[k] * a[k]).ln();
        }
        let q = |net: &MlpParams| {
            let mut h = vec![s_next[0], s_next[1], a[0], a[1]];
            let n = net.layers().len();
            for (li, l) in net.layers().iter().enumerate() {
                h = (0..l.output_size())
                    .map(|o| {
                        let v = l.bias.data()[o]
                            + (0..l.input_size()).map(|i| l.weight.at(o, i) * h[i]).sum::<f64>();
                        if li + 1 < n { v.tanh() } else { v }
                    })
                    .collect();
            }
            h[0]
        };
        let qmin = q(&critics.q1_target).min(q(&critics.q2_target));
        let expected = b.rewards[0] + 0.99 * (qmin - 0.2 * lp);
        assert!((y[0] - expected).abs() < 1e-12, "{} vs {}", y[0], expected);
    }

    #[test]
    fn critic_loss_zero_and_offset() {
        let (_, critics, mut rng) = setup(5);
        let mut b = batch(&mut rng, 8, false);
        // equal twin critics make "q outputs equal targets" reachable
        let mut c = critics.clone();
        c.q2 = c.q1.clone();
        let q = c.q1.forward_values(&{
            let mut g = Graph::new();
            let s = g.constant(&b.states);
            let a = g.constant(&b.actions);
            let sa = g.concat_cols(s, a);
            g.value(sa).clone()
        })
        .unwrap();
        let exact: Vec<f64> = q.data().to_vec();
        assert_eq!(critic_loss(&b, &exact, &c).unwrap(), 0.0);
        let shifted: Vec<f64> = exact.iter().map(|v| v - 0.75).collect();
        let l = critic_loss(&b, &shifted, &c).unwrap();
        assert!((l - 0.5625).abs() < 1e-12);
        b.rewards.pop();
        assert!(critic_loss(&b, &exact, &c).is_err());
    }

    #[test]
    fn soft_update_rates() {
        let (_, critics, _) = setup(6);
        let mut c = critics.clone();
        c.q1.blend_from(&critics.q2, 0.5);
        let mut full = c.clone();
        soft_update(&mut full, 1.0);
        assert_eq!(full.q1_target, full.q1);
        assert_eq!(full.q2_target, full.q2);
        let mut none = c.clone();
        soft_update(&mut none, 0.0);
        assert_eq!(none.q1_target, c.q1_target);
    }

    #[test]
    fn soft_update_scalar_midpoint() {
        use crate::nn::Layer;
        let net = |v: f64| {
            MlpParams::new(vec![Layer {
                weight: Tensor::matrix(1, 4, vec![v; 4]).unwrap(),
                bias: Tensor::new(vec![1], vec![v]).unwrap(),
            }])
            .unwrap()
        };
        let mut c = CriticPair {
            q1: net(2.0),
            q2: net(2.0),
            q1_target: net(0.0),
            q2_target: net(0.0),
            twin: true,
        };
        soft_update(&mut c, 0.5);
        assert!(c.q1_target.tensors().all(|t| t.data().iter().all(|&v| v == 1.0)));
    }
}
