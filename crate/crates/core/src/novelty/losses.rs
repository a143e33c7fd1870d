use rand::Rng;

use super::{rejection_sample_head, KlBranch, NoveltyConstraint, PriorTable, RejectionConfig};
use crate::autodiff::{Graph, Var};
use crate::error::{Error, Result};
use crate::nn::MlpVars;
use crate::policy::{gaussian_tanh_log_prob, log_prob_of_pre_tanh, PolicyParams, SampledActions};
use crate::sac::{actor_loss_graph, bootstrap_targets, draw_noise, Batch, CriticPair, SacHyper};
use crate::tensor::Tensor;

/// Soft TD targets with the successor action drawn from the projected
/// policy. The entropy term uses the unprojected density of that action.
pub fn constrained_critic_target<R: Rng + ?Sized>(
    batch: &Batch,
    actor: &PolicyParams,
    critics: &CriticPair,
    constraints: &[NoveltyConstraint],
    hyper: &SacHyper,
    cfg: RejectionConfig,
    rng: &mut R,
) -> Result<Vec<f64>> {
    bootstrap_targets(batch, critics, hyper, |s_next| {
        let heads = actor.heads(s_next)?;
        let table = PriorTable::new(constraints, s_next)?;
        let mut actions = Vec::with_capacity(heads.len() * actor.action_dim);
        let mut log_probs = Vec::with_capacity(heads.len());
        for (r, head) in heads.iter().enumerate() {
            let report = rejection_sample_head(head, &table.row(r), cfg, rng)?;
            actions.extend(report.action);
            log_probs.push(report.log_prob);
        }
        Ok((Tensor::matrix(heads.len(), actor.action_dim, actions)?, log_probs))
    })
}

/// Handles produced by [`constrained_actor_loss_graph`].
#[derive(Debug, Clone)]
pub struct ConstrainedActorGraph {
    pub loss: Var,
    /// Batch mean of the SAC term over admissible rows (zero elsewhere).
    pub sac_branch: Var,
    /// Batch mean of the violation term (see [`KlBranch`]) over violating rows.
    pub kl_branch: Var,
    /// Per row: the sampled action satisfied every constraint.
    pub gate: Vec<bool>,
    pub sampled: SampledActions,
}

/// Two-branch actor objective.
///
/// Each row samples `a ~ pi_i(s)`. Admissible rows contribute the SAC term;
/// rows violating one or more priors contribute a signed sum of
/// `log pi_i(a|s)` and the mean of `log pi_j(a|s)` over the violated `j`,
/// with signs set by `branch`. The gate is a constant.
#[allow(clippy::too_many_arguments)]
pub fn constrained_actor_loss_graph(
    g: &mut Graph,
    actor: &PolicyParams,
    actor_vars: &MlpVars,
    critics: &CriticPair,
    constraints: &[NoveltyConstraint],
    states: &Tensor,
    noise: &Tensor,
    hyper: &SacHyper,
    branch: KlBranch,
) -> Result<ConstrainedActorGraph> {
    let base = actor_loss_graph(g, actor, actor_vars, critics, states, noise, hyper)?;
    let rows = states.rows();
    let table = PriorTable::new(constraints, states)?;
    let actions = g.value(base.sampled.action).clone();

    let mut gate = vec![true; rows];
    let mut weights = vec![vec![0.0; rows]; constraints.len()];
    for (r, open) in gate.iter_mut().enumerate() {
        let a = actions.row_slice(r);
        let violated: Vec<usize> = table
            .row(r)
            .iter()
            .enumerate()
            .filter(|(_, (h, le))| gaussian_tanh_log_prob(h, a) > *le)
            .map(|(j, _)| j)
            .collect();
        *open = violated.is_empty();
        for &j in &violated {
            weights[j][r] = 1.0 / violated.len() as f64;
        }
    }

    if gate.iter().all(|&o| o) {
        let zero = g.constant_owned(Tensor::scalar(0.0));
        return Ok(ConstrainedActorGraph {
            loss: base.loss,
            sac_branch: base.loss,
            kl_branch: zero,
            gate,
            sampled: base.sampled,
        });
    }

    let column = |v: Vec<f64>| Tensor::matrix(rows, 1, v);
    let mask = g.constant_owned(column(gate.iter().map(|&o| f64::from(u8::from(o))).collect())?);
    let inv_mask = g.constant_owned(column(gate.iter().map(|&o| f64::from(u8::from(!o))).collect())?);

    let mut prior_mean: Option<Var> = None;
    for (j, w) in weights.into_iter().enumerate() {
        if w.iter().all(|&x| x == 0.0) {
            continue;
        }
        let (mean, log_std) = table.tensors(j)?;
        let lp = log_prob_of_pre_tanh(g, base.sampled.pre_tanh, &mean, &log_std);
        let w = g.constant_owned(column(w)?);
        let term = g.mul(lp, w);
        prior_mean = Some(match prior_mean {
            Some(acc) => g.add(acc, term),
            None => term,
        });
    }
    let prior_mean = prior_mean.ok_or_else(|| Error::Structural("violation without a prior".into()))?;
    let kl = match branch {
        KlBranch::Repel => g.add(base.sampled.log_prob, prior_mean),
        KlBranch::Printed => g.sub(base.sampled.log_prob, prior_mean),
    };

    let sac_rows = g.mul(base.sac_term, mask);
    let kl_rows = g.mul(kl, inv_mask);
    let sac_branch = g.mean(sac_rows);
    let kl_branch = g.mean(kl_rows);
    let loss = g.add(sac_branch, kl_branch);
    Ok(ConstrainedActorGraph {
        loss,
        sac_branch,
        kl_branch,
        gate,
        sampled: base.sampled,
    })
}

pub fn constrained_actor_loss<R: Rng + ?Sized>(
    batch: &Batch,
    actor: &PolicyParams,
    critics: &CriticPair,
    constraints: &[NoveltyConstraint],
    hyper: &SacHyper,
    branch: KlBranch,
    rng: &mut R,
) -> Result<f64> {
    if batch.is_empty() {
        return Err(Error::Structural("empty batch".into()));
    }
    let noise = draw_noise(batch.len(), actor.action_dim, rng);
    let mut g = Graph::new();
    let vars = actor.net.bind(&mut g, false);
    let out = constrained_actor_loss_graph(&mut g, actor, &vars, critics, constraints, &batch.states, &noise, hyper, branch)?;
    Ok(g.value(out.loss).item())
}
