//! Squashed-Gaussian actor: `a = tanh(mean + exp(log_std) * noise)`.
//!
//! Densities are densities in action space, i.e. they include the
//! change-of-variables term `-sum log(1 - tanh(u)^2)`.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, Var};
use crate::error::{Error, Result};
use crate::nn::{mlp_forward, MlpParams, MlpVars};
use crate::tensor::Tensor;

pub const LOG_STD_MIN: f64 = -5.0;
pub const LOG_STD_MAX: f64 = 2.0;
/// Actions are kept within `±ACTION_LIMIT` before inverting the squash.
pub const ACTION_LIMIT: f64 = 1.0 - 1e-6;
/// Largest double below one; saturated samples are pulled back to it.
const BELOW_ONE: f64 = 1.0 - f64::EPSILON / 2.0;

const HALF_LN_2PI: f64 = 0.918_938_533_204_672_8;

/// Distribution parameters for a single state.
#[derive(Debug, Clone, PartialEq)]
pub struct GaussianTanhHead {
    pub mean: Vec<f64>,
    pub log_std: Vec<f64>,
}

impl GaussianTanhHead {
    /// Builds a head, clamping `log_std` into `[LOG_STD_MIN, LOG_STD_MAX]`.
    pub fn new(mean: Vec<f64>, log_std: Vec<f64>) -> Result<Self> {
        if mean.len() != log_std.len() {
            return Err(Error::Structural(format!(
                "mean has {} dims, log_std has {}",
                mean.len(),
                log_std.len()
            )));
        }
        let log_std = log_std
            .into_iter()
            .map(|v| v.clamp(LOG_STD_MIN, LOG_STD_MAX))
            .collect();
        Ok(Self { mean, log_std })
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    /// `tanh(mean)`, the squashed location.
    pub fn mode_action(&self) -> Vec<f64> {
        self.mean.iter().map(|&m| crate::autodiff::tanh(m)).collect()
    }
}

/// `log(1 - tanh(u)^2)` without cancellation for large `|u|`.
pub fn log_one_minus_tanh_sq(u: f64) -> f64 {
    2.0 * (std::f64::consts::LN_2 - u - crate::autodiff::softplus(-2.0 * u))
}

/// Reparameterised draw; returns the action and its exact log-density.
pub fn gaussian_tanh_sample(head: &GaussianTanhHead, noise: &[f64]) -> Result<(Vec<f64>, f64)> {
    if noise.len() != head.dim() {
        return Err(Error::Structural(format!(
            "noise has {} dims, head has {}",
            noise.len(),
            head.dim()
        )));
    }
    let mut action = Vec::with_capacity(noise.len());
    let mut log_prob = 0.0;
    for ((&m, &ls), &z) in head.mean.iter().zip(&head.log_std).zip(noise) {
        let u = m + ls.exp() * z;
        action.push(crate::autodiff::tanh(u).clamp(-BELOW_ONE, BELOW_ONE));
        log_prob += -0.5 * z * z - ls - HALF_LN_2PI - log_one_minus_tanh_sq(u);
    }
    Ok((action, log_prob))
}

/// Log-density of an arbitrary action; components are clamped to
/// `±ACTION_LIMIT` before `atanh`.
pub fn gaussian_tanh_log_prob(head: &GaussianTanhHead, action: &[f64]) -> f64 {
    debug_assert_eq!(action.len(), head.dim());
    head.mean
        .iter()
        .zip(&head.log_std)
        .zip(action)
        .map(|((&m, &ls), &a)| {
            let u = a.clamp(-ACTION_LIMIT, ACTION_LIMIT).atanh();
            let z = (u - m) / ls.exp();
            -0.5 * z * z - ls - HALF_LN_2PI - log_one_minus_tanh_sq(u)
        })
        .sum()
}

/// Actor network: state in, `[mean | raw log_std]` out.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PolicyParams {
    pub net: MlpParams,
    pub action_dim: usize,
}

/// Graph handles for a batch of actor outputs.
#[derive(Debug, Clone, Copy)]
pub struct ActorOutput {
    pub mean: Var,
    pub log_std: Var,
}

/// Graph handles for a batch of reparameterised samples.
#[derive(Debug, Clone, Copy)]
pub struct SampledActions {
    /// Pre-squash values `mean + std * noise`, `[batch, d]`.
    pub pre_tanh: Var,
    pub action: Var,
    /// `[batch, 1]`.
    pub log_prob: Var,
}

impl PolicyParams {
    pub fn init<R: Rng + ?Sized>(state_dim: usize, action_dim: usize, hidden: &[usize], rng: &mut R) -> Self {
        let mut sizes = vec![state_dim];
        sizes.extend_from_slice(hidden);
        sizes.push(2 * action_dim);
        Self {
            net: MlpParams::init(&sizes, rng),
            action_dim,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.net.validate()?;
        if self.net.output_size() != 2 * self.action_dim {
            return Err(Error::Structural(format!(
                "actor outputs {} values for action dim {}",
                self.net.output_size(),
                self.action_dim
            )));
        }
        Ok(())
    }

    pub fn state_dim(&self) -> usize {
        self.net.input_size()
    }

    /// Mean and clamped log-std for `states: [batch, state_dim]`.
    pub fn forward(&self, g: &mut Graph, vars: &MlpVars, states: Var) -> Result<ActorOutput> {
        let out = mlp_forward(g, vars, states)?;
        let d = self.action_dim;
        let mean = g.slice_cols(out, 0, d);
        let raw = g.slice_cols(out, d, 2 * d);
        let log_std = g.clamp(raw, LOG_STD_MIN, LOG_STD_MAX);
        Ok(ActorOutput { mean, log_std })
    }

    /// Per-state heads, computed without recording gradients.
    pub fn heads(&self, states: &Tensor) -> Result<Vec<GaussianTanhHead>> {
        let mut g = Graph::new();
        let vars = self.net.bind(&mut g, false);
        let x = g.constant(states);
        let out = self.forward(&mut g, &vars, x)?;
        let (mean, log_std) = (g.value(out.mean), g.value(out.log_std));
        Ok((0..mean.rows())
            .map(|r| GaussianTanhHead {
                mean: mean.row_slice(r).to_vec(),
                log_std: log_std.row_slice(r).to_vec(),
            })
            .collect())
    }

    pub fn head(&self, state: &[f64]) -> Result<GaussianTanhHead> {
        Ok(self.heads(&Tensor::row(state))?.remove(0))
    }
}

/// Differentiable reparameterised sampling with `noise: [batch, d]`.
pub fn sample_actions(g: &mut Graph, out: ActorOutput, noise: &Tensor) -> SampledActions {
    let z = g.constant(noise);
    let std = g.exp(out.log_std);
    let scaled = g.mul(std, z);
    let pre_tanh = g.add(out.mean, scaled);
    let action = g.tanh(pre_tanh);

    // -0.5 z^2 - log_std - 0.5 ln 2pi - log(1 - tanh(u)^2), summed per row
    let zz = g.square(z);
    let quad = g.scale(zz, -0.5);
    let gauss = g.sub(quad, out.log_std);
    let gauss = g.add_scalar(gauss, -HALF_LN_2PI);
    let corr = log_one_minus_tanh_sq_var(g, pre_tanh);
    let per_dim = g.sub(gauss, corr);
    let log_prob = g.sum_cols(per_dim);
    SampledActions {
        pre_tanh,
        action,
        log_prob,
    }
}

/// Log-density under a fixed head of the action `tanh(pre_tanh)`,
/// differentiable in `pre_tanh`. `mean` and `log_std` are `[batch, d]`.
pub fn log_prob_of_pre_tanh(g: &mut Graph, pre_tanh: Var, mean: &Tensor, log_std: &Tensor) -> Var {
    let m = g.constant(mean);
    let inv_std = Tensor::from_parts(
        log_std.shape().to_vec(),
        log_std.data().iter().map(|ls| (-ls).exp()).collect(),
    );
    let inv_std = g.constant_owned(inv_std);
    let ls = g.constant(log_std);
    let diff = g.sub(pre_tanh, m);
    let z = g.mul(diff, inv_std);
    let zz = g.square(z);
    let quad = g.scale(zz, -0.5);
    let gauss = g.sub(quad, ls);
    let gauss = g.add_scalar(gauss, -HALF_LN_2PI);
    let corr = log_one_minus_tanh_sq_var(g, pre_tanh);
    let per_dim = g.sub(gauss, corr);
    g.sum_cols(per_dim)
}

fn log_one_minus_tanh_sq_var(g: &mut Graph, u: Var) -> Var {
    // 2 * (ln 2 - u - softplus(-2u))
    let m2u = g.scale(u, -2.0);
    let sp = g.softplus(m2u);
    let s = g.add(u, sp);
    let neg = g.scale(s, -2.0);
    g.add_scalar(neg, 2.0 * std::f64::consts::LN_2)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn mode_of_standard_normal() {
        for d in 1..=3 {
            let h = GaussianTanhHead::new(vec![0.0; d], vec![0.0; d]).unwrap();
            let (a, lp) = gaussian_tanh_sample(&h, &vec![0.0; d]).unwrap();
            assert!(a.iter().all(|&v| v == 0.0));
            let expected = d as f64 * (-0.5 * (2.0 * std::f64::consts::PI).ln());
            assert!((lp - expected).abs() < 1e-15);
            assert!((gaussian_tanh_log_prob(&h, &a) - expected).abs() < 1e-15);
        }
    }

    #[test]
    fn saturated_sample() {
        let h = GaussianTanhHead::new(vec![10.0], vec![-5.0]).unwrap();
        let (a, lp) = gaussian_tanh_sample(&h, &[0.0]).unwrap();
        assert!((a[0] - (1.0 - 4.122e-9)).abs() < 1e-11);
        assert!(a[0] < 1.0);
        assert!(lp.is_finite());
    }

    #[test]
    fn log_std_is_clamped() {
        let h = GaussianTanhHead::new(vec![0.0, 0.0], vec![-9.0, 7.0]).unwrap();
        assert_eq!(h.log_std, vec![LOG_STD_MIN, LOG_STD_MAX]);
    }

    #[test]
    fn noise_dimension_is_checked() {
        let h = GaussianTanhHead::new(vec![0.0; 2], vec![0.0; 2]).unwrap();
        assert!(matches!(
            gaussian_tanh_sample(&h, &[0.0]),
            Err(Error::Structural(_))
        ));
    }

    #[test]
    fn stable_correction_matches_naive_form() {
        for &u in &[-3.0, -0.5, 0.0, 0.25, 2.0] {
            let naive = (1.0 - f64::tanh(u).powi(2)).ln();
            assert!((log_one_minus_tanh_sq(u) - naive).abs() < 1e-12);
        }
        assert!(log_one_minus_tanh_sq(400.0).is_finite());
    }

    #[test]
    fn graph_sampling_matches_scalar_sampling() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let actor = PolicyParams::init(2, 2, &[16, 16], &mut rng);
        let states = Tensor::matrix(3, 2, vec![0.1, 0.2, 0.5, 0.5, 0.9, 0.4]).unwrap();
        let noise = Tensor::matrix(3, 2, vec![0.3, -1.2, 0.0, 0.7, 2.1, -0.4]).unwrap();
        let heads = actor.heads(&states).unwrap();

        let mut g = Graph::new();
        let vars = actor.net.bind(&mut g, true);
        let x = g.constant(&states);
        let out = actor.forward(&mut g, &vars, x).unwrap();
        let s = sample_actions(&mut g, out, &noise);
        for (r, h) in heads.iter().enumerate() {
            let (a, lp) = gaussian_tanh_sample(h, noise.row_slice(r)).unwrap();
            assert_eq!(g.value(s.action).row_slice(r), a.as_slice());
            assert!((g.value(s.log_prob).at(r, 0) - lp).abs() < 1e-13);
        }
    }
}
