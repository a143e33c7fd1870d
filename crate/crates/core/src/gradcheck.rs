//! Central finite-difference checks of reverse-mode gradients on random
//! networks and losses.

use rand::Rng;
use rand_distr::StandardNormal;

use crate::autodiff::{Graph, Var};
use crate::error::Result;
use crate::nn::{mlp_forward, MlpParams, MlpVars};
use crate::policy::{sample_actions, ActorOutput};
use crate::tensor::Tensor;

/// Scalar objective built on top of the network output `y`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LossKind {
    /// `mean((y - t)^2)`
    Squared,
    /// `mean(tanh(y) * t) - mean(-y)^2 / 10`
    TanhProduct,
    /// `mean(softplus(y)) + mean(exp(0.3 y + 0.1))`
    SoftplusExp,
    /// `mean(min(y0, y1))` over two output columns.
    MinPair,
    /// `mean(sum_cols(tanh([y | x])^2))` plus a clamp term.
    ConcatSlice,
    /// Squashed-Gaussian log-density and action of a reparameterised sample.
    SquashedGaussian,
}

impl LossKind {
    pub const ALL: [LossKind; 6] = [
        LossKind::Squared,
        LossKind::TanhProduct,
        LossKind::SoftplusExp,
        LossKind::MinPair,
        LossKind::ConcatSlice,
        LossKind::SquashedGaussian,
    ];
}

#[derive(Debug, Clone)]
pub struct GradCase {
    pub net: MlpParams,
    pub input: Tensor,
    /// Target values or sampling noise, shaped like the relevant output.
    pub aux: Tensor,
    pub kind: LossKind,
}

fn normal_tensor<R: Rng + ?Sized>(rows: usize, cols: usize, rng: &mut R) -> Tensor {
    let data = (0..rows * cols).map(|_| rng.sample(StandardNormal)).collect();
    Tensor::matrix(rows, cols, data).expect("sized above")
}

impl GradCase {
    /// Random layer sizes, batch and loss.
    pub fn random<R: Rng + ?Sized>(rng: &mut R) -> Self {
        let kind = LossKind::ALL[rng.random_range(0..LossKind::ALL.len())];
        let action_dim = rng.random_range(1..=2);
        let out = match kind {
            LossKind::MinPair => 2,
            LossKind::SquashedGaussian => 2 * action_dim,
            _ => rng.random_range(1..=3),
        };
        let mut sizes = vec![rng.random_range(1..=4)];
        for _ in 0..rng.random_range(0..=2) {
            sizes.push(rng.random_range(1..=8));
        }
        sizes.push(out);
        let batch = rng.random_range(1..=5);
        let aux_cols = if kind == LossKind::SquashedGaussian { action_dim } else { out };
        Self {
            net: MlpParams::init(&sizes, rng),
            input: normal_tensor(batch, sizes[0], rng),
            aux: normal_tensor(batch, aux_cols, rng),
            kind,
        }
    }

    fn build(&self, g: &mut Graph, vars: &MlpVars) -> Result<Var> {
        let x = g.constant(&self.input);
        let y = mlp_forward(g, vars, x)?;
        let aux = g.constant(&self.aux);
        Ok(match self.kind {
            LossKind::Squared => {
                let d = g.sub(y, aux);
                let sq = g.square(d);
                g.mean(sq)
            }
            LossKind::TanhProduct => {
                let t = g.tanh(y);
                let p = g.mul(t, aux);
                let a = g.mean(p);
                let n = g.neg(y);
                let m = g.mean(n);
                let m2 = g.square(m);
                let b = g.scale(m2, 0.1);
                g.sub(a, b)
            }
            LossKind::SoftplusExp => {
                let sp = g.softplus(y);
                let a = g.mean(sp);
                let s = g.scale(y, 0.3);
                let s = g.add_scalar(s, 0.1);
                let e = g.exp(s);
                let b = g.mean(e);
                g.add(a, b)
            }
            LossKind::MinPair => {
                let y0 = g.slice_cols(y, 0, 1);
                let y1 = g.slice_cols(y, 1, 2);
                let m = g.min(y0, y1);
                g.mean(m)
            }
            LossKind::ConcatSlice => {
                let z = g.concat_cols(y, x);
                let t = g.tanh(z);
                let sq = g.square(t);
                let s = g.sum_cols(sq);
                let a = g.mean(s);
                let c = g.clamp(y, -50.0, 50.0);
                let b = g.mean(c);
                g.add(a, b)
            }
            LossKind::SquashedGaussian => {
                let d = self.aux.cols();
                let mean = g.slice_cols(y, 0, d);
                let raw = g.slice_cols(y, d, 2 * d);
                let log_std = g.clamp(raw, -20.0, 20.0);
                let s = sample_actions(g, ActorOutput { mean, log_std }, &self.aux);
                let lp = g.scale(s.log_prob, 0.2);
                let act = g.sum_cols(s.action);
                let per_row = g.sub(lp, act);
                g.mean(per_row)
            }
        })
    }

    pub fn value(&self, net: &MlpParams) -> Result<f64> {
        let mut g = Graph::new();
        let vars = net.bind(&mut g, false);
        let loss = self.build(&mut g, &vars)?;
        Ok(g.value(loss).item())
    }

    /// Reverse-mode gradient per parameter tensor.
    pub fn analytic(&self) -> Result<Vec<Vec<f64>>> {
        let mut g = Graph::new();
        let vars = self.net.bind(&mut g, true);
        let loss = self.build(&mut g, &vars)?;
        let grads = g.backward(loss)?;
        Ok(self
            .net
            .tensors()
            .zip(vars.handles())
            .map(|(t, v)| grads.get_or_zero(v, t.len()))
            .collect())
    }

    /// Largest `|analytic - numeric| / max(|analytic|, |numeric|, floor)`
    /// over every parameter, with step `h`.
    pub fn max_relative_error(&self, h: f64, floor: f64) -> Result<f64> {
        let analytic = self.analytic()?;
        let mut worst: f64 = 0.0;
        let mut net = self.net.clone();
        for (ti, grad) in analytic.iter().enumerate() {
            for (k, &a) in grad.iter().enumerate() {
                let orig = net.tensors().nth(ti).expect("same layout").data()[k];
                let set = |net: &mut MlpParams, v: f64| {
                    net.tensors_mut().nth(ti).expect("same layout").data_mut()[k] = v;
                };
                set(&mut net, orig + h);
                let up = self.value(&net)?;
                set(&mut net, orig - h);
                let down = self.value(&net)?;
                set(&mut net, orig);
                let numeric = (up - down) / (2.0 * h);
                let err = (a - numeric).abs() / a.abs().max(numeric.abs()).max(floor);
                worst = worst.max(err);
            }
        }
        Ok(worst)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn every_loss_kind_passes() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for kind in LossKind::ALL {
            let case = std::iter::repeat_with(|| GradCase::random(&mut rng))
                .find(|c| c.kind == kind)
                .unwrap();
            let err = case.max_relative_error(1e-5, 1e-8).unwrap();
            assert!(err < 1e-4, "{kind:?}: {err}");
        }
    }
}
