//! Training objectives: masked flow matching, negative preference, paired
//! preference, and the fixed-grid evaluations built on them.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::backbone::{
    flow_matching_loss_var, sample_timestep, velocity_target, Backbone, Conditioning,
    DiffusionState,
};
use crate::error::{Error, Result};
use crate::exec;
use crate::graph::{softplus, Graph, Var};
use crate::modal_features::ModalBundle;
use crate::nn::{Bound, ParamStore};
use crate::phda::PhdaConfig;
use crate::task_masking::{assemble_model_input, build_task_mask, TaskKind, TaskMask};
use crate::tensor::Tensor;

/// A latent clip with the conditions and mask it is scored under.
#[derive(Clone, Copy, Debug)]
pub struct Example<'a> {
    pub x0: &'a Tensor,
    pub bundle: &'a ModalBundle,
    pub mask: &'a TaskMask,
}

/// Loss value with one gradient tensor per parameter.
#[derive(Clone, Debug)]
pub struct LossGrad {
    pub loss: f64,
    pub grads: Vec<Tensor>,
}

/// Masked flow-matching loss of one example at `(tau, eps)`, on the graph.
/// With `full_region` every position is scored regardless of the mask.
#[allow(clippy::too_many_arguments)]
pub fn example_loss(
    g: &mut Graph,
    p: &Bound,
    model: &Backbone,
    ex: Example<'_>,
    eps: &Tensor,
    tau: f64,
    phda: &PhdaConfig,
    full_region: bool,
) -> Result<Var> {
    let st = DiffusionState::interpolate(ex.x0, eps, tau)?;
    let input = assemble_model_input(&st.x_t, ex.x0, ex.mask)?;
    let x = g.constant(input);
    let v = model.forward(
        g,
        p,
        x,
        Conditioning {
            bundle: ex.bundle,
            phda,
        },
        tau,
    )?;
    let target = velocity_target(ex.x0, eps)?;
    if full_region {
        let s = ex.x0.shape();
        let all = build_task_mask(TaskKind::T2V, (s[0], s[2], s[3]), None)?;
        flow_matching_loss_var(g, v, &target, &all)
    } else {
        flow_matching_loss_var(g, v, &target, ex.mask)
    }
}

/// Evaluates `f` on a graph with trainable parameters and differentiates.
pub fn loss_and_grad<F>(params: &ParamStore, f: F) -> Result<LossGrad>
where
    F: FnOnce(&mut Graph, &Bound) -> Result<Var>,
{
    let mut g = Graph::new();
    let p = params.bind(&mut g, true);
    let root = f(&mut g, &p)?;
    let loss = g.value(root).item();
    if !loss.is_finite() {
        return Err(Error::NonFinite(format!("loss {loss}")));
    }
    let mut grads = g.backward(root);
    Ok(LossGrad {
        loss,
        grads: p.vars().iter().map(|&v| grads.take(&g, v)).collect(),
    })
}

/// Ordered mean of per-example results.
pub fn average(items: Vec<LossGrad>) -> Result<LossGrad> {
    let n = items.len();
    let mut it = items.into_iter();
    let mut acc = it.next().ok_or_else(|| Error::invalid("empty batch"))?;
    for item in it {
        acc.loss += item.loss;
        for (a, b) in acc.grads.iter_mut().zip(&item.grads) {
            a.add_assign(b)?;
        }
    }
    let inv = 1.0 / n as f64;
    acc.loss *= inv;
    for a in &mut acc.grads {
        a.data_mut().iter_mut().for_each(|x| *x *= inv);
    }
    Ok(acc)
}

/// Per-example generator for one step: stream `index + 1` of `step_seed`.
pub fn example_rng(step_seed: u64, index: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(step_seed);
    rng.set_stream(index as u64 + 1);
    rng
}

pub fn standard_noise<R: Rng + ?Sized>(shape: &[usize], rng: &mut R) -> Tensor {
    Tensor::randn(shape, 1.0, rng)
}

/// `softplus(-d / lambda) = log(1 + exp(-d / lambda))`.
pub fn ndpo_loss_value(d: f64, lambda: f64) -> f64 {
    softplus(-d / lambda)
}

/// Probability proxy `exp(-d / lambda)` of a clip with discrepancy `d`.
pub fn probability_proxy(d: f64, lambda: f64) -> f64 {
    (-d / lambda).exp()
}

/// `d/dd softplus(-d / lambda) = -sigmoid(-d / lambda) / lambda`.
pub fn ndpo_loss_derivative(d: f64, lambda: f64) -> f64 {
    let z = -d / lambda;
    -(1.0 / (1.0 + (-z).exp())) / lambda
}

/// A generated clip tagged as exhibiting an issue.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NegativeSample {
    pub latent: Tensor,
    pub bundle: ModalBundle,
    pub mask: TaskMask,
    pub tag: String,
    /// The clean clip for the same conditions; only the paired baseline
    /// reads it.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub positive: Option<Tensor>,
}

impl NegativeSample {
    pub fn example(&self) -> Example<'_> {
        Example {
            x0: &self.latent,
            bundle: &self.bundle,
            mask: &self.mask,
        }
    }
}

fn check_lambda(lambda: f64) -> Result<()> {
    if lambda > 0.0 && lambda.is_finite() {
        Ok(())
    } else {
        Err(Error::invalid(format!(
            "temperature must be positive, got {lambda}"
        )))
    }
}

/// Mean of `softplus(-d_i / lambda)` with `d_i` the flow-matching
/// discrepancy of negative `i` at a random timestep and noise.
pub fn ndpo_loss(
    model: &Backbone,
    params: &ParamStore,
    negatives: &[NegativeSample],
    lambda: f64,
    phda: &PhdaConfig,
    step_seed: u64,
) -> Result<LossGrad> {
    check_lambda(lambda)?;
    if negatives.is_empty() {
        return Err(Error::invalid(
            "negative-preference loss over an empty batch",
        ));
    }
    let items = exec::try_map_range(negatives.len(), |i| {
        let mut rng = example_rng(step_seed, i);
        let tau = sample_timestep(&mut rng);
        let neg = &negatives[i];
        let eps = standard_noise(neg.latent.shape(), &mut rng);
        loss_and_grad(params, |g, p| {
            let d = example_loss(g, p, model, neg.example(), &eps, tau, phda, false)?;
            let z = g.scale(d, -1.0 / lambda);
            Ok(g.softplus(z))
        })
    })?;
    average(items)
}

/// Paired preference baseline: `-log sigmoid(-beta * ((d_w - d_w_ref) -
/// (d_l - d_l_ref)))` with the clean clip as winner and the negative as
/// loser, scored at a shared timestep and noise.
pub fn paired_dpo_loss(
    model: &Backbone,
    params: &ParamStore,
    reference: &ParamStore,
    negatives: &[NegativeSample],
    beta: f64,
    phda: &PhdaConfig,
    step_seed: u64,
) -> Result<LossGrad> {
    check_lambda(beta)?;
    if negatives.is_empty() {
        return Err(Error::invalid("paired preference loss over an empty batch"));
    }
    let items = exec::try_map_range(negatives.len(), |i| {
        let neg = &negatives[i];
        let pos = neg
            .positive
            .as_ref()
            .ok_or_else(|| Error::invalid("paired preference needs the positive clip"))?;
        let mut rng = example_rng(step_seed, i);
        let tau = sample_timestep(&mut rng);
        let eps = standard_noise(neg.latent.shape(), &mut rng);
        let win = Example {
            x0: pos,
            bundle: &neg.bundle,
            mask: &neg.mask,
        };
        let ref_d = |ex: Example<'_>| -> Result<f64> {
            crate::nn::eval_with(reference, |g, p| {
                example_loss(g, p, model, ex, &eps, tau, phda, false)
            })
            .map(|t| t.item())
        };
        let (dw_ref, dl_ref) = (ref_d(win)?, ref_d(neg.example())?);
        loss_and_grad(params, |g, p| {
            let dw = example_loss(g, p, model, win, &eps, tau, phda, false)?;
            let dl = example_loss(g, p, model, neg.example(), &eps, tau, phda, false)?;
            let diff = g.sub(dw, dl);
            let diff = g.add_scalar(diff, dl_ref - dw_ref);
            // -log sigmoid(-beta x) = softplus(beta x)
            let z = g.scale(diff, beta);
            Ok(g.softplus(z))
        })
    })?;
    average(items)
}

/// Fixed timesteps with fixed noise, for reproducible evaluation.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvalGrid {
    pub taus: Vec<f64>,
    pub seed: u64,
}

impl Default for EvalGrid {
    fn default() -> Self {
        EvalGrid {
            taus: vec![100.0, 300.0, 500.0, 700.0, 900.0],
            seed: 7,
        }
    }
}

impl EvalGrid {
    fn noise(&self, k: usize, shape: &[usize]) -> Tensor {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        rng.set_stream(k as u64);
        standard_noise(shape, &mut rng)
    }
}

/// Flow-matching discrepancy of one example averaged over the grid.
pub fn grid_discrepancy(
    model: &Backbone,
    params: &ParamStore,
    ex: Example<'_>,
    grid: &EvalGrid,
    phda: &PhdaConfig,
) -> Result<f64> {
    if grid.taus.is_empty() {
        return Err(Error::invalid("evaluation grid has no timesteps"));
    }
    let mut s = 0.0;
    for (k, &tau) in grid.taus.iter().enumerate() {
        let eps = grid.noise(k, ex.x0.shape());
        s += crate::nn::eval_with(params, |g, p| {
            example_loss(g, p, model, ex, &eps, tau, phda, false)
        })?
        .item();
    }
    Ok(s / grid.taus.len() as f64)
}

/// Mean grid discrepancy over `examples`, evaluated in parallel.
pub fn mean_flow_loss(
    model: &Backbone,
    params: &ParamStore,
    examples: &[Example<'_>],
    grid: &EvalGrid,
    phda: &PhdaConfig,
) -> Result<f64> {
    if examples.is_empty() {
        return Err(Error::invalid("no examples to evaluate"));
    }
    let d = exec::try_map_range(examples.len(), |i| {
        grid_discrepancy(model, params, examples[i], grid, phda)
    })?;
    Ok(d.iter().sum::<f64>() / d.len() as f64)
}

/// Mean probability proxy over a negative set.
pub fn mean_probability_proxy(
    model: &Backbone,
    params: &ParamStore,
    negatives: &[NegativeSample],
    grid: &EvalGrid,
    lambda: f64,
    phda: &PhdaConfig,
) -> Result<f64> {
    check_lambda(lambda)?;
    if negatives.is_empty() {
        return Err(Error::invalid("no negatives to evaluate"));
    }
    let d = exec::try_map_range(negatives.len(), |i| {
        grid_discrepancy(model, params, negatives[i].example(), grid, phda)
    })?;
    Ok(d.iter().map(|&d| probability_proxy(d, lambda)).sum::<f64>() / d.len() as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn ndpo_closed_forms() {
        assert!((ndpo_loss_value(0.0, 1.0) - std::f64::consts::LN_2).abs() < 1e-12);
        assert!(ndpo_loss_value(20.0, 1.0) < 3e-9);
        assert!(ndpo_loss_value(800.0, 1.0) >= 0.0);
        assert_eq!(probability_proxy(0.0, 0.3), 1.0);
    }

    #[test]
    fn derivative_matches_finite_difference() {
        for &(d, l) in &[(0.0, 1.0), (0.7, 1.0), (2.5, 0.1), (0.05, 0.5)] {
            let h = 1e-6;
            let fd = (ndpo_loss_value(d + h, l) - ndpo_loss_value(d - h, l)) / (2.0 * h);
            let a = ndpo_loss_derivative(d, l);
            assert!(
                (fd - a).abs() <= 1e-6 * a.abs().max(1e-3),
                "d={d} l={l}: {fd} vs {a}"
            );
        }
    }

    #[test]
    fn empty_and_bad_temperature() {
        assert!(check_lambda(0.0).is_err());
        assert!(check_lambda(-1.0).is_err());
        assert!(average(Vec::new()).is_err());
    }

    proptest! {
        #[test]
        fn ndpo_strictly_decreasing_and_bounded(d in 0.0f64..30.0, delta in 1e-3f64..5.0) {
            let a = ndpo_loss_value(d, 1.0);
            let b = ndpo_loss_value(d + delta, 1.0);
            prop_assert!(b < a);
            prop_assert!(a > 0.0 && a <= std::f64::consts::LN_2 + 1e-15);
        }
    }
}
