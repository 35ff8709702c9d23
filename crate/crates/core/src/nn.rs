//! Named parameter storage and the few layer shapes the backbone needs.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct ParamId(usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Ordered, named parameter tensors. Order is creation order and is part of
/// the checkpoint format.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ParamStore {
    names: Vec<String>,
    values: Vec<Tensor>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, value: Tensor) -> ParamId {
        let name = name.into();
        debug_assert!(!self.names.contains(&name), "duplicate parameter {name}");
        self.names.push(name);
        self.values.push(value);
        ParamId(self.values.len() - 1)
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.values[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.values[id.0]
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn values(&self) -> &[Tensor] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [Tensor] {
        &mut self.values
    }

    pub fn num_elements(&self) -> usize {
        self.values.iter().map(Tensor::len).sum()
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.names.iter().position(|n| n == name).map(ParamId)
    }

    /// Replaces every value, checking names and shapes agree.
    pub fn assign(&mut self, names: &[String], values: Vec<Tensor>) -> Result<()> {
        if names != self.names.as_slice() || values.len() != self.values.len() {
            return Err(Error::shape(
                "parameter set does not match the model layout",
            ));
        }
        for (dst, src) in self.values.iter().zip(&values) {
            dst.check_same_shape(src, "parameter")?;
        }
        self.values = values;
        Ok(())
    }

    /// Registers every parameter on `g`, as differentiable leaves when
    /// `trainable`, else as constants.
    pub fn bind(&self, g: &mut Graph, trainable: bool) -> Bound {
        Bound(
            self.values
                .iter()
                .map(|v| {
                    if trainable {
                        g.param(v.clone())
                    } else {
                        g.constant(v.clone())
                    }
                })
                .collect(),
        )
    }

    /// Flattened copy of all parameters, in order.
    pub fn flatten(&self) -> Vec<f64> {
        self.values
            .iter()
            .flat_map(|t| t.data().iter().copied())
            .collect()
    }
}

/// Graph handles for a bound [`ParamStore`].
#[derive(Clone, Debug)]
pub struct Bound(Vec<Var>);

impl Bound {
    #[inline]
    pub fn var(&self, id: ParamId) -> Var {
        self.0[id.0]
    }

    pub fn vars(&self) -> &[Var] {
        &self.0
    }
}

/// Seeded initializer.
pub struct Init {
    rng: ChaCha8Rng,
}

impl Init {
    pub fn new(seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(1);
        Init { rng }
    }

    /// Normal with standard deviation `1/sqrt(fan_in)`.
    pub fn fan_in(&mut self, rows: usize, cols: usize) -> Tensor {
        Tensor::randn(&[rows, cols], 1.0 / (rows as f64).sqrt(), &mut self.rng)
    }

    pub fn normal(&mut self, shape: &[usize], std: f64) -> Tensor {
        Tensor::randn(shape, std, &mut self.rng)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum LinearInit {
    FanIn,
    Zero,
}

/// `y = x W + b` with `W: (d_in, d_out)`.
#[derive(Clone, Copy, Debug)]
pub struct Linear {
    pub w: ParamId,
    pub b: Option<ParamId>,
    pub d_in: usize,
    pub d_out: usize,
}

impl Linear {
    pub fn new(
        store: &mut ParamStore,
        init: &mut Init,
        name: &str,
        d_in: usize,
        d_out: usize,
        bias: bool,
        how: LinearInit,
    ) -> Self {
        let w = match how {
            LinearInit::FanIn => init.fan_in(d_in, d_out),
            LinearInit::Zero => Tensor::zeros(&[d_in, d_out]),
        };
        let w = store.add(format!("{name}.weight"), w);
        let b = bias.then(|| store.add(format!("{name}.bias"), Tensor::zeros(&[d_out])));
        Linear { w, b, d_in, d_out }
    }

    pub fn forward(&self, g: &mut Graph, p: &Bound, x: Var) -> Var {
        let y = g.matmul(x, p.var(self.w));
        match self.b {
            Some(b) => g.add_row(y, p.var(b)),
            None => y,
        }
    }
}

/// Applies `f` to a throwaway graph with `store` bound as constants and
/// returns the value of the produced variable.
pub fn eval_with<F>(store: &ParamStore, f: F) -> Result<Tensor>
where
    F: FnOnce(&mut Graph, &Bound) -> Result<Var>,
{
    let mut g = Graph::new();
    let p = store.bind(&mut g, false);
    let out = f(&mut g, &p)?;
    Ok(g.value(out).clone())
}

/// Finite-difference check of `d loss / d params` at every parameter entry.
/// Returns the worst relative error.
#[cfg(test)]
pub(crate) fn gradient_check<F>(store: &ParamStore, f: F) -> f64
where
    F: Fn(&mut Graph, &Bound) -> Var,
{
    let mut g = Graph::new();
    let p = store.bind(&mut g, true);
    let loss = f(&mut g, &p);
    let grads = g.backward(loss);
    let analytic: Vec<Tensor> = p.vars().iter().map(|&v| grads.get(&g, v)).collect();
    let eval = |s: &ParamStore| eval_with(s, |g, p| Ok(f(g, p))).unwrap().item();
    let mut work = store.clone();
    let h = 1e-5;
    let mut worst: f64 = 0.0;
    for (pi, grad) in analytic.iter().enumerate() {
        for i in 0..grad.len() {
            let orig = work.values[pi].data()[i];
            work.values[pi].data_mut()[i] = orig + h;
            let up = eval(&work);
            work.values[pi].data_mut()[i] = orig - h;
            let down = eval(&work);
            work.values[pi].data_mut()[i] = orig;
            let fd = (up - down) / (2.0 * h);
            let a = grad.data()[i];
            let rel = (fd - a).abs() / (1e-6 + fd.abs().max(a.abs()));
            worst = worst.max(rel);
        }
    }
    worst
}
