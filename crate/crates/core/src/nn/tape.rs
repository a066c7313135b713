//! A small reverse-mode tape over dense `f64` vectors.
//!
//! Every node is a vector. Matrices only ever appear as parameters, so the
//! op set is exactly what the recurrent captioning networks need: affine
//! maps, embedding lookups, elementwise gates, normalization and the three
//! scalar losses (negative log-likelihood, Huber, MSE).

use crate::error::{AdcError, Result};
use crate::nn::ops::{self, LAYER_NORM_EPS};
use crate::nn::params::{ParamId, ParamStore};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

#[derive(Debug)]
enum Op {
    Leaf,
    Param(ParamId),
    Linear { w: ParamId, b: Option<ParamId>, x: Var },
    Row { table: ParamId, row: usize },
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Sigmoid(Var),
    Tanh(Var),
    Relu(Var),
    Normalize { x: Var, inv_std: f64 },
    Slice { x: Var, start: usize },
    Mask { x: Var, mask: Vec<f64> },
    Mean(Vec<Var>),
    Nll { logits: Var, target: usize, probs: Vec<f64> },
    Huber { v: Var, target: f64 },
    Mse { x: Var, target: Vec<f64> },
    WeightedSum(Vec<(Var, f64)>),
}

#[derive(Debug)]
struct Node {
    value: Vec<f64>,
    op: Op,
}

/// Knee of the Huber regression loss.
pub const HUBER_DELTA: f64 = 0.5;

/// Huber loss with the quadratic branch `d^2` (no 1/2 factor) and the
/// linear branch `delta*d - delta^2/2`. The two branches do not meet at the
/// knee: 0.25 vs 0.125 at d = 0.5.
pub fn huber(v: f64, target: f64) -> f64 {
    let d = (v - target).abs();
    if d <= HUBER_DELTA {
        d * d
    } else {
        HUBER_DELTA * d - 0.5 * HUBER_DELTA * HUBER_DELTA
    }
}

fn huber_grad(v: f64, target: f64) -> f64 {
    let d = v - target;
    if d.abs() <= HUBER_DELTA {
        2.0 * d
    } else {
        HUBER_DELTA * d.signum()
    }
}

#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Vec<f64>, op: Op) -> Var {
        self.nodes.push(Node { value, op });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &[f64] {
        &self.nodes[v.0].value
    }

    pub fn scalar(&self, v: Var) -> f64 {
        self.nodes[v.0].value[0]
    }

    pub fn constant(&mut self, value: Vec<f64>) -> Var {
        self.push(value, Op::Leaf)
    }

    pub fn zeros(&mut self, n: usize) -> Var {
        self.constant(vec![0.0; n])
    }

    /// A vector parameter (bias, gain) as a node.
    pub fn param(&mut self, store: &ParamStore, id: ParamId) -> Var {
        self.push(store.get(id).values.clone(), Op::Param(id))
    }

    /// `W x`, or `W x + b` when a bias is given.
    pub fn linear(
        &mut self,
        store: &ParamStore,
        w: ParamId,
        b: Option<ParamId>,
        x: Var,
    ) -> Result<Var> {
        let wm = store.get(w);
        let xv = self.value(x);
        let y = match b {
            Some(b) => ops::linear_forward(wm, &store.get(b).values, xv)?,
            None => {
                if xv.len() != wm.cols {
                    return Err(AdcError::shape(
                        format!("linear '{}' input", wm.name),
                        format!("W {} needs x of length {}", wm.shape_str(), wm.cols),
                        format!("x of length {}", xv.len()),
                    ));
                }
                ops::matvec(wm, xv)
            }
        };
        Ok(self.push(y, Op::Linear { w, b, x }))
    }

    /// Row `row` of an embedding table.
    pub fn row(&mut self, store: &ParamStore, table: ParamId, row: usize) -> Result<Var> {
        let t = store.get(table);
        if row >= t.rows {
            return Err(AdcError::Validation(format!(
                "token id {row} out of range for embedding '{}' with {} rows",
                t.name, t.rows
            )));
        }
        let value = t.row(row).to_vec();
        Ok(self.push(value, Op::Row { table, row }))
    }

    fn check_same(&self, context: &str, a: Var, b: Var) -> Result<()> {
        let (la, lb) = (self.value(a).len(), self.value(b).len());
        if la != lb {
            return Err(AdcError::shape(context, format!("length {la}"), format!("length {lb}")));
        }
        Ok(())
    }

    fn zip_with(&self, a: Var, b: Var, f: impl Fn(f64, f64) -> f64) -> Vec<f64> {
        self.value(a)
            .iter()
            .zip(self.value(b))
            .map(|(x, y)| f(*x, *y))
            .collect()
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.check_same("add", a, b)?;
        let v = self.zip_with(a, b, |x, y| x + y);
        Ok(self.push(v, Op::Add(a, b)))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.check_same("sub", a, b)?;
        let v = self.zip_with(a, b, |x, y| x - y);
        Ok(self.push(v, Op::Sub(a, b)))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.check_same("mul", a, b)?;
        let v = self.zip_with(a, b, |x, y| x * y);
        Ok(self.push(v, Op::Mul(a, b)))
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        let v = self.value(x).iter().map(|z| ops::sigmoid(*z)).collect();
        self.push(v, Op::Sigmoid(x))
    }

    pub fn tanh(&mut self, x: Var) -> Var {
        let v = self.value(x).iter().map(|z| z.tanh()).collect();
        self.push(v, Op::Tanh(x))
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let v = self.value(x).iter().map(|z| z.max(0.0)).collect();
        self.push(v, Op::Relu(x))
    }

    /// `(x - mean) / sqrt(var + eps)` without gain or bias.
    pub fn normalize(&mut self, x: Var) -> Var {
        let (v, inv_std) = ops::normalize(self.value(x), LAYER_NORM_EPS);
        self.push(v, Op::Normalize { x, inv_std })
    }

    pub fn layer_norm(
        &mut self,
        store: &ParamStore,
        x: Var,
        gain: ParamId,
        bias: ParamId,
    ) -> Result<Var> {
        let n = self.normalize(x);
        let g = self.param(store, gain);
        let b = self.param(store, bias);
        let scaled = self.mul(n, g)?;
        self.add(scaled, b)
    }

    pub fn slice(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let n = self.value(x).len();
        if start + len > n {
            return Err(AdcError::shape(
                "slice",
                format!("at least {} elements", start + len),
                format!("{n}"),
            ));
        }
        let v = self.value(x)[start..start + len].to_vec();
        Ok(self.push(v, Op::Slice { x, start }))
    }

    /// Elementwise product with a constant (dropout masks).
    pub fn mask(&mut self, x: Var, mask: &[f64]) -> Result<Var> {
        if mask.len() != self.value(x).len() {
            return Err(AdcError::shape(
                "mask",
                format!("length {}", self.value(x).len()),
                format!("length {}", mask.len()),
            ));
        }
        let v = self.value(x).iter().zip(mask).map(|(a, m)| a * m).collect();
        Ok(self.push(v, Op::Mask { x, mask: mask.to_vec() }))
    }

    /// Elementwise mean of equal-length vectors.
    pub fn mean(&mut self, xs: &[Var]) -> Result<Var> {
        let first = *xs
            .first()
            .ok_or_else(|| AdcError::shape("mean", "at least one input", "none"))?;
        let n = self.value(first).len();
        let mut acc = vec![0.0; n];
        for &x in xs {
            self.check_same("mean", first, x)?;
            acc.iter_mut().zip(self.value(x)).for_each(|(a, v)| *a += v);
        }
        let k = xs.len() as f64;
        acc.iter_mut().for_each(|a| *a /= k);
        Ok(self.push(acc, Op::Mean(xs.to_vec())))
    }

    /// `-log softmax(logits)[target]` as a scalar node.
    pub fn nll(&mut self, logits: Var, target: usize) -> Result<Var> {
        let z = self.value(logits);
        if target >= z.len() {
            return Err(AdcError::Validation(format!(
                "target {target} out of range for {} logits",
                z.len()
            )));
        }
        let loss = ops::log_sum_exp(z) - z[target];
        let probs = ops::softmax(z)?;
        Ok(self.push(vec![loss], Op::Nll { logits, target, probs }))
    }

    pub fn huber(&mut self, v: Var, target: f64) -> Result<Var> {
        if self.value(v).len() != 1 {
            return Err(AdcError::shape("huber", "scalar", format!("length {}", self.value(v).len())));
        }
        let loss = huber(self.scalar(v), target);
        Ok(self.push(vec![loss], Op::Huber { v, target }))
    }

    /// Mean squared difference against a constant target.
    pub fn mse(&mut self, x: Var, target: &[f64]) -> Result<Var> {
        let xv = self.value(x);
        if xv.len() != target.len() || xv.is_empty() {
            return Err(AdcError::shape(
                "mse",
                format!("target of length {}", xv.len()),
                format!("length {}", target.len()),
            ));
        }
        let loss = xv.iter().zip(target).map(|(a, b)| (a - b) * (a - b)).sum::<f64>()
            / xv.len() as f64;
        Ok(self.push(vec![loss], Op::Mse { x, target: target.to_vec() }))
    }

    /// `sum_i w_i * s_i` over scalar nodes.
    pub fn weighted_sum(&mut self, terms: &[(Var, f64)]) -> Result<Var> {
        let mut total = 0.0;
        for &(v, w) in terms {
            if self.value(v).len() != 1 {
                return Err(AdcError::shape("weighted_sum", "scalar terms", format!("length {}", self.value(v).len())));
            }
            total += w * self.scalar(v);
        }
        Ok(self.push(vec![total], Op::WeightedSum(terms.to_vec())))
    }

    /// Accumulates `d loss / d param` into the store's gradient buffers.
    pub fn backward(&self, loss: Var, store: &mut ParamStore) -> Result<()> {
        if self.value(loss).len() != 1 {
            return Err(AdcError::shape("backward", "scalar loss", format!("length {}", self.value(loss).len())));
        }
        if !self.scalar(loss).is_finite() {
            return Err(AdcError::Numerics("loss".into()));
        }
        let mut grads: Vec<Option<Vec<f64>>> = Vec::with_capacity(loss.0 + 1);
        grads.resize_with(loss.0 + 1, || None);
        grads[loss.0] = Some(vec![1.0]);

        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            match &node.op {
                Op::Leaf => {}
                Op::Param(id) => {
                    let p = store.get_mut(*id);
                    p.grad.iter_mut().zip(&g).for_each(|(a, b)| *a += b);
                }
                Op::Linear { w, b, x } => {
                    let xv = self.value(*x);
                    let wm = store.get(*w);
                    let cols = wm.cols;
                    let mut dx = vec![0.0; cols];
                    for (r, gr) in g.iter().enumerate() {
                        if *gr == 0.0 {
                            continue;
                        }
                        let row = &wm.values[r * cols..(r + 1) * cols];
                        dx.iter_mut().zip(row).for_each(|(d, w)| *d += w * gr);
                    }
                    let wg = &mut store.get_mut(*w).grad;
                    for (r, gr) in g.iter().enumerate() {
                        if *gr == 0.0 {
                            continue;
                        }
                        wg[r * cols..(r + 1) * cols]
                            .iter_mut()
                            .zip(xv)
                            .for_each(|(d, x)| *d += gr * x);
                    }
                    if let Some(b) = b {
                        let bg = &mut store.get_mut(*b).grad;
                        bg.iter_mut().zip(&g).for_each(|(a, b)| *a += b);
                    }
                    accumulate(&mut grads, *x, dx);
                }
                Op::Row { table, row } => {
                    let t = store.get_mut(*table);
                    let cols = t.cols;
                    t.grad[row * cols..(row + 1) * cols]
                        .iter_mut()
                        .zip(&g)
                        .for_each(|(a, b)| *a += b);
                }
                Op::Add(a, b) => {
                    accumulate(&mut grads, *a, g.clone());
                    accumulate(&mut grads, *b, g);
                }
                Op::Sub(a, b) => {
                    accumulate(&mut grads, *b, g.iter().map(|v| -v).collect());
                    accumulate(&mut grads, *a, g);
                }
                Op::Mul(a, b) => {
                    let da = g.iter().zip(self.value(*b)).map(|(g, y)| g * y).collect();
                    let db = g.iter().zip(self.value(*a)).map(|(g, x)| g * x).collect();
                    accumulate(&mut grads, *a, da);
                    accumulate(&mut grads, *b, db);
                }
                Op::Sigmoid(x) => {
                    let d = g.iter().zip(&node.value).map(|(g, s)| g * s * (1.0 - s)).collect();
                    accumulate(&mut grads, *x, d);
                }
                Op::Tanh(x) => {
                    let d = g.iter().zip(&node.value).map(|(g, t)| g * (1.0 - t * t)).collect();
                    accumulate(&mut grads, *x, d);
                }
                Op::Relu(x) => {
                    let d = g
                        .iter()
                        .zip(self.value(*x))
                        .map(|(g, z)| if *z > 0.0 { *g } else { 0.0 })
                        .collect();
                    accumulate(&mut grads, *x, d);
                }
                Op::Normalize { x, inv_std } => {
                    let y = &node.value;
                    let n = y.len() as f64;
                    let mean_g = g.iter().sum::<f64>() / n;
                    let mean_gy = g.iter().zip(y).map(|(g, y)| g * y).sum::<f64>() / n;
                    let d = g
                        .iter()
                        .zip(y)
                        .map(|(g, y)| inv_std * (g - mean_g - y * mean_gy))
                        .collect();
                    accumulate(&mut grads, *x, d);
                }
                Op::Slice { x, start } => {
                    let mut d = vec![0.0; self.value(*x).len()];
                    d[*start..*start + g.len()].copy_from_slice(&g);
                    accumulate(&mut grads, *x, d);
                }
                Op::Mask { x, mask } => {
                    let d = g.iter().zip(mask).map(|(g, m)| g * m).collect();
                    accumulate(&mut grads, *x, d);
                }
                Op::Mean(xs) => {
                    let k = xs.len() as f64;
                    let d: Vec<f64> = g.iter().map(|v| v / k).collect();
                    for &x in xs {
                        accumulate(&mut grads, x, d.clone());
                    }
                }
                Op::Nll { logits, target, probs } => {
                    let s = g[0];
                    let mut d: Vec<f64> = probs.iter().map(|p| s * p).collect();
                    d[*target] -= s;
                    accumulate(&mut grads, *logits, d);
                }
                Op::Huber { v, target } => {
                    let d = g[0] * huber_grad(self.scalar(*v), *target);
                    accumulate(&mut grads, *v, vec![d]);
                }
                Op::Mse { x, target } => {
                    let n = target.len() as f64;
                    let d = self
                        .value(*x)
                        .iter()
                        .zip(target)
                        .map(|(a, b)| g[0] * 2.0 * (a - b) / n)
                        .collect();
                    accumulate(&mut grads, *x, d);
                }
                Op::WeightedSum(terms) => {
                    for &(v, w) in terms {
                        accumulate(&mut grads, v, vec![g[0] * w]);
                    }
                }
            }
        }
        Ok(())
    }
}

fn accumulate(grads: &mut [Option<Vec<f64>>], v: Var, d: Vec<f64>) {
    match &mut grads[v.0] {
        Some(existing) => existing.iter_mut().zip(&d).for_each(|(a, b)| *a += b),
        slot @ None => *slot = Some(d),
    }
}
