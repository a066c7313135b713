//! Parameterized building blocks: affine maps, layer norm, GRU and
//! layer-normalized LSTM cells.
//!
//! Each block registers its parameters under a name prefix so that models
//! can be rebuilt from a checkpoint by name lookup (`bind`).

use rand::Rng;

use crate::error::{AdcError, Result};
use crate::nn::params::{Init, ParamId, ParamStore};
use crate::nn::tape::{Graph, Var};

fn name(prefix: &str, leaf: &str) -> String {
    format!("{prefix}.{leaf}")
}

#[derive(Debug, Clone, Copy)]
pub struct Linear {
    pub w: ParamId,
    pub b: ParamId,
    pub input: usize,
    pub output: usize,
}

impl Linear {
    pub fn register<R: Rng + ?Sized>(
        store: &mut ParamStore,
        prefix: &str,
        input: usize,
        output: usize,
        rng: &mut R,
    ) -> Result<Self> {
        let w = store.add(&name(prefix, "w"), output, input, Init::Uniform { fan_in: input }, rng)?;
        let b = store.add(&name(prefix, "b"), output, 1, Init::Zeros, rng)?;
        Ok(Linear { w, b, input, output })
    }

    pub fn bind(store: &ParamStore, prefix: &str, input: usize, output: usize) -> Result<Self> {
        Ok(Linear {
            w: store.expect(&name(prefix, "w"), output, input)?,
            b: store.expect(&name(prefix, "b"), output, 1)?,
            input,
            output,
        })
    }

    pub fn forward_on(&self, g: &mut Graph, store: &ParamStore, x: Var) -> Result<Var> {
        g.linear(store, self.w, Some(self.b), x)
    }
}

/// Gain and bias of a layer norm.
#[derive(Debug, Clone, Copy)]
pub struct Norm {
    pub gain: ParamId,
    pub bias: ParamId,
}

impl Norm {
    pub fn register<R: Rng + ?Sized>(
        store: &mut ParamStore,
        prefix: &str,
        n: usize,
        rng: &mut R,
    ) -> Result<Self> {
        Ok(Norm {
            gain: store.add(&name(prefix, "gain"), n, 1, Init::Ones, rng)?,
            bias: store.add(&name(prefix, "bias"), n, 1, Init::Zeros, rng)?,
        })
    }

    pub fn bind(store: &ParamStore, prefix: &str, n: usize) -> Result<Self> {
        Ok(Norm {
            gain: store.expect(&name(prefix, "gain"), n, 1)?,
            bias: store.expect(&name(prefix, "bias"), n, 1)?,
        })
    }

    pub fn forward_on(&self, g: &mut Graph, store: &ParamStore, x: Var) -> Result<Var> {
        g.layer_norm(store, x, self.gain, self.bias)
    }
}

/// Standard GRU:
///
/// ```text
/// z  = sigmoid(W_z x + U_z h + b_z)
/// r  = sigmoid(W_r x + U_r h + b_r)
/// n  = tanh(W_n x + r * (U_n h) + b_n)
/// h' = (1 - z) * n + z * h
/// ```
#[derive(Debug, Clone, Copy)]
pub struct GruCell {
    pub w_z: ParamId,
    pub u_z: ParamId,
    pub b_z: ParamId,
    pub w_r: ParamId,
    pub u_r: ParamId,
    pub b_r: ParamId,
    pub w_n: ParamId,
    pub u_n: ParamId,
    pub b_n: ParamId,
    pub input: usize,
    pub hidden: usize,
}

impl GruCell {
    pub fn register<R: Rng + ?Sized>(
        store: &mut ParamStore,
        prefix: &str,
        input: usize,
        hidden: usize,
        rng: &mut R,
    ) -> Result<Self> {
        let w = |leaf: &str, store: &mut ParamStore, rng: &mut R| {
            store.add(&name(prefix, leaf), hidden, input, Init::Uniform { fan_in: input }, rng)
        };
        let w_z = w("w_z", store, rng)?;
        let w_r = w("w_r", store, rng)?;
        let w_n = w("w_n", store, rng)?;
        let u = |leaf: &str, store: &mut ParamStore, rng: &mut R| {
            store.add(&name(prefix, leaf), hidden, hidden, Init::Uniform { fan_in: hidden }, rng)
        };
        let u_z = u("u_z", store, rng)?;
        let u_r = u("u_r", store, rng)?;
        let u_n = u("u_n", store, rng)?;
        let b_z = store.add(&name(prefix, "b_z"), hidden, 1, Init::Zeros, rng)?;
        let b_r = store.add(&name(prefix, "b_r"), hidden, 1, Init::Zeros, rng)?;
        let b_n = store.add(&name(prefix, "b_n"), hidden, 1, Init::Zeros, rng)?;
        Ok(GruCell { w_z, u_z, b_z, w_r, u_r, b_r, w_n, u_n, b_n, input, hidden })
    }

    pub fn bind(store: &ParamStore, prefix: &str, input: usize, hidden: usize) -> Result<Self> {
        let w = |leaf| store.expect(&name(prefix, leaf), hidden, input);
        let u = |leaf| store.expect(&name(prefix, leaf), hidden, hidden);
        let b = |leaf| store.expect(&name(prefix, leaf), hidden, 1);
        Ok(GruCell {
            w_z: w("w_z")?,
            u_z: u("u_z")?,
            b_z: b("b_z")?,
            w_r: w("w_r")?,
            u_r: u("u_r")?,
            b_r: b("b_r")?,
            w_n: w("w_n")?,
            u_n: u("u_n")?,
            b_n: b("b_n")?,
            input,
            hidden,
        })
    }

    pub fn step_on(&self, g: &mut Graph, store: &ParamStore, x: Var, h: Var) -> Result<Var> {
        let gate = |g: &mut Graph, w, u, b| -> Result<Var> {
            let wx = g.linear(store, w, Some(b), x)?;
            let uh = g.linear(store, u, None, h)?;
            g.add(wx, uh)
        };
        let z_pre = gate(g, self.w_z, self.u_z, self.b_z)?;
        let z = g.sigmoid(z_pre);
        let r_pre = gate(g, self.w_r, self.u_r, self.b_r)?;
        let r = g.sigmoid(r_pre);
        let wx = g.linear(store, self.w_n, Some(self.b_n), x)?;
        let uh = g.linear(store, self.u_n, None, h)?;
        let gated = g.mul(r, uh)?;
        let n_pre = g.add(wx, gated)?;
        let n = g.tanh(n_pre);
        // (1 - z) * n + z * h  ==  n + z * (h - n)
        let diff = g.sub(h, n)?;
        let carry = g.mul(z, diff)?;
        g.add(n, carry)
    }

    /// Forward-only step on plain vectors.
    pub fn step(&self, store: &ParamStore, x: &[f64], h: &[f64]) -> Result<Vec<f64>> {
        let mut g = Graph::new();
        let xv = g.constant(x.to_vec());
        let hv = g.constant(h.to_vec());
        let out = self.step_on(&mut g, store, xv, hv)?;
        Ok(g.value(out).to_vec())
    }
}

/// LSTM with layer normalization on the input and recurrent
/// pre-activations and on the cell state:
///
/// ```text
/// (i, f, g, o) = LN_x(W x) + LN_h(U h) + b      (gate order i, f, g, o)
/// c' = sigmoid(f) * c + sigmoid(i) * tanh(g)
/// h' = sigmoid(o) * tanh(LN_c(c'))
/// ```
#[derive(Debug, Clone, Copy)]
pub struct LnLstmCell {
    pub w: ParamId,
    pub u: ParamId,
    pub b: ParamId,
    pub ln_x: Norm,
    pub ln_h: Norm,
    pub ln_c: Norm,
    pub input: usize,
    pub hidden: usize,
}

#[derive(Debug, Clone, Copy)]
pub struct LstmVars {
    pub h: Var,
    pub c: Var,
}

impl LnLstmCell {
    pub fn register<R: Rng + ?Sized>(
        store: &mut ParamStore,
        prefix: &str,
        input: usize,
        hidden: usize,
        rng: &mut R,
    ) -> Result<Self> {
        let w = store.add(&name(prefix, "w"), 4 * hidden, input, Init::Uniform { fan_in: input }, rng)?;
        let u = store.add(&name(prefix, "u"), 4 * hidden, hidden, Init::Uniform { fan_in: hidden }, rng)?;
        let b = store.add(&name(prefix, "b"), 4 * hidden, 1, Init::Zeros, rng)?;
        let ln_x = Norm::register(store, &name(prefix, "ln_x"), 4 * hidden, rng)?;
        let ln_h = Norm::register(store, &name(prefix, "ln_h"), 4 * hidden, rng)?;
        let ln_c = Norm::register(store, &name(prefix, "ln_c"), hidden, rng)?;
        Ok(LnLstmCell { w, u, b, ln_x, ln_h, ln_c, input, hidden })
    }

    pub fn bind(store: &ParamStore, prefix: &str, input: usize, hidden: usize) -> Result<Self> {
        Ok(LnLstmCell {
            w: store.expect(&name(prefix, "w"), 4 * hidden, input)?,
            u: store.expect(&name(prefix, "u"), 4 * hidden, hidden)?,
            b: store.expect(&name(prefix, "b"), 4 * hidden, 1)?,
            ln_x: Norm::bind(store, &name(prefix, "ln_x"), 4 * hidden)?,
            ln_h: Norm::bind(store, &name(prefix, "ln_h"), 4 * hidden)?,
            ln_c: Norm::bind(store, &name(prefix, "ln_c"), hidden)?,
            input,
            hidden,
        })
    }

    /// One step. `dropout_mask`, when given, multiplies `h'` (already scaled
    /// by `1/(1 - rate)`).
    pub fn step_on(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        x: Var,
        state: LstmVars,
        dropout_mask: Option<&[f64]>,
    ) -> Result<LstmVars> {
        let hs = self.hidden;
        let wx = g.linear(store, self.w, None, x)?;
        let wx = self.ln_x.forward_on(g, store, wx)?;
        let uh = g.linear(store, self.u, None, state.h)?;
        let uh = self.ln_h.forward_on(g, store, uh)?;
        let b = g.param(store, self.b);
        let pre = g.add(wx, uh)?;
        let pre = g.add(pre, b)?;
        let i = g.slice(pre, 0, hs)?;
        let i = g.sigmoid(i);
        let f = g.slice(pre, hs, hs)?;
        let f = g.sigmoid(f);
        let cand = g.slice(pre, 2 * hs, hs)?;
        let cand = g.tanh(cand);
        let o = g.slice(pre, 3 * hs, hs)?;
        let o = g.sigmoid(o);
        let keep = g.mul(f, state.c)?;
        let write = g.mul(i, cand)?;
        let c = g.add(keep, write)?;
        let cn = self.ln_c.forward_on(g, store, c)?;
        let ct = g.tanh(cn);
        let mut h = g.mul(o, ct)?;
        if let Some(mask) = dropout_mask {
            h = g.mask(h, mask)?;
        }
        Ok(LstmVars { h, c })
    }

    /// Forward-only step. Dropout is drawn from `rng` only when `training`.
    #[allow(clippy::too_many_arguments)]
    pub fn step<R: Rng + ?Sized>(
        &self,
        store: &ParamStore,
        x: &[f64],
        h: &[f64],
        c: &[f64],
        dropout_rate: f64,
        training: bool,
        rng: &mut R,
    ) -> Result<(Vec<f64>, Vec<f64>)> {
        let mask = if training {
            dropout_mask(self.hidden, dropout_rate, rng)?
        } else {
            None
        };
        let mut g = Graph::new();
        let xv = g.constant(x.to_vec());
        let state = LstmVars {
            h: g.constant(h.to_vec()),
            c: g.constant(c.to_vec()),
        };
        let out = self.step_on(&mut g, store, xv, state, mask.as_deref())?;
        Ok((g.value(out.h).to_vec(), g.value(out.c).to_vec()))
    }
}

/// Inverted dropout mask: kept units scaled by `1/(1 - rate)`.
/// Returns `None` when `rate` is zero.
pub fn dropout_mask<R: Rng + ?Sized>(n: usize, rate: f64, rng: &mut R) -> Result<Option<Vec<f64>>> {
    if !(0.0..1.0).contains(&rate) {
        return Err(AdcError::Validation(format!("dropout rate {rate} not in [0, 1)")));
    }
    if rate == 0.0 {
        return Ok(None);
    }
    let scale = 1.0 / (1.0 - rate);
    Ok(Some(
        (0..n)
            .map(|_| if rng.gen::<f64>() < rate { 0.0 } else { scale })
            .collect(),
    ))
}
