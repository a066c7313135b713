//! Finite-difference checks for every differentiable component, on small
//! seeded instances.

use rand::Rng;

use crate::actor::{Actor, ModelDims};
use crate::encdec_critic::EncDecCritic;
use crate::error::Result;
use crate::nn::gradcheck::{grad_check, GradCheckConfig, GradCheckReport};
use crate::nn::layers::{dropout_mask, GruCell, Linear, LnLstmCell, LstmVars, Norm};
use crate::nn::params::ParamStore;
use crate::nn::rng::RngState;
use crate::nn::tape::Graph;
use crate::text::{TokenId, END};
use crate::value_critic::ValueCritic;

pub const COMPONENTS: [&str; 7] = [
    "linear",
    "layer_norm",
    "gru_step",
    "ln_lstm_step",
    "actor_nll",
    "value_huber",
    "encdec_recon",
];

const DIMS: ModelDims = ModelDims { feature_dim: 6, hidden: 5, vocab: 7 };

fn gaussian_vec<R: Rng + ?Sized>(n: usize, rng: &mut R) -> Vec<f64> {
    (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect()
}

fn sentence() -> Vec<TokenId> {
    vec![4, 6, 5, END]
}

/// Runs `loss_fn` against a model's store while the store is borrowed by the
/// checker.
fn check_model<M, F>(
    model: &mut M,
    store_of: fn(&mut M) -> &mut ParamStore,
    cfg: GradCheckConfig,
    mut loss_fn: F,
) -> Result<GradCheckReport>
where
    F: FnMut(&mut M) -> Result<f64>,
{
    let mut store = std::mem::take(store_of(model));
    let report = grad_check(&mut store, cfg, |s| {
        std::mem::swap(s, store_of(model));
        let out = loss_fn(model);
        std::mem::swap(s, store_of(model));
        out
    });
    *store_of(model) = store;
    report
}

pub fn check_component(name: &str, cfg: GradCheckConfig) -> Result<GradCheckReport> {
    let mut rng = RngState::new(cfg.seed).fork(7).rng();
    let x = gaussian_vec(DIMS.feature_dim, &mut rng);
    let target = gaussian_vec(DIMS.hidden, &mut rng);
    let h0 = gaussian_vec(DIMS.hidden, &mut rng);
    let c0 = gaussian_vec(DIMS.hidden, &mut rng);
    match name {
        "linear" | "layer_norm" => {
            let mut store = ParamStore::new();
            let lin = Linear::register(&mut store, "lin", DIMS.feature_dim, DIMS.hidden, &mut rng)?;
            let norm = if name == "layer_norm" {
                let n = Norm::register(&mut store, "ln", DIMS.hidden, &mut rng)?;
                // move gain and bias away from their identity initialization
                for p in store.iter_mut().filter(|p| p.name.starts_with("ln.")) {
                    p.values.iter_mut().for_each(|v| *v += rng.gen_range(-0.5..0.5));
                }
                Some(n)
            } else {
                None
            };
            grad_check(&mut store, cfg, |s| {
                let mut g = Graph::new();
                let xv = g.constant(x.clone());
                let mut y = lin.forward_on(&mut g, s, xv)?;
                if let Some(n) = norm {
                    y = n.forward_on(&mut g, s, y)?;
                }
                let y = g.tanh(y);
                let loss = g.mse(y, &target)?;
                g.backward(loss, s)?;
                Ok(g.scalar(loss))
            })
        }
        "gru_step" => {
            let mut store = ParamStore::new();
            let gru = GruCell::register(&mut store, "gru", DIMS.feature_dim, DIMS.hidden, &mut rng)?;
            perturb_biases(&mut store, &mut rng);
            grad_check(&mut store, cfg, |s| {
                let mut g = Graph::new();
                let xv = g.constant(x.clone());
                let hv = g.constant(h0.clone());
                let h1 = gru.step_on(&mut g, s, xv, hv)?;
                let h2 = gru.step_on(&mut g, s, xv, h1)?;
                let loss = g.mse(h2, &target)?;
                g.backward(loss, s)?;
                Ok(g.scalar(loss))
            })
        }
        "ln_lstm_step" => {
            let mut store = ParamStore::new();
            let cell = LnLstmCell::register(&mut store, "lstm", DIMS.feature_dim, DIMS.hidden, &mut rng)?;
            perturb_biases(&mut store, &mut rng);
            let mask = dropout_mask(DIMS.hidden, 0.2, &mut rng)?;
            grad_check(&mut store, cfg, |s| {
                let mut g = Graph::new();
                let xv = g.constant(x.clone());
                let state = LstmVars { h: g.constant(h0.clone()), c: g.constant(c0.clone()) };
                let s1 = cell.step_on(&mut g, s, xv, state, None)?;
                let s2 = cell.step_on(&mut g, s, xv, s1, mask.as_deref())?;
                let a = g.mse(s2.h, &target)?;
                let b = g.mse(s2.c, &h0)?;
                let loss = g.weighted_sum(&[(a, 1.0), (b, 0.5)])?;
                g.backward(loss, s)?;
                Ok(g.scalar(loss))
            })
        }
        "actor_nll" => {
            let mut actor = Actor::new(DIMS, 0.0, &mut rng)?;
            perturb_biases(&mut actor.store, &mut rng);
            let caption = sentence();
            check_model(&mut actor, |a| &mut a.store, cfg, |a| {
                a.nll_loss(&x, &caption, None::<&mut rand_chacha::ChaCha8Rng>)
            })
        }
        "value_huber" => {
            let mut critic = ValueCritic::new(DIMS, &mut rng)?;
            perturb_biases(&mut critic.store, &mut rng);
            let tokens = sentence();
            // small reward keeps every step on the quadratic side of the loss
            let reward = critic.values(&x, &tokens)?.iter().sum::<f64>() / tokens.len() as f64 + 0.05;
            check_model(&mut critic, |c| &mut c.store, cfg, |c| c.episode_loss(&x, &tokens, reward))
        }
        "encdec_recon" => {
            let mut critic = EncDecCritic::new(DIMS, &mut rng)?;
            perturb_biases(&mut critic.store, &mut rng);
            let tokens = sentence();
            let f = critic.feature_target(&x)?;
            check_model(&mut critic, |c| &mut c.store, cfg, |c| c.recon_loss_against(&x, &tokens, &f))
        }
        other => Err(crate::error::AdcError::Validation(format!(
            "unknown gradient-check component '{other}'"
        ))),
    }
}

/// Zero-initialized vectors make many coordinates trivially exact; shift
/// them so the check exercises every path.
fn perturb_biases<R: Rng + ?Sized>(store: &mut ParamStore, rng: &mut R) {
    for p in store.iter_mut().filter(|p| p.cols == 1) {
        p.values.iter_mut().for_each(|v| *v += rng.gen_range(-0.3..0.3));
    }
}

/// Checks every component in [`COMPONENTS`].
pub fn run_all(cfg: GradCheckConfig) -> Result<Vec<(String, GradCheckReport)>> {
    COMPONENTS
        .iter()
        .map(|c| Ok((c.to_string(), check_component(c, cfg)?)))
        .collect()
}
