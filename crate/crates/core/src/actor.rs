//! The captioning policy: projected image features seed a GRU, whose output
//! drives a layer-normalized LSTM; a linear map to vocabulary logits and a
//! softmax give the next-token distribution.
//!
//! The projected feature vector is the GRU input only at the initial step;
//! afterwards the GRU consumes the embedding of the previous token.

use rand::distributions::{Distribution, WeightedIndex};
use rand::Rng;

use crate::error::{AdcError, Result};
use crate::nn::layers::{dropout_mask, GruCell, Linear, LnLstmCell, LstmVars, Norm};
use crate::nn::optim::{adam_step, AdamConfig};
use crate::nn::params::{Init, ParamId, ParamStore};
use crate::nn::tape::{Graph, Var};
use crate::nn::ops;
use crate::text::{TokenId, END, START};

pub const DEFAULT_HIDDEN: usize = 256;
pub const DEFAULT_DROPOUT: f64 = 0.2;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ModelDims {
    pub feature_dim: usize,
    pub hidden: usize,
    pub vocab: usize,
}

#[derive(Debug, Clone, Copy)]
struct ActorLayers {
    proj: Linear,
    proj_norm: Norm,
    embed: ParamId,
    gru: GruCell,
    lstm: LnLstmCell,
    out: Linear,
}

impl ActorLayers {
    fn register<R: Rng + ?Sized>(store: &mut ParamStore, d: ModelDims, rng: &mut R) -> Result<Self> {
        let proj = Linear::register(store, "proj", d.feature_dim, d.hidden, rng)?;
        let proj_norm = Norm::register(store, "proj_norm", d.hidden, rng)?;
        let embed = store.add("embed", d.vocab, d.hidden, Init::Uniform { fan_in: d.hidden }, rng)?;
        let gru = GruCell::register(store, "gru", d.hidden, d.hidden, rng)?;
        let lstm = LnLstmCell::register(store, "lstm", d.hidden, d.hidden, rng)?;
        let out = Linear::register(store, "out", d.hidden, d.vocab, rng)?;
        Ok(ActorLayers { proj, proj_norm, embed, gru, lstm, out })
    }

    fn bind(store: &ParamStore, d: ModelDims) -> Result<Self> {
        Ok(ActorLayers {
            proj: Linear::bind(store, "proj", d.feature_dim, d.hidden)?,
            proj_norm: Norm::bind(store, "proj_norm", d.hidden)?,
            embed: store.expect("embed", d.vocab, d.hidden)?,
            gru: GruCell::bind(store, "gru", d.hidden, d.hidden)?,
            lstm: LnLstmCell::bind(store, "lstm", d.hidden, d.hidden)?,
            out: Linear::bind(store, "out", d.hidden, d.vocab)?,
        })
    }
}

/// Recurrent state between decoding steps.
#[derive(Debug, Clone, PartialEq)]
pub struct ActorState {
    pub h_g: Vec<f64>,
    pub h_l: Vec<f64>,
    pub c_l: Vec<f64>,
    pub t: usize,
    pub prev_token: TokenId,
}

#[derive(Debug, Clone, Copy)]
struct TapeState {
    h_g: Var,
    lstm: LstmVars,
}

/// One sampled caption.
#[derive(Debug, Clone, PartialEq)]
pub struct EpisodeTrace {
    pub features: Vec<f64>,
    /// Sampled tokens a_1..a_T, including the end token when reached.
    pub tokens: Vec<TokenId>,
    /// log pi(a_t | s_{t-1}) for each step.
    pub log_probs: Vec<f64>,
    /// Full distribution at each step.
    pub step_probs: Vec<Vec<f64>>,
    /// Dropout masks used at each step, replayed by the policy update.
    pub dropout_masks: Vec<Option<Vec<f64>>>,
    pub terminated_by_end: bool,
}

impl EpisodeTrace {
    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn total_log_prob(&self) -> f64 {
        self.log_probs.iter().sum()
    }
}

#[derive(Debug, Clone)]
pub struct Actor {
    pub store: ParamStore,
    pub dims: ModelDims,
    pub dropout_rate: f64,
    layers: ActorLayers,
}

impl Actor {
    pub fn new<R: Rng + ?Sized>(dims: ModelDims, dropout_rate: f64, rng: &mut R) -> Result<Self> {
        let mut store = ParamStore::new();
        let layers = ActorLayers::register(&mut store, dims, rng)?;
        Ok(Actor { store, dims, dropout_rate, layers })
    }

    /// Rebinds a store loaded from a checkpoint, inferring dimensions.
    pub fn from_store(store: ParamStore, dropout_rate: f64) -> Result<Self> {
        let proj = store.get(store.require("proj.w")?);
        let out = store.get(store.require("out.w")?);
        let dims = ModelDims {
            feature_dim: proj.cols,
            hidden: proj.rows,
            vocab: out.rows,
        };
        let layers = ActorLayers::bind(&store, dims)?;
        Ok(Actor { store, dims, dropout_rate, layers })
    }

    /// Projected image feature `relu(LN(W_x x + b))`.
    fn project_on(&self, g: &mut Graph, features: &[f64]) -> Result<Var> {
        if features.len() != self.dims.feature_dim {
            return Err(AdcError::shape(
                "actor features",
                format!("length {}", self.dims.feature_dim),
                format!("length {}", features.len()),
            ));
        }
        let x = g.constant(features.to_vec());
        let p = self.layers.proj.forward_on(g, &self.store, x)?;
        let n = self.layers.proj_norm.forward_on(g, &self.store, p)?;
        Ok(g.relu(n))
    }

    fn init_on(&self, g: &mut Graph, features: &[f64]) -> Result<TapeState> {
        let f = self.project_on(g, features)?;
        let h0 = g.zeros(self.dims.hidden);
        let h_g = self.layers.gru.step_on(g, &self.store, f, h0)?;
        Ok(TapeState {
            h_g,
            lstm: LstmVars {
                h: g.zeros(self.dims.hidden),
                c: g.zeros(self.dims.hidden),
            },
        })
    }

    fn step_on(
        &self,
        g: &mut Graph,
        state: TapeState,
        prev_token: TokenId,
        mask: Option<&[f64]>,
    ) -> Result<(Var, TapeState)> {
        let phi = g.row(&self.store, self.layers.embed, prev_token)?;
        let h_g = self.layers.gru.step_on(g, &self.store, phi, state.h_g)?;
        let lstm = self.layers.lstm.step_on(g, &self.store, h_g, state.lstm, mask)?;
        let logits = self.layers.out.forward_on(g, &self.store, lstm.h)?;
        Ok((logits, TapeState { h_g, lstm }))
    }

    fn load_state(&self, g: &mut Graph, s: &ActorState) -> Result<TapeState> {
        let h = self.dims.hidden;
        if s.h_g.len() != h || s.h_l.len() != h || s.c_l.len() != h {
            return Err(AdcError::shape("actor state", format!("vectors of length {h}"), "other lengths"));
        }
        Ok(TapeState {
            h_g: g.constant(s.h_g.clone()),
            lstm: LstmVars {
                h: g.constant(s.h_l.clone()),
                c: g.constant(s.c_l.clone()),
            },
        })
    }

    fn save_state(g: &Graph, s: TapeState, t: usize, prev_token: TokenId) -> ActorState {
        ActorState {
            h_g: g.value(s.h_g).to_vec(),
            h_l: g.value(s.lstm.h).to_vec(),
            c_l: g.value(s.lstm.c).to_vec(),
            t,
            prev_token,
        }
    }

    pub fn init_state(&self, features: &[f64]) -> Result<ActorState> {
        let mut g = Graph::new();
        let s = self.init_on(&mut g, features)?;
        Ok(Self::save_state(&g, s, 0, START))
    }

    fn step_masked(&self, state: &ActorState, mask: Option<&[f64]>) -> Result<(Vec<f64>, ActorState)> {
        if state.prev_token >= self.dims.vocab {
            return Err(AdcError::Validation(format!(
                "token id {} out of range for vocabulary of {}",
                state.prev_token, self.dims.vocab
            )));
        }
        let mut g = Graph::new();
        let s = self.load_state(&mut g, state)?;
        let (logits, next) = self.step_on(&mut g, s, state.prev_token, mask)?;
        let probs = ops::softmax(g.value(logits))?;
        Ok((probs, Self::save_state(&g, next, state.t + 1, state.prev_token)))
    }

    /// Next-token distribution in evaluation mode. The returned state still
    /// carries `prev_token`; callers set it to the chosen token.
    pub fn step(&self, state: &ActorState) -> Result<(Vec<f64>, ActorState)> {
        self.step_masked(state, None)
    }

    fn draw_mask<R: Rng + ?Sized>(&self, training: bool, rng: &mut R) -> Result<Option<Vec<f64>>> {
        if training {
            dropout_mask(self.dims.hidden, self.dropout_rate, rng)
        } else {
            Ok(None)
        }
    }

    /// Samples `a_t ~ pi(. | s_{t-1})` until the end token or `t_max` tokens.
    pub fn sample_caption<R: Rng + ?Sized>(
        &self,
        features: &[f64],
        t_max: usize,
        training: bool,
        rng: &mut R,
    ) -> Result<EpisodeTrace> {
        if t_max < 1 {
            return Err(AdcError::Validation("t_max must be at least 1".into()));
        }
        let mut state = self.init_state(features)?;
        let mut trace = EpisodeTrace {
            features: features.to_vec(),
            tokens: Vec::new(),
            log_probs: Vec::new(),
            step_probs: Vec::new(),
            dropout_masks: Vec::new(),
            terminated_by_end: false,
        };
        for _ in 0..t_max {
            let mask = self.draw_mask(training, rng)?;
            let (probs, mut next) = self.step_masked(&state, mask.as_deref())?;
            let dist = WeightedIndex::new(&probs)
                .map_err(|e| AdcError::Numerics(format!("policy distribution: {e}")))?;
            let a = dist.sample(rng);
            trace.tokens.push(a);
            trace.log_probs.push(probs[a].ln());
            trace.step_probs.push(probs);
            trace.dropout_masks.push(mask);
            next.prev_token = a;
            state = next;
            if a == END {
                trace.terminated_by_end = true;
                break;
            }
        }
        Ok(trace)
    }

    /// Argmax decoding (lowest id wins ties); includes the end token if reached.
    pub fn greedy_tokens(&self, features: &[f64], t_max: usize) -> Result<Vec<TokenId>> {
        let mut state = self.init_state(features)?;
        let mut out = Vec::new();
        for _ in 0..t_max {
            let (probs, mut next) = self.step(&state)?;
            let mut best = 0;
            for (i, p) in probs.iter().enumerate() {
                if *p > probs[best] {
                    best = i;
                }
            }
            out.push(best);
            if best == END {
                break;
            }
            next.prev_token = best;
            state = next;
        }
        Ok(out)
    }

    /// Greedy caption without the end token.
    pub fn greedy_decode(&self, features: &[f64], t_max: usize) -> Result<Vec<TokenId>> {
        let mut tokens = self.greedy_tokens(features, t_max)?;
        if tokens.last() == Some(&END) {
            tokens.pop();
        }
        Ok(tokens)
    }

    /// Builds the teacher-forced graph and returns per-step NLL nodes.
    fn forced_nll_on(
        &self,
        g: &mut Graph,
        features: &[f64],
        tokens: &[TokenId],
        masks: &[Option<Vec<f64>>],
    ) -> Result<Vec<Var>> {
        let mut state = self.init_on(g, features)?;
        let mut prev = START;
        let mut nlls = Vec::with_capacity(tokens.len());
        for (t, &tok) in tokens.iter().enumerate() {
            let mask = masks.get(t).and_then(|m| m.as_deref());
            let (logits, next) = self.step_on(g, state, prev, mask)?;
            nlls.push(g.nll(logits, tok)?);
            state = next;
            prev = tok;
        }
        Ok(nlls)
    }

    /// Mean teacher-forced negative log-likelihood of `caption`; accumulates
    /// gradients. Dropout is drawn from `rng` when given.
    pub fn nll_loss<R: Rng + ?Sized>(
        &mut self,
        features: &[f64],
        caption: &[TokenId],
        rng: Option<&mut R>,
    ) -> Result<f64> {
        if caption.is_empty() {
            return Err(AdcError::Validation("empty caption".into()));
        }
        if caption.last() != Some(&END) {
            return Err(AdcError::Validation("caption must end with the end token".into()));
        }
        let masks = match rng {
            Some(rng) => (0..caption.len())
                .map(|_| self.draw_mask(true, rng))
                .collect::<Result<Vec<_>>>()?,
            None => Vec::new(),
        };
        let mut g = Graph::new();
        let nlls = self.forced_nll_on(&mut g, features, caption, &masks)?;
        let w = 1.0 / nlls.len() as f64;
        let terms: Vec<(Var, f64)> = nlls.into_iter().map(|v| (v, w)).collect();
        let loss = g.weighted_sum(&terms)?;
        g.backward(loss, &mut self.store)?;
        Ok(g.scalar(loss))
    }

    /// One teacher-forcing Adam step.
    pub fn pretrain_step<R: Rng + ?Sized>(
        &mut self,
        features: &[f64],
        caption: &[TokenId],
        adam: &AdamConfig,
        epoch: usize,
        rng: &mut R,
    ) -> Result<f64> {
        self.store.zero_grad();
        let loss = self.nll_loss(features, caption, Some(rng))?;
        adam_step(&mut self.store, adam, epoch)?;
        Ok(loss)
    }

    /// `sum_t log pi(a_t | s_{t-1})` for the trace's tokens, replaying its
    /// dropout masks.
    pub fn trace_log_prob(&self, trace: &EpisodeTrace) -> Result<f64> {
        let mut g = Graph::new();
        let nlls = self.forced_nll_on(&mut g, &trace.features, &trace.tokens, &trace.dropout_masks)?;
        Ok(-nlls.iter().map(|v| g.scalar(*v)).sum::<f64>())
    }

    /// Accumulates the gradient of `-sum_t A_t log pi(a_t | s_{t-1})` and
    /// returns that loss. Advantages are constants.
    pub fn reinforce_loss(&mut self, trace: &EpisodeTrace, advantages: &[f64]) -> Result<f64> {
        if advantages.len() != trace.len() {
            return Err(AdcError::Validation(format!(
                "{} advantages for a trace of {} steps",
                advantages.len(),
                trace.len()
            )));
        }
        let mut g = Graph::new();
        let nlls = self.forced_nll_on(&mut g, &trace.features, &trace.tokens, &trace.dropout_masks)?;
        // -A log pi == A * nll
        let terms: Vec<(Var, f64)> = nlls.into_iter().zip(advantages.iter().copied()).collect();
        let loss = g.weighted_sum(&terms)?;
        g.backward(loss, &mut self.store)?;
        Ok(g.scalar(loss))
    }

    /// One REINFORCE ascent step on `sum_t A_t log pi(a_t | s_{t-1})`.
    pub fn reinforce_update(
        &mut self,
        trace: &EpisodeTrace,
        advantages: &[f64],
        adam: &AdamConfig,
        epoch: usize,
    ) -> Result<f64> {
        self.store.zero_grad();
        let loss = self.reinforce_loss(trace, advantages)?;
        adam_step(&mut self.store, adam, epoch)?;
        Ok(loss)
    }
}
