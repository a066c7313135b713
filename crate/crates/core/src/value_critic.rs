//! Recurrent value baseline `V(s_t)`: the GRU hidden state starts from the
//! projected image features, consumes the sampled tokens, and a tanh head
//! gives a value in [-1, 1] for every prefix.

use rand::Rng;

use crate::actor::ModelDims;
use crate::error::{AdcError, Result};
use crate::nn::layers::{GruCell, Linear};
use crate::nn::optim::{adam_step, AdamConfig};
use crate::nn::params::{Init, ParamId, ParamStore};
use crate::nn::tape::{Graph, Var};
use crate::text::TokenId;

#[derive(Debug, Clone, Copy)]
struct ValueLayers {
    proj: Linear,
    embed: ParamId,
    gru: GruCell,
    head: Linear,
}

#[derive(Debug, Clone)]
pub struct ValueCritic {
    pub store: ParamStore,
    pub dims: ModelDims,
    layers: ValueLayers,
}

impl ValueCritic {
    pub fn new<R: Rng + ?Sized>(dims: ModelDims, rng: &mut R) -> Result<Self> {
        let mut store = ParamStore::new();
        let layers = ValueLayers {
            proj: Linear::register(&mut store, "proj", dims.feature_dim, dims.hidden, rng)?,
            embed: store.add("embed", dims.vocab, dims.hidden, Init::Uniform { fan_in: dims.hidden }, rng)?,
            gru: GruCell::register(&mut store, "gru", dims.hidden, dims.hidden, rng)?,
            head: Linear::register(&mut store, "head", dims.hidden, 1, rng)?,
        };
        Ok(ValueCritic { store, dims, layers })
    }

    pub fn from_store(store: ParamStore) -> Result<Self> {
        let proj = store.get(store.require("proj.w")?);
        let embed = store.get(store.require("embed")?);
        let dims = ModelDims {
            feature_dim: proj.cols,
            hidden: proj.rows,
            vocab: embed.rows,
        };
        let layers = ValueLayers {
            proj: Linear::bind(&store, "proj", dims.feature_dim, dims.hidden)?,
            embed: store.expect("embed", dims.vocab, dims.hidden)?,
            gru: GruCell::bind(&store, "gru", dims.hidden, dims.hidden)?,
            head: Linear::bind(&store, "head", dims.hidden, 1)?,
        };
        Ok(ValueCritic { store, dims, layers })
    }

    /// Value nodes v_0..v_{T-1}; v_t sees the features and a_1..a_t.
    fn values_on(&self, g: &mut Graph, features: &[f64], tokens: &[TokenId]) -> Result<Vec<Var>> {
        if tokens.is_empty() {
            return Err(AdcError::Validation("value critic needs at least one token".into()));
        }
        if features.len() != self.dims.feature_dim {
            return Err(AdcError::shape(
                "value critic features",
                format!("length {}", self.dims.feature_dim),
                format!("length {}", features.len()),
            ));
        }
        if let Some(bad) = tokens.iter().find(|t| **t >= self.dims.vocab) {
            return Err(AdcError::Validation(format!("token id {bad} out of range")));
        }
        let x = g.constant(features.to_vec());
        let mut h = self.layers.proj.forward_on(g, &self.store, x)?;
        let mut out = Vec::with_capacity(tokens.len());
        for t in 0..tokens.len() {
            if t > 0 {
                let e = g.row(&self.store, self.layers.embed, tokens[t - 1])?;
                h = self.layers.gru.step_on(g, &self.store, e, h)?;
            }
            let v = self.layers.head.forward_on(g, &self.store, h)?;
            out.push(g.tanh(v));
        }
        Ok(out)
    }

    pub fn values(&self, features: &[f64], tokens: &[TokenId]) -> Result<Vec<f64>> {
        let mut g = Graph::new();
        let vs = self.values_on(&mut g, features, tokens)?;
        Ok(vs.iter().map(|v| g.scalar(*v)).collect())
    }

    /// Mean Huber loss of every step's value against the terminal reward;
    /// accumulates gradients.
    pub fn episode_loss(&mut self, features: &[f64], tokens: &[TokenId], reward: f64) -> Result<f64> {
        if !reward.is_finite() {
            return Err(AdcError::Numerics("reward".into()));
        }
        let mut g = Graph::new();
        let vs = self.values_on(&mut g, features, tokens)?;
        let w = 1.0 / vs.len() as f64;
        let mut terms = Vec::with_capacity(vs.len());
        for v in vs {
            terms.push((g.huber(v, reward)?, w));
        }
        let loss = g.weighted_sum(&terms)?;
        g.backward(loss, &mut self.store)?;
        Ok(g.scalar(loss))
    }

    pub fn update(
        &mut self,
        features: &[f64],
        tokens: &[TokenId],
        reward: f64,
        adam: &AdamConfig,
        epoch: usize,
    ) -> Result<f64> {
        self.store.zero_grad();
        let loss = self.episode_loss(features, tokens, reward)?;
        adam_step(&mut self.store, adam, epoch)?;
        Ok(loss)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::rng::RngState;

    fn critic(seed: u64) -> ValueCritic {
        let dims = ModelDims { feature_dim: 3, hidden: 5, vocab: 8 };
        ValueCritic::new(dims, &mut RngState::new(seed).rng()).unwrap()
    }

    #[test]
    fn zero_params_give_zero_values() {
        let mut c = critic(0);
        c.store.fill(0.0);
        assert_eq!(c.values(&[1.0, 2.0, 3.0], &[4, 5, 2]).unwrap(), vec![0.0; 3]);
    }

    #[test]
    fn one_value_per_token_in_range() {
        let mut c = critic(1);
        for p in c.store.iter_mut() {
            p.values.iter_mut().for_each(|v| *v *= 40.0);
        }
        let vs = c.values(&[3.0, -2.0, 5.0], &[4, 5, 6, 7, 2]).unwrap();
        assert_eq!(vs.len(), 5);
        assert!(vs.iter().all(|v| (-1.0..=1.0).contains(v)));
    }

    #[test]
    fn invalid_inputs() {
        let c = critic(2);
        assert!(c.values(&[0.0; 3], &[]).is_err());
        assert!(matches!(c.values(&[0.0; 3], &[4, 80]), Err(AdcError::Validation(_))));
        assert!(matches!(c.values(&[0.0; 2], &[4]), Err(AdcError::Shape { .. })));
    }

    #[test]
    fn regression_to_fixed_reward() {
        for reward in [-0.8, 0.1, 0.95] {
            let mut c = critic(3);
            let cfg = AdamConfig::with_lr(1e-2);
            let (f, toks) = ([0.5, -0.3, 0.8], [4, 6, 5, 2]);
            for _ in 0..500 {
                c.update(&f, &toks, reward, &cfg, 0).unwrap();
            }
            let vs = c.values(&f, &toks).unwrap();
            assert!(vs.iter().all(|v| (v - reward).abs() < 0.05), "{reward}: {vs:?}");
        }
    }
}
