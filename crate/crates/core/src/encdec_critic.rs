//! Encoder-decoder critic `D(S)`.
//!
//! The encoder GRU starts from the projected image feature `f` and reads the
//! sentence. Two ReLU maps turn its final output and hidden state into the
//! decoder's first input and initial state; the decoder then runs one step
//! per sentence token, feeding back its own (feature-space) output. The
//! mean decoder output is the reconstruction of `f`, scored against it by
//! MSE for training and by cosine similarity as the critic's accuracy.

use std::fmt::Write as _;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::actor::ModelDims;
use crate::error::{AdcError, Result};
use crate::nn::layers::{GruCell, Linear, Norm};
use crate::nn::ops::{cosine, norm};
use crate::nn::optim::{adam_step, AdamConfig};
use crate::nn::params::{Init, ParamId, ParamStore};
use crate::nn::tape::{Graph, Var};
use crate::text::TokenId;

#[derive(Debug, Clone, Copy)]
struct EncDecLayers {
    proj: Linear,
    proj_norm: Norm,
    embed: ParamId,
    encoder: GruCell,
    decoder: GruCell,
    psi1: Linear,
    psi2: Linear,
    dec_out: Linear,
}

#[derive(Debug, Clone)]
pub struct EncDecCritic {
    pub store: ParamStore,
    pub dims: ModelDims,
    layers: EncDecLayers,
}

impl EncDecCritic {
    pub fn new<R: Rng + ?Sized>(dims: ModelDims, rng: &mut R) -> Result<Self> {
        let mut store = ParamStore::new();
        let h = dims.hidden;
        let layers = EncDecLayers {
            proj: Linear::register(&mut store, "proj", dims.feature_dim, h, rng)?,
            proj_norm: Norm::register(&mut store, "proj_norm", h, rng)?,
            embed: store.add("embed", dims.vocab, h, Init::Uniform { fan_in: h }, rng)?,
            encoder: GruCell::register(&mut store, "enc", h, h, rng)?,
            decoder: GruCell::register(&mut store, "dec", h, h, rng)?,
            psi1: Linear::register(&mut store, "psi1", h, h, rng)?,
            psi2: Linear::register(&mut store, "psi2", h, h, rng)?,
            dec_out: Linear::register(&mut store, "dec_out", h, h, rng)?,
        };
        Ok(EncDecCritic { store, dims, layers })
    }

    pub fn from_store(store: ParamStore) -> Result<Self> {
        let proj = store.get(store.require("proj.w")?);
        let embed = store.get(store.require("embed")?);
        let dims = ModelDims {
            feature_dim: proj.cols,
            hidden: proj.rows,
            vocab: embed.rows,
        };
        let h = dims.hidden;
        let layers = EncDecLayers {
            proj: Linear::bind(&store, "proj", dims.feature_dim, h)?,
            proj_norm: Norm::bind(&store, "proj_norm", h)?,
            embed: store.expect("embed", dims.vocab, h)?,
            encoder: GruCell::bind(&store, "enc", h, h)?,
            decoder: GruCell::bind(&store, "dec", h, h)?,
            psi1: Linear::bind(&store, "psi1", h, h)?,
            psi2: Linear::bind(&store, "psi2", h, h)?,
            dec_out: Linear::bind(&store, "dec_out", h, h)?,
        };
        Ok(EncDecCritic { store, dims, layers })
    }

    /// Returns (reconstruction, projected feature f).
    fn reconstruct_on(&self, g: &mut Graph, features: &[f64], sentence: &[TokenId]) -> Result<(Var, Var)> {
        if sentence.is_empty() {
            return Err(AdcError::Validation("cannot reconstruct from an empty sentence".into()));
        }
        if features.len() != self.dims.feature_dim {
            return Err(AdcError::shape(
                "encoder-decoder critic features",
                format!("length {}", self.dims.feature_dim),
                format!("length {}", features.len()),
            ));
        }
        let l = &self.layers;
        let x = g.constant(features.to_vec());
        let p = l.proj.forward_on(g, &self.store, x)?;
        let p = l.proj_norm.forward_on(g, &self.store, p)?;
        let f = g.relu(p);

        let mut h = f;
        for &tok in sentence {
            let eta = g.row(&self.store, l.embed, tok)?;
            h = l.encoder.step_on(g, &self.store, eta, h)?;
        }
        // GRU output and hidden state coincide
        let h0 = l.psi2.forward_on(g, &self.store, h)?;
        let mut h_dec = g.relu(h0);
        let i1 = l.psi1.forward_on(g, &self.store, h)?;
        let mut input = g.relu(i1);

        let mut outputs = Vec::with_capacity(sentence.len());
        for _ in 0..sentence.len() {
            h_dec = l.decoder.step_on(g, &self.store, input, h_dec)?;
            let o = l.dec_out.forward_on(g, &self.store, h_dec)?;
            outputs.push(o);
            input = o;
        }
        let recon = g.mean(&outputs)?;
        Ok((recon, f))
    }

    /// Projected feature vector `f` the reconstruction is compared against.
    pub fn feature_target(&self, features: &[f64]) -> Result<Vec<f64>> {
        let mut g = Graph::new();
        let (_, f) = self.reconstruct_on(&mut g, features, &[crate::text::END])?;
        Ok(g.value(f).to_vec())
    }

    /// Mean decoder output over the `|S|` decoding steps.
    pub fn reconstruct(&self, features: &[f64], sentence: &[TokenId]) -> Result<Vec<f64>> {
        let mut g = Graph::new();
        let (r, _) = self.reconstruct_on(&mut g, features, sentence)?;
        Ok(g.value(r).to_vec())
    }

    /// MSE between the reconstruction and `f`; accumulates gradients. The
    /// target `f` is held constant, so the feature projection learns only
    /// through the encoder's initial state.
    pub fn recon_loss(&mut self, features: &[f64], sentence: &[TokenId]) -> Result<f64> {
        let mut g = Graph::new();
        let (r, f) = self.reconstruct_on(&mut g, features, sentence)?;
        let target = g.value(f).to_vec();
        let loss = g.mse(r, &target)?;
        g.backward(loss, &mut self.store)?;
        Ok(g.scalar(loss))
    }

    /// [`Self::recon_loss`] against an explicit target; the loss a finite
    /// difference sees once `f` is frozen.
    pub fn recon_loss_against(&mut self, features: &[f64], sentence: &[TokenId], target: &[f64]) -> Result<f64> {
        let mut g = Graph::new();
        let (r, _) = self.reconstruct_on(&mut g, features, sentence)?;
        let loss = g.mse(r, target)?;
        g.backward(loss, &mut self.store)?;
        Ok(g.scalar(loss))
    }

    pub fn update(
        &mut self,
        features: &[f64],
        sentence: &[TokenId],
        adam: &AdamConfig,
        epoch: usize,
    ) -> Result<f64> {
        self.store.zero_grad();
        let loss = self.recon_loss(features, sentence)?;
        adam_step(&mut self.store, adam, epoch)?;
        Ok(loss)
    }

    fn recon_and_target(&self, features: &[f64], sentence: &[TokenId]) -> Result<(Vec<f64>, Vec<f64>)> {
        let mut g = Graph::new();
        let (r, f) = self.reconstruct_on(&mut g, features, sentence)?;
        let f = g.value(f).to_vec();
        if norm(&f) < 1e-12 {
            return Err(AdcError::Validation("projected feature vector is zero".into()));
        }
        Ok((g.value(r).to_vec(), f))
    }

    /// Cosine between reconstruction and `f` (0 for a vanishing reconstruction).
    pub fn cosine_accuracy(&self, features: &[f64], sentence: &[TokenId]) -> Result<f64> {
        let (r, f) = self.recon_and_target(features, sentence)?;
        Ok(cosine(&r, &f))
    }

    pub fn probe(&self, features: &[f64], sentence: &[TokenId]) -> Result<ProbeRecord> {
        let (r, f) = self.recon_and_target(features, sentence)?;
        Ok(ProbeRecord::new(&r, &f))
    }
}

fn unit(v: &[f64]) -> Vec<f64> {
    let n = norm(v);
    if n < 1e-12 {
        vec![0.0; v.len()]
    } else {
        v.iter().map(|x| x / n).collect()
    }
}

/// Normalized reconstruction against normalized feature, per dimension.
#[derive(Debug, Clone, PartialEq)]
pub struct ProbeRecord {
    pub recon: Vec<f64>,
    pub feature: Vec<f64>,
    pub absdiff: Vec<f64>,
    pub cosine: f64,
}

impl ProbeRecord {
    pub fn new(recon: &[f64], feature: &[f64]) -> Self {
        let r = unit(recon);
        let f = unit(feature);
        let absdiff = r.iter().zip(&f).map(|(a, b)| (a - b).abs()).collect();
        ProbeRecord {
            cosine: cosine(recon, feature),
            recon: r,
            feature: f,
            absdiff,
        }
    }

    /// `dim,recon,feature,absdiff` rows followed by `cosine,<value>`.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("dim,recon,feature,absdiff\n");
        for i in 0..self.recon.len() {
            let _ = writeln!(out, "{i},{},{},{}", self.recon[i], self.feature[i], self.absdiff[i]);
        }
        let _ = writeln!(out, "cosine,{}", self.cosine);
        out
    }
}

/// Linear ramp of the weight on the ground-truth accuracy in the
/// dual-critic advantage.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DeltaSchedule {
    pub start: f64,
    pub end: f64,
    pub total_epochs: usize,
}

impl DeltaSchedule {
    pub fn new(total_epochs: usize) -> Self {
        DeltaSchedule {
            start: 0.01,
            end: 1.0,
            total_epochs,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.start > self.end || self.total_epochs < 1 {
            return Err(AdcError::Validation(format!("invalid delta schedule {self:?}")));
        }
        Ok(())
    }

    /// `start` at epoch 0, `end` at the final epoch `total_epochs - 1`.
    pub fn delta(&self, epoch: usize) -> f64 {
        if self.total_epochs <= 1 {
            return self.end;
        }
        let last = (self.total_epochs - 1) as f64;
        let e = (epoch as f64).min(last);
        // exact at both ends
        (self.start * (last - e) + self.end * e) / last
    }
}

/// `A_ed = A_gen - delta_t * A_orig`.
pub fn advantage_ed(a_gen: f64, a_orig: f64, schedule: &DeltaSchedule, epoch: usize) -> f64 {
    a_gen - schedule.delta(epoch) * a_orig
}
