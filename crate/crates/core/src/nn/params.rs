//! Named trainable tensors with gradient accumulators and Adam moments.

use std::collections::HashMap;

use rand::Rng;

use crate::error::{AdcError, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub(crate) usize);

/// Row-major matrix of values with a same-shaped gradient buffer.
/// Vectors are stored as `n x 1` matrices.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamMatrix {
    pub name: String,
    pub rows: usize,
    pub cols: usize,
    pub values: Vec<f64>,
    pub grad: Vec<f64>,
}

impl ParamMatrix {
    pub fn zeros(name: impl Into<String>, rows: usize, cols: usize) -> Self {
        ParamMatrix {
            name: name.into(),
            rows,
            cols,
            values: vec![0.0; rows * cols],
            grad: vec![0.0; rows * cols],
        }
    }

    pub fn from_values(
        name: impl Into<String>,
        rows: usize,
        cols: usize,
        values: Vec<f64>,
    ) -> Result<Self> {
        let name = name.into();
        if values.len() != rows * cols {
            return Err(AdcError::shape(
                format!("parameter '{name}'"),
                format!("{rows}x{cols}"),
                format!("{} values", values.len()),
            ));
        }
        Ok(ParamMatrix {
            grad: vec![0.0; values.len()],
            name,
            rows,
            cols,
            values,
        })
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn row(&self, r: usize) -> &[f64] {
        &self.values[r * self.cols..(r + 1) * self.cols]
    }

    pub fn shape_str(&self) -> String {
        format!("{}x{}", self.rows, self.cols)
    }
}

#[derive(Debug, Clone, Copy)]
pub enum Init {
    Zeros,
    Ones,
    /// uniform(-a, a) with a = 1/sqrt(fan_in)
    Uniform { fan_in: usize },
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParamStore {
    params: Vec<ParamMatrix>,
    index: HashMap<String, usize>,
    pub(crate) adam_m: Vec<Vec<f64>>,
    pub(crate) adam_v: Vec<Vec<f64>>,
    pub(crate) step_count: u64,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, param: ParamMatrix) -> Result<ParamId> {
        if self.index.contains_key(&param.name) {
            return Err(AdcError::Validation(format!(
                "duplicate parameter name '{}'",
                param.name
            )));
        }
        let id = self.params.len();
        self.index.insert(param.name.clone(), id);
        self.adam_m.push(vec![0.0; param.len()]);
        self.adam_v.push(vec![0.0; param.len()]);
        self.params.push(param);
        Ok(ParamId(id))
    }

    pub fn add<R: Rng + ?Sized>(
        &mut self,
        name: &str,
        rows: usize,
        cols: usize,
        init: Init,
        rng: &mut R,
    ) -> Result<ParamId> {
        let n = rows * cols;
        let values = match init {
            Init::Zeros => vec![0.0; n],
            Init::Ones => vec![1.0; n],
            Init::Uniform { fan_in } => {
                let a = 1.0 / (fan_in.max(1) as f64).sqrt();
                (0..n).map(|_| rng.gen_range(-a..a)).collect()
            }
        };
        self.insert(ParamMatrix::from_values(name, rows, cols, values)?)
    }

    pub fn get(&self, id: ParamId) -> &ParamMatrix {
        &self.params[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut ParamMatrix {
        &mut self.params[id.0]
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.index.get(name).copied().map(ParamId)
    }

    pub fn require(&self, name: &str) -> Result<ParamId> {
        self.id(name)
            .ok_or_else(|| AdcError::Validation(format!("missing parameter '{name}'")))
    }

    /// Looks up `name` and checks its shape.
    pub fn expect(&self, name: &str, rows: usize, cols: usize) -> Result<ParamId> {
        let id = self
            .id(name)
            .ok_or_else(|| AdcError::Validation(format!("missing parameter '{name}'")))?;
        let p = self.get(id);
        if p.rows != rows || p.cols != cols {
            return Err(AdcError::shape(
                format!("parameter '{name}'"),
                format!("{rows}x{cols}"),
                p.shape_str(),
            ));
        }
        Ok(id)
    }

    pub fn iter(&self) -> impl Iterator<Item = &ParamMatrix> {
        self.params.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = &mut ParamMatrix> {
        self.params.iter_mut()
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn num_scalars(&self) -> usize {
        self.params.iter().map(|p| p.len()).sum()
    }

    pub fn step_count(&self) -> u64 {
        self.step_count
    }

    pub fn zero_grad(&mut self) {
        for p in &mut self.params {
            p.grad.iter_mut().for_each(|g| *g = 0.0);
        }
    }

    /// Overwrites every value; used to build the all-zero fixtures.
    pub fn fill(&mut self, value: f64) {
        for p in &mut self.params {
            p.values.iter_mut().for_each(|v| *v = value);
        }
    }

    pub fn moments(&self, id: ParamId) -> (&[f64], &[f64]) {
        (&self.adam_m[id.0], &self.adam_v[id.0])
    }

    pub(crate) fn set_optimizer_state(
        &mut self,
        m: Vec<Vec<f64>>,
        v: Vec<Vec<f64>>,
        step_count: u64,
    ) -> Result<()> {
        if m.len() != self.params.len() || v.len() != self.params.len() {
            return Err(AdcError::Checkpoint("moment count mismatch".into()));
        }
        for ((p, m), v) in self.params.iter().zip(&m).zip(&v) {
            if m.len() != p.len() || v.len() != p.len() {
                return Err(AdcError::Checkpoint(format!(
                    "moment shape mismatch for '{}'",
                    p.name
                )));
            }
        }
        self.adam_m = m;
        self.adam_v = v;
        self.step_count = step_count;
        Ok(())
    }

    pub(crate) fn split_mut(&mut self) -> (&mut [ParamMatrix], &mut [Vec<f64>], &mut [Vec<f64>]) {
        (&mut self.params, &mut self.adam_m, &mut self.adam_v)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    #[test]
    fn duplicate_names_rejected() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(0);
        let mut store = ParamStore::new();
        store.add("w", 2, 2, Init::Zeros, &mut rng).unwrap();
        assert!(store.add("w", 1, 1, Init::Zeros, &mut rng).is_err());
    }

    #[test]
    fn uniform_init_respects_fan_in_bound() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(3);
        let mut store = ParamStore::new();
        let id = store
            .add("w", 10, 16, Init::Uniform { fan_in: 16 }, &mut rng)
            .unwrap();
        assert!(store.get(id).values.iter().all(|v| v.abs() < 0.25));
        assert_eq!(store.moments(id).0.len(), 160);
    }

    #[test]
    fn expect_checks_shape() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(0);
        let mut store = ParamStore::new();
        store.add("b", 3, 1, Init::Ones, &mut rng).unwrap();
        assert!(store.expect("b", 3, 1).is_ok());
        assert!(matches!(
            store.expect("b", 4, 1),
            Err(AdcError::Shape { .. })
        ));
        assert!(store.expect("c", 3, 1).is_err());
    }
}
