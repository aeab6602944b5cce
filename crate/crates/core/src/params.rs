//! Named parameter tensors, the layers built on them, and the optimizer.

use std::collections::BTreeMap;

use ndarray::Array2;
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::autodiff::{Gradients, Graph, Var};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(usize);

/// Flat registry of trainable tensors keyed by a dotted module path.
#[derive(Clone, Debug, Default)]
pub struct ParamStore {
    names: Vec<String>,
    values: Vec<Array2<f64>>,
    grads: Vec<Array2<f64>>,
    decay: Vec<bool>,
}

/// Serialized form of one tensor.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TensorRecord {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<f64>,
}

impl TensorRecord {
    pub fn from_array(a: &Array2<f64>) -> Self {
        Self {
            rows: a.nrows(),
            cols: a.ncols(),
            data: a.iter().copied().collect(),
        }
    }

    pub fn to_array(&self) -> Option<Array2<f64>> {
        Array2::from_shape_vec((self.rows, self.cols), self.data.clone()).ok()
    }
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    /// Registers a tensor. `decay` marks it for decoupled weight decay.
    pub fn add(&mut self, name: impl Into<String>, value: Array2<f64>, decay: bool) -> ParamId {
        let name = name.into();
        assert!(
            !self.names.contains(&name),
            "duplicate parameter name {name}"
        );
        self.grads.push(Array2::zeros(value.dim()));
        self.values.push(value);
        self.names.push(name);
        self.decay.push(decay);
        ParamId(self.values.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.values.len()).map(ParamId)
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.names.iter().position(|n| n == name).map(ParamId)
    }

    pub fn value(&self, id: ParamId) -> &Array2<f64> {
        &self.values[id.0]
    }

    pub fn value_mut(&mut self, id: ParamId) -> &mut Array2<f64> {
        &mut self.values[id.0]
    }

    pub fn grad(&self, id: ParamId) -> &Array2<f64> {
        &self.grads[id.0]
    }

    pub fn decays(&self, id: ParamId) -> bool {
        self.decay[id.0]
    }

    pub fn num_scalars(&self) -> usize {
        self.values.iter().map(|v| v.len()).sum()
    }

    pub fn zero_grads(&mut self) {
        for g in &mut self.grads {
            g.fill(0.0);
        }
    }

    /// Adds the gradients of every parameter bound on `graph`.
    pub fn accumulate(&mut self, graph: &Graph, grads: &Gradients) {
        for (id, var) in graph.bound_params() {
            if let Some(g) = grads.get(var) {
                self.grads[id.0] += g;
            }
        }
    }

    pub fn scale_grads(&mut self, c: f64) {
        for g in &mut self.grads {
            g.mapv_inplace(|x| x * c);
        }
    }

    pub fn grad_norm(&self) -> f64 {
        self.grads
            .iter()
            .map(|g| g.iter().map(|x| x * x).sum::<f64>())
            .sum::<f64>()
            .sqrt()
    }

    pub fn to_records(&self) -> BTreeMap<String, TensorRecord> {
        self.names
            .iter()
            .zip(&self.values)
            .map(|(n, v)| (n.clone(), TensorRecord::from_array(v)))
            .collect()
    }

    /// Overwrites values from `records`; every registered name must be present
    /// with a matching shape.
    pub fn load_records(&mut self, records: &BTreeMap<String, TensorRecord>) -> Result<(), String> {
        for (i, name) in self.names.iter().enumerate() {
            let rec = records
                .get(name)
                .ok_or_else(|| format!("missing parameter {name}"))?;
            if (rec.rows, rec.cols) != self.values[i].dim() {
                return Err(format!(
                    "parameter {name}: expected shape {:?}, found ({}, {})",
                    self.values[i].dim(),
                    rec.rows,
                    rec.cols
                ));
            }
            self.values[i] = rec.to_array().ok_or_else(|| format!("parameter {name}: bad payload"))?;
        }
        if records.len() != self.names.len() {
            return Err(format!(
                "checkpoint has {} parameters, model expects {}",
                records.len(),
                self.names.len()
            ));
        }
        Ok(())
    }
}

pub fn xavier_uniform<R: Rng + ?Sized>(rows: usize, cols: usize, rng: &mut R) -> Array2<f64> {
    let a = (6.0 / (rows + cols) as f64).sqrt();
    Array2::from_shape_fn((rows, cols), |_| rng.random_range(-a..a))
}

pub fn normal<R: Rng + ?Sized>(rows: usize, cols: usize, std: f64, rng: &mut R) -> Array2<f64> {
    Array2::from_shape_fn((rows, cols), |_| {
        let z: f64 = StandardNormal.sample(rng);
        z * std
    })
}

/// Affine map `x · W + b`.
#[derive(Clone, Debug)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: ParamId,
}

impl Linear {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        input: usize,
        output: usize,
        rng: &mut R,
    ) -> Self {
        let weight = store.add(format!("{name}.weight"), xavier_uniform(input, output, rng), true);
        let bias = store.add(format!("{name}.bias"), Array2::zeros((1, output)), false);
        Self { weight, bias }
    }

    pub fn forward(&self, g: &mut Graph, store: &ParamStore, x: Var) -> Var {
        let w = g.param(store, self.weight);
        let b = g.param(store, self.bias);
        let xw = g.matmul(x, w);
        g.add_row(xw, b)
    }

    pub fn output_dim(&self, store: &ParamStore) -> usize {
        store.value(self.weight).ncols()
    }
}

/// Layer normalization with learned gain and shift.
#[derive(Clone, Debug)]
pub struct LayerNorm {
    pub gain: ParamId,
    pub shift: ParamId,
}

impl LayerNorm {
    pub fn new(store: &mut ParamStore, name: &str, dim: usize) -> Self {
        let gain = store.add(format!("{name}.gain"), Array2::ones((1, dim)), false);
        let shift = store.add(format!("{name}.shift"), Array2::zeros((1, dim)), false);
        Self { gain, shift }
    }

    pub fn forward(&self, g: &mut Graph, store: &ParamStore, x: Var) -> Var {
        let n = g.layer_norm(x);
        let gain = g.param(store, self.gain);
        let shift = g.param(store, self.shift);
        let scaled = g.mul_row(n, gain);
        g.add_row(scaled, shift)
    }
}

/// Stack of affine maps with ReLU between them (none after the last).
#[derive(Clone, Debug)]
pub struct Mlp {
    pub layers: Vec<Linear>,
}

impl Mlp {
    pub fn new<R: Rng + ?Sized>(store: &mut ParamStore, name: &str, dims: &[usize], rng: &mut R) -> Self {
        assert!(dims.len() >= 2, "an MLP needs input and output dims");
        let layers = dims
            .windows(2)
            .enumerate()
            .map(|(i, w)| Linear::new(store, &format!("{name}.{i}"), w[0], w[1], rng))
            .collect();
        Self { layers }
    }

    pub fn forward(&self, g: &mut Graph, store: &ParamStore, mut x: Var) -> Var {
        let last = self.layers.len() - 1;
        for (i, layer) in self.layers.iter().enumerate() {
            x = layer.forward(g, store, x);
            if i < last {
                x = g.relu(x);
            }
        }
        x
    }
}

/// Adaptive-moment optimizer with decoupled weight decay.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamW {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    pub step: u64,
    first: BTreeMap<String, TensorRecord>,
    second: BTreeMap<String, TensorRecord>,
}

impl AdamW {
    pub fn new(weight_decay: f64) -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay,
            step: 0,
            first: BTreeMap::new(),
            second: BTreeMap::new(),
        }
    }

    pub fn update(&mut self, store: &mut ParamStore, lr: f64) {
        self.step += 1;
        let t = self.step as i32;
        let c1 = 1.0 - self.beta1.powi(t);
        let c2 = 1.0 - self.beta2.powi(t);
        for i in 0..store.values.len() {
            let name = &store.names[i];
            let dim = store.values[i].dim();
            let zeros = || TensorRecord::from_array(&Array2::zeros(dim));
            let m = self.first.entry(name.clone()).or_insert_with(zeros);
            let v = self.second.entry(name.clone()).or_insert_with(zeros);
            let decay = if store.decay[i] { self.weight_decay } else { 0.0 };
            let grad = &store.grads[i];
            let value = &mut store.values[i];
            for (k, (p, gk)) in value.iter_mut().zip(grad.iter()).enumerate() {
                m.data[k] = self.beta1 * m.data[k] + (1.0 - self.beta1) * gk;
                v.data[k] = self.beta2 * v.data[k] + (1.0 - self.beta2) * gk * gk;
                let mh = m.data[k] / c1;
                let vh = v.data[k] / c2;
                *p -= lr * (mh / (vh.sqrt() + self.eps) + decay * *p);
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn records_round_trip() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut store = ParamStore::new();
        Linear::new(&mut store, "fc", 3, 4, &mut rng);
        let recs = store.to_records();
        let mut other = ParamStore::new();
        Linear::new(&mut other, "fc", 3, 4, &mut ChaCha8Rng::seed_from_u64(9));
        other.load_records(&recs).unwrap();
        assert_eq!(other.to_records(), recs);
    }

    #[test]
    fn load_rejects_shape_mismatch() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut store = ParamStore::new();
        Linear::new(&mut store, "fc", 3, 4, &mut rng);
        let mut other = ParamStore::new();
        Linear::new(&mut other, "fc", 2, 4, &mut rng);
        assert!(other.load_records(&store.to_records()).is_err());
    }

    #[test]
    fn adamw_minimizes_quadratic() {
        let mut store = ParamStore::new();
        let id = store.add("x", Array2::from_elem((1, 2), 3.0), false);
        let mut opt = AdamW::new(0.0);
        for _ in 0..2000 {
            store.zero_grads();
            let mut g = Graph::new();
            let x = g.param(&store, id);
            let sq = g.mul(x, x);
            let loss = g.sum_all(sq);
            let grads = g.backward(loss);
            store.accumulate(&g, &grads);
            opt.update(&mut store, 0.01);
        }
        assert!(store.value(id).iter().all(|v| v.abs() < 1e-2));
    }
}
