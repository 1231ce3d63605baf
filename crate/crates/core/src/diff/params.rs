//! Named parameter storage and binding onto a tape.

use std::collections::BTreeMap;

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::tape::{Tape, Var};
use super::tensor::Tensor2;
use crate::error::{Error, Result};

/// Ordered map from parameter name to tensor.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(transparent)]
pub struct ParamSet {
    entries: BTreeMap<String, Tensor2>,
}

impl ParamSet {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, value: Tensor2) {
        self.entries.insert(name.into(), value);
    }

    pub fn get(&self, name: &str) -> Option<&Tensor2> {
        self.entries.get(name)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor2> {
        self.entries.get_mut(name)
    }

    /// Like [`ParamSet::get`] but reports a missing name as an error.
    pub fn require(&self, name: &str) -> Result<&Tensor2> {
        self.get(name)
            .ok_or_else(|| Error::InvalidInput(format!("missing parameter {name}")))
    }

    pub fn contains(&self, name: &str) -> bool {
        self.entries.contains_key(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Tensor2)> {
        self.entries.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&String, &mut Tensor2)> {
        self.entries.iter_mut()
    }

    pub fn names(&self) -> impl Iterator<Item = &String> {
        self.entries.keys()
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Total number of scalars across all tensors.
    pub fn num_scalars(&self) -> usize {
        self.entries.values().map(Tensor2::len).sum()
    }

    pub fn is_finite(&self) -> bool {
        self.entries.values().all(Tensor2::is_finite)
    }

    /// Records every parameter as a tape leaf.
    pub fn bind(&self, tape: &mut Tape) -> Bound {
        let vars = self
            .entries
            .iter()
            .map(|(k, v)| (k.clone(), tape.leaf(v.clone())))
            .collect();
        Bound { vars }
    }

    /// Adds `dims.len() - 1` linear layers named `{prefix}.{i}.weight` / `.bias`,
    /// uniformly initialised in `±1/sqrt(fan_in)`.
    pub fn init_mlp(&mut self, prefix: &str, dims: &[usize], rng: &mut impl Rng) {
        for (i, w) in dims.windows(2).enumerate() {
            let (fan_in, fan_out) = (w[0], w[1]);
            self.insert(format!("{prefix}.{i}.weight"), uniform(fan_in, fan_out, fan_in, rng));
            self.insert(format!("{prefix}.{i}.bias"), uniform(1, fan_out, fan_in, rng));
        }
    }

    /// Gathers the layers of an MLP stored under `prefix`.
    pub fn mlp(&self, prefix: &str) -> Result<MlpParams> {
        let mut layers = Vec::new();
        while let Some(w) = self.get(&format!("{prefix}.{}.weight", layers.len())) {
            let b = self.require(&format!("{prefix}.{}.bias", layers.len()))?;
            layers.push((w.clone(), b.clone()));
        }
        if layers.is_empty() {
            return Err(Error::InvalidInput(format!("no MLP under {prefix}")));
        }
        MlpParams::new(layers, Activation::Relu)
    }

    pub fn set_mlp(&mut self, prefix: &str, mlp: &MlpParams) {
        self.entries
            .retain(|k, _| !(k.starts_with(prefix) && k[prefix.len()..].starts_with('.')));
        for (i, (w, b)) in mlp.layers.iter().enumerate() {
            self.insert(format!("{prefix}.{i}.weight"), w.clone());
            self.insert(format!("{prefix}.{i}.bias"), b.clone());
        }
    }
}

pub fn uniform(rows: usize, cols: usize, fan_in: usize, rng: &mut impl Rng) -> Tensor2 {
    let bound = 1.0 / (fan_in.max(1) as f64).sqrt();
    let data = (0..rows * cols).map(|_| rng.random_range(-bound..=bound)).collect();
    Tensor2::from_vec(rows, cols, data).expect("uniform shape")
}

/// Parameters recorded on a tape, addressable by name.
#[derive(Debug, Clone)]
pub struct Bound {
    vars: BTreeMap<String, Var>,
}

impl Bound {
    /// Panics on unknown names: parameter names are fixed by the model layout.
    pub fn get(&self, name: &str) -> Var {
        match self.vars.get(name) {
            Some(v) => *v,
            None => panic!("unbound parameter {name}"),
        }
    }

    pub fn try_get(&self, name: &str) -> Option<Var> {
        self.vars.get(name).copied()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Var)> {
        self.vars.iter()
    }

    /// Linear layers stored under `prefix`, in order.
    pub fn mlp(&self, prefix: &str) -> Vec<(Var, Var)> {
        let mut out = Vec::new();
        while let Some(w) = self.try_get(&format!("{prefix}.{}.weight", out.len())) {
            out.push((w, self.get(&format!("{prefix}.{}.bias", out.len()))));
        }
        out
    }
}

/// Activation applied after every hidden layer.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    Relu,
    Identity,
}

/// Weights `in x out` and bias `1 x out` per layer.
#[derive(Debug, Clone, PartialEq)]
pub struct MlpParams {
    pub layers: Vec<(Tensor2, Tensor2)>,
    pub activation: Activation,
}

impl MlpParams {
    pub fn new(layers: Vec<(Tensor2, Tensor2)>, activation: Activation) -> Result<Self> {
        for (i, (w, b)) in layers.iter().enumerate() {
            if b.shape() != (1, w.cols()) {
                return Err(Error::Shape(format!("layer {i} bias {:?} vs weight {:?}", b.shape(), w.shape())));
            }
            if i > 0 && layers[i - 1].0.cols() != w.rows() {
                return Err(Error::Shape(format!("layer {i} input {} vs previous output {}", w.rows(), layers[i - 1].0.cols())));
            }
        }
        Ok(Self { layers, activation })
    }

    pub fn input_dim(&self) -> usize {
        self.layers[0].0.rows()
    }

    pub fn output_dim(&self) -> usize {
        self.layers.last().map(|l| l.0.cols()).unwrap_or(0)
    }
}

/// Evaluates the MLP on every row of `x`.
pub fn mlp_forward(p: &MlpParams, x: &Tensor2) -> Result<Tensor2> {
    if p.layers.is_empty() || x.cols() != p.input_dim() {
        return Err(Error::Shape(format!(
            "MLP input has {} columns, expected {}",
            x.cols(),
            p.layers.first().map(|l| l.0.rows()).unwrap_or(0)
        )));
    }
    let mut tape = Tape::new();
    let xv = tape.leaf(x.clone());
    let layers: Vec<(Var, Var)> = p
        .layers
        .iter()
        .map(|(w, b)| (tape.leaf(w.clone()), tape.leaf(b.clone())))
        .collect();
    let out = mlp_on_tape(&mut tape, &layers, p.activation, xv);
    Ok(tape.value(out).clone())
}

/// Records an MLP. The activation follows every layer except the last.
pub fn mlp_on_tape(tape: &mut Tape, layers: &[(Var, Var)], act: Activation, x: Var) -> Var {
    let mut h = x;
    for (i, &(w, b)) in layers.iter().enumerate() {
        h = tape.linear(h, w, b);
        if i + 1 < layers.len() && act == Activation::Relu {
            h = tape.relu(h);
        }
    }
    h
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn mlp(layers: Vec<(Tensor2, Tensor2)>) -> MlpParams {
        MlpParams::new(layers, Activation::Relu).unwrap()
    }

    #[test]
    fn zero_weights_give_bias() {
        let p = mlp(vec![(Tensor2::zeros(3, 2), Tensor2::row_vector(&[0.5, -1.5]))]);
        let x = Tensor2::from_rows(&[[1.0, 2.0, 3.0], [-4.0, 0.0, 9.0]], 3).unwrap();
        let y = mlp_forward(&p, &x).unwrap();
        assert_eq!(y.data(), &[0.5, -1.5, 0.5, -1.5]);
    }

    #[test]
    fn identity_layer() {
        let p = mlp(vec![(Tensor2::identity(3), Tensor2::zeros(1, 3))]);
        let x = Tensor2::from_rows(&[[1.0, -2.0, 3.0]], 3).unwrap();
        assert_eq!(mlp_forward(&p, &x).unwrap(), x);
    }

    #[test]
    fn hidden_layer_matches_scalar_loops() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let mut ps = ParamSet::new();
        ps.init_mlp("m", &[4, 5, 3], &mut rng);
        let p = ps.mlp("m").unwrap();
        let x = uniform(6, 4, 1, &mut rng);
        let y = mlp_forward(&p, &x).unwrap();
        let (w0, b0) = &p.layers[0];
        let (w1, b1) = &p.layers[1];
        for r in 0..6 {
            let mut h = [0.0; 5];
            for (j, hj) in h.iter_mut().enumerate() {
                let mut s = b0.get(0, j);
                for i in 0..4 {
                    s += x.get(r, i) * w0.get(i, j);
                }
                *hj = if s > 0.0 { s } else { 0.0 };
            }
            for k in 0..3 {
                let mut s = b1.get(0, k);
                for (j, hj) in h.iter().enumerate() {
                    s += hj * w1.get(j, k);
                }
                assert!((y.get(r, k) - s).abs() < 1e-13);
            }
        }
    }

    #[test]
    fn shape_mismatch_is_an_error() {
        let p = mlp(vec![(Tensor2::identity(3), Tensor2::zeros(1, 3))]);
        assert!(mlp_forward(&p, &Tensor2::zeros(1, 2)).is_err());
        assert!(MlpParams::new(vec![(Tensor2::zeros(3, 2), Tensor2::zeros(1, 3))], Activation::Relu).is_err());
    }

    #[test]
    fn init_is_bounded_and_seeded() {
        let mut a = ParamSet::new();
        a.init_mlp("m", &[16, 8], &mut ChaCha8Rng::seed_from_u64(3));
        let mut b = ParamSet::new();
        b.init_mlp("m", &[16, 8], &mut ChaCha8Rng::seed_from_u64(3));
        assert_eq!(a, b);
        assert!(a.get("m.0.weight").unwrap().max_abs() <= 0.25);
    }
}
