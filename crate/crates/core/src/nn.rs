//! Minimal f64 neural-network substrate: a named parameter store with
//! bit-exact JSON checkpoints, Adam and plain gradient-descent updates, dense
//! multi-layer perceptrons, a graph-convolution layer with gradients flowing
//! back into the adjacency itself, and a finite-difference gradient checker.

use std::collections::BTreeMap;
use std::path::Path;

use ndarray::{Array1, Array2};
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::{Error, Result};

pub fn relu(x: f64) -> f64 {
    x.max(0.0)
}

pub fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

/// Logit of `w` after clamping into `[1e-6, 1 - 1e-6]` so saturated weights
/// stay finite.
pub fn sigmoid_inverse(w: f64) -> f64 {
    let w = w.clamp(1e-6, 1.0 - 1e-6);
    (w / (1.0 - w)).ln()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Activation {
    None,
    Relu,
    Sigmoid,
}

impl Activation {
    fn apply(self, z: f64) -> f64 {
        match self {
            Activation::None => z,
            Activation::Relu => relu(z),
            Activation::Sigmoid => sigmoid(z),
        }
    }

    /// Derivative at pre-activation `z` with post-activation value `a`.
    fn derivative(self, z: f64, a: f64) -> f64 {
        match self {
            Activation::None => 1.0,
            Activation::Relu => {
                if z > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            Activation::Sigmoid => a * (1.0 - a),
        }
    }
}

/// A named tensor: row-major data plus shape.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Tensor {
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
}

impl Tensor {
    pub fn zeros(shape: &[usize]) -> Self {
        Tensor { shape: shape.to_vec(), data: vec![0.0; shape.iter().product()] }
    }

    pub fn from_matrix(m: &Array2<f64>) -> Self {
        Tensor { shape: vec![m.nrows(), m.ncols()], data: m.iter().copied().collect() }
    }

    pub fn as_matrix(&self) -> Result<Array2<f64>> {
        if self.shape.len() != 2 {
            return Err(Error::ShapeMismatch(format!("expected matrix, got shape {:?}", self.shape)));
        }
        Array2::from_shape_vec((self.shape[0], self.shape[1]), self.data.clone())
            .map_err(|e| Error::ShapeMismatch(e.to_string()))
    }

    pub fn as_vector(&self) -> Result<Array1<f64>> {
        if self.shape.len() != 1 {
            return Err(Error::ShapeMismatch(format!("expected vector, got shape {:?}", self.shape)));
        }
        Ok(Array1::from_vec(self.data.clone()))
    }
}

/// Flat keyed collection of all learnable tensors. BTreeMap keeps key order
/// stable so serialized checkpoints are byte-reproducible.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct ParamStore {
    pub params: BTreeMap<String, Tensor>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: &str, t: Tensor) {
        self.params.insert(name.to_string(), t);
    }

    pub fn get(&self, name: &str) -> Result<&Tensor> {
        self.params
            .get(name)
            .ok_or_else(|| Error::InvalidArgument(format!("missing parameter {name:?}")))
    }

    pub fn get_mut(&mut self, name: &str) -> Result<&mut Tensor> {
        self.params
            .get_mut(name)
            .ok_or_else(|| Error::InvalidArgument(format!("missing parameter {name:?}")))
    }

    pub fn matrix(&self, name: &str) -> Result<Array2<f64>> {
        self.get(name)?.as_matrix()
    }

    pub fn num_scalars(&self) -> usize {
        self.params.values().map(|t| t.data.len()).sum()
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("param store serializes")
    }

    pub fn from_json(s: &str) -> Result<Self> {
        Ok(serde_json::from_str(s)?)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_json())?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_json(&std::fs::read_to_string(path)?)
    }
}

/// Gradient accumulator keyed like the parameter store.
#[derive(Debug, Clone, Default)]
pub struct Grads {
    pub grads: BTreeMap<String, Vec<f64>>,
}

impl Grads {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn accumulate(&mut self, name: &str, g: &[f64]) {
        let slot = self.grads.entry(name.to_string()).or_insert_with(|| vec![0.0; g.len()]);
        assert_eq!(slot.len(), g.len(), "gradient length mismatch for {name}");
        for (s, v) in slot.iter_mut().zip(g) {
            *s += v;
        }
    }

    pub fn scale(&mut self, factor: f64) {
        for g in self.grads.values_mut() {
            for v in g.iter_mut() {
                *v *= factor;
            }
        }
    }

    pub fn get(&self, name: &str) -> Option<&[f64]> {
        self.grads.get(name).map(Vec::as_slice)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OptimizerKind {
    Adam,
    Sgd,
}

/// Gradient-descent state. Adam moments are allocated lazily per parameter.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Optimizer {
    pub kind: OptimizerKind,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    t: u64,
    m: BTreeMap<String, Vec<f64>>,
    v: BTreeMap<String, Vec<f64>>,
}

impl Optimizer {
    pub fn new(kind: OptimizerKind) -> Self {
        Optimizer {
            kind,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            t: 0,
            m: BTreeMap::new(),
            v: BTreeMap::new(),
        }
    }

    /// Apply one descent step to every parameter that has a gradient.
    pub fn step(&mut self, store: &mut ParamStore, grads: &Grads, lr: f64) {
        match self.kind {
            OptimizerKind::Sgd => {
                for (name, g) in &grads.grads {
                    if let Some(t) = store.params.get_mut(name) {
                        for (p, gv) in t.data.iter_mut().zip(g) {
                            *p -= lr * gv;
                        }
                    }
                }
            }
            OptimizerKind::Adam => {
                self.t += 1;
                let bc1 = 1.0 - self.beta1.powi(self.t as i32);
                let bc2 = 1.0 - self.beta2.powi(self.t as i32);
                for (name, g) in &grads.grads {
                    let Some(t) = store.params.get_mut(name) else { continue };
                    let m = self.m.entry(name.clone()).or_insert_with(|| vec![0.0; g.len()]);
                    let v = self.v.entry(name.clone()).or_insert_with(|| vec![0.0; g.len()]);
                    for i in 0..g.len() {
                        m[i] = self.beta1 * m[i] + (1.0 - self.beta1) * g[i];
                        v[i] = self.beta2 * v[i] + (1.0 - self.beta2) * g[i] * g[i];
                        let m_hat = m[i] / bc1;
                        let v_hat = v[i] / bc2;
                        t.data[i] -= lr * m_hat / (v_hat.sqrt() + self.eps);
                    }
                }
            }
        }
    }
}

/// Fully connected network: ReLU on hidden layers, configurable output
/// activation. Parameters live in the shared store as `{name}.w{l}` and
/// `{name}.b{l}`.
#[derive(Debug, Clone)]
pub struct Mlp {
    pub name: String,
    pub dims: Vec<usize>,
    pub output_activation: Activation,
}

#[derive(Debug, Clone)]
pub struct MlpCache {
    /// Layer inputs: activations[0] is the network input.
    activations: Vec<Array2<f64>>,
    pre_activations: Vec<Array2<f64>>,
}

impl Mlp {
    pub fn new(name: &str, dims: &[usize], output_activation: Activation) -> Self {
        assert!(dims.len() >= 2, "need at least input and output dims");
        Mlp { name: name.to_string(), dims: dims.to_vec(), output_activation }
    }

    fn weight_name(&self, l: usize) -> String {
        format!("{}.w{l}", self.name)
    }

    fn bias_name(&self, l: usize) -> String {
        format!("{}.b{l}", self.name)
    }

    /// He init for ReLU-fed layers, Xavier for the output layer; zero biases.
    pub fn init(&self, store: &mut ParamStore, rng: &mut impl Rng) {
        let last = self.dims.len() - 2;
        for l in 0..self.dims.len() - 1 {
            let (fan_in, fan_out) = (self.dims[l], self.dims[l + 1]);
            let w = if l < last {
                let std = (2.0 / fan_in as f64).sqrt();
                Array2::from_shape_fn((fan_in, fan_out), |_| {
                    std * rng.sample::<f64, _>(StandardNormal)
                })
            } else {
                let bound = (6.0 / (fan_in + fan_out) as f64).sqrt();
                Array2::from_shape_fn((fan_in, fan_out), |_| rng.gen_range(-bound..bound))
            };
            store.insert(&self.weight_name(l), Tensor::from_matrix(&w));
            store.insert(&self.bias_name(l), Tensor { shape: vec![fan_out], data: vec![0.0; fan_out] });
        }
    }

    /// Batched forward pass: `x` is (batch, dims[0]).
    pub fn forward(&self, store: &ParamStore, x: &Array2<f64>) -> Result<(Array2<f64>, MlpCache)> {
        if x.ncols() != self.dims[0] {
            return Err(Error::ShapeMismatch(format!(
                "{}: input has {} features, expected {}",
                self.name,
                x.ncols(),
                self.dims[0]
            )));
        }
        let layers = self.dims.len() - 1;
        let mut cache =
            MlpCache { activations: vec![x.clone()], pre_activations: Vec::with_capacity(layers) };
        let mut a = x.clone();
        for l in 0..layers {
            let w = store.matrix(&self.weight_name(l))?;
            let b = store.get(&self.bias_name(l))?.as_vector()?;
            let mut z = a.dot(&w);
            for mut row in z.rows_mut() {
                row += &b;
            }
            let act = if l == layers - 1 { self.output_activation } else { Activation::Relu };
            a = z.mapv(|v| act.apply(v));
            cache.pre_activations.push(z);
            cache.activations.push(a.clone());
        }
        Ok((a, cache))
    }

    /// Backprop `d_out` (gradient of the loss in the network output),
    /// accumulating parameter gradients and returning the gradient in the
    /// input batch.
    pub fn backward(
        &self,
        store: &ParamStore,
        cache: &MlpCache,
        d_out: &Array2<f64>,
        grads: &mut Grads,
    ) -> Result<Array2<f64>> {
        let layers = self.dims.len() - 1;
        let mut d_a = d_out.clone();
        for l in (0..layers).rev() {
            let act = if l == layers - 1 { self.output_activation } else { Activation::Relu };
            let z = &cache.pre_activations[l];
            let a_out = &cache.activations[l + 1];
            let mut d_z = d_a.clone();
            for ((dz, &zv), &av) in d_z.iter_mut().zip(z.iter()).zip(a_out.iter()) {
                *dz *= act.derivative(zv, av);
            }
            let a_in = &cache.activations[l];
            let d_w = a_in.t().dot(&d_z);
            let d_b = d_z.sum_axis(ndarray::Axis(0));
            grads.accumulate(&self.weight_name(l), &d_w.iter().copied().collect::<Vec<_>>());
            grads.accumulate(&self.bias_name(l), &d_b.iter().copied().collect::<Vec<_>>());
            let w = store.matrix(&self.weight_name(l))?;
            d_a = d_z.dot(&w.t());
        }
        Ok(d_a)
    }
}

/// Normalized adjacency `A = D^{-1/2} (G + I) D^{-1/2}` with
/// `D_ii = 1 + sum_j G_ij`.
fn normalized_adjacency(g: &Array2<f64>) -> (Array2<f64>, Vec<f64>) {
    let n = g.nrows();
    let deg: Vec<f64> = (0..n).map(|i| 1.0 + g.row(i).sum()).collect();
    let mut a = Array2::zeros((n, n));
    for i in 0..n {
        for j in 0..n {
            let num = g[[i, j]] + if i == j { 1.0 } else { 0.0 };
            a[[i, j]] = num / (deg[i] * deg[j]).sqrt();
        }
    }
    (a, deg)
}

/// Graph convolution `H' = act(A H Theta)` with a single weight tensor
/// `{name}.theta` in the store.
#[derive(Debug, Clone)]
pub struct Gcn {
    pub name: String,
    pub in_dim: usize,
    pub out_dim: usize,
    pub activation: Activation,
}

#[derive(Debug, Clone)]
pub struct GcnCache {
    a_hat: Array2<f64>,
    deg: Vec<f64>,
    h: Array2<f64>,
    z: Array2<f64>,
    out: Array2<f64>,
}

impl Gcn {
    pub fn new(name: &str, in_dim: usize, out_dim: usize, activation: Activation) -> Self {
        Gcn { name: name.to_string(), in_dim, out_dim, activation }
    }

    fn theta_name(&self) -> String {
        format!("{}.theta", self.name)
    }

    pub fn init(&self, store: &mut ParamStore, rng: &mut impl Rng) {
        let std = (2.0 / self.in_dim as f64).sqrt();
        let w = Array2::from_shape_fn((self.in_dim, self.out_dim), |_| {
            std * rng.sample::<f64, _>(StandardNormal)
        });
        store.insert(&self.theta_name(), Tensor::from_matrix(&w));
    }

    pub fn forward(
        &self,
        store: &ParamStore,
        g: &Array2<f64>,
        h: &Array2<f64>,
    ) -> Result<(Array2<f64>, GcnCache)> {
        if g.nrows() != g.ncols() || g.nrows() != h.nrows() || h.ncols() != self.in_dim {
            return Err(Error::ShapeMismatch(format!(
                "{}: G {}x{}, H {}x{}, in_dim {}",
                self.name,
                g.nrows(),
                g.ncols(),
                h.nrows(),
                h.ncols(),
                self.in_dim
            )));
        }
        let theta = store.matrix(&self.theta_name())?;
        let (a_hat, deg) = normalized_adjacency(g);
        let z = a_hat.dot(h).dot(&theta);
        let out = z.mapv(|v| self.activation.apply(v));
        Ok((out.clone(), GcnCache { a_hat, deg, h: h.clone(), z, out }))
    }

    /// Backprop through the layer, including the dependence of the degree
    /// normalization on `G`. Returns gradients in `G` and `H`; the theta
    /// gradient is accumulated into `grads`.
    pub fn backward(
        &self,
        store: &ParamStore,
        cache: &GcnCache,
        d_out: &Array2<f64>,
        grads: &mut Grads,
    ) -> Result<(Array2<f64>, Array2<f64>)> {
        let theta = store.matrix(&self.theta_name())?;
        let mut d_z = d_out.clone();
        for ((dz, &zv), &av) in d_z.iter_mut().zip(cache.z.iter()).zip(cache.out.iter()) {
            *dz *= self.activation.derivative(zv, av);
        }
        let ah = cache.a_hat.dot(&cache.h);
        let d_theta = ah.t().dot(&d_z);
        grads.accumulate(&self.theta_name(), &d_theta.iter().copied().collect::<Vec<_>>());
        let d_h = cache.a_hat.t().dot(&d_z).dot(&theta.t());

        // dA = dZ (H Theta)^T, then push through the degree normalization:
        // dG_kl = dA_kl / sqrt(d_k d_l)
        //         - (1 / 2 d_k) * (sum_n dA_kn A_kn + sum_m dA_mk A_mk)
        let ht = cache.h.dot(&theta);
        let d_a = d_z.dot(&ht.t());
        let n = d_a.nrows();
        let mut row_terms = vec![0.0; n];
        for k in 0..n {
            let mut s = 0.0;
            for j in 0..n {
                s += d_a[[k, j]] * cache.a_hat[[k, j]] + d_a[[j, k]] * cache.a_hat[[j, k]];
            }
            row_terms[k] = s / (2.0 * cache.deg[k]);
        }
        let mut d_g = Array2::zeros((n, n));
        for k in 0..n {
            for l in 0..n {
                d_g[[k, l]] = d_a[[k, l]] / (cache.deg[k] * cache.deg[l]).sqrt() - row_terms[k];
            }
        }
        Ok((d_g, d_h))
    }
}

/// Central-difference check of analytic parameter gradients. Returns the
/// largest discrepancy, normalized by `max(1, |numeric|)` per entry.
pub fn finite_diff_check(
    store: &ParamStore,
    grads: &Grads,
    loss: impl Fn(&ParamStore) -> f64,
    eps: f64,
) -> f64 {
    finite_diff_check_sampled(store, grads, loss, eps, usize::MAX, 0)
}

/// Like [`finite_diff_check`] but probing at most `max_per_param` randomly
/// chosen coordinates of each parameter, so large networks stay checkable.
pub fn finite_diff_check_sampled(
    store: &ParamStore,
    grads: &Grads,
    loss: impl Fn(&ParamStore) -> f64,
    eps: f64,
    max_per_param: usize,
    seed: u64,
) -> f64 {
    use rand_chacha::rand_core::SeedableRng;
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
    let mut worst: f64 = 0.0;
    let mut probe = store.clone();
    for (name, g) in &grads.grads {
        let indices: Vec<usize> = if g.len() <= max_per_param {
            (0..g.len()).collect()
        } else {
            (0..max_per_param).map(|_| rng.gen_range(0..g.len())).collect()
        };
        for i in indices {
            let orig = probe.params[name].data[i];
            probe.params.get_mut(name).unwrap().data[i] = orig + eps;
            let up = loss(&probe);
            probe.params.get_mut(name).unwrap().data[i] = orig - eps;
            let down = loss(&probe);
            probe.params.get_mut(name).unwrap().data[i] = orig;
            let numeric = (up - down) / (2.0 * eps);
            let err = (g[i] - numeric).abs() / numeric.abs().max(1.0);
            worst = worst.max(err);
        }
    }
    worst
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use proptest::prelude::*;
    use rand::Rng;
    use rand_chacha::rand_core::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn chacha(seed: u64) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(seed)
    }

    #[test]
    fn activation_basics() {
        assert_eq!(relu(-3.0), 0.0);
        assert_eq!(relu(2.5), 2.5);
        assert_relative_eq!(sigmoid(0.0), 0.5);
        assert_relative_eq!(sigmoid_inverse(0.5), 0.0);
        // Clamped extremes stay finite.
        assert!(sigmoid_inverse(0.0).is_finite());
        assert!(sigmoid_inverse(1.0).is_finite());
        assert_relative_eq!(sigmoid_inverse(0.0), sigmoid_inverse(1e-6));
    }

    proptest! {
        #[test]
        fn sigmoid_inverse_round_trips(x in -10.0f64..10.0) {
            let w = sigmoid(x);
            prop_assert!((sigmoid_inverse(w) - x).abs() < 1e-6);
        }

        #[test]
        fn sigmoid_in_open_unit_interval(x in -500.0f64..500.0) {
            let w = sigmoid(x);
            prop_assert!(w >= 0.0 && w <= 1.0);
        }
    }

    #[test]
    fn mlp_forward_hand_computed() {
        let mlp = Mlp::new("toy", &[2, 2, 1], Activation::None);
        let mut store = ParamStore::new();
        store.insert(
            "toy.w0",
            Tensor { shape: vec![2, 2], data: vec![1.0, -1.0, 0.5, 2.0] },
        );
        store.insert("toy.b0", Tensor { shape: vec![2], data: vec![0.0, 1.0] });
        store.insert("toy.w1", Tensor { shape: vec![2, 1], data: vec![1.0, 1.0] });
        store.insert("toy.b1", Tensor { shape: vec![1], data: vec![-0.5] });
        let x = Array2::from_shape_vec((1, 2), vec![1.0, 2.0]).unwrap();
        // z0 = [1*1+2*0.5, 1*(-1)+2*2+1] = [2, 4]; relu unchanged; out = 2+4-0.5.
        let (y, _) = mlp.forward(&store, &x).unwrap();
        assert_relative_eq!(y[[0, 0]], 5.5);
    }

    #[test]
    fn mlp_gradients_match_finite_differences() {
        for (seed, act) in
            [(1, Activation::None), (2, Activation::Relu), (3, Activation::Sigmoid)]
        {
            let mlp = Mlp::new("net", &[3, 5, 4, 2], act);
            let mut store = ParamStore::new();
            let mut rng = chacha(seed);
            mlp.init(&mut store, &mut rng);
            let x = Array2::from_shape_fn((4, 3), |_| rng.gen_range(-1.0..1.0));
            let (y, cache) = mlp.forward(&store, &x).unwrap();
            let d_out = Array2::from_shape_fn(y.dim(), |(i, j)| {
                2.0 * ((i * y.ncols() + j) as f64 + 1.0) * y[[i, j]]
            });
            // Matches the loss sum_i (i+1) y_i^2 flattened row-major.
            let loss = {
                let x = x.clone();
                let mlp = mlp.clone();
                move |s: &ParamStore| {
                    let (y, _) = mlp.forward(s, &x).unwrap();
                    y.iter().enumerate().map(|(i, v)| (i as f64 + 1.0) * v * v).sum()
                }
            };
            let mut grads = Grads::new();
            mlp.backward(&store, &cache, &d_out, &mut grads).unwrap();
            let worst = finite_diff_check(&store, &grads, loss, 1e-5);
            assert!(worst < 1e-6, "activation {act:?}: worst fd error {worst:.3e}");
        }
    }

    #[test]
    fn mlp_input_gradient_matches_finite_differences() {
        let mlp = Mlp::new("net", &[3, 6, 1], Activation::Sigmoid);
        let mut store = ParamStore::new();
        let mut rng = chacha(7);
        mlp.init(&mut store, &mut rng);
        let x = Array2::from_shape_fn((2, 3), |_| rng.gen_range(-1.0..1.0));
        let (y, cache) = mlp.forward(&store, &x).unwrap();
        let d_out = Array2::from_elem(y.dim(), 1.0);
        let mut grads = Grads::new();
        let d_x = mlp.backward(&store, &cache, &d_out, &mut grads).unwrap();
        let eps = 1e-6;
        for i in 0..2 {
            for j in 0..3 {
                let mut xp = x.clone();
                xp[[i, j]] += eps;
                let up: f64 = mlp.forward(&store, &xp).unwrap().0.sum();
                xp[[i, j]] -= 2.0 * eps;
                let down: f64 = mlp.forward(&store, &xp).unwrap().0.sum();
                let numeric = (up - down) / (2.0 * eps);
                assert_relative_eq!(d_x[[i, j]], numeric, epsilon = 1e-6);
            }
        }
    }

    #[test]
    fn gcn_gradients_match_finite_differences() {
        let gcn = Gcn::new("g0", 3, 2, Activation::Relu);
        let mut store = ParamStore::new();
        let mut rng = chacha(11);
        gcn.init(&mut store, &mut rng);
        let n = 4;
        let g = Array2::from_shape_fn((n, n), |(i, j)| {
            if i == j {
                0.0
            } else {
                0.2 + 0.6 * ((i * n + j) as f64 / (n * n) as f64)
            }
        });
        let h = Array2::from_shape_fn((n, 3), |_| rng.gen_range(-1.0..1.0));
        let (out, cache) = gcn.forward(&store, &g, &h).unwrap();
        let d_out = Array2::from_shape_fn(out.dim(), |(i, j)| ((i + 2 * j) as f64).cos());
        let mut grads = Grads::new();
        let (d_g, d_h) = gcn.backward(&store, &cache, &d_out, &mut grads).unwrap();

        let loss_of = |g: &Array2<f64>, h: &Array2<f64>, s: &ParamStore| -> f64 {
            let (out, _) = gcn.forward(s, g, h).unwrap();
            out.indexed_iter().map(|((i, j), v)| ((i + 2 * j) as f64).cos() * v).sum()
        };
        // Theta gradient.
        let worst = finite_diff_check(&store, &grads, |s| loss_of(&g, &h, s), 1e-6);
        assert!(worst < 1e-6, "theta fd error {worst:.3e}");
        // Adjacency and feature gradients.
        let eps = 1e-6;
        for i in 0..n {
            for j in 0..n {
                let mut gp = g.clone();
                gp[[i, j]] += eps;
                let up = loss_of(&gp, &h, &store);
                gp[[i, j]] -= 2.0 * eps;
                let down = loss_of(&gp, &h, &store);
                let numeric = (up - down) / (2.0 * eps);
                assert_relative_eq!(d_g[[i, j]], numeric, epsilon = 1e-5);
            }
        }
        for i in 0..n {
            for j in 0..3 {
                let mut hp = h.clone();
                hp[[i, j]] += eps;
                let up = loss_of(&g, &hp, &store);
                hp[[i, j]] -= 2.0 * eps;
                let down = loss_of(&g, &hp, &store);
                let numeric = (up - down) / (2.0 * eps);
                assert_relative_eq!(d_h[[i, j]], numeric, epsilon = 1e-5);
            }
        }
    }

    #[test]
    fn gcn_row_stochastic_identity_input() {
        // With G = 0, A = I and the layer reduces to H Theta.
        let gcn = Gcn::new("g", 2, 2, Activation::None);
        let mut store = ParamStore::new();
        store.insert("g.theta", Tensor { shape: vec![2, 2], data: vec![1.0, 0.0, 0.0, 1.0] });
        let g = Array2::zeros((3, 3));
        let h = Array2::from_shape_fn((3, 2), |(i, j)| (i * 2 + j) as f64);
        let (out, _) = gcn.forward(&store, &g, &h).unwrap();
        assert_eq!(out, h);
    }

    #[test]
    fn sgd_step_is_plain_descent() {
        let mut store = ParamStore::new();
        store.insert("p", Tensor { shape: vec![2], data: vec![1.0, -2.0] });
        let mut grads = Grads::new();
        grads.accumulate("p", &[0.5, -1.0]);
        let mut opt = Optimizer::new(OptimizerKind::Sgd);
        opt.step(&mut store, &grads, 0.1);
        let p = &store.params["p"].data;
        assert_relative_eq!(p[0], 0.95);
        assert_relative_eq!(p[1], -1.9);
    }

    #[test]
    fn adam_first_step_moves_by_learning_rate() {
        // With bias correction the first Adam step is lr * g/|g| up to eps.
        let mut store = ParamStore::new();
        store.insert("p", Tensor { shape: vec![2], data: vec![0.0, 0.0] });
        let mut grads = Grads::new();
        grads.accumulate("p", &[3.0, -0.001]);
        let mut opt = Optimizer::new(OptimizerKind::Adam);
        opt.step(&mut store, &grads, 0.01);
        let p = &store.params["p"].data;
        assert_relative_eq!(p[0], -0.01, epsilon = 1e-6);
        assert_relative_eq!(p[1], 0.01, epsilon = 1e-4);
    }

    #[test]
    fn adam_converges_on_quadratic() {
        let mut store = ParamStore::new();
        store.insert("p", Tensor { shape: vec![1], data: vec![5.0] });
        let mut opt = Optimizer::new(OptimizerKind::Adam);
        for _ in 0..2000 {
            let x = store.params["p"].data[0];
            let mut grads = Grads::new();
            grads.accumulate("p", &[2.0 * (x - 1.5)]);
            opt.step(&mut store, &grads, 0.05);
        }
        assert_relative_eq!(store.params["p"].data[0], 1.5, epsilon = 1e-3);
    }

    #[test]
    fn checkpoint_round_trip_is_bit_exact() {
        let mlp = Mlp::new("net", &[4, 8, 3], Activation::Sigmoid);
        let mut store = ParamStore::new();
        let mut rng = chacha(42);
        mlp.init(&mut store, &mut rng);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("ckpt.json");
        store.save(&path).unwrap();
        let loaded = ParamStore::load(&path).unwrap();
        assert_eq!(store.params.len(), loaded.params.len());
        for (name, t) in &store.params {
            let lt = &loaded.params[name];
            assert_eq!(t.shape, lt.shape);
            for (a, b) in t.data.iter().zip(&lt.data) {
                assert_eq!(a.to_bits(), b.to_bits(), "{name} differs");
            }
        }
        // Re-serialization of the loaded store is byte-identical.
        assert_eq!(store.to_json(), loaded.to_json());
    }

    #[test]
    fn init_shapes_and_bias_zero() {
        let mlp = Mlp::new("n", &[3, 7, 2], Activation::None);
        let mut store = ParamStore::new();
        mlp.init(&mut store, &mut chacha(1));
        assert_eq!(store.params["n.w0"].shape, vec![3, 7]);
        assert_eq!(store.params["n.b0"].shape, vec![7]);
        assert_eq!(store.params["n.w1"].shape, vec![7, 2]);
        assert!(store.params["n.b1"].data.iter().all(|&b| b == 0.0));
        assert_eq!(store.num_scalars(), 3 * 7 + 7 + 7 * 2 + 2);
    }

    #[test]
    fn grads_accumulate_and_scale() {
        let mut g = Grads::new();
        g.accumulate("a", &[1.0, 2.0]);
        g.accumulate("a", &[0.5, -1.0]);
        g.scale(2.0);
        assert_eq!(g.get("a").unwrap(), &[3.0, 2.0]);
        assert!(g.get("b").is_none());
    }
}
