//! Parameter storage and neural layer building blocks.
//!
//! Parameters live in a `ParamStore` keyed by dotted path; iteration order is
//! lexicographic, which the checkpoint format and optimizer state rely on.

use std::collections::BTreeMap;

use crate::error::{Error, Result};
use crate::graph::{Graph, Tensor, Var};
use crate::real::Real;
use crate::rng::SeededRng;

#[derive(Debug, Clone)]
pub struct Param<R> {
    pub tensor: Tensor<R>,
    pub trainable: bool,
}

#[derive(Debug, Clone)]
pub struct ParamStore<R> {
    map: BTreeMap<String, Param<R>>,
}

impl<R: Real> ParamStore<R> {
    pub fn new() -> Self {
        ParamStore {
            map: BTreeMap::new(),
        }
    }

    pub fn insert(&mut self, path: &str, tensor: Tensor<R>) {
        assert!(
            !self.map.contains_key(path),
            "duplicate parameter path {path}"
        );
        self.map.insert(
            path.to_string(),
            Param {
                tensor,
                trainable: true,
            },
        );
    }

    pub fn get(&self, path: &str) -> Option<&Param<R>> {
        self.map.get(path)
    }

    pub fn get_mut(&mut self, path: &str) -> Option<&mut Param<R>> {
        self.map.get_mut(path)
    }

    /// Lexicographic iteration.
    pub fn iter(&self) -> impl Iterator<Item = (&String, &Param<R>)> {
        self.map.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&String, &mut Param<R>)> {
        self.map.iter_mut()
    }

    pub fn len(&self) -> usize {
        self.map.len()
    }

    pub fn is_empty(&self) -> bool {
        self.map.is_empty()
    }

    pub fn num_scalars(&self) -> usize {
        self.map.values().map(|p| p.tensor.numel()).sum()
    }

    pub fn set_trainable_prefix(&mut self, prefix: &str, trainable: bool) {
        for (path, p) in self.map.iter_mut() {
            if path.starts_with(prefix) {
                p.trainable = trainable;
            }
        }
    }

    pub fn cast<S: Real>(&self) -> ParamStore<S> {
        ParamStore {
            map: self
                .map
                .iter()
                .map(|(k, p)| {
                    (
                        k.clone(),
                        Param {
                            tensor: p.tensor.cast::<S>(),
                            trainable: p.trainable,
                        },
                    )
                })
                .collect(),
        }
    }
}

impl<R: Real> Default for ParamStore<R> {
    fn default() -> Self {
        Self::new()
    }
}

/// Parameters registered on a graph for one forward/backward pass.
pub struct Bound {
    vars: BTreeMap<String, Var>,
}

impl Bound {
    pub fn bind<R: Real>(graph: &mut Graph<R>, params: &ParamStore<R>) -> Bound {
        let mut vars = BTreeMap::new();
        for (path, p) in params.iter() {
            let v = graph.leaf(p.tensor.clone(), true);
            vars.insert(path.clone(), v);
        }
        Bound { vars }
    }

    /// Build a binding from pre-registered graph variables, for callers that
    /// manage leaves themselves (e.g. gradient checking).
    pub fn from_vars(vars: BTreeMap<String, Var>) -> Bound {
        Bound { vars }
    }

    pub fn var(&self, path: &str) -> Result<Var> {
        self.vars
            .get(path)
            .copied()
            .ok_or_else(|| Error::State(format!("parameter {path} not registered")))
    }

    pub fn try_var(&self, path: &str) -> Option<Var> {
        self.vars.get(path).copied()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Var)> {
        self.vars.iter()
    }

    /// Pull gradients back out of the graph after `backward`.
    pub fn grads<R: Real>(&self, graph: &Graph<R>) -> BTreeMap<String, Tensor<R>> {
        let mut out = BTreeMap::new();
        for (path, &v) in &self.vars {
            if let Some(g) = graph.grad(v) {
                out.insert(
                    path.clone(),
                    Tensor {
                        shape: graph.shape(v).to_vec(),
                        data: g.to_vec(),
                    },
                );
            }
        }
        out
    }
}

// ---------------------------------------------------------------------------
// initialization

/// Kaiming-style uniform bound sqrt(6 / fan_in).
fn kaiming_bound(fan_in: usize) -> f64 {
    (6.0 / fan_in as f64).sqrt()
}

pub struct ParamInit<'a, R: Real> {
    pub store: &'a mut ParamStore<R>,
    pub rng: &'a mut SeededRng,
}

impl<'a, R: Real> ParamInit<'a, R> {
    pub fn new(store: &'a mut ParamStore<R>, rng: &'a mut SeededRng) -> Self {
        ParamInit { store, rng }
    }

    fn uniform_tensor(&mut self, shape: &[usize], bound: f64) -> Tensor<R> {
        let numel: usize = shape.iter().product();
        let data = (0..numel)
            .map(|_| R::from_f64(self.rng.uniform(-bound, bound)))
            .collect();
        Tensor {
            shape: shape.to_vec(),
            data,
        }
    }

    pub fn conv(&mut self, path: &str, cout: usize, cin: usize, k: usize, bias: bool) {
        let bound = kaiming_bound(cin * k * k);
        let w = self.uniform_tensor(&[cout, cin, k, k], bound);
        self.store.insert(&format!("{path}.weight"), w);
        if bias {
            self.store
                .insert(&format!("{path}.bias"), Tensor::zeros(&[cout]));
        }
    }

    /// Weight is [Cin, Cout]: y = x W + b.
    pub fn linear(&mut self, path: &str, cin: usize, cout: usize, bias: bool) {
        let bound = kaiming_bound(cin);
        let w = self.uniform_tensor(&[cin, cout], bound);
        self.store.insert(&format!("{path}.weight"), w);
        if bias {
            self.store
                .insert(&format!("{path}.bias"), Tensor::zeros(&[cout]));
        }
    }

    /// Per-channel affine for token maps: gamma/beta of shape [C].
    pub fn norm(&mut self, path: &str, c: usize) {
        self.store
            .insert(&format!("{path}.gamma"), Tensor::filled(&[c], R::ONE));
        self.store
            .insert(&format!("{path}.beta"), Tensor::zeros(&[c]));
    }

    /// Per-channel affine for image maps: gamma/beta of shape [C,1,1] so they
    /// broadcast over [B,C,H,W].
    pub fn norm_chw(&mut self, path: &str, c: usize) {
        self.store
            .insert(&format!("{path}.gamma"), Tensor::filled(&[c, 1, 1], R::ONE));
        self.store
            .insert(&format!("{path}.beta"), Tensor::zeros(&[c, 1, 1]));
    }

    /// Scalar gate, initialized to 1.0.
    pub fn gate(&mut self, path: &str) {
        self.store.insert(path, Tensor::filled(&[1], R::ONE));
    }
}

// ---------------------------------------------------------------------------
// layers

pub const LN_EPS: f64 = 1e-5;
pub const GN_EPS: f64 = 1e-5;

/// Largest power-of-two group count <= 8 that divides `c`.
pub fn norm_groups(c: usize) -> usize {
    let mut g = 8;
    while c % g != 0 {
        g /= 2;
    }
    g
}

pub fn linear<R: Real>(
    graph: &mut Graph<R>,
    bound: &Bound,
    path: &str,
    x: Var,
) -> Result<Var> {
    let w = bound.var(&format!("{path}.weight"))?;
    let y = graph.matmul(x, w)?;
    match bound.try_var(&format!("{path}.bias")) {
        Some(b) => graph.add(y, b),
        None => Ok(y),
    }
}

pub fn conv<R: Real>(
    graph: &mut Graph<R>,
    bound: &Bound,
    path: &str,
    x: Var,
    stride: usize,
    padding: usize,
) -> Result<Var> {
    let w = bound.var(&format!("{path}.weight"))?;
    let b = bound.try_var(&format!("{path}.bias"));
    graph
        .conv2d(x, w, b, stride, padding)
        .map_err(|e| match e {
            Error::Dimension(msg) => Error::Dimension(format!("{path}: {msg}")),
            other => other,
        })
}

/// Per-token standardization over channels, then learnable affine.
pub fn layernorm_affine<R: Real>(
    graph: &mut Graph<R>,
    bound: &Bound,
    path: &str,
    x: Var,
) -> Result<Var> {
    let rank = graph.shape(x).len();
    let normed = graph.layernorm(x, rank - 1, LN_EPS)?;
    let gamma = bound.var(&format!("{path}.gamma"))?;
    let beta = bound.var(&format!("{path}.beta"))?;
    let scaled = graph.mul(normed, gamma)?;
    graph.add(scaled, beta)
}

/// GroupNorm with affine on [B,C,H,W].
pub fn groupnorm_affine<R: Real>(
    graph: &mut Graph<R>,
    bound: &Bound,
    path: &str,
    x: Var,
) -> Result<Var> {
    let c = graph.shape(x)[1];
    let normed = graph.groupnorm(x, norm_groups(c), GN_EPS)?;
    let gamma = bound.var(&format!("{path}.gamma"))?;
    let beta = bound.var(&format!("{path}.beta"))?;
    let scaled = graph.mul(normed, gamma)?;
    graph.add(scaled, beta)
}

/// Two 3x3 convs with GroupNorm, plus identity or projection shortcut.
pub fn residual_basic_block<R: Real>(
    graph: &mut Graph<R>,
    bound: &Bound,
    path: &str,
    x: Var,
    stride: usize,
) -> Result<Var> {
    let h = conv(graph, bound, &format!("{path}.conv1"), x, stride, 1)?;
    let h = groupnorm_affine(graph, bound, &format!("{path}.norm1"), h)?;
    let h = graph.relu(h)?;
    let h = conv(graph, bound, &format!("{path}.conv2"), h, 1, 1)?;
    let h = groupnorm_affine(graph, bound, &format!("{path}.norm2"), h)?;
    let shortcut = if bound.try_var(&format!("{path}.shortcut.weight")).is_some() {
        let s = conv(graph, bound, &format!("{path}.shortcut"), x, stride, 0)?;
        groupnorm_affine(graph, bound, &format!("{path}.shortcut_norm"), s)?
    } else {
        x
    };
    let sum = graph.add(h, shortcut)?;
    graph.relu(sum)
}

/// Register the parameters of one residual basic block.
pub fn init_residual_basic_block<R: Real>(
    init: &mut ParamInit<'_, R>,
    path: &str,
    cin: usize,
    cout: usize,
    stride: usize,
) {
    init.conv(&format!("{path}.conv1"), cout, cin, 3, true);
    init.norm_chw(&format!("{path}.norm1"), cout);
    init.conv(&format!("{path}.conv2"), cout, cout, 3, true);
    init.norm_chw(&format!("{path}.norm2"), cout);
    if stride != 1 || cin != cout {
        init.conv(&format!("{path}.shortcut"), cout, cin, 1, false);
        init.norm_chw(&format!("{path}.shortcut_norm"), cout);
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn linear_hand_case() {
        let mut store: ParamStore<f64> = ParamStore::new();
        store.insert(
            "fc.weight",
            Tensor::new(vec![2, 1], vec![1.0, 1.0]).unwrap(),
        );
        store.insert("fc.bias", Tensor::new(vec![1], vec![0.5]).unwrap());
        let mut g = Graph::new();
        let bound = Bound::bind(&mut g, &store);
        let x = g.constant(Tensor::new(vec![1, 2], vec![1.0, 2.0]).unwrap());
        let y = linear(&mut g, &bound, "fc", x).unwrap();
        assert_eq!(g.value(y).data, vec![3.5]);
    }

    #[test]
    fn linear_identity() {
        let mut store: ParamStore<f64> = ParamStore::new();
        store.insert(
            "fc.weight",
            Tensor::new(vec![2, 2], vec![1.0, 0.0, 0.0, 1.0]).unwrap(),
        );
        let mut g = Graph::new();
        let bound = Bound::bind(&mut g, &store);
        let x = g.constant(Tensor::new(vec![3, 2], vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]).unwrap());
        let y = linear(&mut g, &bound, "fc", x).unwrap();
        assert_eq!(g.value(y).data, g.value(x).data);
    }

    #[test]
    fn linear_bias_grad_is_column_sum() {
        let mut store: ParamStore<f64> = ParamStore::new();
        store.insert(
            "fc.weight",
            Tensor::new(vec![2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap(),
        );
        store.insert("fc.bias", Tensor::zeros(&[2]));
        let mut g = Graph::new();
        let bound = Bound::bind(&mut g, &store);
        let x = g.constant(Tensor::new(vec![3, 2], vec![1.0; 6]).unwrap());
        let y = linear(&mut g, &bound, "fc", x).unwrap();
        let s = g.sum(y, None).unwrap();
        g.backward(s).unwrap();
        let grads = bound.grads(&g);
        // upstream grad is all-ones [3,2]; bias grad = column sums = [3,3]
        assert_eq!(grads["fc.bias"].data, vec![3.0, 3.0]);
    }

    #[test]
    fn layernorm_affine_reduces_to_plain() {
        let mut store: ParamStore<f64> = ParamStore::new();
        store.insert("ln.gamma", Tensor::filled(&[3], 1.0));
        store.insert("ln.beta", Tensor::zeros(&[3]));
        let mut g = Graph::new();
        let bound = Bound::bind(&mut g, &store);
        let x = g.constant(Tensor::new(vec![1, 3], vec![1.0, 2.0, 3.0]).unwrap());
        let y = layernorm_affine(&mut g, &bound, "ln", x).unwrap();
        let plain = g.layernorm(x, 1, LN_EPS).unwrap();
        assert_eq!(g.value(y).data, g.value(plain).data);
    }

    #[test]
    fn layernorm_affine_constant_token_gives_beta() {
        let mut store: ParamStore<f64> = ParamStore::new();
        store.insert("ln.gamma", Tensor::filled(&[2], 1.0));
        store.insert(
            "ln.beta",
            Tensor::new(vec![2], vec![0.25, -0.5]).unwrap(),
        );
        let mut g = Graph::new();
        let bound = Bound::bind(&mut g, &store);
        let x = g.constant(Tensor::filled(&[1, 2], 7.0));
        let y = layernorm_affine(&mut g, &bound, "ln", x).unwrap();
        assert_eq!(g.value(y).data, vec![0.25, -0.5]);
    }

    #[test]
    fn residual_block_shapes_and_zero_case() {
        let mut store: ParamStore<f64> = ParamStore::new();
        let mut rng = SeededRng::new(1);
        {
            let mut init = ParamInit::new(&mut store, &mut rng);
            init_residual_basic_block(&mut init, "blk", 4, 8, 2);
        }
        let mut g = Graph::new();
        let bound = Bound::bind(&mut g, &store);
        let x = g.constant(Tensor::zeros(&[1, 4, 8, 8]));
        let y = residual_basic_block(&mut g, &bound, "blk", x, 2).unwrap();
        assert_eq!(g.shape(y), &[1, 8, 4, 4]);
        assert!(g.value(y).data.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn init_is_seed_deterministic_and_bounded() {
        let make = |seed| {
            let mut store: ParamStore<f32> = ParamStore::new();
            let mut rng = SeededRng::new(seed);
            let mut init = ParamInit::new(&mut store, &mut rng);
            init.conv("c", 8, 4, 3, true);
            init.linear("l", 16, 8, true);
            init.norm("n", 8);
            init.gate("g.gamma");
            store
        };
        let a = make(5);
        let b = make(5);
        for ((pa, ta), (pb, tb)) in a.iter().zip(b.iter()) {
            assert_eq!(pa, pb);
            assert_eq!(ta.tensor.data, tb.tensor.data);
        }
        let bound = kaiming_bound(4 * 9) as f32;
        for &v in &a.get("c.weight").unwrap().tensor.data {
            assert!(v.abs() <= bound);
        }
        assert_eq!(a.get("g.gamma").unwrap().tensor.data, vec![1.0]);
        let c = make(6);
        assert_ne!(
            a.get("c.weight").unwrap().tensor.data,
            c.get("c.weight").unwrap().tensor.data
        );
    }

    #[test]
    fn norm_groups_divides() {
        assert_eq!(norm_groups(32), 8);
        assert_eq!(norm_groups(4), 4);
        assert_eq!(norm_groups(6), 2);
        assert_eq!(norm_groups(3), 1);
    }
}
