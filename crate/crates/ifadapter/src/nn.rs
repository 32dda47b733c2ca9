//! Neural-net building blocks on top of the tensor engine: a named parameter
//! store with freeze flags, scaled-dot-product attention with additive masks,
//! Fourier scalar embeddings, a small MLP, and decoupled-weight-decay Adam.

use std::cell::RefCell;
use std::collections::BTreeMap;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::tensor::{Tensor, NEG_INF};
use crate::{Error, Gradients, Result};

/// FNV-1a hash, used to derive stable per-parameter RNG seeds from names.
pub fn fnv1a(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf29ce484222325;
    for &b in bytes {
        h ^= b as u64;
        h = h.wrapping_mul(0x100000001b3);
    }
    h
}

pub(crate) fn param_seed(master: u64, name: &str) -> u64 {
    fnv1a(name.as_bytes()) ^ master.wrapping_mul(0x9e3779b97f4a7c15)
}

pub(crate) struct Param {
    shape: Vec<usize>,
    data: Vec<f64>,
    grad: Option<Vec<f64>>,
    frozen: bool,
    leaf: RefCell<Option<Tensor>>,
}

/// Named, ordered collection of trainable arrays. Tensors handed out by
/// [`ParamStore::leaf`] are cached so repeated uses within one forward pass
/// share a graph node; mutation invalidates the cache.
#[derive(Default)]
pub struct ParamStore {
    params: BTreeMap<String, Param>,
}

impl ParamStore {
    pub fn new() -> ParamStore {
        ParamStore::default()
    }

    pub fn insert(&mut self, name: &str, shape: &[usize], data: Vec<f64>) -> Result<()> {
        if shape.iter().product::<usize>() != data.len() {
            return Err(Error::Shape(format!(
                "param {name}: shape {shape:?} wants {} elements, got {}",
                shape.iter().product::<usize>(),
                data.len()
            )));
        }
        if self.params.contains_key(name) {
            return Err(Error::Usage(format!("param {name} already exists")));
        }
        self.params.insert(
            name.to_string(),
            Param {
                shape: shape.to_vec(),
                data,
                grad: None,
                frozen: false,
                leaf: RefCell::new(None),
            },
        );
        Ok(())
    }

    /// Insert a parameter drawn from N(0, std^2). The RNG stream is keyed by
    /// parameter name, so initialization does not depend on insertion order.
    pub fn add_gaussian(
        &mut self,
        name: &str,
        shape: &[usize],
        std: f64,
        master_seed: u64,
    ) -> Result<()> {
        let n: usize = shape.iter().product();
        let mut rng = ChaCha8Rng::seed_from_u64(param_seed(master_seed, name));
        let data = (0..n)
            .map(|_| {
                let z: f64 = StandardNormal.sample(&mut rng);
                z * std
            })
            .collect();
        self.insert(name, shape, data)
    }

    pub fn add_zeros(&mut self, name: &str, shape: &[usize]) -> Result<()> {
        let n: usize = shape.iter().product();
        self.insert(name, shape, vec![0.0; n])
    }

    pub fn contains(&self, name: &str) -> bool {
        self.params.contains_key(name)
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.params.keys().map(|s| s.as_str())
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    fn get(&self, name: &str) -> Result<&Param> {
        self.params
            .get(name)
            .ok_or_else(|| Error::Usage(format!("unknown param {name}")))
    }

    fn get_mut(&mut self, name: &str) -> Result<&mut Param> {
        self.params
            .get_mut(name)
            .ok_or_else(|| Error::Usage(format!("unknown param {name}")))
    }

    pub fn shape(&self, name: &str) -> Result<&[usize]> {
        Ok(&self.get(name)?.shape)
    }

    pub fn data(&self, name: &str) -> Result<&[f64]> {
        Ok(&self.get(name)?.data)
    }

    pub fn grad(&self, name: &str) -> Result<Option<&[f64]>> {
        Ok(self.get(name)?.grad.as_deref())
    }

    pub fn is_frozen(&self, name: &str) -> Result<bool> {
        Ok(self.get(name)?.frozen)
    }

    /// Graph leaf for a parameter; frozen parameters yield constants.
    pub fn leaf(&self, name: &str) -> Result<Tensor> {
        let p = self.get(name)?;
        let mut cache = p.leaf.borrow_mut();
        if let Some(t) = cache.as_ref() {
            return Ok(t.clone());
        }
        let t = if p.frozen {
            Tensor::constant(&p.shape, p.data.clone())?
        } else {
            Tensor::leaf(&p.shape, p.data.clone())?
        };
        *cache = Some(t.clone());
        Ok(t)
    }

    pub fn set_data(&mut self, name: &str, data: Vec<f64>) -> Result<()> {
        let p = self.get_mut(name)?;
        if data.len() != p.data.len() {
            return Err(Error::Shape(format!(
                "param {name}: set_data length {} vs {}",
                data.len(),
                p.data.len()
            )));
        }
        p.data = data;
        *p.leaf.borrow_mut() = None;
        Ok(())
    }

    pub fn set_frozen(&mut self, name: &str, frozen: bool) -> Result<()> {
        let p = self.get_mut(name)?;
        if p.frozen != frozen {
            p.frozen = frozen;
            *p.leaf.borrow_mut() = None;
        }
        Ok(())
    }

    /// Freeze every parameter whose name starts with `prefix`.
    pub fn freeze_prefix(&mut self, prefix: &str) {
        for (name, p) in self.params.iter_mut() {
            if name.starts_with(prefix) {
                p.frozen = true;
                *p.leaf.borrow_mut() = None;
            }
        }
    }

    /// Move gradients out of `grads` into the store's per-parameter slots,
    /// accumulating over multiple calls. Unfrozen parameters that received no
    /// gradient get zeros, so a later optimizer step sees every slot filled.
    pub fn absorb(&mut self, grads: &Gradients) {
        for (_, p) in self.params.iter_mut() {
            if p.frozen {
                continue;
            }
            if p.grad.is_none() {
                p.grad = Some(vec![0.0; p.data.len()]);
            }
            let leaf = p.leaf.borrow();
            if let Some(t) = leaf.as_ref() {
                if let Some(g) = grads.get_by_id(t.id()) {
                    let acc = p.grad.as_mut().unwrap();
                    for (a, b) in acc.iter_mut().zip(g) {
                        *a += b;
                    }
                }
            }
        }
    }

    pub fn zero_grads(&mut self) {
        for (_, p) in self.params.iter_mut() {
            p.grad = None;
        }
    }

    /// Drop cached leaves so the next forward pass starts a fresh graph.
    pub fn invalidate_leaves(&mut self) {
        for (_, p) in self.params.iter_mut() {
            *p.leaf.borrow_mut() = None;
        }
    }

    pub fn param_element_count(&self) -> usize {
        self.params.values().map(|p| p.data.len()).sum()
    }

    pub(crate) fn iter(&self) -> impl Iterator<Item = (&String, &Vec<usize>, &Vec<f64>, bool)> {
        self.params
            .iter()
            .map(|(n, p)| (n, &p.shape, &p.data, p.frozen))
    }

    /// Merge every parameter of `other` into this store. Name collisions are
    /// checkpoint errors (base and adapter namespaces must stay disjoint).
    pub fn merge(&mut self, other: ParamStore) -> Result<()> {
        for (name, p) in other.params {
            if self.params.contains_key(&name) {
                return Err(Error::Checkpoint(format!(
                    "param {name} present in both stores"
                )));
            }
            self.params.insert(name, p);
        }
        Ok(())
    }
}

/// Fourier feature embedding of a scalar: `[sin(2^j * 2pi * v) for j < bands]`
/// followed by `[cos(2^j * 2pi * v) for j < bands]`.
pub fn fourier_embed(v: f64, bands: usize) -> Vec<f64> {
    let mut out = Vec::with_capacity(2 * bands);
    for j in 0..bands {
        let freq = (1u64 << j) as f64;
        out.push((2.0 * std::f64::consts::PI * freq * v).sin());
    }
    for j in 0..bands {
        let freq = (1u64 << j) as f64;
        out.push((2.0 * std::f64::consts::PI * freq * v).cos());
    }
    out
}

/// Classic transformer sinusoid code: even slots are sines, odd slots are
/// cosines, frequencies falling geometrically from 1 to 1/10000.
pub fn sinusoid(pos: f64, d: usize) -> Vec<f64> {
    let mut out = vec![0.0; d];
    for i in 0..d / 2 {
        let freq = 10000f64.powf(-(2.0 * i as f64) / d as f64);
        let angle = pos * freq;
        out[2 * i] = angle.sin();
        out[2 * i + 1] = angle.cos();
    }
    out
}

/// Scaled dot-product attention with an optional additive mask.
///
/// `q` is `[n_q, d]`, `k` is `[n_k, d]`, `v` is `[n_k, d_v]`, `mask` is
/// `[n_q, n_k]` holding 0 for visible pairs and [`NEG_INF`] for masked ones.
/// A query row whose mask entries are all at the sentinel produces a zero
/// output row rather than a uniform average.
pub fn masked_attention(
    q: &Tensor,
    k: &Tensor,
    v: &Tensor,
    mask: Option<&Tensor>,
) -> Result<Tensor> {
    let qs = q.shape();
    let ks = k.shape();
    let vs = v.shape();
    if qs.len() != 2 || ks.len() != 2 || vs.len() != 2 {
        return Err(Error::Shape(format!(
            "masked_attention: non-2-d input ({qs:?}, {ks:?}, {vs:?})"
        )));
    }
    let (nq, d) = (qs[0], qs[1]);
    let (nk, dk) = (ks[0], ks[1]);
    if d != dk {
        return Err(Error::Shape(format!(
            "masked_attention: query dim {d} vs key dim {dk}"
        )));
    }
    if vs[0] != nk {
        return Err(Error::Shape(format!(
            "masked_attention: {nk} keys vs {} values",
            vs[0]
        )));
    }
    if d == 0 || nk == 0 {
        return Err(Error::Shape("masked_attention: empty key or feature dim".into()));
    }
    for (t, label) in [(q, "q"), (k, "k"), (v, "v")] {
        if !t.is_finite() {
            return Err(Error::Numeric(format!(
                "masked_attention: non-finite entries in {label}"
            )));
        }
    }
    let scale = 1.0 / (d as f64).sqrt();
    let mut logits = q.matmul(&k.transpose()?)?.scale(scale);
    let mut alive: Option<Vec<bool>> = None;
    if let Some(m) = mask {
        if m.shape() != [nq, nk] {
            return Err(Error::Shape(format!(
                "masked_attention: mask shape {:?}, expected [{nq}, {nk}]",
                m.shape()
            )));
        }
        if m.data().iter().any(|x| x.is_nan()) {
            return Err(Error::Numeric("masked_attention: NaN in mask".into()));
        }
        logits = logits.add(m)?;
        let md = m.data();
        alive = Some(
            (0..nq)
                .map(|i| md[i * nk..(i + 1) * nk].iter().any(|&x| x > NEG_INF / 2.0))
                .collect(),
        );
    }
    let probs = logits.softmax_rows(alive.as_deref())?;
    probs.matmul(v)
}

/// Affine chain with GELU between layers and a linear final layer.
/// Zero layers is the identity.
pub struct Mlp {
    layers: Vec<(String, String)>,
}

impl Mlp {
    /// Create parameters for `dims = [d_in, hidden.., d_out]` under
    /// `prefix/w{i}` / `prefix/b{i}`. Weights are N(0, 1/sqrt(fan_in)),
    /// biases zero.
    pub fn init(
        store: &mut ParamStore,
        prefix: &str,
        dims: &[usize],
        master_seed: u64,
    ) -> Result<Mlp> {
        let mut layers = Vec::new();
        for i in 0..dims.len().saturating_sub(1) {
            let w = format!("{prefix}/w{i}");
            let b = format!("{prefix}/b{i}");
            store.add_gaussian(&w, &[dims[i], dims[i + 1]], 1.0 / (dims[i] as f64).sqrt(), master_seed)?;
            store.add_zeros(&b, &[dims[i + 1]])?;
            layers.push((w, b));
        }
        Ok(Mlp { layers })
    }

    /// Bind to already-present parameters (e.g. after a checkpoint load).
    pub fn attach(store: &ParamStore, prefix: &str) -> Result<Mlp> {
        let mut layers = Vec::new();
        let mut i = 0;
        loop {
            let w = format!("{prefix}/w{i}");
            let b = format!("{prefix}/b{i}");
            if !store.contains(&w) {
                break;
            }
            layers.push((w, b));
            i += 1;
        }
        if layers.is_empty() {
            return Err(Error::Usage(format!("no MLP params under {prefix}")));
        }
        Ok(Mlp { layers })
    }

    pub fn forward(&self, store: &ParamStore, x: &Tensor) -> Result<Tensor> {
        let mut h = x.clone();
        for (i, (w, b)) in self.layers.iter().enumerate() {
            h = h.linear(&store.leaf(w)?, Some(&store.leaf(b)?))?;
            if i + 1 < self.layers.len() {
                h = h.gelu();
            }
        }
        Ok(h)
    }
}

/// Adam with decoupled weight decay. Frozen parameters are skipped entirely;
/// unfrozen parameters must have a gradient slot populated via
/// [`ParamStore::absorb`].
pub struct AdamW {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    t: u64,
    m: BTreeMap<String, Vec<f64>>,
    v: BTreeMap<String, Vec<f64>>,
}

impl AdamW {
    pub fn new(lr: f64, weight_decay: f64) -> AdamW {
        AdamW {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay,
            t: 0,
            m: BTreeMap::new(),
            v: BTreeMap::new(),
        }
    }

    pub fn step_count(&self) -> u64 {
        self.t
    }

    /// One update over every unfrozen parameter; gradients are cleared and
    /// cached leaves invalidated afterwards.
    pub fn step(&mut self, store: &mut ParamStore) -> Result<()> {
        self.t += 1;
        let names: Vec<String> = store.names().map(str::to_string).collect();
        let bc1 = 1.0 - self.beta1.powi(self.t as i32);
        let bc2 = 1.0 - self.beta2.powi(self.t as i32);
        for name in names {
            if store.is_frozen(&name)? {
                continue;
            }
            let grad = match store.grad(&name)? {
                Some(g) => g.to_vec(),
                None => {
                    return Err(Error::Usage(format!(
                        "adamw: param {name} has no gradient; run backward + absorb first"
                    )))
                }
            };
            if grad.iter().any(|g| !g.is_finite()) {
                return Err(Error::Numeric(format!("adamw: non-finite gradient for {name}")));
            }
            let n = grad.len();
            let m = self.m.entry(name.clone()).or_insert_with(|| vec![0.0; n]);
            let v = self.v.entry(name.clone()).or_insert_with(|| vec![0.0; n]);
            let mut data = store.data(&name)?.to_vec();
            for i in 0..n {
                m[i] = self.beta1 * m[i] + (1.0 - self.beta1) * grad[i];
                v[i] = self.beta2 * v[i] + (1.0 - self.beta2) * grad[i] * grad[i];
                let mhat = m[i] / bc1;
                let vhat = v[i] / bc2;
                data[i] -= self.lr * (mhat / (vhat.sqrt() + self.eps) + self.weight_decay * data[i]);
            }
            store.set_data(&name, data)?;
        }
        store.zero_grads();
        Ok(())
    }
}
