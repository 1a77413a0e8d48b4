use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::tensor::{Real, Tensor};

/// How a parameter is tied to domain identity. Used to relabel domains
/// (rewire the network so that domain `i` takes the role of `perm[i]`).
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct DomainLayout {
    /// Per-domain parameters belong to exactly one domain's encoder/decoder.
    pub owner: Option<usize>,
    /// Axes made of `m` consecutive per-domain blocks of the given size.
    pub blocked_axes: Vec<(usize, usize)>,
}

impl DomainLayout {
    pub fn shared() -> Self {
        Self::default()
    }

    pub fn owned(domain: usize) -> Self {
        Self {
            owner: Some(domain),
            blocked_axes: Vec::new(),
        }
    }

    pub fn blocked(mut self, axis: usize, block: usize) -> Self {
        self.blocked_axes.push((axis, block));
        self
    }
}

#[derive(Debug, Clone)]
pub struct ParamStore<F> {
    names: Vec<String>,
    values: Vec<Tensor<F>>,
    layouts: Vec<DomainLayout>,
}

impl<F: Real> ParamStore<F> {
    pub fn new() -> Self {
        Self {
            names: Vec::new(),
            values: Vec::new(),
            layouts: Vec::new(),
        }
    }

    pub fn push(&mut self, name: String, value: Tensor<F>, layout: DomainLayout) -> usize {
        debug_assert!(!self.names.contains(&name), "duplicate parameter {name}");
        self.names.push(name);
        self.values.push(value);
        self.layouts.push(layout);
        self.values.len() - 1
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn values(&self) -> &[Tensor<F>] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [Tensor<F>] {
        &mut self.values
    }

    pub fn layouts(&self) -> &[DomainLayout] {
        &self.layouts
    }

    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.names.iter().position(|n| n == name)
    }

    /// Total number of scalar parameters.
    pub fn count(&self) -> usize {
        self.values.iter().map(Tensor::len).sum()
    }
}

impl<F: Real> Default for ParamStore<F> {
    fn default() -> Self {
        Self::new()
    }
}

/// Registers parameters with deterministic initialization.
pub(crate) struct ParamBuilder<'a, F> {
    pub store: ParamStore<F>,
    pub rng: &'a mut ChaCha8Rng,
}

impl<F: Real> ParamBuilder<'_, F> {
    /// Uniform in `[-gain / sqrt(fan_in), gain / sqrt(fan_in)]`.
    pub fn uniform(&mut self, name: String, shape: &[usize], fan_in: usize, gain: f64, layout: DomainLayout) -> usize {
        let bound = gain / (fan_in as f64).sqrt();
        let n = shape.iter().product();
        let data = (0..n)
            .map(|_| F::from_f64_lossy(self.rng.random_range(-bound..bound)))
            .collect();
        self.store.push(name, Tensor::from_vec(shape, data).unwrap(), layout)
    }

    pub fn constant(&mut self, name: String, shape: &[usize], value: f64, layout: DomainLayout) -> usize {
        self.store
            .push(name, Tensor::full(shape, F::from_f64_lossy(value)), layout)
    }
}

/// Moves block `i` of `axis` to block `perm[i]`.
pub(crate) fn permute_blocks<F: Real>(t: &Tensor<F>, axis: usize, block: usize, perm: &[usize]) -> Tensor<F> {
    let shape = t.shape();
    let outer: usize = shape[..axis].iter().product();
    let inner: usize = shape[axis + 1..].iter().product();
    let len = shape[axis];
    assert_eq!(len, block * perm.len(), "blocked axis must hold one block per domain");
    let mut out = t.clone();
    for o in 0..outer {
        for (src_block, &dst_block) in perm.iter().enumerate() {
            for j in 0..block {
                let src = (o * len + src_block * block + j) * inner;
                let dst = (o * len + dst_block * block + j) * inner;
                out.data_mut()[dst..dst + inner].copy_from_slice(&t.data()[src..src + inner]);
            }
        }
    }
    out
}
