//! A small define-by-run reverse-mode differentiator covering the layers the
//! denoiser needs: dense and convolutional maps, group normalization, SiLU,
//! nearest upsampling, channel concatenation and single-head attention.
//!
//! Activations use `[batch, channels, spatial...]` layout. Per-sample work in
//! the convolution kernels is spread over rayon; reductions over the batch
//! always run over a fixed number of shards in a fixed order, so results do
//! not depend on the thread count.

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::tensor::{Real, Tensor};

const GN_EPS: f64 = 1e-5;
const REDUCE_SHARDS: usize = 8;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

#[derive(Debug)]
enum Op {
    Input,
    Param(usize),
    Linear { x: Var, w: Var, b: Var },
    Conv { x: Var, w: Var, b: Var, geom: ConvGeom },
    GroupNorm { x: Var, gamma: Var, beta: Var, groups: usize },
    Silu(Var),
    Add(Var, Var),
    AddChannel { x: Var, v: Var },
    Concat(Vec<Var>),
    Upsample(Var),
    ChannelsLast(Var),
    ChannelsFirst(Var),
    Reshape(Var),
    Attention { q: Var, k: Var, v: Var },
}

enum Cache<F> {
    None,
    Norm { xhat: Vec<F>, rstd: Vec<F> },
    Probs(Vec<F>),
}

struct Node<F> {
    op: Op,
    value: Option<Tensor<F>>,
    needs_grad: bool,
    cache: Cache<F>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
struct ConvGeom {
    batch: usize,
    cin: usize,
    cout: usize,
    h: usize,
    w: usize,
    kernel: usize,
    stride: usize,
    pad: usize,
    ho: usize,
    wo: usize,
}

impl ConvGeom {
    fn col_rows(&self) -> usize {
        self.cin * self.kernel * self.kernel
    }

    fn col_cols(&self) -> usize {
        self.ho * self.wo
    }

    /// Output columns `ox` whose input column `ox * stride + kx - pad` lies
    /// inside the image.
    fn valid_cols(&self, kx: usize) -> std::ops::Range<usize> {
        let s = self.stride;
        let lo = self.pad.saturating_sub(kx).div_ceil(s);
        let hi = if self.w + self.pad > kx { (self.w + self.pad - kx - 1) / s + 1 } else { 0 };
        lo.min(self.wo)..hi.min(self.wo).max(lo.min(self.wo))
    }

    fn im2col<F: Real>(&self, x: &[F], cols: &mut [F]) {
        let (k, s) = (self.kernel, self.stride);
        let n = self.col_cols();
        for ci in 0..self.cin {
            let plane = &x[ci * self.h * self.w..(ci + 1) * self.h * self.w];
            for ky in 0..k {
                for kx in 0..k {
                    let row = &mut cols[((ci * k + ky) * k + kx) * n..][..n];
                    let valid = self.valid_cols(kx);
                    for oy in 0..self.ho {
                        let out = &mut row[oy * self.wo..(oy + 1) * self.wo];
                        let iy = (oy * s + ky) as isize - self.pad as isize;
                        if iy < 0 || iy as usize >= self.h || valid.is_empty() {
                            out.fill(F::zero());
                            continue;
                        }
                        let src = &plane[iy as usize * self.w..(iy as usize + 1) * self.w];
                        out[..valid.start].fill(F::zero());
                        out[valid.end..].fill(F::zero());
                        let ix0 = valid.start * s + kx - self.pad;
                        if s == 1 {
                            out[valid.clone()].copy_from_slice(&src[ix0..ix0 + valid.len()]);
                        } else {
                            for (j, o) in out[valid.clone()].iter_mut().enumerate() {
                                *o = src[ix0 + j * s];
                            }
                        }
                    }
                }
            }
        }
    }

    fn col2im<F: Real>(&self, cols: &[F], dx: &mut [F]) {
        let (k, s) = (self.kernel, self.stride);
        let n = self.col_cols();
        for ci in 0..self.cin {
            let plane = &mut dx[ci * self.h * self.w..(ci + 1) * self.h * self.w];
            for ky in 0..k {
                for kx in 0..k {
                    let row = &cols[((ci * k + ky) * k + kx) * n..][..n];
                    let valid = self.valid_cols(kx);
                    if valid.is_empty() {
                        continue;
                    }
                    let ix0 = valid.start * s + kx - self.pad;
                    for oy in 0..self.ho {
                        let iy = (oy * s + ky) as isize - self.pad as isize;
                        if iy < 0 || iy as usize >= self.h {
                            continue;
                        }
                        let dst = &mut plane[iy as usize * self.w..(iy as usize + 1) * self.w];
                        let src = &row[oy * self.wo + valid.start..oy * self.wo + valid.end];
                        for (j, &g) in src.iter().enumerate() {
                            dst[ix0 + j * s] += g;
                        }
                    }
                }
            }
        }
    }
}

/// Splits `0..n` into at most `REDUCE_SHARDS` contiguous ranges.
fn shards(n: usize) -> Vec<std::ops::Range<usize>> {
    let count = n.clamp(1, REDUCE_SHARDS);
    (0..count)
        .map(|i| (i * n / count)..((i + 1) * n / count))
        .collect()
}

pub struct Graph<'p, F> {
    params: &'p [Tensor<F>],
    nodes: Vec<Node<F>>,
}

impl<'p, F: Real> Graph<'p, F> {
    pub fn new(params: &'p [Tensor<F>]) -> Self {
        Self {
            params,
            nodes: Vec::new(),
        }
    }

    pub fn value(&self, v: Var) -> &Tensor<F> {
        match &self.nodes[v.0].op {
            Op::Param(i) => &self.params[*i],
            _ => self.nodes[v.0].value.as_ref().expect("computed node"),
        }
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.value(v).shape()
    }

    fn push(&mut self, op: Op, value: Tensor<F>, cache: Cache<F>) -> Var {
        let needs_grad = match &op {
            Op::Input => false,
            Op::Param(_) => true,
            Op::Linear { x, w, b } => self.any_grad(&[*x, *w, *b]),
            Op::Conv { x, w, b, .. } => self.any_grad(&[*x, *w, *b]),
            Op::GroupNorm { x, gamma, beta, .. } => self.any_grad(&[*x, *gamma, *beta]),
            Op::Silu(x) | Op::Upsample(x) | Op::ChannelsLast(x) | Op::ChannelsFirst(x) | Op::Reshape(x) => self.any_grad(&[*x]),
            Op::Add(a, b) => self.any_grad(&[*a, *b]),
            Op::AddChannel { x, v } => self.any_grad(&[*x, *v]),
            Op::Concat(parts) => self.any_grad(parts),
            Op::Attention { q, k, v } => self.any_grad(&[*q, *k, *v]),
        };
        self.nodes.push(Node {
            op,
            value: Some(value),
            needs_grad,
            cache,
        });
        Var(self.nodes.len() - 1)
    }

    fn any_grad(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].needs_grad)
    }

    pub fn input(&mut self, t: Tensor<F>) -> Var {
        self.push(Op::Input, t, Cache::None)
    }

    pub fn param(&mut self, index: usize) -> Var {
        self.nodes.push(Node {
            op: Op::Param(index),
            value: None,
            needs_grad: true,
            cache: Cache::None,
        });
        Var(self.nodes.len() - 1)
    }

    fn mismatch(context: &str, expected: &[usize], got: &[usize]) -> Error {
        Error::ShapeMismatch {
            context: context.into(),
            expected: expected.to_vec(),
            got: got.to_vec(),
        }
    }

    /// `x [.., in] @ w [in, out] + b [out]`.
    pub fn linear(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let (xs, ws) = (self.shape(x).to_vec(), self.shape(w).to_vec());
        let inner = *xs.last().unwrap_or(&0);
        if ws.len() != 2 || ws[0] != inner || self.shape(b) != [ws[1]] {
            return Err(Self::mismatch("linear", &[inner, 0], &ws));
        }
        let out = ws[1];
        let rows = self.value(x).len() / inner.max(1);
        let mut y = vec![F::zero(); rows * out];
        for r in 0..rows {
            y[r * out..(r + 1) * out].copy_from_slice(self.value(b).data());
        }
        F::gemm(rows, inner, out, self.value(x).data(), false, self.value(w).data(), false, &mut y, true);
        let mut shape = xs;
        *shape.last_mut().unwrap() = out;
        let t = Tensor::from_vec(&shape, y)?;
        Ok(self.push(Op::Linear { x, w, b }, t, Cache::None))
    }

    /// 2-D convolution with square kernel `w [cout, cin, k, k]`, zero padding `k / 2`.
    pub fn conv2d(&mut self, x: Var, w: Var, b: Var, stride: usize) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        let ws = self.shape(w).to_vec();
        if xs.len() != 4 || ws.len() != 4 || ws[1] != xs[1] || ws[2] != ws[3] || self.shape(b) != [ws[0]] {
            return Err(Self::mismatch("conv2d", &xs, &ws));
        }
        let kernel = ws[2];
        let pad = kernel / 2;
        let geom = ConvGeom {
            batch: xs[0],
            cin: xs[1],
            cout: ws[0],
            h: xs[2],
            w: xs[3],
            kernel,
            stride,
            pad,
            ho: (xs[2] + 2 * pad - kernel) / stride + 1,
            wo: (xs[3] + 2 * pad - kernel) / stride + 1,
        };
        let (xv, wv, bv) = (self.value(x).data(), self.value(w).data(), self.value(b).data());
        let per_out = geom.cout * geom.col_cols();
        let per_in = geom.cin * geom.h * geom.w;
        let mut y = vec![F::zero(); geom.batch * per_out];
        y.par_chunks_mut(per_out.max(1)).enumerate().for_each(|(n, out)| {
            let mut cols = vec![F::zero(); geom.col_rows() * geom.col_cols()];
            geom.im2col(&xv[n * per_in..(n + 1) * per_in], &mut cols);
            for (co, row) in out.chunks_mut(geom.col_cols()).enumerate() {
                row.fill(bv[co]);
            }
            F::gemm(geom.cout, geom.col_rows(), geom.col_cols(), wv, false, &cols, false, out, true);
        });
        let t = Tensor::from_vec(&[geom.batch, geom.cout, geom.ho, geom.wo], y)?;
        Ok(self.push(Op::Conv { x, w, b, geom }, t, Cache::None))
    }

    /// Group normalization over `[batch, channels, rest...]` with per-channel affine.
    pub fn group_norm(&mut self, x: Var, gamma: Var, beta: Var, groups: usize) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        if xs.len() < 2 || groups == 0 || !xs[1].is_multiple_of(groups) {
            return Err(Error::invalid(format!(
                "group_norm: {groups} groups do not divide shape {xs:?}"
            )));
        }
        let c = xs[1];
        if self.shape(gamma) != [c] || self.shape(beta) != [c] {
            return Err(Self::mismatch("group_norm affine", &[c], self.shape(gamma)));
        }
        let spatial: usize = xs[2..].iter().product();
        let group_len = c / groups * spatial;
        let xv = self.value(x).data();
        let (gv, bv) = (self.value(gamma).data(), self.value(beta).data());
        let eps = F::from_f64_lossy(GN_EPS);
        let mut xhat = vec![F::zero(); xv.len()];
        let mut rstd = Vec::with_capacity(xs[0] * groups);
        let mut y = vec![F::zero(); xv.len()];
        let n = F::from_usize(group_len).unwrap();
        for (gi, chunk) in xv.chunks(group_len).enumerate() {
            let mean = chunk.iter().copied().sum::<F>() / n;
            let var = chunk.iter().map(|&v| (v - mean) * (v - mean)).sum::<F>() / n;
            let r = F::one() / (var + eps).sqrt();
            rstd.push(r);
            let base = gi * group_len;
            let g = gi % groups;
            for (j, &v) in chunk.iter().enumerate() {
                let ch = g * (c / groups) + j / spatial;
                let h = (v - mean) * r;
                xhat[base + j] = h;
                y[base + j] = h * gv[ch] + bv[ch];
            }
        }
        let t = Tensor::from_vec(&xs, y)?;
        Ok(self.push(Op::GroupNorm { x, gamma, beta, groups }, t, Cache::Norm { xhat, rstd }))
    }

    pub fn silu(&mut self, x: Var) -> Var {
        let t = self.value(x).map(|v| v / (F::one() + (-v).exp()));
        self.push(Op::Silu(x), t, Cache::None)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        if self.shape(a) != self.shape(b) {
            return Err(Self::mismatch("add", self.shape(a), self.shape(b)));
        }
        let mut t = self.value(a).clone();
        t.add_assign(self.value(b));
        Ok(self.push(Op::Add(a, b), t, Cache::None))
    }

    /// Broadcasts `v [batch, channels]` over the trailing axes of `x`.
    pub fn add_channel(&mut self, x: Var, v: Var) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        if xs.len() < 2 || self.shape(v) != [xs[0], xs[1]] {
            return Err(Self::mismatch("add_channel", &xs[..xs.len().min(2)], self.shape(v)));
        }
        let spatial: usize = xs[2..].iter().product();
        let mut t = self.value(x).clone();
        let vv = self.value(v).data();
        for (i, chunk) in t.data_mut().chunks_mut(spatial).enumerate() {
            for e in chunk {
                *e += vv[i];
            }
        }
        Ok(self.push(Op::AddChannel { x, v }, t, Cache::None))
    }

    /// Concatenates along axis 1.
    pub fn concat(&mut self, parts: &[Var]) -> Result<Var> {
        let first = self.shape(parts[0]).to_vec();
        let spatial: usize = first[2..].iter().product();
        let mut channels = 0;
        for &p in parts {
            let s = self.shape(p);
            if s.len() != first.len() || s[0] != first[0] || s[2..] != first[2..] {
                return Err(Self::mismatch("concat", &first, s));
            }
            channels += s[1];
        }
        let batch = first[0];
        let mut data = Vec::with_capacity(batch * channels * spatial);
        for n in 0..batch {
            for &p in parts {
                let t = self.value(p);
                data.extend_from_slice(t.row(n));
            }
        }
        let mut shape = first;
        shape[1] = channels;
        let t = Tensor::from_vec(&shape, data)?;
        Ok(self.push(Op::Concat(parts.to_vec()), t, Cache::None))
    }

    /// Nearest-neighbour 2x upsampling of `[batch, channels, h, w]`.
    pub fn upsample2x(&mut self, x: Var) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        if xs.len() != 4 {
            return Err(Self::mismatch("upsample2x", &[0, 0, 0, 0], &xs));
        }
        let (h, w) = (xs[2], xs[3]);
        let src = self.value(x).data();
        let mut data = vec![F::zero(); src.len() * 4];
        for (plane, out) in src.chunks(h * w).zip(data.chunks_mut(4 * h * w)) {
            for y in 0..2 * h {
                for xx in 0..2 * w {
                    out[y * 2 * w + xx] = plane[(y / 2) * w + xx / 2];
                }
            }
        }
        let t = Tensor::from_vec(&[xs[0], xs[1], 2 * h, 2 * w], data)?;
        Ok(self.push(Op::Upsample(x), t, Cache::None))
    }

    /// `[batch, c, rest...]` to `[batch, prod(rest), c]`.
    pub fn channels_last(&mut self, x: Var) -> Var {
        let xs = self.shape(x).to_vec();
        let (b, c) = (xs[0], xs[1]);
        let s: usize = xs[2..].iter().product();
        let src = self.value(x).data();
        let mut data = vec![F::zero(); src.len()];
        for n in 0..b {
            for ci in 0..c {
                for si in 0..s {
                    data[(n * s + si) * c + ci] = src[(n * c + ci) * s + si];
                }
            }
        }
        let t = Tensor::from_vec(&[b, s, c], data).expect("same element count");
        self.push(Op::ChannelsLast(x), t, Cache::None)
    }

    /// Inverse of [`Graph::channels_last`], restoring `shape`.
    pub fn channels_first(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        if xs.len() != 3 || shape[0] != xs[0] || shape[1] != xs[2] || shape[2..].iter().product::<usize>() != xs[1] {
            return Err(Self::mismatch("channels_first", shape, &xs));
        }
        let (b, s, c) = (xs[0], xs[1], xs[2]);
        let src = self.value(x).data();
        let mut data = vec![F::zero(); src.len()];
        for n in 0..b {
            for si in 0..s {
                for ci in 0..c {
                    data[(n * c + ci) * s + si] = src[(n * s + si) * c + ci];
                }
            }
        }
        let reshaped = Tensor::from_vec(&[b, c, s], data)?;
        let t = reshaped.reshaped(shape)?;
        Ok(self.push(Op::ChannelsFirst(x), t, Cache::None))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let t = self.value(x).clone().reshaped(shape)?;
        Ok(self.push(Op::Reshape(x), t, Cache::None))
    }

    /// Single-head scaled dot-product attention on `[batch, tokens, dim]`.
    pub fn attention(&mut self, q: Var, k: Var, v: Var) -> Result<Var> {
        let qs = self.shape(q).to_vec();
        if qs.len() != 3 || self.shape(k) != qs.as_slice() || self.shape(v) != qs.as_slice() {
            return Err(Self::mismatch("attention", &qs, self.shape(k)));
        }
        let (b, n, d) = (qs[0], qs[1], qs[2]);
        let scale = F::one() / F::from_usize(d).unwrap().sqrt();
        let (qv, kv, vv) = (self.value(q).data(), self.value(k).data(), self.value(v).data());
        let mut probs = vec![F::zero(); b * n * n];
        let mut out = vec![F::zero(); b * n * d];
        for i in 0..b {
            let p = &mut probs[i * n * n..(i + 1) * n * n];
            let (qb, kb, vb) = (&qv[i * n * d..][..n * d], &kv[i * n * d..][..n * d], &vv[i * n * d..][..n * d]);
            F::gemm(n, d, n, qb, false, kb, true, p, false);
            for row in p.chunks_mut(n) {
                let max = row.iter().fold(F::neg_infinity(), |m, &x| m.max(x * scale));
                let mut sum = F::zero();
                for e in row.iter_mut() {
                    *e = (*e * scale - max).exp();
                    sum += *e;
                }
                for e in row.iter_mut() {
                    *e = *e / sum;
                }
            }
            F::gemm(n, n, d, p, false, vb, false, &mut out[i * n * d..][..n * d], false);
        }
        let t = Tensor::from_vec(&qs, out)?;
        Ok(self.push(Op::Attention { q, k, v }, t, Cache::Probs(probs)))
    }

    /// Back-propagates the seed gradients and returns one gradient tensor per
    /// parameter (zeros for parameters the graph never touched).
    pub fn backward(mut self, seeds: Vec<(Var, Tensor<F>)>) -> Result<Vec<Tensor<F>>> {
        let mut grads: Vec<Option<Tensor<F>>> = (0..self.nodes.len()).map(|_| None).collect();
        for (v, g) in seeds {
            if g.shape() != self.shape(v) {
                return Err(Self::mismatch("backward seed", self.shape(v), g.shape()));
            }
            accumulate(&mut grads[v.0], g);
        }
        let mut param_grads: Vec<Tensor<F>> = self.params.iter().map(|p| Tensor::zeros(p.shape())).collect();

        for idx in (0..self.nodes.len()).rev() {
            let Some(g) = grads[idx].take() else { continue };
            if !self.nodes[idx].needs_grad {
                continue;
            }
            let cache = std::mem::replace(&mut self.nodes[idx].cache, Cache::None);
            let contributions = match &self.nodes[idx].op {
                Op::Input => Vec::new(),
                Op::Param(i) => {
                    param_grads[*i].add_assign(&g);
                    Vec::new()
                }
                Op::Linear { x, w, b } => self.back_linear(*x, *w, *b, &g),
                Op::Conv { x, w, b, geom } => self.back_conv(*x, *w, *b, *geom, &g),
                Op::GroupNorm { x, gamma, beta, groups } => {
                    let Cache::Norm { xhat, rstd } = &cache else { unreachable!() };
                    self.back_group_norm(*x, *gamma, *beta, *groups, xhat, rstd, &g)
                }
                Op::Silu(x) => {
                    let xv = self.value(*x).data();
                    let data = xv
                        .iter()
                        .zip(g.data())
                        .map(|(&v, &gy)| {
                            let s = F::one() / (F::one() + (-v).exp());
                            gy * s * (F::one() + v * (F::one() - s))
                        })
                        .collect();
                    vec![(*x, Tensor::from_vec(self.shape(*x), data)?)]
                }
                Op::Add(a, b) => vec![(*a, g.clone()), (*b, g)],
                Op::AddChannel { x, v } => {
                    let spatial: usize = self.shape(*x)[2..].iter().product();
                    let dv: Vec<F> = g.data().chunks(spatial).map(|c| c.iter().copied().sum()).collect();
                    let dv = Tensor::from_vec(self.shape(*v), dv)?;
                    vec![(*x, g), (*v, dv)]
                }
                Op::Concat(parts) => {
                    let batch = g.rows();
                    let mut outs: Vec<Vec<F>> = parts.iter().map(|p| Vec::with_capacity(self.value(*p).len())).collect();
                    let mut offset = 0;
                    for _ in 0..batch {
                        for (pi, p) in parts.iter().enumerate() {
                            let w = self.value(*p).row_len();
                            outs[pi].extend_from_slice(&g.data()[offset..offset + w]);
                            offset += w;
                        }
                    }
                    parts
                        .iter()
                        .zip(outs)
                        .map(|(p, d)| Ok((*p, Tensor::from_vec(self.shape(*p), d)?)))
                        .collect::<Result<Vec<_>>>()?
                }
                Op::Upsample(x) => {
                    let xs = self.shape(*x).to_vec();
                    let (h, w) = (xs[2], xs[3]);
                    let mut d = vec![F::zero(); self.value(*x).len()];
                    for (plane, gp) in d.chunks_mut(h * w).zip(g.data().chunks(4 * h * w)) {
                        for y in 0..2 * h {
                            for xx in 0..2 * w {
                                plane[(y / 2) * w + xx / 2] += gp[y * 2 * w + xx];
                            }
                        }
                    }
                    vec![(*x, Tensor::from_vec(&xs, d)?)]
                }
                Op::ChannelsLast(x) => {
                    let xs = self.shape(*x).to_vec();
                    vec![(*x, to_channels_first(&g, &xs)?)]
                }
                Op::ChannelsFirst(x) => {
                    let xs = self.shape(*x).to_vec();
                    vec![(*x, to_channels_last(&g, &xs)?)]
                }
                Op::Reshape(x) => {
                    let xs = self.shape(*x).to_vec();
                    vec![(*x, g.reshaped(&xs)?)]
                }
                Op::Attention { q, k, v } => {
                    let Cache::Probs(p) = &cache else { unreachable!() };
                    self.back_attention(*q, *k, *v, p, &g)?
                }
            };
            for (v, t) in contributions {
                if self.nodes[v.0].needs_grad {
                    accumulate(&mut grads[v.0], t);
                }
            }
        }
        Ok(param_grads)
    }

    fn back_linear(&self, x: Var, w: Var, b: Var, g: &Tensor<F>) -> Vec<(Var, Tensor<F>)> {
        let ws = self.shape(w);
        let (inner, out) = (ws[0], ws[1]);
        let rows = g.len() / out.max(1);
        let mut res = Vec::with_capacity(3);
        if self.nodes[x.0].needs_grad {
            let mut dx = vec![F::zero(); rows * inner];
            F::gemm(rows, out, inner, g.data(), false, self.value(w).data(), true, &mut dx, false);
            res.push((x, Tensor::from_vec(self.shape(x), dx).unwrap()));
        }
        if self.nodes[w.0].needs_grad {
            let mut dw = vec![F::zero(); inner * out];
            F::gemm(inner, rows, out, self.value(x).data(), true, g.data(), false, &mut dw, false);
            res.push((w, Tensor::from_vec(ws, dw).unwrap()));
        }
        if self.nodes[b.0].needs_grad {
            let mut db = vec![F::zero(); out];
            for row in g.data().chunks(out) {
                for (acc, &v) in db.iter_mut().zip(row) {
                    *acc += v;
                }
            }
            res.push((b, Tensor::from_vec(&[out], db).unwrap()));
        }
        res
    }

    fn back_conv(&self, x: Var, w: Var, b: Var, geom: ConvGeom, g: &Tensor<F>) -> Vec<(Var, Tensor<F>)> {
        let (xv, wv, gv) = (self.value(x).data(), self.value(w).data(), g.data());
        let per_out = geom.cout * geom.col_cols();
        let per_in = geom.cin * geom.h * geom.w;
        let want_dx = self.nodes[x.0].needs_grad;
        let want_dw = self.nodes[w.0].needs_grad;
        let wlen = geom.cout * geom.col_rows();

        let mut dx = vec![F::zero(); if want_dx { xv.len() } else { 0 }];
        let dw_parts: Vec<Vec<F>> = if want_dw {
            shards(geom.batch)
                .into_par_iter()
                .map(|range| {
                    let mut dw = vec![F::zero(); wlen];
                    let mut cols = vec![F::zero(); geom.col_rows() * geom.col_cols()];
                    for n in range {
                        geom.im2col(&xv[n * per_in..(n + 1) * per_in], &mut cols);
                        F::gemm(
                            geom.cout,
                            geom.col_cols(),
                            geom.col_rows(),
                            &gv[n * per_out..(n + 1) * per_out],
                            false,
                            &cols,
                            true,
                            &mut dw,
                            true,
                        );
                    }
                    dw
                })
                .collect()
        } else {
            Vec::new()
        };
        if want_dx {
            dx.par_chunks_mut(per_in.max(1)).enumerate().for_each(|(n, dxn)| {
                let mut dcols = vec![F::zero(); geom.col_rows() * geom.col_cols()];
                F::gemm(
                    geom.col_rows(),
                    geom.cout,
                    geom.col_cols(),
                    wv,
                    true,
                    &gv[n * per_out..(n + 1) * per_out],
                    false,
                    &mut dcols,
                    false,
                );
                geom.col2im(&dcols, dxn);
            });
        }

        let mut res = Vec::with_capacity(3);
        if want_dx {
            res.push((x, Tensor::from_vec(self.shape(x), dx).unwrap()));
        }
        if want_dw {
            let mut dw = vec![F::zero(); wlen];
            for part in dw_parts {
                for (a, v) in dw.iter_mut().zip(part) {
                    *a += v;
                }
            }
            res.push((w, Tensor::from_vec(self.shape(w), dw).unwrap()));
        }
        if self.nodes[b.0].needs_grad {
            let mut db = vec![F::zero(); geom.cout];
            for (i, chunk) in gv.chunks(geom.col_cols()).enumerate() {
                db[i % geom.cout] += chunk.iter().copied().sum::<F>();
            }
            res.push((b, Tensor::from_vec(&[geom.cout], db).unwrap()));
        }
        res
    }

    #[allow(clippy::too_many_arguments)]
    fn back_group_norm(
        &self,
        x: Var,
        gamma: Var,
        beta: Var,
        groups: usize,
        xhat: &[F],
        rstd: &[F],
        g: &Tensor<F>,
    ) -> Vec<(Var, Tensor<F>)> {
        let xs = self.shape(x);
        let c = xs[1];
        let spatial: usize = xs[2..].iter().product();
        let per_group_ch = c / groups;
        let group_len = per_group_ch * spatial;
        let gv = self.value(gamma).data();
        let n = F::from_usize(group_len).unwrap();
        let mut dx = vec![F::zero(); xhat.len()];
        let mut dgamma = vec![F::zero(); c];
        let mut dbeta = vec![F::zero(); c];
        for (gi, (gy, xh)) in g.data().chunks(group_len).zip(xhat.chunks(group_len)).enumerate() {
            let grp = gi % groups;
            let mut sum_d = F::zero();
            let mut sum_dx = F::zero();
            for j in 0..group_len {
                let ch = grp * per_group_ch + j / spatial;
                dgamma[ch] += gy[j] * xh[j];
                dbeta[ch] += gy[j];
                let d = gy[j] * gv[ch];
                sum_d += d;
                sum_dx += d * xh[j];
            }
            let r = rstd[gi];
            let base = gi * group_len;
            for j in 0..group_len {
                let ch = grp * per_group_ch + j / spatial;
                let d = gy[j] * gv[ch];
                dx[base + j] = r / n * (n * d - sum_d - xh[j] * sum_dx);
            }
        }
        vec![
            (x, Tensor::from_vec(xs, dx).unwrap()),
            (gamma, Tensor::from_vec(&[c], dgamma).unwrap()),
            (beta, Tensor::from_vec(&[c], dbeta).unwrap()),
        ]
    }

    fn back_attention(&self, q: Var, k: Var, v: Var, probs: &[F], g: &Tensor<F>) -> Result<Vec<(Var, Tensor<F>)>> {
        let qs = self.shape(q).to_vec();
        let (b, n, d) = (qs[0], qs[1], qs[2]);
        let scale = F::one() / F::from_usize(d).unwrap().sqrt();
        let (qv, kv, vv, gv) = (self.value(q).data(), self.value(k).data(), self.value(v).data(), g.data());
        let mut dq = vec![F::zero(); b * n * d];
        let mut dk = vec![F::zero(); b * n * d];
        let mut dv = vec![F::zero(); b * n * d];
        let mut dp = vec![F::zero(); n * n];
        for i in 0..b {
            let off = i * n * d;
            let p = &probs[i * n * n..(i + 1) * n * n];
            let go = &gv[off..off + n * d];
            F::gemm(n, n, d, p, true, go, false, &mut dv[off..off + n * d], false);
            F::gemm(n, d, n, go, false, &vv[off..off + n * d], true, &mut dp, false);
            for (prow, drow) in p.chunks(n).zip(dp.chunks_mut(n)) {
                let dot = prow.iter().zip(drow.iter()).map(|(&a, &b)| a * b).sum::<F>();
                for (dv_, &pv) in drow.iter_mut().zip(prow) {
                    *dv_ = pv * (*dv_ - dot) * scale;
                }
            }
            F::gemm(n, n, d, &dp, false, &kv[off..off + n * d], false, &mut dq[off..off + n * d], false);
            F::gemm(n, n, d, &dp, true, &qv[off..off + n * d], false, &mut dk[off..off + n * d], false);
        }
        Ok(vec![
            (q, Tensor::from_vec(&qs, dq)?),
            (k, Tensor::from_vec(&qs, dk)?),
            (v, Tensor::from_vec(&qs, dv)?),
        ])
    }
}

fn accumulate<F: Real>(slot: &mut Option<Tensor<F>>, g: Tensor<F>) {
    match slot {
        Some(existing) => existing.add_assign(&g),
        None => *slot = Some(g),
    }
}

/// `g [b, s, c]` back to `[b, c, rest...]` given by `shape`.
fn to_channels_first<F: Real>(g: &Tensor<F>, shape: &[usize]) -> Result<Tensor<F>> {
    let (b, s, c) = (g.shape()[0], g.shape()[1], g.shape()[2]);
    let src = g.data();
    let mut data = vec![F::zero(); src.len()];
    for n in 0..b {
        for si in 0..s {
            for ci in 0..c {
                data[(n * c + ci) * s + si] = src[(n * s + si) * c + ci];
            }
        }
    }
    Tensor::from_vec(shape, data)
}

/// `g [b, c, rest...]` to `[b, s, c]` given by `shape`.
fn to_channels_last<F: Real>(g: &Tensor<F>, shape: &[usize]) -> Result<Tensor<F>> {
    let (b, s, c) = (shape[0], shape[1], shape[2]);
    let src = g.data();
    let mut data = vec![F::zero(); src.len()];
    for n in 0..b {
        for ci in 0..c {
            for si in 0..s {
                data[(n * s + si) * c + ci] = src[(n * c + ci) * s + si];
            }
        }
    }
    Tensor::from_vec(shape, data)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor<f64> {
        let n = shape.iter().product();
        Tensor::from_vec(shape, (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
    }

    /// Checks analytic gradients of `sum(r * f(params))` against central
    /// differences for every parameter element.
    fn check<G>(shapes: &[&[usize]], build: G)
    where
        G: Fn(&mut Graph<'_, f64>, &[Var]) -> Var,
    {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let mut params: Vec<Tensor<f64>> = shapes.iter().map(|s| random(s, &mut rng)).collect();
        let eval = |params: &[Tensor<f64>], r: Option<&Tensor<f64>>| -> (f64, Tensor<f64>, Vec<Tensor<f64>>) {
            let mut g = Graph::new(params);
            let vars: Vec<Var> = (0..params.len()).map(|i| g.param(i)).collect();
            let out = build(&mut g, &vars);
            let value = g.value(out).clone();
            let r = r.cloned().unwrap_or_else(|| value.map(|_| 0.0));
            let loss: f64 = value.data().iter().zip(r.data()).map(|(a, b)| a * b).sum();
            let grads = g.backward(vec![(out, r)]).unwrap();
            (loss, value, grads)
        };
        let (_, value, _) = eval(&params, None);
        let r = random(value.shape(), &mut rng);
        let (_, _, grads) = eval(&params, Some(&r));
        let h = 1e-5;
        for p in 0..params.len() {
            for i in 0..params[p].len() {
                let orig = params[p].data()[i];
                params[p].data_mut()[i] = orig + h;
                let (lp, _, _) = eval(&params, Some(&r));
                params[p].data_mut()[i] = orig - h;
                let (lm, _, _) = eval(&params, Some(&r));
                params[p].data_mut()[i] = orig;
                let numeric = (lp - lm) / (2.0 * h);
                let analytic = grads[p].data()[i];
                let err = (numeric - analytic).abs() / numeric.abs().max(analytic.abs()).max(1e-6);
                assert!(err < 1e-5, "param {p}[{i}]: analytic {analytic} numeric {numeric}");
            }
        }
    }

    #[test]
    fn linear_gradients() {
        check(&[&[3, 4], &[4, 5], &[5]], |g, v| g.linear(v[0], v[1], v[2]).unwrap());
    }

    #[test]
    fn conv_gradients() {
        check(&[&[2, 2, 5, 5], &[3, 2, 3, 3], &[3]], |g, v| g.conv2d(v[0], v[1], v[2], 1).unwrap());
        check(&[&[2, 2, 4, 4], &[2, 2, 3, 3], &[2]], |g, v| g.conv2d(v[0], v[1], v[2], 2).unwrap());
        check(&[&[1, 3, 3, 3], &[2, 3, 1, 1], &[2]], |g, v| g.conv2d(v[0], v[1], v[2], 1).unwrap());
    }

    #[test]
    fn group_norm_gradients() {
        check(&[&[2, 4, 3], &[4], &[4]], |g, v| g.group_norm(v[0], v[1], v[2], 2).unwrap());
        check(&[&[3, 6], &[6], &[6]], |g, v| g.group_norm(v[0], v[1], v[2], 3).unwrap());
    }

    #[test]
    fn elementwise_and_layout_gradients() {
        check(&[&[2, 3]], |g, v| g.silu(v[0]));
        check(&[&[2, 3], &[2, 3]], |g, v| g.add(v[0], v[1]).unwrap());
        check(&[&[2, 3, 2, 2], &[2, 3]], |g, v| g.add_channel(v[0], v[1]).unwrap());
        check(&[&[2, 1, 2], &[2, 3, 2]], |g, v| g.concat(&[v[0], v[1]]).unwrap());
        check(&[&[1, 2, 2, 3]], |g, v| g.upsample2x(v[0]).unwrap());
        check(&[&[2, 3, 2, 2]], |g, v| {
            let t = g.channels_last(v[0]);
            let s = g.silu(t);
            g.channels_first(s, &[2, 3, 2, 2]).unwrap()
        });
        // square case: channel count equals the number of positions
        check(&[&[1, 4, 2, 2]], |g, v| g.channels_last(v[0]));
        check(&[&[2, 6]], |g, v| g.reshape(v[0], &[2, 2, 3]).unwrap());
    }

    #[test]
    fn attention_gradients() {
        check(&[&[2, 3, 4], &[2, 3, 4], &[2, 3, 4]], |g, v| g.attention(v[0], v[1], v[2]).unwrap());
    }

    #[test]
    fn attention_rows_are_convex_combinations() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let q = random(&[1, 4, 2], &mut rng);
        let k = random(&[1, 4, 2], &mut rng);
        let v = Tensor::from_vec(&[1, 4, 2], vec![1.0; 8]).unwrap();
        let params = [q, k, v];
        let mut g = Graph::new(&params);
        let vars: Vec<Var> = (0..3).map(|i| g.param(i)).collect();
        let out = g.attention(vars[0], vars[1], vars[2]).unwrap();
        assert!(g.value(out).data().iter().all(|x| (x - 1.0).abs() < 1e-12));
    }

    #[test]
    fn inputs_do_not_receive_gradients() {
        let params = [Tensor::<f64>::full(&[2, 2], 0.5), Tensor::zeros(&[2])];
        let mut g = Graph::new(&params);
        let x = g.input(Tensor::full(&[3, 2], 1.0));
        let (w, b) = (g.param(0), g.param(1));
        let y = g.linear(x, w, b).unwrap();
        let seed = Tensor::full(&[3, 2], 1.0);
        let grads = g.backward(vec![(y, seed)]).unwrap();
        assert_eq!(grads[0].data(), &[3.0, 3.0, 3.0, 3.0]);
        assert_eq!(grads[1].data(), &[3.0, 3.0]);
    }

    #[test]
    fn shape_errors_are_reported() {
        let params = [Tensor::<f64>::zeros(&[3, 2]), Tensor::zeros(&[2])];
        let mut g = Graph::new(&params);
        let x = g.input(Tensor::zeros(&[1, 4]));
        let (w, b) = (g.param(0), g.param(1));
        assert!(g.linear(x, w, b).is_err());
        assert!(g.group_norm(x, b, b, 3).is_err());
    }
}
