//! The noise-prediction network: one encoder/decoder pair per domain around a
//! shared bottleneck, conditioned on a per-domain timestep.
//!
//! Encoder outputs are concatenated along the channel axis and passed through
//! the bottleneck (residual block, attention, residual block). Every decoder
//! reads the full bottleneck output plus its own encoder skips. Each domain
//! embeds its own timestep; the bottleneck sees the sum of all domains'
//! embeddings.

pub mod checkpoint;
pub mod optim;
mod params;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::kv::KvMap;
use crate::schedule::TimestepVector;
use crate::tensor::{Real, Tensor};

pub use params::{DomainLayout, ParamStore};
use params::{permute_blocks, ParamBuilder};

/// Shape of one view.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DataShape {
    Vector { features: usize },
    Image { channels: usize, size: usize },
}

impl DataShape {
    pub fn view_len(&self) -> usize {
        match *self {
            DataShape::Vector { features } => features,
            DataShape::Image { channels, size } => channels * size * size,
        }
    }

    pub fn batch_shape(&self, batch: usize) -> Vec<usize> {
        match *self {
            DataShape::Vector { features } => vec![batch, features],
            DataShape::Image { channels, size } => vec![batch, channels, size, size],
        }
    }

    fn data_channels(&self) -> usize {
        match *self {
            DataShape::Vector { features } => features,
            DataShape::Image { channels, .. } => channels,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DenoiserConfig {
    pub shape: DataShape,
    pub domains: usize,
    /// Hidden width (vector) or base channel count (image).
    pub width: usize,
    /// Channel multiplier per resolution level; image mode only.
    pub channel_mult: Vec<usize>,
    pub res_blocks: usize,
    pub groups: usize,
    /// Length of the sinusoidal timestep embedding.
    pub time_dim: usize,
    /// Token size for bottleneck attention in vector mode.
    pub attention_chunk: usize,
    /// Append a per-domain condition/target indicator to the input.
    pub condition_code: bool,
    pub init_seed: u64,
}

impl DenoiserConfig {
    pub fn vector(domains: usize, features: usize) -> Self {
        Self {
            shape: DataShape::Vector { features },
            domains,
            width: 128,
            channel_mult: vec![1],
            res_blocks: 1,
            groups: 8,
            time_dim: 64,
            attention_chunk: 128,
            condition_code: false,
            init_seed: 0,
        }
    }

    pub fn image(domains: usize, channels: usize, size: usize) -> Self {
        Self {
            shape: DataShape::Image { channels, size },
            domains,
            width: 32,
            channel_mult: vec![1, 2, 2],
            res_blocks: 2,
            groups: 8,
            time_dim: 32,
            attention_chunk: 0,
            condition_code: false,
            init_seed: 0,
        }
    }

    fn level_channels(&self) -> Vec<usize> {
        self.channel_mult.iter().map(|m| m * self.width).collect()
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::invalid(msg));
        if self.domains == 0 || self.width == 0 || self.groups == 0 || self.res_blocks == 0 {
            return bad("domains, width, groups and res_blocks must be positive".into());
        }
        if self.time_dim < 2 || !self.time_dim.is_multiple_of(2) {
            return bad(format!("time_dim must be even and >= 2, got {}", self.time_dim));
        }
        if !self.width.is_multiple_of(self.groups) {
            return bad(format!("{} groups do not divide width {}", self.groups, self.width));
        }
        match self.shape {
            DataShape::Vector { features } => {
                if features == 0 {
                    return bad("vector views need at least one feature".into());
                }
                let total = self.domains * self.width;
                if self.attention_chunk == 0 || !total.is_multiple_of(self.attention_chunk) {
                    return bad(format!(
                        "attention chunk {} must divide the bottleneck width {total}",
                        self.attention_chunk
                    ));
                }
            }
            DataShape::Image { channels, size } => {
                let levels = self.channel_mult.len();
                if levels == 0 || channels == 0 {
                    return bad("image mode needs at least one level and one channel".into());
                }
                if size % (1 << (levels - 1)) != 0 {
                    return bad(format!("size {size} is not divisible by 2^{}", levels - 1));
                }
                if self.level_channels().iter().any(|c| *c == 0 || c % self.groups != 0) {
                    return bad(format!("{} groups must divide every level width", self.groups));
                }
            }
        }
        Ok(())
    }

    pub fn to_kv(&self) -> KvMap {
        let mut kv = KvMap::new();
        match self.shape {
            DataShape::Vector { features } => {
                kv.set("model.shape", "vector");
                kv.set("model.features", features);
            }
            DataShape::Image { channels, size } => {
                kv.set("model.shape", "image");
                kv.set("model.channels", channels);
                kv.set("model.size", size);
            }
        }
        kv.set("model.domains", self.domains);
        kv.set("model.width", self.width);
        let mult: Vec<String> = self.channel_mult.iter().map(|m| m.to_string()).collect();
        kv.set("model.channel_mult", mult.join(","));
        kv.set("model.res_blocks", self.res_blocks);
        kv.set("model.groups", self.groups);
        kv.set("model.time_dim", self.time_dim);
        kv.set("model.attention_chunk", self.attention_chunk);
        kv.set("model.condition_code", self.condition_code);
        kv.set("model.init_seed", self.init_seed);
        kv
    }

    pub fn from_kv(kv: &KvMap) -> Result<Self> {
        let shape = match kv.require("model.shape")? {
            "vector" => DataShape::Vector {
                features: kv.parse("model.features")?,
            },
            "image" => DataShape::Image {
                channels: kv.parse("model.channels")?,
                size: kv.parse("model.size")?,
            },
            other => return Err(Error::format(format!("unknown model shape `{other}`"))),
        };
        let channel_mult = kv
            .require("model.channel_mult")?
            .split(',')
            .map(|s| s.trim().parse::<usize>().map_err(|_| Error::format("bad channel_mult")))
            .collect::<Result<Vec<_>>>()?;
        let cfg = Self {
            shape,
            domains: kv.parse("model.domains")?,
            width: kv.parse("model.width")?,
            channel_mult,
            res_blocks: kv.parse("model.res_blocks")?,
            groups: kv.parse("model.groups")?,
            time_dim: kv.parse("model.time_dim")?,
            attention_chunk: kv.parse("model.attention_chunk")?,
            condition_code: kv.parse("model.condition_code")?,
            init_seed: kv.parse("model.init_seed")?,
        };
        cfg.validate()?;
        Ok(cfg)
    }
}

#[derive(Debug, Clone, Copy)]
struct Lin {
    w: usize,
    b: usize,
}

#[derive(Debug, Clone, Copy)]
struct Conv {
    w: usize,
    b: usize,
    stride: usize,
}

#[derive(Debug, Clone, Copy)]
enum Layer {
    Lin(Lin),
    Conv(Conv),
}

#[derive(Debug, Clone, Copy)]
struct Norm {
    gamma: usize,
    beta: usize,
    groups: usize,
}

#[derive(Debug, Clone)]
struct ResBlock {
    norm1: Norm,
    map1: Layer,
    time: Lin,
    norm2: Norm,
    map2: Layer,
    skip: Option<Layer>,
}

#[derive(Debug, Clone)]
struct Attention {
    norm: Norm,
    q: Lin,
    k: Lin,
    v: Lin,
    out: Lin,
}

#[derive(Debug, Clone)]
struct EncoderLevel {
    blocks: Vec<ResBlock>,
    norm: Option<Norm>,
    down: Option<Conv>,
}

#[derive(Debug, Clone)]
struct DecoderLevel {
    blocks: Vec<ResBlock>,
    up: Option<Conv>,
}

#[derive(Debug, Clone)]
struct DomainNet {
    time1: Lin,
    time2: Lin,
    input: Layer,
    encoder: Vec<EncoderLevel>,
    from_bottleneck: Layer,
    decoder: Vec<DecoderLevel>,
    out_norm: Norm,
    out: Layer,
}

#[derive(Debug, Clone)]
struct Bottleneck {
    res1: ResBlock,
    attn: Attention,
    res2: ResBlock,
}

/// How a layer's parameters relate to domain identity.
#[derive(Debug, Clone, Copy)]
enum Tie {
    Domain(usize),
    /// Shared across domains, with channel axes made of per-domain blocks.
    Blocks(usize),
    Shared,
}

impl Tie {
    fn weight(self) -> DomainLayout {
        match self {
            Tie::Domain(d) => DomainLayout::owned(d),
            Tie::Blocks(cb) => DomainLayout::shared().blocked(0, cb).blocked(1, cb),
            Tie::Shared => DomainLayout::shared(),
        }
    }

    fn vector(self) -> DomainLayout {
        match self {
            Tie::Domain(d) => DomainLayout::owned(d),
            Tie::Blocks(cb) => DomainLayout::shared().blocked(0, cb),
            Tie::Shared => DomainLayout::shared(),
        }
    }

    /// Time projections read the (unblocked) embedding and write blocked channels.
    fn time_weight(self) -> DomainLayout {
        match self {
            Tie::Domain(d) => DomainLayout::owned(d),
            Tie::Blocks(cb) => DomainLayout::shared().blocked(1, cb),
            Tie::Shared => DomainLayout::shared(),
        }
    }
}

const OUT_GAIN: f64 = 0.1;

impl<F: Real> ParamBuilder<'_, F> {
    fn lin(&mut self, name: &str, fan_in: usize, fan_out: usize, w: DomainLayout, b: DomainLayout, gain: f64) -> Lin {
        Lin {
            w: self.uniform(format!("{name}.w"), &[fan_in, fan_out], fan_in, gain, w),
            b: self.constant(format!("{name}.b"), &[fan_out], 0.0, b),
        }
    }

    #[allow(clippy::too_many_arguments)]
    fn conv(&mut self, name: &str, cin: usize, cout: usize, k: usize, stride: usize, w: DomainLayout, b: DomainLayout, gain: f64) -> Conv {
        Conv {
            w: self.uniform(format!("{name}.w"), &[cout, cin, k, k], cin * k * k, gain, w),
            b: self.constant(format!("{name}.b"), &[cout], 0.0, b),
            stride,
        }
    }

    fn norm(&mut self, name: &str, channels: usize, groups: usize, tie: Tie) -> Norm {
        Norm {
            gamma: self.constant(format!("{name}.gamma"), &[channels], 1.0, tie.vector()),
            beta: self.constant(format!("{name}.beta"), &[channels], 0.0, tie.vector()),
            groups,
        }
    }

    /// A `cin -> cout` map; dense for vector mode, 3x3 convolution for images.
    fn map(&mut self, name: &str, image: bool, cin: usize, cout: usize, tie: Tie) -> Layer {
        if image {
            Layer::Conv(self.conv(name, cin, cout, 3, 1, tie.weight(), tie.vector(), 1.0))
        } else {
            Layer::Lin(self.lin(name, cin, cout, tie.weight(), tie.vector(), 1.0))
        }
    }

    #[allow(clippy::too_many_arguments)]
    fn res_block(&mut self, name: &str, image: bool, cin: usize, cout: usize, temb: usize, groups: usize, tie: Tie) -> ResBlock {
        let norm1 = self.norm(&format!("{name}.norm1"), cin, groups, tie);
        let map1 = self.map(&format!("{name}.map1"), image, cin, cout, tie);
        let time = self.lin(&format!("{name}.time"), temb, cout, tie.time_weight(), tie.vector(), 1.0);
        let norm2 = self.norm(&format!("{name}.norm2"), cout, groups, tie);
        let map2 = self.map(&format!("{name}.map2"), image, cout, cout, tie);
        let skip = (cin != cout).then(|| {
            let n = format!("{name}.skip");
            if image {
                Layer::Conv(self.conv(&n, cin, cout, 1, 1, tie.weight(), tie.vector(), 1.0))
            } else {
                Layer::Lin(self.lin(&n, cin, cout, tie.weight(), tie.vector(), 1.0))
            }
        });
        ResBlock {
            norm1,
            map1,
            time,
            norm2,
            map2,
            skip,
        }
    }
}

/// Trainable noise predictor `eps_theta(x_t, t)` with per-domain timesteps.
#[derive(Debug, Clone)]
pub struct Denoiser<F> {
    config: DenoiserConfig,
    params: ParamStore<F>,
    domains: Vec<DomainNet>,
    bottleneck: Bottleneck,
}

impl<F: Real> Denoiser<F> {
    pub fn new(config: DenoiserConfig) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.init_seed);
        let mut pb = ParamBuilder {
            store: ParamStore::new(),
            rng: &mut rng,
        };
        let m = config.domains;
        let image = matches!(config.shape, DataShape::Image { .. });
        let temb = config.width;
        let code = usize::from(config.condition_code);
        let data_ch = config.shape.data_channels();
        let levels = config.level_channels();
        let last = *levels.last().unwrap();
        let (g, gm) = (config.groups, config.groups * m);

        let mut domains = Vec::with_capacity(m);
        for d in 0..m {
            let tie = Tie::Domain(d);
            let p = |s: &str| format!("d{d}.{s}");
            let time1 = pb.lin(&p("time1"), config.time_dim, temb, tie.weight(), tie.vector(), 1.0);
            let time2 = pb.lin(&p("time2"), temb, temb, tie.weight(), tie.vector(), 1.0);
            let input = pb.map(&p("input"), image, data_ch + code, levels[0], tie);

            let mut encoder = Vec::new();
            let mut ch = levels[0];
            for (l, &lc) in levels.iter().enumerate() {
                let mut blocks = Vec::new();
                for r in 0..config.res_blocks {
                    blocks.push(pb.res_block(&p(&format!("enc{l}.res{r}")), image, ch, lc, temb, g, tie));
                    ch = lc;
                }
                let norm = image.then(|| pb.norm(&p(&format!("enc{l}.norm")), lc, g, tie));
                let down = (image && l + 1 < levels.len())
                    .then(|| pb.conv(&p(&format!("enc{l}.down")), lc, lc, 3, 2, tie.weight(), tie.vector(), 1.0));
                encoder.push(EncoderLevel { blocks, norm, down });
            }

            // Reads all m blocks of the bottleneck output.
            let from_bottleneck = if image {
                Layer::Conv(pb.conv(
                    &p("from_bottleneck"),
                    m * last,
                    last,
                    3,
                    1,
                    DomainLayout::owned(d).blocked(1, last),
                    tie.vector(),
                    1.0,
                ))
            } else {
                Layer::Lin(pb.lin(
                    &p("from_bottleneck"),
                    m * last,
                    last,
                    DomainLayout::owned(d).blocked(0, last),
                    tie.vector(),
                    1.0,
                ))
            };

            let mut decoder = Vec::new();
            if image {
                for l in (0..levels.len()).rev() {
                    let lc = levels[l];
                    let mut blocks = Vec::new();
                    let mut cin = 2 * lc;
                    for r in 0..config.res_blocks {
                        blocks.push(pb.res_block(&p(&format!("dec{l}.res{r}")), true, cin, lc, temb, g, tie));
                        cin = lc;
                    }
                    let up = (l > 0).then(|| {
                        pb.conv(&p(&format!("dec{l}.up")), lc, levels[l - 1], 3, 1, tie.weight(), tie.vector(), 1.0)
                    });
                    decoder.push(DecoderLevel { blocks, up });
                }
            } else {
                let blocks = (0..config.res_blocks)
                    .map(|r| pb.res_block(&p(&format!("dec.res{r}")), false, last, last, temb, g, tie))
                    .collect();
                decoder.push(DecoderLevel { blocks, up: None });
            }

            let out_norm = pb.norm(&p("out_norm"), levels[0], g, tie);
            let out = if image {
                Layer::Conv(pb.conv(&p("out"), levels[0], data_ch, 3, 1, tie.weight(), tie.vector(), OUT_GAIN))
            } else {
                Layer::Lin(pb.lin(&p("out"), levels[0], data_ch, tie.weight(), tie.vector(), OUT_GAIN))
            };

            domains.push(DomainNet {
                time1,
                time2,
                input,
                encoder,
                from_bottleneck,
                decoder,
                out_norm,
                out,
            });
        }

        let mid = m * last;
        let blocks = Tie::Blocks(last);
        let res1 = pb.res_block("mid.res1", image, mid, mid, temb, gm, blocks);
        let attn_tie = if image { blocks } else { Tie::Shared };
        let token = if image { mid } else { config.attention_chunk };
        let attn = Attention {
            norm: pb.norm("mid.attn.norm", mid, gm, blocks),
            q: pb.lin("mid.attn.q", token, token, attn_tie.weight(), attn_tie.vector(), 1.0),
            k: pb.lin("mid.attn.k", token, token, attn_tie.weight(), attn_tie.vector(), 1.0),
            v: pb.lin("mid.attn.v", token, token, attn_tie.weight(), attn_tie.vector(), 1.0),
            out: pb.lin("mid.attn.out", token, token, attn_tie.weight(), attn_tie.vector(), 1.0),
        };
        let res2 = pb.res_block("mid.res2", image, mid, mid, temb, gm, blocks);

        Ok(Self {
            params: pb.store,
            config,
            domains,
            bottleneck: Bottleneck { res1, attn, res2 },
        })
    }

    pub fn config(&self) -> &DenoiserConfig {
        &self.config
    }

    pub fn params(&self) -> &ParamStore<F> {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore<F> {
        &mut self.params
    }

    pub fn param_count(&self) -> usize {
        self.params.count()
    }

    /// Same architecture with parameters converted to another precision.
    pub fn cast<G: Real>(&self) -> Denoiser<G> {
        let mut params = ParamStore::new();
        for ((name, value), layout) in self.params.names().iter().zip(self.params.values()).zip(self.params.layouts()) {
            params.push(name.clone(), value.cast(), layout.clone());
        }
        Denoiser {
            config: self.config.clone(),
            params,
            domains: self.domains.clone(),
            bottleneck: self.bottleneck.clone(),
        }
    }

    /// Replaces all parameter values, checking names and shapes.
    pub fn load_params(&mut self, named: Vec<(String, Tensor<F>)>) -> Result<()> {
        if named.len() != self.params.len() {
            return Err(Error::format(format!(
                "expected {} parameter arrays, found {}",
                self.params.len(),
                named.len()
            )));
        }
        for (i, (name, value)) in named.into_iter().enumerate() {
            if self.params.names()[i] != name {
                return Err(Error::format(format!(
                    "parameter {i}: expected `{}`, found `{name}`",
                    self.params.names()[i]
                )));
            }
            if self.params.values()[i].shape() != value.shape() {
                return Err(Error::ShapeMismatch {
                    context: name,
                    expected: self.params.values()[i].shape().to_vec(),
                    got: value.shape().to_vec(),
                });
            }
            self.params.values_mut()[i] = value;
        }
        Ok(())
    }

    fn check_inputs(&self, x: &[Tensor<F>], tvecs: &[TimestepVector], codes: Option<&[Vec<bool>]>) -> Result<usize> {
        let m = self.config.domains;
        if x.len() != m {
            return Err(Error::LengthMismatch {
                context: "domain slots".into(),
                expected: m,
                got: x.len(),
            });
        }
        let batch = x[0].rows();
        if batch == 0 {
            return Err(Error::EmptyBatch);
        }
        let want = self.config.shape.batch_shape(batch);
        for (d, t) in x.iter().enumerate() {
            if t.shape() != want.as_slice() {
                return Err(Error::ShapeMismatch {
                    context: format!("input domain {d}"),
                    expected: want.clone(),
                    got: t.shape().to_vec(),
                });
            }
            if !t.is_finite() {
                return Err(Error::NonFinite(format!("input domain {d}")));
            }
        }
        if tvecs.len() != batch {
            return Err(Error::LengthMismatch {
                context: "timestep vectors".into(),
                expected: batch,
                got: tvecs.len(),
            });
        }
        if let Some(tv) = tvecs.iter().find(|tv| tv.len() != m) {
            return Err(Error::LengthMismatch {
                context: "timestep vector".into(),
                expected: m,
                got: tv.len(),
            });
        }
        if let Some(codes) = codes {
            if codes.len() != batch || codes.iter().any(|c| c.len() != m) {
                return Err(Error::invalid("condition codes must be batch x domains"));
            }
        }
        Ok(batch)
    }

    fn apply(&self, g: &mut Graph<'_, F>, layer: Layer, x: Var) -> Result<Var> {
        match layer {
            Layer::Lin(l) => {
                let (w, b) = (g.param(l.w), g.param(l.b));
                g.linear(x, w, b)
            }
            Layer::Conv(c) => {
                let (w, b) = (g.param(c.w), g.param(c.b));
                g.conv2d(x, w, b, c.stride)
            }
        }
    }

    fn norm(&self, g: &mut Graph<'_, F>, n: Norm, x: Var) -> Result<Var> {
        let (gamma, beta) = (g.param(n.gamma), g.param(n.beta));
        g.group_norm(x, gamma, beta, n.groups)
    }

    fn res_block(&self, g: &mut Graph<'_, F>, blk: &ResBlock, x: Var, temb_act: Var) -> Result<Var> {
        let h = self.norm(g, blk.norm1, x)?;
        let h = g.silu(h);
        let h = self.apply(g, blk.map1, h)?;
        let t = self.apply(g, Layer::Lin(blk.time), temb_act)?;
        let h = g.add_channel(h, t)?;
        let h = self.norm(g, blk.norm2, h)?;
        let h = g.silu(h);
        let h = self.apply(g, blk.map2, h)?;
        let skip = match blk.skip {
            Some(layer) => self.apply(g, layer, x)?,
            None => x,
        };
        g.add(h, skip)
    }

    fn attention(&self, g: &mut Graph<'_, F>, a: &Attention, x: Var) -> Result<Var> {
        let shape = g.shape(x).to_vec();
        let n = self.norm(g, a.norm, x)?;
        let tokens = match self.config.shape {
            DataShape::Image { .. } => g.channels_last(n),
            DataShape::Vector { .. } => {
                let chunk = self.config.attention_chunk;
                g.reshape(n, &[shape[0], shape[1] / chunk, chunk])?
            }
        };
        let q = self.apply(g, Layer::Lin(a.q), tokens)?;
        let k = self.apply(g, Layer::Lin(a.k), tokens)?;
        let v = self.apply(g, Layer::Lin(a.v), tokens)?;
        let att = g.attention(q, k, v)?;
        let o = self.apply(g, Layer::Lin(a.out), att)?;
        let back = match self.config.shape {
            DataShape::Image { .. } => g.channels_first(o, &shape)?,
            DataShape::Vector { .. } => g.reshape(o, &shape)?,
        };
        g.add(x, back)
    }

    fn time_input(&self, tvecs: &[TimestepVector], domain: usize) -> Tensor<F> {
        let half = self.config.time_dim / 2;
        let mut data = Vec::with_capacity(tvecs.len() * 2 * half);
        for tv in tvecs {
            let t = tv[domain] as f64;
            let freqs = (0..half).map(|i| (-(10_000f64.ln()) * i as f64 / half as f64).exp());
            let (sin, cos): (Vec<f64>, Vec<f64>) = freqs.map(|f| ((t * f).sin(), (t * f).cos())).unzip();
            data.extend(sin.into_iter().chain(cos).map(F::from_f64_lossy));
        }
        Tensor::from_vec(&[tvecs.len(), 2 * half], data).unwrap()
    }

    fn domain_input(&self, x: &Tensor<F>, codes: Option<&[Vec<bool>]>, domain: usize) -> Tensor<F> {
        if !self.config.condition_code {
            return x.clone();
        }
        let batch = x.rows();
        let row = x.row_len();
        let extra = match self.config.shape {
            DataShape::Vector { .. } => 1,
            DataShape::Image { size, .. } => size * size,
        };
        let mut data = Vec::with_capacity(batch * (row + extra));
        for n in 0..batch {
            data.extend_from_slice(x.row(n));
            let on = codes.is_some_and(|c| c[n][domain]);
            data.extend(std::iter::repeat_n(if on { F::one() } else { F::zero() }, extra));
        }
        let mut shape = x.shape().to_vec();
        shape[1] += 1;
        Tensor::from_vec(&shape, data).unwrap()
    }

    fn build(
        &self,
        g: &mut Graph<'_, F>,
        x: &[Tensor<F>],
        tvecs: &[TimestepVector],
        codes: Option<&[Vec<bool>]>,
    ) -> Result<Vec<Var>> {
        self.check_inputs(x, tvecs, codes)?;
        let m = self.config.domains;
        let image = matches!(self.config.shape, DataShape::Image { .. });

        let mut temb_acts = Vec::with_capacity(m);
        let mut temb_sum: Option<Var> = None;
        let mut skips: Vec<Vec<Var>> = Vec::with_capacity(m);
        let mut enc_out = Vec::with_capacity(m);
        for (d, net) in self.domains.iter().enumerate() {
            let tin = g.input(self.time_input(tvecs, d));
            let t = self.apply(g, Layer::Lin(net.time1), tin)?;
            let t = g.silu(t);
            let temb = self.apply(g, Layer::Lin(net.time2), t)?;
            temb_sum = Some(match temb_sum {
                None => temb,
                Some(s) => g.add(s, temb)?,
            });
            let temb_act = g.silu(temb);
            temb_acts.push(temb_act);

            let xin = g.input(self.domain_input(&x[d], codes, d));
            let mut h = self.apply(g, net.input, xin)?;
            let mut domain_skips = Vec::new();
            for level in &net.encoder {
                for blk in &level.blocks {
                    h = self.res_block(g, blk, h, temb_act)?;
                }
                if let Some(n) = level.norm {
                    h = self.norm(g, n, h)?;
                }
                domain_skips.push(h);
                if let Some(down) = level.down {
                    h = self.apply(g, Layer::Conv(down), h)?;
                }
            }
            skips.push(domain_skips);
            enc_out.push(h);
        }

        let mid_t = g.silu(temb_sum.expect("at least one domain"));
        let z = g.concat(&enc_out)?;
        let z = self.res_block(g, &self.bottleneck.res1, z, mid_t)?;
        let z = self.attention(g, &self.bottleneck.attn, z)?;
        let z = self.res_block(g, &self.bottleneck.res2, z, mid_t)?;

        let mut outs = Vec::with_capacity(m);
        for (d, net) in self.domains.iter().enumerate() {
            let mut h = self.apply(g, net.from_bottleneck, z)?;
            if image {
                let levels = skips[d].len();
                for (i, level) in net.decoder.iter().enumerate() {
                    let l = levels - 1 - i;
                    h = g.concat(&[h, skips[d][l]])?;
                    for blk in &level.blocks {
                        h = self.res_block(g, blk, h, temb_acts[d])?;
                    }
                    if let Some(up) = level.up {
                        h = g.upsample2x(h)?;
                        h = self.apply(g, Layer::Conv(up), h)?;
                    }
                }
            } else {
                h = g.add(h, skips[d][0])?;
                for blk in &net.decoder[0].blocks {
                    h = self.res_block(g, blk, h, temb_acts[d])?;
                }
            }
            let h = self.norm(g, net.out_norm, h)?;
            let h = g.silu(h);
            outs.push(self.apply(g, net.out, h)?);
        }
        Ok(outs)
    }

    /// Noise estimate per domain; output shapes equal input shapes.
    pub fn forward(&self, x: &[Tensor<F>], tvecs: &[TimestepVector], codes: Option<&[Vec<bool>]>) -> Result<Vec<Tensor<F>>> {
        let mut g = Graph::new(self.params.values());
        let outs = self.build(&mut g, x, tvecs, codes)?;
        let outs: Vec<Tensor<F>> = outs.into_iter().map(|v| g.value(v).clone()).collect();
        if let Some(d) = outs.iter().position(|t| !t.is_finite()) {
            return Err(Error::NonFinite(format!("network output for domain {d}")));
        }
        Ok(outs)
    }

    /// Masked mean squared error between predicted and target noise, with
    /// gradients for every parameter. `loss_mask[b][d]` selects the
    /// (sample, domain) views that contribute.
    pub fn loss_and_gradients(
        &self,
        x: &[Tensor<F>],
        tvecs: &[TimestepVector],
        codes: Option<&[Vec<bool>]>,
        eps_target: &[Tensor<F>],
        loss_mask: &[Vec<bool>],
    ) -> Result<(f64, Vec<Tensor<F>>)> {
        let batch = self.check_inputs(x, tvecs, codes)?;
        if eps_target.len() != x.len() {
            return Err(Error::LengthMismatch {
                context: "noise targets".into(),
                expected: x.len(),
                got: eps_target.len(),
            });
        }
        for (d, (t, xi)) in eps_target.iter().zip(x).enumerate() {
            if t.shape() != xi.shape() {
                return Err(Error::ShapeMismatch {
                    context: format!("noise target domain {d}"),
                    expected: xi.shape().to_vec(),
                    got: t.shape().to_vec(),
                });
            }
        }
        if loss_mask.len() != batch || loss_mask.iter().any(|r| r.len() != self.config.domains) {
            return Err(Error::invalid("loss mask must be batch x domains"));
        }
        let view = self.config.shape.view_len();
        let selected = loss_mask.iter().flatten().filter(|&&b| b).count();
        if selected == 0 {
            return Err(Error::EmptyObjective);
        }
        let count = (selected * view) as f64;

        let mut g = Graph::new(self.params.values());
        let outs = self.build(&mut g, x, tvecs, codes)?;
        let mut loss = 0.0f64;
        let mut seeds = Vec::with_capacity(outs.len());
        let scale = F::from_f64_lossy(2.0 / count);
        for (d, &o) in outs.iter().enumerate() {
            let pred = g.value(o);
            let mut grad = Tensor::zeros(pred.shape());
            for n in 0..batch {
                if !loss_mask[n][d] {
                    continue;
                }
                let (p, t) = (pred.row(n), eps_target[d].row(n));
                let gr = grad.row_mut(n);
                for i in 0..view {
                    let diff = p[i] - t[i];
                    loss += diff.to_f64().unwrap().powi(2);
                    gr[i] = diff * scale;
                }
            }
            seeds.push((o, grad));
        }
        let loss = loss / count;
        let grads = g.backward(seeds)?;
        Ok((loss, grads))
    }

    /// The network with domain `i` rewired to slot `perm[i]`: feeding it the
    /// permuted inputs yields the permuted outputs of `self`.
    pub fn permuted(&self, perm: &[usize]) -> Result<Self> {
        let m = self.config.domains;
        let mut seen = vec![false; m];
        if perm.len() != m || perm.iter().any(|&p| p >= m || std::mem::replace(&mut seen[p], true)) {
            return Err(Error::invalid(format!("{perm:?} is not a permutation of {m} domains")));
        }
        let mut out = self.clone();
        for i in 0..self.params.len() {
            let layout = &self.params.layouts()[i];
            let mut value = self.params.values()[i].clone();
            for &(axis, block) in &layout.blocked_axes {
                value = permute_blocks(&value, axis, block, perm);
            }
            let name = &self.params.names()[i];
            let target = match layout.owner {
                Some(d) => {
                    let renamed = format!("d{}{}", perm[d], &name[format!("d{d}").len()..]);
                    self.params
                        .index_of(&renamed)
                        .ok_or_else(|| Error::invalid(format!("no parameter `{renamed}`")))?
                }
                None => i,
            };
            out.params.values_mut()[target] = value;
        }
        Ok(out)
    }
}
