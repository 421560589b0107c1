//! Progressive-growing convolutional autoencoder built from pre-activation
//! residual blocks.
//!
//! Level `k` runs at `base_resolution * 2^k` pixels. The encoder of level `k`
//! maps `from_img_k` features through its residual blocks, a 1x1 channel
//! transition and a 2x2 average pool into level `k - 1`; level 0 ends in a
//! pooled linear projection onto the bottleneck vector. The decoder mirrors
//! this with bilinear upsampling followed by a 3x3 convolution. While level
//! `k` fades in, the encoder mixes `from_img_k` features with
//! `from_img_{k-1}(down(x))`, and the output mixes `to_img_k` with the
//! nearest-upsampled `to_img_{k-1}` image, both with weight `alpha` on the new
//! path. At `alpha = 0` the model therefore computes exactly
//! `upsample(g_{k-1}(down(x)))`.

use std::collections::BTreeMap;
use std::io::{Read, Write};
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::ops;
use crate::tape::{Tape, Var};
use crate::tensor::{Scalar, Tensor};

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"DPACKPT\0";
pub const CHECKPOINT_VERSION: u32 = 1;
const LEAK: f64 = 0.2;

pub type Params<F> = BTreeMap<String, Tensor<F>>;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub base_resolution: usize,
    pub target_resolution: usize,
    pub bottleneck_dim: usize,
    /// Channels at the target resolution; each coarser level doubles them up to `max_channels`.
    pub base_channels: usize,
    pub max_channels: usize,
    pub input_channels: usize,
    pub blocks_per_level: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            base_resolution: 8,
            target_resolution: 32,
            bottleneck_dim: 16,
            base_channels: 8,
            max_channels: 32,
            input_channels: 1,
            blocks_per_level: 2,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.base_resolution < 2 || self.base_resolution % 2 != 0 {
            return Err(Error::invalid("base_resolution must be even and >= 2"));
        }
        if self.target_resolution < self.base_resolution
            || self.target_resolution % self.base_resolution != 0
            || !(self.target_resolution / self.base_resolution).is_power_of_two()
        {
            return Err(Error::invalid(format!(
                "target_resolution {} must be base_resolution {} times a power of two",
                self.target_resolution, self.base_resolution
            )));
        }
        if self.bottleneck_dim == 0 || self.base_channels == 0 || self.max_channels == 0 {
            return Err(Error::invalid("bottleneck_dim and channel counts must be >= 1"));
        }
        if !matches!(self.input_channels, 1 | 3) {
            return Err(Error::invalid("input_channels must be 1 or 3"));
        }
        Ok(())
    }

    /// Index of the final level, `L` with `target = base * 2^L`.
    pub fn top_level(&self) -> usize {
        (self.target_resolution / self.base_resolution).trailing_zeros() as usize
    }

    pub fn resolution(&self, level: usize) -> usize {
        self.base_resolution << level
    }

    pub fn channels(&self, level: usize) -> usize {
        let shift = self.top_level().saturating_sub(level).min(16);
        (self.base_channels << shift).min(self.max_channels).max(1)
    }

    /// Level whose resolution is `res`, if any.
    pub fn level_of(&self, res: usize) -> Option<usize> {
        (0..=self.top_level()).find(|&k| self.resolution(k) == res)
    }
}

/// Progressive-growing position: the active level and the fade-in weight of its new layers.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BlendState {
    pub level: usize,
    pub alpha: f64,
}

impl BlendState {
    pub fn new(level: usize, alpha: f64) -> Result<Self> {
        let b = Self { level, alpha };
        b.validate()?;
        Ok(b)
    }

    /// Fully faded-in state at `level`.
    pub fn full(level: usize) -> Self {
        Self { level, alpha: 1.0 }
    }

    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.alpha) {
            return Err(Error::invalid(format!("alpha {} outside [0, 1]", self.alpha)));
        }
        if self.level == 0 && self.alpha != 1.0 {
            return Err(Error::invalid("level 0 has no fade-in: alpha must be 1"));
        }
        Ok(())
    }

    pub fn is_fading(&self) -> bool {
        self.level > 0 && self.alpha < 1.0
    }
}

/// `alpha * x + (1 - alpha) * upsample(down(x))`, with nearest-neighbour upsampling.
pub fn blend_input<F: Scalar>(x: &Tensor<F>, alpha: f64) -> Result<Tensor<F>> {
    if !(0.0..=1.0).contains(&alpha) {
        return Err(Error::invalid(format!("alpha {alpha} outside [0, 1]")));
    }
    let low = crate::loss::down(x)?;
    if alpha == 1.0 {
        return Ok(x.clone());
    }
    let up = ops::upsample_nearest2(&low);
    if alpha == 0.0 {
        return Ok(up);
    }
    let (a, b) = (F::of(alpha), F::of(1.0 - alpha));
    let data = x.data().iter().zip(up.data()).map(|(&p, &q)| a * p + b * q).collect();
    Tensor::new(x.shape().to_vec(), data)
}

#[derive(Debug, Clone, PartialEq)]
pub struct Autoencoder<F: Scalar> {
    config: ModelConfig,
    params: Params<F>,
    blend: BlendState,
    init_seed: u64,
}

fn he_normal<F: Scalar>(rng: &mut ChaCha8Rng, shape: &[usize], fan_in: usize, gain: f64) -> Tensor<F> {
    let std = gain * (2.0 / fan_in as f64).sqrt();
    let n: usize = shape.iter().product();
    let data = (0..n)
        .map(|_| {
            let z: f64 = StandardNormal.sample(rng);
            F::of(z * std)
        })
        .collect();
    Tensor::new(shape.to_vec(), data).unwrap()
}

fn level_rng(seed: u64, level: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(level as u64 + 1);
    rng
}

impl<F: Scalar> Autoencoder<F> {
    /// A model at level 0 (progressive growing starts here).
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut m = Self {
            config,
            params: Params::new(),
            blend: BlendState::full(0),
            init_seed: seed,
        };
        m.init_level(0);
        Ok(m)
    }

    /// A model with every level present, fixed at the target resolution.
    pub fn new_full(config: ModelConfig, seed: u64) -> Result<Self> {
        let mut m = Self::new(config, seed)?;
        for k in 1..=m.config.top_level() {
            m.init_level(k);
        }
        m.blend = BlendState::full(m.config.top_level());
        Ok(m)
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn blend(&self) -> BlendState {
        self.blend
    }

    pub fn level(&self) -> usize {
        self.blend.level
    }

    pub fn set_alpha(&mut self, alpha: f64) -> Result<()> {
        let b = BlendState::new(self.blend.level, alpha)?;
        self.blend = b;
        Ok(())
    }

    pub fn params(&self) -> &Params<F> {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut Params<F> {
        &mut self.params
    }

    pub fn num_parameters(&self) -> usize {
        self.params.values().map(Tensor::numel).sum()
    }

    pub fn is_fully_grown(&self) -> bool {
        self.blend.level == self.config.top_level() && self.blend.alpha == 1.0
    }

    fn has_level(&self, level: usize) -> bool {
        self.params.contains_key(&format!("L{level}.from_img.w"))
    }

    fn init_level(&mut self, k: usize) {
        let cfg = &self.config;
        let mut rng = level_rng(self.init_seed, k);
        let c = cfg.channels(k);
        let inc = cfg.input_channels;
        let mut p = Params::new();
        let conv = |p: &mut Params<F>, rng: &mut ChaCha8Rng, name: &str, co: usize, ci: usize, ks: usize, gain: f64| {
            p.insert(format!("{name}.w"), he_normal(rng, &[co, ci, ks, ks], ci * ks * ks, gain));
            p.insert(format!("{name}.b"), Tensor::zeros(&[co]));
        };
        conv(&mut p, &mut rng, &format!("L{k}.from_img"), c, inc, 1, 1.0);
        conv(&mut p, &mut rng, &format!("L{k}.to_img"), inc, c, 1, 0.5_f64.sqrt());
        for side in ["enc", "dec"] {
            for b in 0..cfg.blocks_per_level {
                conv(&mut p, &mut rng, &format!("L{k}.{side}.b{b}.c1"), c, c, 3, 1.0);
                conv(&mut p, &mut rng, &format!("L{k}.{side}.b{b}.c2"), c, c, 3, 0.5);
            }
        }
        if k == 0 {
            let q = cfg.base_resolution / 2;
            let flat = c * q * q;
            let z = cfg.bottleneck_dim;
            p.insert("L0.enc.fc.w".into(), he_normal(&mut rng, &[z, flat], flat, 0.5_f64.sqrt()));
            p.insert("L0.enc.fc.b".into(), Tensor::zeros(&[z]));
            p.insert("L0.dec.fc.w".into(), he_normal(&mut rng, &[flat, z], z, 1.0));
            p.insert("L0.dec.fc.b".into(), Tensor::zeros(&[flat]));
            conv(&mut p, &mut rng, "L0.dec.up", c, c, 3, 1.0);
        } else {
            let cp = cfg.channels(k - 1);
            conv(&mut p, &mut rng, &format!("L{k}.enc.down"), cp, c, 1, 1.0);
            conv(&mut p, &mut rng, &format!("L{k}.dec.up"), c, cp, 3, 1.0);
        }
        self.params.extend(p);
    }

    /// Add the next resolution level; existing parameters are untouched and the
    /// new level starts fully faded out (`alpha = 0`).
    pub fn grow(&mut self) -> Result<()> {
        if self.blend.level >= self.config.top_level() {
            return Err(Error::FullyGrown(self.config.target_resolution));
        }
        let next = self.blend.level + 1;
        if !self.has_level(next) {
            self.init_level(next);
        }
        self.blend = BlendState { level: next, alpha: 0.0 };
        Ok(())
    }

    fn check_blend(&self, blend: BlendState, res: usize) -> Result<()> {
        blend.validate()?;
        if blend.level > self.blend.level || !self.has_level(blend.level) {
            return Err(Error::invalid(format!(
                "model is at level {}, cannot run level {}",
                self.blend.level, blend.level
            )));
        }
        let expected = self.config.resolution(blend.level);
        if res != expected {
            return Err(Error::Resolution { expected, actual: res });
        }
        Ok(())
    }

    /// Record the forward pass of a batch `[N, C, H, W]` on `tape`.
    pub fn forward_on_tape(&self, tape: &mut Tape<F>, x: Var, blend: BlendState, trainable: bool) -> Result<Forward> {
        let shape = tape.value(x).shape().to_vec();
        if shape.len() != 4 || shape[1] != self.config.input_channels || shape[2] != shape[3] {
            return Err(Error::Shape(format!(
                "expected [N, {}, R, R] input, got {shape:?}",
                self.config.input_channels
            )));
        }
        self.check_blend(blend, shape[2])?;
        let mut g = Graph {
            tape,
            params: &self.params,
            vars: BTreeMap::new(),
            trainable,
            cfg: &self.config,
        };
        let k = blend.level;
        let a = blend.alpha;
        let mut h = if k == 0 {
            let h0 = g.conv("L0.from_img", x);
            g.enc_base(h0)
        } else {
            let hi = (a > 0.0).then(|| {
                let f = g.conv(&format!("L{k}.from_img"), x);
                g.enc_level(k, f)
            });
            let lo = (a < 1.0).then(|| {
                let d = g.tape.avg_pool2(x);
                g.conv(&format!("L{}.from_img", k - 1), d)
            });
            let mut h = mix(g.tape, hi, lo, a);
            for j in (1..k).rev() {
                h = g.enc_level(j, h);
            }
            g.enc_base(h)
        };
        let z = h;
        h = g.dec_base(z);
        for j in 1..k {
            h = g.dec_level(j, h);
        }
        let out = if k == 0 {
            g.to_img(0, h)
        } else {
            let hi = (a > 0.0).then(|| {
                let d = g.dec_level(k, h);
                g.to_img(k, d)
            });
            let lo = (a < 1.0).then(|| {
                let r = g.to_img(k - 1, h);
                g.tape.upsample_nearest2(r)
            });
            mix(g.tape, hi, lo, a)
        };
        Ok(Forward {
            output: out,
            bottleneck: z,
            params: g.vars,
        })
    }

    /// Reconstruct a batch `[N, C, H, W]`.
    pub fn reconstruct_batch(&self, x: &Tensor<F>, blend: BlendState) -> Result<Tensor<F>> {
        let mut tape = Tape::new();
        let xv = tape.constant(x.clone());
        let fwd = self.forward_on_tape(&mut tape, xv, blend, false)?;
        Ok(tape.value(fwd.output).clone())
    }

    /// Reconstruct a single `[C, H, W]` image.
    pub fn reconstruct(&self, x: &Tensor<F>, blend: BlendState) -> Result<Tensor<F>> {
        if x.ndim() != 3 {
            return Err(Error::Shape(format!("expected [C, H, W], got {:?}", x.shape())));
        }
        let mut shape = vec![1];
        shape.extend_from_slice(x.shape());
        let out = self.reconstruct_batch(&x.clone().reshape(&shape)?, blend)?;
        out.reshape(x.shape())
    }

    /// Bottleneck codes `[N, bottleneck_dim]` for a batch.
    pub fn encode_batch(&self, x: &Tensor<F>, blend: BlendState) -> Result<Tensor<F>> {
        let mut tape = Tape::new();
        let xv = tape.constant(x.clone());
        let fwd = self.forward_on_tape(&mut tape, xv, blend, false)?;
        Ok(tape.value(fwd.bottleneck).clone())
    }

    pub fn save_checkpoint(&self, path: &Path) -> Result<()> {
        let mut table = Vec::with_capacity(self.params.len());
        let mut blob = Vec::new();
        for (name, t) in &self.params {
            let bytes = F::to_le_bytes_vec(t.data());
            table.push(ParamEntry {
                name: name.clone(),
                shape: t.shape().to_vec(),
                offset: blob.len() as u64,
                len: bytes.len() as u64,
            });
            blob.extend_from_slice(&bytes);
        }
        let header = CheckpointHeader {
            dtype: F::DTYPE.to_string(),
            config: self.config.clone(),
            blend: self.blend,
            init_seed: self.init_seed,
            params: table,
        };
        let header = serde_json::to_vec(&header)?;
        let mut out = Vec::with_capacity(8 + 4 + 8 + header.len() + blob.len());
        out.extend_from_slice(CHECKPOINT_MAGIC);
        out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
        out.extend_from_slice(&(header.len() as u64).to_le_bytes());
        out.extend_from_slice(&header);
        out.extend_from_slice(&blob);
        let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        f.write_all(&out).map_err(|e| Error::io(path, e))
    }

    pub fn load_checkpoint(path: &Path) -> Result<Self> {
        let mut bytes = Vec::new();
        std::fs::File::open(path)
            .and_then(|mut f| f.read_to_end(&mut bytes))
            .map_err(|e| Error::io(path, e))?;
        Self::from_checkpoint_bytes(&bytes)
    }

    pub fn from_checkpoint_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < 20 || &bytes[..8] != CHECKPOINT_MAGIC {
            return Err(Error::Corrupt("missing checkpoint magic".into()));
        }
        let version = u32::from_le_bytes(bytes[8..12].try_into().unwrap());
        if version != CHECKPOINT_VERSION {
            return Err(Error::Version {
                found: version,
                expected: CHECKPOINT_VERSION,
            });
        }
        let hlen = u64::from_le_bytes(bytes[12..20].try_into().unwrap()) as usize;
        let body = &bytes[20..];
        if hlen > body.len() {
            return Err(Error::Corrupt("truncated header".into()));
        }
        let header: CheckpointHeader =
            serde_json::from_slice(&body[..hlen]).map_err(|e| Error::Corrupt(format!("header: {e}")))?;
        if header.dtype != F::DTYPE {
            return Err(Error::Corrupt(format!(
                "checkpoint holds {} parameters, requested {}",
                header.dtype,
                F::DTYPE
            )));
        }
        header.config.validate()?;
        header.blend.validate()?;
        let blob = &body[hlen..];
        let width = std::mem::size_of::<F>();
        let mut params = Params::new();
        for e in header.params {
            let (start, len) = (e.offset as usize, e.len as usize);
            let numel: usize = e.shape.iter().product();
            if start.checked_add(len).is_none_or(|end| end > blob.len()) || numel * width != len {
                return Err(Error::Corrupt(format!("parameter {} out of bounds", e.name)));
            }
            let data = F::from_le_bytes_slice(&blob[start..start + len]);
            params.insert(e.name, Tensor::new(e.shape, data)?);
        }
        let m = Self {
            config: header.config,
            params,
            blend: header.blend,
            init_seed: header.init_seed,
        };
        if !(0..=m.blend.level).all(|k| m.has_level(k)) {
            return Err(Error::Corrupt("checkpoint is missing parameters for its level".into()));
        }
        Ok(m)
    }
}

fn mix<F: Scalar>(tape: &mut Tape<F>, hi: Option<Var>, lo: Option<Var>, alpha: f64) -> Var {
    match (hi, lo) {
        (Some(h), Some(l)) => tape.lerp(h, l, F::of(alpha)),
        (Some(h), None) => h,
        (None, Some(l)) => l,
        (None, None) => unreachable!("one fade path is always active"),
    }
}

/// Handles produced by [`Autoencoder::forward_on_tape`].
pub struct Forward {
    pub output: Var,
    pub bottleneck: Var,
    /// Tape variable of every parameter touched by the pass.
    pub params: BTreeMap<String, Var>,
}

struct Graph<'a, 'b, F: Scalar> {
    tape: &'a mut Tape<F>,
    params: &'b Params<F>,
    vars: BTreeMap<String, Var>,
    trainable: bool,
    cfg: &'b ModelConfig,
}

impl<F: Scalar> Graph<'_, '_, F> {
    fn p(&mut self, name: &str) -> Var {
        if let Some(&v) = self.vars.get(name) {
            return v;
        }
        let t = self
            .params
            .get(name)
            .unwrap_or_else(|| panic!("missing parameter {name}"))
            .clone();
        let v = if self.trainable {
            self.tape.variable(t)
        } else {
            self.tape.constant(t)
        };
        self.vars.insert(name.to_string(), v);
        v
    }

    fn conv(&mut self, name: &str, x: Var) -> Var {
        let w = self.p(&format!("{name}.w"));
        let b = self.p(&format!("{name}.b"));
        self.tape.conv2d(x, w, Some(b))
    }

    fn act(&mut self, x: Var) -> Var {
        self.tape.leaky_relu(x, F::of(LEAK))
    }

    fn res_block(&mut self, name: &str, x: Var) -> Var {
        let a = self.act(x);
        let h = self.conv(&format!("{name}.c1"), a);
        let a = self.act(h);
        let h = self.conv(&format!("{name}.c2"), a);
        self.tape.add(x, h)
    }

    fn blocks(&mut self, prefix: &str, mut h: Var) -> Var {
        for b in 0..self.cfg.blocks_per_level {
            h = self.res_block(&format!("{prefix}.b{b}"), h);
        }
        h
    }

    /// Level `k > 0` encoder: resolution `r_k` to `r_{k-1}`.
    fn enc_level(&mut self, k: usize, h: Var) -> Var {
        let h = self.blocks(&format!("L{k}.enc"), h);
        let h = self.act(h);
        let h = self.conv(&format!("L{k}.enc.down"), h);
        self.tape.avg_pool2(h)
    }

    fn enc_base(&mut self, h: Var) -> Var {
        let h = self.blocks("L0.enc", h);
        let h = self.act(h);
        let h = self.tape.avg_pool2(h);
        let n = self.tape.value(h).shape()[0];
        let flat: usize = self.tape.value(h).shape()[1..].iter().product();
        let h = self.tape.reshape(h, &[n, flat]);
        let w = self.p("L0.enc.fc.w");
        let b = self.p("L0.enc.fc.b");
        self.tape.linear(h, w, Some(b))
    }

    fn dec_base(&mut self, z: Var) -> Var {
        let w = self.p("L0.dec.fc.w");
        let b = self.p("L0.dec.fc.b");
        let h = self.tape.linear(z, w, Some(b));
        let n = self.tape.value(h).shape()[0];
        let q = self.cfg.base_resolution / 2;
        let c = self.cfg.channels(0);
        let h = self.tape.reshape(h, &[n, c, q, q]);
        let h = self.tape.upsample_bilinear2(h);
        let h = self.conv("L0.dec.up", h);
        self.blocks("L0.dec", h)
    }

    /// Level `k > 0` decoder: resolution `r_{k-1}` to `r_k`.
    fn dec_level(&mut self, k: usize, h: Var) -> Var {
        let h = self.tape.upsample_bilinear2(h);
        let h = self.conv(&format!("L{k}.dec.up"), h);
        self.blocks(&format!("L{k}.dec"), h)
    }

    fn to_img(&mut self, k: usize, h: Var) -> Var {
        let h = self.act(h);
        self.conv(&format!("L{k}.to_img"), h)
    }
}

#[derive(Serialize, Deserialize)]
struct ParamEntry {
    name: String,
    shape: Vec<usize>,
    offset: u64,
    len: u64,
}

#[derive(Serialize, Deserialize)]
struct CheckpointHeader {
    dtype: String,
    config: ModelConfig,
    blend: BlendState,
    init_seed: u64,
    params: Vec<ParamEntry>,
}
