//! The segmentation network: windowed-attention encoder with four stages,
//! residual convolutional decoder with nearest-neighbour upsampling, and
//! three interchangeable heads (zones, masked reconstruction, translation).
//!
//! Data flow at the default configuration:
//!
//! ```text
//! SAR [N,1,512,512] -> replicate -> [N,3,512,512]
//!   patch embed /4  -> stage0 128x128
//!   merge /2        -> stage1  64x64
//!   merge /2        -> stage2  32x32
//!   merge /2        -> stage3  16x16
//! decoder: ResBlock, upsample x2, concat stage2 | ... | five upsamplings -> 512x512
//! zones head: 1x1 conv -> [N,4,512,512]
//! ```
//!
//! Attention blocks use post-normalised residuals: `x + LN(attn(x))` then
//! `x + LN(mlp(x))`.

use std::fmt::Write as _;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::raster::{ConfidenceMap, Zone};
use crate::tensor::{
    depth_to_space, nchw_to_nhwc, nhwc_to_nchw, softmax_channel, space_to_depth, window_attention, Array,
    AttentionParams, Bound, Graph, ParamStore, Var,
};

/// Output head attached to the network.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum Head {
    #[default]
    Zones,
    Simmim,
    Translator,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StageConfig {
    pub depth: usize,
    pub dim: usize,
    pub heads: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub input_size: usize,
    pub inner_size: usize,
    pub window: usize,
    pub patch_embed: usize,
    pub stages: Vec<StageConfig>,
    pub mlp_ratio: usize,
    /// Output channels of each decoder residual block, deepest first; one
    /// entry per upsampling step plus one for the final block.
    pub decoder_channels: Vec<usize>,
    /// Encoder stages (0..=2) concatenated into the decoder.
    pub skip_stages: Vec<usize>,
    /// Upper bound on GroupNorm groups; the actual count is
    /// `gcd(norm_groups, channels)`.
    pub norm_groups: usize,
    pub rel_pos_bias: bool,
    pub num_classes: usize,
    pub optical_channels: usize,
    pub head: Head,
}

fn stage(depth: usize, dim: usize, heads: usize) -> StageConfig {
    StageConfig { depth, dim, heads }
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            input_size: 512,
            inner_size: 256,
            window: 16,
            patch_embed: 4,
            stages: vec![stage(2, 96, 3), stage(2, 192, 6), stage(6, 384, 12), stage(2, 768, 24)],
            mlp_ratio: 4,
            decoder_channels: vec![384, 192, 96, 64, 32, 32],
            skip_stages: vec![0, 1, 2],
            norm_groups: 8,
            rel_pos_bias: true,
            num_classes: 4,
            optical_channels: 14,
            head: Head::Zones,
        }
    }
}

fn gcd(a: usize, b: usize) -> usize {
    if b == 0 {
        a
    } else {
        gcd(b, a % b)
    }
}

impl ModelConfig {
    /// Desk-scale configuration: 64 px input, 32 px inner crop.
    pub fn toy() -> Self {
        ModelConfig {
            input_size: 64,
            inner_size: 32,
            window: 4,
            patch_embed: 2,
            stages: vec![stage(1, 8, 1), stage(1, 16, 2), stage(1, 32, 2), stage(1, 32, 4)],
            mlp_ratio: 2,
            decoder_channels: vec![32, 16, 16, 8, 8],
            skip_stages: vec![0, 1, 2],
            norm_groups: 4,
            rel_pos_bias: true,
            num_classes: 4,
            optical_channels: 14,
            head: Head::Zones,
        }
    }

    /// Number of 2x upsamplings from the deepest map to full resolution.
    pub fn num_upsamples(&self) -> usize {
        3 + self.patch_embed.trailing_zeros() as usize
    }

    /// Spatial size of each encoder stage output.
    pub fn stage_sizes(&self) -> [usize; 4] {
        std::array::from_fn(|i| self.input_size / (self.patch_embed << i))
    }

    /// Upscaling factor of the masked-reconstruction head.
    pub fn simmim_scale(&self) -> usize {
        self.patch_embed * 8
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.num_classes != Zone::COUNT {
            return bad(format!("num_classes must be {}, got {}", Zone::COUNT, self.num_classes));
        }
        if self.optical_channels == 0 {
            return bad("optical_channels must be positive".into());
        }
        if self.stages.len() != 4 {
            return bad(format!("exactly 4 encoder stages required, got {}", self.stages.len()));
        }
        if self.patch_embed == 0 || !self.patch_embed.is_power_of_two() {
            return bad(format!("patch_embed must be a power of two, got {}", self.patch_embed));
        }
        if self.window == 0 {
            return bad("window must be positive".into());
        }
        let granularity = self.patch_embed * 8 * self.window;
        if self.input_size == 0 || self.input_size % granularity != 0 {
            return bad(format!(
                "input_size {} must be a multiple of patch_embed*8*window = {granularity}",
                self.input_size
            ));
        }
        if self.inner_size == 0 || self.inner_size >= self.input_size || self.inner_size % 2 != 0 || self.input_size % 2 != 0
        {
            return bad(format!(
                "inner_size {} must be even, positive and smaller than input_size {}",
                self.inner_size, self.input_size
            ));
        }
        for (i, s) in self.stages.iter().enumerate() {
            if s.depth == 0 || s.dim == 0 || s.heads == 0 || s.dim % s.heads != 0 {
                return bad(format!("stage {i}: depth {}, dim {} and heads {} invalid", s.depth, s.dim, s.heads));
            }
        }
        if self.mlp_ratio == 0 || self.norm_groups == 0 {
            return bad("mlp_ratio and norm_groups must be positive".into());
        }
        let want = self.num_upsamples() + 1;
        if self.decoder_channels.len() != want || self.decoder_channels.contains(&0) {
            return bad(format!(
                "decoder_channels needs {want} positive entries, got {:?}",
                self.decoder_channels
            ));
        }
        if let Some(s) = self.skip_stages.iter().find(|&&s| s > 2) {
            return bad(format!("skip stage {s} out of range 0..=2"));
        }
        Ok(())
    }

    /// Channels entering decoder block `level` (0 = deepest).
    fn decoder_in_channels(&self, level: usize) -> usize {
        if level == 0 {
            return self.stages[3].dim;
        }
        let prev = self.decoder_channels[level - 1];
        prev + self.skip_after(level - 1).map_or(0, |s| self.stages[s].dim)
    }

    /// Encoder stage fused after upsampling step `level`, if any.
    fn skip_after(&self, level: usize) -> Option<usize> {
        let s = 2usize.checked_sub(level)?;
        self.skip_stages.contains(&s).then_some(s)
    }

    fn groups(&self, channels: usize) -> usize {
        gcd(self.norm_groups, channels)
    }
}

/// Shape and initialiser of every parameter, in name order.
#[derive(Debug, Clone, Copy, PartialEq)]
enum Init {
    /// Normal with the given standard deviation.
    Normal(f64),
    Zeros,
    Ones,
}

fn param_specs(cfg: &ModelConfig) -> Vec<(String, Vec<usize>, Init)> {
    let mut v: Vec<(String, Vec<usize>, Init)> = Vec::new();
    let lin = |fan_in: usize| Init::Normal((1.0 / fan_in as f64).sqrt());
    let conv = |fan_in: usize| Init::Normal((2.0 / fan_in as f64).sqrt());

    let p = cfg.patch_embed;
    let d0 = cfg.stages[0].dim;
    v.push(("encoder.embed.w".into(), vec![3 * p * p, d0], lin(3 * p * p)));
    v.push(("encoder.embed.b".into(), vec![d0], Init::Zeros));
    v.push(("encoder.embed.norm.g".into(), vec![d0], Init::Ones));
    v.push(("encoder.embed.norm.b".into(), vec![d0], Init::Zeros));
    for (i, s) in cfg.stages.iter().enumerate() {
        let c = s.dim;
        if i > 0 {
            let cin = 4 * cfg.stages[i - 1].dim;
            v.push((format!("encoder.s{i}.merge.w"), vec![cin, c], lin(cin)));
            v.push((format!("encoder.s{i}.merge.norm.g"), vec![c], Init::Ones));
            v.push((format!("encoder.s{i}.merge.norm.b"), vec![c], Init::Zeros));
        }
        for j in 0..s.depth {
            let b = format!("encoder.s{i}.b{j}");
            v.push((format!("{b}.attn.qkv.w"), vec![c, 3 * c], lin(c)));
            v.push((format!("{b}.attn.qkv.b"), vec![3 * c], Init::Zeros));
            v.push((format!("{b}.attn.proj.w"), vec![c, c], lin(c)));
            v.push((format!("{b}.attn.proj.b"), vec![c], Init::Zeros));
            if cfg.rel_pos_bias {
                let span = 2 * cfg.window - 1;
                v.push((format!("{b}.attn.rel_bias"), vec![span * span, s.heads], Init::Normal(0.02)));
            }
            v.push((format!("{b}.norm1.g"), vec![c], Init::Ones));
            v.push((format!("{b}.norm1.b"), vec![c], Init::Zeros));
            let hidden = cfg.mlp_ratio * c;
            v.push((format!("{b}.mlp.fc1.w"), vec![c, hidden], lin(c)));
            v.push((format!("{b}.mlp.fc1.b"), vec![hidden], Init::Zeros));
            v.push((format!("{b}.mlp.fc2.w"), vec![hidden, c], lin(hidden)));
            v.push((format!("{b}.mlp.fc2.b"), vec![c], Init::Zeros));
            v.push((format!("{b}.norm2.g"), vec![c], Init::Ones));
            v.push((format!("{b}.norm2.b"), vec![c], Init::Zeros));
        }
    }

    if cfg.head != Head::Simmim {
        for level in 0..=cfg.num_upsamples() {
            let cin = cfg.decoder_in_channels(level);
            let cout = cfg.decoder_channels[level];
            let b = format!("decoder.r{level}");
            v.push((format!("{b}.norm1.g"), vec![cin], Init::Ones));
            v.push((format!("{b}.norm1.b"), vec![cin], Init::Zeros));
            v.push((format!("{b}.conv1.w"), vec![cout, cin, 3, 3], conv(9 * cin)));
            v.push((format!("{b}.conv1.b"), vec![cout], Init::Zeros));
            v.push((format!("{b}.norm2.g"), vec![cout], Init::Ones));
            v.push((format!("{b}.norm2.b"), vec![cout], Init::Zeros));
            v.push((format!("{b}.conv2.w"), vec![cout, cout, 3, 3], conv(9 * cout)));
            v.push((format!("{b}.conv2.b"), vec![cout], Init::Zeros));
            if cin != cout {
                v.push((format!("{b}.skip.w"), vec![cout, cin, 1, 1], lin(cin)));
                v.push((format!("{b}.skip.b"), vec![cout], Init::Zeros));
            }
        }
    }

    let last = *cfg.decoder_channels.last().unwrap_or(&1);
    match cfg.head {
        Head::Zones => {
            v.push(("head.zones.w".into(), vec![cfg.num_classes, last, 1, 1], lin(last)));
            v.push(("head.zones.b".into(), vec![cfg.num_classes], Init::Zeros));
        }
        Head::Translator => {
            v.push(("head.translator.w".into(), vec![cfg.optical_channels, last, 1, 1], lin(last)));
            v.push(("head.translator.b".into(), vec![cfg.optical_channels], Init::Zeros));
        }
        Head::Simmim => {
            let d = cfg.stages[3].dim;
            let out = cfg.optical_channels * cfg.simmim_scale().pow(2);
            v.push(("head.simmim.w".into(), vec![d, out], lin(d)));
            v.push(("head.simmim.b".into(), vec![out], Init::Zeros));
        }
    }
    v.sort_by(|a, b| a.0.cmp(&b.0));
    v
}

/// Per-name seed, so adding or removing a parameter leaves the others intact.
fn name_seed(seed: u64, name: &str) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325 ^ seed;
    for b in name.bytes() {
        h ^= b as u64;
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h
}

/// Total number of trainable scalars for `cfg`.
pub fn param_count(cfg: &ModelConfig) -> usize {
    param_specs(cfg).iter().map(|(_, s, _)| s.iter().product::<usize>()).sum()
}

/// Network parameters plus their configuration.
#[derive(Debug, Clone, PartialEq)]
pub struct Tyrion {
    pub cfg: ModelConfig,
    pub params: ParamStore,
}

/// Report of [`Tyrion::load_matching`].
#[derive(Debug, Clone, Default, PartialEq)]
pub struct LoadReport {
    pub loaded: Vec<String>,
    /// Present in the source but absent or shaped differently here.
    pub skipped: Vec<String>,
}

impl Tyrion {
    pub fn new(cfg: ModelConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut params = ParamStore::new();
        for (name, shape, init) in param_specs(&cfg) {
            let arr = match init {
                Init::Zeros => Array::zeros(&shape),
                Init::Ones => Array::full(&shape, 1.0),
                Init::Normal(std) => {
                    let mut rng = ChaCha8Rng::seed_from_u64(name_seed(seed, &name));
                    Array::from_fn(&shape, |_| {
                        let z: f64 = StandardNormal.sample(&mut rng);
                        z * std
                    })
                }
            };
            params.insert(name, arr);
        }
        Ok(Tyrion { cfg, params })
    }

    /// Builds a model from a parameter store, checking it has exactly the
    /// expected names and shapes.
    pub fn from_params(cfg: ModelConfig, params: ParamStore) -> Result<Self> {
        cfg.validate()?;
        let specs = param_specs(&cfg);
        if specs.len() != params.len() {
            return Err(Error::Checkpoint(format!(
                "checkpoint has {} arrays, configuration expects {}",
                params.len(),
                specs.len()
            )));
        }
        for (name, shape, _) in &specs {
            match params.get(name) {
                Some(a) if a.shape() == shape.as_slice() => {}
                Some(a) => {
                    return Err(Error::Checkpoint(format!("{name}: shape {:?}, expected {shape:?}", a.shape())))
                }
                None => return Err(Error::Checkpoint(format!("missing array {name}"))),
            }
        }
        Ok(Tyrion { cfg, params })
    }

    /// Copies every array of `src` whose name and shape match.
    pub fn load_matching(&mut self, src: &ParamStore) -> LoadReport {
        let mut report = LoadReport::default();
        for (name, arr) in src.iter() {
            match self.params.get_mut(name) {
                Some(dst) if dst.shape() == arr.shape() => {
                    *dst = arr.clone();
                    report.loaded.push(name.clone());
                }
                _ => report.skipped.push(name.clone()),
            }
        }
        report
    }

    pub fn num_params(&self) -> usize {
        self.params.num_values()
    }

    /// SAR `[N,1,S,S]` to head output. Zones and translator heads give
    /// `[N,C,S,S]` from the decoder; the reconstruction head upsamples the
    /// deepest encoder map directly.
    pub fn forward(&self, g: &mut Graph, b: &Bound, sar: Var) -> Result<Var> {
        let s = g.shape(sar).to_vec();
        if s.len() != 4 || s[2] != self.cfg.input_size || s[3] != self.cfg.input_size {
            return Err(Error::Config(format!(
                "model expects [N,1,{0},{0}] input, got {s:?}",
                self.cfg.input_size
            )));
        }
        let x = replicate_channels(g, sar)?;
        let feats = encoder_forward(g, b, &self.cfg, x)?;
        match self.cfg.head {
            Head::Simmim => simmim_head(g, b, &self.cfg, feats[3]),
            Head::Zones => {
                let d = decoder_features(g, b, &self.cfg, &feats)?;
                conv_head(g, b, d, "head.zones")
            }
            Head::Translator => {
                let d = decoder_features(g, b, &self.cfg, &feats)?;
                conv_head(g, b, d, "head.translator")
            }
        }
    }

    /// Softmax confidences of a single SAR patch `[S,S]` (zones head only).
    pub fn predict_confidence(&self, sar: &Array) -> Result<ConfidenceMap> {
        if self.cfg.head != Head::Zones {
            return Err(Error::Config("confidence maps need the zones head".into()));
        }
        let s = self.cfg.input_size;
        if sar.shape() != [s, s] {
            return Err(Error::Config(format!("expected a {s}x{s} patch, got {:?}", sar.shape())));
        }
        let mut g = Graph::new();
        let b = self.params.bind(&mut g, false);
        let x = g.constant(sar.clone().reshaped(&[1, 1, s, s])?);
        let logits = self.forward(&mut g, &b, x)?;
        let probs = softmax_channel(&mut g, logits)?;
        ConfidenceMap::new(s, s, g.value(probs).data().to_vec())
    }

    /// Text summary: configuration, stage sizes and per-array shapes.
    pub fn summary(&self) -> String {
        let cfg = &self.cfg;
        let mut out = String::new();
        let _ = writeln!(out, "model: input {0}x{0}, inner {1}x{1}, head {2:?}", cfg.input_size, cfg.inner_size, cfg.head);
        let sizes = cfg.stage_sizes();
        for (i, s) in cfg.stages.iter().enumerate() {
            let _ = writeln!(
                out,
                "  stage {i}: {0}x{0}x{1}, depth {2}, heads {3}, window {4}",
                sizes[i], s.dim, s.depth, s.heads, cfg.window
            );
        }
        let _ = writeln!(
            out,
            "  decoder: {} upsamplings, channels {:?}, skips {:?}",
            cfg.num_upsamples(),
            cfg.decoder_channels,
            cfg.skip_stages
        );
        let mut groups: std::collections::BTreeMap<&str, usize> = Default::default();
        for (name, arr) in self.params.iter() {
            let _ = writeln!(out, "  {name:<40} {:>18} {:>10}", format!("{:?}", arr.shape()), arr.len());
            let top = name.split('.').next().unwrap_or("");
            *groups.entry(top).or_default() += arr.len();
        }
        for (k, n) in groups {
            let _ = writeln!(out, "  total {k:<34} {n:>29}");
        }
        if cfg.head == Head::Simmim {
            let d = cfg.stages[3].dim;
            let k = cfg.optical_channels * cfg.simmim_scale().pow(2);
            let _ = writeln!(out, "  simmim head: {d}*{k} + {k} = {}", d * k + k);
        }
        let _ = writeln!(out, "parameters: {}", self.num_params());
        out
    }
}

/// `[N,1,H,W]` -> `[N,3,H,W]` with identical channels.
pub fn replicate_channels(g: &mut Graph, x: Var) -> Result<Var> {
    let s = g.shape(x);
    if s.len() != 4 || s[1] != 1 {
        return Err(Error::contract("replicate_channels", format!("expected [N,1,H,W], got {s:?}")));
    }
    g.concat(&[x, x, x], 1)
}

/// Centred `inner x inner` crop of the last two axes.
pub fn crop_inner(g: &mut Graph, t: Var, inner: usize) -> Result<Var> {
    let s = g.shape(t).to_vec();
    let nd = s.len();
    if nd < 2 || s[nd - 1] != s[nd - 2] {
        return Err(Error::contract("crop_inner", format!("expected square trailing axes, got {s:?}")));
    }
    let size = s[nd - 1];
    if inner > size || (size - inner) % 2 != 0 {
        return Err(Error::contract("crop_inner", format!("cannot centre {inner} inside {size}")));
    }
    let off = (size - inner) / 2;
    let t = g.narrow(t, nd - 2, off, inner)?;
    g.narrow(t, nd - 1, off, inner)
}

fn layer_norm(g: &mut Graph, b: &Bound, x: Var, prefix: &str) -> Result<Var> {
    let gamma = b.get(&format!("{prefix}.g"));
    let beta = b.get(&format!("{prefix}.b"));
    g.layer_norm(x, gamma, beta)
}

fn dense(g: &mut Graph, b: &Bound, x: Var, prefix: &str) -> Result<Var> {
    let y = g.linear(x, b.get(&format!("{prefix}.w")))?;
    match b.try_get(&format!("{prefix}.b")) {
        Some(bias) => g.add_broadcast(y, bias),
        None => Ok(y),
    }
}

fn swin_block(g: &mut Graph, b: &Bound, cfg: &ModelConfig, x: Var, heads: usize, prefix: &str) -> Result<Var> {
    let p = AttentionParams {
        qkv_w: b.get(&format!("{prefix}.attn.qkv.w")),
        qkv_b: b.get(&format!("{prefix}.attn.qkv.b")),
        proj_w: b.get(&format!("{prefix}.attn.proj.w")),
        proj_b: b.get(&format!("{prefix}.attn.proj.b")),
        rel_bias: b.try_get(&format!("{prefix}.attn.rel_bias")),
    };
    let a = window_attention(g, x, cfg.window, heads, &p)?;
    let a = layer_norm(g, b, a, &format!("{prefix}.norm1"))?;
    let x = g.add(x, a)?;
    let h = dense(g, b, x, &format!("{prefix}.mlp.fc1"))?;
    let h = g.gelu(h)?;
    let h = dense(g, b, h, &format!("{prefix}.mlp.fc2"))?;
    let h = layer_norm(g, b, h, &format!("{prefix}.norm2"))?;
    g.add(x, h)
}

/// Encoder on `[N,3,S,S]`; returns the four stage outputs in NCHW.
pub fn encoder_forward(g: &mut Graph, b: &Bound, cfg: &ModelConfig, x: Var) -> Result<Vec<Var>> {
    let s = g.shape(x).to_vec();
    if s.len() != 4 || s[1] != 3 || s[2] != cfg.input_size || s[3] != cfg.input_size {
        return Err(Error::Config(format!(
            "encoder expects [N,3,{0},{0}], got {s:?}",
            cfg.input_size
        )));
    }
    let t = space_to_depth(g, x, cfg.patch_embed)?;
    let t = nchw_to_nhwc(g, t)?;
    let t = dense(g, b, t, "encoder.embed")?;
    let mut t = layer_norm(g, b, t, "encoder.embed.norm")?;
    let mut feats = Vec::with_capacity(4);
    for (i, st) in cfg.stages.iter().enumerate() {
        if i > 0 {
            let c = nhwc_to_nchw(g, t)?;
            let c = space_to_depth(g, c, 2)?;
            let c = nchw_to_nhwc(g, c)?;
            let c = dense(g, b, c, &format!("encoder.s{i}.merge"))?;
            t = layer_norm(g, b, c, &format!("encoder.s{i}.merge.norm"))?;
        }
        for j in 0..st.depth {
            t = swin_block(g, b, cfg, t, st.heads, &format!("encoder.s{i}.b{j}"))?;
        }
        feats.push(nhwc_to_nchw(g, t)?);
    }
    Ok(feats)
}

/// Norm, SiLU and 3x3 convolution, twice, plus an identity or 1x1 skip.
pub fn resnet_block(g: &mut Graph, b: &Bound, cfg: &ModelConfig, x: Var, prefix: &str) -> Result<Var> {
    let cin = g.shape(x)[1];
    let conv = |g: &mut Graph, h: Var, name: &str, pad: usize| -> Result<Var> {
        let y = g.conv2d(h, b.get(&format!("{prefix}.{name}.w")), 1, pad)?;
        g.add_channel_bias(y, b.get(&format!("{prefix}.{name}.b")))
    };
    let h = g.group_norm(x, cfg.groups(cin), b.get(&format!("{prefix}.norm1.g")), b.get(&format!("{prefix}.norm1.b")))?;
    let h = g.silu(h)?;
    let h = conv(g, h, "conv1", 1)?;
    let cout = g.shape(h)[1];
    let h = g.group_norm(h, cfg.groups(cout), b.get(&format!("{prefix}.norm2.g")), b.get(&format!("{prefix}.norm2.b")))?;
    let h = g.silu(h)?;
    let h = conv(g, h, "conv2", 1)?;
    let skip = if b.try_get(&format!("{prefix}.skip.w")).is_some() { conv(g, x, "skip", 0)? } else { x };
    g.add(skip, h)
}

/// Decoder on the encoder stages; returns full-resolution features.
pub fn decoder_features(g: &mut Graph, b: &Bound, cfg: &ModelConfig, feats: &[Var]) -> Result<Var> {
    let mut x = feats[3];
    for level in 0..cfg.num_upsamples() {
        x = resnet_block(g, b, cfg, x, &format!("decoder.r{level}"))?;
        x = g.nearest_upsample2x(x)?;
        if let Some(s) = cfg.skip_after(level) {
            x = g.concat(&[x, feats[s]], 1)?;
        }
    }
    resnet_block(g, b, cfg, x, &format!("decoder.r{}", cfg.num_upsamples()))
}

/// Decoder plus zones head: `[N,4,S,S]` logits.
pub fn decoder_forward(g: &mut Graph, b: &Bound, cfg: &ModelConfig, feats: &[Var]) -> Result<Var> {
    let d = decoder_features(g, b, cfg, feats)?;
    conv_head(g, b, d, "head.zones")
}

fn conv_head(g: &mut Graph, b: &Bound, x: Var, prefix: &str) -> Result<Var> {
    let y = g.conv2d(x, b.get(&format!("{prefix}.w")), 1, 0)?;
    g.add_channel_bias(y, b.get(&format!("{prefix}.b")))
}

/// One linear layer on the deepest map followed by depth-to-space.
pub fn simmim_head(g: &mut Graph, b: &Bound, cfg: &ModelConfig, deepest: Var) -> Result<Var> {
    let t = nchw_to_nhwc(g, deepest)?;
    let t = dense(g, b, t, "head.simmim")?;
    let t = nhwc_to_nchw(g, t)?;
    depth_to_space(g, t, cfg.simmim_scale())
}

/// Single 1x1 convolution from decoder features to optical channels.
pub fn translator_head(g: &mut Graph, b: &Bound, decoder_out: Var) -> Result<Var> {
    conv_head(g, b, decoder_out, "head.translator")
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::grad_check_multi;
    use proptest::prelude::*;
    use rand::Rng;

    fn random(shape: &[usize], seed: u64) -> Array {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Array::from_fn(shape, |_| rng.random_range(-1.0..1.0))
    }

    fn tiny(head: Head) -> ModelConfig {
        ModelConfig {
            input_size: 32,
            inner_size: 16,
            window: 2,
            patch_embed: 2,
            stages: vec![stage(1, 4, 1), stage(1, 8, 2), stage(1, 8, 2), stage(1, 8, 2)],
            mlp_ratio: 2,
            decoder_channels: vec![8, 8, 4, 4, 4],
            skip_stages: vec![0, 1, 2],
            norm_groups: 2,
            rel_pos_bias: true,
            num_classes: 4,
            optical_channels: 14,
            head,
        }
    }

    #[test]
    fn default_and_toy_configs_are_valid() {
        ModelConfig::default().validate().unwrap();
        ModelConfig::toy().validate().unwrap();
        assert_eq!(ModelConfig::default().stage_sizes(), [128, 64, 32, 16]);
        assert_eq!(ModelConfig::default().num_upsamples(), 5);
        let c = ModelConfig { input_size: 256, inner_size: 128, window: 8, ..ModelConfig::default() };
        c.validate().unwrap();
        assert_eq!(c.stage_sizes()[3], 8);
    }

    #[test]
    fn invalid_configs_are_rejected() {
        let base = ModelConfig::toy();
        let cases = [
            ModelConfig { num_classes: 5, ..base.clone() },
            ModelConfig { input_size: 48, ..base.clone() },
            ModelConfig { inner_size: 64, ..base.clone() },
            ModelConfig { inner_size: 31, ..base.clone() },
            ModelConfig { patch_embed: 3, ..base.clone() },
            ModelConfig { decoder_channels: vec![8, 8], ..base.clone() },
            ModelConfig { skip_stages: vec![3], ..base.clone() },
            ModelConfig { stages: base.stages[..3].to_vec(), ..base.clone() },
            ModelConfig { stages: vec![stage(1, 9, 2); 4], ..base.clone() },
        ];
        for c in cases {
            assert!(matches!(c.validate(), Err(Error::Config(_))), "{c:?}");
        }
    }

    #[test]
    fn replicate_channels_copies_and_sums_gradients() {
        let x = random(&[1, 1, 3, 3], 1);
        let mut g = Graph::new();
        let xv = g.param(x.clone());
        let y = replicate_channels(&mut g, xv).unwrap();
        let v = g.value(y).data();
        for c in 0..3 {
            assert_eq!(&v[c * 9..(c + 1) * 9], x.data());
        }
        let z = g.constant(Array::zeros(&[1, 1, 2, 2]));
        let zr = replicate_channels(&mut g, z).unwrap();
        assert!(g.value(zr).data().iter().all(|&v| v == 0.0));
        let two = g.constant(Array::zeros(&[1, 2, 2, 2]));
        assert!(matches!(replicate_channels(&mut g, two), Err(Error::Contract { .. })));

        let w = random(&[1, 3, 3, 3], 2);
        let r = grad_check_multi(
            |g, v| {
                let y = replicate_channels(g, v[0])?;
                let y = g.mul(y, v[1])?;
                g.sum(y)
            },
            &[x, w],
            1e-5,
            &(0..9).map(|i| (0, i)).collect::<Vec<_>>(),
        )
        .unwrap();
        assert!(r.max_rel_err < 1e-8);
    }

    #[test]
    fn crop_inner_offsets() {
        let mut g = Graph::new();
        let x = g.constant(Array::from_fn(&[8, 8], |i| i as f64));
        let c = crop_inner(&mut g, x, 4).unwrap();
        let want: Vec<f64> = (2..6).flat_map(|r| (2..6).map(move |c| (r * 8 + c) as f64)).collect();
        assert_eq!(g.value(c).data(), want.as_slice());
        let id = crop_inner(&mut g, x, 8).unwrap();
        assert_eq!(g.value(id), g.value(x));
        assert!(matches!(crop_inner(&mut g, x, 5), Err(Error::Contract { .. })));
        let big = g.constant(Array::zeros(&[1, 512, 512]));
        let c = crop_inner(&mut g, big, 256).unwrap();
        assert_eq!(g.shape(c), &[1, 256, 256]);
    }

    #[test]
    fn encoder_stage_sizes_and_output_shapes() {
        let m = Tyrion::new(ModelConfig::toy(), 0).unwrap();
        let mut g = Graph::new();
        let b = m.params.bind(&mut g, false);
        let x = g.constant(random(&[2, 3, 64, 64], 3));
        let feats = encoder_forward(&mut g, &b, &m.cfg, x).unwrap();
        let shapes: Vec<Vec<usize>> = feats.iter().map(|&f| g.shape(f).to_vec()).collect();
        assert_eq!(shapes, vec![vec![2, 8, 32, 32], vec![2, 16, 16, 16], vec![2, 32, 8, 8], vec![2, 32, 4, 4]]);
        let logits = decoder_forward(&mut g, &b, &m.cfg, &feats).unwrap();
        assert_eq!(g.shape(logits), &[2, 4, 64, 64]);
        let p = softmax_channel(&mut g, logits).unwrap();
        let v = g.value(p).data();
        for i in 0..64 * 64 {
            let s: f64 = (0..4).map(|k| v[k * 64 * 64 + i]).sum();
            assert!((s - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn wrong_input_size_is_a_config_error() {
        let m = Tyrion::new(ModelConfig::toy(), 0).unwrap();
        let mut g = Graph::new();
        let b = m.params.bind(&mut g, false);
        let x = g.constant(Array::zeros(&[1, 1, 32, 32]));
        assert!(matches!(m.forward(&mut g, &b, x), Err(Error::Config(_))));
    }

    #[test]
    fn constant_input_gives_constant_stage_outputs_without_bias() {
        let cfg = ModelConfig { rel_pos_bias: false, ..tiny(Head::Zones) };
        let m = Tyrion::new(cfg, 4).unwrap();
        let mut g = Graph::new();
        let b = m.params.bind(&mut g, false);
        let x = g.constant(Array::full(&[1, 3, 32, 32], 0.7));
        for f in encoder_forward(&mut g, &b, &m.cfg, x).unwrap() {
            let s = g.shape(f).to_vec();
            let v = g.value(f).data();
            let plane = s[2] * s[3];
            for c in 0..s[1] {
                let ch = &v[c * plane..(c + 1) * plane];
                assert!(ch.iter().all(|&u| (u - ch[0]).abs() < 1e-12));
            }
        }
    }

    #[test]
    fn zero_features_give_zero_logits() {
        let m = Tyrion::new(tiny(Head::Zones), 5).unwrap();
        let mut g = Graph::new();
        let b = m.params.bind(&mut g, false);
        let sizes = m.cfg.stage_sizes();
        let feats: Vec<Var> = (0..4)
            .map(|i| g.constant(Array::zeros(&[1, m.cfg.stages[i].dim, sizes[i], sizes[i]])))
            .collect();
        let logits = decoder_forward(&mut g, &b, &m.cfg, &feats).unwrap();
        assert_eq!(g.shape(logits), &[1, 4, 32, 32]);
        assert!(g.value(logits).data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn resnet_block_skip_projection_only_on_channel_change() {
        let m = Tyrion::new(ModelConfig::toy(), 0).unwrap();
        for level in 0..=m.cfg.num_upsamples() {
            let has = m.params.contains(&format!("decoder.r{level}.skip.w"));
            assert_eq!(has, m.cfg.decoder_in_channels(level) != m.cfg.decoder_channels[level]);
        }
    }

    #[test]
    fn pretraining_heads_shapes_and_zero_weights() {
        for head in [Head::Simmim, Head::Translator] {
            let mut m = Tyrion::new(tiny(head), 6).unwrap();
            let name = if head == Head::Simmim { "head.simmim" } else { "head.translator" };
            let mut g = Graph::new();
            let b = m.params.bind(&mut g, false);
            let x = g.constant(random(&[1, 1, 32, 32], 7));
            let y = m.forward(&mut g, &b, x).unwrap();
            assert_eq!(g.shape(y), &[1, 14, 32, 32]);

            let w = m.params.get_mut(&format!("{name}.w")).unwrap();
            *w = Array::zeros(&w.shape().to_vec());
            let mut g = Graph::new();
            let b = m.params.bind(&mut g, false);
            let x = g.constant(random(&[1, 1, 32, 32], 7));
            let y = m.forward(&mut g, &b, x).unwrap();
            assert!(g.value(y).data().iter().all(|&v| v == 0.0));
        }
    }

    #[test]
    fn head_parameter_counts() {
        let cfg = tiny(Head::Simmim);
        let m = Tyrion::new(cfg.clone(), 0).unwrap();
        let d = cfg.stages[3].dim;
        let scale = cfg.simmim_scale();
        let want = d * 14 * scale * scale + 14 * scale * scale;
        let got = m.params.get("head.simmim.w").unwrap().len() + m.params.get("head.simmim.b").unwrap().len();
        assert_eq!(got, want);
        assert!(m.summary().contains(&format!("= {want}")));

        let t = Tyrion::new(tiny(Head::Translator), 0).unwrap();
        let last = *t.cfg.decoder_channels.last().unwrap();
        let got = t.params.get("head.translator.w").unwrap().len() + t.params.get("head.translator.b").unwrap().len();
        assert_eq!(got, last * 14 + 14);
    }

    #[test]
    fn parameter_count_is_a_function_of_config() {
        let cfg = ModelConfig::toy();
        let a = Tyrion::new(cfg.clone(), 1).unwrap();
        let b = Tyrion::new(cfg.clone(), 2).unwrap();
        assert_eq!(a.num_params(), b.num_params());
        assert_eq!(a.num_params(), param_count(&cfg));
        assert_ne!(a.params, b.params);
        assert_eq!(a, Tyrion::new(cfg, 1).unwrap());
    }

    #[test]
    fn checkpoint_roundtrip_through_model() {
        let m = Tyrion::new(ModelConfig::toy(), 9).unwrap();
        let bytes = m.params.to_bytes();
        let back = Tyrion::from_params(m.cfg.clone(), ParamStore::from_bytes(&bytes).unwrap()).unwrap();
        assert_eq!(back.params.to_bytes(), bytes);
        let mut short = m.params.clone();
        short.remove("head.zones.b");
        assert!(Tyrion::from_params(m.cfg.clone(), short).is_err());
    }

    #[test]
    fn load_matching_transfers_encoder() {
        let src = Tyrion::new(tiny(Head::Simmim), 1).unwrap();
        let mut dst = Tyrion::new(tiny(Head::Zones), 2).unwrap();
        let r = dst.load_matching(&src.params.filtered("encoder."));
        assert!(r.skipped.is_empty());
        assert_eq!(dst.params.filtered("encoder."), src.params.filtered("encoder."));
    }

    #[test]
    fn default_size_forward_shape() {
        // full-size spatial contract with tiny channel widths
        let cfg = ModelConfig {
            stages: vec![stage(1, 4, 1), stage(1, 4, 1), stage(1, 4, 1), stage(1, 4, 1)],
            mlp_ratio: 1,
            decoder_channels: vec![4, 2, 2, 2, 2, 2],
            norm_groups: 2,
            rel_pos_bias: false,
            ..ModelConfig::default()
        };
        let m = Tyrion::new(cfg, 0).unwrap();
        let mut g = Graph::new();
        let b = m.params.bind(&mut g, false);
        let x = g.constant(Array::zeros(&[1, 1, 512, 512]));
        let y = m.forward(&mut g, &b, x).unwrap();
        assert_eq!(g.shape(y), &[1, 4, 512, 512]);
    }

    fn legal_config() -> impl Strategy<Value = ModelConfig> {
        (0u32..3, 1usize..3, 1usize..3, 0usize..2).prop_map(|(p_log, window, mult, bias)| {
            let patch = 1usize << p_log;
            let input = patch * 8 * window * mult;
            let ups = 3 + p_log as usize;
            ModelConfig {
                input_size: input,
                inner_size: input / 2,
                window,
                patch_embed: patch,
                stages: vec![stage(1, 2, 1), stage(1, 4, 2), stage(1, 4, 1), stage(1, 4, 2)],
                mlp_ratio: 1,
                decoder_channels: vec![2; ups + 1],
                skip_stages: vec![0, 1, 2],
                norm_groups: 2,
                rel_pos_bias: bias == 1,
                num_classes: 4,
                optical_channels: 14,
                head: Head::Zones,
            }
        })
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(16))]
        #[test]
        fn stage_schedule_holds_for_legal_configs(cfg in legal_config()) {
            cfg.validate().unwrap();
            let m = Tyrion::new(cfg.clone(), 3).unwrap();
            let mut g = Graph::new();
            let b = m.params.bind(&mut g, false);
            let s = cfg.input_size;
            let x = g.constant(Array::zeros(&[1, 3, s, s]));
            let feats = encoder_forward(&mut g, &b, &cfg, x).unwrap();
            for (i, f) in feats.iter().enumerate() {
                prop_assert_eq!(g.shape(*f)[2], s / (cfg.patch_embed << i));
            }
            let logits = decoder_forward(&mut g, &b, &cfg, &feats).unwrap();
            prop_assert_eq!(g.shape(logits), &[1, 4, s, s]);
        }
    }
}
