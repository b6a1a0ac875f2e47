//! Image branch, volume branch and the late / multiscale fused models.
//!
//! Planar maps are 5-axis tensors with `D = 1`. Volumes flow through 3D
//! residual encoders; feature projection blocks (FPBs) collapse depth so that
//! every decoder operates in the en-face plane.

use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use hetfuse_tensor::{ConvGeometry, Element, Graph, ParamId, ParamStore, Tensor, Var};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::datamodel::{EnFaceGrid, VoxelGrid};
use crate::error::{Error, Result};

pub const NORM_EPS: f64 = 1e-5;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FusionMode {
    VolumeOnly,
    ImageOnly,
    Late,
    Multiscale,
}

impl FusionMode {
    pub const ALL: [FusionMode; 4] = [FusionMode::VolumeOnly, FusionMode::ImageOnly, FusionMode::Late, FusionMode::Multiscale];

    pub fn name(self) -> &'static str {
        match self {
            FusionMode::VolumeOnly => "volume_only",
            FusionMode::ImageOnly => "image_only",
            FusionMode::Late => "late",
            FusionMode::Multiscale => "multiscale",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|m| m.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown fusion mode `{s}` (expected volume_only, image_only, late or multiscale)")))
    }

    pub fn uses_volume(self) -> bool {
        self != FusionMode::ImageOnly
    }

    pub fn uses_image(self) -> bool {
        self != FusionMode::VolumeOnly
    }
}

impl std::fmt::Display for FusionMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

/// Name under which the volume appears in [`ArchitectureConfig::modalities`].
pub const VOLUME_MODALITY: &str = "oct";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ArchitectureConfig {
    pub levels: usize,
    pub base_channels: usize,
    pub max_channels: usize,
    /// Explicit per-level widths; `None` means `base·2^ℓ` capped at `max_channels`.
    pub channel_schedule: Option<Vec<usize>>,
    pub enc_convs_per_block: usize,
    pub dec_convs_per_block: usize,
    pub fpb_convs: usize,
    /// Depth stride of the first FPB convolution.
    pub fpb_depth_stride: usize,
    pub fusion_mode: FusionMode,
    /// Input modalities: [`VOLUME_MODALITY`] and/or one 2D image name.
    pub modalities: Vec<String>,
    pub init_seed: u64,
}

impl Default for ArchitectureConfig {
    fn default() -> Self {
        Self {
            levels: 5,
            base_channels: 16,
            max_channels: 256,
            channel_schedule: None,
            enc_convs_per_block: 8,
            dec_convs_per_block: 4,
            fpb_convs: 2,
            fpb_depth_stride: 2,
            fusion_mode: FusionMode::Multiscale,
            modalities: vec![VOLUME_MODALITY.into(), "slo".into()],
            init_seed: 0,
        }
    }
}

impl ArchitectureConfig {
    /// Narrow 4-level variant (widths 4..32, two convs per block) that trains
    /// in minutes on a CPU.
    pub fn desk() -> Self {
        Self { levels: 4, base_channels: 4, max_channels: 32, enc_convs_per_block: 2, dec_convs_per_block: 2, fpb_convs: 1, ..Self::default() }
    }

    pub fn widths(&self) -> Vec<usize> {
        match &self.channel_schedule {
            Some(w) => w.clone(),
            None => (0..self.levels).map(|l| (self.base_channels << l).min(self.max_channels)).collect(),
        }
    }

    /// The 2D modality name, if any.
    pub fn image_modality(&self) -> Option<&str> {
        self.modalities.iter().map(String::as_str).find(|m| *m != VOLUME_MODALITY)
    }

    pub fn has_volume(&self) -> bool {
        self.modalities.iter().any(|m| m == VOLUME_MODALITY)
    }

    /// Spatial dims must be multiples of this.
    pub fn divisor(&self) -> usize {
        1 << (self.levels - 1)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.levels < 2 {
            return bad(format!("levels must be >= 2, got {}", self.levels));
        }
        let w = self.widths();
        if w.len() != self.levels || w.iter().any(|&c| c == 0) {
            return bad(format!("channel schedule {w:?} must list {} positive widths", self.levels));
        }
        for (name, n) in [("enc_convs_per_block", self.enc_convs_per_block), ("dec_convs_per_block", self.dec_convs_per_block)] {
            if n == 0 || n % 2 != 0 {
                return bad(format!("{name} must be a positive even number, got {n}"));
            }
        }
        if self.fpb_convs == 0 || self.fpb_depth_stride == 0 {
            return bad("fpb_convs and fpb_depth_stride must be >= 1".into());
        }
        let images = self.modalities.iter().filter(|m| *m != VOLUME_MODALITY).count();
        if images > 1 {
            return bad(format!("at most one 2D modality is supported, got {:?}", self.modalities));
        }
        if self.fusion_mode.uses_volume() && !self.has_volume() {
            return bad(format!("fusion mode {} needs the `{VOLUME_MODALITY}` modality", self.fusion_mode));
        }
        if self.fusion_mode.uses_image() && images == 0 {
            return bad(format!("fusion mode {} needs a 2D modality", self.fusion_mode));
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
struct ConvP {
    w: ParamId,
    b: Option<ParamId>,
    geo: ConvGeometry,
}

#[derive(Debug, Clone)]
struct NormP {
    gamma: ParamId,
    beta: ParamId,
}

/// Pre-activation residual unit: `[norm→relu]→conv→norm→relu→conv (+ shortcut)`.
#[derive(Debug, Clone)]
struct Unit {
    pre: Option<NormP>,
    conv1: ConvP,
    norm2: NormP,
    conv2: ConvP,
    proj: Option<ConvP>,
}

#[derive(Debug, Clone)]
struct Block {
    units: Vec<Unit>,
}

#[derive(Debug, Clone)]
struct Encoder {
    blocks: Vec<Block>,
}

/// Conv→norm→relu stack followed by a mean over depth.
#[derive(Debug, Clone)]
pub struct Fpb {
    layers: Vec<(ConvP, NormP)>,
}

#[derive(Debug, Clone)]
struct Up {
    norm: NormP,
    conv: ConvP,
}

#[derive(Debug, Clone)]
struct Decoder {
    /// `blocks[ℓ]` runs at level ℓ; the last one has no upsampled input.
    blocks: Vec<Block>,
    /// `ups[ℓ]` lifts level ℓ+1 to level ℓ.
    ups: Vec<Up>,
    out_norm: NormP,
}

#[derive(Debug, Clone)]
struct Net {
    image_enc: Option<Encoder>,
    volume_enc: Option<Encoder>,
    fpbs: Vec<Fpb>,
    image_dec: Option<Decoder>,
    /// Decoder fed by FPB outputs (volume_only, late) or fused skips (multiscale).
    volume_dec: Option<Decoder>,
    head: ConvP,
}

struct Builder {
    store: ParamStore<f32>,
    rng: ChaCha8Rng,
}

fn k3(dims3: bool) -> ConvGeometry {
    ConvGeometry::same([3, 3, if dims3 { 3 } else { 1 }])
}

impl Builder {
    fn conv(&mut self, name: &str, cin: usize, cout: usize, geo: ConvGeometry, bias: bool) -> ConvP {
        let [kh, kw, kd] = geo.kernel;
        let fan_in = (cin * kh * kw * kd) as f64;
        let normal = Normal::new(0.0, (2.0 / fan_in).sqrt()).expect("positive std");
        let w = Tensor::from_fn([cout, cin, kh, kw, kd], |_| normal.sample(&mut self.rng) as f32);
        let w = self.store.add(format!("{name}.weight"), w);
        let b = bias.then(|| self.store.add(format!("{name}.bias"), Tensor::zeros([1, cout, 1, 1, 1])));
        ConvP { w, b, geo }
    }

    fn norm(&mut self, name: &str, c: usize) -> NormP {
        NormP {
            gamma: self.store.add(format!("{name}.gamma"), Tensor::full([1, c, 1, 1, 1], 1.0)),
            beta: self.store.add(format!("{name}.beta"), Tensor::zeros([1, c, 1, 1, 1])),
        }
    }

    fn unit(&mut self, name: &str, cin: usize, cout: usize, stride: [usize; 3], dims3: bool, raw_input: bool) -> Unit {
        let pre = (!raw_input).then(|| self.norm(&format!("{name}.norm1"), cin));
        let conv1 = self.conv(&format!("{name}.conv1"), cin, cout, k3(dims3).with_stride(stride), false);
        let norm2 = self.norm(&format!("{name}.norm2"), cout);
        let conv2 = self.conv(&format!("{name}.conv2"), cout, cout, k3(dims3), false);
        let proj = (cin != cout || stride != [1, 1, 1])
            .then(|| self.conv(&format!("{name}.proj"), cin, cout, ConvGeometry::pointwise().with_stride(stride), false));
        Unit { pre, conv1, norm2, conv2, proj }
    }

    #[allow(clippy::too_many_arguments)]
    fn block(&mut self, name: &str, cin: usize, cout: usize, convs: usize, stride: [usize; 3], dims3: bool, raw_input: bool) -> Block {
        let units = (0..convs / 2)
            .map(|u| {
                let (ci, s, raw) = if u == 0 { (cin, stride, raw_input) } else { (cout, [1, 1, 1], false) };
                self.unit(&format!("{name}.u{u}"), ci, cout, s, dims3, raw)
            })
            .collect();
        Block { units }
    }

    fn encoder(&mut self, name: &str, cfg: &ArchitectureConfig, dims3: bool) -> Encoder {
        let widths = cfg.widths();
        let mut cin = 1;
        let blocks = widths
            .iter()
            .enumerate()
            .map(|(l, &c)| {
                let stride = if l == 0 { [1, 1, 1] } else if dims3 { [2, 2, 2] } else { [2, 2, 1] };
                let b = self.block(&format!("{name}.b{l}"), cin, c, cfg.enc_convs_per_block, stride, dims3, l == 0);
                cin = c;
                b
            })
            .collect();
        Encoder { blocks }
    }

    fn fpb(&mut self, name: &str, c: usize, cfg: &ArchitectureConfig) -> Fpb {
        let layers = (0..cfg.fpb_convs)
            .map(|k| {
                let stride = if k == 0 { [1, 1, cfg.fpb_depth_stride] } else { [1, 1, 1] };
                let conv = self.conv(&format!("{name}.c{k}"), c, c, k3(true).with_stride(stride), false);
                let norm = self.norm(&format!("{name}.n{k}"), c);
                (conv, norm)
            })
            .collect();
        Fpb { layers }
    }

    /// `skip[ℓ]` is the channel count of the skip tensor entering level ℓ.
    fn decoder(&mut self, name: &str, cfg: &ArchitectureConfig, skip: &[usize]) -> Decoder {
        let widths = cfg.widths();
        let top = cfg.levels - 1;
        let mut blocks = Vec::with_capacity(cfg.levels);
        let mut ups = Vec::with_capacity(top);
        for l in 0..cfg.levels {
            let cin = if l == top { skip[l] } else { widths[l] + skip[l] };
            blocks.push(self.block(&format!("{name}.b{l}"), cin, widths[l], cfg.dec_convs_per_block, [1, 1, 1], false, false));
        }
        for l in 0..top {
            let norm = self.norm(&format!("{name}.up{l}.norm"), widths[l + 1]);
            let conv = self.conv(&format!("{name}.up{l}.conv"), widths[l + 1], widths[l], k3(false), false);
            ups.push(Up { norm, conv });
        }
        let out_norm = self.norm(&format!("{name}.out_norm"), widths[0]);
        Decoder { blocks, ups, out_norm }
    }
}

/// A built network: configuration, parameters and layer wiring.
#[derive(Debug, Clone)]
pub struct Model {
    config: ArchitectureConfig,
    pub params: ParamStore<f32>,
    net: Net,
}

pub fn build_model(config: &ArchitectureConfig) -> Result<Model> {
    config.validate()?;
    let mut b = Builder { store: ParamStore::new(), rng: ChaCha8Rng::seed_from_u64(config.init_seed) };
    let widths = config.widths();
    let mode = config.fusion_mode;
    let image_enc = mode.uses_image().then(|| b.encoder("img.enc", config, false));
    let volume_enc = mode.uses_volume().then(|| b.encoder("vol.enc", config, true));
    let fpbs = if mode.uses_volume() {
        widths.iter().enumerate().map(|(l, &c)| b.fpb(&format!("vol.fpb{l}"), c, config)).collect()
    } else {
        Vec::new()
    };
    let image_dec = matches!(mode, FusionMode::ImageOnly | FusionMode::Late).then(|| b.decoder("img.dec", config, &widths));
    let volume_dec = match mode {
        FusionMode::VolumeOnly | FusionMode::Late => Some(b.decoder("vol.dec", config, &widths)),
        FusionMode::Multiscale => {
            let fused: Vec<usize> = widths.iter().map(|c| 2 * c).collect();
            Some(b.decoder("fuse.dec", config, &fused))
        }
        FusionMode::ImageOnly => None,
    };
    let head_in = if mode == FusionMode::Late { 2 * widths[0] } else { widths[0] };
    let head = b.conv("head", head_in, 1, ConvGeometry::pointwise(), true);
    Ok(Model { config: config.clone(), params: b.store, net: Net { image_enc, volume_enc, fpbs, image_dec, volume_dec, head } })
}

fn conv<T: Element>(g: &mut Graph<T>, s: &ParamStore<T>, p: &ConvP, x: Var) -> Var {
    let w = g.param(s, p.w);
    let b = p.b.map(|b| g.param(s, b));
    g.conv(x, w, b, p.geo)
}

fn norm_relu<T: Element>(g: &mut Graph<T>, s: &ParamStore<T>, p: &NormP, x: Var) -> Var {
    let gamma = g.param(s, p.gamma);
    let beta = g.param(s, p.beta);
    let y = g.instance_norm(x, gamma, beta, T::of(NORM_EPS));
    g.relu(y)
}

fn unit_forward<T: Element>(g: &mut Graph<T>, s: &ParamStore<T>, u: &Unit, x: Var) -> Var {
    let h = match &u.pre {
        Some(n) => norm_relu(g, s, n, x),
        None => x,
    };
    let y = conv(g, s, &u.conv1, h);
    let y = norm_relu(g, s, &u.norm2, y);
    let y = conv(g, s, &u.conv2, y);
    let shortcut = match &u.proj {
        Some(p) => conv(g, s, p, h),
        None => x,
    };
    g.add(y, shortcut)
}

fn block_forward<T: Element>(g: &mut Graph<T>, s: &ParamStore<T>, b: &Block, mut x: Var) -> Var {
    for u in &b.units {
        x = unit_forward(g, s, u, x);
    }
    x
}

fn encoder_forward<T: Element>(g: &mut Graph<T>, s: &ParamStore<T>, e: &Encoder, mut x: Var) -> Vec<Var> {
    e.blocks
        .iter()
        .map(|b| {
            x = block_forward(g, s, b, x);
            x
        })
        .collect()
}

/// Projects a `(B, C, H, W, D)` feature map to `(B, C, H, W, 1)`.
pub fn fpb_forward<T: Element>(g: &mut Graph<T>, s: &ParamStore<T>, fpb: &Fpb, mut x: Var) -> Var {
    for (c, n) in &fpb.layers {
        x = conv(g, s, c, x);
        x = norm_relu(g, s, n, x);
    }
    g.mean_depth(x)
}

/// Returns the final `(B, c₀, H, W, 1)` decoder features.
fn decoder_forward<T: Element>(g: &mut Graph<T>, s: &ParamStore<T>, d: &Decoder, skips: &[Var]) -> Var {
    let top = skips.len() - 1;
    let mut x = block_forward(g, s, &d.blocks[top], skips[top]);
    for l in (0..top).rev() {
        let up = &d.ups[l];
        let y = norm_relu(g, s, &up.norm, x);
        let y = g.upsample(y, [2, 2, 1]);
        let y = conv(g, s, &up.conv, y);
        let cat = g.concat(&[y, skips[l]]);
        x = block_forward(g, s, &d.blocks[l], cat);
    }
    norm_relu(g, s, &d.out_norm, x)
}

/// Adaptive-max-pools every map to the smallest `(H, W)` present.
pub fn resize_to_min<T: Element>(g: &mut Graph<T>, maps: &[Var]) -> Result<Vec<Var>> {
    if maps.is_empty() {
        return Err(Error::InvalidArgument("resize_to_min of an empty list".into()));
    }
    let batch = g.shape(maps[0])[0];
    if maps.iter().any(|&m| g.shape(m)[0] != batch) {
        return Err(Error::InvalidArgument("resize_to_min inputs disagree on batch size".into()));
    }
    let th = maps.iter().map(|&m| g.shape(m)[2]).min().expect("non-empty");
    let tw = maps.iter().map(|&m| g.shape(m)[3]).min().expect("non-empty");
    Ok(maps.iter().map(|&m| g.adaptive_max_pool(m, th, tw)).collect())
}

impl Model {
    pub fn config(&self) -> &ArchitectureConfig {
        &self.config
    }

    pub fn fusion_mode(&self) -> FusionMode {
        self.config.fusion_mode
    }

    /// Trainable scalar count.
    pub fn count_parameters(&self) -> usize {
        self.params.count_trainable()
    }

    /// FPB of level `l`, if the model has a volume branch.
    pub fn fpb(&self, l: usize) -> Option<&Fpb> {
        self.net.fpbs.get(l)
    }

    fn check_input(&self, what: &str, shape: [usize; 5], depth: bool) -> Result<()> {
        let f = self.config.divisor();
        let mut dims = vec![shape[2], shape[3]];
        if depth {
            dims.push(shape[4]);
        }
        if shape[1] != 1 || (!depth && shape[4] != 1) {
            return Err(Error::ShapeMismatch { what: format!("{what} input"), expected: vec![shape[0], 1], found: shape.to_vec() });
        }
        if dims.iter().any(|&d| d == 0 || d % f != 0) {
            return Err(Error::PaddingRequired { dims, factor: f });
        }
        Ok(())
    }

    /// Records the network on `g` and returns the `(B, 1, H, W, 1)` logits.
    /// `store` must hold this model's parameters (possibly at another precision).
    pub fn forward_logits<T: Element>(
        &self,
        g: &mut Graph<T>,
        store: &ParamStore<T>,
        volume: Option<Var>,
        image: Option<Var>,
    ) -> Result<Var> {
        let mode = self.config.fusion_mode;
        if mode.uses_volume() && volume.is_none() {
            return Err(Error::MissingModality(format!("{mode} needs the volume")));
        }
        if mode.uses_image() && image.is_none() {
            return Err(Error::MissingModality(format!("{mode} needs the 2D image")));
        }
        if let Some(v) = volume {
            self.check_input("volume", g.shape(v), true)?;
        }
        if let Some(i) = image {
            self.check_input("image", g.shape(i), false)?;
        }
        if let (Some(v), Some(i)) = (volume, image) {
            if g.shape(v)[0] != g.shape(i)[0] {
                return Err(Error::InvalidArgument("volume and image batch sizes differ".into()));
            }
        }
        let n = &self.net;
        let image_feats = match (&n.image_enc, image) {
            (Some(e), Some(i)) => encoder_forward(g, store, e, i),
            _ => Vec::new(),
        };
        let projected: Vec<Var> = match (&n.volume_enc, volume) {
            (Some(e), Some(v)) => {
                let feats = encoder_forward(g, store, e, v);
                feats.iter().zip(&n.fpbs).map(|(&f, p)| fpb_forward(g, store, p, f)).collect()
            }
            _ => Vec::new(),
        };
        let features = match mode {
            FusionMode::VolumeOnly => decoder_forward(g, store, n.volume_dec.as_ref().expect("built"), &projected),
            FusionMode::ImageOnly => decoder_forward(g, store, n.image_dec.as_ref().expect("built"), &image_feats),
            FusionMode::Late => {
                let a = decoder_forward(g, store, n.image_dec.as_ref().expect("built"), &image_feats);
                let b = decoder_forward(g, store, n.volume_dec.as_ref().expect("built"), &projected);
                let r = resize_to_min(g, &[a, b])?;
                g.concat(&r)
            }
            FusionMode::Multiscale => {
                let mut skips = Vec::with_capacity(projected.len());
                for (&i, &p) in image_feats.iter().zip(&projected) {
                    let r = resize_to_min(g, &[i, p])?;
                    skips.push(g.concat(&r));
                }
                decoder_forward(g, store, n.volume_dec.as_ref().expect("built"), &skips)
            }
        };
        // the output plane is the smallest en-face plane among the given inputs
        let mut planes: Vec<[usize; 5]> = Vec::new();
        planes.extend(volume.map(|v| g.shape(v)));
        planes.extend(image.map(|i| g.shape(i)));
        let th = planes.iter().map(|s| s[2]).min().expect("at least one input");
        let tw = planes.iter().map(|s| s[3]).min().expect("at least one input");
        let features = g.adaptive_max_pool(features, th, tw);
        Ok(conv(g, store, &n.head, features))
    }

    /// Decoder features right before the final 1×1 convolution.
    pub fn head_input_channels(&self) -> usize {
        self.params.get(self.net.head.w).value.shape()[1]
    }

    /// Evaluation-mode probabilities `(B, 1, H, W, 1)`.
    pub fn predict(&self, volume: Option<&Tensor<f32>>, image: Option<&Tensor<f32>>) -> Result<Tensor<f32>> {
        let mut g = Graph::inference();
        let v = volume.map(|t| g.input(t.clone()));
        let i = image.map(|t| g.input(t.clone()));
        let logits = self.forward_logits(&mut g, &self.params, v, i)?;
        let p = g.sigmoid(logits);
        Ok(g.value(p).clone())
    }

    /// Sets the final convolution's weights and bias to zero.
    pub fn zero_head(&mut self) {
        let ids = [Some(self.net.head.w), self.net.head.b];
        for id in ids.into_iter().flatten() {
            self.params.get_mut(id).value.data_mut().iter_mut().for_each(|v| *v = 0.0);
        }
    }

    /// Order-sensitive FNV-1a hash of every parameter's bits.
    pub fn checksum(&self) -> u64 {
        let mut h: u64 = 0xcbf2_9ce4_8422_2325;
        for p in self.params.iter() {
            for b in p.name.bytes().chain(p.value.data().iter().flat_map(|v| v.to_bits().to_le_bytes())) {
                h ^= u64::from(b);
                h = h.wrapping_mul(0x0100_0000_01b3);
            }
        }
        h
    }

    /// Checkpoint layout (all integers little-endian):
    /// `b"HFCK"`, `u32` version, `u64` config-JSON length, config JSON,
    /// `u32` tensor count, then per tensor `u32` name length, UTF-8 name,
    /// `u8` trainable flag, five `u32` dims and `f32` values in row-major order.
    pub fn save(&self, path: &Path) -> Result<()> {
        let mut buf = Vec::new();
        buf.extend_from_slice(CHECKPOINT_MAGIC);
        buf.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
        let json = serde_json::to_vec(&self.config).expect("config serializes");
        buf.extend_from_slice(&(json.len() as u64).to_le_bytes());
        buf.extend_from_slice(&json);
        buf.extend_from_slice(&(self.params.len() as u32).to_le_bytes());
        for p in self.params.iter() {
            buf.extend_from_slice(&(p.name.len() as u32).to_le_bytes());
            buf.extend_from_slice(p.name.as_bytes());
            buf.push(u8::from(p.trainable));
            for d in p.value.shape() {
                buf.extend_from_slice(&(d as u32).to_le_bytes());
            }
            for v in p.value.data() {
                buf.extend_from_slice(&v.to_le_bytes());
            }
        }
        if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
            fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
        }
        let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
        f.write_all(&buf).map_err(|e| Error::io(path, e))
    }

    /// Rebuilds the model from the echoed configuration and fills in the stored tensors.
    pub fn load(path: &Path) -> Result<Model> {
        let mut bytes = Vec::new();
        fs::File::open(path).and_then(|mut f| f.read_to_end(&mut bytes)).map_err(|e| Error::io(path, e))?;
        let bad = |reason: &str| Error::Checkpoint { path: path.to_path_buf(), reason: reason.to_string() };
        let mut r = ByteReader { bytes: &bytes, pos: 0 };
        if r.take(4).ok_or_else(|| bad("truncated header"))? != CHECKPOINT_MAGIC {
            return Err(bad("not a checkpoint (bad magic)"));
        }
        let version = r.u32().ok_or_else(|| bad("truncated header"))?;
        if version != CHECKPOINT_VERSION {
            return Err(bad(&format!("unsupported version {version}")));
        }
        let json_len = r.u64().ok_or_else(|| bad("truncated header"))? as usize;
        let json = r.take(json_len).ok_or_else(|| bad("truncated config"))?;
        let config: ArchitectureConfig = serde_json::from_slice(json).map_err(|e| bad(&format!("config: {e}")))?;
        let mut model = build_model(&config)?;
        let n = r.u32().ok_or_else(|| bad("truncated tensor table"))? as usize;
        if n != model.params.len() {
            return Err(bad(&format!("{n} tensors stored, configuration implies {}", model.params.len())));
        }
        for i in 0..n {
            let name_len = r.u32().ok_or_else(|| bad("truncated tensor"))? as usize;
            let name = std::str::from_utf8(r.take(name_len).ok_or_else(|| bad("truncated tensor"))?)
                .map_err(|_| bad("tensor name is not UTF-8"))?
                .to_string();
            let trainable = r.take(1).ok_or_else(|| bad("truncated tensor"))?[0] == 1;
            let mut shape = [0usize; 5];
            for s in &mut shape {
                *s = r.u32().ok_or_else(|| bad("truncated tensor"))? as usize;
            }
            let count: usize = shape.iter().product();
            let raw = r.take(4 * count).ok_or_else(|| bad("truncated tensor data"))?;
            let param = model.params.get_mut(ParamId(i));
            if param.name != name || param.value.shape() != shape {
                return Err(bad(&format!("tensor {i} is `{name}` {shape:?}, expected `{}` {:?}", param.name, param.value.shape())));
            }
            for (dst, c) in param.value.data_mut().iter_mut().zip(raw.chunks_exact(4)) {
                *dst = f32::from_le_bytes([c[0], c[1], c[2], c[3]]);
            }
            param.trainable = trainable;
        }
        if r.pos != bytes.len() {
            return Err(bad("trailing bytes"));
        }
        Ok(model)
    }
}

const CHECKPOINT_MAGIC: &[u8; 4] = b"HFCK";
const CHECKPOINT_VERSION: u32 = 1;

struct ByteReader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> ByteReader<'a> {
    fn take(&mut self, n: usize) -> Option<&'a [u8]> {
        let end = self.pos.checked_add(n)?;
        let s = self.bytes.get(self.pos..end)?;
        self.pos = end;
        Some(s)
    }

    fn u32(&mut self) -> Option<u32> {
        self.take(4).map(|b| u32::from_le_bytes(b.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Option<u64> {
        self.take(8).map(|b| u64::from_le_bytes(b.try_into().expect("8 bytes")))
    }
}

/// `(1, 1, H, W, D)` tensor of a volume.
pub fn volume_tensor(v: &VoxelGrid) -> Tensor<f32> {
    let (h, w, d) = v.dims();
    Tensor::from_vec([1, 1, h, w, d], v.data().iter().copied().collect()).expect("dims match")
}

/// `(1, 1, H, W, 1)` tensor of an en-face image.
pub fn image_tensor(img: &EnFaceGrid) -> Tensor<f32> {
    let (h, w) = img.dims();
    Tensor::from_vec([1, 1, h, w, 1], img.data().iter().copied().collect()).expect("dims match")
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    pub(crate) fn tiny(mode: FusionMode) -> ArchitectureConfig {
        ArchitectureConfig {
            levels: 2,
            channel_schedule: Some(vec![2, 3]),
            enc_convs_per_block: 2,
            dec_convs_per_block: 2,
            fpb_convs: 1,
            fusion_mode: mode,
            init_seed: 5,
            ..ArchitectureConfig::default()
        }
    }

    fn rand_tensor(shape: [usize; 5], seed: u64) -> Tensor<f32> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Tensor::from_fn(shape, |_| rng.random_range(-1.0f32..1.0))
    }

    #[test]
    fn default_schedule() {
        assert_eq!(ArchitectureConfig::default().widths(), vec![16, 32, 64, 128, 256]);
        let c = ArchitectureConfig { levels: 6, max_channels: 256, ..ArchitectureConfig::default() };
        assert_eq!(c.widths(), vec![16, 32, 64, 128, 256, 256]);
    }

    #[test]
    fn config_validation() {
        let c = ArchitectureConfig { modalities: vec!["slo".into()], ..ArchitectureConfig::default() };
        assert!(matches!(build_model(&c), Err(Error::Config(_))));
        let c = ArchitectureConfig { enc_convs_per_block: 3, ..ArchitectureConfig::default() };
        assert!(build_model(&c).is_err());
        let c = ArchitectureConfig { levels: 1, ..ArchitectureConfig::default() };
        assert!(build_model(&c).is_err());
        let c = ArchitectureConfig { fusion_mode: FusionMode::ImageOnly, modalities: vec!["slo".into()], ..ArchitectureConfig::default() };
        assert!(build_model(&c).is_ok());
    }

    #[test]
    fn single_pointwise_conv_count() {
        let mut b = Builder { store: ParamStore::new(), rng: ChaCha8Rng::seed_from_u64(0) };
        b.conv("c", 2, 1, ConvGeometry::pointwise(), true);
        assert_eq!(b.store.count_trainable(), 3);
    }

    #[test]
    fn resize_to_min_window_max_and_idempotence() {
        let mut g = Graph::<f64>::inference();
        let x = g.input(Tensor::from_fn([1, 1, 4, 4, 1], |[_, _, i, j, _]| ((i * 7 + j * 3) % 16) as f64));
        let y = g.input(Tensor::zeros([1, 1, 2, 2, 1]));
        let r = resize_to_min(&mut g, &[x, y]).unwrap();
        for i in 0..2 {
            for j in 0..2 {
                let mut m = f64::MIN;
                for a in 2 * i..2 * i + 2 {
                    for b in 2 * j..2 * j + 2 {
                        m = m.max(g.value(x).at([0, 0, a, b, 0]));
                    }
                }
                assert_eq!(g.value(r[0]).at([0, 0, i, j, 0]), m);
            }
        }
        assert_eq!(r[1], y);
        let again = resize_to_min(&mut g, &r).unwrap();
        assert_eq!(again, r);
        assert!(resize_to_min::<f64>(&mut g, &[]).is_err());
    }

    #[test]
    fn output_shapes_and_min_rule() {
        for mode in FusionMode::ALL {
            let m = build_model(&tiny(mode)).unwrap();
            let v = rand_tensor([2, 1, 4, 6, 4], 1);
            let img = rand_tensor([2, 1, 6, 8, 1], 2);
            let out = m.predict(Some(&v), Some(&img)).unwrap();
            assert_eq!(out.shape(), [2, 1, 4, 6, 1], "{mode}");
            assert!(out.data().iter().all(|&p| p > 0.0 && p < 1.0));
        }
    }

    #[test]
    fn image_decoder_emits_sixteen_maps() {
        let c = ArchitectureConfig { fusion_mode: FusionMode::ImageOnly, ..ArchitectureConfig::default() };
        assert_eq!(build_model(&c).unwrap().head_input_channels(), 16);
        let late = ArchitectureConfig { fusion_mode: FusionMode::Late, ..ArchitectureConfig::default() };
        assert_eq!(build_model(&late).unwrap().head_input_channels(), 32);
    }

    #[test]
    fn zero_head_gives_one_half() {
        let mut m = build_model(&tiny(FusionMode::Multiscale)).unwrap();
        m.zero_head();
        let out = m.predict(Some(&rand_tensor([1, 1, 4, 4, 2], 3)), Some(&rand_tensor([1, 1, 4, 4, 1], 4))).unwrap();
        assert!(out.data().iter().all(|&p| p == 0.5));
    }

    #[test]
    fn errors_for_bad_inputs() {
        let m = build_model(&tiny(FusionMode::Multiscale)).unwrap();
        let img = rand_tensor([1, 1, 4, 4, 1], 4);
        assert!(matches!(m.predict(None, Some(&img)), Err(Error::MissingModality(_))));
        let odd = rand_tensor([1, 1, 4, 4, 3], 5);
        assert!(matches!(m.predict(Some(&odd), Some(&img)), Err(Error::PaddingRequired { .. })));
        let odd_img = rand_tensor([1, 1, 5, 4, 1], 5);
        let v = rand_tensor([1, 1, 4, 4, 2], 5);
        assert!(matches!(m.predict(Some(&v), Some(&odd_img)), Err(Error::PaddingRequired { .. })));
    }

    #[test]
    fn determinism_and_counts() {
        let a = build_model(&tiny(FusionMode::Late)).unwrap();
        let b = build_model(&tiny(FusionMode::Late)).unwrap();
        assert_eq!(a.checksum(), b.checksum());
        assert_eq!(a.count_parameters(), b.count_parameters());
        let c = build_model(&ArchitectureConfig { init_seed: 6, ..tiny(FusionMode::Late) }).unwrap();
        assert_ne!(a.checksum(), c.checksum());
        let v = rand_tensor([1, 1, 4, 4, 2], 7);
        let i = rand_tensor([1, 1, 4, 4, 1], 8);
        assert_eq!(a.predict(Some(&v), Some(&i)).unwrap(), a.predict(Some(&v), Some(&i)).unwrap());
        let vo = build_model(&tiny(FusionMode::VolumeOnly)).unwrap();
        let ms = build_model(&tiny(FusionMode::Multiscale)).unwrap();
        assert!(ms.count_parameters() > vo.count_parameters());
    }

    #[test]
    fn freezing_reduces_count() {
        let mut m = build_model(&tiny(FusionMode::Multiscale)).unwrap();
        let before = m.count_parameters();
        let head: usize = m.params.iter().filter(|p| p.name.starts_with("head")).map(|p| p.value.len()).sum();
        m.params.freeze_prefix("head");
        assert_eq!(m.count_parameters(), before - head);
    }

    #[test]
    fn checkpoint_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let m = build_model(&tiny(FusionMode::Multiscale)).unwrap();
        let path = dir.path().join("m.ckpt");
        m.save(&path).unwrap();
        let back = Model::load(&path).unwrap();
        assert_eq!(back.checksum(), m.checksum());
        assert_eq!(back.config(), m.config());
        let mut bytes = fs::read(&path).unwrap();
        bytes[0] = b'X';
        fs::write(&path, &bytes).unwrap();
        assert!(matches!(Model::load(&path), Err(Error::Checkpoint { .. })));
        assert!(matches!(Model::load(&dir.path().join("none")), Err(Error::MissingFile(_))));
    }

    fn fpb_store(c: usize, convs: usize, stride: usize, pointwise: bool) -> (ParamStore<f64>, Fpb) {
        let cfg = ArchitectureConfig { fpb_convs: convs, fpb_depth_stride: stride, ..ArchitectureConfig::default() };
        let mut b = Builder { store: ParamStore::new(), rng: ChaCha8Rng::seed_from_u64(3) };
        let mut fpb = b.fpb("f", c, &cfg);
        if pointwise {
            for (conv, _) in &mut fpb.layers {
                let w = b.store.add("pw", Tensor::from_fn([c, c, 1, 1, 1], |[o, i, ..]| if o == i { 1.5 } else { 0.25 }));
                conv.w = w;
                conv.geo = ConvGeometry::pointwise();
            }
        }
        (b.store.cast(), fpb)
    }

    #[test]
    fn fpb_pooling_alone_is_depth_mean() {
        let (store, fpb) = fpb_store(2, 0, 1, false);
        let mut g = Graph::<f64>::inference();
        let t: Tensor<f64> = rand_tensor([1, 2, 3, 4, 5], 9).cast();
        let x = g.input(t.clone());
        let y = fpb_forward(&mut g, &store, &fpb, x);
        assert_eq!(g.shape(y), [1, 2, 3, 4, 1]);
        for c in 0..2 {
            for i in 0..3 {
                for j in 0..4 {
                    let mean = (0..5).map(|d| t.at([0, c, i, j, d])).sum::<f64>() / 5.0;
                    assert!((g.value(y).at([0, c, i, j, 0]) - mean).abs() < 1e-12);
                }
            }
        }
        let constant = g.input(Tensor::full([1, 2, 2, 2, 4], 0.75));
        let y = fpb_forward(&mut g, &store, &fpb, constant);
        assert!(g.value(y).data().iter().all(|&v| (v - 0.75).abs() < 1e-12));
        let one = g.input(Tensor::from_fn([1, 2, 3, 4, 1], |[_, c, i, j, _]| t.at([0, c, i, j, 2])));
        let y1 = fpb_forward(&mut g, &store, &fpb, one);
        assert_eq!(g.value(y1), g.value(one));
    }

    #[test]
    fn fpb_pointwise_is_depth_permutation_invariant() {
        let (store, fpb) = fpb_store(3, 2, 1, true);
        let t: Tensor<f64> = rand_tensor([1, 3, 2, 3, 6], 10).cast();
        let perm = [4, 1, 5, 0, 3, 2];
        let p = Tensor::from_fn([1, 3, 2, 3, 6], |[b, c, i, j, d]| t.at([b, c, i, j, perm[d]]));
        let mut g = Graph::<f64>::inference();
        let (x, xp) = (g.input(t), g.input(p));
        let (y, yp) = (fpb_forward(&mut g, &store, &fpb, x), fpb_forward(&mut g, &store, &fpb, xp));
        assert!(g.value(y).max_abs_diff(g.value(yp)) < 1e-12);
    }

    #[test]
    fn fpb_gradient_reaches_every_depth() {
        let (mut store, fpb) = fpb_store(2, 2, 2, false);
        let t: Tensor<f64> = rand_tensor([1, 2, 2, 2, 8], 11).cast();
        let xid = store.add("x", t);
        let mut g = Graph::<f64>::new();
        let x = g.param(&store, xid);
        let y = fpb_forward(&mut g, &store, &fpb, x);
        let w = Tensor::from_fn(g.shape(y), |[_, c, i, j, _]| 1.0 + (c + 2 * i + 3 * j) as f64);
        let val: f64 = g.value(y).data().iter().zip(w.data()).map(|(a, b)| a * b).sum();
        let loss = g.external_scalar(y, val, w);
        let grads = g.backward(loss, store.len());
        let gx = grads.get(xid).unwrap();
        for d in 0..8 {
            let mass: f64 = (0..2).flat_map(|c| (0..2).flat_map(move |i| (0..2).map(move |j| [0, c, i, j, d]))).map(|ix| gx.at(ix).abs()).sum();
            assert!(mass > 0.0, "no gradient at depth {d}");
        }
    }
}
