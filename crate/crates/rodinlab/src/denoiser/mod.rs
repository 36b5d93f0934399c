//! Denoising networks over rolled-out tri-plane feature maps: a toy U-Net
//! noise predictor with cross-plane 3D-aware convolutions and AdaGN latent
//! conditioning, a single-upsample x0-predicting upsampler, and a strided
//! convolutional encoder mapping frontal renders to latent vectors.

pub mod aware;
pub mod checkpoint;

use crate::numerics::{Graph, NodeId, NumericsError, Real, Tensor};
use crate::optim::{Binding, ParamStore};
use aware::{conv3daware, conv_per_plane, fold_planes, resize_per_plane, rolled_dims, split_planes, unfold_planes};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum DenoiserError {
    #[error("time step {t} outside 1..={t_max}")]
    TimeOutOfRange { t: usize, t_max: usize },
    #[error("{op}: {detail}")]
    Shape { op: &'static str, detail: String },
    #[error(transparent)]
    Numerics(#[from] NumericsError),
}

fn shape_err(op: &'static str, detail: impl Into<String>) -> DenoiserError {
    DenoiserError::Shape {
        op,
        detail: detail.into(),
    }
}

type Res = Result<NodeId, DenoiserError>;

/// How a network consumes the three planes of a rolled-out map.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Layout {
    /// Planes stacked along channels and processed as one `[r, r, 3c]` map.
    Folded,
    /// Planes kept side by side, every convolution applied per plane.
    Rolled,
}

/// The four conditioning/architecture rungs used by comparison studies:
/// plain channel-stacked net, plus latent conditioning, plus plane roll-out,
/// plus cross-plane aggregation.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum NetVariant {
    Baseline,
    Latent,
    RollOut,
    Aware,
}

impl NetVariant {
    pub fn parse(s: &str) -> Option<NetVariant> {
        match s {
            "baseline" | "a" => Some(NetVariant::Baseline),
            "latent" | "b" => Some(NetVariant::Latent),
            "rollout" | "c" => Some(NetVariant::RollOut),
            "aware" | "d" => Some(NetVariant::Aware),
            _ => None,
        }
    }
}

#[derive(Clone, Debug)]
pub struct NetConfig {
    /// Tri-plane feature channels of the rolled-out input.
    pub in_channels: usize,
    /// Channel width at the first stage.
    pub width: usize,
    /// Per-stage width multipliers; stages after the first halve resolution.
    pub mults: Vec<usize>,
    /// Latent dimension; 0 disables latent conditioning entirely.
    pub z_dim: usize,
    /// Sinusoidal timestep embedding dimension (even).
    pub t_dim: usize,
    /// Hidden width of the per-block modulation MLPs.
    pub cond_hidden: usize,
    /// Largest valid timestep.
    pub t_max: usize,
    /// Group-norm group count.
    pub groups: usize,
    pub layout: Layout,
    /// Cross-plane aggregation in block convolutions (requires `Rolled`).
    pub aware: bool,
}

impl NetConfig {
    /// Default noise-prediction network: rolled-out planes, 3D-aware blocks,
    /// latent conditioning, two downsamplings.
    pub fn base(in_channels: usize, t_max: usize) -> NetConfig {
        NetConfig {
            in_channels,
            width: 32,
            mults: vec![1, 2, 3],
            z_dim: 64,
            t_dim: 32,
            cond_hidden: 48,
            t_max,
            groups: 8,
            layout: Layout::Rolled,
            aware: true,
        }
    }

    /// Reconfigure conditioning and plane handling for a comparison rung.
    pub fn with_variant(mut self, v: NetVariant) -> NetConfig {
        match v {
            NetVariant::Baseline => {
                self.layout = Layout::Folded;
                self.aware = false;
                self.z_dim = 0;
            }
            NetVariant::Latent => {
                self.layout = Layout::Folded;
                self.aware = false;
            }
            NetVariant::RollOut => {
                self.layout = Layout::Rolled;
                self.aware = false;
            }
            NetVariant::Aware => {
                self.layout = Layout::Rolled;
                self.aware = true;
            }
        }
        self
    }

    pub fn validate(&self) -> Result<(), DenoiserError> {
        if self.in_channels == 0 || self.width == 0 {
            return Err(shape_err("net_config", "zero channel width"));
        }
        if self.mults.is_empty() || self.mults.contains(&0) {
            return Err(shape_err("net_config", format!("bad mults {:?}", self.mults)));
        }
        if self.t_dim < 2 || self.t_dim % 2 != 0 {
            return Err(shape_err("net_config", format!("t_dim {} must be even", self.t_dim)));
        }
        if self.t_max == 0 || self.cond_hidden == 0 {
            return Err(shape_err("net_config", "zero t_max or cond_hidden"));
        }
        for &m in &self.mults {
            if (self.width * m) % self.groups != 0 {
                return Err(shape_err(
                    "net_config",
                    format!("width {} not divisible into {} groups", self.width * m, self.groups),
                ));
            }
        }
        if self.aware && self.layout != Layout::Rolled {
            return Err(shape_err("net_config", "aggregation requires the rolled layout"));
        }
        Ok(())
    }

    fn stage_channels(&self) -> Vec<usize> {
        self.mults.iter().map(|m| self.width * m).collect()
    }
}

/// Sinusoidal timestep features `[1, dim]`: half sines, half cosines over a
/// geometric frequency ladder.
pub fn sin_time_embed(t: usize, dim: usize) -> Tensor {
    let half = dim / 2;
    let mut data = vec![0.0; dim];
    for i in 0..half {
        let denom = if half > 1 { (half - 1) as Real } else { 1.0 };
        let freq: Real = (10_000.0 as Real).powf(-(i as Real) / denom);
        let arg = t as Real * freq;
        data[i] = arg.sin();
        data[half + i] = arg.cos();
    }
    Tensor::from_vec(&[1, dim], data).expect("t embed shape")
}

/// Group normalization followed by per-channel scale/shift computed by a
/// small MLP on the conditioning row vector. The MLP's output layer starts
/// at zero, so a fresh block is exactly plain group normalization.
pub fn adagn(
    g: &mut Graph,
    bind: &Binding,
    prefix: &str,
    x: NodeId,
    cond: NodeId,
    groups: usize,
) -> Result<NodeId, NumericsError> {
    let c = g.shape(x)[2];
    let gn = g.group_norm(x, groups, 1e-5)?;
    let h0 = g.matmul(cond, bind.id(&format!("{prefix}.mod.w0")))?;
    let h0b = g.add_row_bias(h0, bind.id(&format!("{prefix}.mod.b0")))?;
    let h0a = g.silu(h0b)?;
    let h1 = g.matmul(h0a, bind.id(&format!("{prefix}.mod.w1")))?;
    let h1b = g.add_row_bias(h1, bind.id(&format!("{prefix}.mod.b1")))?;
    let s_row = g.slice_last(h1b, 0, c)?;
    let b_row = g.slice_last(h1b, c, c)?;
    let s = g.reshape(s_row, &[c])?;
    let b = g.reshape(b_row, &[c])?;
    let s1 = g.add_scalar(s, 1.0)?;
    let scaled = g.mul_channel(gn, s1)?;
    g.add_channel(scaled, b)
}

#[derive(Clone, Copy, PartialEq, Eq)]
enum ConvStyle {
    Plain,
    PerPlane,
    Aware,
}

fn conv_by_style(
    g: &mut Graph,
    x: NodeId,
    kern: NodeId,
    bias: Option<NodeId>,
    stride: usize,
    pad: usize,
    style: ConvStyle,
) -> Result<NodeId, NumericsError> {
    match style {
        ConvStyle::Plain => g.conv2d(x, kern, bias, stride, pad),
        ConvStyle::PerPlane => conv_per_plane(g, x, kern, bias, stride, pad),
        ConvStyle::Aware => conv3daware(g, x, kern, bias, stride, pad),
    }
}

/// Pre-activation residual block: AdaGN, SiLU, one 3x3 convolution (plain,
/// per-plane, or 3D-aware), added back to the input.
fn res_block(
    g: &mut Graph,
    bind: &Binding,
    prefix: &str,
    x: NodeId,
    cond: NodeId,
    groups: usize,
    style: ConvStyle,
) -> Result<NodeId, NumericsError> {
    let n = adagn(g, bind, prefix, x, cond, groups)?;
    let a = g.silu(n)?;
    let kern = bind.id(&format!("{prefix}.conv.w"));
    let bias = bind.id(&format!("{prefix}.conv.b"));
    let y = conv_by_style(g, a, kern, Some(bias), 1, 1, style)?;
    g.add(x, y)
}

/// Single-head self-attention over all spatial positions, residual form with
/// a zero-initialized output projection.
fn attention(
    g: &mut Graph,
    bind: &Binding,
    prefix: &str,
    x: NodeId,
    groups: usize,
) -> Result<NodeId, NumericsError> {
    let s = g.shape(x).to_vec();
    let (h, w, c) = (s[0], s[1], s[2]);
    let gn = g.group_norm(x, groups, 1e-5)?;
    let tok = g.reshape(gn, &[h * w, c])?;
    let q = g.matmul(tok, bind.id(&format!("{prefix}.wq")))?;
    let k = g.matmul(tok, bind.id(&format!("{prefix}.wk")))?;
    let v = g.matmul(tok, bind.id(&format!("{prefix}.wv")))?;
    let kt = g.transpose2(k)?;
    let scores = g.matmul(q, kt)?;
    let scaled = g.scale(scores, 1.0 / (c as Real).sqrt())?;
    let attn = g.softmax_rows(scaled)?;
    let mixed = g.matmul(attn, v)?;
    let proj = g.matmul(mixed, bind.id(&format!("{prefix}.wo")))?;
    let proj3 = g.reshape(proj, &[h, w, c])?;
    g.add(x, proj3)
}

fn he_conv<R: rand::Rng>(rng: &mut R, kh: usize, kw: usize, cin: usize, cout: usize) -> Tensor {
    let std = (2.0 / (kh * kw * cin) as Real).sqrt();
    Tensor::randn(&[kh, kw, cin, cout], std, rng)
}

fn he_linear<R: rand::Rng>(rng: &mut R, fan_in: usize, fan_out: usize) -> Tensor {
    let std = (2.0 / fan_in as Real).sqrt();
    Tensor::randn(&[fan_in, fan_out], std, rng)
}

fn init_temb<R: rand::Rng>(store: &mut ParamStore, t_dim: usize, rng: &mut R) {
    let hidden = 2 * t_dim;
    store.insert("temb.w0", he_linear(rng, t_dim, hidden));
    store.insert("temb.b0", Tensor::zeros(&[hidden]));
    store.insert("temb.w1", he_linear(rng, hidden, t_dim));
    store.insert("temb.b1", Tensor::zeros(&[t_dim]));
}

fn init_block<R: rand::Rng>(
    store: &mut ParamStore,
    prefix: &str,
    ch: usize,
    cond_dim: usize,
    cond_hidden: usize,
    conv_cin: usize,
    rng: &mut R,
) {
    store.insert(format!("{prefix}.mod.w0"), he_linear(rng, cond_dim, cond_hidden));
    store.insert(format!("{prefix}.mod.b0"), Tensor::zeros(&[cond_hidden]));
    store.insert(format!("{prefix}.mod.w1"), Tensor::zeros(&[cond_hidden, 2 * ch]));
    store.insert(format!("{prefix}.mod.b1"), Tensor::zeros(&[2 * ch]));
    store.insert(format!("{prefix}.conv.w"), he_conv(rng, 3, 3, conv_cin, ch));
    store.insert(format!("{prefix}.conv.b"), Tensor::zeros(&[ch]));
}

fn init_attn<R: rand::Rng>(store: &mut ParamStore, prefix: &str, ch: usize, rng: &mut R) {
    let std = 1.0 / (ch as Real).sqrt();
    store.insert(format!("{prefix}.wq"), Tensor::randn(&[ch, ch], std, rng));
    store.insert(format!("{prefix}.wk"), Tensor::randn(&[ch, ch], std, rng));
    store.insert(format!("{prefix}.wv"), Tensor::randn(&[ch, ch], std, rng));
    store.insert(format!("{prefix}.wo"), Tensor::zeros(&[ch, ch]));
}

/// Noise-predicting U-Net over rolled-out planes. The prediction head starts
/// at zero, so a freshly initialized network predicts zero noise.
pub struct DenoiserNet {
    pub cfg: NetConfig,
    pub params: ParamStore,
}

impl DenoiserNet {
    pub fn new(cfg: NetConfig, seed: u64) -> DenoiserNet {
        cfg.validate().expect("net config");
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let chs = cfg.stage_channels();
        let stages = chs.len();
        let cin_eff = match cfg.layout {
            Layout::Folded => 3 * cfg.in_channels,
            Layout::Rolled => cfg.in_channels,
        };
        let cond_dim = cfg.z_dim + cfg.t_dim;
        let block_cin = |ch: usize| if cfg.aware { 3 * ch } else { ch };

        init_temb(&mut store, cfg.t_dim, &mut rng);
        store.insert("stem.w", he_conv(&mut rng, 3, 3, cin_eff, chs[0]));
        store.insert("stem.b", Tensor::zeros(&[chs[0]]));
        for s in 0..stages - 1 {
            init_block(
                &mut store,
                &format!("enc{s}"),
                chs[s],
                cond_dim,
                cfg.cond_hidden,
                block_cin(chs[s]),
                &mut rng,
            );
            store.insert(format!("down{s}.w"), he_conv(&mut rng, 3, 3, chs[s], chs[s + 1]));
            store.insert(format!("down{s}.b"), Tensor::zeros(&[chs[s + 1]]));
        }
        let mc = chs[stages - 1];
        init_block(&mut store, "mid.a", mc, cond_dim, cfg.cond_hidden, block_cin(mc), &mut rng);
        init_attn(&mut store, "mid.attn", mc, &mut rng);
        init_block(&mut store, "mid.b", mc, cond_dim, cfg.cond_hidden, block_cin(mc), &mut rng);
        for s in (0..stages - 1).rev() {
            store.insert(format!("up{s}.w"), he_conv(&mut rng, 3, 3, chs[s + 1], chs[s]));
            store.insert(format!("up{s}.b"), Tensor::zeros(&[chs[s]]));
            init_block(
                &mut store,
                &format!("dec{s}"),
                chs[s],
                cond_dim,
                cfg.cond_hidden,
                block_cin(chs[s]),
                &mut rng,
            );
        }
        store.insert("head.w", Tensor::zeros(&[3, 3, chs[0], cin_eff]));
        store.insert("head.b", Tensor::zeros(&[cin_eff]));
        DenoiserNet { cfg, params: store }
    }

    fn conv_style(&self) -> ConvStyle {
        if self.cfg.aware {
            ConvStyle::Aware
        } else {
            match self.cfg.layout {
                Layout::Folded => ConvStyle::Plain,
                Layout::Rolled => ConvStyle::PerPlane,
            }
        }
    }

    fn spatial_style(&self) -> ConvStyle {
        match self.cfg.layout {
            Layout::Folded => ConvStyle::Plain,
            Layout::Rolled => ConvStyle::PerPlane,
        }
    }

    /// Conditioning row `[1, z_dim + t_dim]` (or `[1, t_dim]` without latent
    /// support): timestep MLP output, with the latent prepended. A missing
    /// latent stands in as zeros, the unconditional branch.
    fn cond_vector(
        &self,
        g: &mut Graph,
        bind: &Binding,
        t: usize,
        z: Option<NodeId>,
    ) -> Res {
        let emb = g.input(sin_time_embed(t, self.cfg.t_dim))?;
        let h0 = g.matmul(emb, bind.id("temb.w0"))?;
        let h0b = g.add_row_bias(h0, bind.id("temb.b0"))?;
        let h0a = g.silu(h0b)?;
        let h1 = g.matmul(h0a, bind.id("temb.w1"))?;
        let temb = g.add_row_bias(h1, bind.id("temb.b1"))?;
        if self.cfg.z_dim == 0 {
            return Ok(temb);
        }
        let zn = match z {
            Some(id) => {
                let zs = g.shape(id).to_vec();
                if zs.iter().product::<usize>() != self.cfg.z_dim {
                    return Err(shape_err(
                        "denoise",
                        format!("latent shape {zs:?} vs dim {}", self.cfg.z_dim),
                    ));
                }
                g.reshape(id, &[1, self.cfg.z_dim])?
            }
            None => g.input(Tensor::zeros(&[1, self.cfg.z_dim]))?,
        };
        Ok(g.concat_last(&[zn, temb])?)
    }

    /// Build the full denoiser on the graph. `y` must be a rolled-out
    /// `[r, 3r, c]` map; the output node has the same shape.
    pub fn forward(
        &self,
        g: &mut Graph,
        bind: &Binding,
        y: NodeId,
        t: usize,
        z: Option<NodeId>,
    ) -> Res {
        let cfg = &self.cfg;
        if t < 1 || t > cfg.t_max {
            return Err(DenoiserError::TimeOutOfRange { t, t_max: cfg.t_max });
        }
        let (r, c) = rolled_dims(g.shape(y))?;
        if c != cfg.in_channels {
            return Err(shape_err(
                "denoise",
                format!("{c} feature channels, network expects {}", cfg.in_channels),
            ));
        }
        let stages = cfg.mults.len();
        if r % (1 << (stages - 1)) != 0 {
            return Err(shape_err(
                "denoise",
                format!("plane resolution {r} not divisible by {}", 1 << (stages - 1)),
            ));
        }
        let cond = self.cond_vector(g, bind, t, z)?;
        let style = self.conv_style();
        let spatial = self.spatial_style();
        let groups = cfg.groups;

        let mut x = match cfg.layout {
            Layout::Folded => {
                let f = fold_planes(g, y)?;
                g.conv2d(f, bind.id("stem.w"), Some(bind.id("stem.b")), 1, 1)?
            }
            Layout::Rolled => {
                conv_per_plane(g, y, bind.id("stem.w"), Some(bind.id("stem.b")), 1, 1)?
            }
        };
        let mut skips = Vec::with_capacity(stages - 1);
        for s in 0..stages - 1 {
            x = res_block(g, bind, &format!("enc{s}"), x, cond, groups, style)?;
            skips.push(x);
            let kern = bind.id(&format!("down{s}.w"));
            let bias = bind.id(&format!("down{s}.b"));
            x = conv_by_style(g, x, kern, Some(bias), 2, 1, spatial)?;
        }
        x = res_block(g, bind, "mid.a", x, cond, groups, style)?;
        x = attention(g, bind, "mid.attn", x, groups)?;
        x = res_block(g, bind, "mid.b", x, cond, groups, style)?;
        for s in (0..stages - 1).rev() {
            let target = g.shape(skips[s])[0];
            x = match cfg.layout {
                Layout::Folded => g.resize_bilinear(x, target, g.shape(skips[s])[1])?,
                Layout::Rolled => resize_per_plane(g, x, target)?,
            };
            let kern = bind.id(&format!("up{s}.w"));
            let bias = bind.id(&format!("up{s}.b"));
            x = conv_by_style(g, x, kern, Some(bias), 1, 1, spatial)?;
            x = g.add(x, skips[s])?;
            x = res_block(g, bind, &format!("dec{s}"), x, cond, groups, style)?;
        }
        let n = g.group_norm(x, groups, 1e-5)?;
        let a = g.silu(n)?;
        let out = conv_by_style(g, a, bind.id("head.w"), Some(bind.id("head.b")), 1, 1, spatial)?;
        match cfg.layout {
            Layout::Folded => Ok(unfold_planes(g, out)?),
            Layout::Rolled => Ok(out),
        }
    }

    /// Plain evaluation: predict the noise in `y_t` at step `t`, optionally
    /// conditioned on a latent.
    pub fn denoise(&self, y_t: &Tensor, t: usize, z: Option<&Tensor>) -> Result<Tensor, DenoiserError> {
        let mut g = Graph::fast();
        let bind = Binding::bind_all(&mut g, &self.params, false)?;
        let y = g.input(y_t.clone())?;
        let zn = match z {
            Some(zt) => Some(g.input(zt.clone())?),
            None => None,
        };
        let out = self.forward(&mut g, &bind, y, t, zn)?;
        Ok(g.value(out).clone())
    }
}

#[derive(Clone, Debug)]
pub struct UpConfig {
    pub in_channels: usize,
    pub width: usize,
    pub t_dim: usize,
    pub cond_hidden: usize,
    pub t_max: usize,
    pub groups: usize,
    pub aware: bool,
}

impl UpConfig {
    pub fn base(in_channels: usize, t_max: usize) -> UpConfig {
        UpConfig {
            in_channels,
            width: 32,
            t_dim: 32,
            cond_hidden: 48,
            t_max,
            groups: 8,
            aware: true,
        }
    }
}

/// x0-predicting upsampler: the low-resolution conditioning map is upscaled
/// bilinearly, channel-concatenated with the noisy high-resolution input,
/// processed at half resolution, and upscaled once at the end. The head
/// starts at zero, so a fresh network predicts exactly the upscaled
/// conditioning map.
pub struct UpsamplerNet {
    pub cfg: UpConfig,
    pub params: ParamStore,
}

impl UpsamplerNet {
    pub fn new(cfg: UpConfig, seed: u64) -> UpsamplerNet {
        assert!(cfg.in_channels > 0 && cfg.width > 0 && cfg.t_max > 0);
        assert!(cfg.t_dim >= 2 && cfg.t_dim % 2 == 0);
        assert!(cfg.width % cfg.groups == 0);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let (c, w) = (cfg.in_channels, cfg.width);
        let block_cin = if cfg.aware { 3 * w } else { w };
        init_temb(&mut store, cfg.t_dim, &mut rng);
        store.insert("stem.w", he_conv(&mut rng, 3, 3, 2 * c, w));
        store.insert("stem.b", Tensor::zeros(&[w]));
        init_block(&mut store, "blk0", w, cfg.t_dim, cfg.cond_hidden, block_cin, &mut rng);
        init_block(&mut store, "blk1", w, cfg.t_dim, cfg.cond_hidden, block_cin, &mut rng);
        store.insert("head.w", Tensor::zeros(&[3, 3, w, c]));
        store.insert("head.b", Tensor::zeros(&[c]));
        UpsamplerNet { cfg, params: store }
    }

    /// Build the upsampler on the graph: `y_hr` the noisy rolled-out input at
    /// high resolution, `y_lr` the rolled-out conditioning at a resolution
    /// dividing it. Returns the predicted clean high-resolution map.
    pub fn forward(
        &self,
        g: &mut Graph,
        bind: &Binding,
        y_hr: NodeId,
        y_lr: NodeId,
        t: usize,
    ) -> Res {
        let cfg = &self.cfg;
        if t < 1 || t > cfg.t_max {
            return Err(DenoiserError::TimeOutOfRange { t, t_max: cfg.t_max });
        }
        let (rh, ch) = rolled_dims(g.shape(y_hr))?;
        let (rl, cl) = rolled_dims(g.shape(y_lr))?;
        if ch != cfg.in_channels || cl != cfg.in_channels {
            return Err(shape_err(
                "upsample",
                format!("channels {ch}/{cl}, network expects {}", cfg.in_channels),
            ));
        }
        if rh % rl != 0 {
            return Err(shape_err(
                "upsample",
                format!("conditioning resolution {rl} does not divide {rh}"),
            ));
        }
        if rh % 2 != 0 {
            return Err(shape_err("upsample", format!("resolution {rh} must be even")));
        }
        let style = if cfg.aware { ConvStyle::Aware } else { ConvStyle::PerPlane };
        let cond = {
            let emb = g.input(sin_time_embed(t, cfg.t_dim))?;
            let h0 = g.matmul(emb, bind.id("temb.w0"))?;
            let h0b = g.add_row_bias(h0, bind.id("temb.b0"))?;
            let h0a = g.silu(h0b)?;
            let h1 = g.matmul(h0a, bind.id("temb.w1"))?;
            g.add_row_bias(h1, bind.id("temb.b1"))?
        };
        let lr_up = resize_per_plane(g, y_lr, rh)?;
        let hp = split_planes(g, y_hr)?;
        let lp = split_planes(g, lr_up)?;
        let mut cat = Vec::with_capacity(3);
        for i in 0..3 {
            cat.push(g.concat_last(&[hp[i], lp[i]])?);
        }
        let cat = g.concat_w(&cat)?;
        let mut x = conv_per_plane(g, cat, bind.id("stem.w"), Some(bind.id("stem.b")), 2, 1)?;
        x = res_block(g, bind, "blk0", x, cond, cfg.groups, style)?;
        x = res_block(g, bind, "blk1", x, cond, cfg.groups, style)?;
        x = resize_per_plane(g, x, rh)?;
        let n = g.group_norm(x, cfg.groups, 1e-5)?;
        let a = g.silu(n)?;
        let delta = conv_per_plane(g, a, bind.id("head.w"), Some(bind.id("head.b")), 1, 1)?;
        Ok(g.add(lr_up, delta)?)
    }

    /// Plain evaluation of the clean-map prediction.
    pub fn denoise(
        &self,
        y_t_hr: &Tensor,
        y_lr: &Tensor,
        t: usize,
    ) -> Result<Tensor, DenoiserError> {
        let mut g = Graph::fast();
        let bind = Binding::bind_all(&mut g, &self.params, false)?;
        let yh = g.input(y_t_hr.clone())?;
        let yl = g.input(y_lr.clone())?;
        let out = self.forward(&mut g, &bind, yh, yl, t)?;
        Ok(g.value(out).clone())
    }
}

#[derive(Clone, Debug)]
pub struct EncoderConfig {
    /// Expected square input resolution; must be divisible by 16.
    pub in_res: usize,
    pub z_dim: usize,
    pub width: usize,
}

impl EncoderConfig {
    pub fn base(in_res: usize) -> EncoderConfig {
        EncoderConfig { in_res, z_dim: 64, width: 16 }
    }
}

/// Four stride-2 convolutions, a global mean pool, and a linear projection
/// from an RGB image to a latent vector.
pub struct LatentEncoder {
    pub cfg: EncoderConfig,
    pub params: ParamStore,
}

impl LatentEncoder {
    pub fn new(cfg: EncoderConfig, seed: u64) -> LatentEncoder {
        assert!(cfg.in_res >= 16 && cfg.in_res % 16 == 0, "input resolution {}", cfg.in_res);
        assert!(cfg.z_dim > 0 && cfg.width > 0);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let w = cfg.width;
        let chans = [3, w, 2 * w, 4 * w, 4 * w];
        for i in 0..4 {
            store.insert(format!("conv{i}.w"), he_conv(&mut rng, 3, 3, chans[i], chans[i + 1]));
            store.insert(format!("conv{i}.b"), Tensor::zeros(&[chans[i + 1]]));
        }
        store.insert("proj.w", he_linear(&mut rng, 4 * w, cfg.z_dim));
        store.insert("proj.b", Tensor::zeros(&[cfg.z_dim]));
        LatentEncoder { cfg, params: store }
    }

    /// Build the encoder on the graph from an `[in_res, in_res, 3]` image
    /// node to a `[z_dim]` latent node.
    pub fn forward(&self, g: &mut Graph, bind: &Binding, img: NodeId) -> Res {
        let s = g.shape(img).to_vec();
        if s != [self.cfg.in_res, self.cfg.in_res, 3] {
            return Err(shape_err(
                "encode",
                format!("image shape {s:?}, expected [{0}, {0}, 3]", self.cfg.in_res),
            ));
        }
        let mut x = img;
        for i in 0..4 {
            let kern = bind.id(&format!("conv{i}.w"));
            let bias = bind.id(&format!("conv{i}.b"));
            x = g.conv2d(x, kern, Some(bias), 2, 1)?;
            x = g.silu(x)?;
        }
        let rows = g.axis_mean(x, crate::numerics::PoolAxis::Rows)?;
        let pooled = g.axis_mean(rows, crate::numerics::PoolAxis::Cols)?;
        let c = g.shape(pooled)[2];
        let flat = g.reshape(pooled, &[1, c])?;
        let z = g.matmul(flat, bind.id("proj.w"))?;
        let zb = g.add_row_bias(z, bind.id("proj.b"))?;
        Ok(g.reshape(zb, &[self.cfg.z_dim])?)
    }

    /// Plain evaluation to a `[z_dim]` latent.
    pub fn encode(&self, img: &Tensor) -> Result<Tensor, DenoiserError> {
        let mut g = Graph::fast();
        let bind = Binding::bind_all(&mut g, &self.params, false)?;
        let x = g.input(img.clone())?;
        let z = self.forward(&mut g, &bind, x)?;
        Ok(g.value(z).clone())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::gradcheck;
    use crate::optim::Binding;
    use rand::{Rng, SeedableRng};
    use std::collections::BTreeMap;

    fn tiny_cfg(aware: bool, layout: Layout, z_dim: usize) -> NetConfig {
        NetConfig {
            in_channels: 2,
            width: 4,
            mults: vec![1, 2],
            z_dim,
            t_dim: 4,
            cond_hidden: 4,
            t_max: 10,
            groups: 2,
            layout,
            aware,
        }
    }

    fn randomize(store: &mut ParamStore, seed: u64) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for (_, t) in store.iter_mut() {
            let fresh = Tensor::randn(t.shape(), 0.3, &mut rng);
            *t = fresh;
        }
    }

    fn random_rolled(r: usize, c: usize, seed: u64) -> Tensor {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let data = (0..r * 3 * r * c).map(|_| rng.gen_range(-1.0..1.0)).collect();
        Tensor::from_vec(&[r, 3 * r, c], data).unwrap()
    }

    #[test]
    fn output_shape_matches_input_and_fresh_nets_predict_zero() {
        for (layout, z) in [(Layout::Rolled, 4), (Layout::Folded, 4), (Layout::Folded, 0)] {
            let aware = layout == Layout::Rolled;
            let net = DenoiserNet::new(tiny_cfg(aware, layout, z), 1);
            let y = random_rolled(8, 2, 2);
            let z_t = Tensor::randn(&[4], 1.0, &mut ChaCha8Rng::seed_from_u64(3));
            let zt = if z > 0 { Some(&z_t) } else { None };
            let out = net.denoise(&y, 3, zt).unwrap();
            assert_eq!(out.shape(), y.shape());
            assert!(out.data().iter().all(|&v| v == 0.0));
        }
    }

    #[test]
    fn repeated_calls_are_bitwise_identical() {
        let mut net = DenoiserNet::new(tiny_cfg(true, Layout::Rolled, 4), 5);
        randomize(&mut net.params, 6);
        let y = random_rolled(8, 2, 7);
        let z = Tensor::randn(&[4], 1.0, &mut ChaCha8Rng::seed_from_u64(8));
        let a = net.denoise(&y, 2, Some(&z)).unwrap();
        let b = net.denoise(&y, 2, Some(&z)).unwrap();
        assert_eq!(a.data(), b.data());
    }

    #[test]
    fn out_of_range_time_steps_are_rejected() {
        let net = DenoiserNet::new(tiny_cfg(true, Layout::Rolled, 4), 1);
        let y = random_rolled(8, 2, 1);
        assert!(matches!(
            net.denoise(&y, 0, None),
            Err(DenoiserError::TimeOutOfRange { .. })
        ));
        assert!(matches!(
            net.denoise(&y, 11, None),
            Err(DenoiserError::TimeOutOfRange { .. })
        ));
        assert!(net.denoise(&y, 10, None).is_ok());
    }

    #[test]
    fn zero_modulation_equals_plain_group_norm() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let mut store = ParamStore::new();
        store.insert("blk.mod.w0", he_linear(&mut rng, 6, 5));
        store.insert("blk.mod.b0", Tensor::zeros(&[5]));
        store.insert("blk.mod.w1", Tensor::zeros(&[5, 8]));
        store.insert("blk.mod.b1", Tensor::zeros(&[8]));
        let x = Tensor::randn(&[4, 4, 4], 1.0, &mut rng);
        let cond = Tensor::randn(&[1, 6], 1.0, &mut rng);

        let mut g = Graph::fast();
        let bind = Binding::bind_all(&mut g, &store, false).unwrap();
        let xn = g.input(x).unwrap();
        let cn = g.input(cond).unwrap();
        let out = adagn(&mut g, &bind, "blk", xn, cn, 2).unwrap();
        let plain = g.group_norm(xn, 2, 1e-5).unwrap();
        assert_eq!(g.value(out).data(), g.value(plain).data());
    }

    #[test]
    fn distinct_latents_change_the_prediction() {
        let mut net = DenoiserNet::new(tiny_cfg(true, Layout::Rolled, 4), 11);
        randomize(&mut net.params, 12);
        let y = random_rolled(8, 2, 13);
        let mut rng = ChaCha8Rng::seed_from_u64(14);
        let z1 = Tensor::randn(&[4], 1.0, &mut rng);
        let z2 = Tensor::randn(&[4], 1.0, &mut rng);
        let a = net.denoise(&y, 4, Some(&z1)).unwrap();
        let b = net.denoise(&y, 4, Some(&z2)).unwrap();
        let diff: Real = a
            .data()
            .iter()
            .zip(b.data())
            .map(|(x, y)| (x - y).abs())
            .fold(0.0, Real::max);
        assert!(diff > 1e-9, "latent had no effect (max diff {diff})");
        // The zeroed unconditional branch is a valid input, not an error.
        net.denoise(&y, 4, None).unwrap();
    }

    #[test]
    fn rolled_variant_equals_aware_variant_with_zeroed_aggregation() {
        let mut net_c = DenoiserNet::new(tiny_cfg(false, Layout::Rolled, 4), 21);
        randomize(&mut net_c.params, 22);
        let mut net_d = DenoiserNet::new(tiny_cfg(true, Layout::Rolled, 4), 21);
        let names: Vec<String> = net_c.params.iter().map(|(n, _)| n.clone()).collect();
        for name in names {
            let src = net_c.params.get(&name).clone();
            if name.ends_with(".conv.w") {
                let s = src.shape().to_vec();
                let (cin, cout) = (s[2], s[3]);
                let mut big = Tensor::zeros(&[3, 3, 3 * cin, cout]);
                for kh in 0..3 {
                    for kw in 0..3 {
                        for ci in 0..cin {
                            for co in 0..cout {
                                big.data_mut()[((kh * 3 + kw) * 3 * cin + ci) * cout + co] =
                                    src.data()[((kh * 3 + kw) * cin + ci) * cout + co];
                            }
                        }
                    }
                }
                *net_d.params.get_mut(&name) = big;
            } else {
                *net_d.params.get_mut(&name) = src;
            }
        }
        let y = random_rolled(8, 2, 23);
        let z = Tensor::randn(&[4], 1.0, &mut ChaCha8Rng::seed_from_u64(24));
        let a = net_c.denoise(&y, 5, Some(&z)).unwrap();
        let b = net_d.denoise(&y, 5, Some(&z)).unwrap();
        assert_eq!(a.data(), b.data());
    }

    #[test]
    fn miniature_denoiser_passes_finite_difference_checks() {
        let mut net = DenoiserNet::new(tiny_cfg(true, Layout::Rolled, 4), 31);
        randomize(&mut net.params, 32);
        let y = random_rolled(8, 2, 33);
        let z = Tensor::randn(&[4], 0.5, &mut ChaCha8Rng::seed_from_u64(34));
        let target = random_rolled(8, 2, 35);

        let mut names: Vec<String> = net.params.iter().map(|(n, _)| n.clone()).collect();
        names.sort();
        let mut tensors: Vec<Tensor> = names.iter().map(|n| net.params.get(n).clone()).collect();
        tensors.push(y);
        tensors.push(z);
        let cfg = net.cfg.clone();
        let err = gradcheck::max_grad_rel_err(&tensors, gradcheck::FD_STEP, &|g, ids| {
            let mut map = BTreeMap::new();
            for (i, n) in names.iter().enumerate() {
                map.insert(n.clone(), ids[i]);
            }
            let bind = Binding::from_ids(map);
            let view = DenoiserNet { cfg: cfg.clone(), params: ParamStore::new() };
            let out = view
                .forward(g, &bind, ids[names.len()], 3, Some(ids[names.len() + 1]))
                .unwrap();
            let tgt = g.input(target.clone()).unwrap();
            g.mse(out, tgt).unwrap()
        });
        assert!(err < 1e-3, "rel err {err}");
    }

    #[test]
    fn upsampler_contract_and_fresh_prediction() {
        let cfg = UpConfig {
            in_channels: 2,
            width: 4,
            t_dim: 4,
            cond_hidden: 4,
            t_max: 8,
            groups: 2,
            aware: true,
        };
        let net = UpsamplerNet::new(cfg, 41);
        let y_hr = random_rolled(8, 2, 42);
        let y_lr = random_rolled(4, 2, 43);
        let out = net.denoise(&y_hr, &y_lr, 2).unwrap();
        assert_eq!(out.shape(), y_hr.shape());
        let again = net.denoise(&y_hr, &y_lr, 2).unwrap();
        assert_eq!(out.data(), again.data());

        // Fresh head is zero, so the prediction is exactly the upscaled
        // conditioning map.
        let mut g = Graph::fast();
        let lr = g.input(y_lr.clone()).unwrap();
        let up = resize_per_plane(&mut g, lr, 8).unwrap();
        assert_eq!(out.data(), g.value(up).data());

        // Non-dividing conditioning resolution is an error.
        let bad = random_rolled(3, 2, 44);
        assert!(net.denoise(&y_hr, &bad, 2).is_err());
        let wrong_c = random_rolled(4, 3, 45);
        assert!(net.denoise(&y_hr, &wrong_c, 2).is_err());
    }

    #[test]
    fn miniature_upsampler_passes_finite_difference_checks() {
        let cfg = UpConfig {
            in_channels: 2,
            width: 4,
            t_dim: 4,
            cond_hidden: 4,
            t_max: 8,
            groups: 2,
            aware: true,
        };
        let mut net = UpsamplerNet::new(cfg, 51);
        randomize(&mut net.params, 52);
        let y_hr = random_rolled(8, 2, 53);
        let y_lr = random_rolled(4, 2, 54);
        let target = random_rolled(8, 2, 55);

        let mut names: Vec<String> = net.params.iter().map(|(n, _)| n.clone()).collect();
        names.sort();
        let mut tensors: Vec<Tensor> = names.iter().map(|n| net.params.get(n).clone()).collect();
        tensors.push(y_hr);
        tensors.push(y_lr);
        let cfg = net.cfg.clone();
        let err = gradcheck::max_grad_rel_err(&tensors, gradcheck::FD_STEP, &|g, ids| {
            let mut map = BTreeMap::new();
            for (i, n) in names.iter().enumerate() {
                map.insert(n.clone(), ids[i]);
            }
            let bind = Binding::from_ids(map);
            let view = UpsamplerNet { cfg: cfg.clone(), params: ParamStore::new() };
            let out = view
                .forward(g, &bind, ids[names.len()], ids[names.len() + 1], 2)
                .unwrap();
            let tgt = g.input(target.clone()).unwrap();
            g.mse(out, tgt).unwrap()
        });
        assert!(err < 1e-3, "rel err {err}");
    }

    #[test]
    fn latent_encoder_contracts() {
        let enc = LatentEncoder::new(EncoderConfig { in_res: 32, z_dim: 8, width: 4 }, 61);
        let mut rng = ChaCha8Rng::seed_from_u64(62);
        let img = Tensor::randn(&[32, 32, 3], 0.5, &mut rng);
        let z = enc.encode(&img).unwrap();
        assert_eq!(z.shape(), [8]);
        let z2 = enc.encode(&img).unwrap();
        assert_eq!(z.data(), z2.data());
        let small = Tensor::randn(&[16, 16, 3], 0.5, &mut rng);
        assert!(enc.encode(&small).is_err());
        // Different images map to different latents.
        let other = Tensor::randn(&[32, 32, 3], 0.5, &mut rng);
        let z3 = enc.encode(&other).unwrap();
        assert!(z.data().iter().zip(z3.data()).any(|(a, b)| (a - b).abs() > 1e-9));
    }

    #[test]
    fn variant_presets_configure_layout_and_conditioning() {
        let base = NetConfig::base(4, 100);
        let a = base.clone().with_variant(NetVariant::Baseline);
        assert_eq!((a.layout, a.aware, a.z_dim), (Layout::Folded, false, 0));
        let b = base.clone().with_variant(NetVariant::Latent);
        assert_eq!((b.layout, b.aware), (Layout::Folded, false));
        assert!(b.z_dim > 0);
        let c = base.clone().with_variant(NetVariant::RollOut);
        assert_eq!((c.layout, c.aware), (Layout::Rolled, false));
        let d = base.clone().with_variant(NetVariant::Aware);
        assert_eq!((d.layout, d.aware), (Layout::Rolled, true));
        assert!(NetVariant::parse("c") == Some(NetVariant::RollOut));
        assert!(NetVariant::parse("x").is_none());
    }
}
