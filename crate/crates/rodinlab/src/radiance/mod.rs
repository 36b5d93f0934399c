//! Radiance decoding and volumetric rendering: the shared 4-layer MLP that
//! turns tri-plane features into density and color, pinhole cameras, ray
//! sampling over the subject box, alpha compositing (plain and graph paths),
//! and full-image / patch renderers with per-pixel deterministic seeding.

pub mod image;
pub mod mesh;

use crate::numerics::{kernels as kn, Graph, Mode, NodeId, NumericsError, Real, Tensor};
use crate::optim::{Binding, ParamStore};
use crate::triplane::{fourier_embed, fourier_graph, Aabb, FourierSpec, TriPlane};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum RadianceError {
    #[error("patch {x0},{y0} {w}x{h} exceeds image {iw}x{ih}")]
    PatchOutOfBounds {
        x0: usize,
        y0: usize,
        w: usize,
        h: usize,
        iw: usize,
        ih: usize,
    },
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
    #[error("bad image file: {0}")]
    BadImage(String),
    #[error(transparent)]
    Numerics(#[from] NumericsError),
}

// ---- decoder ----

/// Shared MLP decoder: concat(y_p, fourier(y_p), d) -> 4 FC layers (SiLU on
/// hidden) -> softplus density + sigmoid color.
#[derive(Clone, Debug)]
pub struct RadianceDecoder {
    pub channels: usize,
    pub hidden: usize,
    pub fourier: FourierSpec,
    /// fc0..fc3 weights `[in,out]` and biases `[out]`.
    pub ws: [Tensor; 4],
    pub bs: [Tensor; 4],
}

impl RadianceDecoder {
    pub fn in_dim(channels: usize, fourier: FourierSpec) -> usize {
        channels + fourier.out_dim(channels) + 3
    }

    pub fn new<R: Rng>(channels: usize, fourier: FourierSpec, hidden: usize, rng: &mut R) -> Self {
        let dims = [
            Self::in_dim(channels, fourier),
            hidden,
            hidden,
            hidden,
            4, // density + rgb
        ];
        let mut ws = Vec::with_capacity(4);
        let mut bs = Vec::with_capacity(4);
        for i in 0..4 {
            let std = (2.0 / dims[i] as Real).sqrt();
            ws.push(Tensor::randn(&[dims[i], dims[i + 1]], std, rng));
            bs.push(Tensor::zeros(&[dims[i + 1]]));
        }
        RadianceDecoder {
            channels,
            hidden,
            fourier,
            ws: ws.try_into().unwrap(),
            bs: bs.try_into().unwrap(),
        }
    }

    pub fn insert_params(&self, store: &mut ParamStore, prefix: &str) {
        for i in 0..4 {
            store.insert(format!("{prefix}.fc{i}.w"), self.ws[i].clone());
            store.insert(format!("{prefix}.fc{i}.b"), self.bs[i].clone());
        }
    }

    pub fn load_params(&mut self, store: &ParamStore, prefix: &str) {
        for i in 0..4 {
            self.ws[i] = store.get(&format!("{prefix}.fc{i}.w")).clone();
            self.bs[i] = store.get(&format!("{prefix}.fc{i}.b")).clone();
        }
    }

    /// Plain forward: features `[n,c]` + unit view dirs `[n,3]` ->
    /// (density `[n,1]`, color `[n,3]`). Checked mode validates direction
    /// norms and finiteness.
    pub fn decode(
        &self,
        feats: &Tensor,
        dirs: &Tensor,
        mode: Mode,
    ) -> Result<(Tensor, Tensor), NumericsError> {
        let n = feats.shape()[0];
        if feats.rank() != 2 || feats.shape()[1] != self.channels {
            return Err(NumericsError::ShapeMismatch {
                op: "decode",
                axis: "features",
                detail: format!("{:?}, decoder expects [n,{}]", feats.shape(), self.channels),
            });
        }
        if dirs.shape() != [n, 3] {
            return Err(NumericsError::ShapeMismatch {
                op: "decode",
                axis: "dirs",
                detail: format!("{:?} vs [{n},3]", dirs.shape()),
            });
        }
        if mode == Mode::Checked {
            for i in 0..n {
                let d = &dirs.data()[i * 3..i * 3 + 3];
                let norm = (d[0] * d[0] + d[1] * d[1] + d[2] * d[2]).sqrt();
                if (norm - 1.0).abs() > 1e-6 {
                    return Err(NumericsError::OutOfRange {
                        op: "decode",
                        detail: format!("dir[{i}] norm {norm}"),
                    });
                }
            }
        }
        let emb = fourier_embed(feats, self.fourier);
        let in_dim = Self::in_dim(self.channels, self.fourier);
        let mut x = vec![0.0; n * in_dim];
        let (c, e) = (self.channels, emb.shape()[1]);
        for i in 0..n {
            let row = &mut x[i * in_dim..(i + 1) * in_dim];
            row[..c].copy_from_slice(&feats.data()[i * c..(i + 1) * c]);
            row[c..c + e].copy_from_slice(&emb.data()[i * e..(i + 1) * e]);
            row[c + e..].copy_from_slice(&dirs.data()[i * 3..(i + 1) * 3]);
        }
        let mut width = in_dim;
        for layer in 0..4 {
            let out_w = self.ws[layer].shape()[1];
            let mut y = kn::matmul(&x, self.ws[layer].data(), n, width, out_w);
            let bias = self.bs[layer].data();
            for i in 0..n {
                for j in 0..out_w {
                    y[i * out_w + j] += bias[j];
                }
            }
            if layer < 3 {
                for v in y.iter_mut() {
                    *v *= kn::sigmoid(*v);
                }
            }
            x = y;
            width = out_w;
        }
        let mut sigma = vec![0.0; n];
        let mut rgb = vec![0.0; n * 3];
        for i in 0..n {
            sigma[i] = kn::softplus(x[i * 4]);
            for ch in 0..3 {
                rgb[i * 3 + ch] = kn::sigmoid(x[i * 4 + 1 + ch]);
            }
        }
        let st = Tensor::from_vec(&[n, 1], sigma)?;
        let ct = Tensor::from_vec(&[n, 3], rgb)?;
        if mode == Mode::Checked && (!st.all_finite() || !ct.all_finite()) {
            return Err(NumericsError::NonFinite { op: "decode" });
        }
        Ok((st, ct))
    }

    /// Graph forward against weights bound in `bind` under
    /// `{prefix}.fc{i}.{w,b}`; returns (density `[n,1]`, color `[n,3]`).
    pub fn decode_graph(
        &self,
        g: &mut Graph,
        bind: &Binding,
        prefix: &str,
        feats: NodeId,
        dirs: NodeId,
    ) -> Result<(NodeId, NodeId), NumericsError> {
        let emb = fourier_graph(g, feats, self.fourier)?;
        let mut h = g.concat_last(&[feats, emb, dirs])?;
        for i in 0..4 {
            let w = bind.id(&format!("{prefix}.fc{i}.w"));
            let b = bind.id(&format!("{prefix}.fc{i}.b"));
            h = g.matmul(h, w)?;
            h = g.add_row_bias(h, b)?;
            if i < 3 {
                h = g.silu(h)?;
            }
        }
        let sraw = g.slice_last(h, 0, 1)?;
        let craw = g.slice_last(h, 1, 3)?;
        Ok((g.softplus(sraw)?, g.sigmoid(craw)?))
    }
}

// ---- camera ----

#[derive(Clone, Copy, Debug)]
pub struct Camera {
    pub pos: [Real; 3],
    pub target: [Real; 3],
    pub up: [Real; 3],
    pub fov_y: Real,
    pub width: usize,
    pub height: usize,
}

fn sub3(a: [Real; 3], b: [Real; 3]) -> [Real; 3] {
    [a[0] - b[0], a[1] - b[1], a[2] - b[2]]
}

fn cross3(a: [Real; 3], b: [Real; 3]) -> [Real; 3] {
    [
        a[1] * b[2] - a[2] * b[1],
        a[2] * b[0] - a[0] * b[2],
        a[0] * b[1] - a[1] * b[0],
    ]
}

fn norm3(a: [Real; 3]) -> Real {
    (a[0] * a[0] + a[1] * a[1] + a[2] * a[2]).sqrt()
}

fn normalize3(a: [Real; 3]) -> [Real; 3] {
    let n = norm3(a);
    [a[0] / n, a[1] / n, a[2] / n]
}

impl Camera {
    pub fn new(
        pos: [Real; 3],
        target: [Real; 3],
        up: [Real; 3],
        fov_y: Real,
        width: usize,
        height: usize,
    ) -> Self {
        assert!(norm3(sub3(pos, target)) > 1e-9, "camera at its target");
        assert!(fov_y > 0.0 && fov_y < crate::numerics::PI, "fov out of range");
        assert!(width >= 1 && height >= 1);
        Camera {
            pos,
            target,
            up,
            fov_y,
            width,
            height,
        }
    }

    /// Camera on an orbit around `target`: azimuth 0 puts it on the +x axis
    /// (frontal for subjects that face +x), up is +z, angles in radians.
    pub fn orbit(
        radius: Real,
        azimuth: Real,
        elevation: Real,
        target: [Real; 3],
        fov_y: Real,
        width: usize,
        height: usize,
    ) -> Self {
        let pos = [
            target[0] + radius * elevation.cos() * azimuth.cos(),
            target[1] + radius * elevation.cos() * azimuth.sin(),
            target[2] + radius * elevation.sin(),
        ];
        Camera::new(pos, target, [0.0, 0.0, 1.0], fov_y, width, height)
    }

    fn basis(&self) -> ([Real; 3], [Real; 3], [Real; 3]) {
        let fwd = normalize3(sub3(self.target, self.pos));
        let right = normalize3(cross3(fwd, self.up));
        let cup = cross3(right, fwd);
        (fwd, right, cup)
    }

    /// Unit ray through the center of pixel (px, py); py counts down from
    /// the top image row.
    pub fn ray(&self, px: usize, py: usize) -> ([Real; 3], [Real; 3]) {
        let (fwd, right, cup) = self.basis();
        let aspect = self.width as Real / self.height as Real;
        let th = (0.5 * self.fov_y).tan();
        let sx = (2.0 * (px as Real + 0.5) / self.width as Real - 1.0) * th * aspect;
        let sy = (1.0 - 2.0 * (py as Real + 0.5) / self.height as Real) * th;
        let dir = [
            fwd[0] + sx * right[0] + sy * cup[0],
            fwd[1] + sx * right[1] + sy * cup[1],
            fwd[2] + sx * right[2] + sy * cup[2],
        ];
        (self.pos, normalize3(dir))
    }
}

// ---- render configuration and sampling ----

#[derive(Clone, Copy, Debug)]
pub struct RenderConfig {
    pub samples_per_ray: usize,
    pub near: Real,
    pub far: Real,
    pub background: [Real; 3],
    pub jitter: bool,
    pub seed: u64,
}

impl Default for RenderConfig {
    fn default() -> Self {
        RenderConfig {
            samples_per_ray: 48,
            near: 0.1,
            far: 10.0,
            background: [1.0, 1.0, 1.0],
            jitter: false,
            seed: 0,
        }
    }
}

impl RenderConfig {
    pub fn validate(&self) {
        assert!(self.samples_per_ray >= 2, "need at least 2 samples per ray");
        assert!(self.near < self.far, "near must precede far");
    }
}

/// RNG for one pixel: an independent ChaCha stream per absolute pixel index,
/// so any crop of an image reuses exactly the full image's randomness.
pub fn pixel_rng(seed: u64, pixel_index: u64) -> ChaCha8Rng {
    let mut r = ChaCha8Rng::seed_from_u64(seed);
    r.set_stream(pixel_index);
    r
}

/// Entry/exit parameters of a ray against a box, intersected with
/// [near, far]; `None` when the ray misses.
pub fn intersect_box(
    origin: [Real; 3],
    dir: [Real; 3],
    bbox: &Aabb,
    near: Real,
    far: Real,
) -> Option<(Real, Real)> {
    let mut t0 = near;
    let mut t1 = far;
    for i in 0..3 {
        if dir[i].abs() < 1e-12 {
            if origin[i] < bbox.min[i] || origin[i] > bbox.max[i] {
                return None;
            }
            continue;
        }
        let mut ta = (bbox.min[i] - origin[i]) / dir[i];
        let mut tb = (bbox.max[i] - origin[i]) / dir[i];
        if ta > tb {
            std::mem::swap(&mut ta, &mut tb);
        }
        t0 = t0.max(ta);
        t1 = t1.min(tb);
    }
    if t1 > t0 {
        Some((t0, t1))
    } else {
        None
    }
}

/// One ray's quadrature: equal-width bins over the in-box segment with
/// per-bin sample depths (centers, or stratified when jittered).
#[derive(Clone, Debug)]
pub struct RaySamples {
    pub pixel: (usize, usize),
    pub origin: [Real; 3],
    pub dir: [Real; 3],
    pub t0: Real,
    pub delta: Real,
    pub ts: Vec<Real>,
}

impl RaySamples {
    pub fn point(&self, i: usize) -> [Real; 3] {
        let t = self.ts[i];
        [
            self.origin[0] + t * self.dir[0],
            self.origin[1] + t * self.dir[1],
            self.origin[2] + t * self.dir[2],
        ]
    }
}

/// A batch of rays ready for evaluation; `slots[i]` is the index into `rays`
/// for the i-th requested pixel, or `None` when that ray missed the box.
pub struct RayBundle {
    pub rays: Vec<RaySamples>,
    pub slots: Vec<Option<usize>>,
    pub n_samples: usize,
}

impl RayBundle {
    pub fn points(&self) -> Vec<[Real; 3]> {
        let mut out = Vec::with_capacity(self.rays.len() * self.n_samples);
        for r in &self.rays {
            for i in 0..r.ts.len() {
                out.push(r.point(i));
            }
        }
        out
    }

    pub fn dirs(&self) -> Vec<[Real; 3]> {
        let mut out = Vec::with_capacity(self.rays.len() * self.n_samples);
        for r in &self.rays {
            for _ in 0..r.ts.len() {
                out.push(r.dir);
            }
        }
        out
    }

    /// Sample depths and bin widths as `[rays, n_samples]` tensors, for the
    /// distortion penalty.
    pub fn depth_tensors(&self) -> (Tensor, Tensor) {
        let (r, n) = (self.rays.len(), self.n_samples);
        let mut mid = Vec::with_capacity(r * n);
        let mut width = Vec::with_capacity(r * n);
        for ray in &self.rays {
            mid.extend_from_slice(&ray.ts);
            width.extend(std::iter::repeat(ray.delta).take(n));
        }
        (
            Tensor::from_vec(&[r, n], mid).expect("mid shape"),
            Tensor::from_vec(&[r, n], width).expect("width shape"),
        )
    }
}

/// Build rays for the given pixels (absolute coordinates); sampling depths
/// come from each pixel's own RNG stream.
pub fn bundle_for_pixels(
    cam: &Camera,
    bbox: &Aabb,
    cfg: &RenderConfig,
    pixels: &[(usize, usize)],
) -> RayBundle {
    cfg.validate();
    let n = cfg.samples_per_ray;
    let mut rays = Vec::new();
    let mut slots = Vec::with_capacity(pixels.len());
    for &(px, py) in pixels {
        let (origin, dir) = cam.ray(px, py);
        let Some((t0, t1)) = intersect_box(origin, dir, bbox, cfg.near, cfg.far) else {
            slots.push(None);
            continue;
        };
        let delta = (t1 - t0) / n as Real;
        let mut rng = pixel_rng(cfg.seed, (py * cam.width + px) as u64);
        let ts: Vec<Real> = (0..n)
            .map(|i| {
                let off = if cfg.jitter { rng.gen::<Real>() } else { 0.5 };
                t0 + (i as Real + off) * delta
            })
            .collect();
        slots.push(Some(rays.len()));
        rays.push(RaySamples {
            pixel: (px, py),
            origin,
            dir,
            t0,
            delta,
            ts,
        });
    }
    RayBundle {
        rays,
        slots,
        n_samples: n,
    }
}

// ---- fields and compositing ----

/// Anything renderable: world points + unit view dirs -> densities (>= 0)
/// and colors in [0,1].
pub trait FieldEval {
    fn eval(&self, points: &[[Real; 3]], dirs: &[[Real; 3]]) -> (Vec<Real>, Vec<[Real; 3]>);
}

/// A fitted tri-plane rendered through the shared decoder.
pub struct TriPlaneField<'a> {
    pub tp: &'a TriPlane,
    pub dec: &'a RadianceDecoder,
}

impl FieldEval for TriPlaneField<'_> {
    fn eval(&self, points: &[[Real; 3]], dirs: &[[Real; 3]]) -> (Vec<Real>, Vec<[Real; 3]>) {
        // sample construction keeps points inside the box up to roundoff, so
        // clamp rather than error on the boundary
        let norm: Vec<[Real; 3]> = points
            .iter()
            .map(|&p| self.tp.bbox.normalize(p).map(|v| v.clamp(0.0, 1.0)))
            .collect();
        let feats = self
            .tp
            .query_features(&norm, Mode::Fast)
            .expect("in-range query");
        let n = points.len();
        let mut d = vec![0.0; n * 3];
        for (i, dir) in dirs.iter().enumerate() {
            d[i * 3..i * 3 + 3].copy_from_slice(dir);
        }
        let dt = Tensor::from_vec(&[n, 3], d).expect("dirs shape");
        let (sigma, rgb) = self.dec.decode(&feats, &dt, Mode::Fast).expect("decode");
        let colors = (0..n)
            .map(|i| [rgb.data()[i * 3], rgb.data()[i * 3 + 1], rgb.data()[i * 3 + 2]])
            .collect();
        (sigma.data().to_vec(), colors)
    }
}

#[derive(Clone, Debug)]
pub struct RayComposite {
    pub color: [Real; 3],
    pub weights: Vec<Real>,
    /// Total foreground weight (opacity).
    pub alpha: Real,
}

/// Alpha-composite one ray's samples over equal bins of width `delta`.
pub fn composite(
    sigmas: &[Real],
    colors: &[[Real; 3]],
    delta: Real,
    bg: [Real; 3],
) -> RayComposite {
    let mut trans = 1.0;
    let mut wsum = 0.0;
    let mut color = [0.0; 3];
    let mut weights = Vec::with_capacity(sigmas.len());
    for (&s, c) in sigmas.iter().zip(colors) {
        let e = (-s * delta).exp();
        let w = trans * (1.0 - e);
        for ch in 0..3 {
            color[ch] += w * c[ch];
        }
        weights.push(w);
        wsum += w;
        trans *= e;
    }
    for ch in 0..3 {
        color[ch] += (1.0 - wsum) * bg[ch];
    }
    RayComposite {
        color,
        weights,
        alpha: wsum,
    }
}

/// Evaluate and composite a bundle in bounded chunks; one result per hit ray.
pub fn eval_bundle(
    field: &dyn FieldEval,
    bundle: &RayBundle,
    bg: [Real; 3],
) -> Vec<RayComposite> {
    let n = bundle.n_samples;
    let chunk_rays = (16384 / n).max(1);
    let mut out = Vec::with_capacity(bundle.rays.len());
    let mut points = Vec::with_capacity(chunk_rays * n);
    let mut dirs = Vec::with_capacity(chunk_rays * n);
    for group in bundle.rays.chunks(chunk_rays) {
        points.clear();
        dirs.clear();
        for ray in group {
            for i in 0..n {
                points.push(ray.point(i));
                dirs.push(ray.dir);
            }
        }
        let (sigmas, colors) = field.eval(&points, &dirs);
        for (k, ray) in group.iter().enumerate() {
            out.push(composite(
                &sigmas[k * n..(k + 1) * n],
                &colors[k * n..(k + 1) * n],
                ray.delta,
                bg,
            ));
        }
    }
    out
}

/// Single-ray render; `pixel_index` selects the RNG stream exactly as the
/// image renderer would for that pixel.
pub fn render_ray(
    field: &dyn FieldEval,
    cam: &Camera,
    bbox: &Aabb,
    cfg: &RenderConfig,
    px: usize,
    py: usize,
) -> RayComposite {
    let bundle = bundle_for_pixels(cam, bbox, cfg, &[(px, py)]);
    match bundle.slots[0] {
        None => RayComposite {
            color: cfg.background,
            weights: vec![0.0; cfg.samples_per_ray],
            alpha: 0.0,
        },
        Some(_) => eval_bundle(field, &bundle, cfg.background).pop().unwrap(),
    }
}

// ---- image rendering ----

#[derive(Clone, Copy, Debug)]
pub struct Rect {
    pub x0: usize,
    pub y0: usize,
    pub w: usize,
    pub h: usize,
}

impl Rect {
    pub fn full(cam: &Camera) -> Self {
        Rect {
            x0: 0,
            y0: 0,
            w: cam.width,
            h: cam.height,
        }
    }
}

/// Render a rectangular patch; identical to the same crop of the full image
/// because pixel RNG streams are keyed by absolute pixel index.
pub fn render_patch(
    field: &dyn FieldEval,
    cam: &Camera,
    bbox: &Aabb,
    rect: Rect,
    cfg: &RenderConfig,
) -> Result<Tensor, RadianceError> {
    if rect.x0 + rect.w > cam.width || rect.y0 + rect.h > cam.height || rect.w == 0 || rect.h == 0 {
        return Err(RadianceError::PatchOutOfBounds {
            x0: rect.x0,
            y0: rect.y0,
            w: rect.w,
            h: rect.h,
            iw: cam.width,
            ih: cam.height,
        });
    }
    let mut pixels = Vec::with_capacity(rect.w * rect.h);
    for y in rect.y0..rect.y0 + rect.h {
        for x in rect.x0..rect.x0 + rect.w {
            pixels.push((x, y));
        }
    }
    let bundle = bundle_for_pixels(cam, bbox, cfg, &pixels);
    let composites = eval_bundle(field, &bundle, cfg.background);
    let mut img = vec![0.0; rect.h * rect.w * 3];
    for (i, slot) in bundle.slots.iter().enumerate() {
        let color = match slot {
            Some(r) => composites[*r].color,
            None => cfg.background,
        };
        img[i * 3..i * 3 + 3].copy_from_slice(&color);
    }
    Ok(Tensor::from_vec(&[rect.h, rect.w, 3], img)?)
}

pub fn render_image(
    field: &dyn FieldEval,
    cam: &Camera,
    bbox: &Aabb,
    cfg: &RenderConfig,
) -> Tensor {
    render_patch(field, cam, bbox, Rect::full(cam), cfg).expect("full rect is in bounds")
}

// ---- differentiable path ----

pub struct CompositeNodes {
    /// `[rays, 3]` composited pixels.
    pub pixels: NodeId,
    /// `[rays, n_samples]` per-sample weights.
    pub weights: NodeId,
    /// `[rays, 1]` total foreground weight.
    pub wsum: NodeId,
}

/// Graph-path compositing of decoded density/color over a bundle's bins.
pub fn composite_graph(
    g: &mut Graph,
    sigma: NodeId,
    rgb: NodeId,
    bundle: &RayBundle,
    bg: [Real; 3],
) -> Result<CompositeNodes, NumericsError> {
    let (r, n) = (bundle.rays.len(), bundle.n_samples);
    let mut deltas = Vec::with_capacity(r * n);
    for ray in &bundle.rays {
        deltas.extend(std::iter::repeat(ray.delta).take(n));
    }
    let delta = g.input(Tensor::from_vec(&[r * n, 1], deltas)?)?;
    let s = g.mul(sigma, delta)?;
    let s2 = g.reshape(s, &[r, n])?;
    let csum = g.cumsum_excl_rows(s2)?;
    let ncsum = g.neg(csum)?;
    let trans = g.exp(ncsum)?;
    let ns2 = g.neg(s2)?;
    let ksi = g.exp(ns2)?;
    let nksi = g.neg(ksi)?;
    let alpha = g.add_scalar(nksi, 1.0)?;
    let w = g.mul(trans, alpha)?;
    let w3 = g.repeat_last(w, 3)?;
    let c3 = g.reshape(rgb, &[r, n, 3])?;
    let wc = g.mul(w3, c3)?;
    let fg = g.sum_mid(wc)?;
    let w1 = g.reshape(w, &[r, n, 1])?;
    let wsum = g.sum_mid(w1)?;
    let nwsum = g.neg(wsum)?;
    let resid = g.add_scalar(nwsum, 1.0)?;
    let resid3 = {
        let rep = g.repeat_last(resid, 3)?;
        g.reshape(rep, &[r, 1, 3])?
    };
    let bg_node = g.input(Tensor::from_vec(&[3], bg.to_vec())?)?;
    let bg_term = g.mul_channel(resid3, bg_node)?;
    let bg_flat = g.reshape(bg_term, &[r, 3])?;
    let pixels = g.add(fg, bg_flat)?;
    Ok(CompositeNodes {
        pixels,
        weights: w,
        wsum,
    })
}

pub struct GraphRender {
    /// `[rays, 3]` composited pixels.
    pub pixels: NodeId,
    /// `[rays, n_samples]` per-sample weights.
    pub weights: NodeId,
    /// `[rays, 1]` total foreground weight.
    pub wsum: NodeId,
    /// `[rays * n_samples, 1]` decoded densities.
    pub sigma: NodeId,
    /// `[rays * n_samples, 3]` decoded colors.
    pub rgb: NodeId,
}

/// Full differentiable render of a bundle: tri-plane query, decoder, and
/// compositing, with gradients flowing to whatever `plane_ids` and the
/// decoder's bound parameters were declared as.
pub fn render_graph(
    g: &mut Graph,
    plane_ids: [NodeId; 3],
    dec: &RadianceDecoder,
    bind: &Binding,
    dec_prefix: &str,
    bundle: &RayBundle,
    bbox: &Aabb,
    bg: [Real; 3],
) -> Result<GraphRender, NumericsError> {
    let norm: Vec<[Real; 3]> = bundle
        .points()
        .iter()
        .map(|&p| bbox.normalize(p).map(|v| v.clamp(0.0, 1.0)))
        .collect();
    let feats = TriPlane::query_graph(g, plane_ids, &norm)?;
    let dirs = bundle.dirs();
    let mut d = Vec::with_capacity(dirs.len() * 3);
    for dir in &dirs {
        d.extend_from_slice(dir);
    }
    let dirs_node = g.input(Tensor::from_vec(&[dirs.len(), 3], d)?)?;
    let (sigma, rgb) = dec.decode_graph(g, bind, dec_prefix, feats, dirs_node)?;
    let c = composite_graph(g, sigma, rgb, bundle, bg)?;
    Ok(GraphRender {
        pixels: c.pixels,
        weights: c.weights,
        wsum: c.wsum,
        sigma,
        rgb,
    })
}
