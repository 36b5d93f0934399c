//! DDPM machinery over rolled-out tri-plane maps: linear noise schedules,
//! forward corruption, training losses, classifier-free guidance, ancestral
//! and x0-parameterized reverse chains, conditioning augmentation for the
//! cascade stage, a small latent prior, and EMA weight tracking. Patch
//! supervision substitutes pixel MSE plus finite-difference image gradients
//! for a pretrained feature extractor.

use crate::denoiser::{sin_time_embed, DenoiserError, DenoiserNet, LatentEncoder, UpsamplerNet};
use crate::denoiser::aware::{rolled_dims, split_planes};
use crate::numerics::{Graph, NodeId, NumericsError, Real, Tensor};
use crate::optim::{AdamW, Binding, ParamStore};
use crate::radiance::{
    bundle_for_pixels, render_graph, Camera, RadianceDecoder, RadianceError, Rect, RenderConfig,
};
use crate::triplane::{Aabb, TriPlane, TriPlaneError};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum DiffusionError {
    #[error("invalid noise schedule: {0}")]
    BadSchedule(String),
    #[error("invalid augmentation parameters: {0}")]
    BadParams(String),
    #[error("timestep {t} outside schedule range 1..={t_max}")]
    TimeOutOfRange { t: usize, t_max: usize },
    #[error("{op}: {detail}")]
    Shape { op: &'static str, detail: String },
    #[error("supervision ray at pixel ({x}, {y}) misses the scene box")]
    PatchNotCovered { x: usize, y: usize },
    #[error(transparent)]
    Denoiser(#[from] DenoiserError),
    #[error(transparent)]
    Numerics(#[from] NumericsError),
    #[error(transparent)]
    Radiance(#[from] RadianceError),
    #[error(transparent)]
    TriPlane(#[from] TriPlaneError),
}

fn shape_err(op: &'static str, detail: impl Into<String>) -> DiffusionError {
    DiffusionError::Shape {
        op,
        detail: detail.into(),
    }
}

// ---- noise schedule ----

/// Variance schedule: betas for t = 1..=T and the cumulative products
/// alpha_bar(t) = prod_{s<=t} (1 - beta_s), with alpha_bar(0) == 1 by
/// convention. Construction guarantees betas non-decreasing in (0, 1),
/// alpha_bar strictly decreasing, and alpha_bar(T) < 0.01 so the terminal
/// marginal is close to a standard Gaussian.
#[derive(Clone, Debug)]
pub struct NoiseSchedule {
    betas: Vec<Real>,
    alpha_bars: Vec<Real>,
}

impl NoiseSchedule {
    /// Linear beta ramp from `beta_start` at t=1 to `beta_end` at t=T.
    pub fn linear(t_max: usize, beta_start: Real, beta_end: Real) -> Result<Self, DiffusionError> {
        if t_max == 0 {
            return Err(DiffusionError::BadSchedule("needs at least one step".into()));
        }
        if !(beta_start > 0.0 && beta_end < 1.0 && beta_start <= beta_end) {
            return Err(DiffusionError::BadSchedule(format!(
                "need 0 < beta_start <= beta_end < 1, got {beta_start}..{beta_end}"
            )));
        }
        let mut betas = Vec::with_capacity(t_max);
        for i in 0..t_max {
            let f = if t_max == 1 {
                0.0
            } else {
                i as Real / (t_max - 1) as Real
            };
            betas.push(beta_start + f * (beta_end - beta_start));
        }
        let mut alpha_bars = Vec::with_capacity(t_max);
        let mut prod = 1.0;
        for &b in &betas {
            prod *= 1.0 - b;
            alpha_bars.push(prod);
        }
        if alpha_bars[t_max - 1] >= 0.01 {
            return Err(DiffusionError::BadSchedule(format!(
                "alpha_bar({t_max}) = {} leaves too much signal (needs < 0.01)",
                alpha_bars[t_max - 1]
            )));
        }
        Ok(NoiseSchedule { betas, alpha_bars })
    }

    /// Base-stage default: 100 steps.
    pub fn base() -> Self {
        Self::linear(100, 1e-3, 0.1).expect("valid preset")
    }

    /// Super-resolution default: 50 steps.
    pub fn sr() -> Self {
        Self::linear(50, 2e-3, 0.2).expect("valid preset")
    }

    /// Latent-prior default: 100 steps.
    pub fn latent() -> Self {
        Self::linear(100, 1e-3, 0.1).expect("valid preset")
    }

    pub fn t_max(&self) -> usize {
        self.betas.len()
    }

    pub fn check_t(&self, t: usize) -> Result<(), DiffusionError> {
        if t < 1 || t > self.t_max() {
            return Err(DiffusionError::TimeOutOfRange {
                t,
                t_max: self.t_max(),
            });
        }
        Ok(())
    }

    pub fn beta(&self, t: usize) -> Real {
        self.betas[t - 1]
    }

    /// `alpha_bar(0) == 1`, the convention the posterior step relies on.
    pub fn alpha_bar(&self, t: usize) -> Real {
        if t == 0 {
            1.0
        } else {
            self.alpha_bars[t - 1]
        }
    }

    pub fn sqrt_alpha_bar(&self, t: usize) -> Real {
        self.alpha_bar(t).sqrt()
    }

    pub fn sqrt_one_minus_alpha_bar(&self, t: usize) -> Real {
        (1.0 - self.alpha_bar(t)).sqrt()
    }
}

// ---- forward process and guidance ----

/// Forward corruption: sqrt(abar_t) x0 + sqrt(1 - abar_t) eps.
pub fn q_sample(
    x0: &Tensor,
    t: usize,
    eps: &Tensor,
    sched: &NoiseSchedule,
) -> Result<Tensor, DiffusionError> {
    sched.check_t(t)?;
    if x0.shape() != eps.shape() {
        return Err(shape_err(
            "q_sample",
            format!("x0 {:?} vs eps {:?}", x0.shape(), eps.shape()),
        ));
    }
    let (a, b) = (sched.sqrt_alpha_bar(t), sched.sqrt_one_minus_alpha_bar(t));
    let data = x0
        .data()
        .iter()
        .zip(eps.data())
        .map(|(&x, &e)| a * x + b * e)
        .collect();
    Ok(Tensor::from_vec(x0.shape(), data)?)
}

/// Guided prediction eps_u + lambda * (eps_c - eps_u). The endpoints
/// lambda == 1 and lambda == 0 return the corresponding input untouched, and
/// identical inputs pass through exactly for any lambda.
pub fn cfg_combine(
    eps_c: &Tensor,
    eps_u: &Tensor,
    lambda: Real,
) -> Result<Tensor, DiffusionError> {
    if eps_c.shape() != eps_u.shape() {
        return Err(shape_err(
            "cfg_combine",
            format!("{:?} vs {:?}", eps_c.shape(), eps_u.shape()),
        ));
    }
    if lambda == 1.0 {
        return Ok(eps_c.clone());
    }
    if lambda == 0.0 {
        return Ok(eps_u.clone());
    }
    let data = eps_c
        .data()
        .iter()
        .zip(eps_u.data())
        .map(|(&c, &u)| u + lambda * (c - u))
        .collect();
    Ok(Tensor::from_vec(eps_c.shape(), data)?)
}

/// Replace the latent with the unconditional token with probability `p`.
/// Exactly one draw is consumed either way, keeping batched randomness
/// aligned regardless of the outcome.
pub fn latent_dropout<'a, R: Rng>(
    z: Option<&'a Tensor>,
    rng: &mut R,
    p: Real,
) -> Option<&'a Tensor> {
    let drop = rng.gen::<Real>() < p;
    if drop {
        None
    } else {
        z
    }
}

// ---- reverse steps ----

/// One epsilon-parameterized reverse step:
/// (x_t - beta_t / sqrt(1 - abar_t) * eps_hat) / sqrt(1 - beta_t) + sigma_t z
/// with sigma_t^2 = beta_t. The noise term is dropped at t == 1 so the chain
/// ends on clean data.
pub fn ancestral_step(
    x_t: &Tensor,
    eps_hat: &Tensor,
    t: usize,
    sched: &NoiseSchedule,
    noise: Option<&Tensor>,
) -> Result<Tensor, DiffusionError> {
    sched.check_t(t)?;
    if x_t.shape() != eps_hat.shape() {
        return Err(shape_err(
            "ancestral_step",
            format!("x_t {:?} vs eps {:?}", x_t.shape(), eps_hat.shape()),
        ));
    }
    let beta = sched.beta(t);
    let coef = beta / sched.sqrt_one_minus_alpha_bar(t);
    let inv = 1.0 / (1.0 - beta).sqrt();
    let mut data: Vec<Real> = x_t
        .data()
        .iter()
        .zip(eps_hat.data())
        .map(|(&x, &e)| inv * (x - coef * e))
        .collect();
    if t > 1 {
        if let Some(z) = noise {
            if z.shape() != x_t.shape() {
                return Err(shape_err(
                    "ancestral_step",
                    format!("noise {:?} vs x_t {:?}", z.shape(), x_t.shape()),
                ));
            }
            let sigma = beta.sqrt();
            for (d, &n) in data.iter_mut().zip(z.data()) {
                *d += sigma * n;
            }
        }
    }
    Ok(Tensor::from_vec(x_t.shape(), data)?)
}

/// One x0-parameterized reverse step: the forward-posterior mean given
/// (x_t, x0_hat) plus posterior noise. With alpha_bar(0) == 1 the posterior
/// collapses at t == 1, so the step returns x0_hat exactly there.
pub fn posterior_step(
    x_t: &Tensor,
    x0_hat: &Tensor,
    t: usize,
    sched: &NoiseSchedule,
    noise: Option<&Tensor>,
) -> Result<Tensor, DiffusionError> {
    sched.check_t(t)?;
    if x_t.shape() != x0_hat.shape() {
        return Err(shape_err(
            "posterior_step",
            format!("x_t {:?} vs x0 {:?}", x_t.shape(), x0_hat.shape()),
        ));
    }
    if t == 1 {
        return Ok(x0_hat.clone());
    }
    let ab = sched.alpha_bar(t);
    let ab_prev = sched.alpha_bar(t - 1);
    let beta = sched.beta(t);
    let c0 = ab_prev.sqrt() * beta / (1.0 - ab);
    let ct = (1.0 - beta).sqrt() * (1.0 - ab_prev) / (1.0 - ab);
    let mut data: Vec<Real> = x_t
        .data()
        .iter()
        .zip(x0_hat.data())
        .map(|(&x, &x0)| c0 * x0 + ct * x)
        .collect();
    if let Some(z) = noise {
        if z.shape() != x_t.shape() {
            return Err(shape_err(
                "posterior_step",
                format!("noise {:?} vs x_t {:?}", z.shape(), x_t.shape()),
            ));
        }
        let sigma = ((1.0 - ab_prev) / (1.0 - ab) * beta).sqrt();
        for (d, &n) in data.iter_mut().zip(z.data()) {
            *d += sigma * n;
        }
    }
    Ok(Tensor::from_vec(x_t.shape(), data)?)
}

// ---- samplers ----

/// Anything that predicts the noise inside a corrupted map.
pub trait NoisePredictor {
    fn predict_noise(
        &self,
        y_t: &Tensor,
        t: usize,
        z: Option<&Tensor>,
    ) -> Result<Tensor, DiffusionError>;
}

impl NoisePredictor for DenoiserNet {
    fn predict_noise(
        &self,
        y_t: &Tensor,
        t: usize,
        z: Option<&Tensor>,
    ) -> Result<Tensor, DiffusionError> {
        Ok(self.denoise(y_t, t, z)?)
    }
}

/// Anything that predicts the clean high-resolution map from a corrupted one
/// plus low-resolution conditioning.
pub trait CleanPredictor {
    fn predict_clean(
        &self,
        y_t: &Tensor,
        y_lr: &Tensor,
        t: usize,
    ) -> Result<Tensor, DiffusionError>;
}

impl CleanPredictor for UpsamplerNet {
    fn predict_clean(
        &self,
        y_t: &Tensor,
        y_lr: &Tensor,
        t: usize,
    ) -> Result<Tensor, DiffusionError> {
        Ok(self.denoise(y_t, y_lr, t)?)
    }
}

/// RNG for one sampling chain: an independent ChaCha stream per chain index,
/// all derived from the same base seed.
pub fn chain_rng(seed: u64, chain: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(chain);
    rng
}

/// Full reverse chain from pure noise. With a latent and lambda != 1 every
/// step evaluates the model twice (conditional and unconditional) and blends
/// the predictions; lambda == 1 costs a single conditional call per step.
pub fn sample_base(
    model: &dyn NoisePredictor,
    shape: &[usize],
    z: Option<&Tensor>,
    lambda: Real,
    sched: &NoiseSchedule,
    seed: u64,
) -> Result<Tensor, DiffusionError> {
    sample_base_chain(model, shape, z, lambda, sched, seed, 0)
}

/// `sample_base` on an explicit chain index, for batches of parallel chains.
pub fn sample_base_chain(
    model: &dyn NoisePredictor,
    shape: &[usize],
    z: Option<&Tensor>,
    lambda: Real,
    sched: &NoiseSchedule,
    seed: u64,
    chain: u64,
) -> Result<Tensor, DiffusionError> {
    let mut rng = chain_rng(seed, chain);
    let mut x = Tensor::randn(shape, 1.0, &mut rng);
    for t in (1..=sched.t_max()).rev() {
        let eps_hat = match z {
            Some(zt) if lambda != 1.0 => {
                let c = model.predict_noise(&x, t, Some(zt))?;
                let u = model.predict_noise(&x, t, None)?;
                cfg_combine(&c, &u, lambda)?
            }
            _ => model.predict_noise(&x, t, z)?,
        };
        let noise = if t > 1 {
            Some(Tensor::randn(shape, 1.0, &mut rng))
        } else {
            None
        };
        x = ancestral_step(&x, &eps_hat, t, sched, noise.as_ref())?;
    }
    Ok(x)
}

/// Reverse chain for the cascade stage, x0-parameterized. `noisy` false runs
/// the deterministic posterior-mean chain; either way the final step is
/// noise-free. `hr_res` must be a multiple of the conditioning resolution.
pub fn sample_upsampler(
    model: &dyn CleanPredictor,
    y_lr: &Tensor,
    hr_res: usize,
    sched: &NoiseSchedule,
    seed: u64,
    noisy: bool,
) -> Result<Tensor, DiffusionError> {
    let (rl, c) = rolled_dims(y_lr.shape())?;
    if hr_res == 0 || hr_res % rl != 0 {
        return Err(shape_err(
            "sample_upsampler",
            format!("target resolution {hr_res} is not a multiple of {rl}"),
        ));
    }
    let shape = [hr_res, 3 * hr_res, c];
    let mut rng = chain_rng(seed, 0);
    let mut x = Tensor::randn(&shape, 1.0, &mut rng);
    for t in (1..=sched.t_max()).rev() {
        let x0_hat = model.predict_clean(&x, y_lr, t)?;
        let noise = if noisy && t > 1 {
            Some(Tensor::randn(&shape, 1.0, &mut rng))
        } else {
            None
        };
        x = posterior_step(&x, &x0_hat, t, sched, noise.as_ref())?;
    }
    Ok(x)
}

// ---- training losses ----

/// Monte-Carlo denoising objective: draw one timestep uniformly and one
/// Gaussian noise tensor, corrupt the input, and return the mean squared
/// error of the model's noise prediction. The latent is dropped to the
/// unconditional token with probability `p_drop` before conditioning. Draw
/// order is fixed (t, eps, dropout) so results are reproducible from the rng
/// state.
pub fn loss_simple<R: Rng>(
    model: &dyn NoisePredictor,
    x0: &Tensor,
    z: Option<&Tensor>,
    p_drop: Real,
    sched: &NoiseSchedule,
    rng: &mut R,
) -> Result<Real, DiffusionError> {
    let t = rng.gen_range(1..=sched.t_max());
    let eps = Tensor::randn(x0.shape(), 1.0, rng);
    let z_eff = latent_dropout(z, rng, p_drop);
    let x_t = q_sample(x0, t, &eps, sched)?;
    let pred = model.predict_noise(&x_t, t, z_eff)?;
    let mut acc = 0.0;
    for (&p, &e) in pred.data().iter().zip(eps.data()) {
        let d = p - e;
        acc += d * d;
    }
    Ok(acc / eps.len() as Real)
}

// ---- conditioning augmentation ----

/// Degradation ranges for conditioning augmentation. Strengths are drawn
/// uniformly from the closed ranges; the null setting (factor 1, zero blur,
/// zero noise) makes `condition_augment` a plain bilinear rescale.
#[derive(Clone, Debug)]
pub struct AugmentParams {
    /// Output plane resolution.
    pub lr_res: usize,
    /// Intermediate downscale divisors to draw from; 1 means direct.
    pub factors: Vec<usize>,
    /// Blur sigma range in texels.
    pub blur_sigma: (Real, Real),
    /// Additive feature-noise std range.
    pub noise_std: (Real, Real),
}

impl AugmentParams {
    /// No degradation beyond the rescale itself.
    pub fn null(lr_res: usize) -> AugmentParams {
        AugmentParams {
            lr_res,
            factors: vec![1],
            blur_sigma: (0.0, 0.0),
            noise_std: (0.0, 0.0),
        }
    }

    /// Mild default degradation used by cascade training.
    pub fn default_for(lr_res: usize) -> AugmentParams {
        AugmentParams {
            lr_res,
            factors: vec![1, 2],
            blur_sigma: (0.0, 1.0),
            noise_std: (0.0, 0.05),
        }
    }

    pub fn validate(&self) -> Result<(), DiffusionError> {
        if self.lr_res < 2 {
            return Err(DiffusionError::BadParams(format!(
                "output resolution {} too small",
                self.lr_res
            )));
        }
        if self.factors.is_empty() {
            return Err(DiffusionError::BadParams("no downscale factors".into()));
        }
        for &f in &self.factors {
            if f == 0 || self.lr_res % f != 0 || self.lr_res / f < 2 {
                return Err(DiffusionError::BadParams(format!(
                    "factor {f} incompatible with resolution {}",
                    self.lr_res
                )));
            }
        }
        for (name, (lo, hi)) in [("blur", self.blur_sigma), ("noise", self.noise_std)] {
            if !(0.0 <= lo && lo <= hi) {
                return Err(DiffusionError::BadParams(format!(
                    "{name} range ({lo}, {hi}) must be non-negative and ordered"
                )));
            }
        }
        Ok(())
    }
}

fn draw_range<R: Rng>(rng: &mut R, (lo, hi): (Real, Real)) -> Real {
    if hi <= lo {
        lo
    } else {
        lo + (hi - lo) * rng.gen::<Real>()
    }
}

/// Separable Gaussian blur of one `[r, r, c]` plane with border clamping.
fn blur_plane(plane: &Tensor, sigma: Real) -> Tensor {
    let s = plane.shape();
    let (h, w, c) = (s[0], s[1], s[2]);
    let rad = (3.0 * sigma).ceil().max(1.0) as isize;
    let mut kern = Vec::with_capacity(2 * rad as usize + 1);
    for i in -rad..=rad {
        kern.push((-0.5 * (i as Real / sigma).powi(2)).exp());
    }
    let norm: Real = kern.iter().sum();
    for k in kern.iter_mut() {
        *k /= norm;
    }
    let src = plane.data();
    let mut tmp = vec![0.0; src.len()];
    for y in 0..h {
        for x in 0..w {
            for ch in 0..c {
                let mut acc = 0.0;
                for (ki, &kv) in kern.iter().enumerate() {
                    let xs = (x as isize + ki as isize - rad).clamp(0, w as isize - 1) as usize;
                    acc += kv * src[(y * w + xs) * c + ch];
                }
                tmp[(y * w + x) * c + ch] = acc;
            }
        }
    }
    let mut out = vec![0.0; src.len()];
    for y in 0..h {
        for x in 0..w {
            for ch in 0..c {
                let mut acc = 0.0;
                for (ki, &kv) in kern.iter().enumerate() {
                    let ys = (y as isize + ki as isize - rad).clamp(0, h as isize - 1) as usize;
                    acc += kv * tmp[(ys * w + x) * c + ch];
                }
                out[(y * w + x) * c + ch] = acc;
            }
        }
    }
    Tensor::from_vec(s, out).expect("blur shape")
}

/// Degrade a tri-plane to conditioning resolution: blur, downscale (possibly
/// through a coarser intermediate), then add feature noise. Draw order is
/// fixed (factor, blur, noise).
pub fn condition_augment<R: Rng>(
    tp: &TriPlane,
    params: &AugmentParams,
    rng: &mut R,
) -> Result<TriPlane, DiffusionError> {
    params.validate()?;
    let f = params.factors[rng.gen_range(0..params.factors.len())];
    let sigma_blur = draw_range(rng, params.blur_sigma);
    let sigma_noise = draw_range(rng, params.noise_std);
    let planes = if sigma_blur > 0.0 {
        [0, 1, 2].map(|k| blur_plane(&tp.planes[k], sigma_blur))
    } else {
        tp.planes.clone()
    };
    let full = TriPlane::from_planes(planes, tp.bbox)?;
    let mut lr = if f > 1 {
        full.rescale(params.lr_res / f).rescale(params.lr_res)
    } else {
        full.rescale(params.lr_res)
    };
    if sigma_noise > 0.0 {
        for p in lr.planes.iter_mut() {
            let noise = Tensor::randn(p.shape(), sigma_noise, rng);
            for (d, &n) in p.data_mut().iter_mut().zip(noise.data()) {
                *d += n;
            }
        }
    }
    Ok(lr)
}

// ---- upsampler loss ----

/// Everything needed to render a supervised patch of a predicted map.
pub struct PatchSupervision<'a> {
    pub dec: &'a RadianceDecoder,
    pub cam: &'a Camera,
    pub rect: Rect,
    /// Full ground-truth image for the camera; the rect is cropped out of it.
    pub gt: &'a Tensor,
    pub bbox: Aabb,
    pub render: RenderConfig,
}

fn crop_image(img: &Tensor, rect: Rect) -> Result<Tensor, DiffusionError> {
    let s = img.shape();
    if s.len() != 3 || s[2] != 3 {
        return Err(shape_err("crop", format!("image shape {s:?}")));
    }
    if rect.y0 + rect.h > s[0] || rect.x0 + rect.w > s[1] || rect.w == 0 || rect.h == 0 {
        return Err(shape_err(
            "crop",
            format!("rect {rect:?} outside {}x{}", s[1], s[0]),
        ));
    }
    let mut out = Vec::with_capacity(rect.h * rect.w * 3);
    for y in rect.y0..rect.y0 + rect.h {
        let row = &img.data()[(y * s[1] + rect.x0) * 3..(y * s[1] + rect.x0 + rect.w) * 3];
        out.extend_from_slice(row);
    }
    Ok(Tensor::from_vec(&[rect.h, rect.w, 3], out)?)
}

/// Horizontal and vertical finite differences of an `[h, w, 3]` image node.
fn image_grads(g: &mut Graph, img: NodeId) -> Result<(NodeId, NodeId), NumericsError> {
    let s = g.shape(img).to_vec();
    let (h, w) = (s[0], s[1]);
    let right = g.slice_w(img, 1, w - 1)?;
    let left = g.slice_w(img, 0, w - 1)?;
    let gx = g.sub(right, left)?;
    let tr = g.transpose_hw(img)?;
    let down = g.slice_w(tr, 1, h - 1)?;
    let up = g.slice_w(tr, 0, h - 1)?;
    let gy = g.sub(down, up)?;
    Ok((gx, gy))
}

/// Cascade training loss on the graph:
/// lambda_tri * MSE(pred, target) + lambda_img * (pixel MSE + image-gradient
/// MSE) over a rendered patch of the prediction. Gradients flow through the
/// renderer into `pred`; the decoder stays frozen. Every patch ray must hit
/// the scene box, so supervision rects should stay inside the subject's
/// silhouette (central crops at the standard orbit always qualify).
pub fn upsampler_loss_graph(
    g: &mut Graph,
    pred: NodeId,
    target: NodeId,
    lambda_tri: Real,
    lambda_img: Real,
    patch: Option<&PatchSupervision>,
) -> Result<NodeId, DiffusionError> {
    let tri = g.mse(pred, target)?;
    let mut loss = g.scale(tri, lambda_tri)?;
    if lambda_img == 0.0 {
        return Ok(loss);
    }
    let sup = patch.ok_or_else(|| {
        shape_err("loss_upsampler", "image term requires patch supervision")
    })?;
    let mut pixels = Vec::with_capacity(sup.rect.w * sup.rect.h);
    for y in sup.rect.y0..sup.rect.y0 + sup.rect.h {
        for x in sup.rect.x0..sup.rect.x0 + sup.rect.w {
            pixels.push((x, y));
        }
    }
    let bundle = bundle_for_pixels(sup.cam, &sup.bbox, &sup.render, &pixels);
    for (i, slot) in bundle.slots.iter().enumerate() {
        if slot.is_none() {
            return Err(DiffusionError::PatchNotCovered {
                x: pixels[i].0,
                y: pixels[i].1,
            });
        }
    }
    let planes = split_planes(g, pred)?;
    let mut dec_store = ParamStore::new();
    sup.dec.insert_params(&mut dec_store, "dec");
    let dec_bind = Binding::bind_all(g, &dec_store, false)?;
    let render = render_graph(
        g,
        planes,
        sup.dec,
        &dec_bind,
        "dec",
        &bundle,
        &sup.bbox,
        sup.render.background,
    )?;
    let img = g.reshape(render.pixels, &[sup.rect.h, sup.rect.w, 3])?;
    let gt = g.input(crop_image(sup.gt, sup.rect)?)?;
    let pix = g.mse(img, gt)?;
    let (gxp, gyp) = image_grads(g, img)?;
    let (gxg, gyg) = image_grads(g, gt)?;
    let ex = g.mse(gxp, gxg)?;
    let ey = g.mse(gyp, gyg)?;
    let edges = g.add(ex, ey)?;
    let img_term = g.add(pix, edges)?;
    let scaled = g.scale(img_term, lambda_img)?;
    loss = g.add(loss, scaled)?;
    Ok(loss)
}

// ---- EMA ----

/// Exponential moving average over a parameter store:
/// shadow <- rate * shadow + (1 - rate) * weights.
pub struct Ema {
    pub rate: Real,
    shadow: ParamStore,
}

impl Ema {
    /// The shadow starts as a copy of the weights.
    pub fn new(store: &ParamStore, rate: Real) -> Ema {
        assert!((0.0..=1.0).contains(&rate), "rate {rate} outside [0, 1]");
        Ema {
            rate,
            shadow: store.clone(),
        }
    }

    pub fn update(&mut self, store: &ParamStore) {
        for (name, w) in store.iter() {
            let s = self.shadow.get_mut(name);
            for (sv, &wv) in s.data_mut().iter_mut().zip(w.data()) {
                *sv = self.rate * *sv + (1.0 - self.rate) * wv;
            }
        }
    }

    pub fn shadow(&self) -> &ParamStore {
        &self.shadow
    }

    /// Replace the shadow wholesale (checkpoint restore).
    pub fn set_shadow(&mut self, shadow: ParamStore) {
        self.shadow = shadow;
    }
}

// ---- trainers ----

/// One training example for the base stage.
pub struct BaseSample<'a> {
    /// Rolled-out clean map.
    pub y0: &'a Tensor,
    /// Frontal view feeding the latent encoder; None trains unconditionally.
    pub view: Option<&'a Tensor>,
}

/// Optimizes the base denoiser (and optionally the latent encoder end to
/// end) with AdamW and EMA tracking. Per sample the draw order is fixed:
/// timestep, noise, dropout.
pub struct BaseTrainer {
    pub net: DenoiserNet,
    pub encoder: Option<LatentEncoder>,
    pub sched: NoiseSchedule,
    pub opt_net: AdamW,
    pub opt_enc: AdamW,
    pub ema_net: Ema,
    pub ema_enc: Option<Ema>,
    pub p_drop: Real,
    rng: ChaCha8Rng,
}

impl BaseTrainer {
    pub fn new(
        net: DenoiserNet,
        encoder: Option<LatentEncoder>,
        sched: NoiseSchedule,
        lr: Real,
        ema_rate: Real,
        p_drop: Real,
        seed: u64,
    ) -> BaseTrainer {
        assert!(net.cfg.t_max >= sched.t_max(), "schedule longer than the net supports");
        let ema_net = Ema::new(&net.params, ema_rate);
        let ema_enc = encoder.as_ref().map(|e| Ema::new(&e.params, ema_rate));
        BaseTrainer {
            net,
            encoder,
            sched,
            opt_net: AdamW::new(lr),
            opt_enc: AdamW::new(lr),
            ema_net,
            ema_enc,
            p_drop,
            rng: ChaCha8Rng::seed_from_u64(seed),
        }
    }

    /// One AdamW step over the batch; returns the batch loss.
    pub fn step(&mut self, batch: &[BaseSample]) -> Result<Real, DiffusionError> {
        assert!(!batch.is_empty());
        let mut g = Graph::fast();
        let bind_net = Binding::bind_all(&mut g, &self.net.params, true)?;
        let bind_enc = match &self.encoder {
            Some(e) => Some(Binding::bind_all(&mut g, &e.params, true)?),
            None => None,
        };
        let mut per = Vec::with_capacity(batch.len());
        for s in batch {
            let t = self.rng.gen_range(1..=self.sched.t_max());
            let eps = Tensor::randn(s.y0.shape(), 1.0, &mut self.rng);
            let keep = !(self.rng.gen::<Real>() < self.p_drop);
            let x_t = q_sample(s.y0, t, &eps, &self.sched)?;
            let xn = g.input(x_t)?;
            let en = g.input(eps)?;
            let z = match (&self.encoder, &bind_enc, s.view) {
                (Some(enc), Some(be), Some(view)) if keep => {
                    let vn = g.input(view.clone())?;
                    Some(enc.forward(&mut g, be, vn)?)
                }
                _ => None,
            };
            let out = self.net.forward(&mut g, &bind_net, xn, t, z)?;
            per.push(g.mse(out, en)?);
        }
        let mut acc = per[0];
        for &p in &per[1..] {
            acc = g.add(acc, p)?;
        }
        let loss = g.scale(acc, 1.0 / per.len() as Real)?;
        let value = g.value(loss).data()[0];
        let mut grads = g.backward(loss)?;
        let gn = bind_net.grads(&g, &mut grads);
        self.opt_net.step(&mut self.net.params, &gn);
        if let (Some(enc), Some(be)) = (&mut self.encoder, &bind_enc) {
            let ge = be.grads(&g, &mut grads);
            self.opt_enc.step(&mut enc.params, &ge);
        }
        self.ema_net.update(&self.net.params);
        if let (Some(e), Some(enc)) = (&mut self.ema_enc, &self.encoder) {
            e.update(&enc.params);
        }
        Ok(value)
    }
}

/// One training example for the cascade stage. Conditioning is produced on
/// the fly by augmenting the clean high-resolution map.
pub struct SrSample<'a> {
    /// Rolled-out clean high-resolution map.
    pub y_hr: &'a Tensor,
    pub bbox: Aabb,
    /// Optional rendered-patch supervision for the image term.
    pub patch: Option<PatchSupervision<'a>>,
}

/// Optimizes the upsampler with AdamW and EMA tracking. Per sample the draw
/// order is fixed: augmentation (factor, blur, noise), timestep, noise.
pub struct SrTrainer {
    pub net: UpsamplerNet,
    pub sched: NoiseSchedule,
    pub aug: AugmentParams,
    pub opt: AdamW,
    pub ema: Ema,
    pub lambda_tri: Real,
    pub lambda_img: Real,
    rng: ChaCha8Rng,
}

impl SrTrainer {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        net: UpsamplerNet,
        sched: NoiseSchedule,
        aug: AugmentParams,
        lr: Real,
        ema_rate: Real,
        lambda_tri: Real,
        lambda_img: Real,
        seed: u64,
    ) -> SrTrainer {
        assert!(net.cfg.t_max >= sched.t_max(), "schedule longer than the net supports");
        let ema = Ema::new(&net.params, ema_rate);
        SrTrainer {
            net,
            sched,
            aug,
            opt: AdamW::new(lr),
            ema,
            lambda_tri,
            lambda_img,
            rng: ChaCha8Rng::seed_from_u64(seed),
        }
    }

    /// One AdamW step over the batch; returns the batch loss.
    pub fn step(&mut self, batch: &[SrSample]) -> Result<Real, DiffusionError> {
        assert!(!batch.is_empty());
        let mut g = Graph::fast();
        let bind = Binding::bind_all(&mut g, &self.net.params, true)?;
        let mut per = Vec::with_capacity(batch.len());
        for s in batch {
            let tp = TriPlane::roll_in(s.y_hr, s.bbox)?;
            let lr = condition_augment(&tp, &self.aug, &mut self.rng)?;
            let t = self.rng.gen_range(1..=self.sched.t_max());
            let eps = Tensor::randn(s.y_hr.shape(), 1.0, &mut self.rng);
            let x_t = q_sample(s.y_hr, t, &eps, &self.sched)?;
            let xn = g.input(x_t)?;
            let ln = g.input(lr.roll_out())?;
            let tgt = g.input(s.y_hr.clone())?;
            let pred = self.net.forward(&mut g, &bind, xn, ln, t)?;
            per.push(upsampler_loss_graph(
                &mut g,
                pred,
                tgt,
                self.lambda_tri,
                self.lambda_img,
                s.patch.as_ref(),
            )?);
        }
        let mut acc = per[0];
        for &p in &per[1..] {
            acc = g.add(acc, p)?;
        }
        let loss = g.scale(acc, 1.0 / per.len() as Real)?;
        let value = g.value(loss).data()[0];
        let mut grads = g.backward(loss)?;
        let gs = bind.grads(&g, &mut grads);
        self.opt.step(&mut self.net.params, &gs);
        self.ema.update(&self.net.params);
        Ok(value)
    }
}

// ---- latent prior ----

/// Small unconditional prior over encoder latents: a four-layer MLP noise
/// predictor on `[z]` vectors with sinusoidal time features and its own
/// schedule. Sampling reuses the ancestral chain.
pub struct LatentPrior {
    pub dim: usize,
    pub hidden: usize,
    pub t_dim: usize,
    pub sched: NoiseSchedule,
    pub params: ParamStore,
}

impl LatentPrior {
    pub fn new(dim: usize, hidden: usize, sched: NoiseSchedule, seed: u64) -> LatentPrior {
        assert!(dim > 0 && hidden > 0);
        let t_dim = 16;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = ParamStore::new();
        let dims = [dim + t_dim, hidden, hidden, hidden, dim];
        for i in 0..4 {
            let std = (2.0 / dims[i] as Real).sqrt();
            let w = if i == 3 {
                Tensor::zeros(&[dims[i], dims[i + 1]])
            } else {
                Tensor::randn(&[dims[i], dims[i + 1]], std, &mut rng)
            };
            params.insert(format!("fc{i}.w"), w);
            params.insert(format!("fc{i}.b"), Tensor::zeros(&[dims[i + 1]]));
        }
        LatentPrior {
            dim,
            hidden,
            t_dim,
            sched,
            params,
        }
    }

    /// Default toy size: width 256.
    pub fn base(dim: usize, seed: u64) -> LatentPrior {
        LatentPrior::new(dim, 256, NoiseSchedule::latent(), seed)
    }

    /// Build the predictor on the graph from a `[1, dim]` node.
    pub fn forward(
        &self,
        g: &mut Graph,
        bind: &Binding,
        z_t: NodeId,
        t: usize,
    ) -> Result<NodeId, DiffusionError> {
        self.sched.check_t(t)?;
        let emb = g.input(sin_time_embed(t, self.t_dim))?;
        let mut x = g.concat_last(&[z_t, emb])?;
        for i in 0..4 {
            let h = g.matmul(x, bind.id(&format!("fc{i}.w")))?;
            x = g.add_row_bias(h, bind.id(&format!("fc{i}.b")))?;
            if i < 3 {
                x = g.silu(x)?;
            }
        }
        Ok(x)
    }

    /// One AdamW step on a batch of clean latents (`[dim]` each).
    pub fn train_step<R: Rng>(
        &mut self,
        batch: &[Tensor],
        opt: &mut AdamW,
        rng: &mut R,
    ) -> Result<Real, DiffusionError> {
        assert!(!batch.is_empty());
        let mut g = Graph::fast();
        let bind = Binding::bind_all(&mut g, &self.params, true)?;
        let mut per = Vec::with_capacity(batch.len());
        for z0 in batch {
            if z0.shape() != [self.dim] {
                return Err(shape_err(
                    "latent_prior",
                    format!("latent shape {:?}, expected [{}]", z0.shape(), self.dim),
                ));
            }
            let t = rng.gen_range(1..=self.sched.t_max());
            let eps = Tensor::randn(&[self.dim], 1.0, rng);
            let z_t = q_sample(z0, t, &eps, &self.sched)?;
            let zn = {
                let raw = g.input(z_t)?;
                g.reshape(raw, &[1, self.dim])?
            };
            let en = {
                let raw = g.input(eps)?;
                g.reshape(raw, &[1, self.dim])?
            };
            let out = self.forward(&mut g, &bind, zn, t)?;
            per.push(g.mse(out, en)?);
        }
        let mut acc = per[0];
        for &p in &per[1..] {
            acc = g.add(acc, p)?;
        }
        let loss = g.scale(acc, 1.0 / per.len() as Real)?;
        let value = g.value(loss).data()[0];
        let mut grads = g.backward(loss)?;
        let gs = bind.grads(&g, &mut grads);
        opt.step(&mut self.params, &gs);
        Ok(value)
    }

    /// Draw one latent by running the full reverse chain.
    pub fn sample(&self, seed: u64) -> Result<Tensor, DiffusionError> {
        sample_base(self, &[self.dim], None, 1.0, &self.sched.clone(), seed)
    }

    /// Plain evaluation of the noise prediction for a `[dim]` latent.
    pub fn predict(&self, z_t: &Tensor, t: usize) -> Result<Tensor, DiffusionError> {
        self.predict_noise(z_t, t, None)
    }
}

impl NoisePredictor for LatentPrior {
    fn predict_noise(
        &self,
        z_t: &Tensor,
        t: usize,
        _z: Option<&Tensor>,
    ) -> Result<Tensor, DiffusionError> {
        if z_t.shape() != [self.dim] {
            return Err(shape_err(
                "latent_prior",
                format!("latent shape {:?}, expected [{}]", z_t.shape(), self.dim),
            ));
        }
        let mut g = Graph::fast();
        let bind = Binding::bind_all(&mut g, &self.params, false)?;
        let raw = g.input(z_t.clone())?;
        let zn = g.reshape(raw, &[1, self.dim])?;
        let out = self.forward(&mut g, &bind, zn, t)?;
        Ok(Tensor::from_vec(&[self.dim], g.value(out).data().to_vec())?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::denoiser::{EncoderConfig, NetConfig, UpConfig};
    use crate::radiance::{render_patch, TriPlaneField};
    use crate::triplane::FourierSpec;

    fn rng(seed: u64) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(seed)
    }

    fn rel_l2(a: &Tensor, b: &Tensor) -> Real {
        let mut num = 0.0;
        let mut den = 0.0;
        for (&x, &y) in a.data().iter().zip(b.data()) {
            num += (x - y) * (x - y);
            den += y * y;
        }
        (num / den.max(1e-30)).sqrt()
    }

    #[test]
    fn linear_schedule_satisfies_its_contracts() {
        let s = NoiseSchedule::linear(1000, 1e-4, 0.02).unwrap();
        assert_eq!(s.t_max(), 1000);
        for t in 1..=1000 {
            assert!(s.beta(t) > 0.0 && s.beta(t) < 1.0);
            if t > 1 {
                assert!(s.beta(t) >= s.beta(t - 1));
                assert!(s.alpha_bar(t) < s.alpha_bar(t - 1));
            }
        }
        assert!((s.beta(1) - 1e-4).abs() < 1e-15);
        assert!((s.beta(1000) - 0.02).abs() < 1e-15);
        assert!(s.alpha_bar(1000) < 1e-4);
        assert_eq!(s.alpha_bar(0), 1.0);

        let one = NoiseSchedule::linear(1, 0.995, 0.995).unwrap();
        assert_eq!(one.alpha_bar(1), 1.0 - 0.995);

        for preset in [NoiseSchedule::base(), NoiseSchedule::sr(), NoiseSchedule::latent()] {
            assert!(preset.alpha_bar(preset.t_max()) < 0.01);
        }
        assert_eq!(NoiseSchedule::base().t_max(), 100);
        assert_eq!(NoiseSchedule::sr().t_max(), 50);
    }

    #[test]
    fn schedule_rejects_bad_ramps() {
        assert!(NoiseSchedule::linear(0, 0.1, 0.2).is_err());
        assert!(NoiseSchedule::linear(10, 0.0, 0.2).is_err());
        assert!(NoiseSchedule::linear(10, 0.1, 1.0).is_err());
        assert!(NoiseSchedule::linear(10, 0.3, 0.2).is_err());
        // too weak: alpha_bar(T) stays near 1
        let weak = NoiseSchedule::linear(10, 1e-4, 2e-4);
        assert!(matches!(weak, Err(DiffusionError::BadSchedule(_))));
    }

    #[test]
    fn q_sample_reduces_exactly_at_the_endpoints() {
        let sched = NoiseSchedule::base();
        let mut r = rng(0);
        let x0 = Tensor::randn(&[3, 4], 1.0, &mut r);
        let eps = Tensor::randn(&[3, 4], 1.0, &mut r);
        let zeros = Tensor::zeros(&[3, 4]);
        let t = 37;
        let xt = q_sample(&x0, t, &zeros, &sched).unwrap();
        let a = sched.sqrt_alpha_bar(t);
        for (o, &x) in xt.data().iter().zip(x0.data()) {
            assert_eq!(*o, a * x);
        }
        let xt = q_sample(&zeros, t, &eps, &sched).unwrap();
        let b = sched.sqrt_one_minus_alpha_bar(t);
        for (o, &e) in xt.data().iter().zip(eps.data()) {
            assert_eq!(*o, b * e);
        }
        assert!(q_sample(&x0, 0, &eps, &sched).is_err());
        assert!(q_sample(&x0, 101, &eps, &sched).is_err());
        assert!(q_sample(&x0, 5, &Tensor::zeros(&[2]), &sched).is_err());
    }

    #[test]
    fn q_sample_moments_match_the_schedule() {
        let sched = NoiseSchedule::base();
        let t = 50;
        let x0 = Tensor::from_vec(&[2], vec![1.5, -0.7]).unwrap();
        let n = 100_000;
        let mut r = rng(7);
        let mut sum = [0.0; 2];
        let mut sumsq = [0.0; 2];
        for _ in 0..n {
            let eps = Tensor::randn(&[2], 1.0, &mut r);
            let xt = q_sample(&x0, t, &eps, &sched).unwrap();
            for j in 0..2 {
                sum[j] += xt.data()[j];
                sumsq[j] += xt.data()[j] * xt.data()[j];
            }
        }
        let var_true = 1.0 - sched.alpha_bar(t);
        let nf = n as Real;
        for j in 0..2 {
            let mean = sum[j] / nf;
            let var = sumsq[j] / nf - mean * mean;
            let target = sched.sqrt_alpha_bar(t) * x0.data()[j];
            let se_mean = var_true.sqrt() / nf.sqrt();
            assert!(
                (mean - target).abs() < 3.0 * se_mean,
                "mean[{j}] {mean} vs {target}"
            );
            let se_var = var_true * (2.0 / (nf - 1.0)).sqrt();
            assert!(
                (var - var_true).abs() < 3.0 * se_var,
                "var[{j}] {var} vs {var_true}"
            );
        }
    }

    /// Knows the clean data, so it can invert the corruption exactly.
    struct OracleEps {
        x0: Tensor,
        sched: NoiseSchedule,
    }

    impl NoisePredictor for OracleEps {
        fn predict_noise(
            &self,
            y_t: &Tensor,
            t: usize,
            _z: Option<&Tensor>,
        ) -> Result<Tensor, DiffusionError> {
            let a = self.sched.sqrt_alpha_bar(t);
            let b = self.sched.sqrt_one_minus_alpha_bar(t);
            let data = y_t
                .data()
                .iter()
                .zip(self.x0.data())
                .map(|(&y, &x)| (y - a * x) / b)
                .collect();
            Ok(Tensor::from_vec(y_t.shape(), data)?)
        }
    }

    struct ZeroModel;

    impl NoisePredictor for ZeroModel {
        fn predict_noise(
            &self,
            y_t: &Tensor,
            _t: usize,
            _z: Option<&Tensor>,
        ) -> Result<Tensor, DiffusionError> {
            Ok(Tensor::zeros(y_t.shape()))
        }
    }

    #[test]
    fn loss_simple_oracle_is_zero_and_zero_model_is_unit() {
        let sched = NoiseSchedule::base();
        let mut r = rng(3);
        let x0 = Tensor::randn(&[8, 24, 2], 1.0, &mut r);
        let oracle = OracleEps {
            x0: x0.clone(),
            sched: sched.clone(),
        };
        let mut lr = rng(11);
        for _ in 0..10 {
            let l = loss_simple(&oracle, &x0, None, 0.0, &sched, &mut lr).unwrap();
            assert!(l < 1e-20, "oracle loss {l}");
        }
        // A silent model scores the mean of eps^2, which concentrates at 1.
        let mut lr = rng(12);
        let calls = 400;
        let mut acc = 0.0;
        for _ in 0..calls {
            acc += loss_simple(&ZeroModel, &x0, None, 0.0, &sched, &mut lr).unwrap();
        }
        let mean = acc / calls as Real;
        let se = (2.0 / (8.0 * 24.0 * 2.0) / calls as Real).sqrt();
        assert!((mean - 1.0).abs() < 4.0 * se, "zero-model loss {mean}");
        // bitwise reproducibility from the rng state
        let mut a = rng(13);
        let mut b = rng(13);
        for _ in 0..5 {
            let la = loss_simple(&ZeroModel, &x0, None, 0.2, &sched, &mut a).unwrap();
            let lb = loss_simple(&ZeroModel, &x0, None, 0.2, &sched, &mut b).unwrap();
            assert_eq!(la, lb);
        }
    }

    #[test]
    fn latent_dropout_rate_and_edge_cases() {
        let z = Tensor::from_vec(&[2], vec![1.0, 2.0]).unwrap();
        let mut r = rng(5);
        for _ in 0..100 {
            assert!(latent_dropout(Some(&z), &mut r, 0.0).is_some());
            assert!(latent_dropout(Some(&z), &mut r, 1.0).is_none());
            assert!(latent_dropout(None, &mut r, 0.0).is_none());
        }
        let n = 100_000;
        let mut dropped = 0usize;
        let mut r = rng(6);
        for _ in 0..n {
            if latent_dropout(Some(&z), &mut r, 0.2).is_none() {
                dropped += 1;
            }
        }
        let rate = dropped as Real / n as Real;
        let sigma = (0.2 * 0.8 / n as Real).sqrt();
        assert!((rate - 0.2).abs() < 3.0 * sigma, "rate {rate}");
        // a None latent still consumes exactly one draw
        let mut a = rng(9);
        let mut b = rng(9);
        latent_dropout(None, &mut a, 0.2);
        latent_dropout(Some(&z), &mut b, 0.2);
        assert_eq!(a.gen::<u64>(), b.gen::<u64>());
    }

    #[test]
    fn cfg_combine_identities_hold_exactly() {
        let mut r = rng(8);
        let c = Tensor::randn(&[4, 3], 1.0, &mut r);
        let u = Tensor::randn(&[4, 3], 1.0, &mut r);
        let out = cfg_combine(&c, &u, 1.0).unwrap();
        assert_eq!(out.data(), c.data());
        let out = cfg_combine(&c, &u, 0.0).unwrap();
        assert_eq!(out.data(), u.data());
        let ones = Tensor::from_vec(&[2], vec![1.0, 1.0]).unwrap();
        let zeros = Tensor::zeros(&[2]);
        let out = cfg_combine(&ones, &zeros, 2.0).unwrap();
        assert_eq!(out.data(), &[2.0, 2.0]);
        // identical predictions pass through unchanged for any lambda
        let out = cfg_combine(&c, &c, 1.7).unwrap();
        assert_eq!(out.data(), c.data());
        assert!(cfg_combine(&c, &zeros, 1.0).is_err());
    }

    #[test]
    fn ancestral_step_matches_the_closed_form() {
        let sched = NoiseSchedule::base();
        let x = Tensor::from_vec(&[2], vec![0.8, -0.4]).unwrap();
        let zeros = Tensor::zeros(&[2]);
        let t = 20;
        let out = ancestral_step(&x, &zeros, t, &sched, None).unwrap();
        let inv = 1.0 / (1.0 - sched.beta(t)).sqrt();
        for (o, &xv) in out.data().iter().zip(x.data()) {
            assert!((o - inv * xv).abs() < 1e-15);
        }
        let eps = Tensor::from_vec(&[2], vec![0.3, 0.1]).unwrap();
        let noise = Tensor::from_vec(&[2], vec![0.5, -0.2]).unwrap();
        let out = ancestral_step(&x, &eps, t, &sched, Some(&noise)).unwrap();
        let coef = sched.beta(t) / sched.sqrt_one_minus_alpha_bar(t);
        let sigma = sched.beta(t).sqrt();
        for i in 0..2 {
            let want = inv * (x.data()[i] - coef * eps.data()[i]) + sigma * noise.data()[i];
            assert!((out.data()[i] - want).abs() < 1e-15);
        }
        // the final step ignores noise entirely
        let a = ancestral_step(&x, &eps, 1, &sched, Some(&noise)).unwrap();
        let b = ancestral_step(&x, &eps, 1, &sched, None).unwrap();
        assert_eq!(a.data(), b.data());
        assert!(ancestral_step(&x, &eps, 0, &sched, None).is_err());
        assert!(ancestral_step(&x, &eps, 101, &sched, None).is_err());
    }

    #[test]
    fn oracle_reverse_chain_recovers_the_clean_map() {
        let sched = NoiseSchedule::base();
        let mut r = rng(21);
        let x0 = Tensor::randn(&[4, 12, 2], 1.0, &mut r);
        let oracle = OracleEps {
            x0: x0.clone(),
            sched: sched.clone(),
        };
        let eps = Tensor::randn(&[4, 12, 2], 1.0, &mut r);
        let mut x = q_sample(&x0, sched.t_max(), &eps, &sched).unwrap();
        for t in (1..=sched.t_max()).rev() {
            let e = oracle.predict_noise(&x, t, None).unwrap();
            x = ancestral_step(&x, &e, t, &sched, None).unwrap();
        }
        let err = rel_l2(&x, &x0);
        assert!(err < 0.05, "roundtrip error {err}");
    }

    /// Optimal noise predictor for scalar data distributed N(mu, s^2).
    struct Gauss1d {
        mu: Real,
        s: Real,
        sched: NoiseSchedule,
    }

    impl NoisePredictor for Gauss1d {
        fn predict_noise(
            &self,
            y_t: &Tensor,
            t: usize,
            _z: Option<&Tensor>,
        ) -> Result<Tensor, DiffusionError> {
            let ab = self.sched.alpha_bar(t);
            let denom = ab * self.s * self.s + 1.0 - ab;
            let data = y_t
                .data()
                .iter()
                .map(|&y| (1.0 - ab).sqrt() * (y - ab.sqrt() * self.mu) / denom)
                .collect();
            Ok(Tensor::from_vec(y_t.shape(), data)?)
        }
    }

    #[test]
    fn gaussian_chain_matches_the_analytic_distribution() {
        let sched = NoiseSchedule::base();
        let (mu, s) = (0.7, 0.25);
        let model = Gauss1d {
            mu,
            s,
            sched: sched.clone(),
        };
        let n = 10_000;
        let out = sample_base(&model, &[n], None, 1.0, &sched, 42).unwrap();
        let mean = out.data().iter().sum::<Real>() / n as Real;
        let var = out
            .data()
            .iter()
            .map(|&v| (v - mean) * (v - mean))
            .sum::<Real>()
            / (n - 1) as Real;
        let std = var.sqrt();
        let se = std / (n as Real).sqrt();
        assert!((mean - mu).abs() < 3.0 * se, "mean {mean} vs {mu}");
        assert!((std - s).abs() < 0.1 * s, "std {std} vs {s}");
    }

    #[test]
    fn sample_base_is_deterministic_and_chains_are_independent() {
        let sched = NoiseSchedule::sr();
        let model = Gauss1d {
            mu: 0.0,
            s: 1.0,
            sched: sched.clone(),
        };
        let a = sample_base(&model, &[6], None, 1.0, &sched, 9).unwrap();
        let b = sample_base(&model, &[6], None, 1.0, &sched, 9).unwrap();
        assert_eq!(a.data(), b.data());
        let c = sample_base_chain(&model, &[6], None, 1.0, &sched, 9, 1).unwrap();
        assert_ne!(a.data(), c.data());
    }

    /// Counts conditional/unconditional evaluations to expose the
    /// single-call contract at lambda == 1.
    struct CountingModel {
        inner: ZeroModel,
        cond: std::cell::Cell<usize>,
        uncond: std::cell::Cell<usize>,
    }

    impl NoisePredictor for CountingModel {
        fn predict_noise(
            &self,
            y_t: &Tensor,
            t: usize,
            z: Option<&Tensor>,
        ) -> Result<Tensor, DiffusionError> {
            match z {
                Some(_) => self.cond.set(self.cond.get() + 1),
                None => self.uncond.set(self.uncond.get() + 1),
            }
            self.inner.predict_noise(y_t, t, z)
        }
    }

    #[test]
    fn guidance_scale_one_never_calls_the_unconditional_branch() {
        let sched = NoiseSchedule::sr();
        let z = Tensor::from_vec(&[2], vec![0.1, 0.2]).unwrap();
        let m = CountingModel {
            inner: ZeroModel,
            cond: Default::default(),
            uncond: Default::default(),
        };
        sample_base(&m, &[3], Some(&z), 1.0, &sched, 0).unwrap();
        assert_eq!(m.cond.get(), sched.t_max());
        assert_eq!(m.uncond.get(), 0);
        let m = CountingModel {
            inner: ZeroModel,
            cond: Default::default(),
            uncond: Default::default(),
        };
        sample_base(&m, &[3], Some(&z), 1.5, &sched, 0).unwrap();
        assert_eq!(m.cond.get(), sched.t_max());
        assert_eq!(m.uncond.get(), sched.t_max());
    }

    struct OracleX0 {
        y0: Tensor,
    }

    impl CleanPredictor for OracleX0 {
        fn predict_clean(
            &self,
            _y_t: &Tensor,
            _y_lr: &Tensor,
            _t: usize,
        ) -> Result<Tensor, DiffusionError> {
            Ok(self.y0.clone())
        }
    }

    #[test]
    fn posterior_step_collapses_at_the_final_step() {
        let sched = NoiseSchedule::sr();
        let mut r = rng(30);
        let x = Tensor::randn(&[5], 1.0, &mut r);
        let x0 = Tensor::randn(&[5], 1.0, &mut r);
        let noise = Tensor::randn(&[5], 1.0, &mut r);
        let out = posterior_step(&x, &x0, 1, &sched, Some(&noise)).unwrap();
        assert_eq!(out.data(), x0.data());
        // closed form at t = 2
        let t = 2;
        let out = posterior_step(&x, &x0, t, &sched, None).unwrap();
        let ab = sched.alpha_bar(t);
        let abp = sched.alpha_bar(t - 1);
        let beta = sched.beta(t);
        for i in 0..5 {
            let want = abp.sqrt() * beta / (1.0 - ab) * x0.data()[i]
                + (1.0 - beta).sqrt() * (1.0 - abp) / (1.0 - ab) * x.data()[i];
            assert!((out.data()[i] - want).abs() < 1e-14);
        }
    }

    #[test]
    fn upsampler_oracle_chain_returns_the_ground_truth() {
        let mut r = rng(31);
        let y0 = Tensor::randn(&[8, 24, 2], 0.5, &mut r);
        let y_lr = Tensor::randn(&[4, 12, 2], 0.5, &mut r);
        let sched = NoiseSchedule::sr();
        let model = OracleX0 { y0: y0.clone() };
        let out = sample_upsampler(&model, &y_lr, 8, &sched, 77, false).unwrap();
        assert_eq!(out.data(), y0.data());
        assert!(rel_l2(&out, &y0) < 1e-3);
        let again = sample_upsampler(&model, &y_lr, 8, &sched, 77, true).unwrap();
        let third = sample_upsampler(&model, &y_lr, 8, &sched, 77, true).unwrap();
        assert_eq!(again.data(), third.data());
        assert!(sample_upsampler(&model, &y_lr, 6, &sched, 0, false).is_err());
    }

    #[test]
    fn null_augmentation_is_exactly_a_rescale() {
        let mut r = rng(40);
        let tp = TriPlane::randn(16, 3, Aabb::unit_cube(), 0.5, &mut r);
        let out = condition_augment(&tp, &AugmentParams::null(8), &mut rng(1)).unwrap();
        let plain = tp.rescale(8);
        for k in 0..3 {
            assert_eq!(out.planes[k].data(), plain.planes[k].data());
        }
    }

    #[test]
    fn augmentation_is_seeded_and_degrades_the_map() {
        let mut r = rng(41);
        let tp = TriPlane::randn(16, 2, Aabb::unit_cube(), 0.5, &mut r);
        let params = AugmentParams {
            lr_res: 8,
            factors: vec![2],
            blur_sigma: (0.8, 0.8),
            noise_std: (0.05, 0.05),
        };
        let a = condition_augment(&tp, &params, &mut rng(2)).unwrap();
        let b = condition_augment(&tp, &params, &mut rng(2)).unwrap();
        for k in 0..3 {
            assert_eq!(a.planes[k].data(), b.planes[k].data());
            assert!(a.planes[k].data().iter().all(|v| v.is_finite()));
        }
        assert_eq!(a.res(), 8);
        let plain = tp.rescale(8);
        assert!(rel_l2(&a.planes[0], &plain.planes[0]) > 1e-3);
    }

    #[test]
    fn augment_params_reject_bad_ranges() {
        assert!(AugmentParams::null(1).validate().is_err());
        let mut p = AugmentParams::null(8);
        p.factors = vec![];
        assert!(p.validate().is_err());
        let mut p = AugmentParams::null(8);
        p.factors = vec![3];
        assert!(p.validate().is_err());
        let mut p = AugmentParams::null(8);
        p.blur_sigma = (-0.1, 0.2);
        assert!(p.validate().is_err());
        let mut p = AugmentParams::null(8);
        p.noise_std = (0.3, 0.1);
        assert!(p.validate().is_err());
        assert!(AugmentParams::default_for(16).validate().is_ok());
    }

    fn patch_scene() -> (TriPlane, RadianceDecoder, Camera, RenderConfig, Rect) {
        let mut r = rng(50);
        let tp = TriPlane::randn(8, 2, Aabb::unit_cube(), 0.4, &mut r);
        let dec = RadianceDecoder::new(2, FourierSpec { bands: 1 }, 8, &mut r);
        let cam = Camera::orbit(2.5, 0.3, 0.2, [0.0; 3], 0.6, 12, 12);
        let cfg = RenderConfig {
            samples_per_ray: 6,
            ..RenderConfig::default()
        };
        let rect = Rect {
            x0: 4,
            y0: 4,
            w: 4,
            h: 4,
        };
        (tp, dec, cam, cfg, rect)
    }

    #[test]
    fn perfect_prediction_zeroes_the_upsampler_loss() {
        let (tp, dec, cam, cfg, rect) = patch_scene();
        let gt = render_patch(
            &TriPlaneField { tp: &tp, dec: &dec },
            &cam,
            &tp.bbox,
            Rect::full(&cam),
            &cfg,
        )
        .unwrap();
        let rolled = tp.roll_out();
        let mut g = Graph::fast();
        let pred = g.input(rolled.clone()).unwrap();
        let target = g.input(rolled.clone()).unwrap();
        let sup = PatchSupervision {
            dec: &dec,
            cam: &cam,
            rect,
            gt: &gt,
            bbox: tp.bbox,
            render: cfg,
        };
        let loss = upsampler_loss_graph(&mut g, pred, target, 1.0, 0.5, Some(&sup)).unwrap();
        let v = g.value(loss).data()[0];
        assert!(v < 1e-12, "perfect-prediction loss {v}");
        // the image-free flag reduces to the pure map error
        let mut g = Graph::fast();
        let pred = g.input(rolled.clone()).unwrap();
        let other = g.input(Tensor::zeros(rolled.shape())).unwrap();
        let loss = upsampler_loss_graph(&mut g, pred, other, 2.0, 0.0, None).unwrap();
        let direct = {
            let m = g.mse(pred, other).unwrap();
            g.value(m).data()[0] * 2.0
        };
        assert_eq!(g.value(loss).data()[0], direct);
    }

    #[test]
    fn corner_patches_that_miss_the_box_are_rejected() {
        let (tp, dec, cam, cfg, _) = patch_scene();
        let gt = Tensor::zeros(&[12, 12, 3]);
        let mut g = Graph::fast();
        let rolled = tp.roll_out();
        let pred = g.input(rolled.clone()).unwrap();
        let target = g.input(rolled).unwrap();
        let sup = PatchSupervision {
            dec: &dec,
            cam: &cam,
            rect: Rect {
                x0: 0,
                y0: 0,
                w: 2,
                h: 2,
            },
            gt: &gt,
            bbox: tp.bbox,
            render: cfg,
        };
        let out = upsampler_loss_graph(&mut g, pred, target, 1.0, 1.0, Some(&sup));
        assert!(matches!(out, Err(DiffusionError::PatchNotCovered { .. })));
    }

    #[test]
    fn upsampler_loss_gradient_flows_through_the_renderer() {
        let (tp, dec, cam, cfg, rect) = patch_scene();
        let gt = render_patch(
            &TriPlaneField { tp: &tp, dec: &dec },
            &cam,
            &tp.bbox,
            Rect::full(&cam),
            &cfg,
        )
        .unwrap();
        let mut r = rng(51);
        let pred0 = Tensor::randn(&[8, 24, 2], 0.4, &mut r);
        let target = tp.roll_out();
        let bbox = tp.bbox;
        let build = |g: &mut Graph, ids: &[NodeId]| {
            let tgt = g.input(target.clone()).unwrap();
            let sup = PatchSupervision {
                dec: &dec,
                cam: &cam,
                rect,
                gt: &gt,
                bbox,
                render: cfg,
            };
            upsampler_loss_graph(g, ids[0], tgt, 1.0, 0.5, Some(&sup)).unwrap()
        };
        let err = crate::numerics::gradcheck::max_grad_rel_err(
            std::slice::from_ref(&pred0),
            crate::numerics::gradcheck::FD_STEP,
            &build,
        );
        assert!(err < 1e-3, "fd mismatch {err}");
    }

    #[test]
    fn ema_closed_forms() {
        let mut store = ParamStore::new();
        store.insert("a", Tensor::from_vec(&[2], vec![1.0, -2.0]).unwrap());
        let target = {
            let mut s = ParamStore::new();
            s.insert("a", Tensor::from_vec(&[2], vec![3.0, 4.0]).unwrap());
            s
        };
        // rate 0: shadow snaps to the weights
        let mut e = Ema::new(&store, 0.0);
        e.update(&target);
        assert_eq!(e.shadow().get("a").data(), target.get("a").data());
        // rate 1: shadow never moves
        let mut e = Ema::new(&store, 1.0);
        e.update(&target);
        assert_eq!(e.shadow().get("a").data(), store.get("a").data());
        // geometric residual after k updates toward constant weights
        let rate = 0.9;
        let k = 5;
        let mut e = Ema::new(&store, rate);
        for _ in 0..k {
            e.update(&target);
        }
        for i in 0..2 {
            let s0 = store.get("a").data()[i];
            let w = target.get("a").data()[i];
            let want = w + (rate as Real).powi(k) * (s0 - w);
            assert!((e.shadow().get("a").data()[i] - want).abs() < 1e-12);
        }
    }

    fn tiny_net(z_dim: usize, width: usize) -> DenoiserNet {
        let cfg = NetConfig {
            in_channels: 2,
            width,
            mults: vec![1, 2],
            z_dim,
            t_dim: 8,
            cond_hidden: 12,
            t_max: 100,
            groups: 4,
            layout: crate::denoiser::Layout::Rolled,
            aware: true,
        };
        DenoiserNet::new(cfg, 123)
    }

    #[test]
    fn base_trainer_is_deterministic() {
        let mut r = rng(60);
        let y0 = Tensor::randn(&[8, 24, 2], 0.5, &mut r);
        let run = || {
            let mut tr = BaseTrainer::new(
                tiny_net(0, 8),
                None,
                NoiseSchedule::base(),
                1e-3,
                0.99,
                0.0,
                7,
            );
            let mut out = Vec::new();
            for _ in 0..3 {
                out.push(tr.step(&[BaseSample { y0: &y0, view: None }]).unwrap());
            }
            out
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn base_trainer_overfits_one_subject() {
        let mut r = rng(61);
        let y0 = Tensor::randn(&[8, 24, 2], 0.5, &mut r);
        let view = Tensor::randn(&[16, 16, 3], 0.3, &mut r);
        let net = tiny_net(8, 12);
        let enc = LatentEncoder::new(
            EncoderConfig {
                in_res: 16,
                z_dim: 8,
                width: 4,
            },
            5,
        );
        let untrained: Real = {
            let probe = tiny_net(8, 12);
            let mut lr = rng(70);
            (0..40)
                .map(|_| loss_simple(&probe, &y0, None, 0.0, &NoiseSchedule::base(), &mut lr).unwrap())
                .sum::<Real>()
                / 40.0
        };
        let mut tr = BaseTrainer::new(net, Some(enc), NoiseSchedule::base(), 6e-3, 0.99, 0.1, 8);
        let sample = BaseSample {
            y0: &y0,
            view: Some(&view),
        };
        let mut last = 0.0;
        for i in 0..2200 {
            if i == 1400 {
                tr.opt_net.lr = 1.5e-3;
                tr.opt_enc.lr = 1.5e-3;
            }
            last = tr.step(std::slice::from_ref(&sample)).unwrap();
        }
        assert!(last.is_finite());
        let z = tr.encoder.as_ref().unwrap().encode(&view).unwrap();
        let mut lr = rng(70);
        let trained: Real = (0..40)
            .map(|_| loss_simple(&tr.net, &y0, Some(&z), 0.0, &tr.sched, &mut lr).unwrap())
            .sum::<Real>()
            / 40.0;
        assert!(
            trained < untrained / 10.0,
            "loss only fell from {untrained} to {trained}"
        );
        // EMA shadow lags the raw weights
        let raw = tr.net.params.get("stem.w").data();
        let shadow = tr.ema_net.shadow().get("stem.w").data();
        assert_ne!(raw, shadow);
    }

    #[test]
    fn sr_trainer_learns_the_residual_detail() {
        let mut r = rng(62);
        let coarse = TriPlane::randn(4, 2, Aabb::unit_cube(), 0.5, &mut r);
        let mut hr = coarse.rescale(8);
        for p in hr.planes.iter_mut() {
            let detail = Tensor::randn(p.shape(), 0.25, &mut r);
            for (d, &n) in p.data_mut().iter_mut().zip(detail.data()) {
                *d += n;
            }
        }
        let y_hr = hr.roll_out();
        let cfg = UpConfig {
            in_channels: 2,
            width: 8,
            t_dim: 8,
            cond_hidden: 12,
            t_max: 50,
            groups: 4,
            aware: true,
        };
        let net = UpsamplerNet::new(cfg, 9);
        let sched = NoiseSchedule::sr();
        let eval = |net: &UpsamplerNet| -> Real {
            let mut er = rng(80);
            let mut acc = 0.0;
            let n = 10;
            for _ in 0..n {
                let lr =
                    condition_augment(&hr, &AugmentParams::null(4), &mut er).unwrap();
                let t = 5;
                let eps = Tensor::randn(y_hr.shape(), 1.0, &mut er);
                let x_t = q_sample(&y_hr, t, &eps, &sched).unwrap();
                let pred = net.denoise(&x_t, &lr.roll_out(), t).unwrap();
                acc += rel_l2(&pred, &y_hr);
            }
            acc / n as Real
        };
        let before = eval(&net);
        let mut tr = SrTrainer::new(
            net,
            sched.clone(),
            AugmentParams::null(4),
            6e-3,
            0.99,
            1.0,
            0.0,
            10,
        );
        let sample = SrSample {
            y_hr: &y_hr,
            bbox: Aabb::unit_cube(),
            patch: None,
        };
        for _ in 0..1400 {
            tr.step(std::slice::from_ref(&sample)).unwrap();
        }
        let after = eval(&tr.net);
        assert!(
            after < 0.1 && after < before * 0.5,
            "relative error {before} -> {after}"
        );
    }

    #[test]
    fn latent_prior_shapes_and_moments() {
        let sched = NoiseSchedule::latent();
        let mut prior = LatentPrior::new(8, 64, sched, 3);
        let z = prior.sample(5).unwrap();
        assert_eq!(z.shape(), [8]);
        let z2 = prior.sample(5).unwrap();
        assert_eq!(z.data(), z2.data());
        assert!(prior.predict(&Tensor::zeros(&[7]), 1).is_err());

        // train on a tight Gaussian cloud and check the sampled moments
        let mut r = rng(90);
        let mu: Vec<Real> = (0..8).map(|i| 0.5 + 0.25 * i as Real / 8.0).collect();
        let data: Vec<Tensor> = (0..64)
            .map(|_| {
                let n = Tensor::randn(&[8], 0.3, &mut r);
                let d = n
                    .data()
                    .iter()
                    .zip(&mu)
                    .map(|(&e, &m)| m + e)
                    .collect();
                Tensor::from_vec(&[8], d).unwrap()
            })
            .collect();
        let mut opt = AdamW::new(3e-3);
        let mut tr = rng(91);
        for step in 0..2500 {
            let batch: Vec<Tensor> = (0..16)
                .map(|i| data[(step * 16 + i) % data.len()].clone())
                .collect();
            prior.train_step(&batch, &mut opt, &mut tr).unwrap();
        }
        let n = 200;
        let mut mean = vec![0.0; 8];
        for i in 0..n {
            let s = prior.sample(1000 + i as u64).unwrap();
            for j in 0..8 {
                mean[j] += s.data()[j];
            }
        }
        for m in mean.iter_mut() {
            *m /= n as Real;
        }
        let data_mean: Vec<Real> = (0..8)
            .map(|j| data.iter().map(|d| d.data()[j]).sum::<Real>() / data.len() as Real)
            .collect();
        for j in 0..8 {
            assert!(
                (mean[j] - data_mean[j]).abs() < 0.15,
                "dim {j}: sampled {} vs data {}",
                mean[j],
                data_mean[j]
            );
        }
    }
}
