//! Per-subject tri-plane fitting against multi-view images: the shared-
//! decoder protocol (joint fit over the first few subjects, then planes-only
//! fits through the frozen decoder), the four loss terms, and the random
//! resolution-rescaling augmentation.

use crate::numerics::{Graph, Mode, NodeId, NumericsError, Real, Tensor};
use crate::optim::{AdamW, Binding, ParamStore};
use crate::radiance::{
    bundle_for_pixels, render_graph, Camera, RadianceDecoder, RadianceError, RenderConfig,
};
use crate::triplane::{Aabb, FourierSpec, TriPlane};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use std::collections::BTreeMap;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum FitError {
    #[error("fitting diverged at step {step}: loss {loss}")]
    Diverged { step: usize, loss: Real },
    #[error(transparent)]
    Numerics(#[from] NumericsError),
    #[error(transparent)]
    Radiance(#[from] RadianceError),
}

/// Multi-view captures of one subject, split into fit and held-out views.
#[derive(Clone)]
pub struct SubjectDataset {
    pub name: String,
    pub images: Vec<Tensor>,
    pub cameras: Vec<Camera>,
    pub bbox: Aabb,
    pub train_views: Vec<usize>,
    pub heldout_views: Vec<usize>,
}

#[derive(Clone, Copy, Debug)]
pub struct FitConfig {
    pub iterations: usize,
    pub lr_planes: Real,
    pub lr_decoder: Real,
    pub w_mse: Real,
    pub w_sparse: Real,
    pub w_smooth: Real,
    pub w_dist: Real,
    /// Probability that one step trains against rescaled planes.
    pub rescale_prob: Real,
    pub rays_per_step: usize,
    pub seed: u64,
    pub plane_res: usize,
    pub plane_channels: usize,
    pub samples_per_ray: usize,
    pub decoder_hidden: usize,
    pub fourier_bands: usize,
    pub smooth_probes: usize,
    pub smooth_delta: Real,
    pub background: [Real; 3],
}

impl Default for FitConfig {
    fn default() -> Self {
        FitConfig {
            iterations: 2000,
            lr_planes: 1e-2,
            lr_decoder: 1e-3,
            w_mse: 1.0,
            w_sparse: 1e-3,
            w_smooth: 1e-3,
            w_dist: 1e-3,
            rescale_prob: 0.5,
            rays_per_step: 1024,
            seed: 0,
            plane_res: 32,
            plane_channels: 8,
            samples_per_ray: 48,
            decoder_hidden: 64,
            fourier_bands: 4,
            smooth_probes: 4096,
            smooth_delta: 0.01,
            background: [1.0, 1.0, 1.0],
        }
    }
}

impl FitConfig {
    pub fn validate(&self) {
        for w in [self.w_mse, self.w_sparse, self.w_smooth, self.w_dist] {
            assert!(w >= 0.0, "loss weights must be non-negative");
        }
        assert!((0.0..=1.0).contains(&self.rescale_prob));
        assert!(self.rays_per_step >= 1 && self.samples_per_ray >= 2);
        assert!(self.plane_res >= 4 && self.plane_channels >= 1);
    }
}

// ---- the four loss terms, plain paths ----

/// Mean squared error over all elements of two same-shaped images.
pub fn loss_mse(a: &Tensor, b: &Tensor) -> Result<Real, NumericsError> {
    if a.shape() != b.shape() {
        return Err(NumericsError::ShapeMismatch {
            op: "loss_mse",
            axis: "all",
            detail: format!("{:?} vs {:?}", a.shape(), b.shape()),
        });
    }
    let n = a.len() as Real;
    Ok(a.data()
        .iter()
        .zip(b.data())
        .map(|(x, y)| (x - y) * (x - y))
        .sum::<Real>()
        / n)
}

/// Mean |sigma| over a density batch.
pub fn loss_sparse(sigma: &Tensor) -> Real {
    sigma.data().iter().map(|s| s.abs()).sum::<Real>() / sigma.len() as Real
}

/// Mean |sigma(p) - sigma(p + delta u)| over probes; `us` are unit vectors
/// used both as the displacement and the decoder's view direction.
pub fn loss_smooth(
    tp: &TriPlane,
    dec: &RadianceDecoder,
    probes: &[[Real; 3]],
    us: &[[Real; 3]],
    delta: Real,
) -> Result<Real, NumericsError> {
    assert_eq!(probes.len(), us.len());
    let shifted: Vec<[Real; 3]> = probes
        .iter()
        .zip(us)
        .map(|(p, u)| std::array::from_fn(|i| (p[i] + delta * u[i]).clamp(0.0, 1.0)))
        .collect();
    let mut dirs = Vec::with_capacity(us.len() * 3);
    for u in us {
        dirs.extend_from_slice(u);
    }
    let dirs = Tensor::from_vec(&[us.len(), 3], dirs)?;
    let fa = tp.query_features(probes, Mode::Fast)?;
    let fb = tp.query_features(&shifted, Mode::Fast)?;
    let (sa, _) = dec.decode(&fa, &dirs, Mode::Fast)?;
    let (sb, _) = dec.decode(&fb, &dirs, Mode::Fast)?;
    Ok(sa
        .data()
        .iter()
        .zip(sb.data())
        .map(|(a, b)| (a - b).abs())
        .sum::<Real>()
        / probes.len() as Real)
}

/// Distortion of one ray's weight profile:
/// sum_ij w_i w_j |t_i - t_j| + (1/3) sum_i w_i^2 delta_i.
pub fn loss_dist(weights: &[Real], mids: &[Real], widths: &[Real]) -> Real {
    assert!(weights.len() == mids.len() && mids.len() == widths.len());
    let mut acc = 0.0;
    for i in 0..weights.len() {
        for j in 0..weights.len() {
            acc += weights[i] * weights[j] * (mids[i] - mids[j]).abs();
        }
        acc += weights[i] * weights[i] * widths[i] / 3.0;
    }
    acc
}

// ---- fitting driver ----

pub struct FitOutcome {
    pub planes: Vec<TriPlane>,
    pub decoder: RadianceDecoder,
    /// Total loss per step.
    pub losses: Vec<Real>,
    /// (mse, sparse, smooth, dist) per step, unweighted.
    pub terms: Vec<[Real; 4]>,
}

/// Joint fit of a shared decoder plus one tri-plane per subject; the
/// returned decoder is meant to be frozen for all later subjects.
pub fn fit_shared_decoder(
    subjects: &[SubjectDataset],
    cfg: &FitConfig,
) -> Result<FitOutcome, FitError> {
    assert!(subjects.len() >= 2, "shared phase needs at least 2 subjects");
    fit_impl(subjects, None, cfg)
}

/// Planes-only fit of one subject through a frozen decoder.
pub fn fit_subject(
    subject: &SubjectDataset,
    decoder: &RadianceDecoder,
    cfg: &FitConfig,
) -> Result<FitOutcome, FitError> {
    fit_impl(std::slice::from_ref(subject), Some(decoder), cfg)
}

fn mix_seed(seed: u64, step: usize, subject: usize, view: usize) -> u64 {
    seed ^ (step as u64 + 1).wrapping_mul(0x9E37_79B9_7F4A_7C15)
        ^ ((subject as u64) << 48)
        ^ ((view as u64) << 32)
}

fn fit_impl(
    subjects: &[SubjectDataset],
    frozen_decoder: Option<&RadianceDecoder>,
    cfg: &FitConfig,
) -> Result<FitOutcome, FitError> {
    cfg.validate();
    let k = subjects.len();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let fourier = FourierSpec {
        bands: cfg.fourier_bands,
    };

    // initialization order is fixed: planes for subject 0..k, then decoder
    let mut store = ParamStore::new();
    for (s, subject) in subjects.iter().enumerate() {
        let tp = TriPlane::randn(cfg.plane_res, cfg.plane_channels, subject.bbox, 0.1, &mut rng);
        for (pn, t) in ["uv", "wu", "vw"].iter().zip(tp.planes.iter()) {
            store.insert(format!("plane.{s}.{pn}"), t.clone());
        }
    }
    let decoder = match frozen_decoder {
        Some(d) => d.clone(),
        None => RadianceDecoder::new(cfg.plane_channels, fourier, cfg.decoder_hidden, &mut rng),
    };
    decoder.insert_params(&mut store, "dec");
    let train_decoder = frozen_decoder.is_none();

    let mut opt_planes = AdamW::new(cfg.lr_planes);
    let mut opt_dec = AdamW::new(cfg.lr_decoder);
    let rays_per_subject = (cfg.rays_per_step / k).max(1);
    let probes_per_subject = (cfg.smooth_probes / k).max(1);
    let rescale_choices: Vec<usize> = [cfg.plane_res / 4, cfg.plane_res / 2, 3 * cfg.plane_res / 4]
        .into_iter()
        .filter(|&r| r >= 4 && r < cfg.plane_res)
        .collect();

    let mut losses = Vec::with_capacity(cfg.iterations);
    let mut terms = Vec::with_capacity(cfg.iterations);
    for step in 0..cfg.iterations {
        let mut g = Graph::fast();
        let mut bind = Binding::bind_prefix(&mut g, &store, "plane.", true)?;
        bind.merge(Binding::bind_prefix(&mut g, &store, "dec.", train_decoder)?);

        // per-step augmentation: train against downscaled planes
        let rescale_to = if !rescale_choices.is_empty() && rng.gen::<Real>() < cfg.rescale_prob {
            Some(rescale_choices[rng.gen_range(0..rescale_choices.len())])
        } else {
            None
        };

        // scalar loss terms accumulated as (node, weight) pairs
        let mut mse_parts: Vec<(NodeId, Real)> = Vec::new();
        let mut sparse_parts: Vec<(NodeId, Real)> = Vec::new();
        let mut smooth_parts: Vec<(NodeId, Real)> = Vec::new();
        let mut dist_parts: Vec<(NodeId, Real)> = Vec::new();
        let mut total_rays = 0usize;
        let mut total_samples = 0usize;
        let mut pending: Vec<(usize, Vec<(usize, Vec<(usize, usize)>)>)> = Vec::new();

        for (s, subject) in subjects.iter().enumerate() {
            // pick rays: a random train view and pixel per ray
            let mut by_view: BTreeMap<usize, Vec<(usize, usize)>> = BTreeMap::new();
            for _ in 0..rays_per_subject {
                let view = subject.train_views[rng.gen_range(0..subject.train_views.len())];
                let cam = &subject.cameras[view];
                let px = rng.gen_range(0..cam.width);
                let py = rng.gen_range(0..cam.height);
                by_view.entry(view).or_default().push((px, py));
            }
            pending.push((s, by_view.into_iter().collect()));
        }

        for (s, views) in &pending {
            let subject = &subjects[*s];
            let mut plane_ids = [
                bind.id(&format!("plane.{s}.uv")),
                bind.id(&format!("plane.{s}.wu")),
                bind.id(&format!("plane.{s}.vw")),
            ];
            if let Some(r) = rescale_to {
                for id in plane_ids.iter_mut() {
                    *id = g.resize_bilinear(*id, r, r)?;
                }
            }

            for (view, pixels) in views {
                let cam = &subject.cameras[*view];
                let rcfg = RenderConfig {
                    samples_per_ray: cfg.samples_per_ray,
                    background: cfg.background,
                    jitter: true,
                    seed: mix_seed(cfg.seed, step, *s, *view),
                    ..Default::default()
                };
                let bundle = bundle_for_pixels(cam, &subject.bbox, &rcfg, pixels);
                if bundle.rays.is_empty() {
                    continue;
                }
                let r = bundle.rays.len();
                let n = bundle.n_samples;
                let img = &subject.images[*view];
                let mut target = Vec::with_capacity(r * 3);
                for ray in &bundle.rays {
                    let (px, py) = ray.pixel;
                    target.extend_from_slice(&img.data()[(py * cam.width + px) * 3..][..3]);
                }
                let target = g.input(Tensor::from_vec(&[r, 3], target)?)?;

                let render = render_graph(
                    &mut g,
                    plane_ids,
                    &decoder,
                    &bind,
                    "dec",
                    &bundle,
                    &subject.bbox,
                    cfg.background,
                )?;
                let mse = g.mse(render.pixels, target)?;
                mse_parts.push((mse, r as Real));
                let sa = g.abs(render.sigma)?;
                let sm = g.mean_all(sa)?;
                sparse_parts.push((sm, (r * n) as Real));
                let (mid, width) = bundle.depth_tensors();
                let d = g.distortion(render.weights, &mid, &width)?;
                let ds = g.sum_all(d)?;
                dist_parts.push((ds, 1.0));
                total_rays += r;
                total_samples += r * n;
            }

            // smoothness probes against the same (possibly rescaled) planes
            let m = probes_per_subject;
            let mut probes = Vec::with_capacity(m);
            let mut us = Vec::with_capacity(m);
            for _ in 0..m {
                probes.push([rng.gen::<Real>(), rng.gen::<Real>(), rng.gen::<Real>()]);
                us.push(random_unit(&mut rng));
            }
            let shifted: Vec<[Real; 3]> = probes
                .iter()
                .zip(&us)
                .map(|(p, u)| {
                    std::array::from_fn(|i| (p[i] + cfg.smooth_delta * u[i]).clamp(0.0, 1.0))
                })
                .collect();
            let mut dirs = Vec::with_capacity(m * 3);
            for u in &us {
                dirs.extend_from_slice(u);
            }
            let dirs = g.input(Tensor::from_vec(&[m, 3], dirs)?)?;
            let fa = TriPlane::query_graph(&mut g, plane_ids, &probes)?;
            let fb = TriPlane::query_graph(&mut g, plane_ids, &shifted)?;
            let (saa, _) = decoder.decode_graph(&mut g, &bind, "dec", fa, dirs)?;
            let (sbb, _) = decoder.decode_graph(&mut g, &bind, "dec", fb, dirs)?;
            let diff = g.sub(saa, sbb)?;
            let ad = g.abs(diff)?;
            let sl = g.mean_all(ad)?;
            smooth_parts.push((sl, 1.0 / k as Real));
        }

        // weighted means: rays for mse, samples for sparse, rays for dist
        let mse_t = weighted_sum(&mut g, &mse_parts, 1.0 / total_rays.max(1) as Real)?;
        let sparse_t = weighted_sum(&mut g, &sparse_parts, 1.0 / total_samples.max(1) as Real)?;
        let smooth_t = weighted_sum(&mut g, &smooth_parts, 1.0)?;
        let dist_t = weighted_sum(&mut g, &dist_parts, 1.0 / total_rays.max(1) as Real)?;
        terms.push([
            g.value(mse_t).item(),
            g.value(sparse_t).item(),
            g.value(smooth_t).item(),
            g.value(dist_t).item(),
        ]);

        let mut total = g.scale(mse_t, cfg.w_mse)?;
        for (t, w) in [
            (sparse_t, cfg.w_sparse),
            (smooth_t, cfg.w_smooth),
            (dist_t, cfg.w_dist),
        ] {
            let scaled = g.scale(t, w)?;
            total = g.add(total, scaled)?;
        }
        let loss_val = g.value(total).item();
        if !loss_val.is_finite() {
            return Err(FitError::Diverged {
                step,
                loss: loss_val,
            });
        }
        losses.push(loss_val);

        let mut grads = g.backward(total)?;
        let all = bind.grads(&g, &mut grads);
        let mut plane_grads = BTreeMap::new();
        let mut dec_grads = BTreeMap::new();
        for (name, t) in all {
            if name.starts_with("plane.") {
                plane_grads.insert(name, t);
            } else if train_decoder {
                dec_grads.insert(name, t);
            }
        }
        opt_planes.step(&mut store, &plane_grads);
        if train_decoder {
            opt_dec.step(&mut store, &dec_grads);
        }
    }

    let mut planes = Vec::with_capacity(k);
    for (s, subject) in subjects.iter().enumerate() {
        planes.push(
            TriPlane::from_planes(
                [
                    store.get(&format!("plane.{s}.uv")).clone(),
                    store.get(&format!("plane.{s}.wu")).clone(),
                    store.get(&format!("plane.{s}.vw")).clone(),
                ],
                subject.bbox,
            )
            .expect("square planes"),
        );
    }
    let mut decoder = decoder;
    if train_decoder {
        decoder.load_params(&store, "dec");
    }
    Ok(FitOutcome {
        planes,
        decoder,
        losses,
        terms,
    })
}

fn weighted_sum(
    g: &mut Graph,
    parts: &[(NodeId, Real)],
    scale: Real,
) -> Result<NodeId, NumericsError> {
    let mut acc: Option<NodeId> = None;
    for &(node, w) in parts {
        let term = g.scale(node, w * scale)?;
        acc = Some(match acc {
            None => term,
            Some(a) => g.add(a, term)?,
        });
    }
    match acc {
        Some(a) => Ok(a),
        None => g.input(Tensor::scalar(0.0)),
    }
}

pub fn random_unit<R: Rng>(rng: &mut R) -> [Real; 3] {
    loop {
        let v: [Real; 3] = std::array::from_fn(|_| {
            rand_distr::Distribution::sample(&rand_distr::StandardNormal, rng)
        });
        let n = (v[0] * v[0] + v[1] * v[1] + v[2] * v[2]).sqrt();
        if n > 1e-6 {
            return [v[0] / n, v[1] / n, v[2] / n];
        }
    }
}
