//! Procedural portrait subjects: seeded analytic density/color fields (head
//! ellipsoid, hair cap, nose, optional glasses tori) and the multi-view
//! dataset rendered from them over a fixed camera ring. Ground truth comes
//! straight from the analytic field through the standard ray quadrature, so
//! supervision is multi-view-consistent by construction.

use crate::fitting::SubjectDataset;
use crate::numerics::{Real, Tensor, PI};
use crate::radiance::{render_image, Camera, FieldEval, RenderConfig};
use crate::triplane::Aabb;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Peak shape density; crossing a head-sized shape leaves ~e^-20
/// transmittance, i.e. fully opaque.
const SIGMA_PEAK: Real = 60.0;
/// Sigmoid sharpness of shape boundaries in normalized implicit units.
const SHARP: Real = 32.0;
/// Sharpness of the hair-cap angular mask.
const CAP_SHARP: Real = 24.0;

/// Draw ranges, all closed intervals.
const HEAD_X: (Real, Real) = (0.15, 0.20); // depth (facing +x)
const HEAD_Y: (Real, Real) = (0.17, 0.22); // width
const HEAD_Z: (Real, Real) = (0.22, 0.28); // height
const SKIN_R: (Real, Real) = (0.55, 0.85);
const SKIN_G: (Real, Real) = (0.40, 0.70);
const SKIN_B: (Real, Real) = (0.30, 0.60);
const HAIR_RGB: (Real, Real) = (0.04, 0.40);
const HAIR_CAP: (Real, Real) = (0.15, 0.50);
const HAIR_DEPTH: (Real, Real) = (0.06, 0.12);
const NOSE: (Real, Real) = (0.035, 0.060);
const GLASS_RADIUS: (Real, Real) = (0.050, 0.068);
const GLASS_TUBE: (Real, Real) = (0.014, 0.020);
const GLASS_GRAY: (Real, Real) = (0.05, 0.20);

#[derive(Clone, Copy, Debug)]
pub struct Glasses {
    pub radius: Real,
    pub tube: Real,
    pub gray: Real,
}

/// One subject's procedural identity, drawn from the ranges above.
#[derive(Clone, Debug)]
pub struct SubjectParams {
    pub head_axes: [Real; 3],
    pub skin: [Real; 3],
    pub hair: [Real; 3],
    /// Hair covers ellipsoid directions whose unit z exceeds this.
    pub hair_cap: Real,
    /// Shell thickness of the hair cap in implicit units.
    pub hair_depth: Real,
    pub nose_size: Real,
    pub glasses: Option<Glasses>,
}

fn draw<R: Rng>(rng: &mut R, (lo, hi): (Real, Real)) -> Real {
    lo + (hi - lo) * rng.gen::<Real>()
}

impl SubjectParams {
    /// Deterministic draw for subject `id` under a dataset seed. Each
    /// subject owns an independent rng stream, so datasets are reproducible
    /// per (seed, id) regardless of synthesis order.
    pub fn draw_for(seed: u64, id: u64, glasses_prob: Real) -> SubjectParams {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream((1 << 32) | id);
        let head_axes = [
            draw(&mut rng, HEAD_X),
            draw(&mut rng, HEAD_Y),
            draw(&mut rng, HEAD_Z),
        ];
        let skin = [
            draw(&mut rng, SKIN_R),
            draw(&mut rng, SKIN_G),
            draw(&mut rng, SKIN_B),
        ];
        let hair = [
            draw(&mut rng, HAIR_RGB),
            draw(&mut rng, HAIR_RGB),
            draw(&mut rng, HAIR_RGB),
        ];
        let hair_cap = draw(&mut rng, HAIR_CAP);
        let hair_depth = draw(&mut rng, HAIR_DEPTH);
        let nose_size = draw(&mut rng, NOSE);
        let radius = draw(&mut rng, GLASS_RADIUS);
        let tube = draw(&mut rng, GLASS_TUBE);
        let gray = draw(&mut rng, GLASS_GRAY);
        let glasses = if rng.gen::<Real>() < glasses_prob {
            Some(Glasses { radius, tube, gray })
        } else {
            None
        };
        SubjectParams {
            head_axes,
            skin,
            hair,
            hair_cap,
            hair_depth,
            nose_size,
            glasses,
        }
    }

    /// Per-view elevations for the camera ring, drawn after the shape
    /// parameters from the same stream; view 0 is pinned frontal.
    pub fn draw_elevations(seed: u64, id: u64, n: usize, range: (Real, Real)) -> Vec<Real> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream((1 << 32) | id);
        // skip the 13 parameter draws plus the glasses coin
        for _ in 0..14 {
            rng.gen::<Real>();
        }
        let mut out = vec![0.0];
        for _ in 1..n {
            out.push(draw(&mut rng, range));
        }
        out
    }
}

/// Analytic density/color field of one subject.
pub struct SubjectField {
    pub params: SubjectParams,
}

fn sigmoid(u: Real) -> Real {
    1.0 / (1.0 + (-u).exp())
}

impl SubjectField {
    pub fn density_color(&self, p: [Real; 3]) -> (Real, [Real; 3]) {
        let pr = &self.params;
        let [ax, ay, az] = pr.head_axes;
        let mut sigma = 0.0;
        let mut col = [0.0; 3];
        let add = |s: Real, c: [Real; 3], sigma: &mut Real, col: &mut [Real; 3]| {
            *sigma += s;
            for k in 0..3 {
                col[k] += s * c[k];
            }
        };

        let q_head =
            ((p[0] / ax).powi(2) + (p[1] / ay).powi(2) + (p[2] / az).powi(2)).sqrt();
        let s_head = SIGMA_PEAK * sigmoid(SHARP * (1.0 - q_head));
        add(s_head, pr.skin, &mut sigma, &mut col);

        let nc = [ax * 0.95, 0.0, -0.08 * az];
        let nd = ((p[0] - nc[0]).powi(2) + (p[1] - nc[1]).powi(2) + (p[2] - nc[2]).powi(2))
            .sqrt();
        let q_nose = nd / pr.nose_size;
        let s_nose = SIGMA_PEAK * sigmoid(SHARP * (1.0 - q_nose));
        let nose_col = [pr.skin[0] * 0.92, pr.skin[1] * 0.88, pr.skin[2] * 0.88];
        add(s_nose, nose_col, &mut sigma, &mut col);

        let half = pr.hair_depth * 0.5;
        let q_shell = (q_head - (1.0 + half)).abs() / half;
        let zdir = if q_head > 1e-9 { (p[2] / az) / q_head } else { 0.0 };
        let cap = sigmoid(CAP_SHARP * (zdir - pr.hair_cap));
        let s_hair = SIGMA_PEAK * sigmoid(SHARP * (1.0 - q_shell)) * cap;
        add(s_hair, pr.hair, &mut sigma, &mut col);

        if let Some(gl) = pr.glasses {
            let gc = [gl.gray, gl.gray, gl.gray * 1.15];
            for side in [-1.0, 1.0] {
                let c = [ax * 0.98, side * ay * 0.50, az * 0.18];
                let dx = p[0] - c[0];
                let ring = ((p[1] - c[1]).powi(2) + (p[2] - c[2]).powi(2)).sqrt() - gl.radius;
                let q_t = (ring * ring + dx * dx).sqrt() / gl.tube;
                let s = SIGMA_PEAK * sigmoid(SHARP * (1.0 - q_t));
                add(s, gc, &mut sigma, &mut col);
            }
        }

        if sigma > 1e-12 {
            for k in 0..3 {
                col[k] /= sigma;
            }
        }
        (sigma, col)
    }
}

impl FieldEval for SubjectField {
    fn eval(&self, points: &[[Real; 3]], _dirs: &[[Real; 3]]) -> (Vec<Real>, Vec<[Real; 3]>) {
        let mut sig = Vec::with_capacity(points.len());
        let mut col = Vec::with_capacity(points.len());
        for &p in points {
            let (s, c) = self.density_color(p);
            sig.push(s);
            col.push(c);
        }
        (sig, col)
    }
}

/// Dataset-synthesis geometry and sizes.
#[derive(Clone, Debug)]
pub struct SynthConfig {
    pub seed: u64,
    pub n_subjects: usize,
    pub n_views: usize,
    pub img_res: usize,
    pub cam_radius: Real,
    pub cam_fov: Real,
    pub elev_deg: (Real, Real),
    pub glasses_prob: Real,
    /// Every k-th view (k, 2k, ...) is held out; 0 disables the split.
    pub heldout_every: usize,
    pub samples_per_ray: usize,
}

/// A synthesized subject: procedural identity plus its rendered views.
pub struct Subject {
    pub id: usize,
    pub params: SubjectParams,
    pub data: SubjectDataset,
}

/// The ring of poses shared by every subject except for per-view elevation:
/// azimuth uniform over the full circle, view 0 exactly frontal.
pub fn camera_ring(cfg: &SynthConfig, elevations: &[Real]) -> Vec<Camera> {
    assert_eq!(elevations.len(), cfg.n_views);
    (0..cfg.n_views)
        .map(|i| {
            let azimuth = 2.0 * PI * i as Real / cfg.n_views as Real;
            Camera::orbit(
                cfg.cam_radius,
                azimuth,
                elevations[i],
                [0.0; 3],
                cfg.cam_fov,
                cfg.img_res,
                cfg.img_res,
            )
        })
        .collect()
}

/// Train/heldout view indices: every `heldout_every`-th non-frontal view is
/// held out (0 disables the split).
pub fn view_split(n_views: usize, heldout_every: usize) -> (Vec<usize>, Vec<usize>) {
    let mut train = Vec::new();
    let mut held = Vec::new();
    for i in 0..n_views {
        if i > 0 && heldout_every > 0 && i % heldout_every == 0 {
            held.push(i);
        } else {
            train.push(i);
        }
    }
    (train, held)
}

/// Synthesize one subject (parameters, cameras, ground-truth renders).
pub fn synth_subject(cfg: &SynthConfig, id: usize) -> Subject {
    let deg = PI / 180.0;
    let params = SubjectParams::draw_for(cfg.seed, id as u64, cfg.glasses_prob);
    let elevations = SubjectParams::draw_elevations(
        cfg.seed,
        id as u64,
        cfg.n_views,
        (cfg.elev_deg.0 * deg, cfg.elev_deg.1 * deg),
    );
    let cameras = camera_ring(cfg, &elevations);
    let bbox = Aabb::unit_cube();
    let rcfg = RenderConfig {
        samples_per_ray: cfg.samples_per_ray,
        ..RenderConfig::default()
    };
    let field = SubjectField {
        params: params.clone(),
    };
    let images: Vec<Tensor> = cameras
        .iter()
        .map(|cam| render_image(&field, cam, &bbox, &rcfg))
        .collect();
    let (train_views, heldout_views) = view_split(cfg.n_views, cfg.heldout_every);
    Subject {
        id,
        params,
        data: SubjectDataset {
            name: format!("s{id:03}"),
            images,
            cameras,
            bbox,
            train_views,
            heldout_views,
        },
    }
}

/// Synthesize the whole dataset. The frontal view is index 0 for every
/// subject.
pub fn synth_dataset(cfg: &SynthConfig) -> Vec<Subject> {
    assert!(cfg.n_subjects >= 1 && cfg.n_views >= 1);
    (0..cfg.n_subjects).map(|id| synth_subject(cfg, id)).collect()
}
