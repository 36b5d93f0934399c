//! Stage drivers behind the CLI. Each stage validates the config, consumes
//! upstream artifacts (failing with the missing path if absent), writes its
//! outputs under `out_dir`, and emits a JSON report carrying the config hash
//! plus content hashes of everything read and written, so reruns with the
//! same seed reproduce reports bitwise.
//!
//! Artifact layout under `out_dir`:
//! `dataset/s<id>/v<view>.ppm`, `fits/decoder.rdck` + `fits/s<id>.tpln`,
//! `base/net.rdck` + `base/encoder.rdck` + `base/norm.json`, `sr/net.rdck`,
//! `prior/net.rdck`, `samples/g<i>.{tpln,obj}` + `samples/g<i>_v<v>.ppm`,
//! `invert/l<i>.tpln` + `invert/l<i>_v<v>.ppm`, `reports/<stage>.json`, and
//! `config.txt` with the resolved configuration.

use super::config::PipelineConfig;
use super::metrics::psnr;
use super::subjects::{self, SynthConfig};
use super::PipelineError;
use crate::denoiser::checkpoint::{load_rdck, save_rdck, TrainState};
use crate::denoiser::{
    DenoiserNet, EncoderConfig, LatentEncoder, NetConfig, NetVariant, UpConfig, UpsamplerNet,
};
use crate::diffusion::{
    sample_base_chain, sample_upsampler, AugmentParams, BaseSample, BaseTrainer, Ema, LatentPrior,
    NoiseSchedule, PatchSupervision, SrSample, SrTrainer,
};
use crate::fitting::{fit_shared_decoder, fit_subject, FitConfig, SubjectDataset};
use crate::numerics::{Real, Tensor, PI};
use crate::optim::{AdamW, ParamStore};
use crate::radiance::image::{read_ppm, write_ppm};
use crate::radiance::mesh::{extract_mesh, write_obj};
use crate::radiance::{
    bundle_for_pixels, render_image, Camera, FieldEval, RadianceDecoder, Rect, RenderConfig,
    TriPlaneField,
};
use crate::triplane::{load_tpln, save_tpln, Aabb, FourierSpec, TriPlane};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};
use sha2::{Digest, Sha256};
use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

// ---- artifact layout ----

/// Resolves every artifact path under the configured output root.
pub struct Paths {
    pub root: PathBuf,
}

impl Paths {
    pub fn new(cfg: &PipelineConfig) -> Paths {
        Paths {
            root: cfg.out_dir.clone(),
        }
    }

    pub fn config_copy(&self) -> PathBuf {
        self.root.join("config.txt")
    }
    pub fn dataset_dir(&self) -> PathBuf {
        self.root.join("dataset")
    }
    pub fn subject_dir(&self, sid: usize) -> PathBuf {
        self.dataset_dir().join(format!("s{sid:03}"))
    }
    pub fn view(&self, sid: usize, vid: usize) -> PathBuf {
        self.subject_dir(sid).join(format!("v{vid:02}.ppm"))
    }
    pub fn decoder(&self) -> PathBuf {
        self.root.join("fits").join("decoder.rdck")
    }
    pub fn plane(&self, sid: usize) -> PathBuf {
        self.root.join("fits").join(format!("s{sid:03}.tpln"))
    }
    pub fn base_net(&self) -> PathBuf {
        self.root.join("base").join("net.rdck")
    }
    pub fn base_encoder(&self) -> PathBuf {
        self.root.join("base").join("encoder.rdck")
    }
    pub fn norm(&self) -> PathBuf {
        self.root.join("base").join("norm.json")
    }
    pub fn sr_net(&self) -> PathBuf {
        self.root.join("sr").join("net.rdck")
    }
    pub fn prior_net(&self) -> PathBuf {
        self.root.join("prior").join("net.rdck")
    }
    pub fn samples_dir(&self) -> PathBuf {
        self.root.join("samples")
    }
    pub fn sample_plane(&self, i: usize) -> PathBuf {
        self.samples_dir().join(format!("g{i:02}.tpln"))
    }
    pub fn sample_view(&self, i: usize, v: usize) -> PathBuf {
        self.samples_dir().join(format!("g{i:02}_v{v:02}.ppm"))
    }
    pub fn sample_mesh(&self, i: usize) -> PathBuf {
        self.samples_dir().join(format!("g{i:02}.obj"))
    }
    pub fn invert_plane(&self, i: usize) -> PathBuf {
        self.root.join("invert").join(format!("l{i}.tpln"))
    }
    pub fn invert_view(&self, i: usize, v: usize) -> PathBuf {
        self.root.join("invert").join(format!("l{i}_v{v:02}.ppm"))
    }
    pub fn report(&self, stage: &str) -> PathBuf {
        self.root.join("reports").join(format!("{stage}.json"))
    }
}

fn ensure_parent(path: &Path) -> Result<(), PipelineError> {
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir)?;
    }
    Ok(())
}

fn require(path: PathBuf) -> Result<PathBuf, PipelineError> {
    if path.is_file() {
        Ok(path)
    } else {
        Err(PipelineError::MissingArtifact(path))
    }
}

fn rel_label(paths: &Paths, p: &Path) -> String {
    let rel = p.strip_prefix(&paths.root).unwrap_or(p);
    rel.to_string_lossy().replace('\\', "/")
}

// ---- hashing and reports ----

fn hex(bytes: &[u8]) -> String {
    let mut s = String::with_capacity(2 * bytes.len());
    for b in bytes {
        let _ = write!(s, "{b:02x}");
    }
    s
}

pub fn sha256_file(path: &Path) -> Result<String, PipelineError> {
    let p = require(path.to_path_buf())?;
    let bytes = std::fs::read(p)?;
    Ok(hex(&Sha256::digest(&bytes)))
}

fn collect_files(dir: &Path, base: &Path, out: &mut Vec<(String, PathBuf)>) -> std::io::Result<()> {
    let mut entries: Vec<_> = std::fs::read_dir(dir)?.collect::<Result<_, _>>()?;
    entries.sort_by_key(|e| e.file_name());
    for e in entries {
        let p = e.path();
        if p.is_dir() {
            collect_files(&p, base, out)?;
        } else {
            let rel = p
                .strip_prefix(base)
                .unwrap_or(&p)
                .to_string_lossy()
                .replace('\\', "/");
            out.push((rel, p));
        }
    }
    Ok(())
}

/// One digest over a whole directory: relative paths and contents, in sorted
/// order, so any byte change anywhere changes the hash.
pub fn hash_tree(dir: &Path) -> Result<String, PipelineError> {
    if !dir.is_dir() {
        return Err(PipelineError::MissingArtifact(dir.to_path_buf()));
    }
    let mut files = Vec::new();
    collect_files(dir, dir, &mut files)?;
    let mut h = Sha256::new();
    for (rel, p) in files {
        h.update(rel.as_bytes());
        h.update([0u8]);
        h.update(std::fs::read(p)?);
    }
    Ok(hex(&h.finalize()))
}

/// Per-stage JSON artifact: what ran, on what, producing what.
#[derive(Serialize)]
pub struct Report {
    pub stage: String,
    pub config_sha256: String,
    pub seed: u64,
    pub inputs: BTreeMap<String, String>,
    pub outputs: BTreeMap<String, String>,
    pub metrics: BTreeMap<String, Value>,
}

impl Report {
    fn new(stage: &str, cfg: &PipelineConfig) -> Report {
        Report {
            stage: stage.to_string(),
            config_sha256: cfg.sha256(),
            seed: cfg.seed,
            inputs: BTreeMap::new(),
            outputs: BTreeMap::new(),
            metrics: BTreeMap::new(),
        }
    }

    fn input_file(&mut self, paths: &Paths, p: &Path) -> Result<(), PipelineError> {
        let h = sha256_file(p)?;
        self.inputs.insert(rel_label(paths, p), h);
        Ok(())
    }

    fn output_file(&mut self, paths: &Paths, p: &Path) -> Result<(), PipelineError> {
        let h = sha256_file(p)?;
        self.outputs.insert(rel_label(paths, p), h);
        Ok(())
    }
}

fn write_report(path: &Path, rep: &Report) -> Result<(), PipelineError> {
    ensure_parent(path)?;
    let mut text = serde_json::to_string_pretty(rep)?;
    text.push('\n');
    std::fs::write(path, text)?;
    Ok(())
}

// ---- schedules and normalization ----

/// Build a schedule of the given family at an arbitrary length. The family's
/// reference β endpoints are scaled inversely with the length, which keeps
/// the total noise budget Σβ fixed, so shorter chains still reach (near-)pure
/// noise; at the reference length this reproduces the family preset exactly.
pub fn make_schedule(kind: &str, t: usize) -> Result<NoiseSchedule, PipelineError> {
    let (t_ref, b0, b1) = match kind {
        "base" | "latent" => (100.0, 1e-3, 0.1),
        "sr" => (50.0, 2e-3, 0.2),
        other => {
            return Err(PipelineError::Config(format!(
                "unknown schedule family '{other}' (want base|sr|latent)"
            )))
        }
    };
    let s = t_ref / t as Real;
    NoiseSchedule::linear(t, b0 * s, (b1 * s).min(0.7))
        .map_err(|e| PipelineError::Config(format!("schedule {kind} with {t} steps: {e}")))
}

/// Global scalar standardization of the rolled-out training maps. The base
/// model trains in normalized space (so x_T ~ N(0,1) matches the data
/// scale); samples are mapped back before the upsampler, which trains on
/// raw feature maps because the renderer needs the fitted feature scale.
#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
pub struct NormStats {
    pub mu: f64,
    pub sigma: f64,
}

impl NormStats {
    pub fn identity() -> NormStats {
        NormStats { mu: 0.0, sigma: 1.0 }
    }

    pub fn fit(maps: &[Tensor]) -> NormStats {
        let mut n = 0usize;
        let mut sum = 0.0f64;
        for m in maps {
            for &v in m.data() {
                sum += v as f64;
                n += 1;
            }
        }
        let n = n.max(1) as f64;
        let mu = sum / n;
        let mut ss = 0.0f64;
        for m in maps {
            for &v in m.data() {
                let d = v as f64 - mu;
                ss += d * d;
            }
        }
        let sigma = (ss / n).sqrt().max(1e-6);
        NormStats { mu, sigma }
    }

    pub fn normalize(&self, t: &Tensor) -> Tensor {
        let data = t
            .data()
            .iter()
            .map(|&v| ((v as f64 - self.mu) / self.sigma) as Real)
            .collect();
        Tensor::from_vec(t.shape(), data).expect("same shape")
    }

    pub fn denorm(&self, t: &Tensor) -> Tensor {
        let data = t
            .data()
            .iter()
            .map(|&v| (v as f64 * self.sigma + self.mu) as Real)
            .collect();
        Tensor::from_vec(t.shape(), data).expect("same shape")
    }

    pub fn save(&self, path: &Path) -> Result<(), PipelineError> {
        ensure_parent(path)?;
        let mut text = serde_json::to_string_pretty(self)?;
        text.push('\n');
        std::fs::write(path, text)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<NormStats, PipelineError> {
        let p = require(path.to_path_buf())?;
        let text = std::fs::read_to_string(p)?;
        Ok(serde_json::from_str(&text)?)
    }
}

// ---- config plumbing ----

fn synth_cfg(cfg: &PipelineConfig) -> SynthConfig {
    SynthConfig {
        seed: cfg.seed,
        n_subjects: cfg.subjects,
        n_views: cfg.views,
        img_res: cfg.img_res,
        cam_radius: cfg.cam_radius,
        cam_fov: cfg.cam_fov,
        elev_deg: (cfg.elev_min_deg, cfg.elev_max_deg),
        glasses_prob: cfg.glasses_prob,
        heldout_every: cfg.heldout_every,
        samples_per_ray: cfg.gt_samples,
    }
}

fn fit_config(cfg: &PipelineConfig) -> FitConfig {
    FitConfig {
        iterations: cfg.fit_iters,
        lr_planes: cfg.fit_lr_planes,
        lr_decoder: cfg.fit_lr_decoder,
        w_sparse: cfg.fit_w_sparse,
        w_smooth: cfg.fit_w_smooth,
        w_dist: cfg.fit_w_dist,
        rescale_prob: cfg.fit_rescale_prob,
        rays_per_step: cfg.fit_rays,
        seed: cfg.seed,
        plane_res: cfg.fit_res,
        plane_channels: cfg.fit_channels,
        samples_per_ray: cfg.fit_samples,
        decoder_hidden: cfg.fit_decoder_hidden,
        fourier_bands: cfg.fit_fourier_bands,
        ..FitConfig::default()
    }
}

fn base_net_config(cfg: &PipelineConfig) -> Result<NetConfig, PipelineError> {
    let variant = NetVariant::parse(&cfg.base_variant).ok_or_else(|| {
        PipelineError::Config(format!("base_variant '{}'", cfg.base_variant))
    })?;
    let mut nc = NetConfig::base(cfg.fit_channels, cfg.base_t);
    nc.width = cfg.base_width;
    nc.mults = cfg.base_mults.clone();
    nc.groups = cfg.base_groups;
    nc.z_dim = cfg.base_z;
    Ok(nc.with_variant(variant))
}

fn encoder_config(cfg: &PipelineConfig) -> EncoderConfig {
    EncoderConfig {
        in_res: cfg.img_res,
        z_dim: cfg.base_z,
        width: cfg.enc_width,
    }
}

fn up_config(cfg: &PipelineConfig) -> UpConfig {
    let mut u = UpConfig::base(cfg.fit_channels, cfg.sr_t);
    u.width = cfg.sr_width;
    u.groups = cfg.sr_groups;
    u
}

/// Rebuild one subject's dataset from the disk artifacts: cameras and the
/// view split are re-derived from the seed, images come from the PPMs.
fn load_subject(
    cfg: &PipelineConfig,
    paths: &Paths,
    id: usize,
) -> Result<SubjectDataset, PipelineError> {
    let scfg = synth_cfg(cfg);
    let deg = PI / 180.0;
    let elev = subjects::SubjectParams::draw_elevations(
        cfg.seed,
        id as u64,
        cfg.views,
        (cfg.elev_min_deg * deg, cfg.elev_max_deg * deg),
    );
    let cameras = subjects::camera_ring(&scfg, &elev);
    let (train_views, heldout_views) = subjects::view_split(cfg.views, cfg.heldout_every);
    let mut images = Vec::with_capacity(cfg.views);
    for v in 0..cfg.views {
        let p = require(paths.view(id, v))?;
        images.push(read_ppm(&p)?);
    }
    Ok(SubjectDataset {
        name: format!("s{id:03}"),
        images,
        cameras,
        bbox: Aabb::unit_cube(),
        train_views,
        heldout_views,
    })
}

// ---- checkpoint plumbing ----

fn train_state_of(opt: &AdamW, ema: &Ema, steps: usize) -> TrainState {
    let mut m = BTreeMap::new();
    let mut v = BTreeMap::new();
    for (k, mm, vv) in opt.moments() {
        m.insert(k.clone(), mm.clone());
        v.insert(k.clone(), vv.clone());
    }
    let ema_tbl: BTreeMap<String, Tensor> = ema
        .shadow()
        .iter()
        .map(|(k, t)| (k.clone(), t.clone()))
        .collect();
    TrainState {
        step: steps as u64,
        opt_step: opt.step_count(),
        opt_m: m,
        opt_v: v,
        ema: ema_tbl,
    }
}

/// Load checkpoint weights, preferring the EMA shadow when asked and present.
fn load_store(path: &Path, use_ema: bool) -> Result<ParamStore, PipelineError> {
    let p = require(path.to_path_buf())?;
    let (store, state) = load_rdck(&p)?;
    if use_ema {
        if let Some(st) = state {
            if !st.ema.is_empty() {
                let mut s = ParamStore::new();
                for (k, t) in st.ema {
                    s.insert(k, t);
                }
                return Ok(s);
            }
        }
    }
    Ok(store)
}

/// A checkpoint is only usable if it matches the configured architecture:
/// same parameter names, same shapes.
fn verify_compatible(
    what: &str,
    expected: &ParamStore,
    got: &ParamStore,
) -> Result<(), PipelineError> {
    let exp: BTreeMap<&String, &[usize]> = expected.iter().map(|(k, t)| (k, t.shape())).collect();
    let gm: BTreeMap<&String, &[usize]> = got.iter().map(|(k, t)| (k, t.shape())).collect();
    if exp.len() != gm.len() {
        return Err(PipelineError::Numerical(format!(
            "{what} checkpoint has {} parameters, the configured architecture has {}",
            gm.len(),
            exp.len()
        )));
    }
    for (k, s) in &exp {
        match gm.get(k) {
            Some(s2) if s2 == s => {}
            Some(s2) => {
                return Err(PipelineError::Numerical(format!(
                    "{what} checkpoint parameter {k} has shape {s2:?}, expected {s:?}"
                )))
            }
            None => {
                return Err(PipelineError::Numerical(format!(
                    "{what} checkpoint is missing parameter {k}"
                )))
            }
        }
    }
    Ok(())
}

fn param_count(store: &ParamStore) -> usize {
    store.iter().map(|(_, t)| t.len()).sum()
}

fn save_decoder(dec: &RadianceDecoder, path: &Path) -> Result<(), PipelineError> {
    let mut store = ParamStore::new();
    dec.insert_params(&mut store, "dec");
    ensure_parent(path)?;
    save_rdck(path, &store, None)?;
    Ok(())
}

fn load_decoder(cfg: &PipelineConfig, path: PathBuf) -> Result<RadianceDecoder, PipelineError> {
    let p = require(path)?;
    let (store, _) = load_rdck(&p)?;
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let mut dec = RadianceDecoder::new(
        cfg.fit_channels,
        FourierSpec {
            bands: cfg.fit_fourier_bands,
        },
        cfg.fit_decoder_hidden,
        &mut rng,
    );
    let mut fresh = ParamStore::new();
    dec.insert_params(&mut fresh, "dec");
    verify_compatible("decoder", &fresh, &store)?;
    dec.load_params(&store, "dec");
    Ok(dec)
}

// ---- small numeric helpers ----

fn mean(xs: &[Real]) -> Real {
    if xs.is_empty() {
        0.0
    } else {
        xs.iter().sum::<Real>() / xs.len() as Real
    }
}

fn decimate(xs: &[Real], target: usize) -> Vec<Real> {
    if xs.len() <= target {
        return xs.to_vec();
    }
    let stride = xs.len().div_ceil(target);
    xs.iter().copied().step_by(stride).collect()
}

fn orbit_cameras(n: usize, radius: Real, fov: Real, res: usize) -> Vec<Camera> {
    // slight upward elevation so renders show the hair cap
    (0..n)
        .map(|i| {
            Camera::orbit(
                radius,
                2.0 * PI * i as Real / n as Real,
                0.15,
                [0.0; 3],
                fov,
                res,
                res,
            )
        })
        .collect()
}

/// Mean density strictly inside and outside the r=0.5 sphere, sampled on a
/// grid of cell centers over the unit cube (the floating-artifact check).
fn density_in_out(field: &dyn FieldEval, g: usize) -> (Real, Real) {
    let mut pts = Vec::with_capacity(g * g * g);
    let f = |k: usize| -0.5 + (k as Real + 0.5) / g as Real;
    for x in 0..g {
        for y in 0..g {
            for z in 0..g {
                pts.push([f(x), f(y), f(z)]);
            }
        }
    }
    let dirs = vec![[1.0, 0.0, 0.0]; pts.len()];
    let (sig, _) = field.eval(&pts, &dirs);
    let (mut si, mut ni, mut so, mut no) = (0.0, 0usize, 0.0, 0usize);
    for (p, s) in pts.iter().zip(&sig) {
        let r2 = p[0] * p[0] + p[1] * p[1] + p[2] * p[2];
        if r2 <= 0.25 {
            si += s;
            ni += 1;
        } else {
            so += s;
            no += 1;
        }
    }
    (si / ni.max(1) as Real, so / no.max(1) as Real)
}

/// Density sampled on an inclusive `g`³ lattice over the box, laid out for
/// mesh extraction.
fn density_grid(field: &dyn FieldEval, bbox: &Aabb, g: usize) -> Tensor {
    let mut pts = Vec::with_capacity(g * g * g);
    let coord = |k: usize, axis: usize| {
        bbox.min[axis] + (bbox.max[axis] - bbox.min[axis]) * k as Real / (g - 1) as Real
    };
    for x in 0..g {
        for y in 0..g {
            for z in 0..g {
                pts.push([coord(x, 0), coord(y, 1), coord(z, 2)]);
            }
        }
    }
    let dirs = vec![[1.0, 0.0, 0.0]; pts.len()];
    let (sig, _) = field.eval(&pts, &dirs);
    Tensor::from_vec(&[g, g, g], sig).expect("grid shape")
}

// ---- stage drivers ----

/// Run one stage end to end and return the path of its JSON report.
pub fn run_stage(stage: &str, cfg: &PipelineConfig) -> Result<PathBuf, PipelineError> {
    cfg.validate()?;
    let paths = Paths::new(cfg);
    std::fs::create_dir_all(&paths.root)?;
    std::fs::write(paths.config_copy(), cfg.to_text())?;
    let report = match stage {
        "synth" => stage_synth(cfg, &paths)?,
        "fit" => stage_fit(cfg, &paths)?,
        "train-base" => stage_train_base(cfg, &paths)?,
        "train-sr" => stage_train_sr(cfg, &paths)?,
        "train-latent-prior" => stage_train_prior(cfg, &paths)?,
        "sample" => stage_sample(cfg, &paths)?,
        "invert" => stage_invert(cfg, &paths)?,
        "eval" => stage_eval(cfg, &paths)?,
        other => {
            return Err(PipelineError::Config(format!("unknown stage '{other}'")));
        }
    };
    let rp = paths.report(stage);
    write_report(&rp, &report)?;
    Ok(rp)
}

fn stage_synth(cfg: &PipelineConfig, paths: &Paths) -> Result<Report, PipelineError> {
    let subs = subjects::synth_dataset(&synth_cfg(cfg));
    for s in &subs {
        for (v, img) in s.data.images.iter().enumerate() {
            let p = paths.view(s.id, v);
            ensure_parent(&p)?;
            write_ppm(img, &p)?;
        }
    }
    let mut rep = Report::new("synth", cfg);
    rep.outputs
        .insert("dataset".into(), hash_tree(&paths.dataset_dir())?);
    rep.metrics.insert("subjects".into(), json!(cfg.subjects));
    rep.metrics.insert("views".into(), json!(cfg.views));
    rep.metrics.insert("img_res".into(), json!(cfg.img_res));
    let params: Vec<Value> = subs
        .iter()
        .map(|s| {
            let p = &s.params;
            json!({
                "id": s.id,
                "head_axes": p.head_axes,
                "skin": p.skin,
                "hair": p.hair,
                "hair_cap": p.hair_cap,
                "hair_depth": p.hair_depth,
                "nose_size": p.nose_size,
                "glasses": p.glasses.map(|g| json!({
                    "radius": g.radius, "tube": g.tube, "gray": g.gray,
                })),
            })
        })
        .collect();
    rep.metrics
        .insert("subject_params".into(), Value::Array(params));
    Ok(rep)
}

fn stage_fit(cfg: &PipelineConfig, paths: &Paths) -> Result<Report, PipelineError> {
    let mut rep = Report::new("fit", cfg);
    rep.inputs
        .insert("dataset".into(), hash_tree(&paths.dataset_dir())?);
    let datasets: Vec<SubjectDataset> = (0..cfg.subjects)
        .map(|i| load_subject(cfg, paths, i))
        .collect::<Result<_, _>>()?;
    let fc = fit_config(cfg);

    let shared = fit_shared_decoder(&datasets[..cfg.fit_shared], &fc)?;
    let decoder = shared.decoder;
    let mut planes = shared.planes;
    let shared_final = shared.losses.last().copied().unwrap_or(0.0);
    let mut subject_final = Vec::new();
    for ds in datasets.iter().skip(cfg.fit_shared) {
        let out = fit_subject(ds, &decoder, &fc)?;
        subject_final.push(out.losses.last().copied().unwrap_or(0.0));
        planes.extend(out.planes);
    }

    save_decoder(&decoder, &paths.decoder())?;
    rep.output_file(paths, &paths.decoder())?;
    for (i, tp) in planes.iter().enumerate() {
        let p = paths.plane(i);
        ensure_parent(&p)?;
        save_tpln(tp, &p)?;
        rep.output_file(paths, &p)?;
    }

    let rcfg = RenderConfig {
        samples_per_ray: cfg.fit_samples,
        ..RenderConfig::default()
    };
    let mut held: Vec<Value> = Vec::new();
    let mut held_all = Vec::new();
    for (i, ds) in datasets.iter().enumerate() {
        let field = TriPlaneField {
            tp: &planes[i],
            dec: &decoder,
        };
        let mut vals = Vec::new();
        for &v in &ds.heldout_views {
            let img = render_image(&field, &ds.cameras[v], &ds.bbox, &rcfg);
            vals.push(psnr(&img, &ds.images[v])?);
        }
        if vals.is_empty() {
            held.push(Value::Null);
        } else {
            let m = mean(&vals);
            held_all.push(m);
            held.push(json!(m));
        }
    }
    rep.metrics
        .insert("shared_final_loss".into(), json!(shared_final));
    rep.metrics
        .insert("subject_final_loss".into(), json!(subject_final));
    rep.metrics.insert("heldout_psnr".into(), Value::Array(held));
    rep.metrics
        .insert("heldout_psnr_mean".into(), json!(mean(&held_all)));
    Ok(rep)
}

fn stage_train_base(cfg: &PipelineConfig, paths: &Paths) -> Result<Report, PipelineError> {
    let mut rep = Report::new("train-base", cfg);
    let mut maps = Vec::with_capacity(cfg.subjects);
    for i in 0..cfg.subjects {
        let p = require(paths.plane(i))?;
        rep.input_file(paths, &p)?;
        let tp = load_tpln(&p)?;
        maps.push(tp.rescale(cfg.base_res).roll_out());
    }
    let norm = NormStats::fit(&maps);
    let maps: Vec<Tensor> = maps.iter().map(|m| norm.normalize(m)).collect();
    norm.save(&paths.norm())?;

    let nc = base_net_config(cfg)?;
    let latent = nc.z_dim > 0;
    let mut frontals = Vec::new();
    if latent {
        for i in 0..cfg.subjects {
            let p = require(paths.view(i, 0))?;
            rep.input_file(paths, &p)?;
            frontals.push(read_ppm(&p)?);
        }
    }

    let net = DenoiserNet::new(nc, cfg.seed ^ 0xBA5E);
    let encoder = latent.then(|| LatentEncoder::new(encoder_config(cfg), cfg.seed ^ 0xE7C0));
    let sched = make_schedule("base", cfg.base_t)?;
    let mut tr = BaseTrainer::new(
        net,
        encoder,
        sched,
        cfg.base_lr,
        cfg.base_ema,
        cfg.base_pdrop,
        cfg.seed,
    );
    let n = maps.len();
    let mut losses = Vec::with_capacity(cfg.base_steps);
    for step in 0..cfg.base_steps {
        let batch: Vec<BaseSample> = (0..cfg.base_batch)
            .map(|j| {
                let idx = (step * cfg.base_batch + j) % n;
                BaseSample {
                    y0: &maps[idx],
                    view: if latent { Some(&frontals[idx]) } else { None },
                }
            })
            .collect();
        losses.push(tr.step(&batch)?);
    }

    ensure_parent(&paths.base_net())?;
    save_rdck(
        &paths.base_net(),
        &tr.net.params,
        Some(&train_state_of(&tr.opt_net, &tr.ema_net, cfg.base_steps)),
    )?;
    rep.output_file(paths, &paths.base_net())?;
    if let Some(enc) = &tr.encoder {
        let st = train_state_of(
            &tr.opt_enc,
            tr.ema_enc.as_ref().expect("encoder implies its ema"),
            cfg.base_steps,
        );
        save_rdck(&paths.base_encoder(), &enc.params, Some(&st))?;
        rep.output_file(paths, &paths.base_encoder())?;
    }
    rep.output_file(paths, &paths.norm())?;

    let tail = losses.len().saturating_sub(10);
    rep.metrics
        .insert("loss_curve".into(), json!(decimate(&losses, 64)));
    rep.metrics
        .insert("final_loss".into(), json!(mean(&losses[tail..])));
    rep.metrics
        .insert("net_params".into(), json!(param_count(&tr.net.params)));
    rep.metrics.insert("norm_mu".into(), json!(norm.mu));
    rep.metrics.insert("norm_sigma".into(), json!(norm.sigma));
    Ok(rep)
}

fn stage_train_sr(cfg: &PipelineConfig, paths: &Paths) -> Result<Report, PipelineError> {
    let mut rep = Report::new("train-sr", cfg);
    let mut maps_hr = Vec::with_capacity(cfg.subjects);
    for i in 0..cfg.subjects {
        let p = require(paths.plane(i))?;
        rep.input_file(paths, &p)?;
        maps_hr.push(load_tpln(&p)?.roll_out());
    }

    let aug = AugmentParams {
        lr_res: cfg.base_res,
        factors: (1..=cfg.sr_factor_max)
            .filter(|f| cfg.base_res % f == 0)
            .collect(),
        blur_sigma: (0.0, cfg.sr_blur_max),
        noise_std: (0.0, cfg.sr_noise_max),
    };
    let sched = make_schedule("sr", cfg.sr_t)?;
    let net = UpsamplerNet::new(up_config(cfg), cfg.seed ^ 0x5A00);
    let mut tr = SrTrainer::new(
        net,
        sched,
        aug,
        cfg.sr_lr,
        cfg.sr_ema,
        cfg.sr_lambda_tri,
        cfg.sr_lambda_img,
        cfg.seed ^ 1,
    );

    let with_img = cfg.sr_lambda_img > 0.0;
    let (datasets, decoder) = if with_img {
        rep.inputs
            .insert("dataset".into(), hash_tree(&paths.dataset_dir())?);
        rep.input_file(paths, &paths.decoder())?;
        let ds: Vec<SubjectDataset> = (0..cfg.subjects)
            .map(|i| load_subject(cfg, paths, i))
            .collect::<Result<_, _>>()?;
        (ds, Some(load_decoder(cfg, paths.decoder())?))
    } else {
        (Vec::new(), None)
    };
    let mut prng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x50A7C4);
    let rcfg_patch = RenderConfig {
        samples_per_ray: cfg.sr_patch_samples,
        ..RenderConfig::default()
    };
    // Supervision needs every ray of the patch to hit the box. The box is
    // convex, so its projected silhouette is too: the four corner pixels
    // hitting implies the whole rect does.
    let patch_fits = |cam: &Camera, x0: usize, y0: usize| -> bool {
        let p = cfg.sr_patch - 1;
        let corners = [(x0, y0), (x0 + p, y0), (x0, y0 + p), (x0 + p, y0 + p)];
        let b = bundle_for_pixels(cam, &Aabb::unit_cube(), &rcfg_patch, &corners);
        b.slots.iter().all(|s| s.is_some())
    };

    let n = maps_hr.len();
    let mut losses = Vec::with_capacity(cfg.sr_steps);
    for step in 0..cfg.sr_steps {
        let picks: Vec<(usize, usize, usize, usize)> = (0..cfg.sr_batch)
            .map(|j| {
                let idx = (step * cfg.sr_batch + j) % n;
                if with_img {
                    let ds = &datasets[idx];
                    let v = ds.train_views[prng.gen_range(0..ds.train_views.len())];
                    let hi = cfg.img_res - cfg.sr_patch;
                    let mut at = (hi / 2, hi / 2);
                    for _ in 0..128 {
                        let x0 = prng.gen_range(0..=hi);
                        let y0 = prng.gen_range(0..=hi);
                        if patch_fits(&ds.cameras[v], x0, y0) {
                            at = (x0, y0);
                            break;
                        }
                    }
                    (idx, v, at.0, at.1)
                } else {
                    (idx, 0, 0, 0)
                }
            })
            .collect();
        let batch: Vec<SrSample> = picks
            .iter()
            .map(|&(idx, v, x0, y0)| SrSample {
                y_hr: &maps_hr[idx],
                bbox: Aabb::unit_cube(),
                patch: decoder.as_ref().map(|dec| PatchSupervision {
                    dec,
                    cam: &datasets[idx].cameras[v],
                    rect: Rect {
                        x0,
                        y0,
                        w: cfg.sr_patch,
                        h: cfg.sr_patch,
                    },
                    gt: &datasets[idx].images[v],
                    bbox: Aabb::unit_cube(),
                    render: rcfg_patch,
                }),
            })
            .collect();
        losses.push(tr.step(&batch)?);
    }

    ensure_parent(&paths.sr_net())?;
    save_rdck(
        &paths.sr_net(),
        &tr.net.params,
        Some(&train_state_of(&tr.opt, &tr.ema, cfg.sr_steps)),
    )?;
    rep.output_file(paths, &paths.sr_net())?;
    let tail = losses.len().saturating_sub(10);
    rep.metrics
        .insert("loss_curve".into(), json!(decimate(&losses, 64)));
    rep.metrics
        .insert("final_loss".into(), json!(mean(&losses[tail..])));
    rep.metrics
        .insert("net_params".into(), json!(param_count(&tr.net.params)));
    Ok(rep)
}

fn stage_train_prior(cfg: &PipelineConfig, paths: &Paths) -> Result<Report, PipelineError> {
    if !cfg.variant_has_latent() {
        return Err(PipelineError::Config(
            "the latent prior needs a latent-conditioned base variant".into(),
        ));
    }
    let mut rep = Report::new("train-latent-prior", cfg);
    let encp = paths.base_encoder();
    let store = load_store(&encp, cfg.use_ema)?;
    rep.input_file(paths, &encp)?;
    let mut enc = LatentEncoder::new(encoder_config(cfg), 0);
    verify_compatible("encoder", &enc.params, &store)?;
    enc.params = store;

    let mut zs = Vec::with_capacity(cfg.subjects);
    for i in 0..cfg.subjects {
        let p = require(paths.view(i, 0))?;
        rep.input_file(paths, &p)?;
        zs.push(enc.encode(&read_ppm(&p)?)?);
    }

    let sched = make_schedule("latent", cfg.prior_t)?;
    let mut prior = LatentPrior::new(cfg.base_z, cfg.prior_hidden, sched, cfg.seed ^ 0x11);
    let mut opt = AdamW::new(cfg.prior_lr);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x2211);
    let mut losses = Vec::with_capacity(cfg.prior_steps);
    for step in 0..cfg.prior_steps {
        let batch: Vec<Tensor> = (0..cfg.prior_batch)
            .map(|j| zs[(step * cfg.prior_batch + j) % zs.len()].clone())
            .collect();
        losses.push(prior.train_step(&batch, &mut opt, &mut rng)?);
    }

    ensure_parent(&paths.prior_net())?;
    save_rdck(&paths.prior_net(), &prior.params, None)?;
    rep.output_file(paths, &paths.prior_net())?;
    let tail = losses.len().saturating_sub(10);
    rep.metrics
        .insert("loss_curve".into(), json!(decimate(&losses, 64)));
    rep.metrics
        .insert("final_loss".into(), json!(mean(&losses[tail..])));
    Ok(rep)
}

// ---- sampling ----

/// Everything needed to sample, invert and render: the trained models, the
/// normalization, and the two reverse-chain schedules.
pub struct SamplerKit {
    pub net: DenoiserNet,
    pub encoder: Option<LatentEncoder>,
    pub sr: Option<UpsamplerNet>,
    pub prior: Option<LatentPrior>,
    pub decoder: RadianceDecoder,
    pub norm: NormStats,
    pub base_sched: NoiseSchedule,
    pub sr_sched: NoiseSchedule,
    pub channels: usize,
    pub base_res: usize,
    pub hr_res: usize,
}

impl SamplerKit {
    /// Load all artifacts the config points at. The encoder is optional and
    /// only loaded when present; the upsampler and prior follow the
    /// `sample_sr` / `sample_prior` toggles.
    pub fn load(cfg: &PipelineConfig, paths: &Paths) -> Result<SamplerKit, PipelineError> {
        let mut net = DenoiserNet::new(base_net_config(cfg)?, 0);
        let store = load_store(&paths.base_net(), cfg.use_ema)?;
        verify_compatible("base net", &net.params, &store)?;
        net.params = store;

        let encoder = if net.cfg.z_dim > 0 && paths.base_encoder().is_file() {
            let st = load_store(&paths.base_encoder(), cfg.use_ema)?;
            let mut e = LatentEncoder::new(encoder_config(cfg), 0);
            verify_compatible("encoder", &e.params, &st)?;
            e.params = st;
            Some(e)
        } else {
            None
        };

        let sr = if cfg.sample_sr {
            let st = load_store(&paths.sr_net(), cfg.use_ema)?;
            let mut u = UpsamplerNet::new(up_config(cfg), 0);
            verify_compatible("upsampler", &u.params, &st)?;
            u.params = st;
            Some(u)
        } else {
            None
        };

        let prior = if net.cfg.z_dim > 0 && cfg.sample_prior {
            let (st, _) = load_rdck(&require(paths.prior_net())?)?;
            let mut p = LatentPrior::new(
                cfg.base_z,
                cfg.prior_hidden,
                make_schedule("latent", cfg.prior_t)?,
                0,
            );
            verify_compatible("latent prior", &p.params, &st)?;
            p.params = st;
            Some(p)
        } else {
            None
        };

        let decoder = load_decoder(cfg, paths.decoder())?;
        let norm = NormStats::load(&paths.norm())?;
        let steps = if cfg.sample_steps > 0 {
            cfg.sample_steps
        } else {
            cfg.base_t
        };
        Ok(SamplerKit {
            net,
            encoder,
            sr,
            prior,
            decoder,
            norm,
            base_sched: make_schedule(&cfg.schedule, steps)?,
            sr_sched: make_schedule("sr", cfg.sr_t)?,
            channels: cfg.fit_channels,
            base_res: cfg.base_res,
            hr_res: cfg.fit_res,
        })
    }

    /// Draw a latent from the prior, if one is loaded.
    pub fn draw_latent(&self, seed: u64, chain: u64) -> Result<Option<Tensor>, PipelineError> {
        match &self.prior {
            Some(p) => Ok(Some(sample_base_chain(
                p,
                &[p.dim],
                None,
                1.0,
                &p.sched,
                seed,
                chain,
            )?)),
            None => Ok(None),
        }
    }

    /// Full generation: base reverse chain (normalized space), de-normalize,
    /// then the cascaded upsampler when loaded. Deterministic per
    /// (seed, chain).
    pub fn generate(
        &self,
        z: Option<&Tensor>,
        lambda: Real,
        seed: u64,
        chain: u64,
    ) -> Result<TriPlane, PipelineError> {
        let shape = [self.base_res, 3 * self.base_res, self.channels];
        let y = sample_base_chain(&self.net, &shape, z, lambda, &self.base_sched, seed, chain)?;
        let y = self.norm.denorm(&y);
        let map = match &self.sr {
            Some(up) => sample_upsampler(
                up,
                &y,
                self.hr_res,
                &self.sr_sched,
                seed.wrapping_add(0x5352).wrapping_add(chain),
                true,
            )?,
            None => y,
        };
        Ok(TriPlane::roll_in(&map, Aabb::unit_cube())?)
    }
}

fn kit_input_hashes(
    cfg: &PipelineConfig,
    paths: &Paths,
    rep: &mut Report,
) -> Result<(), PipelineError> {
    rep.input_file(paths, &paths.base_net())?;
    rep.input_file(paths, &paths.norm())?;
    rep.input_file(paths, &paths.decoder())?;
    if paths.base_encoder().is_file() {
        rep.input_file(paths, &paths.base_encoder())?;
    }
    if cfg.sample_sr {
        rep.input_file(paths, &paths.sr_net())?;
    }
    if cfg.sample_prior && paths.prior_net().is_file() {
        rep.input_file(paths, &paths.prior_net())?;
    }
    Ok(())
}

fn stage_sample(cfg: &PipelineConfig, paths: &Paths) -> Result<Report, PipelineError> {
    let kit = SamplerKit::load(cfg, paths)?;
    let mut rep = Report::new("sample", cfg);
    kit_input_hashes(cfg, paths, &mut rep)?;

    let cams = orbit_cameras(cfg.render_views, cfg.cam_radius, cfg.cam_fov, cfg.render_res);
    let rcfg = RenderConfig {
        samples_per_ray: cfg.render_samples,
        ..RenderConfig::default()
    };
    let mut stats = Vec::with_capacity(cfg.sample_count);
    for i in 0..cfg.sample_count {
        let z = kit.draw_latent(cfg.seed, 0x1000 + i as u64)?;
        let tp = kit.generate(z.as_ref(), cfg.cfg_scale, cfg.seed, i as u64)?;
        let pp = paths.sample_plane(i);
        ensure_parent(&pp)?;
        save_tpln(&tp, &pp)?;

        let field = TriPlaneField {
            tp: &tp,
            dec: &kit.decoder,
        };
        let mut pmin = Real::INFINITY;
        let mut pmax = Real::NEG_INFINITY;
        for (v, cam) in cams.iter().enumerate() {
            let img = render_image(&field, cam, &tp.bbox, &rcfg);
            for &x in img.data() {
                if !x.is_finite() {
                    return Err(PipelineError::Numerical(format!(
                        "sample {i} view {v} produced a non-finite pixel"
                    )));
                }
                pmin = pmin.min(x);
                pmax = pmax.max(x);
            }
            write_ppm(&img, &paths.sample_view(i, v))?;
        }

        let (inside, outside) = density_in_out(&field, 24);
        let mut entry = json!({
            "id": i,
            "pixel_min": pmin,
            "pixel_max": pmax,
            "density_inside": inside,
            "density_outside": outside,
            "outside_inside_ratio": outside / inside.max(1e-12),
        });
        if cfg.mesh_res > 0 {
            let grid = density_grid(&field, &tp.bbox, cfg.mesh_res);
            let mesh = extract_mesh(&grid, tp.bbox, cfg.mesh_iso);
            write_obj(&mesh, &paths.sample_mesh(i))?;
            entry["mesh_vertices"] = json!(mesh.vertices.len());
            entry["mesh_faces"] = json!(mesh.faces.len());
        }
        stats.push(entry);
    }
    rep.outputs
        .insert("samples".into(), hash_tree(&paths.samples_dir())?);
    rep.metrics.insert("samples".into(), Value::Array(stats));
    rep.metrics
        .insert("steps".into(), json!(kit.base_sched.t_max()));
    rep.metrics.insert("cfg_scale".into(), json!(cfg.cfg_scale));
    rep.metrics.insert("schedule".into(), json!(cfg.schedule));
    rep.metrics.insert("use_ema".into(), json!(cfg.use_ema));
    Ok(rep)
}

/// One inverted generation: planes plus renders from the given cameras, with
/// per-view PSNR when ground truth is supplied.
pub struct Inversion {
    pub plane: TriPlane,
    pub renders: Vec<Tensor>,
    pub view_psnr: Vec<Real>,
}

/// Condition the base model on a portrait through the latent encoder, run
/// the cascade, and render.
pub fn invert(
    kit: &SamplerKit,
    portrait: &Tensor,
    lambda: Real,
    seed: u64,
    chain: u64,
    cams: &[Camera],
    gt: Option<&[Tensor]>,
    rcfg: &RenderConfig,
) -> Result<Inversion, PipelineError> {
    let enc = kit.encoder.as_ref().ok_or_else(|| {
        PipelineError::Config("inversion needs a latent encoder checkpoint".into())
    })?;
    let z = enc.encode(portrait)?;
    let tp = kit.generate(Some(&z), lambda, seed, chain)?;
    let field = TriPlaneField {
        tp: &tp,
        dec: &kit.decoder,
    };
    let renders: Vec<Tensor> = cams
        .iter()
        .map(|c| render_image(&field, c, &tp.bbox, rcfg))
        .collect();
    let view_psnr = match gt {
        Some(gs) => renders
            .iter()
            .zip(gs)
            .map(|(r, g)| psnr(r, g))
            .collect::<Result<_, _>>()?,
        None => Vec::new(),
    };
    Ok(Inversion {
        plane: tp,
        renders,
        view_psnr,
    })
}

fn stage_invert(cfg: &PipelineConfig, paths: &Paths) -> Result<Report, PipelineError> {
    let kit = SamplerKit::load(cfg, paths)?;
    let mut rep = Report::new("invert", cfg);
    kit_input_hashes(cfg, paths, &mut rep)?;
    let ds = load_subject(cfg, paths, cfg.invert_subject)?;
    rep.input_file(paths, &paths.view(cfg.invert_subject, 0))?;

    let rcfg = RenderConfig {
        samples_per_ray: cfg.render_samples,
        ..RenderConfig::default()
    };
    let mut table = Vec::new();
    for (idx, &lam) in cfg.invert_lambdas.iter().enumerate() {
        let inv = invert(
            &kit,
            &ds.images[0],
            lam,
            cfg.seed,
            0x4000 + idx as u64,
            &ds.cameras,
            Some(&ds.images),
            &rcfg,
        )?;
        let pp = paths.invert_plane(idx);
        ensure_parent(&pp)?;
        save_tpln(&inv.plane, &pp)?;
        rep.output_file(paths, &pp)?;
        for (v, img) in inv.renders.iter().enumerate() {
            write_ppm(img, &paths.invert_view(idx, v))?;
        }
        table.push(json!({
            "lambda": lam,
            "orbit_psnr": mean(&inv.view_psnr),
            "view_psnr": inv.view_psnr,
        }));
    }
    rep.metrics.insert("subject".into(), json!(cfg.invert_subject));
    rep.metrics.insert("cfg_table".into(), Value::Array(table));
    Ok(rep)
}

/// Latent interpolation under shared reverse-chain noise: all members use
/// the same (seed, chain), so the endpoints are bitwise the unmixed samples
/// and only the conditioning varies along the strip.
pub struct Interpolation {
    pub planes: Vec<TriPlane>,
    pub frontals: Vec<Tensor>,
}

pub fn interpolate_latents(
    kit: &SamplerKit,
    z_a: &Tensor,
    z_b: &Tensor,
    k: usize,
    lambda: Real,
    seed: u64,
    cam: &Camera,
    rcfg: &RenderConfig,
) -> Result<Interpolation, PipelineError> {
    if z_a.shape() != z_b.shape() {
        return Err(PipelineError::Numerical(format!(
            "latent shapes differ: {:?} vs {:?}",
            z_a.shape(),
            z_b.shape()
        )));
    }
    let mut planes = Vec::with_capacity(k + 2);
    let mut frontals = Vec::with_capacity(k + 2);
    for i in 0..k + 2 {
        let z = if i == 0 {
            z_a.clone()
        } else if i == k + 1 {
            z_b.clone()
        } else {
            let w = i as Real / (k + 1) as Real;
            let data = z_a
                .data()
                .iter()
                .zip(z_b.data())
                .map(|(&a, &b)| a * (1.0 - w) + b * w)
                .collect();
            Tensor::from_vec(z_a.shape(), data)?
        };
        let tp = kit.generate(Some(&z), lambda, seed, 0)?;
        let field = TriPlaneField {
            tp: &tp,
            dec: &kit.decoder,
        };
        frontals.push(render_image(&field, cam, &tp.bbox, rcfg));
        planes.push(tp);
    }
    Ok(Interpolation { planes, frontals })
}

// ---- evaluation sweeps ----

/// Held-out PSNR versus tri-plane resolution and versus training-view count.
pub struct SweepCurves {
    pub by_resolution: Vec<(usize, Real)>,
    pub by_views: Vec<(usize, Real)>,
}

fn subsample_views(train: &[usize], v: usize) -> Vec<usize> {
    if v >= train.len() {
        return train.to_vec();
    }
    if v <= 1 {
        return vec![train[0]];
    }
    (0..v).map(|j| train[j * (train.len() - 1) / (v - 1)]).collect()
}

/// Refit one subject through a frozen decoder at each plane resolution and
/// each (evenly subsampled) training-view count, scoring held-out PSNR.
pub fn resolution_sweep(
    subject: &SubjectDataset,
    decoder: &RadianceDecoder,
    resolutions: &[usize],
    view_counts: &[usize],
    fc: &FitConfig,
) -> Result<SweepCurves, PipelineError> {
    if subject.heldout_views.is_empty() {
        return Err(PipelineError::Config(
            "the sweep needs held-out views (heldout_every > 0)".into(),
        ));
    }
    let rcfg = RenderConfig {
        samples_per_ray: fc.samples_per_ray,
        ..RenderConfig::default()
    };
    let heldout_psnr = |tp: &TriPlane| -> Result<Real, PipelineError> {
        let field = TriPlaneField { tp, dec: decoder };
        let mut acc = 0.0;
        for &v in &subject.heldout_views {
            let img = render_image(&field, &subject.cameras[v], &subject.bbox, &rcfg);
            acc += psnr(&img, &subject.images[v])?;
        }
        Ok(acc / subject.heldout_views.len() as Real)
    };

    let mut by_resolution = Vec::with_capacity(resolutions.len());
    for &r in resolutions {
        let mut c = *fc;
        c.plane_res = r;
        let out = fit_subject(subject, decoder, &c)?;
        by_resolution.push((r, heldout_psnr(&out.planes[0])?));
    }
    let mut by_views = Vec::with_capacity(view_counts.len());
    for &v in view_counts {
        let mut s = subject.clone();
        s.train_views = subsample_views(&subject.train_views, v.max(1));
        let out = fit_subject(&s, decoder, fc)?;
        by_views.push((s.train_views.len(), heldout_psnr(&out.planes[0])?));
    }
    Ok(SweepCurves {
        by_resolution,
        by_views,
    })
}

fn stage_eval(cfg: &PipelineConfig, paths: &Paths) -> Result<Report, PipelineError> {
    let mut rep = Report::new("eval", cfg);
    rep.inputs.insert(
        "dataset".into(),
        hash_tree(&paths.subject_dir(cfg.eval_subject))?,
    );
    rep.input_file(paths, &paths.decoder())?;
    let ds = load_subject(cfg, paths, cfg.eval_subject)?;
    let decoder = load_decoder(cfg, paths.decoder())?;
    let mut fc = fit_config(cfg);
    fc.iterations = cfg.eval_iters;
    let curves = resolution_sweep(
        &ds,
        &decoder,
        &cfg.eval_resolutions,
        &cfg.eval_views,
        &fc,
    )?;
    rep.metrics.insert("subject".into(), json!(cfg.eval_subject));
    rep.metrics
        .insert("by_resolution".into(), json!(curves.by_resolution));
    rep.metrics.insert("by_views".into(), json!(curves.by_views));
    Ok(rep)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny_config(root: &Path) -> PipelineConfig {
        let mut c = PipelineConfig::default();
        c.out_dir = root.to_path_buf();
        c.seed = 7;
        c.subjects = 2;
        c.views = 4;
        c.img_res = 16;
        c.heldout_every = 3;
        c.gt_samples = 8;
        c.fit_res = 8;
        c.fit_channels = 2;
        c.fit_iters = 30;
        c.fit_shared = 2;
        c.fit_rays = 64;
        c.fit_samples = 8;
        c.fit_decoder_hidden = 16;
        c.fit_fourier_bands = 2;
        c.base_res = 4;
        c.base_width = 8;
        c.base_mults = vec![1, 2];
        c.base_groups = 4;
        c.base_z = 4;
        c.base_t = 10;
        c.base_steps = 4;
        c.base_batch = 2;
        c.enc_width = 4;
        c.sr_t = 10;
        c.sr_width = 8;
        c.sr_groups = 4;
        c.sr_steps = 3;
        c.sr_batch = 1;
        c.sr_lambda_img = 0.5;
        c.sr_patch = 6;
        c.sr_patch_samples = 4;
        c.prior_hidden = 16;
        c.prior_t = 10;
        c.prior_steps = 5;
        c.prior_batch = 2;
        c.sample_count = 1;
        c.render_views = 2;
        c.render_res = 12;
        c.render_samples = 6;
        c.mesh_res = 8;
        c.invert_lambdas = vec![1.5];
        c.eval_resolutions = vec![4, 8];
        c.eval_views = vec![2, 3];
        c.eval_iters = 10;
        c
    }

    #[test]
    fn full_pipeline_plumbing_end_to_end() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = tiny_config(dir.path());
        for stage in [
            "synth",
            "fit",
            "train-base",
            "train-sr",
            "train-latent-prior",
            "sample",
            "invert",
            "eval",
        ] {
            let rp = run_stage(stage, &cfg).unwrap();
            assert!(rp.is_file(), "{stage} report missing");
        }
        let paths = Paths::new(&cfg);
        assert!(paths.sample_plane(0).is_file());
        assert!(paths.sample_view(0, 1).is_file());
        assert!(paths.sample_mesh(0).is_file());
        assert!(paths.invert_plane(0).is_file());

        let txt = std::fs::read_to_string(paths.report("sample")).unwrap();
        let v: Value = serde_json::from_str(&txt).unwrap();
        assert_eq!(v["config_sha256"], json!(cfg.sha256()));
        assert!(v["metrics"]["samples"][0]["pixel_max"].as_f64().unwrap() <= 1.0 + 1e-9);
        assert!(v["metrics"]["samples"][0]["pixel_min"].as_f64().unwrap() >= -1e-9);

        let txt = std::fs::read_to_string(paths.report("eval")).unwrap();
        let v: Value = serde_json::from_str(&txt).unwrap();
        assert_eq!(v["metrics"]["by_resolution"].as_array().unwrap().len(), 2);
        assert_eq!(v["metrics"]["by_views"].as_array().unwrap().len(), 2);

        let txt = std::fs::read_to_string(paths.report("invert")).unwrap();
        let v: Value = serde_json::from_str(&txt).unwrap();
        assert!(v["metrics"]["cfg_table"][0]["orbit_psnr"].as_f64().unwrap() > 0.0);
    }

    #[test]
    fn missing_dataset_fails_with_the_artifact_path() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = tiny_config(dir.path());
        let err = run_stage("fit", &cfg).unwrap_err();
        match &err {
            PipelineError::MissingArtifact(p) => {
                assert!(p.to_string_lossy().contains("dataset"), "path {p:?}");
            }
            other => panic!("expected MissingArtifact, got {other:?}"),
        }
        assert_eq!(err.exit_code(), 3);
        let err = run_stage("train-base", &cfg).unwrap_err();
        match &err {
            PipelineError::MissingArtifact(p) => {
                assert!(p.to_string_lossy().ends_with("s000.tpln"), "path {p:?}");
            }
            other => panic!("expected MissingArtifact, got {other:?}"),
        }
    }

    #[test]
    fn synth_rerun_reproduces_the_report_bitwise() {
        let dir = tempfile::tempdir().unwrap();
        let mut cfg = tiny_config(dir.path());
        cfg.gt_samples = 4;
        let rp = run_stage("synth", &cfg).unwrap();
        let first = std::fs::read(&rp).unwrap();
        let rp2 = run_stage("synth", &cfg).unwrap();
        let second = std::fs::read(&rp2).unwrap();
        assert_eq!(rp, rp2);
        assert_eq!(first, second);
    }

    #[test]
    fn unknown_stage_is_a_config_error() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = tiny_config(dir.path());
        let err = run_stage("deploy", &cfg).unwrap_err();
        assert_eq!(err.exit_code(), 2);
    }

    #[test]
    fn make_schedule_matches_presets_and_scales_down() {
        let b = make_schedule("base", 100).unwrap();
        let pb = NoiseSchedule::base();
        for t in 1..=100 {
            assert_eq!(b.beta(t), pb.beta(t));
        }
        let s = make_schedule("sr", 50).unwrap();
        let ps = NoiseSchedule::sr();
        for t in 1..=50 {
            assert_eq!(s.beta(t), ps.beta(t));
        }
        // short chains still end in (near-)pure noise by construction
        for t in [10, 20, 25] {
            let sc = make_schedule("base", t).unwrap();
            assert!(sc.alpha_bar(t) < 0.01);
        }
        assert!(make_schedule("cosine", 100).is_err());
    }

    #[test]
    fn norm_stats_roundtrip() {
        let a = Tensor::from_vec(&[2, 2, 1], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let b = Tensor::from_vec(&[2, 2, 1], vec![-1.0, 0.0, 1.0, 2.0]).unwrap();
        let n = NormStats::fit(&[a.clone(), b.clone()]);
        assert!((n.mu - 1.5).abs() < 1e-12);
        let z = n.normalize(&a);
        let back = n.denorm(&z);
        for (x, y) in a.data().iter().zip(back.data()) {
            assert!((x - y).abs() < 1e-12);
        }
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("norm.json");
        n.save(&p).unwrap();
        let m = NormStats::load(&p).unwrap();
        assert_eq!(n.mu, m.mu);
        assert_eq!(n.sigma, m.sigma);
        assert!(matches!(
            NormStats::load(&dir.path().join("gone.json")),
            Err(PipelineError::MissingArtifact(_))
        ));
    }

    #[test]
    fn interpolation_endpoints_are_the_unmixed_samples() {
        use rand_chacha::rand_core::SeedableRng as _;
        let mut nc = NetConfig::base(2, 10);
        nc.width = 8;
        nc.mults = vec![1];
        nc.groups = 4;
        nc.z_dim = 4;
        let net = DenoiserNet::new(nc, 3);
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let decoder = RadianceDecoder::new(2, FourierSpec { bands: 1 }, 8, &mut rng);
        let kit = SamplerKit {
            net,
            encoder: None,
            sr: None,
            prior: None,
            decoder,
            norm: NormStats::identity(),
            base_sched: make_schedule("base", 10).unwrap(),
            sr_sched: make_schedule("sr", 10).unwrap(),
            channels: 2,
            base_res: 4,
            hr_res: 4,
        };
        let z_a = Tensor::randn(&[4], 1.0, &mut rng);
        let z_b = Tensor::randn(&[4], 1.0, &mut rng);
        let cam = Camera::orbit(2.5, 0.0, 0.0, [0.0; 3], 0.7, 8, 8);
        let rcfg = RenderConfig {
            samples_per_ray: 4,
            ..RenderConfig::default()
        };
        let strip = interpolate_latents(&kit, &z_a, &z_b, 1, 1.5, 42, &cam, &rcfg).unwrap();
        assert_eq!(strip.planes.len(), 3);
        let alone_a = kit.generate(Some(&z_a), 1.5, 42, 0).unwrap();
        let alone_b = kit.generate(Some(&z_b), 1.5, 42, 0).unwrap();
        assert_eq!(strip.planes[0].roll_out().data(), alone_a.roll_out().data());
        assert_eq!(strip.planes[2].roll_out().data(), alone_b.roll_out().data());
        for img in &strip.frontals {
            for &v in img.data() {
                assert!(v.is_finite() && (-1e-9..=1.0 + 1e-9).contains(&v));
            }
        }
    }

    #[test]
    fn subsampled_views_keep_full_coverage() {
        let train = vec![0, 1, 2, 4, 5, 7, 8, 9];
        assert_eq!(subsample_views(&train, 2), vec![0, 9]);
        assert_eq!(subsample_views(&train, 3), vec![0, 4, 9]);
        assert_eq!(subsample_views(&train, 8), train);
        assert_eq!(subsample_views(&train, 99), train);
        assert_eq!(subsample_views(&train, 1), vec![0]);
    }
}
