//! Flat `key = value` pipeline configuration: one documented key set with
//! defaults, strict parsing (unknown or duplicate keys are errors), CLI
//! override application, and a canonical serialization used both for the
//! resolved-config artifact and the config hash embedded in stage reports.

use super::PipelineError;
use crate::numerics::Real;
use sha2::{Digest, Sha256};
use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

/// Every pipeline knob. Field names double as config keys.
#[derive(Clone, Debug)]
pub struct PipelineConfig {
    /// Global seed; all stage randomness derives from it.
    pub seed: u64,
    /// Artifact root directory.
    pub out_dir: PathBuf,

    // dataset
    pub subjects: usize,
    pub views: usize,
    pub img_res: usize,
    pub cam_radius: Real,
    pub cam_fov: Real,
    pub elev_min_deg: Real,
    pub elev_max_deg: Real,
    pub glasses_prob: Real,
    pub heldout_every: usize,
    pub gt_samples: usize,

    // fitting
    pub fit_res: usize,
    pub fit_channels: usize,
    pub fit_iters: usize,
    pub fit_shared: usize,
    pub fit_rays: usize,
    pub fit_samples: usize,
    pub fit_lr_planes: Real,
    pub fit_lr_decoder: Real,
    pub fit_w_sparse: Real,
    pub fit_w_smooth: Real,
    pub fit_w_dist: Real,
    pub fit_rescale_prob: Real,
    pub fit_decoder_hidden: usize,
    pub fit_fourier_bands: usize,

    // base diffusion stage
    pub base_res: usize,
    pub base_width: usize,
    pub base_mults: Vec<usize>,
    pub base_groups: usize,
    pub base_z: usize,
    pub base_t: usize,
    pub base_steps: usize,
    pub base_batch: usize,
    pub base_lr: Real,
    pub base_ema: Real,
    pub base_pdrop: Real,
    pub base_variant: String,
    pub enc_width: usize,

    // super-resolution stage
    pub sr_t: usize,
    pub sr_width: usize,
    pub sr_groups: usize,
    pub sr_steps: usize,
    pub sr_batch: usize,
    pub sr_lr: Real,
    pub sr_ema: Real,
    pub sr_lambda_tri: Real,
    pub sr_lambda_img: Real,
    pub sr_patch: usize,
    pub sr_patch_samples: usize,
    pub sr_blur_max: Real,
    pub sr_noise_max: Real,
    pub sr_factor_max: usize,

    // latent prior stage
    pub prior_hidden: usize,
    pub prior_t: usize,
    pub prior_steps: usize,
    pub prior_batch: usize,
    pub prior_lr: Real,

    // sampling / rendering
    pub sample_count: usize,
    pub sample_steps: usize,
    pub sample_sr: bool,
    pub sample_prior: bool,
    pub cfg_scale: Real,
    pub use_ema: bool,
    pub schedule: String,
    pub render_views: usize,
    pub render_res: usize,
    pub render_samples: usize,
    pub mesh_res: usize,
    pub mesh_iso: Real,

    // inversion
    pub invert_subject: usize,
    pub invert_lambdas: Vec<Real>,

    // evaluation sweeps
    pub eval_subject: usize,
    pub eval_resolutions: Vec<usize>,
    pub eval_views: Vec<usize>,
    pub eval_iters: usize,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        PipelineConfig {
            seed: 0,
            out_dir: PathBuf::from("out"),
            subjects: 8,
            views: 24,
            img_res: 32,
            cam_radius: 2.5,
            cam_fov: 0.7,
            elev_min_deg: -20.0,
            elev_max_deg: 30.0,
            glasses_prob: 0.5,
            heldout_every: 6,
            gt_samples: 48,
            fit_res: 32,
            fit_channels: 4,
            fit_iters: 2000,
            fit_shared: 2,
            fit_rays: 512,
            fit_samples: 32,
            fit_lr_planes: 1e-2,
            fit_lr_decoder: 1e-3,
            fit_w_sparse: 1e-3,
            fit_w_smooth: 1e-3,
            fit_w_dist: 1e-3,
            fit_rescale_prob: 0.5,
            fit_decoder_hidden: 48,
            fit_fourier_bands: 4,
            base_res: 16,
            base_width: 16,
            base_mults: vec![1, 2],
            base_groups: 4,
            base_z: 16,
            base_t: 100,
            base_steps: 2000,
            base_batch: 4,
            base_lr: 2e-3,
            base_ema: 0.995,
            base_pdrop: 0.2,
            base_variant: "aware".into(),
            enc_width: 8,
            sr_t: 50,
            sr_width: 16,
            sr_groups: 4,
            sr_steps: 2000,
            sr_batch: 2,
            sr_lr: 2e-3,
            sr_ema: 0.995,
            sr_lambda_tri: 1.0,
            sr_lambda_img: 0.1,
            sr_patch: 8,
            sr_patch_samples: 16,
            sr_blur_max: 0.6,
            sr_noise_max: 0.03,
            sr_factor_max: 2,
            prior_hidden: 64,
            prior_t: 100,
            prior_steps: 3000,
            prior_batch: 8,
            prior_lr: 3e-3,
            sample_count: 4,
            sample_steps: 0,
            sample_sr: true,
            sample_prior: true,
            cfg_scale: 1.5,
            use_ema: true,
            schedule: "base".into(),
            render_views: 8,
            render_res: 32,
            render_samples: 32,
            mesh_res: 0,
            mesh_iso: 5.0,
            invert_subject: 0,
            invert_lambdas: vec![1.0, 1.5, 3.0],
            eval_subject: 0,
            eval_resolutions: vec![8, 16, 32],
            eval_views: vec![6, 12, 24],
            eval_iters: 600,
        }
    }
}

fn bad(key: &str, value: &str, want: &str) -> PipelineError {
    PipelineError::Config(format!("key '{key}': cannot parse '{value}' as {want}"))
}

fn p_usize(k: &str, v: &str) -> Result<usize, PipelineError> {
    v.parse().map_err(|_| bad(k, v, "an unsigned integer"))
}

fn p_u64(k: &str, v: &str) -> Result<u64, PipelineError> {
    v.parse().map_err(|_| bad(k, v, "an unsigned integer"))
}

fn p_real(k: &str, v: &str) -> Result<Real, PipelineError> {
    v.parse().map_err(|_| bad(k, v, "a number"))
}

fn p_bool(k: &str, v: &str) -> Result<bool, PipelineError> {
    match v {
        "true" | "1" => Ok(true),
        "false" | "0" => Ok(false),
        _ => Err(bad(k, v, "a boolean (true/false)")),
    }
}

fn p_usize_list(k: &str, v: &str) -> Result<Vec<usize>, PipelineError> {
    v.split(',')
        .map(|s| s.trim().parse().map_err(|_| bad(k, v, "a comma list of integers")))
        .collect()
}

fn p_real_list(k: &str, v: &str) -> Result<Vec<Real>, PipelineError> {
    v.split(',')
        .map(|s| s.trim().parse().map_err(|_| bad(k, v, "a comma list of numbers")))
        .collect()
}

fn join<T: std::fmt::Display>(xs: &[T]) -> String {
    xs.iter()
        .map(|x| x.to_string())
        .collect::<Vec<_>>()
        .join(",")
}

/// Split flat `key = value` text into a map. `#` starts a comment; blank
/// lines are skipped; duplicate keys are rejected.
pub fn parse_kv(text: &str) -> Result<BTreeMap<String, String>, PipelineError> {
    let mut map = BTreeMap::new();
    for (lineno, raw) in text.lines().enumerate() {
        let line = match raw.find('#') {
            Some(i) => &raw[..i],
            None => raw,
        }
        .trim();
        if line.is_empty() {
            continue;
        }
        let Some((k, v)) = line.split_once('=') else {
            return Err(PipelineError::Config(format!(
                "line {}: expected 'key = value', got '{line}'",
                lineno + 1
            )));
        };
        let k = k.trim().to_string();
        let v = v.trim().to_string();
        if map.insert(k.clone(), v).is_some() {
            return Err(PipelineError::Config(format!("duplicate key '{k}'")));
        }
    }
    Ok(map)
}

impl PipelineConfig {
    pub fn from_text(text: &str) -> Result<Self, PipelineError> {
        let mut cfg = PipelineConfig::default();
        for (k, v) in parse_kv(text)? {
            cfg.set(&k, &v)?;
        }
        Ok(cfg)
    }

    pub fn from_file(path: &Path) -> Result<Self, PipelineError> {
        let text = std::fs::read_to_string(path).map_err(|e| {
            PipelineError::Config(format!("config file {}: {e}", path.display()))
        })?;
        Self::from_text(&text)
    }

    /// Apply `key=value` override strings (CLI) over the parsed file.
    pub fn apply_overrides(&mut self, overrides: &[String]) -> Result<(), PipelineError> {
        for o in overrides {
            let Some((k, v)) = o.split_once('=') else {
                return Err(PipelineError::Config(format!(
                    "override '{o}' is not key=value"
                )));
            };
            self.set(k.trim(), v.trim())?;
        }
        Ok(())
    }

    pub fn set(&mut self, key: &str, v: &str) -> Result<(), PipelineError> {
        match key {
            "seed" => self.seed = p_u64(key, v)?,
            "out_dir" => self.out_dir = PathBuf::from(v),
            "subjects" => self.subjects = p_usize(key, v)?,
            "views" => self.views = p_usize(key, v)?,
            "img_res" => self.img_res = p_usize(key, v)?,
            "cam_radius" => self.cam_radius = p_real(key, v)?,
            "cam_fov" => self.cam_fov = p_real(key, v)?,
            "elev_min_deg" => self.elev_min_deg = p_real(key, v)?,
            "elev_max_deg" => self.elev_max_deg = p_real(key, v)?,
            "glasses_prob" => self.glasses_prob = p_real(key, v)?,
            "heldout_every" => self.heldout_every = p_usize(key, v)?,
            "gt_samples" => self.gt_samples = p_usize(key, v)?,
            "fit_res" => self.fit_res = p_usize(key, v)?,
            "fit_channels" => self.fit_channels = p_usize(key, v)?,
            "fit_iters" => self.fit_iters = p_usize(key, v)?,
            "fit_shared" => self.fit_shared = p_usize(key, v)?,
            "fit_rays" => self.fit_rays = p_usize(key, v)?,
            "fit_samples" => self.fit_samples = p_usize(key, v)?,
            "fit_lr_planes" => self.fit_lr_planes = p_real(key, v)?,
            "fit_lr_decoder" => self.fit_lr_decoder = p_real(key, v)?,
            "fit_w_sparse" => self.fit_w_sparse = p_real(key, v)?,
            "fit_w_smooth" => self.fit_w_smooth = p_real(key, v)?,
            "fit_w_dist" => self.fit_w_dist = p_real(key, v)?,
            "fit_rescale_prob" => self.fit_rescale_prob = p_real(key, v)?,
            "fit_decoder_hidden" => self.fit_decoder_hidden = p_usize(key, v)?,
            "fit_fourier_bands" => self.fit_fourier_bands = p_usize(key, v)?,
            "base_res" => self.base_res = p_usize(key, v)?,
            "base_width" => self.base_width = p_usize(key, v)?,
            "base_mults" => self.base_mults = p_usize_list(key, v)?,
            "base_groups" => self.base_groups = p_usize(key, v)?,
            "base_z" => self.base_z = p_usize(key, v)?,
            "base_t" => self.base_t = p_usize(key, v)?,
            "base_steps" => self.base_steps = p_usize(key, v)?,
            "base_batch" => self.base_batch = p_usize(key, v)?,
            "base_lr" => self.base_lr = p_real(key, v)?,
            "base_ema" => self.base_ema = p_real(key, v)?,
            "base_pdrop" => self.base_pdrop = p_real(key, v)?,
            "base_variant" => self.base_variant = v.to_string(),
            "enc_width" => self.enc_width = p_usize(key, v)?,
            "sr_t" => self.sr_t = p_usize(key, v)?,
            "sr_width" => self.sr_width = p_usize(key, v)?,
            "sr_groups" => self.sr_groups = p_usize(key, v)?,
            "sr_steps" => self.sr_steps = p_usize(key, v)?,
            "sr_batch" => self.sr_batch = p_usize(key, v)?,
            "sr_lr" => self.sr_lr = p_real(key, v)?,
            "sr_ema" => self.sr_ema = p_real(key, v)?,
            "sr_lambda_tri" => self.sr_lambda_tri = p_real(key, v)?,
            "sr_lambda_img" => self.sr_lambda_img = p_real(key, v)?,
            "sr_patch" => self.sr_patch = p_usize(key, v)?,
            "sr_patch_samples" => self.sr_patch_samples = p_usize(key, v)?,
            "sr_blur_max" => self.sr_blur_max = p_real(key, v)?,
            "sr_noise_max" => self.sr_noise_max = p_real(key, v)?,
            "sr_factor_max" => self.sr_factor_max = p_usize(key, v)?,
            "prior_hidden" => self.prior_hidden = p_usize(key, v)?,
            "prior_t" => self.prior_t = p_usize(key, v)?,
            "prior_steps" => self.prior_steps = p_usize(key, v)?,
            "prior_batch" => self.prior_batch = p_usize(key, v)?,
            "prior_lr" => self.prior_lr = p_real(key, v)?,
            "sample_count" => self.sample_count = p_usize(key, v)?,
            "sample_steps" => self.sample_steps = p_usize(key, v)?,
            "sample_sr" => self.sample_sr = p_bool(key, v)?,
            "sample_prior" => self.sample_prior = p_bool(key, v)?,
            "cfg_scale" => self.cfg_scale = p_real(key, v)?,
            "use_ema" => self.use_ema = p_bool(key, v)?,
            "schedule" => self.schedule = v.to_string(),
            "render_views" => self.render_views = p_usize(key, v)?,
            "render_res" => self.render_res = p_usize(key, v)?,
            "render_samples" => self.render_samples = p_usize(key, v)?,
            "mesh_res" => self.mesh_res = p_usize(key, v)?,
            "mesh_iso" => self.mesh_iso = p_real(key, v)?,
            "invert_subject" => self.invert_subject = p_usize(key, v)?,
            "invert_lambdas" => self.invert_lambdas = p_real_list(key, v)?,
            "eval_subject" => self.eval_subject = p_usize(key, v)?,
            "eval_resolutions" => self.eval_resolutions = p_usize_list(key, v)?,
            "eval_views" => self.eval_views = p_usize_list(key, v)?,
            "eval_iters" => self.eval_iters = p_usize(key, v)?,
            _ => {
                return Err(PipelineError::Config(format!("unknown key '{key}'")));
            }
        }
        Ok(())
    }

    /// Canonical serialization: every key in declaration order. Parsing this
    /// text reproduces the config exactly; its digest is the config hash.
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let kv: Vec<(&str, String)> = vec![
            ("seed", self.seed.to_string()),
            ("out_dir", self.out_dir.display().to_string()),
            ("subjects", self.subjects.to_string()),
            ("views", self.views.to_string()),
            ("img_res", self.img_res.to_string()),
            ("cam_radius", self.cam_radius.to_string()),
            ("cam_fov", self.cam_fov.to_string()),
            ("elev_min_deg", self.elev_min_deg.to_string()),
            ("elev_max_deg", self.elev_max_deg.to_string()),
            ("glasses_prob", self.glasses_prob.to_string()),
            ("heldout_every", self.heldout_every.to_string()),
            ("gt_samples", self.gt_samples.to_string()),
            ("fit_res", self.fit_res.to_string()),
            ("fit_channels", self.fit_channels.to_string()),
            ("fit_iters", self.fit_iters.to_string()),
            ("fit_shared", self.fit_shared.to_string()),
            ("fit_rays", self.fit_rays.to_string()),
            ("fit_samples", self.fit_samples.to_string()),
            ("fit_lr_planes", self.fit_lr_planes.to_string()),
            ("fit_lr_decoder", self.fit_lr_decoder.to_string()),
            ("fit_w_sparse", self.fit_w_sparse.to_string()),
            ("fit_w_smooth", self.fit_w_smooth.to_string()),
            ("fit_w_dist", self.fit_w_dist.to_string()),
            ("fit_rescale_prob", self.fit_rescale_prob.to_string()),
            ("fit_decoder_hidden", self.fit_decoder_hidden.to_string()),
            ("fit_fourier_bands", self.fit_fourier_bands.to_string()),
            ("base_res", self.base_res.to_string()),
            ("base_width", self.base_width.to_string()),
            ("base_mults", join(&self.base_mults)),
            ("base_groups", self.base_groups.to_string()),
            ("base_z", self.base_z.to_string()),
            ("base_t", self.base_t.to_string()),
            ("base_steps", self.base_steps.to_string()),
            ("base_batch", self.base_batch.to_string()),
            ("base_lr", self.base_lr.to_string()),
            ("base_ema", self.base_ema.to_string()),
            ("base_pdrop", self.base_pdrop.to_string()),
            ("base_variant", self.base_variant.clone()),
            ("enc_width", self.enc_width.to_string()),
            ("sr_t", self.sr_t.to_string()),
            ("sr_width", self.sr_width.to_string()),
            ("sr_groups", self.sr_groups.to_string()),
            ("sr_steps", self.sr_steps.to_string()),
            ("sr_batch", self.sr_batch.to_string()),
            ("sr_lr", self.sr_lr.to_string()),
            ("sr_ema", self.sr_ema.to_string()),
            ("sr_lambda_tri", self.sr_lambda_tri.to_string()),
            ("sr_lambda_img", self.sr_lambda_img.to_string()),
            ("sr_patch", self.sr_patch.to_string()),
            ("sr_patch_samples", self.sr_patch_samples.to_string()),
            ("sr_blur_max", self.sr_blur_max.to_string()),
            ("sr_noise_max", self.sr_noise_max.to_string()),
            ("sr_factor_max", self.sr_factor_max.to_string()),
            ("prior_hidden", self.prior_hidden.to_string()),
            ("prior_t", self.prior_t.to_string()),
            ("prior_steps", self.prior_steps.to_string()),
            ("prior_batch", self.prior_batch.to_string()),
            ("prior_lr", self.prior_lr.to_string()),
            ("sample_count", self.sample_count.to_string()),
            ("sample_steps", self.sample_steps.to_string()),
            ("sample_sr", self.sample_sr.to_string()),
            ("sample_prior", self.sample_prior.to_string()),
            ("cfg_scale", self.cfg_scale.to_string()),
            ("use_ema", self.use_ema.to_string()),
            ("schedule", self.schedule.clone()),
            ("render_views", self.render_views.to_string()),
            ("render_res", self.render_res.to_string()),
            ("render_samples", self.render_samples.to_string()),
            ("mesh_res", self.mesh_res.to_string()),
            ("mesh_iso", self.mesh_iso.to_string()),
            ("invert_subject", self.invert_subject.to_string()),
            ("invert_lambdas", join(&self.invert_lambdas)),
            ("eval_subject", self.eval_subject.to_string()),
            ("eval_resolutions", join(&self.eval_resolutions)),
            ("eval_views", join(&self.eval_views)),
            ("eval_iters", self.eval_iters.to_string()),
        ];
        for (k, v) in kv {
            let _ = writeln!(s, "{k} = {v}");
        }
        s
    }

    /// Hex digest of the canonical serialization.
    pub fn sha256(&self) -> String {
        let mut h = Sha256::new();
        h.update(self.to_text().as_bytes());
        let out = h.finalize();
        let mut hex = String::with_capacity(64);
        for b in out {
            let _ = write!(hex, "{b:02x}");
        }
        hex
    }

    pub fn validate(&self) -> Result<(), PipelineError> {
        let err = |m: String| Err(PipelineError::Config(m));
        if self.subjects == 0 || self.views < 2 {
            return err("need at least 1 subject and 2 views".into());
        }
        if self.heldout_every == 1 {
            return err("heldout_every = 1 would hold out every non-frontal view".into());
        }
        if self.elev_min_deg > self.elev_max_deg {
            return err("elevation range is reversed".into());
        }
        if !(0.0..=1.0).contains(&self.glasses_prob)
            || !(0.0..=1.0).contains(&self.base_pdrop)
            || !(0.0..=1.0).contains(&self.fit_rescale_prob)
        {
            return err("probabilities must lie in [0, 1]".into());
        }
        if !(0.0..=1.0).contains(&self.base_ema) || !(0.0..=1.0).contains(&self.sr_ema) {
            return err("ema rates must lie in [0, 1]".into());
        }
        if self.fit_res < 4 || self.fit_channels == 0 {
            return err("fit_res must be >= 4 with at least one channel".into());
        }
        if self.base_res < 2 || self.fit_res % self.base_res != 0 {
            return err(format!(
                "base_res {} must divide fit_res {}",
                self.base_res, self.fit_res
            ));
        }
        if self.base_mults.is_empty() || self.base_mults.contains(&0) {
            return err(format!("bad base_mults {:?}", self.base_mults));
        }
        let down = 1 << (self.base_mults.len() - 1);
        if self.base_res % down != 0 {
            return err(format!(
                "base_res {} not divisible by the net's downsampling {down}",
                self.base_res
            ));
        }
        if crate::denoiser::NetVariant::parse(&self.base_variant).is_none() {
            return err(format!(
                "base_variant '{}' (want baseline|latent|rollout|aware)",
                self.base_variant
            ));
        }
        if self.variant_has_latent() && self.img_res % 16 != 0 {
            return err("latent conditioning needs img_res divisible by 16".into());
        }
        for (name, t) in [("base_t", self.base_t), ("sr_t", self.sr_t), ("prior_t", self.prior_t)] {
            if t < 10 {
                return err(format!("{name} = {t} is below the stable minimum of 10"));
            }
        }
        if !matches!(self.schedule.as_str(), "base" | "sr" | "latent") {
            return err(format!("schedule '{}' (want base|sr|latent)", self.schedule));
        }
        if self.sample_steps > 0 && self.sample_steps < 10 {
            return err("sample_steps must be 0 (default) or >= 10".into());
        }
        if self.sample_steps > self.base_t {
            return err(format!(
                "sample_steps {} exceeds the trained chain length base_t {}",
                self.sample_steps, self.base_t
            ));
        }
        for &m in &self.base_mults {
            if (self.base_width * m) % self.base_groups != 0 {
                return err(format!(
                    "base_width {} x mult {m} not divisible by base_groups {}",
                    self.base_width, self.base_groups
                ));
            }
        }
        if self.sr_width % self.sr_groups != 0 {
            return err(format!(
                "sr_width {} not divisible by sr_groups {}",
                self.sr_width, self.sr_groups
            ));
        }
        if self.sr_factor_max == 0 {
            return err("sr_factor_max must be >= 1".into());
        }
        if self.sr_patch > self.img_res || (self.sr_lambda_img > 0.0 && self.sr_patch == 0) {
            return err("sr_patch must fit the image (and be > 0 with image loss on)".into());
        }
        if self.fit_shared < 2 {
            return err("fit_shared must be >= 2 for the shared-decoder phase".into());
        }
        if self.fit_shared > self.subjects {
            return err("fit_shared exceeds the subject count".into());
        }
        if self.invert_subject >= self.subjects || self.eval_subject >= self.subjects {
            return err("invert_subject/eval_subject out of range".into());
        }
        if self.mesh_res > 0 && self.mesh_res < 8 {
            return err("mesh_res must be 0 (off) or >= 8".into());
        }
        Ok(())
    }

    /// Whether the configured base model takes a portrait latent: every
    /// variant except the unconditional baseline keeps it, provided the
    /// latent width is nonzero.
    pub fn variant_has_latent(&self) -> bool {
        self.base_z > 0
            && !matches!(
                crate::denoiser::NetVariant::parse(&self.base_variant),
                Some(crate::denoiser::NetVariant::Baseline) | None
            )
    }
}
