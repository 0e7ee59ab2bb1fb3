//! Deterministic DDIM sampling with classifier-free guidance and optional
//! layout refinement before every denoising update.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::guidance::{refine_latent, AttentionDenoiser, GuidanceConfig, GuidanceTarget};
use crate::image_io::{RgbImage, IMAGE_SIZE, LATENT_LEN};
use crate::layout::LayoutSpec;
use crate::rng::{stream, SeededRng};
use crate::toymodel::vocab::{null_caption, Vocabulary};
use crate::trace::{StepRecord, TraceEvent};

/// Serializable description of a noise schedule.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ScheduleInfo {
    pub kind: String,
    pub t_train: usize,
    pub cosine_offset: f64,
    pub max_beta: f64,
}

impl Default for ScheduleInfo {
    fn default() -> Self {
        Self {
            kind: "cosine".into(),
            t_train: 1000,
            cosine_offset: 0.008,
            max_beta: 0.999,
        }
    }
}

/// Cumulative signal fractions `ᾱ_t` for `t = 0..=T` with `ᾱ_0 = 1`.
#[derive(Debug, Clone, PartialEq)]
pub struct NoiseSchedule {
    pub t_train: usize,
    pub alpha_bar: Vec<f64>,
}

impl NoiseSchedule {
    pub fn from_info(info: &ScheduleInfo) -> Result<Self> {
        if info.kind != "cosine" {
            return Err(Error::Config(format!("unknown schedule kind `{}`", info.kind)));
        }
        if info.t_train < 2 || !(info.max_beta > 0.0 && info.max_beta < 1.0) || !(info.cosine_offset >= 0.0) {
            return Err(Error::Config(format!("invalid schedule {info:?}")));
        }
        Ok(Self::cosine(info.t_train, info.cosine_offset, info.max_beta))
    }

    /// Cosine schedule with per-step betas clipped at `max_beta`.
    pub fn cosine(t_train: usize, offset: f64, max_beta: f64) -> Self {
        let f = |t: usize| {
            let x = (t as f64 / t_train as f64 + offset) / (1.0 + offset) * std::f64::consts::FRAC_PI_2;
            x.cos().powi(2)
        };
        let mut alpha_bar = Vec::with_capacity(t_train + 1);
        alpha_bar.push(1.0);
        for t in 1..=t_train {
            let beta = (1.0 - f(t) / f(t - 1)).clamp(1e-12, max_beta);
            let prev = alpha_bar[t - 1];
            alpha_bar.push(prev * (1.0 - beta));
        }
        Self { t_train, alpha_bar }
    }

    pub fn alpha_bar(&self, t: usize) -> Result<f64> {
        self.alpha_bar
            .get(t)
            .copied()
            .ok_or_else(|| Error::Invalid(format!("timestep {t} outside 0..={}", self.t_train)))
    }

    /// `steps` evenly spaced timesteps, descending, ending at 1.
    pub fn inference_timesteps(&self, steps: usize) -> Result<Vec<usize>> {
        if steps == 0 || steps > self.t_train {
            return Err(Error::Config(format!("cannot take {steps} steps of a {} schedule", self.t_train)));
        }
        let stride = self.t_train / steps;
        Ok((0..steps).rev().map(|i| i * stride + 1).collect())
    }

    /// Forward process: `√ᾱ·x₀ + √(1−ᾱ)·ε`.
    pub fn add_noise(&self, x0: &[f64], noise: &[f64], t: usize) -> Result<Vec<f64>> {
        let a = self.alpha_bar(t)?;
        let (s, n) = (a.sqrt(), (1.0 - a).sqrt());
        Ok(x0.iter().zip(noise).map(|(x, e)| s * x + n * e).collect())
    }
}

/// One deterministic DDIM update from `t` to `t_prev`.
pub fn ddim_step(z_t: &[f64], eps: &[f64], t: usize, t_prev: usize, schedule: &NoiseSchedule) -> Result<Vec<f64>> {
    if t_prev >= t {
        return Err(Error::Invalid(format!("DDIM step needs t > t_prev, got {t} -> {t_prev}")));
    }
    if z_t.len() != eps.len() {
        return Err(Error::Shape(format!("latent {} vs noise {}", z_t.len(), eps.len())));
    }
    let a_t = schedule.alpha_bar(t)?;
    let a_prev = schedule.alpha_bar(t_prev)?;
    let (sa, sn) = (a_t.sqrt(), (1.0 - a_t).sqrt());
    let (pa, pn) = (a_prev.sqrt(), (1.0 - a_prev).sqrt());
    Ok(z_t
        .iter()
        .zip(eps)
        .map(|(&z, &e)| {
            let x0 = (z - sn * e) / sa;
            pa * x0 + pn * e
        })
        .collect())
}

/// Re-derives the noise so that the implied clean image lies in `[-1, 1]`.
pub fn clip_noise_prediction(z_t: &[f64], eps: &[f64], t: usize, schedule: &NoiseSchedule) -> Result<Vec<f64>> {
    let a = schedule.alpha_bar(t)?;
    let (sa, sn) = (a.sqrt(), (1.0 - a).sqrt());
    if sn == 0.0 {
        return Ok(eps.to_vec());
    }
    Ok(z_t
        .iter()
        .zip(eps)
        .map(|(&z, &e)| {
            let x0 = ((z - sn * e) / sa).clamp(-1.0, 1.0);
            (z - sa * x0) / sn
        })
        .collect())
}

/// `ε_u + w·(ε_c − ε_u)`.
pub fn cfg_combine(eps_cond: &[f64], eps_uncond: &[f64], w: f64) -> Vec<f64> {
    eps_cond
        .iter()
        .zip(eps_uncond)
        .map(|(&c, &u)| u + w * (c - u))
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SamplerConfig {
    pub steps: usize,
    pub cfg_scale: f64,
    /// Clamp the implied clean image to the data range before each update.
    pub clip_x0: bool,
    pub guidance: GuidanceConfig,
}

impl Default for SamplerConfig {
    fn default() -> Self {
        Self {
            steps: 50,
            cfg_scale: 5.0,
            clip_x0: true,
            guidance: GuidanceConfig::default(),
        }
    }
}

impl SamplerConfig {
    pub fn validate(&self) -> Result<()> {
        self.guidance.validate()?;
        if self.steps == 0 {
            return Err(Error::Config("sampler.steps must be >= 1".into()));
        }
        if self.guidance.total_steps != self.steps {
            return Err(Error::Config(format!(
                "guidance.total_steps ({}) must equal sampler.steps ({})",
                self.guidance.total_steps, self.steps
            )));
        }
        if !(self.cfg_scale >= 0.0 && self.cfg_scale.is_finite()) {
            return Err(Error::Config("sampler.cfg_scale must be finite and >= 0".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct Generation {
    pub image: RgbImage,
    pub latent: Vec<f64>,
    pub trace: Vec<TraceEvent>,
}

/// Initial latent `z_T ∼ N(0, I)` for a seed.
pub fn initial_latent(seed: u64) -> Vec<f64> {
    SeededRng::new(seed, stream::INITIAL_NOISE).normal_vec(LATENT_LEN)
}

fn rms(z: &[f64]) -> f64 {
    (z.iter().map(|x| x * x).sum::<f64>() / z.len() as f64).sqrt()
}

/// Samples an image for the layout's prompt. Each step refines the latent
/// (when a guidance window is open), then applies a CFG-combined DDIM update.
pub fn generate<D: AttentionDenoiser + ?Sized>(
    model: &D,
    schedule: &NoiseSchedule,
    layout: &LayoutSpec,
    seed: u64,
    cfg: &SamplerConfig,
) -> Result<Generation> {
    cfg.validate()?;
    let tokens = Vocabulary::default().encode(&layout.prompt)?;
    let null = null_caption();
    let target = GuidanceTarget::new(layout, &tokens)?;
    let timesteps = schedule.inference_timesteps(cfg.steps)?;
    let mut z = initial_latent(seed);
    let mut trace = Vec::new();
    for (step, &t) in timesteps.iter().enumerate() {
        let t_prev = timesteps.get(step + 1).copied().unwrap_or(0);
        let mut iterations = Vec::new();
        z = refine_latent(model, &z, step, t, &target, &cfg.guidance, &mut iterations)?;
        let guided = !iterations.is_empty();
        trace.extend(iterations.into_iter().map(TraceEvent::Iteration));

        let eps = if cfg.cfg_scale == 1.0 {
            model.predict_noise(&z, t, &tokens)?
        } else if cfg.cfg_scale == 0.0 {
            model.predict_noise(&z, t, &null)?
        } else {
            let c = model.predict_noise(&z, t, &tokens)?;
            let u = model.predict_noise(&z, t, &null)?;
            cfg_combine(&c, &u, cfg.cfg_scale)
        };
        let eps = if cfg.clip_x0 {
            clip_noise_prediction(&z, &eps, t, schedule)?
        } else {
            eps
        };
        z = ddim_step(&z, &eps, t, t_prev, schedule)?;
        if z.iter().any(|x| !x.is_finite()) {
            return Err(Error::NonFinite(format!("latent after step {step} (t={t})")));
        }
        trace.push(TraceEvent::Step(StepRecord {
            step,
            timestep: t,
            prev_timestep: t_prev,
            guided,
            latent_rms: rms(&z),
        }));
    }
    let image = RgbImage::from_latent(&z, IMAGE_SIZE, IMAGE_SIZE)?;
    Ok(Generation {
        image,
        latent: z,
        trace,
    })
}
