//! Noise-prediction training on procedurally generated scenes.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::denoiser::{patchify, DenoiserConfig, DenoiserWeights, GradMode, Recording};
use super::scene::{render_scene, sample_scene};
use super::vocab::null_caption;
use super::weights::WeightsFile;
use super::ToyModel;
use crate::guidance::AttentionDenoiser;
use crate::autodiff::{Mat, Var};
use crate::layout::{rasterize_mask, BBox};
use crate::error::{Error, Result};
use crate::image_io::{IMAGE_SIZE, LATENT_LEN};
use crate::rng::{stream, SeededRng};
use crate::sampler::{NoiseSchedule, ScheduleInfo};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub steps: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub warmup_steps: usize,
    /// Final learning rate as a fraction of `lr` (cosine decay).
    pub lr_final_frac: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,
    /// Global gradient-norm clip; 0 disables.
    pub grad_clip: f64,
    pub caption_dropout: f64,
    /// Weight of the term that keeps each caption token's cross-attention
    /// inside the boxes of the objects it describes; 0 disables.
    pub grounding_weight: f64,
    pub seed: u64,
    pub holdout_size: usize,
    pub log_every: usize,
    pub model: DenoiserConfig,
    pub schedule: ScheduleInfo,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            steps: 6000,
            batch_size: 8,
            lr: 2e-3,
            warmup_steps: 200,
            lr_final_frac: 0.05,
            beta1: 0.9,
            beta2: 0.999,
            adam_eps: 1e-8,
            grad_clip: 1.0,
            caption_dropout: 0.1,
            grounding_weight: 0.1,
            seed: 0,
            holdout_size: 64,
            log_every: 100,
            model: DenoiserConfig::default(),
            schedule: ScheduleInfo::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        NoiseSchedule::from_info(&self.schedule)?;
        let bad = |m: &str| Err(Error::Config(format!("train: {m}")));
        if self.batch_size == 0 {
            return bad("batch_size must be >= 1");
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return bad("lr must be positive");
        }
        if !(0.0..=1.0).contains(&self.caption_dropout) {
            return bad("caption_dropout must be in [0, 1]");
        }
        if !(self.grounding_weight >= 0.0 && self.grounding_weight.is_finite()) {
            return bad("grounding_weight must be >= 0");
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return bad("Adam betas must be in [0, 1)");
        }
        if self.grad_clip < 0.0 || !(0.0..=1.0).contains(&self.lr_final_frac) {
            return bad("grad_clip must be >= 0 and lr_final_frac in [0, 1]");
        }
        Ok(())
    }

    fn lr_at(&self, step: usize) -> f64 {
        if step < self.warmup_steps {
            return self.lr * (step + 1) as f64 / self.warmup_steps as f64;
        }
        let span = self.steps.saturating_sub(self.warmup_steps).max(1);
        let frac = (step - self.warmup_steps) as f64 / span as f64;
        let cos = 0.5 * (1.0 + (std::f64::consts::PI * frac.min(1.0)).cos());
        self.lr * (self.lr_final_frac + (1.0 - self.lr_final_frac) * cos)
    }
}

/// One noised training example.
#[derive(Debug, Clone)]
pub struct Example {
    pub image: Vec<f64>,
    pub noise: Vec<f64>,
    pub timestep: usize,
    pub tokens: Vec<usize>,
    /// Token ids and box of each captioned object; empty when dropped.
    pub objects: Vec<([usize; 3], BBox)>,
}

fn draw_example(rng: &mut SeededRng, schedule: &NoiseSchedule, dropout: f64) -> Result<Example> {
    let (spec, caption) = sample_scene(rng)?;
    let dropped = rng.bernoulli(dropout);
    let tokens = if dropped { null_caption() } else { caption };
    let objects = if dropped {
        Vec::new()
    } else {
        spec.objects
            .iter()
            .map(|o| ([o.color.token(), o.texture.token(), o.shape.token()], o.rect.to_bbox(IMAGE_SIZE)))
            .collect()
    };
    let timestep = 1 + rng.below(schedule.t_train);
    Ok(Example {
        objects,
        image: render_scene(&spec).to_latent(),
        noise: rng.normal_vec(LATENT_LEN),
        timestep,
        tokens,
    })
}

/// Fixed evaluation set drawn from its own stream.
pub fn holdout_set(seed: u64, size: usize, schedule: &NoiseSchedule) -> Result<Vec<Example>> {
    let mut rng = SeededRng::new(seed, stream::HOLDOUT);
    (0..size).map(|_| draw_example(&mut rng, schedule, 0.0)).collect()
}

/// Mean over maps and caption tokens of `1 − inside/total` attention mass,
/// scaled by `weight`, with its seed gradients on the cross maps.
fn grounding(rec: &Recording<f32>, ex: &Example, grid: usize, weight: f64) -> (f64, Vec<(Var, Mat<f32>)>) {
    let regions: Vec<(usize, Vec<bool>)> = ex
        .tokens
        .iter()
        .enumerate()
        .filter_map(|(col, &tok)| {
            let mut cells = vec![false; grid * grid];
            let mut hit = false;
            for (ids, bbox) in &ex.objects {
                if ids.contains(&tok) {
                    hit = true;
                    for (c, &m) in cells.iter_mut().zip(rasterize_mask(bbox, grid, grid).cells()) {
                        *c |= m;
                    }
                }
            }
            hit.then_some((col, cells))
        })
        .collect();
    if regions.is_empty() || rec.cross.is_empty() {
        return (0.0, Vec::new());
    }
    let scale = weight / (regions.len() * rec.cross.len()) as f64;
    let mut value = 0.0;
    let mut seeds = Vec::with_capacity(rec.cross.len());
    for &v in &rec.cross {
        let a = rec.tape.value(v);
        let mut g = Mat::zeros(a.rows, a.cols);
        for (col, cells) in &regions {
            let (mut inside, mut total) = (0.0f64, 0.0f64);
            for (r, &m) in cells.iter().enumerate() {
                let x = a.get(r, *col) as f64;
                total += x;
                if m {
                    inside += x;
                }
            }
            let total = total.max(1e-12);
            let ratio = inside / total;
            value += scale * (1.0 - ratio);
            for (r, &m) in cells.iter().enumerate() {
                let d = -scale * (if m { 1.0 } else { 0.0 } - ratio) / total;
                g.data[r * a.cols + col] = d as f32;
            }
        }
        seeds.push((v, g));
    }
    (value, seeds)
}

fn example_loss(
    w: &DenoiserWeights,
    schedule: &NoiseSchedule,
    ex: &Example,
    grads: bool,
    weight: f64,
) -> Result<(f64, Vec<Mat<f32>>)> {
    let zt = schedule.add_noise(&ex.image, &ex.noise, ex.timestep)?;
    let mode = GradMode {
        input: false,
        params: grads,
    };
    let mut rec = w.record::<f32>(&zt, ex.timestep as f64, &ex.tokens, mode)?;
    let cfg = &w.config;
    let a = schedule.alpha_bar(ex.timestep)?;
    let target = cfg.prediction.target(&ex.image, &ex.noise, a);
    let target = Mat::from_f64(cfg.n_patches(), cfg.patch_dim(), &patchify(&target, cfg.patch));
    let loss = rec.tape.mse(rec.output, target);
    let mut value = rec.tape.value(loss).data[0] as f64;
    let mut seeds = vec![(loss, Mat::from_vec(1, 1, vec![1.0]))];
    if weight > 0.0 {
        let (g, seed) = grounding(&rec, ex, cfg.grid(), weight);
        value += g;
        seeds.extend(seed);
    }
    if !grads {
        return Ok((value, Vec::new()));
    }
    let mut g = rec.tape.backward(seeds);
    let per_param = rec
        .params
        .iter()
        .zip(&w.tensors)
        .map(|(&v, t)| g.take(v).unwrap_or_else(|| Mat::zeros(t.rows, t.cols)))
        .collect();
    Ok((value, per_param))
}

/// Mean ε-MSE over a fixed example set, whatever the network predicts.
pub fn evaluate_mse(w: &DenoiserWeights, schedule: &NoiseSchedule, set: &[Example]) -> Result<f64> {
    let model = ToyModel::<f32>::new(w, schedule);
    let losses: Result<Vec<f64>> = set
        .par_iter()
        .map(|ex| {
            let zt = schedule.add_noise(&ex.image, &ex.noise, ex.timestep)?;
            let eps = model.predict_noise(&zt, ex.timestep, &ex.tokens)?;
            Ok(eps.iter().zip(&ex.noise).map(|(a, b)| (a - b).powi(2)).sum::<f64>() / eps.len() as f64)
        })
        .collect();
    let losses = losses?;
    Ok(losses.iter().sum::<f64>() / losses.len().max(1) as f64)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LossPoint {
    pub step: usize,
    pub train_loss: f64,
    pub lr: f64,
}

#[derive(Debug, Clone)]
pub struct TrainReport {
    pub file: WeightsFile,
    pub loss_curve: Vec<LossPoint>,
    pub holdout_initial: f64,
    pub holdout_final: f64,
}

struct Adam {
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
    t: i32,
}

impl Adam {
    fn new(w: &DenoiserWeights) -> Self {
        let zeros: Vec<Vec<f64>> = w.tensors.iter().map(|t| vec![0.0; t.data.len()]).collect();
        Self {
            m: zeros.clone(),
            v: zeros,
            t: 0,
        }
    }

    fn step(&mut self, w: &mut DenoiserWeights, grads: &[Vec<f64>], lr: f64, cfg: &TrainConfig) {
        self.t += 1;
        let bc1 = 1.0 - cfg.beta1.powi(self.t);
        let bc2 = 1.0 - cfg.beta2.powi(self.t);
        for (i, t) in w.tensors.iter_mut().enumerate() {
            for (j, x) in t.data.iter_mut().enumerate() {
                let g = grads[i][j];
                let m = &mut self.m[i][j];
                let v = &mut self.v[i][j];
                *m = cfg.beta1 * *m + (1.0 - cfg.beta1) * g;
                *v = cfg.beta2 * *v + (1.0 - cfg.beta2) * g * g;
                let upd = lr * (*m / bc1) / ((*v / bc2).sqrt() + cfg.adam_eps);
                *x = (*x as f64 - upd) as f32;
            }
        }
    }
}

/// Trains from scratch. `progress` is called at every logged step.
pub fn train_denoiser(cfg: &TrainConfig, progress: &mut dyn FnMut(&LossPoint)) -> Result<TrainReport> {
    cfg.validate()?;
    let schedule = NoiseSchedule::from_info(&cfg.schedule)?;
    let mut weights = DenoiserWeights::init(cfg.model, &mut SeededRng::new(cfg.seed, stream::WEIGHT_INIT))?;
    let holdout = holdout_set(cfg.seed, cfg.holdout_size, &schedule)?;
    let holdout_initial = evaluate_mse(&weights, &schedule, &holdout)?;
    let mut data_rng = SeededRng::new(cfg.seed, stream::TRAIN_DATA);
    let mut adam = Adam::new(&weights);
    let mut curve = Vec::new();
    let mut running = 0.0;
    let mut running_n = 0usize;

    for step in 0..cfg.steps {
        let batch: Vec<Example> = (0..cfg.batch_size)
            .map(|_| draw_example(&mut data_rng, &schedule, cfg.caption_dropout))
            .collect::<Result<_>>()?;
        let results: Vec<(f64, Vec<Mat<f32>>)> = batch
            .par_iter()
            .map(|ex| example_loss(&weights, &schedule, ex, true, cfg.grounding_weight))
            .collect::<Result<_>>()?;

        // Reduce in batch order so the result does not depend on threading.
        let inv = 1.0 / cfg.batch_size as f64;
        let mut grads: Vec<Vec<f64>> = weights.tensors.iter().map(|t| vec![0.0; t.data.len()]).collect();
        let mut loss = 0.0;
        for (l, g) in &results {
            loss += l * inv;
            for (acc, m) in grads.iter_mut().zip(g) {
                for (a, &x) in acc.iter_mut().zip(&m.data) {
                    *a += x as f64 * inv;
                }
            }
        }
        if !loss.is_finite() {
            return Err(Error::Diverged { step, loss });
        }
        if cfg.grad_clip > 0.0 {
            let norm = grads.iter().flatten().map(|g| g * g).sum::<f64>().sqrt();
            if !norm.is_finite() {
                return Err(Error::Diverged { step, loss: norm });
            }
            if norm > cfg.grad_clip {
                let s = cfg.grad_clip / norm;
                grads.iter_mut().flatten().for_each(|g| *g *= s);
            }
        }
        let lr = cfg.lr_at(step);
        adam.step(&mut weights, &grads, lr, cfg);

        running += loss;
        running_n += 1;
        if cfg.log_every > 0 && ((step + 1) % cfg.log_every == 0 || step + 1 == cfg.steps) {
            let point = LossPoint {
                step: step + 1,
                train_loss: running / running_n as f64,
                lr,
            };
            progress(&point);
            curve.push(point);
            running = 0.0;
            running_n = 0;
        }
    }
    let holdout_final = evaluate_mse(&weights, &schedule, &holdout)?;
    Ok(TrainReport {
        file: WeightsFile {
            weights,
            schedule: cfg.schedule.clone(),
        },
        loss_curve: curve,
        holdout_initial,
        holdout_final,
    })
}
