//! Inference-time latent refinement.
//!
//! At each guided sampler step the latent is updated `k` times by plain
//! gradient descent on the combined layout objective. Attention-map terms are
//! differentiated through a fresh denoiser pass at every inner iteration; the
//! background and prior terms act on the latent directly.

use serde::{Deserialize, Serialize};

use crate::attention::{AttentionBundle, BundleGrad};
use crate::error::{Error, Result};
use crate::image_io::{CHANNELS, IMAGE_SIZE};
use crate::layout::{union_foreground, BinaryMask, LayoutSpec};
use crate::losses::{
    iou_objective_with_grad, loss_dis_with_grad, loss_kl_prior_with_grad, loss_mask_with_grad,
    loss_sim_with_grad, total_loss, ActiveTerms, LossBreakdown, LossComponents, LossWeights,
    DEFAULT_TAU_DIS,
};
use crate::trace::IterationRecord;

/// Attention maps captured at one latent, with the map-to-latent pullback.
pub struct AttentionProbe {
    pub bundle: AttentionBundle,
    pullback: Box<dyn Fn(&BundleGrad) -> Vec<f64>>,
}

impl AttentionProbe {
    pub fn new(bundle: AttentionBundle, pullback: Box<dyn Fn(&BundleGrad) -> Vec<f64>>) -> Self {
        Self { bundle, pullback }
    }

    pub fn pullback(&self, grad: &BundleGrad) -> Vec<f64> {
        (self.pullback)(grad)
    }
}

/// A noise predictor that can also expose its attention maps.
pub trait AttentionDenoiser {
    fn predict_noise(&self, z: &[f64], t: usize, tokens: &[usize]) -> Result<Vec<f64>>;
    fn probe(&self, z: &[f64], t: usize, tokens: &[usize]) -> Result<AttentionProbe>;
}

/// How attention-association losses see the captured maps.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AttentionMaps {
    /// One map averaged over all layers and heads.
    #[default]
    Aggregated,
    /// Each (layer, head) map separately, losses averaged.
    PerMap,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GuidanceConfig {
    pub weights: LossWeights,
    pub k_iters: usize,
    pub alpha_start: f64,
    pub alpha_end: f64,
    /// Mask and prior terms run for steps `< window_mask_kl`.
    pub window_mask_kl: usize,
    pub window_att: usize,
    pub window_iou: usize,
    pub tau_dis: f64,
    pub total_steps: usize,
    /// Ablation switches, combined with the step windows.
    pub terms: ActiveTerms,
    /// Divide the mask loss by the latent element count.
    pub normalize_mask: bool,
    pub att_maps: AttentionMaps,
}

impl Default for GuidanceConfig {
    fn default() -> Self {
        Self {
            weights: LossWeights::default(),
            k_iters: 5,
            alpha_start: 30.0,
            alpha_end: 8.0,
            window_mask_kl: 5,
            window_att: 18,
            window_iou: 18,
            tau_dis: DEFAULT_TAU_DIS,
            total_steps: 50,
            terms: ActiveTerms::ALL,
            normalize_mask: false,
            att_maps: AttentionMaps::Aggregated,
        }
    }
}

impl GuidanceConfig {
    pub fn validate(&self) -> Result<()> {
        self.weights.validate()?;
        let bad = |m: &str| Err(Error::Config(format!("guidance: {m}")));
        if self.k_iters == 0 {
            return bad("k_iters must be >= 1");
        }
        if self.total_steps == 0 {
            return bad("total_steps must be >= 1");
        }
        if [self.window_mask_kl, self.window_att, self.window_iou]
            .iter()
            .any(|&w| w > self.total_steps)
        {
            return bad("windows must lie within the step count");
        }
        if !(self.alpha_end > 0.0 && self.alpha_start >= self.alpha_end && self.alpha_start.is_finite()) {
            return bad("need alpha_start >= alpha_end > 0");
        }
        if !(self.tau_dis > 0.0) {
            return bad("tau_dis must be positive");
        }
        Ok(())
    }
}

/// Linearly decaying step size over the sampler steps.
pub fn alpha_schedule(step: usize, cfg: &GuidanceConfig) -> Result<f64> {
    if step >= cfg.total_steps {
        return Err(Error::Invalid(format!(
            "step {step} outside 0..{}",
            cfg.total_steps
        )));
    }
    if cfg.total_steps == 1 {
        return Ok(cfg.alpha_start);
    }
    let frac = step as f64 / (cfg.total_steps - 1) as f64;
    Ok(cfg.alpha_start + (cfg.alpha_end - cfg.alpha_start) * frac)
}

/// Terms whose window contains `step`, restricted by the ablation switches.
pub fn active_losses(step: usize, cfg: &GuidanceConfig) -> ActiveTerms {
    let windows = ActiveTerms {
        iou: step < cfg.window_iou,
        mask: step < cfg.window_mask_kl,
        kl: step < cfg.window_mask_kl,
        att: step < cfg.window_att,
    };
    windows.and(&cfg.terms)
}

/// Per-run context that does not change across refinement iterations.
pub struct GuidanceTarget<'a> {
    pub layout: &'a LayoutSpec,
    pub tokens: &'a [usize],
    /// Background mask at latent resolution.
    pub background: BinaryMask,
}

impl<'a> GuidanceTarget<'a> {
    pub fn new(layout: &'a LayoutSpec, tokens: &'a [usize]) -> Result<Self> {
        if layout.prompt.len() != tokens.len() {
            return Err(Error::Invalid(format!(
                "layout prompt has {} tokens, caption has {}",
                layout.prompt.len(),
                tokens.len()
            )));
        }
        let (_, background) = union_foreground(layout, IMAGE_SIZE, IMAGE_SIZE);
        Ok(Self {
            layout,
            tokens,
            background,
        })
    }
}

/// Value and latent gradient of the active objective.
#[derive(Debug, Clone, PartialEq)]
pub struct ObjectiveEval {
    pub breakdown: LossBreakdown,
    pub grad: Vec<f64>,
}

fn split_cross(bundle: &AttentionBundle) -> Result<Vec<AttentionBundle>> {
    bundle
        .cross
        .iter()
        .map(|m| AttentionBundle::new(bundle.h, bundle.w, bundle.n_tokens, bundle.timestep, vec![m.clone()], vec![]))
        .collect()
}

/// Association terms `(sim, dis)` and `w_sim·∇sim + w_dis·∇dis`.
fn association_terms(
    bundle: &AttentionBundle,
    layout: &LayoutSpec,
    cfg: &GuidanceConfig,
) -> Result<(f64, f64, BundleGrad)> {
    let w = &cfg.weights;
    match cfg.att_maps {
        AttentionMaps::Aggregated => {
            let (sim, mut g) = loss_sim_with_grad(bundle, layout)?;
            let (dis, gd) = loss_dis_with_grad(bundle, layout, cfg.tau_dis)?;
            g.scale(w.sim);
            g.add_scaled(&gd, w.dis);
            Ok((sim, dis, g))
        }
        AttentionMaps::PerMap => {
            let parts = split_cross(bundle)?;
            let inv = 1.0 / parts.len() as f64;
            let mut grad = BundleGrad::zeros_like(bundle);
            let (mut sim, mut dis) = (0.0, 0.0);
            for (m, part) in parts.iter().enumerate() {
                let (s, gs) = loss_sim_with_grad(part, layout)?;
                let (d, gd) = loss_dis_with_grad(part, layout, cfg.tau_dis)?;
                sim += s * inv;
                dis += d * inv;
                for ((o, a), b) in grad.cross[m].iter_mut().zip(&gs.cross[0]).zip(&gd.cross[0]) {
                    *o = inv * (w.sim * a + w.dis * b);
                }
            }
            Ok((sim, dis, grad))
        }
    }
}

/// Objective value and gradient with respect to `z`. `z_ref` is a constant.
pub fn gradient_of_total<D: AttentionDenoiser + ?Sized>(
    model: &D,
    z: &[f64],
    z_ref: &[f64],
    timestep: usize,
    target: &GuidanceTarget<'_>,
    cfg: &GuidanceConfig,
    active: ActiveTerms,
) -> Result<ObjectiveEval> {
    let mut comps = LossComponents::default();
    let mut grad = vec![0.0; z.len()];
    let w = &cfg.weights;

    if active.iou || (active.att && w.att > 0.0) {
        let probe = model.probe(z, timestep, target.tokens)?;
        let mut map_grad = BundleGrad::zeros_like(&probe.bundle);
        if active.iou {
            let (v, g) = iou_objective_with_grad(&probe.bundle, target.layout)?;
            comps.iou = v;
            map_grad.add_scaled(&g, 1.0);
        }
        if active.att {
            let (sim, dis, g) = association_terms(&probe.bundle, target.layout, cfg)?;
            comps.sim = sim;
            comps.dis = dis;
            map_grad.add_scaled(&g, w.att);
        }
        if !map_grad.is_zero() {
            let g = probe.pullback(&map_grad);
            for (o, x) in grad.iter_mut().zip(g) {
                *o += x;
            }
        }
    }
    if active.mask {
        let (v, g) = loss_mask_with_grad(z, z_ref, &target.background, cfg.normalize_mask)?;
        comps.mask = v;
        for (o, x) in grad.iter_mut().zip(g) {
            *o += w.mask * x;
        }
    }
    if active.kl {
        let (v, g) = loss_kl_prior_with_grad(z)?;
        comps.kl = v;
        for (o, x) in grad.iter_mut().zip(g) {
            *o += w.kl * x;
        }
    }
    let breakdown = total_loss(&comps, w, active)?;
    if !breakdown.total.is_finite() {
        return Err(Error::NonFinite(format!("objective at t={timestep}")));
    }
    if grad.iter().any(|g| !g.is_finite()) {
        return Err(Error::NonFinite(format!("gradient at t={timestep}")));
    }
    Ok(ObjectiveEval { breakdown, grad })
}

/// Runs the `k` refinement iterations of sampler step `step`. Iterations
/// whose gradient is non-finite leave the latent unchanged and are recorded
/// as skipped.
pub fn refine_latent<D: AttentionDenoiser + ?Sized>(
    model: &D,
    z: &[f64],
    step: usize,
    timestep: usize,
    target: &GuidanceTarget<'_>,
    cfg: &GuidanceConfig,
    trace: &mut Vec<IterationRecord>,
) -> Result<Vec<f64>> {
    let active = active_losses(step, cfg);
    if !active.any() {
        return Ok(z.to_vec());
    }
    let alpha = alpha_schedule(step, cfg)?;
    let z_ref = z.to_vec();
    let mut cur = z.to_vec();
    for k in 0..cfg.k_iters {
        match gradient_of_total(model, &cur, &z_ref, timestep, target, cfg, active) {
            Ok(eval) => {
                let norm = eval.grad.iter().map(|g| g * g).sum::<f64>().sqrt();
                for (x, g) in cur.iter_mut().zip(&eval.grad) {
                    *x -= alpha * g;
                }
                trace.push(IterationRecord {
                    step,
                    timestep,
                    iteration: k,
                    alpha,
                    losses: eval.breakdown,
                    grad_norm: norm,
                    skipped: false,
                });
            }
            Err(Error::NonFinite(_)) => trace.push(IterationRecord {
                step,
                timestep,
                iteration: k,
                alpha,
                losses: LossBreakdown {
                    active,
                    ..LossBreakdown::default()
                },
                grad_norm: f64::NAN,
                skipped: true,
            }),
            Err(e) => return Err(e),
        }
    }
    Ok(cur)
}

/// Channel count and plane size the guidance expects of a latent.
pub const LATENT_SHAPE: (usize, usize, usize) = (CHANNELS, IMAGE_SIZE, IMAGE_SIZE);
