//! Guidance losses over attention maps and latents.
//!
//! Every loss has a plain value function and a `*_with_grad` variant that also
//! returns the exact gradient with respect to its tensor inputs (attention
//! maps or the latent). The guidance loop pulls the attention-map gradients
//! back through the denoiser; the latent gradients are added directly.

use serde::{Deserialize, Serialize};

use crate::attention::{
    aggregate_cross, aggregate_cross_adjoint, aggregate_self, aggregate_self_adjoint,
    extract_patch_adjoint, extract_patch_masked, AggregatedMap, AttentionBundle, BundleGrad,
    PatchDistribution, EPS_NORM,
};
use crate::error::{Error, Result};
use crate::layout::{rasterize_mask, BinaryMask, LayoutSpec};

/// Smoothing added to both distributions before any log in [`sym_kl`].
pub const EPS_KL: f64 = 1e-10;
/// Floor on the latent standard deviation in [`loss_kl_prior`].
pub const EPS_SIGMA: f64 = 1e-6;
pub const DEFAULT_TAU_DIS: f64 = 10.0;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LossWeights {
    pub mask: f64,
    pub kl: f64,
    pub sim: f64,
    pub dis: f64,
    pub att: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            mask: 0.01,
            kl: 5.0,
            sim: 1.0,
            dis: 1.0,
            att: 1.0,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        let all = [self.mask, self.kl, self.sim, self.dis, self.att];
        if all.iter().any(|w| !w.is_finite() || *w < 0.0) {
            return Err(Error::Invalid(format!("loss weights must be finite and >= 0: {self:?}")));
        }
        Ok(())
    }
}

/// Which terms of the objective are switched on.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ActiveTerms {
    pub iou: bool,
    pub mask: bool,
    pub kl: bool,
    pub att: bool,
}

impl ActiveTerms {
    pub const ALL: Self = Self {
        iou: true,
        mask: true,
        kl: true,
        att: true,
    };
    pub const NONE: Self = Self {
        iou: false,
        mask: false,
        kl: false,
        att: false,
    };

    pub fn any(&self) -> bool {
        self.iou || self.mask || self.kl || self.att
    }

    /// Elementwise AND, used to combine step windows with ablation toggles.
    pub fn and(&self, other: &Self) -> Self {
        Self {
            iou: self.iou && other.iou,
            mask: self.mask && other.mask,
            kl: self.kl && other.kl,
            att: self.att && other.att,
        }
    }
}

/// Raw (unweighted) loss values computed on the same step.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct LossComponents {
    pub iou: f64,
    pub mask: f64,
    pub kl: f64,
    pub sim: f64,
    pub dis: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub iou: f64,
    pub mask: f64,
    pub kl: f64,
    pub sim: f64,
    pub dis: f64,
    /// `λ_sim·sim + λ_dis·dis`.
    pub att: f64,
    pub total: f64,
    pub active: ActiveTerms,
}

/// `L = L_iou + λ_mask·L_mask + λ_KL·L_KL + λ_att·(λ_sim·L_sim + λ_dis·L_dis)`.
/// Inactive terms are reported as zero and contribute nothing.
pub fn total_loss(c: &LossComponents, w: &LossWeights, active: ActiveTerms) -> Result<LossBreakdown> {
    w.validate()?;
    let iou = if active.iou { c.iou } else { 0.0 };
    let mask = if active.mask { c.mask } else { 0.0 };
    let kl = if active.kl { c.kl } else { 0.0 };
    let (sim, dis) = if active.att { (c.sim, c.dis) } else { (0.0, 0.0) };
    let att = w.sim * sim + w.dis * dis;
    let total = iou + w.mask * mask + w.kl * kl + w.att * att;
    Ok(LossBreakdown {
        iou,
        mask,
        kl,
        sim,
        dis,
        att,
        total,
        active,
    })
}

/// Attend-and-excite neglect score: the worst subject's `1 − max` cross
/// attention. A baseline diagnostic; not part of the guidance objective.
pub fn loss_attend_excite(bundle: &AttentionBundle, layout: &LayoutSpec) -> Result<f64> {
    let mut worst = f64::NEG_INFINITY;
    for b in &layout.bindings {
        let map = aggregate_cross(bundle, &b.subject_tokens)?;
        let peak = map.values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        worst = worst.max(1.0 - peak);
    }
    Ok(worst)
}

/// One subject's IoU term `1 − I / (I + γ·O)` with `I`/`O` the map mass
/// inside/outside the mask. Also returns `(dL/dI, dL/dO)`.
fn iou_term_parts(values: &[f64], mask: &BinaryMask, gamma: f64) -> (f64, f64, f64) {
    let mut inside = 0.0;
    let mut outside = 0.0;
    for (&v, &m) in values.iter().zip(mask.cells()) {
        if m {
            inside += v;
        } else {
            outside += v;
        }
    }
    let denom = inside + gamma * outside;
    if denom < EPS_NORM {
        return (1.0, 0.0, 0.0);
    }
    let l = 1.0 - inside / denom;
    let d_inside = -gamma * outside / (denom * denom);
    let d_outside = gamma * inside / (denom * denom);
    (l, d_inside, d_outside)
}

pub fn iou_term(values: &[f64], mask: &BinaryMask, gamma: f64) -> f64 {
    iou_term_parts(values, mask, gamma).0
}

fn check_map_resolution(map: &AggregatedMap, expected: (usize, usize)) -> Result<()> {
    if (map.h, map.w) != expected || map.values.len() != map.h * map.w {
        return Err(Error::Shape(format!(
            "aggregated map {}x{} ({} values) vs layout rasterization {}x{}",
            map.h,
            map.w,
            map.values.len(),
            expected.0,
            expected.1
        )));
    }
    Ok(())
}

/// `Σᵢ Lᵢ²` over one set of per-subject maps (one map per binding, in order).
pub fn loss_iou(maps: &[AggregatedMap], layout: &LayoutSpec) -> Result<f64> {
    loss_iou_with_grad(maps, layout).map(|(l, _)| l)
}

pub fn loss_iou_with_grad(maps: &[AggregatedMap], layout: &LayoutSpec) -> Result<(f64, Vec<Vec<f64>>)> {
    if maps.len() != layout.bindings.len() {
        return Err(Error::Shape(format!(
            "{} maps for {} bindings",
            maps.len(),
            layout.bindings.len()
        )));
    }
    let gamma = layout.gamma() as f64;
    let mut total = 0.0;
    let mut grads = Vec::with_capacity(maps.len());
    for (map, b) in maps.iter().zip(&layout.bindings) {
        check_map_resolution(map, (maps[0].h, maps[0].w))?;
        let mask = rasterize_mask(&b.bbox, map.h, map.w);
        let (l, di, d_o) = iou_term_parts(&map.values, &mask, gamma);
        total += l * l;
        grads.push(
            mask.cells()
                .iter()
                .map(|&m| 2.0 * l * if m { di } else { d_o })
                .collect(),
        );
    }
    Ok((total, grads))
}

fn check_latent(z: &[f64], z_ref: &[f64], mask: &BinaryMask) -> Result<usize> {
    if z.len() != z_ref.len() {
        return Err(Error::Shape(format!("latent {} vs reference {}", z.len(), z_ref.len())));
    }
    let plane = mask.len();
    if plane == 0 || z.len() % plane != 0 {
        return Err(Error::Shape(format!(
            "latent of {} values is not a whole number of {}x{} planes",
            z.len(),
            mask.h,
            mask.w
        )));
    }
    Ok(z.len() / plane)
}

/// `‖(z − z_ref) ⊙ M̄‖₁` with the background mask broadcast over channels
/// (latent layout: channel-major planes). With `normalize`, divides by the
/// latent element count.
pub fn loss_mask(z: &[f64], z_ref: &[f64], background: &BinaryMask, normalize: bool) -> Result<f64> {
    loss_mask_with_grad(z, z_ref, background, normalize).map(|(l, _)| l)
}

/// Gradient uses `sign(0) = 0`.
pub fn loss_mask_with_grad(
    z: &[f64],
    z_ref: &[f64],
    background: &BinaryMask,
    normalize: bool,
) -> Result<(f64, Vec<f64>)> {
    check_latent(z, z_ref, background)?;
    let plane = background.len();
    let scale = if normalize { 1.0 / z.len() as f64 } else { 1.0 };
    let mut total = 0.0;
    let mut grad = vec![0.0; z.len()];
    for (i, (&a, &b)) in z.iter().zip(z_ref).enumerate() {
        if background.cells()[i % plane] {
            let d = a - b;
            total += d.abs();
            grad[i] = if d > 0.0 {
                scale
            } else if d < 0.0 {
                -scale
            } else {
                0.0
            };
        }
    }
    Ok((total * scale, grad))
}

/// `D_KL(N(μ, σ) ‖ N(0, 1)) = ln(1/σ) + (σ² + μ² − 1)/2` with `μ`, `σ` the
/// scalar mean and population standard deviation over all latent elements.
pub fn loss_kl_prior(z: &[f64]) -> Result<f64> {
    loss_kl_prior_with_grad(z).map(|(l, _)| l)
}

pub fn loss_kl_prior_with_grad(z: &[f64]) -> Result<(f64, Vec<f64>)> {
    if z.len() < 2 {
        return Err(Error::Invalid("KL prior needs at least two latent elements".into()));
    }
    let n = z.len() as f64;
    let mu = z.iter().sum::<f64>() / n;
    let var = z.iter().map(|x| (x - mu) * (x - mu)).sum::<f64>() / n;
    let raw_sigma = var.sqrt();
    let floored = raw_sigma < EPS_SIGMA;
    let sigma = if floored { EPS_SIGMA } else { raw_sigma };
    let loss = -sigma.ln() + (sigma * sigma + mu * mu - 1.0) / 2.0;
    let d_mu = mu / n;
    let d_sigma = if floored { 0.0 } else { (sigma - 1.0 / sigma) / (n * sigma) };
    let grad = z.iter().map(|&x| d_mu + d_sigma * (x - mu)).collect();
    Ok((loss, grad))
}

fn smooth(p: &[f64]) -> (Vec<f64>, f64) {
    let s: f64 = p.iter().map(|x| x + EPS_KL).sum();
    (p.iter().map(|x| (x + EPS_KL) / s).collect(), s)
}

/// Symmetric KL, `½ KL(P‖Q) + ½ KL(Q‖P)`, written as
/// `½ Σ (p − q)(ln p − ln q)` on ε-smoothed, renormalized inputs. The
/// summand is invariant under swapping `p` and `q` bit-for-bit.
pub fn sym_kl(p: &[f64], q: &[f64]) -> Result<f64> {
    if p.len() != q.len() {
        return Err(Error::Shape(format!("sym_kl lengths {} vs {}", p.len(), q.len())));
    }
    let (ps, _) = smooth(p);
    let (qs, _) = smooth(q);
    Ok(0.5
        * ps.iter()
            .zip(&qs)
            .map(|(&a, &b)| (a - b) * (a.ln() - b.ln()))
            .sum::<f64>())
}

pub fn sym_kl_with_grad(p: &[f64], q: &[f64]) -> Result<(f64, Vec<f64>, Vec<f64>)> {
    let value = sym_kl(p, q)?;
    let (ps, sp) = smooth(p);
    let (qs, sq) = smooth(q);
    // Gradient w.r.t. the smoothed values, then through the renormalization.
    let gps: Vec<f64> = ps
        .iter()
        .zip(&qs)
        .map(|(&a, &b)| 0.5 * ((a.ln() - b.ln()) + (a - b) / a))
        .collect();
    let gqs: Vec<f64> = ps
        .iter()
        .zip(&qs)
        .map(|(&a, &b)| 0.5 * ((b.ln() - a.ln()) + (b - a) / b))
        .collect();
    let renorm = |g: &[f64], s: &[f64], sum: f64| -> Vec<f64> {
        let dot: f64 = g.iter().zip(s).map(|(a, b)| a * b).sum();
        g.iter().map(|&gi| (gi - dot) / sum).collect()
    };
    Ok((value, renorm(&gps, &ps, sp), renorm(&gqs, &qs, sq)))
}

struct PatchPair {
    subject_tokens: Vec<usize>,
    subject: PatchDistribution,
    attribute_tokens: Vec<usize>,
    attribute: PatchDistribution,
}

fn patch_for(bundle: &AttentionBundle, tokens: &[usize], mask: &BinaryMask) -> Result<PatchDistribution> {
    let map = aggregate_cross(bundle, tokens)?;
    Ok(extract_patch_masked(&map, mask))
}

/// Accumulates the gradient of `weight · sym_kl(pair)` into `grad`.
fn pair_adjoint(bundle: &AttentionBundle, pair: &PatchPair, weight: f64, grad: &mut BundleGrad) -> Result<()> {
    let (_, gp, gq) = sym_kl_with_grad(&pair.subject.values, &pair.attribute.values)?;
    let hw = bundle.hw();
    for (patch, g, tokens) in [
        (&pair.subject, gp, &pair.subject_tokens),
        (&pair.attribute, gq, &pair.attribute_tokens),
    ] {
        let scaled: Vec<f64> = g.iter().map(|x| x * weight).collect();
        let mut map_grad = vec![0.0; hw];
        extract_patch_adjoint(patch, &scaled, &mut map_grad);
        aggregate_cross_adjoint(tokens, &map_grad, grad, bundle.n_tokens);
    }
    Ok(())
}

fn similarity_pairs(bundle: &AttentionBundle, layout: &LayoutSpec) -> Result<Vec<PatchPair>> {
    let mut pairs = Vec::new();
    for b in layout.bindings.iter().filter(|b| !b.attribute_tokens.is_empty()) {
        let mask = rasterize_mask(&b.bbox, bundle.h, bundle.w);
        pairs.push(PatchPair {
            subject_tokens: b.subject_tokens.clone(),
            subject: patch_for(bundle, &b.subject_tokens, &mask)?,
            attribute_tokens: b.attribute_tokens.clone(),
            attribute: patch_for(bundle, &b.attribute_tokens, &mask)?,
        });
    }
    Ok(pairs)
}

fn dissimilarity_pairs(bundle: &AttentionBundle, layout: &LayoutSpec) -> Result<Vec<PatchPair>> {
    let mut pairs = Vec::new();
    for (i, bi) in layout.bindings.iter().enumerate() {
        let mask = rasterize_mask(&bi.bbox, bundle.h, bundle.w);
        let subject = patch_for(bundle, &bi.subject_tokens, &mask)?;
        for (j, bj) in layout.bindings.iter().enumerate() {
            if i == j || bj.attribute_tokens.is_empty() {
                continue;
            }
            pairs.push(PatchPair {
                subject_tokens: bi.subject_tokens.clone(),
                subject: subject.clone(),
                attribute_tokens: bj.attribute_tokens.clone(),
                attribute: patch_for(bundle, &bj.attribute_tokens, &mask)?,
            });
        }
    }
    Ok(pairs)
}

/// Mean over attributed subjects of `D_sym(subject patch, attribute patch)`
/// inside the subject's box; 0 when no subject has attributes.
pub fn loss_sim(bundle: &AttentionBundle, layout: &LayoutSpec) -> Result<f64> {
    let pairs = similarity_pairs(bundle, layout)?;
    if pairs.is_empty() {
        return Ok(0.0);
    }
    let mut total = 0.0;
    for p in &pairs {
        total += sym_kl(&p.subject.values, &p.attribute.values)?;
    }
    Ok(total / pairs.len() as f64)
}

pub fn loss_sim_with_grad(bundle: &AttentionBundle, layout: &LayoutSpec) -> Result<(f64, BundleGrad)> {
    let value = loss_sim(bundle, layout)?;
    let mut grad = BundleGrad::zeros_like(bundle);
    let pairs = similarity_pairs(bundle, layout)?;
    let w = 1.0 / pairs.len().max(1) as f64;
    for p in &pairs {
        pair_adjoint(bundle, p, w, &mut grad)?;
    }
    Ok((value, grad))
}

/// Mean over ordered pairs `(i, j)`, `j ≠ i`, `aⱼ ≠ ∅` of
/// `−min(D_sym(patch(sᵢ, bᵢ), patch(aⱼ, bᵢ)), τ)`; 0 when there are no pairs.
pub fn loss_dis(bundle: &AttentionBundle, layout: &LayoutSpec, tau: f64) -> Result<f64> {
    loss_dis_with_grad_opt(bundle, layout, tau, false).map(|(v, _)| v)
}

pub fn loss_dis_with_grad(bundle: &AttentionBundle, layout: &LayoutSpec, tau: f64) -> Result<(f64, BundleGrad)> {
    loss_dis_with_grad_opt(bundle, layout, tau, true).map(|(v, g)| (v, g.expect("requested")))
}

fn loss_dis_with_grad_opt(
    bundle: &AttentionBundle,
    layout: &LayoutSpec,
    tau: f64,
    want_grad: bool,
) -> Result<(f64, Option<BundleGrad>)> {
    if !(tau > 0.0) {
        return Err(Error::Invalid(format!("tau_dis must be positive, got {tau}")));
    }
    let pairs = dissimilarity_pairs(bundle, layout)?;
    let mut grad = want_grad.then(|| BundleGrad::zeros_like(bundle));
    if pairs.is_empty() {
        return Ok((0.0, grad));
    }
    let w = 1.0 / pairs.len() as f64;
    let mut total = 0.0;
    for p in &pairs {
        let d = sym_kl(&p.subject.values, &p.attribute.values)?;
        if d >= tau {
            total -= tau;
        } else {
            total -= d;
            if let Some(g) = grad.as_mut() {
                pair_adjoint(bundle, p, -w, g)?;
            }
        }
    }
    Ok((total * w, grad))
}

/// Per-subject aggregated cross maps (subject tokens) in binding order.
pub fn subject_cross_maps(bundle: &AttentionBundle, layout: &LayoutSpec) -> Result<Vec<AggregatedMap>> {
    layout
        .bindings
        .iter()
        .map(|b| aggregate_cross(bundle, &b.subject_tokens))
        .collect()
}

/// Per-subject aggregated self maps (rows restricted to each box).
pub fn subject_self_maps(bundle: &AttentionBundle, layout: &LayoutSpec) -> Result<Vec<AggregatedMap>> {
    layout
        .bindings
        .iter()
        .map(|b| aggregate_self(bundle, &rasterize_mask(&b.bbox, bundle.h, bundle.w)))
        .collect()
}

/// The two IoU instances (cross + self) summed, with the bundle gradient.
pub fn iou_objective_with_grad(bundle: &AttentionBundle, layout: &LayoutSpec) -> Result<(f64, BundleGrad)> {
    let mut grad = BundleGrad::zeros_like(bundle);
    let cross = subject_cross_maps(bundle, layout)?;
    let selfs = subject_self_maps(bundle, layout)?;
    let (lc, gc) = loss_iou_with_grad(&cross, layout)?;
    let (ls, gs) = loss_iou_with_grad(&selfs, layout)?;
    for ((b, g_cross), g_self) in layout.bindings.iter().zip(&gc).zip(&gs) {
        aggregate_cross_adjoint(&b.subject_tokens, g_cross, &mut grad, bundle.n_tokens);
        let mask = rasterize_mask(&b.bbox, bundle.h, bundle.w);
        aggregate_self_adjoint(&mask, g_self, &mut grad);
    }
    Ok((lc + ls, grad))
}
