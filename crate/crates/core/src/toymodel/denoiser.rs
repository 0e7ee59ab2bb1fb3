//! Patch transformer that predicts the noise in a 32×32 RGB latent.
//!
//! The image is cut into 4×4 patches (one token per patch). Each block
//! applies self-attention over patches, cross-attention from patches to the
//! caption tokens, and a feed-forward layer, each behind a layer norm whose
//! scale and shift come from the timestep embedding. The softmax outputs of
//! every attention head are kept on the tape so losses on them can be pulled
//! back to the input.

use std::collections::HashMap;

use serde::{Deserialize, Serialize};

use super::vocab::{MAX_TOKENS, VOCAB_SIZE};
use crate::attention::{AttentionBundle, BundleGrad};
use crate::autodiff::{Mat, Scalar, Tape, Var};
use crate::error::{Error, Result};
use crate::image_io::{CHANNELS, IMAGE_SIZE, LATENT_LEN};
use crate::rng::SeededRng;

const LN_EPS: f64 = 1e-5;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DenoiserConfig {
    pub d_model: usize,
    pub n_blocks: usize,
    pub n_heads: usize,
    pub patch: usize,
    pub ffn_mult: usize,
    /// Add learned position embeddings to caption tokens. Off, the caption
    /// is a bag of words.
    pub text_positions: bool,
    pub prediction: Prediction,
}

/// What the network output means. The sampler always sees noise; the
/// conversion needs the cumulative signal level `ᾱ` of the timestep.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Prediction {
    /// The noise `ε` itself.
    Epsilon,
    /// `v = √ᾱ·ε − √(1−ᾱ)·x₀`, so that `ε = √ᾱ·v + √(1−ᾱ)·z`.
    #[default]
    Velocity,
}

impl Prediction {
    /// Regression target for clean image `x0` and noise `eps`.
    pub fn target(self, x0: &[f64], eps: &[f64], alpha_bar: f64) -> Vec<f64> {
        match self {
            Prediction::Epsilon => eps.to_vec(),
            Prediction::Velocity => {
                let (sa, sn) = (alpha_bar.sqrt(), (1.0 - alpha_bar).sqrt());
                x0.iter().zip(eps).map(|(x, e)| sa * e - sn * x).collect()
            }
        }
    }

    /// Noise implied by network output `out` at latent `z`.
    pub fn to_noise(self, out: &[f64], z: &[f64], alpha_bar: f64) -> Vec<f64> {
        match self {
            Prediction::Epsilon => out.to_vec(),
            Prediction::Velocity => {
                let (sa, sn) = (alpha_bar.sqrt(), (1.0 - alpha_bar).sqrt());
                out.iter().zip(z).map(|(v, z)| sa * v + sn * z).collect()
            }
        }
    }
}

impl Default for DenoiserConfig {
    fn default() -> Self {
        Self {
            d_model: 64,
            n_blocks: 4,
            n_heads: 2,
            patch: 4,
            ffn_mult: 2,
            text_positions: true,
            prediction: Prediction::default(),
        }
    }
}

impl DenoiserConfig {
    pub fn validate(&self) -> Result<()> {
        let ok = self.d_model > 0
            && self.n_blocks > 0
            && self.n_heads > 0
            && self.d_model % self.n_heads == 0
            && self.patch > 0
            && IMAGE_SIZE % self.patch == 0
            && self.ffn_mult > 0;
        if ok {
            Ok(())
        } else {
            Err(Error::Config(format!("invalid denoiser shape: {self:?}")))
        }
    }

    pub fn grid(&self) -> usize {
        IMAGE_SIZE / self.patch
    }

    pub fn n_patches(&self) -> usize {
        self.grid() * self.grid()
    }

    pub fn patch_dim(&self) -> usize {
        CHANNELS * self.patch * self.patch
    }

    pub fn head_dim(&self) -> usize {
        self.d_model / self.n_heads
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
enum Init {
    Zeros,
    Normal(f64),
    /// Row and column sinusoids of each patch's grid position.
    Grid,
}

fn param_specs(cfg: &DenoiserConfig) -> Vec<(String, usize, usize, Init)> {
    let d = cfg.d_model;
    let pd = cfg.patch_dim();
    let w = |fan_in: usize| Init::Normal(1.0 / (fan_in as f64).sqrt());
    let mut v = vec![
        ("patch_in.w".to_string(), pd, d, w(pd)),
        ("patch_in.b".to_string(), 1, d, Init::Zeros),
        ("patch_pos".to_string(), cfg.n_patches(), d, Init::Grid),
        ("time.w1".to_string(), d, d, w(d)),
        ("time.b1".to_string(), 1, d, Init::Zeros),
        ("time.w2".to_string(), d, d, w(d)),
        ("time.b2".to_string(), 1, d, Init::Zeros),
        ("tok_emb".to_string(), VOCAB_SIZE, d, Init::Normal(1.0)),
    ];
    if cfg.text_positions {
        v.push(("text_pos".to_string(), MAX_TOKENS, d, Init::Normal(0.5)));
    }
    for b in 0..cfg.n_blocks {
        let p = |s: &str| format!("block{b}.{s}");
        let hidden = cfg.ffn_mult * d;
        v.extend([
            (p("mod.w"), d, 6 * d, Init::Zeros),
            (p("mod.b"), 1, 6 * d, Init::Zeros),
            (p("self.qkv"), d, 3 * d, w(d)),
            (p("self.out"), d, d, w(d)),
            (p("self.out_b"), 1, d, Init::Zeros),
            (p("cross.q"), d, d, w(d)),
            (p("cross.kv"), d, 2 * d, w(d)),
            (p("cross.out"), d, d, w(d)),
            (p("cross.out_b"), 1, d, Init::Zeros),
            (p("ffn.w1"), d, hidden, w(d)),
            (p("ffn.b1"), 1, hidden, Init::Zeros),
            (p("ffn.w2"), hidden, d, w(hidden)),
            (p("ffn.b2"), 1, d, Init::Zeros),
        ]);
    }
    v.extend([
        ("final.mod.w".to_string(), d, 2 * d, Init::Zeros),
        ("final.mod.b".to_string(), 1, 2 * d, Init::Zeros),
        ("out.w".to_string(), d, pd, Init::Zeros),
        ("out.b".to_string(), 1, pd, Init::Zeros),
    ]);
    v
}

/// Named `rows × cols` parameter tensor.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    pub name: String,
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<f32>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DenoiserWeights {
    pub config: DenoiserConfig,
    pub tensors: Vec<Tensor>,
    index: HashMap<String, usize>,
}

/// Which leaves of a recorded forward pass receive gradients.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct GradMode {
    pub input: bool,
    pub params: bool,
}

/// A forward pass kept alive for one or more backward sweeps.
pub struct Recording<T> {
    pub tape: Tape<T>,
    pub input: Var,
    pub output: Var,
    pub params: Vec<Var>,
    /// Softmax nodes in (block, head) order.
    pub cross: Vec<Var>,
    pub self_attn: Vec<Var>,
    pub n_tokens: usize,
    grid: usize,
    patch: usize,
}

/// Reorders a channel-major latent into `patches × (c·p·p)` rows.
pub fn patchify(z: &[f64], patch: usize) -> Vec<f64> {
    let grid = IMAGE_SIZE / patch;
    let pd = CHANNELS * patch * patch;
    let mut out = vec![0.0; grid * grid * pd];
    for c in 0..CHANNELS {
        for y in 0..IMAGE_SIZE {
            for x in 0..IMAGE_SIZE {
                let p = (y / patch) * grid + x / patch;
                let f = c * patch * patch + (y % patch) * patch + x % patch;
                out[p * pd + f] = z[c * IMAGE_SIZE * IMAGE_SIZE + y * IMAGE_SIZE + x];
            }
        }
    }
    out
}

/// Inverse of [`patchify`].
pub fn unpatchify(p: &[f64], patch: usize) -> Vec<f64> {
    let grid = IMAGE_SIZE / patch;
    let pd = CHANNELS * patch * patch;
    let mut z = vec![0.0; LATENT_LEN];
    for c in 0..CHANNELS {
        for y in 0..IMAGE_SIZE {
            for x in 0..IMAGE_SIZE {
                let q = (y / patch) * grid + x / patch;
                let f = c * patch * patch + (y % patch) * patch + x % patch;
                z[c * IMAGE_SIZE * IMAGE_SIZE + y * IMAGE_SIZE + x] = p[q * pd + f];
            }
        }
    }
    z
}

/// Sinusoidal embedding of a (possibly fractional) timestep.
pub fn time_embedding(t: f64, dim: usize) -> Vec<f64> {
    let half = dim / 2;
    let mut out = vec![0.0; dim];
    for i in 0..half {
        let freq = (-(10_000f64).ln() * i as f64 / half as f64).exp();
        out[i] = (t * freq).sin();
        out[half + i] = (t * freq).cos();
    }
    out
}

/// 2D sinusoidal position table, one row per patch in raster order.
fn grid_embedding(grid: usize, dim: usize) -> Vec<f32> {
    let half = dim / 2;
    let mut out = Vec::with_capacity(grid * grid * dim);
    for r in 0..grid {
        for c in 0..grid {
            let mut row = time_embedding(r as f64, half);
            row.extend(time_embedding(c as f64, dim - half));
            out.extend(row.iter().map(|&x| x as f32));
        }
    }
    out
}

impl DenoiserWeights {
    pub fn from_tensors(config: DenoiserConfig, tensors: Vec<Tensor>) -> Result<Self> {
        config.validate()?;
        let specs = param_specs(&config);
        if specs.len() != tensors.len() {
            return Err(Error::Shape(format!(
                "expected {} tensors, got {}",
                specs.len(),
                tensors.len()
            )));
        }
        for ((name, rows, cols, _), t) in specs.iter().zip(&tensors) {
            if *name != t.name || *rows != t.rows || *cols != t.cols || t.data.len() != rows * cols {
                return Err(Error::Shape(format!(
                    "tensor {} {}x{} does not match expected {name} {rows}x{cols}",
                    t.name, t.rows, t.cols
                )));
            }
        }
        let index = tensors
            .iter()
            .enumerate()
            .map(|(i, t)| (t.name.clone(), i))
            .collect();
        Ok(Self {
            config,
            tensors,
            index,
        })
    }

    /// Fresh weights. Modulation and output projections start at zero so the
    /// untrained model predicts zero noise.
    pub fn init(config: DenoiserConfig, rng: &mut SeededRng) -> Result<Self> {
        config.validate()?;
        let tensors = param_specs(&config)
            .into_iter()
            .map(|(name, rows, cols, init)| {
                let data = match init {
                    Init::Zeros => vec![0.0; rows * cols],
                    Init::Normal(std) => (0..rows * cols).map(|_| (rng.normal() * std) as f32).collect(),
                    Init::Grid => grid_embedding(config.grid(), cols),
                };
                Tensor {
                    name,
                    rows,
                    cols,
                    data,
                }
            })
            .collect();
        Self::from_tensors(config, tensors)
    }

    /// Adds Gaussian noise to every parameter, including the zero-initialized
    /// ones. Used to get a generic network for gradient checks.
    pub fn perturb(&mut self, rng: &mut SeededRng, std: f64) {
        for t in &mut self.tensors {
            for x in &mut t.data {
                *x += (rng.normal() * std) as f32;
            }
        }
    }

    pub fn param_count(&self) -> usize {
        self.tensors.iter().map(|t| t.data.len()).sum()
    }

    fn tensor(&self, name: &str) -> usize {
        self.index[name]
    }

    fn check_tokens(&self, tokens: &[usize]) -> Result<()> {
        if tokens.is_empty() || tokens.len() > MAX_TOKENS {
            return Err(Error::Invalid(format!(
                "caption length {} outside 1..={MAX_TOKENS}",
                tokens.len()
            )));
        }
        if let Some(&bad) = tokens.iter().find(|&&t| t >= VOCAB_SIZE) {
            return Err(Error::TokenId(bad));
        }
        Ok(())
    }

    /// Records a forward pass at timestep `t` on the tape.
    pub fn record<T: Scalar>(&self, z: &[f64], t: f64, tokens: &[usize], mode: GradMode) -> Result<Recording<T>> {
        if z.len() != LATENT_LEN {
            return Err(Error::Shape(format!("latent has {} values, expected {LATENT_LEN}", z.len())));
        }
        self.check_tokens(tokens)?;
        let cfg = &self.config;
        let d = cfg.d_model;
        let np = cfg.n_patches();
        let hd = cfg.head_dim();
        let attn_scale = T::lit(1.0 / (hd as f64).sqrt());
        let ln_eps = T::lit(LN_EPS);
        let n = tokens.len();

        let mut tape = Tape::<T>::new();
        let params: Vec<Var> = self
            .tensors
            .iter()
            .map(|t| {
                let data = t.data.iter().map(|&x| T::lit(x as f64)).collect();
                tape.leaf(Mat::from_vec(t.rows, t.cols, data), mode.params)
            })
            .collect();
        let p = |name: &str| params[self.tensor(name)];

        let input = tape.leaf(Mat::from_f64(np, cfg.patch_dim(), &patchify(z, cfg.patch)), mode.input);

        // Timestep conditioning vector.
        let temb = tape.leaf(Mat::from_f64(1, d, &time_embedding(t, d)), false);
        let h = tape.matmul(temb, p("time.w1"));
        let h = tape.add_row(h, p("time.b1"));
        let h = tape.silu(h);
        let h = tape.matmul(h, p("time.w2"));
        let h = tape.add_row(h, p("time.b2"));
        let cond = tape.silu(h);

        // Caption context.
        let mut ctx = tape.gather_rows(p("tok_emb"), tokens);
        if cfg.text_positions {
            let positions: Vec<usize> = (0..n).collect();
            let pos = tape.gather_rows(p("text_pos"), &positions);
            ctx = tape.add(ctx, pos);
        }

        let x = tape.matmul(input, p("patch_in.w"));
        let x = tape.add_row(x, p("patch_in.b"));
        let mut x = tape.add(x, p("patch_pos"));

        let mut cross = Vec::with_capacity(cfg.n_blocks * cfg.n_heads);
        let mut self_attn = Vec::with_capacity(cfg.n_blocks * cfg.n_heads);

        for b in 0..cfg.n_blocks {
            let name = |s: &str| format!("block{b}.{s}");
            let m = tape.matmul(cond, p(&name("mod.w")));
            let m = tape.add_row(m, p(&name("mod.b")));
            let modulated = |tape: &mut Tape<T>, x: Var, slot: usize| {
                let shift = tape.slice_cols(m, 2 * slot * d, d);
                let scale = tape.slice_cols(m, (2 * slot + 1) * d, d);
                let scale = tape.add_scalar(scale, T::one());
                let h = tape.layer_norm_rows(x, ln_eps);
                let h = tape.mul_row(h, scale);
                tape.add_row(h, shift)
            };

            // Self-attention over patches.
            let h = modulated(&mut tape, x, 0);
            let qkv = tape.matmul(h, p(&name("self.qkv")));
            let mut heads = Vec::with_capacity(cfg.n_heads);
            for head in 0..cfg.n_heads {
                let q = tape.slice_cols(qkv, head * hd, hd);
                let k = tape.slice_cols(qkv, d + head * hd, hd);
                let v = tape.slice_cols(qkv, 2 * d + head * hd, hd);
                let s = tape.matmul_t(q, k);
                let s = tape.scale(s, attn_scale);
                let a = tape.softmax_rows(s);
                self_attn.push(a);
                heads.push(tape.matmul(a, v));
            }
            let o = if heads.len() == 1 { heads[0] } else { tape.concat_cols(&heads) };
            let o = tape.matmul(o, p(&name("self.out")));
            let o = tape.add_row(o, p(&name("self.out_b")));
            x = tape.add(x, o);

            // Cross-attention from patches to caption tokens.
            let h = modulated(&mut tape, x, 1);
            let q_all = tape.matmul(h, p(&name("cross.q")));
            let kv = tape.matmul(ctx, p(&name("cross.kv")));
            let mut heads = Vec::with_capacity(cfg.n_heads);
            for head in 0..cfg.n_heads {
                let q = tape.slice_cols(q_all, head * hd, hd);
                let k = tape.slice_cols(kv, head * hd, hd);
                let v = tape.slice_cols(kv, d + head * hd, hd);
                let s = tape.matmul_t(q, k);
                let s = tape.scale(s, attn_scale);
                let a = tape.softmax_rows(s);
                cross.push(a);
                heads.push(tape.matmul(a, v));
            }
            let o = if heads.len() == 1 { heads[0] } else { tape.concat_cols(&heads) };
            let o = tape.matmul(o, p(&name("cross.out")));
            let o = tape.add_row(o, p(&name("cross.out_b")));
            x = tape.add(x, o);

            // Feed-forward.
            let h = modulated(&mut tape, x, 2);
            let h = tape.matmul(h, p(&name("ffn.w1")));
            let h = tape.add_row(h, p(&name("ffn.b1")));
            let h = tape.gelu(h);
            let h = tape.matmul(h, p(&name("ffn.w2")));
            let h = tape.add_row(h, p(&name("ffn.b2")));
            x = tape.add(x, h);
        }

        let m = tape.matmul(cond, p("final.mod.w"));
        let m = tape.add_row(m, p("final.mod.b"));
        let shift = tape.slice_cols(m, 0, d);
        let scale = tape.slice_cols(m, d, d);
        let scale = tape.add_scalar(scale, T::one());
        let h = tape.layer_norm_rows(x, ln_eps);
        let h = tape.mul_row(h, scale);
        let h = tape.add_row(h, shift);
        let out = tape.matmul(h, p("out.w"));
        let output = tape.add_row(out, p("out.b"));

        Ok(Recording {
            tape,
            input,
            output,
            params,
            cross,
            self_attn,
            n_tokens: n,
            grid: cfg.grid(),
            patch: cfg.patch,
        })
    }

    /// Raw network output for latent `z` at timestep `t`, in latent layout.
    pub fn network_output(&self, z: &[f64], t: f64, tokens: &[usize]) -> Result<Vec<f64>> {
        let rec = self.record::<f32>(z, t, tokens, GradMode::default())?;
        Ok(rec.output_latent())
    }
}

impl<T: Scalar> Recording<T> {
    pub fn output_latent(&self) -> Vec<f64> {
        unpatchify(&self.tape.value(self.output).to_f64(), self.patch)
    }

    /// Captured attention maps as a bundle on the patch grid.
    pub fn bundle(&self, timestep: usize) -> Result<AttentionBundle> {
        let cross = self.cross.iter().map(|&v| self.tape.value(v).to_f64()).collect();
        let selfs = self.self_attn.iter().map(|&v| self.tape.value(v).to_f64()).collect();
        AttentionBundle::new(self.grid, self.grid, self.n_tokens, timestep, cross, selfs)
    }

    /// Gradient with respect to the input latent of a function whose
    /// gradient with respect to the captured maps is `grad`. Requires the
    /// pass to have been recorded with input gradients.
    pub fn pullback(&self, grad: &BundleGrad) -> Vec<f64> {
        let hw = self.grid * self.grid;
        let mut seeds = Vec::new();
        for (&v, g) in self.cross.iter().zip(&grad.cross) {
            if g.iter().any(|&x| x != 0.0) {
                seeds.push((v, Mat::from_f64(hw, self.n_tokens, g)));
            }
        }
        for (&v, g) in self.self_attn.iter().zip(&grad.self_attn) {
            if g.iter().any(|&x| x != 0.0) {
                seeds.push((v, Mat::from_f64(hw, hw, g)));
            }
        }
        if seeds.is_empty() {
            return vec![0.0; LATENT_LEN];
        }
        let grads = self.tape.backward(seeds);
        match grads.get(self.input) {
            Some(g) => unpatchify(&g.to_f64(), self.patch),
            None => vec![0.0; LATENT_LEN],
        }
    }
}
