//! The toy text-to-image world: vocabulary, procedural scenes, the
//! attention denoiser, its weights file and its training loop.

pub mod denoiser;
pub mod scene;
pub mod train;
pub mod vocab;
pub mod weights;

use crate::autodiff::Scalar;
use crate::error::Result;
use crate::guidance::{AttentionDenoiser, AttentionProbe};
use crate::sampler::NoiseSchedule;

pub use denoiser::{DenoiserConfig, DenoiserWeights, GradMode, Prediction};

/// Runs the denoiser on a tape of scalar type `T` (`f32` for sampling,
/// `f64` for gradient checks).
pub struct ToyModel<'a, T> {
    pub weights: &'a DenoiserWeights,
    pub schedule: &'a NoiseSchedule,
    _precision: std::marker::PhantomData<T>,
}

impl<'a, T> ToyModel<'a, T> {
    pub fn new(weights: &'a DenoiserWeights, schedule: &'a NoiseSchedule) -> Self {
        Self {
            weights,
            schedule,
            _precision: std::marker::PhantomData,
        }
    }
}

impl<T: Scalar> AttentionDenoiser for ToyModel<'_, T> {
    fn predict_noise(&self, z: &[f64], t: usize, tokens: &[usize]) -> Result<Vec<f64>> {
        let rec = self.weights.record::<T>(z, t as f64, tokens, GradMode::default())?;
        let a = self.schedule.alpha_bar(t)?;
        Ok(self.weights.config.prediction.to_noise(&rec.output_latent(), z, a))
    }

    fn probe(&self, z: &[f64], t: usize, tokens: &[usize]) -> Result<AttentionProbe> {
        let rec = self.weights.record::<T>(
            z,
            t as f64,
            tokens,
            GradMode {
                input: true,
                params: false,
            },
        )?;
        let bundle = rec.bundle(t)?;
        Ok(AttentionProbe::new(bundle, Box::new(move |g| rec.pullback(g))))
    }
}
