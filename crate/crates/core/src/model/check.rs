//! Finite-difference check of the full detection loss on a tiny model.

use exa_tensor::gradcheck::{max_directional_error, DEFAULT_STEP};
use exa_tensor::{OpKind, Tensor, TensorError};

use super::config::ModelConfig;
use super::loss::{detection_loss, Targets};
use super::network::{forward, Geometry};
use super::params::{Bound, Params};
use crate::dataset::{generate_scene, make_sample, sample_crop, scene_rng, SceneConfig};
use crate::error::Result;

/// Smallest configuration exercising every module: two stem blocks, a
/// two-scale decoder with gated selection, both heads.
pub fn tiny_config() -> ModelConfig {
    ModelConfig {
        input_size: 16,
        stride: 4,
        d: 8,
        heads: 2,
        ffn: 8,
        scales: vec![2, 1],
        mu: 50.0,
        stem_channels: vec![4],
        score_gate: true,
        ..ModelConfig::default()
    }
}

/// Random sign directions probed over the whole parameter vector.
pub const DIRECTIONS: usize = 16;

/// Maximum relative error between backpropagated and central-difference
/// directional derivatives of the detection loss along random sign
/// vectors spanning every parameter.
pub fn composed_loss_error(seed: u64, sign_flip: Option<OpKind>) -> Result<f64> {
    let cfg = tiny_config();
    let geo = Geometry::new(&cfg)?;
    let params = Params::init(&cfg, seed)?;
    let mut rng = scene_rng(seed, 0);
    let (image, scene) = generate_scene(&mut rng, &SceneConfig::default(), 0)?;
    let crop = sample_crop(&mut rng, scene.height, scene.width)?;
    let sample = make_sample(&scene, &image, crop, cfg.k as u32, cfg.input_size, 0)?;
    let pixels = sample.image.to_chw();
    let targets = Targets::build(&cfg, &geo, &sample.meta)?;
    let inputs: Vec<Tensor<f64>> = params.tensors().iter().map(|t| t.cast::<f64>()).collect();
    let err = max_directional_error(&inputs, DEFAULT_STEP, sign_flip, DIRECTIONS, seed, |tape, vars| {
        let bound = Bound::from_vars(&params, vars.to_vec());
        let wrap = |e: crate::Error| TensorError::Config(e.to_string());
        let fwd = forward(tape, &bound, &cfg, &geo, &pixels).map_err(wrap)?;
        Ok(detection_loss(tape, &cfg, &geo, &fwd, &targets).map_err(wrap)?.0)
    })?;
    Ok(err)
}
