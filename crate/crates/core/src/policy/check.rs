use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{Batch, HighLevelCommand, ModelConfig, PolicyModel};
use crate::error::Result;
use crate::tensor::{finite_diff_check, sample_coords, Tensor};

/// Worst relative error per parameter class of a full-model gradient check.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelGradCheck {
    pub max_rel_error: f64,
    pub backbone: f64,
    pub attention: f64,
    pub dense: f64,
    pub coordinates: usize,
}

/// Finite-difference check of the loss on one random frame through the
/// backbone, the attention and the `command` head, sampling `per_tensor`
/// coordinates from every tensor on that path.
pub fn model_gradient_check(config: ModelConfig, command: HighLevelCommand, per_tensor: usize, seed: u64) -> Result<ModelGradCheck> {
    let mut model = PolicyModel::init(config, seed)?;
    let (w, h) = model.config().input;
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x9e37_79b9);
    let frame: Vec<f64> = (0..w * h * 3).map(|_| rng.random::<f64>()).collect();
    let batch = Batch { frames: Tensor::new(vec![1, h, w, 3], frame)?, commands: vec![command], targets: vec![rng.random_range(-1.0..1.0)] };
    let (_, grads) = model.loss_and_grads(&batch)?;
    let head = format!("head.{}.", command.name());
    let on_path = |n: &str| n.starts_with("backbone.") || n.starts_with(&head);
    let coords = sample_coords(model.params(), per_tensor, &mut rng, on_path);
    let cfg = model.config().clone();
    let rep = finite_diff_check(
        model.params_mut(),
        |p| Ok(PolicyModel::from_params(cfg.clone(), p.clone())?.loss_and_grads(&batch)?.0),
        &grads,
        &coords,
        1e-6,
    )?;
    let params = model.params();
    let is_attn = |n: &str| n.contains(".attn.") || n.contains(".score.");
    Ok(ModelGradCheck {
        max_rel_error: rep.max_rel_error,
        backbone: rep.max_error_where(params, |n| n.starts_with("backbone.")),
        attention: rep.max_error_where(params, |n| n.starts_with(&head) && is_attn(n)),
        dense: rep.max_error_where(params, |n| n.starts_with(&head) && n.contains(".fc")),
        coordinates: coords.len(),
    })
}
