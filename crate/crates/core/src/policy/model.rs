use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{HighLevelCommand, ModelConfig, Variant};
use crate::error::{bail, Error, Result};
use crate::roi::{generate_grid, validate_geometry, Rect, RoIGrid, POOL_BINS};
use crate::tensor::{adam_step, Activation, AdamState, Gradients, ParamId, ParamStore, Tape, Tensor, Var};

/// Parameters of one command head. `attention` is `(W_a, b_a)` for the full
/// attention variant, the shared per-region scorer for the independent-RoI
/// variant, and absent for the no-attention variant.
#[derive(Clone, Debug, PartialEq)]
pub struct HeadParams {
    pub attention: Option<(ParamId, ParamId)>,
    pub dense: Vec<(ParamId, ParamId)>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct PolicyModel {
    config: ModelConfig,
    grid: RoIGrid,
    rects: Vec<Rect>,
    feature: (usize, usize, usize),
    params: ParamStore,
    backbone: Vec<(ParamId, ParamId)>,
    heads: Vec<HeadParams>,
}

/// A training batch: `[N, H, W, 3]` frames in `[0, 1]`, one command and one
/// expert steer per sample.
#[derive(Clone, Debug, PartialEq)]
pub struct Batch {
    pub frames: Tensor,
    pub commands: Vec<HighLevelCommand>,
    pub targets: Vec<f64>,
}

impl Batch {
    pub fn len(&self) -> usize {
        self.commands.len()
    }

    pub fn is_empty(&self) -> bool {
        self.commands.is_empty()
    }
}

/// Per-sample view of one forward pass.
#[derive(Clone, Debug, PartialEq)]
pub struct ForwardTrace {
    pub steer: f64,
    pub alpha: Option<Vec<f64>>,
    /// Concatenated region descriptors `r`, region-major.
    pub pooled: Vec<f64>,
    /// Attention-weighted descriptor `r_a` (the pooled vector itself for the
    /// no-attention variant).
    pub attended: Vec<f64>,
    pub command: HighLevelCommand,
}

#[derive(Clone, Debug)]
pub struct GroupOutput {
    pub command: HighLevelCommand,
    /// Sample indices routed to this head, in output order.
    pub rows: Vec<usize>,
    pub alpha: Option<Var>,
    pub attended: Var,
}

#[derive(Clone, Debug)]
pub struct BatchOutput {
    /// `[N, 1]` steering, rows ordered as `order`.
    pub steer: Var,
    pub order: Vec<usize>,
    pub groups: Vec<GroupOutput>,
    /// `[N, R·16·C]` pooled descriptors in sample order.
    pub pooled: Var,
}

fn fan_in_bound(fan_in: usize) -> f64 {
    (6.0 / fan_in as f64).sqrt()
}

impl PolicyModel {
    /// Builds a model with fan-in-scaled uniform weights and zero biases.
    pub fn init(config: ModelConfig, seed: u64) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Self::build(config, |dims, fan_in, is_bias| {
            if is_bias {
                Tensor::zeros(dims)
            } else {
                Tensor::uniform(dims, fan_in_bound(fan_in), &mut rng)
            }
        })
    }

    /// Rebuilds a model from stored parameters, checking every name and shape.
    pub fn from_params(config: ModelConfig, stored: ParamStore) -> Result<Self> {
        let mut model = Self::build(config, |dims, _, _| Tensor::zeros(dims))?;
        if stored.len() != model.params.len() {
            bail!(Corrupt, "expected {} parameter tensors, found {}", model.params.len(), stored.len());
        }
        for (id, name, t) in stored.iter() {
            if model.params.name(id) != name || model.params.get(id).dims() != t.dims() {
                bail!(
                    Corrupt,
                    "parameter {} ({} {:?}) does not match layout ({} {:?})",
                    id.0,
                    name,
                    t.dims(),
                    model.params.name(id),
                    model.params.get(id).dims()
                );
            }
        }
        model.params = stored;
        Ok(model)
    }

    fn build(config: ModelConfig, mut make: impl FnMut(&[usize], usize, bool) -> Tensor) -> Result<Self> {
        let grid = match (&config.regions, config.variant) {
            (_, Variant::NoAttention) => RoIGrid::full_image(),
            (Some(regions), _) => RoIGrid::from_regions(regions.clone())?,
            (None, _) => generate_grid(&config.grid)?,
        };
        if grid.is_empty() {
            bail!(Config, "region grid is empty");
        }
        let report = validate_geometry(&grid, config.input, &config.backbone)
            .map_err(|e| Error::Config(format!("input {:?}: {e}", config.input)))?;
        let feature = report.feature_dims();
        let mut params = ParamStore::new();
        let mut backbone = Vec::new();
        let mut cin = 3;
        for (i, l) in config.backbone.layers.iter().enumerate() {
            let fan_in = l.kernel * l.kernel * cin;
            let k = params.add(format!("backbone.conv{}.kernel", i + 1), make(&[l.kernel, l.kernel, cin, l.channels], fan_in, false));
            let b = params.add(format!("backbone.conv{}.bias", i + 1), make(&[l.channels], fan_in, true));
            backbone.push((k, b));
            cin = l.channels;
        }
        let desc = POOL_BINS * POOL_BINS * feature.2;
        let regions = grid.len();
        let mut heads = Vec::new();
        for cmd in HighLevelCommand::ALL {
            let prefix = format!("head.{}", cmd.name());
            let attention = match config.variant {
                Variant::FullAttention => {
                    let fan_in = regions * desc;
                    let w = params.add(format!("{prefix}.attn.weight"), make(&[fan_in, regions], fan_in, false));
                    let b = params.add(format!("{prefix}.attn.bias"), make(&[regions], fan_in, true));
                    Some((w, b))
                }
                Variant::IndependentRoi => {
                    let w = params.add(format!("{prefix}.score.weight"), make(&[desc, 1], desc, false));
                    let b = params.add(format!("{prefix}.score.bias"), make(&[1], desc, true));
                    Some((w, b))
                }
                Variant::NoAttention => None,
            };
            let mut dense = Vec::new();
            let mut inner = desc;
            for (j, &outer) in config.dense.iter().chain(std::iter::once(&1)).enumerate() {
                let w = params.add(format!("{prefix}.fc{}.weight", j + 1), make(&[inner, outer], inner, false));
                let b = params.add(format!("{prefix}.fc{}.bias", j + 1), make(&[outer], inner, true));
                dense.push((w, b));
                inner = outer;
            }
            heads.push(HeadParams { attention, dense });
        }
        Ok(PolicyModel { rects: report.rects, config, grid, feature, params, backbone, heads })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn variant(&self) -> Variant {
        self.config.variant
    }

    /// Regions the model pools (the single full-image region for the
    /// no-attention variant).
    pub fn grid(&self) -> &RoIGrid {
        &self.grid
    }

    pub fn rects(&self) -> &[Rect] {
        &self.rects
    }

    /// `(width, height, channels)` of the backbone output.
    pub fn feature_dims(&self) -> (usize, usize, usize) {
        self.feature
    }

    pub fn descriptor_len(&self) -> usize {
        POOL_BINS * POOL_BINS * self.feature.2
    }

    pub fn params(&self) -> &ParamStore {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.params
    }

    pub fn backbone_params(&self) -> &[(ParamId, ParamId)] {
        &self.backbone
    }

    pub fn head(&self, cmd: HighLevelCommand) -> &HeadParams {
        &self.heads[cmd.index()]
    }

    /// Every parameter belonging to one command head.
    pub fn head_param_ids(&self, cmd: HighLevelCommand) -> Vec<ParamId> {
        let h = self.head(cmd);
        h.attention.iter().chain(&h.dense).flat_map(|&(w, b)| [w, b]).collect()
    }

    fn check_frames(&self, frames: &Tensor) -> Result<usize> {
        let (w, h) = self.config.input;
        match frames.dims() {
            [n, fh, fw, 3] if *fh == h && *fw == w => Ok(*n),
            d => bail!(Contract, "frames {:?} do not match model input {}x{}x3", d, w, h),
        }
    }

    /// Records a batched forward pass. Samples are grouped by command and each
    /// group runs through its own head only, so heads of commands absent from
    /// the batch never enter the graph.
    pub fn forward_batch<'p>(
        &'p self,
        tape: &mut Tape<'p>,
        frames: Tensor,
        commands: &[HighLevelCommand],
    ) -> Result<BatchOutput> {
        let n = self.check_frames(&frames)?;
        if commands.len() != n {
            bail!(Contract, "{} frames but {} commands", n, commands.len());
        }
        let mut x = tape.constant(frames);
        for (layer, &(k, b)) in self.config.backbone.layers.iter().zip(&self.backbone) {
            let (kv, bv) = (tape.param(k), tape.param(b));
            x = tape.conv2d(x, kv, bv, layer.stride, Activation::Relu)?;
        }
        let pooled = tape.roi_pool(x, &self.rects)?;
        let regions = self.rects.len();
        let desc = self.descriptor_len();

        let mut groups = Vec::new();
        let mut outs = Vec::new();
        let mut order = Vec::with_capacity(n);
        for cmd in HighLevelCommand::ALL {
            let rows: Vec<usize> = (0..n).filter(|&i| commands[i] == cmd).collect();
            if rows.is_empty() {
                continue;
            }
            let m = rows.len();
            let r = if m == n { pooled } else { tape.gather_rows(pooled, &rows)? };
            let head = self.head(cmd);
            let (alpha, attended) = match (self.config.variant, head.attention) {
                (Variant::FullAttention, Some((w, b))) => {
                    let (wv, bv) = (tape.param(w), tape.param(b));
                    let logits = tape.dense(r, wv, bv, Activation::None)?;
                    let alpha = tape.softmax(logits)?;
                    (Some(alpha), tape.weighted_sum(alpha, r)?)
                }
                (Variant::IndependentRoi, Some((w, b))) => {
                    let (wv, bv) = (tape.param(w), tape.param(b));
                    let per_region = tape.reshape(r, vec![m * regions, desc])?;
                    let scores = tape.dense(per_region, wv, bv, Activation::None)?;
                    let logits = tape.reshape(scores, vec![m, regions])?;
                    let alpha = tape.softmax(logits)?;
                    (Some(alpha), tape.weighted_sum(alpha, r)?)
                }
                _ => (None, r),
            };
            let mut h = attended;
            let last = head.dense.len() - 1;
            for (j, &(w, b)) in head.dense.iter().enumerate() {
                let act = if j == last { Activation::Tanh } else { Activation::Relu };
                let (wv, bv) = (tape.param(w), tape.param(b));
                h = tape.dense(h, wv, bv, act)?;
            }
            outs.push(h);
            order.extend_from_slice(&rows);
            groups.push(GroupOutput { command: cmd, rows, alpha, attended });
        }
        let steer = if outs.len() == 1 { outs[0] } else { tape.concat_rows(&outs)? };
        Ok(BatchOutput { steer, order, groups, pooled })
    }

    /// Steering for a batch, in sample order.
    pub fn predict_batch(&self, frames: Tensor, commands: &[HighLevelCommand]) -> Result<Vec<f64>> {
        let mut tape = Tape::no_grad(&self.params);
        let out = self.forward_batch(&mut tape, frames, commands)?;
        let vals = tape.value(out.steer).data();
        let mut steer = vec![0.0; commands.len()];
        for (k, &i) in out.order.iter().enumerate() {
            steer[i] = vals[k];
        }
        Ok(steer)
    }

    /// Full per-sample trace for a single `[H, W, 3]` frame.
    pub fn forward(&self, frame: &Tensor, command: HighLevelCommand) -> Result<ForwardTrace> {
        let mut dims = frame.dims().to_vec();
        if dims.len() == 3 {
            dims.insert(0, 1);
        }
        let batch = frame.clone().reshaped(dims)?;
        let mut tape = Tape::no_grad(&self.params);
        let out = self.forward_batch(&mut tape, batch, &[command])?;
        let g = &out.groups[0];
        Ok(ForwardTrace {
            steer: tape.value(out.steer).data()[0],
            alpha: g.alpha.map(|a| tape.value(a).data().to_vec()),
            pooled: tape.value(out.pooled).data().to_vec(),
            attended: tape.value(g.attended).data().to_vec(),
            command,
        })
    }

    /// Forward pass of the no-attention variant: the whole feature map pooled
    /// as one region straight into the selected head's dense stack.
    pub fn forward_no_attention(&self, frame: &Tensor, command: HighLevelCommand) -> Result<f64> {
        if self.variant() != Variant::NoAttention {
            bail!(Contract, "model variant is {}, not no_attention", self.variant());
        }
        Ok(self.forward(frame, command)?.steer)
    }

    /// Forward pass of the independent-RoI variant: one shared scorer per head
    /// emits a logit per region, normalized jointly.
    pub fn forward_independent_roi(&self, frame: &Tensor, command: HighLevelCommand) -> Result<ForwardTrace> {
        if self.variant() != Variant::IndependentRoi {
            bail!(Contract, "model variant is {}, not independent_roi", self.variant());
        }
        self.forward(frame, command)
    }

    /// Mean per-sample squared error of a batch and its parameter gradients.
    pub fn loss_and_grads(&self, batch: &Batch) -> Result<(f64, Gradients)> {
        let (stats, grads) = self.train_pass(batch)?;
        Ok((stats.loss, grads))
    }

    /// Loss, gradients, per-sample predictions and attention diagnostics of
    /// one batch.
    pub fn train_pass(&self, batch: &Batch) -> Result<(PassStats, Gradients)> {
        if batch.is_empty() {
            bail!(Contract, "empty batch");
        }
        if batch.targets.len() != batch.len() {
            bail!(Contract, "{} targets for {} samples", batch.targets.len(), batch.len());
        }
        let mut tape = Tape::new(&self.params);
        let out = self.forward_batch(&mut tape, batch.frames.clone(), &batch.commands)?;
        let pred = tape.value(out.steer).data();
        if let Some(k) = pred.iter().position(|p| !p.is_finite()) {
            bail!(Numeric, "non-finite prediction for sample {}", out.order[k]);
        }
        let mut predictions = vec![0.0; batch.len()];
        for (k, &i) in out.order.iter().enumerate() {
            predictions[i] = pred[k];
        }
        let (alpha_sum_error, attended_excess) = self.attention_diagnostics(&tape, &out);
        let target = Tensor::vector(out.order.iter().map(|&i| batch.targets[i]).collect());
        let steer = tape.reshape(out.steer, vec![batch.len()])?;
        let loss = tape.mse_loss(steer, &target)?;
        let value = tape.value(loss).data()[0];
        if !value.is_finite() {
            let k = target.data().iter().position(|t| !t.is_finite()).unwrap_or(0);
            bail!(Numeric, "loss is {} (sample {})", value, out.order[k]);
        }
        let grads = tape.backward(loss)?;
        if let Some((id, _, _)) = self.params.iter().find(|(id, ..)| grads.get(*id).is_some_and(|g| g.iter().any(|x| !x.is_finite()))) {
            bail!(Numeric, "non-finite gradient in {}", self.params.name(id));
        }
        Ok((PassStats { loss: value, predictions, alpha_sum_error, attended_excess }, grads))
    }

    /// Largest `|Σα − 1|` and largest amount by which an attended coordinate
    /// leaves the `[min, max]` range of its region descriptors.
    fn attention_diagnostics(&self, tape: &Tape, out: &BatchOutput) -> (f64, f64) {
        let pooled = tape.value(out.pooled).data();
        let regions = self.rects.len();
        let desc = self.descriptor_len();
        let (mut sum_err, mut excess) = (0.0f64, 0.0f64);
        for g in &out.groups {
            let Some(alpha) = g.alpha else { continue };
            let a = tape.value(alpha).data();
            let att = tape.value(g.attended).data();
            for (k, &i) in g.rows.iter().enumerate() {
                let s: f64 = a[k * regions..(k + 1) * regions].iter().sum();
                sum_err = sum_err.max((s - 1.0).abs());
                let r = &pooled[i * regions * desc..(i + 1) * regions * desc];
                for j in 0..desc {
                    let (lo, hi) = (0..regions).fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), q| {
                        let v = r[q * desc + j];
                        (lo.min(v), hi.max(v))
                    });
                    let v = att[k * desc + j];
                    excess = excess.max(lo - v).max(v - hi);
                }
            }
        }
        (sum_err, excess)
    }

    /// One optimizer step on a batch; returns the pre-update mean loss.
    pub fn train_step(&mut self, batch: &Batch, adam: &mut AdamState) -> Result<f64> {
        Ok(self.train_step_with(batch, adam, None)?.0.loss)
    }

    /// Optimizer step with optional global-norm gradient clipping. Also
    /// returns how many absent-command heads received gradient, which must be
    /// zero.
    pub fn train_step_with(&mut self, batch: &Batch, adam: &mut AdamState, clip: Option<f64>) -> Result<(PassStats, usize)> {
        let (stats, mut grads) = self.train_pass(batch)?;
        let leaks = HighLevelCommand::ALL
            .into_iter()
            .filter(|c| !batch.commands.contains(c))
            .filter(|&c| self.head_param_ids(c).iter().any(|&id| grads.is_reached(id)))
            .count();
        debug_assert_eq!(leaks, 0, "a head received gradient without samples");
        if let Some(max_norm) = clip {
            let norm = grads.norm();
            if norm > max_norm {
                grads.scale(max_norm / norm);
            }
        }
        adam_step(&mut self.params, &grads, adam)?;
        Ok((stats, leaks))
    }
}

/// Outcome of one training forward/backward pass.
#[derive(Clone, Debug, PartialEq)]
pub struct PassStats {
    pub loss: f64,
    /// Pre-update predictions in sample order.
    pub predictions: Vec<f64>,
    pub alpha_sum_error: f64,
    pub attended_excess: f64,
}
