//! CNN relative pose regressor: a strided convolutional backbone with
//! residual blocks, global average pooling, and two affine heads emitting a
//! 3-vector position and a 6-number attitude.

mod loss;
pub(crate) mod net;
mod train;
mod weights;

pub use loss::{loss_total, loss_value};
pub use train::{train, train_on_dataset, EpochRecord, TrainConfig, TrainHistory};
pub use weights::WEIGHTS_VERSION;

use std::collections::BTreeMap;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::geometry::{
    attitude_error, matrix_to_quat, position_error, sixd_to_matrix, Quaternion, Rotation6D, Vec3,
};
use crate::numerics::{BatchNormState, Real, Tape, Tensor, Var};
use crate::scenegen::Frame;

/// Backbone and head dimensions. The stem convolution is always 7x7 with
/// stride 2; every stage opens with a stride-2 3x3 convolution and the
/// features are projected to `gap_width` channels before pooling.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EstimatorConfig {
    pub input_height: usize,
    pub input_width: usize,
    pub stem_channels: usize,
    pub stage_channels: Vec<usize>,
    pub blocks_per_stage: Vec<usize>,
    pub gap_width: usize,
    pub leaky_slope: Real,
    pub dropout_rate: Real,
}

impl EstimatorConfig {
    /// Desk-scale network sized for single-core training on 120x90 frames.
    pub fn desk_default() -> Self {
        Self {
            input_height: 90,
            input_width: 120,
            stem_channels: 8,
            stage_channels: vec![16, 32, 64, 128],
            blocks_per_stage: vec![1, 1, 1, 1],
            gap_width: 128,
            leaky_slope: 0.1,
            dropout_rate: 0.2,
        }
    }

    /// Full-scale configuration matching the published feature width.
    pub fn full_scale() -> Self {
        Self {
            input_height: 270,
            input_width: 480,
            stem_channels: 16,
            stage_channels: vec![32, 64, 128, 256],
            blocks_per_stage: vec![1, 1, 1, 1],
            gap_width: 1000,
            leaky_slope: 0.1,
            dropout_rate: 0.2,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.gap_width < 9 {
            return Err(Error::param(
                "gap_width",
                format!("{} must be at least the 9 output units", self.gap_width),
            ));
        }
        if self.stage_channels.is_empty() {
            return Err(Error::Empty("stage_channels"));
        }
        if self.stage_channels.len() != self.blocks_per_stage.len() {
            return Err(Error::param(
                "blocks_per_stage",
                format!(
                    "{} entries vs {} stages",
                    self.blocks_per_stage.len(),
                    self.stage_channels.len()
                ),
            ));
        }
        if self.stem_channels == 0 || self.stage_channels.iter().any(|&c| c == 0) {
            return Err(Error::param("channels", "channel widths must be positive"));
        }
        if !(0.0 < self.leaky_slope && self.leaky_slope < 1.0) {
            return Err(Error::param(
                "leaky_slope",
                format!("{} must lie in (0, 1)", self.leaky_slope),
            ));
        }
        if !(0.0..1.0).contains(&self.dropout_rate) {
            return Err(Error::param(
                "dropout_rate",
                format!("{} must lie in [0, 1)", self.dropout_rate),
            ));
        }
        let (h, w) = self.feature_dims();
        if h == 0 || w == 0 {
            return Err(Error::param(
                "input size",
                format!(
                    "{}x{} collapses to zero after {} stride-2 layers",
                    self.input_width,
                    self.input_height,
                    1 + self.stage_channels.len()
                ),
            ));
        }
        Ok(())
    }

    /// Spatial size of the feature map entering global average pooling.
    pub fn feature_dims(&self) -> (usize, usize) {
        let mut h = self.input_height;
        let mut w = self.input_width;
        for _ in 0..(1 + self.stage_channels.len()) {
            h = if h == 0 { 0 } else { (h - 1) / 2 + 1 };
            w = if w == 0 { 0 } else { (w - 1) / 2 + 1 };
        }
        (h, w)
    }

    /// Stable digest binding weight files, attack traces, and attribution
    /// signatures to one architecture.
    pub fn fingerprint(&self) -> String {
        let json = serde_json::to_string(self).expect("config serializes");
        let digest = Sha256::digest(json.as_bytes());
        digest
            .iter()
            .map(|b| format!("{:02x}", b))
            .collect::<String>()[..16]
            .to_string()
    }
}

/// One frame's estimate plus the pooled feature vector it came from.
#[derive(Clone, Debug)]
pub struct PoseEstimate {
    pub position: Vec3,
    pub attitude6d: Rotation6D,
    pub gap_activation: Vec<Real>,
}

impl PoseEstimate {
    /// Decode the 6-number attitude to a quaternion.
    pub fn attitude(&self) -> Result<Quaternion> {
        matrix_to_quat(&sixd_to_matrix(self.attitude6d)?)
    }
}

/// Mean metric pair over a frame set.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalMetrics {
    pub mean_position_error: Real,
    pub mean_attitude_error_deg: Real,
}

/// The pose regressor: configuration, trainable tensors, and batch-norm
/// running statistics.
#[derive(Clone, Debug)]
pub struct Estimator {
    config: EstimatorConfig,
    params: BTreeMap<String, Tensor>,
    bn_state: BTreeMap<String, BatchNormState>,
}

/// Batch size used when running inference over a frame list.
const EVAL_CHUNK: usize = 32;

impl Estimator {
    /// Build a freshly initialized network. The same seed always produces
    /// identical weights.
    pub fn build(config: EstimatorConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = crate::rng::stream(seed, crate::rng::salt::WEIGHT_INIT, 0);
        let mut params = BTreeMap::new();
        let mut bn_state = BTreeMap::new();
        for conv in net::conv_layers(&config) {
            params.insert(
                format!("{}.conv", conv.name),
                net::kaiming_conv(&conv, &mut rng),
            );
            params.insert(format!("{}.gamma", conv.name), Tensor::full(&[conv.cout], 1.0));
            params.insert(format!("{}.beta", conv.name), Tensor::zeros(&[conv.cout]));
            bn_state.insert(conv.name.clone(), BatchNormState::new(conv.cout));
        }
        let g = config.gap_width;
        params.insert("fc_pos.weight".into(), net::head_weight(3, g, &mut rng));
        params.insert("fc_pos.bias".into(), Tensor::zeros(&[3]));
        params.insert("fc_att.weight".into(), net::head_weight(6, g, &mut rng));
        params.insert("fc_att.bias".into(), Tensor::zeros(&[6]));
        params.insert("sigma_p".into(), Tensor::zeros(&[1]));
        params.insert("sigma_r".into(), Tensor::zeros(&[1]));
        Ok(Self {
            config,
            params,
            bn_state,
        })
    }

    pub fn config(&self) -> &EstimatorConfig {
        &self.config
    }

    pub fn fingerprint(&self) -> String {
        self.config.fingerprint()
    }

    pub(crate) fn params(&self) -> &BTreeMap<String, Tensor> {
        &self.params
    }

    pub(crate) fn params_mut(&mut self) -> &mut BTreeMap<String, Tensor> {
        &mut self.params
    }

    pub(crate) fn bn_state_mut(&mut self) -> &mut BTreeMap<String, BatchNormState> {
        &mut self.bn_state
    }

    pub(crate) fn from_parts(
        config: EstimatorConfig,
        params: BTreeMap<String, Tensor>,
        bn_state: BTreeMap<String, BatchNormState>,
    ) -> Self {
        Self {
            config,
            params,
            bn_state,
        }
    }

    pub(crate) fn bn_state(&self) -> &BTreeMap<String, BatchNormState> {
        &self.bn_state
    }

    /// Current task-uncertainty weights.
    pub fn sigmas(&self) -> (Real, Real) {
        (
            self.params["sigma_p"].data()[0],
            self.params["sigma_r"].data()[0],
        )
    }

    /// Stack images into a network input batch.
    pub fn batch_from_images<'a, I>(&self, images: I) -> Result<Tensor>
    where
        I: IntoIterator<Item = &'a crate::scenegen::Image>,
    {
        let (h, w) = (self.config.input_height, self.config.input_width);
        let mut data = Vec::new();
        let mut count = 0;
        for image in images {
            if image.height != h || image.width != w {
                return Err(Error::dim(
                    "estimator input",
                    format!(
                        "image is {}x{}, network expects {}x{}",
                        image.width, image.height, w, h
                    ),
                ));
            }
            data.extend_from_slice(&image.to_chw());
            count += 1;
        }
        if count == 0 {
            return Err(Error::Empty("image batch"));
        }
        Tensor::new(vec![count, 3, h, w], data)
    }

    /// Run the network in eval mode over an input batch.
    pub fn estimate_batch(&self, batch: &Tensor) -> Result<Vec<PoseEstimate>> {
        let mut tape = Tape::new();
        let x = tape.leaf(batch.clone(), false);
        let vars = net::bind(&mut tape, &self.params, false);
        let mut bn = self.bn_state.clone();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let (out, gap) = net::forward(
            &mut tape,
            &self.config,
            &vars,
            &mut bn,
            x,
            false,
            &mut rng,
        )?;
        extract_estimates(&tape, out, gap)
    }

    /// Estimate every frame, batching internally.
    pub fn estimate_frames(&self, frames: &[Frame]) -> Result<Vec<PoseEstimate>> {
        if frames.is_empty() {
            return Err(Error::Empty("frames"));
        }
        let mut all = Vec::with_capacity(frames.len());
        for chunk in frames.chunks(EVAL_CHUNK) {
            let batch = self.batch_from_images(chunk.iter().map(|f| &f.image))?;
            all.extend(self.estimate_batch(&batch)?);
        }
        Ok(all)
    }

    /// Mean position and attitude errors over labeled frames.
    pub fn evaluate(&self, frames: &[Frame]) -> Result<EvalMetrics> {
        let estimates = self.estimate_frames(frames)?;
        let mut pos_sum = 0.0;
        let mut att_sum = 0.0;
        for (est, frame) in estimates.iter().zip(frames) {
            pos_sum += position_error(est.position, frame.label.position);
            att_sum += attitude_error(est.attitude()?, frame.label.attitude);
        }
        let n = frames.len() as Real;
        Ok(EvalMetrics {
            mean_position_error: pos_sum / n,
            mean_attitude_error_deg: att_sum / n,
        })
    }
}

fn extract_estimates(tape: &Tape, out: Var, gap: Var) -> Result<Vec<PoseEstimate>> {
    let out_t = tape.value(out);
    let gap_t = tape.value(gap);
    if !out_t.all_finite() || !gap_t.all_finite() {
        return Err(Error::Training(
            "non-finite activations in forward pass".into(),
        ));
    }
    let n = out_t.dim(0);
    let g = gap_t.dim(1);
    let mut estimates = Vec::with_capacity(n);
    for i in 0..n {
        let row = &out_t.data()[i * 9..(i + 1) * 9];
        estimates.push(PoseEstimate {
            position: [row[0], row[1], row[2]],
            attitude6d: Rotation6D([row[3], row[4], row[5], row[6], row[7], row[8]]),
            gap_activation: gap_t.data()[i * g..(i + 1) * g].to_vec(),
        });
    }
    Ok(estimates)
}
