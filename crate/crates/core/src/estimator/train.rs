//! Adam training loop with a triangular cyclical learning rate whose peak
//! halves every cycle.

use std::collections::BTreeMap;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{attitude_error, position_error, quat_to_6d};
use crate::numerics::{Gradients, Real, Tape, Tensor, Var};
use crate::rng::{self, salt};
use crate::scenegen::{augment, AugmentConfig, Dataset, Frame, Image};

use super::loss::loss_total;
use super::{net, Estimator, EvalMetrics};

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub base_lr: Real,
    /// Ceiling of the first learning-rate cycle; later peaks halve.
    pub max_lr: Real,
    /// Half-cycle length in epochs.
    pub lr_step_epochs: usize,
    pub sigma_p_init: Real,
    pub sigma_r_init: Real,
    pub augment: Option<AugmentConfig>,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 100,
            batch_size: 32,
            base_lr: 2.5e-5,
            max_lr: 2.5e-4,
            lr_step_epochs: 4,
            sigma_p_init: 0.0,
            sigma_r_init: 0.0,
            augment: None,
            seed: 0,
        }
    }
}

impl TrainConfig {
    /// Aggressive schedule for memorizing a small frame set quickly. The
    /// default rates are tuned for large datasets and move the position head
    /// far too slowly to cross tens of meters in a few hundred epochs.
    pub fn desk_overfit(seed: u64) -> Self {
        Self {
            epochs: 300,
            batch_size: 16,
            base_lr: 1e-3,
            max_lr: 1e-2,
            lr_step_epochs: 4,
            sigma_p_init: 0.0,
            sigma_r_init: 0.0,
            augment: None,
            seed,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 {
            return Err(Error::param("epochs", "must be at least 1"));
        }
        if self.batch_size == 0 {
            return Err(Error::param("batch_size", "must be at least 1"));
        }
        if !(self.base_lr > 0.0 && self.base_lr.is_finite()) {
            return Err(Error::param(
                "base_lr",
                format!("{} must be positive and finite", self.base_lr),
            ));
        }
        if !(self.max_lr >= self.base_lr && self.max_lr.is_finite()) {
            return Err(Error::param(
                "max_lr",
                format!("{} must be finite and at least base_lr", self.max_lr),
            ));
        }
        if self.lr_step_epochs == 0 {
            return Err(Error::param("lr_step_epochs", "must be at least 1"));
        }
        if !self.sigma_p_init.is_finite() || !self.sigma_r_init.is_finite() {
            return Err(Error::param("sigma init", "must be finite"));
        }
        if let Some(augment) = &self.augment {
            augment.validate()?;
        }
        Ok(())
    }
}

/// Per-epoch training record.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    /// Batch loss averaged over the epoch's optimizer steps.
    pub mean_loss: Real,
    pub lr_last: Real,
    pub sigma_p: Real,
    pub sigma_r: Real,
}

/// Full training trace: train-set metrics before the first update, one
/// record per epoch, and train-set metrics after the last update.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct TrainHistory {
    pub initial: EvalMetrics,
    pub epochs: Vec<EpochRecord>,
    pub final_metrics: EvalMetrics,
}

/// Triangular schedule: linear ramp base -> max -> base over `2 * step`
/// iterations, with the peak amplitude halving on every cycle.
fn cyclical_lr(iteration: usize, step: usize, base: Real, max: Real) -> Real {
    let it = iteration as Real;
    let step = step as Real;
    let cycle = (1.0 + it / (2.0 * step)).floor();
    let x = (it / step - 2.0 * cycle + 1.0).abs();
    let amplitude = (1.0 - x).max(0.0) / (2.0 as Real).powi(cycle as i32 - 1);
    base + (max - base) * amplitude
}

struct Adam {
    beta1: Real,
    beta2: Real,
    eps: Real,
    t: i32,
    m: BTreeMap<String, Vec<Real>>,
    v: BTreeMap<String, Vec<Real>>,
}

impl Adam {
    fn new() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            t: 0,
            m: BTreeMap::new(),
            v: BTreeMap::new(),
        }
    }

    fn step(
        &mut self,
        params: &mut BTreeMap<String, Tensor>,
        vars: &BTreeMap<String, Var>,
        grads: &mut Gradients,
        lr: Real,
    ) {
        self.t += 1;
        let bias1 = 1.0 - self.beta1.powi(self.t);
        let bias2 = 1.0 - self.beta2.powi(self.t);
        for (name, &var) in vars {
            let Some(grad) = grads.take(var) else {
                continue;
            };
            let param = params.get_mut(name).expect("bound var has a parameter");
            let m = self
                .m
                .entry(name.clone())
                .or_insert_with(|| vec![0.0; grad.data().len()]);
            let v = self
                .v
                .entry(name.clone())
                .or_insert_with(|| vec![0.0; grad.data().len()]);
            for (((p, &g), m), v) in param
                .data_mut()
                .iter_mut()
                .zip(grad.data())
                .zip(m.iter_mut())
                .zip(v.iter_mut())
            {
                *m = self.beta1 * *m + (1.0 - self.beta1) * g;
                *v = self.beta2 * *v + (1.0 - self.beta2) * g * g;
                *p -= lr * (*m / bias1) / ((*v / bias2).sqrt() + self.eps);
            }
        }
    }
}

/// Train in place on the frames selected by `train_indices`. Returns loss
/// and metric history; the estimator keeps the final weights and batch-norm
/// statistics.
pub fn train(
    est: &mut Estimator,
    frames: &[Frame],
    train_indices: &[usize],
    config: &TrainConfig,
) -> Result<TrainHistory> {
    config.validate()?;
    if train_indices.is_empty() {
        return Err(Error::Empty("train_indices"));
    }
    if let Some(&bad) = train_indices.iter().find(|&&i| i >= frames.len()) {
        return Err(Error::param(
            "train_indices",
            format!("index {} out of range for {} frames", bad, frames.len()),
        ));
    }
    let selected: Vec<&Frame> = train_indices.iter().map(|&i| &frames[i]).collect();
    let arch = est.config().clone();
    est.params_mut()
        .insert("sigma_p".into(), Tensor::new(vec![1], vec![config.sigma_p_init])?);
    est.params_mut()
        .insert("sigma_r".into(), Tensor::new(vec![1], vec![config.sigma_r_init])?);

    let initial = evaluate_refs(est, &selected)?;
    let n = selected.len();
    let steps_per_epoch = n.div_ceil(config.batch_size);
    let lr_step = config.lr_step_epochs * steps_per_epoch;
    let mut adam = Adam::new();
    let mut records = Vec::with_capacity(config.epochs);
    let mut global_step: usize = 0;

    for epoch in 0..config.epochs {
        let mut order: Vec<usize> = (0..n).collect();
        let mut shuffle_rng = rng::stream(config.seed, salt::SHUFFLE, epoch as u64);
        for i in (1..n).rev() {
            let j = shuffle_rng.gen_range(0..=i);
            order.swap(i, j);
        }

        let mut loss_sum = 0.0;
        let mut lr_last = config.base_lr;
        for (chunk_index, chunk) in order.chunks(config.batch_size).enumerate() {
            let offset = chunk_index * config.batch_size;
            let batch = match &config.augment {
                Some(augment_config) => {
                    let images: Vec<Image> = chunk
                        .iter()
                        .enumerate()
                        .map(|(k, &idx)| {
                            let mut augment_rng = rng::stream(
                                config.seed,
                                salt::AUGMENT,
                                (epoch * n + offset + k) as u64,
                            );
                            augment(&selected[idx].image, augment_config, &mut augment_rng)
                        })
                        .collect::<Result<_>>()?;
                    est.batch_from_images(images.iter())?
                }
                None => est.batch_from_images(chunk.iter().map(|&idx| &selected[idx].image))?,
            };
            let mut pos_data = Vec::with_capacity(chunk.len() * 3);
            let mut att_data = Vec::with_capacity(chunk.len() * 6);
            for &idx in chunk {
                let label = &selected[idx].label;
                pos_data.extend_from_slice(&label.position);
                att_data.extend_from_slice(&quat_to_6d(label.attitude).0);
            }
            let gt_pos = Tensor::new(vec![chunk.len(), 3], pos_data)?;
            let gt_att = Tensor::new(vec![chunk.len(), 6], att_data)?;

            let mut tape = Tape::new();
            let x = tape.leaf(batch, false);
            let vars = net::bind(&mut tape, est.params(), true);
            let mut dropout_rng = rng::stream(config.seed, salt::DROPOUT, global_step as u64);
            let (out, _gap) = net::forward(
                &mut tape,
                &arch,
                &vars,
                est.bn_state_mut(),
                x,
                true,
                &mut dropout_rng,
            )?;
            let loss = loss_total(&mut tape, out, &gt_pos, &gt_att, vars["sigma_p"], vars["sigma_r"])?;
            let loss_val = tape.value(loss).item();
            if !loss_val.is_finite() {
                return Err(Error::Training(format!(
                    "loss became non-finite at epoch {} step {}",
                    epoch, global_step
                )));
            }
            let mut grads = tape.backward(loss)?;
            let lr = cyclical_lr(global_step, lr_step, config.base_lr, config.max_lr);
            adam.step(est.params_mut(), &vars, &mut grads, lr);
            loss_sum += loss_val;
            lr_last = lr;
            global_step += 1;
        }

        let (sigma_p, sigma_r) = est.sigmas();
        records.push(EpochRecord {
            epoch,
            mean_loss: loss_sum / steps_per_epoch as Real,
            lr_last,
            sigma_p,
            sigma_r,
        });
    }

    let final_metrics = evaluate_refs(est, &selected)?;
    Ok(TrainHistory {
        initial,
        epochs: records,
        final_metrics,
    })
}

/// Train on a dataset's training split.
pub fn train_on_dataset(
    est: &mut Estimator,
    dataset: &Dataset,
    config: &TrainConfig,
) -> Result<TrainHistory> {
    train(
        est,
        &dataset.frames,
        &dataset.manifest.train_indices(),
        config,
    )
}

fn evaluate_refs(est: &Estimator, frames: &[&Frame]) -> Result<EvalMetrics> {
    let mut pos_sum = 0.0;
    let mut att_sum = 0.0;
    for chunk in frames.chunks(32) {
        let batch = est.batch_from_images(chunk.iter().map(|f| &f.image))?;
        for (e, f) in est.estimate_batch(&batch)?.iter().zip(chunk) {
            pos_sum += position_error(e.position, f.label.position);
            att_sum += attitude_error(e.attitude()?, f.label.attitude);
        }
    }
    let n = frames.len() as Real;
    Ok(EvalMetrics {
        mean_position_error: pos_sum / n,
        mean_attitude_error_deg: att_sum / n,
    })
}
