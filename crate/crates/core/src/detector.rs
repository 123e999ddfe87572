//! LSTM classifier over attribution signatures that flags attacked frames,
//! with its training loop and accuracy accounting.

use std::collections::BTreeMap;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::bytes::{push_f64, push_str, push_u32, push_u64, Reader};
use crate::error::{Error, Result};
use crate::explain::ShapSignature;
use crate::numerics::{lstm_step, LstmVars, Real, Tape, Tensor, Var};
use crate::rng::{self, salt};

pub const DETECTOR_WEIGHTS_VERSION: u32 = 1;
const DET_MAGIC: &[u8; 4] = b"RNDT";
/// One sequence step per estimator output row: x, y, z, then the six
/// rotation components.
pub const SIGNATURE_ROWS: usize = 9;
const GATES: [&str; 4] = ["i", "f", "g", "o"];
const EVAL_CHUNK: usize = 256;

/// Architecture of the signature classifier.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DetectorConfig {
    /// Rows consumed per signature; must equal the estimator's output count.
    pub sequence_length: usize,
    /// Columns per row, the estimator's pooled feature width.
    pub feature_width: usize,
    pub lstm_hidden: usize,
    pub fc_width: usize,
    /// Scores at or above this flag the frame as attacked.
    pub threshold: Real,
    pub seed: u64,
}

impl DetectorConfig {
    pub fn new(feature_width: usize, seed: u64) -> Self {
        Self {
            sequence_length: SIGNATURE_ROWS,
            feature_width,
            lstm_hidden: 100,
            fc_width: 64,
            threshold: 0.5,
            seed,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.sequence_length != SIGNATURE_ROWS {
            return Err(Error::param(
                "sequence_length",
                format!("{} rows, signatures always carry {}", self.sequence_length, SIGNATURE_ROWS),
            ));
        }
        if self.feature_width == 0 {
            return Err(Error::param("feature_width", "must be positive"));
        }
        if self.lstm_hidden == 0 || self.fc_width == 0 {
            return Err(Error::param("lstm_hidden", "layer widths must be positive"));
        }
        if !(self.threshold > 0.0 && self.threshold < 1.0) {
            return Err(Error::param(
                "threshold",
                format!("{} must lie strictly inside (0, 1)", self.threshold),
            ));
        }
        Ok(())
    }
}

/// One labelled training example.
#[derive(Clone, Debug)]
pub struct DetectionSample {
    pub signature: ShapSignature,
    /// True when the frame was attacked.
    pub label: bool,
}

impl DetectionSample {
    /// Adopt the label recorded on the signature itself.
    pub fn from_signature(signature: ShapSignature) -> Self {
        let label = signature.attacked;
        Self { signature, label }
    }
}

/// One frame's verdict.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DetectionRecord {
    pub frame_index: usize,
    pub truth: bool,
    pub predicted: bool,
    pub score: Real,
}

/// The classifier: configuration, trainable tensors, and the fingerprint of
/// the estimator whose signatures it reads.
#[derive(Clone, Debug)]
pub struct Detector {
    config: DetectorConfig,
    params: BTreeMap<String, Tensor>,
    estimator_fingerprint: String,
}

impl Detector {
    /// Fresh detector with seeded initial weights, bound to one estimator.
    pub fn build(config: DetectorConfig, estimator_fingerprint: &str) -> Result<Self> {
        config.validate()?;
        let mut rng = rng::stream(config.seed, salt::WEIGHT_INIT, 0);
        let (g, h, fc) = (config.feature_width, config.lstm_hidden, config.fc_width);
        let mut params = BTreeMap::new();
        for gate in GATES {
            params.insert(
                format!("lstm.w_{}", gate),
                Tensor::randn(&[h, g], 0.0, 1.0 / (g as Real).sqrt(), &mut rng),
            );
        }
        for gate in GATES {
            params.insert(
                format!("lstm.u_{}", gate),
                Tensor::randn(&[h, h], 0.0, 1.0 / (h as Real).sqrt(), &mut rng),
            );
        }
        for gate in GATES {
            let bias = if gate == "f" {
                Tensor::full(&[h], 1.0)
            } else {
                Tensor::zeros(&[h])
            };
            params.insert(format!("lstm.b_{}", gate), bias);
        }
        params.insert(
            "fc1.weight".into(),
            Tensor::randn(&[fc, h], 0.0, (2.0 / h as Real).sqrt(), &mut rng),
        );
        params.insert("fc1.bias".into(), Tensor::zeros(&[fc]));
        params.insert(
            "head.weight".into(),
            Tensor::randn(&[1, fc], 0.0, (1.0 / fc as Real).sqrt(), &mut rng),
        );
        params.insert("head.bias".into(), Tensor::zeros(&[1]));
        Ok(Self {
            config,
            params,
            estimator_fingerprint: estimator_fingerprint.to_string(),
        })
    }

    pub fn config(&self) -> &DetectorConfig {
        &self.config
    }

    pub fn estimator_fingerprint(&self) -> &str {
        &self.estimator_fingerprint
    }

    fn check_signature(&self, signature: &ShapSignature) -> Result<()> {
        if signature.model_fingerprint != self.estimator_fingerprint {
            return Err(Error::Fingerprint {
                found: signature.model_fingerprint.clone(),
                expected: self.estimator_fingerprint.clone(),
            });
        }
        let expected = [SIGNATURE_ROWS, self.config.feature_width];
        if signature.values.shape() != expected {
            return Err(Error::dim(
                "signature",
                format!("{:?} does not match detector {:?}", signature.values.shape(), expected),
            ));
        }
        Ok(())
    }
}

fn expected_shapes(config: &DetectorConfig) -> BTreeMap<String, Vec<usize>> {
    let (g, h, fc) = (config.feature_width, config.lstm_hidden, config.fc_width);
    let mut shapes = BTreeMap::new();
    for gate in GATES {
        shapes.insert(format!("lstm.w_{}", gate), vec![h, g]);
        shapes.insert(format!("lstm.u_{}", gate), vec![h, h]);
        shapes.insert(format!("lstm.b_{}", gate), vec![h]);
    }
    shapes.insert("fc1.weight".into(), vec![fc, h]);
    shapes.insert("fc1.bias".into(), vec![fc]);
    shapes.insert("head.weight".into(), vec![1, fc]);
    shapes.insert("head.bias".into(), vec![1]);
    shapes
}

/// Row `t` of each signature stacked into a `[n, G]` step input.
fn step_input(signatures: &[&ShapSignature], t: usize, g: usize) -> Result<Tensor> {
    let mut data = Vec::with_capacity(signatures.len() * g);
    for s in signatures {
        data.extend_from_slice(&s.values.data()[t * g..(t + 1) * g]);
    }
    Tensor::new(vec![signatures.len(), g], data)
}

/// Run the classifier graph over a batch, returning the `[n, 1]` logits.
fn forward(
    tape: &mut Tape,
    config: &DetectorConfig,
    vars: &BTreeMap<String, Var>,
    signatures: &[&ShapSignature],
) -> Result<Var> {
    let n = signatures.len();
    let (g, h) = (config.feature_width, config.lstm_hidden);
    let lstm = LstmVars {
        w: GATES.map(|gate| vars[&format!("lstm.w_{}", gate)]),
        u: GATES.map(|gate| vars[&format!("lstm.u_{}", gate)]),
        b: GATES.map(|gate| vars[&format!("lstm.b_{}", gate)]),
    };
    let mut hidden = tape.constant(Tensor::zeros(&[n, h]));
    let mut cell = tape.constant(Tensor::zeros(&[n, h]));
    for t in 0..SIGNATURE_ROWS {
        let x = tape.constant(step_input(signatures, t, g)?);
        let (h_new, c_new) = lstm_step(tape, &lstm, x, hidden, cell)?;
        hidden = h_new;
        cell = c_new;
    }
    let activated = tape.relu(hidden);
    let fc1 = tape.linear(activated, vars["fc1.weight"], Some(vars["fc1.bias"]))?;
    let fc1 = tape.relu(fc1);
    tape.linear(fc1, vars["head.weight"], Some(vars["head.bias"]))
}

fn bind(tape: &mut Tape, params: &BTreeMap<String, Tensor>, requires_grad: bool) -> BTreeMap<String, Var> {
    params
        .iter()
        .map(|(name, tensor)| (name.clone(), tape.leaf(tensor.clone(), requires_grad)))
        .collect()
}

fn decide(score: Real, threshold: Real) -> bool {
    score >= threshold
}

fn scores(det: &Detector, signatures: &[&ShapSignature]) -> Result<Vec<Real>> {
    let mut out = Vec::with_capacity(signatures.len());
    for chunk in signatures.chunks(EVAL_CHUNK) {
        let mut tape = Tape::new();
        let vars = bind(&mut tape, &det.params, false);
        let logits = forward(&mut tape, &det.config, &vars, chunk)?;
        for &z in tape.value(logits).data() {
            out.push(1.0 / (1.0 + (-z).exp()));
        }
    }
    Ok(out)
}

/// Score one signature and threshold it. Pure in (weights, signature): the
/// LSTM state spans only the nine rows inside the signature.
pub fn detect(det: &Detector, signature: &ShapSignature) -> Result<DetectionRecord> {
    det.check_signature(signature)?;
    let score = scores(det, &[signature])?[0];
    Ok(DetectionRecord {
        frame_index: signature.frame_index,
        truth: signature.attacked,
        predicted: decide(score, det.config.threshold),
        score,
    })
}

/// Score a batch of signatures in evaluation-sized chunks.
pub fn detect_all(det: &Detector, signatures: &[ShapSignature]) -> Result<Vec<DetectionRecord>> {
    for s in signatures {
        det.check_signature(s)?;
    }
    let refs: Vec<&ShapSignature> = signatures.iter().collect();
    let all = scores(det, &refs)?;
    Ok(signatures
        .iter()
        .zip(all)
        .map(|(s, score)| DetectionRecord {
            frame_index: s.frame_index,
            truth: s.attacked,
            predicted: decide(score, det.config.threshold),
            score,
        })
        .collect())
}

/// Percent of records whose prediction matches the truth.
pub fn detection_accuracy(records: &[DetectionRecord]) -> Result<Real> {
    if records.is_empty() {
        return Err(Error::Empty("detection records"));
    }
    let correct = records.iter().filter(|r| r.predicted == r.truth).count();
    Ok(100.0 * correct as Real / records.len() as Real)
}

/// Schedule and stopping rules for detector training.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct DetectorTrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    /// Epochs without a validation-loss improvement before stopping.
    pub patience: usize,
    /// Fraction of samples used for the training side of the split.
    pub split_fraction: Real,
    /// Multiplier on the adaptive update; the classic rule uses 1.
    pub lr: Real,
    pub seed: u64,
}

impl Default for DetectorTrainConfig {
    fn default() -> Self {
        Self {
            epochs: 1000,
            batch_size: 128,
            patience: 20,
            split_fraction: 0.8,
            lr: 1.0,
            seed: 0,
        }
    }
}

impl DetectorTrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 || self.batch_size == 0 {
            return Err(Error::param("epochs", "epochs and batch_size must be positive"));
        }
        if self.patience == 0 {
            return Err(Error::param("patience", "must be positive"));
        }
        if !(self.split_fraction > 0.0 && self.split_fraction < 1.0) {
            return Err(Error::param(
                "split_fraction",
                format!("{} must lie strictly inside (0, 1)", self.split_fraction),
            ));
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::param("lr", "must be positive and finite"));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DetectorEpochRecord {
    pub epoch: usize,
    /// Batch loss averaged over the epoch's optimizer steps.
    pub train_loss: Real,
    pub val_loss: Real,
    pub val_accuracy: Real,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct DetectorHistory {
    pub epochs: Vec<DetectorEpochRecord>,
    /// Epoch whose weights were kept.
    pub best_epoch: usize,
    pub stopped_early: bool,
}

/// Shuffle `0..n` and cut at `round(n * fraction)`.
pub(crate) fn split_indices(n: usize, fraction: Real, seed: u64) -> (Vec<usize>, Vec<usize>) {
    let mut indices: Vec<usize> = (0..n).collect();
    let mut rng = rng::stream(seed, salt::SPLIT, 0);
    for i in (1..n).rev() {
        let j = rand::Rng::gen_range(&mut rng, 0..=i);
        indices.swap(i, j);
    }
    let cut = ((n as Real) * fraction).round() as usize;
    let val = indices.split_off(cut.min(n));
    (indices, val)
}

struct Adadelta {
    rho: Real,
    eps: Real,
    grad_sq: BTreeMap<String, Vec<Real>>,
    delta_sq: BTreeMap<String, Vec<Real>>,
}

impl Adadelta {
    fn new() -> Self {
        Self {
            rho: 0.95,
            eps: 1e-6,
            grad_sq: BTreeMap::new(),
            delta_sq: BTreeMap::new(),
        }
    }

    fn step(
        &mut self,
        params: &mut BTreeMap<String, Tensor>,
        vars: &BTreeMap<String, Var>,
        mut grads: crate::numerics::Gradients,
        lr: Real,
    ) {
        for (name, tensor) in params.iter_mut() {
            let Some(grad) = vars.get(name).and_then(|&v| grads.take(v)) else {
                continue;
            };
            let n = tensor.len();
            let eg = self.grad_sq.entry(name.clone()).or_insert_with(|| vec![0.0; n]);
            let ed = self.delta_sq.entry(name.clone()).or_insert_with(|| vec![0.0; n]);
            for (((p, &g), eg), ed) in tensor
                .data_mut()
                .iter_mut()
                .zip(grad.data())
                .zip(eg.iter_mut())
                .zip(ed.iter_mut())
            {
                *eg = self.rho * *eg + (1.0 - self.rho) * g * g;
                let delta = -((*ed + self.eps).sqrt() / (*eg + self.eps).sqrt()) * g;
                *ed = self.rho * *ed + (1.0 - self.rho) * delta * delta;
                *p += lr * delta;
            }
        }
    }
}

fn batch_loss(det: &Detector, samples: &[&DetectionSample]) -> Result<Real> {
    let mut total = 0.0;
    for chunk in samples.chunks(EVAL_CHUNK) {
        let mut tape = Tape::new();
        let vars = bind(&mut tape, &det.params, false);
        let refs: Vec<&ShapSignature> = chunk.iter().map(|s| &s.signature).collect();
        let logits = forward(&mut tape, &det.config, &vars, &refs)?;
        let targets: Vec<Real> = chunk.iter().map(|s| if s.label { 1.0 } else { 0.0 }).collect();
        let loss = tape.bce_with_logits(logits, &targets)?;
        total += tape.value(loss).item() * chunk.len() as Real;
    }
    Ok(total / samples.len() as Real)
}

fn batch_accuracy(det: &Detector, samples: &[&DetectionSample]) -> Result<Real> {
    let mut correct = 0usize;
    for chunk in samples.chunks(EVAL_CHUNK) {
        let refs: Vec<&ShapSignature> = chunk.iter().map(|s| &s.signature).collect();
        let s = scores(det, &refs)?;
        correct += chunk
            .iter()
            .zip(s)
            .filter(|(sample, score)| decide(*score, det.config.threshold) == sample.label)
            .count();
    }
    Ok(100.0 * correct as Real / samples.len() as Real)
}

/// Train with per-dimension adaptive updates, early-stopping on validation
/// loss, and keep the best-validation weights.
pub fn train_detector(
    det: &mut Detector,
    samples: &[DetectionSample],
    config: &DetectorTrainConfig,
) -> Result<DetectorHistory> {
    config.validate()?;
    if samples.is_empty() {
        return Err(Error::Empty("detection samples"));
    }
    for s in samples {
        det.check_signature(&s.signature)?;
    }
    if samples.iter().all(|s| s.label) || samples.iter().all(|s| !s.label) {
        return Err(Error::Training(
            "detector training needs both attacked and clean samples".into(),
        ));
    }
    let (train_idx, val_idx) = split_indices(samples.len(), config.split_fraction, config.seed);
    if train_idx.is_empty() || val_idx.is_empty() {
        return Err(Error::Training(format!(
            "split {} leaves {} train / {} validation samples",
            config.split_fraction,
            train_idx.len(),
            val_idx.len()
        )));
    }
    let train: Vec<&DetectionSample> = train_idx.iter().map(|&i| &samples[i]).collect();
    let val: Vec<&DetectionSample> = val_idx.iter().map(|&i| &samples[i]).collect();
    if train.iter().all(|s| s.label) || train.iter().all(|s| !s.label) {
        return Err(Error::Training(
            "training split ended up single-class; use more samples or another seed".into(),
        ));
    }

    let mut optimizer = Adadelta::new();
    let mut history = Vec::new();
    let mut best: Option<(Real, usize, BTreeMap<String, Tensor>)> = None;
    let mut since_best = 0usize;
    let mut order: Vec<usize> = (0..train.len()).collect();

    for epoch in 0..config.epochs {
        let mut shuffle_rng = rng::stream(config.seed, salt::SHUFFLE, epoch as u64);
        for i in (1..order.len()).rev() {
            let j = rand::Rng::gen_range(&mut shuffle_rng, 0..=i);
            order.swap(i, j);
        }
        let mut epoch_loss = 0.0;
        let mut steps = 0usize;
        for chunk in order.chunks(config.batch_size) {
            let mut tape = Tape::new();
            let vars = bind(&mut tape, &det.params, true);
            let refs: Vec<&ShapSignature> = chunk.iter().map(|&i| &train[i].signature).collect();
            let logits = forward(&mut tape, &det.config, &vars, &refs)?;
            let targets: Vec<Real> = chunk
                .iter()
                .map(|&i| if train[i].label { 1.0 } else { 0.0 })
                .collect();
            let loss = tape.bce_with_logits(logits, &targets)?;
            let loss_val = tape.value(loss).item();
            if !loss_val.is_finite() {
                return Err(Error::Training(format!(
                    "loss became non-finite at epoch {} step {}",
                    epoch, steps
                )));
            }
            let grads = tape.backward(loss)?;
            optimizer.step(&mut det.params, &vars, grads, config.lr);
            epoch_loss += loss_val;
            steps += 1;
        }

        let val_loss = batch_loss(det, &val)?;
        let val_accuracy = batch_accuracy(det, &val)?;
        history.push(DetectorEpochRecord {
            epoch,
            train_loss: epoch_loss / steps as Real,
            val_loss,
            val_accuracy,
        });

        let improved = best.as_ref().map_or(true, |(b, _, _)| val_loss < *b);
        if improved {
            best = Some((val_loss, epoch, det.params.clone()));
            since_best = 0;
        } else {
            since_best += 1;
            if since_best >= config.patience {
                break;
            }
        }
    }

    let (_, best_epoch, best_params) = best.unwrap();
    det.params = best_params;
    Ok(DetectorHistory {
        stopped_early: history.len() < config.epochs,
        epochs: history,
        best_epoch,
    })
}

impl Detector {
    /// Serialize config, estimator binding, and every tensor.
    pub fn save_weights(&self, path: &Path) -> Result<()> {
        let config_json = serde_json::to_string(&self.config).map_err(|e| Error::Format {
            what: "detector config",
            detail: e.to_string(),
        })?;
        let mut buf = Vec::new();
        buf.extend_from_slice(DET_MAGIC);
        push_u32(&mut buf, DETECTOR_WEIGHTS_VERSION);
        push_str(&mut buf, &config_json);
        push_str(&mut buf, &self.estimator_fingerprint);
        push_u32(&mut buf, self.params.len() as u32);
        for (name, tensor) in &self.params {
            push_str(&mut buf, name);
            push_u32(&mut buf, tensor.rank() as u32);
            for d in tensor.shape() {
                push_u64(&mut buf, *d as u64);
            }
            for &v in tensor.data() {
                push_f64(&mut buf, v as f64);
            }
        }
        std::fs::write(path, &buf).map_err(|e| Error::io(path.display().to_string(), e))
    }

    pub fn load_weights(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path.display().to_string(), e))?;
        let mut r = Reader::new(&bytes, "detector weights");
        if r.take(4)? != DET_MAGIC {
            return Err(Error::Format {
                what: "detector weights magic",
                detail: "file does not start with RNDT".into(),
            });
        }
        let version = r.u32()?;
        if version != DETECTOR_WEIGHTS_VERSION {
            return Err(Error::Version {
                what: "detector weights",
                found: version,
                expected: DETECTOR_WEIGHTS_VERSION,
            });
        }
        let config: DetectorConfig =
            serde_json::from_str(&r.str_prefixed(4096)?).map_err(|e| Error::Format {
                what: "detector config",
                detail: e.to_string(),
            })?;
        config.validate()?;
        let estimator_fingerprint = r.str_prefixed(256)?;
        let count = r.u32()? as usize;
        let mut params = BTreeMap::new();
        for _ in 0..count {
            let name = r.str_prefixed(4096)?;
            let rank = r.u32()? as usize;
            if rank > 8 {
                return Err(Error::Format {
                    what: "detector weights",
                    detail: format!("tensor {} has rank {}", name, rank),
                });
            }
            let mut shape = Vec::with_capacity(rank);
            for _ in 0..rank {
                shape.push(r.u64()? as usize);
            }
            let len = shape.iter().try_fold(1usize, |acc, &d| acc.checked_mul(d));
            let Some(len) = len else {
                return Err(Error::Format {
                    what: "detector weights",
                    detail: format!("tensor {} shape overflows", name),
                });
            };
            let data: Vec<Real> = r.f64_chunk(len)?.map(|v| v as Real).collect();
            if params.insert(name.clone(), Tensor::new(shape, data)?).is_some() {
                return Err(Error::Format {
                    what: "detector weights",
                    detail: format!("duplicate tensor {}", name),
                });
            }
        }
        r.finish()?;
        let expected = expected_shapes(&config);
        for (name, shape) in &expected {
            match params.get(name) {
                None => {
                    return Err(Error::Format {
                        what: "detector weights",
                        detail: format!("missing tensor {}", name),
                    })
                }
                Some(t) if t.shape() != shape.as_slice() => {
                    return Err(Error::Format {
                        what: "detector weights",
                        detail: format!("tensor {} is {:?}, expected {:?}", name, t.shape(), shape),
                    })
                }
                _ => {}
            }
        }
        if let Some(extra) = params.keys().find(|k| !expected.contains_key(*k)) {
            return Err(Error::Format {
                what: "detector weights",
                detail: format!("unexpected tensor {}", extra),
            });
        }
        Ok(Self {
            config,
            params,
            estimator_fingerprint,
        })
    }
}

/// Delimited text report: one line per record.
pub fn write_detection_report<W: Write>(writer: W, records: &[DetectionRecord]) -> Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    w.write_record(["frame", "truth", "predicted", "score"])
        .map_err(|e| Error::Format {
            what: "detection report",
            detail: e.to_string(),
        })?;
    for r in records {
        w.write_record([
            r.frame_index.to_string(),
            r.truth.to_string(),
            r.predicted.to_string(),
            format!("{:.6}", r.score),
        ])
        .map_err(|e| Error::Format {
            what: "detection report",
            detail: e.to_string(),
        })?;
    }
    w.flush().map_err(|e| Error::io("detection report", e))
}
