//! Attribution of the estimator's 9 outputs to the pooled features, using
//! DeepLIFT-style rescale multipliers averaged over a background sample set.
//! The 9×G signature matrix is the detector's input.

use std::path::Path;

use sha2::{Digest, Sha256};

use crate::bytes::{push_f64, push_str, push_u32, push_u64, Reader};
use crate::error::{Error, Result};
use crate::estimator::Estimator;
use crate::numerics::{Real, Tensor};
use crate::parallel;
use crate::rng::{self, salt};
use crate::scenegen::Image;

pub const SIGNATURE_VERSION: u32 = 1;
const SIG_MAGIC: &[u8; 4] = b"RNSG";
/// Below this input gap the rescale ratio degenerates; the layer derivative
/// at the frame's value substitutes.
const RESCALE_GUARD: Real = 1e-7;

/// One stage of the head sub-network between pooled features and outputs.
#[derive(Clone, Debug)]
pub enum HeadLayer {
    /// `y = W x + b` with `W` of shape `[out, in]`.
    Linear { weight: Tensor, bias: Tensor },
    LeakyRelu { slope: Real },
    Relu,
    Sigmoid,
}

impl HeadLayer {
    fn apply_scalar(&self, x: Real) -> Real {
        match self {
            HeadLayer::Linear { .. } => unreachable!("linear layers are not elementwise"),
            HeadLayer::LeakyRelu { slope } => {
                if x > 0.0 {
                    x
                } else {
                    slope * x
                }
            }
            HeadLayer::Relu => x.max(0.0),
            HeadLayer::Sigmoid => 1.0 / (1.0 + (-x).exp()),
        }
    }

    fn derivative(&self, x: Real) -> Real {
        match self {
            HeadLayer::Linear { .. } => unreachable!("linear layers are not elementwise"),
            HeadLayer::LeakyRelu { slope } => {
                if x > 0.0 {
                    1.0
                } else {
                    *slope
                }
            }
            HeadLayer::Relu => {
                if x > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            HeadLayer::Sigmoid => {
                let s = self.apply_scalar(x);
                s * (1.0 - s)
            }
        }
    }
}

/// The sub-network from the pooled features to the outputs.
#[derive(Clone, Debug)]
pub struct HeadNet {
    layers: Vec<HeadLayer>,
    input_dim: usize,
    output_dim: usize,
}

impl HeadNet {
    pub fn new(layers: Vec<HeadLayer>) -> Result<Self> {
        let Some(first_linear) = layers.iter().find_map(|l| match l {
            HeadLayer::Linear { weight, .. } => Some(weight.dim(1)),
            _ => None,
        }) else {
            return Err(Error::param(
                "head layers",
                "at least one linear layer is required",
            ));
        };
        let input_dim = first_linear;
        let mut dim = input_dim;
        for layer in &layers {
            if let HeadLayer::Linear { weight, bias } = layer {
                if weight.rank() != 2 {
                    return Err(Error::dim("head weight", "must be a matrix"));
                }
                if weight.dim(1) != dim {
                    return Err(Error::dim(
                        "head weight",
                        format!("expects {} inputs, previous layer emits {}", weight.dim(1), dim),
                    ));
                }
                if bias.shape() != [weight.dim(0)] {
                    return Err(Error::dim(
                        "head bias",
                        format!("{:?} does not match {} outputs", bias.shape(), weight.dim(0)),
                    ));
                }
                dim = weight.dim(0);
            }
        }
        Ok(Self {
            layers,
            input_dim,
            output_dim: dim,
        })
    }

    /// Single affine map.
    pub fn affine(weight: Tensor, bias: Tensor) -> Result<Self> {
        Self::new(vec![HeadLayer::Linear { weight, bias }])
    }

    /// The estimator's two affine heads stacked into one `[9, G]` map,
    /// position rows first. Dropout is identity at evaluation time, so this
    /// is exactly the network between pooling and outputs.
    pub fn from_estimator(est: &Estimator) -> Result<Self> {
        let params = est.params();
        let g = est.config().gap_width;
        let mut weight = Vec::with_capacity(9 * g);
        weight.extend_from_slice(params["fc_pos.weight"].data());
        weight.extend_from_slice(params["fc_att.weight"].data());
        let mut bias = Vec::with_capacity(9);
        bias.extend_from_slice(params["fc_pos.bias"].data());
        bias.extend_from_slice(params["fc_att.bias"].data());
        Self::affine(Tensor::new(vec![9, g], weight)?, Tensor::new(vec![9], bias)?)
    }

    pub fn input_dim(&self) -> usize {
        self.input_dim
    }

    pub fn output_dim(&self) -> usize {
        self.output_dim
    }

    /// Per-layer inputs followed by the final output
    /// (`trace.len() == layers.len() + 1`).
    fn forward_trace(&self, z: &[Real]) -> Result<Vec<Vec<Real>>> {
        if z.len() != self.input_dim {
            return Err(Error::dim(
                "head input",
                format!("{} values, head expects {}", z.len(), self.input_dim),
            ));
        }
        let mut trace = vec![z.to_vec()];
        for layer in &self.layers {
            let x = trace.last().unwrap();
            let y = match layer {
                HeadLayer::Linear { weight, bias } => {
                    let (rows, cols) = (weight.dim(0), weight.dim(1));
                    let w = weight.data();
                    (0..rows)
                        .map(|i| {
                            let mut acc = bias.data()[i];
                            for j in 0..cols {
                                acc += w[i * cols + j] * x[j];
                            }
                            acc
                        })
                        .collect()
                }
                elementwise => x.iter().map(|&v| elementwise.apply_scalar(v)).collect(),
            };
            trace.push(y);
        }
        Ok(trace)
    }

    pub fn forward(&self, z: &[Real]) -> Result<Vec<Real>> {
        Ok(self.forward_trace(z)?.pop().unwrap())
    }

    /// DeepLIFT multipliers from every output to every input against one
    /// reference point: linear layers contribute their weights, elementwise
    /// layers the rescale ratio Δout/Δin.
    fn multipliers(&self, trace: &[Vec<Real>], ref_trace: &[Vec<Real>]) -> Vec<Real> {
        let out = self.output_dim;
        let mut m: Vec<Real> = (0..out * out)
            .map(|i| if i % (out + 1) == 0 { 1.0 } else { 0.0 })
            .collect();
        let mut cols = out;
        for (l, layer) in self.layers.iter().enumerate().rev() {
            match layer {
                HeadLayer::Linear { weight, .. } => {
                    let (rows_w, cols_w) = (weight.dim(0), weight.dim(1));
                    debug_assert_eq!(cols, rows_w);
                    let w = weight.data();
                    let mut next = vec![0.0; out * cols_w];
                    for i in 0..out {
                        for k in 0..rows_w {
                            let mik = m[i * cols + k];
                            if mik == 0.0 {
                                continue;
                            }
                            for j in 0..cols_w {
                                next[i * cols_w + j] += mik * w[k * cols_w + j];
                            }
                        }
                    }
                    m = next;
                    cols = cols_w;
                }
                elementwise => {
                    let x = &trace[l];
                    let r = &ref_trace[l];
                    for j in 0..cols {
                        let dx = x[j] - r[j];
                        let mult = if dx.abs() < RESCALE_GUARD {
                            elementwise.derivative(x[j])
                        } else {
                            (elementwise.apply_scalar(x[j]) - elementwise.apply_scalar(r[j])) / dx
                        };
                        for i in 0..out {
                            m[i * cols + j] *= mult;
                        }
                    }
                }
            }
        }
        m
    }
}

/// Reference pooled activations the attributions are measured against.
#[derive(Clone, Debug)]
pub struct BackgroundSet {
    activations: Tensor,
    source: String,
    hash: String,
}

impl BackgroundSet {
    /// Wrap a `[B, G]` activation matrix. `source` names where the rows came
    /// from and is folded into the hash.
    pub fn new(activations: Tensor, source: String) -> Result<Self> {
        if activations.rank() != 2 || activations.dim(0) == 0 {
            return Err(Error::dim(
                "background activations",
                format!("{:?} must be a nonempty [B, G] matrix", activations.shape()),
            ));
        }
        if !activations.all_finite() {
            return Err(Error::param(
                "background activations",
                "must be finite",
            ));
        }
        let mut hasher = Sha256::new();
        hasher.update(source.as_bytes());
        hasher.update((activations.dim(0) as u64).to_le_bytes());
        hasher.update((activations.dim(1) as u64).to_le_bytes());
        for &v in activations.data() {
            hasher.update((v as f64).to_le_bytes());
        }
        let hash = hasher
            .finalize()
            .iter()
            .map(|b| format!("{:02x}", b))
            .collect::<String>()[..16]
            .to_string();
        Ok(Self {
            activations,
            source,
            hash,
        })
    }

    pub fn len(&self) -> usize {
        self.activations.dim(0)
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn feature_dim(&self) -> usize {
        self.activations.dim(1)
    }

    pub fn row(&self, i: usize) -> &[Real] {
        let g = self.feature_dim();
        &self.activations.data()[i * g..(i + 1) * g]
    }

    pub fn source(&self) -> &str {
        &self.source
    }

    /// Digest of the source string, dimensions, and activation values.
    pub fn hash(&self) -> &str {
        &self.hash
    }
}

/// Run `count` seeded-without-replacement images through the estimator and
/// keep their pooled activations as the background set.
pub fn collect_background(
    est: &Estimator,
    images: &[Image],
    count: usize,
    seed: u64,
) -> Result<BackgroundSet> {
    if images.is_empty() {
        return Err(Error::Empty("background images"));
    }
    if count == 0 || count > images.len() {
        return Err(Error::param(
            "count",
            format!("{} must lie in [1, {}]", count, images.len()),
        ));
    }
    let mut indices: Vec<usize> = (0..images.len()).collect();
    let mut pick_rng = rng::stream(seed, salt::BACKGROUND, 0);
    for i in 0..count {
        let j = rand::Rng::gen_range(&mut pick_rng, i..images.len());
        indices.swap(i, j);
    }
    indices.truncate(count);

    let g = est.config().gap_width;
    let mut data = Vec::with_capacity(count * g);
    for chunk in indices.chunks(32) {
        let batch = est.batch_from_images(chunk.iter().map(|&i| &images[i]))?;
        for e in est.estimate_batch(&batch)? {
            data.extend_from_slice(&e.gap_activation);
        }
    }
    BackgroundSet::new(
        Tensor::new(vec![count, g], data)?,
        format!("{}:{}:{}", est.fingerprint(), seed, count),
    )
}

/// Per-frame attribution matrix plus the provenance that binds it to one
/// model, background set, and frame.
#[derive(Clone, Debug, PartialEq)]
pub struct ShapSignature {
    /// `[outputs, features]` attribution values.
    pub values: Tensor,
    pub frame_index: usize,
    pub attacked: bool,
    pub epsilon: Real,
    pub model_fingerprint: String,
    pub background_hash: String,
}

impl ShapSignature {
    pub fn output_dim(&self) -> usize {
        self.values.dim(0)
    }

    pub fn feature_dim(&self) -> usize {
        self.values.dim(1)
    }

    /// Sum of attributions per output row.
    pub fn row_sums(&self) -> Vec<Real> {
        let (out, g) = (self.output_dim(), self.feature_dim());
        (0..out)
            .map(|i| self.values.data()[i * g..(i + 1) * g].iter().sum())
            .collect()
    }
}

/// Raw attribution matrix `[out, in]` of a head at `z`, averaged over every
/// background row.
pub fn shap_matrix(head: &HeadNet, z: &[Real], background: &BackgroundSet) -> Result<Tensor> {
    if background.feature_dim() != head.input_dim() {
        return Err(Error::dim(
            "background",
            format!(
                "feature dim {} does not match head input {}",
                background.feature_dim(),
                head.input_dim()
            ),
        ));
    }
    if z.iter().any(|v| !v.is_finite()) {
        return Err(Error::param("gap activation", "must be finite"));
    }
    let trace = head.forward_trace(z)?;
    let (out, g) = (head.output_dim(), head.input_dim());
    let mut phi = vec![0.0; out * g];
    for r in 0..background.len() {
        let reference = background.row(r);
        let ref_trace = head.forward_trace(reference)?;
        let m = head.multipliers(&trace, &ref_trace);
        for i in 0..out {
            for j in 0..g {
                phi[i * g + j] += m[i * g + j] * (z[j] - reference[j]);
            }
        }
    }
    let scale = 1.0 / background.len() as Real;
    for v in &mut phi {
        *v *= scale;
    }
    Tensor::new(vec![out, g], phi)
}

/// Attribute one frame's pooled activation through the estimator's head.
pub fn shap_for_frame(
    est: &Estimator,
    gap_activation: &[Real],
    background: &BackgroundSet,
    frame_index: usize,
) -> Result<ShapSignature> {
    let head = HeadNet::from_estimator(est)?;
    signature_from_head(&head, est, gap_activation, background, frame_index)
}

/// Attribute many frames, building the head once and splitting frames
/// across the worker pool.
pub fn shap_for_frames(
    est: &Estimator,
    gap_activations: &[Vec<Real>],
    background: &BackgroundSet,
) -> Result<Vec<ShapSignature>> {
    let head = HeadNet::from_estimator(est)?;
    parallel::map_indexed(gap_activations.len(), |i| {
        signature_from_head(&head, est, &gap_activations[i], background, i)
    })
    .into_iter()
    .collect()
}

fn signature_from_head(
    head: &HeadNet,
    est: &Estimator,
    gap_activation: &[Real],
    background: &BackgroundSet,
    frame_index: usize,
) -> Result<ShapSignature> {
    Ok(ShapSignature {
        values: shap_matrix(head, gap_activation, background)?,
        frame_index,
        attacked: false,
        epsilon: 0.0,
        model_fingerprint: est.fingerprint(),
        background_hash: background.hash().to_string(),
    })
}

/// Write a batch of signatures that share one model and background.
pub fn write_signatures(path: &Path, signatures: &[ShapSignature]) -> Result<()> {
    let Some(first) = signatures.first() else {
        return Err(Error::Empty("signatures"));
    };
    let (out, g) = (first.output_dim(), first.feature_dim());
    for s in signatures {
        if s.output_dim() != out
            || s.feature_dim() != g
            || s.model_fingerprint != first.model_fingerprint
            || s.background_hash != first.background_hash
        {
            return Err(Error::param(
                "signatures",
                "all signatures in one file must share shape, model, and background",
            ));
        }
    }
    let mut buf = Vec::new();
    buf.extend_from_slice(SIG_MAGIC);
    push_u32(&mut buf, SIGNATURE_VERSION);
    push_u32(&mut buf, out as u32);
    push_u32(&mut buf, g as u32);
    push_str(&mut buf, &first.model_fingerprint);
    push_str(&mut buf, &first.background_hash);
    push_u32(&mut buf, signatures.len() as u32);
    for s in signatures {
        push_u64(&mut buf, s.frame_index as u64);
        buf.push(s.attacked as u8);
        push_f64(&mut buf, s.epsilon as f64);
        for &v in s.values.data() {
            push_f64(&mut buf, v as f64);
        }
    }
    std::fs::write(path, &buf).map_err(|e| Error::io(path.display().to_string(), e))
}

pub fn read_signatures(path: &Path) -> Result<Vec<ShapSignature>> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path.display().to_string(), e))?;
    let mut r = Reader::new(&bytes, "signatures");
    if r.take(4)? != SIG_MAGIC {
        return Err(Error::Format {
            what: "signatures magic",
            detail: "file does not start with RNSG".into(),
        });
    }
    let version = r.u32()?;
    if version != SIGNATURE_VERSION {
        return Err(Error::Version {
            what: "signatures",
            found: version,
            expected: SIGNATURE_VERSION,
        });
    }
    let out = r.u32()? as usize;
    let g = r.u32()? as usize;
    if out == 0 || g == 0 {
        return Err(Error::Format {
            what: "signatures",
            detail: format!("degenerate signature shape {}x{}", out, g),
        });
    }
    let model_fingerprint = r.str_prefixed(256)?;
    let background_hash = r.str_prefixed(256)?;
    let count = r.u32()? as usize;
    let mut signatures = Vec::with_capacity(count);
    for _ in 0..count {
        let frame_index = r.u64()? as usize;
        let attacked = match r.u8()? {
            0 => false,
            1 => true,
            other => {
                return Err(Error::Format {
                    what: "signatures",
                    detail: format!("attacked flag byte {}", other),
                })
            }
        };
        let epsilon = r.f64()? as Real;
        let values: Vec<Real> = r.f64_chunk(out * g)?.map(|v| v as Real).collect();
        signatures.push(ShapSignature {
            values: Tensor::new(vec![out, g], values)?,
            frame_index,
            attacked,
            epsilon,
            model_fingerprint: model_fingerprint.clone(),
            background_hash: background_hash.clone(),
        });
    }
    r.finish()?;
    Ok(signatures)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn toy_affine(out: usize, input: usize, seed: u64) -> HeadNet {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let weight = Tensor::randn(&[out, input], 0.0, 1.0, &mut rng);
        let bias = Tensor::randn(&[out], 0.0, 0.5, &mut rng);
        HeadNet::affine(weight, bias).unwrap()
    }

    fn background_rows(rows: Vec<Vec<Real>>) -> BackgroundSet {
        let b = rows.len();
        let g = rows[0].len();
        let data: Vec<Real> = rows.into_iter().flatten().collect();
        BackgroundSet::new(Tensor::new(vec![b, g], data).unwrap(), "test".into()).unwrap()
    }

    #[test]
    fn affine_head_matches_the_closed_form() {
        let head = toy_affine(3, 5, 1);
        let HeadLayer::Linear { weight, .. } = &head.layers[0] else {
            unreachable!()
        };
        let w = weight.clone();
        let z: Vec<Real> = vec![0.4, -1.2, 0.0, 2.5, -0.3];
        let reference: Vec<Real> = vec![0.1, 0.1, 0.1, 0.1, 0.1];
        let bg = background_rows(vec![reference.clone()]);
        let phi = shap_matrix(&head, &z, &bg).unwrap();
        for i in 0..3 {
            for j in 0..5 {
                let expected = w.data()[i * 5 + j] * (z[j] - reference[j]);
                assert!(
                    (phi.data()[i * 5 + j] - expected).abs() < 1e-9,
                    "phi[{},{}]",
                    i,
                    j
                );
            }
        }
    }

    #[test]
    fn background_mean_input_has_zero_signature() {
        let head = toy_affine(2, 4, 3);
        let z: Vec<Real> = vec![1.0, -0.5, 0.25, 2.0];
        let above: Vec<Real> = z.iter().map(|v| v + 0.75).collect();
        let below: Vec<Real> = z.iter().map(|v| v - 0.75).collect();
        let bg = background_rows(vec![above, below]);
        let phi = shap_matrix(&head, &z, &bg).unwrap();
        for &v in phi.data() {
            assert!(v.abs() < 1e-12, "attribution {} should vanish", v);
        }
    }

    #[test]
    fn brute_force_shapley_agrees_on_a_toy_head() {
        // Exact Shapley by enumerating all coalitions: for each feature
        // subset S the coalition value substitutes background values for the
        // features outside S, averaged over background rows.
        let n = 8;
        let head = toy_affine(2, n, 7);
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let z: Vec<Real> = (0..n)
            .map(|_| rand::Rng::gen_range(&mut rng, -2.0..2.0))
            .collect();
        let rows: Vec<Vec<Real>> = (0..2)
            .map(|_| {
                (0..n)
                    .map(|_| rand::Rng::gen_range(&mut rng, -2.0..2.0))
                    .collect()
            })
            .collect();
        let bg = background_rows(rows.clone());

        let coalition_value = |mask: u32| -> Vec<Real> {
            let mut acc = vec![0.0; head.output_dim()];
            for row in &rows {
                let mixed: Vec<Real> = (0..n)
                    .map(|j| if mask & (1 << j) != 0 { z[j] } else { row[j] })
                    .collect();
                for (a, v) in acc.iter_mut().zip(head.forward(&mixed).unwrap()) {
                    *a += v;
                }
            }
            acc.iter().map(|v| v / rows.len() as Real).collect()
        };

        let mut factorial = [1.0f64; 9];
        for i in 1..9 {
            factorial[i] = factorial[i - 1] * i as f64;
        }
        let mut exact = vec![0.0f64; head.output_dim() * n];
        for j in 0..n {
            for mask in 0u32..(1 << n) {
                if mask & (1 << j) != 0 {
                    continue;
                }
                let s = mask.count_ones() as usize;
                let weight = factorial[s] * factorial[n - s - 1] / factorial[n];
                let with = coalition_value(mask | (1 << j));
                let without = coalition_value(mask);
                for i in 0..head.output_dim() {
                    exact[i * n + j] += weight * (with[i] - without[i]) as f64;
                }
            }
        }

        let phi = shap_matrix(&head, &z, &bg).unwrap();
        for (got, want) in phi.data().iter().zip(&exact) {
            assert!(
                ((*got as f64) - want).abs() < 1e-6,
                "shap {} vs exact {}",
                got,
                want
            );
        }
    }

    #[test]
    fn completeness_holds_through_nonlinear_layers() {
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        let head = HeadNet::new(vec![
            HeadLayer::Linear {
                weight: Tensor::randn(&[6, 10], 0.0, 0.8, &mut rng),
                bias: Tensor::randn(&[6], 0.0, 0.2, &mut rng),
            },
            HeadLayer::LeakyRelu { slope: 0.1 },
            HeadLayer::Linear {
                weight: Tensor::randn(&[4, 6], 0.0, 0.8, &mut rng),
                bias: Tensor::randn(&[4], 0.0, 0.2, &mut rng),
            },
            HeadLayer::Sigmoid,
        ])
        .unwrap();
        let z: Vec<Real> = (0..10)
            .map(|_| rand::Rng::gen_range(&mut rng, -1.5..1.5))
            .collect();
        let rows: Vec<Vec<Real>> = (0..8)
            .map(|_| {
                (0..10)
                    .map(|_| rand::Rng::gen_range(&mut rng, -1.5..1.5))
                    .collect()
            })
            .collect();
        let bg = background_rows(rows.clone());
        let phi = shap_matrix(&head, &z, &bg).unwrap();

        let f = head.forward(&z).unwrap();
        let mut mean_ref = vec![0.0; head.output_dim()];
        for row in &rows {
            for (a, v) in mean_ref.iter_mut().zip(head.forward(row).unwrap()) {
                *a += v;
            }
        }
        for a in &mut mean_ref {
            *a /= rows.len() as Real;
        }
        let g = head.input_dim();
        for i in 0..head.output_dim() {
            let sum: Real = phi.data()[i * g..(i + 1) * g].iter().sum();
            let expected = f[i] - mean_ref[i];
            assert!(
                (sum - expected).abs() <= 1e-3 * (1.0 + f[i].abs()),
                "row {}: sum {} vs {}",
                i,
                sum,
                expected
            );
        }
    }

    #[test]
    fn relu_rescale_handles_sign_changes_and_ties() {
        let head = HeadNet::new(vec![
            HeadLayer::Linear {
                weight: Tensor::new(vec![1, 1], vec![1.0]).unwrap(),
                bias: Tensor::new(vec![1], vec![0.0]).unwrap(),
            },
            HeadLayer::Relu,
        ])
        .unwrap();
        // Crossing zero: multiplier is the secant slope, not the derivative.
        let bg = background_rows(vec![vec![-1.0]]);
        let phi = shap_matrix(&head, &[1.0], &bg).unwrap();
        // relu(1) - relu(-1) = 1 over a gap of 2.
        assert!((phi.data()[0] - 1.0).abs() < 1e-12);
        // Identical input and reference: attribution must be exactly zero.
        let bg = background_rows(vec![vec![0.5]]);
        let phi = shap_matrix(&head, &[0.5], &bg).unwrap();
        assert_eq!(phi.data()[0], 0.0);
    }

    #[test]
    fn head_construction_rejects_mismatched_shapes() {
        let w = Tensor::new(vec![2, 3], vec![0.0; 6]).unwrap();
        let bad_bias = Tensor::new(vec![3], vec![0.0; 3]).unwrap();
        assert!(HeadNet::affine(w.clone(), bad_bias).is_err());
        assert!(HeadNet::new(vec![HeadLayer::Relu]).is_err());
        let b2 = Tensor::new(vec![2], vec![0.0; 2]).unwrap();
        let w_mismatch = Tensor::new(vec![4, 5], vec![0.0; 20]).unwrap();
        let b4 = Tensor::new(vec![4], vec![0.0; 4]).unwrap();
        assert!(HeadNet::new(vec![
            HeadLayer::Linear { weight: w, bias: b2 },
            HeadLayer::Linear {
                weight: w_mismatch,
                bias: b4
            },
        ])
        .is_err());
    }

    #[test]
    fn signature_files_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("sig.rnsg");
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let make = |idx: usize, attacked: bool, eps: Real, rng: &mut ChaCha8Rng| ShapSignature {
            values: Tensor::randn(&[9, 12], 0.0, 1.0, rng),
            frame_index: idx,
            attacked,
            epsilon: eps,
            model_fingerprint: "abcd1234abcd1234".into(),
            background_hash: "ffff0000ffff0000".into(),
        };
        let sigs = vec![
            make(0, false, 0.0, &mut rng),
            make(7, true, 0.3, &mut rng),
            make(8, true, 0.05, &mut rng),
        ];
        write_signatures(&path, &sigs).unwrap();
        let back = read_signatures(&path).unwrap();
        assert_eq!(sigs, back);

        let mut bytes = std::fs::read(&path).unwrap();
        bytes[0] = b'X';
        std::fs::write(&path, &bytes).unwrap();
        assert!(read_signatures(&path).is_err());
    }

    fn tiny_estimator() -> Estimator {
        let config = crate::estimator::EstimatorConfig {
            input_height: 16,
            input_width: 16,
            stem_channels: 2,
            stage_channels: vec![4],
            blocks_per_stage: vec![1],
            gap_width: 10,
            leaky_slope: 0.1,
            dropout_rate: 0.0,
        };
        Estimator::build(config, 21).unwrap()
    }

    fn noise_images(count: usize, seed: u64) -> Vec<Image> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..count)
            .map(|_| {
                let data: Vec<Real> = (0..16 * 16 * 3)
                    .map(|_| rand::Rng::gen_range(&mut rng, 0.0..=1.0))
                    .collect();
                Image::new(16, 16, data).unwrap()
            })
            .collect()
    }

    #[test]
    fn background_collection_is_seeded_and_validated() {
        let est = tiny_estimator();
        let images = noise_images(8, 2);
        let a = collect_background(&est, &images, 4, 11).unwrap();
        let b = collect_background(&est, &images, 4, 11).unwrap();
        assert_eq!(a.hash(), b.hash());
        assert_eq!(a.len(), 4);
        assert_eq!(a.feature_dim(), 10);
        let c = collect_background(&est, &images, 4, 12).unwrap();
        assert_ne!(a.hash(), c.hash());
        assert!(collect_background(&est, &images, 0, 1).is_err());
        assert!(collect_background(&est, &images, 9, 1).is_err());
        assert!(collect_background(&est, &[], 1, 1).is_err());
    }

    #[test]
    fn estimator_signatures_are_complete_and_deterministic() {
        let est = tiny_estimator();
        let images = noise_images(6, 4);
        let bg = collect_background(&est, &images, 3, 11).unwrap();
        let batch = est.batch_from_images(images.iter().skip(3)).unwrap();
        let estimates = est.estimate_batch(&batch).unwrap();

        let head = HeadNet::from_estimator(&est).unwrap();
        let mut mean_ref = vec![0.0; 9];
        for r in 0..bg.len() {
            for (a, v) in mean_ref.iter_mut().zip(head.forward(bg.row(r)).unwrap()) {
                *a += v;
            }
        }
        for a in &mut mean_ref {
            *a /= bg.len() as Real;
        }

        let gaps: Vec<Vec<Real>> = estimates.iter().map(|e| e.gap_activation.clone()).collect();
        let sigs = shap_for_frames(&est, &gaps, &bg).unwrap();
        assert_eq!(sigs.len(), 3);
        for (sig, e) in sigs.iter().zip(&estimates) {
            assert_eq!(sig.model_fingerprint, est.fingerprint());
            assert_eq!(sig.background_hash, bg.hash());
            let f: Vec<Real> = e
                .position
                .iter()
                .chain(e.attitude6d.0.iter())
                .copied()
                .collect();
            for (i, sum) in sig.row_sums().iter().enumerate() {
                let expected = f[i] - mean_ref[i];
                assert!(
                    (sum - expected).abs() <= 1e-3 * (1.0 + f[i].abs()),
                    "row {}: {} vs {}",
                    i,
                    sum,
                    expected
                );
            }
        }

        let again = shap_for_frame(&est, &gaps[0], &bg, 0).unwrap();
        assert_eq!(again.values, sigs[0].values);
    }

    #[test]
    fn mixed_provenance_files_are_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("sig.rnsg");
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let a = ShapSignature {
            values: Tensor::randn(&[9, 12], 0.0, 1.0, &mut rng),
            frame_index: 0,
            attacked: false,
            epsilon: 0.0,
            model_fingerprint: "aaaa".into(),
            background_hash: "bbbb".into(),
        };
        let mut b = a.clone();
        b.model_fingerprint = "cccc".into();
        assert!(write_signatures(&path, &[a, b]).is_err());
        assert!(write_signatures(&path, &[]).is_err());
    }
}
