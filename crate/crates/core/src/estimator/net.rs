//! Layer plan, parameter initialization, and the forward graph.

use std::collections::BTreeMap;

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::error::Result;
use crate::numerics::{BatchNormState, Tape, Tensor, Var};

use super::EstimatorConfig;

/// One convolution in the backbone; every conv is followed by batch norm,
/// so none carries a trainable bias.
pub(crate) struct ConvLayer {
    pub name: String,
    pub cin: usize,
    pub cout: usize,
    pub kernel: usize,
    pub stride: usize,
    pub pad: usize,
}

/// The backbone convolutions in forward order: 7x7 stride-2 stem, per-stage
/// stride-2 3x3 downsampling plus residual block pairs, and the 1x1
/// projection to the pooled width.
pub(crate) fn conv_layers(config: &EstimatorConfig) -> Vec<ConvLayer> {
    let mut layers = Vec::new();
    layers.push(ConvLayer {
        name: "stem".into(),
        cin: 3,
        cout: config.stem_channels,
        kernel: 7,
        stride: 2,
        pad: 3,
    });
    let mut cin = config.stem_channels;
    for (i, (&cout, &blocks)) in config
        .stage_channels
        .iter()
        .zip(config.blocks_per_stage.iter())
        .enumerate()
    {
        layers.push(ConvLayer {
            name: format!("stage{}.down", i),
            cin,
            cout,
            kernel: 3,
            stride: 2,
            pad: 1,
        });
        for j in 0..blocks {
            for half in ["a", "b"] {
                layers.push(ConvLayer {
                    name: format!("stage{}.block{}.{}", i, j, half),
                    cin: cout,
                    cout,
                    kernel: 3,
                    stride: 1,
                    pad: 1,
                });
            }
        }
        cin = cout;
    }
    layers.push(ConvLayer {
        name: "head".into(),
        cin,
        cout: config.gap_width,
        kernel: 1,
        stride: 1,
        pad: 0,
    });
    layers
}

pub(crate) fn kaiming_conv(layer: &ConvLayer, rng: &mut impl Rng) -> Tensor {
    let fan_in = (layer.cin * layer.kernel * layer.kernel) as f64;
    Tensor::randn(
        &[layer.cout, layer.cin, layer.kernel, layer.kernel],
        0.0,
        (2.0 / fan_in).sqrt(),
        rng,
    )
}

pub(crate) fn head_weight(out: usize, g: usize, rng: &mut impl Rng) -> Tensor {
    Tensor::randn(&[out, g], 0.0, (1.0 / g as f64).sqrt(), rng)
}

/// Register every parameter tensor on the tape.
pub(crate) fn bind(
    tape: &mut Tape,
    params: &BTreeMap<String, Tensor>,
    requires_grad: bool,
) -> BTreeMap<String, Var> {
    params
        .iter()
        .map(|(name, tensor)| (name.clone(), tape.leaf(tensor.clone(), requires_grad)))
        .collect()
}

/// Forward pass. Returns the 9-column output (position columns 0..3,
/// attitude columns 3..9) and the pooled G-vector before dropout.
pub(crate) fn forward(
    tape: &mut Tape,
    config: &EstimatorConfig,
    vars: &BTreeMap<String, Var>,
    bn_state: &mut BTreeMap<String, BatchNormState>,
    x: Var,
    train: bool,
    dropout_rng: &mut ChaCha8Rng,
) -> Result<(Var, Var)> {
    let slope = config.leaky_slope;
    let plan: BTreeMap<String, ConvLayer> = conv_layers(config)
        .into_iter()
        .map(|layer| (layer.name.clone(), layer))
        .collect();
    let conv_bn = |tape: &mut Tape,
                   bn_state: &mut BTreeMap<String, BatchNormState>,
                   name: &str,
                   x: Var|
     -> Result<Var> {
        let layer = &plan[name];
        let w = vars[&format!("{}.conv", name)];
        let zero_bias = tape.constant(Tensor::zeros(&[layer.cout]));
        let y = tape.conv2d(x, w, zero_bias, layer.stride, layer.pad)?;
        let state = bn_state.get_mut(name).expect("bn state for every conv");
        tape.batch_norm(
            y,
            vars[&format!("{}.gamma", name)],
            vars[&format!("{}.beta", name)],
            state,
            train,
        )
    };

    let mut h = conv_bn(tape, bn_state, "stem", x)?;
    h = tape.leaky_relu(h, slope);
    for (i, &blocks) in config.blocks_per_stage.iter().enumerate() {
        h = conv_bn(tape, bn_state, &format!("stage{}.down", i), h)?;
        h = tape.leaky_relu(h, slope);
        for j in 0..blocks {
            let skip = h;
            let a = conv_bn(tape, bn_state, &format!("stage{}.block{}.a", i, j), h)?;
            let a = tape.leaky_relu(a, slope);
            let b = conv_bn(tape, bn_state, &format!("stage{}.block{}.b", i, j), a)?;
            let sum = tape.add(skip, b)?;
            h = tape.leaky_relu(sum, slope);
        }
    }
    h = conv_bn(tape, bn_state, "head", h)?;
    h = tape.leaky_relu(h, slope);
    let gap = tape.global_avg_pool(h)?;
    let dropped = tape.dropout(gap, config.dropout_rate, train, dropout_rng)?;
    let pos = tape.linear(
        dropped,
        vars["fc_pos.weight"],
        Some(vars["fc_pos.bias"]),
    )?;
    let att = tape.linear(
        dropped,
        vars["fc_att.weight"],
        Some(vars["fc_att.bias"]),
    )?;
    let out = tape.concat_cols(pos, att)?;
    Ok((out, gap))
}
