//! Plain convolutional U-Net baseline: two 3×3 conv+ReLU per level, average
//! pooling down, nearest upsampling and skip concatenation up.

use super::params::{bind, Bound, ParamSpec};
use super::trust::check_input;
use super::{ModelConfig, ModelParams, UnetConfig};
use crate::error::Result;
use crate::tensor::{Tape, Tensor, Var};

fn double_conv(specs: &mut Vec<ParamSpec>, prefix: &str, c_in: usize, c_out: usize) {
    specs.push(ParamSpec::he(
        format!("{prefix}.conv1.weight"),
        [c_out, c_in, 3, 3],
        c_in * 9,
    ));
    specs.push(ParamSpec::zeros(format!("{prefix}.conv1.bias"), c_out));
    specs.push(ParamSpec::he(
        format!("{prefix}.conv2.weight"),
        [c_out, c_out, 3, 3],
        c_out * 9,
    ));
    specs.push(ParamSpec::zeros(format!("{prefix}.conv2.bias"), c_out));
}

pub(super) fn param_specs(c: &UnetConfig) -> Vec<ParamSpec> {
    let ch = &c.channels;
    let mut specs = Vec::new();
    let mut c_in = 1;
    for (l, &c_out) in ch.iter().enumerate() {
        double_conv(&mut specs, &format!("down{}", l + 1), c_in, c_out);
        c_in = c_out;
    }
    for l in (1..ch.len()).rev() {
        double_conv(&mut specs, &format!("up{l}"), ch[l] + ch[l - 1], ch[l - 1]);
    }
    specs.push(ParamSpec::lecun("head.weight", [1, ch[0], 1, 1], ch[0]));
    specs.push(ParamSpec::head_bias("head.bias"));
    specs
}

pub(super) fn macs(c: &UnetConfig) -> u64 {
    let ch: Vec<u64> = c.channels.iter().map(|&v| v as u64).collect();
    let mut total = 0;
    let mut c_in = 1;
    for (l, &c_out) in ch.iter().enumerate() {
        let res = (c.image_size >> l) as u64;
        total += res * res * 9 * (c_out * c_in + c_out * c_out);
        c_in = c_out;
    }
    for l in (1..ch.len()).rev() {
        let res = (c.image_size >> (l - 1)) as u64;
        total += res * res * 9 * (ch[l - 1] * (ch[l] + ch[l - 1]) + ch[l - 1] * ch[l - 1]);
    }
    let full = (c.image_size * c.image_size) as u64;
    total + full * ch[0]
}

fn conv_relu(tape: &mut Tape, p: &Bound, x: Var, name: &str) -> Result<Var> {
    let w = p.var(&format!("{name}.weight"))?;
    let b = p.var(&format!("{name}.bias"))?;
    let y = tape.conv2d(x, w, Some(b), 1, 1)?;
    Ok(tape.relu(y))
}

fn block(tape: &mut Tape, p: &Bound, x: Var, prefix: &str) -> Result<Var> {
    let h = conv_relu(tape, p, x, &format!("{prefix}.conv1"))?;
    conv_relu(tape, p, h, &format!("{prefix}.conv2"))
}

/// Records the U-Net forward pass; returns the `1×H×W` sigmoid output.
pub fn unet_graph(tape: &mut Tape, p: &Bound, c: &UnetConfig, input: Var) -> Result<Var> {
    let levels = c.channels.len();
    let mut x = tape.reshape(input, [1, c.image_size, c.image_size])?;
    let mut skips = Vec::with_capacity(levels);
    for l in 0..levels {
        if l > 0 {
            let res = c.image_size >> l;
            x = tape.adaptive_avg_pool(x, res, res)?;
        }
        x = block(tape, p, x, &format!("down{}", l + 1))?;
        skips.push(x);
    }
    for l in (1..levels).rev() {
        let up = tape.upsample_nearest(x, 2)?;
        let merged = tape.concat(&[up, skips[l - 1]], 0)?;
        x = block(tape, p, merged, &format!("up{l}"))?;
    }
    let w = p.var("head.weight")?;
    let b = p.var("head.bias")?;
    let logits = tape.conv2d(x, w, Some(b), 1, 0)?;
    let out = tape.sigmoid(logits);
    tape.set_label(out, "output");
    Ok(out)
}

pub fn forward_unet(params: &ModelParams, config: &UnetConfig, y: &Tensor) -> Result<Tensor> {
    params.check(&ModelConfig::Unet(config.clone()).param_specs()?)?;
    check_input(config.image_size, y)?;
    let mut tape = Tape::new();
    let p = bind(&mut tape, params, false);
    let input = tape.leaf(y);
    let out = unet_graph(&mut tape, &p, config, input)?;
    tape.to_tensor(out).reshaped(y.shape().to_vec())
}
