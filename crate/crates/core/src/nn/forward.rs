//! Forward and backward passes for softmax cross-entropy classifiers.
//!
//! Loss reduction is the mean over the batch. Accuracy ties are broken
//! toward the lowest class index. `backward` reuses the forward
//! activations, so its loss matches `forward` bit-for-bit.

use super::{Activation, Architecture, Batch, FeatureShape, LayerSpec, ModelParams};
use crate::error::{Error, Result};

struct Pass<'a> {
    arch: &'a Architecture,
    params: &'a ModelParams,
    batch: &'a Batch,
    num_logits: usize,
    /// Post-activation outputs of each layer, batch-major.
    activations: Vec<Vec<f64>>,
    loss: f64,
    correct: usize,
    /// d(loss)/d(logits), with the 1/batch factor folded in.
    dlogits: Vec<f64>,
}

fn check(arch: &Architecture, params: &ModelParams, batch: &Batch) -> Result<usize> {
    let num_logits = arch.output_dim()?;
    if params.dim() != arch.param_count() {
        return Err(Error::shape(format!(
            "model has {} parameters, architecture wants {}",
            params.dim(),
            arch.param_count()
        )));
    }
    batch.validate(arch, num_logits)?;
    Ok(num_logits)
}

fn run_forward<'a>(
    arch: &'a Architecture,
    params: &'a ModelParams,
    batch: &'a Batch,
) -> Result<Pass<'a>> {
    let num_logits = check(arch, params, batch)?;
    let n = batch.len();
    let shapes = arch.feature_shapes()?;

    let mut activations: Vec<Vec<f64>> = Vec::with_capacity(arch.layers.len());
    {
        let mut cur: &[f64] = &batch.inputs;
        let mut cur_shape = arch.input;
        for (layer, ranges) in arch.layers.iter().zip(&params.index.layers) {
            let out = match *layer {
                LayerSpec::Dense {
                    in_dim,
                    out_dim,
                    activation,
                } => {
                    let w = &params.values[ranges.weights.clone()];
                    let b = &params.values[ranges.biases.clone()];
                    let mut out = vec![0.0; n * out_dim];
                    for s in 0..n {
                        let x = &cur[s * in_dim..(s + 1) * in_dim];
                        let y = &mut out[s * out_dim..(s + 1) * out_dim];
                        for (o, yo) in y.iter_mut().enumerate() {
                            let row = &w[o * in_dim..(o + 1) * in_dim];
                            let mut acc = b[o];
                            for (xi, wi) in x.iter().zip(row) {
                                acc += xi * wi;
                            }
                            *yo = apply(activation, acc);
                        }
                    }
                    out
                }
                LayerSpec::Conv2d {
                    in_channels,
                    out_channels,
                    kernel_h,
                    kernel_w,
                    stride,
                    activation,
                } => {
                    let (ih, iw) = match cur_shape {
                        FeatureShape::Image { height, width, .. } => (height, width),
                        FeatureShape::Flat(_) => unreachable!("validated"),
                    };
                    let oh = (ih - kernel_h) / stride + 1;
                    let ow = (iw - kernel_w) / stride + 1;
                    let w = &params.values[ranges.weights.clone()];
                    let b = &params.values[ranges.biases.clone()];
                    let in_size = in_channels * ih * iw;
                    let out_size = out_channels * oh * ow;
                    let mut out = vec![0.0; n * out_size];
                    for s in 0..n {
                        let x = &cur[s * in_size..(s + 1) * in_size];
                        let y = &mut out[s * out_size..(s + 1) * out_size];
                        for oc in 0..out_channels {
                            for oy in 0..oh {
                                for ox in 0..ow {
                                    let mut acc = b[oc];
                                    for ic in 0..in_channels {
                                        for ky in 0..kernel_h {
                                            for kx in 0..kernel_w {
                                                let iy = oy * stride + ky;
                                                let ix = ox * stride + kx;
                                                let wv = w[((oc * in_channels + ic) * kernel_h
                                                    + ky)
                                                    * kernel_w
                                                    + kx];
                                                acc += wv * x[(ic * ih + iy) * iw + ix];
                                            }
                                        }
                                    }
                                    y[(oc * oh + oy) * ow + ox] = apply(activation, acc);
                                }
                            }
                        }
                    }
                    out
                }
                // NCHW layout flattens in place: same memory order.
                LayerSpec::Flatten => cur.to_vec(),
            };
            activations.push(out);
            cur = activations.last().unwrap();
            cur_shape = shapes[activations.len() - 1];
        }
    }

    // Softmax cross-entropy via logsumexp, plus argmax accuracy.
    let logits = activations.last().unwrap();
    let mut loss_sum = 0.0;
    let mut correct = 0usize;
    let mut dlogits = vec![0.0; n * num_logits];
    let inv_n = 1.0 / n as f64;
    for s in 0..n {
        let row = &logits[s * num_logits..(s + 1) * num_logits];
        let label = batch.labels[s] as usize;
        let mut max = f64::NEG_INFINITY;
        let mut argmax = 0usize;
        for (c, &v) in row.iter().enumerate() {
            if v > max {
                max = v;
                argmax = c;
            }
        }
        let mut sum_exp = 0.0;
        for &v in row {
            sum_exp += (v - max).exp();
        }
        let lse = max + sum_exp.ln();
        loss_sum += lse - row[label];
        if argmax == label {
            correct += 1;
        }
        let drow = &mut dlogits[s * num_logits..(s + 1) * num_logits];
        for (c, dv) in drow.iter_mut().enumerate() {
            let p = (row[c] - lse).exp();
            *dv = (p - if c == label { 1.0 } else { 0.0 }) * inv_n;
        }
    }

    Ok(Pass {
        arch,
        params,
        batch,
        num_logits,
        activations,
        loss: loss_sum * inv_n,
        correct,
        dlogits,
    })
}

fn apply(activation: Activation, z: f64) -> f64 {
    match activation {
        Activation::Relu => {
            if z > 0.0 {
                z
            } else {
                0.0
            }
        }
        Activation::Identity => z,
    }
}

/// Mean cross-entropy loss and number of correct argmax predictions.
pub fn forward(arch: &Architecture, params: &ModelParams, batch: &Batch) -> Result<(f64, usize)> {
    let pass = run_forward(arch, params, batch)?;
    Ok((pass.loss, pass.correct))
}

/// Mean loss and its gradient with respect to every parameter
/// coordinate, aligned with `ModelParams::index`.
pub fn backward(arch: &Architecture, params: &ModelParams, batch: &Batch) -> Result<(f64, Vec<f64>)> {
    let pass = run_forward(arch, params, batch)?;
    let grad = backprop(&pass)?;
    Ok((pass.loss, grad))
}

fn backprop(pass: &Pass) -> Result<Vec<f64>> {
    let arch = pass.arch;
    let params = pass.params;
    let n = pass.batch.len();
    let shapes = arch.feature_shapes()?;
    let mut grad = vec![0.0; params.dim()];

    // d(loss)/d(post-activation output) of the layer being processed.
    let mut dout = pass.dlogits.clone();
    debug_assert_eq!(dout.len(), n * pass.num_logits);

    for li in (0..arch.layers.len()).rev() {
        let layer = &arch.layers[li];
        let ranges = &params.index.layers[li];
        let layer_in: &[f64] = if li == 0 {
            &pass.batch.inputs
        } else {
            &pass.activations[li - 1]
        };
        let in_shape = if li == 0 { arch.input } else { shapes[li - 1] };
        let layer_out = &pass.activations[li];

        dout = match *layer {
            LayerSpec::Dense {
                in_dim,
                out_dim,
                activation,
            } => {
                let w = &params.values[ranges.weights.clone()];
                let mut din = vec![0.0; n * in_dim];
                for s in 0..n {
                    let x = &layer_in[s * in_dim..(s + 1) * in_dim];
                    let y = &layer_out[s * out_dim..(s + 1) * out_dim];
                    let dy = &dout[s * out_dim..(s + 1) * out_dim];
                    let dx = &mut din[s * in_dim..(s + 1) * in_dim];
                    for o in 0..out_dim {
                        let dz = gate(activation, y[o], dy[o]);
                        if dz == 0.0 {
                            continue;
                        }
                        let wrow = &w[o * in_dim..(o + 1) * in_dim];
                        let grow = &mut grad[ranges.weights.start + o * in_dim
                            ..ranges.weights.start + (o + 1) * in_dim];
                        for i in 0..in_dim {
                            grow[i] += dz * x[i];
                            dx[i] += dz * wrow[i];
                        }
                        grad[ranges.biases.start + o] += dz;
                    }
                }
                din
            }
            LayerSpec::Conv2d {
                in_channels,
                out_channels,
                kernel_h,
                kernel_w,
                stride,
                activation,
            } => {
                let (ih, iw) = match in_shape {
                    FeatureShape::Image { height, width, .. } => (height, width),
                    FeatureShape::Flat(_) => unreachable!("validated"),
                };
                let oh = (ih - kernel_h) / stride + 1;
                let ow = (iw - kernel_w) / stride + 1;
                let w = &params.values[ranges.weights.clone()];
                let in_size = in_channels * ih * iw;
                let out_size = out_channels * oh * ow;
                let mut din = vec![0.0; n * in_size];
                for s in 0..n {
                    let x = &layer_in[s * in_size..(s + 1) * in_size];
                    let y = &layer_out[s * out_size..(s + 1) * out_size];
                    let dy = &dout[s * out_size..(s + 1) * out_size];
                    let dx = &mut din[s * in_size..(s + 1) * in_size];
                    for oc in 0..out_channels {
                        for oy in 0..oh {
                            for ox in 0..ow {
                                let pos = (oc * oh + oy) * ow + ox;
                                let dz = gate(activation, y[pos], dy[pos]);
                                if dz == 0.0 {
                                    continue;
                                }
                                grad[ranges.biases.start + oc] += dz;
                                for ic in 0..in_channels {
                                    for ky in 0..kernel_h {
                                        for kx in 0..kernel_w {
                                            let iy = oy * stride + ky;
                                            let ix = ox * stride + kx;
                                            let widx = ((oc * in_channels + ic) * kernel_h + ky)
                                                * kernel_w
                                                + kx;
                                            let xidx = (ic * ih + iy) * iw + ix;
                                            grad[ranges.weights.start + widx] += dz * x[xidx];
                                            dx[xidx] += dz * w[widx];
                                        }
                                    }
                                }
                            }
                        }
                    }
                }
                din
            }
            LayerSpec::Flatten => dout,
        };
    }
    Ok(grad)
}

/// Chain-rule factor through the activation, using the stored
/// post-activation value (for relu, `y > 0` iff `z > 0`).
fn gate(activation: Activation, y: f64, dy: f64) -> f64 {
    match activation {
        Activation::Relu => {
            if y > 0.0 {
                dy
            } else {
                0.0
            }
        }
        Activation::Identity => dy,
    }
}
