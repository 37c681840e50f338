//! Verification and measurement: the second-order loss-perturbation
//! oracle, convergence diagnostics (full-batch gradient norm, gradient
//! variance, client dissimilarity), parameter/FLOP cost accounting, and
//! the per-round metrics CSV.

use std::io::Write;

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::nn::{backward, Architecture, FeatureShape, LayerSpec, ModelParams};
use crate::pruning::PruneMask;

/// Predicted vs measured loss change under a pruning perturbation `e`,
/// where `e = q * w` coordinatewise.
#[derive(Debug, Clone)]
pub struct PerturbationReport {
    /// First-order term: -grad' e.
    pub predicted_first_order: f64,
    /// Second-order term: 0.5 * sum_i h_i e_i^2.
    pub predicted_second_order: f64,
    pub predicted_total: f64,
    /// F(w - e) - F(w), when an evaluation closure was supplied.
    pub measured: Option<f64>,
    pub abs_error: Option<f64>,
    pub rel_error: Option<f64>,
}

/// Two-term Taylor prediction of the loss perturbation from pruning,
/// optionally compared against a measured loss difference.
///
/// `q` must satisfy `e_i = q_i * w_i` (checked to 1e-10); `measure`
/// evaluates the objective at an arbitrary parameter vector.
pub fn taylor_perturbation<F>(
    w: &[f64],
    e: &[f64],
    grad: &[f64],
    hdiag: &[f64],
    q: &[f64],
    measure: Option<F>,
) -> Result<PerturbationReport>
where
    F: FnMut(&[f64]) -> f64,
{
    let d = w.len();
    if e.len() != d || grad.len() != d || hdiag.len() != d || q.len() != d {
        return Err(Error::shape(
            "taylor_perturbation inputs must share the model dimension".to_string(),
        ));
    }
    for i in 0..d {
        if (e[i] - q[i] * w[i]).abs() > 1e-10 * (1.0 + e[i].abs()) {
            return Err(Error::input(format!(
                "e is not expressible as q*w at coordinate {i}: e={} q*w={}",
                e[i],
                q[i] * w[i]
            )));
        }
    }

    let first: f64 = -e.iter().zip(grad).map(|(ei, gi)| gi * ei).sum::<f64>();
    let second: f64 = 0.5
        * e.iter()
            .zip(hdiag)
            .map(|(ei, hi)| hi * ei * ei)
            .sum::<f64>();
    let total = first + second;

    let measured = measure.map(|mut f| {
        let perturbed: Vec<f64> = w.iter().zip(e).map(|(wi, ei)| wi - ei).collect();
        f(&perturbed) - f(w)
    });
    let abs_error = measured.map(|m| (m - total).abs());
    let rel_error = measured.map(|m| (m - total).abs() / m.abs().max(1e-300));
    Ok(PerturbationReport {
        predicted_first_order: first,
        predicted_second_order: second,
        predicted_total: total,
        measured,
        abs_error,
        rel_error,
    })
}

/// Per-client full-shard gradients at `w`, evaluated in parallel but
/// returned in client order.
pub fn client_gradients(
    arch: &Architecture,
    params: &ModelParams,
    dataset: &crate::data::Dataset,
    shards: &[Vec<usize>],
) -> Result<Vec<Vec<f64>>> {
    shards
        .par_iter()
        .map(|shard| {
            let batch = dataset.batch(shard);
            backward(arch, params, &batch).map(|(_, g)| g)
        })
        .collect()
}

/// Gradient of the global objective (client-weighted mean losses).
pub fn global_gradient(
    arch: &Architecture,
    params: &ModelParams,
    dataset: &crate::data::Dataset,
    shards: &[Vec<usize>],
    weights: &[f64],
) -> Result<Vec<f64>> {
    let grads = client_gradients(arch, params, dataset, shards)?;
    let mut total = vec![0.0; params.dim()];
    for (g, &p) in grads.iter().zip(weights) {
        for (t, gi) in total.iter_mut().zip(g) {
            *t += p * gi;
        }
    }
    Ok(total)
}

/// Squared norm of the full-batch global gradient.
pub fn grad_norm_sq(
    arch: &Architecture,
    params: &ModelParams,
    dataset: &crate::data::Dataset,
    shards: &[Vec<usize>],
    weights: &[f64],
) -> Result<f64> {
    let g = global_gradient(arch, params, dataset, shards, weights)?;
    Ok(g.iter().map(|x| x * x).sum())
}

/// Empirical mini-batch gradient variance for one client: the mean
/// squared deviation of chunked mini-batch gradients from the client's
/// full-shard gradient. Returns `(value, single_batch)`; a shard that
/// cannot form two batches reports 0 with the flag set.
pub fn estimate_sigma2(
    arch: &Architecture,
    params: &ModelParams,
    dataset: &crate::data::Dataset,
    shard: &[usize],
    num_batches: usize,
) -> Result<(f64, bool)> {
    if shard.is_empty() {
        return Err(Error::input("sigma2 estimate on an empty shard".to_string()));
    }
    let chunks: Vec<&[usize]> = split_chunks(shard, num_batches);
    if chunks.len() < 2 {
        return Ok((0.0, true));
    }
    let full = backward(arch, params, &dataset.batch(shard))?.1;
    let mut acc = 0.0;
    for c in &chunks {
        let g = backward(arch, params, &dataset.batch(c))?.1;
        acc += g
            .iter()
            .zip(&full)
            .map(|(a, b)| (a - b) * (a - b))
            .sum::<f64>();
    }
    Ok((acc / chunks.len() as f64, false))
}

fn split_chunks(shard: &[usize], num_batches: usize) -> Vec<&[usize]> {
    let n = shard.len();
    let k = num_batches.max(1).min(n);
    let base = n / k;
    let extra = n % k;
    let mut out = Vec::with_capacity(k);
    let mut start = 0;
    for i in 0..k {
        let len = base + usize::from(i < extra);
        out.push(&shard[start..start + len]);
        start += len;
    }
    out
}

/// Client dissimilarity at `w`: weighted squared deviation of client
/// full-shard gradients from the global gradient.
pub fn estimate_zeta2(
    arch: &Architecture,
    params: &ModelParams,
    dataset: &crate::data::Dataset,
    shards: &[Vec<usize>],
    weights: &[f64],
) -> Result<f64> {
    let grads = client_gradients(arch, params, dataset, shards)?;
    let mut global = vec![0.0; params.dim()];
    for (g, &p) in grads.iter().zip(weights) {
        for (t, gi) in global.iter_mut().zip(g) {
            *t += p * gi;
        }
    }
    let mut zeta2 = 0.0;
    for (g, &p) in grads.iter().zip(weights) {
        zeta2 += p
            * g.iter()
                .zip(&global)
                .map(|(a, b)| (a - b) * (a - b))
                .sum::<f64>();
    }
    Ok(zeta2)
}

/// Parameter and FLOP counts for a masked model. Conventions:
/// multiply-add = 2 FLOPs, dense forward = `2*in*out + out`, conv
/// forward = `2*kh*kw*cin*cout*hout*wout`, backward = 2x forward.
/// Fully-zeroed units drop out of the layer formulas.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct CostReport {
    pub active_params: u64,
    /// Forward FLOPs for one sample.
    pub forward_flops: u64,
    /// Forward+backward FLOPs for one sample (3x forward).
    pub train_flops: u64,
}

pub fn count_cost(arch: &Architecture, mask: &PruneMask) -> Result<CostReport> {
    let index = arch.param_index();
    if mask.dim() != index.total {
        return Err(Error::shape(format!(
            "mask dimension {} vs model dimension {}",
            mask.dim(),
            index.total
        )));
    }
    let shapes = arch.feature_shapes()?;
    let active_params = mask.bits.iter().filter(|&&b| b == 1).count() as u64;

    // A unit is active when any of its own coordinates survives; the
    // bias coordinate, which every unit owns, is the flag.
    let mut forward = 0u64;
    let mut prev_active: Option<usize> = None; // surviving outputs of the previous layer
    for (li, layer) in arch.layers.iter().enumerate() {
        let ranges = &index.layers[li];
        match *layer {
            LayerSpec::Dense { in_dim, out_dim, .. } => {
                let active_in = prev_active.unwrap_or(in_dim);
                let active_out = (0..out_dim)
                    .filter(|&u| mask.bits[ranges.biases.start + u] == 1)
                    .count();
                forward += 2 * (active_in as u64) * (active_out as u64) + active_out as u64;
                prev_active = Some(active_out);
            }
            LayerSpec::Conv2d {
                out_channels,
                in_channels,
                kernel_h,
                kernel_w,
                ..
            } => {
                let active_in = prev_active.unwrap_or(in_channels);
                let active_out = (0..out_channels)
                    .filter(|&u| mask.bits[ranges.biases.start + u] == 1)
                    .count();
                let (h_out, w_out) = match shapes[li] {
                    FeatureShape::Image { height, width, .. } => (height, width),
                    FeatureShape::Flat(_) => unreachable!("conv output is an image"),
                };
                forward += 2
                    * (kernel_h * kernel_w) as u64
                    * (active_in as u64)
                    * (active_out as u64)
                    * (h_out * w_out) as u64;
                prev_active = Some(active_out);
            }
            LayerSpec::Flatten => {
                // Surviving flat features = surviving channels x spatial map.
                if let (Some(act), FeatureShape::Flat(n)) = (prev_active, shapes[li]) {
                    let channels = match shapes[li - 1] {
                        FeatureShape::Image { channels, .. } => channels,
                        FeatureShape::Flat(_) => unreachable!(),
                    };
                    prev_active = Some(act * (n / channels.max(1)));
                }
            }
        }
    }
    Ok(CostReport {
        active_params,
        forward_flops: forward,
        train_flops: 3 * forward,
    })
}

/// One communication round's metrics. Only the fixed CSV schema
/// columns are serialized; the remaining fields are in-memory
/// diagnostics for tests and reports.
#[derive(Debug, Clone)]
pub struct RoundRecord {
    pub round: usize,
    pub train_loss: f64,
    pub test_acc: f64,
    pub grad_norm_sq: f64,
    /// Realized aggregation noise ||e_t||^2 for the round.
    pub e_norm_sq: f64,
    pub params_up: u64,
    pub params_down: u64,
    pub flops_local: u64,
    pub sigma2_hat: Option<f64>,
    pub zeta2_hat: Option<f64>,
    /// Achieved structured ratios per client.
    pub achieved_ratios: Vec<f64>,
    /// Residual of the per-round update identity (see federation).
    pub identity_residual_inf: f64,
    /// Squared norm of the mask-induced dispatch perturbation
    /// (the weighted pruned-mass vector used by the saliency analysis).
    pub dispatch_noise_sq: f64,
}

pub const METRICS_HEADER: &str = "round,train_loss,test_acc,grad_norm_sq,e_norm_sq,params_up,params_down,flops_local,sigma2_hat,zeta2_hat";

fn fmt_f64(v: f64) -> String {
    // 17 significant digits round-trip any f64 exactly.
    format!("{v:.16e}")
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map(fmt_f64).unwrap_or_default()
}

/// Writes the fixed-schema CSV, one row per round. Off-interval
/// diagnostics serialize as empty fields.
pub fn emit_metrics<W: Write>(records: &[RoundRecord], mut out: W) -> std::io::Result<()> {
    writeln!(out, "{METRICS_HEADER}")?;
    for r in records {
        writeln!(
            out,
            "{},{},{},{},{},{},{},{},{},{}",
            r.round,
            fmt_f64(r.train_loss),
            fmt_f64(r.test_acc),
            fmt_f64(r.grad_norm_sq),
            fmt_f64(r.e_norm_sq),
            r.params_up,
            r.params_down,
            r.flops_local,
            fmt_opt(r.sigma2_hat),
            fmt_opt(r.zeta2_hat),
        )?;
    }
    Ok(())
}

/// Parses a metrics CSV produced by [`emit_metrics`].
pub fn parse_metrics(text: &str) -> Result<Vec<RoundRecord>> {
    let mut lines = text.lines();
    match lines.next() {
        Some(h) if h == METRICS_HEADER => {}
        other => {
            return Err(Error::input(format!(
                "bad metrics header: {}",
                other.unwrap_or("<empty>")
            )))
        }
    }
    let mut records = Vec::new();
    for (ln, line) in lines.enumerate() {
        if line.is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split(',').collect();
        if fields.len() != 10 {
            return Err(Error::input(format!(
                "line {}: expected 10 fields, got {}",
                ln + 2,
                fields.len()
            )));
        }
        let f = |s: &str| -> Result<f64> {
            s.parse::<f64>()
                .map_err(|e| Error::input(format!("line {}: {e}", ln + 2)))
        };
        let opt = |s: &str| -> Result<Option<f64>> {
            if s.is_empty() {
                Ok(None)
            } else {
                f(s).map(Some)
            }
        };
        records.push(RoundRecord {
            round: fields[0]
                .parse()
                .map_err(|e| Error::input(format!("line {}: {e}", ln + 2)))?,
            train_loss: f(fields[1])?,
            test_acc: f(fields[2])?,
            grad_norm_sq: f(fields[3])?,
            e_norm_sq: f(fields[4])?,
            params_up: fields[5]
                .parse()
                .map_err(|e| Error::input(format!("line {}: {e}", ln + 2)))?,
            params_down: fields[6]
                .parse()
                .map_err(|e| Error::input(format!("line {}: {e}", ln + 2)))?,
            flops_local: fields[7]
                .parse()
                .map_err(|e| Error::input(format!("line {}: {e}", ln + 2)))?,
            sigma2_hat: opt(fields[8])?,
            zeta2_hat: opt(fields[9])?,
            achieved_ratios: Vec::new(),
            identity_residual_inf: 0.0,
            dispatch_noise_sq: 0.0,
        });
    }
    Ok(records)
}

/// Spearman rank correlation with average ranks for ties.
pub fn spearman(xs: &[f64], ys: &[f64]) -> Result<f64> {
    if xs.len() != ys.len() || xs.len() < 2 {
        return Err(Error::input(
            "spearman needs two equal-length samples of size >= 2".to_string(),
        ));
    }
    let rx = ranks(xs);
    let ry = ranks(ys);
    let n = xs.len() as f64;
    let mean = (n + 1.0) / 2.0;
    let mut cov = 0.0;
    let mut vx = 0.0;
    let mut vy = 0.0;
    for (a, b) in rx.iter().zip(&ry) {
        cov += (a - mean) * (b - mean);
        vx += (a - mean) * (a - mean);
        vy += (b - mean) * (b - mean);
    }
    if vx == 0.0 || vy == 0.0 {
        return Err(Error::input(
            "spearman undefined for constant input".to_string(),
        ));
    }
    Ok(cov / (vx.sqrt() * vy.sqrt()))
}

fn ranks(xs: &[f64]) -> Vec<f64> {
    let mut idx: Vec<usize> = (0..xs.len()).collect();
    idx.sort_by(|&a, &b| xs[a].total_cmp(&xs[b]));
    let mut out = vec![0.0; xs.len()];
    let mut i = 0;
    while i < idx.len() {
        let mut j = i;
        while j + 1 < idx.len() && xs[idx[j + 1]] == xs[idx[i]] {
            j += 1;
        }
        let avg = (i + j) as f64 / 2.0 + 1.0;
        for &k in &idx[i..=j] {
            out[k] = avg;
        }
        i = j + 1;
    }
    out
}
