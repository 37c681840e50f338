//! Self-check oracles: independent verification of the second-order
//! perturbation analysis and of the saliency criterion's ranking power,
//! on small trained fixtures with exact finite-difference curvature.

use rand::Rng;

use crate::analysis::{spearman, taylor_perturbation};
use crate::data::{synth_dataset, Dataset};
use crate::error::{Error, Result};
use crate::nn::{
    backward, fd_diag_hessian, forward, init_params, sgd_step, Activation, Architecture, Batch,
    FeatureShape, LayerSpec, ModelParams,
};
use crate::pruning::{build_group_map, enumerate_group_masks};
use crate::seeds::{rng_from, SeedStreams};

#[derive(Debug, Clone)]
pub struct OracleCheck {
    pub name: &'static str,
    pub passed: bool,
    pub detail: String,
}

#[derive(Debug, Clone)]
pub struct OracleReport {
    pub checks: Vec<OracleCheck>,
}

impl OracleReport {
    pub fn passed(&self) -> bool {
        self.checks.iter().all(|c| c.passed)
    }
}

/// Runs every oracle check with fixtures seeded from `seed`.
pub fn run_oracles(seed: u64) -> Result<OracleReport> {
    Ok(OracleReport {
        checks: vec![
            quadratic_exactness(seed)?,
            remainder_scaling(seed)?,
            criterion_ranking(seed)?,
        ],
    })
}

fn two_dense(
    in_dim: usize,
    hidden: usize,
    classes: usize,
    activation: Activation,
) -> Architecture {
    Architecture::new(
        FeatureShape::Flat(in_dim),
        vec![
            LayerSpec::Dense {
                in_dim,
                out_dim: hidden,
                activation,
            },
            LayerSpec::Dense {
                in_dim: hidden,
                out_dim: classes,
                activation: Activation::Identity,
            },
        ],
    )
    .expect("fixture architecture is valid")
}

/// Full-batch gradient descent to a well-trained iterate.
fn train_full_batch(
    arch: &Architecture,
    dataset: &Dataset,
    seed: u64,
    steps: usize,
    lr: f64,
    momentum: f64,
) -> Result<ModelParams> {
    let mut params = init_params(arch, seed);
    let mut velocity = vec![0.0; params.dim()];
    let batch = dataset.full_batch();
    for _ in 0..steps {
        let (_, grad) = backward(arch, &params, &batch)?;
        sgd_step(&mut params, &grad, lr, momentum, &mut velocity)?;
    }
    Ok(params)
}

fn full_loss(arch: &Architecture, batch: &Batch, template: &ModelParams, values: &[f64]) -> f64 {
    let p = ModelParams {
        values: values.to_vec(),
        index: template.index.clone(),
    };
    forward(arch, &p, batch).expect("fixture shapes are valid").0
}

/// The two-term prediction is exact (no cubic remainder) on a
/// quadratic objective.
pub fn quadratic_exactness(seed: u64) -> Result<OracleCheck> {
    let mut rng = rng_from(SeedStreams::new(seed).aux("oracle_quadratic", 0));
    let d = 24;
    let a: Vec<f64> = (0..d).map(|_| rng.random_range(0.1..3.0)).collect();
    let w: Vec<f64> = (0..d).map(|_| rng.random_range(-2.0..2.0)).collect();
    let q: Vec<f64> = (0..d).map(|_| rng.random_range(0.0..1.0)).collect();
    let e: Vec<f64> = w.iter().zip(&q).map(|(wi, qi)| qi * wi).collect();
    let grad: Vec<f64> = w.iter().zip(&a).map(|(wi, ai)| ai * wi).collect();
    let loss = |v: &[f64]| 0.5 * v.iter().zip(&a).map(|(x, ai)| ai * x * x).sum::<f64>();
    let report = taylor_perturbation(&w, &e, &grad, &a, &q, Some(loss))?;
    let err = report.abs_error.unwrap();
    Ok(OracleCheck {
        name: "taylor_quadratic_exact",
        passed: err < 1e-9,
        detail: format!("|measured - predicted| = {err:.3e} (tolerance 1e-9)"),
    })
}

/// On a smooth trained net, halving the perturbation shrinks the
/// prediction error by a factor in [4, 16]: the diagonal prediction
/// captures the full quadratic term along single coordinates, leaving
/// a third-order remainder (factor ~8 per halving).
///
/// The perturbation probes the largest-magnitude coordinates one at a
/// time; a joint perturbation would reintroduce the off-diagonal
/// quadratic term that the diagonal form cannot represent.
pub fn remainder_scaling(seed: u64) -> Result<OracleCheck> {
    let streams = SeedStreams::new(seed);
    let dataset = synth_dataset(3, 6, 40, 2.0, streams.aux("oracle_remainder_data", 0))?;
    let arch = two_dense(6, 8, 3, Activation::Identity);
    let params = train_full_batch(
        &arch,
        &dataset,
        streams.aux("oracle_remainder_init", 0),
        400,
        0.25,
        0.0,
    )?;
    let batch = dataset.full_batch();
    let (_, grad) = backward(&arch, &params, &batch)?;
    let hdiag = fd_diag_hessian(&arch, &params, &batch, 1e-4)?;

    let mut order: Vec<usize> = (0..params.dim()).collect();
    order.sort_by(|&a, &b| params.values[b].abs().total_cmp(&params.values[a].abs()));
    let probes = &order[..8];

    let err_at = |scale: f64| -> Result<f64> {
        let mut total = 0.0;
        for &i in probes {
            let mut q = vec![0.0; params.dim()];
            q[i] = 0.5 * scale;
            let e: Vec<f64> = params
                .values
                .iter()
                .zip(&q)
                .map(|(wi, qi)| qi * wi)
                .collect();
            let report = taylor_perturbation(
                &params.values,
                &e,
                &grad,
                &hdiag,
                &q,
                Some(|v: &[f64]| full_loss(&arch, &batch, &params, v)),
            )?;
            total += report.abs_error.unwrap();
        }
        Ok(total)
    };
    let e1 = err_at(1.0)?;
    let e2 = err_at(0.5)?;
    let e4 = err_at(0.25)?;
    let r1 = e1 / e2;
    let r2 = e2 / e4;
    let passed = (4.0..=16.0).contains(&r1) && (4.0..=16.0).contains(&r2);
    Ok(OracleCheck {
        name: "taylor_remainder_scaling",
        passed,
        detail: format!(
            "errors {e1:.3e} -> {e2:.3e} -> {e4:.3e}; ratios {r1:.2}, {r2:.2} (expected in [4, 16])"
        ),
    })
}

/// Exhaustive criterion check: enumerate every structured mask zeroing
/// half the prunable groups of a small mid-training net (where both
/// the gradient and the curvature term of the score carry signal); the
/// two-term prediction with the true Hessian diagonal must rank masks
/// like the measured loss increase (mean Spearman >= 0.8, averaged
/// over 16 seeds).
pub fn criterion_ranking(seed: u64) -> Result<OracleCheck> {
    let threshold = 0.8;
    let mut rhos = Vec::new();
    for s in 0..16 {
        rhos.push(criterion_ranking_once(seed.wrapping_add(s))?);
    }
    let mean = rhos.iter().sum::<f64>() / rhos.len() as f64;
    Ok(OracleCheck {
        name: "criterion_ranking",
        passed: mean >= threshold,
        detail: format!(
            "mean Spearman {mean:.3} over {} seeds (threshold {threshold}); per-seed {:?}",
            rhos.len(),
            rhos.iter().map(|r| (r * 100.0).round() / 100.0).collect::<Vec<_>>()
        ),
    })
}

fn criterion_ranking_once(seed: u64) -> Result<f64> {
    let streams = SeedStreams::new(seed);
    let dataset = synth_dataset(2, 5, 60, 2.0, streams.aux("oracle_rank_data", 0))?;
    let arch = two_dense(5, 12, 2, Activation::Relu);
    let params = train_full_batch(
        &arch,
        &dataset,
        streams.aux("oracle_rank_init", 0),
        10,
        0.1,
        0.0,
    )?;
    let map = build_group_map(&arch)?;
    let masks = enumerate_group_masks(&map, map.groups.len() / 2);
    if masks.len() < 10 {
        return Err(Error::OracleFailure(format!(
            "fixture produced only {} masks",
            masks.len()
        )));
    }
    let batch = dataset.full_batch();
    let (base_loss, grad) = backward(&arch, &params, &batch)?;
    let hdiag = fd_diag_hessian(&arch, &params, &batch, 1e-4)?;

    let mut predicted = Vec::with_capacity(masks.len());
    let mut measured = Vec::with_capacity(masks.len());
    for (_, mask) in &masks {
        let q: Vec<f64> = mask.bits.iter().map(|&b| 1.0 - b as f64).collect();
        let e: Vec<f64> = params
            .values
            .iter()
            .zip(&q)
            .map(|(wi, qi)| qi * wi)
            .collect();
        let report =
            taylor_perturbation::<fn(&[f64]) -> f64>(&params.values, &e, &grad, &hdiag, &q, None)?;
        predicted.push(report.predicted_total);
        let pruned = mask.apply(&params.values);
        measured.push(full_loss(&arch, &batch, &params, &pruned) - base_loss);
    }
    spearman(&predicted, &measured)
}
