//! Declarative experiment runner: JSON configs with strict validation,
//! seeded end-to-end execution (single runs and criterion x
//! reconstruction x alpha grids), metrics/model/manifest artifacts on
//! disk, and run-directory summarization.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::analysis::{self, RoundRecord};
use crate::data::{self, Dataset};
use crate::error::{Error, Result};
use crate::federation::{
    run_round, ClientState, Criterion, LocalSteps, Reconstruction, RoundOptions, ServerState,
};
use crate::nn::{forward, init_params, Activation, Architecture, FeatureShape, LayerSpec, ModelParams};
use crate::pruning::{assign_ranks, RankSpec};
use crate::seeds::SeedStreams;

/// Environment variable overriding the output directory.
pub const OUT_DIR_ENV: &str = "CAHFP_OUT_DIR";

fn default_classes() -> usize {
    10
}
fn default_dim() -> usize {
    32
}
fn default_per_class() -> usize {
    500
}
fn default_class_sep() -> f64 {
    3.0
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", deny_unknown_fields)]
pub enum DatasetSpec {
    Synthetic {
        #[serde(default = "default_classes")]
        classes: usize,
        #[serde(default = "default_dim")]
        dim: usize,
        #[serde(default = "default_per_class")]
        per_class: usize,
        #[serde(default = "default_class_sep")]
        class_sep: f64,
    },
    Idx {
        images: PathBuf,
        labels: PathBuf,
    },
}

impl Default for DatasetSpec {
    fn default() -> Self {
        DatasetSpec::Synthetic {
            classes: default_classes(),
            dim: default_dim(),
            per_class: default_per_class(),
            class_sep: default_class_sep(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CriterionConfig {
    Curvature,
    CurvatureApprox,
    L1,
    DeltaW,
    Random,
    None,
}

impl CriterionConfig {
    pub fn to_criterion(self) -> Criterion {
        match self {
            CriterionConfig::Curvature => Criterion::Curvature { gradient_term: true },
            CriterionConfig::CurvatureApprox => Criterion::Curvature {
                gradient_term: false,
            },
            CriterionConfig::L1 => Criterion::L1,
            CriterionConfig::DeltaW => Criterion::DeltaW,
            CriterionConfig::Random => Criterion::Random,
            CriterionConfig::None => Criterion::None,
        }
    }

    pub fn label(self) -> &'static str {
        match self {
            CriterionConfig::Curvature => "curvature",
            CriterionConfig::CurvatureApprox => "curvature_approx",
            CriterionConfig::L1 => "l1",
            CriterionConfig::DeltaW => "delta_w",
            CriterionConfig::Random => "random",
            CriterionConfig::None => "none",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ReconstructionConfig {
    On,
    Off,
}

impl ReconstructionConfig {
    pub fn label(self) -> &'static str {
        match self {
            ReconstructionConfig::On => "on",
            ReconstructionConfig::Off => "off",
        }
    }
}

/// `"epoch"` or a fixed positive step count.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum StepsConfig {
    Fixed(usize),
    Epoch(EpochTag),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EpochTag {
    Epoch,
}

impl StepsConfig {
    fn to_local_steps(self) -> Result<LocalSteps> {
        match self {
            StepsConfig::Epoch(_) => Ok(LocalSteps::Epoch),
            StepsConfig::Fixed(0) => Err(Error::config("E: local steps must be >= 1")),
            StepsConfig::Fixed(e) => Ok(LocalSteps::Fixed(e)),
        }
    }
}

/// Optional cartesian ablation axes expanded into sub-runs.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GridSpec {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub criterion: Option<Vec<CriterionConfig>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub reconstruction: Option<Vec<ReconstructionConfig>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub alpha: Option<Vec<f64>>,
}

/// Fully-declarative description of one run (or one grid of runs).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExperimentConfig {
    pub dataset: DatasetSpec,
    pub holdout_fraction: f64,
    #[serde(rename = "K")]
    pub clients: usize,
    pub alpha: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub rank: Option<u8>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub ratios: Option<Vec<f64>>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub architecture: Option<Architecture>,
    pub criterion: CriterionConfig,
    pub reconstruction: ReconstructionConfig,
    /// Renormalize surviving contributions when reconstruction is off.
    pub renormalize_without_reconstruction: bool,
    #[serde(rename = "E")]
    pub local_steps: StepsConfig,
    pub lr: f64,
    pub momentum: f64,
    pub batch_size: usize,
    #[serde(alias = "T")]
    pub rounds: usize,
    pub warmup_rounds: usize,
    pub mask_hold_interval: usize,
    pub diagnostics_interval: usize,
    pub fisher_beta: f64,
    pub exact_gradients: bool,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub min_shard: Option<usize>,
    pub seed: u64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub output_dir: Option<PathBuf>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub grid: Option<GridSpec>,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            dataset: DatasetSpec::default(),
            holdout_fraction: 0.2,
            clients: 10,
            alpha: 1.0,
            rank: None,
            ratios: None,
            architecture: None,
            criterion: CriterionConfig::Curvature,
            reconstruction: ReconstructionConfig::On,
            renormalize_without_reconstruction: false,
            local_steps: StepsConfig::Epoch(EpochTag::Epoch),
            lr: 0.1,
            momentum: 0.90,
            batch_size: 128,
            rounds: 300,
            warmup_rounds: 5,
            mask_hold_interval: 1,
            diagnostics_interval: 10,
            fisher_beta: 0.9,
            exact_gradients: false,
            min_shard: None,
            seed: 0,
            output_dir: None,
            grid: None,
        }
    }
}

impl ExperimentConfig {
    /// Per-client pruning ratios implied by `rank`/`ratios`.
    pub fn rank_spec(&self) -> Result<RankSpec> {
        match (&self.rank, &self.ratios) {
            (Some(_), Some(_)) => Err(Error::config(
                "rank: 'rank' and 'ratios' are mutually exclusive",
            )),
            (Some(r), None) => Ok(RankSpec::Rank(*r)),
            (None, Some(list)) => Ok(RankSpec::Explicit(list.clone())),
            (None, None) => {
                if self.clients == 10 {
                    Ok(RankSpec::Rank(2))
                } else {
                    Err(Error::config(
                        "ratios: K != 10 needs an explicit per-client ratio list",
                    ))
                }
            }
        }
    }

    pub fn effective_min_shard(&self) -> usize {
        self.min_shard.unwrap_or(self.batch_size.max(1))
    }

    pub fn validate(&self) -> Result<()> {
        if self.clients == 0 {
            return Err(Error::config("K: need at least one client"));
        }
        if !(self.alpha > 0.0 && self.alpha.is_finite()) {
            return Err(Error::config(format!("alpha: {} must be positive", self.alpha)));
        }
        if !(0.0..1.0).contains(&self.holdout_fraction) {
            return Err(Error::config(format!(
                "holdout_fraction: {} outside [0, 1)",
                self.holdout_fraction
            )));
        }
        if self.rounds == 0 {
            return Err(Error::config("rounds: need at least one round"));
        }
        if self.diagnostics_interval == 0 {
            return Err(Error::config("diagnostics_interval: must be >= 1"));
        }
        let spec = self.rank_spec()?;
        assign_ranks(self.clients, &spec)?;
        if let DatasetSpec::Synthetic {
            classes,
            dim,
            per_class,
            class_sep,
        } = self.dataset
        {
            if classes < 2 || dim < 2 || per_class < 1 {
                return Err(Error::config(
                    "dataset: synthetic needs classes >= 2, dim >= 2, per_class >= 1",
                ));
            }
            if !(class_sep.is_finite() && class_sep >= 0.0) {
                return Err(Error::config("dataset: class_sep must be nonnegative"));
            }
        }
        if let Some(arch) = &self.architecture {
            arch.validate()?;
        }
        self.round_options()?.validate()
    }

    pub fn round_options(&self) -> Result<RoundOptions> {
        Ok(RoundOptions {
            lr: self.lr,
            momentum: self.momentum,
            batch_size: self.batch_size,
            local_steps: self.local_steps.to_local_steps()?,
            criterion: self.criterion.to_criterion(),
            reconstruction: match self.reconstruction {
                ReconstructionConfig::On => Reconstruction::Enabled,
                ReconstructionConfig::Off => Reconstruction::Disabled {
                    renormalize: self.renormalize_without_reconstruction,
                },
            },
            warmup_rounds: self.warmup_rounds,
            mask_hold_interval: self.mask_hold_interval,
            fisher_beta: self.fisher_beta,
            exact_gradients: self.exact_gradients,
        })
    }

    /// Short directory-name label for this run.
    pub fn run_label(&self) -> String {
        format!(
            "{}_{}_a{}_s{}",
            self.criterion.label(),
            self.reconstruction.label(),
            self.alpha,
            self.seed
        )
    }
}

/// Parses and validates a config document; unknown keys are rejected
/// and errors name the offending key.
pub fn parse_config(text: &str) -> Result<ExperimentConfig> {
    let de = &mut serde_json::Deserializer::from_str(text);
    let config: ExperimentConfig = serde_path_to_error::deserialize(de)
        .map_err(|e| Error::config(format!("{}: {}", e.path(), e.inner())))?;
    config.validate()?;
    Ok(config)
}

/// A run prepared for execution: data built, partitioned, and seeded.
pub struct PreparedRun {
    pub config: ExperimentConfig,
    pub arch: Architecture,
    pub train: Dataset,
    pub test: Dataset,
    pub shards: Vec<Vec<usize>>,
    pub weights: Vec<f64>,
    pub ratios: Vec<f64>,
    pub seeds: SeedStreams,
}

/// Default classifier for a dataset: one hidden layer of 32 relu
/// units (images are flattened first).
pub fn default_architecture(dataset: &Dataset) -> Result<Architecture> {
    let hidden = 32;
    let mut layers = Vec::new();
    let flat_in = match dataset.shape {
        FeatureShape::Flat(n) => n,
        FeatureShape::Image { .. } => {
            layers.push(LayerSpec::Flatten);
            dataset.shape.size()
        }
    };
    layers.push(LayerSpec::Dense {
        in_dim: flat_in,
        out_dim: hidden,
        activation: Activation::Relu,
    });
    layers.push(LayerSpec::Dense {
        in_dim: hidden,
        out_dim: dataset.num_classes,
        activation: Activation::Identity,
    });
    Architecture::new(dataset.shape, layers)
}

pub fn prepare(config: &ExperimentConfig) -> Result<PreparedRun> {
    config.validate()?;
    let seeds = SeedStreams::new(config.seed);
    let full = match &config.dataset {
        DatasetSpec::Synthetic {
            classes,
            dim,
            per_class,
            class_sep,
        } => data::synth_dataset(*classes, *dim, *per_class, *class_sep, seeds.synth())?,
        DatasetSpec::Idx { images, labels } => data::load_idx(images, labels)?,
    };
    let (train, test) = data::holdout_split(&full, config.holdout_fraction, seeds.holdout())?;
    let partition = data::dirichlet_partition(
        &train,
        config.clients,
        config.alpha,
        config.effective_min_shard(),
        seeds.partition(),
    )?;
    let weights = data::client_weights(&partition);
    let ratios = assign_ranks(config.clients, &config.rank_spec()?)?;
    let arch = match &config.architecture {
        Some(a) => {
            if a.input != train.shape {
                return Err(Error::config(format!(
                    "architecture: input {:?} does not match dataset shape {:?}",
                    a.input, train.shape
                )));
            }
            if a.output_dim()? != train.num_classes {
                return Err(Error::config(format!(
                    "architecture: {} logits for {} classes",
                    a.output_dim()?,
                    train.num_classes
                )));
            }
            a.clone()
        }
        None => default_architecture(&train)?,
    };
    Ok(PreparedRun {
        config: config.clone(),
        arch,
        train,
        test,
        shards: partition.shards,
        weights,
        ratios,
        seeds,
    })
}

/// Outcome of an executed run. A numeric fault mid-run keeps the
/// records accumulated so far and reports the failing round.
pub struct RunOutput {
    pub records: Vec<RoundRecord>,
    pub final_model: ModelParams,
    pub failure: Option<(usize, String)>,
}

impl RunOutput {
    pub fn final_test_acc(&self) -> Option<f64> {
        self.records.last().map(|r| r.test_acc)
    }
}

/// Runs the full round loop with per-round evaluation metrics.
pub fn execute(run: &PreparedRun) -> Result<RunOutput> {
    let config = &run.config;
    let opts = config.round_options()?;
    let params = init_params(&run.arch, run.seeds.init());
    let mut server = ServerState::new(run.arch.clone(), params, run.seeds)?;
    let mut clients: Vec<ClientState> = run
        .shards
        .iter()
        .enumerate()
        .map(|(i, s)| ClientState {
            id: i,
            shard: s.clone(),
            weight: run.weights[i],
            target_ratio: run.ratios[i],
            mask: None,
        })
        .collect();

    let mut records = Vec::with_capacity(config.rounds);
    for t in 0..config.rounds {
        let outcome = match run_round(&mut server, &mut clients, &run.train, &opts) {
            Ok(o) => o,
            Err(Error::NumericFault { round, detail }) => {
                return Ok(RunOutput {
                    records,
                    final_model: server.global.clone(),
                    failure: Some((round, detail)),
                });
            }
            Err(other) => return Err(other),
        };
        if server.global.values.iter().any(|v| !v.is_finite()) {
            return Ok(RunOutput {
                records,
                final_model: server.global.clone(),
                failure: Some((t, "global model diverged after aggregation".to_string())),
            });
        }

        // Evaluation at the post-aggregation iterate. One backward per
        // shard yields both the weighted train loss and the gradient.
        let per_client: Vec<(f64, Vec<f64>)> = {
            use rayon::prelude::*;
            run.shards
                .par_iter()
                .map(|shard| {
                    crate::nn::backward(&run.arch, &server.global, &run.train.batch(shard))
                })
                .collect::<Result<_>>()?
        };
        let mut global_grad = vec![0.0; server.global.dim()];
        let mut train_loss = 0.0;
        for ((loss, g), &p) in per_client.iter().zip(&run.weights) {
            train_loss += p * loss;
            for (t, gi) in global_grad.iter_mut().zip(g) {
                *t += p * gi;
            }
        }
        let grads: Vec<&Vec<f64>> = per_client.iter().map(|(_, g)| g).collect();
        let grad_norm_sq: f64 = global_grad.iter().map(|x| x * x).sum();
        let test_acc = if run.test.is_empty() {
            0.0
        } else {
            let (_, correct) = forward(&run.arch, &server.global, &run.test.full_batch())?;
            correct as f64 / run.test.len() as f64
        };

        let (sigma2_hat, zeta2_hat) = if t % config.diagnostics_interval == 0 {
            let mut sigma2 = 0.0;
            for (shard, &p) in run.shards.iter().zip(&run.weights) {
                let nb = shard.len().div_ceil(config.batch_size);
                let (s, _) =
                    analysis::estimate_sigma2(&run.arch, &server.global, &run.train, shard, nb)?;
                sigma2 += p * s;
            }
            let mut zeta2 = 0.0;
            for (g, &p) in grads.iter().zip(&run.weights) {
                zeta2 += p
                    * g.iter()
                        .zip(&global_grad)
                        .map(|(a, b)| (a - b) * (a - b))
                        .sum::<f64>();
            }
            (Some(sigma2), Some(zeta2))
        } else {
            (None, None)
        };

        records.push(RoundRecord {
            round: t,
            train_loss,
            test_acc,
            grad_norm_sq,
            e_norm_sq: outcome.e_norm_sq,
            params_up: outcome.params_up,
            params_down: outcome.params_down,
            flops_local: outcome.flops_local,
            sigma2_hat,
            zeta2_hat,
            achieved_ratios: outcome.achieved_ratios,
            identity_residual_inf: outcome.identity_residual_inf,
            dispatch_noise_sq: outcome.dispatch_noise.e_norm_sq,
        });
    }
    Ok(RunOutput {
        records,
        final_model: server.global.clone(),
        failure: None,
    })
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RunManifest {
    pub config: ExperimentConfig,
    pub status: String,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub failure_round: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub failure_detail: Option<String>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub final_test_acc: Option<f64>,
    pub rounds_completed: usize,
    pub version: String,
    /// Wall-clock stamp; not covered by determinism guarantees.
    pub timestamp_unix: u64,
}

#[derive(Debug, Clone)]
pub struct RunSummary {
    pub dir: PathBuf,
    pub criterion: CriterionConfig,
    pub reconstruction: ReconstructionConfig,
    pub alpha: f64,
    pub seed: u64,
    pub failed: bool,
    pub final_test_acc: Option<f64>,
}

fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(bytes).map_err(|e| Error::io(path, e))
}

/// Resolves the output directory: explicit override, then the
/// environment variable, then the config, then `./runs/<label>`.
pub fn resolve_out_dir(config: &ExperimentConfig, cli_override: Option<&Path>) -> PathBuf {
    if let Some(p) = cli_override {
        return p.to_path_buf();
    }
    if let Ok(env_dir) = std::env::var(OUT_DIR_ENV) {
        if !env_dir.is_empty() {
            return PathBuf::from(env_dir).join(config.run_label());
        }
    }
    if let Some(p) = &config.output_dir {
        return p.clone();
    }
    PathBuf::from("runs").join(config.run_label())
}

/// Runs one config (or its grid) and writes artifacts under `out_dir`.
/// Grid cells that diverge are recorded as failed runs and do not
/// abort the remaining cells; a single diverged run is an error.
pub fn run_experiment(config: &ExperimentConfig, out_dir: &Path) -> Result<Vec<RunSummary>> {
    config.validate()?;
    if let Some(grid) = &config.grid {
        let criteria = grid
            .criterion
            .clone()
            .unwrap_or_else(|| vec![config.criterion]);
        let recons = grid
            .reconstruction
            .clone()
            .unwrap_or_else(|| vec![config.reconstruction]);
        let alphas = grid.alpha.clone().unwrap_or_else(|| vec![config.alpha]);
        let mut summaries = Vec::new();
        for &criterion in &criteria {
            for &reconstruction in &recons {
                for &alpha in &alphas {
                    let mut sub = config.clone();
                    sub.grid = None;
                    sub.criterion = criterion;
                    sub.reconstruction = reconstruction;
                    sub.alpha = alpha;
                    let sub_dir = out_dir.join(sub.run_label());
                    summaries.push(run_single(&sub, &sub_dir, true)?);
                }
            }
        }
        Ok(summaries)
    } else {
        Ok(vec![run_single(config, out_dir, false)?])
    }
}

fn run_single(config: &ExperimentConfig, dir: &Path, absorb_fault: bool) -> Result<RunSummary> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let prepared = prepare(config)?;
    let output = execute(&prepared)?;

    let mut csv = Vec::new();
    analysis::emit_metrics(&output.records, &mut csv)
        .map_err(|e| Error::io(dir.join("metrics.csv"), e))?;
    write_file(&dir.join("metrics.csv"), &csv)?;

    let mut model_bytes = Vec::with_capacity(output.final_model.dim() * 8);
    for v in &output.final_model.values {
        model_bytes.extend_from_slice(&v.to_le_bytes());
    }
    write_file(&dir.join("model.bin"), &model_bytes)?;
    let arch_json = serde_json::to_string_pretty(&prepared.arch)
        .map_err(|e| Error::config(format!("architecture serialization: {e}")))?;
    write_file(&dir.join("model.json"), arch_json.as_bytes())?;

    let manifest = RunManifest {
        config: config.clone(),
        status: if output.failure.is_none() { "ok" } else { "failed" }.to_string(),
        failure_round: output.failure.as_ref().map(|(r, _)| *r),
        failure_detail: output.failure.as_ref().map(|(_, d)| d.clone()),
        final_test_acc: if output.failure.is_none() {
            output.final_test_acc()
        } else {
            None
        },
        rounds_completed: output.records.len(),
        version: env!("CARGO_PKG_VERSION").to_string(),
        timestamp_unix: std::time::SystemTime::now()
            .duration_since(std::time::UNIX_EPOCH)
            .map(|d| d.as_secs())
            .unwrap_or(0),
    };
    let manifest_json = serde_json::to_string_pretty(&manifest)
        .map_err(|e| Error::config(format!("manifest serialization: {e}")))?;
    write_file(&dir.join("manifest.json"), manifest_json.as_bytes())?;

    match &output.failure {
        Some((round, detail)) if !absorb_fault => Err(Error::NumericFault {
            round: *round,
            detail: detail.clone(),
        }),
        failure => Ok(RunSummary {
            dir: dir.to_path_buf(),
            criterion: config.criterion,
            reconstruction: config.reconstruction,
            alpha: config.alpha,
            seed: config.seed,
            failed: failure.is_some(),
            final_test_acc: manifest.final_test_acc,
        }),
    }
}

/// Comparison table over completed run directories.
#[derive(Debug, Clone)]
pub struct Summary {
    pub text: String,
    pub csv: String,
    pub rows: usize,
    pub warnings: Vec<String>,
}

/// Reads manifests under the given directories (each may be a run or a
/// directory of runs) and renders rows (criterion, reconstruction) by
/// columns of ascending alpha. Diverged runs render as `False`.
pub fn summarize(dirs: &[PathBuf]) -> Result<Summary> {
    let mut warnings = Vec::new();
    let mut runs = Vec::new();
    for dir in dirs {
        let manifest = dir.join("manifest.json");
        if manifest.is_file() {
            collect_run(dir, &mut runs, &mut warnings);
        } else if dir.is_dir() {
            let mut entries: Vec<PathBuf> = fs::read_dir(dir)
                .map_err(|e| Error::io(dir, e))?
                .filter_map(|e| e.ok().map(|e| e.path()))
                .filter(|p| p.join("manifest.json").is_file())
                .collect();
            entries.sort();
            for sub in entries {
                collect_run(&sub, &mut runs, &mut warnings);
            }
        } else {
            warnings.push(format!("{}: not a run directory, skipped", dir.display()));
        }
    }
    if runs.is_empty() {
        return Err(Error::input("no completed runs found".to_string()));
    }

    let mut alphas: Vec<f64> = runs.iter().map(|r| r.alpha).collect();
    alphas.sort_by(f64::total_cmp);
    alphas.dedup_by(|a, b| a.to_bits() == b.to_bits());
    let mut keys: Vec<(String, String)> = runs
        .iter()
        .map(|r| {
            (
                r.criterion.label().to_string(),
                r.reconstruction.label().to_string(),
            )
        })
        .collect();
    keys.sort();
    keys.dedup();

    let cell = |criterion: &str, recon: &str, alpha: f64| -> String {
        match runs.iter().find(|r| {
            r.criterion.label() == criterion && r.reconstruction.label() == recon && r.alpha == alpha
        }) {
            Some(r) if r.failed => "False".to_string(),
            Some(r) => r
                .final_test_acc
                .map(|a| format!("{:.2}", a * 100.0))
                .unwrap_or_else(|| "--".to_string()),
            None => "--".to_string(),
        }
    };

    let mut text = String::new();
    let mut csv = String::new();
    text.push_str(&format!("{:<18}{:<8}", "criterion", "recon"));
    csv.push_str("criterion,reconstruction");
    for a in &alphas {
        text.push_str(&format!("{:<12}", format!("alpha={a}")));
        csv.push_str(&format!(",acc_alpha_{a}"));
    }
    text.push('\n');
    csv.push('\n');
    for (criterion, recon) in &keys {
        text.push_str(&format!("{criterion:<18}{recon:<8}"));
        csv.push_str(&format!("{criterion},{recon}"));
        for &a in &alphas {
            let c = cell(criterion, recon, a);
            text.push_str(&format!("{c:<12}"));
            csv.push_str(&format!(",{c}"));
        }
        text.push('\n');
        csv.push('\n');
    }
    Ok(Summary {
        text,
        csv,
        rows: keys.len(),
        warnings,
    })
}

fn collect_run(dir: &Path, runs: &mut Vec<RunSummary>, warnings: &mut Vec<String>) {
    let path = dir.join("manifest.json");
    let text = match fs::read_to_string(&path) {
        Ok(t) => t,
        Err(e) => {
            warnings.push(format!("{}: {e}, skipped", path.display()));
            return;
        }
    };
    let manifest: RunManifest = match serde_json::from_str(&text) {
        Ok(m) => m,
        Err(e) => {
            warnings.push(format!("{}: corrupt manifest ({e}), skipped", path.display()));
            return;
        }
    };
    runs.push(RunSummary {
        dir: dir.to_path_buf(),
        criterion: manifest.config.criterion,
        reconstruction: manifest.config.reconstruction,
        alpha: manifest.config.alpha,
        seed: manifest.config.seed,
        failed: manifest.status != "ok",
        final_test_acc: manifest.final_test_acc,
    });
}
