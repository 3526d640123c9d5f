//! Federated SGD over the simulated uplink.
//!
//! Every round each device computes a batch gradient at the shared model,
//! permutes it, and the block goes through [`channel::transmit`]. The base
//! station undoes the permutation on its estimate and takes one SGD step. The
//! downlink is ideal: all devices see the new model immediately.

use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::ops::Range;
use std::path::{Path, PathBuf};

use log::{info, warn};
use rand::seq::index;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::channel::{self, ChannelBlock, RoundTranscript};
use crate::config::{DataConfig, ExperimentConfig, TrainingConfig};
use crate::data::{self, Dataset, ShardAssignment};
use crate::error::{Error, Result};
use crate::model::{self, ModelParams, PARAM_COUNT};
use crate::params::SystemParams;
use crate::permute::{Magnitudes, PermutationKind, PermutationPlan};
use crate::rng::{RngStream, Role, StreamId};

/// One local batch, pixels already scaled to `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct DeviceBatch {
    pub images: Vec<Vec<f64>>,
    pub labels: Vec<u8>,
}

impl DeviceBatch {
    pub fn from_dataset(data: &Dataset, indices: &[usize]) -> Self {
        Self {
            images: indices.iter().map(|&i| data.image(i)).collect(),
            labels: indices.iter().map(|&i| data.labels()[i]).collect(),
        }
    }
}

/// Test images decoded once for repeated evaluation.
#[derive(Debug, Clone)]
pub struct EvalSet {
    pub images: Vec<Vec<f64>>,
    pub labels: Vec<u8>,
}

impl EvalSet {
    pub fn from_dataset(data: &Dataset) -> Self {
        Self {
            images: (0..data.len()).map(|i| data.image(i)).collect(),
            labels: data.labels().to_vec(),
        }
    }

    pub fn accuracy(&self, model: &ModelParams) -> Result<f64> {
        model::evaluate(model, &self.images, &self.labels)
    }
}

/// Training and test data for a run.
#[derive(Debug, Clone)]
pub struct Datasets {
    pub train: Dataset,
    pub test: EvalSet,
}

impl Datasets {
    pub fn new(train: Dataset, test: &Dataset) -> Self {
        Self {
            train,
            test: EvalSet::from_dataset(test),
        }
    }

    /// Loads the IDX files named by `cfg`, applying the per-class subset when
    /// one is configured.
    pub fn load(cfg: &DataConfig) -> Result<Self> {
        let (ti, tl) = cfg.train_paths();
        let (vi, vl) = cfg.test_paths();
        let mut train = Dataset::load(&ti, &tl)?;
        if let Some(n) = cfg.desk_per_class {
            train = train.desk_subset(n)?;
        }
        let test = Dataset::load(&vi, &vl)?;
        Ok(Self::new(train, &test))
    }
}

pub fn channel_stream(params: &SystemParams, trial: u64, round: u64) -> RngStream {
    RngStream::new(
        params.base_seed,
        StreamId::new(trial, Role::Channel, 0, round),
    )
}

pub fn noise_stream(params: &SystemParams, trial: u64, round: u64) -> RngStream {
    RngStream::new(
        params.base_seed,
        StreamId::new(trial, Role::Noise, 0, round),
    )
}

/// Loss and flat gradient of every device's batch, in device order.
pub fn local_gradients(
    model: &ModelParams,
    batches: &[DeviceBatch],
) -> Result<Vec<(f64, Vec<f64>)>> {
    batches
        .par_iter()
        .map(|b| model::loss_and_gradient(model, &b.images, &b.labels))
        .collect()
}

/// Permutes each gradient with `plan`, sends the block and returns the
/// de-permuted estimate of the average gradient.
pub fn uplink<G: AsRef<[f64]>>(
    gradients: &[G],
    plan: &PermutationPlan,
    params: &SystemParams,
    trial: u64,
    round: u64,
) -> Result<(Vec<f64>, RoundTranscript)> {
    if gradients.len() != params.num_devices {
        return Err(Error::DimensionMismatch {
            expected: params.num_devices,
            actual: gradients.len(),
        });
    }
    let permuted = gradients
        .iter()
        .map(|g| plan.apply(g.as_ref()))
        .collect::<Result<Vec<_>>>()?;
    let block = ChannelBlock::sample(params, &mut channel_stream(params, trial, round))?;
    let transcript = channel::transmit(
        &permuted,
        &block,
        params,
        &mut noise_stream(params, trial, round),
    )?;
    let estimate = plan.inverse(&transcript.estimate)?;
    Ok((estimate, transcript))
}

#[derive(Debug, Clone)]
pub struct RoundOutcome {
    pub theta: Vec<f64>,
    pub transcript: RoundTranscript,
    /// Estimated average gradient, in model coordinate order.
    pub estimate: Vec<f64>,
    /// Mean of the devices' batch losses.
    pub mean_loss: f64,
    pub device_gradients: Vec<Vec<f64>>,
}

/// One FedSGD round: local gradients, uplink, `theta - lr * estimate`.
/// `plan` is moved to `round` before use, so a Roll plan built for any round
/// works.
pub fn run_round(
    round: u64,
    theta: &[f64],
    batches: &[DeviceBatch],
    plan: &PermutationPlan,
    params: &SystemParams,
    learning_rate: f64,
    trial: u64,
) -> Result<RoundOutcome> {
    if theta.len() != params.model_dim {
        return Err(Error::DimensionMismatch {
            expected: params.model_dim,
            actual: theta.len(),
        });
    }
    let model = ModelParams::from_flat(theta)?;
    let (losses, device_gradients): (Vec<f64>, Vec<Vec<f64>>) =
        local_gradients(&model, batches)?.into_iter().unzip();
    let plan = plan.at_round(round);
    let (estimate, transcript) = uplink(&device_gradients, &plan, params, trial, round)?;
    let theta = theta
        .iter()
        .zip(&estimate)
        .map(|(t, g)| t - learning_rate * g)
        .collect();
    Ok(RoundOutcome {
        theta,
        transcript,
        estimate,
        mean_loss: losses.iter().sum::<f64>() / losses.len().max(1) as f64,
        device_gradients,
    })
}

/// One evaluation point of a training run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsRecord {
    pub trial: u64,
    /// 1-based.
    pub epoch: usize,
    /// Rounds completed in this epoch.
    pub batch_index: usize,
    pub permutation: PermutationKind,
    pub sigma_e2: f64,
    pub test_accuracy: f64,
    /// Mean batch loss over the rounds since the previous evaluation.
    pub mean_train_loss: f64,
    /// Over-limit symbols since the previous evaluation.
    pub power_violations: usize,
}

/// Mean `|g_d|` over all devices and rounds of one epoch.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProfileRecord {
    pub trial: u64,
    pub epoch: usize,
    pub d: usize,
    pub mean_abs: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct StepReport {
    /// 1-based.
    pub epoch: usize,
    pub batch_index: usize,
    pub mean_loss: f64,
    pub power_violations: usize,
    pub epoch_done: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EpochSummary {
    pub epoch: usize,
    pub rounds: usize,
    pub mean_loss: f64,
    pub power_violations: usize,
    pub gradient_profile: Option<Vec<f64>>,
}

#[derive(Debug)]
struct EpochState {
    epoch: usize,
    /// `batches[k][r]`: sample indices of device `k` in round `r`.
    batches: Vec<Vec<Vec<usize>>>,
    rounds: usize,
    next_round: usize,
    refreshes_done: usize,
    loss_sum: f64,
    violations: usize,
    abs_sum: Option<Vec<f64>>,
}

#[derive(Debug, Default)]
struct Interval {
    loss_sum: f64,
    rounds: usize,
    violations: usize,
}

/// State of one training trial.
#[derive(Debug)]
pub struct Trainer<'a> {
    params: SystemParams,
    training: TrainingConfig,
    train: &'a Dataset,
    trial: u64,
    assignment: ShardAssignment,
    theta: Vec<f64>,
    plan: PermutationPlan,
    round: u64,
    state: Option<EpochState>,
    interval: Interval,
    warned_power: bool,
}

impl<'a> Trainer<'a> {
    /// Shards the data and initializes the model for `trial`.
    pub fn new(
        params: &SystemParams,
        training: &TrainingConfig,
        train: &'a Dataset,
        trial: u64,
    ) -> Result<Self> {
        params.validate()?;
        if params.model_dim != PARAM_COUNT {
            return Err(Error::DimensionMismatch {
                expected: PARAM_COUNT,
                actual: params.model_dim,
            });
        }
        let seed = params.base_seed;
        let assignment = data::shard_heterogeneous(
            train.labels(),
            params.num_devices,
            training.shards_per_device,
            &mut RngStream::new(seed, StreamId::new(trial, Role::Shard, 0, 0)),
        )?;
        let theta = ModelParams::init(&mut RngStream::new(
            seed,
            StreamId::new(trial, Role::Init, 0, 0),
        ))
        .flatten();
        Ok(Self {
            params: params.clone(),
            training: training.clone(),
            train,
            trial,
            assignment,
            theta,
            plan: PermutationPlan::new(training.permutation, params.model_dim),
            round: 0,
            state: None,
            interval: Interval::default(),
            warned_power: false,
        })
    }

    pub fn theta(&self) -> &[f64] {
        &self.theta
    }

    pub fn model(&self) -> Result<ModelParams> {
        ModelParams::from_flat(&self.theta)
    }

    pub fn plan(&self) -> &PermutationPlan {
        &self.plan
    }

    pub fn assignment(&self) -> &ShardAssignment {
        &self.assignment
    }

    /// Rounds completed so far, over all epochs.
    pub fn global_round(&self) -> u64 {
        self.round
    }

    fn stream(&self, role: Role, index: u64, round: u64) -> RngStream {
        RngStream::new(
            self.params.base_seed,
            StreamId::new(self.trial, role, index, round),
        )
    }

    fn begin_epoch(&mut self, epoch: usize) -> Result<()> {
        let b = self.training.batch_size;
        let batches: Vec<Vec<Vec<usize>>> = (0..self.params.num_devices)
            .map(|k| {
                let mut rng = self.stream(Role::Batches, k as u64, epoch as u64 - 1);
                data::batches(&self.assignment, k, b, &mut rng)
            })
            .collect();
        let rounds = batches.iter().map(Vec::len).min().unwrap_or(0);
        if rounds == 0 {
            return Err(Error::InvalidParam(format!(
                "batch size {b} leaves a device with no full batch"
            )));
        }
        self.state = Some(EpochState {
            epoch,
            batches,
            rounds,
            next_round: 0,
            refreshes_done: 0,
            loss_sum: 0.0,
            violations: 0,
            abs_sum: self
                .training
                .gradient_profile
                .then(|| vec![0.0; self.params.model_dim]),
        });
        Ok(())
    }

    /// New Sort order from one extra batch per device. Only magnitudes leave
    /// the devices.
    fn refresh_sort(&mut self, epoch: usize, refresh: usize) -> Result<()> {
        let model = self.model()?;
        let b = self.training.batch_size;
        let idx = (epoch as u64 - 1) * self.training.sort_refresh as u64 + refresh as u64;
        let batches: Vec<DeviceBatch> = (0..self.params.num_devices)
            .map(|k| {
                let own = self.assignment.device_indices(k);
                let mut rng = self.stream(Role::SortBatch, k as u64, idx);
                let pick: Vec<usize> = index::sample(&mut rng, own.len(), b.min(own.len()))
                    .into_iter()
                    .map(|i| own[i])
                    .collect();
                DeviceBatch::from_dataset(self.train, &pick)
            })
            .collect();
        let magnitudes: Vec<Magnitudes> = local_gradients(&model, &batches)?
            .iter()
            .map(|(_, g)| Magnitudes::from_gradient(g))
            .collect();
        self.plan = PermutationPlan::from_magnitudes(&magnitudes)?;
        Ok(())
    }

    /// Runs one round, starting a new epoch first when needed.
    pub fn step(&mut self) -> Result<StepReport> {
        let (epoch, r) = match &self.state {
            Some(s) if s.next_round < s.rounds => (s.epoch, s.next_round),
            prev => {
                let next = prev.as_ref().map_or(1, |s| s.epoch + 1);
                self.begin_epoch(next)?;
                (next, 0)
            }
        };
        if self.training.permutation == PermutationKind::Sort {
            let (rounds, done) = {
                let s = self.state.as_ref().expect("epoch started");
                (s.rounds, s.refreshes_done)
            };
            let per_epoch = self.training.sort_refresh;
            let mut done = done;
            while done < per_epoch && done * rounds / per_epoch <= r {
                self.refresh_sort(epoch, done)?;
                done += 1;
            }
            self.state.as_mut().expect("epoch started").refreshes_done = done;
        }

        let state = self.state.as_ref().expect("epoch started");
        let batches: Vec<DeviceBatch> = state
            .batches
            .iter()
            .map(|dev| DeviceBatch::from_dataset(self.train, &dev[r]))
            .collect();
        let out = run_round(
            self.round,
            &self.theta,
            &batches,
            &self.plan,
            &self.params,
            self.training.learning_rate,
            self.trial,
        )?;
        if !out.theta.iter().all(|v| v.is_finite()) {
            return Err(Error::Diverged { round: self.round });
        }
        let violations = out.transcript.power_violations;
        if violations > 0 && !self.warned_power {
            warn!(
                "trial {}: {violations} symbols above the power limit in round {} (sent unclipped; further violations only counted)",
                self.trial, self.round
            );
            self.warned_power = true;
        }
        self.theta = out.theta;
        self.round += 1;
        self.interval.loss_sum += out.mean_loss;
        self.interval.rounds += 1;
        self.interval.violations += violations;

        let state = self.state.as_mut().expect("epoch started");
        state.next_round += 1;
        state.loss_sum += out.mean_loss;
        state.violations += violations;
        if let Some(acc) = state.abs_sum.as_mut() {
            for g in &out.device_gradients {
                for (a, v) in acc.iter_mut().zip(g) {
                    *a += v.abs();
                }
            }
        }
        Ok(StepReport {
            epoch,
            batch_index: state.next_round,
            mean_loss: out.mean_loss,
            power_violations: violations,
            epoch_done: state.next_round == state.rounds,
        })
    }

    /// Finishes the current epoch (or runs the next one), evaluating on
    /// `test` every `eval_every` global rounds.
    pub fn run_epoch(
        &mut self,
        test: &EvalSet,
        mut on_eval: impl FnMut(MetricsRecord) -> Result<()>,
    ) -> Result<EpochSummary> {
        loop {
            let step = self.step()?;
            if self.round.is_multiple_of(self.training.eval_every as u64) {
                let interval = std::mem::take(&mut self.interval);
                on_eval(MetricsRecord {
                    trial: self.trial,
                    epoch: step.epoch,
                    batch_index: step.batch_index,
                    permutation: self.training.permutation,
                    sigma_e2: self.params.sigma_e2,
                    test_accuracy: test.accuracy(&self.model()?)?,
                    mean_train_loss: interval.loss_sum / interval.rounds.max(1) as f64,
                    power_violations: interval.violations,
                })?;
            }
            if step.epoch_done {
                break;
            }
        }
        let s = self.state.as_ref().expect("epoch ran");
        let scale = (s.rounds * self.params.num_devices) as f64;
        Ok(EpochSummary {
            epoch: s.epoch,
            rounds: s.rounds,
            mean_loss: s.loss_sum / s.rounds as f64,
            power_violations: s.violations,
            gradient_profile: s
                .abs_sum
                .as_ref()
                .map(|acc| acc.iter().map(|a| a / scale).collect()),
        })
    }
}

pub const METRICS_FILE: &str = "metrics.csv";
pub const PROFILE_FILE: &str = "gradient_profile.csv";
pub const MANIFEST_FILE: &str = "manifest.json";

#[derive(Debug, Serialize)]
struct Manifest<'a> {
    config: &'a ExperimentConfig,
    model_dim: usize,
    trials: Range<u64>,
    git_describe: String,
    version: &'static str,
    completed_trials: &'a [u64],
    failed_trials: &'a [FailedTrial],
}

#[derive(Debug, Clone, Serialize)]
pub struct FailedTrial {
    pub trial: u64,
    pub error: String,
}

#[derive(Debug, Clone, Default)]
pub struct RunSummary {
    pub dir: PathBuf,
    pub records: usize,
    pub completed_trials: Vec<u64>,
    pub failed_trials: Vec<FailedTrial>,
}

/// `git describe` of the working directory, or "unknown".
pub fn git_describe() -> String {
    std::process::Command::new("git")
        .args(["describe", "--always", "--dirty", "--tags"])
        .output()
        .ok()
        .filter(|o| o.status.success())
        .and_then(|o| String::from_utf8(o.stdout).ok())
        .map(|s| s.trim().to_string())
        .filter(|s| !s.is_empty())
        .unwrap_or_else(|| "unknown".into())
}

fn write_manifest(
    dir: &Path,
    config: &ExperimentConfig,
    trials: &Range<u64>,
    summary: &RunSummary,
) -> Result<()> {
    let path = dir.join(MANIFEST_FILE);
    let manifest = Manifest {
        config,
        model_dim: config.system.model_dim,
        trials: trials.clone(),
        git_describe: git_describe(),
        version: env!("CARGO_PKG_VERSION"),
        completed_trials: &summary.completed_trials,
        failed_trials: &summary.failed_trials,
    };
    let file = File::create(&path).map_err(|e| Error::io(&path, e))?;
    let mut w = BufWriter::new(file);
    serde_json::to_writer_pretty(&mut w, &manifest)?;
    w.write_all(b"\n").map_err(|e| Error::io(&path, e))?;
    w.flush().map_err(|e| Error::io(&path, e))
}

fn csv_writer(path: &Path) -> Result<csv::Writer<File>> {
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    Ok(csv::Writer::from_writer(file))
}

/// Runs `trials` of `config` into `dir`: `metrics.csv` (one row per
/// evaluation, flushed as it is produced), `manifest.json`, and
/// `gradient_profile.csv` when profiles are enabled. A trial that fails is
/// logged and skipped; I/O errors on the outputs end the run.
pub fn run_experiment(
    config: &ExperimentConfig,
    data: &Datasets,
    dir: &Path,
    trials: Range<u64>,
) -> Result<RunSummary> {
    config.validate()?;
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut summary = RunSummary {
        dir: dir.to_path_buf(),
        ..RunSummary::default()
    };
    write_manifest(dir, config, &trials, &summary)?;
    let metrics_path = dir.join(METRICS_FILE);
    let mut metrics = csv_writer(&metrics_path)?;
    let profile_path = dir.join(PROFILE_FILE);
    let mut profile = if config.training.gradient_profile {
        Some(csv_writer(&profile_path)?)
    } else {
        None
    };

    for trial in trials.clone() {
        let result = (|| -> Result<()> {
            let mut trainer = Trainer::new(&config.system, &config.training, &data.train, trial)?;
            for _ in 0..config.training.epochs {
                let epoch = trainer.run_epoch(&data.test, |rec| {
                    metrics.serialize(&rec)?;
                    metrics.flush().map_err(|e| Error::io(&metrics_path, e))?;
                    summary.records += 1;
                    info!(
                        "trial {trial} epoch {} batch {}: accuracy {:.4}, loss {:.4}",
                        rec.epoch, rec.batch_index, rec.test_accuracy, rec.mean_train_loss
                    );
                    Ok(())
                })?;
                if let (Some(w), Some(p)) = (profile.as_mut(), epoch.gradient_profile.as_ref()) {
                    for (d, &mean_abs) in p.iter().enumerate() {
                        w.serialize(ProfileRecord {
                            trial,
                            epoch: epoch.epoch,
                            d,
                            mean_abs,
                        })?;
                    }
                    w.flush().map_err(|e| Error::io(&profile_path, e))?;
                }
            }
            Ok(())
        })();
        // Trials do no I/O of their own, so an I/O error came from the writers.
        match result {
            Ok(()) => summary.completed_trials.push(trial),
            Err(e) if e.is_io() => return Err(e),
            Err(e) => {
                warn!("trial {trial} failed: {e}");
                summary.failed_trials.push(FailedTrial {
                    trial,
                    error: e.to_string(),
                });
            }
        }
    }
    write_manifest(dir, config, &trials, &summary)?;
    Ok(summary)
}
