//! The Gaussian weight-curve simulation and the toy training benchmark.

use std::io::Write;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dynamics::{epoch_weights, logit_gradient, LogitGradient};
use crate::error::{param, Error, Result};
use crate::losses::{LossKind, LossSpec};
use crate::policy::{PolicyTable, ReferencePolicy};
use crate::rng::{derive_seed, seeded, StdRng};
use crate::stats::{mean, spearman, variance};
use crate::task::{
    expected_pair_dataset, expected_pair_dataset_with, GaussianScenario, PairSampler,
    PreferenceTask, SamplingKind, SamplingScheme, WeightedPair,
};

// ---------------------------------------------------------------------------
// Gaussian weight curves

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CurveRow {
    pub y: f64,
    pub p: f64,
    pub u: f64,
    pub w_dpo: f64,
    pub w_balanced: f64,
}

/// Per-response weight `w` (DPO) and `w p` (balanced) for a single-prompt
/// Gaussian scenario on the scheme-weighted expected dataset.
pub fn gaussian_curves(scenario: &GaussianScenario, sampling: SamplingKind) -> Vec<CurveRow> {
    let task = scenario.to_task();
    let policy = scenario.model_policy();
    let data = expected_pair_dataset_with(&task, SamplingScheme::bind(sampling, &policy));
    let w = epoch_weights(&policy, None, &data, 1.0);
    let p = policy.probs(0);
    let u = scenario.utilities();
    (0..scenario.n_responses)
        .map(|i| CurveRow {
            y: i as f64,
            p: p[i],
            u: u[i],
            w_dpo: w[0][i],
            w_balanced: w[0][i] * p[i],
        })
        .collect()
}

/// Writes the curve table as CSV with columns `y, p, u, w_dpo, w_balanced`.
pub fn run_gaussian_scenario<W: Write>(
    scenario: &GaussianScenario,
    sampling: SamplingKind,
    out: W,
) -> Result<Vec<CurveRow>> {
    let rows = gaussian_curves(scenario, sampling);
    let mut wtr = csv::Writer::from_writer(out);
    wtr.write_record(["y", "p", "u", "w_dpo", "w_balanced"])?;
    for r in &rows {
        wtr.write_record(
            [r.y, r.p, r.u, r.w_dpo, r.w_balanced]
                .iter()
                .map(|v| format!("{v:?}")),
        )?;
    }
    wtr.flush()?;
    Ok(rows)
}

// ---------------------------------------------------------------------------
// Training

/// Missing fields deserialize to their defaults.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub loss: LossSpec,
    pub eta: f64,
    pub steps: usize,
    /// Fresh pairs drawn per step when training online.
    pub pairs_per_epoch: usize,
    /// Use the exact expected dataset every step instead of sampled pairs.
    pub full_batch: bool,
    /// Size of the offline dataset swept in full every step. Under uniform
    /// sampling it is drawn once (stream 3); shiftless sampling redraws it
    /// from the live policy every step. `0` trains online on
    /// `pairs_per_epoch` fresh pairs per step.
    pub dataset_size: usize,
    pub mask_rate: f64,
    pub alpha_utility: f64,
    pub reference_bootstrap_steps: usize,
    pub seed: u64,
    pub sampling: SamplingKind,
    /// Steps between trajectory records.
    pub record_every: usize,
    pub n_prompts: usize,
    pub n_responses: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            loss: LossSpec::of(LossKind::Dpo),
            eta: 0.5,
            steps: 2000,
            pairs_per_epoch: 64,
            full_batch: false,
            dataset_size: 1000,
            mask_rate: 0.0,
            alpha_utility: 0.6,
            reference_bootstrap_steps: 300,
            seed: 0,
            sampling: SamplingKind::Uniform,
            record_every: 50,
            n_prompts: 20,
            n_responses: 20,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.eta >= 0.0 && self.eta.is_finite()) {
            return param(format!("eta must be finite and >= 0, got {}", self.eta));
        }
        if self.steps == 0 || self.record_every == 0 {
            return param("steps and record_every must be >= 1");
        }
        if !self.full_batch && self.dataset_size == 0 && self.pairs_per_epoch == 0 {
            return param("pairs_per_epoch must be >= 1 when training online");
        }
        if !(0.0..1.0).contains(&self.mask_rate) {
            return param(format!(
                "mask rate must lie in [0, 1), got {}",
                self.mask_rate
            ));
        }
        if !(self.alpha_utility > 0.0 && self.alpha_utility.is_finite()) {
            return param("alpha_utility must be positive");
        }
        if self.n_prompts == 0 || self.n_responses < 2 {
            return param("grid needs >= 1 prompt and >= 2 responses");
        }
        Ok(())
    }

    /// Streams: 0 masks the task, 1 drives training, 2 the bootstrap, 3 the
    /// offline dataset.
    fn stream(&self, k: u64) -> StdRng {
        seeded(derive_seed(self.seed, k))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentReport {
    pub config: TrainConfig,
    /// `[step, mean negative squared distance, mean expected utility]`
    pub reward_trajectory: Vec<[f64; 3]>,
    /// `[step, g_w, g_l]`, dataset means of the probability gradients (same
    /// dataset as `loss_trajectory`).
    pub gradient_balance: Vec<[f64; 3]>,
    /// `[step, mean loss]` on the offline dataset, or on the expected dataset
    /// when training online or full-batch.
    pub loss_trajectory: Vec<[f64; 2]>,
    pub final_reward: [f64; 2],
    pub final_policy: Vec<Vec<f64>>,
}

/// `(mean over prompts of E_pi[-(y - x)^2], mean over prompts of E_pi[u])`.
pub fn eval_reward(policy: &PolicyTable, task: &PreferenceTask) -> (f64, f64) {
    let s = task.n_prompts();
    let (mut negsq, mut util) = (0.0, 0.0);
    for x in 0..s {
        let p = policy.probs(x);
        let xl = task.prompt_label(x);
        for (y, py) in p.iter().enumerate() {
            negsq -= py * (task.response_label(y) - xl).powi(2);
            util += py * task.utility(x, y);
        }
    }
    (negsq / s as f64, util / s as f64)
}

/// Toy task for a config: the 1-based grid, masked with stream 0.
pub fn build_task(config: &TrainConfig) -> Result<PreferenceTask> {
    config.validate()?;
    let task = PreferenceTask::toy(config.n_prompts, config.n_responses, config.alpha_utility)?;
    if config.mask_rate == 0.0 {
        return Ok(task);
    }
    task.apply_mask(config.mask_rate, &mut config.stream(0))
}

/// Gradient of the per-prompt mean loss, summed over prompts: the weighted
/// loss sum rescaled by `prompts / total weight`.
fn scaled_gradient(
    policy: &PolicyTable,
    reference: &ReferencePolicy,
    batch: &[WeightedPair],
    spec: &LossSpec,
) -> Result<LogitGradient> {
    let mut lg = logit_gradient(policy, reference, batch, spec)?;
    if lg.total_weight > 0.0 {
        let scale = policy.n_prompts() as f64 / lg.total_weight;
        lg.grad.iter_mut().flatten().for_each(|g| *g *= scale);
    }
    Ok(lg)
}

struct Stepper<'a> {
    task: &'a PreferenceTask,
    expected: Vec<WeightedPair>,
    uniform_sampler: Option<PairSampler>,
    offline: Option<Vec<WeightedPair>>,
    config: &'a TrainConfig,
}

impl<'a> Stepper<'a> {
    fn new(task: &'a PreferenceTask, config: &'a TrainConfig) -> Result<Self> {
        let uniform_sampler = match (config.full_batch, config.sampling) {
            (false, SamplingKind::Uniform) => {
                Some(PairSampler::new(task, SamplingScheme::Uniform)?)
            }
            _ => None,
        };
        let offline = if config.dataset_size > 0 && uniform_sampler.is_some() {
            let sampler = PairSampler::new(task, SamplingScheme::Uniform)?;
            let data = sampler.sample_n(config.dataset_size, &mut config.stream(3));
            Some(data.into_iter().map(WeightedPair::from).collect())
        } else {
            None
        };
        Ok(Self {
            task,
            expected: expected_pair_dataset(task),
            uniform_sampler,
            offline,
            config,
        })
    }

    /// Fixed offline dataset when there is one, the expected dataset otherwise.
    fn diagnostic_data(&self) -> &[WeightedPair] {
        self.offline.as_deref().unwrap_or(&self.expected)
    }

    fn batch(&self, policy: &PolicyTable, rng: &mut StdRng) -> Result<Vec<WeightedPair>> {
        let scheme = SamplingScheme::bind(self.config.sampling, policy);
        if self.config.full_batch {
            return Ok(match self.config.sampling {
                SamplingKind::Uniform => self.expected.clone(),
                SamplingKind::Shiftless => expected_pair_dataset_with(self.task, scheme),
            });
        }
        if let Some(data) = &self.offline {
            return Ok(data.clone());
        }
        let n = match self.config.dataset_size {
            0 => self.config.pairs_per_epoch,
            d => d,
        };
        let fresh;
        let sampler = match &self.uniform_sampler {
            Some(s) => s,
            None => {
                // shiftless weights follow the live policy
                fresh = PairSampler::new(self.task, scheme)?;
                &fresh
            }
        };
        Ok(sampler
            .sample_n(n, rng)
            .into_iter()
            .map(WeightedPair::from)
            .collect())
    }

    fn step(
        &self,
        policy: &mut PolicyTable,
        reference: &ReferencePolicy,
        spec: &LossSpec,
        rng: &mut StdRng,
    ) -> Result<()> {
        let batch = self.batch(policy, rng)?;
        let lg = scaled_gradient(policy, reference, &batch, spec)?;
        let eta = self.config.eta;
        let delta: Vec<Vec<f64>> = lg
            .grad
            .iter()
            .map(|row| row.iter().map(|g| -eta * g).collect())
            .collect();
        policy.apply_update(&delta)
    }
}

/// Trains a uniform policy with DPO against the uniform reference for
/// `config.reference_bootstrap_steps` steps and freezes it.
pub fn bootstrap_reference(task: &PreferenceTask, config: &TrainConfig) -> Result<ReferencePolicy> {
    config.validate()?;
    let mut policy = PolicyTable::uniform(task.n_prompts(), task.n_responses());
    let uniform = policy.freeze();
    let stepper = Stepper::new(task, config)?;
    let spec = LossSpec {
        kind: LossKind::Dpo,
        ..config.loss
    };
    let mut rng = config.stream(2);
    for _ in 0..config.reference_bootstrap_steps {
        stepper.step(&mut policy, &uniform, &spec, &mut rng)?;
    }
    Ok(policy.freeze())
}

/// Trains from the reference policy itself with `config.loss`.
pub fn train(
    task: &PreferenceTask,
    reference: &ReferencePolicy,
    config: &TrainConfig,
) -> Result<ExperimentReport> {
    config.validate()?;
    let mut policy = reference.table().clone();
    let stepper = Stepper::new(task, config)?;
    let mut rng = config.stream(1);
    let mut report = ExperimentReport {
        config: config.clone(),
        reward_trajectory: Vec::new(),
        gradient_balance: Vec::new(),
        loss_trajectory: Vec::new(),
        final_reward: [0.0; 2],
        final_policy: Vec::new(),
    };
    let mut record = |step: usize, policy: &PolicyTable| -> Result<()> {
        let (r1, r2) = eval_reward(policy, task);
        let lg = logit_gradient(policy, reference, stepper.diagnostic_data(), &config.loss)?;
        let t = step as f64;
        report.reward_trajectory.push([t, r1, r2]);
        report.gradient_balance.push([t, lg.g_w, lg.g_l]);
        report.loss_trajectory.push([t, lg.mean_loss]);
        Ok(())
    };
    record(0, &policy)?;
    for step in 1..=config.steps {
        stepper.step(&mut policy, reference, &config.loss, &mut rng)?;
        if step % config.record_every == 0 || step == config.steps {
            record(step, &policy)?;
        }
    }
    let (r1, r2) = eval_reward(&policy, task);
    report.final_reward = [r1, r2];
    report.final_policy = policy.rows().to_vec();
    Ok(report)
}

/// Builds the task and shared reference for `config`, then trains.
pub fn run_experiment(config: &TrainConfig) -> Result<ExperimentReport> {
    let task = build_task(config)?;
    let reference = bootstrap_reference(&task, config)?;
    train(&task, &reference, config)
}

// ---------------------------------------------------------------------------
// Sweeps

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub loss: String,
    pub mask: f64,
    pub seed: u64,
    pub reward_negsq: f64,
    pub reward_util: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepSummary {
    pub loss: String,
    pub mask: f64,
    pub n_seeds: usize,
    pub mean_negsq: f64,
    pub std_negsq: f64,
    pub mean_util: f64,
    pub std_util: f64,
}

pub const BENCHMARK_LOSSES: [&str; 6] = [
    "dpo",
    "nbdpo-asym",
    "nbdpo-sym",
    "nbdpov2-asym",
    "nbdpov2-sym",
    "bdpo",
];
pub const BENCHMARK_MASKS: [f64; 3] = [0.0, 0.2, 0.4];

/// Runs every loss on every `(mask, seed)` cell. Each cell bootstraps one
/// reference that all losses share; losses take their `beta`/`clip_max` from
/// `base.loss`.
pub fn benchmark_sweep(
    losses: &[LossKind],
    masks: &[f64],
    seeds: &[u64],
    base: &TrainConfig,
) -> Result<Vec<SweepRow>> {
    if losses.is_empty() || masks.is_empty() || seeds.is_empty() {
        return param("sweep needs at least one loss, mask and seed");
    }
    let cells: Vec<(f64, u64)> = masks
        .iter()
        .flat_map(|&m| seeds.iter().map(move |&s| (m, s)))
        .collect();
    let prepared: Vec<(TrainConfig, PreferenceTask, ReferencePolicy)> = cells
        .par_iter()
        .map(|&(mask, seed)| {
            let cfg = TrainConfig {
                mask_rate: mask,
                seed,
                ..base.clone()
            };
            let task = build_task(&cfg)?;
            let reference = bootstrap_reference(&task, &cfg)?;
            Ok((cfg, task, reference))
        })
        .collect::<Result<_>>()?;
    let jobs: Vec<(usize, LossKind)> = (0..prepared.len())
        .flat_map(|c| losses.iter().map(move |&k| (c, k)))
        .collect();
    jobs.par_iter()
        .map(|&(c, kind)| {
            let (cfg, task, reference) = &prepared[c];
            let cfg = TrainConfig {
                loss: LossSpec { kind, ..cfg.loss },
                ..cfg.clone()
            };
            let report = train(task, reference, &cfg)?;
            Ok(SweepRow {
                loss: kind.name().to_string(),
                mask: cfg.mask_rate,
                seed: cfg.seed,
                reward_negsq: report.final_reward[0],
                reward_util: report.final_reward[1],
            })
        })
        .collect()
}

/// Mean and population standard deviation per `(loss, mask)`, in first-seen
/// order.
pub fn summarize_sweep(rows: &[SweepRow]) -> Vec<SweepSummary> {
    let mut keys: Vec<(String, f64)> = Vec::new();
    for r in rows {
        if !keys.iter().any(|(l, m)| *l == r.loss && *m == r.mask) {
            keys.push((r.loss.clone(), r.mask));
        }
    }
    keys.into_iter()
        .map(|(loss, mask)| {
            let cell: Vec<&SweepRow> = rows
                .iter()
                .filter(|r| r.loss == loss && r.mask == mask)
                .collect();
            let negsq: Vec<f64> = cell.iter().map(|r| r.reward_negsq).collect();
            let util: Vec<f64> = cell.iter().map(|r| r.reward_util).collect();
            SweepSummary {
                loss,
                mask,
                n_seeds: cell.len(),
                mean_negsq: mean(&negsq),
                std_negsq: variance(&negsq).sqrt(),
                mean_util: mean(&util),
                std_util: variance(&util).sqrt(),
            }
        })
        .collect()
}

pub fn write_sweep_csv<W: Write>(rows: &[SweepRow], out: W) -> Result<()> {
    let mut wtr = csv::Writer::from_writer(out);
    for r in rows {
        wtr.serialize(r)?;
    }
    wtr.flush()?;
    Ok(())
}

pub fn write_summary_csv<W: Write>(rows: &[SweepSummary], out: W) -> Result<()> {
    let mut wtr = csv::Writer::from_writer(out);
    for r in rows {
        wtr.serialize(r)?;
    }
    wtr.flush()?;
    Ok(())
}

// ---------------------------------------------------------------------------
// Gradient balance trend

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BalanceTrend {
    pub steps: Vec<f64>,
    pub g_w: Vec<f64>,
    pub g_l: Vec<f64>,
    /// Spearman correlation with the step index; `None` when degenerate.
    pub rho_w: Option<f64>,
    pub rho_l: Option<f64>,
}

impl BalanceTrend {
    pub fn is_degenerate(&self) -> bool {
        self.rho_w.is_none() || self.rho_l.is_none()
    }
}

pub fn gradient_balance_trajectory(report: &ExperimentReport) -> Result<BalanceTrend> {
    let n = report.gradient_balance.len();
    if n < 3 {
        return Err(Error::InsufficientData(format!(
            "need at least 3 recorded epochs, got {n}"
        )));
    }
    let steps: Vec<f64> = report.gradient_balance.iter().map(|r| r[0]).collect();
    let g_w: Vec<f64> = report.gradient_balance.iter().map(|r| r[1]).collect();
    let g_l: Vec<f64> = report.gradient_balance.iter().map(|r| r[2]).collect();
    Ok(BalanceTrend {
        rho_w: spearman(&g_w, &steps),
        rho_l: spearman(&g_l, &steps),
        steps,
        g_w,
        g_l,
    })
}
