//! Brute-force and Monte-Carlo checks of the moment inequalities and update
//! identities behind the epoch dynamics.
//!
//! Every randomized check derives one RNG stream per trial from a root seed,
//! so reports are identical across runs and thread counts.

use std::fmt;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dynamics::{
    alpha_beta_row, closed_form_step, epoch_weights, one_step_gradient_oracle, prob_update_dpo,
    DynamicsParams, UpdateRule,
};
use crate::error::{param, Error, Result};
use crate::losses::{LossKind, LossSpec};
use crate::policy::{PolicyTable, ReferencePolicy};
use crate::rng::{derive_seed, seeded, StdRng};
use crate::stats::{
    covariance, hadamard, mean, variance, weighted_covariance, weighted_mean, weighted_variance,
};
use crate::task::{expected_pair_dataset, GaussianScenario, PreferenceTask};

/// Named scalar attached to a report.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Detail {
    pub label: String,
    pub value: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OracleReport {
    pub name: String,
    pub trials: usize,
    pub violations: usize,
    /// Trials whose preconditions failed; not counted as violations.
    pub skipped: usize,
    /// Most negative slack observed (`None` when nothing was checked).
    pub worst_margin: Option<f64>,
    pub passed: bool,
    /// Nothing to assert (for example no interior extrema).
    pub inconclusive: bool,
    pub details: Vec<Detail>,
}

impl OracleReport {
    fn new(name: &str) -> Self {
        Self {
            name: name.to_string(),
            trials: 0,
            violations: 0,
            skipped: 0,
            worst_margin: None,
            passed: true,
            inconclusive: false,
            details: Vec::new(),
        }
    }

    fn detail(mut self, label: &str, value: f64) -> Self {
        self.details.push(Detail {
            label: label.to_string(),
            value,
        });
        self
    }

    pub fn get(&self, label: &str) -> Option<f64> {
        self.details
            .iter()
            .find(|d| d.label == label)
            .map(|d| d.value)
    }

    fn observe(&mut self, margin: f64, violated: bool) {
        self.trials += 1;
        self.worst_margin = Some(self.worst_margin.map_or(margin, |w| w.min(margin)));
        if violated {
            self.violations += 1;
        }
    }

    fn finish(mut self) -> Self {
        self.passed = self.violations == 0;
        self
    }
}

impl fmt::Display for OracleReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let status = match (self.passed, self.inconclusive) {
            (true, true) => "INCONCLUSIVE",
            (true, false) => "PASS",
            (false, _) => "FAIL",
        };
        write!(
            f,
            "{status} {}: {} trials, {} violations, {} skipped, worst margin {}",
            self.name,
            self.trials,
            self.violations,
            self.skipped,
            self.worst_margin
                .map_or("n/a".to_string(), |m| format!("{m:e}"))
        )
    }
}

/// Outcome of one randomized trial: a slack value, or a precondition miss.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Trial {
    Slack(f64),
    Skipped,
}

#[derive(Debug, Clone, Copy, PartialEq)]
enum Bound {
    /// `slack >= -tol`
    AtLeast(f64),
    /// `slack > tol`
    Strict(f64),
}

fn run_trials<F>(trials: usize, seed: u64, f: F) -> Vec<Trial>
where
    F: Fn(&mut StdRng) -> Trial + Sync,
{
    (0..trials as u64)
        .into_par_iter()
        .map(|t| f(&mut seeded(derive_seed(seed, t))))
        .collect()
}

fn tally(name: &str, outcomes: &[Trial], bound: Bound) -> OracleReport {
    let mut report = OracleReport::new(name);
    for o in outcomes {
        match *o {
            Trial::Skipped => report.skipped += 1,
            Trial::Slack(s) => {
                let violated = match bound {
                    Bound::AtLeast(tol) => !(s >= -tol),
                    Bound::Strict(tol) => !(s > tol),
                };
                report.observe(s, violated);
            }
        }
    }
    report.finish()
}

fn check_trials(trials: usize) -> Result<()> {
    if trials == 0 {
        return param("trials must be >= 1");
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// Random generators

/// Nondecreasing positive values on a grid of `k` points: cumulative sums of
/// nonnegative increments (about a third of them zero) plus a positive offset.
pub fn random_increasing<R: Rng>(k: usize, rng: &mut R) -> Vec<f64> {
    let mut level = rng.gen_range(0.05..1.0);
    let mut out = Vec::with_capacity(k);
    for i in 0..k {
        if i > 0 && rng.gen_bool(2.0 / 3.0) {
            level += rng.gen_range(0.0..1.0 / k as f64);
        }
        out.push(level);
    }
    out
}

/// Random probability vector on `k` points, bounded away from zero.
pub fn random_distribution<R: Rng>(k: usize, rng: &mut R) -> Vec<f64> {
    let raw: Vec<f64> = (0..k).map(|_| rng.gen_range(0.05..1.0)).collect();
    let z: f64 = raw.iter().sum();
    raw.into_iter().map(|v| v / z).collect()
}

fn sorted_draws<R: Rng>(n: usize, lo: f64, hi: f64, rng: &mut R) -> Vec<f64> {
    let mut v: Vec<f64> = (0..n).map(|_| rng.gen_range(lo..hi)).collect();
    v.sort_by(f64::total_cmp);
    v
}

/// Single-prompt `(p, u)` whose utility ranks equal the probability ranks
/// (`anti = false`) or reverse them (`anti = true`).
pub fn rank_coupled_row<R: Rng>(n: usize, anti: bool, rng: &mut R) -> (Vec<f64>, Vec<f64>) {
    let ps = sorted_draws(n, 0.05, 1.0, rng);
    let us = sorted_draws(n, 0.1, 3.0, rng);
    let z: f64 = ps.iter().sum();
    let mut perm: Vec<usize> = (0..n).collect();
    perm.shuffle(rng);
    let mut p = vec![0.0; n];
    let mut u = vec![0.0; n];
    for (r, &i) in perm.iter().enumerate() {
        p[i] = ps[r] / z;
        u[i] = if anti { us[n - 1 - r] } else { us[r] };
    }
    (p, u)
}

/// Responses on a `k x l` grid where the probability depends only on the
/// first coordinate and the utility only on the second. Under the uniform
/// measure over responses, `(alpha, p)` and `beta` are then exactly
/// independent.
pub fn product_row<R: Rng>(k: usize, l: usize, rng: &mut R) -> (Vec<f64>, Vec<f64>) {
    let pa: Vec<f64> = (0..k).map(|_| rng.gen_range(0.1..1.0)).collect();
    let ub: Vec<f64> = (0..l).map(|_| rng.gen_range(0.1..3.0)).collect();
    let z: f64 = pa.iter().sum::<f64>() * l as f64;
    let mut p = Vec::with_capacity(k * l);
    let mut u = Vec::with_capacity(k * l);
    for a in &pa {
        for b in &ub {
            p.push(a / z);
            u.push(*b);
        }
    }
    (p, u)
}

fn w_row(probs: &[f64], utility: &[f64]) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
    let mask = vec![false; probs.len()];
    let (alpha, beta) = alpha_beta_row(probs, utility, &mask);
    let w = beta.iter().zip(&alpha).map(|(b, a)| b - a).collect();
    (w, alpha, beta)
}

// ---------------------------------------------------------------------------
// Moment inequalities for increasing functions

/// `Var[fg] - Var[f] E[g^2]` under the weights `prob`.
pub fn fym_slack(prob: &[f64], f: &[f64], g: &[f64]) -> f64 {
    let fg = hadamard(f, g);
    let g2 = hadamard(g, g);
    weighted_variance(&fg, prob) - weighted_variance(f, prob) * weighted_mean(&g2, prob)
}

/// `Cov[fg, g] - E[f] Var[g]` under the weights `prob`.
pub fn fym2_slack(prob: &[f64], f: &[f64], g: &[f64]) -> f64 {
    let fg = hadamard(f, g);
    weighted_covariance(&fg, g, prob) - weighted_mean(f, prob) * weighted_variance(g, prob)
}

pub const FYM_TOL: f64 = 1e-12;

fn mc_increasing_pair(
    name: &str,
    trials: usize,
    seed: u64,
    slack: fn(&[f64], &[f64], &[f64]) -> f64,
) -> Result<OracleReport> {
    check_trials(trials)?;
    let outcomes = run_trials(trials, seed, |rng| {
        let k = rng.gen_range(2..=12);
        let prob = random_distribution(k, rng);
        let f = random_increasing(k, rng);
        let g = random_increasing(k, rng);
        Trial::Slack(slack(&prob, &f, &g))
    });
    Ok(tally(name, &outcomes, Bound::AtLeast(FYM_TOL)))
}

/// `Var[f(X)g(X)] >= Var[f(X)] E[g(X)^2]` for nondecreasing positive `f, g`.
pub fn mc_check_fym(trials: usize, seed: u64) -> Result<OracleReport> {
    mc_increasing_pair("fym", trials, seed, fym_slack)
}

/// `Cov[f(X)g(X), g(X)] >= E[f(X)] Var[g(X)]` for nondecreasing positive `f, g`.
pub fn mc_check_fym2(trials: usize, seed: u64) -> Result<OracleReport> {
    mc_increasing_pair("fym2", trials, seed, fym2_slack)
}

// ---------------------------------------------------------------------------
// Variance of w against w p

/// `Var[wp] - Var[w]E[p^2] - 2(Cov[a,b]E[p^2] - Cov[ap, bp])`, moments taken
/// uniformly over responses.
pub fn variance_bound_slack(probs: &[f64], utility: &[f64]) -> f64 {
    let (w, alpha, beta) = w_row(probs, utility);
    let p2 = mean(&hadamard(probs, probs));
    let lhs = variance(&hadamard(&w, probs)) - variance(&w) * p2;
    let rhs = 2.0
        * (covariance(&alpha, &beta) * p2
            - covariance(&hadamard(&alpha, probs), &hadamard(&beta, probs)));
    lhs - rhs
}

/// True when `beta` is nondecreasing along increasing `probs`.
pub fn beta_monotone_in_p(probs: &[f64], beta: &[f64]) -> bool {
    let mut order: Vec<usize> = (0..probs.len()).collect();
    order.sort_by(|&a, &b| probs[a].total_cmp(&probs[b]));
    order
        .windows(2)
        .all(|w| beta[w[1]] >= beta[w[0]] - 1e-12 * beta[w[0]].abs().max(1.0))
}

pub const VARIANCE_TOL: f64 = 1e-10;

fn variance_trial(anti: bool, rng: &mut StdRng) -> (Trial, f64) {
    let n = rng.gen_range(3..=30);
    let (p, u) = rank_coupled_row(n, anti, rng);
    let slack = variance_bound_slack(&p, &u);
    let (_, beta) = alpha_beta_row(&p, &u, &vec![false; n]);
    let outcome = if beta_monotone_in_p(&p, &beta) {
        Trial::Slack(slack)
    } else {
        Trial::Skipped
    };
    (outcome, slack)
}

/// Rank-aligned random tasks; precondition-failing draws are skipped. The
/// report carries an anti-monotone negative control in its details.
pub fn check_variance_bound(trials: usize, seed: u64) -> Result<OracleReport> {
    check_trials(trials)?;
    let outcomes = run_trials(trials, seed, |rng| variance_trial(false, rng).0);
    let control: Vec<(Trial, f64)> = (0..trials.min(1000) as u64)
        .into_par_iter()
        .map(|t| variance_trial(true, &mut seeded(derive_seed(seed ^ 0xA5A5, t))))
        .collect();
    let control_skipped = control.iter().filter(|(o, _)| *o == Trial::Skipped).count();
    let control_negative = control.iter().filter(|(_, s)| *s < -VARIANCE_TOL).count();
    Ok(tally("variance", &outcomes, Bound::AtLeast(VARIANCE_TOL))
        .detail("control_trials", control.len() as f64)
        .detail("control_excluded_by_precondition", control_skipped as f64)
        .detail("control_inequality_failures", control_negative as f64))
}

// ---------------------------------------------------------------------------
// Perturbed preference labels

/// Slack of the perturbation inequality for one draw.
///
/// `eps[i]` is the total shift of `beta_i` (each pairwise label probability
/// involving `i` moves by `eps[i] / (n - 1)`), so `w = w* + eps`. Variances are
/// over `subset`; the `E[p^2]` factor is over all responses.
pub fn dataquality_slack(
    probs: &[f64],
    utility: &[f64],
    eps: &[f64],
    subset: &[usize],
) -> Result<f64> {
    let n = probs.len();
    if subset.is_empty() || subset.iter().any(|&i| i >= n) {
        return param("response subset must be non-empty and in range");
    }
    let p2_all = mean(&hadamard(probs, probs));
    let p2_sub = subset.iter().map(|&i| probs[i] * probs[i]).sum::<f64>() / subset.len() as f64;
    if p2_sub < p2_all * (1.0 - 1e-12) {
        return param(format!(
            "response subset has E[p^2] = {p2_sub:e} below the full-set {p2_all:e}"
        ));
    }
    let (w_clean, _, _) = w_row(probs, utility);
    let pick = |v: &[f64]| subset.iter().map(|&i| v[i]).collect::<Vec<f64>>();
    let w_star = pick(&w_clean);
    let w: Vec<f64> = subset.iter().map(|&i| w_clean[i] + eps[i]).collect();
    let p = pick(probs);
    let lhs = (variance(&w) - variance(&w_star)) * p2_all;
    let rhs = variance(&hadamard(&w, &p)) - variance(&hadamard(&w_star, &p));
    Ok(rhs - lhs)
}

fn random_subset<R: Rng>(probs: &[f64], rng: &mut R) -> Vec<usize> {
    let n = probs.len();
    let p2_all = mean(&hadamard(probs, probs));
    for _ in 0..32 {
        let size = rng.gen_range(2..=n);
        let mut idx: Vec<usize> = (0..n).collect();
        idx.shuffle(rng);
        idx.truncate(size);
        idx.sort_unstable();
        let p2 = idx.iter().map(|&i| probs[i] * probs[i]).sum::<f64>() / size as f64;
        if p2 >= p2_all {
            return idx;
        }
    }
    (0..n).collect()
}

/// Draws per trial; half of them are sign-flipped copies of the other half.
pub const DATAQUALITY_DRAWS: usize = 64;

/// Averages the perturbation slack over `trials` random tasks (each with
/// [`DATAQUALITY_DRAWS`] antithetic noise draws) and asserts the mean is at
/// least `-1e-3 * scale^2`.
pub fn check_dataquality(epsilon_scale: f64, trials: usize, seed: u64) -> Result<OracleReport> {
    check_trials(trials)?;
    // utilities in [0.5, 2] keep every pairwise label probability in [0.2, 0.8]
    if !(epsilon_scale > 0.0 && epsilon_scale < 0.2) {
        return param(format!(
            "epsilon scale must lie in (0, 0.2) so labels stay probabilities, got {epsilon_scale}"
        ));
    }
    let per_trial: Vec<Result<(f64, usize)>> = (0..trials as u64)
        .into_par_iter()
        .map(|t| {
            let rng = &mut seeded(derive_seed(seed, t));
            let n = rng.gen_range(4..=20);
            let probs = random_distribution(n, rng);
            let utility: Vec<f64> = (0..n).map(|_| rng.gen_range(0.5..2.0)).collect();
            let subset = random_subset(&probs, rng);
            let per_pair = epsilon_scale / (n - 1) as f64;
            let (mut sum, mut negatives) = (0.0, 0);
            for _ in 0..DATAQUALITY_DRAWS / 2 {
                let eps: Vec<f64> = (0..n)
                    .map(|_| rng.gen_range(-per_pair..per_pair) * (n - 1) as f64)
                    .collect();
                let flipped: Vec<f64> = eps.iter().map(|e| -e).collect();
                for e in [&eps, &flipped] {
                    let s = dataquality_slack(&probs, &utility, e, &subset)?;
                    sum += s;
                    negatives += usize::from(s < 0.0);
                }
            }
            Ok((sum / DATAQUALITY_DRAWS as f64, negatives))
        })
        .collect();
    let mut slacks = Vec::with_capacity(trials);
    let mut single_negatives = 0;
    for r in per_trial {
        let (s, neg) = r?;
        slacks.push(s);
        single_negatives += neg;
    }
    let avg = mean(&slacks);
    let tol = 1e-3 * epsilon_scale * epsilon_scale;
    let mut report = OracleReport::new("dataquality");
    report.trials = trials;
    report.worst_margin = Some(avg);
    report.violations = usize::from(!(avg >= -tol));
    Ok(report
        .finish()
        .detail("mean_slack", avg)
        .detail("tolerance", -tol)
        .detail("single_draw_negative_slacks", single_negatives as f64)
        .detail("draws", (trials * DATAQUALITY_DRAWS) as f64))
}

// ---------------------------------------------------------------------------
// OOD responses

/// Runs `epochs` closed-form steps and counts how often a response that
/// started at probability exactly zero left zero.
pub fn check_ood_zero(
    probs: &[f64],
    utility: &[f64],
    mask: &[bool],
    gamma: f64,
    epochs: usize,
    rule: UpdateRule,
) -> Result<OracleReport> {
    let zeros: Vec<usize> = (0..probs.len()).filter(|&i| probs[i] == 0.0).collect();
    if zeros.is_empty() {
        return param("no response with probability exactly zero");
    }
    if zeros.iter().any(|&i| !mask[i]) {
        return param("zero-probability responses must be masked out of training");
    }
    let mut report = OracleReport::new("ood_zero");
    let mut p = probs.to_vec();
    for _ in 0..epochs {
        p = closed_form_step(&p, utility, mask, gamma, rule);
        if p.iter().any(|v| !v.is_finite()) {
            return Err(Error::Numeric("closed-form dynamics diverged".into()));
        }
        let leaked = zeros.iter().map(|&i| p[i].abs()).fold(0.0, f64::max);
        report.observe(0.0 - leaked, leaked != 0.0);
    }
    let mass: f64 = p.iter().sum();
    Ok(report.finish().detail("final_total_mass", mass))
}

/// A random 10-response row with one masked response at probability zero.
pub fn ood_zero_instance(seed: u64) -> (Vec<f64>, Vec<f64>, Vec<bool>) {
    let rng = &mut seeded(seed);
    let n = 10;
    let mut probs = random_distribution(n, rng);
    let zero = rng.gen_range(0..n);
    probs[zero] = 0.0;
    let z: f64 = probs.iter().sum();
    probs.iter_mut().for_each(|p| *p /= z);
    let utility = (0..n).map(|_| rng.gen_range(0.1..3.0)).collect();
    let mut mask = vec![false; n];
    mask[zero] = true;
    (probs, utility, mask)
}

/// `sum_j w_j p_j E[p] - sum_j w_j p_j^2` (positive when the inequality holds).
pub fn ood_update_slack(probs: &[f64], utility: &[f64]) -> Option<f64> {
    let (w, _, _) = w_row(probs, utility);
    if w.iter().all(|v| v.abs() < 1e-12) {
        return None;
    }
    let ep = mean(probs);
    let wp: f64 = w.iter().zip(probs).map(|(w, p)| w * p).sum();
    let wp2: f64 = w.iter().zip(probs).map(|(w, p)| w * p * p).sum();
    Some(wp * ep - wp2)
}

pub const OOD_STRICT_TOL: f64 = 1e-12;

/// Independence-constructed tasks must satisfy the strict inequality.
/// Details report a rank-aligned negative control and the looser
/// random-permutation construction, neither of which is asserted.
pub fn check_ood_update(trials: usize, seed: u64) -> Result<OracleReport> {
    check_trials(trials)?;
    let outcomes = run_trials(trials, seed, |rng| {
        let (k, l) = (rng.gen_range(2..=6), rng.gen_range(2..=6));
        let (p, u) = product_row(k, l, rng);
        ood_update_slack(&p, &u).map_or(Trial::Skipped, Trial::Slack)
    });
    let control_n = trials.min(1000);
    let failures = |anti: Option<bool>, salt: u64| -> usize {
        (0..control_n as u64)
            .into_par_iter()
            .filter(|&t| {
                let rng = &mut seeded(derive_seed(seed ^ salt, t));
                let n = rng.gen_range(4..=30);
                let (p, u) = match anti {
                    Some(a) => rank_coupled_row(n, a, rng),
                    None => (
                        random_distribution(n, rng),
                        (0..n).map(|_| rng.gen_range(0.1..3.0)).collect(),
                    ),
                };
                ood_update_slack(&p, &u).is_some_and(|s| s <= OOD_STRICT_TOL)
            })
            .count()
    };
    Ok(
        tally("ood_update", &outcomes, Bound::Strict(OOD_STRICT_TOL))
            .detail("control_trials", control_n as f64)
            .detail(
                "aligned_control_failures",
                failures(Some(false), 0x5A5A) as f64,
            )
            .detail("random_permutation_failures", failures(None, 0x3C3C) as f64),
    )
}

// ---------------------------------------------------------------------------
// Distribution-shift extrema

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum ExtremumKind {
    Max,
    Min,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Extremum {
    /// Grid index; a plateau reports its midpoint.
    pub position: f64,
    pub value: f64,
    pub kind: ExtremumKind,
}

/// Interior local extrema by 3-point comparison. Consecutive values closer
/// than `rel_tol * max|v|` (floored at `rel_tol`) form one plateau.
pub fn interior_extrema(values: &[f64], rel_tol: f64) -> Vec<Extremum> {
    let scale = values.iter().fold(1.0f64, |m, v| m.max(v.abs()));
    let tol = rel_tol * scale;
    // runs of (start, end) with numerically equal values
    let mut runs: Vec<(usize, usize)> = Vec::new();
    for i in 0..values.len() {
        match runs.last_mut() {
            Some((_, end)) if (values[i] - values[*end]).abs() <= tol => *end = i,
            _ => runs.push((i, i)),
        }
    }
    let mut out = Vec::new();
    for r in 1..runs.len().saturating_sub(1) {
        let (s, e) = runs[r];
        let v = values[s];
        let (left, right) = (values[runs[r - 1].1], values[runs[r + 1].0]);
        let kind = if left < v && right < v {
            ExtremumKind::Max
        } else if left > v && right > v {
            ExtremumKind::Min
        } else {
            continue;
        };
        out.push(Extremum {
            position: (s + e) as f64 / 2.0,
            value: v,
            kind,
        });
    }
    out
}

/// Per-response DPO weight `w` and its probability-weighted counterpart
/// `w p` for a Gaussian scenario under uniform pair sampling.
pub fn scenario_curves(scenario: &GaussianScenario) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
    let probs = scenario.model_policy().probs(0);
    let (w, _, _) = w_row(&probs, &scenario.utilities());
    let wp = hadamard(&w, &probs);
    (probs, w, wp)
}

pub const EXTREMA_TOL: f64 = 1e-12;

/// Checks the extremum placement claims on one scenario.
///
/// Asserted: every interior extremum `y*` of `w` lies outside `[mu_p, mu_q]`;
/// each `y* > mu_q` has a `w p` extremum in `(mu_p, y*)`; each `y* < mu_p` has
/// a `w p` extremum in `(y*, mu_p)`. The last claim with `y* > mu_q` is also
/// evaluated literally and reported in the details only. Scenarios with
/// `mu_p > mu_q` are mirrored on the grid first.
pub fn check_distshift_extrema(scenario: &GaussianScenario) -> OracleReport {
    let mut sc = *scenario;
    let mirrored = sc.mu_p > sc.mu_q;
    if mirrored {
        let top = (sc.n_responses - 1) as f64;
        sc.mu_p = top - sc.mu_p;
        sc.mu_q = top - sc.mu_q;
    }
    let (_, w, wp) = scenario_curves(&sc);
    let ext_w = interior_extrema(&w, EXTREMA_TOL);
    let ext_wp = interior_extrema(&wp, EXTREMA_TOL);
    let name = format!("distshift(mu_p={}, mu_q={})", scenario.mu_p, scenario.mu_q);
    let mut report = OracleReport::new(&name);
    if ext_w.is_empty() {
        report.inconclusive = true;
        return report
            .finish()
            .detail("mirrored", f64::from(u8::from(mirrored)));
    }
    let (mp, mq) = (sc.mu_p, sc.mu_q);
    // depth of the best w p extremum inside (lo, hi); negative when none
    let inside = |lo: f64, hi: f64| {
        ext_wp
            .iter()
            .map(|e| (e.position - lo).min(hi - e.position))
            .fold(-1.0f64, f64::max)
    };
    let mut literal_third = 0usize;
    for e in &ext_w {
        let y = e.position;
        let outside = (y - mq).max(mp - y);
        report.observe(outside, outside <= 0.0);
        if y > mq {
            let depth = inside(mp, y);
            report.observe(depth, depth <= 0.0);
            literal_third += usize::from(inside(y, mp) > 0.0);
        } else if y < mp {
            let depth = inside(y, mp);
            report.observe(depth, depth <= 0.0);
        }
    }
    let mut report = report
        .finish()
        .detail("mirrored", f64::from(u8::from(mirrored)))
        .detail("literal_third_claim_satisfied", literal_third as f64);
    for e in &ext_w {
        report = report.detail("w_extremum", e.position);
    }
    for e in &ext_wp {
        report = report.detail("wp_extremum", e.position);
    }
    report
}

/// The three scenarios of the reference simulation: `sigma^2 = 100`,
/// responses `0..100`.
pub fn reference_scenarios() -> Vec<GaussianScenario> {
    [(45.0, 55.0), (30.0, 70.0), (48.0, 52.0)]
        .into_iter()
        .map(|(p, q)| GaussianScenario::new(p, q, 100.0, 100).expect("valid scenario"))
        .collect()
}

// ---------------------------------------------------------------------------
// Update identities

/// Random single-or-multi-prompt task with a random mask and random policy.
pub fn random_task<R: Rng>(rng: &mut R) -> (PreferenceTask, PolicyTable) {
    let s = rng.gen_range(1..=3);
    let m = rng.gen_range(3..=12);
    let utility: Vec<Vec<f64>> = (0..s)
        .map(|_| (0..m).map(|_| rng.gen_range(0.05..3.0)).collect())
        .collect();
    let mask: Vec<Vec<bool>> = (0..s)
        .map(|_| {
            let mut row: Vec<bool> = (0..m).map(|_| rng.gen_bool(0.2)).collect();
            row[0] = false;
            row[1] = false;
            row
        })
        .collect();
    let logits: Vec<Vec<f64>> = (0..s)
        .map(|_| (0..m).map(|_| rng.gen_range(-2.0..2.0)).collect())
        .collect();
    let task = PreferenceTask::from_utilities(utility, Some(mask)).expect("valid random task");
    (task, PolicyTable::new(logits).expect("finite logits"))
}

/// `max |w - (beta - alpha)|` over unmasked cells of a random task.
pub fn wi_simplify_residual<R: Rng>(rng: &mut R) -> f64 {
    let (task, policy) = random_task(rng);
    let w = epoch_weights(&policy, None, &expected_pair_dataset(&task), 1.0);
    let mut worst: f64 = 0.0;
    for x in 0..task.n_prompts() {
        let (alpha, beta) = alpha_beta_row(&policy.probs(x), task.utility_row(x), task.mask_row(x));
        for y in task.unmasked(x) {
            worst = worst.max((w[x][y] - (beta[y] - alpha[y])).abs());
        }
    }
    worst
}

pub const WI_TOL: f64 = 1e-9;

/// Epoch weights on the expected dataset against `beta - alpha`.
pub fn check_wi_simplify(trials: usize, seed: u64) -> Result<OracleReport> {
    check_trials(trials)?;
    let outcomes = run_trials(trials, seed, |rng| {
        Trial::Slack(WI_TOL - wi_simplify_residual(rng))
    });
    Ok(tally("wi_simplify", &outcomes, Bound::AtLeast(0.0)))
}

/// Relative sup-norm gap between the closed-form DPO probability update and
/// one literal full-batch gradient step of size `eta`, on one random
/// single-prompt task with `n` responses and a uniform reference.
pub fn prob_update_gap(policy: &PolicyTable, task: &PreferenceTask, eta: f64) -> Result<f64> {
    let m = task.n_responses();
    let reference = ReferencePolicy::uniform(1, m);
    let literal =
        one_step_gradient_oracle(policy, &reference, task, &LossSpec::of(LossKind::Dpo), eta)?;
    let w = epoch_weights(policy, Some(&reference), &expected_pair_dataset(task), 1.0);
    let params = DynamicsParams::tabular(eta);
    let closed = prob_update_dpo(&policy.probs(0), &w[0], params.gamma());
    let scale = closed.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    if scale == 0.0 {
        return Err(Error::Numeric(
            "closed-form update is identically zero".into(),
        ));
    }
    let gap = literal[0]
        .iter()
        .zip(&closed)
        .fold(0.0f64, |m, (a, b)| m.max((a - b).abs()));
    Ok(gap / scale)
}

pub fn random_single_prompt<R: Rng>(n: usize, rng: &mut R) -> (PreferenceTask, PolicyTable) {
    let utility = vec![(0..n).map(|_| rng.gen_range(0.05..3.0)).collect()];
    let logits = vec![(0..n).map(|_| rng.gen_range(-2.0..2.0)).collect()];
    (
        PreferenceTask::from_utilities(utility, None).expect("valid random task"),
        PolicyTable::new(logits).expect("finite logits"),
    )
}

pub const PROB_UPDATE_ETA: f64 = 1e-4;
pub const PROB_UPDATE_REL_TOL: f64 = 0.01;
pub const PROB_UPDATE_HALVING_RATIO: f64 = 0.6;

/// Closed-form update within 1% of the literal step at `eta = 1e-4`, with the
/// gap shrinking to at most 0.6x when `eta` halves.
pub fn check_prob_update(trials: usize, seed: u64) -> Result<OracleReport> {
    check_trials(trials)?;
    let results: Vec<Result<(f64, f64)>> = (0..trials as u64)
        .into_par_iter()
        .map(|t| {
            let (task, policy) = random_single_prompt(10, &mut seeded(derive_seed(seed, t)));
            Ok((
                prob_update_gap(&policy, &task, PROB_UPDATE_ETA)?,
                prob_update_gap(&policy, &task, PROB_UPDATE_ETA / 2.0)?,
            ))
        })
        .collect();
    let mut report = OracleReport::new("prob_update");
    let mut worst_gap: f64 = 0.0;
    let mut worst_ratio: f64 = 0.0;
    for r in results {
        let (g1, g2) = r?;
        let ratio = if g1 > 0.0 { g2 / g1 } else { 0.0 };
        worst_gap = worst_gap.max(g1);
        worst_ratio = worst_ratio.max(ratio);
        let margin = (PROB_UPDATE_REL_TOL - g1).min(PROB_UPDATE_HALVING_RATIO - ratio);
        report.observe(margin, margin < 0.0);
    }
    Ok(report
        .finish()
        .detail("max_relative_gap", worst_gap)
        .detail("max_halving_ratio", worst_ratio))
}

// ---------------------------------------------------------------------------
// Suites

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Suite {
    All,
    Fym,
    Fym2,
    Variance,
    Dataquality,
    Distshift,
    Ood,
    Probupdate,
}

impl Suite {
    pub const NAMES: [&'static str; 8] = [
        "all",
        "fym",
        "fym2",
        "variance",
        "dataquality",
        "distshift",
        "ood",
        "probupdate",
    ];
}

impl FromStr for Suite {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        Ok(match s {
            "all" => Self::All,
            "fym" => Self::Fym,
            "fym2" => Self::Fym2,
            "variance" => Self::Variance,
            "dataquality" => Self::Dataquality,
            "distshift" => Self::Distshift,
            "ood" => Self::Ood,
            "probupdate" => Self::Probupdate,
            other => {
                return param(format!(
                    "unknown suite {other:?}; valid: {}",
                    Self::NAMES.join(" | ")
                ))
            }
        })
    }
}

/// Perturbation scale used by the suite runner.
pub const DATAQUALITY_SCALE: f64 = 0.01;
pub const OOD_ZERO_EPOCHS: usize = 100;
pub const OOD_ZERO_GAMMA: f64 = 0.01;

/// Runs one suite (or all of them) with `trials` per randomized check.
pub fn run_suite(suite: Suite, trials: usize, seed: u64) -> Result<Vec<OracleReport>> {
    check_trials(trials)?;
    let s = |k: u64| derive_seed(seed, 1_000_000 + k);
    let mut out = Vec::new();
    let all = suite == Suite::All;
    if all || suite == Suite::Fym {
        out.push(mc_check_fym(trials, s(1))?);
    }
    if all || suite == Suite::Fym2 {
        out.push(mc_check_fym2(trials, s(2))?);
    }
    if all || suite == Suite::Variance {
        out.push(check_variance_bound(trials, s(3))?);
    }
    if all || suite == Suite::Dataquality {
        out.push(check_dataquality(DATAQUALITY_SCALE, trials, s(4))?);
    }
    if all || suite == Suite::Distshift {
        out.extend(reference_scenarios().iter().map(check_distshift_extrema));
    }
    if all || suite == Suite::Ood {
        let (p, u, mask) = ood_zero_instance(s(5));
        for rule in [UpdateRule::Dpo, UpdateRule::Balanced] {
            let mut r = check_ood_zero(&p, &u, &mask, OOD_ZERO_GAMMA, OOD_ZERO_EPOCHS, rule)?;
            r.name = format!("ood_zero({rule:?})").to_lowercase();
            out.push(r);
        }
        out.push(check_ood_update(trials, s(6))?);
    }
    if all || suite == Suite::Probupdate {
        out.push(check_wi_simplify(trials, s(7))?);
        out.push(check_prob_update(trials, s(8))?);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn close(a: f64, b: f64, tol: f64) -> bool {
        (a - b).abs() <= tol
    }

    #[test]
    fn fym_identity_on_unit_interval() {
        let k = 4001;
        let xs: Vec<f64> = (0..k).map(|i| i as f64 / (k - 1) as f64).collect();
        let prob = vec![1.0 / k as f64; k];
        let var_x2 = weighted_variance(&hadamard(&xs, &xs), &prob);
        let rhs = weighted_variance(&xs, &prob) * weighted_mean(&hadamard(&xs, &xs), &prob);
        assert!(close(var_x2, 4.0 / 45.0, 1e-3));
        assert!(close(rhs, 1.0 / 36.0, 1e-3));
        assert!(fym_slack(&prob, &xs, &xs) > 0.0);
    }

    #[test]
    fn fym_equality_for_constant_g() {
        let prob = [0.2, 0.5, 0.3];
        let f = [0.1, 0.4, 2.0];
        assert!(fym_slack(&prob, &f, &[1.7; 3]).abs() < 1e-14);
    }

    #[test]
    fn fym2_examples() {
        let prob = [0.5, 0.5];
        let x = [0.0, 1.0];
        let cov = weighted_covariance(&hadamard(&x, &x), &x, &prob);
        assert!(close(cov, 0.25, 1e-15));
        assert!(close(fym2_slack(&prob, &x, &x), 0.25 - 0.125, 1e-15));
        let g = [0.3, 0.9, 1.4];
        assert!(fym2_slack(&[0.3, 0.3, 0.4], &[2.5; 3], &g).abs() < 1e-14);
    }

    #[test]
    fn fym_reports_are_deterministic_and_clean() {
        let a = mc_check_fym(500, 3).unwrap();
        assert_eq!(a, mc_check_fym(500, 3).unwrap());
        assert!(a.passed && a.violations == 0 && a.trials == 500);
        assert!(mc_check_fym2(500, 4).unwrap().passed);
        assert!(mc_check_fym(0, 1).is_err());
    }

    #[test]
    fn variance_bound_with_matched_policy() {
        // p proportional to u: w vanishes and the bound is the covariance term
        let u = [0.5, 1.0, 2.0, 4.0];
        let z: f64 = u.iter().sum();
        let p: Vec<f64> = u.iter().map(|v| v / z).collect();
        let (w, alpha, beta) = w_row(&p, &u);
        assert!(w.iter().all(|v| v.abs() < 1e-12));
        let p2 = mean(&hadamard(&p, &p));
        let expected = -2.0
            * (covariance(&alpha, &beta) * p2
                - covariance(&hadamard(&alpha, &p), &hadamard(&beta, &p)));
        assert!(close(variance_bound_slack(&p, &u), expected, 1e-15));
        assert!(expected >= -VARIANCE_TOL);
    }

    #[test]
    fn anti_monotone_tasks_fail_precondition() {
        let mut rng = seeded(11);
        for _ in 0..50 {
            let (p, u) = rank_coupled_row(6, true, &mut rng);
            let (_, beta) = alpha_beta_row(&p, &u, &[false; 6]);
            assert!(!beta_monotone_in_p(&p, &beta));
        }
    }

    #[test]
    fn variance_check_passes() {
        let r = check_variance_bound(300, 5).unwrap();
        assert!(r.passed, "{r}");
        assert_eq!(r.skipped, 0);
        assert_eq!(
            r.get("control_excluded_by_precondition"),
            r.get("control_trials")
        );
    }

    #[test]
    fn dataquality_zero_noise_and_full_subset() {
        let p = [0.1, 0.2, 0.3, 0.4];
        let u = [1.0, 0.7, 1.5, 1.9];
        let all = [0, 1, 2, 3];
        assert_eq!(dataquality_slack(&p, &u, &[0.0; 4], &all).unwrap(), 0.0);
        assert!(dataquality_slack(&p, &u, &[0.01, -0.02, 0.0, 0.005], &all).is_ok());
        // subset of the two least likely responses has too little mass
        assert!(matches!(
            dataquality_slack(&p, &u, &[0.0; 4], &[0, 1]),
            Err(Error::Parameter(_))
        ));
    }

    #[test]
    fn dataquality_check_passes() {
        let r = check_dataquality(0.01, 200, 9).unwrap();
        assert!(r.passed, "{r}");
        assert!(check_dataquality(0.5, 10, 9).is_err());
    }

    #[test]
    fn ood_zero_stays_zero() {
        let (p, u, mask) = ood_zero_instance(2);
        for rule in [UpdateRule::Dpo, UpdateRule::Balanced] {
            let r = check_ood_zero(&p, &u, &mask, 0.01, 100, rule).unwrap();
            assert!(r.passed && r.trials == 100);
            assert_eq!(r.worst_margin, Some(0.0));
            assert!(close(r.get("final_total_mass").unwrap(), 1.0, 1e-12));
        }
    }

    #[test]
    fn ood_zero_single_survivor() {
        let p = [0.0, 1.0, 0.0];
        let mask = [true, false, true];
        let r = check_ood_zero(&p, &[1.0, 2.0, 3.0], &mask, 0.1, 100, UpdateRule::Dpo).unwrap();
        assert!(r.passed);
        let mut q = p.to_vec();
        for _ in 0..100 {
            q = closed_form_step(&q, &[1.0, 2.0, 3.0], &mask, 0.1, UpdateRule::Dpo);
        }
        assert_eq!(q, vec![0.0, 1.0, 0.0]);
    }

    #[test]
    fn ood_zero_rejects_bad_preconditions() {
        assert!(check_ood_zero(
            &[0.5, 0.5],
            &[1.0, 1.0],
            &[false, false],
            0.1,
            5,
            UpdateRule::Dpo
        )
        .is_err());
        assert!(check_ood_zero(
            &[0.0, 1.0],
            &[1.0, 1.0],
            &[false, false],
            0.1,
            5,
            UpdateRule::Dpo
        )
        .is_err());
    }

    #[test]
    fn product_rows_are_independent() {
        let (p, u) = product_row(3, 4, &mut seeded(1));
        let (w, alpha, beta) = w_row(&p, &u);
        assert_eq!(w.len(), 12);
        // alpha depends only on the first coordinate, beta only on the second
        for a in 0..3 {
            for b in 1..4 {
                assert!(close(alpha[a * 4 + b], alpha[a * 4], 1e-12));
            }
        }
        for b in 0..4 {
            for a in 1..3 {
                assert!(close(beta[a * 4 + b], beta[b], 1e-12));
            }
        }
        assert!(covariance(&alpha, &beta).abs() < 1e-12);
    }

    #[test]
    fn ood_update_degenerate_is_skipped() {
        let u = [1.0, 2.0, 3.0];
        let p: Vec<f64> = u.iter().map(|v| v / 6.0).collect();
        assert_eq!(ood_update_slack(&p, &u), None);
    }

    #[test]
    fn ood_update_check_passes() {
        let r = check_ood_update(300, 8).unwrap();
        assert!(r.passed, "{r}");
    }

    #[test]
    fn extrema_with_plateau() {
        let v = [0.0, 1.0, 2.0, 2.0, 2.0, 1.0, 3.0, 4.0];
        let e = interior_extrema(&v, 1e-12);
        assert_eq!(e.len(), 2);
        assert_eq!((e[0].position, e[0].kind), (3.0, ExtremumKind::Max));
        assert_eq!((e[1].position, e[1].kind), (5.0, ExtremumKind::Min));
        assert!(interior_extrema(&[1.0, 2.0, 3.0], 1e-12).is_empty());
        assert!(interior_extrema(&[1.0; 5], 1e-12).is_empty());
    }

    #[test]
    fn reference_scenario_extrema_locations() {
        let sc = GaussianScenario::new(45.0, 55.0, 100.0, 100).unwrap();
        let (_, w, wp) = scenario_curves(&sc);
        let ew: Vec<f64> = interior_extrema(&w, EXTREMA_TOL)
            .iter()
            .map(|e| e.position)
            .collect();
        let ewp: Vec<f64> = interior_extrema(&wp, EXTREMA_TOL)
            .iter()
            .map(|e| e.position)
            .collect();
        assert_eq!(ew, vec![24.0, 76.0]);
        assert_eq!(ewp, vec![37.0, 58.0]);
    }

    #[test]
    fn distshift_reference_rows_pass() {
        for sc in reference_scenarios() {
            let r = check_distshift_extrema(&sc);
            assert!(r.passed && !r.inconclusive, "{r}");
            assert_eq!(r.get("literal_third_claim_satisfied"), Some(0.0));
        }
    }

    #[test]
    fn distshift_mirrors_and_fixed_point() {
        let sc = GaussianScenario::new(55.0, 45.0, 100.0, 100).unwrap();
        let r = check_distshift_extrema(&sc);
        assert!(r.passed && r.get("mirrored") == Some(1.0));
        let same = GaussianScenario::new(50.0, 50.0, 100.0, 100).unwrap();
        let r = check_distshift_extrema(&same);
        assert!(r.passed && r.inconclusive);
    }

    #[test]
    fn update_identities_hold() {
        assert!(check_wi_simplify(50, 1).unwrap().passed);
        let r = check_prob_update(20, 2).unwrap();
        assert!(r.passed, "{r}");
        assert!(r.get("max_halving_ratio").unwrap() > 0.3);
    }

    #[test]
    fn suite_names_parse() {
        for name in Suite::NAMES {
            assert!(name.parse::<Suite>().is_ok());
        }
        assert!("nope".parse::<Suite>().is_err());
        assert!(run_suite(Suite::Fym, 0, 1).is_err());
    }

    #[test]
    fn report_serializes() {
        let r = mc_check_fym(5, 1).unwrap();
        let s = serde_json::to_string(&r).unwrap();
        let back: OracleReport = serde_json::from_str(&s).unwrap();
        assert_eq!(back, r);
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        proptest! {
            #[test]
            fn increasing_generator_is_valid(seed in any::<u64>(), k in 1usize..40) {
                let v = random_increasing(k, &mut seeded(seed));
                prop_assert_eq!(v.len(), k);
                prop_assert!(v.iter().all(|x| *x > 0.0));
                prop_assert!(v.windows(2).all(|w| w[1] >= w[0]));
            }

            #[test]
            fn rank_aligned_rows_meet_precondition(seed in any::<u64>(), n in 2usize..25) {
                let (p, u) = rank_coupled_row(n, false, &mut seeded(seed));
                let (_, beta) = alpha_beta_row(&p, &u, &vec![false; n]);
                prop_assert!(beta_monotone_in_p(&p, &beta));
                prop_assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-12);
            }
        }
    }
}
