//! Closed-form per-epoch update theory for the tabular policy.
//!
//! For a pair `(i, j, tau)` with `kappa = e^{-L}`, DPO moves logit `i` by
//! `gamma tau (1 - kappa)` and logit `j` by the negative of that. Summed over
//! an epoch this gives the weights `w_i`, which on the full expected dataset
//! reduce to `beta_i - alpha_i`. The probability updates follow from the
//! softmax Jacobian.

use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::error::{param, Result};
use crate::losses::{dpo_loss, LossSpec, PairInput};
use crate::policy::{softmax, PolicyTable, ReferencePolicy};
use crate::task::{expected_pair_dataset, PairSample, PreferenceTask, WeightedPair};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DynamicsParams {
    pub eta: f64,
    /// Per-logit parameter-gradient norm; exactly 1 for the tabular policy.
    pub g: f64,
    /// Mean negative correlation `-E[c_ij]` between logit gradients.
    pub lambda_corr: f64,
}

impl Default for DynamicsParams {
    fn default() -> Self {
        Self {
            eta: 1.0,
            g: 1.0,
            lambda_corr: 0.0,
        }
    }
}

impl DynamicsParams {
    pub fn new(eta: f64, g: f64, lambda_corr: f64) -> Result<Self> {
        if !(eta >= 0.0 && eta.is_finite()) {
            return param(format!("eta must be >= 0, got {eta}"));
        }
        if !(g > 0.0 && g.is_finite()) {
            return param(format!("g must be positive, got {g}"));
        }
        if !(0.0..1.0).contains(&lambda_corr) {
            return param(format!("lambda_corr must lie in [0, 1), got {lambda_corr}"));
        }
        Ok(Self {
            eta,
            g,
            lambda_corr,
        })
    }

    pub fn tabular(eta: f64) -> Self {
        Self {
            eta,
            ..Self::default()
        }
    }

    pub fn gamma(&self) -> f64 {
        self.eta * self.g * self.g
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum UpdateRule {
    Dpo,
    Balanced,
}

/// Per-sample logit changes `(delta s_{y1}, delta s_{y2})`.
///
/// The balanced rule uses the factor `1 - p_self + p_other` with unit
/// constant; with `lambda_corr > 0` the correlation corrections are applied
/// (DPO scaled by `1 - lambda`, balanced shifted by
/// `lambda (p_i - p_i^2 + p_i p_j - 2 p_j)`).
pub fn delta_logit(
    sample: &PairSample,
    kappa: f64,
    p_y1: f64,
    p_y2: f64,
    params: &DynamicsParams,
    rule: UpdateRule,
) -> (f64, f64) {
    let base = params.gamma() * f64::from(sample.tau) * (1.0 - kappa);
    let lam = params.lambda_corr;
    match rule {
        UpdateRule::Dpo => (base * (1.0 - lam), -base * (1.0 - lam)),
        UpdateRule::Balanced => {
            let factor =
                |pi: f64, pj: f64| 1.0 - pi + pj + lam * (pi - pi * pi + pi * pj - 2.0 * pj);
            (base * factor(p_y1, p_y2), -base * factor(p_y2, p_y1))
        }
    }
}

/// `w[x][i]`: sum of `tau (1 - kappa)` over the pairs containing `i`, where
/// `kappa` is DPO's at the current policy (uniform reference when `None`).
pub fn epoch_weights(
    policy: &PolicyTable,
    reference: Option<&ReferencePolicy>,
    dataset: &[WeightedPair],
    beta: f64,
) -> Vec<Vec<f64>> {
    let (s, m) = (policy.n_prompts(), policy.n_responses());
    let logp: Vec<Vec<f64>> = (0..s).map(|x| policy.log_probs(x)).collect();
    let ref_logp: Vec<Vec<f64>> = (0..s)
        .map(|x| reference.map_or_else(|| vec![0.0; m], |r| r.log_probs(x)))
        .collect();
    let mut w = vec![vec![0.0; m]; s];
    for pair in dataset {
        let input =
            PairInput::from_tables(&logp[pair.x], &ref_logp[pair.x], pair.winner, pair.loser);
        let k = dpo_loss(input.lr_w(), input.lr_l(), beta).kappa;
        let v = pair.weight * (1.0 - k);
        w[pair.x][pair.winner] += v;
        w[pair.x][pair.loser] -= v;
    }
    w
}

/// `alpha_i = sum_j p_i/(p_i+p_j)` and `beta_i = sum_j u_i/(u_i+u_j)` over
/// unmasked `j != i`; masked responses get zero for both.
pub fn alpha_beta_row(probs: &[f64], utility: &[f64], mask: &[bool]) -> (Vec<f64>, Vec<f64>) {
    let m = probs.len();
    let mut alpha = vec![0.0; m];
    let mut beta = vec![0.0; m];
    for i in (0..m).filter(|&i| !mask[i]) {
        for j in (0..m).filter(|&j| j != i && !mask[j]) {
            let denom = probs[i] + probs[j];
            if denom > 0.0 {
                alpha[i] += probs[i] / denom;
            }
            beta[i] += utility[i] / (utility[i] + utility[j]);
        }
    }
    (alpha, beta)
}

pub fn alpha_beta(policy: &PolicyTable, task: &PreferenceTask) -> (Vec<Vec<f64>>, Vec<Vec<f64>>) {
    (0..task.n_prompts())
        .map(|x| alpha_beta_row(&policy.probs(x), task.utility_row(x), task.mask_row(x)))
        .unzip()
}

/// `gamma p_i (w_i - sum_j w_j p_j)`.
pub fn prob_update_dpo(probs: &[f64], w: &[f64], gamma: f64) -> Vec<f64> {
    let mean: f64 = w.iter().zip(probs).map(|(w, p)| w * p).sum();
    probs
        .iter()
        .zip(w)
        .map(|(p, wi)| gamma * p * (wi - mean))
        .collect()
}

/// `gamma p_i (w_i p_i - sum_j w_j p_j^2)`; valid when every `p_i` is small.
pub fn prob_update_balanced(probs: &[f64], w: &[f64], gamma: f64) -> Vec<f64> {
    let mean: f64 = w.iter().zip(probs).map(|(w, p)| w * p * p).sum();
    probs
        .iter()
        .zip(w)
        .map(|(p, wi)| gamma * p * (wi * p - mean))
        .collect()
}

/// One prompt's closed-form epoch quantities.
#[derive(Debug, Clone, PartialEq)]
pub struct EpochDynamics {
    pub probs: Vec<f64>,
    pub w: Vec<f64>,
    pub alpha: Vec<f64>,
    pub beta_vec: Vec<f64>,
    pub dp_dpo: Vec<f64>,
    pub dp_balanced: Vec<f64>,
    /// Largest probability; the balanced branch assumes this is small.
    pub max_p: f64,
}

/// Closed-form dynamics of every prompt on the expected dataset (uniform
/// reference, `beta = 1`).
pub fn epoch_dynamics(
    policy: &PolicyTable,
    task: &PreferenceTask,
    params: &DynamicsParams,
) -> Vec<EpochDynamics> {
    let data = expected_pair_dataset(task);
    let w = epoch_weights(policy, None, &data, 1.0);
    let (alpha, beta) = alpha_beta(policy, task);
    (0..task.n_prompts())
        .map(|x| {
            let probs = policy.probs(x);
            let max_p = probs.iter().copied().fold(0.0, f64::max);
            EpochDynamics {
                dp_dpo: prob_update_dpo(&probs, &w[x], params.gamma()),
                dp_balanced: prob_update_balanced(&probs, &w[x], params.gamma()),
                probs,
                w: w[x].clone(),
                alpha: alpha[x].clone(),
                beta_vec: beta[x].clone(),
                max_p,
            }
        })
        .collect()
}

/// CSV with columns `y, p, u, alpha, beta, w, dp_dpo, dp_balanced`.
pub fn write_dynamics_csv<W: Write>(
    out: W,
    dynamics: &EpochDynamics,
    utility: &[f64],
    labels: &[f64],
) -> Result<()> {
    let mut wtr = csv::Writer::from_writer(out);
    wtr.write_record(["y", "p", "u", "alpha", "beta", "w", "dp_dpo", "dp_balanced"])?;
    for i in 0..dynamics.probs.len() {
        wtr.write_record(
            [
                labels[i],
                dynamics.probs[i],
                utility[i],
                dynamics.alpha[i],
                dynamics.beta_vec[i],
                dynamics.w[i],
                dynamics.dp_dpo[i],
                dynamics.dp_balanced[i],
            ]
            .iter()
            .map(|v| format!("{v:?}")),
        )?;
    }
    wtr.flush()?;
    Ok(())
}

/// One step of the exact-probability dynamics layer, where responses may
/// carry probability exactly zero. `w = beta - alpha` over unmasked responses.
pub fn closed_form_step(
    probs: &[f64],
    utility: &[f64],
    mask: &[bool],
    gamma: f64,
    rule: UpdateRule,
) -> Vec<f64> {
    let (alpha, beta) = alpha_beta_row(probs, utility, mask);
    let w: Vec<f64> = beta.iter().zip(&alpha).map(|(b, a)| b - a).collect();
    let dp = match rule {
        UpdateRule::Dpo => prob_update_dpo(probs, &w, gamma),
        UpdateRule::Balanced => prob_update_balanced(probs, &w, gamma),
    };
    probs.iter().zip(dp).map(|(p, d)| p + d).collect()
}

/// Gradient of the weighted loss sum over `dataset` with respect to every
/// logit, plus dataset-mean probability gradients of winner and loser.
#[derive(Debug, Clone, PartialEq)]
pub struct LogitGradient {
    pub grad: Vec<Vec<f64>>,
    pub mean_loss: f64,
    pub g_w: f64,
    pub g_l: f64,
    pub total_weight: f64,
}

pub fn logit_gradient(
    policy: &PolicyTable,
    reference: &ReferencePolicy,
    dataset: &[WeightedPair],
    spec: &LossSpec,
) -> Result<LogitGradient> {
    let (s, m) = (policy.n_prompts(), policy.n_responses());
    let logp: Vec<Vec<f64>> = (0..s).map(|x| policy.log_probs(x)).collect();
    let ref_logp: Vec<Vec<f64>> = (0..s).map(|x| reference.log_probs(x)).collect();
    // d(sum L)/d(log p) per prompt, then chained through the softmax
    let mut dlogp = vec![vec![0.0; m]; s];
    let (mut loss, mut gw, mut gl, mut total) = (0.0, 0.0, 0.0, 0.0);
    for pair in dataset {
        if pair.weight == 0.0 {
            continue;
        }
        let input =
            PairInput::from_tables(&logp[pair.x], &ref_logp[pair.x], pair.winner, pair.loser);
        let e = spec.evaluate(&input)?;
        if !e.value.is_finite() {
            return Err(crate::error::Error::Numeric(format!(
                "non-finite loss at prompt {} pair ({}, {})",
                pair.x, pair.winner, pair.loser
            )));
        }
        dlogp[pair.x][pair.winner] += pair.weight * e.grad_w;
        dlogp[pair.x][pair.loser] += pair.weight * e.grad_l;
        let (pw, pl) = e.prob_grads(input.pi_w(), input.pi_l());
        loss += pair.weight * e.value;
        gw += pair.weight * pw;
        gl += pair.weight * pl;
        total += pair.weight;
    }
    let grad = dlogp
        .iter()
        .enumerate()
        .map(|(x, d)| {
            let p = softmax(policy.logits(x));
            let sum: f64 = d.iter().sum();
            d.iter().zip(&p).map(|(dk, pk)| dk - pk * sum).collect()
        })
        .collect();
    let norm = if total > 0.0 { total } else { 1.0 };
    Ok(LogitGradient {
        grad,
        mean_loss: loss / norm,
        g_w: gw / norm,
        g_l: gl / norm,
        total_weight: total,
    })
}

/// Literal full-batch gradient step on the expected dataset; returns the
/// realized probability change per prompt.
pub fn one_step_gradient_oracle(
    policy: &PolicyTable,
    reference: &ReferencePolicy,
    task: &PreferenceTask,
    spec: &LossSpec,
    eta: f64,
) -> Result<Vec<Vec<f64>>> {
    let data = expected_pair_dataset(task);
    let lg = logit_gradient(policy, reference, &data, spec)?;
    let mut next = policy.clone();
    let step: Vec<Vec<f64>> = lg
        .grad
        .iter()
        .map(|row| row.iter().map(|g| -eta * g).collect())
        .collect();
    next.apply_update(&step)?;
    Ok((0..policy.n_prompts())
        .map(|x| {
            let before = softmax(policy.logits(x));
            let after = softmax(next.logits(x));
            after.iter().zip(&before).map(|(a, b)| a - b).collect()
        })
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::losses::LossKind;
    use crate::rng::seeded;
    use crate::task::{sample_pairs, SamplingScheme};
    use rand::Rng;

    fn random_task_and_policy(m: usize, seed: u64) -> (PreferenceTask, PolicyTable) {
        let mut rng = seeded(seed);
        let u: Vec<f64> = (0..m).map(|_| rng.gen_range(0.05..3.0)).collect();
        let s: Vec<f64> = (0..m).map(|_| rng.gen_range(-2.0..2.0)).collect();
        (
            PreferenceTask::from_utilities(vec![u], None).unwrap(),
            PolicyTable::new(vec![s]).unwrap(),
        )
    }

    #[test]
    fn fully_learned_pair_does_not_move() {
        let s = PairSample {
            x: 0,
            y1: 0,
            y2: 1,
            tau: 1,
        };
        let d = delta_logit(
            &s,
            1.0,
            0.3,
            0.2,
            &DynamicsParams::tabular(0.1),
            UpdateRule::Dpo,
        );
        assert_eq!(d, (0.0, -0.0));
    }

    #[test]
    fn dpo_delta_example() {
        let s = PairSample {
            x: 0,
            y1: 0,
            y2: 1,
            tau: 1,
        };
        let (a, b) = delta_logit(
            &s,
            0.5,
            0.3,
            0.2,
            &DynamicsParams::tabular(0.1),
            UpdateRule::Dpo,
        );
        assert!((a - 0.05).abs() < 1e-15 && (b + 0.05).abs() < 1e-15);
    }

    #[test]
    fn balanced_delta_equal_probs_matches_dpo() {
        let s = PairSample {
            x: 0,
            y1: 0,
            y2: 1,
            tau: -1,
        };
        let p = DynamicsParams::tabular(0.1);
        let d = delta_logit(&s, 0.3, 0.2, 0.2, &p, UpdateRule::Dpo);
        let b = delta_logit(&s, 0.3, 0.2, 0.2, &p, UpdateRule::Balanced);
        assert!((d.0 - b.0).abs() < 1e-15 && (d.1 - b.1).abs() < 1e-15);
    }

    #[test]
    fn correlation_shrinks_dpo_winner_by_one_minus_lambda() {
        let s = PairSample {
            x: 0,
            y1: 0,
            y2: 1,
            tau: 1,
        };
        let plain = delta_logit(
            &s,
            0.4,
            0.3,
            0.2,
            &DynamicsParams::tabular(0.2),
            UpdateRule::Dpo,
        );
        let corr = delta_logit(
            &s,
            0.4,
            0.3,
            0.2,
            &DynamicsParams::new(0.2, 1.0, 0.25).unwrap(),
            UpdateRule::Dpo,
        );
        assert!((corr.0 - 0.75 * plain.0).abs() < 1e-15);
        assert!((corr.1 - 0.75 * plain.1).abs() < 1e-15);
    }

    #[test]
    fn correlation_term_balanced() {
        let s = PairSample {
            x: 0,
            y1: 0,
            y2: 1,
            tau: 1,
        };
        let (pi, pj, lam) = (0.3, 0.2, 0.25);
        let d = delta_logit(
            &s,
            0.4,
            pi,
            pj,
            &DynamicsParams::new(1.0, 1.0, lam).unwrap(),
            UpdateRule::Balanced,
        );
        let expect = 0.6 * (1.0 - pi + pj + lam * (pi - pi * pi + pi * pj - 2.0 * pj));
        assert!((d.0 - expect).abs() < 1e-15);
    }

    #[test]
    fn params_validation() {
        assert!(DynamicsParams::new(0.1, 1.0, 1.0).is_err());
        assert!(DynamicsParams::new(-0.1, 1.0, 0.0).is_err());
        let p = DynamicsParams::new(0.3, 2.0, 0.0).unwrap();
        assert!((p.gamma() - 1.2).abs() < 1e-15);
    }

    #[test]
    fn two_response_weight_example() {
        let t = PreferenceTask::from_utilities(vec![vec![1.0, std::f64::consts::E]], None).unwrap();
        let pol = PolicyTable::uniform(1, 2);
        let w = epoch_weights(&pol, None, &expected_pair_dataset(&t), 1.0);
        let expected = 1.0 / (1.0 + std::f64::consts::E) - 0.5;
        assert!((w[0][0] - expected).abs() < 1e-15);
        assert!((w[0][0] + 0.2311).abs() < 1e-4);
        assert!((w[0][1] + w[0][0]).abs() < 1e-15);
    }

    #[test]
    fn uniform_alpha_is_half_m_minus_one() {
        let t = PreferenceTask::toy(1, 7, 0.6).unwrap();
        let (a, _) = alpha_beta(&PolicyTable::uniform(1, 7), &t);
        assert!(a[0].iter().all(|&v| (v - 3.0).abs() < 1e-15));
    }

    #[test]
    fn policy_matching_utility_is_fixed_point() {
        let t = PreferenceTask::toy(2, 9, 0.6).unwrap();
        let logits = (0..2)
            .map(|x| t.utility_row(x).iter().map(|u| u.ln()).collect())
            .collect();
        let pol = PolicyTable::new(logits).unwrap();
        let w = epoch_weights(&pol, None, &expected_pair_dataset(&t), 1.0);
        let (a, b) = alpha_beta(&pol, &t);
        for x in 0..2 {
            for i in 0..9 {
                assert!(w[x][i].abs() < 1e-12);
                assert!((a[x][i] - b[x][i]).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn weights_equal_beta_minus_alpha_with_mask() {
        let t = PreferenceTask::toy(4, 8, 0.6)
            .unwrap()
            .apply_mask(0.3, &mut seeded(2))
            .unwrap();
        let mut rng = seeded(3);
        let logits = (0..4)
            .map(|_| (0..8).map(|_| rng.gen_range(-2.0..2.0)).collect())
            .collect();
        let pol = PolicyTable::new(logits).unwrap();
        let w = epoch_weights(&pol, None, &expected_pair_dataset(&t), 1.0);
        let (a, b) = alpha_beta(&pol, &t);
        for x in 0..4 {
            for i in 0..8 {
                assert!((w[x][i] - (b[x][i] - a[x][i])).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn sampled_weights_converge_to_expected() {
        let (t, pol) = random_task_and_policy(5, 8);
        let n = 100_000;
        let samples = sample_pairs(&t, SamplingScheme::Uniform, n, &mut seeded(9)).unwrap();
        // each unordered pair appears n / C(5,2) times in expectation
        let scale = 10.0 / n as f64;
        let data: Vec<WeightedPair> = samples
            .into_iter()
            .map(|s| WeightedPair {
                weight: scale,
                ..s.into()
            })
            .collect();
        let ws = epoch_weights(&pol, None, &data, 1.0);
        let we = epoch_weights(&pol, None, &expected_pair_dataset(&t), 1.0);
        for i in 0..5 {
            assert!(
                (ws[0][i] - we[0][i]).abs() < 0.02,
                "{} vs {}",
                ws[0][i],
                we[0][i]
            );
        }
    }

    #[test]
    fn prob_update_examples() {
        assert!(prob_update_dpo(&[0.2, 0.5, 0.3], &[1.7; 3], 0.3)
            .iter()
            .all(|v| v.abs() < 1e-15));
        let d = prob_update_dpo(&[0.5, 0.5], &[1.0, -1.0], 0.1);
        assert!((d[0] - 0.05).abs() < 1e-15 && (d[1] + 0.05).abs() < 1e-15);
        // balanced with constant w: gamma p_i w (p_i - sum p^2)
        let p = [0.2, 0.5, 0.3];
        let b = prob_update_balanced(&p, &[2.0; 3], 0.1);
        let sq: f64 = p.iter().map(|v| v * v).sum();
        for i in 0..3 {
            assert!((b[i] - 0.1 * p[i] * 2.0 * (p[i] - sq)).abs() < 1e-15);
        }
        assert!(b.iter().any(|v| v.abs() > 1e-3));
        let z = prob_update_balanced(&[0.0, 0.4, 0.6], &[3.0, -1.0, 0.5], 0.5);
        assert_eq!(z[0], 0.0);
        let z = prob_update_dpo(&[0.0, 0.4, 0.6], &[3.0, -1.0, 0.5], 0.5);
        assert_eq!(z[0], 0.0);
    }

    #[test]
    fn dpo_gradient_step_matches_closed_form() {
        let (t, pol) = random_task_and_policy(10, 4);
        let eta = 1e-4;
        let spec = LossSpec::of(LossKind::Dpo);
        let reference = ReferencePolicy::uniform(1, 10);
        let realized = one_step_gradient_oracle(&pol, &reference, &t, &spec, eta).unwrap();
        let w = epoch_weights(&pol, None, &expected_pair_dataset(&t), 1.0);
        let predicted = prob_update_dpo(&pol.probs(0), &w[0], eta);
        let err: f64 = realized[0]
            .iter()
            .zip(&predicted)
            .map(|(a, b)| (a - b).powi(2))
            .sum::<f64>()
            .sqrt();
        let norm: f64 = predicted.iter().map(|v| v * v).sum::<f64>().sqrt();
        assert!(err / norm < 0.01);
    }

    #[test]
    fn dpo_logit_step_is_eta_w() {
        // the chain rule through log-probs collapses to +/- (1 - kappa) on the pair
        let (t, pol) = random_task_and_policy(6, 12);
        let reference = ReferencePolicy::uniform(1, 6);
        let data = expected_pair_dataset(&t);
        let lg = logit_gradient(&pol, &reference, &data, &LossSpec::of(LossKind::Dpo)).unwrap();
        let w = epoch_weights(&pol, None, &data, 1.0);
        for i in 0..6 {
            assert!((lg.grad[0][i] + w[0][i]).abs() < 1e-12);
        }
    }

    #[test]
    fn balanced_reference_logit_step_has_probability_factor() {
        // per pair (i, j): d s_i = (1 - kappa) p_i (1 - p_i + p_j), other logits O(p^2)
        let pol = PolicyTable::new(vec![vec![0.3, -0.4, 0.1]]).unwrap();
        let reference = ReferencePolicy::uniform(1, 3);
        let pair = WeightedPair {
            x: 0,
            winner: 0,
            loser: 1,
            weight: 1.0,
        };
        let lg = logit_gradient(
            &pol,
            &reference,
            &[pair],
            &LossSpec::of(LossKind::BalancedReference),
        )
        .unwrap();
        let p = pol.probs(0);
        let input = PairInput::from_tables(&pol.log_probs(0), &reference.log_probs(0), 0, 1);
        let k = dpo_loss(input.lr_w(), input.lr_l(), 1.0).kappa;
        let s = PairSample {
            x: 0,
            y1: 0,
            y2: 1,
            tau: 1,
        };
        let (dw, dl) = delta_logit(
            &s,
            k,
            p[0],
            p[1],
            &DynamicsParams::tabular(1.0),
            UpdateRule::Balanced,
        );
        assert!((-lg.grad[0][0] - p[0] * dw).abs() < 1e-15);
        assert!((-lg.grad[0][1] - p[1] * dl).abs() < 1e-15);
        assert!((-lg.grad[0][2] + (1.0 - k) * p[2] * (p[0] - p[1])).abs() < 1e-15);
    }

    #[test]
    fn closed_form_step_preserves_zero() {
        let probs = vec![0.0, 0.5, 0.3, 0.2];
        let mask = vec![true, false, false, false];
        let u = vec![5.0, 1.0, 2.0, 0.5];
        let next = closed_form_step(&probs, &u, &mask, 0.2, UpdateRule::Dpo);
        assert_eq!(next[0], 0.0);
        assert!((next.iter().sum::<f64>() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn dynamics_csv_header() {
        let sc = crate::task::GaussianScenario::new(45.0, 55.0, 100.0, 10).unwrap();
        let t = sc.to_task();
        let d = epoch_dynamics(&sc.model_policy(), &t, &DynamicsParams::default());
        let mut buf = Vec::new();
        let labels: Vec<f64> = (0..10).map(|y| y as f64).collect();
        write_dynamics_csv(&mut buf, &d[0], t.utility_row(0), &labels).unwrap();
        let s = String::from_utf8(buf).unwrap();
        assert!(s.starts_with("y,p,u,alpha,beta,w,dp_dpo,dp_balanced\n"));
        assert_eq!(s.lines().count(), 11);
    }

    mod props {
        use super::*;
        use proptest::prelude::*;
        use rand::Rng;

        proptest! {
            #[test]
            fn updates_conserve_mass(
                s in prop::collection::vec(-3.0f64..3.0, 2..15),
                wseed in any::<u64>(),
                gamma in 0.0f64..2.0,
            ) {
                let p = softmax(&s);
                let mut rng = seeded(wseed);
                let w: Vec<f64> = (0..p.len()).map(|_| rng.gen_range(-5.0..5.0)).collect();
                prop_assert!(prob_update_dpo(&p, &w, gamma).iter().sum::<f64>().abs() < 1e-9);
                prop_assert!(prob_update_balanced(&p, &w, gamma).iter().sum::<f64>().abs() < 1e-9);
            }
        }
    }
}
