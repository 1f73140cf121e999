//! Pairwise preference losses and their gradients.
//!
//! Every loss has the form `L = -log sigma(z)` for some margin `z`. Gradients
//! are reported with respect to the log-probabilities `log pi(y_w|x)` and
//! `log pi(y_l|x)` (reference log-probabilities are constants); the trainer
//! chains them through the softmax Jacobian. The Bradley-Terry reward loss is
//! the exception: its inputs are rewards and its gradients are reported with
//! respect to those.

use std::fmt;
use std::str::FromStr;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{param, Error, Result};
use crate::policy::{PolicyTable, ReferencePolicy};
use crate::task::{PairSampler, PreferenceTask, SamplingScheme};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Symmetry {
    /// `clip_min = 0`: the winner gradient is never scaled down.
    Asymmetric,
    /// `clip_min = 1/(1 + clip_max) - 1`.
    Symmetric,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum LossKind {
    Dpo,
    RewardBt,
    NbDpo(Symmetry),
    NbDpoV2(Symmetry),
    Bdpo,
    BalancedReference,
}

impl LossKind {
    pub const ALL_NAMES: [&'static str; 8] = [
        "dpo",
        "reward-bt",
        "nbdpo-asym",
        "nbdpo-sym",
        "nbdpov2-asym",
        "nbdpov2-sym",
        "bdpo",
        "balanced-ref",
    ];

    pub fn name(&self) -> &'static str {
        use Symmetry::*;
        match self {
            Self::Dpo => "dpo",
            Self::RewardBt => "reward-bt",
            Self::NbDpo(Asymmetric) => "nbdpo-asym",
            Self::NbDpo(Symmetric) => "nbdpo-sym",
            Self::NbDpoV2(Asymmetric) => "nbdpov2-asym",
            Self::NbDpoV2(Symmetric) => "nbdpov2-sym",
            Self::Bdpo => "bdpo",
            Self::BalancedReference => "balanced-ref",
        }
    }
}

impl FromStr for LossKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        use Symmetry::*;
        Ok(match s {
            "dpo" => Self::Dpo,
            "reward-bt" => Self::RewardBt,
            "nbdpo-asym" => Self::NbDpo(Asymmetric),
            "nbdpo-sym" => Self::NbDpo(Symmetric),
            "nbdpov2-asym" => Self::NbDpoV2(Asymmetric),
            "nbdpov2-sym" => Self::NbDpoV2(Symmetric),
            "bdpo" => Self::Bdpo,
            "balanced-ref" => Self::BalancedReference,
            other => {
                return param(format!(
                    "unknown loss {other:?}; valid: {}",
                    Self::ALL_NAMES.join(" | ")
                ))
            }
        })
    }
}

impl fmt::Display for LossKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// Loss variant plus hyper-parameters.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "LossSpecRepr", into = "LossSpecRepr")]
pub struct LossSpec {
    pub kind: LossKind,
    pub beta: f64,
    pub clip_max: f64,
}

#[derive(Serialize, Deserialize)]
struct LossSpecRepr {
    name: String,
    beta: f64,
    clip_max: f64,
}

impl From<LossSpec> for LossSpecRepr {
    fn from(s: LossSpec) -> Self {
        Self {
            name: s.kind.name().to_string(),
            beta: s.beta,
            clip_max: s.clip_max,
        }
    }
}

impl TryFrom<LossSpecRepr> for LossSpec {
    type Error = Error;
    fn try_from(r: LossSpecRepr) -> Result<Self> {
        LossSpec::new(r.name.parse()?, r.beta, r.clip_max)
    }
}

impl LossSpec {
    pub const DEFAULT_BETA: f64 = 1.0;
    pub const DEFAULT_CLIP: f64 = 0.5;

    pub fn new(kind: LossKind, beta: f64, clip_max: f64) -> Result<Self> {
        if !(beta > 0.0 && beta.is_finite()) {
            return param(format!("beta must be positive, got {beta}"));
        }
        if !(clip_max >= 0.0 && clip_max.is_finite()) {
            return param(format!("clip_max must be >= 0, got {clip_max}"));
        }
        Ok(Self {
            kind,
            beta,
            clip_max,
        })
    }

    pub fn of(kind: LossKind) -> Self {
        Self {
            kind,
            beta: Self::DEFAULT_BETA,
            clip_max: Self::DEFAULT_CLIP,
        }
    }

    pub fn parse(name: &str) -> Result<Self> {
        Ok(Self::of(name.parse()?))
    }

    pub fn symmetry(&self) -> Option<Symmetry> {
        match self.kind {
            LossKind::NbDpo(s) | LossKind::NbDpoV2(s) => Some(s),
            _ => None,
        }
    }

    /// Lower clip bound for the naive-balanced weight.
    pub fn clip_min(&self) -> f64 {
        match self.symmetry() {
            Some(Symmetry::Symmetric) => 1.0 / (1.0 + self.clip_max) - 1.0,
            _ => 0.0,
        }
    }

    pub fn evaluate(&self, input: &PairInput) -> Result<LossEval> {
        match self.kind {
            LossKind::Dpo => Ok(dpo_loss(input.lr_w(), input.lr_l(), self.beta)),
            LossKind::RewardBt => Ok(reward_bt_loss(input.lr_w(), input.lr_l())),
            LossKind::NbDpo(_) => nbdpo_loss(input, self),
            LossKind::NbDpoV2(_) => nbdpov2_loss(input, self),
            LossKind::Bdpo => bdpo_loss(input, self.beta),
            LossKind::BalancedReference => Ok(balanced_reference_loss(input, self.beta)),
        }
    }

    /// Gradients in the loss's native coordinates: probabilities for policy
    /// losses, rewards for the Bradley-Terry reward loss.
    pub fn native_grads(&self, eval: &LossEval, input: &PairInput) -> (f64, f64) {
        match self.kind {
            LossKind::RewardBt => (eval.grad_w, eval.grad_l),
            _ => eval.prob_grads(input.pi_w(), input.pi_l()),
        }
    }
}

/// Log-probabilities of one ordered pair under the policy and reference.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PairInput {
    pub logp_w: f64,
    pub logp_l: f64,
    pub ref_logp_w: f64,
    pub ref_logp_l: f64,
}

impl PairInput {
    pub fn new(logp_w: f64, logp_l: f64, ref_logp_w: f64, ref_logp_l: f64) -> Self {
        Self {
            logp_w,
            logp_l,
            ref_logp_w,
            ref_logp_l,
        }
    }

    /// Policy equal to the reference.
    pub fn at_reference(logp_w: f64, logp_l: f64) -> Self {
        Self::new(logp_w, logp_l, logp_w, logp_l)
    }

    pub fn lr_w(&self) -> f64 {
        self.logp_w - self.ref_logp_w
    }

    pub fn lr_l(&self) -> f64 {
        self.logp_l - self.ref_logp_l
    }

    pub fn pi_w(&self) -> f64 {
        self.logp_w.exp()
    }

    pub fn pi_l(&self) -> f64 {
        self.logp_l.exp()
    }

    pub fn from_tables(
        policy_logp: &[f64],
        reference_logp: &[f64],
        winner: usize,
        loser: usize,
    ) -> Self {
        Self::new(
            policy_logp[winner],
            policy_logp[loser],
            reference_logp[winner],
            reference_logp[loser],
        )
    }
}

/// Value, `kappa = e^{-L}` and gradients with respect to the winner and loser
/// inputs.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossEval {
    pub value: f64,
    pub kappa: f64,
    pub grad_w: f64,
    pub grad_l: f64,
}

impl LossEval {
    /// Converts log-probability gradients to probability gradients.
    pub fn prob_grads(&self, pi_w: f64, pi_l: f64) -> (f64, f64) {
        (self.grad_w / pi_w, self.grad_l / pi_l)
    }
}

/// `(-log sigma(z), sigma(z), sigma(-z))`, stable in both tails.
fn neg_log_sigmoid(z: f64) -> (f64, f64, f64) {
    let value = if z > 0.0 {
        (-z).exp().ln_1p()
    } else {
        -z + z.exp().ln_1p()
    };
    let one_minus_kappa = if z > 0.0 {
        let e = (-z).exp();
        e / (1.0 + e)
    } else {
        1.0 / (1.0 + z.exp())
    };
    (value, (-value).exp(), one_minus_kappa)
}

fn from_margin(z: f64, dz_w: f64, dz_l: f64) -> LossEval {
    let (value, kappa, omk) = neg_log_sigmoid(z);
    LossEval {
        value,
        kappa,
        grad_w: -omk * dz_w,
        grad_l: -omk * dz_l,
    }
}

/// Standard DPO on the two log-ratios.
pub fn dpo_loss(lr_w: f64, lr_l: f64, beta: f64) -> LossEval {
    from_margin(beta * (lr_w - lr_l), beta, -beta)
}

/// Bradley-Terry reward-model loss `-log sigma(r_w - r_l)`; gradients are
/// with respect to the rewards.
pub fn reward_bt_loss(r_w: f64, r_l: f64) -> LossEval {
    from_margin(r_w - r_l, 1.0, -1.0)
}

fn check_prob(pi: f64, what: &str) -> Result<()> {
    if !(pi > 0.0 && pi < 1.0) {
        return Err(Error::Domain(format!(
            "{what} must lie in (0, 1), got {pi}"
        )));
    }
    Ok(())
}

/// `1 + clip(log(pi_w/pi_l), clip_min, clip_max)`.
pub fn nbdpo_lambda(pi_w: f64, pi_l: f64, clip_min: f64, clip_max: f64) -> Result<f64> {
    check_prob(pi_w, "pi_w")?;
    check_prob(pi_l, "pi_l")?;
    Ok(1.0 + (pi_w / pi_l).ln().clamp(clip_min, clip_max))
}

fn lambda_from_logs(input: &PairInput, spec: &LossSpec) -> Result<(f64, bool)> {
    check_prob(input.pi_w(), "pi_w")?;
    check_prob(input.pi_l(), "pi_l")?;
    let d = input.logp_w - input.logp_l;
    let (lo, hi) = (spec.clip_min(), spec.clip_max);
    Ok((1.0 + d.clamp(lo, hi), d > lo && d < hi))
}

/// Naive balanced DPO: the loss value is exactly DPO's, the winner gradient
/// is scaled by `lambda`. The detached copy of the winner log-ratio
/// is numerically equal to `lr_w`, so `lambda`'s own derivative cancels.
pub fn nbdpo_loss(input: &PairInput, spec: &LossSpec) -> Result<LossEval> {
    let (lambda, _) = lambda_from_logs(input, spec)?;
    let base = dpo_loss(input.lr_w(), input.lr_l(), spec.beta);
    Ok(LossEval {
        grad_w: lambda * base.grad_w,
        ..base
    })
}

/// `-log sigma(beta lambda lr_w - beta lr_l)`, differentiated through
/// `lambda` (whose clip has slope 1 inside the window and 0 outside).
pub fn nbdpov2_loss(input: &PairInput, spec: &LossSpec) -> Result<LossEval> {
    let (lambda, inside) = lambda_from_logs(input, spec)?;
    let b = spec.beta;
    let (lr_w, lr_l) = (input.lr_w(), input.lr_l());
    let slope = if inside { 1.0 } else { 0.0 };
    let z = b * (lambda * lr_w - lr_l);
    let dz_w = b * (lambda + lr_w * slope);
    let dz_l = b * (-1.0 - lr_w * slope);
    Ok(from_margin(z, dz_w, dz_l))
}

/// `log pi_l / (log pi_w + log pi_l)`; above 1/2 exactly when `pi_w > pi_l`.
pub fn bdpo_lambda(pi_w: f64, pi_l: f64) -> Result<f64> {
    check_prob(pi_w, "pi_w")?;
    check_prob(pi_l, "pi_l")?;
    let (a, b) = (pi_w.ln(), pi_l.ln());
    Ok(b / (a + b))
}

/// Balanced DPO with winner weight `lambda_w` and loser weight `1 - lambda_w`,
/// differentiated through `lambda_w`.
pub fn bdpo_loss(input: &PairInput, beta: f64) -> Result<LossEval> {
    check_prob(input.pi_w(), "pi_w")?;
    check_prob(input.pi_l(), "pi_l")?;
    let (a, b) = (input.logp_w, input.logp_l);
    let s = a + b;
    let lambda = b / s;
    let dlambda_a = -b / (s * s);
    let dlambda_b = a / (s * s);
    let (lr_w, lr_l) = (input.lr_w(), input.lr_l());
    let z = beta * (lambda * lr_w - (1.0 - lambda) * lr_l);
    let dz_w = beta * (lambda + (lr_w + lr_l) * dlambda_a);
    let dz_l = beta * (-(1.0 - lambda) + (lr_w + lr_l) * dlambda_b);
    Ok(from_margin(z, dz_w, dz_l))
}

/// Gradient rule of a probability-balanced loss: `dL/dpi_w = -beta(1-kappa)`,
/// `dL/dpi_l = +beta(1-kappa)` with DPO's `kappa`. The reported value is
/// DPO's. Chained through the softmax this moves logit `i` by
/// `eta beta (1-kappa) p_i (1 - p_i + p_j)` for pair `(i, j)`.
pub fn balanced_reference_loss(input: &PairInput, beta: f64) -> LossEval {
    let (value, kappa, omk) = neg_log_sigmoid(beta * (input.lr_w() - input.lr_l()));
    LossEval {
        value,
        kappa,
        grad_w: -beta * omk * input.pi_w(),
        grad_l: beta * omk * input.pi_l(),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum BalanceClass {
    Balanced,
    PositivelyImbalanced,
    NegativelyImbalanced,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BalanceReport {
    pub class: BalanceClass,
    /// Monte-Carlo mean of `dL/d(winner) + dL/d(loser)` in native coordinates.
    pub mean_sum: f64,
    pub std_err: f64,
    pub n_samples: usize,
}

/// Half-width of the decision band, in standard errors.
pub const BALANCE_BAND_SIGMAS: f64 = 3.0;

/// Classifies `spec` by the sign of `E[dL/dpi_w + dL/dpi_l]` over uniformly
/// sampled pairs. A point estimate within the band around zero is reported
/// as balanced.
pub fn classify_balance<R: Rng>(
    spec: &LossSpec,
    policy: &PolicyTable,
    reference: &ReferencePolicy,
    task: &PreferenceTask,
    n_samples: usize,
    rng: &mut R,
) -> Result<BalanceReport> {
    if n_samples < 2 {
        return param("balance classification needs >= 2 samples");
    }
    let sampler = PairSampler::new(task, SamplingScheme::Uniform)?;
    let logp: Vec<Vec<f64>> = (0..task.n_prompts()).map(|x| policy.log_probs(x)).collect();
    let ref_logp: Vec<Vec<f64>> = (0..task.n_prompts())
        .map(|x| reference.log_probs(x))
        .collect();
    let mut sums = Vec::with_capacity(n_samples);
    for _ in 0..n_samples {
        let s = sampler.sample(rng);
        let input = PairInput::from_tables(&logp[s.x], &ref_logp[s.x], s.winner(), s.loser());
        let eval = spec.evaluate(&input)?;
        let (gw, gl) = spec.native_grads(&eval, &input);
        sums.push(gw + gl);
    }
    let mean = crate::stats::mean(&sums);
    let var = sums.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n_samples - 1) as f64;
    let std_err = (var / n_samples as f64).sqrt();
    let scale = sums.iter().fold(0.0f64, |m, v| m.max(v.abs())).max(1.0);
    let class = if mean.abs() <= BALANCE_BAND_SIGMAS * std_err || mean.abs() <= 1e-12 * scale {
        BalanceClass::Balanced
    } else if mean > 0.0 {
        BalanceClass::NegativelyImbalanced
    } else {
        BalanceClass::PositivelyImbalanced
    };
    Ok(BalanceReport {
        class,
        mean_sum: mean,
        std_err,
        n_samples,
    })
}
