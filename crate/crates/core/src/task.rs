//! Discrete preference tasks: utilities, Bradley-Terry labels, pair sampling
//! and OOD masking.

use rand::distributions::{Distribution, WeightedIndex};
use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{param, Error, Result};
use crate::policy::PolicyTable;

/// `exp(-alpha (y - x)^2)`, the toy benchmark's unnormalized utility.
pub fn gaussian_utility(x: f64, y: f64, alpha: f64) -> Result<f64> {
    if !(alpha > 0.0 && alpha.is_finite()) {
        return param(format!("utility sharpness must be positive, got {alpha}"));
    }
    Ok((-alpha * (y - x).powi(2)).exp())
}

/// Single-prompt scenario with Gaussian model and utility profiles over
/// responses `0..n_responses`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GaussianScenario {
    pub mu_p: f64,
    pub mu_q: f64,
    pub sigma2: f64,
    pub n_responses: usize,
}

impl GaussianScenario {
    pub fn new(mu_p: f64, mu_q: f64, sigma2: f64, n_responses: usize) -> Result<Self> {
        if !(sigma2 > 0.0 && sigma2.is_finite()) {
            return param(format!("sigma2 must be positive, got {sigma2}"));
        }
        if n_responses < 2 {
            return param("scenario needs at least two responses");
        }
        Ok(Self {
            mu_p,
            mu_q,
            sigma2,
            n_responses,
        })
    }

    /// Unnormalized utility column `exp(-(y - mu_q)^2 / (2 sigma^2))`.
    pub fn utilities(&self) -> Vec<f64> {
        (0..self.n_responses)
            .map(|y| (-(y as f64 - self.mu_q).powi(2) / (2.0 * self.sigma2)).exp())
            .collect()
    }

    /// Model logits `-(y - mu_p)^2 / (2 sigma^2)`; their softmax is the
    /// discretized Gaussian model distribution.
    pub fn model_logits(&self) -> Vec<f64> {
        (0..self.n_responses)
            .map(|y| -(y as f64 - self.mu_p).powi(2) / (2.0 * self.sigma2))
            .collect()
    }

    pub fn to_task(&self) -> PreferenceTask {
        PreferenceTask::from_parts(
            vec![self.utilities()],
            vec![vec![false; self.n_responses]],
            UtilityModel::Gaussian(*self),
        )
    }

    pub fn model_policy(&self) -> PolicyTable {
        PolicyTable::new(vec![self.model_logits()]).expect("finite gaussian logits")
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum UtilityModel {
    /// `u(y|x) = exp(-alpha (y - x)^2)` with prompts and responses labeled `1..`.
    Toy {
        alpha: f64,
    },
    Gaussian(GaussianScenario),
    Explicit,
}

/// Prompt set `S`, response set `A`, utility `u[x][y]` and OOD mask.
#[derive(Debug, Clone, PartialEq)]
pub struct PreferenceTask {
    utility: Vec<Vec<f64>>,
    mask: Vec<Vec<bool>>,
    model: UtilityModel,
}

impl PreferenceTask {
    fn from_parts(utility: Vec<Vec<f64>>, mask: Vec<Vec<bool>>, model: UtilityModel) -> Self {
        Self {
            utility,
            mask,
            model,
        }
    }

    /// Toy grid: prompts and responses labeled `1..=n`, the best response for
    /// prompt `x` is `y = x`.
    pub fn toy(n_prompts: usize, n_responses: usize, alpha: f64) -> Result<Self> {
        if n_prompts == 0 || n_responses < 2 {
            return param("toy task needs >= 1 prompt and >= 2 responses");
        }
        let utility = (1..=n_prompts)
            .map(|x| {
                (1..=n_responses)
                    .map(|y| gaussian_utility(x as f64, y as f64, alpha))
                    .collect::<Result<Vec<_>>>()
            })
            .collect::<Result<Vec<_>>>()?;
        if utility.iter().flatten().any(|&u| u <= 0.0) {
            return param("utility underflowed to zero; lower alpha or shrink the grid");
        }
        Ok(Self::from_parts(
            utility,
            vec![vec![false; n_responses]; n_prompts],
            UtilityModel::Toy { alpha },
        ))
    }

    pub fn from_utilities(utility: Vec<Vec<f64>>, mask: Option<Vec<Vec<bool>>>) -> Result<Self> {
        if utility.is_empty() || utility[0].len() < 2 {
            return param("task needs >= 1 prompt and >= 2 responses");
        }
        let m = utility[0].len();
        if utility.iter().any(|r| r.len() != m) {
            return param("ragged utility matrix");
        }
        if utility
            .iter()
            .flatten()
            .any(|&u| !(u > 0.0 && u.is_finite()))
        {
            return param("utilities must be strictly positive and finite");
        }
        let mask = mask.unwrap_or_else(|| vec![vec![false; m]; utility.len()]);
        let task = Self::from_parts(utility, mask, UtilityModel::Explicit);
        task.validate_mask()?;
        Ok(task)
    }

    fn validate_mask(&self) -> Result<()> {
        if self.mask.len() != self.n_prompts()
            || self.mask.iter().any(|r| r.len() != self.n_responses())
        {
            return param("mask shape does not match the task");
        }
        for x in 0..self.n_prompts() {
            if self.unmasked(x).len() < 2 {
                return param(format!("prompt {x} has fewer than two unmasked responses"));
            }
        }
        Ok(())
    }

    pub fn n_prompts(&self) -> usize {
        self.utility.len()
    }

    pub fn n_responses(&self) -> usize {
        self.utility[0].len()
    }

    pub fn model(&self) -> &UtilityModel {
        &self.model
    }

    pub fn utility(&self, x: usize, y: usize) -> f64 {
        self.utility[x][y]
    }

    pub fn utility_row(&self, x: usize) -> &[f64] {
        &self.utility[x]
    }

    pub fn is_masked(&self, x: usize, y: usize) -> bool {
        self.mask[x][y]
    }

    pub fn mask_row(&self, x: usize) -> &[bool] {
        &self.mask[x]
    }

    pub fn masked_count(&self) -> usize {
        self.mask.iter().flatten().filter(|&&m| m).count()
    }

    /// Unmasked responses for prompt `x`, in index order.
    pub fn unmasked(&self, x: usize) -> Vec<usize> {
        (0..self.n_responses())
            .filter(|&y| !self.mask[x][y])
            .collect()
    }

    /// Numeric label of prompt `x` (toy grids are 1-based).
    pub fn prompt_label(&self, x: usize) -> f64 {
        match self.model {
            UtilityModel::Toy { .. } => (x + 1) as f64,
            _ => x as f64,
        }
    }

    pub fn response_label(&self, y: usize) -> f64 {
        match self.model {
            UtilityModel::Toy { .. } => (y + 1) as f64,
            _ => y as f64,
        }
    }

    /// Bradley-Terry probability that `y1` beats `y2` under the utility.
    pub fn preference_probability(&self, x: usize, y1: usize, y2: usize) -> Result<f64> {
        if y1 == y2 {
            return Err(Error::DegeneratePair(y1));
        }
        for y in [y1, y2] {
            if self.mask[x][y] {
                return Err(Error::MaskedPair { x, y });
            }
        }
        Ok(self.bt(x, y1, y2))
    }

    fn bt(&self, x: usize, y1: usize, y2: usize) -> f64 {
        let (a, b) = (self.utility[x][y1], self.utility[x][y2]);
        a / (a + b)
    }

    /// Re-draws the OOD mask with exactly `round(rate * |S| * |A|)` cells,
    /// rejecting draws that leave any prompt with fewer than two responses.
    pub fn apply_mask<R: Rng>(&self, rate: f64, rng: &mut R) -> Result<Self> {
        if !(0.0..1.0).contains(&rate) {
            return param(format!("mask rate must lie in [0, 1), got {rate}"));
        }
        let (s, a) = (self.n_prompts(), self.n_responses());
        let k = (rate * (s * a) as f64).round() as usize;
        if k > s * (a - 2) {
            return param(format!(
                "cannot mask {k} cells and keep two responses per prompt"
            ));
        }
        let mut cells: Vec<usize> = (0..s * a).collect();
        const MAX_DRAWS: usize = 100_000;
        for _ in 0..MAX_DRAWS {
            cells.shuffle(rng);
            let mut mask = vec![vec![false; a]; s];
            for &c in &cells[..k] {
                mask[c / a][c % a] = true;
            }
            if mask
                .iter()
                .all(|row| row.iter().filter(|&&m| !m).count() >= 2)
            {
                let mut out = self.clone();
                out.mask = mask;
                return Ok(out);
            }
        }
        Err(Error::Parameter(format!(
            "no valid mask found for rate {rate} after {MAX_DRAWS} draws"
        )))
    }

    pub fn to_file(&self) -> Result<TaskFile> {
        match self.model {
            UtilityModel::Toy { alpha } => Ok(TaskFile {
                prompts: self.n_prompts(),
                responses: self.n_responses(),
                alpha,
                mask: self.mask.clone(),
            }),
            _ => param("only toy tasks have a JSON form"),
        }
    }

    pub fn from_file(file: &TaskFile) -> Result<Self> {
        let mut task = Self::toy(file.prompts, file.responses, file.alpha)?;
        task.mask = file.mask.clone();
        task.validate_mask()?;
        Ok(task)
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string(&self.to_file()?)?)
    }

    pub fn from_json(s: &str) -> Result<Self> {
        Self::from_file(&serde_json::from_str(s)?)
    }
}

/// JSON form of a toy task. Utilities are regenerated from `alpha`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaskFile {
    pub prompts: usize,
    pub responses: usize,
    pub alpha: f64,
    pub mask: Vec<Vec<bool>>,
}

/// `(x, y1, y2, tau)`; `tau = +1` means `y1` is preferred.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct PairSample {
    pub x: usize,
    pub y1: usize,
    pub y2: usize,
    pub tau: i8,
}

impl PairSample {
    pub fn winner(&self) -> usize {
        if self.tau > 0 {
            self.y1
        } else {
            self.y2
        }
    }

    pub fn loser(&self) -> usize {
        if self.tau > 0 {
            self.y2
        } else {
            self.y1
        }
    }
}

/// Ordered preference `winner > loser` carrying a dataset weight.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct WeightedPair {
    pub x: usize,
    pub winner: usize,
    pub loser: usize,
    pub weight: f64,
}

impl From<PairSample> for WeightedPair {
    fn from(s: PairSample) -> Self {
        Self {
            x: s.x,
            winner: s.winner(),
            loser: s.loser(),
            weight: 1.0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum SamplingKind {
    #[default]
    Uniform,
    Shiftless,
}

impl std::str::FromStr for SamplingKind {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "uniform" => Ok(Self::Uniform),
            "shiftless" => Ok(Self::Shiftless),
            other => param(format!(
                "unknown sampling scheme {other:?} (uniform|shiftless)"
            )),
        }
    }
}

/// Dataset distribution over unordered pairs.
#[derive(Debug, Clone, Copy)]
pub enum SamplingScheme<'a> {
    /// Every unmasked unordered pair equally likely.
    Uniform,
    /// Prompt uniform, then pair weight `pi(y1|x) pi(y2|x)` under the live policy.
    Shiftless(&'a PolicyTable),
}

impl<'a> SamplingScheme<'a> {
    pub fn bind(kind: SamplingKind, policy: &'a PolicyTable) -> Self {
        match kind {
            SamplingKind::Uniform => Self::Uniform,
            SamplingKind::Shiftless => Self::Shiftless(policy),
        }
    }

    /// Relative weight of every unmasked unordered pair `(x, i, j)`, `i < j`.
    fn pair_weights(&self, task: &PreferenceTask) -> Vec<((usize, usize, usize), f64)> {
        let mut out = Vec::new();
        for x in 0..task.n_prompts() {
            let ys = task.unmasked(x);
            let probs = match self {
                Self::Uniform => None,
                Self::Shiftless(p) => Some(p.probs(x)),
            };
            let start = out.len();
            for (a, &i) in ys.iter().enumerate() {
                for &j in &ys[a + 1..] {
                    let w = probs.as_ref().map_or(1.0, |p| p[i] * p[j]);
                    out.push(((x, i, j), w));
                }
            }
            if probs.is_some() {
                // every prompt gets equal total mass, normalized to mean weight 1
                let row = &mut out[start..];
                let total: f64 = row.iter().map(|(_, w)| w).sum();
                let n = row.len() as f64;
                for (_, w) in row.iter_mut() {
                    *w *= n / total;
                }
            }
        }
        out
    }
}

/// Reusable sampler over a fixed pair distribution.
#[derive(Debug, Clone)]
pub struct PairSampler {
    pairs: Vec<(usize, usize, usize)>,
    probs: Vec<f64>,
    index: WeightedIndex<f64>,
}

impl PairSampler {
    pub fn new(task: &PreferenceTask, scheme: SamplingScheme<'_>) -> Result<Self> {
        let weighted = scheme.pair_weights(task);
        if weighted.is_empty() {
            return Err(Error::EmptyTask);
        }
        let index = WeightedIndex::new(weighted.iter().map(|(_, w)| *w))
            .map_err(|e| Error::Numeric(format!("pair weights: {e}")))?;
        let probs = weighted
            .iter()
            .map(|&((x, i, j), _)| task.bt(x, i, j))
            .collect();
        Ok(Self {
            pairs: weighted.into_iter().map(|(p, _)| p).collect(),
            probs,
            index,
        })
    }

    pub fn sample<R: Rng>(&self, rng: &mut R) -> PairSample {
        let k = self.index.sample(rng);
        let (x, y1, y2) = self.pairs[k];
        let tau = if rng.gen::<f64>() < self.probs[k] {
            1
        } else {
            -1
        };
        PairSample { x, y1, y2, tau }
    }

    pub fn sample_n<R: Rng>(&self, n: usize, rng: &mut R) -> Vec<PairSample> {
        (0..n).map(|_| self.sample(rng)).collect()
    }
}

/// Draws `n` labeled pairs; labels are Bernoulli with the Bradley-Terry
/// preference probability.
pub fn sample_pairs<R: Rng>(
    task: &PreferenceTask,
    scheme: SamplingScheme<'_>,
    n: usize,
    rng: &mut R,
) -> Result<Vec<PairSample>> {
    if n == 0 {
        return param("sample count must be >= 1");
    }
    Ok(PairSampler::new(task, scheme)?.sample_n(n, rng))
}

/// Every unmasked ordered pair weighted by its Bradley-Terry probability.
pub fn expected_pair_dataset(task: &PreferenceTask) -> Vec<WeightedPair> {
    expected_pair_dataset_with(task, SamplingScheme::Uniform)
}

/// Ordered-pair expectation of `scheme`: BT probability times the scheme's
/// relative pair weight (mean weight 1 per prompt).
pub fn expected_pair_dataset_with(
    task: &PreferenceTask,
    scheme: SamplingScheme<'_>,
) -> Vec<WeightedPair> {
    let mut out = Vec::new();
    for ((x, i, j), d) in scheme.pair_weights(task) {
        let q = task.bt(x, i, j);
        out.push(WeightedPair {
            x,
            winner: i,
            loser: j,
            weight: d * q,
        });
        out.push(WeightedPair {
            x,
            winner: j,
            loser: i,
            weight: d * (1.0 - q),
        });
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::seeded;
    use std::collections::HashMap;

    #[test]
    fn utility_examples() {
        assert_eq!(gaussian_utility(5.0, 5.0, 0.6).unwrap(), 1.0);
        let v = gaussian_utility(5.0, 6.0, 0.6).unwrap();
        assert!((v - (-0.6f64).exp()).abs() < 1e-15);
        assert!((v - 0.5488).abs() < 1e-4);
        assert_eq!(
            gaussian_utility(3.0, 7.0, 0.6).unwrap(),
            gaussian_utility(7.0, 3.0, 0.6).unwrap()
        );
        assert!(matches!(
            gaussian_utility(1.0, 2.0, 0.0),
            Err(Error::Parameter(_))
        ));
        assert!(matches!(
            gaussian_utility(1.0, 2.0, -1.0),
            Err(Error::Parameter(_))
        ));
    }

    #[test]
    fn utility_peaks_at_prompt() {
        for d in 0..10 {
            let a = gaussian_utility(5.0, 5.0 + d as f64, 0.6).unwrap();
            let b = gaussian_utility(5.0, 6.0 + d as f64, 0.6).unwrap();
            assert!(a > b);
        }
    }

    #[test]
    fn preference_probability_examples() {
        let t = PreferenceTask::toy(20, 20, 0.6).unwrap();
        // prompt label 5 is index 4
        let p = t.preference_probability(4, 4, 5).unwrap();
        assert!((p - 1.0 / (1.0 + (-0.6f64).exp())).abs() < 1e-15);
        assert!((p - 0.6457).abs() < 1e-4);
        let q = t.preference_probability(4, 5, 4).unwrap();
        assert!((p + q - 1.0).abs() < 1e-15);
        // equidistant responses tie
        assert_eq!(t.preference_probability(4, 3, 5).unwrap(), 0.5);
        assert!(matches!(
            t.preference_probability(0, 2, 2),
            Err(Error::DegeneratePair(2))
        ));
    }

    #[test]
    fn masked_pair_is_rejected() {
        let mut mask = vec![vec![false; 3]];
        mask[0][1] = true;
        let t = PreferenceTask::from_utilities(vec![vec![1.0, 2.0, 3.0]], Some(mask)).unwrap();
        assert!(matches!(
            t.preference_probability(0, 0, 1),
            Err(Error::MaskedPair { x: 0, y: 1 })
        ));
    }

    #[test]
    fn uniform_pair_frequencies() {
        let t = PreferenceTask::from_utilities(vec![vec![1.0, 2.0, 4.0]], None).unwrap();
        let mut rng = seeded(3);
        let n = 100_000;
        let s = sample_pairs(&t, SamplingScheme::Uniform, n, &mut rng).unwrap();
        let mut counts: HashMap<(usize, usize), usize> = HashMap::new();
        for p in &s {
            *counts.entry((p.y1, p.y2)).or_default() += 1;
        }
        assert_eq!(counts.len(), 3);
        for c in counts.values() {
            assert!((*c as f64 / n as f64 - 1.0 / 3.0).abs() < 0.01);
        }
    }

    #[test]
    fn label_frequency_converges_to_bt() {
        let t = PreferenceTask::from_utilities(vec![vec![1.0, 3.0]], None).unwrap();
        let mut rng = seeded(11);
        let n = 50_000;
        let s = sample_pairs(&t, SamplingScheme::Uniform, n, &mut rng).unwrap();
        let wins = s.iter().filter(|p| p.winner() == 1).count() as f64;
        let q = 0.75;
        let sd = (q * (1.0 - q) / n as f64).sqrt();
        assert!((wins / n as f64 - q).abs() < 4.0 * sd);
    }

    #[test]
    fn shiftless_under_uniform_policy_matches_uniform() {
        let t = PreferenceTask::toy(3, 6, 0.6).unwrap();
        let pol = PolicyTable::uniform(3, 6);
        let a = expected_pair_dataset_with(&t, SamplingScheme::Uniform);
        let b = expected_pair_dataset_with(&t, SamplingScheme::Shiftless(&pol));
        assert_eq!(a.len(), b.len());
        for (u, v) in a.iter().zip(&b) {
            assert_eq!((u.x, u.winner, u.loser), (v.x, v.winner, v.loser));
            assert!((u.weight - v.weight).abs() < 1e-12);
        }
    }

    #[test]
    fn sampling_is_deterministic() {
        let t = PreferenceTask::toy(4, 5, 0.6).unwrap();
        let a = sample_pairs(&t, SamplingScheme::Uniform, 200, &mut seeded(42)).unwrap();
        let b = sample_pairs(&t, SamplingScheme::Uniform, 200, &mut seeded(42)).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn zero_samples_rejected() {
        let t = PreferenceTask::toy(1, 3, 0.6).unwrap();
        assert!(sample_pairs(&t, SamplingScheme::Uniform, 0, &mut seeded(0)).is_err());
    }

    #[test]
    fn expected_dataset_two_equal_responses() {
        let t = PreferenceTask::from_utilities(vec![vec![2.0, 2.0]], None).unwrap();
        let d = expected_pair_dataset(&t);
        assert_eq!(d.len(), 2);
        assert!(d.iter().all(|p| p.weight == 0.5));
    }

    #[test]
    fn expected_dataset_complementary_weights() {
        let t = PreferenceTask::toy(2, 7, 0.6).unwrap();
        let d = expected_pair_dataset(&t);
        for pair in d.chunks(2) {
            assert_eq!(pair[0].winner, pair[1].loser);
            assert!((pair[0].weight + pair[1].weight - 1.0).abs() < 1e-15);
        }
    }

    #[test]
    fn mask_rate_zero_is_identity() {
        let t = PreferenceTask::toy(20, 20, 0.6).unwrap();
        assert_eq!(t.apply_mask(0.0, &mut seeded(1)).unwrap(), t);
    }

    #[test]
    fn mask_rate_point_two() {
        let t = PreferenceTask::toy(20, 20, 0.6).unwrap();
        let m = t.apply_mask(0.2, &mut seeded(7)).unwrap();
        assert_eq!(m.masked_count(), 80);
        for x in 0..20 {
            assert!(m.unmasked(x).len() >= 2);
        }
        assert_eq!(m, t.apply_mask(0.2, &mut seeded(7)).unwrap());
        assert!(t.apply_mask(1.0, &mut seeded(7)).is_err());
    }

    #[test]
    fn masked_cells_never_sampled() {
        let t = PreferenceTask::toy(20, 20, 0.6)
            .unwrap()
            .apply_mask(0.4, &mut seeded(5))
            .unwrap();
        let s = sample_pairs(&t, SamplingScheme::Uniform, 100_000, &mut seeded(6)).unwrap();
        assert!(s
            .iter()
            .all(|p| !t.is_masked(p.x, p.y1) && !t.is_masked(p.x, p.y2)));
    }

    #[test]
    fn task_json_round_trip() {
        let t = PreferenceTask::toy(5, 6, 0.6)
            .unwrap()
            .apply_mask(0.2, &mut seeded(2))
            .unwrap();
        let s = t.to_json().unwrap();
        assert!(s.contains("\"alpha\":0.6"));
        assert_eq!(PreferenceTask::from_json(&s).unwrap(), t);
    }

    #[test]
    fn gaussian_scenario_utility_shape() {
        let sc = GaussianScenario::new(45.0, 55.0, 100.0, 100).unwrap();
        let u = sc.utilities();
        let best = (0..100).max_by(|&a, &b| u[a].total_cmp(&u[b])).unwrap();
        assert_eq!(best, 55);
        // ratio form: u(y)/u(y') = exp(-((y-mq)^2 - (y'-mq)^2)/(2 s2))
        let r = u[60] / u[50];
        assert!((r - 1.0).abs() < 1e-12);
        assert!(GaussianScenario::new(0.0, 0.0, 0.0, 10).is_err());
        assert!(GaussianScenario::new(0.0, 0.0, 1.0, 1).is_err());
    }
}
