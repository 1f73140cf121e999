//! Tabular softmax policy.
//!
//! Every (prompt, response) logit is its own parameter, so the per-logit
//! parameter gradient has unit norm and distinct logits have orthogonal
//! parameter gradients. The closed-form dynamics in [`crate::dynamics`] are
//! exact first-order statements for this model.

use std::io::{Read, Write};

use crate::error::{Error, Result};
use crate::task::PreferenceTask;

/// Numerically stable softmax (max-subtracted).
pub fn softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|s| (s - max).exp()).collect();
    let z: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / z).collect()
}

pub fn log_softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lse = max + logits.iter().map(|s| (s - max).exp()).sum::<f64>().ln();
    logits.iter().map(|s| s - lse).collect()
}

/// `J[i][j] = p_i (delta_ij - p_j)`.
pub fn softmax_jacobian(probs: &[f64]) -> Vec<Vec<f64>> {
    probs
        .iter()
        .enumerate()
        .map(|(i, &pi)| {
            probs
                .iter()
                .enumerate()
                .map(|(j, &pj)| pi * (f64::from(u8::from(i == j)) - pj))
                .collect()
        })
        .collect()
}

/// Logit matrix `s[x][y]`.
#[derive(Debug, Clone, PartialEq)]
pub struct PolicyTable {
    logits: Vec<Vec<f64>>,
}

impl PolicyTable {
    pub fn new(logits: Vec<Vec<f64>>) -> Result<Self> {
        if logits.is_empty() || logits[0].len() < 2 {
            return Err(Error::Parameter(
                "policy needs at least one prompt and two responses".into(),
            ));
        }
        let width = logits[0].len();
        if logits.iter().any(|row| row.len() != width) {
            return Err(Error::Parameter("ragged logit matrix".into()));
        }
        if logits.iter().flatten().any(|s| !s.is_finite()) {
            return Err(Error::Numeric("non-finite logit".into()));
        }
        Ok(Self { logits })
    }

    pub fn uniform(n_prompts: usize, n_responses: usize) -> Self {
        Self {
            logits: vec![vec![0.0; n_responses]; n_prompts],
        }
    }

    pub fn n_prompts(&self) -> usize {
        self.logits.len()
    }

    pub fn n_responses(&self) -> usize {
        self.logits[0].len()
    }

    pub fn logits(&self, x: usize) -> &[f64] {
        &self.logits[x]
    }

    pub fn rows(&self) -> &[Vec<f64>] {
        &self.logits
    }

    /// Adds `delta[x][y]` to every logit.
    pub fn apply_update(&mut self, delta: &[Vec<f64>]) -> Result<()> {
        for (row, d) in self.logits.iter_mut().zip(delta) {
            for (s, ds) in row.iter_mut().zip(d) {
                *s += ds;
            }
        }
        if self.logits.iter().flatten().any(|s| !s.is_finite()) {
            return Err(Error::Numeric("update produced a non-finite logit".into()));
        }
        Ok(())
    }

    pub fn probs(&self, x: usize) -> Vec<f64> {
        softmax(&self.logits[x])
    }

    pub fn log_probs(&self, x: usize) -> Vec<f64> {
        log_softmax(&self.logits[x])
    }

    pub fn all_probs(&self) -> Vec<Vec<f64>> {
        (0..self.n_prompts()).map(|x| self.probs(x)).collect()
    }

    pub fn log_prob(&self, x: usize, y: usize) -> f64 {
        self.log_probs(x)[y]
    }

    pub fn prob_jacobian(&self, x: usize) -> Vec<Vec<f64>> {
        softmax_jacobian(&self.probs(x))
    }

    pub fn freeze(&self) -> ReferencePolicy {
        ReferencePolicy(self.clone())
    }

    /// One row per prompt, one column per response.
    pub fn write_csv<W: Write>(&self, w: W) -> Result<()> {
        let mut wtr = csv::WriterBuilder::new().has_headers(false).from_writer(w);
        for row in &self.logits {
            wtr.write_record(row.iter().map(|s| format!("{s:?}")))?;
        }
        wtr.flush()?;
        Ok(())
    }

    pub fn read_csv<R: Read>(r: R) -> Result<Self> {
        let mut rdr = csv::ReaderBuilder::new().has_headers(false).from_reader(r);
        let mut logits = Vec::new();
        for rec in rdr.records() {
            let rec = rec?;
            let row = rec
                .iter()
                .map(|f| {
                    f.trim()
                        .parse::<f64>()
                        .map_err(|e| Error::Parameter(format!("bad logit {f:?}: {e}")))
                })
                .collect::<Result<Vec<_>>>()?;
            logits.push(row);
        }
        Self::new(logits)
    }
}

/// Frozen copy of a policy, used as the DPO reference.
#[derive(Debug, Clone, PartialEq)]
pub struct ReferencePolicy(PolicyTable);

impl ReferencePolicy {
    pub fn uniform(n_prompts: usize, n_responses: usize) -> Self {
        Self(PolicyTable::uniform(n_prompts, n_responses))
    }

    pub fn table(&self) -> &PolicyTable {
        &self.0
    }

    pub fn log_probs(&self, x: usize) -> Vec<f64> {
        self.0.log_probs(x)
    }
}

/// `log pi(y|x) - log pi_ref(y|x)`.
pub fn log_ratio(policy: &PolicyTable, reference: &ReferencePolicy, x: usize, y: usize) -> f64 {
    policy.log_prob(x, y) - reference.table().log_prob(x, y)
}

/// All-zero logits. Masked responses are not special-cased here: the softmax
/// is strictly positive, so exact-zero probabilities only exist in the
/// closed-form dynamics layer.
pub fn masked_uniform_init(task: &PreferenceTask) -> PolicyTable {
    PolicyTable::uniform(task.n_prompts(), task.n_responses())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn fd_jacobian(s: &[f64], h: f64) -> Vec<Vec<f64>> {
        let n = s.len();
        let mut out = vec![vec![0.0; n]; n];
        for j in 0..n {
            let mut up = s.to_vec();
            let mut dn = s.to_vec();
            up[j] += h;
            dn[j] -= h;
            let (pu, pd) = (softmax(&up), softmax(&dn));
            for i in 0..n {
                out[i][j] = (pu[i] - pd[i]) / (2.0 * h);
            }
        }
        out
    }

    #[test]
    fn equal_logits_give_uniform() {
        let p = softmax(&[3.0; 4]);
        for v in p {
            assert!((v - 0.25).abs() < 1e-15);
        }
    }

    #[test]
    fn ln2_logit_gives_one_third_two_thirds() {
        let p = softmax(&[0.0, 2f64.ln()]);
        assert!((p[0] - 1.0 / 3.0).abs() < 1e-15);
        assert!((p[1] - 2.0 / 3.0).abs() < 1e-15);
    }

    #[test]
    fn huge_logits_stay_finite() {
        let p = softmax(&[1000.0, 999.0]);
        assert!(p.iter().all(|v| v.is_finite()));
        assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn jacobian_two_point() {
        let j = softmax_jacobian(&[0.5, 0.5]);
        assert_eq!(j, vec![vec![0.25, -0.25], vec![-0.25, 0.25]]);
        let fd = fd_jacobian(&[0.0, 0.0], 1e-5);
        for (a, b) in j.iter().flatten().zip(fd.iter().flatten()) {
            assert!((a - b).abs() < 1e-9);
        }
    }

    #[test]
    fn jacobian_rows_sum_to_zero() {
        let p = softmax(&[0.3, -1.2, 2.0, 0.0, 0.7]);
        for row in softmax_jacobian(&p) {
            assert!(row.iter().sum::<f64>().abs() < 1e-15);
        }
    }

    #[test]
    fn log_ratio_examples() {
        let pol = PolicyTable::new(vec![vec![2f64.ln(), 0.0]]).unwrap();
        let reference = PolicyTable::uniform(1, 2).freeze();
        let expected = 2f64.ln() - 1.5f64.ln();
        assert!((log_ratio(&pol, &reference, 0, 0) - expected).abs() < 1e-14);
        assert_eq!(log_ratio(&pol, &pol.freeze(), 0, 1), 0.0);
    }

    #[test]
    fn rejects_non_finite() {
        assert!(matches!(
            PolicyTable::new(vec![vec![0.0, f64::NAN]]),
            Err(Error::Numeric(_))
        ));
    }

    #[test]
    fn uniform_init_twenty() {
        let task = PreferenceTask::toy(20, 20, 0.6).unwrap();
        let pol = masked_uniform_init(&task);
        for x in 0..20 {
            let p = pol.probs(x);
            assert!(p.iter().all(|v| (v - 0.05).abs() < 1e-15));
        }
        assert_eq!(pol, masked_uniform_init(&task));
    }

    #[test]
    fn checkpoint_csv_round_trip() {
        let pol =
            PolicyTable::new(vec![vec![0.1, -2.5, 1.0 / 3.0], vec![0.0, 7.0, -1e-9]]).unwrap();
        let mut buf = Vec::new();
        pol.write_csv(&mut buf).unwrap();
        assert_eq!(PolicyTable::read_csv(buf.as_slice()).unwrap(), pol);
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        proptest! {
            #[test]
            fn shift_invariant(s in prop::collection::vec(-20.0f64..20.0, 2..12), c in -50.0f64..50.0) {
                let shifted: Vec<f64> = s.iter().map(|v| v + c).collect();
                for (a, b) in softmax(&s).iter().zip(softmax(&shifted)) {
                    prop_assert!((a - b).abs() < 1e-12);
                }
            }

            #[test]
            fn rows_are_stochastic(s in prop::collection::vec(-30.0f64..30.0, 2..30)) {
                let p = softmax(&s);
                prop_assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-12);
            }

            #[test]
            fn jacobian_matches_central_differences(s in prop::collection::vec(-3.0f64..3.0, 10)) {
                let j = softmax_jacobian(&softmax(&s));
                let fd = fd_jacobian(&s, 1e-5);
                for (a, b) in j.iter().flatten().zip(fd.iter().flatten()) {
                    prop_assert!((a - b).abs() < 1e-6);
                }
            }
        }
    }
}
