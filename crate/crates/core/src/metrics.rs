//! Open-set scores, the threshold detector, and evaluation metrics.
//!
//! Known samples are the positive class throughout. Every score is oriented
//! so that higher means "more likely known".

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::losses::normalized_entropy_row;
use crate::model::ForwardOutput;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScoreFunction {
    #[default]
    Msp,
    MaxLogit,
    Energy,
    Entropy,
}

impl ScoreFunction {
    pub const ALL: [ScoreFunction; 4] = [
        ScoreFunction::Msp,
        ScoreFunction::MaxLogit,
        ScoreFunction::Energy,
        ScoreFunction::Entropy,
    ];

    pub fn name(self) -> &'static str {
        match self {
            ScoreFunction::Msp => "msp",
            ScoreFunction::MaxLogit => "max_logit",
            ScoreFunction::Energy => "energy",
            ScoreFunction::Entropy => "entropy",
        }
    }
}

impl std::str::FromStr for ScoreFunction {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        ScoreFunction::ALL
            .into_iter()
            .find(|k| k.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown score function {s:?}")))
    }
}

fn logsumexp(row: &[f64]) -> f64 {
    let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    m + row.iter().map(|v| (v - m).exp()).sum::<f64>().ln()
}

/// Score of one sample from its fused probabilities and logits.
pub fn score_row(kind: ScoreFunction, probs: &[f64], logits: &[f64]) -> f64 {
    match kind {
        ScoreFunction::Msp => probs.iter().cloned().fold(f64::NEG_INFINITY, f64::max),
        ScoreFunction::MaxLogit => logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max),
        ScoreFunction::Energy => logsumexp(logits),
        ScoreFunction::Entropy => -normalized_entropy_row(probs),
    }
}

pub fn score(output: &ForwardOutput, kind: ScoreFunction) -> Vec<f64> {
    output
        .fused_probs
        .row_iter()
        .zip(output.fused_logits.row_iter())
        .map(|(p, l)| score_row(kind, p, l))
        .collect()
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct DetectorConfig {
    pub eta: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Detection {
    Known,
    Unknown,
}

/// Known iff `score >= eta`.
pub fn detect(scores: &[f64], cfg: DetectorConfig) -> Vec<Detection> {
    scores
        .iter()
        .map(|&s| {
            if s >= cfg.eta {
                Detection::Known
            } else {
                Detection::Unknown
            }
        })
        .collect()
}

/// Lower-interpolated empirical quantile, `q` in `[0,1]`.
pub fn quantile(values: &[f64], q: f64) -> Result<f64> {
    if values.is_empty() {
        return Err(Error::MetricUndefined("quantile of empty set".into()));
    }
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let idx = ((v.len() - 1) as f64 * q.clamp(0.0, 1.0)).floor() as usize;
    Ok(v[idx])
}

/// Scores of one evaluation pool, split by ground truth.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct EvalSet {
    pub known_scores: Vec<f64>,
    pub unknown_scores: Vec<f64>,
    pub known_correct: Vec<bool>,
}

impl EvalSet {
    pub fn metrics(&self) -> Result<OpenSetMetrics> {
        let acc = accuracy(&self.known_correct)?;
        let auroc = auroc(&self.known_scores, &self.unknown_scores)?;
        let fpr95 = fpr_at_tpr(&self.known_scores, &self.unknown_scores, 0.95)?;
        let (h, _) = h_score(acc, fpr95, auroc);
        Ok(OpenSetMetrics {
            acc,
            fpr95,
            auroc,
            h_score: h,
        })
    }

    pub fn extend(&mut self, other: &EvalSet) {
        self.known_scores.extend_from_slice(&other.known_scores);
        self.unknown_scores.extend_from_slice(&other.unknown_scores);
        self.known_correct.extend_from_slice(&other.known_correct);
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct OpenSetMetrics {
    pub acc: f64,
    pub fpr95: f64,
    pub auroc: f64,
    pub h_score: f64,
}

fn check_pools(known: &[f64], unknown: &[f64]) -> Result<()> {
    if known.is_empty() || unknown.is_empty() {
        return Err(Error::MetricUndefined(format!(
            "need both pools non-empty (known {}, unknown {})",
            known.len(),
            unknown.len()
        )));
    }
    Ok(())
}

/// Probability that a random known sample outscores a random unknown one,
/// ties counted one half. Sort-based, `O(n log n)`.
pub fn auroc(known: &[f64], unknown: &[f64]) -> Result<f64> {
    check_pools(known, unknown)?;
    let mut u = unknown.to_vec();
    u.sort_by(f64::total_cmp);
    // 2 * (#unknown < k) + (#unknown == k), summed over known k
    let mut twice: u128 = 0;
    for &k in known {
        let below = u.partition_point(|&x| x < k);
        let not_above = u.partition_point(|&x| x <= k);
        twice += (2 * below + (not_above - below)) as u128;
    }
    let pairs = known.len() as u128 * unknown.len() as u128;
    Ok(twice as f64 / (2 * pairs) as f64)
}

/// False-positive rate on unknowns at the largest threshold that keeps at
/// least `tpr_target` of knowns at or above it.
pub fn fpr_at_tpr(known: &[f64], unknown: &[f64], tpr_target: f64) -> Result<f64> {
    check_pools(known, unknown)?;
    let mut k = known.to_vec();
    k.sort_by(|a, b| b.total_cmp(a));
    // walk tie groups from the top; the first group whose cumulative count
    // reaches the target fixes the threshold
    let n = k.len();
    let mut t = k[n - 1];
    let mut start = 0;
    while start < n {
        let mut end = start;
        while end + 1 < n && k[end + 1] == k[start] {
            end += 1;
        }
        if (end + 1) as f64 / n as f64 >= tpr_target {
            t = k[start];
            break;
        }
        start = end + 1;
    }
    let fp = unknown.iter().filter(|&&s| s >= t).count();
    Ok(fp as f64 / unknown.len() as f64)
}

/// Harmonic mean of `acc`, `auroc` and `1 - fpr95`.
///
/// Returns `(0.0, true)` when any term is zero (degenerate mean).
pub fn h_score(acc: f64, fpr95: f64, auroc: f64) -> (f64, bool) {
    let terms = [acc, auroc, 1.0 - fpr95];
    if terms.iter().any(|&t| t <= 0.0) {
        return (0.0, true);
    }
    (3.0 / terms.iter().map(|t| 1.0 / t).sum::<f64>(), false)
}

pub fn accuracy(known_correct: &[bool]) -> Result<f64> {
    if known_correct.is_empty() {
        return Err(Error::MetricUndefined("accuracy over zero known samples".into()));
    }
    Ok(known_correct.iter().filter(|&&c| c).count() as f64 / known_correct.len() as f64)
}

/// Pearson correlation; `None` when either side has zero variance.
pub fn pearson(x: &[f64], y: &[f64]) -> Option<f64> {
    if x.len() != y.len() || x.len() < 2 {
        return None;
    }
    if x.iter().all(|&v| v == x[0]) || y.iter().all(|&v| v == y[0]) {
        return None;
    }
    let n = x.len() as f64;
    let mx = x.iter().sum::<f64>() / n;
    let my = y.iter().sum::<f64>() / n;
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (a, b) in x.iter().zip(y) {
        sxy += (a - mx) * (b - my);
        sxx += (a - mx) * (a - mx);
        syy += (b - my) * (b - my);
    }
    if sxx == 0.0 || syy == 0.0 {
        return None;
    }
    Some((sxy / (sxx.sqrt() * syy.sqrt())).clamp(-1.0, 1.0))
}

/// Equal-width histogram over `[lo, hi]`; the last bin is closed.
pub fn histogram(values: &[f64], lo: f64, hi: f64, bins: usize) -> Vec<usize> {
    let mut counts = vec![0; bins];
    let width = (hi - lo) / bins as f64;
    for &v in values {
        let idx = if width > 0.0 {
            (((v - lo) / width).floor() as isize).clamp(0, bins as isize - 1) as usize
        } else {
            0
        };
        counts[idx] += 1;
    }
    counts
}

#[cfg(test)]
mod tests {
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    use super::*;
    use crate::Array;

    fn brute_auroc(known: &[f64], unknown: &[f64]) -> f64 {
        let mut s = 0.0;
        for &k in known {
            for &u in unknown {
                s += if k > u {
                    1.0
                } else if k == u {
                    0.5
                } else {
                    0.0
                };
            }
        }
        s / (known.len() * unknown.len()) as f64
    }

    fn brute_fpr(known: &[f64], unknown: &[f64], target: f64) -> f64 {
        let mut best: Option<f64> = None;
        for &t in known.iter().chain(unknown) {
            let tpr = known.iter().filter(|&&k| k >= t).count() as f64 / known.len() as f64;
            if tpr >= target && best.is_none_or(|b| t > b) {
                best = Some(t);
            }
        }
        let t = best.unwrap();
        unknown.iter().filter(|&&u| u >= t).count() as f64 / unknown.len() as f64
    }

    fn output(probs: Vec<Vec<f64>>, logits: Vec<Vec<f64>>) -> ForwardOutput {
        ForwardOutput {
            fused_logits: Array::from_rows(&logits).unwrap(),
            fused_probs: Array::from_rows(&probs).unwrap(),
            modality_logits: vec![],
            modality_probs: vec![],
            embeddings: vec![],
        }
    }

    #[test]
    fn score_examples() {
        let out = output(
            vec![vec![0.25; 4], vec![0.0, 1.0, 0.0, 0.0]],
            vec![vec![0.0; 4], vec![1.0, 2.0, 3.0, -1.0]],
        );
        assert_eq!(score(&out, ScoreFunction::Msp)[0], 0.25);
        assert!(score(&out, ScoreFunction::Entropy)[1].abs() < 1e-10);
        let e = score_row(ScoreFunction::Energy, &[0.0; 3], &[1.0, 2.0, 3.0]);
        assert!((e - 3.40761).abs() < 1e-4);
        assert_eq!(score(&out, ScoreFunction::MaxLogit)[1], 3.0);
        assert!("bogus".parse::<ScoreFunction>().is_err());
        assert_eq!("max_logit".parse::<ScoreFunction>().unwrap(), ScoreFunction::MaxLogit);
    }

    #[test]
    fn detector_boundary() {
        let cfg = DetectorConfig { eta: 0.5 };
        assert_eq!(detect(&[0.5], cfg), vec![Detection::Known]);
        assert!(detect(&[0.1, 0.2, 0.49], cfg).iter().all(|d| *d == Detection::Unknown));
        let scores = [0.9, 0.3, 0.5, 0.51, -1.0];
        let manual: Vec<_> = scores
            .iter()
            .map(|&s| if s >= 0.5 { Detection::Known } else { Detection::Unknown })
            .collect();
        assert_eq!(detect(&scores, cfg), manual);
    }

    #[test]
    fn auroc_examples() {
        assert_eq!(auroc(&[0.9, 0.8], &[0.7, 0.1]).unwrap(), 1.0);
        assert_eq!(auroc(&[0.3, 0.6], &[0.3, 0.6]).unwrap(), 0.5);
        assert_eq!(auroc(&[0.9, 0.4], &[0.6, 0.2]).unwrap(), 0.75);
        assert!(matches!(auroc(&[], &[0.1]), Err(Error::MetricUndefined(_))));
    }

    #[test]
    fn fpr_examples() {
        let known: Vec<f64> = (0..20).map(|i| 0.8 + i as f64 * 0.01).collect();
        let unknown: Vec<f64> = (0..20).map(|i| 0.1 + i as f64 * 0.01).collect();
        assert_eq!(fpr_at_tpr(&known, &unknown, 0.95).unwrap(), 0.0);
        assert!(fpr_at_tpr(&known, &known, 0.95).unwrap() >= 0.95);
        assert!(fpr_at_tpr(&[], &[0.1], 0.95).is_err());
    }

    #[test]
    fn random_pools_match_brute_force() {
        let mut rng = ChaCha8Rng::seed_from_u64(42);
        for _ in 0..30 {
            // coarse grid forces ties
            let k: Vec<f64> = (0..20)
                .map(|_| (rng.random_range(0.0..1.0f64) * 10.0).round() / 10.0)
                .collect();
            let u: Vec<f64> = (0..20)
                .map(|_| (rng.random_range(0.0..1.0f64) * 10.0).round() / 10.0)
                .collect();
            assert_eq!(auroc(&k, &u).unwrap(), brute_auroc(&k, &u));
            assert_eq!(fpr_at_tpr(&k, &u, 0.95).unwrap(), brute_fpr(&k, &u, 0.95));
        }
    }

    #[test]
    fn h_score_table_rows() {
        let (h, flag) = h_score(0.4854, 0.8579, 0.5831);
        assert!(!flag);
        assert!((h - 0.2775).abs() < 3e-4);
        let (h, _) = h_score(0.4868, 0.2152, 0.9660);
        assert!((h - 0.6875).abs() < 3e-4);
        assert_eq!(h_score(1.0, 0.0, 1.0), (1.0, false));
        assert_eq!(h_score(0.5, 1.0, 0.5), (0.0, true));
    }

    #[test]
    fn accuracy_examples() {
        assert_eq!(accuracy(&[true, true]).unwrap(), 1.0);
        assert_eq!(accuracy(&[true, false, true, true]).unwrap(), 0.75);
        assert!(accuracy(&[]).is_err());
    }

    #[test]
    fn pearson_degenerate_cases() {
        assert!((pearson(&[1.0, 2.0], &[3.0, 5.0]).unwrap() - 1.0).abs() < 1e-12);
        assert!((pearson(&[1.0, 2.0], &[3.0, 1.0]).unwrap() + 1.0).abs() < 1e-12);
        assert_eq!(pearson(&[1.0, 1.0, 1.0], &[3.0, 1.0, 2.0]), None);
    }

    #[test]
    fn histogram_bins() {
        let h = histogram(&[0.0, 0.5, 1.0, 0.99], 0.0, 1.0, 2);
        assert_eq!(h, vec![1, 3]);
    }

    mod props {
        use proptest::prelude::*;

        use super::*;

        fn pools() -> impl Strategy<Value = (Vec<f64>, Vec<f64>)> {
            (
                proptest::collection::vec(-5.0f64..5.0, 1..100),
                proptest::collection::vec(-5.0f64..5.0, 1..100),
            )
        }

        proptest! {
            #[test]
            fn fast_metrics_match_brute_force((k, u) in pools()) {
                prop_assert_eq!(auroc(&k, &u).unwrap(), brute_auroc(&k, &u));
                prop_assert_eq!(fpr_at_tpr(&k, &u, 0.95).unwrap(), brute_fpr(&k, &u, 0.95));
            }

            #[test]
            fn auroc_antisymmetric((k, u) in pools()) {
                prop_assume!(k.iter().all(|a| !u.contains(a)));
                let s = auroc(&k, &u).unwrap() + auroc(&u, &k).unwrap();
                prop_assert!((s - 1.0).abs() < 1e-12);
            }

            #[test]
            fn monotone_transform_invariance((k, u) in pools()) {
                let f = |v: &Vec<f64>| v.iter().map(|x| 2.0 * x + 1.0).collect::<Vec<_>>();
                prop_assert_eq!(auroc(&k, &u).unwrap(), auroc(&f(&k), &f(&u)).unwrap());
                prop_assert_eq!(fpr_at_tpr(&k, &u, 0.95).unwrap(), fpr_at_tpr(&f(&k), &f(&u), 0.95).unwrap());
            }

            #[test]
            fn h_score_symmetric(a in 0.01f64..1.0, b in 0.01f64..1.0, c in 0.01f64..1.0) {
                // terms: acc, auroc, 1 - fpr
                let base = h_score(a, 1.0 - c, b).0;
                for (x, y, z) in [(b, a, c), (c, b, a), (a, c, b)] {
                    prop_assert!((h_score(x, 1.0 - z, y).0 - base).abs() < 1e-12);
                }
            }
        }
    }
}
