//! Small deterministic kernels shared by every other module.
//!
//! Everything here works in `f64`. Reductions run left to right over the
//! input so results do not depend on thread scheduling.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// A finite, non-empty vector of per-token values.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "Vec<f64>", into = "Vec<f64>")]
pub struct ScoreVector(Vec<f64>);

impl ScoreVector {
    pub fn new(values: Vec<f64>) -> Result<Self> {
        if values.is_empty() {
            return Err(Error::InvalidInput("score vector is empty".into()));
        }
        if let Some(i) = values.iter().position(|v| !v.is_finite()) {
            return Err(Error::InvalidInput(format!(
                "non-finite value {} at index {i}",
                values[i]
            )));
        }
        Ok(Self(values))
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn into_inner(self) -> Vec<f64> {
        self.0
    }
}

impl TryFrom<Vec<f64>> for ScoreVector {
    type Error = Error;

    fn try_from(values: Vec<f64>) -> Result<Self> {
        Self::new(values)
    }
}

impl From<ScoreVector> for Vec<f64> {
    fn from(v: ScoreVector) -> Self {
        v.0
    }
}

impl std::ops::Deref for ScoreVector {
    type Target = [f64];

    fn deref(&self) -> &[f64] {
        &self.0
    }
}

/// Ranks in descending-score order (rank 1 = largest), ties averaged.
#[derive(Debug, Clone, PartialEq)]
pub struct RankVector(Vec<f64>);

impl RankVector {
    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }
}

impl std::ops::Deref for RankVector {
    type Target = [f64];

    fn deref(&self) -> &[f64] {
        &self.0
    }
}

/// Numerically stable softmax (max-subtracted).
pub fn softmax(logits: &[f64]) -> Result<ScoreVector> {
    if logits.is_empty() {
        return Err(Error::InvalidInput("softmax of empty slice".into()));
    }
    if logits.iter().any(|v| !v.is_finite()) {
        return Err(Error::InvalidInput("softmax input is not finite".into()));
    }
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|&v| (v - max).exp()).collect();
    let total: f64 = exps.iter().sum();
    Ok(ScoreVector(exps.into_iter().map(|e| e / total).collect()))
}

/// In-place softmax used by the simulator's hot loop. Input must be finite.
pub(crate) fn softmax_in_place(row: &mut [f64]) {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut total = 0.0;
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        total += *v;
    }
    for v in row.iter_mut() {
        *v /= total;
    }
}

pub fn mean(values: &[f64]) -> Option<f64> {
    if values.is_empty() {
        None
    } else {
        Some(values.iter().sum::<f64>() / values.len() as f64)
    }
}

/// Descending ranks with average-rank tie handling.
pub fn descending_ranks(scores: &[f64]) -> RankVector {
    let n = scores.len();
    let mut order: Vec<usize> = (0..n).collect();
    // Stable sort, descending; NaN cannot occur for a ScoreVector.
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]));

    let mut ranks = vec![0.0; n];
    let mut start = 0;
    while start < n {
        let mut end = start + 1;
        while end < n && scores[order[end]] == scores[order[start]] {
            end += 1;
        }
        // positions start..end hold ranks start+1..=end
        let avg = (start + 1 + end) as f64 / 2.0;
        for &idx in &order[start..end] {
            ranks[idx] = avg;
        }
        start = end;
    }
    RankVector(ranks)
}

/// Pearson correlation coefficient.
///
/// A constant argument is reported as `DegenerateVariance` rather than
/// collapsed to zero.
pub fn pearson(x: &[f64], y: &[f64]) -> Result<f64> {
    if x.len() != y.len() {
        return Err(Error::InvalidInput(format!(
            "length mismatch: {} vs {}",
            x.len(),
            y.len()
        )));
    }
    if x.len() < 2 {
        return Err(Error::InvalidInput(
            "pearson needs at least two observations".into(),
        ));
    }
    if x.iter().chain(y).any(|v| !v.is_finite()) {
        return Err(Error::InvalidInput("pearson input is not finite".into()));
    }
    let n = x.len() as f64;
    let mx = x.iter().sum::<f64>() / n;
    let my = y.iter().sum::<f64>() / n;
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (&a, &b) in x.iter().zip(y) {
        let da = a - mx;
        let db = b - my;
        sxy += da * db;
        sxx += da * da;
        syy += db * db;
    }
    if sxx == 0.0 {
        return Err(Error::DegenerateVariance("first sequence is constant".into()));
    }
    if syy == 0.0 {
        return Err(Error::DegenerateVariance(
            "second sequence is constant".into(),
        ));
    }
    Ok((sxy / (sxx.sqrt() * syy.sqrt())).clamp(-1.0, 1.0))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn close(a: &[f64], b: &[f64], tol: f64) -> bool {
        a.len() == b.len() && a.iter().zip(b).all(|(x, y)| (x - y).abs() <= tol)
    }

    #[test]
    fn softmax_examples() {
        let s = softmax(&[0.0, 0.0, 0.0]).unwrap();
        assert!(close(&s, &[1.0 / 3.0; 3], 1e-15));

        let s = softmax(&[0.0, 3f64.ln()]).unwrap();
        assert!(close(&s, &[0.25, 0.75], 1e-15));

        let a = softmax(&[1000.0, 1001.0]).unwrap();
        let b = softmax(&[0.0, 1.0]).unwrap();
        assert!(close(&a, &b, 1e-15));
        assert!((a[0] - 0.268_941_421_369_995_1).abs() < 1e-12);
        assert!((a[1] - 0.731_058_578_630_004_9).abs() < 1e-12);
    }

    #[test]
    fn softmax_rejects_bad_input() {
        assert!(matches!(softmax(&[]), Err(Error::InvalidInput(_))));
        assert!(matches!(softmax(&[0.0, f64::NAN]), Err(Error::InvalidInput(_))));
        assert!(matches!(
            softmax(&[f64::INFINITY]),
            Err(Error::InvalidInput(_))
        ));
    }

    #[test]
    fn rank_examples() {
        assert_eq!(descending_ranks(&[3.0, 1.0, 2.0]).as_slice(), &[1.0, 3.0, 2.0]);
        assert_eq!(
            descending_ranks(&[0.5, 0.2, 0.5]).as_slice(),
            &[1.5, 3.0, 1.5]
        );
        assert_eq!(descending_ranks(&[7.0]).as_slice(), &[1.0]);
    }

    #[test]
    fn pearson_examples() {
        assert!((pearson(&[1.0, 2.0, 3.0], &[1.0, 2.0, 3.0]).unwrap() - 1.0).abs() < 1e-15);
        assert!((pearson(&[1.0, 2.0, 3.0], &[3.0, 2.0, 1.0]).unwrap() + 1.0).abs() < 1e-15);
        // cov = 1, var_x = var_y = 2  ->  1 / 2
        assert!((pearson(&[1.0, 3.0, 2.0], &[1.0, 2.0, 3.0]).unwrap() - 0.5).abs() < 1e-15);
    }

    #[test]
    fn pearson_errors() {
        assert!(matches!(
            pearson(&[1.0, 2.0], &[1.0, 2.0, 3.0]),
            Err(Error::InvalidInput(_))
        ));
        assert!(matches!(pearson(&[1.0], &[1.0]), Err(Error::InvalidInput(_))));
        assert!(matches!(
            pearson(&[2.0, 2.0, 2.0], &[1.0, 2.0, 3.0]),
            Err(Error::DegenerateVariance(_))
        ));
        assert!(matches!(
            pearson(&[1.0, 2.0, 3.0], &[0.0, 0.0, 0.0]),
            Err(Error::DegenerateVariance(_))
        ));
    }

    #[test]
    fn score_vector_validation() {
        assert!(ScoreVector::new(vec![]).is_err());
        assert!(ScoreVector::new(vec![1.0, f64::NAN]).is_err());
        let v: ScoreVector = serde_json::from_str("[0.5, 0.25]").unwrap();
        assert_eq!(v.as_slice(), &[0.5, 0.25]);
        assert!(serde_json::from_str::<ScoreVector>("[]").is_err());
    }

    /// Rank of u = 1 + #strictly greater + (#equal, excluding u) / 2.
    fn quadratic_ranks(v: &[f64]) -> Vec<f64> {
        v.iter()
            .enumerate()
            .map(|(i, &a)| {
                let greater = v.iter().filter(|&&b| b > a).count() as f64;
                let ties = v
                    .iter()
                    .enumerate()
                    .filter(|&(j, &b)| j != i && b == a)
                    .count() as f64;
                1.0 + greater + ties / 2.0
            })
            .collect()
    }

    fn vec_with_dups() -> impl Strategy<Value = Vec<f64>> {
        prop::collection::vec(0u8..12, 1..64)
            .prop_map(|v| v.into_iter().map(|x| x as f64 * 0.25).collect())
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(1000))]

        #[test]
        fn ranks_match_quadratic_oracle(v in vec_with_dups()) {
            let fast = descending_ranks(&v);
            let slow = quadratic_ranks(&v);
            prop_assert_eq!(fast.as_slice(), slow.as_slice());
            let n = v.len() as f64;
            let total: f64 = fast.iter().sum();
            prop_assert!((total - n * (n + 1.0) / 2.0).abs() < 1e-9);
        }
    }

    proptest! {
        #[test]
        fn softmax_normalised_and_shift_invariant(
            v in prop::collection::vec(-50.0f64..50.0, 1..40),
            c in -500.0f64..500.0,
        ) {
            let s = softmax(&v).unwrap();
            prop_assert!((s.iter().sum::<f64>() - 1.0).abs() < 1e-6);
            prop_assert!(s.iter().all(|&p| p >= 0.0));
            let shifted: Vec<f64> = v.iter().map(|x| x + c).collect();
            let t = softmax(&shifted).unwrap();
            for (a, b) in s.iter().zip(t.iter()) {
                prop_assert!((a - b).abs() <= 1e-9);
            }
        }

        #[test]
        fn pearson_symmetric_and_affine_invariant(
            pairs in prop::collection::vec((-10.0f64..10.0, -10.0f64..10.0), 3..50),
            scale in 0.1f64..10.0,
            shift in -5.0f64..5.0,
        ) {
            let x: Vec<f64> = pairs.iter().map(|p| p.0).collect();
            let y: Vec<f64> = pairs.iter().map(|p| p.1).collect();
            let r = pearson(&x, &y).unwrap();
            prop_assert!((-1.0..=1.0).contains(&r));
            prop_assert!((r - pearson(&y, &x).unwrap()).abs() < 1e-12);
            let xt: Vec<f64> = x.iter().map(|v| v * scale + shift).collect();
            prop_assert!((r - pearson(&xt, &y).unwrap()).abs() < 1e-9);
        }
    }
}
