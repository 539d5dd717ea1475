//! Budgeted top-U selection and sequence pruning.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scoring::ImportanceScore;

/// Kept visual-token indices, ascending. Ties in score go to the lower index.
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct TokenSelection {
    budget: usize,
    n_visual: usize,
    kept: Vec<usize>,
}

impl TokenSelection {
    /// Rebuilds a selection from parts, checking its invariants.
    pub fn from_parts(budget: usize, n_visual: usize, kept: Vec<usize>) -> Result<Self> {
        if budget == 0 {
            return Err(Error::InvalidBudget);
        }
        if kept.len() != budget.min(n_visual) {
            return Err(Error::SelectionMismatch(format!(
                "{} kept indices for budget {budget} over {n_visual} tokens",
                kept.len()
            )));
        }
        if kept.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::SelectionMismatch(
                "kept indices must be strictly increasing".into(),
            ));
        }
        if kept.last().is_some_and(|&i| i >= n_visual) {
            return Err(Error::SelectionMismatch(format!(
                "index out of range for {n_visual} tokens"
            )));
        }
        Ok(Self {
            budget,
            n_visual,
            kept,
        })
    }

    /// Keeps every one of `n_visual` tokens.
    pub fn all(n_visual: usize) -> Result<Self> {
        Self::from_parts(n_visual, n_visual, (0..n_visual).collect())
    }

    pub fn budget(&self) -> usize {
        self.budget
    }

    pub fn n_visual(&self) -> usize {
        self.n_visual
    }

    pub fn kept(&self) -> &[usize] {
        &self.kept
    }

    pub fn len(&self) -> usize {
        self.kept.len()
    }

    pub fn is_empty(&self) -> bool {
        self.kept.is_empty()
    }

    pub fn contains(&self, index: usize) -> bool {
        self.kept.binary_search(&index).is_ok()
    }

    pub fn keeps_everything(&self) -> bool {
        self.kept.len() == self.n_visual
    }
}

/// Top-`budget` indices of `scores`, returned in positional order.
pub fn top_u(scores: &ImportanceScore, budget: usize) -> Result<TokenSelection> {
    top_u_values(scores.scores(), budget)
}

pub(crate) fn top_u_values(values: &[f64], budget: usize) -> Result<TokenSelection> {
    if budget == 0 {
        return Err(Error::InvalidBudget);
    }
    let n = values.len();
    let mut order: Vec<usize> = (0..n).collect();
    if budget < n {
        let by_rank = |&a: &usize, &b: &usize| values[b].total_cmp(&values[a]).then(a.cmp(&b));
        order.select_nth_unstable_by(budget - 1, by_rank);
        order.truncate(budget);
    }
    order.sort_unstable();
    Ok(TokenSelection {
        budget,
        n_visual: n,
        kept: order,
    })
}

/// Keeps `tokens[i]` for each kept index, preserving order.
pub fn prune_sequence<T: Clone>(tokens: &[T], selection: &TokenSelection) -> Result<Vec<T>> {
    if let Some(&last) = selection.kept.last() {
        if last >= tokens.len() {
            return Err(Error::SelectionMismatch(format!(
                "index {last} out of range for sequence of length {}",
                tokens.len()
            )));
        }
    }
    Ok(selection.kept.iter().map(|&i| tokens[i].clone()).collect())
}

/// Where in the pipeline the selection is applied.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum PruneLocation {
    /// Drop tokens before the language model sees them.
    BeforeLlm,
    /// Run the first `layer` decoder layers on every visual token, then drop.
    AfterLlmLayer { layer: usize },
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct PrunePlan {
    #[serde(flatten)]
    selection: TokenSelection,
    location: PruneLocation,
}

impl PrunePlan {
    pub fn new(selection: TokenSelection, location: PruneLocation) -> Result<Self> {
        if location == (PruneLocation::AfterLlmLayer { layer: 0 }) {
            return Err(Error::InvalidInput(
                "deferred prune layer must be at least 1".into(),
            ));
        }
        Ok(Self {
            selection,
            location,
        })
    }

    pub fn selection(&self) -> &TokenSelection {
        &self.selection
    }

    pub fn location(&self) -> PruneLocation {
        self.location
    }

    /// Number of decoder layers that still see every visual token.
    pub fn full_layers(&self) -> usize {
        match self.location {
            PruneLocation::BeforeLlm => 0,
            PruneLocation::AfterLlmLayer { layer } => layer,
        }
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("plan serialisation is infallible")
    }

    pub fn from_json(text: &str) -> Result<Self> {
        #[derive(Deserialize)]
        struct Raw {
            budget: usize,
            n_visual: usize,
            kept: Vec<usize>,
            location: PruneLocation,
        }
        let raw: Raw =
            serde_json::from_str(text).map_err(|e| Error::Format(format!("plan json: {e}")))?;
        PrunePlan::new(
            TokenSelection::from_parts(raw.budget, raw.n_visual, raw.kept)?,
            raw.location,
        )
    }
}

/// Top-U selection from encoder-derived scores, tagged with a prune location.
pub fn make_prune_plan(
    scores: &ImportanceScore,
    budget: usize,
    location: PruneLocation,
) -> Result<PrunePlan> {
    PrunePlan::new(top_u(scores, budget)?, location)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numeric::ScoreVector;
    use crate::scoring::ScoreSource;
    use proptest::prelude::*;

    fn score(values: &[f64]) -> ImportanceScore {
        ImportanceScore::new(
            ScoreVector::new(values.to_vec()).unwrap(),
            ScoreSource::DecoderLayer { layer: 0 },
        )
        .unwrap()
    }

    #[test]
    fn top_u_examples() {
        assert_eq!(top_u(&score(&[0.2, 0.5, 0.3]), 2).unwrap().kept(), &[1, 2]);
        assert_eq!(top_u(&score(&[0.5, 0.5, 0.1]), 1).unwrap().kept(), &[0]);
        assert_eq!(top_u(&score(&[0.1, 0.5, 0.5]), 1).unwrap().kept(), &[1]);
        assert_eq!(
            top_u(&score(&[0.3, 0.3, 0.3, 0.3]), 2).unwrap().kept(),
            &[0, 1]
        );
        let all = top_u(&score(&[0.2, 0.5, 0.3]), 10).unwrap();
        assert_eq!(all.kept(), &[0, 1, 2]);
        assert_eq!(all.budget(), 10);
        assert!(matches!(
            top_u(&score(&[0.2]), 0),
            Err(Error::InvalidBudget)
        ));
    }

    #[test]
    fn prune_examples() {
        let toks = ["t0", "t1", "t2", "t3"];
        let sel = TokenSelection::from_parts(2, 4, vec![0, 2]).unwrap();
        assert_eq!(prune_sequence(&toks, &sel).unwrap(), vec!["t0", "t2"]);
        let all = TokenSelection::all(4).unwrap();
        assert_eq!(prune_sequence(&toks, &all).unwrap(), toks.to_vec());

        let sel = TokenSelection::from_parts(1, 4, vec![3]).unwrap();
        assert!(matches!(
            prune_sequence(&toks[..3], &sel),
            Err(Error::SelectionMismatch(_))
        ));
    }

    #[test]
    fn from_parts_checks_invariants() {
        assert!(TokenSelection::from_parts(2, 4, vec![2, 1]).is_err());
        assert!(TokenSelection::from_parts(2, 4, vec![1, 1]).is_err());
        assert!(TokenSelection::from_parts(2, 4, vec![1]).is_err());
        assert!(TokenSelection::from_parts(2, 4, vec![1, 4]).is_err());
        assert!(matches!(
            TokenSelection::from_parts(0, 4, vec![]),
            Err(Error::InvalidBudget)
        ));
    }

    #[test]
    fn plan_locations_share_selection() {
        let s = score(&[0.9, 0.1, 0.4, 0.7, 0.2]);
        let before = make_prune_plan(&s, 2, PruneLocation::BeforeLlm).unwrap();
        let after = make_prune_plan(&s, 2, PruneLocation::AfterLlmLayer { layer: 2 }).unwrap();
        assert_eq!(before.selection(), after.selection());
        assert_eq!(before.full_layers(), 0);
        assert_eq!(after.full_layers(), 2);
        assert!(make_prune_plan(&s, 2, PruneLocation::AfterLlmLayer { layer: 0 }).is_err());
    }

    #[test]
    fn plan_json() {
        let s = score(&[0.9, 0.1, 0.4, 0.7, 0.2]);
        let plan = make_prune_plan(&s, 2, PruneLocation::AfterLlmLayer { layer: 2 }).unwrap();
        let text = plan.to_json();
        let v: serde_json::Value = serde_json::from_str(&text).unwrap();
        assert_eq!(v["budget"], 2);
        assert_eq!(v["kept"], serde_json::json!([0, 3]));
        assert_eq!(v["location"]["kind"], "after_llm_layer");
        assert_eq!(v["location"]["layer"], 2);
        assert_eq!(PrunePlan::from_json(&text).unwrap(), plan);
        assert!(PrunePlan::from_json(r#"{"budget":2,"n_visual":3,"kept":[2,0],"location":{"kind":"before_llm"}}"#).is_err());
    }

    fn sort_oracle(values: &[f64], u: usize) -> Vec<usize> {
        let mut idx: Vec<usize> = (0..values.len()).collect();
        // stable sort keeps lower index first among equals
        idx.sort_by(|&a, &b| values[b].partial_cmp(&values[a]).unwrap());
        let mut top: Vec<usize> = idx.into_iter().take(u).collect();
        top.sort();
        top
    }

    proptest! {
        #[test]
        fn matches_sort_oracle(
            values in prop::collection::vec(0u8..20, 1..80),
            u in 1usize..90,
        ) {
            let v: Vec<f64> = values.iter().map(|&x| x as f64 / 20.0).collect();
            let sel = top_u(&score(&v), u).unwrap();
            let oracle = sort_oracle(&v, u);
            prop_assert_eq!(sel.kept(), oracle.as_slice());
            prop_assert_eq!(sel.len(), u.min(v.len()));
        }

        #[test]
        fn monotone_transform_keeps_set(
            v in prop::collection::vec(0.0f64..1.0, 1..60),
            u in 1usize..60,
        ) {
            let t: Vec<f64> = v.iter().map(|x| (3.0 * x).exp() + 2.0).collect();
            prop_assert_eq!(top_u(&score(&v), u).unwrap(), top_u(&score(&t), u).unwrap());
        }

        #[test]
        fn pruning_then_keep_all_is_idempotent(
            v in prop::collection::vec(0.0f64..1.0, 1..40),
            u in 1usize..40,
        ) {
            let tokens: Vec<usize> = (100..100 + v.len()).collect();
            let sel = top_u(&score(&v), u).unwrap();
            let once = prune_sequence(&tokens, &sel).unwrap();
            let all = TokenSelection::all(once.len()).unwrap();
            prop_assert_eq!(prune_sequence(&once, &all).unwrap(), once);
        }
    }
}
