//! Layer importance from consecutive-boundary CKA, and layer selection.

use std::collections::BTreeSet;
use std::fmt;

use rayon::prelude::*;

use crate::arch::Architecture;
use crate::error::{Error, Result};
use crate::similarity::{cka, CkaResult, RepresentationMatrix, TokenRule};

/// Representations `R_0..R_M` for one model and dataset. `R_0` is the
/// embedding output, `R_i` the output of layer `i`.
#[derive(Debug, Clone, PartialEq)]
pub struct RepresentationSet {
    matrices: Vec<RepresentationMatrix>,
    architecture: Architecture,
    model_id: String,
    sample_count: usize,
}

pub fn token_rule_for(architecture: Architecture) -> TokenRule {
    match architecture {
        Architecture::EncoderOnly => TokenRule::Cls,
        Architecture::DecoderOnly => TokenRule::LastToken,
    }
}

impl RepresentationSet {
    pub fn new(
        matrices: Vec<RepresentationMatrix>,
        architecture: Architecture,
        model_id: impl Into<String>,
    ) -> Result<Self> {
        if matrices.len() < 2 {
            return Err(Error::Invalid(format!(
                "a representation set needs R_0..R_M with M >= 1, got {} matrices",
                matrices.len()
            )));
        }
        let p = matrices[0].samples();
        let rule = token_rule_for(architecture);
        for (i, m) in matrices.iter().enumerate() {
            if m.layer_index() != i {
                return Err(Error::Invalid(format!(
                    "entry {i} has layer_index {}",
                    m.layer_index()
                )));
            }
            if m.samples() != p {
                return Err(Error::DimensionMismatch(format!(
                    "R_{i} has {} samples, R_0 has {p}",
                    m.samples()
                )));
            }
            if m.token_rule() != rule {
                return Err(Error::Invalid(format!(
                    "R_{i} uses token rule {} but {architecture} requires {}",
                    m.token_rule().as_str(),
                    rule.as_str()
                )));
            }
        }
        Ok(Self {
            matrices,
            architecture,
            model_id: model_id.into(),
            sample_count: p,
        })
    }

    pub fn matrices(&self) -> &[RepresentationMatrix] {
        &self.matrices
    }

    /// Number of transformer layers `M`.
    pub fn layer_count(&self) -> usize {
        self.matrices.len() - 1
    }

    pub fn architecture(&self) -> Architecture {
        self.architecture
    }

    pub fn model_id(&self) -> &str {
        &self.model_id
    }

    pub fn sample_count(&self) -> usize {
        self.sample_count
    }

    pub fn token_rule(&self) -> TokenRule {
        token_rule_for(self.architecture)
    }
}

/// Per-layer importance `I_i = 1 - CKA(R_{i-1}, R_i)`, 1-based.
#[derive(Debug, Clone, PartialEq)]
pub struct ImportanceVector {
    /// `scores[i - 1]` is the importance of layer `i`.
    pub scores: Vec<f64>,
    /// `cka[i - 1]` is the CKA result behind `scores[i - 1]`.
    pub cka: Vec<CkaResult>,
    pub degenerate_layers: BTreeSet<usize>,
    pub architecture: Architecture,
    pub model_id: String,
}

impl ImportanceVector {
    /// Builds a vector from raw scores, e.g. when re-reading a report.
    pub fn from_scores(
        scores: Vec<f64>,
        degenerate_layers: BTreeSet<usize>,
        architecture: Architecture,
        model_id: impl Into<String>,
    ) -> Result<Self> {
        if scores.is_empty() {
            return Err(Error::Invalid("importance vector is empty".into()));
        }
        if let Some(s) = scores.iter().find(|s| !(0.0..=1.0).contains(*s)) {
            return Err(Error::Invalid(format!(
                "importance score {s} outside [0, 1]"
            )));
        }
        let m = scores.len();
        if let Some(l) = degenerate_layers.iter().find(|&&l| l == 0 || l > m) {
            return Err(Error::Invalid(format!(
                "degenerate layer {l} outside 1..={m}"
            )));
        }
        let cka = scores
            .iter()
            .enumerate()
            .map(|(i, s)| CkaResult {
                value: if degenerate_layers.contains(&(i + 1)) {
                    0.0
                } else {
                    1.0 - s
                },
                degenerate: degenerate_layers.contains(&(i + 1)),
                hsic_xy: f64::NAN,
                hsic_xx: f64::NAN,
                hsic_yy: f64::NAN,
            })
            .collect();
        Ok(Self {
            scores,
            cka,
            degenerate_layers,
            architecture,
            model_id: model_id.into(),
        })
    }

    pub fn layer_count(&self) -> usize {
        self.scores.len()
    }
}

pub fn layer_importance(reps: &RepresentationSet) -> Result<ImportanceVector> {
    let m = reps.matrices();
    let results: Vec<CkaResult> = (1..m.len())
        .into_par_iter()
        .map(|i| cka(&m[i - 1], &m[i]))
        .collect::<Result<_>>()?;
    let scores = results.iter().map(|r| 1.0 - r.value).collect();
    let degenerate_layers = results
        .iter()
        .enumerate()
        .filter(|(_, r)| r.degenerate)
        .map(|(i, _)| i + 1)
        .collect();
    Ok(ImportanceVector {
        scores,
        cka: results,
        degenerate_layers,
        architecture: reps.architecture(),
        model_id: reps.model_id().to_string(),
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Strategy {
    CkaImportance,
    First,
    Last,
    Middle,
    Extremes,
    Alternate,
}

impl Strategy {
    pub const ALL: [Strategy; 6] = [
        Strategy::CkaImportance,
        Strategy::First,
        Strategy::Last,
        Strategy::Middle,
        Strategy::Extremes,
        Strategy::Alternate,
    ];

    pub const HEURISTICS: [Strategy; 5] = [
        Strategy::First,
        Strategy::Last,
        Strategy::Middle,
        Strategy::Extremes,
        Strategy::Alternate,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Strategy::CkaImportance => "cka",
            Strategy::First => "first",
            Strategy::Last => "last",
            Strategy::Middle => "middle",
            Strategy::Extremes => "extremes",
            Strategy::Alternate => "alternate",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        Strategy::ALL.into_iter().find(|k| k.as_str() == s)
    }
}

impl fmt::Display for Strategy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// The layers (1-based) that receive adapters.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SelectionPlan {
    pub selected: BTreeSet<usize>,
    pub strategy: Strategy,
    pub n_layers: usize,
    /// Total layer count `M` of the model the plan was made for.
    pub layer_count: usize,
    pub excluded_candidates: BTreeSet<usize>,
    pub model_id: String,
}

impl SelectionPlan {
    /// Checks the plan's internal invariants.
    pub fn validate(&self) -> Result<()> {
        if self.n_layers == 0 {
            return Err(Error::Selection("N must be at least 1".into()));
        }
        if self.selected.len() != self.n_layers {
            return Err(Error::Selection(format!(
                "plan lists {} layers but N = {}",
                self.selected.len(),
                self.n_layers
            )));
        }
        if let Some(l) = self
            .selected
            .iter()
            .find(|&&l| l == 0 || l > self.layer_count)
        {
            return Err(Error::Selection(format!(
                "layer {l} outside 1..={}",
                self.layer_count
            )));
        }
        if let Some(l) = self.selected.intersection(&self.excluded_candidates).next() {
            return Err(Error::Selection(format!(
                "layer {l} is both selected and excluded"
            )));
        }
        if self.n_layers + self.excluded_candidates.len() > self.layer_count {
            return Err(Error::Selection(format!(
                "N = {} exceeds the {} eligible layers",
                self.n_layers,
                self.layer_count - self.excluded_candidates.len()
            )));
        }
        Ok(())
    }

    /// A plan that adapts every layer.
    pub fn all_layers(layer_count: usize, model_id: impl Into<String>) -> Result<Self> {
        select_by_heuristic(Strategy::First, layer_count, layer_count).map(|mut p| {
            p.model_id = model_id.into();
            p
        })
    }
}

/// Top-`n` layers by importance. Layer 1 of encoder-only models and any
/// degenerate layer are not candidates; ties go to the lower index.
pub fn select_by_importance(iv: &ImportanceVector, n: usize) -> Result<SelectionPlan> {
    let m = iv.layer_count();
    let mut excluded = iv.degenerate_layers.clone();
    if iv.architecture == Architecture::EncoderOnly {
        excluded.insert(1);
    }
    let mut candidates: Vec<usize> = (1..=m).filter(|l| !excluded.contains(l)).collect();
    if n == 0 || n > candidates.len() {
        return Err(Error::Selection(format!(
            "N = {n} but only {} candidate layers are eligible",
            candidates.len()
        )));
    }
    candidates.sort_by(|&a, &b| {
        iv.scores[b - 1]
            .total_cmp(&iv.scores[a - 1])
            .then(a.cmp(&b))
    });
    let plan = SelectionPlan {
        selected: candidates.into_iter().take(n).collect(),
        strategy: Strategy::CkaImportance,
        n_layers: n,
        layer_count: m,
        excluded_candidates: excluded,
        model_id: iv.model_id.clone(),
    };
    plan.validate()?;
    Ok(plan)
}

/// Fixed, data-independent layer subsets.
pub fn select_by_heuristic(kind: Strategy, m: usize, n: usize) -> Result<SelectionPlan> {
    if n == 0 || n > m {
        return Err(Error::Selection(format!("N = {n} must lie in 1..={m}")));
    }
    let selected: BTreeSet<usize> = match kind {
        Strategy::CkaImportance => {
            return Err(Error::Selection(
                "CKA selection needs an importance vector".into(),
            ))
        }
        Strategy::First => (1..=n).collect(),
        Strategy::Last => (m - n + 1..=m).collect(),
        Strategy::Middle => {
            let start = (m - n) / 2 + 1;
            (start..start + n).collect()
        }
        Strategy::Extremes => {
            if !n.is_multiple_of(2) {
                return Err(Error::Selection(format!(
                    "extremes needs an even N, got {n}"
                )));
            }
            let half = n / 2;
            (1..=half).chain(m - half + 1..=m).collect()
        }
        Strategy::Alternate => {
            if n != m / 2 {
                return Err(Error::Selection(format!(
                    "alternate selects every second layer: N must be {}, got {n}",
                    m / 2
                )));
            }
            (1..=m).filter(|l| l % 2 == 0).collect()
        }
    };
    let plan = SelectionPlan {
        selected,
        strategy: kind,
        n_layers: n,
        layer_count: m,
        excluded_candidates: BTreeSet::new(),
        model_id: String::new(),
    };
    plan.validate()?;
    Ok(plan)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn iv(scores: &[f64], arch: Architecture, degenerate: &[usize]) -> ImportanceVector {
        ImportanceVector::from_scores(
            scores.to_vec(),
            degenerate.iter().copied().collect(),
            arch,
            "test",
        )
        .unwrap()
    }

    fn set(v: &[usize]) -> BTreeSet<usize> {
        v.iter().copied().collect()
    }

    #[test]
    fn tie_breaks_to_lower_index() {
        let plan = select_by_importance(
            &iv(&[0.9, 0.5, 0.5, 0.2], Architecture::DecoderOnly, &[]),
            2,
        )
        .unwrap();
        assert_eq!(plan.selected, set(&[1, 2]));
        assert_eq!(plan.strategy, Strategy::CkaImportance);
    }

    #[test]
    fn encoder_excludes_first_layer() {
        let mut scores = vec![0.1; 12];
        scores[0] = 1.0;
        scores[5] = 0.7;
        let plan = select_by_importance(&iv(&scores, Architecture::EncoderOnly, &[1]), 6).unwrap();
        assert!(!plan.selected.contains(&1));
        assert!(plan.selected.contains(&6));
        assert_eq!(plan.selected.len(), 6);
        assert!(plan.excluded_candidates.contains(&1));
        // Excluded even when not flagged degenerate.
        let plan = select_by_importance(&iv(&scores, Architecture::EncoderOnly, &[]), 11).unwrap();
        assert_eq!(plan.selected, (2..=12).collect());
        assert!(select_by_importance(&iv(&scores, Architecture::EncoderOnly, &[]), 12).is_err());
    }

    #[test]
    fn select_everything() {
        let plan =
            select_by_importance(&iv(&[0.3, 0.1, 0.2], Architecture::DecoderOnly, &[]), 3).unwrap();
        assert_eq!(plan.selected, set(&[1, 2, 3]));
    }

    #[test]
    fn degenerate_decoder_layer_is_excluded() {
        let plan = select_by_importance(&iv(&[0.1, 1.0, 0.3], Architecture::DecoderOnly, &[2]), 2)
            .unwrap();
        assert_eq!(plan.selected, set(&[1, 3]));
        assert!(
            select_by_importance(&iv(&[0.1, 1.0, 0.3], Architecture::DecoderOnly, &[2]), 3)
                .is_err()
        );
    }

    #[test]
    fn heuristics() {
        let s = |k, m, n| select_by_heuristic(k, m, n).unwrap().selected;
        assert_eq!(s(Strategy::Middle, 12, 6), set(&[4, 5, 6, 7, 8, 9]));
        assert_eq!(s(Strategy::Extremes, 12, 6), set(&[1, 2, 3, 10, 11, 12]));
        assert_eq!(s(Strategy::Alternate, 12, 6), set(&[2, 4, 6, 8, 10, 12]));
        assert_eq!(s(Strategy::First, 12, 3), set(&[1, 2, 3]));
        assert_eq!(s(Strategy::Last, 12, 3), set(&[10, 11, 12]));
        assert_eq!(s(Strategy::Middle, 8, 4), set(&[3, 4, 5, 6]));
        assert_eq!(s(Strategy::Middle, 8, 3), set(&[3, 4, 5]));
        assert_eq!(s(Strategy::Alternate, 7, 3), set(&[2, 4, 6]));
    }

    #[test]
    fn heuristic_errors() {
        assert!(select_by_heuristic(Strategy::Extremes, 12, 5).is_err());
        assert!(select_by_heuristic(Strategy::Alternate, 12, 4).is_err());
        assert!(select_by_heuristic(Strategy::First, 12, 0).is_err());
        assert!(select_by_heuristic(Strategy::First, 12, 13).is_err());
        assert!(select_by_heuristic(Strategy::CkaImportance, 12, 3).is_err());
    }

    #[test]
    fn rejects_short_sets_and_mismatched_rules() {
        let r0 = RepresentationMatrix::from_rows(2, 1, &[1.0, 2.0], 0, TokenRule::Cls).unwrap();
        assert!(RepresentationSet::new(vec![r0.clone()], Architecture::EncoderOnly, "m").is_err());
        let r1 = RepresentationMatrix::from_rows(2, 1, &[1.0, 3.0], 1, TokenRule::Cls).unwrap();
        assert!(RepresentationSet::new(
            vec![r0.clone(), r1.clone()],
            Architecture::DecoderOnly,
            "m"
        )
        .is_err());
        assert!(RepresentationSet::new(vec![r1, r0], Architecture::EncoderOnly, "m").is_err());
    }
}
