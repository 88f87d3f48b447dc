//! Scoring decisions against known matching classes.

use serde::{Deserialize, Serialize};

use crate::error::{LinkError, Result};

/// How undeclared tuples enter the error rates.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ScoringMode {
    /// Only declared tuples are scored.
    #[default]
    DeclaredOnly,
    /// Undeclared tuples are in scope and count as errors.
    UndeclaredAsError,
}

impl std::str::FromStr for ScoringMode {
    type Err = LinkError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "declared-only" => Ok(ScoringMode::DeclaredOnly),
            "undeclared-as-error" => Ok(ScoringMode::UndeclaredAsError),
            other => Err(LinkError::Config(format!("unknown scoring mode {other:?}"))),
        }
    }
}

/// `counts[true][decided]`, where decided index `B_K` means undeclared.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ConfusionMatrix {
    counts: Vec<Vec<u64>>,
}

impl ConfusionMatrix {
    pub fn new(num_classes: usize) -> ConfusionMatrix {
        ConfusionMatrix {
            counts: vec![vec![0; num_classes + 1]; num_classes],
        }
    }

    pub fn num_classes(&self) -> usize {
        self.counts.len()
    }

    pub fn undeclared_column(&self) -> usize {
        self.counts.len()
    }

    /// `decided = None` records an undeclared tuple.
    pub fn add(&mut self, truth: usize, decided: Option<usize>, count: u64) {
        let col = decided.unwrap_or(self.counts.len());
        self.counts[truth][col] += count;
    }

    pub fn get(&self, truth: usize, decided: Option<usize>) -> u64 {
        self.counts[truth][decided.unwrap_or(self.counts.len())]
    }

    pub fn merge(&mut self, other: &ConfusionMatrix) {
        for (a, b) in self.counts.iter_mut().zip(&other.counts) {
            for (x, y) in a.iter_mut().zip(b) {
                *x += y;
            }
        }
    }

    pub fn class_total(&self, truth: usize) -> u64 {
        self.counts[truth].iter().sum()
    }

    pub fn total(&self) -> u64 {
        (0..self.counts.len()).map(|p| self.class_total(p)).sum()
    }

    /// `(errors, in-scope total)` for one true class.
    pub fn class_errors(&self, truth: usize, mode: ScoringMode) -> (u64, u64) {
        let row = &self.counts[truth];
        let undeclared = row[self.counts.len()];
        let correct = row[truth];
        let all = self.class_total(truth);
        match mode {
            ScoringMode::DeclaredOnly => {
                let scope = all - undeclared;
                (scope - correct, scope)
            }
            ScoringMode::UndeclaredAsError => (all - correct, all),
        }
    }

    /// Per-class misclassification rate; `None` for classes with an empty
    /// scope.
    pub fn class_error_rate(&self, truth: usize, mode: ScoringMode) -> Option<f64> {
        let (err, scope) = self.class_errors(truth, mode);
        (scope > 0).then(|| err as f64 / scope as f64)
    }
}

/// Overall misclassification error.
pub fn ome(matrix: &ConfusionMatrix, mode: ScoringMode) -> Result<f64> {
    let (err, scope) = (0..matrix.num_classes())
        .map(|p| matrix.class_errors(p, mode))
        .fold((0, 0), |(e, s), (a, b)| (e + a, s + b));
    if scope == 0 {
        return Err(LinkError::UndefinedMetric("no tuples in scope".into()));
    }
    Ok(err as f64 / scope as f64)
}

/// Mean within-group error: the unweighted mean of per-true-class error
/// rates over classes with a non-empty scope.
pub fn mwge(matrix: &ConfusionMatrix, mode: ScoringMode) -> Result<f64> {
    let rates: Vec<f64> = (0..matrix.num_classes())
        .filter_map(|p| matrix.class_error_rate(p, mode))
        .collect();
    if rates.is_empty() {
        return Err(LinkError::UndefinedMetric("every class is empty".into()));
    }
    Ok(rates.iter().sum::<f64>() / rates.len() as f64)
}
