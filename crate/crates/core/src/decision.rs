//! Generalised Fellegi–Sunter assignment.
//!
//! Each table row gets a candidate class (its posterior argmax). Within a
//! candidate group rows are sorted by posterior, and the longest prefix
//! whose summed complement likelihood `P(γ | S_p^c)` stays within the
//! class budget `μ_p` is declared; the rest stay undeclared.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::comparison::PatternTable;
use crate::em::{clamp_class, e_step, log_class_conditional, FitResult, ModelParams};
use crate::error::{LinkError, Result};
use crate::lattice::PatternSpace;

/// Admissible error level `μ_p` per class, in canonical class order.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ErrorLevels {
    mu: Vec<f64>,
}

impl ErrorLevels {
    pub fn uniform(num_classes: usize, mu: f64) -> Result<ErrorLevels> {
        ErrorLevels::new(vec![mu; num_classes])
    }

    pub fn new(mu: Vec<f64>) -> Result<ErrorLevels> {
        if let Some(bad) = mu.iter().find(|m| !(0.0..=1.0).contains(*m)) {
            return Err(LinkError::Config(format!("error level {bad} outside [0, 1]")));
        }
        Ok(ErrorLevels { mu })
    }

    /// Levels keyed by class name (slash notation); every class must appear.
    pub fn from_map(space: &PatternSpace, levels: &BTreeMap<String, f64>) -> Result<ErrorLevels> {
        let mut mu = vec![None; space.len()];
        for (name, &m) in levels {
            let p = name.parse()?;
            let idx = space
                .index_of(&p)
                .ok_or_else(|| LinkError::Config(format!("class {name} is not a pattern for K = {}", space.k())))?;
            mu[idx] = Some(m);
        }
        let mu = mu
            .into_iter()
            .enumerate()
            .map(|(i, m)| m.ok_or_else(|| LinkError::Config(format!("no error level for class {}", space.get(i)))))
            .collect::<Result<Vec<_>>>()?;
        ErrorLevels::new(mu)
    }

    pub fn get(&self, class: usize) -> f64 {
        self.mu[class]
    }

    pub fn len(&self) -> usize {
        self.mu.len()
    }

    pub fn is_empty(&self) -> bool {
        self.mu.is_empty()
    }
}

fn log_sum_exp(values: &[f64]) -> f64 {
    let max = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY {
        return max;
    }
    max + values.iter().map(|v| (v - max).exp()).sum::<f64>().ln()
}

/// `log P(γ | S_p^c) = log Σ_{p'≠p} P(γ|S_{p'}) s_{p'} − log(1 − s_p)`.
pub fn log_complement_likelihood(params: &ModelParams, gamma: &[u32], class: usize) -> Result<f64> {
    let s_p = params.s[class];
    if s_p >= 1.0 {
        return Err(LinkError::DegeneratePrevalence(format!("#{class}")));
    }
    let logs = log_class_conditional(params, gamma);
    let terms: Vec<f64> = logs
        .iter()
        .enumerate()
        .filter(|&(q, _)| q != class)
        .map(|(q, l)| {
            if params.s[q] > 0.0 {
                l + params.s[q].ln()
            } else {
                f64::NEG_INFINITY
            }
        })
        .collect();
    Ok(log_sum_exp(&terms) - (1.0 - s_p).ln())
}

pub fn complement_likelihood(params: &ModelParams, gamma: &[u32], class: usize) -> Result<f64> {
    log_complement_likelihood(params, gamma, class).map(f64::exp)
}

/// `w_p = log P(γ|S_p) − log P(γ|S_p^c)`.
pub fn weight(params: &ModelParams, gamma: &[u32], class: usize) -> Result<f64> {
    let own = log_class_conditional(params, gamma)[class];
    let other = log_complement_likelihood(params, gamma, class)?;
    if own == f64::NEG_INFINITY && other == f64::NEG_INFINITY {
        return Err(LinkError::UndefinedWeight(format!("#{class}")));
    }
    Ok(own - other)
}

/// Posteriors used for the final decisions; clamped rows are point masses
/// when the fit was run in clamping mode.
pub fn final_posteriors(fit: &FitResult, table: &PatternTable) -> Result<Vec<Vec<f64>>> {
    let mut post = e_step(&fit.params, table)?;
    if fit.clamped {
        for (i, row) in post.iter_mut().enumerate() {
            if let Some(c) = clamp_class(table, i) {
                row.iter_mut().for_each(|v| *v = 0.0);
                row[c] = 1.0;
            }
        }
    }
    Ok(post)
}

/// Argmax with ties resolved toward the finest partition (lowest canonical
/// index).
pub fn candidate_class(posterior: &[f64]) -> usize {
    let mut best = 0;
    for (p, &v) in posterior.iter().enumerate() {
        if v > posterior[best] {
            best = p;
        }
    }
    best
}

/// Decision for every tuple sharing one table row.
#[derive(Clone, Debug, PartialEq)]
pub struct RowDecision {
    pub row: usize,
    pub candidate: usize,
    pub posterior: Vec<f64>,
    pub weight: f64,
    /// `P(γ | S^c_candidate)`.
    pub complement: f64,
    pub declared: bool,
}

/// Row-level decisions plus the tuples already resolved by blocking.
#[derive(Clone, Debug)]
pub struct Classification {
    pub rows: Vec<RowDecision>,
    /// Tuples declared `1/2/.../K` because their blocking pattern is.
    pub fully_blocked: u64,
}

impl Classification {
    /// Σ of complement likelihoods over declared rows of each class.
    pub fn spent_budget(&self, num_classes: usize) -> Vec<f64> {
        let mut spent = vec![0.0; num_classes];
        for d in self.rows.iter().filter(|d| d.declared) {
            spent[d.candidate] += d.complement;
        }
        spent
    }

    /// Declared tuple counts per class, fully blocked tuples included.
    pub fn declared_counts(&self, table: &PatternTable) -> Vec<u64> {
        let mut counts = vec![0u64; table.space().len()];
        counts[0] += self.fully_blocked;
        for d in self.rows.iter().filter(|d| d.declared) {
            counts[d.candidate] += table.rows()[d.row].count;
        }
        counts
    }

    pub fn undeclared_tuples(&self, table: &PatternTable) -> u64 {
        self.rows
            .iter()
            .filter(|d| !d.declared)
            .map(|d| table.rows()[d.row].count)
            .sum()
    }
}

/// Length of the longest prefix of `complements` (already in decision
/// order) whose running sum stays within `mu`.
pub fn cutoff(complements: &[f64], mu: f64) -> usize {
    let mut spent = 0.0;
    for (i, c) in complements.iter().enumerate() {
        spent += c;
        if spent > mu {
            return i;
        }
    }
    complements.len()
}

/// Applies the decision rule with the given posteriors.
pub fn classify_with(
    params: &ModelParams,
    table: &PatternTable,
    posteriors: Vec<Vec<f64>>,
    levels: &ErrorLevels,
) -> Result<Classification> {
    let b = table.space().len();
    if levels.len() != b {
        return Err(LinkError::Config(format!(
            "{} error levels for {b} classes",
            levels.len()
        )));
    }
    let mut rows = Vec::with_capacity(posteriors.len());
    for (i, posterior) in posteriors.into_iter().enumerate() {
        let gamma = &table.rows()[i].gamma;
        let candidate = candidate_class(&posterior);
        let complement = complement_likelihood(params, gamma, candidate)
            .map_err(|_| LinkError::DegeneratePrevalence(table.space().get(candidate).to_string()))?;
        let weight = weight(params, gamma, candidate)
            .map_err(|_| LinkError::UndefinedWeight(table.space().get(candidate).to_string()))?;
        rows.push(RowDecision {
            row: i,
            candidate,
            posterior,
            weight,
            complement,
            declared: false,
        });
    }

    let mut groups: Vec<Vec<usize>> = vec![Vec::new(); b];
    for (i, d) in rows.iter().enumerate() {
        groups[d.candidate].push(i);
    }
    for (class, mut members) in groups.into_iter().enumerate() {
        members.sort_by(|&a, &b| {
            rows[b].posterior[class]
                .total_cmp(&rows[a].posterior[class])
                .then(a.cmp(&b))
        });
        let complements: Vec<f64> = members.iter().map(|&i| rows[i].complement).collect();
        let cut = cutoff(&complements, levels.get(class));
        for &i in &members[..cut] {
            rows[i].declared = true;
        }
    }
    Ok(Classification {
        rows,
        fully_blocked: table.fully_blocked(),
    })
}

/// Classifies every table row using the fitted parameters.
pub fn classify(fit: &FitResult, table: &PatternTable, levels: &ErrorLevels) -> Result<Classification> {
    let posteriors = final_posteriors(fit, table)?;
    classify_with(&fit.params, table, posteriors, levels)
}
