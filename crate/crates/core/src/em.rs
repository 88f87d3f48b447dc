//! Latent-class mixture over the `B_K` matching classes, fit by EM.
//!
//! Class `p` has prevalence `s_p`; field `f` shows agreement pattern `p'`
//! with probability `π^f_{p'|p}`; fields are conditionally independent
//! given the class. Posteriors are restricted to classes `p ≼ p_b`.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Exp1};
use serde::{Deserialize, Serialize};

use crate::comparison::PatternTable;
use crate::error::{LinkError, Result};
use crate::lattice::{Partition, PatternSpace};

/// Floor applied to probabilities before taking logs.
pub const PROB_FLOOR: f64 = 1e-300;

/// `Φ = (s, Π)`. `pi[f][p' * B + p] = π^f_{p'|p}`, so column `p` of field
/// `f` is a distribution over observed patterns `p'`.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelParams {
    pub s: Vec<f64>,
    pub pi: Vec<Vec<f64>>,
}

impl ModelParams {
    pub fn uniform(b: usize, num_fields: usize) -> ModelParams {
        ModelParams {
            s: vec![1.0 / b as f64; b],
            pi: vec![vec![1.0 / b as f64; b * b]; num_fields],
        }
    }

    /// `B_K`.
    pub fn num_classes(&self) -> usize {
        self.s.len()
    }

    pub fn num_fields(&self) -> usize {
        self.pi.len()
    }

    /// `π^f_{observed|class}`.
    pub fn pi(&self, field: usize, observed: usize, class: usize) -> f64 {
        self.pi[field][observed * self.s.len() + class]
    }

    /// Length of the parameter vector, `B_K (B_K F + 1)`.
    pub fn len(&self) -> usize {
        self.s.len() + self.pi.iter().map(Vec::len).sum::<usize>()
    }

    pub fn is_empty(&self) -> bool {
        self.s.is_empty()
    }

    /// Largest absolute difference over all parameters.
    pub fn max_abs_diff(&self, other: &ModelParams) -> f64 {
        let ds = self.s.iter().zip(&other.s).map(|(a, b)| (a - b).abs());
        let dp = self
            .pi
            .iter()
            .zip(&other.pi)
            .flat_map(|(a, b)| a.iter().zip(b).map(|(x, y)| (x - y).abs()));
        ds.chain(dp).fold(0.0, f64::max)
    }

    /// Largest deviation from 1 of `Σ s` and of every `π^f` column sum;
    /// infinite if any entry is negative or not finite.
    pub fn simplex_error(&self) -> f64 {
        let b = self.s.len();
        if self
            .s
            .iter()
            .chain(self.pi.iter().flatten())
            .any(|v| !v.is_finite() || *v < 0.0)
        {
            return f64::INFINITY;
        }
        let mut worst = (self.s.iter().sum::<f64>() - 1.0).abs();
        for table in &self.pi {
            for p in 0..b {
                let col: f64 = (0..b).map(|q| table[q * b + p]).sum();
                worst = worst.max((col - 1.0).abs());
            }
        }
        worst
    }

    fn log_tables(&self) -> LogParams {
        LogParams {
            b: self.s.len(),
            log_s: self
                .s
                .iter()
                .map(|&v| if v > 0.0 { v.ln() } else { f64::NEG_INFINITY })
                .collect(),
            log_pi: self
                .pi
                .iter()
                .map(|t| t.iter().map(|&v| v.max(PROB_FLOOR).ln()).collect())
                .collect(),
        }
    }

    pub fn to_document(&self, space: &PatternSpace, fields: &[String]) -> ParamsDocument {
        let b = self.s.len();
        ParamsDocument {
            format: PARAMS_FORMAT.to_string(),
            k: space.k(),
            classes: space.patterns().to_vec(),
            fields: fields.to_vec(),
            s: self.s.clone(),
            pi: self
                .pi
                .iter()
                .map(|t| t.chunks(b).map(<[f64]>::to_vec).collect())
                .collect(),
        }
    }
}

struct LogParams {
    b: usize,
    log_s: Vec<f64>,
    log_pi: Vec<Vec<f64>>,
}

impl LogParams {
    fn log_joint(&self, gamma: &[u32], class: usize) -> f64 {
        let mut acc = self.log_s[class];
        for (f, &g) in gamma.iter().enumerate() {
            acc += self.log_pi[f][g as usize * self.b + class];
        }
        acc
    }
}

pub const PARAMS_FORMAT: &str = "multilink-params/1";

/// Serialized form of [`ModelParams`]: `pi[f][p'][p] = π^f_{p'|p}`, class
/// order is the canonical pattern order, fields are in comparison-column
/// order.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ParamsDocument {
    pub format: String,
    pub k: usize,
    pub classes: Vec<Partition>,
    pub fields: Vec<String>,
    pub s: Vec<f64>,
    pub pi: Vec<Vec<Vec<f64>>>,
}

impl ParamsDocument {
    pub fn into_params(self, space: &PatternSpace) -> Result<ModelParams> {
        let b = space.len();
        if self.format != PARAMS_FORMAT || self.k != space.k() || self.classes != space.patterns() {
            return Err(LinkError::Input(
                "parameter document does not match this pattern space".into(),
            ));
        }
        if self.s.len() != b
            || self.pi.len() != self.fields.len()
            || self.pi.iter().any(|t| t.len() != b || t.iter().any(|r| r.len() != b))
        {
            return Err(LinkError::Input("parameter document has wrong shape".into()));
        }
        Ok(ModelParams {
            s: self.s,
            pi: self.pi.into_iter().map(|t| t.concat()).collect(),
        })
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(text: &str) -> Result<ParamsDocument> {
        Ok(serde_json::from_str(text)?)
    }
}

/// Random starting values that respect the refinement constraints:
///
/// * within column `p` of every `π^f`, `π_{p''|p} ≤ π_{p'|p}` whenever
///   `p'' ≼ p' ≼ p`;
/// * `s_{p'} > s_p` whenever `p' ≺ p`;
/// * `s_p < ∏_{q∈p} min{m_k : k∈q} / n` for `p ≠ 1/2/.../K`, with
///   `s_{1/2/.../K}` taking the remaining mass.
pub fn initial_params(
    space: &PatternSpace,
    num_fields: usize,
    file_sizes: &[usize],
    n: u64,
    seed: u64,
) -> Result<ModelParams> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    initial_params_with(space, num_fields, file_sizes, n, &mut rng)
}

pub(crate) fn initial_params_with<R: Rng>(
    space: &PatternSpace,
    num_fields: usize,
    file_sizes: &[usize],
    n: u64,
    rng: &mut R,
) -> Result<ModelParams> {
    let b = space.len();
    if n == 0 {
        return Err(LinkError::Init("no tuples to model".into()));
    }
    if file_sizes.len() != space.k() || file_sizes.contains(&0) {
        return Err(LinkError::Init(format!(
            "need {} non-empty file sizes, got {file_sizes:?}",
            space.k()
        )));
    }

    // Linear extension from the top: coarser partitions first.
    let mut pi = Vec::with_capacity(num_fields);
    for _ in 0..num_fields {
        let mut table = vec![0.0; b * b];
        for p in 0..b {
            let mut draw: Vec<f64> = (0..b).map(|_| Exp1.sample(rng)).collect();
            let total: f64 = draw.iter().sum();
            draw.iter_mut().for_each(|v| *v /= total);
            let mut below = space.down_set(p);
            let mut values: Vec<f64> = below.iter().map(|&q| draw[q]).collect();
            values.sort_by(|a, b| b.total_cmp(a));
            below.sort_by_key(|&q| space.get(q).block_count());
            for (&q, v) in below.iter().zip(values) {
                draw[q] = v;
            }
            for (q, v) in draw.into_iter().enumerate() {
                table[q * b + p] = v;
            }
        }
        pi.push(table);
    }

    let cap = |p: &Partition| -> f64 {
        p.blocks()
            .iter()
            .map(|block| block.iter().map(|&k| file_sizes[k]).min().unwrap() as f64)
            .product::<f64>()
            / n as f64
    };
    let mut s = vec![0.0; b];
    for p in (1..b).rev() {
        let part = space.get(p);
        let floor = part
            .upper_covers()
            .iter()
            .map(|c| s[space.index_of(c).unwrap()])
            .fold(0.0, f64::max);
        let limit = cap(part);
        if floor >= limit {
            return Err(LinkError::Init(format!(
                "size bounds for class {part} are infeasible"
            )));
        }
        let u: f64 = rng.random_range(f64::EPSILON..1.0);
        s[p] = floor + u * (limit - floor);
    }
    let others: f64 = s[1..].iter().sum();
    let largest = s[1..].iter().copied().fold(0.0, f64::max);
    if others + largest >= 1.0 {
        let scale = 0.5 / (others + largest);
        s[1..].iter_mut().for_each(|v| *v *= scale);
    }
    s[0] = 1.0 - s[1..].iter().sum::<f64>();
    Ok(ModelParams { s, pi })
}

/// `P(γ | S_p)` for every class.
pub fn class_conditional(params: &ModelParams, gamma: &[u32]) -> Vec<f64> {
    log_class_conditional(params, gamma)
        .into_iter()
        .map(f64::exp)
        .collect()
}

/// `log P(γ | S_p) = Σ_f log π^f_{γ_f|p}` for every class.
pub fn log_class_conditional(params: &ModelParams, gamma: &[u32]) -> Vec<f64> {
    let b = params.num_classes();
    (0..b)
        .map(|p| {
            gamma
                .iter()
                .enumerate()
                .map(|(f, &g)| params.pi(f, g as usize, p).max(PROB_FLOOR).ln())
                .sum()
        })
        .collect()
}

fn log_sum_exp(values: impl Iterator<Item = f64> + Clone) -> f64 {
    let max = values.clone().fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY {
        return max;
    }
    max + values.map(|v| (v - max).exp()).sum::<f64>().ln()
}

/// Class posterior for one table row; zero outside the admissible set.
fn row_posterior(
    logs: &LogParams,
    gamma: &[u32],
    admissible: &[u32],
    out: &mut [f64],
    scratch: &mut Vec<f64>,
) -> f64 {
    let b = logs.b;
    scratch.clear();
    scratch.extend_from_slice(&logs.log_s);
    for (table, &g) in logs.log_pi.iter().zip(gamma) {
        let col = &table[g as usize * b..(g as usize + 1) * b];
        for (acc, v) in scratch.iter_mut().zip(col) {
            *acc += v;
        }
    }
    if admissible.len() == b {
        let max = scratch.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        if max == f64::NEG_INFINITY {
            return max;
        }
        let mut sum = 0.0;
        for (o, &v) in out.iter_mut().zip(scratch.iter()) {
            *o = (v - max).exp();
            sum += *o;
        }
        out.iter_mut().for_each(|o| *o /= sum);
        return max + sum.ln();
    }
    out.iter_mut().for_each(|v| *v = 0.0);
    let max = admissible
        .iter()
        .map(|&p| scratch[p as usize])
        .fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY {
        return max;
    }
    let mut sum = 0.0;
    for &p in admissible {
        let e = (scratch[p as usize] - max).exp();
        out[p as usize] = e;
        sum += e;
    }
    for &p in admissible {
        out[p as usize] /= sum;
    }
    max + sum.ln()
}

/// Class posteriors `P(S_p | γ, p_b)`, one vector per table row.
pub fn e_step(params: &ModelParams, table: &PatternTable) -> Result<Vec<Vec<f64>>> {
    let logs = params.log_tables();
    let b = params.num_classes();
    let mut scratch = Vec::new();
    table
        .rows()
        .iter()
        .map(|row| {
            let mut post = vec![0.0; b];
            let norm = row_posterior(
                &logs,
                &row.gamma,
                table.admissible(row.blocking),
                &mut post,
                &mut scratch,
            );
            if norm.is_finite() {
                Ok(post)
            } else {
                Err(LinkError::DegeneratePattern(table.row_label(row)))
            }
        })
        .collect()
}

/// Result of an M-step: new parameters plus classes whose responsibility
/// was zero (their `π` columns were reset to uniform).
#[derive(Clone, Debug)]
pub struct MStep {
    pub params: ModelParams,
    pub reset_classes: Vec<usize>,
}

/// Closed-form maximisation given row posteriors. With `include_blocked`,
/// fully blocked tuples count towards `s_{1/2/.../K}` and `n`.
pub fn m_step(posteriors: &[Vec<f64>], table: &PatternTable, include_blocked: bool) -> Result<MStep> {
    if posteriors.len() != table.rows().len() {
        return Err(LinkError::Input(format!(
            "{} posteriors for {} rows",
            posteriors.len(),
            table.rows().len()
        )));
    }
    let b = table.space().len();
    let mut stats = SufficientStats::new(b, table.num_fields());
    for (row, post) in table.rows().iter().zip(posteriors) {
        stats.add(&row.gamma, row.count as f64, post);
    }
    if include_blocked {
        stats.class_mass[0] += table.fully_blocked() as f64;
        stats.total += table.fully_blocked() as f64;
    }
    Ok(stats.finish())
}

struct SufficientStats {
    b: usize,
    class_mass: Vec<f64>,
    pattern_mass: Vec<Vec<f64>>,
    total: f64,
}

impl SufficientStats {
    fn new(b: usize, num_fields: usize) -> Self {
        SufficientStats {
            b,
            class_mass: vec![0.0; b],
            pattern_mass: vec![vec![0.0; b * b]; num_fields],
            total: 0.0,
        }
    }

    fn add(&mut self, gamma: &[u32], count: f64, post: &[f64]) {
        let b = self.b;
        self.total += count;
        for (m, &g) in self.class_mass.iter_mut().zip(post) {
            *m += count * g;
        }
        for (table, &obs) in self.pattern_mass.iter_mut().zip(gamma) {
            let col = &mut table[obs as usize * b..(obs as usize + 1) * b];
            for (m, &g) in col.iter_mut().zip(post) {
                *m += count * g;
            }
        }
    }

    fn finish(self) -> MStep {
        let b = self.b;
        let s = self.class_mass.iter().map(|m| m / self.total).collect();
        let mut reset_classes = Vec::new();
        let mut pi = self.pattern_mass;
        for p in 0..b {
            // Column totals over observed patterns equal the class mass
            // from the training rows only.
            let mass: f64 = (0..b).map(|q| pi.first().map_or(0.0, |t| t[q * b + p])).sum();
            if mass <= 0.0 {
                reset_classes.push(p);
            }
            for table in pi.iter_mut() {
                let col: f64 = (0..b).map(|q| table[q * b + p]).sum();
                for q in 0..b {
                    table[q * b + p] = if col > 0.0 {
                        table[q * b + p] / col
                    } else {
                        1.0 / b as f64
                    };
                }
            }
        }
        MStep {
            params: ModelParams { s, pi },
            reset_classes,
        }
    }
}

/// `Σ_rows n_γ log Σ_{p ≼ p_b} s_p P(γ|S_p)`; `-∞` if any row has zero
/// marginal.
pub fn observed_loglik(params: &ModelParams, table: &PatternTable) -> f64 {
    observed_loglik_with(params, table, false)
}

/// As [`observed_loglik`]; with `include_blocked` the fully blocked tuples
/// add `n_blocked · log s_{1/2/.../K}`.
pub fn observed_loglik_with(params: &ModelParams, table: &PatternTable, include_blocked: bool) -> f64 {
    let logs = params.log_tables();
    let mut total = 0.0;
    for row in table.rows() {
        let adm = table.admissible(row.blocking);
        let norm = log_sum_exp(adm.iter().map(|&p| logs.log_joint(&row.gamma, p as usize)));
        total += row.count as f64 * norm;
    }
    if include_blocked && table.fully_blocked() > 0 {
        total += table.fully_blocked() as f64 * logs.log_s[0];
    }
    total
}

/// Rows eligible for clamping: every field shows the same pattern `p`,
/// `p` is not `1/2/.../K` and `p ≼ p_b`. Returns that class.
pub fn clamp_class(table: &PatternTable, row_index: usize) -> Option<usize> {
    let row = &table.rows()[row_index];
    let first = *row.gamma.first()?;
    if first == table.space().singletons_index() as u32 || row.gamma.iter().any(|&g| g != first) {
        return None;
    }
    table
        .admissible(row.blocking)
        .contains(&first)
        .then_some(first as usize)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EmOptions {
    pub restarts: usize,
    pub max_iters: usize,
    pub tol: f64,
    pub seed: u64,
    pub clamp_full_agreement: bool,
    pub include_blocked_in_prevalence: bool,
    /// Worker threads for restart chains; results do not depend on it.
    #[serde(skip_serializing)]
    pub threads: usize,
}

impl Default for EmOptions {
    fn default() -> Self {
        EmOptions {
            restarts: 20,
            max_iters: 1000,
            tol: 1e-6,
            seed: 0,
            clamp_full_agreement: false,
            include_blocked_in_prevalence: false,
            threads: 1,
        }
    }
}

#[derive(Clone, Debug)]
pub struct ChainSummary {
    pub loglik: f64,
    pub iterations: usize,
    pub converged: bool,
}

#[derive(Clone, Debug)]
pub struct FitResult {
    pub params: ModelParams,
    /// Observed-data log-likelihood at `params`.
    pub loglik: f64,
    pub restarts_run: usize,
    /// Iterations of the winning chain.
    pub iterations: usize,
    pub converged: bool,
    pub clamped: bool,
    /// Log-likelihood before each M-step of the winning chain, then at the
    /// final parameters.
    pub trace: Vec<f64>,
    /// Classes reset to uniform at some iteration of the winning chain.
    pub reset_classes: Vec<usize>,
    pub chains: Vec<ChainSummary>,
}

struct Chain {
    params: ModelParams,
    loglik: f64,
    iterations: usize,
    converged: bool,
    trace: Vec<f64>,
    reset_classes: Vec<usize>,
}

fn run_chain(table: &PatternTable, opts: &EmOptions, start: ModelParams) -> Result<Chain> {
    let b = table.space().len();
    let clamps: Vec<Option<usize>> = if opts.clamp_full_agreement {
        (0..table.rows().len()).map(|i| clamp_class(table, i)).collect()
    } else {
        vec![None; table.rows().len()]
    };
    let admissible: Vec<&[u32]> = table.rows().iter().map(|r| table.admissible(r.blocking)).collect();
    let mut params = start;
    let mut trace = Vec::new();
    let mut reset_classes: Vec<usize> = Vec::new();
    let mut post = vec![0.0; b];
    let mut scratch = Vec::new();
    let mut iterations = 0;
    let mut converged = false;
    while iterations < opts.max_iters {
        let logs = params.log_tables();
        let mut stats = SufficientStats::new(b, table.num_fields());
        let mut loglik = 0.0;
        for ((row, clamp), adm) in table.rows().iter().zip(&clamps).zip(&admissible) {
            let norm = row_posterior(
                &logs,
                &row.gamma,
                adm,
                &mut post,
                &mut scratch,
            );
            if !norm.is_finite() {
                return Err(LinkError::DegeneratePattern(table.row_label(row)));
            }
            loglik += row.count as f64 * norm;
            if let Some(c) = clamp {
                post.iter_mut().for_each(|v| *v = 0.0);
                post[*c] = 1.0;
            }
            stats.add(&row.gamma, row.count as f64, &post);
        }
        if opts.include_blocked_in_prevalence && table.fully_blocked() > 0 {
            loglik += table.fully_blocked() as f64 * logs.log_s[0];
            stats.class_mass[0] += table.fully_blocked() as f64;
            stats.total += table.fully_blocked() as f64;
        }
        trace.push(loglik);
        let next = stats.finish();
        for c in next.reset_classes {
            if !reset_classes.contains(&c) {
                reset_classes.push(c);
            }
        }
        let delta = next.params.max_abs_diff(&params);
        params = next.params;
        iterations += 1;
        if delta < opts.tol {
            converged = true;
            break;
        }
    }
    let loglik = observed_loglik_with(&params, table, opts.include_blocked_in_prevalence);
    trace.push(loglik);
    reset_classes.sort_unstable();
    Ok(Chain {
        params,
        loglik,
        iterations,
        converged,
        trace,
        reset_classes,
    })
}

/// Seed of restart chain `chain` under base seed `seed`.
pub fn chain_seed(seed: u64, chain: usize) -> u64 {
    // SplitMix64 step keeps chain seeds well separated.
    let mut z = seed.wrapping_add((chain as u64 + 1).wrapping_mul(0x9E37_79B9_7F4A_7C15));
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Starting values of every restart chain.
pub fn starting_points(table: &PatternTable, opts: &EmOptions) -> Result<Vec<ModelParams>> {
    let n = if opts.include_blocked_in_prevalence {
        table.total_tuples()
    } else {
        table.training_tuples()
    };
    (0..opts.restarts)
        .map(|r| {
            initial_params(
                table.space(),
                table.num_fields(),
                table.file_sizes(),
                n,
                chain_seed(opts.seed, r),
            )
        })
        .collect()
}

/// Runs `opts.restarts` EM chains and keeps the one with the largest
/// observed log-likelihood (earliest chain on ties).
pub fn fit(table: &PatternTable, opts: &EmOptions) -> Result<FitResult> {
    if opts.restarts < 1 {
        return Err(LinkError::Config("restarts must be at least 1".into()));
    }
    if opts.max_iters < 1 {
        return Err(LinkError::Config("max_iters must be at least 1".into()));
    }
    if table.rows().is_empty() {
        return Err(LinkError::Input("pattern table has no rows to fit".into()));
    }
    let starts = starting_points(table, opts)?;
    let threads = opts.threads.clamp(1, starts.len());
    let chains: Vec<Result<Chain>> = if threads == 1 {
        starts.into_iter().map(|s| run_chain(table, opts, s)).collect()
    } else {
        let starts: Vec<(usize, ModelParams)> = starts.into_iter().enumerate().collect();
        let mut slots: Vec<Option<Result<Chain>>> = (0..starts.len()).map(|_| None).collect();
        let chunk = starts.len().div_ceil(threads);
        std::thread::scope(|scope| {
            let handles: Vec<_> = starts
                .chunks(chunk)
                .map(|part| {
                    scope.spawn(move || {
                        part.iter()
                            .map(|(i, s)| (*i, run_chain(table, opts, s.clone())))
                            .collect::<Vec<_>>()
                    })
                })
                .collect();
            for h in handles {
                for (i, chain) in h.join().expect("EM worker panicked") {
                    slots[i] = Some(chain);
                }
            }
        });
        slots.into_iter().map(Option::unwrap).collect()
    };

    let mut summaries = Vec::with_capacity(chains.len());
    let mut best: Option<Chain> = None;
    let mut first_error = None;
    for chain in chains {
        match chain {
            Ok(c) => {
                summaries.push(ChainSummary {
                    loglik: c.loglik,
                    iterations: c.iterations,
                    converged: c.converged,
                });
                if best.as_ref().is_none_or(|b| c.loglik > b.loglik) {
                    best = Some(c);
                }
            }
            Err(e) => {
                first_error.get_or_insert(e);
            }
        }
    }
    let best = match (best, first_error) {
        (Some(b), _) => b,
        (None, Some(e)) => return Err(e),
        (None, None) => unreachable!("at least one chain runs"),
    };
    Ok(FitResult {
        restarts_run: summaries.len(),
        params: best.params,
        loglik: best.loglik,
        iterations: best.iterations,
        converged: best.converged,
        clamped: opts.clamp_full_agreement,
        trace: best.trace,
        reset_classes: best.reset_classes,
        chains: summaries,
    })
}
