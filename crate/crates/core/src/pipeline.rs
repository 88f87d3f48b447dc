//! Linkage runs, simulation sweeps and scoring of saved assignments.

use std::collections::{BTreeMap, HashMap, HashSet};
use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::{Arc, Mutex};

use serde::{Deserialize, Serialize};

use crate::comparison::{
    read_datafile, AgreementLookup, Comparer, DataFile, FieldRole, FieldSpec, PatternTable, TableBuilder,
};
use crate::decision::{classify, Classification, ErrorLevels, RowDecision};
use crate::em::{chain_seed, fit, EmOptions, FitResult};
use crate::error::{LinkError, Result};
use crate::evaluation::{mwge, ome, ConfusionMatrix, ScoringMode};
use crate::lattice::{Partition, PatternSpace};
use crate::synthetic::{corrupt_files, generate_population, project, GroundTruth, PopulationSpec};

pub const DEFAULT_MU: f64 = 0.01;
pub const DEFAULT_TUPLE_LIMIT: u64 = 50_000_000;

fn default_mu() -> MuSetting {
    MuSetting::Scalar(DEFAULT_MU)
}

fn default_tuple_limit() -> u64 {
    DEFAULT_TUPLE_LIMIT
}

fn default_replications() -> usize {
    1
}

/// Error levels given as one value for every class or per class pattern.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum MuSetting {
    Scalar(f64),
    PerClass(BTreeMap<String, f64>),
}

impl MuSetting {
    pub fn levels(&self, space: &PatternSpace) -> Result<ErrorLevels> {
        match self {
            MuSetting::Scalar(mu) => ErrorLevels::uniform(space.len(), *mu),
            MuSetting::PerClass(map) => ErrorLevels::from_map(space, map),
        }
    }
}

/// Settings of one linkage run, read from TOML.
#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LinkageConfig {
    pub files: Vec<PathBuf>,
    pub fields: Vec<FieldSpec>,
    #[serde(default)]
    pub em: EmOptions,
    #[serde(default = "default_mu")]
    pub mu: MuSetting,
    #[serde(default)]
    pub output: Option<PathBuf>,
    #[serde(default = "default_tuple_limit")]
    pub tuple_limit: u64,
}

impl LinkageConfig {
    pub fn from_toml(text: &str) -> Result<LinkageConfig> {
        let cfg: LinkageConfig = toml::from_str(text).map_err(|e| LinkError::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Reads a config file; relative paths inside it are taken relative to
    /// the file's directory.
    pub fn load(path: &Path) -> Result<LinkageConfig> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| LinkError::Config(format!("{}: {e}", path.display())))?;
        let mut cfg = LinkageConfig::from_toml(&text)?;
        let base = path.parent().unwrap_or(Path::new(""));
        for f in &mut cfg.files {
            if f.is_relative() {
                *f = base.join(&*f);
            }
        }
        if let Some(out) = &mut cfg.output {
            if out.is_relative() {
                *out = base.join(&*out);
            }
        }
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        let k = self.files.len();
        let space = PatternSpace::new(k).map_err(|e| LinkError::Config(e.to_string()))?;
        if k < 2 {
            return Err(LinkError::Config(format!("need at least 2 files, got {k}")));
        }
        if self.fields.is_empty() {
            return Err(LinkError::Config("no fields declared".into()));
        }
        for f in &self.fields {
            f.validate().map_err(|e| LinkError::Config(e.to_string()))?;
        }
        self.mu.levels(&space).map_err(|e| LinkError::Config(e.to_string()))?;
        Ok(())
    }
}

/// Everything a linkage produces in memory.
#[derive(Clone, Debug)]
pub struct Linkage {
    pub table: PatternTable,
    /// `None` when no compared field exists and blocking alone decides.
    pub fit: Option<FitResult>,
    pub classification: Classification,
    pub levels: ErrorLevels,
}

/// Enumerates candidate tuples into a pattern table. `visit` sees every
/// tuple with its provisional row id; the returned remap turns provisional
/// ids into final row indices.
pub fn build_table_with(
    comparer: &Comparer,
    limit: u64,
    mut visit: impl FnMut(&[usize], usize),
) -> Result<(PatternTable, Vec<usize>)> {
    let mut builder = TableBuilder::new(comparer.space().clone(), comparer.column_names().to_vec());
    let cols = comparer.column_names().len();
    let b = comparer.space().len();
    // Small key spaces get a direct code -> row array instead of hashing.
    let dense = (b as u64)
        .checked_pow(cols as u32 + 1)
        .filter(|&size| size <= DENSE_KEY_LIMIT);
    match dense {
        Some(size) => {
            let mut slot = vec![u32::MAX; size as usize];
            comparer.for_each_pattern(limit, |tuple, pb, gamma| {
                let code = gamma.iter().rev().fold(pb as usize, |acc, &g| acc * b + g as usize);
                let id = match slot[code] {
                    u32::MAX => {
                        let id = builder.add(gamma, pb, 1);
                        slot[code] = id as u32;
                        id
                    }
                    id => {
                        builder.increment(id as usize, 1);
                        id as usize
                    }
                };
                visit(tuple, id);
            })?;
        }
        None => {
            comparer.for_each_pattern(limit, |tuple, pb, gamma| {
                let id = builder.add(gamma, pb, 1);
                visit(tuple, id);
            })?;
        }
    }
    builder.finish(comparer.file_sizes().to_vec(), comparer.total_tuples())
}

const DENSE_KEY_LIMIT: u64 = 1 << 22;

/// Fits the model (when there is anything to fit) and applies the
/// decision rule.
pub fn fit_and_classify(table: PatternTable, em: &EmOptions, levels: ErrorLevels) -> Result<Linkage> {
    if table.num_fields() == 0 || table.rows().is_empty() {
        let b = table.space().len();
        let rows = table
            .rows()
            .iter()
            .enumerate()
            .map(|(i, row)| {
                let mut posterior = vec![0.0; b];
                posterior[row.blocking as usize] = 1.0;
                RowDecision {
                    row: i,
                    candidate: row.blocking as usize,
                    posterior,
                    weight: f64::INFINITY,
                    complement: 0.0,
                    declared: true,
                }
            })
            .collect();
        let classification = Classification {
            rows,
            fully_blocked: table.fully_blocked(),
        };
        return Ok(Linkage {
            table,
            fit: None,
            classification,
            levels,
        });
    }
    let fitted = fit(&table, em).map_err(|e| e.in_stage("fit"))?;
    let classification = classify(&fitted, &table, &levels).map_err(|e| e.in_stage("classify"))?;
    Ok(Linkage {
        table,
        fit: Some(fitted),
        classification,
        levels,
    })
}

/// Per-class line of a [`RunReport`].
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClassReport {
    pub class: Partition,
    pub declared: u64,
    pub mu: f64,
    pub spent: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub k: usize,
    pub file_sizes: Vec<usize>,
    pub n: u64,
    pub fully_blocked_count: u64,
    pub candidate_tuples: u64,
    pub training_rows: usize,
    pub declared: u64,
    pub undeclared: u64,
    pub conserved: bool,
    pub em_run: bool,
    pub loglik: Option<f64>,
    pub converged: Option<bool>,
    pub iterations: Option<usize>,
    pub restarts_run: Option<usize>,
    pub reset_classes: Vec<Partition>,
    pub classes: Vec<ClassReport>,
    pub em: EmOptions,
}

impl Linkage {
    pub fn report(&self, em: &EmOptions) -> RunReport {
        let table = &self.table;
        let space = table.space();
        let declared_counts = self.classification.declared_counts(table);
        let spent = self.classification.spent_budget(space.len());
        let undeclared = self.classification.undeclared_tuples(table);
        let declared: u64 = declared_counts.iter().sum();
        RunReport {
            k: table.k(),
            file_sizes: table.file_sizes().to_vec(),
            n: table.total_tuples(),
            fully_blocked_count: table.fully_blocked(),
            candidate_tuples: table.training_tuples(),
            training_rows: if self.fit.is_some() { table.rows().len() } else { 0 },
            declared,
            undeclared,
            conserved: declared + undeclared == table.total_tuples(),
            em_run: self.fit.is_some(),
            loglik: self.fit.as_ref().map(|f| f.loglik),
            converged: self.fit.as_ref().map(|f| f.converged),
            iterations: self.fit.as_ref().map(|f| f.iterations),
            restarts_run: self.fit.as_ref().map(|f| f.restarts_run),
            reset_classes: self
                .fit
                .as_ref()
                .map(|f| f.reset_classes.iter().map(|&c| space.get(c).clone()).collect())
                .unwrap_or_default(),
            classes: (0..space.len())
                .map(|p| ClassReport {
                    class: space.get(p).clone(),
                    declared: declared_counts[p],
                    mu: self.levels.get(p),
                    spent: spent[p],
                })
                .collect(),
            em: em.clone(),
        }
    }
}

fn csv_writer(path: &Path) -> Result<csv::Writer<BufWriter<File>>> {
    Ok(csv::WriterBuilder::new()
        .terminator(csv::Terminator::Any(b'\n'))
        .from_writer(BufWriter::new(File::create(path)?)))
}

fn fmt_f64(x: f64) -> String {
    if x.is_infinite() {
        if x > 0.0 { "inf" } else { "-inf" }.to_string()
    } else {
        x.to_string()
    }
}

/// Paths of the artifacts written by [`run_link`].
#[derive(Clone, Debug)]
pub struct LinkArtifacts {
    pub assignments: PathBuf,
    pub params: Option<PathBuf>,
    pub report: PathBuf,
    pub run: RunReport,
}

/// Reads the configured files, links them and writes `assignments.csv`,
/// `params.json` (when a model was fit) and `report.json` into `out_dir`.
pub fn run_link(config: &LinkageConfig, out_dir: &Path) -> Result<LinkArtifacts> {
    config.validate()?;
    let files: Vec<DataFile> = config
        .files
        .iter()
        .enumerate()
        .map(|(i, path)| read_datafile(path, i + 1, &config.fields))
        .collect::<Result<_>>()
        .map_err(|e| e.in_stage("read"))?;
    link_files_to(&files, config, out_dir)
}

/// [`run_link`] on files already in memory.
pub fn link_files_to(files: &[DataFile], config: &LinkageConfig, out_dir: &Path) -> Result<LinkArtifacts> {
    let space = Arc::new(PatternSpace::new(files.len())?);
    let levels = config.mu.levels(&space)?;
    let comparer = Comparer::new(files, &config.fields, space.clone()).map_err(|e| e.in_stage("compare"))?;
    let mut ids: Vec<u32> = Vec::new();
    let (table, remap) = build_table_with(&comparer, config.tuple_limit, |_, id| ids.push(id as u32))
        .map_err(|e| e.in_stage("compare"))?;
    let linkage = fit_and_classify(table, &config.em, levels)?;
    let report = linkage.report(&config.em);

    std::fs::create_dir_all(out_dir).map_err(|e| LinkError::from(e).in_stage("write"))?;
    let assignments = out_dir.join("assignments.csv");
    write_assignments(&assignments, files, &comparer, &linkage, &ids, &remap, config.tuple_limit)
        .map_err(|e| e.in_stage("write"))?;
    let params = match &linkage.fit {
        Some(f) => {
            let path = out_dir.join("params.json");
            let columns: Vec<String> = linkage.table.columns().to_vec();
            let doc = f.params.to_document(&space, &columns);
            std::fs::write(&path, doc.to_json()? + "\n").map_err(|e| LinkError::from(e).in_stage("write"))?;
            Some(path)
        }
        None => None,
    };
    let report_path = out_dir.join("report.json");
    let text = serde_json::to_string_pretty(&report)? + "\n";
    std::fs::write(&report_path, text).map_err(|e| LinkError::from(e).in_stage("write"))?;
    Ok(LinkArtifacts {
        assignments,
        params,
        report: report_path,
        run: report,
    })
}

fn write_assignments(
    path: &Path,
    files: &[DataFile],
    comparer: &Comparer,
    linkage: &Linkage,
    ids: &[u32],
    remap: &[usize],
    limit: u64,
) -> Result<()> {
    let space = linkage.table.space();
    let k = files.len();
    let mut w = csv_writer(path)?;
    let mut header: Vec<String> = (1..=k).map(|i| format!("rec_{i}")).collect();
    header.extend(["blocking", "class", "decision", "posterior", "weight"].map(String::from));
    header.extend(space.patterns().iter().map(|p| format!("post_{p}")));
    w.write_record(&header)?;

    let names: Vec<String> = space.patterns().iter().map(|p| p.to_string()).collect();
    let mut next = 0usize;
    let mut failure = None;
    let mut line: Vec<String> = Vec::with_capacity(header.len());
    comparer.for_each_candidate(limit, |tuple, pb| {
        if failure.is_some() {
            return;
        }
        let row = remap[ids[next] as usize];
        next += 1;
        let d = &linkage.classification.rows[row];
        line.clear();
        line.extend(tuple.iter().enumerate().map(|(f, &r)| files[f].records[r].id.clone()));
        line.push(names[pb as usize].clone());
        line.push(names[d.candidate].clone());
        line.push(if d.declared { "declared" } else { "undeclared" }.to_string());
        line.push(fmt_f64(d.posterior[d.candidate]));
        line.push(fmt_f64(d.weight));
        line.extend(d.posterior.iter().map(|&x| fmt_f64(x)));
        if let Err(e) = w.write_record(&line) {
            failure = Some(e);
        }
    })?;
    if let Some(e) = failure {
        return Err(e.into());
    }
    w.flush()?;
    Ok(())
}

/// Reads a TOML population or sweep description.
fn parse_toml<T: serde::de::DeserializeOwned>(text: &str) -> Result<T> {
    toml::from_str(text).map_err(|e| LinkError::Config(e.to_string()))
}

/// One blocking choice of a sweep: the population fields used for blocking.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BlockingOption {
    pub name: String,
    #[serde(default)]
    pub fields: Vec<String>,
}

/// A grid of simulation scenarios.
#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SweepConfig {
    pub population: PopulationSpec,
    #[serde(default = "default_replications")]
    pub replications: usize,
    #[serde(default)]
    pub seed: u64,
    /// β applied to every compared field without a fixed value.
    pub betas: Vec<f64>,
    #[serde(default)]
    pub fixed_betas: BTreeMap<String, f64>,
    pub blocking: Vec<BlockingOption>,
    /// Compared fields switched on and off together.
    #[serde(default)]
    pub optional_fields: Vec<String>,
    #[serde(default)]
    pub em: EmOptions,
    #[serde(default = "default_mu")]
    pub mu: MuSetting,
    #[serde(default)]
    pub scoring: ScoringMode,
    #[serde(default = "default_tuple_limit")]
    pub tuple_limit: u64,
    /// Worker threads; 0 uses the available parallelism.
    #[serde(default)]
    pub threads: usize,
}

impl SweepConfig {
    pub fn from_toml(text: &str) -> Result<SweepConfig> {
        let cfg: SweepConfig = parse_toml(text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<SweepConfig> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| LinkError::Config(format!("{}: {e}", path.display())))?;
        SweepConfig::from_toml(&text)
    }

    pub fn validate(&self) -> Result<()> {
        self.population.validate().map_err(|e| LinkError::Config(e.to_string()))?;
        if self.replications < 1 {
            return Err(LinkError::Config("replications must be at least 1".into()));
        }
        if self.betas.is_empty() || self.blocking.is_empty() {
            return Err(LinkError::Config("beta and blocking grids must be non-empty".into()));
        }
        if let Some(b) = self.betas.iter().chain(self.fixed_betas.values()).find(|b| !(0.0..=1.0).contains(*b)) {
            return Err(LinkError::Config(format!("beta {b} outside [0, 1]")));
        }
        let role = |name: &str| self.population.fields.iter().find(|f| f.name == name).map(|f| f.role);
        for opt in &self.blocking {
            for f in &opt.fields {
                if role(f) != Some(FieldRole::Blocking) {
                    return Err(LinkError::Config(format!("{f:?} in blocking option {:?} is not a blocking field", opt.name)));
                }
            }
        }
        for f in self.optional_fields.iter().chain(self.fixed_betas.keys()) {
            if role(f) != Some(FieldRole::Compared) {
                return Err(LinkError::Config(format!("{f:?} is not a compared field")));
            }
        }
        let always = self
            .population
            .fields
            .iter()
            .filter(|f| f.role == FieldRole::Compared && !self.optional_fields.contains(&f.name))
            .count();
        if always == 0 {
            return Err(LinkError::Config("every scenario needs a compared field".into()));
        }
        self.mu
            .levels(&PatternSpace::new(self.population.k)?)
            .map_err(|e| LinkError::Config(e.to_string()))?;
        Ok(())
    }

    /// Scenarios in output order: blocking option, then optional-field
    /// toggle, then β.
    pub fn scenarios(&self) -> Vec<Scenario> {
        let toggles: &[bool] = if self.optional_fields.is_empty() { &[false] } else { &[false, true] };
        let mut out = Vec::new();
        for (bi, blocking) in self.blocking.iter().enumerate() {
            for &optional in toggles {
                for (beta_index, &beta) in self.betas.iter().enumerate() {
                    out.push(Scenario {
                        id: out.len(),
                        blocking: blocking.name.clone(),
                        blocking_index: bi,
                        optional,
                        beta,
                        beta_index,
                    });
                }
            }
        }
        out
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct Scenario {
    pub id: usize,
    pub blocking: String,
    pub blocking_index: usize,
    pub optional: bool,
    pub beta: f64,
    pub beta_index: usize,
}

/// Outcome of one successful replication.
#[derive(Clone, Debug, PartialEq)]
pub struct ReplicationMetrics {
    pub confusion: ConfusionMatrix,
    pub ome: Option<f64>,
    pub mwge: Option<f64>,
    pub class_error: Vec<Option<f64>>,
    pub undeclared: u64,
    pub n: u64,
    pub fully_blocked: u64,
    pub loglik: Option<f64>,
    pub converged: Option<bool>,
}

#[derive(Clone, Debug)]
pub struct ReplicationRecord {
    pub scenario: usize,
    pub replication: usize,
    pub outcome: std::result::Result<ReplicationMetrics, String>,
}

/// Mean and Monte Carlo standard error of one metric in one scenario.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct SummaryRow {
    pub scenario: usize,
    pub class: String,
    pub metric: String,
    pub mean: f64,
    pub se: f64,
    pub count: usize,
}

#[derive(Clone, Debug)]
pub struct SweepResult {
    pub scenarios: Vec<Scenario>,
    pub classes: Vec<Partition>,
    pub replications: Vec<ReplicationRecord>,
    pub summary: Vec<SummaryRow>,
    pub failures: Vec<usize>,
}

impl SweepResult {
    pub fn summary_of(&self, scenario: usize, class: &str, metric: &str) -> Option<&SummaryRow> {
        self.summary
            .iter()
            .find(|r| r.scenario == scenario && r.class == class && r.metric == metric)
    }

    /// Per-replication values of a scenario-level metric.
    pub fn values(&self, scenario: usize, metric: &str) -> Vec<Option<f64>> {
        self.replications
            .iter()
            .filter(|r| r.scenario == scenario)
            .map(|r| {
                r.outcome.as_ref().ok().and_then(|m| match metric {
                    "mwge" => m.mwge,
                    "ome" => m.ome,
                    _ => None,
                })
            })
            .collect()
    }
}

/// Derives independent seeds from a base seed and a path of indices.
pub fn stream_seed(base: u64, path: &[u64]) -> u64 {
    path.iter().fold(base, |s, &i| chain_seed(s, i as usize))
}

/// Everything shared by the replications of a sweep.
struct SweepContext<'a> {
    cfg: &'a SweepConfig,
    space: Arc<PatternSpace>,
    files: Vec<DataFile>,
    truth: GroundTruth,
    class_totals: Vec<u64>,
    levels: ErrorLevels,
}

/// Generates, corrupts, links and scores every scenario × replication.
pub fn run_sweep(cfg: &SweepConfig) -> Result<SweepResult> {
    cfg.validate()?;
    let space = Arc::new(PatternSpace::new(cfg.population.k)?);
    let (files, truth) = generate_population(&cfg.population, stream_seed(cfg.seed, &[0]))?;
    let class_totals = truth.class_totals(&space);
    let ctx = SweepContext {
        cfg,
        levels: cfg.mu.levels(&space)?,
        space: space.clone(),
        files,
        truth,
        class_totals,
    };
    let scenarios = cfg.scenarios();
    let jobs: Vec<(usize, usize)> = scenarios
        .iter()
        .flat_map(|s| (0..cfg.replications).map(move |r| (s.id, r)))
        .collect();
    let threads = match cfg.threads {
        0 => std::thread::available_parallelism().map_or(1, |n| n.get()),
        t => t,
    }
    .clamp(1, jobs.len());

    let slots: Mutex<Vec<Option<ReplicationRecord>>> = Mutex::new(vec![None; jobs.len()]);
    let next = AtomicUsize::new(0);
    std::thread::scope(|scope| {
        for _ in 0..threads {
            scope.spawn(|| loop {
                let j = next.fetch_add(1, Ordering::Relaxed);
                if j >= jobs.len() {
                    break;
                }
                let (sid, rep) = jobs[j];
                let outcome = run_replication(&ctx, &scenarios[sid], rep).map_err(|e| e.to_string());
                slots.lock().unwrap()[j] = Some(ReplicationRecord {
                    scenario: sid,
                    replication: rep,
                    outcome,
                });
            });
        }
    });
    let replications: Vec<ReplicationRecord> = slots.into_inner().unwrap().into_iter().map(Option::unwrap).collect();
    let classes = space.patterns().to_vec();
    let summary = summarise(&scenarios, &classes, &replications);
    let failures = scenarios
        .iter()
        .map(|s| {
            replications
                .iter()
                .filter(|r| r.scenario == s.id && r.outcome.is_err())
                .count()
        })
        .collect();
    Ok(SweepResult {
        scenarios,
        classes,
        replications,
        summary,
        failures,
    })
}

fn run_replication(ctx: &SweepContext, scenario: &Scenario, rep: usize) -> Result<ReplicationMetrics> {
    let cfg = ctx.cfg;
    let pop = &cfg.population;
    let betas: BTreeMap<String, f64> = pop
        .fields
        .iter()
        .filter(|f| f.role == FieldRole::Compared)
        .map(|f| (f.name.clone(), *cfg.fixed_betas.get(&f.name).unwrap_or(&scenario.beta)))
        .collect();
    // The corruption stream depends only on β and the replication so
    // blocking and field choices are compared on identical noisy files.
    let observed = corrupt_files(
        &ctx.files,
        pop,
        &betas,
        stream_seed(cfg.seed, &[1, scenario.beta_index as u64, rep as u64]),
    )?;
    let mut names: Vec<&str> = pop
        .fields
        .iter()
        .filter(|f| f.role == FieldRole::Compared)
        .filter(|f| scenario.optional || !cfg.optional_fields.contains(&f.name))
        .map(|f| f.name.as_str())
        .collect();
    names.extend(cfg.blocking[scenario.blocking_index].fields.iter().map(String::as_str));
    let (files, schema) = project(&observed, pop, &names)?;
    let comparer = Comparer::new(&files, &schema, ctx.space.clone())?;

    let b = ctx.space.len();
    let lookup = AgreementLookup::new(ctx.space.clone());
    let mut tally: Vec<u64> = Vec::new();
    let mut labels = [None; crate::lattice::MAX_K];
    let (table, remap) = build_table_with(&comparer, cfg.tuple_limit, |tuple, id| {
        for (f, &r) in tuple.iter().enumerate() {
            labels[f] = Some(ctx.truth.entity(f, r));
        }
        let t = lookup.index(&labels[..tuple.len()]) as usize;
        if (id + 1) * b > tally.len() {
            tally.resize((id + 1) * b, 0);
        }
        tally[id * b + t] += 1;
    })?;
    let mut em = cfg.em.clone();
    em.seed = stream_seed(cfg.seed, &[2, rep as u64]);
    let linkage = fit_and_classify(table, &em, ctx.levels.clone())?;

    let mut confusion = ConfusionMatrix::new(b);
    let mut enumerated = vec![0u64; b];
    for (id, &row) in remap.iter().enumerate() {
        let d = &linkage.classification.rows[row];
        let decided = d.declared.then_some(d.candidate);
        for t in 0..b {
            let c = tally[id * b + t];
            if c > 0 {
                confusion.add(t, decided, c);
                enumerated[t] += c;
            }
        }
    }
    for t in 0..b {
        confusion.add(t, Some(ctx.space.singletons_index()), ctx.class_totals[t] - enumerated[t]);
    }
    debug_assert_eq!(confusion.total(), linkage.table.total_tuples());
    let mode = cfg.scoring;
    Ok(ReplicationMetrics {
        ome: ome(&confusion, mode).ok(),
        mwge: mwge(&confusion, mode).ok(),
        class_error: (0..b).map(|p| confusion.class_error_rate(p, mode)).collect(),
        undeclared: linkage.classification.undeclared_tuples(&linkage.table),
        n: linkage.table.total_tuples(),
        fully_blocked: linkage.table.fully_blocked(),
        loglik: linkage.fit.as_ref().map(|f| f.loglik),
        converged: linkage.fit.as_ref().map(|f| f.converged),
        confusion,
    })
}

/// `(class, metric, value)` triples of one replication.
fn metric_lines(m: &ReplicationMetrics, classes: &[Partition]) -> Vec<(String, String, f64)> {
    let mut out = Vec::new();
    let all = "all".to_string();
    if let Some(v) = m.ome {
        out.push((all.clone(), "ome".into(), v));
    }
    if let Some(v) = m.mwge {
        out.push((all.clone(), "mwge".into(), v));
    }
    out.push((all.clone(), "undeclared_fraction".into(), m.undeclared as f64 / m.n as f64));
    out.push((all.clone(), "fully_blocked".into(), m.fully_blocked as f64));
    if let Some(v) = m.loglik {
        out.push((all.clone(), "loglik".into(), v));
    }
    if let Some(c) = m.converged {
        out.push((all, "converged".into(), if c { 1.0 } else { 0.0 }));
    }
    for (p, class) in classes.iter().enumerate() {
        if let Some(v) = m.class_error[p] {
            out.push((class.to_string(), "error_rate".into(), v));
        }
    }
    out
}

fn summarise(scenarios: &[Scenario], classes: &[Partition], reps: &[ReplicationRecord]) -> Vec<SummaryRow> {
    let mut out = Vec::new();
    for s in scenarios {
        let mut groups: Vec<((String, String), Vec<f64>)> = Vec::new();
        for r in reps.iter().filter(|r| r.scenario == s.id) {
            if let Ok(m) = &r.outcome {
                for (class, metric, v) in metric_lines(m, classes) {
                    let key = (class, metric);
                    match groups.iter_mut().find(|(k, _)| *k == key) {
                        Some((_, vals)) => vals.push(v),
                        None => groups.push((key, vec![v])),
                    }
                }
            }
        }
        for ((class, metric), vals) in groups {
            let n = vals.len() as f64;
            let mean = vals.iter().sum::<f64>() / n;
            let se = if vals.len() > 1 {
                (vals.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0) / n).sqrt()
            } else {
                0.0
            };
            out.push(SummaryRow {
                scenario: s.id,
                class,
                metric,
                mean,
                se,
                count: vals.len(),
            });
        }
    }
    out
}

/// Runs a sweep and writes `scenarios.csv`, `metrics.csv` and
/// `summary.csv` into `out_dir`.
pub fn run_simulation(cfg: &SweepConfig, out_dir: &Path) -> Result<SweepResult> {
    let result = run_sweep(cfg)?;
    std::fs::create_dir_all(out_dir)?;

    let mut w = csv_writer(&out_dir.join("scenarios.csv"))?;
    w.write_record(["scenario", "blocking", "optional_fields", "beta", "replications", "failed"])?;
    for s in &result.scenarios {
        w.write_record([
            s.id.to_string(),
            s.blocking.clone(),
            if s.optional { "included" } else { "excluded" }.to_string(),
            fmt_f64(s.beta),
            cfg.replications.to_string(),
            result.failures[s.id].to_string(),
        ])?;
    }
    w.flush()?;

    let mut w = csv_writer(&out_dir.join("metrics.csv"))?;
    w.write_record(["scenario", "replication", "class", "metric", "value"])?;
    for r in &result.replications {
        match &r.outcome {
            Ok(m) => {
                for (class, metric, v) in metric_lines(m, &result.classes) {
                    w.write_record([r.scenario.to_string(), r.replication.to_string(), class, metric, fmt_f64(v)])?;
                }
            }
            Err(_) => {
                w.write_record([
                    r.scenario.to_string(),
                    r.replication.to_string(),
                    "all".into(),
                    "failed".into(),
                    "1".into(),
                ])?;
            }
        }
    }
    w.flush()?;

    let mut w = csv_writer(&out_dir.join("summary.csv"))?;
    w.write_record(["scenario", "blocking", "optional_fields", "beta", "class", "metric", "mean", "se", "count"])?;
    for row in &result.summary {
        let s = &result.scenarios[row.scenario];
        w.write_record([
            s.id.to_string(),
            s.blocking.clone(),
            if s.optional { "included" } else { "excluded" }.to_string(),
            fmt_f64(s.beta),
            row.class.clone(),
            row.metric.clone(),
            fmt_f64(row.mean),
            fmt_f64(row.se),
            row.count.to_string(),
        ])?;
    }
    w.flush()?;
    Ok(result)
}

/// Scores an assignments file against a ground-truth file. Tuples absent
/// from the assignments were resolved by blocking and count as declared
/// `1/2/.../K`.
pub fn evaluate_assignments(assignments: &Path, truth: &GroundTruth) -> Result<ConfusionMatrix> {
    let mut rdr = csv::Reader::from_path(assignments)
        .map_err(|e| LinkError::Input(format!("{}: {e}", assignments.display())))?;
    let headers = rdr.headers()?.clone();
    let k = truth.k();
    let space = PatternSpace::new(k)?;
    let col = |name: &str| {
        headers
            .iter()
            .position(|h| h == name)
            .ok_or_else(|| LinkError::Scoring(format!("assignments lack column {name:?}")))
    };
    let rec_cols: Vec<usize> = (1..=k).map(|i| col(&format!("rec_{i}"))).collect::<Result<_>>()?;
    if headers.iter().any(|h| h == format!("rec_{}", k + 1)) {
        return Err(LinkError::Scoring(format!("assignments have more than {k} files")));
    }
    let class_col = col("class")?;
    let decision_col = col("decision")?;
    let index = truth.index();
    let mut confusion = ConfusionMatrix::new(space.len());
    let mut listed = vec![0u64; space.len()];
    let mut seen: HashSet<Vec<usize>> = HashSet::new();
    let mut classes: HashMap<String, usize> = HashMap::new();
    for (line, rec) in rdr.records().enumerate() {
        let rec = rec?;
        let tuple: Vec<usize> = rec_cols
            .iter()
            .enumerate()
            .map(|(f, &c)| {
                let id = &rec[c];
                index[f].get(id).copied().ok_or_else(|| {
                    LinkError::Scoring(format!("line {}: record {id:?} not in file {} of the truth", line + 2, f + 1))
                })
            })
            .collect::<Result<_>>()?;
        let t = space.index_of(&truth.true_class(&tuple)).unwrap();
        if !seen.insert(tuple) {
            return Err(LinkError::Scoring(format!("line {}: tuple listed twice", line + 2)));
        }
        let decided = match &rec[decision_col] {
            "declared" => {
                let name = &rec[class_col];
                let p = match classes.get(name) {
                    Some(&p) => p,
                    None => {
                        let parsed: Partition = name.parse()?;
                        let p = space
                            .index_of(&parsed)
                            .ok_or_else(|| LinkError::Scoring(format!("class {name:?} is not a K={k} pattern")))?;
                        classes.insert(name.to_string(), p);
                        p
                    }
                };
                Some(p)
            }
            "undeclared" => None,
            other => return Err(LinkError::Scoring(format!("line {}: unknown decision {other:?}", line + 2))),
        };
        confusion.add(t, decided, 1);
        listed[t] += 1;
    }
    let totals = truth.class_totals(&space);
    for t in 0..space.len() {
        let rest = totals[t]
            .checked_sub(listed[t])
            .ok_or_else(|| LinkError::Scoring("more tuples listed than the truth allows".into()))?;
        confusion.add(t, Some(space.singletons_index()), rest);
    }
    Ok(confusion)
}

/// Writes the flat metrics CSV for one confusion matrix.
pub fn write_metrics<W: Write>(out: W, scenario: &str, space: &PatternSpace, m: &ConfusionMatrix, mode: ScoringMode) -> Result<()> {
    let mut w = csv::WriterBuilder::new().terminator(csv::Terminator::Any(b'\n')).from_writer(out);
    w.write_record(["scenario", "class", "metric", "value"])?;
    let mut emit = |class: &str, metric: &str, v: String| w.write_record([scenario, class, metric, &v]);
    emit("all", "tuples", m.total().to_string())?;
    if let Ok(v) = ome(m, mode) {
        emit("all", "ome", fmt_f64(v))?;
    }
    if let Ok(v) = mwge(m, mode) {
        emit("all", "mwge", fmt_f64(v))?;
    }
    for (p, class) in space.patterns().iter().enumerate() {
        let name = class.to_string();
        let total = m.class_total(p);
        let undeclared = m.get(p, None);
        let correct = m.get(p, Some(p));
        emit(&name, "true_total", total.to_string())?;
        emit(&name, "declared_correct", correct.to_string())?;
        emit(&name, "declared_wrong", (total - undeclared - correct).to_string())?;
        emit(&name, "undeclared", undeclared.to_string())?;
        if let Some(v) = m.class_error_rate(p, mode) {
            emit(&name, "error_rate", fmt_f64(v))?;
        }
    }
    w.flush()?;
    Ok(())
}

/// Scores `assignments` against `truth_path` and writes `metrics.csv` into
/// `out_dir`.
pub fn run_evaluate(assignments: &Path, truth_path: &Path, mode: ScoringMode, out_dir: &Path) -> Result<ConfusionMatrix> {
    let truth = GroundTruth::read_path(truth_path).map_err(|e| e.in_stage("read"))?;
    let confusion = evaluate_assignments(assignments, &truth)?;
    std::fs::create_dir_all(out_dir)?;
    let space = PatternSpace::new(truth.k())?;
    let file = BufWriter::new(File::create(out_dir.join("metrics.csv"))?);
    write_metrics(file, "evaluate", &space, &confusion, mode)?;
    Ok(confusion)
}

/// Writes generated files and their ground truth as CSV.
pub fn write_population(files: &[DataFile], truth: &GroundTruth, spec: &PopulationSpec, out_dir: &Path) -> Result<()> {
    std::fs::create_dir_all(out_dir)?;
    let names = spec.field_names();
    for f in files {
        let out = BufWriter::new(File::create(out_dir.join(format!("file{}.csv", f.file_id)))?);
        crate::comparison::write_datafile(out, f, &names)?;
    }
    truth.write_csv(BufWriter::new(File::create(out_dir.join("truth.csv"))?))
}
