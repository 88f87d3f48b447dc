//! Ground-truthed overlapping datafiles and hit-miss corruption.

use std::collections::{BTreeMap, HashMap};
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::comparison::{Comparator, DataFile, FieldRole, FieldSpec, FieldType, Record, Value};
use crate::error::{LinkError, Result};
use crate::lattice::{Partition, PatternSpace, MAX_K};

/// Offset weights `(2/5)·2^{-|d|}` for `d = -2..=2`.
pub const OFFSET_WEIGHTS: [f64; 5] = [0.1, 0.2, 0.4, 0.2, 0.1];

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum ValueDomain {
    /// `categories` equiprobable labels `0..categories`.
    Categorical { categories: u32 },
    /// Uniform over the inclusive range.
    Integer { min: i64, max: i64 },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SyntheticField {
    pub name: String,
    pub domain: ValueDomain,
    #[serde(default)]
    pub comparator: Comparator,
    pub role: FieldRole,
}

impl SyntheticField {
    pub fn categorical(name: &str, categories: u32, role: FieldRole) -> SyntheticField {
        SyntheticField {
            name: name.to_string(),
            domain: ValueDomain::Categorical { categories },
            comparator: Comparator::Exact,
            role,
        }
    }

    pub fn integer(name: &str, min: i64, max: i64, comparator: Comparator) -> SyntheticField {
        SyntheticField {
            name: name.to_string(),
            domain: ValueDomain::Integer { min, max },
            comparator,
            role: FieldRole::Compared,
        }
    }

    pub fn field_spec(&self) -> FieldSpec {
        FieldSpec {
            name: self.name.clone(),
            ty: match self.domain {
                ValueDomain::Categorical { .. } => FieldType::Categorical,
                ValueDomain::Integer { .. } => FieldType::Integer,
            },
            comparator: self.comparator.clone(),
            role: self.role,
        }
    }
}

/// Entities sharing one membership footprint: the set of files they
/// appear in.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Footprint {
    /// 1-based file ids.
    pub files: Vec<usize>,
    pub entities: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PopulationSpec {
    pub k: usize,
    pub file_sizes: Vec<usize>,
    pub overlap: Vec<Footprint>,
    pub fields: Vec<SyntheticField>,
}

impl PopulationSpec {
    pub fn validate(&self) -> Result<()> {
        if self.k < 2 || self.k > MAX_K {
            return Err(LinkError::Spec(format!("K = {} outside 2..={MAX_K}", self.k)));
        }
        if self.file_sizes.len() != self.k {
            return Err(LinkError::Spec(format!(
                "{} file sizes given for K = {}",
                self.file_sizes.len(),
                self.k
            )));
        }
        for fp in &self.overlap {
            if fp.files.is_empty() || fp.files.iter().any(|&f| f == 0 || f > self.k) {
                return Err(LinkError::Spec(format!("footprint {:?} is not a subset of 1..={}", fp.files, self.k)));
            }
            let mut sorted = fp.files.clone();
            sorted.sort_unstable();
            sorted.dedup();
            if sorted.len() != fp.files.len() {
                return Err(LinkError::Spec(format!("footprint {:?} repeats a file", fp.files)));
            }
        }
        for (k, &m) in self.file_sizes.iter().enumerate() {
            let implied: usize = self
                .overlap
                .iter()
                .filter(|fp| fp.files.contains(&(k + 1)))
                .map(|fp| fp.entities)
                .sum();
            if implied != m {
                return Err(LinkError::Spec(format!(
                    "file {} has size {m} but the overlap design places {implied} entities in it",
                    k + 1
                )));
            }
        }
        let mut names = std::collections::HashSet::new();
        for f in &self.fields {
            if !names.insert(f.name.as_str()) {
                return Err(LinkError::Spec(format!("duplicate field {:?}", f.name)));
            }
            match f.domain {
                ValueDomain::Categorical { categories: 0 } => {
                    return Err(LinkError::Spec(format!("field {:?} has no categories", f.name)))
                }
                ValueDomain::Integer { min, max } if min > max => {
                    return Err(LinkError::Spec(format!("field {:?} has empty support", f.name)))
                }
                _ => {}
            }
            f.field_spec().validate().map_err(|e| LinkError::Spec(e.to_string()))?;
        }
        Ok(())
    }

    pub fn num_entities(&self) -> usize {
        self.overlap.iter().map(|fp| fp.entities).sum()
    }

    pub fn field_specs(&self) -> Vec<FieldSpec> {
        self.fields.iter().map(SyntheticField::field_spec).collect()
    }

    pub fn field_names(&self) -> Vec<String> {
        self.fields.iter().map(|f| f.name.clone()).collect()
    }

    /// Derive file sizes from the overlap design.
    pub fn from_overlap(k: usize, overlap: Vec<Footprint>, fields: Vec<SyntheticField>) -> PopulationSpec {
        let file_sizes = (1..=k)
            .map(|f| overlap.iter().filter(|fp| fp.files.contains(&f)).map(|fp| fp.entities).sum())
            .collect();
        PopulationSpec {
            k,
            file_sizes,
            overlap,
            fields,
        }
    }
}

/// Entity id of every record, per file, in record order.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct GroundTruth {
    entities: Vec<Vec<u32>>,
    record_ids: Vec<Vec<String>>,
}

impl GroundTruth {
    pub fn new(entities: Vec<Vec<u32>>, record_ids: Vec<Vec<String>>) -> Result<GroundTruth> {
        if entities.len() != record_ids.len() || entities.iter().zip(&record_ids).any(|(a, b)| a.len() != b.len()) {
            return Err(LinkError::Input("ground truth entity and record lists differ in shape".into()));
        }
        Ok(GroundTruth { entities, record_ids })
    }

    pub fn k(&self) -> usize {
        self.entities.len()
    }

    pub fn entity(&self, file: usize, record: usize) -> u32 {
        self.entities[file][record]
    }

    pub fn entities(&self, file: usize) -> &[u32] {
        &self.entities[file]
    }

    pub fn record_ids(&self, file: usize) -> &[String] {
        &self.record_ids[file]
    }

    /// True class of a tuple of record indices.
    pub fn true_class(&self, tuple: &[usize]) -> Partition {
        let labels: Vec<u32> = tuple.iter().enumerate().map(|(f, &r)| self.entities[f][r]).collect();
        Partition::from_labels(&labels)
    }

    /// Number of tuples of each true class over the full product of the
    /// files, by Möbius inversion of the per-block co-occurrence counts.
    pub fn class_totals(&self, space: &PatternSpace) -> Vec<u64> {
        let k = self.k();
        let n_entities = self.entities.iter().flatten().map(|&e| e as usize + 1).max().unwrap_or(0);
        // presence[e] is a bitmask of the files entity e appears in.
        let mut presence = vec![0u32; n_entities];
        for (f, ents) in self.entities.iter().enumerate() {
            for &e in ents {
                presence[e as usize] |= 1 << f;
            }
        }
        let block_count = |block: &[usize]| -> u64 {
            if let [f] = block {
                return self.entities[*f].len() as u64;
            }
            let mask: u32 = block.iter().map(|&f| 1u32 << f).sum();
            presence.iter().filter(|&&m| m & mask == mask).count() as u64
        };
        debug_assert_eq!(space.k(), k);
        let b = space.len();
        let mut exact = vec![0u64; b];
        for p in (0..b).rev() {
            let at_least: u64 = space.get(p).blocks().iter().map(|blk| block_count(blk)).product();
            let coarser: u64 = (p + 1..b).filter(|&q| space.refines(p, q)).map(|q| exact[q]).sum();
            exact[p] = at_least - coarser;
        }
        exact
    }

    /// Map from record id to record index for each file.
    pub fn index(&self) -> Vec<HashMap<&str, usize>> {
        self.record_ids
            .iter()
            .map(|ids| ids.iter().enumerate().map(|(i, id)| (id.as_str(), i)).collect())
            .collect()
    }

    /// CSV with columns `file_id,record_id,entity_id`.
    pub fn write_csv<W: std::io::Write>(&self, out: W) -> Result<()> {
        let mut w = csv::WriterBuilder::new().terminator(csv::Terminator::Any(b'\n')).from_writer(out);
        w.write_record(["file_id", "record_id", "entity_id"])?;
        for (f, (ents, ids)) in self.entities.iter().zip(&self.record_ids).enumerate() {
            for (e, id) in ents.iter().zip(ids) {
                w.write_record([(f + 1).to_string(), id.clone(), e.to_string()])?;
            }
        }
        w.flush()?;
        Ok(())
    }

    pub fn read_csv<R: std::io::Read>(input: R) -> Result<GroundTruth> {
        #[derive(Deserialize)]
        struct Line {
            file_id: usize,
            record_id: String,
            entity_id: String,
        }
        let mut rdr = csv::Reader::from_reader(input);
        let mut entities: Vec<Vec<u32>> = Vec::new();
        let mut record_ids: Vec<Vec<String>> = Vec::new();
        let mut interned: HashMap<String, u32> = HashMap::new();
        for line in rdr.deserialize() {
            let line: Line = line?;
            if line.file_id == 0 || line.file_id > MAX_K {
                return Err(LinkError::Input(format!("file_id {} out of range", line.file_id)));
            }
            if entities.len() < line.file_id {
                entities.resize(line.file_id, Vec::new());
                record_ids.resize(line.file_id, Vec::new());
            }
            let next = interned.len() as u32;
            let e = *interned.entry(line.entity_id).or_insert(next);
            entities[line.file_id - 1].push(e);
            record_ids[line.file_id - 1].push(line.record_id);
        }
        GroundTruth::new(entities, record_ids)
    }

    pub fn read_path(path: &Path) -> Result<GroundTruth> {
        GroundTruth::read_csv(std::fs::File::open(path)?)
    }
}

/// Draw a population and place its entities into K files per the overlap
/// design. Entities keep their generation order inside every file.
pub fn generate_population(spec: &PopulationSpec, seed: u64) -> Result<(Vec<DataFile>, GroundTruth)> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n_entities = spec.num_entities();
    let values: Vec<Vec<Value>> = (0..n_entities)
        .map(|_| spec.fields.iter().map(|f| draw_value(f.domain, &mut rng)).collect())
        .collect();

    let mut files: Vec<DataFile> = (1..=spec.k)
        .map(|file_id| DataFile {
            file_id,
            records: Vec::new(),
        })
        .collect();
    let mut entities = vec![Vec::new(); spec.k];
    let mut record_ids = vec![Vec::new(); spec.k];
    let mut next = 0usize;
    for fp in &spec.overlap {
        for _ in 0..fp.entities {
            for &f in &fp.files {
                let id = format!("{}", files[f - 1].records.len() + 1);
                files[f - 1].records.push(Record {
                    id: id.clone(),
                    values: values[next].clone(),
                });
                entities[f - 1].push(next as u32);
                record_ids[f - 1].push(id);
            }
            next += 1;
        }
    }
    Ok((files, GroundTruth::new(entities, record_ids)?))
}

fn draw_value<R: Rng>(domain: ValueDomain, rng: &mut R) -> Value {
    match domain {
        ValueDomain::Categorical { categories } => Value::Token(rng.random_range(0..categories).to_string()),
        ValueDomain::Integer { min, max } => Value::Int(rng.random_range(min..=max)),
    }
}

/// Keep `value` with probability `1 − β`, otherwise draw uniformly from all
/// `C` categories.
pub fn hit_miss_categorical<R: Rng>(value: u32, beta: f64, categories: u32, rng: &mut R) -> u32 {
    if beta > 0.0 && rng.random::<f64>() < beta {
        rng.random_range(0..categories)
    } else {
        value
    }
}

/// Keep `value` with probability `1 − β`, otherwise shift it by an offset
/// in `-2..=2` drawn from [`OFFSET_WEIGHTS`] restricted to offsets that stay
/// inside `support`.
pub fn hit_miss_numeric<R: Rng>(value: i64, beta: f64, support: (i64, i64), rng: &mut R) -> i64 {
    if !(beta > 0.0 && rng.random::<f64>() < beta) {
        return value;
    }
    let feasible = |i: usize| {
        let v = value + i as i64 - 2;
        (support.0..=support.1).contains(&v)
    };
    let total: f64 = (0..5).filter(|&i| feasible(i)).map(|i| OFFSET_WEIGHTS[i]).sum();
    let mut u = rng.random::<f64>() * total;
    let mut last = 2;
    for i in (0..5).filter(|&i| feasible(i)) {
        last = i;
        if u < OFFSET_WEIGHTS[i] {
            break;
        }
        u -= OFFSET_WEIGHTS[i];
    }
    value + last as i64 - 2
}

/// Offset probabilities after restriction to the support, indexed by
/// `d + 2`.
pub fn offset_distribution(value: i64, support: (i64, i64)) -> [f64; 5] {
    let mut w = [0.0; 5];
    for (i, wi) in w.iter_mut().enumerate() {
        if (support.0..=support.1).contains(&(value + i as i64 - 2)) {
            *wi = OFFSET_WEIGHTS[i];
        }
    }
    let total: f64 = w.iter().sum();
    w.map(|x| x / total)
}

/// Corrupt every compared field independently per record. Each field draws
/// from its own stream so the noise on one field does not depend on which
/// other fields exist.
pub fn corrupt_files(
    files: &[DataFile],
    spec: &PopulationSpec,
    betas: &BTreeMap<String, f64>,
    seed: u64,
) -> Result<Vec<DataFile>> {
    for (name, &beta) in betas {
        let field = spec
            .fields
            .iter()
            .find(|f| &f.name == name)
            .ok_or_else(|| LinkError::Config(format!("beta given for unknown field {name:?}")))?;
        if field.role == FieldRole::Blocking {
            return Err(LinkError::Config(format!("blocking field {name:?} cannot be corrupted")));
        }
        if !(0.0..=1.0).contains(&beta) {
            return Err(LinkError::Config(format!("beta {beta} for {name:?} outside [0, 1]")));
        }
    }
    let mut out = files.to_vec();
    for (fi, field) in spec.fields.iter().enumerate() {
        if field.role == FieldRole::Blocking {
            continue;
        }
        let beta = *betas
            .get(&field.name)
            .ok_or_else(|| LinkError::Config(format!("no beta for compared field {:?}", field.name)))?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(fi as u64);
        for file in &mut out {
            for rec in &mut file.records {
                let v = rec
                    .values
                    .get_mut(fi)
                    .ok_or_else(|| LinkError::Input(format!("record {} lacks field {:?}", rec.id, field.name)))?;
                *v = corrupt_value(v, field, beta, &mut rng)?;
            }
        }
    }
    Ok(out)
}

fn corrupt_value<R: Rng>(v: &Value, field: &SyntheticField, beta: f64, rng: &mut R) -> Result<Value> {
    Ok(match (v, field.domain) {
        (Value::Missing, _) => Value::Missing,
        (Value::Token(t), ValueDomain::Categorical { categories }) => {
            let c: u32 = t
                .parse()
                .ok()
                .filter(|&c| c < categories)
                .ok_or_else(|| LinkError::Input(format!("{t:?} is not a category of {:?}", field.name)))?;
            Value::Token(hit_miss_categorical(c, beta, categories, rng).to_string())
        }
        (Value::Int(x), ValueDomain::Integer { min, max }) => {
            if !(min..=max).contains(x) {
                return Err(LinkError::Input(format!("{x} outside the support of {:?}", field.name)));
            }
            Value::Int(hit_miss_numeric(*x, beta, (min, max), rng))
        }
        (other, _) => {
            return Err(LinkError::Input(format!(
                "value {other} does not match the domain of {:?}",
                field.name
            )))
        }
    })
}

/// Keep only the named fields, in the given order.
pub fn project(files: &[DataFile], spec: &PopulationSpec, names: &[&str]) -> Result<(Vec<DataFile>, Vec<FieldSpec>)> {
    let idx: Vec<usize> = names
        .iter()
        .map(|n| {
            spec.fields
                .iter()
                .position(|f| f.name == *n)
                .ok_or_else(|| LinkError::Config(format!("unknown field {n:?}")))
        })
        .collect::<Result<_>>()?;
    let schema = idx.iter().map(|&i| spec.fields[i].field_spec()).collect();
    let files = files
        .iter()
        .map(|f| DataFile {
            file_id: f.file_id,
            records: f
                .records
                .iter()
                .map(|r| Record {
                    id: r.id.clone(),
                    values: idx.iter().map(|&i| r.values[i].clone()).collect(),
                })
                .collect(),
        })
        .collect();
    Ok((files, schema))
}
