//! Comparison data for record K-tuples.
//!
//! Each compared field yields one agreement [`Partition`] per tuple: entries
//! whose values agree share a block. Missing values agree with nothing.
//! Blocking fields are met together into the tuple's blocking pattern
//! `p_b`; only classes `p ≼ p_b` remain admissible, and tuples with
//! `p_b = 1/2/.../K` are counted but never materialised.

use std::collections::{BTreeSet, HashMap};
use std::path::Path;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::error::{LinkError, Result};
use crate::lattice::{Partition, PatternSpace, MAX_K};

/// One cell of a record.
#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub enum Value {
    Missing,
    Token(String),
    Int(i64),
}

impl Value {
    pub fn is_missing(&self) -> bool {
        matches!(self, Value::Missing)
    }
}

impl std::fmt::Display for Value {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Value::Missing => Ok(()),
            Value::Token(t) => f.write_str(t),
            Value::Int(v) => write!(f, "{v}"),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Record {
    pub id: String,
    /// One value per configured field, in schema order.
    pub values: Vec<Value>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct DataFile {
    /// 1-based position among the K files.
    pub file_id: usize,
    pub records: Vec<Record>,
}

impl DataFile {
    pub fn size(&self) -> usize {
        self.records.len()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FieldType {
    Categorical,
    Integer,
}

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum Comparator {
    #[default]
    Exact,
    /// Integer banding: offset `o` maps value `v` to band `floor((v + o) / width)`.
    Banded { width: i64, offsets: Vec<i64> },
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FieldRole {
    Compared,
    Blocking,
}

/// A configured field and how it is compared.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct FieldSpec {
    pub name: String,
    #[serde(rename = "type")]
    pub ty: FieldType,
    #[serde(default)]
    pub comparator: Comparator,
    pub role: FieldRole,
}

impl FieldSpec {
    pub fn validate(&self) -> Result<()> {
        if let Comparator::Banded { width, offsets } = &self.comparator {
            if self.ty != FieldType::Integer {
                return Err(LinkError::Config(format!(
                    "field {}: banded comparison needs an integer field",
                    self.name
                )));
            }
            if *width < 1 {
                return Err(LinkError::Config(format!(
                    "field {}: band width must be positive",
                    self.name
                )));
            }
            let distinct: BTreeSet<_> = offsets.iter().collect();
            if offsets.is_empty()
                || distinct.len() != offsets.len()
                || offsets.iter().any(|o| *o < 0 || o >= width)
            {
                return Err(LinkError::Config(format!(
                    "field {}: offsets must be distinct and lie in [0, {width})",
                    self.name
                )));
            }
        }
        Ok(())
    }

    /// Names of the comparison columns this field contributes when compared.
    /// Banded fields contribute one column per offset.
    pub fn column_names(&self) -> Vec<String> {
        match &self.comparator {
            Comparator::Exact => vec![self.name.clone()],
            Comparator::Banded { offsets, .. } => offsets
                .iter()
                .map(|o| format!("{}+{o}", self.name))
                .collect(),
        }
    }
}

/// Band tokens `floor((value + o) / width)` for each offset; `None` when the
/// value is missing.
pub fn derive_banded_fields(value: &Value, width: i64, offsets: &[i64]) -> Vec<Option<i64>> {
    offsets
        .iter()
        .map(|o| match value {
            Value::Int(v) => Some((v + o).div_euclid(width)),
            _ => None,
        })
        .collect()
}

/// Agreement partition of a tuple of keys; `None` agrees with nothing.
pub fn agreement<T: PartialEq>(keys: &[Option<T>]) -> Partition {
    let labels: Vec<(usize, Option<&T>)> = keys
        .iter()
        .enumerate()
        .map(|(i, key)| match key {
            Some(k) => (usize::MAX, Some(k)),
            None => (i, None),
        })
        .collect();
    Partition::from_labels(&labels)
}

/// Table from pairwise-equality bitmasks to pattern indices, used for
/// K ≤ 6 where it has at most 2^15 entries.
#[derive(Clone, Debug)]
pub struct AgreementLookup {
    k: usize,
    table: Option<Vec<u32>>,
    /// `pair_bits[j]` lists `(i, bit)` for every `i < j`.
    pair_bits: Vec<Vec<(usize, u32)>>,
    space: Arc<PatternSpace>,
}

const LOOKUP_MAX_K: usize = 6;

const MISSING_KEY: i64 = i64::MIN;

impl AgreementLookup {
    pub fn new(space: Arc<PatternSpace>) -> AgreementLookup {
        let k = space.k();
        let table = (k <= LOOKUP_MAX_K).then(|| {
            let pairs = k * (k - 1) / 2;
            let mut table = vec![u32::MAX; 1 << pairs];
            for (idx, p) in space.patterns().iter().enumerate() {
                let mut mask = 0usize;
                let mut bit = 0;
                for i in 0..k {
                    for j in i + 1..k {
                        if p.same_block(i, j) {
                            mask |= 1 << bit;
                        }
                        bit += 1;
                    }
                }
                table[mask] = idx as u32;
            }
            table
        });
        let mut pair_bits = vec![Vec::new(); k];
        let mut bit = 0;
        for i in 0..k {
            for slot in pair_bits.iter_mut().skip(i + 1) {
                slot.push((i, bit));
                bit += 1;
            }
        }
        AgreementLookup {
            k,
            table,
            pair_bits,
            space,
        }
    }

    /// Whether pattern indices can be read from equality bitmasks.
    pub fn has_table(&self) -> bool {
        self.table.is_some()
    }

    /// `(i, bit)` for the pairs `(i, j)` with `i < j`.
    pub fn pair_bits(&self, j: usize) -> &[(usize, u32)] {
        &self.pair_bits[j]
    }

    /// Pattern index of an equality bitmask; only valid with a table.
    #[inline]
    pub fn from_mask(&self, mask: usize) -> u32 {
        self.table.as_ref().expect("lookup table present")[mask]
    }

    /// Pattern index of [`agreement`] over `keys`.
    #[inline]
    pub fn index<T: PartialEq>(&self, keys: &[Option<T>]) -> u32 {
        debug_assert_eq!(keys.len(), self.k);
        match &self.table {
            Some(table) => {
                let mut mask = 0usize;
                let mut bit = 0;
                for i in 0..self.k {
                    for j in i + 1..self.k {
                        if let (Some(a), Some(b)) = (&keys[i], &keys[j]) {
                            if a == b {
                                mask |= 1 << bit;
                            }
                        }
                        bit += 1;
                    }
                }
                table[mask]
            }
            None => self.space.index_of(&agreement(keys)).unwrap() as u32,
        }
    }
}

/// Agreement pattern of one field over a K-tuple. Banded fields agree only
/// when every band token agrees.
pub fn compare_field(tuple: &[&Record], field_index: usize, spec: &FieldSpec) -> Partition {
    match &spec.comparator {
        Comparator::Exact => {
            let keys: Vec<Option<&Value>> = tuple
                .iter()
                .map(|r| Some(&r.values[field_index]).filter(|v| !v.is_missing()))
                .collect();
            agreement(&keys)
        }
        Comparator::Banded { width, offsets } => {
            let keys: Vec<Option<Vec<i64>>> = tuple
                .iter()
                .map(|r| {
                    derive_banded_fields(&r.values[field_index], *width, offsets)
                        .into_iter()
                        .collect()
                })
                .collect();
            agreement(&keys)
        }
    }
}

/// Meet of the agreement patterns of all blocking fields; `12...K` when
/// there are none.
pub fn blocking_pattern(tuple: &[&Record], schema: &[FieldSpec]) -> Partition {
    schema
        .iter()
        .enumerate()
        .filter(|(_, s)| s.role == FieldRole::Blocking)
        .map(|(i, s)| compare_field(tuple, i, s))
        .fold(Partition::one_block(tuple.len()), |acc, p| {
            acc.meet(&p).expect("same K")
        })
}

/// One aggregated observation: per-column agreement pattern indices, the
/// blocking pattern index and the number of tuples sharing them.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Row {
    pub gamma: Vec<u32>,
    pub blocking: u32,
    pub count: u64,
}

/// Frequency counts of distinct `(γ, p_b)` keys, the sufficient statistics
/// for EM.
#[derive(Clone, Debug)]
pub struct PatternTable {
    space: Arc<PatternSpace>,
    columns: Vec<String>,
    rows: Vec<Row>,
    total_tuples: u64,
    fully_blocked: u64,
    file_sizes: Vec<usize>,
    admissible: HashMap<u32, Arc<[u32]>>,
}

impl PatternTable {
    pub fn space(&self) -> &Arc<PatternSpace> {
        &self.space
    }

    pub fn k(&self) -> usize {
        self.space.k()
    }

    /// Number of comparison columns `F`.
    pub fn num_fields(&self) -> usize {
        self.columns.len()
    }

    pub fn columns(&self) -> &[String] {
        &self.columns
    }

    pub fn rows(&self) -> &[Row] {
        &self.rows
    }

    /// `n = ∏ m_k`.
    pub fn total_tuples(&self) -> u64 {
        self.total_tuples
    }

    /// Tuples whose blocking pattern is `1/2/.../K`.
    pub fn fully_blocked(&self) -> u64 {
        self.fully_blocked
    }

    /// Tuples represented by the rows.
    pub fn training_tuples(&self) -> u64 {
        self.total_tuples - self.fully_blocked
    }

    pub fn file_sizes(&self) -> &[usize] {
        &self.file_sizes
    }

    /// Classes admissible under the blocking pattern with index `pb`.
    pub fn admissible(&self, pb: u32) -> &[u32] {
        &self.admissible[&pb]
    }

    pub fn row_label(&self, row: &Row) -> String {
        let gamma: Vec<String> = row
            .gamma
            .iter()
            .map(|&g| self.space.get(g as usize).to_string())
            .collect();
        format!(
            "γ=({}) p_b={}",
            gamma.join(", "),
            self.space.get(row.blocking as usize)
        )
    }
}

/// Accumulates rows and hands out provisional row ids; [`TableBuilder::finish`]
/// sorts rows into canonical order and returns the id remapping.
#[derive(Debug)]
pub struct TableBuilder {
    space: Arc<PatternSpace>,
    columns: Vec<String>,
    /// Keyed by γ followed by the blocking index.
    index: HashMap<Vec<u32>, usize>,
    rows: Vec<Row>,
    scratch: Vec<u32>,
}

impl TableBuilder {
    pub fn new(space: Arc<PatternSpace>, columns: Vec<String>) -> TableBuilder {
        TableBuilder {
            space,
            columns,
            index: HashMap::new(),
            rows: Vec::new(),
            scratch: Vec::new(),
        }
    }

    /// Adds `count` tuples with the given key; returns the provisional row id.
    pub fn add(&mut self, gamma: &[u32], blocking: u32, count: u64) -> usize {
        debug_assert_eq!(gamma.len(), self.columns.len());
        self.scratch.clear();
        self.scratch.extend_from_slice(gamma);
        self.scratch.push(blocking);
        if let Some(&id) = self.index.get(self.scratch.as_slice()) {
            self.rows[id].count += count;
            return id;
        }
        let id = self.rows.len();
        self.index.insert(self.scratch.clone(), id);
        self.rows.push(Row {
            gamma: gamma.to_vec(),
            blocking,
            count,
        });
        id
    }

    /// Adds `count` tuples to an existing provisional row.
    pub fn increment(&mut self, id: usize, count: u64) {
        self.rows[id].count += count;
    }

    /// Merges another builder's counts (associative and commutative).
    pub fn merge(&mut self, other: TableBuilder) {
        for row in other.rows {
            self.add(&row.gamma, row.blocking, row.count);
        }
    }

    pub fn finish(self, file_sizes: Vec<usize>, total_tuples: u64) -> Result<(PatternTable, Vec<usize>)> {
        let singletons = self.space.singletons_index() as u32;
        if self.rows.iter().any(|r| r.blocking == singletons) {
            return Err(LinkError::Input(
                "fully blocked tuples cannot be table rows".into(),
            ));
        }
        let materialised: u64 = self.rows.iter().map(|r| r.count).sum();
        if materialised > total_tuples {
            return Err(LinkError::Input(format!(
                "{materialised} tuples counted but the product has only {total_tuples}"
            )));
        }
        let mut order: Vec<usize> = (0..self.rows.len()).collect();
        order.sort_by(|&a, &b| {
            let (ra, rb) = (&self.rows[a], &self.rows[b]);
            (ra.blocking, &ra.gamma).cmp(&(rb.blocking, &rb.gamma))
        });
        let mut remap = vec![0; self.rows.len()];
        for (new, &old) in order.iter().enumerate() {
            remap[old] = new;
        }
        let mut slots: Vec<Option<Row>> = self.rows.into_iter().map(Some).collect();
        let rows: Vec<Row> = order.iter().map(|&old| slots[old].take().unwrap()).collect();
        let mut admissible = HashMap::new();
        for row in &rows {
            admissible.entry(row.blocking).or_insert_with(|| {
                self.space
                    .down_set(row.blocking as usize)
                    .into_iter()
                    .map(|p| p as u32)
                    .collect::<Vec<u32>>()
                    .into()
            });
        }
        Ok((
            PatternTable {
                space: self.space,
                columns: self.columns,
                rows,
                total_tuples,
                fully_blocked: total_tuples - materialised,
                file_sizes,
                admissible,
            },
            remap,
        ))
    }
}

enum ColumnKind {
    Exact,
    Band { width: i64, offset: i64 },
}

struct Column {
    field: usize,
    kind: ColumnKind,
}

/// Compiled comparison setup over K files: field values are interned to
/// integer keys so tuples can be compared without touching strings.
pub struct Comparer {
    space: Arc<PatternSpace>,
    column_names: Vec<String>,
    /// `keys[file][column][record]`.
    keys: Vec<Vec<Vec<Option<i64>>>>,
    /// `record_keys[file][record * columns + column]`, the same keys laid
    /// out record by record, with a missing key stored as a per-file
    /// sentinel so it never equals a key of another file.
    record_keys: Vec<Vec<i64>>,
    /// `blocking[file][record]`: interned conjunction of all blocking fields.
    blocking: Vec<Vec<Option<u32>>>,
    file_sizes: Vec<usize>,
    lookup: AgreementLookup,
}

impl Comparer {
    pub fn new(files: &[DataFile], schema: &[FieldSpec], space: Arc<PatternSpace>) -> Result<Comparer> {
        if files.len() != space.k() {
            return Err(LinkError::Config(format!(
                "{} files supplied for K = {}",
                files.len(),
                space.k()
            )));
        }
        for spec in schema {
            spec.validate()?;
        }
        if let Some(file) = files.iter().find(|f| f.records.is_empty()) {
            return Err(LinkError::Input(format!("file {} is empty", file.file_id)));
        }
        for file in files {
            if let Some(r) = file.records.iter().find(|r| r.values.len() != schema.len()) {
                return Err(LinkError::Input(format!(
                    "file {} record {}: {} values for {} fields",
                    file.file_id,
                    r.id,
                    r.values.len(),
                    schema.len()
                )));
            }
        }

        let mut columns = Vec::new();
        let mut column_names = Vec::new();
        for (fi, spec) in schema.iter().enumerate() {
            if spec.role != FieldRole::Compared {
                continue;
            }
            column_names.extend(spec.column_names());
            match &spec.comparator {
                Comparator::Exact => columns.push(Column {
                    field: fi,
                    kind: ColumnKind::Exact,
                }),
                Comparator::Banded { width, offsets } => {
                    columns.extend(offsets.iter().map(|&offset| Column {
                        field: fi,
                        kind: ColumnKind::Band {
                            width: *width,
                            offset,
                        },
                    }))
                }
            }
        }

        let mut interners: Vec<HashMap<String, i64>> = vec![HashMap::new(); schema.len()];
        let mut token_key = |field: usize, v: &Value| -> Result<Option<i64>> {
            Ok(match v {
                Value::Missing => None,
                Value::Int(i) if schema[field].ty == FieldType::Integer => Some(*i),
                Value::Token(t) if schema[field].ty == FieldType::Categorical => {
                    let map = &mut interners[field];
                    match map.get(t.as_str()) {
                        Some(&id) => Some(id),
                        None => {
                            let id = map.len() as i64;
                            map.insert(t.clone(), id);
                            Some(id)
                        }
                    }
                }
                other => {
                    return Err(LinkError::Input(format!(
                        "field {}: value {other:?} does not match its declared type",
                        schema[field].name
                    )))
                }
            })
        };

        let mut keys = Vec::with_capacity(files.len());
        for file in files {
            let mut per_column = Vec::with_capacity(columns.len());
            for col in &columns {
                let mut out = Vec::with_capacity(file.size());
                for rec in &file.records {
                    let v = &rec.values[col.field];
                    out.push(match col.kind {
                        ColumnKind::Exact => token_key(col.field, v)?,
                        ColumnKind::Band { width, offset } => {
                            token_key(col.field, v)?.map(|x| (x + offset).div_euclid(width))
                        }
                    });
                }
                per_column.push(out);
            }
            keys.push(per_column);
        }

        let blocking_fields: Vec<usize> = schema
            .iter()
            .enumerate()
            .filter(|(_, s)| s.role == FieldRole::Blocking)
            .map(|(i, _)| i)
            .collect();
        let mut block_ids: HashMap<Vec<i64>, u32> = HashMap::new();
        let mut blocking = Vec::with_capacity(files.len());
        for file in files {
            let mut out = Vec::with_capacity(file.size());
            for rec in &file.records {
                let mut key = Vec::new();
                let mut missing = false;
                for &fi in &blocking_fields {
                    let spec = &schema[fi];
                    match &spec.comparator {
                        Comparator::Exact => match token_key(fi, &rec.values[fi])? {
                            Some(k) => key.push(k),
                            None => missing = true,
                        },
                        Comparator::Banded { width, offsets } => {
                            for t in derive_banded_fields(&rec.values[fi], *width, offsets) {
                                match t {
                                    Some(k) => key.push(k),
                                    None => missing = true,
                                }
                            }
                        }
                    }
                }
                out.push(if missing {
                    None
                } else {
                    let next = block_ids.len() as u32;
                    Some(*block_ids.entry(key).or_insert(next))
                });
            }
            blocking.push(out);
        }

        if keys.iter().flatten().flatten().flatten().any(|&v| v <= MISSING_KEY + MAX_K as i64) {
            return Err(LinkError::Input("integer value too small to compare".into()));
        }
        let record_keys = keys
            .iter()
            .zip(files)
            .enumerate()
            .map(|(f, (cols, file))| {
                let missing = MISSING_KEY + f as i64;
                (0..file.size())
                    .flat_map(|r| cols.iter().map(move |col| col[r].unwrap_or(missing)))
                    .collect()
            })
            .collect();
        Ok(Comparer {
            record_keys,
            lookup: AgreementLookup::new(space.clone()),
            space,
            column_names,
            keys,
            blocking,
            file_sizes: files.iter().map(DataFile::size).collect(),
        })
    }

    pub fn space(&self) -> &Arc<PatternSpace> {
        &self.space
    }

    pub fn column_names(&self) -> &[String] {
        &self.column_names
    }

    pub fn file_sizes(&self) -> &[usize] {
        &self.file_sizes
    }

    /// `n = ∏ m_k`.
    pub fn total_tuples(&self) -> u64 {
        self.file_sizes.iter().map(|&m| m as u64).product()
    }

    /// Writes the pattern index of every comparison column for `tuple`
    /// (one record index per file) into `out`.
    pub fn gamma_into(&self, tuple: &[usize], out: &mut [u32]) {
        let mut scratch = [None; MAX_K];
        for (c, slot) in out.iter_mut().enumerate() {
            for (k, &r) in tuple.iter().enumerate() {
                scratch[k] = self.keys[k][c][r];
            }
            *slot = self.lookup.index(&scratch[..tuple.len()]);
        }
    }

    pub fn blocking_index(&self, tuple: &[usize]) -> u32 {
        let mut keys = [None; MAX_K];
        for (k, &r) in tuple.iter().enumerate() {
            keys[k] = self.blocking[k][r];
        }
        self.lookup.index(&keys[..tuple.len()])
    }

    /// Visits every tuple whose blocking pattern is not `1/2/.../K`, grouped
    /// by blocking pattern. Stops with an error once more than `limit`
    /// tuples have been visited.
    pub fn for_each_candidate(&self, limit: u64, mut visit: impl FnMut(&[usize], u32)) -> Result<u64> {
        self.enumerate(limit, false, |tuple, pb, _| visit(tuple, pb))
    }

    /// As [`Comparer::for_each_candidate`], also passing the comparison
    /// pattern indices of each tuple. Pairwise agreements are updated only
    /// for the files whose record changed.
    pub fn for_each_pattern(&self, limit: u64, visit: impl FnMut(&[usize], u32, &[u32])) -> Result<u64> {
        self.enumerate(limit, true, visit)
    }

    fn enumerate(
        &self,
        limit: u64,
        with_gamma: bool,
        mut visit: impl FnMut(&[usize], u32, &[u32]),
    ) -> Result<u64> {
        let k = self.space.k();
        let cols = self.column_names.len();
        let incremental = with_gamma && self.lookup.has_table();
        let mut gamma = vec![0u32; if with_gamma { cols } else { 0 }];
        // prefix[f * cols + c]: equality bits of column c among files 0..=f.
        let mut prefix = vec![0usize; k * cols];
        // Records per blocking key, per file.
        let mut by_key: Vec<HashMap<u32, Vec<usize>>> = vec![HashMap::new(); k];
        for (file, keys) in self.blocking.iter().enumerate() {
            for (r, key) in keys.iter().enumerate() {
                if let Some(key) = key {
                    by_key[file].entry(*key).or_default().push(r);
                }
            }
        }
        let mut visited = 0u64;
        let mut tuple = vec![0usize; k];

        for pb in 1..self.space.len() {
            let partition = self.space.get(pb);
            let blocks = partition.blocks();
            let multi: Vec<&Vec<usize>> = blocks.iter().filter(|b| b.len() > 1).collect();
            let single_files: Vec<usize> = blocks
                .iter()
                .filter(|b| b.len() == 1)
                .map(|b| b[0])
                .collect();
            // Keys present in every file of each multi-block, sorted for determinism.
            let shared: Vec<Vec<u32>> = multi
                .iter()
                .map(|block| {
                    let mut ks: Vec<u32> = by_key[block[0]]
                        .keys()
                        .copied()
                        .filter(|key| block.iter().all(|&f| by_key[f].contains_key(key)))
                        .collect();
                    ks.sort_unstable();
                    ks
                })
                .collect();

            let mut chosen = vec![0u32; multi.len()];
            let mut stack = vec![0usize; multi.len()];
            let mut depth = 0usize;
            loop {
                // Depth-first choice of pairwise-distinct keys for the multi-blocks.
                if depth == multi.len() {
                    let mut lists: Vec<&[usize]> = vec![&[]; k];
                    for (bi, block) in multi.iter().enumerate() {
                        for &f in block.iter() {
                            lists[f] = &by_key[f][&chosen[bi]];
                        }
                    }
                    // Singleton files only take records whose key no block uses.
                    let filtered: Vec<Vec<usize>> = single_files
                        .iter()
                        .map(|&f| {
                            (0..self.file_sizes[f])
                                .filter(|&r| self.blocking[f][r].is_none_or(|key| !chosen.contains(&key)))
                                .collect()
                        })
                        .collect();
                    for (i, &f) in single_files.iter().enumerate() {
                        lists[f] = &filtered[i];
                    }
                    let empty = lists.iter().any(|l| l.is_empty());
                    let mut pos = vec![0usize; k];
                    let mut dirty = 0usize;
                    'product: while !empty {
                        for f in dirty..k {
                            tuple[f] = lists[f][pos[f]];
                            if incremental {
                                let r = tuple[f];
                                let own = &self.record_keys[f][r * cols..(r + 1) * cols];
                                let (before, rest) = prefix.split_at_mut(f * cols);
                                let cur = &mut rest[..cols];
                                if f == 0 {
                                    cur.fill(0);
                                } else {
                                    cur.copy_from_slice(&before[(f - 1) * cols..]);
                                }
                                for &(i, bit) in self.lookup.pair_bits(f) {
                                    let ri = tuple[i];
                                    let other = &self.record_keys[i][ri * cols..(ri + 1) * cols];
                                    for ((m, a), b) in cur.iter_mut().zip(own).zip(other) {
                                        *m |= usize::from(a == b) << bit;
                                    }
                                }
                            }
                        }
                        let ok = single_files.len() < 2
                            || single_files.iter().enumerate().all(|(i, &f)| match self.blocking[f][tuple[f]] {
                                None => true,
                                Some(key) => single_files[..i]
                                    .iter()
                                    .all(|&g| self.blocking[g][tuple[g]] != Some(key)),
                            });
                        if ok {
                            visited += 1;
                            if visited > limit {
                                return Err(LinkError::TooManyTuples {
                                    count: visited,
                                    limit,
                                });
                            }
                            if incremental {
                                let last = &prefix[(k - 1) * cols..];
                                for (g, &m) in gamma.iter_mut().zip(last) {
                                    *g = self.lookup.from_mask(m);
                                }
                            } else if with_gamma {
                                self.gamma_into(&tuple, &mut gamma);
                            }
                            visit(&tuple, pb as u32, &gamma);
                        }
                        let mut f = k;
                        loop {
                            if f == 0 {
                                break 'product;
                            }
                            f -= 1;
                            pos[f] += 1;
                            if pos[f] < lists[f].len() {
                                break;
                            }
                            pos[f] = 0;
                        }
                        dirty = f;
                    }
                    if depth == 0 {
                        break;
                    }
                    depth -= 1;
                    stack[depth] += 1;
                    continue;
                }
                match shared[depth][stack[depth]..]
                    .iter()
                    .position(|key| !chosen[..depth].contains(key))
                {
                    Some(off) => {
                        stack[depth] += off;
                        chosen[depth] = shared[depth][stack[depth]];
                        depth += 1;
                        if depth < multi.len() {
                            stack[depth] = 0;
                        }
                    }
                    None => {
                        if depth == 0 {
                            break;
                        }
                        depth -= 1;
                        stack[depth] += 1;
                    }
                }
            }
        }
        Ok(visited)
    }

    /// Aggregates all candidate tuples into a [`PatternTable`].
    pub fn build_table(&self, limit: u64) -> Result<PatternTable> {
        let mut builder = TableBuilder::new(self.space.clone(), self.column_names.clone());
        self.for_each_pattern(limit, |_, pb, gamma| {
            builder.add(gamma, pb, 1);
        })?;
        Ok(builder.finish(self.file_sizes.clone(), self.total_tuples())?.0)
    }
}

/// Builds the pattern table for `files` under `schema`.
pub fn build_pattern_table(
    files: &[DataFile],
    schema: &[FieldSpec],
    limit: u64,
) -> Result<PatternTable> {
    let space = Arc::new(PatternSpace::new(files.len())?);
    Comparer::new(files, schema, space)?.build_table(limit)
}

/// Reads one datafile. The header must name every schema field; a
/// `record_id` column is used when present, otherwise the 1-based row
/// number. Empty cells are missing.
pub fn read_datafile(path: &Path, file_id: usize, schema: &[FieldSpec]) -> Result<DataFile> {
    let mut reader = csv::Reader::from_path(path)
        .map_err(|e| LinkError::Input(format!("{}: {e}", path.display())))?;
    read_datafile_from(&mut reader, file_id, schema)
        .map_err(|e| LinkError::Input(format!("{}: {e}", path.display())))
}

pub fn read_datafile_from<R: std::io::Read>(
    reader: &mut csv::Reader<R>,
    file_id: usize,
    schema: &[FieldSpec],
) -> Result<DataFile> {
    let headers = reader.headers()?.clone();
    let id_col = headers.iter().position(|h| h == "record_id");
    let cols: Vec<usize> = schema
        .iter()
        .map(|s| {
            headers
                .iter()
                .position(|h| h == s.name)
                .ok_or_else(|| LinkError::Input(format!("missing column {:?}", s.name)))
        })
        .collect::<Result<_>>()?;
    let mut records = Vec::new();
    for (row, result) in reader.records().enumerate() {
        let rec = result?;
        let id = match id_col {
            Some(c) => rec.get(c).unwrap_or_default().to_string(),
            None => (row + 1).to_string(),
        };
        let values = schema
            .iter()
            .zip(&cols)
            .map(|(spec, &c)| {
                let cell = rec.get(c).unwrap_or_default().trim();
                if cell.is_empty() {
                    return Ok(Value::Missing);
                }
                match spec.ty {
                    FieldType::Categorical => Ok(Value::Token(cell.to_string())),
                    FieldType::Integer => cell.parse().map(Value::Int).map_err(|_| {
                        LinkError::Input(format!(
                            "row {}: field {} expects an integer, got {cell:?}",
                            row + 1,
                            spec.name
                        ))
                    }),
                }
            })
            .collect::<Result<_>>()?;
        records.push(Record { id, values });
    }
    Ok(DataFile { file_id, records })
}

pub fn write_datafile<W: std::io::Write>(out: W, file: &DataFile, field_names: &[String]) -> Result<()> {
    let mut w = csv::WriterBuilder::new().terminator(csv::Terminator::Any(b'\n')).from_writer(out);
    let mut header = vec!["record_id".to_string()];
    header.extend(field_names.iter().cloned());
    w.write_record(&header)?;
    for rec in &file.records {
        let mut row = vec![rec.id.clone()];
        row.extend(rec.values.iter().map(Value::to_string));
        w.write_record(&row)?;
    }
    w.flush()?;
    Ok(())
}
