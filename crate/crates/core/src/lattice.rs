//! Set partitions of `{1..K}` and the refinement lattice they form.
//!
//! Every matching pattern, blocking pattern and per-field agreement pattern
//! is a [`Partition`]. Partitions are stored as restricted-growth sequences
//! (RGS): `rgs[i]` is the block label of element `i + 1`, labels appear in
//! first-occurrence order, so each partition has exactly one encoding.
//!
//! [`PatternSpace`] holds all `B_K` partitions in a fixed order (descending
//! block count, then lexicographic RGS). For `K = 3` that order is
//! `1/2/3, 12/3, 13/2, 1/23, 123`.

use std::collections::HashMap;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{LinkError, Result};

/// Largest supported number of datafiles.
pub const MAX_K: usize = 12;

/// A set partition of `{1..K}` in restricted-growth encoding.
#[derive(Clone, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Partition {
    rgs: Vec<u8>,
}

impl Partition {
    /// Builds a partition from an arbitrary labelling: positions with equal
    /// labels share a block.
    pub fn from_labels<T: PartialEq>(labels: &[T]) -> Partition {
        let mut seen: Vec<&T> = Vec::new();
        let mut rgs = Vec::with_capacity(labels.len());
        for label in labels {
            match seen.iter().position(|s| *s == label) {
                Some(block) => rgs.push(block as u8),
                None => {
                    rgs.push(seen.len() as u8);
                    seen.push(label);
                }
            }
        }
        Partition { rgs }
    }

    /// Validates an explicit RGS.
    pub fn from_rgs(rgs: Vec<u8>) -> Result<Partition> {
        if rgs.is_empty() || rgs.len() > MAX_K {
            return Err(LinkError::SizeLimit {
                k: rgs.len(),
                cap: MAX_K,
            });
        }
        let mut max = 0u8;
        for (i, &label) in rgs.iter().enumerate() {
            let ok = if i == 0 { label == 0 } else { label <= max + 1 };
            if !ok {
                return Err(LinkError::ParsePartition {
                    text: format!("{rgs:?}"),
                    reason: "not a restricted-growth sequence".into(),
                });
            }
            max = max.max(label);
        }
        Ok(Partition { rgs })
    }

    pub fn singletons(k: usize) -> Partition {
        Partition {
            rgs: (0..k as u8).collect(),
        }
    }

    pub fn one_block(k: usize) -> Partition {
        Partition { rgs: vec![0; k] }
    }

    pub fn rgs(&self) -> &[u8] {
        &self.rgs
    }

    pub fn k(&self) -> usize {
        self.rgs.len()
    }

    pub fn block_count(&self) -> usize {
        self.rgs.iter().copied().max().map_or(0, |m| m as usize + 1)
    }

    pub fn is_singletons(&self) -> bool {
        self.block_count() == self.k()
    }

    /// Blocks as sorted lists of 0-based element indices, ordered by their
    /// smallest element.
    pub fn blocks(&self) -> Vec<Vec<usize>> {
        let mut blocks = vec![Vec::new(); self.block_count()];
        for (i, &label) in self.rgs.iter().enumerate() {
            blocks[label as usize].push(i);
        }
        blocks
    }

    /// Whether elements `i` and `j` (0-based) share a block.
    pub fn same_block(&self, i: usize, j: usize) -> bool {
        self.rgs[i] == self.rgs[j]
    }

    fn check_dims(&self, other: &Partition) -> Result<()> {
        if self.k() == other.k() {
            Ok(())
        } else {
            Err(LinkError::Dimension {
                left: self.k(),
                right: other.k(),
            })
        }
    }

    /// `self ≼ coarse`: every block of `self` lies inside a block of `coarse`.
    pub fn is_refinement_of(&self, coarse: &Partition) -> Result<bool> {
        self.check_dims(coarse)?;
        Ok(self.refines_unchecked(coarse))
    }

    pub(crate) fn refines_unchecked(&self, coarse: &Partition) -> bool {
        // Each fine block maps to exactly one coarse label.
        let mut image = [u8::MAX; MAX_K];
        for (&f, &c) in self.rgs.iter().zip(&coarse.rgs) {
            let slot = &mut image[f as usize];
            if *slot == u8::MAX {
                *slot = c;
            } else if *slot != c {
                return false;
            }
        }
        true
    }

    /// Greatest common refinement.
    pub fn meet(&self, other: &Partition) -> Result<Partition> {
        self.check_dims(other)?;
        let pairs: Vec<(u8, u8)> = self.rgs.iter().copied().zip(other.rgs.iter().copied()).collect();
        Ok(Partition::from_labels(&pairs))
    }

    /// Partitions obtained by merging two blocks; these are exactly the
    /// covers of `self` in the refinement order.
    pub fn upper_covers(&self) -> Vec<Partition> {
        let b = self.block_count() as u8;
        let mut out = Vec::new();
        for lo in 0..b {
            for hi in lo + 1..b {
                let merged: Vec<u8> = self
                    .rgs
                    .iter()
                    .map(|&l| if l == hi { lo } else { l })
                    .collect();
                out.push(Partition::from_labels(&merged));
            }
        }
        out
    }
}

impl fmt::Display for Partition {
    /// Slash notation (`13/2`) for K ≤ 9, bracketed blocks
    /// (`[1,10][2]...`) beyond that.
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let blocks = self.blocks();
        if self.k() <= 9 {
            for (bi, block) in blocks.iter().enumerate() {
                if bi > 0 {
                    f.write_str("/")?;
                }
                for &e in block {
                    write!(f, "{}", e + 1)?;
                }
            }
        } else {
            for block in &blocks {
                f.write_str("[")?;
                for (ei, &e) in block.iter().enumerate() {
                    if ei > 0 {
                        f.write_str(",")?;
                    }
                    write!(f, "{}", e + 1)?;
                }
                f.write_str("]")?;
            }
        }
        Ok(())
    }
}

impl fmt::Debug for Partition {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Partition({self})")
    }
}

impl FromStr for Partition {
    type Err = LinkError;

    fn from_str(text: &str) -> Result<Partition> {
        let bad = |reason: &str| LinkError::ParsePartition {
            text: text.to_string(),
            reason: reason.to_string(),
        };
        let trimmed = text.trim();
        let blocks: Vec<Vec<usize>> = if trimmed.starts_with('[') {
            let inner = trimmed
                .strip_prefix('[')
                .and_then(|t| t.strip_suffix(']'))
                .ok_or_else(|| bad("unbalanced brackets"))?;
            inner
                .split("][")
                .map(|block| {
                    block
                        .split(',')
                        .map(|e| e.trim().parse::<usize>().map_err(|_| bad("bad element")))
                        .collect::<Result<Vec<_>>>()
                })
                .collect::<Result<_>>()?
        } else {
            trimmed
                .split('/')
                .map(|block| {
                    if block.is_empty() {
                        return Err(bad("empty block"));
                    }
                    block
                        .chars()
                        .map(|c| {
                            c.to_digit(10)
                                .filter(|&d| d >= 1)
                                .map(|d| d as usize)
                                .ok_or_else(|| bad("slash notation takes digits 1-9"))
                        })
                        .collect()
                })
                .collect::<Result<_>>()?
        };
        let k: usize = blocks.iter().map(Vec::len).sum();
        if k == 0 || k > MAX_K {
            return Err(LinkError::SizeLimit { k, cap: MAX_K });
        }
        let mut labels = vec![usize::MAX; k];
        for (bi, block) in blocks.iter().enumerate() {
            for &e in block {
                if e == 0 || e > k || labels[e - 1] != usize::MAX {
                    return Err(bad("elements must cover 1..K exactly once"));
                }
                labels[e - 1] = bi;
            }
        }
        Ok(Partition::from_labels(&labels))
    }
}

impl Serialize for Partition {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        s.collect_str(self)
    }
}

impl<'de> Deserialize<'de> for Partition {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let text = String::deserialize(d)?;
        text.parse().map_err(serde::de::Error::custom)
    }
}

fn check_k(k: usize) -> Result<()> {
    if (1..=MAX_K).contains(&k) {
        Ok(())
    } else {
        Err(LinkError::SizeLimit { k, cap: MAX_K })
    }
}

/// Bell number `B_k` from `B_k = Σ_{j<k} C(k-1, j) B_j`, `B_0 = 1`.
pub fn bell_number(k: usize) -> Result<u64> {
    check_k(k)?;
    let mut bell = vec![1u64];
    for n in 1..=k {
        let mut binom = 1u64;
        let mut sum = 0u64;
        for j in 0..n {
            sum += binom * bell[j];
            binom = binom * (n as u64 - 1 - j as u64) / (j as u64 + 1);
        }
        bell.push(sum);
    }
    Ok(bell[k])
}

/// All partitions of `{1..K}` in canonical order, with a reverse index.
#[derive(Clone, Debug)]
pub struct PatternSpace {
    k: usize,
    patterns: Vec<Partition>,
    index: HashMap<Partition, usize>,
}

impl PatternSpace {
    pub fn new(k: usize) -> Result<PatternSpace> {
        check_k(k)?;
        let mut patterns = Vec::with_capacity(bell_number(k)? as usize);
        let mut rgs = vec![0u8; k];
        // Lexicographic RGS enumeration; `maxes[i]` is max(rgs[..=i]).
        let mut maxes = vec![0u8; k];
        loop {
            patterns.push(Partition { rgs: rgs.clone() });
            let mut i = k - 1;
            loop {
                if i == 0 {
                    patterns.sort_by(|a, b| {
                        a.block_count()
                            .cmp(&b.block_count())
                            .reverse()
                            .then_with(|| a.rgs.cmp(&b.rgs))
                    });
                    let index = patterns
                        .iter()
                        .enumerate()
                        .map(|(i, p)| (p.clone(), i))
                        .collect();
                    return Ok(PatternSpace { k, patterns, index });
                }
                if rgs[i] <= maxes[i - 1] {
                    rgs[i] += 1;
                    maxes[i] = maxes[i - 1].max(rgs[i]);
                    for j in i + 1..k {
                        rgs[j] = 0;
                        maxes[j] = maxes[i];
                    }
                    break;
                }
                i -= 1;
            }
        }
    }

    pub fn k(&self) -> usize {
        self.k
    }

    /// `B_K`.
    pub fn len(&self) -> usize {
        self.patterns.len()
    }

    pub fn is_empty(&self) -> bool {
        self.patterns.is_empty()
    }

    pub fn patterns(&self) -> &[Partition] {
        &self.patterns
    }

    pub fn get(&self, idx: usize) -> &Partition {
        &self.patterns[idx]
    }

    pub fn index_of(&self, p: &Partition) -> Option<usize> {
        self.index.get(p).copied()
    }

    /// Index of `1/2/.../K`, always 0.
    pub fn singletons_index(&self) -> usize {
        0
    }

    /// Index of the one-block partition, always last.
    pub fn one_block_index(&self) -> usize {
        self.patterns.len() - 1
    }

    /// `patterns[fine] ≼ patterns[coarse]`.
    pub fn refines(&self, fine: usize, coarse: usize) -> bool {
        self.patterns[fine].refines_unchecked(&self.patterns[coarse])
    }

    /// Indices of every `p ≼ patterns[top]`, in canonical order.
    pub fn down_set(&self, top: usize) -> Vec<usize> {
        (0..self.len()).filter(|&p| self.refines(p, top)).collect()
    }

    /// Covering pairs `(fine, coarse)` of the refinement order, as indices.
    pub fn hasse_edges(&self) -> Vec<(usize, usize)> {
        let mut edges = Vec::new();
        for (fine, p) in self.patterns.iter().enumerate() {
            let mut covers: Vec<usize> = p
                .upper_covers()
                .iter()
                .map(|c| self.index[c])
                .collect();
            covers.sort_unstable();
            covers.dedup();
            edges.extend(covers.into_iter().map(|coarse| (fine, coarse)));
        }
        edges
    }
}

/// Same as [`PatternSpace::new`]; named after the operation it performs.
pub fn enumerate_patterns(k: usize) -> Result<PatternSpace> {
    PatternSpace::new(k)
}
