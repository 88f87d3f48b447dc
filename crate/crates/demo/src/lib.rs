//! WebAssembly bindings for the browser demo. Each export returns a JSON
//! string; the `*_json` functions hold the logic so they also run natively.

use std::sync::Arc;

use multilink::comparison::{Comparer, FieldRole};
use multilink::decision::ErrorLevels;
use multilink::em::EmOptions;
use multilink::evaluation::{mwge, ome, ConfusionMatrix, ScoringMode};
use multilink::pipeline::{build_table_with, fit_and_classify};
use multilink::synthetic::{
    corrupt_files, generate_population, hit_miss_categorical, hit_miss_numeric, Footprint, PopulationSpec,
    SyntheticField, OFFSET_WEIGHTS,
};
use multilink::PatternSpace;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;
use wasm_bindgen::prelude::*;

const MAX_DEMO_K: usize = 6;
const MAX_DEMO_ENTITIES: usize = 80;

#[derive(Serialize)]
struct Lattice {
    k: usize,
    patterns: Vec<String>,
    block_counts: Vec<usize>,
    /// `(finer, coarser)` covering pairs.
    edges: Vec<(usize, usize)>,
}

/// Matching patterns of `k` files in canonical order, with Hasse edges.
pub fn lattice_json(k: usize) -> Result<String, String> {
    if !(1..=MAX_DEMO_K).contains(&k) {
        return Err(format!("the demo draws K from 1 to {MAX_DEMO_K}"));
    }
    let space = PatternSpace::new(k).map_err(|e| e.to_string())?;
    let out = Lattice {
        k,
        patterns: space.patterns().iter().map(ToString::to_string).collect(),
        block_counts: space.patterns().iter().map(|p| p.block_count()).collect(),
        edges: space.hasse_edges(),
    };
    serde_json::to_string(&out).map_err(|e| e.to_string())
}

#[derive(Serialize)]
struct HitMiss {
    draws: u32,
    keep_expected: f64,
    keep_observed: f64,
    offsets_expected: [f64; 5],
    offsets_observed: [f64; 5],
}

/// Empirical hit-miss behaviour next to its closed form.
pub fn hit_miss_json(beta: f64, categories: u32, draws: u32, seed: u32) -> Result<String, String> {
    if !(0.0..=1.0).contains(&beta) {
        return Err("β must lie in [0, 1]".into());
    }
    if categories == 0 || draws == 0 {
        return Err("categories and draws must be positive".into());
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed.into());
    let mut kept = 0u32;
    let mut offsets = [0u32; 5];
    for i in 0..draws {
        let v = i % categories;
        kept += u32::from(hit_miss_categorical(v, beta, categories, &mut rng) == v);
        let d = hit_miss_numeric(50, beta, (0, 100), &mut rng) - 50;
        offsets[(d + 2) as usize] += 1;
    }
    let n = f64::from(draws);
    let mut expected = OFFSET_WEIGHTS.map(|w| beta * w);
    expected[2] += 1.0 - beta;
    let out = HitMiss {
        draws,
        keep_expected: 1.0 - beta + beta / f64::from(categories),
        keep_observed: f64::from(kept) / n,
        offsets_expected: expected,
        offsets_observed: offsets.map(|c| f64::from(c) / n),
    };
    serde_json::to_string(&out).map_err(|e| e.to_string())
}

#[derive(Serialize)]
struct LinkRun {
    classes: Vec<String>,
    /// `confusion[true][decided]`, last column undeclared.
    confusion: Vec<Vec<u64>>,
    /// Class shares among candidate tuples, comparable to the fitted shares.
    true_share: Vec<f64>,
    fitted_share: Option<Vec<f64>>,
    candidate_tuples: u64,
    fully_blocked: u64,
    ome: Option<f64>,
    mwge: Option<f64>,
    loglik: Option<f64>,
}

/// Generates three overlapping files, corrupts them, links them and scores
/// the decisions against the known truth.
pub fn simulate_link_json(entities: usize, beta: f64, blocks: u32, seed: u32) -> Result<String, String> {
    if !(4..=MAX_DEMO_ENTITIES).contains(&entities) {
        return Err(format!("entities must be between 4 and {MAX_DEMO_ENTITIES}"));
    }
    let seed = u64::from(seed);
    let quarter = entities / 4;
    let fp = |files: &[usize], n: usize| Footprint {
        files: files.to_vec(),
        entities: n,
    };
    let overlap = vec![
        fp(&[1, 2, 3], entities - 3 * quarter),
        fp(&[1, 2], quarter),
        fp(&[2, 3], quarter),
        fp(&[1], quarter),
    ];
    let mut fields: Vec<SyntheticField> = ["a", "b", "c", "d"]
        .iter()
        .map(|n| SyntheticField::categorical(n, 12, FieldRole::Compared))
        .collect();
    if blocks > 1 {
        fields.push(SyntheticField::categorical("block", blocks, FieldRole::Blocking));
    }
    let spec = PopulationSpec::from_overlap(3, overlap, fields);
    let (files, truth) = generate_population(&spec, seed).map_err(|e| e.to_string())?;
    let betas = ["a", "b", "c", "d"].iter().map(|n| (n.to_string(), beta)).collect();
    let observed = corrupt_files(&files, &spec, &betas, seed + 1).map_err(|e| e.to_string())?;

    let space = Arc::new(PatternSpace::new(3).map_err(|e| e.to_string())?);
    let b = space.len();
    let comparer = Comparer::new(&observed, &spec.field_specs(), space.clone()).map_err(|e| e.to_string())?;
    let mut tally: Vec<u64> = Vec::new();
    let (table, remap) = build_table_with(&comparer, u64::MAX, |tuple, id| {
        let t = space.index_of(&truth.true_class(tuple)).unwrap();
        if (id + 1) * b > tally.len() {
            tally.resize((id + 1) * b, 0);
        }
        tally[id * b + t] += 1;
    })
    .map_err(|e| e.to_string())?;
    let candidate_tuples = table.training_tuples();
    let fully_blocked = table.fully_blocked();
    let em = EmOptions {
        restarts: 5,
        seed,
        ..EmOptions::default()
    };
    let levels = ErrorLevels::uniform(b, 0.01).map_err(|e| e.to_string())?;
    let linkage = fit_and_classify(table, &em, levels).map_err(|e| e.to_string())?;

    let totals = truth.class_totals(&space);
    let mut confusion = ConfusionMatrix::new(b);
    let mut listed = vec![0u64; b];
    for (id, &row) in remap.iter().enumerate() {
        let d = &linkage.classification.rows[row];
        for t in 0..b {
            let c = tally.get(id * b + t).copied().unwrap_or(0);
            confusion.add(t, d.declared.then_some(d.candidate), c);
            listed[t] += c;
        }
    }
    for t in 0..b {
        confusion.add(t, Some(space.singletons_index()), totals[t] - listed[t]);
    }
    let listed_total: u64 = listed.iter().sum();
    let out = LinkRun {
        classes: space.patterns().iter().map(ToString::to_string).collect(),
        confusion: (0..b)
            .map(|t| (0..b).map(|d| confusion.get(t, Some(d))).chain([confusion.get(t, None)]).collect())
            .collect(),
        true_share: listed.iter().map(|&c| c as f64 / listed_total.max(1) as f64).collect(),
        fitted_share: linkage.fit.as_ref().map(|f| f.params.s.clone()),
        candidate_tuples,
        fully_blocked,
        ome: ome(&confusion, ScoringMode::DeclaredOnly).ok(),
        mwge: mwge(&confusion, ScoringMode::DeclaredOnly).ok(),
        loglik: linkage.fit.as_ref().map(|f| f.loglik),
    };
    serde_json::to_string(&out).map_err(|e| e.to_string())
}

#[wasm_bindgen]
pub fn lattice(k: usize) -> Result<String, JsError> {
    lattice_json(k).map_err(|e| JsError::new(&e))
}

#[wasm_bindgen(js_name = hitMiss)]
pub fn hit_miss(beta: f64, categories: u32, draws: u32, seed: u32) -> Result<String, JsError> {
    hit_miss_json(beta, categories, draws, seed).map_err(|e| JsError::new(&e))
}

#[wasm_bindgen(js_name = simulateLink)]
pub fn simulate_link(entities: usize, beta: f64, blocks: u32, seed: u32) -> Result<String, JsError> {
    simulate_link_json(entities, beta, blocks, seed).map_err(|e| JsError::new(&e))
}
