//! Acceptance checks. Prints one PASS/FAIL line per criterion and exits
//! non-zero if any fails. Pass a substring to run only matching criteria.

use std::collections::{BTreeMap, HashSet};
use std::path::{Path, PathBuf};
use std::sync::Arc;
use std::time::Instant;

use multilink::comparison::{
    derive_banded_fields, Comparator, Comparer, DataFile, FieldRole, PatternTable, TableBuilder, Value,
};
use multilink::decision::{classify_with, cutoff, weight, ErrorLevels};
use multilink::em::{class_conditional, e_step, fit, starting_points, EmOptions, ModelParams};
use multilink::pipeline::{run_link, run_simulation, run_sweep, LinkageConfig, SweepConfig, SweepResult};
use multilink::synthetic::{
    corrupt_files, generate_population, hit_miss_categorical, hit_miss_numeric, Footprint, PopulationSpec,
    SyntheticField, OFFSET_WEIGHTS,
};
use multilink::{bell_number, enumerate_patterns, Partition, PatternSpace};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Binomial, Distribution};

type Check = fn() -> Result<String, String>;

fn main() {
    let checks: [(&str, Check); 8] = [
        ("lattice", lattice),
        ("comparison", comparison),
        ("em", em),
        ("decision", decision),
        ("blocking-sweep", blocking_sweep),
        ("granularity-sweep", granularity_sweep),
        ("hit-miss", hit_miss),
        ("determinism", determinism),
    ];
    let filter: Vec<String> = std::env::args().skip(1).filter(|a| !a.starts_with('-')).collect();
    let mut failed = 0;
    for (name, check) in checks {
        if !filter.is_empty() && !filter.iter().any(|f| name.contains(f.as_str())) {
            continue;
        }
        let start = Instant::now();
        let outcome = check();
        let secs = start.elapsed().as_secs_f64();
        match outcome {
            Ok(detail) => println!("PASS {name} ({secs:.1}s): {detail}"),
            Err(detail) => {
                failed += 1;
                println!("FAIL {name} ({secs:.1}s): {detail}");
            }
        }
    }
    if failed > 0 {
        std::process::exit(1);
    }
}

fn ensure(cond: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg())
    }
}

fn err(e: impl std::fmt::Display) -> String {
    e.to_string()
}

fn repo_path(rel: &str) -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../..").join(rel)
}

// ---------------------------------------------------------------- lattice

/// `B_{n+1} = Σ_k C(n, k) B_k`.
fn bell_by_recurrence(max: usize) -> Vec<u64> {
    let mut bell = vec![1u64];
    for n in 0..max {
        let mut binom = 1u64;
        let mut next = 0u64;
        for k in 0..=n {
            next += binom * bell[k];
            binom = binom * (n - k) as u64 / (k + 1) as u64;
        }
        bell.push(next);
    }
    bell
}

/// Counts restricted growth strings of length `k` by brute force.
fn count_rgs(k: usize) -> u64 {
    fn go(prefix: &mut Vec<u8>, k: usize) -> u64 {
        if prefix.len() == k {
            return 1;
        }
        let top = prefix.iter().copied().max().map_or(0, |m| m + 1);
        let mut n = 0;
        for v in 0..=top {
            prefix.push(v);
            n += go(prefix, k);
            prefix.pop();
        }
        n
    }
    go(&mut vec![0], k)
}

/// Refinement from the definition: same block in `fine` implies same block
/// in `coarse`.
fn refines_by_pairs(fine: &Partition, coarse: &Partition) -> bool {
    let k = fine.k();
    (0..k).all(|i| (0..k).all(|j| !fine.same_block(i, j) || coarse.same_block(i, j)))
}

fn lattice() -> Result<String, String> {
    let expected = [1u64, 2, 5, 15, 52, 203, 877, 4140];
    let rec = bell_by_recurrence(8);
    for k in 1..=8 {
        let b = expected[k - 1];
        ensure(rec[k] == b, || format!("recurrence B_{k} = {} ≠ {b}", rec[k]))?;
        ensure(bell_number(k).map_err(err)? == b, || format!("bell_number({k}) ≠ {b}"))?;
        ensure(count_rgs(k) == b, || format!("RGS count for k={k} ≠ {b}"))?;
        let space = enumerate_patterns(k).map_err(err)?;
        ensure(space.len() as u64 == b, || format!("enumeration for k={k} gives {}", space.len()))?;
        let distinct: HashSet<&Partition> = space.patterns().iter().collect();
        ensure(distinct.len() == space.len(), || format!("duplicate patterns for k={k}"))?;
    }

    let mut pairs = 0u64;
    for k in 1..=5 {
        let space = PatternSpace::new(k).map_err(err)?;
        let pats = space.patterns();
        let n = pats.len();
        let le = |a: usize, b: usize| space.refines(a, b);
        for a in 0..n {
            ensure(le(a, a), || format!("k={k}: not reflexive at {}", pats[a]))?;
            for b in 0..n {
                pairs += 1;
                ensure(le(a, b) == refines_by_pairs(&pats[a], &pats[b]), || {
                    format!("k={k}: refines({}, {}) disagrees with definition", pats[a], pats[b])
                })?;
                if a != b {
                    ensure(!(le(a, b) && le(b, a)), || format!("k={k}: antisymmetry fails"))?;
                }
                let m = pats[a].meet(&pats[b]).map_err(err)?;
                let mi = space.index_of(&m).ok_or("meet outside space")?;
                ensure(le(mi, a) && le(mi, b), || format!("k={k}: meet is not a lower bound"))?;
                for c in 0..n {
                    if le(a, b) && le(b, c) {
                        ensure(le(a, c), || format!("k={k}: transitivity fails"))?;
                    }
                    if le(c, a) && le(c, b) {
                        ensure(le(c, mi), || format!("k={k}: meet is not greatest"))?;
                    }
                }
            }
            ensure(le(space.singletons_index(), a) && le(a, space.one_block_index()), || {
                format!("k={k}: bounds fail at {}", pats[a])
            })?;
        }

        // Reflexive-transitive closure of the Hasse edges is the order.
        let mut reach = vec![vec![false; n]; n];
        for (i, row) in reach.iter_mut().enumerate() {
            row[i] = true;
        }
        for (fine, coarse) in space.hasse_edges() {
            ensure(le(fine, coarse) && fine != coarse, || format!("k={k}: bad Hasse edge"))?;
            ensure(
                pats[coarse].block_count() + 1 == pats[fine].block_count(),
                || format!("k={k}: Hasse edge skips a rank"),
            )?;
            reach[fine][coarse] = true;
        }
        for m in 0..n {
            for i in 0..n {
                if reach[i][m] {
                    for j in 0..n {
                        if reach[m][j] {
                            reach[i][j] = true;
                        }
                    }
                }
            }
        }
        for a in 0..n {
            for b in 0..n {
                ensure(reach[a][b] == le(a, b), || format!("k={k}: Hasse closure differs at ({a}, {b})"))?;
            }
        }
    }
    Ok(format!("B_1..B_8 = {expected:?} three ways; order laws on {pairs} pairs for K ≤ 5"))
}

// ------------------------------------------------------------- comparison

fn compare_instance(k: usize, sizes: Vec<usize>, blocking: bool, seed: u64) -> Result<(u64, usize), String> {
    let mut fields = vec![
        SyntheticField::categorical("tok", 4, FieldRole::Compared),
        SyntheticField::integer(
            "age",
            0,
            30,
            Comparator::Banded {
                width: 3,
                offsets: vec![0, 1, 2],
            },
        ),
    ];
    if blocking {
        fields.push(SyntheticField::categorical("b1", 3, FieldRole::Blocking));
        fields.push(SyntheticField::categorical("b2", 2, FieldRole::Blocking));
    }
    let spec = PopulationSpec {
        k,
        file_sizes: sizes.clone(),
        overlap: (1..=k)
            .map(|f| Footprint {
                files: vec![f],
                entities: sizes[f - 1],
            })
            .collect(),
        fields,
    };
    let (mut files, _) = generate_population(&spec, seed).map_err(err)?;
    // A small value domain plus missing cells exercises every agreement shape.
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xABCD);
    for f in files.iter_mut() {
        for r in f.records.iter_mut() {
            for v in r.values.iter_mut() {
                if rng.random::<f64>() < 0.1 {
                    *v = Value::Missing;
                }
            }
        }
    }
    let schema = spec.field_specs();
    let space = Arc::new(PatternSpace::new(k).map_err(err)?);
    let comparer = Comparer::new(&files, &schema, space.clone()).map_err(err)?;
    let table = comparer.build_table(u64::MAX).map_err(err)?;

    let compared: Vec<usize> = (0..schema.len()).filter(|&i| schema[i].role == FieldRole::Compared).collect();
    let blocks: Vec<usize> = (0..schema.len()).filter(|&i| schema[i].role == FieldRole::Blocking).collect();

    // Brute force over the full product with labels built from raw values.
    let mut brute: BTreeMap<(u32, Vec<u32>), u64> = BTreeMap::new();
    let mut fully_blocked = 0u64;
    let mut total = 0u64;
    let mut tuple = vec![0usize; k];
    'outer: loop {
        total += 1;
        let recs: Vec<&Vec<Value>> = (0..k).map(|f| &files[f].records[tuple[f]].values).collect();
        let labels_of = |key: &dyn Fn(&Vec<Value>) -> Option<String>| -> Partition {
            let labels: Vec<String> = recs
                .iter()
                .enumerate()
                .map(|(f, r)| key(r).unwrap_or_else(|| format!("\u{0}missing-{f}")))
                .collect();
            Partition::from_labels(&labels)
        };
        let pb = labels_of(&|r: &Vec<Value>| {
            let vals: Vec<&Value> = blocks.iter().map(|&i| &r[i]).collect();
            if vals.iter().any(|v| v.is_missing()) {
                None
            } else {
                Some(format!("{vals:?}"))
            }
        });
        let pb_idx = space.index_of(&pb).unwrap() as u32;
        if pb.is_singletons() {
            fully_blocked += 1;
        } else {
            let mut gamma = Vec::new();
            for &i in &compared {
                match &schema[i].comparator {
                    Comparator::Exact => {
                        let p = labels_of(&|r: &Vec<Value>| match &r[i] {
                            Value::Missing => None,
                            v => Some(v.to_string()),
                        });
                        gamma.push(space.index_of(&p).unwrap() as u32);
                    }
                    Comparator::Banded { width, offsets } => {
                        for &o in offsets {
                            let p = labels_of(&|r: &Vec<Value>| match &r[i] {
                                Value::Int(v) => Some((v + o).div_euclid(*width).to_string()),
                                _ => None,
                            });
                            gamma.push(space.index_of(&p).unwrap() as u32);
                        }
                    }
                }
            }
            *brute.entry((pb_idx, gamma)).or_default() += 1;
        }
        for f in (0..k).rev() {
            tuple[f] += 1;
            if tuple[f] < sizes[f] {
                continue 'outer;
            }
            tuple[f] = 0;
        }
        break;
    }

    ensure(table.total_tuples() == total, || format!("total {} ≠ {total}", table.total_tuples()))?;
    ensure(table.fully_blocked() == fully_blocked, || {
        format!("fully blocked {} ≠ {fully_blocked}", table.fully_blocked())
    })?;
    ensure(table.rows().len() == brute.len(), || {
        format!("{} rows ≠ {} brute-force rows", table.rows().len(), brute.len())
    })?;
    for (row, ((pb, gamma), count)) in table.rows().iter().zip(&brute) {
        ensure(row.blocking == *pb && &row.gamma == gamma && row.count == *count, || {
            format!("row {} differs from brute force", table.row_label(row))
        })?;
    }
    Ok((total, brute.len()))
}

fn comparison() -> Result<String, String> {
    let mut tuples = 0;
    let mut rows = 0;
    for (k, sizes, blocking, seed) in [
        (2, vec![120, 90], false, 1),
        (3, vec![40, 35, 30], true, 2),
        (3, vec![30, 30, 30], false, 3),
        (4, vec![12, 11, 10, 9], true, 4),
    ] {
        let (t, r) = compare_instance(k, sizes, blocking, seed)?;
        tuples += t;
        rows += r;
    }

    let mut cases = 0;
    for d in 0..=5i64 {
        for v in -20i64..=40 {
            let a = derive_banded_fields(&Value::Int(v), 3, &[0, 1, 2]);
            let b = derive_banded_fields(&Value::Int(v + d), 3, &[0, 1, 2]);
            let agree = a.iter().zip(&b).filter(|(x, y)| x.is_some() && x == y).count() as i64;
            ensure(agree == (3 - d).max(0), || format!("v={v}, d={d}: {agree} bands agree"))?;
            cases += 1;
        }
    }
    Ok(format!(
        "{rows} rows over {tuples} tuples match brute force; banding exact on {cases} (v, d) cases"
    ))
}

// --------------------------------------------------------------------- em

fn random_table(rng: &mut ChaCha8Rng) -> Result<PatternTable, String> {
    let k = rng.random_range(2..=4);
    let space = Arc::new(PatternSpace::new(k).map_err(err)?);
    let b = space.len() as u32;
    let nf = rng.random_range(1..=4);
    let columns = (0..nf).map(|f| format!("c{f}")).collect();
    let mut builder = TableBuilder::new(space.clone(), columns);
    let blockings: Vec<u32> = (1..b).collect();
    let mut total = 0u64;
    for _ in 0..rng.random_range(3..40) {
        let pb = if rng.random::<f64>() < 0.5 {
            b - 1
        } else {
            blockings[rng.random_range(0..blockings.len())]
        };
        let gamma: Vec<u32> = (0..nf).map(|_| rng.random_range(0..b)).collect();
        let count = rng.random_range(1..60);
        total += count;
        builder.add(&gamma, pb, count);
    }
    let m = (1..).find(|m: &usize| (*m as u64).pow(k as u32) >= total * 2).unwrap();
    let (table, _) = builder.finish(vec![m; k], (m as u64).pow(k as u32)).map_err(err)?;
    Ok(table)
}

/// Two-class Fellegi–Sunter EM on raw record pairs with binary agreement.
/// Returns the log-likelihood after `iters` updates.
fn fellegi_sunter(agree: &[Vec<bool>], mut lambda: f64, mut m: Vec<f64>, mut u: Vec<f64>, iters: usize) -> f64 {
    let nf = m.len();
    let lik = |a: &[bool], p: &[f64]| -> f64 {
        a.iter()
            .zip(p)
            .map(|(&x, &q)| if x { q } else { 1.0 - q })
            .product()
    };
    for _ in 0..iters {
        let mut wm = 0.0;
        let mut wu = 0.0;
        let mut am = vec![0.0; nf];
        let mut au = vec![0.0; nf];
        for a in agree {
            let pm = lambda * lik(a, &m);
            let pu = (1.0 - lambda) * lik(a, &u);
            let g = pm / (pm + pu);
            wm += g;
            wu += 1.0 - g;
            for f in 0..nf {
                if a[f] {
                    am[f] += g;
                    au[f] += 1.0 - g;
                }
            }
        }
        lambda = wm / (wm + wu);
        m = am.iter().map(|x| x / wm).collect();
        u = au.iter().map(|x| x / wu).collect();
    }
    agree
        .iter()
        .map(|a| (lambda * lik(a, &m) + (1.0 - lambda) * lik(a, &u)).ln())
        .sum()
}

fn em() -> Result<String, String> {
    // Ascent and simplex invariants.
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let mut worst_drop = 0.0f64;
    let mut worst_simplex = 0.0f64;
    for t in 0..100 {
        let table = random_table(&mut rng)?;
        let opts = EmOptions {
            restarts: 1,
            max_iters: 300,
            tol: 1e-10,
            seed: t,
            ..EmOptions::default()
        };
        let res = fit(&table, &opts).map_err(err)?;
        for w in res.trace.windows(2) {
            let slack = 1e-9 * w[0].abs().max(1.0);
            worst_drop = worst_drop.max(w[0] - w[1]);
            ensure(w[1] >= w[0] - slack, || format!("table {t}: loglik fell {} → {}", w[0], w[1]))?;
        }
        worst_simplex = worst_simplex.max(res.params.simplex_error());
        ensure(res.params.simplex_error() < 1e-12, || {
            format!("table {t}: simplex error {}", res.params.simplex_error())
        })?;
    }

    // K = 2 against a directly coded Fellegi–Sunter EM.
    let spec = PopulationSpec {
        k: 2,
        file_sizes: vec![60, 50],
        overlap: vec![
            Footprint {
                files: vec![1, 2],
                entities: 35,
            },
            Footprint {
                files: vec![1],
                entities: 25,
            },
            Footprint {
                files: vec![2],
                entities: 15,
            },
        ],
        fields: (0..4)
            .map(|i| SyntheticField::categorical(&format!("f{i}"), 6, FieldRole::Compared))
            .collect(),
    };
    let (truth_files, _) = generate_population(&spec, 5).map_err(err)?;
    let betas = spec.field_names().into_iter().map(|n| (n, 0.2)).collect();
    let files = corrupt_files(&truth_files, &spec, &betas, 6).map_err(err)?;
    let space = Arc::new(PatternSpace::new(2).map_err(err)?);
    let table = Comparer::new(&files, &spec.field_specs(), space.clone())
        .and_then(|c| c.build_table(u64::MAX))
        .map_err(err)?;
    let opts = EmOptions {
        restarts: 4,
        max_iters: 150,
        tol: 0.0,
        seed: 9,
        ..EmOptions::default()
    };
    let res = fit(&table, &opts).map_err(err)?;
    let agree: Vec<Vec<bool>> = files[0]
        .records
        .iter()
        .flat_map(|a| files[1].records.iter().map(move |b| (a, b)))
        .map(|(a, b)| a.values.iter().zip(&b.values).map(|(x, y)| x == y).collect())
        .collect();
    let matched = space.index_of(&Partition::one_block(2)).unwrap();
    let apart = space.singletons_index();
    let mut worst_gap = 0.0f64;
    for (chain, start) in starting_points(&table, &opts).map_err(err)?.into_iter().enumerate() {
        let m = (0..4).map(|f| start.pi(f, matched, matched)).collect();
        let u = (0..4).map(|f| start.pi(f, matched, apart)).collect();
        let oracle = fellegi_sunter(&agree, start.s[matched], m, u, opts.max_iters);
        let gap = (oracle - res.chains[chain].loglik).abs();
        worst_gap = worst_gap.max(gap);
        ensure(gap <= 1e-8, || {
            format!("chain {chain}: loglik {} vs oracle {oracle}", res.chains[chain].loglik)
        })?;
    }

    // Recovery of class proportions: γ drawn from known, well-separated
    // parameters, with class sizes from a three-file overlap design.
    let spec = PopulationSpec {
        k: 3,
        file_sizes: vec![30, 30, 30],
        overlap: vec![
            fp(&[1, 2, 3], 14),
            fp(&[1, 2], 6),
            fp(&[1, 3], 4),
            fp(&[2, 3], 5),
            fp(&[1], 6),
            fp(&[2], 5),
            fp(&[3], 7),
        ],
        fields: vec![SyntheticField::categorical("x", 2, FieldRole::Compared)],
    };
    let (_, truth) = generate_population(&spec, 21).map_err(err)?;
    let space = Arc::new(PatternSpace::new(3).map_err(err)?);
    let b = space.len();
    let nf = 6;
    let mut rng = ChaCha8Rng::seed_from_u64(22);
    let mut builder = TableBuilder::new(space.clone(), (0..nf).map(|f| format!("x{f}")).collect());
    for (p, &c) in truth.class_totals(&space).iter().enumerate() {
        for _ in 0..c {
            // π(p | p) = 0.85, the rest spread evenly.
            let gamma: Vec<u32> = (0..nf)
                .map(|_| {
                    if rng.random::<f64>() < 0.85 {
                        p as u32
                    } else {
                        let q = rng.random_range(0..b - 1);
                        (q + usize::from(q >= p)) as u32
                    }
                })
                .collect();
            builder.add(&gamma, (b - 1) as u32, 1);
        }
    }
    let (table, _) = builder.finish(vec![30; 3], 27_000).map_err(err)?;
    let res = fit(
        &table,
        &EmOptions {
            restarts: 5,
            seed: 3,
            ..EmOptions::default()
        },
    )
    .map_err(err)?;
    let totals = truth.class_totals(&space);
    let n = table.total_tuples() as f64;
    let mut worst_s = 0.0f64;
    for (p, &c) in totals.iter().enumerate() {
        let gap = (res.params.s[p] - c as f64 / n).abs();
        worst_s = worst_s.max(gap);
        ensure(gap <= 0.05, || {
            format!("ŝ[{}] = {} vs true {}", space.get(p), res.params.s[p], c as f64 / n)
        })?;
    }
    Ok(format!(
        "100 tables: worst drop {worst_drop:.1e}, worst simplex error {worst_simplex:.1e}; \
         K=2 oracle gap {worst_gap:.1e}; K=3 worst |ŝ − s| {worst_s:.4}"
    ))
}

fn fp(files: &[usize], entities: usize) -> Footprint {
    Footprint {
        files: files.to_vec(),
        entities,
    }
}

// --------------------------------------------------------------- decision

fn random_params(rng: &mut ChaCha8Rng, b: usize, nf: usize) -> ModelParams {
    let mut simplex = |len: usize| -> Vec<f64> {
        let raw: Vec<f64> = (0..len).map(|_| rng.random::<f64>() + 0.01).collect();
        let sum: f64 = raw.iter().sum();
        raw.iter().map(|x| x / sum).collect()
    };
    let s = simplex(b);
    let pi = (0..nf)
        .map(|_| {
            let mut table = vec![0.0; b * b];
            for p in 0..b {
                for (q, v) in simplex(b).into_iter().enumerate() {
                    table[q * b + p] = v;
                }
            }
            table
        })
        .collect();
    ModelParams { s, pi }
}

/// Sign of `a − b` with exact ties.
fn order(a: f64, b: f64) -> std::cmp::Ordering {
    a.partial_cmp(&b).unwrap()
}

fn decision() -> Result<String, String> {
    // Weight, logit posterior and posterior give the same ranking.
    let mut rng = ChaCha8Rng::seed_from_u64(31);
    let mut comparisons = 0u64;
    for draw in 0..1000 {
        let k = rng.random_range(2..=4);
        let b = bell_number(k).unwrap() as usize;
        let nf = rng.random_range(1..=3);
        let params = random_params(&mut rng, b, nf);
        let class = rng.random_range(0..b);
        // Repeated patterns give exact ties that must survive in all orders.
        let pool: Vec<Vec<u32>> = (0..6)
            .map(|_| (0..nf).map(|_| rng.random_range(0..b as u32)).collect())
            .collect();
        let patterns: Vec<&Vec<u32>> = (0..12).map(|_| &pool[rng.random_range(0..pool.len())]).collect();
        let mut scored = Vec::new();
        for g in &patterns {
            let cond = class_conditional(&params, g);
            let joint: Vec<f64> = cond.iter().zip(&params.s).map(|(c, s)| c * s).collect();
            let post = joint[class] / joint.iter().sum::<f64>();
            let w = weight(&params, g, class).map_err(err)?;
            let logit = (params.s[class] / (1.0 - params.s[class])).ln() + w;
            scored.push((w, logit, post));
        }
        for i in 0..scored.len() {
            for j in 0..scored.len() {
                let (wi, li, pi) = scored[i];
                let (wj, lj, pj) = scored[j];
                comparisons += 1;
                let same = patterns[i] == patterns[j];
                let near = |x: f64, y: f64| (x - y).abs() <= 1e-12 * x.abs().max(y.abs()).max(1e-300);
                if !same && near(pi, pj) {
                    // Distinct patterns with numerically equal posteriors are
                    // compared through their likelihood ratio instead.
                    continue;
                }
                ensure(order(wi, wj) == order(pi, pj) && order(li, lj) == order(pi, pj), || {
                    format!("draw {draw}: weight, logit and posterior orders differ for class {class}")
                })?;
            }
        }
    }

    // Cutoff: longest prefix within budget, by construction.
    let mut rng = ChaCha8Rng::seed_from_u64(32);
    for _ in 0..2000 {
        let len = rng.random_range(0..30);
        let comps: Vec<f64> = (0..len).map(|_| rng.random::<f64>() * 0.01).collect();
        let mu = rng.random::<f64>() * 0.05;
        let cut = cutoff(&comps, mu);
        let spent: f64 = comps[..cut].iter().sum();
        ensure(spent <= mu, || format!("prefix of {cut} spends {spent} > {mu}"))?;
        ensure(cut == len || spent + comps[cut] > mu, || "prefix is not the longest".into())?;
    }

    // Realised false-declaration rate with the generating parameters.
    let spec = PopulationSpec {
        k: 3,
        file_sizes: vec![100, 100, 100],
        overlap: vec![
            fp(&[1, 2, 3], 50),
            fp(&[1, 2], 20),
            fp(&[1, 3], 10),
            fp(&[2, 3], 10),
            fp(&[1], 20),
            fp(&[2], 20),
            fp(&[3], 30),
        ],
        fields: vec![SyntheticField::categorical("x", 2, FieldRole::Compared)],
    };
    let (_, truth) = generate_population(&spec, 41).map_err(err)?;
    let space = Arc::new(PatternSpace::new(3).map_err(err)?);
    let b = space.len();
    let totals = truth.class_totals(&space);
    let n: u64 = totals.iter().sum();
    let nf = 4;
    let diag = 0.7;
    let s: Vec<f64> = totals.iter().map(|&c| c as f64 / n as f64).collect();
    let pi = vec![
        (0..b * b)
            .map(|i| if i / b == i % b { diag } else { (1.0 - diag) / (b - 1) as f64 })
            .collect::<Vec<f64>>();
        nf
    ];
    let params = ModelParams { s, pi };
    let cells = b.pow(nf as u32);
    let gamma_of = |mut c: usize| -> Vec<u32> {
        (0..nf)
            .map(|_| {
                let g = (c % b) as u32;
                c /= b;
                g
            })
            .collect()
    };
    let cell_probs: Vec<Vec<f64>> = (0..b)
        .map(|p| (0..cells).map(|c| class_conditional(&params, &gamma_of(c))[p]).collect())
        .collect();
    let levels = ErrorLevels::uniform(b, 0.01).map_err(err)?;
    let reps = 100;
    let mut rates = vec![Vec::with_capacity(reps); b];
    for rep in 0..reps {
        let mut rng = ChaCha8Rng::seed_from_u64(1000 + rep as u64);
        // counts[cell][true class] via a multinomial per class.
        let mut counts = vec![vec![0u64; b]; cells];
        for q in 0..b {
            let mut left = totals[q];
            let mut mass = 1.0;
            for c in 0..cells {
                if left == 0 {
                    break;
                }
                let p = (cell_probs[q][c] / mass).clamp(0.0, 1.0);
                let x = if c + 1 == cells { left } else { Binomial::new(left, p).map_err(err)?.sample(&mut rng) };
                counts[c][q] = x;
                left -= x;
                mass -= cell_probs[q][c];
            }
        }
        let mut builder = TableBuilder::new(space.clone(), (0..nf).map(|f| format!("x{f}")).collect());
        let mut cell_of_row = Vec::new();
        for (c, row) in counts.iter().enumerate() {
            let total: u64 = row.iter().sum();
            if total > 0 {
                builder.add(&gamma_of(c), (b - 1) as u32, total);
                cell_of_row.push(c);
            }
        }
        let (table, remap) = builder.finish(vec![100; 3], n).map_err(err)?;
        let mut cell_at = vec![0; table.rows().len()];
        for (prov, &c) in cell_of_row.iter().enumerate() {
            cell_at[remap[prov]] = c;
        }
        let posteriors = e_step(&params, &table).map_err(err)?;
        let cls = classify_with(&params, &table, posteriors, &levels).map_err(err)?;
        let mut false_declared = vec![0u64; b];
        for d in cls.rows.iter().filter(|d| d.declared) {
            let row = &counts[cell_at[d.row]];
            false_declared[d.candidate] += row.iter().sum::<u64>() - row[d.candidate];
        }
        for p in 0..b {
            rates[p].push(false_declared[p] as f64 / (n - totals[p]) as f64);
        }
    }
    let mut worst = String::new();
    for (p, r) in rates.iter().enumerate() {
        let mean = r.iter().sum::<f64>() / reps as f64;
        let var = r.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (reps - 1) as f64;
        let se = (var / reps as f64).sqrt();
        ensure(mean <= 0.01 + 3.0 * se, || {
            format!("class {}: false-declaration rate {mean:.4} > 0.01 + 3·{se:.4}", space.get(p))
        })?;
        worst.push_str(&format!(" {}={mean:.4}", space.get(p)));
    }
    Ok(format!(
        "{comparisons} rank comparisons exact; cutoff invariants on 2000 draws; \
         false-declaration rates over {reps} reps:{worst}"
    ))
}

// ------------------------------------------------------------ simulations

fn load_sweep(name: &str) -> Result<SweepConfig, String> {
    SweepConfig::load(&repo_path(name)).map_err(err)
}

fn mean_se(result: &SweepResult, scenario: usize) -> Result<(f64, f64), String> {
    let row = result
        .summary_of(scenario, "all", "mwge")
        .ok_or_else(|| format!("no MWGE for scenario {scenario}"))?;
    Ok((row.mean, row.se))
}

/// Paired difference `b − a` over replications of two scenarios: (mean, SE).
fn paired_diff(result: &SweepResult, a: usize, b: usize) -> Result<(f64, f64), String> {
    let va = result.values(a, "mwge");
    let vb = result.values(b, "mwge");
    let d: Vec<f64> = va
        .iter()
        .zip(&vb)
        .filter_map(|(x, y)| Some((*y)? - (*x)?))
        .collect();
    ensure(d.len() >= 2, || format!("scenarios {a}, {b}: too few paired replications"))?;
    let n = d.len() as f64;
    let mean = d.iter().sum::<f64>() / n;
    let var = d.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0);
    Ok((mean, (var / n).sqrt()))
}

fn ranks(v: &[f64]) -> Vec<f64> {
    let mut idx: Vec<usize> = (0..v.len()).collect();
    idx.sort_by(|&a, &b| v[a].total_cmp(&v[b]));
    let mut r = vec![0.0; v.len()];
    let mut i = 0;
    while i < idx.len() {
        let mut j = i;
        while j + 1 < idx.len() && v[idx[j + 1]] == v[idx[i]] {
            j += 1;
        }
        for &k in &idx[i..=j] {
            r[k] = (i + j) as f64 / 2.0;
        }
        i = j + 1;
    }
    r
}

fn spearman(x: &[f64], y: &[f64]) -> f64 {
    let (rx, ry) = (ranks(x), ranks(y));
    let n = x.len() as f64;
    let (mx, my) = (rx.iter().sum::<f64>() / n, ry.iter().sum::<f64>() / n);
    let cov: f64 = rx.iter().zip(&ry).map(|(a, b)| (a - mx) * (b - my)).sum();
    let vx: f64 = rx.iter().map(|a| (a - mx).powi(2)).sum();
    let vy: f64 = ry.iter().map(|b| (b - my).powi(2)).sum();
    cov / (vx * vy).sqrt()
}

fn failures(result: &SweepResult) -> Result<(), String> {
    let failed: usize = result.failures.iter().sum();
    ensure(failed == 0, || format!("{failed} replications failed"))
}

fn blocking_sweep() -> Result<String, String> {
    let cfg = load_sweep("configs/blocking.toml")?;
    let result = run_sweep(&cfg).map_err(err)?;
    failures(&result)?;
    let find = |blocking: &str, beta: f64| {
        result
            .scenarios
            .iter()
            .find(|s| s.blocking == blocking && s.beta == beta)
            .map(|s| s.id)
            .ok_or_else(|| format!("no scenario {blocking} β={beta}"))
    };
    let mut lines = Vec::new();
    let mut blocked_means = Vec::new();
    for &beta in &cfg.betas {
        let (none, _) = mean_se(&result, find("none", beta)?)?;
        let (blocked, _) = mean_se(&result, find("town+gender", beta)?)?;
        ensure(blocked < none, || format!("β={beta}: blocked MWGE {blocked:.4} ≥ unblocked {none:.4}"))?;
        blocked_means.push(blocked);
        lines.push(format!("β={beta}: {none:.4}→{blocked:.4}"));
    }
    let rho = spearman(&cfg.betas, &blocked_means);
    ensure(rho > 0.0, || {
        format!("Spearman trend of blocked MWGE in β is {rho:.2} ({})", lines.join(", "))
    })?;
    ensure(blocked_means[0] < 0.10, || format!("blocked MWGE at β=0.05 is {:.4}", blocked_means[0]))?;
    Ok(format!("{}; blocked Spearman ρ = {rho:.2}", lines.join(", ")))
}

fn granularity_sweep() -> Result<String, String> {
    let cfg = load_sweep("configs/granularity.toml")?;
    let result = run_sweep(&cfg).map_err(err)?;
    failures(&result)?;
    let find = |blocking: &str, optional: bool, beta: f64| {
        result
            .scenarios
            .iter()
            .find(|s| s.blocking == blocking && s.optional == optional && s.beta == beta)
            .map(|s| s.id)
            .ok_or_else(|| format!("no scenario {blocking} optional={optional} β={beta}"))
    };
    let levels: Vec<&str> = cfg.blocking.iter().map(|b| b.name.as_str()).collect();
    let mut worst_rise = f64::NEG_INFINITY;
    for &beta in &cfg.betas {
        for optional in [false, true] {
            for (i, coarse) in levels.iter().enumerate() {
                for fine in &levels[i + 1..] {
                    let a = find(coarse, optional, beta)?;
                    let b = find(fine, optional, beta)?;
                    let (d, se) = paired_diff(&result, a, b)?;
                    worst_rise = worst_rise.max(d - se);
                    ensure(d <= se, || {
                        format!(
                            "β={beta} optional={optional}: {fine} raises MWGE over {coarse} by {d:.4} (SE {se:.4})"
                        )
                    })?;
                }
            }
        }
    }
    // Low-quality field: mean MWGE over every replication at a blocking
    // level, with and without the field.
    let mut gains = Vec::new();
    let mut cells_up = 0;
    for level in &levels {
        let (mut with, mut without) = (Vec::new(), Vec::new());
        for &beta in &cfg.betas {
            let w = result.values(find(level, true, beta)?, "mwge");
            let wo = result.values(find(level, false, beta)?, "mwge");
            let (mw, _) = mean_se(&result, find(level, true, beta)?)?;
            let (mwo, _) = mean_se(&result, find(level, false, beta)?)?;
            cells_up += usize::from(mw > mwo);
            with.extend(w.into_iter().flatten());
            without.extend(wo.into_iter().flatten());
        }
        let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
        let (mw, mwo) = (mean(&with), mean(&without));
        ensure(mw > mwo, || format!("{level}: low-quality field gives mean MWGE {mw:.4} ≤ {mwo:.4}"))?;
        gains.push(format!("{level} {mwo:.4}→{mw:.4}"));
    }
    Ok(format!(
        "largest rise from more blocks minus 1 SE: {worst_rise:.4}; low-quality field: {} \
         (higher in {cells_up} of {} β cells)",
        gains.join(", "),
        levels.len() * cfg.betas.len()
    ))
}

// --------------------------------------------------------------- hit-miss

fn hit_miss() -> Result<String, String> {
    let draws = 1_000_000u64;
    let mut worst_z = 0.0f64;
    for (i, &beta) in [0.05, 0.1, 0.7].iter().enumerate() {
        for (j, &c) in [3u32, 5, 10].iter().enumerate() {
            let mut rng = ChaCha8Rng::seed_from_u64(100 + 10 * i as u64 + j as u64);
            let kept = (0..draws)
                .filter(|d| {
                    let v = (*d % c as u64) as u32;
                    hit_miss_categorical(v, beta, c, &mut rng) == v
                })
                .count() as f64;
            let p = 1.0 - beta + beta / c as f64;
            let se = (p * (1.0 - p) / draws as f64).sqrt();
            let z = (kept / draws as f64 - p).abs() / se;
            worst_z = worst_z.max(z);
            ensure(z <= 4.0, || format!("β={beta}, C={c}: keep rate off by {z:.2} SE"))?;
        }
    }
    let mut rng = ChaCha8Rng::seed_from_u64(200);
    let mut hist = [0u64; 5];
    for _ in 0..draws {
        let d = hit_miss_numeric(50, 1.0, (0, 100), &mut rng) - 50;
        ensure((-2..=2).contains(&d), || format!("offset {d} outside −2..2"))?;
        hist[(d + 2) as usize] += 1;
    }
    for (d, (&h, &w)) in hist.iter().zip(&OFFSET_WEIGHTS).enumerate() {
        let se = (w * (1.0 - w) / draws as f64).sqrt();
        let z = (h as f64 / draws as f64 - w).abs() / se;
        worst_z = worst_z.max(z);
        ensure(z <= 4.0, || format!("offset {}: frequency off by {z:.2} SE", d as i64 - 2))?;
    }
    Ok(format!("9 keep rates and 5 offset frequencies within {worst_z:.2} SE"))
}

// ------------------------------------------------------------ determinism

fn determinism() -> Result<String, String> {
    let dir = tempfile::tempdir().map_err(err)?;
    let spec = PopulationSpec {
        k: 3,
        file_sizes: vec![25, 20, 15],
        overlap: vec![fp(&[1, 2, 3], 10), fp(&[1, 2], 5), fp(&[1], 10), fp(&[2], 5), fp(&[3], 5)],
        fields: vec![
            SyntheticField::categorical("town", 3, FieldRole::Blocking),
            SyntheticField::categorical("a", 5, FieldRole::Compared),
            SyntheticField::categorical("b", 8, FieldRole::Compared),
            SyntheticField::integer(
                "age",
                0,
                60,
                Comparator::Banded {
                    width: 3,
                    offsets: vec![0, 1, 2],
                },
            ),
        ],
    };
    let (files, truth) = generate_population(&spec, 77).map_err(err)?;
    let betas = ["a", "b", "age"].iter().map(|n| (n.to_string(), 0.1)).collect();
    let files: Vec<DataFile> = corrupt_files(&files, &spec, &betas, 78).map_err(err)?;
    multilink::pipeline::write_population(&files, &truth, &spec, dir.path()).map_err(err)?;
    let fields = toml::to_string(&FieldsDoc {
        fields: spec.field_specs(),
    })
    .map_err(err)?;
    let config_text = format!(
        "files = [\"file1.csv\", \"file2.csv\", \"file3.csv\"]\nmu = 0.01\n\n[em]\nrestarts = 4\nseed = 5\n\n{fields}"
    );
    let config_path = dir.path().join("link.toml");
    std::fs::write(&config_path, config_text).map_err(err)?;
    let config = LinkageConfig::load(&config_path).map_err(err)?;

    let mut compared = 0;
    let mut outputs = Vec::new();
    // The second run uses two threads; nothing may change.
    for run in 0..2 {
        let threads = run + 1;
        let mut config = config.clone();
        config.em.threads = threads;
        let out = dir.path().join(format!("link{run}"));
        run_link(&config, &out).map_err(err)?;
        let eval = dir.path().join(format!("eval{run}"));
        multilink::pipeline::run_evaluate(
            &out.join("assignments.csv"),
            &dir.path().join("truth.csv"),
            Default::default(),
            &eval,
        )
        .map_err(err)?;
        let sim = dir.path().join(format!("sim{run}"));
        let mut sweep = load_sweep("configs/blocking.toml")?;
        sweep.replications = 2;
        sweep.population.file_sizes = vec![40; 3];
        sweep.population.overlap[0].entities = 40;
        sweep.threads = threads;
        run_simulation(&sweep, &sim).map_err(err)?;
        outputs.push(vec![
            out.join("assignments.csv"),
            out.join("params.json"),
            out.join("report.json"),
            eval.join("metrics.csv"),
            sim.join("metrics.csv"),
            sim.join("summary.csv"),
        ]);
    }
    for (a, b) in outputs[0].iter().zip(&outputs[1]) {
        let x = std::fs::read(a).map_err(|e| format!("{}: {e}", a.display()))?;
        let y = std::fs::read(b).map_err(|e| format!("{}: {e}", b.display()))?;
        ensure(!x.is_empty() && x == y, || {
            format!("{} differs between runs", a.file_name().unwrap().to_string_lossy())
        })?;
        compared += 1;
    }
    Ok(format!("{compared} output files bitwise identical across runs with 1 and 2 threads"))
}

#[derive(serde::Serialize)]
struct FieldsDoc {
    fields: Vec<multilink::comparison::FieldSpec>,
}
