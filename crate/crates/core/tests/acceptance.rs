//! Acceptance gate. Runs every criterion, prints one PASS/FAIL line each and
//! exits nonzero if any fails. `ACCEPTANCE_FILTER=<substring>` restricts the
//! run to matching criteria while iterating locally.

use std::collections::BTreeSet;
use std::fs;
use std::path::Path;
use std::process::ExitCode;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use multirep::autodiff::{Graph, Tensor};
use multirep::episodes::{episode_at, EpisodeRef, EpisodeSpec};
use multirep::harness::{
    ablate, evaluate, run_gradcheck_suite, sweep_m, train, train_seed, untrained_accuracy, AblationArm, Data,
    RunConfig, SweepSummary,
};
use multirep::objectives::{loss_rcl, loss_rdcl};

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: String) -> Outcome {
    Outcome { pass, detail }
}

fn failed(e: multirep::Error) -> Outcome {
    outcome(false, format!("error: {e}"))
}

// ---------------------------------------------------------------------------
// Reference losses: plain loops over f64 slices, written from the definitions.

fn cos(a: &[f64], b: &[f64]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    dot / (na * nb)
}

/// `reps[i][m]` is representation m of sentence i.
fn oracle_rcl(reps: &[Vec<Vec<f64>>], tau: f64) -> f64 {
    let mut total = 0.0;
    for i in 0..reps.len() {
        for m in 0..reps[i].len() {
            let mut phi = 0.0;
            for k in 0..reps[i].len() {
                if k != m {
                    phi += cos(&reps[i][m], &reps[i][k]);
                }
            }
            let num = (phi / tau).exp();
            let mut den = num;
            for j in 0..reps.len() {
                if j != i {
                    den += (cos(&reps[i][m], &reps[j][m]) / tau).exp();
                }
            }
            total += -(num / den).ln();
        }
    }
    total
}

fn oracle_rdcl(inst: &[Vec<f64>], labels: &[usize], descs: &[Vec<f64>], tau: f64) -> f64 {
    let mut total = 0.0;
    for (r, &y) in inst.iter().zip(labels) {
        let num = (cos(r, &descs[y]) / tau).exp();
        let mut den = num;
        for (c, d) in descs.iter().enumerate() {
            if c != y {
                den += (cos(r, d) / tau).exp();
            }
        }
        total += -(num / den).ln();
    }
    total
}

fn graph_rcl(reps: &[Vec<Vec<f64>>], tau: f64) -> multirep::Result<f64> {
    let mut g = Graph::<f64>::new();
    let vars = reps
        .iter()
        .map(|s| s.iter().map(|v| g.constant(Tensor::vector(v.clone()))).collect())
        .collect::<multirep::Result<Vec<Vec<_>>>>()?;
    let l = loss_rcl(&mut g, &vars, tau, false)?;
    g.value(l).item()
}

fn graph_rdcl(inst: &[Vec<f64>], labels: &[usize], descs: &[Vec<f64>], tau: f64) -> multirep::Result<f64> {
    let mut g = Graph::<f64>::new();
    let iv = inst
        .iter()
        .map(|v| g.constant(Tensor::vector(v.clone())))
        .collect::<multirep::Result<Vec<_>>>()?;
    let dv = descs
        .iter()
        .map(|v| g.constant(Tensor::vector(v.clone())))
        .collect::<multirep::Result<Vec<_>>>()?;
    let l = loss_rdcl(&mut g, &iv, labels, &dv, tau, false)?;
    g.value(l).item()
}

fn rand_vec(rng: &mut ChaCha8Rng, d: usize) -> Vec<f64> {
    loop {
        let v: Vec<f64> = (0..d).map(|_| rng.gen_range(-1.0..1.0)).collect();
        if v.iter().map(|x| x * x).sum::<f64>() > 1e-2 {
            return v;
        }
    }
}

fn loss_oracles() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(20);
    let mut worst: f64 = 0.0;
    for _ in 0..100 {
        let d = rng.gen_range(1..=16);
        let n = rng.gen_range(1..=5);
        let k = rng.gen_range(1..=(8 / n).max(1));
        let m = rng.gen_range(1..=5);
        let tau = rng.gen_range(0.05..1.0);
        let reps: Vec<Vec<Vec<f64>>> = (0..n * k).map(|_| (0..m).map(|_| rand_vec(&mut rng, d)).collect()).collect();
        let inst: Vec<Vec<f64>> = (0..n * k).map(|_| rand_vec(&mut rng, d)).collect();
        let labels: Vec<usize> = (0..n * k).map(|i| i / k).collect();
        let descs: Vec<Vec<f64>> = (0..n).map(|_| rand_vec(&mut rng, d)).collect();
        let (a, b) = match (graph_rcl(&reps, tau), graph_rdcl(&inst, &labels, &descs, tau)) {
            (Ok(a), Ok(b)) => (a, b),
            (Err(e), _) | (_, Err(e)) => return failed(e),
        };
        worst = worst
            .max((a - oracle_rcl(&reps, tau)).abs())
            .max((b - oracle_rdcl(&inst, &labels, &descs, tau)).abs());
    }

    let v = vec![0.3, -1.2, 0.5];
    let single = graph_rcl(&[vec![v.clone(), vec![1.0, 2.0, 0.1], vec![0.0, 1.0, 1.0]]], 0.1);
    let one_desc = graph_rdcl(&[v.clone(), vec![2.0, 0.0, 1.0]], &[0, 0], &[vec![1.0, 1.0, 1.0]], 0.1);
    let identical = graph_rcl(&[vec![v.clone(), v.clone()], vec![v.clone(), v.clone()]], 1.0);
    let (single, one_desc, identical) = match (single, one_desc, identical) {
        (Ok(a), Ok(b), Ok(c)) => (a, b, c),
        (Err(e), _, _) | (_, Err(e), _) | (_, _, Err(e)) => return failed(e),
    };
    let closed = single.abs().max(one_desc.abs()).max((identical - 4.0 * 2f64.ln()).abs());
    outcome(
        worst <= 1e-6 && closed <= 1e-9,
        format!("100 random cases max |diff| {worst:.2e} (tol 1e-6); closed forms max |diff| {closed:.2e} (tol 1e-9)"),
    )
}

// ---------------------------------------------------------------------------

fn gradient_integrity() -> Outcome {
    match run_gradcheck_suite(10, 0) {
        Ok(s) => {
            let failing: Vec<&str> = s.reports.iter().filter(|r| !r.passed()).map(|r| r.name.as_str()).collect();
            outcome(
                failing.is_empty() && s.seconds < 60.0,
                format!(
                    "{} checks, max rel err {:.2e} (tol 1e-4), {:.1} s (limit 60 s){}",
                    s.reports.len(),
                    s.max_rel_err(),
                    s.seconds,
                    if failing.is_empty() { String::new() } else { format!(", failing: {}", failing.join(", ")) }
                ),
            )
        }
        Err(e) => failed(e),
    }
}

fn check_episode(r: &EpisodeRef, n: usize, allowed: &BTreeSet<String>, forbidden: &BTreeSet<String>) -> Option<String> {
    let rels: BTreeSet<&String> = r.relations.iter().collect();
    if rels.len() != n || r.relations.len() != n {
        return Some(format!("episode {} has {} distinct relations", r.index, rels.len()));
    }
    for (c, rel) in r.relations.iter().enumerate() {
        if !allowed.contains(rel) || forbidden.contains(rel) {
            return Some(format!("episode {} leaks relation {rel}", r.index));
        }
        let s: BTreeSet<usize> = r.support[c].iter().copied().collect();
        if r.query[c].iter().any(|q| s.contains(q)) {
            return Some(format!("episode {} reuses a support instance as a query", r.index));
        }
    }
    None
}

fn protocol_invariants(config: &RunConfig, data: &Data) -> Outcome {
    let eval = match data.eval_split() {
        Ok(e) => e,
        Err(e) => return failed(e),
    };
    let train_rel = data.train.relation_set();
    let eval_rel = eval.relation_set();
    if !train_rel.is_disjoint(&eval_rel) {
        return outcome(false, "train and eval relation sets overlap".into());
    }
    let spec = EpisodeSpec::new(5, 1);
    for (split, allowed, forbidden) in [(&data.train, &train_rel, &eval_rel), (eval, &eval_rel, &train_rel)] {
        for i in 0..10_000 {
            match episode_at(split, &spec, 77, i) {
                Ok(r) => {
                    if let Some(msg) = check_episode(&r, 5, allowed, forbidden) {
                        return outcome(false, msg);
                    }
                }
                Err(e) => return failed(e),
            }
        }
    }
    match untrained_accuracy(config, data, 1, 2000) {
        Ok(acc) => outcome(
            (0.17..=0.23).contains(&acc),
            format!("2 x 10000 episodes clean; untrained 5-way accuracy {acc:.4} over 2000 episodes (band [0.17, 0.23])"),
        ),
        Err(e) => failed(e),
    }
}

fn learning_signal(config: &RunConfig, data: &Data) -> Outcome {
    let start = Instant::now();
    let run = || -> multirep::Result<f64> {
        let o = train_seed(config, data, 1)?;
        let m = evaluate(&o.checkpoint, data.eval_split()?, &data.descriptions, &config.eval_episode, 1000, &[1])?;
        Ok(m.accuracy_mean)
    };
    match run() {
        Ok(acc) => {
            let secs = start.elapsed().as_secs_f64();
            outcome(
                acc >= 0.80 && config.iterations <= 2000 && secs < 900.0,
                format!(
                    "{}/{} split, {} iterations: held-out 5-way 1-shot accuracy {acc:.4} (need >= 0.80), {secs:.0} s (limit 900 s)",
                    data.train.num_relations(),
                    data.eval_split().map(|s| s.num_relations()).unwrap_or(0),
                    config.iterations
                ),
            )
        }
        Err(e) => failed(e),
    }
}

/// Smaller encoder for the multi-run experiments.
fn experiment_config() -> RunConfig {
    let mut c = RunConfig::default();
    c.encoder.layers = 1;
    c.encoder.hidden = 32;
    c.encoder.heads = 2;
    c.encoder.ff = 64;
    c.iterations = 1000;
    c.eval_episodes = 500;
    c.seeds = vec![1, 2, 3];
    c
}

fn ablation_criteria(data: &Data) -> (Outcome, Outcome) {
    let config = experiment_config();
    let arms: Vec<AblationArm> = std::iter::once(AblationArm::Full)
        .chain(AblationArm::TABLE)
        .chain([AblationArm::WoContrastive])
        .collect();
    let rows = match ablate(&config, data, &arms) {
        Ok(r) => r,
        Err(e) => {
            let msg = format!("error: {e}");
            return (outcome(false, msg.clone()), outcome(false, msg));
        }
    };
    for r in &rows {
        println!("  ablation {:20} {:.4} ± {:.4}  per seed {:?}", r.arm.name(), r.mean, r.std, r.per_seed);
    }
    let get = |a: AblationArm| rows.iter().find(|r| r.arm == a).expect("arm was run");
    let full = get(AblationArm::Full);
    let wo = get(AblationArm::WoContrastive);
    let gain = full.mean - wo.mean;
    let contrastive = outcome(
        gain >= 0.02,
        format!("full {:.4} vs w/o both contrastive terms {:.4}: gain {:+.4} (need >= +0.02), 3 seeds", full.mean, wo.mean, gain),
    );

    let table_rows = rows.iter().filter(|r| AblationArm::TABLE.contains(&r.arm)).count();
    let offenders: Vec<String> = rows
        .iter()
        .filter(|r| r.arm.is_representation_removal() && r.mean > full.mean + full.std)
        .map(|r| format!("{} {:.4}", r.arm.name(), r.mean))
        .collect();
    let structure = outcome(
        table_rows == 7 && offenders.is_empty(),
        format!(
            "{table_rows}/7 arms ran; full {:.4} ± {:.4}; removal arms above full + 1 std: {}",
            full.mean,
            full.std,
            if offenders.is_empty() { "none".to_string() } else { offenders.join(", ") }
        ),
    );
    (contrastive, structure)
}

fn m_sweep(data: &Data) -> Outcome {
    let config = experiment_config();
    let rows = match sweep_m(&config, data, &[1, 2, 3, 4, 5]) {
        Ok(r) => r,
        Err(e) => return failed(e),
    };
    let summary = SweepSummary::from_rows(&rows);
    for s in &summary {
        println!("  sweep M={} mean {:.4} across-subset std {:.4}", s.m, s.mean, s.subset_std);
    }
    let at = |m: usize| summary.iter().find(|s| s.m == m).expect("swept size");
    let (m1, m4, m5) = (at(1), at(4), at(5));
    outcome(
        m5.mean - m1.mean >= 0.03 && m4.subset_std < m1.subset_std,
        format!(
            "M=5 mean {:.4} vs M=1 {:.4} (need gap >= 0.03); subset std M=4 {:.4} vs M=1 {:.4} (need lower)",
            m5.mean, m1.mean, m4.subset_std, m1.subset_std
        ),
    )
}

fn read_all(dir: &Path) -> std::io::Result<Vec<(String, Vec<u8>)>> {
    let mut files: Vec<(String, Vec<u8>)> = fs::read_dir(dir)?
        .map(|e| {
            let e = e?;
            Ok((e.file_name().to_string_lossy().into_owned(), fs::read(e.path())?))
        })
        .collect::<std::io::Result<_>>()?;
    files.sort();
    Ok(files)
}

fn determinism(data: &Data) -> Outcome {
    let mut config = RunConfig::default();
    config.encoder.hidden = 16;
    config.encoder.heads = 2;
    config.encoder.ff = 32;
    config.iterations = 25;
    config.eval_episodes = 50;
    let run = || -> Result<Vec<(String, Vec<u8>)>, String> {
        let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
        train(&config, data, Some(dir.path())).map_err(|e| e.to_string())?;
        read_all(dir.path()).map_err(|e| e.to_string())
    };
    match (run(), run()) {
        (Ok(a), Ok(b)) => {
            let names: Vec<&str> = a.iter().map(|(n, _)| n.as_str()).collect();
            let has = |p: &str| names.iter().any(|n| n.starts_with(p));
            outcome(
                a == b && has("checkpoint") && has("metrics"),
                format!("{} files compared byte for byte ({}): {}", a.len(), names.join(", "), if a == b { "identical" } else { "DIFFER" }),
            )
        }
        (Err(e), _) | (_, Err(e)) => outcome(false, e),
    }
}

fn main() -> ExitCode {
    let filter = std::env::var("ACCEPTANCE_FILTER").unwrap_or_default();
    let wanted = |name: &str| filter.is_empty() || name.contains(filter.as_str());
    let config = RunConfig::default();
    let data = match Data::synthetic(&config) {
        Ok(d) => d,
        Err(e) => {
            println!("FAIL synthetic corpus: {e}");
            return ExitCode::FAILURE;
        }
    };

    let mut results: Vec<(&str, Outcome)> = Vec::new();
    let mut run = |name: &'static str, f: &mut dyn FnMut() -> Outcome| {
        if wanted(name) {
            let start = Instant::now();
            let o = f();
            println!("{} {name}: {} [{:.0} s]", if o.pass { "PASS" } else { "FAIL" }, o.detail, start.elapsed().as_secs_f64());
            results.push((name, o));
        }
    };
    run("gradient integrity", &mut gradient_integrity);
    run("loss-oracle equivalence", &mut loss_oracles);
    run("protocol invariants", &mut || protocol_invariants(&config, &data));
    run("determinism", &mut || determinism(&data));
    run("learning signal", &mut || learning_signal(&config, &data));
    if wanted("contrastive benefit") || wanted("ablation structure") {
        let (contrastive, structure) = ablation_criteria(&data);
        run("contrastive benefit", &mut || outcome(contrastive.pass, contrastive.detail.clone()));
        run("ablation structure", &mut || outcome(structure.pass, structure.detail.clone()));
    }
    run("m-sweep trend", &mut || m_sweep(&data));

    println!("\nacceptance summary");
    for (name, o) in &results {
        println!("  {} {name}", if o.pass { "PASS" } else { "FAIL" });
    }
    if results.iter().all(|(_, o)| o.pass) {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
