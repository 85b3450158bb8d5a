//! End-to-end acceptance suite. Runs without the libtest harness so every
//! criterion prints exactly one PASS/FAIL line; exits nonzero if any fails.

use std::path::{Path, PathBuf};
use std::time::{Duration, Instant};

use attractor::checks::{self, CheckOutcome};
use attractor::cli::{cmd_eval, cmd_train, SweepRow};
use attractor::config::ExperimentConfig;
use attractor::models::{GridModel, Model, ModelSpec};
use attractor::tasks::{gen_copy, gen_sudoku4, sudoku_batch};
use attractor::training::{TrainConfig, Trainer};
use attractor::Result;

fn config(name: &str, dir: &Path, extra: &[(&str, &str)]) -> Result<ExperimentConfig> {
    let path = PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../../configs").join(name);
    let mut overrides: Vec<(String, String)> = extra.iter().map(|(k, v)| (k.to_string(), v.to_string())).collect();
    overrides.push(("out".into(), dir.display().to_string()));
    ExperimentConfig::from_file(Some(&path), &overrides)
}

fn outcome(name: &str, passed: bool, detail: String) -> CheckOutcome {
    CheckOutcome {
        name: name.into(),
        passed,
        detail,
    }
}

/// Fails the outcome when it ran over its time budget.
fn timed(budget: Duration, f: impl FnOnce() -> Result<CheckOutcome>) -> Result<CheckOutcome> {
    let t = Instant::now();
    let mut o = f()?;
    let took = t.elapsed();
    o.detail = format!("{} [{:.1}s of {}s]", o.detail, took.as_secs_f64(), budget.as_secs());
    o.passed &= took <= budget;
    Ok(o)
}

fn both(name: &str, parts: &[CheckOutcome]) -> CheckOutcome {
    outcome(
        name,
        parts.iter().all(|p| p.passed),
        parts.iter().map(|p| p.to_string()).collect::<Vec<_>>().join("; "),
    )
}

fn mean(xs: impl Iterator<Item = f64>) -> f64 {
    let (s, n) = xs.fold((0.0, 0.0), |(s, n), x| (s + x, n + 1.0));
    s / n
}

fn sweep_loss(rows: &[SweepRow], t: Option<usize>) -> f64 {
    rows.iter().find(|r| r.t == t).map(|r| r.eval.loss).expect("budget evaluated")
}

fn internalization(root: &Path) -> Result<CheckOutcome> {
    let cfg = config("internalization.txt", &root.join("attractor"), &[])?;
    let s = cmd_train(&cfg)?;
    let r = &s.records;
    let w = r.len() / 10;
    let it_first = mean(r[..300].iter().map(|x| x.iters_fwd as f64));
    let it_last = mean(r[r.len() - 300..].iter().map(|x| x.iters_fwd as f64));
    let d_first = mean(r[..w].iter().filter_map(|x| x.internalization_dist));
    let d_last = mean(r[r.len() - w..].iter().filter_map(|x| x.internalization_dist));
    Ok(outcome(
        "7 equilibrium internalization",
        r.len() == 3000 && it_last <= it_first && d_last < d_first,
        format!(
            "{} steps; mean forward iterations first/last 300: {it_first:.3} / {it_last:.3}; distance first/last 10%: {d_first:.4} / {d_last:.4}",
            r.len()
        ),
    ))
}

fn t_sweep(root: &Path) -> Result<CheckOutcome> {
    let acfg = config("internalization.txt", &root.join("attractor"), &[])?;
    if !acfg.out.join("model.ckpt").exists() {
        cmd_train(&acfg)?;
    }
    let a = cmd_eval(&acfg, None, &[1])?;
    let (a1, aconv) = (sweep_loss(&a, Some(1)), sweep_loss(&a, None));
    let lcfg = config(
        "internalization.txt",
        &root.join("looped"),
        &[("model.family", "looped"), ("model.looped_t", "8")],
    )?;
    let pa = Model::<f32>::new(acfg.model.clone())?.param_count();
    let pl = Model::<f32>::new(lcfg.model.clone())?.param_count();
    cmd_train(&lcfg)?;
    let l = cmd_eval(&lcfg, None, &[1, 8])?;
    let (l1, l8) = (sweep_loss(&l, Some(1)), sweep_loss(&l, Some(8)));
    let gap = l1 - l8;
    let diff = (a1 - aconv).abs();
    let passed = if gap < 0.01 { diff <= 0.01 } else { diff <= 0.25 * gap };
    Ok(outcome(
        "8 test-time iteration sweep",
        passed && pa == pl,
        format!(
            "attractor |loss(T=1) - loss(converged)| = |{a1:.4} - {aconv:.4}| = {diff:.4}; looped loss(T=1) - loss(T=8) = {l1:.4} - {l8:.4} = {gap:.4}; bound {:.4}; params {pa} vs {pl}",
            if gap < 0.01 { 0.01 } else { 0.25 * gap }
        ),
    ))
}

fn sudoku(root: &Path) -> Result<CheckOutcome> {
    let acfg = config("sudoku.txt", &root.join("sudoku_attractor"), &[])?;
    let pcfg = config("sudoku.txt", &root.join("sudoku_plain"), &[("model.family", "plain")])?;
    let pa = GridModel::<f32>::new(acfg.model.clone())?.param_count();
    let pp = GridModel::<f32>::new(pcfg.model.clone())?.param_count();
    let a = cmd_train(&acfg)?.final_eval.exact;
    let p = cmd_train(&pcfg)?.final_eval.exact;
    let matched = (pa as f64 - pp as f64).abs() <= 0.02 * pa as f64;
    Ok(outcome(
        "10 sudoku with deep supervision",
        pa <= 1_000_000 && matched && a >= 0.9 && p < a,
        format!(
            "exact-grid accuracy on {} held-out puzzles: attractor {a:.3} ({pa} params), plain {p:.3} ({pp} params)",
            acfg.task.eval_count
        ),
    ))
}

fn determinism(root: &Path) -> Result<CheckOutcome> {
    let mut bytes = Vec::new();
    for run in ["a", "b"] {
        let cfg = config("copy_smoke.txt", &root.join(format!("det_{run}")), &[])?;
        cmd_train(&cfg)?;
        let p = cfg.out.join("metrics.csv");
        bytes.push(std::fs::read(&p).map_err(|e| attractor::Error::Io { path: p, source: e })?);
    }
    Ok(outcome(
        "11 determinism",
        bytes[0] == bytes[1] && !bytes[0].is_empty(),
        format!("two copy-task runs wrote {} and {} metric bytes, identical: {}", bytes[0].len(), bytes[1].len(), bytes[0] == bytes[1]),
    ))
}

fn round_trip(root: &Path) -> Result<CheckOutcome> {
    let spec = ModelSpec {
        d: 32,
        d_ff: 64,
        heads: 2,
        vocab: 17,
        max_len: 16,
        ..ModelSpec::default()
    };
    let mut model: Model<f32> = Model::new(spec)?;
    let mut trainer = Trainer::new(&model.params, TrainConfig::default());
    for step in 0..3 {
        trainer.train_step(&mut model, &gen_copy(4, 16, 16, step)?)?;
    }
    let path = root.join("round_trip.ckpt");
    model.save(&path)?;
    let loaded: Model<f32> = Model::load(&path)?;
    let batch = gen_copy(4, 16, 16, 99)?;
    let bits = |m: &Model<f32>| -> Result<Vec<u32>> {
        Ok(m.forward(&batch.inputs, batch.batch, None, false)?.logits.data().iter().map(|x| x.to_bits()).collect())
    };
    let seq_ok = bits(&model)? == bits(&loaded)?;

    let grid: GridModel<f32> = GridModel::new(ModelSpec {
        vocab: 5,
        max_len: 16,
        causal: false,
        ..ModelSpec::default()
    })?;
    let gpath = root.join("round_trip_grid.ckpt");
    grid.save(&gpath)?;
    let gl: GridModel<f32> = GridModel::load(&gpath)?;
    let gb = sudoku_batch(&gen_sudoku4(3, 6, 8, 5)?);
    let gbits = |m: &GridModel<f32>| -> Result<Vec<u32>> {
        Ok(m.predict(&gb, 2, None)?.data().iter().map(|x| x.to_bits()).collect())
    };
    let grid_ok = gbits(&grid)? == gbits(&gl)?;
    Ok(outcome(
        "12 checkpoint round trip",
        seq_ok && grid_ok,
        format!("bit-identical logits after save/load: sequence model {seq_ok}, grid model {grid_ok}"),
    ))
}

fn main() {
    let dir = tempfile::tempdir().expect("temporary directory");
    let root = dir.path();
    let s = Duration::from_secs;
    type Criterion<'a> = (&'a str, Duration, Box<dyn FnOnce() -> Result<CheckOutcome> + 'a>);
    let criteria: Vec<Criterion> = vec![
        (
            "1 gradient correctness",
            s(120),
            Box::new(|| {
                Ok(both(
                    "1 gradient correctness",
                    &[
                        checks::check_op_gradients(1e-4)?,
                        checks::check_family_gradients(1e-4)?,
                        checks::check_mutation_detected()?,
                    ],
                ))
            }),
        ),
        ("2 implicit gradient oracle", s(60), Box::new(|| checks::check_ift_oracle(100))),
        ("3 backward-mode hierarchy", s(60), Box::new(|| checks::check_backward_hierarchy(50))),
        ("4 Picard rate bound", s(30), Box::new(|| checks::check_picard_rate(100))),
        ("5 Anderson dominance", s(60), Box::new(|| checks::check_anderson_dominance(100))),
        ("6 memory law", s(120), Box::new(checks::check_memory_law)),
        ("7 equilibrium internalization", s(15 * 60), Box::new(|| internalization(root))),
        ("8 test-time iteration sweep", s(30 * 60), Box::new(|| t_sweep(root))),
        ("9 proposal independence", s(60), Box::new(checks::check_proposal_independence)),
        ("10 sudoku with deep supervision", s(30 * 60), Box::new(|| sudoku(root))),
        ("11 determinism", s(60), Box::new(|| determinism(root))),
        ("12 checkpoint round trip", s(30), Box::new(|| round_trip(root))),
    ];
    let only: Vec<String> = std::env::args().skip(1).filter(|a| !a.starts_with('-')).collect();
    let mut failed = Vec::new();
    for (name, budget, run) in criteria {
        let number = name.split(' ').next().unwrap_or_default();
        if !only.is_empty() && !only.iter().any(|o| o == number) {
            continue;
        }
        let o = timed(budget, run).unwrap_or_else(|e| outcome(name, false, format!("error: {e}")));
        let o = CheckOutcome {
            name: name.to_string(),
            ..o
        };
        println!("{o}");
        if !o.passed {
            failed.push(number.to_string());
        }
    }
    if !failed.is_empty() {
        println!("failed criteria: {}", failed.join(", "));
        std::process::exit(1);
    }
}
