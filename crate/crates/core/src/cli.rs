//! Subcommands behind the `attractor` binary: train, eval, ablate, check.
//!
//! Everything a run writes lands under the configured output directory:
//!
//! ```text
//! config.txt      resolved configuration
//! metrics.csv     one TrainRecord per optimizer step
//! eval.csv        periodic evaluation (train.eval_interval)
//! model.ckpt      spec header + parameters
//! optim.ckpt      AdamW moments and step
//! sudoku.txt      generated puzzles (grid tasks, unless task.path is set)
//! tsweep.csv      `eval` output
//! ablate_<grid>.csv
//! ```

use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::Instant;

use clap::{Parser, Subcommand};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::checks::{self, CheckOutcome};
use crate::config::{first_spec_mismatch, parse_overrides, ExperimentConfig, TaskKind};
use crate::diagnostics::{export_metrics, fmt_g9, read_metrics_csv, MetricsFormat};
use crate::error::{Error, Result};
use crate::implicit::BackwardMode;
use crate::models::{masked_accuracy, masked_loss, read_checkpoint, Family, GridModel, InitMode, Model};
use crate::nn::Injection;
use crate::tasks::{gen_copy, gen_modadd, gen_sudoku4, load_corpus, load_sudoku, save_sudoku, sudoku_batch, Corpus, SudokuInstance, TaskBatch};
use crate::training::{AdamState, TrainRecord, Trainer};

#[derive(Parser, Debug)]
#[command(name = "attractor", about = "Train and probe fixed-point refinement language models")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(clap::Args, Debug, Clone, Default)]
pub struct Common {
    /// `key = value` config file.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Sets model.seed and train.seed (the data stream keeps task.seed).
    #[arg(long)]
    pub seed: Option<u64>,
    /// Output directory.
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Overrides such as `model.d=32`, applied after the file.
    #[arg(value_name = "KEY=VALUE")]
    pub overrides: Vec<String>,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Train (or resume) a model.
    Train(Common),
    /// Evaluate a checkpoint at several test-time iteration budgets.
    Eval {
        #[command(flatten)]
        common: Common,
        /// Comma-separated budgets; the converged solve is always added.
        #[arg(long, value_delimiter = ',', default_value = "0,1,2,4,8,16")]
        t_sweep: Vec<usize>,
        /// Defaults to `<out>/model.ckpt`.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
    /// Run one ablation grid: deq, injection, backward or init.
    Ablate {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        grid: String,
    },
    /// Run the invariant and oracle suite.
    Check,
}

/// Process exit status for an error: 1 validation, 2 numeric, 3 I/O.
pub fn exit_code(e: &Error) -> i32 {
    match e {
        Error::Numeric(_) | Error::NonFiniteIterate { .. } | Error::NonFiniteLoss { .. } => 2,
        Error::Io { .. } | Error::Checkpoint(_) => 3,
        _ => 1,
    }
}

/// Parses arguments and runs the subcommand; returns the exit status.
pub fn run(args: impl IntoIterator<Item = String>) -> i32 {
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { 1 } else { 0 };
        }
    };
    let result = match cli.command {
        Command::Train(c) => load_config(&c).and_then(|cfg| cmd_train(&cfg).map(|_| 0)),
        Command::Eval {
            common,
            t_sweep,
            checkpoint,
        } => load_config(&common).and_then(|cfg| cmd_eval(&cfg, checkpoint.as_deref(), &t_sweep).map(|_| 0)),
        Command::Ablate { common, grid } => load_config(&common).and_then(|cfg| cmd_ablate(&cfg, &grid).map(|_| 0)),
        Command::Check => Ok(cmd_check()),
    };
    match result {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            exit_code(&e)
        }
    }
}

/// File, then `key=value` overrides, then `--seed` and `--out`.
pub fn load_config(c: &Common) -> Result<ExperimentConfig> {
    let mut overrides = parse_overrides(&c.overrides)?;
    if let Some(s) = c.seed {
        overrides.push(("model.seed".into(), s.to_string()));
        overrides.push(("train.seed".into(), s.to_string()));
    }
    if let Some(o) = &c.out {
        overrides.push(("out".into(), o.display().to_string()));
    }
    ExperimentConfig::from_file(c.config.as_deref(), &overrides)
}

fn create_dir(p: &Path) -> Result<()> {
    std::fs::create_dir_all(p).map_err(|e| Error::io(p, e))
}

fn write_file(p: &Path, bytes: &[u8]) -> Result<()> {
    std::fs::write(p, bytes).map_err(|e| Error::io(p, e))
}

fn mix(seed: u64, k: u64) -> u64 {
    // splitmix64 finalizer
    let mut z = seed ^ k.wrapping_add(0x9E37_79B9_7F4A_7C15).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

const EVAL_STREAM: u64 = u64::MAX;

/// Sequence data for the token-stream tasks; batches depend only on
/// `(task.seed, step)`.
pub enum Stream {
    Copy { len: usize, symbols: usize, seed: u64 },
    ModAdd { modulus: usize, seed: u64 },
    Corpus { corpus: Corpus, seed: u64 },
}

impl Stream {
    pub fn new(cfg: &ExperimentConfig) -> Result<Self> {
        let t = &cfg.task;
        Ok(match t.kind {
            TaskKind::Copy => Stream::Copy {
                len: t.len,
                symbols: t.symbols,
                seed: t.seed,
            },
            TaskKind::ModAdd => Stream::ModAdd {
                modulus: t.modulus,
                seed: t.seed,
            },
            TaskKind::Corpus => Stream::Corpus {
                corpus: load_corpus(t.path.as_deref().expect("validated"), t.seq_len)?,
                seed: t.seed,
            },
            TaskKind::Sudoku => return Err(Error::config("task.kind", "sudoku is a grid task")),
        })
    }

    pub fn batch(&self, step: usize, batch: usize) -> Result<TaskBatch> {
        match self {
            Stream::Copy { len, symbols, seed } => gen_copy(batch, *len, *symbols, mix(*seed, step as u64)),
            Stream::ModAdd { modulus, seed } => gen_modadd(batch, *modulus, mix(*seed, step as u64)),
            Stream::Corpus { corpus, seed } => corpus.batch(step, batch, *seed),
        }
    }

    pub fn eval_batch(&self, batch: usize) -> Result<TaskBatch> {
        match self {
            Stream::Corpus { corpus, seed } => corpus.batch(0, batch, mix(*seed, EVAL_STREAM)),
            _ => self.batch(EVAL_STREAM as usize, batch),
        }
    }
}

/// Train and held-out puzzles; cached under the output directory unless
/// `task.path` names a file.
pub fn sudoku_split(cfg: &ExperimentConfig) -> Result<(Vec<SudokuInstance>, Vec<SudokuInstance>)> {
    let t = &cfg.task;
    let path = t.path.clone().unwrap_or_else(|| cfg.out.join("sudoku.txt"));
    let n = t.train_count + t.eval_count;
    let puzzles = if path.exists() {
        load_sudoku(&path)?
    } else {
        let p = gen_sudoku4(n, t.givens_lo, t.givens_hi, t.seed)?;
        if let Some(dir) = path.parent() {
            create_dir(dir)?;
        }
        save_sudoku(&path, &p)?;
        p
    };
    if puzzles.len() < n {
        return Err(Error::config(
            "task.path",
            format!("{} holds {} puzzles, {n} needed", path.display(), puzzles.len()),
        ));
    }
    let (train, rest) = puzzles.split_at(t.train_count);
    Ok((train.to_vec(), rest[..t.eval_count].to_vec()))
}

/// Training batch number `k`: epochs reshuffle with a seed derived from
/// `(task.seed, epoch)`; the ragged tail of an epoch is dropped.
pub fn sudoku_train_batch(train: &[SudokuInstance], batch: usize, seed: u64, k: usize) -> TaskBatch {
    let per_epoch = (train.len() / batch).max(1);
    let (epoch, pos) = (k / per_epoch, k % per_epoch);
    let mut idx: Vec<usize> = (0..train.len()).collect();
    idx.shuffle(&mut ChaCha8Rng::seed_from_u64(mix(seed, epoch as u64)));
    let n = batch.min(train.len());
    let picked: Vec<SudokuInstance> = idx[pos * n..pos * n + n].iter().map(|&i| train[i].clone()).collect();
    sudoku_batch(&picked)
}

/// Either model kind behind one training loop.
enum Learner {
    Seq(Model<f32>, Stream),
    Grid(GridModel<f32>, Vec<SudokuInstance>, TaskBatch),
}

impl Learner {
    fn spec(&self) -> &crate::models::ModelSpec {
        match self {
            Learner::Seq(m, _) => &m.spec,
            Learner::Grid(m, ..) => &m.spec,
        }
    }

    fn params(&self) -> &crate::tensor::ParamStore<f32> {
        match self {
            Learner::Seq(m, _) => &m.params,
            Learner::Grid(m, ..) => &m.params,
        }
    }

    fn save(&self, path: &Path) -> Result<()> {
        match self {
            Learner::Seq(m, _) => m.save(path),
            Learner::Grid(m, ..) => m.save(path),
        }
    }
}

/// Outcome of `cmd_train`.
#[derive(Clone, Debug)]
pub struct TrainSummary {
    pub records: Vec<TrainRecord>,
    pub final_eval: EvalPoint,
    pub out: PathBuf,
}

/// Loss and accuracies on the held-out set.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct EvalPoint {
    pub loss: f64,
    /// Token accuracy (sequence tasks) or blank-cell accuracy (grids).
    pub accuracy: f64,
    /// Whole-row accuracy (exact grids for Sudoku).
    pub exact: f64,
}

fn eval_seq(model: &Model<f32>, batch: &TaskBatch, chunk: usize, t: Option<usize>) -> Result<(EvalPoint, f64, f64)> {
    let (mut loss, mut acc, mut exact, mut iters, mut conv) = (0.0, 0.0, 0.0, 0.0, 0.0);
    let mut chunks = 0.0;
    let mut start = 0;
    while start < batch.batch {
        let n = chunk.max(1).min(batch.batch - start);
        let part = batch.rows(start, n);
        let (l, out) = model.eval_loss(&part, t)?;
        let (a, e) = masked_accuracy(&out.logits, &part);
        let w = n as f64 / batch.batch as f64;
        loss += l * w;
        acc += a * w;
        exact += e * w;
        if let Some(s) = &out.solver {
            iters += s.iterations as f64;
            conv += s.converged as u8 as f64;
        }
        chunks += 1.0;
        start += n;
    }
    Ok((
        EvalPoint {
            loss,
            accuracy: acc,
            exact,
        },
        iters / chunks,
        conv / chunks,
    ))
}

fn eval_grid(model: &GridModel<f32>, batch: &TaskBatch, sup_steps: usize, t: Option<usize>) -> Result<EvalPoint> {
    let logits = model.predict(batch, sup_steps, t)?;
    let loss = masked_loss(&logits, batch)?;
    let (accuracy, exact) = masked_accuracy(&logits, batch);
    Ok(EvalPoint { loss, accuracy, exact })
}

fn evaluate(learner: &Learner, cfg: &ExperimentConfig) -> Result<EvalPoint> {
    match learner {
        Learner::Seq(m, s) => Ok(eval_seq(m, &s.eval_batch(cfg.task.eval_batch)?, cfg.task.eval_batch, None)?.0),
        Learner::Grid(m, _, test) => eval_grid(m, test, cfg.train.sup_steps, None),
    }
}

/// Runs the training loop described by `cfg`, resuming from
/// `<out>/model.ckpt` and `<out>/optim.ckpt` when both exist.
pub fn cmd_train(cfg: &ExperimentConfig) -> Result<TrainSummary> {
    let out = &cfg.out;
    create_dir(out)?;
    write_file(&out.join("config.txt"), cfg.to_text().as_bytes())?;
    let (model_path, optim_path, metrics_path, eval_path) = (
        out.join("model.ckpt"),
        out.join("optim.ckpt"),
        out.join("metrics.csv"),
        out.join("eval.csv"),
    );
    let resume = model_path.exists() && optim_path.exists();
    let mut learner = if cfg.task.kind == TaskKind::Sudoku {
        let (train, test) = sudoku_split(cfg)?;
        let model = if resume { GridModel::load(&model_path)? } else { GridModel::new(cfg.model.clone())? };
        Learner::Grid(model, train, sudoku_batch(&test))
    } else {
        let model = if resume { Model::load(&model_path)? } else { Model::new(cfg.model.clone())? };
        Learner::Seq(model, Stream::new(cfg)?)
    };
    if let Some(key) = first_spec_mismatch(learner.spec(), &cfg.model) {
        return Err(Error::config(key, format!("differs from the checkpoint in {}", model_path.display())));
    }
    let mut trainer = Trainer::new(learner.params(), cfg.train.clone());
    let mut records = Vec::new();
    if resume {
        trainer.opt = AdamState::load(learner.params(), &optim_path)?;
        trainer.step = trainer.opt.step as usize;
        trainer.last_checkpoint = Some(model_path.display().to_string());
        if metrics_path.exists() {
            records = read_metrics_csv(&metrics_path)?;
            records.retain(|r| r.step < trainer.step);
        }
        log::info!("resuming {} at step {}", out.display(), trainer.step);
    } else if eval_path.exists() {
        std::fs::remove_file(&eval_path).map_err(|e| Error::io(&eval_path, e))?;
    }
    let checkpoint = |learner: &Learner, trainer: &mut Trainer<f32>, records: &[TrainRecord]| -> Result<()> {
        learner.save(&model_path)?;
        trainer.opt.save(learner.params(), &optim_path)?;
        export_metrics(records, &metrics_path, MetricsFormat::Csv)?;
        trainer.last_checkpoint = Some(model_path.display().to_string());
        Ok(())
    };
    let mut next_eval = next_multiple(trainer.step, cfg.train.eval_interval);
    let mut next_ckpt = next_multiple(trainer.step, cfg.checkpoint_interval);
    while trainer.step < cfg.train.steps {
        let new: Vec<TrainRecord> = match &mut learner {
            Learner::Seq(model, stream) => {
                let batch = stream.batch(trainer.step, cfg.train.batch)?;
                vec![trainer.train_step(model, &batch)?]
            }
            Learner::Grid(model, train, _) => {
                let k = trainer.step / cfg.train.sup_steps;
                let batch = sudoku_train_batch(train, cfg.train.batch, cfg.task.seed, k);
                trainer.train_grid_batch(model, &batch)?
            }
        };
        if let Some(r) = new.last() {
            log::debug!("step {} loss {:.4} iters {}", r.step, r.loss, r.iters_fwd);
        }
        records.extend(new);
        if next_eval.is_some_and(|n| trainer.step >= n) {
            let e = evaluate(&learner, cfg)?;
            append_eval(&eval_path, trainer.step, &e)?;
            log::info!("step {} eval loss {:.4} acc {:.4} exact {:.4}", trainer.step, e.loss, e.accuracy, e.exact);
            next_eval = next_multiple(trainer.step, cfg.train.eval_interval);
        }
        if next_ckpt.is_some_and(|n| trainer.step >= n) {
            checkpoint(&learner, &mut trainer, &records)?;
            next_ckpt = next_multiple(trainer.step, cfg.checkpoint_interval);
        }
    }
    checkpoint(&learner, &mut trainer, &records)?;
    let final_eval = evaluate(&learner, cfg)?;
    log::info!(
        "finished {} steps: eval loss {:.4} acc {:.4} exact {:.4}",
        trainer.step,
        final_eval.loss,
        final_eval.accuracy,
        final_eval.exact
    );
    Ok(TrainSummary {
        records,
        final_eval,
        out: out.clone(),
    })
}

fn next_multiple(step: usize, interval: usize) -> Option<usize> {
    (interval > 0).then(|| (step / interval + 1) * interval)
}

fn append_eval(path: &Path, step: usize, e: &EvalPoint) -> Result<()> {
    let new = !path.exists();
    let mut f = std::fs::OpenOptions::new()
        .create(true)
        .append(true)
        .open(path)
        .map_err(|err| Error::io(path, err))?;
    let mut text = String::new();
    if new {
        text.push_str("step,loss,accuracy,exact\n");
    }
    text.push_str(&format!("{step},{},{},{}\n", fmt_g9(e.loss), fmt_g9(e.accuracy), fmt_g9(e.exact)));
    f.write_all(text.as_bytes()).map_err(|err| Error::io(path, err))
}

/// One row of a test-time iteration sweep; `t = None` is the converged solve.
#[derive(Clone, Debug, PartialEq)]
pub struct SweepRow {
    pub t: Option<usize>,
    pub eval: EvalPoint,
    pub mean_iterations: f64,
    pub converged_fraction: f64,
}

/// Evaluates a checkpoint at each budget in `t_sweep` and at convergence;
/// writes `<out>/tsweep.csv`.
pub fn cmd_eval(cfg: &ExperimentConfig, checkpoint: Option<&Path>, t_sweep: &[usize]) -> Result<Vec<SweepRow>> {
    let path = checkpoint.map(Path::to_path_buf).unwrap_or_else(|| cfg.out.join("model.ckpt"));
    let (spec, _) = read_checkpoint(&path)?;
    if let Some(key) = first_spec_mismatch(&spec, &cfg.model) {
        return Err(Error::config(key, format!("differs from the checkpoint in {}", path.display())));
    }
    let mut budgets: Vec<Option<usize>> = t_sweep.iter().map(|&t| Some(t)).collect();
    budgets.push(None);
    if spec.family == Family::Plain {
        log::warn!("plain models have no test-time iterations; --t-sweep is ignored");
        budgets = vec![None];
    }
    let mut rows = Vec::new();
    if cfg.task.kind == TaskKind::Sudoku {
        let model: GridModel<f32> = GridModel::load(&path)?;
        let (_, test) = sudoku_split(cfg)?;
        let batch = sudoku_batch(&test);
        for t in budgets {
            let eval = eval_grid(&model, &batch, cfg.train.sup_steps, t)?;
            let (iters, conv) = if spec.family == Family::Plain {
                (0.0, 1.0)
            } else {
                let r = model.solve_step(&batch, &model.initial_state(batch.batch), t)?;
                (r.iterations as f64, r.converged as u8 as f64)
            };
            rows.push(SweepRow {
                t,
                eval,
                mean_iterations: iters,
                converged_fraction: conv,
            });
        }
    } else {
        let model: Model<f32> = Model::load(&path)?;
        let stream = Stream::new(cfg)?;
        let batch = stream.eval_batch(cfg.task.eval_batch)?;
        for t in budgets {
            let (eval, iters, conv) = eval_seq(&model, &batch, 16, t)?;
            rows.push(SweepRow {
                t,
                eval,
                mean_iterations: iters,
                converged_fraction: conv,
            });
        }
    }
    create_dir(&cfg.out)?;
    let mut w = csv::Writer::from_writer(Vec::new());
    let csv_err = |e: csv::Error| Error::Numeric(format!("csv: {e}"));
    w.write_record(["t", "loss", "accuracy", "exact", "mean_iterations", "converged_fraction"])
        .map_err(csv_err)?;
    for r in &rows {
        w.write_record([
            r.t.map(|t| t.to_string()).unwrap_or_else(|| "converged".into()),
            fmt_g9(r.eval.loss),
            fmt_g9(r.eval.accuracy),
            fmt_g9(r.eval.exact),
            fmt_g9(r.mean_iterations),
            fmt_g9(r.converged_fraction),
        ])
        .map_err(csv_err)?;
    }
    let bytes = w.into_inner().map_err(|e| Error::Numeric(format!("csv: {e}")))?;
    write_file(&cfg.out.join("tsweep.csv"), &bytes)?;
    for r in &rows {
        println!(
            "T={:<9} loss {:.4} acc {:.4} exact {:.4} iters {:.1} converged {:.2}",
            r.t.map(|t| t.to_string()).unwrap_or_else(|| "converged".into()),
            r.eval.loss,
            r.eval.accuracy,
            r.eval.exact,
            r.mean_iterations,
            r.converged_fraction
        );
    }
    Ok(rows)
}

/// One configuration of an ablation grid.
#[derive(Clone, Debug, PartialEq)]
pub struct AblationRow {
    pub variant: String,
    pub val_loss: f64,
    pub avg_iters: f64,
    /// Fraction of 16-row evaluation chunks whose solve converged.
    pub pct_converged: f64,
    /// Mean peak stored activations per training step.
    pub mem: f64,
    pub step_time_ms: f64,
    /// `mem` and `step_time_ms` relative to the full-IFT row (backward grid).
    pub rel_mem: Option<f64>,
    pub rel_time: Option<f64>,
}

/// Variants of a named grid, applied on top of `cfg`.
pub fn ablation_variants(cfg: &ExperimentConfig, grid: &str) -> Result<Vec<(String, ExperimentConfig)>> {
    let with = |name: &str, f: &dyn Fn(&mut ExperimentConfig)| {
        let mut c = cfg.clone();
        f(&mut c);
        (name.to_string(), c)
    };
    let attractor = |c: &mut ExperimentConfig| c.model.family = Family::Attractor;
    Ok(match grid {
        "deq" => vec![
            with("DEQ", &|c| c.model.family = Family::Deq),
            with("Attractor", &attractor),
        ],
        "injection" => vec![
            with("InitialOnly", &|c| {
                attractor(c);
                c.model.injection = Injection::InitialOnly
            }),
            with("Concat", &|c| {
                attractor(c);
                c.model.injection = Injection::Concat
            }),
            with("Additive", &|c| {
                attractor(c);
                c.model.injection = Injection::Additive
            }),
        ],
        "backward" => vec![
            with("FullIFT", &|c| {
                attractor(c);
                c.model.backward = BackwardMode::FullIft(c.model.solver)
            }),
            with("Phantom k=3", &|c| {
                attractor(c);
                c.model.backward = BackwardMode::Phantom { k: 3, damping: 0.5 }
            }),
            with("OneStep", &|c| {
                attractor(c);
                c.model.backward = BackwardMode::OneStep
            }),
        ],
        "init" => vec![
            with("Zero", &|c| {
                attractor(c);
                c.model.init_mode = InitMode::Zero
            }),
            with("Gaussian", &|c| {
                attractor(c);
                c.model.init_mode = InitMode::Gaussian(1.0)
            }),
            with("BackboneProposal", &|c| {
                attractor(c);
                c.model.init_mode = InitMode::BackboneProposal
            }),
        ],
        _ => return Err(Error::config("grid", format!("`{grid}` is not one of deq, injection, backward, init"))),
    })
}

/// Trains every variant of `grid` on the same data stream and writes
/// `<out>/ablate_<grid>.csv`.
pub fn cmd_ablate(cfg: &ExperimentConfig, grid: &str) -> Result<Vec<AblationRow>> {
    if cfg.task.kind == TaskKind::Sudoku {
        return Err(Error::config("task.kind", "ablation grids run on sequence tasks"));
    }
    let variants = ablation_variants(cfg, grid)?;
    let stream = Stream::new(cfg)?;
    let eval = stream.eval_batch(cfg.task.eval_batch)?;
    let mut rows = Vec::new();
    for (name, c) in variants {
        c.model.validate()?;
        let mut model: Model<f32> = Model::new(c.model.clone())?;
        let mut trainer = Trainer::new(&model.params, c.train.clone());
        let (mut mem, mut time) = (0.0, 0.0);
        for step in 0..c.train.steps {
            let batch = stream.batch(step, c.train.batch)?;
            let t0 = Instant::now();
            let rec = trainer.train_step(&mut model, &batch)?;
            time += t0.elapsed().as_secs_f64() * 1e3;
            mem += rec.act_peak as f64;
        }
        let n = c.train.steps.max(1) as f64;
        let (e, iters, conv) = eval_seq(&model, &eval, 16, None)?;
        log::info!("{grid}/{name}: loss {:.4} iters {iters:.1}", e.loss);
        rows.push(AblationRow {
            variant: name,
            val_loss: e.loss,
            avg_iters: iters,
            pct_converged: conv,
            mem: mem / n,
            step_time_ms: time / n,
            rel_mem: None,
            rel_time: None,
        });
    }
    if grid == "backward" {
        let (m0, t0) = (rows[0].mem, rows[0].step_time_ms);
        for r in &mut rows {
            r.rel_mem = Some(r.mem / m0);
            r.rel_time = Some(r.step_time_ms / t0);
        }
    }
    create_dir(&cfg.out)?;
    let mut w = csv::Writer::from_writer(Vec::new());
    let csv_err = |e: csv::Error| Error::Numeric(format!("csv: {e}"));
    w.write_record([
        "variant",
        "val_loss",
        "avg_iters",
        "pct_converged",
        "mem",
        "step_time_ms",
        "rel_mem",
        "rel_time",
    ])
    .map_err(csv_err)?;
    let opt = |x: Option<f64>| x.map(fmt_g9).unwrap_or_default();
    for r in &rows {
        w.write_record([
            r.variant.clone(),
            fmt_g9(r.val_loss),
            fmt_g9(r.avg_iters),
            fmt_g9(100.0 * r.pct_converged),
            fmt_g9(r.mem),
            fmt_g9(r.step_time_ms),
            opt(r.rel_mem),
            opt(r.rel_time),
        ])
        .map_err(csv_err)?;
    }
    let bytes = w.into_inner().map_err(|e| Error::Numeric(format!("csv: {e}")))?;
    write_file(&cfg.out.join(format!("ablate_{grid}.csv")), &bytes)?;
    for r in &rows {
        println!(
            "{:<18} loss {:.4} iters {:.1} converged {:.0}% mem {:.0} time {:.1} ms",
            r.variant,
            r.val_loss,
            r.avg_iters,
            100.0 * r.pct_converged,
            r.mem,
            r.step_time_ms
        );
    }
    Ok(rows)
}

/// Runs the check suite, printing one line per property; nonzero status
/// when anything fails.
pub fn cmd_check() -> i32 {
    let outcomes: Vec<CheckOutcome> = checks::run_all()
        .into_iter()
        .map(|r| {
            r.unwrap_or_else(|e| CheckOutcome {
                name: "check".into(),
                passed: false,
                detail: format!("error: {e}"),
            })
        })
        .collect();
    for o in &outcomes {
        println!("{o}");
    }
    let failed: Vec<&str> = outcomes.iter().filter(|o| !o.passed).map(|o| o.name.as_str()).collect();
    if failed.is_empty() {
        println!("all {} checks passed", outcomes.len());
        0
    } else {
        println!("failed: {}", failed.join(", "));
        1
    }
}
