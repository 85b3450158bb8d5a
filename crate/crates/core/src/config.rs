//! Flat `section.key = value` experiment configuration.
//!
//! Lines are `key = value`; `#` starts a comment; blank lines are ignored.
//! Later assignments win, so command-line overrides are applied after the
//! file. Unknown keys and unparsable values are rejected with the key name.
//!
//! Model files start with the `model.*` and `solver.*` keys of their spec in
//! the same format.

use std::path::{Path, PathBuf};
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::implicit::BackwardMode;
use crate::models::{Family, InitMode, ModelSpec};
use crate::nn::Injection;
use crate::solver::SolverMethod;
use crate::tasks::BYTE_VOCAB;
use crate::training::TrainConfig;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum TaskKind {
    Copy,
    ModAdd,
    Sudoku,
    Corpus,
}

#[derive(Clone, Debug, PartialEq)]
pub struct TaskConfig {
    pub kind: TaskKind,
    /// Copy: sequence length (symbols + delimiter + copy).
    pub len: usize,
    /// Copy: number of distinct symbols.
    pub symbols: usize,
    pub modulus: usize,
    /// Corpus file, or a cached Sudoku file (generated when absent).
    pub path: Option<PathBuf>,
    pub seq_len: usize,
    /// Seeds the data stream independently of the model.
    pub seed: u64,
    pub train_count: usize,
    pub eval_count: usize,
    pub givens_lo: usize,
    pub givens_hi: usize,
    pub eval_batch: usize,
}

impl Default for TaskConfig {
    fn default() -> Self {
        TaskConfig {
            kind: TaskKind::ModAdd,
            len: 16,
            symbols: 16,
            modulus: 97,
            path: None,
            seq_len: 64,
            seed: 1234,
            train_count: 1000,
            eval_count: 200,
            givens_lo: 4,
            givens_hi: 7,
            eval_batch: 256,
        }
    }
}

impl TaskConfig {
    /// Token vocabulary and row length the task needs.
    pub fn vocab_and_len(&self) -> (usize, usize) {
        match self.kind {
            TaskKind::Copy => (self.symbols + 1, self.len),
            TaskKind::ModAdd => (self.modulus + 1, 3),
            TaskKind::Sudoku => (5, 16),
            TaskKind::Corpus => (BYTE_VOCAB, self.seq_len),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |key: &str, msg: &str| Err(Error::config(format!("task.{key}"), msg));
        match self.kind {
            TaskKind::Copy if self.len < 2 || self.len % 2 == 1 => bad("len", "copy rows need an even length >= 2"),
            TaskKind::Copy if self.symbols == 0 => bad("symbols", "must be positive"),
            TaskKind::ModAdd if self.modulus < 2 => bad("modulus", "must be >= 2"),
            TaskKind::Corpus if self.path.is_none() => bad("path", "corpus tasks need a file"),
            TaskKind::Corpus if self.seq_len == 0 => bad("seq_len", "must be positive"),
            TaskKind::Sudoku if !(4 <= self.givens_lo && self.givens_lo <= self.givens_hi && self.givens_hi <= 16) => {
                bad("givens_hi", "need 4 <= givens_lo <= givens_hi <= 16")
            }
            TaskKind::Sudoku if self.train_count == 0 => bad("train_count", "must be positive"),
            _ if self.eval_batch == 0 => bad("eval_batch", "must be positive"),
            _ => Ok(()),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ExperimentConfig {
    pub model: ModelSpec,
    pub train: TrainConfig,
    pub task: TaskConfig,
    pub out: PathBuf,
    /// Record solver trajectories at evaluation.
    pub trajectory: bool,
    /// Write a checkpoint every this many steps (0: only at the end).
    pub checkpoint_interval: usize,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            model: ModelSpec::default(),
            train: TrainConfig::default(),
            task: TaskConfig::default(),
            out: PathBuf::from("runs/default"),
            trajectory: false,
            checkpoint_interval: 0,
        }
    }
}

fn parse<V: FromStr>(key: &str, value: &str) -> Result<V> {
    value
        .parse()
        .map_err(|_| Error::config(key, format!("cannot parse `{value}`")))
}

fn choice<V: Copy>(key: &str, value: &str, options: &[(&str, V)]) -> Result<V> {
    options.iter().find(|(n, _)| *n == value).map(|(_, v)| *v).ok_or_else(|| {
        let names: Vec<&str> = options.iter().map(|(n, _)| *n).collect();
        Error::config(key, format!("`{value}` is not one of {}", names.join(", ")))
    })
}

const FAMILIES: [(&str, Family); 4] = [
    ("attractor", Family::Attractor),
    ("looped", Family::Looped),
    ("plain", Family::Plain),
    ("deq", Family::Deq),
];
const INJECTIONS: [(&str, Injection); 3] = [
    ("initial_only", Injection::InitialOnly),
    ("concat", Injection::Concat),
    ("additive", Injection::Additive),
];
const METHODS: [(&str, SolverMethod); 2] = [("picard", SolverMethod::Picard), ("anderson", SolverMethod::Anderson)];
const TASKS: [(&str, TaskKind); 4] = [
    ("copy", TaskKind::Copy),
    ("modadd", TaskKind::ModAdd),
    ("sudoku", TaskKind::Sudoku),
    ("corpus", TaskKind::Corpus),
];

fn name_of<V: PartialEq>(options: &[(&'static str, V)], v: &V) -> &'static str {
    options.iter().find(|(_, o)| o == v).map(|(n, _)| *n).unwrap_or("?")
}

/// Sets one `model.*` or `solver.*` key. Returns `false` for other prefixes.
fn set_spec_key(spec: &mut ModelSpec, key: &str, value: &str) -> Result<bool> {
    let s = spec;
    match key {
        "model.family" => s.family = choice(key, value, &FAMILIES)?,
        "model.d" => s.d = parse(key, value)?,
        "model.d_ff" => s.d_ff = parse(key, value)?,
        "model.heads" => s.heads = parse(key, value)?,
        "model.vocab" => s.vocab = parse(key, value)?,
        "model.max_len" => s.max_len = parse(key, value)?,
        "model.n_backbone" => s.n_backbone = parse(key, value)?,
        "model.n_cell" => s.n_cell = parse(key, value)?,
        "model.injection" => s.injection = choice(key, value, &INJECTIONS)?,
        "model.init" => {
            let sigma = match s.init_mode {
                InitMode::Gaussian(g) => g,
                _ => 1.0,
            };
            s.init_mode = match value {
                "zero" => InitMode::Zero,
                "gaussian" => InitMode::Gaussian(sigma),
                "proposal" => InitMode::BackboneProposal,
                _ => return Err(Error::config(key, format!("`{value}` is not one of zero, gaussian, proposal"))),
            }
        }
        "model.init_sigma" => {
            let g: f64 = parse(key, value)?;
            if !(g > 0.0) {
                return Err(Error::config(key, "must be > 0"));
            }
            if let InitMode::Gaussian(_) = s.init_mode {
                s.init_mode = InitMode::Gaussian(g);
            }
        }
        "model.backward" => {
            s.backward = match value {
                "onestep" => BackwardMode::OneStep,
                "phantom" => match s.backward {
                    b @ BackwardMode::Phantom { .. } => b,
                    _ => BackwardMode::default(),
                },
                "full_ift" => BackwardMode::FullIft(s.solver),
                _ => return Err(Error::config(key, format!("`{value}` is not one of onestep, phantom, full_ift"))),
            }
        }
        "model.phantom_k" | "model.phantom_damping" => {
            let (mut k, mut damping) = match s.backward {
                BackwardMode::Phantom { k, damping } => (k, damping),
                _ => match BackwardMode::default() {
                    BackwardMode::Phantom { k, damping } => (k, damping),
                    _ => unreachable!(),
                },
            };
            if key == "model.phantom_k" {
                k = parse(key, value)?;
            } else {
                damping = parse(key, value)?;
            }
            if let BackwardMode::Phantom { .. } = s.backward {
                s.backward = BackwardMode::Phantom { k, damping };
            }
        }
        "model.looped_t" => s.looped_t = parse(key, value)?,
        "model.deq_separate_head" => s.deq_separate_head = parse(key, value)?,
        "model.causal" => s.causal = parse(key, value)?,
        "model.cell_init" => s.cell_init = parse(key, value)?,
        "model.gamma_init" => s.gamma_init = parse(key, value)?,
        "model.gamma_max" => s.gamma_max = parse(key, value)?,
        "model.seed" => s.seed = parse(key, value)?,
        "solver.method" => s.solver.method = choice(key, value, &METHODS)?,
        "solver.tol" => s.solver.tol = parse(key, value)?,
        "solver.t_max" => s.solver.t_max = parse(key, value)?,
        "solver.t_min" => s.solver.t_min = parse(key, value)?,
        "solver.window" => s.solver.window = parse(key, value)?,
        "solver.damping" => s.solver.damping = parse(key, value)?,
        "solver.ridge" => s.solver.ridge = parse(key, value)?,
        _ => return Ok(false),
    }
    if key.starts_with("solver.") {
        if let BackwardMode::FullIft(_) = s.backward {
            s.backward = BackwardMode::FullIft(s.solver);
        }
    }
    Ok(true)
}

/// Key/value pairs describing `spec`, in a fixed order.
pub fn spec_entries(spec: &ModelSpec) -> Vec<(String, String)> {
    let mut v: Vec<(&str, String)> = vec![
        ("model.family", name_of(&FAMILIES, &spec.family).into()),
        ("model.d", spec.d.to_string()),
        ("model.d_ff", spec.d_ff.to_string()),
        ("model.heads", spec.heads.to_string()),
        ("model.vocab", spec.vocab.to_string()),
        ("model.max_len", spec.max_len.to_string()),
        ("model.n_backbone", spec.n_backbone.to_string()),
        ("model.n_cell", spec.n_cell.to_string()),
        ("model.injection", name_of(&INJECTIONS, &spec.injection).into()),
    ];
    match spec.init_mode {
        InitMode::Zero => v.push(("model.init", "zero".into())),
        InitMode::BackboneProposal => v.push(("model.init", "proposal".into())),
        InitMode::Gaussian(g) => {
            v.push(("model.init", "gaussian".into()));
            v.push(("model.init_sigma", g.to_string()));
        }
    }
    match spec.backward {
        BackwardMode::OneStep => v.push(("model.backward", "onestep".into())),
        BackwardMode::FullIft(_) => v.push(("model.backward", "full_ift".into())),
        BackwardMode::Phantom { k, damping } => {
            v.push(("model.backward", "phantom".into()));
            v.push(("model.phantom_k", k.to_string()));
            v.push(("model.phantom_damping", damping.to_string()));
        }
    }
    v.extend([
        ("model.looped_t", spec.looped_t.to_string()),
        ("model.deq_separate_head", spec.deq_separate_head.to_string()),
        ("model.causal", spec.causal.to_string()),
        ("model.cell_init", spec.cell_init.to_string()),
        ("model.gamma_init", spec.gamma_init.to_string()),
        ("model.gamma_max", spec.gamma_max.to_string()),
        ("model.seed", spec.seed.to_string()),
        ("solver.method", name_of(&METHODS, &spec.solver.method).into()),
        ("solver.tol", spec.solver.tol.to_string()),
        ("solver.t_max", spec.solver.t_max.to_string()),
        ("solver.t_min", spec.solver.t_min.to_string()),
        ("solver.window", spec.solver.window.to_string()),
        ("solver.damping", spec.solver.damping.to_string()),
        ("solver.ridge", spec.solver.ridge.to_string()),
    ]);
    v.into_iter().map(|(k, v)| (k.to_string(), v)).collect()
}

pub fn spec_header(spec: &ModelSpec) -> String {
    spec_entries(spec).iter().map(|(k, v)| format!("{k} = {v}\n")).collect()
}

/// Splits `key = value` lines, skipping comments and blank lines.
fn lines(text: &str) -> Result<Vec<(String, String)>> {
    let mut out = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| Error::config(format!("line {}", i + 1), format!("expected `key = value`, got `{line}`")))?;
        out.push((k.trim().to_string(), v.trim().to_string()));
    }
    Ok(out)
}

pub fn parse_spec_header(text: &str) -> Result<ModelSpec> {
    let mut spec = ModelSpec::default();
    // A header fully determines the spec; ordering within it must not
    // matter for the dependent keys.
    let entries = lines(text)?;
    for _ in 0..2 {
        for (k, v) in &entries {
            if !set_spec_key(&mut spec, k, v)? {
                return Err(Error::Checkpoint(format!("unexpected header key `{k}`")));
            }
        }
    }
    spec.validate()?;
    Ok(spec)
}

/// First key whose value differs between two specs.
pub fn first_spec_mismatch(a: &ModelSpec, b: &ModelSpec) -> Option<String> {
    let (ea, eb) = (spec_entries(a), spec_entries(b));
    for (x, y) in ea.iter().zip(&eb) {
        if x != y {
            return Some(x.0.clone());
        }
    }
    None
}

impl ExperimentConfig {
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        if set_spec_key(&mut self.model, key, value)? {
            return Ok(());
        }
        let t = &mut self.train;
        let k = &mut self.task;
        match key {
            "train.steps" => t.steps = parse(key, value)?,
            "train.batch" => t.batch = parse(key, value)?,
            "train.lr" => t.lr = parse(key, value)?,
            "train.beta1" => t.beta1 = parse(key, value)?,
            "train.beta2" => t.beta2 = parse(key, value)?,
            "train.eps" => t.eps = parse(key, value)?,
            "train.weight_decay" => t.weight_decay = parse(key, value)?,
            "train.warmup" => t.warmup = parse(key, value)?,
            "train.cooldown" => t.cooldown = parse(key, value)?,
            "train.clip" => t.clip = parse(key, value)?,
            "train.seed" => t.seed = parse(key, value)?,
            "train.eval_interval" => t.eval_interval = parse(key, value)?,
            "train.sup_steps" => t.sup_steps = parse(key, value)?,
            "train.rho_interval" => t.rho_interval = parse(key, value)?,
            "train.fp_lr_scale" => t.fp_lr_scale = parse(key, value)?,
            "train.fp_weight_decay" => t.fp_weight_decay = parse(key, value)?,
            "task.kind" => k.kind = choice(key, value, &TASKS)?,
            "task.len" => k.len = parse(key, value)?,
            "task.symbols" => k.symbols = parse(key, value)?,
            "task.modulus" => k.modulus = parse(key, value)?,
            "task.path" => k.path = (!value.is_empty()).then(|| PathBuf::from(value)),
            "task.seq_len" => k.seq_len = parse(key, value)?,
            "task.seed" => k.seed = parse(key, value)?,
            "task.train_count" => k.train_count = parse(key, value)?,
            "task.eval_count" => k.eval_count = parse(key, value)?,
            "task.givens_lo" => k.givens_lo = parse(key, value)?,
            "task.givens_hi" => k.givens_hi = parse(key, value)?,
            "task.eval_batch" => k.eval_batch = parse(key, value)?,
            "out" => self.out = PathBuf::from(value),
            "diag.trajectory" => self.trajectory = parse(key, value)?,
            "checkpoint_interval" => self.checkpoint_interval = parse(key, value)?,
            _ => return Err(Error::config(key, "unknown key")),
        }
        Ok(())
    }

    /// Applies a config file's text, then `overrides` in order.
    pub fn from_text(text: &str, overrides: &[(String, String)]) -> Result<Self> {
        let mut cfg = ExperimentConfig::default();
        for (k, v) in lines(text)?.iter().chain(overrides) {
            cfg.set(k, v)?;
        }
        cfg.finish()?;
        Ok(cfg)
    }

    pub fn from_file(path: Option<&Path>, overrides: &[(String, String)]) -> Result<Self> {
        let text = match path {
            Some(p) => std::fs::read_to_string(p).map_err(|e| Error::io(p, e))?,
            None => String::new(),
        };
        Self::from_text(&text, overrides)
    }

    /// Derives task-dependent model settings and validates everything.
    pub fn finish(&mut self) -> Result<()> {
        self.task.validate()?;
        let (vocab, len) = self.task.vocab_and_len();
        if self.model.vocab == 0 {
            self.model.vocab = vocab;
        } else if self.model.vocab < vocab {
            return Err(Error::config("model.vocab", format!("task needs at least {vocab} tokens")));
        }
        if self.task.kind == TaskKind::Sudoku {
            self.model.max_len = len;
            self.model.causal = false;
        } else if self.model.max_len < len {
            return Err(Error::config("model.max_len", format!("task rows have length {len}")));
        }
        self.model.validate()?;
        self.train.validate()
    }

    /// Every key with its current value, in a fixed order.
    pub fn entries(&self) -> Vec<(String, String)> {
        let mut v = spec_entries(&self.model);
        let t = &self.train;
        let k = &self.task;
        let more: Vec<(&str, String)> = vec![
            ("train.steps", t.steps.to_string()),
            ("train.batch", t.batch.to_string()),
            ("train.lr", t.lr.to_string()),
            ("train.beta1", t.beta1.to_string()),
            ("train.beta2", t.beta2.to_string()),
            ("train.eps", t.eps.to_string()),
            ("train.weight_decay", t.weight_decay.to_string()),
            ("train.warmup", t.warmup.to_string()),
            ("train.cooldown", t.cooldown.to_string()),
            ("train.clip", t.clip.to_string()),
            ("train.seed", t.seed.to_string()),
            ("train.eval_interval", t.eval_interval.to_string()),
            ("train.sup_steps", t.sup_steps.to_string()),
            ("train.rho_interval", t.rho_interval.to_string()),
            ("train.fp_lr_scale", t.fp_lr_scale.to_string()),
            ("train.fp_weight_decay", t.fp_weight_decay.to_string()),
            ("task.kind", name_of(&TASKS, &k.kind).into()),
            ("task.len", k.len.to_string()),
            ("task.symbols", k.symbols.to_string()),
            ("task.modulus", k.modulus.to_string()),
            ("task.path", k.path.as_ref().map(|p| p.display().to_string()).unwrap_or_default()),
            ("task.seq_len", k.seq_len.to_string()),
            ("task.seed", k.seed.to_string()),
            ("task.train_count", k.train_count.to_string()),
            ("task.eval_count", k.eval_count.to_string()),
            ("task.givens_lo", k.givens_lo.to_string()),
            ("task.givens_hi", k.givens_hi.to_string()),
            ("task.eval_batch", k.eval_batch.to_string()),
            ("out", self.out.display().to_string()),
            ("diag.trajectory", self.trajectory.to_string()),
            ("checkpoint_interval", self.checkpoint_interval.to_string()),
        ];
        v.extend(more.into_iter().map(|(a, b)| (a.to_string(), b)));
        v
    }

    pub fn to_text(&self) -> String {
        self.entries().iter().map(|(k, v)| format!("{k} = {v}\n")).collect()
    }
}

/// Parses `key=value` command-line overrides.
pub fn parse_overrides(args: &[String]) -> Result<Vec<(String, String)>> {
    args.iter()
        .map(|a| {
            a.split_once('=')
                .map(|(k, v)| (k.trim().to_string(), v.trim().to_string()))
                .ok_or_else(|| Error::config(a.clone(), "overrides must look like key=value"))
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_file_gives_valid_defaults() {
        let cfg = ExperimentConfig::from_text("", &[]).unwrap();
        assert_eq!(cfg.model.vocab, 98);
        assert_eq!(cfg.train, TrainConfig::default());
    }

    #[test]
    fn negative_tolerance_names_the_key() {
        match ExperimentConfig::from_text("solver.tol = -1", &[]) {
            Err(Error::Config { key, .. }) => assert_eq!(key, "solver.tol"),
            other => panic!("expected a config error, got {other:?}"),
        }
    }

    #[test]
    fn unknown_and_malformed_keys_are_rejected() {
        assert!(matches!(
            ExperimentConfig::from_text("model.depth = 3", &[]),
            Err(Error::Config { key, .. }) if key == "model.depth"
        ));
        assert!(matches!(
            ExperimentConfig::from_text("model.d = many", &[]),
            Err(Error::Config { key, .. }) if key == "model.d"
        ));
        assert!(matches!(
            ExperimentConfig::from_text("train.warmup = 0.6\ntrain.cooldown = 0.6", &[]),
            Err(Error::Config { key, .. }) if key == "train.cooldown"
        ));
    }

    #[test]
    fn overrides_beat_the_file() {
        let o = parse_overrides(&["model.d=32".into()]).unwrap();
        let cfg = ExperimentConfig::from_text("model.d = 128\n# comment\n\nmodel.heads = 2", &o).unwrap();
        assert_eq!(cfg.model.d, 32);
        assert_eq!(cfg.model.heads, 2);
    }

    #[test]
    fn text_round_trip() {
        let o = parse_overrides(&[
            "model.family=deq".into(),
            "model.init=gaussian".into(),
            "model.init_sigma=0.5".into(),
            "model.backward=full_ift".into(),
            "solver.t_max=17".into(),
            "task.kind=copy".into(),
        ])
        .unwrap();
        let cfg = ExperimentConfig::from_text("", &o).unwrap();
        let again = ExperimentConfig::from_text(&cfg.to_text(), &[]).unwrap();
        assert_eq!(cfg, again);
        let spec = parse_spec_header(&spec_header(&cfg.model)).unwrap();
        assert_eq!(spec, cfg.model);
        assert!(matches!(spec.backward, BackwardMode::FullIft(c) if c.t_max == 17));
    }

    #[test]
    fn mismatch_names_first_differing_key() {
        let a = ModelSpec {
            vocab: 10,
            ..Default::default()
        };
        let b = ModelSpec { d: 32, n_cell: 2, ..a.clone() };
        assert_eq!(first_spec_mismatch(&a, &b).as_deref(), Some("model.d"));
        assert_eq!(first_spec_mismatch(&a, &a.clone()), None);
    }
}
