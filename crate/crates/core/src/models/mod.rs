//! Full architectures over token sequences.
//!
//! * `Attractor`: backbone proposal `y0`, equilibrium `y* = T(y*, y0)` found by
//!   the solver, decoded through the tied embedding.
//! * `Deq`: same cell, but the solve starts from zero and may use its own head.
//! * `Looped`: the cell unrolled a fixed number of times from zero, trained by
//!   backpropagation through every step.
//! * `Plain`: a transformer stack with tied unembedding.

mod grid;

pub use grid::{GridMap, GridModel, GridState, GridStepOutput};

use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::implicit::{implicit_backward, BackwardMode};
use crate::nn::{normal_tensor, BlockConfig, Cell, Injection, Stack};
use crate::solver::{root_find, FixedPointMap, SolverConfig, SolverResult};
use crate::tasks::TaskBatch;
use crate::tensor::{Checkpoint, ParamId, ParamStore, Real, Tag, Tape, Tensor, Var};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Family {
    Attractor,
    Looped,
    Plain,
    Deq,
}

/// Where the solver (or unroll) starts.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum InitMode {
    Zero,
    Gaussian(f64),
    BackboneProposal,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ModelSpec {
    pub family: Family,
    pub d: usize,
    pub d_ff: usize,
    pub heads: usize,
    pub vocab: usize,
    pub max_len: usize,
    pub n_backbone: usize,
    pub n_cell: usize,
    pub injection: Injection,
    pub init_mode: InitMode,
    pub solver: SolverConfig,
    pub backward: BackwardMode,
    pub looped_t: usize,
    pub deq_separate_head: bool,
    pub causal: bool,
    /// Init scale of the cell's output projections (0 makes each cell block
    /// start as the identity).
    pub cell_init: f64,
    /// Initial value of the cell's per-channel output scale (the gain of its
    /// final norm).
    pub gamma_init: f64,
    /// The output scale is clamped to `[-gamma_max, gamma_max]` after every
    /// update, which bounds how far one application can move the state.
    pub gamma_max: f64,
    pub seed: u64,
}

impl Default for ModelSpec {
    fn default() -> Self {
        ModelSpec {
            family: Family::Attractor,
            d: 64,
            d_ff: 256,
            heads: 4,
            vocab: 0,
            max_len: 64,
            n_backbone: 2,
            n_cell: 1,
            injection: Injection::Additive,
            init_mode: InitMode::BackboneProposal,
            solver: SolverConfig::default(),
            backward: BackwardMode::default(),
            looped_t: 8,
            deq_separate_head: true,
            causal: true,
            cell_init: 1.0,
            gamma_init: 0.75,
            gamma_max: 0.75,
            seed: 0,
        }
    }
}

impl ModelSpec {
    pub fn block_config(&self) -> BlockConfig {
        BlockConfig {
            d: self.d,
            d_ff: self.d_ff,
            heads: self.heads,
            max_len: self.max_len,
            causal: self.causal,
        }
    }

    pub fn has_cell(&self) -> bool {
        self.family != Family::Plain
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |key: &str, msg: String| Err(Error::config(format!("model.{key}"), msg));
        if self.vocab == 0 {
            return bad("vocab", "must be positive".into());
        }
        if let Err(e) = self.block_config().validate() {
            return bad("heads", e.to_string());
        }
        if self.family == Family::Looped && self.looped_t == 0 {
            return bad("looped_t", "looped models need at least one step".into());
        }
        if self.has_cell() && self.n_cell == 0 {
            return bad("n_cell", "the refinement cell needs at least one block".into());
        }
        if !(self.gamma_init > 0.0) {
            return bad("gamma_init", "must be > 0".into());
        }
        if !(self.gamma_max >= self.gamma_init) {
            return bad("gamma_max", "must be >= gamma_init".into());
        }
        if let InitMode::Gaussian(s) = self.init_mode {
            if !(s > 0.0) {
                return bad("init_sigma", "must be > 0".into());
            }
        }
        match self.backward {
            BackwardMode::Phantom { k, damping } => {
                if k == 0 {
                    return bad("phantom_k", "must be >= 1".into());
                }
                if !(damping > 0.0 && damping <= 1.0) {
                    return bad("phantom_damping", "must lie in (0, 1]".into());
                }
            }
            BackwardMode::FullIft(cfg) => cfg.validate()?,
            BackwardMode::OneStep => {}
        }
        if matches!(self.family, Family::Attractor | Family::Deq) {
            self.solver.validate()?;
        }
        Ok(())
    }
}

/// Closed-form trainable parameter count.
pub fn param_count(spec: &ModelSpec) -> usize {
    let b = spec.block_config().block_params();
    let (v, d) = (spec.vocab, spec.d);
    let mut n = v * d + spec.n_backbone * b + d;
    if spec.has_cell() {
        n += spec.n_cell * b + d;
        if spec.injection == Injection::Concat {
            n += 2 * d * d;
        }
    }
    if spec.family == Family::Deq && spec.deq_separate_head {
        n += v * d;
    }
    n
}

/// Floating-point work of one forward pass, by component.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct ForwardFlops {
    pub backbone: u64,
    pub cell: u64,
    pub mixing: u64,
    pub head: u64,
}

#[derive(Clone, Debug)]
pub struct ForwardOutput<T> {
    /// `[B, L, V]`.
    pub logits: Tensor<T>,
    pub solver: Option<SolverResult<T>>,
    pub proposal: Option<Tensor<T>>,
    /// State that was decoded.
    pub state: Tensor<T>,
    pub flops: ForwardFlops,
}

/// Per-step measurements of a training pass.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct StepStats {
    pub loss: f64,
    pub iters_fwd: usize,
    pub iters_bwd: usize,
    pub converged: bool,
    /// `‖y0 − y*‖ / ‖y*‖`, when the family has an equilibrium.
    pub internalization_dist: Option<f64>,
    pub act_peak: usize,
    pub flops_backbone: u64,
    pub flops_cell: u64,
}

#[derive(Clone, Debug)]
pub struct StepOutput<T> {
    pub grads: Vec<(ParamId, Tensor<T>)>,
    pub stats: StepStats,
    /// `(y*, y0)` for families with an equilibrium.
    pub equilibrium: Option<(Tensor<T>, Tensor<T>)>,
}

/// Binds a model's cell and parameters into a [`FixedPointMap`].
pub struct CellMap<'a, T> {
    pub cell: &'a Cell,
    pub store: &'a ParamStore<T>,
    pub cfg: BlockConfig,
}

impl<T: Real> FixedPointMap<T> for CellMap<'_, T> {
    fn record(&self, tape: &mut Tape<T>, y: Var, y0: Var) -> Result<Var> {
        let prev = tape.tag();
        tape.set_tag(Tag::Cell);
        let out = self.cell.apply(tape, self.store, &self.cfg, y, y0);
        tape.set_tag(prev);
        out
    }
}

#[derive(Clone, Debug)]
pub struct Model<T> {
    pub spec: ModelSpec,
    pub params: ParamStore<T>,
    pub embed: ParamId,
    pub backbone: Stack,
    pub cell: Option<Cell>,
    pub head: Option<ParamId>,
}

impl<T: Real> Model<T> {
    pub fn new(spec: ModelSpec) -> Result<Self> {
        spec.validate()?;
        let cfg = spec.block_config();
        let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
        let mut params = ParamStore::new();
        let std = 1.0 / (spec.d as f64).sqrt();
        let embed = params.add("embed", normal_tensor(&mut rng, &[spec.vocab, spec.d], std));
        let backbone = Stack::init(&mut params, "backbone", &cfg, spec.n_backbone, &mut rng, 0.0);
        let cell = spec
            .has_cell()
            .then(|| Cell::init(&mut params, "cell", &cfg, spec.n_cell, spec.injection, &mut rng, spec.cell_init));
        let head = (spec.family == Family::Deq && spec.deq_separate_head)
            .then(|| params.add("head", normal_tensor(&mut rng, &[spec.vocab, spec.d], std)));
        if let Some(c) = &cell {
            *params.value_mut(c.stack.final_gain) = Tensor::full(&[spec.d], T::of(spec.gamma_init));
        }
        Ok(Model {
            spec,
            params,
            embed,
            backbone,
            cell,
            head,
        })
    }

    pub fn param_count(&self) -> usize {
        self.params.numel()
    }

    /// Marks the parameters of the fixed-point module (the cell of an
    /// equilibrium family).
    pub fn fixed_point_mask(&self) -> Vec<bool> {
        let mut mask = vec![false; self.params.len()];
        if matches!(self.spec.family, Family::Attractor | Family::Deq) {
            for id in self.cell.iter().flat_map(|c| c.ids()) {
                mask[id.index()] = true;
            }
        }
        mask
    }

    /// Clamps the cell's output scale to `gamma_max`.
    pub fn project(&mut self) {
        if let Some(c) = &self.cell {
            clamp_gain(&mut self.params, c.stack.final_gain, self.spec.gamma_max);
        }
    }

    pub fn cell_map(&self) -> Option<CellMap<'_, T>> {
        self.cell.as_ref().map(|cell| CellMap {
            cell,
            store: &self.params,
            cfg: self.spec.block_config(),
        })
    }

    fn check_tokens(&self, tokens: &[usize], batch: usize) -> Result<usize> {
        if batch == 0 || tokens.is_empty() || !tokens.len().is_multiple_of(batch) {
            return Err(Error::contract(format!("{} tokens do not split into {batch} rows", tokens.len())));
        }
        Ok(tokens.len() / batch)
    }

    /// Records `y0 = backbone(E[tokens])` on `tape`.
    pub fn propose(&self, tape: &mut Tape<T>, tokens: &[usize], batch: usize) -> Result<Var> {
        let len = self.check_tokens(tokens, batch)?;
        let prev = tape.tag();
        tape.set_tag(Tag::Backbone);
        let e = tape.param(&self.params, self.embed);
        let x = tape.embedding(e, tokens, &[batch, len])?;
        let y0 = self.backbone.forward(tape, &self.params, &self.spec.block_config(), x);
        tape.set_tag(prev);
        y0
    }

    /// Records the readout `y·Eᵀ` (or `y·Hᵀ` with a separate head).
    pub fn decode(&self, tape: &mut Tape<T>, y: Var) -> Result<Var> {
        let prev = tape.tag();
        tape.set_tag(Tag::Head);
        let w = tape.param(&self.params, self.head.unwrap_or(self.embed));
        let out = tape.matmul_nt(y, w);
        tape.set_tag(prev);
        out
    }

    /// Solver starting point for proposal `y0`.
    pub fn init_state(&self, y0: &Tensor<T>) -> Tensor<T> {
        let mode = match self.spec.family {
            Family::Deq => InitMode::Zero,
            Family::Looped => match self.spec.init_mode {
                InitMode::BackboneProposal => InitMode::Zero,
                m => m,
            },
            _ => self.spec.init_mode,
        };
        match mode {
            InitMode::Zero => Tensor::zeros(y0.shape()),
            InitMode::BackboneProposal => y0.clone(),
            InitMode::Gaussian(s) => {
                let mut rng = ChaCha8Rng::seed_from_u64(self.spec.seed ^ 0x5EED_1417);
                normal_tensor(&mut rng, y0.shape(), s)
            }
        }
    }

    fn solver_config(&self, override_t: Option<usize>) -> SolverConfig {
        match override_t {
            Some(t) => self.spec.solver.with_budget(t),
            None => self.spec.solver,
        }
    }

    /// Inference pass. `override_t` fixes the iteration budget (ignoring the
    /// tolerance); `Some(0)` decodes the proposal directly.
    pub fn forward(&self, tokens: &[usize], batch: usize, override_t: Option<usize>, diagnostics: bool) -> Result<ForwardOutput<T>> {
        let mut tape = Tape::new();
        let y0 = self.propose(&mut tape, tokens, batch)?;
        let mut flops = ForwardFlops {
            backbone: tape.flops(),
            ..Default::default()
        };
        let y0v = tape.value(y0).clone();
        let (state, solver) = match (self.spec.family, override_t) {
            (Family::Plain, _) | (_, Some(0)) => (y0v.clone(), None),
            (Family::Looped, t) => {
                let map = self.cell_map().expect("looped model has a cell");
                let steps = t.unwrap_or(self.spec.looped_t);
                let mut h = self.init_state(&y0v);
                for _ in 0..steps {
                    let (next, f) = map.eval(&h, &y0v)?;
                    flops.cell += f;
                    h = next;
                }
                (h, None)
            }
            (Family::Attractor | Family::Deq, t) => {
                let map = self.cell_map().expect("equilibrium model has a cell");
                let res = root_find(&map, &y0v, &self.init_state(&y0v), &self.solver_config(t), diagnostics)?;
                flops.cell = res.map_flops;
                flops.mixing = res.mix_flops;
                (res.y_star.clone(), Some(res))
            }
        };
        let mut head_tape = Tape::new();
        let s = head_tape.constant(state.clone());
        let logits = self.decode(&mut head_tape, s)?;
        flops.head = head_tape.flops();
        Ok(ForwardOutput {
            logits: head_tape.value(logits).clone(),
            solver,
            proposal: (self.spec.family != Family::Plain).then_some(y0v),
            state,
            flops,
        })
    }

    /// Masked cross-entropy of a forward pass.
    pub fn eval_loss(&self, batch: &TaskBatch, override_t: Option<usize>) -> Result<(f64, ForwardOutput<T>)> {
        let out = self.forward(&batch.inputs, batch.batch, override_t, false)?;
        let loss = masked_loss(&out.logits, batch)?;
        Ok((loss, out))
    }

    /// Loss and parameter gradients of one batch, using the family's
    /// training path.
    pub fn loss_and_grads(&self, batch: &TaskBatch) -> Result<StepOutput<T>> {
        match self.spec.family {
            Family::Plain | Family::Looped => self.unrolled_grads(batch),
            Family::Attractor | Family::Deq => self.implicit_grads(batch),
        }
    }

    fn unrolled_grads(&self, batch: &TaskBatch) -> Result<StepOutput<T>> {
        let mut tape = Tape::new();
        let y0 = self.propose(&mut tape, &batch.inputs, batch.batch)?;
        let mut state = y0;
        let mut steps = 0;
        if self.spec.family == Family::Looped {
            let map = self.cell_map().expect("looped model has a cell");
            let init = self.init_state(tape.value(y0));
            state = tape.constant(init);
            for _ in 0..self.spec.looped_t {
                state = map.record(&mut tape, state, y0)?;
            }
            steps = self.spec.looped_t;
        }
        let logits = self.decode(&mut tape, state)?;
        tape.set_tag(Tag::Loss);
        let loss = tape.cross_entropy(logits, &batch.loss_targets(), crate::tasks::IGNORE)?;
        let g = tape.backward(loss)?;
        let fwd_backbone = tape.flops_tagged(Tag::Backbone) + tape.flops_tagged(Tag::Head) + tape.flops_tagged(Tag::Loss);
        Ok(StepOutput {
            grads: tape.param_grads(&g),
            stats: StepStats {
                loss: tape.value(loss).data()[0].f64(),
                iters_fwd: steps,
                iters_bwd: steps,
                converged: true,
                internalization_dist: None,
                act_peak: tape.activation_count(),
                flops_backbone: 3 * fwd_backbone,
                flops_cell: 3 * tape.flops_tagged(Tag::Cell),
            },
            equilibrium: None,
        })
    }

    fn implicit_grads(&self, batch: &TaskBatch) -> Result<StepOutput<T>> {
        let map = self.cell_map().expect("equilibrium model has a cell");
        let mut tape_a = Tape::new();
        let y0 = self.propose(&mut tape_a, &batch.inputs, batch.batch)?;
        let y0v = tape_a.value(y0).clone();
        let res = root_find(&map, &y0v, &self.init_state(&y0v), &self.spec.solver, false)?;

        let mut tape_b = Tape::new();
        let ys = tape_b.leaf(res.y_star.clone(), true);
        let logits = self.decode(&mut tape_b, ys)?;
        tape_b.set_tag(Tag::Loss);
        let loss = tape_b.cross_entropy(logits, &batch.loss_targets(), crate::tasks::IGNORE)?;
        let gb = tape_b.backward(loss)?;
        let v = gb.get_or_zeros(ys, res.y_star.shape());

        let ig = implicit_backward(&map, &self.spec.backward, &v, &res.y_star, &y0v)?;
        let ga = tape_a.backward_from(y0, &ig.d_y0)?;

        let mut grads = tape_b.param_grads(&gb);
        grads.extend(ig.params);
        grads.extend(tape_a.param_grads(&ga));
        let dist = y0v.dist(&res.y_star) / res.y_star.norm().max(crate::solver::RESIDUAL_FLOOR);
        Ok(StepOutput {
            grads,
            stats: StepStats {
                loss: tape_b.value(loss).data()[0].f64(),
                iters_fwd: res.iterations,
                iters_bwd: match self.spec.backward {
                    BackwardMode::OneStep => 1,
                    BackwardMode::Phantom { k, .. } => k,
                    BackwardMode::FullIft(_) => ig.iterations,
                },
                converged: res.converged,
                internalization_dist: Some(dist),
                act_peak: tape_a.activation_count() + tape_b.activation_count() + ig.activations,
                flops_backbone: 3 * (tape_a.flops() + tape_b.flops()),
                flops_cell: res.map_flops + res.mix_flops + ig.flops,
            },
            equilibrium: Some((res.y_star, y0v)),
        })
    }

    /// Writes the spec as a `key = value` header, a blank line, then the
    /// parameters in the binary checkpoint format.
    pub fn save(&self, path: &Path) -> Result<()> {
        let mut bytes = crate::config::spec_header(&self.spec).into_bytes();
        bytes.push(b'\n');
        bytes.extend(Checkpoint::from_params(&self.params).to_bytes());
        std::fs::write(path, bytes).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let (spec, ck) = read_checkpoint(path)?;
        let mut model = Model::new(spec)?;
        ck.restore(&mut model.params)?;
        Ok(model)
    }
}

/// Splits a model file into its spec header and parameter block.
pub fn read_checkpoint(path: &Path) -> Result<(ModelSpec, Checkpoint)> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    let split = bytes
        .windows(2)
        .position(|w| w == b"\n\n")
        .ok_or_else(|| Error::Checkpoint("missing model header".into()))?;
    let header = std::str::from_utf8(&bytes[..split]).map_err(|_| Error::Checkpoint("header is not UTF-8".into()))?;
    let spec = crate::config::parse_spec_header(header)?;
    Ok((spec, Checkpoint::from_bytes(&bytes[split + 2..])?))
}

pub(crate) fn clamp_gain<T: Real>(params: &mut ParamStore<T>, id: ParamId, max: f64) {
    let (lo, hi) = (T::of(-max), T::of(max));
    for g in params.value_mut(id).data_mut() {
        *g = g.max(lo).min(hi);
    }
}

/// Mean cross-entropy over masked positions of `[B, L, V]` logits.
pub fn masked_loss<T: Real>(logits: &Tensor<T>, batch: &TaskBatch) -> Result<f64> {
    let mut tape = Tape::new();
    let l = tape.constant(logits.clone());
    let loss = tape.cross_entropy(l, &batch.loss_targets(), crate::tasks::IGNORE)?;
    Ok(tape.value(loss).data()[0].f64())
}

/// Fraction of masked positions whose argmax matches the target, and the
/// fraction of rows with every masked position correct.
pub fn masked_accuracy<T: Real>(logits: &Tensor<T>, batch: &TaskBatch) -> (f64, f64) {
    let v = logits.last_dim();
    let (mut hit, mut total, mut rows_ok) = (0usize, 0usize, 0usize);
    for r in 0..batch.batch {
        let mut ok = true;
        for p in 0..batch.len {
            let i = r * batch.len + p;
            if !batch.mask[i] {
                continue;
            }
            let row = &logits.data()[i * v..(i + 1) * v];
            let arg = (0..v).max_by(|&a, &b| row[a].partial_cmp(&row[b]).unwrap_or(std::cmp::Ordering::Equal)).unwrap();
            total += 1;
            if arg == batch.targets[i] {
                hit += 1;
            } else {
                ok = false;
            }
        }
        rows_ok += ok as usize;
    }
    (hit as f64 / total.max(1) as f64, rows_ok as f64 / batch.batch.max(1) as f64)
}
