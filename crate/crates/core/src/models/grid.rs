//! Direct grid prediction with deep supervision.
//!
//! The state carries an answer latent `y` and a reasoning latent `z`, both
//! `[B, L, d]`. One application of the tied body `f` is
//!
//! ```text
//! z' = f(z + y + x),   y' = f(y + z')
//! ```
//!
//! where `x` embeds the given cells. Each supervision step solves for the
//! joint fixed point of this update from the previous step's state (a learned
//! embedding at step zero), decodes `y`, and detaches the result. The plain
//! comparison model is the body applied once to `x`.
//!
//! For the solver both latents are stacked along the batch axis into one
//! `[2B, L, d]` tensor, and the injection is `x` stacked over zeros so that it
//! has the state's shape.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{masked_accuracy, Family, ModelSpec, StepStats};
use crate::error::{Error, Result};
use crate::implicit::implicit_backward;
use crate::nn::{normal_tensor, BlockConfig, Stack};
use crate::solver::{root_find, FixedPointMap, SolverResult, RESIDUAL_FLOOR};
use crate::tasks::{TaskBatch, IGNORE};
use crate::tensor::{Checkpoint, ParamId, ParamStore, Real, Tag, Tape, Tensor, Var};

/// Detached `(y, z)` carried between supervision steps.
#[derive(Clone, Debug, PartialEq)]
pub struct GridState<T> {
    pub y: Tensor<T>,
    pub z: Tensor<T>,
}

impl<T: Real> GridState<T> {
    fn stacked(&self) -> Tensor<T> {
        let mut shape = self.y.shape().to_vec();
        shape[0] *= 2;
        let mut data = self.y.data().to_vec();
        data.extend_from_slice(self.z.data());
        Tensor::new(shape, data).expect("stacked state")
    }

    fn split(s: &Tensor<T>) -> Self {
        let mut shape = s.shape().to_vec();
        shape[0] /= 2;
        let half = s.numel() / 2;
        GridState {
            y: Tensor::new(shape.clone(), s.data()[..half].to_vec()).expect("split state"),
            z: Tensor::new(shape, s.data()[half..].to_vec()).expect("split state"),
        }
    }
}

#[derive(Clone, Debug)]
pub struct GridStepOutput<T> {
    pub grads: Vec<(ParamId, Tensor<T>)>,
    pub stats: StepStats,
    pub next: GridState<T>,
    pub logits: Tensor<T>,
}

#[derive(Clone, Debug)]
pub struct GridModel<T> {
    pub spec: ModelSpec,
    pub params: ParamStore<T>,
    pub embed: ParamId,
    pub pos: ParamId,
    pub body: Stack,
    pub head: ParamId,
    /// Step-zero `(y, z)` rows, present for the fixed-point family.
    pub init: Option<(ParamId, ParamId)>,
}

/// The joint `(y, z)` update as a fixed-point map over stacked states.
pub struct GridMap<'a, T> {
    body: &'a Stack,
    store: &'a ParamStore<T>,
    cfg: BlockConfig,
}

impl<T: Real> FixedPointMap<T> for GridMap<'_, T> {
    fn record(&self, tape: &mut Tape<T>, s: Var, inj: Var) -> Result<Var> {
        let b2 = tape.shape(s)[0];
        if !b2.is_multiple_of(2) || tape.shape(s) != tape.shape(inj) {
            return Err(Error::contract("grid state must stack (y, z) along the batch axis"));
        }
        let prev = tape.tag();
        tape.set_tag(Tag::Cell);
        let b = b2 / 2;
        let y = tape.narrow0(s, 0, b)?;
        let z = tape.narrow0(s, b, b)?;
        let x = tape.narrow0(inj, 0, b)?;
        let u = tape.add(z, y)?;
        let u = tape.add(u, x)?;
        let z1 = self.body.forward(tape, self.store, &self.cfg, u)?;
        let u = tape.add(y, z1)?;
        let y1 = self.body.forward(tape, self.store, &self.cfg, u)?;
        let out = tape.concat0(y1, z1);
        tape.set_tag(prev);
        out
    }
}

impl<T: Real> GridModel<T> {
    /// `Attractor` uses `n_cell` body blocks, `Plain` uses `n_backbone`.
    pub fn new(spec: ModelSpec) -> Result<Self> {
        spec.validate()?;
        let depth = match spec.family {
            Family::Attractor => spec.n_cell,
            Family::Plain => spec.n_backbone,
            f => return Err(Error::config("model.family", format!("{f:?} is not supported for grid tasks"))),
        };
        let cfg = spec.block_config();
        let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
        let mut params = ParamStore::new();
        let embed = params.add("embed", normal_tensor(&mut rng, &[spec.vocab, spec.d], 1.0));
        let pos = params.add("pos", normal_tensor(&mut rng, &[spec.max_len, spec.d], 1.0));
        let body = Stack::init(&mut params, "body", &cfg, depth, &mut rng, spec.cell_init);
        let head = params.add("head", normal_tensor(&mut rng, &[spec.vocab, spec.d], 1.0 / (spec.d as f64).sqrt()));
        if spec.family == Family::Attractor {
            *params.value_mut(body.final_gain) = Tensor::full(&[spec.d], T::of(spec.gamma_init));
        }
        let init = (spec.family == Family::Attractor).then(|| {
            (
                params.add("y_init", normal_tensor(&mut rng, &[spec.d], 1.0)),
                params.add("z_init", normal_tensor(&mut rng, &[spec.d], 1.0)),
            )
        });
        Ok(GridModel {
            spec,
            params,
            embed,
            pos,
            body,
            head,
            init,
        })
    }

    pub fn param_count(&self) -> usize {
        self.params.numel()
    }

    pub fn fixed_point_mask(&self) -> Vec<bool> {
        let mut mask = vec![false; self.params.len()];
        if self.spec.family == Family::Attractor {
            for id in self.body.ids() {
                mask[id.index()] = true;
            }
        }
        mask
    }

    pub fn project(&mut self) {
        if self.spec.family == Family::Attractor {
            super::clamp_gain(&mut self.params, self.body.final_gain, self.spec.gamma_max);
        }
    }

    pub fn map(&self) -> GridMap<'_, T> {
        GridMap {
            body: &self.body,
            store: &self.params,
            cfg: self.spec.block_config(),
        }
    }

    /// Step-zero state: the learned rows broadcast over batch and positions.
    pub fn initial_state(&self, batch: usize) -> GridState<T> {
        let (d, l) = (self.spec.d, self.spec.max_len);
        let tile = |id: Option<ParamId>| {
            let row = id.map(|i| self.params.value(i).data().to_vec()).unwrap_or_else(|| vec![T::zero(); d]);
            let data = row.iter().copied().cycle().take(batch * l * d).collect();
            Tensor::new(vec![batch, l, d], data).expect("tiled state")
        };
        GridState {
            y: tile(self.init.map(|p| p.0)),
            z: tile(self.init.map(|p| p.1)),
        }
    }

    fn embed_inputs(&self, tape: &mut Tape<T>, batch: &TaskBatch) -> Result<Var> {
        if batch.len != self.spec.max_len {
            return Err(Error::contract(format!(
                "grid rows have {} cells, model expects {}",
                batch.len, self.spec.max_len
            )));
        }
        let prev = tape.tag();
        tape.set_tag(Tag::Embed);
        let e = tape.param(&self.params, self.embed);
        let x = tape.embedding(e, &batch.inputs, &[batch.batch, batch.len])?;
        let p = tape.param(&self.params, self.pos);
        let ids: Vec<usize> = (0..batch.batch * batch.len).map(|i| i % batch.len).collect();
        let px = tape.embedding(p, &ids, &[batch.batch, batch.len])?;
        let out = tape.add(x, px);
        tape.set_tag(prev);
        out
    }

    fn decode(&self, tape: &mut Tape<T>, y: Var) -> Result<Var> {
        let prev = tape.tag();
        tape.set_tag(Tag::Head);
        let w = tape.param(&self.params, self.head);
        let out = tape.matmul_nt(y, w);
        tape.set_tag(prev);
        out
    }

    /// Solves one supervision step without gradients.
    pub fn solve_step(&self, batch: &TaskBatch, state: &GridState<T>, override_t: Option<usize>) -> Result<SolverResult<T>> {
        let mut tape = Tape::new();
        let x = self.embed_inputs(&mut tape, batch)?;
        let zeros = tape.constant(Tensor::zeros(tape.shape(x)));
        let inj = tape.concat0(x, zeros)?;
        let cfg = match override_t {
            Some(t) => self.spec.solver.with_budget(t),
            None => self.spec.solver,
        };
        root_find(&self.map(), tape.value(inj), &state.stacked(), &cfg, false)
    }

    /// Loss, gradients and next state of one supervision step.
    pub fn supervised_step(&self, batch: &TaskBatch, state: &GridState<T>) -> Result<GridStepOutput<T>> {
        let targets = batch.loss_targets();
        let mut tape_a = Tape::new();
        let x = self.embed_inputs(&mut tape_a, batch)?;

        if self.spec.family == Family::Plain {
            tape_a.set_tag(Tag::Backbone);
            let h = self.body.forward(&mut tape_a, &self.params, &self.spec.block_config(), x)?;
            let logits = self.decode(&mut tape_a, h)?;
            tape_a.set_tag(Tag::Loss);
            let loss = tape_a.cross_entropy(logits, &targets, IGNORE)?;
            let g = tape_a.backward(loss)?;
            return Ok(GridStepOutput {
                grads: tape_a.param_grads(&g),
                stats: StepStats {
                    loss: tape_a.value(loss).data()[0].f64(),
                    converged: true,
                    act_peak: tape_a.activation_count(),
                    flops_backbone: 3 * tape_a.flops(),
                    ..Default::default()
                },
                next: state.clone(),
                logits: tape_a.value(logits).clone(),
            });
        }

        let zeros = tape_a.constant(Tensor::zeros(tape_a.shape(x)));
        let inj = tape_a.concat0(x, zeros)?;
        let inj_v = tape_a.value(inj).clone();
        let s_init = state.stacked();
        let map = self.map();
        let res = root_find(&map, &inj_v, &s_init, &self.spec.solver, false)?;

        let b = batch.batch;
        let mut tape_b = Tape::new();
        let s = tape_b.leaf(res.y_star.clone(), true);
        let y = tape_b.narrow0(s, 0, b)?;
        let logits = self.decode(&mut tape_b, y)?;
        tape_b.set_tag(Tag::Loss);
        let loss = tape_b.cross_entropy(logits, &targets, IGNORE)?;
        let gb = tape_b.backward(loss)?;
        let v = gb.get_or_zeros(s, res.y_star.shape());

        let ig = implicit_backward(&map, &self.spec.backward, &v, &res.y_star, &inj_v)?;
        let ga = tape_a.backward_from(inj, &ig.d_y0)?;
        let mut grads = tape_b.param_grads(&gb);
        grads.extend(ig.params);
        grads.extend(tape_a.param_grads(&ga));

        let dist = s_init.dist(&res.y_star) / res.y_star.norm().max(RESIDUAL_FLOOR);
        Ok(GridStepOutput {
            grads,
            stats: StepStats {
                loss: tape_b.value(loss).data()[0].f64(),
                iters_fwd: res.iterations,
                iters_bwd: match self.spec.backward {
                    crate::implicit::BackwardMode::OneStep => 1,
                    crate::implicit::BackwardMode::Phantom { k, .. } => k,
                    crate::implicit::BackwardMode::FullIft(_) => ig.iterations,
                },
                converged: res.converged,
                internalization_dist: Some(dist),
                act_peak: tape_a.activation_count() + tape_b.activation_count() + ig.activations,
                flops_backbone: 3 * (tape_a.flops() + tape_b.flops()),
                flops_cell: res.map_flops + res.mix_flops + ig.flops,
            },
            next: GridState::split(&res.y_star),
            logits: tape_b.value(logits).clone(),
        })
    }

    /// Grid logits after `sup_steps` supervision steps from step zero.
    pub fn predict(&self, batch: &TaskBatch, sup_steps: usize, override_t: Option<usize>) -> Result<Tensor<T>> {
        let mut tape = Tape::new();
        let y = if self.spec.family == Family::Plain {
            let x = self.embed_inputs(&mut tape, batch)?;
            let h = self.body.forward(&mut tape, &self.params, &self.spec.block_config(), x)?;
            tape.value(h).clone()
        } else {
            let mut state = self.initial_state(batch.batch);
            for _ in 0..sup_steps.max(1) {
                let res = self.solve_step(batch, &state, override_t)?;
                state = GridState::split(&res.y_star);
            }
            state.y
        };
        let yv = tape.constant(y);
        let logits = self.decode(&mut tape, yv)?;
        Ok(tape.value(logits).clone())
    }

    /// Cell accuracy over blanks and exact-grid accuracy, in batches of
    /// `chunk` puzzles.
    pub fn evaluate(&self, batch: &TaskBatch, sup_steps: usize, chunk: usize) -> Result<(f64, f64)> {
        let (mut cells, mut grids, mut n_cells) = (0.0, 0.0, 0usize);
        let mut start = 0;
        while start < batch.batch {
            let n = chunk.max(1).min(batch.batch - start);
            let part = batch.rows(start, n);
            let logits = self.predict(&part, sup_steps, None)?;
            let (c, g) = masked_accuracy(&logits, &part);
            let blanks = part.mask.iter().filter(|&&m| m).count();
            cells += c * blanks as f64;
            n_cells += blanks;
            grids += g * n as f64;
            start += n;
        }
        Ok((cells / n_cells.max(1) as f64, grids / batch.batch.max(1) as f64))
    }

    pub fn save(&self, path: &std::path::Path) -> Result<()> {
        let mut bytes = crate::config::spec_header(&self.spec).into_bytes();
        bytes.push(b'\n');
        bytes.extend(Checkpoint::from_params(&self.params).to_bytes());
        std::fs::write(path, bytes).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &std::path::Path) -> Result<Self> {
        let (spec, ck) = super::read_checkpoint(path)?;
        let mut model = GridModel::new(spec)?;
        ck.restore(&mut model.params)?;
        Ok(model)
    }
}
