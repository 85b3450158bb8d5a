//! Transformer blocks, the backbone stack and the weight-tied refinement cell.

use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::tensor::{ParamId, ParamStore, Real, Tape, Tensor, Var};

pub const RMS_EPS: f64 = 1e-5;
pub const ROPE_BASE: f64 = 10000.0;

/// Shape and masking settings shared by every block of a model.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct BlockConfig {
    pub d: usize,
    pub d_ff: usize,
    pub heads: usize,
    pub max_len: usize,
    pub causal: bool,
}

impl BlockConfig {
    pub fn head_dim(&self) -> usize {
        self.d / self.heads
    }

    pub fn validate(&self) -> Result<()> {
        if self.d == 0 || self.heads == 0 || !self.d.is_multiple_of(self.heads) {
            return Err(Error::contract(format!("d={} not divisible by heads={}", self.d, self.heads)));
        }
        if !self.head_dim().is_multiple_of(2) {
            return Err(Error::contract(format!("head dim {} must be even for rotary encoding", self.head_dim())));
        }
        if self.d_ff == 0 || self.max_len == 0 {
            return Err(Error::contract("d_ff and max_len must be positive"));
        }
        Ok(())
    }

    /// Trainable scalars in one block.
    pub fn block_params(&self) -> usize {
        4 * self.d * self.d + 2 * self.d * self.d_ff + 2 * self.d + 2 * self.d
    }
}

/// How the proposal enters the refinement cell.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Injection {
    InitialOnly,
    Concat,
    Additive,
}

pub(crate) fn normal_tensor<T: Real>(rng: &mut impl Rng, shape: &[usize], std: f64) -> Tensor<T> {
    let n: usize = shape.iter().product();
    if std == 0.0 {
        return Tensor::zeros(shape);
    }
    let dist = Normal::new(0.0, std).expect("finite std");
    let data = (0..n).map(|_| T::of(dist.sample(rng))).collect();
    Tensor::new(shape.to_vec(), data).expect("shape matches data")
}

/// Parameter handles of one pre-norm transformer block.
#[derive(Clone, Debug)]
pub struct BlockParams {
    pub wq: ParamId,
    pub wk: ParamId,
    pub wv: ParamId,
    pub wo: ParamId,
    pub q_gain: ParamId,
    pub k_gain: ParamId,
    pub w1: ParamId,
    pub w2: ParamId,
    pub norm1: ParamId,
    pub norm2: ParamId,
}

impl BlockParams {
    /// Input projections get std `1/sqrt(fan_in)`; the two output
    /// projections get `out_std / sqrt(fan_in)` (zero gives an identity block).
    pub fn init<T: Real>(store: &mut ParamStore<T>, prefix: &str, cfg: &BlockConfig, rng: &mut impl Rng, out_std: f64) -> Self {
        let (d, f, h, hd) = (cfg.d, cfg.d_ff, cfg.heads, cfg.head_dim());
        let s_in = 1.0 / (d as f64).sqrt();
        let mut add = |name: &str, t: Tensor<T>| store.add(format!("{prefix}.{name}"), t);
        BlockParams {
            wq: add("attn.wq", normal_tensor(rng, &[d, d], s_in)),
            wk: add("attn.wk", normal_tensor(rng, &[d, d], s_in)),
            wv: add("attn.wv", normal_tensor(rng, &[d, d], s_in)),
            wo: add("attn.wo", normal_tensor(rng, &[d, d], out_std * s_in)),
            q_gain: add("attn.q_gain", Tensor::ones(&[h, hd])),
            k_gain: add("attn.k_gain", Tensor::ones(&[h, hd])),
            w1: add("mlp.w1", normal_tensor(rng, &[d, f], s_in)),
            w2: add("mlp.w2", normal_tensor(rng, &[f, d], out_std / (f as f64).sqrt())),
            norm1: add("norm1", Tensor::ones(&[d])),
            norm2: add("norm2", Tensor::ones(&[d])),
        }
    }

    pub fn ids(&self) -> [ParamId; 10] {
        [
            self.wq, self.wk, self.wv, self.wo, self.q_gain, self.k_gain, self.w1, self.w2, self.norm1, self.norm2,
        ]
    }
}

/// `h1 = h + Attn(rms(h))`, `out = h1 + MLP(rms(h1))` over `[B, L, d]`.
pub fn transformer_block<T: Real>(
    tape: &mut Tape<T>,
    store: &ParamStore<T>,
    p: &BlockParams,
    cfg: &BlockConfig,
    h: Var,
) -> Result<Var> {
    let s = tape.shape(h).to_vec();
    if s.len() != 3 || s[2] != cfg.d {
        return Err(Error::contract(format!("block input must be [B, L, {}], got {s:?}", cfg.d)));
    }
    let (b, l) = (s[0], s[1]);
    if l > cfg.max_len {
        return Err(Error::contract(format!("sequence length {l} exceeds max_len {}", cfg.max_len)));
    }
    let heads = [b, l, cfg.heads, cfg.head_dim()];

    let g1 = tape.param(store, p.norm1);
    let x = tape.rms_norm(h, Some(g1), RMS_EPS)?;
    let mut qkv = Vec::with_capacity(3);
    for (w, gain) in [(p.wq, Some(p.q_gain)), (p.wk, Some(p.k_gain)), (p.wv, None)] {
        let wv = tape.param(store, w);
        let y = tape.matmul(x, wv)?;
        let mut y = tape.reshape(y, &heads)?;
        if let Some(g) = gain {
            let gv = tape.param(store, g);
            y = tape.rms_norm(y, Some(gv), RMS_EPS)?;
            y = tape.rope(y, ROPE_BASE)?;
        }
        qkv.push(y);
    }
    let a = tape.attention(qkv[0], qkv[1], qkv[2], cfg.causal)?;
    let a = tape.reshape(a, &s)?;
    let wo = tape.param(store, p.wo);
    let a = tape.matmul(a, wo)?;
    let h1 = tape.add(h, a)?;

    let g2 = tape.param(store, p.norm2);
    let x = tape.rms_norm(h1, Some(g2), RMS_EPS)?;
    let w1 = tape.param(store, p.w1);
    let u = tape.matmul(x, w1)?;
    let u = tape.relu_sq(u);
    let w2 = tape.param(store, p.w2);
    let m = tape.matmul(u, w2)?;
    tape.add(h1, m)
}

/// A stack of blocks followed by a final rms norm.
#[derive(Clone, Debug)]
pub struct Stack {
    pub blocks: Vec<BlockParams>,
    pub final_gain: ParamId,
}

impl Stack {
    pub fn init<T: Real>(
        store: &mut ParamStore<T>,
        prefix: &str,
        cfg: &BlockConfig,
        depth: usize,
        rng: &mut impl Rng,
        out_std: f64,
    ) -> Self {
        let blocks = (0..depth)
            .map(|i| BlockParams::init(store, &format!("{prefix}.block{i}"), cfg, rng, out_std))
            .collect();
        let final_gain = store.add(format!("{prefix}.norm"), Tensor::ones(&[cfg.d]));
        Stack { blocks, final_gain }
    }

    pub fn forward<T: Real>(&self, tape: &mut Tape<T>, store: &ParamStore<T>, cfg: &BlockConfig, x: Var) -> Result<Var> {
        let mut h = x;
        for b in &self.blocks {
            h = transformer_block(tape, store, b, cfg, h)?;
        }
        let g = tape.param(store, self.final_gain);
        tape.rms_norm(h, Some(g), RMS_EPS)
    }

    pub fn ids(&self) -> Vec<ParamId> {
        let mut v: Vec<ParamId> = self.blocks.iter().flat_map(|b| b.ids()).collect();
        v.push(self.final_gain);
        v
    }
}

/// Refinement map `T(y, y0)`: inject the proposal, run the tied stack.
#[derive(Clone, Debug)]
pub struct Cell {
    pub injection: Injection,
    pub stack: Stack,
    /// `[2d, d]` projection used by [`Injection::Concat`], initialized to `[I; I]`.
    pub concat_proj: Option<ParamId>,
}

impl Cell {
    pub fn init<T: Real>(
        store: &mut ParamStore<T>,
        prefix: &str,
        cfg: &BlockConfig,
        depth: usize,
        injection: Injection,
        rng: &mut impl Rng,
        out_std: f64,
    ) -> Self {
        let stack = Stack::init(store, prefix, cfg, depth, rng, out_std);
        let concat_proj = (injection == Injection::Concat).then(|| {
            let d = cfg.d;
            let mut w = Tensor::zeros(&[2 * d, d]);
            for i in 0..d {
                w.data_mut()[i * d + i] = T::one();
                w.data_mut()[(d + i) * d + i] = T::one();
            }
            store.add(format!("{prefix}.inject"), w)
        });
        Cell {
            injection,
            stack,
            concat_proj,
        }
    }

    /// Records one cell application on `tape`.
    pub fn apply<T: Real>(
        &self,
        tape: &mut Tape<T>,
        store: &ParamStore<T>,
        cfg: &BlockConfig,
        y: Var,
        y0: Var,
    ) -> Result<Var> {
        if tape.shape(y) != tape.shape(y0) {
            return Err(Error::contract(format!(
                "cell state {:?} and proposal {:?} differ in shape",
                tape.shape(y),
                tape.shape(y0)
            )));
        }
        let input = match self.injection {
            Injection::InitialOnly => y,
            Injection::Additive => tape.add(y, y0)?,
            Injection::Concat => {
                let w = self
                    .concat_proj
                    .ok_or_else(|| Error::contract("concat injection without projection"))?;
                let cat = tape.concat_last(y, y0)?;
                let wv = tape.param(store, w);
                tape.matmul(cat, wv)?
            }
        };
        self.stack.forward(tape, store, cfg, input)
    }

    pub fn ids(&self) -> Vec<ParamId> {
        let mut v = self.stack.ids();
        v.extend(self.concat_proj);
        v
    }
}
