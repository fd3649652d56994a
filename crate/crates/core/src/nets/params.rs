use rand::Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::tape::{Tape, Tensor, Var};
use crate::error::{Error, Result};

/// A named `rows x cols` slice of a [`ParamSet`].
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Block {
    pub name: String,
    pub rows: usize,
    pub cols: usize,
    pub offset: usize,
}

impl Block {
    pub fn len(&self) -> usize {
        self.rows * self.cols
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// How a block is initialised.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Init {
    Zero,
    /// Uniform in `±1/sqrt(fan_in)`.
    FanIn(usize),
}

/// Flat parameter vector with its block layout and a gradient accumulator of
/// the same shape.
///
/// Values are always representable in 32 bits, so checkpoints stored as
/// `f32` round-trip exactly.
#[derive(Clone, Debug, PartialEq)]
pub struct ParamSet {
    pub values: Vec<f64>,
    pub grads: Vec<f64>,
    layout: Vec<Block>,
}

pub(crate) struct LayoutBuilder {
    blocks: Vec<(Block, Init)>,
    total: usize,
}

impl LayoutBuilder {
    pub(crate) fn new() -> Self {
        LayoutBuilder {
            blocks: Vec::new(),
            total: 0,
        }
    }

    pub(crate) fn block(&mut self, name: impl Into<String>, rows: usize, cols: usize, init: Init) -> usize {
        let block = Block {
            name: name.into(),
            rows,
            cols,
            offset: self.total,
        };
        self.total += block.len();
        self.blocks.push((block, init));
        self.blocks.len() - 1
    }

    pub(crate) fn build(self, rng: &mut impl Rng) -> ParamSet {
        let mut values = vec![0.0; self.total];
        let mut layout = Vec::with_capacity(self.blocks.len());
        for (block, init) in self.blocks {
            if let Init::FanIn(fan_in) = init {
                let bound = 1.0 / (fan_in as f64).sqrt();
                for v in &mut values[block.offset..block.offset + block.len()] {
                    *v = snap(rng.random_range(-bound..bound));
                }
            }
            layout.push(block);
        }
        let grads = vec![0.0; values.len()];
        ParamSet { values, grads, layout }
    }
}

/// Rounds to the nearest `f32`.
pub fn snap(v: f64) -> f64 {
    v as f32 as f64
}

impl ParamSet {
    pub fn from_parts(layout: Vec<Block>, values: Vec<f64>) -> Result<Self> {
        let expected: usize = layout.iter().map(Block::len).sum();
        let mut offset = 0;
        for b in &layout {
            if b.offset != offset {
                return Err(Error::shape(format!(
                    "block {} starts at {} not {offset}",
                    b.name, b.offset
                )));
            }
            offset += b.len();
        }
        if values.len() != expected {
            return Err(Error::shape(format!(
                "{} parameter values for a manifest of {expected}",
                values.len()
            )));
        }
        let grads = vec![0.0; values.len()];
        Ok(ParamSet { values, grads, layout })
    }

    pub fn layout(&self) -> &[Block] {
        &self.layout
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn block(&self, idx: usize) -> &[f64] {
        let b = &self.layout[idx];
        &self.values[b.offset..b.offset + b.len()]
    }

    pub fn zero_grad(&mut self) {
        self.grads.iter_mut().for_each(|g| *g = 0.0);
    }

    /// SHA-256 over the little-endian bytes of every value.
    pub fn fingerprint(&self) -> String {
        let mut h = Sha256::new();
        for v in &self.values {
            h.update(v.to_le_bytes());
        }
        format!("{:x}", h.finalize())
    }

    /// Records every block on `tape`: as differentiable leaves when
    /// `trainable`, as constants otherwise.
    pub fn load(&self, tape: &mut Tape, trainable: bool) -> BoundParams {
        let vars = self
            .layout
            .iter()
            .map(|b| {
                let t = Tensor::new(b.rows, b.cols, self.values[b.offset..b.offset + b.len()].to_vec());
                if trainable {
                    tape.leaf(t)
                } else {
                    tape.constant(t)
                }
            })
            .collect();
        BoundParams { vars, trainable }
    }

    /// Adds `scale` times the gradients of `bound` into the accumulator.
    pub fn accumulate(&mut self, grads: &super::tape::Gradients, bound: &BoundParams, scale: f64) {
        let flat = self.flat_gradient(grads, bound);
        self.add_grad(&flat, scale);
    }

    /// The gradients of `bound` laid out like `values`; zero where the tape
    /// recorded none.
    pub fn flat_gradient(&self, grads: &super::tape::Gradients, bound: &BoundParams) -> Vec<f64> {
        let mut out = vec![0.0; self.values.len()];
        if !bound.trainable {
            return out;
        }
        for (b, v) in self.layout.iter().zip(&bound.vars) {
            if let Some(g) = grads.get(*v) {
                out[b.offset..b.offset + b.len()].copy_from_slice(&g.data);
            }
        }
        out
    }

    /// `grads += scale * g`.
    pub fn add_grad(&mut self, g: &[f64], scale: f64) {
        for (dst, src) in self.grads.iter_mut().zip(g) {
            *dst += scale * src;
        }
    }
}

/// The per-block tape handles of one [`ParamSet`].
#[derive(Clone, Debug)]
pub struct BoundParams {
    vars: Vec<Var>,
    trainable: bool,
}

impl BoundParams {
    pub fn var(&self, block: usize) -> Var {
        self.vars[block]
    }

    pub fn is_trainable(&self) -> bool {
        self.trainable
    }
}
