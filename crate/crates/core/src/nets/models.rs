//! The diffusion network `D` and the value network `V`.

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::params::{Block, BoundParams, Init, LayoutBuilder, ParamSet};
use super::tape::{ConvGeometry, Tape, Tensor, Var};
use crate::error::{ensure_same_len, Result};

/// Sinusoidal features of a (possibly fractional) diffusion step.
pub fn step_embedding(t: f64, width: usize) -> Vec<f64> {
    let half = width / 2;
    let mut out = Vec::with_capacity(width);
    for i in 0..half {
        let freq = if half > 1 {
            (-(1000f64.ln()) * i as f64 / (half - 1) as f64).exp()
        } else {
            1.0
        };
        out.push((t * freq).sin());
        out.push((t * freq).cos());
    }
    if width % 2 == 1 {
        out.push(t / 100.0);
    }
    out
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct DiffusionNetConfig {
    pub channels: usize,
    pub blocks: usize,
    pub kernel: usize,
    pub embed_dim: usize,
}

impl Default for DiffusionNetConfig {
    fn default() -> Self {
        DiffusionNetConfig {
            channels: 16,
            blocks: 4,
            kernel: 3,
            embed_dim: 16,
        }
    }
}

struct ResidualIdx {
    dil_w: usize,
    dil_b: usize,
    emb_w: usize,
    emb_b: usize,
    mix_w: usize,
    mix_b: usize,
}

/// Dilated residual conv stack over `[x_t; y]`, conditioned on the step.
///
/// Block `i` uses dilation `2^i`. The output projection starts at zero so a
/// fresh network predicts no noise.
pub struct DiffusionNet {
    cfg: DiffusionNetConfig,
    in_w: usize,
    in_b: usize,
    res: Vec<ResidualIdx>,
    out1_w: usize,
    out1_b: usize,
    out2_w: usize,
    out2_b: usize,
    layout: Vec<(String, usize, usize, Init)>,
}

impl DiffusionNet {
    pub fn new(cfg: DiffusionNetConfig) -> Self {
        let c = cfg.channels;
        let mut lb = Recorder::default();
        let in_w = lb.block("input.w", c, 2, Init::FanIn(2));
        let in_b = lb.block("input.b", c, 1, Init::Zero);
        let res = (0..cfg.blocks)
            .map(|i| ResidualIdx {
                dil_w: lb.block(
                    format!("res{i}.dilated.w"),
                    c,
                    c * cfg.kernel,
                    Init::FanIn(c * cfg.kernel),
                ),
                dil_b: lb.block(format!("res{i}.dilated.b"), c, 1, Init::Zero),
                emb_w: lb.block(format!("res{i}.step.w"), c, cfg.embed_dim, Init::FanIn(cfg.embed_dim)),
                emb_b: lb.block(format!("res{i}.step.b"), c, 1, Init::Zero),
                mix_w: lb.block(format!("res{i}.mix.w"), c, c, Init::FanIn(c)),
                mix_b: lb.block(format!("res{i}.mix.b"), c, 1, Init::Zero),
            })
            .collect();
        let out1_w = lb.block("out1.w", c, c, Init::FanIn(c));
        let out1_b = lb.block("out1.b", c, 1, Init::Zero);
        let out2_w = lb.block("out2.w", 1, c, Init::Zero);
        let out2_b = lb.block("out2.b", 1, 1, Init::Zero);
        DiffusionNet {
            cfg,
            in_w,
            in_b,
            res,
            out1_w,
            out1_b,
            out2_w,
            out2_b,
            layout: lb.blocks,
        }
    }

    pub fn config(&self) -> &DiffusionNetConfig {
        &self.cfg
    }

    pub fn init(&self, rng: &mut impl Rng) -> ParamSet {
        build_layout(&self.layout, rng)
    }

    pub fn layout(&self) -> Vec<Block> {
        layout_of(&self.layout)
    }

    /// Records `eps_hat = D(x_t, y, t)` on `tape`. `x_t` and `y` are `1 x L`.
    pub fn forward(&self, tape: &mut Tape, p: &BoundParams, x_t: Var, y: Var, t: f64) -> Result<Var> {
        ensure_same_len("diffusion net input", tape.value(x_t).cols, tape.value(y).cols)?;
        let emb = tape.constant(Tensor::column(step_embedding(t, self.cfg.embed_dim)));
        let input = tape.concat_rows(&[x_t, y])?;
        let h = tape.conv(input, p.var(self.in_w), p.var(self.in_b), ConvGeometry::pointwise())?;
        let mut h = tape.relu(h);
        for (i, r) in self.res.iter().enumerate() {
            let geo = ConvGeometry::same(self.cfg.kernel, 1 << i);
            let u = tape.conv(h, p.var(r.dil_w), p.var(r.dil_b), geo)?;
            let s = tape.conv(emb, p.var(r.emb_w), p.var(r.emb_b), ConvGeometry::pointwise())?;
            let u = tape.add_column(u, s)?;
            let u = tape.relu(u);
            let v = tape.conv(u, p.var(r.mix_w), p.var(r.mix_b), ConvGeometry::pointwise())?;
            h = tape.add(h, v)?;
        }
        let o = tape.conv(h, p.var(self.out1_w), p.var(self.out1_b), ConvGeometry::pointwise())?;
        let o = tape.relu(o);
        tape.conv(o, p.var(self.out2_w), p.var(self.out2_b), ConvGeometry::pointwise())
    }

    /// Evaluates the network without recording gradients.
    pub fn predict(&self, params: &ParamSet, x_t: &[f64], y: &[f64], t: f64) -> Result<Vec<f64>> {
        let mut tape = Tape::new();
        let p = params.load(&mut tape, false);
        let xv = tape.constant(Tensor::row(x_t.to_vec()));
        let yv = tape.constant(Tensor::row(y.to_vec()));
        let out = self.forward(&mut tape, &p, xv, yv, t)?;
        Ok(tape.value(out).data.clone())
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ValueNetConfig {
    pub channels: usize,
    pub kernel: usize,
    pub stride: usize,
    pub hidden: usize,
    /// Feed the step embedding into the MLP head.
    pub step_input: bool,
    pub embed_dim: usize,
}

impl Default for ValueNetConfig {
    fn default() -> Self {
        ValueNetConfig {
            channels: 16,
            kernel: 5,
            stride: 2,
            hidden: 32,
            step_input: false,
            embed_dim: 16,
        }
    }
}

/// Strided conv encoder over `[x_t; eps; x0]`, mean-pooled over time, then a
/// four-layer ReLU MLP to a scalar score. The last layer starts at zero.
pub struct ValueNet {
    cfg: ValueNetConfig,
    conv: [(usize, usize); 2],
    mlp: [(usize, usize); 4],
    layout: Vec<(String, usize, usize, Init)>,
}

impl ValueNet {
    pub fn new(cfg: ValueNetConfig) -> Self {
        let (c, k, h) = (cfg.channels, cfg.kernel, cfg.hidden);
        let mut lb = Recorder::default();
        let conv = [
            (
                lb.block("enc0.w", c, 3 * k, Init::FanIn(3 * k)),
                lb.block("enc0.b", c, 1, Init::Zero),
            ),
            (
                lb.block("enc1.w", c, c * k, Init::FanIn(c * k)),
                lb.block("enc1.b", c, 1, Init::Zero),
            ),
        ];
        let head_in = c + if cfg.step_input { cfg.embed_dim } else { 0 };
        let mlp = [
            (
                lb.block("mlp0.w", h, head_in, Init::FanIn(head_in)),
                lb.block("mlp0.b", h, 1, Init::Zero),
            ),
            (
                lb.block("mlp1.w", h, h, Init::FanIn(h)),
                lb.block("mlp1.b", h, 1, Init::Zero),
            ),
            (
                lb.block("mlp2.w", h, h, Init::FanIn(h)),
                lb.block("mlp2.b", h, 1, Init::Zero),
            ),
            (
                lb.block("mlp3.w", 1, h, Init::Zero),
                lb.block("mlp3.b", 1, 1, Init::Zero),
            ),
        ];
        ValueNet {
            cfg,
            conv,
            mlp,
            layout: lb.blocks,
        }
    }

    pub fn config(&self) -> &ValueNetConfig {
        &self.cfg
    }

    pub fn init(&self, rng: &mut impl Rng) -> ParamSet {
        build_layout(&self.layout, rng)
    }

    pub fn layout(&self) -> Vec<Block> {
        layout_of(&self.layout)
    }

    fn geometry(&self) -> ConvGeometry {
        ConvGeometry {
            kernel: self.cfg.kernel,
            dilation: 1,
            stride: self.cfg.stride,
            pad: (self.cfg.kernel - 1) / 2,
        }
    }

    /// Records the scalar `V(x_t, eps, x0)` on `tape`. `t` is consulted only
    /// when the config enables the step input.
    pub fn forward(&self, tape: &mut Tape, p: &BoundParams, x_t: Var, eps: Var, x0: Var, t: f64) -> Result<Var> {
        let len = tape.value(x_t).cols;
        ensure_same_len("value net action", len, tape.value(eps).cols)?;
        ensure_same_len("value net reference", len, tape.value(x0).cols)?;
        let geo = self.geometry();
        let mut h = tape.concat_rows(&[x_t, eps, x0])?;
        for &(w, b) in &self.conv {
            let z = tape.conv(h, p.var(w), p.var(b), geo)?;
            h = tape.relu(z);
        }
        let mut z = tape.mean_cols(h);
        if self.cfg.step_input {
            let emb = tape.constant(Tensor::column(step_embedding(t, self.cfg.embed_dim)));
            z = tape.concat_rows(&[z, emb])?;
        }
        for (i, &(w, b)) in self.mlp.iter().enumerate() {
            z = tape.conv(z, p.var(w), p.var(b), ConvGeometry::pointwise())?;
            if i + 1 < self.mlp.len() {
                z = tape.relu(z);
            }
        }
        Ok(z)
    }

    pub fn score(&self, params: &ParamSet, x_t: &[f64], eps: &[f64], x0: &[f64], t: f64) -> Result<f64> {
        let mut tape = Tape::new();
        let p = params.load(&mut tape, false);
        let xv = tape.constant(Tensor::row(x_t.to_vec()));
        let ev = tape.constant(Tensor::row(eps.to_vec()));
        let rv = tape.constant(Tensor::row(x0.to_vec()));
        let out = self.forward(&mut tape, &p, xv, ev, rv, t)?;
        Ok(tape.scalar(out))
    }
}

#[derive(Default)]
struct Recorder {
    blocks: Vec<(String, usize, usize, Init)>,
}

impl Recorder {
    fn block(&mut self, name: impl Into<String>, rows: usize, cols: usize, init: Init) -> usize {
        self.blocks.push((name.into(), rows, cols, init));
        self.blocks.len() - 1
    }
}

fn layout_of(blocks: &[(String, usize, usize, Init)]) -> Vec<Block> {
    let mut offset = 0;
    blocks
        .iter()
        .map(|(name, rows, cols, _)| {
            let b = Block {
                name: name.clone(),
                rows: *rows,
                cols: *cols,
                offset,
            };
            offset += rows * cols;
            b
        })
        .collect()
}

fn build_layout(blocks: &[(String, usize, usize, Init)], rng: &mut impl Rng) -> ParamSet {
    let mut lb = LayoutBuilder::new();
    for (name, rows, cols, init) in blocks {
        lb.block(name.clone(), *rows, *cols, *init);
    }
    lb.build(rng)
}
