//! The causal action-generation network.
//!
//! Tokens are the concatenation of history actions and noisy target actions.
//! Each block runs masked self-attention over actions (CTA), cross-attention
//! from actions to encoded observations carrying the denoising timestep
//! (VACA), and an MLP; every sub-layer is residual followed by layer norm.
//!
//! The denoising timestep never touches CTA, and history rows always use the
//! timestep-0 embedding in VACA. History features are therefore a pure
//! function of the history actions, their temporal indices and the
//! observation paired with their chunk, which is what makes their keys and
//! values cacheable across timesteps and AR steps.

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{shape_err, CdpError, Result};
use crate::masking::{build_training_mask, AttentionMask, PolicyGeometry};
use crate::schedule::ScheduleConfig;
use crate::tape::{Tape, Var};
use crate::tensor::{Real, Tensor};

pub const LN_EPS: f64 = 1e-5;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub action_dim: usize,
    pub obs_dim: usize,
    pub d_model: usize,
    pub n_heads: usize,
    pub n_blocks: usize,
    pub d_ff: usize,
    pub temporal_period: usize,
    pub n_obs_tokens: usize,
    pub geom: PolicyGeometry,
    pub schedule: ScheduleConfig,
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        self.geom.validate()?;
        let cfg = |m: String| Err(CdpError::Config(m));
        if self.action_dim == 0 || self.obs_dim == 0 || self.d_model == 0 || self.d_ff == 0 {
            return cfg("action_dim, obs_dim, d_model and d_ff must be positive".into());
        }
        if self.n_heads == 0 || self.d_model % self.n_heads != 0 {
            return cfg(format!(
                "n_heads {} must divide d_model {}",
                self.n_heads, self.d_model
            ));
        }
        if self.temporal_period < self.geom.total_len() {
            return cfg(format!(
                "temporal_period {} must be >= history_len + target_len = {}",
                self.temporal_period,
                self.geom.total_len()
            ));
        }
        if self.n_obs_tokens == 0 {
            return cfg("n_obs_tokens must be positive".into());
        }
        self.schedule.build()?;
        Ok(())
    }

    pub fn d_head(&self) -> usize {
        self.d_model / self.n_heads
    }

    /// Default cyclic period: four windows.
    pub fn default_period(geom: &PolicyGeometry) -> usize {
        4 * geom.total_len()
    }
}

#[derive(Clone, Copy, Debug)]
struct LinearIdx {
    w: usize,
    b: usize,
}

#[derive(Clone, Copy, Debug)]
struct NormIdx {
    gain: usize,
    bias: usize,
}

#[derive(Clone, Debug)]
struct BlockLayout {
    q: LinearIdx,
    k: LinearIdx,
    v: LinearIdx,
    o: LinearIdx,
    ln1: NormIdx,
    xq: LinearIdx,
    xk: LinearIdx,
    xv: LinearIdx,
    xo: LinearIdx,
    ln2: NormIdx,
    fc1: LinearIdx,
    fc2: LinearIdx,
    ln3: NormIdx,
}

#[derive(Clone, Debug)]
struct Layout {
    action: LinearIdx,
    temporal: usize,
    enc1: LinearIdx,
    enc2: LinearIdx,
    time: LinearIdx,
    blocks: Vec<BlockLayout>,
    head: LinearIdx,
}

#[derive(Clone, Copy)]
enum Init {
    /// Zero-mean normal with this std.
    Normal(f64),
    Zeros,
    Ones,
    /// Cyclic sinusoids, see [`cyclic_table`].
    Cyclic,
}

struct LayoutBuilder {
    specs: Vec<(String, Vec<usize>, Init)>,
}

impl LayoutBuilder {
    fn push(&mut self, name: String, shape: Vec<usize>, init: Init) -> usize {
        self.specs.push((name, shape, init));
        self.specs.len() - 1
    }

    fn linear(&mut self, name: &str, i: usize, o: usize) -> LinearIdx {
        LinearIdx {
            w: self.push(format!("{name}.weight"), vec![i, o], Init::Normal(1.0 / (i as f64).sqrt())),
            b: self.push(format!("{name}.bias"), vec![o], Init::Zeros),
        }
    }

    fn norm(&mut self, name: &str, d: usize) -> NormIdx {
        NormIdx {
            gain: self.push(format!("{name}.gain"), vec![d], Init::Ones),
            bias: self.push(format!("{name}.bias"), vec![d], Init::Zeros),
        }
    }
}

fn build_layout(cfg: &ModelConfig) -> (Layout, Vec<(String, Vec<usize>, Init)>) {
    let d = cfg.d_model;
    let mut b = LayoutBuilder { specs: Vec::new() };
    let action = b.linear("action_embed", cfg.action_dim, d);
    let temporal = b.push("temporal_embed".into(), vec![cfg.temporal_period, d], Init::Cyclic);
    let enc1 = b.linear("obs_encoder.fc1", cfg.obs_dim, cfg.d_ff);
    let enc2 = b.linear("obs_encoder.fc2", cfg.d_ff, cfg.n_obs_tokens * d);
    let time = b.linear("timestep_proj", d, d);
    let blocks = (0..cfg.n_blocks)
        .map(|p| {
            let n = |s: &str| format!("blocks.{p}.{s}");
            BlockLayout {
                q: b.linear(&n("cta.q"), d, d),
                k: b.linear(&n("cta.k"), d, d),
                v: b.linear(&n("cta.v"), d, d),
                o: b.linear(&n("cta.out"), d, d),
                ln1: b.norm(&n("ln1"), d),
                xq: b.linear(&n("vaca.q"), d, d),
                xk: b.linear(&n("vaca.k"), d, d),
                xv: b.linear(&n("vaca.v"), d, d),
                xo: b.linear(&n("vaca.out"), d, d),
                ln2: b.norm(&n("ln2"), d),
                fc1: b.linear(&n("mlp.fc1"), d, cfg.d_ff),
                fc2: b.linear(&n("mlp.fc2"), cfg.d_ff, d),
                ln3: b.norm(&n("ln3"), d),
            }
        })
        .collect();
    let head = b.linear("head", d, cfg.action_dim);
    (
        Layout {
            action,
            temporal,
            enc1,
            enc2,
            time,
            blocks,
            head,
        },
        b.specs,
    )
}

/// Named parameter tensors in a fixed, config-determined order.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelParams<T> {
    names: Vec<String>,
    tensors: Vec<Tensor<T>>,
}

impl<T: Real> ModelParams<T> {
    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn tensors(&self) -> &[Tensor<T>] {
        &self.tensors
    }

    pub fn tensors_mut(&mut self) -> &mut [Tensor<T>] {
        &mut self.tensors
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn get(&self, name: &str) -> Option<&Tensor<T>> {
        self.names.iter().position(|n| n == name).map(|i| &self.tensors[i])
    }

    pub fn scalar_count(&self) -> usize {
        self.tensors.iter().map(Tensor::numel).sum()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor<T>)> {
        self.names.iter().map(String::as_str).zip(&self.tensors)
    }

    pub fn cast<U: Real>(&self) -> ModelParams<U> {
        ModelParams {
            names: self.names.clone(),
            tensors: self.tensors.iter().map(Tensor::cast).collect(),
        }
    }
}

/// Per-block keys and values for a run of tokens, each `[rows, d_model]`.
/// Head `h` occupies columns `h*d_head..(h+1)*d_head`.
#[derive(Clone, Debug, PartialEq)]
pub struct BlockKv<T> {
    pub keys: Tensor<T>,
    pub values: Tensor<T>,
}

/// Everything needed to run the network over one window.
#[derive(Clone, Copy, Debug)]
pub struct WindowInput<'a, T> {
    /// Clean (or perturbed) history actions `[L, action_dim]`.
    pub history: &'a Tensor<T>,
    /// Observation paired with each history chunk `[L/C, obs_dim]`.
    pub history_obs: &'a Tensor<T>,
    /// Noisy targets `[M, action_dim]`.
    pub targets: &'a Tensor<T>,
    /// Current observation `[obs_dim]`.
    pub obs: &'a Tensor<T>,
    pub t: usize,
    pub offset: usize,
}

pub struct WindowOutput {
    /// Predicted clean targets `[M, action_dim]`.
    pub pred: Var,
    /// Per-block keys/values of the history rows.
    pub history_kv: Vec<(Var, Var)>,
    /// Per-block input activations of every row, for inspection.
    pub block_inputs: Vec<Var>,
}

/// Parameters bound to a tape, in layout order.
pub struct Bound {
    vars: Vec<Var>,
}

impl Bound {
    pub fn vars(&self) -> &[Var] {
        &self.vars
    }

    fn at(&self, i: usize) -> Var {
        self.vars[i]
    }

    fn lin(&self, l: LinearIdx) -> (Var, Var) {
        (self.vars[l.w], self.vars[l.b])
    }
}

#[derive(Clone, Debug)]
pub struct Model<T> {
    cfg: ModelConfig,
    layout: Layout,
    params: ModelParams<T>,
    time_table: Tensor<T>,
}

/// Temporal-table row of each of `n` tokens starting at window position
/// `first_pos`, cyclically shifted by `offset`.
pub fn temporal_indices(first_pos: usize, n: usize, offset: usize, period: usize) -> Vec<usize> {
    (0..n).map(|i| (offset + first_pos + i) % period).collect()
}

/// Fixed sinusoidal embedding of every denoising timestep, `[T, d]`.
pub fn sinusoidal_table<T: Real>(steps: usize, d: usize) -> Tensor<T> {
    let half = d / 2;
    Tensor::from_fn(&[steps, d], |idx| {
        let (t, j) = (idx / d, idx % d);
        let k = if j < half { j } else { j - half };
        let freq = (-(10000f64.ln()) * k as f64 / half.max(1) as f64).exp();
        let arg = t as f64 * freq;
        T::lit(if j < half { arg.sin() } else { arg.cos() })
    })
}

/// `[period, d]` table of sin/cos pairs at integer harmonics of the period,
/// spread geometrically from 1 to period/2. Every column is exactly periodic,
/// and a cyclic shift of positions acts as a fixed rotation on each pair.
pub fn cyclic_table<T: Real>(period: usize, d: usize) -> Tensor<T> {
    let pairs = d / 2;
    let top = (period / 2).max(1) as f64;
    let harmonic = |k: usize| -> f64 {
        if pairs <= 1 {
            1.0
        } else {
            top.powf(k as f64 / (pairs - 1) as f64).round()
        }
    };
    Tensor::from_fn(&[period, d], |idx| {
        let (p, j) = (idx / d, idx % d);
        if j >= 2 * pairs {
            return T::zero();
        }
        let w = 2.0 * std::f64::consts::PI * harmonic(j / 2) / period as f64;
        let arg = w * p as f64;
        T::lit(if j % 2 == 0 { arg.sin() } else { arg.cos() })
    })
}

struct BlockOut {
    out: Var,
    k: Var,
    v: Var,
}

impl<T: Real> Model<T> {
    /// Fresh model: fan-in scaled normal weights, zero biases, unit gains.
    pub fn init(cfg: ModelConfig, rng: &mut impl Rng) -> Result<Self> {
        cfg.validate()?;
        let (layout, specs) = build_layout(&cfg);
        let mut names = Vec::with_capacity(specs.len());
        let mut tensors = Vec::with_capacity(specs.len());
        for (name, shape, init) in specs {
            let t = match init {
                Init::Normal(std) => {
                    let normal = Normal::new(0.0, std).expect("valid std");
                    Tensor::from_fn(&shape, |_| T::lit(normal.sample(rng)))
                }
                Init::Zeros => Tensor::zeros(&shape),
                Init::Ones => Tensor::full(&shape, T::one()),
                Init::Cyclic => cyclic_table(shape[0], shape[1]),
            };
            names.push(name);
            tensors.push(t);
        }
        let time_table = sinusoidal_table(cfg.schedule.num_steps, cfg.d_model);
        Ok(Self {
            cfg,
            layout,
            params: ModelParams { names, tensors },
            time_table,
        })
    }

    /// Rebuild from stored tensors; names and shapes must match the layout.
    pub fn from_params(cfg: ModelConfig, params: Vec<(String, Tensor<T>)>) -> Result<Self> {
        cfg.validate()?;
        let (layout, specs) = build_layout(&cfg);
        if specs.len() != params.len() {
            return Err(CdpError::Checkpoint(format!(
                "expected {} parameter tensors, found {}",
                specs.len(),
                params.len()
            )));
        }
        let mut names = Vec::with_capacity(specs.len());
        let mut tensors = Vec::with_capacity(specs.len());
        for ((name, shape, _), (pname, t)) in specs.into_iter().zip(params) {
            if name != pname || shape != t.shape() {
                return Err(CdpError::Checkpoint(format!(
                    "parameter {pname} {:?} does not match expected {name} {shape:?}",
                    t.shape()
                )));
            }
            names.push(name);
            tensors.push(t);
        }
        let time_table = sinusoidal_table(cfg.schedule.num_steps, cfg.d_model);
        Ok(Self {
            cfg,
            layout,
            params: ModelParams { names, tensors },
            time_table,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.cfg
    }

    pub fn params(&self) -> &ModelParams<T> {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ModelParams<T> {
        &mut self.params
    }

    pub fn cast<U: Real>(&self) -> Model<U> {
        Model {
            cfg: self.cfg.clone(),
            layout: self.layout.clone(),
            params: self.params.cast(),
            time_table: sinusoidal_table(self.cfg.schedule.num_steps, self.cfg.d_model),
        }
    }

    /// Put every parameter on `tape`; `trainable` decides whether they get gradients.
    pub fn bind<'a>(&'a self, tape: &mut Tape<'a, T>, trainable: bool) -> Bound {
        let vars = self
            .params
            .tensors
            .iter()
            .map(|t| if trainable { tape.param(t) } else { tape.constant(t) })
            .collect();
        Bound { vars }
    }

    fn as_matrix(t: &Tensor<T>, cols: usize, what: &'static str) -> Result<Tensor<T>> {
        if t.numel() % cols.max(1) != 0 || (t.shape().len() == 2 && t.cols() != cols) {
            return Err(shape_err(what, t.shape(), &[cols]));
        }
        t.clone().reshape(vec![t.numel() / cols.max(1), cols])
    }

    /// Action embedding plus cyclic temporal embedding for tokens at window
    /// positions `first_pos..first_pos+n`.
    pub fn embed_tokens(
        &self,
        tape: &mut Tape<'_, T>,
        b: &Bound,
        actions: Var,
        first_pos: usize,
        offset: usize,
    ) -> Result<Var> {
        if offset >= self.cfg.temporal_period {
            return Err(CdpError::Range(format!(
                "offset {offset} outside period {}",
                self.cfg.temporal_period
            )));
        }
        let n = tape.value(actions).rows();
        let (w, bias) = b.lin(self.layout.action);
        let e = tape.linear(actions, w, bias)?;
        let idx = temporal_indices(first_pos, n, offset, self.cfg.temporal_period);
        let pos = tape.gather_rows(b.at(self.layout.temporal), &idx)?;
        tape.add(e, pos)
    }

    /// Observation encoder: `[G, obs_dim] → [G·n_obs_tokens, d_model]`.
    pub fn encode_obs(&self, tape: &mut Tape<'_, T>, b: &Bound, obs: Var) -> Result<Var> {
        let g = tape.value(obs).rows();
        let (w1, b1) = b.lin(self.layout.enc1);
        let (w2, b2) = b.lin(self.layout.enc2);
        let h = tape.linear(obs, w1, b1)?;
        let h = tape.gelu(h);
        let o = tape.linear(h, w2, b2)?;
        tape.reshape(o, vec![g * self.cfg.n_obs_tokens, self.cfg.d_model])
    }

    /// Projected timestep embeddings for each entry of `ts`, `[ts.len(), d]`.
    fn time_embedding(&self, tape: &mut Tape<'_, T>, b: &Bound, ts: &[usize]) -> Result<Var> {
        let table = tape.input(crate::tensor::gather_rows(&self.time_table, ts)?);
        let (w, bias) = b.lin(self.layout.time);
        tape.linear(table, w, bias)
    }

    fn attention(&self, tape: &mut Tape<'_, T>, q: Var, k: Var, v: Var, mask: &AttentionMask) -> Result<Var> {
        let dh = self.cfg.d_head();
        let scale = T::one() / T::from_usize(dh).expect("fits").sqrt();
        let mut heads = Vec::with_capacity(self.cfg.n_heads);
        for h in 0..self.cfg.n_heads {
            let (qh, kh, vh) = if self.cfg.n_heads == 1 {
                (q, k, v)
            } else {
                (
                    tape.slice_cols(q, h * dh, dh)?,
                    tape.slice_cols(k, h * dh, dh)?,
                    tape.slice_cols(v, h * dh, dh)?,
                )
            };
            let logits = tape.matmul_nt(qh, kh)?;
            let logits = tape.scale(logits, scale);
            let p = tape.softmax_masked(logits, mask)?;
            heads.push(tape.matmul(p, vh)?);
        }
        tape.concat_cols(&heads)
    }

    /// Causal temporal attention. Queries come from `x`; keys and values are
    /// `kv_prefix` (earlier window tokens) followed by the projections of `x`.
    /// Returns the post-norm output and the keys/values of `x`'s own rows.
    fn cta(
        &self,
        tape: &mut Tape<'_, T>,
        b: &Bound,
        p: usize,
        x: Var,
        kv_prefix: Option<(Var, Var)>,
        mask: &AttentionMask,
    ) -> Result<BlockOut> {
        let bl = &self.layout.blocks[p];
        let rows = tape.value(x).rows();
        let prefix_rows = kv_prefix.map_or(0, |(k, _)| tape.value(k).rows());
        if mask.rows() != rows || mask.cols() != prefix_rows + rows {
            return Err(shape_err(
                "cta mask",
                &[mask.rows(), mask.cols()],
                &[rows, prefix_rows + rows],
            ));
        }
        let (qw, qb) = b.lin(bl.q);
        let (kw, kb) = b.lin(bl.k);
        let (vw, vb) = b.lin(bl.v);
        let q = tape.linear(x, qw, qb)?;
        let k = tape.linear(x, kw, kb)?;
        let v = tape.linear(x, vw, vb)?;
        let (kk, vv) = match kv_prefix {
            Some((pk, pv)) => (tape.concat_rows(&[pk, k])?, tape.concat_rows(&[pv, v])?),
            None => (k, v),
        };
        let a = self.attention(tape, q, kk, vv, mask)?;
        let (ow, ob) = b.lin(bl.o);
        let o = tape.linear(a, ow, ob)?;
        let r = tape.add(x, o)?;
        let out = tape.layer_norm(r, b.at(bl.ln1.gain), b.at(bl.ln1.bias), T::lit(LN_EPS))?;
        Ok(BlockOut { out, k, v })
    }

    /// Visual-action cross attention. The timestep embedding `temb` (one row
    /// per query row) is added to the query stream; each row attends to the
    /// observation tokens its `obs_mask` row allows.
    fn vaca(
        &self,
        tape: &mut Tape<'_, T>,
        b: &Bound,
        p: usize,
        x: Var,
        temb: Var,
        obs_tokens: Var,
        obs_mask: &AttentionMask,
    ) -> Result<Var> {
        let bl = &self.layout.blocks[p];
        let h = tape.add(x, temb)?;
        let (qw, qb) = b.lin(bl.xq);
        let (kw, kb) = b.lin(bl.xk);
        let (vw, vb) = b.lin(bl.xv);
        let q = tape.linear(h, qw, qb)?;
        let k = tape.linear(obs_tokens, kw, kb)?;
        let v = tape.linear(obs_tokens, vw, vb)?;
        let a = self.attention(tape, q, k, v, obs_mask)?;
        let (ow, ob) = b.lin(bl.xo);
        let o = tape.linear(a, ow, ob)?;
        let r = tape.add(h, o)?;
        tape.layer_norm(r, b.at(bl.ln2.gain), b.at(bl.ln2.bias), T::lit(LN_EPS))
    }

    fn mlp(&self, tape: &mut Tape<'_, T>, b: &Bound, p: usize, x: Var) -> Result<Var> {
        let bl = &self.layout.blocks[p];
        let (w1, b1) = b.lin(bl.fc1);
        let (w2, b2) = b.lin(bl.fc2);
        let h = tape.linear(x, w1, b1)?;
        let h = tape.gelu(h);
        let o = tape.linear(h, w2, b2)?;
        let r = tape.add(x, o)?;
        tape.layer_norm(r, b.at(bl.ln3.gain), b.at(bl.ln3.bias), T::lit(LN_EPS))
    }

    fn head(&self, tape: &mut Tape<'_, T>, b: &Bound, x: Var) -> Result<Var> {
        let (w, bias) = b.lin(self.layout.head);
        tape.linear(x, w, bias)
    }

    /// Run `P` blocks. `stop_after_kv` skips the VACA/MLP of the final block
    /// when only keys and values are wanted.
    #[allow(clippy::too_many_arguments)]
    fn run_blocks(
        &self,
        tape: &mut Tape<'_, T>,
        b: &Bound,
        mut x: Var,
        prefixes: Option<&[(Var, Var)]>,
        cta_mask: &AttentionMask,
        temb: Var,
        obs_tokens: Var,
        obs_mask: &AttentionMask,
        stop_after_kv: bool,
    ) -> Result<(Var, Vec<(Var, Var)>, Vec<Var>)> {
        let mut kvs = Vec::with_capacity(self.cfg.n_blocks);
        let mut inputs = Vec::with_capacity(self.cfg.n_blocks);
        for p in 0..self.cfg.n_blocks {
            inputs.push(x);
            let prefix = prefixes.map(|ps| ps[p]);
            if stop_after_kv && p + 1 == self.cfg.n_blocks {
                let bl = &self.layout.blocks[p];
                let (kw, kb) = b.lin(bl.k);
                let (vw, vb) = b.lin(bl.v);
                let k = tape.linear(x, kw, kb)?;
                let v = tape.linear(x, vw, vb)?;
                kvs.push((k, v));
                break;
            }
            let c = self.cta(tape, b, p, x, prefix, cta_mask)?;
            kvs.push((c.k, c.v));
            let s = self.vaca(tape, b, p, c.out, temb, obs_tokens, obs_mask)?;
            x = self.mlp(tape, b, p, s)?;
        }
        Ok((x, kvs, inputs))
    }

    fn check_window(&self, inp: &WindowInput<'_, T>) -> Result<()> {
        let g = &self.cfg.geom;
        let a = self.cfg.action_dim;
        if inp.history.numel() != g.history_len * a {
            return Err(shape_err("history", inp.history.shape(), &[g.history_len, a]));
        }
        if inp.targets.numel() != g.target_len * a {
            return Err(shape_err("targets", inp.targets.shape(), &[g.target_len, a]));
        }
        if inp.obs.numel() != self.cfg.obs_dim {
            return Err(shape_err("obs", inp.obs.shape(), &[self.cfg.obs_dim]));
        }
        if inp.history_obs.numel() != g.num_history_chunks() * self.cfg.obs_dim {
            return Err(shape_err(
                "history_obs",
                inp.history_obs.shape(),
                &[g.num_history_chunks(), self.cfg.obs_dim],
            ));
        }
        if inp.t >= self.cfg.schedule.num_steps {
            return Err(CdpError::Index {
                index: inp.t,
                len: self.cfg.schedule.num_steps,
            });
        }
        Ok(())
    }

    /// Full window forward on `tape` with parameters `b`.
    pub fn forward_on_tape(&self, tape: &mut Tape<'_, T>, b: &Bound, inp: &WindowInput<'_, T>) -> Result<WindowOutput> {
        self.check_window(inp)?;
        let g = self.cfg.geom;
        let (l, m, a, od) = (g.history_len, g.target_len, self.cfg.action_dim, self.cfg.obs_dim);
        let n_chunks = g.num_history_chunks();

        let tokens = {
            let mut rows = Self::as_matrix(inp.history, a, "history")?.into_data();
            rows.extend_from_slice(inp.targets.data());
            tape.input(Tensor::new(vec![l + m, a], rows)?)
        };
        let x = self.embed_tokens(tape, b, tokens, 0, inp.offset)?;

        let obs_all = {
            let mut rows = inp.history_obs.data().to_vec();
            rows.extend_from_slice(inp.obs.data());
            tape.input(Tensor::new(vec![n_chunks + 1, od], rows)?)
        };
        let obs_tokens = self.encode_obs(tape, b, obs_all)?;
        let row_groups: Vec<usize> = (0..l + m)
            .map(|i| if i < l { i / g.chunk } else { n_chunks })
            .collect();
        let obs_mask = AttentionMask::grouped(&row_groups, n_chunks + 1, self.cfg.n_obs_tokens);

        let temb_pair = self.time_embedding(tape, b, &[0, inp.t])?;
        let temb_idx: Vec<usize> = (0..l + m).map(|i| usize::from(i >= l)).collect();
        let temb = tape.gather_rows(temb_pair, &temb_idx)?;

        let mask = build_training_mask(&g)?;
        let (x, kvs, block_inputs) =
            self.run_blocks(tape, b, x, None, &mask, temb, obs_tokens, &obs_mask, false)?;

        let tgt = tape.slice_rows(x, l, m)?;
        let pred = self.head(tape, b, tgt)?;
        let history_kv = kvs
            .into_iter()
            .map(|(k, v)| -> Result<(Var, Var)> {
                Ok((tape.slice_rows(k, 0, l)?, tape.slice_rows(v, 0, l)?))
            })
            .collect::<Result<_>>()?;
        Ok(WindowOutput {
            pred,
            history_kv,
            block_inputs,
        })
    }

    /// Full window forward without gradients; returns predicted clean targets.
    pub fn forward(&self, inp: &WindowInput<'_, T>) -> Result<Tensor<T>> {
        let mut tape = Tape::inference();
        let b = self.bind(&mut tape, false);
        let out = self.forward_on_tape(&mut tape, &b, inp)?;
        Ok(tape.take_value(out.pred))
    }

    /// Full forward that also returns each block's history keys/values.
    pub fn forward_with_history_kv(&self, inp: &WindowInput<'_, T>) -> Result<(Tensor<T>, Vec<BlockKv<T>>)> {
        let mut tape = Tape::inference();
        let b = self.bind(&mut tape, false);
        let out = self.forward_on_tape(&mut tape, &b, inp)?;
        let kv = out
            .history_kv
            .iter()
            .map(|(k, v)| BlockKv {
                keys: tape.value(*k).clone(),
                values: tape.value(*v).clone(),
            })
            .collect();
        Ok((tape.take_value(out.pred), kv))
    }

    /// Encode a single observation into its tokens `[n_obs_tokens, d]`.
    pub fn encode_observation(&self, obs: &Tensor<T>) -> Result<Tensor<T>> {
        if obs.numel() != self.cfg.obs_dim {
            return Err(shape_err("obs", obs.shape(), &[self.cfg.obs_dim]));
        }
        let mut tape = Tape::inference();
        let b = self.bind(&mut tape, false);
        let o = tape.input(obs.clone().reshape(vec![1, self.cfg.obs_dim])?);
        let tok = self.encode_obs(&mut tape, &b, o)?;
        Ok(tape.take_value(tok))
    }

    /// Keys/values of uncached history tokens at window positions
    /// `first_pos..first_pos+u`. Each token attends only within its chunk
    /// (through the cached prefix it cannot see) and uses the timestep-0
    /// embedding; `obs_tokens` are the encoded observation of this AR step.
    pub fn extract_history_kv(
        &self,
        actions: &Tensor<T>,
        first_pos: usize,
        offset: usize,
        obs_tokens: &Tensor<T>,
        cached: &[BlockKv<T>],
    ) -> Result<Vec<BlockKv<T>>> {
        let g = self.cfg.geom;
        let a = self.cfg.action_dim;
        let u = actions.numel() / a;
        if u == 0 {
            return Ok((0..self.cfg.n_blocks)
                .map(|_| BlockKv {
                    keys: Tensor::zeros(&[0, self.cfg.d_model]),
                    values: Tensor::zeros(&[0, self.cfg.d_model]),
                })
                .collect());
        }
        if first_pos + u > g.history_len || first_pos % g.chunk != 0 || u % g.chunk != 0 {
            return Err(CdpError::Geometry(format!(
                "uncached span {first_pos}..{} is not chunk-aligned inside history {}",
                first_pos + u,
                g.history_len
            )));
        }
        let prefix_len = cached.first().map_or(0, |c| c.keys.rows());
        if prefix_len != first_pos || (!cached.is_empty() && cached.len() != self.cfg.n_blocks) {
            return Err(CdpError::Contract(format!(
                "cached prefix length {prefix_len} does not match first_pos {first_pos}"
            )));
        }
        let mut tape = Tape::inference();
        let b = self.bind(&mut tape, false);
        let acts = tape.input(Self::as_matrix(actions, a, "history")?);
        let x = self.embed_tokens(&mut tape, &b, acts, first_pos, offset)?;
        let obs = tape.constant(obs_tokens);
        let obs_mask = AttentionMask::all_visible(u, self.cfg.n_obs_tokens);
        let temb0 = self.time_embedding(&mut tape, &b, &[0])?;
        let temb = tape.gather_rows(temb0, &vec![0; u])?;

        let inf = crate::masking::build_inference_mask(&g.with_cached(first_pos)?)?;
        let prefixes: Option<Vec<(Var, Var)>> = if prefix_len > 0 {
            Some(
                cached
                    .iter()
                    .map(|c| (tape.constant(&c.keys), tape.constant(&c.values)))
                    .collect(),
            )
        } else {
            None
        };
        let (cta_mask, stop) = (inf.sub(0, u, 0, first_pos + u)?, true);
        let (_, kvs, _) = self.run_blocks(
            &mut tape,
            &b,
            x,
            prefixes.as_deref(),
            &cta_mask,
            temb,
            obs,
            &obs_mask,
            stop,
        )?;
        Ok(kvs
            .into_iter()
            .map(|(k, v)| BlockKv {
                keys: tape.value(k).clone(),
                values: tape.value(v).clone(),
            })
            .collect())
    }

    /// Predict clean targets from noisy targets at timestep `t`, given every
    /// history token's keys/values per block (`[L, d]` each) and the current
    /// observation tokens.
    pub fn denoise_with_kv(
        &self,
        noisy: &Tensor<T>,
        t: usize,
        offset: usize,
        obs_tokens: &Tensor<T>,
        history_kv: &[BlockKv<T>],
    ) -> Result<Tensor<T>> {
        let g = self.cfg.geom;
        let (l, m, a) = (g.history_len, g.target_len, self.cfg.action_dim);
        if noisy.numel() != m * a {
            return Err(shape_err("targets", noisy.shape(), &[m, a]));
        }
        if t >= self.cfg.schedule.num_steps {
            return Err(CdpError::Index {
                index: t,
                len: self.cfg.schedule.num_steps,
            });
        }
        if history_kv.len() != self.cfg.n_blocks || history_kv.iter().any(|kv| kv.keys.rows() != l) {
            return Err(CdpError::Contract(format!(
                "need {} blocks of {l} history keys",
                self.cfg.n_blocks
            )));
        }
        let mut tape = Tape::inference();
        let b = self.bind(&mut tape, false);
        let acts = tape.input(Self::as_matrix(noisy, a, "targets")?);
        let x = self.embed_tokens(&mut tape, &b, acts, l, offset)?;
        let obs = tape.constant(obs_tokens);
        let obs_mask = AttentionMask::all_visible(m, self.cfg.n_obs_tokens);
        let temb_t = self.time_embedding(&mut tape, &b, &[t])?;
        let temb = tape.gather_rows(temb_t, &vec![0; m])?;
        let inf = crate::masking::build_inference_mask(&g.with_cached(l)?)?;
        let prefixes: Option<Vec<(Var, Var)>> = if l > 0 {
            Some(
                history_kv
                    .iter()
                    .map(|c| (tape.constant(&c.keys), tape.constant(&c.values)))
                    .collect(),
            )
        } else {
            None
        };
        let (x, _, _) = self.run_blocks(
            &mut tape,
            &b,
            x,
            prefixes.as_deref(),
            &inf,
            temb,
            obs,
            &obs_mask,
            false,
        )?;
        let pred = self.head(&mut tape, &b, x)?;
        Ok(tape.take_value(pred))
    }
}
