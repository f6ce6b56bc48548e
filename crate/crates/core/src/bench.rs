//! Per-AR-step latency with and without the history cache across history
//! lengths.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{CdpError, Result};
use crate::masking::PolicyGeometry;
use crate::model::{Model, ModelConfig};
use crate::rng::{stream, Stream};
use crate::rollout::init_session;
use crate::schedule::{ScheduleConfig, ScheduleKind};
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BenchConfig {
    pub history_lens: Vec<usize>,
    pub target_len: usize,
    pub chunk: usize,
    pub d_model: usize,
    pub n_heads: usize,
    pub n_blocks: usize,
    pub d_ff: usize,
    pub num_steps: usize,
    pub ar_steps: usize,
    pub obs_dim: usize,
    pub action_dim: usize,
    pub seed: u64,
}

impl Default for BenchConfig {
    fn default() -> Self {
        Self {
            history_lens: vec![8, 16, 32, 64],
            target_len: 12,
            chunk: 8,
            d_model: 128,
            n_heads: 4,
            n_blocks: 4,
            d_ff: 512,
            num_steps: 50,
            ar_steps: 50,
            obs_dim: 8,
            action_dim: 2,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BenchRow {
    pub history_len: usize,
    /// Mean per-AR-step latency (extraction plus denoising), cache on.
    pub cached_ms: f64,
    /// Mean per-AR-step latency, full recompute.
    pub uncached_ms: f64,
    pub speedup: f64,
    /// Max |cached − uncached| over the first AR step's actions.
    pub first_step_diff: f64,
}

impl BenchConfig {
    fn model_config(&self, l: usize, period: usize) -> Result<ModelConfig> {
        let cfg = ModelConfig {
            action_dim: self.action_dim,
            obs_dim: self.obs_dim,
            d_model: self.d_model,
            n_heads: self.n_heads,
            n_blocks: self.n_blocks,
            d_ff: self.d_ff,
            temporal_period: period,
            n_obs_tokens: 1,
            geom: PolicyGeometry::new(l, self.target_len, self.chunk)?,
            schedule: ScheduleConfig {
                num_steps: self.num_steps,
                kind: ScheduleKind::Cosine,
                ..ScheduleConfig::default()
            },
        };
        cfg.validate()?;
        Ok(cfg)
    }
}

fn run(model: &Model<f32>, use_cache: bool, steps: usize, seed: u64) -> Result<(f64, Tensor<f32>)> {
    let sched = model.config().schedule.build()?;
    let mut session = init_session(model, None, use_cache, stream(seed, Stream::Noise))?;
    let mut obs_rng = ChaCha8Rng::seed_from_u64(seed);
    let od = model.config().obs_dim;
    let mut total = 0.0;
    let mut first = None;
    for _ in 0..steps {
        let obs = Tensor::from_fn(&[od], |_| obs_rng.random_range(0.0f32..1.0));
        let (a, t) = session.ar_step(model, &sched, &obs)?;
        total += t.kv_extract_ms + t.denoise_ms;
        first.get_or_insert(a);
    }
    Ok((total / steps as f64, first.expect("at least one step")))
}

/// Sweep history lengths. With `weights`, its parameters are reused for every
/// length (its temporal period must cover each window); otherwise a random
/// model is drawn from `cfg.seed`.
pub fn bench_cache(cfg: &BenchConfig, weights: Option<&Model<f32>>) -> Result<Vec<BenchRow>> {
    if cfg.ar_steps == 0 || cfg.history_lens.is_empty() {
        return Err(CdpError::Config("bench needs at least one length and one AR step".into()));
    }
    let max_l = *cfg.history_lens.iter().max().expect("non-empty");
    let (base_cfg, params) = match weights {
        Some(m) => (m.config().clone(), m.params().clone()),
        None => {
            let period = ModelConfig::default_period(&PolicyGeometry::new(max_l, cfg.target_len, cfg.chunk)?);
            let mc = cfg.model_config(max_l, period)?;
            let m = Model::<f32>::init(mc.clone(), &mut stream(cfg.seed, Stream::Init))?;
            (mc, m.params().clone())
        }
    };
    let mut rows = Vec::with_capacity(cfg.history_lens.len());
    for &l in &cfg.history_lens {
        let mut mc = base_cfg.clone();
        mc.geom = PolicyGeometry::new(l, mc.geom.target_len, mc.geom.chunk)?;
        mc.validate()?;
        let named = params
            .iter()
            .map(|(n, t)| (n.to_string(), t.clone()))
            .collect();
        let model = Model::from_params(mc, named)?;
        let (cached_ms, a) = run(&model, true, cfg.ar_steps, cfg.seed)?;
        let (uncached_ms, b) = run(&model, false, cfg.ar_steps, cfg.seed)?;
        rows.push(BenchRow {
            history_len: l,
            cached_ms,
            uncached_ms,
            speedup: uncached_ms / cached_ms,
            first_step_diff: a.max_abs_diff(&b) as f64,
        });
    }
    Ok(rows)
}

pub fn bench_csv(rows: &[BenchRow]) -> String {
    let mut s = String::from("L,cached_ms,uncached_ms,speedup\n");
    for r in rows {
        s.push_str(&format!(
            "{},{:.4},{:.4},{:.4}\n",
            r.history_len, r.cached_ms, r.uncached_ms, r.speedup
        ));
    }
    s
}
