//! Chunk-wise autoregressive inference and the closed-loop episode harness.
//!
//! Each AR step denoises `M` targets conditioned on the last `L` executed
//! actions, executes the first `C` and slides the window by one chunk. With
//! the cache on, history keys/values are extracted once per chunk and reused
//! for every denoising timestep; with it off, the full window is recomputed
//! at every timestep. Both paths consume identical noise.

use std::time::Instant;

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::cache::{extract_and_commit, KvCache};
use crate::dataset::{Episode, Normalizer};
use crate::envs::{observe, DegradeSpec, EnvState, Task};
use crate::error::{CdpError, Result};
use crate::model::{Model, WindowInput};
use crate::rng::{substream, Stream};
use crate::schedule::NoiseSchedule;
use crate::tensor::{slice_rows, Real, Tensor};

#[derive(Clone, Debug)]
pub struct RolloutSession<T> {
    cache: KvCache<T>,
    /// Last `L` actions, oldest first.
    history: Tensor<T>,
    /// Observation paired with each history chunk.
    history_obs: Tensor<T>,
    /// Trailing history tokens whose keys/values are not cached yet.
    uncached: usize,
    /// Trailing history tokens not yet paired with an observation.
    unpaired: usize,
    /// Actions executed so far (seeded ones included), capped at `L`.
    real_history: usize,
    ar_step: usize,
    offset_base: usize,
    rng: ChaCha8Rng,
    use_cache: bool,
    clip_x0: bool,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct StepTiming {
    pub ar_step: usize,
    pub kv_extract_ms: f64,
    pub denoise_ms: f64,
    pub cache_len: usize,
}

/// Start a session. Without a seed the history is `L` zero actions; a seed of
/// `s ≤ L` actions fills the newest `s` slots.
pub fn init_session<T: Real>(
    model: &Model<T>,
    seed_history: Option<&Tensor<T>>,
    use_cache: bool,
    rng: ChaCha8Rng,
) -> Result<RolloutSession<T>> {
    let cfg = model.config();
    let (l, a) = (cfg.geom.history_len, cfg.action_dim);
    let mut history = Tensor::zeros(&[l, a]);
    let mut seeded = 0;
    if let Some(s) = seed_history {
        seeded = s.numel() / a.max(1);
        if s.numel() != seeded * a {
            return Err(crate::error::shape_err("seed_history", s.shape(), &[seeded, a]));
        }
        if seeded > l {
            return Err(CdpError::Range(format!("seed of {seeded} actions exceeds history length {l}")));
        }
        history.data_mut()[(l - seeded) * a..].copy_from_slice(s.data());
    }
    Ok(RolloutSession {
        cache: KvCache::for_model(model),
        history,
        history_obs: Tensor::zeros(&[cfg.geom.num_history_chunks(), cfg.obs_dim]),
        uncached: l,
        unpaired: l,
        real_history: seeded,
        ar_step: 0,
        offset_base: 0,
        rng,
        use_cache,
        clip_x0: true,
    })
}

impl<T: Real> RolloutSession<T> {
    pub fn cache(&self) -> &KvCache<T> {
        &self.cache
    }

    pub fn history(&self) -> &Tensor<T> {
        &self.history
    }

    pub fn history_obs(&self) -> &Tensor<T> {
        &self.history_obs
    }

    pub fn uncached_len(&self) -> usize {
        self.uncached
    }

    pub fn real_history_len(&self) -> usize {
        self.real_history
    }

    pub fn step_index(&self) -> usize {
        self.ar_step
    }

    pub fn uses_cache(&self) -> bool {
        self.use_cache
    }

    pub fn set_clip_x0(&mut self, clip: bool) {
        self.clip_x0 = clip;
    }

    pub fn set_offset_base(&mut self, base: usize) {
        self.offset_base = base;
    }

    /// Temporal offset of AR step `k`: `(base + k·C) mod period`.
    pub fn offset(&self, model: &Model<T>) -> usize {
        let cfg = model.config();
        (self.offset_base + self.ar_step * cfg.geom.chunk) % cfg.temporal_period
    }

    fn gaussian(&mut self, shape: &[usize]) -> Tensor<T> {
        let rng = &mut self.rng;
        Tensor::from_fn(shape, |_| {
            let z: f64 = StandardNormal.sample(rng);
            T::lit(z)
        })
    }

    /// One AR step: returns the `C` actions to execute.
    pub fn ar_step(&mut self, model: &Model<T>, sched: &NoiseSchedule, obs: &Tensor<T>) -> Result<(Tensor<T>, StepTiming)> {
        let cfg = model.config();
        let g = cfg.geom;
        let (l, m, c, a) = (g.history_len, g.target_len, g.chunk, cfg.action_dim);
        if obs.numel() != cfg.obs_dim {
            return Err(crate::error::shape_err("obs", obs.shape(), &[cfg.obs_dim]));
        }
        if sched.num_steps() != cfg.schedule.num_steps {
            return Err(CdpError::Contract("schedule does not match model config".into()));
        }
        let offset = self.offset(model);
        let od = cfg.obs_dim;
        let n_chunks = g.num_history_chunks();
        for j in (n_chunks - self.unpaired / c)..n_chunks {
            self.history_obs.data_mut()[j * od..(j + 1) * od].copy_from_slice(obs.data());
        }
        self.unpaired = 0;

        let t0 = Instant::now();
        let obs_tokens = model.encode_observation(obs)?;
        let history_kv = if self.use_cache {
            if self.uncached > 0 {
                let unc = slice_rows(&self.history, l - self.uncached, self.uncached)?;
                extract_and_commit(model, &mut self.cache, &unc, offset, &obs_tokens)?;
                self.uncached = 0;
            }
            Some(self.cache.trailing(l)?)
        } else {
            None
        };
        let kv_ms = t0.elapsed().as_secs_f64() * 1e3;

        let t1 = Instant::now();
        let mut x = self.gaussian(&[m, a]);
        for t in (0..sched.num_steps()).rev() {
            let mut pred = match &history_kv {
                Some(kv) => model.denoise_with_kv(&x, t, offset, &obs_tokens, kv)?,
                None => model.forward(&WindowInput {
                    history: &self.history,
                    history_obs: &self.history_obs,
                    targets: &x,
                    obs,
                    t,
                    offset,
                })?,
            };
            if self.clip_x0 {
                let one = T::one();
                pred = pred.map(|v| v.max(-one).min(one));
            }
            let noise = if t > 0 { Some(self.gaussian(&[m, a])) } else { None };
            x = sched.denoise_step_x0(&x, &pred, t, noise.as_ref(), t > 0)?;
        }
        let denoise_ms = t1.elapsed().as_secs_f64() * 1e3;

        let executed = slice_rows(&x, 0, c)?;
        if l > 0 {
            let mut h = self.history.data()[c * a..].to_vec();
            h.extend_from_slice(executed.data());
            self.history = Tensor::new(vec![l, a], h)?;
            let mut ho = self.history_obs.data()[od..].to_vec();
            ho.extend(std::iter::repeat_n(T::zero(), od));
            self.history_obs = Tensor::new(vec![n_chunks, od], ho)?;
            self.uncached = (self.uncached + c).min(l);
            self.unpaired = c;
            self.real_history = (self.real_history + c).min(l);
        }
        let timing = StepTiming {
            ar_step: self.ar_step,
            kv_extract_ms: kv_ms,
            denoise_ms,
            cache_len: self.cache.len(),
        };
        self.ar_step += 1;
        Ok((executed, timing))
    }
}

/// Something that maps an observation to a chunk of raw actions.
pub trait Policy {
    fn act(&mut self, obs: &[f64]) -> Result<(Vec<Vec<f64>>, Option<StepTiming>)>;
}

/// The scripted expert, reading its state back out of the observation.
pub struct ExpertPolicy {
    pub task: Task,
}

impl Policy for ExpertPolicy {
    fn act(&mut self, obs: &[f64]) -> Result<(Vec<Vec<f64>>, Option<StepTiming>)> {
        let s = EnvState::from_vector(self.task, obs)?;
        Ok((vec![s.expert_action().to_vec()], None))
    }
}

/// A trained model driving one rollout session.
pub struct ModelPolicy<'m, T: Real> {
    pub model: &'m Model<T>,
    pub sched: &'m NoiseSchedule,
    pub normalizer: &'m Normalizer,
    pub session: RolloutSession<T>,
}

impl<T: Real> Policy for ModelPolicy<'_, T> {
    fn act(&mut self, obs: &[f64]) -> Result<(Vec<Vec<f64>>, Option<StepTiming>)> {
        let o = Tensor::new(vec![obs.len()], obs.iter().map(|v| T::lit(*v)).collect())?;
        let (acts, timing) = self.session.ar_step(self.model, self.sched, &o)?;
        let raw = (0..acts.rows())
            .map(|i| {
                let row: Vec<f64> = acts.row(i).iter().map(|v| v.to_f64().unwrap_or(f64::NAN)).collect();
                self.normalizer.denormalize(&row)
            })
            .collect();
        Ok((raw, Some(timing)))
    }
}

#[derive(Clone, Debug)]
pub struct EpisodeResult {
    pub episode: Episode,
    pub success: bool,
    pub steps: usize,
    pub timings: Vec<StepTiming>,
}

/// Observe, act, apply the chunk one tick at a time; stop on success or
/// after `max_steps` ticks.
pub fn run_episode(
    mut state: EnvState,
    policy: &mut dyn Policy,
    max_steps: usize,
    degrade: &DegradeSpec,
    obs_rng: &mut impl Rng,
) -> Result<EpisodeResult> {
    degrade.validate()?;
    let mut ep = Episode {
        observations: Vec::new(),
        actions: Vec::new(),
        success: false,
    };
    let mut timings = Vec::new();
    let mut steps = 0;
    'outer: while steps < max_steps {
        let obs = observe(&state, degrade, obs_rng);
        let (chunk, timing) = policy.act(&obs).map_err(|e| CdpError::Env {
            step: steps,
            msg: e.to_string(),
        })?;
        timings.extend(timing);
        for a in chunk {
            ep.observations.push(obs.clone());
            ep.actions.push(a.clone());
            state = state.step(&a).map_err(|e| CdpError::Env {
                step: steps,
                msg: e.to_string(),
            })?;
            steps += 1;
            if state.is_success() {
                ep.success = true;
                break 'outer;
            }
            if steps >= max_steps {
                break 'outer;
            }
        }
    }
    Ok(EpisodeResult {
        success: ep.success,
        episode: ep,
        steps,
        timings,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalSummary {
    pub noise_scale: f64,
    pub success_rate: f64,
    pub mean_steps: f64,
    pub episodes: usize,
}

/// Which policy to evaluate.
#[derive(Clone, Copy)]
pub enum EvalPolicy<'m> {
    Expert,
    Model {
        model: &'m Model<f32>,
        normalizer: &'m Normalizer,
        use_cache: bool,
    },
}

/// Run `episodes` independent episodes in parallel. Episode `i` draws its
/// reset, observation noise and diffusion noise from sub-streams `i` of
/// `seed`, so results do not depend on scheduling.
pub fn evaluate(
    task: Task,
    policy: EvalPolicy<'_>,
    episodes: usize,
    seed: u64,
    max_steps: usize,
    degrade: &DegradeSpec,
) -> Result<(EvalSummary, Vec<EpisodeResult>)> {
    let sched = match policy {
        EvalPolicy::Model { model, .. } => Some(model.config().schedule.build()?),
        EvalPolicy::Expert => None,
    };
    let results: Vec<EpisodeResult> = (0..episodes)
        .into_par_iter()
        .map(|i| -> Result<EpisodeResult> {
            let mut env_rng = substream(seed, Stream::Env, i as u64);
            let state = EnvState::reset(task, &mut env_rng);
            match policy {
                EvalPolicy::Expert => run_episode(state, &mut ExpertPolicy { task }, max_steps, degrade, &mut env_rng),
                EvalPolicy::Model {
                    model,
                    normalizer,
                    use_cache,
                } => {
                    let session = init_session(model, None, use_cache, substream(seed, Stream::Noise, i as u64))?;
                    let mut p = ModelPolicy {
                        model,
                        sched: sched.as_ref().expect("schedule built"),
                        normalizer,
                        session,
                    };
                    run_episode(state, &mut p, max_steps, degrade, &mut env_rng)
                }
            }
        })
        .collect::<Result<_>>()?;
    let n = results.len().max(1) as f64;
    let summary = EvalSummary {
        noise_scale: degrade.noise_scale,
        success_rate: results.iter().filter(|r| r.success).count() as f64 / n,
        mean_steps: results.iter().map(|r| r.steps as f64).sum::<f64>() / n,
        episodes: results.len(),
    };
    Ok((summary, results))
}

pub fn write_timing_csv(path: &std::path::Path, timings: &[StepTiming]) -> Result<()> {
    let mut s = String::from("ar_step,kv_extract_ms,denoise_ms,cache_len\n");
    for t in timings {
        s.push_str(&format!(
            "{},{:.6},{:.6},{}\n",
            t.ar_step, t.kv_extract_ms, t.denoise_ms, t.cache_len
        ));
    }
    std::fs::write(path, s)?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::tests::{scramble, tiny_cfg};
    use rand::SeedableRng;

    fn model(l: usize, m: usize, c: usize, seed: u64) -> Model<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut model = Model::<f64>::init(tiny_cfg(l, m, c, 2), &mut rng).unwrap();
        scramble(&mut model, &mut rng);
        model
    }

    fn rollout(model: &Model<f64>, use_cache: bool, steps: usize) -> Vec<Tensor<f64>> {
        let sched = model.config().schedule.build().unwrap();
        let mut s = init_session(model, None, use_cache, ChaCha8Rng::seed_from_u64(3)).unwrap();
        let mut obs_rng = ChaCha8Rng::seed_from_u64(4);
        (0..steps)
            .map(|_| {
                let obs = Tensor::from_fn(&[3], |_| obs_rng.random_range(-1.0..1.0));
                s.ar_step(model, &sched, &obs).unwrap().0
            })
            .collect()
    }

    #[test]
    fn cached_and_recomputed_rollouts_agree() {
        for (l, m, c) in [(4, 2, 2), (6, 4, 3), (8, 4, 2), (0, 3, 3)] {
            let model = model(l, m, c, 10 + l as u64);
            let a = rollout(&model, true, 12);
            let b = rollout(&model, false, 12);
            for (x, y) in a.iter().zip(&b) {
                assert!(x.max_abs_diff(y) <= 1e-9, "L={l} diff {}", x.max_abs_diff(y));
            }
        }
    }

    #[test]
    fn executed_chunk_length_and_window() {
        let model = model(8, 4, 2, 1);
        let sched = model.config().schedule.build().unwrap();
        let mut s = init_session(&model, None, true, ChaCha8Rng::seed_from_u64(0)).unwrap();
        let obs = Tensor::from_fn(&[3], |i| i as f64 * 0.1);
        let mut executed = Vec::new();
        for k in 0..6 {
            assert_eq!(s.offset(&model), (k * 2) % model.config().temporal_period);
            let (a, t) = s.ar_step(&model, &sched, &obs).unwrap();
            assert_eq!(a.shape(), &[2, 2]);
            assert_eq!(t.cache_len, 8);
            executed.extend_from_slice(a.data());
        }
        // window holds exactly the last L executed actions
        assert_eq!(s.history().data(), &executed[executed.len() - 16..]);
    }

    #[test]
    fn seeding_and_bookkeeping() {
        let model = model(8, 4, 2, 2);
        let sched = model.config().schedule.build().unwrap();
        let seed = Tensor::from_fn(&[4, 2], |i| i as f64);
        let mut s = init_session(&model, Some(&seed), true, ChaCha8Rng::seed_from_u64(0)).unwrap();
        assert_eq!(&s.history().data()[8..], seed.data());
        assert!(s.history().data()[..8].iter().all(|v| *v == 0.0));
        s.ar_step(&model, &sched, &Tensor::zeros(&[3])).unwrap();
        assert_eq!(s.real_history_len(), 6);
        assert_eq!(s.uncached_len(), 2);
        assert_eq!(s.cache().len(), 8);
        let long = Tensor::zeros(&[9, 2]);
        assert!(matches!(
            init_session(&model, Some(&long), true, ChaCha8Rng::seed_from_u64(0)),
            Err(CdpError::Range(_))
        ));
    }

    #[test]
    fn rollouts_are_deterministic() {
        let model = model(4, 4, 2, 5);
        assert_eq!(rollout(&model, true, 5), rollout(&model, true, 5));
    }

    #[test]
    fn expert_through_harness_reaches_goal() {
        let (s, results) = evaluate(Task::Reach2d, EvalPolicy::Expert, 50, 0, 60, &DegradeSpec::clean()).unwrap();
        assert_eq!(s.success_rate, 1.0);
        assert!(results.iter().all(|r| r.episode.len() == r.steps && r.steps <= 60));
    }
}
