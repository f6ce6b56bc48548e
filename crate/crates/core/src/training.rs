//! Window sampling, history perturbation, the denoising objective and the
//! optimization loop.

use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::dataset::{Episode, Normalizer};
use crate::error::{CdpError, Result};
use crate::masking::PolicyGeometry;
use crate::model::{Model, ModelConfig, WindowInput};
use crate::optim::{clip_global_norm, cosine_lr, Adam};
use crate::rng::{stream, substream, Stream};
use crate::schedule::NoiseSchedule;
use crate::tape::Tape;
use crate::tensor::{Real, Tensor};

pub const DEFAULT_SIGMA: f64 = 1.0 / 6.0;
/// Seeds the fixed evaluation draws, kept apart from every training stream.
const EVAL_SALT: u64 = 0x5EED_E7A1;

fn default_grad_clip() -> f64 {
    1.0
}

fn default_val_fraction() -> f64 {
    0.1
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub sigma: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub learning_rate: f64,
    pub seed: u64,
    #[serde(default = "default_grad_clip")]
    pub grad_clip: f64,
    #[serde(default = "default_val_fraction")]
    pub val_fraction: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            sigma: DEFAULT_SIGMA,
            batch_size: 64,
            epochs: 100,
            learning_rate: 1e-4,
            seed: 0,
            grad_clip: default_grad_clip(),
            val_fraction: default_val_fraction(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        check_sigma(self.sigma)?;
        let cfg = |m: &str| Err(CdpError::Config(m.into()));
        if self.batch_size == 0 {
            return cfg("batch_size must be positive");
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return cfg("learning_rate must be positive");
        }
        if !(0.0..1.0).contains(&self.val_fraction) {
            return cfg("val_fraction must be in [0, 1)");
        }
        if !(self.grad_clip >= 0.0) {
            return cfg("grad_clip must be >= 0");
        }
        Ok(())
    }
}

fn check_sigma(sigma: f64) -> Result<()> {
    if sigma > 0.0 && sigma < 1.0 {
        Ok(())
    } else {
        Err(CdpError::Config(format!("sigma {sigma} must lie in (0, 1)")))
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainingSample<T> {
    /// History actions `[L, action_dim]`.
    pub history: Tensor<T>,
    /// Observation current when each history chunk was cached, `[L/C, obs_dim]`.
    pub history_obs: Tensor<T>,
    /// Clean targets `[M, action_dim]`.
    pub targets: Tensor<T>,
    pub obs: Tensor<T>,
    pub offset: usize,
}

fn rows_tensor<T: Real>(rows: &[Vec<f64>], dim: usize) -> Result<Tensor<T>> {
    let data = rows.iter().flat_map(|r| r.iter().map(|v| T::lit(*v))).collect();
    Tensor::new(vec![rows.len(), dim], data)
}

/// Episode with `L` copies of its first action (and observation) in front
/// and `M−1` copies of `neutral` at the end, so every step can be a boundary.
pub fn pad_episode(ep: &Episode, geom: &PolicyGeometry, neutral: &[f64]) -> Episode {
    let (l, m) = (geom.history_len, geom.target_len);
    let first_a = ep.actions[0].clone();
    let first_o = ep.observations[0].clone();
    let last_o = ep.observations[ep.len() - 1].clone();
    let mut actions = vec![first_a; l];
    actions.extend(ep.actions.iter().cloned());
    actions.extend(std::iter::repeat_n(neutral.to_vec(), m - 1));
    let mut observations = vec![first_o; l];
    observations.extend(ep.observations.iter().cloned());
    observations.extend(std::iter::repeat_n(last_o, m - 1));
    Episode {
        observations,
        actions,
        success: ep.success,
    }
}

/// Number of training windows a padded episode yields.
pub fn window_count(padded: &Episode, geom: &PolicyGeometry) -> usize {
    (padded.len() + 1).saturating_sub(geom.total_len())
}

/// Slice the window starting at `start`. History chunk `j` is paired with
/// the observation at `start + (j+1)·C`, the step at which it would have
/// been cached during rollout.
pub fn sample_window<T: Real>(
    episode: &Episode,
    start: usize,
    geom: &PolicyGeometry,
    temporal_period: usize,
    rng: &mut impl Rng,
) -> Result<TrainingSample<T>> {
    let (l, m, c) = (geom.history_len, geom.target_len, geom.chunk);
    if start + l + m > episode.len() {
        return Err(CdpError::Range(format!(
            "window {start}..{} exceeds episode length {}",
            start + l + m,
            episode.len()
        )));
    }
    let a = episode.actions[0].len();
    let od = episode.observations[0].len();
    let hobs: Vec<Vec<f64>> = (0..geom.num_history_chunks())
        .map(|j| episode.observations[start + (j + 1) * c].clone())
        .collect();
    Ok(TrainingSample {
        history: rows_tensor(&episode.actions[start..start + l], a)?,
        history_obs: rows_tensor(&hobs, od)?,
        targets: rows_tensor(&episode.actions[start + l..start + l + m], a)?,
        obs: rows_tensor(&episode.observations[start + l..start + l + 1], od)?.reshape(vec![od])?,
        offset: rng.random_range(0..temporal_period.max(1)),
    })
}

pub fn perturb_history<T: Real>(history: &Tensor<T>, sigma: f64, rng: &mut impl Rng) -> Result<Tensor<T>> {
    check_sigma(sigma)?;
    let data = history
        .data()
        .iter()
        .map(|&v| {
            let z: f64 = StandardNormal.sample(rng);
            v + T::lit(sigma * z)
        })
        .collect();
    Tensor::new(history.shape().to_vec(), data)
}

fn gaussian<T: Real>(shape: &[usize], rng: &mut impl Rng) -> Tensor<T> {
    Tensor::from_fn(shape, |_| {
        let z: f64 = StandardNormal.sample(rng);
        T::lit(z)
    })
}

/// One drawn instance of the objective: perturbed history, timestep, noisy
/// targets.
pub struct LossDraw<T> {
    pub history: Tensor<T>,
    pub t: usize,
    pub noisy: Tensor<T>,
}

pub fn draw_loss_inputs<T: Real>(
    sample: &TrainingSample<T>,
    sched: &NoiseSchedule,
    sigma: f64,
    rng: &mut impl Rng,
) -> Result<LossDraw<T>> {
    let history = perturb_history(&sample.history, sigma, rng)?;
    let t = rng.random_range(0..sched.num_steps());
    let noise = gaussian(sample.targets.shape(), rng);
    let noisy = sched.q_sample(&sample.targets, t, &noise)?;
    Ok(LossDraw { history, t, noisy })
}

/// Loss of one sample under a fixed draw, and optionally its gradient.
pub fn loss_and_grad<T: Real>(
    model: &Model<T>,
    sample: &TrainingSample<T>,
    draw: &LossDraw<T>,
    with_grad: bool,
) -> Result<(f64, Option<Vec<Tensor<T>>>)> {
    let mut tape = if with_grad { Tape::new() } else { Tape::inference() };
    let b = model.bind(&mut tape, with_grad);
    let inp = WindowInput {
        history: &draw.history,
        history_obs: &sample.history_obs,
        targets: &draw.noisy,
        obs: &sample.obs,
        t: draw.t,
        offset: sample.offset,
    };
    let out = model.forward_on_tape(&mut tape, &b, &inp)?;
    let target = tape.constant(&sample.targets);
    let loss = tape.mse(out.pred, target)?;
    let value = tape.value(loss).data()[0].to_f64().unwrap_or(f64::NAN);
    if !with_grad {
        return Ok((value, None));
    }
    let mut grads = tape.backward(loss)?;
    let g = b
        .vars()
        .iter()
        .zip(model.params().tensors())
        .map(|(v, p)| grads.take(*v).unwrap_or_else(|| Tensor::zeros(p.shape())))
        .collect();
    Ok((value, Some(g)))
}

/// Draw `t`, noise and perturbation, then return the objective and its gradient.
pub fn loss<T: Real>(
    model: &Model<T>,
    sample: &TrainingSample<T>,
    sched: &NoiseSchedule,
    sigma: f64,
    rng: &mut impl Rng,
) -> Result<(f64, Vec<Tensor<T>>)> {
    let draw = draw_loss_inputs(sample, sched, sigma, rng)?;
    let (v, g) = loss_and_grad(model, sample, &draw, true)?;
    Ok((v, g.expect("gradient requested")))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochMetrics {
    pub epoch: usize,
    pub loss: f64,
    pub val_loss: f64,
}

/// Normalized, padded episodes and the list of (episode, start) windows.
pub struct WindowSet {
    pub episodes: Vec<Episode>,
    pub windows: Vec<(usize, usize)>,
}

impl WindowSet {
    pub fn new(episodes: &[Episode], norm: &Normalizer, geom: &PolicyGeometry) -> Self {
        let neutral = norm.normalize(&vec![0.0; norm.dim()]);
        let episodes: Vec<Episode> = episodes
            .iter()
            .map(|e| {
                let n = Episode {
                    observations: e.observations.clone(),
                    actions: e.actions.iter().map(|a| norm.normalize(a)).collect(),
                    success: e.success,
                };
                pad_episode(&n, geom, &neutral)
            })
            .collect();
        let windows = episodes
            .iter()
            .enumerate()
            .flat_map(|(i, e)| (0..window_count(e, geom)).map(move |s| (i, s)))
            .collect();
        Self { episodes, windows }
    }

    pub fn len(&self) -> usize {
        self.windows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.windows.is_empty()
    }
}

/// Mean loss over every window with draws fixed by `seed`, so the number is
/// comparable across training.
pub fn fixed_draw_loss<T: Real>(
    model: &Model<T>,
    set: &WindowSet,
    sched: &NoiseSchedule,
    sigma: f64,
    seed: u64,
) -> Result<f64> {
    if set.is_empty() {
        return Ok(f64::NAN);
    }
    let cfg = model.config();
    let losses: Vec<f64> = set
        .windows
        .iter()
        .enumerate()
        .map(|(i, &(e, s))| -> Result<f64> {
            let mut rng = substream(seed ^ EVAL_SALT, Stream::Noise, i as u64);
            let sample = sample_window(&set.episodes[e], s, &cfg.geom, cfg.temporal_period, &mut rng)?;
            let draw = draw_loss_inputs(&sample, sched, sigma, &mut rng)?;
            Ok(loss_and_grad(model, &sample, &draw, false)?.0)
        })
        .collect::<Result<_>>()?;
    Ok(losses.iter().sum::<f64>() / losses.len() as f64)
}

/// Everything needed to continue training.
#[derive(Clone, Debug)]
pub struct TrainState {
    pub model: Model<f32>,
    pub normalizer: Normalizer,
    pub optim: Adam<f32>,
    /// Completed optimizer steps.
    pub step: u64,
}

impl TrainState {
    pub fn fresh(model_cfg: ModelConfig, normalizer: Normalizer, seed: u64) -> Result<Self> {
        let model = Model::init(model_cfg, &mut stream(seed, Stream::Init))?;
        let optim = Adam::new(model.params().tensors());
        Ok(Self {
            model,
            normalizer,
            optim,
            step: 0,
        })
    }
}

fn split_episodes(episodes: &[Episode], val_fraction: f64) -> (&[Episode], &[Episode]) {
    let n_val = ((episodes.len() as f64) * val_fraction).ceil() as usize;
    if episodes.len() < 2 || n_val == 0 {
        return (episodes, &[]);
    }
    let n_val = n_val.min(episodes.len() - 1);
    episodes.split_at(episodes.len() - n_val)
}

pub fn steps_per_epoch(n_windows: usize, batch: usize) -> u64 {
    n_windows.div_ceil(batch) as u64
}

/// Train from `state` (fresh or resumed) until `cfg.epochs` epochs of steps
/// have been taken. Epoch shuffles and per-sample draws are keyed by epoch
/// and step, so a resumed run continues the exact same trajectory.
pub fn train(
    episodes: &[Episode],
    cfg: &TrainConfig,
    state: TrainState,
    on_epoch: impl FnMut(&EpochMetrics),
) -> Result<(TrainState, Vec<EpochMetrics>)> {
    train_until(episodes, cfg, state, None, on_epoch)
}

/// [`train`], stopping at the first epoch boundary at or after `stop_epoch`
/// epochs. The learning-rate schedule still spans all `cfg.epochs`.
pub fn train_until(
    episodes: &[Episode],
    cfg: &TrainConfig,
    mut state: TrainState,
    stop_epoch: Option<usize>,
    mut on_epoch: impl FnMut(&EpochMetrics),
) -> Result<(TrainState, Vec<EpochMetrics>)> {
    cfg.validate()?;
    if episodes.is_empty() {
        return Err(CdpError::Config("training dataset is empty".into()));
    }
    let mcfg = state.model.config().clone();
    for e in episodes {
        e.validate(mcfg.obs_dim, mcfg.action_dim)?;
    }
    let sched = mcfg.schedule.build()?;
    let (train_eps, val_eps) = split_episodes(episodes, cfg.val_fraction);
    let train_set = WindowSet::new(train_eps, &state.normalizer, &mcfg.geom);
    let val_set = if val_eps.is_empty() {
        None
    } else {
        Some(WindowSet::new(val_eps, &state.normalizer, &mcfg.geom))
    };
    if train_set.is_empty() {
        return Err(CdpError::Config("no training windows".into()));
    }
    let per_epoch = steps_per_epoch(train_set.len(), cfg.batch_size);
    let total = per_epoch * cfg.epochs as u64;
    let stop = stop_epoch.map_or(total, |e| (per_epoch * e as u64).min(total));
    let mut metrics = Vec::new();
    while state.step < stop {
        let epoch = (state.step / per_epoch) as usize;
        let mut order: Vec<usize> = (0..train_set.len()).collect();
        order.shuffle(&mut substream(cfg.seed, Stream::Data, epoch as u64));
        let first = (state.step - epoch as u64 * per_epoch) as usize;
        let mut loss_sum = 0.0;
        let mut loss_n = 0usize;
        for batch in order.chunks(cfg.batch_size).skip(first) {
            let base = state.step * cfg.batch_size as u64;
            let results: Vec<(f64, Vec<Tensor<f32>>)> = batch
                .iter()
                .enumerate()
                .map(|(i, &w)| {
                    let (e, s) = train_set.windows[w];
                    let mut rng = substream(cfg.seed, Stream::Noise, base + i as u64);
                    let sample =
                        sample_window(&train_set.episodes[e], s, &mcfg.geom, mcfg.temporal_period, &mut rng)?;
                    loss(&state.model, &sample, &sched, cfg.sigma, &mut rng)
                })
                .collect::<Result<_>>()?;
            let inv = 1.0 / results.len() as f32;
            let mut grads: Vec<Tensor<f32>> = state
                .model
                .params()
                .tensors()
                .iter()
                .map(|p| Tensor::zeros(p.shape()))
                .collect();
            for (l, g) in &results {
                loss_sum += l;
                loss_n += 1;
                for (acc, gi) in grads.iter_mut().zip(g) {
                    for (a, b) in acc.data_mut().iter_mut().zip(gi.data()) {
                        *a += *b * inv;
                    }
                }
            }
            clip_global_norm(&mut grads, cfg.grad_clip);
            let lr = cosine_lr(cfg.learning_rate, state.step, total);
            let params = state.model.params_mut().tensors_mut();
            state.optim.update(params, &grads, lr)?;
            state.step += 1;
        }
        let loss_mean = if loss_n > 0 { loss_sum / loss_n as f64 } else { f64::NAN };
        if !loss_mean.is_finite() {
            return Err(CdpError::Contract(format!("training loss diverged at epoch {epoch}")));
        }
        let val_loss = fixed_draw_loss(
            &state.model,
            val_set.as_ref().unwrap_or(&train_set),
            &sched,
            cfg.sigma,
            cfg.seed,
        )?;
        let m = EpochMetrics {
            epoch,
            loss: loss_mean,
            val_loss,
        };
        on_epoch(&m);
        metrics.push(m);
    }
    Ok((state, metrics))
}

pub fn write_metrics_csv(path: &std::path::Path, metrics: &[EpochMetrics]) -> Result<()> {
    let mut s = String::from("epoch,loss,val_loss\n");
    for m in metrics {
        s.push_str(&format!("{},{},{}\n", m.epoch, m.loss, m.val_loss));
    }
    std::fs::write(path, s)?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::schedule::{ScheduleConfig, ScheduleKind};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn episode(n: usize) -> Episode {
        Episode {
            observations: (0..n).map(|i| vec![i as f64, -(i as f64)]).collect(),
            actions: (0..n).map(|i| vec![i as f64 * 0.01, 1.0 - i as f64 * 0.01]).collect(),
            success: true,
        }
    }

    fn tiny(l: usize, m: usize, c: usize) -> ModelConfig {
        let geom = PolicyGeometry::new(l, m, c).unwrap();
        ModelConfig {
            action_dim: 2,
            obs_dim: 2,
            d_model: 8,
            n_heads: 2,
            n_blocks: 1,
            d_ff: 8,
            temporal_period: ModelConfig::default_period(&geom),
            n_obs_tokens: 1,
            geom,
            schedule: ScheduleConfig {
                num_steps: 8,
                kind: ScheduleKind::Cosine,
                beta_min: 1e-4,
                beta_max: 0.999,
            },
        }
    }

    #[test]
    fn whole_episode_window() {
        let g = PolicyGeometry::new(4, 2, 2).unwrap();
        let ep = episode(6);
        let s: TrainingSample<f64> = sample_window(&ep, 0, &g, 24, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        assert_eq!(s.history.get2(3, 0), 0.03);
        assert_eq!(s.targets.get2(1, 1), 1.0 - 0.05);
        assert_eq!(s.obs.data(), &[4.0, -4.0]);
        assert_eq!(s.history_obs.row(1), &[4.0, -4.0]);
        assert!(sample_window::<f64>(&ep, 1, &g, 24, &mut ChaCha8Rng::seed_from_u64(0)).is_err());
    }

    #[test]
    fn random_windows_match_episode_slices() {
        let g = PolicyGeometry::new(6, 4, 3).unwrap();
        let ep = episode(40);
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..200 {
            let start = rng.random_range(0..=40 - 10);
            let s: TrainingSample<f64> = sample_window(&ep, start, &g, 40, &mut rng).unwrap();
            for i in 0..6 {
                assert_eq!(s.history.row(i), ep.actions[start + i].as_slice());
            }
            for i in 0..4 {
                assert_eq!(s.targets.row(i), ep.actions[start + 6 + i].as_slice());
            }
            assert_eq!(s.obs.data(), ep.observations[start + 6].as_slice());
            assert_eq!(s.history_obs.row(0), ep.observations[start + 3].as_slice());
            assert!(s.offset < 40);
        }
    }

    #[test]
    fn padding_repeats_first_action() {
        let g = PolicyGeometry::new(4, 3, 2).unwrap();
        let p = pad_episode(&episode(5), &g, &[0.0, 0.0]);
        assert_eq!(p.len(), 4 + 5 + 2);
        assert_eq!(window_count(&p, &g), 5);
        let s: TrainingSample<f64> = sample_window(&p, 0, &g, 28, &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
        for i in 0..4 {
            assert_eq!(s.history.row(i), &[0.0, 1.0]);
        }
        assert_eq!(s.targets.row(0), &[0.0, 1.0]);
        let last: TrainingSample<f64> = sample_window(&p, 4, &g, 28, &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
        assert_eq!(last.targets.row(1), &[0.0, 0.0]);
    }

    #[test]
    fn perturbation_limits_and_moments() {
        let h = Tensor::from_fn(&[4, 2], |i| i as f64);
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        assert!(perturb_history(&h, 1e-8, &mut rng).unwrap().max_abs_diff(&h) < 1e-6);
        assert!(perturb_history(&h, 0.0, &mut rng).is_err());
        assert!(perturb_history(&h, 1.0, &mut rng).is_err());
        let zero = Tensor::<f64>::zeros(&[1000, 1000]);
        let p = perturb_history(&zero, DEFAULT_SIGMA, &mut rng).unwrap();
        let n = p.numel() as f64;
        let mean = p.sum() / n;
        let var = p.data().iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
        assert!((var.sqrt() / DEFAULT_SIGMA - 1.0).abs() < 0.01);
    }

    #[test]
    fn mse_arithmetic_through_zero_head() {
        let cfg = tiny(2, 2, 2);
        let mut model = Model::<f64>::init(cfg.clone(), &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        for (name, t) in model.params().names().to_vec().iter().zip(model.params_mut().tensors_mut()) {
            if name.starts_with("head.") {
                t.data_mut().iter_mut().for_each(|v| *v = 0.0);
            }
        }
        let sample = TrainingSample {
            history: Tensor::zeros(&[2, 2]),
            history_obs: Tensor::zeros(&[1, 2]),
            targets: Tensor::full(&[2, 2], 1.0),
            obs: Tensor::zeros(&[2]),
            offset: 0,
        };
        let sched = cfg.schedule.build().unwrap();
        let (l, g) = loss(&model, &sample, &sched, 0.1, &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
        assert!((l - 1.0).abs() < 1e-12);
        assert_eq!(g.len(), model.params().len());
    }

    #[test]
    fn training_is_deterministic_and_resumable() {
        let cfg = tiny(2, 2, 2);
        let eps = vec![episode(6), episode(7), episode(5)];
        let norm = Normalizer::fit(&eps, 2).unwrap();
        let tc = TrainConfig {
            batch_size: 4,
            epochs: 4,
            learning_rate: 1e-2,
            val_fraction: 0.0,
            ..TrainConfig::default()
        };
        let st = TrainState::fresh(cfg.clone(), norm.clone(), 3).unwrap();
        let (a, ma) = train(&eps, &tc, st.clone(), |_| {}).unwrap();
        let (b, mb) = train(&eps, &tc, st.clone(), |_| {}).unwrap();
        assert_eq!(ma, mb);
        assert_eq!(a.model.params(), b.model.params());

        let (mid, _) = train_until(&eps, &tc, st, Some(2), |_| {}).unwrap();
        let (resumed, mr) = train(&eps, &tc, mid, |_| {}).unwrap();
        assert_eq!(resumed.model.params(), a.model.params());
        assert_eq!(mr, ma[2..].to_vec());
    }

    #[test]
    fn empty_dataset_rejected() {
        let st = TrainState::fresh(tiny(2, 2, 2), Normalizer::identity(2), 0).unwrap();
        assert!(matches!(
            train(&[], &TrainConfig::default(), st, |_| {}),
            Err(CdpError::Config(_))
        ));
    }

    #[test]
    fn single_sample_memorization() {
        let cfg = tiny(2, 2, 2);
        let eps = vec![Episode {
            observations: vec![vec![0.3, 0.7]],
            actions: vec![vec![1.0, -1.0]],
            success: true,
        }];
        let norm = Normalizer::identity(2);
        let tc = TrainConfig {
            batch_size: 1,
            epochs: 200,
            learning_rate: 1e-2,
            val_fraction: 0.0,
            ..TrainConfig::default()
        };
        let st = TrainState::fresh(cfg.clone(), norm.clone(), 1).unwrap();
        let set = WindowSet::new(&eps, &norm, &cfg.geom);
        let sched = cfg.schedule.build().unwrap();
        let initial = fixed_draw_loss(&st.model, &set, &sched, tc.sigma, tc.seed).unwrap();
        let (_, m) = train(&eps, &tc, st, |_| {}).unwrap();
        let last = m.last().unwrap().val_loss;
        assert!(last * 10.0 <= initial, "{initial} -> {last}");
    }
}
