//! Acceptance run: one PASS/FAIL line per criterion.
//!
//! Criteria 8 and 9 train four pusht_lite policies and take the better part
//! of an hour on one core, so they only run with `CDP_ACCEPTANCE_TRENDS=1`.
//! Without it they print SKIP.

use std::process::ExitCode;
use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use cdp_core::bench::{bench_cache, BenchConfig};
use cdp_core::checkpoint::Checkpoint;
use cdp_core::config::RunConfig;
use cdp_core::dataset::{Episode, Normalizer};
use cdp_core::envs::{gen_demos, DegradeSpec, Task};
use cdp_core::masking::{build_inference_mask, build_training_mask, PolicyGeometry};
use cdp_core::model::{Model, ModelConfig, WindowInput};
use cdp_core::rollout::{evaluate, init_session, EvalPolicy};
use cdp_core::schedule::{make_schedule, ScheduleConfig, ScheduleKind};
use cdp_core::tape::Tape;
use cdp_core::tensor::{self, Tensor};
use cdp_core::training::{fixed_draw_loss, train, TrainConfig, TrainState, WindowSet};
use cdp_core::Result;

struct Outcome {
    passed: bool,
    detail: String,
}

fn outcome(passed: bool, detail: impl Into<String>) -> Result<Option<Outcome>> {
    Ok(Some(Outcome {
        passed,
        detail: detail.into(),
    }))
}

fn gauss(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor<f64> {
    Tensor::from_fn(shape, |_| StandardNormal.sample(rng))
}

fn uniform(shape: &[usize], lo: f64, hi: f64, rng: &mut ChaCha8Rng) -> Tensor<f64> {
    Tensor::from_fn(shape, |_| rng.random_range(lo..hi))
}

fn model_cfg(l: usize, m: usize, c: usize, d: usize, blocks: usize, steps: usize) -> Result<ModelConfig> {
    let geom = PolicyGeometry::new(l, m, c)?;
    let cfg = ModelConfig {
        action_dim: 2,
        obs_dim: 3,
        d_model: d,
        n_heads: 2,
        n_blocks: blocks,
        d_ff: 2 * d,
        temporal_period: ModelConfig::default_period(&geom),
        n_obs_tokens: 1,
        geom,
        schedule: ScheduleConfig {
            num_steps: steps,
            kind: ScheduleKind::Cosine,
            ..ScheduleConfig::default()
        },
    };
    cfg.validate()?;
    Ok(cfg)
}

/// Fresh init, then every parameter shifted by U(−spread, spread) so that
/// gains and biases are not trivially one and zero.
fn random_model(cfg: ModelConfig, spread: f64, seed: u64) -> Result<Model<f64>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut m = Model::<f64>::init(cfg, &mut rng)?;
    for t in m.params_mut().tensors_mut() {
        for v in t.data_mut() {
            *v += rng.random_range(-spread..spread);
        }
    }
    Ok(m)
}

struct Window {
    history: Tensor<f64>,
    history_obs: Tensor<f64>,
    targets: Tensor<f64>,
    obs: Tensor<f64>,
}

impl Window {
    fn random(cfg: &ModelConfig, rng: &mut ChaCha8Rng) -> Self {
        let g = cfg.geom;
        Self {
            history: uniform(&[g.history_len, cfg.action_dim], -1.0, 1.0, rng),
            history_obs: uniform(&[g.num_history_chunks(), cfg.obs_dim], -1.0, 1.0, rng),
            targets: gauss(&[g.target_len, cfg.action_dim], rng),
            obs: uniform(&[cfg.obs_dim], -1.0, 1.0, rng),
        }
    }

    fn input(&self, t: usize, offset: usize) -> WindowInput<'_, f64> {
        WindowInput {
            history: &self.history,
            history_obs: &self.history_obs,
            targets: &self.targets,
            obs: &self.obs,
            t,
            offset,
        }
    }
}

fn cache_equivalence() -> Result<Option<Outcome>> {
    let mut configs = 0;
    let mut worst = 0.0f64;
    let mut seed = 0u64;
    // actions strictly inside the clip range, so agreement is not vacuous
    let (mut interior, mut total) = (0usize, 0usize);
    for l in [8, 16, 32] {
        for c in [2, 4, 8] {
            for m in [4, 12] {
                if c > m {
                    continue;
                }
                for _ in 0..2 {
                    seed += 1;
                    let model = random_model(model_cfg(l, m, c, 16, 2, 10)?, 0.2, seed)?;
                    let sched = model.config().schedule.build()?;
                    let mut rng = ChaCha8Rng::seed_from_u64(1000 + seed);
                    let base = rng.random_range(0..model.config().temporal_period);
                    let mut sessions = [true, false].map(|cache| {
                        let mut s = init_session(&model, None, cache, ChaCha8Rng::seed_from_u64(seed))
                            .expect("valid session");
                        s.set_offset_base(base);
                        s
                    });
                    for _ in 0..50 {
                        let obs = uniform(&[3], -1.0, 1.0, &mut rng);
                        let a = sessions[0].ar_step(&model, &sched, &obs)?.0;
                        let b = sessions[1].ar_step(&model, &sched, &obs)?.0;
                        worst = worst.max(a.max_abs_diff(&b));
                        interior += a.data().iter().filter(|v| v.abs() < 1.0).count();
                        total += a.numel();
                    }
                    configs += 1;
                }
            }
        }
    }
    let frac = interior as f64 / total as f64;
    outcome(
        configs >= 20 && worst <= 1e-6 && frac > 0.5,
        format!(
            "{configs} configurations x 50 AR steps, max |cached - uncached| = {worst:.2e}, {:.0}% of actions unclipped",
            100.0 * frac
        ),
    )
}

fn history_kv_invariance() -> Result<Option<Outcome>> {
    let mut compared = 0;
    for (i, (l, m, c)) in [(4, 2, 2), (8, 4, 4), (12, 6, 3)].into_iter().enumerate() {
        let cfg = model_cfg(l, m, c, 16, 2, 20)?;
        let model = random_model(cfg.clone(), 0.3, 40 + i as u64)?;
        let mut rng = ChaCha8Rng::seed_from_u64(50 + i as u64);
        let w = Window::random(&cfg, &mut rng);
        let offset = rng.random_range(0..cfg.temporal_period);
        let kv: Vec<_> = (0..cfg.schedule.num_steps)
            .map(|t| model.forward_with_history_kv(&w.input(t, offset)).map(|r| r.1))
            .collect::<Result<_>>()?;
        for a in 0..kv.len() {
            for b in a + 1..kv.len() {
                for (x, y) in kv[a].iter().zip(&kv[b]) {
                    if x.keys.data() != y.keys.data() || x.values.data() != y.values.data() {
                        return outcome(false, format!("L={l} C={c}: history K/V differ between t={a} and t={b}"));
                    }
                    compared += 1;
                }
            }
        }
    }
    outcome(true, format!("{compared} block pairs bit-identical across all timestep pairs"))
}

/// Brute-force visibility written from the rule: a history row sees exactly
/// the history columns of its own chunk; a target row sees everything.
fn rule(i: usize, j: usize, l: usize, c: usize) -> bool {
    if i >= l {
        return true;
    }
    j < l && i / c == j / c
}

fn mask_oracle() -> Result<Option<Outcome>> {
    let start = Instant::now();
    let mut geoms = 0;
    let mut cells = 0usize;
    for l in 0..=12usize {
        let chunks: Vec<usize> = if l == 0 {
            (1..=6).collect()
        } else {
            (1..=l).filter(|c| l % c == 0).collect()
        };
        for c in chunks {
            for m in c..=6 {
                let g = PolicyGeometry::new(l, m, c)?;
                let train_mask = build_training_mask(&g)?;
                let n = l + m;
                if train_mask.rows() != n || train_mask.cols() != n {
                    return outcome(false, format!("L={l} C={c} M={m}: training mask is not {n}x{n}"));
                }
                for i in 0..n {
                    for j in 0..n {
                        if train_mask.is_visible(i, j) != rule(i, j, l, c) {
                            return outcome(false, format!("L={l} C={c} M={m}: training cell ({i},{j})"));
                        }
                        cells += 1;
                    }
                }
                for cached in (0..=l).step_by(c) {
                    let inf = build_inference_mask(&g.with_cached(cached)?)?;
                    if inf.rows() != n - cached || inf.cols() != n {
                        return outcome(false, format!("L={l} C={c} M={m} l={cached}: wrong inference shape"));
                    }
                    for r in 0..n - cached {
                        for j in 0..n {
                            let want = rule(cached + r, j, l, c);
                            if inf.is_visible(r, j) != want || train_mask.is_visible(cached + r, j) != want {
                                return outcome(
                                    false,
                                    format!("L={l} C={c} M={m} l={cached}: inference cell ({r},{j})"),
                                );
                            }
                            cells += 1;
                        }
                    }
                    geoms += 1;
                }
            }
        }
    }
    let secs = start.elapsed().as_secs_f64();
    outcome(
        secs < 1.0,
        format!("{geoms} (L, C, M, l) geometries, {cells} cells match, {secs:.3}s"),
    )
}

fn batch_loss(model: &Model<f64>, batch: &[(Window, usize, usize, Tensor<f64>)]) -> Result<f64> {
    let mut total = 0.0;
    for (w, t, offset, clean) in batch {
        total += tensor::mse(&model.forward(&w.input(*t, *offset))?, clean)?;
    }
    Ok(total / batch.len() as f64)
}

fn gradient_check() -> Result<Option<Outcome>> {
    let cfg = model_cfg(4, 4, 2, 16, 2, 10)?;
    let h = 1e-5;
    let mut worst = 0.0f64;
    let mut checked = 0usize;
    for b in 0..5u64 {
        let mut model = random_model(cfg.clone(), 0.3, 70 + b)?;
        let mut rng = ChaCha8Rng::seed_from_u64(80 + b);
        let batch: Vec<_> = (0..3)
            .map(|_| {
                let w = Window::random(&cfg, &mut rng);
                let t = rng.random_range(0..cfg.schedule.num_steps);
                let offset = rng.random_range(0..cfg.temporal_period);
                let clean = uniform(&[cfg.geom.target_len, 2], -1.0, 1.0, &mut rng);
                (w, t, offset, clean)
            })
            .collect();

        let mut tape = Tape::new();
        let bound = model.bind(&mut tape, true);
        let mut terms = Vec::new();
        for (w, t, offset, clean) in &batch {
            let out = model.forward_on_tape(&mut tape, &bound, &w.input(*t, *offset))?;
            let c = tape.constant(clean);
            terms.push(tape.mse(out.pred, c)?);
        }
        let mut sum = terms[0];
        for t in &terms[1..] {
            sum = tape.add(sum, *t)?;
        }
        let loss = tape.scale(sum, 1.0 / batch.len() as f64);
        let mut grads = tape.backward(loss)?;
        let analytic: Vec<Tensor<f64>> = bound
            .vars()
            .iter()
            .map(|v| grads.take(*v).expect("trainable parameter"))
            .collect();
        drop(tape);

        for (pi, g) in analytic.iter().enumerate() {
            for k in 0..g.numel() {
                let orig = model.params().tensors()[pi].data()[k];
                model.params_mut().tensors_mut()[pi].data_mut()[k] = orig + h;
                let lp = batch_loss(&model, &batch)?;
                model.params_mut().tensors_mut()[pi].data_mut()[k] = orig - h;
                let lm = batch_loss(&model, &batch)?;
                model.params_mut().tensors_mut()[pi].data_mut()[k] = orig;
                let fd = (lp - lm) / (2.0 * h);
                let an = g.data()[k];
                // Key biases have an exactly zero gradient (softmax ignores a
                // per-row shift) and the difference quotient then returns
                // rounding noise near eps·loss/h, hence the floor.
                worst = worst.max((fd - an).abs() / (fd.abs() + an.abs()).max(1e-5));
                checked += 1;
            }
        }
    }
    outcome(
        worst < 1e-4,
        format!("{checked} parameter checks over 5 batches, max relative error {worst:.2e}"),
    )
}

fn schedule_round_trip() -> Result<Option<Outcome>> {
    let mut rng = ChaCha8Rng::seed_from_u64(90);
    let mut worst = 0.0f64;
    for kind in [ScheduleKind::Linear, ScheduleKind::Cosine] {
        for steps in [10, 50, 100] {
            let sched = make_schedule(steps, kind, 1e-4, 0.02)?;
            let ab: Vec<f64> = sched
                .betas()
                .iter()
                .scan(1.0, |p, b| {
                    *p *= 1.0 - b;
                    Some(*p)
                })
                .collect();
            let x0 = uniform(&[12, 2], -1.0, 1.0, &mut rng);
            let noise = gauss(&[12, 2], &mut rng);
            let mut x = sched.q_sample(&x0, steps - 1, &noise)?;
            // hand-rolled deterministic chain driven by the same perfect oracle
            let mut y: Vec<f64> = (0..x0.numel())
                .map(|i| ab[steps - 1].sqrt() * x0.data()[i] + (1.0 - ab[steps - 1]).sqrt() * noise.data()[i])
                .collect();
            for t in (0..steps).rev() {
                x = sched.denoise_step_x0(&x, &x0, t, None, false)?;
                if t == 0 {
                    y = x0.data().to_vec();
                } else {
                    let beta = sched.betas()[t];
                    let c0 = ab[t - 1].sqrt() * beta / (1.0 - ab[t]);
                    let ct = (1.0 - beta).sqrt() * (1.0 - ab[t - 1]) / (1.0 - ab[t]);
                    for (i, v) in y.iter_mut().enumerate() {
                        *v = c0 * x0.data()[i] + ct * *v;
                    }
                }
                for (a, b) in x.data().iter().zip(&y) {
                    worst = worst.max((a - b).abs());
                }
            }
            worst = worst.max(x.max_abs_diff(&x0));
        }
    }
    outcome(worst <= 1e-6, format!("linear and cosine, T in {{10,50,100}}, max error {worst:.2e}"))
}

fn smoke_config() -> Result<(RunConfig, Vec<Episode>)> {
    let mut c = RunConfig::default();
    c.task = Task::Reach2d;
    c.geom.history_len = 8;
    c.geom.target_len = 8;
    c.geom.valid_len = 4;
    c.geom.chunk = 4;
    c.schedule.num_steps = 20;
    c.train = TrainConfig {
        batch_size: 16,
        epochs: 150,
        learning_rate: 1e-3,
        val_fraction: 0.0,
        seed: 3,
        ..TrainConfig::default()
    };
    c.validate()?;
    let demos = gen_demos(Task::Reach2d, 10, 7, Task::Reach2d.default_max_steps())?;
    Ok((c, demos))
}

fn training_smoke() -> Result<Option<Outcome>> {
    let (c, demos) = smoke_config()?;
    let mc = c.model_config()?;
    let run = || -> Result<(f64, f64, TrainState, Duration)> {
        let start = Instant::now();
        let norm = Normalizer::fit(&demos, 2)?;
        let st = TrainState::fresh(mc.clone(), norm.clone(), c.train.seed)?;
        let set = WindowSet::new(&demos, &norm, &mc.geom);
        let sched = mc.schedule.build()?;
        let initial = fixed_draw_loss(&st.model, &set, &sched, c.train.sigma, c.train.seed)?;
        let (st, metrics) = train(&demos, &c.train, st, |_| {})?;
        let last = metrics.last().expect("at least one epoch").val_loss;
        Ok((initial, last, st, start.elapsed()))
    };
    let (initial, last, a, took) = run()?;
    let (_, last_again, b, _) = run()?;
    let same = last.to_bits() == last_again.to_bits() && a.model.params() == b.model.params();
    outcome(
        last <= 0.1 * initial && took.as_secs() <= 300 && same,
        format!(
            "fixed-draw loss {initial:.4} -> {last:.4} (ratio {:.3}) in {:.1}s, rerun identical: {same}",
            last / initial,
            took.as_secs_f64()
        ),
    )
}

fn bench_trend() -> Result<Option<Outcome>> {
    let cfg = BenchConfig::default();
    assert_eq!((cfg.n_blocks, cfg.d_model, cfg.num_steps), (4, 128, 50));
    let start = Instant::now();
    let rows = bench_cache(&cfg, None)?;
    let secs = start.elapsed().as_secs_f64();
    let faster = rows.iter().filter(|r| r.history_len >= 16).all(|r| r.cached_ms < r.uncached_ms);
    let increasing = rows.windows(2).all(|w| w[1].speedup > w[0].speedup);
    let table: Vec<String> = rows
        .iter()
        .map(|r| format!("L={} {:.1}/{:.1}ms x{:.2}", r.history_len, r.cached_ms, r.uncached_ms, r.speedup))
        .collect();
    outcome(
        faster && increasing && secs <= 900.0,
        format!("{} ({secs:.0}s)", table.join(", ")),
    )
}

fn checkpoint_round_trip() -> Result<Option<Outcome>> {
    let mut c = RunConfig::default();
    c.geom.history_len = 8;
    c.geom.target_len = 8;
    c.geom.valid_len = 4;
    c.geom.chunk = 4;
    let mut st = TrainState::fresh(c.model_config()?, Normalizer::identity(2), 11)?;
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    for t in st.model.params_mut().tensors_mut() {
        for v in t.data_mut() {
            *v += rng.random_range(-0.1f32..0.1);
        }
    }
    st.step = 42;
    st.optim.step = 42;
    let dir = tempfile::tempdir()?;
    let (first, second) = (dir.path().join("a.ck"), dir.path().join("b.ck"));
    Checkpoint::from_state(&c, &st, true).save(&first)?;
    let loaded = Checkpoint::load(&first)?;
    loaded.save(&second)?;
    let identical = std::fs::read(&first)? == std::fs::read(&second)?;

    let model = loaded.model()?;
    let mc = model.config().clone();
    let mut exact = true;
    for k in 0..5 {
        let w = Window::random(&mc, &mut rng);
        let history = w.history.cast::<f32>();
        let history_obs = w.history_obs.cast::<f32>();
        let targets = w.targets.cast::<f32>();
        let obs = w.obs.cast::<f32>();
        let inp = WindowInput {
            history: &history,
            history_obs: &history_obs,
            targets: &targets,
            obs: &obs,
            t: k,
            offset: 3 * k,
        };
        exact &= st.model.forward(&inp)?.data() == model.forward(&inp)?.data();
    }
    outcome(
        identical && exact,
        format!("save-load-save byte-identical: {identical}, outputs bit-exact: {exact}"),
    )
}

/// Shared setup for the pusht_lite trend criteria.
struct Trends {
    demos: Vec<Episode>,
    base: RunConfig,
}

const TREND_SEEDS: [u64; 3] = [0, 1, 2];
const NOISE: [f64; 3] = [0.0, 0.05, 0.1];

impl Trends {
    fn new() -> Result<Self> {
        let mut c = RunConfig::default();
        c.task = Task::PushtLite;
        c.geom.history_len = 8;
        c.geom.target_len = 8;
        c.geom.valid_len = 4;
        c.geom.chunk = 4;
        c.model.d_model = 64;
        c.model.d_ff = 128;
        c.schedule.num_steps = 20;
        c.train.epochs = 300;
        c.train.learning_rate = 1e-3;
        c.train.seed = 0;
        c.validate()?;
        let demos = gen_demos(Task::PushtLite, 200, 1000, Task::PushtLite.default_max_steps())?;
        Ok(Self { demos, base: c })
    }

    fn train(&self, history_len: usize, sigma: f64) -> Result<TrainState> {
        let mut c = self.base.clone();
        c.geom.history_len = history_len;
        c.train.sigma = sigma;
        c.validate()?;
        let norm = Normalizer::fit(&self.demos, 2)?;
        let st = TrainState::fresh(c.model_config()?, norm, c.train.seed)?;
        Ok(train(&self.demos, &c.train, st, |_| {})?.0)
    }

    /// Mean success over the evaluation seeds at each noise level.
    fn success(&self, st: &TrainState, noise: &[f64]) -> Result<Vec<f64>> {
        noise
            .iter()
            .map(|&n| {
                let mut total = 0.0;
                for seed in TREND_SEEDS {
                    let policy = EvalPolicy::Model {
                        model: &st.model,
                        normalizer: &st.normalizer,
                        use_cache: true,
                    };
                    let degrade = DegradeSpec {
                        noise_scale: n,
                        dropout_prob: 0.0,
                    };
                    let (s, _) = evaluate(Task::PushtLite, policy, 100, 500 + seed, 300, &degrade)?;
                    total += s.success_rate;
                }
                Ok(total / TREND_SEEDS.len() as f64)
            })
            .collect()
    }
}

fn fmt_rates(r: &[f64]) -> String {
    r.iter().map(|v| format!("{v:.3}")).collect::<Vec<_>>().join("/")
}

fn main() -> ExitCode {
    let trends_on = std::env::var("CDP_ACCEPTANCE_TRENDS").is_ok_and(|v| v == "1");
    let mut trends: Option<(Trends, TrainState)> = None;
    let mut results: Vec<(usize, &str, Result<Option<Outcome>>, f64)> = Vec::new();
    let criteria: [(usize, &str); 10] = [
        (1, "cache_equivalence"),
        (2, "history_kv_timestep_invariance"),
        (3, "mask_oracle"),
        (4, "gradient_check"),
        (5, "schedule_round_trip"),
        (6, "training_smoke"),
        (7, "bench_cache_trend"),
        (8, "noise_robustness_trend"),
        (9, "perturbation_ablation"),
        (10, "checkpoint_round_trip"),
    ];
    for (id, name) in criteria {
        let start = Instant::now();
        let r = match id {
            1 => cache_equivalence(),
            2 => history_kv_invariance(),
            3 => mask_oracle(),
            4 => gradient_check(),
            5 => schedule_round_trip(),
            6 => training_smoke(),
            7 => bench_trend(),
            8 if trends_on => (|| {
                let t = Trends::new()?;
                let cdp = t.train(t.base.geom.history_len, t.base.train.sigma)?;
                let flat = t.train(0, t.base.train.sigma)?;
                let a = t.success(&cdp, &NOISE)?;
                let b = t.success(&flat, &NOISE)?;
                let (drop_a, drop_b) = (a[0] - a[2], b[0] - b[2]);
                let detail = format!(
                    "success at noise 0/0.05/0.1: history {} vs L=0 {}; drop {drop_a:.3} vs {drop_b:.3}",
                    fmt_rates(&a),
                    fmt_rates(&b)
                );
                trends = Some((t, cdp));
                outcome(a[2] >= b[2] && drop_a <= drop_b, detail)
            })(),
            9 if trends_on => (|| {
                let (t, cdp) = match trends.take() {
                    Some(v) => v,
                    None => {
                        let t = Trends::new()?;
                        let cdp = t.train(t.base.geom.history_len, t.base.train.sigma)?;
                        (t, cdp)
                    }
                };
                let tiny = t.train(t.base.geom.history_len, 1e-6)?;
                let a = t.success(&cdp, &[0.0])?[0];
                let b = t.success(&tiny, &[0.0])?[0];
                outcome(a >= b, format!("clean success sigma=1/6 {a:.3} vs sigma=1e-6 {b:.3}"))
            })(),
            8 | 9 => Ok(None),
            10 => checkpoint_round_trip(),
            _ => unreachable!(),
        };
        results.push((id, name, r, start.elapsed().as_secs_f64()));
        let (id, name, r, secs) = results.last().expect("just pushed");
        match r {
            Ok(Some(o)) => println!(
                "{} {id:>2} {name}: {} [{secs:.1}s]",
                if o.passed { "PASS" } else { "FAIL" },
                o.detail
            ),
            Ok(None) => println!("SKIP {id:>2} {name}: set CDP_ACCEPTANCE_TRENDS=1 to run"),
            Err(e) => println!("FAIL {id:>2} {name}: error: {e} [{secs:.1}s]"),
        }
    }
    let failed = results
        .iter()
        .filter(|(_, _, r, _)| !matches!(r, Ok(None) | Ok(Some(Outcome { passed: true, .. }))))
        .count();
    println!("{} criteria run, {failed} failed", results.iter().filter(|r| !matches!(r.2, Ok(None))).count());
    if failed == 0 {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
