//! Self-check suite behind `cdp verify`. Every property compares the library
//! against an oracle written here from first principles, on small f64 cases.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::checkpoint::Checkpoint;
use crate::config::RunConfig;
use crate::dataset::Normalizer;
use crate::envs::Task;
use crate::error::Result;
use crate::masking::{build_inference_mask, build_training_mask, AttentionMask, PolicyGeometry};
use crate::model::{temporal_indices, Model, ModelConfig, WindowInput};
use crate::rollout::init_session;
use crate::schedule::{make_schedule, ScheduleConfig, ScheduleKind};
use crate::tape::{Tape, Var};
use crate::tensor::{self, Tensor};
use crate::training::TrainState;

#[derive(Clone, Copy, Debug, Default)]
pub struct VerifyOptions {
    /// Swap in a training mask whose history rows also see earlier chunks.
    /// The mask property must then fail; used to prove the suite can fail.
    pub corrupt_mask: bool,
}

#[derive(Clone, Debug)]
pub struct Check {
    pub name: &'static str,
    pub passed: bool,
    pub detail: String,
}

impl Check {
    pub fn line(&self) -> String {
        format!(
            "{} {}: {}",
            if self.passed { "PASS" } else { "FAIL" },
            self.name,
            self.detail
        )
    }
}

type Outcome = Result<(bool, String)>;

pub fn run_all(opts: &VerifyOptions) -> Vec<Check> {
    let props: Vec<(&'static str, Box<dyn Fn() -> Outcome>)> = vec![
        ("mask_training_exhaustive", Box::new(move || mask_training(opts.corrupt_mask))),
        ("mask_inference_exhaustive", Box::new(mask_inference)),
        ("mask_inference_drops_rows", Box::new(mask_drop_rows)),
        ("masked_softmax_exact_zeros", Box::new(masked_softmax)),
        ("tape_op_gradients", Box::new(tape_gradients)),
        ("model_gradient", Box::new(model_gradient)),
        ("history_kv_timestep_invariant", Box::new(history_t_invariance)),
        ("history_ignores_targets", Box::new(causality)),
        ("chunk_isolation", Box::new(chunk_isolation)),
        ("extraction_matches_forward", Box::new(extraction_matches_forward)),
        ("sliding_cache_matches_recompute", Box::new(sliding_cache)),
        ("rollout_cache_equivalence", Box::new(rollout_equivalence)),
        ("schedule_round_trip", Box::new(schedule_round_trip)),
        ("alpha_bar_cumulative", Box::new(alpha_bar_cumulative)),
        ("checkpoint_round_trip", Box::new(checkpoint_round_trip)),
        ("temporal_index_modular", Box::new(temporal_modular)),
    ];
    props
        .into_iter()
        .map(|(name, f)| {
            let (passed, detail) = match f() {
                Ok(r) => r,
                Err(e) => (false, format!("error: {e}")),
            };
            Check { name, passed, detail }
        })
        .collect()
}

/// Every (L, M, C) with L ≤ 12, M ≤ 6 and C dividing L (C ≤ 4 when L = 0).
fn small_geometries() -> Vec<PolicyGeometry> {
    let mut out = Vec::new();
    for l in 0..=12 {
        for c in 1..=l.max(4) {
            if l % c != 0 {
                continue;
            }
            for m in c.max(1)..=6 {
                if let Ok(g) = PolicyGeometry::new(l, m, c) {
                    out.push(g);
                }
            }
        }
    }
    out
}

/// Oracle: history token i sees the tokens of its own chunk, targets see all.
fn oracle_visible(i: usize, j: usize, l: usize, c: usize) -> bool {
    if i >= l {
        return true;
    }
    let start = i - i % c;
    (start..start + c).contains(&j)
}

fn corrupted_training_mask(g: &PolicyGeometry) -> AttentionMask {
    let n = g.total_len();
    AttentionMask::from_fn(n, n, |i, j| {
        if i >= g.history_len {
            true
        } else {
            j < (i / g.chunk + 1) * g.chunk
        }
    })
}

fn mask_training(corrupt: bool) -> Outcome {
    let geoms = small_geometries();
    let mut cells = 0usize;
    for g in &geoms {
        let m = if corrupt {
            corrupted_training_mask(g)
        } else {
            build_training_mask(g)?
        };
        let n = g.total_len();
        if m.rows() != n || m.cols() != n {
            return Ok((false, format!("{g:?}: shape {}x{}", m.rows(), m.cols())));
        }
        for i in 0..n {
            for j in 0..n {
                cells += 1;
                if m.is_visible(i, j) != oracle_visible(i, j, g.history_len, g.chunk) {
                    return Ok((false, format!("L={} M={} C={} cell ({i},{j})", g.history_len, g.target_len, g.chunk)));
                }
            }
        }
    }
    Ok((true, format!("{} geometries, {cells} cells", geoms.len())))
}

fn mask_inference() -> Outcome {
    let mut cases = 0;
    for g in small_geometries() {
        for cached in (0..=g.history_len).step_by(g.chunk) {
            let m = build_inference_mask(&g.with_cached(cached)?)?;
            let n = g.total_len();
            if m.rows() != n - cached || m.cols() != n {
                return Ok((false, format!("{g:?} l={cached}: wrong shape")));
            }
            for r in 0..m.rows() {
                for j in 0..n {
                    if m.is_visible(r, j) != oracle_visible(cached + r, j, g.history_len, g.chunk) {
                        return Ok((false, format!("{g:?} l={cached}: cell ({r},{j})")));
                    }
                }
            }
            cases += 1;
        }
    }
    Ok((true, format!("{cases} (geometry, cached length) pairs")))
}

fn mask_drop_rows() -> Outcome {
    let mut cases = 0;
    for g in small_geometries() {
        let full = build_training_mask(&g)?;
        for cached in (0..=g.history_len).step_by(g.chunk) {
            if build_inference_mask(&g.with_cached(cached)?)? != full.drop_rows(cached)? {
                return Ok((false, format!("{g:?} l={cached}")));
            }
            cases += 1;
        }
    }
    Ok((true, format!("{cases} pairs")))
}

fn rand_t(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor<f64> {
    Tensor::from_fn(shape, |_| rng.random_range(-1.0..1.0))
}

fn masked_softmax() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    for _ in 0..200 {
        let (r, c) = (rng.random_range(1..8), rng.random_range(1..8));
        let keep: Vec<usize> = (0..r).map(|_| rng.random_range(0..c)).collect();
        let pattern: Vec<bool> = (0..r * c).map(|_| rng.random_bool(0.5)).collect();
        let mask = AttentionMask::from_fn(r, c, |i, j| j == keep[i] || pattern[i * c + j]);
        let logits = Tensor::from_fn(&[r, c], |_| rng.random_range(-30.0..30.0));
        let p = tensor::softmax_masked(&logits, &mask)?;
        for i in 0..r {
            let mut sum = 0.0f64;
            for j in 0..c {
                let v = p.get2(i, j);
                if !mask.is_visible(i, j) && v != 0.0 {
                    return Ok((false, format!("blocked ({i},{j}) has weight {v:e}")));
                }
                sum += v;
            }
            if (sum - 1.0).abs() > 1e-12 {
                return Ok((false, format!("row {i} sums to {sum}")));
            }
        }
    }
    Ok((true, "200 random masks, blocked weights exactly 0".into()))
}

/// Largest normwise relative error between tape and central-difference
/// gradients over all inputs.
fn fd_error(inputs: &[Tensor<f64>], f: &dyn Fn(&mut Tape<'_, f64>, &[Var]) -> Result<Var>) -> Result<f64> {
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.param(t)).collect();
    let loss = f(&mut tape, &vars)?;
    let grads = tape.backward(loss)?;
    let eval = |ins: &[Tensor<f64>]| -> Result<f64> {
        let mut t = Tape::inference();
        let vs: Vec<Var> = ins.iter().map(|x| t.input(x.clone())).collect();
        let l = f(&mut t, &vs)?;
        Ok(t.value(l).data()[0])
    };
    let h = 1e-5;
    let mut worst = 0.0f64;
    for (k, inp) in inputs.iter().enumerate() {
        let analytic = grads.get(vars[k]).expect("param has a gradient");
        let (mut num, mut den) = (0.0, 0.0);
        for e in 0..inp.numel() {
            let mut plus = inputs.to_vec();
            plus[k].data_mut()[e] += h;
            let mut minus = inputs.to_vec();
            minus[k].data_mut()[e] -= h;
            let fd = (eval(&plus)? - eval(&minus)?) / (2.0 * h);
            let a = analytic.data()[e];
            num += (a - fd) * (a - fd);
            den += a * a + fd * fd;
        }
        worst = worst.max(num.sqrt() / den.sqrt().max(1e-12));
    }
    Ok(worst)
}

fn tape_gradients() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let mask = AttentionMask::from_fn(4, 5, |i, j| j <= i + 1);
    let w = rand_t(&[4, 5], &mut rng);
    let tgt = rand_t(&[3, 6], &mut rng);
    let mut worst = 0.0f64;
    for _ in 0..5 {
        worst = worst.max(fd_error(&[rand_t(&[3, 4], &mut rng), rand_t(&[4, 2], &mut rng)], &|t, v| {
            let y = t.matmul(v[0], v[1])?;
            let y2 = t.mul(y, y)?;
            Ok(t.sum(y2))
        })?);
        worst = worst.max(fd_error(&[rand_t(&[3, 4], &mut rng), rand_t(&[5, 4], &mut rng)], &|t, v| {
            let y = t.matmul_nt(v[0], v[1])?;
            let g = t.gelu(y);
            Ok(t.sum(g))
        })?);
        worst = worst.max(fd_error(&[rand_t(&[4, 5], &mut rng)], &|t, v| {
            let s = t.softmax_masked(v[0], &mask)?;
            let wv = t.input(w.clone());
            let p = t.mul(s, wv)?;
            Ok(t.sum(p))
        })?);
        worst = worst.max(fd_error(
            &[rand_t(&[3, 6], &mut rng), rand_t(&[6], &mut rng), rand_t(&[6], &mut rng)],
            &|t, v| {
                let y = t.layer_norm(v[0], v[1], v[2], 1e-5)?;
                let tv = t.input(tgt.clone());
                t.mse(y, tv)
            },
        )?);
    }
    Ok((worst < 1e-4, format!("max relative error {worst:.2e}")))
}

fn tiny(l: usize, m: usize, c: usize, blocks: usize) -> Result<ModelConfig> {
    let geom = PolicyGeometry::new(l, m, c)?;
    let cfg = ModelConfig {
        action_dim: 2,
        obs_dim: 3,
        d_model: 8,
        n_heads: 2,
        n_blocks: blocks,
        d_ff: 12,
        temporal_period: ModelConfig::default_period(&geom),
        n_obs_tokens: 1,
        geom,
        schedule: ScheduleConfig {
            num_steps: 10,
            kind: ScheduleKind::Cosine,
            ..ScheduleConfig::default()
        },
    };
    cfg.validate()?;
    Ok(cfg)
}

/// Model with every parameter drawn uniformly, so gains and biases are not
/// trivially one and zero.
fn random_model(cfg: ModelConfig, seed: u64) -> Result<Model<f64>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut m = Model::<f64>::init(cfg, &mut rng)?;
    for t in m.params_mut().tensors_mut() {
        for v in t.data_mut() {
            *v = rng.random_range(-0.5..0.5);
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
            history: rand_t(&[g.history_len, cfg.action_dim], rng),
            history_obs: rand_t(&[g.num_history_chunks(), cfg.obs_dim], rng),
            targets: rand_t(&[g.target_len, cfg.action_dim], rng),
            obs: rand_t(&[cfg.obs_dim], rng),
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

fn model_gradient() -> Outcome {
    let cfg = tiny(4, 2, 2, 1)?;
    let model = random_model(cfg.clone(), 3)?;
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let w = Window::random(&cfg, &mut rng);
    let clean = rand_t(&[2, 2], &mut rng);
    let inp = w.input(6, 5);
    let mut tape = Tape::new();
    let b = model.bind(&mut tape, true);
    let out = model.forward_on_tape(&mut tape, &b, &inp)?;
    let c = tape.constant(&clean);
    let loss = tape.mse(out.pred, c)?;
    let grads = tape.backward(loss)?;
    let h = 1e-5;
    let mut worst = 0.0f64;
    let mut checked = 0;
    for (pi, v) in b.vars().iter().enumerate() {
        let g = grads.get(*v).expect("trainable param");
        for k in 0..g.numel() {
            let mut mp = model.clone();
            mp.params_mut().tensors_mut()[pi].data_mut()[k] += h;
            let mut mm = model.clone();
            mm.params_mut().tensors_mut()[pi].data_mut()[k] -= h;
            let lp = tensor::mse(&mp.forward(&inp)?, &clean)?;
            let lm = tensor::mse(&mm.forward(&inp)?, &clean)?;
            let fd = (lp - lm) / (2.0 * h);
            let an = g.data()[k];
            worst = worst.max((fd - an).abs() / (fd.abs() + an.abs()).max(1e-6));
            checked += 1;
        }
    }
    Ok((worst < 1e-4, format!("{checked} parameters, max relative error {worst:.2e}")))
}

fn history_t_invariance() -> Outcome {
    let cfg = tiny(6, 4, 2, 2)?;
    let model = random_model(cfg.clone(), 5)?;
    let w = Window::random(&cfg, &mut ChaCha8Rng::seed_from_u64(6));
    let (_, base) = model.forward_with_history_kv(&w.input(0, 3))?;
    for t in 1..cfg.schedule.num_steps {
        let (_, kv) = model.forward_with_history_kv(&w.input(t, 3))?;
        if kv != base {
            return Ok((false, format!("history keys/values differ at t={t}")));
        }
    }
    Ok((true, format!("bit-identical across {} timesteps", cfg.schedule.num_steps)))
}

fn causality() -> Outcome {
    let cfg = tiny(6, 4, 3, 2)?;
    let model = random_model(cfg.clone(), 7)?;
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let a = Window::random(&cfg, &mut rng);
    for trial in 0..10 {
        let mut b = Window::random(&cfg, &mut rng);
        b.history = a.history.clone();
        b.history_obs = a.history_obs.clone();
        let (_, ka) = model.forward_with_history_kv(&a.input(2, 1))?;
        let (_, kb) = model.forward_with_history_kv(&b.input(2, 1))?;
        if ka != kb {
            return Ok((false, format!("trial {trial}: targets or current obs leaked into history")));
        }
    }
    Ok((true, "10 target/obs perturbations, history unchanged".into()))
}

fn chunk_isolation() -> Outcome {
    let cfg = tiny(8, 2, 2, 3)?;
    let model = random_model(cfg.clone(), 9)?;
    let mut rng = ChaCha8Rng::seed_from_u64(10);
    let base = Window::random(&cfg, &mut rng);
    let (_, kv0) = model.forward_with_history_kv(&base.input(0, 0))?;
    let c = cfg.geom.chunk;
    for chunk in 0..cfg.geom.num_history_chunks() {
        let mut w = Window {
            history: base.history.clone(),
            history_obs: base.history_obs.clone(),
            targets: base.targets.clone(),
            obs: base.obs.clone(),
        };
        w.history.data_mut()[chunk * c * 2] += 0.4;
        w.history_obs.data_mut()[chunk * 3] -= 0.3;
        let (_, kv) = model.forward_with_history_kv(&w.input(0, 0))?;
        let mut moved = false;
        for (p, (x, y)) in kv0.iter().zip(&kv).enumerate() {
            for r in 0..cfg.geom.history_len {
                let same = x.keys.row(r) == y.keys.row(r) && x.values.row(r) == y.values.row(r);
                if r / c == chunk {
                    moved |= !same;
                } else if !same {
                    return Ok((false, format!("block {p}: row {r} moved after perturbing chunk {chunk}")));
                }
            }
        }
        if !moved {
            return Ok((false, format!("perturbing chunk {chunk} changed nothing")));
        }
    }
    Ok((true, "each chunk's perturbation stays inside the chunk".into()))
}

fn extraction_matches_forward() -> Outcome {
    let mut worst = 0.0f64;
    for (l, m, c, seed) in [(0, 3, 1, 11), (4, 2, 2, 12), (6, 4, 3, 13), (8, 4, 4, 14), (12, 6, 2, 15)] {
        let cfg = tiny(l, m, c, 2)?;
        let model = random_model(cfg.clone(), seed)?;
        let mut w = Window::random(&cfg, &mut ChaCha8Rng::seed_from_u64(seed));
        let n = cfg.geom.num_history_chunks();
        w.history_obs = Tensor::new(vec![n, 3], w.obs.data().repeat(n))?;
        let (full, kv) = model.forward_with_history_kv(&w.input(4, 7))?;
        let tokens = model.encode_observation(&w.obs)?;
        let ext = model.extract_history_kv(&w.history, 0, 7, &tokens, &[])?;
        for (e, f) in ext.iter().zip(&kv) {
            worst = worst.max(e.keys.max_abs_diff(&f.keys)).max(e.values.max_abs_diff(&f.values));
        }
        let pred = model.denoise_with_kv(&w.targets, 4, 7, &tokens, &ext)?;
        worst = worst.max(pred.max_abs_diff(&full));
    }
    Ok((worst <= 1e-12, format!("max diff {worst:.2e}")))
}

fn sliding_cache() -> Outcome {
    let cfg = tiny(8, 4, 2, 2)?;
    let model = random_model(cfg.clone(), 16)?;
    let sched = cfg.schedule.build()?;
    let mut s = init_session(&model, None, true, ChaCha8Rng::seed_from_u64(17))?;
    let mut obs_rng = ChaCha8Rng::seed_from_u64(18);
    let (l, c) = (cfg.geom.history_len, cfg.geom.chunk);
    let targets = Tensor::zeros(&[cfg.geom.target_len, 2]);
    let mut worst = 0.0f64;
    for _ in 0..8 {
        let obs = rand_t(&[3], &mut obs_rng);
        s.ar_step(&model, &sched, &obs)?;
        // the newest chunk is not cached yet; every older one must match a
        // from-scratch forward over the slid window
        let inp = WindowInput {
            history: s.history(),
            history_obs: s.history_obs(),
            targets: &targets,
            obs: &obs,
            t: 0,
            offset: s.offset(&model),
        };
        let (_, scratch) = model.forward_with_history_kv(&inp)?;
        let cached = s.cache().trailing(l)?;
        for (x, y) in cached.iter().zip(&scratch) {
            let kx = tensor::slice_rows(&x.keys, c, l - c)?;
            let vx = tensor::slice_rows(&x.values, c, l - c)?;
            let ky = tensor::slice_rows(&y.keys, 0, l - c)?;
            let vy = tensor::slice_rows(&y.values, 0, l - c)?;
            worst = worst.max(kx.max_abs_diff(&ky)).max(vx.max_abs_diff(&vy));
        }
    }
    Ok((worst <= 1e-9, format!("8 slides, max diff {worst:.2e}")))
}

fn rollout_equivalence() -> Outcome {
    let mut worst = 0.0f64;
    for (l, m, c, seed) in [(4, 2, 2, 19), (6, 4, 3, 20), (8, 4, 2, 21), (0, 3, 3, 22)] {
        let model = random_model(tiny(l, m, c, 2)?, seed)?;
        let sched = model.config().schedule.build()?;
        let mut a = init_session(&model, None, true, ChaCha8Rng::seed_from_u64(seed))?;
        let mut b = init_session(&model, None, false, ChaCha8Rng::seed_from_u64(seed))?;
        let mut obs_rng = ChaCha8Rng::seed_from_u64(seed + 100);
        for _ in 0..10 {
            let obs = rand_t(&[3], &mut obs_rng);
            let (x, _) = a.ar_step(&model, &sched, &obs)?;
            let (y, _) = b.ar_step(&model, &sched, &obs)?;
            worst = worst.max(x.max_abs_diff(&y));
        }
    }
    Ok((worst <= 1e-9, format!("4 geometries × 10 AR steps, max diff {worst:.2e}")))
}

fn schedule_round_trip() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(23);
    let mut worst = 0.0f64;
    for kind in [ScheduleKind::Linear, ScheduleKind::Cosine] {
        let sched = make_schedule(50, kind, 1e-4, 0.02)?;
        let gauss = |rng: &mut ChaCha8Rng| Tensor::from_fn(&[12, 2], |_| StandardNormal.sample(rng));
        let x0 = rand_t(&[12, 2], &mut rng);
        let noise = gauss(&mut rng);
        let mut x = sched.q_sample(&x0, 49, &noise)?;
        for t in (0..50).rev() {
            let z = gauss(&mut rng);
            let next = sched.denoise_step_x0(&x, &x0, t, Some(&z), true)?;
            if t > 0 {
                // posterior mean from betas alone
                let ab: Vec<f64> = sched
                    .betas()
                    .iter()
                    .scan(1.0, |p, b| {
                        *p *= 1.0 - b;
                        Some(*p)
                    })
                    .collect();
                let beta = sched.betas()[t];
                let c0 = ab[t - 1].sqrt() * beta / (1.0 - ab[t]);
                let ct = (1.0 - beta).sqrt() * (1.0 - ab[t - 1]) / (1.0 - ab[t]);
                let sd = (beta * (1.0 - ab[t - 1]) / (1.0 - ab[t])).sqrt();
                for i in 0..x.numel() {
                    let want = c0 * x0.data()[i] + ct * x.data()[i] + sd * z.data()[i];
                    worst = worst.max((want - next.data()[i]).abs());
                }
            }
            x = next;
        }
        worst = worst.max(x.max_abs_diff(&x0));
    }
    Ok((worst <= 1e-6, format!("linear and cosine, max error {worst:.2e}")))
}

fn alpha_bar_cumulative() -> Outcome {
    for kind in [ScheduleKind::Linear, ScheduleKind::Cosine] {
        for steps in [2, 10, 50, 100] {
            let s = make_schedule(steps, kind, 1e-4, 0.02)?;
            let mut prod = 1.0;
            for t in 0..steps {
                let b = s.betas()[t];
                if !(b > 0.0 && b < 1.0) {
                    return Ok((false, format!("{kind:?} T={steps}: beta[{t}]={b}")));
                }
                prod *= 1.0 - b;
                if (s.alpha_bars()[t] - prod).abs() > 1e-12 || (s.alphas()[t] - (1.0 - b)).abs() > 1e-15 {
                    return Ok((false, format!("{kind:?} T={steps}: alpha_bar[{t}] is not the running product")));
                }
                if t > 0 && s.alpha_bars()[t] >= s.alpha_bars()[t - 1] {
                    return Ok((false, format!("{kind:?} T={steps}: not strictly decreasing at {t}")));
                }
            }
        }
    }
    Ok((true, "linear and cosine, T in {2,10,50,100}".into()))
}

fn checkpoint_round_trip() -> Outcome {
    let mut rc = RunConfig::default();
    rc.task = Task::Reach2d;
    rc.geom.history_len = 4;
    rc.geom.target_len = 4;
    rc.geom.valid_len = 2;
    rc.geom.chunk = 2;
    rc.model.d_model = 8;
    rc.model.d_ff = 8;
    rc.schedule.num_steps = 5;
    let state = TrainState::fresh(rc.model_config()?, Normalizer::identity(2), 24)?;
    let bytes = Checkpoint::from_state(&rc, &state, true).to_bytes();
    let loaded = Checkpoint::from_bytes(&bytes)?;
    if loaded.to_bytes() != bytes {
        return Ok((false, "re-saved bytes differ".into()));
    }
    let restored = loaded.model()?;
    let mut rng = ChaCha8Rng::seed_from_u64(25);
    let r = |s: &[usize], rng: &mut ChaCha8Rng| Tensor::<f32>::from_fn(s, |_| rng.random_range(-1.0..1.0));
    let (h, ho, tg, o) = (r(&[4, 2], &mut rng), r(&[2, 4], &mut rng), r(&[4, 2], &mut rng), r(&[4], &mut rng));
    let inp = WindowInput {
        history: &h,
        history_obs: &ho,
        targets: &tg,
        obs: &o,
        t: 3,
        offset: 2,
    };
    if restored.forward(&inp)? != state.model.forward(&inp)? {
        return Ok((false, "restored model output differs".into()));
    }
    Ok((true, format!("{} bytes, outputs bit-identical", bytes.len())))
}

fn temporal_modular() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(26);
    for _ in 0..500 {
        let period = rng.random_range(1..64);
        let (first, n, off) = (rng.random_range(0..40), rng.random_range(0..20), rng.random_range(0..200));
        let idx = temporal_indices(first, n, off, period);
        for (i, v) in idx.iter().enumerate() {
            if *v != (off + first + i) % period {
                return Ok((false, format!("period {period} offset {off}: index {i} is {v}")));
            }
        }
    }
    // a window straddling the wrap equals offset 0 on a table rotated by the offset
    let cfg = tiny(4, 2, 2, 1)?;
    let model = random_model(cfg.clone(), 27)?;
    let w = Window::random(&cfg, &mut ChaCha8Rng::seed_from_u64(28));
    let period = cfg.temporal_period;
    let off = period - 3;
    let mut rotated = model.clone();
    let names = model.params().names().to_vec();
    let k = names.iter().position(|n| n == "temporal_embed").expect("temporal table");
    let table = &model.params().tensors()[k];
    let d = table.cols();
    rotated.params_mut().tensors_mut()[k] =
        Tensor::from_fn(&[period, d], |i| table.get2((i / d + off) % period, i % d));
    let a = model.forward(&w.input(1, off))?;
    let b = rotated.forward(&w.input(1, 0))?;
    Ok((a == b, "500 random index sets, wrap-around matches rotated table".into()))
}
