//! Toy 2D tasks with scripted experts.
//!
//! `reach2d` moves a point agent to a goal. `pusht_lite` pushes a square
//! block to a fixed target pose with a circular agent under a quasi-static
//! contact model: penetration is resolved by translating the block along the
//! contacted face normal and rotating it in proportion to the contact offset.
//! Actions are position deltas clamped to `MAX_DELTA` per axis.

use std::f64::consts::PI;
use std::fmt;
use std::str::FromStr;

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::dataset::Episode;
use crate::error::{CdpError, Result};
use crate::rng::{substream, Stream};

pub const MAX_DELTA: f64 = 0.05;
pub const REACH_TOL: f64 = 0.03;

pub const BLOCK_HALF: f64 = 0.05;
pub const AGENT_RADIUS: f64 = 0.02;
pub const PUSH_POS_TOL: f64 = 0.05;
pub const PUSH_ANGLE_TOL: f64 = 10.0 * PI / 180.0;
pub const PUSH_TARGET: [f64; 3] = [0.5, 0.5, 0.0];
/// Rotation per unit (tangential offset × penetration), scaled by block size.
const ROT_GAIN: f64 = 0.25 / (BLOCK_HALF * BLOCK_HALF);
const SUBSTEPS: usize = 5;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Task {
    #[serde(rename = "reach2d")]
    Reach2d,
    #[serde(rename = "pusht_lite")]
    PushtLite,
}

impl Task {
    pub fn obs_dim(self) -> usize {
        match self {
            Task::Reach2d => 4,
            Task::PushtLite => 8,
        }
    }

    pub fn action_dim(self) -> usize {
        2
    }

    /// Episode step budget used by default for demos and evaluation.
    pub fn default_max_steps(self) -> usize {
        match self {
            Task::Reach2d => 60,
            Task::PushtLite => 300,
        }
    }
}

impl fmt::Display for Task {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Task::Reach2d => "reach2d",
            Task::PushtLite => "pusht_lite",
        })
    }
}

impl FromStr for Task {
    type Err = CdpError;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "reach2d" => Ok(Task::Reach2d),
            "pusht_lite" => Ok(Task::PushtLite),
            other => Err(CdpError::Config(format!("unknown task {other:?}"))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ReachState {
    pub agent: [f64; 2],
    pub goal: [f64; 2],
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PushState {
    pub agent: [f64; 2],
    pub block: [f64; 2],
    pub angle: f64,
    pub target: [f64; 3],
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum EnvState {
    Reach(ReachState),
    Push(PushState),
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DegradeSpec {
    pub noise_scale: f64,
    pub dropout_prob: f64,
}

impl DegradeSpec {
    pub fn clean() -> Self {
        Self::default()
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.noise_scale >= 0.0 && self.noise_scale.is_finite()) {
            return Err(CdpError::Config(format!("noise_scale {} must be >= 0", self.noise_scale)));
        }
        if !(0.0..1.0).contains(&self.dropout_prob) {
            return Err(CdpError::Config(format!(
                "dropout_prob {} must be in [0, 1)",
                self.dropout_prob
            )));
        }
        Ok(())
    }
}

fn clamp_delta(a: [f64; 2]) -> [f64; 2] {
    [a[0].clamp(-MAX_DELTA, MAX_DELTA), a[1].clamp(-MAX_DELTA, MAX_DELTA)]
}

fn clamp_unit(p: [f64; 2]) -> [f64; 2] {
    [p[0].clamp(0.0, 1.0), p[1].clamp(0.0, 1.0)]
}

/// Wrap into [−π, π).
pub fn wrap_angle(a: f64) -> f64 {
    let w = (a + PI).rem_euclid(2.0 * PI) - PI;
    if w >= PI {
        -PI
    } else {
        w
    }
}

fn rot(v: [f64; 2], a: f64) -> [f64; 2] {
    let (s, c) = a.sin_cos();
    [c * v[0] - s * v[1], s * v[0] + c * v[1]]
}

fn sub(a: [f64; 2], b: [f64; 2]) -> [f64; 2] {
    [a[0] - b[0], a[1] - b[1]]
}

fn add(a: [f64; 2], b: [f64; 2]) -> [f64; 2] {
    [a[0] + b[0], a[1] + b[1]]
}

fn scale2(a: [f64; 2], s: f64) -> [f64; 2] {
    [a[0] * s, a[1] * s]
}

fn norm(a: [f64; 2]) -> f64 {
    a[0].hypot(a[1])
}

fn dot(a: [f64; 2], b: [f64; 2]) -> f64 {
    a[0] * b[0] + a[1] * b[1]
}

impl PushState {
    /// Resolve agent/block overlap once. Returns the contact in block frame
    /// `(normal, tangential offset, depth)` if there was one.
    fn resolve_contact(&mut self) -> Option<([f64; 2], f64, f64)> {
        let p = rot(sub(self.agent, self.block), -self.angle);
        let h = BLOCK_HALF;
        let inside = p[0].abs() <= h && p[1].abs() <= h;
        let (normal, depth, contact) = if inside {
            // nearest face
            let gaps = [h - p[0], h + p[0], h - p[1], h + p[1]];
            let (face, gap) = gaps
                .iter()
                .copied()
                .enumerate()
                .min_by(|a, b| a.1.total_cmp(&b.1))
                .expect("four faces");
            let n = [[1.0, 0.0], [-1.0, 0.0], [0.0, 1.0], [0.0, -1.0]][face];
            (n, gap + AGENT_RADIUS, add(p, scale2(n, gap)))
        } else {
            let q = [p[0].clamp(-h, h), p[1].clamp(-h, h)];
            let d = sub(p, q);
            let dist = norm(d);
            if dist >= AGENT_RADIUS {
                return None;
            }
            (scale2(d, 1.0 / dist), AGENT_RADIUS - dist, q)
        };
        // Block moves away from the agent along −normal.
        let push = scale2(normal, -depth);
        let torque = contact[0] * push[1] - contact[1] * push[0];
        self.block = clamp_unit(add(self.block, rot(push, self.angle)));
        self.angle = wrap_angle(self.angle + ROT_GAIN * torque);
        let tangent = [-normal[1], normal[0]];
        Some((normal, dot(contact, tangent), depth))
    }

    pub fn pose_error(&self) -> ([f64; 2], f64) {
        (
            sub([self.target[0], self.target[1]], self.block),
            wrap_angle(self.target[2] - self.angle),
        )
    }
}

impl EnvState {
    pub fn task(&self) -> Task {
        match self {
            EnvState::Reach(_) => Task::Reach2d,
            EnvState::Push(_) => Task::PushtLite,
        }
    }

    pub fn reset(task: Task, rng: &mut impl Rng) -> Self {
        match task {
            Task::Reach2d => loop {
                let agent = [rng.random_range(0.1..0.9), rng.random_range(0.1..0.9)];
                let goal = [rng.random_range(0.1..0.9), rng.random_range(0.1..0.9)];
                if norm(sub(agent, goal)) > 0.2 {
                    return EnvState::Reach(ReachState { agent, goal });
                }
            },
            Task::PushtLite => {
                let r = rng.random_range(0.15..0.3);
                let dir = rng.random_range(-PI..PI);
                let block = add([PUSH_TARGET[0], PUSH_TARGET[1]], [r * dir.cos(), r * dir.sin()]);
                let angle = rng.random_range(-PI / 4.0..PI / 4.0);
                let clear = BLOCK_HALF * 2f64.sqrt() + AGENT_RADIUS + 0.02;
                let agent = loop {
                    let a = [rng.random_range(0.1..0.9), rng.random_range(0.1..0.9)];
                    if norm(sub(a, block)) > clear {
                        break a;
                    }
                };
                EnvState::Push(PushState {
                    agent,
                    block,
                    angle,
                    target: PUSH_TARGET,
                })
            }
        }
    }

    /// Pure transition. Actions are clamped to the per-axis step limit.
    pub fn step(&self, action: &[f64]) -> Result<Self> {
        if action.len() != 2 || action.iter().any(|v| !v.is_finite()) {
            return Err(CdpError::Env {
                step: 0,
                msg: format!("invalid action {action:?}"),
            });
        }
        let d = clamp_delta([action[0], action[1]]);
        Ok(match *self {
            EnvState::Reach(s) => EnvState::Reach(ReachState {
                agent: clamp_unit(add(s.agent, d)),
                goal: s.goal,
            }),
            EnvState::Push(mut s) => {
                let sd = scale2(d, 1.0 / SUBSTEPS as f64);
                for _ in 0..SUBSTEPS {
                    s.agent = clamp_unit(add(s.agent, sd));
                    s.resolve_contact();
                }
                EnvState::Push(s)
            }
        })
    }

    pub fn is_success(&self) -> bool {
        match self {
            EnvState::Reach(s) => norm(sub(s.agent, s.goal)) < REACH_TOL,
            EnvState::Push(s) => {
                let (e, a) = s.pose_error();
                e[0].abs() < PUSH_POS_TOL && e[1].abs() < PUSH_POS_TOL && a.abs() < PUSH_ANGLE_TOL
            }
        }
    }

    pub fn state_vector(&self) -> Vec<f64> {
        match self {
            EnvState::Reach(s) => vec![s.agent[0], s.agent[1], s.goal[0], s.goal[1]],
            EnvState::Push(s) => vec![
                s.agent[0], s.agent[1], s.block[0], s.block[1], s.angle, s.target[0], s.target[1],
                s.target[2],
            ],
        }
    }

    /// Inverse of [`state_vector`](Self::state_vector).
    pub fn from_vector(task: Task, v: &[f64]) -> Result<Self> {
        if v.len() != task.obs_dim() {
            return Err(CdpError::Config(format!(
                "{task} state has {} entries, got {}",
                task.obs_dim(),
                v.len()
            )));
        }
        Ok(match task {
            Task::Reach2d => EnvState::Reach(ReachState {
                agent: [v[0], v[1]],
                goal: [v[2], v[3]],
            }),
            Task::PushtLite => EnvState::Push(PushState {
                agent: [v[0], v[1]],
                block: [v[2], v[3]],
                angle: v[4],
                target: [v[5], v[6], v[7]],
            }),
        })
    }

    pub fn expert_action(&self) -> [f64; 2] {
        match self {
            EnvState::Reach(s) => clamp_delta(sub(s.goal, s.agent)),
            EnvState::Push(s) => push_expert(s),
        }
    }
}

/// Waypoint controller: pick the face whose push direction best reduces the
/// position error, offset the contact to correct the angle, walk around the
/// block's clearance circle to the pre-contact point, then push.
fn push_expert(s: &PushState) -> [f64; 2] {
    let (e, ang_err) = s.pose_error();
    let h = BLOCK_HALF;
    let r = AGENT_RADIUS;
    let p = rot(sub(s.agent, s.block), -s.angle);
    let e_local = rot(e, -s.angle);
    let e_norm = norm(e_local);

    // Outward normals; the agent on face n pushes the block along −n.
    let normals = [[1.0, 0.0], [-1.0, 0.0], [0.0, 1.0], [0.0, -1.0]];
    let score = |n: [f64; 2]| -dot(n, e_local) / e_norm.max(1e-9);
    let best = (0..4)
        .max_by(|&a, &b| score(normals[a]).total_cmp(&score(normals[b])))
        .expect("four faces");
    // Stay on the face currently engaged while it still helps.
    let engaged = (0..4).find(|&f| {
        let n = normals[f];
        let along = dot(p, n);
        let across = dot(p, [-n[1], n[0]]).abs();
        along > h - 0.01 && along < h + r + 0.015 && across < h
    });
    let pos_done = e[0].abs() < 0.5 * PUSH_POS_TOL && e[1].abs() < 0.5 * PUSH_POS_TOL;
    let face = match engaged {
        Some(f) if !pos_done && score(normals[f]) > 0.3 => f,
        Some(f) if pos_done => f,
        _ => best,
    };
    let n = normals[face];
    let t = [-n[1], n[0]];

    let offset = (ang_err * 0.15).clamp(-0.8 * h, 0.8 * h);
    let need_push = dot(e_local, scale2(n, -1.0)).max(0.0);
    if pos_done && ang_err.abs() < 0.5 * PUSH_ANGLE_TOL {
        return [0.0, 0.0];
    }

    let pre = add(scale2(n, h + r + 0.01), scale2(t, offset));
    let to_pre = sub(pre, p);
    let at_pre = dot(p, n) > h && norm(sub(scale2(t, dot(p, t)), scale2(t, offset))) < 0.012;

    let local_cmd = if at_pre {
        // push: advance into the face, correcting the tangential offset
        let depth = if pos_done {
            0.01
        } else {
            need_push.clamp(0.01, MAX_DELTA)
        };
        add(scale2(n, -depth), scale2(t, offset - dot(p, t)))
    } else {
        let clear = h * 2f64.sqrt() + r + 0.01;
        let direct_clear = segment_clears(p, pre, clear);
        if direct_clear || dot(p, n) > h + r {
            to_pre
        } else {
            // orbit toward the pre-contact angle
            let cur = p[1].atan2(p[0]);
            let goal = pre[1].atan2(pre[0]);
            let dphi = wrap_angle(goal - cur);
            let step = dphi.clamp(-0.6, 0.6);
            let radius = clear + 0.01;
            let next = [radius * (cur + step).cos(), radius * (cur + step).sin()];
            sub(next, p)
        }
    };
    clamp_delta(rot(local_cmd, s.angle))
}

/// Whether the segment a→b stays outside the circle of radius `r` at origin.
fn segment_clears(a: [f64; 2], b: [f64; 2], r: f64) -> bool {
    let d = sub(b, a);
    let len2 = dot(d, d);
    let u = if len2 > 0.0 {
        (-dot(a, d) / len2).clamp(0.0, 1.0)
    } else {
        0.0
    };
    norm(add(a, scale2(d, u))) >= r
}

/// Flatten the state, add Gaussian noise of std `noise_scale`, then zero each
/// entry independently with probability `dropout_prob`.
pub fn observe(state: &EnvState, spec: &DegradeSpec, rng: &mut impl Rng) -> Vec<f64> {
    let mut v = state.state_vector();
    if spec.noise_scale > 0.0 {
        for x in &mut v {
            let z: f64 = StandardNormal.sample(rng);
            *x += spec.noise_scale * z;
        }
    }
    if spec.dropout_prob > 0.0 {
        for x in &mut v {
            if rng.random::<f64>() < spec.dropout_prob {
                *x = 0.0;
            }
        }
    }
    v
}

/// Roll the scripted expert with clean observations and keep the first `n`
/// successful episodes. Attempt `i` uses its own environment sub-stream.
pub fn gen_demos(task: Task, n: usize, seed: u64, max_steps: usize) -> Result<Vec<Episode>> {
    if n == 0 {
        return Err(CdpError::Config("number of episodes must be at least 1".into()));
    }
    let max_attempts = 10 * n as u64;
    let mut out = Vec::with_capacity(n);
    let mut attempt = 0;
    while out.len() < n && attempt < max_attempts {
        let mut rng = substream(seed, Stream::Env, attempt);
        attempt += 1;
        let mut s = EnvState::reset(task, &mut rng);
        let mut ep = Episode {
            observations: Vec::new(),
            actions: Vec::new(),
            success: false,
        };
        for _ in 0..max_steps {
            let a = s.expert_action();
            ep.observations.push(s.state_vector());
            ep.actions.push(a.to_vec());
            s = s.step(&a)?;
            if s.is_success() {
                ep.success = true;
                break;
            }
        }
        if ep.success {
            out.push(ep);
        }
    }
    if out.is_empty() {
        return Err(CdpError::Generation(format!(
            "expert failed on all {attempt} {task} attempts"
        )));
    }
    if out.len() < n {
        return Err(CdpError::Generation(format!(
            "only {} of {n} {task} demos succeeded in {attempt} attempts",
            out.len()
        )));
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn expert_success_rate(task: Task, seeds: u64, max_steps: usize) -> f64 {
        let mut ok = 0;
        for seed in 0..seeds {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let mut s = EnvState::reset(task, &mut rng);
            for _ in 0..max_steps {
                s = s.step(&s.expert_action()).unwrap();
                if s.is_success() {
                    ok += 1;
                    break;
                }
            }
        }
        ok as f64 / seeds as f64
    }

    #[test]
    fn zero_action_is_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for task in [Task::Reach2d, Task::PushtLite] {
            let s = EnvState::reset(task, &mut rng);
            assert_eq!(s.step(&[0.0, 0.0]).unwrap(), s);
        }
    }

    #[test]
    fn nan_action_rejected() {
        let s = EnvState::reset(Task::Reach2d, &mut ChaCha8Rng::seed_from_u64(0));
        assert!(matches!(s.step(&[f64::NAN, 0.0]), Err(CdpError::Env { .. })));
    }

    #[test]
    fn reach_step_toward_goal_is_exact() {
        let s = EnvState::Reach(ReachState {
            agent: [0.2, 0.5],
            goal: [0.6, 0.5],
        });
        let n = s.step(&s.expert_action()).unwrap();
        let EnvState::Reach(r) = n else { unreachable!() };
        assert!((norm(sub(r.goal, r.agent)) - 0.35).abs() < 1e-12);
        let at = EnvState::Reach(ReachState {
            agent: [0.3, 0.3],
            goal: [0.3, 0.3],
        });
        assert_eq!(at.expert_action(), [0.0, 0.0]);
    }

    #[test]
    fn center_push_translates_without_rotation() {
        let s = EnvState::Push(PushState {
            agent: [0.5 - BLOCK_HALF - AGENT_RADIUS - 0.001, 0.5],
            block: [0.5, 0.5],
            angle: 0.0,
            target: PUSH_TARGET,
        });
        let EnvState::Push(n) = s.step(&[0.03, 0.0]).unwrap() else { unreachable!() };
        assert!(n.block[0] > 0.5 + 0.02);
        assert!((n.block[1] - 0.5).abs() < 1e-12);
        assert!(n.angle.abs() < 1e-12);
        // contact resolved: agent touches the face again
        assert!((n.block[0] - BLOCK_HALF - AGENT_RADIUS - n.agent[0]).abs() < 1e-9);
    }

    #[test]
    fn off_center_push_rotates_by_sign_of_offset() {
        let mk = |dy: f64| {
            EnvState::Push(PushState {
                agent: [0.5 - BLOCK_HALF - AGENT_RADIUS, 0.5 + dy],
                block: [0.5, 0.5],
                angle: 0.0,
                target: PUSH_TARGET,
            })
        };
        let EnvState::Push(up) = mk(0.03).step(&[0.02, 0.0]).unwrap() else { unreachable!() };
        let EnvState::Push(down) = mk(-0.03).step(&[0.02, 0.0]).unwrap() else { unreachable!() };
        // pushing +x below the centre turns the block counter-clockwise
        assert!(up.angle < 0.0 && down.angle > 0.0);
        assert!((up.angle + down.angle).abs() < 1e-12);
    }

    #[test]
    fn wrap_angle_range() {
        for a in [-7.0, -PI, 0.0, PI, 3.0 * PI, 10.0] {
            let w = wrap_angle(a);
            assert!((-PI..PI).contains(&w), "{a} -> {w}");
            assert!(((a - w) / (2.0 * PI)).fract().abs() < 1e-9 || ((a - w) / (2.0 * PI)).fract().abs() > 1.0 - 1e-9);
        }
    }

    #[test]
    fn reach_expert_always_succeeds() {
        assert_eq!(expert_success_rate(Task::Reach2d, 1000, 60), 1.0);
    }

    #[test]
    fn push_expert_mostly_succeeds() {
        let rate = expert_success_rate(Task::PushtLite, 200, 300);
        assert!(rate >= 0.95, "pusht_lite expert success {rate}");
    }

    #[test]
    fn observe_clean_is_exact_and_degradation_moments() {
        let s = EnvState::reset(Task::PushtLite, &mut ChaCha8Rng::seed_from_u64(3));
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        assert_eq!(observe(&s, &DegradeSpec::clean(), &mut rng), s.state_vector());
        let base = s.state_vector();
        let spec = DegradeSpec {
            noise_scale: 0.1,
            dropout_prob: 0.0,
        };
        let (mut sum, mut sq, mut n) = (0.0, 0.0, 0.0);
        for _ in 0..20_000 {
            for (o, b) in observe(&s, &spec, &mut rng).iter().zip(&base) {
                let d = o - b;
                sum += d;
                sq += d * d;
                n += 1.0;
            }
        }
        let std = (sq / n - (sum / n).powi(2)).sqrt();
        assert!((std - 0.1).abs() < 0.001, "std {std}");
        let drop = DegradeSpec {
            noise_scale: 0.0,
            dropout_prob: 0.3,
        };
        let s = EnvState::Reach(ReachState {
            agent: [0.5, 0.5],
            goal: [0.7, 0.7],
        });
        let zeros = (0..25_000)
            .flat_map(|_| observe(&s, &drop, &mut rng))
            .filter(|v| *v == 0.0)
            .count();
        let frac = zeros as f64 / 100_000.0;
        assert!((frac - 0.3).abs() < 0.003, "zero fraction {frac}");
    }

    #[test]
    fn gen_demos_deterministic_and_successful() {
        let a = gen_demos(Task::Reach2d, 5, 9, 60).unwrap();
        let b = gen_demos(Task::Reach2d, 5, 9, 60).unwrap();
        assert_eq!(a, b);
        assert!(a.iter().all(|e| e.success && e.validate(4, 2).is_ok()));
        assert!(gen_demos(Task::Reach2d, 0, 9, 60).is_err());
        assert!(matches!(gen_demos(Task::PushtLite, 1, 0, 1), Err(CdpError::Generation(_))));
    }
}
