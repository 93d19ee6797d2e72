//! Desk-scale 2D instructed manipulation suite.
//!
//! Point-mass kinematics in a [-1, 1]^2 arena: the effector moves by
//! bounded deltas; objects are free (follow the effector on contact),
//! latched (follow only while grasped), or locked to an axis (drawers,
//! windows, doors). Every family ships a shaped reward with the same
//! structure -- `reward = reward_scale * progress`, progress in [0, 1]
//! and monotone toward the goal -- but deliberately different
//! `reward_scale` magnitudes, spanning 1 to 10,000 across the suite.

use std::path::Path;

use rand::Rng;
use thiserror::Error;

use crate::config::{Ini, SectionView};
use crate::lang::InstructionSet;

pub const ARENA: f64 = 1.0;
/// Maximum separation of two points in the arena; normalizes distances.
pub const ARENA_DIAG: f64 = 2.0 * std::f64::consts::SQRT_2;
pub const STATE_DIM: usize = 9;
pub const ACTION_DIM: usize = 3;

#[derive(Debug, Error)]
pub enum SuiteError {
    #[error(transparent)]
    Config(#[from] crate::config::ConfigError),
    #[error("task {task}: {message}")]
    BadTask { task: String, message: String },
    #[error("suite has no train tasks")]
    NoTrainTasks,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Split {
    Train,
    Test,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FamilyKind {
    Reach,
    Push,
    PickPlace,
    Press,
    DrawerOpen,
    DrawerClose,
    WindowOpen,
    WindowClose,
    DoorOpen,
    SweepInto,
    /// One-step two-armed task used by the smoke suite: move the effector
    /// in the family's direction. State carries no task identity.
    Bandit,
}

impl FamilyKind {
    pub fn parse(s: &str) -> Option<FamilyKind> {
        Some(match s {
            "reach" => FamilyKind::Reach,
            "push" => FamilyKind::Push,
            "pick-place" => FamilyKind::PickPlace,
            "press" => FamilyKind::Press,
            "drawer-open" => FamilyKind::DrawerOpen,
            "drawer-close" => FamilyKind::DrawerClose,
            "window-open" => FamilyKind::WindowOpen,
            "window-close" => FamilyKind::WindowClose,
            "door-open" => FamilyKind::DoorOpen,
            "sweep-into" => FamilyKind::SweepInto,
            "bandit" => FamilyKind::Bandit,
            _ => return None,
        })
    }

    /// Axis unit vector for axis-locked families.
    fn axis(&self) -> Option<[f64; 2]> {
        let r = std::f64::consts::FRAC_1_SQRT_2;
        Some(match self {
            FamilyKind::DrawerOpen => [0.0, -1.0],
            FamilyKind::DrawerClose => [0.0, 1.0],
            FamilyKind::WindowOpen => [1.0, 0.0],
            FamilyKind::WindowClose => [-1.0, 0.0],
            FamilyKind::DoorOpen => [-r, -r],
            _ => return None,
        })
    }
}

/// Axis-aligned box `[x0, y0, x1, y1]`.
pub type Box2 = [f64; 4];

fn sample_box(b: &Box2, rng: &mut impl Rng) -> [f64; 2] {
    [rng.random_range(b[0]..b[2]), rng.random_range(b[1]..b[3])]
}

#[derive(Debug, Clone)]
pub struct TaskSpec {
    pub name: String,
    pub kind: FamilyKind,
    pub split: Split,
    pub reward_scale: f64,
    pub max_steps_per_trial: usize,
    pub tolerance: f64,
    pub contact_radius: f64,
    pub delta_scale: f64,
    pub effector_box: Box2,
    pub object_box: Box2,
    pub goal_box: Box2,
    /// Goal offset range along the family axis, for axis-locked families.
    pub offset_range: [f64; 2],
    /// Bandit direction (+1 or -1).
    pub direction: f64,
}

impl TaskSpec {
    /// Sensible desk-scale defaults per family; suite files override.
    pub fn defaults(name: &str, kind: FamilyKind, split: Split) -> TaskSpec {
        let object_box: Box2 = match kind {
            FamilyKind::DrawerOpen => [-0.6, 0.0, 0.6, 0.5],
            FamilyKind::DrawerClose => [-0.6, -0.5, 0.6, 0.0],
            FamilyKind::WindowOpen => [-0.5, -0.6, 0.0, 0.6],
            FamilyKind::WindowClose => [0.0, -0.6, 0.5, 0.6],
            FamilyKind::DoorOpen => [0.0, 0.0, 0.5, 0.5],
            _ => [-0.55, -0.55, 0.55, 0.55],
        };
        let goal_box: Box2 = match kind {
            FamilyKind::SweepInto => [0.45, 0.45, 0.75, 0.75],
            FamilyKind::Press => [-0.7, -0.7, 0.7, 0.7],
            _ => [-0.75, -0.75, 0.75, 0.75],
        };
        TaskSpec {
            name: name.to_string(),
            kind,
            split,
            reward_scale: 1.0,
            max_steps_per_trial: 20,
            tolerance: 0.15,
            contact_radius: 0.18,
            delta_scale: 0.25,
            effector_box: [-0.5, -0.5, 0.5, 0.5],
            object_box,
            goal_box,
            offset_range: [0.4, 0.7],
            direction: 1.0,
        }
    }

    /// Documented per-family reward bound: one environment step never pays
    /// more than this.
    pub fn max_step_reward(&self) -> f64 {
        self.reward_scale
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EnvState {
    pub effector: [f64; 2],
    pub gripper: f64,
    pub object: [f64; 2],
    pub goal: [f64; 2],
    pub attached: bool,
    pub step_count: usize,
}

impl EnvState {
    /// Fixed-layout nine-wide state vector: `[effector | object | goal]`,
    /// 2D coordinates zero-padded to 3D.
    pub fn vector(&self) -> [f64; STATE_DIM] {
        [
            self.effector[0],
            self.effector[1],
            0.0,
            self.object[0],
            self.object[1],
            0.0,
            self.goal[0],
            self.goal[1],
            0.0,
        ]
    }
}

fn clamp_arena(p: [f64; 2]) -> [f64; 2] {
    [p[0].clamp(-ARENA, ARENA), p[1].clamp(-ARENA, ARENA)]
}

fn dist(a: [f64; 2], b: [f64; 2]) -> f64 {
    ((a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2)).sqrt()
}

/// Shaped progress in [0, 1]; `reward = reward_scale * progress`.
fn progress(spec: &TaskSpec, s: &EnvState) -> f64 {
    let near = |a, b| 1.0 - dist(a, b) / ARENA_DIAG;
    match spec.kind {
        FamilyKind::Reach => near(s.effector, s.goal),
        FamilyKind::Push | FamilyKind::SweepInto => {
            0.4 * near(s.effector, s.object) + 0.6 * near(s.object, s.goal)
        }
        FamilyKind::PickPlace => {
            0.3 * near(s.effector, s.object)
                + 0.1 * (s.attached as u8 as f64)
                + 0.6 * near(s.object, s.goal)
        }
        FamilyKind::Press => {
            let grip_term = if dist(s.effector, s.goal) < 2.0 * spec.tolerance {
                (s.gripper + 1.0) / 2.0
            } else {
                0.0
            };
            0.8 * near(s.effector, s.goal) + 0.2 * grip_term
        }
        FamilyKind::DrawerOpen
        | FamilyKind::DrawerClose
        | FamilyKind::WindowOpen
        | FamilyKind::WindowClose
        | FamilyKind::DoorOpen => 0.4 * near(s.effector, s.object) + 0.6 * near(s.object, s.goal),
        FamilyKind::Bandit => (spec.direction * s.effector[0] / 0.5).clamp(0.0, 1.0),
    }
}

/// The per-task competition condition; pure in the state.
pub fn success_metric(spec: &TaskSpec, s: &EnvState) -> bool {
    match spec.kind {
        FamilyKind::Reach => dist(s.effector, s.goal) <= spec.tolerance,
        FamilyKind::Press => dist(s.effector, s.goal) <= spec.tolerance && s.gripper > 0.5,
        FamilyKind::Bandit => spec.direction * s.effector[0] >= 0.2,
        _ => dist(s.object, s.goal) <= spec.tolerance,
    }
}

/// One task instance: spec plus mutable state.
#[derive(Debug, Clone)]
pub struct Env {
    pub spec: TaskSpec,
    pub state: EnvState,
}

impl Env {
    pub fn new(spec: TaskSpec, rng: &mut impl Rng) -> Env {
        let state = reset_state(&spec, rng);
        Env { spec, state }
    }

    pub fn reset(&mut self, rng: &mut impl Rng) {
        self.state = reset_state(&self.spec, rng);
    }

    /// One inner environment step: move the effector by the scaled action
    /// delta, update the object per family rules, emit the shaped reward
    /// and the success flag. Action components are clamped to [-1, 1].
    pub fn step(&mut self, action: &[f64]) -> (f64, bool) {
        debug_assert_eq!(action.len(), ACTION_DIM);
        let ax = action[0].clamp(-1.0, 1.0);
        let ay = action[1].clamp(-1.0, 1.0);
        let grip = action[2].clamp(-1.0, 1.0);
        let s = &mut self.state;
        let spec = &self.spec;

        let old_eff = s.effector;
        let in_contact = dist(old_eff, s.object) <= spec.contact_radius;
        let new_eff = clamp_arena([
            old_eff[0] + spec.delta_scale * ax,
            old_eff[1] + spec.delta_scale * ay,
        ]);
        let moved = [new_eff[0] - old_eff[0], new_eff[1] - old_eff[1]];
        s.effector = new_eff;
        s.gripper = grip;

        match spec.kind {
            FamilyKind::Push | FamilyKind::SweepInto => {
                if in_contact {
                    s.object = clamp_arena([s.object[0] + moved[0], s.object[1] + moved[1]]);
                }
            }
            FamilyKind::PickPlace => {
                if grip <= 0.0 {
                    s.attached = false;
                } else if in_contact {
                    s.attached = true;
                }
                if s.attached {
                    s.object = clamp_arena([s.object[0] + moved[0], s.object[1] + moved[1]]);
                }
            }
            FamilyKind::DrawerOpen
            | FamilyKind::DrawerClose
            | FamilyKind::WindowOpen
            | FamilyKind::WindowClose
            | FamilyKind::DoorOpen => {
                if in_contact {
                    let u = spec.kind.axis().expect("axis family");
                    let along = u[0] * moved[0] + u[1] * moved[1];
                    s.object =
                        clamp_arena([s.object[0] + u[0] * along, s.object[1] + u[1] * along]);
                }
            }
            FamilyKind::Reach | FamilyKind::Press | FamilyKind::Bandit => {}
        }
        s.step_count += 1;

        let reward = spec.reward_scale * progress(spec, s);
        let success = success_metric(spec, s);
        (reward, success)
    }
}

fn reset_state(spec: &TaskSpec, rng: &mut impl Rng) -> EnvState {
    if spec.kind == FamilyKind::Bandit {
        return EnvState {
            effector: [0.0, 0.0],
            gripper: 0.0,
            object: [0.0, 0.0],
            goal: [0.0, 0.0],
            attached: false,
            step_count: 0,
        };
    }
    let effector = sample_box(&spec.effector_box, rng);
    let (object, goal) = match spec.kind {
        FamilyKind::Press => {
            let goal = sample_box(&spec.goal_box, rng);
            (goal, goal)
        }
        k if k.axis().is_some() => {
            let object = sample_box(&spec.object_box, rng);
            let offset = rng.random_range(spec.offset_range[0]..spec.offset_range[1]);
            let u = k.axis().unwrap();
            let goal = clamp_arena([object[0] + u[0] * offset, object[1] + u[1] * offset]);
            (object, goal)
        }
        _ => {
            let object = sample_box(&spec.object_box, rng);
            let goal = sample_box(&spec.goal_box, rng);
            (object, goal)
        }
    };
    EnvState {
        effector,
        gripper: 0.0,
        object,
        goal,
        attached: false,
        step_count: 0,
    }
}

/// Hand-coded per-family controller; proves each family solvable within
/// its step budget and sanity-checks the evaluation pipeline.
pub fn scripted_action(spec: &TaskSpec, s: &EnvState) -> [f64; ACTION_DIM] {
    let gain = 2.0;
    let toward = |target: [f64; 2], from: [f64; 2]| {
        [
            (gain * (target[0] - from[0])).clamp(-1.0, 1.0),
            (gain * (target[1] - from[1])).clamp(-1.0, 1.0),
        ]
    };
    let in_contact = dist(s.effector, s.object) <= spec.contact_radius;
    match spec.kind {
        FamilyKind::Reach => {
            let m = toward(s.goal, s.effector);
            [m[0], m[1], 0.0]
        }
        FamilyKind::Push | FamilyKind::SweepInto => {
            let m = if in_contact {
                toward(s.goal, s.object)
            } else {
                toward(s.object, s.effector)
            };
            [m[0], m[1], 0.0]
        }
        FamilyKind::PickPlace => {
            let m = if s.attached {
                toward(s.goal, s.object)
            } else {
                toward(s.object, s.effector)
            };
            [m[0], m[1], 1.0]
        }
        FamilyKind::Press => {
            let m = toward(s.goal, s.effector);
            [m[0], m[1], 1.0]
        }
        FamilyKind::Bandit => [spec.direction, 0.0, 0.0],
        axis_kind => {
            let u = axis_kind.axis().expect("axis family");
            if in_contact {
                let g = [s.goal[0] - s.object[0], s.goal[1] - s.object[1]];
                let along = u[0] * g[0] + u[1] * g[1];
                [
                    (gain * u[0] * along).clamp(-1.0, 1.0),
                    (gain * u[1] * along).clamp(-1.0, 1.0),
                    0.0,
                ]
            } else {
                let m = toward(s.object, s.effector);
                [m[0], m[1], 0.0]
            }
        }
    }
}

/// A task in a loaded suite: spec plus its instruction templates.
#[derive(Debug, Clone)]
pub struct Task {
    pub spec: TaskSpec,
    pub instructions: InstructionSet,
}

/// The full task roster with train/test split indices.
#[derive(Debug, Clone)]
pub struct Suite {
    pub tasks: Vec<Task>,
    pub train: Vec<usize>,
    pub test: Vec<usize>,
}

impl Suite {
    pub fn task_by_name(&self, name: &str) -> Option<usize> {
        self.tasks.iter().position(|t| t.spec.name == name)
    }

    pub fn split_indices(&self, split: Split) -> &[usize] {
        match split {
            Split::Train => &self.train,
            Split::Test => &self.test,
        }
    }

    /// Longest instruction over all tasks, in tokens.
    pub fn max_instruction_len(&self) -> usize {
        self.tasks
            .iter()
            .map(|t| t.instructions.max_len())
            .max()
            .unwrap_or(0)
    }

    pub fn max_steps_per_trial(&self) -> usize {
        self.tasks
            .iter()
            .map(|t| t.spec.max_steps_per_trial)
            .max()
            .unwrap_or(0)
    }
}

/// Parse a suite config: one `[task-name]` section per task.
///
/// ```text
/// [push]
/// kind = push
/// split = train
/// reward_scale = 10
/// max_steps_per_trial = 20
/// tolerance = 0.15
/// goal_box = -0.75 -0.75 0.75 0.75
/// ```
pub fn load_task_specs(path: &Path) -> Result<Vec<TaskSpec>, SuiteError> {
    let ini = Ini::load(path)?;
    let mut specs = Vec::new();
    for (name, _) in &ini.sections {
        let view = SectionView::new(&ini, name);
        let bad = |message: String| SuiteError::BadTask {
            task: name.clone(),
            message,
        };
        let kind_raw: String = view.require("kind")?;
        let kind = FamilyKind::parse(&kind_raw)
            .ok_or_else(|| bad(format!("unknown family {kind_raw:?}")))?;
        let split_raw: String = view.parse("split", "train".to_string())?;
        let split = match split_raw.as_str() {
            "train" => Split::Train,
            "test" => Split::Test,
            other => return Err(bad(format!("unknown split {other:?}"))),
        };
        let mut spec = TaskSpec::defaults(name, kind, split);
        spec.reward_scale = view.parse("reward_scale", spec.reward_scale)?;
        spec.max_steps_per_trial = view.parse("max_steps_per_trial", spec.max_steps_per_trial)?;
        spec.tolerance = view.parse("tolerance", spec.tolerance)?;
        spec.contact_radius = view.parse("contact_radius", spec.contact_radius)?;
        spec.delta_scale = view.parse("delta_scale", spec.delta_scale)?;
        spec.direction = view.parse("direction", spec.direction)?;
        for (key, slot) in [
            ("effector_box", &mut spec.effector_box),
            ("object_box", &mut spec.object_box),
            ("goal_box", &mut spec.goal_box),
        ] {
            if let Some(vals) = view.floats(key)? {
                if vals.len() != 4 {
                    return Err(bad(format!("{key} needs 4 numbers")));
                }
                slot.copy_from_slice(&vals);
            }
        }
        if let Some(vals) = view.floats("offset_range")? {
            if vals.len() != 2 {
                return Err(bad("offset_range needs 2 numbers".into()));
            }
            spec.offset_range.copy_from_slice(&vals);
        }
        if spec.reward_scale <= 0.0 {
            return Err(bad("reward_scale must be > 0".into()));
        }
        if spec.max_steps_per_trial == 0 {
            return Err(bad("max_steps_per_trial must be >= 1".into()));
        }
        for b in [&spec.effector_box, &spec.object_box, &spec.goal_box] {
            if b[0] >= b[2] || b[1] >= b[3] {
                return Err(bad(format!("degenerate box {b:?}")));
            }
        }
        specs.push(spec);
    }
    Ok(specs)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn spec(kind: FamilyKind) -> TaskSpec {
        let mut s = TaskSpec::defaults("t", kind, Split::Train);
        s.reward_scale = 1.0;
        s
    }

    #[test]
    fn reset_is_deterministic_given_seed() {
        let s = spec(FamilyKind::Push);
        let a = reset_state(&s, &mut ChaCha8Rng::seed_from_u64(3));
        let b = reset_state(&s, &mut ChaCha8Rng::seed_from_u64(3));
        assert_eq!(a, b);
    }

    #[test]
    fn object_always_inside_its_box() {
        let s = spec(FamilyKind::Push);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..500 {
            let st = reset_state(&s, &mut rng);
            assert!(st.object[0] >= s.object_box[0] && st.object[0] <= s.object_box[2]);
            assert!(st.object[1] >= s.object_box[1] && st.object[1] <= s.object_box[3]);
        }
    }

    #[test]
    fn reach_goals_cover_goal_box_uniformly() {
        // Pearson chi-square per axis, 10 bins, df = 9. The p > 0.01
        // acceptance bound corresponds to a statistic below 21.666.
        let s = spec(FamilyKind::Reach);
        let mut rng = ChaCha8Rng::seed_from_u64(18);
        let n = 1000;
        let mut bins = [[0usize; 10]; 2];
        for _ in 0..n {
            let st = reset_state(&s, &mut rng);
            for axis in 0..2 {
                let (lo, hi) = (s.goal_box[axis], s.goal_box[axis + 2]);
                let f = ((st.goal[axis] - lo) / (hi - lo) * 10.0).floor() as usize;
                bins[axis][f.min(9)] += 1;
            }
        }
        let expected = n as f64 / 10.0;
        for axis in 0..2 {
            let chi2: f64 = bins[axis]
                .iter()
                .map(|&o| (o as f64 - expected).powi(2) / expected)
                .sum();
            assert!(chi2 < 21.666, "axis {axis} chi2 = {chi2}, bins {bins:?}");
        }
    }

    #[test]
    fn reach_success_at_goal_and_tolerance_boundary() {
        let s = spec(FamilyKind::Reach);
        let mut st = reset_state(&s, &mut ChaCha8Rng::seed_from_u64(0));
        st.goal = [0.0, 0.3];
        st.effector = st.goal;
        assert!(success_metric(&s, &st));
        st.effector = [s.tolerance, st.goal[1]];
        assert!(success_metric(&s, &st));
        st.effector = [s.tolerance + 1e-9, st.goal[1]];
        assert!(!success_metric(&s, &st));
    }

    #[test]
    fn reach_reward_increases_as_distance_shrinks() {
        let s = spec(FamilyKind::Reach);
        let mut st = reset_state(&s, &mut ChaCha8Rng::seed_from_u64(0));
        st.goal = [0.5, 0.5];
        st.effector = [-0.5, -0.5];
        let far = progress(&s, &st);
        st.effector = [0.0, 0.0];
        let mid = progress(&s, &st);
        st.effector = [0.5, 0.5];
        let at = progress(&s, &st);
        assert!(far < mid && mid < at);
        assert!((at - 1.0).abs() < 1e-12);
    }

    #[test]
    fn press_pays_a_thousand_times_reach_at_matched_progress() {
        let mut press = spec(FamilyKind::Press);
        press.reward_scale = 1000.0;
        let reach = spec(FamilyKind::Reach);

        // Full progress in both families.
        let mut st = EnvState {
            effector: [0.2, 0.2],
            gripper: 1.0,
            object: [0.2, 0.2],
            goal: [0.2, 0.2],
            attached: false,
            step_count: 0,
        };
        let p_press = press.reward_scale * progress(&press, &st);
        st.gripper = 0.0;
        let p_reach = reach.reward_scale * progress(&reach, &st);
        assert!((p_press / p_reach - 1000.0).abs() < 1e-9);
    }

    #[test]
    fn rewards_stay_within_documented_bound() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        for kind in [
            FamilyKind::Reach,
            FamilyKind::Push,
            FamilyKind::PickPlace,
            FamilyKind::Press,
            FamilyKind::DrawerOpen,
            FamilyKind::SweepInto,
            FamilyKind::Bandit,
        ] {
            let mut s = spec(kind);
            s.reward_scale = 123.0;
            let mut env = Env::new(s, &mut rng);
            for _ in 0..100 {
                let a = [
                    rng.random_range(-1.0..1.0),
                    rng.random_range(-1.0..1.0),
                    rng.random_range(-1.0..1.0),
                ];
                let (r, _) = env.step(&a);
                assert!(r >= 0.0 && r <= env.spec.max_step_reward() + 1e-12);
            }
        }
    }

    #[test]
    fn positions_stay_clamped_inside_arena() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut env = Env::new(spec(FamilyKind::Push), &mut rng);
        for _ in 0..200 {
            env.step(&[1.0, 1.0, 0.0]);
        }
        assert!(env.state.effector[0] <= ARENA && env.state.effector[1] <= ARENA);
        assert!(env.state.object[0] <= ARENA && env.state.object[1] <= ARENA);
    }

    #[test]
    fn scripted_policy_solves_every_family() {
        // >= 95% success per family over 200 episodes, within the trial
        // step budget (with action repeat 2).
        let mut rng = ChaCha8Rng::seed_from_u64(123);
        for kind in [
            FamilyKind::Reach,
            FamilyKind::Push,
            FamilyKind::PickPlace,
            FamilyKind::Press,
            FamilyKind::DrawerOpen,
            FamilyKind::DrawerClose,
            FamilyKind::WindowOpen,
            FamilyKind::WindowClose,
            FamilyKind::DoorOpen,
            FamilyKind::SweepInto,
            FamilyKind::Bandit,
        ] {
            let s = spec(kind);
            let mut env = Env::new(s.clone(), &mut rng);
            let mut successes = 0;
            let episodes = 200;
            for _ in 0..episodes {
                env.reset(&mut rng);
                'trial: for _ in 0..s.max_steps_per_trial {
                    let a = scripted_action(&env.spec, &env.state);
                    for _ in 0..2 {
                        let (_, success) = env.step(&a);
                        if success {
                            successes += 1;
                            break 'trial;
                        }
                    }
                }
            }
            let rate = successes as f64 / episodes as f64;
            assert!(rate >= 0.95, "{kind:?}: scripted success rate {rate}");
        }
    }
}
