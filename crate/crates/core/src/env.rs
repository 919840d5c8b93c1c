//! Toy tabletop tasks in the unit square.
//!
//! An agent disc moves by `0.05·a` per step and carries a binary gripper.
//! Coloured object discs and an optional goal zone are placed by rejection
//! sampling. Observations are two 32×32 renders: a global view and a
//! crop centred on the agent at twice the magnification.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::backbone::{Image, Instruction, ObservationSet, BOS_TOKEN, IMG_TOKEN};
use crate::error::{Error, Result};
use crate::integration::RobotState;
use crate::rng::Rng;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Task {
    Reach,
    Push,
    PickPlace,
}

impl Task {
    pub const ALL: [Task; 3] = [Task::Reach, Task::Push, Task::PickPlace];
}

impl fmt::Display for Task {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Task::Reach => "reach",
            Task::Push => "push",
            Task::PickPlace => "pickplace",
        })
    }
}

impl FromStr for Task {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().replace(['-', '_'], "").as_str() {
            "reach" => Ok(Task::Reach),
            "push" => Ok(Task::Push),
            "pickplace" => Ok(Task::PickPlace),
            other => Err(Error::Config(format!("unknown task {other:?}"))),
        }
    }
}

pub const PALETTE: [[f32; 3]; 6] = [
    [0.90, 0.20, 0.20],
    [0.20, 0.80, 0.30],
    [0.25, 0.35, 0.95],
    [0.95, 0.85, 0.20],
    [0.85, 0.30, 0.85],
    [0.20, 0.85, 0.90],
];
pub const PALETTE_NAMES: [&str; 6] = ["red", "green", "blue", "yellow", "magenta", "cyan"];
pub const BACKGROUND: [f32; 3] = [0.12, 0.12, 0.12];
/// Fill for crop pixels outside the workspace.
pub const OUTSIDE: [f32; 3] = [0.0, 0.0, 0.0];
pub const AGENT_OPEN: [f32; 3] = [1.0, 1.0, 1.0];
pub const AGENT_CLOSED: [f32; 3] = [0.55, 0.55, 0.55];

pub const AGENT_RADIUS: f64 = 0.035;
pub const OBJECT_RADIUS: f64 = 0.045;
pub const ZONE_RADIUS: f64 = 0.09;
const ZONE_ALPHA: f32 = 0.5;

// Instruction vocabulary.
pub const W_REACH: u32 = 3;
pub const W_PUSH: u32 = 4;
pub const W_PICK: u32 = 5;
pub const W_PLACE: u32 = 6;
pub const W_THE: u32 = 7;
pub const W_TO: u32 = 8;
pub const W_IN: u32 = 9;
pub const W_ZONE: u32 = 10;
pub const COLOR_TOKEN_BASE: u32 = 16;

pub fn color_token(color: usize) -> u32 {
    COLOR_TOKEN_BASE + color as u32
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EnvConfig {
    pub t_max: usize,
    pub min_separation: f64,
    pub step_size: f64,
    pub grasp_radius: f64,
    pub success_radius: f64,
    pub distractors: usize,
    pub image_size: usize,
    pub views: usize,
    /// World width shown by the agent-centred view.
    pub crop_span: f64,
}

impl Default for EnvConfig {
    fn default() -> Self {
        EnvConfig {
            t_max: 60,
            min_separation: 0.15,
            step_size: 0.05,
            grasp_radius: 0.05,
            success_radius: 0.05,
            distractors: 1,
            image_size: 32,
            views: 2,
            crop_span: 0.5,
        }
    }
}

impl EnvConfig {
    pub fn validate(&self) -> Result<()> {
        if self.t_max == 0 || self.image_size == 0 || !(1..=2).contains(&self.views) {
            return Err(Error::Config(
                "t_max and image size must be positive, views 1 or 2".into(),
            ));
        }
        if self.distractors + 2 > PALETTE.len() {
            return Err(Error::Config(format!("at most {} distractors", PALETTE.len() - 2)));
        }
        if !(self.step_size > 0.0 && self.grasp_radius > 0.0 && self.success_radius > 0.0 && self.crop_span > 0.0) {
            return Err(Error::Config("step size and radii must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Object {
    pub pos: [f64; 2],
    pub color: usize,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Zone {
    pub pos: [f64; 2],
    pub color: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EnvState {
    pub task: Task,
    pub agent: [f64; 2],
    /// 0 open, 1 closed.
    pub gripper: f64,
    /// `objects[0]` is the instructed object.
    pub objects: Vec<Object>,
    pub zone: Option<Zone>,
    pub held: Option<usize>,
    pub t: usize,
    pub t_max: usize,
    pub done: bool,
    pub success: bool,
}

impl EnvState {
    pub fn gripper_closed(&self) -> bool {
        self.gripper > 0.5
    }

    /// `[x, y, gripper, held]`.
    pub fn robot_state(&self) -> RobotState {
        RobotState {
            values: vec![
                self.agent[0] as f32,
                self.agent[1] as f32,
                self.gripper as f32,
                if self.held.is_some() { 1.0 } else { 0.0 },
            ],
        }
    }

    pub fn instruction(&self, views: usize) -> Instruction {
        let mut tokens = vec![BOS_TOKEN];
        tokens.extend(std::iter::repeat_n(IMG_TOKEN, views));
        let obj = color_token(self.objects[0].color);
        match (self.task, self.zone) {
            (Task::Reach, _) | (_, None) => tokens.extend([W_REACH, W_THE, obj]),
            (Task::Push, Some(z)) => tokens.extend([W_PUSH, W_THE, obj, W_TO, color_token(z.color), W_ZONE]),
            (Task::PickPlace, Some(z)) => {
                tokens.extend([W_PICK, W_THE, obj, W_PLACE, W_IN, color_token(z.color), W_ZONE])
            }
        }
        Instruction { tokens }
    }

    /// Task predicate with an explicit tolerance.
    pub fn satisfied(&self, radius: f64) -> bool {
        let target = self.objects[0].pos;
        match (self.task, self.zone) {
            (Task::Reach, _) | (_, None) => dist(self.agent, target) < radius,
            (Task::Push, Some(z)) => dist(target, z.pos) < radius,
            (Task::PickPlace, Some(z)) => dist(target, z.pos) < radius && self.held.is_none() && !self.gripper_closed(),
        }
    }
}

pub fn dist(a: [f64; 2], b: [f64; 2]) -> f64 {
    ((a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2)).sqrt()
}

/// Initial state for a task, drawn from `seed`.
pub fn reset_state(cfg: &EnvConfig, task: Task, seed: u64) -> Result<EnvState> {
    cfg.validate()?;
    let mut rng = Rng::new(seed);
    let n_obj = 1 + cfg.distractors;
    let with_zone = task != Task::Reach;
    let n_points = 1 + n_obj + usize::from(with_zone);
    let points = loop {
        let pts: Vec<[f64; 2]> = (0..n_points)
            .map(|_| [rng.range(0.1, 0.9), rng.range(0.1, 0.9)])
            .collect();
        let ok = pts
            .iter()
            .enumerate()
            .all(|(i, p)| pts[..i].iter().all(|q| dist(*p, *q) >= cfg.min_separation));
        if ok {
            break pts;
        }
    };
    let mut colors: Vec<usize> = (0..PALETTE.len()).collect();
    rng.shuffle(&mut colors);
    let objects = (0..n_obj)
        .map(|i| Object {
            pos: points[1 + i],
            color: colors[i],
        })
        .collect();
    let zone = with_zone.then(|| Zone {
        pos: points[n_points - 1],
        color: colors[n_obj],
    });
    Ok(EnvState {
        task,
        agent: points[0],
        gripper: 0.0,
        objects,
        zone,
        held: None,
        t: 0,
        t_max: cfg.t_max,
        done: false,
        success: false,
    })
}

/// Pure dynamics.
pub fn transition(cfg: &EnvConfig, s: &EnvState, action: &[f32]) -> Result<EnvState> {
    if s.done {
        return Err(Error::EpisodeDone);
    }
    if action.len() != 3 {
        return Err(Error::InvalidArgument(format!(
            "action has {} values, expected 3",
            action.len()
        )));
    }
    let a: Vec<f64> = action.iter().map(|&v| (v as f64).clamp(-1.0, 1.0)).collect();
    let mut n = s.clone();
    n.agent = [
        (s.agent[0] + cfg.step_size * a[0]).clamp(0.0, 1.0),
        (s.agent[1] + cfg.step_size * a[1]).clamp(0.0, 1.0),
    ];
    n.gripper = (a[2] + 1.0) / 2.0;
    match s.task {
        Task::Reach => {}
        Task::Push => {
            // Contact attaches the nearest object for the rest of the episode.
            if n.held.is_none() {
                n.held = nearest_within(&n.objects, n.agent, cfg.grasp_radius);
            }
        }
        Task::PickPlace => {
            if !n.gripper_closed() {
                n.held = None;
            } else if n.held.is_none() {
                n.held = nearest_within(&n.objects, n.agent, cfg.grasp_radius);
            }
        }
    }
    if let Some(i) = n.held {
        n.objects[i].pos = n.agent;
    }
    n.t += 1;
    n.success = n.satisfied(cfg.success_radius);
    n.done = n.success || n.t >= n.t_max;
    Ok(n)
}

fn nearest_within(objects: &[Object], p: [f64; 2], r: f64) -> Option<usize> {
    objects
        .iter()
        .enumerate()
        .map(|(i, o)| (i, dist(o.pos, p)))
        .filter(|&(_, d)| d < r)
        .min_by(|a, b| a.1.total_cmp(&b.1))
        .map(|(i, _)| i)
}

// ---- rendering -------------------------------------------------------------

/// A filled circle in world coordinates.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Disc {
    pub center: [f64; 2],
    pub radius: f64,
    pub color: [f32; 3],
    pub alpha: f32,
}

/// Maps pixel centres to world coordinates.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Viewport {
    pub origin: [f64; 2],
    pub span: f64,
}

impl Viewport {
    pub fn global() -> Self {
        Viewport {
            origin: [0.0, 0.0],
            span: 1.0,
        }
    }

    pub fn centered(c: [f64; 2], span: f64) -> Self {
        Viewport {
            origin: [c[0] - span / 2.0, c[1] - span / 2.0],
            span,
        }
    }

    pub fn world(&self, size: usize, px: usize, py: usize) -> [f64; 2] {
        let s = self.span / size as f64;
        [
            self.origin[0] + (px as f64 + 0.5) * s,
            self.origin[1] + (py as f64 + 0.5) * s,
        ]
    }
}

/// Anti-aliased discs over the background. Coverage falls off linearly over
/// one pixel at the rim.
pub fn render_discs(discs: &[Disc], view: Viewport, size: usize) -> Image {
    let px_per_unit = size as f64 / view.span;
    let mut data = Vec::with_capacity(size * size * 3);
    for py in 0..size {
        for px in 0..size {
            let w = view.world(size, px, py);
            let inside = (0.0..=1.0).contains(&w[0]) && (0.0..=1.0).contains(&w[1]);
            let mut c = if inside { BACKGROUND } else { OUTSIDE };
            for d in discs {
                let r = d.radius * px_per_unit;
                let dd = dist(w, d.center) * px_per_unit;
                let cover = (r - dd + 0.5).clamp(0.0, 1.0) as f32 * d.alpha;
                if cover > 0.0 {
                    for k in 0..3 {
                        c[k] += cover * (d.color[k] - c[k]);
                    }
                }
            }
            data.extend(c);
        }
    }
    Image::new(size, size, data).expect("render size")
}

pub fn scene_discs(s: &EnvState) -> Vec<Disc> {
    let mut discs = Vec::new();
    if let Some(z) = s.zone {
        discs.push(Disc {
            center: z.pos,
            radius: ZONE_RADIUS,
            color: PALETTE[z.color],
            alpha: ZONE_ALPHA,
        });
    }
    for o in &s.objects {
        discs.push(Disc {
            center: o.pos,
            radius: OBJECT_RADIUS,
            color: PALETTE[o.color],
            alpha: 1.0,
        });
    }
    discs.push(Disc {
        center: s.agent,
        radius: AGENT_RADIUS,
        color: if s.gripper_closed() { AGENT_CLOSED } else { AGENT_OPEN },
        alpha: 1.0,
    });
    discs
}

/// View 0 is global, view 1 is the agent-centred crop.
pub fn render(cfg: &EnvConfig, s: &EnvState, view: usize) -> Result<Image> {
    let vp = match view {
        0 => Viewport::global(),
        1 => Viewport::centered(s.agent, cfg.crop_span),
        _ => return Err(Error::InvalidArgument(format!("no view {view}"))),
    };
    Ok(render_discs(&scene_discs(s), vp, cfg.image_size))
}

pub fn observe(cfg: &EnvConfig, s: &EnvState) -> Result<ObservationSet> {
    ObservationSet::new((0..cfg.views).map(|v| render(cfg, s, v)).collect::<Result<_>>()?)
}

/// Stateful wrapper around [`transition`].
#[derive(Clone, Debug)]
pub struct Env {
    pub cfg: EnvConfig,
    pub state: EnvState,
}

pub struct StepOutcome {
    pub obs: ObservationSet,
    pub done: bool,
    pub success: bool,
}

impl Env {
    pub fn reset(cfg: &EnvConfig, task: Task, seed: u64) -> Result<(Env, ObservationSet, Instruction)> {
        let state = reset_state(cfg, task, seed)?;
        let obs = observe(cfg, &state)?;
        let instr = state.instruction(cfg.views);
        Ok((
            Env {
                cfg: cfg.clone(),
                state,
            },
            obs,
            instr,
        ))
    }

    pub fn step(&mut self, action: &[f32]) -> Result<StepOutcome> {
        self.state = transition(&self.cfg, &self.state, action)?;
        Ok(StepOutcome {
            obs: observe(&self.cfg, &self.state)?,
            done: self.state.done,
            success: self.state.success,
        })
    }
}

// ---- scripted expert -------------------------------------------------------

const EXPERT_GAIN: f64 = 10.0;
/// Distance at which the expert switches from approach to grasp or release.
const EXPERT_SNAP: f64 = 0.02;

fn toward(from: [f64; 2], to: [f64; 2]) -> [f64; 2] {
    [
        (EXPERT_GAIN * (to[0] - from[0])).clamp(-1.0, 1.0),
        (EXPERT_GAIN * (to[1] - from[1])).clamp(-1.0, 1.0),
    ]
}

/// Proportional controller over approach, grasp, transport and release.
pub fn expert_action(s: &EnvState) -> [f32; 3] {
    let target = s.objects[0].pos;
    let (xy, grip) = match (s.task, s.zone) {
        (Task::Reach, _) | (_, None) => (toward(s.agent, target), -1.0),
        (Task::Push, Some(z)) => match s.held {
            Some(0) => (toward(s.agent, z.pos), -1.0),
            _ => (toward(s.agent, target), -1.0),
        },
        (Task::PickPlace, Some(z)) => match s.held {
            Some(0) if dist(s.agent, z.pos) < EXPERT_SNAP => ([0.0, 0.0], -1.0),
            Some(0) => (toward(s.agent, z.pos), 1.0),
            // Wrong object in hand: drop it.
            Some(_) => ([0.0, 0.0], -1.0),
            None if dist(s.agent, target) < EXPERT_SNAP => (toward(s.agent, target), 1.0),
            None => (toward(s.agent, target), -1.0),
        },
    };
    [xy[0] as f32, xy[1] as f32, grip as f32]
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cfg() -> EnvConfig {
        EnvConfig::default()
    }

    fn run_expert(task: Task, seed: u64) -> EnvState {
        let c = cfg();
        let mut s = reset_state(&c, task, seed).unwrap();
        while !s.done {
            let a = expert_action(&s);
            assert!(a.iter().all(|v| (-1.0..=1.0).contains(v)));
            s = transition(&c, &s, &a).unwrap();
        }
        s
    }

    #[test]
    fn reset_is_deterministic() {
        for task in Task::ALL {
            let (e1, o1, i1) = Env::reset(&cfg(), task, 17).unwrap();
            let (e2, o2, i2) = Env::reset(&cfg(), task, 17).unwrap();
            assert_eq!(e1.state, e2.state);
            assert_eq!(o1, o2);
            assert_eq!(i1, i2);
        }
    }

    #[test]
    fn placement_respects_workspace_and_separation() {
        for task in Task::ALL {
            for seed in 0..200 {
                let s = reset_state(&cfg(), task, seed).unwrap();
                let mut pts = vec![s.agent];
                pts.extend(s.objects.iter().map(|o| o.pos));
                pts.extend(s.zone.map(|z| z.pos));
                for (i, p) in pts.iter().enumerate() {
                    assert!(p.iter().all(|v| (0.0..=1.0).contains(v)));
                    for q in &pts[..i] {
                        assert!(dist(*p, *q) >= 0.15);
                    }
                }
            }
        }
    }

    #[test]
    fn instruction_names_goal_color() {
        for task in Task::ALL {
            let s = reset_state(&cfg(), task, 3).unwrap();
            let instr = s.instruction(2);
            assert_eq!(instr.placeholder_count(), 2);
            assert!(instr.tokens.contains(&color_token(s.objects[0].color)));
            assert!(s.objects.len() >= 2);
            for o in &s.objects[1..] {
                assert_ne!(o.color, s.objects[0].color);
            }
        }
    }

    #[test]
    fn zero_action_and_clipping() {
        let c = cfg();
        let s = reset_state(&c, Task::Reach, 5).unwrap();
        let s0 = transition(&c, &s, &[0.0, 0.0, 0.0]).unwrap();
        assert_eq!(s0.agent, s.agent);
        let mut s = s;
        s.agent = [0.3, 0.3];
        let s1 = transition(&c, &s, &[2.0, 0.0, 0.0]).unwrap();
        assert!((s1.agent[0] - 0.35).abs() < 1e-12);
        assert_eq!(s1.agent[1], 0.3);
    }

    #[test]
    fn straight_line_reaches_goal() {
        let c = cfg();
        let mut s = reset_state(&c, Task::Reach, 0).unwrap();
        s.agent = [0.2, 0.2];
        s.objects[0].pos = [0.8, 0.8];
        s.objects[1].pos = [0.2, 0.8];
        let mut steps = 0;
        while !s.done {
            s = transition(&c, &s, &[1.0, 1.0, -1.0]).unwrap();
            steps += 1;
        }
        assert!(s.success);
        // ceil((0.6 − 0.05/√2) / 0.05) = 12 steps along the diagonal
        assert_eq!(steps, 12);
    }

    #[test]
    fn stepping_after_done_fails() {
        let c = EnvConfig { t_max: 2, ..cfg() };
        let mut s = reset_state(&c, Task::Reach, 1).unwrap();
        s = transition(&c, &s, &[0.0; 3]).unwrap();
        s = transition(&c, &s, &[0.0; 3]).unwrap();
        assert!(s.done && !s.success);
        assert!(matches!(transition(&c, &s, &[0.0; 3]), Err(Error::EpisodeDone)));
    }

    #[test]
    fn empty_scene_is_background() {
        let img = render_discs(&[], Viewport::global(), 32);
        assert!(img.data.chunks(3).all(|p| p == BACKGROUND));
    }

    #[test]
    fn renders_are_byte_identical() {
        let s = reset_state(&cfg(), Task::PickPlace, 9).unwrap();
        for v in 0..2 {
            let a = render(&cfg(), &s, v).unwrap();
            let b = render(&cfg(), &s, v).unwrap();
            let bytes = |i: &Image| i.data.iter().flat_map(|x| x.to_le_bytes()).collect::<Vec<_>>();
            assert_eq!(bytes(&a), bytes(&b));
        }
        assert!(render(&cfg(), &s, 2).is_err());
    }

    #[test]
    fn moving_agent_changes_only_nearby_pixels() {
        let c = cfg();
        let s = reset_state(&c, Task::Reach, 11).unwrap();
        let s2 = transition(&c, &s, &[1.0, -0.5, -1.0]).unwrap();
        let a = render(&cfg(), &s, 0).unwrap();
        let b = render(&cfg(), &s2, 0).unwrap();
        // Any pixel whose centre is more than radius + one pixel from both
        // agent positions must be untouched.
        let margin = AGENT_RADIUS + 1.0 / 32.0;
        for py in 0..32 {
            for px in 0..32 {
                let w = Viewport::global().world(32, px, py);
                if dist(w, s.agent) > margin && dist(w, s2.agent) > margin {
                    assert_eq!(a.pixel(py, px), b.pixel(py, px), "pixel ({px},{py})");
                }
            }
        }
        assert_ne!(a, b);
    }

    #[test]
    fn crop_view_follows_agent() {
        let mut s = reset_state(&cfg(), Task::Reach, 2).unwrap();
        s.agent = [0.05, 0.5];
        let img = render(&cfg(), &s, 1).unwrap();
        assert_eq!(img.pixel(16, 0), OUTSIDE);
        assert_eq!(img.pixel(16, 16), AGENT_OPEN);
    }

    #[test]
    fn expert_at_goal_is_still() {
        let mut s = reset_state(&cfg(), Task::Reach, 4).unwrap();
        s.agent = s.objects[0].pos;
        let a = expert_action(&s);
        assert!((a[0].powi(2) + a[1].powi(2)).sqrt() < 0.05);
    }

    #[test]
    fn expert_success_rates() {
        for (task, floor) in [(Task::Reach, 0.99), (Task::Push, 0.95), (Task::PickPlace, 0.95)] {
            let wins = (0..200).filter(|&seed| run_expert(task, seed).success).count();
            assert!(wins as f64 / 200.0 >= floor, "{task}: {wins}/200");
        }
    }

    #[test]
    fn looser_threshold_keeps_success() {
        for task in Task::ALL {
            for seed in 0..20 {
                let s = run_expert(task, seed);
                if s.satisfied(0.05) {
                    assert!(s.satisfied(0.08));
                }
            }
        }
    }

    #[test]
    fn task_names_round_trip() {
        for t in Task::ALL {
            assert_eq!(t.to_string().parse::<Task>().unwrap(), t);
        }
        assert_eq!("pick-place".parse::<Task>().unwrap(), Task::PickPlace);
        assert!("fly".parse::<Task>().is_err());
    }
}
