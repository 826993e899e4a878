//! Synthetic paired motions. An interactee wanders through a furnished room;
//! the wearer responds socially (keeps a preset distance, faces them, mirrors
//! their right-arm raises `lag` frames ahead) blended with an independent
//! walk, and tracks a focus object in the room with the right arm.
//!
//! Everything is expressed in the episode frame: the wearer's head at frame 0
//! is the origin and the wearer's root faces +Z there. Y is up.

use std::f64::consts::PI;
use std::fmt;
use std::str::FromStr;

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::body::{
    forward_kinematics_full, joint, pose_dim, BodyModel, PoseSequence, Vec3, SMPL_JOINTS,
};
use crate::conditioning::ScenePointCloud;
use crate::error::{invalid, Result};
use crate::seeding::{self, Stream};

/// Interaction regimes spanning the distance and gaze strata.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Scenario {
    FaceToFace,
    SideBySide,
    Conversation,
    Passing,
    Calling,
    FarAverted,
    /// One of the six above, drawn per episode.
    Mixed,
}

impl Scenario {
    pub const CONCRETE: [Scenario; 6] = [
        Scenario::FaceToFace,
        Scenario::SideBySide,
        Scenario::Conversation,
        Scenario::Passing,
        Scenario::Calling,
        Scenario::FarAverted,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Scenario::FaceToFace => "face-to-face",
            Scenario::SideBySide => "side-by-side",
            Scenario::Conversation => "conversation",
            Scenario::Passing => "passing",
            Scenario::Calling => "calling",
            Scenario::FarAverted => "far-averted",
            Scenario::Mixed => "mixed",
        }
    }

    /// Target root distance (m), whether the pair faces each other, typical walking speed (m/s).
    fn preset(self) -> (f64, bool, f64) {
        match self {
            Scenario::FaceToFace => (0.7, true, 0.12),
            Scenario::SideBySide => (0.7, false, 0.15),
            Scenario::Conversation => (1.5, true, 0.3),
            Scenario::Passing => (1.5, false, 0.4),
            Scenario::Calling => (3.0, true, 0.5),
            Scenario::FarAverted => (3.0, false, 0.4),
            Scenario::Mixed => unreachable!("mixed is resolved before use"),
        }
    }
}

impl fmt::Display for Scenario {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Scenario {
    type Err = crate::Error;

    fn from_str(s: &str) -> Result<Self> {
        Scenario::CONCRETE
            .iter()
            .chain(&[Scenario::Mixed])
            .copied()
            .find(|c| c.name() == s)
            .ok_or_else(|| invalid(format!("unknown scenario '{s}'")))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SceneKind {
    FloorOnly,
    Room,
}

impl FromStr for SceneKind {
    type Err = crate::Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "floor-only" => Ok(SceneKind::FloorOnly),
            "room" => Ok(SceneKind::Room),
            _ => Err(invalid(format!("unknown scene kind '{s}'"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SynthConfig {
    pub frames: usize,
    /// Extra interactee frames recorded past the window, for future conditioning.
    pub lookahead: usize,
    pub kappa: f64,
    pub scene_points: usize,
    pub fps: f32,
    /// How many frames ahead the wearer anticipates the interactee.
    pub lag: usize,
}

impl SynthConfig {
    pub fn new(frames: usize, kappa: f64) -> Self {
        Self {
            frames,
            lookahead: frames / 2,
            kappa,
            scene_points: 1024,
            fps: 30.0,
            lag: 10,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.frames < 3 {
            return Err(invalid(format!("need F ≥ 3 frames, got {}", self.frames)));
        }
        if !(0.0..=1.0).contains(&self.kappa) {
            return Err(invalid(format!(
                "coupling κ must lie in [0, 1], got {}",
                self.kappa
            )));
        }
        if self.scene_points == 0 {
            return Err(invalid("scene needs ≥ 1 point"));
        }
        if !(self.fps > 0.0 && self.fps.is_finite()) {
            return Err(invalid("fps must be positive"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EpisodeMeta {
    pub seed: u64,
    pub kappa: f32,
    /// Always one of [`Scenario::CONCRETE`].
    pub scenario: Scenario,
    /// Floor height in the episode frame.
    pub floor_height: f32,
}

/// Paired wearer/interactee motion in a scene.
#[derive(Debug, Clone, PartialEq)]
pub struct InteractionEpisode {
    pub wearer: PoseSequence,
    /// `F + lookahead` frames; the first `F` align with the wearer.
    pub interactee: PoseSequence,
    pub scene: ScenePointCloud,
    pub meta: EpisodeMeta,
}

impl InteractionEpisode {
    pub fn new(
        wearer: PoseSequence,
        interactee: PoseSequence,
        scene: ScenePointCloud,
        meta: EpisodeMeta,
    ) -> Result<Self> {
        if interactee.frames() < wearer.frames() {
            return Err(invalid(
                "interactee recording is shorter than the wearer window",
            ));
        }
        if interactee.joints() != wearer.joints() {
            return Err(invalid("wearer and interactee use different skeletons"));
        }
        Ok(Self {
            wearer,
            interactee,
            scene,
            meta,
        })
    }

    pub fn frames(&self) -> usize {
        self.wearer.frames()
    }

    pub fn lookahead(&self) -> usize {
        self.interactee.frames() - self.wearer.frames()
    }

    /// Interactee frames aligned with the wearer window.
    pub fn interactee_present(&self) -> PoseSequence {
        self.interactee
            .window(0, self.frames())
            .expect("recording covers the window")
    }
}

/// Axis-aligned box: center and half extents.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SceneBox {
    pub center: Vec3,
    pub half: Vec3,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SceneLayout {
    pub floor_height: f64,
    /// Half side of the square room; `None` for an open floor.
    pub room_half: Option<f64>,
    pub room_center: Vec3,
    /// The tall object the wearer attends to.
    pub focus: Option<SceneBox>,
    pub furniture: Vec<SceneBox>,
}

impl SceneLayout {
    pub fn focus_point(&self) -> Option<Vec3> {
        self.focus
            .map(|b| b.center + Vec3::new(0.0, 0.6 * b.half.y, 0.0))
    }
}

fn box_faces(b: &SceneBox) -> [(Vec3, Vec3, Vec3); 5] {
    let (c, h) = (b.center, b.half);
    // (corner, edge u, edge v) for the four sides and the top.
    [
        (
            c + Vec3::new(-h.x, -h.y, -h.z),
            Vec3::new(2.0 * h.x, 0.0, 0.0),
            Vec3::new(0.0, 2.0 * h.y, 0.0),
        ),
        (
            c + Vec3::new(-h.x, -h.y, h.z),
            Vec3::new(2.0 * h.x, 0.0, 0.0),
            Vec3::new(0.0, 2.0 * h.y, 0.0),
        ),
        (
            c + Vec3::new(-h.x, -h.y, -h.z),
            Vec3::new(0.0, 0.0, 2.0 * h.z),
            Vec3::new(0.0, 2.0 * h.y, 0.0),
        ),
        (
            c + Vec3::new(h.x, -h.y, -h.z),
            Vec3::new(0.0, 0.0, 2.0 * h.z),
            Vec3::new(0.0, 2.0 * h.y, 0.0),
        ),
        (
            c + Vec3::new(-h.x, h.y, -h.z),
            Vec3::new(2.0 * h.x, 0.0, 0.0),
            Vec3::new(0.0, 0.0, 2.0 * h.z),
        ),
    ]
}

fn sample_faces(faces: &[(Vec3, Vec3, Vec3)], n: usize, rng: &mut ChaCha8Rng, out: &mut Vec<Vec3>) {
    let areas: Vec<f64> = faces.iter().map(|(_, u, v)| u.cross(v).norm()).collect();
    let total: f64 = areas.iter().sum();
    for _ in 0..n {
        let mut pick = rng.random::<f64>() * total;
        let mut k = 0;
        while k + 1 < faces.len() && pick >= areas[k] {
            pick -= areas[k];
            k += 1;
        }
        let (o, u, v) = faces[k];
        out.push(o + u * rng.random::<f64>() + v * rng.random::<f64>());
    }
}

/// Samples `n` surface points of a layout: floor, walls, focus object, furniture.
pub fn sample_layout(layout: &SceneLayout, n: usize, rng: &mut ChaCha8Rng) -> Vec<Vec3> {
    let mut pts = Vec::with_capacity(n);
    let y0 = layout.floor_height;
    let half = layout.room_half.unwrap_or(4.0);
    let c = layout.room_center;
    let (n_walls, n_focus, n_furn) = match layout.room_half {
        None => (0, 0, 0),
        Some(_) => {
            let furn = if layout.furniture.is_empty() {
                0
            } else {
                n / 10
            };
            (n / 4, if layout.focus.is_some() { n / 5 } else { 0 }, furn)
        }
    };
    let n_floor = n - n_walls - n_focus - n_furn;
    for _ in 0..n_floor {
        pts.push(Vec3::new(
            c.x + rng.random_range(-half..half),
            y0,
            c.z + rng.random_range(-half..half),
        ));
    }
    let height = 2.5;
    let walls = [
        (
            Vec3::new(c.x - half, y0, c.z - half),
            Vec3::new(2.0 * half, 0.0, 0.0),
            Vec3::new(0.0, height, 0.0),
        ),
        (
            Vec3::new(c.x - half, y0, c.z + half),
            Vec3::new(2.0 * half, 0.0, 0.0),
            Vec3::new(0.0, height, 0.0),
        ),
        (
            Vec3::new(c.x - half, y0, c.z - half),
            Vec3::new(0.0, 0.0, 2.0 * half),
            Vec3::new(0.0, height, 0.0),
        ),
        (
            Vec3::new(c.x + half, y0, c.z - half),
            Vec3::new(0.0, 0.0, 2.0 * half),
            Vec3::new(0.0, height, 0.0),
        ),
    ];
    sample_faces(&walls, n_walls, rng, &mut pts);
    if let Some(f) = &layout.focus {
        sample_faces(&box_faces(f), n_focus, rng, &mut pts);
    }
    let furn: Vec<_> = layout.furniture.iter().flat_map(box_faces).collect();
    if !furn.is_empty() {
        sample_faces(&furn, n_furn, rng, &mut pts);
    }
    pts
}

/// Random room around `anchor` with the focus object in front of `heading`.
fn random_layout(kind: SceneKind, anchor: Vec3, heading: f64, rng: &mut ChaCha8Rng) -> SceneLayout {
    if kind == SceneKind::FloorOnly {
        return SceneLayout {
            floor_height: 0.0,
            room_half: None,
            room_center: Vec3::new(anchor.x, 0.0, anchor.z),
            focus: None,
            furniture: vec![],
        };
    }
    let bearing = heading + rng.random_range(-1.75..1.75);
    let dist = rng.random_range(1.2..3.0);
    let focus = SceneBox {
        center: Vec3::new(
            anchor.x + dist * bearing.sin(),
            0.9,
            anchor.z + dist * bearing.cos(),
        ),
        half: Vec3::new(0.2, 0.9, 0.2),
    };
    let furniture = (0..rng.random_range(0..=2usize))
        .map(|_| {
            let a = rng.random_range(-PI..PI);
            let r = rng.random_range(1.0..4.0);
            SceneBox {
                center: Vec3::new(anchor.x + r * a.sin(), 0.25, anchor.z + r * a.cos()),
                half: Vec3::new(0.3, 0.25, 0.3),
            }
        })
        .collect();
    SceneLayout {
        floor_height: 0.0,
        room_half: Some(5.0),
        room_center: Vec3::new(anchor.x, 0.0, anchor.z),
        focus: Some(focus),
        furniture,
    }
}

/// Stand-alone scene in world coordinates (floor at height 0, viewer at the
/// origin looking along +Z).
pub fn generate_scene_pointcloud(
    kind: SceneKind,
    n_points: usize,
    seed: u64,
) -> Result<ScenePointCloud> {
    if n_points == 0 {
        return Err(invalid("scene needs ≥ 1 point"));
    }
    let mut rng = seeding::rng(seed, Stream::Data);
    let layout = random_layout(kind, Vec3::zeros(), 0.0, &mut rng);
    let pts = sample_layout(&layout, n_points, &mut rng);
    ScenePointCloud::new(
        pts.iter()
            .map(|p| [p.x as f32, p.y as f32, p.z as f32])
            .collect(),
    )
}

fn wrap(a: f64) -> f64 {
    let r = (a + PI).rem_euclid(2.0 * PI) - PI;
    if r == -PI {
        PI
    } else {
        r
    }
}

/// Removes 2π jumps so yaw stays continuous as a pose parameter.
fn unwrap(angles: &mut [f64]) {
    for i in 1..angles.len() {
        angles[i] = angles[i - 1] + wrap(angles[i] - angles[i - 1]);
    }
}

/// White noise smoothed by a centered box filter and rescaled to unit variance.
fn smooth_noise(rng: &mut ChaCha8Rng, n: usize, width: usize) -> Vec<f64> {
    let raw = seeding::standard_normal_f64(rng, n + width);
    let scale = (width as f64).sqrt();
    (0..n)
        .map(|i| raw[i..i + width].iter().sum::<f64>() / scale)
        .collect()
}

/// Planar walk: drift velocity plus an autocorrelated wobble driven by
/// box-filtered increments. Returns positions (x, z) per frame.
fn planar_walk(
    rng: &mut ChaCha8Rng,
    start: [f64; 2],
    speed: f64,
    n: usize,
    fps: f64,
) -> Vec<[f64; 2]> {
    let dir = rng.random_range(-PI..PI);
    let s = speed * rng.random_range(0.5..1.0);
    let drift = [s * dir.sin(), s * dir.cos()];
    let sigma = 0.6 * speed + 0.05;
    let rho: f64 = 0.93;
    let kx = smooth_noise(rng, n, 5);
    let kz = smooth_noise(rng, n, 5);
    let mut o = [
        sigma * rng.random_range(-1.0..1.0),
        sigma * rng.random_range(-1.0..1.0),
    ];
    let mut p = start;
    let mut out = Vec::with_capacity(n);
    let gain = sigma * (1.0 - rho * rho).sqrt();
    for i in 0..n {
        out.push(p);
        o = [rho * o[0] + gain * kx[i], rho * o[1] + gain * kz[i]];
        p = [
            p[0] + (drift[0] + o[0]) / fps,
            p[1] + (drift[1] + o[1]) / fps,
        ];
    }
    out
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

/// Arm-raise level in [0, 1], varying over roughly half a second.
fn raise_signal(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    let bias = rng.random_range(-1.0..0.5);
    smooth_noise(rng, n, 15)
        .into_iter()
        .map(|v| sigmoid(2.5 * v + bias))
        .collect()
}

/// Per-person idle motion: torso sway phases and gait parameters.
struct Idle {
    phases: [f64; 8],
    freqs: [f64; 8],
}

impl Idle {
    fn new(rng: &mut ChaCha8Rng) -> Self {
        let mut phases = [0.0; 8];
        let mut freqs = [0.0; 8];
        for i in 0..8 {
            phases[i] = rng.random_range(0.0..2.0 * PI);
            freqs[i] = rng.random_range(0.2..0.6);
        }
        Self { phases, freqs }
    }

    fn s(&self, k: usize, time: f64) -> f64 {
        (2.0 * PI * self.freqs[k] * time + self.phases[k]).sin()
    }
}

const ROOT_HEIGHT: f64 = 0.93;
const ARM_DOWN: f64 = 1.2;
const ARM_RANGE: f64 = 1.8;

/// Builds one frame in world coordinates; arm raises are in [0, 1].
#[allow(clippy::too_many_arguments)]
fn compose_pose(
    root: [f64; 2],
    yaw: f64,
    gait: f64,
    stride: f64,
    idle: &Idle,
    time: f64,
    left_raise: f64,
    right_raise: f64,
) -> Vec<f64> {
    let mut p = vec![0.0; pose_dim(SMPL_JOINTS)];
    let mut set = |j: usize, v: [f64; 3]| p[3 * j..3 * j + 3].copy_from_slice(&v);
    set(joint::PELVIS, [0.0, yaw, 0.0]);
    for (k, j) in [joint::SPINE1, joint::SPINE2, joint::SPINE3]
        .into_iter()
        .enumerate()
    {
        set(
            j,
            [
                0.025 * idle.s(k, time),
                0.02 * idle.s(k + 3, time),
                0.025 * idle.s(k + 1, time),
            ],
        );
    }
    set(
        joint::NECK,
        [0.02 * idle.s(6, time), 0.03 * idle.s(7, time), 0.0],
    );
    set(
        joint::HEAD,
        [0.02 * idle.s(7, time), 0.03 * idle.s(6, time), 0.0],
    );
    let swing = stride * gait.sin();
    set(joint::L_HIP, [-swing, 0.0, 0.0]);
    set(joint::R_HIP, [swing, 0.0, 0.0]);
    set(
        joint::L_KNEE,
        [stride * (1.0 - gait.cos()) * 0.6 + 0.05, 0.0, 0.0],
    );
    set(
        joint::R_KNEE,
        [stride * (1.0 + gait.cos()) * 0.6 + 0.05, 0.0, 0.0],
    );
    set(
        joint::L_SHOULDER,
        [0.0, 0.0, -ARM_DOWN + ARM_RANGE * left_raise],
    );
    set(
        joint::R_SHOULDER,
        [0.0, 0.0, ARM_DOWN - ARM_RANGE * right_raise],
    );
    set(joint::L_ELBOW, [0.0, -0.2 - 0.3 * left_raise, 0.0]);
    set(joint::R_ELBOW, [0.0, 0.2 + 0.3 * right_raise, 0.0]);
    let bob = 0.01 * (2.0 * gait).sin().abs() * (stride / 0.3).min(1.0);
    let n = p.len();
    p[n - 3..].copy_from_slice(&[root[0], ROOT_HEIGHT + bob, root[1]]);
    p
}

/// Shortest-arc axis-angle turning unit `a` onto unit `b`.
fn shortest_arc(a: Vec3, b: Vec3) -> [f64; 3] {
    let axis = a.cross(&b);
    let s = axis.norm();
    let c = a.dot(&b).clamp(-1.0, 1.0);
    if s < 1e-12 {
        return if c > 0.0 { [0.0; 3] } else { [0.0, PI, 0.0] };
    }
    let angle = s.atan2(c);
    let k = axis / s * angle;
    [k.x, k.y, k.z]
}

/// Points the right upper arm at `target` (world coordinates).
fn aim_right_arm(pose: &mut [f64], target: Vec3, body: &BodyModel) -> Result<()> {
    let p32: Vec<f32> = pose.iter().map(|&v| v as f32).collect();
    let sk = forward_kinematics_full(&p32, body)?;
    let parent = body.parents()[joint::R_SHOULDER].expect("shoulder has a parent");
    let to = target - sk.positions[joint::R_SHOULDER];
    if to.norm() < 1e-6 {
        return Ok(());
    }
    let local = sk.rotations[parent].inverse().rotate(&to.normalize());
    let rest = body.rest_offsets()[joint::R_ELBOW].normalize();
    let aa = shortest_arc(rest, local);
    pose[3 * joint::R_SHOULDER..3 * joint::R_SHOULDER + 3].copy_from_slice(&aa);
    pose[3 * joint::R_ELBOW..3 * joint::R_ELBOW + 3].copy_from_slice(&[0.0, 0.05, 0.0]);
    Ok(())
}

struct Track {
    roots: Vec<[f64; 2]>,
    yaws: Vec<f64>,
}

fn gait_track(roots: &[[f64; 2]], fps: f64) -> (Vec<f64>, Vec<f64>) {
    let mut phase = 0.0;
    let mut phases = Vec::with_capacity(roots.len());
    let mut strides = Vec::with_capacity(roots.len());
    for i in 0..roots.len() {
        let j = (i + 1).min(roots.len() - 1);
        let k = i.saturating_sub(1);
        let span = (j - k).max(1) as f64;
        let speed = ((roots[j][0] - roots[k][0]).powi(2) + (roots[j][1] - roots[k][1]).powi(2))
            .sqrt()
            * fps
            / span;
        phases.push(phase);
        strides.push((0.5 * speed).min(0.4));
        phase += 2.0 * PI * 1.6 * speed.min(1.5) / fps;
    }
    (phases, strides)
}

fn heading(from: [f64; 2], to: [f64; 2]) -> Option<f64> {
    let (dx, dz) = (to[0] - from[0], to[1] - from[1]);
    (dx.hypot(dz) > 1e-9).then(|| dx.atan2(dz))
}

/// Generates one episode. Deterministic in `(scenario, cfg, seed)`.
pub fn generate_interaction_episode(
    scenario: Scenario,
    cfg: &SynthConfig,
    seed: u64,
) -> Result<InteractionEpisode> {
    cfg.validate()?;
    let mut rng = seeding::rng(seed, Stream::Data);
    let scenario = match scenario {
        Scenario::Mixed => Scenario::CONCRETE[rng.random_range(0..Scenario::CONCRETE.len())],
        s => s,
    };
    let (distance, mutual, speed) = scenario.preset();
    let body = BodyModel::smpl_like();
    let fps = cfg.fps as f64;
    let f = cfg.frames;
    let rec = f + cfg.lookahead;
    let span = rec.max(f + cfg.lag);
    let kappa = cfg.kappa;

    let start = [rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0)];
    let inter_roots = planar_walk(&mut rng, start, speed, span, fps);
    let u_angle = rng.random_range(-PI..PI);
    let u0 = [u_angle.sin(), u_angle.cos()];
    let social: Vec<[f64; 2]> = (0..f)
        .map(|t| {
            let a = inter_roots[t + cfg.lag];
            [a[0] - distance * u0[0], a[1] - distance * u0[1]]
        })
        .collect();
    let own = planar_walk(&mut rng, social[0], speed, f, fps);
    let wearer_roots: Vec<[f64; 2]> = social
        .iter()
        .zip(&own)
        .map(|(s, o)| {
            [
                kappa * s[0] + (1.0 - kappa) * o[0],
                kappa * s[1] + (1.0 - kappa) * o[1],
            ]
        })
        .collect();

    // Wearer faces the interactee; the independent heading drifts slowly.
    let own_drift: Vec<f64> = smooth_noise(&mut rng, f, 30)
        .into_iter()
        .map(|v| 0.35 * v)
        .collect();
    let mut wearer_yaw: Vec<f64> = (0..f)
        .map(|t| {
            let soc = heading(wearer_roots[t], inter_roots[t]).unwrap_or(u_angle);
            let ind = u_angle + own_drift[t];
            ind + kappa * wrap(soc - ind)
        })
        .collect();
    unwrap(&mut wearer_yaw);

    // Interactee looks back at the wearer (within 5°) or away from them.
    let gaze_jitter: Vec<f64> = smooth_noise(&mut rng, rec, 20)
        .into_iter()
        .map(|v| (0.04 * v).clamp(-0.08, 0.08))
        .collect();
    let averted = rng.random_range(2.2..PI) * if rng.random::<bool>() { 1.0 } else { -1.0 };
    let mut inter_yaw: Vec<f64> = (0..rec)
        .map(|t| {
            let w = wearer_roots[t.min(f - 1)];
            let look = heading(inter_roots[t], w).unwrap_or(u_angle + PI);
            look + if mutual {
                gaze_jitter[t]
            } else {
                averted + 2.0 * gaze_jitter[t]
            }
        })
        .collect();
    unwrap(&mut inter_yaw);

    let inter_raise = raise_signal(&mut rng, span);
    let inter_left = raise_signal(&mut rng, rec);
    let wearer_own_raise = raise_signal(&mut rng, f);

    let layout = random_layout(
        SceneKind::Room,
        Vec3::new(wearer_roots[0][0], 0.0, wearer_roots[0][1]),
        wearer_yaw[0],
        &mut rng,
    );
    let focus = layout
        .focus_point()
        .expect("room scenes have a focus object");
    let scene_world = sample_layout(&layout, cfg.scene_points, &mut rng);
    let wearer_idle = Idle::new(&mut rng);
    let inter_idle = Idle::new(&mut rng);

    let wearer_track = Track {
        roots: wearer_roots,
        yaws: wearer_yaw,
    };
    let inter_track = Track {
        roots: inter_roots[..rec].to_vec(),
        yaws: inter_yaw,
    };
    let (wg, ws) = gait_track(&wearer_track.roots, fps);
    let (ig, is) = gait_track(&inter_track.roots, fps);

    let mut wearer_world = Vec::with_capacity(f);
    for t in 0..f {
        let mirror = kappa * inter_raise[t + cfg.lag] + (1.0 - kappa) * wearer_own_raise[t];
        let mut p = compose_pose(
            wearer_track.roots[t],
            wearer_track.yaws[t],
            wg[t],
            ws[t],
            &wearer_idle,
            t as f64 / fps,
            mirror,
            0.0,
        );
        aim_right_arm(&mut p, focus, &body)?;
        wearer_world.push(p);
    }
    let inter_world: Vec<Vec<f64>> = (0..rec)
        .map(|t| {
            compose_pose(
                inter_track.roots[t],
                inter_track.yaws[t],
                ig[t],
                is[t],
                &inter_idle,
                t as f64 / fps,
                inter_left[t],
                inter_raise[t],
            )
        })
        .collect();

    // Episode frame: wearer head at frame 0 is the origin, wearer faces +Z.
    let head0 = {
        let p32: Vec<f32> = wearer_world[0].iter().map(|&v| v as f32).collect();
        forward_kinematics_full(&p32, &body)?.positions[joint::HEAD]
    };
    let yaw0 = wearer_track.yaws[0];
    let (c, s) = ((-yaw0).cos(), (-yaw0).sin());
    let to_local = |p: Vec3| -> Vec3 {
        let d = p - head0;
        Vec3::new(d.x * c + d.z * s, d.y, -d.x * s + d.z * c)
    };
    let localize = |frames: &[Vec<f64>]| -> Result<PoseSequence> {
        let mut data = Vec::with_capacity(frames.len() * frames[0].len());
        for p in frames {
            let n = p.len();
            let mut q = p.clone();
            q[1] -= yaw0;
            let r = to_local(Vec3::new(p[n - 3], p[n - 2], p[n - 1]));
            q[n - 3..].copy_from_slice(&[r.x, r.y, r.z]);
            data.extend(q.iter().map(|&v| v as f32));
        }
        PoseSequence::new(data, SMPL_JOINTS, cfg.fps)
    };
    let wearer = localize(&wearer_world)?;
    let interactee = localize(&inter_world)?;
    let scene = ScenePointCloud::new(
        scene_world
            .iter()
            .map(|p| {
                let q = to_local(*p);
                [q.x as f32, q.y as f32, q.z as f32]
            })
            .collect(),
    )?;
    let meta = EpisodeMeta {
        seed,
        kappa: kappa as f32,
        scenario,
        floor_height: (layout.floor_height - head0.y) as f32,
    };
    InteractionEpisode::new(wearer, interactee, scene, meta)
}

/// `count` episodes from child seeds of `master_seed`.
/// Episode `i` uses `child_seed(master_seed, i)`, so the output does not
/// depend on how many worker threads run.
pub fn generate_episodes(
    scenario: Scenario,
    cfg: &SynthConfig,
    count: usize,
    master_seed: u64,
) -> Result<Vec<InteractionEpisode>> {
    let workers = std::thread::available_parallelism()
        .map_or(1, |n| n.get())
        .min(count.max(1));
    let one = |i: usize| {
        generate_interaction_episode(scenario, cfg, seeding::child_seed(master_seed, i as u64))
    };
    if workers <= 1 {
        return (0..count).map(one).collect();
    }
    let chunk = count.div_ceil(workers);
    let parts: Vec<Result<Vec<InteractionEpisode>>> = std::thread::scope(|s| {
        let handles: Vec<_> = (0..workers)
            .map(|w| {
                let range = (w * chunk).min(count)..((w + 1) * chunk).min(count);
                s.spawn(move || range.map(one).collect::<Result<Vec<_>>>())
            })
            .collect();
        handles
            .into_iter()
            .map(|h| h.join().expect("episode worker panicked"))
            .collect()
    });
    let mut out = Vec::with_capacity(count);
    for part in parts {
        out.extend(part?);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::body::forward_kinematics;

    #[test]
    fn floor_only_scene_is_flat() {
        let c = generate_scene_pointcloud(SceneKind::FloorOnly, 200, 4).unwrap();
        assert!(c.points().iter().all(|p| p[1].abs() < 1e-6));
        assert_eq!(
            generate_scene_pointcloud(SceneKind::Room, 1, 4)
                .unwrap()
                .len(),
            1
        );
        assert_eq!(
            generate_scene_pointcloud(SceneKind::Room, 300, 9).unwrap(),
            generate_scene_pointcloud(SceneKind::Room, 300, 9).unwrap()
        );
        assert!(generate_scene_pointcloud(SceneKind::Room, 0, 9).is_err());
        assert!("attic".parse::<SceneKind>().is_err());
    }

    #[test]
    fn scenario_names_roundtrip() {
        for s in Scenario::CONCRETE.iter().chain(&[Scenario::Mixed]) {
            assert_eq!(s.name().parse::<Scenario>().unwrap(), *s);
        }
        assert!("ballroom".parse::<Scenario>().is_err());
    }

    #[test]
    fn episode_frame_origin_and_shapes() {
        let cfg = SynthConfig {
            scene_points: 128,
            ..SynthConfig::new(20, 0.8)
        };
        let ep = generate_interaction_episode(Scenario::Conversation, &cfg, 11).unwrap();
        assert_eq!(ep.wearer.frames(), 20);
        assert_eq!(ep.interactee.frames(), 30);
        assert_eq!(ep.scene.len(), 128);
        let joints = forward_kinematics(ep.wearer.frame(0), &BodyModel::smpl_like()).unwrap();
        assert!(joints[joint::HEAD].norm() < 1e-5);
        assert!(ep.wearer.global_orient(0)[1].abs() < 1e-6);
        for t in 0..20 {
            assert!(ep.wearer.transl(t)[1] >= ep.meta.floor_height as f64);
        }
    }

    #[test]
    fn invalid_arguments() {
        assert!(
            generate_interaction_episode(Scenario::Passing, &SynthConfig::new(2, 0.5), 0).is_err()
        );
        assert!(
            generate_interaction_episode(Scenario::Passing, &SynthConfig::new(10, 1.5), 0).is_err()
        );
        assert!(
            generate_interaction_episode(Scenario::Passing, &SynthConfig::new(10, -0.1), 0)
                .is_err()
        );
    }

    #[test]
    fn wrap_and_unwrap() {
        assert!((wrap(3.0 * PI) - PI).abs() < 1e-12);
        assert!((wrap(-0.5) + 0.5).abs() < 1e-12);
        let mut a = vec![3.0, -3.0, -2.9];
        unwrap(&mut a);
        assert!((a[1] - (2.0 * PI - 3.0)).abs() < 1e-12);
        assert!(a.windows(2).all(|w| (w[1] - w[0]).abs() < PI));
    }

    #[test]
    fn shortest_arc_maps_vectors() {
        let a = Vec3::new(-1.0, 0.0, 0.0);
        for b in [
            Vec3::new(0.0, 1.0, 0.0),
            Vec3::new(0.3, -0.2, 0.9).normalize(),
            a,
            -a,
        ] {
            let r = crate::body::axis_angle_to_matrix(shortest_arc(a, b)).unwrap();
            assert!((r.rotate(&a) - b).norm() < 1e-9);
        }
    }
}
