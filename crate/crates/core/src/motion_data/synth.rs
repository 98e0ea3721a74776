//! Synthetic labeled motion corpus built from parameterized archetypes.
//!
//! Every sequence is produced in world space at a random start heading and
//! position, perturbed with small joint noise, canonicalized and converted to
//! the frame representation. Joints after the root come in left/right pairs:
//! hands, feet, then elbows, knees and further interpolated points.

use std::f64::consts::{FRAC_PI_2, PI, TAU};

use rand::seq::IndexedRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{canonicalize, from_joint_positions, to_joint_positions, JointTrajectory, MotionSequence, RepresentationSpec};
use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Matrix;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Archetype {
    WalkStraight,
    WalkCircle,
    RaiseArm,
    Squat,
    Wave,
    Jump,
}

impl Archetype {
    pub const ALL: [Archetype; 6] = [
        Archetype::WalkStraight,
        Archetype::WalkCircle,
        Archetype::RaiseArm,
        Archetype::Squat,
        Archetype::Wave,
        Archetype::Jump,
    ];

    pub fn variants(self) -> usize {
        match self {
            Archetype::RaiseArm => 3,
            _ => 2,
        }
    }

    /// Frame label of a variant.
    pub fn label(self, variant: usize) -> &'static str {
        VARIANT_TEXT[self as usize][variant].0
    }

    /// Sentence predicates of a variant; prompts prepend a subject.
    pub fn predicates(self, variant: usize) -> &'static [&'static str] {
        VARIANT_TEXT[self as usize][variant].1
    }
}

type VariantText = (&'static str, &'static [&'static str]);

const SUBJECTS: [&str; 4] = ["a person", "someone", "a man", "a woman"];

const VARIANT_TEXT: [&[VariantText]; 6] = [
    &[
        (
            "walk slowly forward",
            &["walks slowly forward", "strolls straight ahead at a slow pace", "walks forward at a leisurely pace"],
        ),
        (
            "walk quickly forward",
            &["walks quickly forward", "hurries straight ahead", "walks forward at a fast pace"],
        ),
    ],
    &[
        (
            "walk in a circle turning right",
            &["walks in a clockwise circle", "walks around in a circle turning right", "circles to the right while walking"],
        ),
        (
            "walk in a circle turning left",
            &["walks in a counterclockwise circle", "walks around in a circle turning left", "circles to the left while walking"],
        ),
    ],
    &[
        (
            "raise the left arm",
            &["raises the left arm to the side", "lifts their left arm sideways", "holds the left arm out"],
        ),
        (
            "raise the right arm",
            &["raises the right arm to the side", "lifts their right arm sideways", "holds the right arm out"],
        ),
        (
            "raise both arms",
            &["raises both arms to the side", "lifts both arms sideways", "holds both arms out"],
        ),
    ],
    &[
        ("squat deeply", &["squats down deeply", "does deep squats", "bends the knees all the way down"]),
        ("squat slightly", &["does shallow squats", "squats down a little", "bends the knees slightly"]),
    ],
    &[
        ("wave the left hand", &["waves with the left hand", "waves the left hand above the head", "greets with the left hand"]),
        ("wave the right hand", &["waves with the right hand", "waves the right hand above the head", "greets with the right hand"]),
    ],
    &[
        ("jump high", &["jumps high in place", "does big jumps", "leaps high up and down"]),
        ("jump low", &["does small hops in place", "jumps a little", "hops lightly up and down"]),
    ],
];

/// Parameters of the synthetic corpus.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthSpec {
    /// Number of archetypes used, taken in the order of [`Archetype::ALL`].
    pub classes: usize,
    pub joints: usize,
    pub fps: f64,
    pub min_frames: usize,
    pub max_frames: usize,
    /// Standard deviation of per-joint positional noise, metres.
    pub noise: f64,
    /// Minimum mean joint distance required between the templates of two archetypes.
    pub margin: f64,
}

impl Default for SynthSpec {
    fn default() -> Self {
        Self { classes: 5, joints: 5, fps: 20.0, min_frames: 40, max_frames: 80, noise: 0.005, margin: 0.05 }
    }
}

impl SynthSpec {
    pub fn representation(&self) -> Result<RepresentationSpec> {
        RepresentationSpec::toy(self.joints, self.fps)
    }

    pub fn archetypes(&self) -> &'static [Archetype] {
        &Archetype::ALL[..self.classes.min(Archetype::ALL.len())]
    }

    pub fn validate(&self) -> Result<()> {
        self.representation()?;
        if !(4..=Archetype::ALL.len()).contains(&self.classes) {
            return Err(Error::Config(format!(
                "classes must be between 4 and {}, got {}",
                Archetype::ALL.len(),
                self.classes
            )));
        }
        if self.joints.is_multiple_of(2) {
            return Err(Error::Config(format!(
                "synthetic skeletons have a root plus left/right pairs, so an odd joint count; got {}",
                self.joints
            )));
        }
        if self.min_frames < 2 || self.max_frames < self.min_frames {
            return Err(Error::Config(format!(
                "invalid length range {}..={}",
                self.min_frames, self.max_frames
            )));
        }
        if !(self.noise >= 0.0 && self.noise.is_finite()) {
            return Err(Error::Config("noise must be a finite nonnegative number".into()));
        }
        Ok(())
    }
}

/// Per-sequence randomization of an archetype.
#[derive(Clone, Copy, Debug)]
struct Style {
    variant: usize,
    /// Body size scale.
    body: f64,
    /// Amplitude and tempo scale.
    gain: f64,
    phase: f64,
}

impl Style {
    const NEUTRAL: Style = Style { variant: 0, body: 1.0, gain: 1.0, phase: 0.0 };
}

/// Root and limb pose of one frame, limbs in the body frame (left is `+x`).
struct Pose {
    height: f64,
    hands: [[f64; 3]; 2],
    feet: [[f64; 3]; 2],
}

const SHOULDER: [f64; 2] = [0.2, 0.5];
const ARM: f64 = 0.6;
const HIP: f64 = 0.1;
const LEG: f64 = 0.9;

/// Hand position for an arm raised by `angle` from hanging, in the sideways plane.
fn hand(side: f64, angle: f64, forward: f64, body: f64) -> [f64; 3] {
    [
        side * body * (SHOULDER[0] + ARM * angle.sin()),
        body * (SHOULDER[1] - ARM * angle.cos()),
        body * forward,
    ]
}

fn smoothstep(a: f64, b: f64, x: f64) -> f64 {
    let t = ((x - a) / (b - a)).clamp(0.0, 1.0);
    t * t * (3.0 - 2.0 * t)
}

/// Planar root state: position and heading.
struct Root {
    x: f64,
    z: f64,
    yaw: f64,
}

fn walking(speed: f64, turn: f64, style: Style, t: f64, start: &Root) -> (Root, Pose) {
    let b = style.body;
    let cadence = 0.8 + 0.6 * speed;
    let p = TAU * cadence * style.gain * t + style.phase;
    let swing = 0.25 * b * style.gain.sqrt() * p.sin();
    let yaw = start.yaw + turn * t;
    let (x, z) = if turn.abs() < 1e-12 {
        (start.x + speed * t * start.yaw.sin(), start.z + speed * t * start.yaw.cos())
    } else {
        let r = speed / turn;
        (start.x + r * (start.yaw.cos() - yaw.cos()), start.z + r * (yaw.sin() - start.yaw.sin()))
    };
    let height = b * (LEG - 0.02 * p.sin().abs());
    let lift = |s: f64| 0.05 * b * (s * p.cos()).max(0.0);
    let pose = Pose {
        height,
        hands: [hand(1.0, 0.1, -swing / b, b), hand(-1.0, 0.1, swing / b, b)],
        feet: [
            [HIP * b, -height + lift(1.0), swing],
            [-HIP * b, -height + lift(-1.0), -swing],
        ],
    };
    (Root { x, z, yaw }, pose)
}

fn standing(body: f64) -> Pose {
    Pose {
        height: body * LEG,
        hands: [hand(1.0, 0.1, 0.0, body), hand(-1.0, 0.1, 0.0, body)],
        feet: [[HIP * body, -body * LEG, 0.0], [-HIP * body, -body * LEG, 0.0]],
    }
}

fn pose_at(archetype: Archetype, style: Style, t: f64, duration: f64, start: &Root) -> (Root, Pose) {
    let b = style.body;
    let still = || Root { x: start.x, z: start.z, yaw: start.yaw };
    match archetype {
        Archetype::WalkStraight => {
            let speed = [0.7, 1.5][style.variant] * style.gain;
            walking(speed, 0.0, style, t, start)
        }
        Archetype::WalkCircle => {
            let turn = [-1.0, 1.0][style.variant] * 0.9 * style.gain;
            walking(1.0, turn, style, t, start)
        }
        Archetype::RaiseArm => {
            let u = t / duration.max(1e-9);
            let angle = 0.1 + (FRAC_PI_2 - 0.1 + 0.1 * style.gain) * smoothstep(0.05, 0.45, u);
            let mut pose = standing(b);
            let (left, right) = [(true, false), (false, true), (true, true)][style.variant];
            if left {
                pose.hands[0] = hand(1.0, angle, 0.0, b);
            }
            if right {
                pose.hands[1] = hand(-1.0, angle, 0.0, b);
            }
            (still(), pose)
        }
        Archetype::Squat => {
            let depth = [0.45, 0.18][style.variant] * style.gain;
            let period = 2.2 / style.gain;
            let dip = depth * 0.5 * (1.0 - (TAU * t / period + 0.3 * style.phase.sin()).cos());
            let height = b * LEG - dip;
            let reach = FRAC_PI_2 * dip / 0.45;
            let pose = Pose {
                height,
                hands: [
                    [b * SHOULDER[0], b * (SHOULDER[1] - ARM * reach.cos()), b * ARM * reach.sin()],
                    [-b * SHOULDER[0], b * (SHOULDER[1] - ARM * reach.cos()), b * ARM * reach.sin()],
                ],
                feet: [[HIP * b, -height, 0.0], [-HIP * b, -height, 0.0]],
            };
            (still(), pose)
        }
        Archetype::Wave => {
            let angle = 2.5 + 0.35 * (TAU * 1.6 * style.gain * t + style.phase).sin();
            let mut pose = standing(b);
            let side = [1.0, -1.0][style.variant];
            pose.hands[style.variant] = hand(side, angle, 0.0, b);
            (still(), pose)
        }
        Archetype::Jump => {
            let lift = [0.35, 0.12][style.variant] * style.gain;
            let period = 1.0 / style.gain;
            let s = (TAU * t / period + 0.3 * style.phase.sin()).sin().max(0.0);
            let air = lift * s * s;
            let arm = 0.3 + 1.4 * s;
            let pose = Pose {
                height: b * LEG + air,
                hands: [hand(1.0, arm, 0.0, b), hand(-1.0, arm, 0.0, b)],
                feet: [[HIP * b, -b * LEG, 0.0], [-HIP * b, -b * LEG, 0.0]],
            };
            (still(), pose)
        }
    }
}

/// Body-frame offsets of all non-root joints for a given joint count.
fn limb_offsets(pose: &Pose, joints: usize, body: f64) -> Vec<[f64; 3]> {
    let mut out = Vec::with_capacity(joints - 1);
    let pairs = (joints - 1) / 2;
    for k in 0..pairs {
        for side in 0..2 {
            let sign = if side == 0 { 1.0 } else { -1.0 };
            let p = match k {
                0 => pose.hands[side],
                1 => pose.feet[side],
                _ => {
                    // Points along the arm (even k) or leg (odd k) at decreasing fractions.
                    let frac = 1.0 / (1.0 + (k / 2) as f64);
                    let (anchor, end) = if k % 2 == 0 {
                        ([sign * body * SHOULDER[0], body * SHOULDER[1], 0.0], pose.hands[side])
                    } else {
                        ([sign * body * HIP, 0.0, 0.0], pose.feet[side])
                    };
                    [
                        anchor[0] + frac * (end[0] - anchor[0]),
                        anchor[1] + frac * (end[1] - anchor[1]),
                        anchor[2] + frac * (end[2] - anchor[2]),
                    ]
                }
            };
            out.push(p);
        }
    }
    out
}

fn world_trajectory(
    archetype: Archetype,
    style: Style,
    frames: usize,
    joints: usize,
    fps: f64,
    start: &Root,
) -> JointTrajectory<f64> {
    let duration = (frames - 1) as f64 / fps;
    let mut pos = Matrix::zeros(frames, 3 * joints);
    for f in 0..frames {
        let t = f as f64 / fps;
        let (root, pose) = pose_at(archetype, style, t, duration, start);
        let (s, c) = root.yaw.sin_cos();
        let row = pos.row_mut(f);
        row[0] = root.x;
        row[1] = pose.height;
        row[2] = root.z;
        for (j, p) in limb_offsets(&pose, joints, style.body).iter().enumerate() {
            let base = 3 * (j + 1);
            row[base] = root.x + p[0] * c + p[2] * s;
            row[base + 1] = pose.height + p[1];
            row[base + 2] = root.z - p[0] * s + p[2] * c;
        }
    }
    JointTrajectory::new(joints, pos).expect("trajectory width matches joint count")
}

fn synth_one<T: Scalar>(spec: &SynthSpec, rep: RepresentationSpec, seed: u64, index: usize) -> Result<MotionSequence<T>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index as u64);
    let archetypes = spec.archetypes();
    let class = rng.random_range(0..archetypes.len());
    let archetype = archetypes[class];
    let style = Style {
        variant: rng.random_range(0..archetype.variants()),
        body: rng.random_range(0.95..1.05),
        gain: rng.random_range(0.9..1.1),
        phase: rng.random_range(0.0..TAU),
    };
    let frames = rng.random_range(spec.min_frames..=spec.max_frames);
    let start = Root { x: rng.random_range(-3.0..3.0), z: rng.random_range(-3.0..3.0), yaw: rng.random_range(-PI..PI) };
    let mut traj = world_trajectory(archetype, style, frames, spec.joints, spec.fps, &start);
    if spec.noise > 0.0 {
        let noise = Normal::new(0.0, spec.noise).map_err(|e| Error::Config(e.to_string()))?;
        for f in 0..frames {
            let row = traj.positions.row_mut(f);
            for j in 1..spec.joints {
                row[3 * j] += noise.sample(&mut rng);
                row[3 * j + 1] += noise.sample(&mut rng);
            }
        }
    }
    let canon = canonicalize(&traj, &rep);
    let motion = from_joint_positions(&canon, rep)?;
    let label = archetype.label(style.variant).to_string();
    let predicates = archetype.predicates(style.variant);
    let count = rng.random_range(1..=3usize.min(predicates.len()));
    let prompts = predicates
        .choose_multiple(&mut rng, count)
        .map(|p| format!("{} {}", SUBJECTS.choose(&mut rng).expect("subjects"), p))
        .collect();
    Ok(MotionSequence {
        frames: motion.frames.cast(),
        spec: rep,
        labels: Some(vec![label; frames]),
        prompts,
        class_id: Some(class as u32),
    })
}

/// Generate `count` labeled sequences. A pure function of its arguments.
pub fn synth_corpus<T: Scalar>(spec: &SynthSpec, count: usize, seed: u64) -> Result<Vec<MotionSequence<T>>> {
    spec.validate()?;
    if count < 1 {
        return Err(Error::Config("corpus size must be at least 1".into()));
    }
    let separation = archetype_separation(spec);
    if separation < spec.margin {
        return Err(Error::Config(format!(
            "archetypes are only {separation:.4} m apart, below the margin {}",
            spec.margin
        )));
    }
    let rep = spec.representation()?;
    (0..count).into_par_iter().map(|i| synth_one(spec, rep, seed, i)).collect()
}

/// Mean Euclidean joint distance over the common frame prefix.
pub fn mean_joint_distance<T: Scalar>(a: &JointTrajectory<T>, b: &JointTrajectory<T>) -> f64 {
    let frames = a.frames().min(b.frames());
    let joints = a.joints.min(b.joints);
    if frames == 0 || joints == 0 {
        return 0.0;
    }
    let mut total = 0.0;
    for f in 0..frames {
        for j in 0..joints {
            let (p, q) = (a.joint(f, j), b.joint(f, j));
            total += (0..3).map(|k| (p[k].as_f64() - q[k].as_f64()).powi(2)).sum::<f64>().sqrt();
        }
    }
    total / (frames * joints) as f64
}

/// Smallest mean joint distance between neutral instances of two different
/// archetypes (every variant pair considered), in canonical placement.
pub fn archetype_separation(spec: &SynthSpec) -> f64 {
    let Ok(rep) = spec.representation() else { return 0.0 };
    let frames = spec.min_frames.max(2);
    let start = Root { x: 0.0, z: 0.0, yaw: 0.0 };
    let templates: Vec<Vec<JointTrajectory<f64>>> = spec
        .archetypes()
        .iter()
        .map(|&a| {
            (0..a.variants())
                .map(|variant| {
                    let style = Style { variant, ..Style::NEUTRAL };
                    canonicalize(&world_trajectory(a, style, frames, spec.joints, spec.fps, &start), &rep)
                })
                .collect()
        })
        .collect();
    let mut best = f64::INFINITY;
    for (i, a) in templates.iter().enumerate() {
        for b in &templates[i + 1..] {
            for ta in a {
                for tb in b {
                    best = best.min(mean_joint_distance(ta, tb));
                }
            }
        }
    }
    best
}

/// Mean joint distance between sequences of different classes, averaged over
/// up to `max_pairs` randomly drawn cross-class pairs.
pub fn mean_interclass_distance<T: Scalar>(corpus: &[MotionSequence<T>], max_pairs: usize, seed: u64) -> Result<f64> {
    let trajs: Vec<JointTrajectory<T>> = corpus.iter().map(to_joint_positions).collect::<Result<_>>()?;
    let mut pairs = Vec::new();
    for i in 0..corpus.len() {
        for j in i + 1..corpus.len() {
            if corpus[i].class_id.is_some() && corpus[i].class_id != corpus[j].class_id && corpus[j].class_id.is_some() {
                pairs.push((i, j));
            }
        }
    }
    if pairs.is_empty() {
        return Err(Error::Invalid("corpus has no pair of sequences from different classes".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let chosen: Vec<&(usize, usize)> = if pairs.len() > max_pairs {
        pairs.choose_multiple(&mut rng, max_pairs).collect()
    } else {
        pairs.iter().collect()
    };
    let total: f64 = chosen.iter().map(|&&(i, j)| mean_joint_distance(&trajs[i], &trajs[j])).sum();
    Ok(total / chosen.len() as f64)
}
