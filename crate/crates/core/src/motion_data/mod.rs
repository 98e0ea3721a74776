//! Motion representation, kinematic recovery, normalization, the synthetic
//! labeled corpus and the corpus container format.
//!
//! A frame row is laid out as
//! `[root yaw velocity, root planar velocity (x, z), root height, local joints]`
//! with `3 * (J - 1)` local coordinates for the non-root joints, expressed in
//! the root's heading frame. Velocities are per second. The vertical axis is
//! `y`; a body at heading 0 faces `+z` with its left side towards `+x`.

mod corpus_io;
mod kinematics;
mod synth;

pub use corpus_io::{decode_corpus, encode_corpus, read_corpus, write_corpus, CORPUS_MAGIC, CORPUS_VERSION};
pub use kinematics::{
    canonicalize, facing_yaw, from_joint_positions, rotate_about_vertical, to_joint_positions,
    to_joint_positions_from,
};
pub use synth::{
    archetype_separation, mean_interclass_distance, mean_joint_distance, synth_corpus, Archetype, SynthSpec,
};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Matrix;

/// Floor applied to every normalization standard deviation.
pub const STD_FLOOR: f64 = 1e-6;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Layout {
    /// Configurable joint count, joints after the root grouped as left/right pairs.
    Toy,
    /// The 22-joint, 67-channel root-trajectory plus local-position layout.
    Guo67Style,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct RepresentationSpec {
    pub layout: Layout,
    pub joints: usize,
    pub fps: f64,
}

impl RepresentationSpec {
    pub const GUO67_JOINTS: usize = 22;

    pub fn toy(joints: usize, fps: f64) -> Result<Self> {
        let spec = Self { layout: Layout::Toy, joints, fps };
        spec.validate()?;
        Ok(spec)
    }

    pub fn guo67(fps: f64) -> Self {
        Self { layout: Layout::Guo67Style, joints: Self::GUO67_JOINTS, fps }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.fps.is_finite() && self.fps > 0.0) {
            return Err(Error::Config(format!("fps must be positive, got {}", self.fps)));
        }
        match self.layout {
            Layout::Toy if self.joints < 3 => {
                Err(Error::Config(format!("toy layout needs at least 3 joints, got {}", self.joints)))
            }
            Layout::Guo67Style if self.joints != Self::GUO67_JOINTS => Err(Error::Config(format!(
                "67-channel layout has 22 joints, got {}",
                self.joints
            ))),
            _ => Ok(()),
        }
    }

    /// Channels per frame: `4 + 3 (J - 1)`.
    pub fn dim(&self) -> usize {
        4 + 3 * (self.joints - 1)
    }

    /// `(left, right)` joint pairs whose across-body vectors define the heading.
    pub fn lateral_pairs(&self) -> Vec<(usize, usize)> {
        match self.layout {
            // hips and shoulders of the 22-joint skeleton
            Layout::Guo67Style => vec![(1, 2), (16, 17)],
            Layout::Toy => (1..self.joints - 1).step_by(2).map(|j| (j, j + 1)).collect(),
        }
    }
}

/// Joint positions, one row per frame, `3 * joints` columns of `(x, y, z)` in metres.
#[derive(Clone, Debug, PartialEq)]
pub struct JointTrajectory<T> {
    pub joints: usize,
    pub positions: Matrix<T>,
}

impl<T: Scalar> JointTrajectory<T> {
    pub fn new(joints: usize, positions: Matrix<T>) -> Result<Self> {
        if positions.cols() != 3 * joints {
            return Err(Error::Shape(format!(
                "{} columns cannot hold {joints} joints",
                positions.cols()
            )));
        }
        Ok(Self { joints, positions })
    }

    pub fn frames(&self) -> usize {
        self.positions.rows()
    }

    pub fn joint(&self, frame: usize, joint: usize) -> [T; 3] {
        let r = self.positions.row(frame);
        [r[3 * joint], r[3 * joint + 1], r[3 * joint + 2]]
    }
}

/// A motion clip plus its annotations.
#[derive(Clone, Debug, PartialEq)]
pub struct MotionSequence<T> {
    pub frames: Matrix<T>,
    pub spec: RepresentationSpec,
    /// One label per frame when present.
    pub labels: Option<Vec<String>>,
    pub prompts: Vec<String>,
    pub class_id: Option<u32>,
}

impl<T: Scalar> MotionSequence<T> {
    pub fn new(frames: Matrix<T>, spec: RepresentationSpec) -> Result<Self> {
        let seq = Self { frames, spec, labels: None, prompts: Vec::new(), class_id: None };
        seq.validate()?;
        Ok(seq)
    }

    pub fn len(&self) -> usize {
        self.frames.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.frames.rows() == 0
    }

    pub fn validate(&self) -> Result<()> {
        if self.frames.rows() == 0 {
            return Err(Error::Invalid("motion has no frames".into()));
        }
        if self.frames.cols() != self.spec.dim() {
            return Err(Error::Shape(format!(
                "frame width {} does not match representation width {}",
                self.frames.cols(),
                self.spec.dim()
            )));
        }
        if let Some(frame) = self.frames.first_non_finite_row() {
            return Err(Error::NonFiniteFrame { frame });
        }
        if let Some(labels) = &self.labels {
            if labels.len() != self.frames.rows() {
                return Err(Error::Invalid(format!(
                    "{} labels for {} frames",
                    labels.len(),
                    self.frames.rows()
                )));
            }
        }
        Ok(())
    }

    pub fn with_frames(&self, frames: Matrix<T>) -> Self {
        Self { frames, ..self.clone() }
    }
}

/// Right-pad by repeating the last frame until the length is a multiple of `factor`.
pub fn pad_to_multiple<T: Scalar>(frames: &Matrix<T>, factor: usize) -> Matrix<T> {
    let n = frames.rows();
    let target = n.div_ceil(factor) * factor;
    if target == n {
        return frames.clone();
    }
    let mut idx: Vec<usize> = (0..n).collect();
    idx.resize(target, n - 1);
    frames.select_rows(&idx)
}

/// Per-channel mean and standard deviation.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NormalizationStats<T> {
    pub mean: Vec<T>,
    pub std: Vec<T>,
}

impl<T: Scalar> NormalizationStats<T> {
    /// Statistics pooled over every frame of the corpus.
    pub fn from_corpus(corpus: &[MotionSequence<T>]) -> Result<Self> {
        let dim = corpus
            .first()
            .ok_or_else(|| Error::Invalid("cannot compute statistics of an empty corpus".into()))?
            .frames
            .cols();
        let mut sum = vec![0.0f64; dim];
        let mut count = 0usize;
        for seq in corpus {
            if seq.frames.cols() != dim {
                return Err(Error::Shape("mixed frame widths in corpus".into()));
            }
            for r in 0..seq.frames.rows() {
                for (s, &x) in sum.iter_mut().zip(seq.frames.row(r)) {
                    *s += x.as_f64();
                }
            }
            count += seq.frames.rows();
        }
        let mean: Vec<f64> = sum.iter().map(|s| s / count as f64).collect();
        let mut var = vec![0.0f64; dim];
        for seq in corpus {
            for r in 0..seq.frames.rows() {
                for ((v, &x), &m) in var.iter_mut().zip(seq.frames.row(r)).zip(&mean) {
                    let d = x.as_f64() - m;
                    *v += d * d;
                }
            }
        }
        Ok(Self {
            mean: mean.iter().map(|&m| T::lit(m)).collect(),
            std: var.iter().map(|&v| T::lit((v / count as f64).sqrt().max(STD_FLOOR))).collect(),
        })
    }

    pub fn identity(dim: usize) -> Self {
        Self { mean: vec![T::zero(); dim], std: vec![T::one(); dim] }
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    fn check(&self, cols: usize) -> Result<()> {
        if cols != self.dim() {
            return Err(Error::Shape(format!(
                "statistics cover {} channels, frames have {cols}",
                self.dim()
            )));
        }
        Ok(())
    }

    /// `(x - mean) / std` per channel.
    pub fn normalize(&self, frames: &Matrix<T>) -> Result<Matrix<T>> {
        self.check(frames.cols())?;
        Ok(Matrix::from_fn(frames.rows(), frames.cols(), |r, c| {
            (frames.get(r, c) - self.mean[c]) / self.std[c]
        }))
    }

    pub fn denormalize(&self, frames: &Matrix<T>) -> Result<Matrix<T>> {
        self.check(frames.cols())?;
        Ok(Matrix::from_fn(frames.rows(), frames.cols(), |r, c| {
            frames.get(r, c) * self.std[c] + self.mean[c]
        }))
    }

    pub fn normalize_motion(&self, motion: &MotionSequence<T>) -> Result<MotionSequence<T>> {
        Ok(motion.with_frames(self.normalize(&motion.frames)?))
    }

    pub fn denormalize_motion(&self, motion: &MotionSequence<T>) -> Result<MotionSequence<T>> {
        Ok(motion.with_frames(self.denormalize(&motion.frames)?))
    }

    pub fn cast<U: Scalar>(&self) -> NormalizationStats<U> {
        NormalizationStats {
            mean: self.mean.iter().map(|x| U::lit(x.as_f64())).collect(),
            std: self.std.iter().map(|x| U::lit(x.as_f64())).collect(),
        }
    }
}
