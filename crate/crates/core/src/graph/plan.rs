//! Index plans for structured ops: row gathers (convolutions, upsampling,
//! cropping), block-diagonal attention, and root-trajectory kinematics.

use std::ops::Range;

/// Sentinel meaning "read zeros" in a [`GatherPlan`].
pub const ZERO_ROW: u32 = u32::MAX;

/// A contiguous run of rows belonging to one sequence in a packed batch.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Segment {
    pub start: usize,
    pub len: usize,
}

impl Segment {
    pub fn new(start: usize, len: usize) -> Self {
        Self { start, len }
    }

    pub fn range(&self) -> Range<usize> {
        self.start..self.start + self.len
    }

    /// Consecutive segments for the given lengths.
    pub fn pack(lengths: impl IntoIterator<Item = usize>) -> Vec<Segment> {
        let mut start = 0;
        lengths
            .into_iter()
            .map(|len| {
                let s = Segment { start, len };
                start += len;
                s
            })
            .collect()
    }

    pub fn total(segments: &[Segment]) -> usize {
        segments.iter().map(|s| s.len).sum()
    }
}

/// How a convolution fills the positions left of a sequence start.
#[derive(Clone, Copy, Debug, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Padding {
    Zero,
    Replicate,
}

/// Row gather: output row `r`, tap `t` copies input row `index[r * taps + t]`
/// (or zeros for [`ZERO_ROW`]) into columns `t * cols .. (t + 1) * cols`.
#[derive(Clone, Debug)]
pub struct GatherPlan {
    pub in_rows: usize,
    pub out_rows: usize,
    pub taps: usize,
    pub index: Vec<u32>,
}

impl GatherPlan {
    /// Select rows, one tap.
    pub fn rows(in_rows: usize, indices: &[usize]) -> Self {
        assert!(indices.iter().all(|&i| i < in_rows));
        Self {
            in_rows,
            out_rows: indices.len(),
            taps: 1,
            index: indices.iter().map(|&i| i as u32).collect(),
        }
    }

    /// Causal 1-D convolution window extraction (im2col) over packed segments.
    ///
    /// Output position `o` of a segment reads input positions
    /// `o * stride - left_pad + t * dilation` for taps `t = 0..kernel`.
    pub fn causal_conv(
        segments: &[Segment],
        kernel: usize,
        stride: usize,
        dilation: usize,
        left_pad: usize,
        padding: Padding,
    ) -> (Self, Vec<Segment>) {
        let in_rows = Segment::total(segments);
        let mut index = Vec::new();
        let mut out_lens = Vec::with_capacity(segments.len());
        for seg in segments {
            let span = dilation * (kernel - 1) + 1;
            let padded = seg.len + left_pad;
            let out_len = if padded >= span { (padded - span) / stride + 1 } else { 0 };
            for o in 0..out_len {
                for t in 0..kernel {
                    let pos = (o * stride + t * dilation) as isize - left_pad as isize;
                    let idx = if pos < 0 {
                        match padding {
                            Padding::Zero => ZERO_ROW,
                            Padding::Replicate => seg.start as u32,
                        }
                    } else {
                        (seg.start + pos as usize) as u32
                    };
                    index.push(idx);
                }
            }
            out_lens.push(out_len);
        }
        let out_segments = Segment::pack(out_lens);
        let out_rows = Segment::total(&out_segments);
        (Self { in_rows, out_rows, taps: kernel, index }, out_segments)
    }

    /// Nearest-neighbour temporal upsampling by `factor`.
    pub fn upsample(segments: &[Segment], factor: usize) -> (Self, Vec<Segment>) {
        let in_rows = Segment::total(segments);
        let mut index = Vec::with_capacity(in_rows * factor);
        for seg in segments {
            for o in 0..seg.len * factor {
                index.push((seg.start + o / factor) as u32);
            }
        }
        let out_segments = Segment::pack(segments.iter().map(|s| s.len * factor));
        (Self { in_rows, out_rows: in_rows * factor, taps: 1, index }, out_segments)
    }

    /// Keep the first `keep[i]` rows of each segment.
    pub fn crop(segments: &[Segment], keep: &[usize]) -> (Self, Vec<Segment>) {
        assert_eq!(segments.len(), keep.len());
        let in_rows = Segment::total(segments);
        let mut idx = Vec::new();
        for (seg, &k) in segments.iter().zip(keep) {
            assert!(k <= seg.len, "crop longer than segment");
            idx.extend(seg.start..seg.start + k);
        }
        (Self::rows(in_rows, &idx), Segment::pack(keep.iter().copied()))
    }

    /// Pairs of rows `(n + 1, n)` within every segment, for temporal differences.
    pub fn successive(segments: &[Segment]) -> (Self, Self) {
        let in_rows = Segment::total(segments);
        let mut next = Vec::new();
        let mut prev = Vec::new();
        for seg in segments {
            for n in 0..seg.len.saturating_sub(1) {
                next.push(seg.start + n + 1);
                prev.push(seg.start + n);
            }
        }
        (Self::rows(in_rows, &next), Self::rows(in_rows, &prev))
    }
}

/// One block of block-diagonal attention.
#[derive(Clone, Debug)]
pub struct AttnSegment {
    pub queries: Range<usize>,
    pub keys: Range<usize>,
    /// `false` marks keys that must receive zero attention weight.
    pub key_mask: Option<Vec<bool>>,
}

#[derive(Clone, Debug)]
pub struct AttnPlan {
    pub heads: usize,
    pub segments: Vec<AttnSegment>,
}

impl AttnPlan {
    /// Full bidirectional self-attention inside each segment.
    pub fn self_attention(segments: &[Segment], heads: usize) -> Self {
        Self {
            heads,
            segments: segments
                .iter()
                .map(|s| AttnSegment { queries: s.range(), keys: s.range(), key_mask: None })
                .collect(),
        }
    }
}

/// Root-trajectory forward kinematics over packed sequences.
#[derive(Clone, Debug)]
pub struct KinematicsPlan {
    pub segments: Vec<Segment>,
    pub joints: usize,
    pub fps: f64,
}
