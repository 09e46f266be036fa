//! Latent frames and sequences of frames.

use crate::error::{invalid, shape_err, Result};

/// One latent frame, flattened `C*H*W`.
#[derive(Debug, Clone, PartialEq)]
pub struct Frame(Vec<f64>);

impl Frame {
    pub fn new(data: Vec<f64>) -> Self {
        Frame(data)
    }

    pub fn zeros(dim: usize) -> Self {
        Frame(vec![0.0; dim])
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn as_mut_slice(&mut self) -> &mut [f64] {
        &mut self.0
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.0
    }

    pub fn is_finite(&self) -> bool {
        self.0.iter().all(|v| v.is_finite())
    }

    pub fn norm(&self) -> f64 {
        self.0.iter().map(|v| v * v).sum::<f64>().sqrt()
    }

    pub fn squared_distance(&self, other: &Frame) -> Result<f64> {
        if self.len() != other.len() {
            return Err(shape_err!(
                "frame dimensions differ: {} vs {}",
                self.len(),
                other.len()
            ));
        }
        Ok(self
            .0
            .iter()
            .zip(&other.0)
            .map(|(a, b)| (a - b) * (a - b))
            .sum())
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Frame {
        Frame(self.0.iter().map(|&v| f(v)).collect())
    }
}

impl From<Vec<f64>> for Frame {
    fn from(v: Vec<f64>) -> Self {
        Frame(v)
    }
}

/// An ordered list of frames sharing one dimension.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct LatentSequence {
    frames: Vec<Frame>,
}

impl LatentSequence {
    /// Builds a sequence, rejecting mixed frame dimensions. Empty sequences
    /// are allowed here (buffer content with `B = 0`); operations that need
    /// frames check length themselves.
    pub fn new(frames: Vec<Frame>) -> Result<Self> {
        if let Some(first) = frames.first() {
            let d = first.len();
            if let Some((i, f)) = frames.iter().enumerate().find(|(_, f)| f.len() != d) {
                return Err(shape_err!(
                    "frame {i} has dimension {} but frame 0 has {d}",
                    f.len()
                ));
            }
        }
        Ok(Self { frames })
    }

    pub fn empty() -> Self {
        Self { frames: Vec::new() }
    }

    pub fn zeros(len: usize, dim: usize) -> Self {
        Self {
            frames: vec![Frame::zeros(dim); len],
        }
    }

    pub fn len(&self) -> usize {
        self.frames.len()
    }

    pub fn is_empty(&self) -> bool {
        self.frames.is_empty()
    }

    /// Frame dimension, or `None` for an empty sequence.
    pub fn dim(&self) -> Option<usize> {
        self.frames.first().map(Frame::len)
    }

    pub fn frames(&self) -> &[Frame] {
        &self.frames
    }

    pub fn frames_mut(&mut self) -> &mut [Frame] {
        &mut self.frames
    }

    pub fn into_frames(self) -> Vec<Frame> {
        self.frames
    }

    pub fn get(&self, i: usize) -> Option<&Frame> {
        self.frames.get(i)
    }

    pub fn slice(&self, start: usize, end: usize) -> Result<LatentSequence> {
        if start > end || end > self.len() {
            return Err(invalid!(
                "slice {start}..{end} out of range for sequence of length {}",
                self.len()
            ));
        }
        Ok(Self {
            frames: self.frames[start..end].to_vec(),
        })
    }

    /// Concatenates along time.
    pub fn concat(parts: &[&LatentSequence]) -> Result<LatentSequence> {
        let frames: Vec<Frame> = parts
            .iter()
            .flat_map(|p| p.frames.iter().cloned())
            .collect();
        Self::new(frames)
    }

    pub fn push(&mut self, frame: Frame) -> Result<()> {
        if let Some(d) = self.dim() {
            if frame.len() != d {
                return Err(shape_err!(
                    "pushed frame has dimension {} but sequence has {d}",
                    frame.len()
                ));
            }
        }
        self.frames.push(frame);
        Ok(())
    }

    pub fn is_finite(&self) -> bool {
        self.frames.iter().all(Frame::is_finite)
    }

    /// All values, frame-major.
    pub fn flatten(&self) -> Vec<f64> {
        self.frames
            .iter()
            .flat_map(|f| f.as_slice().iter().copied())
            .collect()
    }
}

impl std::ops::Index<usize> for LatentSequence {
    type Output = Frame;
    fn index(&self, i: usize) -> &Frame {
        &self.frames[i]
    }
}

impl std::ops::IndexMut<usize> for LatentSequence {
    fn index_mut(&mut self, i: usize) -> &mut Frame {
        &mut self.frames[i]
    }
}

impl FromIterator<Frame> for LatentSequence {
    /// Panics on mixed dimensions; use [`LatentSequence::new`] for fallible
    /// construction.
    fn from_iter<I: IntoIterator<Item = Frame>>(iter: I) -> Self {
        LatentSequence::new(iter.into_iter().collect()).expect("mixed frame dimensions")
    }
}
