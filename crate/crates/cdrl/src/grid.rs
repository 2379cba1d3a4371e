//! Image container shared by every stage of the pipeline.
//!
//! An [`ImageGrid`] is a dense H×W×C float32 grid stored **planar**
//! (channel-major): element `(c, y, x)` lives at `data[(c * h + y) * w + x]`.
//! Images, feature maps, error maps and masks all ride in this one type; the
//! [`ValueSpace`] tag says which numeric range the payload lives in.

use crate::error::{CdrlError, Result};
use serde::{Deserialize, Serialize};

/// Numeric range an [`ImageGrid`] is expected to stay inside.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ValueSpace {
    /// [0, 1] — storage and I/O space.
    Unit,
    /// [-1, 1] — model input/output space.
    Model,
    /// [0, ∞) — error maps and other nonnegative payloads.
    Nonneg,
}

impl ValueSpace {
    pub fn contains(self, v: f32) -> bool {
        match self {
            ValueSpace::Unit => (0.0..=1.0).contains(&v),
            ValueSpace::Model => (-1.0..=1.0).contains(&v),
            ValueSpace::Nonneg => v >= 0.0,
        }
    }
}

/// Where a pair came from. Training only ever consumes `Pseudo` pairs.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Provenance {
    Real,
    Pseudo,
    Synthetic,
}

impl std::fmt::Display for Provenance {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let s = match self {
            Provenance::Real => "real",
            Provenance::Pseudo => "pseudo",
            Provenance::Synthetic => "synthetic",
        };
        f.write_str(s)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ImageGrid {
    height: usize,
    width: usize,
    channels: usize,
    space: ValueSpace,
    data: Vec<f32>,
}

impl ImageGrid {
    /// Builds a grid from planar data, validating the space invariants.
    pub fn new(
        height: usize,
        width: usize,
        channels: usize,
        space: ValueSpace,
        data: Vec<f32>,
    ) -> Result<Self> {
        if height == 0 || width == 0 || !(channels == 1 || channels == 3) {
            return Err(CdrlError::Shape(format!(
                "invalid grid dimensions {height}x{width}x{channels}"
            )));
        }
        if data.len() != height * width * channels {
            return Err(CdrlError::Shape(format!(
                "data length {} != {}x{}x{}",
                data.len(),
                height,
                width,
                channels
            )));
        }
        for &v in &data {
            if !v.is_finite() {
                return Err(CdrlError::Format("non-finite value in grid".into()));
            }
            if !space.contains(v) {
                return Err(CdrlError::Format(format!(
                    "value {v} outside {space:?} space"
                )));
            }
        }
        Ok(Self {
            height,
            width,
            channels,
            space,
            data,
        })
    }

    /// All-zero grid (zero is valid in every space).
    pub fn zeros(height: usize, width: usize, channels: usize, space: ValueSpace) -> Self {
        Self {
            height,
            width,
            channels,
            space,
            data: vec![0.0; height * width * channels],
        }
    }

    pub fn splat(height: usize, width: usize, channels: usize, space: ValueSpace, v: f32) -> Self {
        assert!(space.contains(v) && v.is_finite());
        Self {
            height,
            width,
            channels,
            space,
            data: vec![v; height * width * channels],
        }
    }

    pub fn height(&self) -> usize {
        self.height
    }
    pub fn width(&self) -> usize {
        self.width
    }
    pub fn channels(&self) -> usize {
        self.channels
    }
    pub fn space(&self) -> ValueSpace {
        self.space
    }
    pub fn data(&self) -> &[f32] {
        &self.data
    }
    pub fn data_mut(&mut self) -> &mut [f32] {
        &mut self.data
    }
    pub fn into_data(self) -> Vec<f32> {
        self.data
    }

    #[inline]
    pub fn idx(&self, c: usize, y: usize, x: usize) -> usize {
        (c * self.height + y) * self.width + x
    }
    #[inline]
    pub fn get(&self, c: usize, y: usize, x: usize) -> f32 {
        self.data[self.idx(c, y, x)]
    }
    #[inline]
    pub fn set(&mut self, c: usize, y: usize, x: usize, v: f32) {
        let i = self.idx(c, y, x);
        self.data[i] = v;
    }

    pub fn same_shape(&self, other: &ImageGrid) -> bool {
        self.height == other.height && self.width == other.width && self.channels == other.channels
    }

    /// unit → model: v ↦ 2v − 1.
    pub fn to_model(&self) -> Result<ImageGrid> {
        if self.space != ValueSpace::Unit {
            return Err(CdrlError::Shape(format!(
                "to_model expects unit space, got {:?}",
                self.space
            )));
        }
        let data = self.data.iter().map(|&v| 2.0 * v - 1.0).collect();
        Ok(ImageGrid {
            space: ValueSpace::Model,
            data,
            ..*self
        })
    }

    /// model → unit: v ↦ (v + 1) / 2.
    pub fn to_unit(&self) -> Result<ImageGrid> {
        if self.space != ValueSpace::Model {
            return Err(CdrlError::Shape(format!(
                "to_unit expects model space, got {:?}",
                self.space
            )));
        }
        let data = self
            .data
            .iter()
            .map(|&v| ((v + 1.0) / 2.0).clamp(0.0, 1.0))
            .collect();
        Ok(ImageGrid {
            space: ValueSpace::Unit,
            data,
            ..*self
        })
    }

    /// Checks the value-space invariant over every element.
    pub fn check_space(&self) -> bool {
        self.data.iter().all(|&v| v.is_finite() && self.space.contains(v))
    }

    /// Mean over all elements.
    pub fn mean(&self) -> f64 {
        let sum: f64 = self.data.iter().map(|&v| v as f64).sum();
        sum / self.data.len() as f64
    }

    /// True if every element is 0.0 or 1.0.
    pub fn is_binary(&self) -> bool {
        self.data.iter().all(|&v| v == 0.0 || v == 1.0)
    }

    /// 90° clockwise rotation, `k` quarter turns.
    pub fn rot90(&self, k: usize) -> ImageGrid {
        let mut out = self.clone();
        for _ in 0..k % 4 {
            let (h, w) = (out.height, out.width);
            let mut next = ImageGrid::zeros(w, h, out.channels, out.space);
            for c in 0..out.channels {
                for y in 0..h {
                    for x in 0..w {
                        next.set(c, x, h - 1 - y, out.get(c, y, x));
                    }
                }
            }
            out = next;
        }
        out
    }

    /// Mirror along the vertical axis (left-right).
    pub fn flip_h(&self) -> ImageGrid {
        let mut out = self.clone();
        for c in 0..self.channels {
            for y in 0..self.height {
                for x in 0..self.width {
                    out.set(c, y, self.width - 1 - x, self.get(c, y, x));
                }
            }
        }
        out
    }

    /// Mirror along the horizontal axis (top-bottom).
    pub fn flip_v(&self) -> ImageGrid {
        let mut out = self.clone();
        for c in 0..self.channels {
            for y in 0..self.height {
                for x in 0..self.width {
                    out.set(c, self.height - 1 - y, x, self.get(c, y, x));
                }
            }
        }
        out
    }

    /// Swap axes (matrix transpose per channel).
    pub fn transpose(&self) -> ImageGrid {
        let mut out = ImageGrid::zeros(self.width, self.height, self.channels, self.space);
        for c in 0..self.channels {
            for y in 0..self.height {
                for x in 0..self.width {
                    out.set(c, x, y, self.get(c, y, x));
                }
            }
        }
        out
    }
}

/// A bi-temporal (or pseudo / synthetic) pair with an optional change mask.
#[derive(Debug, Clone)]
pub struct PairSample {
    pub t1: ImageGrid,
    pub t2: ImageGrid,
    /// 1 = changed; shares height/width with `t1`.
    pub mask: Option<ImageGrid>,
    pub provenance: Provenance,
    /// Stable identifier used for deterministic ordering in reports.
    pub id: String,
}

impl PairSample {
    pub fn new(
        t1: ImageGrid,
        t2: ImageGrid,
        mask: Option<ImageGrid>,
        provenance: Provenance,
        id: impl Into<String>,
    ) -> Result<Self> {
        if !t1.same_shape(&t2) {
            return Err(CdrlError::Shape(format!(
                "pair shapes differ: {}x{}x{} vs {}x{}x{}",
                t1.height(),
                t1.width(),
                t1.channels(),
                t2.height(),
                t2.width(),
                t2.channels()
            )));
        }
        if let Some(m) = &mask {
            if m.height() != t1.height() || m.width() != t1.width() {
                return Err(CdrlError::Shape("mask extent differs from pair".into()));
            }
            if m.channels() != 1 || !m.is_binary() {
                return Err(CdrlError::Format(
                    "mask must be single-channel binary {0,1}".into(),
                ));
            }
        }
        Ok(Self {
            t1,
            t2,
            mask,
            provenance,
            id: id.into(),
        })
    }

    /// Fraction of pixels marked changed; 0 when no mask is attached.
    pub fn changed_fraction(&self) -> f64 {
        match &self.mask {
            None => 0.0,
            Some(m) => {
                let ones: f64 = m.data().iter().map(|&v| v as f64).sum();
                ones / (m.height() * m.width()) as f64
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn grid_rejects_bad_lengths_and_values() {
        assert!(ImageGrid::new(2, 2, 1, ValueSpace::Unit, vec![0.0; 3]).is_err());
        assert!(ImageGrid::new(2, 2, 1, ValueSpace::Unit, vec![2.0; 4]).is_err());
        assert!(ImageGrid::new(2, 2, 1, ValueSpace::Unit, vec![f32::NAN; 4]).is_err());
        assert!(ImageGrid::new(0, 2, 1, ValueSpace::Unit, vec![]).is_err());
        assert!(ImageGrid::new(2, 2, 2, ValueSpace::Unit, vec![0.0; 8]).is_err());
    }

    #[test]
    fn planar_indexing() {
        let mut g = ImageGrid::zeros(2, 3, 3, ValueSpace::Unit);
        g.set(2, 1, 2, 0.5);
        assert_eq!(g.data()[(2 * 2 + 1) * 3 + 2], 0.5);
        assert_eq!(g.get(2, 1, 2), 0.5);
    }

    #[test]
    fn unit_model_endpoints() {
        let g = ImageGrid::new(1, 2, 1, ValueSpace::Unit, vec![0.0, 1.0]).unwrap();
        let m = g.to_model().unwrap();
        assert_eq!(m.data(), &[-1.0, 1.0]);
        let back = m.to_unit().unwrap();
        assert_eq!(back.data(), &[0.0, 1.0]);
    }

    #[test]
    fn pair_requires_matching_shapes_and_binary_mask() {
        let a = ImageGrid::zeros(4, 4, 3, ValueSpace::Unit);
        let b = ImageGrid::zeros(4, 5, 3, ValueSpace::Unit);
        assert!(PairSample::new(a.clone(), b, None, Provenance::Real, "p").is_err());

        let b = ImageGrid::zeros(4, 4, 3, ValueSpace::Unit);
        let bad_mask = ImageGrid::splat(4, 4, 1, ValueSpace::Unit, 0.5);
        assert!(
            PairSample::new(a.clone(), b.clone(), Some(bad_mask), Provenance::Real, "p").is_err()
        );
        let ok_mask = ImageGrid::zeros(4, 4, 1, ValueSpace::Unit);
        let p = PairSample::new(a, b, Some(ok_mask), Provenance::Synthetic, "p").unwrap();
        assert_eq!(p.changed_fraction(), 0.0);
    }
}
