//! Feature corpora: utterances, sliding windows, normalization, on-disk
//! formats and the synthetic ground-truth generator.

mod io;
mod synth;

pub use io::{
    load_corpus, read_features, write_corpus, write_features, FEATURE_MAGIC, FEATURE_VERSION,
    MANIFEST_NAME,
};
pub use synth::{synth_corpus, true_mi_oracle, SyntheticSpec};

use crate::error::{Error, Result};
use crate::numerics::Matrix;
use serde::{Deserialize, Serialize};

/// One sequence of feature frames.
///
/// Frames are kept in `f64`; values read from disk are exact widenings of the
/// stored `f32`.
#[derive(Debug, Clone, PartialEq)]
pub struct Utterance {
    pub id: String,
    pub frames: Matrix<f64>,
    pub gold_labels: Option<Vec<String>>,
    pub speaker: Option<String>,
}

impl Utterance {
    pub fn new(
        id: impl Into<String>,
        frames: Matrix<f64>,
        gold_labels: Option<Vec<String>>,
        speaker: Option<String>,
    ) -> Result<Self> {
        let id = id.into();
        if frames.rows() == 0 {
            return Err(Error::utterance(&id, "utterance has no frames"));
        }
        if let Some(labels) = &gold_labels {
            if labels.len() != frames.rows() {
                return Err(Error::utterance(
                    &id,
                    format!("{} labels for {} frames", labels.len(), frames.rows()),
                ));
            }
        }
        Ok(Self {
            id,
            frames,
            gold_labels,
            speaker,
        })
    }

    pub fn len(&self) -> usize {
        self.frames.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.frames.rows() == 0
    }

    pub fn dim(&self) -> usize {
        self.frames.cols()
    }
}

/// Layout of one window: `past` frames of x, `gap` skipped frames, `future`
/// frames of y.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct WindowGeometry {
    pub total: usize,
    pub past: usize,
    pub gap: usize,
    pub future: usize,
}

impl Default for WindowGeometry {
    fn default() -> Self {
        Self {
            total: 35,
            past: 15,
            gap: 5,
            future: 15,
        }
    }
}

impl WindowGeometry {
    pub fn new(past: usize, gap: usize, future: usize) -> Result<Self> {
        let g = Self {
            total: past + gap + future,
            past,
            gap,
            future,
        };
        g.validate()?;
        Ok(g)
    }

    pub fn validate(&self) -> Result<()> {
        if self.past == 0 || self.future == 0 {
            return Err(Error::Config(format!(
                "window needs past >= 1 and future >= 1, got {self:?}"
            )));
        }
        if self.past + self.gap + self.future != self.total {
            return Err(Error::Config(format!(
                "window parts do not add up to total: {self:?}"
            )));
        }
        Ok(())
    }

    /// Offset of the window's central frame from its first frame.
    pub fn center_offset(&self) -> usize {
        self.total / 2
    }

    fn future_start(&self) -> usize {
        self.past + self.gap
    }
}

/// The (x, y) pair cut from one window placement.
#[derive(Debug, Clone, PartialEq)]
pub struct WindowPair {
    pub x: Matrix<f64>,
    pub y: Matrix<f64>,
    pub utterance_id: String,
    pub start: usize,
    pub center_frame: usize,
}

/// Every stride-1 placement of the window inside the utterance. Windows never
/// cross utterance boundaries.
pub fn windows_of(u: &Utterance, g: &WindowGeometry) -> Vec<WindowPair> {
    windows_with_stride(u, g, 1)
}

/// Placements starting at multiples of `stride`.
pub fn windows_with_stride(u: &Utterance, g: &WindowGeometry, stride: usize) -> Vec<WindowPair> {
    window_starts(u.len(), g, stride)
        .map(|t| cut_window(u, g, t))
        .collect()
}

/// Start frames of all placements; empty when `len < g.total`.
pub fn window_starts(len: usize, g: &WindowGeometry, stride: usize) -> impl Iterator<Item = usize> {
    let count = (len + 1).saturating_sub(g.total);
    (0..count).step_by(stride.max(1))
}

pub fn cut_window(u: &Utterance, g: &WindowGeometry, start: usize) -> WindowPair {
    WindowPair {
        x: u.frames.slice_rows(start, start + g.past),
        y: u.frames
            .slice_rows(start + g.future_start(), start + g.total),
        utterance_id: u.id.clone(),
        start,
        center_frame: start + g.center_offset(),
    }
}

/// A set of utterances plus the placement stride used when cutting training
/// windows. Synthetic corpora set the stride to the generated window length
/// so that only generated placements are used.
#[derive(Debug, Clone, PartialEq)]
pub struct Corpus {
    pub utterances: Vec<Utterance>,
    pub window_stride: usize,
}

impl Corpus {
    pub fn new(utterances: Vec<Utterance>) -> Self {
        Self {
            utterances,
            window_stride: 1,
        }
    }

    pub fn with_stride(utterances: Vec<Utterance>, window_stride: usize) -> Self {
        Self {
            utterances,
            window_stride: window_stride.max(1),
        }
    }

    pub fn len(&self) -> usize {
        self.utterances.len()
    }

    pub fn is_empty(&self) -> bool {
        self.utterances.is_empty()
    }

    /// Feature dimension shared by all utterances.
    pub fn dim(&self) -> Option<usize> {
        self.utterances.first().map(Utterance::dim)
    }

    pub fn windows(&self, index: usize, g: &WindowGeometry) -> Vec<WindowPair> {
        windows_with_stride(&self.utterances[index], g, self.window_stride)
    }

    pub fn num_windows(&self, g: &WindowGeometry) -> usize {
        self.utterances
            .iter()
            .map(|u| window_starts(u.len(), g, self.window_stride).count())
            .sum()
    }

    /// Copy with every utterance passed through [`normalize_utterance`].
    pub fn normalized(&self) -> Result<Self> {
        let utterances = self
            .utterances
            .iter()
            .map(normalize_utterance)
            .collect::<Result<_>>()?;
        Ok(Self {
            utterances,
            window_stride: self.window_stride,
        })
    }
}

/// Rescales frames so that the mean over the utterance of the squared frame
/// norm is 1.
pub fn normalize_utterance(u: &Utterance) -> Result<Utterance> {
    let t = u.len() as f64;
    let mean_sq: f64 = (0..u.len())
        .map(|i| u.frames.squared_norm_row(i))
        .sum::<f64>()
        / t;
    if mean_sq == 0.0 {
        return Err(Error::utterance(
            &u.id,
            "all frames are zero; normalization scale is undefined",
        ));
    }
    if !mean_sq.is_finite() {
        return Err(Error::utterance(&u.id, "frames contain non-finite values"));
    }
    let scale = mean_sq.sqrt();
    Ok(Utterance {
        id: u.id.clone(),
        frames: u.frames.map(|v| v / scale),
        gold_labels: u.gold_labels.clone(),
        speaker: u.speaker.clone(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn utt(rows: usize, cols: usize, f: impl Fn(usize, usize) -> f64) -> Utterance {
        let data = (0..rows * cols).map(|k| f(k / cols, k % cols)).collect();
        Utterance::new("u", Matrix::from_vec(rows, cols, data).unwrap(), None, None).unwrap()
    }

    fn mean_sq_norm(u: &Utterance) -> f64 {
        (0..u.len())
            .map(|i| u.frames.squared_norm_row(i))
            .sum::<f64>()
            / u.len() as f64
    }

    #[test]
    fn window_counts_at_boundaries() {
        let g = WindowGeometry::default();
        assert_eq!(windows_of(&utt(35, 2, |_, _| 1.0), &g).len(), 1);
        assert_eq!(windows_of(&utt(304, 2, |_, _| 1.0), &g).len(), 270);
        assert!(windows_of(&utt(34, 2, |_, _| 1.0), &g).is_empty());
    }

    #[test]
    fn window_slices_follow_geometry() {
        let g = WindowGeometry::default();
        let u = utt(40, 1, |r, _| r as f64);
        let w = &windows_of(&u, &g)[3];
        assert_eq!(w.start, 3);
        assert_eq!(w.center_frame, 3 + 17);
        assert_eq!(w.x.shape(), (15, 1));
        assert_eq!(w.y.shape(), (15, 1));
        assert_eq!(w.x.as_slice()[0], 3.0);
        assert_eq!(w.x.as_slice()[14], 17.0);
        assert_eq!(w.y.as_slice()[0], 23.0);
        assert_eq!(w.y.as_slice()[14], 37.0);
    }

    #[test]
    fn stride_restricts_placements() {
        let g = WindowGeometry::new(3, 1, 3).unwrap();
        let u = utt(21, 1, |r, _| r as f64);
        let starts: Vec<usize> = windows_with_stride(&u, &g, 7)
            .iter()
            .map(|w| w.start)
            .collect();
        assert_eq!(starts, vec![0, 7, 14]);
    }

    #[test]
    fn geometry_validation() {
        assert!(WindowGeometry::new(0, 1, 3).is_err());
        assert!(WindowGeometry::new(3, 0, 3).is_ok());
        let bad = WindowGeometry {
            total: 10,
            past: 3,
            gap: 1,
            future: 3,
        };
        assert!(bad.validate().is_err());
    }

    #[test]
    fn labels_must_match_frames() {
        let m = Matrix::from_vec(3, 1, vec![1.0, 2.0, 3.0]).unwrap();
        let err = Utterance::new("u7", m, Some(vec!["a".into(); 2]), None).unwrap_err();
        assert!(err.to_string().contains("u7"));
    }

    #[test]
    fn constant_norm_frames_are_halved() {
        // every frame has squared norm 4
        let u = utt(6, 2, |r, c| if (r + c) % 2 == 0 { 2.0 } else { 0.0 });
        let n = normalize_utterance(&u).unwrap();
        for (a, b) in u.frames.as_slice().iter().zip(n.frames.as_slice()) {
            assert_eq!(*b, *a / 2.0);
        }
    }

    #[test]
    fn normalized_mean_square_norm_is_one() {
        let vals = [
            0.3, -1.2, 2.5, 0.0, 0.7, -0.1, 1.9, -2.2, 0.4, 0.05, 3.1, -0.6, 0.9, 1.1, -1.7,
        ];
        let u = utt(5, 3, |r, c| vals[r * 3 + c]);
        let n = normalize_utterance(&u).unwrap();
        assert!((mean_sq_norm(&n) - 1.0).abs() < 1e-9);
        let again = normalize_utterance(&n).unwrap();
        for (a, b) in n.frames.as_slice().iter().zip(again.frames.as_slice()) {
            assert!((a - b).abs() < 1e-9);
        }
    }

    #[test]
    fn all_zero_utterance_is_rejected() {
        assert!(normalize_utterance(&utt(4, 3, |_, _| 0.0)).is_err());
    }

    proptest! {
        #[test]
        fn window_count_formula(t in 1usize..120, past in 1usize..10, gap in 0usize..6, future in 1usize..10) {
            let g = WindowGeometry::new(past, gap, future).unwrap();
            let u = utt(t, 1, |r, _| r as f64);
            prop_assert_eq!(windows_of(&u, &g).len(), (t + 1).saturating_sub(g.total));
        }

        #[test]
        fn normalization_ignores_positive_scale(
            vals in proptest::collection::vec(-5.0f64..5.0, 12),
            c in 0.01f64..100.0,
        ) {
            prop_assume!(vals.iter().any(|v| v.abs() > 1e-3));
            let u = utt(4, 3, |r, k| vals[r * 3 + k]);
            let scaled = utt(4, 3, |r, k| c * vals[r * 3 + k]);
            let a = normalize_utterance(&u).unwrap();
            let b = normalize_utterance(&scaled).unwrap();
            for (x, y) in a.frames.as_slice().iter().zip(b.frames.as_slice()) {
                prop_assert!((x - y).abs() < 1e-9);
            }
            prop_assert!((mean_sq_norm(&a) - 1.0).abs() < 1e-9);
        }
    }
}
