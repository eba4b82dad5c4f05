//! In-memory dataset types: frames, experimental days and the dataset wrapper.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Index of the channel carrying the phosphorescence signal.
pub const RED: usize = 0;

/// One timestamped camera frame, `height × width × channels` interleaved,
/// row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct Frame {
    pub width: usize,
    pub height: usize,
    pub channels: usize,
    pub pixels: Vec<f64>,
    /// °C
    pub temperature: f64,
    /// seconds since the start of the day's recording
    pub timestamp: f64,
    /// conditioned ground-truth dissolved oxygen, µmol/L
    pub do_gt: f64,
}

impl Frame {
    pub fn n_pixels(&self) -> usize {
        self.width * self.height
    }

    #[inline]
    pub fn value(&self, pixel: usize, channel: usize) -> f64 {
        self.pixels[pixel * self.channels + channel]
    }

    #[inline]
    pub fn red(&self, pixel: usize) -> f64 {
        self.value(pixel, RED)
    }

    pub fn red_channel(&self) -> Vec<f64> {
        (0..self.n_pixels()).map(|p| self.red(p)).collect()
    }

    pub fn check_grid(&self, width: usize, height: usize) -> Result<()> {
        if self.width != width || self.height != height {
            return Err(Error::Dimension(format!(
                "frame is {}×{}, expected {}×{}",
                self.width, self.height, width, height
            )));
        }
        Ok(())
    }
}

/// Frame index range `[start, end)` recorded at a fixed oxygen set-point.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PlateauWindow {
    pub start: usize,
    pub end: usize,
    /// set-point concentration, µmol/L
    pub o2: f64,
}

impl PlateauWindow {
    pub fn len(&self) -> usize {
        self.end - self.start
    }

    pub fn is_empty(&self) -> bool {
        self.end <= self.start
    }

    pub fn contains(&self, frame: usize) -> bool {
        frame >= self.start && frame < self.end
    }
}

/// All frames from one experimental day.
#[derive(Debug, Clone, PartialEq)]
pub struct DayDataset {
    pub day_index: usize,
    pub frames: Vec<Frame>,
    pub plateau_windows: Vec<PlateauWindow>,
    /// Measured film biofouling in `[0, 1]`.
    pub biofouling_score: f64,
}

impl DayDataset {
    pub fn validate(&self) -> Result<()> {
        if self.frames.windows(2).any(|w| w[1].timestamp < w[0].timestamp) {
            return Err(Error::Precondition(format!("day {}: frames are not ordered by timestamp", self.day_index)));
        }
        let mut prev_end = 0;
        for w in &self.plateau_windows {
            if w.start < prev_end || w.end > self.frames.len() || w.is_empty() {
                return Err(Error::Precondition(format!(
                    "day {}: plateau windows overlap or exceed the frame range",
                    self.day_index
                )));
            }
            prev_end = w.end;
        }
        Ok(())
    }

    /// Window containing frame `idx`, if any.
    pub fn window_of(&self, idx: usize) -> Option<&PlateauWindow> {
        self.plateau_windows.iter().find(|w| w.contains(idx))
    }
}

/// Dataset-level metadata shared by every day.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetMeta {
    pub width: usize,
    pub height: usize,
    pub channels: usize,
    /// `true` for pixels on the sensing film, row-major.
    pub film_mask: Vec<bool>,
    pub seed: Option<u64>,
    /// Serialized generator configuration, when the data is synthetic.
    pub generator: Option<serde_json::Value>,
}

impl DatasetMeta {
    pub fn n_pixels(&self) -> usize {
        self.width * self.height
    }

    pub fn film_pixels(&self) -> Vec<usize> {
        self.film_mask.iter().enumerate().filter_map(|(i, &f)| f.then_some(i)).collect()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub meta: DatasetMeta,
    pub days: Vec<DayDataset>,
}

impl Dataset {
    pub fn day(&self, day_index: usize) -> Option<&DayDataset> {
        self.days.iter().find(|d| d.day_index == day_index)
    }

    /// Days in the given order; unknown indices are an error.
    pub fn select(&self, day_indices: &[usize]) -> Result<Vec<&DayDataset>> {
        day_indices
            .iter()
            .map(|&d| self.day(d).ok_or_else(|| Error::Precondition(format!("unknown day {d}"))))
            .collect()
    }

    pub fn day_indices(&self) -> Vec<usize> {
        self.days.iter().map(|d| d.day_index).collect()
    }
}
