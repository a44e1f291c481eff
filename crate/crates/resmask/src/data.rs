//! Datasets: the FER2013 CSV format and a synthetic stand-in.
//!
//! FER2013 ships as a single CSV with `emotion,pixels,Usage` columns; each row
//! is a 48x48 grayscale face as 2304 space-separated bytes. The usage column
//! assigns the canonical train / validation / test split.
//!
//! The synthetic dataset draws one concentric ring per class (radius grows
//! with the label) with jittered center, radius and brightness plus background
//! noise. Ring radius survives flips and rotations, so augmentation cannot
//! destroy the signal, and a small network can overfit it quickly.

use std::fmt;
use std::fs;
use std::path::Path;
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::rng::Rng;

pub const NUM_CLASSES: usize = 7;
pub const CLASS_NAMES: [&str; NUM_CLASSES] =
    ["Angry", "Disgust", "Fear", "Happy", "Sad", "Surprise", "Neutral"];

/// Source images are 48x48 grayscale.
pub const SOURCE_SIZE: usize = 48;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Split {
    Train,
    Val,
    Test,
}

impl FromStr for Split {
    type Err = Error;

    fn from_str(s: &str) -> Result<Split> {
        match s {
            "train" => Ok(Split::Train),
            "val" => Ok(Split::Val),
            "test" => Ok(Split::Test),
            other => Err(Error::Usage(format!(
                "unknown split {other:?}; expected train, val or test"
            ))),
        }
    }
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        })
    }
}

/// One grayscale face with its expression label.
#[derive(Debug, Clone)]
pub struct Sample {
    pub label: usize,
    /// `SOURCE_SIZE` x `SOURCE_SIZE` row-major pixels.
    pub pixels: Vec<u8>,
}

#[derive(Debug, Clone, Default)]
pub struct Dataset {
    pub samples: Vec<Sample>,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    /// Keep only the first `n` samples (useful for smoke runs).
    pub fn truncate(&mut self, n: usize) {
        self.samples.truncate(n);
    }

    pub fn class_histogram(&self) -> [usize; NUM_CLASSES] {
        let mut h = [0usize; NUM_CLASSES];
        for s in &self.samples {
            h[s.label] += 1;
        }
        h
    }
}

/// The three canonical splits of a FER2013 file.
#[derive(Debug, Clone, Default)]
pub struct FerData {
    pub train: Dataset,
    pub val: Dataset,
    pub test: Dataset,
}

impl FerData {
    pub fn split(&self, s: Split) -> &Dataset {
        match s {
            Split::Train => &self.train,
            Split::Val => &self.val,
            Split::Test => &self.test,
        }
    }
}

fn parse_err(line: usize, msg: impl Into<String>) -> Error {
    Error::Parse { line, msg: msg.into() }
}

/// Parse a FER2013-format CSV. Lines are 1-based in error messages; the
/// header is line 1.
pub fn parse_fer_csv(path: &Path) -> Result<FerData> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut lines = text.lines().enumerate();

    let (_, header) = lines
        .next()
        .ok_or_else(|| parse_err(1, "file is empty, expected an emotion,pixels,Usage header"))?;
    let header = header.trim_end_matches('\r');
    if !header
        .split(',')
        .map(str::trim)
        .eq(["emotion", "pixels", "Usage"])
    {
        return Err(parse_err(
            1,
            format!("unexpected header {header:?}; expected emotion,pixels,Usage"),
        ));
    }

    let mut data = FerData::default();
    for (idx, raw) in lines {
        let line_no = idx + 1;
        let row = raw.trim_end_matches('\r');
        if row.trim().is_empty() {
            continue;
        }
        let mut fields = row.splitn(3, ',');
        let (Some(emotion), Some(pixels), Some(usage)) =
            (fields.next(), fields.next(), fields.next())
        else {
            return Err(parse_err(
                line_no,
                format!("expected 3 comma-separated fields, got {:?}", row.matches(',').count() + 1),
            ));
        };

        let label: usize = emotion
            .trim()
            .parse()
            .map_err(|_| parse_err(line_no, format!("emotion {:?} is not an integer", emotion.trim())))?;
        if label >= NUM_CLASSES {
            return Err(parse_err(
                line_no,
                format!("emotion label {label} out of range 0..={}", NUM_CLASSES - 1),
            ));
        }

        let pixels = pixels.trim().trim_matches('"');
        let mut values = Vec::with_capacity(SOURCE_SIZE * SOURCE_SIZE);
        for tok in pixels.split_ascii_whitespace() {
            let v: u8 = tok.parse().map_err(|_| {
                parse_err(line_no, format!("pixel value {tok:?} is not a byte (0-255)"))
            })?;
            values.push(v);
        }
        if values.len() != SOURCE_SIZE * SOURCE_SIZE {
            return Err(parse_err(
                line_no,
                format!(
                    "expected {} pixels, got {}",
                    SOURCE_SIZE * SOURCE_SIZE,
                    values.len()
                ),
            ));
        }

        let sample = Sample { label, pixels: values };
        match usage.trim() {
            "Training" => data.train.samples.push(sample),
            "PublicTest" => data.val.samples.push(sample),
            "PrivateTest" => data.test.samples.push(sample),
            other => {
                return Err(parse_err(
                    line_no,
                    format!("unknown usage {other:?}; expected Training, PublicTest or PrivateTest"),
                ))
            }
        }
    }
    Ok(data)
}

// ---------------------------------------------------------------------------
// synthetic data
// ---------------------------------------------------------------------------

/// Ring radius for class `k`: far enough apart that jitter never makes two
/// classes overlap.
fn ring_radius(class: usize) -> f64 {
    3.0 + 2.5 * class as f64
}

fn synthesize_sample(class: usize, rng: &mut Rng) -> Sample {
    let size = SOURCE_SIZE as f64;
    let cx = size / 2.0 + rng.uniform(-2.0, 2.0);
    let cy = size / 2.0 + rng.uniform(-2.0, 2.0);
    let radius = ring_radius(class) + rng.uniform(-0.5, 0.5);
    let amplitude = rng.uniform(150.0, 250.0);
    let sigma = 2.0;

    let mut pixels = Vec::with_capacity(SOURCE_SIZE * SOURCE_SIZE);
    for y in 0..SOURCE_SIZE {
        for x in 0..SOURCE_SIZE {
            let d = ((x as f64 - cx).powi(2) + (y as f64 - cy).powi(2)).sqrt();
            let ring = amplitude * (-((d - radius).powi(2)) / (2.0 * sigma * sigma)).exp();
            let noise = rng.uniform(0.0, 30.0);
            pixels.push((ring + noise).clamp(0.0, 255.0) as u8);
        }
    }
    Sample { label: class, pixels }
}

/// Deterministic synthetic dataset: `per_class` samples of each of the 7
/// classes, interleaved so every prefix is roughly balanced.
pub fn synthetic_dataset(per_class: usize, seed: u64) -> Dataset {
    let mut rng = Rng::new(seed);
    let mut samples = Vec::with_capacity(per_class * NUM_CLASSES);
    for _ in 0..per_class {
        for class in 0..NUM_CLASSES {
            samples.push(synthesize_sample(class, &mut rng));
        }
    }
    Dataset { samples }
}
