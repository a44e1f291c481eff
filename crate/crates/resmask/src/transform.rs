//! From stored pixels to network inputs: bilinear resizing, normalization to
//! [-1, 1] with channel replication, and train-time augmentation (horizontal
//! flips and small rotations, applied to the source-resolution image before
//! upscaling).

use crate::data::{Sample, NUM_CLASSES, SOURCE_SIZE};
use crate::error::{Error, Result};
use crate::imageio::Image;
use crate::rng::Rng;
use crate::tensor::{c, Scalar, Tensor};

/// Bilinear resize with half-pixel-centered sampling and edge clamping.
/// `src` is row-major `sw` x `sh`.
pub fn bilinear_resize(src: &[f64], sw: usize, sh: usize, dw: usize, dh: usize) -> Vec<f64> {
    debug_assert_eq!(src.len(), sw * sh);
    debug_assert!(sw > 0 && sh > 0 && dw > 0 && dh > 0);
    if (sw, sh) == (dw, dh) {
        return src.to_vec();
    }
    let mut out = Vec::with_capacity(dw * dh);
    let x_scale = sw as f64 / dw as f64;
    let y_scale = sh as f64 / dh as f64;
    for dy in 0..dh {
        let fy = ((dy as f64 + 0.5) * y_scale - 0.5).clamp(0.0, (sh - 1) as f64);
        let y0 = fy.floor() as usize;
        let y1 = (y0 + 1).min(sh - 1);
        let wy = fy - y0 as f64;
        for dx in 0..dw {
            let fx = ((dx as f64 + 0.5) * x_scale - 0.5).clamp(0.0, (sw - 1) as f64);
            let x0 = fx.floor() as usize;
            let x1 = (x0 + 1).min(sw - 1);
            let wx = fx - x0 as f64;
            let top = src[y0 * sw + x0] * (1.0 - wx) + src[y0 * sw + x1] * wx;
            let bot = src[y1 * sw + x0] * (1.0 - wx) + src[y1 * sw + x1] * wx;
            out.push(top * (1.0 - wy) + bot * wy);
        }
    }
    out
}

/// Mirror a row-major plane left-to-right.
pub fn hflip(src: &[f64], w: usize, h: usize) -> Vec<f64> {
    debug_assert_eq!(src.len(), w * h);
    let mut out = Vec::with_capacity(w * h);
    for y in 0..h {
        let row = &src[y * w..(y + 1) * w];
        out.extend(row.iter().rev());
    }
    out
}

/// Rotate around the image center by `degrees` (counter-clockwise for
/// positive angles), sampling bilinearly; points from outside the source
/// become 0.
pub fn rotate(src: &[f64], w: usize, h: usize, degrees: f64) -> Vec<f64> {
    debug_assert_eq!(src.len(), w * h);
    let rad = degrees.to_radians();
    let (sin, cos) = rad.sin_cos();
    let cx = (w as f64 - 1.0) / 2.0;
    let cy = (h as f64 - 1.0) / 2.0;
    let mut out = Vec::with_capacity(w * h);
    for dy in 0..h {
        for dx in 0..w {
            // inverse map: where does this destination pixel come from?
            let ox = dx as f64 - cx;
            let oy = dy as f64 - cy;
            let sx = cos * ox + sin * oy + cx;
            let sy = -sin * ox + cos * oy + cy;
            if sx < -0.5 || sy < -0.5 || sx > w as f64 - 0.5 || sy > h as f64 - 0.5 {
                out.push(0.0);
                continue;
            }
            let sxc = sx.clamp(0.0, (w - 1) as f64);
            let syc = sy.clamp(0.0, (h - 1) as f64);
            let x0 = sxc.floor() as usize;
            let y0 = syc.floor() as usize;
            let x1 = (x0 + 1).min(w - 1);
            let y1 = (y0 + 1).min(h - 1);
            let wx = sxc - x0 as f64;
            let wy = syc - y0 as f64;
            let top = src[y0 * w + x0] * (1.0 - wx) + src[y0 * w + x1] * wx;
            let bot = src[y1 * w + x0] * (1.0 - wx) + src[y1 * w + x1] * wx;
            out.push(top * (1.0 - wy) + bot * wy);
        }
    }
    out
}

/// Augmentation policy for training batches.
#[derive(Debug, Clone, Copy)]
pub struct Augment {
    /// Probability of a horizontal flip.
    pub flip_prob: f64,
    /// Rotation angle is drawn uniformly from ±this many degrees.
    pub max_rotate_deg: f64,
}

impl Default for Augment {
    fn default() -> Self {
        Augment { flip_prob: 0.5, max_rotate_deg: 30.0 }
    }
}

fn apply_augment(plane: Vec<f64>, w: usize, h: usize, aug: &Augment, rng: &mut Rng) -> Vec<f64> {
    let mut plane = plane;
    if rng.flip() && aug.flip_prob > 0.0 {
        // draw the coin above so the RNG stream is identical regardless of
        // the probability, then gate on it
        plane = hflip(&plane, w, h);
    }
    let angle = rng.uniform(-aug.max_rotate_deg, aug.max_rotate_deg);
    if angle.abs() > 1e-9 {
        plane = rotate(&plane, w, h, angle);
    }
    plane
}

/// (pixel/255 - 0.5) / 0.5, mapping 0..=255 to [-1, 1].
fn normalize(v: f64) -> f64 {
    (v / 255.0 - 0.5) / 0.5
}

/// Encode one grayscale plane as a `[3, target, target]` slab appended to
/// `out`: resized, normalized, and replicated across the 3 input channels.
fn encode_plane<T: Scalar>(plane: &[f64], w: usize, h: usize, target: usize, out: &mut Vec<T>) {
    let resized = bilinear_resize(plane, w, h, target, target);
    let start = out.len();
    out.reserve(3 * target * target);
    for &v in &resized {
        out.push(c(normalize(v)));
    }
    for _ in 0..2 {
        out.extend_from_within(start..start + target * target);
    }
}

/// Encode samples into a `[n, 3, target, target]` batch and its labels.
/// Pass an RNG to enable augmentation; `None` encodes deterministically.
pub fn encode_batch<T: Scalar>(
    samples: &[&Sample],
    target: usize,
    augment: Option<(&Augment, &mut Rng)>,
) -> Result<(Tensor<T>, Vec<usize>)> {
    if samples.is_empty() {
        return Err(Error::InvalidShape("cannot encode an empty batch".into()));
    }
    if target == 0 {
        return Err(Error::InvalidShape("target size must be positive".into()));
    }
    let mut data = Vec::with_capacity(samples.len() * 3 * target * target);
    let mut labels = Vec::with_capacity(samples.len());
    let mut aug_state = augment;
    for s in samples {
        if s.pixels.len() != SOURCE_SIZE * SOURCE_SIZE {
            return Err(Error::InvalidShape(format!(
                "sample holds {} pixels, expected {}",
                s.pixels.len(),
                SOURCE_SIZE * SOURCE_SIZE
            )));
        }
        if s.label >= NUM_CLASSES {
            return Err(Error::LabelOutOfRange { got: s.label, max: NUM_CLASSES - 1 });
        }
        let mut plane: Vec<f64> = s.pixels.iter().map(|&p| p as f64).collect();
        if let Some((aug, rng)) = aug_state.as_mut() {
            plane = apply_augment(plane, SOURCE_SIZE, SOURCE_SIZE, aug, rng);
        }
        encode_plane(&plane, SOURCE_SIZE, SOURCE_SIZE, target, &mut data);
        labels.push(s.label);
    }
    let tensor = Tensor::from_vec(&[samples.len(), 3, target, target], data)?;
    Ok((tensor, labels))
}

/// Encode an image file's pixels as a single-item inference batch.
pub fn encode_image<T: Scalar>(img: &Image, target: usize) -> Result<Tensor<T>> {
    let gray = img.to_gray();
    let plane: Vec<f64> = gray.pixels.iter().map(|&p| p as f64).collect();
    let mut data = Vec::with_capacity(3 * target * target);
    encode_plane(&plane, gray.width, gray.height, target, &mut data);
    Tensor::from_vec(&[1, 3, target, target], data)
}

/// Deterministic epoch order: chunks of shuffled indices. Epoch `e` with the
/// same base seed always yields the same batches; different epochs differ.
pub fn epoch_batches(
    n_samples: usize,
    batch_size: usize,
    base_seed: u64,
    epoch: usize,
    shuffle: bool,
) -> Vec<Vec<usize>> {
    debug_assert!(batch_size > 0);
    let mut order: Vec<usize> = (0..n_samples).collect();
    if shuffle {
        let mut rng = Rng::new(base_seed).fork(epoch as u64);
        rng.shuffle(&mut order);
    }
    order.chunks(batch_size).map(|ch| ch.to_vec()).collect()
}
