//! Evaluation and explanation: batched prediction, accuracy, confusion
//! matrices, softmax-averaging ensembles, and gradient-weighted class
//! activation maps rendered as heatmap overlays.

use crate::data::{Dataset, Sample, CLASS_NAMES, NUM_CLASSES};
use crate::error::{Error, Result};
use crate::imageio::Image;
use crate::kernels::softmax_rows;
use crate::net::{Mode, Network};
use crate::tape::Tape;
use crate::tensor::{Scalar, Tensor};
use crate::transform::{bilinear_resize, encode_batch};

/// Index of the largest element; ties go to the lowest index.
pub fn argmax<T: Scalar>(row: &[T]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate().skip(1) {
        if v > row[best] {
            best = i;
        }
    }
    best
}

/// Run the network over a dataset in eval mode. Returns (predictions, labels).
pub fn predict_all<T: Scalar>(
    net: &Network<T>,
    ds: &Dataset,
    batch_size: usize,
) -> Result<(Vec<usize>, Vec<usize>)> {
    if ds.is_empty() {
        return Err(Error::Contract("cannot evaluate an empty dataset".into()));
    }
    if batch_size == 0 {
        return Err(Error::Contract("batch size must be positive".into()));
    }
    let target = net.spec().input_size;
    let classes = net.spec().num_classes;
    let mut preds = Vec::with_capacity(ds.len());
    let mut labels = Vec::with_capacity(ds.len());
    for chunk in ds.samples.chunks(batch_size) {
        let refs: Vec<&Sample> = chunk.iter().collect();
        let (batch, batch_labels) = encode_batch::<T>(&refs, target, None)?;
        let mut tape = Tape::no_grad();
        let x = tape.leaf(batch);
        let trace = net.forward(&mut tape, Mode::Eval, &x)?;
        let logits = trace.logits.data();
        for r in 0..chunk.len() {
            preds.push(argmax(&logits.data()[r * classes..(r + 1) * classes]));
        }
        labels.extend(batch_labels);
    }
    Ok((preds, labels))
}

/// Fraction of positions where `preds[i] == labels[i]`.
pub fn accuracy(preds: &[usize], labels: &[usize]) -> f64 {
    debug_assert_eq!(preds.len(), labels.len());
    if preds.is_empty() {
        return 0.0;
    }
    let hits = preds.iter().zip(labels).filter(|(p, l)| p == l).count();
    hits as f64 / preds.len() as f64
}

/// `matrix[true][pred]` counts.
pub fn confusion_matrix(preds: &[usize], labels: &[usize]) -> [[usize; NUM_CLASSES]; NUM_CLASSES] {
    debug_assert_eq!(preds.len(), labels.len());
    let mut m = [[0usize; NUM_CLASSES]; NUM_CLASSES];
    for (&p, &l) in preds.iter().zip(labels) {
        m[l][p] += 1;
    }
    m
}

/// CSV with exactly one header-named column per class; row `i` holds the
/// counts for true class `i`.
pub fn confusion_csv(m: &[[usize; NUM_CLASSES]; NUM_CLASSES]) -> String {
    let mut out = CLASS_NAMES.join(",");
    out.push('\n');
    for row in m {
        let cells: Vec<String> = row.iter().map(|c| c.to_string()).collect();
        out.push_str(&cells.join(","));
        out.push('\n');
    }
    out
}

/// Human-readable table with labeled rows (true class) and columns (predicted).
pub fn confusion_table(m: &[[usize; NUM_CLASSES]; NUM_CLASSES]) -> String {
    let width = 9usize;
    let mut out = format!("{:>width$} |", "true\\pred");
    for name in CLASS_NAMES {
        out.push_str(&format!("{name:>width$}"));
    }
    out.push('\n');
    out.push_str(&"-".repeat(width + 2 + width * NUM_CLASSES));
    out.push('\n');
    for (i, row) in m.iter().enumerate() {
        out.push_str(&format!("{:>width$} |", CLASS_NAMES[i]));
        for c in row {
            out.push_str(&format!("{c:>width$}"));
        }
        out.push('\n');
    }
    out
}

/// Average the softmax outputs of several networks and take the argmax.
/// Networks may differ in architecture but must agree on the class count.
pub fn ensemble_predict<T: Scalar>(
    nets: &[&Network<T>],
    ds: &Dataset,
    batch_size: usize,
) -> Result<(Vec<usize>, Vec<usize>)> {
    let Some(first) = nets.first() else {
        return Err(Error::Contract("ensemble needs at least one network".into()));
    };
    let classes = first.spec().num_classes;
    for net in nets {
        if net.spec().num_classes != classes {
            return Err(Error::Contract(format!(
                "ensemble members disagree on class count: {} vs {classes}",
                net.spec().num_classes
            )));
        }
    }
    if ds.is_empty() {
        return Err(Error::Contract("cannot evaluate an empty dataset".into()));
    }
    if batch_size == 0 {
        return Err(Error::Contract("batch size must be positive".into()));
    }

    let mut preds = Vec::with_capacity(ds.len());
    let mut labels = Vec::with_capacity(ds.len());
    for chunk in ds.samples.chunks(batch_size) {
        let refs: Vec<&Sample> = chunk.iter().collect();
        let mut mean_probs = vec![0.0f64; chunk.len() * classes];
        let mut chunk_labels = Vec::new();
        for net in nets {
            // each member sees the batch at its own input resolution
            let (batch, bl) = encode_batch::<T>(&refs, net.spec().input_size, None)?;
            chunk_labels = bl;
            let mut tape = Tape::no_grad();
            let x = tape.leaf(batch);
            let trace = net.forward(&mut tape, Mode::Eval, &x)?;
            let probs = softmax_rows(trace.logits.data())?;
            for (acc, &p) in mean_probs.iter_mut().zip(probs.data()) {
                *acc += p.to_f64();
            }
        }
        let n = nets.len() as f64;
        for r in 0..chunk.len() {
            let row: Vec<f64> =
                mean_probs[r * classes..(r + 1) * classes].iter().map(|v| v / n).collect();
            preds.push(argmax(&row));
        }
        labels.extend(chunk_labels);
    }
    Ok((preds, labels))
}

// ---------------------------------------------------------------------------
// gradient-weighted class activation maps
// ---------------------------------------------------------------------------

/// Which activation the saliency map is computed against.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum CamTarget {
    /// Output of the final stage's residual blocks (before its mask).
    #[default]
    Residual,
    /// The final stage's masked output.
    Fused,
}

impl std::str::FromStr for CamTarget {
    type Err = Error;

    fn from_str(s: &str) -> Result<CamTarget> {
        match s {
            "residual" => Ok(CamTarget::Residual),
            "fused" => Ok(CamTarget::Fused),
            other => Err(Error::Usage(format!(
                "unknown saliency target {other:?}; expected residual or fused"
            ))),
        }
    }
}

/// A class activation map plus the prediction it explains.
pub struct CamResult {
    /// Row-major map over the target activation's spatial grid, values in
    /// [0, 1] (all zero when nothing supports the class).
    pub map: Vec<f64>,
    pub height: usize,
    pub width: usize,
    /// The explained class.
    pub class: usize,
    /// Softmax probabilities of the input, one per class.
    pub probs: Vec<f64>,
}

/// Compute a gradient-weighted activation map for `class` (default: the
/// predicted class) on a single preprocessed input `[1, ch, s, s]`.
///
/// Channel weights are the spatial means of the class logit's gradient w.r.t.
/// the target activation; the map is the ReLU of the weighted channel sum,
/// scaled so its maximum is 1.
pub fn grad_cam<T: Scalar>(
    net: &Network<T>,
    input: Tensor<T>,
    class: Option<usize>,
    target: CamTarget,
) -> Result<CamResult> {
    let classes = net.spec().num_classes;
    let (n, _, _, _) = input.dims4()?;
    if n != 1 {
        return Err(Error::Contract(format!(
            "saliency maps explain one image at a time, got a batch of {n}"
        )));
    }
    if let Some(k) = class {
        if k >= classes {
            return Err(Error::LabelOutOfRange { got: k, max: classes - 1 });
        }
    }

    let mut tape = Tape::recording();
    let x = tape.leaf(input); // no gradient needed w.r.t. the pixels
    let trace = net.forward(&mut tape, Mode::Eval, &x)?;
    let logits = trace.logits.data().data().to_vec();
    let probs_t = softmax_rows(trace.logits.data())?;
    let probs: Vec<f64> = probs_t.data().iter().map(|&v| v.to_f64()).collect();
    let class = class.unwrap_or_else(|| argmax(&logits));

    // select the class logit with a one-hot mask built from existing ops
    let mut onehot = vec![T::zero(); classes];
    onehot[class] = T::one();
    let mask = tape.leaf(Tensor::from_vec(&[1, classes], onehot)?);
    let picked = tape.mul(&trace.logits, &mask)?;
    let score = tape.sum(&picked)?;

    let act = match target {
        CamTarget::Residual => trace
            .stage_residual
            .last()
            .expect("network has at least one stage"),
        CamTarget::Fused => trace
            .stage_fused
            .last()
            .expect("network has at least one stage"),
    };
    let act_data = act.to_tensor();
    let grads = tape.backward_retaining(&score, &[act])?;
    let g = grads
        .wrt(act)
        .ok_or_else(|| Error::Contract("target activation missing from gradient set".into()))?;

    let (_, ch, h, w) = act_data.dims4()?;
    let plane = h * w;
    let mut map = vec![0.0f64; plane];
    for c_i in 0..ch {
        let g_plane = &g.data()[c_i * plane..(c_i + 1) * plane];
        let weight: f64 = g_plane.iter().map(|&v| v.to_f64()).sum::<f64>() / plane as f64;
        let a_plane = &act_data.data()[c_i * plane..(c_i + 1) * plane];
        for (m, &a) in map.iter_mut().zip(a_plane) {
            *m += weight * a.to_f64();
        }
    }
    for m in map.iter_mut() {
        if *m < 0.0 {
            *m = 0.0;
        }
    }
    let peak = map.iter().cloned().fold(0.0f64, f64::max);
    if peak > 0.0 {
        for m in map.iter_mut() {
            *m /= peak;
        }
    }
    Ok(CamResult { map, height: h, width: w, class, probs })
}

/// Blend a saliency map over a base image: the map is upscaled bilinearly,
/// then each pixel becomes `0.5 * base + 0.5 * (255*m, 0, 0)` — red marks the
/// supporting regions, and an all-zero map yields a uniformly dimmed image.
pub fn render_heatmap(base: &Image, cam: &CamResult) -> Result<Image> {
    let up = bilinear_resize(&cam.map, cam.width, cam.height, base.width, base.height);
    let mut pixels = Vec::with_capacity(base.width * base.height * 3);
    for (i, &m) in up.iter().enumerate() {
        let (r, g, b) = match base.channels {
            1 => {
                let v = base.pixels[i] as f64;
                (v, v, v)
            }
            3 => (
                base.pixels[i * 3] as f64,
                base.pixels[i * 3 + 1] as f64,
                base.pixels[i * 3 + 2] as f64,
            ),
            other => {
                return Err(Error::InvalidShape(format!(
                    "cannot overlay onto a {other}-channel image"
                )))
            }
        };
        let m = m.clamp(0.0, 1.0);
        pixels.push((0.5 * r + 0.5 * (255.0 * m)).round().clamp(0.0, 255.0) as u8);
        pixels.push((0.5 * g).round() as u8);
        pixels.push((0.5 * b).round() as u8);
    }
    Image::new_rgb(base.width, base.height, pixels)
}
