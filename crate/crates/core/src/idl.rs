//! Instance discrimination: seeded view augmentation, the per-instance
//! feature bank and the positive/negative instance-classification loss.

use std::collections::HashSet;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::tensor::{dot, normalize_in_place, Tape, Tensor, Var};

/// How per-sample loss terms are combined into the scalar objective.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Reduction {
    Sum,
    Mean,
}

impl std::str::FromStr for Reduction {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "sum" => Ok(Reduction::Sum),
            "mean" => Ok(Reduction::Mean),
            _ => Err(Error::config(format!("reduction must be sum or mean, got {s:?}"))),
        }
    }
}

impl std::fmt::Display for Reduction {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Reduction::Sum => "sum",
            Reduction::Mean => "mean",
        })
    }
}

/// Random view parameters. Ranges are inclusive `(low, high)` pairs; the
/// identity spec leaves images untouched.
#[derive(Clone, Debug, PartialEq)]
pub struct AugmentationSpec {
    pub flip_prob: f64,
    /// Side length of the crop as a fraction of the image side.
    pub crop: (f64, f64),
    /// Magnification about the crop centre; below 1 zooms out with edge padding.
    pub zoom: (f64, f64),
    /// Contrast factor applied about the per-channel mean.
    pub contrast: (f64, f64),
    /// Independent multiplicative gain per colour channel.
    pub channel_gain: (f64, f64),
    pub occlusion_prob: f64,
    /// Occluder side as a fraction of the image side.
    pub occlusion_size: (f64, f64),
    pub seed: u64,
}

impl AugmentationSpec {
    pub fn identity() -> Self {
        AugmentationSpec {
            flip_prob: 0.0,
            crop: (1.0, 1.0),
            zoom: (1.0, 1.0),
            contrast: (1.0, 1.0),
            channel_gain: (1.0, 1.0),
            occlusion_prob: 0.0,
            occlusion_size: (0.0, 0.0),
            seed: 0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let prob = |p: f64, what: &str| {
            if (0.0..=1.0).contains(&p) {
                Ok(())
            } else {
                Err(Error::config(format!("{what} must lie in [0,1], got {p}")))
            }
        };
        let range = |(lo, hi): (f64, f64), min: f64, max: f64, what: &str| {
            if lo.is_finite() && hi.is_finite() && min <= lo && lo <= hi && hi <= max {
                Ok(())
            } else {
                Err(Error::config(format!("{what} range ({lo}, {hi}) must be ordered within [{min}, {max}]")))
            }
        };
        prob(self.flip_prob, "flip probability")?;
        prob(self.occlusion_prob, "occlusion probability")?;
        range(self.crop, f64::MIN_POSITIVE, 1.0, "crop fraction")?;
        range(self.zoom, f64::MIN_POSITIVE, f64::MAX, "zoom")?;
        range(self.contrast, 0.0, f64::MAX, "contrast")?;
        range(self.channel_gain, 0.0, f64::MAX, "channel gain")?;
        range(self.occlusion_size, 0.0, 1.0, "occlusion size")?;
        Ok(())
    }
}

impl Default for AugmentationSpec {
    fn default() -> Self {
        AugmentationSpec {
            flip_prob: 0.5,
            crop: (0.8, 1.0),
            zoom: (0.9, 1.1),
            contrast: (0.7, 1.3),
            channel_gain: (0.6, 1.4),
            occlusion_prob: 0.3,
            occlusion_size: (0.2, 0.4),
            seed: 0,
        }
    }
}

fn draw(rng: &mut ChaCha8Rng, (lo, hi): (f64, f64)) -> f64 {
    if lo == hi {
        lo
    } else {
        rng.random_range(lo..=hi)
    }
}

/// Seed for one augmentation draw, a pure function of its inputs.
pub fn view_seed(spec_seed: u64, epoch: u64, instance: u64) -> u64 {
    let mut x = spec_seed ^ 0x243f_6a88_85a3_08d3;
    for v in [epoch, instance] {
        x = (x ^ v).wrapping_mul(0x9e37_79b9_7f4a_7c15);
        x ^= x >> 31;
    }
    x
}

/// Produce one random view of a `[3,H,W]` image. The result depends only on
/// `(spec, epoch, instance)`.
pub fn augment(image: &Tensor, spec: &AugmentationSpec, epoch: u64, instance: u64) -> Result<Tensor> {
    spec.validate()?;
    let &[c, h, w] = image.shape() else {
        return Err(Error::shape(format!("augment needs [C,H,W], got {:?}", image.shape())));
    };
    let mut rng = ChaCha8Rng::seed_from_u64(view_seed(spec.seed, epoch, instance));
    let mut out = image.clone();

    // crop + zoom as one resampling window
    let frac = draw(&mut rng, spec.crop);
    let zoom = draw(&mut rng, spec.zoom);
    let ch = (h as f64 * frac).max(1.0);
    let cw = (w as f64 * frac).max(1.0);
    let y0 = rng.random_range(0.0..=(h as f64 - ch));
    let x0 = rng.random_range(0.0..=(w as f64 - cw));
    if frac != 1.0 || zoom != 1.0 {
        let (wh, ww) = (ch / zoom, cw / zoom);
        let (cy, cx) = (y0 + ch / 2.0, x0 + cw / 2.0);
        out = resample(&out, cy - wh / 2.0, cx - ww / 2.0, wh, ww);
    }

    if rng.random::<f64>() < spec.flip_prob {
        let d = out.data_mut();
        for row in d.chunks_mut(w) {
            row.reverse();
        }
    }

    let contrast = draw(&mut rng, spec.contrast);
    let gains: Vec<f64> = (0..c).map(|_| draw(&mut rng, spec.channel_gain)).collect();
    if contrast != 1.0 || gains.iter().any(|&g| g != 1.0) {
        let plane = h * w;
        for (ch_idx, values) in out.data_mut().chunks_mut(plane).enumerate() {
            let mean = values.iter().sum::<f64>() / plane as f64;
            for v in values.iter_mut() {
                *v = ((mean + contrast * (*v - mean)) * gains[ch_idx]).clamp(0.0, 1.0);
            }
        }
    }

    if rng.random::<f64>() < spec.occlusion_prob {
        let s = draw(&mut rng, spec.occlusion_size);
        let oh = ((h as f64 * s).round() as usize).clamp(1, h);
        let ow = ((w as f64 * s).round() as usize).clamp(1, w);
        let oy = rng.random_range(0..=h - oh);
        let ox = rng.random_range(0..=w - ow);
        let plane = h * w;
        for values in out.data_mut().chunks_mut(plane) {
            let mean = values.iter().sum::<f64>() / plane as f64;
            for y in oy..oy + oh {
                values[y * w + ox..y * w + ox + ow].fill(mean);
            }
        }
    }
    Ok(out)
}

/// Bilinear sampling of the window `(top, left, height, width)` (in pixel
/// units, edges clamped) back to the full image extents.
fn resample(image: &Tensor, top: f64, left: f64, height: f64, width: f64) -> Tensor {
    let (c, h, w) = (image.shape()[0], image.shape()[1], image.shape()[2]);
    let src = image.data();
    let coord = |o: usize, n: usize, start: f64, extent: f64| -> (usize, usize, f64) {
        let pos = (start + (o as f64 + 0.5) * extent / n as f64 - 0.5).clamp(0.0, (n - 1) as f64);
        let lo = pos.floor() as usize;
        (lo, (lo + 1).min(n - 1), pos - lo as f64)
    };
    let ys: Vec<_> = (0..h).map(|o| coord(o, h, top, height)).collect();
    let xs: Vec<_> = (0..w).map(|o| coord(o, w, left, width)).collect();
    Tensor::from_fn(&[c, h, w], |i| {
        let ch = i / (h * w);
        let (y0, y1, fy) = ys[(i / w) % h];
        let (x0, x1, fx) = xs[i % w];
        let p = &src[ch * h * w..];
        let top = p[y0 * w + x0] * (1.0 - fx) + p[y0 * w + x1] * fx;
        let bottom = p[y1 * w + x0] * (1.0 - fx) + p[y1 * w + x1] * fx;
        top * (1.0 - fy) + bottom * fy
    })
}

/// One unit-norm feature row per training instance.
#[derive(Clone, Debug, PartialEq)]
pub struct InstanceBank {
    features: Tensor,
}

pub(crate) fn check_unit_rows(rows: &Tensor, what: &str) -> Result<()> {
    for i in 0..rows.shape()[0] {
        let norm = rows.row(i).iter().map(|x| x * x).sum::<f64>().sqrt();
        if (norm - 1.0).abs() > 1e-9 {
            return Err(Error::integrity(format!("{what} row {i} has norm {norm}")));
        }
    }
    Ok(())
}

pub const BANK_MIXING: f64 = 0.5;

impl InstanceBank {
    /// Rows are normalised on entry.
    pub fn new(features: Tensor) -> Result<Self> {
        if features.rank() != 2 {
            return Err(Error::shape(format!("instance bank needs [n,D], got {:?}", features.shape())));
        }
        let mut features = features;
        let n = features.shape()[0];
        for i in 0..n {
            normalize_in_place(features.row_mut(i));
        }
        Ok(InstanceBank { features })
    }

    /// Restore saved rows bit-for-bit; they must already be unit length.
    pub fn from_unit_rows(features: Tensor) -> Result<Self> {
        if features.rank() != 2 {
            return Err(Error::shape(format!("instance bank needs [n,D], got {:?}", features.shape())));
        }
        check_unit_rows(&features, "instance bank")?;
        Ok(InstanceBank { features })
    }

    pub fn len(&self) -> usize {
        self.features.shape()[0]
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn dim(&self) -> usize {
        self.features.shape()[1]
    }

    pub fn features(&self) -> &Tensor {
        &self.features
    }

    pub fn row(&self, i: usize) -> &[f64] {
        self.features.row(i)
    }

    /// `V_i <- normalize(mixing * V_i + (1 - mixing) * f)` for each batch row.
    pub fn update(&mut self, indices: &[usize], batch: &Tensor, mixing: f64) -> Result<()> {
        if batch.rank() != 2 || batch.shape()[0] != indices.len() || batch.shape()[1] != self.dim() {
            return Err(Error::shape(format!(
                "bank update with {} indices and features {:?}",
                indices.len(),
                batch.shape()
            )));
        }
        for (b, &i) in indices.iter().enumerate() {
            if i >= self.len() {
                return Err(Error::usage(format!("instance {i} outside bank of {}", self.len())));
            }
            let f = batch.row(b).to_vec();
            let row = self.features.row_mut(i);
            for (v, x) in row.iter_mut().zip(f) {
                *v = mixing * *v + (1.0 - mixing) * x;
            }
            normalize_in_place(row);
        }
        Ok(())
    }
}

/// `softmax(rows . f / tau)` over every row of `rows` (`[K, D]`).
pub fn row_softmax(rows: &Tensor, f: &[f64], tau: f64) -> Result<Vec<f64>> {
    if !(tau > 0.0 && tau.is_finite()) {
        return Err(Error::config(format!("temperature must be positive, got {tau}")));
    }
    if rows.rank() != 2 || rows.shape()[1] != f.len() {
        return Err(Error::shape(format!("rows {:?} against a {}-vector", rows.shape(), f.len())));
    }
    let logits: Vec<f64> = (0..rows.shape()[0]).map(|k| dot(rows.row(k), f)).collect();
    let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|l| ((l - max) / tau).exp()).collect();
    let total: f64 = exps.iter().sum();
    Ok(exps.into_iter().map(|e| e / total).collect())
}

fn instance_probability(i: usize, f: &[f64], bank: &InstanceBank, tau: f64) -> Result<f64> {
    if i >= bank.len() {
        return Err(Error::usage(format!("instance {i} outside bank of {}", bank.len())));
    }
    Ok(row_softmax(&bank.features, f, tau)?[i])
}

/// Probability that the augmented view `f_aug` is classified as instance `i`.
pub fn p_positive(i: usize, f_aug: &[f64], bank: &InstanceBank, tau: f64) -> Result<f64> {
    instance_probability(i, f_aug, bank, tau)
}

/// Probability that another instance's feature `f_j` is classified as `i`.
pub fn p_negative(i: usize, f_j: &[f64], bank: &InstanceBank, tau: f64) -> Result<f64> {
    instance_probability(i, f_j, bank, tau)
}

/// `-sum_i log P(i|aug_i) - sum_i sum_{j != i} log(1 - P(i|x_j))` over the
/// batch, with probabilities taken against the whole (constant) bank.
///
/// `augmented` and `originals` are `[B, D]` rows aligned with `indices`.
pub fn idl_loss(
    tape: &mut Tape,
    indices: &[usize],
    augmented: Var,
    originals: Var,
    bank: &InstanceBank,
    tau: f64,
    reduction: Reduction,
) -> Result<Var> {
    let b = indices.len();
    if b == 0 {
        return Err(Error::usage("empty batch"));
    }
    let mut seen = HashSet::new();
    for &i in indices {
        if i >= bank.len() {
            return Err(Error::usage(format!("instance {i} outside bank of {}", bank.len())));
        }
        if !seen.insert(i) {
            return Err(Error::usage(format!("instance {i} appears twice in the batch")));
        }
    }
    for v in [augmented, originals] {
        if tape.value(v).shape() != [b, bank.dim()] {
            return Err(Error::shape(format!(
                "batch embeddings {:?}, expected [{b}, {}]",
                tape.value(v).shape(),
                bank.dim()
            )));
        }
    }
    let v = tape.constant(bank.features.clone());

    let logits = tape.matmul_nt(augmented, v)?;
    let logp = tape.log_softmax_rows(logits, tau)?;
    let picks: Vec<(usize, usize)> = indices.iter().enumerate().map(|(r, &i)| (r, i)).collect();
    let positive = tape.gather(logp, &picks)?;
    let mut total = tape.sum(positive);

    if b > 1 {
        let logits = tape.matmul_nt(originals, v)?;
        let p = tape.softmax_rows(logits, tau)?;
        let picks: Vec<(usize, usize)> = (0..b)
            .flat_map(|j| indices.iter().enumerate().filter(move |&(r, _)| r != j).map(move |(_, &i)| (j, i)))
            .collect();
        let p_wrong = tape.gather(p, &picks)?;
        let keep = tape.affine(p_wrong, -1.0, 1.0);
        let log_keep = tape.ln(keep);
        let negative = tape.sum(log_keep);
        total = tape.add(total, negative)?;
    }
    let scale = match reduction {
        Reduction::Sum => -1.0,
        Reduction::Mean => -1.0 / b as f64,
    };
    Ok(tape.affine(total, scale, 0.0))
}
