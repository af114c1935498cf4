//! Initial view augmentations and the rotation-class expansion that turns a
//! batch of N samples into the contrastive batch of 8N.

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::data::InputKind;
use crate::error::{Error, Result};
use crate::rng::{rng_for, stream};

pub const ROTATIONS: [u32; 4] = [0, 90, 180, 270];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AugmentConfig {
    pub hflip_p: f64,
    pub jitter_p: f64,
    pub jitter_min: f64,
    pub jitter_max: f64,
    /// Zero padding before the random crop; 0 disables cropping.
    pub pad: usize,
    /// View noise for vector inputs.
    pub noise_sigma: f64,
    /// Expand every view into four rotation classes.
    pub rotation: bool,
    /// Apply the initial view augmentations during classifier fine-tuning too
    /// (otherwise fine-tuning sees only rotated copies of the raw samples).
    pub finetune_views: bool,
}

impl Default for AugmentConfig {
    fn default() -> Self {
        Self {
            hflip_p: 0.5,
            jitter_p: 0.8,
            jitter_min: 0.6,
            jitter_max: 1.4,
            pad: 4,
            noise_sigma: 0.05,
            rotation: true,
            finetune_views: true,
        }
    }
}

impl AugmentConfig {
    /// Configuration under which both views equal the input.
    pub fn identity() -> Self {
        Self { hflip_p: 0.0, jitter_p: 0.0, pad: 0, noise_sigma: 0.0, ..Self::default() }
    }

    pub fn num_rotations(&self) -> usize {
        if self.rotation {
            4
        } else {
            1
        }
    }
}

pub fn hflip(img: &[f32], rows: usize, cols: usize) -> Vec<f32> {
    let mut out = Vec::with_capacity(img.len());
    for r in 0..rows {
        out.extend(img[r * cols..(r + 1) * cols].iter().rev());
    }
    out
}

/// Brightness scaling then contrast scaling around the mean, clamped to [0, 1].
pub fn jitter(img: &[f32], brightness: f32, contrast: f32) -> Vec<f32> {
    let bright: Vec<f32> = img.iter().map(|&v| (v * brightness).clamp(0.0, 1.0)).collect();
    let mean = bright.iter().sum::<f32>() / bright.len().max(1) as f32;
    bright.iter().map(|&v| ((v - mean) * contrast + mean).clamp(0.0, 1.0)).collect()
}

/// Crop a `rows × cols` window at `(top, left)` from the image zero-padded by `pad`.
pub fn pad_crop(img: &[f32], rows: usize, cols: usize, pad: usize, top: usize, left: usize) -> Vec<f32> {
    let mut out = vec![0.0; rows * cols];
    for r in 0..rows {
        let src_r = (r + top) as isize - pad as isize;
        if src_r < 0 || src_r >= rows as isize {
            continue;
        }
        for c in 0..cols {
            let src_c = (c + left) as isize - pad as isize;
            if src_c >= 0 && src_c < cols as isize {
                out[r * cols + c] = img[src_r as usize * cols + src_c as usize];
            }
        }
    }
    out
}

/// Exact counter-clockwise rotation of a row-major image.
pub fn rotate_image(img: &[f32], rows: usize, cols: usize, deg: u32) -> Result<Vec<f32>> {
    match deg {
        0 => Ok(img.to_vec()),
        180 => Ok(img.iter().rev().copied().collect()),
        90 | 270 => {
            if rows != cols {
                return Err(Error::InvalidInput(format!(
                    "cannot rotate a {rows}x{cols} image by {deg} degrees"
                )));
            }
            let n = rows;
            let mut out = vec![0.0; n * n];
            for r in 0..n {
                for c in 0..n {
                    out[r * n + c] = if deg == 90 {
                        img[c * n + (n - 1 - r)]
                    } else {
                        img[(n - 1 - c) * n + r]
                    };
                }
            }
            Ok(out)
        }
        _ => Err(Error::InvalidInput(format!("rotation must be 0, 90, 180 or 270, got {deg}"))),
    }
}

/// Rotates a sample according to its layout. Vectors turn their first two
/// coordinates counter-clockwise; the rest are left alone.
pub fn rotate(x: &[f32], kind: InputKind, deg: u32) -> Result<Vec<f32>> {
    match kind {
        InputKind::Image { rows, cols } => rotate_image(x, rows, cols, deg),
        InputKind::Vector { dim } => {
            if dim < 2 {
                return Err(Error::InvalidInput("vector rotation needs two coordinates".into()));
            }
            let mut out = x.to_vec();
            let (a, b) = (x[0], x[1]);
            let (na, nb) = match deg {
                0 => (a, b),
                90 => (-b, a),
                180 => (-a, -b),
                270 => (b, -a),
                _ => {
                    return Err(Error::InvalidInput(format!(
                        "rotation must be 0, 90, 180 or 270, got {deg}"
                    )))
                }
            };
            out[0] = na;
            out[1] = nb;
            Ok(out)
        }
    }
}

fn one_view(x: &[f32], kind: InputKind, cfg: &AugmentConfig, rng: &mut ChaCha8Rng) -> Vec<f32> {
    match kind {
        InputKind::Image { rows, cols } => {
            let mut v = x.to_vec();
            if rng.random::<f64>() < cfg.hflip_p {
                v = hflip(&v, rows, cols);
            }
            if rng.random::<f64>() < cfg.jitter_p {
                let b = rng.random_range(cfg.jitter_min..=cfg.jitter_max) as f32;
                let c = rng.random_range(cfg.jitter_min..=cfg.jitter_max) as f32;
                v = jitter(&v, b, c);
            }
            if cfg.pad > 0 {
                let top = rng.random_range(0..=2 * cfg.pad);
                let left = rng.random_range(0..=2 * cfg.pad);
                v = pad_crop(&v, rows, cols, cfg.pad, top, left);
            }
            v
        }
        InputKind::Vector { .. } => {
            if cfg.noise_sigma > 0.0 {
                let n = Normal::new(0.0, cfg.noise_sigma).expect("non-negative sigma");
                x.iter().map(|&v| v + n.sample(rng) as f32).collect()
            } else {
                x.to_vec()
            }
        }
    }
}

/// Two independently augmented views of `x`.
pub fn initial_views_with(
    x: &[f32],
    kind: InputKind,
    cfg: &AugmentConfig,
    rng: &mut ChaCha8Rng,
) -> (Vec<f32>, Vec<f32>) {
    let a = one_view(x, kind, cfg, rng);
    let b = one_view(x, kind, cfg, rng);
    (a, b)
}

pub fn initial_views(x: &[f32], kind: InputKind, cfg: &AugmentConfig, seed: u64) -> (Vec<f32>, Vec<f32>) {
    initial_views_with(x, kind, cfg, &mut rng_for(seed, &[stream::AUGMENT]))
}

/// Contrastive batch: rotated copies of augmented views.
#[derive(Clone, Debug, PartialEq)]
pub struct AugmentedBatch {
    pub dim: usize,
    pub samples: Vec<f32>,
    /// `local_class * num_rotations + rotation_index`.
    pub labels: Vec<usize>,
    pub view_ids: Vec<u8>,
    pub rotations: Vec<u32>,
}

impl AugmentedBatch {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }
}

/// Rotation-class label for a local class.
pub fn rotation_label(local_class: usize, rotation_index: usize, num_rotations: usize) -> usize {
    local_class * num_rotations + rotation_index
}

/// Builds the augmented batch for `xs` (row-major, one sample per row).
///
/// With `views` every sample contributes two augmented views, otherwise the raw
/// sample is used once. Each copy is then expanded into `cfg.num_rotations()`
/// rotation classes. Per-sample randomness is derived from `(seed, i)`.
pub fn build_batch(
    xs: &[f32],
    ys: &[usize],
    kind: InputKind,
    cfg: &AugmentConfig,
    views: bool,
    seed: u64,
) -> Result<AugmentedBatch> {
    let dim = kind.dim();
    if xs.len() != ys.len() * dim {
        return Err(Error::shape("build_batch", format!("{} values for {} samples of {dim}", xs.len(), ys.len())));
    }
    let n_rot = cfg.num_rotations();
    let copies = if views { 2 } else { 1 };
    let total = ys.len() * copies * n_rot;
    let mut out = AugmentedBatch {
        dim,
        samples: Vec::with_capacity(total * dim),
        labels: Vec::with_capacity(total),
        view_ids: Vec::with_capacity(total),
        rotations: Vec::with_capacity(total),
    };
    for (i, (x, &y)) in xs.chunks(dim).zip(ys).enumerate() {
        let vs = if views {
            let mut rng = rng_for(seed, &[stream::AUGMENT, i as u64]);
            let (a, b) = initial_views_with(x, kind, cfg, &mut rng);
            vec![a, b]
        } else {
            vec![x.to_vec()]
        };
        for (vid, v) in vs.iter().enumerate() {
            for (r, &deg) in ROTATIONS.iter().take(n_rot).enumerate() {
                out.samples.extend(rotate(v, kind, deg)?);
                out.labels.push(rotation_label(y, r, n_rot));
                out.view_ids.push(vid as u8);
                out.rotations.push(deg);
            }
        }
    }
    Ok(out)
}

/// The stage-1 contrastive batch (two views, rotations per `cfg`).
pub fn build_contrastive_batch(
    xs: &[f32],
    ys: &[usize],
    kind: InputKind,
    cfg: &AugmentConfig,
    seed: u64,
) -> Result<AugmentedBatch> {
    build_batch(xs, ys, kind, cfg, true, seed)
}
