//! Domain augmentation by exact quarter-turn rotations, and conventional
//! crop/flip data augmentation.
//!
//! Rotations are index permutations, counter-clockwise: rotating
//! `[[a, b], [c, d]]` by one quarter turn gives `[[b, d], [a, c]]`.

use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::tensor::Tensor;

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum DomainSetError {
    #[error("domain set is empty")]
    Empty,
    #[error("the first domain must be the identity (rotation 0), got {0}")]
    FirstNotIdentity(u8),
    #[error("rotation index {0} is not in 0..=3")]
    OutOfRange(u8),
    #[error("rotation index {0} appears more than once")]
    Duplicate(u8),
}

/// Ordered quarter-turn rotations defining the augmented domains; domain `i`
/// rotates by `90 * rotations[i]` degrees.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "Vec<u8>", into = "Vec<u8>")]
pub struct DomainSet {
    rotations: Vec<u8>,
}

impl DomainSet {
    pub fn new(rotations: Vec<u8>) -> Result<Self, DomainSetError> {
        let first = *rotations.first().ok_or(DomainSetError::Empty)?;
        if first != 0 {
            return Err(DomainSetError::FirstNotIdentity(first));
        }
        for (i, &r) in rotations.iter().enumerate() {
            if r > 3 {
                return Err(DomainSetError::OutOfRange(r));
            }
            if rotations[..i].contains(&r) {
                return Err(DomainSetError::Duplicate(r));
            }
        }
        Ok(Self { rotations })
    }

    /// Identity plus the three quarter turns.
    pub fn all_rotations() -> Self {
        Self {
            rotations: vec![0, 1, 2, 3],
        }
    }

    pub fn identity() -> Self {
        Self { rotations: vec![0] }
    }

    pub fn len(&self) -> usize {
        self.rotations.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rotations.is_empty()
    }

    /// Rotation index (quarter turns) of domain `domain`.
    pub fn rotation(&self, domain: usize) -> u8 {
        self.rotations[domain]
    }

    pub fn rotations(&self) -> &[u8] {
        &self.rotations
    }
}

impl Default for DomainSet {
    fn default() -> Self {
        Self::all_rotations()
    }
}

impl TryFrom<Vec<u8>> for DomainSet {
    type Error = DomainSetError;
    fn try_from(v: Vec<u8>) -> Result<Self, Self::Error> {
        Self::new(v)
    }
}

impl From<DomainSet> for Vec<u8> {
    fn from(d: DomainSet) -> Self {
        d.rotations
    }
}

/// Rotates one C×H×W plane stack counter-clockwise by `quarter_turns`
/// (taken mod 4) into `out`, which is C×W×H for odd turns.
fn rotate_planes(src: &[f64], c: usize, h: usize, w: usize, quarter_turns: u8, out: &mut [f64]) {
    let plane = h * w;
    for ch in 0..c {
        let s = &src[ch * plane..(ch + 1) * plane];
        let d = &mut out[ch * plane..(ch + 1) * plane];
        match quarter_turns % 4 {
            0 => d.copy_from_slice(s),
            // output is w×h: out[y][x] = in[x][w-1-y]
            1 => {
                for y in 0..w {
                    for x in 0..h {
                        d[y * h + x] = s[x * w + (w - 1 - y)];
                    }
                }
            }
            2 => {
                for y in 0..h {
                    for x in 0..w {
                        d[y * w + x] = s[(h - 1 - y) * w + (w - 1 - x)];
                    }
                }
            }
            // output is w×h: out[y][x] = in[h-1-x][y]
            _ => {
                for y in 0..w {
                    for x in 0..h {
                        d[y * h + x] = s[(h - 1 - x) * w + y];
                    }
                }
            }
        }
    }
}

/// Rotates a C×H×W image counter-clockwise by `90 * quarter_turns` degrees.
///
/// # Panics
/// If `image` is not 3-D.
pub fn rotate90(image: &Tensor, quarter_turns: u8) -> Tensor {
    assert_eq!(image.ndim(), 3, "rotate90 expects C×H×W");
    let (c, h, w) = (image.shape()[0], image.shape()[1], image.shape()[2]);
    let mut out = vec![0.0; image.len()];
    rotate_planes(image.data(), c, h, w, quarter_turns, &mut out);
    let shape = if quarter_turns % 2 == 1 {
        vec![c, w, h]
    } else {
        vec![c, h, w]
    };
    Tensor::new(shape, out).expect("rotation preserves element count")
}

/// Applies [`rotate90`] to every image of an N×C×H×W batch.
pub fn transform_batch(batch: &Tensor, quarter_turns: u8) -> Tensor {
    assert_eq!(batch.ndim(), 4, "transform_batch expects N×C×H×W");
    if quarter_turns % 4 == 0 {
        return batch.clone();
    }
    let (n, c, h, w) = (
        batch.shape()[0],
        batch.shape()[1],
        batch.shape()[2],
        batch.shape()[3],
    );
    let mut out = vec![0.0; batch.len()];
    let item = c * h * w;
    for (src, dst) in batch.data().chunks(item).zip(out.chunks_mut(item)) {
        rotate_planes(src, c, h, w, quarter_turns, dst);
    }
    let shape = if quarter_turns % 2 == 1 {
        vec![n, c, w, h]
    } else {
        vec![n, c, h, w]
    };
    Tensor::new(shape, out).expect("rotation preserves element count")
}

/// Random crop and horizontal flip applied to training images.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataAugConfig {
    /// Zero padding added on every side before cropping.
    pub pad: usize,
    /// Side of the square crop; `None` keeps the input size.
    pub crop_size: Option<usize>,
    pub horizontal_flip_prob: f64,
    /// Draw crop/flip independently inside each domain, after the domain
    /// transformation, instead of once on the source image before it.
    pub after_rotation: bool,
}

impl Default for DataAugConfig {
    fn default() -> Self {
        Self {
            pad: 0,
            crop_size: None,
            horizontal_flip_prob: 0.0,
            after_rotation: false,
        }
    }
}

impl DataAugConfig {
    pub fn disabled() -> Self {
        Self::default()
    }

    pub fn is_identity(&self) -> bool {
        self.pad == 0 && self.crop_size.is_none() && self.horizontal_flip_prob == 0.0
    }

    pub fn validate(&self) -> Result<(), String> {
        if !(0.0..=1.0).contains(&self.horizontal_flip_prob) {
            return Err(format!(
                "horizontal_flip_prob must be in [0, 1], got {}",
                self.horizontal_flip_prob
            ));
        }
        if self.crop_size == Some(0) {
            return Err("crop_size must be positive".into());
        }
        Ok(())
    }
}

/// Mirrors each row of a C×H×W image.
pub fn flip_horizontal(image: &Tensor) -> Tensor {
    let w = image.shape()[2];
    let mut out = image.clone();
    for row in out.data_mut().chunks_mut(w) {
        row.reverse();
    }
    out
}

/// Zero-pads, randomly crops and randomly mirrors a C×H×W image.
///
/// # Panics
/// If the crop is larger than the padded image.
pub fn apply_data_aug<R: Rng + ?Sized>(image: &Tensor, cfg: &DataAugConfig, rng: &mut R) -> Tensor {
    let (c, h, w) = (image.shape()[0], image.shape()[1], image.shape()[2]);
    let (ph, pw) = (h + 2 * cfg.pad, w + 2 * cfg.pad);
    let (ch, cw) = match cfg.crop_size {
        Some(s) => (s, s),
        None => (h, w),
    };
    assert!(
        ch <= ph && cw <= pw,
        "crop {ch}×{cw} exceeds padded {ph}×{pw}"
    );

    let mut out = if cfg.pad == 0 && ch == h && cw == w {
        image.clone()
    } else {
        let oy = rng.gen_range(0..=ph - ch);
        let ox = rng.gen_range(0..=pw - cw);
        let mut data = vec![0.0; c * ch * cw];
        for ci in 0..c {
            for y in 0..ch {
                let sy = (oy + y) as isize - cfg.pad as isize;
                if sy < 0 || sy >= h as isize {
                    continue;
                }
                for x in 0..cw {
                    let sx = (ox + x) as isize - cfg.pad as isize;
                    if sx < 0 || sx >= w as isize {
                        continue;
                    }
                    data[(ci * ch + y) * cw + x] =
                        image.data()[(ci * h + sy as usize) * w + sx as usize];
                }
            }
        }
        Tensor::new(vec![c, ch, cw], data).expect("crop shape")
    };
    if cfg.horizontal_flip_prob > 0.0 && rng.gen_bool(cfg.horizontal_flip_prob) {
        out = flip_horizontal(&out);
    }
    out
}
