//! RGB images and the rotation pretext transform.

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::{Error, Result};

pub const CHANNELS: usize = 3;

/// 8-bit RGB image stored row-major, channels interleaved (HWC).
#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct Image {
    height: usize,
    width: usize,
    data: Vec<u8>,
}

impl Image {
    pub fn new(height: usize, width: usize, data: Vec<u8>) -> Result<Self> {
        if height == 0 || width == 0 {
            return Err(Error::Shape(format!("{height}x{width} image")));
        }
        if data.len() != height * width * CHANNELS {
            return Err(Error::DimMismatch {
                what: "image buffer",
                expected: height * width * CHANNELS,
                got: data.len(),
            });
        }
        Ok(Self { height, width, data })
    }

    pub fn filled(height: usize, width: usize, rgb: [u8; 3]) -> Self {
        let data = rgb.iter().copied().cycle().take(height * width * CHANNELS).collect();
        Self { height, width, data }
    }

    /// Builds an image from planar channel data (all R, then all G, then all B),
    /// the layout used by the CIFAR binary files.
    pub fn from_planar(height: usize, width: usize, planar: &[u8]) -> Result<Self> {
        let plane = height * width;
        if planar.len() != plane * CHANNELS {
            return Err(Error::DimMismatch {
                what: "planar image buffer",
                expected: plane * CHANNELS,
                got: planar.len(),
            });
        }
        let mut data = vec![0u8; plane * CHANNELS];
        for p in 0..plane {
            for c in 0..CHANNELS {
                data[p * CHANNELS + c] = planar[c * plane + p];
            }
        }
        Ok(Self { height, width, data })
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn data(&self) -> &[u8] {
        &self.data
    }

    pub fn into_data(self) -> Vec<u8> {
        self.data
    }

    #[inline]
    pub fn pixel(&self, row: usize, col: usize) -> [u8; 3] {
        let i = (row * self.width + col) * CHANNELS;
        [self.data[i], self.data[i + 1], self.data[i + 2]]
    }

    #[inline]
    pub fn set_pixel(&mut self, row: usize, col: usize, rgb: [u8; 3]) {
        let i = (row * self.width + col) * CHANNELS;
        self.data[i..i + CHANNELS].copy_from_slice(&rgb);
    }
}

/// Rotation class of the pretext task: index `r` means a counter-clockwise
/// rotation by `90 * r` degrees.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct RotationLabel(u8);

impl RotationLabel {
    pub const COUNT: usize = 4;
    pub const ALL: [RotationLabel; 4] = [Self(0), Self(1), Self(2), Self(3)];

    pub fn new(index: u8) -> Result<Self> {
        if (index as usize) < Self::COUNT {
            Ok(Self(index))
        } else {
            Err(Error::LabelOutOfRange {
                label: index as usize,
                classes: Self::COUNT,
            })
        }
    }

    pub fn index(self) -> usize {
        self.0 as usize
    }

    pub fn degrees(self) -> u32 {
        90 * self.0 as u32
    }

    /// Group composition: rotating by `self` then `other`.
    pub fn compose(self, other: RotationLabel) -> RotationLabel {
        Self((self.0 + other.0) % 4)
    }
}

/// Rotates a square image counter-clockwise by `90 * r` degrees.
///
/// For a quarter turn the source pixel `(row, col)` lands at `(n - 1 - col, row)`.
pub fn rotate_image(image: &Image, r: RotationLabel) -> Result<Image> {
    if image.height != image.width {
        return Err(Error::Shape(format!(
            "rotation needs a square image, got {}x{}",
            image.height, image.width
        )));
    }
    let n = image.width;
    if r.0 == 0 {
        return Ok(image.clone());
    }
    let mut out = image.clone();
    for row in 0..n {
        for col in 0..n {
            let (dr, dc) = match r.0 {
                1 => (n - 1 - col, row),
                2 => (n - 1 - row, n - 1 - col),
                _ => (col, n - 1 - row),
            };
            out.set_pixel(dr, dc, image.pixel(row, col));
        }
    }
    Ok(out)
}

/// Expands `B` images into the `4B` rotated copies used by the rotation
/// pretext task. Every image appears once per rotation; the joint order of
/// (image, label) pairs is shuffled by `rng`.
pub fn make_rotation_batch<R: Rng + ?Sized>(images: &[Image], rng: &mut R) -> Result<(Vec<Image>, Vec<RotationLabel>)> {
    if images.is_empty() {
        return Err(Error::Empty("rotation batch"));
    }
    let mut pairs = Vec::with_capacity(images.len() * RotationLabel::COUNT);
    for image in images {
        for r in RotationLabel::ALL {
            pairs.push((rotate_image(image, r)?, r));
        }
    }
    pairs.shuffle(rng);
    Ok(pairs.into_iter().unzip())
}
