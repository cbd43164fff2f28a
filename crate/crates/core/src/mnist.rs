//! MNIST IDX ingestion and the two-panel digit/distractor dataset.
//!
//! A composed image stacks a 28×28 digit and a 28×28 letter glyph into a
//! 56×28 image; which half holds the glyph is drawn per sample from a seeded
//! RNG. Pixel values stay in `[0, 1]` without normalisation.

use std::io::Read;
use std::path::Path;

use flate2::read::GzDecoder;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const IMAGE_MAGIC: u32 = 0x0000_0803;
pub const LABEL_MAGIC: u32 = 0x0000_0801;
pub const SIDE: usize = 28;
pub const DIGIT_PIXELS: usize = SIDE * SIDE;
pub const COMPOSED_PIXELS: usize = 2 * DIGIT_PIXELS;

const GLYPH_A: &str = include_str!("../assets/glyph_a.txt");

/// A parsed IDX file: big-endian header, `u8` payload.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct IdxTensor {
    pub magic: u32,
    pub dims: Vec<usize>,
    pub payload: Vec<u8>,
}

impl IdxTensor {
    /// Payload scaled to `[0, 1]` by `/255`.
    pub fn scaled(&self) -> Vec<f64> {
        self.payload.iter().map(|&b| f64::from(b) / 255.0).collect()
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = self.magic.to_be_bytes().to_vec();
        for &d in &self.dims {
            out.extend_from_slice(&(d as u32).to_be_bytes());
        }
        out.extend_from_slice(&self.payload);
        out
    }
}

/// Reads an IDX file, transparently decompressing gzip.
pub fn read_idx(path: impl AsRef<Path>) -> Result<IdxTensor> {
    let raw = std::fs::read(path)?;
    if raw.starts_with(&[0x1f, 0x8b]) {
        let mut out = Vec::new();
        GzDecoder::new(&raw[..]).read_to_end(&mut out)?;
        parse_idx(&out)
    } else {
        parse_idx(&raw)
    }
}

pub fn parse_idx(bytes: &[u8]) -> Result<IdxTensor> {
    let word = |i: usize| -> Result<u32> {
        bytes
            .get(4 * i..4 * i + 4)
            .map(|b| u32::from_be_bytes(b.try_into().expect("4 bytes")))
            .ok_or(Error::TruncatedPayload {
                expected: 4 * i + 4,
                found: bytes.len(),
            })
    };
    let magic = word(0)?;
    let ndims = match magic {
        IMAGE_MAGIC => 3,
        LABEL_MAGIC => 1,
        found => return Err(Error::BadMagic { found }),
    };
    let dims: Vec<usize> = (1..=ndims)
        .map(|i| word(i).map(|v| v as usize))
        .collect::<Result<_>>()?;
    let header = 4 * (ndims + 1);
    let expected = dims.iter().product::<usize>();
    let found = bytes.len() - header;
    if found < expected {
        return Err(Error::TruncatedPayload { expected, found });
    }
    if found > expected {
        return Err(Error::Format(format!(
            "{} bytes after the payload",
            found - expected
        )));
    }
    Ok(IdxTensor {
        magic,
        dims,
        payload: bytes[header..].to_vec(),
    })
}

/// Images as an `n×784` tensor in `[0, 1]` plus labels.
pub fn load_mnist(images: impl AsRef<Path>, labels: impl AsRef<Path>) -> Result<Dataset<f64>> {
    let im = read_idx(images)?;
    let lb = read_idx(labels)?;
    if im.magic != IMAGE_MAGIC || lb.magic != LABEL_MAGIC {
        return Err(Error::Format(
            "expected an image file and a label file".into(),
        ));
    }
    if im.dims[1] != SIDE || im.dims[2] != SIDE || im.dims[0] != lb.dims[0] {
        return Err(Error::ShapeMismatch {
            op: "mnist",
            detail: format!("images {:?}, labels {:?}", im.dims, lb.dims),
        });
    }
    let labels: Vec<usize> = lb.payload.iter().map(|&v| v as usize).collect();
    if let Some(&bad) = labels.iter().find(|&&v| v > 9) {
        return Err(Error::Format(format!("label {bad} out of range")));
    }
    Dataset::new(
        Tensor::matrix(im.dims[0], DIGIT_PIXELS, im.scaled())?,
        labels,
    )
}

/// The bundled 28×28 letter "A", ink 1 on background 0.
pub fn letter_a() -> Vec<f64> {
    GLYPH_A
        .lines()
        .flat_map(|l| l.chars().map(|c| if c == '#' { 1.0 } else { 0.0 }))
        .collect()
}

/// Which half of a composed image holds the distractor glyph.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Placement {
    Top,
    Bottom,
}

impl Placement {
    fn glyph_rows(self) -> std::ops::Range<usize> {
        match self {
            Placement::Top => 0..SIDE,
            Placement::Bottom => SIDE..2 * SIDE,
        }
    }

    /// `true` on the digit half of a flattened 56×28 image.
    pub fn signal_mask(self) -> Vec<bool> {
        let glyph = self.glyph_rows();
        (0..COMPOSED_PIXELS)
            .map(|i| !glyph.contains(&(i / SIDE)))
            .collect()
    }

    pub fn distractor_mask(self) -> Vec<bool> {
        self.signal_mask().into_iter().map(|b| !b).collect()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Region {
    Signal,
    Distractor,
}

#[derive(Clone, Debug, PartialEq)]
pub struct DistractorSample {
    pub image: Vec<f64>,
    pub label: usize,
    pub placement: Placement,
    pub signal_mask: Vec<bool>,
    pub distractor_mask: Vec<bool>,
}

/// Composed images as rows of a dataset, with each row's glyph placement.
#[derive(Clone, Debug, PartialEq)]
pub struct DistractorSet {
    pub data: Dataset<f64>,
    pub placements: Vec<Placement>,
}

impl DistractorSet {
    pub fn len(&self) -> usize {
        self.placements.len()
    }

    pub fn is_empty(&self) -> bool {
        self.placements.is_empty()
    }

    pub fn sample(&self, i: usize) -> DistractorSample {
        let p = self.placements[i];
        DistractorSample {
            image: self.data.point(i).to_vec(),
            label: self.data.labels[i],
            placement: p,
            signal_mask: p.signal_mask(),
            distractor_mask: p.distractor_mask(),
        }
    }
}

/// Stacks every digit with `glyph`, the glyph going above or below the
/// digit with equal probability.
pub fn compose_distractor(
    digits: &Dataset<f64>,
    glyph: &[f64],
    seed: u64,
) -> Result<DistractorSet> {
    if glyph.len() != DIGIT_PIXELS {
        return Err(Error::ShapeMismatch {
            op: "compose_distractor",
            detail: format!("glyph of {} pixels", glyph.len()),
        });
    }
    if digits.dim() != DIGIT_PIXELS {
        return Err(Error::ShapeMismatch {
            op: "compose_distractor",
            detail: format!("digits of {} pixels", digits.dim()),
        });
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = digits.len();
    let mut data = Vec::with_capacity(n * COMPOSED_PIXELS);
    let mut placements = Vec::with_capacity(n);
    for i in 0..n {
        let p = if rng.gen_bool(0.5) {
            Placement::Top
        } else {
            Placement::Bottom
        };
        match p {
            Placement::Top => {
                data.extend_from_slice(glyph);
                data.extend_from_slice(digits.point(i));
            }
            Placement::Bottom => {
                data.extend_from_slice(digits.point(i));
                data.extend_from_slice(glyph);
            }
        }
        placements.push(p);
    }
    let data = Dataset::new(
        Tensor::matrix(n, COMPOSED_PIXELS, data)?,
        digits.labels.clone(),
    )?;
    Ok(DistractorSet { data, placements })
}

/// The 28×28 digit half of a composed image.
pub fn digit_half(image: &[f64], placement: Placement) -> Vec<f64> {
    image
        .iter()
        .zip(placement.signal_mask())
        .filter(|(_, m)| *m)
        .map(|(v, _)| *v)
        .collect()
}

/// Adds `N(0, σ²)` noise to the pixels of one region, leaving the other
/// half untouched. `clip` restricts the result to `[0, 1]`.
pub fn perturb_region(
    sample: &DistractorSample,
    region: Region,
    sigma: f64,
    seed: u64,
    clip: bool,
) -> Vec<f64> {
    let mask = match region {
        Region::Signal => &sample.signal_mask,
        Region::Distractor => &sample.distractor_mask,
    };
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    sample
        .image
        .iter()
        .zip(mask)
        .map(|(&v, &m)| {
            if !m || sigma == 0.0 {
                return v;
            }
            let out = v + sigma * rng.sample::<f64, _>(StandardNormal);
            if clip {
                out.clamp(0.0, 1.0)
            } else {
                out
            }
        })
        .collect()
}
