use std::path::Path;

use serde::{Deserialize, Serialize};

use super::pgm::{read_pgm, write_pgm, Gray8};
use crate::error::{Error, Result};
use crate::numerics::Tensor;

/// Row-major integer label raster.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct LabelGrid {
    pub height: usize,
    pub width: usize,
    pub labels: Vec<u8>,
}

impl LabelGrid {
    pub fn new(height: usize, width: usize, labels: Vec<u8>) -> Result<Self> {
        if height * width != labels.len() {
            return Err(Error::Dimension(format!(
                "{height}×{width} grid with {} labels",
                labels.len()
            )));
        }
        Ok(LabelGrid {
            height,
            width,
            labels,
        })
    }

    pub fn zeros(height: usize, width: usize) -> Self {
        LabelGrid {
            height,
            width,
            labels: vec![0; height * width],
        }
    }

    pub fn get(&self, y: usize, x: usize) -> u8 {
        self.labels[y * self.width + x]
    }

    pub fn set(&mut self, y: usize, x: usize, v: u8) {
        self.labels[y * self.width + x] = v;
    }

    /// True when every label is in {0,1,2,4}.
    pub fn is_brats(&self) -> bool {
        self.labels.iter().all(|l| matches!(l, 0 | 1 | 2 | 4))
    }

    pub fn is_binary(&self) -> bool {
        self.labels.iter().all(|&l| l <= 1)
    }

    /// Binary indicator of `region`.
    pub fn region(&self, region: Region) -> Vec<bool> {
        self.labels.iter().map(|&l| region.contains(l)).collect()
    }

    pub fn from_gray(g: &Gray8) -> Self {
        LabelGrid {
            height: g.height,
            width: g.width,
            labels: g.pixels.clone(),
        }
    }

    pub fn to_gray(&self) -> Gray8 {
        Gray8 {
            width: self.width,
            height: self.height,
            maxval: 255,
            pixels: self.labels.clone(),
        }
    }

    pub fn read(path: impl AsRef<Path>) -> Result<Self> {
        Ok(Self::from_gray(&read_pgm(path)?))
    }

    pub fn write(&self, path: impl AsRef<Path>) -> Result<()> {
        write_pgm(&self.to_gray(), path)
    }
}

/// BraTS evaluation regions built from label unions.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Region {
    /// Whole tumor: labels 1, 2, 4.
    WT,
    /// Tumor core: labels 1, 4.
    TC,
    /// Enhancing tumor: label 4.
    ET,
}

impl Region {
    pub const ALL: [Region; 3] = [Region::WT, Region::TC, Region::ET];

    pub fn contains(self, label: u8) -> bool {
        match self {
            Region::WT => matches!(label, 1 | 2 | 4),
            Region::TC => matches!(label, 1 | 4),
            Region::ET => label == 4,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Region::WT => "WT",
            Region::TC => "TC",
            Region::ET => "ET",
        }
    }

    pub fn parse(s: &str) -> Option<Region> {
        match s.trim().to_ascii_uppercase().as_str() {
            "WT" => Some(Region::WT),
            "TC" => Some(Region::TC),
            "ET" => Some(Region::ET),
            _ => None,
        }
    }
}

/// Real-valued multi-channel raster, channel-major (`C×H×W`).
#[derive(Clone, Debug, PartialEq)]
pub struct ImageGrid {
    pub height: usize,
    pub width: usize,
    pub channels: usize,
    pub data: Vec<f64>,
}

impl ImageGrid {
    pub fn new(channels: usize, height: usize, width: usize, data: Vec<f64>) -> Result<Self> {
        if channels == 0 {
            return Err(Error::Dimension("image needs at least one channel".into()));
        }
        if channels * height * width != data.len() {
            return Err(Error::Dimension("image raster length mismatch".into()));
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::Domain("image contains non-finite values".into()));
        }
        Ok(ImageGrid {
            height,
            width,
            channels,
            data,
        })
    }

    pub fn channel(&self, c: usize) -> &[f64] {
        let n = self.height * self.width;
        &self.data[c * n..(c + 1) * n]
    }

    /// Stacks same-size 8-bit rasters as channels.
    pub fn from_grays(grays: &[Gray8]) -> Result<Self> {
        let first = grays
            .first()
            .ok_or_else(|| Error::Dimension("no channels".into()))?;
        if grays
            .iter()
            .any(|g| g.width != first.width || g.height != first.height)
        {
            return Err(Error::Dimension("modalities differ in size".into()));
        }
        let data = grays
            .iter()
            .flat_map(|g| g.pixels.iter().map(|&p| f64::from(p)))
            .collect();
        ImageGrid::new(grays.len(), first.height, first.width, data)
    }

    /// Quantizes one channel to 8 bits, clamping to [0, 255].
    pub fn channel_to_gray(&self, c: usize) -> Gray8 {
        Gray8 {
            width: self.width,
            height: self.height,
            maxval: 255,
            pixels: self
                .channel(c)
                .iter()
                .map(|v| v.round().clamp(0.0, 255.0) as u8)
                .collect(),
        }
    }

    pub fn to_tensor(&self) -> Tensor {
        Tensor::new(
            vec![self.channels, self.height, self.width],
            self.data.clone(),
        )
        .expect("consistent image shape")
    }
}

/// Result of [`zscore_foreground`].
#[derive(Clone, Debug)]
pub struct Normalized {
    pub image: ImageGrid,
    /// Per channel: fewer than two foreground pixels or zero spread.
    pub degenerate: Vec<bool>,
}

/// Per-channel z-score over foreground (non-zero) pixels, population std.
/// Background pixels stay exactly zero.
pub fn zscore_foreground(img: &ImageGrid) -> Normalized {
    let n = img.height * img.width;
    let mut out = img.clone();
    let mut degenerate = vec![false; img.channels];
    for c in 0..img.channels {
        let chan = &mut out.data[c * n..(c + 1) * n];
        let fg: Vec<f64> = chan.iter().copied().filter(|&v| v != 0.0).collect();
        if fg.is_empty() {
            degenerate[c] = true;
            continue;
        }
        let mean = fg.iter().sum::<f64>() / fg.len() as f64;
        let var = fg.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / fg.len() as f64;
        let std = var.sqrt();
        let flat = fg.len() < 2 || std <= f64::EPSILON * mean.abs().max(1.0);
        degenerate[c] = flat;
        for v in chan.iter_mut().filter(|v| **v != 0.0) {
            *v = if flat {
                *v - mean
            } else {
                // A pixel sitting exactly on the mean must stay foreground,
                // or a second pass would drop it and rescale the rest.
                let z = (*v - mean) / std;
                if z == 0.0 {
                    f64::MIN_POSITIVE
                } else {
                    z
                }
            };
        }
    }
    Normalized {
        image: out,
        degenerate,
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct CropInfo {
    /// Row offset of the crop inside the (possibly padded) input.
    pub offset_y: usize,
    pub offset_x: usize,
    /// The input was smaller than the frame and got zero padded first.
    pub padded: bool,
}

/// Frame size used for the full-size slices.
pub const ROI_FRAME: usize = 160;

/// Center-crops image and mask identically to `size×size`, zero padding
/// (centered) any axis that is too small.
pub fn crop_to_roi_frame(
    img: &ImageGrid,
    mask: &LabelGrid,
    size: usize,
) -> Result<(ImageGrid, LabelGrid, CropInfo)> {
    if img.height != mask.height || img.width != mask.width {
        return Err(Error::Dimension("image and mask differ in size".into()));
    }
    let (h, w) = (img.height, img.width);
    let padded = h < size || w < size;
    let (ph, pw) = (h.max(size), w.max(size));
    let (pad_y, pad_x) = ((ph - h) / 2, (pw - w) / 2);
    let (oy, ox) = ((ph - size) / 2, (pw - size) / 2);

    // source coordinate for frame pixel (y, x), if it lands on the input
    let src = |y: usize, x: usize| -> Option<(usize, usize)> {
        let (py, px) = (y + oy, x + ox);
        (py >= pad_y && py < pad_y + h && px >= pad_x && px < pad_x + w)
            .then(|| (py - pad_y, px - pad_x))
    };

    let mut data = vec![0.0; img.channels * size * size];
    let mut labels = vec![0u8; size * size];
    for y in 0..size {
        for x in 0..size {
            if let Some((sy, sx)) = src(y, x) {
                labels[y * size + x] = mask.get(sy, sx);
                for c in 0..img.channels {
                    data[(c * size + y) * size + x] = img.data[(c * h + sy) * w + sx];
                }
            }
        }
    }
    Ok((
        ImageGrid::new(img.channels, size, size, data)?,
        LabelGrid::new(size, size, labels)?,
        CropInfo {
            offset_y: oy,
            offset_x: ox,
            padded,
        },
    ))
}
