//! Training samples: z-scored images with per-region binary targets.

use std::fs;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::labelio::{read_pgm, zscore_foreground, Gray8, ImageGrid, LabelGrid, Region};
use crate::numerics::Tensor;
use crate::synth::SynthCase;

/// One case ready for the network.
#[derive(Clone, Debug)]
pub struct Sample {
    pub id: String,
    pub image: Tensor,
    pub labels: LabelGrid,
    pub target: Tensor,
}

/// Regions predicted for a class count: WT alone, or WT, TC, ET.
pub fn class_regions(classes: usize) -> &'static [Region] {
    if classes == 1 {
        &[Region::WT]
    } else {
        &Region::ALL
    }
}

/// `classes×H×W` 0/1 targets.
pub fn targets_for(labels: &LabelGrid, classes: usize) -> Tensor {
    let mut data = Vec::with_capacity(classes * labels.labels.len());
    for &r in class_regions(classes) {
        data.extend(labels.labels.iter().map(|&l| if r.contains(l) { 1.0 } else { 0.0 }));
    }
    Tensor::new(vec![classes, labels.height, labels.width], data).expect("target shape")
}

/// Z-scored `C×H×W` tensor from one 8-bit raster per modality.
pub fn prepare_image(modalities: &[Gray8]) -> Result<Tensor> {
    let grid = ImageGrid::from_grays(modalities)?;
    Ok(zscore_foreground(&grid).image.to_tensor())
}

/// Thresholds logits at 0 and composes BraTS-style labels: WT-only output
/// gives label 1; three classes give 4 for ET, 1 for the rest of TC and 2
/// for the rest of WT.
pub fn labels_from_logits(logits: &Tensor) -> Result<LabelGrid> {
    let (c, h, w) = match *logits.shape() {
        [c, h, w] if c == 1 || c == 3 => (c, h, w),
        _ => return Err(Error::Dimension(format!("logits {:?}", logits.shape()))),
    };
    let plane = h * w;
    let on = |ch: usize, i: usize| logits.data()[ch * plane + i] > 0.0;
    let labels = (0..plane)
        .map(|i| {
            if c == 1 {
                u8::from(on(0, i))
            } else if on(2, i) {
                4
            } else if on(1, i) {
                1
            } else if on(0, i) {
                2
            } else {
                0
            }
        })
        .collect();
    LabelGrid::new(h, w, labels)
}

/// An ordered collection of samples.
#[derive(Clone, Debug, Default)]
pub struct Dataset {
    pub samples: Vec<Sample>,
}

fn modality_paths(images: &Path, id: &str) -> Result<Vec<PathBuf>> {
    let prefix = format!("{id}_m");
    let mut found: Vec<(usize, PathBuf)> = Vec::new();
    for entry in fs::read_dir(images)? {
        let path = entry?.path();
        let Some(name) = path.file_name().and_then(|n| n.to_str()) else { continue };
        if let Some(rest) = name.strip_prefix(&prefix).and_then(|r| r.strip_suffix(".pgm")) {
            if let Ok(m) = rest.parse::<usize>() {
                found.push((m, path));
            }
        }
    }
    found.sort();
    if found.is_empty() {
        return Err(Error::Format(format!("no image for case {id}")));
    }
    Ok(found.into_iter().map(|(_, p)| p).collect())
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    /// Reads `masks/<id>.pgm` and `images/<id>_m<k>.pgm` under `dir`, in
    /// case-id order.
    pub fn from_dir(dir: &Path, classes: usize) -> Result<Self> {
        let masks = dir.join("masks");
        let images = dir.join("images");
        let mut ids: Vec<String> = fs::read_dir(&masks)?
            .filter_map(|e| e.ok())
            .filter_map(|e| {
                let p = e.path();
                (p.extension().and_then(|x| x.to_str()) == Some("pgm"))
                    .then(|| p.file_stem()?.to_str().map(str::to_owned))
                    .flatten()
            })
            .collect();
        ids.sort();
        let mut samples = Vec::with_capacity(ids.len());
        for id in ids {
            let labels = LabelGrid::read(masks.join(format!("{id}.pgm")))?;
            let grays = modality_paths(&images, &id)?
                .iter()
                .map(read_pgm)
                .collect::<Result<Vec<_>>>()?;
            let image = prepare_image(&grays)?;
            if image.shape()[1..] != [labels.height, labels.width] {
                return Err(Error::Dimension(format!("case {id}: image and mask sizes differ")));
            }
            let target = targets_for(&labels, classes);
            samples.push(Sample { id, image, labels, target });
        }
        Ok(Dataset { samples })
    }

    pub fn from_synth(cases: &[SynthCase], classes: usize) -> Result<Self> {
        let samples = cases
            .iter()
            .map(|c| {
                Ok(Sample {
                    id: c.meta.id.clone(),
                    image: prepare_image(std::slice::from_ref(&c.image))?,
                    target: targets_for(&c.mask, classes),
                    labels: c.mask.clone(),
                })
            })
            .collect::<Result<_>>()?;
        Ok(Dataset { samples })
    }

    /// Seeded case-level split into `(train, validation)` indices; the
    /// validation share is `round(n·fraction)`, at least one case when `n ≥ 2`.
    pub fn split(&self, fraction: f64, seed: u64) -> (Vec<usize>, Vec<usize>) {
        let n = self.len();
        let mut idx: Vec<usize> = (0..n).collect();
        idx.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
        let n_val = if n >= 2 {
            ((n as f64 * fraction).round() as usize).clamp(1, n - 1)
        } else {
            0
        };
        let val = idx.split_off(n - n_val);
        (idx, val)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn targets_and_labels_round_trip() {
        let l = LabelGrid::new(1, 4, vec![0, 1, 2, 4]).unwrap();
        let t = targets_for(&l, 3);
        assert_eq!(t.data(), &[0., 1., 1., 1., 0., 1., 0., 1., 0., 0., 0., 1.]);
        let logits = t.map(|v| if v > 0.0 { 5.0 } else { -5.0 });
        assert_eq!(labels_from_logits(&logits).unwrap(), l);
        let wt = targets_for(&l, 1);
        assert_eq!(labels_from_logits(&wt.map(|v| v - 0.5)).unwrap().labels, vec![0, 1, 1, 1]);
    }

    #[test]
    fn split_is_a_seeded_partition() {
        let ds = Dataset {
            samples: (0..10)
                .map(|i| Sample {
                    id: i.to_string(),
                    image: Tensor::zeros(&[1, 1, 1]),
                    labels: LabelGrid::zeros(1, 1),
                    target: Tensor::zeros(&[1, 1, 1]),
                })
                .collect(),
        };
        let (tr, va) = ds.split(0.2, 4);
        assert_eq!((tr.len(), va.len()), (8, 2));
        let mut all: Vec<usize> = tr.iter().chain(&va).copied().collect();
        all.sort();
        assert_eq!(all, (0..10).collect::<Vec<_>>());
        assert_eq!(ds.split(0.2, 4), (tr, va));
    }
}
