//! Synthetic lesion corpus: one elliptical lesion per image inside a noisy
//! brain-like disk. Lesion size is tied to one of two centre clusters, so
//! the corpus has a known two-mode size histogram and two spatial modes.

use std::fs;
use std::path::Path;

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::exec::Exec;
use crate::labelio::{write_atomic, Gray8, LabelGrid};

/// Reference frame the nominal geometry is expressed in.
pub const NOMINAL_FRAME: f64 = 160.0;

/// One lesion population: nominal size and centre at the reference frame.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LesionCluster {
    pub size: f64,
    pub cx: f64,
    pub cy: f64,
}

/// Generator settings.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SynthConfig {
    pub cases: usize,
    pub size: usize,
    pub seed: u64,
    pub clusters: Vec<LesionCluster>,
    /// Centre jitter standard deviation, reference-frame pixels.
    pub jitter: f64,
    /// Unlabelled lesion-like blobs per image, placed away from every cluster.
    pub distractors: usize,
}

impl SynthConfig {
    pub fn new(cases: usize, size: usize, seed: u64) -> Self {
        SynthConfig {
            cases,
            size,
            seed,
            clusters: vec![
                LesionCluster { size: 24.0, cx: 0.35, cy: 0.38 },
                LesionCluster { size: 40.0, cx: 0.62, cy: 0.60 },
            ],
            jitter: 3.0,
            distractors: 1,
        }
    }

    /// Nominal lesion side of cluster `k` at this image size.
    pub fn scaled_size(&self, k: usize) -> usize {
        (self.clusters[k].size * self.size as f64 / NOMINAL_FRAME).round() as usize
    }
}

/// Ground truth recorded for one case.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CaseMeta {
    pub id: String,
    pub cluster: usize,
    /// Side length `max(h, w)` of the rasterized lesion's bounding box.
    pub lesion_size: usize,
    /// Inclusive `(x_min, y_min, x_max, y_max)`.
    pub bbox: (usize, usize, usize, usize),
    /// Normalized bounding-box centre `(x, y)`, pixel-index convention.
    pub center: (f64, f64),
    /// Centres `(x, y)` of unlabelled distractor blobs, normalized.
    pub distractors: Vec<(f64, f64)>,
}

/// Metadata file written next to the rasters.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SynthMeta {
    pub config: SynthConfig,
    pub cases: Vec<CaseMeta>,
}

/// One generated case.
#[derive(Clone, Debug)]
pub struct SynthCase {
    pub meta: CaseMeta,
    pub image: Gray8,
    pub mask: LabelGrid,
}

pub fn case_id(i: usize) -> String {
    format!("case_{i:04}")
}

fn case_rng(seed: u64, i: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(i as u64 + 1);
    rng
}

/// Generates every case. Each case draws from its own stream, so the result
/// does not depend on `exec`.
pub fn generate(cfg: &SynthConfig, exec: Exec) -> Result<Vec<SynthCase>> {
    if cfg.clusters.is_empty() {
        return Err(Error::Config(vec!["at least one lesion cluster is required".into()]));
    }
    if cfg.size < 16 {
        return Err(Error::Config(vec![format!("image size {} below 16", cfg.size)]));
    }
    exec.map_range(cfg.cases, |i| generate_case(cfg, i)).into_iter().collect()
}

fn generate_case(cfg: &SynthConfig, i: usize) -> Result<SynthCase> {
    let n = cfg.size;
    let scale = n as f64 / NOMINAL_FRAME;
    let mut rng = case_rng(cfg.seed, i);
    let k = rng.random_range(0..cfg.clusters.len());
    let cl = cfg.clusters[k];
    let spread: i64 = match rng.random_range(0..4) {
        0 => -1,
        3 => 1,
        _ => 0,
    };
    let side = (cfg.scaled_size(k) as i64 + spread).max(3) as usize;
    let jitter = Normal::new(0.0, cfg.jitter * scale).map_err(|e| Error::Domain(e.to_string()))?;
    let lesion = Blob::draw(&mut rng, side, |rng| {
        (
            cl.cx * n as f64 + jitter.sample(rng),
            cl.cy * n as f64 + jitter.sample(rng),
        )
    });

    let half = n as f64 / 2.0;
    let brain_r = 0.46 * n as f64;
    let keep_out = 0.25 * n as f64;
    let mut distractors = Vec::with_capacity(cfg.distractors);
    for _ in 0..cfg.distractors {
        let dk = rng.random_range(0..cfg.clusters.len());
        let dside = cfg.scaled_size(dk).max(3);
        let reach = dside as f64 / 2.0 + 1.0;
        let mut placed = None;
        for _ in 0..1000 {
            let b = Blob::draw(&mut rng, dside, |rng| {
                (rng.random_range(0.0..n as f64), rng.random_range(0.0..n as f64))
            });
            let inside = (b.cx - half).hypot(b.cy - half) + reach <= brain_r;
            let clear = cfg.clusters.iter().all(|c| {
                (b.cx - c.cx * n as f64).hypot(b.cy - c.cy * n as f64) >= keep_out
            }) && (b.cx - lesion.cx).hypot(b.cy - lesion.cy) >= reach + side as f64 / 2.0 + 2.0;
            if inside && clear {
                placed = Some(b);
                break;
            }
        }
        distractors.push(placed.ok_or_else(|| {
            Error::Domain(format!("case {i}: no room for a distractor"))
        })?);
    }

    let brain = Normal::new(100.0f64, 12.0).unwrap();
    let bright = Normal::new(175.0f64, 12.0).unwrap();
    let mut pixels = vec![0u8; n * n];
    let mut labels = vec![0u8; n * n];
    for y in 0..n {
        for x in 0..n {
            let (u, v) = (x as f64 + 0.5, y as f64 + 0.5);
            let in_lesion = lesion.contains(u, v);
            let in_distractor = distractors.iter().any(|d| d.contains(u, v));
            let in_brain = (u - half).powi(2) + (v - half).powi(2) <= brain_r * brain_r;
            let idx = y * n + x;
            if in_lesion || in_distractor {
                labels[idx] = u8::from(in_lesion);
                pixels[idx] = bright.sample(&mut rng).clamp(1.0, 255.0) as u8;
            } else if in_brain {
                pixels[idx] = brain.sample(&mut rng).clamp(1.0, 255.0) as u8;
            }
        }
    }
    let mask = LabelGrid::new(n, n, labels)?;
    let (mut x0, mut y0, mut x1, mut y1) = (usize::MAX, usize::MAX, 0, 0);
    for (idx, &l) in mask.labels.iter().enumerate() {
        if l != 0 {
            let (y, x) = (idx / n, idx % n);
            x0 = x0.min(x);
            x1 = x1.max(x);
            y0 = y0.min(y);
            y1 = y1.max(y);
        }
    }
    if x0 == usize::MAX {
        return Err(Error::Domain(format!("case {i}: lesion fell outside the image")));
    }
    let meta = CaseMeta {
        id: case_id(i),
        cluster: k,
        lesion_size: (x1 - x0 + 1).max(y1 - y0 + 1),
        bbox: (x0, y0, x1, y1),
        center: (
            (x0 + x1) as f64 / 2.0 / n as f64,
            (y0 + y1) as f64 / 2.0 / n as f64,
        ),
        distractors: distractors
            .iter()
            .map(|d| (d.cx / n as f64, d.cy / n as f64))
            .collect(),
    };
    Ok(SynthCase {
        meta,
        image: Gray8::new(n, n, pixels)?,
        mask,
    })
}

/// Axis-aligned ellipse whose longer bounding-box side is exactly `side`.
struct Blob {
    cx: f64,
    cy: f64,
    ax: f64,
    ay: f64,
}

impl Blob {
    fn draw(rng: &mut ChaCha8Rng, side: usize, centre: impl FnOnce(&mut ChaCha8Rng) -> (f64, f64)) -> Self {
        let ratio = rng.random_range(0.6..0.9);
        let swap = rng.random_bool(0.5);
        let (x, y) = centre(rng);
        // odd sides centre on a pixel centre, even sides on a pixel corner
        let snap = |v: f64| if side % 2 == 1 { v.floor() + 0.5 } else { v.round() };
        let major = side as f64 / 2.0;
        let minor = (major * ratio).max(1.0);
        let (ax, ay) = if swap { (minor, major) } else { (major, minor) };
        Blob { cx: snap(x), cy: snap(y), ax, ay }
    }

    fn contains(&self, u: f64, v: f64) -> bool {
        ((u - self.cx) / self.ax).powi(2) + ((v - self.cy) / self.ay).powi(2) <= 1.0
    }
}

/// Uniform-noise images with no lesion, same size and streams as
/// [`generate`] but offset so they never coincide with a real case.
pub fn noise_images(count: usize, size: usize, seed: u64) -> Result<Vec<Gray8>> {
    (0..count)
        .map(|i| {
            let mut rng = case_rng(seed ^ 0x6e6f_6973_6500_0000, i);
            let px = (0..size * size).map(|_| rng.random_range(1..=255u8)).collect();
            Gray8::new(size, size, px)
        })
        .collect()
}

/// Writes `images/<id>_m0.pgm`, `masks/<id>.pgm` and `meta.json` under `dir`.
pub fn write_dataset(dir: &Path, cfg: &SynthConfig, cases: &[SynthCase]) -> Result<()> {
    fs::create_dir_all(dir.join("images"))?;
    fs::create_dir_all(dir.join("masks"))?;
    for c in cases {
        write_atomic(
            &dir.join("images").join(format!("{}_m0.pgm", c.meta.id)),
            &c.image.encode(),
        )?;
        write_atomic(
            &dir.join("masks").join(format!("{}.pgm", c.meta.id)),
            &c.mask.to_gray().encode(),
        )?;
    }
    let meta = SynthMeta {
        config: cfg.clone(),
        cases: cases.iter().map(|c| c.meta.clone()).collect(),
    };
    let json = serde_json::to_string_pretty(&meta)? + "\n";
    write_atomic(&dir.join("meta.json"), json.as_bytes())
}

pub fn read_meta(dir: &Path) -> Result<SynthMeta> {
    Ok(serde_json::from_str(&fs::read_to_string(dir.join("meta.json"))?)?)
}
