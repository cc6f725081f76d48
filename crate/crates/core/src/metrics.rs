//! Overlap and surface-distance metrics: Dice, HD95 and the per-case report.

use std::collections::BTreeMap;

use crate::error::{dim_err, Result};
use crate::exec::Exec;
use crate::labelio::{LabelGrid, Region};

/// Binary raster for one region.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct RegionMask {
    pub height: usize,
    pub width: usize,
    pub bits: Vec<bool>,
}

impl RegionMask {
    pub fn new(height: usize, width: usize, bits: Vec<bool>) -> Result<Self> {
        if bits.len() != height * width {
            return dim_err(format!("{height}×{width} mask with {} values", bits.len()));
        }
        Ok(RegionMask { height, width, bits })
    }

    pub fn from_labels(grid: &LabelGrid, region: Region) -> Self {
        RegionMask {
            height: grid.height,
            width: grid.width,
            bits: grid.region(region),
        }
    }

    pub fn count(&self) -> usize {
        self.bits.iter().filter(|&&b| b).count()
    }

    pub fn is_empty(&self) -> bool {
        !self.bits.iter().any(|&b| b)
    }

    fn at(&self, y: usize, x: usize) -> bool {
        self.bits[y * self.width + x]
    }

    /// Foreground pixels with a background 8-neighbour or on the image edge,
    /// as `(row, col)` in raster order.
    pub fn boundary(&self) -> Vec<(usize, usize)> {
        let (h, w) = (self.height, self.width);
        let mut out = Vec::new();
        for y in 0..h {
            for x in 0..w {
                if !self.at(y, x) {
                    continue;
                }
                let edge = y == 0 || x == 0 || y + 1 == h || x + 1 == w;
                let open = edge
                    || (y - 1..=y + 1)
                        .any(|yy| (x - 1..=x + 1).any(|xx| !self.at(yy, xx)));
                if open {
                    out.push((y, x));
                }
            }
        }
        out
    }
}

fn same_shape(a: &RegionMask, b: &RegionMask) -> Result<()> {
    if a.height != b.height || a.width != b.width {
        return dim_err(format!(
            "masks {}×{} and {}×{} differ",
            a.height, a.width, b.height, b.width
        ));
    }
    Ok(())
}

/// A Dice value; `both_empty` marks the 1.0 returned for two empty masks.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct DiceScore {
    pub value: f64,
    pub both_empty: bool,
}

/// `2TP / (FP + 2TP + FN)`.
pub fn dice(pred: &RegionMask, gt: &RegionMask) -> Result<DiceScore> {
    same_shape(pred, gt)?;
    let (mut tp, mut fp, mut fnn) = (0usize, 0usize, 0usize);
    for (&p, &g) in pred.bits.iter().zip(&gt.bits) {
        match (p, g) {
            (true, true) => tp += 1,
            (true, false) => fp += 1,
            (false, true) => fnn += 1,
            _ => {}
        }
    }
    if tp + fp + fnn == 0 {
        return Ok(DiceScore {
            value: 1.0,
            both_empty: true,
        });
    }
    Ok(DiceScore {
        value: 2.0 * tp as f64 / (fp + 2 * tp + fnn) as f64,
        both_empty: false,
    })
}

/// An HD95 value; `sentinel` marks the image diagonal returned when either
/// mask is empty.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Hd95 {
    pub value: f64,
    pub sentinel: bool,
}

/// Linear-interpolation percentile of an ascending slice, `q` in `[0, 100]`.
pub fn percentile(sorted: &[f64], q: f64) -> f64 {
    match sorted.len() {
        0 => f64::NAN,
        1 => sorted[0],
        n => {
            let rank = q / 100.0 * (n - 1) as f64;
            let lo = rank.floor() as usize;
            let hi = (lo + 1).min(n - 1);
            let frac = rank - lo as f64;
            sorted[lo] + frac * (sorted[hi] - sorted[lo])
        }
    }
}

/// Squared distance from every pixel to the nearest `true` pixel of
/// `feature` (which must be non-empty), via separable exact transforms.
fn squared_edt(feature: &[bool], h: usize, w: usize) -> Vec<u64> {
    // per-row distance to the nearest feature pixel, None if the row has none
    let mut rows: Vec<Option<u64>> = vec![None; h * w];
    for y in 0..h {
        let line = &feature[y * w..(y + 1) * w];
        let mut last: Option<usize> = None;
        for x in 0..w {
            if line[x] {
                last = Some(x);
            }
            rows[y * w + x] = last.map(|l| (x - l) as u64);
        }
        let mut next: Option<usize> = None;
        for x in (0..w).rev() {
            if line[x] {
                next = Some(x);
            }
            if let Some(n) = next {
                let d = (n - x) as u64;
                let cell = &mut rows[y * w + x];
                *cell = Some(cell.map_or(d, |c| c.min(d)));
            }
        }
    }
    let mut out = vec![0u64; h * w];
    let mut verts: Vec<usize> = Vec::with_capacity(h);
    let mut bounds: Vec<f64> = Vec::with_capacity(h + 1);
    for x in 0..w {
        let f = |y: usize| rows[y * w + x].map(|d| d * d);
        verts.clear();
        bounds.clear();
        for q in 0..h {
            let Some(fq) = f(q) else { continue };
            loop {
                let Some(&v) = verts.last() else {
                    verts.push(q);
                    bounds.push(f64::NEG_INFINITY);
                    break;
                };
                let fv = f(v).unwrap();
                let s = ((fq + (q * q) as u64) as f64 - (fv + (v * v) as u64) as f64)
                    / (2.0 * (q as f64 - v as f64));
                if s <= *bounds.last().unwrap() {
                    verts.pop();
                    bounds.pop();
                } else {
                    verts.push(q);
                    bounds.push(s);
                    break;
                }
            }
        }
        let mut k = 0;
        for y in 0..h {
            while k + 1 < verts.len() && bounds[k + 1] < y as f64 {
                k += 1;
            }
            let v = verts[k];
            let dy = y.abs_diff(v) as u64;
            out[y * w + x] = dy * dy + f(v).unwrap();
        }
    }
    out
}

fn directed(from: &[(usize, usize)], to_edt: &[u64], w: usize) -> Vec<f64> {
    let mut d: Vec<f64> = from
        .iter()
        .map(|&(y, x)| (to_edt[y * w + x] as f64).sqrt())
        .collect();
    d.sort_by(f64::total_cmp);
    d
}

/// Larger of the two directed 95th-percentile boundary distances.
pub fn hd95(pred: &RegionMask, gt: &RegionMask) -> Result<Hd95> {
    same_shape(pred, gt)?;
    let (h, w) = (pred.height, pred.width);
    if pred.is_empty() || gt.is_empty() {
        return Ok(Hd95 {
            value: ((h * h + w * w) as f64).sqrt(),
            sentinel: true,
        });
    }
    let (bp, bg) = (pred.boundary(), gt.boundary());
    let as_mask = |pts: &[(usize, usize)]| {
        let mut m = vec![false; h * w];
        for &(y, x) in pts {
            m[y * w + x] = true;
        }
        m
    };
    let edt_p = squared_edt(&as_mask(&bp), h, w);
    let edt_g = squared_edt(&as_mask(&bg), h, w);
    let a = percentile(&directed(&bp, &edt_g, w), 95.0);
    let b = percentile(&directed(&bg, &edt_p, w), 95.0);
    Ok(Hd95 {
        value: a.max(b),
        sentinel: false,
    })
}

/// One evaluated case.
#[derive(Clone, Debug)]
pub struct EvalCase {
    pub id: String,
    pub pred: LabelGrid,
    pub gt: LabelGrid,
    /// Whether the decision for this case fell back, when known.
    pub fallback: Option<bool>,
}

/// One `(case, region)` row.
#[derive(Clone, Debug, PartialEq)]
pub struct EvalRow {
    pub case_id: String,
    pub region: Region,
    pub dice: f64,
    pub hd95: f64,
    pub fallback: Option<bool>,
    pub flags: Vec<&'static str>,
}

/// Rows for every case and region plus per-region means.
#[derive(Clone, Debug, PartialEq)]
pub struct EvalReport {
    pub rows: Vec<EvalRow>,
    pub means: BTreeMap<Region, (f64, f64)>,
    pub fallback_rate: Option<f64>,
}

/// Scores every case on `regions`, in parallel across cases.
pub fn evaluate(cases: &[EvalCase], regions: &[Region], exec: Exec) -> Result<EvalReport> {
    let per_case = exec.map(cases, |c| -> Result<Vec<EvalRow>> {
        regions
            .iter()
            .map(|&region| {
                let p = RegionMask::from_labels(&c.pred, region);
                let g = RegionMask::from_labels(&c.gt, region);
                let d = dice(&p, &g)?;
                let hd = hd95(&p, &g)?;
                let mut flags = Vec::new();
                if d.both_empty {
                    flags.push("both_empty");
                }
                if hd.sentinel {
                    flags.push("hd95_sentinel");
                }
                Ok(EvalRow {
                    case_id: c.id.clone(),
                    region,
                    dice: d.value,
                    hd95: hd.value,
                    fallback: c.fallback,
                    flags,
                })
            })
            .collect()
    });
    let mut rows = Vec::new();
    for r in per_case {
        rows.extend(r?);
    }
    let mut means = BTreeMap::new();
    for &region in regions {
        let sel: Vec<&EvalRow> = rows.iter().filter(|r| r.region == region).collect();
        if !sel.is_empty() {
            let n = sel.len() as f64;
            let md = sel.iter().map(|r| r.dice).sum::<f64>() / n;
            let mh = sel.iter().map(|r| r.hd95).sum::<f64>() / n;
            means.insert(region, (md, mh));
        }
    }
    let known: Vec<bool> = cases.iter().filter_map(|c| c.fallback).collect();
    let fallback_rate = (!known.is_empty())
        .then(|| known.iter().filter(|&&f| f).count() as f64 / known.len() as f64);
    Ok(EvalReport {
        rows,
        means,
        fallback_rate,
    })
}

impl EvalReport {
    /// CSV with header `case_id,region,dice,hd95,fallback_rate,flag` and a
    /// `mean` row per region. Per-case `fallback_rate` is 1 or 0.
    pub fn to_csv(&self) -> String {
        let mut s = String::from("case_id,region,dice,hd95,fallback_rate,flag\n");
        let fb = |f: Option<f64>| f.map(|v| format!("{v:.6}")).unwrap_or_default();
        for r in &self.rows {
            s.push_str(&format!(
                "{},{},{:.6},{:.6},{},{}\n",
                r.case_id,
                r.region.name(),
                r.dice,
                r.hd95,
                fb(r.fallback.map(|b| if b { 1.0 } else { 0.0 })),
                r.flags.join(";")
            ));
        }
        for (region, (d, h)) in &self.means {
            s.push_str(&format!(
                "mean,{},{:.6},{:.6},{},\n",
                region.name(),
                d,
                h,
                fb(self.fallback_rate)
            ));
        }
        s
    }
}
