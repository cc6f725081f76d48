//! ROI prior templates mined from a corpus of training masks.
//!
//! Pipeline: 8-connected components per mask, size filtering, the integer
//! scale histogram, spaced peak detection, and per-peak spatial clustering
//! of component centers. Each surviving cluster becomes one [`RoiPrior`].

mod components;
mod distribution;

use std::path::Path;

use serde::{Deserialize, Serialize};

pub use components::{connected_components, filter_components, Component};
pub use distribution::{detect_peaks, scale_distribution, ScaleDistribution};

use crate::error::{Error, Result};
use crate::exec::Exec;
use crate::labelio::{write_atomic, LabelGrid};

/// Extraction parameters; serialized as the `params` object of a prior file.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PriorParams {
    pub s_min: usize,
    pub s_valid: usize,
    pub d_min: usize,
    pub neighbor_radius: f64,
    #[serde(rename = "N")]
    pub n: usize,
    #[serde(rename = "H")]
    pub height: usize,
    #[serde(rename = "W")]
    pub width: usize,
}

/// Everything [`extract_priors`] needs beyond the masks themselves.
#[derive(Clone, Debug, PartialEq)]
pub struct PriorConfig {
    pub s_min: usize,
    pub s_valid: usize,
    pub d_min: usize,
    pub neighbor_radius: f64,
    pub n: usize,
    /// Labels counted as lesion; `[1, 2, 4]` is the whole-tumor union.
    pub foreground: Vec<u8>,
    /// A cluster needs at least this fraction of all valid components.
    pub min_support_frac: f64,
}

impl Default for PriorConfig {
    fn default() -> Self {
        PriorConfig {
            s_min: 10,
            s_valid: 20,
            d_min: 5,
            neighbor_radius: 30.0,
            n: 10,
            foreground: vec![1, 2, 4],
            min_support_frac: 0.01,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RoiPrior {
    /// Scale ratio `peak_size / H`.
    pub r: f64,
    pub cx: f64,
    pub cy: f64,
    pub peak_size: usize,
    pub support: usize,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum ExtractionStatus {
    #[default]
    Ok,
    /// Peaks existed but no cluster reached the support threshold.
    NoClusters,
    /// No component survived the size filters.
    NoValidComponents,
}

/// The ordered template set `{(r_i, c_i)}`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PriorTemplateSet {
    pub params: PriorParams,
    pub priors: Vec<RoiPrior>,
    #[serde(skip)]
    pub status: ExtractionStatus,
}

impl PriorTemplateSet {
    pub fn len(&self) -> usize {
        self.priors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.priors.is_empty()
    }

    /// Compact JSON followed by a newline.
    pub fn to_json(&self) -> String {
        let mut s = serde_json::to_string(self).expect("serializable priors");
        s.push('\n');
        s
    }

    pub fn from_json(s: &str) -> Result<Self> {
        let set: PriorTemplateSet = serde_json::from_str(s)?;
        for p in &set.priors {
            if !(p.r > 0.0 && p.r <= 1.0) || !(0.0..=1.0).contains(&p.cx) || !(0.0..=1.0).contains(&p.cy)
            {
                return Err(Error::Format(format!("prior out of range: {p:?}")));
            }
        }
        Ok(set)
    }

    pub fn read(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_json(&std::fs::read_to_string(path)?)
    }

    pub fn write(&self, path: impl AsRef<Path>) -> Result<()> {
        write_atomic(path.as_ref(), self.to_json().as_bytes())
    }
}

/// Groups components around each peak size and averages their centers.
///
/// A component belongs to the nearest peak with `|s - peak| < d_min`
/// (smaller peak on ties). Within a peak, single-linkage clustering joins
/// components whose centers lie within `neighbor_radius` pixels of any
/// member. `total` is the number of valid components the support threshold
/// is measured against.
pub fn cluster_centers(
    comps: &[Component],
    peaks: &[usize],
    cfg: &PriorConfig,
    height: usize,
    width: usize,
    total: usize,
) -> PriorTemplateSet {
    let params = PriorParams {
        s_min: cfg.s_min,
        s_valid: cfg.s_valid,
        d_min: cfg.d_min,
        neighbor_radius: cfg.neighbor_radius,
        n: cfg.n,
        height,
        width,
    };
    let min_support = cfg.min_support_frac * total as f64;
    let mut priors = Vec::new();
    for &peak in peaks {
        let mut members: Vec<(f64, f64)> = comps
            .iter()
            .filter(|c| nearest_peak(c.s, peaks, cfg.d_min) == Some(peak))
            .map(|c| c.center)
            .collect();
        // order-independent summation below relies on a canonical order
        members.sort_by(|a, b| a.1.total_cmp(&b.1).then(a.0.total_cmp(&b.0)));
        for cluster in single_linkage(&members, cfg.neighbor_radius) {
            if cluster.is_empty() || (cluster.len() as f64) < min_support {
                continue;
            }
            let (sx, sy) = cluster
                .iter()
                .fold((0.0, 0.0), |(sx, sy), &i| (sx + members[i].0, sy + members[i].1));
            let n = cluster.len() as f64;
            priors.push(RoiPrior {
                r: peak as f64 / height as f64,
                cx: (sx / n) / width as f64,
                cy: (sy / n) / height as f64,
                peak_size: peak,
                support: cluster.len(),
            });
        }
    }
    priors.sort_by(|a, b| {
        b.support
            .cmp(&a.support)
            .then(a.peak_size.cmp(&b.peak_size))
            .then(a.cy.total_cmp(&b.cy))
            .then(a.cx.total_cmp(&b.cx))
    });
    priors.truncate(cfg.n);
    let status = if priors.is_empty() {
        ExtractionStatus::NoClusters
    } else {
        ExtractionStatus::Ok
    };
    PriorTemplateSet {
        params,
        priors,
        status,
    }
}

fn nearest_peak(s: usize, peaks: &[usize], d_min: usize) -> Option<usize> {
    peaks
        .iter()
        .copied()
        .filter(|p| p.abs_diff(s) < d_min)
        .min_by(|a, b| a.abs_diff(s).cmp(&b.abs_diff(s)).then(a.cmp(b)))
}

/// Connected groups under "distance <= radius" links, each sorted, in order
/// of their smallest member.
fn single_linkage(points: &[(f64, f64)], radius: f64) -> Vec<Vec<usize>> {
    let n = points.len();
    let mut parent: Vec<usize> = (0..n).collect();
    fn find(parent: &mut [usize], mut i: usize) -> usize {
        while parent[i] != i {
            parent[i] = parent[parent[i]];
            i = parent[i];
        }
        i
    }
    let r2 = radius * radius;
    for i in 0..n {
        for j in i + 1..n {
            let (dx, dy) = (points[i].0 - points[j].0, points[i].1 - points[j].1);
            if dx * dx + dy * dy <= r2 {
                let (a, b) = (find(&mut parent, i), find(&mut parent, j));
                if a != b {
                    parent[a.max(b)] = a.min(b);
                }
            }
        }
    }
    let mut groups: std::collections::BTreeMap<usize, Vec<usize>> = Default::default();
    for i in 0..n {
        let root = find(&mut parent, i);
        groups.entry(root).or_default().push(i);
    }
    groups.into_values().collect()
}

/// Full extraction over a mask corpus. Per-mask labeling runs under `exec`.
pub fn extract_priors(
    corpus: &[LabelGrid],
    cfg: &PriorConfig,
    exec: Exec,
) -> Result<PriorTemplateSet> {
    let first = corpus
        .first()
        .ok_or_else(|| Error::Contract("empty mask corpus".into()))?;
    let (height, width) = (first.height, first.width);
    if corpus
        .iter()
        .any(|m| m.height != height || m.width != width)
    {
        return Err(Error::Dimension("corpus masks differ in size".into()));
    }
    if cfg.n == 0 || cfg.d_min == 0 || cfg.s_min == 0 {
        return Err(Error::Domain("N, d_min and s_min must be at least 1".into()));
    }

    let per_mask = exec.map(corpus, |m| {
        filter_components(connected_components(m, &cfg.foreground), cfg.s_min)
            .into_iter()
            .filter(|c| c.s >= cfg.s_valid)
            .collect::<Vec<_>>()
    });
    let comps: Vec<Component> = per_mask.into_iter().flatten().collect();
    let dist = scale_distribution(&comps, cfg.s_valid);
    let peaks = detect_peaks(&dist, cfg.d_min, cfg.n);
    let mut set = cluster_centers(&comps, &peaks, cfg, height, width, dist.len());
    if dist.is_empty() {
        set.status = ExtractionStatus::NoValidComponents;
    }
    Ok(set)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn square_at(size: usize, y0: usize, x0: usize, s: usize) -> LabelGrid {
        let mut g = LabelGrid::zeros(size, size);
        for y in y0..y0 + s {
            for x in x0..x0 + s {
                g.set(y, x, 1);
            }
        }
        g
    }

    fn comp(s: usize, cx: f64, cy: f64) -> Component {
        Component {
            pixels: vec![],
            bbox: (0, 0, s - 1, s - 1),
            h: s,
            w: s,
            s,
            center: (cx, cy),
        }
    }

    #[test]
    fn identical_centers_average_to_themselves() {
        let comps: Vec<_> = (0..4).map(|_| comp(40, 80.0, 80.0)).collect();
        let set = cluster_centers(&comps, &[40], &PriorConfig::default(), 160, 160, 4);
        assert_eq!(set.priors.len(), 1);
        let p = &set.priors[0];
        assert_eq!((p.cx, p.cy, p.r, p.support), (0.5, 0.5, 0.25, 4));
    }

    #[test]
    fn distant_same_size_components_stay_apart() {
        let comps = vec![comp(24, 30.0, 80.0), comp(24, 130.0, 80.0)];
        let set = cluster_centers(&comps, &[24], &PriorConfig::default(), 160, 160, 2);
        assert_eq!(set.priors.len(), 2);
    }

    #[test]
    fn chained_neighbours_merge() {
        let comps = vec![
            comp(24, 10.0, 10.0),
            comp(24, 35.0, 10.0),
            comp(24, 60.0, 10.0),
        ];
        let set = cluster_centers(&comps, &[24], &PriorConfig::default(), 160, 160, 3);
        assert_eq!(set.priors.len(), 1);
        assert_eq!(set.priors[0].cx, 35.0 / 160.0);
    }

    #[test]
    fn no_clusters_is_flagged() {
        let set = cluster_centers(&[], &[30], &PriorConfig::default(), 160, 160, 0);
        assert!(set.is_empty());
        assert_eq!(set.status, ExtractionStatus::NoClusters);
    }

    #[test]
    fn identical_corpus_gives_one_prior() {
        let corpus: Vec<_> = (0..7).map(|_| square_at(160, 50, 60, 30)).collect();
        let set = extract_priors(&corpus, &PriorConfig::default(), Exec::Sequential).unwrap();
        assert_eq!(set.priors.len(), 1);
        assert_eq!(set.priors[0].support, 7);
        assert_eq!(set.priors[0].peak_size, 30);
        assert_eq!(set.priors[0].r * 160.0, 30.0);
    }

    #[test]
    fn corpus_without_lesions_reports_status() {
        let corpus = vec![LabelGrid::zeros(32, 32)];
        let set = extract_priors(&corpus, &PriorConfig::default(), Exec::Sequential).unwrap();
        assert!(set.is_empty());
        assert_eq!(set.status, ExtractionStatus::NoValidComponents);
        assert!(extract_priors(&[], &PriorConfig::default(), Exec::Sequential).is_err());
    }

    #[test]
    fn json_schema_field_names() {
        let set = PriorTemplateSet {
            params: PriorParams {
                s_min: 10,
                s_valid: 20,
                d_min: 5,
                neighbor_radius: 30.0,
                n: 10,
                height: 160,
                width: 160,
            },
            priors: vec![RoiPrior {
                r: 0.25,
                cx: 0.5,
                cy: 0.43,
                peak_size: 40,
                support: 812,
            }],
            status: ExtractionStatus::Ok,
        };
        assert_eq!(
            set.to_json(),
            "{\"params\":{\"s_min\":10,\"s_valid\":20,\"d_min\":5,\"neighbor_radius\":30.0,\"N\":10,\"H\":160,\"W\":160},\
             \"priors\":[{\"r\":0.25,\"cx\":0.5,\"cy\":0.43,\"peak_size\":40,\"support\":812}]}\n"
        );
        assert_eq!(PriorTemplateSet::from_json(&set.to_json()).unwrap(), set);
        assert!(PriorTemplateSet::from_json("{\"params\":").is_err());
    }
}
