use std::collections::BTreeMap;

use super::components::Component;

/// Multiset of valid component sizes and its integer histogram.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ScaleDistribution {
    /// Valid sizes, ascending.
    pub sizes: Vec<usize>,
    pub histogram: BTreeMap<usize, usize>,
}

impl ScaleDistribution {
    pub fn from_sizes(mut sizes: Vec<usize>) -> Self {
        sizes.sort_unstable();
        let mut histogram = BTreeMap::new();
        for &s in &sizes {
            *histogram.entry(s).or_insert(0) += 1;
        }
        ScaleDistribution { sizes, histogram }
    }

    pub fn len(&self) -> usize {
        self.sizes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.sizes.is_empty()
    }

    pub fn count(&self, s: usize) -> usize {
        self.histogram.get(&s).copied().unwrap_or(0)
    }

    /// Empirical frequency `P(s) = count(s) / |S|`.
    pub fn frequency(&self, s: usize) -> f64 {
        if self.sizes.is_empty() {
            0.0
        } else {
            self.count(s) as f64 / self.sizes.len() as f64
        }
    }

    /// Histogram smoothed by a centered moving average of width 3, as
    /// `(size, 3 × average)` over `[min-1, max+1]`. Triple sums keep the
    /// values integral so plateau comparisons are exact.
    pub fn smoothed_sums(&self) -> Vec<(usize, usize)> {
        let (Some(&lo), Some(&hi)) = (self.sizes.first(), self.sizes.last()) else {
            return Vec::new();
        };
        let lo = lo.saturating_sub(1);
        (lo..=hi + 1)
            .map(|s| {
                let left = if s == 0 { 0 } else { self.count(s - 1) };
                (s, left + self.count(s) + self.count(s + 1))
            })
            .collect()
    }
}

/// Collects the sizes of components with `s >= s_valid`.
pub fn scale_distribution(comps: &[Component], s_valid: usize) -> ScaleDistribution {
    ScaleDistribution::from_sizes(
        comps
            .iter()
            .map(|c| c.s)
            .filter(|&s| s >= s_valid)
            .collect(),
    )
}

/// Local maxima of the smoothed histogram, accepted greedily by descending
/// smoothed frequency (ties: smaller size) while staying at least `d_min`
/// apart. Returns at most `n` sizes in acceptance order.
///
/// A plateau of equal smoothed values counts as one maximum when both of its
/// outer neighbours are lower. Each maximum is then localized on the raw
/// histogram: the size with the highest raw count within the smoothing
/// window around the plateau, smaller size on ties.
pub fn detect_peaks(dist: &ScaleDistribution, d_min: usize, n: usize) -> Vec<usize> {
    let sm = dist.smoothed_sums();
    let mut candidates: Vec<(usize, usize)> = Vec::new(); // (smoothed, size)
    let mut i = 0;
    while i < sm.len() {
        let v = sm[i].1;
        let mut j = i;
        while j + 1 < sm.len() && sm[j + 1].1 == v {
            j += 1;
        }
        let left = if i == 0 { 0 } else { sm[i - 1].1 };
        let right = if j + 1 < sm.len() { sm[j + 1].1 } else { 0 };
        if v > 0 && left < v && right < v {
            let (lo, hi) = (sm[i].0.saturating_sub(1), sm[j].0 + 1);
            let rep = (lo..=hi)
                .max_by(|&a, &b| dist.count(a).cmp(&dist.count(b)).then(b.cmp(&a)))
                .expect("non-empty run");
            candidates.push((v, rep));
        }
        i = j + 1;
    }
    candidates.sort_by(|a, b| b.0.cmp(&a.0).then(a.1.cmp(&b.1)));

    let mut peaks: Vec<usize> = Vec::new();
    for (_, s) in candidates {
        if peaks.len() == n {
            break;
        }
        if peaks.iter().all(|&p| p.abs_diff(s) >= d_min) {
            peaks.push(s);
        }
    }
    peaks
}
