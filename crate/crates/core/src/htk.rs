//! Hierarchical Top-K ROI decision: per-layer candidate scoring, coarse to
//! fine filtering, confidence aggregation across layers and the
//! gap/entropy stability test.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::backbone::window_box;
use crate::error::{dim_err, Error, Result};
use crate::numerics::{Graph, ParamId, ParamStore, Tape, Tensor, Var};
use crate::prior::RoiPrior;

/// Hidden width of every scorer MLP.
pub const SCORER_HIDDEN: usize = 32;

/// Scorer MLP for one layer: `[GAP(window) ‖ r, cx, cy] → 32 → 1`.
#[derive(Clone, Debug)]
pub struct ScorerHead {
    channels: usize,
    w1: ParamId,
    b1: ParamId,
    w2: ParamId,
    b2: ParamId,
}

impl ScorerHead {
    /// With `zero` set every weight starts at zero.
    pub fn new(
        store: &mut ParamStore,
        prefix: &str,
        channels: usize,
        rng: &mut impl Rng,
        zero: bool,
    ) -> Self {
        let d_in = channels + 3;
        let s1 = if zero { 0.0 } else { (2.0 / d_in as f64).sqrt() };
        let s2 = if zero { 0.0 } else { (1.0 / SCORER_HIDDEN as f64).sqrt() };
        ScorerHead {
            channels,
            w1: store.add_normal(format!("{prefix}.w1"), &[d_in, SCORER_HIDDEN], s1, rng),
            b1: store.add_zeros(format!("{prefix}.b1"), &[SCORER_HIDDEN]),
            w2: store.add_normal(format!("{prefix}.w2"), &[SCORER_HIDDEN, 1], s2, rng),
            b2: store.add_zeros(format!("{prefix}.b2"), &[1]),
        }
    }

    pub fn channels(&self) -> usize {
        self.channels
    }
}

/// Scores of one layer. `vars[k]` is `None` for a degenerate window, whose
/// value is `-∞`.
#[derive(Clone, Debug)]
pub struct LayerScores {
    pub indices: Vec<usize>,
    pub values: Vec<f64>,
    pub vars: Vec<Option<Var>>,
}

/// Scores the priors listed in `indices` on features `f: C×H×W`.
pub fn score_layer(
    g: &mut Graph,
    f: Var,
    priors: &[RoiPrior],
    indices: &[usize],
    head: &ScorerHead,
) -> Result<LayerScores> {
    let shape = g.tape.shape(f).to_vec();
    if shape.len() != 3 || shape[0] != head.channels {
        return dim_err(format!(
            "scorer expects {} channels, got features {shape:?}",
            head.channels
        ));
    }
    let (h, w) = (shape[1], shape[2]);
    let mut rows = Vec::new();
    let mut slots = Vec::new();
    for (k, &i) in indices.iter().enumerate() {
        let p = priors
            .get(i)
            .ok_or_else(|| Error::Dimension(format!("prior index {i} out of range")))?;
        let b = match window_box(p.cx, p.cy, p.r, h, w) {
            Ok(b) => b,
            Err(Error::Degenerate(_)) => continue,
            Err(e) => return Err(e),
        };
        let crop = g.tape.crop(f, b.y0, b.x0, b.side, b.side)?;
        let pooled = g.tape.spatial_mean(crop)?;
        let geo = g.tape.constant(Tensor::vector(vec![p.r, p.cx, p.cy]));
        let x = g.tape.concat(&[pooled, geo])?;
        rows.push(g.tape.reshape(x, &[1, head.channels + 3])?);
        slots.push(k);
    }
    let mut vars = vec![None; indices.len()];
    let mut values = vec![f64::NEG_INFINITY; indices.len()];
    if !rows.is_empty() {
        let x = g.tape.concat(&rows)?;
        let (w1, b1, w2, b2) = (g.p(head.w1), g.p(head.b1), g.p(head.w2), g.p(head.b2));
        let hdn = g.tape.matmul(x, w1)?;
        let hdn = g.tape.add_row(hdn, b1)?;
        let hdn = g.tape.relu(hdn)?;
        let out = g.tape.matmul(hdn, w2)?;
        let out = g.tape.add_row(out, b2)?;
        for (row, &k) in slots.iter().enumerate() {
            let s = g.tape.gather(out, &[row])?;
            values[k] = g.tape.value(s).item();
            vars[k] = Some(s);
        }
    }
    Ok(LayerScores {
        indices: indices.to_vec(),
        values,
        vars,
    })
}

/// Indices of the `k` largest finite scores, ties to the lower index,
/// returned in ascending index order. `indices[i]` labels `scores[i]`.
pub fn topk_filter(scores: &[f64], indices: &[usize], k: usize) -> Result<Vec<usize>> {
    if k == 0 {
        return Err(Error::Domain("top-k needs k >= 1".into()));
    }
    if scores.len() != indices.len() {
        return dim_err("top-k: scores and indices differ in length");
    }
    let mut order: Vec<usize> = (0..scores.len()).filter(|&i| scores[i].is_finite()).collect();
    order.sort_by(|&a, &b| {
        scores[b]
            .total_cmp(&scores[a])
            .then(indices[a].cmp(&indices[b]))
    });
    let mut chosen: Vec<usize> = order.into_iter().take(k).map(|i| indices[i]).collect();
    chosen.sort_unstable();
    Ok(chosen)
}

/// Softmax over the selected support placed into a length-`n` row. An empty
/// support gives a zero row and `true`.
pub fn expand_scores(scores: &[f64], support: &[usize], n: usize) -> Result<(Vec<f64>, bool)> {
    if scores.len() != support.len() || support.iter().any(|&i| i >= n) {
        return dim_err("expand: support does not match scores or row length");
    }
    let mut row = vec![0.0; n];
    if support.is_empty() {
        return Ok((row, true));
    }
    let m = scores.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = scores.iter().map(|&s| (s - m).exp()).collect();
    let z: f64 = e.iter().sum();
    for (&i, v) in support.iter().zip(e) {
        row[i] = v / z;
    }
    Ok((row, false))
}

/// `S = Σ α_l ŝ^(l)` and its argmax (lower index on ties, `None` when all zero).
pub fn aggregate_confidence(rows: &[Vec<f64>], alpha: &[f64]) -> Result<(Vec<f64>, Option<usize>)> {
    if rows.len() != alpha.len() || rows.is_empty() {
        return dim_err(format!("{} rows for {} layer weights", rows.len(), alpha.len()));
    }
    if alpha.iter().any(|&a| !(a >= 0.0)) {
        return Err(Error::Domain("layer weights must be non-negative".into()));
    }
    let n = rows[0].len();
    if rows.iter().any(|r| r.len() != n) {
        return dim_err("confidence rows differ in length");
    }
    let mut s = vec![0.0; n];
    for (row, &a) in rows.iter().zip(alpha) {
        for (acc, &v) in s.iter_mut().zip(row) {
            *acc += a * v;
        }
    }
    Ok((s.clone(), argmax(&s)))
}

fn argmax(s: &[f64]) -> Option<usize> {
    if s.iter().all(|&v| v == 0.0) {
        return None;
    }
    let mut best = 0;
    for (i, &v) in s.iter().enumerate() {
        if v > s[best] {
            best = i;
        }
    }
    Some(best)
}

/// Result of the stability test.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Stability {
    pub gap: f64,
    pub entropy: f64,
    pub fallback: bool,
}

/// Gap between the two largest entries of `S`, entropy of `softmax(S)` in
/// nats, and `fallback = gap < τ₁ ∨ H > τ₂`. A single entry has gap `S₁` and
/// entropy 0.
pub fn stability_check(s: &[f64], tau1: f64, tau2: f64) -> Result<Stability> {
    let (gap, entropy) = match s.len() {
        0 => return dim_err("stability check on an empty confidence vector"),
        1 => (s[0], 0.0),
        _ => {
            let mut sorted = s.to_vec();
            sorted.sort_by(|a, b| b.total_cmp(a));
            let m = sorted[0];
            let e: Vec<f64> = s.iter().map(|&v| (v - m).exp()).collect();
            let z: f64 = e.iter().sum();
            let h = -e
                .iter()
                .map(|&v| v / z)
                .filter(|&p| p > 0.0)
                .map(|p| p * p.ln())
                .sum::<f64>();
            (sorted[0] - sorted[1], h)
        }
    };
    Ok(Stability {
        gap,
        entropy,
        fallback: gap < tau1 || entropy > tau2,
    })
}

/// Per-layer candidate budget, listed finest layer first.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TopKSchedule {
    pub k: Vec<usize>,
}

impl TopKSchedule {
    /// `K^(L) = min(N, 5)`, then `K^(l) = max(1, ⌈K^(l+1)/2⌉)`.
    pub fn default_for(n: usize, layers: usize) -> Self {
        let mut k = vec![0; layers];
        let mut cur = n.clamp(1, 5);
        for l in (0..layers).rev() {
            k[l] = cur;
            cur = cur.div_ceil(2).max(1);
        }
        TopKSchedule { k }
    }

    pub fn validate(&self, n: usize) -> Result<()> {
        let mut errs = Vec::new();
        if self.k.is_empty() {
            errs.push("top-k schedule is empty".to_string());
        }
        if self.k.contains(&0) {
            errs.push("top-k entries must be at least 1".to_string());
        }
        if self.k.windows(2).any(|w| w[0] > w[1]) {
            errs.push("top-k must not grow toward shallow layers".to_string());
        }
        if self.k.last().is_some_and(|&k| k > n) {
            errs.push(format!("top-k at the deepest layer exceeds {n} priors"));
        }
        if errs.is_empty() {
            Ok(())
        } else {
            Err(Error::Config(errs))
        }
    }
}

/// Decision thresholds.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Thresholds {
    pub tau1: f64,
    pub tau2: f64,
    pub tau_lock: f64,
}

impl Thresholds {
    /// `τ₁ = 0.15`, `τ₂ = 0.9·ln N`, `τ_lock = 0.30`.
    pub fn default_for(n: usize) -> Self {
        Thresholds {
            tau1: 0.15,
            tau2: 0.9 * (n.max(1) as f64).ln(),
            tau_lock: 0.30,
        }
    }
}

/// One raw score in a sparse per-layer list.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct IndexedScore {
    pub index: usize,
    pub score: Option<f64>,
}

/// Everything the decision produced for one input. Layers are listed finest
/// first; indices are 0-based prior indices.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ConfidenceRecord {
    pub scores: Vec<Vec<IndexedScore>>,
    pub expanded: Vec<Vec<f64>>,
    pub alpha: Vec<f64>,
    pub aggregate: Vec<f64>,
    pub delta_gap: f64,
    pub entropy: f64,
    pub fallback: bool,
    pub locked: bool,
    pub r_star: Option<usize>,
}

impl ConfidenceRecord {
    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string(self)? + "\n")
    }

    pub fn from_json(s: &str) -> Result<Self> {
        Ok(serde_json::from_str(s)?)
    }
}

/// Decision settings shared by every input.
#[derive(Clone, Debug, PartialEq)]
pub struct HtkConfig {
    pub schedule: TopKSchedule,
    pub alpha: Vec<f64>,
    pub thresholds: Thresholds,
}

impl HtkConfig {
    pub fn default_for(n: usize, layers: usize) -> Self {
        HtkConfig {
            schedule: TopKSchedule::default_for(n, layers),
            alpha: vec![1.0 / layers as f64; layers],
            thresholds: Thresholds::default_for(n),
        }
    }
}

/// A decision with its differentiable pieces still on the tape.
#[derive(Clone, Debug)]
pub struct Decision {
    pub record: ConfidenceRecord,
    /// Selected priors per layer, finest first, ascending index order.
    pub selected: Vec<Vec<usize>>,
    /// The aggregate `S` as a length-`N` tape variable.
    pub aggregate: Var,
}

/// Runs scoring from the deepest layer to the finest. `features[l]` is the
/// layer-`l` map, finest first; `heads[l]` scores it.
pub fn decide_on_graph(
    g: &mut Graph,
    features: &[Var],
    priors: &[RoiPrior],
    heads: &[ScorerHead],
    cfg: &HtkConfig,
) -> Result<Decision> {
    let layers = features.len();
    let n = priors.len();
    if layers == 0 || heads.len() != layers || cfg.schedule.k.len() != layers || cfg.alpha.len() != layers {
        return dim_err(format!(
            "decision over {layers} layers with {} heads, {} budgets, {} weights",
            heads.len(),
            cfg.schedule.k.len(),
            cfg.alpha.len()
        ));
    }
    if n == 0 {
        return Err(Error::Contract("decision needs at least one prior".into()));
    }
    let mut scores = vec![Vec::new(); layers];
    let mut expanded = vec![Vec::new(); layers];
    let mut selected = vec![Vec::new(); layers];
    let mut row_vars = vec![None; layers];
    let mut pool: Vec<usize> = (0..n).collect();
    for l in (0..layers).rev() {
        let ls = score_layer(g, features[l], priors, &pool, &heads[l])?;
        scores[l] = ls
            .indices
            .iter()
            .zip(&ls.values)
            .map(|(&index, &s)| IndexedScore {
                index,
                score: s.is_finite().then_some(s),
            })
            .collect();
        let chosen = if pool.is_empty() {
            Vec::new()
        } else {
            topk_filter(&ls.values, &ls.indices, cfg.schedule.k[l])?
        };
        let chosen_vars: Vec<Var> = chosen
            .iter()
            .map(|i| ls.vars[ls.indices.iter().position(|j| j == i).unwrap()].unwrap())
            .collect();
        if !chosen_vars.is_empty() {
            let v = g.tape.concat(&chosen_vars)?;
            let p = g.tape.softmax(v)?;
            let row = g.tape.scatter(p, &chosen, n)?;
            expanded[l] = g.tape.value(row).data().to_vec();
            row_vars[l] = Some(row);
        } else {
            expanded[l] = vec![0.0; n];
        }
        selected[l] = chosen.clone();
        pool = chosen;
    }
    let mut agg: Option<Var> = None;
    for (row, &a) in row_vars.iter().zip(&cfg.alpha) {
        if let Some(r) = *row {
            let t = g.tape.scale(r, a)?;
            agg = Some(match agg {
                Some(acc) => g.tape.add(acc, t)?,
                None => t,
            });
        }
    }
    let aggregate = match agg {
        Some(v) => v,
        None => g.tape.constant(Tensor::vector(vec![0.0; n])),
    };
    let (s, r_star) = aggregate_confidence(&expanded, &cfg.alpha)?;
    let th = cfg.thresholds;
    let st = stability_check(&s, th.tau1, th.tau2)?;
    let fallback = st.fallback || r_star.is_none();
    let locked = !fallback && st.gap > th.tau_lock;
    Ok(Decision {
        record: ConfidenceRecord {
            scores,
            expanded,
            alpha: cfg.alpha.clone(),
            aggregate: s,
            delta_gap: st.gap,
            entropy: st.entropy,
            fallback,
            locked,
            r_star,
        },
        selected,
        aggregate,
    })
}

/// [`decide_on_graph`] on plain feature tensors.
pub fn decide(
    store: &ParamStore,
    features: &[Tensor],
    priors: &[RoiPrior],
    heads: &[ScorerHead],
    cfg: &HtkConfig,
) -> Result<ConfidenceRecord> {
    let mut g = Graph::bind(store);
    let vars: Vec<Var> = features.iter().map(|f| g.tape.constant(f.clone())).collect();
    Ok(decide_on_graph(&mut g, &vars, priors, heads, cfg)?.record)
}

/// Softmax of selected scores on the tape, scattered into a length-`n` row.
pub fn expand_scores_var(tape: &mut Tape, scores: Var, support: &[usize], n: usize) -> Result<Var> {
    let p = tape.softmax(scores)?;
    tape.scatter(p, support, n)
}
