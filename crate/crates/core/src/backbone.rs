//! ROI window encoder: square windows cut around candidate ROIs, retention
//! over each window's raster sequence, and confidence-weighted scatter fusion.

use crate::error::{dim_err, Error, Result};
use crate::numerics::{Graph, ParamStore, Tape, Tensor, Var};
use crate::retention::RetentionBlock;
use crate::wings::{hard_lock_var, modulate_var};

/// Default fusion sharpness.
pub const GAMMA_FUSE: f64 = 5.0;

/// Square window in layer pixels: rows `y0..y0+side`, cols `x0..x0+side`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct WindowBox {
    pub y0: usize,
    pub x0: usize,
    pub side: usize,
}

impl WindowBox {
    pub fn area(&self) -> usize {
        self.side * self.side
    }

    pub fn contains(&self, row: usize, col: usize) -> bool {
        row >= self.y0 && row < self.y0 + self.side && col >= self.x0 && col < self.x0 + self.side
    }

    /// Normalized center of the box on an `H×W` grid.
    pub fn center(&self, height: usize, width: usize) -> (f64, f64) {
        let half = self.side as f64 / 2.0;
        (
            (self.x0 as f64 + half) / width as f64,
            (self.y0 as f64 + half) / height as f64,
        )
    }
}

fn round_half_up(v: f64) -> f64 {
    (v + 0.5).floor()
}

/// Window of side `round(r·H)` centered at `(cx, cy)`, shifted inward when it
/// would leave the grid. Fails when `r·H < 2`.
pub fn window_box(cx: f64, cy: f64, r: f64, height: usize, width: usize) -> Result<WindowBox> {
    let span = r * height as f64;
    if !(span >= 2.0) {
        return Err(Error::Degenerate(format!("side {span:.3} below 2 on a {height}×{width} grid")));
    }
    let side = (round_half_up(span) as usize).min(height).min(width);
    let place = |c: f64, extent: usize| -> usize {
        let start = round_half_up(c * extent as f64 - side as f64 / 2.0);
        start.clamp(0.0, (extent - side) as f64) as usize
    };
    Ok(WindowBox {
        y0: place(cy, height),
        x0: place(cx, width),
        side,
    })
}

/// A window cut from layer `layer` for prior `index`, flattened row-major
/// into a `side²×C` sequence.
#[derive(Clone, Debug)]
pub struct RoiWindow {
    pub layer: usize,
    pub index: usize,
    pub bbox: WindowBox,
    pub seq: Tensor,
}

/// Cuts the window of prior `index` out of `f: C×H×W`.
pub fn extract_window(
    f: &Tensor,
    cx: f64,
    cy: f64,
    r: f64,
    layer: usize,
    index: usize,
) -> Result<RoiWindow> {
    let (c, h, w) = chw(f)?;
    let bbox = window_box(cx, cy, r, h, w)?;
    let n = bbox.area();
    let mut seq = Tensor::zeros(&[n, c]);
    for ch in 0..c {
        for dy in 0..bbox.side {
            for dx in 0..bbox.side {
                let v = f.data()[(ch * h + bbox.y0 + dy) * w + bbox.x0 + dx];
                seq.data_mut()[(dy * bbox.side + dx) * c + ch] = v;
            }
        }
    }
    Ok(RoiWindow {
        layer,
        index,
        bbox,
        seq,
    })
}

/// Window features on the tape as a `side²×C` sequence.
pub fn window_sequence(tape: &mut Tape, f: Var, bbox: WindowBox) -> Result<Var> {
    let c = tape.shape(f)[0];
    let crop = tape.crop(f, bbox.y0, bbox.x0, bbox.side, bbox.side)?;
    let flat = tape.reshape(crop, &[c, bbox.area()])?;
    tape.transpose(flat)
}

/// Runs the retention block over a `n×C` sequence and folds the result back
/// to `C×side×side`.
pub fn run_window(g: &mut Graph, block: &RetentionBlock, seq: Var, side: usize) -> Result<Var> {
    let shape = g.tape.shape(seq).to_vec();
    if shape.len() != 2 || shape[0] != side * side || shape[0] == 0 {
        return dim_err(format!("window sequence {shape:?} does not match side {side}"));
    }
    let out = block.forward(g, seq)?;
    let t = g.tape.transpose(out)?;
    g.tape.reshape(t, &[shape[1], side, side])
}

/// `ω = softmax(γ·ρ)`.
pub fn fusion_weights(rho: &[f64], gamma_fuse: f64) -> Vec<f64> {
    let m = rho.iter().map(|&r| gamma_fuse * r).fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = rho.iter().map(|&r| (gamma_fuse * r - m).exp()).collect();
    let z: f64 = e.iter().sum();
    e.into_iter().map(|v| v / z).collect()
}

/// Scatters each window output into place. Covered pixels take the
/// ω-weighted mean of the windows covering them; uncovered pixels keep `base`.
pub fn fuse_windows(
    outputs: &[Tensor],
    boxes: &[WindowBox],
    rho: &[f64],
    gamma_fuse: f64,
    base: &Tensor,
) -> Result<Tensor> {
    let mut tape = Tape::new();
    let outs: Vec<Var> = outputs.iter().map(|t| tape.constant(t.clone())).collect();
    let r = tape.constant(Tensor::vector(rho.to_vec()));
    let b = tape.constant(base.clone());
    let y = fuse_windows_var(&mut tape, &outs, boxes, r, gamma_fuse, b)?;
    Ok(tape.value(y).clone())
}

/// Tape form of [`fuse_windows`]; gradients reach the window outputs, the
/// confidences `rho` (through ω) and `base`.
pub fn fuse_windows_var(
    tape: &mut Tape,
    outputs: &[Var],
    boxes: &[WindowBox],
    rho: Var,
    gamma_fuse: f64,
    base: Var,
) -> Result<Var> {
    let k = outputs.len();
    if k == 0 {
        return Ok(base);
    }
    if boxes.len() != k || tape.value(rho).numel() != k {
        return dim_err(format!(
            "fusion: {k} outputs, {} boxes, {} confidences",
            boxes.len(),
            tape.value(rho).numel()
        ));
    }
    let (c, h, w) = chw(tape.value(base))?;
    let logits = tape.scale(rho, gamma_fuse)?;
    let logits = tape.reshape(logits, &[k])?;
    let omega = tape.softmax(logits)?;

    let mut uncovered = Tensor::full(&[h, w], 1.0);
    let mut masks = Vec::with_capacity(k);
    for (&o, b) in outputs.iter().zip(boxes) {
        if tape.shape(o) != [c, b.side, b.side] {
            return dim_err(format!(
                "fusion: window output {:?} does not match box side {} with {c} channels",
                tape.shape(o),
                b.side
            ));
        }
        let mut mask = Tensor::zeros(&[h, w]);
        for row in b.y0..b.y0 + b.side {
            for col in b.x0..b.x0 + b.side {
                mask.data_mut()[row * w + col] = 1.0;
                uncovered.data_mut()[row * w + col] = 0.0;
            }
        }
        masks.push(mask);
    }
    // Per-window weight maps ω_k·m_k / (Σ_j ω_j·m_j + uncovered). Dividing
    // first makes a single-coverage weight exactly 1.
    let unc = tape.constant(uncovered);
    let mut weighted = Vec::with_capacity(k);
    let mut den = unc;
    for (kk, mask) in masks.into_iter().enumerate() {
        let wk = tape.gather(omega, &[kk])?;
        let m = tape.constant(mask);
        let wm = tape.mul(m, wk)?;
        den = tape.add(den, wm)?;
        weighted.push(wm);
    }
    let mut y = tape.mul_spatial(base, unc)?;
    for (kk, (&o, b)) in outputs.iter().zip(boxes).enumerate() {
        let share = tape.div(weighted[kk], den)?;
        let placed = tape.paste(o, b.y0, b.x0, h, w)?;
        let term = tape.mul_spatial(placed, share)?;
        y = tape.add(y, term)?;
    }
    Ok(y)
}

/// One candidate for [`encode_layer`]: its window and confidence index into
/// the `rho` vector.
#[derive(Clone, Copy, Debug)]
pub struct Candidate {
    pub bbox: WindowBox,
    pub slot: usize,
}

/// How the guidance branch is applied in [`encode_layer`].
pub enum Guidance<'a> {
    /// No guidance: `F̃ = F`.
    None,
    /// `F̃ = (1 + λM) ⊙ F`, output `F̂ + F̃`.
    Soft { map: Var, lambda: f64 },
    /// Single locked ROI: output is `F̂` alone. The masked `F̃` is still
    /// built so callers can inspect it.
    Locked { map: Var, lambda: f64, disk: &'a Tensor },
}

/// Encoder layer output `F_out = F̂ + F̃` (or `F̂` when locked), where `F̂` fuses
/// the retention outputs of all candidate windows over `F`.
pub fn encode_layer(
    g: &mut Graph,
    block: &RetentionBlock,
    f: Var,
    candidates: &[Candidate],
    rho: Option<Var>,
    gamma_fuse: f64,
    guidance: Guidance<'_>,
) -> Result<EncodedLayer> {
    let mut outs = Vec::with_capacity(candidates.len());
    for cand in candidates {
        let seq = window_sequence(&mut g.tape, f, cand.bbox)?;
        outs.push(run_window(g, block, seq, cand.bbox.side)?);
    }
    let f_hat = if candidates.is_empty() {
        f
    } else {
        let rho = rho.ok_or_else(|| Error::Contract("candidates given without confidences".into()))?;
        let slots: Vec<usize> = candidates.iter().map(|c| c.slot).collect();
        let r = g.tape.gather(rho, &slots)?;
        let boxes: Vec<WindowBox> = candidates.iter().map(|c| c.bbox).collect();
        fuse_windows_var(&mut g.tape, &outs, &boxes, r, gamma_fuse, f)?
    };
    let (f_tilde, output) = match guidance {
        Guidance::None => (f, g.tape.add(f_hat, f)?),
        Guidance::Soft { map, lambda } => {
            let t = modulate_var(&mut g.tape, f, map, lambda)?;
            (t, g.tape.add(f_hat, t)?)
        }
        Guidance::Locked { map, lambda, disk } => {
            let t = hard_lock_var(&mut g.tape, f, map, disk, lambda)?;
            (t, f_hat)
        }
    };
    Ok(EncodedLayer {
        f_hat,
        f_tilde,
        output,
    })
}

/// Intermediate and final tensors of one encoded layer.
#[derive(Clone, Copy, Debug)]
pub struct EncodedLayer {
    pub f_hat: Var,
    pub f_tilde: Var,
    pub output: Var,
}

/// Convenience: runs [`encode_layer`] with soft guidance on plain tensors.
pub fn encode_layer_values(
    store: &ParamStore,
    block: &RetentionBlock,
    f: &Tensor,
    candidates: &[Candidate],
    rho: &[f64],
    guidance: &Tensor,
    lambda: f64,
    gamma_fuse: f64,
) -> Result<Tensor> {
    let mut g = Graph::bind(store);
    let fv = g.tape.constant(f.clone());
    let rv = g.tape.constant(Tensor::vector(rho.to_vec()));
    let m = g.tape.constant(guidance.clone());
    let out = encode_layer(
        &mut g,
        block,
        fv,
        candidates,
        Some(rv),
        gamma_fuse,
        Guidance::Soft { map: m, lambda },
    )?;
    Ok(g.tape.value(out.output).clone())
}

fn chw(t: &Tensor) -> Result<(usize, usize, usize)> {
    match *t.shape() {
        [c, h, w] => Ok((c, h, w)),
        _ => dim_err(format!("expected C×H×W features, got {:?}", t.shape())),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::retention::gamma_schedule;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn window_geometry() {
        assert_eq!(
            window_box(0.5, 0.5, 1.0, 16, 16).unwrap(),
            WindowBox { y0: 0, x0: 0, side: 16 }
        );
        assert_eq!(
            window_box(0.5, 0.5, 0.25, 32, 32).unwrap(),
            WindowBox { y0: 12, x0: 12, side: 8 }
        );
        let corner = window_box(0.02, 0.97, 0.5, 32, 32).unwrap();
        assert_eq!(corner, WindowBox { y0: 16, x0: 0, side: 16 });
        assert!(matches!(window_box(0.5, 0.5, 0.05, 32, 32), Err(Error::Degenerate(_))));
    }

    #[test]
    fn window_box_is_idempotent() {
        for &(cx, cy, r) in &[(0.1, 0.9, 0.3), (0.5, 0.5, 0.4), (0.99, 0.01, 0.7)] {
            let b = window_box(cx, cy, r, 20, 20).unwrap();
            let (cx2, cy2) = b.center(20, 20);
            assert_eq!(window_box(cx2, cy2, r, 20, 20).unwrap(), b);
        }
    }

    #[test]
    fn extracted_sequence_is_raster_order() {
        let f = Tensor::new(vec![2, 4, 4], (0..32).map(f64::from).collect()).unwrap();
        let w = extract_window(&f, 0.5, 0.5, 0.5, 1, 3).unwrap();
        assert_eq!(w.bbox, WindowBox { y0: 1, x0: 1, side: 2 });
        assert_eq!(w.seq.shape(), &[4, 2]);
        assert_eq!(w.seq.data(), &[5.0, 21.0, 6.0, 22.0, 9.0, 25.0, 10.0, 26.0]);
        let mut tape = Tape::new();
        let fv = tape.constant(f);
        let s = window_sequence(&mut tape, fv, w.bbox).unwrap();
        assert_eq!(tape.value(s), &w.seq);
    }

    #[test]
    fn fusion_weight_examples() {
        let w = fusion_weights(&[0.9, 0.1], 5.0);
        let want = 4.5f64.exp() / (4.5f64.exp() + 0.5f64.exp());
        assert!((w[0] - want).abs() < 1e-12);
        assert!((w[0] - 0.982).abs() < 1e-3);
        assert_eq!(fusion_weights(&[0.3, 0.3], 5.0), vec![0.5, 0.5]);
        assert_eq!(fusion_weights(&[0.4], 5.0), vec![1.0]);
    }

    #[test]
    fn single_window_scatter() {
        let base = Tensor::full(&[1, 4, 4], -1.0);
        let out = Tensor::full(&[1, 2, 2], 3.0);
        let b = WindowBox { y0: 1, x0: 2, side: 2 };
        let y = fuse_windows(&[out], &[b], &[0.7], GAMMA_FUSE, &base).unwrap();
        for row in 0..4 {
            for col in 0..4 {
                let want = if b.contains(row, col) { 3.0 } else { -1.0 };
                assert_eq!(y.at(&[0, row, col]), want);
            }
        }
    }

    #[test]
    fn overlapping_windows_mix_by_weight() {
        let base = Tensor::zeros(&[1, 3, 3]);
        let a = Tensor::full(&[1, 2, 2], 1.0);
        let b = Tensor::full(&[1, 2, 2], 2.0);
        let boxes = [WindowBox { y0: 0, x0: 0, side: 2 }, WindowBox { y0: 1, x0: 1, side: 2 }];
        let y = fuse_windows(&[a, b], &boxes, &[0.9, 0.1], 5.0, &base).unwrap();
        let w = fusion_weights(&[0.9, 0.1], 5.0);
        assert!((y.at(&[0, 1, 1]) - (w[0] + 2.0 * w[1])).abs() < 1e-12);
        assert_eq!(y.at(&[0, 0, 0]), 1.0);
        assert_eq!(y.at(&[0, 2, 2]), 2.0);
        assert_eq!(y.at(&[0, 0, 2]), 0.0);
    }

    #[test]
    fn neutral_layer_passes_features_through() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut store = ParamStore::new();
        let block = RetentionBlock::new(&mut store, "enc", 4, &gamma_schedule(2), &mut rng, true).unwrap();
        let f = Tensor::new(vec![4, 6, 6], (0..144).map(|v| (v as f64 * 0.37).sin()).collect()).unwrap();
        let cands = [Candidate {
            bbox: window_box(0.5, 0.5, 0.5, 6, 6).unwrap(),
            slot: 0,
        }];
        let m = Tensor::full(&[6, 6], 0.3);
        let out = encode_layer_values(&store, &block, &f, &cands, &[1.0], &m, 0.0, GAMMA_FUSE).unwrap();
        let twice = f.map(|v| 2.0 * v);
        assert!(out.max_abs_diff(&twice) < 1e-12);
    }

    #[test]
    fn locked_layer_returns_fused_windows() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let mut store = ParamStore::new();
        let block = RetentionBlock::new(&mut store, "enc", 2, &gamma_schedule(1), &mut rng, false).unwrap();
        let f = Tensor::new(vec![2, 5, 5], (0..50).map(|v| (v as f64 * 0.11).cos()).collect()).unwrap();
        let cand = Candidate {
            bbox: window_box(0.4, 0.5, 0.6, 5, 5).unwrap(),
            slot: 0,
        };
        let mut g = Graph::bind(&store);
        let fv = g.tape.constant(f.clone());
        let rho = g.tape.constant(Tensor::vector(vec![0.8]));
        let m = g.tape.constant(Tensor::full(&[5, 5], 0.2));
        let disk = Tensor::full(&[5, 5], 1.0);
        let enc = encode_layer(
            &mut g,
            &block,
            fv,
            &[cand],
            Some(rho),
            GAMMA_FUSE,
            Guidance::Locked { map: m, lambda: 1.0, disk: &disk },
        )
        .unwrap();
        assert_eq!(enc.output, enc.f_hat);
    }
}
