//! ROI guidance maps: circular Gaussian templates with a decaying fringe,
//! confidence-weighted aggregation and multiplicative feature modulation.

use crate::error::{dim_err, Error, Result};
use crate::numerics::{Tape, Tensor, Var};

/// Default ε added to the candidate count in [`aggregate_guidance`].
pub const GUIDANCE_EPS: f64 = 1e-6;

/// One ROI placed on a layer grid. Centers are normalized `(x, y)` in `[0,1]`;
/// `sigma`, `radius` and `tau` are in layer pixels.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct RoiInstance {
    pub cx: f64,
    pub cy: f64,
    pub r: f64,
    pub rho: f64,
    pub sigma: f64,
    pub radius: f64,
    pub tau: f64,
}

impl RoiInstance {
    /// ROI on a layer of height `height` with `R = r·H/2`, `σ = R/2`, `τ = R/4`.
    pub fn on_layer(cx: f64, cy: f64, r: f64, rho: f64, height: usize) -> Self {
        Self::with_fractions(cx, cy, r, rho, height, 0.5, 0.25)
    }

    /// Like [`RoiInstance::on_layer`] with `σ = sigma_frac·R` and `τ = tau_frac·R`.
    pub fn with_fractions(
        cx: f64,
        cy: f64,
        r: f64,
        rho: f64,
        height: usize,
        sigma_frac: f64,
        tau_frac: f64,
    ) -> Self {
        let radius = r * height as f64 / 2.0;
        RoiInstance {
            cx,
            cy,
            r,
            rho,
            sigma: sigma_frac * radius,
            radius,
            tau: tau_frac * radius,
        }
    }

    /// The same ROI with confidence `rho`.
    pub fn with_rho(self, rho: f64) -> Self {
        RoiInstance { rho, ..self }
    }

    /// Center in layer pixel coordinates (pixel `u` spans `[u, u+1)`).
    pub fn center_px(&self, height: usize, width: usize) -> (f64, f64) {
        (self.cx * width as f64, self.cy * height as f64)
    }

    /// Distance from the center of pixel `(row, col)` to the ROI center.
    pub fn distance(&self, row: usize, col: usize, height: usize, width: usize) -> f64 {
        let (x, y) = self.center_px(height, width);
        let (u, v) = (col as f64 + 0.5, row as f64 + 0.5);
        ((u - x).powi(2) + (v - y).powi(2)).sqrt()
    }

    /// Decayed template value at radial distance `d`.
    pub fn profile(&self, d: f64) -> f64 {
        let g = self.rho * (-d * d / (2.0 * self.sigma * self.sigma)).exp();
        g * decay_factor(d, self.radius, self.tau)
    }

    fn check(&self) -> Result<()> {
        if !(self.sigma > 0.0) {
            return Err(Error::Domain(format!("template sigma {} must be positive", self.sigma)));
        }
        Ok(())
    }
}

fn decay_factor(d: f64, radius: f64, tau: f64) -> f64 {
    if d <= radius {
        1.0
    } else {
        (-(d - radius).powi(2) / (2.0 * tau * tau)).exp()
    }
}

/// A non-negative `H×W` guidance map for encoder layer `layer`.
/// `empty` marks the map produced from an empty candidate list.
#[derive(Clone, Debug, PartialEq)]
pub struct GuidanceMap {
    pub values: Tensor,
    pub layer: usize,
    pub empty: bool,
}

/// `G(u,v) = ρ·exp(-d²/(2σ²))` over an `H×W` grid.
pub fn gaussian_template(roi: &RoiInstance, height: usize, width: usize) -> Result<Tensor> {
    roi.check()?;
    let mut t = Tensor::zeros(&[height, width]);
    let s2 = 2.0 * roi.sigma * roi.sigma;
    for row in 0..height {
        for col in 0..width {
            let d = roi.distance(row, col, height, width);
            t.data_mut()[row * width + col] = roi.rho * (-d * d / s2).exp();
        }
    }
    Ok(t)
}

/// Leaves `G` untouched within `R` of the center and multiplies the rest by
/// `exp(-(d-R)²/(2τ²))`.
pub fn apply_spatial_decay(g: &Tensor, roi: &RoiInstance, tau: f64) -> Result<Tensor> {
    if !(tau > 0.0) {
        return Err(Error::Domain(format!("decay rate {tau} must be positive")));
    }
    let (height, width) = plane_dims(g)?;
    let mut out = g.clone();
    for row in 0..height {
        for col in 0..width {
            let d = roi.distance(row, col, height, width);
            if d > roi.radius {
                out.data_mut()[row * width + col] *= decay_factor(d, roi.radius, tau);
            }
        }
    }
    Ok(out)
}

/// Decayed template `G̃` for one ROI, using its own `τ`.
pub fn decayed_template(roi: &RoiInstance, height: usize, width: usize) -> Result<Tensor> {
    apply_spatial_decay(&gaussian_template(roi, height, width)?, roi, roi.tau)
}

/// `M = Σ G̃ᵢ / (K + ε)`. An empty list gives a zero map flagged `empty`.
pub fn aggregate_guidance(
    rois: &[RoiInstance],
    height: usize,
    width: usize,
    eps: f64,
    layer: usize,
) -> Result<GuidanceMap> {
    let mut values = Tensor::zeros(&[height, width]);
    if rois.is_empty() {
        return Ok(GuidanceMap {
            values,
            layer,
            empty: true,
        });
    }
    for roi in rois {
        let g = decayed_template(roi, height, width)?;
        for (m, v) in values.data_mut().iter_mut().zip(g.data()) {
            *m += v;
        }
    }
    let denom = rois.len() as f64 + eps;
    Ok(GuidanceMap {
        values: values.map(|v| v / denom),
        layer,
        empty: false,
    })
}

/// `(1 + λM) ⊙ F` for `F: C×H×W`.
pub fn modulate(f: &Tensor, m: &GuidanceMap, lambda: f64) -> Result<Tensor> {
    let (c, h, w) = feature_dims(f)?;
    check_map(&m.values, h, w)?;
    let plane = h * w;
    let mut out = f.clone();
    for ch in 0..c {
        for (v, &g) in out.data_mut()[ch * plane..(ch + 1) * plane]
            .iter_mut()
            .zip(m.values.data())
        {
            *v *= 1.0 + lambda * g;
        }
    }
    Ok(out)
}

/// Binary disk `d ≤ R` around the ROI center.
pub fn disk_mask(roi: &RoiInstance, height: usize, width: usize) -> Tensor {
    let mut t = Tensor::zeros(&[height, width]);
    for row in 0..height {
        for col in 0..width {
            if roi.distance(row, col, height, width) <= roi.radius {
                t.data_mut()[row * width + col] = 1.0;
            }
        }
    }
    t
}

/// [`modulate`] inside the locked ROI's disk, zero outside. `locked` is the
/// winning ROI when the lock test passed, `None` otherwise.
pub fn hard_lock_modulate(
    f: &Tensor,
    m: &GuidanceMap,
    locked: Option<&RoiInstance>,
    lambda: f64,
) -> Result<Tensor> {
    let roi = locked.ok_or_else(|| Error::Contract("hard lock requested without a locked ROI".into()))?;
    let mut out = modulate(f, m, lambda)?;
    let (c, h, w) = feature_dims(f)?;
    let disk = disk_mask(roi, h, w);
    let plane = h * w;
    for ch in 0..c {
        for (v, &k) in out.data_mut()[ch * plane..(ch + 1) * plane]
            .iter_mut()
            .zip(disk.data())
        {
            if k == 0.0 {
                *v = 0.0;
            }
        }
    }
    Ok(out)
}

/// `F̂` when locked, `F̂ + F̃` otherwise.
pub fn fuse_outputs(f_hat: &Tensor, f_tilde: &Tensor, locked: bool) -> Result<Tensor> {
    if f_hat.shape() != f_tilde.shape() {
        return dim_err(format!(
            "fuse: {:?} vs {:?}",
            f_hat.shape(),
            f_tilde.shape()
        ));
    }
    if locked {
        return Ok(f_hat.clone());
    }
    let data = f_hat.data().iter().zip(f_tilde.data()).map(|(a, b)| a + b).collect();
    Tensor::new(f_hat.shape().to_vec(), data)
}

/// Guidance on the tape: `rho` holds the `K` confidences and `units[k]` the
/// decayed template of ROI `k` at unit confidence. Gradients reach `rho`.
pub fn guidance_var(tape: &mut Tape, rho: Var, units: &[Tensor], eps: f64) -> Result<Var> {
    let k = units.len();
    if k == 0 || tape.value(rho).numel() != k {
        return dim_err(format!(
            "guidance: {} confidences for {k} templates",
            tape.value(rho).numel()
        ));
    }
    let (h, w) = plane_dims(&units[0])?;
    let mut stacked = Vec::with_capacity(k * h * w);
    for u in units {
        if u.shape() != [h, w] {
            return dim_err("guidance: templates differ in shape");
        }
        stacked.extend_from_slice(u.data());
    }
    let t = tape.constant(Tensor::new(vec![k, h * w], stacked)?);
    let row = tape.reshape(rho, &[1, k])?;
    let m = tape.matmul(row, t)?;
    let m = tape.scale(m, 1.0 / (k as f64 + eps))?;
    tape.reshape(m, &[h, w])
}

/// `F + λ·(F ⊙ M)` on the tape.
pub fn modulate_var(tape: &mut Tape, f: Var, m: Var, lambda: f64) -> Result<Var> {
    let fm = tape.mul_spatial(f, m)?;
    let fm = tape.scale(fm, lambda)?;
    tape.add(f, fm)
}

/// Hard-locked modulation on the tape with a precomputed disk mask.
pub fn hard_lock_var(tape: &mut Tape, f: Var, m: Var, disk: &Tensor, lambda: f64) -> Result<Var> {
    let modulated = modulate_var(tape, f, m, lambda)?;
    let d = tape.constant(disk.clone());
    tape.mul_spatial(modulated, d)
}

fn plane_dims(t: &Tensor) -> Result<(usize, usize)> {
    match *t.shape() {
        [h, w] => Ok((h, w)),
        _ => dim_err(format!("expected an H×W map, got {:?}", t.shape())),
    }
}

fn feature_dims(t: &Tensor) -> Result<(usize, usize, usize)> {
    match *t.shape() {
        [c, h, w] => Ok((c, h, w)),
        _ => dim_err(format!("expected C×H×W features, got {:?}", t.shape())),
    }
}

fn check_map(m: &Tensor, h: usize, w: usize) -> Result<()> {
    if m.shape() != [h, w] {
        return dim_err(format!("guidance {:?} does not match {h}×{w}", m.shape()));
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn roi(cx: f64, cy: f64, r: f64, rho: f64, h: usize) -> RoiInstance {
        RoiInstance::on_layer(cx, cy, r, rho, h)
    }

    #[test]
    fn template_values() {
        // center lands on a pixel center: 16 px grid, c = 8.5/16
        let c = 8.5 / 16.0;
        let t = roi(c, c, 0.5, 0.8, 16);
        let g = gaussian_template(&t, 16, 16).unwrap();
        assert!((g.at(&[8, 8]) - 0.8).abs() < 1e-15);
        // σ = R/2 = 2 px, two pixels right of center
        assert!((g.at(&[8, 10]) - 0.8 * (-0.5f64).exp()).abs() < 1e-12);
        let z = gaussian_template(&t.with_rho(0.0), 16, 16).unwrap();
        assert!(z.data().iter().all(|&v| v == 0.0));
        let bad = RoiInstance { sigma: 0.0, ..t };
        assert!(matches!(gaussian_template(&bad, 4, 4), Err(Error::Domain(_))));
    }

    #[test]
    fn decay_profile() {
        let t = roi(0.5, 0.5, 0.5, 1.0, 32);
        let base = |d: f64| (-d * d / (2.0 * t.sigma * t.sigma)).exp();
        assert_eq!(t.profile(t.radius), base(t.radius));
        let d = t.radius + t.tau;
        assert!((t.profile(d) / base(d) - (-0.5f64).exp()).abs() < 1e-12);
        assert!(matches!(apply_spatial_decay(&Tensor::zeros(&[2, 2]), &t, 0.0), Err(Error::Domain(_))));
    }

    #[test]
    fn decay_keeps_interior_bitwise() {
        let t = roi(0.4, 0.6, 0.5, 0.9, 20);
        let g = gaussian_template(&t, 20, 20).unwrap();
        let d = apply_spatial_decay(&g, &t, t.tau).unwrap();
        for row in 0..20 {
            for col in 0..20 {
                let i = row * 20 + col;
                if t.distance(row, col, 20, 20) <= t.radius {
                    assert_eq!(d.data()[i].to_bits(), g.data()[i].to_bits());
                } else {
                    assert!(d.data()[i] <= g.data()[i]);
                }
            }
        }
    }

    #[test]
    fn aggregation_denominator() {
        // two pixel-aligned ROIs at the same point: 0.8 and 0.4 at the center
        let c = 4.5 / 8.0;
        let rois = [roi(c, c, 0.5, 0.8, 8), roi(c, c, 0.5, 0.4, 8)];
        let m = aggregate_guidance(&rois, 8, 8, 1e-6, 0).unwrap();
        assert!((m.values.at(&[4, 4]) - 1.2 / (2.0 + 1e-6)).abs() < 1e-15);
        let single = aggregate_guidance(&rois[..1], 8, 8, 0.0, 0).unwrap();
        assert_eq!(single.values, decayed_template(&rois[0], 8, 8).unwrap());
        let empty = aggregate_guidance(&[], 8, 8, 1e-6, 0).unwrap();
        assert!(empty.empty && empty.values.sum() == 0.0);
    }

    #[test]
    fn modulation_examples() {
        let f = Tensor::full(&[2, 1, 1], 2.0);
        let m = GuidanceMap {
            values: Tensor::full(&[1, 1], 0.6),
            layer: 0,
            empty: false,
        };
        let out = modulate(&f, &m, 0.5).unwrap();
        assert!(out.data().iter().all(|&v| (v - 2.6).abs() < 1e-15));
        assert_eq!(modulate(&f, &m, 0.0).unwrap(), f);
        let wrong = GuidanceMap {
            values: Tensor::zeros(&[2, 2]),
            ..m
        };
        assert!(matches!(modulate(&f, &wrong, 1.0), Err(Error::Dimension(_))));
    }

    #[test]
    fn hard_lock_zeroes_outside() {
        let n = 64;
        let t = roi(0.5, 0.5, 0.5, 1.0, n);
        let f = Tensor::full(&[1, n, n], 1.0);
        let m = aggregate_guidance(&[t], n, n, GUIDANCE_EPS, 0).unwrap();
        let out = hard_lock_modulate(&f, &m, Some(&t), 1.0).unwrap();
        let centre = out.at(&[0, n / 2, n / 2]);
        assert!((centre - (1.0 + m.values.at(&[n / 2, n / 2]))).abs() < 1e-15);
        assert_eq!(out.at(&[0, 0, 0]), 0.0);
        let zeroed = out.data().iter().filter(|&&v| v == 0.0).count() as f64 / (n * n) as f64;
        let expect = 1.0 - std::f64::consts::PI * t.radius * t.radius / (n * n) as f64;
        assert!((zeroed - expect).abs() <= 2.0 / n as f64);
        assert!(matches!(hard_lock_modulate(&f, &m, None, 1.0), Err(Error::Contract(_))));
    }

    #[test]
    fn fuse_rules() {
        let a = Tensor::full(&[1, 2, 2], 1.5);
        let b = Tensor::full(&[1, 2, 2], -0.25);
        assert_eq!(fuse_outputs(&a, &b, true).unwrap(), a);
        assert!(fuse_outputs(&a, &b, false).unwrap().data().iter().all(|&v| v == 1.25));
        assert_eq!(fuse_outputs(&a, &Tensor::zeros(&[1, 2, 2]), false).unwrap(), a);
        assert!(fuse_outputs(&a, &Tensor::zeros(&[2, 2]), false).is_err());
    }

    #[test]
    fn tape_guidance_matches_direct() {
        let rois = [roi(0.3, 0.4, 0.5, 0.7, 12), roi(0.6, 0.6, 0.4, 0.2, 12)];
        let units: Vec<Tensor> = rois
            .iter()
            .map(|r| decayed_template(&r.with_rho(1.0), 12, 12).unwrap())
            .collect();
        let mut tape = Tape::new();
        let rho = tape.leaf(Tensor::vector(vec![0.7, 0.2]));
        let m = guidance_var(&mut tape, rho, &units, GUIDANCE_EPS).unwrap();
        let direct = aggregate_guidance(&rois, 12, 12, GUIDANCE_EPS, 0).unwrap();
        assert!(tape.value(m).max_abs_diff(&direct.values) < 1e-14);
    }
}
