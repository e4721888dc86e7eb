//! Reconstruction composite and the training losses.
//!
//! Every per-pixel sum is aggregated as a mean over its support (weighted by
//! the validity mask where one applies).

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{check_dims, Error, Result};
use crate::mask::{BinaryMask, InstanceId, InstanceMaskSet};
use crate::raster::{is_valid_depth, Raster, ValidityMask};
use crate::warp::WarpResult;

pub const SSIM_C1: f64 = 0.01 * 0.01;
pub const SSIM_C2: f64 = 0.03 * 0.03;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    pub photometric: f64,
    pub geometric: f64,
    pub smoothness: f64,
    pub height: f64,
    /// SSIM share of the photometric term.
    pub alpha: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            photometric: 2.0,
            geometric: 1.0,
            smoothness: 0.1,
            height: 0.02,
            alpha: 0.85,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("photometric weight", self.photometric),
            ("geometric weight", self.geometric),
            ("smoothness weight", self.smoothness),
            ("height weight", self.height),
        ] {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(Error::InvalidArgument(format!("{name} must be non-negative, got {v}")));
            }
        }
        if !(0.0..=1.0).contains(&self.alpha) {
            return Err(Error::InvalidArgument(format!("alpha must lie in [0, 1], got {}", self.alpha)));
        }
        Ok(())
    }
}

/// Height prior `p_h` in scene units and optional per-instance pixel
/// heights; instances without an entry use their mask's bounding-box height.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct HeightPriors {
    pub p_h: f64,
    pub heights: BTreeMap<InstanceId, f64>,
}

impl HeightPriors {
    pub fn new(p_h: f64) -> Result<Self> {
        if !(p_h > 0.0 && p_h.is_finite()) {
            return Err(Error::InvalidArgument(format!("height prior must be positive, got {p_h}")));
        }
        Ok(Self {
            p_h,
            heights: BTreeMap::new(),
        })
    }

    pub fn with_height(mut self, id: InstanceId, h: f64) -> Self {
        self.heights.insert(id, h);
        self
    }
}

/// A loss value with the amount of support it was averaged over.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossTerm {
    pub value: f64,
    /// Number of pixels (or instances for the height term) contributing.
    pub support: usize,
}

impl LossTerm {
    pub fn empty_support(&self) -> bool {
        self.support == 0
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossReport {
    pub photometric: LossTerm,
    pub geometric: LossTerm,
    pub smoothness: LossTerm,
    pub height: LossTerm,
    pub total: f64,
}

impl LossReport {
    pub fn new(
        photometric: LossTerm,
        geometric: LossTerm,
        smoothness: LossTerm,
        height: LossTerm,
        weights: &LossWeights,
    ) -> Result<Self> {
        let total = total_loss(
            [photometric.value, geometric.value, smoothness.value, height.value],
            weights,
        )?;
        Ok(Self {
            photometric,
            geometric,
            smoothness,
            height,
            total,
        })
    }

    /// Term-wise mean of several reports (supports are summed).
    pub fn mean(reports: &[LossReport], weights: &LossWeights) -> Result<Self> {
        if reports.is_empty() {
            return Err(Error::InvalidArgument("no loss reports to average".into()));
        }
        let n = reports.len() as f64;
        let avg = |f: fn(&LossReport) -> LossTerm| LossTerm {
            value: reports.iter().map(|r| f(r).value).sum::<f64>() / n,
            support: reports.iter().map(|r| f(r).support).sum(),
        };
        Self::new(
            avg(|r| r.photometric),
            avg(|r| r.geometric),
            avg(|r| r.smoothness),
            avg(|r| r.height),
            weights,
        )
    }
}

/// `λ_pe·L_pe + λ_g·L_g + λ_s·L_s + λ_h·L_h`.
pub fn total_loss(terms: [f64; 4], weights: &LossWeights) -> Result<f64> {
    const NAMES: [&str; 4] = ["photometric", "geometric", "smoothness", "height"];
    for (v, name) in terms.iter().zip(NAMES) {
        if !v.is_finite() {
            return Err(Error::NonFinite(name));
        }
    }
    let total = weights.photometric * terms[0]
        + weights.geometric * terms[1]
        + weights.smoothness * terms[2]
        + weights.height * terms[3];
    if !total.is_finite() {
        return Err(Error::NonFinite("total"));
    }
    Ok(total)
}

#[inline]
fn reflect(i: isize, n: usize) -> usize {
    let n = n as isize;
    if n == 1 {
        return 0;
    }
    let r = if i < 0 {
        -i
    } else if i >= n {
        2 * n - 2 - i
    } else {
        i
    };
    r.clamp(0, n - 1) as usize
}

/// Window statistics of one channel at one pixel.
#[derive(Clone, Copy, Debug)]
struct Moments {
    mu_a: f64,
    mu_b: f64,
    var_a: f64,
    var_b: f64,
    cov: f64,
}

impl Moments {
    fn ssim(&self) -> f64 {
        let num = (2.0 * self.mu_a * self.mu_b + SSIM_C1) * (2.0 * self.cov + SSIM_C2);
        let den = (self.mu_a.powi(2) + self.mu_b.powi(2) + SSIM_C1)
            * (self.var_a + self.var_b + SSIM_C2);
        num / den
    }
}

/// Source indices (with multiplicity) of the 3×3 reflect-padded window.
fn window(w: usize, h: usize, x: usize, y: usize) -> [usize; 9] {
    let mut out = [0; 9];
    let mut k = 0;
    for dy in -1..=1isize {
        for dx in -1..=1isize {
            out[k] = reflect(y as isize + dy, h) * w + reflect(x as isize + dx, w);
            k += 1;
        }
    }
    out
}

fn moments(a: &Raster, b: &Raster, c: usize, win: &[usize; 9]) -> Moments {
    let ch = a.channels();
    let (mut sa, mut sb, mut saa, mut sbb, mut sab) = (0.0, 0.0, 0.0, 0.0, 0.0);
    for &i in win {
        let va = a.data()[i * ch + c] as f64;
        let vb = b.data()[i * ch + c] as f64;
        sa += va;
        sb += vb;
        saa += va * va;
        sbb += vb * vb;
        sab += va * vb;
    }
    let n = 9.0;
    let (mu_a, mu_b) = (sa / n, sb / n);
    Moments {
        mu_a,
        mu_b,
        var_a: saa / n - mu_a * mu_a,
        var_b: sbb / n - mu_b * mu_b,
        cov: sab / n - mu_a * mu_b,
    }
}

/// Per-pixel, per-channel SSIM over 3×3 mean-pooled windows with reflect
/// padding.
pub fn ssim(a: &Raster, b: &Raster) -> Result<Raster> {
    a.same_shape(b)?;
    let (w, h, ch) = (a.width(), a.height(), a.channels());
    let mut out = Vec::with_capacity(w * h * ch);
    for y in 0..h {
        for x in 0..w {
            let win = window(w, h, x, y);
            for c in 0..ch {
                out.push(moments(a, b, c, &win).ssim() as f32);
            }
        }
    }
    Raster::new(w, h, ch, out)
}

/// Per-pixel SSIM map in f64 (internal; avoids rounding in the loss).
fn ssim_f64(a: &Raster, b: &Raster) -> Vec<(Moments, f64)> {
    let (w, h, ch) = (a.width(), a.height(), a.channels());
    let mut out = Vec::with_capacity(w * h * ch);
    for y in 0..h {
        for x in 0..w {
            let win = window(w, h, x, y);
            for c in 0..ch {
                let m = moments(a, b, c, &win);
                out.push((m, m.ssim()));
            }
        }
    }
    out
}

/// `clamp((1 − SSIM)/2, 0, 1)`.
#[inline]
fn ssim_dissimilarity(s: f64) -> f64 {
    ((1.0 - s) / 2.0).clamp(0.0, 1.0)
}

/// Validity-weighted mean over pixels and channels of
/// `(1−α)·|tgt − recon| + α·clamp((1 − SSIM)/2)`.
pub fn photometric_loss(tgt: &Raster, recon: &Raster, v: &ValidityMask, alpha: f64) -> Result<LossTerm> {
    tgt.same_shape(recon)?;
    check_dims(tgt.dims(), v.dims())?;
    if !(0.0..=1.0).contains(&alpha) {
        return Err(Error::InvalidArgument(format!("alpha must lie in [0, 1], got {alpha}")));
    }
    let ch = tgt.channels();
    let weight = v.total();
    let support = v.count_positive();
    if weight <= 0.0 {
        return Ok(LossTerm { value: 0.0, support: 0 });
    }
    let ssim_map = if alpha > 0.0 { Some(ssim_f64(tgt, recon)) } else { None };
    let mut sum = 0.0;
    for p in 0..tgt.len_pixels() {
        let vp = v.get(p) as f64;
        if vp == 0.0 {
            continue;
        }
        let mut acc = 0.0;
        for c in 0..ch {
            let i = p * ch + c;
            let l1 = (tgt.data()[i] as f64 - recon.data()[i] as f64).abs();
            let s = ssim_map.as_ref().map_or(0.0, |m| ssim_dissimilarity(m[i].1));
            acc += (1.0 - alpha) * l1 + alpha * s;
        }
        sum += vp * acc;
    }
    Ok(LossTerm {
        value: sum / (weight * ch as f64),
        support,
    })
}

/// Analytic gradient of [`photometric_loss`] with respect to every entry of
/// `recon`. At kinks (`recon == tgt`, or SSIM at the clamp limits) the zero
/// subgradient is used.
pub fn photometric_loss_grad(tgt: &Raster, recon: &Raster, v: &ValidityMask, alpha: f64) -> Result<Raster> {
    tgt.same_shape(recon)?;
    check_dims(tgt.dims(), v.dims())?;
    let (w, h, ch) = (tgt.width(), tgt.height(), tgt.channels());
    let weight = v.total();
    let mut grad = vec![0.0f64; w * h * ch];
    if weight > 0.0 {
        let norm = 1.0 / (weight * ch as f64);
        let ssim_map = ssim_f64(tgt, recon);
        for y in 0..h {
            for x in 0..w {
                let p = y * w + x;
                let vp = v.get(p) as f64;
                if vp == 0.0 {
                    continue;
                }
                let win = window(w, h, x, y);
                for c in 0..ch {
                    let i = p * ch + c;
                    let diff = recon.data()[i] as f64 - tgt.data()[i] as f64;
                    if diff != 0.0 {
                        grad[i] += norm * vp * (1.0 - alpha) * diff.signum();
                    }
                    let (m, s) = ssim_map[i];
                    let d = (1.0 - s) / 2.0;
                    if alpha == 0.0 || d <= 0.0 || d >= 1.0 {
                        continue;
                    }
                    // dL/dS at this pixel, then S through the window moments of recon.
                    let outer = -0.5 * alpha * vp * norm;
                    let a_term = 2.0 * m.mu_a * m.mu_b + SSIM_C1;
                    let b_term = 2.0 * m.cov + SSIM_C2;
                    let e_term = m.mu_a.powi(2) + m.mu_b.powi(2) + SSIM_C1;
                    let f_term = m.var_a + m.var_b + SSIM_C2;
                    let den = e_term * f_term;
                    let ds_dmu_b = 2.0 * m.mu_a * b_term / den - s * 2.0 * m.mu_b / e_term;
                    let ds_dvar_b = -s / f_term;
                    let ds_dcov = 2.0 * a_term / den;
                    for &j in &win {
                        let aj = tgt.data()[j * ch + c] as f64;
                        let bj = recon.data()[j * ch + c] as f64;
                        let ds = (ds_dmu_b + ds_dvar_b * 2.0 * (bj - m.mu_b) + ds_dcov * (aj - m.mu_a)) / 9.0;
                        grad[j * ch + c] += outer * ds;
                    }
                }
            }
        }
    }
    Raster::new(w, h, ch, grad.into_iter().map(|g| g as f32).collect())
}

/// Masked mean of `|d̂ − d| / (d̂ + d)` over pixels where both depths are
/// positive.
pub fn geometric_loss(computed: &Raster, tgt_depth: &Raster, mask: &BinaryMask) -> Result<LossTerm> {
    computed.expect_single_channel("computed depth")?;
    tgt_depth.expect_single_channel("target depth")?;
    check_dims(computed.dims(), tgt_depth.dims())?;
    check_dims(computed.dims(), mask.dims())?;
    let mut sum = 0.0;
    let mut n = 0;
    for i in mask.indices() {
        let (a, b) = (computed.data()[i], tgt_depth.data()[i]);
        if !(is_valid_depth(a) && is_valid_depth(b)) {
            continue;
        }
        let (a, b) = (a as f64, b as f64);
        sum += (a - b).abs() / (a + b);
        n += 1;
    }
    Ok(LossTerm {
        value: if n == 0 { 0.0 } else { sum / n as f64 },
        support: n,
    })
}

/// Edge-aware smoothness of mean-normalised depth: forward differences in u
/// and v, each direction averaged over its own pixel pairs, then added.
pub fn smoothness_loss(depth: &Raster, image: &Raster) -> Result<LossTerm> {
    depth.expect_single_channel("depth")?;
    check_dims(depth.dims(), image.dims())?;
    let Some(mean) = depth.mean_valid_depth() else {
        return Ok(LossTerm::default());
    };
    let (w, h, ch) = (depth.width(), depth.height(), image.channels());
    let d = |i: usize| depth.data()[i];
    let edge = |i: usize, j: usize| {
        let g: f64 = (0..ch)
            .map(|c| (image.data()[i * ch + c] as f64 - image.data()[j * ch + c] as f64).abs())
            .sum::<f64>()
            / ch as f64;
        (-g).exp()
    };
    let term = |i: usize, j: usize| -> Option<f64> {
        if !(is_valid_depth(d(i)) && is_valid_depth(d(j))) {
            return None;
        }
        let grad = (d(j) as f64 - d(i) as f64) / mean;
        Some((grad * edge(i, j)).powi(2))
    };
    let mut total = 0.0;
    let mut support = 0;
    for pairs in [
        (0..h).flat_map(|y| (0..w.saturating_sub(1)).map(move |x| (y * w + x, y * w + x + 1))).collect::<Vec<_>>(),
        (0..h.saturating_sub(1)).flat_map(|y| (0..w).map(move |x| (y * w + x, (y + 1) * w + x))).collect(),
    ] {
        let (mut sum, mut n) = (0.0, 0usize);
        for (i, j) in pairs {
            if let Some(t) = term(i, j) {
                sum += t;
                n += 1;
            }
        }
        if n > 0 {
            total += sum / n as f64;
        }
        support += n;
    }
    Ok(LossTerm { value: total, support })
}

/// `Σ_n (1/D̄)·mean_p |D(p) − f_y·p_h/h_n|` over the pixels of each instance,
/// where `D̄` is the mean valid depth of the frame.
pub fn height_loss(depth: &Raster, masks: &InstanceMaskSet, priors: &HeightPriors, fy: f64) -> Result<LossTerm> {
    depth.expect_single_channel("depth")?;
    check_dims(depth.dims(), masks.dims())?;
    if masks.is_empty() {
        return Ok(LossTerm::default());
    }
    if !(priors.p_h > 0.0) {
        return Err(Error::InvalidArgument(format!("height prior must be positive, got {}", priors.p_h)));
    }
    let Some(mean) = depth.mean_valid_depth() else {
        return Ok(LossTerm::default());
    };
    let mut total = 0.0;
    let mut support = 0;
    for inst in masks.sorted().instances() {
        let h = match priors.heights.get(&inst.id) {
            Some(&h) => h,
            None => match inst.mask.bbox() {
                Some((_, y0, _, y1)) => (y1 - y0 + 1) as f64,
                None => continue,
            },
        };
        if !(h > 0.0 && h.is_finite()) {
            return Err(Error::InvalidArgument(format!("instance {}: pixel height must be positive, got {h}", inst.id)));
        }
        let target = fy * priors.p_h / h;
        let (mut sum, mut n) = (0.0, 0usize);
        for i in inst.mask.indices() {
            let d = depth.data()[i];
            if is_valid_depth(d) {
                sum += (d as f64 - target).abs();
                n += 1;
            }
        }
        if n > 0 {
            total += sum / n as f64 / mean;
            support += 1;
        }
    }
    Ok(LossTerm { value: total, support })
}

/// One warped object for [`composite_reconstruction`]: its reconstruction
/// (whose `depth` orders overlapping objects) and the target pixels it claims.
#[derive(Clone, Debug)]
pub struct ObjectWarp {
    pub id: InstanceId,
    pub warp: WarpResult,
    pub claimed: BinaryMask,
}

#[derive(Clone, Debug)]
pub struct Composite {
    pub warp: WarpResult,
    /// Object that supplied each pixel, `None` for background.
    pub owner: Vec<Option<InstanceId>>,
}

/// Background reconstruction with object reconstructions pasted over the
/// pixels they claim. Overlapping objects are resolved by smaller depth
/// (ties to the lower id); the background never overwrites an object.
pub fn composite_reconstruction(bg: &WarpResult, objects: &[ObjectWarp]) -> Result<Composite> {
    let (w, h) = bg.image.dims();
    let ch = bg.image.channels();
    let mut owner: Vec<Option<usize>> = vec![None; w * h];
    for (k, obj) in objects.iter().enumerate() {
        obj.warp.image.same_shape(&bg.image)?;
        check_dims((w, h), obj.warp.depth.dims())?;
        check_dims((w, h), obj.claimed.dims())?;
        check_dims((w, h), obj.warp.validity.dims())?;
        for p in obj.claimed.indices() {
            let better = match owner[p] {
                None => true,
                Some(j) => {
                    let (zk, zj) = (obj.warp.depth.data()[p], objects[j].warp.depth.data()[p]);
                    zk < zj || (zk == zj && obj.id < objects[j].id)
                }
            };
            if better {
                owner[p] = Some(k);
            }
        }
    }
    let mut image = bg.image.data().to_vec();
    let mut validity = bg.validity.weights().to_vec();
    let mut depth = bg.depth.data().to_vec();
    for (p, o) in owner.iter().enumerate() {
        if let Some(k) = *o {
            let src = &objects[k].warp;
            image[p * ch..(p + 1) * ch].copy_from_slice(src.image.pixel(p));
            validity[p] = src.validity.get(p);
            depth[p] = src.depth.data()[p];
        }
    }
    Ok(Composite {
        warp: WarpResult {
            image: Raster::new(w, h, ch, image)?,
            validity: ValidityMask::new(w, h, validity)?,
            depth: Raster::new(w, h, 1, depth)?,
        },
        owner: owner.into_iter().map(|o| o.map(|k| objects[k].id)).collect(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn gray(w: usize, h: usize, v: &[f32]) -> Raster {
        Raster::new(w, h, 1, v.to_vec()).unwrap()
    }

    #[test]
    fn ssim_self_is_one() {
        let a = Raster::from_fn(6, 5, |x, y| (x * 7 + y * 3) as f32 / 50.0);
        let s = ssim(&a, &a).unwrap();
        assert!(s.data().iter().all(|&v| (v - 1.0).abs() < 1e-6));
    }

    #[test]
    fn ssim_constant_images() {
        let a = Raster::filled(4, 4, 1, 0.2);
        let b = Raster::filled(4, 4, 1, 0.8);
        let s = ssim(&a, &b).unwrap();
        let (ma, mb) = (0.2f64, 0.8f64);
        let expect = (2.0 * ma * mb + SSIM_C1) * SSIM_C2 / ((ma * ma + mb * mb + SSIM_C1) * SSIM_C2);
        for &v in s.data() {
            assert!((v as f64 - expect).abs() < 1e-6);
        }
    }

    #[test]
    fn ssim_anticorrelated_is_negative_and_clamped() {
        // Zero-mean checkerboard structure around 0.5 and its negative.
        let a = Raster::from_fn(7, 7, |x, y| if (x + y) % 2 == 0 { 0.9 } else { 0.1 });
        let b = Raster::from_fn(7, 7, |x, y| 1.0 - a.get(x, y, 0));
        let s = ssim(&a, &b).unwrap();
        assert!(s.get(3, 3, 0) < 0.0);
        let v = ValidityMask::filled(7, 7, 1.0);
        let l = photometric_loss(&a, &b, &v, 1.0).unwrap();
        assert!(l.value <= 1.0 && l.value > 0.5);
    }

    #[test]
    fn photometric_examples() {
        let v = ValidityMask::filled(2, 2, 1.0);
        let t = gray(2, 2, &[0.0; 4]);
        let r = gray(2, 2, &[0.1; 4]);
        assert!((photometric_loss(&t, &r, &v, 0.0).unwrap().value - 0.1).abs() < 1e-6);
        assert_eq!(photometric_loss(&t, &t, &v, 0.85).unwrap().value, 0.0);

        let (a, b) = (0.2f64, 0.7f64);
        let t = Raster::filled(5, 5, 3, a as f32);
        let r = Raster::filled(5, 5, 3, b as f32);
        let s = (2.0 * a * b + SSIM_C1) / (a * a + b * b + SSIM_C1);
        let expect = 0.15 * 0.5 + 0.85 * (1.0 - s) / 2.0;
        let got = photometric_loss(&t, &r, &ValidityMask::filled(5, 5, 1.0), 0.85).unwrap();
        assert!((got.value - expect).abs() < 1e-6, "{} vs {expect}", got.value);
    }

    #[test]
    fn photometric_empty_support() {
        let t = gray(2, 2, &[0.0; 4]);
        let r = gray(2, 2, &[1.0; 4]);
        let l = photometric_loss(&t, &r, &ValidityMask::filled(2, 2, 0.0), 0.85).unwrap();
        assert_eq!(l.value, 0.0);
        assert!(l.empty_support());
    }

    #[test]
    fn photometric_gradient_matches_fd() {
        let t = Raster::from_fn_rgb(6, 5, |x, y| {
            let (x, y) = (x as f32, y as f32);
            [0.3 + 0.05 * x, 0.6 - 0.04 * y, 0.5 + 0.1 * (x * y).sin()]
        });
        let r = Raster::from_fn_rgb(6, 5, |x, y| {
            let (x, y) = (x as f32, y as f32);
            [0.35 + 0.03 * x + 0.02 * y, 0.55 - 0.05 * y + 0.01 * x, 0.45 + 0.12 * (0.7 * x + y).cos()]
        });
        let v = ValidityMask::new(6, 5, (0..30).map(|i| if i % 7 == 3 { 0.0 } else { 0.5 + (i % 3) as f32 * 0.25 }).collect())
            .unwrap();
        let g = photometric_loss_grad(&t, &r, &v, 0.85).unwrap();
        let h = 1e-4f32;
        for i in (0..r.data().len()).step_by(5) {
            let mut rp = r.clone();
            rp.data_mut()[i] += h;
            let mut rm = r.clone();
            rm.data_mut()[i] -= h;
            // Divide by the step actually representable in f32.
            let step = rp.data()[i] as f64 - rm.data()[i] as f64;
            let fd = (photometric_loss(&t, &rp, &v, 0.85).unwrap().value
                - photometric_loss(&t, &rm, &v, 0.85).unwrap().value)
                / step;
            let an = g.data()[i] as f64;
            assert!((fd - an).abs() <= 1e-4 * an.abs().max(1e-3), "entry {i}: fd {fd} analytic {an}");
        }
    }

    #[test]
    fn geometric_examples() {
        let d = gray(3, 1, &[1.0, 2.0, 3.0]);
        let m = BinaryMask::ones(3, 1);
        assert_eq!(geometric_loss(&d, &d, &m).unwrap().value, 0.0);
        let a = gray(1, 1, &[3.0]);
        let b = gray(1, 1, &[1.0]);
        assert!((geometric_loss(&a, &b, &BinaryMask::ones(1, 1)).unwrap().value - 0.5).abs() < 1e-12);
        let l = geometric_loss(&a, &b, &BinaryMask::zeros(1, 1)).unwrap();
        assert_eq!(l.value, 0.0);
        assert!(l.empty_support());
        // Non-positive depth is excluded.
        let a = gray(2, 1, &[3.0, -1.0]);
        let b = gray(2, 1, &[1.0, 2.0]);
        let l = geometric_loss(&a, &b, &BinaryMask::ones(2, 1)).unwrap();
        assert_eq!(l.support, 1);
    }

    #[test]
    fn smoothness_examples() {
        let img = Raster::filled(4, 1, 1, 0.5);
        assert_eq!(smoothness_loss(&Raster::filled(4, 1, 1, 3.0), &img).unwrap().value, 0.0);
        let ramp = gray(4, 1, &[1.0, 2.0, 3.0, 4.0]);
        // Normalised slope 1/2.5 = 0.4 on every pair.
        assert!((smoothness_loss(&ramp, &img).unwrap().value - 0.16).abs() < 1e-6);
        // A step collocated with an intensity edge of 10.
        let step = gray(4, 1, &[1.0, 1.0, 3.0, 3.0]);
        let edge = gray(4, 1, &[0.0, 0.0, 10.0, 10.0]);
        let l = smoothness_loss(&step, &edge).unwrap().value;
        let expect = (1.0f64 * (-10.0f64).exp()).powi(2) / 3.0;
        assert!((l - expect).abs() < 1e-12);
        assert!(l < 1e-9);
    }

    #[test]
    fn height_examples() {
        let depth = Raster::filled(4, 4, 1, 10.0);
        let masks = InstanceMaskSet::new(4, 4, vec![(1, BinaryMask::rect(4, 4, 0, 0, 2, 2))]).unwrap();
        // f_y·p_h/h = 8 with f_y = 16, p_h = 1, h = 2 (bounding-box height).
        let priors = HeightPriors::new(1.0).unwrap();
        assert!((height_loss(&depth, &masks, &priors, 16.0).unwrap().value - 0.2).abs() < 1e-12);
        // Exact prior gives zero.
        assert_eq!(height_loss(&depth, &masks, &priors, 20.0).unwrap().value, 0.0);
        assert_eq!(height_loss(&depth, &InstanceMaskSet::empty(4, 4), &priors, 16.0).unwrap().value, 0.0);
        let bad = priors.with_height(1, 0.0);
        assert!(height_loss(&depth, &masks, &bad, 16.0).is_err());
    }

    #[test]
    fn total_examples() {
        let w = LossWeights::default();
        assert_eq!(total_loss([0.0; 4], &w).unwrap(), 0.0);
        assert!((total_loss([1.0; 4], &w).unwrap() - 3.12).abs() < 1e-12);
        let three = LossWeights { height: 0.0, ..w };
        assert_eq!(total_loss([0.3, 0.2, 0.1, 7.0], &three).unwrap(), 2.0 * 0.3 + 0.2 + 0.1 * 0.1);
        assert!(matches!(total_loss([f64::NAN, 0.0, 0.0, 0.0], &w), Err(Error::NonFinite(_))));
    }

    fn flat(w: usize, v: f32, z: f32) -> WarpResult {
        WarpResult {
            image: Raster::filled(w, 1, 1, v),
            validity: ValidityMask::filled(w, 1, 1.0),
            depth: Raster::filled(w, 1, 1, z),
        }
    }

    #[test]
    fn composite_examples() {
        let bg = flat(8, 0.1, 10.0);
        let c = composite_reconstruction(&bg, &[]).unwrap();
        assert_eq!(c.warp.image, bg.image);
        assert!(c.owner.iter().all(Option::is_none));

        let full = ObjectWarp { id: 4, warp: flat(8, 0.7, 3.0), claimed: BinaryMask::ones(8, 1) };
        let c = composite_reconstruction(&bg, std::slice::from_ref(&full)).unwrap();
        assert_eq!(c.warp.image, full.warp.image);

        // Objects on [1,5) and [2,7) overlap on 2,3,4; the nearer (id 2) wins there.
        let a = ObjectWarp { id: 1, warp: flat(8, 0.5, 6.0), claimed: BinaryMask::rect(8, 1, 1, 0, 4, 1) };
        let b = ObjectWarp { id: 2, warp: flat(8, 0.9, 4.0), claimed: BinaryMask::rect(8, 1, 2, 0, 5, 1) };
        let c = composite_reconstruction(&bg, &[a, b]).unwrap();
        let expect = [0.1, 0.5, 0.9, 0.9, 0.9, 0.9, 0.9, 0.1];
        assert_eq!(c.warp.image.data(), &expect);
        assert_eq!(c.owner[1], Some(1));
        assert_eq!(c.owner[3], Some(2));
    }

    proptest! {
        #[test]
        fn photometric_nonneg_and_zero_iff_equal(
            t in prop::collection::vec(0.0f32..1.0, 16),
            r in prop::collection::vec(0.0f32..1.0, 16),
            alpha in 0.0f64..0.99,
        ) {
            let t = gray(4, 4, &t);
            let r = gray(4, 4, &r);
            let v = ValidityMask::filled(4, 4, 1.0);
            let l = photometric_loss(&t, &r, &v, alpha).unwrap().value;
            prop_assert!(l >= 0.0);
            prop_assert_eq!(photometric_loss(&t, &t, &v, alpha).unwrap().value, 0.0);
            if t != r {
                prop_assert!(l > 0.0);
            }
        }

        #[test]
        fn geometric_ratio_bounded(a in 0.01f32..100.0, b in 0.01f32..100.0) {
            let l = geometric_loss(&gray(1, 1, &[a]), &gray(1, 1, &[b]), &BinaryMask::ones(1, 1)).unwrap();
            prop_assert!((0.0..1.0).contains(&l.value));
        }

        #[test]
        fn height_order_invariant(seed in 0u32..1000) {
            let depth = Raster::from_fn(6, 6, |x, y| 2.0 + ((x * 5 + y * 3 + seed as usize) % 7) as f32);
            let a = BinaryMask::rect(6, 6, 0, 0, 2, 3);
            let b = BinaryMask::rect(6, 6, 3, 2, 3, 4);
            let p = HeightPriors::new(1.5).unwrap();
            let s1 = InstanceMaskSet::new(6, 6, vec![(1, a.clone()), (2, b.clone())]).unwrap();
            let s2 = InstanceMaskSet::new(6, 6, vec![(2, b), (1, a)]).unwrap();
            prop_assert_eq!(
                height_loss(&depth, &s1, &p, 50.0).unwrap(),
                height_loss(&depth, &s2, &p, 50.0).unwrap()
            );
        }
    }
}
