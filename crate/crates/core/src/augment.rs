//! Invertible augmentations: flip -> resize -> crop, then photometric jitter.
//!
//! A [`GeometricRecord`] fully determines the geometric part, so predictions
//! made on an augmented view can be warped back onto the canonical (original)
//! pixel grid together with a mask of the pixels the view actually saw.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::resample::{AxisMap, AxisTap};
use crate::nn::{ResampleMap, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Interp {
    /// Copies source pixels; exact on round trips and safe for masks.
    Nearest,
    Bilinear,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Toggle<T> {
    pub enabled: bool,
    pub range: T,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AugConfig {
    /// `range` is the flip probability.
    pub hflip: Toggle<f64>,
    /// Scale factor range.
    pub resize: Toggle<[f64; 2]>,
    /// `range` is the kept fraction of the resized area.
    pub crop: Toggle<f64>,
    pub brightness: Toggle<[f64; 2]>,
    pub contrast: Toggle<[f64; 2]>,
    pub saturation: Toggle<[f64; 2]>,
    /// Hue rotation in turns.
    pub hue: Toggle<[f64; 2]>,
}

impl Default for AugConfig {
    fn default() -> Self {
        Self {
            hflip: Toggle { enabled: true, range: 0.5 },
            resize: Toggle { enabled: true, range: [0.8, 1.25] },
            crop: Toggle { enabled: true, range: 0.875 },
            brightness: Toggle { enabled: true, range: [-0.125, 0.125] },
            contrast: Toggle { enabled: true, range: [0.75, 1.25] },
            saturation: Toggle { enabled: true, range: [0.75, 1.25] },
            hue: Toggle { enabled: true, range: [-0.05, 0.05] },
        }
    }
}

/// Names of the seven toggles, in sampling order.
pub const AUG_KINDS: [&str; 7] = ["hflip", "resize", "crop", "brightness", "contrast", "saturation", "hue"];

impl AugConfig {
    /// Every augmentation disabled.
    pub fn none() -> Self {
        let mut c = Self::default();
        for k in AUG_KINDS {
            c.set_enabled(k, false).expect("known kind");
        }
        c
    }

    pub fn set_enabled(&mut self, kind: &str, enabled: bool) -> Result<()> {
        match kind {
            "hflip" => self.hflip.enabled = enabled,
            "resize" => self.resize.enabled = enabled,
            "crop" => self.crop.enabled = enabled,
            "brightness" => self.brightness.enabled = enabled,
            "contrast" => self.contrast.enabled = enabled,
            "saturation" => self.saturation.enabled = enabled,
            "hue" => self.hue.enabled = enabled,
            other => {
                return Err(Error::validation("aug", format!("unknown augmentation `{other}`; valid: {}", AUG_KINDS.join(", "))))
            }
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        let ordered = |name: &str, r: [f64; 2]| {
            if r[0].is_finite() && r[1].is_finite() && r[0] <= r[1] {
                Ok(())
            } else {
                Err(Error::validation(format!("aug.{name}.range"), format!("[{}, {}] is empty or inverted", r[0], r[1])))
            }
        };
        if !(0.0..=1.0).contains(&self.hflip.range) {
            return Err(Error::validation("aug.hflip.range", "probability must lie in [0, 1]"));
        }
        ordered("resize", self.resize.range)?;
        if !(self.resize.range[0] > 0.0) {
            return Err(Error::validation("aug.resize.range", "scales must be positive"));
        }
        if !(self.crop.range > 0.0 && self.crop.range <= 1.0) {
            return Err(Error::validation("aug.crop.range", "area fraction must lie in (0, 1]"));
        }
        ordered("brightness", self.brightness.range)?;
        ordered("contrast", self.contrast.range)?;
        ordered("saturation", self.saturation.range)?;
        ordered("hue", self.hue.range)?;
        if !(self.contrast.range[0] > 0.0 && self.saturation.range[0] > 0.0) {
            return Err(Error::validation("aug.contrast/saturation.range", "factors must be positive"));
        }
        if !(self.hue.range[0] > -0.5 && self.hue.range[1] <= 0.5) {
            return Err(Error::validation("aug.hue.range", "shift must lie in (-0.5, 0.5]"));
        }
        Ok(())
    }
}

/// Flip, then resize to `resized`, then crop `crop_size` at `crop_origin`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct GeometricRecord {
    /// Canonical `(H, W)` the record was drawn for.
    pub base: (usize, usize),
    pub hflip: bool,
    pub scale: f64,
    pub resized: (usize, usize),
    /// `(row, col)` in resized coordinates.
    pub crop_origin: (usize, usize),
    pub crop_size: (usize, usize),
}

fn resized_len(len: usize, scale: f64) -> usize {
    ((len as f64 * scale).round() as usize).max(1)
}

impl GeometricRecord {
    pub fn identity(h: usize, w: usize) -> Self {
        Self { base: (h, w), hflip: false, scale: 1.0, resized: (h, w), crop_origin: (0, 0), crop_size: (h, w) }
    }

    /// Full-frame record (no crop) for the given flip and scale.
    pub fn uncropped(h: usize, w: usize, hflip: bool, scale: f64) -> Self {
        let resized = (resized_len(h, scale), resized_len(w, scale));
        Self { base: (h, w), hflip, scale, resized, crop_origin: (0, 0), crop_size: resized }
    }

    pub fn output_size(&self) -> (usize, usize) {
        self.crop_size
    }

    pub fn validate(&self) -> Result<()> {
        let (h, w) = self.base;
        if self.resized != (resized_len(h, self.scale), resized_len(w, self.scale)) {
            return Err(Error::validation("geometric.resized", "does not match base size times scale"));
        }
        if self.crop_size.0 == 0
            || self.crop_size.1 == 0
            || self.crop_origin.0 + self.crop_size.0 > self.resized.0
            || self.crop_origin.1 + self.crop_size.1 > self.resized.1
        {
            return Err(Error::validation("geometric.crop", "crop rectangle leaves the resized image"));
        }
        Ok(())
    }

    /// Canonical position read by output index `i` along one axis.
    fn source_pos(i: usize, origin: usize, base: usize, resized: usize) -> f64 {
        ((i + origin) as f64 + 0.5) * base as f64 / resized as f64 - 0.5
    }

    fn forward_axis(&self, axis: usize, interp: Interp) -> AxisMap {
        let (base, resized, origin, out, flip) = self.axis(axis);
        let taps = (0..out)
            .map(|i| {
                let tap = match interp {
                    Interp::Nearest => AxisTap::single(crate::nn::resample::nearest_source(i + origin, base, resized)),
                    Interp::Bilinear => AxisTap::linear(Self::source_pos(i, origin, base, resized), base),
                };
                Some(if flip { mirror(tap, base) } else { tap })
            })
            .collect();
        AxisMap { in_len: base, taps }
    }

    fn inverse_axis(&self, axis: usize, interp: Interp) -> AxisMap {
        let (base, resized, origin, out, flip) = self.axis(axis);
        let mut taps: Vec<Option<AxisTap>> = vec![None; base];
        match interp {
            Interp::Nearest => {
                // scatter: each canonical index takes the first output index that read it
                for i in (0..out).rev() {
                    let src = crate::nn::resample::nearest_source(i + origin, base, resized);
                    taps[src] = Some(AxisTap::single(i));
                }
            }
            Interp::Bilinear => {
                let ratio = resized as f64 / base as f64;
                for (y, t) in taps.iter_mut().enumerate() {
                    let q = (y as f64 + 0.5) * ratio - 0.5 - origin as f64;
                    if q >= 0.0 && q <= (out - 1) as f64 {
                        *t = Some(AxisTap::linear(q, out));
                    }
                }
            }
        }
        if flip {
            taps.reverse();
        }
        AxisMap { in_len: out, taps }
    }

    /// `(base, resized, origin, out, flipped)` along axis 0 (rows) or 1 (cols).
    fn axis(&self, axis: usize) -> (usize, usize, usize, usize, bool) {
        if axis == 0 {
            (self.base.0, self.resized.0, self.crop_origin.0, self.crop_size.0, false)
        } else {
            (self.base.1, self.resized.1, self.crop_origin.1, self.crop_size.1, self.hflip)
        }
    }

    /// Map from the canonical grid to the augmented view.
    pub fn forward_map(&self, interp: Interp) -> ResampleMap {
        ResampleMap::new(self.forward_axis(0, interp), self.forward_axis(1, interp))
    }

    /// Map from the augmented view back to the canonical grid; positions the
    /// view never saw are invalid.
    pub fn inverse_map(&self, interp: Interp) -> ResampleMap {
        ResampleMap::new(self.inverse_axis(0, interp), self.inverse_axis(1, interp))
    }

    /// Applies the geometric transform to a `c×H×W` map.
    pub fn apply(&self, x: &Tensor, interp: Interp) -> Result<Tensor> {
        if (x.height(), x.width()) != self.base {
            return Err(Error::Shape(format!(
                "input is {}x{}, record expects {}x{}",
                x.height(),
                x.width(),
                self.base.0,
                self.base.1
            )));
        }
        let (h, w) = self.crop_size;
        Ok(Tensor::from_vec(x.channels(), h, w, self.forward_map(interp).apply(x.data(), x.channels())))
    }

    /// Flow under the transform: geometry as for any map, `dx` negated by the
    /// flip, components scaled by the resize.
    pub fn apply_flow(&self, flow: &Tensor) -> Result<Tensor> {
        let mut out = self.apply(flow, Interp::Nearest)?;
        let sx = self.resized.1 as f64 / self.base.1 as f64 * if self.hflip { -1.0 } else { 1.0 };
        let sy = self.resized.0 as f64 / self.base.0 as f64;
        let n = out.plane_len();
        let d = out.data_mut();
        d[..n].iter_mut().for_each(|v| *v *= sx);
        d[n..].iter_mut().for_each(|v| *v *= sy);
        Ok(out)
    }
}

fn mirror(tap: AxisTap, len: usize) -> AxisTap {
    AxisTap { i0: len - 1 - tap.i0, i1: len - 1 - tap.i1, w0: tap.w0, w1: tap.w1 }
}

/// Warps a single-channel prediction of an augmented view onto the canonical
/// grid; returns the warped map and its validity.
pub fn warp_to_canonical(
    prediction: &[f64],
    record: &GeometricRecord,
    canonical: (usize, usize),
    interp: Interp,
) -> Result<(Vec<f64>, Vec<bool>)> {
    if canonical != record.base {
        return Err(Error::validation(
            "canonical size",
            format!("{canonical:?} does not match the record's base {:?}", record.base),
        ));
    }
    let (h, w) = record.output_size();
    if prediction.len() != h * w {
        return Err(Error::Shape(format!("prediction has {} values, view is {h}x{w}", prediction.len())));
    }
    let map = record.inverse_map(interp);
    Ok((map.apply(prediction, 1), map.validity()))
}

/// Canonical pixels seen by both views (bilinear support).
pub fn joint_validity(a: &GeometricRecord, b: &GeometricRecord, canonical: (usize, usize)) -> Result<Vec<bool>> {
    for r in [a, b] {
        if r.base != canonical {
            return Err(Error::validation("canonical size", "does not match the records"));
        }
    }
    let va = a.inverse_map(Interp::Bilinear).validity();
    let vb = b.inverse_map(Interp::Bilinear).validity();
    Ok(va.iter().zip(&vb).map(|(&x, &y)| x && y).collect())
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct PhotometricRecord {
    pub brightness: f64,
    pub contrast: f64,
    pub saturation: f64,
    /// Hue rotation in turns, within `(-0.5, 0.5]`.
    pub hue: f64,
}

impl PhotometricRecord {
    pub const IDENTITY: PhotometricRecord = PhotometricRecord { brightness: 0.0, contrast: 1.0, saturation: 1.0, hue: 0.0 };

    pub fn is_identity(&self) -> bool {
        *self == Self::IDENTITY
    }

    /// Brightness, contrast, saturation, hue, each followed by clamping to `[0, 1]`.
    pub fn apply(&self, image: &Tensor) -> Tensor {
        if self.is_identity() {
            return image.clone();
        }
        let n = image.plane_len();
        let mut d = image.data().to_vec();
        let clamp = |d: &mut [f64]| d.iter_mut().for_each(|v| *v = v.clamp(0.0, 1.0));
        let gray = |d: &[f64], i: usize| 0.299 * d[i] + 0.587 * d[n + i] + 0.114 * d[2 * n + i];
        if self.brightness != 0.0 {
            d.iter_mut().for_each(|v| *v += self.brightness);
            clamp(&mut d);
        }
        if self.contrast != 1.0 {
            let mean = (0..n).map(|i| gray(&d, i)).sum::<f64>() / n as f64;
            d.iter_mut().for_each(|v| *v = (*v - mean) * self.contrast + mean);
            clamp(&mut d);
        }
        if self.saturation != 1.0 {
            for i in 0..n {
                let g = gray(&d, i);
                for c in 0..3 {
                    d[c * n + i] = (d[c * n + i] - g) * self.saturation + g;
                }
            }
            clamp(&mut d);
        }
        if self.hue != 0.0 {
            for i in 0..n {
                let (h, s, v) = rgb_to_hsv(d[i], d[n + i], d[2 * n + i]);
                let (r, g, b) = hsv_to_rgb((h + self.hue).rem_euclid(1.0), s, v);
                d[i] = r;
                d[n + i] = g;
                d[2 * n + i] = b;
            }
            clamp(&mut d);
        }
        Tensor::from_vec(3, image.height(), image.width(), d)
    }
}

fn rgb_to_hsv(r: f64, g: f64, b: f64) -> (f64, f64, f64) {
    let max = r.max(g).max(b);
    let min = r.min(g).min(b);
    let delta = max - min;
    let h = if delta == 0.0 {
        0.0
    } else if max == r {
        ((g - b) / delta).rem_euclid(6.0) / 6.0
    } else if max == g {
        ((b - r) / delta + 2.0) / 6.0
    } else {
        ((r - g) / delta + 4.0) / 6.0
    };
    let s = if max == 0.0 { 0.0 } else { delta / max };
    (h, s, max)
}

fn hsv_to_rgb(h: f64, s: f64, v: f64) -> (f64, f64, f64) {
    let h6 = h * 6.0;
    let sector = h6.floor();
    let f = h6 - sector;
    let (p, q, t) = (v * (1.0 - s), v * (1.0 - s * f), v * (1.0 - s * (1.0 - f)));
    match (sector as i64).rem_euclid(6) {
        0 => (v, t, p),
        1 => (q, v, p),
        2 => (p, v, t),
        3 => (p, q, v),
        4 => (t, p, v),
        _ => (v, p, q),
    }
}

/// An augmented image with the records that produced it.
#[derive(Clone, Debug, PartialEq)]
pub struct AugmentedView {
    pub image: Tensor,
    pub geometric: GeometricRecord,
    pub photometric: PhotometricRecord,
}

impl AugmentedView {
    pub fn from_records(image: &Tensor, geometric: GeometricRecord, photometric: PhotometricRecord) -> Result<Self> {
        geometric.validate()?;
        let warped = geometric.apply(image, Interp::Bilinear)?;
        Ok(Self { image: photometric.apply(&warped), geometric, photometric })
    }
}

fn uniform<R: Rng + ?Sized>(rng: &mut R, r: [f64; 2]) -> f64 {
    let u: f64 = rng.random();
    r[0] + u * (r[1] - r[0])
}

/// Draws records for one view. Every parameter is drawn whether or not its
/// toggle is on, so disabling one augmentation leaves the others' draws intact.
pub fn sample_records<R: Rng + ?Sized>(
    cfg: &AugConfig,
    h: usize,
    w: usize,
    rng: &mut R,
) -> Result<(GeometricRecord, PhotometricRecord)> {
    cfg.validate()?;
    let flip_u: f64 = rng.random();
    let scale_u = uniform(rng, cfg.resize.range);
    let (crop_u, crop_v): (f64, f64) = (rng.random(), rng.random());
    let brightness = uniform(rng, cfg.brightness.range);
    let contrast = uniform(rng, cfg.contrast.range);
    let saturation = uniform(rng, cfg.saturation.range);
    let mut hue = uniform(rng, cfg.hue.range);
    if hue <= -0.5 {
        hue = 0.5;
    }

    let hflip = cfg.hflip.enabled && flip_u < cfg.hflip.range;
    let scale = if cfg.resize.enabled { scale_u } else { 1.0 };
    let mut g = GeometricRecord::uncropped(h, w, hflip, scale);
    if cfg.crop.enabled {
        let side = cfg.crop.range.sqrt();
        let (rh, rw) = g.resized;
        let ch = ((rh as f64 * side).round() as usize).clamp(1, rh);
        let cw = ((rw as f64 * side).round() as usize).clamp(1, rw);
        let r0 = ((crop_u * (rh - ch + 1) as f64) as usize).min(rh - ch);
        let c0 = ((crop_v * (rw - cw + 1) as f64) as usize).min(rw - cw);
        g.crop_origin = (r0, c0);
        g.crop_size = (ch, cw);
    }
    let p = PhotometricRecord {
        brightness: if cfg.brightness.enabled { brightness } else { 0.0 },
        contrast: if cfg.contrast.enabled { contrast } else { 1.0 },
        saturation: if cfg.saturation.enabled { saturation } else { 1.0 },
        hue: if cfg.hue.enabled { hue } else { 0.0 },
    };
    Ok((g, p))
}

pub fn sample_view<R: Rng + ?Sized>(image: &Tensor, cfg: &AugConfig, rng: &mut R) -> Result<AugmentedView> {
    let (g, p) = sample_records(cfg, image.height(), image.width(), rng)?;
    AugmentedView::from_records(image, g, p)
}

/// Two views of the same image with independently drawn parameters.
pub fn sample_pair<R: Rng + ?Sized>(image: &Tensor, cfg: &AugConfig, rng: &mut R) -> Result<(AugmentedView, AugmentedView)> {
    Ok((sample_view(image, cfg, rng)?, sample_view(image, cfg, rng)?))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn ramp(c: usize, h: usize, w: usize) -> Tensor {
        Tensor::from_vec(c, h, w, (0..c * h * w).map(|i| ((i * 7919) % 101) as f64 / 100.0).collect())
    }

    #[test]
    fn disabled_augmentations_are_identity() {
        let img = ramp(3, 16, 16);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let (a, b) = sample_pair(&img, &AugConfig::none(), &mut rng).unwrap();
        for v in [a, b] {
            assert_eq!(v.image, img);
            assert_eq!(v.geometric, GeometricRecord::identity(16, 16));
            assert!(v.photometric.is_identity());
        }
    }

    #[test]
    fn hflip_mirrors_and_is_an_involution() {
        let img = ramp(3, 8, 8);
        let flip = GeometricRecord::uncropped(8, 8, true, 1.0);
        let v = AugmentedView::from_records(&img, flip, PhotometricRecord::IDENTITY).unwrap();
        for y in 0..8 {
            for x in 0..8 {
                assert_eq!(v.image.at(1, y, x), img.at(1, y, 7 - x));
            }
        }
        let twice = flip.apply(&flip.apply(&img, Interp::Nearest).unwrap(), Interp::Nearest).unwrap();
        assert_eq!(twice, img);
        let plane = img.plane(0).to_vec();
        let (once, _) = warp_to_canonical(&plane, &flip, (8, 8), Interp::Nearest).unwrap();
        let (back, valid) = warp_to_canonical(&once, &flip, (8, 8), Interp::Nearest).unwrap();
        assert_eq!(back, plane);
        assert!(valid.iter().all(|&v| v));
    }

    #[test]
    fn only_flip_enabled_flips_some_views() {
        let mut cfg = AugConfig::none();
        cfg.hflip.enabled = true;
        let img = ramp(3, 8, 8);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let flips: Vec<bool> = (0..200).map(|_| sample_view(&img, &cfg, &mut rng).unwrap().geometric.hflip).collect();
        let n = flips.iter().filter(|&&f| f).count();
        assert!(n > 60 && n < 140);
    }

    #[test]
    fn resize_scales_and_output_sizes() {
        let mut cfg = AugConfig::none();
        cfg.resize = Toggle { enabled: true, range: [0.8, 1.2] };
        let img = ramp(3, 64, 64);
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        for _ in 0..20 {
            let (a, b) = sample_pair(&img, &cfg, &mut rng).unwrap();
            for v in [a, b] {
                let s = v.geometric.scale;
                assert!((0.8..=1.2).contains(&s));
                let n = (s * 64.0).round() as usize;
                assert_eq!((v.image.height(), v.image.width()), (n, n));
            }
        }
    }

    #[test]
    fn center_crop_validity() {
        let rec = GeometricRecord { crop_origin: (16, 16), crop_size: (32, 32), ..GeometricRecord::identity(64, 64) };
        for interp in [Interp::Nearest, Interp::Bilinear] {
            let (_, valid) = warp_to_canonical(&vec![0.0; 32 * 32], &rec, (64, 64), interp).unwrap();
            for y in 0..64 {
                for x in 0..64 {
                    let inside = (16..48).contains(&y) && (16..48).contains(&x);
                    assert_eq!(valid[y * 64 + x], inside);
                }
            }
        }
    }

    #[test]
    fn joint_validity_cases() {
        let full = GeometricRecord::identity(32, 32);
        assert!(joint_validity(&full, &full, (32, 32)).unwrap().iter().all(|&v| v));
        let left = GeometricRecord { crop_origin: (0, 0), crop_size: (32, 12), ..full };
        let right = GeometricRecord { crop_origin: (0, 20), crop_size: (32, 12), ..full };
        assert!(joint_validity(&left, &right, (32, 32)).unwrap().iter().all(|&v| !v));
        let (_, v) = warp_to_canonical(&vec![0.0; 32 * 12], &left, (32, 32), Interp::Bilinear).unwrap();
        assert_eq!(joint_validity(&left, &left, (32, 32)).unwrap(), v);
    }

    #[test]
    fn canonical_size_mismatch_is_an_error() {
        let rec = GeometricRecord::identity(16, 16);
        assert!(warp_to_canonical(&[0.0; 256], &rec, (16, 20), Interp::Nearest).is_err());
        assert!(warp_to_canonical(&[0.0; 255], &rec, (16, 16), Interp::Nearest).is_err());
    }

    #[test]
    fn flow_negates_and_scales() {
        let mut flow = Tensor::zeros(2, 10, 10);
        flow.data_mut()[..100].fill(1.0);
        flow.data_mut()[100..].fill(2.0);
        let rec = GeometricRecord::uncropped(10, 10, true, 1.2);
        let out = rec.apply_flow(&flow).unwrap();
        assert!(out.plane(0).iter().all(|&v| (v + 1.2).abs() < 1e-12));
        assert!(out.plane(1).iter().all(|&v| (v - 2.4).abs() < 1e-12));
    }

    #[test]
    fn inverted_ranges_are_rejected() {
        let mut cfg = AugConfig::default();
        cfg.contrast.range = [1.2, 0.8];
        assert!(cfg.validate().is_err());
        let mut cfg = AugConfig::default();
        cfg.hue.range = [-0.6, 0.1];
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn hsv_round_trip() {
        for &(r, g, b) in &[(0.2, 0.5, 0.9), (1.0, 0.0, 0.0), (0.3, 0.3, 0.3), (0.9, 0.8, 0.1)] {
            let (h, s, v) = rgb_to_hsv(r, g, b);
            let (r2, g2, b2) = hsv_to_rgb(h, s, v);
            assert!((r - r2).abs() < 1e-12 && (g - g2).abs() < 1e-12 && (b - b2).abs() < 1e-12);
        }
    }
}
