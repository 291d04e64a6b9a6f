//! Segmentation, depth, and consistency objectives.
//!
//! Every loss is a pixel mean so that the depth weight keeps its meaning
//! across resolutions. The depth term is the scale-invariant log loss in its
//! square-root form by default; the original non-root form is available as
//! [`SilogVariant::Eigen`].

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::tape::{sigmoid, softplus};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum SilogVariant {
    /// `alpha * sqrt(mean(g^2) - lambda_v * mean(g)^2)`
    #[default]
    Zoe,
    /// `mean(g^2) - lambda_v * mean(g)^2`
    Eigen,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SilogConfig {
    pub alpha: f64,
    pub lambda_v: f64,
    pub eps_log: f64,
    pub variant: SilogVariant,
}

impl Default for SilogConfig {
    fn default() -> Self {
        Self { alpha: 10.0, lambda_v: 0.85, eps_log: 1e-6, variant: SilogVariant::Zoe }
    }
}

impl SilogConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.alpha > 0.0) {
            return Err(Error::validation("loss.silog.alpha", "must be positive"));
        }
        if !(0.0..=1.0).contains(&self.lambda_v) {
            return Err(Error::validation("loss.silog.lambda_v", "must lie in [0, 1]"));
        }
        if !(self.eps_log >= 0.0) {
            return Err(Error::validation("loss.silog.eps_log", "must be nonnegative"));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LossConfig {
    /// Weight of the depth term in the joint objective.
    pub lambda: f64,
    pub silog: SilogConfig,
    /// Treat the first view of a consistency pair as a fixed target.
    pub stop_grad_reference: bool,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self { lambda: 0.1, silog: SilogConfig::default(), stop_grad_reference: false }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lambda >= 0.0) || !self.lambda.is_finite() {
            return Err(Error::validation("loss.lambda", "must be a finite nonnegative number"));
        }
        self.silog.validate()
    }
}

fn check_len(a: usize, b: usize, what: &str) -> Result<()> {
    if a != b {
        return Err(Error::Shape(format!("{what}: {a} vs {b} elements")));
    }
    Ok(())
}

/// Per-pixel `-[m log s(z) + (1-m) log(1-s(z))]` in the overflow-free form.
#[inline]
fn bce_pixel(z: f64, m: f64) -> f64 {
    z.max(0.0) - z * m + (-z.abs()).exp().ln_1p()
}

pub(crate) fn bce_from_logits(z: &[f64], target: &[f64], valid: Option<&[bool]>) -> Option<f64> {
    let mut sum = 0.0;
    let mut n = 0usize;
    for i in 0..z.len() {
        if valid.is_none_or(|v| v[i]) {
            sum += bce_pixel(z[i], target[i]);
            n += 1;
        }
    }
    (n > 0).then(|| sum / n as f64)
}

pub(crate) fn bce_grad(z: &[f64], target: &[f64], valid: Option<&[bool]>) -> Vec<f64> {
    let n = valid.map_or(z.len(), |v| v.iter().filter(|&&b| b).count()) as f64;
    (0..z.len())
        .map(|i| if valid.is_none_or(|v| v[i]) { (sigmoid(z[i]) - target[i]) / n } else { 0.0 })
        .collect()
}

/// Mean binary cross-entropy of mask logits against a `{0,1}` mask.
pub fn bce_loss(mask_logits: &[f64], mask_gt: &[f64], valid: Option<&[bool]>) -> Result<f64> {
    check_len(mask_logits.len(), mask_gt.len(), "bce logits vs mask")?;
    if let Some(v) = valid {
        check_len(mask_logits.len(), v.len(), "bce logits vs valid mask")?;
    }
    bce_from_logits(mask_logits, mask_gt, valid).ok_or_else(|| Error::Loss("bce over an empty valid mask".into()))
}

/// Intermediate quantities of the scale-invariant log loss.
#[derive(Clone, Copy, Debug)]
pub(crate) struct SilogTerms {
    pub loss: f64,
    pub mean: f64,
    pub radicand: f64,
    pub count: usize,
}

pub(crate) fn silog_terms(pred: &[f64], reference: &[f64], valid: &[bool], cfg: &SilogConfig) -> Result<SilogTerms> {
    let mut sum = 0.0;
    let mut sum_sq = 0.0;
    let mut count = 0usize;
    let mut bad = 0usize;
    for i in 0..pred.len() {
        if !valid[i] {
            continue;
        }
        let (p, r) = (pred[i], reference[i]);
        if !(p > 0.0) || !(r > 0.0) {
            bad += 1;
            continue;
        }
        let g = (p + cfg.eps_log).ln() - (r + cfg.eps_log).ln();
        sum += g;
        sum_sq += g * g;
        count += 1;
    }
    if bad > 0 {
        return Err(Error::Loss(format!("{bad} nonpositive depth values on the valid mask")));
    }
    if count < 2 {
        return Err(Error::Loss(format!("silog needs at least 2 valid pixels, got {count}")));
    }
    let n = count as f64;
    let mean = sum / n;
    let radicand = sum_sq / n - cfg.lambda_v * mean * mean;
    let loss = match cfg.variant {
        SilogVariant::Zoe => cfg.alpha * radicand.max(0.0).sqrt(),
        SilogVariant::Eigen => radicand,
    };
    Ok(SilogTerms { loss, mean, radicand, count })
}

/// Gradients of the scale-invariant log loss w.r.t. prediction and reference.
pub(crate) fn silog_grads(pred: &[f64], reference: &[f64], valid: &[bool], cfg: &SilogConfig) -> (Vec<f64>, Vec<f64>) {
    let t = silog_terms(pred, reference, valid, cfg).expect("silog gradient on invalid support");
    let n = t.count as f64;
    // dL/dg_i = c * (g_i - lambda_v * mean)
    let c = match cfg.variant {
        SilogVariant::Zoe if t.radicand > 0.0 => cfg.alpha / (n * t.radicand.sqrt()),
        SilogVariant::Zoe => 0.0,
        SilogVariant::Eigen => 2.0 / n,
    };
    let mut dp = vec![0.0; pred.len()];
    let mut dr = vec![0.0; pred.len()];
    if c == 0.0 {
        return (dp, dr);
    }
    for i in 0..pred.len() {
        if !valid[i] {
            continue;
        }
        let (p, r) = (pred[i] + cfg.eps_log, reference[i] + cfg.eps_log);
        let dg = c * ((p.ln() - r.ln()) - cfg.lambda_v * t.mean);
        dp[i] = dg / p;
        dr[i] = -dg / r;
    }
    (dp, dr)
}

/// Scale-invariant log loss between positive depth maps on `valid`.
pub fn silog_loss(depth_pred: &[f64], depth_ref: &[f64], valid: Option<&[bool]>, cfg: &SilogConfig) -> Result<f64> {
    check_len(depth_pred.len(), depth_ref.len(), "silog prediction vs reference")?;
    let all;
    let valid = match valid {
        Some(v) => {
            check_len(depth_pred.len(), v.len(), "silog valid mask")?;
            v
        }
        None => {
            all = vec![true; depth_pred.len()];
            &all
        }
    };
    Ok(silog_terms(depth_pred, depth_ref, valid, cfg)?.loss)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossParts {
    pub bce: f64,
    pub silog: f64,
    pub joint: f64,
}

/// `bce + lambda * silog` for one forward output.
pub fn joint_loss(mask_logits: &[f64], depth: &[f64], mask_gt: &[f64], depth_ref: &[f64], cfg: &LossConfig) -> Result<LossParts> {
    let bce = bce_loss(mask_logits, mask_gt, None)?;
    let silog = silog_loss(depth, depth_ref, None, &cfg.silog)?;
    Ok(LossParts { bce, silog, joint: combine(bce, silog, cfg.lambda) })
}

/// The joint objective from already computed parts.
#[inline]
pub fn combine(bce: f64, silog: f64, lambda: f64) -> f64 {
    if lambda == 0.0 {
        bce
    } else {
        bce + lambda * silog
    }
}

/// Outcome of the consistency objective; an empty joint support is not an
/// error but tells the caller to skip the update.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Consistency {
    Loss(f64),
    Skip,
}

/// Depth agreement of two views warped to the canonical grid. The first
/// prediction plays the reference role.
pub fn consistency_loss(depth1: &[f64], depth2: &[f64], joint_valid: &[bool], cfg: &SilogConfig) -> Result<Consistency> {
    check_len(depth1.len(), depth2.len(), "consistency predictions")?;
    check_len(depth1.len(), joint_valid.len(), "consistency valid mask")?;
    if joint_valid.iter().filter(|&&v| v).count() < 2 {
        return Ok(Consistency::Skip);
    }
    Ok(Consistency::Loss(silog_terms(depth2, depth1, joint_valid, cfg)?.loss))
}

/// Supervised depth error against a stored reference (pseudo) depth map.
pub fn pseudo_depth_loss(depth_pred: &[f64], pseudo_depth: &[f64], valid: Option<&[bool]>, cfg: &SilogConfig) -> Result<f64> {
    silog_loss(depth_pred, pseudo_depth, valid, cfg)
}

/// Mean of `H(sigmoid(z))` with `H(p) = -p ln p - (1-p) ln(1-p)`.
pub fn mean_binary_entropy(logits: &[f64]) -> f64 {
    if logits.is_empty() {
        return 0.0;
    }
    let sum: f64 = logits
        .iter()
        .map(|&z| {
            // H = softplus(z) - z * sigmoid(z), stable for large |z|
            softplus(z) - z * sigmoid(z)
        })
        .sum();
    sum / logits.len() as f64
}

#[cfg(test)]
mod tests {
    use super::*;

    fn brute_bce(z: &[f64], m: &[f64]) -> f64 {
        let mut s = 0.0;
        for (zi, mi) in z.iter().zip(m) {
            let p = 1.0 / (1.0 + (-zi).exp());
            s += -(mi * p.ln() + (1.0 - mi) * (1.0 - p).ln());
        }
        s / z.len() as f64
    }

    #[test]
    fn bce_saturated_logits_give_negligible_loss() {
        let m = [1.0, 0.0, 1.0, 0.0];
        let z: Vec<f64> = m.iter().map(|&v| if v > 0.5 { 50.0 } else { -50.0 }).collect();
        assert!(bce_loss(&z, &m, None).unwrap() < 1e-20);
    }

    #[test]
    fn bce_at_zero_logits_is_ln2() {
        let z = [0.0; 9];
        let m = [1.0, 0.0, 1.0, 1.0, 0.0, 0.0, 1.0, 0.0, 1.0];
        assert!((bce_loss(&z, &m, None).unwrap() - std::f64::consts::LN_2).abs() < 1e-15);
    }

    #[test]
    fn bce_matches_per_pixel_oracle() {
        let z: Vec<f64> = (0..16).map(|i| ((i * 7919) % 23) as f64 / 4.0 - 2.7).collect();
        let m: Vec<f64> = (0..16).map(|i| ((i * 31) % 3 == 0) as u8 as f64).collect();
        assert!((bce_loss(&z, &m, None).unwrap() - brute_bce(&z, &m)).abs() < 1e-9);
    }

    #[test]
    fn bce_rejects_empty_support() {
        assert!(bce_loss(&[0.0, 1.0], &[0.0, 1.0], Some(&[false, false])).is_err());
    }

    #[test]
    fn silog_closed_forms() {
        let cfg = SilogConfig::default();
        let r = [1.0, 2.0, 3.5, 7.0];
        assert!(silog_loss(&r, &r, None, &cfg).unwrap().abs() < 1e-12);
        let p: Vec<f64> = r.iter().map(|v| v * std::f64::consts::E).collect();
        // g differs from 1 only through eps_log; tolerance covers that
        let v = silog_loss(&p, &r, None, &SilogConfig { eps_log: 0.0, ..cfg }).unwrap();
        assert!((v - 10.0 * 0.15f64.sqrt()).abs() < 1e-12);
        assert!((v - 3.872983346207417).abs() < 1e-12);
    }

    #[test]
    fn silog_two_pixel_oracle() {
        let cfg = SilogConfig::default();
        let r = [1.0, 1.0];
        let p = [1.0, 2.0];
        let g = [0.0f64, 2.0f64.ln()];
        let mean = (g[0] + g[1]) / 2.0;
        let msq = (g[0] * g[0] + g[1] * g[1]) / 2.0;
        let expect = 10.0 * (msq - 0.85 * mean * mean).sqrt();
        let got = silog_loss(&p, &r, None, &SilogConfig { eps_log: 0.0, ..cfg }).unwrap();
        assert!((got - expect).abs() < 1e-9);
    }

    #[test]
    fn silog_errors() {
        let cfg = SilogConfig::default();
        assert!(silog_loss(&[1.0, 0.0], &[1.0, 1.0], None, &cfg).is_err());
        assert!(silog_loss(&[1.0, 2.0], &[1.0, 1.0], Some(&[true, false]), &cfg).is_err());
    }

    #[test]
    fn joint_loss_arithmetic() {
        assert!((combine(0.5, 2.0, 0.1) - 0.7).abs() < 1e-15);
        assert_eq!(combine(0.5, 2.0, 0.0), 0.5);
        let z = [50.0, -50.0, 50.0];
        let m = [1.0, 0.0, 1.0];
        let d = [1.0, 2.0, 3.0];
        let parts = joint_loss(&z, &d, &m, &d, &LossConfig::default()).unwrap();
        assert!(parts.joint < 1e-20);
    }

    #[test]
    fn consistency_skip_and_zero() {
        let cfg = SilogConfig::default();
        let d = [4.0, 6.0, 8.0];
        assert_eq!(consistency_loss(&d, &d, &[false; 3], &cfg).unwrap(), Consistency::Skip);
        assert_eq!(consistency_loss(&d, &d, &[true; 3], &cfg).unwrap(), Consistency::Loss(0.0));
        let e: Vec<f64> = d.iter().map(|v| v * std::f64::consts::E).collect();
        let Consistency::Loss(v) = consistency_loss(&d, &e, &[true; 3], &cfg).unwrap() else { panic!() };
        assert!((v - 3.872983346207417).abs() < 1e-6);
    }

    #[test]
    fn pseudo_depth_equals_silog() {
        let cfg = SilogConfig::default();
        let p = [1.3, 2.2, 0.7];
        let r = [1.0, 2.0, 3.0];
        assert_eq!(
            pseudo_depth_loss(&p, &r, None, &cfg).unwrap().to_bits(),
            silog_loss(&p, &r, None, &cfg).unwrap().to_bits()
        );
    }

    #[test]
    fn entropy_matches_direct_formula() {
        for z in [-3.0, -0.2, 0.0, 0.4, 5.0] {
            let p: f64 = 1.0 / (1.0 + (-z as f64).exp());
            let h = -(p * p.ln() + (1.0 - p) * (1.0 - p).ln());
            assert!((mean_binary_entropy(&[z]) - h).abs() < 1e-12);
        }
        assert!((mean_binary_entropy(&[0.0]) - std::f64::consts::LN_2).abs() < 1e-15);
    }
}
