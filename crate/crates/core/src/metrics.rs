//! Scale-invariant evaluation metrics, computed on linear-domain images.

use crate::error::{arg, Result};
use crate::tensor::PlaneTensor;

pub const SSIM_WINDOW: usize = 11;
pub const SSIM_SIGMA: f64 = 1.5;
pub const SSIM_C1: f64 = 1e-4;
pub const SSIM_C2: f64 = 9e-4;

fn check_shapes(pred: &PlaneTensor, truth: &PlaneTensor) -> Result<()> {
    if !pred.same_shape(truth) {
        return arg(format!("shape mismatch: {:?} vs {:?}", pred.shape(), truth.shape()));
    }
    if pred.is_empty() {
        return arg("metrics need a non-empty image");
    }
    Ok(())
}

/// `min_s sum (s p - t)^2` for the given index set, plus `sum t^2`.
fn scaled_residual(pred: &[f64], truth: &[f64]) -> (f64, f64) {
    let mut pp = 0.0;
    let mut pt = 0.0;
    let mut tt = 0.0;
    for (p, t) in pred.iter().zip(truth) {
        pp += p * p;
        pt += p * t;
        tt += t * t;
    }
    let s = if pp > 0.0 { pt / pp } else { 0.0 };
    let res: f64 = pred.iter().zip(truth).map(|(p, t)| (s * p - t).powi(2)).sum();
    (res, tt)
}

/// Mean squared error after the optimal global rescaling of `pred`.
pub fn si_mse(pred: &PlaneTensor, truth: &PlaneTensor) -> Result<f64> {
    check_shapes(pred, truth)?;
    let (res, _) = scaled_residual(pred.data(), truth.data());
    Ok(res / pred.len() as f64)
}

/// Default local window: a tenth of the larger side, at least 2.
pub fn default_lmse_window(height: usize, width: usize) -> usize {
    (height.max(width) / 10).max(2)
}

/// Default stride: half the window, at least 1.
pub fn default_lmse_stride(window: usize) -> usize {
    (window / 2).max(1)
}

fn window_starts(dim: usize, window: usize, stride: usize) -> Vec<usize> {
    let mut starts = vec![0];
    let mut s = stride;
    while s + window - stride < dim {
        starts.push(s);
        s += stride;
    }
    starts
}

/// Local MSE: every window gets its own scale (shared by all channels), and
/// the summed residual is normalized by the summed truth energy. Windows at
/// the right and bottom edges are clipped to the image.
pub fn lmse(pred: &PlaneTensor, truth: &PlaneTensor, window: usize, stride: usize) -> Result<f64> {
    check_shapes(pred, truth)?;
    let (h, w, c) = pred.shape();
    if window < 2 || stride == 0 {
        return arg(format!("lmse needs window >= 2 and stride >= 1, got {window}/{stride}"));
    }
    if window > h || window > w {
        return arg(format!("lmse window {window} exceeds image size {h}x{w}"));
    }
    let mut num = 0.0;
    let mut den = 0.0;
    let mut pbuf = Vec::with_capacity(window * window * c);
    let mut tbuf = Vec::with_capacity(window * window * c);
    for &y0 in &window_starts(h, window, stride) {
        for &x0 in &window_starts(w, window, stride) {
            pbuf.clear();
            tbuf.clear();
            for y in y0..(y0 + window).min(h) {
                let a = pred.index(y, x0, 0);
                let b = pred.index(y, (x0 + window).min(w) - 1, c - 1) + 1;
                pbuf.extend_from_slice(&pred.data()[a..b]);
                tbuf.extend_from_slice(&truth.data()[a..b]);
            }
            let (res, tt) = scaled_residual(&pbuf, &tbuf);
            num += res;
            den += tt;
        }
    }
    Ok(if den > 0.0 { num / den } else { 0.0 })
}

fn gaussian_kernel() -> [f64; SSIM_WINDOW] {
    let mut k = [0.0; SSIM_WINDOW];
    let r = (SSIM_WINDOW / 2) as f64;
    for (i, v) in k.iter_mut().enumerate() {
        let d = i as f64 - r;
        *v = (-d * d / (2.0 * SSIM_SIGMA * SSIM_SIGMA)).exp();
    }
    let s: f64 = k.iter().sum();
    k.map(|v| v / s)
}

/// Symmetric ("half-sample") reflection of an out-of-range index.
fn reflect(i: isize, n: usize) -> usize {
    let period = 2 * n as isize;
    let m = i.rem_euclid(period) as usize;
    if m < n {
        m
    } else {
        2 * n - 1 - m
    }
}

/// Separable Gaussian filter of a single-channel `h x w` plane.
fn blur(plane: &[f64], h: usize, w: usize, k: &[f64; SSIM_WINDOW]) -> Vec<f64> {
    let r = (SSIM_WINDOW / 2) as isize;
    let mut tmp = vec![0.0; h * w];
    for y in 0..h {
        for x in 0..w {
            let mut acc = 0.0;
            for (j, kv) in k.iter().enumerate() {
                acc += kv * plane[y * w + reflect(x as isize + j as isize - r, w)];
            }
            tmp[y * w + x] = acc;
        }
    }
    let mut out = vec![0.0; h * w];
    for y in 0..h {
        for x in 0..w {
            let mut acc = 0.0;
            for (j, kv) in k.iter().enumerate() {
                acc += kv * tmp[reflect(y as isize + j as isize - r, h) * w + x];
            }
            out[y * w + x] = acc;
        }
    }
    out
}

/// Mean SSIM of one channel pair; inputs already clipped.
fn ssim_plane(x: &[f64], y: &[f64], h: usize, w: usize, k: &[f64; SSIM_WINDOW]) -> f64 {
    let mx = blur(x, h, w, k);
    let my = blur(y, h, w, k);
    let xx: Vec<f64> = x.iter().map(|v| v * v).collect();
    let yy: Vec<f64> = y.iter().map(|v| v * v).collect();
    let xy: Vec<f64> = x.iter().zip(y).map(|(a, b)| a * b).collect();
    let sxx = blur(&xx, h, w, k);
    let syy = blur(&yy, h, w, k);
    let sxy = blur(&xy, h, w, k);
    let mut total = 0.0;
    for i in 0..h * w {
        let (ux, uy) = (mx[i], my[i]);
        let vx = sxx[i] - ux * ux;
        let vy = syy[i] - uy * uy;
        let cxy = sxy[i] - ux * uy;
        total += ((2.0 * ux * uy + SSIM_C1) * (2.0 * cxy + SSIM_C2))
            / ((ux * ux + uy * uy + SSIM_C1) * (vx + vy + SSIM_C2));
    }
    total / (h * w) as f64
}

/// Structural dissimilarity `(1 - SSIM) / 2`, averaging SSIM over channels.
/// Inputs are clipped to `[0, 1]` first.
pub fn dssim(pred: &PlaneTensor, truth: &PlaneTensor) -> Result<f64> {
    check_shapes(pred, truth)?;
    let (h, w, c) = pred.shape();
    let k = gaussian_kernel();
    let mut ssim = 0.0;
    for ch in 0..c {
        let x: Vec<f64> = pred.channel(ch).data().iter().map(|v| v.clamp(0.0, 1.0)).collect();
        let y: Vec<f64> = truth.channel(ch).data().iter().map(|v| v.clamp(0.0, 1.0)).collect();
        ssim += ssim_plane(&x, &y, h, w, &k);
    }
    ssim /= c as f64;
    Ok(((1.0 - ssim) / 2.0).clamp(0.0, 1.0))
}

/// The three metrics for one prediction.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct MetricTriple {
    pub mse: f64,
    pub lmse: f64,
    pub dssim: f64,
}

/// Optional LMSE window geometry; `None` picks the size-based defaults.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct LmseParams {
    pub window: Option<usize>,
    pub stride: Option<usize>,
}

impl LmseParams {
    pub fn resolve(&self, height: usize, width: usize) -> (usize, usize) {
        let window = self.window.unwrap_or_else(|| default_lmse_window(height, width));
        let stride = self.stride.unwrap_or_else(|| default_lmse_stride(window));
        (window, stride)
    }
}

pub fn evaluate(pred: &PlaneTensor, truth: &PlaneTensor, params: &LmseParams) -> Result<MetricTriple> {
    let (window, stride) = params.resolve(truth.height(), truth.width());
    Ok(MetricTriple {
        mse: si_mse(pred, truth)?,
        lmse: lmse(pred, truth, window, stride)?,
        dssim: dssim(pred, truth)?,
    })
}

/// Aggregate metrics over a set of images.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct MetricReport {
    pub mse: f64,
    pub lmse: f64,
    pub dssim: f64,
    pub per_image: Vec<MetricTriple>,
}

impl MetricReport {
    pub fn from_per_image(per_image: Vec<MetricTriple>) -> Self {
        let n = per_image.len().max(1) as f64;
        let sum = |f: fn(&MetricTriple) -> f64| per_image.iter().map(f).sum::<f64>() / n;
        Self { mse: sum(|t| t.mse), lmse: sum(|t| t.lmse), dssim: sum(|t| t.dssim), per_image }
    }

    pub fn triple(&self) -> MetricTriple {
        MetricTriple { mse: self.mse, lmse: self.lmse, dssim: self.dssim }
    }
}
