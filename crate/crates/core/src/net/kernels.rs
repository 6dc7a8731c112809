//! Convolution kernels over HWC planes.
//!
//! Weights of both convolution kinds are laid out `[ky][kx][in][out]` so the
//! innermost loop runs contiguously over output channels.

use crate::tensor::PlaneTensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub(crate) struct ConvGeom {
    pub cin: usize,
    pub cout: usize,
    pub kernel: usize,
    pub stride: usize,
    pub pad: usize,
}

impl ConvGeom {
    pub fn conv_out(&self, h: usize, w: usize) -> Option<(usize, usize)> {
        let hp = h + 2 * self.pad;
        let wp = w + 2 * self.pad;
        if hp < self.kernel || wp < self.kernel {
            return None;
        }
        Some(((hp - self.kernel) / self.stride + 1, (wp - self.kernel) / self.stride + 1))
    }

    pub fn tconv_out(&self, h: usize, w: usize) -> Option<(usize, usize)> {
        let oh = ((h - 1) * self.stride + self.kernel).checked_sub(2 * self.pad)?;
        let ow = ((w - 1) * self.stride + self.kernel).checked_sub(2 * self.pad)?;
        if oh == 0 || ow == 0 {
            return None;
        }
        Some((oh, ow))
    }

    #[inline]
    fn w_index(&self, ky: usize, kx: usize, ic: usize) -> usize {
        ((ky * self.kernel + kx) * self.cin + ic) * self.cout
    }
}

/// Maps an output coordinate and kernel tap to an input coordinate, if inside.
#[inline]
fn src(o: usize, k: usize, stride: usize, pad: usize, limit: usize) -> Option<usize> {
    let i = (o * stride + k).checked_sub(pad)?;
    (i < limit).then_some(i)
}

pub(crate) fn conv_forward(g: &ConvGeom, input: &PlaneTensor, weight: &[f64], bias: &[f64]) -> PlaneTensor {
    let (h, w, cin) = input.shape();
    debug_assert_eq!(cin, g.cin);
    let (oh, ow) = g.conv_out(h, w).expect("conv geometry checked by caller");
    let x = input.data();
    let mut out = vec![0.0; oh * ow * g.cout];
    for oy in 0..oh {
        for ox in 0..ow {
            let o = (oy * ow + ox) * g.cout;
            let acc = &mut out[o..o + g.cout];
            acc.copy_from_slice(bias);
            for ky in 0..g.kernel {
                let Some(iy) = src(oy, ky, g.stride, g.pad, h) else { continue };
                for kx in 0..g.kernel {
                    let Some(ix) = src(ox, kx, g.stride, g.pad, w) else { continue };
                    let xi = (iy * w + ix) * cin;
                    for ic in 0..cin {
                        let v = x[xi + ic];
                        if v == 0.0 {
                            continue;
                        }
                        let wi = g.w_index(ky, kx, ic);
                        for (a, wv) in acc.iter_mut().zip(&weight[wi..wi + g.cout]) {
                            *a += v * wv;
                        }
                    }
                }
            }
        }
    }
    PlaneTensor::from_raw(oh, ow, g.cout, out)
}

/// Returns (grad_input, grad_weight, grad_bias).
pub(crate) fn conv_backward(
    g: &ConvGeom,
    input: &PlaneTensor,
    weight: &[f64],
    grad_out: &PlaneTensor,
) -> (PlaneTensor, Vec<f64>, Vec<f64>) {
    let (h, w, cin) = input.shape();
    let (oh, ow, cout) = grad_out.shape();
    let x = input.data();
    let go = grad_out.data();
    let mut gx = vec![0.0; x.len()];
    let mut gw = vec![0.0; weight.len()];
    let mut gb = vec![0.0; cout];
    for oy in 0..oh {
        for ox in 0..ow {
            let o = (oy * ow + ox) * cout;
            let gvec = &go[o..o + cout];
            for (b, v) in gb.iter_mut().zip(gvec) {
                *b += v;
            }
            for ky in 0..g.kernel {
                let Some(iy) = src(oy, ky, g.stride, g.pad, h) else { continue };
                for kx in 0..g.kernel {
                    let Some(ix) = src(ox, kx, g.stride, g.pad, w) else { continue };
                    let xi = (iy * w + ix) * cin;
                    for ic in 0..cin {
                        let wi = g.w_index(ky, kx, ic);
                        let v = x[xi + ic];
                        let wrow = &weight[wi..wi + cout];
                        let mut dot = 0.0;
                        for ((gwv, wv), gv) in gw[wi..wi + cout].iter_mut().zip(wrow).zip(gvec) {
                            *gwv += v * gv;
                            dot += wv * gv;
                        }
                        gx[xi + ic] += dot;
                    }
                }
            }
        }
    }
    (PlaneTensor::from_raw(h, w, cin, gx), gw, gb)
}

pub(crate) fn tconv_forward(g: &ConvGeom, input: &PlaneTensor, weight: &[f64], bias: &[f64]) -> PlaneTensor {
    let (h, w, cin) = input.shape();
    let (oh, ow) = g.tconv_out(h, w).expect("tconv geometry checked by caller");
    let x = input.data();
    let mut out = Vec::with_capacity(oh * ow * g.cout);
    for _ in 0..oh * ow {
        out.extend_from_slice(bias);
    }
    for iy in 0..h {
        for ix in 0..w {
            let xi = (iy * w + ix) * cin;
            for ky in 0..g.kernel {
                let Some(oy) = (iy * g.stride + ky).checked_sub(g.pad).filter(|&v| v < oh) else {
                    continue;
                };
                for kx in 0..g.kernel {
                    let Some(ox) = (ix * g.stride + kx).checked_sub(g.pad).filter(|&v| v < ow) else {
                        continue;
                    };
                    let o = (oy * ow + ox) * g.cout;
                    for ic in 0..cin {
                        let v = x[xi + ic];
                        if v == 0.0 {
                            continue;
                        }
                        let wi = g.w_index(ky, kx, ic);
                        for (a, wv) in out[o..o + g.cout].iter_mut().zip(&weight[wi..wi + g.cout]) {
                            *a += v * wv;
                        }
                    }
                }
            }
        }
    }
    PlaneTensor::from_raw(oh, ow, g.cout, out)
}

pub(crate) fn tconv_backward(
    g: &ConvGeom,
    input: &PlaneTensor,
    weight: &[f64],
    grad_out: &PlaneTensor,
) -> (PlaneTensor, Vec<f64>, Vec<f64>) {
    let (h, w, cin) = input.shape();
    let (oh, ow, cout) = grad_out.shape();
    let x = input.data();
    let go = grad_out.data();
    let mut gx = vec![0.0; x.len()];
    let mut gw = vec![0.0; weight.len()];
    let mut gb = vec![0.0; cout];
    for p in 0..oh * ow {
        for (b, v) in gb.iter_mut().zip(&go[p * cout..(p + 1) * cout]) {
            *b += v;
        }
    }
    for iy in 0..h {
        for ix in 0..w {
            let xi = (iy * w + ix) * cin;
            for ky in 0..g.kernel {
                let Some(oy) = (iy * g.stride + ky).checked_sub(g.pad).filter(|&v| v < oh) else {
                    continue;
                };
                for kx in 0..g.kernel {
                    let Some(ox) = (ix * g.stride + kx).checked_sub(g.pad).filter(|&v| v < ow) else {
                        continue;
                    };
                    let o = (oy * ow + ox) * cout;
                    let gvec = &go[o..o + cout];
                    for ic in 0..cin {
                        let wi = g.w_index(ky, kx, ic);
                        let v = x[xi + ic];
                        let mut dot = 0.0;
                        for ((gwv, wv), gv) in gw[wi..wi + cout].iter_mut().zip(&weight[wi..wi + cout]).zip(gvec) {
                            *gwv += v * gv;
                            dot += wv * gv;
                        }
                        gx[xi + ic] += dot;
                    }
                }
            }
        }
    }
    (PlaneTensor::from_raw(h, w, cin, gx), gw, gb)
}

pub(crate) fn relu_forward(input: &PlaneTensor) -> PlaneTensor {
    let (h, w, c) = input.shape();
    PlaneTensor::from_raw(h, w, c, input.data().iter().map(|&v| v.max(0.0)).collect())
}

/// ReLU derivative is taken as 0 at exactly 0.
pub(crate) fn relu_backward(input: &PlaneTensor, grad_out: &PlaneTensor) -> PlaneTensor {
    let (h, w, c) = input.shape();
    let data = input
        .data()
        .iter()
        .zip(grad_out.data())
        .map(|(&x, &g)| if x > 0.0 { g } else { 0.0 })
        .collect();
    PlaneTensor::from_raw(h, w, c, data)
}
