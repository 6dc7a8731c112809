//! Dense HWC float planes and log-domain conversion.
//!
//! Every image-like quantity in the crate (linear images, log images, head
//! maps, variance maps) is a [`PlaneTensor`] stored row-major as
//! `data[(y * width + x) * channels + c]`.

use crate::error::{arg, Error, Result};

/// Default clamping floor applied before taking logarithms.
pub const DEFAULT_LOG_EPSILON: f64 = 1e-4;

#[derive(Debug, Clone, PartialEq)]
pub struct PlaneTensor {
    height: usize,
    width: usize,
    channels: usize,
    data: Vec<f64>,
}

impl PlaneTensor {
    /// Wraps `data` after checking the shape and that every element is finite.
    pub fn new(height: usize, width: usize, channels: usize, data: Vec<f64>) -> Result<Self> {
        if height == 0 || width == 0 || channels == 0 {
            return arg(format!("empty tensor shape {height}x{width}x{channels}"));
        }
        if data.len() != height * width * channels {
            return arg(format!(
                "data length {} does not match {height}x{width}x{channels}",
                data.len()
            ));
        }
        if let Some(i) = data.iter().position(|v| !v.is_finite()) {
            return arg(format!("non-finite element {} at index {i}", data[i]));
        }
        Ok(Self { height, width, channels, data })
    }

    pub fn zeros(height: usize, width: usize, channels: usize) -> Self {
        Self::filled(height, width, channels, 0.0)
    }

    pub fn filled(height: usize, width: usize, channels: usize, value: f64) -> Self {
        assert!(height > 0 && width > 0 && channels > 0, "empty tensor shape");
        assert!(value.is_finite());
        Self { height, width, channels, data: vec![value; height * width * channels] }
    }

    /// Builds a tensor by evaluating `f(y, x, c)` at every element.
    pub fn from_fn(
        height: usize,
        width: usize,
        channels: usize,
        mut f: impl FnMut(usize, usize, usize) -> f64,
    ) -> Self {
        let mut data = Vec::with_capacity(height * width * channels);
        for y in 0..height {
            for x in 0..width {
                for c in 0..channels {
                    data.push(f(y, x, c));
                }
            }
        }
        Self::new(height, width, channels, data).expect("from_fn produced an invalid tensor")
    }

    /// Unchecked constructor for kernels that guarantee shape and finiteness.
    pub(crate) fn from_raw(height: usize, width: usize, channels: usize, data: Vec<f64>) -> Self {
        debug_assert_eq!(data.len(), height * width * channels);
        Self { height, width, channels, data }
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn shape(&self) -> (usize, usize, usize) {
        (self.height, self.width, self.channels)
    }

    pub fn pixels(&self) -> usize {
        self.height * self.width
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    #[inline]
    pub fn index(&self, y: usize, x: usize, c: usize) -> usize {
        (y * self.width + x) * self.channels + c
    }

    #[inline]
    pub fn at(&self, y: usize, x: usize, c: usize) -> f64 {
        self.data[self.index(y, x, c)]
    }

    /// The channel values of pixel `p` (flat pixel index).
    #[inline]
    pub fn pixel(&self, p: usize) -> &[f64] {
        &self.data[p * self.channels..(p + 1) * self.channels]
    }

    /// Extracts channel `c` as a single-channel tensor.
    pub fn channel(&self, c: usize) -> PlaneTensor {
        assert!(c < self.channels);
        let data = self.data.iter().skip(c).step_by(self.channels).copied().collect();
        Self::from_raw(self.height, self.width, 1, data)
    }

    /// Stacks single- or multi-channel tensors of equal spatial size along channels.
    pub fn concat_channels(parts: &[&PlaneTensor]) -> Result<PlaneTensor> {
        let first = parts.first().ok_or_else(|| Error::Argument("nothing to concatenate".into()))?;
        let (h, w) = (first.height, first.width);
        if parts.iter().any(|t| t.height != h || t.width != w) {
            return arg("spatial size mismatch in concat_channels");
        }
        let channels: usize = parts.iter().map(|t| t.channels).sum();
        let mut data = Vec::with_capacity(h * w * channels);
        for p in 0..h * w {
            for t in parts {
                data.extend_from_slice(t.pixel(p));
            }
        }
        Ok(Self::from_raw(h, w, channels, data))
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> PlaneTensor {
        let data: Vec<f64> = self.data.iter().map(|&v| f(v)).collect();
        Self::new(self.height, self.width, self.channels, data)
            .expect("map produced a non-finite element")
    }

    pub fn same_shape(&self, other: &PlaneTensor) -> bool {
        self.shape() == other.shape()
    }

    pub fn sum(&self) -> f64 {
        self.data.iter().sum()
    }

    pub fn mean(&self) -> f64 {
        self.sum() / self.data.len() as f64
    }

    pub fn max_abs_diff(&self, other: &PlaneTensor) -> f64 {
        assert!(self.same_shape(other));
        self.data.iter().zip(&other.data).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max)
    }

    /// Mirrors the tensor left to right.
    pub fn flip_horizontal(&self) -> PlaneTensor {
        let c = self.channels;
        let mut data = Vec::with_capacity(self.data.len());
        for y in 0..self.height {
            for x in (0..self.width).rev() {
                let i = self.index(y, x, 0);
                data.extend_from_slice(&self.data[i..i + c]);
            }
        }
        Self::from_raw(self.height, self.width, c, data)
    }

    /// Mirrors the tensor top to bottom.
    pub fn flip_vertical(&self) -> PlaneTensor {
        let row = self.width * self.channels;
        let mut data = Vec::with_capacity(self.data.len());
        for y in (0..self.height).rev() {
            data.extend_from_slice(&self.data[y * row..(y + 1) * row]);
        }
        Self::from_raw(self.height, self.width, self.channels, data)
    }
}

/// Element-wise binary operators supported by [`ewise`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum EwiseOp {
    Add,
    Sub,
    Mul,
}

impl EwiseOp {
    #[inline]
    fn apply(self, a: f64, b: f64) -> f64 {
        match self {
            EwiseOp::Add => a + b,
            EwiseOp::Sub => a - b,
            EwiseOp::Mul => a * b,
        }
    }
}

/// Applies `op` element-wise.
///
/// `b` must either match `a` exactly, be a `1x1xC` per-channel vector, or be a
/// single-channel map of the same spatial size (broadcast over channels).
pub fn ewise(a: &PlaneTensor, b: &PlaneTensor, op: EwiseOp) -> Result<PlaneTensor> {
    let (h, w, c) = a.shape();
    let data: Vec<f64> = if a.same_shape(b) {
        a.data.iter().zip(&b.data).map(|(&x, &y)| op.apply(x, y)).collect()
    } else if b.height == 1 && b.width == 1 && b.channels == c {
        a.data.iter().enumerate().map(|(i, &x)| op.apply(x, b.data[i % c])).collect()
    } else if b.height == h && b.width == w && b.channels == 1 {
        a.data.iter().enumerate().map(|(i, &x)| op.apply(x, b.data[i / c])).collect()
    } else {
        return arg(format!("cannot broadcast {:?} against {:?}", b.shape(), a.shape()));
    };
    if data.iter().any(|v| !v.is_finite()) {
        return Err(Error::Numeric(format!("{op:?} overflowed")));
    }
    Ok(PlaneTensor::from_raw(h, w, c, data))
}

/// A tensor of natural logarithms produced by [`to_log`].
#[derive(Debug, Clone, PartialEq)]
pub struct LogDomainImage {
    planes: PlaneTensor,
    epsilon: f64,
}

impl LogDomainImage {
    pub fn planes(&self) -> &PlaneTensor {
        &self.planes
    }

    pub fn epsilon(&self) -> f64 {
        self.epsilon
    }

    pub fn into_planes(self) -> PlaneTensor {
        self.planes
    }
}

/// Element-wise `ln(max(x, epsilon))`.
pub fn to_log(img: &PlaneTensor, epsilon: f64) -> Result<LogDomainImage> {
    if !(epsilon > 0.0) || !epsilon.is_finite() {
        return arg(format!("log epsilon must be positive, got {epsilon}"));
    }
    if let Some(v) = img.data.iter().find(|v| **v < 0.0) {
        return arg(format!("negative linear value {v}"));
    }
    let planes = img.map(|v| v.max(epsilon).ln());
    Ok(LogDomainImage { planes, epsilon })
}

/// Element-wise `exp`, inverse of [`to_log`] above the clamp floor.
pub fn from_log(img: &LogDomainImage) -> PlaneTensor {
    img.planes.map(f64::exp)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn t(data: &[f64]) -> PlaneTensor {
        PlaneTensor::new(1, data.len(), 1, data.to_vec()).unwrap()
    }

    #[test]
    fn to_log_examples() {
        let img = t(&[1.0, 0.0, std::f64::consts::E]);
        let l = to_log(&img, 1e-4).unwrap();
        assert_eq!(l.planes().data()[0], 0.0);
        assert!((l.planes().data()[1] - (-9.210340371976182)).abs() < 1e-12);
        assert!((l.planes().data()[2] - 1.0).abs() < 1e-15);
    }

    #[test]
    fn to_log_rejects_bad_epsilon() {
        let img = t(&[1.0]);
        assert!(matches!(to_log(&img, 0.0), Err(Error::Argument(_))));
        assert!(matches!(to_log(&img, -1.0), Err(Error::Argument(_))));
        assert!(matches!(to_log(&img, f64::NAN), Err(Error::Argument(_))));
    }

    #[test]
    fn from_log_examples() {
        let l = to_log(&t(&[1.0, std::f64::consts::E, 0.5]), 1e-4).unwrap();
        let back = from_log(&l);
        assert_eq!(back.data()[0], 1.0);
        assert!((back.data()[1] - std::f64::consts::E).abs() < 1e-15);
        assert!((back.data()[2] - 0.5).abs() < 1e-12);
    }

    #[test]
    fn ewise_examples() {
        let sum = ewise(&t(&[1.0, 2.0]), &t(&[3.0, 4.0]), EwiseOp::Add).unwrap();
        assert_eq!(sum.data(), &[4.0, 6.0]);
        let x = t(&[0.3, -1.5]);
        assert_eq!(ewise(&x, &x, EwiseOp::Sub).unwrap().data(), &[0.0, 0.0]);
        let prod = ewise(&t(&[2.0, 3.0]), &t(&[0.0, 1.0]), EwiseOp::Mul).unwrap();
        assert_eq!(prod.data(), &[0.0, 3.0]);
    }

    #[test]
    fn ewise_broadcasts() {
        let a = PlaneTensor::from_fn(2, 2, 3, |y, x, c| (y * 6 + x * 3 + c) as f64);
        let color = PlaneTensor::new(1, 1, 3, vec![1.0, 2.0, 3.0]).unwrap();
        let r = ewise(&a, &color, EwiseOp::Add).unwrap();
        assert_eq!(r.at(1, 1, 2), a.at(1, 1, 2) + 3.0);
        let gray = PlaneTensor::from_fn(2, 2, 1, |y, x, _| (y * 2 + x) as f64);
        let r = ewise(&a, &gray, EwiseOp::Sub).unwrap();
        assert_eq!(r.at(1, 0, 1), a.at(1, 0, 1) - 2.0);
    }

    #[test]
    fn ewise_shape_mismatch() {
        let r = ewise(&t(&[1.0, 2.0]), &t(&[1.0, 2.0, 3.0]), EwiseOp::Add);
        assert!(matches!(r, Err(Error::Argument(_))));
    }

    #[test]
    fn new_rejects_bad_input() {
        assert!(PlaneTensor::new(2, 2, 1, vec![0.0; 3]).is_err());
        assert!(PlaneTensor::new(1, 1, 1, vec![f64::INFINITY]).is_err());
        assert!(PlaneTensor::new(0, 1, 1, vec![]).is_err());
    }

    #[test]
    fn flips_and_channels() {
        let a = PlaneTensor::from_fn(2, 3, 2, |y, x, c| (y * 100 + x * 10 + c) as f64);
        assert_eq!(a.flip_horizontal().at(0, 0, 1), a.at(0, 2, 1));
        assert_eq!(a.flip_vertical().at(0, 1, 0), a.at(1, 1, 0));
        assert_eq!(a.channel(1).at(1, 2, 0), a.at(1, 2, 1));
        let c = PlaneTensor::concat_channels(&[&a.channel(0), &a.channel(1)]).unwrap();
        assert_eq!(c, a);
    }

    fn tensor_strategy() -> impl Strategy<Value = (PlaneTensor, PlaneTensor, PlaneTensor)> {
        (1usize..5, 1usize..5, 1usize..4).prop_flat_map(|(h, w, c)| {
            let n = h * w * c;
            let v = || proptest::collection::vec(-1e2f64..1e2, n);
            (v(), v(), v()).prop_map(move |(a, b, d)| {
                (
                    PlaneTensor::new(h, w, c, a).unwrap(),
                    PlaneTensor::new(h, w, c, b).unwrap(),
                    PlaneTensor::new(h, w, c, d).unwrap(),
                )
            })
        })
    }

    proptest! {
        #[test]
        fn log_round_trip(vals in proptest::collection::vec(1.1e-4f64..1e4, 1..40)) {
            let img = t(&vals);
            let back = from_log(&to_log(&img, 1e-4).unwrap());
            for (a, b) in back.data().iter().zip(&vals) {
                prop_assert!((a - b).abs() <= 1e-12 * b.max(1.0));
            }
        }

        #[test]
        fn add_commutes_and_associates((a, b, c) in tensor_strategy()) {
            let ab = ewise(&a, &b, EwiseOp::Add).unwrap();
            let ba = ewise(&b, &a, EwiseOp::Add).unwrap();
            prop_assert!(ab.max_abs_diff(&ba) <= 1e-12);
            let ab_c = ewise(&ab, &c, EwiseOp::Add).unwrap();
            let a_bc = ewise(&a, &ewise(&b, &c, EwiseOp::Add).unwrap(), EwiseOp::Add).unwrap();
            prop_assert!(ab_c.max_abs_diff(&a_bc) <= 1e-12);
        }
    }
}
