//! Dense row-major tensors, label maps, boxes and the elementary kernels
//! shared by every other module.

mod bbox;
mod io;

use std::fmt;
use std::ops::{AddAssign, MulAssign, SubAssign};

use num_traits::Float;

pub use bbox::{box_iou, BBox};
pub use io::{decode_tensor, encode_tensor, read_tensor, write_tensor, MAGIC};

use crate::error::{Error, Result};

/// Floating point element type. `f32` is the storage and training type,
/// `f64` exists so gradients can be checked against finite differences.
pub trait Real:
    Float + Default + AddAssign + SubAssign + MulAssign + Send + Sync + fmt::Debug + 'static
{
    fn lit(v: f64) -> Self;

    fn as_f64(self) -> f64;

    /// `c = alpha * a * b + beta * c` over strided row/column views.
    #[allow(clippy::too_many_arguments)]
    fn gemm(
        m: usize,
        k: usize,
        n: usize,
        alpha: Self,
        a: &[Self],
        a_strides: (isize, isize),
        b: &[Self],
        b_strides: (isize, isize),
        beta: Self,
        c: &mut [Self],
        c_strides: (isize, isize),
    );
}

macro_rules! impl_real {
    ($t:ty, $gemm:path) => {
        impl Real for $t {
            #[inline]
            fn lit(v: f64) -> Self {
                v as $t
            }

            #[inline]
            fn as_f64(self) -> f64 {
                self as f64
            }

            fn gemm(
                m: usize,
                k: usize,
                n: usize,
                alpha: Self,
                a: &[Self],
                (rsa, csa): (isize, isize),
                b: &[Self],
                (rsb, csb): (isize, isize),
                beta: Self,
                c: &mut [Self],
                (rsc, csc): (isize, isize),
            ) {
                if m == 0 || n == 0 {
                    return;
                }
                let extent = |rows: usize, cols: usize, rs: isize, cs: isize| {
                    if rows == 0 || cols == 0 {
                        0
                    } else {
                        (rows as isize - 1) * rs + (cols as isize - 1) * cs + 1
                    }
                };
                assert!(a.len() as isize >= extent(m, k, rsa, csa), "gemm: lhs too short");
                assert!(b.len() as isize >= extent(k, n, rsb, csb), "gemm: rhs too short");
                assert!(c.len() as isize >= extent(m, n, rsc, csc), "gemm: out too short");
                // SAFETY: the asserts above bound every index matrixmultiply touches.
                unsafe {
                    $gemm(
                        m,
                        k,
                        n,
                        alpha,
                        a.as_ptr(),
                        rsa,
                        csa,
                        b.as_ptr(),
                        rsb,
                        csb,
                        beta,
                        c.as_mut_ptr(),
                        rsc,
                        csc,
                    );
                }
            }
        }
    };
}

impl_real!(f32, matrixmultiply::sgemm);
impl_real!(f64, matrixmultiply::dgemm);

/// Dense row-major tensor of rank 1 to 4. Maps use `[channels, height, width]`.
#[derive(Clone, PartialEq)]
pub struct Tensor<T = f32> {
    dims: Vec<usize>,
    data: Vec<T>,
}

impl<T: Real> fmt::Debug for Tensor<T> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Tensor")
            .field("dims", &self.dims)
            .field("len", &self.data.len())
            .finish()
    }
}

fn check_dims(dims: &[usize]) -> Result<usize> {
    if dims.is_empty() || dims.len() > 4 {
        return Err(Error::BadRank(dims.len()));
    }
    if dims.iter().any(|&d| d == 0) {
        return Err(Error::Shape(format!("zero extent in {dims:?}")));
    }
    Ok(dims.iter().product())
}

impl<T: Real> Tensor<T> {
    pub fn new(dims: Vec<usize>, data: Vec<T>) -> Result<Self> {
        let len = check_dims(&dims)?;
        if len != data.len() {
            return Err(Error::Shape(format!(
                "dims {dims:?} need {len} values, got {}",
                data.len()
            )));
        }
        Ok(Self { dims, data })
    }

    pub fn filled(dims: &[usize], value: T) -> Self {
        let len = check_dims(dims).expect("invalid tensor dims");
        Self {
            dims: dims.to_vec(),
            data: vec![value; len],
        }
    }

    pub fn zeros(dims: &[usize]) -> Self {
        Self::filled(dims, T::zero())
    }

    pub fn zeros_like(other: &Self) -> Self {
        Self::zeros(&other.dims)
    }

    pub fn dims(&self) -> &[usize] {
        &self.dims
    }

    pub fn rank(&self) -> usize {
        self.dims.len()
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<T> {
        self.data
    }

    /// `(channels, height, width)` of a rank-3 map.
    pub fn chw(&self) -> Result<(usize, usize, usize)> {
        match self.dims[..] {
            [c, h, w] => Ok((c, h, w)),
            _ => Err(Error::Shape(format!("expected [C,H,W], got {:?}", self.dims))),
        }
    }

    pub fn reshape(mut self, dims: Vec<usize>) -> Result<Self> {
        let len = check_dims(&dims)?;
        if len != self.data.len() {
            return Err(Error::Shape(format!(
                "cannot reshape {:?} into {dims:?}",
                self.dims
            )));
        }
        self.dims = dims;
        Ok(self)
    }

    /// Contiguous slice of one channel of a `[C,H,W]` map.
    pub fn channel(&self, c: usize) -> &[T] {
        let plane = self.plane();
        &self.data[c * plane..(c + 1) * plane]
    }

    pub fn channel_mut(&mut self, c: usize) -> &mut [T] {
        let plane = self.plane();
        &mut self.data[c * plane..(c + 1) * plane]
    }

    fn plane(&self) -> usize {
        let r = self.dims.len();
        self.dims[r.saturating_sub(2)..].iter().product()
    }

    #[inline]
    pub fn at3(&self, c: usize, y: usize, x: usize) -> T {
        let (h, w) = (self.dims[1], self.dims[2]);
        self.data[(c * h + y) * w + x]
    }

    pub fn map(&self, f: impl Fn(T) -> T) -> Self {
        Self {
            dims: self.dims.clone(),
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn cast<U: Real>(&self) -> Tensor<U> {
        Tensor {
            dims: self.dims.clone(),
            data: self.data.iter().map(|v| U::lit(v.as_f64())).collect(),
        }
    }

    pub fn add_assign(&mut self, other: &Self) {
        assert_eq!(self.dims, other.dims, "add_assign shape mismatch");
        for (a, &b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn ensure_finite(&self, context: &str) -> Result<()> {
        if self.all_finite() {
            Ok(())
        } else {
            Err(Error::NonFinite(context.to_string()))
        }
    }

    pub fn max_abs_diff(&self, other: &Self) -> f64 {
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a.as_f64() - b.as_f64()).abs())
            .fold(0.0, f64::max)
    }
}

/// Integer per-pixel map (semantic labels or instance ids), row-major `H x W`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct LabelMap {
    pub height: usize,
    pub width: usize,
    pub data: Vec<u32>,
}

/// Label value excluded from every loss and metric.
pub const IGNORE_LABEL: u32 = 255;

impl LabelMap {
    pub fn new(height: usize, width: usize, data: Vec<u32>) -> Result<Self> {
        if height == 0 || width == 0 || data.len() != height * width {
            return Err(Error::Shape(format!(
                "label map {height}x{width} with {} values",
                data.len()
            )));
        }
        Ok(Self {
            height,
            width,
            data,
        })
    }

    pub fn filled(height: usize, width: usize, value: u32) -> Self {
        Self {
            height,
            width,
            data: vec![value; height * width],
        }
    }

    #[inline]
    pub fn get(&self, y: usize, x: usize) -> u32 {
        self.data[y * self.width + x]
    }

    #[inline]
    pub fn set(&mut self, y: usize, x: usize, v: u32) {
        self.data[y * self.width + x] = v;
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    /// Stores the labels as an exact-integer `[H,W]` tensor.
    pub fn to_tensor(&self) -> Tensor<f32> {
        Tensor {
            dims: vec![self.height, self.width],
            data: self.data.iter().map(|&v| v as f32).collect(),
        }
    }

    pub fn from_tensor(t: &Tensor<f32>) -> Result<Self> {
        let (h, w) = match t.dims()[..] {
            [h, w] => (h, w),
            [1, h, w] => (h, w),
            _ => return Err(Error::Shape(format!("label map dims {:?}", t.dims()))),
        };
        let mut data = Vec::with_capacity(h * w);
        for &v in t.data() {
            if !(v >= 0.0 && v.fract() == 0.0 && v <= u32::MAX as f32) {
                return Err(Error::Shape(format!("label value {v} is not a count")));
            }
            data.push(v as u32);
        }
        Self::new(h, w, data)
    }
}

/// IoU of two masks given as ascending pixel-index lists.
pub fn mask_iou(a: &[usize], b: &[usize]) -> f64 {
    if a.is_empty() && b.is_empty() {
        return 0.0;
    }
    let (mut i, mut j, mut inter) = (0, 0, 0usize);
    while i < a.len() && j < b.len() {
        match a[i].cmp(&b[j]) {
            std::cmp::Ordering::Less => i += 1,
            std::cmp::Ordering::Greater => j += 1,
            std::cmp::Ordering::Equal => {
                inter += 1;
                i += 1;
                j += 1;
            }
        }
    }
    inter as f64 / (a.len() + b.len() - inter) as f64
}

/// Per-pixel softmax over the channel axis of a `[K,H,W]` tensor.
pub fn softmax_channels<T: Real>(logits: &Tensor<T>) -> Result<Tensor<T>> {
    let (k, h, w) = logits.chw()?;
    logits.ensure_finite("softmax input")?;
    let plane = h * w;
    let src = logits.data();
    let mut out = Tensor::zeros(&[k, h, w]);
    let dst = out.data_mut();
    for p in 0..plane {
        let mut m = src[p];
        for c in 1..k {
            m = m.max(src[c * plane + p]);
        }
        let mut sum = T::zero();
        for c in 0..k {
            let e = (src[c * plane + p] - m).exp();
            dst[c * plane + p] = e;
            sum += e;
        }
        let inv = T::one() / sum;
        for c in 0..k {
            dst[c * plane + p] *= inv;
        }
    }
    Ok(out)
}

/// Channel index of the maximum per pixel; ties resolve to the lowest channel.
pub fn argmax_channels<T: Real>(t: &Tensor<T>) -> Result<LabelMap> {
    let (k, h, w) = t.chw()?;
    let plane = h * w;
    let src = t.data();
    let data = (0..plane)
        .map(|p| {
            let mut best = 0;
            for c in 1..k {
                if src[c * plane + p] > src[best * plane + p] {
                    best = c;
                }
            }
            best as u32
        })
        .collect();
    LabelMap::new(h, w, data)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn softmax_of_zeros_is_uniform() {
        let t = Tensor::<f32>::zeros(&[4, 3, 2]);
        let p = softmax_channels(&t).unwrap();
        assert!(p.data().iter().all(|&v| (v - 0.25).abs() < 1e-7));
    }

    #[test]
    fn softmax_two_channel_ln3() {
        let t = Tensor::new(vec![2, 1, 1], vec![0.0f64, 3f64.ln()]).unwrap();
        let p = softmax_channels(&t).unwrap();
        assert!((p.data()[0] - 0.25).abs() < 1e-12);
        assert!((p.data()[1] - 0.75).abs() < 1e-12);
    }

    #[test]
    fn softmax_shift_invariant_per_pixel() {
        let base = vec![0.3f64, -1.0, 2.0, 0.5, 0.1, 0.2];
        let a = Tensor::new(vec![3, 1, 2], base.clone()).unwrap();
        // shift pixel 1 only (indices 1, 3, 5)
        let shifted: Vec<f64> = base
            .iter()
            .enumerate()
            .map(|(i, v)| if i % 2 == 1 { v + 7.5 } else { *v })
            .collect();
        let b = Tensor::new(vec![3, 1, 2], shifted).unwrap();
        let pa = softmax_channels(&a).unwrap();
        let pb = softmax_channels(&b).unwrap();
        assert!(pa.max_abs_diff(&pb) < 1e-12);
    }

    #[test]
    fn softmax_rejects_non_finite() {
        let t = Tensor::new(vec![2, 1, 1], vec![0.0f32, f32::NAN]).unwrap();
        assert!(matches!(softmax_channels(&t), Err(Error::NonFinite(_))));
    }

    #[test]
    fn mask_iou_counts_overlap() {
        assert_eq!(mask_iou(&[1, 2, 3], &[1, 2, 3]), 1.0);
        assert_eq!(mask_iou(&[1, 2], &[3, 4]), 0.0);
        assert_eq!(mask_iou(&[1, 2, 3, 4], &[3, 4, 5]), 2.0 / 5.0);
        assert_eq!(mask_iou(&[], &[]), 0.0);
    }

    #[test]
    fn tensor_shape_validation() {
        assert!(Tensor::new(vec![2, 3], vec![0.0f32; 5]).is_err());
        assert!(matches!(
            Tensor::new(vec![1, 1, 1, 1, 1], vec![0.0f32]),
            Err(Error::BadRank(5))
        ));
        assert!(Tensor::new(vec![0, 3], Vec::<f32>::new()).is_err());
    }

    #[test]
    fn label_map_tensor_roundtrip() {
        let m = LabelMap::new(2, 2, vec![0, 1, 255, 3]).unwrap();
        assert_eq!(LabelMap::from_tensor(&m.to_tensor()).unwrap(), m);
        let bad = Tensor::new(vec![1, 2], vec![0.5f32, 1.0]).unwrap();
        assert!(LabelMap::from_tensor(&bad).is_err());
    }

    proptest! {
        #[test]
        fn softmax_sums_to_one_and_keeps_argmax(
            k in 1usize..6,
            vals in proptest::collection::vec(-20.0f32..20.0, 6 * 9),
        ) {
            let t = Tensor::new(vec![k, 3, 3], vals[..k * 9].to_vec()).unwrap();
            let p = softmax_channels(&t).unwrap();
            for px in 0..9 {
                let s: f32 = (0..k).map(|c| p.data()[c * 9 + px]).sum();
                prop_assert!((s - 1.0).abs() < 1e-6);
            }
            prop_assert_eq!(argmax_channels(&t).unwrap(), argmax_channels(&p).unwrap());
        }
    }
}
