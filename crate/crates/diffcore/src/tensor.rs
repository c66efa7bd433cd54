//! Dense row-major tensors and the scalar trait shared by the f32 training
//! path and the f64 gradient-check path.

use std::fmt::Debug;

use num_traits::{Float as NumFloat, FromPrimitive, ToPrimitive};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{DiffError, Result};

/// Floating point element type. Implemented for `f32` and `f64` only.
pub trait Float:
    NumFloat + FromPrimitive + ToPrimitive + Default + Debug + Send + Sync + 'static + std::iter::Sum
{
    const DTYPE: &'static str;

    /// `c = alpha * a @ b + beta * c` on strided row/column views.
    ///
    /// # Safety
    /// Pointers must address valid memory for the given extents and strides.
    #[allow(clippy::too_many_arguments)]
    unsafe fn gemm(
        m: usize,
        k: usize,
        n: usize,
        alpha: Self,
        a: *const Self,
        rsa: isize,
        csa: isize,
        b: *const Self,
        rsb: isize,
        csb: isize,
        beta: Self,
        c: *mut Self,
        rsc: isize,
        csc: isize,
    );

    /// `exp`, allowed to trade the last ulp or two for speed.
    fn fast_exp(self) -> Self;
    fn fast_tanh(self) -> Self;

    fn from_f64_lossy(v: f64) -> Self;
    fn to_f64_lossy(self) -> f64;
    fn write_le(self, out: &mut Vec<u8>);
    fn read_le(bytes: &[u8]) -> Self;
    const BYTES: usize;
}

impl Float for f32 {
    const DTYPE: &'static str = "f32";
    const BYTES: usize = 4;

    unsafe fn gemm(
        m: usize,
        k: usize,
        n: usize,
        alpha: f32,
        a: *const f32,
        rsa: isize,
        csa: isize,
        b: *const f32,
        rsb: isize,
        csb: isize,
        beta: f32,
        c: *mut f32,
        rsc: isize,
        csc: isize,
    ) {
        matrixmultiply::sgemm(m, k, n, alpha, a, rsa, csa, b, rsb, csb, beta, c, rsc, csc);
    }

    #[inline]
    fn fast_exp(self) -> f32 {
        expf_poly(self)
    }
    #[inline]
    fn fast_tanh(self) -> f32 {
        let e = expf_poly(2.0 * self.clamp(-9.0, 9.0));
        1.0 - 2.0 / (e + 1.0)
    }

    fn from_f64_lossy(v: f64) -> f32 {
        v as f32
    }
    fn to_f64_lossy(self) -> f64 {
        self as f64
    }
    fn write_le(self, out: &mut Vec<u8>) {
        out.extend_from_slice(&self.to_le_bytes());
    }
    fn read_le(bytes: &[u8]) -> f32 {
        f32::from_le_bytes(bytes.try_into().expect("4 bytes"))
    }
}

impl Float for f64 {
    const DTYPE: &'static str = "f64";
    const BYTES: usize = 8;

    unsafe fn gemm(
        m: usize,
        k: usize,
        n: usize,
        alpha: f64,
        a: *const f64,
        rsa: isize,
        csa: isize,
        b: *const f64,
        rsb: isize,
        csb: isize,
        beta: f64,
        c: *mut f64,
        rsc: isize,
        csc: isize,
    ) {
        matrixmultiply::dgemm(m, k, n, alpha, a, rsa, csa, b, rsb, csb, beta, c, rsc, csc);
    }

    #[inline]
    fn fast_exp(self) -> f64 {
        self.exp()
    }
    #[inline]
    fn fast_tanh(self) -> f64 {
        self.tanh()
    }

    fn from_f64_lossy(v: f64) -> f64 {
        v
    }
    fn to_f64_lossy(self) -> f64 {
        self
    }
    fn write_le(self, out: &mut Vec<u8>) {
        out.extend_from_slice(&self.to_le_bytes());
    }
    fn read_le(bytes: &[u8]) -> f64 {
        f64::from_le_bytes(bytes.try_into().expect("8 bytes"))
    }
}

/// Branch-free single precision exp (range reduction plus a degree 7
/// polynomial), within a few ulp of libm and vectorizable.
#[inline]
fn expf_poly(x: f32) -> f32 {
    let x = x.clamp(-87.0, 88.0);
    // Round to nearest via the 1.5 * 2^23 shifter; `round` is a libm call
    // on baseline x86-64.
    const SHIFTER: f32 = 12_582_912.0;
    let n = (x * std::f32::consts::LOG2_E + SHIFTER) - SHIFTER;
    let r = x - n * 0.693_359_4 + n * 2.121_944_4e-4;
    let mut p = 1.987_569_1e-4_f32;
    p = p * r + 1.398_199_9e-3;
    p = p * r + 8.333_452e-3;
    p = p * r + 4.166_579_6e-2;
    p = p * r + 1.666_666_5e-1;
    p = p * r + 5e-1;
    p = p * r * r + r + 1.0;
    p * f32::from_bits(((n as i32 + 127) as u32) << 23)
}

/// Shorthand for constructing a scalar from an f64 literal.
#[inline]
pub fn lit<T: Float>(v: f64) -> T {
    T::from_f64_lossy(v)
}

#[derive(Clone, Debug, PartialEq)]
pub struct Tensor<T> {
    shape: Vec<usize>,
    data: Vec<T>,
}

impl<T: Float> Tensor<T> {
    pub fn new(shape: Vec<usize>, data: Vec<T>) -> Result<Self> {
        let n: usize = shape.iter().product();
        if n != data.len() {
            return Err(DiffError::Shape {
                op: "tensor",
                shapes: vec![shape, vec![data.len()]],
            });
        }
        Ok(Self { shape, data })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        let n = shape.iter().product();
        Self { shape: shape.to_vec(), data: vec![T::zero(); n] }
    }

    pub fn full(shape: &[usize], v: T) -> Self {
        let n = shape.iter().product();
        Self { shape: shape.to_vec(), data: vec![v; n] }
    }

    pub fn scalar(v: T) -> Self {
        Self { shape: vec![], data: vec![v] }
    }

    pub fn from_f64(shape: &[usize], data: &[f64]) -> Result<Self> {
        Self::new(shape.to_vec(), data.iter().map(|&v| T::from_f64_lossy(v)).collect())
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
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

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    /// Value of a 0-d or single-element tensor.
    pub fn item(&self) -> T {
        self.data[0]
    }

    pub fn reshaped(mut self, shape: &[usize]) -> Result<Self> {
        let n: usize = shape.iter().product();
        if n != self.data.len() {
            return Err(DiffError::Shape {
                op: "reshape",
                shapes: vec![self.shape, shape.to_vec()],
            });
        }
        self.shape = shape.to_vec();
        Ok(self)
    }

    pub fn cast<U: Float>(&self) -> Tensor<U> {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|v| U::from_f64_lossy(v.to_f64_lossy())).collect(),
        }
    }

    pub fn to_f64_vec(&self) -> Vec<f64> {
        self.data.iter().map(|v| v.to_f64_lossy()).collect()
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Bitwise equality, stricter than `==` for NaN and signed zero.
    pub fn bit_eq(&self, other: &Self) -> bool {
        self.shape == other.shape
            && self
                .data
                .iter()
                .zip(&other.data)
                .all(|(a, b)| a.to_f64_lossy().to_bits() == b.to_f64_lossy().to_bits())
    }

    pub fn sq_norm(&self) -> f64 {
        self.data.iter().map(|v| v.to_f64_lossy().powi(2)).sum()
    }
}

/// Initialization schemes for [`seeded_init`].
#[derive(Clone, Copy, Debug, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "kebab-case", tag = "kind")]
pub enum Init {
    /// N(0, 1/fan_in) where fan_in is the product of all but the last extent.
    NormalScaled,
    /// N(0, std^2).
    Normal { std: f64 },
    Zeros,
    Ones,
}

/// Deterministic initialization. Values are drawn in f64 from ChaCha8 and then
/// cast, so an f32 tensor is exactly the rounding of its f64 counterpart.
pub fn seeded_init<T: Float>(shape: &[usize], seed: u64, init: Init) -> Tensor<T> {
    let n: usize = shape.iter().product();
    let std = match init {
        Init::Zeros => return Tensor::zeros(shape),
        Init::Ones => return Tensor::full(shape, T::one()),
        Init::Normal { std } => std,
        Init::NormalScaled => {
            let fan_in: usize = if shape.len() <= 1 {
                1
            } else {
                shape[..shape.len() - 1].iter().product()
            };
            1.0 / (fan_in.max(1) as f64).sqrt()
        }
    };
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let data = (0..n)
        .map(|_| {
            let z: f64 = StandardNormal.sample(&mut rng);
            T::from_f64_lossy(z * std)
        })
        .collect();
    Tensor { shape: shape.to_vec(), data }
}

/// 64-bit FNV-1a, used to derive stable per-name seeds.
pub fn fnv1a(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for &b in bytes {
        h ^= b as u64;
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zeros_init() {
        let t: Tensor<f64> = seeded_init(&[2, 2], 7, Init::Zeros);
        assert_eq!(t.data(), &[0.0; 4]);
    }

    #[test]
    fn init_is_deterministic_and_seed_sensitive() {
        let a: Tensor<f32> = seeded_init(&[4], 1, Init::NormalScaled);
        let b: Tensor<f32> = seeded_init(&[4], 1, Init::NormalScaled);
        let c: Tensor<f32> = seeded_init(&[4], 2, Init::NormalScaled);
        assert!(a.bit_eq(&b));
        assert_ne!(a.data(), c.data());
    }

    #[test]
    fn f32_init_is_rounded_f64_init() {
        let a: Tensor<f32> = seeded_init(&[3, 5], 11, Init::NormalScaled);
        let b: Tensor<f64> = seeded_init(&[3, 5], 11, Init::NormalScaled);
        assert!(a.bit_eq(&b.cast::<f32>()));
    }

    #[test]
    fn fast_exp_tracks_libm() {
        let mut worst = 0.0f64;
        for i in -8000..=8000 {
            let x = i as f32 * 0.01;
            let rel = ((x.fast_exp() as f64) - (x as f64).exp()).abs() / (x as f64).exp();
            worst = worst.max(rel);
            let t = x.fast_tanh() as f64 - (x as f64).tanh();
            assert!(t.abs() < 3e-7, "tanh({x}) off by {t}");
        }
        assert!(worst < 5e-7, "{worst}");
    }

    #[test]
    fn shape_mismatch_rejected() {
        assert!(Tensor::<f32>::new(vec![2, 3], vec![0.0; 5]).is_err());
    }
}
