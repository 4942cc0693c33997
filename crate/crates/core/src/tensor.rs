//! Row-major dense tensors and the handful of linear operations the
//! attention engine needs.
//!
//! Storage is always a flat buffer in row-major order (last axis has unit
//! stride). Only `f32` and `f64` element types exist; `f32` matmul
//! accumulates in `f64` internally so the naive oracle stays a trustworthy
//! reference for the streamed paths.

use std::fmt::Debug;

use num_traits::Float;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Matmuls with at least this many multiply-adds are split across threads.
const PAR_MATMUL_WORK: usize = 1 << 18;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DType {
    Float32,
    Float64,
}

impl DType {
    pub fn size_bytes(self) -> usize {
        match self {
            DType::Float32 => 4,
            DType::Float64 => 8,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            DType::Float32 => "float32",
            DType::Float64 => "float64",
        }
    }
}

impl std::str::FromStr for DType {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "float32" | "f32" => Ok(DType::Float32),
            "float64" | "f64" => Ok(DType::Float64),
            other => Err(Error::Config(format!("unknown dtype {other:?}"))),
        }
    }
}

impl std::fmt::Display for DType {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

/// Scalar element of a [`Tensor`].
pub trait Element: Float + std::ops::AddAssign + Default + Debug + Send + Sync + 'static {
    const DTYPE: DType;

    /// Exact conversion to `f64`.
    fn widen(self) -> f64;

    /// Round an `f64` to this type (nearest-even).
    fn narrow(v: f64) -> Self;
}

impl Element for f32 {
    const DTYPE: DType = DType::Float32;

    #[inline]
    fn widen(self) -> f64 {
        self as f64
    }

    #[inline]
    fn narrow(v: f64) -> Self {
        v as f32
    }
}

impl Element for f64 {
    const DTYPE: DType = DType::Float64;

    #[inline]
    fn widen(self) -> f64 {
        self
    }

    #[inline]
    fn narrow(v: f64) -> Self {
        v
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Tensor<T> {
    shape: Vec<usize>,
    data: Vec<T>,
}

impl<T: Element> Tensor<T> {
    /// Builds a tensor, checking the shape against the buffer and that
    /// every value is finite.
    pub fn new(shape: Vec<usize>, data: Vec<T>) -> Result<Self> {
        let t = Self::with_non_finite(shape, data)?;
        t.ensure_finite("Tensor::new")?;
        Ok(t)
    }

    /// Like [`Tensor::new`] but lets infinities and NaNs through. Only used
    /// by operations whose contract allows non-finite results.
    pub fn with_non_finite(shape: Vec<usize>, data: Vec<T>) -> Result<Self> {
        if shape.contains(&0) {
            return Err(Error::Config(format!(
                "tensor axes must be >= 1, got {shape:?}"
            )));
        }
        let expected: usize = shape.iter().product();
        if expected != data.len() {
            return Err(Error::Length {
                op: "Tensor::new",
                lhs: expected,
                rhs: data.len(),
            });
        }
        Ok(Self { shape, data })
    }

    pub fn zeros(shape: Vec<usize>) -> Result<Self> {
        let n = shape.iter().product();
        Self::new(shape, vec![T::zero(); n])
    }

    pub fn from_fn(shape: Vec<usize>, mut f: impl FnMut(usize) -> T) -> Result<Self> {
        let n = shape.iter().product();
        Self::new(shape, (0..n).map(&mut f).collect())
    }

    /// Rank-2 tensor from nested rows. Handy in tests.
    pub fn from_rows(rows: &[&[T]]) -> Result<Self> {
        let m = rows.len();
        let n = rows.first().map_or(0, |r| r.len());
        if let Some(bad) = rows.iter().find(|r| r.len() != n) {
            return Err(Error::Length {
                op: "Tensor::from_rows",
                lhs: n,
                rhs: bad.len(),
            });
        }
        Self::new(vec![m, n], rows.iter().flat_map(|r| r.iter().copied()).collect())
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    pub fn dtype(&self) -> DType {
        T::DTYPE
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

    /// `(rows, cols)` of a rank-2 tensor.
    pub fn dims2(&self, op: &'static str) -> Result<(usize, usize)> {
        match self.shape[..] {
            [m, n] => Ok((m, n)),
            _ => Err(Error::Rank {
                op,
                expected: 2,
                shape: self.shape.clone(),
            }),
        }
    }

    pub fn row(&self, i: usize) -> &[T] {
        let n = self.shape[self.shape.len() - 1];
        &self.data[i * n..(i + 1) * n]
    }

    pub fn at2(&self, i: usize, j: usize) -> T {
        self.data[i * self.shape[1] + j]
    }

    pub fn reshape(self, shape: Vec<usize>) -> Result<Self> {
        let n: usize = shape.iter().product();
        if n != self.data.len() || shape.contains(&0) {
            return Err(Error::Shape {
                op: "reshape",
                lhs: self.shape,
                rhs: shape,
            });
        }
        Ok(Self {
            shape,
            data: self.data,
        })
    }

    pub fn map(&self, f: impl Fn(T) -> T) -> Self {
        Self {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn cast<U: Element>(&self) -> Tensor<U> {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|v| U::narrow(v.widen())).collect(),
        }
    }

    pub fn ensure_finite(&self, op: &'static str) -> Result<()> {
        match self.data.iter().position(|v| !v.is_finite()) {
            None => Ok(()),
            Some(index) => Err(Error::NonFinite {
                op,
                index,
                value: self.data[index].widen(),
            }),
        }
    }
}

/// Standard matrix product `a · b`.
pub fn matmul<T: Element>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    let (m, ka) = a.dims2("matmul")?;
    let (kb, n) = b.dims2("matmul")?;
    if ka != kb {
        return Err(Error::Shape {
            op: "matmul",
            lhs: a.shape.clone(),
            rhs: b.shape.clone(),
        });
    }
    let mut out = vec![T::zero(); m * n];
    let kernel = |(i, out_row): (usize, &mut [T])| {
        let mut acc = vec![0.0f64; n];
        let a_row = &a.data[i * ka..(i + 1) * ka];
        for (p, &a_ip) in a_row.iter().enumerate() {
            let a_ip = a_ip.widen();
            let b_row = &b.data[p * n..(p + 1) * n];
            for (acc_j, &b_pj) in acc.iter_mut().zip(b_row) {
                *acc_j += a_ip * b_pj.widen();
            }
        }
        for (o, v) in out_row.iter_mut().zip(acc) {
            *o = T::narrow(v);
        }
    };
    if m * n * ka >= PAR_MATMUL_WORK {
        out.par_chunks_mut(n).enumerate().for_each(kernel);
    } else {
        out.chunks_mut(n).enumerate().for_each(kernel);
    }
    Ok(Tensor {
        shape: vec![m, n],
        data: out,
    })
}

pub fn transpose<T: Element>(a: &Tensor<T>) -> Result<Tensor<T>> {
    let (m, n) = a.dims2("transpose")?;
    let mut data = Vec::with_capacity(m * n);
    for j in 0..n {
        data.extend((0..m).map(|i| a.data[i * n + j]));
    }
    Ok(Tensor {
        shape: vec![n, m],
        data,
    })
}

/// Result of rounding a tensor to binary16.
#[derive(Debug, Clone, PartialEq)]
pub struct Quantized {
    pub tensor: Tensor<f32>,
    /// Finite inputs that rounded to an infinity.
    pub overflow_count: usize,
}

/// Round one value to the nearest binary16 (ties to even), kept as `f32`.
#[inline]
pub fn round_f16(v: f32) -> f32 {
    half::f16::from_f32(v).to_f32()
}

/// Replaces each element by its nearest IEEE-754 binary16 value. Values
/// beyond the binary16 range become infinities and are counted, not
/// rejected.
pub fn quantize_f16(a: &Tensor<f32>) -> Quantized {
    let mut overflow_count = 0;
    let data = a
        .data
        .iter()
        .map(|&v| {
            let q = round_f16(v);
            if v.is_finite() && q.is_infinite() {
                overflow_count += 1;
            }
            q
        })
        .collect();
    Quantized {
        tensor: Tensor {
            shape: a.shape.clone(),
            data,
        },
        overflow_count,
    }
}

/// Elementwise comparison summary produced by [`allclose`].
#[derive(Debug, Clone)]
pub struct CloseReport {
    pub all_close: bool,
    pub max_abs_diff: f64,
    /// Flat index of the element with the largest absolute difference.
    pub worst_index: Option<usize>,
    /// Flat index of the first element violating the tolerance.
    pub first_violation: Option<usize>,
    abs_diffs: Vec<f64>,
}

impl CloseReport {
    pub fn len(&self) -> usize {
        self.abs_diffs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.abs_diffs.is_empty()
    }

    /// Number of elements with `|a - b| <= threshold`.
    pub fn count_within(&self, threshold: f64) -> usize {
        self.abs_diffs.iter().filter(|&&d| d <= threshold).count()
    }

    pub fn fraction_within(&self, threshold: f64) -> f64 {
        self.count_within(threshold) as f64 / self.abs_diffs.len() as f64
    }
}

/// `true` iff `|a_i - b_i| <= atol + rtol * |b_i|` everywhere. NaNs never
/// compare close.
pub fn allclose<T: Element>(
    a: &Tensor<T>,
    b: &Tensor<T>,
    rtol: f64,
    atol: f64,
) -> Result<CloseReport> {
    if a.shape != b.shape {
        return Err(Error::Shape {
            op: "allclose",
            lhs: a.shape.clone(),
            rhs: b.shape.clone(),
        });
    }
    let mut report = CloseReport {
        all_close: true,
        max_abs_diff: 0.0,
        worst_index: None,
        first_violation: None,
        abs_diffs: Vec::with_capacity(a.len()),
    };
    for (i, (&x, &y)) in a.data.iter().zip(&b.data).enumerate() {
        let (x, y) = (x.widen(), y.widen());
        let d = if x == y { 0.0 } else { (x - y).abs() };
        let d = if d.is_nan() { f64::INFINITY } else { d };
        if d > atol + rtol * y.abs() || y.is_nan() {
            report.all_close = false;
            report.first_violation.get_or_insert(i);
        }
        if report.worst_index.is_none() || d > report.max_abs_diff {
            report.max_abs_diff = d;
            report.worst_index = Some(i);
        }
        report.abs_diffs.push(d);
    }
    Ok(report)
}

/// A tensor of either supported element type, as read from disk.
#[derive(Debug, Clone, PartialEq)]
pub enum AnyTensor {
    F32(Tensor<f32>),
    F64(Tensor<f64>),
}

impl AnyTensor {
    pub fn dtype(&self) -> DType {
        match self {
            AnyTensor::F32(_) => DType::Float32,
            AnyTensor::F64(_) => DType::Float64,
        }
    }

    pub fn shape(&self) -> &[usize] {
        match self {
            AnyTensor::F32(t) => t.shape(),
            AnyTensor::F64(t) => t.shape(),
        }
    }
}

impl From<Tensor<f32>> for AnyTensor {
    fn from(t: Tensor<f32>) -> Self {
        AnyTensor::F32(t)
    }
}

impl From<Tensor<f64>> for AnyTensor {
    fn from(t: Tensor<f64>) -> Self {
        AnyTensor::F64(t)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::XorShift64Star;
    use proptest::prelude::*;

    fn t2(rows: &[&[f64]]) -> Tensor<f64> {
        Tensor::from_rows(rows).unwrap()
    }

    fn triple_loop(a: &Tensor<f64>, b: &Tensor<f64>) -> Tensor<f64> {
        let (m, k) = a.dims2("t").unwrap();
        let (_, n) = b.dims2("t").unwrap();
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                let mut s = 0.0;
                for p in 0..k {
                    s += a.at2(i, p) * b.at2(p, j);
                }
                out[i * n + j] = s;
            }
        }
        Tensor::new(vec![m, n], out).unwrap()
    }

    #[test]
    fn matmul_identity() {
        let i2 = t2(&[&[1.0, 0.0], &[0.0, 1.0]]);
        let a = t2(&[&[1.0, 2.0], &[3.0, 4.0]]);
        assert_eq!(matmul(&i2, &a).unwrap(), a);
    }

    #[test]
    fn matmul_row_times_column() {
        let a = t2(&[&[1.0, 2.0]]);
        let b = t2(&[&[3.0], &[4.0]]);
        assert_eq!(matmul(&a, &b).unwrap().data(), &[11.0]);
    }

    #[test]
    fn matmul_matches_triple_loop_exactly() {
        let mut rng = XorShift64Star::new(7);
        let a = Tensor::from_fn(vec![7, 5], |_| rng.next_normal()).unwrap();
        let b = Tensor::from_fn(vec![5, 3], |_| rng.next_normal()).unwrap();
        assert_eq!(matmul(&a, &b).unwrap(), triple_loop(&a, &b));
    }

    #[test]
    fn matmul_large_parallel_path_matches_oracle() {
        let mut rng = XorShift64Star::new(8);
        let a = Tensor::from_fn(vec![80, 70], |_| (rng.next_u64() % 9) as f64 - 4.0).unwrap();
        let b = Tensor::from_fn(vec![70, 60], |_| (rng.next_u64() % 9) as f64 - 4.0).unwrap();
        assert_eq!(matmul(&a, &b).unwrap(), triple_loop(&a, &b));
    }

    #[test]
    fn matmul_shape_error_names_both_shapes() {
        let a = Tensor::<f64>::zeros(vec![2, 3]).unwrap();
        let b = Tensor::<f64>::zeros(vec![2, 3]).unwrap();
        let err = matmul(&a, &b).unwrap_err();
        assert_eq!(
            err,
            Error::Shape {
                op: "matmul",
                lhs: vec![2, 3],
                rhs: vec![2, 3]
            }
        );
        assert!(err.to_string().contains("[2, 3] vs [2, 3]"));
    }

    #[test]
    fn matmul_f32_accumulates_wide() {
        // 1 + 2^-24 * 2 is lost when summed left-to-right in f32.
        let a = Tensor::<f32>::from_rows(&[&[1.0, 1.0, 1.0]]).unwrap();
        let tiny = 2f32.powi(-24);
        let b = Tensor::<f32>::from_rows(&[&[1.0], &[tiny], &[tiny]]).unwrap();
        let c = matmul(&a, &b).unwrap();
        assert_eq!(c.data()[0], 1.0 + 2.0 * tiny);
    }

    #[test]
    fn transpose_examples() {
        let a = t2(&[&[1.0, 2.0], &[3.0, 4.0]]);
        assert_eq!(transpose(&a).unwrap(), t2(&[&[1.0, 3.0], &[2.0, 4.0]]));
        let row = t2(&[&[1.0, 2.0, 3.0]]);
        assert_eq!(transpose(&row).unwrap().shape(), &[3, 1]);
        let r3 = Tensor::<f64>::zeros(vec![1, 2, 3]).unwrap();
        assert!(matches!(transpose(&r3), Err(Error::Rank { .. })));
    }

    #[test]
    fn new_rejects_bad_buffers() {
        assert!(Tensor::<f64>::new(vec![2, 2], vec![0.0; 3]).is_err());
        assert!(Tensor::<f64>::new(vec![0, 2], vec![]).is_err());
        assert!(matches!(
            Tensor::<f64>::new(vec![2], vec![1.0, f64::NAN]),
            Err(Error::NonFinite { index: 1, .. })
        ));
    }

    /// Decodes every binary16 bit pattern by hand and picks the nearest,
    /// ties to even mantissa. Infinity stands in as 65536 with an even
    /// mantissa, which is exactly how RNE overflows.
    fn f16_oracle(x: f32) -> f32 {
        let x = x as f64;
        let mut best: Option<(f64, u16, f64)> = None;
        for bits in 0u16..0x7c00 {
            let exp = (bits >> 10) as i32;
            let mant = (bits & 0x3ff) as f64;
            let mag = if exp == 0 {
                mant * 2f64.powi(-24)
            } else {
                (1.0 + mant / 1024.0) * 2f64.powi(exp - 15)
            };
            for (val, b) in [(mag, bits), (-mag, bits | 0x8000)] {
                let d = (val - x).abs();
                let better = match best {
                    None => true,
                    Some((bd, bb, _)) => d < bd || (d == bd && (b & 1) == 0 && (bb & 1) == 1),
                };
                if better {
                    best = Some((d, b, val));
                }
            }
        }
        let (d, b, val) = best.unwrap();
        let d_inf = (65536.0 - x.abs()).abs();
        if d_inf < d || (d_inf == d && (b & 1) == 1) {
            return f32::INFINITY.copysign(x as f32);
        }
        val as f32
    }

    #[test]
    fn quantize_examples() {
        assert_eq!(f16_oracle(0.1) as f64, 0.0999755859375);
        let t = Tensor::new(vec![3], vec![1.0f32, 0.1, 70000.0]).unwrap();
        let q = quantize_f16(&t);
        assert_eq!(q.tensor.data()[0], 1.0);
        assert_eq!(q.tensor.data()[1] as f64, 0.0999755859375);
        assert_eq!(q.tensor.data()[2], f32::INFINITY);
        assert_eq!(q.overflow_count, 1);
    }

    #[test]
    fn quantize_agrees_with_bit_oracle_on_awkward_values() {
        let cases = [
            0.0f32, -0.0, 1.0, 0.1, -0.3, 65504.0, 65519.0, 65520.0, 6.1e-5, 5.96e-8, 2.98e-8,
            1.0 + 2f32.powi(-11), 1.0 + 3.0 * 2f32.powi(-11), 1234.5678, -7.77e-6,
        ];
        for &c in &cases {
            assert_eq!(round_f16(c), f16_oracle(c), "value {c}");
        }
        let mut rng = XorShift64Star::new(3);
        for _ in 0..200 {
            let v = (rng.next_normal() * 10f64.powi((rng.next_u64() % 10) as i32 - 5)) as f32;
            assert_eq!(round_f16(v), f16_oracle(v), "value {v}");
        }
    }

    #[test]
    fn allclose_examples() {
        let a = Tensor::new(vec![2], vec![1.0f64, 2.0]).unwrap();
        let r = allclose(&a, &a, 0.0, 0.0).unwrap();
        assert!(r.all_close);
        assert_eq!(r.max_abs_diff, 0.0);

        let b = a.map(|v| v + 1e-3);
        assert!(allclose(&b, &a, 0.0, 1e-2).unwrap().all_close);
        assert!(!allclose(&b, &a, 0.0, 1e-4).unwrap().all_close);

        let d = Tensor::new(vec![2], vec![0.005f64, 0.02]).unwrap();
        let z = Tensor::zeros(vec![2]).unwrap();
        let r = allclose(&d, &z, 0.0, 0.0).unwrap();
        assert_eq!(r.count_within(0.01), 1);
        assert_eq!(r.fraction_within(0.01), 0.5);
        assert_eq!(r.worst_index, Some(1));

        let c = Tensor::<f64>::zeros(vec![3]).unwrap();
        assert!(allclose(&a, &c, 0.0, 0.0).is_err());
    }

    proptest! {
        #[test]
        fn transpose_is_involution(m in 1usize..9, n in 1usize..9, seed in any::<u64>()) {
            let mut rng = XorShift64Star::new(seed);
            let a = Tensor::from_fn(vec![m, n], |_| rng.next_normal()).unwrap();
            prop_assert_eq!(transpose(&transpose(&a).unwrap()).unwrap(), a);
        }

        #[test]
        fn quantize_is_idempotent(v in -1.0e5f32..1.0e5) {
            let t = Tensor::new(vec![1], vec![v]).unwrap();
            let once = quantize_f16(&t).tensor;
            let twice = quantize_f16(&once).tensor;
            prop_assert_eq!(once.data()[0].to_bits(), twice.data()[0].to_bits());
        }

        #[test]
        fn matmul_integer_inputs_exact(m in 1usize..6, k in 1usize..6, n in 1usize..6, seed in any::<u64>()) {
            let mut rng = XorShift64Star::new(seed);
            let a = Tensor::from_fn(vec![m, k], |_| (rng.next_u64() % 21) as f64 - 10.0).unwrap();
            let b = Tensor::from_fn(vec![k, n], |_| (rng.next_u64() % 21) as f64 - 10.0).unwrap();
            prop_assert_eq!(matmul(&a, &b).unwrap(), triple_loop(&a, &b));
        }
    }
}
