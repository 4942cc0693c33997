//! Chunked evaluation of normalized contractions.
//!
//! A [`StreamState`] holds the pair `(o, z)`: the running numerator
//! `sum a1(x_i) * y_i` and the running denominator sum `sum a2(x_i)`.
//! Consuming a chunk only adds to both, so chunks can be consumed in any
//! grouping and partial states merged by addition. The tail
//! `o / b(z + eps)` is applied once, at [`StreamState::finalize`].
//!
//! [`SafeStreamState`] is the SoftMax-only variant that also tracks the
//! running maximum score `m` and keeps `(o, z)` scaled by `e^-m`.
//!
//! States are generic over the accumulator scalar. `f64` and `f32` are the
//! normal choices; `BigRational` gives an exact mode for specs whose
//! activations are rational maps.

use std::fmt::Debug;
use std::ops::{AddAssign, Mul};

use num_rational::BigRational;
use num_traits::Zero;

use crate::error::{Error, Result};
use crate::normalizers::{aggregate_exact, rational, Activate, NormalizerSpec};
use crate::tensor::Element;

/// Accumulator scalar.
pub trait Accum: Clone + Debug + Zero + AddAssign + Mul<Output = Self> {}

impl<A: Clone + Debug + Zero + AddAssign + Mul<Output = A>> Accum for A {}

/// Conversion from an input scalar into the accumulator scalar.
pub trait Lift<T> {
    fn lift(t: &T) -> Self;
}

impl<A: Element, T: Element> Lift<T> for A {
    #[inline]
    fn lift(t: &T) -> Self {
        A::narrow(t.widen())
    }
}

impl Lift<BigRational> for BigRational {
    fn lift(t: &BigRational) -> Self {
        t.clone()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum StreamMode {
    /// `o` is a scalar: values are one number per score.
    Contraction,
    /// `o` is a row of length `k`: values are `k`-vectors per score.
    Attention,
}

#[derive(Debug, Clone, PartialEq)]
pub struct StreamState<A = f64> {
    mode: StreamMode,
    pub o: Vec<A>,
    pub z: A,
}

impl<A: Accum> StreamState<A> {
    pub fn init(mode: StreamMode, k: usize) -> Result<Self> {
        let k = match mode {
            StreamMode::Contraction => 1,
            StreamMode::Attention if k == 0 => {
                return Err(Error::Config("attention state needs k >= 1".into()))
            }
            StreamMode::Attention => k,
        };
        Ok(Self {
            mode,
            o: vec![A::zero(); k],
            z: A::zero(),
        })
    }

    pub fn contraction() -> Self {
        Self {
            mode: StreamMode::Contraction,
            o: vec![A::zero()],
            z: A::zero(),
        }
    }

    pub fn mode(&self) -> StreamMode {
        self.mode
    }

    /// Value dimension (1 in contraction mode).
    pub fn k(&self) -> usize {
        self.o.len()
    }

    /// `o += sum a1(s_i) * v_i`, `z += sum a2(s_i)`. `values` holds one
    /// row of length `k` per score, row-major. An empty chunk is a no-op.
    pub fn accumulate<T>(&mut self, spec: &NormalizerSpec, scores: &[T], values: &[T]) -> Result<()>
    where
        T: Activate,
        A: Lift<T>,
    {
        let k = self.o.len();
        if values.len() != scores.len() * k {
            return Err(Error::Length {
                op: "accumulate",
                lhs: scores.len() * k,
                rhs: values.len(),
            });
        }
        for (s, v_row) in scores.iter().zip(values.chunks_exact(k)) {
            let w = A::lift(&T::activate(&spec.a1, s)?);
            self.z += A::lift(&T::activate(&spec.a2, s)?);
            for (o, v) in self.o.iter_mut().zip(v_row) {
                *o += w.clone() * A::lift(v);
            }
        }
        Ok(())
    }

    /// Componentwise sum of two partial states.
    pub fn merge(mut self, other: Self) -> Result<Self> {
        if self.mode != other.mode || self.o.len() != other.o.len() {
            return Err(Error::StateMismatch(format!(
                "{:?}/k={} vs {:?}/k={}",
                self.mode,
                self.o.len(),
                other.mode,
                other.o.len()
            )));
        }
        for (a, b) in self.o.iter_mut().zip(other.o) {
            *a += b;
        }
        self.z += other.z;
        Ok(self)
    }
}

impl<A: Element> StreamState<A> {
    /// `o / b(z + eps)`.
    pub fn finalize(&self, spec: &NormalizerSpec) -> Result<Vec<A>> {
        self.finalize_row(spec, None)
    }

    pub(crate) fn finalize_row(&self, spec: &NormalizerSpec, row: Option<usize>) -> Result<Vec<A>> {
        let d = spec.denominator(self.z.widen(), row)?;
        Ok(self.o.iter().map(|&o| A::narrow(o.widen() / d)).collect())
    }

    pub fn finalize_scalar(&self, spec: &NormalizerSpec) -> Result<A> {
        if self.mode != StreamMode::Contraction {
            return Err(Error::StateMismatch("finalize_scalar on an attention state".into()));
        }
        Ok(self.finalize(spec)?[0])
    }
}

impl StreamState<BigRational> {
    /// Exact tail. Fails unless `b(z + eps)` is itself rational.
    pub fn finalize_exact(&self, spec: &NormalizerSpec) -> Result<Vec<BigRational>> {
        let d = aggregate_exact(&spec.b, &(self.z.clone() + rational(spec.denom_epsilon)))?;
        if d.is_zero() {
            return Err(Error::DegenerateDenominator {
                row: None,
                z: 0.0,
            });
        }
        Ok(self.o.iter().map(|o| o / &d).collect())
    }
}

/// SoftMax accumulator with a running maximum.
///
/// Invariant: `m` is the largest score consumed so far and `(o, z)` equal
/// the plain-state values times `e^-m`.
#[derive(Debug, Clone, PartialEq)]
pub struct SafeStreamState<A = f64> {
    pub o: Vec<A>,
    pub z: A,
    pub m: f64,
}

impl<A: Element> SafeStreamState<A> {
    pub fn new(k: usize) -> Self {
        Self {
            o: vec![A::zero(); k],
            z: A::zero(),
            m: f64::NEG_INFINITY,
        }
    }

    /// Rescale to the new maximum, then add `e^(s_i - m') * v_i`. The
    /// exponentials are evaluated in the score type `T`.
    pub fn accumulate<T: Element>(&mut self, scores: &[T], values: &[T]) -> Result<()> {
        let k = self.o.len();
        if values.len() != scores.len() * k {
            return Err(Error::Length {
                op: "accumulate_safe",
                lhs: scores.len() * k,
                rhs: values.len(),
            });
        }
        let Some(chunk_max) = scores.iter().map(|s| s.widen()).reduce(f64::max) else {
            return Ok(());
        };
        if chunk_max > self.m {
            if self.m > f64::NEG_INFINITY {
                let r = A::narrow((self.m - chunk_max).exp());
                self.z = self.z * r;
                self.o.iter_mut().for_each(|o| *o = *o * r);
            }
            self.m = chunk_max;
        }
        for (s, v_row) in scores.iter().zip(values.chunks_exact(k)) {
            let w = A::lift(&T::narrow(s.widen() - self.m).exp());
            self.z += w;
            for (o, v) in self.o.iter_mut().zip(v_row) {
                *o += w * A::lift(v);
            }
        }
        Ok(())
    }

    /// Joins two partial states over disjoint chunks.
    pub fn merge(self, other: Self) -> Result<Self> {
        if self.o.len() != other.o.len() {
            return Err(Error::StateMismatch(format!(
                "k={} vs k={}",
                self.o.len(),
                other.o.len()
            )));
        }
        if other.m == f64::NEG_INFINITY {
            return Ok(self);
        }
        if self.m == f64::NEG_INFINITY {
            return Ok(other);
        }
        let m = self.m.max(other.m);
        let (ra, rb) = (A::narrow((self.m - m).exp()), A::narrow((other.m - m).exp()));
        Ok(Self {
            o: self
                .o
                .iter()
                .zip(&other.o)
                .map(|(&a, &b)| a * ra + b * rb)
                .collect(),
            z: self.z * ra + other.z * rb,
            m,
        })
    }

    /// `o / (z + eps * e^-m)`; the `e^-m` factors cancel.
    pub fn finalize(&self, spec: &NormalizerSpec) -> Result<Vec<A>> {
        self.finalize_row(spec, None)
    }

    pub(crate) fn finalize_row(&self, spec: &NormalizerSpec, row: Option<usize>) -> Result<Vec<A>> {
        let z = self.z.widen();
        let eps = if spec.denom_epsilon == 0.0 {
            0.0
        } else {
            spec.denom_epsilon * (-self.m).exp()
        };
        let d = z + eps;
        if d == 0.0 || !d.is_finite() {
            return Err(Error::DegenerateDenominator { row, z });
        }
        Ok(self.o.iter().map(|&o| A::narrow(o.widen() / d)).collect())
    }
}

fn check_pair(x: &[f64], y: &[f64]) -> Result<()> {
    if x.len() != y.len() {
        return Err(Error::Length {
            op: "streamed_normalized_contraction",
            lhs: x.len(),
            rhs: y.len(),
        });
    }
    if x.is_empty() {
        return Err(Error::Empty("streamed contraction needs n >= 1"));
    }
    Ok(())
}

/// Normalized contraction computed chunk by chunk, ascending, with chunks of
/// `chunk_size` (the last one may be partial).
pub fn streamed_normalized_contraction(
    x: &[f64],
    y: &[f64],
    spec: &NormalizerSpec,
    chunk_size: usize,
) -> Result<f64> {
    if chunk_size == 0 {
        return Err(Error::Config("chunk size must be >= 1".into()));
    }
    check_pair(x, y)?;
    let mut state = StreamState::<f64>::contraction();
    for (xs, ys) in x.chunks(chunk_size).zip(y.chunks(chunk_size)) {
        state.accumulate(spec, xs, ys)?;
    }
    state.finalize_scalar(spec)
}

/// Streamed contraction with arbitrary chunk lengths (zero-length chunks
/// allowed). The lengths must sum to `x.len()`.
pub fn streamed_contraction_with_splits(
    x: &[f64],
    y: &[f64],
    spec: &NormalizerSpec,
    chunk_lens: &[usize],
) -> Result<f64> {
    check_pair(x, y)?;
    let total: usize = chunk_lens.iter().sum();
    if total != x.len() {
        return Err(Error::Length {
            op: "streamed_contraction_with_splits",
            lhs: x.len(),
            rhs: total,
        });
    }
    let mut state = StreamState::<f64>::contraction();
    let mut start = 0;
    for &len in chunk_lens {
        state.accumulate(spec, &x[start..start + len], &y[start..start + len])?;
        start += len;
    }
    state.finalize_scalar(spec)
}

/// The `(o, z)` state over all of `(x, y)` in exact rationals.
pub fn exact_contraction_state(
    x: &[BigRational],
    y: &[BigRational],
    spec: &NormalizerSpec,
    chunk_lens: &[usize],
) -> Result<StreamState<BigRational>> {
    if x.len() != y.len() {
        return Err(Error::Length {
            op: "exact_contraction_state",
            lhs: x.len(),
            rhs: y.len(),
        });
    }
    let mut state = StreamState::<BigRational>::contraction();
    let mut start = 0;
    for &len in chunk_lens {
        let end = (start + len).min(x.len());
        state.accumulate(spec, &x[start..end], &y[start..end])?;
        start = end;
    }
    Ok(state)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::normalizers::{normalized_contraction, rational_int};
    use crate::rng::XorShift64Star;
    use proptest::prelude::*;

    fn sph() -> NormalizerSpec {
        NormalizerSpec::spherical()
    }

    #[test]
    fn init_examples() {
        let c = StreamState::<f64>::init(StreamMode::Contraction, 0).unwrap();
        assert_eq!((c.o.clone(), c.z), (vec![0.0], 0.0));
        let a = StreamState::<f64>::init(StreamMode::Attention, 3).unwrap();
        assert_eq!((a.o.clone(), a.z), (vec![0.0; 3], 0.0));
        assert!(StreamState::<f64>::init(StreamMode::Attention, 0).is_err());
    }

    #[test]
    fn one_chunk_finalize_equals_direct_contraction() {
        let (x, y) = ([0.3, -1.2, 2.0], [1.0, 4.0, -0.5]);
        for spec in [sph(), NormalizerSpec::softmax(), NormalizerSpec::signed_l1()] {
            let mut s = StreamState::<f64>::contraction();
            s.accumulate(&spec, &x, &y).unwrap();
            let direct = normalized_contraction(&x, &y, &spec).unwrap();
            assert_eq!(s.finalize_scalar(&spec).unwrap(), direct);
        }
    }

    #[test]
    fn accumulate_trace() {
        let mut s = StreamState::<f64>::contraction();
        s.accumulate(&sph(), &[3.0], &[1.0]).unwrap();
        assert_eq!((s.o[0], s.z), (3.0, 9.0));
        s.accumulate(&sph(), &[4.0], &[1.0]).unwrap();
        assert_eq!((s.o[0], s.z), (7.0, 25.0));
        assert_eq!(s.finalize_scalar(&sph()).unwrap(), 1.4);
        let before = s.clone();
        s.accumulate::<f64>(&sph(), &[], &[]).unwrap();
        assert_eq!(s, before);
        assert!(s.accumulate(&sph(), &[1.0], &[1.0, 2.0]).is_err());
    }

    #[test]
    fn merge_examples() {
        let mk = |o: f64, z: f64| StreamState {
            mode: StreamMode::Contraction,
            o: vec![o],
            z,
        };
        assert_eq!(mk(3.0, 9.0).merge(mk(4.0, 16.0)).unwrap(), mk(7.0, 25.0));
        assert_eq!(mk(3.0, 9.0).merge(StreamState::contraction()).unwrap(), mk(3.0, 9.0));
        let att = StreamState::<f64>::init(StreamMode::Attention, 1).unwrap();
        assert!(matches!(mk(1.0, 1.0).merge(att), Err(Error::StateMismatch(_))));
    }

    #[test]
    fn finalize_examples() {
        let s = StreamState {
            mode: StreamMode::Contraction,
            o: vec![7.0],
            z: 25.0,
        };
        assert_eq!(s.finalize_scalar(&sph()).unwrap(), 1.4);
        let t = StreamState {
            mode: StreamMode::Contraction,
            o: vec![-2.5],
            z: 1.0,
        };
        assert_eq!(t.finalize_scalar(&NormalizerSpec::softmax()).unwrap(), -2.5);
        let empty = StreamState::<f64>::contraction();
        assert!(matches!(
            empty.finalize_scalar(&sph()),
            Err(Error::DegenerateDenominator { .. })
        ));
        assert!(matches!(
            empty.finalize_scalar(&NormalizerSpec::softmax()),
            Err(Error::DegenerateDenominator { .. })
        ));
    }

    #[test]
    fn streamed_contraction_examples() {
        assert_eq!(streamed_normalized_contraction(&[3.0, 4.0], &[1.0, 1.0], &sph(), 1).unwrap(), 1.4);
        let mut rng = XorShift64Star::new(4);
        let x: Vec<f64> = (0..7).map(|_| rng.next_normal()).collect();
        let y: Vec<f64> = (0..7).map(|_| rng.next_normal()).collect();
        let one_shot = normalized_contraction(&x, &y, &sph()).unwrap();
        assert_eq!(streamed_normalized_contraction(&x, &y, &sph(), 7).unwrap(), one_shot);
        assert_eq!(streamed_normalized_contraction(&x, &y, &sph(), 100).unwrap(), one_shot);
        let partial = streamed_normalized_contraction(&x, &y, &sph(), 3).unwrap();
        assert!((partial - one_shot).abs() <= 1e-12 * one_shot.abs().max(1.0));
        assert!(matches!(
            streamed_normalized_contraction(&[], &[], &sph(), 3),
            Err(Error::Empty(_))
        ));
        assert!(streamed_normalized_contraction(&x, &y, &sph(), 0).is_err());
    }

    #[test]
    fn exact_mode_matches_hand_trace() {
        let x: Vec<_> = [3, 4].iter().map(|&v| rational_int(v)).collect();
        let y: Vec<_> = [1, 1].iter().map(|&v| rational_int(v)).collect();
        let s = exact_contraction_state(&x, &y, &sph(), &[1, 1]).unwrap();
        assert_eq!((s.o[0].clone(), s.z.clone()), (rational_int(7), rational_int(25)));
        let out = s.finalize_exact(&sph()).unwrap();
        assert_eq!(out[0], BigRational::new(7.into(), 5.into()));
        assert!(exact_contraction_state(&x, &y, &NormalizerSpec::softmax(), &[2]).is_err());
    }

    #[test]
    fn safe_matches_plain_on_nonpositive_scores() {
        let mut rng = XorShift64Star::new(10);
        let sm = NormalizerSpec::softmax();
        for _ in 0..100 {
            let n = 1 + rng.next_index(20);
            let k = 1 + rng.next_index(4);
            let s: Vec<f64> = (0..n).map(|_| -rng.next_normal().abs() * 3.0).collect();
            let v: Vec<f64> = (0..n * k).map(|_| rng.next_normal()).collect();
            let mut plain = StreamState::<f64>::init(StreamMode::Attention, k).unwrap();
            plain.accumulate(&sm, &s, &v).unwrap();
            let mut safe = SafeStreamState::<f64>::new(k);
            safe.accumulate(&s, &v).unwrap();
            let (a, b) = (plain.finalize(&sm).unwrap(), safe.finalize(&sm).unwrap());
            for (x, y) in a.iter().zip(&b) {
                assert!((x - y).abs() <= 1e-12 * y.abs().max(1.0));
            }
        }
    }

    #[test]
    fn safe_survives_huge_scores() {
        let sm = NormalizerSpec::softmax();
        let s = [1000.0, 999.0];
        let v = [1.0, 3.0];
        let mut plain = StreamState::<f64>::contraction();
        plain.accumulate(&sm, &s, &v).unwrap();
        assert!(plain.finalize_scalar(&sm).is_err() || !plain.finalize_scalar(&sm).unwrap().is_finite());
        let mut safe = SafeStreamState::<f64>::new(1);
        safe.accumulate(&s[..1], &v[..1]).unwrap();
        safe.accumulate(&s[1..], &v[1..]).unwrap();
        let out = safe.finalize(&sm).unwrap()[0];
        let e = (-1.0f64).exp();
        assert!((out - (1.0 + 3.0 * e) / (1.0 + e)).abs() < 1e-14);
    }

    #[test]
    fn safe_epsilon_is_in_unshifted_units() {
        let sm = NormalizerSpec::softmax().with_epsilon(0.5);
        let s = [2.0, -1.0];
        let v = [1.0, 4.0];
        let mut plain = StreamState::<f64>::contraction();
        plain.accumulate(&sm, &s, &v).unwrap();
        let mut safe = SafeStreamState::<f64>::new(1);
        safe.accumulate(&s, &v).unwrap();
        let (a, b) = (plain.finalize_scalar(&sm).unwrap(), safe.finalize(&sm).unwrap()[0]);
        assert!((a - b).abs() < 1e-14);
    }

    #[test]
    fn safe_merge_equals_sequential() {
        let mut rng = XorShift64Star::new(12);
        let sm = NormalizerSpec::softmax();
        let s: Vec<f64> = (0..10).map(|_| 5.0 * rng.next_normal()).collect();
        let v: Vec<f64> = (0..20).map(|_| rng.next_normal()).collect();
        let mut whole = SafeStreamState::<f64>::new(2);
        whole.accumulate(&s, &v).unwrap();
        let mut a = SafeStreamState::<f64>::new(2);
        a.accumulate(&s[..4], &v[..8]).unwrap();
        let mut b = SafeStreamState::<f64>::new(2);
        b.accumulate(&s[4..], &v[8..]).unwrap();
        let merged = b.merge(a).unwrap();
        let (x, y) = (whole.finalize(&sm).unwrap(), merged.finalize(&sm).unwrap());
        for (p, q) in x.iter().zip(&y) {
            assert!((p - q).abs() < 1e-12 * q.abs().max(1.0));
        }
        assert_eq!(merged.m, whole.m);
    }

    proptest! {
        #[test]
        fn merge_of_chunks_equals_sequential(
            x in prop::collection::vec(-3.0f64..3.0, 1..40),
            split in 0usize..40,
            seed in any::<u64>(),
        ) {
            let split = split.min(x.len());
            let mut rng = XorShift64Star::new(seed);
            let y: Vec<f64> = x.iter().map(|_| rng.next_normal()).collect();
            for spec in [sph(), NormalizerSpec::softmax(), NormalizerSpec::signed_l1()] {
                let mut a = StreamState::<f64>::contraction();
                a.accumulate(&spec, &x[..split], &y[..split]).unwrap();
                let mut b = StreamState::<f64>::contraction();
                b.accumulate(&spec, &x[split..], &y[split..]).unwrap();
                let mut seq = a.clone();
                seq.accumulate(&spec, &x[split..], &y[split..]).unwrap();
                let merged = a.merge(b).unwrap();
                prop_assert!((merged.o[0] - seq.o[0]).abs() <= 1e-12 * seq.o[0].abs().max(1.0));
                prop_assert!((merged.z - seq.z).abs() <= 1e-12 * seq.z.abs().max(1.0));
            }
        }

        #[test]
        fn z_tracks_sum_of_a2(x in prop::collection::vec(-5.0f64..5.0, 0..30), chunk in 1usize..8) {
            let spec = sph();
            let mut s = StreamState::<f64>::contraction();
            for c in x.chunks(chunk) {
                s.accumulate(&spec, c, &vec![0.0; c.len()]).unwrap();
            }
            let direct: f64 = x.iter().map(|v| v * v).sum();
            prop_assert!((s.z - direct).abs() <= 1e-12 * direct.max(1.0));
        }

        #[test]
        fn safe_chunk_order_barely_matters(
            s in prop::collection::vec(-30.0f64..30.0, 2..30),
            seed in any::<u64>(),
        ) {
            let mut rng = XorShift64Star::new(seed);
            let v: Vec<f64> = s.iter().map(|_| rng.next_normal()).collect();
            let sm = NormalizerSpec::softmax();
            let mut order: Vec<usize> = (0..s.len()).collect();
            let mut fwd = SafeStreamState::<f64>::new(1);
            for &i in &order {
                fwd.accumulate(&s[i..=i], &v[i..=i]).unwrap();
            }
            rng.shuffle(&mut order);
            let mut shuffled = SafeStreamState::<f64>::new(1);
            for &i in &order {
                shuffled.accumulate(&s[i..=i], &v[i..=i]).unwrap();
            }
            let (a, b) = (fwd.finalize(&sm).unwrap()[0], shuffled.finalize(&sm).unwrap()[0]);
            let scale = v.iter().map(|x| x.abs()).fold(0.0, f64::max);
            prop_assert!((a - b).abs() < 1e-9 * scale.max(a.abs()));
        }
    }
}
