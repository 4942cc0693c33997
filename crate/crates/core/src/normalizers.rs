//! Normalized operations `N(x)_i = a1(x_i) / b(sum_j a2(x_j) + eps)` and
//! normalized contractions `N(x) . y`.
//!
//! A [`NormalizerSpec`] carries the activation pair, the aggregator and a
//! set of declared algebraic properties. Declared properties are claims:
//! [`check_declared_properties`] tests each one numerically.

use std::fmt;
use std::sync::Arc;

use bitflags::bitflags;
use num_bigint::BigInt;
use num_rational::BigRational;
use num_traits::{Signed, Zero};

use crate::error::{Error, Result};
use crate::rng::XorShift64Star;
use crate::tensor::Element;

/// An opaque user-supplied scalar map, evaluated in `f64`.
#[derive(Clone)]
pub struct ScalarFn {
    pub name: String,
    pub f: Arc<dyn Fn(f64) -> f64 + Send + Sync>,
    /// Whether evaluating this map costs a special-function-unit op.
    pub special_function: bool,
}

impl fmt::Debug for ScalarFn {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "ScalarFn({})", self.name)
    }
}

#[derive(Debug, Clone)]
pub enum Activation {
    Identity,
    Square,
    Abs,
    Exp,
    Custom(ScalarFn),
}

impl Activation {
    #[inline]
    pub fn apply<T: Element>(&self, x: T) -> T {
        match self {
            Activation::Identity => x,
            Activation::Square => x * x,
            Activation::Abs => x.abs(),
            Activation::Exp => x.exp(),
            Activation::Custom(c) => T::narrow((c.f)(x.widen())),
        }
    }

    pub fn is_special_function(&self) -> bool {
        match self {
            Activation::Exp => true,
            Activation::Custom(c) => c.special_function,
            _ => false,
        }
    }

    /// `a(0) == 0`, i.e. a zero score contributes nothing.
    pub fn vanishes_at_zero(&self) -> bool {
        match self {
            Activation::Identity | Activation::Square | Activation::Abs => true,
            Activation::Exp => false,
            Activation::Custom(c) => (c.f)(0.0) == 0.0,
        }
    }
}

#[derive(Debug, Clone)]
pub enum Aggregator {
    Identity,
    Sqrt,
    Custom(ScalarFn),
}

impl Aggregator {
    #[inline]
    pub fn apply(&self, z: f64) -> f64 {
        match self {
            Aggregator::Identity => z,
            Aggregator::Sqrt => z.sqrt(),
            Aggregator::Custom(c) => (c.f)(z),
        }
    }

    pub fn is_special_function(&self) -> bool {
        matches!(self, Aggregator::Custom(c) if c.special_function)
    }
}

bitflags! {
    #[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
    pub struct Properties: u8 {
        const SIGN_PRESERVING = 1;
        const SHIFT_INVARIANT = 1 << 1;
        const POSITIVE_SCALE_INVARIANT = 1 << 2;
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum NormalizerKind {
    Spherical,
    Softmax,
    SignedL1,
    Custom,
}

#[derive(Debug, Clone)]
pub struct NormalizerSpec {
    pub name: String,
    pub kind: NormalizerKind,
    pub a1: Activation,
    pub a2: Activation,
    pub b: Aggregator,
    /// Added to `sum a2` before `b` is applied.
    pub denom_epsilon: f64,
    pub properties: Properties,
}

impl NormalizerSpec {
    /// L2 normalization: `a1 = id`, `a2 = u^2`, `b = sqrt`.
    pub fn spherical() -> Self {
        Self {
            name: "spherical".into(),
            kind: NormalizerKind::Spherical,
            a1: Activation::Identity,
            a2: Activation::Square,
            b: Aggregator::Sqrt,
            denom_epsilon: 0.0,
            properties: Properties::SIGN_PRESERVING | Properties::POSITIVE_SCALE_INVARIANT,
        }
    }

    /// Plain (unshifted) SoftMax: `a1 = a2 = exp`, `b = id`.
    pub fn softmax() -> Self {
        Self {
            name: "softmax".into(),
            kind: NormalizerKind::Softmax,
            a1: Activation::Exp,
            a2: Activation::Exp,
            b: Aggregator::Identity,
            denom_epsilon: 0.0,
            properties: Properties::SHIFT_INVARIANT,
        }
    }

    /// Signed L1 normalization: `a1 = id`, `a2 = |u|`, `b = id`.
    pub fn signed_l1() -> Self {
        Self {
            name: "signed_l1".into(),
            kind: NormalizerKind::SignedL1,
            a1: Activation::Identity,
            a2: Activation::Abs,
            b: Aggregator::Identity,
            denom_epsilon: 0.0,
            properties: Properties::SIGN_PRESERVING | Properties::POSITIVE_SCALE_INVARIANT,
        }
    }

    pub fn custom(
        name: impl Into<String>,
        a1: Activation,
        a2: Activation,
        b: Aggregator,
        properties: Properties,
    ) -> Self {
        Self {
            name: name.into(),
            kind: NormalizerKind::Custom,
            a1,
            a2,
            b,
            denom_epsilon: 0.0,
            properties,
        }
    }

    /// Looks up a built-in by its CLI name.
    pub fn from_name(name: &str) -> Result<Self> {
        match name {
            "spherical" => Ok(Self::spherical()),
            "softmax" => Ok(Self::softmax()),
            "signed_l1" => Ok(Self::signed_l1()),
            other => Err(Error::Config(format!(
                "unknown normalizer {other:?} (expected spherical | softmax | signed_l1)"
            ))),
        }
    }

    pub fn with_epsilon(mut self, eps: f64) -> Self {
        self.denom_epsilon = eps;
        self
    }

    pub fn is_softmax(&self) -> bool {
        matches!(
            (&self.a1, &self.a2, &self.b),
            (Activation::Exp, Activation::Exp, Aggregator::Identity)
        )
    }

    pub fn uses_special_functions(&self) -> bool {
        self.a1.is_special_function() || self.a2.is_special_function()
    }

    /// `b(z + eps)`, or a degenerate-denominator error if that is zero or
    /// not finite.
    pub fn denominator(&self, z: f64, row: Option<usize>) -> Result<f64> {
        let d = self.b.apply(z + self.denom_epsilon);
        if d == 0.0 || !d.is_finite() {
            return Err(Error::DegenerateDenominator { row, z });
        }
        Ok(d)
    }
}

/// Scalars an [`Activation`] can be evaluated on: the float element types
/// and exact rationals.
pub trait Activate: Clone {
    fn activate(act: &Activation, x: &Self) -> Result<Self>;
}

impl<T: Element> Activate for T {
    #[inline]
    fn activate(act: &Activation, x: &Self) -> Result<Self> {
        Ok(act.apply(*x))
    }
}

impl Activate for BigRational {
    fn activate(act: &Activation, x: &Self) -> Result<Self> {
        match act {
            Activation::Identity => Ok(x.clone()),
            Activation::Square => Ok(x * x),
            Activation::Abs => Ok(x.abs()),
            Activation::Exp => Err(Error::Inexact("exp")),
            Activation::Custom(_) => Err(Error::Inexact("custom activation")),
        }
    }
}

/// Exact `b(z)` for rationals. `sqrt` succeeds only on perfect squares.
pub fn aggregate_exact(b: &Aggregator, z: &BigRational) -> Result<BigRational> {
    match b {
        Aggregator::Identity => Ok(z.clone()),
        Aggregator::Sqrt => {
            if z.is_negative() {
                return Err(Error::Inexact("sqrt of a negative rational"));
            }
            let (n, d) = (z.numer(), z.denom());
            let (rn, rd) = (n.sqrt(), d.sqrt());
            if &(&rn * &rn) == n && &(&rd * &rd) == d {
                Ok(BigRational::new(rn, rd))
            } else {
                Err(Error::Inexact("sqrt of a non-square rational"))
            }
        }
        Aggregator::Custom(_) => Err(Error::Inexact("custom aggregator")),
    }
}

/// Exact rational for an `f64` (every finite double is a dyadic rational).
pub fn rational(v: f64) -> BigRational {
    BigRational::from_float(v).unwrap_or_else(BigRational::zero)
}

pub fn rational_int(v: i64) -> BigRational {
    BigRational::from_integer(BigInt::from(v))
}

/// `N(x)`. Activations run in `T`; the sum of `a2` and the aggregator run
/// in `f64`.
pub fn normalize<T: Element>(x: &[T], spec: &NormalizerSpec) -> Result<Vec<T>> {
    normalize_row(x, spec, None)
}

pub(crate) fn normalize_row<T: Element>(
    x: &[T],
    spec: &NormalizerSpec,
    row: Option<usize>,
) -> Result<Vec<T>> {
    if x.is_empty() {
        return Err(Error::Empty("normalize needs n >= 1"));
    }
    let z: f64 = x.iter().map(|&v| spec.a2.apply(v).widen()).sum();
    let d = spec.denominator(z, row)?;
    Ok(x.iter()
        .map(|&v| T::narrow(spec.a1.apply(v).widen() / d))
        .collect())
}

/// `N(x) . y = (sum a1(x_i) y_i) / b(sum a2(x_i) + eps)`.
pub fn normalized_contraction(x: &[f64], y: &[f64], spec: &NormalizerSpec) -> Result<f64> {
    if x.len() != y.len() {
        return Err(Error::Length {
            op: "normalized_contraction",
            lhs: x.len(),
            rhs: y.len(),
        });
    }
    if x.is_empty() {
        return Err(Error::Empty("normalized_contraction needs n >= 1"));
    }
    let (mut o, mut z) = (0.0, 0.0);
    for (&xi, &yi) in x.iter().zip(y) {
        o += spec.a1.apply(xi) * yi;
        z += spec.a2.apply(xi);
    }
    Ok(o / spec.denominator(z, None)?)
}

/// Directional derivative of `normalize` at `x` along `v`, in closed form.
/// Only the spherical and SoftMax normalizers are supported.
pub fn normalize_jvp(x: &[f64], v: &[f64], spec: &NormalizerSpec) -> Result<Vec<f64>> {
    if x.len() != v.len() {
        return Err(Error::Length {
            op: "normalize_jvp",
            lhs: x.len(),
            rhs: v.len(),
        });
    }
    if x.is_empty() {
        return Err(Error::Empty("normalize_jvp needs n >= 1"));
    }
    match spec.kind {
        NormalizerKind::Spherical => {
            let sq: f64 = x.iter().map(|a| a * a).sum();
            let r = spec.denominator(sq, None)?;
            let xv: f64 = x.iter().zip(v).map(|(a, b)| a * b).sum();
            let r3 = r * r * r;
            Ok(x.iter().zip(v).map(|(xi, vi)| vi / r - xi * xv / r3).collect())
        }
        NormalizerKind::Softmax => {
            let n = normalize(x, spec)?;
            let nv: f64 = n.iter().zip(v).map(|(a, b)| a * b).sum();
            Ok(n.iter().zip(v).map(|(ni, vi)| ni * (vi - nv)).collect())
        }
        _ => Err(Error::Unsupported(format!(
            "normalize_jvp has no closed form for {}",
            spec.name
        ))),
    }
}

/// Outcome of numerically testing one declared property.
#[derive(Debug, Clone)]
pub struct PropertyCheck {
    pub property: &'static str,
    pub passed: bool,
    pub worst_deviation: f64,
    /// Input that exposed the violation, if any.
    pub counterexample: Option<Vec<f64>>,
}

fn max_rel_dev(a: &[f64], b: &[f64], atol: f64) -> f64 {
    a.iter()
        .zip(b)
        .map(|(x, y)| (x - y).abs() / (y.abs() + atol))
        .fold(0.0, f64::max)
}

/// Checks every property flag declared on `spec` against `trials` random
/// inputs. Inputs with a degenerate denominator are skipped.
pub fn check_declared_properties(
    spec: &NormalizerSpec,
    seed: u64,
    trials: usize,
) -> Vec<PropertyCheck> {
    let mut rng = XorShift64Star::new(seed);
    let mut out = Vec::new();
    let random_vec = |rng: &mut XorShift64Star| {
        let n = 1 + rng.next_index(16);
        (0..n).map(|_| 3.0 * rng.next_normal()).collect::<Vec<f64>>()
    };

    if spec.properties.contains(Properties::SIGN_PRESERVING) {
        let mut check = PropertyCheck {
            property: "sign_preserving",
            passed: true,
            worst_deviation: 0.0,
            counterexample: None,
        };
        for _ in 0..trials {
            let x = random_vec(&mut rng);
            let Ok(nx) = normalize(&x, spec) else { continue };
            let flips = x
                .iter()
                .zip(&nx)
                .filter(|(a, b)| **a != 0.0 && a.signum() != b.signum())
                .count();
            if flips > 0 {
                check.passed = false;
                check.worst_deviation = check.worst_deviation.max(flips as f64);
                check.counterexample.get_or_insert(x);
            }
        }
        out.push(check);
    }

    if spec.properties.contains(Properties::SHIFT_INVARIANT) {
        let mut check = PropertyCheck {
            property: "shift_invariant",
            passed: true,
            worst_deviation: 0.0,
            counterexample: None,
        };
        for _ in 0..trials {
            let x = random_vec(&mut rng);
            let c = 40.0 * rng.next_f64() - 20.0;
            let shifted: Vec<f64> = x.iter().map(|v| v + c).collect();
            let (Ok(a), Ok(b)) = (normalize(&shifted, spec), normalize(&x, spec)) else {
                continue;
            };
            let dev = max_rel_dev(&a, &b, 1e-12);
            check.worst_deviation = check.worst_deviation.max(dev);
            if dev > 1e-9 {
                check.passed = false;
                check.counterexample.get_or_insert(x);
            }
        }
        out.push(check);
    }

    if spec.properties.contains(Properties::POSITIVE_SCALE_INVARIANT) {
        let mut check = PropertyCheck {
            property: "positive_scale_invariant",
            passed: true,
            worst_deviation: 0.0,
            counterexample: None,
        };
        for _ in 0..trials {
            let x = random_vec(&mut rng);
            let lambda = 10f64.powf(4.0 * rng.next_f64() - 2.0);
            let scaled: Vec<f64> = x.iter().map(|v| v * lambda).collect();
            let (Ok(a), Ok(b)) = (normalize(&scaled, spec), normalize(&x, spec)) else {
                continue;
            };
            let dev = max_rel_dev(&a, &b, 1e-12);
            check.worst_deviation = check.worst_deviation.max(dev);
            if dev > 1e-10 {
                check.passed = false;
                check.counterexample.get_or_insert(x);
            }
        }
        out.push(check);
    }
    out
}
