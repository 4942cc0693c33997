//! Property suites behind `--cmd verify`.
//!
//! Every case derives its inputs from its own seed, so a failing case can be
//! replayed from the seed printed next to it.

use std::io::Write;

use num_bigint::BigInt;
use num_rational::BigRational;
use rayon::prelude::*;
use streamattn::attention::{
    naive_attention_with_stats, naive_generalized_attention, streamed_attention,
    streamed_attention_with_stats, AttentionConfig, TileConfig,
};
use streamattn::costmodel::{cost_naive_attention, cost_streamed_attention};
use streamattn::grn::{self, CellSample, GRNConfig};
use streamattn::normalizers::{
    check_declared_properties, normalize, normalize_jvp, normalized_contraction, NormalizerSpec,
    Properties,
};
use streamattn::rng::XorShift64Star;
use streamattn::streaming::{exact_contraction_state, SafeStreamState, StreamState};
use streamattn::tensor::{allclose, DType, Element, Tensor};

use crate::{CliResult, RunConfig, PAPER_ANCHOR};

/// Which side of the limit a passing value lies on.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Bound {
    AtMost,
    AtLeast,
}

/// One named property, aggregated over its cases.
#[derive(Debug, Clone)]
pub struct Check {
    pub property: String,
    /// What `worst` measures.
    pub metric: &'static str,
    pub bound: Bound,
    pub limit: f64,
    pub cases: usize,
    /// Largest value seen for `AtMost`, smallest for `AtLeast`.
    pub worst: f64,
    pub failing_seed: Option<u64>,
    pub detail: Option<String>,
}

impl Check {
    pub fn at_most(property: impl Into<String>, metric: &'static str, limit: f64) -> Self {
        Self::new(property.into(), metric, Bound::AtMost, limit)
    }

    pub fn at_least(property: impl Into<String>, metric: &'static str, limit: f64) -> Self {
        Self::new(property.into(), metric, Bound::AtLeast, limit)
    }

    fn new(property: String, metric: &'static str, bound: Bound, limit: f64) -> Self {
        Self {
            property,
            metric,
            bound,
            limit,
            cases: 0,
            worst: match bound {
                Bound::AtMost => 0.0,
                Bound::AtLeast => f64::INFINITY,
            },
            failing_seed: None,
            detail: None,
        }
    }

    pub fn passed(&self) -> bool {
        self.failing_seed.is_none() && self.cases > 0
    }

    pub fn record(&mut self, seed: u64, value: f64, detail: impl FnOnce() -> String) {
        self.cases += 1;
        let (ok, worse) = match self.bound {
            Bound::AtMost => (value <= self.limit, value > self.worst || value.is_nan()),
            Bound::AtLeast => (value >= self.limit, value < self.worst || value.is_nan()),
        };
        if worse {
            self.worst = value;
        }
        if !ok && self.failing_seed.is_none() {
            self.failing_seed = Some(seed);
            self.detail = Some(detail());
        }
    }

    /// A case that could not be evaluated at all.
    pub fn error(&mut self, seed: u64, err: impl std::fmt::Display) {
        self.cases += 1;
        self.worst = f64::NAN;
        if self.failing_seed.is_none() {
            self.failing_seed = Some(seed);
            self.detail = Some(err.to_string());
        }
    }

    fn record_result(&mut self, seed: u64, r: streamattn::Result<f64>, detail: impl FnOnce() -> String) {
        match r {
            Ok(v) => self.record(seed, v, detail),
            Err(e) => self.error(seed, format!("{}: {e}", detail())),
        }
    }
}

#[derive(Debug, Clone)]
pub struct SuiteReport {
    pub name: &'static str,
    pub checks: Vec<Check>,
}

impl SuiteReport {
    pub fn passed(&self) -> bool {
        self.checks.iter().all(Check::passed)
    }

    pub fn failure_summary(&self) -> String {
        match self.checks.iter().find(|c| !c.passed()) {
            Some(c) => format!(
                "suite {} property {} (seed {}): {}",
                self.name,
                c.property,
                c.failing_seed.map_or("-".into(), |s| s.to_string()),
                c.detail.as_deref().unwrap_or("no cases ran")
            ),
            None => format!("suite {} passed", self.name),
        }
    }

    pub fn print(&self, w: &mut dyn Write) -> std::io::Result<()> {
        let status = if self.passed() { "PASS" } else { "FAIL" };
        writeln!(w, "[{status}] suite {}", self.name)?;
        for c in &self.checks {
            let op = match c.bound {
                Bound::AtMost => "<=",
                Bound::AtLeast => ">=",
            };
            writeln!(
                w,
                "    {} {:<58} cases={:<6} worst={:.3e} (need {op} {:.1e}; {})",
                if c.passed() { "ok  " } else { "FAIL" },
                c.property,
                c.cases,
                c.worst,
                c.limit,
                c.metric
            )?;
            if let (Some(seed), Some(d)) = (c.failing_seed, &c.detail) {
                writeln!(w, "         seed {seed}: {d}")?;
            }
        }
        Ok(())
    }
}

/// Seed for case `index` of a suite. SplitMix64 finalizer over the sum.
pub fn case_seed(base: u64, salt: u64, index: u64) -> u64 {
    let mut z = base
        .wrapping_add(salt.wrapping_mul(0xD1B5_4A32_D192_ED03))
        .wrapping_add(index.wrapping_mul(0x9E37_79B9_7F4A_7C15));
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

pub fn randn<T: Element>(rng: &mut XorShift64Star, shape: Vec<usize>) -> Tensor<T> {
    Tensor::from_fn(shape, |_| T::narrow(rng.next_normal())).expect("finite normals")
}

/// `max_i |a_i - b_i| / (atol + rtol |b_i|)`: at most 1 iff allclose.
pub fn scaled_deviation(a: &[f64], b: &[f64], rtol: f64, atol: f64) -> f64 {
    a.iter()
        .zip(b)
        .map(|(x, y)| (x - y).abs() / (atol + rtol * y.abs()))
        .fold(0.0, |m: f64, v| if v.is_nan() { f64::NAN } else { m.max(v) })
}

/// `max_i |a_i - b_i| / max(1, |b_i|)`.
pub fn rel_deviation(a: &[f64], b: &[f64]) -> f64 {
    if a.len() != b.len() {
        return f64::INFINITY;
    }
    a.iter()
        .zip(b)
        .map(|(x, y)| (x - y).abs() / y.abs().max(1.0))
        .fold(0.0, |m: f64, v| if v.is_nan() { f64::NAN } else { m.max(v) })
}

fn builtin_specs() -> [NormalizerSpec; 3] {
    [
        NormalizerSpec::spherical(),
        NormalizerSpec::softmax(),
        NormalizerSpec::signed_l1(),
    ]
}

fn widen<T: Element>(t: &Tensor<T>) -> Vec<f64> {
    t.data().iter().map(|v| v.widen()).collect()
}

// ---------------------------------------------------------------------------
// streamed vs naive

/// Tolerances for one dtype in the equivalence grid.
#[derive(Debug, Clone, Copy)]
pub struct Tolerance {
    pub rtol: f64,
    pub atol: f64,
}

pub const F64_TOL: Tolerance = Tolerance {
    rtol: 1e-12,
    atol: 1e-14,
};
pub const F32_TOL: Tolerance = Tolerance {
    rtol: 1e-5,
    atol: 1e-6,
};

#[derive(Debug, Clone)]
pub struct EquivalenceGrid {
    /// Used for both `y` and `x`.
    pub sizes: Vec<usize>,
    pub ks: Vec<usize>,
    pub dtypes: Vec<DType>,
}

impl Default for EquivalenceGrid {
    fn default() -> Self {
        Self {
            sizes: vec![1, 2, 3, 16, 97, 128, 1024],
            ks: vec![1, 4, 64, 128],
            dtypes: vec![DType::Float64, DType::Float32],
        }
    }
}

/// `(1,1)`, `(16,16)`, one tile covering everything, and `(13,7)`.
pub fn equivalence_tiles(y: usize, x: usize) -> [TileConfig; 4] {
    [
        TileConfig { g_y: 1, s_x: 1 },
        TileConfig { g_y: 16, s_x: 16 },
        TileConfig { g_y: y, s_x: x },
        TileConfig { g_y: 13, s_x: 7 },
    ]
}

/// Scaled deviations of every tile against one naive reference.
fn equivalence_case<T: Element>(
    spec: &NormalizerSpec,
    y: usize,
    x: usize,
    k: usize,
    seed: u64,
    tol: Tolerance,
) -> Vec<streamattn::Result<f64>> {
    let mut rng = XorShift64Star::new(seed);
    let q = randn::<T>(&mut rng, vec![y, k]);
    let kk = randn::<T>(&mut rng, vec![x, k]);
    let v = randn::<T>(&mut rng, vec![x, k]);
    let base = AttentionConfig::new(spec.clone(), k);
    let naive = match naive_generalized_attention(&q, &kk, &v, &base) {
        Ok(n) => widen(&n),
        Err(e) => return vec![Err(e.clone()), Err(e.clone()), Err(e.clone()), Err(e)],
    };
    equivalence_tiles(y, x)
        .iter()
        .map(|&tile| {
            let s = streamed_attention(&q, &kk, &v, &base.clone().with_tile(tile))?;
            Ok(scaled_deviation(&widen(&s), &naive, tol.rtol, tol.atol))
        })
        .collect()
}

pub fn equivalence_suite(grid: &EquivalenceGrid, seed: u64) -> SuiteReport {
    let mut cases = Vec::new();
    for spec in builtin_specs() {
        for &dtype in &grid.dtypes {
            for &y in &grid.sizes {
                for &x in &grid.sizes {
                    for &k in &grid.ks {
                        cases.push((spec.clone(), dtype, y, x, k));
                    }
                }
            }
        }
    }
    let results: Vec<_> = cases
        .par_iter()
        .enumerate()
        .map(|(i, (spec, dtype, y, x, k))| {
            let s = case_seed(seed, 1, i as u64);
            let r = match dtype {
                DType::Float64 => equivalence_case::<f64>(spec, *y, *x, *k, s, F64_TOL),
                DType::Float32 => equivalence_case::<f32>(spec, *y, *x, *k, s, F32_TOL),
            };
            (s, r)
        })
        .collect();

    let mut checks: Vec<Check> = Vec::new();
    for ((spec, dtype, y, x, k), (s, devs)) in cases.iter().zip(results) {
        let name = format!("streamed == naive [{} {}]", spec.name, dtype);
        let idx = match checks.iter().position(|c| c.property == name) {
            Some(i) => i,
            None => {
                checks.push(Check::at_most(name, "max |s-n|/(atol+rtol|n|)", 1.0));
                checks.len() - 1
            }
        };
        for (tile, dev) in equivalence_tiles(*y, *x).iter().zip(devs) {
            checks[idx].record_result(s, dev, || {
                format!("y={y} x={x} k={k} tile={}x{}", tile.g_y, tile.s_x)
            });
        }
    }
    SuiteReport {
        name: "streaming-equivalence",
        checks,
    }
}

// ---------------------------------------------------------------------------
// chunked accumulation

/// Cut `0..n` into `parts` contiguous runs (some possibly empty).
fn random_splits(rng: &mut XorShift64Star, n: usize, parts: usize) -> Vec<usize> {
    let mut cuts: Vec<usize> = (0..parts - 1).map(|_| rng.next_index(n + 1)).collect();
    cuts.sort_unstable();
    let mut lens = Vec::with_capacity(parts);
    let mut prev = 0;
    for c in cuts {
        lens.push(c - prev);
        prev = c;
    }
    lens.push(n - prev);
    lens
}

fn chunked<'a>(v: &'a [f64], lens: &'a [usize]) -> impl Iterator<Item = &'a [f64]> + 'a {
    let mut start = 0;
    lens.iter().map(move |&l| {
        let s = &v[start..start + l];
        start += l;
        s
    })
}

/// Streamed contraction; with `fault` the numerator's sign is flipped after
/// the first chunk.
fn streamed_with_fault(
    x: &[f64],
    y: &[f64],
    spec: &NormalizerSpec,
    lens: &[usize],
    fault: bool,
) -> streamattn::Result<f64> {
    let mut st = StreamState::<f64>::contraction();
    for (c, (xs, ys)) in chunked(x, lens).zip(chunked(y, lens)).enumerate() {
        st.accumulate(spec, xs, ys)?;
        if fault && c == 0 {
            st.o[0] = -st.o[0];
        }
    }
    st.finalize_scalar(spec)
}

fn state_over(x: &[f64], y: &[f64], spec: &NormalizerSpec) -> streamattn::Result<StreamState<f64>> {
    let mut st = StreamState::<f64>::contraction();
    st.accumulate(spec, x, y)?;
    Ok(st)
}

fn small_int(rng: &mut XorShift64Star) -> BigRational {
    BigRational::from_integer(BigInt::from(rng.next_range(-9, 9)))
}

/// Exact `(o, z)` written out directly for the rational activations.
fn exact_oracle(x: &[BigRational], y: &[BigRational], spec: &NormalizerSpec) -> (BigRational, BigRational) {
    let mut o = BigRational::from_integer(0.into());
    let mut z = BigRational::from_integer(0.into());
    for (a, b) in x.iter().zip(y) {
        o += a * b;
        z += match spec.kind {
            streamattn::normalizers::NormalizerKind::Spherical => a * a,
            _ => {
                if a < &BigRational::from_integer(0.into()) {
                    -a.clone()
                } else {
                    a.clone()
                }
            }
        };
    }
    (o, z)
}

pub fn morphism_suite(cases: usize, seed: u64, fault: bool) -> SuiteReport {
    let mut checks = Vec::new();
    for (si, spec) in builtin_specs().into_iter().enumerate() {
        let mut stream = Check::at_most(
            format!("chunked == one-shot [{}]", spec.name),
            "|s-n|/max(1,|n|)",
            1e-12,
        );
        let mut assoc = Check::at_most(
            format!("merge associative [{}]", spec.name),
            "|a-b|/max(1,|b|)",
            1e-12,
        );
        let mut commut = Check::at_most(
            format!("merge commutative [{}]", spec.name),
            "|a-b|/max(1,|b|)",
            1e-12,
        );
        let mut safe = spec
            .is_softmax()
            .then(|| Check::at_most("running-max chunked == one-shot [softmax]", "|s-n|/max(1,|n|)", 1e-12));
        for i in 0..cases {
            let s = case_seed(seed, 10 + si as u64, i as u64);
            let mut rng = XorShift64Star::new(s);
            let n = 1 + rng.next_index(64);
            let x: Vec<f64> = (0..n).map(|_| 3.0 * rng.next_normal()).collect();
            let y: Vec<f64> = (0..n).map(|_| rng.next_normal()).collect();
            let parts = 1 + rng.next_index(8);
            let lens = random_splits(&mut rng, n, parts);
            let one_shot = match normalized_contraction(&x, &y, &spec) {
                Ok(v) => v,
                Err(e) => {
                    stream.error(s, e);
                    continue;
                }
            };
            let detail = || format!("n={n} splits={lens:?}");
            stream.record_result(
                s,
                streamed_with_fault(&x, &y, &spec, &lens, fault).map(|v| rel_deviation(&[v], &[one_shot])),
                detail,
            );
            if let Some(check) = safe.as_mut() {
                let r = (|| {
                    let mut st = SafeStreamState::<f64>::new(1);
                    for (xs, ys) in chunked(&x, &lens).zip(chunked(&y, &lens)) {
                        st.accumulate(xs, ys)?;
                    }
                    Ok(rel_deviation(&st.finalize(&spec)?, &[one_shot]))
                })();
                check.record_result(s, r, detail);
            }

            let three = random_splits(&mut rng, n, 3);
            let mut it = chunked(&x, &three).zip(chunked(&y, &three));
            let r = (|| -> streamattn::Result<(f64, f64)> {
                let mut states = Vec::new();
                for (xs, ys) in it.by_ref() {
                    states.push(state_over(xs, ys, &spec)?);
                }
                let (a, b, c) = (states[0].clone(), states[1].clone(), states[2].clone());
                let left = a.clone().merge(b.clone())?.merge(c.clone())?;
                let right = a.clone().merge(b.clone().merge(c)?)?;
                let ab = a.clone().merge(b.clone())?;
                let ba = b.merge(a)?;
                let flat = |st: &StreamState<f64>| vec![st.o[0], st.z];
                let total = left.finalize_scalar(&spec)?;
                Ok((
                    rel_deviation(&flat(&left), &flat(&right)).max(rel_deviation(&[total], &[one_shot])),
                    rel_deviation(&flat(&ab), &flat(&ba)),
                ))
            })();
            match r {
                Ok((da, dc)) => {
                    assoc.record(s, da, || format!("n={n} splits={three:?}"));
                    commut.record(s, dc, || format!("n={n} splits={three:?}"));
                }
                Err(e) => {
                    assoc.error(s, &e);
                    commut.error(s, e);
                }
            }
        }
        checks.push(stream);
        checks.extend(safe);
        checks.push(assoc);
        checks.push(commut);

        if spec.is_softmax() {
            continue; // exp is not a rational map
        }
        let mut exact = Check::at_most(
            format!("exact rational chunked == one-shot [{}]", spec.name),
            "mismatching cases (0/1)",
            0.0,
        );
        for i in 0..cases {
            let s = case_seed(seed, 20 + si as u64, i as u64);
            let mut rng = XorShift64Star::new(s);
            let n = 1 + rng.next_index(32);
            let x: Vec<BigRational> = (0..n).map(|_| small_int(&mut rng)).collect();
            let y: Vec<BigRational> = (0..n).map(|_| small_int(&mut rng)).collect();
            let parts = 1 + rng.next_index(8);
            let lens = random_splits(&mut rng, n, parts);
            let (o, z) = exact_oracle(&x, &y, &spec);
            let r = exact_contraction_state(&x, &y, &spec, &lens).and_then(|chunked| {
                let whole = exact_contraction_state(&x, &y, &spec, &[n])?;
                let same = chunked == whole && chunked.o[0] == o && chunked.z == z;
                Ok(if same { 0.0 } else { 1.0 })
            });
            exact.record_result(s, r, || format!("n={n} splits={lens:?}"));
        }
        checks.push(exact);
    }
    SuiteReport {
        name: "morphism",
        checks,
    }
}

// ---------------------------------------------------------------------------
// invariances

pub fn invariance_suite(cases: usize, seed: u64) -> SuiteReport {
    let sph = NormalizerSpec::spherical();
    let soft = NormalizerSpec::softmax();
    let random_vec = |rng: &mut XorShift64Star| -> Vec<f64> {
        let n = 1 + rng.next_index(64);
        (0..n).map(|_| 3.0 * rng.next_normal()).collect()
    };

    let mut scale = Check::at_most("spherical positive-scale invariance", "max |Δ|/(rtol|ref|), rtol 1e-10", 1.0);
    let mut odd = Check::at_most("spherical odd symmetry N(-x) = -N(x)", "max |N(-x)+N(x)|", 0.0);
    let mut shift = Check::at_most("softmax shift invariance", "max |Δ|/(rtol|ref|), rtol 1e-9", 1.0);
    for i in 0..cases {
        let s = case_seed(seed, 30, i as u64);
        let mut rng = XorShift64Star::new(s);
        let x = random_vec(&mut rng);
        let base = normalize(&x, &sph);
        for lambda in [0.5, 3.0, 100.0] {
            let scaled: Vec<f64> = x.iter().map(|v| lambda * v).collect();
            let r = base
                .as_ref()
                .map_err(Clone::clone)
                .and_then(|b| Ok(scaled_deviation(&normalize(&scaled, &sph)?, b, 1e-10, 0.0)));
            scale.record_result(s, r, || format!("n={} lambda={lambda}", x.len()));
        }
        let neg: Vec<f64> = x.iter().map(|v| -v).collect();
        let r = base.as_ref().map_err(Clone::clone).and_then(|b| {
            let n = normalize(&neg, &sph)?;
            Ok(n.iter().zip(b).map(|(p, q)| (p + q).abs()).fold(0.0, f64::max))
        });
        odd.record_result(s, r, || format!("n={}", x.len()));

        let c = 40.0 * rng.next_f64() - 20.0;
        let shifted: Vec<f64> = x.iter().map(|v| v + c).collect();
        let r = normalize(&x, &soft)
            .and_then(|b| Ok(scaled_deviation(&normalize(&shifted, &soft)?, &b, 1e-9, 0.0)));
        shift.record_result(s, r, || format!("n={} c={c}", x.len()));
    }

    let mut perm = Check::at_most(
        "key-permutation equivariance (streamed)",
        "max |Δ|/(atol+rtol|ref|), 1e-12/1e-14",
        1.0,
    );
    for (si, spec) in builtin_specs().into_iter().enumerate() {
        for i in 0..cases / 10 {
            let s = case_seed(seed, 31 + si as u64, i as u64);
            let mut rng = XorShift64Star::new(s);
            let (y, x, k) = (1 + rng.next_index(40), 1 + rng.next_index(40), 1 + rng.next_index(8));
            let q = randn::<f64>(&mut rng, vec![y, k]);
            let kk = randn::<f64>(&mut rng, vec![x, k]);
            let v = randn::<f64>(&mut rng, vec![x, k]);
            let mut order: Vec<usize> = (0..x).collect();
            rng.shuffle(&mut order);
            let pick = |t: &Tensor<f64>| {
                let rows: Vec<&[f64]> = order.iter().map(|&j| t.row(j)).collect();
                Tensor::from_rows(&rows).expect("same width")
            };
            let cfg = AttentionConfig::new(spec.clone(), k).with_tile(TileConfig { g_y: 13, s_x: 7 });
            let r = streamed_attention(&q, &kk, &v, &cfg).and_then(|a| {
                let b = streamed_attention(&q, &pick(&kk), &pick(&v), &cfg)?;
                Ok(scaled_deviation(b.data(), a.data(), 1e-12, 1e-14))
            });
            perm.record_result(s, r, || format!("{} y={y} x={x} k={k}", spec.name));
        }
    }

    let mut flags = Check::at_most("declared property flags hold", "failed property checks", 0.0);
    for (si, spec) in builtin_specs().into_iter().enumerate() {
        let s = case_seed(seed, 35, si as u64);
        let failed = check_declared_properties(&spec, s, cases);
        let bad: Vec<_> = failed.iter().filter(|c| !c.passed).map(|c| c.property).collect();
        flags.record(s, bad.len() as f64, || format!("{}: {bad:?}", spec.name));
    }
    let mut false_claim = Check::at_least("false sign-preserving claim is caught", "failed property checks", 1.0);
    let mut liar = NormalizerSpec::softmax();
    liar.properties |= Properties::SIGN_PRESERVING;
    let s = case_seed(seed, 36, 0);
    let caught = check_declared_properties(&liar, s, cases)
        .iter()
        .filter(|c| !c.passed)
        .count();
    false_claim.record(s, caught as f64, || "softmax claiming sign preservation passed".into());

    let mut jvp = Check::at_most(
        "normalize_jvp vs central differences",
        "|jvp-fd|_2 / max(|jvp|_2, 1e-6)",
        1e-4,
    );
    let h = 1e-6;
    for (si, spec) in [sph.clone(), soft.clone()].into_iter().enumerate() {
        for i in 0..cases {
            let s = case_seed(seed, 37 + si as u64, i as u64);
            let mut rng = XorShift64Star::new(s);
            let n = 1 + rng.next_index(10);
            let x: Vec<f64> = (0..n).map(|_| rng.next_normal()).collect();
            let v: Vec<f64> = (0..n).map(|_| rng.next_normal()).collect();
            let plus: Vec<f64> = x.iter().zip(&v).map(|(a, b)| a + h * b).collect();
            let minus: Vec<f64> = x.iter().zip(&v).map(|(a, b)| a - h * b).collect();
            let r = (|| {
                let (np, nm) = (normalize(&plus, &spec)?, normalize(&minus, &spec)?);
                let j = normalize_jvp(&x, &v, &spec)?;
                let err: f64 = j
                    .iter()
                    .zip(np.iter().zip(&nm))
                    .map(|(a, (p, m))| (a - (p - m) / (2.0 * h)).powi(2))
                    .sum::<f64>()
                    .sqrt();
                let norm: f64 = j.iter().map(|a| a * a).sum::<f64>().sqrt();
                Ok(err / norm.max(1e-6))
            })();
            jvp.record_result(s, r, || format!("{} n={n}", spec.name));
        }
    }

    SuiteReport {
        name: "invariance",
        checks: vec![scale, odd, shift, perm, flags, false_claim, jvp],
    }
}

// ---------------------------------------------------------------------------
// binary16 accuracy

pub struct F16Outcome {
    pub fraction_within: f64,
    pub max_abs_diff: f64,
    pub overflows: usize,
}

/// Spherical streamed attention with binary16 emulation against a float32
/// naive reference.
pub fn f16_accuracy(n: usize, k: usize, seed: u64) -> streamattn::Result<F16Outcome> {
    let mut rng = XorShift64Star::new(seed);
    let q = randn::<f32>(&mut rng, vec![n, k]);
    let kk = randn::<f32>(&mut rng, vec![n, k]);
    let v = randn::<f32>(&mut rng, vec![n, k]);
    let cfg = AttentionConfig::new(NormalizerSpec::spherical(), k);
    let reference = naive_generalized_attention(&q, &kk, &v, &cfg)?;
    let (emulated, stats) = streamed_attention_with_stats(&q, &kk, &v, &cfg.with_f16(true))?;
    let report = allclose(&emulated, &reference, 0.0, 0.01)?;
    Ok(F16Outcome {
        fraction_within: report.fraction_within(0.01),
        max_abs_diff: report.max_abs_diff,
        overflows: stats.f16_overflows,
    })
}

pub fn f16_suite(seed: u64) -> SuiteReport {
    let mut c = Check::at_least(
        "f16 streamed within 0.01 of f32 naive (y=x=1024, k=128)",
        "fraction of elements",
        0.99,
    );
    let s = case_seed(seed, 40, 0);
    match f16_accuracy(1024, 128, s) {
        Ok(o) => c.record(s, o.fraction_within, || {
            format!("max |diff| {} overflows {}", o.max_abs_diff, o.overflows)
        }),
        Err(e) => c.error(s, e),
    }
    SuiteReport {
        name: "f16-accuracy",
        checks: vec![c],
    }
}

// ---------------------------------------------------------------------------
// memory and cost model

pub fn memory_suite(seed: u64) -> SuiteReport {
    let spec = NormalizerSpec::spherical();
    let mut tile_eq = Check::at_most(
        "instrumented peak tile == min(g,y)*min(s,x) == cost model",
        "elements off",
        0.0,
    );
    let mut constant = Check::at_most("peak tile constant while x doubles 1024 -> 8192", "distinct peaks - 1", 0.0);
    let (y, k) = (128, 16);
    let mut i = 0u64;
    for tile in [TileConfig { g_y: 64, s_x: 64 }, TileConfig { g_y: 13, s_x: 7 }] {
        let mut peaks = Vec::new();
        for x in [1024, 2048, 4096, 8192] {
            let s = case_seed(seed, 50, i);
            i += 1;
            let mut rng = XorShift64Star::new(s);
            let q = randn::<f32>(&mut rng, vec![y, k]);
            let kk = randn::<f32>(&mut rng, vec![x, k]);
            let v = randn::<f32>(&mut rng, vec![x, k]);
            let cfg = AttentionConfig::new(spec.clone(), k).with_tile(tile);
            let r = streamed_attention_with_stats(&q, &kk, &v, &cfg).and_then(|(_, st)| {
                let cost = cost_streamed_attention(y, x, k, DType::Float32, &spec, tile)?;
                let want = tile.g_y.min(y) * tile.s_x.min(x);
                peaks.push(st.peak_score_tile_elems);
                Ok((st.peak_score_tile_elems.abs_diff(want) + (cost.score_tile_elements as usize).abs_diff(want))
                    as f64)
            });
            tile_eq.record_result(s, r, || format!("y={y} x={x} tile={}x{}", tile.g_y, tile.s_x));
        }
        peaks.dedup();
        constant.record(seed, peaks.len() as f64 - 1.0, || format!("peaks {peaks:?}"));
    }
    // tiles larger than the problem clamp to it
    for (y, x) in [(1, 1), (3, 97), (97, 3)] {
        let s = case_seed(seed, 51, (y * 1000 + x) as u64);
        let mut rng = XorShift64Star::new(s);
        let tile = TileConfig { g_y: 16, s_x: 16 };
        let q = randn::<f64>(&mut rng, vec![y, 4]);
        let kk = randn::<f64>(&mut rng, vec![x, 4]);
        let v = randn::<f64>(&mut rng, vec![x, 4]);
        let cfg = AttentionConfig::new(spec.clone(), 4).with_tile(tile);
        let r = streamed_attention_with_stats(&q, &kk, &v, &cfg)
            .map(|(_, st)| st.peak_score_tile_elems.abs_diff(y.min(16) * x.min(16)) as f64);
        tile_eq.record_result(s, r, || format!("y={y} x={x} tile=16x16"));
    }

    let mut growth = Check::at_most(
        "naive score bytes x4 per doubling, equal to cost model",
        "|ratio-4| + model mismatch",
        0.0,
    );
    let mut prev: Option<usize> = None;
    for n in [128, 256, 512, 1024] {
        let s = case_seed(seed, 52, n as u64);
        let mut rng = XorShift64Star::new(s);
        let q = randn::<f32>(&mut rng, vec![n, 8]);
        let kk = randn::<f32>(&mut rng, vec![n, 8]);
        let v = randn::<f32>(&mut rng, vec![n, 8]);
        let cfg = AttentionConfig::new(spec.clone(), 8);
        let r = naive_attention_with_stats(&q, &kk, &v, &cfg).and_then(|(_, st)| {
            let bytes = st.score_elems_materialized * 4;
            let cost = cost_naive_attention(n, n, 8, DType::Float32, &spec)?;
            let mut dev = (cost.score_matrix_bytes_materialized as usize).abs_diff(bytes) as f64;
            if let Some(p) = prev {
                dev += (bytes as f64 / p as f64 - 4.0).abs();
            }
            prev = Some(bytes);
            Ok(dev)
        });
        growth.record_result(s, r, || format!("n={n}"));
    }
    SuiteReport {
        name: "memory",
        checks: vec![tile_eq, constant, growth],
    }
}

pub fn sfu_suite(seed: u64) -> SuiteReport {
    let mut soft = Check::at_most("softmax sfu_ops == 2*y*x (naive and streamed)", "ops off", 0.0);
    let mut poly = Check::at_most("spherical / signed_l1 sfu_ops == 0", "ops", 0.0);
    let sizes = [1, 2, 3, 16, 97, 128, 1024, 4096, PAPER_ANCHOR, 3 * PAPER_ANCHOR];
    let tile = TileConfig::default();
    for (i, &y) in sizes.iter().enumerate() {
        for (j, &x) in sizes.iter().enumerate() {
            let s = case_seed(seed, 60, (i * sizes.len() + j) as u64);
            for spec in builtin_specs() {
                let r = (|| {
                    let n = cost_naive_attention(y, x, 128, DType::Float32, &spec)?;
                    let st = cost_streamed_attention(y, x, 128, DType::Float32, &spec, tile)?;
                    let want = if spec.is_softmax() { 2 * (y * x) as u64 } else { 0 };
                    Ok((n.sfu_ops.abs_diff(want) + st.sfu_ops.abs_diff(want)) as f64)
                })();
                let check = if spec.is_softmax() { &mut soft } else { &mut poly };
                check.record_result(s, r, || format!("{} y={y} x={x}", spec.name));
            }
        }
    }
    SuiteReport {
        name: "sfu",
        checks: vec![soft, poly],
    }
}

// ---------------------------------------------------------------------------
// GRN model

fn grn_cfg() -> GRNConfig {
    let mut c = GRNConfig::new(24, 16, 2, 4, 2, 3);
    c.tile = TileConfig { g_y: 5, s_x: 7 };
    c
}

/// A cell with at least one zero count and at least two positive ones.
fn grn_sample(n: usize, rng: &mut XorShift64Star) -> (CellSample, usize) {
    let mut s = CellSample::random_counts(n, 5, rng);
    let zero = rng.next_index(n);
    s.multiplicities[zero] = 0.0;
    s.multiplicities[(zero + 1) % n] = 1.0 + rng.next_index(5) as f64;
    s.multiplicities[(zero + 2) % n] = 1.0 + rng.next_index(5) as f64;
    (s, zero)
}

fn hidden_deviation_after_delete(
    full: &Tensor<f64>,
    cut: &Tensor<f64>,
    gene: usize,
) -> f64 {
    (0..cut.shape()[0])
        .map(|j| {
            let i = if j < gene { j } else { j + 1 };
            rel_deviation(cut.row(j), full.row(i))
        })
        .fold(0.0, f64::max)
}

pub fn grn_suite(cases: usize, seed: u64) -> SuiteReport {
    let mut deletion = Check::at_most("zero-count gene deletion leaves other genes unchanged", "max rel dev", 1e-12);
    let mut control = Check::at_least("softmax negative control: deletion is visible", "max rel dev", 1e-9);
    let mut relabel = Check::at_most("gene relabeling permutes hidden states, keeps logits", "max rel dev", 1e-12);
    let mut unit = Check::at_most("adjacency rows unit L2 (check mode)", "max | |row|-1 |", 1e-12);
    let mut paths = Check::at_most("streamed == naive full forward", "max |Δ|/(rtol|ref|+atol), 1e-10", 1.0);
    let mut init = Check::at_most("seeded init is deterministic", "mismatches", 0.0);

    for i in 0..cases {
        let s = case_seed(seed, 70, i as u64);
        let mut rng = XorShift64Star::new(s);
        let base = grn_cfg();
        let params = match grn::init_params(&base, s) {
            Ok(p) => p,
            Err(e) => {
                init.error(s, e);
                continue;
            }
        };
        let (sample, zero) = grn_sample(base.n_genes, &mut rng);

        let check = base.clone().check_mode();
        let r = (|| {
            let full = grn::encode(&sample, &params, &check)?;
            let (c2, p2, s2) = grn::delete_gene(&check, &params, &sample, zero)?;
            let cut = grn::encode(&s2, &p2, &c2)?;
            let logits = rel_deviation(&grn::grn_forward(&s2, &p2, &c2)?, &grn::grn_forward(&sample, &params, &check)?);
            Ok(hidden_deviation_after_delete(&full, &cut, zero).max(logits))
        })();
        deletion.record_result(s, r, || format!("deleted gene {zero}"));

        let soft = check.clone().with_normalizer("softmax");
        let r = (|| {
            let full = grn::encode(&sample, &params, &soft)?;
            let (c2, p2, s2) = grn::delete_gene(&soft, &params, &sample, zero)?;
            Ok(hidden_deviation_after_delete(&full, &grn::encode(&s2, &p2, &c2)?, zero))
        })();
        control.record_result(s, r, || format!("deleted gene {zero}"));

        let mut order: Vec<usize> = (0..base.n_genes).collect();
        rng.shuffle(&mut order);
        let r = (|| {
            let (pp, ps) = grn::permute_genes(&base, &params, &sample, &order)?;
            let h = grn::encode(&sample, &params, &base)?;
            let hp = grn::encode(&ps, &pp, &base)?;
            let rows = order
                .iter()
                .enumerate()
                .map(|(j, &g)| rel_deviation(hp.row(j), h.row(g)))
                .fold(0.0, f64::max);
            let logits = rel_deviation(
                &grn::grn_forward(&ps, &pp, &base)?,
                &grn::grn_forward(&sample, &params, &base)?,
            );
            Ok(rows.max(logits))
        })();
        relabel.record_result(s, r, || format!("order {order:?}"));

        let r = (|| {
            let mut worst = 0.0f64;
            for layer in 0..check.n_layers {
                for head in 0..check.heads {
                    let a = grn::extract_adjacency(&sample, &params, &check, layer, head)?;
                    for q in 0..check.n_genes {
                        let norm = a.row(q).iter().map(|v| v * v).sum::<f64>().sqrt();
                        worst = worst.max((norm - 1.0).abs());
                    }
                }
            }
            Ok(worst)
        })();
        unit.record_result(s, r, || "adjacency".into());

        let r = (|| {
            use streamattn::attention::AttentionPath;
            let st = grn::grn_forward(&sample, &params, &base.clone().with_path(AttentionPath::Streamed))?;
            let nv = grn::grn_forward(&sample, &params, &base.clone().with_path(AttentionPath::Naive))?;
            let hs = grn::encode(&sample, &params, &base.clone().with_path(AttentionPath::Streamed))?;
            let hn = grn::encode(&sample, &params, &base.clone().with_path(AttentionPath::Naive))?;
            Ok(scaled_deviation(&st, &nv, 1e-10, 1e-300).max(scaled_deviation(hs.data(), hn.data(), 1e-10, 1e-300)))
        })();
        paths.record_result(s, r, || "full forward".into());

        let r = grn::init_params(&base, s).and_then(|again| {
            let other = grn::init_params(&base, s ^ 1)?;
            Ok((again != params) as u8 as f64 + (other == params) as u8 as f64)
        });
        init.record_result(s, r, || "init_params".into());
    }
    SuiteReport {
        name: "grn",
        checks: vec![deletion, control, relabel, unit, paths, init],
    }
}

// ---------------------------------------------------------------------------

/// Number of random cases per property in the morphism, invariance and GRN
/// suites.
pub const CASES: usize = 1000;

type Suite<'a> = (&'static str, Box<dyn Fn() -> SuiteReport + 'a>);

pub fn cmd_verify(cfg: &RunConfig, report: &mut dyn Write) -> CliResult<Vec<SuiteReport>> {
    let mut grid = EquivalenceGrid::default();
    if !cfg.sizes.is_empty() {
        grid.sizes = cfg.sizes.clone();
    }
    let seed = cfg.seed;
    let suites: [Suite; 7] = [
        ("streaming-equivalence", Box::new(|| equivalence_suite(&grid, seed))),
        ("morphism", Box::new(|| morphism_suite(CASES, seed, cfg.inject_fault))),
        ("invariance", Box::new(|| invariance_suite(CASES, seed))),
        ("f16-accuracy", Box::new(|| f16_suite(seed))),
        ("memory", Box::new(|| memory_suite(seed))),
        ("sfu", Box::new(|| sfu_suite(seed))),
        ("grn", Box::new(|| grn_suite(20, seed))),
    ];
    let mut out = Vec::new();
    for (name, run) in suites {
        let t = std::time::Instant::now();
        let r = run();
        debug_assert_eq!(r.name, name);
        r.print(report)?;
        writeln!(report, "    ({:.2}s)", t.elapsed().as_secs_f64())?;
        out.push(r);
    }
    let failed: Vec<&str> = out.iter().filter(|s| !s.passed()).map(|s| s.name).collect();
    if failed.is_empty() {
        writeln!(report, "all {} suites passed", out.len())?;
    } else {
        writeln!(report, "FAILED suites: {}", failed.join(", "))?;
        for s in out.iter().filter(|s| !s.passed()) {
            writeln!(report, "  {}", s.failure_summary())?;
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn check_bounds() {
        let mut c = Check::at_most("p", "m", 1.0);
        assert!(!c.passed(), "no cases is not a pass");
        c.record(1, 0.5, String::new);
        assert!(c.passed());
        c.record(2, 2.0, || "bad".into());
        c.record(3, 3.0, || "worse".into());
        assert_eq!(c.failing_seed, Some(2));
        assert_eq!(c.worst, 3.0);
        let mut l = Check::at_least("p", "m", 0.9);
        l.record(1, 0.95, String::new);
        l.record(2, 0.91, String::new);
        assert!(l.passed());
        assert_eq!(l.worst, 0.91);
        let mut n = Check::at_most("p", "m", 1.0);
        n.record(1, f64::NAN, || "nan".into());
        assert!(!n.passed());
    }

    #[test]
    fn splits_cover_the_input() {
        let mut rng = XorShift64Star::new(3);
        for n in 0..20 {
            for parts in 1..6 {
                let l = random_splits(&mut rng, n, parts);
                assert_eq!(l.len(), parts);
                assert_eq!(l.iter().sum::<usize>(), n);
            }
        }
    }

    #[test]
    fn deviation_metrics() {
        assert_eq!(scaled_deviation(&[1.0, 2.0], &[1.0, 2.0], 1e-12, 0.0), 0.0);
        assert_eq!(rel_deviation(&[0.5], &[0.25]), 0.25);
        assert_eq!(rel_deviation(&[4.0], &[2.0]), 1.0);
        assert!(scaled_deviation(&[f64::NAN], &[1.0], 1.0, 1.0).is_nan());
    }

    #[test]
    fn morphism_suite_passes_and_fault_is_caught() {
        let ok = morphism_suite(50, 7, false);
        assert!(ok.passed(), "{}", ok.failure_summary());
        let bad = morphism_suite(50, 7, true);
        assert!(!bad.passed());
        assert!(bad.failure_summary().contains("morphism"));
    }

    #[test]
    fn small_equivalence_grid_passes() {
        let grid = EquivalenceGrid {
            sizes: vec![1, 3, 17],
            ks: vec![1, 4],
            dtypes: vec![DType::Float64, DType::Float32],
        };
        let r = equivalence_suite(&grid, 1);
        assert!(r.passed(), "{}", r.failure_summary());
        assert_eq!(r.checks.len(), 6);
        assert_eq!(r.checks[0].cases, 9 * 2 * 4);
    }

    #[test]
    fn quick_suites_pass() {
        for r in [invariance_suite(100, 2), sfu_suite(3), grn_suite(2, 4)] {
            assert!(r.passed(), "{}", r.failure_summary());
        }
    }
}
