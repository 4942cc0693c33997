//! Generalized attention: `O = N(scale * Q K^T) V` for any normalizer `N`.
//!
//! [`naive_generalized_attention`] materializes the full `y x x` score
//! matrix and is the reference. [`streamed_attention`] never holds more
//! than one `g_y x s_x` score tile per query group: the outer loop walks
//! query groups of `g_y` rows, the inner loop streams keys/values in chunks
//! of `s_x`, and each query row keeps its own [`StreamState`] until the
//! stream ends.
//!
//! SoftMax always streams through the running-max accumulator. Partial
//! tiles at the ends of either axis are processed as smaller tiles, never
//! padded.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::normalizers::{normalize_row, NormalizerSpec};
use crate::streaming::{SafeStreamState, StreamMode, StreamState};
use crate::tensor::{matmul, round_f16, transpose, DType, Element, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct TileConfig {
    /// Query rows per group.
    pub g_y: usize,
    /// Key/value rows per streamed chunk.
    pub s_x: usize,
}

impl TileConfig {
    pub fn new(g_y: usize, s_x: usize) -> Result<Self> {
        let t = Self { g_y, s_x };
        t.validate()?;
        Ok(t)
    }

    pub fn validate(&self) -> Result<()> {
        if self.g_y == 0 || self.s_x == 0 {
            return Err(Error::Config(format!(
                "tile sizes must be >= 1, got g_y={} s_x={}",
                self.g_y, self.s_x
            )));
        }
        Ok(())
    }

    /// Score elements held at once for a `y x x` problem.
    pub fn score_tile_elems(&self, y: usize, x: usize) -> usize {
        self.g_y.min(y) * self.s_x.min(x)
    }
}

impl Default for TileConfig {
    fn default() -> Self {
        Self { g_y: 64, s_x: 64 }
    }
}

#[derive(Debug, Clone)]
pub struct AttentionConfig {
    pub spec: NormalizerSpec,
    /// Multiplier applied to every raw `q . k` score.
    pub score_scale: f64,
    pub tile: TileConfig,
    /// Round Q, K, V, each score tile and each row accumulator to binary16
    /// (float32 tensors only). The denominator sum stays in float32.
    pub f16_emulation: bool,
    /// Process query groups on the rayon pool.
    pub parallel: bool,
    /// Refuse to materialize naive score matrices larger than this.
    pub naive_score_budget_bytes: Option<u64>,
}

impl AttentionConfig {
    /// Config with the default score scale for `head_dim`.
    pub fn new(spec: NormalizerSpec, head_dim: usize) -> Self {
        let score_scale = Self::default_score_scale(&spec, head_dim);
        Self {
            spec,
            score_scale,
            tile: TileConfig::default(),
            f16_emulation: false,
            parallel: true,
            naive_score_budget_bytes: None,
        }
    }

    /// `1/sqrt(k)` for SoftMax. Everything else gets 1: a positive rescale
    /// cannot change the output of a positively scale-invariant normalizer.
    pub fn default_score_scale(spec: &NormalizerSpec, head_dim: usize) -> f64 {
        if spec.is_softmax() {
            1.0 / (head_dim as f64).sqrt()
        } else {
            1.0
        }
    }

    pub fn with_tile(mut self, tile: TileConfig) -> Self {
        self.tile = tile;
        self
    }

    pub fn with_scale(mut self, scale: f64) -> Self {
        self.score_scale = scale;
        self
    }

    pub fn with_f16(mut self, on: bool) -> Self {
        self.f16_emulation = on;
        self
    }

    pub fn sequential(mut self) -> Self {
        self.parallel = false;
        self
    }

    pub fn validate(&self, dtype: DType) -> Result<()> {
        self.tile.validate()?;
        if !self.score_scale.is_finite() || self.score_scale == 0.0 {
            return Err(Error::Config(format!(
                "score_scale must be finite and nonzero, got {}",
                self.score_scale
            )));
        }
        if self.f16_emulation && dtype != DType::Float32 {
            return Err(Error::Config("f16 emulation needs float32 tensors".into()));
        }
        Ok(())
    }
}

/// Instrumentation from one streamed run.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct StreamStats {
    /// Largest score tile (elements) live in any one query group.
    pub peak_score_tile_elems: usize,
    /// `g_y * s_x`.
    pub score_tile_limit: usize,
    pub tiles: usize,
    /// Values that overflowed binary16 under f16 emulation.
    pub f16_overflows: usize,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct NaiveStats {
    pub score_elems_materialized: usize,
}

/// `(y, x, d, dv)` after validating `Q: [y x d]`, `K: [x x d]`, `V: [x x dv]`.
fn attention_dims<T: Element>(
    q: &Tensor<T>,
    k: &Tensor<T>,
    v: &Tensor<T>,
) -> Result<(usize, usize, usize, usize)> {
    let (y, d) = q.dims2("attention Q")?;
    let (x, dk) = k.dims2("attention K")?;
    let (xv, dv) = v.dims2("attention V")?;
    if d != dk {
        return Err(Error::Shape {
            op: "attention Q/K",
            lhs: q.shape().to_vec(),
            rhs: k.shape().to_vec(),
        });
    }
    if x != xv {
        return Err(Error::Shape {
            op: "attention K/V",
            lhs: k.shape().to_vec(),
            rhs: v.shape().to_vec(),
        });
    }
    Ok((y, x, d, dv))
}

#[inline]
fn q16<T: Element>(v: T) -> T {
    T::narrow(round_f16(v.widen() as f32) as f64)
}

fn quantized<T: Element>(t: &Tensor<T>) -> Tensor<T> {
    t.map(q16)
}

/// Reference attention: builds `S`, normalizes each row, multiplies by `V`.
pub fn naive_generalized_attention<T: Element>(
    q: &Tensor<T>,
    k: &Tensor<T>,
    v: &Tensor<T>,
    cfg: &AttentionConfig,
) -> Result<Tensor<T>> {
    naive_attention_with_stats(q, k, v, cfg).map(|(o, _)| o)
}

pub fn naive_attention_with_stats<T: Element>(
    q: &Tensor<T>,
    k: &Tensor<T>,
    v: &Tensor<T>,
    cfg: &AttentionConfig,
) -> Result<(Tensor<T>, NaiveStats)> {
    let (y, x, _, _) = attention_dims(q, k, v)?;
    let weights = normalized_scores(q, k, cfg)?;
    let v = if cfg.f16_emulation { quantized(v) } else { v.clone() };
    let out = matmul(&weights, &v)?;
    Ok((
        out,
        NaiveStats {
            score_elems_materialized: y * x,
        },
    ))
}

/// The full `[y x x]` matrix `N(scale * Q K^T)`, one normalized row per
/// query.
pub fn normalized_scores<T: Element>(
    q: &Tensor<T>,
    k: &Tensor<T>,
    cfg: &AttentionConfig,
) -> Result<Tensor<T>> {
    cfg.validate(T::DTYPE)?;
    let (y, d) = q.dims2("attention Q")?;
    let (x, dk) = k.dims2("attention K")?;
    if d != dk {
        return Err(Error::Shape {
            op: "attention Q/K",
            lhs: q.shape().to_vec(),
            rhs: k.shape().to_vec(),
        });
    }
    let bytes = (y as u128) * (x as u128) * T::DTYPE.size_bytes() as u128;
    if let Some(budget) = cfg.naive_score_budget_bytes {
        if bytes > budget as u128 {
            return Err(Error::OutOfMemory {
                what: "naive score matrix",
                bytes,
            });
        }
    }
    let mut probe: Vec<T> = Vec::new();
    if probe.try_reserve_exact(y * x).is_err() {
        return Err(Error::OutOfMemory {
            what: "naive score matrix",
            bytes,
        });
    }
    drop(probe);

    let (q, k) = if cfg.f16_emulation {
        (quantized(q), quantized(k))
    } else {
        (q.clone(), k.clone())
    };
    let scale = T::narrow(cfg.score_scale);
    let mut scores = matmul(&q, &transpose(&k)?)?.map(|s| s * scale);
    if cfg.f16_emulation {
        scores = quantized(&scores);
    }

    let mut weights = Vec::with_capacity(y * x);
    for i in 0..y {
        let row = scores.row(i);
        let w = if cfg.spec.is_softmax() {
            stable_softmax_row(row, &cfg.spec, i)?
        } else {
            normalize_row(row, &cfg.spec, Some(i))?
        };
        weights.extend(w);
    }
    Tensor::with_non_finite(vec![y, x], weights)
}

/// SoftMax of one row after subtracting its maximum.
fn stable_softmax_row<T: Element>(row: &[T], spec: &NormalizerSpec, i: usize) -> Result<Vec<T>> {
    let m = row.iter().map(|s| s.widen()).fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<T> = row.iter().map(|&s| T::narrow(s.widen() - m).exp()).collect();
    let z: f64 = e.iter().map(|v| v.widen()).sum();
    let eps = if spec.denom_epsilon == 0.0 {
        0.0
    } else {
        spec.denom_epsilon * (-m).exp()
    };
    let d = z + eps;
    if d == 0.0 || !d.is_finite() {
        return Err(Error::DegenerateDenominator { row: Some(i), z });
    }
    Ok(e.iter().map(|v| T::narrow(v.widen() / d)).collect())
}

enum RowState<A> {
    Plain(StreamState<A>),
    Safe(SafeStreamState<A>),
}

impl<A: Element> RowState<A> {
    fn new(spec: &NormalizerSpec, dv: usize) -> Result<Self> {
        Ok(if spec.is_softmax() {
            RowState::Safe(SafeStreamState::new(dv))
        } else {
            RowState::Plain(StreamState::init(StreamMode::Attention, dv)?)
        })
    }

    #[inline]
    fn accumulate<T: Element>(&mut self, spec: &NormalizerSpec, s: &[T], v: &[T]) -> Result<()> {
        match self {
            RowState::Plain(st) => st.accumulate(spec, s, v),
            RowState::Safe(st) => st.accumulate(s, v),
        }
    }

    fn o_mut(&mut self) -> &mut [A] {
        match self {
            RowState::Plain(st) => &mut st.o,
            RowState::Safe(st) => &mut st.o,
        }
    }

    fn finalize(&self, spec: &NormalizerSpec, row: usize) -> Result<Vec<A>> {
        match self {
            RowState::Plain(st) => st.finalize_row(spec, Some(row)),
            RowState::Safe(st) => st.finalize_row(spec, Some(row)),
        }
    }
}

/// Fused attention, same contract as [`naive_generalized_attention`].
pub fn streamed_attention<T: Element>(
    q: &Tensor<T>,
    k: &Tensor<T>,
    v: &Tensor<T>,
    cfg: &AttentionConfig,
) -> Result<Tensor<T>> {
    streamed_attention_with_stats(q, k, v, cfg).map(|(o, _)| o)
}

pub fn streamed_attention_with_stats<T: Element>(
    q: &Tensor<T>,
    k: &Tensor<T>,
    v: &Tensor<T>,
    cfg: &AttentionConfig,
) -> Result<(Tensor<T>, StreamStats)> {
    cfg.validate(T::DTYPE)?;
    let (y, _, _, dv) = attention_dims(q, k, v)?;
    let (out, stats) = if cfg.f16_emulation {
        let (q, k, v) = (quantized(q), quantized(k), quantized(v));
        stream_groups::<T, f32>(&q, &k, &v, cfg)?
    } else {
        stream_groups::<T, f64>(q, k, v, cfg)?
    };
    Ok((Tensor::with_non_finite(vec![y, dv], out)?, stats))
}

fn stream_groups<T: Element, A: Element>(
    q: &Tensor<T>,
    k: &Tensor<T>,
    v: &Tensor<T>,
    cfg: &AttentionConfig,
) -> Result<(Vec<T>, StreamStats)> {
    let (y, _, _, dv) = attention_dims(q, k, v)?;
    let mut out = vec![T::zero(); y * dv];
    let group_len = cfg.tile.g_y * dv;
    let run = |(gi, out_rows): (usize, &mut [T])| {
        stream_one_group::<T, A>(q, k, v, cfg, gi * cfg.tile.g_y, out_rows)
    };
    let per_group: Vec<StreamStats> = if cfg.parallel {
        out.par_chunks_mut(group_len)
            .enumerate()
            .map(run)
            .collect::<Result<_>>()?
    } else {
        out.chunks_mut(group_len)
            .enumerate()
            .map(run)
            .collect::<Result<_>>()?
    };
    let stats = per_group.iter().fold(
        StreamStats {
            score_tile_limit: cfg.tile.g_y * cfg.tile.s_x,
            ..Default::default()
        },
        |acc, g| StreamStats {
            peak_score_tile_elems: acc.peak_score_tile_elems.max(g.peak_score_tile_elems),
            score_tile_limit: acc.score_tile_limit,
            tiles: acc.tiles + g.tiles,
            f16_overflows: acc.f16_overflows + g.f16_overflows,
        },
    );
    Ok((out, stats))
}

fn stream_one_group<T: Element, A: Element>(
    q: &Tensor<T>,
    k: &Tensor<T>,
    v: &Tensor<T>,
    cfg: &AttentionConfig,
    row0: usize,
    out_rows: &mut [T],
) -> Result<StreamStats> {
    let (_, x, d, dv) = attention_dims(q, k, v)?;
    let (q, k, v) = (q.data(), k.data(), v.data());
    let spec = &cfg.spec;
    let rows = out_rows.len() / dv;
    let limit = cfg.tile.g_y * cfg.tile.s_x;
    let scale = T::narrow(cfg.score_scale);
    let f16 = cfg.f16_emulation;

    let mut stats = StreamStats {
        score_tile_limit: limit,
        ..Default::default()
    };
    let mut states = (0..rows)
        .map(|_| RowState::<A>::new(spec, dv))
        .collect::<Result<Vec<_>>>()?;
    let mut tile = vec![T::zero(); rows * cfg.tile.s_x.min(x)];

    for c0 in (0..x).step_by(cfg.tile.s_x) {
        let c1 = (c0 + cfg.tile.s_x).min(x);
        let w = c1 - c0;
        let used = rows * w;
        if used > limit || used > tile.len() {
            return Err(Error::TileOverflow { used, limit });
        }
        stats.peak_score_tile_elems = stats.peak_score_tile_elems.max(used);
        stats.tiles += 1;

        for (i, tile_row) in tile[..used].chunks_exact_mut(w).enumerate() {
            let q_row = &q[(row0 + i) * d..(row0 + i + 1) * d];
            for (j, s) in tile_row.iter_mut().enumerate() {
                let k_row = &k[(c0 + j) * d..(c0 + j + 1) * d];
                let dot: f64 = q_row
                    .iter()
                    .zip(k_row)
                    .map(|(a, b)| a.widen() * b.widen())
                    .sum();
                *s = T::narrow(dot) * scale;
                if f16 {
                    *s = q16(*s);
                }
            }
        }

        let v_chunk = &v[c0 * dv..c1 * dv];
        for (state, scores) in states.iter_mut().zip(tile[..used].chunks_exact(w)) {
            state.accumulate(spec, scores, v_chunk)?;
            if f16 {
                for o in state.o_mut() {
                    let r = A::narrow(round_f16(o.widen() as f32) as f64);
                    if o.is_finite() && r.is_infinite() {
                        stats.f16_overflows += 1;
                    }
                    *o = r;
                }
            }
        }
    }

    for (i, (state, out_row)) in states.iter().zip(out_rows.chunks_exact_mut(dv)).enumerate() {
        let o = state.finalize(spec, row0 + i)?;
        for (dst, src) in out_row.iter_mut().zip(o) {
            *dst = T::narrow(src.widen());
        }
    }
    Ok(stats)
}

/// Which attention implementation a composite op should call.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AttentionPath {
    Naive,
    Streamed,
}

pub fn attention<T: Element>(
    q: &Tensor<T>,
    k: &Tensor<T>,
    v: &Tensor<T>,
    cfg: &AttentionConfig,
    path: AttentionPath,
) -> Result<Tensor<T>> {
    match path {
        AttentionPath::Naive => naive_generalized_attention(q, k, v, cfg),
        AttentionPath::Streamed => streamed_attention(q, k, v, cfg),
    }
}

/// Key/value head used by query head `head`.
pub fn kv_head_for(head: usize, h: usize, h_kv: usize) -> usize {
    head * h_kv / h
}

/// `[n x heads x d]` -> the `[n x d]` slice of one head.
fn head_slice<T: Element>(t: &Tensor<T>, head: usize) -> Result<Tensor<T>> {
    let (n, heads, d) = match t.shape() {
        &[n, heads, d] => (n, heads, d),
        s => {
            return Err(Error::Rank {
                op: "multi_head_attention",
                expected: 3,
                shape: s.to_vec(),
            })
        }
    };
    let data = t.data();
    let mut out = Vec::with_capacity(n * d);
    for i in 0..n {
        let start = (i * heads + head) * d;
        out.extend_from_slice(&data[start..start + d]);
    }
    Tensor::with_non_finite(vec![n, d], out)
}

/// Grouped-query attention over `Q: [y x h x d]`, `K, V: [x x h_kv x d]`.
/// Query head `i` reads key/value head `floor(i * h_kv / h)`.
pub fn multi_head_attention<T: Element>(
    q: &Tensor<T>,
    k: &Tensor<T>,
    v: &Tensor<T>,
    cfg: &AttentionConfig,
    h: usize,
    h_kv: usize,
) -> Result<Tensor<T>> {
    multi_head_attention_with(q, k, v, cfg, h, h_kv, AttentionPath::Streamed)
}

pub fn multi_head_attention_with<T: Element>(
    q: &Tensor<T>,
    k: &Tensor<T>,
    v: &Tensor<T>,
    cfg: &AttentionConfig,
    h: usize,
    h_kv: usize,
    path: AttentionPath,
) -> Result<Tensor<T>> {
    if h == 0 || h_kv == 0 || !h.is_multiple_of(h_kv) {
        return Err(Error::Config(format!(
            "query heads ({h}) must be a positive multiple of key/value heads ({h_kv})"
        )));
    }
    let check = |t: &Tensor<T>, heads: usize, what: &'static str| -> Result<()> {
        if t.rank() != 3 || t.shape()[1] != heads {
            return Err(Error::Shape {
                op: what,
                lhs: t.shape().to_vec(),
                rhs: vec![t.shape()[0], heads, *t.shape().last().unwrap()],
            });
        }
        Ok(())
    };
    check(q, h, "multi_head_attention Q")?;
    check(k, h_kv, "multi_head_attention K")?;
    check(v, h_kv, "multi_head_attention V")?;
    let y = q.shape()[0];
    let dv = v.shape()[2];

    let kv: Vec<(Tensor<T>, Tensor<T>)> = (0..h_kv)
        .map(|g| Ok((head_slice(k, g)?, head_slice(v, g)?)))
        .collect::<Result<_>>()?;
    let mut out = vec![T::zero(); y * h * dv];
    for head in 0..h {
        let (kh, vh) = &kv[kv_head_for(head, h, h_kv)];
        let o = attention(&head_slice(q, head)?, kh, vh, cfg, path)?;
        for i in 0..y {
            out[(i * h + head) * dv..(i * h + head + 1) * dv].copy_from_slice(o.row(i));
        }
    }
    Tensor::with_non_finite(vec![y, h, dv], out)
}

/// Scales row `i` (everything after the first axis) of `keys` by `m[i]`.
pub fn apply_multiplicity<T: Element>(keys: &Tensor<T>, m: &[f64]) -> Result<Tensor<T>> {
    let x = keys.shape()[0];
    if m.len() != x {
        return Err(Error::Length {
            op: "apply_multiplicity",
            lhs: x,
            rhs: m.len(),
        });
    }
    if let Some((index, &value)) = m
        .iter()
        .enumerate()
        .find(|(_, v)| !v.is_finite() || **v < 0.0)
    {
        return Err(Error::Multiplicity { index, value });
    }
    let block = keys.len() / x;
    let mut out = keys.clone();
    for (row, &mi) in out.data_mut().chunks_exact_mut(block).zip(m) {
        for e in row {
            *e = T::narrow(mi * e.widen());
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::XorShift64Star;
    use crate::tensor::allclose;

    fn randn<T: Element>(rng: &mut XorShift64Star, shape: Vec<usize>) -> Tensor<T> {
        Tensor::from_fn(shape, |_| T::narrow(rng.next_normal())).unwrap()
    }

    fn cfg(spec: NormalizerSpec, d: usize, g: usize, s: usize) -> AttentionConfig {
        AttentionConfig::new(spec, d).with_tile(TileConfig::new(g, s).unwrap())
    }

    fn t(rows: &[&[f64]]) -> Tensor<f64> {
        Tensor::from_rows(rows).unwrap()
    }

    #[test]
    fn naive_spherical_hand_example() {
        let (q, k, v) = (t(&[&[1.0]]), t(&[&[3.0], &[4.0]]), t(&[&[10.0], &[20.0]]));
        let c = cfg(NormalizerSpec::spherical(), 1, 1, 1);
        let o = naive_generalized_attention(&q, &k, &v, &c).unwrap();
        assert!((o.data()[0] - 22.0).abs() < 1e-13);
        // s_x = 1: (o, z) = (3*10, 9) then (30 + 4*20, 25); 110 / sqrt(25) = 22
        let (s, stats) = streamed_attention_with_stats(&q, &k, &v, &c).unwrap();
        assert!((s.data()[0] - 22.0).abs() < 1e-13);
        assert_eq!(stats.tiles, 2);
    }

    #[test]
    fn single_key_cases() {
        let mut rng = XorShift64Star::new(1);
        let q = randn::<f64>(&mut rng, vec![3, 4]);
        let k = randn::<f64>(&mut rng, vec![1, 4]);
        let v = randn::<f64>(&mut rng, vec![1, 5]);
        let sm = naive_generalized_attention(&q, &k, &v, &cfg(NormalizerSpec::softmax(), 4, 2, 2)).unwrap();
        for i in 0..3 {
            assert_eq!(sm.row(i), v.row(0));
        }
        let sph = streamed_attention(&q, &k, &v, &cfg(NormalizerSpec::spherical(), 4, 2, 2)).unwrap();
        for i in 0..3 {
            let score: f64 = q.row(i).iter().zip(k.row(0)).map(|(a, b)| a * b).sum();
            for (o, vv) in sph.row(i).iter().zip(v.row(0)) {
                assert!((o - score.signum() * vv).abs() <= 1e-15 * vv.abs().max(1.0));
            }
        }
    }

    #[test]
    fn streamed_equals_naive_prime_sizes() {
        let mut rng = XorShift64Star::new(97);
        let q = randn::<f64>(&mut rng, vec![97, 8]);
        let k = randn::<f64>(&mut rng, vec![97, 8]);
        let v = randn::<f64>(&mut rng, vec![97, 8]);
        for spec in [NormalizerSpec::spherical(), NormalizerSpec::softmax(), NormalizerSpec::signed_l1()] {
            let c = cfg(spec, 8, 16, 16);
            let n = naive_generalized_attention(&q, &k, &v, &c).unwrap();
            let (s, stats) = streamed_attention_with_stats(&q, &k, &v, &c).unwrap();
            let r = allclose(&s, &n, 1e-12, 1e-14).unwrap();
            assert!(r.all_close, "{} max diff {}", c.spec.name, r.max_abs_diff);
            assert_eq!(stats.peak_score_tile_elems, 256);
            assert_eq!(stats.tiles, 7 * 7);
        }
    }

    #[test]
    fn single_tile_matches_naive() {
        let mut rng = XorShift64Star::new(5);
        let q = randn::<f64>(&mut rng, vec![5, 3]);
        let k = randn::<f64>(&mut rng, vec![6, 3]);
        let v = randn::<f64>(&mut rng, vec![6, 2]);
        let c = cfg(NormalizerSpec::spherical(), 3, 100, 100);
        let n = naive_generalized_attention(&q, &k, &v, &c).unwrap();
        let (s, stats) = streamed_attention_with_stats(&q, &k, &v, &c).unwrap();
        assert!(allclose(&s, &n, 1e-12, 1e-14).unwrap().all_close);
        assert_eq!(stats.peak_score_tile_elems, 30);
    }

    #[test]
    fn sequential_and_parallel_agree_bitwise() {
        let mut rng = XorShift64Star::new(6);
        let q = randn::<f32>(&mut rng, vec![40, 8]);
        let k = randn::<f32>(&mut rng, vec![33, 8]);
        let v = randn::<f32>(&mut rng, vec![33, 8]);
        let c = cfg(NormalizerSpec::softmax(), 8, 7, 5);
        let a = streamed_attention(&q, &k, &v, &c).unwrap();
        let b = streamed_attention(&q, &k, &v, &c.clone().sequential()).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn degenerate_row_is_reported_with_index() {
        let q = t(&[&[1.0], &[0.0]]);
        let k = t(&[&[2.0], &[3.0]]);
        let v = t(&[&[1.0], &[1.0]]);
        let c = cfg(NormalizerSpec::spherical(), 1, 1, 1);
        assert_eq!(
            naive_generalized_attention(&q, &k, &v, &c).unwrap_err(),
            Error::DegenerateDenominator { row: Some(1), z: 0.0 }
        );
        assert_eq!(
            streamed_attention(&q, &k, &v, &c).unwrap_err(),
            Error::DegenerateDenominator { row: Some(1), z: 0.0 }
        );
        let eps = AttentionConfig::new(NormalizerSpec::spherical().with_epsilon(1e-6), 1);
        let o = streamed_attention(&q, &k, &v, &eps).unwrap();
        assert_eq!(o.data()[1], 0.0);
    }

    #[test]
    fn shape_and_config_errors() {
        let a = Tensor::<f64>::zeros(vec![2, 3]).unwrap();
        let b = Tensor::<f64>::zeros(vec![2, 4]).unwrap();
        let c = AttentionConfig::new(NormalizerSpec::spherical(), 3);
        assert!(matches!(streamed_attention(&a, &b, &b, &c), Err(Error::Shape { .. })));
        let v = Tensor::<f64>::zeros(vec![3, 3]).unwrap();
        assert!(matches!(naive_generalized_attention(&a, &a, &v, &c), Err(Error::Shape { .. })));
        assert!(streamed_attention(&a, &a, &a, &c.clone().with_f16(true)).is_err());
        assert!(streamed_attention(&a, &a, &a, &c.clone().with_scale(0.0)).is_err());
        assert!(TileConfig::new(0, 4).is_err());
    }

    #[test]
    fn naive_budget_reports_oom() {
        let a = Tensor::<f32>::zeros(vec![64, 2]).unwrap();
        let mut c = AttentionConfig::new(NormalizerSpec::spherical(), 2);
        c.naive_score_budget_bytes = Some(64 * 64 * 4 - 1);
        assert!(matches!(
            naive_generalized_attention(&a, &a, &a, &c),
            Err(Error::OutOfMemory { bytes: 16384, .. })
        ));
    }

    #[test]
    fn gqa_mapping_and_duplication_oracle() {
        assert_eq!((0..4).map(|i| kv_head_for(i, 4, 2)).collect::<Vec<_>>(), vec![0, 0, 1, 1]);
        let mut rng = XorShift64Star::new(2);
        let (y, x, d) = (6, 9, 4);
        let q = randn::<f64>(&mut rng, vec![y, 2, d]);
        let k = randn::<f64>(&mut rng, vec![x, 1, d]);
        let v = randn::<f64>(&mut rng, vec![x, 1, d]);
        let c = cfg(NormalizerSpec::spherical(), d, 4, 4);
        let gqa = multi_head_attention(&q, &k, &v, &c, 2, 1).unwrap();
        let dup = |t: &Tensor<f64>| {
            let mut data = Vec::new();
            for i in 0..x {
                data.extend_from_slice(t.row(i));
                data.extend_from_slice(t.row(i));
            }
            Tensor::new(vec![x, 2, d], data).unwrap()
        };
        let mha = multi_head_attention(&q, &dup(&k.clone().reshape(vec![x, d]).unwrap()), &dup(&v.clone().reshape(vec![x, d]).unwrap()), &c, 2, 2).unwrap();
        assert!(allclose(&gqa, &mha, 1e-12, 1e-14).unwrap().all_close);

        // h == h_kv: each head is ordinary attention on its own slice.
        let k2 = randn::<f64>(&mut rng, vec![x, 2, d]);
        let v2 = randn::<f64>(&mut rng, vec![x, 2, d]);
        let out = multi_head_attention(&q, &k2, &v2, &c, 2, 2).unwrap();
        for head in 0..2 {
            let single = streamed_attention(
                &head_slice(&q, head).unwrap(),
                &head_slice(&k2, head).unwrap(),
                &head_slice(&v2, head).unwrap(),
                &c,
            )
            .unwrap();
            assert_eq!(head_slice(&out, head).unwrap(), single);
        }
        assert!(matches!(multi_head_attention(&q, &k2, &v2, &c, 3, 2), Err(Error::Config(_))));
    }

    #[test]
    fn multiplicity_examples() {
        let k = t(&[&[1.0, 2.0], &[3.0, 4.0], &[5.0, 6.0]]);
        assert_eq!(apply_multiplicity(&k, &[1.0; 3]).unwrap(), k);
        assert_eq!(
            apply_multiplicity(&k, &[2.0, 0.0, 1.0]).unwrap(),
            t(&[&[2.0, 4.0], &[0.0, 0.0], &[5.0, 6.0]])
        );
        assert!(matches!(
            apply_multiplicity(&k, &[1.0, -1.0, 1.0]),
            Err(Error::Multiplicity { index: 1, .. })
        ));
        assert!(apply_multiplicity(&k, &[1.0, f64::NAN, 1.0]).is_err());
        assert!(apply_multiplicity(&k, &[1.0]).is_err());
        let k3 = Tensor::from_fn(vec![2, 2, 2], |i| i as f64).unwrap();
        let scaled = apply_multiplicity(&k3, &[0.0, 3.0]).unwrap();
        assert_eq!(scaled.data(), &[0.0, 0.0, 0.0, 0.0, 12.0, 15.0, 18.0, 21.0]);
    }

    #[test]
    fn f16_path_stays_close() {
        let mut rng = XorShift64Star::new(16);
        let q = randn::<f32>(&mut rng, vec![64, 32]);
        let k = randn::<f32>(&mut rng, vec![128, 32]);
        let v = randn::<f32>(&mut rng, vec![128, 32]);
        let c = cfg(NormalizerSpec::spherical(), 32, 16, 16);
        let reference = naive_generalized_attention(&q, &k, &v, &c).unwrap();
        let (emu, stats) = streamed_attention_with_stats(&q, &k, &v, &c.clone().with_f16(true)).unwrap();
        assert_eq!(stats.f16_overflows, 0);
        let r = allclose(&emu, &reference, 0.0, 0.01).unwrap();
        assert!(r.fraction_within(0.01) > 0.99);
        assert_ne!(emu, reference);
    }
}
