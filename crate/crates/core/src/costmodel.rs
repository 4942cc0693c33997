//! Analytic byte, FLOP and special-function counts for naive and streamed
//! attention.
//!
//! Two memory levels are modelled: global memory and the on-chip level that
//! holds one query group's working set. Counts are exact integers; there is
//! no timing model.
//!
//! Conventions:
//!
//! * `matmul_flops` counts a multiply-add as 2: `2yxk` for `Q K^T` and
//!   `2yxk` for the product with `V`.
//! * `elementwise_flops` is `yx` for each of `a1`, `a2`, the denominator
//!   sums and the divisions, plus `y` evaluations of `b`.
//! * One SFU op per special-function evaluation. `a1` and `a2` are counted
//!   separately unless the model is built with `fused_exp`, in which case a
//!   shared `exp` counts once.
//! * Streamed K/V chunks are re-read from global memory once per query
//!   group. `bytes_global_to_shared_lower_bound` is the perfect-reuse
//!   figure: every input read once, the output written once.
//! * The naive path is costed as one tile covering the whole problem, so
//!   its on-chip working set contains the entire score matrix.
//! * Tile sides are clamped to the problem: a `g_y` larger than `y` costs
//!   the same as `g_y = y`.

use serde::{Deserialize, Serialize};

use crate::attention::{AttentionPath, TileConfig};
use crate::error::{Error, Result};
use crate::normalizers::{Activation, NormalizerSpec};
use crate::tensor::DType;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CostReport {
    pub path: AttentionPath,
    pub spec: String,
    pub dtype: DType,
    pub y: u64,
    pub x: u64,
    pub k: u64,
    pub g_y: u64,
    pub s_x: u64,
    pub dtype_bytes: u64,
    pub bytes_global_to_shared: u64,
    pub bytes_global_to_shared_lower_bound: u64,
    pub bytes_shared_to_register: u64,
    pub peak_onchip_bytes: u64,
    pub score_tile_elements: u64,
    pub score_matrix_bytes_materialized: u64,
    pub matmul_flops: u64,
    pub elementwise_flops: u64,
    pub sfu_ops: u64,
}

/// Counting conventions that have more than one reasonable choice.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct CostModel {
    /// Count a shared `a1 = a2 = exp` evaluation once instead of twice.
    pub fused_exp: bool,
}

fn check_sizes(y: usize, x: usize, k: usize) -> Result<()> {
    if y == 0 || x == 0 || k == 0 {
        return Err(Error::Config(format!(
            "cost model sizes must be positive, got y={y} x={x} k={k}"
        )));
    }
    Ok(())
}

impl CostModel {
    /// Special-function evaluations per score element plus per row.
    fn sfu_ops(&self, y: u64, x: u64, spec: &NormalizerSpec) -> u64 {
        let a1 = spec.a1.is_special_function() as u64;
        let a2 = spec.a2.is_special_function() as u64;
        let shared = self.fused_exp && matches!((&spec.a1, &spec.a2), (Activation::Exp, Activation::Exp));
        let per_elem = if shared { 1 } else { a1 + a2 };
        per_elem * y * x + spec.b.is_special_function() as u64 * y
    }

    #[allow(clippy::too_many_arguments)]
    fn report(
        &self,
        path: AttentionPath,
        y: usize,
        x: usize,
        k: usize,
        dtype: DType,
        spec: &NormalizerSpec,
        g: u64,
        s: u64,
    ) -> CostReport {
        let (y, x, k) = (y as u64, x as u64, k as u64);
        let db = dtype.size_bytes() as u64;
        let groups = y.div_ceil(g);
        let chunks = x.div_ceil(s);
        let lower = db * (2 * y * k + 2 * x * k);
        let (global, shared_reg, materialized) = match path {
            // S written, read, P written, read, plus Q, K, V in and O out.
            AttentionPath::Naive => {
                let b = db * (2 * y * k + 2 * x * k + 4 * y * x);
                (b, b, y * x * db)
            }
            AttentionPath::Streamed => (
                db * (y * k + groups * x * k * 2 + y * k),
                db * (chunks * y * k + groups * x * k * 2),
                0,
            ),
        };
        CostReport {
            path,
            spec: spec.name.clone(),
            dtype,
            y,
            x,
            k,
            g_y: g,
            s_x: s,
            dtype_bytes: db,
            bytes_global_to_shared: global,
            bytes_global_to_shared_lower_bound: lower,
            bytes_shared_to_register: shared_reg,
            peak_onchip_bytes: db * (g * k + 2 * s * k + g * s + g * k) + 4 * g,
            score_tile_elements: g * s,
            score_matrix_bytes_materialized: materialized,
            matmul_flops: 4 * y * x * k,
            elementwise_flops: 4 * y * x + y,
            sfu_ops: self.sfu_ops(y, x, spec),
        }
    }

    pub fn naive(
        &self,
        y: usize,
        x: usize,
        k: usize,
        dtype: DType,
        spec: &NormalizerSpec,
    ) -> Result<CostReport> {
        check_sizes(y, x, k)?;
        Ok(self.report(AttentionPath::Naive, y, x, k, dtype, spec, y as u64, x as u64))
    }

    pub fn streamed(
        &self,
        y: usize,
        x: usize,
        k: usize,
        dtype: DType,
        spec: &NormalizerSpec,
        tile: TileConfig,
    ) -> Result<CostReport> {
        check_sizes(y, x, k)?;
        tile.validate()?;
        let g = tile.g_y.min(y) as u64;
        let s = tile.s_x.min(x) as u64;
        Ok(self.report(AttentionPath::Streamed, y, x, k, dtype, spec, g, s))
    }
}

pub fn cost_naive_attention(
    y: usize,
    x: usize,
    k: usize,
    dtype: DType,
    spec: &NormalizerSpec,
) -> Result<CostReport> {
    CostModel::default().naive(y, x, k, dtype, spec)
}

pub fn cost_streamed_attention(
    y: usize,
    x: usize,
    k: usize,
    dtype: DType,
    spec: &NormalizerSpec,
    tile: TileConfig,
) -> Result<CostReport> {
    CostModel::default().streamed(y, x, k, dtype, spec, tile)
}

/// `lhs / rhs` for one report field.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase", tag = "kind", content = "value")]
pub enum Ratio {
    Finite(f64),
    /// The right-hand side is 0 while the left is not.
    Eliminated,
}

impl Ratio {
    pub fn of(lhs: u64, rhs: u64) -> Self {
        match (lhs, rhs) {
            (0, 0) => Ratio::Finite(1.0),
            (_, 0) => Ratio::Eliminated,
            (a, b) => Ratio::Finite(a as f64 / b as f64),
        }
    }
}

impl std::fmt::Display for Ratio {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Ratio::Finite(r) => write!(f, "{r}"),
            Ratio::Eliminated => f.write_str("eliminated"),
        }
    }
}

/// How a report's on-chip working set grows with the problem.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OnchipScaling {
    /// Proportional to `y * x`.
    Quadratic,
    /// Fixed by the tile.
    Constant,
}

impl OnchipScaling {
    fn of(path: AttentionPath) -> Self {
        match path {
            AttentionPath::Naive => OnchipScaling::Quadratic,
            AttentionPath::Streamed => OnchipScaling::Constant,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Comparison {
    /// `(field, lhs / rhs)` for every count.
    pub ratios: Vec<(String, Ratio)>,
    pub lhs_onchip: OnchipScaling,
    pub rhs_onchip: OnchipScaling,
}

impl Comparison {
    pub fn ratio(&self, field: &str) -> Option<Ratio> {
        self.ratios.iter().find(|(f, _)| f == field).map(|(_, r)| *r)
    }
}

impl CostReport {
    /// The numeric fields, by name.
    pub fn counts(&self) -> [(&'static str, u64); 9] {
        [
            ("bytes_global_to_shared", self.bytes_global_to_shared),
            ("bytes_global_to_shared_lower_bound", self.bytes_global_to_shared_lower_bound),
            ("bytes_shared_to_register", self.bytes_shared_to_register),
            ("peak_onchip_bytes", self.peak_onchip_bytes),
            ("score_tile_elements", self.score_tile_elements),
            ("score_matrix_bytes_materialized", self.score_matrix_bytes_materialized),
            ("matmul_flops", self.matmul_flops),
            ("elementwise_flops", self.elementwise_flops),
            ("sfu_ops", self.sfu_ops),
        ]
    }
}

/// Field-by-field ratios `lhs / rhs`. Both reports must describe the same
/// problem size and dtype.
pub fn compare_reports(lhs: &CostReport, rhs: &CostReport) -> Result<Comparison> {
    let a = (lhs.y, lhs.x, lhs.k, lhs.dtype);
    let b = (rhs.y, rhs.x, rhs.k, rhs.dtype);
    if a != b {
        return Err(Error::Config(format!(
            "cannot compare reports for different problems: {a:?} vs {b:?}"
        )));
    }
    let ratios = lhs
        .counts()
        .iter()
        .zip(rhs.counts())
        .map(|((name, l), (_, r))| (name.to_string(), Ratio::of(*l, r)))
        .collect();
    Ok(Comparison {
        ratios,
        lhs_onchip: OnchipScaling::of(lhs.path),
        rhs_onchip: OnchipScaling::of(rhs.path),
    })
}
