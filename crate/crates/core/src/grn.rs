//! A gene-regulatory-network transformer.
//!
//! Each gene is one token; a cell is a bag of genes with per-gene counts
//! (multiplicities). Every layer is pre-norm:
//!
//! ```text
//! N  = rms_norm(H)
//! A  = attention(Q = N W_q, K = m * (N W_k), V = N W_v)   // grouped-query heads
//! H1 = H + A W_o
//! H' = H1 + gelu(rms_norm(H1) W_1) W_2
//! ```
//!
//! Multiplicities scale the projected key rows, so a gene with count 0
//! contributes nothing to any score under a normalizer with `a(0) = 0`.
//! The logits are the multiplicity-weighted mean of the final hidden rows
//! times `W_out`. There is no positional encoding: gene order carries no
//! information.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::attention::{
    apply_multiplicity, kv_head_for, multi_head_attention_with, normalized_scores, AttentionConfig,
    AttentionPath, TileConfig,
};
use crate::error::{Error, Result};
use crate::normalizers::NormalizerSpec;
use crate::rng::XorShift64Star;
use crate::tensor::{matmul, Tensor};

/// Standard deviation of every Gaussian-initialized weight.
pub const INIT_STD: f64 = 0.02;

fn default_rms_eps() -> f64 {
    1e-6
}
fn default_attn_eps() -> f64 {
    1e-6
}
fn default_normalizer() -> String {
    "spherical".into()
}
fn default_path() -> AttentionPath {
    AttentionPath::Streamed
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GRNConfig {
    pub n_genes: usize,
    pub d_model: usize,
    pub n_layers: usize,
    pub heads: usize,
    pub kv_heads: usize,
    /// Defaults to `4 * d_model` when absent or 0.
    #[serde(default)]
    pub ffn_hidden: usize,
    #[serde(default = "default_rms_eps")]
    pub rms_eps: f64,
    /// Added to each attention denominator. 0 is accepted as a check mode
    /// for exact invariant tests; rows with all-zero scores then error.
    #[serde(default = "default_attn_eps")]
    pub attn_denom_eps: f64,
    pub n_outputs: usize,
    #[serde(default)]
    pub seed: u64,
    /// Attention normalizer by name. Anything other than `spherical` is for
    /// negative controls.
    #[serde(default = "default_normalizer")]
    pub normalizer: String,
    #[serde(default = "default_path")]
    pub path: AttentionPath,
    #[serde(default)]
    pub tile: TileConfig,
}

impl GRNConfig {
    pub fn new(
        n_genes: usize,
        d_model: usize,
        n_layers: usize,
        heads: usize,
        kv_heads: usize,
        n_outputs: usize,
    ) -> Self {
        Self {
            n_genes,
            d_model,
            n_layers,
            heads,
            kv_heads,
            ffn_hidden: 4 * d_model,
            rms_eps: default_rms_eps(),
            attn_denom_eps: default_attn_eps(),
            n_outputs,
            seed: 0,
            normalizer: default_normalizer(),
            path: default_path(),
            tile: TileConfig::default(),
        }
    }

    /// `attn_denom_eps = 0`, so invariants hold exactly rather than up to
    /// the epsilon.
    pub fn check_mode(mut self) -> Self {
        self.attn_denom_eps = 0.0;
        self
    }

    pub fn with_path(mut self, path: AttentionPath) -> Self {
        self.path = path;
        self
    }

    pub fn with_normalizer(mut self, name: &str) -> Self {
        self.normalizer = name.into();
        self
    }

    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self
    }

    pub fn ffn_width(&self) -> usize {
        if self.ffn_hidden == 0 {
            4 * self.d_model
        } else {
            self.ffn_hidden
        }
    }

    pub fn head_dim(&self) -> usize {
        self.d_model / self.heads
    }

    pub fn validate(&self) -> Result<()> {
        let sizes = [
            ("n_genes", self.n_genes),
            ("d_model", self.d_model),
            ("heads", self.heads),
            ("kv_heads", self.kv_heads),
            ("n_outputs", self.n_outputs),
        ];
        if let Some((name, _)) = sizes.iter().find(|(_, v)| *v == 0) {
            return Err(Error::Config(format!("{name} must be at least 1")));
        }
        if !self.heads.is_multiple_of(self.kv_heads) {
            return Err(Error::Config(format!(
                "heads ({}) must be a multiple of kv_heads ({})",
                self.heads, self.kv_heads
            )));
        }
        if !self.d_model.is_multiple_of(self.heads) {
            return Err(Error::Config(format!(
                "d_model ({}) must be divisible by heads ({})",
                self.d_model, self.heads
            )));
        }
        if !(self.rms_eps > 0.0 && self.rms_eps.is_finite()) {
            return Err(Error::Config(format!("rms_eps must be > 0, got {}", self.rms_eps)));
        }
        if !(self.attn_denom_eps >= 0.0 && self.attn_denom_eps.is_finite()) {
            return Err(Error::Config(format!(
                "attn_denom_eps must be >= 0, got {}",
                self.attn_denom_eps
            )));
        }
        self.tile.validate()?;
        self.spec().map(|_| ())
    }

    /// The attention normalizer with the configured epsilon.
    pub fn spec(&self) -> Result<NormalizerSpec> {
        Ok(NormalizerSpec::from_name(&self.normalizer)?.with_epsilon(self.attn_denom_eps))
    }

    fn attention_config(&self) -> Result<AttentionConfig> {
        Ok(AttentionConfig::new(self.spec()?, self.head_dim()).with_tile(self.tile))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LayerParams {
    pub attn_gain: Vec<f64>,
    /// `[k x h*d]`
    pub w_q: Tensor<f64>,
    /// `[k x h_kv*d]`
    pub w_k: Tensor<f64>,
    /// `[k x h_kv*d]`
    pub w_v: Tensor<f64>,
    /// `[h*d x k]`
    pub w_o: Tensor<f64>,
    pub ffn_gain: Vec<f64>,
    /// `[k x ffn]`
    pub w_ff1: Tensor<f64>,
    /// `[ffn x k]`
    pub w_ff2: Tensor<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GRNParams {
    /// One row per gene, `[x x k]`.
    pub embeddings: Tensor<f64>,
    pub layers: Vec<LayerParams>,
    /// `[k x C]`
    pub w_out: Tensor<f64>,
}

impl GRNParams {
    /// Every tensor with a stable name, in initialization order. Gains are
    /// returned as `[k]` tensors.
    pub fn named_tensors(&self) -> Vec<(String, Tensor<f64>)> {
        let mut out = vec![("embeddings".to_string(), self.embeddings.clone())];
        for (l, p) in self.layers.iter().enumerate() {
            let vecs = |v: &Vec<f64>| Tensor::new(vec![v.len()], v.clone()).expect("finite gain");
            out.push((format!("layer{l}.attn_gain"), vecs(&p.attn_gain)));
            out.push((format!("layer{l}.w_q"), p.w_q.clone()));
            out.push((format!("layer{l}.w_k"), p.w_k.clone()));
            out.push((format!("layer{l}.w_v"), p.w_v.clone()));
            out.push((format!("layer{l}.w_o"), p.w_o.clone()));
            out.push((format!("layer{l}.ffn_gain"), vecs(&p.ffn_gain)));
            out.push((format!("layer{l}.w_ff1"), p.w_ff1.clone()));
            out.push((format!("layer{l}.w_ff2"), p.w_ff2.clone()));
        }
        out.push(("w_out".to_string(), self.w_out.clone()));
        out
    }

    /// Inverse of [`named_tensors`](Self::named_tensors), checking every
    /// shape against `cfg`.
    pub fn from_named(cfg: &GRNConfig, mut named: BTreeMap<String, Tensor<f64>>) -> Result<Self> {
        cfg.validate()?;
        let (x, k, c, f) = (cfg.n_genes, cfg.d_model, cfg.n_outputs, cfg.ffn_width());
        let (hd, kvd) = (cfg.heads * cfg.head_dim(), cfg.kv_heads * cfg.head_dim());
        let mut take = |name: String, shape: Vec<usize>| -> Result<Tensor<f64>> {
            let t = named
                .remove(&name)
                .ok_or_else(|| Error::Format(format!("missing tensor {name:?}")))?;
            if t.shape() != shape.as_slice() {
                return Err(Error::Shape {
                    op: "load params",
                    lhs: t.shape().to_vec(),
                    rhs: shape,
                });
            }
            t.ensure_finite("load params")?;
            Ok(t)
        };
        let embeddings = take("embeddings".into(), vec![x, k])?;
        let mut layers = Vec::with_capacity(cfg.n_layers);
        for l in 0..cfg.n_layers {
            layers.push(LayerParams {
                attn_gain: take(format!("layer{l}.attn_gain"), vec![k])?.into_data(),
                w_q: take(format!("layer{l}.w_q"), vec![k, hd])?,
                w_k: take(format!("layer{l}.w_k"), vec![k, kvd])?,
                w_v: take(format!("layer{l}.w_v"), vec![k, kvd])?,
                w_o: take(format!("layer{l}.w_o"), vec![hd, k])?,
                ffn_gain: take(format!("layer{l}.ffn_gain"), vec![k])?.into_data(),
                w_ff1: take(format!("layer{l}.w_ff1"), vec![k, f])?,
                w_ff2: take(format!("layer{l}.w_ff2"), vec![f, k])?,
            });
        }
        let w_out = take("w_out".into(), vec![k, c])?;
        if let Some(extra) = named.keys().next() {
            return Err(Error::Format(format!("unexpected tensor {extra:?}")));
        }
        Ok(Self {
            embeddings,
            layers,
            w_out,
        })
    }
}

/// Per-gene counts for one cell.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CellSample {
    pub multiplicities: Vec<f64>,
}

impl CellSample {
    pub fn new(multiplicities: Vec<f64>) -> Result<Self> {
        if let Some((index, &value)) = multiplicities
            .iter()
            .enumerate()
            .find(|(_, v)| !v.is_finite() || **v < 0.0)
        {
            return Err(Error::Multiplicity { index, value });
        }
        Ok(Self { multiplicities })
    }

    /// Integer counts drawn uniformly from `0..=max_count`.
    pub fn random_counts(n_genes: usize, max_count: u32, rng: &mut XorShift64Star) -> Self {
        let multiplicities = (0..n_genes)
            .map(|_| rng.next_range(0, max_count as i64) as f64)
            .collect();
        Self { multiplicities }
    }

    pub fn len(&self) -> usize {
        self.multiplicities.len()
    }

    pub fn is_empty(&self) -> bool {
        self.multiplicities.is_empty()
    }
}

/// `gain_i * x_i / sqrt(mean(x^2) + eps)`.
pub fn rms_norm(x: &[f64], gain: &[f64], eps: f64) -> Vec<f64> {
    let ms = x.iter().map(|v| v * v).sum::<f64>() / x.len() as f64;
    let inv = 1.0 / (ms + eps).sqrt();
    x.iter().zip(gain).map(|(v, g)| g * v * inv).collect()
}

fn rms_norm_rows(h: &Tensor<f64>, gain: &[f64], eps: f64) -> Result<Tensor<f64>> {
    let (n, k) = h.dims2("rms_norm")?;
    let mut out = Vec::with_capacity(n * k);
    for i in 0..n {
        out.extend(rms_norm(h.row(i), gain, eps));
    }
    Tensor::new(vec![n, k], out)
}

/// GELU, tanh form.
pub fn gelu(u: f64) -> f64 {
    const C: f64 = 0.797_884_560_802_865_4; // sqrt(2 / pi)
    0.5 * u * (1.0 + (C * (u + 0.044_715 * u * u * u)).tanh())
}

fn add(a: &Tensor<f64>, b: &Tensor<f64>) -> Result<Tensor<f64>> {
    if a.shape() != b.shape() {
        return Err(Error::Shape {
            op: "residual add",
            lhs: a.shape().to_vec(),
            rhs: b.shape().to_vec(),
        });
    }
    let data = a.data().iter().zip(b.data()).map(|(x, y)| x + y).collect();
    Tensor::new(a.shape().to_vec(), data)
}

fn check_sample(sample: &CellSample, cfg: &GRNConfig) -> Result<()> {
    if sample.len() != cfg.n_genes {
        return Err(Error::Length {
            op: "cell sample",
            lhs: cfg.n_genes,
            rhs: sample.len(),
        });
    }
    CellSample::new(sample.multiplicities.clone()).map(|_| ())
}

/// Q, K (multiplicity-scaled) and V as `[x x heads x d]` tensors.
fn project(
    h: &Tensor<f64>,
    m: &[f64],
    p: &LayerParams,
    cfg: &GRNConfig,
) -> Result<(Tensor<f64>, Tensor<f64>, Tensor<f64>)> {
    let x = h.shape()[0];
    let d = cfg.head_dim();
    let hn = rms_norm_rows(h, &p.attn_gain, cfg.rms_eps)?;
    let q = matmul(&hn, &p.w_q)?.reshape(vec![x, cfg.heads, d])?;
    let k = apply_multiplicity(&matmul(&hn, &p.w_k)?, m)?.reshape(vec![x, cfg.kv_heads, d])?;
    let v = matmul(&hn, &p.w_v)?.reshape(vec![x, cfg.kv_heads, d])?;
    Ok((q, k, v))
}

pub fn grn_layer_forward(
    h: &Tensor<f64>,
    m: &[f64],
    p: &LayerParams,
    cfg: &GRNConfig,
) -> Result<Tensor<f64>> {
    let (x, k) = h.dims2("grn layer")?;
    let (q, kk, v) = project(h, m, p, cfg)?;
    let a = multi_head_attention_with(
        &q,
        &kk,
        &v,
        &cfg.attention_config()?,
        cfg.heads,
        cfg.kv_heads,
        cfg.path,
    )?
    .reshape(vec![x, cfg.heads * cfg.head_dim()])?;
    let h1 = add(h, &matmul(&a, &p.w_o)?)?;
    let hidden = matmul(&rms_norm_rows(&h1, &p.ffn_gain, cfg.rms_eps)?, &p.w_ff1)?.map(gelu);
    let out = add(&h1, &matmul(&hidden, &p.w_ff2)?)?;
    debug_assert_eq!(out.shape(), &[x, k]);
    Ok(out)
}

/// Final hidden states, one row per gene.
pub fn encode(sample: &CellSample, params: &GRNParams, cfg: &GRNConfig) -> Result<Tensor<f64>> {
    cfg.validate()?;
    check_sample(sample, cfg)?;
    let mut h = params.embeddings.clone();
    for p in &params.layers {
        h = grn_layer_forward(&h, &sample.multiplicities, p, cfg)?;
    }
    Ok(h)
}

/// Multiplicity-weighted mean of the rows of `h`; the plain mean when every
/// multiplicity is 0.
pub fn pool(h: &Tensor<f64>, m: &[f64]) -> Result<Vec<f64>> {
    let (n, k) = h.dims2("pool")?;
    let total: f64 = m.iter().sum();
    let weights: Vec<f64> = if total > 0.0 {
        m.iter().map(|v| v / total).collect()
    } else {
        vec![1.0 / n as f64; n]
    };
    let mut out = vec![0.0; k];
    for (i, w) in weights.iter().enumerate() {
        if *w == 0.0 {
            continue;
        }
        for (o, v) in out.iter_mut().zip(h.row(i)) {
            *o += w * v;
        }
    }
    Ok(out)
}

pub fn grn_forward(sample: &CellSample, params: &GRNParams, cfg: &GRNConfig) -> Result<Vec<f64>> {
    let h = encode(sample, params, cfg)?;
    let pooled = pool(&h, &sample.multiplicities)?;
    let k = pooled.len();
    Ok(matmul(&Tensor::new(vec![1, k], pooled)?, &params.w_out)?.into_data())
}

/// The normalized score matrix of one layer and head, rows = query genes,
/// columns = key genes. Always materialized in full.
pub fn extract_adjacency(
    sample: &CellSample,
    params: &GRNParams,
    cfg: &GRNConfig,
    layer: usize,
    head: usize,
) -> Result<Tensor<f64>> {
    cfg.validate()?;
    check_sample(sample, cfg)?;
    if layer >= params.layers.len() {
        return Err(Error::OutOfRange {
            what: "layer",
            index: layer,
            limit: params.layers.len(),
        });
    }
    if head >= cfg.heads {
        return Err(Error::OutOfRange {
            what: "head",
            index: head,
            limit: cfg.heads,
        });
    }
    let m = &sample.multiplicities;
    let mut h = params.embeddings.clone();
    for p in &params.layers[..layer] {
        h = grn_layer_forward(&h, m, p, cfg)?;
    }
    let (q, k, _) = project(&h, m, &params.layers[layer], cfg)?;
    let x = cfg.n_genes;
    let d = cfg.head_dim();
    let kv = kv_head_for(head, cfg.heads, cfg.kv_heads);
    let slice = |t: &Tensor<f64>, heads: usize, idx: usize| -> Result<Tensor<f64>> {
        let mut out = Vec::with_capacity(x * d);
        for i in 0..x {
            let start = (i * heads + idx) * d;
            out.extend_from_slice(&t.data()[start..start + d]);
        }
        Tensor::new(vec![x, d], out)
    };
    normalized_scores(
        &slice(&q, cfg.heads, head)?,
        &slice(&k, cfg.kv_heads, kv)?,
        &cfg.attention_config()?,
    )
}

/// Seeded parameters. Draw order: embeddings, then per layer `w_q, w_k,
/// w_v, w_o, w_ff1, w_ff2`, then `w_out`, each row-major. Gains are 1.
pub fn init_params(cfg: &GRNConfig, seed: u64) -> Result<GRNParams> {
    cfg.validate()?;
    let mut rng = XorShift64Star::new(seed);
    let mut gauss = |shape: Vec<usize>| Tensor::from_fn(shape, |_| INIT_STD * rng.next_normal());
    let (x, k, c, f) = (cfg.n_genes, cfg.d_model, cfg.n_outputs, cfg.ffn_width());
    let (hd, kvd) = (cfg.heads * cfg.head_dim(), cfg.kv_heads * cfg.head_dim());
    let embeddings = gauss(vec![x, k])?;
    let mut layers = Vec::with_capacity(cfg.n_layers);
    for _ in 0..cfg.n_layers {
        layers.push(LayerParams {
            w_q: gauss(vec![k, hd])?,
            w_k: gauss(vec![k, kvd])?,
            w_v: gauss(vec![k, kvd])?,
            w_o: gauss(vec![hd, k])?,
            w_ff1: gauss(vec![k, f])?,
            w_ff2: gauss(vec![f, k])?,
            attn_gain: vec![1.0; k],
            ffn_gain: vec![1.0; k],
        });
    }
    let w_out = gauss(vec![k, c])?;
    Ok(GRNParams {
        embeddings,
        layers,
        w_out,
    })
}

/// The same model and cell with gene `gene` removed.
pub fn delete_gene(
    cfg: &GRNConfig,
    params: &GRNParams,
    sample: &CellSample,
    gene: usize,
) -> Result<(GRNConfig, GRNParams, CellSample)> {
    if gene >= cfg.n_genes {
        return Err(Error::OutOfRange {
            what: "gene",
            index: gene,
            limit: cfg.n_genes,
        });
    }
    if cfg.n_genes == 1 {
        return Err(Error::Config("cannot delete the only gene".into()));
    }
    let keep: Vec<usize> = (0..cfg.n_genes).filter(|&i| i != gene).collect();
    let (c, p, s) = select_genes(cfg, params, sample, &keep)?;
    Ok((c, p, s))
}

/// Reorders genes: new gene `j` is old gene `order[j]`.
pub fn permute_genes(
    cfg: &GRNConfig,
    params: &GRNParams,
    sample: &CellSample,
    order: &[usize],
) -> Result<(GRNParams, CellSample)> {
    let mut seen = vec![false; cfg.n_genes];
    for &i in order {
        if i >= cfg.n_genes || std::mem::replace(&mut seen[i], true) {
            return Err(Error::Config(format!("{order:?} is not a permutation")));
        }
    }
    if order.len() != cfg.n_genes {
        return Err(Error::Config(format!("{order:?} is not a permutation")));
    }
    let (_, p, s) = select_genes(cfg, params, sample, order)?;
    Ok((p, s))
}

fn select_genes(
    cfg: &GRNConfig,
    params: &GRNParams,
    sample: &CellSample,
    genes: &[usize],
) -> Result<(GRNConfig, GRNParams, CellSample)> {
    check_sample(sample, cfg)?;
    let k = cfg.d_model;
    let mut rows = Vec::with_capacity(genes.len() * k);
    for &g in genes {
        rows.extend_from_slice(params.embeddings.row(g));
    }
    let mut c = cfg.clone();
    c.n_genes = genes.len();
    let mut p = params.clone();
    p.embeddings = Tensor::new(vec![genes.len(), k], rows)?;
    let s = CellSample {
        multiplicities: genes.iter().map(|&g| sample.multiplicities[g]).collect(),
    };
    Ok((c, p, s))
}
