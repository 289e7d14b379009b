//! Forward passes and parameter accounting for the dense base layer, the
//! linear gate, low-rank adapters and the three model families.
//!
//! Conventions: a batch is a `B x d` matrix with one sample per row. A dense
//! layer stores `W` as `d_out x d_in` and computes `y = x Wᵀ + b`. An adapter
//! stores `A: d_in x r` and `B: r x d_out` and contributes
//! `Δ = (x A) B · (α / r)`. Every gate in a model sees the standardized raw
//! input, never the output of an earlier block.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{kaiming_uniform, matmul, relu, softmax_rows, softmax_unchecked, Matrix, Rng};

/// Experts chosen for one sample, with their aggregation weights.
pub type Selection = Vec<(usize, f64)>;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DenseLayer {
    /// `d_out x d_in`
    pub weight: Matrix,
    pub bias: Vec<f64>,
}

impl DenseLayer {
    pub fn new(weight: Matrix, bias: Vec<f64>) -> Result<Self> {
        if bias.len() != weight.rows() {
            return Err(Error::shape("DenseLayer::new", weight.rows(), bias.len()));
        }
        Ok(Self { weight, bias })
    }

    /// Kaiming-uniform weights with `fan_in = d_in`, zero bias.
    pub fn init(rng: &mut Rng, d_in: usize, d_out: usize) -> Result<Self> {
        Ok(Self {
            weight: kaiming_uniform(rng, d_out, d_in, d_in)?,
            bias: vec![0.0; d_out],
        })
    }

    pub fn input_dim(&self) -> usize {
        self.weight.cols()
    }

    pub fn output_dim(&self) -> usize {
        self.weight.rows()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GatingNetwork {
    /// `N x d_gate`
    pub weight: Matrix,
    pub bias: Vec<f64>,
    pub top_k: usize,
}

impl GatingNetwork {
    pub fn new(weight: Matrix, bias: Vec<f64>, top_k: usize) -> Result<Self> {
        if bias.len() != weight.rows() {
            return Err(Error::shape("GatingNetwork::new", weight.rows(), bias.len()));
        }
        if top_k == 0 || top_k > weight.rows() {
            return Err(Error::Argument(format!(
                "top_k must be in 1..={}, got {top_k}",
                weight.rows()
            )));
        }
        Ok(Self { weight, bias, top_k })
    }

    pub fn init(rng: &mut Rng, d_gate: usize, n_experts: usize, top_k: usize) -> Result<Self> {
        Self::new(
            kaiming_uniform(rng, n_experts, d_gate, d_gate)?,
            vec![0.0; n_experts],
            top_k,
        )
    }

    pub fn n_experts(&self) -> usize {
        self.weight.rows()
    }

    pub fn input_dim(&self) -> usize {
        self.weight.cols()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LoraAdapter {
    /// `d_in x r`
    pub a: Matrix,
    /// `r x d_out`
    pub b: Matrix,
    pub alpha: f64,
}

impl LoraAdapter {
    pub fn new(a: Matrix, b: Matrix, alpha: f64) -> Result<Self> {
        if a.cols() != b.rows() {
            return Err(Error::shape("LoraAdapter::new", a.cols(), b.rows()));
        }
        if a.cols() == 0 {
            return Err(Error::Argument("adapter rank must be >= 1".into()));
        }
        if !(alpha > 0.0 && alpha.is_finite()) {
            return Err(Error::Argument(format!("alpha must be positive, got {alpha}")));
        }
        Ok(Self { a, b, alpha })
    }

    /// `A` Kaiming-uniform with `fan_in = d_in`, `B` zero.
    pub fn init(rng: &mut Rng, d_in: usize, d_out: usize, rank: usize, alpha: f64) -> Result<Self> {
        Self::new(
            kaiming_uniform(rng, d_in, rank, d_in)?,
            Matrix::zeros(rank, d_out),
            alpha,
        )
    }

    pub fn rank(&self) -> usize {
        self.a.cols()
    }

    pub fn scale(&self) -> f64 {
        self.alpha / self.rank() as f64
    }

    pub fn param_count(&self) -> usize {
        self.a.data().len() + self.b.data().len()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LoraMoeLayer {
    pub base: DenseLayer,
    pub adapters: Vec<LoraAdapter>,
    pub gate: GatingNetwork,
}

impl LoraMoeLayer {
    pub fn new(base: DenseLayer, adapters: Vec<LoraAdapter>, gate: GatingNetwork) -> Result<Self> {
        if adapters.len() != gate.n_experts() {
            return Err(Error::shape("LoraMoeLayer::new", gate.n_experts(), adapters.len()));
        }
        let (d_in, d_out) = (base.input_dim(), base.output_dim());
        for ad in &adapters {
            if ad.a.rows() != d_in || ad.b.cols() != d_out {
                return Err(Error::shape(
                    "LoraMoeLayer::new",
                    format!("adapter {d_in}x_ / _x{d_out}"),
                    format!("{}x_ / _x{}", ad.a.rows(), ad.b.cols()),
                ));
            }
            if ad.rank() != adapters[0].rank() || ad.alpha != adapters[0].alpha {
                return Err(Error::Argument("adapters must share rank and alpha".into()));
            }
        }
        Ok(Self { base, adapters, gate })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MoeLayer {
    pub experts: Vec<DenseLayer>,
    pub gate: GatingNetwork,
}

impl MoeLayer {
    pub fn new(experts: Vec<DenseLayer>, gate: GatingNetwork) -> Result<Self> {
        if experts.len() != gate.n_experts() || experts.is_empty() {
            return Err(Error::shape("MoeLayer::new", gate.n_experts(), experts.len()));
        }
        let dims = (experts[0].input_dim(), experts[0].output_dim());
        if experts.iter().any(|e| (e.input_dim(), e.output_dim()) != dims) {
            return Err(Error::Argument("experts must share input/output dims".into()));
        }
        Ok(Self { experts, gate })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum Block {
    Dense(DenseLayer),
    Moe(MoeLayer),
    LoraMoe(LoraMoeLayer),
}

impl Block {
    pub fn input_dim(&self) -> usize {
        match self {
            Block::Dense(l) => l.input_dim(),
            Block::Moe(l) => l.experts[0].input_dim(),
            Block::LoraMoe(l) => l.base.input_dim(),
        }
    }

    pub fn output_dim(&self) -> usize {
        match self {
            Block::Dense(l) => l.output_dim(),
            Block::Moe(l) => l.experts[0].output_dim(),
            Block::LoraMoe(l) => l.base.output_dim(),
        }
    }

    pub fn gate(&self) -> Option<&GatingNetwork> {
        match self {
            Block::Dense(_) => None,
            Block::Moe(l) => Some(&l.gate),
            Block::LoraMoe(l) => Some(&l.gate),
        }
    }

    /// Named views over every trainable array, in a fixed order shared by
    /// models and gradients.
    pub fn params(&self) -> Vec<(String, &[f64])> {
        let mut out = Vec::new();
        match self {
            Block::Dense(l) => {
                out.push(("weight".to_string(), l.weight.data()));
                out.push(("bias".to_string(), &l.bias[..]));
            }
            Block::Moe(l) => {
                for (i, e) in l.experts.iter().enumerate() {
                    out.push((format!("expert{i}.weight"), e.weight.data()));
                    out.push((format!("expert{i}.bias"), &e.bias[..]));
                }
                out.push(("gate.weight".to_string(), l.gate.weight.data()));
                out.push(("gate.bias".to_string(), &l.gate.bias[..]));
            }
            Block::LoraMoe(l) => {
                out.push(("base.weight".to_string(), l.base.weight.data()));
                out.push(("base.bias".to_string(), &l.base.bias[..]));
                for (i, ad) in l.adapters.iter().enumerate() {
                    out.push((format!("adapter{i}.a"), ad.a.data()));
                    out.push((format!("adapter{i}.b"), ad.b.data()));
                }
                out.push(("gate.weight".to_string(), l.gate.weight.data()));
                out.push(("gate.bias".to_string(), &l.gate.bias[..]));
            }
        }
        out
    }

    pub fn params_mut(&mut self) -> Vec<&mut [f64]> {
        let mut out: Vec<&mut [f64]> = Vec::new();
        match self {
            Block::Dense(l) => {
                out.push(l.weight.data_mut());
                out.push(&mut l.bias[..]);
            }
            Block::Moe(l) => {
                for e in &mut l.experts {
                    out.push(e.weight.data_mut());
                    out.push(&mut e.bias[..]);
                }
                out.push(l.gate.weight.data_mut());
                out.push(&mut l.gate.bias[..]);
            }
            Block::LoraMoe(l) => {
                out.push(l.base.weight.data_mut());
                out.push(&mut l.base.bias[..]);
                for ad in &mut l.adapters {
                    out.push(ad.a.data_mut());
                    out.push(ad.b.data_mut());
                }
                out.push(l.gate.weight.data_mut());
                out.push(&mut l.gate.bias[..]);
            }
        }
        out
    }

    /// Same structure with every array zeroed; used as a gradient buffer.
    pub(crate) fn zeros_like(&self) -> Block {
        let mut b = self.clone();
        for p in b.params_mut() {
            p.fill(0.0);
        }
        b
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ModelKind {
    Mlp,
    Moe,
    LoraMoe,
}

impl ModelKind {
    pub fn label(self) -> &'static str {
        match self {
            ModelKind::Mlp => "MLP",
            ModelKind::Moe => "MoE",
            ModelKind::LoraMoe => "LoRA-MoE",
        }
    }

    /// Short prefix used in voting-table row names.
    pub fn short(self) -> &'static str {
        match self {
            ModelKind::Mlp => "MLP",
            ModelKind::Moe => "MoE",
            ModelKind::LoraMoe => "LM",
        }
    }

    pub fn is_gated(self) -> bool {
        !matches!(self, ModelKind::Mlp)
    }
}

/// Structural hyperparameters of a model. Fields that do not apply to a
/// kind (experts for an MLP, rank for an MoE) are ignored when building.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub kind: ModelKind,
    pub input_dim: usize,
    pub hidden_dim: usize,
    /// Number of blocks including the 2-output head.
    pub depth: usize,
    pub n_experts: usize,
    pub top_k: usize,
    pub rank: usize,
    pub alpha: f64,
}

impl ModelConfig {
    pub fn new(kind: ModelKind, input_dim: usize, hidden_dim: usize) -> Self {
        Self {
            kind,
            input_dim,
            hidden_dim,
            depth: 2,
            n_experts: 6,
            top_k: 1,
            rank: 4,
            alpha: 1.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.depth < 2 {
            return Err(Error::Argument(format!("depth must be >= 2, got {}", self.depth)));
        }
        if self.input_dim == 0 || self.hidden_dim == 0 {
            return Err(Error::Argument("input and hidden dims must be >= 1".into()));
        }
        if self.kind.is_gated() && (self.top_k == 0 || self.top_k > self.n_experts) {
            return Err(Error::Argument(format!(
                "top_k must be in 1..={}, got {}",
                self.n_experts, self.top_k
            )));
        }
        if self.kind == ModelKind::LoraMoe {
            if self.rank == 0 {
                return Err(Error::Argument("rank must be >= 1".into()));
            }
            if !(self.alpha > 0.0 && self.alpha.is_finite()) {
                return Err(Error::Argument("alpha must be positive".into()));
            }
        }
        Ok(())
    }

    /// Input/output widths of each block, head last.
    pub fn block_dims(&self) -> Vec<(usize, usize)> {
        (0..self.depth)
            .map(|i| {
                let d_in = if i == 0 { self.input_dim } else { self.hidden_dim };
                let d_out = if i + 1 == self.depth {
                    OUTPUT_DIM
                } else {
                    self.hidden_dim
                };
                (d_in, d_out)
            })
            .collect()
    }
}

pub const OUTPUT_DIM: usize = 2;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Model {
    pub kind: ModelKind,
    pub blocks: Vec<Block>,
}

impl Model {
    /// Builds and initialises a model. Initialisation order is fixed
    /// (block by block; base, adapters or experts, then gate), so equal
    /// seeds give identical weights.
    pub fn build(cfg: &ModelConfig, rng: &mut Rng) -> Result<Model> {
        cfg.validate()?;
        let mut blocks = Vec::with_capacity(cfg.depth);
        for (d_in, d_out) in cfg.block_dims() {
            let block = match cfg.kind {
                ModelKind::Mlp => Block::Dense(DenseLayer::init(rng, d_in, d_out)?),
                ModelKind::Moe => {
                    let experts = (0..cfg.n_experts)
                        .map(|_| DenseLayer::init(rng, d_in, d_out))
                        .collect::<Result<Vec<_>>>()?;
                    let gate = GatingNetwork::init(rng, cfg.input_dim, cfg.n_experts, cfg.top_k)?;
                    Block::Moe(MoeLayer::new(experts, gate)?)
                }
                ModelKind::LoraMoe => {
                    let base = DenseLayer::init(rng, d_in, d_out)?;
                    let adapters = (0..cfg.n_experts)
                        .map(|_| LoraAdapter::init(rng, d_in, d_out, cfg.rank, cfg.alpha))
                        .collect::<Result<Vec<_>>>()?;
                    let gate = GatingNetwork::init(rng, cfg.input_dim, cfg.n_experts, cfg.top_k)?;
                    Block::LoraMoe(LoraMoeLayer::new(base, adapters, gate)?)
                }
            };
            blocks.push(block);
        }
        Model::from_blocks(cfg.kind, blocks)
    }

    pub fn from_blocks(kind: ModelKind, blocks: Vec<Block>) -> Result<Model> {
        if blocks.len() < 2 {
            return Err(Error::Argument("a model needs at least 2 blocks".into()));
        }
        for w in blocks.windows(2) {
            if w[0].output_dim() != w[1].input_dim() {
                return Err(Error::shape("Model", w[0].output_dim(), w[1].input_dim()));
            }
        }
        let last = blocks.last().expect("non-empty");
        if last.output_dim() != OUTPUT_DIM {
            return Err(Error::shape("Model head", OUTPUT_DIM, last.output_dim()));
        }
        if kind.is_gated() && last.gate().is_none() {
            return Err(Error::Argument("gated models must end in a gated block".into()));
        }
        let d_raw = blocks[0].input_dim();
        for b in &blocks {
            if let Some(g) = b.gate() {
                if g.input_dim() != d_raw {
                    return Err(Error::shape("gate input", d_raw, g.input_dim()));
                }
            }
        }
        Ok(Model { kind, blocks })
    }

    pub fn input_dim(&self) -> usize {
        self.blocks[0].input_dim()
    }

    pub fn depth(&self) -> usize {
        self.blocks.len()
    }

    /// Every trainable array with a `block{i}.` prefixed name.
    pub fn params(&self) -> Vec<(String, &[f64])> {
        self.blocks
            .iter()
            .enumerate()
            .flat_map(|(i, b)| b.params().into_iter().map(move |(n, p)| (format!("block{i}.{n}"), p)))
            .collect()
    }

    pub fn params_mut(&mut self) -> Vec<&mut [f64]> {
        self.blocks.iter_mut().flat_map(|b| b.params_mut()).collect()
    }

    /// The same model with every LoRA-MoE block replaced by its shared base
    /// layer.
    pub fn without_adapters(&self) -> Model {
        let blocks = self
            .blocks
            .iter()
            .map(|b| match b {
                Block::LoraMoe(l) => Block::Dense(l.base.clone()),
                other => other.clone(),
            })
            .collect();
        Model {
            kind: ModelKind::Mlp,
            blocks,
        }
    }
}

/// Per-block routing decisions recorded during a forward pass; `None` for
/// dense blocks.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct RouteTrace {
    pub blocks: Vec<Option<Vec<Selection>>>,
}

impl RouteTrace {
    /// Selected expert indices per row, sorted, for route-stability
    /// comparisons.
    pub fn expert_sets(&self) -> Vec<Option<Vec<Vec<usize>>>> {
        self.blocks
            .iter()
            .map(|b| {
                b.as_ref().map(|rows| {
                    rows.iter()
                        .map(|s| {
                            let mut v: Vec<usize> = s.iter().map(|&(j, _)| j).collect();
                            v.sort_unstable();
                            v
                        })
                        .collect()
                })
            })
            .collect()
    }
}

pub fn dense_forward(layer: &DenseLayer, x: &Matrix) -> Result<Matrix> {
    if x.cols() != layer.input_dim() {
        return Err(Error::shape("dense_forward", layer.input_dim(), x.cols()));
    }
    let mut y = matmul(x, &layer.weight.transpose())?;
    y.add_row_broadcast(&layer.bias)?;
    Ok(y)
}

pub fn gate_logits(gate: &GatingNetwork, x_raw: &Matrix) -> Result<Matrix> {
    if x_raw.cols() != gate.input_dim() {
        return Err(Error::shape("gate_logits", gate.input_dim(), x_raw.cols()));
    }
    let mut g = matmul(x_raw, &gate.weight.transpose())?;
    g.add_row_broadcast(&gate.bias)?;
    Ok(g)
}

/// Picks the `k` largest logits (ties to the lowest index) and weights them
/// with a softmax over the selected subset only. Ordered by rank.
pub fn route_topk(logits: &[f64], k: usize) -> Result<Selection> {
    if k == 0 || k > logits.len() {
        return Err(Error::Argument(format!(
            "top_k must be in 1..={}, got {k}",
            logits.len()
        )));
    }
    let mut idx: Vec<usize> = (0..logits.len()).collect();
    // stable sort keeps lower indices first among equal logits
    idx.sort_by(|&a, &b| logits[b].partial_cmp(&logits[a]).unwrap_or(std::cmp::Ordering::Equal));
    idx.truncate(k);
    let picked: Vec<f64> = idx.iter().map(|&j| logits[j]).collect();
    let w = softmax_unchecked(&picked);
    Ok(idx.into_iter().zip(w).collect())
}

pub fn lora_delta(adapter: &LoraAdapter, x: &Matrix) -> Result<Matrix> {
    if x.cols() != adapter.a.rows() {
        return Err(Error::shape("lora_delta", adapter.a.rows(), x.cols()));
    }
    let h = matmul(x, &adapter.a)?;
    let s = adapter.scale();
    Ok(matmul(&h, &adapter.b)?.map(|v| v * s))
}

/// Rows of a batch routed to one expert, plus what the backward pass needs.
#[derive(Debug, Clone)]
pub(crate) struct ExpertGroup {
    pub expert: usize,
    pub rows: Vec<usize>,
    pub weights: Vec<f64>,
    pub input: Matrix,
    /// `x A` for adapters; unused for full experts.
    pub hidden: Option<Matrix>,
    /// Expert output `E(x)` or adapter term `Δ`, before weighting.
    pub output: Matrix,
}

#[derive(Debug, Clone)]
pub(crate) struct GatedCache {
    pub logits: Matrix,
    pub selections: Vec<Selection>,
    pub groups: Vec<ExpertGroup>,
}

fn route_batch(gate: &GatingNetwork, x_raw: &Matrix, batch: usize) -> Result<(Matrix, Vec<Selection>)> {
    if x_raw.rows() != batch {
        return Err(Error::shape("routing batch", batch, x_raw.rows()));
    }
    let logits = gate_logits(gate, x_raw)?;
    let selections = (0..logits.rows())
        .map(|r| route_topk(logits.row(r), gate.top_k))
        .collect::<Result<Vec<_>>>()?;
    Ok((logits, selections))
}

fn group_rows(selections: &[Selection], n_experts: usize) -> Vec<(Vec<usize>, Vec<f64>)> {
    let mut groups = vec![(Vec::new(), Vec::new()); n_experts];
    for (row, sel) in selections.iter().enumerate() {
        for &(j, w) in sel {
            groups[j].0.push(row);
            groups[j].1.push(w);
        }
    }
    groups
}

fn scatter_weighted(y: &mut Matrix, rows: &[usize], weights: &[f64], part: &Matrix) {
    for (i, (&row, &w)) in rows.iter().zip(weights).enumerate() {
        for (o, v) in y.row_mut(row).iter_mut().zip(part.row(i)) {
            *o += w * v;
        }
    }
}

pub(crate) fn lora_moe_forward_cached(
    layer: &LoraMoeLayer,
    x: &Matrix,
    x_raw: &Matrix,
) -> Result<(Matrix, GatedCache)> {
    let mut y = dense_forward(&layer.base, x)?;
    let (logits, selections) = route_batch(&layer.gate, x_raw, x.rows())?;
    let mut groups = Vec::new();
    for (j, (rows, weights)) in group_rows(&selections, layer.adapters.len()).into_iter().enumerate() {
        if rows.is_empty() {
            continue;
        }
        let ad = &layer.adapters[j];
        let input = x.select_rows(&rows);
        let hidden = matmul(&input, &ad.a)?;
        let s = ad.scale();
        let delta = matmul(&hidden, &ad.b)?.map(|v| v * s);
        scatter_weighted(&mut y, &rows, &weights, &delta);
        groups.push(ExpertGroup {
            expert: j,
            rows,
            weights,
            input,
            hidden: Some(hidden),
            output: delta,
        });
    }
    Ok((
        y,
        GatedCache {
            logits,
            selections,
            groups,
        },
    ))
}

pub(crate) fn moe_forward_cached(layer: &MoeLayer, x: &Matrix, x_raw: &Matrix) -> Result<(Matrix, GatedCache)> {
    let d_out = layer.experts[0].output_dim();
    if x.cols() != layer.experts[0].input_dim() {
        return Err(Error::shape("moe_forward", layer.experts[0].input_dim(), x.cols()));
    }
    let mut y = Matrix::zeros(x.rows(), d_out);
    let (logits, selections) = route_batch(&layer.gate, x_raw, x.rows())?;
    let mut groups = Vec::new();
    for (j, (rows, weights)) in group_rows(&selections, layer.experts.len()).into_iter().enumerate() {
        if rows.is_empty() {
            continue;
        }
        let input = x.select_rows(&rows);
        let out = dense_forward(&layer.experts[j], &input)?;
        scatter_weighted(&mut y, &rows, &weights, &out);
        groups.push(ExpertGroup {
            expert: j,
            rows,
            weights,
            input,
            hidden: None,
            output: out,
        });
    }
    Ok((
        y,
        GatedCache {
            logits,
            selections,
            groups,
        },
    ))
}

/// Shared base output plus the gate-weighted adapter terms of the selected
/// experts. Returns the per-row routing.
pub fn lora_moe_forward(layer: &LoraMoeLayer, x: &Matrix, x_raw: &Matrix) -> Result<(Matrix, Vec<Selection>)> {
    let (y, cache) = lora_moe_forward_cached(layer, x, x_raw)?;
    Ok((y, cache.selections))
}

/// Gate-weighted sum of the selected full experts.
pub fn moe_forward(layer: &MoeLayer, x: &Matrix, x_raw: &Matrix) -> Result<(Matrix, Vec<Selection>)> {
    let (y, cache) = moe_forward_cached(layer, x, x_raw)?;
    Ok((y, cache.selections))
}

/// Runs the block stack (ReLU between blocks, not after the last) and returns
/// class probabilities `B x 2` together with the routing of every gated block.
pub fn model_forward(model: &Model, x_raw: &Matrix) -> Result<(Matrix, RouteTrace)> {
    let logits = model_logits(model, x_raw)?;
    Ok((softmax_rows(&logits.0), logits.1))
}

/// Pre-softmax head output.
pub fn model_logits(model: &Model, x_raw: &Matrix) -> Result<(Matrix, RouteTrace)> {
    if x_raw.cols() != model.input_dim() {
        return Err(Error::shape("model_forward", model.input_dim(), x_raw.cols()));
    }
    let mut trace = RouteTrace::default();
    let mut h = x_raw.clone();
    let last = model.blocks.len() - 1;
    for (i, block) in model.blocks.iter().enumerate() {
        let z = match block {
            Block::Dense(l) => {
                trace.blocks.push(None);
                dense_forward(l, &h)?
            }
            Block::Moe(l) => {
                let (z, sel) = moe_forward(l, &h, x_raw)?;
                trace.blocks.push(Some(sel));
                z
            }
            Block::LoraMoe(l) => {
                let (z, sel) = lora_moe_forward(l, &h, x_raw)?;
                trace.blocks.push(Some(sel));
                z
            }
        };
        h = if i < last { relu(&z) } else { z };
    }
    Ok((h, trace))
}

/// Parameter counts for one block.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerParams {
    pub kind: ModelKind,
    pub d_in: usize,
    pub d_out: usize,
    pub n_experts: usize,
    pub top_k: usize,
    pub rank: Option<usize>,
    /// Dense weights of the base layer (or of one expert), without bias.
    pub weights: usize,
    pub biases: usize,
    pub gate: usize,
    /// `d_in · d_out`, one expert's weight matrix.
    pub expert_params: usize,
    /// `r · (d_in + d_out)`, one adapter pair.
    pub lora_params: usize,
    pub total: usize,
    pub activated: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParamReport {
    pub total: usize,
    pub activated_per_sample: usize,
    /// `1 − Σ(|Θ_expert| + N|Θ_lora|) / Σ N|Θ_expert|` over gated layers for
    /// LoRA-MoE models, 0 otherwise. Negative when adapters outweigh the
    /// savings (for instance `N = 1`).
    pub reduction_vs_moe: f64,
    pub layers: Vec<LayerParams>,
}

/// Closed-form reduction of one LoRA-MoE layer relative to an MoE layer with
/// `n` full `d_in x d_out` experts.
pub fn reduction_ratio(d_in: usize, d_out: usize, n: usize, rank: usize) -> f64 {
    let expert = (d_in * d_out) as f64;
    let lora = (rank * (d_in + d_out)) as f64;
    1.0 - (expert + n as f64 * lora) / (n as f64 * expert)
}

/// Counts parameters from layer dimensions.
pub fn param_report(model: &Model) -> ParamReport {
    let mut layers = Vec::new();
    let (mut saved_num, mut saved_den) = (0.0, 0.0);
    for block in &model.blocks {
        let (d_in, d_out) = (block.input_dim(), block.output_dim());
        let dense = d_in * d_out + d_out;
        let lp = match block {
            Block::Dense(_) => LayerParams {
                kind: ModelKind::Mlp,
                d_in,
                d_out,
                n_experts: 1,
                top_k: 1,
                rank: None,
                weights: d_in * d_out,
                biases: d_out,
                gate: 0,
                expert_params: d_in * d_out,
                lora_params: 0,
                total: dense,
                activated: dense,
            },
            Block::Moe(l) => {
                let n = l.experts.len();
                let gate = n * l.gate.input_dim() + n;
                LayerParams {
                    kind: ModelKind::Moe,
                    d_in,
                    d_out,
                    n_experts: n,
                    top_k: l.gate.top_k,
                    rank: None,
                    weights: d_in * d_out,
                    biases: d_out,
                    gate,
                    expert_params: d_in * d_out,
                    lora_params: 0,
                    total: n * dense + gate,
                    activated: l.gate.top_k * dense + gate,
                }
            }
            Block::LoraMoe(l) => {
                let n = l.adapters.len();
                let r = l.adapters[0].rank();
                let gate = n * l.gate.input_dim() + n;
                let lora = r * (d_in + d_out);
                saved_num += (d_in * d_out + n * lora) as f64;
                saved_den += (n * d_in * d_out) as f64;
                LayerParams {
                    kind: ModelKind::LoraMoe,
                    d_in,
                    d_out,
                    n_experts: n,
                    top_k: l.gate.top_k,
                    rank: Some(r),
                    weights: d_in * d_out,
                    biases: d_out,
                    gate,
                    expert_params: d_in * d_out,
                    lora_params: lora,
                    total: dense + n * lora + gate,
                    activated: dense + gate + l.gate.top_k * lora,
                }
            }
        };
        layers.push(lp);
    }
    ParamReport {
        total: layers.iter().map(|l| l.total).sum(),
        activated_per_sample: layers.iter().map(|l| l.activated).sum(),
        reduction_vs_moe: if saved_den > 0.0 {
            1.0 - saved_num / saved_den
        } else {
            0.0
        },
        layers,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn random(rng: &mut Rng, r: usize, c: usize) -> Matrix {
        Matrix::new(r, c, (0..r * c).map(|_| rng.normal()).collect()).unwrap()
    }

    fn dense_oracle(l: &DenseLayer, x: &Matrix) -> Matrix {
        let mut y = Matrix::zeros(x.rows(), l.output_dim());
        for i in 0..x.rows() {
            for o in 0..l.output_dim() {
                let mut s = 0.0;
                for k in 0..l.input_dim() {
                    s += x.get(i, k) * l.weight.get(o, k);
                }
                y.set(i, o, s + l.bias[o]);
            }
        }
        y
    }

    fn random_lora_layer(
        rng: &mut Rng,
        d_in: usize,
        d_out: usize,
        d_raw: usize,
        n: usize,
        r: usize,
        k: usize,
    ) -> LoraMoeLayer {
        let base = DenseLayer::new(random(rng, d_out, d_in), (0..d_out).map(|_| rng.normal()).collect()).unwrap();
        let adapters = (0..n)
            .map(|_| LoraAdapter::new(random(rng, d_in, r), random(rng, r, d_out), 1.5).unwrap())
            .collect();
        let gate = GatingNetwork::new(random(rng, n, d_raw), (0..n).map(|_| rng.normal()).collect(), k).unwrap();
        LoraMoeLayer::new(base, adapters, gate).unwrap()
    }

    #[test]
    fn dense_hand_examples() {
        let l = DenseLayer::new(Matrix::from_rows(&[[1.0, 2.0], [3.0, 4.0]]).unwrap(), vec![0.0, 0.0]).unwrap();
        let y = dense_forward(&l, &Matrix::row_vector(&[1.0, 1.0])).unwrap();
        assert_eq!(y.data(), &[3.0, 7.0]);

        let l = DenseLayer::new(Matrix::zeros(2, 3), vec![5.0, 6.0]).unwrap();
        let y = dense_forward(&l, &Matrix::from_rows(&[[1.0, 2.0, 3.0], [-4.0, 0.5, 9.0]]).unwrap()).unwrap();
        assert_eq!(y.data(), &[5.0, 6.0, 5.0, 6.0]);
    }

    #[test]
    fn dense_matches_loop_oracle_exactly() {
        let mut rng = Rng::seed_from(7);
        let l = DenseLayer::init(&mut rng, 450, 30).unwrap();
        let x = random(&mut rng, 4, 450);
        assert_eq!(dense_forward(&l, &x).unwrap().max_abs_diff(&dense_oracle(&l, &x)), 0.0);
        assert!(dense_forward(&l, &Matrix::zeros(1, 449)).is_err());
    }

    #[test]
    fn gate_logits_cases() {
        let g = GatingNetwork::new(Matrix::identity(2), vec![0.0, 0.0], 1).unwrap();
        let out = gate_logits(&g, &Matrix::row_vector(&[0.3, -0.1])).unwrap();
        assert_eq!(out.data(), &[0.3, -0.1]);

        let g = GatingNetwork::new(Matrix::zeros(3, 4), vec![1.0, 2.0, 3.0], 1).unwrap();
        let out = gate_logits(&g, &Matrix::row_vector(&[9.0, -2.0, 0.1, 4.0])).unwrap();
        assert_eq!(out.data(), &[1.0, 2.0, 3.0]);

        let mut rng = Rng::seed_from(8);
        let g = GatingNetwork::new(random(&mut rng, 5, 6), (0..5).map(|_| rng.normal()).collect(), 2).unwrap();
        let x = random(&mut rng, 3, 6);
        let as_dense = DenseLayer::new(g.weight.clone(), g.bias.clone()).unwrap();
        assert_eq!(gate_logits(&g, &x).unwrap(), dense_oracle(&as_dense, &x));
    }

    #[test]
    fn route_topk_cases() {
        assert_eq!(route_topk(&[0.2, 0.9, -0.3], 1).unwrap(), vec![(1, 1.0)]);
        assert_eq!(route_topk(&[0.0, 0.0, -5.0], 2).unwrap(), vec![(0, 0.5), (1, 0.5)]);
        let sel = route_topk(&[2.0, 1.0, 0.0], 2).unwrap();
        let z = 2f64.exp() + 1f64.exp();
        assert_eq!(sel[0].0, 0);
        assert_eq!(sel[1].0, 1);
        assert!((sel[0].1 - 2f64.exp() / z).abs() < 1e-15);
        assert!((sel[1].1 - 1f64.exp() / z).abs() < 1e-15);
        assert!(route_topk(&[1.0, 2.0], 0).is_err());
        assert!(route_topk(&[1.0, 2.0], 3).is_err());
        // top_k = N is the full softmax
        let v = [0.3, -1.2, 2.0, 0.7];
        let full = softmax_unchecked(&v);
        for (j, w) in route_topk(&v, 4).unwrap() {
            assert!((w - full[j]).abs() < 1e-15);
        }
    }

    #[test]
    fn lora_delta_cases() {
        let mut rng = Rng::seed_from(9);
        let ad = LoraAdapter::init(&mut rng, 5, 3, 2, 1.0).unwrap();
        let d = lora_delta(&ad, &random(&mut rng, 4, 5)).unwrap();
        assert!(d.data().iter().all(|&v| v == 0.0));

        let ad = LoraAdapter::new(
            Matrix::from_rows(&[[1.0], [1.0]]).unwrap(),
            Matrix::row_vector(&[1.0, 1.0, 1.0]),
            1.0,
        )
        .unwrap();
        let d = lora_delta(&ad, &Matrix::row_vector(&[1.0, 2.0])).unwrap();
        assert_eq!(d.data(), &[3.0, 3.0, 3.0]);

        // dense (A·B) product oracle
        let ad = LoraAdapter::new(random(&mut rng, 7, 4), random(&mut rng, 4, 6), 2.0).unwrap();
        let x = random(&mut rng, 3, 7);
        let ab = matmul(&ad.a, &ad.b).unwrap();
        let oracle = matmul(&x, &ab).unwrap().map(|v| v * 0.5);
        let got = lora_delta(&ad, &x).unwrap();
        for (g, o) in got.data().iter().zip(oracle.data()) {
            assert!((g - o).abs() <= 1e-12 * o.abs().max(1.0));
        }
    }

    fn lora_moe_scalar_oracle(l: &LoraMoeLayer, x: &Matrix, x_raw: &Matrix) -> Matrix {
        let d_out = l.base.output_dim();
        let mut y = Matrix::zeros(x.rows(), d_out);
        for i in 0..x.rows() {
            let mut logits = vec![0.0; l.gate.n_experts()];
            for (j, lg) in logits.iter_mut().enumerate() {
                *lg = l.gate.bias[j]
                    + (0..x_raw.cols())
                        .map(|c| l.gate.weight.get(j, c) * x_raw.get(i, c))
                        .sum::<f64>();
            }
            let sel = route_topk(&logits, l.gate.top_k).unwrap();
            for o in 0..d_out {
                let mut v = l.base.bias[o]
                    + (0..x.cols())
                        .map(|c| l.base.weight.get(o, c) * x.get(i, c))
                        .sum::<f64>();
                for &(j, w) in &sel {
                    let ad = &l.adapters[j];
                    let mut delta = 0.0;
                    for q in 0..ad.rank() {
                        let h: f64 = (0..x.cols()).map(|c| x.get(i, c) * ad.a.get(c, q)).sum();
                        delta += h * ad.b.get(q, o);
                    }
                    v += w * delta * ad.scale();
                }
                y.set(i, o, v);
            }
        }
        y
    }

    #[test]
    fn lora_moe_zero_b_equals_base() {
        let mut rng = Rng::seed_from(10);
        let base = DenseLayer::init(&mut rng, 6, 4).unwrap();
        let adapters = (0..3)
            .map(|_| LoraAdapter::init(&mut rng, 6, 4, 2, 1.0).unwrap())
            .collect();
        let gate = GatingNetwork::init(&mut rng, 6, 3, 1).unwrap();
        let layer = LoraMoeLayer::new(base.clone(), adapters, gate).unwrap();
        let x = random(&mut rng, 5, 6);
        let (y, routes) = lora_moe_forward(&layer, &x, &x).unwrap();
        assert_eq!(y, dense_forward(&base, &x).unwrap());
        assert_eq!(routes.len(), 5);
    }

    #[test]
    fn lora_moe_single_expert_ignores_gate() {
        let mut rng = Rng::seed_from(12);
        let layer = random_lora_layer(&mut rng, 5, 3, 4, 1, 2, 1);
        let x = random(&mut rng, 3, 5);
        let x_raw = random(&mut rng, 3, 4);
        let (y, _) = lora_moe_forward(&layer, &x, &x_raw).unwrap();
        let mut want = dense_forward(&layer.base, &x).unwrap();
        let d = lora_delta(&layer.adapters[0], &x).unwrap();
        for (w, v) in want.data_mut().iter_mut().zip(d.data()) {
            *w += v;
        }
        assert_eq!(y, want);
    }

    #[test]
    fn lora_moe_matches_scalar_oracle() {
        let mut rng = Rng::seed_from(13);
        for k in [1, 2, 4] {
            let layer = random_lora_layer(&mut rng, 7, 5, 9, 4, 3, k);
            let x = random(&mut rng, 11, 7);
            let x_raw = random(&mut rng, 11, 9);
            let (y, _) = lora_moe_forward(&layer, &x, &x_raw).unwrap();
            let o = lora_moe_scalar_oracle(&layer, &x, &x_raw);
            for (a, b) in y.data().iter().zip(o.data()) {
                assert!((a - b).abs() <= 1e-12 * b.abs().max(1.0), "{a} vs {b}");
            }
        }
    }

    #[test]
    fn moe_forward_cases() {
        let mut rng = Rng::seed_from(14);
        let e = DenseLayer::init(&mut rng, 4, 3).unwrap();
        let gate = GatingNetwork::init(&mut rng, 4, 3, 2).unwrap();
        let layer = MoeLayer::new(vec![e.clone(), e.clone(), e.clone()], gate).unwrap();
        let x = random(&mut rng, 6, 4);
        let (y, _) = moe_forward(&layer, &x, &x).unwrap();
        let want = dense_forward(&e, &x).unwrap();
        assert!(y.max_abs_diff(&want) < 1e-12);

        let experts: Vec<_> = (0..3).map(|_| DenseLayer::init(&mut rng, 4, 3).unwrap()).collect();
        let gate = GatingNetwork::init(&mut rng, 4, 3, 1).unwrap();
        let layer = MoeLayer::new(experts, gate).unwrap();
        let (y, sel) = moe_forward(&layer, &x, &x).unwrap();
        for r in 0..x.rows() {
            let j = sel[r][0].0;
            let single = dense_forward(&layer.experts[j], &x.select_rows(&[r])).unwrap();
            assert_eq!(y.row(r), single.row(0));
        }

        // top_k = N against the full softmax-weighted sum
        let experts: Vec<_> = (0..3).map(|_| DenseLayer::init(&mut rng, 4, 3).unwrap()).collect();
        let gate = GatingNetwork::new(random(&mut rng, 3, 4), vec![0.1, -0.2, 0.3], 3).unwrap();
        let layer = MoeLayer::new(experts, gate).unwrap();
        let (y, _) = moe_forward(&layer, &x, &x).unwrap();
        let logits = gate_logits(&layer.gate, &x).unwrap();
        for r in 0..x.rows() {
            let p = softmax_unchecked(logits.row(r));
            let xr = x.select_rows(&[r]);
            let mut want = [0.0; 3];
            for (j, e) in layer.experts.iter().enumerate() {
                let out = dense_oracle(e, &xr);
                for o in 0..3 {
                    want[o] += p[j] * out.get(0, o);
                }
            }
            for o in 0..3 {
                assert!((y.get(r, o) - want[o]).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn model_forward_properties() {
        let mut rng = Rng::seed_from(15);
        let cfg = ModelConfig {
            depth: 2,
            n_experts: 3,
            rank: 2,
            ..ModelConfig::new(ModelKind::LoraMoe, 8, 5)
        };
        let model = Model::build(&cfg, &mut rng).unwrap();
        let x = random(&mut rng, 10, 8);
        let (p, trace) = model_forward(&model, &x).unwrap();
        let (p_base, _) = model_forward(&model.without_adapters(), &x).unwrap();
        assert_eq!(p, p_base);
        assert_eq!(trace.blocks.len(), 2);
        assert!(trace.blocks.iter().all(|b| b.is_some()));

        let (logits, _) = model_logits(&model, &x).unwrap();
        for r in 0..x.rows() {
            assert!((p.row(r).iter().sum::<f64>() - 1.0).abs() < 1e-12);
            assert_eq!(
                crate::numerics::argmax_first(p.row(r)).unwrap(),
                crate::numerics::argmax_first(logits.row(r)).unwrap()
            );
        }
        assert!(model_forward(&model, &random(&mut rng, 2, 7)).is_err());

        // repeated calls route identically
        let (_, again) = model_forward(&model, &x).unwrap();
        assert_eq!(trace, again);
    }

    #[test]
    fn gated_model_head_is_gated() {
        let mut rng = Rng::seed_from(16);
        for kind in [ModelKind::Moe, ModelKind::LoraMoe] {
            let cfg = ModelConfig {
                depth: 3,
                n_experts: 2,
                rank: 1,
                ..ModelConfig::new(kind, 4, 3)
            };
            let m = Model::build(&cfg, &mut rng).unwrap();
            assert!(m.blocks.last().unwrap().gate().is_some());
            assert!(m.blocks.iter().all(|b| b.gate().unwrap().input_dim() == 4));
        }
        let cfg = ModelConfig {
            depth: 1,
            ..ModelConfig::new(ModelKind::Mlp, 4, 3)
        };
        assert!(Model::build(&cfg, &mut rng).is_err());
    }

    #[test]
    fn mlp_param_counts() {
        let mut rng = Rng::seed_from(17);
        let m = Model::build(&ModelConfig::new(ModelKind::Mlp, 450, 200), &mut rng).unwrap();
        let rep = param_report(&m);
        assert_eq!(rep.layers[0].weights, 90_000);
        assert_eq!(rep.layers[0].total, 90_200);
        assert_eq!(rep.layers[1].weights, 400);
        assert_eq!(rep.layers[1].total, 402);
        assert_eq!(rep.total, 90_602);
        assert_eq!(rep.reduction_vs_moe, 0.0);
    }

    #[test]
    fn reduction_worked_example() {
        let r = reduction_ratio(300, 300, 5, 4);
        assert_eq!((300 * 300, 4 * (300 + 300)), (90_000, 2_400));
        assert!((r - (1.0 - 102_000.0 / 450_000.0)).abs() < 1e-15);
        assert_eq!(format!("{:.1}", 100.0 * r), "77.3");
        // vanishing adapters approach 1 - 1/N
        assert!((reduction_ratio(100_000, 100_000, 5, 1) - 0.8).abs() < 1e-4);
    }

    #[test]
    fn param_report_gated() {
        let mut rng = Rng::seed_from(18);
        let cfg = ModelConfig {
            n_experts: 5,
            rank: 4,
            top_k: 2,
            ..ModelConfig::new(ModelKind::LoraMoe, 300, 300)
        };
        let m = Model::build(&cfg, &mut rng).unwrap();
        let rep = param_report(&m);
        let brute: usize = m.params().iter().map(|(_, p)| p.len()).sum();
        assert_eq!(rep.total, brute);
        assert!(rep.activated_per_sample <= rep.total);
        let l0 = &rep.layers[0];
        assert_eq!(l0.activated, 90_300 + 5 * 300 + 5 + 2 * 2_400);

        let cfg = ModelConfig {
            n_experts: 4,
            top_k: 1,
            ..ModelConfig::new(ModelKind::Moe, 10, 6)
        };
        let m = Model::build(&cfg, &mut rng).unwrap();
        let rep = param_report(&m);
        let brute: usize = m.params().iter().map(|(_, p)| p.len()).sum();
        assert_eq!(rep.total, brute);
        assert_eq!(rep.layers[0].activated, 66 + 44);
    }
}
