//! The two-branch network: per-modality input projections into a common
//! space, optional intra-modal attention, optional cross-modal attention
//! conditioned on the partner modality, and the cosine pair score.
//!
//! Because cross-modal attention injects the partner's features, the
//! embedding of one side depends on both members of the pair; scoring a
//! transaction against many candidate descriptions recomputes per candidate.

use crate::attention::{
    block_graph, cross_modal_block, intra_modal_block, AttentionOutput, BlockNodes, BlockParams,
    PackageOp, ScoreMode,
};
use crate::error::{Error, Result};
use crate::graph::{Graph, NodeId, ParamSet};
use crate::tensor::{cosine_similarity, kaiming_init, linear_forward, seeded_rng, Tensor};
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Variant {
    /// Two linear layers per branch, no attention.
    Fc,
    IntraOnly,
    CrossOnly,
    Both,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub t_dim: usize,
    pub d_dim: usize,
    pub common_dim: usize,
    pub variant: Variant,
    pub package_op: PackageOp,
    pub score_mode: ScoreMode,
    /// Attention blocks per kind per branch (ignored by the FC variant).
    pub intra_blocks: usize,
    pub cross_blocks: usize,
    pub seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig::desk_scale(Variant::Both)
    }
}

impl ModelConfig {
    pub fn desk_scale(variant: Variant) -> Self {
        ModelConfig {
            t_dim: 32,
            d_dim: 48,
            common_dim: 64,
            variant,
            package_op: PackageOp::DotProduct,
            score_mode: ScoreMode::Elementwise,
            intra_blocks: 1,
            cross_blocks: 1,
            seed: 0,
        }
    }

    /// Dimensions of the deployed system: 415-d transactions, 768-d text,
    /// 1024-d common space.
    pub fn paper_scale(variant: Variant) -> Self {
        ModelConfig { t_dim: 415, d_dim: 768, common_dim: 1024, ..ModelConfig::desk_scale(variant) }
    }

    pub fn validate(&self) -> Result<()> {
        if self.common_dim == 0 || self.t_dim == 0 || self.d_dim == 0 {
            return Err(Error::Parameter("model dims must be >= 1".to_string()));
        }
        Ok(())
    }

    pub fn intra_on(&self) -> bool {
        matches!(self.variant, Variant::IntraOnly | Variant::Both) && self.intra_blocks > 0
    }

    pub fn cross_on(&self) -> bool {
        matches!(self.variant, Variant::CrossOnly | Variant::Both) && self.cross_blocks > 0
    }

    /// Stable name set of all learnable tensors; a function of the config
    /// alone. Order is the construction (initialization) order.
    pub fn param_names(&self) -> Vec<String> {
        let mut names = Vec::new();
        for br in ["t", "d"] {
            names.push(format!("{br}.proj.w"));
            names.push(format!("{br}.proj.b"));
            if self.variant == Variant::Fc {
                names.push(format!("{br}.fc.w"));
                names.push(format!("{br}.fc.b"));
                continue;
            }
            if self.intra_on() {
                for i in 0..self.intra_blocks {
                    for f in ["w_v", "b_v", "w_k", "b_k", "w_q", "b_q"] {
                        names.push(format!("{br}.intra{i}.{f}"));
                    }
                }
            }
            if self.cross_on() {
                for i in 0..self.cross_blocks {
                    for f in ["w_v", "b_v", "w_k", "b_k", "w_q", "b_q"] {
                        names.push(format!("{br}.cross{i}.{f}"));
                    }
                }
            }
        }
        names
    }
}

/// Kaiming-normal weights, zero biases, deterministic under the config seed.
pub fn init_params(cfg: &ModelConfig) -> Result<ParamSet> {
    cfg.validate()?;
    let mut rng = seeded_rng(cfg.seed);
    let c = cfg.common_dim;
    let mut params = ParamSet::new();
    for name in cfg.param_names() {
        let in_dim = if name.ends_with(".proj.w") || name.ends_with(".proj.b") {
            if name.starts_with("t.") {
                cfg.t_dim
            } else {
                cfg.d_dim
            }
        } else {
            c
        };
        let tensor = if name.ends_with(".w") || name.contains(".w_") {
            kaiming_init(vec![c, in_dim], in_dim, &mut rng)?
        } else {
            // Biases start at zero.
            Tensor::zeros(vec![c])
        };
        params.insert(name, tensor);
    }
    Ok(params)
}

fn get<'a>(params: &'a ParamSet, name: &str) -> Result<&'a Tensor> {
    params
        .get(name)
        .ok_or_else(|| Error::Parameter(format!("missing parameter '{name}'")))
}

pub(crate) fn block_params(params: &ParamSet, prefix: &str) -> Result<BlockParams> {
    Ok(BlockParams {
        w_v: get(params, &format!("{prefix}.w_v"))?.clone(),
        b_v: get(params, &format!("{prefix}.b_v"))?.clone(),
        w_k: get(params, &format!("{prefix}.w_k"))?.clone(),
        b_k: get(params, &format!("{prefix}.b_k"))?.clone(),
        w_q: get(params, &format!("{prefix}.w_q"))?.clone(),
        b_q: get(params, &format!("{prefix}.b_q"))?.clone(),
    })
}

/// Forward intermediates of one branch, kept for the explainer.
#[derive(Debug, Clone)]
pub struct BranchTrace {
    pub projected: Tensor,
    pub intra: Vec<AttentionOutput>,
    pub cross: Vec<AttentionOutput>,
    pub embedding: Tensor,
}

#[derive(Debug, Clone)]
pub struct PairTrace {
    pub t_branch: BranchTrace,
    pub d_branch: BranchTrace,
}

fn branch_forward(
    params: &ParamSet,
    cfg: &ModelConfig,
    br: &str,
    own: &Tensor,
    partner_projected: &Tensor,
) -> Result<BranchTrace> {
    let p = linear_forward(
        get(params, &format!("{br}.proj.w"))?,
        get(params, &format!("{br}.proj.b"))?,
        own,
    )?;
    if cfg.variant == Variant::Fc {
        let e = linear_forward(
            get(params, &format!("{br}.fc.w"))?,
            get(params, &format!("{br}.fc.b"))?,
            &p,
        )?;
        return Ok(BranchTrace { projected: p, intra: vec![], cross: vec![], embedding: e });
    }
    let mut x = p.clone();
    let mut intra = Vec::new();
    if cfg.intra_on() {
        for i in 0..cfg.intra_blocks {
            let bp = block_params(params, &format!("{br}.intra{i}"))?;
            let out = intra_modal_block(&x, &bp, cfg.package_op, cfg.score_mode)?;
            x = out.output.clone();
            intra.push(out);
        }
    }
    let mut cross = Vec::new();
    if cfg.cross_on() {
        for i in 0..cfg.cross_blocks {
            let bp = block_params(params, &format!("{br}.cross{i}"))?;
            let out =
                cross_modal_block(&x, partner_projected, &bp, cfg.package_op, cfg.score_mode)?;
            x = out.output.clone();
            cross.push(out);
        }
    }
    Ok(BranchTrace { projected: p, intra, cross, embedding: x })
}

/// Full forward with all intermediates retained.
pub fn forward_trace(
    t: &Tensor,
    d: &Tensor,
    params: &ParamSet,
    cfg: &ModelConfig,
) -> Result<PairTrace> {
    if t.shape() != [cfg.t_dim] || d.shape() != [cfg.d_dim] {
        return Err(Error::dimension(
            "encode_pair",
            format!(
                "expected t [{}] and d [{}], got {:?} and {:?}",
                cfg.t_dim,
                cfg.d_dim,
                t.shape(),
                d.shape()
            ),
        ));
    }
    // Cross-block queries tap the partner's projected, pre-attention features.
    let p_d = linear_forward(get(params, "d.proj.w")?, get(params, "d.proj.b")?, d)?;
    let p_t = linear_forward(get(params, "t.proj.w")?, get(params, "t.proj.b")?, t)?;
    let t_branch = branch_forward(params, cfg, "t", t, &p_d)?;
    let d_branch = branch_forward(params, cfg, "d", d, &p_t)?;
    Ok(PairTrace { t_branch, d_branch })
}

/// Embeddings (e_t, e_d) of one transaction/text pair.
pub fn encode_pair(
    t: &Tensor,
    d: &Tensor,
    params: &ParamSet,
    cfg: &ModelConfig,
) -> Result<(Tensor, Tensor)> {
    let trace = forward_trace(t, d, params, cfg)?;
    Ok((trace.t_branch.embedding, trace.d_branch.embedding))
}

/// Cosine similarity of the L2-normalized pair embeddings, in [-1, 1].
pub fn score_pair(t: &Tensor, d: &Tensor, params: &ParamSet, cfg: &ModelConfig) -> Result<f64> {
    let (e_t, e_d) = encode_pair(t, d, params, cfg)?;
    cosine_similarity(&e_t, &e_d)
}

fn block_nodes(g: &mut Graph, prefix: &str) -> Result<BlockNodes> {
    Ok(BlockNodes {
        w_v: g.param_node(&format!("{prefix}.w_v"))?,
        b_v: g.param_node(&format!("{prefix}.b_v"))?,
        w_k: g.param_node(&format!("{prefix}.w_k"))?,
        b_k: g.param_node(&format!("{prefix}.b_k"))?,
        w_q: g.param_node(&format!("{prefix}.w_q"))?,
        b_q: g.param_node(&format!("{prefix}.b_q"))?,
    })
}

fn branch_graph(
    g: &mut Graph,
    cfg: &ModelConfig,
    br: &str,
    own: NodeId,
    partner_projected: NodeId,
) -> Result<NodeId> {
    let w = g.param_node(&format!("{br}.proj.w"))?;
    let b = g.param_node(&format!("{br}.proj.b"))?;
    let p = g.linear(w, b, own)?;
    if cfg.variant == Variant::Fc {
        let w = g.param_node(&format!("{br}.fc.w"))?;
        let b = g.param_node(&format!("{br}.fc.b"))?;
        return g.linear(w, b, p);
    }
    let mut x = p;
    if cfg.intra_on() {
        for i in 0..cfg.intra_blocks {
            let nodes = block_nodes(g, &format!("{br}.intra{i}"))?;
            x = block_graph(g, nodes, x, x, cfg.package_op, cfg.score_mode)?;
        }
    }
    if cfg.cross_on() {
        for i in 0..cfg.cross_blocks {
            let nodes = block_nodes(g, &format!("{br}.cross{i}"))?;
            x = block_graph(g, nodes, x, partner_projected, cfg.package_op, cfg.score_mode)?;
        }
    }
    Ok(x)
}

/// Register every model parameter on a gradient graph.
pub fn register_params(g: &mut Graph, params: &ParamSet) -> Result<()> {
    for (name, value) in params {
        g.param(name, value)?;
    }
    Ok(())
}

/// Differentiable pair score node (cosine of normalized embeddings).
/// Parameters must already be registered on the graph.
pub fn score_pair_graph(
    g: &mut Graph,
    cfg: &ModelConfig,
    t: NodeId,
    d: NodeId,
) -> Result<NodeId> {
    let wt = g.param_node("t.proj.w")?;
    let bt = g.param_node("t.proj.b")?;
    let p_t = g.linear(wt, bt, t)?;
    let wd = g.param_node("d.proj.w")?;
    let bd = g.param_node("d.proj.b")?;
    let p_d = g.linear(wd, bd, d)?;
    let e_t = branch_graph(g, cfg, "t", t, p_d)?;
    let e_d = branch_graph(g, cfg, "d", d, p_t)?;
    let n_t = g.l2_normalize(e_t)?;
    let n_d = g.l2_normalize(e_d)?;
    g.dot(n_t, n_d)
}

/// Which description conditions the cross blocks when exporting embeddings.
#[derive(Debug, Clone)]
pub enum PartnerPolicy {
    /// Each merchant's own description (the default).
    OwnDescription,
    /// One fixed description vector for every merchant.
    Fixed(Tensor),
}

#[derive(Debug, Clone, Serialize)]
pub struct EmbeddingRow {
    pub id: String,
    pub category: usize,
    pub raw: Vec<f64>,
    pub embedded: Vec<f64>,
}

/// Pre- and post-embedding transaction features, one row per merchant.
pub fn export_embeddings(
    records: &[crate::data::MerchantRecord],
    params: &ParamSet,
    cfg: &ModelConfig,
    policy: &PartnerPolicy,
) -> Result<Vec<EmbeddingRow>> {
    let mut rows = Vec::with_capacity(records.len());
    for rec in records {
        let d = match policy {
            PartnerPolicy::OwnDescription => &rec.d,
            PartnerPolicy::Fixed(fixed) => fixed,
        };
        let (e_t, _) = encode_pair(&rec.t, d, params, cfg)?;
        rows.push(EmbeddingRow {
            id: rec.id.clone(),
            category: rec.category,
            raw: rec.t.data().to_vec(),
            embedded: e_t.data().to_vec(),
        });
    }
    Ok(rows)
}

// ---------------------------------------------------------------------------
// Checkpoint container: one JSON header line (format version, config, tensor
// index with byte offsets), then the little-endian f64 payload in index order.
// ---------------------------------------------------------------------------

pub const CHECKPOINT_FORMAT_VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    shape: Vec<usize>,
    offset: u64,
}

#[derive(Serialize, Deserialize)]
struct CheckpointHeader {
    format_version: u32,
    config: ModelConfig,
    tensors: Vec<TensorEntry>,
}

pub fn save_checkpoint(
    path: &std::path::Path,
    cfg: &ModelConfig,
    params: &ParamSet,
) -> Result<()> {
    let mut entries = Vec::new();
    let mut payload: Vec<u8> = Vec::new();
    for (name, tensor) in params {
        entries.push(TensorEntry {
            name: name.clone(),
            shape: tensor.shape().to_vec(),
            offset: payload.len() as u64,
        });
        for &x in tensor.data() {
            payload.extend_from_slice(&x.to_le_bytes());
        }
    }
    let header = CheckpointHeader {
        format_version: CHECKPOINT_FORMAT_VERSION,
        config: cfg.clone(),
        tensors: entries,
    };
    let mut bytes = serde_json::to_string(&header)
        .map_err(|e| Error::Checkpoint(e.to_string()))?
        .into_bytes();
    bytes.push(b'\n');
    bytes.extend_from_slice(&payload);
    std::fs::write(path, bytes)?;
    Ok(())
}

pub fn load_checkpoint(path: &std::path::Path) -> Result<(ModelConfig, ParamSet)> {
    let bytes = std::fs::read(path)?;
    let nl = bytes
        .iter()
        .position(|&b| b == b'\n')
        .ok_or_else(|| Error::Checkpoint("missing header line".to_string()))?;
    let header: CheckpointHeader = serde_json::from_slice(&bytes[..nl])
        .map_err(|e| Error::Checkpoint(format!("bad header: {e}")))?;
    if header.format_version != CHECKPOINT_FORMAT_VERSION {
        return Err(Error::Checkpoint(format!(
            "unsupported format version {}",
            header.format_version
        )));
    }
    let payload = &bytes[nl + 1..];
    let mut params = ParamSet::new();
    for entry in &header.tensors {
        let n: usize = entry.shape.iter().product();
        let start = entry.offset as usize;
        let end = start + n * 8;
        if end > payload.len() {
            return Err(Error::Checkpoint(format!(
                "tensor '{}' extends past end of payload",
                entry.name
            )));
        }
        let data: Vec<f64> = payload[start..end]
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        params.insert(entry.name.clone(), Tensor::new(entry.shape.clone(), data)?);
    }
    let expected: std::collections::BTreeSet<_> =
        header.config.param_names().into_iter().collect();
    let actual: std::collections::BTreeSet<_> = params.keys().cloned().collect();
    if expected != actual {
        return Err(Error::Checkpoint(
            "tensor names do not match the stored model config".to_string(),
        ));
    }
    Ok((header.config, params))
}
