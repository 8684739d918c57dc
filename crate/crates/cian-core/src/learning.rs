//! Incremental-margin triplet training with batch-hard negative mining,
//! plus threshold selection and precision/recall/F1 evaluation.

use crate::adam::{adam_step, AdamHyper, AdamState};
use crate::attention::{attention_weights, package_score, PackageOp, ScoreMode};
use crate::data::PairSample;
use crate::error::{Error, Result};
use crate::graph::{Graph, ParamSet};
use crate::model::{register_params, score_pair, score_pair_graph, ModelConfig};
use crate::tensor::{cosine_similarity, linear_forward, Tensor};
use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

/// Hinge triplet loss on cosine scores: max(0, margin - s_pos + s_neg).
pub fn triplet_loss(s_pos: f64, s_neg: f64, margin: f64) -> f64 {
    (margin - s_pos + s_neg).max(0.0)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MarginSchedule {
    pub m0: f64,
    pub m_max: f64,
    pub delta: f64,
}

impl Default for MarginSchedule {
    fn default() -> Self {
        // Linear ramp stand-in; the exact incremental rule is configuration,
        // not ground truth.
        MarginSchedule { m0: 0.1, m_max: 0.5, delta: 0.05 }
    }
}

impl MarginSchedule {
    pub fn validate(&self) -> Result<()> {
        if !(0.0 <= self.m0 && self.m0 <= self.m_max) || self.delta < 0.0 {
            return Err(Error::Parameter(format!("invalid margin schedule {self:?}")));
        }
        Ok(())
    }
}

/// min(m_max, m0 + delta * epoch); nondecreasing in epoch.
pub fn margin_at(epoch: usize, sched: &MarginSchedule) -> f64 {
    (sched.m0 + sched.delta * epoch as f64).min(sched.m_max)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub threshold: f64,
    pub tp: usize,
    pub fp: usize,
    pub fn_: usize,
    pub tn: usize,
}

// ---------------------------------------------------------------------------
// Batch scoring with per-merchant caching.
//
// Inside a branch only the final cross block mixes the pair: projections,
// intra blocks and the cross value/key/query projections are all functions
// of a single merchant and are computed once per batch member. The cached
// path covers elementwise scoring with a single cross block; anything else
// falls back to the plain per-pair forward.
// ---------------------------------------------------------------------------

struct CrossCache {
    /// Value and key vectors of each merchant's branch source.
    v: Vec<Tensor>,
    k: Vec<Tensor>,
    /// Query vector computed from each merchant's partner-side projection.
    q: Vec<Tensor>,
}

enum ScorerImpl<'a> {
    /// Embeddings independent of the partner: score is a normalized dot.
    Precomputed { e_t: Vec<Tensor>, e_d: Vec<Tensor> },
    Cached { t_branch: CrossCache, d_branch: CrossCache, op: PackageOp },
    Generic { merchants: &'a [(&'a Tensor, &'a Tensor)], params: &'a ParamSet, cfg: &'a ModelConfig },
}

pub struct BatchScorer<'a> {
    inner: ScorerImpl<'a>,
    n: usize,
}

impl<'a> BatchScorer<'a> {
    pub fn new(
        params: &'a ParamSet,
        cfg: &'a ModelConfig,
        merchants: &'a [(&'a Tensor, &'a Tensor)],
    ) -> Result<Self> {
        let n = merchants.len();
        let lin = |w: &str, b: &str, x: &Tensor| -> Result<Tensor> {
            let wt = params
                .get(w)
                .ok_or_else(|| Error::Parameter(format!("missing parameter '{w}'")))?;
            let bt = params
                .get(b)
                .ok_or_else(|| Error::Parameter(format!("missing parameter '{b}'")))?;
            linear_forward(wt, bt, x)
        };
        if !cfg.cross_on() {
            let mut e_t = Vec::with_capacity(n);
            let mut e_d = Vec::with_capacity(n);
            for &(t, d) in merchants {
                let (et, ed) = crate::model::encode_pair(t, d, params, cfg)?;
                e_t.push(et.l2_normalized().map_err(degenerate_embedding)?);
                e_d.push(ed.l2_normalized().map_err(degenerate_embedding)?);
            }
            return Ok(BatchScorer { inner: ScorerImpl::Precomputed { e_t, e_d }, n });
        }
        if cfg.cross_blocks != 1 || cfg.score_mode != ScoreMode::Elementwise {
            return Ok(BatchScorer { inner: ScorerImpl::Generic { merchants, params, cfg }, n });
        }

        let build = |br: &str, other: &str| -> Result<CrossCache> {
            let mut v = Vec::with_capacity(n);
            let mut k = Vec::with_capacity(n);
            let mut q = Vec::with_capacity(n);
            for &(t, d) in merchants {
                let (own, partner) = if br == "t" { (t, d) } else { (d, t) };
                let p_own = lin(&format!("{br}.proj.w"), &format!("{br}.proj.b"), own)?;
                let p_other = lin(&format!("{other}.proj.w"), &format!("{other}.proj.b"), partner)?;
                let mut x = p_own;
                if cfg.intra_on() {
                    for i in 0..cfg.intra_blocks {
                        let bp = crate::model::block_params(params, &format!("{br}.intra{i}"))?;
                        x = crate::attention::intra_modal_block(&x, &bp, cfg.package_op, cfg.score_mode)?
                            .output;
                    }
                }
                let prefix = format!("{br}.cross0");
                v.push(lin(&format!("{prefix}.w_v"), &format!("{prefix}.b_v"), &x)?);
                k.push(lin(&format!("{prefix}.w_k"), &format!("{prefix}.b_k"), &x)?);
                q.push(lin(&format!("{prefix}.w_q"), &format!("{prefix}.b_q"), &p_other)?);
            }
            Ok(CrossCache { v, k, q })
        };
        let t_branch = build("t", "d")?;
        let d_branch = build("d", "t")?;
        Ok(BatchScorer {
            inner: ScorerImpl::Cached { t_branch, d_branch, op: cfg.package_op },
            n,
        })
    }

    pub fn len(&self) -> usize {
        self.n
    }

    pub fn is_empty(&self) -> bool {
        self.n == 0
    }

    /// score_pair(t_i, d_j).
    pub fn score(&self, i: usize, j: usize) -> Result<f64> {
        match &self.inner {
            ScorerImpl::Precomputed { e_t, e_d } => e_t[i].dot(&e_d[j]),
            ScorerImpl::Generic { merchants, params, cfg } => {
                score_pair(merchants[i].0, merchants[j].1, params, cfg)
            }
            ScorerImpl::Cached { t_branch, d_branch, op } => {
                // t-branch: values/keys from merchant i, query from d_j.
                let a = attention_weights(&package_score(&t_branch.k[i], &t_branch.q[j], *op)?)?;
                let e_t = a.mul(&t_branch.v[i])?;
                // d-branch: values/keys from merchant j, query from t_i.
                let a = attention_weights(&package_score(&d_branch.k[j], &d_branch.q[i], *op)?)?;
                let e_d = a.mul(&d_branch.v[j])?;
                cosine_similarity(&e_t, &e_d).map_err(degenerate_embedding)
            }
        }
    }

    /// Full n x n cross-score matrix, row-major.
    pub fn matrix(&self) -> Result<Vec<f64>> {
        let mut m = vec![0.0; self.n * self.n];
        for i in 0..self.n {
            for j in 0..self.n {
                m[i * self.n + j] = self.score(i, j)?;
            }
        }
        Ok(m)
    }
}

fn degenerate_embedding(e: Error) -> Error {
    match e {
        Error::Degenerate { .. } => {
            Error::degenerate("score_pair", "zero-norm embedding".to_string())
        }
        other => other,
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct MiningOutcome {
    /// (anchor index, hardest negative index) per non-skipped anchor.
    pub triplets: Vec<(usize, usize)>,
    /// Anchors with no cross-category candidate in the batch.
    pub skipped: usize,
}

/// Batch-hard mining: for each anchor i, the j with category(j) != category(i)
/// maximizing scores[i][j]; ties broken by lowest index.
pub fn mine_hardest_negatives(categories: &[usize], scores: &[f64]) -> Result<MiningOutcome> {
    let n = categories.len();
    if scores.len() != n * n {
        return Err(Error::dimension(
            "mine_hardest_negatives",
            format!("{n} anchors but {} scores", scores.len()),
        ));
    }
    let mut triplets = Vec::with_capacity(n);
    let mut skipped = 0;
    for i in 0..n {
        let mut best: Option<(usize, f64)> = None;
        for j in 0..n {
            if categories[j] == categories[i] {
                continue;
            }
            let s = scores[i * n + j];
            if best.is_none_or(|(_, bs)| s > bs) {
                best = Some((j, s));
            }
        }
        match best {
            Some((j, _)) => triplets.push((i, j)),
            None => skipped += 1,
        }
    }
    Ok(MiningOutcome { triplets, skipped })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainHyper {
    pub batch_size: usize,
    pub epochs: usize,
    pub adam: AdamHyper,
    pub schedule: MarginSchedule,
    pub seed: u64,
}

impl Default for TrainHyper {
    fn default() -> Self {
        TrainHyper {
            batch_size: 256,
            epochs: 30,
            adam: AdamHyper::default(),
            schedule: MarginSchedule::default(),
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EpochTrace {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_loss: Option<f64>,
    pub margin: f64,
}

struct BatchLoss {
    sum: f64,
    count: usize,
}

fn batch_merchants(anchors: &[&PairSample]) -> (Vec<usize>, Vec<(Tensor, Tensor)>) {
    let cats = anchors.iter().map(|p| p.t_category).collect();
    let feats = anchors.iter().map(|p| (p.t.clone(), p.d.clone())).collect();
    (cats, feats)
}

fn mined_batch_loss(
    params: &ParamSet,
    cfg: &ModelConfig,
    anchors: &[&PairSample],
    margin: f64,
) -> Result<(BatchLoss, Vec<(usize, usize)>, Vec<f64>)> {
    let (cats, feats) = batch_merchants(anchors);
    let refs: Vec<(&Tensor, &Tensor)> = feats.iter().map(|(t, d)| (t, d)).collect();
    let scorer = BatchScorer::new(params, cfg, &refs)?;
    let scores = scorer.matrix()?;
    let mined = mine_hardest_negatives(&cats, &scores)?;
    let n = anchors.len();
    let mut sum = 0.0;
    for &(i, j) in &mined.triplets {
        sum += triplet_loss(scores[i * n + i], scores[i * n + j], margin);
    }
    Ok((BatchLoss { sum, count: mined.triplets.len() }, mined.triplets, scores))
}

/// Triplet training over the positive pairs: per epoch, shuffle, batch,
/// score all in-batch cross pairs, mine the hardest negatives and take one
/// Adam step per batch at the epoch's margin. Returns the loss trace.
pub fn train(
    params: &mut ParamSet,
    cfg: &ModelConfig,
    train_pairs: &[PairSample],
    val_pairs: &[PairSample],
    hyper: &TrainHyper,
) -> Result<Vec<EpochTrace>> {
    hyper.schedule.validate()?;
    if hyper.batch_size < 2 {
        return Err(Error::Parameter("batch_size must be >= 2".to_string()));
    }
    let anchors: Vec<&PairSample> = train_pairs.iter().filter(|p| p.positive).collect();
    if anchors.is_empty() {
        return Err(Error::Data("training set has no positive pairs".to_string()));
    }
    let val_anchors: Vec<&PairSample> = val_pairs.iter().filter(|p| p.positive).collect();

    let mut rng = crate::tensor::seeded_rng(hyper.seed);
    let mut state = AdamState::new();
    let mut trace = Vec::with_capacity(hyper.epochs);

    for epoch in 0..hyper.epochs {
        let margin = margin_at(epoch, &hyper.schedule);
        let mut order: Vec<usize> = (0..anchors.len()).collect();
        order.shuffle(&mut rng);

        let mut epoch_sum = 0.0;
        let mut epoch_count = 0usize;
        for (batch_idx, chunk) in order.chunks(hyper.batch_size).enumerate() {
            let batch: Vec<&PairSample> = chunk.iter().map(|&i| anchors[i]).collect();
            let (loss, triplets, _) =
                mined_batch_loss(params, cfg, &batch, margin).map_err(|e| {
                    Error::Numeric(format!("epoch {epoch} batch {batch_idx}: {e}"))
                })?;
            if !loss.sum.is_finite() {
                return Err(Error::Numeric(format!(
                    "non-finite loss at epoch {epoch} batch {batch_idx}"
                )));
            }
            epoch_sum += loss.sum;
            epoch_count += loss.count;
            if triplets.is_empty() {
                continue;
            }

            let mut g = Graph::new();
            register_params(&mut g, params)?;
            let mut terms = Vec::with_capacity(triplets.len());
            for &(i, j) in &triplets {
                let t = g.constant(batch[i].t.clone())?;
                let d_pos = g.constant(batch[i].d.clone())?;
                let d_neg = g.constant(batch[j].d.clone())?;
                let s_pos = score_pair_graph(&mut g, cfg, t, d_pos)?;
                let t2 = g.constant(batch[i].t.clone())?;
                let s_neg = score_pair_graph(&mut g, cfg, t2, d_neg)?;
                let diff = g.sub(s_neg, s_pos)?;
                let shifted = g.add_const(diff, margin)?;
                terms.push(g.hinge(shifted)?);
            }
            let loss_node = g.mean_scalars(terms)?;
            let grads = g.backward(loss_node)?;
            adam_step(params, &grads, &mut state, &hyper.adam)?;
        }

        let train_loss = if epoch_count > 0 { epoch_sum / epoch_count as f64 } else { 0.0 };

        let val_loss = if val_anchors.is_empty() {
            None
        } else {
            let mut sum = 0.0;
            let mut count = 0usize;
            for chunk in val_anchors.chunks(hyper.batch_size) {
                let (loss, _, _) = mined_batch_loss(params, cfg, chunk, margin)?;
                sum += loss.sum;
                count += loss.count;
            }
            Some(if count > 0 { sum / count as f64 } else { 0.0 })
        };

        trace.push(EpochTrace { epoch, train_loss, val_loss, margin });
        log::info!(
            "epoch {epoch}: margin {margin:.3} train_loss {train_loss:.6} val_loss {val_loss:?}"
        );
    }
    Ok(trace)
}

/// F1-maximizing threshold over the midpoints of adjacent sorted scores;
/// ties resolved toward the lower threshold.
pub fn select_threshold(scored: &[(f64, bool)]) -> Result<f64> {
    let n_pos = scored.iter().filter(|(_, l)| *l).count();
    if n_pos == 0 || n_pos == scored.len() {
        return Err(Error::Data(
            "threshold selection needs both positive and negative labels".to_string(),
        ));
    }
    let mut sorted: Vec<(f64, bool)> = scored.to_vec();
    sorted.sort_by(|a, b| a.0.partial_cmp(&b.0).unwrap());
    // prefix_pos[i] = positives among the i lowest scores.
    let mut prefix_pos = vec![0usize; sorted.len() + 1];
    for (i, (_, label)) in sorted.iter().enumerate() {
        prefix_pos[i + 1] = prefix_pos[i] + usize::from(*label);
    }
    let total = sorted.len();
    let mut best: Option<(f64, f64)> = None; // (f1, threshold)
    for k in 0..total - 1 {
        let thr = (sorted[k].0 + sorted[k + 1].0) / 2.0;
        // First index predicted positive under `score >= thr`.
        let idx = sorted.partition_point(|(s, _)| *s < thr);
        let tp = n_pos - prefix_pos[idx];
        let fp = (total - idx) - tp;
        let fn_ = prefix_pos[idx];
        let p = if tp + fp > 0 { tp as f64 / (tp + fp) as f64 } else { 0.0 };
        let r = if tp + fn_ > 0 { tp as f64 / (tp + fn_) as f64 } else { 0.0 };
        let f1 = if p + r > 0.0 { 2.0 * p * r / (p + r) } else { 0.0 };
        if best.is_none_or(|(bf, _)| f1 > bf) {
            best = Some((f1, thr));
        }
    }
    Ok(best.expect("at least one candidate").1)
}

/// Score every pair, predict match iff score >= threshold, count and report.
pub fn evaluate(
    pairs: &[PairSample],
    params: &ParamSet,
    cfg: &ModelConfig,
    threshold: f64,
) -> Result<Metrics> {
    if pairs.is_empty() {
        return Err(Error::Data("empty evaluation set".to_string()));
    }
    let (mut tp, mut fp, mut fn_, mut tn) = (0usize, 0usize, 0usize, 0usize);
    for pair in pairs {
        let s = score_pair(&pair.t, &pair.d, params, cfg)?;
        match (s >= threshold, pair.positive) {
            (true, true) => tp += 1,
            (true, false) => fp += 1,
            (false, true) => fn_ += 1,
            (false, false) => tn += 1,
        }
    }
    let precision = if tp + fp > 0 { tp as f64 / (tp + fp) as f64 } else { 0.0 };
    let recall = if tp + fn_ > 0 { tp as f64 / (tp + fn_) as f64 } else { 0.0 };
    let f1 =
        if precision + recall > 0.0 { 2.0 * precision * recall / (precision + recall) } else { 0.0 };
    Ok(Metrics { precision, recall, f1, threshold, tp, fp, fn_, tn })
}

/// Scores of labeled pairs, for threshold selection.
pub fn score_pairs(
    pairs: &[PairSample],
    params: &ParamSet,
    cfg: &ModelConfig,
) -> Result<Vec<(f64, bool)>> {
    pairs
        .iter()
        .map(|p| Ok((score_pair(&p.t, &p.d, params, cfg)?, p.positive)))
        .collect()
}
