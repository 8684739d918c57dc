//! Cross-modal and intra-modal attention blocks. A block projects its
//! source features into value/key vectors and its query source into a query
//! vector, combines key and query through a swappable package operation,
//! normalizes by sqrt(dim) and softmax, and gates the value vector.

use crate::error::{Error, Result};
use crate::graph::{Graph, NodeId};
use crate::tensor::{linear_forward, softmax, Tensor};
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum PackageOp {
    DotProduct,
    Gaussian,
    KernelGaussian,
}

/// How key and query are combined into scores. `Elementwise` reads the
/// key/query product coordinate-wise (weights are a dim-vector);
/// `Outer` forms the full dim x dim score matrix with row-wise softmax.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ScoreMode {
    Elementwise,
    Outer,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BlockParams {
    pub w_v: Tensor,
    pub b_v: Tensor,
    pub w_k: Tensor,
    pub b_k: Tensor,
    pub w_q: Tensor,
    pub b_q: Tensor,
}

impl BlockParams {
    /// Output dimension shared by the three projections.
    pub fn dim(&self) -> usize {
        self.w_v.shape()[0]
    }
}

#[derive(Debug, Clone)]
pub struct AttentionOutput {
    /// Attention weights: shape [dim] in elementwise mode, [dim, dim]
    /// (row-stochastic) in outer mode.
    pub weights: Tensor,
    pub output: Tensor,
}

/// Default feature map for the kernel-Gaussian package operation.
fn phi(x: f64) -> f64 {
    x.tanh()
}

/// Coordinate-wise package score of key and query.
pub fn package_score(k: &Tensor, q: &Tensor, op: PackageOp) -> Result<Tensor> {
    if k.shape() != q.shape() {
        return Err(Error::dimension(
            "package_score",
            format!("k {:?} vs q {:?}", k.shape(), q.shape()),
        ));
    }
    let s = match op {
        PackageOp::DotProduct => k.mul(q)?,
        PackageOp::Gaussian => k.mul(q)?.map(f64::exp),
        PackageOp::KernelGaussian => k.map(phi).mul(&q.map(phi))?.map(f64::exp),
    };
    Ok(s)
}

/// a = softmax(s / sqrt(dim)).
pub fn attention_weights(s: &Tensor) -> Result<Tensor> {
    let dim = s.len();
    if dim == 0 {
        return Err(Error::dimension("attention_weights", "empty scores".to_string()));
    }
    softmax(&s.scale(1.0 / (dim as f64).sqrt()))
}

fn block_core(
    source: &Tensor,
    query_src: &Tensor,
    params: &BlockParams,
    op: PackageOp,
    mode: ScoreMode,
) -> Result<AttentionOutput> {
    let v = linear_forward(&params.w_v, &params.b_v, source)?;
    let k = linear_forward(&params.w_k, &params.b_k, source)?;
    let q = linear_forward(&params.w_q, &params.b_q, query_src)?;
    match mode {
        ScoreMode::Elementwise => {
            let s = package_score(&k, &q, op)?;
            let a = attention_weights(&s)?;
            let o = a.mul(&v)?;
            Ok(AttentionOutput { weights: a, output: o })
        }
        ScoreMode::Outer => {
            let dim = v.len();
            let scale = 1.0 / (dim as f64).sqrt();
            let (kk, qq) = match op {
                PackageOp::KernelGaussian => (k.map(phi), q.map(phi)),
                _ => (k, q),
            };
            let mut rows = Vec::with_capacity(dim);
            let mut o = vec![0.0; dim];
            for i in 0..dim {
                let mut row: Vec<f64> = qq.data().iter().map(|&qj| kk.data()[i] * qj).collect();
                if matches!(op, PackageOp::Gaussian | PackageOp::KernelGaussian) {
                    for x in &mut row {
                        *x = x.exp();
                    }
                }
                let a_row = softmax(&Tensor::vector(row).scale(scale))?;
                o[i] = a_row.dot(&v)?;
                rows.push(a_row.data().to_vec());
            }
            Ok(AttentionOutput {
                weights: Tensor::new(vec![dim, dim], rows.concat())?,
                output: Tensor::vector(o),
            })
        }
    }
}

/// Cross-modal block: values and keys from `source_feat`, query from the
/// other modality's `query_feat`. The opposite direction is obtained by
/// swapping the two feature arguments.
pub fn cross_modal_block(
    source_feat: &Tensor,
    query_feat: &Tensor,
    params: &BlockParams,
    op: PackageOp,
    mode: ScoreMode,
) -> Result<AttentionOutput> {
    block_core(source_feat, query_feat, params, op, mode)
}

/// Intra-modal block: query computed from the same modality.
pub fn intra_modal_block(
    x_feat: &Tensor,
    params: &BlockParams,
    op: PackageOp,
    mode: ScoreMode,
) -> Result<AttentionOutput> {
    block_core(x_feat, x_feat, params, op, mode)
}

/// Node ids of one block's parameters inside a gradient graph.
#[derive(Debug, Clone, Copy)]
pub struct BlockNodes {
    pub w_v: NodeId,
    pub b_v: NodeId,
    pub w_k: NodeId,
    pub b_k: NodeId,
    pub w_q: NodeId,
    pub b_q: NodeId,
}

/// Graph (differentiable) version of `block_core`; returns the output node.
pub fn block_graph(
    g: &mut Graph,
    nodes: BlockNodes,
    source: NodeId,
    query_src: NodeId,
    op: PackageOp,
    mode: ScoreMode,
) -> Result<NodeId> {
    let v = g.linear(nodes.w_v, nodes.b_v, source)?;
    let k = g.linear(nodes.w_k, nodes.b_k, source)?;
    let q = g.linear(nodes.w_q, nodes.b_q, query_src)?;
    let dim = g.value(v).len();
    let scale = 1.0 / (dim as f64).sqrt();
    match mode {
        ScoreMode::Elementwise => {
            let s = match op {
                PackageOp::DotProduct => g.mul(k, q)?,
                PackageOp::Gaussian => {
                    let kq = g.mul(k, q)?;
                    g.exp(kq)?
                }
                PackageOp::KernelGaussian => {
                    let tk = g.tanh(k)?;
                    let tq = g.tanh(q)?;
                    let kq = g.mul(tk, tq)?;
                    g.exp(kq)?
                }
            };
            let scaled = g.scale(s, scale)?;
            let a = g.softmax(scaled)?;
            g.mul(a, v)
        }
        ScoreMode::Outer => {
            let (kk, qq) = match op {
                PackageOp::KernelGaussian => (g.tanh(k)?, g.tanh(q)?),
                _ => (k, q),
            };
            let m = g.outer(kk, qq)?;
            let m = match op {
                PackageOp::Gaussian | PackageOp::KernelGaussian => g.exp(m)?,
                PackageOp::DotProduct => m,
            };
            let scaled = g.scale(m, scale)?;
            let a = g.row_softmax(scaled)?;
            g.matvec(a, v)
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::{finite_difference_check, ParamSet};
    use crate::tensor::{kaiming_init, seeded_rng};

    fn random_block(dim: usize, in_dim: usize, q_in: usize, seed: u64) -> BlockParams {
        let mut rng = seeded_rng(seed);
        BlockParams {
            w_v: kaiming_init(vec![dim, in_dim], in_dim, &mut rng).unwrap(),
            b_v: kaiming_init(vec![dim], in_dim, &mut rng).unwrap(),
            w_k: kaiming_init(vec![dim, in_dim], in_dim, &mut rng).unwrap(),
            b_k: kaiming_init(vec![dim], in_dim, &mut rng).unwrap(),
            w_q: kaiming_init(vec![dim, q_in], q_in, &mut rng).unwrap(),
            b_q: kaiming_init(vec![dim], q_in, &mut rng).unwrap(),
        }
    }

    #[test]
    fn package_score_examples() {
        let ones = Tensor::vector(vec![1.0, 1.0]);
        let s = package_score(&ones, &ones, PackageOp::DotProduct).unwrap();
        assert_eq!(s.data(), &[1.0, 1.0]);

        let k = Tensor::vector(vec![1.0, 2.0]);
        let q = Tensor::vector(vec![3.0, 1.0]);
        let s = package_score(&k, &q, PackageOp::DotProduct).unwrap();
        assert_eq!(s.data(), &[3.0, 2.0]);

        let k = Tensor::vector(vec![0.0, 2.0f64.ln()]);
        let q = Tensor::vector(vec![1.0, 1.0]);
        let s = package_score(&k, &q, PackageOp::Gaussian).unwrap();
        assert!((s.data()[0] - 1.0).abs() < 1e-12);
        assert!((s.data()[1] - 2.0).abs() < 1e-12);
    }

    #[test]
    fn attention_weights_constant_is_uniform() {
        let a = attention_weights(&Tensor::vector(vec![2.0; 5])).unwrap();
        for &x in a.data() {
            assert!((x - 0.2).abs() < 1e-15);
        }
    }

    #[test]
    fn attention_weights_derived_value() {
        let a = attention_weights(&Tensor::vector(vec![2.0, 0.0, 0.0, 0.0])).unwrap();
        let expected = [0.475367, 0.174878, 0.174878, 0.174878];
        for (x, e) in a.data().iter().zip(&expected) {
            assert!((x - e).abs() < 1e-5, "{x} vs {e}");
        }
        assert!((a.data().iter().sum::<f64>() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn zero_value_source_gives_zero_output() {
        let mut params = random_block(4, 3, 5, 1);
        params.b_v = Tensor::zeros(vec![4]);
        params.w_v = Tensor::zeros(vec![4, 3]);
        let t = Tensor::zeros(vec![3]);
        let d = Tensor::vector(vec![1.0, -2.0, 0.5, 3.0, 1.0]);
        let out =
            cross_modal_block(&t, &d, &params, PackageOp::DotProduct, ScoreMode::Elementwise)
                .unwrap();
        assert!(out.output.data().iter().all(|&x| x == 0.0));
    }

    #[test]
    fn uniform_attention_gives_v_over_dim() {
        // Constant keys and queries across coordinates -> uniform weights.
        let dim = 4;
        let params = BlockParams {
            w_v: Tensor::matrix(&[vec![1.0], vec![2.0], vec![3.0], vec![4.0]]).unwrap(),
            b_v: Tensor::zeros(vec![dim]),
            w_k: Tensor::new(vec![dim, 1], vec![1.0; dim]).unwrap(),
            b_k: Tensor::zeros(vec![dim]),
            w_q: Tensor::new(vec![dim, 1], vec![1.0; dim]).unwrap(),
            b_q: Tensor::zeros(vec![dim]),
        };
        let x = Tensor::vector(vec![2.0]);
        let out = intra_modal_block(&x, &params, PackageOp::DotProduct, ScoreMode::Elementwise)
            .unwrap();
        let v = linear_forward(&params.w_v, &params.b_v, &x).unwrap();
        for (o, vi) in out.output.data().iter().zip(v.data()) {
            assert!((o - vi / dim as f64).abs() < 1e-12);
        }
    }

    #[test]
    fn intra_equals_cross_with_same_input() {
        let params = random_block(5, 5, 5, 3);
        let x = Tensor::vector(vec![0.3, -0.7, 1.2, 0.1, -0.4]);
        for op in [PackageOp::DotProduct, PackageOp::Gaussian, PackageOp::KernelGaussian] {
            let a = intra_modal_block(&x, &params, op, ScoreMode::Elementwise).unwrap();
            let b = cross_modal_block(&x, &x, &params, op, ScoreMode::Elementwise).unwrap();
            assert_eq!(a.output, b.output);
        }
    }

    // Independent straight-line transcription of the block equations,
    // without the block abstraction.
    #[test]
    fn matches_straight_line_oracle() {
        let dim = 5;
        let params = random_block(dim, 4, 6, 11);
        let mut rng = seeded_rng(99);
        let t = kaiming_init(vec![4], 4, &mut rng).unwrap();
        let d = kaiming_init(vec![6], 6, &mut rng).unwrap();

        let out =
            cross_modal_block(&t, &d, &params, PackageOp::DotProduct, ScoreMode::Elementwise)
                .unwrap();

        // Oracle: v = Wv t + bv; k = Wk t + bk; q = Wq d + bq;
        // a = softmax(k*q/sqrt(dim)); o = a*v -- all written out long-hand.
        let mut v = vec![0.0; dim];
        let mut k = vec![0.0; dim];
        let mut q = vec![0.0; dim];
        for i in 0..dim {
            for j in 0..4 {
                v[i] += params.w_v.data()[i * 4 + j] * t.data()[j];
                k[i] += params.w_k.data()[i * 4 + j] * t.data()[j];
            }
            for j in 0..6 {
                q[i] += params.w_q.data()[i * 6 + j] * d.data()[j];
            }
            v[i] += params.b_v.data()[i];
            k[i] += params.b_k.data()[i];
            q[i] += params.b_q.data()[i];
        }
        let scores: Vec<f64> = (0..dim).map(|i| k[i] * q[i] / (dim as f64).sqrt()).collect();
        let mx = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let exps: Vec<f64> = scores.iter().map(|s| (s - mx).exp()).collect();
        let z: f64 = exps.iter().sum();
        for i in 0..dim {
            let oi = exps[i] / z * v[i];
            assert!((out.output.data()[i] - oi).abs() < 1e-12);
            assert!((out.weights.data()[i] - exps[i] / z).abs() < 1e-12);
        }
    }

    #[test]
    fn gaussian_preserves_dot_product_argmax() {
        let mut rng = seeded_rng(5);
        for _ in 0..20 {
            let k = kaiming_init(vec![6], 6, &mut rng).unwrap();
            let q = kaiming_init(vec![6], 6, &mut rng).unwrap();
            let sd = package_score(&k, &q, PackageOp::DotProduct).unwrap();
            let sg = package_score(&k, &q, PackageOp::Gaussian).unwrap();
            let am = |t: &Tensor| {
                t.data()
                    .iter()
                    .enumerate()
                    .max_by(|a, b| a.1.partial_cmp(b.1).unwrap())
                    .unwrap()
                    .0
            };
            assert_eq!(
                am(&attention_weights(&sd).unwrap()),
                am(&attention_weights(&sg).unwrap())
            );
        }
    }

    #[test]
    fn positive_query_scaling_preserves_argmax_under_dot() {
        let k = Tensor::vector(vec![0.5, 1.5, 0.2, 0.9]);
        let q = Tensor::vector(vec![1.0, 0.8, 2.0, 0.1]);
        let am = |t: &Tensor| {
            t.data()
                .iter()
                .enumerate()
                .max_by(|a, b| a.1.partial_cmp(b.1).unwrap())
                .unwrap()
                .0
        };
        let base = package_score(&k, &q, PackageOp::DotProduct).unwrap();
        for alpha in [0.5, 2.0, 7.3] {
            let scaled = package_score(&k, &q.scale(alpha), PackageOp::DotProduct).unwrap();
            assert_eq!(
                am(&attention_weights(&base).unwrap()),
                am(&attention_weights(&scaled).unwrap())
            );
        }
    }

    #[test]
    fn weights_sum_to_one_for_every_op_and_mode() {
        let params = random_block(6, 6, 6, 21);
        let mut rng = seeded_rng(77);
        for seed in 0..10 {
            let _ = seed;
            let t = kaiming_init(vec![6], 6, &mut rng).unwrap();
            let d = kaiming_init(vec![6], 6, &mut rng).unwrap();
            for op in [PackageOp::DotProduct, PackageOp::Gaussian, PackageOp::KernelGaussian] {
                let out =
                    cross_modal_block(&t, &d, &params, op, ScoreMode::Elementwise).unwrap();
                let sum: f64 = out.weights.data().iter().sum();
                assert!((sum - 1.0).abs() < 1e-12);
                assert!(out.weights.data().iter().all(|&x| x > 0.0));

                let out = cross_modal_block(&t, &d, &params, op, ScoreMode::Outer).unwrap();
                for i in 0..6 {
                    let row: f64 = out.weights.data()[i * 6..(i + 1) * 6].iter().sum();
                    assert!((row - 1.0).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn block_gradients_pass_fd_check() {
        let dim = 4;
        let bp = random_block(dim, 3, 3, 31);
        let mut rng = seeded_rng(8);
        let t = kaiming_init(vec![3], 3, &mut rng).unwrap();
        let d = kaiming_init(vec![3], 3, &mut rng).unwrap();
        let mut params = ParamSet::new();
        params.insert("w_v".into(), bp.w_v.clone());
        params.insert("b_v".into(), bp.b_v.clone());
        params.insert("w_k".into(), bp.w_k.clone());
        params.insert("b_k".into(), bp.b_k.clone());
        params.insert("w_q".into(), bp.w_q.clone());
        params.insert("b_q".into(), bp.b_q.clone());
        for op in [PackageOp::DotProduct, PackageOp::Gaussian, PackageOp::KernelGaussian] {
            for mode in [ScoreMode::Elementwise, ScoreMode::Outer] {
                let err = finite_difference_check(
                    &params,
                    |g| {
                        let nodes = BlockNodes {
                            w_v: g.param_node("w_v")?,
                            b_v: g.param_node("b_v")?,
                            w_k: g.param_node("w_k")?,
                            b_k: g.param_node("b_k")?,
                            w_q: g.param_node("w_q")?,
                            b_q: g.param_node("b_q")?,
                        };
                        let tc = g.constant(t.clone())?;
                        let dc = g.constant(d.clone())?;
                        let o = block_graph(g, nodes, tc, dc, op, mode)?;
                        let n = g.l2_normalize(o)?;
                        let w = g.constant(Tensor::vector(vec![0.3; dim]))?;
                        g.dot(n, w)
                    },
                    1e-5,
                )
                .unwrap();
                assert!(err < 1e-4, "{op:?}/{mode:?}: err = {err}");
            }
        }
    }
}
