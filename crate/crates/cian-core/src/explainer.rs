//! Sparse feature-mask recovery: find a unit-L2, L1-budgeted mask â such
//! that the masked transaction's linear image approximates the realized
//! attention output of a chosen cross-modal block. Solved by ADMM with the
//! sphere constraint handled by renormalization, and the L1 budget met by
//! bisecting the penalty weight λ.

use crate::data::MerchantRecord;
use crate::error::{Error, Result};
use crate::graph::ParamSet;
use crate::model::{forward_trace, ModelConfig};
use crate::tensor::{diag_matmul, linear_forward, matmul, Tensor};
use nalgebra::{Cholesky, DMatrix, DVector};
use serde::{Deserialize, Serialize};

pub const DEFAULT_BUDGET: f64 = 10.0;
pub const DEFAULT_TOP_K: usize = 10;
pub const DEFAULT_RHO: f64 = 1.0;
pub const DEFAULT_TOL: f64 = 1e-6;
pub const DEFAULT_MAX_ITER: usize = 5000;

/// min ||A â - r||^2 + λ||â||_1 s.t. ||â||_2 = 1, with A = w_v · diag(t)
/// and r = o - b_v.
#[derive(Debug, Clone)]
pub struct ExplainProblem {
    pub w_v: Tensor,
    pub b_v: Tensor,
    pub t: Tensor,
    pub o: Tensor,
    pub budget: f64,
    pub top_k: usize,
}

impl ExplainProblem {
    pub fn new(w_v: Tensor, b_v: Tensor, t: Tensor, o: Tensor) -> Self {
        ExplainProblem { w_v, b_v, t, o, budget: DEFAULT_BUDGET, top_k: DEFAULT_TOP_K }
    }

    pub fn t_dim(&self) -> usize {
        self.t.len()
    }

    pub fn validate(&self) -> Result<()> {
        let (dim, t_dim) = (self.o.len(), self.t.len());
        if self.w_v.shape() != [dim, t_dim]
            || self.b_v.shape() != [dim]
            || self.t.shape().len() != 1
            || self.o.shape().len() != 1
        {
            return Err(Error::dimension(
                "explain_problem",
                format!(
                    "w_v {:?} incompatible with t {:?} and o {:?}",
                    self.w_v.shape(),
                    self.t.shape(),
                    self.o.shape()
                ),
            ));
        }
        if self.budget < 1.0 {
            return Err(Error::Parameter(format!(
                "budget {} infeasible: unit-L2 vectors have L1 >= 1",
                self.budget
            )));
        }
        if self.t.data().iter().all(|&x| x == 0.0) {
            return Err(Error::degenerate(
                "explain_problem",
                "all-zero transaction features".to_string(),
            ));
        }
        Ok(())
    }

    /// ||A â - r||^2 for a candidate mask.
    pub fn fit_residual(&self, mask: &Tensor) -> Result<f64> {
        let masked = self.t.mul(mask)?;
        let image = linear_forward(&self.w_v, &self.b_v, &masked)?;
        let diff = image.sub(&self.o)?;
        Ok(diff.dot(&diff)?)
    }

    /// Full penalized objective ||A â - r||^2 + λ||â||_1.
    pub fn objective(&self, mask: &Tensor, lambda: f64) -> Result<f64> {
        Ok(self.fit_residual(mask)? + lambda * l1_norm(mask))
    }
}

pub fn l1_norm(v: &Tensor) -> f64 {
    v.data().iter().map(|x| x.abs()).sum()
}

#[derive(Debug, Clone)]
pub struct AdmmSolution {
    pub mask: Tensor,
    /// Fit term ||A â - r||^2 at the returned mask.
    pub residual: f64,
    pub iterations: usize,
    pub converged: bool,
}

fn soft_threshold(x: f64, k: f64) -> f64 {
    if x > k {
        x - k
    } else if x < -k {
        x + k
    } else {
        0.0
    }
}

/// ADMM with splitting â = z: ρ-regularized least squares for â followed by
/// renormalization to the unit sphere, soft-thresholding at λ/ρ for z, and
/// the dual update u += â - z. Stops when max(primal, dual) < tol; on hitting
/// max_iter the last iterate is returned with `converged = false`.
pub fn admm_solve(
    prob: &ExplainProblem,
    lambda: f64,
    rho: f64,
    tol: f64,
    max_iter: usize,
) -> Result<AdmmSolution> {
    prob.validate()?;
    if lambda < 0.0 || rho <= 0.0 || tol <= 0.0 || max_iter == 0 {
        return Err(Error::Parameter(format!(
            "admm_solve needs lambda >= 0, rho > 0, tol > 0, max_iter >= 1 \
             (got {lambda}, {rho}, {tol}, {max_iter})"
        )));
    }
    let (dim, t_dim) = (prob.o.len(), prob.t.len());
    let mut a = DMatrix::zeros(dim, t_dim);
    for i in 0..dim {
        for j in 0..t_dim {
            a[(i, j)] = prob.w_v.data()[i * t_dim + j] * prob.t.data()[j];
        }
    }
    let r = DVector::from_iterator(dim, prob.o.data().iter().zip(prob.b_v.data()).map(|(o, b)| o - b));
    let atr = a.transpose() * &r;
    let mut m = a.transpose() * &a;
    for j in 0..t_dim {
        m[(j, j)] += rho / 2.0;
    }
    let chol = Cholesky::new(m)
        .ok_or_else(|| Error::Numeric("ADMM normal matrix is not positive definite".to_string()))?;

    let t_norm = prob.t.norm();
    let init = DVector::from_iterator(t_dim, prob.t.data().iter().map(|x| x / t_norm));
    let mut a_hat = init.clone();
    let mut z = init;
    let mut u = DVector::zeros(t_dim);

    let mut iterations = 0;
    let mut converged = false;
    for it in 1..=max_iter {
        iterations = it;
        let rhs = &atr + (&z - &u) * (rho / 2.0);
        a_hat = chol.solve(&rhs);
        let norm = a_hat.norm();
        if !norm.is_finite() || norm < 1e-300 {
            return Err(Error::degenerate("admm_solve", "â-update collapsed to zero".to_string()));
        }
        a_hat /= norm;
        let z_prev = z.clone();
        z = (&a_hat + &u).map(|x| soft_threshold(x, lambda / rho));
        u += &a_hat - &z;
        let primal = (&a_hat - &z).norm();
        let dual = rho * (&z - &z_prev).norm();
        if primal.max(dual) < tol {
            converged = true;
            break;
        }
    }
    if !converged {
        log::warn!("admm_solve hit max_iter = {max_iter} (lambda = {lambda})");
    }
    // Report the sparse iterate z (renormalized); it equals â at convergence
    // and stays sparse when the splitting has not fully closed. If the
    // threshold wiped z out entirely (λ effectively infinite), the limit
    // concentrates on the strongest coordinate of â.
    let z_norm = z.norm();
    let mask = if z_norm > 1e-300 {
        z / z_norm
    } else {
        let j = a_hat.iter().enumerate().max_by(|a, b| a.1.abs().total_cmp(&b.1.abs())).unwrap().0;
        let mut basis = DVector::zeros(t_dim);
        basis[j] = a_hat[j].signum();
        basis
    };
    let mask = Tensor::vector(mask.iter().copied().collect());
    let residual = prob.fit_residual(&mask)?;
    Ok(AdmmSolution { mask, residual, iterations, converged })
}

#[derive(Debug, Clone)]
pub struct BisectOutcome {
    pub lambda: f64,
    pub solution: AdmmSolution,
    /// (λ, ||â(λ)||_1) for every solve performed, in solve order.
    pub trace: Vec<(f64, f64)>,
}

/// Smallest λ whose mask meets the L1 budget: λ = 0 if already feasible,
/// otherwise double λ until feasible and bisect until ||â||_1 lands in
/// [B - 0.05, B] or the λ-interval is below 1e-6.
pub fn bisect_lambda(prob: &ExplainProblem) -> Result<BisectOutcome> {
    prob.validate()?;
    let budget = prob.budget;
    let mut trace = Vec::new();
    let solve = |lambda: f64, trace: &mut Vec<(f64, f64)>| -> Result<(AdmmSolution, f64)> {
        let sol = admm_solve(prob, lambda, DEFAULT_RHO, DEFAULT_TOL, DEFAULT_MAX_ITER)?;
        let l1 = l1_norm(&sol.mask);
        trace.push((lambda, l1));
        Ok((sol, l1))
    };

    let (sol0, l1_0) = solve(0.0, &mut trace)?;
    if l1_0 <= budget {
        return Ok(BisectOutcome { lambda: 0.0, solution: sol0, trace });
    }

    let mut hi = 1.0;
    let (mut best, mut hi_l1) = solve(hi, &mut trace)?;
    let mut doublings = 0;
    while hi_l1 > budget {
        doublings += 1;
        if doublings > 60 {
            return Err(Error::Numeric(
                "bisect_lambda: no feasible λ found after 60 doublings".to_string(),
            ));
        }
        hi *= 2.0;
        let (sol, l1) = solve(hi, &mut trace)?;
        best = sol;
        hi_l1 = l1;
    }

    let mut lo = hi / 2.0;
    if hi <= 1.0 {
        lo = 0.0;
    }
    let mut lambda = hi;
    while !(budget - 0.05..=budget).contains(&hi_l1) && hi - lo >= 1e-6 {
        let mid = (lo + hi) / 2.0;
        let (sol, l1) = solve(mid, &mut trace)?;
        if l1 <= budget {
            hi = mid;
            hi_l1 = l1;
            best = sol;
            lambda = mid;
        } else {
            lo = mid;
        }
    }
    Ok(BisectOutcome { lambda, solution: best, trace })
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TopFeature {
    pub index: usize,
    pub value: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Explanation {
    pub merchant_id: String,
    pub category: usize,
    pub lambda: f64,
    /// ||A â - r||^2 at the returned mask.
    pub residual: f64,
    pub iterations: usize,
    pub converged: bool,
    pub mask: Vec<f64>,
    /// top_k coordinates by |â|, descending.
    pub top_features: Vec<TopFeature>,
}

/// Apply realized attention weights (a diagonal reweighting in elementwise
/// mode, a row-stochastic matrix in outer mode) to a linear map.
fn attend_matrix(weights: &Tensor, m: &Tensor) -> Result<Tensor> {
    match weights.shape().len() {
        1 => diag_matmul(weights, m),
        _ => matmul(weights, m),
    }
}

fn attend_vector(weights: &Tensor, v: &Tensor) -> Result<Tensor> {
    match weights.shape().len() {
        1 => weights.mul(v),
        _ => linear_forward(weights, &Tensor::zeros(vec![v.len()]), v),
    }
}

/// Exact linearization of the transaction branch up to the value projection
/// of cross block `block`, with every preceding attention pattern frozen at
/// its realized value for this pair: returns (w, b, o) with w·t + b equal to
/// that block's value vector and o its realized output a ⊙ v.
pub fn effective_problem(
    t: &Tensor,
    d: &Tensor,
    params: &ParamSet,
    cfg: &ModelConfig,
    block: usize,
) -> Result<ExplainProblem> {
    if !cfg.cross_on() || block >= cfg.cross_blocks {
        return Err(Error::Capability(format!(
            "variant {:?} has no cross-modal block {block}",
            cfg.variant
        )));
    }
    let trace = forward_trace(t, d, params, cfg)?;
    let get = |name: &str| -> Result<&Tensor> {
        params.get(name).ok_or_else(|| Error::Parameter(format!("missing parameter '{name}'")))
    };

    let mut w = get("t.proj.w")?.clone();
    let mut b = get("t.proj.b")?.clone();
    let fold = |w_v: &Tensor, b_v: &Tensor, weights: &Tensor, w: &mut Tensor, b: &mut Tensor| -> Result<()> {
        let pre_w = matmul(w_v, w)?;
        let pre_b = linear_forward(w_v, b_v, b)?;
        *w = attend_matrix(weights, &pre_w)?;
        *b = attend_vector(weights, &pre_b)?;
        Ok(())
    };
    if cfg.intra_on() {
        for i in 0..cfg.intra_blocks {
            fold(
                get(&format!("t.intra{i}.w_v"))?,
                get(&format!("t.intra{i}.b_v"))?,
                &trace.t_branch.intra[i].weights,
                &mut w,
                &mut b,
            )?;
        }
    }
    for i in 0..block {
        fold(
            get(&format!("t.cross{i}.w_v"))?,
            get(&format!("t.cross{i}.b_v"))?,
            &trace.t_branch.cross[i].weights,
            &mut w,
            &mut b,
        )?;
    }
    let w_v = matmul(get(&format!("t.cross{block}.w_v"))?, &w)?;
    let b_v = linear_forward(
        get(&format!("t.cross{block}.w_v"))?,
        get(&format!("t.cross{block}.b_v"))?,
        &b,
    )?;
    Ok(ExplainProblem::new(w_v, b_v, t.clone(), trace.t_branch.cross[block].output.clone()))
}

pub fn top_features(mask: &Tensor, top_k: usize) -> Vec<TopFeature> {
    let mut idx: Vec<usize> = (0..mask.len()).collect();
    idx.sort_by(|&a, &b| {
        mask.data()[b]
            .abs()
            .partial_cmp(&mask.data()[a].abs())
            .unwrap()
            .then(a.cmp(&b))
    });
    idx.truncate(top_k.min(mask.len()));
    idx.into_iter().map(|i| TopFeature { index: i, value: mask.data()[i] }).collect()
}

/// Explain one merchant's transaction features against cross block `block`
/// of the transaction branch.
pub fn explain_merchant(
    rec: &MerchantRecord,
    params: &ParamSet,
    cfg: &ModelConfig,
    block: usize,
    budget: f64,
    top_k: usize,
) -> Result<Explanation> {
    let mut prob = effective_problem(&rec.t, &rec.d, params, cfg, block)?;
    prob.budget = budget;
    prob.top_k = top_k;
    let out = bisect_lambda(&prob)?;
    Ok(Explanation {
        merchant_id: rec.id.clone(),
        category: rec.category,
        lambda: out.lambda,
        residual: out.solution.residual,
        iterations: out.solution.iterations,
        converged: out.solution.converged,
        top_features: top_features(&out.solution.mask, top_k),
        mask: out.solution.mask.data().to_vec(),
    })
}

#[derive(Debug, Clone, Serialize)]
pub struct CategoryAttention {
    pub categories: Vec<usize>,
    pub features: Vec<usize>,
    /// rows[c][j] = mean over category c of mask[features[j]].
    pub rows: Vec<Vec<f64>>,
}

/// Per-category mean mask values on a feature subset; categories with no
/// explanations are omitted with a warning.
pub fn aggregate_category_attention(
    explanations: &[Explanation],
    categories: &[usize],
    features: &[usize],
) -> Result<CategoryAttention> {
    if features.is_empty() {
        return Err(Error::Parameter("empty feature subset".to_string()));
    }
    let mut kept = Vec::new();
    let mut rows = Vec::new();
    for &c in categories {
        let members: Vec<&Explanation> =
            explanations.iter().filter(|e| e.category == c).collect();
        if members.is_empty() {
            log::warn!("category {c}: no explanations, row omitted");
            continue;
        }
        let row = features
            .iter()
            .map(|&j| members.iter().map(|e| e.mask[j]).sum::<f64>() / members.len() as f64)
            .collect();
        kept.push(c);
        rows.push(row);
    }
    Ok(CategoryAttention { categories: kept, features: features.to_vec(), rows })
}
