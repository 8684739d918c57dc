//! Reverse-mode gradients over the fixed primitive set the model is built
//! from: linear maps, softmax, element-wise add/sub/multiply/exp/tanh,
//! L2-normalize, dot product and the hinge. Operations are recorded into a
//! flat node list during the forward pass and replayed backwards.

use crate::error::{Error, Result};
use crate::tensor::{linear_forward, softmax, Tensor};
use std::collections::BTreeMap;

/// Named parameters, ordered (and therefore iterated) deterministically.
pub type ParamSet = BTreeMap<String, Tensor>;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct NodeId(usize);

#[derive(Debug, Clone)]
pub struct GradRecord {
    pub name: String,
    pub gradient: Tensor,
}

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    Constant,
    Add(NodeId, NodeId),
    Sub(NodeId, NodeId),
    Mul(NodeId, NodeId),
    Scale(NodeId, f64),
    AddConst(NodeId, #[allow(dead_code)] f64),
    Exp(NodeId),
    Tanh(NodeId),
    /// max(0, x) element-wise; subgradient 0 at the kink.
    Hinge(NodeId),
    Softmax(NodeId),
    L2Normalize(NodeId),
    Dot(NodeId, NodeId),
    /// Mean of scalar nodes (each shape [1]).
    MeanScalars(Vec<NodeId>),
    Linear { w: NodeId, b: NodeId, x: NodeId },
    /// Outer product of two vectors -> [m, n] matrix.
    Outer(NodeId, NodeId),
    /// Softmax applied to each row of a rank-2 tensor.
    RowSoftmax(NodeId),
    /// Matrix-vector product.
    MatVec(NodeId, NodeId),
}

struct Node {
    value: Tensor,
    op: Op,
}

#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
    params: BTreeMap<String, NodeId>,
}

impl Graph {
    pub fn new() -> Self {
        Graph::default()
    }

    fn push(&mut self, value: Tensor, op: Op) -> Result<NodeId> {
        if !value.is_finite() {
            return Err(Error::Numeric(format!("non-finite value produced by {op:?}")));
        }
        self.nodes.push(Node { value, op });
        Ok(NodeId(self.nodes.len() - 1))
    }

    pub fn value(&self, id: NodeId) -> &Tensor {
        &self.nodes[id.0].value
    }

    /// Register (or fetch) a named leaf parameter.
    pub fn param(&mut self, name: &str, value: &Tensor) -> Result<NodeId> {
        if let Some(&id) = self.params.get(name) {
            return Ok(id);
        }
        let id = self.push(value.clone(), Op::Leaf)?;
        self.params.insert(name.to_string(), id);
        Ok(id)
    }

    /// Node id of an already-registered parameter.
    pub fn param_node(&self, name: &str) -> Result<NodeId> {
        self.params.get(name).copied().ok_or_else(|| {
            Error::Capability(format!("gradient engine has no parameter named '{name}'"))
        })
    }

    pub fn constant(&mut self, value: Tensor) -> Result<NodeId> {
        self.push(value, Op::Constant)
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let v = self.value(a).add(self.value(b))?;
        self.push(v, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let v = self.value(a).sub(self.value(b))?;
        self.push(v, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let v = self.value(a).mul(self.value(b))?;
        self.push(v, Op::Mul(a, b))
    }

    pub fn scale(&mut self, a: NodeId, c: f64) -> Result<NodeId> {
        let v = self.value(a).scale(c);
        self.push(v, Op::Scale(a, c))
    }

    pub fn add_const(&mut self, a: NodeId, c: f64) -> Result<NodeId> {
        let v = self.value(a).map(|x| x + c);
        self.push(v, Op::AddConst(a, c))
    }

    pub fn exp(&mut self, a: NodeId) -> Result<NodeId> {
        let v = self.value(a).map(f64::exp);
        self.push(v, Op::Exp(a))
    }

    pub fn tanh(&mut self, a: NodeId) -> Result<NodeId> {
        let v = self.value(a).map(f64::tanh);
        self.push(v, Op::Tanh(a))
    }

    pub fn hinge(&mut self, a: NodeId) -> Result<NodeId> {
        let v = self.value(a).map(|x| x.max(0.0));
        self.push(v, Op::Hinge(a))
    }

    pub fn softmax(&mut self, a: NodeId) -> Result<NodeId> {
        let v = softmax(self.value(a))?;
        self.push(v, Op::Softmax(a))
    }

    pub fn l2_normalize(&mut self, a: NodeId) -> Result<NodeId> {
        let v = self.value(a).l2_normalized()?;
        self.push(v, Op::L2Normalize(a))
    }

    pub fn dot(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let v = Tensor::scalar(self.value(a).dot(self.value(b))?);
        self.push(v, Op::Dot(a, b))
    }

    pub fn mean_scalars(&mut self, ids: Vec<NodeId>) -> Result<NodeId> {
        if ids.is_empty() {
            return Err(Error::dimension("mean_scalars", "empty term list".to_string()));
        }
        let mut acc = 0.0;
        for &id in &ids {
            if self.value(id).len() != 1 {
                return Err(Error::dimension("mean_scalars", "non-scalar term".to_string()));
            }
            acc += self.value(id).item();
        }
        let v = Tensor::scalar(acc / ids.len() as f64);
        self.push(v, Op::MeanScalars(ids))
    }

    pub fn linear(&mut self, w: NodeId, b: NodeId, x: NodeId) -> Result<NodeId> {
        let v = linear_forward(self.value(w), self.value(b), self.value(x))?;
        self.push(v, Op::Linear { w, b, x })
    }

    pub fn outer(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (av, bv) = (self.value(a), self.value(b));
        if av.shape().len() != 1 || bv.shape().len() != 1 {
            return Err(Error::dimension("outer", "operands must be rank 1".to_string()));
        }
        let (m, n) = (av.len(), bv.len());
        let mut data = Vec::with_capacity(m * n);
        for i in 0..m {
            for j in 0..n {
                data.push(av.data()[i] * bv.data()[j]);
            }
        }
        let v = Tensor::new(vec![m, n], data)?;
        self.push(v, Op::Outer(a, b))
    }

    pub fn row_softmax(&mut self, a: NodeId) -> Result<NodeId> {
        let av = self.value(a);
        if av.shape().len() != 2 {
            return Err(Error::dimension("row_softmax", "operand must be rank 2".to_string()));
        }
        let (m, n) = (av.shape()[0], av.shape()[1]);
        let mut data = Vec::with_capacity(m * n);
        for i in 0..m {
            let row = Tensor::vector(av.data()[i * n..(i + 1) * n].to_vec());
            data.extend_from_slice(softmax(&row)?.data());
        }
        let v = Tensor::new(vec![m, n], data)?;
        self.push(v, Op::RowSoftmax(a))
    }

    pub fn matvec(&mut self, m: NodeId, x: NodeId) -> Result<NodeId> {
        let mv = self.value(m);
        if mv.shape().len() != 2 {
            return Err(Error::dimension("matvec", "matrix must be rank 2".to_string()));
        }
        let zeros = Tensor::zeros(vec![mv.shape()[0]]);
        let v = linear_forward(mv, &zeros, self.value(x))?;
        self.push(v, Op::MatVec(m, x))
    }

    /// Reverse pass from a scalar loss node; returns gradients for every
    /// registered parameter (zero tensors for unused ones).
    pub fn backward(&self, loss: NodeId) -> Result<BTreeMap<String, Tensor>> {
        if self.value(loss).len() != 1 {
            return Err(Error::dimension("backward", "loss must be scalar".to_string()));
        }
        let mut grads: Vec<Option<Tensor>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(Tensor::scalar(1.0));

        for idx in (0..=loss.0).rev() {
            let g = match grads[idx].clone() {
                Some(g) => g,
                None => continue,
            };
            let node = &self.nodes[idx];
            let acc = |grads: &mut Vec<Option<Tensor>>, id: NodeId, delta: Tensor| {
                match &mut grads[id.0] {
                    Some(t) => {
                        *t = t.add(&delta).expect("gradient shape invariant");
                    }
                    slot @ None => *slot = Some(delta),
                }
            };
            match &node.op {
                Op::Leaf | Op::Constant => {}
                Op::Add(a, b) => {
                    acc(&mut grads, *a, g.clone());
                    acc(&mut grads, *b, g);
                }
                Op::Sub(a, b) => {
                    acc(&mut grads, *a, g.clone());
                    acc(&mut grads, *b, g.scale(-1.0));
                }
                Op::Mul(a, b) => {
                    let da = g.mul(self.value(*b))?;
                    let db = g.mul(self.value(*a))?;
                    acc(&mut grads, *a, da);
                    acc(&mut grads, *b, db);
                }
                Op::Scale(a, c) => acc(&mut grads, *a, g.scale(*c)),
                Op::AddConst(a, _) => acc(&mut grads, *a, g),
                Op::Exp(a) => acc(&mut grads, *a, g.mul(&node.value)?),
                Op::Tanh(a) => {
                    let d = node.value.map(|y| 1.0 - y * y);
                    acc(&mut grads, *a, g.mul(&d)?);
                }
                Op::Hinge(a) => {
                    let xin = self.value(*a);
                    let d: Vec<f64> = xin
                        .data()
                        .iter()
                        .zip(g.data())
                        .map(|(&x, &gi)| if x > 0.0 { gi } else { 0.0 })
                        .collect();
                    acc(&mut grads, *a, Tensor::new(xin.shape().to_vec(), d)?);
                }
                Op::Softmax(a) => {
                    let y = &node.value;
                    let gy = g.dot(y)?;
                    let d = y.mul(&g.map(|gi| gi - gy))?;
                    acc(&mut grads, *a, d);
                }
                Op::L2Normalize(a) => {
                    let y = &node.value;
                    let norm = self.value(*a).norm();
                    let gy = g.dot(y)?;
                    let d = g.sub(&y.scale(gy))?.scale(1.0 / norm);
                    acc(&mut grads, *a, d);
                }
                Op::Dot(a, b) => {
                    let gs = g.item();
                    acc(&mut grads, *a, self.value(*b).scale(gs));
                    acc(&mut grads, *b, self.value(*a).scale(gs));
                }
                Op::MeanScalars(ids) => {
                    let gs = g.item() / ids.len() as f64;
                    for &id in ids {
                        acc(&mut grads, id, Tensor::scalar(gs));
                    }
                }
                Op::Linear { w, b, x } => {
                    let wv = self.value(*w);
                    let xv = self.value(*x);
                    let (m, n) = (wv.shape()[0], wv.shape()[1]);
                    let mut dw = vec![0.0; m * n];
                    for i in 0..m {
                        let gi = g.data()[i];
                        for j in 0..n {
                            dw[i * n + j] = gi * xv.data()[j];
                        }
                    }
                    let mut dx = vec![0.0; n];
                    for i in 0..m {
                        let gi = g.data()[i];
                        for j in 0..n {
                            dx[j] += wv.data()[i * n + j] * gi;
                        }
                    }
                    acc(&mut grads, *w, Tensor::new(vec![m, n], dw)?);
                    acc(&mut grads, *b, g.clone());
                    acc(&mut grads, *x, Tensor::vector(dx));
                }
                Op::Outer(a, b) => {
                    let av = self.value(*a);
                    let bv = self.value(*b);
                    let (m, n) = (av.len(), bv.len());
                    let mut da = vec![0.0; m];
                    let mut db = vec![0.0; n];
                    for i in 0..m {
                        for j in 0..n {
                            let gij = g.data()[i * n + j];
                            da[i] += gij * bv.data()[j];
                            db[j] += gij * av.data()[i];
                        }
                    }
                    acc(&mut grads, *a, Tensor::vector(da));
                    acc(&mut grads, *b, Tensor::vector(db));
                }
                Op::RowSoftmax(a) => {
                    let y = &node.value;
                    let (m, n) = (y.shape()[0], y.shape()[1]);
                    let mut d = vec![0.0; m * n];
                    for i in 0..m {
                        let yr = &y.data()[i * n..(i + 1) * n];
                        let gr = &g.data()[i * n..(i + 1) * n];
                        let gy: f64 = yr.iter().zip(gr).map(|(a, b)| a * b).sum();
                        for j in 0..n {
                            d[i * n + j] = yr[j] * (gr[j] - gy);
                        }
                    }
                    acc(&mut grads, *a, Tensor::new(vec![m, n], d)?);
                }
                Op::MatVec(mid, x) => {
                    let mv = self.value(*mid);
                    let xv = self.value(*x);
                    let (m, n) = (mv.shape()[0], mv.shape()[1]);
                    let mut dm = vec![0.0; m * n];
                    let mut dx = vec![0.0; n];
                    for i in 0..m {
                        let gi = g.data()[i];
                        for j in 0..n {
                            dm[i * n + j] = gi * xv.data()[j];
                            dx[j] += mv.data()[i * n + j] * gi;
                        }
                    }
                    acc(&mut grads, *mid, Tensor::new(vec![m, n], dm)?);
                    acc(&mut grads, *x, Tensor::vector(dx));
                }
            }
        }

        let mut out = BTreeMap::new();
        for (name, id) in &self.params {
            let g = grads[id.0]
                .take()
                .unwrap_or_else(|| Tensor::zeros(self.value(*id).shape().to_vec()));
            if !g.is_finite() {
                return Err(Error::Numeric(format!("non-finite gradient for parameter '{name}'")));
            }
            out.insert(name.clone(), g);
        }
        Ok(out)
    }
}

/// Scalar loss and exact reverse-mode gradients w.r.t. every parameter.
///
/// `build` constructs the loss from the registered parameters (fetch them
/// with [`Graph::param_node`]) and returns the loss node.
pub fn gradient_of<F>(params: &ParamSet, build: F) -> Result<(f64, Vec<GradRecord>)>
where
    F: Fn(&mut Graph) -> Result<NodeId>,
{
    let mut g = Graph::new();
    for (name, value) in params {
        g.param(name, value)?;
    }
    let loss = build(&mut g)?;
    if g.value(loss).len() != 1 {
        return Err(Error::dimension("gradient_of", "loss must be scalar".to_string()));
    }
    let loss_value = g.value(loss).item();
    let grads = g.backward(loss)?;
    let records = grads
        .into_iter()
        .map(|(name, gradient)| GradRecord { name, gradient })
        .collect();
    Ok((loss_value, records))
}

/// Loss value only (no tape kept beyond the call).
pub fn eval_loss<F>(params: &ParamSet, build: F) -> Result<f64>
where
    F: Fn(&mut Graph) -> Result<NodeId>,
{
    let mut g = Graph::new();
    for (name, value) in params {
        g.param(name, value)?;
    }
    let loss = build(&mut g)?;
    Ok(g.value(loss).item())
}

fn fd_max_error<F>(params: &ParamSet, build: &F, eps: f64, analytic: &[GradRecord]) -> Result<f64>
where
    F: Fn(&mut Graph) -> Result<NodeId>,
{
    let mut max_err: f64 = 0.0;
    for rec in analytic {
        let base = params
            .get(&rec.name)
            .ok_or_else(|| Error::Parameter(format!("unknown parameter '{}'", rec.name)))?
            .clone();
        for idx in 0..base.len() {
            let mut plus = params.clone();
            plus.get_mut(&rec.name).unwrap().data_mut()[idx] += eps;
            let mut minus = params.clone();
            minus.get_mut(&rec.name).unwrap().data_mut()[idx] -= eps;
            let numeric = (eval_loss(&plus, build)? - eval_loss(&minus, build)?) / (2.0 * eps);
            let a = rec.gradient.data()[idx];
            let err = if a.abs() < 1e-8 {
                (a - numeric).abs()
            } else {
                (a - numeric).abs() / numeric.abs().max(1e-12)
            };
            max_err = max_err.max(err);
        }
    }
    Ok(max_err)
}

/// Central finite differences against the analytic gradient; returns the
/// maximum relative error (absolute where the analytic entry is < 1e-8).
pub fn finite_difference_check<F>(params: &ParamSet, build: F, eps: f64) -> Result<f64>
where
    F: Fn(&mut Graph) -> Result<NodeId>,
{
    if eps <= 0.0 {
        return Err(Error::Parameter("finite_difference_check: eps must be > 0".to_string()));
    }
    let (_, analytic) = gradient_of(params, &build)?;
    fd_max_error(params, &build, eps, &analytic)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::{kaiming_init, seeded_rng};

    fn one_param(x: Vec<f64>) -> ParamSet {
        let mut p = ParamSet::new();
        p.insert("x".to_string(), Tensor::vector(x));
        p
    }

    #[test]
    fn grad_of_squared_norm() {
        let params = one_param(vec![1.0, 2.0]);
        let (loss, grads) = gradient_of(&params, |g| {
            let x = g.param_node("x")?;
            g.dot(x, x)
        })
        .unwrap();
        assert_eq!(loss, 5.0);
        assert_eq!(grads[0].gradient.data(), &[2.0, 4.0]);
    }

    #[test]
    fn grad_of_constant_is_zero() {
        let params = one_param(vec![1.0, 2.0]);
        let (_, grads) = gradient_of(&params, |g| g.constant(Tensor::scalar(7.0))).unwrap();
        assert_eq!(grads[0].gradient.data(), &[0.0, 0.0]);
    }

    #[test]
    fn unknown_param_is_capability_error() {
        let params = one_param(vec![1.0]);
        let err = gradient_of(&params, |g| g.param_node("missing")).unwrap_err();
        assert!(matches!(err, Error::Capability(_)));
    }

    #[test]
    fn fd_quadratic_is_exact_to_rounding() {
        let params = one_param(vec![0.3, -1.1, 2.0]);
        let err = finite_difference_check(
            &params,
            |g| {
                let x = g.param_node("x")?;
                g.dot(x, x)
            },
            1e-5,
        )
        .unwrap();
        assert!(err < 1e-8, "err = {err}");
    }

    #[test]
    fn fd_detects_doubled_gradient() {
        let params = one_param(vec![0.5, 1.5]);
        let build = |g: &mut Graph| {
            let x = g.param_node("x")?;
            g.dot(x, x)
        };
        let (_, mut analytic) = gradient_of(&params, build).unwrap();
        for rec in &mut analytic {
            rec.gradient = rec.gradient.scale(2.0);
        }
        let err = fd_max_error(&params, &build, 1e-5, &analytic).unwrap();
        assert!((err - 1.0).abs() < 1e-4, "err = {err}");
    }

    #[test]
    fn hinge_subgradient_zero_at_kink() {
        let params = one_param(vec![0.0, -1.0, 2.0]);
        let (_, grads) = gradient_of(&params, |g| {
            let x = g.param_node("x")?;
            let h = g.hinge(x)?;
            let ones = g.constant(Tensor::vector(vec![1.0, 1.0, 1.0]))?;
            g.dot(h, ones)
        })
        .unwrap();
        assert_eq!(grads[0].gradient.data(), &[0.0, 0.0, 1.0]);
    }

    // Every supported primitive, composed, against central differences.
    #[test]
    fn fd_full_primitive_composition() {
        let mut rng = seeded_rng(42);
        let mut params = ParamSet::new();
        params.insert("w".to_string(), kaiming_init(vec![4, 3], 3, &mut rng).unwrap());
        params.insert("b".to_string(), kaiming_init(vec![4], 3, &mut rng).unwrap());
        params.insert("x".to_string(), kaiming_init(vec![3], 3, &mut rng).unwrap());
        params.insert("y".to_string(), kaiming_init(vec![4], 3, &mut rng).unwrap());
        let err = finite_difference_check(
            &params,
            |g| {
                let w = g.param_node("w")?;
                let b = g.param_node("b")?;
                let x = g.param_node("x")?;
                let y = g.param_node("y")?;
                let lin = g.linear(w, b, x)?;
                let t = g.tanh(lin)?;
                let e = g.exp(t)?;
                let m = g.mul(e, y)?;
                let s = g.softmax(m)?;
                let n = g.l2_normalize(s)?;
                let sum = g.add(n, y)?;
                let diff = g.sub(sum, y)?;
                let sc = g.scale(diff, 1.7)?;
                let shifted = g.add_const(sc, -0.2)?;
                let h = g.hinge(shifted)?;
                let d = g.dot(h, n)?;
                g.mean_scalars(vec![d])
            },
            1e-5,
        )
        .unwrap();
        assert!(err < 1e-4, "err = {err}");
    }

    #[test]
    fn fd_outer_row_softmax_matvec() {
        let mut rng = seeded_rng(7);
        let mut params = ParamSet::new();
        params.insert("k".to_string(), kaiming_init(vec![4], 4, &mut rng).unwrap());
        params.insert("q".to_string(), kaiming_init(vec![4], 4, &mut rng).unwrap());
        params.insert("v".to_string(), kaiming_init(vec![4], 4, &mut rng).unwrap());
        let err = finite_difference_check(
            &params,
            |g| {
                let k = g.param_node("k")?;
                let q = g.param_node("q")?;
                let v = g.param_node("v")?;
                let m = g.outer(k, q)?;
                let a = g.row_softmax(m)?;
                let o = g.matvec(a, v)?;
                let n = g.l2_normalize(o)?;
                g.dot(n, v)
            },
            1e-5,
        )
        .unwrap();
        assert!(err < 1e-4, "err = {err}");
    }
}
