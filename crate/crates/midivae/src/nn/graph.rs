//! The computation graph: forward values plus recorded backward closures.
//!
//! Nodes are created in topological order, so the backward pass is a single
//! reverse sweep. Values are reference-counted matrices; backward closures
//! capture the value handles they need. Gradient work is skipped for nodes
//! that no trainable leaf feeds into.

use std::collections::HashMap;
use std::rc::Rc;

use ndarray::{s, Array2, Axis};

/// All activations and parameters are 2-D `f64` matrices; row vectors are
/// `1 x n`, scalars are `1 x 1`.
pub type Mat = Array2<f64>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct NodeId(pub usize);

type BackFn = Box<dyn Fn(&Mat, &mut dyn FnMut(usize, Mat))>;

/// Additive attention-mask value for blocked positions. Large enough that
/// `exp(x - max)` underflows to exactly 0.0 for any realistic score.
pub const MASK_NEG: f64 = -1.0e30;

#[derive(Default)]
pub struct Graph {
    vals: Vec<Rc<Mat>>,
    backward: Vec<Option<BackFn>>,
    needs_grad: Vec<bool>,
    /// For parameter leaves: index of the parameter in its `ParamSet`.
    param_of: Vec<Option<usize>>,
    param_cache: HashMap<usize, NodeId>,
}

impl Graph {
    pub fn new() -> Self {
        Graph::default()
    }

    pub fn len(&self) -> usize {
        self.vals.len()
    }

    pub fn is_empty(&self) -> bool {
        self.vals.is_empty()
    }

    pub fn value(&self, id: NodeId) -> &Mat {
        &self.vals[id.0]
    }

    pub fn value_rc(&self, id: NodeId) -> Rc<Mat> {
        self.vals[id.0].clone()
    }

    pub fn needs_grad(&self, id: NodeId) -> bool {
        self.needs_grad[id.0]
    }

    fn push(&mut self, val: Mat, needs: bool, back: Option<BackFn>) -> NodeId {
        self.vals.push(Rc::new(val));
        self.backward.push(if needs { back } else { None });
        self.needs_grad.push(needs);
        self.param_of.push(None);
        NodeId(self.vals.len() - 1)
    }

    /// A leaf with no gradient.
    pub fn constant(&mut self, val: Mat) -> NodeId {
        self.push(val, false, None)
    }

    /// A trainable leaf bound to parameter `param_index`; rebinding the same
    /// parameter returns the existing node so shared weights accumulate
    /// their gradient in one place.
    pub fn param(&mut self, param_index: usize, val: Rc<Mat>) -> NodeId {
        if let Some(&id) = self.param_cache.get(&param_index) {
            return id;
        }
        self.vals.push(val);
        self.backward.push(None);
        self.needs_grad.push(true);
        self.param_of.push(Some(param_index));
        let id = NodeId(self.vals.len() - 1);
        self.param_cache.insert(param_index, id);
        id
    }

    /// Reverse sweep from `loss` (a `1 x 1` node). Returns, for each
    /// parameter leaf touched, `(param_index, gradient)`.
    pub fn backward(&self, loss: NodeId) -> Vec<(usize, Mat)> {
        assert_eq!(self.vals[loss.0].shape(), &[1, 1], "loss must be scalar");
        let mut grads: Vec<Option<Mat>> = vec![None; self.vals.len()];
        grads[loss.0] = Some(Mat::ones((1, 1)));
        for id in (0..=loss.0).rev() {
            if grads[id].is_none() || !self.needs_grad[id] {
                continue;
            }
            if let Some(back) = &self.backward[id] {
                let g = grads[id].take().expect("checked above");
                back(&g, &mut |pid, pg| match &mut grads[pid] {
                    Some(acc) => *acc += &pg,
                    slot @ None => *slot = Some(pg),
                });
            }
        }
        let mut out = Vec::new();
        for (id, grad) in grads.into_iter().enumerate() {
            if let (Some(pidx), Some(g)) = (self.param_of[id], grad) {
                out.push((pidx, g));
            }
        }
        out
    }

    // ---- elementwise and affine ops ----

    pub fn add(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let (av, bv) = (self.value_rc(a), self.value_rc(b));
        assert_eq!(av.shape(), bv.shape(), "add shape mismatch");
        let out = &*av + &*bv;
        let (na, nb) = (self.needs_grad[a.0], self.needs_grad[b.0]);
        self.push(
            out,
            na || nb,
            Some(Box::new(move |g, acc| {
                if na {
                    acc(a.0, g.clone());
                }
                if nb {
                    acc(b.0, g.clone());
                }
            })),
        )
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let (av, bv) = (self.value_rc(a), self.value_rc(b));
        assert_eq!(av.shape(), bv.shape(), "sub shape mismatch");
        let out = &*av - &*bv;
        let (na, nb) = (self.needs_grad[a.0], self.needs_grad[b.0]);
        self.push(
            out,
            na || nb,
            Some(Box::new(move |g, acc| {
                if na {
                    acc(a.0, g.clone());
                }
                if nb {
                    acc(b.0, -g);
                }
            })),
        )
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let (av, bv) = (self.value_rc(a), self.value_rc(b));
        assert_eq!(av.shape(), bv.shape(), "mul shape mismatch");
        let out = &*av * &*bv;
        let (na, nb) = (self.needs_grad[a.0], self.needs_grad[b.0]);
        self.push(
            out,
            na || nb,
            Some(Box::new(move |g, acc| {
                if na {
                    acc(a.0, g * &*bv);
                }
                if nb {
                    acc(b.0, g * &*av);
                }
            })),
        )
    }

    /// `k * a + c` elementwise.
    pub fn affine(&mut self, a: NodeId, k: f64, c: f64) -> NodeId {
        let av = self.value_rc(a);
        let out = av.mapv(|x| k * x + c);
        let na = self.needs_grad[a.0];
        self.push(out, na, Some(Box::new(move |g, acc| acc(a.0, g * k))))
    }

    pub fn scale(&mut self, a: NodeId, k: f64) -> NodeId {
        self.affine(a, k, 0.0)
    }

    /// Broadcast-add a `1 x n` row to every row of `a`.
    pub fn add_row(&mut self, a: NodeId, row: NodeId) -> NodeId {
        let (av, rv) = (self.value_rc(a), self.value_rc(row));
        assert_eq!(rv.nrows(), 1, "add_row expects a 1 x n row");
        assert_eq!(av.ncols(), rv.ncols(), "add_row width mismatch");
        let out = &*av + &rv.row(0);
        let (na, nr) = (self.needs_grad[a.0], self.needs_grad[row.0]);
        self.push(
            out,
            na || nr,
            Some(Box::new(move |g, acc| {
                if na {
                    acc(a.0, g.clone());
                }
                if nr {
                    acc(row.0, g.sum_axis(Axis(0)).insert_axis(Axis(0)));
                }
            })),
        )
    }

    /// Multiply every entry by a `1 x 1` scalar node.
    pub fn mul_scalar_node(&mut self, a: NodeId, scalar: NodeId) -> NodeId {
        let (av, sv) = (self.value_rc(a), self.value_rc(scalar));
        assert_eq!(sv.shape(), &[1, 1], "mul_scalar_node expects 1 x 1");
        let s = sv[[0, 0]];
        let out = av.mapv(|x| x * s);
        let (na, ns) = (self.needs_grad[a.0], self.needs_grad[scalar.0]);
        self.push(
            out,
            na || ns,
            Some(Box::new(move |g, acc| {
                if na {
                    acc(a.0, g * s);
                }
                if ns {
                    let dot = (g * &*av).sum();
                    acc(scalar.0, Mat::from_elem((1, 1), dot));
                }
            })),
        )
    }

    pub fn exp(&mut self, a: NodeId) -> NodeId {
        let av = self.value_rc(a);
        let out = av.mapv(f64::exp);
        let na = self.needs_grad[a.0];
        let out_rc = Rc::new(out);
        let cap = out_rc.clone();
        let id = NodeId(self.vals.len());
        self.vals.push(out_rc);
        self.backward.push(if na {
            Some(Box::new(move |g, acc| acc(a.0, g * &*cap)))
        } else {
            None
        });
        self.needs_grad.push(na);
        self.param_of.push(None);
        id
    }

    pub fn sigmoid(&mut self, a: NodeId) -> NodeId {
        let av = self.value_rc(a);
        let out = av.mapv(|x| 1.0 / (1.0 + (-x).exp()));
        let na = self.needs_grad[a.0];
        let out_rc = Rc::new(out);
        let cap = out_rc.clone();
        let id = NodeId(self.vals.len());
        self.vals.push(out_rc);
        self.backward.push(if na {
            Some(Box::new(move |g, acc| acc(a.0, g * &cap.mapv(|y| y * (1.0 - y)))))
        } else {
            None
        });
        self.needs_grad.push(na);
        self.param_of.push(None);
        id
    }

    /// Gaussian error linear unit, tanh approximation.
    pub fn gelu(&mut self, a: NodeId) -> NodeId {
        const C: f64 = 0.7978845608028654; // sqrt(2/pi)
        const K: f64 = 0.044715;
        let av = self.value_rc(a);
        let out = av.mapv(|x| 0.5 * x * (1.0 + (C * (x + K * x * x * x)).tanh()));
        let na = self.needs_grad[a.0];
        self.push(
            out,
            na,
            Some(Box::new(move |g, acc| {
                let d = av.mapv(|x| {
                    let t = (C * (x + K * x * x * x)).tanh();
                    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * C * (1.0 + 3.0 * K * x * x)
                });
                acc(a.0, g * &d);
            })),
        )
    }

    // ---- matrix products ----

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let (av, bv) = (self.value_rc(a), self.value_rc(b));
        assert_eq!(av.ncols(), bv.nrows(), "matmul inner dimension mismatch");
        let out = av.dot(&*bv);
        let (na, nb) = (self.needs_grad[a.0], self.needs_grad[b.0]);
        self.push(
            out,
            na || nb,
            Some(Box::new(move |g, acc| {
                if na {
                    acc(a.0, g.dot(&bv.t()));
                }
                if nb {
                    acc(b.0, av.t().dot(g));
                }
            })),
        )
    }

    /// `a . b^T` without materializing the transpose.
    pub fn matmul_nt(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let (av, bv) = (self.value_rc(a), self.value_rc(b));
        assert_eq!(av.ncols(), bv.ncols(), "matmul_nt width mismatch");
        let out = av.dot(&bv.t());
        let (na, nb) = (self.needs_grad[a.0], self.needs_grad[b.0]);
        self.push(
            out,
            na || nb,
            Some(Box::new(move |g, acc| {
                if na {
                    acc(a.0, g.dot(&*bv));
                }
                if nb {
                    acc(b.0, g.t().dot(&*av));
                }
            })),
        )
    }

    // ---- shape ops ----

    pub fn transpose(&mut self, a: NodeId) -> NodeId {
        let av = self.value_rc(a);
        let out = av.t().to_owned();
        let na = self.needs_grad[a.0];
        self.push(out, na, Some(Box::new(move |g, acc| acc(a.0, g.t().to_owned()))))
    }

    pub fn slice_rows(&mut self, a: NodeId, start: usize, len: usize) -> NodeId {
        let av = self.value_rc(a);
        assert!(start + len <= av.nrows(), "slice_rows out of range");
        let out = av.slice(s![start..start + len, ..]).to_owned();
        let na = self.needs_grad[a.0];
        let (rows, cols) = (av.nrows(), av.ncols());
        self.push(
            out,
            na,
            Some(Box::new(move |g, acc| {
                let mut full = Mat::zeros((rows, cols));
                full.slice_mut(s![start..start + len, ..]).assign(g);
                acc(a.0, full);
            })),
        )
    }

    pub fn slice_cols(&mut self, a: NodeId, start: usize, len: usize) -> NodeId {
        let av = self.value_rc(a);
        assert!(start + len <= av.ncols(), "slice_cols out of range");
        let out = av.slice(s![.., start..start + len]).to_owned();
        let na = self.needs_grad[a.0];
        let (rows, cols) = (av.nrows(), av.ncols());
        self.push(
            out,
            na,
            Some(Box::new(move |g, acc| {
                let mut full = Mat::zeros((rows, cols));
                full.slice_mut(s![.., start..start + len]).assign(g);
                acc(a.0, full);
            })),
        )
    }

    pub fn vstack(&mut self, parts: &[NodeId]) -> NodeId {
        assert!(!parts.is_empty());
        let vals: Vec<Rc<Mat>> = parts.iter().map(|&p| self.value_rc(p)).collect();
        let cols = vals[0].ncols();
        let rows: usize = vals.iter().map(|v| v.nrows()).sum();
        let mut out = Mat::zeros((rows, cols));
        let mut r = 0;
        for v in &vals {
            out.slice_mut(s![r..r + v.nrows(), ..]).assign(&**v);
            r += v.nrows();
        }
        let ids: Vec<usize> = parts.iter().map(|p| p.0).collect();
        let needs: Vec<bool> = parts.iter().map(|p| self.needs_grad[p.0]).collect();
        let any = needs.iter().any(|&n| n);
        let heights: Vec<usize> = vals.iter().map(|v| v.nrows()).collect();
        self.push(
            out,
            any,
            Some(Box::new(move |g, acc| {
                let mut r = 0;
                for ((&id, &h), &n) in ids.iter().zip(&heights).zip(&needs) {
                    if n {
                        acc(id, g.slice(s![r..r + h, ..]).to_owned());
                    }
                    r += h;
                }
            })),
        )
    }

    pub fn hstack(&mut self, parts: &[NodeId]) -> NodeId {
        assert!(!parts.is_empty());
        let vals: Vec<Rc<Mat>> = parts.iter().map(|&p| self.value_rc(p)).collect();
        let rows = vals[0].nrows();
        let cols: usize = vals.iter().map(|v| v.ncols()).sum();
        let mut out = Mat::zeros((rows, cols));
        let mut c = 0;
        for v in &vals {
            out.slice_mut(s![.., c..c + v.ncols()]).assign(&**v);
            c += v.ncols();
        }
        let ids: Vec<usize> = parts.iter().map(|p| p.0).collect();
        let needs: Vec<bool> = parts.iter().map(|p| self.needs_grad[p.0]).collect();
        let any = needs.iter().any(|&n| n);
        let widths: Vec<usize> = vals.iter().map(|v| v.ncols()).collect();
        self.push(
            out,
            any,
            Some(Box::new(move |g, acc| {
                let mut c = 0;
                for ((&id, &w), &n) in ids.iter().zip(&widths).zip(&needs) {
                    if n {
                        acc(id, g.slice(s![.., c..c + w]).to_owned());
                    }
                    c += w;
                }
            })),
        )
    }

    /// Select rows of `src` by index (duplicates allowed). The gradient
    /// scatter-adds back into `src`, so this doubles as an embedding lookup
    /// and as the view scatter/gather.
    pub fn gather_rows(&mut self, src: NodeId, indices: Vec<usize>) -> NodeId {
        let sv = self.value_rc(src);
        let mut out = Mat::zeros((indices.len(), sv.ncols()));
        for (r, &i) in indices.iter().enumerate() {
            out.row_mut(r).assign(&sv.row(i));
        }
        let ns = self.needs_grad[src.0];
        let (rows, cols) = (sv.nrows(), sv.ncols());
        self.push(
            out,
            ns,
            Some(Box::new(move |g, acc| {
                let mut full = Mat::zeros((rows, cols));
                for (r, &i) in indices.iter().enumerate() {
                    let mut row = full.row_mut(i);
                    row += &g.row(r);
                }
                acc(src.0, full);
            })),
        )
    }

    // ---- reductions and normalization ----

    pub fn sum_all(&mut self, a: NodeId) -> NodeId {
        let av = self.value_rc(a);
        let out = Mat::from_elem((1, 1), av.sum());
        let na = self.needs_grad[a.0];
        let (rows, cols) = (av.nrows(), av.ncols());
        self.push(
            out,
            na,
            Some(Box::new(move |g, acc| {
                acc(a.0, Mat::from_elem((rows, cols), g[[0, 0]]));
            })),
        )
    }

    /// Row-wise softmax. Callers add any mask beforehand (see [`MASK_NEG`]).
    pub fn softmax_rows(&mut self, a: NodeId) -> NodeId {
        let av = self.value_rc(a);
        let mut out = Mat::zeros(av.raw_dim());
        for (mut o, row) in out.rows_mut().into_iter().zip(av.rows()) {
            let max = row.fold(f64::NEG_INFINITY, |m, &x| m.max(x));
            let mut sum = 0.0;
            for (dst, &x) in o.iter_mut().zip(row) {
                let e = (x - max).exp();
                *dst = e;
                sum += e;
            }
            o.mapv_inplace(|e| e / sum);
        }
        let na = self.needs_grad[a.0];
        let out_rc = Rc::new(out);
        let cap = out_rc.clone();
        let id = NodeId(self.vals.len());
        self.vals.push(out_rc);
        self.backward.push(if na {
            Some(Box::new(move |g, acc| {
                let mut dx = g * &*cap;
                for (mut d, srow) in dx.rows_mut().into_iter().zip(cap.rows()) {
                    let dot = d.sum();
                    for (di, &si) in d.iter_mut().zip(srow) {
                        *di -= dot * si;
                    }
                }
                acc(a.0, dx);
            }))
        } else {
            None
        });
        self.needs_grad.push(na);
        self.param_of.push(None);
        id
    }

    /// Row-wise layer normalization with affine parameters (`1 x n` each).
    pub fn layer_norm(&mut self, x: NodeId, gamma: NodeId, beta: NodeId, eps: f64) -> NodeId {
        let (xv, gv, bv) = (self.value_rc(x), self.value_rc(gamma), self.value_rc(beta));
        let n = xv.ncols() as f64;
        let mut xhat = Mat::zeros(xv.raw_dim());
        let mut inv_std = Vec::with_capacity(xv.nrows());
        for (mut h, row) in xhat.rows_mut().into_iter().zip(xv.rows()) {
            let mean = row.sum() / n;
            let var = row.fold(0.0, |acc, &v| acc + (v - mean) * (v - mean)) / n;
            let is = 1.0 / (var + eps).sqrt();
            inv_std.push(is);
            for (dst, &v) in h.iter_mut().zip(row) {
                *dst = (v - mean) * is;
            }
        }
        let out = &xhat * &gv.row(0) + &bv.row(0);
        let (nx, ng, nb) = (
            self.needs_grad[x.0],
            self.needs_grad[gamma.0],
            self.needs_grad[beta.0],
        );
        let xhat = Rc::new(xhat);
        self.push(
            out,
            nx || ng || nb,
            Some(Box::new(move |g, acc| {
                if nb {
                    acc(beta.0, g.sum_axis(Axis(0)).insert_axis(Axis(0)));
                }
                if ng {
                    acc(gamma.0, (g * &*xhat).sum_axis(Axis(0)).insert_axis(Axis(0)));
                }
                if nx {
                    let gy = g * &gv.row(0);
                    let mut dx = Mat::zeros(g.raw_dim());
                    for ((mut d, gyr), (hr, &is)) in dx
                        .rows_mut()
                        .into_iter()
                        .zip(gy.rows())
                        .zip(xhat.rows().into_iter().zip(&inv_std))
                    {
                        let m1 = gyr.sum() / n;
                        let m2 = gyr.iter().zip(hr).map(|(a, b)| a * b).sum::<f64>() / n;
                        for ((di, &gi), &hi) in d.iter_mut().zip(gyr).zip(hr) {
                            *di = (gi - m1 - hi * m2) * is;
                        }
                    }
                    acc(x.0, dx);
                }
            })),
        )
    }

    /// Negative log-likelihood of `targets` under row distributions `probs`,
    /// summed over rows where `mask` is true. Probabilities are floored at
    /// `1e-300` to keep the result finite; floored entries get zero gradient.
    pub fn nll_probs(&mut self, probs: NodeId, targets: Vec<usize>, mask: Vec<bool>) -> NodeId {
        const FLOOR: f64 = 1e-300;
        let pv = self.value_rc(probs);
        assert_eq!(pv.nrows(), targets.len(), "nll_probs target length mismatch");
        assert_eq!(targets.len(), mask.len(), "nll_probs mask length mismatch");
        let mut total = 0.0;
        for ((row, &t), &m) in pv.rows().into_iter().zip(&targets).zip(&mask) {
            if m {
                total -= row[t].max(FLOOR).ln();
            }
        }
        let np = self.needs_grad[probs.0];
        self.push(
            Mat::from_elem((1, 1), total),
            np,
            Some(Box::new(move |g, acc| {
                let scale = g[[0, 0]];
                let mut dp = Mat::zeros(pv.raw_dim());
                for ((i, &t), &m) in targets.iter().enumerate().zip(&mask) {
                    let p = pv[[i, t]];
                    if m && p > FLOOR {
                        dp[[i, t]] = -scale / p;
                    }
                }
                acc(probs.0, dp);
            })),
        )
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_mat(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Mat {
        Mat::from_shape_fn((rows, cols), |_| rng.random_range(-1.0..1.0))
    }

    /// Central finite differences of `f` at `x0` against the analytic
    /// gradient returned by `f`'s graph.
    fn check_grad(build: impl Fn(&mut Graph, NodeId) -> NodeId, x0: &Mat, tol: f64) {
        let mut g = Graph::new();
        let x = g.param(0, Rc::new(x0.clone()));
        let loss = build(&mut g, x);
        let grads = g.backward(loss);
        let analytic = grads
            .into_iter()
            .find(|(p, _)| *p == 0)
            .map(|(_, m)| m)
            .unwrap_or_else(|| Mat::zeros(x0.raw_dim()));

        let eval = |m: &Mat| -> f64 {
            let mut g = Graph::new();
            let x = g.param(0, Rc::new(m.clone()));
            let loss = build(&mut g, x);
            g.value(loss)[[0, 0]]
        };
        let h = 1e-6;
        for i in 0..x0.nrows() {
            for j in 0..x0.ncols() {
                let mut plus = x0.clone();
                plus[[i, j]] += h;
                let mut minus = x0.clone();
                minus[[i, j]] -= h;
                let fd = (eval(&plus) - eval(&minus)) / (2.0 * h);
                let a = analytic[[i, j]];
                let denom = a.abs().max(fd.abs()).max(1e-8);
                assert!(
                    ((a - fd) / denom).abs() < tol,
                    "grad mismatch at ({i},{j}): analytic {a}, fd {fd}"
                );
            }
        }
    }

    #[test]
    fn matmul_grads() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let x0 = random_mat(&mut rng, 3, 4);
        let w = random_mat(&mut rng, 4, 2);
        check_grad(
            |g, x| {
                let wc = g.constant(w.clone());
                let y = g.matmul(x, wc);
                let y2 = g.mul(y, y);
                g.sum_all(y2)
            },
            &x0,
            1e-6,
        );
    }

    #[test]
    fn matmul_nt_grads() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let x0 = random_mat(&mut rng, 3, 4);
        let w = random_mat(&mut rng, 5, 4);
        check_grad(
            |g, x| {
                let wc = g.constant(w.clone());
                let y = g.matmul_nt(x, wc);
                let y2 = g.mul(y, y);
                g.sum_all(y2)
            },
            &x0,
            1e-6,
        );
    }

    #[test]
    fn softmax_grads() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let x0 = random_mat(&mut rng, 4, 6);
        let w = random_mat(&mut rng, 4, 6);
        check_grad(
            |g, x| {
                let s = g.softmax_rows(x);
                let wc = g.constant(w.clone());
                let y = g.mul(s, wc);
                g.sum_all(y)
            },
            &x0,
            1e-5,
        );
    }

    #[test]
    fn layer_norm_grads() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let x0 = random_mat(&mut rng, 3, 8);
        let gamma = random_mat(&mut rng, 1, 8);
        let beta = random_mat(&mut rng, 1, 8);
        let w = random_mat(&mut rng, 3, 8);
        check_grad(
            |g, x| {
                let ga = g.constant(gamma.clone());
                let be = g.constant(beta.clone());
                let y = g.layer_norm(x, ga, be, 1e-5);
                let wc = g.constant(w.clone());
                let y = g.mul(y, wc);
                g.sum_all(y)
            },
            &x0,
            1e-5,
        );
    }

    #[test]
    fn layer_norm_param_grads() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let x = random_mat(&mut rng, 3, 8);
        let gb0 = random_mat(&mut rng, 1, 16); // gamma and beta packed
        check_grad(
            |g, gb| {
                let ga = g.slice_cols(gb, 0, 8);
                let be = g.slice_cols(gb, 8, 8);
                let xc = g.constant(x.clone());
                let y = g.layer_norm(xc, ga, be, 1e-5);
                let y2 = g.mul(y, y);
                g.sum_all(y2)
            },
            &gb0,
            1e-5,
        );
    }

    #[test]
    fn gelu_sigmoid_exp_grads() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let x0 = random_mat(&mut rng, 3, 5);
        check_grad(
            |g, x| {
                let a = g.gelu(x);
                let b = g.sigmoid(a);
                let c = g.exp(b);
                g.sum_all(c)
            },
            &x0,
            1e-5,
        );
    }

    #[test]
    fn gather_and_stack_grads() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let x0 = random_mat(&mut rng, 4, 3);
        check_grad(
            |g, x| {
                let picked = g.gather_rows(x, vec![0, 2, 2, 3, 1]);
                let top = g.slice_rows(picked, 0, 2);
                let bottom = g.slice_rows(picked, 2, 3);
                let both = g.vstack(&[top, bottom]);
                let wide = g.hstack(&[both, both]);
                let sq = g.mul(wide, wide);
                g.sum_all(sq)
            },
            &x0,
            1e-6,
        );
    }

    #[test]
    fn nll_probs_grads() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let x0 = random_mat(&mut rng, 4, 5);
        check_grad(
            |g, x| {
                let p = g.softmax_rows(x);
                g.nll_probs(p, vec![1, 0, 4, 2], vec![true, true, false, true])
            },
            &x0,
            1e-5,
        );
    }

    #[test]
    fn scalar_node_and_row_grads() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let x0 = random_mat(&mut rng, 1, 6);
        let base = random_mat(&mut rng, 3, 4);
        check_grad(
            |g, x| {
                let s = g.slice_cols(x, 2, 1);
                let bc = g.constant(base.clone());
                let scaled = g.mul_scalar_node(bc, s);
                let row = g.slice_cols(x, 0, 4);
                let shifted = g.add_row(scaled, row);
                let sq = g.mul(shifted, shifted);
                g.sum_all(sq)
            },
            &x0,
            1e-6,
        );
    }

    #[test]
    fn shared_param_accumulates_once() {
        let x0 = Mat::from_elem((2, 2), 1.5);
        let mut g = Graph::new();
        let x = g.param(7, Rc::new(x0.clone()));
        let x_again = g.param(7, Rc::new(x0));
        assert_eq!(x, x_again);
        let y = g.add(x, x_again); // 2x
        let s = g.sum_all(y);
        let grads = g.backward(s);
        assert_eq!(grads.len(), 1);
        assert_eq!(grads[0].0, 7);
        assert_eq!(grads[0].1, Mat::from_elem((2, 2), 2.0));
    }

    #[test]
    fn constants_get_no_gradient_work() {
        let mut g = Graph::new();
        let c = g.constant(Mat::ones((2, 2)));
        let d = g.constant(Mat::ones((2, 2)));
        let y = g.mul(c, d);
        assert!(!g.needs_grad(y));
        let s = g.sum_all(y);
        assert!(g.backward(s).is_empty());
    }

    #[test]
    fn masked_softmax_ignores_masked_columns() {
        let mut g = Graph::new();
        let scores = g.constant(Mat::from_shape_vec((1, 3), vec![1.0, 2.0, 3.0]).unwrap());
        let mask =
            g.constant(Mat::from_shape_vec((1, 3), vec![0.0, MASK_NEG, 0.0]).unwrap());
        let masked = g.add(scores, mask);
        let sm = g.softmax_rows(masked);
        let v = g.value(sm);
        assert_eq!(v[[0, 1]], 0.0);
        let z = (v[[0, 0]] + v[[0, 2]] - 1.0).abs();
        assert!(z < 1e-12);
    }
}
