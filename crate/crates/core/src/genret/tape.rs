//! Reverse-mode autodiff over a linear tape of matrix ops.
//!
//! Parameters live outside the tape and are referenced by index, so building
//! a tape per sample does not copy weights. `backward` adds parameter
//! gradients into a caller-owned buffer.

use super::tensor::{Mat, Scalar};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

pub(super) const LN_EPS: f64 = 1e-5;
pub(super) const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2 / pi)

#[derive(Debug)]
enum Op {
    Input,
    Param(usize),
    MatMul(Var, Var),
    MatMulBt(Var, Var),
    Add(Var, Var),
    AddRow(Var, Var),
    Scale(Var, f64),
    Gelu(Var),
    LayerNorm { x: Var, gamma: Var, beta: Var },
    CausalSoftmax(Var),
    Gather { table: Var, ids: Vec<usize> },
    ConcatRows(Vec<Var>),
    ConcatCols(Vec<Var>),
    SliceCols { x: Var, start: usize },
    SliceRows { x: Var, start: usize },
    MeanRows(Var),
    L2Normalize(Var),
    CrossEntropy { logits: Var, targets: Vec<usize> },
}

struct Node<T> {
    op: Op,
    value: Option<Mat<T>>,
    /// Per-op cache: normalized input for layernorm, softmax probs for cross-entropy.
    aux: Option<Mat<T>>,
    /// Per-row 1/std for layernorm, 1/norm for l2 normalize.
    aux_rows: Vec<T>,
}

pub struct Tape<'p, T: Scalar> {
    params: &'p [Mat<T>],
    nodes: Vec<Node<T>>,
}

impl<'p, T: Scalar> Tape<'p, T> {
    pub fn new(params: &'p [Mat<T>]) -> Self {
        Tape { params, nodes: Vec::with_capacity(256) }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Mat<T> {
        let n = &self.nodes[v.0];
        match n.op {
            Op::Param(p) => &self.params[p],
            _ => n.value.as_ref().expect("computed node"),
        }
    }

    fn push(&mut self, op: Op, value: Mat<T>) -> Var {
        self.push_aux(op, value, None, Vec::new())
    }

    fn push_aux(&mut self, op: Op, value: Mat<T>, aux: Option<Mat<T>>, aux_rows: Vec<T>) -> Var {
        self.nodes.push(Node { op, value: Some(value), aux, aux_rows });
        Var(self.nodes.len() - 1)
    }

    pub fn input(&mut self, m: Mat<T>) -> Var {
        self.push(Op::Input, m)
    }

    pub fn param(&mut self, id: usize) -> Var {
        self.nodes.push(Node { op: Op::Param(id), value: None, aux: None, aux_rows: Vec::new() });
        Var(self.nodes.len() - 1)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a).matmul(self.value(b));
        self.push(Op::MatMul(a, b), v)
    }

    /// a * b^T
    pub fn matmul_bt(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a).matmul_bt(self.value(b));
        self.push(Op::MatMulBt(a, b), v)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let mut v = self.value(a).clone();
        v.add_assign(self.value(b));
        self.push(Op::Add(a, b), v)
    }

    /// Broadcast a 1 x c row over every row of `a`.
    pub fn add_row(&mut self, a: Var, bias: Var) -> Var {
        let mut v = self.value(a).clone();
        let b = self.value(bias);
        assert_eq!((b.rows, b.cols), (1, v.cols), "bias shape");
        for r in 0..v.rows {
            for (x, &y) in v.row_mut(r).iter_mut().zip(&b.data) {
                *x += y;
            }
        }
        self.push(Op::AddRow(a, bias), v)
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Var {
        let k = T::c(s);
        let mut v = self.value(a).clone();
        v.data.iter_mut().for_each(|x| *x *= k);
        self.push(Op::Scale(a, s), v)
    }

    /// tanh approximation
    pub fn gelu(&mut self, a: Var) -> Var {
        let (half, c, k) = (T::c(0.5), T::c(GELU_C), T::c(0.044_715));
        let mut v = self.value(a).clone();
        v.data.iter_mut().for_each(|x| {
            let u = c * (*x + k * *x * *x * *x);
            *x = half * *x * (T::one() + u.tanh());
        });
        self.push(Op::Gelu(a), v)
    }

    pub fn layernorm(&mut self, x: Var, gamma: Var, beta: Var) -> Var {
        let xv = self.value(x);
        let (g, b) = (self.value(gamma), self.value(beta));
        let n = T::c(xv.cols as f64);
        let mut xhat = xv.clone();
        let mut rstds = Vec::with_capacity(xv.rows);
        for r in 0..xv.rows {
            let row = xhat.row_mut(r);
            let mean = row.iter().copied().sum::<T>() / n;
            let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / n;
            let rstd = T::one() / (var + T::c(LN_EPS)).sqrt();
            row.iter_mut().for_each(|v| *v = (*v - mean) * rstd);
            rstds.push(rstd);
        }
        let mut out = xhat.clone();
        for r in 0..out.rows {
            for ((o, &gg), &bb) in out.row_mut(r).iter_mut().zip(&g.data).zip(&b.data) {
                *o = *o * gg + bb;
            }
        }
        self.push_aux(Op::LayerNorm { x, gamma, beta }, out, Some(xhat), rstds)
    }

    /// Row-wise softmax with entries above the diagonal masked out.
    pub fn causal_softmax(&mut self, a: Var) -> Var {
        let mut v = self.value(a).clone();
        for r in 0..v.rows {
            let row = v.row_mut(r);
            let m = row[..=r].iter().copied().fold(T::neg_infinity(), T::max);
            let mut z = T::zero();
            for x in row[..=r].iter_mut() {
                *x = (*x - m).exp();
                z += *x;
            }
            row[..=r].iter_mut().for_each(|x| *x = *x / z);
            row[r + 1..].iter_mut().for_each(|x| *x = T::zero());
        }
        self.push(Op::CausalSoftmax(a), v)
    }

    pub fn gather(&mut self, table: Var, ids: &[usize]) -> Var {
        let t = self.value(table);
        let mut data = Vec::with_capacity(ids.len() * t.cols);
        for &i in ids {
            data.extend_from_slice(t.row(i));
        }
        let v = Mat::from_vec(ids.len(), t.cols, data);
        self.push(Op::Gather { table, ids: ids.to_vec() }, v)
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Var {
        let cols = self.value(parts[0]).cols;
        let mut data = Vec::new();
        let mut rows = 0;
        for &p in parts {
            let m = self.value(p);
            assert_eq!(m.cols, cols, "concat_rows widths");
            data.extend_from_slice(&m.data);
            rows += m.rows;
        }
        self.push(Op::ConcatRows(parts.to_vec()), Mat::from_vec(rows, cols, data))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Var {
        let rows = self.value(parts[0]).rows;
        let cols: usize = parts.iter().map(|&p| self.value(p).cols).sum();
        let mut out = Mat::zeros(rows, cols);
        for r in 0..rows {
            let mut c0 = 0;
            for &p in parts {
                let m = self.value(p);
                out.row_mut(r)[c0..c0 + m.cols].copy_from_slice(m.row(r));
                c0 += m.cols;
            }
        }
        self.push(Op::ConcatCols(parts.to_vec()), out)
    }

    pub fn slice_cols(&mut self, x: Var, start: usize, len: usize) -> Var {
        let m = self.value(x);
        let mut data = Vec::with_capacity(m.rows * len);
        for r in 0..m.rows {
            data.extend_from_slice(&m.row(r)[start..start + len]);
        }
        let v = Mat::from_vec(m.rows, len, data);
        self.push(Op::SliceCols { x, start }, v)
    }

    pub fn slice_rows(&mut self, x: Var, start: usize, len: usize) -> Var {
        let m = self.value(x);
        let v = Mat::from_vec(len, m.cols, m.data[start * m.cols..(start + len) * m.cols].to_vec());
        self.push(Op::SliceRows { x, start }, v)
    }

    pub fn mean_rows(&mut self, x: Var) -> Var {
        let m = self.value(x);
        let mut out = vec![T::zero(); m.cols];
        for r in 0..m.rows {
            for (o, &v) in out.iter_mut().zip(m.row(r)) {
                *o += v;
            }
        }
        let n = T::c(m.rows as f64);
        out.iter_mut().for_each(|o| *o = *o / n);
        self.push(Op::MeanRows(x), Mat::row_vec(out))
    }

    /// Each row scaled to unit L2 norm.
    pub fn l2_normalize(&mut self, x: Var) -> Var {
        let mut v = self.value(x).clone();
        let mut inv = Vec::with_capacity(v.rows);
        for r in 0..v.rows {
            let row = v.row_mut(r);
            let norm = row.iter().map(|&a| a * a).sum::<T>().sqrt();
            let k = if norm > T::zero() { T::one() / norm } else { T::zero() };
            row.iter_mut().for_each(|a| *a *= k);
            inv.push(k);
        }
        self.push_aux(Op::L2Normalize(x), v, None, inv)
    }

    /// Mean token negative log-likelihood; a 1 x 1 result.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[usize]) -> Var {
        let l = self.value(logits);
        assert_eq!(l.rows, targets.len(), "one target per row");
        let mut probs = l.clone();
        let mut total = 0.0;
        for (r, &t) in targets.iter().enumerate() {
            let row = probs.row_mut(r);
            let m = row.iter().copied().fold(T::neg_infinity(), T::max);
            let z: T = row.iter().map(|&x| (x - m).exp()).sum();
            total -= (row[t] - m - z.ln()).f64();
            row.iter_mut().for_each(|x| *x = (*x - m).exp() / z);
        }
        let v = Mat::row_vec(vec![T::c(total / targets.len() as f64)]);
        self.push_aux(Op::CrossEntropy { logits, targets: targets.to_vec() }, v, Some(probs), Vec::new())
    }

    /// Backpropagate `seed` (same shape as `root`) and add parameter
    /// gradients into `param_grads`.
    pub fn backward(&self, root: Var, seed: Mat<T>, param_grads: &mut [Mat<T>]) {
        let mut grads: Vec<Option<Mat<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        assert_eq!(seed.shape(), self.value(root).shape(), "seed shape");
        grads[root.0] = Some(seed);
        for i in (0..=root.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            match &node.op {
                Op::Input => {}
                Op::Param(p) => param_grads[*p].add_assign(&g),
                Op::MatMul(a, b) => {
                    acc(&mut grads, *a, g.matmul_bt(self.value(*b)));
                    acc(&mut grads, *b, self.value(*a).matmul_at(&g));
                }
                Op::MatMulBt(a, b) => {
                    acc(&mut grads, *a, g.matmul(self.value(*b)));
                    acc(&mut grads, *b, g.matmul_at(self.value(*a)));
                }
                Op::Add(a, b) => {
                    acc(&mut grads, *b, g.clone());
                    acc(&mut grads, *a, g);
                }
                Op::AddRow(a, bias) => {
                    let mut gb = Mat::zeros(1, g.cols);
                    for r in 0..g.rows {
                        for (o, &v) in gb.data.iter_mut().zip(g.row(r)) {
                            *o += v;
                        }
                    }
                    acc(&mut grads, *bias, gb);
                    acc(&mut grads, *a, g);
                }
                Op::Scale(a, s) => {
                    let k = T::c(*s);
                    let mut g = g;
                    g.data.iter_mut().for_each(|x| *x *= k);
                    acc(&mut grads, *a, g);
                }
                Op::Gelu(a) => {
                    let x = self.value(*a);
                    let (half, c, k) = (T::c(0.5), T::c(GELU_C), T::c(0.044_715));
                    let mut g = g;
                    for (gv, &xv) in g.data.iter_mut().zip(&x.data) {
                        let t = (c * (xv + k * xv * xv * xv)).tanh();
                        let d = half * (T::one() + t) + half * xv * (T::one() - t * t) * c * (T::one() + T::c(3.0) * k * xv * xv);
                        *gv *= d;
                    }
                    acc(&mut grads, *a, g);
                }
                Op::LayerNorm { x, gamma, beta } => {
                    let xhat = node.aux.as_ref().expect("layernorm cache");
                    let gam = self.value(*gamma);
                    let n = T::c(g.cols as f64);
                    let mut dg = Mat::zeros(1, g.cols);
                    let mut db = Mat::zeros(1, g.cols);
                    let mut dx = Mat::zeros(g.rows, g.cols);
                    for r in 0..g.rows {
                        let (gr, xr) = (g.row(r), xhat.row(r));
                        let mut dxhat = vec![T::zero(); g.cols];
                        for c in 0..g.cols {
                            dg.data[c] += gr[c] * xr[c];
                            db.data[c] += gr[c];
                            dxhat[c] = gr[c] * gam.data[c];
                        }
                        let m1 = dxhat.iter().copied().sum::<T>() / n;
                        let m2 = dxhat.iter().zip(xr).map(|(&a, &b)| a * b).sum::<T>() / n;
                        let rstd = node.aux_rows[r];
                        for (c, o) in dx.row_mut(r).iter_mut().enumerate() {
                            *o = rstd * (dxhat[c] - m1 - xr[c] * m2);
                        }
                    }
                    acc(&mut grads, *gamma, dg);
                    acc(&mut grads, *beta, db);
                    acc(&mut grads, *x, dx);
                }
                Op::CausalSoftmax(a) => {
                    let p = node.value.as_ref().expect("softmax value");
                    let mut d = Mat::zeros(p.rows, p.cols);
                    for r in 0..p.rows {
                        let (pr, gr) = (p.row(r), g.row(r));
                        let dot: T = pr.iter().zip(gr).map(|(&a, &b)| a * b).sum();
                        for (c, o) in d.row_mut(r).iter_mut().enumerate() {
                            *o = pr[c] * (gr[c] - dot);
                        }
                    }
                    acc(&mut grads, *a, d);
                }
                Op::Gather { table, ids } => {
                    let t = self.value(*table);
                    let mut d = Mat::zeros(t.rows, t.cols);
                    for (r, &id) in ids.iter().enumerate() {
                        for (o, &v) in d.row_mut(id).iter_mut().zip(g.row(r)) {
                            *o += v;
                        }
                    }
                    acc(&mut grads, *table, d);
                }
                Op::ConcatRows(parts) => {
                    let mut r0 = 0;
                    for &p in parts {
                        let rows = self.value(p).rows;
                        let d = Mat::from_vec(rows, g.cols, g.data[r0 * g.cols..(r0 + rows) * g.cols].to_vec());
                        acc(&mut grads, p, d);
                        r0 += rows;
                    }
                }
                Op::ConcatCols(parts) => {
                    let mut c0 = 0;
                    for &p in parts {
                        let cols = self.value(p).cols;
                        let mut d = Mat::zeros(g.rows, cols);
                        for r in 0..g.rows {
                            d.row_mut(r).copy_from_slice(&g.row(r)[c0..c0 + cols]);
                        }
                        acc(&mut grads, p, d);
                        c0 += cols;
                    }
                }
                Op::SliceCols { x, start } => {
                    let src = self.value(*x);
                    let mut d = Mat::zeros(src.rows, src.cols);
                    for r in 0..g.rows {
                        d.row_mut(r)[*start..*start + g.cols].copy_from_slice(g.row(r));
                    }
                    acc(&mut grads, *x, d);
                }
                Op::SliceRows { x, start } => {
                    let src = self.value(*x);
                    let mut d = Mat::zeros(src.rows, src.cols);
                    d.data[start * src.cols..(start + g.rows) * src.cols].copy_from_slice(&g.data);
                    acc(&mut grads, *x, d);
                }
                Op::MeanRows(x) => {
                    let src = self.value(*x);
                    let k = T::one() / T::c(src.rows as f64);
                    let mut d = Mat::zeros(src.rows, src.cols);
                    for r in 0..src.rows {
                        for (o, &v) in d.row_mut(r).iter_mut().zip(&g.data) {
                            *o = v * k;
                        }
                    }
                    acc(&mut grads, *x, d);
                }
                Op::L2Normalize(x) => {
                    let y = node.value.as_ref().expect("normalized value");
                    let mut d = Mat::zeros(y.rows, y.cols);
                    for r in 0..y.rows {
                        let (yr, gr) = (y.row(r), g.row(r));
                        let dot: T = yr.iter().zip(gr).map(|(&a, &b)| a * b).sum();
                        let inv = node.aux_rows[r];
                        for (c, o) in d.row_mut(r).iter_mut().enumerate() {
                            *o = (gr[c] - yr[c] * dot) * inv;
                        }
                    }
                    acc(&mut grads, *x, d);
                }
                Op::CrossEntropy { logits, targets } => {
                    let mut d = node.aux.clone().expect("softmax cache");
                    let k = g.data[0] / T::c(targets.len() as f64);
                    for (r, &t) in targets.iter().enumerate() {
                        d.row_mut(r)[t] -= T::one();
                        d.row_mut(r).iter_mut().for_each(|x| *x *= k);
                    }
                    acc(&mut grads, *logits, d);
                }
            }
        }
    }
}

fn acc<T: Scalar>(grads: &mut [Option<Mat<T>>], v: Var, g: Mat<T>) {
    match &mut grads[v.0] {
        Some(existing) => existing.add_assign(&g),
        slot => *slot = Some(g),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn rand_mat(rng: &mut ChaCha8Rng, r: usize, c: usize) -> Mat<f64> {
        Mat::from_vec(r, c, (0..r * c).map(|_| rng.random_range(-1.0..1.0)).collect())
    }

    /// Checks d(sum(w * f(params)))/dparams against central differences.
    fn check<F: Fn(&mut Tape<f64>) -> Var>(params: Vec<Mat<f64>>, f: F) {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let (root_shape, weights) = {
            let mut t = Tape::new(&params);
            let out = f(&mut t);
            let s = t.value(out).shape();
            (s, rand_mat(&mut rng, s.0, s.1))
        };
        let objective = |ps: &[Mat<f64>]| {
            let mut t = Tape::new(ps);
            let out = f(&mut t);
            t.value(out).data.iter().zip(&weights.data).map(|(a, b)| a * b).sum::<f64>()
        };
        let mut grads: Vec<Mat<f64>> = params.iter().map(|p| Mat::zeros(p.rows, p.cols)).collect();
        let mut t = Tape::new(&params);
        let out = f(&mut t);
        assert_eq!(t.value(out).shape(), root_shape);
        t.backward(out, weights.clone(), &mut grads);
        let h = 1e-6;
        for (pi, p) in params.iter().enumerate() {
            for k in 0..p.data.len() {
                let mut plus = params.clone();
                plus[pi].data[k] += h;
                let mut minus = params.clone();
                minus[pi].data[k] -= h;
                let fd = (objective(&plus) - objective(&minus)) / (2.0 * h);
                let an = grads[pi].data[k];
                assert!((fd - an).abs() <= 1e-6 * (1.0 + fd.abs()), "param {pi}[{k}]: fd {fd} vs analytic {an}");
            }
        }
    }

    #[test]
    fn matmul_grads() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let ps = vec![rand_mat(&mut rng, 3, 4), rand_mat(&mut rng, 4, 2), rand_mat(&mut rng, 5, 4)];
        check(ps.clone(), |t| {
            let (a, b) = (t.param(0), t.param(1));
            t.matmul(a, b)
        });
        check(ps, |t| {
            let (a, c) = (t.param(0), t.param(2));
            t.matmul_bt(a, c)
        });
    }

    #[test]
    fn elementwise_and_norm_grads() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let ps = vec![rand_mat(&mut rng, 3, 5), rand_mat(&mut rng, 1, 5), rand_mat(&mut rng, 1, 5)];
        check(ps.clone(), |t| {
            let (x, g, b) = (t.param(0), t.param(1), t.param(2));
            let y = t.layernorm(x, g, b);
            let y = t.gelu(y);
            let y = t.add_row(y, b);
            t.scale(y, 0.7)
        });
        check(ps, |t| {
            let x = t.param(0);
            let m = t.mean_rows(x);
            let y = t.l2_normalize(x);
            let y = t.add(y, x);
            let y = t.concat_rows(&[y, m]);
            t.l2_normalize(y)
        });
    }

    #[test]
    fn attention_pieces_grads() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let ps = vec![rand_mat(&mut rng, 4, 6), rand_mat(&mut rng, 7, 6)];
        check(ps, |t| {
            let x = t.param(0);
            let q = t.slice_cols(x, 0, 3);
            let k = t.slice_cols(x, 3, 3);
            let s = t.matmul_bt(q, k);
            let p = t.causal_softmax(s);
            let o = t.matmul(p, k);
            let tab = t.param(1);
            let e = t.gather(tab, &[2, 0, 2, 5]);
            let e = t.slice_cols(e, 1, 3);
            let cat = t.concat_cols(&[o, e]);
            t.slice_rows(cat, 1, 2)
        });
    }

    #[test]
    fn cross_entropy_grads_and_value() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let ps = vec![rand_mat(&mut rng, 3, 5)];
        check(ps, |t| {
            let x = t.param(0);
            t.cross_entropy(x, &[1, 4, 0])
        });
        let zeros = vec![Mat::<f64>::zeros(2, 4)];
        let mut t = Tape::new(&zeros);
        let x = t.param(0);
        let l = t.cross_entropy(x, &[0, 3]);
        assert!((t.value(l).data[0] - 4f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn causal_softmax_masks_future() {
        let ps = vec![Mat::from_vec(2, 2, vec![1.0, 100.0, 2.0, 3.0])];
        let mut t = Tape::new(&ps);
        let x = t.param(0);
        let p = t.causal_softmax(x);
        let v = t.value(p);
        assert_eq!(v.row(0), &[1.0, 0.0]);
        assert!((v.row(1).iter().sum::<f64>() - 1.0).abs() < 1e-12);
    }
}
