//! A small reverse-mode autodiff tape over 2-D `f32` tensors.
//!
//! Every value is a `[rows, cols]` matrix (1-D tensors are a single row).
//! Ops record their inputs; `backward` walks the tape in reverse and returns
//! gradients for every node that depends on a `requires_grad` leaf.

use std::sync::Arc;

use crate::tensor::{gemm, Gemm, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

/// Index value marking a zero (padding) entry in a gather map.
pub const GATHER_ZERO: u32 = u32::MAX;

const LN_EPS: f32 = 1e-5;

enum Op {
    Leaf,
    MatMul { a: Var, b: Var, trans_a: bool, trans_b: bool },
    Add(Var, Var),
    AddRow { a: Var, bias: Var },
    AddCol { a: Var, bias: Var },
    Mul(Var, Var),
    Scale(Var, f32),
    Relu(Var),
    Gelu(Var),
    LayerNorm { x: Var, gamma: Var, beta: Var, xhat: Vec<f32>, rstd: Vec<f32> },
    SoftmaxRows(Var),
    SliceCols { a: Var, start: usize },
    ConcatCols(Vec<Var>),
    ConcatRows(Vec<Var>),
    Gather { a: Var, index: Arc<Vec<u32>> },
}

struct Node {
    value: Tensor,
    op: Op,
    needs_grad: bool,
}

#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor> {
        self.grads.get_mut(v.0).and_then(|g| g.take())
    }
}

fn dims(t: &Tensor) -> (usize, usize) {
    (t.rows(), t.cols())
}

impl Tape {
    pub fn new() -> Self {
        Tape::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor, op: Op, needs_grad: bool) -> Var {
        self.nodes.push(Node { value, op, needs_grad });
        Var(self.nodes.len() - 1)
    }

    fn ng(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Var {
        self.push(value, Op::Leaf, requires_grad)
    }

    pub fn constant(&mut self, value: Tensor) -> Var {
        self.leaf(value, false)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.ng(v)
    }

    pub fn matmul_t(&mut self, a: Var, b: Var, trans_a: bool, trans_b: bool) -> Var {
        let (ar, ac) = dims(self.value(a));
        let (br, bc) = dims(self.value(b));
        let (m, k) = if trans_a { (ac, ar) } else { (ar, ac) };
        let (k2, n) = if trans_b { (bc, br) } else { (br, bc) };
        assert_eq!(k, k2, "matmul: inner dimensions {k} and {k2} differ");
        let mut out = vec![0.0; m * n];
        gemm(
            Gemm { m, k, n, trans_a, trans_b },
            self.value(a).data(),
            self.value(b).data(),
            &mut out,
            false,
        );
        let ng = self.ng(a) || self.ng(b);
        self.push(
            Tensor::from_rows(m, n, out),
            Op::MatMul { a, b, trans_a, trans_b },
            ng,
        )
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        self.matmul_t(a, b, false, false)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let (va, vb) = (self.value(a), self.value(b));
        assert_eq!(va.len(), vb.len(), "add: size mismatch");
        let data = va.data().iter().zip(vb.data()).map(|(x, y)| x + y).collect();
        let out = Tensor::from_rows(va.rows(), va.cols(), data);
        let ng = self.ng(a) || self.ng(b);
        self.push(out, Op::Add(a, b), ng)
    }

    /// `a[r, c] + bias[c]`.
    pub fn add_row(&mut self, a: Var, bias: Var) -> Var {
        let (va, vb) = (self.value(a), self.value(bias));
        let (r, c) = dims(va);
        assert_eq!(vb.len(), c, "add_row: bias length");
        let mut data = va.data().to_vec();
        for row in data.chunks_mut(c) {
            for (x, b) in row.iter_mut().zip(vb.data()) {
                *x += b;
            }
        }
        let ng = self.ng(a) || self.ng(bias);
        self.push(Tensor::from_rows(r, c, data), Op::AddRow { a, bias }, ng)
    }

    /// `a[r, c] + bias[r]`.
    pub fn add_col(&mut self, a: Var, bias: Var) -> Var {
        let (va, vb) = (self.value(a), self.value(bias));
        let (r, c) = dims(va);
        assert_eq!(vb.len(), r, "add_col: bias length");
        let mut data = va.data().to_vec();
        for (row, b) in data.chunks_mut(c).zip(vb.data()) {
            for x in row.iter_mut() {
                *x += b;
            }
        }
        let ng = self.ng(a) || self.ng(bias);
        self.push(Tensor::from_rows(r, c, data), Op::AddCol { a, bias }, ng)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let (va, vb) = (self.value(a), self.value(b));
        assert_eq!(va.len(), vb.len(), "mul: size mismatch");
        let data = va.data().iter().zip(vb.data()).map(|(x, y)| x * y).collect();
        let out = Tensor::from_rows(va.rows(), va.cols(), data);
        let ng = self.ng(a) || self.ng(b);
        self.push(out, Op::Mul(a, b), ng)
    }

    pub fn scale(&mut self, a: Var, s: f32) -> Var {
        let va = self.value(a);
        let data = va.data().iter().map(|x| x * s).collect();
        let out = Tensor::from_rows(va.rows(), va.cols(), data);
        let ng = self.ng(a);
        self.push(out, Op::Scale(a, s), ng)
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let va = self.value(a);
        let data = va.data().iter().map(|&x| x.max(0.0)).collect();
        let out = Tensor::from_rows(va.rows(), va.cols(), data);
        let ng = self.ng(a);
        self.push(out, Op::Relu(a), ng)
    }

    pub fn gelu(&mut self, a: Var) -> Var {
        let va = self.value(a);
        let data = va.data().iter().map(|&x| gelu(x)).collect();
        let out = Tensor::from_rows(va.rows(), va.cols(), data);
        let ng = self.ng(a);
        self.push(out, Op::Gelu(a), ng)
    }

    /// Layer normalisation over the last dimension.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var) -> Var {
        let vx = self.value(x);
        let (r, c) = dims(vx);
        let (g, b) = (self.value(gamma).data(), self.value(beta).data());
        assert_eq!(g.len(), c, "layer_norm: gamma length");
        assert_eq!(b.len(), c, "layer_norm: beta length");
        let mut xhat = vec![0.0; r * c];
        let mut rstd = vec![0.0; r];
        let mut out = vec![0.0; r * c];
        for i in 0..r {
            let row = &vx.data()[i * c..(i + 1) * c];
            let mean = row.iter().sum::<f32>() / c as f32;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f32>() / c as f32;
            let rs = 1.0 / (var + LN_EPS).sqrt();
            rstd[i] = rs;
            for j in 0..c {
                let h = (row[j] - mean) * rs;
                xhat[i * c + j] = h;
                out[i * c + j] = h * g[j] + b[j];
            }
        }
        let ng = self.ng(x) || self.ng(gamma) || self.ng(beta);
        self.push(
            Tensor::from_rows(r, c, out),
            Op::LayerNorm { x, gamma, beta, xhat, rstd },
            ng,
        )
    }

    pub fn softmax_rows(&mut self, a: Var) -> Var {
        let va = self.value(a);
        let (r, c) = dims(va);
        let mut out = va.data().to_vec();
        for row in out.chunks_mut(c) {
            let max = row.iter().cloned().fold(f32::NEG_INFINITY, f32::max);
            let mut sum = 0.0;
            for v in row.iter_mut() {
                *v = (*v - max).exp();
                sum += *v;
            }
            for v in row.iter_mut() {
                *v /= sum;
            }
        }
        let ng = self.ng(a);
        self.push(Tensor::from_rows(r, c, out), Op::SoftmaxRows(a), ng)
    }

    pub fn slice_cols(&mut self, a: Var, start: usize, len: usize) -> Var {
        let va = self.value(a);
        let (r, c) = dims(va);
        assert!(start + len <= c, "slice_cols out of range");
        let mut out = Vec::with_capacity(r * len);
        for row in va.data().chunks(c) {
            out.extend_from_slice(&row[start..start + len]);
        }
        let ng = self.ng(a);
        self.push(Tensor::from_rows(r, len, out), Op::SliceCols { a, start }, ng)
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Var {
        let r = self.value(parts[0]).rows();
        let total: usize = parts.iter().map(|&p| self.value(p).cols()).sum();
        let mut out = vec![0.0; r * total];
        let mut off = 0;
        for &p in parts {
            let v = self.value(p);
            assert_eq!(v.rows(), r, "concat_cols: row mismatch");
            let c = v.cols();
            for i in 0..r {
                out[i * total + off..i * total + off + c]
                    .copy_from_slice(&v.data()[i * c..(i + 1) * c]);
            }
            off += c;
        }
        let ng = parts.iter().any(|&p| self.ng(p));
        self.push(Tensor::from_rows(r, total, out), Op::ConcatCols(parts.to_vec()), ng)
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Var {
        let c = self.value(parts[0]).cols();
        let mut out = Vec::new();
        let mut r = 0;
        for &p in parts {
            let v = self.value(p);
            assert_eq!(v.cols(), c, "concat_rows: column mismatch");
            out.extend_from_slice(v.data());
            r += v.rows();
        }
        let ng = parts.iter().any(|&p| self.ng(p));
        self.push(Tensor::from_rows(r, c, out), Op::ConcatRows(parts.to_vec()), ng)
    }

    /// `out[i] = a[index[i]]` (or 0 for `GATHER_ZERO`), reshaped to `[rows, cols]`.
    pub fn gather(&mut self, a: Var, index: Arc<Vec<u32>>, rows: usize, cols: usize) -> Var {
        assert_eq!(index.len(), rows * cols, "gather: index length");
        let src = self.value(a).data();
        let out = index
            .iter()
            .map(|&i| if i == GATHER_ZERO { 0.0 } else { src[i as usize] })
            .collect();
        let ng = self.ng(a);
        self.push(Tensor::from_rows(rows, cols, out), Op::Gather { a, index }, ng)
    }

    /// Reverse pass seeded with `(output, dL/d output)` pairs.
    pub fn backward(&self, seeds: &[(Var, &Tensor)]) -> Gradients {
        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        let mut last = 0;
        for &(v, g) in seeds {
            assert_eq!(self.value(v).len(), g.len(), "backward: seed shape mismatch");
            if !self.ng(v) {
                continue;
            }
            last = last.max(v.0);
            accumulate(&mut grads, v, self.value(v).shape(), g.data());
        }
        for idx in (0..=last).rev() {
            let node = &self.nodes[idx];
            if !node.needs_grad || matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(g) = grads[idx].take() else {
                continue;
            };
            self.backprop(node, &g, &mut grads);
            grads[idx] = Some(g);
        }
        Gradients { grads }
    }

    fn backprop(&self, node: &Node, g: &Tensor, grads: &mut [Option<Tensor>]) {
        let gd = g.data();
        match &node.op {
            Op::Leaf => {}
            Op::MatMul { a, b, trans_a, trans_b } => {
                let (va, vb) = (self.value(*a), self.value(*b));
                let (m, n) = dims(g);
                let k = if *trans_a { va.rows() } else { va.cols() };
                if self.ng(*a) {
                    let buf = grad_buf(grads, *a, va);
                    if !trans_a {
                        // dA = g · op(B)^T
                        gemm(
                            Gemm { m, k: n, n: k, trans_a: false, trans_b: !trans_b },
                            gd,
                            vb.data(),
                            buf,
                            true,
                        );
                    } else {
                        // dA = op(B) · g^T
                        gemm(
                            Gemm { m: k, k: n, n: m, trans_a: *trans_b, trans_b: true },
                            vb.data(),
                            gd,
                            buf,
                            true,
                        );
                    }
                }
                if self.ng(*b) {
                    let buf = grad_buf(grads, *b, vb);
                    if !trans_b {
                        // dB = op(A)^T · g
                        gemm(
                            Gemm { m: k, k: m, n, trans_a: !trans_a, trans_b: false },
                            va.data(),
                            gd,
                            buf,
                            true,
                        );
                    } else {
                        // dB = g^T · op(A)
                        gemm(
                            Gemm { m: n, k: m, n: k, trans_a: true, trans_b: *trans_a },
                            gd,
                            va.data(),
                            buf,
                            true,
                        );
                    }
                }
            }
            Op::Add(a, b) => {
                for v in [*a, *b] {
                    if self.ng(v) {
                        accumulate(grads, v, self.value(v).shape(), gd);
                    }
                }
            }
            Op::AddRow { a, bias } => {
                if self.ng(*a) {
                    accumulate(grads, *a, self.value(*a).shape(), gd);
                }
                if self.ng(*bias) {
                    let c = g.cols();
                    let buf = grad_buf(grads, *bias, self.value(*bias));
                    for row in gd.chunks(c) {
                        for (b, x) in buf.iter_mut().zip(row) {
                            *b += x;
                        }
                    }
                }
            }
            Op::AddCol { a, bias } => {
                if self.ng(*a) {
                    accumulate(grads, *a, self.value(*a).shape(), gd);
                }
                if self.ng(*bias) {
                    let c = g.cols();
                    let buf = grad_buf(grads, *bias, self.value(*bias));
                    for (b, row) in buf.iter_mut().zip(gd.chunks(c)) {
                        *b += row.iter().sum::<f32>();
                    }
                }
            }
            Op::Mul(a, b) => {
                let (va, vb) = (self.value(*a), self.value(*b));
                if self.ng(*a) {
                    let buf = grad_buf(grads, *a, va);
                    for ((d, x), y) in buf.iter_mut().zip(gd).zip(vb.data()) {
                        *d += x * y;
                    }
                }
                if self.ng(*b) {
                    let buf = grad_buf(grads, *b, vb);
                    for ((d, x), y) in buf.iter_mut().zip(gd).zip(va.data()) {
                        *d += x * y;
                    }
                }
            }
            Op::Scale(a, s) => {
                let buf = grad_buf(grads, *a, self.value(*a));
                for (d, x) in buf.iter_mut().zip(gd) {
                    *d += s * x;
                }
            }
            Op::Relu(a) => {
                let va = self.value(*a);
                let buf = grad_buf(grads, *a, va);
                for ((d, x), v) in buf.iter_mut().zip(gd).zip(va.data()) {
                    if *v > 0.0 {
                        *d += x;
                    }
                }
            }
            Op::Gelu(a) => {
                let va = self.value(*a);
                let buf = grad_buf(grads, *a, va);
                for ((d, x), v) in buf.iter_mut().zip(gd).zip(va.data()) {
                    *d += x * gelu_grad(*v);
                }
            }
            Op::LayerNorm { x, gamma, beta, xhat, rstd } => {
                let c = g.cols();
                let gam = self.value(*gamma).data();
                if self.ng(*gamma) {
                    let buf = grad_buf(grads, *gamma, self.value(*gamma));
                    for (row, hrow) in gd.chunks(c).zip(xhat.chunks(c)) {
                        for j in 0..c {
                            buf[j] += row[j] * hrow[j];
                        }
                    }
                }
                if self.ng(*beta) {
                    let buf = grad_buf(grads, *beta, self.value(*beta));
                    for row in gd.chunks(c) {
                        for j in 0..c {
                            buf[j] += row[j];
                        }
                    }
                }
                if self.ng(*x) {
                    let buf = grad_buf(grads, *x, self.value(*x));
                    let inv_c = 1.0 / c as f32;
                    for (i, (row, hrow)) in gd.chunks(c).zip(xhat.chunks(c)).enumerate() {
                        let mut sum_d = 0.0;
                        let mut sum_dh = 0.0;
                        for j in 0..c {
                            let d = row[j] * gam[j];
                            sum_d += d;
                            sum_dh += d * hrow[j];
                        }
                        let rs = rstd[i];
                        let out = &mut buf[i * c..(i + 1) * c];
                        for j in 0..c {
                            let d = row[j] * gam[j];
                            out[j] += rs * (d - sum_d * inv_c - hrow[j] * sum_dh * inv_c);
                        }
                    }
                }
            }
            Op::SoftmaxRows(a) => {
                let y = node.value.data();
                let c = g.cols();
                let buf = grad_buf(grads, *a, self.value(*a));
                for ((grow, yrow), out) in gd.chunks(c).zip(y.chunks(c)).zip(buf.chunks_mut(c)) {
                    let dot: f32 = grow.iter().zip(yrow).map(|(p, q)| p * q).sum();
                    for j in 0..c {
                        out[j] += yrow[j] * (grow[j] - dot);
                    }
                }
            }
            Op::SliceCols { a, start } => {
                let va = self.value(*a);
                let (c, len) = (va.cols(), g.cols());
                let buf = grad_buf(grads, *a, va);
                for (grow, out) in gd.chunks(len).zip(buf.chunks_mut(c)) {
                    for (o, x) in out[*start..*start + len].iter_mut().zip(grow) {
                        *o += x;
                    }
                }
            }
            Op::ConcatCols(parts) => {
                let total = g.cols();
                let mut off = 0;
                for &p in parts {
                    let vp = self.value(p);
                    let c = vp.cols();
                    if self.ng(p) {
                        let buf = grad_buf(grads, p, vp);
                        for (i, out) in buf.chunks_mut(c).enumerate() {
                            for (o, x) in out.iter_mut().zip(&gd[i * total + off..i * total + off + c]) {
                                *o += x;
                            }
                        }
                    }
                    off += c;
                }
            }
            Op::ConcatRows(parts) => {
                let mut off = 0;
                for &p in parts {
                    let vp = self.value(p);
                    let n = vp.len();
                    if self.ng(p) {
                        accumulate(grads, p, self.value(p).shape(), &gd[off..off + n]);
                    }
                    off += n;
                }
            }
            Op::Gather { a, index } => {
                let buf = grad_buf(grads, *a, self.value(*a));
                for (&i, x) in index.iter().zip(gd) {
                    if i != GATHER_ZERO {
                        buf[i as usize] += x;
                    }
                }
            }
        }
    }
}

fn grad_buf<'a>(grads: &'a mut [Option<Tensor>], v: Var, like: &Tensor) -> &'a mut [f32] {
    grads[v.0]
        .get_or_insert_with(|| Tensor::zeros(like.shape()))
        .data_mut()
}

fn accumulate(grads: &mut [Option<Tensor>], v: Var, shape: &[usize], g: &[f32]) {
    match &mut grads[v.0] {
        Some(t) => {
            for (a, b) in t.data_mut().iter_mut().zip(g) {
                *a += b;
            }
        }
        slot @ None => {
            *slot = Some(Tensor::new(shape.to_vec(), g.to_vec()).expect("length matches"));
        }
    }
}

const GELU_C: f32 = 0.797_884_6; // sqrt(2/pi)

fn gelu(x: f32) -> f32 {
    0.5 * x * (1.0 + (GELU_C * (x + 0.044715 * x * x * x)).tanh())
}

fn gelu_grad(x: f32) -> f32 {
    let u = GELU_C * (x + 0.044715 * x * x * x);
    let t = u.tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * 0.044715 * x * x)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    /// Scalar objective `sum(out * w)` for a fixed random `w`; compares the tape
    /// gradient of every leaf against central differences computed in f64 on
    /// the same forward function.
    fn check<F>(leaves: Vec<Tensor>, build: F)
    where
        F: Fn(&mut Tape, &[Var]) -> Var,
    {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let mut tape = Tape::new();
        let vars: Vec<Var> = leaves.iter().map(|t| tape.leaf(t.clone(), true)).collect();
        let out = build(&mut tape, &vars);
        let w = Tensor::randn(tape.value(out).shape(), 1.0, &mut rng);
        let seed = w.clone();
        let grads = tape.backward(&[(out, &seed)]);

        let objective = |ls: &[Tensor]| -> f64 {
            let mut t = Tape::new();
            let vs: Vec<Var> = ls.iter().map(|l| t.leaf(l.clone(), false)).collect();
            let o = build(&mut t, &vs);
            t.value(o)
                .data()
                .iter()
                .zip(w.data())
                .map(|(a, b)| *a as f64 * *b as f64)
                .sum()
        };
        let h = 1e-2f32;
        for (li, leaf) in leaves.iter().enumerate() {
            let analytic = grads.get(vars[li]).expect("leaf gradient");
            for j in 0..leaf.len() {
                let mut plus = leaves.clone();
                plus[li].data_mut()[j] += h;
                let mut minus = leaves.clone();
                minus[li].data_mut()[j] -= h;
                let fd = (objective(&plus) - objective(&minus)) / (2.0 * h as f64);
                let an = analytic.data()[j] as f64;
                assert!(
                    (fd - an).abs() <= 2e-2 * (1.0 + fd.abs()),
                    "leaf {li} elem {j}: analytic {an} vs fd {fd}"
                );
            }
        }
    }

    fn rand(shape: &[usize], seed: u64) -> Tensor {
        Tensor::randn(shape, 1.0, &mut ChaCha8Rng::seed_from_u64(seed))
    }

    #[test]
    fn matmul_gradients_all_layouts() {
        for &(ta, tb) in &[(false, false), (true, false), (false, true), (true, true)] {
            let a = if ta { rand(&[4, 3], 1) } else { rand(&[3, 4], 1) };
            let b = if tb { rand(&[5, 4], 2) } else { rand(&[4, 5], 2) };
            check(vec![a, b], |t, v| t.matmul_t(v[0], v[1], ta, tb));
        }
    }

    #[test]
    fn elementwise_and_broadcast_gradients() {
        check(vec![rand(&[3, 4], 1), rand(&[4], 2)], |t, v| t.add_row(v[0], v[1]));
        check(vec![rand(&[3, 4], 1), rand(&[3], 2)], |t, v| t.add_col(v[0], v[1]));
        check(vec![rand(&[3, 4], 1), rand(&[3, 4], 2)], |t, v| t.mul(v[0], v[1]));
        check(vec![rand(&[3, 4], 1)], |t, v| t.gelu(v[0]));
        check(vec![rand(&[3, 4], 1)], |t, v| {
            let s = t.scale(v[0], 0.7);
            t.softmax_rows(s)
        });
    }

    #[test]
    fn layer_norm_gradients() {
        check(
            vec![rand(&[3, 6], 1), rand(&[6], 2), rand(&[6], 3)],
            |t, v| t.layer_norm(v[0], v[1], v[2]),
        );
    }

    #[test]
    fn structural_op_gradients() {
        check(vec![rand(&[3, 6], 1)], |t, v| {
            let a = t.slice_cols(v[0], 1, 3);
            let b = t.slice_cols(v[0], 4, 2);
            t.concat_cols(&[b, a])
        });
        check(vec![rand(&[2, 3], 1), rand(&[1, 3], 2)], |t, v| t.concat_rows(&[v[0], v[1]]));
        let index = Arc::new(vec![5, 0, GATHER_ZERO, 5, 2, 1]);
        check(vec![rand(&[2, 3], 1)], move |t, v| t.gather(v[0], index.clone(), 3, 2));
    }

    #[test]
    fn relu_gradient_is_masked() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::from_rows(1, 3, vec![-1.0, 0.5, 2.0]), true);
        let y = tape.relu(x);
        let g = tape.backward(&[(y, &Tensor::full(&[1, 3], 1.0))]);
        assert_eq!(g.get(x).unwrap().data(), &[0.0, 1.0, 1.0]);
    }

    #[test]
    fn constants_receive_no_gradient() {
        let mut tape = Tape::new();
        let x = tape.constant(rand(&[2, 2], 1));
        let w = tape.leaf(rand(&[2, 2], 2), true);
        let y = tape.matmul(x, w);
        let g = tape.backward(&[(y, &Tensor::full(&[2, 2], 1.0))]);
        assert!(g.get(x).is_none());
        assert!(g.get(w).is_some());
    }
}
