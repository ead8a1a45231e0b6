//! Reverse-mode tape. Operations are recorded in topological order during the
//! forward pass; `backward` replays them in reverse, visiting each node once.

use super::tensor::{Scalar, Tensor};

pub type VarId = usize;

enum Op<T> {
    Leaf,
    Add(VarId, VarId),
    Sub(VarId, VarId),
    Mul(VarId, VarId),
    Scale(VarId, T),
    /// row (shape [1,c] or [c]) added to every row of a [n,c] matrix
    AddRowBroadcast(VarId, VarId),
    /// col (shape [c,1] or [c]) added to every column of a [c,n] matrix
    AddColBroadcast(VarId, VarId),
    Matmul(VarId, VarId),
    Transpose(VarId),
    Reshape(VarId),
    SoftmaxRows(VarId),
    Relu(VarId),
    Clamp(VarId, T, T),
    Sum(VarId),
    L1Mean(VarId, VarId),
    MseMean(VarId, VarId),
    SliceRows(VarId, usize, usize),
    SliceCols(VarId, usize, usize),
    ConcatRows(Vec<VarId>),
    ConcatCols(Vec<VarId>),
    Conv2d {
        x: VarId,
        w: VarId,
        h: usize,
        width: usize,
        k: usize,
        cols: Tensor<T>,
    },
    Bilinear {
        feat: VarId,
        pts: VarId,
        h: usize,
        width: usize,
    },
    Detach,
}

impl<T> Op<T> {
    fn parents(&self) -> Vec<VarId> {
        match self {
            Op::Leaf => vec![],
            Op::Add(a, b)
            | Op::Sub(a, b)
            | Op::Mul(a, b)
            | Op::AddRowBroadcast(a, b)
            | Op::AddColBroadcast(a, b)
            | Op::Matmul(a, b)
            | Op::L1Mean(a, b)
            | Op::MseMean(a, b) => vec![*a, *b],
            Op::Scale(a, _)
            | Op::Transpose(a)
            | Op::Reshape(a)
            | Op::SoftmaxRows(a)
            | Op::Relu(a)
            | Op::Clamp(a, _, _)
            | Op::Sum(a)
            | Op::SliceRows(a, _, _)
            | Op::SliceCols(a, _, _) => vec![*a],
            Op::ConcatRows(v) | Op::ConcatCols(v) => v.clone(),
            Op::Conv2d { x, w, .. } => vec![*x, *w],
            Op::Bilinear { feat, pts, .. } => vec![*feat, *pts],
            Op::Detach => vec![],
        }
    }
}

struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    requires_grad: bool,
}

/// Gradients produced by one backward pass, indexed by `VarId`.
pub struct Grads<T> {
    grads: Vec<Option<Tensor<T>>>,
}

impl<T: Scalar> Grads<T> {
    pub fn get(&self, id: VarId) -> Option<&Tensor<T>> {
        self.grads.get(id).and_then(|g| g.as_ref())
    }

    /// Gradient of `id`, or zeros of the given shape when `id` was not
    /// reached from the loss.
    pub fn get_or_zeros(&self, id: VarId, shape: &[usize]) -> Tensor<T> {
        match self.get(id) {
            Some(g) => g.clone(),
            None => Tensor::zeros(shape),
        }
    }
}

pub struct Graph<T: Scalar> {
    nodes: Vec<Node<T>>,
}

impl<T: Scalar> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> Graph<T> {
    pub fn new() -> Self {
        Graph { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, id: VarId) -> &Tensor<T> {
        &self.nodes[id].value
    }

    pub fn requires_grad(&self, id: VarId) -> bool {
        self.nodes[id].requires_grad
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>) -> VarId {
        let requires_grad = match op {
            Op::Leaf | Op::Detach => false,
            _ => op.parents().iter().any(|&p| self.nodes[p].requires_grad),
        };
        self.nodes.push(Node { value, op, requires_grad });
        self.nodes.len() - 1
    }

    /// Input that does not receive gradients.
    pub fn constant(&mut self, t: Tensor<T>) -> VarId {
        self.nodes.push(Node { value: t, op: Op::Leaf, requires_grad: false });
        self.nodes.len() - 1
    }

    /// Input that receives gradients (a parameter or a checked input).
    pub fn input(&mut self, t: Tensor<T>) -> VarId {
        self.nodes.push(Node { value: t, op: Op::Leaf, requires_grad: true });
        self.nodes.len() - 1
    }

    /// Same value, but gradients stop here.
    pub fn detach(&mut self, a: VarId) -> VarId {
        let v = self.nodes[a].value.clone();
        self.push(v, Op::Detach)
    }

    pub fn add(&mut self, a: VarId, b: VarId) -> VarId {
        let mut v = self.nodes[a].value.clone();
        v.add_assign(&self.nodes[b].value);
        self.push(v, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: VarId, b: VarId) -> VarId {
        let (va, vb) = (&self.nodes[a].value, &self.nodes[b].value);
        assert_eq!(va.shape, vb.shape, "sub shape mismatch: {:?} vs {:?}", va.shape, vb.shape);
        let data = va.data.iter().zip(vb.data.iter()).map(|(&x, &y)| x - y).collect();
        let v = Tensor::from_vec(&va.shape, data);
        self.push(v, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: VarId, b: VarId) -> VarId {
        let (va, vb) = (&self.nodes[a].value, &self.nodes[b].value);
        assert_eq!(va.shape, vb.shape, "mul shape mismatch: {:?} vs {:?}", va.shape, vb.shape);
        let data = va.data.iter().zip(vb.data.iter()).map(|(&x, &y)| x * y).collect();
        let v = Tensor::from_vec(&va.shape, data);
        self.push(v, Op::Mul(a, b))
    }

    pub fn scale(&mut self, a: VarId, s: T) -> VarId {
        let v = self.nodes[a].value.scaled(s);
        self.push(v, Op::Scale(a, s))
    }

    /// `a` is [n,c]; `row` is [1,c] or [c], added to every row.
    pub fn add_row_broadcast(&mut self, a: VarId, row: VarId) -> VarId {
        let (va, vr) = (&self.nodes[a].value, &self.nodes[row].value);
        let c = va.cols();
        assert_eq!(vr.numel(), c, "row broadcast needs {} elements, got {:?}", c, vr.shape);
        let mut v = va.clone();
        for r in 0..va.rows() {
            for j in 0..c {
                v.data[r * c + j] = v.data[r * c + j] + vr.data[j];
            }
        }
        self.push(v, Op::AddRowBroadcast(a, row))
    }

    /// `a` is [c,n]; `col` is [c,1] or [c], added to every column.
    pub fn add_col_broadcast(&mut self, a: VarId, col: VarId) -> VarId {
        let (va, vc) = (&self.nodes[a].value, &self.nodes[col].value);
        let (c, n) = (va.rows(), va.cols());
        assert_eq!(vc.numel(), c, "col broadcast needs {} elements, got {:?}", c, vc.shape);
        let mut v = va.clone();
        for i in 0..c {
            for j in 0..n {
                v.data[i * n + j] = v.data[i * n + j] + vc.data[i];
            }
        }
        self.push(v, Op::AddColBroadcast(a, col))
    }

    pub fn matmul(&mut self, a: VarId, b: VarId) -> VarId {
        let v = self.nodes[a].value.matmul(&self.nodes[b].value);
        self.push(v, Op::Matmul(a, b))
    }

    pub fn transpose(&mut self, a: VarId) -> VarId {
        let v = self.nodes[a].value.transposed();
        self.push(v, Op::Transpose(a))
    }

    pub fn reshape(&mut self, a: VarId, shape: &[usize]) -> VarId {
        let v = self.nodes[a].value.reshaped(shape);
        self.push(v, Op::Reshape(a))
    }

    /// Softmax along each row of a 2-D tensor. Shift-invariant by max
    /// subtraction.
    pub fn softmax_rows(&mut self, a: VarId) -> VarId {
        let va = &self.nodes[a].value;
        let (n, c) = (va.rows(), va.cols());
        let mut v = Tensor::zeros(&[n, c]);
        for r in 0..n {
            let row = &va.data[r * c..(r + 1) * c];
            let mx = row.iter().cloned().fold(T::neg_infinity(), T::max);
            let mut denom = T::zero();
            for j in 0..c {
                let e = (row[j] - mx).exp();
                v.data[r * c + j] = e;
                denom = denom + e;
            }
            for j in 0..c {
                v.data[r * c + j] = v.data[r * c + j] / denom;
            }
        }
        self.push(v, Op::SoftmaxRows(a))
    }

    pub fn relu(&mut self, a: VarId) -> VarId {
        let v = self.nodes[a].value.map(|x| if x > T::zero() { x } else { T::zero() });
        self.push(v, Op::Relu(a))
    }

    pub fn clamp(&mut self, a: VarId, lo: T, hi: T) -> VarId {
        let v = self.nodes[a].value.map(|x| x.max(lo).min(hi));
        self.push(v, Op::Clamp(a, lo, hi))
    }

    pub fn sum(&mut self, a: VarId) -> VarId {
        let s = self.nodes[a].value.data.iter().cloned().fold(T::zero(), |acc, v| acc + v);
        self.push(Tensor::scalar(s), Op::Sum(a))
    }

    pub fn mean(&mut self, a: VarId) -> VarId {
        let n = self.nodes[a].value.numel();
        let s = self.sum(a);
        self.scale(s, T::one() / T::from_f64(n as f64))
    }

    /// Mean absolute error over all coordinates. Subgradient at zero is zero.
    pub fn l1_mean(&mut self, a: VarId, b: VarId) -> VarId {
        let (va, vb) = (&self.nodes[a].value, &self.nodes[b].value);
        assert_eq!(va.shape, vb.shape, "l1_mean shape mismatch: {:?} vs {:?}", va.shape, vb.shape);
        let n = T::from_f64(va.numel() as f64);
        let s = va
            .data
            .iter()
            .zip(vb.data.iter())
            .fold(T::zero(), |acc, (&x, &y)| acc + (x - y).abs());
        self.push(Tensor::scalar(s / n), Op::L1Mean(a, b))
    }

    /// Mean squared error over all coordinates.
    pub fn mse_mean(&mut self, a: VarId, b: VarId) -> VarId {
        let (va, vb) = (&self.nodes[a].value, &self.nodes[b].value);
        assert_eq!(va.shape, vb.shape, "mse_mean shape mismatch: {:?} vs {:?}", va.shape, vb.shape);
        let n = T::from_f64(va.numel() as f64);
        let s = va
            .data
            .iter()
            .zip(vb.data.iter())
            .fold(T::zero(), |acc, (&x, &y)| acc + (x - y) * (x - y));
        self.push(Tensor::scalar(s / n), Op::MseMean(a, b))
    }

    pub fn slice_rows(&mut self, a: VarId, start: usize, len: usize) -> VarId {
        let va = &self.nodes[a].value;
        let c = va.cols();
        assert!(start + len <= va.rows(), "slice_rows out of range");
        let v = Tensor::from_vec(&[len, c], va.data[start * c..(start + len) * c].to_vec());
        self.push(v, Op::SliceRows(a, start, len))
    }

    pub fn slice_cols(&mut self, a: VarId, start: usize, len: usize) -> VarId {
        let va = &self.nodes[a].value;
        let (n, c) = (va.rows(), va.cols());
        assert!(start + len <= c, "slice_cols out of range");
        let mut v = Tensor::zeros(&[n, len]);
        for r in 0..n {
            v.data[r * len..(r + 1) * len]
                .copy_from_slice(&va.data[r * c + start..r * c + start + len]);
        }
        self.push(v, Op::SliceCols(a, start, len))
    }

    pub fn concat_rows(&mut self, parts: &[VarId]) -> VarId {
        assert!(!parts.is_empty(), "concat_rows of zero parts");
        let c = self.nodes[parts[0]].value.cols();
        let mut data = Vec::new();
        let mut rows = 0;
        for &p in parts {
            let v = &self.nodes[p].value;
            assert_eq!(v.cols(), c, "concat_rows column mismatch");
            rows += v.rows();
            data.extend_from_slice(&v.data);
        }
        self.push(Tensor::from_vec(&[rows, c], data), Op::ConcatRows(parts.to_vec()))
    }

    pub fn concat_cols(&mut self, parts: &[VarId]) -> VarId {
        assert!(!parts.is_empty(), "concat_cols of zero parts");
        let n = self.nodes[parts[0]].value.rows();
        let total: usize = parts.iter().map(|&p| self.nodes[p].value.cols()).sum();
        let mut v = Tensor::zeros(&[n, total]);
        let mut off = 0;
        for &p in parts {
            let part = &self.nodes[p].value;
            assert_eq!(part.rows(), n, "concat_cols row mismatch");
            let c = part.cols();
            for r in 0..n {
                v.data[r * total + off..r * total + off + c]
                    .copy_from_slice(&part.data[r * c..(r + 1) * c]);
            }
            off += c;
        }
        self.push(v, Op::ConcatCols(parts.to_vec()))
    }

    /// Same-padded stride-1 cross-correlation. `x` is [c_in, h*width],
    /// `w` is [c_out, c_in*k*k], output is [c_out, h*width]. `k` must be odd.
    pub fn conv2d(&mut self, x: VarId, w: VarId, h: usize, width: usize, k: usize) -> VarId {
        let (vx, vw) = (&self.nodes[x].value, &self.nodes[w].value);
        assert_eq!(k % 2, 1, "conv2d kernel size must be odd, got {}", k);
        assert_eq!(vx.cols(), h * width, "conv2d input spatial size mismatch");
        let c_in = vx.rows();
        assert_eq!(
            vw.cols(),
            c_in * k * k,
            "conv2d channel mismatch: kernel {:?} expects c_in*k*k={}, input has c_in={}",
            vw.shape,
            vw.cols(),
            c_in
        );
        let cols = im2col(vx, c_in, h, width, k);
        let v = vw.matmul(&cols);
        self.push(v, Op::Conv2d { x, w, h, width, k, cols })
    }

    /// Bilinear interpolation of `feat` ([c, h*width]) at continuous grid
    /// coordinates `pts` ([p, 2] as (row, col)). Cells outside the grid
    /// contribute zero. Differentiable in both the feature and the points.
    pub fn bilinear_sample(&mut self, feat: VarId, pts: VarId, h: usize, width: usize) -> VarId {
        let (vf, vp) = (&self.nodes[feat].value, &self.nodes[pts].value);
        assert_eq!(vf.cols(), h * width, "bilinear feature spatial size mismatch");
        assert_eq!(vp.cols(), 2, "bilinear points must be [p,2]");
        let v = bilinear_forward(vf, vp, h, width);
        self.push(v, Op::Bilinear { feat, pts, h, width })
    }

    /// Reverse pass from a scalar loss. Every recorded node is visited at
    /// most once, in reverse topological order.
    pub fn backward(&self, loss: VarId) -> Grads<T> {
        let lv = &self.nodes[loss].value;
        assert!(lv.is_scalar(), "backward requires a scalar loss, got shape {:?}", lv.shape);
        let mut grads: Vec<Option<Tensor<T>>> = vec![None; self.nodes.len()];
        grads[loss] = Some(Tensor::scalar(T::one()));

        for id in (0..=loss).rev() {
            let node = &self.nodes[id];
            if !node.requires_grad && !matches!(node.op, Op::Leaf) {
                continue;
            }
            let g = match grads[id].take() {
                Some(g) => g,
                None => continue,
            };
            self.accumulate_parent_grads(id, &g, &mut grads);
            grads[id] = Some(g);
        }
        Grads { grads }
    }

    fn accumulate_parent_grads(&self, id: VarId, g: &Tensor<T>, grads: &mut [Option<Tensor<T>>]) {
        let node = &self.nodes[id];
        let mut acc = |pid: VarId, contrib: Tensor<T>| {
            if !self.nodes[pid].requires_grad {
                return;
            }
            match &mut grads[pid] {
                Some(existing) => existing.add_assign(&contrib),
                slot @ None => *slot = Some(contrib),
            }
        };
        match &node.op {
            Op::Leaf | Op::Detach => {}
            Op::Add(a, b) => {
                acc(*a, g.clone());
                acc(*b, g.clone());
            }
            Op::Sub(a, b) => {
                acc(*a, g.clone());
                acc(*b, g.scaled(-T::one()));
            }
            Op::Mul(a, b) => {
                let (va, vb) = (&self.nodes[*a].value, &self.nodes[*b].value);
                let ga = Tensor::from_vec(
                    &g.shape,
                    g.data.iter().zip(vb.data.iter()).map(|(&x, &y)| x * y).collect(),
                );
                let gb = Tensor::from_vec(
                    &g.shape,
                    g.data.iter().zip(va.data.iter()).map(|(&x, &y)| x * y).collect(),
                );
                acc(*a, ga);
                acc(*b, gb);
            }
            Op::Scale(a, s) => acc(*a, g.scaled(*s)),
            Op::AddRowBroadcast(a, row) => {
                acc(*a, g.clone());
                let c = g.cols();
                let mut gr = Tensor::zeros(&self.nodes[*row].value.shape);
                for r in 0..g.rows() {
                    for j in 0..c {
                        gr.data[j] = gr.data[j] + g.data[r * c + j];
                    }
                }
                acc(*row, gr);
            }
            Op::AddColBroadcast(a, col) => {
                acc(*a, g.clone());
                let (c, n) = (g.rows(), g.cols());
                let mut gc = Tensor::zeros(&self.nodes[*col].value.shape);
                for i in 0..c {
                    for j in 0..n {
                        gc.data[i] = gc.data[i] + g.data[i * n + j];
                    }
                }
                acc(*col, gc);
            }
            Op::Matmul(a, b) => {
                let (va, vb) = (&self.nodes[*a].value, &self.nodes[*b].value);
                acc(*a, g.matmul_nt(vb));
                acc(*b, va.matmul_tn(g));
            }
            Op::Transpose(a) => acc(*a, g.transposed()),
            Op::Reshape(a) => acc(*a, g.reshaped(&self.nodes[*a].value.shape)),
            Op::SoftmaxRows(a) => {
                let y = &node.value;
                let (n, c) = (y.rows(), y.cols());
                let mut ga = Tensor::zeros(&[n, c]);
                for r in 0..n {
                    let mut dot = T::zero();
                    for j in 0..c {
                        dot = dot + g.data[r * c + j] * y.data[r * c + j];
                    }
                    for j in 0..c {
                        ga.data[r * c + j] = y.data[r * c + j] * (g.data[r * c + j] - dot);
                    }
                }
                acc(*a, ga);
            }
            Op::Relu(a) => {
                let va = &self.nodes[*a].value;
                let ga = Tensor::from_vec(
                    &g.shape,
                    g.data
                        .iter()
                        .zip(va.data.iter())
                        .map(|(&gv, &xv)| if xv > T::zero() { gv } else { T::zero() })
                        .collect(),
                );
                acc(*a, ga);
            }
            Op::Clamp(a, lo, hi) => {
                let va = &self.nodes[*a].value;
                let ga = Tensor::from_vec(
                    &g.shape,
                    g.data
                        .iter()
                        .zip(va.data.iter())
                        .map(|(&gv, &xv)| if xv >= *lo && xv <= *hi { gv } else { T::zero() })
                        .collect(),
                );
                acc(*a, ga);
            }
            Op::Sum(a) => {
                let shape = self.nodes[*a].value.shape.clone();
                acc(*a, Tensor::full(&shape, g.item()));
            }
            Op::L1Mean(a, b) => {
                let (va, vb) = (&self.nodes[*a].value, &self.nodes[*b].value);
                let n = T::from_f64(va.numel() as f64);
                let gi = g.item() / n;
                let signs: Vec<T> = va
                    .data
                    .iter()
                    .zip(vb.data.iter())
                    .map(|(&x, &y)| {
                        if x > y {
                            gi
                        } else if x < y {
                            -gi
                        } else {
                            T::zero()
                        }
                    })
                    .collect();
                let ga = Tensor::from_vec(&va.shape, signs);
                acc(*b, ga.scaled(-T::one()));
                acc(*a, ga);
            }
            Op::MseMean(a, b) => {
                let (va, vb) = (&self.nodes[*a].value, &self.nodes[*b].value);
                let n = T::from_f64(va.numel() as f64);
                let c = g.item() * T::from_f64(2.0) / n;
                let diff: Vec<T> = va
                    .data
                    .iter()
                    .zip(vb.data.iter())
                    .map(|(&x, &y)| c * (x - y))
                    .collect();
                let ga = Tensor::from_vec(&va.shape, diff);
                acc(*b, ga.scaled(-T::one()));
                acc(*a, ga);
            }
            Op::SliceRows(a, start, len) => {
                let va = &self.nodes[*a].value;
                let c = va.cols();
                let mut ga = Tensor::zeros(&va.shape);
                ga.data[start * c..(start + len) * c].copy_from_slice(&g.data);
                acc(*a, ga);
            }
            Op::SliceCols(a, start, len) => {
                let va = &self.nodes[*a].value;
                let (n, c) = (va.rows(), va.cols());
                let mut ga = Tensor::zeros(&[n, c]);
                for r in 0..n {
                    ga.data[r * c + start..r * c + start + len]
                        .copy_from_slice(&g.data[r * len..(r + 1) * len]);
                }
                acc(*a, ga);
            }
            Op::ConcatRows(parts) => {
                let c = g.cols();
                let mut off = 0;
                for &p in parts {
                    let rows = self.nodes[p].value.rows();
                    let part = Tensor::from_vec(
                        &[rows, c],
                        g.data[off * c..(off + rows) * c].to_vec(),
                    );
                    acc(p, part);
                    off += rows;
                }
            }
            Op::ConcatCols(parts) => {
                let (n, total) = (g.rows(), g.cols());
                let mut off = 0;
                for &p in parts {
                    let c = self.nodes[p].value.cols();
                    let mut part = Tensor::zeros(&[n, c]);
                    for r in 0..n {
                        part.data[r * c..(r + 1) * c]
                            .copy_from_slice(&g.data[r * total + off..r * total + off + c]);
                    }
                    acc(p, part);
                    off += c;
                }
            }
            Op::Conv2d { x, w, h, width, k, cols } => {
                let vw = &self.nodes[*w].value;
                acc(*w, g.matmul_nt(cols));
                let dcols = vw.matmul_tn(g);
                let c_in = self.nodes[*x].value.rows();
                acc(*x, col2im(&dcols, c_in, *h, *width, *k));
            }
            Op::Bilinear { feat, pts, h, width } => {
                let (vf, vp) = (&self.nodes[*feat].value, &self.nodes[*pts].value);
                let (gf, gp) = bilinear_backward(vf, vp, g, *h, *width);
                acc(*feat, gf);
                acc(*pts, gp);
            }
        }
    }
}

fn im2col<T: Scalar>(x: &Tensor<T>, c_in: usize, h: usize, w: usize, k: usize) -> Tensor<T> {
    let p = (k - 1) / 2;
    let hw = h * w;
    let mut cols = Tensor::zeros(&[c_in * k * k, hw]);
    for ci in 0..c_in {
        for ky in 0..k {
            for kx in 0..k {
                let row = (ci * k * k + ky * k + kx) * hw;
                for i in 0..h {
                    let ii = i as isize + ky as isize - p as isize;
                    if ii < 0 || ii >= h as isize {
                        continue;
                    }
                    let j_lo = p.saturating_sub(kx);
                    let j_hi = (w + p).saturating_sub(kx).min(w);
                    if j_lo >= j_hi {
                        continue;
                    }
                    let src = ci * hw + ii as usize * w + (j_lo + kx - p);
                    let dst = row + i * w + j_lo;
                    let len = j_hi - j_lo;
                    cols.data[dst..dst + len].copy_from_slice(&x.data[src..src + len]);
                }
            }
        }
    }
    cols
}

fn col2im<T: Scalar>(dcols: &Tensor<T>, c_in: usize, h: usize, w: usize, k: usize) -> Tensor<T> {
    let p = (k - 1) / 2;
    let hw = h * w;
    let mut dx = Tensor::zeros(&[c_in, hw]);
    for ci in 0..c_in {
        for ky in 0..k {
            for kx in 0..k {
                let row = (ci * k * k + ky * k + kx) * hw;
                for i in 0..h {
                    let ii = i as isize + ky as isize - p as isize;
                    if ii < 0 || ii >= h as isize {
                        continue;
                    }
                    let j_lo = p.saturating_sub(kx);
                    let j_hi = (w + p).saturating_sub(kx).min(w);
                    for j in j_lo..j_hi {
                        let src = row + i * w + j;
                        let dst = ci * hw + ii as usize * w + (j + kx - p);
                        dx.data[dst] = dx.data[dst] + dcols.data[src];
                    }
                }
            }
        }
    }
    dx
}

fn bilinear_forward<T: Scalar>(feat: &Tensor<T>, pts: &Tensor<T>, h: usize, w: usize) -> Tensor<T> {
    let c = feat.rows();
    let p = pts.rows();
    let hw = h * w;
    let mut out = Tensor::zeros(&[p, c]);
    for i in 0..p {
        let r = pts.data[i * 2];
        let col = pts.data[i * 2 + 1];
        let r0 = r.floor();
        let c0 = col.floor();
        let fr = r - r0;
        let fc = col - c0;
        let corners = [
            (r0, c0, (T::one() - fr) * (T::one() - fc)),
            (r0 + T::one(), c0, fr * (T::one() - fc)),
            (r0, c0 + T::one(), (T::one() - fr) * fc),
            (r0 + T::one(), c0 + T::one(), fr * fc),
        ];
        for (cr, cc, weight) in corners {
            let (ri, ci) = (cr.as_f64(), cc.as_f64());
            if ri < 0.0 || ci < 0.0 || ri > (h - 1) as f64 || ci > (w - 1) as f64 {
                continue;
            }
            let cell = ri as usize * w + ci as usize;
            for ch in 0..c {
                out.data[i * c + ch] = out.data[i * c + ch] + weight * feat.data[ch * hw + cell];
            }
        }
    }
    out
}

fn bilinear_backward<T: Scalar>(
    feat: &Tensor<T>,
    pts: &Tensor<T>,
    g: &Tensor<T>,
    h: usize,
    w: usize,
) -> (Tensor<T>, Tensor<T>) {
    let c = feat.rows();
    let p = pts.rows();
    let hw = h * w;
    let mut gf = Tensor::zeros(&feat.shape);
    let mut gp = Tensor::zeros(&pts.shape);
    let in_range = |ri: f64, ci: f64| ri >= 0.0 && ci >= 0.0 && ri <= (h - 1) as f64 && ci <= (w - 1) as f64;
    for i in 0..p {
        let r = pts.data[i * 2];
        let col = pts.data[i * 2 + 1];
        let r0 = r.floor();
        let c0 = col.floor();
        let fr = r - r0;
        let fc = col - c0;
        // corner values, zero when outside the grid
        let fetch = |cr: T, cc: T, ch: usize| -> T {
            let (ri, ci) = (cr.as_f64(), cc.as_f64());
            if in_range(ri, ci) {
                feat.data[ch * hw + ri as usize * w + ci as usize]
            } else {
                T::zero()
            }
        };
        let one = T::one();
        let weights = [
            (r0, c0, (one - fr) * (one - fc), -(one - fc), -(one - fr)),
            (r0 + one, c0, fr * (one - fc), one - fc, -fr),
            (r0, c0 + one, (one - fr) * fc, -fc, one - fr),
            (r0 + one, c0 + one, fr * fc, fc, fr),
        ];
        let mut dr = T::zero();
        let mut dc = T::zero();
        for ch in 0..c {
            let go = g.data[i * c + ch];
            for &(cr, cc, weight, dwr, dwc) in &weights {
                let (ri, ci) = (cr.as_f64(), cc.as_f64());
                if in_range(ri, ci) {
                    let cell = ri as usize * w + ci as usize;
                    gf.data[ch * hw + cell] = gf.data[ch * hw + cell] + go * weight;
                }
                let val = fetch(cr, cc, ch);
                dr = dr + go * dwr * val;
                dc = dc + go * dwc * val;
            }
        }
        gp.data[i * 2] = dr;
        gp.data[i * 2 + 1] = dc;
    }
    (gf, gp)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::check::{finite_diff_check, grad_check, grad_check_multi};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn randn(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor<f64> {
        let n: usize = shape.iter().product();
        Tensor::from_vec(shape, (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect())
    }

    #[test]
    fn backward_of_sum_is_ones() {
        let mut g = Graph::new();
        let x = g.input(Tensor::from_vec(&[2, 3], vec![1.0, -2.0, 3.0, 0.5, 0.0, -1.0]));
        let loss = g.sum(x);
        let grads = g.backward(loss);
        assert_eq!(grads.get(x).unwrap().data, vec![1.0f64; 6]);
    }

    #[test]
    fn backward_of_sum_of_squares_is_2x() {
        let mut g = Graph::new();
        let data = vec![1.0, -2.0, 3.0, 0.5];
        let x = g.input(Tensor::from_vec(&[2, 2], data.clone()));
        let sq = g.mul(x, x);
        let loss = g.sum(sq);
        let grads = g.backward(loss);
        let expected: Vec<f64> = data.iter().map(|v| 2.0 * v).collect();
        assert_eq!(grads.get(x).unwrap().data, expected);
    }

    #[test]
    fn unreachable_input_gets_zero_grad() {
        let mut g = Graph::new();
        let x = g.input(Tensor::from_vec(&[2], vec![1.0, 2.0]));
        let y = g.input(Tensor::from_vec(&[2], vec![3.0, 4.0]));
        let loss = g.sum(x);
        let grads = g.backward(loss);
        assert!(grads.get(y).is_none());
        assert_eq!(grads.get_or_zeros(y, &[2]).data, vec![0.0, 0.0]);
    }

    #[test]
    #[should_panic(expected = "scalar loss")]
    fn backward_rejects_non_scalar_loss() {
        let mut g = Graph::new();
        let x = g.input(Tensor::<f64>::zeros(&[2, 2]));
        g.backward(x);
    }

    #[test]
    fn matmul_gradient_matches_finite_differences() {
        let _rng = ChaCha8Rng::seed_from_u64(1);
        for seed in 0..5 {
            let mut r = ChaCha8Rng::seed_from_u64(seed);
            let a = randn(&[5, 4], &mut r);
            let b = randn(&[4, 3], &mut r);
            let err = grad_check_multi(
                |g, ids| {
                    let y = g.matmul(ids[0], ids[1]);
                    g.sum(y)
                },
                &[a, b],
                1e-5,
            );
            assert!(err <= 1e-6, "matmul grad rel err {err}");
        }
        
    }

    #[test]
    fn conv2d_identity_1x1_kernel() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let x = randn(&[3, 16], &mut rng);
        // 1x1 kernel = identity matrix over channels
        let mut w = Tensor::zeros(&[3, 3]);
        for i in 0..3 {
            w.data[i * 3 + i] = 1.0;
        }
        let mut g = Graph::new();
        let xi = g.constant(x.clone());
        let wi = g.constant(w);
        let y = g.conv2d(xi, wi, 4, 4, 1);
        assert_eq!(g.value(y).data, x.data);
    }

    #[test]
    fn conv2d_all_ones_kernel_on_one_hot() {
        // 3x3 plateau of ones around the hot cell, clipped at borders
        let mut x = Tensor::<f64>::zeros(&[1, 25]);
        x.data[2 * 5 + 2] = 1.0;
        let w = Tensor::from_vec(&[1, 9], vec![1.0; 9]);
        let mut g = Graph::new();
        let xi = g.constant(x);
        let wi = g.constant(w);
        let y = g.conv2d(xi, wi, 5, 5, 3);
        // direct-summation oracle
        for i in 0..5usize {
            for j in 0..5usize {
                let expect = if i.abs_diff(2) <= 1 && j.abs_diff(2) <= 1 { 1.0 } else { 0.0 };
                assert_eq!(g.value(y).data[i * 5 + j], expect, "cell ({i},{j})");
            }
        }

        // corner one-hot to exercise border clipping
        let mut x = Tensor::<f64>::zeros(&[1, 25]);
        x.data[0] = 1.0;
        let w = Tensor::from_vec(&[1, 9], vec![1.0; 9]);
        let mut g = Graph::new();
        let xi = g.constant(x);
        let wi = g.constant(w);
        let y = g.conv2d(xi, wi, 5, 5, 3);
        for i in 0..5usize {
            for j in 0..5usize {
                let expect = if i <= 1 && j <= 1 { 1.0 } else { 0.0 };
                assert_eq!(g.value(y).data[i * 5 + j], expect);
            }
        }
    }

    #[test]
    fn conv2d_gradient_matches_finite_differences() {
        for seed in 0..5 {
            let mut r = ChaCha8Rng::seed_from_u64(100 + seed);
            let x = randn(&[3, 16], &mut r);
            let w = randn(&[2, 27], &mut r);
            let err = grad_check_multi(
                |g, ids| {
                    let y = g.conv2d(ids[0], ids[1], 4, 4, 3);
                    let sq = g.mul(y, y);
                    g.sum(sq)
                },
                &[x, w],
                1e-5,
            );
            assert!(err <= 1e-6, "conv2d grad rel err {err}");
        }
    }

    #[test]
    fn softmax_constant_vector_is_uniform() {
        let mut g = Graph::new();
        let x = g.constant(Tensor::from_vec(&[1, 4], vec![0.7; 4]));
        let y = g.softmax_rows(x);
        for &v in &g.value(y).data {
            assert!((v - 0.25f64).abs() < 1e-15);
        }
    }

    #[test]
    fn softmax_analytic_and_shift_invariance() {
        let mut g = Graph::new();
        let x = g.constant(Tensor::from_vec(&[1, 2], vec![0.0, 3.0f64.ln()]));
        let y = g.softmax_rows(x);
        assert!((g.value(y).data[0] - 0.25).abs() < 1e-12);
        assert!((g.value(y).data[1] - 0.75).abs() < 1e-12);

        let shift = 11.5;
        let xs = g.constant(Tensor::from_vec(&[1, 2], vec![shift, 3.0f64.ln() + shift]));
        let ys = g.softmax_rows(xs);
        for (a, b) in g.value(y).data.clone().iter().zip(g.value(ys).data.iter()) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn softmax_gradient_matches_finite_differences() {
        for seed in 0..5 {
            let mut r = ChaCha8Rng::seed_from_u64(200 + seed);
            let x = randn(&[1, 6], &mut r);
            let err = grad_check(
                |g, x| {
                    let y = g.softmax_rows(x);
                    let w = g.constant(Tensor::from_vec(&[1, 6], vec![1.0, -2.0, 0.5, 3.0, -1.0, 0.25]));
                    let p = g.mul(y, w);
                    g.sum(p)
                },
                &x,
                1e-5,
            );
            assert!(err <= 1e-6, "softmax grad rel err {err}");
        }
    }

    #[test]
    fn bilinear_exact_lattice_point_and_midpoint() {
        let feat = Tensor::from_vec(&[1, 4], vec![0.0, 1.0, 10.0, 11.0]); // 2x2 grid
        let mut g = Graph::new();
        let f = g.constant(feat);
        let pts = g.constant(Tensor::from_vec(&[2, 2], vec![1.0, 0.0, 0.0, 0.5]));
        let y = g.bilinear_sample(f, pts, 2, 2);
        assert_eq!(g.value(y).data[0], 10.0); // exact cell (1,0)
        assert_eq!(g.value(y).data[1], 0.5); // midpoint of 0 and 1
    }

    #[test]
    fn bilinear_matches_four_corner_oracle() {
        // independently coded weighted-sum oracle
        fn oracle(feat: &Tensor<f64>, r: f64, c: f64, h: usize, w: usize, ch: usize) -> f64 {
            let hw = h * w;
            let get = |i: isize, j: isize| -> f64 {
                if i < 0 || j < 0 || i >= h as isize || j >= w as isize {
                    0.0
                } else {
                    feat.data[ch * hw + i as usize * w + j as usize]
                }
            };
            let (i0, j0) = (r.floor() as isize, c.floor() as isize);
            let (fr, fc) = (r - r.floor(), c - c.floor());
            get(i0, j0) * (1.0 - fr) * (1.0 - fc)
                + get(i0 + 1, j0) * fr * (1.0 - fc)
                + get(i0, j0 + 1) * (1.0 - fr) * fc
                + get(i0 + 1, j0 + 1) * fr * fc
        }

        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let feat = randn(&[3, 6 * 5], &mut rng);
        let mut pts = Tensor::zeros(&[100, 2]);
        for i in 0..100 {
            // include out-of-range points
            pts.data[i * 2] = rng.gen_range(-2.0..7.5);
            pts.data[i * 2 + 1] = rng.gen_range(-2.0..6.5);
        }
        let mut g = Graph::new();
        let f = g.constant(feat.clone());
        let p = g.constant(pts.clone());
        let y = g.bilinear_sample(f, p, 6, 5);
        for i in 0..100 {
            for ch in 0..3 {
                let expect = oracle(&feat, pts.data[i * 2], pts.data[i * 2 + 1], 6, 5, ch);
                let got = g.value(y).data[i * 3 + ch];
                assert!((got - expect).abs() <= 1e-12, "point {i} ch {ch}: {got} vs {expect}");
            }
        }
    }

    #[test]
    fn bilinear_gradient_in_both_arguments() {
        for seed in 0..5 {
            let mut r = ChaCha8Rng::seed_from_u64(300 + seed);
            let feat = randn(&[2, 16], &mut r);
            // keep probe points away from integer lattice kinks
            let mut pts = Tensor::zeros(&[6, 2]);
            for i in 0..6 {
                pts.data[i * 2] = r.gen_range(0.0f64..3.0).floor() + r.gen_range(0.2..0.8);
                pts.data[i * 2 + 1] = r.gen_range(0.0f64..3.0).floor() + r.gen_range(0.2..0.8);
            }
            let err = grad_check_multi(
                |g, ids| {
                    let y = g.bilinear_sample(ids[0], ids[1], 4, 4);
                    let sq = g.mul(y, y);
                    g.sum(sq)
                },
                &[feat, pts],
                1e-6,
            );
            assert!(err <= 1e-6, "bilinear grad rel err {err}");
        }
    }

    #[test]
    fn l1_gradient_away_from_kinks() {
        let mut r = ChaCha8Rng::seed_from_u64(17);
        let a = randn(&[3, 2], &mut r);
        let b = randn(&[3, 2], &mut r);
        let err = grad_check_multi(
            |g, ids| g.l1_mean(ids[0], ids[1]),
            &[a, b],
            1e-6,
        );
        assert!(err <= 1e-6, "l1 grad rel err {err}");
    }

    #[test]
    fn finite_diff_check_on_sum() {
        let x = Tensor::from_vec(&[4], vec![0.3, -1.2, 2.0, 0.01]);
        let analytic = Tensor::from_vec(&[4], vec![1.0; 4]);
        let err = finite_diff_check(|t| t.data.iter().sum(), &x, &analytic, 1e-5);
        assert!(err <= 1e-10);
    }

    #[test]
    fn composite_graph_gradient() {
        // conv -> attention-like mix -> L1, full-chain check
        for seed in 0..3 {
            let mut r = ChaCha8Rng::seed_from_u64(400 + seed);
            let x = randn(&[2, 16], &mut r);
            let w = randn(&[4, 18], &mut r);
            let target = randn(&[4, 4], &mut r);
            let err = grad_check_multi(
                |g, ids| {
                    let y = g.conv2d(ids[0], ids[1], 4, 4, 3); // [4,16]
                    let yt = g.transpose(y); // [16,4]
                    let scores = g.matmul(y, yt); // [4,4]
                    let scores = g.scale(scores, 0.25);
                    let attn = g.softmax_rows(scores);
                    let t = g.constant(Tensor::from_vec(&[4, 4], target.data.clone()));
                    g.l1_mean(attn, t)
                },
                &[x, w],
                1e-5,
            );
            assert!(err <= 1e-4, "composite grad rel err {err}");
        }
    }

    #[test]
    fn determinism_same_inputs_same_outputs() {
        let mut r = ChaCha8Rng::seed_from_u64(5);
        let x = randn(&[3, 16], &mut r);
        let w = randn(&[2, 27], &mut r);
        let run = || {
            let mut g = Graph::<f64>::new();
            let xi = g.input(x.clone());
            let wi = g.input(w.clone());
            let y = g.conv2d(xi, wi, 4, 4, 3);
            let s = g.softmax_rows(y);
            let loss = g.sum(s);
            let grads = g.backward(loss);
            (g.value(s).clone(), grads.get(xi).unwrap().clone())
        };
        let (a1, g1) = run();
        let (a2, g2) = run();
        assert_eq!(a1.data, a2.data);
        assert_eq!(g1.data, g2.data);
    }
}
