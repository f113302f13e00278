use super::{axpy, dot, Result, Tensor, TensorError};

/// Handle to a node of a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(pub(crate) usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Which operand of a binary op is broadcast along its trailing axis.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum Bcast {
    None,
    Lhs,
    Rhs,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum ReduceKind {
    Sum,
    Mean,
    L1,
}

struct HsicState {
    kx: Vec<f64>,
    ky: Vec<f64>,
    kx_c: Vec<f64>,
    ky_c: Vec<f64>,
    sigma_x: f64,
    sigma_y: f64,
    n: usize,
}

enum Op {
    Leaf,
    Add { a: Var, b: Var, bc: Bcast },
    Sub { a: Var, b: Var, bc: Bcast },
    Mul { a: Var, b: Var, bc: Bcast },
    Affine { x: Var, scale: f64 },
    Sigmoid(Var),
    Relu(Var),
    Linear { x: Var, w: Var, b: Option<Var> },
    MatMul { a: Var, b: Var },
    Reduce { x: Var, kind: ReduceKind, axis: Option<usize> },
    Concat { parts: Vec<Var>, axis: usize },
    Slice { x: Var, axis: usize, start: usize },
    Reshape(Var),
    Grl { x: Var, lambda: f64 },
    Softmax(Var),
    SoftmaxCe { logits: Var, labels: Vec<usize>, probs: Vec<f64> },
    Bce { p: Var, targets: Vec<f64> },
    Hsic { x: Var, y: Var, state: Box<HsicState> },
}

struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Append-only computation graph.
///
/// Nodes are stored in creation order, which is a valid topological order:
/// every parent has a smaller index than its children.
#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
    hsic_bandwidths: Option<(f64, f64)>,
}

/// Gradients of a scalar root with respect to every node that requires grad.
pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
}

impl Gradients {
    /// Gradient w.r.t. `v`, or `None` when no path reaches it.
    pub fn wrt(&self, v: Var) -> Option<&[f64]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }
}

fn split_axis(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

fn check_finite(op: &'static str, data: &[f64]) -> Result<()> {
    if cfg!(debug_assertions) && data.iter().any(|v| !v.is_finite()) {
        return Err(TensorError::NonFiniteResult { op });
    }
    Ok(())
}

fn median(mut v: Vec<f64>) -> f64 {
    v.sort_by(|a, b| a.total_cmp(b));
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

/// Centers a symmetric `n x n` matrix: `H K H` with `H = I - 11^T / n`.
fn center(k: &[f64], n: usize) -> Vec<f64> {
    let nf = n as f64;
    let row_mean: Vec<f64> = (0..n)
        .map(|i| k[i * n..(i + 1) * n].iter().sum::<f64>() / nf)
        .collect();
    let total = row_mean.iter().sum::<f64>() / nf;
    let mut out = vec![0.0; n * n];
    for i in 0..n {
        for j in 0..n {
            // K is symmetric, so column means equal row means.
            out[i * n + j] = k[i * n + j] - row_mean[i] - row_mean[j] + total;
        }
    }
    out
}

/// Gaussian kernel matrix with median-heuristic bandwidth (floored at 1e-8).
/// Median pairwise Euclidean distance between rows, floored at `1e-8`.
fn median_distance(x: &[f64], n: usize, dim: usize) -> f64 {
    let mut dists = Vec::with_capacity(n * (n.max(1) - 1) / 2);
    for i in 0..n {
        let xi = &x[i * dim..(i + 1) * dim];
        for j in (i + 1)..n {
            let xj = &x[j * dim..(j + 1) * dim];
            dists.push(xi.iter().zip(xj).map(|(a, b)| (a - b) * (a - b)).sum::<f64>().sqrt());
        }
    }
    median(dists).max(1e-8)
}

/// Median-heuristic kernel bandwidth of the rows of a rank-2 tensor.
pub fn median_bandwidth(x: &Tensor) -> f64 {
    let s = x.shape();
    median_distance(x.data(), s[0], s.get(1).copied().unwrap_or(1))
}

fn gaussian_kernel(x: &[f64], n: usize, dim: usize, sigma: Option<f64>) -> (Vec<f64>, f64) {
    let mut sq = vec![0.0; n * n];
    for i in 0..n {
        let xi = &x[i * dim..(i + 1) * dim];
        for j in (i + 1)..n {
            let xj = &x[j * dim..(j + 1) * dim];
            let d2: f64 = xi.iter().zip(xj).map(|(a, b)| (a - b) * (a - b)).sum();
            sq[i * n + j] = d2;
            sq[j * n + i] = d2;
        }
    }
    let sigma = sigma.unwrap_or_else(|| {
        let dists = (0..n).flat_map(|i| ((i + 1)..n).map(move |j| (i, j))).map(|(i, j)| sq[i * n + j].sqrt());
        median(dists.collect()).max(1e-8)
    });
    let denom = 2.0 * sigma * sigma;
    let k = sq.iter().map(|d2| (-d2 / denom).exp()).collect();
    (k, sigma)
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    /// Uses `(sigma_x, sigma_y)` for every later `hsic` node instead of the
    /// median heuristic; `None` restores the heuristic.
    pub fn fix_hsic_bandwidths(&mut self, bandwidths: Option<(f64, f64)>) {
        self.hsic_bandwidths = bandwidths;
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Adds a differentiable input.
    pub fn leaf(&mut self, value: Tensor) -> Var {
        self.push_node(value, Op::Leaf, true)
    }

    /// Adds an input that never receives gradient.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push_node(value, Op::Leaf, false)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn push_node(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn push(&mut self, name: &'static str, shape: Vec<usize>, data: Vec<f64>, op: Op, rg: bool) -> Result<Var> {
        check_finite(name, &data)?;
        Ok(self.push_node(Tensor::from_parts(shape, data), op, rg))
    }

    fn rg(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    fn broadcast_kind(&self, op: &'static str, a: Var, b: Var) -> Result<(Bcast, Vec<usize>)> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa == sb {
            return Ok((Bcast::None, sa.to_vec()));
        }
        let trailing_one = |full: &[usize], small: &[usize]| {
            !full.is_empty()
                && full.len() == small.len()
                && small[small.len() - 1] == 1
                && full[..full.len() - 1] == small[..small.len() - 1]
        };
        if trailing_one(sa, sb) {
            Ok((Bcast::Rhs, sa.to_vec()))
        } else if trailing_one(sb, sa) {
            Ok((Bcast::Lhs, sb.to_vec()))
        } else {
            Err(TensorError::ShapeMismatch {
                op,
                lhs: sa.to_vec(),
                rhs: sb.to_vec(),
            })
        }
    }

    fn binary(&mut self, name: &'static str, a: Var, b: Var, f: impl Fn(f64, f64) -> f64) -> Result<(Var, Bcast)> {
        let (bc, shape) = self.broadcast_kind(name, a, b)?;
        let last = *shape.last().unwrap_or(&1);
        let (va, vb) = (self.value(a).data(), self.value(b).data());
        let n: usize = shape.iter().product();
        let data: Vec<f64> = (0..n)
            .map(|t| {
                let ia = if bc == Bcast::Lhs { t / last } else { t };
                let ib = if bc == Bcast::Rhs { t / last } else { t };
                f(va[ia], vb[ib])
            })
            .collect();
        let rg = self.rg(&[a, b]);
        let op = match name {
            "add" => Op::Add { a, b, bc },
            "sub" => Op::Sub { a, b, bc },
            _ => Op::Mul { a, b, bc },
        };
        Ok((self.push(name, shape, data, op, rg)?, bc))
    }

    /// Elementwise `a + b`; either operand may be broadcast along a trailing axis of size 1.
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        Ok(self.binary("add", a, b, |x, y| x + y)?.0)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        Ok(self.binary("sub", a, b, |x, y| x - y)?.0)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        Ok(self.binary("mul", a, b, |x, y| x * y)?.0)
    }

    /// `scale * x + shift`.
    pub fn affine(&mut self, x: Var, scale: f64, shift: f64) -> Result<Var> {
        let t = self.value(x);
        let shape = t.shape().to_vec();
        let data = t.data().iter().map(|v| scale * v + shift).collect();
        let rg = self.rg(&[x]);
        self.push("affine", shape, data, Op::Affine { x, scale }, rg)
    }

    pub fn scale(&mut self, x: Var, c: f64) -> Result<Var> {
        self.affine(x, c, 0.0)
    }

    pub fn neg(&mut self, x: Var) -> Result<Var> {
        self.affine(x, -1.0, 0.0)
    }

    /// `1 - x`.
    pub fn one_minus(&mut self, x: Var) -> Result<Var> {
        self.affine(x, -1.0, 1.0)
    }

    pub fn sigmoid(&mut self, x: Var) -> Result<Var> {
        let t = self.value(x);
        let shape = t.shape().to_vec();
        let data = t
            .data()
            .iter()
            .map(|&v| {
                if v >= 0.0 {
                    1.0 / (1.0 + (-v).exp())
                } else {
                    let e = v.exp();
                    e / (1.0 + e)
                }
            })
            .collect();
        let rg = self.rg(&[x]);
        self.push("sigmoid", shape, data, Op::Sigmoid(x), rg)
    }

    pub fn relu(&mut self, x: Var) -> Result<Var> {
        let t = self.value(x);
        let shape = t.shape().to_vec();
        let data = t.data().iter().map(|&v| v.max(0.0)).collect();
        let rg = self.rg(&[x]);
        self.push("relu", shape, data, Op::Relu(x), rg)
    }

    /// `x · wᵀ + b` for `x: [B, in]`, `w: [out, in]`, `b: [out]`.
    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        let (sx, sw) = (self.shape(x), self.shape(w));
        if sx.len() != 2 || sw.len() != 2 || sx[1] != sw[1] {
            return Err(TensorError::ShapeMismatch {
                op: "linear",
                lhs: sx.to_vec(),
                rhs: sw.to_vec(),
            });
        }
        let (rows, inp, out) = (sx[0], sx[1], sw[0]);
        if let Some(b) = b {
            if self.shape(b) != [out] {
                return Err(TensorError::ShapeMismatch {
                    op: "linear bias",
                    lhs: vec![out],
                    rhs: self.shape(b).to_vec(),
                });
            }
        }
        let (xv, wv) = (self.value(x).data(), self.value(w).data());
        let bv = b.map(|b| self.value(b).data());
        let mut data = vec![0.0; rows * out];
        for i in 0..rows {
            let xi = &xv[i * inp..(i + 1) * inp];
            let yi = &mut data[i * out..(i + 1) * out];
            for o in 0..out {
                yi[o] = dot(xi, &wv[o * inp..(o + 1) * inp]) + bv.map_or(0.0, |bv| bv[o]);
            }
        }
        let mut parents = vec![x, w];
        parents.extend(b);
        let rg = self.rg(&parents);
        self.push("linear", vec![rows, out], data, Op::Linear { x, w, b }, rg)
    }

    /// Matrix product `[m, k] · [k, n]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(TensorError::ShapeMismatch {
                op: "matmul",
                lhs: sa.to_vec(),
                rhs: sb.to_vec(),
            });
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let (av, bv) = (self.value(a).data(), self.value(b).data());
        let mut data = vec![0.0; m * n];
        for i in 0..m {
            let ci = &mut data[i * n..(i + 1) * n];
            for p in 0..k {
                axpy(av[i * k + p], &bv[p * n..(p + 1) * n], ci);
            }
        }
        let rg = self.rg(&[a, b]);
        self.push("matmul", vec![m, n], data, Op::MatMul { a, b }, rg)
    }

    fn reduce(&mut self, x: Var, kind: ReduceKind, axis: Option<usize>) -> Result<Var> {
        let t = self.value(x);
        let f = |v: f64| if kind == ReduceKind::L1 { v.abs() } else { v };
        let (shape, data) = match axis {
            None => {
                let s: f64 = t.data().iter().map(|&v| f(v)).sum();
                let s = if kind == ReduceKind::Mean { s / t.len() as f64 } else { s };
                (Vec::new(), vec![s])
            }
            Some(axis) => {
                if axis >= t.rank() {
                    return Err(TensorError::InvalidAxis {
                        op: "reduce",
                        axis,
                        rank: t.rank(),
                    });
                }
                let (outer, len, inner) = split_axis(t.shape(), axis);
                let v = t.data();
                let mut out = vec![0.0; outer * inner];
                for o in 0..outer {
                    for a in 0..len {
                        let base = (o * len + a) * inner;
                        for i in 0..inner {
                            out[o * inner + i] += f(v[base + i]);
                        }
                    }
                }
                if kind == ReduceKind::Mean {
                    out.iter_mut().for_each(|s| *s /= len as f64);
                }
                let mut shape = t.shape().to_vec();
                shape.remove(axis);
                (shape, out)
            }
        };
        let rg = self.rg(&[x]);
        self.push("reduce", shape, data, Op::Reduce { x, kind, axis }, rg)
    }

    pub fn sum(&mut self, x: Var, axis: Option<usize>) -> Result<Var> {
        self.reduce(x, ReduceKind::Sum, axis)
    }

    pub fn mean(&mut self, x: Var, axis: Option<usize>) -> Result<Var> {
        self.reduce(x, ReduceKind::Mean, axis)
    }

    /// Sum of absolute values; the subgradient at 0 is 0.
    pub fn l1_norm(&mut self, x: Var, axis: Option<usize>) -> Result<Var> {
        self.reduce(x, ReduceKind::L1, axis)
    }

    pub fn concat(&mut self, parts: &[Var], axis: usize) -> Result<Var> {
        let first = self.shape(parts[0]).to_vec();
        if axis >= first.len() {
            return Err(TensorError::InvalidAxis {
                op: "concat",
                axis,
                rank: first.len(),
            });
        }
        let mut total = 0;
        for &p in parts {
            let s = self.shape(p);
            let compatible = s.len() == first.len()
                && s.iter().zip(&first).enumerate().all(|(i, (a, b))| i == axis || a == b);
            if !compatible {
                return Err(TensorError::ShapeMismatch {
                    op: "concat",
                    lhs: first,
                    rhs: s.to_vec(),
                });
            }
            total += s[axis];
        }
        let (outer, _, inner) = split_axis(&first, axis);
        let mut data = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for &p in parts {
                let len = self.shape(p)[axis] * inner;
                data.extend_from_slice(&self.value(p).data()[o * len..(o + 1) * len]);
            }
        }
        let mut shape = first;
        shape[axis] = total;
        let rg = self.rg(parts);
        self.push(
            "concat",
            shape,
            data,
            Op::Concat {
                parts: parts.to_vec(),
                axis,
            },
            rg,
        )
    }

    /// Sub-range `start..end` of axis `axis`.
    pub fn slice(&mut self, x: Var, axis: usize, start: usize, end: usize) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if axis >= shape.len() {
            return Err(TensorError::InvalidAxis {
                op: "slice",
                axis,
                rank: shape.len(),
            });
        }
        if start >= end || end > shape[axis] {
            return Err(TensorError::OutOfRange {
                start,
                end,
                len: shape[axis],
            });
        }
        let (outer, len, inner) = split_axis(&shape, axis);
        let v = self.value(x).data();
        let mut data = Vec::with_capacity(outer * (end - start) * inner);
        for o in 0..outer {
            data.extend_from_slice(&v[(o * len + start) * inner..(o * len + end) * inner]);
        }
        let mut out_shape = shape;
        out_shape[axis] = end - start;
        let rg = self.rg(&[x]);
        self.push("slice", out_shape, data, Op::Slice { x, axis, start }, rg)
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let t = self.value(x).reshape(shape)?;
        let rg = self.rg(&[x]);
        Ok(self.push_node(t, Op::Reshape(x), rg))
    }

    /// Gradient reversal: identity forward, multiplies the backward gradient by `-lambda`.
    pub fn grl(&mut self, x: Var, lambda: f64) -> Result<Var> {
        if !(lambda >= 0.0) || !lambda.is_finite() {
            return Err(TensorError::Invalid {
                op: "grl",
                msg: format!("lambda must be finite and non-negative, got {lambda}"),
            });
        }
        let t = self.value(x).clone();
        let rg = self.rg(&[x]);
        Ok(self.push_node(t, Op::Grl { x, lambda }, rg))
    }

    /// Softmax over the last axis.
    pub fn softmax(&mut self, x: Var) -> Result<Var> {
        let t = self.value(x);
        let shape = t.shape().to_vec();
        let m = *shape.last().unwrap_or(&1);
        let mut data = t.data().to_vec();
        for row in data.chunks_mut(m) {
            softmax_in_place(row);
        }
        let rg = self.rg(&[x]);
        self.push("softmax", shape, data, Op::Softmax(x), rg)
    }

    /// Mean over rows of `-log softmax(logits)[label]`.
    pub fn softmax_cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        let s = self.shape(logits).to_vec();
        if s.len() != 2 || s[0] != labels.len() {
            return Err(TensorError::ShapeMismatch {
                op: "softmax_cross_entropy",
                lhs: s,
                rhs: vec![labels.len()],
            });
        }
        let (rows, m) = (s[0], s[1]);
        if let Some(&bad) = labels.iter().find(|&&l| l >= m) {
            return Err(TensorError::Invalid {
                op: "softmax_cross_entropy",
                msg: format!("label {bad} out of range for {m} classes"),
            });
        }
        let mut probs = self.value(logits).data().to_vec();
        let mut loss = 0.0;
        for (row, &label) in probs.chunks_mut(m).zip(labels) {
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lse = max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
            loss += lse - row[label];
            softmax_in_place(row);
        }
        let rg = self.rg(&[logits]);
        self.push(
            "softmax_cross_entropy",
            Vec::new(),
            vec![loss / rows as f64],
            Op::SoftmaxCe {
                logits,
                labels: labels.to_vec(),
                probs,
            },
            rg,
        )
    }

    /// Mean binary cross-entropy of probabilities `p` (clamped to `[1e-7, 1-1e-7]`)
    /// against 0/1 targets.
    pub fn binary_cross_entropy(&mut self, p: Var, targets: &[f64]) -> Result<Var> {
        let pv = self.value(p).data();
        if pv.len() != targets.len() {
            return Err(TensorError::ShapeMismatch {
                op: "binary_cross_entropy",
                lhs: self.shape(p).to_vec(),
                rhs: vec![targets.len()],
            });
        }
        if targets.iter().any(|&t| t != 0.0 && t != 1.0) {
            return Err(TensorError::Invalid {
                op: "binary_cross_entropy",
                msg: "targets must be 0 or 1".into(),
            });
        }
        let loss = pv
            .iter()
            .zip(targets)
            .map(|(&p, &t)| {
                let p = p.clamp(BCE_EPS, 1.0 - BCE_EPS);
                -(t * p.ln() + (1.0 - t) * (1.0 - p).ln())
            })
            .sum::<f64>()
            / pv.len() as f64;
        let rg = self.rg(&[p]);
        self.push(
            "binary_cross_entropy",
            Vec::new(),
            vec![loss],
            Op::Bce {
                p,
                targets: targets.to_vec(),
            },
            rg,
        )
    }

    /// Biased HSIC estimate `tr(Kx H Ky H) / (n-1)^2` between the rows of two
    /// rank-2 tensors, Gaussian kernels with median-heuristic bandwidths.
    ///
    /// The bandwidths are treated as constants when differentiating.
    /// [`Graph::fix_hsic_bandwidths`] replaces the heuristic.
    pub fn hsic(&mut self, x: Var, y: Var) -> Result<Var> {
        let (sx, sy) = (self.shape(x).to_vec(), self.shape(y).to_vec());
        if sx.len() != 2 || sy.len() != 2 || sx[0] != sy[0] {
            return Err(TensorError::ShapeMismatch {
                op: "hsic",
                lhs: sx,
                rhs: sy,
            });
        }
        let n = sx[0];
        if n < 4 {
            return Err(TensorError::Invalid {
                op: "hsic",
                msg: format!("needs at least 4 samples, got {n}"),
            });
        }
        let fixed = self.hsic_bandwidths;
        let (kx, sigma_x) = gaussian_kernel(self.value(x).data(), n, sx[1], fixed.map(|f| f.0));
        let (ky, sigma_y) = gaussian_kernel(self.value(y).data(), n, sy[1], fixed.map(|f| f.1));
        let kx_c = center(&kx, n);
        let ky_c = center(&ky, n);
        let norm = ((n - 1) * (n - 1)) as f64;
        let value = kx_c.iter().zip(&ky_c).map(|(a, b)| a * b).sum::<f64>() / norm;
        let rg = self.rg(&[x, y]);
        let state = Box::new(HsicState {
            kx,
            ky,
            kx_c,
            ky_c,
            sigma_x,
            sigma_y,
            n,
        });
        self.push("hsic", Vec::new(), vec![value], Op::Hsic { x, y, state }, rg)
    }

    /// Reverse sweep from a scalar root.
    pub fn backward(&self, root: Var) -> Result<Gradients> {
        let root_value = self.value(root);
        if root_value.len() != 1 {
            return Err(TensorError::NonScalarRoot(root_value.shape().to_vec()));
        }
        let mut grads: Vec<Option<Vec<f64>>> = Vec::new();
        grads.resize_with(root.0 + 1, || None);
        if self.nodes[root.0].requires_grad {
            grads[root.0] = Some(vec![1.0]);
        }
        for i in (0..=root.0).rev() {
            let (lo, hi) = grads.split_at_mut(i);
            let Some(g) = hi[0].as_deref() else { continue };
            self.propagate(i, g, lo);
        }
        Ok(Gradients { grads })
    }

    fn slot<'a>(&self, lo: &'a mut [Option<Vec<f64>>], v: Var) -> Option<&'a mut Vec<f64>> {
        if !self.nodes[v.0].requires_grad {
            return None;
        }
        let len = self.nodes[v.0].value.len();
        Some(lo[v.0].get_or_insert_with(|| vec![0.0; len]))
    }

    fn propagate(&self, i: usize, g: &[f64], lo: &mut [Option<Vec<f64>>]) {
        let node = &self.nodes[i];
        match &node.op {
            Op::Leaf => {}
            Op::Add { a, b, bc } | Op::Sub { a, b, bc } | Op::Mul { a, b, bc } => {
                let last = *node.value.shape().last().unwrap_or(&1);
                let idx = |t: usize, side: Bcast| if *bc == side { t / last } else { t };
                let (sa, sb) = match &node.op {
                    Op::Add { .. } => (1.0, 1.0),
                    Op::Sub { .. } => (1.0, -1.0),
                    _ => (0.0, 0.0),
                };
                let is_mul = matches!(node.op, Op::Mul { .. });
                let (va, vb) = (self.value(*a).data(), self.value(*b).data());
                if let Some(ga) = self.slot(lo, *a) {
                    for (t, &gt) in g.iter().enumerate() {
                        let d = if is_mul { vb[idx(t, Bcast::Rhs)] } else { sa };
                        ga[idx(t, Bcast::Lhs)] += gt * d;
                    }
                }
                if let Some(gb) = self.slot(lo, *b) {
                    for (t, &gt) in g.iter().enumerate() {
                        let d = if is_mul { va[idx(t, Bcast::Lhs)] } else { sb };
                        gb[idx(t, Bcast::Rhs)] += gt * d;
                    }
                }
            }
            Op::Affine { x, scale } => {
                if let Some(gx) = self.slot(lo, *x) {
                    axpy(*scale, g, gx);
                }
            }
            Op::Sigmoid(x) => {
                let y = node.value.data();
                if let Some(gx) = self.slot(lo, *x) {
                    for ((d, &gt), &yv) in gx.iter_mut().zip(g).zip(y) {
                        *d += gt * yv * (1.0 - yv);
                    }
                }
            }
            Op::Relu(x) => {
                let xv = self.value(*x).data();
                if let Some(gx) = self.slot(lo, *x) {
                    for ((d, &gt), &v) in gx.iter_mut().zip(g).zip(xv) {
                        if v > 0.0 {
                            *d += gt;
                        }
                    }
                }
            }
            Op::Linear { x, w, b } => {
                let (sx, sw) = (self.shape(*x), self.shape(*w));
                let (rows, inp, out) = (sx[0], sx[1], sw[0]);
                let (xv, wv) = (self.value(*x).data(), self.value(*w).data());
                if let Some(gx) = self.slot(lo, *x) {
                    for r in 0..rows {
                        let gxr = &mut gx[r * inp..(r + 1) * inp];
                        for o in 0..out {
                            let gt = g[r * out + o];
                            if gt != 0.0 {
                                axpy(gt, &wv[o * inp..(o + 1) * inp], gxr);
                            }
                        }
                    }
                }
                if let Some(gw) = self.slot(lo, *w) {
                    for r in 0..rows {
                        let xr = &xv[r * inp..(r + 1) * inp];
                        for o in 0..out {
                            let gt = g[r * out + o];
                            if gt != 0.0 {
                                axpy(gt, xr, &mut gw[o * inp..(o + 1) * inp]);
                            }
                        }
                    }
                }
                if let Some(b) = b {
                    if let Some(gb) = self.slot(lo, *b) {
                        for r in 0..rows {
                            axpy(1.0, &g[r * out..(r + 1) * out], gb);
                        }
                    }
                }
            }
            Op::MatMul { a, b } => {
                let (sa, sb) = (self.shape(*a), self.shape(*b));
                let (m, k, n) = (sa[0], sa[1], sb[1]);
                let (av, bv) = (self.value(*a).data(), self.value(*b).data());
                if let Some(ga) = self.slot(lo, *a) {
                    for r in 0..m {
                        for p in 0..k {
                            ga[r * k + p] += dot(&g[r * n..(r + 1) * n], &bv[p * n..(p + 1) * n]);
                        }
                    }
                }
                if let Some(gb) = self.slot(lo, *b) {
                    for r in 0..m {
                        for p in 0..k {
                            axpy(av[r * k + p], &g[r * n..(r + 1) * n], &mut gb[p * n..(p + 1) * n]);
                        }
                    }
                }
            }
            Op::Reduce { x, kind, axis } => {
                let xt = self.value(*x);
                let xv = xt.data();
                let (outer, len, inner) = match axis {
                    None => (1, xv.len(), 1),
                    Some(a) => split_axis(xt.shape(), *a),
                };
                let coef = if *kind == ReduceKind::Mean { 1.0 / len as f64 } else { 1.0 };
                if let Some(gx) = self.slot(lo, *x) {
                    for o in 0..outer {
                        for a in 0..len {
                            for inn in 0..inner {
                                let t = (o * len + a) * inner + inn;
                                let up = g[o * inner + inn] * coef;
                                gx[t] += match kind {
                                    ReduceKind::L1 => {
                                        if xv[t] > 0.0 {
                                            up
                                        } else if xv[t] < 0.0 {
                                            -up
                                        } else {
                                            0.0
                                        }
                                    }
                                    _ => up,
                                };
                            }
                        }
                    }
                }
            }
            Op::Concat { parts, axis } => {
                let shape = node.value.shape();
                let (outer, total, inner) = split_axis(shape, *axis);
                let mut offset = 0;
                for &p in parts {
                    let plen = self.shape(p)[*axis];
                    if let Some(gp) = self.slot(lo, p) {
                        for o in 0..outer {
                            let src = &g[(o * total + offset) * inner..(o * total + offset + plen) * inner];
                            axpy(1.0, src, &mut gp[o * plen * inner..(o + 1) * plen * inner]);
                        }
                    }
                    offset += plen;
                }
            }
            Op::Slice { x, axis, start } => {
                let (outer, len, inner) = split_axis(self.shape(*x), *axis);
                let width = node.value.shape()[*axis];
                if let Some(gx) = self.slot(lo, *x) {
                    for o in 0..outer {
                        let dst = &mut gx[(o * len + start) * inner..(o * len + start + width) * inner];
                        axpy(1.0, &g[o * width * inner..(o + 1) * width * inner], dst);
                    }
                }
            }
            Op::Reshape(x) => {
                if let Some(gx) = self.slot(lo, *x) {
                    axpy(1.0, g, gx);
                }
            }
            Op::Grl { x, lambda } => {
                if let Some(gx) = self.slot(lo, *x) {
                    axpy(-lambda, g, gx);
                }
            }
            Op::Softmax(x) => {
                let y = node.value.data();
                let m = *node.value.shape().last().unwrap_or(&1);
                if let Some(gx) = self.slot(lo, *x) {
                    for ((gr, yr), dr) in g.chunks(m).zip(y.chunks(m)).zip(gx.chunks_mut(m)) {
                        let s = dot(gr, yr);
                        for j in 0..m {
                            dr[j] += yr[j] * (gr[j] - s);
                        }
                    }
                }
            }
            Op::SoftmaxCe { logits, labels, probs } => {
                let m = self.shape(*logits)[1];
                let scale = g[0] / labels.len() as f64;
                if let Some(gx) = self.slot(lo, *logits) {
                    for (r, &label) in labels.iter().enumerate() {
                        for j in 0..m {
                            let onehot = if j == label { 1.0 } else { 0.0 };
                            gx[r * m + j] += scale * (probs[r * m + j] - onehot);
                        }
                    }
                }
            }
            Op::Bce { p, targets } => {
                let pv = self.value(*p).data();
                let scale = g[0] / pv.len() as f64;
                if let Some(gp) = self.slot(lo, *p) {
                    for ((d, &pr), &t) in gp.iter_mut().zip(pv).zip(targets) {
                        if (BCE_EPS..=1.0 - BCE_EPS).contains(&pr) {
                            *d += scale * (-t / pr + (1.0 - t) / (1.0 - pr));
                        }
                    }
                }
            }
            Op::Hsic { x, y, state } => {
                let n = state.n;
                let norm = g[0] / ((n - 1) * (n - 1)) as f64;
                let sides = [
                    (*x, &state.kx, &state.ky_c, state.sigma_x),
                    (*y, &state.ky, &state.kx_c, state.sigma_y),
                ];
                for (v, k, other_c, sigma) in sides {
                    let dim = self.shape(v)[1];
                    let xv = self.value(v).data();
                    if let Some(gv) = self.slot(lo, v) {
                        // dL/dK = other_c * norm; W = dL/dK ∘ K.
                        let c = -2.0 / (sigma * sigma);
                        for r in 0..n {
                            let xr = &xv[r * dim..(r + 1) * dim];
                            let gr = &mut gv[r * dim..(r + 1) * dim];
                            for j in 0..n {
                                if j == r {
                                    continue;
                                }
                                let w = norm * other_c[r * n + j] * k[r * n + j];
                                if w == 0.0 {
                                    continue;
                                }
                                let xj = &xv[j * dim..(j + 1) * dim];
                                for t in 0..dim {
                                    gr[t] += c * w * (xr[t] - xj[t]);
                                }
                            }
                        }
                    }
                }
            }
        }
    }

    /// Relu and L1 inputs closer than `margin` to the kink at zero.
    pub fn kink_inputs(&self, margin: f64) -> Vec<(Var, Vec<usize>)> {
        let mut out = Vec::new();
        for node in &self.nodes {
            let x = match node.op {
                Op::Relu(x) => x,
                Op::Reduce {
                    x,
                    kind: ReduceKind::L1,
                    ..
                } => x,
                _ => continue,
            };
            let near: Vec<usize> = self
                .value(x)
                .data()
                .iter()
                .enumerate()
                .filter(|(_, v)| v.abs() < margin)
                .map(|(i, _)| i)
                .collect();
            if !near.is_empty() {
                out.push((x, near));
            }
        }
        out
    }
}

pub(crate) const BCE_EPS: f64 = 1e-7;

pub(crate) fn softmax_in_place(row: &mut [f64]) {
    let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut total = 0.0;
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        total += *v;
    }
    for v in row.iter_mut() {
        *v /= total;
    }
}
