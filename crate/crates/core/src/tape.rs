//! Reverse-mode automatic differentiation over 2-D tensors.
//!
//! A `Tape` records a Wengert list of primitive operations; `backward` walks
//! the list in reverse, accumulating adjoints. Roots must be scalars (1×1).
//! Leaves carry no backward rule — parameter gradients are read off the leaf
//! adjoints after the sweep.

use crate::scalar::{cast, Real};
use crate::tensor::Tensor;

/// Handle to a node on a tape. Only valid for the tape that produced it.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

enum Op<T> {
    Leaf,
    Add,
    Sub,
    Mul,
    Neg,
    Exp,
    Scale(T),
    AddScalar(T),
    MinPair,
    Clip { lo: T, hi: T },
    MatMul,
    MatMulNt,
    AddRow,
    MulRow,
    SliceCols { lo: usize },
    ConcatCols,
    GatherRows { ids: Vec<usize> },
    GatherEntries { coords: Vec<(usize, usize)> },
    LayerNormRows { eps: T },
    SoftmaxRows,
    LogSoftmaxRows,
    Gelu,
    MeanAll,
    SumAll,
}

struct Node<T> {
    op: Op<T>,
    parents: Vec<Var>,
    value: Tensor<T>,
}

pub struct Tape<T> {
    nodes: Vec<Node<T>>,
}

impl<T: Real> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044715;

fn gelu_val<T: Real>(x: T) -> T {
    let c = cast::<T>(GELU_C);
    let a = cast::<T>(GELU_A);
    let half = cast::<T>(0.5);
    let u = c * (x + a * x * x * x);
    half * x * (T::one() + u.tanh())
}

fn gelu_grad<T: Real>(x: T) -> T {
    let c = cast::<T>(GELU_C);
    let a = cast::<T>(GELU_A);
    let half = cast::<T>(0.5);
    let three = cast::<T>(3.0);
    let u = c * (x + a * x * x * x);
    let t = u.tanh();
    let du = c * (T::one() + three * a * x * x);
    half * (T::one() + t) + half * x * (T::one() - t * t) * du
}

fn softmax_rows<T: Real>(x: &Tensor<T>) -> Tensor<T> {
    let mut out = x.clone();
    for r in 0..out.rows() {
        let row = out.row_mut(r);
        let mx = row.iter().copied().fold(T::neg_infinity(), T::max);
        let mut z = T::zero();
        for v in row.iter_mut() {
            *v = (*v - mx).exp();
            z += *v;
        }
        for v in row.iter_mut() {
            *v /= z;
        }
    }
    out
}

fn log_softmax_rows<T: Real>(x: &Tensor<T>) -> Tensor<T> {
    let mut out = x.clone();
    for r in 0..out.rows() {
        let row = out.row_mut(r);
        let mx = row.iter().copied().fold(T::neg_infinity(), T::max);
        let mut z = T::zero();
        for &v in row.iter() {
            z += (v - mx).exp();
        }
        let lse = mx + z.ln();
        for v in row.iter_mut() {
            *v -= lse;
        }
    }
    out
}

impl<T: Real> Tape<T> {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    fn push(&mut self, op: Op<T>, parents: Vec<Var>, value: Tensor<T>) -> Var {
        self.nodes.push(Node { op, parents, value });
        Var(self.nodes.len() - 1)
    }

    pub fn leaf(&mut self, value: Tensor<T>) -> Var {
        self.push(Op::Leaf, vec![], value)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a).zip(self.value(b), |x, y| x + y);
        self.push(Op::Add, vec![a, b], v)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a).zip(self.value(b), |x, y| x - y);
        self.push(Op::Sub, vec![a, b], v)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a).zip(self.value(b), |x, y| x * y);
        self.push(Op::Mul, vec![a, b], v)
    }

    pub fn neg(&mut self, a: Var) -> Var {
        let v = self.value(a).map(|x| -x);
        self.push(Op::Neg, vec![a], v)
    }

    pub fn exp(&mut self, a: Var) -> Var {
        let v = self.value(a).map(|x| x.exp());
        self.push(Op::Exp, vec![a], v)
    }

    pub fn scale(&mut self, a: Var, c: T) -> Var {
        let v = self.value(a).map(|x| x * c);
        self.push(Op::Scale(c), vec![a], v)
    }

    pub fn add_scalar(&mut self, a: Var, c: T) -> Var {
        let v = self.value(a).map(|x| x + c);
        self.push(Op::AddScalar(c), vec![a], v)
    }

    /// Elementwise minimum; ties route the gradient to the first operand.
    pub fn min_pair(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a).zip(self.value(b), |x, y| if x <= y { x } else { y });
        self.push(Op::MinPair, vec![a, b], v)
    }

    /// Clamp to `[lo, hi]`; gradient passes only strictly inside the band
    /// (inclusive ends), matching the usual clipped-objective convention.
    pub fn clip(&mut self, a: Var, lo: T, hi: T) -> Var {
        let v = self.value(a).map(|x| x.max(lo).min(hi));
        self.push(Op::Clip { lo, hi }, vec![a], v)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a).matmul(self.value(b));
        self.push(Op::MatMul, vec![a, b], v)
    }

    /// `a @ bᵀ`.
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a).matmul_nt(self.value(b));
        self.push(Op::MatMulNt, vec![a, b], v)
    }

    /// Broadcast-add a `1×n` row onto an `m×n` matrix.
    pub fn add_row(&mut self, a: Var, row: Var) -> Var {
        let (m, n) = self.value(a).shape();
        assert_eq!(self.value(row).shape(), (1, n), "add_row shape mismatch");
        let mut v = self.value(a).clone();
        for r in 0..m {
            for c in 0..n {
                let x = v.get(r, c) + self.value(row).get(0, c);
                v.set(r, c, x);
            }
        }
        self.push(Op::AddRow, vec![a, row], v)
    }

    /// Broadcast-multiply a `1×n` row onto an `m×n` matrix.
    pub fn mul_row(&mut self, a: Var, row: Var) -> Var {
        let (m, n) = self.value(a).shape();
        assert_eq!(self.value(row).shape(), (1, n), "mul_row shape mismatch");
        let mut v = self.value(a).clone();
        for r in 0..m {
            for c in 0..n {
                let x = v.get(r, c) * self.value(row).get(0, c);
                v.set(r, c, x);
            }
        }
        self.push(Op::MulRow, vec![a, row], v)
    }

    pub fn slice_cols(&mut self, a: Var, lo: usize, hi: usize) -> Var {
        let (m, n) = self.value(a).shape();
        assert!(lo < hi && hi <= n, "slice_cols out of range");
        let mut v = Tensor::zeros(m, hi - lo);
        for r in 0..m {
            for c in lo..hi {
                v.set(r, c - lo, self.value(a).get(r, c));
            }
        }
        self.push(Op::SliceCols { lo }, vec![a], v)
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Var {
        assert!(!parts.is_empty(), "concat_cols needs at least one part");
        let m = self.value(parts[0]).rows();
        let total: usize = parts.iter().map(|&p| self.value(p).cols()).sum();
        let mut v = Tensor::zeros(m, total);
        let mut off = 0;
        for &p in parts {
            let t = self.value(p);
            assert_eq!(t.rows(), m, "concat_cols row mismatch");
            for r in 0..m {
                for c in 0..t.cols() {
                    v.set(r, off + c, t.get(r, c));
                }
            }
            off += t.cols();
        }
        self.push(Op::ConcatCols, parts.to_vec(), v)
    }

    /// `out[i, :] = a[ids[i], :]`; repeated ids accumulate in backward.
    pub fn gather_rows(&mut self, a: Var, ids: &[usize]) -> Var {
        let (rows, n) = self.value(a).shape();
        let mut v = Tensor::zeros(ids.len(), n);
        for (i, &id) in ids.iter().enumerate() {
            assert!(id < rows, "gather_rows id out of range");
            for c in 0..n {
                v.set(i, c, self.value(a).get(id, c));
            }
        }
        self.push(Op::GatherRows { ids: ids.to_vec() }, vec![a], v)
    }

    /// `out[j, 0] = a[r_j, c_j]` for each coordinate pair.
    pub fn gather_entries(&mut self, a: Var, coords: &[(usize, usize)]) -> Var {
        let (rows, cols) = self.value(a).shape();
        let mut v = Tensor::zeros(coords.len(), 1);
        for (j, &(r, c)) in coords.iter().enumerate() {
            assert!(r < rows && c < cols, "gather_entries coord out of range");
            v.set(j, 0, self.value(a).get(r, c));
        }
        self.push(Op::GatherEntries { coords: coords.to_vec() }, vec![a], v)
    }

    /// Row-wise `(x − μ) / √(σ² + eps)`; affine gain/shift are separate ops.
    pub fn layer_norm_rows(&mut self, a: Var, eps: T) -> Var {
        let x = self.value(a);
        let (m, n) = x.shape();
        let nn = cast::<T>(n as f64);
        let mut v = Tensor::zeros(m, n);
        for r in 0..m {
            let row = x.row(r);
            let mu = row.iter().copied().sum::<T>() / nn;
            let var = row.iter().map(|&e| (e - mu) * (e - mu)).sum::<T>() / nn;
            let inv = (var + eps).sqrt().recip();
            for c in 0..n {
                v.set(r, c, (row[c] - mu) * inv);
            }
        }
        self.push(Op::LayerNormRows { eps }, vec![a], v)
    }

    pub fn softmax_rows(&mut self, a: Var) -> Var {
        let v = softmax_rows(self.value(a));
        self.push(Op::SoftmaxRows, vec![a], v)
    }

    pub fn log_softmax_rows(&mut self, a: Var) -> Var {
        let v = log_softmax_rows(self.value(a));
        self.push(Op::LogSoftmaxRows, vec![a], v)
    }

    pub fn gelu(&mut self, a: Var) -> Var {
        let v = self.value(a).map(gelu_val);
        self.push(Op::Gelu, vec![a], v)
    }

    pub fn mean_all(&mut self, a: Var) -> Var {
        let t = self.value(a);
        let v = Tensor::scalar(t.sum() / cast::<T>(t.len() as f64));
        self.push(Op::MeanAll, vec![a], v)
    }

    pub fn sum_all(&mut self, a: Var) -> Var {
        let v = Tensor::scalar(self.value(a).sum());
        self.push(Op::SumAll, vec![a], v)
    }

    /// Reverse sweep from a scalar root. Returns one adjoint slot per node;
    /// unreached nodes stay `None`.
    pub fn backward(&self, root: Var) -> Gradients<T> {
        assert_eq!(self.value(root).shape(), (1, 1), "backward root must be scalar");
        let mut adj: Vec<Option<Tensor<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        adj[root.0] = Some(Tensor::scalar(T::one()));

        for i in (0..=root.0).rev() {
            let d = match adj[i].take() {
                Some(d) => d,
                None => continue,
            };
            self.backprop_node(i, &d, &mut adj);
            adj[i] = Some(d);
        }
        Gradients { adj }
    }

    fn backprop_node(&self, i: usize, d: &Tensor<T>, adj: &mut [Option<Tensor<T>>]) {
        let node = &self.nodes[i];
        let p = &node.parents;
        let mut acc = |v: Var, delta: Tensor<T>| {
            match &mut adj[v.0] {
                Some(t) => t.add_assign(&delta),
                slot @ None => *slot = Some(delta),
            }
        };
        match &node.op {
            Op::Leaf => {}
            Op::Add => {
                acc(p[0], d.clone());
                acc(p[1], d.clone());
            }
            Op::Sub => {
                acc(p[0], d.clone());
                acc(p[1], d.map(|x| -x));
            }
            Op::Mul => {
                acc(p[0], d.zip(self.value(p[1]), |g, b| g * b));
                acc(p[1], d.zip(self.value(p[0]), |g, a| g * a));
            }
            Op::Neg => acc(p[0], d.map(|x| -x)),
            Op::Exp => acc(p[0], d.zip(&node.value, |g, y| g * y)),
            Op::Scale(c) => acc(p[0], d.map(|x| x * *c)),
            Op::AddScalar(_) => acc(p[0], d.clone()),
            Op::MinPair => {
                let a = self.value(p[0]);
                let b = self.value(p[1]);
                acc(p[0], d.zip(a, |g, _| g).zip(&a.zip(b, |x, y| if x <= y { T::one() } else { T::zero() }), |g, m| g * m));
                acc(p[1], d.zip(&a.zip(b, |x, y| if x <= y { T::zero() } else { T::one() }), |g, m| g * m));
            }
            Op::Clip { lo, hi } => {
                let a = self.value(p[0]);
                acc(
                    p[0],
                    d.zip(a, |g, x| if x >= *lo && x <= *hi { g } else { T::zero() }),
                );
            }
            Op::MatMul => {
                acc(p[0], d.matmul_nt(self.value(p[1])));
                acc(p[1], self.value(p[0]).matmul_tn(d));
            }
            Op::MatMulNt => {
                acc(p[0], d.matmul(self.value(p[1])));
                acc(p[1], d.matmul_tn(self.value(p[0])));
            }
            Op::AddRow => {
                acc(p[0], d.clone());
                let (m, n) = d.shape();
                let mut row = Tensor::zeros(1, n);
                for r in 0..m {
                    for c in 0..n {
                        let x = row.get(0, c) + d.get(r, c);
                        row.set(0, c, x);
                    }
                }
                acc(p[1], row);
            }
            Op::MulRow => {
                let a = self.value(p[0]);
                let rv = self.value(p[1]);
                let (m, n) = d.shape();
                let mut da = Tensor::zeros(m, n);
                let mut drow = Tensor::zeros(1, n);
                for r in 0..m {
                    for c in 0..n {
                        da.set(r, c, d.get(r, c) * rv.get(0, c));
                        let x = drow.get(0, c) + d.get(r, c) * a.get(r, c);
                        drow.set(0, c, x);
                    }
                }
                acc(p[0], da);
                acc(p[1], drow);
            }
            Op::SliceCols { lo } => {
                let (m, n) = self.value(p[0]).shape();
                let mut da = Tensor::zeros(m, n);
                for r in 0..m {
                    for c in 0..d.cols() {
                        da.set(r, lo + c, d.get(r, c));
                    }
                }
                acc(p[0], da);
            }
            Op::ConcatCols => {
                let mut off = 0;
                for &part in p {
                    let (m, n) = self.value(part).shape();
                    let mut dp = Tensor::zeros(m, n);
                    for r in 0..m {
                        for c in 0..n {
                            dp.set(r, c, d.get(r, off + c));
                        }
                    }
                    acc(part, dp);
                    off += n;
                }
            }
            Op::GatherRows { ids } => {
                let (m, n) = self.value(p[0]).shape();
                let mut da = Tensor::zeros(m, n);
                for (i, &id) in ids.iter().enumerate() {
                    for c in 0..n {
                        let x = da.get(id, c) + d.get(i, c);
                        da.set(id, c, x);
                    }
                }
                acc(p[0], da);
            }
            Op::GatherEntries { coords } => {
                let (m, n) = self.value(p[0]).shape();
                let mut da = Tensor::zeros(m, n);
                for (j, &(r, c)) in coords.iter().enumerate() {
                    let x = da.get(r, c) + d.get(j, 0);
                    da.set(r, c, x);
                }
                acc(p[0], da);
            }
            Op::LayerNormRows { eps } => {
                let x = self.value(p[0]);
                let y = &node.value;
                let (m, n) = x.shape();
                let nn = cast::<T>(n as f64);
                let mut da = Tensor::zeros(m, n);
                for r in 0..m {
                    let xr = x.row(r);
                    let mu = xr.iter().copied().sum::<T>() / nn;
                    let var = xr.iter().map(|&e| (e - mu) * (e - mu)).sum::<T>() / nn;
                    let inv = (var + *eps).sqrt().recip();
                    let dr = d.row(r);
                    let yr = y.row(r);
                    let mean_d = dr.iter().copied().sum::<T>() / nn;
                    let mean_dy = dr.iter().zip(yr.iter()).map(|(&g, &u)| g * u).sum::<T>() / nn;
                    for c in 0..n {
                        da.set(r, c, inv * (dr[c] - mean_d - yr[c] * mean_dy));
                    }
                }
                acc(p[0], da);
            }
            Op::SoftmaxRows => {
                let y = &node.value;
                let (m, n) = y.shape();
                let mut da = Tensor::zeros(m, n);
                for r in 0..m {
                    let yr = y.row(r);
                    let dr = d.row(r);
                    let dot = dr.iter().zip(yr.iter()).map(|(&g, &u)| g * u).sum::<T>();
                    for c in 0..n {
                        da.set(r, c, yr[c] * (dr[c] - dot));
                    }
                }
                acc(p[0], da);
            }
            Op::LogSoftmaxRows => {
                let y = &node.value;
                let (m, n) = y.shape();
                let mut da = Tensor::zeros(m, n);
                for r in 0..m {
                    let dr = d.row(r);
                    let sum_d = dr.iter().copied().sum::<T>();
                    let yr = y.row(r);
                    for c in 0..n {
                        da.set(r, c, dr[c] - yr[c].exp() * sum_d);
                    }
                }
                acc(p[0], da);
            }
            Op::Gelu => {
                acc(p[0], d.zip(self.value(p[0]), |g, x| g * gelu_grad(x)));
            }
            Op::MeanAll => {
                let (m, n) = self.value(p[0]).shape();
                let g = d.item() / cast::<T>((m * n) as f64);
                acc(p[0], Tensor::full(m, n, g));
            }
            Op::SumAll => {
                let (m, n) = self.value(p[0]).shape();
                acc(p[0], Tensor::full(m, n, d.item()));
            }
        }
    }
}

pub struct Gradients<T> {
    adj: Vec<Option<Tensor<T>>>,
}

impl<T: Real> Gradients<T> {
    pub fn wrt(&self, v: Var) -> Option<&Tensor<T>> {
        self.adj[v.0].as_ref()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;
    use rand::SeedableRng;
    use rand_chacha::ChaCha12Rng;

    type M = Tensor<f64>;

    fn rand_tensor(rng: &mut ChaCha12Rng, rows: usize, cols: usize) -> M {
        M::from_vec(rows, cols, (0..rows * cols).map(|_| rng.random::<f64>() * 2.0 - 1.0).collect())
    }

    /// Central-difference check: `build` maps leaf tensors to a scalar root.
    fn fd_check(inputs: &[M], build: impl Fn(&mut Tape<f64>, &[Var]) -> Var) {
        let eval = |ins: &[M]| -> f64 {
            let mut tape = Tape::new();
            let vars: Vec<Var> = ins.iter().map(|t| tape.leaf(t.clone())).collect();
            let root = build(&mut tape, &vars);
            tape.value(root).item()
        };

        let mut tape = Tape::new();
        let vars: Vec<Var> = inputs.iter().map(|t| tape.leaf(t.clone())).collect();
        let root = build(&mut tape, &vars);
        let grads = tape.backward(root);

        let h = 1e-5;
        for (vi, input) in inputs.iter().enumerate() {
            let analytic = grads
                .wrt(vars[vi])
                .cloned()
                .unwrap_or_else(|| M::zeros(input.rows(), input.cols()));
            for idx in 0..input.len() {
                let mut plus = inputs.to_vec();
                plus[vi].data_mut()[idx] += h;
                let mut minus = inputs.to_vec();
                minus[vi].data_mut()[idx] -= h;
                let num = (eval(&plus) - eval(&minus)) / (2.0 * h);
                let ana = analytic.data()[idx];
                let denom = num.abs().max(ana.abs()).max(1e-8);
                assert!(
                    (num - ana).abs() / denom < 1e-5,
                    "input {vi} coord {idx}: numeric {num} vs analytic {ana}"
                );
            }
        }
    }

    #[test]
    fn fd_elementwise_chain() {
        let mut rng = ChaCha12Rng::seed_from_u64(1);
        let a = rand_tensor(&mut rng, 3, 4);
        let b = rand_tensor(&mut rng, 3, 4);
        fd_check(&[a, b], |t, v| {
            let s = t.add(v[0], v[1]);
            let m = t.mul(s, v[0]);
            let d = t.sub(m, v[1]);
            let n = t.neg(d);
            let sc = t.scale(n, 0.7);
            let off = t.add_scalar(sc, 0.3);
            t.mean_all(off)
        });
    }

    #[test]
    fn fd_exp_sum() {
        let mut rng = ChaCha12Rng::seed_from_u64(2);
        let a = rand_tensor(&mut rng, 2, 5);
        fd_check(&[a], |t, v| {
            let e = t.exp(v[0]);
            t.sum_all(e)
        });
    }

    #[test]
    fn fd_min_pair_and_clip() {
        // Inputs chosen away from kinks: a in (-1, 1), clip band (-2, 2).
        let mut rng = ChaCha12Rng::seed_from_u64(3);
        let a = rand_tensor(&mut rng, 3, 3);
        let b = rand_tensor(&mut rng, 3, 3).map(|x| x + 3.0);
        fd_check(&[a, b], |t, v| {
            let c = t.clip(v[0], -2.0, 2.0);
            let m = t.min_pair(c, v[1]);
            t.mean_all(m)
        });
    }

    #[test]
    fn clip_blocks_gradient_outside_band() {
        let mut tape = Tape::new();
        let a = tape.leaf(M::from_vec(1, 3, vec![-5.0, 0.5, 5.0]));
        let c = tape.clip(a, -1.0, 1.0);
        let root = tape.sum_all(c);
        let g = tape.backward(root);
        assert_eq!(g.wrt(a).unwrap().data(), &[0.0, 1.0, 0.0]);
    }

    #[test]
    fn fd_matmul_both_orders() {
        let mut rng = ChaCha12Rng::seed_from_u64(4);
        let a = rand_tensor(&mut rng, 3, 4);
        let b = rand_tensor(&mut rng, 4, 2);
        let c = rand_tensor(&mut rng, 5, 4);
        fd_check(&[a.clone(), b], |t, v| {
            let m = t.matmul(v[0], v[1]);
            t.mean_all(m)
        });
        fd_check(&[a, c], |t, v| {
            let m = t.matmul_nt(v[0], v[1]);
            t.mean_all(m)
        });
    }

    #[test]
    fn fd_rows_and_slices() {
        let mut rng = ChaCha12Rng::seed_from_u64(5);
        let a = rand_tensor(&mut rng, 3, 6);
        let row = rand_tensor(&mut rng, 1, 6);
        let w = rand_tensor(&mut rng, 1, 6);
        fd_check(&[a, row, w], |t, v| {
            let s = t.add_row(v[0], v[1]);
            let m = t.mul_row(s, v[2]);
            let left = t.slice_cols(m, 0, 3);
            let right = t.slice_cols(m, 3, 6);
            let back = t.concat_cols(&[right, left]);
            t.mean_all(back)
        });
    }

    #[test]
    fn fd_gathers() {
        let mut rng = ChaCha12Rng::seed_from_u64(6);
        let a = rand_tensor(&mut rng, 4, 3);
        fd_check(&[a.clone()], |t, v| {
            let g = t.gather_rows(v[0], &[2, 0, 2, 3]);
            t.mean_all(g)
        });
        fd_check(&[a], |t, v| {
            let g = t.gather_entries(v[0], &[(0, 1), (3, 2), (0, 1)]);
            t.sum_all(g)
        });
    }

    #[test]
    fn fd_normalizers() {
        let mut rng = ChaCha12Rng::seed_from_u64(7);
        let a = rand_tensor(&mut rng, 3, 5);
        let w = rand_tensor(&mut rng, 3, 5);
        fd_check(&[a.clone(), w.clone()], |t, v| {
            let ln = t.layer_norm_rows(v[0], 1e-5);
            let m = t.mul(ln, v[1]);
            t.mean_all(m)
        });
        fd_check(&[a.clone(), w.clone()], |t, v| {
            let sm = t.softmax_rows(v[0]);
            let m = t.mul(sm, v[1]);
            t.mean_all(m)
        });
        fd_check(&[a, w], |t, v| {
            let ls = t.log_softmax_rows(v[0]);
            let m = t.mul(ls, v[1]);
            t.mean_all(m)
        });
    }

    #[test]
    fn fd_gelu() {
        let mut rng = ChaCha12Rng::seed_from_u64(8);
        let a = rand_tensor(&mut rng, 4, 4).map(|x| x * 2.0);
        fd_check(&[a], |t, v| {
            let g = t.gelu(v[0]);
            t.mean_all(g)
        });
    }

    #[test]
    fn softmax_rows_sum_to_one() {
        let mut tape = Tape::<f64>::new();
        let a = tape.leaf(M::from_vec(2, 3, vec![1.0, 2.0, 3.0, -50.0, 0.0, 50.0]));
        let s = tape.softmax_rows(a);
        for r in 0..2 {
            let sum: f64 = tape.value(s).row(r).iter().sum();
            assert!((sum - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn reused_node_accumulates() {
        // f(x) = x·x summed: gradient 2x through two paths into the same leaf.
        let mut tape = Tape::new();
        let x = tape.leaf(M::from_vec(1, 2, vec![3.0, -2.0]));
        let sq = tape.mul(x, x);
        let root = tape.sum_all(sq);
        let g = tape.backward(root);
        assert_eq!(g.wrt(x).unwrap().data(), &[6.0, -4.0]);
    }
}
