//! Wengert tape. Nodes are appended in evaluation order, so a reverse sweep
//! over the node list visits every consumer before its inputs.

use crate::error::{Error, Result};

use super::array::{gemm_nt, gemm_tn, normalize_kernel, softmax_kernel, transpose_raw, DenseArray};
use super::batchnorm::{column_moments, standardize_kernel};
use super::{sigmoid, Scalar};

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

/// Batch moments captured by [`Tape::standardize_columns`].
#[derive(Debug, Clone, PartialEq)]
pub struct ColumnStats {
    pub mean: Vec<f64>,
    /// Variance with the correction the op was asked to use.
    pub var: Vec<f64>,
    /// Unbiased variance, for running-statistics updates.
    pub unbiased_var: Vec<f64>,
}

enum Op<T> {
    Leaf,
    MatMul(Var, Var),
    Transpose(Var),
    Add(Var, Var),
    Mul(Var, Var),
    Scale(Var, T),
    Sum(Var),
    Relu(Var),
    AddRowBias(Var, Var),
    MulColumns(Var, Var),
    ColumnAffine {
        x: Var,
        scale: Vec<T>,
    },
    Normalize {
        x: Var,
        split: (usize, usize, usize),
        norms: Vec<T>,
    },
    Softmax {
        x: Var,
        split: (usize, usize, usize),
    },
    Standardize {
        x: Var,
        inv_std: Vec<T>,
        denom: usize,
    },
    SegmentPool {
        x: Var,
        segments: Vec<usize>,
        weights: Vec<T>,
    },
    PairedSigmoid(Var),
    ScalarFn {
        x: Var,
        local_grad: Vec<T>,
    },
}

struct Node<T> {
    value: DenseArray<T>,
    op: Op<T>,
    needs_grad: bool,
}

/// Records operations for one forward pass and replays them backwards.
pub struct Tape<T = f32> {
    nodes: Vec<Node<T>>,
}

impl<T: Scalar> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> Tape<T> {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Registers a trainable input.
    pub fn param(&mut self, value: DenseArray<T>) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// Registers an input that never receives a gradient.
    pub fn constant(&mut self, value: DenseArray<T>) -> Var {
        self.push(value, Op::Leaf, false)
    }

    pub fn value(&self, v: Var) -> &DenseArray<T> {
        &self.nodes[v.0].value
    }

    /// Scalar value of a single-element node.
    pub fn scalar(&self, v: Var) -> T {
        self.nodes[v.0].value.values()[0]
    }

    /// Gradient accumulated by the last [`Tape::backward`] call.
    pub fn grad(&self, v: Var) -> Option<&[T]> {
        self.nodes[v.0].value.grad.as_deref()
    }

    fn push(&mut self, value: DenseArray<T>, op: Op<T>, needs_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn needs(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].needs_grad)
    }

    fn finish(
        &mut self,
        value: DenseArray<T>,
        op: Op<T>,
        inputs: &[Var],
        name: &str,
    ) -> Result<Var> {
        value.check_finite(name)?;
        let needs = self.needs(inputs);
        Ok(self.push(value, op, needs))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = super::matmul(self.value(a), self.value(b))?;
        self.finish(out, Op::MatMul(a, b), &[a, b], "matmul")
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let out = super::transpose(self.value(a))?;
        self.finish(out, Op::Transpose(a), &[a], "transpose")
    }

    fn same_shape(&self, a: Var, b: Var, op: &str) -> Result<()> {
        if self.value(a).shape() != self.value(b).shape() {
            return Err(Error::dim(format!(
                "{op}: shapes {:?} and {:?} differ",
                self.value(a).shape(),
                self.value(b).shape()
            )));
        }
        Ok(())
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "add")?;
        let (va, vb) = (self.value(a), self.value(b));
        let vals = va
            .values()
            .iter()
            .zip(vb.values())
            .map(|(&x, &y)| x + y)
            .collect();
        let out = DenseArray::from_parts(va.shape().to_vec(), vals);
        self.finish(out, Op::Add(a, b), &[a, b], "add")
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "mul")?;
        let (va, vb) = (self.value(a), self.value(b));
        let vals = va
            .values()
            .iter()
            .zip(vb.values())
            .map(|(&x, &y)| x * y)
            .collect();
        let out = DenseArray::from_parts(va.shape().to_vec(), vals);
        self.finish(out, Op::Mul(a, b), &[a, b], "mul")
    }

    pub fn scale(&mut self, a: Var, c: T) -> Result<Var> {
        let va = self.value(a);
        let out = DenseArray::from_parts(
            va.shape().to_vec(),
            va.values().iter().map(|&x| x * c).collect(),
        );
        self.finish(out, Op::Scale(a, c), &[a], "scale")
    }

    /// Sum of all elements as a 1-element array.
    pub fn sum(&mut self, a: Var) -> Result<Var> {
        let total: f64 = self.value(a).values().iter().map(|v| v.widen()).sum();
        let out = DenseArray::from_parts(vec![1], vec![T::cast(total)]);
        self.finish(out, Op::Sum(a), &[a], "sum")
    }

    pub fn relu(&mut self, a: Var) -> Result<Var> {
        let out = super::relu(self.value(a));
        self.finish(out, Op::Relu(a), &[a], "relu")
    }

    fn row_vector_len(&self, x: Var, v: Var, op: &str) -> Result<(usize, usize)> {
        let (r, c) = self.value(x).dims2()?;
        if self.value(v).len() != c {
            return Err(Error::dim(format!(
                "{op}: {c} columns but vector of length {}",
                self.value(v).len()
            )));
        }
        Ok((r, c))
    }

    /// `x[r, c] + b[c]`
    pub fn add_row_bias(&mut self, x: Var, b: Var) -> Result<Var> {
        let (r, c) = self.row_vector_len(x, b, "add_row_bias")?;
        let (vx, vb) = (self.value(x).values(), self.value(b).values());
        let mut vals = Vec::with_capacity(r * c);
        for i in 0..r {
            vals.extend(vx[i * c..(i + 1) * c].iter().zip(vb).map(|(&p, &q)| p + q));
        }
        let out = DenseArray::from_parts(vec![r, c], vals);
        self.finish(out, Op::AddRowBias(x, b), &[x, b], "add_row_bias")
    }

    /// `x[r, c] * g[c]`
    pub fn mul_columns(&mut self, x: Var, g: Var) -> Result<Var> {
        let (r, c) = self.row_vector_len(x, g, "mul_columns")?;
        let (vx, vg) = (self.value(x).values(), self.value(g).values());
        let mut vals = Vec::with_capacity(r * c);
        for i in 0..r {
            vals.extend(vx[i * c..(i + 1) * c].iter().zip(vg).map(|(&p, &q)| p * q));
        }
        let out = DenseArray::from_parts(vec![r, c], vals);
        self.finish(out, Op::MulColumns(x, g), &[x, g], "mul_columns")
    }

    /// `x[r, c] * scale[c] + shift[c]` with constant coefficients.
    pub fn column_affine(&mut self, x: Var, scale: &[T], shift: &[T]) -> Result<Var> {
        let (r, c) = self.value(x).dims2()?;
        if scale.len() != c || shift.len() != c {
            return Err(Error::dim("column_affine coefficient length"));
        }
        let vx = self.value(x).values();
        let mut vals = Vec::with_capacity(r * c);
        for i in 0..r {
            for j in 0..c {
                vals.push(T::cast(
                    vx[i * c + j].widen() * scale[j].widen() + shift[j].widen(),
                ));
            }
        }
        let out = DenseArray::from_parts(vec![r, c], vals);
        self.finish(
            out,
            Op::ColumnAffine {
                x,
                scale: scale.to_vec(),
            },
            &[x],
            "column_affine",
        )
    }

    pub fn l2_normalize(&mut self, x: Var, axis: usize) -> Result<Var> {
        let vx = self.value(x);
        let split = vx.axis_split(axis)?;
        let (vals, norms) = normalize_kernel(vx.values(), split)?;
        let out = DenseArray::from_parts(vx.shape().to_vec(), vals);
        self.finish(out, Op::Normalize { x, split, norms }, &[x], "l2_normalize")
    }

    pub fn softmax(&mut self, x: Var, axis: usize) -> Result<Var> {
        let vx = self.value(x);
        if !vx.is_finite() {
            return Err(Error::Degenerate("softmax input is not finite".into()));
        }
        let split = vx.axis_split(axis)?;
        let out = DenseArray::from_parts(vx.shape().to_vec(), softmax_kernel(vx.values(), split));
        self.finish(out, Op::Softmax { x, split }, &[x], "softmax")
    }

    /// Per-column standardization of an `n×f` matrix; the variance divides
    /// by `n - correction`.
    pub fn standardize_columns(
        &mut self,
        x: Var,
        correction: usize,
        eps: f64,
    ) -> Result<(Var, ColumnStats)> {
        let (n, f) = self.value(x).dims2()?;
        if n < 2 || n <= correction {
            return Err(Error::Degenerate(format!(
                "column standardization needs at least 2 rows, got {n}"
            )));
        }
        let (vals, inv_std, mean, var) =
            standardize_kernel(self.value(x).values(), n, f, correction, eps);
        let unbiased_var = if correction == 1 {
            var.clone()
        } else {
            column_moments(self.value(x).values(), n, f, 1).1
        };
        let out = DenseArray::from_parts(vec![n, f], vals);
        let v = self.finish(
            out,
            Op::Standardize {
                x,
                inv_std,
                denom: n - correction,
            },
            &[x],
            "standardize_columns",
        )?;
        Ok((
            v,
            ColumnStats {
                mean,
                var,
                unbiased_var,
            },
        ))
    }

    /// Softmax-weighted pooling over row segments: `x` stacks the locations of
    /// several maps (rows) for `c` channels (columns); segment `s` covers the
    /// next `segments[s]` rows. Output `[segments.len(), c]` holds
    /// `Σ softmax(l) · l` per segment and channel.
    pub fn segment_softmax_pool(&mut self, x: Var, segments: &[usize]) -> Result<Var> {
        let (rows, c) = self.value(x).dims2()?;
        if segments.iter().sum::<usize>() != rows || segments.contains(&0) {
            return Err(Error::dim(format!(
                "segments {segments:?} do not tile {rows} rows"
            )));
        }
        let vx = self.value(x).values();
        let mut weights = vec![T::zero(); vx.len()];
        let mut out = Vec::with_capacity(segments.len() * c);
        let mut start = 0;
        for &len in segments {
            let block = &vx[start * c..(start + len) * c];
            let w = softmax_kernel(block, (1, len, c));
            for ch in 0..c {
                let mut acc = 0.0f64;
                for i in 0..len {
                    acc += w[i * c + ch].widen() * block[i * c + ch].widen();
                }
                out.push(T::cast(acc));
            }
            weights[start * c..(start + len) * c].copy_from_slice(&w);
            start += len;
        }
        let out = DenseArray::from_parts(vec![segments.len(), c], out);
        self.finish(
            out,
            Op::SegmentPool {
                x,
                segments: segments.to_vec(),
                weights,
            },
            &[x],
            "segment_softmax_pool",
        )
    }

    /// `[b, 2n] -> [b, n]` with `out[i, j] = sigmoid(x[i, j] - x[i, n + j])`.
    pub fn paired_sigmoid(&mut self, x: Var) -> Result<Var> {
        let (b, c2) = self.value(x).dims2()?;
        if c2 % 2 != 0 {
            return Err(Error::dim(format!(
                "paired_sigmoid needs an even width, got {c2}"
            )));
        }
        let n = c2 / 2;
        let vx = self.value(x).values();
        let mut out = Vec::with_capacity(b * n);
        for i in 0..b {
            for j in 0..n {
                let z = vx[i * c2 + j].widen() - vx[i * c2 + n + j].widen();
                out.push(T::cast(sigmoid(z)));
            }
        }
        let out = DenseArray::from_parts(vec![b, n], out);
        self.finish(out, Op::PairedSigmoid(x), &[x], "paired_sigmoid")
    }

    /// Records a scalar function of `x` whose value and gradient were computed
    /// in closed form by the caller.
    pub fn scalar_fn(&mut self, x: Var, value: f64, local_grad: Vec<T>) -> Result<Var> {
        if local_grad.len() != self.value(x).len() {
            return Err(Error::dim("scalar_fn gradient length"));
        }
        let out = DenseArray::from_parts(vec![1], vec![T::cast(value)]);
        self.finish(out, Op::ScalarFn { x, local_grad }, &[x], "scalar_fn")
    }

    /// Reverse sweep from a single-element `root`. Gradients are written into
    /// each node's [`DenseArray::grad`]; earlier gradients are cleared.
    pub fn backward(&mut self, root: Var) -> Result<()> {
        if self.value(root).len() != 1 {
            return Err(Error::dim(format!(
                "backward needs a scalar root, got shape {:?}",
                self.value(root).shape()
            )));
        }
        let mut grads: Vec<Option<Vec<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[root.0] = Some(vec![T::one()]);

        for idx in (0..=root.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            if !self.nodes[idx].needs_grad {
                continue;
            }
            self.propagate(idx, &g, &mut grads);
            grads[idx] = Some(g);
        }

        for (node, g) in self.nodes.iter_mut().zip(grads) {
            node.value.grad = if node.needs_grad { g } else { None };
        }
        Ok(())
    }

    fn propagate(&self, idx: usize, g: &[T], grads: &mut [Option<Vec<T>>]) {
        let node = &self.nodes[idx];
        let val = &node.value;
        let mut send = |v: Var, contrib: Vec<T>| {
            if !self.nodes[v.0].needs_grad {
                return;
            }
            match &mut grads[v.0] {
                Some(acc) => acc.iter_mut().zip(contrib).for_each(|(a, c)| *a = *a + c),
                slot @ None => *slot = Some(contrib),
            }
        };
        let wants = |v: Var| self.nodes[v.0].needs_grad;

        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (m, k) = self.value(*a).dims2().expect("matrix");
                let n = self.value(*b).shape()[1];
                if wants(*a) {
                    send(*a, gemm_nt(g, self.value(*b).values(), m, n, k));
                }
                if wants(*b) {
                    send(*b, gemm_tn(self.value(*a).values(), g, m, k, n));
                }
            }
            Op::Transpose(a) => {
                let (r, c) = val.dims2().expect("matrix");
                send(*a, transpose_raw(g, r, c));
            }
            Op::Add(a, b) => {
                send(*a, g.to_vec());
                send(*b, g.to_vec());
            }
            Op::Mul(a, b) => {
                let (va, vb) = (self.value(*a).values(), self.value(*b).values());
                if wants(*a) {
                    send(*a, g.iter().zip(vb).map(|(&g, &y)| g * y).collect());
                }
                if wants(*b) {
                    send(*b, g.iter().zip(va).map(|(&g, &x)| g * x).collect());
                }
            }
            Op::Scale(a, c) => send(*a, g.iter().map(|&g| g * *c).collect()),
            Op::Sum(a) => send(*a, vec![g[0]; self.value(*a).len()]),
            Op::Relu(a) => {
                let vx = self.value(*a).values();
                send(
                    *a,
                    g.iter()
                        .zip(vx)
                        .map(|(&g, &x)| if x > T::zero() { g } else { T::zero() })
                        .collect(),
                );
            }
            Op::AddRowBias(x, b) => {
                let (r, c) = val.dims2().expect("matrix");
                send(*x, g.to_vec());
                if wants(*b) {
                    send(*b, column_sums(g, r, c));
                }
            }
            Op::MulColumns(x, s) => {
                let (r, c) = val.dims2().expect("matrix");
                let (vx, vs) = (self.value(*x).values(), self.value(*s).values());
                if wants(*x) {
                    let mut gx = Vec::with_capacity(g.len());
                    for i in 0..r {
                        gx.extend(g[i * c..(i + 1) * c].iter().zip(vs).map(|(&g, &s)| g * s));
                    }
                    send(*x, gx);
                }
                if wants(*s) {
                    let prod: Vec<T> = g.iter().zip(vx).map(|(&g, &x)| g * x).collect();
                    send(*s, column_sums(&prod, r, c));
                }
            }
            Op::ColumnAffine { x, scale } => {
                let c = scale.len();
                send(
                    *x,
                    g.iter()
                        .enumerate()
                        .map(|(i, &g)| g * scale[i % c])
                        .collect(),
                );
            }
            Op::Normalize { x, split, norms } => {
                // d/dv (v/|v|) applied to g: (g - y (y·g)) / |v|
                let (outer, len, inner) = *split;
                let y = val.values();
                let mut gx = vec![T::zero(); g.len()];
                for o in 0..outer {
                    for j in 0..inner {
                        let at = |i: usize| (o * len + i) * inner + j;
                        let mut dot = 0.0f64;
                        for i in 0..len {
                            dot += y[at(i)].widen() * g[at(i)].widen();
                        }
                        let norm = norms[o * inner + j].widen();
                        for i in 0..len {
                            gx[at(i)] = T::cast((g[at(i)].widen() - y[at(i)].widen() * dot) / norm);
                        }
                    }
                }
                send(*x, gx);
            }
            Op::Softmax { x, split } => {
                let (outer, len, inner) = *split;
                let y = val.values();
                let mut gx = vec![T::zero(); g.len()];
                for o in 0..outer {
                    for j in 0..inner {
                        let at = |i: usize| (o * len + i) * inner + j;
                        let mut dot = 0.0f64;
                        for i in 0..len {
                            dot += y[at(i)].widen() * g[at(i)].widen();
                        }
                        for i in 0..len {
                            gx[at(i)] = T::cast(y[at(i)].widen() * (g[at(i)].widen() - dot));
                        }
                    }
                }
                send(*x, gx);
            }
            Op::Standardize { x, inv_std, denom } => {
                // dx = inv·(g − mean(g)) − x̂·inv·Σ(g x̂)/denom, per column
                let (n, f) = val.dims2().expect("matrix");
                let xhat = val.values();
                let mut gsum = vec![0.0f64; f];
                let mut gxs = vec![0.0f64; f];
                for r in 0..n {
                    for c in 0..f {
                        gsum[c] += g[r * f + c].widen();
                        gxs[c] += g[r * f + c].widen() * xhat[r * f + c].widen();
                    }
                }
                let mut gx = Vec::with_capacity(g.len());
                for r in 0..n {
                    for c in 0..f {
                        let inv = inv_std[c].widen();
                        let v = inv * (g[r * f + c].widen() - gsum[c] / n as f64)
                            - xhat[r * f + c].widen() * inv * gxs[c] / *denom as f64;
                        gx.push(T::cast(v));
                    }
                }
                send(*x, gx);
            }
            Op::SegmentPool {
                x,
                segments,
                weights,
            } => {
                // ∂p/∂l_k = q_k (1 + l_k − p)
                let c = val.shape()[1];
                let vx = self.value(*x).values();
                let mut gx = vec![T::zero(); vx.len()];
                let mut start = 0;
                for (s, &len) in segments.iter().enumerate() {
                    for ch in 0..c {
                        let p = val.values()[s * c + ch].widen();
                        let go = g[s * c + ch].widen();
                        for i in start..start + len {
                            let at = i * c + ch;
                            let q = weights[at].widen();
                            gx[at] = T::cast(go * q * (1.0 + vx[at].widen() - p));
                        }
                    }
                    start += len;
                }
                send(*x, gx);
            }
            Op::PairedSigmoid(x) => {
                let (b, n) = val.dims2().expect("matrix");
                let mut gx = vec![T::zero(); b * 2 * n];
                for i in 0..b {
                    for j in 0..n {
                        let s = val.values()[i * n + j].widen();
                        let d = g[i * n + j].widen() * s * (1.0 - s);
                        gx[i * 2 * n + j] = T::cast(d);
                        gx[i * 2 * n + n + j] = T::cast(-d);
                    }
                }
                send(*x, gx);
            }
            Op::ScalarFn { x, local_grad } => {
                send(*x, local_grad.iter().map(|&l| l * g[0]).collect());
            }
        }
    }
}

fn column_sums<T: Scalar>(g: &[T], r: usize, c: usize) -> Vec<T> {
    let mut acc = vec![0.0f64; c];
    for i in 0..r {
        for (a, v) in acc.iter_mut().zip(&g[i * c..(i + 1) * c]) {
            *a += v.widen();
        }
    }
    acc.into_iter().map(T::cast).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn backward_needs_scalar_root() {
        let mut t = Tape::<f64>::new();
        let x = t.param(DenseArray::zeros(vec![2]));
        assert!(t.backward(x).is_err());
    }

    #[test]
    fn constants_get_no_gradient() {
        let mut t = Tape::<f64>::new();
        let a = t.constant(DenseArray::from_f64(vec![1, 2], &[1.0, 2.0]).unwrap());
        let w = t.param(DenseArray::from_f64(vec![2, 1], &[3.0, 4.0]).unwrap());
        let y = t.matmul(a, w).unwrap();
        let s = t.sum(y).unwrap();
        t.backward(s).unwrap();
        assert!(t.grad(a).is_none());
        assert_eq!(t.grad(w).unwrap(), &[1.0, 2.0]);
    }

    #[test]
    fn fan_out_accumulates() {
        // f(x) = sum(x ⊙ x) → 2x
        let mut t = Tape::<f64>::new();
        let x = t.param(DenseArray::from_f64(vec![3], &[1.0, -2.0, 0.5]).unwrap());
        let sq = t.mul(x, x).unwrap();
        let s = t.sum(sq).unwrap();
        t.backward(s).unwrap();
        assert_eq!(t.grad(x).unwrap(), &[2.0, -4.0, 1.0]);
    }

    #[test]
    fn pool_of_constant_segment_is_constant() {
        let mut t = Tape::<f64>::new();
        let x = t.constant(DenseArray::from_f64(vec![3, 1], &[2.0, 2.0, 2.0]).unwrap());
        let p = t.segment_softmax_pool(x, &[3]).unwrap();
        assert!((t.scalar(p) - 2.0).abs() < 1e-15);
    }

    #[test]
    fn segments_must_tile_rows() {
        let mut t = Tape::<f64>::new();
        let x = t.constant(DenseArray::zeros(vec![4, 2]));
        assert!(t.segment_softmax_pool(x, &[3]).is_err());
        assert!(t.segment_softmax_pool(x, &[4, 0]).is_err());
    }
}
