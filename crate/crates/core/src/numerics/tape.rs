//! Reverse-mode differentiation over a fixed operation set.
//!
//! A [`Tape`] records every operation applied to its [`Var`]s. Calling
//! [`Tape::backward`] on a scalar walks the record in reverse and returns
//! the gradient of that scalar with respect to every node that requires one.
//! Nodes that do not depend on a trainable leaf are skipped entirely, so
//! frozen sub-networks cost only their forward pass.
//!
//! Matrices are row-major; a "row" operation treats the last axis as columns.

use std::collections::BTreeMap;
use std::rc::Rc;

use super::params::Params;
use super::tensor::{gemm, Tensor};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

/// Which axes of an `(a, b, c)` view [`Tape::mean_pool`] averages away.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum PoolAxes {
    /// Mean over `a`, result `(b, c)`.
    First,
    /// Mean over `b`, result `(a, c)`.
    Second,
    /// Mean over `a` and `b`, result `(c)`.
    Both,
}

enum Op {
    Leaf,
    MatMul(Var, Var),
    MatMulNt(Var, Var),
    Add(Var, Var),
    AddRow(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    MulConst(Var, Rc<Vec<f64>>),
    Relu(Var),
    Gelu(Var),
    Reshape(Var),
    Transpose(Var),
    GraphMix {
        x: Var,
        adj: Rc<Tensor>,
        frames: usize,
    },
    TemporalConv {
        x: Var,
        kernel: Var,
        frames: usize,
        joints: usize,
    },
    MeanPool {
        x: Var,
        dims: [usize; 3],
        axes: PoolAxes,
    },
    Pad(Var),
    MaskedMean {
        x: Var,
        valid: usize,
        channels: usize,
    },
    ConcatRows(Vec<Var>),
    SliceCols {
        x: Var,
        start: usize,
    },
    ConcatCols(Vec<Var>),
    GatherRows {
        table: Var,
        ids: Vec<usize>,
    },
    ReplaceRows {
        base: Var,
        repl: Var,
        positions: Vec<usize>,
    },
    NormalizeRows {
        x: Var,
        norms: Vec<f64>,
    },
    LogSoftmaxRows(Var),
    MaskedSoftmaxRows(Var),
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<f64>,
        inv_std: Vec<f64>,
    },
    NllRows {
        logp: Var,
        targets: Vec<Option<usize>>,
        count: usize,
    },
    KlRows {
        logp: Var,
        target: Rc<Tensor>,
    },
    Sum(Var),
    Mean(Var),
}

struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Gradient buffers produced by [`Tape::backward`].
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, var: Var) -> Option<&Tensor> {
        self.grads.get(var.0).and_then(|g| g.as_ref())
    }

    /// Gradient for every bound parameter; zeros where the loss did not depend on it.
    pub fn for_params(&self, bound: &BoundParams) -> BTreeMap<String, Tensor> {
        bound
            .vars
            .iter()
            .map(|(name, (var, shape))| {
                let g = self
                    .get(*var)
                    .map(|t| Tensor::from_parts(shape.clone(), t.data().to_vec()))
                    .unwrap_or_else(|| Tensor::zeros(shape));
                (name.clone(), g)
            })
            .collect()
    }
}

/// Tape variables for a [`Params`] set, keyed by parameter name.
#[derive(Clone, Debug, Default)]
pub struct BoundParams {
    vars: BTreeMap<String, (Var, Vec<usize>)>,
}

impl BoundParams {
    pub fn var(&self, name: &str) -> Var {
        match self.vars.get(name) {
            Some((v, _)) => *v,
            None => panic!("parameter `{name}` is not bound"),
        }
    }

    pub fn try_var(&self, name: &str) -> Option<Var> {
        self.vars.get(name).map(|(v, _)| *v)
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.vars.keys().map(String::as_str)
    }
}

#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

fn push_grad(slot: &mut Option<Vec<f64>>, len: usize) -> &mut Vec<f64> {
    slot.get_or_insert_with(|| vec![0.0; len])
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)

fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + 0.044_715 * x * x * x)).tanh())
}

fn gelu_grad(x: f64) -> f64 {
    let t = (GELU_C * (x + 0.044_715 * x * x * x)).tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * 0.044_715 * x * x)
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn scalar(&self, v: Var) -> f64 {
        self.nodes[v.0].value.data()[0]
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    /// A leaf that gradients flow into.
    pub fn param(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// A leaf treated as a constant.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, false)
    }

    /// Registers every tensor in `params` as a leaf. When `trainable` is false
    /// the leaves are constants and no gradient is propagated into them.
    pub fn bind(&mut self, params: &Params, trainable: bool) -> BoundParams {
        let vars = params
            .iter()
            .map(|(name, t)| {
                let v = self.push(t.clone(), Op::Leaf, trainable);
                (name.to_string(), (v, t.shape().to_vec()))
            })
            .collect();
        BoundParams { vars }
    }

    fn dims2(&self, v: Var) -> (usize, usize) {
        let t = self.value(v);
        (t.rows(), t.cols())
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let (m, k) = self.dims2(a);
        let (k2, n) = self.dims2(b);
        assert_eq!(k, k2, "matmul inner dimension mismatch");
        let mut out = vec![0.0; m * n];
        gemm(
            m,
            k,
            n,
            self.value(a).data(),
            false,
            self.value(b).data(),
            false,
            &mut out,
            0.0,
        );
        let rg = self.rg(a) || self.rg(b);
        self.push(Tensor::from_parts(vec![m, n], out), Op::MatMul(a, b), rg)
    }

    /// `a · bᵀ` for `a: (m, k)` and `b: (n, k)`.
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Var {
        let (m, k) = self.dims2(a);
        let (n, k2) = self.dims2(b);
        assert_eq!(k, k2, "matmul_nt inner dimension mismatch");
        let mut out = vec![0.0; m * n];
        gemm(
            m,
            k,
            n,
            self.value(a).data(),
            false,
            self.value(b).data(),
            true,
            &mut out,
            0.0,
        );
        let rg = self.rg(a) || self.rg(b);
        self.push(Tensor::from_parts(vec![m, n], out), Op::MatMulNt(a, b), rg)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let (va, vb) = (self.value(a), self.value(b));
        assert_eq!(va.len(), vb.len(), "add length mismatch");
        let data = va
            .data()
            .iter()
            .zip(vb.data())
            .map(|(x, y)| x + y)
            .collect();
        let value = Tensor::from_parts(va.shape().to_vec(), data);
        let rg = self.rg(a) || self.rg(b);
        self.push(value, Op::Add(a, b), rg)
    }

    /// Adds a bias vector to every row.
    pub fn add_row(&mut self, a: Var, bias: Var) -> Var {
        let (va, vb) = (self.value(a), self.value(bias));
        let n = va.cols();
        assert_eq!(vb.len(), n, "bias length mismatch");
        let mut data = va.data().to_vec();
        for row in data.chunks_mut(n) {
            for (x, b) in row.iter_mut().zip(vb.data()) {
                *x += b;
            }
        }
        let value = Tensor::from_parts(va.shape().to_vec(), data);
        let rg = self.rg(a) || self.rg(bias);
        self.push(value, Op::AddRow(a, bias), rg)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let (va, vb) = (self.value(a), self.value(b));
        assert_eq!(va.len(), vb.len(), "mul length mismatch");
        let data = va
            .data()
            .iter()
            .zip(vb.data())
            .map(|(x, y)| x * y)
            .collect();
        let value = Tensor::from_parts(va.shape().to_vec(), data);
        let rg = self.rg(a) || self.rg(b);
        self.push(value, Op::Mul(a, b), rg)
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Var {
        let value = self.value(a).map(|x| x * s);
        let rg = self.rg(a);
        self.push(value, Op::Scale(a, s), rg)
    }

    /// Elementwise product with a constant (masks, dropout).
    pub fn mul_const(&mut self, a: Var, factor: Vec<f64>) -> Var {
        let va = self.value(a);
        assert_eq!(va.len(), factor.len(), "mul_const length mismatch");
        let data = va.data().iter().zip(&factor).map(|(x, m)| x * m).collect();
        let value = Tensor::from_parts(va.shape().to_vec(), data);
        let rg = self.rg(a);
        self.push(value, Op::MulConst(a, Rc::new(factor)), rg)
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let value = self.value(a).map(|x| x.max(0.0));
        let rg = self.rg(a);
        self.push(value, Op::Relu(a), rg)
    }

    /// GELU, tanh approximation.
    pub fn gelu(&mut self, a: Var) -> Var {
        let value = self.value(a).map(gelu);
        let rg = self.rg(a);
        self.push(value, Op::Gelu(a), rg)
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Var {
        let value = self
            .value(a)
            .clone()
            .reshape(shape)
            .expect("reshape must preserve element count");
        let rg = self.rg(a);
        self.push(value, Op::Reshape(a), rg)
    }

    pub fn transpose(&mut self, a: Var) -> Var {
        let value = self.value(a).transpose();
        let rg = self.rg(a);
        self.push(value, Op::Transpose(a), rg)
    }

    /// Per-frame neighbourhood aggregation: for `x` of shape `(T·J, C)` laid
    /// out frame-major, each frame block `X_t` becomes `adj · X_t`.
    pub fn graph_mix(&mut self, x: Var, adj: Rc<Tensor>, frames: usize) -> Var {
        let vx = self.value(x);
        let j = adj.rows();
        let c = vx.cols();
        assert_eq!(vx.rows(), frames * j, "graph_mix expects (T*J, C)");
        let mut out = vec![0.0; vx.len()];
        let block = j * c;
        for t in 0..frames {
            let src = &vx.data()[t * block..(t + 1) * block];
            gemm(
                j,
                j,
                c,
                adj.data(),
                false,
                src,
                false,
                &mut out[t * block..(t + 1) * block],
                0.0,
            );
        }
        let value = Tensor::from_parts(vx.shape().to_vec(), out);
        let rg = self.rg(x);
        self.push(value, Op::GraphMix { x, adj, frames }, rg)
    }

    /// Depthwise temporal convolution with zero "same" padding. `x` is
    /// `(T·J, C)` frame-major, `kernel` is `(K, C)` with odd `K`.
    pub fn temporal_conv(&mut self, x: Var, kernel: Var, frames: usize, joints: usize) -> Var {
        let (vx, vk) = (self.value(x), self.value(kernel));
        let c = vx.cols();
        let k = vk.rows();
        assert_eq!(vk.cols(), c, "temporal kernel channel mismatch");
        assert_eq!(vx.rows(), frames * joints, "temporal_conv expects (T*J, C)");
        let half = (k / 2) as isize;
        let xd = vx.data();
        let kd = vk.data();
        let mut out = vec![0.0; vx.len()];
        for t in 0..frames {
            for (ki, krow) in kd.chunks(c).enumerate() {
                let src_t = t as isize + ki as isize - half;
                if src_t < 0 || src_t >= frames as isize {
                    continue;
                }
                let src_t = src_t as usize;
                for jj in 0..joints {
                    let o = (t * joints + jj) * c;
                    let s = (src_t * joints + jj) * c;
                    for ch in 0..c {
                        out[o + ch] += krow[ch] * xd[s + ch];
                    }
                }
            }
        }
        let value = Tensor::from_parts(vx.shape().to_vec(), out);
        let rg = self.rg(x) || self.rg(kernel);
        self.push(
            value,
            Op::TemporalConv {
                x,
                kernel,
                frames,
                joints,
            },
            rg,
        )
    }

    /// Arithmetic-mean pooling of `x` viewed as `(a, b, c)`.
    pub fn mean_pool(&mut self, x: Var, dims: [usize; 3], axes: PoolAxes) -> Var {
        let [a, b, c] = dims;
        let vx = self.value(x);
        assert_eq!(vx.len(), a * b * c, "mean_pool dims do not match tensor");
        let xd = vx.data();
        let (shape, data) = match axes {
            PoolAxes::First => {
                let mut out = vec![0.0; b * c];
                for i in 0..a {
                    for (o, v) in out.iter_mut().zip(&xd[i * b * c..(i + 1) * b * c]) {
                        *o += v;
                    }
                }
                out.iter_mut().for_each(|v| *v /= a as f64);
                (vec![b, c], out)
            }
            PoolAxes::Second => {
                let mut out = vec![0.0; a * c];
                for i in 0..a {
                    for jj in 0..b {
                        let s = (i * b + jj) * c;
                        for ch in 0..c {
                            out[i * c + ch] += xd[s + ch];
                        }
                    }
                }
                out.iter_mut().for_each(|v| *v /= b as f64);
                (vec![a, c], out)
            }
            PoolAxes::Both => {
                let mut out = vec![0.0; c];
                for row in xd.chunks(c) {
                    for (o, v) in out.iter_mut().zip(row) {
                        *o += v;
                    }
                }
                out.iter_mut().for_each(|v| *v /= (a * b) as f64);
                (vec![c], out)
            }
        };
        let rg = self.rg(x);
        self.push(
            Tensor::from_parts(shape, data),
            Op::MeanPool { x, dims, axes },
            rg,
        )
    }

    /// Flattens `x` and zero-pads it to `len`.
    pub fn pad(&mut self, x: Var, len: usize) -> Var {
        let vx = self.value(x);
        assert!(vx.len() <= len, "pad target shorter than input");
        let mut data = vx.data().to_vec();
        data.resize(len, 0.0);
        let rg = self.rg(x);
        self.push(Tensor::vector(data), Op::Pad(x), rg)
    }

    /// Mean of the first `valid / channels` length-`channels` positions of a flat vector.
    pub fn masked_mean(&mut self, x: Var, valid: usize, channels: usize) -> Var {
        let vx = self.value(x);
        assert!(channels > 0 && valid.is_multiple_of(channels) && valid > 0 && valid <= vx.len());
        let positions = valid / channels;
        let mut out = vec![0.0; channels];
        for row in vx.data()[..valid].chunks(channels) {
            for (o, v) in out.iter_mut().zip(row) {
                *o += v;
            }
        }
        out.iter_mut().for_each(|v| *v /= positions as f64);
        let rg = self.rg(x);
        self.push(
            Tensor::vector(out),
            Op::MaskedMean { x, valid, channels },
            rg,
        )
    }

    /// Stacks rows; vectors count as single rows.
    pub fn concat_rows(&mut self, parts: &[Var]) -> Var {
        assert!(!parts.is_empty());
        let n = self.value(parts[0]).cols();
        let mut data = Vec::new();
        let mut rows = 0;
        for &p in parts {
            let v = self.value(p);
            assert_eq!(v.cols(), n, "concat_rows width mismatch");
            rows += v.rows();
            data.extend_from_slice(v.data());
        }
        let rg = parts.iter().any(|&p| self.rg(p));
        self.push(
            Tensor::from_parts(vec![rows, n], data),
            Op::ConcatRows(parts.to_vec()),
            rg,
        )
    }

    pub fn slice_cols(&mut self, x: Var, start: usize, len: usize) -> Var {
        let vx = self.value(x);
        let (r, c) = (vx.rows(), vx.cols());
        assert!(start + len <= c);
        let mut data = Vec::with_capacity(r * len);
        for i in 0..r {
            data.extend_from_slice(&vx.data()[i * c + start..i * c + start + len]);
        }
        let rg = self.rg(x);
        self.push(
            Tensor::from_parts(vec![r, len], data),
            Op::SliceCols { x, start },
            rg,
        )
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Var {
        assert!(!parts.is_empty());
        let r = self.value(parts[0]).rows();
        let widths: Vec<usize> = parts.iter().map(|&p| self.value(p).cols()).collect();
        let total: usize = widths.iter().sum();
        let mut data = vec![0.0; r * total];
        let mut offset = 0;
        for (&p, &w) in parts.iter().zip(&widths) {
            let v = self.value(p);
            assert_eq!(v.rows(), r, "concat_cols height mismatch");
            for i in 0..r {
                data[i * total + offset..i * total + offset + w].copy_from_slice(v.row(i));
            }
            offset += w;
        }
        let rg = parts.iter().any(|&p| self.rg(p));
        self.push(
            Tensor::from_parts(vec![r, total], data),
            Op::ConcatCols(parts.to_vec()),
            rg,
        )
    }

    pub fn gather_rows(&mut self, table: Var, ids: &[usize]) -> Var {
        let vt = self.value(table);
        let n = vt.cols();
        let mut data = Vec::with_capacity(ids.len() * n);
        for &id in ids {
            assert!(id < vt.rows(), "gather index {id} out of range");
            data.extend_from_slice(vt.row(id));
        }
        let rg = self.rg(table);
        self.push(
            Tensor::from_parts(vec![ids.len(), n], data),
            Op::GatherRows {
                table,
                ids: ids.to_vec(),
            },
            rg,
        )
    }

    /// Copy of `base` whose rows at `positions` are taken from consecutive rows of `repl`.
    pub fn replace_rows(&mut self, base: Var, repl: Var, positions: &[usize]) -> Var {
        let (vb, vr) = (self.value(base), self.value(repl));
        let n = vb.cols();
        assert_eq!(vr.cols(), n, "replace_rows width mismatch");
        assert_eq!(vr.rows(), positions.len(), "replace_rows count mismatch");
        let mut data = vb.data().to_vec();
        for (k, &p) in positions.iter().enumerate() {
            data[p * n..(p + 1) * n].copy_from_slice(vr.row(k));
        }
        let value = Tensor::from_parts(vb.shape().to_vec(), data);
        let rg = self.rg(base) || self.rg(repl);
        self.push(
            value,
            Op::ReplaceRows {
                base,
                repl,
                positions: positions.to_vec(),
            },
            rg,
        )
    }

    /// Scales every row to unit L2 norm. Zero rows are a degenerate input.
    pub fn normalize_rows(&mut self, x: Var) -> Result<Var> {
        let vx = self.value(x);
        let c = vx.cols();
        let mut norms = Vec::with_capacity(vx.rows());
        let mut data = vx.data().to_vec();
        for (i, row) in data.chunks_mut(c).enumerate() {
            let n = row.iter().map(|v| v * v).sum::<f64>().sqrt();
            if n == 0.0 || !n.is_finite() {
                return Err(Error::DegenerateInput(format!(
                    "row {i} has zero norm; cosine similarity is undefined"
                )));
            }
            row.iter_mut().for_each(|v| *v /= n);
            norms.push(n);
        }
        let value = Tensor::from_parts(vx.shape().to_vec(), data);
        let rg = self.rg(x);
        Ok(self.push(value, Op::NormalizeRows { x, norms }, rg))
    }

    pub fn log_softmax_rows(&mut self, x: Var) -> Var {
        let vx = self.value(x);
        let c = vx.cols();
        let mut data = Vec::with_capacity(vx.len());
        for row in vx.data().chunks(c) {
            data.extend(super::functions::log_softmax(row));
        }
        let value = Tensor::from_parts(vx.shape().to_vec(), data);
        let rg = self.rg(x);
        self.push(value, Op::LogSoftmaxRows(x), rg)
    }

    /// Row softmax restricted to `allowed` entries (row-major mask of the same
    /// shape); disallowed entries get probability 0. Every row needs at least
    /// one allowed entry.
    pub fn masked_softmax_rows(&mut self, x: Var, allowed: &[bool]) -> Var {
        let vx = self.value(x);
        let c = vx.cols();
        assert_eq!(allowed.len(), vx.len());
        let mut data = vec![0.0; vx.len()];
        for (i, row) in vx.data().chunks(c).enumerate() {
            let mask = &allowed[i * c..(i + 1) * c];
            let max = row
                .iter()
                .zip(mask)
                .filter(|(_, &m)| m)
                .map(|(&v, _)| v)
                .fold(f64::NEG_INFINITY, f64::max);
            assert!(
                max.is_finite(),
                "masked softmax row {i} has no allowed entry"
            );
            let mut total = 0.0;
            for j in 0..c {
                if mask[j] {
                    let e = (row[j] - max).exp();
                    data[i * c + j] = e;
                    total += e;
                }
            }
            for v in &mut data[i * c..(i + 1) * c] {
                *v /= total;
            }
        }
        let value = Tensor::from_parts(vx.shape().to_vec(), data);
        let rg = self.rg(x);
        self.push(value, Op::MaskedSoftmaxRows(x), rg)
    }

    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Var {
        let (vx, vg, vb) = (self.value(x), self.value(gamma), self.value(beta));
        let c = vx.cols();
        assert_eq!(vg.len(), c);
        assert_eq!(vb.len(), c);
        let mut xhat = Vec::with_capacity(vx.len());
        let mut inv_std = Vec::with_capacity(vx.rows());
        let mut out = Vec::with_capacity(vx.len());
        for row in vx.data().chunks(c) {
            let mean = row.iter().sum::<f64>() / c as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / c as f64;
            let is = 1.0 / (var + eps).sqrt();
            inv_std.push(is);
            for (j, v) in row.iter().enumerate() {
                let h = (v - mean) * is;
                xhat.push(h);
                out.push(h * vg.data()[j] + vb.data()[j]);
            }
        }
        let value = Tensor::from_parts(vx.shape().to_vec(), out);
        let rg = self.rg(x) || self.rg(gamma) || self.rg(beta);
        self.push(
            value,
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
            },
            rg,
        )
    }

    /// Mean negative log-likelihood over rows that carry a target.
    pub fn nll_rows(&mut self, logp: Var, targets: &[Option<usize>]) -> Var {
        let v = self.value(logp);
        let c = v.cols();
        assert_eq!(targets.len(), v.rows(), "one target slot per row");
        let mut total = 0.0;
        let mut count = 0;
        for (i, t) in targets.iter().enumerate() {
            if let Some(t) = *t {
                assert!(t < c, "target {t} out of range");
                total -= v.data()[i * c + t];
                count += 1;
            }
        }
        assert!(count > 0, "nll_rows needs at least one target");
        let rg = self.rg(logp);
        self.push(
            Tensor::scalar(total / count as f64),
            Op::NllRows {
                logp,
                targets: targets.to_vec(),
                count,
            },
            rg,
        )
    }

    /// `mean_i KL(target_i ‖ exp(logp_i))` with `0·log 0 := 0`.
    pub fn kl_rows(&mut self, logp: Var, target: Rc<Tensor>) -> Var {
        let v = self.value(logp);
        assert_eq!(v.len(), target.len());
        let rows = v.rows();
        let mut total = 0.0;
        for (t, lp) in target.data().iter().zip(v.data()) {
            if *t > 0.0 {
                total += t * (t.ln() - lp);
            }
        }
        let rg = self.rg(logp);
        self.push(
            Tensor::scalar(total / rows as f64),
            Op::KlRows { logp, target },
            rg,
        )
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).sum();
        let rg = self.rg(x);
        self.push(Tensor::scalar(s), Op::Sum(x), rg)
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let v = self.value(x);
        let s = v.sum() / v.len() as f64;
        let rg = self.rg(x);
        self.push(Tensor::scalar(s), Op::Mean(x), rg)
    }

    /// Gradients of the scalar `loss` with respect to every node that requires one.
    pub fn backward(&self, loss: Var) -> Gradients {
        assert_eq!(self.value(loss).len(), 1, "backward needs a scalar loss");
        let mut grads: Vec<Option<Vec<f64>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(vec![1.0]);

        for idx in (0..=loss.0).rev() {
            let node = &self.nodes[idx];
            if !node.requires_grad {
                continue;
            }
            let Some(g) = grads[idx].take() else {
                continue;
            };
            self.propagate(&node.op, &node.value, &g, &mut grads);
            grads[idx] = Some(g);
        }

        Gradients {
            grads: grads
                .into_iter()
                .zip(&self.nodes)
                .map(|(g, n)| g.map(|d| Tensor::from_parts(n.value.shape().to_vec(), d)))
                .collect(),
        }
    }

    fn propagate(&self, op: &Op, out: &Tensor, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let nodes = &self.nodes;
        let len = |v: Var| nodes[v.0].value.len();
        let want = |v: Var| nodes[v.0].requires_grad;
        match op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (va, vb) = (&nodes[a.0].value, &nodes[b.0].value);
                let (m, k, n) = (va.rows(), va.cols(), vb.cols());
                if want(*a) {
                    let ga = push_grad(&mut grads[a.0], m * k);
                    gemm(m, n, k, g, false, vb.data(), true, ga, 1.0);
                }
                if want(*b) {
                    let gb = push_grad(&mut grads[b.0], k * n);
                    gemm(k, m, n, va.data(), true, g, false, gb, 1.0);
                }
            }
            Op::MatMulNt(a, b) => {
                let (va, vb) = (&nodes[a.0].value, &nodes[b.0].value);
                let (m, k, n) = (va.rows(), va.cols(), vb.rows());
                if want(*a) {
                    let ga = push_grad(&mut grads[a.0], m * k);
                    gemm(m, n, k, g, false, vb.data(), false, ga, 1.0);
                }
                if want(*b) {
                    let gb = push_grad(&mut grads[b.0], n * k);
                    gemm(n, m, k, g, true, va.data(), false, gb, 1.0);
                }
            }
            Op::Add(a, b) => {
                for v in [*a, *b] {
                    if want(v) {
                        let gv = push_grad(&mut grads[v.0], g.len());
                        gv.iter_mut().zip(g).for_each(|(x, y)| *x += y);
                    }
                }
            }
            Op::AddRow(a, bias) => {
                if want(*a) {
                    let ga = push_grad(&mut grads[a.0], g.len());
                    ga.iter_mut().zip(g).for_each(|(x, y)| *x += y);
                }
                if want(*bias) {
                    let n = len(*bias);
                    let gb = push_grad(&mut grads[bias.0], n);
                    for row in g.chunks(n) {
                        gb.iter_mut().zip(row).for_each(|(x, y)| *x += y);
                    }
                }
            }
            Op::Mul(a, b) => {
                let (va, vb) = (nodes[a.0].value.data(), nodes[b.0].value.data());
                if want(*a) {
                    let ga = push_grad(&mut grads[a.0], g.len());
                    for i in 0..g.len() {
                        ga[i] += g[i] * vb[i];
                    }
                }
                if want(*b) {
                    let gb = push_grad(&mut grads[b.0], g.len());
                    for i in 0..g.len() {
                        gb[i] += g[i] * va[i];
                    }
                }
            }
            Op::Scale(a, s) => {
                let ga = push_grad(&mut grads[a.0], g.len());
                ga.iter_mut().zip(g).for_each(|(x, y)| *x += y * s);
            }
            Op::MulConst(a, f) => {
                let ga = push_grad(&mut grads[a.0], g.len());
                for i in 0..g.len() {
                    ga[i] += g[i] * f[i];
                }
            }
            Op::Relu(a) => {
                let va = nodes[a.0].value.data();
                let ga = push_grad(&mut grads[a.0], g.len());
                for i in 0..g.len() {
                    if va[i] > 0.0 {
                        ga[i] += g[i];
                    }
                }
            }
            Op::Gelu(a) => {
                let va = nodes[a.0].value.data();
                let ga = push_grad(&mut grads[a.0], g.len());
                for i in 0..g.len() {
                    ga[i] += g[i] * gelu_grad(va[i]);
                }
            }
            Op::Reshape(a) => {
                let ga = push_grad(&mut grads[a.0], g.len());
                ga.iter_mut().zip(g).for_each(|(x, y)| *x += y);
            }
            Op::Transpose(a) => {
                // out is (c, r); input is (r, c)
                let (r, c) = (out.cols(), out.rows());
                let ga = push_grad(&mut grads[a.0], g.len());
                for i in 0..r {
                    for j in 0..c {
                        ga[i * c + j] += g[j * r + i];
                    }
                }
            }
            Op::GraphMix { x, adj, frames } => {
                let j = adj.rows();
                let c = out.cols();
                let block = j * c;
                let gx = push_grad(&mut grads[x.0], g.len());
                for t in 0..*frames {
                    gemm(
                        j,
                        j,
                        c,
                        adj.data(),
                        true,
                        &g[t * block..(t + 1) * block],
                        false,
                        &mut gx[t * block..(t + 1) * block],
                        1.0,
                    );
                }
            }
            Op::TemporalConv {
                x,
                kernel,
                frames,
                joints,
            } => {
                let (vx, vk) = (&nodes[x.0].value, &nodes[kernel.0].value);
                let c = vx.cols();
                let half = (vk.rows() / 2) as isize;
                let (wx, wk) = (want(*x), want(*kernel));
                let mut gx = if wx { grads[x.0].take() } else { None };
                let mut gk = if wk { grads[kernel.0].take() } else { None };
                if wx {
                    gx.get_or_insert_with(|| vec![0.0; vx.len()]);
                }
                if wk {
                    gk.get_or_insert_with(|| vec![0.0; vk.len()]);
                }
                for t in 0..*frames {
                    for ki in 0..vk.rows() {
                        let src_t = t as isize + ki as isize - half;
                        if src_t < 0 || src_t >= *frames as isize {
                            continue;
                        }
                        let src_t = src_t as usize;
                        let krow = vk.row(ki);
                        for jj in 0..*joints {
                            let o = (t * joints + jj) * c;
                            let s = (src_t * joints + jj) * c;
                            if let Some(gx) = gx.as_mut() {
                                for ch in 0..c {
                                    gx[s + ch] += krow[ch] * g[o + ch];
                                }
                            }
                            if let Some(gk) = gk.as_mut() {
                                let xd = vx.data();
                                for ch in 0..c {
                                    gk[ki * c + ch] += xd[s + ch] * g[o + ch];
                                }
                            }
                        }
                    }
                }
                if wx {
                    grads[x.0] = gx;
                }
                if wk {
                    grads[kernel.0] = gk;
                }
            }
            Op::MeanPool { x, dims, axes } => {
                let [a, b, c] = *dims;
                let gx = push_grad(&mut grads[x.0], a * b * c);
                match axes {
                    PoolAxes::First => {
                        let s = 1.0 / a as f64;
                        for i in 0..a {
                            for (o, v) in gx[i * b * c..(i + 1) * b * c].iter_mut().zip(g) {
                                *o += v * s;
                            }
                        }
                    }
                    PoolAxes::Second => {
                        let s = 1.0 / b as f64;
                        for i in 0..a {
                            for jj in 0..b {
                                let base = (i * b + jj) * c;
                                for ch in 0..c {
                                    gx[base + ch] += g[i * c + ch] * s;
                                }
                            }
                        }
                    }
                    PoolAxes::Both => {
                        let s = 1.0 / (a * b) as f64;
                        for row in gx.chunks_mut(c) {
                            row.iter_mut().zip(g).for_each(|(o, v)| *o += v * s);
                        }
                    }
                }
            }
            Op::Pad(x) => {
                let n = len(*x);
                let gx = push_grad(&mut grads[x.0], n);
                gx.iter_mut().zip(&g[..n]).for_each(|(o, v)| *o += v);
            }
            Op::MaskedMean { x, valid, channels } => {
                let n = len(*x);
                let s = (*channels as f64) / (*valid as f64);
                let gx = push_grad(&mut grads[x.0], n);
                for row in gx[..*valid].chunks_mut(*channels) {
                    row.iter_mut().zip(g).for_each(|(o, v)| *o += v * s);
                }
            }
            Op::ConcatRows(parts) => {
                let mut offset = 0;
                for &p in parts {
                    let n = len(p);
                    if want(p) {
                        let gp = push_grad(&mut grads[p.0], n);
                        gp.iter_mut()
                            .zip(&g[offset..offset + n])
                            .for_each(|(o, v)| *o += v);
                    }
                    offset += n;
                }
            }
            Op::SliceCols { x, start } => {
                let vx = &nodes[x.0].value;
                let (r, c) = (vx.rows(), vx.cols());
                let w = out.cols();
                let gx = push_grad(&mut grads[x.0], r * c);
                for i in 0..r {
                    for k in 0..w {
                        gx[i * c + start + k] += g[i * w + k];
                    }
                }
            }
            Op::ConcatCols(parts) => {
                let total = out.cols();
                let r = out.rows();
                let mut offset = 0;
                for &p in parts {
                    let w = nodes[p.0].value.cols();
                    if want(p) {
                        let gp = push_grad(&mut grads[p.0], r * w);
                        for i in 0..r {
                            for k in 0..w {
                                gp[i * w + k] += g[i * total + offset + k];
                            }
                        }
                    }
                    offset += w;
                }
            }
            Op::GatherRows { table, ids } => {
                let n = out.cols();
                let gt = push_grad(&mut grads[table.0], len(*table));
                for (k, &id) in ids.iter().enumerate() {
                    for ch in 0..n {
                        gt[id * n + ch] += g[k * n + ch];
                    }
                }
            }
            Op::ReplaceRows {
                base,
                repl,
                positions,
            } => {
                let n = out.cols();
                if want(*base) {
                    let gb = push_grad(&mut grads[base.0], g.len());
                    let mut replaced = vec![false; out.rows()];
                    for &p in positions {
                        replaced[p] = true;
                    }
                    for (i, row) in g.chunks(n).enumerate() {
                        if !replaced[i] {
                            for ch in 0..n {
                                gb[i * n + ch] += row[ch];
                            }
                        }
                    }
                }
                if want(*repl) {
                    let gr = push_grad(&mut grads[repl.0], positions.len() * n);
                    for (k, &p) in positions.iter().enumerate() {
                        for ch in 0..n {
                            gr[k * n + ch] += g[p * n + ch];
                        }
                    }
                }
            }
            Op::NormalizeRows { x, norms } => {
                let c = out.cols();
                let y = out.data();
                let gx = push_grad(&mut grads[x.0], g.len());
                for (i, n) in norms.iter().enumerate() {
                    let yr = &y[i * c..(i + 1) * c];
                    let gr = &g[i * c..(i + 1) * c];
                    let d: f64 = yr.iter().zip(gr).map(|(a, b)| a * b).sum();
                    for ch in 0..c {
                        gx[i * c + ch] += (gr[ch] - yr[ch] * d) / n;
                    }
                }
            }
            Op::LogSoftmaxRows(x) => {
                let c = out.cols();
                let gx = push_grad(&mut grads[x.0], g.len());
                for (i, lp) in out.data().chunks(c).enumerate() {
                    let gr = &g[i * c..(i + 1) * c];
                    let s: f64 = gr.iter().sum();
                    for ch in 0..c {
                        gx[i * c + ch] += gr[ch] - lp[ch].exp() * s;
                    }
                }
            }
            Op::MaskedSoftmaxRows(x) => {
                let c = out.cols();
                let gx = push_grad(&mut grads[x.0], g.len());
                for (i, p) in out.data().chunks(c).enumerate() {
                    let gr = &g[i * c..(i + 1) * c];
                    let d: f64 = p.iter().zip(gr).map(|(a, b)| a * b).sum();
                    for ch in 0..c {
                        gx[i * c + ch] += p[ch] * (gr[ch] - d);
                    }
                }
            }
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
            } => {
                let c = out.cols();
                let gm = nodes[gamma.0].value.data();
                if want(*gamma) {
                    let gg = push_grad(&mut grads[gamma.0], c);
                    for (i, row) in g.chunks(c).enumerate() {
                        for ch in 0..c {
                            gg[ch] += row[ch] * xhat[i * c + ch];
                        }
                    }
                }
                if want(*beta) {
                    let gb = push_grad(&mut grads[beta.0], c);
                    for row in g.chunks(c) {
                        gb.iter_mut().zip(row).for_each(|(o, v)| *o += v);
                    }
                }
                if want(*x) {
                    let gx = push_grad(&mut grads[x.0], g.len());
                    for (i, row) in g.chunks(c).enumerate() {
                        let xh = &xhat[i * c..(i + 1) * c];
                        let dxh: Vec<f64> = row.iter().zip(gm).map(|(a, b)| a * b).collect();
                        let m1 = dxh.iter().sum::<f64>() / c as f64;
                        let m2 = dxh.iter().zip(xh).map(|(a, b)| a * b).sum::<f64>() / c as f64;
                        for ch in 0..c {
                            gx[i * c + ch] += inv_std[i] * (dxh[ch] - m1 - xh[ch] * m2);
                        }
                    }
                }
            }
            Op::NllRows {
                logp,
                targets,
                count,
            } => {
                let c = nodes[logp.0].value.cols();
                let gl = push_grad(&mut grads[logp.0], len(*logp));
                let s = g[0] / *count as f64;
                for (i, t) in targets.iter().enumerate() {
                    if let Some(t) = t {
                        gl[i * c + t] -= s;
                    }
                }
            }
            Op::KlRows { logp, target } => {
                let rows = nodes[logp.0].value.rows();
                let gl = push_grad(&mut grads[logp.0], len(*logp));
                let s = g[0] / rows as f64;
                for (o, t) in gl.iter_mut().zip(target.data()) {
                    *o -= t * s;
                }
            }
            Op::Sum(x) => {
                let gx = push_grad(&mut grads[x.0], len(*x));
                gx.iter_mut().for_each(|o| *o += g[0]);
            }
            Op::Mean(x) => {
                let n = len(*x);
                let gx = push_grad(&mut grads[x.0], n);
                gx.iter_mut().for_each(|o| *o += g[0] / n as f64);
            }
        }
    }
}
