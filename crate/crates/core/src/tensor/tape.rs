//! Build-then-consume reverse-mode tape.
//!
//! Every op validates shapes at record time, stores its forward value, and
//! `backward` replays the op list in exact reverse order. Gradients are kept
//! for leaves only; a consumed tape refuses further recording or replay.

use super::kernels::{self, ConvDims, PoolDims};
use super::{broadcast_shape, broadcast_strides, reduce_grad_into, zip_broadcast, Tensor};
use crate::error::{Error, Result};

/// Handle to a tensor recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Var(usize);

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ReduceKind {
    Sum,
    Mean,
    L1Norm,
    L2Norm,
}

enum Op {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Div(Var, Var),
    AddScalar(Var),
    MulScalar(Var, f64),
    Neg(Var),
    Exp(Var),
    Log(Var),
    Relu(Var),
    Abs(Var),
    Sigmoid(Var),
    Matmul(Var, Var),
    Transpose(Var),
    Conv2d { x: Var, k: Var, dims: ConvDims },
    MaxPool { x: Var, argmax: Vec<usize> },
    AvgPool { x: Var, dims: PoolDims },
    Reduce { x: Var, kind: ReduceKind, axes: Vec<usize> },
    L2NormalizeRows { x: Var, eps: f64 },
    ProjectChannels { w: Var, f: Var },
    WeightedGap { a: Var, f: Var },
    Reshape(Var),
    BceWithLogits { z: Var, targets: Vec<f64>, weights: Option<Vec<f64>> },
}

struct Node {
    shape: Vec<usize>,
    value: Vec<f64>,
    requires: bool,
    op: Op,
}

/// Ordered record of executed ops; replayable exactly once.
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
    grads: Vec<Option<Vec<f64>>>,
    consumed: bool,
}

impl Default for Op {
    fn default() -> Self {
        Op::Leaf
    }
}

impl Tape {
    pub fn new() -> Self {
        Tape::default()
    }

    fn push(&mut self, shape: Vec<usize>, value: Vec<f64>, requires: bool, op: Op) -> Result<Var> {
        if self.consumed {
            return Err(Error::TapeConsumed);
        }
        debug_assert_eq!(shape.iter().product::<usize>(), value.len());
        self.nodes.push(Node {
            shape,
            value,
            requires,
            op,
        });
        self.grads.push(None);
        Ok(Var(self.nodes.len() - 1))
    }

    fn requires(&self, v: Var) -> bool {
        self.nodes[v.0].requires
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.nodes[v.0].shape
    }

    pub fn data(&self, v: Var) -> &[f64] {
        &self.nodes[v.0].value
    }

    pub fn to_tensor(&self, v: Var) -> Tensor {
        Tensor::new(self.nodes[v.0].shape.clone(), self.nodes[v.0].value.clone())
            .expect("node shape consistent")
    }

    /// Gradient accumulated into `v` by the last `backward`, if any.
    pub fn grad(&self, v: Var) -> Option<Tensor> {
        self.grads[v.0]
            .as_ref()
            .map(|g| Tensor::new(self.nodes[v.0].shape.clone(), g.clone()).expect("grad shape"))
    }

    // ---- leaves ----------------------------------------------------------

    pub fn leaf(&mut self, t: &Tensor, requires_grad: bool) -> Result<Var> {
        self.push(
            t.shape().to_vec(),
            t.data().to_vec(),
            requires_grad,
            Op::Leaf,
        )
    }

    pub fn constant(&mut self, t: &Tensor) -> Result<Var> {
        self.leaf(t, false)
    }

    pub fn scalar(&mut self, v: f64) -> Result<Var> {
        self.constant(&Tensor::scalar(v))
    }

    // ---- elementwise -----------------------------------------------------

    fn binary(
        &mut self,
        name: &'static str,
        a: Var,
        b: Var,
        f: impl Fn(f64, f64) -> f64,
        op: Op,
    ) -> Result<Var> {
        let out_shape =
            broadcast_shape(&self.nodes[a.0].shape, &self.nodes[b.0].shape).map_err(|_| {
                Error::ShapeMismatch {
                    op: name,
                    lhs: self.nodes[a.0].shape.clone(),
                    rhs: self.nodes[b.0].shape.clone(),
                }
            })?;
        let value = zip_broadcast(
            &self.nodes[a.0].value,
            &self.nodes[a.0].shape,
            &self.nodes[b.0].value,
            &self.nodes[b.0].shape,
            &out_shape,
            f,
        );
        let req = self.requires(a) || self.requires(b);
        self.push(out_shape, value, req, op)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("add", a, b, |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("sub", a, b, |x, y| x - y, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("mul", a, b, |x, y| x * y, Op::Mul(a, b))
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        if self.nodes[b.0].value.iter().any(|&v| v == 0.0) {
            return Err(Error::Domain {
                op: "div",
                detail: "division by zero".into(),
            });
        }
        self.binary("div", a, b, |x, y| x / y, Op::Div(a, b))
    }

    pub fn add_scalar(&mut self, a: Var, s: f64) -> Result<Var> {
        let value = self.nodes[a.0].value.iter().map(|&v| v + s).collect();
        let req = self.requires(a);
        self.push(self.nodes[a.0].shape.clone(), value, req, Op::AddScalar(a))
    }

    pub fn mul_scalar(&mut self, a: Var, s: f64) -> Result<Var> {
        let value = self.nodes[a.0].value.iter().map(|&v| v * s).collect();
        let req = self.requires(a);
        self.push(self.nodes[a.0].shape.clone(), value, req, Op::MulScalar(a, s))
    }

    fn unary(&mut self, a: Var, f: impl Fn(f64) -> f64, op: Op) -> Result<Var> {
        let value = self.nodes[a.0].value.iter().map(|&v| f(v)).collect();
        let req = self.requires(a);
        self.push(self.nodes[a.0].shape.clone(), value, req, op)
    }

    pub fn neg(&mut self, a: Var) -> Result<Var> {
        self.unary(a, |v| -v, Op::Neg(a))
    }

    pub fn exp(&mut self, a: Var) -> Result<Var> {
        self.unary(a, f64::exp, Op::Exp(a))
    }

    pub fn log(&mut self, a: Var) -> Result<Var> {
        if self.nodes[a.0].value.iter().any(|&v| v <= 0.0) {
            return Err(Error::Domain {
                op: "log",
                detail: "argument must be strictly positive".into(),
            });
        }
        self.unary(a, f64::ln, Op::Log(a))
    }

    pub fn relu(&mut self, a: Var) -> Result<Var> {
        self.unary(a, |v| v.max(0.0), Op::Relu(a))
    }

    pub fn abs(&mut self, a: Var) -> Result<Var> {
        self.unary(a, f64::abs, Op::Abs(a))
    }

    pub fn sigmoid(&mut self, a: Var) -> Result<Var> {
        self.unary(a, kernels::sigmoid, Op::Sigmoid(a))
    }

    // ---- linear algebra ---------------------------------------------------

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (&self.nodes[a.0].shape, &self.nodes[b.0].shape);
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(Error::ShapeMismatch {
                op: "matmul",
                lhs: sa.clone(),
                rhs: sb.clone(),
            });
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let mut out = vec![0.0; m * n];
        kernels::matmul_nn(
            &self.nodes[a.0].value,
            &self.nodes[b.0].value,
            m,
            k,
            n,
            &mut out,
        );
        let req = self.requires(a) || self.requires(b);
        self.push(vec![m, n], out, req, Op::Matmul(a, b))
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let s = &self.nodes[a.0].shape;
        if s.len() != 2 {
            return Err(Error::Geometry {
                op: "transpose",
                detail: format!("expected rank 2, got {:?}", s),
            });
        }
        let (r, c) = (s[0], s[1]);
        let x = &self.nodes[a.0].value;
        let mut out = vec![0.0; r * c];
        for i in 0..r {
            for j in 0..c {
                out[j * r + i] = x[i * c + j];
            }
        }
        let req = self.requires(a);
        self.push(vec![c, r], out, req, Op::Transpose(a))
    }

    // ---- convolution and pooling ------------------------------------------

    pub fn conv2d(&mut self, x: Var, k: Var, stride: usize, padding: usize) -> Result<Var> {
        let (sx, sk) = (&self.nodes[x.0].shape, &self.nodes[k.0].shape);
        if sx.len() != 4 || sk.len() != 4 || sx[1] != sk[1] {
            return Err(Error::ShapeMismatch {
                op: "conv2d",
                lhs: sx.clone(),
                rhs: sk.clone(),
            });
        }
        let (batch, cin, h, w) = (sx[0], sx[1], sx[2], sx[3]);
        let (cout, kh, kw) = (sk[0], sk[2], sk[3]);
        if stride == 0 || kh == 0 || kw == 0 || kh > h + 2 * padding || kw > w + 2 * padding {
            return Err(Error::Geometry {
                op: "conv2d",
                detail: format!(
                    "kernel {}x{} stride {} padding {} on input {}x{}",
                    kh, kw, stride, padding, h, w
                ),
            });
        }
        let oh = kernels::conv_out_extent(h, kh, stride, padding);
        let ow = kernels::conv_out_extent(w, kw, stride, padding);
        let dims = ConvDims {
            batch,
            cin,
            h,
            w,
            cout,
            kh,
            kw,
            stride,
            padding,
            oh,
            ow,
        };
        let mut out = vec![0.0; batch * cout * oh * ow];
        kernels::conv2d_forward(&self.nodes[x.0].value, &self.nodes[k.0].value, &dims, &mut out);
        let req = self.requires(x) || self.requires(k);
        self.push(vec![batch, cout, oh, ow], out, req, Op::Conv2d { x, k, dims })
    }

    fn pool_dims(
        &self,
        op: &'static str,
        x: Var,
        window: (usize, usize),
        stride: (usize, usize),
    ) -> Result<PoolDims> {
        let s = &self.nodes[x.0].shape;
        if s.len() != 4 {
            return Err(Error::Geometry {
                op,
                detail: format!("expected rank-4 input, got {:?}", s),
            });
        }
        let (batch, channels, h, w) = (s[0], s[1], s[2], s[3]);
        let (wh, ww) = window;
        let (sh, sw) = stride;
        if wh == 0 || ww == 0 || sh == 0 || sw == 0 || wh > h || ww > w {
            return Err(Error::Geometry {
                op,
                detail: format!("window {}x{} stride {}x{} on {}x{}", wh, ww, sh, sw, h, w),
            });
        }
        Ok(PoolDims {
            batch,
            channels,
            h,
            w,
            wh,
            ww,
            sh,
            sw,
            oh: (h - wh) / sh + 1,
            ow: (w - ww) / sw + 1,
        })
    }

    pub fn max_pool2d(
        &mut self,
        x: Var,
        window: (usize, usize),
        stride: (usize, usize),
    ) -> Result<Var> {
        let d = self.pool_dims("max_pool2d", x, window, stride)?;
        let n = d.batch * d.channels * d.oh * d.ow;
        let mut out = vec![0.0; n];
        let mut argmax = vec![0usize; n];
        kernels::max_pool_forward(&self.nodes[x.0].value, &d, &mut out, &mut argmax);
        let shape = vec![d.batch, d.channels, d.oh, d.ow];
        let req = self.requires(x);
        self.push(shape, out, req, Op::MaxPool { x, argmax })
    }

    pub fn avg_pool2d(
        &mut self,
        x: Var,
        window: (usize, usize),
        stride: (usize, usize),
    ) -> Result<Var> {
        let d = self.pool_dims("avg_pool2d", x, window, stride)?;
        let n = d.batch * d.channels * d.oh * d.ow;
        let mut out = vec![0.0; n];
        kernels::avg_pool_forward(&self.nodes[x.0].value, &d, &mut out);
        let shape = vec![d.batch, d.channels, d.oh, d.ow];
        let req = self.requires(x);
        self.push(shape, out, req, Op::AvgPool { x, dims: d })
    }

    // ---- reductions --------------------------------------------------------

    /// Reduce over `axes` (all axes when empty), removing the reduced axes.
    pub fn reduce(&mut self, x: Var, kind: ReduceKind, axes: &[usize]) -> Result<Var> {
        let shape = self.nodes[x.0].shape.clone();
        let rank = shape.len();
        let axes: Vec<usize> = if axes.is_empty() {
            (0..rank).collect()
        } else {
            let mut a = axes.to_vec();
            a.sort_unstable();
            a.dedup();
            if a.len() != axes.len() || a.iter().any(|&ax| ax >= rank) {
                return Err(Error::Geometry {
                    op: "reduce",
                    detail: format!("axes {:?} invalid for rank {}", axes, rank),
                });
            }
            a
        };
        let out_shape: Vec<usize> = (0..rank)
            .filter(|d| !axes.contains(d))
            .map(|d| shape[d])
            .collect();
        let out_len: usize = out_shape.iter().product();
        let count: usize = axes.iter().map(|&d| shape[d]).product();

        let mut out = vec![0.0; out_len];
        let x_val = &self.nodes[x.0].value;
        for_each_reduce_index(&shape, &axes, |i, o| {
            let v = x_val[i];
            out[o] += match kind {
                ReduceKind::Sum | ReduceKind::Mean => v,
                ReduceKind::L1Norm => v.abs(),
                ReduceKind::L2Norm => v * v,
            };
        });
        match kind {
            ReduceKind::Mean => {
                let inv = 1.0 / count as f64;
                out.iter_mut().for_each(|v| *v *= inv);
            }
            ReduceKind::L2Norm => out.iter_mut().for_each(|v| *v = v.sqrt()),
            _ => {}
        }
        let req = self.requires(x);
        self.push(out_shape, out, req, Op::Reduce { x, kind, axes })
    }

    pub fn sum(&mut self, x: Var) -> Result<Var> {
        self.reduce(x, ReduceKind::Sum, &[])
    }

    pub fn mean(&mut self, x: Var) -> Result<Var> {
        self.reduce(x, ReduceKind::Mean, &[])
    }

    // ---- normalization ------------------------------------------------------

    /// Normalize each row of a 2-D tensor to unit L2 norm, guarding zero rows:
    /// row / max(‖row‖₂, eps).
    pub fn l2_normalize_rows(&mut self, x: Var, eps: f64) -> Result<Var> {
        let s = self.nodes[x.0].shape.clone();
        if s.len() != 2 {
            return Err(Error::Geometry {
                op: "l2_normalize_rows",
                detail: format!("expected rank 2, got {:?}", s),
            });
        }
        let cols = s[1];
        let mut out = Vec::with_capacity(self.nodes[x.0].value.len());
        for row in self.nodes[x.0].value.chunks(cols) {
            let norm = row.iter().map(|v| v * v).sum::<f64>().sqrt();
            let denom = norm.max(eps);
            out.extend(row.iter().map(|v| v / denom));
        }
        let req = self.requires(x);
        self.push(s, out, req, Op::L2NormalizeRows { x, eps })
    }

    /// Normalize the whole tensor as a single vector: x / max(‖x‖₂, eps).
    pub fn l2_normalize(&mut self, x: Var, eps: f64) -> Result<Var> {
        let shape = self.nodes[x.0].shape.clone();
        let n = self.nodes[x.0].value.len();
        let flat = self.reshape(x, &[1, n])?;
        let normed = self.l2_normalize_rows(flat, eps)?;
        self.reshape(normed, &shape)
    }

    // ---- attention contractions ---------------------------------------------

    /// out[b,m,y,x] = Σ_c w[m,c] · f[b,c,y,x].
    pub fn project_channels(&mut self, w: Var, f: Var) -> Result<Var> {
        let (sw, sf) = (&self.nodes[w.0].shape, &self.nodes[f.0].shape);
        if sw.len() != 2 || sf.len() != 4 || sw[1] != sf[1] {
            return Err(Error::ShapeMismatch {
                op: "project_channels",
                lhs: sw.clone(),
                rhs: sf.clone(),
            });
        }
        let (m, c) = (sw[0], sw[1]);
        let (batch, h, wd) = (sf[0], sf[2], sf[3]);
        let plane = h * wd;
        let mut out = vec![0.0; batch * m * plane];
        kernels::project_channels_forward(
            &self.nodes[w.0].value,
            &self.nodes[f.0].value,
            batch,
            m,
            c,
            plane,
            &mut out,
        );
        let req = self.requires(w) || self.requires(f);
        self.push(vec![batch, m, h, wd], out, req, Op::ProjectChannels { w, f })
    }

    /// out[b,m,c] = (1/(H·W)) Σ_{y,x} a[b,m,y,x] · f[b,c,y,x].
    pub fn weighted_gap(&mut self, a: Var, f: Var) -> Result<Var> {
        let (sa, sf) = (&self.nodes[a.0].shape, &self.nodes[f.0].shape);
        if sa.len() != 4 || sf.len() != 4 || sa[0] != sf[0] || sa[2] != sf[2] || sa[3] != sf[3] {
            return Err(Error::ShapeMismatch {
                op: "weighted_gap",
                lhs: sa.clone(),
                rhs: sf.clone(),
            });
        }
        let (batch, m) = (sa[0], sa[1]);
        let c = sf[1];
        let plane = sa[2] * sa[3];
        let mut out = vec![0.0; batch * m * c];
        kernels::weighted_gap_forward(
            &self.nodes[a.0].value,
            &self.nodes[f.0].value,
            batch,
            m,
            c,
            plane,
            &mut out,
        );
        let req = self.requires(a) || self.requires(f);
        self.push(vec![batch, m, c], out, req, Op::WeightedGap { a, f })
    }

    // ---- shape -----------------------------------------------------------------

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let n: usize = shape.iter().product();
        if n != self.nodes[x.0].value.len() {
            return Err(Error::ShapeMismatch {
                op: "reshape",
                lhs: self.nodes[x.0].shape.clone(),
                rhs: shape.to_vec(),
            });
        }
        let value = self.nodes[x.0].value.clone();
        let req = self.requires(x);
        self.push(shape.to_vec(), value, req, Op::Reshape(x))
    }

    // ---- losses ------------------------------------------------------------------

    /// Stable binary cross-entropy from logits, optionally per-term weighted:
    /// (1/b) Σ_{i,j} w_ij · [softplus(z_ij) − z_ij·y_ij]. Scalar output.
    pub fn bce_with_logits(
        &mut self,
        z: Var,
        targets: &Tensor,
        weights: Option<&Tensor>,
    ) -> Result<Var> {
        let s = self.nodes[z.0].shape.clone();
        if s.len() != 2 || targets.shape() != s.as_slice() {
            return Err(Error::ShapeMismatch {
                op: "bce_with_logits",
                lhs: s,
                rhs: targets.shape().to_vec(),
            });
        }
        if let Some(w) = weights {
            if w.shape() != s.as_slice() {
                return Err(Error::ShapeMismatch {
                    op: "bce_with_logits",
                    lhs: s,
                    rhs: w.shape().to_vec(),
                });
            }
        }
        let batch = s[0] as f64;
        let zv = &self.nodes[z.0].value;
        let mut total = 0.0;
        for (i, (&zi, &yi)) in zv.iter().zip(targets.data()).enumerate() {
            let w = weights.map_or(1.0, |w| w.data()[i]);
            total += w * (kernels::softplus(zi) - zi * yi);
        }
        total /= batch;
        let req = self.requires(z);
        self.push(
            vec![],
            vec![total],
            req,
            Op::BceWithLogits {
                z,
                targets: targets.data().to_vec(),
                weights: weights.map(|w| w.data().to_vec()),
            },
        )
    }

    // ---- backward -------------------------------------------------------------------

    /// Populate gradients of every `requires_grad` leaf reachable from `loss`.
    /// Consumes the tape: a second call is an error.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.consumed {
            return Err(Error::TapeConsumed);
        }
        if self.nodes[loss.0].value.len() != 1 {
            return Err(Error::NonScalarLoss {
                shape: self.nodes[loss.0].shape.clone(),
            });
        }
        self.consumed = true;
        self.grads[loss.0] = Some(vec![1.0]);

        for id in (0..=loss.0).rev() {
            if !self.nodes[id].requires {
                self.grads[id] = None;
                continue;
            }
            if matches!(self.nodes[id].op, Op::Leaf) {
                continue; // leaf grads stay queryable
            }
            let Some(g) = self.grads[id].take() else {
                continue;
            };
            self.propagate(id, &g);
        }
        Ok(())
    }

    fn propagate(&mut self, id: usize, g: &[f64]) {
        // Values live in `nodes`, gradients in `grads`; the two never alias,
        // so a node's value can be read while its gradient is written.
        let op = std::mem::take(&mut self.nodes[id].op);
        let Tape { nodes, grads, .. } = self;

        macro_rules! grad_buf {
            ($v:expr) => {
                grads[$v.0].get_or_insert_with(|| vec![0.0; nodes[$v.0].value.len()])
            };
        }

        match op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                let out_shape = &nodes[id].shape;
                if nodes[a.0].requires {
                    reduce_grad_into(g, out_shape, &nodes[a.0].shape, grad_buf!(a));
                }
                if nodes[b.0].requires {
                    reduce_grad_into(g, out_shape, &nodes[b.0].shape, grad_buf!(b));
                }
            }
            Op::Sub(a, b) => {
                let out_shape = &nodes[id].shape;
                if nodes[a.0].requires {
                    reduce_grad_into(g, out_shape, &nodes[a.0].shape, grad_buf!(a));
                }
                if nodes[b.0].requires {
                    let neg: Vec<f64> = g.iter().map(|v| -v).collect();
                    reduce_grad_into(&neg, out_shape, &nodes[b.0].shape, grad_buf!(b));
                }
            }
            Op::Mul(a, b) => {
                let out_shape = &nodes[id].shape;
                if nodes[a.0].requires {
                    let full = zip_broadcast(
                        g,
                        out_shape,
                        &nodes[b.0].value,
                        &nodes[b.0].shape,
                        out_shape,
                        |gv, bv| gv * bv,
                    );
                    reduce_grad_into(&full, out_shape, &nodes[a.0].shape, grad_buf!(a));
                }
                if nodes[b.0].requires {
                    let full = zip_broadcast(
                        g,
                        out_shape,
                        &nodes[a.0].value,
                        &nodes[a.0].shape,
                        out_shape,
                        |gv, av| gv * av,
                    );
                    reduce_grad_into(&full, out_shape, &nodes[b.0].shape, grad_buf!(b));
                }
            }
            Op::Div(a, b) => {
                let out_shape = &nodes[id].shape;
                if nodes[a.0].requires {
                    let full = zip_broadcast(
                        g,
                        out_shape,
                        &nodes[b.0].value,
                        &nodes[b.0].shape,
                        out_shape,
                        |gv, bv| gv / bv,
                    );
                    reduce_grad_into(&full, out_shape, &nodes[a.0].shape, grad_buf!(a));
                }
                if nodes[b.0].requires {
                    // d/db (a/b) = -y/b with y the forward output
                    let gy: Vec<f64> = g
                        .iter()
                        .zip(&nodes[id].value)
                        .map(|(&gv, &yv)| gv * yv)
                        .collect();
                    let full = zip_broadcast(
                        &gy,
                        out_shape,
                        &nodes[b.0].value,
                        &nodes[b.0].shape,
                        out_shape,
                        |gyv, bv| -gyv / bv,
                    );
                    reduce_grad_into(&full, out_shape, &nodes[b.0].shape, grad_buf!(b));
                }
            }
            Op::AddScalar(a) | Op::Reshape(a) => {
                let buf = grad_buf!(a);
                for (d, &gv) in buf.iter_mut().zip(g) {
                    *d += gv;
                }
            }
            Op::MulScalar(a, s) => {
                let buf = grad_buf!(a);
                for (d, &gv) in buf.iter_mut().zip(g) {
                    *d += gv * s;
                }
            }
            Op::Neg(a) => {
                let buf = grad_buf!(a);
                for (d, &gv) in buf.iter_mut().zip(g) {
                    *d -= gv;
                }
            }
            Op::Exp(a) => {
                let buf = grad_buf!(a);
                for ((d, &gv), yv) in buf.iter_mut().zip(g).zip(&nodes[id].value) {
                    *d += gv * yv;
                }
            }
            Op::Log(a) => {
                let buf = grad_buf!(a);
                for ((d, &gv), xv) in buf.iter_mut().zip(g).zip(&nodes[a.0].value) {
                    *d += gv / xv;
                }
            }
            Op::Relu(a) => {
                let buf = grad_buf!(a);
                for ((d, &gv), xv) in buf.iter_mut().zip(g).zip(&nodes[a.0].value) {
                    if *xv > 0.0 {
                        *d += gv;
                    }
                }
            }
            Op::Abs(a) => {
                let buf = grad_buf!(a);
                for ((d, &gv), xv) in buf.iter_mut().zip(g).zip(&nodes[a.0].value) {
                    *d += gv
                        * if *xv > 0.0 {
                            1.0
                        } else if *xv < 0.0 {
                            -1.0
                        } else {
                            0.0
                        };
                }
            }
            Op::Sigmoid(a) => {
                let buf = grad_buf!(a);
                for ((d, &gv), yv) in buf.iter_mut().zip(g).zip(&nodes[id].value) {
                    *d += gv * yv * (1.0 - yv);
                }
            }
            Op::Matmul(a, b) => {
                let (m, k) = (nodes[a.0].shape[0], nodes[a.0].shape[1]);
                let n = nodes[b.0].shape[1];
                if nodes[a.0].requires {
                    kernels::matmul_nt_acc(g, &nodes[b.0].value, m, n, k, grad_buf!(a));
                }
                if nodes[b.0].requires {
                    kernels::matmul_tn_acc(&nodes[a.0].value, g, k, m, n, grad_buf!(b));
                }
            }
            Op::Transpose(a) => {
                let (r, c) = (nodes[a.0].shape[0], nodes[a.0].shape[1]);
                let buf = grad_buf!(a);
                for i in 0..r {
                    for j in 0..c {
                        buf[i * c + j] += g[j * r + i];
                    }
                }
            }
            Op::Conv2d { x, k, dims } => {
                if nodes[k.0].requires {
                    kernels::conv2d_backward_kernel(g, &nodes[x.0].value, &dims, grad_buf!(k));
                }
                if nodes[x.0].requires {
                    kernels::conv2d_backward_input(g, &nodes[k.0].value, &dims, grad_buf!(x));
                }
            }
            Op::MaxPool { x, argmax } => {
                let buf = grad_buf!(x);
                for (&src, &gv) in argmax.iter().zip(g) {
                    buf[src] += gv;
                }
            }
            Op::AvgPool { x, dims } => {
                kernels::avg_pool_backward(g, &dims, grad_buf!(x));
            }
            Op::Reduce { x, kind, axes } => {
                let in_shape = &nodes[x.0].shape;
                let count: usize = axes.iter().map(|&d| in_shape[d]).product();
                let xv = &nodes[x.0].value;
                let yv = &nodes[id].value;
                let buf = grads[x.0].get_or_insert_with(|| vec![0.0; xv.len()]);
                match kind {
                    ReduceKind::Sum => {
                        for_each_reduce_index(in_shape, &axes, |i, o| buf[i] += g[o]);
                    }
                    ReduceKind::Mean => {
                        let inv = 1.0 / count as f64;
                        for_each_reduce_index(in_shape, &axes, |i, o| buf[i] += g[o] * inv);
                    }
                    ReduceKind::L1Norm => {
                        for_each_reduce_index(in_shape, &axes, |i, o| {
                            let s = if xv[i] > 0.0 {
                                1.0
                            } else if xv[i] < 0.0 {
                                -1.0
                            } else {
                                0.0
                            };
                            buf[i] += g[o] * s;
                        });
                    }
                    ReduceKind::L2Norm => {
                        for_each_reduce_index(in_shape, &axes, |i, o| {
                            if yv[o] > 0.0 {
                                buf[i] += g[o] * xv[i] / yv[o];
                            }
                        });
                    }
                }
            }
            Op::L2NormalizeRows { x, eps } => {
                let cols = nodes[x.0].shape[1];
                let xv = &nodes[x.0].value;
                let yv = &nodes[id].value;
                let buf = grads[x.0].get_or_insert_with(|| vec![0.0; xv.len()]);
                for (r, (x_row, y_row)) in xv.chunks(cols).zip(yv.chunks(cols)).enumerate() {
                    let g_row = &g[r * cols..(r + 1) * cols];
                    let d_row = &mut buf[r * cols..(r + 1) * cols];
                    let norm = x_row.iter().map(|v| v * v).sum::<f64>().sqrt();
                    if norm >= eps {
                        let dot: f64 = y_row.iter().zip(g_row).map(|(&y, &gv)| y * gv).sum();
                        for ((d, &gv), &y) in d_row.iter_mut().zip(g_row).zip(y_row) {
                            *d += (gv - y * dot) / norm;
                        }
                    } else {
                        for (d, &gv) in d_row.iter_mut().zip(g_row) {
                            *d += gv / eps;
                        }
                    }
                }
            }
            Op::ProjectChannels { w, f } => {
                let (m, c) = (nodes[w.0].shape[0], nodes[w.0].shape[1]);
                let (batch, plane) = (nodes[f.0].shape[0], nodes[f.0].shape[2] * nodes[f.0].shape[3]);
                if nodes[w.0].requires {
                    kernels::project_channels_backward(
                        g,
                        &nodes[w.0].value,
                        &nodes[f.0].value,
                        batch,
                        m,
                        c,
                        plane,
                        Some(grad_buf!(w)),
                        None,
                    );
                }
                if nodes[f.0].requires {
                    kernels::project_channels_backward(
                        g,
                        &nodes[w.0].value,
                        &nodes[f.0].value,
                        batch,
                        m,
                        c,
                        plane,
                        None,
                        Some(grad_buf!(f)),
                    );
                }
            }
            Op::WeightedGap { a, f } => {
                let (batch, m) = (nodes[a.0].shape[0], nodes[a.0].shape[1]);
                let plane = nodes[a.0].shape[2] * nodes[a.0].shape[3];
                let c = nodes[f.0].shape[1];
                if nodes[a.0].requires {
                    kernels::weighted_gap_backward(
                        g,
                        &nodes[a.0].value,
                        &nodes[f.0].value,
                        batch,
                        m,
                        c,
                        plane,
                        Some(grad_buf!(a)),
                        None,
                    );
                }
                if nodes[f.0].requires {
                    kernels::weighted_gap_backward(
                        g,
                        &nodes[a.0].value,
                        &nodes[f.0].value,
                        batch,
                        m,
                        c,
                        plane,
                        None,
                        Some(grad_buf!(f)),
                    );
                }
            }
            Op::BceWithLogits {
                z,
                targets,
                weights,
            } => {
                let batch = nodes[z.0].shape[0] as f64;
                let zv = &nodes[z.0].value;
                let gs = g[0] / batch;
                let buf = grads[z.0].get_or_insert_with(|| vec![0.0; zv.len()]);
                for (i, (d, &zi)) in buf.iter_mut().zip(zv).enumerate() {
                    let w = weights.as_ref().map_or(1.0, |w| w[i]);
                    *d += gs * w * (kernels::sigmoid(zi) - targets[i]);
                }
            }
        }
    }
}

/// Walk every flat index of `shape` in row-major order, yielding the flat
/// index of the reduction output (axes in `axes` collapsed).
fn for_each_reduce_index(shape: &[usize], axes: &[usize], mut f: impl FnMut(usize, usize)) {
    let rank = shape.len();
    let n: usize = shape.iter().product();
    let mut keep_shape = shape.to_vec();
    for &a in axes {
        keep_shape[a] = 1;
    }
    let out_strides = broadcast_strides(&keep_shape, rank);
    let mut coords = vec![0usize; rank];
    let mut o = 0usize;
    for i in 0..n {
        f(i, o);
        for d in (0..rank).rev() {
            coords[d] += 1;
            o += out_strides[d];
            if coords[d] < shape[d] {
                break;
            }
            coords[d] = 0;
            o -= out_strides[d] * shape[d];
        }
    }
}
