//! Reverse-mode automatic differentiation on a dynamic tape.
//!
//! A [`Graph`] records every operation as it executes; [`Graph::backward`]
//! replays the tape in reverse to accumulate gradients on the leaves that were
//! registered with `requires_grad`. Tapes are rebuilt per training step and
//! are confined to one thread; frozen weights shared across threads stay plain
//! [`Tensor`]s outside any graph.

use std::cell::{Ref, RefCell};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::tensor::{lit, numel, ops, Scalar, Tensor};

/// Handle to a node on a [`Graph`]. Only meaningful for the graph that
/// produced it.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Var(usize);

enum Op<T> {
    Leaf,
    Add {
        a: Var,
        b: Var,
    },
    AddBroadcast {
        a: Var,
        b: Var,
    },
    Mul {
        a: Var,
        b: Var,
    },
    Scale {
        a: Var,
        factor: T,
    },
    Matmul {
        a: Var,
        b: Var,
    },
    Reshape {
        a: Var,
    },
    Permute {
        a: Var,
        perm: Vec<usize>,
    },
    Narrow {
        a: Var,
        axis: usize,
        start: usize,
    },
    Concat {
        parts: Vec<Var>,
        axis: usize,
    },
    Softmax {
        a: Var,
    },
    Gelu {
        a: Var,
    },
    Dropout {
        a: Var,
        mask: Vec<T>,
    },
    BatchNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        ctx: BnCtx<T>,
    },
    Sum {
        a: Var,
    },
    SumSquaredError {
        a: Var,
        b: Var,
    },
}

struct BnCtx<T> {
    xhat: Vec<T>,
    inv_std: Vec<T>,
    training: bool,
}

struct Node<T> {
    value: Tensor<T>,
    grad: Option<Vec<T>>,
    requires_grad: bool,
    op: Op<T>,
}

struct GraphInner<T: Scalar> {
    nodes: Vec<Node<T>>,
    rng: ChaCha8Rng,
    backward_done: bool,
}

/// Dynamic autodiff tape. The embedded RNG (seeded at construction) drives
/// every stochastic op, so a graph's outputs are a deterministic function of
/// its seed and the operation order.
pub struct Graph<T: Scalar> {
    inner: RefCell<GraphInner<T>>,
}

impl<T: Scalar> Graph<T> {
    pub fn new(seed: u64) -> Self {
        Self {
            inner: RefCell::new(GraphInner {
                nodes: Vec::new(),
                rng: ChaCha8Rng::seed_from_u64(seed),
                backward_done: false,
            }),
        }
    }

    /// Registers a leaf tensor. Gradients accumulate on it during backward
    /// when `requires_grad` is set.
    pub fn leaf(&self, value: Tensor<T>, requires_grad: bool) -> Var {
        self.push(value, requires_grad, Op::Leaf)
    }

    /// A leaf that never receives gradients.
    pub fn constant(&self, value: Tensor<T>) -> Var {
        self.leaf(value, false)
    }

    /// Borrows the value of a node.
    pub fn value(&self, v: Var) -> Ref<'_, Tensor<T>> {
        Ref::map(self.inner.borrow(), |inner| &inner.nodes[v.0].value)
    }

    /// Clones the value of a node out of the graph.
    pub fn tensor(&self, v: Var) -> Tensor<T> {
        self.inner.borrow().nodes[v.0].value.clone()
    }

    /// The value of a scalar node as f64 (convenience for loss logging).
    pub fn scalar_value(&self, v: Var) -> Result<f64> {
        let t = self.value(v);
        Ok(t.scalar_value()?.to_f64().expect("finite"))
    }

    /// Accumulated gradient of a leaf after [`Graph::backward`], if any.
    pub fn grad(&self, v: Var) -> Option<Tensor<T>> {
        let inner = self.inner.borrow();
        let node = &inner.nodes[v.0];
        node.grad.as_ref().map(|g| {
            Tensor::from_vec(node.value.shape().to_vec(), g.clone()).expect("grad matches shape")
        })
    }

    /// Errors if the node value contains NaN or infinities.
    pub fn ensure_finite(&self, v: Var, what: &str) -> Result<()> {
        self.check(v)?;
        self.inner.borrow().nodes[v.0].value.ensure_finite(what)
    }

    fn check(&self, v: Var) -> Result<()> {
        if v.0 < self.inner.borrow().nodes.len() {
            Ok(())
        } else {
            Err(Error::Numeric(format!(
                "variable #{} is not part of this graph",
                v.0
            )))
        }
    }

    fn push(&self, value: Tensor<T>, requires_grad: bool, op: Op<T>) -> Var {
        let mut inner = self.inner.borrow_mut();
        inner.nodes.push(Node {
            value,
            grad: None,
            requires_grad,
            op,
        });
        Var(inner.nodes.len() - 1)
    }

    fn unary<F>(&self, a: Var, f: F, op: impl FnOnce() -> Op<T>) -> Result<Var>
    where
        F: FnOnce(&Tensor<T>) -> Result<Tensor<T>>,
    {
        self.check(a)?;
        let (out, req) = {
            let inner = self.inner.borrow();
            let node = &inner.nodes[a.0];
            (f(&node.value)?, node.requires_grad)
        };
        Ok(self.push(out, req, if req { op() } else { Op::Leaf }))
    }

    fn binary<F>(&self, a: Var, b: Var, f: F, op: impl FnOnce() -> Op<T>) -> Result<Var>
    where
        F: FnOnce(&Tensor<T>, &Tensor<T>) -> Result<Tensor<T>>,
    {
        self.check(a)?;
        self.check(b)?;
        let (out, req) = {
            let inner = self.inner.borrow();
            let (na, nb) = (&inner.nodes[a.0], &inner.nodes[b.0]);
            (
                f(&na.value, &nb.value)?,
                na.requires_grad || nb.requires_grad,
            )
        };
        Ok(self.push(out, req, if req { op() } else { Op::Leaf }))
    }

    pub fn add(&self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, |x, y| ops::add(x, y), || Op::Add { a, b })
    }

    /// Adds `b` across the leading axes of `a`; `b`'s shape must be a suffix
    /// of `a`'s shape.
    pub fn add_broadcast(&self, a: Var, b: Var) -> Result<Var> {
        self.binary(
            a,
            b,
            |x, y| ops::add_suffix_broadcast(x, y),
            || Op::AddBroadcast { a, b },
        )
    }

    pub fn mul(&self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, |x, y| ops::mul(x, y), || Op::Mul { a, b })
    }

    pub fn scale(&self, a: Var, factor: T) -> Result<Var> {
        self.unary(a, |x| Ok(ops::scale(x, factor)), || Op::Scale { a, factor })
    }

    pub fn matmul(&self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, |x, y| ops::matmul(x, y), || Op::Matmul { a, b })
    }

    pub fn reshape(&self, a: Var, shape: Vec<usize>) -> Result<Var> {
        self.unary(a, |x| x.clone().reshaped(shape), || Op::Reshape { a })
    }

    pub fn permute(&self, a: Var, perm: &[usize]) -> Result<Var> {
        self.unary(
            a,
            |x| ops::permute(x, perm),
            || Op::Permute {
                a,
                perm: perm.to_vec(),
            },
        )
    }

    pub fn narrow(&self, a: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        self.unary(
            a,
            |x| ops::narrow(x, axis, start, len),
            || Op::Narrow { a, axis, start },
        )
    }

    pub fn concat(&self, parts: &[Var], axis: usize) -> Result<Var> {
        for &p in parts {
            self.check(p)?;
        }
        let (out, req) = {
            let inner = self.inner.borrow();
            let tensors: Vec<&Tensor<T>> = parts.iter().map(|p| &inner.nodes[p.0].value).collect();
            let req = parts.iter().any(|p| inner.nodes[p.0].requires_grad);
            (ops::concat(&tensors, axis)?, req)
        };
        Ok(self.push(
            out,
            req,
            if req {
                Op::Concat {
                    parts: parts.to_vec(),
                    axis,
                }
            } else {
                Op::Leaf
            },
        ))
    }

    pub fn softmax_lastdim(&self, a: Var) -> Result<Var> {
        self.unary(a, |x| ops::softmax_lastdim(x), || Op::Softmax { a })
    }

    pub fn gelu(&self, a: Var) -> Result<Var> {
        self.unary(a, |x| Ok(ops::gelu(x)), || Op::Gelu { a })
    }

    /// Inverted dropout: in training mode each element is zeroed with
    /// probability `p` and survivors are scaled by `1/(1-p)`; in eval mode
    /// (or with `p == 0`) the input passes through untouched.
    pub fn dropout(&self, a: Var, p: f64, training: bool) -> Result<Var> {
        if !(0.0..1.0).contains(&p) {
            return Err(Error::Config(format!(
                "dropout probability must be in [0, 1), got {p}"
            )));
        }
        self.check(a)?;
        if !training || p == 0.0 {
            return Ok(a);
        }
        let keep_scale = lit::<T>(1.0 / (1.0 - p));
        let p_t = lit::<T>(p);
        let (out, mask, req) = {
            let mut inner = self.inner.borrow_mut();
            let n = inner.nodes[a.0].value.len();
            let mut mask = Vec::with_capacity(n);
            for _ in 0..n {
                let u = T::sample_unit(&mut inner.rng);
                mask.push(if u < p_t { T::zero() } else { keep_scale });
            }
            let node = &inner.nodes[a.0];
            let data: Vec<T> = node
                .value
                .data()
                .iter()
                .zip(&mask)
                .map(|(&v, &m)| v * m)
                .collect();
            let out = Tensor::from_vec(node.value.shape().to_vec(), data)?;
            (out, mask, node.requires_grad)
        };
        Ok(self.push(
            out,
            req,
            if req {
                Op::Dropout { a, mask }
            } else {
                Op::Leaf
            },
        ))
    }

    /// Training-mode batch normalization over the last axis. Updates the
    /// caller's running statistics in place with the given momentum.
    #[allow(clippy::too_many_arguments)]
    pub fn batchnorm_train(
        &self,
        x: Var,
        gamma: Var,
        beta: Var,
        running_mean: &mut [T],
        running_var: &mut [T],
        momentum: T,
        eps: T,
    ) -> Result<Var> {
        self.check(x)?;
        self.check(gamma)?;
        self.check(beta)?;
        let (fwd, batch_mean, batch_var, req) = {
            let inner = self.inner.borrow();
            let (nx, ng, nb) = (
                &inner.nodes[x.0],
                &inner.nodes[gamma.0],
                &inner.nodes[beta.0],
            );
            let (fwd, mean, var) =
                ops::batchnorm_train(&nx.value, ng.value.data(), nb.value.data(), eps)?;
            let req = nx.requires_grad || ng.requires_grad || nb.requires_grad;
            (fwd, mean, var, req)
        };
        if running_mean.len() != batch_mean.len() || running_var.len() != batch_var.len() {
            return Err(Error::Shape(format!(
                "running stats of length {}/{} do not match feature dim {}",
                running_mean.len(),
                running_var.len(),
                batch_mean.len()
            )));
        }
        let keep = T::one() - momentum;
        for (r, &m) in running_mean.iter_mut().zip(&batch_mean) {
            *r = keep * *r + momentum * m;
        }
        for (r, &v) in running_var.iter_mut().zip(&batch_var) {
            *r = keep * *r + momentum * v;
        }
        let op = if req {
            Op::BatchNorm {
                x,
                gamma,
                beta,
                ctx: BnCtx {
                    xhat: fwd.xhat,
                    inv_std: fwd.inv_std,
                    training: true,
                },
            }
        } else {
            Op::Leaf
        };
        Ok(self.push(fwd.output, req, op))
    }

    /// Inference-mode batch normalization using frozen running statistics.
    pub fn batchnorm_eval(
        &self,
        x: Var,
        gamma: Var,
        beta: Var,
        running_mean: &[T],
        running_var: &[T],
        eps: T,
    ) -> Result<Var> {
        self.check(x)?;
        self.check(gamma)?;
        self.check(beta)?;
        let (fwd, req) = {
            let inner = self.inner.borrow();
            let (nx, ng, nb) = (
                &inner.nodes[x.0],
                &inner.nodes[gamma.0],
                &inner.nodes[beta.0],
            );
            let fwd = ops::batchnorm_eval(
                &nx.value,
                ng.value.data(),
                nb.value.data(),
                running_mean,
                running_var,
                eps,
            )?;
            (
                fwd,
                nx.requires_grad || ng.requires_grad || nb.requires_grad,
            )
        };
        let op = if req {
            Op::BatchNorm {
                x,
                gamma,
                beta,
                ctx: BnCtx {
                    xhat: fwd.xhat,
                    inv_std: fwd.inv_std,
                    training: false,
                },
            }
        } else {
            Op::Leaf
        };
        Ok(self.push(fwd.output, req, op))
    }

    /// Sum over all elements, as a scalar node.
    pub fn sum(&self, a: Var) -> Result<Var> {
        self.unary(a, |x| Ok(Tensor::scalar(ops::sum_all(x))), || Op::Sum { a })
    }

    /// `sum((a - b)^2)` over all elements, as a scalar node.
    pub fn sum_squared_error(&self, a: Var, b: Var) -> Result<Var> {
        self.binary(
            a,
            b,
            |x, y| Ok(Tensor::scalar(ops::sum_squared_error(x, y)?)),
            || Op::SumSquaredError { a, b },
        )
    }

    /// Replays the tape in reverse from a scalar loss, accumulating gradients
    /// on every `requires_grad` leaf. May be called once per graph.
    pub fn backward(&self, loss: Var) -> Result<()> {
        self.check(loss)?;
        let mut inner = self.inner.borrow_mut();
        if inner.backward_done {
            return Err(Error::Numeric(
                "backward has already run on this graph; rebuild the tape before differentiating again".into(),
            ));
        }
        if inner.nodes[loss.0].value.len() != 1 {
            return Err(Error::Numeric(format!(
                "backward requires a scalar loss, got shape {:?}",
                inner.nodes[loss.0].value.shape()
            )));
        }
        if !inner.nodes[loss.0].requires_grad {
            return Err(Error::Numeric(
                "loss is detached: no upstream node requires gradients".into(),
            ));
        }
        inner.backward_done = true;

        let n = inner.nodes.len();
        let mut grads: Vec<Option<Vec<T>>> = (0..n).map(|_| None).collect();
        grads[loss.0] = Some(vec![T::one()]);

        let nodes = &mut inner.nodes;
        for id in (0..n).rev() {
            let gout = match grads[id].take() {
                Some(g) => g,
                None => continue,
            };
            if !nodes[id].requires_grad {
                continue;
            }
            match &nodes[id].op {
                Op::Leaf => {
                    grads[id] = Some(gout); // put back: leaves keep their gradient
                    continue;
                }
                op => backprop(op, id, &gout, nodes, &mut grads)?,
            }
        }
        for (id, grad) in grads.into_iter().enumerate() {
            if let Some(g) = grad {
                if matches!(nodes[id].op, Op::Leaf) && nodes[id].requires_grad {
                    nodes[id].grad = Some(g);
                }
            }
        }
        Ok(())
    }
}

fn accumulate<T: Scalar>(slot: &mut Option<Vec<T>>, contrib: &[T]) {
    match slot {
        Some(existing) => {
            for (e, &c) in existing.iter_mut().zip(contrib) {
                *e = *e + c;
            }
        }
        None => *slot = Some(contrib.to_vec()),
    }
}

fn backprop<T: Scalar>(
    op: &Op<T>,
    id: usize,
    gout: &[T],
    nodes: &[Node<T>],
    grads: &mut [Option<Vec<T>>],
) -> Result<()> {
    let value_of = |v: Var| &nodes[v.0].value;
    let wants = |v: Var| nodes[v.0].requires_grad;
    match op {
        Op::Leaf => unreachable!("leaves handled by the caller"),
        Op::Add { a, b } => {
            if wants(*a) {
                accumulate(&mut grads[a.0], gout);
            }
            if wants(*b) {
                accumulate(&mut grads[b.0], gout);
            }
        }
        Op::AddBroadcast { a, b } => {
            if wants(*a) {
                accumulate(&mut grads[a.0], gout);
            }
            if wants(*b) {
                let period = value_of(*b).len();
                let mut folded = vec![T::zero(); period];
                for (i, &g) in gout.iter().enumerate() {
                    folded[i % period] = folded[i % period] + g;
                }
                accumulate(&mut grads[b.0], &folded);
            }
        }
        Op::Mul { a, b } => {
            if wants(*a) {
                let contrib: Vec<T> = gout
                    .iter()
                    .zip(value_of(*b).data())
                    .map(|(&g, &v)| g * v)
                    .collect();
                accumulate(&mut grads[a.0], &contrib);
            }
            if wants(*b) {
                let contrib: Vec<T> = gout
                    .iter()
                    .zip(value_of(*a).data())
                    .map(|(&g, &v)| g * v)
                    .collect();
                accumulate(&mut grads[b.0], &contrib);
            }
        }
        Op::Scale { a, factor } => {
            if wants(*a) {
                let contrib: Vec<T> = gout.iter().map(|&g| g * *factor).collect();
                accumulate(&mut grads[a.0], &contrib);
            }
        }
        Op::Matmul { a, b } => {
            let (va, vb) = (value_of(*a), value_of(*b));
            let out_shape = nodes[id].value.shape();
            let k = va.shape()[va.rank() - 1];
            let d = vb.shape()[vb.rank() - 1];
            if vb.rank() == 2 {
                let rows = va.len() / k.max(1);
                if wants(*a) {
                    // dA = dOut . B^T
                    let bt = ops::transpose_2d(vb.data(), k, d);
                    let mut da = vec![T::zero(); va.len()];
                    ops::matmul_2d_into(gout, &bt, rows, d, k, &mut da);
                    accumulate(&mut grads[a.0], &da);
                }
                if wants(*b) {
                    // dB = A^T . dOut over the flattened leading axes
                    let at = ops::transpose_2d(va.data(), rows, k);
                    let mut db = vec![T::zero(); k * d];
                    ops::matmul_2d_into(&at, gout, k, rows, d, &mut db);
                    accumulate(&mut grads[b.0], &db);
                }
            } else {
                let n = va.shape()[va.rank() - 2];
                let batches = numel(&va.shape()[..va.rank() - 2]);
                let _ = out_shape;
                if wants(*a) {
                    let mut da = vec![T::zero(); va.len()];
                    for i in 0..batches {
                        let bt = ops::transpose_2d(&vb.data()[i * k * d..(i + 1) * k * d], k, d);
                        ops::matmul_2d_into(
                            &gout[i * n * d..(i + 1) * n * d],
                            &bt,
                            n,
                            d,
                            k,
                            &mut da[i * n * k..(i + 1) * n * k],
                        );
                    }
                    accumulate(&mut grads[a.0], &da);
                }
                if wants(*b) {
                    let mut db = vec![T::zero(); vb.len()];
                    for i in 0..batches {
                        let at = ops::transpose_2d(&va.data()[i * n * k..(i + 1) * n * k], n, k);
                        ops::matmul_2d_into(
                            &at,
                            &gout[i * n * d..(i + 1) * n * d],
                            k,
                            n,
                            d,
                            &mut db[i * k * d..(i + 1) * k * d],
                        );
                    }
                    accumulate(&mut grads[b.0], &db);
                }
            }
        }
        Op::Reshape { a } => {
            if wants(*a) {
                accumulate(&mut grads[a.0], gout);
            }
        }
        Op::Permute { a, perm } => {
            if wants(*a) {
                let g = Tensor::from_vec(nodes[id].value.shape().to_vec(), gout.to_vec())?;
                let back = ops::permute(&g, &ops::inverse_permutation(perm))?;
                accumulate(&mut grads[a.0], back.data());
            }
        }
        Op::Narrow { a, axis, start } => {
            if wants(*a) {
                let va = value_of(*a);
                let g = Tensor::from_vec(nodes[id].value.shape().to_vec(), gout.to_vec())?;
                let mut da = vec![T::zero(); va.len()];
                ops::add_into_narrowed(&mut da, va.shape(), *axis, *start, &g);
                accumulate(&mut grads[a.0], &da);
            }
        }
        Op::Concat { parts, axis } => {
            let g = Tensor::from_vec(nodes[id].value.shape().to_vec(), gout.to_vec())?;
            let mut offset = 0usize;
            for &part in parts {
                let span = value_of(part).shape()[*axis];
                if wants(part) {
                    let piece = ops::narrow(&g, *axis, offset, span)?;
                    accumulate(&mut grads[part.0], piece.data());
                }
                offset += span;
            }
        }
        Op::Softmax { a } => {
            if wants(*a) {
                let y = &nodes[id].value;
                let row = y.shape()[y.rank() - 1];
                let mut da = vec![T::zero(); y.len()];
                for ((da_row, y_row), g_row) in da
                    .chunks_mut(row)
                    .zip(y.data().chunks(row))
                    .zip(gout.chunks(row))
                {
                    let mut dot = T::zero();
                    for (&yv, &gv) in y_row.iter().zip(g_row) {
                        dot = dot + yv * gv;
                    }
                    for ((d, &yv), &gv) in da_row.iter_mut().zip(y_row).zip(g_row) {
                        *d = yv * (gv - dot);
                    }
                }
                accumulate(&mut grads[a.0], &da);
            }
        }
        Op::Gelu { a } => {
            if wants(*a) {
                let contrib: Vec<T> = value_of(*a)
                    .data()
                    .iter()
                    .zip(gout)
                    .map(|(&x, &g)| g * ops::gelu_derivative(x))
                    .collect();
                accumulate(&mut grads[a.0], &contrib);
            }
        }
        Op::Dropout { a, mask } => {
            if wants(*a) {
                let contrib: Vec<T> = gout.iter().zip(mask).map(|(&g, &m)| g * m).collect();
                accumulate(&mut grads[a.0], &contrib);
            }
        }
        Op::BatchNorm {
            x,
            gamma,
            beta,
            ctx,
        } => {
            let features = ctx.inv_std.len();
            let rows = gout.len() / features;
            let gamma_v = value_of(*gamma);
            let mut sum_dy = vec![T::zero(); features];
            let mut sum_dy_xhat = vec![T::zero(); features];
            for (g_row, xhat_row) in gout.chunks(features).zip(ctx.xhat.chunks(features)) {
                for j in 0..features {
                    sum_dy[j] = sum_dy[j] + g_row[j];
                    sum_dy_xhat[j] = sum_dy_xhat[j] + g_row[j] * xhat_row[j];
                }
            }
            if wants(*beta) {
                accumulate(&mut grads[beta.0], &sum_dy);
            }
            if wants(*gamma) {
                accumulate(&mut grads[gamma.0], &sum_dy_xhat);
            }
            if wants(*x) {
                let n = lit::<T>(rows as f64);
                let mut dx = vec![T::zero(); gout.len()];
                for ((dx_row, g_row), xhat_row) in dx
                    .chunks_mut(features)
                    .zip(gout.chunks(features))
                    .zip(ctx.xhat.chunks(features))
                {
                    for j in 0..features {
                        let scale = gamma_v.data()[j] * ctx.inv_std[j];
                        dx_row[j] = if ctx.training {
                            scale * (n * g_row[j] - sum_dy[j] - xhat_row[j] * sum_dy_xhat[j]) / n
                        } else {
                            scale * g_row[j]
                        };
                    }
                }
                accumulate(&mut grads[x.0], &dx);
            }
        }
        Op::Sum { a } => {
            if wants(*a) {
                let g = gout[0];
                let contrib = vec![g; value_of(*a).len()];
                accumulate(&mut grads[a.0], &contrib);
            }
        }
        Op::SumSquaredError { a, b } => {
            let g = gout[0];
            let two = lit::<T>(2.0);
            let (va, vb) = (value_of(*a), value_of(*b));
            if wants(*a) {
                let contrib: Vec<T> = va
                    .data()
                    .iter()
                    .zip(vb.data())
                    .map(|(&x, &y)| two * g * (x - y))
                    .collect();
                accumulate(&mut grads[a.0], &contrib);
            }
            if wants(*b) {
                let contrib: Vec<T> = va
                    .data()
                    .iter()
                    .zip(vb.data())
                    .map(|(&x, &y)| -(two * g * (x - y)))
                    .collect();
                accumulate(&mut grads[b.0], &contrib);
            }
        }
    }
    Ok(())
}
