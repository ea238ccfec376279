//! Reverse-mode automatic differentiation over a linear tape.
//!
//! A [`Tape`] records every forward op into a topologically ordered arena;
//! [`Tape::backward`] replays it in reverse and accumulates vector-Jacobian
//! products per node. The op set is exactly what small fully-connected
//! networks need: GEMM, bias, activations, batch norm (train and eval
//! flavors), dropout, row permutation, concatenation, reductions, a fused
//! softmax cross-entropy, a guarded log-mean-exp, and the gradient-reversal
//! node (identity forward, negated backward).
//!
//! Every op output is checked finite; a trace can be consumed by a backward
//! pass exactly once.

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::error::{CoreError, Result};
use crate::tensor::{accumulate, matmul_views, Tensor};

/// Handle to a value recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Batch statistics captured by a train-mode batch-norm node, keyed by the
/// caller-assigned slot so running statistics can be updated after the step.
#[derive(Debug, Clone)]
pub struct BnBatchStats {
    pub slot: usize,
    pub mean: Vec<f64>,
    pub var: Vec<f64>,
}

enum Op {
    Leaf,
    Matmul {
        a: Var,
        b: Var,
    },
    AddBias {
        x: Var,
        bias: Var,
    },
    Add {
        a: Var,
        b: Var,
    },
    Sub {
        a: Var,
        b: Var,
    },
    Mul {
        a: Var,
        b: Var,
    },
    Scale {
        x: Var,
        c: f64,
    },
    LeakyRelu {
        x: Var,
        slope: f64,
    },
    Sigmoid {
        x: Var,
    },
    GradReverse {
        x: Var,
    },
    Dropout {
        x: Var,
        mask: Vec<f64>,
    },
    BatchNormTrain {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<f64>,
        inv_std: Vec<f64>,
        stats: BnBatchStats,
    },
    BatchNormEval {
        x: Var,
        gamma: Var,
        beta: Var,
        mean: Vec<f64>,
        inv_std: Vec<f64>,
    },
    ConcatCols {
        parts: Vec<Var>,
    },
    ConcatRows {
        parts: Vec<Var>,
    },
    PermuteRows {
        x: Var,
        perm: Vec<usize>,
    },
    SumAll {
        x: Var,
    },
    MeanAll {
        x: Var,
    },
    LogMeanExp {
        x: Var,
        weights: Vec<f64>,
    },
    SoftmaxCrossEntropy {
        logits: Var,
        labels: Vec<usize>,
        probs: Vec<f64>,
    },
}

struct Node {
    value: Tensor,
    op: Op,
}

/// Per-variable gradients produced by a backward pass.
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    /// Gradient of `v`, or zeros of its shape when the loss does not reach it.
    pub fn get_or_zeros(&self, v: Var, shape: &[usize]) -> Tensor {
        match self.get(v) {
            Some(g) => g.clone(),
            None => Tensor::zeros(shape.to_vec()),
        }
    }

    /// Move the gradient of `v` out, or zeros of its shape.
    pub fn take_or_zeros(&mut self, v: Var, shape: &[usize]) -> Tensor {
        match self.grads.get_mut(v.0).and_then(|g| g.take()) {
            Some(g) => g,
            None => Tensor::zeros(shape.to_vec()),
        }
    }
}

/// Recorded computation trace, append-only and topologically ordered.
pub struct Tape {
    nodes: Vec<Node>,
    consumed: bool,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

impl Tape {
    pub fn new() -> Self {
        Tape {
            nodes: Vec::new(),
            consumed: false,
        }
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

    /// Scalar value of a single-element variable.
    pub fn scalar(&self, v: Var) -> f64 {
        debug_assert_eq!(self.nodes[v.0].value.numel(), 1);
        self.nodes[v.0].value.data()[0]
    }

    fn push(&mut self, value: Tensor, op: Op, context: &'static str) -> Result<Var> {
        value.ensure_finite(context)?;
        self.nodes.push(Node { value, op });
        Ok(Var(self.nodes.len() - 1))
    }

    /// Record a leaf. Leaves receive gradients like any other node; whether
    /// one is a trainable parameter is the caller's bookkeeping. Leaf values
    /// are taken as-is; finiteness is enforced on op outputs.
    pub fn leaf(&mut self, value: Tensor) -> Result<Var> {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = matmul_views(self.value(a), false, self.value(b), false)?;
        self.push(value, Op::Matmul { a, b }, "matmul")
    }

    /// Broadcast-add a `[n]` bias to every row of a `[m,n]` input.
    pub fn add_bias(&mut self, x: Var, bias: Var) -> Result<Var> {
        let (xv, bv) = (self.value(x), self.value(bias));
        if bv.numel() != xv.cols() {
            return Err(CoreError::shape(
                "add_bias",
                format!("bias of width {}", xv.cols()),
                format!("{}", bv.numel()),
            ));
        }
        let w = xv.cols();
        let mut out = xv.clone();
        for (i, v) in out.data_mut().iter_mut().enumerate() {
            *v += bv.data()[i % w];
        }
        self.push(out, Op::AddBias { x, bias }, "add_bias")
    }

    fn binary_same_shape(
        &mut self,
        a: Var,
        b: Var,
        context: &'static str,
        f: impl Fn(f64, f64) -> f64,
        op: Op,
    ) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(b));
        if !av.same_shape(bv) {
            return Err(CoreError::shape(
                context,
                format!("{:?}", av.shape()),
                format!("{:?}", bv.shape()),
            ));
        }
        let data = av
            .data()
            .iter()
            .zip(bv.data())
            .map(|(&x, &y)| f(x, y))
            .collect();
        let value = Tensor::from_vec(av.shape().to_vec(), data)?;
        self.push(value, op, context)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary_same_shape(a, b, "add", |x, y| x + y, Op::Add { a, b })
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary_same_shape(a, b, "sub", |x, y| x - y, Op::Sub { a, b })
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary_same_shape(a, b, "mul", |x, y| x * y, Op::Mul { a, b })
    }

    pub fn scale(&mut self, x: Var, c: f64) -> Result<Var> {
        let value = self.value(x).scaled(c);
        self.push(value, Op::Scale { x, c }, "scale")
    }

    pub fn leaky_relu(&mut self, x: Var, slope: f64) -> Result<Var> {
        let value = Tensor::from_vec(
            self.value(x).shape().to_vec(),
            self.value(x)
                .data()
                .iter()
                .map(|&v| if v >= 0.0 { v } else { slope * v })
                .collect(),
        )?;
        self.push(value, Op::LeakyRelu { x, slope }, "leaky_relu")
    }

    pub fn sigmoid(&mut self, x: Var) -> Result<Var> {
        let value = Tensor::from_vec(
            self.value(x).shape().to_vec(),
            self.value(x)
                .data()
                .iter()
                .map(|&v| 1.0 / (1.0 + (-v).exp()))
                .collect(),
        )?;
        self.push(value, Op::Sigmoid { x }, "sigmoid")
    }

    /// Identity forward; the backward pass negates the upstream gradient.
    pub fn grad_reverse(&mut self, x: Var) -> Result<Var> {
        let value = self.value(x).clone();
        self.push(value, Op::GradReverse { x }, "grad_reverse")
    }

    /// Inverted dropout: kept entries are scaled by `1/(1-rate)` so the
    /// expectation matches the eval-mode identity.
    pub fn dropout(&mut self, x: Var, rate: f64, rng: &mut ChaCha8Rng) -> Result<Var> {
        if !(0.0..1.0).contains(&rate) {
            return Err(CoreError::invalid("dropout", format!("rate {rate} outside [0,1)")));
        }
        if rate == 0.0 {
            return Ok(x);
        }
        let keep = 1.0 - rate;
        let mask: Vec<f64> = (0..self.value(x).numel())
            .map(|_| {
                if rng.random::<f64>() < keep {
                    1.0 / keep
                } else {
                    0.0
                }
            })
            .collect();
        let data = self
            .value(x)
            .data()
            .iter()
            .zip(&mask)
            .map(|(&v, &m)| v * m)
            .collect();
        let value = Tensor::from_vec(self.value(x).shape().to_vec(), data)?;
        self.push(value, Op::Dropout { x, mask }, "dropout")
    }

    /// Train-mode batch norm over the batch axis with biased batch variance.
    /// `slot` keys the emitted [`BnBatchStats`] for running-stat updates.
    pub fn batch_norm_train(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        eps: f64,
        slot: usize,
    ) -> Result<Var> {
        let xv = self.value(x);
        let (m, n) = (xv.rows(), xv.cols());
        self.check_bn_shapes(x, gamma, beta, "batch_norm_train")?;
        let xd = self.value(x).data();
        let mut mean = vec![0.0; n];
        for r in 0..m {
            for c in 0..n {
                mean[c] += xd[r * n + c];
            }
        }
        for v in mean.iter_mut() {
            *v /= m as f64;
        }
        let mut var = vec![0.0; n];
        for r in 0..m {
            for c in 0..n {
                let d = xd[r * n + c] - mean[c];
                var[c] += d * d;
            }
        }
        for v in var.iter_mut() {
            *v /= m as f64;
        }
        let inv_std: Vec<f64> = var.iter().map(|&v| 1.0 / (v + eps).sqrt()).collect();
        let mut xhat = vec![0.0; m * n];
        for r in 0..m {
            for c in 0..n {
                xhat[r * n + c] = (xd[r * n + c] - mean[c]) * inv_std[c];
            }
        }
        let gd = self.value(gamma).data();
        let bd = self.value(beta).data();
        let out: Vec<f64> = xhat
            .iter()
            .enumerate()
            .map(|(i, &h)| gd[i % n] * h + bd[i % n])
            .collect();
        let value = Tensor::from_vec(self.value(x).shape().to_vec(), out)?;
        let stats = BnBatchStats { slot, mean, var };
        self.push(
            value,
            Op::BatchNormTrain {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
                stats,
            },
            "batch_norm_train",
        )
    }

    /// Eval-mode batch norm: normalizes with the provided running statistics.
    pub fn batch_norm_eval(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        running_mean: &[f64],
        running_var: &[f64],
        eps: f64,
    ) -> Result<Var> {
        self.check_bn_shapes(x, gamma, beta, "batch_norm_eval")?;
        let n = self.value(x).cols();
        if running_mean.len() != n || running_var.len() != n {
            return Err(CoreError::shape(
                "batch_norm_eval",
                format!("running stats of width {n}"),
                format!("{}/{}", running_mean.len(), running_var.len()),
            ));
        }
        let inv_std: Vec<f64> = running_var.iter().map(|&v| 1.0 / (v + eps).sqrt()).collect();
        let gd = self.value(gamma).data();
        let bd = self.value(beta).data();
        let out: Vec<f64> = self
            .value(x)
            .data()
            .iter()
            .enumerate()
            .map(|(i, &v)| gd[i % n] * (v - running_mean[i % n]) * inv_std[i % n] + bd[i % n])
            .collect();
        let value = Tensor::from_vec(self.value(x).shape().to_vec(), out)?;
        self.push(
            value,
            Op::BatchNormEval {
                x,
                gamma,
                beta,
                mean: running_mean.to_vec(),
                inv_std,
            },
            "batch_norm_eval",
        )
    }

    fn check_bn_shapes(&self, x: Var, gamma: Var, beta: Var, context: &'static str) -> Result<()> {
        let n = self.value(x).cols();
        if self.value(gamma).numel() != n || self.value(beta).numel() != n {
            return Err(CoreError::shape(
                context,
                format!("scale/shift of width {n}"),
                format!(
                    "{}/{}",
                    self.value(gamma).numel(),
                    self.value(beta).numel()
                ),
            ));
        }
        Ok(())
    }

    /// Concatenate along the feature axis: `[m,n_i]` parts become `[m,Σn_i]`.
    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        if parts.is_empty() {
            return Err(CoreError::invalid("concat_cols", "no parts"));
        }
        let m = self.value(parts[0]).rows();
        let mut total = 0;
        for &p in parts {
            if self.value(p).rows() != m {
                return Err(CoreError::shape(
                    "concat_cols",
                    format!("{m} rows"),
                    format!("{}", self.value(p).rows()),
                ));
            }
            total += self.value(p).cols();
        }
        let mut data = Vec::with_capacity(m * total);
        for r in 0..m {
            for &p in parts {
                data.extend_from_slice(self.value(p).row(r));
            }
        }
        let value = Tensor::from_vec(vec![m, total], data)?;
        self.push(
            value,
            Op::ConcatCols {
                parts: parts.to_vec(),
            },
            "concat_cols",
        )
    }

    /// Concatenate along the batch axis: `[m_i,n]` parts become `[Σm_i,n]`.
    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        if parts.is_empty() {
            return Err(CoreError::invalid("concat_rows", "no parts"));
        }
        let n = self.value(parts[0]).cols();
        let mut data = Vec::new();
        let mut rows = 0;
        for &p in parts {
            if self.value(p).cols() != n {
                return Err(CoreError::shape(
                    "concat_rows",
                    format!("{n} cols"),
                    format!("{}", self.value(p).cols()),
                ));
            }
            rows += self.value(p).rows();
            data.extend_from_slice(self.value(p).data());
        }
        let value = Tensor::from_vec(vec![rows, n], data)?;
        self.push(
            value,
            Op::ConcatRows {
                parts: parts.to_vec(),
            },
            "concat_rows",
        )
    }

    /// Reorder rows: output row `i` is input row `perm[i]`.
    pub fn permute_rows(&mut self, x: Var, perm: &[usize]) -> Result<Var> {
        let xv = self.value(x);
        let m = xv.rows();
        if perm.len() != m {
            return Err(CoreError::shape(
                "permute_rows",
                format!("permutation of {m} rows"),
                format!("{}", perm.len()),
            ));
        }
        let mut seen = vec![false; m];
        for &p in perm {
            if p >= m || seen[p] {
                return Err(CoreError::invalid("permute_rows", "not a permutation"));
            }
            seen[p] = true;
        }
        let value = xv.gather_rows(perm);
        self.push(
            value,
            Op::PermuteRows {
                x,
                perm: perm.to_vec(),
            },
            "permute_rows",
        )
    }

    pub fn sum_all(&mut self, x: Var) -> Result<Var> {
        let s: f64 = self.value(x).data().iter().sum();
        self.push(Tensor::scalar(s), Op::SumAll { x }, "sum_all")
    }

    pub fn mean_all(&mut self, x: Var) -> Result<Var> {
        let v = self.value(x);
        let s: f64 = v.data().iter().sum();
        let m = s / v.numel() as f64;
        self.push(Tensor::scalar(m), Op::MeanAll { x }, "mean_all")
    }

    /// `log(mean(exp(x)))` over all elements, guarded by max-subtraction.
    pub fn log_mean_exp(&mut self, x: Var) -> Result<Var> {
        let v = self.value(x);
        let max = v.data().iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let exps: Vec<f64> = v.data().iter().map(|&e| (e - max).exp()).collect();
        let sum: f64 = exps.iter().sum();
        let value = max + (sum / v.numel() as f64).ln();
        let weights = exps.iter().map(|&e| e / sum).collect();
        self.push(
            Tensor::scalar(value),
            Op::LogMeanExp { x, weights },
            "log_mean_exp",
        )
    }

    /// Mean softmax cross-entropy of `[m,c]` logits against integer labels.
    pub fn softmax_cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        let lv = self.value(logits);
        let (m, c) = (lv.rows(), lv.cols());
        if labels.len() != m {
            return Err(CoreError::shape(
                "softmax_cross_entropy",
                format!("{m} labels"),
                format!("{}", labels.len()),
            ));
        }
        if let Some(&bad) = labels.iter().find(|&&y| y >= c) {
            return Err(CoreError::invalid(
                "softmax_cross_entropy",
                format!("label {bad} out of range for {c} classes"),
            ));
        }
        let mut probs = vec![0.0; m * c];
        let mut loss = 0.0;
        for r in 0..m {
            let row = lv.row(r);
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let mut sum = 0.0;
            for j in 0..c {
                let e = (row[j] - max).exp();
                probs[r * c + j] = e;
                sum += e;
            }
            for j in 0..c {
                probs[r * c + j] /= sum;
            }
            loss -= probs[r * c + labels[r]].ln();
        }
        loss /= m as f64;
        self.push(
            Tensor::scalar(loss),
            Op::SoftmaxCrossEntropy {
                logits,
                labels: labels.to_vec(),
                probs,
            },
            "softmax_cross_entropy",
        )
    }

    /// Batch statistics of every train-mode batch-norm node, in record order.
    pub fn bn_batch_stats(&self) -> Vec<&BnBatchStats> {
        self.nodes
            .iter()
            .filter_map(|n| match &n.op {
                Op::BatchNormTrain { stats, .. } => Some(stats),
                _ => None,
            })
            .collect()
    }

    /// Backward from a scalar root, seeded with 1.
    pub fn backward(&mut self, root: Var) -> Result<Gradients> {
        let seed = Tensor::filled(self.value(root).shape().to_vec(), 1.0);
        self.backward_seeded(root, &seed)
    }

    /// Backward from `root`, seeded with an explicit upstream gradient.
    pub fn backward_seeded(&mut self, root: Var, loss_grad: &Tensor) -> Result<Gradients> {
        self.mark_consumed()?;
        self.backward_from(root, loss_grad)
    }

    /// Backward for several scalar roots over one trace, each seeded with 1.
    /// Counts as the trace's single consumption.
    pub fn backward_multi(&mut self, roots: &[Var]) -> Result<Vec<Gradients>> {
        self.mark_consumed()?;
        roots
            .iter()
            .map(|&r| {
                let seed = Tensor::filled(self.value(r).shape().to_vec(), 1.0);
                self.backward_from(r, &seed)
            })
            .collect()
    }

    fn mark_consumed(&mut self) -> Result<()> {
        if self.consumed {
            return Err(CoreError::TraceConsumed);
        }
        self.consumed = true;
        Ok(())
    }

    fn backward_from(&self, root: Var, seed: &Tensor) -> Result<Gradients> {
        if !self.value(root).same_shape(seed) {
            return Err(CoreError::shape(
                "backward",
                format!("{:?}", self.value(root).shape()),
                format!("{:?}", seed.shape()),
            ));
        }
        if !seed.is_finite() {
            return Err(CoreError::NonFinite { context: "backward seed" });
        }
        let mut grads: Vec<Option<Tensor>> = vec![None; self.nodes.len()];
        grads[root.0] = Some(seed.clone());

        // The tape is topologically ordered by construction: inputs of node i
        // always have index < i, so one reverse sweep suffices. Finiteness is
        // the caller's concern at extraction; scanning every intermediate
        // gradient here would dominate the step cost.
        for i in (0..=root.0).rev() {
            let g = match grads[i].take() {
                Some(g) => g,
                None => continue,
            };
            self.propagate(i, &g, &mut grads);
            grads[i] = Some(g);
        }
        Ok(Gradients { grads })
    }

    fn propagate(&self, i: usize, g: &Tensor, grads: &mut [Option<Tensor>]) {
        let add_to = |grads: &mut [Option<Tensor>], v: Var, delta: Tensor| {
            match &mut grads[v.0] {
                Some(acc) => accumulate(acc, &delta),
                slot @ None => *slot = Some(delta),
            }
        };
        match &self.nodes[i].op {
            Op::Leaf => {}
            Op::Matmul { a, b } => {
                let da = matmul_views(g, false, self.value(*b), true).expect("shapes checked");
                let db = matmul_views(self.value(*a), true, g, false).expect("shapes checked");
                add_to(grads, *a, da);
                add_to(grads, *b, db);
            }
            Op::AddBias { x, bias } => {
                let n = self.value(*bias).numel();
                let mut db = vec![0.0; n];
                for (j, &v) in g.data().iter().enumerate() {
                    db[j % n] += v;
                }
                add_to(grads, *x, g.clone());
                add_to(grads, *bias, Tensor::from_vec(vec![n], db).expect("bias shape"));
            }
            Op::Add { a, b } => {
                add_to(grads, *a, g.clone());
                add_to(grads, *b, g.clone());
            }
            Op::Sub { a, b } => {
                add_to(grads, *a, g.clone());
                add_to(grads, *b, g.scaled(-1.0));
            }
            Op::Mul { a, b } => {
                let da: Vec<f64> = g
                    .data()
                    .iter()
                    .zip(self.value(*b).data())
                    .map(|(&gv, &bv)| gv * bv)
                    .collect();
                let db: Vec<f64> = g
                    .data()
                    .iter()
                    .zip(self.value(*a).data())
                    .map(|(&gv, &av)| gv * av)
                    .collect();
                let shape = g.shape().to_vec();
                add_to(grads, *a, Tensor::from_vec(shape.clone(), da).expect("mul shape"));
                add_to(grads, *b, Tensor::from_vec(shape, db).expect("mul shape"));
            }
            Op::Scale { x, c } => {
                add_to(grads, *x, g.scaled(*c));
            }
            Op::LeakyRelu { x, slope } => {
                let dx: Vec<f64> = g
                    .data()
                    .iter()
                    .zip(self.value(*x).data())
                    .map(|(&gv, &xv)| if xv >= 0.0 { gv } else { gv * slope })
                    .collect();
                add_to(grads, *x, Tensor::from_vec(g.shape().to_vec(), dx).expect("shape"));
            }
            Op::Sigmoid { x } => {
                let dx: Vec<f64> = g
                    .data()
                    .iter()
                    .zip(self.nodes[i].value.data())
                    .map(|(&gv, &y)| gv * y * (1.0 - y))
                    .collect();
                add_to(grads, *x, Tensor::from_vec(g.shape().to_vec(), dx).expect("shape"));
            }
            Op::GradReverse { x } => {
                add_to(grads, *x, g.scaled(-1.0));
            }
            Op::Dropout { x, mask } => {
                let dx: Vec<f64> = g
                    .data()
                    .iter()
                    .zip(mask)
                    .map(|(&gv, &m)| gv * m)
                    .collect();
                add_to(grads, *x, Tensor::from_vec(g.shape().to_vec(), dx).expect("shape"));
            }
            Op::BatchNormTrain {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
                ..
            } => {
                let (m, n) = (g.rows(), g.cols());
                let gd = self.value(*gamma).data();
                let mut dbeta = vec![0.0; n];
                let mut dgamma = vec![0.0; n];
                let mut gsum = vec![0.0; n];
                let mut gxhat_sum = vec![0.0; n];
                for r in 0..m {
                    for c in 0..n {
                        let gv = g.data()[r * n + c];
                        dbeta[c] += gv;
                        dgamma[c] += gv * xhat[r * n + c];
                        gsum[c] += gv;
                        gxhat_sum[c] += gv * xhat[r * n + c];
                    }
                }
                let mf = m as f64;
                let mut dx = vec![0.0; m * n];
                for r in 0..m {
                    for c in 0..n {
                        let gv = g.data()[r * n + c];
                        dx[r * n + c] = gd[c] * inv_std[c]
                            * (gv - gsum[c] / mf - xhat[r * n + c] * gxhat_sum[c] / mf);
                    }
                }
                add_to(grads, *x, Tensor::from_vec(vec![m, n], dx).expect("shape"));
                add_to(grads, *gamma, Tensor::from_vec(vec![n], dgamma).expect("shape"));
                add_to(grads, *beta, Tensor::from_vec(vec![n], dbeta).expect("shape"));
            }
            Op::BatchNormEval {
                x,
                gamma,
                beta,
                mean,
                inv_std,
            } => {
                let (m, n) = (g.rows(), g.cols());
                let gd = self.value(*gamma).data();
                let xd = self.value(*x).data();
                let mut dx = vec![0.0; m * n];
                let mut dgamma = vec![0.0; n];
                let mut dbeta = vec![0.0; n];
                for r in 0..m {
                    for c in 0..n {
                        let gv = g.data()[r * n + c];
                        dx[r * n + c] = gv * gd[c] * inv_std[c];
                        dgamma[c] += gv * (xd[r * n + c] - mean[c]) * inv_std[c];
                        dbeta[c] += gv;
                    }
                }
                add_to(grads, *x, Tensor::from_vec(vec![m, n], dx).expect("shape"));
                add_to(grads, *gamma, Tensor::from_vec(vec![n], dgamma).expect("shape"));
                add_to(grads, *beta, Tensor::from_vec(vec![n], dbeta).expect("shape"));
            }
            Op::ConcatCols { parts } => {
                let m = g.rows();
                let mut col = 0;
                for &p in parts {
                    let w = self.value(p).cols();
                    let mut dp = Vec::with_capacity(m * w);
                    for r in 0..m {
                        dp.extend_from_slice(&g.row(r)[col..col + w]);
                    }
                    add_to(grads, p, Tensor::from_vec(vec![m, w], dp).expect("shape"));
                    col += w;
                }
            }
            Op::ConcatRows { parts } => {
                let n = g.cols();
                let mut row = 0;
                for &p in parts {
                    let h = self.value(p).rows();
                    let dp = g.data()[row * n..(row + h) * n].to_vec();
                    add_to(grads, p, Tensor::from_vec(vec![h, n], dp).expect("shape"));
                    row += h;
                }
            }
            Op::PermuteRows { x, perm } => {
                let (m, n) = (g.rows(), g.cols());
                let mut dx = vec![0.0; m * n];
                for (out_row, &src_row) in perm.iter().enumerate() {
                    dx[src_row * n..(src_row + 1) * n].copy_from_slice(g.row(out_row));
                }
                add_to(grads, *x, Tensor::from_vec(vec![m, n], dx).expect("shape"));
            }
            Op::SumAll { x } => {
                let s = g.data()[0];
                add_to(grads, *x, Tensor::filled(self.value(*x).shape().to_vec(), s));
            }
            Op::MeanAll { x } => {
                let s = g.data()[0] / self.value(*x).numel() as f64;
                add_to(grads, *x, Tensor::filled(self.value(*x).shape().to_vec(), s));
            }
            Op::LogMeanExp { x, weights } => {
                let s = g.data()[0];
                let dx: Vec<f64> = weights.iter().map(|&w| s * w).collect();
                add_to(
                    grads,
                    *x,
                    Tensor::from_vec(self.value(*x).shape().to_vec(), dx).expect("shape"),
                );
            }
            Op::SoftmaxCrossEntropy {
                logits,
                labels,
                probs,
            } => {
                let lv = self.value(*logits);
                let (m, c) = (lv.rows(), lv.cols());
                let s = g.data()[0] / m as f64;
                let mut dl = vec![0.0; m * c];
                for r in 0..m {
                    for j in 0..c {
                        let indicator = if labels[r] == j { 1.0 } else { 0.0 };
                        dl[r * c + j] = s * (probs[r * c + j] - indicator);
                    }
                }
                add_to(grads, *logits, Tensor::from_vec(vec![m, c], dl).expect("shape"));
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    fn t(shape: Vec<usize>, data: Vec<f64>) -> Tensor {
        Tensor::from_vec(shape, data).unwrap()
    }

    #[test]
    fn square_gradient() {
        // L = x² at x = 3 → dL/dx = 6
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::scalar(3.0)).unwrap();
        let y = tape.mul(x, x).unwrap();
        let g = tape.backward(y).unwrap();
        assert_eq!(g.get(x).unwrap().data(), &[6.0]);
    }

    #[test]
    fn leaky_relu_negative_side() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::scalar(-2.0)).unwrap();
        let y = tape.leaky_relu(x, 0.01).unwrap();
        assert!((tape.scalar(y) - (-0.02)).abs() < 1e-15);
        let s = tape.sum_all(y).unwrap();
        let g = tape.backward(s).unwrap();
        assert!((g.get(x).unwrap().data()[0] - 0.01).abs() < 1e-15);
    }

    #[test]
    fn grad_reverse_forward_identity_backward_negation() {
        let mut tape = Tape::new();
        let x = tape.leaf(t(vec![1, 2], vec![0.5, -1.25])).unwrap();
        let y = tape.grad_reverse(x).unwrap();
        assert_eq!(tape.value(y).data(), &[0.5, -1.25]);
        let g = tape
            .backward_seeded(y, &t(vec![1, 2], vec![2.0, -3.0]))
            .unwrap();
        assert_eq!(g.get(x).unwrap().data(), &[-2.0, 3.0]);
    }

    #[test]
    fn grad_reverse_twice_is_identity_backward() {
        let mut tape = Tape::new();
        let x = tape.leaf(t(vec![1, 3], vec![1.0, -2.0, 0.25])).unwrap();
        let y0 = tape.grad_reverse(x).unwrap();
        let y = tape.grad_reverse(y0).unwrap();
        let g = tape
            .backward_seeded(y, &t(vec![1, 3], vec![1.0, 2.0, 3.0]))
            .unwrap();
        assert_eq!(g.get(x).unwrap().data(), &[1.0, 2.0, 3.0]);
    }

    #[test]
    fn trace_consumed_twice_errors() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::scalar(1.0)).unwrap();
        let y = tape.mul(x, x).unwrap();
        tape.backward(y).unwrap();
        assert!(matches!(tape.backward(y), Err(CoreError::TraceConsumed)));
    }

    #[test]
    fn permute_rows_semantics() {
        // rows [a,b,c] with permutation (2,0,1) → [c,a,b]
        let mut tape = Tape::new();
        let x = tape
            .leaf(t(vec![3, 1], vec![10.0, 20.0, 30.0]))
            .unwrap();
        let y = tape.permute_rows(x, &[2, 0, 1]).unwrap();
        assert_eq!(tape.value(y).data(), &[30.0, 10.0, 20.0]);
        let g = tape
            .backward_seeded(y, &t(vec![3, 1], vec![1.0, 2.0, 3.0]))
            .unwrap();
        // output row i came from input row perm[i]
        assert_eq!(g.get(x).unwrap().data(), &[2.0, 3.0, 1.0]);
    }

    #[test]
    fn permute_rows_rejects_non_permutation() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::zeros(vec![3, 1])).unwrap();
        assert!(tape.permute_rows(x, &[0, 0, 1]).is_err());
        assert!(tape.permute_rows(x, &[0, 1]).is_err());
    }

    #[test]
    fn log_mean_exp_guarded_against_overflow() {
        let mut tape = Tape::new();
        let x = tape.leaf(t(vec![2, 1], vec![1000.0, 1000.0])).unwrap();
        let y = tape.log_mean_exp(x).unwrap();
        assert!((tape.scalar(y) - 1000.0).abs() < 1e-9);
    }

    #[test]
    fn softmax_ce_uniform_logits() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::zeros(vec![2, 3])).unwrap();
        let l = tape.softmax_cross_entropy(x, &[0, 2]).unwrap();
        assert!((tape.scalar(l) - 3.0_f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn softmax_ce_label_out_of_range() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::zeros(vec![1, 3])).unwrap();
        assert!(tape.softmax_cross_entropy(x, &[3]).is_err());
    }

    #[test]
    fn dropout_deterministic_per_seed() {
        let run = |seed: u64| {
            let mut tape = Tape::new();
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let x = tape.leaf(Tensor::filled(vec![4, 8], 1.0)).unwrap();
            let y = tape.dropout(x, 0.5, &mut rng).unwrap();
            tape.value(y).data().to_vec()
        };
        assert_eq!(run(7), run(7));
        assert_ne!(run(7), run(8));
    }

    #[test]
    fn non_finite_forward_is_an_error() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::scalar(1e308)).unwrap();
        let y = tape.mul(x, x);
        assert!(matches!(y, Err(CoreError::NonFinite { .. })));
    }
}
