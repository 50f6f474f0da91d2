use std::collections::HashMap;

use super::kernels::{self, ConvGeom};
use super::{ParamId, ParamStore, Result, StoreId, Tensor, TensorError};

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

/// Extension point for fused operations with a hand-written adjoint.
pub trait CustomOp {
    fn name(&self) -> &'static str;

    /// Vector-Jacobian product. Returns one entry per input; entries whose
    /// `needs` flag is false may be `None`.
    fn backward(
        &self,
        inputs: &[&Tensor],
        output: &Tensor,
        grad_out: &Tensor,
        needs: &[bool],
    ) -> Vec<Option<Tensor>>;
}

enum Op {
    Leaf,
    Add(Var, Var),
    Scale(Var, f32),
    Relu(Var),
    Conv2d {
        input: Var,
        weight: Var,
        bias: Option<Var>,
        geom: ConvGeom,
        out_ch: usize,
        cols: Vec<f32>,
    },
    PixelShuffle {
        input: Var,
        map: Vec<usize>,
    },
    GlobalAvgPool(Var),
    Linear {
        input: Var,
        weight: Var,
        bias: Option<Var>,
    },
    Sum(Var),
    WeightedMse {
        a: Var,
        b: Var,
        weights: Option<Tensor>,
    },
    SoftmaxCe {
        logits: Var,
        labels: Vec<usize>,
        probs: Vec<f32>,
    },
    KdDiv {
        student: Var,
        temperature: f32,
        student_probs: Vec<f32>,
        teacher_probs: Vec<f32>,
    },
    NegLog2Sum(Var),
    Custom {
        inputs: Vec<Var>,
        op: Box<dyn CustomOp>,
    },
}

struct Node {
    value: Tensor,
    op: Op,
    tracked: bool,
}

/// Define-by-run record of one forward pass.
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
    params: Vec<(StoreId, ParamId, Var)>,
    param_lookup: HashMap<(StoreId, ParamId), Var>,
}

/// Result of a backward pass: gradients for every tracked node reached.
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
    params: Vec<(StoreId, ParamId, Var)>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    pub(crate) fn param_grads(&self, store: StoreId) -> impl Iterator<Item = (ParamId, &Tensor)> {
        self.params
            .iter()
            .filter(move |(s, _, _)| *s == store)
            .filter_map(|&(_, p, v)| self.get(v).map(|g| (p, g)))
    }
}

fn mismatch(op: &'static str, axis: &'static str, expected: usize, found: usize) -> TensorError {
    TensorError::ShapeMismatch {
        op,
        axis,
        expected,
        found,
    }
}

fn same_shape(op: &'static str, a: &Tensor, b: &Tensor) -> Result<()> {
    if a.rank() != b.rank() {
        return Err(TensorError::RankMismatch {
            op,
            expected: a.rank(),
            found: b.shape().to_vec(),
        });
    }
    for (&x, &y) in a.shape().iter().zip(b.shape()) {
        if x != y {
            return Err(mismatch(op, "extent", x, y));
        }
    }
    Ok(())
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

    fn push(&mut self, value: Tensor, op: Op, tracked: bool) -> Var {
        self.nodes.push(Node { value, op, tracked });
        Var(self.nodes.len() - 1)
    }

    fn tracked(&self, v: Var) -> bool {
        self.nodes[v.0].tracked
    }

    /// Values of every node in recording order.
    pub fn values(&self) -> impl Iterator<Item = &Tensor> {
        self.nodes.iter().map(|n| &n.value)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    /// Input that never receives a gradient.
    pub fn constant(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf, false)
    }

    /// Input that receives a gradient (readable from [`Gradients::get`]).
    pub fn variable(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf, true)
    }

    /// Copy of `v` cut off from the graph.
    pub fn detach(&mut self, v: Var) -> Var {
        let t = self.value(v).clone();
        self.constant(t)
    }

    /// Registers a parameter. Frozen stores contribute constants. Repeated
    /// registration of the same parameter returns the same node.
    pub fn param(&mut self, store: &ParamStore, id: ParamId) -> Var {
        let key = (store.id(), id);
        if let Some(&v) = self.param_lookup.get(&key) {
            return v;
        }
        let value = store.value(id).clone();
        let v = if store.is_frozen() {
            self.constant(value)
        } else {
            let v = self.variable(value);
            self.params.push((store.id(), id, v));
            v
        };
        self.param_lookup.insert(key, v);
        v
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        same_shape("add", self.value(a), self.value(b))?;
        let data = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(x, y)| x + y)
            .collect();
        let t = Tensor::new(self.shape(a).to_vec(), data)?;
        let tracked = self.tracked(a) || self.tracked(b);
        Ok(self.push(t, Op::Add(a, b), tracked))
    }

    pub fn scale(&mut self, a: Var, factor: f32) -> Var {
        let data = self.value(a).data().iter().map(|x| x * factor).collect();
        let t = Tensor::new(self.shape(a).to_vec(), data).expect("same shape");
        let tracked = self.tracked(a);
        self.push(t, Op::Scale(a, factor), tracked)
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let data = self.value(a).data().iter().map(|x| x.max(0.0)).collect();
        let t = Tensor::new(self.shape(a).to_vec(), data).expect("same shape");
        let tracked = self.tracked(a);
        self.push(t, Op::Relu(a), tracked)
    }

    /// 2-D convolution over an NCHW batch with an `O×C×K×K` kernel.
    pub fn conv2d(
        &mut self,
        input: Var,
        weight: Var,
        bias: Option<Var>,
        stride: usize,
        padding: usize,
    ) -> Result<Var> {
        const OP: &str = "conv2d";
        let x = self.value(input);
        let w = self.value(weight);
        x.expect_rank(OP, 4)?;
        w.expect_rank(OP, 4)?;
        let (n, c, h, wd) = (x.shape()[0], x.shape()[1], x.shape()[2], x.shape()[3]);
        let (o, wc, k, k2) = (w.shape()[0], w.shape()[1], w.shape()[2], w.shape()[3]);
        if wc != c {
            return Err(mismatch(OP, "input channels", wc, c));
        }
        if k != k2 {
            return Err(mismatch(OP, "kernel width", k, k2));
        }
        if stride == 0 {
            return Err(TensorError::InvalidArgument {
                op: OP,
                reason: "stride must be positive".into(),
            });
        }
        if h + 2 * padding < k {
            return Err(mismatch(OP, "height (padded)", k, h + 2 * padding));
        }
        if wd + 2 * padding < k {
            return Err(mismatch(OP, "width (padded)", k, wd + 2 * padding));
        }
        if let Some(b) = bias {
            let b = self.value(b);
            b.expect_rank(OP, 1)?;
            if b.shape()[0] != o {
                return Err(mismatch(OP, "bias", o, b.shape()[0]));
            }
        }
        let geom = ConvGeom {
            n,
            c,
            h,
            w: wd,
            k,
            stride,
            pad: padding,
            ho: (h + 2 * padding - k) / stride + 1,
            wo: (wd + 2 * padding - k) / stride + 1,
        };
        let (out, cols) = kernels::conv_forward(
            x.data(),
            w.data(),
            bias.map(|b| self.value(b).data()),
            o,
            &geom,
        );
        let t = Tensor::new([n, o, geom.ho, geom.wo], out)?;
        let tracked =
            self.tracked(input) || self.tracked(weight) || bias.is_some_and(|b| self.tracked(b));
        let cols = if tracked { cols } else { Vec::new() };
        Ok(self.push(
            t,
            Op::Conv2d {
                input,
                weight,
                bias,
                geom,
                out_ch: o,
                cols,
            },
            tracked,
        ))
    }

    /// Sub-pixel rearrangement `(N, C·r², H, W) → (N, C, H·r, W·r)`.
    pub fn pixel_shuffle(&mut self, input: Var, factor: usize) -> Result<Var> {
        const OP: &str = "pixel_shuffle";
        let x = self.value(input);
        x.expect_rank(OP, 4)?;
        let (n, c, h, w) = (x.shape()[0], x.shape()[1], x.shape()[2], x.shape()[3]);
        let rr = factor * factor;
        if factor == 0 || c % rr != 0 {
            return Err(mismatch(OP, "channels (multiple of factor²)", rr, c));
        }
        let map = kernels::pixel_shuffle_map(n, c / rr, h, w, factor);
        let data = map.iter().map(|&i| x.data()[i]).collect();
        let t = Tensor::new([n, c / rr, h * factor, w * factor], data)?;
        let tracked = self.tracked(input);
        Ok(self.push(t, Op::PixelShuffle { input, map }, tracked))
    }

    /// Mean over the spatial axes: `(N, C, H, W) → (N, C)`.
    pub fn global_avg_pool(&mut self, input: Var) -> Result<Var> {
        let x = self.value(input);
        x.expect_rank("global_avg_pool", 4)?;
        let (n, c) = (x.shape()[0], x.shape()[1]);
        let plane = x.shape()[2] * x.shape()[3];
        let data = x
            .data()
            .chunks(plane)
            .map(|p| (p.iter().map(|&v| v as f64).sum::<f64>() / plane as f64) as f32)
            .collect();
        let t = Tensor::new([n, c], data)?;
        let tracked = self.tracked(input);
        Ok(self.push(t, Op::GlobalAvgPool(input), tracked))
    }

    /// `x · Wᵀ + b` with `x: N×I`, `W: O×I`.
    pub fn linear(&mut self, input: Var, weight: Var, bias: Option<Var>) -> Result<Var> {
        const OP: &str = "linear";
        let x = self.value(input);
        let w = self.value(weight);
        x.expect_rank(OP, 2)?;
        w.expect_rank(OP, 2)?;
        let (n, i) = (x.shape()[0], x.shape()[1]);
        let o = w.shape()[0];
        if w.shape()[1] != i {
            return Err(mismatch(OP, "input features", w.shape()[1], i));
        }
        let mut out = vec![0.0f32; n * o];
        kernels::gemm(n, i, o, x.data(), false, w.data(), true, &mut out, false);
        if let Some(b) = bias {
            let b = self.value(b);
            b.expect_rank(OP, 1)?;
            if b.shape()[0] != o {
                return Err(mismatch(OP, "bias", o, b.shape()[0]));
            }
            for row in out.chunks_mut(o) {
                for (r, bv) in row.iter_mut().zip(b.data()) {
                    *r += bv;
                }
            }
        }
        let t = Tensor::new([n, o], out)?;
        let tracked =
            self.tracked(input) || self.tracked(weight) || bias.is_some_and(|b| self.tracked(b));
        Ok(self.push(
            t,
            Op::Linear {
                input,
                weight,
                bias,
            },
            tracked,
        ))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.value(a).data().iter().map(|&v| v as f64).sum::<f64>() as f32;
        let tracked = self.tracked(a);
        self.push(Tensor::scalar(s), Op::Sum(a), tracked)
    }

    /// Mean squared error over all elements.
    pub fn mse(&mut self, a: Var, b: Var) -> Result<Var> {
        self.weighted_mse_impl(a, b, None)
    }

    /// Mean squared error with one weight per `(sample, row, column)` shared
    /// across channels: `(1/numel) Σ s[n,y,x] (a − b)²`.
    pub fn weighted_mse(&mut self, a: Var, b: Var, weights: Tensor) -> Result<Var> {
        self.weighted_mse_impl(a, b, Some(weights))
    }

    fn weighted_mse_impl(&mut self, a: Var, b: Var, weights: Option<Tensor>) -> Result<Var> {
        const OP: &str = "mse";
        let (ta, tb) = (self.value(a), self.value(b));
        same_shape(OP, ta, tb)?;
        let numel = ta.numel().max(1);
        let total = match &weights {
            None => ta
                .data()
                .iter()
                .zip(tb.data())
                .map(|(x, y)| {
                    let d = (x - y) as f64;
                    d * d
                })
                .sum::<f64>(),
            Some(w) => {
                ta.expect_rank(OP, 4)?;
                let s = ta.shape();
                if w.shape() != [s[0], s[2], s[3]] {
                    return Err(TensorError::InvalidArgument {
                        op: OP,
                        reason: format!("weights {:?} do not match N×H×W of {:?}", w.shape(), s),
                    });
                }
                let plane = s[2] * s[3];
                let mut total = 0.0f64;
                for (idx, (x, y)) in ta.data().iter().zip(tb.data()).enumerate() {
                    let n = idx / (s[1] * plane);
                    let d = (x - y) as f64;
                    total += w.data()[n * plane + idx % plane] as f64 * d * d;
                }
                total
            }
        };
        let tracked = self.tracked(a) || self.tracked(b);
        Ok(self.push(
            Tensor::scalar((total / numel as f64) as f32),
            Op::WeightedMse { a, b, weights },
            tracked,
        ))
    }

    /// Mean over the batch of `−log softmax(logits)[label]`.
    pub fn softmax_cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        const OP: &str = "softmax_cross_entropy";
        let l = self.value(logits);
        l.expect_rank(OP, 2)?;
        let (n, c) = (l.shape()[0], l.shape()[1]);
        if labels.len() != n {
            return Err(mismatch(OP, "batch", n, labels.len()));
        }
        if let Some(&bad) = labels.iter().find(|&&y| y >= c) {
            return Err(TensorError::LabelOutOfRange {
                label: bad,
                classes: c,
            });
        }
        let mut total = 0.0f64;
        for (row, &y) in l.data().chunks(c).zip(labels) {
            total -= kernels::log_softmax_row(row, 1.0)[y];
        }
        let probs = kernels::softmax_rows(l.data(), c, 1.0);
        let tracked = self.tracked(logits);
        Ok(self.push(
            Tensor::scalar((total / n.max(1) as f64) as f32),
            Op::SoftmaxCe {
                logits,
                labels: labels.to_vec(),
                probs,
            },
            tracked,
        ))
    }

    /// Knowledge-distillation loss
    /// `T² · mean_n KL(softmax(t/T) ‖ softmax(s/T))`.
    ///
    /// The teacher side is treated as a constant.
    pub fn kd_divergence(&mut self, student: Var, teacher: Var, temperature: f32) -> Result<Var> {
        const OP: &str = "kd_divergence";
        if !(temperature > 0.0) {
            return Err(TensorError::InvalidArgument {
                op: OP,
                reason: format!("temperature must be positive, got {temperature}"),
            });
        }
        let (s, t) = (self.value(student), self.value(teacher));
        same_shape(OP, s, t)?;
        s.expect_rank(OP, 2)?;
        let (n, c) = (s.shape()[0], s.shape()[1]);
        let mut total = 0.0f64;
        for (srow, trow) in s.data().chunks(c).zip(t.data().chunks(c)) {
            let ls = kernels::log_softmax_row(srow, temperature);
            let lt = kernels::log_softmax_row(trow, temperature);
            total += lt
                .iter()
                .zip(&ls)
                .map(|(&a, &b)| if a > -700.0 { a.exp() * (a - b) } else { 0.0 })
                .sum::<f64>();
        }
        let t2 = (temperature as f64).powi(2);
        let value = (t2 * total / n.max(1) as f64).max(0.0) as f32;
        let student_probs = kernels::softmax_rows(s.data(), c, temperature);
        let teacher_probs = kernels::softmax_rows(t.data(), c, temperature);
        let tracked = self.tracked(student);
        Ok(self.push(
            Tensor::scalar(value),
            Op::KdDiv {
                student,
                temperature,
                student_probs,
                teacher_probs,
            },
            tracked,
        ))
    }

    /// `Σ −log₂ p` over all elements (an information content in bits).
    pub fn neg_log2_sum(&mut self, p: Var) -> Var {
        let bits = self
            .value(p)
            .data()
            .iter()
            .map(|&v| -(v as f64).log2())
            .sum::<f64>() as f32;
        let tracked = self.tracked(p);
        self.push(Tensor::scalar(bits), Op::NegLog2Sum(p), tracked)
    }

    /// Records a fused op whose forward value the caller already computed.
    pub fn custom(&mut self, inputs: &[Var], output: Tensor, op: Box<dyn CustomOp>) -> Var {
        let tracked = inputs.iter().any(|&v| self.tracked(v));
        self.push(
            output,
            Op::Custom {
                inputs: inputs.to_vec(),
                op,
            },
            tracked,
        )
    }

    /// Reverse pass from a scalar loss.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        let shape = self.shape(loss);
        if self.value(loss).numel() != 1 {
            return Err(TensorError::NonScalarLoss(shape.to_vec()));
        }
        self.backward_with_seed(loss, Tensor::new(shape.to_vec(), vec![1.0])?)
    }

    /// Reverse pass seeded with an arbitrary output cotangent.
    pub fn backward_with_seed(&self, output: Var, seed: Tensor) -> Result<Gradients> {
        same_shape("backward", self.value(output), &seed)?;
        let mut grads: Vec<Option<Vec<f32>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[output.0] = Some(seed.into_data());
        for i in (0..=output.0).rev() {
            let node = &self.nodes[i];
            if !node.tracked {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.propagate(node, &g, &mut grads);
            grads[i] = Some(g);
        }
        let grads = grads
            .into_iter()
            .zip(&self.nodes)
            .map(|(g, n)| {
                g.filter(|_| n.tracked)
                    .map(|d| Tensor::new(n.value.shape().to_vec(), d).expect("grad shape"))
            })
            .collect();
        Ok(Gradients {
            grads,
            params: self.params.clone(),
        })
    }

    fn accumulate(&self, grads: &mut [Option<Vec<f32>>], v: Var, delta: Vec<f32>) {
        if !self.tracked(v) {
            return;
        }
        match &mut grads[v.0] {
            Some(existing) => {
                for (e, d) in existing.iter_mut().zip(delta) {
                    *e += d;
                }
            }
            slot @ None => *slot = Some(delta),
        }
    }

    fn propagate(&self, node: &Node, g: &[f32], grads: &mut [Option<Vec<f32>>]) {
        match &node.op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                self.accumulate(grads, *a, g.to_vec());
                self.accumulate(grads, *b, g.to_vec());
            }
            Op::Scale(a, f) => {
                self.accumulate(grads, *a, g.iter().map(|v| v * f).collect());
            }
            Op::Relu(a) => {
                let x = self.value(*a).data();
                let d = g
                    .iter()
                    .zip(x)
                    .map(|(&gv, &xv)| if xv > 0.0 { gv } else { 0.0 })
                    .collect();
                self.accumulate(grads, *a, d);
            }
            Op::Conv2d {
                input,
                weight,
                bias,
                geom,
                out_ch,
                cols,
            } => {
                let want = (
                    self.tracked(*input),
                    self.tracked(*weight),
                    bias.is_some_and(|b| self.tracked(b)),
                );
                let cg = kernels::conv_backward(
                    g,
                    cols,
                    self.value(*weight).data(),
                    *out_ch,
                    geom,
                    want,
                );
                if let Some(dx) = cg.dx {
                    self.accumulate(grads, *input, dx);
                }
                if let Some(dw) = cg.dw {
                    self.accumulate(grads, *weight, dw);
                }
                if let (Some(b), Some(db)) = (bias, cg.db) {
                    self.accumulate(grads, *b, db);
                }
            }
            Op::PixelShuffle { input, map } => {
                let mut dx = vec![0.0f32; self.value(*input).numel()];
                for (&src, &gv) in map.iter().zip(g) {
                    dx[src] += gv;
                }
                self.accumulate(grads, *input, dx);
            }
            Op::GlobalAvgPool(a) => {
                let x = self.value(*a);
                let plane = x.shape()[2] * x.shape()[3];
                let inv = 1.0 / plane as f32;
                let mut dx = vec![0.0f32; x.numel()];
                for (chunk, &gv) in dx.chunks_mut(plane).zip(g) {
                    chunk.iter_mut().for_each(|d| *d = gv * inv);
                }
                self.accumulate(grads, *a, dx);
            }
            Op::Linear {
                input,
                weight,
                bias,
            } => {
                let x = self.value(*input);
                let w = self.value(*weight);
                let (n, i) = (x.shape()[0], x.shape()[1]);
                let o = w.shape()[0];
                if self.tracked(*input) {
                    let mut dx = vec![0.0f32; n * i];
                    kernels::gemm(n, o, i, g, false, w.data(), false, &mut dx, false);
                    self.accumulate(grads, *input, dx);
                }
                if self.tracked(*weight) {
                    let mut dw = vec![0.0f32; o * i];
                    kernels::gemm(o, n, i, g, true, x.data(), false, &mut dw, false);
                    self.accumulate(grads, *weight, dw);
                }
                if let Some(b) = bias.filter(|&b| self.tracked(b)) {
                    let mut db = vec![0.0f32; o];
                    for row in g.chunks(o) {
                        for (d, &gv) in db.iter_mut().zip(row) {
                            *d += gv;
                        }
                    }
                    self.accumulate(grads, b, db);
                }
            }
            Op::Sum(a) => {
                let n = self.value(*a).numel();
                self.accumulate(grads, *a, vec![g[0]; n]);
            }
            Op::WeightedMse { a, b, weights } => {
                let (ta, tb) = (self.value(*a), self.value(*b));
                let scale = 2.0 * g[0] / ta.numel().max(1) as f32;
                let mut d: Vec<f32> = ta
                    .data()
                    .iter()
                    .zip(tb.data())
                    .map(|(x, y)| scale * (x - y))
                    .collect();
                if let Some(w) = weights {
                    let s = ta.shape();
                    let plane = s[2] * s[3];
                    for (idx, dv) in d.iter_mut().enumerate() {
                        let n = idx / (s[1] * plane);
                        *dv *= w.data()[n * plane + idx % plane];
                    }
                }
                if self.tracked(*b) {
                    self.accumulate(grads, *b, d.iter().map(|v| -v).collect());
                }
                self.accumulate(grads, *a, d);
            }
            Op::SoftmaxCe {
                logits,
                labels,
                probs,
            } => {
                let c = self.shape(*logits)[1];
                let scale = g[0] / labels.len().max(1) as f32;
                let mut d: Vec<f32> = probs.iter().map(|p| p * scale).collect();
                for (row, &y) in labels.iter().enumerate() {
                    d[row * c + y] -= scale;
                }
                self.accumulate(grads, *logits, d);
            }
            Op::KdDiv {
                student,
                temperature,
                student_probs,
                teacher_probs,
            } => {
                let n = self.shape(*student)[0];
                let scale = g[0] * temperature / n.max(1) as f32;
                let d = student_probs
                    .iter()
                    .zip(teacher_probs)
                    .map(|(s, t)| scale * (s - t))
                    .collect();
                self.accumulate(grads, *student, d);
            }
            Op::NegLog2Sum(p) => {
                let inv_ln2 = std::f32::consts::LOG2_E;
                let d = self
                    .value(*p)
                    .data()
                    .iter()
                    .map(|&v| -g[0] * inv_ln2 / v)
                    .collect();
                self.accumulate(grads, *p, d);
            }
            Op::Custom { inputs, op } => {
                let values: Vec<&Tensor> = inputs.iter().map(|&v| self.value(v)).collect();
                let needs: Vec<bool> = inputs.iter().map(|&v| self.tracked(v)).collect();
                let grad_out = Tensor::new(node.value.shape().to_vec(), g.to_vec())
                    .expect("custom grad shape");
                let back = op.backward(&values, &node.value, &grad_out, &needs);
                for (&v, d) in inputs.iter().zip(back) {
                    if let Some(d) = d {
                        self.accumulate(grads, v, d.into_data());
                    }
                }
            }
        }
    }
}
