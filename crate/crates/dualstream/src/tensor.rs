//! Reverse-mode automatic differentiation over dense f64 tensors.
//!
//! A `Tape` is an arena of nodes recorded in topological order (an op's
//! inputs always precede it). `backward` walks the arena once in reverse,
//! accumulating gradients additively across fan-out. Tapes are rebuilt per
//! training step and confined to one thread; models running on distinct
//! tapes share nothing mutable.
//!
//! Gradients only propagate into nodes whose subgraph contains a
//! `requires_grad` leaf; constants (targets, frozen features) cost nothing
//! on the way back. `detach` re-enters a value as a fresh constant leaf.

use std::sync::Arc;

use crate::dsp::stft::StftPlan;
use crate::error::Result;
use crate::linalg;

#[derive(Clone, Copy, PartialEq, Eq, Debug)]
pub struct TensorId(pub(crate) usize);

// ── Operation records ───────────────────────────────────────────────────────

/// One recorded operation. Variants carry their input ids plus whatever the
/// backward rule needs (strides, cached matrices, gather maps).
enum Op {
    Leaf,
    Add(TensorId, TensorId),
    Sub(TensorId, TensorId),
    Mul(TensorId, TensorId),
    Scale(TensorId, f64),
    /// (m x k) . (k x n)
    Matmul { a: TensorId, b: TensorId, m: usize, k: usize, n: usize },
    /// Dense 1-D convolution via im2col; `cols` is cached for the weight
    /// gradient. Depthwise convolutions take the loop path instead.
    Conv1d {
        x: TensorId,
        w: TensorId,
        bias: TensorId,
        stride: usize,
        pad: usize,
        depthwise: bool,
        cols: Vec<f64>,
    },
    ConvTranspose1d {
        x: TensorId,
        w: TensorId,
        bias: TensorId,
        stride: usize,
        pad: usize,
    },
    AvgPool1d { x: TensorId, factor: usize },
    Gelu(TensorId),
    Snake { x: TensorId, alpha: f64 },
    Tanh(TensorId),
    LayerNormCh { x: TensorId, gamma: TensorId, beta: TensorId, eps: f64 },
    /// Forward value is the quantized operand; backward passes the incoming
    /// gradient to `input` unchanged and nothing to the quantized side.
    Ste { input: TensorId },
    /// out[:, t] = table[indices[t], :] for a (K x D) table; output (D x T).
    GatherCodewords { table: TensorId, indices: Arc<Vec<usize>> },
    TruncateCols { x: TensorId, orig_t: usize },
    /// Windowed-DFT magnitudes; `re_im` and `src_idx` are the forward
    /// intermediates the backward pass reuses.
    Stft { x: TensorId, plan: Arc<StftPlan>, re_im: Vec<f64>, src_idx: Vec<u32> },
    /// ln(max(x, floor))
    LogMax { x: TensorId, floor: f64 },
    L1Mean { a: TensorId, b: TensorId },
    MseMean { a: TensorId, b: TensorId },
    SumAll(TensorId),
    MeanAll(TensorId),
}

struct Node {
    data: Vec<f64>,
    shape: Vec<usize>,
    grad: Option<Vec<f64>>,
    /// True when this node's subgraph contains a trainable leaf; backward
    /// skips everything else.
    requires_grad: bool,
    op: Op,
}

// ── Tape ────────────────────────────────────────────────────────────────────

#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
    backward_done: bool,
}

impl Tape {
    pub fn new() -> Tape {
        Tape::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, data: Vec<f64>, shape: Vec<usize>, requires_grad: bool, op: Op) -> TensorId {
        debug_assert_eq!(data.len(), shape.iter().product::<usize>());
        self.nodes.push(Node { data, shape, grad: None, requires_grad, op });
        TensorId(self.nodes.len() - 1)
    }

    pub fn leaf(&mut self, data: Vec<f64>, shape: &[usize], requires_grad: bool) -> TensorId {
        assert_eq!(data.len(), shape.iter().product::<usize>(), "leaf data does not match shape");
        self.push(data, shape.to_vec(), requires_grad, Op::Leaf)
    }

    pub fn constant(&mut self, data: Vec<f64>, shape: &[usize]) -> TensorId {
        self.leaf(data, shape, false)
    }

    pub fn scalar_const(&mut self, v: f64) -> TensorId {
        self.constant(vec![v], &[1])
    }

    /// Re-enter a value as a constant leaf: downstream gradients stop here.
    pub fn detach(&mut self, id: TensorId) -> TensorId {
        let data = self.nodes[id.0].data.clone();
        let shape = self.nodes[id.0].shape.clone();
        self.push(data, shape, false, Op::Leaf)
    }

    pub fn data(&self, id: TensorId) -> &[f64] {
        &self.nodes[id.0].data
    }

    pub fn shape(&self, id: TensorId) -> &[usize] {
        &self.nodes[id.0].shape
    }

    pub fn grad(&self, id: TensorId) -> Option<&[f64]> {
        self.nodes[id.0].grad.as_deref()
    }

    pub fn requires_grad(&self, id: TensorId) -> bool {
        self.nodes[id.0].requires_grad
    }

    /// Value of a scalar (single-element) tensor.
    pub fn value(&self, id: TensorId) -> f64 {
        assert_eq!(self.nodes[id.0].data.len(), 1, "value() needs a scalar tensor");
        self.nodes[id.0].data[0]
    }

    pub fn is_finite(&self, id: TensorId) -> bool {
        self.nodes[id.0].data.iter().all(|v| v.is_finite())
    }

    fn rg(&self, id: TensorId) -> bool {
        self.nodes[id.0].requires_grad
    }

    fn assert_same_shape(&self, a: TensorId, b: TensorId, what: &str) {
        assert_eq!(
            self.nodes[a.0].shape, self.nodes[b.0].shape,
            "{what}: shape mismatch {:?} vs {:?}",
            self.nodes[a.0].shape, self.nodes[b.0].shape
        );
    }

    // ── Elementwise and reduction ops ──────────────────────────────────────

    pub fn add(&mut self, a: TensorId, b: TensorId) -> TensorId {
        self.assert_same_shape(a, b, "add");
        let data: Vec<f64> =
            self.nodes[a.0].data.iter().zip(&self.nodes[b.0].data).map(|(x, y)| x + y).collect();
        let shape = self.nodes[a.0].shape.clone();
        let rg = self.rg(a) || self.rg(b);
        self.push(data, shape, rg, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: TensorId, b: TensorId) -> TensorId {
        self.assert_same_shape(a, b, "sub");
        let data: Vec<f64> =
            self.nodes[a.0].data.iter().zip(&self.nodes[b.0].data).map(|(x, y)| x - y).collect();
        let shape = self.nodes[a.0].shape.clone();
        let rg = self.rg(a) || self.rg(b);
        self.push(data, shape, rg, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: TensorId, b: TensorId) -> TensorId {
        self.assert_same_shape(a, b, "mul");
        let data: Vec<f64> =
            self.nodes[a.0].data.iter().zip(&self.nodes[b.0].data).map(|(x, y)| x * y).collect();
        let shape = self.nodes[a.0].shape.clone();
        let rg = self.rg(a) || self.rg(b);
        self.push(data, shape, rg, Op::Mul(a, b))
    }

    pub fn scale(&mut self, a: TensorId, c: f64) -> TensorId {
        let data: Vec<f64> = self.nodes[a.0].data.iter().map(|x| c * x).collect();
        let shape = self.nodes[a.0].shape.clone();
        let rg = self.rg(a);
        self.push(data, shape, rg, Op::Scale(a, c))
    }

    pub fn sum_all(&mut self, x: TensorId) -> TensorId {
        let s: f64 = self.nodes[x.0].data.iter().sum();
        let rg = self.rg(x);
        self.push(vec![s], vec![1], rg, Op::SumAll(x))
    }

    pub fn mean_all(&mut self, x: TensorId) -> TensorId {
        let n = self.nodes[x.0].data.len();
        assert!(n > 0, "mean of empty tensor");
        let s: f64 = self.nodes[x.0].data.iter().sum();
        let rg = self.rg(x);
        self.push(vec![s / n as f64], vec![1], rg, Op::MeanAll(x))
    }

    pub fn gelu(&mut self, x: TensorId) -> TensorId {
        let data: Vec<f64> = self.nodes[x.0].data.iter().map(|&v| gelu_val(v)).collect();
        let shape = self.nodes[x.0].shape.clone();
        let rg = self.rg(x);
        self.push(data, shape, rg, Op::Gelu(x))
    }

    pub fn snake(&mut self, x: TensorId, alpha: f64) -> TensorId {
        assert!(alpha > 0.0, "snake alpha must be positive, got {alpha}");
        let data: Vec<f64> = self.nodes[x.0]
            .data
            .iter()
            .map(|&v| {
                let s = (alpha * v).sin();
                v + s * s / alpha
            })
            .collect();
        let shape = self.nodes[x.0].shape.clone();
        let rg = self.rg(x);
        self.push(data, shape, rg, Op::Snake { x, alpha })
    }

    pub fn tanh(&mut self, x: TensorId) -> TensorId {
        let data: Vec<f64> = self.nodes[x.0].data.iter().map(|v| v.tanh()).collect();
        let shape = self.nodes[x.0].shape.clone();
        let rg = self.rg(x);
        self.push(data, shape, rg, Op::Tanh(x))
    }

    pub fn log_max(&mut self, x: TensorId, floor: f64) -> TensorId {
        assert!(floor > 0.0, "log floor must be positive");
        let data: Vec<f64> = self.nodes[x.0].data.iter().map(|&v| v.max(floor).ln()).collect();
        let shape = self.nodes[x.0].shape.clone();
        let rg = self.rg(x);
        self.push(data, shape, rg, Op::LogMax { x, floor })
    }

    pub fn l1_mean(&mut self, a: TensorId, b: TensorId) -> TensorId {
        self.assert_same_shape(a, b, "l1_mean");
        let n = self.nodes[a.0].data.len() as f64;
        let s: f64 = self.nodes[a.0]
            .data
            .iter()
            .zip(&self.nodes[b.0].data)
            .map(|(x, y)| (x - y).abs())
            .sum();
        let rg = self.rg(a) || self.rg(b);
        self.push(vec![s / n], vec![1], rg, Op::L1Mean { a, b })
    }

    pub fn mse_mean(&mut self, a: TensorId, b: TensorId) -> TensorId {
        self.assert_same_shape(a, b, "mse_mean");
        let n = self.nodes[a.0].data.len() as f64;
        let s: f64 = self.nodes[a.0]
            .data
            .iter()
            .zip(&self.nodes[b.0].data)
            .map(|(x, y)| (x - y) * (x - y))
            .sum();
        let rg = self.rg(a) || self.rg(b);
        self.push(vec![s / n], vec![1], rg, Op::MseMean { a, b })
    }

    // ── Linear algebra and structure ops ───────────────────────────────────

    pub fn matmul(&mut self, a: TensorId, b: TensorId) -> TensorId {
        let (sa, sb) = (&self.nodes[a.0].shape, &self.nodes[b.0].shape);
        assert_eq!(sa.len(), 2, "matmul lhs must be 2-D, got {sa:?}");
        assert_eq!(sb.len(), 2, "matmul rhs must be 2-D, got {sb:?}");
        assert_eq!(sa[1], sb[0], "matmul inner dims differ: {sa:?} vs {sb:?}");
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let mut data = vec![0.0; m * n];
        linalg::gemm(m, k, n, &self.nodes[a.0].data, &self.nodes[b.0].data, &mut data);
        let rg = self.rg(a) || self.rg(b);
        self.push(data, vec![m, n], rg, Op::Matmul { a, b, m, k, n })
    }

    /// Straight-through passthrough: forward takes the quantized values,
    /// backward routes the whole gradient to `input`.
    pub fn ste(&mut self, input: TensorId, quantized: TensorId) -> TensorId {
        self.assert_same_shape(input, quantized, "ste");
        let data = self.nodes[quantized.0].data.clone();
        let shape = self.nodes[input.0].shape.clone();
        let rg = self.rg(input);
        self.push(data, shape, rg, Op::Ste { input })
    }

    pub fn gather_codewords(&mut self, table: TensorId, indices: Arc<Vec<usize>>) -> TensorId {
        let st = &self.nodes[table.0].shape;
        assert_eq!(st.len(), 2, "codeword table must be (K x D)");
        let (k, d) = (st[0], st[1]);
        let t = indices.len();
        let mut data = vec![0.0; d * t];
        for (ti, &idx) in indices.iter().enumerate() {
            assert!(idx < k, "codeword index {idx} out of range for K={k}");
            for di in 0..d {
                data[di * t + ti] = self.nodes[table.0].data[idx * d + di];
            }
        }
        let rg = self.rg(table);
        self.push(data, vec![d, t], rg, Op::GatherCodewords { table, indices })
    }

    pub fn truncate_cols(&mut self, x: TensorId, t_new: usize) -> TensorId {
        let s = &self.nodes[x.0].shape;
        assert_eq!(s.len(), 2, "truncate_cols needs a 2-D tensor");
        let (c, t) = (s[0], s[1]);
        assert!(t_new <= t, "cannot truncate {t} columns to {t_new}");
        let mut data = vec![0.0; c * t_new];
        for ci in 0..c {
            data[ci * t_new..(ci + 1) * t_new]
                .copy_from_slice(&self.nodes[x.0].data[ci * t..ci * t + t_new]);
        }
        let rg = self.rg(x);
        self.push(data, vec![c, t_new], rg, Op::TruncateCols { x, orig_t: t })
    }

    pub fn avg_pool1d(&mut self, x: TensorId, factor: usize) -> TensorId {
        assert!(factor > 0, "pooling factor must be positive");
        let s = &self.nodes[x.0].shape;
        assert_eq!(s.len(), 2, "avg_pool1d needs a (C x T) tensor");
        let (c, t) = (s[0], s[1]);
        assert!(t >= factor, "cannot pool {t} frames by factor {factor}");
        let t_out = t / factor;
        let mut data = vec![0.0; c * t_out];
        let xd = &self.nodes[x.0].data;
        for ci in 0..c {
            for to in 0..t_out {
                let start = ci * t + to * factor;
                let sum: f64 = xd[start..start + factor].iter().sum();
                data[ci * t_out + to] = sum / factor as f64;
            }
        }
        let rg = self.rg(x);
        self.push(data, vec![c, t_out], rg, Op::AvgPool1d { x, factor })
    }

    /// Strided 1-D convolution, zero padding. `w` is (C_out x C_in x K) for
    /// the dense case and (C x 1 x K) with `depthwise` for per-channel
    /// convolution. Output length floor((T + 2*pad - K)/stride) + 1.
    pub fn conv1d(
        &mut self,
        x: TensorId,
        w: TensorId,
        bias: TensorId,
        stride: usize,
        pad: usize,
        depthwise: bool,
    ) -> TensorId {
        assert!(stride > 0);
        let (sx, sw) = (&self.nodes[x.0].shape, &self.nodes[w.0].shape);
        assert_eq!(sx.len(), 2, "conv input must be (C x T)");
        assert_eq!(sw.len(), 3, "conv weight must be (C_out x C_in x K)");
        let (c_in, t) = (sx[0], sx[1]);
        let (c_out, w_in, k) = (sw[0], sw[1], sw[2]);
        if depthwise {
            assert!(c_out == c_in && w_in == 1, "depthwise conv needs (C x 1 x K) weights");
        } else {
            assert_eq!(w_in, c_in, "conv weight C_in does not match input channels");
        }
        assert_eq!(self.nodes[bias.0].data.len(), c_out, "conv bias length mismatch");
        assert!(t + 2 * pad >= k, "conv input too short: T={t}, pad={pad}, K={k}");
        let t_out = (t + 2 * pad - k) / stride + 1;

        let mut data = vec![0.0; c_out * t_out];
        let mut cols = Vec::new();
        {
            let xd = &self.nodes[x.0].data;
            let wd = &self.nodes[w.0].data;
            let bd = &self.nodes[bias.0].data;
            if depthwise {
                for c in 0..c_in {
                    for to in 0..t_out {
                        let mut acc = bd[c];
                        for j in 0..k {
                            let src = to * stride + j;
                            if src >= pad && src - pad < t {
                                acc += wd[c * k + j] * xd[c * t + (src - pad)];
                            }
                        }
                        data[c * t_out + to] = acc;
                    }
                }
            } else {
                cols = vec![0.0; c_in * k * t_out];
                for c in 0..c_in {
                    for j in 0..k {
                        let row = (c * k + j) * t_out;
                        for to in 0..t_out {
                            let src = to * stride + j;
                            if src >= pad && src - pad < t {
                                cols[row + to] = xd[c * t + (src - pad)];
                            }
                        }
                    }
                }
                linalg::gemm(c_out, c_in * k, t_out, wd, &cols, &mut data);
                for o in 0..c_out {
                    for v in &mut data[o * t_out..(o + 1) * t_out] {
                        *v += bd[o];
                    }
                }
            }
        }
        let rg = self.rg(x) || self.rg(w) || self.rg(bias);
        self.push(data, vec![c_out, t_out], rg, Op::Conv1d { x, w, bias, stride, pad, depthwise, cols })
    }

    /// Transposed 1-D convolution. `w` is (C_in x C_out x K); output length
    /// (T - 1)*stride - 2*pad + K + out_pad.
    pub fn conv_transpose1d(
        &mut self,
        x: TensorId,
        w: TensorId,
        bias: TensorId,
        stride: usize,
        pad: usize,
        out_pad: usize,
    ) -> TensorId {
        assert!(stride > 0);
        assert!(out_pad < stride, "output padding must be smaller than the stride");
        let (sx, sw) = (&self.nodes[x.0].shape, &self.nodes[w.0].shape);
        assert_eq!(sx.len(), 2, "transposed conv input must be (C x T)");
        assert_eq!(sw.len(), 3, "transposed conv weight must be (C_in x C_out x K)");
        let (c_in, t) = (sx[0], sx[1]);
        let (w_cin, c_out, k) = (sw[0], sw[1], sw[2]);
        assert_eq!(w_cin, c_in, "transposed conv weight C_in does not match input channels");
        assert_eq!(self.nodes[bias.0].data.len(), c_out, "transposed conv bias length mismatch");
        let full = (t - 1) * stride + k + out_pad;
        assert!(full >= 2 * pad, "transposed conv padding exceeds output extent");
        let t_out = full - 2 * pad;

        // P = W2 . x with W2[(o*K + j), c] = w[c, o, j], then scatter
        // P[(o,j), s] into out[o, s*stride + j - pad].
        let mut p = vec![0.0; c_out * k * t];
        linalg::gemm_ex(
            c_out * k,
            c_in,
            t,
            1.0,
            &self.nodes[w.0].data,
            1,
            (c_out * k) as isize,
            &self.nodes[x.0].data,
            t as isize,
            1,
            0.0,
            &mut p,
            t as isize,
            1,
        );
        let mut data = vec![0.0; c_out * t_out];
        for o in 0..c_out {
            let b = self.nodes[bias.0].data[o];
            for v in &mut data[o * t_out..(o + 1) * t_out] {
                *v = b;
            }
            for j in 0..k {
                let row = (o * k + j) * t;
                for s in 0..t {
                    let dst = s * stride + j;
                    if dst >= pad && dst - pad < t_out {
                        data[o * t_out + (dst - pad)] += p[row + s];
                    }
                }
            }
        }
        let rg = self.rg(x) || self.rg(w) || self.rg(bias);
        self.push(data, vec![c_out, t_out], rg, Op::ConvTranspose1d { x, w, bias, stride, pad })
    }

    /// Per-frame layer normalization over the channel axis of a (C x T)
    /// tensor, with per-channel affine parameters.
    pub fn layer_norm_ch(&mut self, x: TensorId, gamma: TensorId, beta: TensorId, eps: f64) -> TensorId {
        let s = &self.nodes[x.0].shape;
        assert_eq!(s.len(), 2, "layer_norm_ch needs a (C x T) tensor");
        let (c, t) = (s[0], s[1]);
        assert_eq!(self.nodes[gamma.0].data.len(), c, "gamma length mismatch");
        assert_eq!(self.nodes[beta.0].data.len(), c, "beta length mismatch");
        let mut data = vec![0.0; c * t];
        {
            let xd = &self.nodes[x.0].data;
            let gd = &self.nodes[gamma.0].data;
            let bd = &self.nodes[beta.0].data;
            for ti in 0..t {
                let mut mean = 0.0;
                for ci in 0..c {
                    mean += xd[ci * t + ti];
                }
                mean /= c as f64;
                let mut var = 0.0;
                for ci in 0..c {
                    let d = xd[ci * t + ti] - mean;
                    var += d * d;
                }
                var /= c as f64;
                let inv = 1.0 / (var + eps).sqrt();
                for ci in 0..c {
                    let xhat = (xd[ci * t + ti] - mean) * inv;
                    data[ci * t + ti] = gd[ci] * xhat + bd[ci];
                }
            }
        }
        let rg = self.rg(x) || self.rg(gamma) || self.rg(beta);
        self.push(data, vec![c, t], rg, Op::LayerNormCh { x, gamma, beta, eps })
    }

    /// Windowed-DFT magnitude spectrogram of a 1-D signal (shape (T) or
    /// (1 x T)), differentiable through reflection padding and framing.
    pub fn stft_mag(&mut self, x: TensorId, plan: &Arc<StftPlan>) -> Result<TensorId> {
        let out = plan.analyze(&self.nodes[x.0].data)?;
        let rg = self.rg(x);
        Ok(self.push(
            out.magnitudes,
            vec![plan.bins, out.frames],
            rg,
            Op::Stft { x, plan: Arc::clone(plan), re_im: out.re_im, src_idx: out.src_idx },
        ))
    }

    // ── Backward ────────────────────────────────────────────────────────────

    fn take_grad(&mut self, id: TensorId) -> Vec<f64> {
        let n = self.nodes[id.0].data.len();
        self.nodes[id.0].grad.take().unwrap_or_else(|| vec![0.0; n])
    }

    fn add_grad(&mut self, id: TensorId, contrib: impl Iterator<Item = f64>) {
        if !self.nodes[id.0].requires_grad {
            return;
        }
        let mut g = self.take_grad(id);
        for (slot, v) in g.iter_mut().zip(contrib) {
            *slot += v;
        }
        self.nodes[id.0].grad = Some(g);
    }

    /// Reverse pass from a scalar loss. Every op is visited exactly once in
    /// reverse recording order; a second call on the same tape is a bug.
    pub fn backward(&mut self, loss: TensorId) {
        assert_eq!(self.nodes[loss.0].data.len(), 1, "backward needs a scalar loss");
        assert!(!self.backward_done, "backward already ran on this tape");
        self.backward_done = true;
        if !self.nodes[loss.0].requires_grad {
            return;
        }
        self.nodes[loss.0].grad = Some(vec![1.0]);

        for i in (0..self.nodes.len()).rev() {
            if !self.nodes[i].requires_grad || self.nodes[i].grad.is_none() {
                continue;
            }
            let op = std::mem::replace(&mut self.nodes[i].op, Op::Leaf);
            let g = self.nodes[i].grad.take().unwrap();
            self.backward_op(TensorId(i), &op, &g);
            self.nodes[i].grad = Some(g);
            self.nodes[i].op = op;
        }
    }

    fn backward_op(&mut self, out: TensorId, op: &Op, g: &[f64]) {
        match *op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                self.add_grad(a, g.iter().copied());
                self.add_grad(b, g.iter().copied());
            }
            Op::Sub(a, b) => {
                self.add_grad(a, g.iter().copied());
                self.add_grad(b, g.iter().map(|v| -v));
            }
            Op::Mul(a, b) => {
                if self.nodes[a.0].requires_grad {
                    let contrib: Vec<f64> =
                        g.iter().zip(&self.nodes[b.0].data).map(|(gv, bv)| gv * bv).collect();
                    self.add_grad(a, contrib.into_iter());
                }
                if self.nodes[b.0].requires_grad {
                    let contrib: Vec<f64> =
                        g.iter().zip(&self.nodes[a.0].data).map(|(gv, av)| gv * av).collect();
                    self.add_grad(b, contrib.into_iter());
                }
            }
            Op::Scale(a, c) => self.add_grad(a, g.iter().map(|v| c * v)),
            Op::Matmul { a, b, m, k, n } => {
                if self.nodes[a.0].requires_grad {
                    let mut ga = self.take_grad(a);
                    // dA = g . B^T
                    linalg::gemm_ex(
                        m, n, k, 1.0,
                        g, n as isize, 1,
                        &self.nodes[b.0].data, 1, n as isize,
                        1.0, &mut ga, k as isize, 1,
                    );
                    self.nodes[a.0].grad = Some(ga);
                }
                if self.nodes[b.0].requires_grad {
                    let mut gb = self.take_grad(b);
                    // dB = A^T . g
                    linalg::gemm_ex(
                        k, m, n, 1.0,
                        &self.nodes[a.0].data, 1, k as isize,
                        g, n as isize, 1,
                        1.0, &mut gb, n as isize, 1,
                    );
                    self.nodes[b.0].grad = Some(gb);
                }
            }
            Op::Conv1d { x, w, bias, stride, pad, depthwise, ref cols } => {
                self.backward_conv1d(out, x, w, bias, stride, pad, depthwise, cols, g)
            }
            Op::ConvTranspose1d { x, w, bias, stride, pad } => {
                self.backward_conv_transpose1d(out, x, w, bias, stride, pad, g)
            }
            Op::AvgPool1d { x, factor } => {
                let (c, t) = (self.nodes[x.0].shape[0], self.nodes[x.0].shape[1]);
                let t_out = t / factor;
                let mut gx = self.take_grad(x);
                for ci in 0..c {
                    for to in 0..t_out {
                        let share = g[ci * t_out + to] / factor as f64;
                        let start = ci * t + to * factor;
                        for slot in &mut gx[start..start + factor] {
                            *slot += share;
                        }
                    }
                }
                self.nodes[x.0].grad = Some(gx);
            }
            Op::Gelu(x) => {
                let contrib: Vec<f64> = g
                    .iter()
                    .zip(&self.nodes[x.0].data)
                    .map(|(gv, &xv)| gv * gelu_deriv(xv))
                    .collect();
                self.add_grad(x, contrib.into_iter());
            }
            Op::Snake { x, alpha } => {
                // d/dx (x + sin^2(ax)/a) = 1 + 2 sin(ax) cos(ax) = 1 + sin(2ax)
                let contrib: Vec<f64> = g
                    .iter()
                    .zip(&self.nodes[x.0].data)
                    .map(|(gv, &xv)| gv * (1.0 + (2.0 * alpha * xv).sin()))
                    .collect();
                self.add_grad(x, contrib.into_iter());
            }
            Op::Tanh(x) => {
                let contrib: Vec<f64> = g
                    .iter()
                    .zip(&self.nodes[out.0].data)
                    .map(|(gv, &yv)| gv * (1.0 - yv * yv))
                    .collect();
                self.add_grad(x, contrib.into_iter());
            }
            Op::LayerNormCh { x, gamma, beta, eps } => {
                self.backward_layer_norm(x, gamma, beta, eps, g)
            }
            Op::Ste { input } => self.add_grad(input, g.iter().copied()),
            Op::GatherCodewords { table, ref indices } => {
                if self.nodes[table.0].requires_grad {
                    let d = self.nodes[table.0].shape[1];
                    let t = indices.len();
                    let mut gt = self.take_grad(table);
                    for (ti, &idx) in indices.iter().enumerate() {
                        for di in 0..d {
                            gt[idx * d + di] += g[di * t + ti];
                        }
                    }
                    self.nodes[table.0].grad = Some(gt);
                }
            }
            Op::TruncateCols { x, orig_t } => {
                let c = self.nodes[x.0].shape[0];
                let t_new = self.nodes[out.0].shape[1];
                let mut gx = self.take_grad(x);
                for ci in 0..c {
                    for ti in 0..t_new {
                        gx[ci * orig_t + ti] += g[ci * t_new + ti];
                    }
                }
                self.nodes[x.0].grad = Some(gx);
            }
            Op::Stft { x, ref plan, ref re_im, ref src_idx } => {
                self.backward_stft(out, x, plan, re_im, src_idx, g)
            }
            Op::LogMax { x, floor } => {
                let contrib: Vec<f64> = g
                    .iter()
                    .zip(&self.nodes[x.0].data)
                    .map(|(gv, &xv)| if xv > floor { gv / xv } else { 0.0 })
                    .collect();
                self.add_grad(x, contrib.into_iter());
            }
            Op::L1Mean { a, b } => {
                let n = self.nodes[a.0].data.len() as f64;
                let s = g[0] / n;
                if self.nodes[a.0].requires_grad || self.nodes[b.0].requires_grad {
                    // Subgradient 0 at exact equality.
                    let signs: Vec<f64> = self.nodes[a.0]
                        .data
                        .iter()
                        .zip(&self.nodes[b.0].data)
                        .map(|(x, y)| if x == y { 0.0 } else { (x - y).signum() * s })
                        .collect();
                    self.add_grad(a, signs.iter().copied());
                    self.add_grad(b, signs.iter().map(|v| -v));
                }
            }
            Op::MseMean { a, b } => {
                let n = self.nodes[a.0].data.len() as f64;
                let s = 2.0 * g[0] / n;
                let diffs: Vec<f64> = self.nodes[a.0]
                    .data
                    .iter()
                    .zip(&self.nodes[b.0].data)
                    .map(|(x, y)| (x - y) * s)
                    .collect();
                self.add_grad(a, diffs.iter().copied());
                self.add_grad(b, diffs.iter().map(|v| -v));
            }
            Op::SumAll(x) => {
                let s = g[0];
                self.add_grad(x, std::iter::repeat(s).take(self.nodes[x.0].data.len()));
            }
            Op::MeanAll(x) => {
                let n = self.nodes[x.0].data.len();
                let s = g[0] / n as f64;
                self.add_grad(x, std::iter::repeat(s).take(n));
            }
        }
    }

    #[allow(clippy::too_many_arguments)]
    fn backward_conv1d(
        &mut self,
        out: TensorId,
        x: TensorId,
        w: TensorId,
        bias: TensorId,
        stride: usize,
        pad: usize,
        depthwise: bool,
        cols: &[f64],
        g: &[f64],
    ) {
        let (c_in, t) = (self.nodes[x.0].shape[0], self.nodes[x.0].shape[1]);
        let (c_out, k) = (self.nodes[w.0].shape[0], self.nodes[w.0].shape[2]);
        let t_out = self.nodes[out.0].shape[1];

        if self.nodes[bias.0].requires_grad {
            let mut gb = self.take_grad(bias);
            for o in 0..c_out {
                gb[o] += g[o * t_out..(o + 1) * t_out].iter().sum::<f64>();
            }
            self.nodes[bias.0].grad = Some(gb);
        }

        if depthwise {
            if self.nodes[w.0].requires_grad {
                let mut gw = self.take_grad(w);
                let xd = &self.nodes[x.0].data;
                for c in 0..c_in {
                    for j in 0..k {
                        let mut acc = 0.0;
                        for to in 0..t_out {
                            let src = to * stride + j;
                            if src >= pad && src - pad < t {
                                acc += g[c * t_out + to] * xd[c * t + (src - pad)];
                            }
                        }
                        gw[c * k + j] += acc;
                    }
                }
                self.nodes[w.0].grad = Some(gw);
            }
            if self.nodes[x.0].requires_grad {
                let mut gx = self.take_grad(x);
                let wd = &self.nodes[w.0].data;
                for c in 0..c_in {
                    for to in 0..t_out {
                        let gv = g[c * t_out + to];
                        for j in 0..k {
                            let src = to * stride + j;
                            if src >= pad && src - pad < t {
                                gx[c * t + (src - pad)] += gv * wd[c * k + j];
                            }
                        }
                    }
                }
                self.nodes[x.0].grad = Some(gx);
            }
            return;
        }

        if self.nodes[w.0].requires_grad {
            let mut gw = self.take_grad(w);
            // dW = g . cols^T
            linalg::gemm_ex(
                c_out, t_out, c_in * k, 1.0,
                g, t_out as isize, 1,
                cols, 1, t_out as isize,
                1.0, &mut gw, (c_in * k) as isize, 1,
            );
            self.nodes[w.0].grad = Some(gw);
        }
        if self.nodes[x.0].requires_grad {
            // dcols = W^T . g, then scatter back through the framing.
            let mut dcols = vec![0.0; c_in * k * t_out];
            linalg::gemm_ex(
                c_in * k, c_out, t_out, 1.0,
                &self.nodes[w.0].data, 1, (c_in * k) as isize,
                g, t_out as isize, 1,
                0.0, &mut dcols, t_out as isize, 1,
            );
            let mut gx = self.take_grad(x);
            for c in 0..c_in {
                for j in 0..k {
                    let row = (c * k + j) * t_out;
                    for to in 0..t_out {
                        let src = to * stride + j;
                        if src >= pad && src - pad < t {
                            gx[c * t + (src - pad)] += dcols[row + to];
                        }
                    }
                }
            }
            self.nodes[x.0].grad = Some(gx);
        }
    }

    fn backward_conv_transpose1d(
        &mut self,
        out: TensorId,
        x: TensorId,
        w: TensorId,
        bias: TensorId,
        stride: usize,
        pad: usize,
        g: &[f64],
    ) {
        let (c_in, t) = (self.nodes[x.0].shape[0], self.nodes[x.0].shape[1]);
        let (c_out, k) = (self.nodes[w.0].shape[1], self.nodes[w.0].shape[2]);
        let t_out = self.nodes[out.0].shape[1];

        if self.nodes[bias.0].requires_grad {
            let mut gb = self.take_grad(bias);
            for o in 0..c_out {
                gb[o] += g[o * t_out..(o + 1) * t_out].iter().sum::<f64>();
            }
            self.nodes[bias.0].grad = Some(gb);
        }
        if !self.nodes[x.0].requires_grad && !self.nodes[w.0].requires_grad {
            return;
        }

        // dP[(o*K + j), s] = g[o, s*stride + j - pad]
        let mut dp = vec![0.0; c_out * k * t];
        for o in 0..c_out {
            for j in 0..k {
                let row = (o * k + j) * t;
                for s in 0..t {
                    let dst = s * stride + j;
                    if dst >= pad && dst - pad < t_out {
                        dp[row + s] = g[o * t_out + (dst - pad)];
                    }
                }
            }
        }
        if self.nodes[x.0].requires_grad {
            let mut gx = self.take_grad(x);
            // dx = W2^T . dP with W2[(o*K+j), c] = w[c, o, j]
            linalg::gemm_ex(
                c_in, c_out * k, t, 1.0,
                &self.nodes[w.0].data, (c_out * k) as isize, 1,
                &dp, t as isize, 1,
                1.0, &mut gx, t as isize, 1,
            );
            self.nodes[x.0].grad = Some(gx);
        }
        if self.nodes[w.0].requires_grad {
            let mut gw = self.take_grad(w);
            // dW2 = dP . x^T written through W2's strided view of w.
            linalg::gemm_ex(
                c_out * k, t, c_in, 1.0,
                &dp, t as isize, 1,
                &self.nodes[x.0].data, 1, t as isize,
                1.0, &mut gw, 1, (c_out * k) as isize,
            );
            self.nodes[w.0].grad = Some(gw);
        }
    }

    fn backward_layer_norm(&mut self, x: TensorId, gamma: TensorId, beta: TensorId, eps: f64, g: &[f64]) {
        let (c, t) = (self.nodes[x.0].shape[0], self.nodes[x.0].shape[1]);
        let xd = &self.nodes[x.0].data;
        let gd = &self.nodes[gamma.0].data;

        let mut ggamma = vec![0.0; c];
        let mut gbeta = vec![0.0; c];
        let mut gx = vec![0.0; c * t];
        for ti in 0..t {
            let mut mean = 0.0;
            for ci in 0..c {
                mean += xd[ci * t + ti];
            }
            mean /= c as f64;
            let mut var = 0.0;
            for ci in 0..c {
                let d = xd[ci * t + ti] - mean;
                var += d * d;
            }
            var /= c as f64;
            let inv = 1.0 / (var + eps).sqrt();

            let mut mean_gh = 0.0;
            let mut mean_gh_xhat = 0.0;
            for ci in 0..c {
                let xhat = (xd[ci * t + ti] - mean) * inv;
                let gh = g[ci * t + ti] * gd[ci];
                mean_gh += gh;
                mean_gh_xhat += gh * xhat;
                ggamma[ci] += g[ci * t + ti] * xhat;
                gbeta[ci] += g[ci * t + ti];
            }
            mean_gh /= c as f64;
            mean_gh_xhat /= c as f64;
            for ci in 0..c {
                let xhat = (xd[ci * t + ti] - mean) * inv;
                let gh = g[ci * t + ti] * gd[ci];
                gx[ci * t + ti] = (gh - mean_gh - xhat * mean_gh_xhat) * inv;
            }
        }
        self.add_grad(x, gx.into_iter());
        self.add_grad(gamma, ggamma.into_iter());
        self.add_grad(beta, gbeta.into_iter());
    }

    fn backward_stft(
        &mut self,
        out: TensorId,
        x: TensorId,
        plan: &Arc<StftPlan>,
        re_im: &[f64],
        src_idx: &[u32],
        g: &[f64],
    ) {
        if !self.nodes[x.0].requires_grad {
            return;
        }
        let bins = plan.bins;
        let frames = self.nodes[out.0].shape[1];
        let mags = &self.nodes[out.0].data;
        // d|z|/dRe = Re/|z|, d|z|/dIm = Im/|z|; zero magnitude gets a zero
        // subgradient.
        let mut d_re_im = vec![0.0; 2 * bins * frames];
        let im_off = bins * frames;
        for i in 0..bins * frames {
            if mags[i] > 0.0 {
                let s = g[i] / mags[i];
                d_re_im[i] = s * re_im[i];
                d_re_im[im_off + i] = s * re_im[im_off + i];
            }
        }
        // dFramed = basis^T . dReIm, then scatter through the gather map.
        let n_fft = plan.n_fft;
        let mut d_framed = vec![0.0; n_fft * frames];
        linalg::gemm_ex(
            n_fft, 2 * bins, frames, 1.0,
            plan.basis(), 1, n_fft as isize,
            &d_re_im, frames as isize, 1,
            0.0, &mut d_framed, frames as isize, 1,
        );
        let mut gx = self.take_grad(x);
        for (v, &src) in d_framed.iter().zip(src_idx.iter()) {
            gx[src as usize] += v;
        }
        self.nodes[x.0].grad = Some(gx);
    }
}

// ── Elementwise helpers ─────────────────────────────────────────────────────

/// Tanh-approximate GELU; the backward rule differentiates this same
/// approximation, so gradient checks are exact against it.
fn gelu_val(x: f64) -> f64 {
    const C: f64 = 0.7978845608028654; // sqrt(2/pi)
    0.5 * x * (1.0 + (C * (x + 0.044715 * x * x * x)).tanh())
}

fn gelu_deriv(x: f64) -> f64 {
    const C: f64 = 0.7978845608028654;
    let u = C * (x + 0.044715 * x * x * x);
    let th = u.tanh();
    let du = C * (1.0 + 3.0 * 0.044715 * x * x);
    0.5 * (1.0 + th) + 0.5 * x * (1.0 - th * th) * du
}
