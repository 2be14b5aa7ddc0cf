//! Neural building blocks: a named parameter store, the graph binder that
//! puts parameters onto a tape, strided/transposed conv stacks with snake
//! activations, ConvNeXt-style residual blocks, and the Adam optimizer.

use rand::Rng;

use crate::error::{CodecError, Result};
use crate::tensor::{Tape, TensorId};

// ── Parameter store ─────────────────────────────────────────────────────────

#[derive(Clone, Copy, PartialEq, Eq, Debug)]
pub struct ParamId(pub(crate) usize);

pub struct ParamEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
    /// Non-trainable entries (frozen extractor statistics) are carried in
    /// checkpoints but never bound with gradients or touched by the optimizer.
    pub trainable: bool,
    m: Vec<f64>,
    v: Vec<f64>,
}

/// Flat registry of every named tensor a model owns. Layers hold `ParamId`
/// handles; checkpoints serialize entries by name in registration order.
#[derive(Default)]
pub struct ParamStore {
    entries: Vec<ParamEntry>,
}

impl ParamStore {
    pub fn new() -> ParamStore {
        ParamStore::default()
    }

    pub fn register(&mut self, name: &str, shape: &[usize], data: Vec<f64>, trainable: bool) -> ParamId {
        assert_eq!(data.len(), shape.iter().product::<usize>(), "param {name}: data/shape mismatch");
        assert!(
            self.entries.iter().all(|e| e.name != name),
            "duplicate parameter name {name}"
        );
        let n = data.len();
        self.entries.push(ParamEntry {
            name: name.to_string(),
            shape: shape.to_vec(),
            data,
            trainable,
            m: vec![0.0; n],
            v: vec![0.0; n],
        });
        ParamId(self.entries.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn data(&self, id: ParamId) -> &[f64] {
        &self.entries[id.0].data
    }

    pub fn data_mut(&mut self, id: ParamId) -> &mut [f64] {
        &mut self.entries[id.0].data
    }

    /// Clear the optimizer moments over a slice of one parameter, for regions
    /// re-initialized out of band: their gradient history no longer applies.
    pub fn reset_moments(&mut self, id: ParamId, range: std::ops::Range<usize>) {
        let e = &mut self.entries[id.0];
        e.m[range.clone()].fill(0.0);
        e.v[range].fill(0.0);
    }

    pub fn shape(&self, id: ParamId) -> &[usize] {
        &self.entries[id.0].shape
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.entries[id.0].name
    }

    pub fn entries(&self) -> &[ParamEntry] {
        &self.entries
    }

    pub fn entry_mut(&mut self, idx: usize) -> &mut ParamEntry {
        &mut self.entries[idx]
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.entries.iter().position(|e| e.name == name).map(ParamId)
    }

    /// Total trainable scalar count.
    pub fn total_params(&self) -> usize {
        self.entries.iter().filter(|e| e.trainable).map(|e| e.data.len()).sum()
    }
}

// ── Graph: binding parameters onto a tape ───────────────────────────────────

/// One forward pass's tape plus the parameter-to-leaf bindings made on it.
/// Parameters are bound lazily and at most once per graph, so fan-out across
/// layers accumulates gradients on a single leaf.
pub struct Graph {
    pub tape: Tape,
    bound: Vec<Option<TensorId>>,
}

impl Graph {
    pub fn new(store: &ParamStore) -> Graph {
        Graph { tape: Tape::new(), bound: vec![None; store.len()] }
    }

    pub fn param(&mut self, store: &ParamStore, id: ParamId) -> TensorId {
        if let Some(t) = self.bound[id.0] {
            return t;
        }
        let e = &store.entries[id.0];
        let t = self.tape.leaf(e.data.clone(), &e.shape, e.trainable);
        self.bound[id.0] = Some(t);
        t
    }

    /// Gradients of every bound trainable parameter that received one.
    pub fn grads(&self) -> Vec<(ParamId, Vec<f64>)> {
        self.bound
            .iter()
            .enumerate()
            .filter_map(|(i, t)| {
                t.and_then(|tid| self.tape.grad(tid)).map(|g| (ParamId(i), g.to_vec()))
            })
            .collect()
    }

    pub fn binding(&self, id: ParamId) -> Option<TensorId> {
        self.bound[id.0]
    }
}

// ── Initialization ──────────────────────────────────────────────────────────

/// Centered uniform with scale 1/sqrt(fan_in).
pub fn uniform_init(rng: &mut impl Rng, len: usize, fan_in: usize) -> Vec<f64> {
    let scale = 1.0 / (fan_in.max(1) as f64).sqrt();
    (0..len).map(|_| rng.gen_range(-scale..scale)).collect()
}

// ── Stride arithmetic ───────────────────────────────────────────────────────

/// Latent frames per second after a strided conv stack.
pub fn frame_rate(sample_rate: u32, strides: &[usize]) -> Result<f64> {
    if strides.is_empty() {
        return Err(CodecError::config("stride list is empty"));
    }
    if strides.iter().any(|&s| s == 0) {
        return Err(CodecError::config("zero stride in stride list"));
    }
    let prod: usize = strides.iter().product();
    Ok(sample_rate as f64 / prod as f64)
}

// ── Layers ──────────────────────────────────────────────────────────────────

pub struct Conv1d {
    pub w: ParamId,
    pub b: ParamId,
    pub stride: usize,
    pub pad: usize,
    depthwise: bool,
}

impl Conv1d {
    pub fn new(
        store: &mut ParamStore,
        rng: &mut impl Rng,
        name: &str,
        c_in: usize,
        c_out: usize,
        k: usize,
        stride: usize,
        pad: usize,
    ) -> Conv1d {
        let w = store.register(
            &format!("{name}.weight"),
            &[c_out, c_in, k],
            uniform_init(rng, c_out * c_in * k, c_in * k),
            true,
        );
        let b = store.register(&format!("{name}.bias"), &[c_out], uniform_init(rng, c_out, c_in * k), true);
        Conv1d { w, b, stride, pad, depthwise: false }
    }

    pub fn new_depthwise(
        store: &mut ParamStore,
        rng: &mut impl Rng,
        name: &str,
        c: usize,
        k: usize,
        pad: usize,
    ) -> Conv1d {
        let w = store.register(&format!("{name}.weight"), &[c, 1, k], uniform_init(rng, c * k, k), true);
        let b = store.register(&format!("{name}.bias"), &[c], uniform_init(rng, c, k), true);
        Conv1d { w, b, stride: 1, pad, depthwise: true }
    }

    pub fn forward(&self, g: &mut Graph, store: &ParamStore, x: TensorId) -> TensorId {
        let w = g.param(store, self.w);
        let b = g.param(store, self.b);
        g.tape.conv1d(x, w, b, self.stride, self.pad, self.depthwise)
    }
}

pub struct ConvTranspose1d {
    pub w: ParamId,
    pub b: ParamId,
    pub stride: usize,
    pub pad: usize,
    pub out_pad: usize,
}

impl ConvTranspose1d {
    pub fn new(
        store: &mut ParamStore,
        rng: &mut impl Rng,
        name: &str,
        c_in: usize,
        c_out: usize,
        k: usize,
        stride: usize,
        pad: usize,
        out_pad: usize,
    ) -> ConvTranspose1d {
        let w = store.register(
            &format!("{name}.weight"),
            &[c_in, c_out, k],
            uniform_init(rng, c_in * c_out * k, c_in * k),
            true,
        );
        let b = store.register(&format!("{name}.bias"), &[c_out], uniform_init(rng, c_out, c_in * k), true);
        ConvTranspose1d { w, b, stride, pad, out_pad }
    }

    pub fn forward(&self, g: &mut Graph, store: &ParamStore, x: TensorId) -> TensorId {
        let w = g.param(store, self.w);
        let b = g.param(store, self.b);
        g.tape.conv_transpose1d(x, w, b, self.stride, self.pad, self.out_pad)
    }
}

pub struct LayerNormCh {
    pub gamma: ParamId,
    pub beta: ParamId,
}

impl LayerNormCh {
    pub fn new(store: &mut ParamStore, name: &str, c: usize) -> LayerNormCh {
        let gamma = store.register(&format!("{name}.gamma"), &[c], vec![1.0; c], true);
        let beta = store.register(&format!("{name}.beta"), &[c], vec![0.0; c], true);
        LayerNormCh { gamma, beta }
    }

    pub fn forward(&self, g: &mut Graph, store: &ParamStore, x: TensorId) -> TensorId {
        let gamma = g.param(store, self.gamma);
        let beta = g.param(store, self.beta);
        g.tape.layer_norm_ch(x, gamma, beta, 1e-6)
    }
}

/// Depthwise conv (kernel 7), per-frame channel normalization, pointwise
/// 4x expansion, GELU, pointwise contraction, residual add. Input and output
/// shapes are identical.
pub struct ConvNeXtBlock {
    dw: Conv1d,
    norm: LayerNormCh,
    pw1: Conv1d,
    pw2: Conv1d,
}

impl ConvNeXtBlock {
    pub fn new(store: &mut ParamStore, rng: &mut impl Rng, name: &str, c: usize) -> ConvNeXtBlock {
        ConvNeXtBlock {
            dw: Conv1d::new_depthwise(store, rng, &format!("{name}.dw"), c, 7, 3),
            norm: LayerNormCh::new(store, &format!("{name}.norm"), c),
            pw1: Conv1d::new(store, rng, &format!("{name}.pw1"), c, 4 * c, 1, 1, 0),
            pw2: Conv1d::new(store, rng, &format!("{name}.pw2"), 4 * c, c, 1, 1, 0),
        }
    }

    pub fn forward(&self, g: &mut Graph, store: &ParamStore, x: TensorId) -> TensorId {
        let h = self.dw.forward(g, store, x);
        let h = self.norm.forward(g, store, h);
        let h = self.pw1.forward(g, store, h);
        let h = g.tape.gelu(h);
        let h = self.pw2.forward(g, store, h);
        g.tape.add(x, h)
    }
}

/// Stack of ConvNeXt blocks at a fixed width; no resampling inside.
pub struct ResNetStack {
    blocks: Vec<ConvNeXtBlock>,
}

impl ResNetStack {
    pub fn new(store: &mut ParamStore, rng: &mut impl Rng, name: &str, c: usize, n_blocks: usize) -> ResNetStack {
        let blocks = (0..n_blocks)
            .map(|i| ConvNeXtBlock::new(store, rng, &format!("{name}.block{i}"), c))
            .collect();
        ResNetStack { blocks }
    }

    pub fn forward(&self, g: &mut Graph, store: &ParamStore, x: TensorId) -> TensorId {
        let mut h = x;
        for b in &self.blocks {
            h = b.forward(g, store, h);
        }
        h
    }
}

/// Kernel/padding schedule shared by the strided encoder and its mirrored
/// decoder: kernel 2*stride, padding ceil(stride/2), transposed output
/// padding stride mod 2. These give output lengths of exactly T/stride and
/// T*stride respectively.
fn stage_geometry(stride: usize) -> (usize, usize, usize) {
    (2 * stride, stride.div_ceil(2), stride % 2)
}

/// Strided conv stack (snake between stages) followed by a pointwise
/// projection to the latent width. Input (1 x T), output (H x T/prod).
pub struct WaveEncoder {
    stages: Vec<Conv1d>,
    proj: Conv1d,
    strides: Vec<usize>,
}

impl WaveEncoder {
    pub fn new(
        store: &mut ParamStore,
        rng: &mut impl Rng,
        name: &str,
        strides: &[usize],
        channels: &[usize],
        latent: usize,
    ) -> WaveEncoder {
        assert_eq!(strides.len(), channels.len(), "one channel width per stride");
        let mut stages = Vec::new();
        let mut c_prev = 1;
        for (i, (&s, &c)) in strides.iter().zip(channels).enumerate() {
            let (k, pad, _) = stage_geometry(s);
            stages.push(Conv1d::new(store, rng, &format!("{name}.stage{i}"), c_prev, c, k, s, pad));
            c_prev = c;
        }
        let proj = Conv1d::new(store, rng, &format!("{name}.proj"), c_prev, latent, 1, 1, 0);
        WaveEncoder { stages, proj, strides: strides.to_vec() }
    }

    pub fn total_stride(&self) -> usize {
        self.strides.iter().product()
    }

    pub fn forward(&self, g: &mut Graph, store: &ParamStore, x: TensorId) -> TensorId {
        let t = g.tape.shape(x)[1];
        assert!(!g.tape.data(x).is_empty(), "empty audio");
        assert_eq!(
            t % self.total_stride(),
            0,
            "encoder input length {t} is not a multiple of the total stride {}",
            self.total_stride()
        );
        let mut h = x;
        for stage in &self.stages {
            h = stage.forward(g, store, h);
            h = g.tape.snake(h, 1.0);
        }
        self.proj.forward(g, store, h)
    }
}

/// Mirror of the encoder: pointwise from the latent width, transposed convs
/// (snake before each), a final kernel-7 conv down to one channel, tanh.
pub struct WaveDecoder {
    proj: Conv1d,
    stages: Vec<ConvTranspose1d>,
    final_conv: Conv1d,
}

impl WaveDecoder {
    pub fn new(
        store: &mut ParamStore,
        rng: &mut impl Rng,
        name: &str,
        strides: &[usize],
        channels: &[usize],
        latent: usize,
    ) -> WaveDecoder {
        assert_eq!(strides.len(), channels.len(), "one channel width per stride");
        let proj = Conv1d::new(store, rng, &format!("{name}.proj"), latent, channels[strides.len() - 1], 1, 1, 0);
        let mut stages = Vec::new();
        for i in (0..strides.len()).rev() {
            let (k, pad, out_pad) = stage_geometry(strides[i]);
            let c_in = channels[i];
            let c_out = if i == 0 { channels[0] } else { channels[i - 1] };
            stages.push(ConvTranspose1d::new(
                store,
                rng,
                &format!("{name}.stage{i}"),
                c_in,
                c_out,
                k,
                strides[i],
                pad,
                out_pad,
            ));
        }
        let final_conv = Conv1d::new(store, rng, &format!("{name}.final"), channels[0], 1, 7, 1, 3);
        WaveDecoder { proj, stages, final_conv }
    }

    pub fn final_conv_params(&self) -> (ParamId, ParamId) {
        (self.final_conv.w, self.final_conv.b)
    }

    pub fn forward(&self, g: &mut Graph, store: &ParamStore, feat: TensorId) -> TensorId {
        let mut h = self.proj.forward(g, store, feat);
        for stage in &self.stages {
            h = g.tape.snake(h, 1.0);
            h = stage.forward(g, store, h);
        }
        let h = g.tape.snake(h, 1.0);
        let h = self.final_conv.forward(g, store, h);
        g.tape.tanh(h)
    }
}

// ── Adam ────────────────────────────────────────────────────────────────────

pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    t: u64,
}

impl Adam {
    pub fn new(lr: f64) -> Adam {
        Adam { lr, beta1: 0.8, beta2: 0.99, eps: 1e-8, t: 0 }
    }

    /// Clips the global gradient norm to `clip`, then applies one
    /// bias-corrected Adam update. Returns the pre-clip norm.
    pub fn step(
        &mut self,
        store: &mut ParamStore,
        grads: &[(ParamId, Vec<f64>)],
        clip: f64,
    ) -> f64 {
        let norm: f64 = grads
            .iter()
            .map(|(_, g)| g.iter().map(|v| v * v).sum::<f64>())
            .sum::<f64>()
            .sqrt();
        let scale = if norm > clip && norm > 0.0 { clip / norm } else { 1.0 };

        self.t += 1;
        let bc1 = 1.0 - self.beta1.powi(self.t as i32);
        let bc2 = 1.0 - self.beta2.powi(self.t as i32);
        for (pid, g) in grads {
            let e = &mut store.entries[pid.0];
            if !e.trainable {
                continue;
            }
            for i in 0..e.data.len() {
                let gv = g[i] * scale;
                e.m[i] = self.beta1 * e.m[i] + (1.0 - self.beta1) * gv;
                e.v[i] = self.beta2 * e.v[i] + (1.0 - self.beta2) * gv * gv;
                let mhat = e.m[i] / bc1;
                let vhat = e.v[i] / bc2;
                e.data[i] -= self.lr * mhat / (vhat.sqrt() + self.eps);
            }
        }
        norm
    }
}
