//! A compact spatio-temporal graph convolutional network.
//!
//! Each block applies a fixed normalized adjacency over joints followed by a
//! per-joint linear map, ReLU, a temporal convolution along frames (same
//! padding, stride 1), an identity residual when the widths match, and a
//! final ReLU. The head averages over frames and joints and projects to the
//! output logits. Parameters live in one flat `Vec<f64>`; gradients are
//! hand-derived.

use std::ops::Range;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::{Classifier, Mode};
use crate::error::{Error, Result};
use crate::skeleton::{SkeletonTopology, Tensor3};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StGcnConfig {
    pub frames: usize,
    pub joints: usize,
    pub in_channels: usize,
    /// Output width of each block.
    pub widths: Vec<usize>,
    /// Odd temporal kernel length.
    pub temporal_kernel: usize,
    pub outputs: usize,
}

impl StGcnConfig {
    pub fn validate(&self) -> Result<()> {
        if self.widths.is_empty() || self.widths.contains(&0) {
            return Err(Error::InvalidConfig("block widths must be non-empty and positive".into()));
        }
        if self.temporal_kernel.is_multiple_of(2) {
            return Err(Error::InvalidConfig("temporal kernel must be odd".into()));
        }
        if self.frames == 0 || self.joints == 0 || self.in_channels == 0 || self.outputs == 0 {
            return Err(Error::InvalidConfig("all model dimensions must be positive".into()));
        }
        Ok(())
    }
}

/// Architecture knobs shared by every network built for one experiment;
/// input shape and output count come from the data.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct BackboneSpec {
    pub widths: Vec<usize>,
    pub temporal_kernel: usize,
}

impl Default for BackboneSpec {
    fn default() -> Self {
        Self {
            widths: vec![16, 16, 32, 32],
            temporal_kernel: 3,
        }
    }
}

impl BackboneSpec {
    pub fn config(&self, input: (usize, usize, usize), outputs: usize) -> StGcnConfig {
        StGcnConfig {
            frames: input.0,
            joints: input.1,
            in_channels: input.2,
            widths: self.widths.clone(),
            temporal_kernel: self.temporal_kernel,
            outputs,
        }
    }

    pub fn build(
        &self,
        input: (usize, usize, usize),
        outputs: usize,
        topology: &SkeletonTopology,
        seed: u64,
    ) -> Result<ReferenceStGcn> {
        ReferenceStGcn::new(self.config(input, outputs), topology.clone(), seed)
    }
}

/// Fixed input standardization `(x - mean) / std`, one statistic per
/// (joint, channel) pair, stored joint-major.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct InputNorm {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl InputNorm {
    pub fn identity(features: usize) -> Self {
        Self {
            mean: vec![0.0; features],
            std: vec![1.0; features],
        }
    }

    /// Statistics over every frame of `inputs`. Features with (near-)zero
    /// spread keep unit scale.
    pub fn fit<'a>(inputs: impl IntoIterator<Item = &'a Tensor3>) -> Option<Self> {
        let mut sum: Vec<f64> = Vec::new();
        let mut sq: Vec<f64> = Vec::new();
        let mut count = 0usize;
        for x in inputs {
            let width = x.joints() * x.channels();
            if sum.is_empty() {
                sum = vec![0.0; width];
                sq = vec![0.0; width];
            }
            for row in x.as_slice().chunks_exact(width) {
                for (j, &v) in row.iter().enumerate() {
                    sum[j] += v as f64;
                    sq[j] += (v as f64) * (v as f64);
                }
            }
            count += x.frames();
        }
        if count == 0 {
            return None;
        }
        let n = count as f64;
        let mean: Vec<f64> = sum.iter().map(|s| s / n).collect();
        let std = sq
            .iter()
            .zip(&mean)
            .map(|(q, m)| {
                let var = (q / n - m * m).max(0.0);
                if var > 1e-12 {
                    var.sqrt()
                } else {
                    1.0
                }
            })
            .collect();
        Some(Self { mean, std })
    }
}

#[derive(Clone, Debug)]
struct BlockLayout {
    cin: usize,
    cout: usize,
    ws: Range<usize>,
    bs: Range<usize>,
    wt: Range<usize>,
    bt: Range<usize>,
}

impl BlockLayout {
    fn residual(&self) -> bool {
        self.cin == self.cout
    }
}

#[derive(Clone, Debug)]
struct Layout {
    blocks: Vec<BlockLayout>,
    wf: Range<usize>,
    bf: Range<usize>,
    total: usize,
}

impl Layout {
    fn new(cfg: &StGcnConfig) -> Self {
        let mut at = 0;
        let mut take = |n: usize| {
            let r = at..at + n;
            at += n;
            r
        };
        let mut cin = cfg.in_channels;
        let mut blocks = Vec::with_capacity(cfg.widths.len());
        for &cout in &cfg.widths {
            blocks.push(BlockLayout {
                cin,
                cout,
                ws: take(cin * cout),
                bs: take(cout),
                wt: take(cfg.temporal_kernel * cout * cout),
                bt: take(cout),
            });
            cin = cout;
        }
        let wf = take(cin * cfg.outputs);
        let bf = take(cfg.outputs);
        Layout {
            blocks,
            wf,
            bf,
            total: at,
        }
    }
}

/// Intermediate activations of one block, kept for the backward pass.
pub struct BlockCache {
    mixed: Vec<f64>,
    spatial: Vec<f64>,
    hidden: Vec<f64>,
    output: Vec<f64>,
}

#[derive(Clone, Debug)]
pub struct ReferenceStGcn {
    config: StGcnConfig,
    topology: SkeletonTopology,
    neighbours: Vec<Vec<(usize, f64)>>,
    layout: Layout,
    params: Vec<f64>,
    input_norm: InputNorm,
    mode: Mode,
}

impl ReferenceStGcn {
    /// Fan-in scaled Gaussian init (He for block weights, LeCun for the head), zero biases.
    pub fn new(config: StGcnConfig, topology: SkeletonTopology, seed: u64) -> Result<Self> {
        let mut model = Self::zeroed(config, topology)?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let kt = model.config.temporal_kernel;
        let layout = model.layout.clone();
        let mut fill = |range: Range<usize>, std: f64, params: &mut [f64]| {
            let normal = Normal::new(0.0, std).unwrap();
            for p in &mut params[range] {
                *p = normal.sample(&mut rng);
            }
        };
        for b in &layout.blocks {
            fill(b.ws.clone(), (2.0 / b.cin as f64).sqrt(), &mut model.params);
            fill(b.wt.clone(), (2.0 / (kt * b.cout) as f64).sqrt(), &mut model.params);
        }
        let last = layout.blocks.last().unwrap().cout;
        fill(layout.wf.clone(), (1.0 / last as f64).sqrt(), &mut model.params);
        Ok(model)
    }

    /// All parameters zero.
    pub fn zeroed(config: StGcnConfig, topology: SkeletonTopology) -> Result<Self> {
        config.validate()?;
        if topology.joint_count() != config.joints {
            return Err(Error::Dimension(format!(
                "topology has {} joints, model expects {}",
                topology.joint_count(),
                config.joints
            )));
        }
        let v = config.joints;
        let adj = topology.normalized_adjacency();
        let neighbours = (0..v)
            .map(|i| {
                (0..v)
                    .filter(|&j| adj[i * v + j] != 0.0)
                    .map(|j| (j, adj[i * v + j]))
                    .collect()
            })
            .collect();
        let layout = Layout::new(&config);
        let params = vec![0.0; layout.total];
        let input_norm = InputNorm::identity(config.joints * config.in_channels);
        Ok(Self {
            config,
            topology,
            neighbours,
            layout,
            params,
            input_norm,
            mode: Mode::Train,
        })
    }

    pub fn config(&self) -> &StGcnConfig {
        &self.config
    }

    pub fn topology(&self) -> &SkeletonTopology {
        &self.topology
    }

    pub fn param_count(&self) -> usize {
        self.layout.total
    }

    pub fn input_norm(&self) -> &InputNorm {
        &self.input_norm
    }

    pub fn set_input_norm(&mut self, norm: InputNorm) -> Result<()> {
        let width = self.config.joints * self.config.in_channels;
        if norm.mean.len() != width || norm.std.len() != width {
            return Err(Error::Dimension(format!("input norm must have {width} entries")));
        }
        if norm.std.iter().any(|s| !(s.is_finite() && *s > 0.0)) {
            return Err(Error::InvalidConfig("input norm std must be positive".into()));
        }
        self.input_norm = norm;
        Ok(())
    }

    /// Replace the parameter vector wholesale.
    pub fn set_params(&mut self, params: Vec<f64>) -> Result<()> {
        if params.len() != self.layout.total {
            return Err(Error::Dimension(format!(
                "{} parameters supplied, model has {}",
                params.len(),
                self.layout.total
            )));
        }
        self.params = params;
        Ok(())
    }

    /// Zero the output projection so every input maps to equal logits.
    pub fn zero_head(&mut self) {
        let (wf, bf) = (self.layout.wf.clone(), self.layout.bf.clone());
        self.params[wf].fill(0.0);
        self.params[bf].fill(0.0);
    }

    pub fn head_params(&self) -> &[f64] {
        &self.params[self.layout.wf.start..self.layout.bf.end]
    }

    fn rows(&self) -> usize {
        self.config.frames * self.config.joints
    }

    fn block_forward(&self, b: &BlockLayout, input: Vec<f64>) -> BlockCache {
        let (t_len, v_len) = (self.config.frames, self.config.joints);
        let (cin, cout) = (b.cin, b.cout);
        let p = &self.params;
        let rows = self.rows();

        let mut mixed = vec![0.0; rows * cin];
        for t in 0..t_len {
            for v in 0..v_len {
                let dst = &mut mixed[(t * v_len + v) * cin..(t * v_len + v + 1) * cin];
                for &(u, w) in &self.neighbours[v] {
                    let src = &input[(t * v_len + u) * cin..(t * v_len + u + 1) * cin];
                    for (d, s) in dst.iter_mut().zip(src) {
                        *d += w * s;
                    }
                }
            }
        }

        let ws = &p[b.ws.clone()];
        let bs = &p[b.bs.clone()];
        let mut spatial = vec![0.0; rows * cout];
        for r in 0..rows {
            let out = &mut spatial[r * cout..(r + 1) * cout];
            out.copy_from_slice(bs);
            for c in 0..cin {
                let a = mixed[r * cin + c];
                if a != 0.0 {
                    for (o, w) in out.iter_mut().zip(&ws[c * cout..(c + 1) * cout]) {
                        *o += a * w;
                    }
                }
            }
        }
        let hidden: Vec<f64> = spatial.iter().map(|&x| x.max(0.0)).collect();

        let kt = self.config.temporal_kernel;
        let pad = kt / 2;
        let wt = &p[b.wt.clone()];
        let bt = &p[b.bt.clone()];
        let mut output = vec![0.0; rows * cout];
        for t in 0..t_len {
            for v in 0..v_len {
                output[(t * v_len + v) * cout..(t * v_len + v + 1) * cout].copy_from_slice(bt);
            }
            for k in 0..kt {
                let Some(src_t) = (t + k).checked_sub(pad).filter(|&s| s < t_len) else {
                    continue;
                };
                for v in 0..v_len {
                    let src = &hidden[(src_t * v_len + v) * cout..(src_t * v_len + v + 1) * cout];
                    let out_row = (t * v_len + v) * cout;
                    for (c, &a) in src.iter().enumerate() {
                        if a == 0.0 {
                            continue;
                        }
                        let w = &wt[(k * cout + c) * cout..(k * cout + c + 1) * cout];
                        for (o, wv) in output[out_row..out_row + cout].iter_mut().zip(w) {
                            *o += a * wv;
                        }
                    }
                }
            }
        }
        if b.residual() {
            for (o, x) in output.iter_mut().zip(&input) {
                *o += x;
            }
        }
        for o in &mut output {
            *o = o.max(0.0);
        }
        BlockCache {
            mixed,
            spatial,
            hidden,
            output,
        }
    }

    /// Backpropagate `d_out` (gradient w.r.t. the block output) through one
    /// block. Returns the gradient w.r.t. the block input when requested.
    fn block_backward(
        &self,
        b: &BlockLayout,
        cache: &BlockCache,
        mut d_out: Vec<f64>,
        grad: &mut [f64],
        want_input_grad: bool,
    ) -> Option<Vec<f64>> {
        let (t_len, v_len) = (self.config.frames, self.config.joints);
        let (cin, cout) = (b.cin, b.cout);
        let rows = self.rows();
        let p = &self.params;
        let kt = self.config.temporal_kernel;
        let pad = kt / 2;

        // through the final ReLU
        for (d, &y) in d_out.iter_mut().zip(&cache.output) {
            if y <= 0.0 {
                *d = 0.0;
            }
        }
        let dz = d_out;

        {
            let gbt = &mut grad[b.bt.clone()];
            for r in 0..rows {
                for (g, d) in gbt.iter_mut().zip(&dz[r * cout..(r + 1) * cout]) {
                    *g += d;
                }
            }
        }

        let wt = &p[b.wt.clone()];
        let mut dhidden = vec![0.0; rows * cout];
        {
            let wt_start = b.wt.start;
            for t in 0..t_len {
                for k in 0..kt {
                    let Some(src_t) = (t + k).checked_sub(pad).filter(|&s| s < t_len) else {
                        continue;
                    };
                    for v in 0..v_len {
                        let dz_row = &dz[(t * v_len + v) * cout..(t * v_len + v + 1) * cout];
                        let h_row = (src_t * v_len + v) * cout;
                        for c in 0..cout {
                            let a = cache.hidden[h_row + c];
                            let w_off = (k * cout + c) * cout;
                            let w = &wt[w_off..w_off + cout];
                            let mut acc = 0.0;
                            for o in 0..cout {
                                acc += dz_row[o] * w[o];
                            }
                            dhidden[h_row + c] += acc;
                            if a != 0.0 {
                                let g = &mut grad[wt_start + w_off..wt_start + w_off + cout];
                                for o in 0..cout {
                                    g[o] += a * dz_row[o];
                                }
                            }
                        }
                    }
                }
            }
        }

        // through the inner ReLU
        let mut dspatial = dhidden;
        for (d, &s) in dspatial.iter_mut().zip(&cache.spatial) {
            if s <= 0.0 {
                *d = 0.0;
            }
        }

        let ws = &p[b.ws.clone()];
        let mut dmixed = vec![0.0; rows * cin];
        {
            let (ws_start, bs_range) = (b.ws.start, b.bs.clone());
            for r in 0..rows {
                let ds = &dspatial[r * cout..(r + 1) * cout];
                for (g, d) in grad[bs_range.clone()].iter_mut().zip(ds) {
                    *g += d;
                }
                for c in 0..cin {
                    let a = cache.mixed[r * cin + c];
                    let w = &ws[c * cout..(c + 1) * cout];
                    let mut acc = 0.0;
                    for o in 0..cout {
                        acc += ds[o] * w[o];
                    }
                    dmixed[r * cin + c] = acc;
                    if a != 0.0 {
                        let g = &mut grad[ws_start + c * cout..ws_start + (c + 1) * cout];
                        for o in 0..cout {
                            g[o] += a * ds[o];
                        }
                    }
                }
            }
        }

        if !want_input_grad {
            return None;
        }
        let mut dinput = if b.residual() { dz } else { vec![0.0; rows * cin] };
        for t in 0..t_len {
            for v in 0..v_len {
                let src = (t * v_len + v) * cin;
                for &(u, w) in &self.neighbours[v] {
                    let dst = (t * v_len + u) * cin;
                    for c in 0..cin {
                        dinput[dst + c] += w * dmixed[src + c];
                    }
                }
            }
        }
        Some(dinput)
    }

    fn to_input(&self, x: &Tensor3) -> Vec<f64> {
        let width = self.config.joints * self.config.in_channels;
        let InputNorm { mean, std } = &self.input_norm;
        x.as_slice()
            .iter()
            .enumerate()
            .map(|(i, &v)| (v as f64 - mean[i % width]) / std[i % width])
            .collect()
    }

    fn head_forward(&self, features: &[f64]) -> (Vec<f64>, Vec<f64>) {
        let c_last = self.layout.blocks.last().unwrap().cout;
        let rows = self.rows();
        let mut pooled = vec![0.0; c_last];
        for r in 0..rows {
            for (p, f) in pooled.iter_mut().zip(&features[r * c_last..(r + 1) * c_last]) {
                *p += f;
            }
        }
        for p in &mut pooled {
            *p /= rows as f64;
        }
        let k = self.config.outputs;
        let wf = &self.params[self.layout.wf.clone()];
        let mut logits = self.params[self.layout.bf.clone()].to_vec();
        for (c, &a) in pooled.iter().enumerate() {
            for (z, w) in logits.iter_mut().zip(&wf[c * k..(c + 1) * k]) {
                *z += a * w;
            }
        }
        (pooled, logits)
    }

    /// Run all blocks, keeping their caches.
    pub fn forward_cached(&self, x: &Tensor3) -> (Vec<f64>, Vec<BlockCache>, Vec<f64>) {
        let mut caches: Vec<BlockCache> = Vec::with_capacity(self.layout.blocks.len());
        let mut act = self.to_input(x);
        for b in &self.layout.blocks {
            let cache = self.block_forward(b, act);
            act = cache.output.clone();
            caches.push(cache);
        }
        let (pooled, logits) = self.head_forward(&act);
        (logits, caches, pooled)
    }

    fn backward(&self, caches: &[BlockCache], pooled: &[f64], dlogits: &[f64], grad: &mut [f64]) {
        let k = self.config.outputs;
        let c_last = pooled.len();
        let wf_start = self.layout.wf.start;
        let wf = &self.params[self.layout.wf.clone()];
        let mut dpooled = vec![0.0; c_last];
        for c in 0..c_last {
            for j in 0..k {
                grad[wf_start + c * k + j] += pooled[c] * dlogits[j];
                dpooled[c] += wf[c * k + j] * dlogits[j];
            }
        }
        for (g, d) in grad[self.layout.bf.clone()].iter_mut().zip(dlogits) {
            *g += d;
        }
        let rows = self.rows();
        let scale = 1.0 / rows as f64;
        let mut d_act: Vec<f64> = (0..rows * c_last).map(|i| dpooled[i % c_last] * scale).collect();
        for (i, b) in self.layout.blocks.iter().enumerate().rev() {
            match self.block_backward(b, &caches[i], d_act, grad, i > 0) {
                Some(d) => d_act = d,
                None => break,
            }
        }
    }

    /// Run the network and return the features pooled before the head.
    pub fn pooled_features(&self, x: &Tensor3) -> Vec<f64> {
        self.forward_cached(x).2
    }
}

impl Classifier for ReferenceStGcn {
    fn input_shape(&self) -> (usize, usize, usize) {
        (self.config.frames, self.config.joints, self.config.in_channels)
    }

    fn class_count(&self) -> usize {
        self.config.outputs
    }

    fn params(&self) -> &[f64] {
        &self.params
    }

    fn params_mut(&mut self) -> &mut [f64] {
        &mut self.params
    }

    fn mode(&self) -> Mode {
        self.mode
    }

    fn set_mode(&mut self, mode: Mode) {
        self.mode = mode;
    }

    fn logits_unchecked(&self, input: &Tensor3) -> Vec<f64> {
        self.forward_cached(input).0
    }

    fn accumulate_grad(
        &self,
        input: &Tensor3,
        dlogits: &mut dyn FnMut(&[f64]) -> Vec<f64>,
        grad: &mut [f64],
    ) {
        let (logits, caches, pooled) = self.forward_cached(input);
        let d = dlogits(&logits);
        self.backward(&caches, &pooled, &d, grad);
    }
}
