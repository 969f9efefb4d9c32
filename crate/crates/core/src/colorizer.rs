//! Per-scene colorizer: a frozen convolutional encoder with trainable
//! residual adapters, a trainable U-Net style decoder and a sigmoid head
//! predicting (a', b') from L'.

use std::io::Write as _;
use std::path::Path;

use log::{debug, info};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::augment::{sample_training_item, AugmentConfig, AugmentSample};
use crate::autodiff::{AdamState, CosineSchedule, Graph, Tensor, Var};
use crate::colorspace::Plane;
use crate::error::{Error, Result};
use crate::losses;

const LEAKY_SLOPE: f64 = 0.2;
const NORM_EPS: f64 = 1e-5;
pub const MIN_INPUT: usize = 32;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct NetConfig {
    /// Output channels of each stride-2 encoder stage.
    pub encoder_widths: Vec<usize>,
    /// Output channels of each decoder stage (same count as the encoder).
    pub decoder_widths: Vec<usize>,
    /// Adapter bottleneck divisor.
    pub adapter_reduction: usize,
    /// Seed of the (frozen) encoder and the trainable initialization.
    pub seed: u64,
}

impl Default for NetConfig {
    fn default() -> Self {
        Self {
            encoder_widths: vec![32, 64, 128, 256],
            decoder_widths: vec![64, 32, 32, 16],
            adapter_reduction: 4,
            seed: 0,
        }
    }
}

impl NetConfig {
    pub fn validate(&self) -> Result<()> {
        if self.encoder_widths.is_empty() || self.encoder_widths.len() != self.decoder_widths.len() {
            return Err(Error::invalid("encoder and decoder need the same, non-zero number of stages"));
        }
        if self.encoder_widths.iter().chain(&self.decoder_widths).any(|&w| w == 0) {
            return Err(Error::invalid("layer widths must be positive"));
        }
        if self.adapter_reduction == 0 {
            return Err(Error::invalid("adapter reduction must be positive"));
        }
        Ok(())
    }

    /// Inputs are padded to a multiple of this.
    pub fn alignment(&self) -> usize {
        1 << self.encoder_widths.len()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
enum Init {
    He { fan_in: usize },
    Zero,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParamInfo {
    pub name: String,
    pub shape: Vec<usize>,
    pub frozen: bool,
}

/// Parameter layout in a fixed order, with the initializer of each entry.
fn layout(cfg: &NetConfig) -> Vec<(ParamInfo, Init)> {
    let mut out = Vec::new();
    let mut add = |name: String, shape: Vec<usize>, frozen: bool, init: Init| {
        out.push((ParamInfo { name, shape, frozen }, init));
    };
    let mut c_in = 1;
    for (s, &c) in cfg.encoder_widths.iter().enumerate() {
        add(format!("enc{s}.conv0.w"), vec![c, c_in, 3, 3], true, Init::He { fan_in: c_in * 9 });
        add(format!("enc{s}.conv0.b"), vec![c], true, Init::Zero);
        add(format!("enc{s}.conv1.w"), vec![c, c, 3, 3], true, Init::He { fan_in: c * 9 });
        add(format!("enc{s}.conv1.b"), vec![c], true, Init::Zero);
        let r = (c / cfg.adapter_reduction).max(1);
        add(format!("adapter{s}.down.w"), vec![r, c, 1, 1], false, Init::He { fan_in: c });
        add(format!("adapter{s}.dw.w"), vec![r, 1, 3, 3], false, Init::He { fan_in: 9 });
        add(format!("adapter{s}.up.w"), vec![c, r, 1, 1], false, Init::Zero);
        add(format!("adapter{s}.gate.w"), vec![c, c, 1, 1], false, Init::He { fan_in: c });
        add(format!("adapter{s}.gate.b"), vec![c], false, Init::Zero);
        c_in = c;
    }
    let e = cfg.encoder_widths.len();
    let mut prev = cfg.encoder_widths[e - 1];
    for (d, &c) in cfg.decoder_widths.iter().enumerate() {
        let skip = if d + 1 < e { cfg.encoder_widths[e - 2 - d] } else { 1 };
        let cin = prev + skip;
        add(format!("dec{d}.conv0.w"), vec![c, cin, 3, 3], false, Init::He { fan_in: cin * 9 });
        add(format!("dec{d}.conv0.b"), vec![c], false, Init::Zero);
        add(format!("dec{d}.conv1.w"), vec![c, c, 3, 3], false, Init::He { fan_in: c * 9 });
        add(format!("dec{d}.conv1.b"), vec![c], false, Init::Zero);
        prev = c;
    }
    add("head.w".into(), vec![2, prev, 1, 1], false, Init::He { fan_in: prev });
    add("head.b".into(), vec![2], false, Init::Zero);
    out
}

fn standard_normal(rng: &mut ChaCha8Rng) -> f64 {
    // Box-Muller
    let u1: f64 = 1.0 - rng.gen::<f64>();
    let u2: f64 = rng.gen();
    (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos()
}

#[derive(Debug, Clone, PartialEq)]
pub struct ColorizerNet {
    config: NetConfig,
    info: Vec<ParamInfo>,
    params: Vec<Tensor>,
}

/// Graph handles of one forward pass.
pub struct Forward {
    pub graph: Graph,
    pub params: Vec<Var>,
    /// `[1, 2, H, W]` prediction in [0, 1].
    pub output: Var,
}

impl ColorizerNet {
    pub fn new(config: NetConfig) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let mut info = Vec::new();
        let mut params = Vec::new();
        for (p, init) in layout(&config) {
            let n: usize = p.shape.iter().product();
            let data = match init {
                Init::Zero => vec![0.0; n],
                Init::He { fan_in } => {
                    let std = (2.0 / fan_in as f64).sqrt();
                    (0..n).map(|_| std * standard_normal(&mut rng)).collect()
                }
            };
            params.push(Tensor::new(p.shape.clone(), data)?);
            info.push(p);
        }
        Ok(Self { config, info, params })
    }

    pub fn config(&self) -> &NetConfig {
        &self.config
    }

    pub fn param_info(&self) -> &[ParamInfo] {
        &self.info
    }

    pub fn params(&self) -> &[Tensor] {
        &self.params
    }

    pub fn param(&self, name: &str) -> Option<&Tensor> {
        self.info.iter().position(|p| p.name == name).map(|i| &self.params[i])
    }

    pub fn param_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.info.iter().position(|p| p.name == name).map(|i| &mut self.params[i])
    }

    fn trainable_indices(&self) -> Vec<usize> {
        (0..self.info.len()).filter(|&i| !self.info[i].frozen).collect()
    }

    /// SHA-256 over the frozen encoder parameters.
    pub fn encoder_checksum(&self) -> String {
        let mut h = Sha256::new();
        for (p, t) in self.info.iter().zip(&self.params) {
            if p.frozen {
                h.update(p.name.as_bytes());
                for v in t.data() {
                    h.update(v.to_le_bytes());
                }
            }
        }
        hex(&h.finalize())
    }

    /// Copies the frozen encoder weights of `other` (same architecture).
    pub fn import_encoder(&mut self, other: &ColorizerNet) -> Result<()> {
        if other.info != self.info {
            return Err(Error::invalid("encoder weights come from a network with a different layout"));
        }
        for i in 0..self.info.len() {
            if self.info[i].frozen {
                self.params[i] = other.params[i].clone();
            }
        }
        Ok(())
    }

    /// Builds the forward graph for a `[1, 1, H, W]` luminance input.
    pub fn forward(&self, input: &Tensor) -> Result<Forward> {
        self.forward_impl(input, true)
    }

    /// Forward pass that bypasses the adapters.
    pub fn forward_without_adapters(&self, input: &Tensor) -> Result<Forward> {
        self.forward_impl(input, false)
    }

    fn forward_impl(&self, input: &Tensor, use_adapters: bool) -> Result<Forward> {
        let shape = input.shape();
        if shape.len() != 4 || shape[0] != 1 || shape[1] != 1 {
            return Err(Error::ShapeMismatch {
                op: "colorizer forward",
                lhs: vec![1, 1, 0, 0],
                rhs: shape.to_vec(),
            });
        }
        let (h, w) = (shape[2], shape[3]);
        if h < MIN_INPUT || w < MIN_INPUT {
            return Err(Error::invalid(format!("colorizer input must be at least {MIN_INPUT}x{MIN_INPUT}, got {w}x{h}")));
        }
        let align = self.config.alignment();
        let (ph, pw) = (h.div_ceil(align) * align, w.div_ceil(align) * align);
        let padded = pad_replicate(input, ph, pw);

        let mut g = Graph::new();
        let vars: Vec<Var> = self
            .info
            .iter()
            .zip(&self.params)
            .map(|(p, t)| g.leaf(t.clone(), !p.frozen))
            .collect();
        let by_name = |name: &str| vars[self.info.iter().position(|p| p.name == name).expect("known parameter")];

        let x0 = g.leaf(padded, false);
        let mut x = x0;
        let mut skips = Vec::new();
        for s in 0..self.config.encoder_widths.len() {
            x = g.conv2d(x, by_name(&format!("enc{s}.conv0.w")), 2, 1)?;
            x = g.add_channel_bias(x, by_name(&format!("enc{s}.conv0.b")))?;
            x = g.leaky_relu(x, LEAKY_SLOPE)?;
            x = g.conv2d(x, by_name(&format!("enc{s}.conv1.w")), 1, 1)?;
            x = g.add_channel_bias(x, by_name(&format!("enc{s}.conv1.b")))?;
            x = g.leaky_relu(x, LEAKY_SLOPE)?;
            if use_adapters {
                let r = g.pointwise_conv2d(x, by_name(&format!("adapter{s}.down.w")))?;
                let r = g.depthwise_conv2d(r, by_name(&format!("adapter{s}.dw.w")), 1, 1)?;
                let r = g.relu(r)?;
                let r = g.pointwise_conv2d(r, by_name(&format!("adapter{s}.up.w")))?;
                let pooled = g.global_avg_pool(x)?;
                let gate = g.pointwise_conv2d(pooled, by_name(&format!("adapter{s}.gate.w")))?;
                let gate = g.add_channel_bias(gate, by_name(&format!("adapter{s}.gate.b")))?;
                let gate = g.sigmoid(gate)?;
                let r = g.mul_channel(r, gate)?;
                x = g.add(x, r)?;
            }
            skips.push(x);
        }
        skips.pop();
        for d in 0..self.config.decoder_widths.len() {
            let s = g.shape(x).to_vec();
            x = g.bilinear_resize(x, s[2] * 2, s[3] * 2)?;
            let skip = skips.pop().unwrap_or(x0);
            x = g.concat_channels(&[x, skip])?;
            x = g.conv2d(x, by_name(&format!("dec{d}.conv0.w")), 1, 1)?;
            x = g.add_channel_bias(x, by_name(&format!("dec{d}.conv0.b")))?;
            x = g.instance_norm(x, NORM_EPS)?;
            x = g.leaky_relu(x, LEAKY_SLOPE)?;
            x = g.conv2d(x, by_name(&format!("dec{d}.conv1.w")), 1, 1)?;
            x = g.add_channel_bias(x, by_name(&format!("dec{d}.conv1.b")))?;
            x = g.leaky_relu(x, LEAKY_SLOPE)?;
        }
        x = g.pointwise_conv2d(x, by_name("head.w"))?;
        x = g.add_channel_bias(x, by_name("head.b"))?;
        x = g.sigmoid(x)?;
        let output = if (ph, pw) != (h, w) { g.crop(x, h, w)? } else { x };
        Ok(Forward {
            graph: g,
            params: vars,
            output,
        })
    }

    /// Predicted (a', b') planes for a full L' image.
    pub fn predict_ab(&self, l: &Plane) -> Result<(Plane, Plane)> {
        let input = Tensor::new(vec![1, 1, l.height, l.width], l.data.clone())?;
        let f = self.forward(&input)?;
        let out = f.graph.value(f.output).data();
        let n = l.width * l.height;
        Ok((
            Plane::new(l.width, l.height, out[..n].to_vec())?,
            Plane::new(l.width, l.height, out[n..].to_vec())?,
        ))
    }
}

fn pad_replicate(input: &Tensor, ph: usize, pw: usize) -> Tensor {
    let (h, w) = (input.shape()[2], input.shape()[3]);
    if (h, w) == (ph, pw) {
        return input.clone();
    }
    let x = input.data();
    let data = (0..ph * pw).map(|i| x[(i / pw).min(h - 1) * w + (i % pw).min(w - 1)]).collect();
    Tensor::new(vec![1, 1, ph, pw], data).expect("padded shape")
}

fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

/// Mean absolute error between predicted and target chroma planes.
pub fn colorizer_loss(pred: [&Plane; 2], target: [&Plane; 2]) -> Result<losses::LossGrad> {
    losses::l1(&pred, &target)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ColorizerTrainConfig {
    pub iterations: usize,
    pub batch_size: usize,
    /// Square training crop side.
    pub crop: usize,
    pub lr_start: f64,
    pub lr_end: f64,
    pub seed: u64,
    /// Window of the smoothed loss reported at the end.
    pub smoothing_window: usize,
}

impl Default for ColorizerTrainConfig {
    fn default() -> Self {
        Self {
            iterations: 4000,
            batch_size: 1,
            crop: 96,
            lr_start: 1e-4,
            lr_end: 1e-6,
            seed: 0,
            smoothing_window: 50,
        }
    }
}

impl ColorizerTrainConfig {
    /// Full-resolution preset.
    pub fn full_scale() -> Self {
        Self {
            crop: 320,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.iterations == 0 {
            return Err(Error::invalid("colorizer iterations must be at least 1"));
        }
        if self.batch_size != 1 {
            return Err(Error::invalid("only batch size 1 is supported"));
        }
        if self.crop < MIN_INPUT {
            return Err(Error::invalid(format!("training crop must be at least {MIN_INPUT}")));
        }
        if !(self.lr_start > 0.0 && self.lr_end > 0.0) {
            return Err(Error::invalid("learning rates must be positive"));
        }
        if self.smoothing_window == 0 {
            return Err(Error::invalid("smoothing window must be at least 1"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrainRecord {
    pub step: usize,
    pub lr: f64,
    pub loss: f64,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct TrainLog {
    pub records: Vec<TrainRecord>,
}

impl TrainLog {
    /// Mean loss over the last `window` steps.
    pub fn smoothed(&self, window: usize) -> Option<f64> {
        let n = self.records.len().min(window);
        (n > 0).then(|| self.records[self.records.len() - n..].iter().map(|r| r.loss).sum::<f64>() / n as f64)
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from("step,lr,loss\n");
        for r in &self.records {
            s += &format!("{},{:.9e},{:.9e}\n", r.step, r.lr, r.loss);
        }
        s
    }
}

fn sample_tensors(s: &AugmentSample) -> Result<(Tensor, Tensor)> {
    let (h, w) = (s.height(), s.width());
    let input = Tensor::new(vec![1, 1, h, w], s.l.data.clone())?;
    let mut t = s.a.data.clone();
    t.extend_from_slice(&s.b.data);
    Ok((input, Tensor::new(vec![1, 2, h, w], t)?))
}

/// One loss evaluation with gradients of the trainable parameters.
pub fn loss_and_grads(net: &ColorizerNet, sample: &AugmentSample) -> Result<(f64, Vec<Tensor>)> {
    let (input, target) = sample_tensors(sample)?;
    let mut f = net.forward(&input)?;
    let t = f.graph.leaf(target, false);
    let loss = f.graph.l1_loss(f.output, t)?;
    f.graph.backward(loss)?;
    let value = f.graph.value(loss).item();
    let grads = net
        .trainable_indices()
        .into_iter()
        .map(|i| f.graph.grad(f.params[i]).unwrap_or_else(|| Tensor::zeros(net.params[i].shape())))
        .collect();
    Ok((value, grads))
}

/// Fine-tunes adapters, decoder and head on draws from `pool`. On a
/// non-finite loss the parameters of the last good step are kept and an
/// error is returned.
pub fn train(
    net: &mut ColorizerNet,
    pool: &[AugmentSample],
    cfg: &ColorizerTrainConfig,
    augment: &AugmentConfig,
) -> Result<TrainLog> {
    cfg.validate()?;
    augment.validate()?;
    if pool.is_empty() {
        return Err(Error::invalid("colorizer training pool is empty"));
    }
    let before = net.encoder_checksum();
    let trainable = net.trainable_indices();
    let mut adam = AdamState::new(&trainable.iter().map(|&i| net.params[i].numel()).collect::<Vec<_>>());
    let schedule = CosineSchedule {
        lr_start: cfg.lr_start,
        lr_end: cfg.lr_end,
        total_steps: cfg.iterations,
    };
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut log = TrainLog::default();
    for step in 0..cfg.iterations {
        let sample = sample_training_item(pool, augment, Some(cfg.crop), &mut rng)?;
        let lr = schedule.lr(step)?;
        let (loss, grads) = match loss_and_grads(net, &sample) {
            Ok(v) => v,
            Err(Error::NonFinite { .. }) => return Err(Error::Diverged { step, loss: f64::NAN }),
            Err(e) => return Err(e),
        };
        if !loss.is_finite() || grads.iter().any(|g| g.data().iter().any(|v| !v.is_finite())) {
            return Err(Error::Diverged { step, loss });
        }
        let mut ps: Vec<&mut [f64]> = net
            .params
            .iter_mut()
            .zip(&net.info)
            .filter(|(_, p)| !p.frozen)
            .map(|(t, _)| t.data_mut())
            .collect();
        let gs: Vec<&[f64]> = grads.iter().map(|g| g.data()).collect();
        adam.update(&mut ps, &gs, lr)?;
        log.records.push(TrainRecord { step, lr, loss });
        if step % 100 == 0 {
            debug!("colorizer step {step}: loss {loss:.5} lr {lr:.2e}");
        }
    }
    if net.encoder_checksum() != before {
        return Err(Error::state("frozen encoder parameters changed during training"));
    }
    if let Some(s) = log.smoothed(cfg.smoothing_window) {
        info!("colorizer trained {} steps, smoothed loss {s:.5}", cfg.iterations);
    }
    Ok(log)
}

const MAGIC: &[u8; 8] = b"C3DCKPT\0";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Serialize, Deserialize)]
struct CheckpointHeader {
    config: NetConfig,
    params: Vec<ParamInfo>,
    encoder_checksum: String,
    payload_sha256: String,
}

impl ColorizerNet {
    /// Binary checkpoint: magic, version (u32 LE), header length (u64 LE),
    /// JSON header, then every parameter as f64 LE in layout order.
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut payload = Vec::new();
        for t in &self.params {
            for v in t.data() {
                payload.extend_from_slice(&v.to_le_bytes());
            }
        }
        let header = CheckpointHeader {
            config: self.config.clone(),
            params: self.info.clone(),
            encoder_checksum: self.encoder_checksum(),
            payload_sha256: hex(&Sha256::digest(&payload)),
        };
        let json = serde_json::to_vec(&header).expect("header serializes");
        let mut out = Vec::with_capacity(20 + json.len() + payload.len());
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
        out.extend_from_slice(&(json.len() as u64).to_le_bytes());
        out.extend_from_slice(&json);
        out.extend_from_slice(&payload);
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let corrupt = |m: &str| Error::invalid(format!("colorizer checkpoint: {m}"));
        if bytes.len() < 20 || &bytes[..8] != MAGIC {
            return Err(corrupt("bad magic"));
        }
        let version = u32::from_le_bytes(bytes[8..12].try_into().expect("4 bytes"));
        if version != CHECKPOINT_VERSION {
            return Err(corrupt(&format!("unsupported version {version}")));
        }
        let hlen = u64::from_le_bytes(bytes[12..20].try_into().expect("8 bytes")) as usize;
        let body = &bytes[20..];
        if body.len() < hlen {
            return Err(corrupt("truncated header"));
        }
        let header: CheckpointHeader =
            serde_json::from_slice(&body[..hlen]).map_err(|e| corrupt(&format!("header: {e}")))?;
        let payload = &body[hlen..];
        if hex(&Sha256::digest(payload)) != header.payload_sha256 {
            return Err(corrupt("payload checksum mismatch"));
        }
        let mut net = ColorizerNet::new(header.config)?;
        if net.info != header.params {
            return Err(corrupt("parameter layout does not match its configuration"));
        }
        let total: usize = net.params.iter().map(Tensor::numel).sum();
        if payload.len() != total * 8 {
            return Err(corrupt("payload size mismatch"));
        }
        let mut chunks = payload.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")));
        for t in &mut net.params {
            t.data_mut().iter_mut().for_each(|v| *v = chunks.next().expect("sized payload"));
        }
        if net.encoder_checksum() != header.encoder_checksum {
            return Err(corrupt("encoder checksum mismatch"));
        }
        Ok(net)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        f.write_all(&self.to_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes).map_err(|e| Error::invalid(format!("{}: {e}", path.display())))
    }
}

#[cfg(test)]
mod tests;
