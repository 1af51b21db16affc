//! The speaker network: VGG front-end, pooling layer, fully connected head.
//!
//! ```text
//! log-Mel [N×80] ─ VGG (blocks × [conv3x3, conv3x3, maxpool2x2])
//!                ─ reshape to h[T×D], T = ⌊N/2^blocks⌋, D = (80/2^blocks)·C_last
//!                ─ pooling (statistical | self-attention | MHSA | DMHSA)
//!                ─ fc1 → BN → ReLU ─ fc2 → BN → ReLU ─ fc3 ─ fc4 → logits
//! ```
//!
//! The speaker embedding is the fc2 affine output, before its batchnorm and
//! ReLU. The reshape to `h` keeps time outermost; within one time step the
//! `D` values run channel by channel, frequency fastest (`d = c·F + f`).

pub mod pooling;

use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, Uniform};
use sha2::{Digest, Sha256};

pub use pooling::PoolingKind;

use crate::audio::{LogMelSpectrogram, N_MELS};
use crate::error::{Error, Result};
use crate::tensor::{BufferId, Checkpoint, Mode, ParamId, ParamStore, Real, Tape, Tensor, Var};

pub const DEFAULT_CHANNELS: [usize; 4] = [128, 256, 512, 1024];
pub const BN_EPS: f64 = 1e-5;
pub const BN_MOMENTUM: f64 = 0.1;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct VggConfig {
    /// Filters per block; the number of blocks is `channels.len()`.
    pub channels: Vec<usize>,
}

impl VggConfig {
    /// The default widths (128, 256, 512, 1024) truncated to `blocks`.
    pub fn with_blocks(blocks: usize) -> Result<Self> {
        let cfg = VggConfig {
            channels: DEFAULT_CHANNELS.iter().take(blocks).copied().collect(),
        };
        if blocks > DEFAULT_CHANNELS.len() {
            return Err(Error::Config(format!("blocks must be 3 or 4, got {blocks}")));
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn blocks(&self) -> usize {
        self.channels.len()
    }

    pub fn downsample(&self) -> usize {
        1 << self.blocks()
    }

    pub fn validate(&self) -> Result<()> {
        let b = self.blocks();
        if !(3..=4).contains(&b) {
            return Err(Error::Config(format!("blocks must be 3 or 4, got {b}")));
        }
        if self.channels[0] == 0 || self.channels.windows(2).any(|w| w[1] <= w[0]) {
            return Err(Error::Config(format!(
                "channels must be positive and strictly increasing, got {:?}",
                self.channels
            )));
        }
        if N_MELS % self.downsample() != 0 {
            return Err(Error::Config(format!(
                "{N_MELS} mel bands not divisible by 2^{b}"
            )));
        }
        Ok(())
    }

    /// Frequency bins left after the front-end.
    pub fn out_freq(&self) -> usize {
        N_MELS / self.downsample()
    }

    /// `D = (80 / 2^blocks) · C_last`.
    pub fn hidden_dim(&self) -> usize {
        self.out_freq() * self.channels[self.blocks() - 1]
    }

    /// `T = ⌊N / 2^blocks⌋`; fails when `N < 2^blocks`.
    pub fn time_steps(&self, n_frames: usize) -> Result<usize> {
        if n_frames < self.downsample() {
            return Err(Error::InputTooShort {
                needed: self.downsample(),
                got: n_frames,
                unit: "frames",
            });
        }
        Ok(n_frames / self.downsample())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelConfig {
    pub vgg: VggConfig,
    pub pooling: PoolingKind,
    pub fc1: usize,
    pub embed_dim: usize,
    pub fc3: usize,
    pub n_classes: usize,
}

impl ModelConfig {
    /// 4-block front-end, FC widths 2048/512/512.
    pub fn new(pooling: PoolingKind, n_classes: usize) -> Self {
        ModelConfig {
            vgg: VggConfig {
                channels: DEFAULT_CHANNELS.to_vec(),
            },
            pooling,
            fc1: 2048,
            embed_dim: 512,
            fc3: 512,
            n_classes,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.vgg.validate()?;
        self.pooling.validate(self.vgg.hidden_dim())?;
        if self.fc1 == 0 || self.embed_dim == 0 || self.fc3 == 0 {
            return Err(Error::Config("fully connected widths must be positive".into()));
        }
        if self.n_classes < 2 {
            return Err(Error::Config(format!(
                "need at least 2 classes, got {}",
                self.n_classes
            )));
        }
        Ok(())
    }

    pub fn hidden_dim(&self) -> usize {
        self.vgg.hidden_dim()
    }

    pub fn pooled_dim(&self) -> usize {
        self.pooling.output_dim(self.hidden_dim())
    }

    /// Flat `model.*` key-value form, the config block stored in checkpoints.
    pub fn to_kv(&self) -> BTreeMap<String, String> {
        let channels: Vec<String> = self.vgg.channels.iter().map(|c| c.to_string()).collect();
        let mut kv = BTreeMap::new();
        let mut put = |k: &str, v: String| {
            kv.insert(format!("model.{k}"), v);
        };
        put("blocks", self.vgg.blocks().to_string());
        put("channels", channels.join(","));
        put("pooling", self.pooling.name().to_string());
        put("heads", self.pooling.heads().to_string());
        put("head_drop", self.pooling.head_drop().to_string());
        put("fc1", self.fc1.to_string());
        put("embed_dim", self.embed_dim.to_string());
        put("fc3", self.fc3.to_string());
        put("n_classes", self.n_classes.to_string());
        kv
    }

    pub fn from_kv(kv: &BTreeMap<String, String>) -> Result<Self> {
        let get = |k: &str| {
            kv.get(&format!("model.{k}"))
                .ok_or_else(|| Error::Config(format!("missing key model.{k}")))
        };
        let num = |k: &str| -> Result<usize> {
            get(k)?
                .trim()
                .parse()
                .map_err(|_| Error::Config(format!("model.{k}: expected an integer")))
        };
        let channels = get("channels")?
            .split(',')
            .map(|c| c.trim().parse::<usize>())
            .collect::<std::result::Result<Vec<_>, _>>()
            .map_err(|_| Error::Config("model.channels: expected comma-separated integers".into()))?;
        if channels.len() != num("blocks")? {
            return Err(Error::Config("model.channels length differs from model.blocks".into()));
        }
        let heads = num("heads")?;
        let head_drop: f64 = get("head_drop")?
            .trim()
            .parse()
            .map_err(|_| Error::Config("model.head_drop: expected a number".into()))?;
        let pooling = parse_pooling(get("pooling")?, heads, head_drop)?;
        let cfg = ModelConfig {
            vgg: VggConfig { channels },
            pooling,
            fc1: num("fc1")?,
            embed_dim: num("embed_dim")?,
            fc3: num("fc3")?,
            n_classes: num("n_classes")?,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    /// SHA-256 over the canonical key-value form.
    pub fn hash(&self) -> String {
        let mut h = Sha256::new();
        for (k, v) in self.to_kv() {
            h.update(k.as_bytes());
            h.update(b"=");
            h.update(v.as_bytes());
            h.update(b"\n");
        }
        h.finalize().iter().map(|b| format!("{b:02x}")).collect()
    }
}

pub fn parse_pooling(name: &str, heads: usize, head_drop: f64) -> Result<PoolingKind> {
    let kind = match name.trim().to_ascii_lowercase().as_str() {
        "statistical" | "stats" => PoolingKind::Statistical,
        "self-attention" | "sa" => PoolingKind::SelfAttention,
        "mhsa" => PoolingKind::Mhsa { heads },
        "dmhsa" => PoolingKind::Dmhsa { heads, head_drop },
        other => return Err(Error::Config(format!("unknown pooling '{other}'"))),
    };
    Ok(kind)
}

#[derive(Debug, Clone, Copy)]
struct Dense {
    w: ParamId,
    b: ParamId,
}

#[derive(Debug, Clone, Copy)]
struct Bn {
    gamma: ParamId,
    beta: ParamId,
    mean: BufferId,
    var: BufferId,
}

#[derive(Debug, Clone, Copy)]
struct Attention {
    u: ParamId,
    u_prime: Option<ParamId>,
}

#[derive(Debug, Clone, Copy)]
struct Head {
    fc1: Dense,
    bn1: Bn,
    fc2: Dense,
    bn2: Bn,
    fc3: Dense,
    fc4: Dense,
}

/// Attention introspection for one utterance.
#[derive(Debug, Clone, Copy)]
pub struct PoolTrace {
    /// First-stage weights `[T×K]`.
    pub weights: Option<Var>,
    /// Second-stage head weights `[K×1]` (DMHSA only).
    pub head_weights: Option<Var>,
}

#[derive(Debug, Clone)]
pub struct ForwardOutput {
    /// `[B×n_classes]`.
    pub logits: Var,
    /// `[B×embed_dim]`, the fc2 affine output.
    pub embeddings: Var,
    pub traces: Vec<PoolTrace>,
}

/// Runtime input for the network: one `[1×N×80]` tensor per utterance.
pub fn spectrogram_tensor<T: Real>(spec: &LogMelSpectrogram) -> Tensor<T> {
    let data = spec.data().iter().map(|&v| T::c(v as f64)).collect();
    Tensor::new(&[1, spec.n_frames(), N_MELS], data).expect("spectrogram shape")
}

pub struct SpeakerNet<T> {
    config: ModelConfig,
    store: ParamStore<T>,
    convs: Vec<(ParamId, ParamId)>,
    attention: Option<Attention>,
    head: Head,
    mode: Mode,
}

impl<T: Real> SpeakerNet<T> {
    /// Builds a freshly initialized network in train mode. Conv and FC
    /// weights are He-normal with fan-in scaling, attention queries are
    /// uniform in ±1/√d_h, biases are zero and batchnorm starts as identity.
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let he = |fan_in: usize, n: usize, rng: &mut ChaCha8Rng| -> Vec<T> {
            let normal = Normal::new(0.0, (2.0 / fan_in as f64).sqrt()).expect("valid std");
            (0..n).map(|_| T::c(normal.sample(rng))).collect()
        };

        let mut convs = Vec::new();
        let mut c_in = 1;
        for (bi, &c_out) in config.vgg.channels.iter().enumerate() {
            for li in 0..2 {
                let prefix = format!("vgg.block{}.conv{}", bi + 1, li + 1);
                let w = Tensor::new(&[c_out, c_in, 3, 3], he(c_in * 9, c_out * c_in * 9, &mut rng))?;
                let w = store.add(format!("{prefix}.weight"), w)?;
                let b = store.add(format!("{prefix}.bias"), Tensor::zeros(&[c_out]))?;
                convs.push((w, b));
                c_in = c_out;
            }
        }

        let hidden = config.hidden_dim();
        let attention = match config.pooling {
            PoolingKind::Statistical => None,
            kind => {
                let heads = kind.heads();
                let d_h = hidden / heads;
                let bound = 1.0 / (d_h as f64).sqrt();
                let uniform = Uniform::new(-bound, bound).expect("valid range");
                let mut draw = |n: usize| -> Vec<T> { (0..n).map(|_| T::c(uniform.sample(&mut rng))).collect() };
                let u = store.add("pool.u", Tensor::new(&[heads, d_h], draw(heads * d_h))?)?;
                let u_prime = match kind {
                    PoolingKind::Dmhsa { .. } => Some(store.add("pool.u_prime", Tensor::new(&[d_h], draw(d_h))?)?),
                    _ => None,
                };
                Some(Attention { u, u_prime })
            }
        };

        let mut dense = |name: &str, fan_in: usize, fan_out: usize, rng: &mut ChaCha8Rng| -> Result<Dense> {
            let w = Tensor::new(&[fan_in, fan_out], he(fan_in, fan_in * fan_out, rng))?;
            Ok(Dense {
                w: store.add(format!("head.{name}.weight"), w)?,
                b: store.add(format!("head.{name}.bias"), Tensor::zeros(&[fan_out]))?,
            })
        };
        let fc1 = dense("fc1", config.pooled_dim(), config.fc1, &mut rng)?;
        let fc2 = dense("fc2", config.fc1, config.embed_dim, &mut rng)?;
        let fc3 = dense("fc3", config.embed_dim, config.fc3, &mut rng)?;
        let fc4 = dense("fc4", config.fc3, config.n_classes, &mut rng)?;
        let mut bn = |name: &str, f: usize| -> Result<Bn> {
            Ok(Bn {
                gamma: store.add(format!("head.{name}.gamma"), Tensor::full(&[f], T::one()))?,
                beta: store.add(format!("head.{name}.beta"), Tensor::zeros(&[f]))?,
                mean: store.add_buffer(format!("head.{name}.running_mean"), Tensor::zeros(&[f]))?,
                var: store.add_buffer(format!("head.{name}.running_var"), Tensor::full(&[f], T::one()))?,
            })
        };
        let bn1 = bn("bn1", config.fc1)?;
        let bn2 = bn("bn2", config.embed_dim)?;

        Ok(SpeakerNet {
            config,
            store,
            convs,
            attention,
            head: Head {
                fc1,
                bn1,
                fc2,
                bn2,
                fc3,
                fc4,
            },
            mode: Mode::Train,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn store(&self) -> &ParamStore<T> {
        &self.store
    }

    pub fn store_mut(&mut self) -> &mut ParamStore<T> {
        &mut self.store
    }

    pub fn mode(&self) -> Mode {
        self.mode
    }

    pub fn train(&mut self) {
        self.mode = Mode::Train;
    }

    pub fn eval(&mut self) {
        self.mode = Mode::Eval;
    }

    /// Front-end: `[1×N×80]` input to the hidden sequence `h[T×D]`.
    pub fn vgg_forward(&self, tape: &mut Tape<T>, input: Var) -> Result<Var> {
        let s = tape.shape(input).to_vec();
        if s.len() != 3 || s[0] != 1 || s[2] != N_MELS {
            return Err(Error::dim("vgg input", &s, &[1, 0, N_MELS]));
        }
        let t = self.config.vgg.time_steps(s[1])?;
        let mut x = input;
        for pair in self.convs.chunks(2) {
            for &(w, b) in pair {
                let (wv, bv) = (tape.param(&self.store, w), tape.param(&self.store, b));
                let y = tape.conv2d_same3x3(x, wv, bv)?;
                x = tape.relu(y);
            }
            x = tape.maxpool2x2(x)?;
        }
        // [C, T, F] -> [T, C, F] -> [T, C·F]
        let swapped = tape.swap_leading(x)?;
        tape.reshape(swapped, &[t, self.config.hidden_dim()])
    }

    /// Pools `h[T×D]` into `[1×P]`.
    pub fn pool<R: Rng + ?Sized>(&self, tape: &mut Tape<T>, h: Var, mode: Mode, rng: &mut R) -> Result<(Var, PoolTrace)> {
        let kind = self.config.pooling;
        let Some(att) = self.attention else {
            let p = pooling::statistical_pool(tape, h)?;
            return Ok((
                p,
                PoolTrace {
                    weights: None,
                    head_weights: None,
                },
            ));
        };
        let heads = kind.heads();
        let u = tape.param(&self.store, att.u);
        match kind {
            PoolingKind::Dmhsa { head_drop, .. } => {
                let w = pooling::attention_weights(tape, h, u, heads)?;
                let c = pooling::head_contexts(tape, h, w, heads)?;
                let keep = if mode == Mode::Train && head_drop > 0.0 {
                    Some(pooling::head_drop_mask(heads, head_drop, rng)?)
                } else {
                    None
                };
                let up = tape.param(&self.store, att.u_prime.expect("dmhsa has u_prime"));
                let (ctx, hw) = pooling::double_attention(tape, c, up, keep.as_deref())?;
                Ok((
                    ctx,
                    PoolTrace {
                        weights: Some(w),
                        head_weights: Some(hw),
                    },
                ))
            }
            _ => {
                let (ctx, w) = pooling::mhsa_pool(tape, h, u, heads)?;
                Ok((
                    ctx,
                    PoolTrace {
                        weights: Some(w),
                        head_weights: None,
                    },
                ))
            }
        }
    }

    fn dense(&self, tape: &mut Tape<T>, x: Var, d: Dense) -> Result<Var> {
        let (w, b) = (tape.param(&self.store, d.w), tape.param(&self.store, d.b));
        tape.linear(x, w, b)
    }

    fn batchnorm(&self, tape: &mut Tape<T>, x: Var, bn: Bn, mode: Mode, updates: &mut Vec<(Bn, Vec<T>, Vec<T>)>) -> Result<Var> {
        let (g, b) = (tape.param(&self.store, bn.gamma), tape.param(&self.store, bn.beta));
        match mode {
            Mode::Train => {
                let (y, stats) = tape.batchnorm_batch(x, g, b, BN_EPS)?;
                updates.push((bn, stats.mean, stats.unbiased_var));
                Ok(y)
            }
            Mode::Eval => tape.batchnorm_running(
                x,
                g,
                b,
                self.store.buffer(bn.mean).data(),
                self.store.buffer(bn.var).data(),
                BN_EPS,
            ),
        }
    }

    fn forward_impl<R: Rng + ?Sized>(
        &self,
        tape: &mut Tape<T>,
        batch: &[Tensor<T>],
        mode: Mode,
        rng: &mut R,
        updates: &mut Vec<(Bn, Vec<T>, Vec<T>)>,
    ) -> Result<ForwardOutput> {
        if batch.is_empty() {
            return Err(Error::Usage("empty batch".into()));
        }
        let mut pooled = Vec::with_capacity(batch.len());
        let mut traces = Vec::with_capacity(batch.len());
        for x in batch {
            let input = tape.input(x.clone());
            let h = self.vgg_forward(tape, input)?;
            let (p, trace) = self.pool(tape, h, mode, rng)?;
            pooled.push(p);
            traces.push(trace);
        }
        let x = tape.concat_rows(&pooled)?;
        let head = self.head;
        let z1 = self.dense(tape, x, head.fc1)?;
        let z1 = self.batchnorm(tape, z1, head.bn1, mode, updates)?;
        let a1 = tape.relu(z1);
        let embeddings = self.dense(tape, a1, head.fc2)?;
        let z2 = self.batchnorm(tape, embeddings, head.bn2, mode, updates)?;
        let a2 = tape.relu(z2);
        let z3 = self.dense(tape, a2, head.fc3)?;
        let logits = self.dense(tape, z3, head.fc4)?;
        Ok(ForwardOutput {
            logits,
            embeddings,
            traces,
        })
    }

    /// Forward pass over a batch of `[1×N×80]` inputs (lengths may differ).
    /// In train mode batchnorm uses batch statistics, updates its running
    /// estimates, and head drop is active.
    pub fn forward<R: Rng + ?Sized>(&mut self, tape: &mut Tape<T>, batch: &[Tensor<T>], rng: &mut R) -> Result<ForwardOutput> {
        let mut updates = Vec::new();
        let out = self.forward_impl(tape, batch, self.mode, rng, &mut updates)?;
        for (bn, mean, var) in updates {
            let m = T::c(BN_MOMENTUM);
            let keep = T::one() - m;
            for (r, v) in self.store.buffer_mut(bn.mean).data_mut().iter_mut().zip(mean) {
                *r = keep * *r + m * v;
            }
            for (r, v) in self.store.buffer_mut(bn.var).data_mut().iter_mut().zip(var) {
                *r = keep * *r + m * v;
            }
        }
        Ok(out)
    }

    /// Eval-mode forward through `&self`; safe to call from several threads
    /// on a shared network.
    pub fn forward_eval(&self, tape: &mut Tape<T>, batch: &[Tensor<T>]) -> Result<ForwardOutput> {
        if self.mode != Mode::Eval {
            return Err(Error::Usage("network is in train mode".into()));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        self.forward_impl(tape, batch, Mode::Eval, &mut rng, &mut Vec::new())
    }

    fn checked_input(spec: &LogMelSpectrogram) -> Result<Tensor<T>> {
        if !spec.cmn_applied() {
            return Err(Error::Usage("network input must be mean-normalized".into()));
        }
        Ok(spectrogram_tensor(spec))
    }

    /// Speaker embedding of a whole utterance (fc2 affine output).
    pub fn extract_embedding(&self, spec: &LogMelSpectrogram) -> Result<Vec<T>> {
        if self.mode != Mode::Eval {
            return Err(Error::Usage("embedding extraction needs eval mode".into()));
        }
        let mut tape = Tape::new();
        let out = self.forward_eval(&mut tape, &[Self::checked_input(spec)?])?;
        Ok(tape.data(out.embeddings).to_vec())
    }

    /// Logits and embedding of a whole utterance, eval mode.
    pub fn infer(&self, spec: &LogMelSpectrogram) -> Result<(Vec<T>, Vec<T>)> {
        let mut tape = Tape::new();
        let out = self.forward_eval(&mut tape, &[Self::checked_input(spec)?])?;
        Ok((tape.data(out.logits).to_vec(), tape.data(out.embeddings).to_vec()))
    }

    /// Attention weights for one utterance in eval mode: first-stage
    /// `[T×K]` (row-major) and, for DMHSA, the `K` head weights.
    pub fn attention_maps(&self, spec: &LogMelSpectrogram) -> Result<AttentionMaps<T>> {
        let mut tape = Tape::new();
        let out = self.forward_eval(&mut tape, &[Self::checked_input(spec)?])?;
        let trace = out.traces[0];
        let Some(w) = trace.weights else {
            return Err(Error::Usage("statistical pooling has no attention weights".into()));
        };
        Ok(AttentionMaps {
            time_steps: tape.shape(w)[0],
            heads: tape.shape(w)[1],
            weights: tape.data(w).to_vec(),
            head_weights: trace.head_weights.map(|v| tape.data(v).to_vec()),
        })
    }

    pub fn checkpoint_metadata(&self) -> BTreeMap<String, String> {
        let mut meta = self.config.to_kv();
        meta.insert("config_hash".into(), self.config.hash());
        meta
    }

    /// Rebuilds a network from a checkpoint, verifying the config hash.
    pub fn from_checkpoint(ckpt: &Checkpoint<T>) -> Result<Self> {
        let config = ModelConfig::from_kv(&ckpt.metadata)?;
        match ckpt.metadata.get("config_hash") {
            Some(h) if *h == config.hash() => {}
            _ => return Err(Error::Checkpoint("config hash does not match the stored config".into())),
        }
        let mut net = SpeakerNet::new(config, 0)?;
        net.store.load_values(&ckpt.store)?;
        net.eval();
        Ok(net)
    }

    /// Loads weights from a checkpoint whose config hash matches this network.
    pub fn load_checkpoint(&mut self, ckpt: &Checkpoint<T>) -> Result<()> {
        if ckpt.metadata.get("config_hash") != Some(&self.config.hash()) {
            return Err(Error::Checkpoint("checkpoint was saved for a different architecture".into()));
        }
        self.store.load_values(&ckpt.store)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AttentionMaps<T> {
    pub time_steps: usize,
    pub heads: usize,
    pub weights: Vec<T>,
    pub head_weights: Option<Vec<T>>,
}
