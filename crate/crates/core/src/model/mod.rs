//! The Rev2Net network: a 3D-conv encoder with a classifier head, two
//! training-only decoders (optical flow and reversed frames) and the two
//! gaussian heads whose samples are injected into the decoders.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::element::Element;
use crate::error::{Error, Result};
use crate::loss::{DdpMode, LossWeights};
use crate::nn::{conv3d, conv_transpose3d, dense, init_params, pool3d, ConvSpec, ParamSet, ParamSpec, PoolKind};
use crate::seed;
use crate::tensor::{ReduceOp, Tape, Tensor};

pub const ENCODER_BLOCKS: usize = 4;
/// Floor added to the softplus output of the sigma heads.
pub const SIGMA_FLOOR: f64 = 1e-4;

const OUTPUT_GAIN: f64 = 0.1;
const OUTPUT_LAYERS: [&str; 7] = [
    "flow-decoder/deconv2",
    "frame-decoder/background",
    "frame-decoder/deconv2",
    "gaussian-head-1/mu",
    "gaussian-head-1/sigma",
    "gaussian-head-2/mu",
    "gaussian-head-2/sigma",
];

/// Name prefixes of every parameter that exists only for training.
pub const TRAINING_ONLY_PREFIXES: [&str; 4] = ["flow-decoder/", "frame-decoder/", "gaussian-head-1/", "gaussian-head-2/"];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Rev2NetConfig {
    /// Input frames per clip.
    pub frames: usize,
    pub height: usize,
    pub width: usize,
    /// 3 for RGB clips, 2 for flow-stack input.
    pub input_channels: usize,
    /// Subtracted from every input value before the first convolution.
    pub input_offset: f64,
    pub encoder_widths: [usize; ENCODER_BLOCKS],
    /// 1-based encoder block whose output feeds both decoders.
    pub attach_block: usize,
    pub latent_dim: usize,
    pub num_classes: usize,
    /// Width of the first transposed conv in both decoders.
    pub decoder_width: usize,
    /// Width of the frame decoder's third transposed conv.
    pub frame_decoder_width: usize,
    pub flow_decoder: bool,
    pub frame_decoder: bool,
    pub weights: LossWeights,
    pub ddp_mode: DdpMode,
}

impl Default for Rev2NetConfig {
    fn default() -> Self {
        Self {
            frames: 8,
            height: 32,
            width: 32,
            input_channels: 3,
            input_offset: 0.5,
            encoder_widths: [16, 32, 32, 32],
            attach_block: 2,
            latent_dim: 8,
            num_classes: 6,
            decoder_width: 16,
            frame_decoder_width: 8,
            flow_decoder: true,
            frame_decoder: true,
            weights: LossWeights::default(),
            ddp_mode: DdpMode::Both,
        }
    }
}

impl Rev2NetConfig {
    /// Encoder and classifier only: no decoders, heads or auxiliary terms.
    pub fn plain_classifier(&self) -> Self {
        Self {
            flow_decoder: false,
            frame_decoder: false,
            weights: LossWeights {
                alpha: 0.0,
                beta: 0.0,
                lambda_flow: 0.0,
                lambda_im: 0.0,
            },
            ddp_mode: DdpMode::Off,
            ..self.clone()
        }
    }

    /// Both decoders present, so the discrepancy terms are defined.
    pub fn has_both_decoders(&self) -> bool {
        self.flow_decoder && self.frame_decoder
    }

    pub fn validate(&self) -> Result<()> {
        Plan::new(self).map(|_| ())
    }
}

#[derive(Debug, Clone)]
struct Block {
    name: String,
    conv: ConvSpec,
    pool: [usize; 3],
}

/// Layer geometry derived from a config; building it validates the config.
#[derive(Debug, Clone)]
struct Plan {
    blocks: Vec<Block>,
    /// Channels and `[T, H, W]` at the attach point.
    attach: (usize, [usize; 3]),
    trunk_channels: usize,
    dec1: ConvSpec,
    dec2: ConvSpec,
    frame3: ConvSpec,
    background: ConvSpec,
}

impl Plan {
    fn new(c: &Rev2NetConfig) -> Result<Self> {
        c.weights.validate()?;
        let positive = [
            ("model.frames", c.frames),
            ("model.height", c.height),
            ("model.width", c.width),
            ("model.input_channels", c.input_channels),
            ("model.latent_dim", c.latent_dim),
            ("model.decoder_width", c.decoder_width),
            ("model.frame_decoder_width", c.frame_decoder_width),
        ];
        for (field, v) in positive {
            if v == 0 {
                return Err(Error::config(field, "must be >= 1"));
            }
        }
        if !c.input_offset.is_finite() {
            return Err(Error::config("model.input_offset", "must be finite"));
        }
        if c.num_classes < 2 {
            return Err(Error::config("model.num_classes", "must be >= 2"));
        }
        if c.encoder_widths.contains(&0) {
            return Err(Error::config("model.encoder_widths", "every width must be >= 1"));
        }
        if !(1..=ENCODER_BLOCKS).contains(&c.attach_block) {
            return Err(Error::config("model.attach_block", format!("must be in 1..={ENCODER_BLOCKS}")));
        }
        let cfg = |e: Error| Error::config("model", e.to_string());

        let mut blocks = Vec::new();
        let mut extent = [c.frames, c.height, c.width];
        let mut channels = c.input_channels;
        let mut attach = (0, extent);
        for b in 0..ENCODER_BLOCKS {
            let conv = ConvSpec::new(channels, c.encoder_widths[b], [3; 3], [1; 3], [1; 3]).map_err(cfg)?;
            // Block 1 pools space only, blocks 2 and 3 pool everything, block
            // 4 keeps its resolution. Axes shorter than 2 are never pooled.
            let wanted = match b {
                0 => [1, 2, 2],
                1 | 2 => [2, 2, 2],
                _ => [1, 1, 1],
            };
            let mut pool = [1; 3];
            for i in 0..3 {
                if extent[i] >= wanted[i] {
                    pool[i] = wanted[i];
                }
                extent[i] /= pool[i];
            }
            channels = c.encoder_widths[b];
            blocks.push(Block { name: format!("encoder/block{}", b + 1), conv, pool });
            if b + 1 == c.attach_block {
                attach = (channels, extent);
            }
        }

        let placeholder = ConvSpec::new(1, 1, [1; 3], [1; 3], [0; 3]).expect("valid");
        let mut plan = Plan {
            blocks,
            attach,
            trunk_channels: channels,
            dec1: placeholder,
            dec2: placeholder,
            frame3: placeholder,
            background: placeholder,
        };
        if c.flow_decoder || c.frame_decoder {
            plan.plan_decoders(c)?;
        }
        Ok(plan)
    }

    fn plan_decoders(&mut self, c: &Rev2NetConfig) -> Result<()> {
        let (ac, [at, ah, aw]) = self.attach;
        let mismatch = |what: &str| {
            Error::config(
                "model.attach_block",
                format!(
                    "decoders cannot reach {what} from attach features [{at}, {ah}, {aw}] of a {}x{}x{} input",
                    c.frames, c.height, c.width
                ),
            )
        };
        // The second layer doubles space; the first covers the remaining
        // factor. Time is expanded by the second layer's temporal kernel.
        let factor = |full: usize, small: usize, what: &str| {
            if !full.is_multiple_of(small) || !(full / small).is_multiple_of(2) {
                Err(mismatch(what))
            } else {
                Ok(full / small / 2)
            }
        };
        let fh = factor(c.height, ah, "the frame height")?;
        let fw = factor(c.width, aw, "the frame width")?;
        if c.frames < 2 || at > c.frames - 1 {
            return Err(mismatch("T-1 flow steps"));
        }
        let kt = c.frames - at;
        let cfg = |e: Error| Error::config("model", e.to_string());
        self.dec1 = ConvSpec::new(ac + c.latent_dim, c.decoder_width, [1, fh, fw], [1, fh, fw], [0; 3]).map_err(cfg)?;
        self.dec2 = ConvSpec::new(c.decoder_width, 2, [kt, 2, 2], [1, 2, 2], [0; 3]).map_err(cfg)?;
        self.frame3 = ConvSpec::new(2, c.frame_decoder_width, [2, 1, 1], [1; 3], [0; 3]).map_err(cfg)?;
        self.background = ConvSpec::new(c.frame_decoder_width, 3, [3; 3], [1; 3], [1; 3]).map_err(cfg)?;

        let after2 = self
            .dec2
            .transposed_output(self.dec1.transposed_output([at, ah, aw]).map_err(cfg)?)
            .map_err(cfg)?;
        if after2 != [c.frames - 1, c.height, c.width] {
            return Err(mismatch("the flow target shape"));
        }
        let recon = self.frame3.transposed_output(after2).map_err(cfg)?;
        if recon != [c.frames, c.height, c.width] {
            return Err(mismatch("the frame target shape"));
        }
        Ok(())
    }

    fn specs(&self, c: &Rev2NetConfig) -> Vec<ParamSpec> {
        let conv = |name: String, s: &ConvSpec| ParamSpec {
            name,
            weight_dims: s.conv_weight_dims(),
            bias_len: s.out_channels,
            fan_in: s.in_channels * s.kernel_volume(),
            gain: 1.0,
        };
        let deconv = |name: String, s: &ConvSpec| {
            let stride: usize = s.stride.iter().product();
            ParamSpec {
                name,
                weight_dims: s.transposed_weight_dims(),
                bias_len: s.out_channels,
                fan_in: (s.in_channels * s.kernel_volume() / stride).max(1),
                gain: 1.0,
            }
        };
        let linear = |name: &str, d: usize, k: usize| ParamSpec {
            name: name.to_string(),
            weight_dims: vec![d, k],
            bias_len: k,
            fan_in: d,
            gain: 1.0,
        };
        let mut specs: Vec<ParamSpec> = self.blocks.iter().map(|b| conv(b.name.clone(), &b.conv)).collect();
        specs.push(linear("classifier", self.trunk_channels, c.num_classes));
        for (present, head, dec) in [(c.flow_decoder, 1, "flow-decoder"), (c.frame_decoder, 2, "frame-decoder")] {
            if !present {
                continue;
            }
            specs.push(linear(&format!("gaussian-head-{head}/mu"), self.trunk_channels, c.latent_dim));
            specs.push(linear(&format!("gaussian-head-{head}/sigma"), self.trunk_channels, c.latent_dim));
            specs.push(deconv(format!("{dec}/deconv1"), &self.dec1));
            specs.push(deconv(format!("{dec}/deconv2"), &self.dec2));
        }
        if c.frame_decoder {
            specs.push(deconv("frame-decoder/deconv3".into(), &self.frame3));
            specs.push(conv("frame-decoder/background".into(), &self.background));
        }
        // Output layers of the auxiliary branches start small so that their
        // initial losses do not swamp the classification signal.
        for s in &mut specs {
            if OUTPUT_LAYERS.contains(&s.name.as_str()) {
                s.gain = OUTPUT_GAIN;
            }
        }
        specs
    }
}

/// How the forward pass samples the gaussian latents.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ForwardOptions {
    /// Seed of the standard-normal noise `eps`.
    pub noise_seed: u64,
    /// Test hook: treat sigma as 0 so that `z = mu`.
    pub zero_sigma: bool,
}

impl ForwardOptions {
    pub fn seeded(noise_seed: u64) -> Self {
        Self {
            noise_seed,
            zero_sigma: false,
        }
    }
}

/// Everything the training losses consume.
#[derive(Debug, Clone)]
pub struct TrainForwardOutput<T: Element> {
    pub logits: Tensor<T>,
    /// Compared low-level features of the flow decoder (first-layer
    /// activation, second-layer output). Empty without that decoder.
    pub flow_features: Vec<Tensor<T>>,
    /// The frame decoder's features at the same layers.
    pub frame_features: Vec<Tensor<T>>,
    pub mu1: Option<Tensor<T>>,
    pub sigma1: Option<Tensor<T>>,
    pub mu2: Option<Tensor<T>>,
    pub sigma2: Option<Tensor<T>>,
    /// `[N, T-1, 2, H, W]`.
    pub flows: Option<Tensor<T>>,
    /// `[N, T, 3, H, W]`, compared against the reversed clip.
    pub recon: Option<Tensor<T>>,
}

/// `mu + sigma * eps`.
pub fn reparameterize<T: Element>(mu: &Tensor<T>, sigma: &Tensor<T>, eps: &Tensor<T>) -> Result<Tensor<T>> {
    mu.add(&sigma.mul(eps)?)
}

#[derive(Debug, Clone)]
pub struct Rev2Net<T: Element = f32> {
    config: Rev2NetConfig,
    plan: Plan,
    params: ParamSet<T>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Sidecar {
    kind: String,
    config: Rev2NetConfig,
}

const SIDECAR_KIND: &str = "rev2net-checkpoint";

/// Path of the JSON config stored next to a checkpoint.
pub fn sidecar_path(checkpoint: &Path) -> PathBuf {
    let mut s = checkpoint.as_os_str().to_owned();
    s.push(".config.json");
    PathBuf::from(s)
}

impl<T: Element> Rev2Net<T> {
    /// Builds a freshly initialized model. Every layer draws from a stream
    /// derived from `seed` and its name.
    pub fn build(config: &Rev2NetConfig, seed: u64) -> Result<Self> {
        let plan = Plan::new(config)?;
        let params = init_params(&plan.specs(config), seed::child_seed(seed, "init"))?;
        Ok(Self {
            config: config.clone(),
            plan,
            params,
        })
    }

    /// Wraps existing parameters after checking names and shapes.
    pub fn from_params(config: &Rev2NetConfig, params: ParamSet<T>) -> Result<Self> {
        let plan = Plan::new(config)?;
        let specs = plan.specs(config);
        if specs.len() != params.len() {
            return Err(Error::Data(format!(
                "config expects {} layers, parameters have {}",
                specs.len(),
                params.len()
            )));
        }
        for s in &specs {
            let p = params
                .get(&s.name)
                .map_err(|_| Error::Data(format!("missing parameters for layer {}", s.name)))?;
            if p.weights.dims() != s.weight_dims.as_slice() || p.bias.dims() != [s.bias_len] {
                return Err(Error::Data(format!("layer {} has the wrong shape", s.name)));
            }
        }
        Ok(Self {
            config: config.clone(),
            plan,
            params,
        })
    }

    pub fn config(&self) -> &Rev2NetConfig {
        &self.config
    }

    pub fn params(&self) -> &ParamSet<T> {
        &self.params
    }

    pub fn num_params(&self) -> usize {
        self.params.numel()
    }

    /// Replaces parameters, keeping names and shapes.
    pub fn set_params(&mut self, params: ParamSet<T>) -> Result<()> {
        *self = Self::from_params(&self.config, params)?;
        Ok(())
    }

    /// A copy whose parameters are leaves of `tape`.
    pub fn tracked(&self, tape: &Tape<T>) -> Self {
        Self {
            config: self.config.clone(),
            plan: self.plan.clone(),
            params: self.params.track(tape),
        }
    }

    pub fn cast<U: Element>(&self) -> Rev2Net<U> {
        Rev2Net {
            config: self.config.clone(),
            plan: self.plan.clone(),
            params: self.params.cast(),
        }
    }

    /// Input `[N, T, C, H, W]` as configured.
    pub fn check_input(&self, x: &Tensor<T>) -> Result<()> {
        let c = &self.config;
        let d = x.dims();
        if d.len() != 5 || d[1..] != [c.frames, c.input_channels, c.height, c.width] {
            return Err(Error::shape(format!(
                "model expects [N, {}, {}, {}, {}], got {d:?}",
                c.frames, c.input_channels, c.height, c.width
            )));
        }
        Ok(())
    }

    fn layer(&self, name: &str) -> (&Tensor<T>, &Tensor<T>) {
        let p = self.params.get(name).expect("layers are checked at construction");
        (&p.weights, &p.bias)
    }

    fn conv(&self, x: &Tensor<T>, name: &str, spec: &ConvSpec) -> Result<Tensor<T>> {
        let (w, b) = self.layer(name);
        conv3d(x, w, b, spec)
    }

    fn deconv(&self, x: &Tensor<T>, name: &str, spec: &ConvSpec) -> Result<Tensor<T>> {
        let (w, b) = self.layer(name);
        conv_transpose3d(x, w, b, spec)
    }

    fn linear(&self, x: &Tensor<T>, name: &str) -> Result<Tensor<T>> {
        let (w, b) = self.layer(name);
        dense(x, w, b)
    }

    /// Runs the encoder; returns attach features and pooled trunk features.
    fn encode(&self, x: &Tensor<T>) -> Result<(Tensor<T>, Tensor<T>)> {
        self.check_input(x)?;
        let mut h = x.transpose(&[0, 2, 1, 3, 4])?;
        if self.config.input_offset != 0.0 {
            h = h.add_scalar(-self.config.input_offset)?;
        }
        let mut attach = None;
        for (i, b) in self.plan.blocks.iter().enumerate() {
            h = self.conv(&h, &b.name, &b.conv)?.relu()?;
            if b.pool != [1, 1, 1] {
                h = pool3d(&h, PoolKind::Max, b.pool, b.pool)?;
            }
            if i + 1 == self.config.attach_block {
                attach = Some(h.clone());
            }
        }
        let pooled = h.reduce(ReduceOp::Mean, Some(&[2, 3, 4]))?;
        Ok((attach.expect("attach block exists"), pooled))
    }

    /// Classifier logits `[N, K]`. Touches only encoder and classifier
    /// parameters and draws no noise.
    pub fn forward_infer(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        let (_, pooled) = self.encode(x)?;
        self.linear(&pooled, "classifier")
    }

    fn head(&self, pooled: &Tensor<T>, k: usize) -> Result<(Tensor<T>, Tensor<T>)> {
        let mu = self.linear(pooled, &format!("gaussian-head-{k}/mu"))?;
        let sigma = self
            .linear(pooled, &format!("gaussian-head-{k}/sigma"))?
            .softplus()?
            .add_scalar(SIGMA_FLOOR)?;
        Ok((mu, sigma))
    }

    /// Tiles `z [N, d]` over the attach volume and concatenates on channels.
    fn inject(&self, attach: &Tensor<T>, z: &Tensor<T>) -> Result<Tensor<T>> {
        let a = attach.dims();
        let d = self.config.latent_dim;
        let tiled = z.reshape(&[a[0], d, 1, 1, 1])?.broadcast_to(&[a[0], d, a[2], a[3], a[4]])?;
        Tensor::concat(&[attach, &tiled], 1)
    }

    fn sample(
        &self,
        mu: &Tensor<T>,
        sigma: &Tensor<T>,
        opts: &ForwardOptions,
        stream: u64,
    ) -> Result<Tensor<T>> {
        if opts.zero_sigma {
            return Ok(mu.clone());
        }
        let mut rng = seed::rng(seed::indexed_seed(opts.noise_seed, "latent-noise", stream));
        let eps = Tensor::standard_normal(mu.dims(), &mut rng)?;
        reparameterize(mu, sigma, &eps)
    }

    /// Full training-time forward pass.
    pub fn forward_train(&self, x: &Tensor<T>, opts: &ForwardOptions) -> Result<TrainForwardOutput<T>> {
        let (attach, pooled) = self.encode(x)?;
        let logits = self.linear(&pooled, "classifier")?;
        let mut out = TrainForwardOutput {
            logits,
            flow_features: Vec::new(),
            frame_features: Vec::new(),
            mu1: None,
            sigma1: None,
            mu2: None,
            sigma2: None,
            flows: None,
            recon: None,
        };
        let p = &self.plan;
        if self.config.flow_decoder {
            let (mu, sigma) = self.head(&pooled, 1)?;
            let z = self.sample(&mu, &sigma, opts, 1)?;
            let h1 = self.deconv(&self.inject(&attach, &z)?, "flow-decoder/deconv1", &p.dec1)?.relu()?;
            let h2 = self.deconv(&h1, "flow-decoder/deconv2", &p.dec2)?;
            out.flows = Some(h2.transpose(&[0, 2, 1, 3, 4])?);
            out.flow_features = vec![h1, h2];
            out.mu1 = Some(mu);
            out.sigma1 = Some(sigma);
        }
        if self.config.frame_decoder {
            let (mu, sigma) = self.head(&pooled, 2)?;
            let z = self.sample(&mu, &sigma, opts, 2)?;
            let h1 = self.deconv(&self.inject(&attach, &z)?, "frame-decoder/deconv1", &p.dec1)?.relu()?;
            let h2 = self.deconv(&h1, "frame-decoder/deconv2", &p.dec2)?;
            let h3 = self.deconv(&h2.relu()?, "frame-decoder/deconv3", &p.frame3)?.relu()?;
            let frames = self.conv(&h3, "frame-decoder/background", &p.background)?;
            out.recon = Some(frames.transpose(&[0, 2, 1, 3, 4])?);
            out.frame_features = vec![h1, h2];
            out.mu2 = Some(mu);
            out.sigma2 = Some(sigma);
        }
        Ok(out)
    }

    /// The encoder and classifier only, with decoders disabled in the config.
    pub fn export_inference(&self) -> Result<Self> {
        let params = self
            .params
            .filtered(|name| !TRAINING_ONLY_PREFIXES.iter().any(|p| name.starts_with(p)));
        let config = Rev2NetConfig {
            flow_decoder: false,
            frame_decoder: false,
            ddp_mode: DdpMode::Off,
            ..self.config.clone()
        };
        Self::from_params(&config, params)
    }

    /// Writes parameters to `path` and the config to its JSON sidecar.
    pub fn save(&self, path: &Path) -> Result<()> {
        self.params.save(path)?;
        let side = sidecar_path(path);
        let doc = Sidecar {
            kind: SIDECAR_KIND.to_string(),
            config: self.config.clone(),
        };
        let text = serde_json::to_string_pretty(&doc)?;
        std::fs::write(&side, text).map_err(|e| Error::io(&side, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let side = sidecar_path(path);
        let text = std::fs::read_to_string(&side).map_err(|e| Error::io(&side, e))?;
        let doc: Sidecar =
            serde_json::from_str(&text).map_err(|e| Error::Data(format!("{}: {e}", side.display())))?;
        if doc.kind != SIDECAR_KIND {
            return Err(Error::Data(format!("{}: unexpected kind {}", side.display(), doc.kind)));
        }
        Self::from_params(&doc.config, ParamSet::load(path)?)
    }
}
