//! The triple-network segmentation model: a main network M on the raw
//! image, an L network on the low-frequency fusion image and an H network
//! on the high-frequency fusion image, wired together with asymmetric
//! feature-fusion modules (L with M at the two deepest encoder stages,
//! H with M at the two shallowest).

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::data::normalize_per_channel;
use crate::error::{Error, Result};
use crate::tensor::Tensor;
use crate::wavelet::{complementary_fuse, frequency_split, WaveletBasis};

pub const DEPTH: usize = 4;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum InputMode {
    /// M gets the raw image, L and H get the complementary fusion images.
    Fusion,
    /// All three networks get the raw image.
    RawAll,
    /// Only the L network gets its fusion image; H gets the raw image.
    LfOnly,
    /// Only the H network gets its fusion image; L gets the raw image.
    HfOnly,
}

impl InputMode {
    pub fn by_name(name: &str) -> Result<InputMode> {
        match name {
            "fusion" => Ok(InputMode::Fusion),
            "raw-all" => Ok(InputMode::RawAll),
            "lf-only" => Ok(InputMode::LfOnly),
            "hf-only" => Ok(InputMode::HfOnly),
            other => Err(Error::Config(format!("unknown input mode {:?}", other))),
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            InputMode::Fusion => "fusion",
            InputMode::RawAll => "raw-all",
            InputMode::LfOnly => "lf-only",
            InputMode::HfOnly => "hf-only",
        }
    }
}

#[derive(Debug, Clone)]
pub struct UNetSpec {
    pub in_channels: usize,
    pub num_classes: usize,
    pub encoder_channels: Vec<usize>,
}

impl UNetSpec {
    pub fn new(in_channels: usize, num_classes: usize, encoder_channels: Vec<usize>) -> Result<Self> {
        if encoder_channels.len() != DEPTH {
            return Err(Error::arg(
                "UNetSpec",
                format!("need {} encoder widths, got {}", DEPTH, encoder_channels.len()),
            ));
        }
        if !encoder_channels.windows(2).all(|w| w[0] < w[1]) {
            return Err(Error::arg(
                "UNetSpec",
                "encoder widths must be strictly increasing",
            ));
        }
        if num_classes < 2 {
            return Err(Error::arg("UNetSpec", "need at least 2 classes"));
        }
        Ok(UNetSpec {
            in_channels,
            num_classes,
            encoder_channels,
        })
    }
}

impl Default for UNetSpec {
    fn default() -> Self {
        UNetSpec {
            in_channels: 1,
            num_classes: 2,
            encoder_channels: vec![32, 64, 128, 256],
        }
    }
}

pub struct Conv2d {
    pub weight: Tensor,
    pub bias: Tensor,
    padding: usize,
}

impl Conv2d {
    fn new(rng: &mut ChaCha8Rng, in_c: usize, out_c: usize, k: usize) -> Conv2d {
        let fan_in = (in_c * k * k) as f32;
        let bound = (6.0 / fan_in).sqrt();
        let w: Vec<f32> = (0..out_c * in_c * k * k)
            .map(|_| rng.gen_range(-bound..bound))
            .collect();
        Conv2d {
            weight: Tensor::param(&[out_c, in_c, k, k], w),
            bias: Tensor::param(&[out_c], vec![0.0; out_c]),
            padding: k / 2,
        }
    }

    fn forward(&self, x: &Tensor) -> Result<Tensor> {
        x.conv2d(&self.weight, &self.bias, 1, self.padding)
    }

    fn collect(&self, prefix: &str, out: &mut Vec<(String, Tensor)>) {
        out.push((format!("{}.weight", prefix), self.weight.clone()));
        out.push((format!("{}.bias", prefix), self.bias.clone()));
    }
}

pub struct BatchNorm2d {
    pub gamma: Tensor,
    pub beta: Tensor,
    pub running_mean: std::rc::Rc<std::cell::RefCell<Vec<f32>>>,
    pub running_var: std::rc::Rc<std::cell::RefCell<Vec<f32>>>,
}

impl BatchNorm2d {
    fn new(c: usize) -> BatchNorm2d {
        BatchNorm2d {
            gamma: Tensor::param(&[c], vec![1.0; c]),
            beta: Tensor::param(&[c], vec![0.0; c]),
            running_mean: std::rc::Rc::new(std::cell::RefCell::new(vec![0.0; c])),
            running_var: std::rc::Rc::new(std::cell::RefCell::new(vec![1.0; c])),
        }
    }

    fn forward(&self, x: &Tensor, training: bool) -> Result<Tensor> {
        x.batchnorm2d(
            &self.gamma,
            &self.beta,
            &self.running_mean,
            &self.running_var,
            training,
            0.1,
            1e-5,
        )
    }

    fn collect(&self, prefix: &str, out: &mut Vec<(String, Tensor)>) {
        out.push((format!("{}.gamma", prefix), self.gamma.clone()));
        out.push((format!("{}.beta", prefix), self.beta.clone()));
    }

    fn collect_buffers(&self, prefix: &str, out: &mut Vec<(String, BufferRef)>) {
        out.push((format!("{}.running_mean", prefix), self.running_mean.clone()));
        out.push((format!("{}.running_var", prefix), self.running_var.clone()));
    }
}

pub type BufferRef = std::rc::Rc<std::cell::RefCell<Vec<f32>>>;

/// Two rounds of conv3x3, batchnorm, relu.
pub struct ConvBlock {
    conv1: Conv2d,
    bn1: BatchNorm2d,
    conv2: Conv2d,
    bn2: BatchNorm2d,
}

impl ConvBlock {
    fn new(rng: &mut ChaCha8Rng, in_c: usize, out_c: usize) -> ConvBlock {
        ConvBlock {
            conv1: Conv2d::new(rng, in_c, out_c, 3),
            bn1: BatchNorm2d::new(out_c),
            conv2: Conv2d::new(rng, out_c, out_c, 3),
            bn2: BatchNorm2d::new(out_c),
        }
    }

    fn forward(&self, x: &Tensor, training: bool) -> Result<Tensor> {
        let x = self.bn1.forward(&self.conv1.forward(x)?, training)?.relu();
        Ok(self.bn2.forward(&self.conv2.forward(&x)?, training)?.relu())
    }

    fn collect(&self, prefix: &str, out: &mut Vec<(String, Tensor)>) {
        self.conv1.collect(&format!("{}.conv1", prefix), out);
        self.bn1.collect(&format!("{}.bn1", prefix), out);
        self.conv2.collect(&format!("{}.conv2", prefix), out);
        self.bn2.collect(&format!("{}.bn2", prefix), out);
    }

    fn collect_buffers(&self, prefix: &str, out: &mut Vec<(String, BufferRef)>) {
        self.bn1.collect_buffers(&format!("{}.bn1", prefix), out);
        self.bn2.collect_buffers(&format!("{}.bn2", prefix), out);
    }
}

/// Encoder-decoder network with four pooling stages, a bottleneck and
/// nearest-neighbor upsampling. `extra_skip[n]` widens the decoder input at
/// stage `n + 1` for an injected fusion feature map of that many channels.
pub struct UNet {
    enc: Vec<ConvBlock>,
    bottleneck: ConvBlock,
    dec: Vec<ConvBlock>,
    head: Conv2d,
    extra_skip: [usize; DEPTH],
}

impl UNet {
    pub fn new(rng: &mut ChaCha8Rng, spec: &UNetSpec, extra_skip: [usize; DEPTH]) -> UNet {
        let ch = &spec.encoder_channels;
        let mut enc = Vec::with_capacity(DEPTH);
        let mut in_c = spec.in_channels;
        for &c in ch {
            enc.push(ConvBlock::new(rng, in_c, c));
            in_c = c;
        }
        let bott_c = 2 * ch[DEPTH - 1];
        let bottleneck = ConvBlock::new(rng, ch[DEPTH - 1], bott_c);
        // dec[i] consumes the upsampled deeper features plus the stage
        // skip (plus a fused map when injected) and emits ch[i]
        let mut dec = Vec::with_capacity(DEPTH);
        for i in 0..DEPTH {
            let above = if i == DEPTH - 1 { bott_c } else { ch[i + 1] };
            dec.push(ConvBlock::new(rng, above + ch[i] + extra_skip[i], ch[i]));
        }
        let head = Conv2d::new(rng, ch[0], spec.num_classes, 3);
        UNet {
            enc,
            bottleneck,
            dec,
            head,
            extra_skip,
        }
    }

    /// Stage features before pooling, then the bottleneck output.
    pub fn encode(&self, x: &Tensor, training: bool) -> Result<(Vec<Tensor>, Tensor)> {
        let mut skips = Vec::with_capacity(DEPTH);
        let mut cur = x.clone();
        for block in &self.enc {
            let e = block.forward(&cur, training)?;
            cur = e.maxpool2d(2)?;
            skips.push(e);
        }
        let b = self.bottleneck.forward(&cur, training)?;
        Ok((skips, b))
    }

    /// `fused[n]` is concatenated alongside the stage-`n+1` skip when set.
    pub fn decode(
        &self,
        bottleneck: &Tensor,
        skips: &[Tensor],
        fused: &[Option<Tensor>; DEPTH],
        training: bool,
    ) -> Result<Tensor> {
        let mut cur = bottleneck.clone();
        for i in (0..DEPTH).rev() {
            let up = cur.upsample_nearest2d(2)?;
            let mut cat = up.concat_channels(&skips[i])?;
            match (&fused[i], self.extra_skip[i]) {
                (Some(f), extra) if extra > 0 => cat = cat.concat_channels(f)?,
                (None, 0) => {}
                _ => {
                    return Err(Error::shape(
                        "decode",
                        format!("fusion injection mismatch at stage {}", i + 1),
                    ))
                }
            }
            cur = self.dec[i].forward(&cat, training)?;
        }
        self.head.forward(&cur)
    }

    pub fn forward(&self, x: &Tensor, training: bool) -> Result<Tensor> {
        let (skips, b) = self.encode(x, training)?;
        self.decode(&b, &skips, &[None, None, None, None], training)
    }

    fn collect(&self, prefix: &str, out: &mut Vec<(String, Tensor)>) {
        for (i, e) in self.enc.iter().enumerate() {
            e.collect(&format!("{}.enc{}", prefix, i + 1), out);
        }
        self.bottleneck.collect(&format!("{}.bottleneck", prefix), out);
        for (i, d) in self.dec.iter().enumerate() {
            d.collect(&format!("{}.dec{}", prefix, i + 1), out);
        }
        self.head.collect(&format!("{}.head", prefix), out);
    }

    fn collect_buffers(&self, prefix: &str, out: &mut Vec<(String, BufferRef)>) {
        for (i, e) in self.enc.iter().enumerate() {
            e.collect_buffers(&format!("{}.enc{}", prefix, i + 1), out);
        }
        self.bottleneck
            .collect_buffers(&format!("{}.bottleneck", prefix), out);
        for (i, d) in self.dec.iter().enumerate() {
            d.collect_buffers(&format!("{}.dec{}", prefix, i + 1), out);
        }
    }

    pub fn num_parameters(&self) -> usize {
        let mut v = Vec::new();
        self.collect("net", &mut v);
        v.iter().map(|(_, t)| t.len()).sum()
    }
}

/// conv3x3 from 2C to C, then batchnorm and relu, over the channel
/// concatenation of a main-network feature and an auxiliary one.
pub struct FusionBlock {
    conv: Conv2d,
    bn: BatchNorm2d,
}

impl FusionBlock {
    fn new(rng: &mut ChaCha8Rng, c: usize) -> FusionBlock {
        FusionBlock {
            conv: Conv2d::new(rng, 2 * c, c, 3),
            bn: BatchNorm2d::new(c),
        }
    }

    pub fn forward(&self, e_main: &Tensor, e_aux: &Tensor, training: bool) -> Result<Tensor> {
        if e_main.shape() != e_aux.shape() {
            return Err(Error::shape(
                "fuse_features",
                format!("{:?} vs {:?}", e_main.shape(), e_aux.shape()),
            ));
        }
        let cat = e_main.concat_channels(e_aux)?;
        Ok(self.bn.forward(&self.conv.forward(&cat)?, training)?.relu())
    }
}

#[derive(Debug, Clone)]
pub struct ModelConfig {
    pub spec: UNetSpec,
    pub enable_lm: bool,
    pub enable_hm: bool,
    pub input_mode: InputMode,
    pub wavelet_basis: String,
    pub wavelet_levels: usize,
    pub alpha_range: [f32; 2],
    pub beta_range: [f32; 2],
    pub seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            spec: UNetSpec::default(),
            enable_lm: true,
            enable_hm: true,
            input_mode: InputMode::Fusion,
            wavelet_basis: "haar".into(),
            wavelet_levels: 1,
            alpha_range: [0.4, 0.8],
            beta_range: [0.4, 0.8],
            seed: 0,
        }
    }
}

pub struct XNetV2Model {
    pub cfg: ModelConfig,
    pub net_m: UNet,
    pub net_l: UNet,
    pub net_h: UNet,
    /// Fusion of L and M encoder features at stages 3 and 4 (deep).
    fusion_lm: Option<[FusionBlock; 2]>,
    /// Fusion of H and M encoder features at stages 1 and 2 (shallow).
    fusion_hm: Option<[FusionBlock; 2]>,
}

impl XNetV2Model {
    pub fn new(cfg: ModelConfig) -> Result<XNetV2Model> {
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let ch = &cfg.spec.encoder_channels;
        let mut extra_m = [0usize; DEPTH];
        let mut extra_l = [0usize; DEPTH];
        let mut extra_h = [0usize; DEPTH];
        if cfg.enable_lm {
            for i in [2, 3] {
                extra_m[i] = ch[i];
                extra_l[i] = ch[i];
            }
        }
        if cfg.enable_hm {
            for i in [0, 1] {
                extra_m[i] = ch[i];
                extra_h[i] = ch[i];
            }
        }
        let net_m = UNet::new(&mut rng, &cfg.spec, extra_m);
        let net_l = UNet::new(&mut rng, &cfg.spec, extra_l);
        let net_h = UNet::new(&mut rng, &cfg.spec, extra_h);
        let fusion_lm = if cfg.enable_lm {
            Some([
                FusionBlock::new(&mut rng, ch[2]),
                FusionBlock::new(&mut rng, ch[3]),
            ])
        } else {
            None
        };
        let fusion_hm = if cfg.enable_hm {
            Some([
                FusionBlock::new(&mut rng, ch[0]),
                FusionBlock::new(&mut rng, ch[1]),
            ])
        } else {
            None
        };
        Ok(XNetV2Model {
            cfg,
            net_m,
            net_l,
            net_h,
            fusion_lm,
            fusion_hm,
        })
    }

    /// Encoder stage indices (1-based) carrying a fusion module, per pair.
    pub fn fusion_stages(&self) -> (Vec<usize>, Vec<usize>) {
        (
            if self.fusion_lm.is_some() { vec![3, 4] } else { vec![] },
            if self.fusion_hm.is_some() { vec![1, 2] } else { vec![] },
        )
    }

    pub fn forward(
        &self,
        x_m: &Tensor,
        x_l: &Tensor,
        x_h: &Tensor,
        training: bool,
    ) -> Result<(Tensor, Tensor, Tensor)> {
        if x_m.shape() != x_l.shape() || x_m.shape() != x_h.shape() {
            return Err(Error::shape(
                "forward",
                format!(
                    "{:?}, {:?}, {:?}",
                    x_m.shape(),
                    x_l.shape(),
                    x_h.shape()
                ),
            ));
        }
        let s = x_m.shape();
        if s.len() != 4 {
            return Err(Error::shape("forward", "inputs must be NCHW"));
        }
        let div = 1 << DEPTH;
        if s[2] % div != 0 || s[3] % div != 0 {
            return Err(Error::arg(
                "forward",
                format!(
                    "spatial dims {}x{} not divisible by {}; pad the input to a multiple of {}",
                    s[2], s[3], div, div
                ),
            ));
        }
        let (sk_m, b_m) = self.net_m.encode(x_m, training)?;
        let (sk_l, b_l) = self.net_l.encode(x_l, training)?;
        let (sk_h, b_h) = self.net_h.encode(x_h, training)?;

        let mut fused_m: [Option<Tensor>; DEPTH] = [None, None, None, None];
        let mut fused_l: [Option<Tensor>; DEPTH] = [None, None, None, None];
        let mut fused_h: [Option<Tensor>; DEPTH] = [None, None, None, None];
        if let Some(fl) = &self.fusion_lm {
            for (j, i) in [2usize, 3].into_iter().enumerate() {
                let f = fl[j].forward(&sk_m[i], &sk_l[i], training)?;
                fused_m[i] = Some(f.clone());
                fused_l[i] = Some(f);
            }
        }
        if let Some(fh) = &self.fusion_hm {
            for (j, i) in [0usize, 1].into_iter().enumerate() {
                let f = fh[j].forward(&sk_m[i], &sk_h[i], training)?;
                fused_m[i] = Some(f.clone());
                fused_h[i] = Some(f);
            }
        }

        let p_m = self
            .net_m
            .decode(&b_m, &sk_m, &fused_m, training)?
            .softmax_channels()?;
        let p_l = self
            .net_l
            .decode(&b_l, &sk_l, &fused_l, training)?
            .softmax_channels()?;
        let p_h = self
            .net_h
            .decode(&b_h, &sk_h, &fused_h, training)?
            .softmax_channels()?;
        Ok((p_m, p_l, p_h))
    }

    /// Builds the three network inputs from a raw image batch. Fusion mode
    /// splits each sample into LF and HF reconstructions and blends them
    /// with the given weights; every input is then normalized per sample
    /// and channel to zero mean, unit variance.
    pub fn prepare_inputs(
        &self,
        x: &Tensor,
        alpha: f32,
        beta: f32,
    ) -> Result<(Tensor, Tensor, Tensor)> {
        let s = x.shape();
        if s.len() != 4 {
            return Err(Error::shape("prepare_inputs", "input must be NCHW"));
        }
        let (n, c, h, w) = (s[0], s[1], s[2], s[3]);
        let sample = c * h * w;
        let xd = x.to_vec();
        let mut m = xd.clone();
        let (mut l, mut hbuf) = if self.cfg.input_mode == InputMode::RawAll {
            (xd.clone(), xd)
        } else {
            let basis = WaveletBasis::by_name(&self.cfg.wavelet_basis)?;
            let mut l = vec![0.0f32; n * sample];
            let mut hbuf = vec![0.0f32; n * sample];
            for i in 0..n {
                let img = Tensor::from_vec(&[c, h, w], xd[i * sample..(i + 1) * sample].to_vec());
                let (lf, hf) = frequency_split(&img, &basis, self.cfg.wavelet_levels)?;
                let (xl, xh) = complementary_fuse(&lf, &hf, alpha, beta)?;
                let dst = i * sample..(i + 1) * sample;
                match self.cfg.input_mode {
                    InputMode::LfOnly => {
                        l[dst.clone()].copy_from_slice(&xl.data());
                        hbuf[dst].copy_from_slice(&xd[i * sample..(i + 1) * sample]);
                    }
                    InputMode::HfOnly => {
                        l[dst.clone()].copy_from_slice(&xd[i * sample..(i + 1) * sample]);
                        hbuf[dst].copy_from_slice(&xh.data());
                    }
                    _ => {
                        l[dst.clone()].copy_from_slice(&xl.data());
                        hbuf[dst].copy_from_slice(&xh.data());
                    }
                }
            }
            (l, hbuf)
        };
        for i in 0..n {
            normalize_per_channel(&mut m[i * sample..(i + 1) * sample], c);
            normalize_per_channel(&mut l[i * sample..(i + 1) * sample], c);
            normalize_per_channel(&mut hbuf[i * sample..(i + 1) * sample], c);
        }
        Ok((
            Tensor::from_vec(s, m),
            Tensor::from_vec(s, l),
            Tensor::from_vec(s, hbuf),
        ))
    }

    /// Segments a raw image batch: fusion weights sit at the midpoints of
    /// their training ranges, batchnorm runs on frozen statistics and the
    /// result is the per-pixel argmax of the main network's probabilities.
    pub fn infer(&self, x: &Tensor) -> Result<(Vec<usize>, Vec<u8>)> {
        let alpha = 0.5 * (self.cfg.alpha_range[0] + self.cfg.alpha_range[1]);
        let beta = 0.5 * (self.cfg.beta_range[0] + self.cfg.beta_range[1]);
        let (m, l, h) = self.prepare_inputs(x, alpha, beta)?;
        let (p_m, _, _) = self.forward(&m, &l, &h, false)?;
        let s = p_m.shape();
        let (n, c, hh, ww) = (s[0], s[1], s[2], s[3]);
        let plane = hh * ww;
        let pd = p_m.data();
        let mut labels = vec![0u8; n * plane];
        for i in 0..n {
            let base = i * c * plane;
            for k in 0..plane {
                let mut best = 0usize;
                let mut bv = pd[base + k];
                for ch in 1..c {
                    let v = pd[base + ch * plane + k];
                    if v > bv {
                        bv = v;
                        best = ch;
                    }
                }
                labels[i * plane + k] = best as u8;
            }
        }
        Ok((vec![n, hh, ww], labels))
    }

    pub fn named_parameters(&self) -> Vec<(String, Tensor)> {
        let mut out = Vec::new();
        self.net_m.collect("m", &mut out);
        self.net_l.collect("l", &mut out);
        self.net_h.collect("h", &mut out);
        if let Some(fl) = &self.fusion_lm {
            for (j, f) in fl.iter().enumerate() {
                f.conv.collect(&format!("fusion_lm{}.conv", j + 3), &mut out);
                f.bn.collect(&format!("fusion_lm{}.bn", j + 3), &mut out);
            }
        }
        if let Some(fh) = &self.fusion_hm {
            for (j, f) in fh.iter().enumerate() {
                f.conv.collect(&format!("fusion_hm{}.conv", j + 1), &mut out);
                f.bn.collect(&format!("fusion_hm{}.bn", j + 1), &mut out);
            }
        }
        out
    }

    pub fn named_buffers(&self) -> Vec<(String, BufferRef)> {
        let mut out = Vec::new();
        self.net_m.collect_buffers("m", &mut out);
        self.net_l.collect_buffers("l", &mut out);
        self.net_h.collect_buffers("h", &mut out);
        if let Some(fl) = &self.fusion_lm {
            for (j, f) in fl.iter().enumerate() {
                f.bn.collect_buffers(&format!("fusion_lm{}.bn", j + 3), &mut out);
            }
        }
        if let Some(fh) = &self.fusion_hm {
            for (j, f) in fh.iter().enumerate() {
                f.bn.collect_buffers(&format!("fusion_hm{}.bn", j + 1), &mut out);
            }
        }
        out
    }

    pub fn num_parameters(&self) -> usize {
        self.named_parameters().iter().map(|(_, t)| t.len()).sum()
    }

    pub fn zero_grad(&self) {
        for (_, p) in self.named_parameters() {
            p.zero_grad();
        }
    }
}
