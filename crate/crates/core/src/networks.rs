//! Segmentation U-Net, residual translation generator and patch discriminator.

use rand::Rng;
use rand_distr::{Bernoulli, Distribution};
use serde::{Deserialize, Serialize};

use crate::autograd::{Tape, Var};
use crate::error::{Error, Result};
use crate::kernels::ConvGeometry;
use crate::nn::{Bound, Conv2d, Init, ParamSet};
use crate::tensor::{Real, Tensor};

/// Weight std for the translation networks.
const GAN_INIT_STD: f64 = 0.02;
const LEAKY_SLOPE: f64 = 0.2;

/// Whether a forward pass is part of a training update.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Pass {
    Eval,
    Train,
}

pub trait Model<T: Real> {
    fn params(&self) -> &ParamSet<T>;
    fn params_mut(&mut self) -> &mut ParamSet<T>;
    /// Architecture description stored alongside checkpoints.
    fn architecture(&self) -> serde_json::Value;
}

pub fn read_parameters<T: Real, M: Model<T> + ?Sized>(model: &M) -> Vec<Tensor<T>> {
    model.params().read()
}

pub fn write_parameters<T: Real, M: Model<T> + ?Sized>(model: &mut M, values: Vec<Tensor<T>>) -> Result<()> {
    model.params_mut().write(values)
}

fn check_nchw<T: Real>(x: &Tensor<T>, channels: usize, multiple: usize) -> Result<()> {
    if x.shape().len() != 4 {
        return Err(Error::Shape(format!("expected NCHW input, got {:?}", x.shape())));
    }
    let (_, c, h, w) = x.dims4();
    if c != channels {
        return Err(Error::Shape(format!("expected {channels} input channels, got {c}")));
    }
    if h % multiple != 0 || w % multiple != 0 || h == 0 || w == 0 {
        return Err(Error::config(
            "image_size",
            format!("{h}x{w} input is not divisible by {multiple}"),
        ));
    }
    Ok(())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SegmenterConfig {
    pub in_channels: usize,
    pub num_classes: usize,
    /// Number of 2x downsamplings in the contracting path.
    pub depth: usize,
    pub base_width: usize,
    pub dropout: f64,
}

impl Default for SegmenterConfig {
    fn default() -> Self {
        Self {
            in_channels: 1,
            num_classes: 8,
            depth: 2,
            base_width: 8,
            dropout: 0.25,
        }
    }
}

impl SegmenterConfig {
    pub fn validate(&self) -> Result<()> {
        if self.in_channels == 0 {
            return Err(Error::config("in_channels", "must be positive"));
        }
        if self.num_classes < 2 {
            return Err(Error::config("num_classes", "must be at least 2"));
        }
        if self.num_classes > u8::MAX as usize + 1 {
            return Err(Error::config("num_classes", "labels are stored as u8"));
        }
        if self.base_width == 0 {
            return Err(Error::config("base_width", "must be positive"));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::config("dropout", "must lie in [0, 1)"));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug)]
struct DoubleConv(Conv2d, Conv2d);

impl DoubleConv {
    fn new<T: Real, R: Rng + ?Sized>(ps: &mut ParamSet<T>, name: &str, cin: usize, cout: usize, rng: &mut R) -> Self {
        Self(
            Conv2d::same3(ps, &format!("{name}.0"), cin, cout, Init::HeNormal, rng),
            Conv2d::same3(ps, &format!("{name}.1"), cout, cout, Init::HeNormal, rng),
        )
    }

    fn forward<T: Real>(&self, tape: &mut Tape<T>, b: &Bound, x: Var) -> Var {
        let h = self.0.forward(tape, b, x);
        let h = tape.relu(h);
        let h = self.1.forward(tape, b, h);
        tape.relu(h)
    }
}

/// U-Net segmenter with dropout after the bottleneck and before the
/// prediction layer.
#[derive(Clone, Debug)]
pub struct Segmenter<T> {
    config: SegmenterConfig,
    params: ParamSet<T>,
    encoder: Vec<DoubleConv>,
    bottleneck: DoubleConv,
    decoder: Vec<DoubleConv>,
    head: Conv2d,
    /// Keeps dropout active in evaluation passes (Monte-Carlo sampling).
    pub bayes_mode: bool,
}

impl<T: Real> Segmenter<T> {
    pub fn new<R: Rng + ?Sized>(config: SegmenterConfig, rng: &mut R) -> Result<Self> {
        config.validate()?;
        let mut ps = ParamSet::new();
        let width = |l: usize| config.base_width << l;
        let mut encoder = Vec::with_capacity(config.depth);
        let mut cin = config.in_channels;
        for l in 0..config.depth {
            encoder.push(DoubleConv::new(&mut ps, &format!("enc{l}"), cin, width(l), rng));
            cin = width(l);
        }
        let bottleneck = DoubleConv::new(&mut ps, "bottleneck", cin, width(config.depth), rng);
        let mut decoder = Vec::with_capacity(config.depth);
        for l in (0..config.depth).rev() {
            decoder.push(DoubleConv::new(&mut ps, &format!("dec{l}"), width(l + 1) + width(l), width(l), rng));
        }
        let head = Conv2d::new(
            &mut ps,
            "head",
            width(0),
            config.num_classes,
            1,
            ConvGeometry { stride: 1, pad: 0 },
            Init::HeNormal,
            rng,
        );
        Ok(Self {
            config,
            params: ps,
            encoder,
            bottleneck,
            decoder,
            head,
            bayes_mode: false,
        })
    }

    pub fn config(&self) -> &SegmenterConfig {
        &self.config
    }

    pub fn num_classes(&self) -> usize {
        self.config.num_classes
    }

    pub fn num_parameters(&self) -> usize {
        self.params.num_scalars()
    }

    pub fn check_input(&self, x: &Tensor<T>) -> Result<()> {
        check_nchw(x, self.config.in_channels, 1 << self.config.depth)
    }

    fn dropout<R: Rng + ?Sized>(&self, tape: &mut Tape<T>, x: Var, pass: Pass, rng: &mut R) -> Var {
        let p = self.config.dropout;
        if p == 0.0 || !(pass == Pass::Train || self.bayes_mode) {
            return x;
        }
        let keep = Bernoulli::new(1.0 - p).expect("valid dropout rate");
        let scale = T::of(1.0 / (1.0 - p));
        let shape = tape.value(x).shape().to_vec();
        let n: usize = shape.iter().product();
        let mask = (0..n)
            .map(|_| if keep.sample(rng) { scale } else { T::zero() })
            .collect();
        tape.mul_const(x, Tensor::from_vec(&shape, mask).expect("mask shape"))
    }

    /// Per-pixel class logits `[N, C, H, W]`.
    pub fn forward<R: Rng + ?Sized>(
        &self,
        tape: &mut Tape<T>,
        bound: &Bound,
        x: Var,
        pass: Pass,
        rng: &mut R,
    ) -> Result<Var> {
        self.check_input(tape.value(x))?;
        let mut skips = Vec::with_capacity(self.config.depth);
        let mut h = x;
        for block in &self.encoder {
            h = block.forward(tape, bound, h);
            skips.push(h);
            h = tape.max_pool2(h);
        }
        h = self.bottleneck.forward(tape, bound, h);
        h = self.dropout(tape, h, pass, rng);
        for block in &self.decoder {
            let up = tape.upsample2(h);
            let skip = skips.pop().expect("one skip per level");
            let cat = tape.concat(up, skip);
            h = block.forward(tape, bound, cat);
        }
        h = self.dropout(tape, h, pass, rng);
        Ok(self.head.forward(tape, bound, h))
    }

    /// Softmax probabilities on the tape.
    pub fn probs<R: Rng + ?Sized>(
        &self,
        tape: &mut Tape<T>,
        bound: &Bound,
        x: Var,
        pass: Pass,
        rng: &mut R,
    ) -> Result<Var> {
        let logits = self.forward(tape, bound, x, pass, rng)?;
        Ok(tape.softmax(logits))
    }

    /// Detached probabilities for a batch.
    pub fn predict<R: Rng + ?Sized>(&self, x: &Tensor<T>, pass: Pass, rng: &mut R) -> Result<Tensor<T>> {
        let mut tape = Tape::new();
        let bound = self.params.bind(&mut tape, false);
        let xv = tape.constant(x.clone());
        let p = self.probs(&mut tape, &bound, xv, pass, rng)?;
        Ok(tape.value(p).clone())
    }

    /// Detached logits for a batch.
    pub fn logits<R: Rng + ?Sized>(&self, x: &Tensor<T>, pass: Pass, rng: &mut R) -> Result<Tensor<T>> {
        let mut tape = Tape::new();
        let bound = self.params.bind(&mut tape, false);
        let xv = tape.constant(x.clone());
        let l = self.forward(&mut tape, &bound, xv, pass, rng)?;
        Ok(tape.value(l).clone())
    }
}

impl<T: Real> Model<T> for Segmenter<T> {
    fn params(&self) -> &ParamSet<T> {
        &self.params
    }

    fn params_mut(&mut self) -> &mut ParamSet<T> {
        &mut self.params
    }

    fn architecture(&self) -> serde_json::Value {
        serde_json::json!({ "kind": "segmenter", "config": self.config })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Direction {
    SourceToTarget,
    TargetToSource,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GeneratorConfig {
    pub in_channels: usize,
    pub width: usize,
    pub res_blocks: usize,
}

impl Default for GeneratorConfig {
    fn default() -> Self {
        Self {
            in_channels: 1,
            width: 8,
            res_blocks: 3,
        }
    }
}

/// Image translator: stem, one strided downsampling, residual blocks at half
/// resolution, nearest upsampling and a `tanh` output in `[-1, 1]`.
#[derive(Clone, Debug)]
pub struct Generator<T> {
    config: GeneratorConfig,
    pub direction: Direction,
    params: ParamSet<T>,
    stem: Conv2d,
    down: Conv2d,
    blocks: Vec<(Conv2d, Conv2d)>,
    up: Conv2d,
    out: Conv2d,
}

impl<T: Real> Generator<T> {
    pub fn new<R: Rng + ?Sized>(config: GeneratorConfig, direction: Direction, rng: &mut R) -> Result<Self> {
        if config.width == 0 || config.in_channels == 0 {
            return Err(Error::config("generator.width", "must be positive"));
        }
        let init = Init::TruncatedNormal(GAN_INIT_STD);
        let mut ps = ParamSet::new();
        let w = config.width;
        let stem = Conv2d::same3(&mut ps, "stem", config.in_channels, w, init, rng);
        let down = Conv2d::new(&mut ps, "down", w, 2 * w, 3, ConvGeometry { stride: 2, pad: 1 }, init, rng);
        let blocks = (0..config.res_blocks)
            .map(|i| {
                (
                    Conv2d::same3(&mut ps, &format!("res{i}.0"), 2 * w, 2 * w, init, rng),
                    Conv2d::same3(&mut ps, &format!("res{i}.1"), 2 * w, 2 * w, init, rng),
                )
            })
            .collect();
        let up = Conv2d::same3(&mut ps, "up", 2 * w, w, init, rng);
        let out = Conv2d::same3(&mut ps, "out", w, config.in_channels, init, rng);
        Ok(Self {
            config,
            direction,
            params: ps,
            stem,
            down,
            blocks,
            up,
            out,
        })
    }

    pub fn forward(&self, tape: &mut Tape<T>, bound: &Bound, x: Var) -> Result<Var> {
        check_nchw(tape.value(x), self.config.in_channels, 2)?;
        let h = self.stem.forward(tape, bound, x);
        let h = tape.relu(h);
        let h = self.down.forward(tape, bound, h);
        let mut h = tape.relu(h);
        for (a, b) in &self.blocks {
            let r = a.forward(tape, bound, h);
            let r = tape.relu(r);
            let r = b.forward(tape, bound, r);
            h = tape.add(h, r);
        }
        let h = tape.upsample2(h);
        let h = self.up.forward(tape, bound, h);
        let h = tape.relu(h);
        let h = self.out.forward(tape, bound, h);
        Ok(tape.tanh(h))
    }

    pub fn translate(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        let mut tape = Tape::new();
        let bound = self.params.bind(&mut tape, false);
        let xv = tape.constant(x.clone());
        let y = self.forward(&mut tape, &bound, xv)?;
        Ok(tape.value(y).clone())
    }
}

impl<T: Real> Model<T> for Generator<T> {
    fn params(&self) -> &ParamSet<T> {
        &self.params
    }

    fn params_mut(&mut self) -> &mut ParamSet<T> {
        &mut self.params
    }

    fn architecture(&self) -> serde_json::Value {
        serde_json::json!({ "kind": "generator", "direction": self.direction, "config": self.config })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DomainSide {
    Source,
    Target,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DiscriminatorConfig {
    pub in_channels: usize,
    pub width: usize,
}

impl Default for DiscriminatorConfig {
    fn default() -> Self {
        Self {
            in_channels: 1,
            width: 8,
        }
    }
}

/// Patch discriminator: two stride-2 4x4 convolutions and a sigmoid 3x3
/// head, so a 64x64 input yields a 16x16 map of probabilities.
#[derive(Clone, Debug)]
pub struct Discriminator<T> {
    config: DiscriminatorConfig,
    pub domain: DomainSide,
    params: ParamSet<T>,
    c1: Conv2d,
    c2: Conv2d,
    head: Conv2d,
}

impl<T: Real> Discriminator<T> {
    pub fn new<R: Rng + ?Sized>(config: DiscriminatorConfig, domain: DomainSide, rng: &mut R) -> Result<Self> {
        if config.width == 0 || config.in_channels == 0 {
            return Err(Error::config("discriminator.width", "must be positive"));
        }
        let init = Init::TruncatedNormal(GAN_INIT_STD);
        let s2 = ConvGeometry { stride: 2, pad: 1 };
        let w = config.width;
        let mut ps = ParamSet::new();
        let c1 = Conv2d::new(&mut ps, "c1", config.in_channels, w, 4, s2, init, rng);
        let c2 = Conv2d::new(&mut ps, "c2", w, 2 * w, 4, s2, init, rng);
        let head = Conv2d::same3(&mut ps, "head", 2 * w, 1, init, rng);
        Ok(Self {
            config,
            domain,
            params: ps,
            c1,
            c2,
            head,
        })
    }

    /// Patch probabilities `[N, 1, H/4, W/4]`.
    pub fn forward(&self, tape: &mut Tape<T>, bound: &Bound, x: Var) -> Result<Var> {
        check_nchw(tape.value(x), self.config.in_channels, 4)?;
        let slope = T::of(LEAKY_SLOPE);
        let h = self.c1.forward(tape, bound, x);
        let h = tape.leaky_relu(h, slope);
        let h = self.c2.forward(tape, bound, h);
        let h = tape.leaky_relu(h, slope);
        let h = self.head.forward(tape, bound, h);
        Ok(tape.sigmoid(h))
    }

    pub fn patch_scores(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        let mut tape = Tape::new();
        let bound = self.params.bind(&mut tape, false);
        let xv = tape.constant(x.clone());
        let d = self.forward(&mut tape, &bound, xv)?;
        Ok(tape.value(d).clone())
    }

    /// One probability per sample: the mean over the patch map.
    pub fn score(&self, x: &Tensor<T>) -> Result<Vec<T>> {
        Ok(patch_means(&self.patch_scores(x)?))
    }
}

/// Mean of each sample's patch map.
pub fn patch_means<T: Real>(patches: &Tensor<T>) -> Vec<T> {
    let n = patches.shape()[0];
    (0..n)
        .map(|i| {
            let s = patches.sample(i);
            s.iter().copied().sum::<T>() / T::of(s.len() as f64)
        })
        .collect()
}

impl<T: Real> Model<T> for Discriminator<T> {
    fn params(&self) -> &ParamSet<T> {
        &self.params
    }

    fn params_mut(&mut self) -> &mut ParamSet<T> {
        &mut self.params
    }

    fn architecture(&self) -> serde_json::Value {
        serde_json::json!({ "kind": "discriminator", "domain": self.domain, "config": self.config })
    }
}
