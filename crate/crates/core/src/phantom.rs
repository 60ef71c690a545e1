//! Synthetic two-modality cardiac phantom: nested-ellipse anatomy rendered
//! under per-domain intensity remaps, with affine augmentation, on-disk
//! persistence and fold splits.

use std::collections::BTreeSet;
use std::fs;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::seeding::stream_rng;
use crate::tensor::Tensor;

pub const FORMAT_VERSION: u32 = 1;
pub const MAX_CLASSES: usize = 8;
pub const NUM_FOLDS: usize = 4;

/// Names of the foreground structures in class-index order (class 1 first).
pub const STRUCTURES: [&str; 7] = ["MYO", "LA", "LV", "RA", "RV", "AA", "PA"];

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Domain {
    Source,
    LabeledTarget,
    UnlabeledTarget,
    Test,
}

impl Domain {
    pub const ALL: [Domain; 4] = [Domain::Source, Domain::LabeledTarget, Domain::UnlabeledTarget, Domain::Test];

    pub fn has_label(self) -> bool {
        self != Domain::UnlabeledTarget
    }

    fn prefix(self) -> &'static str {
        match self {
            Domain::Source => "src",
            Domain::LabeledTarget => "tgt",
            Domain::UnlabeledTarget => "unl",
            Domain::Test => "test",
        }
    }

    fn tag(self) -> u64 {
        self as u64 + 1
    }

    pub fn name(self) -> &'static str {
        match self {
            Domain::Source => "source",
            Domain::LabeledTarget => "labeled_target",
            Domain::UnlabeledTarget => "unlabeled_target",
            Domain::Test => "test",
        }
    }
}

impl std::fmt::Display for Domain {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

/// Intensity remap `gain * b^gamma + bias` of a base tissue value `b` in
/// `[0, 1]`, followed by Gaussian texture noise and a box blur.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModalityShift {
    pub gain: f64,
    pub bias: f64,
    pub gamma: f64,
    pub noise_std: f64,
    pub blur_radius: usize,
}

impl ModalityShift {
    pub fn identity() -> Self {
        Self {
            gain: 1.0,
            bias: 0.0,
            gamma: 1.0,
            noise_std: 0.0,
            blur_radius: 0,
        }
    }

    fn validate(&self, name: &str) -> Result<()> {
        if !(self.gamma > 0.0 && self.gamma.is_finite()) {
            return Err(Error::config(format!("shift_params.{name}.gamma"), "must be positive"));
        }
        if !(self.noise_std >= 0.0 && self.noise_std.is_finite()) {
            return Err(Error::config(format!("shift_params.{name}.noise_std"), "must be nonnegative"));
        }
        if !self.gain.is_finite() || !self.bias.is_finite() {
            return Err(Error::config(format!("shift_params.{name}"), "gain and bias must be finite"));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ShiftParams {
    pub source: ModalityShift,
    pub target: ModalityShift,
}

impl Default for ShiftParams {
    fn default() -> Self {
        Self {
            // Inverted, gamma-warped, blurred contrast, loosely MR-like.
            source: ModalityShift {
                gain: -0.75,
                bias: 0.85,
                gamma: 1.3,
                noise_std: 0.12,
                blur_radius: 1,
            },
            target: ModalityShift {
                gain: 1.0,
                bias: 0.0,
                gamma: 1.0,
                noise_std: 0.12,
                blur_radius: 0,
            },
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SplitCounts {
    pub source: usize,
    pub labeled_target: usize,
    pub unlabeled_target: usize,
    pub test: usize,
}

impl Default for SplitCounts {
    fn default() -> Self {
        Self {
            source: 20,
            labeled_target: 20,
            unlabeled_target: 40,
            test: 0,
        }
    }
}

impl SplitCounts {
    fn get(&self, d: Domain) -> usize {
        match d {
            Domain::Source => self.source,
            Domain::LabeledTarget => self.labeled_target,
            Domain::UnlabeledTarget => self.unlabeled_target,
            Domain::Test => self.test,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PhantomSpec {
    pub image_size: usize,
    pub num_classes: usize,
    pub num_samples_per_split: SplitCounts,
    pub shift_params: ShiftParams,
    pub seed: u64,
}

impl Default for PhantomSpec {
    fn default() -> Self {
        Self {
            image_size: 64,
            num_classes: 8,
            num_samples_per_split: SplitCounts::default(),
            shift_params: ShiftParams::default(),
            seed: 0,
        }
    }
}

impl PhantomSpec {
    pub fn validate(&self) -> Result<()> {
        if !(2..=MAX_CLASSES).contains(&self.num_classes) {
            return Err(Error::config(
                "num_classes",
                format!("{} is outside 2..={MAX_CLASSES}", self.num_classes),
            ));
        }
        if self.image_size < 16 {
            return Err(Error::config("image_size", format!("{} is below 16", self.image_size)));
        }
        if self.num_samples_per_split.labeled_target > 0 && self.num_samples_per_split.labeled_target < NUM_FOLDS {
            return Err(Error::config(
                "num_samples_per_split.labeled_target",
                format!("needs at least {NUM_FOLDS} samples for fold splitting"),
            ));
        }
        self.shift_params.source.validate("source")?;
        self.shift_params.target.validate("target")?;
        Ok(())
    }

    pub fn shift_for(&self, domain: Domain) -> &ModalityShift {
        match domain {
            Domain::Source => &self.shift_params.source,
            _ => &self.shift_params.target,
        }
    }
}

/// One 2D image in `[-1, 1]` with an optional label map.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DomainSample {
    pub id: String,
    pub domain: Domain,
    pub height: usize,
    pub width: usize,
    pub image: Vec<f32>,
    pub label: Option<Vec<u8>>,
}

impl DomainSample {
    pub fn label_set(&self) -> BTreeSet<u8> {
        self.label.iter().flatten().copied().collect()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub image_size: usize,
    pub num_classes: usize,
    /// Seed used for fold assignment.
    pub seed: u64,
    pub samples: Vec<DomainSample>,
}

impl Dataset {
    pub fn by_domain(&self, domain: Domain) -> Vec<&DomainSample> {
        self.samples.iter().filter(|s| s.domain == domain).collect()
    }

    pub fn get(&self, id: &str) -> Option<&DomainSample> {
        self.samples.iter().find(|s| s.id == id)
    }

    pub fn lookup(&self, ids: &[String]) -> Result<Vec<&DomainSample>> {
        ids.iter()
            .map(|id| self.get(id).ok_or_else(|| Error::Validation(format!("unknown sample id `{id}`"))))
            .collect()
    }

    /// Checks the sample invariants: label presence, sizes and value range.
    pub fn validate(&self) -> Result<()> {
        for s in &self.samples {
            let n = s.height * s.width;
            if s.image.len() != n {
                return Err(Error::Validation(format!("{}: image has {} pixels, expected {n}", s.id, s.image.len())));
            }
            match (&s.label, s.domain.has_label()) {
                (Some(l), true) => {
                    if l.len() != n {
                        return Err(Error::Validation(format!("{}: label has {} pixels", s.id, l.len())));
                    }
                    if let Some(&bad) = l.iter().find(|&&v| v as usize >= self.num_classes) {
                        return Err(Error::Validation(format!(
                            "{}: label value {bad} exceeds num_classes {}",
                            s.id, self.num_classes
                        )));
                    }
                }
                (None, false) => {}
                (Some(_), false) => return Err(Error::Validation(format!("{}: unlabeled sample has a label", s.id))),
                (None, true) => return Err(Error::Validation(format!("{}: label missing", s.id))),
            }
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug)]
struct Ellipse {
    class: u8,
    cx: f64,
    cy: f64,
    rx: f64,
    ry: f64,
    angle: f64,
    intensity: f64,
}

impl Ellipse {
    fn contains(&self, x: f64, y: f64) -> bool {
        let (s, c) = self.angle.sin_cos();
        let dx = x - self.cx;
        let dy = y - self.cy;
        let u = (c * dx + s * dy) / self.rx;
        let v = (-s * dx + c * dy) / self.ry;
        u * u + v * v <= 1.0
    }
}

/// Canonical layout in image-fraction units about the heart centre, in
/// paint order. Later entries overwrite earlier ones.
const LAYOUT: [(u8, f64, f64, f64, f64, f64, f64); 7] = [
    // class, cx, cy, rx, ry, angle, base intensity
    (1, 0.06, 0.04, 0.17, 0.14, 0.3, 0.55),
    (3, 0.06, 0.04, 0.115, 0.09, 0.3, 0.85),
    (5, -0.15, 0.09, 0.09, 0.125, -0.2, 0.85),
    (2, 0.13, -0.16, 0.09, 0.065, 0.1, 0.85),
    (4, -0.17, -0.12, 0.075, 0.08, 0.0, 0.85),
    (6, 0.01, -0.27, 0.055, 0.055, 0.0, 0.85),
    (7, -0.13, -0.29, 0.05, 0.045, 0.4, 0.85),
];
const BODY_INTENSITY: f64 = 0.3;

/// One sampled anatomy instance: ellipses in unit image coordinates.
#[derive(Clone, Debug)]
pub struct Anatomy {
    body: Ellipse,
    structures: Vec<Ellipse>,
}

impl Anatomy {
    pub fn sample<R: Rng + ?Sized>(num_classes: usize, rng: &mut R) -> Self {
        let scale = rng.random_range(0.8..1.2);
        let rot: f64 = rng.random_range(-0.6..0.6);
        let tx = rng.random_range(-0.08..0.08);
        let ty = rng.random_range(-0.08..0.08);
        let blood = rng.random_range(-0.05..0.05);
        let (s, c) = rot.sin_cos();
        let place = |x: f64, y: f64| (0.5 + tx + scale * (c * x - s * y), 0.5 + ty + scale * (s * x + c * y));
        let (bx, by) = place(0.0, 0.02);
        let body = Ellipse {
            class: 0,
            cx: bx,
            cy: by,
            rx: 0.42 * scale * rng.random_range(0.95..1.05),
            ry: 0.36 * scale * rng.random_range(0.95..1.05),
            angle: rot,
            intensity: BODY_INTENSITY + rng.random_range(-0.03..0.03),
        };
        let mut structures = Vec::new();
        let mut myo_jitter = 1.0;
        for &(class, cx, cy, rx, ry, angle, base) in &LAYOUT {
            let jx = rng.random_range(-0.035..0.035);
            let jy = rng.random_range(-0.035..0.035);
            let mut jr = rng.random_range(0.75..1.25);
            let jint = if class == 1 { rng.random_range(-0.04..0.04) } else { blood + rng.random_range(-0.01..0.01) };
            if class as usize >= num_classes {
                continue;
            }
            // The ventricle stays centred inside its myocardium.
            let (jx, jy) = if class == 3 { (0.0, 0.0) } else { (jx, jy) };
            if class == 1 {
                myo_jitter = jr;
            } else if class == 3 {
                jr = myo_jitter * rng.random_range(0.9..1.0);
            }
            let (px, py) = place(cx + jx, cy + jy);
            structures.push(Ellipse {
                class,
                cx: px,
                cy: py,
                rx: rx * scale * jr,
                ry: ry * scale * jr,
                angle: angle + rot,
                intensity: base + jint,
            });
        }
        Self { body, structures }
    }

    /// Base tissue image in `[0, 1]` and the label map.
    pub fn rasterize(&self, size: usize) -> (Vec<f64>, Vec<u8>) {
        let mut base = vec![0.0; size * size];
        let mut label = vec![0u8; size * size];
        for r in 0..size {
            let y = (r as f64 + 0.5) / size as f64;
            for c in 0..size {
                let x = (c as f64 + 0.5) / size as f64;
                let i = r * size + c;
                if self.body.contains(x, y) {
                    base[i] = self.body.intensity;
                }
                for e in &self.structures {
                    if e.contains(x, y) {
                        base[i] = e.intensity;
                        label[i] = e.class;
                    }
                }
            }
        }
        (base, label)
    }
}

fn box_blur(img: &[f64], size: usize, radius: usize) -> Vec<f64> {
    if radius == 0 {
        return img.to_vec();
    }
    let r = radius as isize;
    let n = size as isize;
    let at = |y: isize, x: isize| img[(y.clamp(0, n - 1) * n + x.clamp(0, n - 1)) as usize];
    let k = ((2 * r + 1) * (2 * r + 1)) as f64;
    let mut out = vec![0.0; img.len()];
    for y in 0..n {
        for x in 0..n {
            let mut s = 0.0;
            for dy in -r..=r {
                for dx in -r..=r {
                    s += at(y + dy, x + dx);
                }
            }
            out[(y * n + x) as usize] = s / k;
        }
    }
    out
}

/// Renders base tissue values under a modality shift, returning `[-1, 1]`
/// intensities.
pub fn render<R: Rng + ?Sized>(base: &[f64], size: usize, shift: &ModalityShift, rng: &mut R) -> Vec<f32> {
    let mut v: Vec<f64> = base.iter().map(|&b| shift.gain * b.powf(shift.gamma) + shift.bias).collect();
    if shift.noise_std > 0.0 {
        let normal = Normal::new(0.0, shift.noise_std).expect("validated noise std");
        v.iter_mut().for_each(|x| *x += normal.sample(rng));
    }
    box_blur(&v, size, shift.blur_radius)
        .into_iter()
        .map(|x| (2.0 * x.clamp(0.0, 1.0) - 1.0) as f32)
        .collect()
}

const ANATOMY_STREAM: u64 = 0x414e;
const RENDER_STREAM: u64 = 0x524e;

/// Generates one sample; a pure function of `(spec, domain, index)`.
pub fn generate_sample(spec: &PhantomSpec, domain: Domain, index: usize) -> DomainSample {
    let size = spec.image_size;
    let key = domain.tag() << 32 | index as u64;
    let anatomy = Anatomy::sample(spec.num_classes, &mut stream_rng(spec.seed, ANATOMY_STREAM, key));
    let (base, label) = anatomy.rasterize(size);
    let image = render(&base, size, spec.shift_for(domain), &mut stream_rng(spec.seed, RENDER_STREAM, key));
    DomainSample {
        id: format!("{}_{index:04}", domain.prefix()),
        domain,
        height: size,
        width: size,
        image,
        label: domain.has_label().then_some(label),
    }
}

/// Renders one anatomy under both modality shifts: `(source, target)`.
pub fn generate_pair(spec: &PhantomSpec, index: usize) -> (Vec<f32>, Vec<f32>, Vec<u8>) {
    let size = spec.image_size;
    let key = 0xFFFF_u64 << 32 | index as u64;
    let anatomy = Anatomy::sample(spec.num_classes, &mut stream_rng(spec.seed, ANATOMY_STREAM, key));
    let (base, label) = anatomy.rasterize(size);
    let src = render(&base, size, &spec.shift_params.source, &mut stream_rng(spec.seed, RENDER_STREAM, key));
    let tgt = render(&base, size, &spec.shift_params.target, &mut stream_rng(spec.seed, RENDER_STREAM, key));
    (src, tgt, label)
}

pub fn generate_phantom(spec: &PhantomSpec) -> Result<Dataset> {
    spec.validate()?;
    let mut samples = Vec::new();
    for domain in Domain::ALL {
        for i in 0..spec.num_samples_per_split.get(domain) {
            samples.push(generate_sample(spec, domain, i));
        }
    }
    Ok(Dataset {
        image_size: spec.image_size,
        num_classes: spec.num_classes,
        seed: spec.seed,
        samples,
    })
}

/// Rotation (radians), isotropic scale and horizontal shear about the
/// image centre.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AffineParams {
    pub rotation: f64,
    pub scale: f64,
    pub shear: f64,
}

impl AffineParams {
    pub fn identity() -> Self {
        Self {
            rotation: 0.0,
            scale: 1.0,
            shear: 0.0,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AugmentConfig {
    pub max_rotation_deg: f64,
    pub scale_range: (f64, f64),
    pub max_shear: f64,
}

impl Default for AugmentConfig {
    fn default() -> Self {
        Self {
            max_rotation_deg: 15.0,
            scale_range: (0.9, 1.1),
            max_shear: 0.1,
        }
    }
}

impl AugmentConfig {
    pub fn draw<R: Rng + ?Sized>(&self, rng: &mut R) -> AffineParams {
        let rot = self.max_rotation_deg.to_radians();
        AffineParams {
            rotation: if rot > 0.0 { rng.random_range(-rot..=rot) } else { 0.0 },
            scale: if self.scale_range.0 < self.scale_range.1 {
                rng.random_range(self.scale_range.0..=self.scale_range.1)
            } else {
                self.scale_range.0
            },
            shear: if self.max_shear > 0.0 {
                rng.random_range(-self.max_shear..=self.max_shear)
            } else {
                0.0
            },
        }
    }
}

/// Applies a random affine map drawn from `config`.
pub fn augment<R: Rng + ?Sized>(sample: &DomainSample, config: &AugmentConfig, rng: &mut R) -> DomainSample {
    augment_with(sample, &config.draw(rng))
}

/// Resamples image (bilinear) and label (nearest) through the same map,
/// clamping source coordinates to the border.
pub fn augment_with(sample: &DomainSample, p: &AffineParams) -> DomainSample {
    let (h, w) = (sample.height, sample.width);
    let (s, c) = p.rotation.sin_cos();
    // Forward map A = R * Shear * Scale; we need A^{-1} for pulling pixels.
    let a = [
        [p.scale * c, p.scale * (c * p.shear - s)],
        [p.scale * s, p.scale * (s * p.shear + c)],
    ];
    let det = a[0][0] * a[1][1] - a[0][1] * a[1][0];
    let inv = [[a[1][1] / det, -a[0][1] / det], [-a[1][0] / det, a[0][0] / det]];
    let cy = (h as f64 - 1.0) / 2.0;
    let cx = (w as f64 - 1.0) / 2.0;
    let mut image = vec![0f32; h * w];
    let mut label = sample.label.as_ref().map(|_| vec![0u8; h * w]);
    let clampf = |v: f64, hi: usize| v.clamp(0.0, (hi - 1) as f64);
    for r in 0..h {
        for col in 0..w {
            let dx = col as f64 - cx;
            let dy = r as f64 - cy;
            let sx = clampf(cx + inv[0][0] * dx + inv[0][1] * dy, w);
            let sy = clampf(cy + inv[1][0] * dx + inv[1][1] * dy, h);
            let x0 = sx.floor() as usize;
            let y0 = sy.floor() as usize;
            let x1 = (x0 + 1).min(w - 1);
            let y1 = (y0 + 1).min(h - 1);
            let fx = sx - x0 as f64;
            let fy = sy - y0 as f64;
            let px = |y: usize, x: usize| sample.image[y * w + x] as f64;
            let v = (1.0 - fy) * ((1.0 - fx) * px(y0, x0) + fx * px(y0, x1)) + fy * ((1.0 - fx) * px(y1, x0) + fx * px(y1, x1));
            image[r * w + col] = v as f32;
            if let (Some(out), Some(src)) = (label.as_mut(), sample.label.as_ref()) {
                let nx = sx.round() as usize;
                let ny = sy.round() as usize;
                out[r * w + col] = src[ny * w + nx];
            }
        }
    }
    DomainSample {
        id: sample.id.clone(),
        domain: sample.domain,
        height: h,
        width: w,
        image,
        label,
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SplitManifest {
    pub fold_index: usize,
    pub source: Vec<String>,
    pub labeled_target: Vec<String>,
    pub unlabeled_target: Vec<String>,
    pub test: Vec<String>,
}

const FOLD_STREAM: u64 = 0x464f;

/// Seeded partition of the labeled-target pool into four folds. Fold `fold`
/// trains; the other three, plus any test-domain samples, are held out.
pub fn make_folds(dataset: &Dataset, fold: usize) -> Result<SplitManifest> {
    if fold >= NUM_FOLDS {
        return Err(Error::config("fold", format!("{fold} is outside 0..{NUM_FOLDS}")));
    }
    let ids = |d: Domain| dataset.by_domain(d).iter().map(|s| s.id.clone()).collect::<Vec<_>>();
    let mut pool = ids(Domain::LabeledTarget);
    pool.shuffle(&mut stream_rng(dataset.seed, FOLD_STREAM, 0));
    let n = pool.len();
    let bounds = |k: usize| (k * n / NUM_FOLDS, (k + 1) * n / NUM_FOLDS);
    let (lo, hi) = bounds(fold);
    let mut labeled_target = pool[lo..hi].to_vec();
    let mut test: Vec<String> = pool[..lo].iter().chain(&pool[hi..]).cloned().collect();
    labeled_target.sort();
    test.sort();
    test.extend(ids(Domain::Test));
    Ok(SplitManifest {
        fold_index: fold,
        source: ids(Domain::Source),
        labeled_target,
        unlabeled_target: ids(Domain::UnlabeledTarget),
        test,
    })
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct SampleRecord {
    id: String,
    domain: Domain,
    dtype: String,
    shape: Vec<usize>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Meta {
    format_version: u32,
    image_size: usize,
    num_classes: usize,
    seed: u64,
    samples: Vec<SampleRecord>,
}

const IMAGE_DTYPE: &str = "float32";

/// Writes `meta.json` plus one `.img` (and `.lbl`) file per sample.
pub fn save_dataset(dataset: &Dataset, dir: &Path) -> Result<()> {
    dataset.validate()?;
    fs::create_dir_all(dir)?;
    let meta = Meta {
        format_version: FORMAT_VERSION,
        image_size: dataset.image_size,
        num_classes: dataset.num_classes,
        seed: dataset.seed,
        samples: dataset
            .samples
            .iter()
            .map(|s| SampleRecord {
                id: s.id.clone(),
                domain: s.domain,
                dtype: IMAGE_DTYPE.into(),
                shape: vec![s.height, s.width],
            })
            .collect(),
    };
    for s in &dataset.samples {
        let bytes: Vec<u8> = s.image.iter().flat_map(|v| v.to_le_bytes()).collect();
        fs::write(dir.join(format!("{}.img", s.id)), bytes)?;
        if let Some(l) = &s.label {
            fs::write(dir.join(format!("{}.lbl", s.id)), l)?;
        }
    }
    fs::write(dir.join("meta.json"), serde_json::to_string_pretty(&meta)?)?;
    Ok(())
}

fn read_payload(path: PathBuf, expected: usize) -> Result<Vec<u8>> {
    let bytes = fs::read(&path)?;
    if bytes.len() != expected {
        return Err(Error::PayloadSize {
            path,
            expected,
            found: bytes.len(),
        });
    }
    Ok(bytes)
}

pub fn load_dataset(dir: &Path) -> Result<Dataset> {
    let meta_path = dir.join("meta.json");
    let text = fs::read_to_string(&meta_path)?;
    let raw: serde_json::Value = serde_json::from_str(&text).map_err(|e| Error::CorruptHeader {
        path: meta_path.clone(),
        reason: e.to_string(),
    })?;
    let version = raw.get("format_version").and_then(|v| v.as_u64()).ok_or_else(|| Error::CorruptHeader {
        path: meta_path.clone(),
        reason: "missing format_version".into(),
    })?;
    if version != FORMAT_VERSION as u64 {
        return Err(Error::UnknownVersion {
            path: meta_path,
            found: version as u32,
            supported: FORMAT_VERSION,
        });
    }
    let meta: Meta = serde_json::from_value(raw).map_err(|e| Error::CorruptHeader {
        path: meta_path.clone(),
        reason: e.to_string(),
    })?;
    let mut samples = Vec::with_capacity(meta.samples.len());
    for rec in meta.samples {
        if rec.dtype != IMAGE_DTYPE || rec.shape.len() != 2 {
            return Err(Error::CorruptHeader {
                path: meta_path.clone(),
                reason: format!("{}: unsupported dtype {} or shape {:?}", rec.id, rec.dtype, rec.shape),
            });
        }
        let (h, w) = (rec.shape[0], rec.shape[1]);
        let bytes = read_payload(dir.join(format!("{}.img", rec.id)), h * w * 4)?;
        let image = bytes
            .chunks_exact(4)
            .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]))
            .collect();
        let label = if rec.domain.has_label() {
            Some(read_payload(dir.join(format!("{}.lbl", rec.id)), h * w)?)
        } else {
            None
        };
        samples.push(DomainSample {
            id: rec.id,
            domain: rec.domain,
            height: h,
            width: w,
            image,
            label,
        });
    }
    let dataset = Dataset {
        image_size: meta.image_size,
        num_classes: meta.num_classes,
        seed: meta.seed,
        samples,
    };
    dataset.validate()?;
    Ok(dataset)
}

/// Stacks sample images into an `[N, 1, H, W]` tensor.
pub fn image_batch(samples: &[&DomainSample]) -> Result<Tensor<f32>> {
    let first = samples.first().ok_or_else(|| Error::Empty("image batch".into()))?;
    let (h, w) = (first.height, first.width);
    let mut data = Vec::with_capacity(samples.len() * h * w);
    for s in samples {
        if (s.height, s.width) != (h, w) {
            return Err(Error::Shape(format!("{} is {}x{}, batch is {h}x{w}", s.id, s.height, s.width)));
        }
        data.extend_from_slice(&s.image);
    }
    Tensor::from_vec(&[samples.len(), 1, h, w], data)
}

/// Borrows the label maps of a batch.
pub fn label_batch<'a>(samples: &[&'a DomainSample]) -> Result<Vec<&'a [u8]>> {
    samples
        .iter()
        .map(|s| {
            s.label
                .as_deref()
                .ok_or_else(|| Error::Validation(format!("{} has no label", s.id)))
        })
        .collect()
}
