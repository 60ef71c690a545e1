//! Intra-domain teacher: EMA weight tracking, Monte-Carlo-dropout entropy
//! and uncertainty-masked consistency, plus the ramp-up schedules.

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::networks::{Model, Pass, Segmenter};
use crate::nn::ParamSet;
use crate::tensor::{Real, Tensor};

pub const DEFAULT_ALPHA: f64 = 0.99;
pub const LAMBDA_CON_MAX: f64 = 0.1;

/// EMA copy of the student. The copy runs with stochastic dropout so it
/// can produce Monte-Carlo samples.
#[derive(Clone, Debug)]
pub struct EmaState<T> {
    pub teacher: Segmenter<T>,
    pub alpha: f64,
    pub step: u64,
}

impl<T: Real> EmaState<T> {
    pub fn new(student: &Segmenter<T>, alpha: f64) -> Result<Self> {
        if !(0.0..=1.0).contains(&alpha) {
            return Err(Error::config("alpha", format!("{alpha} is outside [0, 1]")));
        }
        let mut teacher = student.clone();
        teacher.bayes_mode = true;
        Ok(Self {
            teacher,
            alpha,
            step: 0,
        })
    }
}

/// `teacher = alpha * teacher + (1 - alpha) * student`, elementwise.
pub fn ema_blend<T: Real>(teacher: &mut ParamSet<T>, student: &ParamSet<T>, alpha: f64) -> Result<()> {
    if teacher.shapes() != student.shapes() {
        return Err(Error::Shape("teacher and student parameter layouts differ".into()));
    }
    let a = T::of(alpha);
    let b = T::of(1.0 - alpha);
    for (t, s) in teacher.values_mut().zip(student.iter()) {
        for (tv, &sv) in t.data_mut().iter_mut().zip(s.value.data()) {
            *tv = a * *tv + b * sv;
        }
    }
    Ok(())
}

pub fn ema_update<T: Real>(state: &mut EmaState<T>, student: &ParamSet<T>) -> Result<()> {
    ema_blend(state.teacher.params_mut(), student, state.alpha)?;
    state.step += 1;
    Ok(())
}

/// Per-pixel predictive entropy, `[N, 1, H, W]`, natural log.
#[derive(Clone, Debug)]
pub struct UncertaintyMap<T> {
    pub values: Tensor<T>,
    pub u_max: f64,
}

impl<T: Real> UncertaintyMap<T> {
    pub fn max_value(&self) -> f64 {
        self.values.data().iter().map(|v| v.f64()).fold(0.0, f64::max)
    }

    pub fn variance(&self) -> f64 {
        let n = self.values.len() as f64;
        let mean = self.values.data().iter().map(|v| v.f64()).sum::<f64>() / n;
        self.values.data().iter().map(|v| (v.f64() - mean).powi(2)).sum::<f64>() / n
    }
}

/// Entropy `-sum_c p_c ln p_c` of each pixel, with `0 ln 0 = 0`.
pub fn entropy<T: Real>(probs: &Tensor<T>) -> UncertaintyMap<T> {
    let (n, c, h, w) = probs.dims4();
    let hw = h * w;
    let mut values = Tensor::zeros(&[n, 1, h, w]);
    for s in 0..n {
        let p = probs.sample(s);
        let out = &mut values.data_mut()[s * hw..(s + 1) * hw];
        for (px, o) in out.iter_mut().enumerate() {
            let mut e = 0.0;
            for k in 0..c {
                let v = p[k * hw + px].f64();
                if v > 0.0 {
                    e -= v * v.ln();
                }
            }
            *o = T::of(e.max(0.0));
        }
    }
    UncertaintyMap {
        values,
        u_max: (c as f64).ln(),
    }
}

/// Adds independent Gaussian noise to every element.
pub fn add_noise<T: Real, R: Rng + ?Sized>(x: &Tensor<T>, std: f64, rng: &mut R) -> Tensor<T> {
    if std == 0.0 {
        return x.clone();
    }
    let normal = Normal::new(0.0, std).expect("finite noise std");
    x.map(|v| v + T::of(normal.sample(rng)))
}

/// Mean softmax over `n_passes` stochastic passes (dropout plus input
/// noise) and the entropy of that mean.
pub fn mc_uncertainty<T: Real, R: Rng + ?Sized>(
    teacher: &Segmenter<T>,
    x_u: &Tensor<T>,
    n_passes: usize,
    noise_std: f64,
    rng: &mut R,
) -> Result<(Tensor<T>, UncertaintyMap<T>)> {
    if n_passes < 1 {
        return Err(Error::config("n_passes", "must be at least 1"));
    }
    if !teacher.bayes_mode {
        return Err(Error::config("bayes_mode", "Monte-Carlo sampling needs stochastic dropout"));
    }
    let mut mean: Option<Tensor<T>> = None;
    for _ in 0..n_passes {
        let noisy = add_noise(x_u, noise_std, rng);
        let p = teacher.predict(&noisy, Pass::Eval, rng)?;
        match &mut mean {
            Some(m) => m.add_assign(&p),
            None => mean = Some(p),
        }
    }
    let mean = mean.expect("at least one pass").scale(T::of(1.0 / n_passes as f64));
    let umap = entropy(&mean);
    Ok((mean, umap))
}

#[derive(Clone, Debug)]
pub struct MaskedConsistency<T> {
    pub value: T,
    /// Gradient with respect to the student probabilities.
    pub grad: Tensor<T>,
    /// Fraction of pixels below the threshold.
    pub coverage: f64,
    pub empty_mask: bool,
}

/// Squared error summed over channels, averaged over pixels whose
/// uncertainty is below `u_thre`. An empty mask yields zero.
pub fn masked_consistency_loss<T: Real>(
    student_probs: &Tensor<T>,
    teacher_probs: &Tensor<T>,
    umap: &UncertaintyMap<T>,
    u_thre: f64,
) -> Result<MaskedConsistency<T>> {
    if student_probs.shape() != teacher_probs.shape() {
        return Err(Error::Shape(format!(
            "student {:?} vs teacher {:?}",
            student_probs.shape(),
            teacher_probs.shape()
        )));
    }
    let (n, c, h, w) = student_probs.dims4();
    if umap.values.shape() != [n, 1, h, w] {
        return Err(Error::Shape(format!(
            "uncertainty map {:?} for probabilities {:?}",
            umap.values.shape(),
            student_probs.shape()
        )));
    }
    let hw = h * w;
    let mask: Vec<bool> = umap.values.data().iter().map(|u| u.f64() < u_thre).collect();
    let count = mask.iter().filter(|&&m| m).count();
    let mut grad = Tensor::zeros(student_probs.shape());
    if count == 0 {
        return Ok(MaskedConsistency {
            value: T::zero(),
            grad,
            coverage: 0.0,
            empty_mask: true,
        });
    }
    let inv = 1.0 / count as f64;
    let mut total = 0.0;
    for s in 0..n {
        let sp = student_probs.sample(s);
        let tp = teacher_probs.sample(s);
        let g = &mut grad.data_mut()[s * c * hw..(s + 1) * c * hw];
        for px in 0..hw {
            if !mask[s * hw + px] {
                continue;
            }
            for k in 0..c {
                let i = k * hw + px;
                let d = sp[i].f64() - tp[i].f64();
                total += d * d;
                g[i] = T::of(2.0 * d * inv);
            }
        }
    }
    Ok(MaskedConsistency {
        value: T::of(total * inv),
        grad,
        coverage: count as f64 / mask.len() as f64,
        empty_mask: false,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RampKind {
    LambdaCon,
    UThre,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct RampSchedule {
    pub kind: RampKind,
    pub t_max: f64,
    /// Maximum uncertainty, `ln C`; only used by the threshold ramp.
    pub u_max: f64,
}

impl RampSchedule {
    pub fn lambda_con(t_max: f64) -> Self {
        Self {
            kind: RampKind::LambdaCon,
            t_max,
            u_max: 0.0,
        }
    }

    pub fn u_thre(t_max: f64, num_classes: usize) -> Self {
        Self {
            kind: RampKind::UThre,
            t_max,
            u_max: (num_classes as f64).ln(),
        }
    }
}

/// `exp(-5 (1 - t / t_max)^2)` up to `t_max`, then 1.
pub fn gaussian_ramp(t: f64, t_max: f64) -> f64 {
    if t >= t_max {
        return 1.0;
    }
    let phase = 1.0 - t / t_max;
    (-5.0 * phase * phase).exp()
}

pub fn schedule_value(s: &RampSchedule, t: f64) -> Result<f64> {
    if t.is_nan() || t < 0.0 {
        return Err(Error::config("epoch", format!("{t} is negative")));
    }
    if !(s.t_max > 0.0) {
        return Err(Error::config("t_max", "must be positive"));
    }
    let r = gaussian_ramp(t, s.t_max);
    Ok(match s.kind {
        RampKind::LambdaCon => LAMBDA_CON_MAX * r,
        RampKind::UThre => (0.75 + 0.25 * r) * s.u_max,
    })
}
