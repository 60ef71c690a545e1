//! Inter-domain teacher: hybrid segmentation loss and importance-weighted
//! knowledge distillation.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{Tape, Var};
use crate::error::{Error, Result};
use crate::networks::{Model, Pass, Segmenter};
use crate::nn::Adam;
use crate::tensor::{Real, Tensor};

/// Clamp applied to probabilities inside cross-entropy logarithms.
pub const CE_EPS: f64 = 1e-6;
/// Clamp applied to discriminator scores before computing importance weights.
pub const SCORE_EPS: f64 = 1e-3;
/// Smoothing term of the soft Dice loss.
pub const DICE_SMOOTH: f64 = 1e-5;
pub const DEFAULT_W_MAX: f64 = 10.0;

/// Value of a scalar loss with its gradient with respect to one input.
#[derive(Clone, Debug)]
pub struct LossGrad<T> {
    pub value: T,
    pub grad: Tensor<T>,
}

#[derive(Clone, Debug)]
pub struct HybridLoss<T> {
    pub ce: T,
    pub dice: T,
    pub grad: Tensor<T>,
}

impl<T: Real> HybridLoss<T> {
    pub fn total(&self) -> T {
        self.ce + self.dice
    }
}

fn check_labels(probs_shape: (usize, usize, usize, usize), labels: &[&[u8]]) -> Result<()> {
    let (n, c, h, w) = probs_shape;
    if labels.len() != n {
        return Err(Error::Shape(format!("{} label maps for a batch of {n}", labels.len())));
    }
    for l in labels {
        if l.len() != h * w {
            return Err(Error::Shape(format!("label map of {} pixels, expected {}", l.len(), h * w)));
        }
        if let Some(&bad) = l.iter().find(|&&v| v as usize >= c) {
            return Err(Error::LabelOutOfRange {
                value: bad as usize,
                classes: c,
            });
        }
    }
    Ok(())
}

/// Pixel-averaged cross-entropy plus class-averaged soft Dice loss, with the
/// gradient with respect to the probabilities.
///
/// Dice sums run over the whole batch. Every class, background included,
/// contributes one term.
pub fn hybrid_seg_loss<T: Real>(probs: &Tensor<T>, labels: &[&[u8]]) -> Result<HybridLoss<T>> {
    let dims = probs.dims4();
    check_labels(dims, labels)?;
    let (n, c, h, w) = dims;
    let hw = h * w;
    let m = (n * hw) as f64;
    let (lo, hi) = (CE_EPS, 1.0 - CE_EPS);
    let mut grad = Tensor::zeros(probs.shape());

    let mut ce = 0.0;
    let mut inter = vec![0.0f64; c];
    let mut psum = vec![0.0f64; c];
    let mut ysum = vec![0.0f64; c];
    for (s, lbl) in labels.iter().enumerate() {
        let p = probs.sample(s);
        for k in 0..c {
            psum[k] += p[k * hw..(k + 1) * hw].iter().map(|v| v.f64()).sum::<f64>();
        }
        for (px, &l) in lbl.iter().enumerate() {
            let l = l as usize;
            let pv = p[l * hw + px].f64();
            ce -= pv.clamp(lo, hi).ln();
            inter[l] += pv;
            ysum[l] += 1.0;
            if pv > lo && pv < hi {
                grad.data_mut()[(s * c + l) * hw + px] = T::of(-1.0 / (m * pv));
            }
        }
    }
    ce /= m;

    let mut dice_mean = 0.0;
    let mut coef_y = vec![0.0f64; c];
    let mut coef_all = vec![0.0f64; c];
    for k in 0..c {
        let denom = psum[k] + ysum[k] + DICE_SMOOTH;
        let num = 2.0 * inter[k] + DICE_SMOOTH;
        dice_mean += num / denom;
        // d(1 - mean dice)/dp = -(2 y denom - num) / (C denom^2)
        coef_y[k] = -2.0 / (c as f64 * denom);
        coef_all[k] = num / (c as f64 * denom * denom);
    }
    let dice = 1.0 - dice_mean / c as f64;
    for (s, lbl) in labels.iter().enumerate() {
        let g = &mut grad.data_mut()[s * c * hw..(s + 1) * c * hw];
        for k in 0..c {
            for v in &mut g[k * hw..(k + 1) * hw] {
                *v += T::of(coef_all[k]);
            }
        }
        for (px, &l) in lbl.iter().enumerate() {
            let l = l as usize;
            g[l * hw + px] += T::of(coef_y[l]);
        }
    }
    Ok(HybridLoss {
        ce: T::of(ce),
        dice: T::of(dice),
        grad,
    })
}

/// Pixel-averaged cross-entropy only (pseudo-label targets).
pub fn cross_entropy_loss<T: Real>(probs: &Tensor<T>, labels: &[&[u8]]) -> Result<LossGrad<T>> {
    let dims = probs.dims4();
    check_labels(dims, labels)?;
    let (n, c, h, w) = dims;
    let hw = h * w;
    let m = (n * hw) as f64;
    let mut grad = Tensor::zeros(probs.shape());
    let mut ce = 0.0;
    for (s, lbl) in labels.iter().enumerate() {
        let p = probs.sample(s);
        for (px, &l) in lbl.iter().enumerate() {
            let idx = (l as usize) * hw + px;
            let pv = p[idx].f64();
            ce -= pv.clamp(CE_EPS, 1.0 - CE_EPS).ln();
            if pv > CE_EPS && pv < 1.0 - CE_EPS {
                grad.data_mut()[s * c * hw + idx] = T::of(-1.0 / (m * pv));
            }
        }
    }
    Ok(LossGrad {
        value: T::of(ce / m),
        grad,
    })
}

/// Density-ratio weight of one synthetic sample derived from the target
/// discriminator's score.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ImportanceWeight {
    pub raw_d_score: f64,
    pub weight: f64,
    pub clamped: bool,
}

impl ImportanceWeight {
    /// A weight of one that carries no reliability information.
    pub fn uniform() -> Self {
        Self {
            raw_d_score: 0.5,
            weight: 1.0,
            clamped: false,
        }
    }
}

/// `w = d / (1 - d)` with `d` clamped to `[eps, 1 - eps]`, capped at `w_max`.
pub fn importance_weight(d_score: f64, w_max: f64) -> Result<ImportanceWeight> {
    if !d_score.is_finite() {
        return Err(Error::NonFinite(format!("discriminator score {d_score}")));
    }
    let d = d_score.clamp(SCORE_EPS, 1.0 - SCORE_EPS);
    let raw = d / (1.0 - d);
    let clamped = raw > w_max;
    Ok(ImportanceWeight {
        raw_d_score: d_score,
        weight: raw.min(w_max),
        clamped,
    })
}

/// Teacher probabilities used as distillation targets. Holding a plain
/// tensor (not a tape variable) keeps them out of the student's graph.
#[derive(Clone, Debug)]
pub struct SoftTarget<T> {
    probs: Tensor<T>,
}

impl<T: Real> SoftTarget<T> {
    pub fn new(probs: Tensor<T>) -> Result<Self> {
        let (n, c, h, w) = probs.dims4();
        let hw = h * w;
        for s in 0..n {
            let p = probs.sample(s);
            for px in 0..hw {
                let total: f64 = (0..c).map(|k| p[k * hw + px].f64()).sum();
                if (total - 1.0).abs() > 1e-5 {
                    return Err(Error::Validation(format!(
                        "soft target pixel {px} of sample {s} sums to {total}"
                    )));
                }
            }
        }
        Ok(Self { probs })
    }

    pub fn probs(&self) -> &Tensor<T> {
        &self.probs
    }
}

/// Mean over the batch of `w_i * CE(teacher_i, student_i)`, where the
/// cross-entropy sums over classes and averages over pixels.
///
/// With `renormalize`, weights are divided by their batch mean first.
pub fn weighted_kd_loss<T: Real>(
    teacher: &SoftTarget<T>,
    student_probs: &Tensor<T>,
    weights: &[ImportanceWeight],
    renormalize: bool,
) -> Result<LossGrad<T>> {
    let t = teacher.probs();
    if t.shape() != student_probs.shape() {
        return Err(Error::Shape(format!(
            "teacher {:?} vs student {:?}",
            t.shape(),
            student_probs.shape()
        )));
    }
    let (n, c, h, w) = t.dims4();
    if weights.len() != n {
        return Err(Error::Shape(format!("{} weights for a batch of {n}", weights.len())));
    }
    let mut ws: Vec<f64> = weights.iter().map(|w| w.weight).collect();
    if renormalize {
        let mean = ws.iter().sum::<f64>() / n as f64;
        if mean > 0.0 {
            ws.iter_mut().for_each(|w| *w /= mean);
        }
    }
    let hw = (h * w) as f64;
    let mut grad = Tensor::zeros(t.shape());
    let mut total = 0.0;
    let per = c * h * w;
    for (i, &wi) in ws.iter().enumerate() {
        let tp = t.sample(i);
        let sp = student_probs.sample(i);
        let mut ce = 0.0;
        let g = &mut grad.data_mut()[i * per..(i + 1) * per];
        for j in 0..per {
            let (tv, sv) = (tp[j].f64(), sp[j].f64());
            ce -= tv * sv.clamp(CE_EPS, 1.0 - CE_EPS).ln();
            if sv > CE_EPS && sv < 1.0 - CE_EPS {
                g[j] = T::of(-wi * tv / (sv * hw * n as f64));
            }
        }
        total += wi * ce / hw;
    }
    Ok(LossGrad {
        value: T::of(total / n as f64),
        grad,
    })
}

/// Inserts the hybrid segmentation loss of `probs` on the tape.
pub fn seg_loss_node<T: Real>(tape: &mut Tape<T>, probs: Var, labels: &[&[u8]]) -> Result<(Var, HybridLoss<T>)> {
    let loss = hybrid_seg_loss(tape.value(probs), labels)?;
    let node = tape.loss(loss.total(), vec![(probs, loss.grad.clone())]);
    Ok((node, loss))
}

/// One optimizer step of the inter-domain teacher on translated source
/// images supervised by the source labels. Returns `(ce, dice)`.
pub fn inter_teacher_step<T: Real, R: Rng + ?Sized>(
    teacher: &mut Segmenter<T>,
    optimizer: &mut Adam<T>,
    synthetic: &Tensor<T>,
    labels: &[&[u8]],
    rng: &mut R,
) -> Result<(T, T)> {
    let mut tape = Tape::new();
    let bound = teacher.params().bind(&mut tape, true);
    let x = tape.constant(synthetic.clone());
    let probs = teacher.probs(&mut tape, &bound, x, Pass::Train, rng)?;
    let (root, loss) = seg_loss_node(&mut tape, probs, labels)?;
    if !loss.total().is_finite() {
        return Err(Error::NonFinite(format!(
            "inter-domain teacher loss ce={} dice={}",
            loss.ce, loss.dice
        )));
    }
    let grads = tape.backward(root);
    let g = bound.grads(&grads, teacher.params());
    optimizer.step(teacher.params_mut(), &g)?;
    Ok((loss.ce, loss.dice))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn random_probs(n: usize, c: usize, h: usize, w: usize, seed: u64) -> Tensor<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let hw = h * w;
        let mut data = vec![0.0; n * c * hw];
        for s in 0..n {
            for px in 0..hw {
                let raw: Vec<f64> = (0..c).map(|_| rng.random_range(0.05..1.0)).collect();
                let z: f64 = raw.iter().sum();
                for k in 0..c {
                    data[(s * c + k) * hw + px] = raw[k] / z;
                }
            }
        }
        Tensor::from_vec(&[n, c, h, w], data).unwrap()
    }

    fn random_labels(n: usize, hw: usize, c: u8, seed: u64) -> Vec<Vec<u8>> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..n).map(|_| (0..hw).map(|_| rng.random_range(0..c)).collect()).collect()
    }

    fn refs(v: &[Vec<u8>]) -> Vec<&[u8]> {
        v.iter().map(|x| x.as_slice()).collect()
    }

    #[test]
    fn perfect_prediction_has_near_zero_loss() {
        let labels = random_labels(2, 16, 3, 1);
        let probs = crate::tensor::one_hot::<f64>(&refs(&labels), 3, 4, 4).unwrap();
        let l = hybrid_seg_loss(&probs, &refs(&labels)).unwrap();
        assert!((l.ce - (-(1.0 - CE_EPS).ln())).abs() < 1e-12);
        assert!(l.ce < 1e-3 && l.dice < 1e-3);
    }

    #[test]
    fn uniform_prediction_costs_ln_c() {
        let labels = random_labels(1, 16, 8, 2);
        let probs = Tensor::full(&[1, 8, 4, 4], 1.0 / 8.0);
        let l = hybrid_seg_loss(&probs, &refs(&labels)).unwrap();
        assert!((l.ce - 8f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn hybrid_matches_brute_force_sum() {
        let (c, h, w) = (3, 4, 4);
        let probs = random_probs(1, c, h, w, 3);
        let labels = random_labels(1, h * w, c as u8, 4);
        let l = hybrid_seg_loss(&probs, &refs(&labels)).unwrap();
        // Independent elementwise evaluation.
        let p = |k: usize, i: usize| probs.data()[k * h * w + i];
        let mut ce = 0.0;
        for i in 0..h * w {
            ce += -p(labels[0][i] as usize, i).ln();
        }
        ce /= (h * w) as f64;
        let mut dice = 0.0;
        for k in 0..c {
            let (mut inter, mut ps, mut ys) = (0.0, 0.0, 0.0);
            for i in 0..h * w {
                let y = if labels[0][i] as usize == k { 1.0 } else { 0.0 };
                inter += p(k, i) * y;
                ps += p(k, i);
                ys += y;
            }
            dice += (2.0 * inter + DICE_SMOOTH) / (ps + ys + DICE_SMOOTH);
        }
        let dice = 1.0 - dice / c as f64;
        assert!((l.ce - ce).abs() < 1e-12);
        assert!((l.dice - dice).abs() < 1e-12);
    }

    #[test]
    fn hybrid_gradient_matches_finite_differences() {
        let (c, h, w) = (3, 2, 2);
        let probs = random_probs(2, c, h, w, 5);
        let labels = random_labels(2, h * w, c as u8, 6);
        let l = hybrid_seg_loss(&probs, &refs(&labels)).unwrap();
        let eps = 1e-6;
        for j in 0..probs.len() {
            let f = |d: f64| {
                let mut p = probs.clone();
                p.data_mut()[j] += d;
                hybrid_seg_loss(&p, &refs(&labels)).unwrap().total()
            };
            let fd = (f(eps) - f(-eps)) / (2.0 * eps);
            assert!((fd - l.grad.data()[j]).abs() < 1e-6, "{j}: {fd} vs {}", l.grad.data()[j]);
        }
    }

    #[test]
    fn soft_dice_is_minimized_at_the_label_class() {
        // One pixel, three classes, grid over the simplex.
        let label = vec![vec![1u8]];
        let steps = 20;
        let mut best = (f64::INFINITY, (0.0, 0.0, 0.0));
        for a in 0..=steps {
            for b in 0..=(steps - a) {
                let p0 = a as f64 / steps as f64;
                let p1 = b as f64 / steps as f64;
                let p2 = 1.0 - p0 - p1;
                let probs = Tensor::from_vec(&[1, 3, 1, 1], vec![p0, p1, p2]).unwrap();
                let d = hybrid_seg_loss(&probs, &refs(&label)).unwrap().dice;
                if d < best.0 {
                    best = (d, (p0, p1, p2));
                }
            }
        }
        assert_eq!(best.1, (0.0, 1.0, 0.0));
    }

    #[test]
    fn label_errors_are_reported() {
        let probs = Tensor::<f64>::full(&[1, 3, 2, 2], 1.0 / 3.0);
        let bad = vec![vec![0u8, 1, 2, 3]];
        assert!(matches!(
            hybrid_seg_loss(&probs, &refs(&bad)),
            Err(Error::LabelOutOfRange { value: 3, classes: 3 })
        ));
        let short = vec![vec![0u8; 3]];
        assert!(matches!(hybrid_seg_loss(&probs, &refs(&short)), Err(Error::Shape(_))));
    }

    #[test]
    fn importance_weight_examples() {
        let w = importance_weight(0.5, 10.0).unwrap();
        assert!((w.weight - 1.0).abs() < 1e-12 && !w.clamped);
        let w = importance_weight(0.8, 10.0).unwrap();
        assert!((w.weight - 4.0).abs() < 1e-12);
        let w = importance_weight(0.999, 10.0).unwrap();
        assert!((0.999f64 / 0.001 - 999.0).abs() < 1e-6);
        assert_eq!(w.weight, 10.0);
        assert!(w.clamped);
        assert!(importance_weight(f64::NAN, 10.0).is_err());
    }

    #[test]
    fn importance_weight_is_monotone() {
        let mut prev = 0.0;
        for i in 0..=1000 {
            let w = importance_weight(i as f64 / 1000.0, 10.0).unwrap().weight;
            assert!(w >= prev);
            prev = w;
        }
    }

    #[test]
    fn kd_of_identical_outputs_is_weighted_teacher_entropy() {
        let t = random_probs(3, 4, 3, 3, 7);
        let teacher = SoftTarget::new(t.clone()).unwrap();
        let weights: Vec<_> = [0.3, 0.5, 0.9]
            .iter()
            .map(|&d| importance_weight(d, 10.0).unwrap())
            .collect();
        let l = weighted_kd_loss(&teacher, &t, &weights, false).unwrap();
        let mut expected = 0.0;
        for (i, w) in weights.iter().enumerate() {
            let s = t.sample(i);
            let entropy: f64 = -s.iter().map(|p| p * p.ln()).sum::<f64>() / 9.0;
            expected += w.weight * entropy;
        }
        expected /= 3.0;
        assert!((l.value - expected).abs() < 1e-12);
    }

    #[test]
    fn kd_is_linear_in_the_weights() {
        let t = random_probs(2, 3, 2, 2, 8);
        let s = random_probs(2, 3, 2, 2, 9);
        let teacher = SoftTarget::new(t).unwrap();
        let mk = |w: f64| ImportanceWeight {
            raw_d_score: 0.5,
            weight: w,
            clamped: false,
        };
        let zero = weighted_kd_loss(&teacher, &s, &[mk(0.0), mk(0.0)], false).unwrap();
        assert_eq!(zero.value, 0.0);
        let one = weighted_kd_loss(&teacher, &s, &[mk(0.7), mk(1.3)], false).unwrap();
        let two = weighted_kd_loss(&teacher, &s, &[mk(1.4), mk(2.6)], false).unwrap();
        assert!((two.value - 2.0 * one.value).abs() < 1e-12);
        assert!(weighted_kd_loss(&teacher, &s, &[mk(1.0)], false).is_err());
    }

    #[test]
    fn kd_with_discriminator_weights_equals_ratio_form() {
        let t = random_probs(2, 3, 2, 2, 10);
        let s = random_probs(2, 3, 2, 2, 11);
        let teacher = SoftTarget::new(t.clone()).unwrap();
        let d = [0.3, 0.7];
        let weights: Vec<_> = d.iter().map(|&x| importance_weight(x, 10.0).unwrap()).collect();
        let l = weighted_kd_loss(&teacher, &s, &weights, false).unwrap();
        let mut direct = 0.0;
        for i in 0..2 {
            let ce: f64 = -t.sample(i).iter().zip(s.sample(i)).map(|(a, b)| a * b.ln()).sum::<f64>() / 4.0;
            direct += d[i] / (1.0 - d[i]) * ce;
        }
        assert!((l.value - direct / 2.0).abs() < 1e-12);
    }

    #[test]
    fn renormalized_weights_have_unit_mean() {
        let t = random_probs(2, 3, 2, 2, 12);
        let teacher = SoftTarget::new(t.clone()).unwrap();
        let mk = |w: f64| ImportanceWeight {
            raw_d_score: 0.5,
            weight: w,
            clamped: false,
        };
        let a = weighted_kd_loss(&teacher, &t, &[mk(2.0), mk(6.0)], true).unwrap();
        let b = weighted_kd_loss(&teacher, &t, &[mk(0.5), mk(1.5)], false).unwrap();
        assert!((a.value - b.value).abs() < 1e-12);
    }

    #[test]
    fn kd_gradient_matches_finite_differences() {
        let t = random_probs(2, 3, 2, 2, 13);
        let s = random_probs(2, 3, 2, 2, 14);
        let teacher = SoftTarget::new(t).unwrap();
        let w = [importance_weight(0.6, 10.0).unwrap(), importance_weight(0.2, 10.0).unwrap()];
        let l = weighted_kd_loss(&teacher, &s, &w, false).unwrap();
        for j in 0..s.len() {
            let f = |d: f64| {
                let mut p = s.clone();
                p.data_mut()[j] += d;
                weighted_kd_loss(&teacher, &p, &w, false).unwrap().value
            };
            let fd = (f(1e-6) - f(-1e-6)) / 2e-6;
            assert!((fd - l.grad.data()[j]).abs() < 1e-6);
        }
    }

    #[test]
    fn soft_target_rejects_unnormalized_maps() {
        assert!(SoftTarget::new(Tensor::<f64>::full(&[1, 2, 1, 1], 0.6)).is_err());
    }
}
