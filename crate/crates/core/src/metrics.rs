//! Dice, average surface distance, fold aggregation, paired t-test and
//! Bland-Altman agreement data.

use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, StudentsT};

use crate::error::{Error, Result};
use crate::networks::{Pass, Segmenter};
use crate::phantom::{image_batch, DomainSample, STRUCTURES};
use crate::tensor::argmax_channels;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct DiceScore {
    /// Percent in `[0, 100]`.
    pub value: f64,
    /// Both masks were empty; the value is then 100 by convention.
    pub both_empty: bool,
}

fn same_len(pred: &[u8], gt: &[u8]) -> Result<()> {
    if pred.len() != gt.len() {
        return Err(Error::Shape(format!("prediction has {} pixels, ground truth {}", pred.len(), gt.len())));
    }
    Ok(())
}

/// `100 * 2|P ∩ G| / (|P| + |G|)` for one class.
pub fn dice(pred: &[u8], gt: &[u8], class_id: u8) -> Result<DiceScore> {
    same_len(pred, gt)?;
    let (mut p, mut g, mut both) = (0usize, 0usize, 0usize);
    for (&a, &b) in pred.iter().zip(gt) {
        let (ia, ib) = (a == class_id, b == class_id);
        p += ia as usize;
        g += ib as usize;
        both += (ia && ib) as usize;
    }
    if p + g == 0 {
        return Ok(DiceScore {
            value: 100.0,
            both_empty: true,
        });
    }
    Ok(DiceScore {
        value: 100.0 * 2.0 * both as f64 / (p + g) as f64,
        both_empty: false,
    })
}

/// Mask pixels with at least one 4-neighbour outside the mask; pixels
/// beyond the image border count as outside.
pub fn boundary(labels: &[u8], width: usize, class_id: u8) -> Vec<(usize, usize)> {
    let height = labels.len() / width.max(1);
    let inside = |r: isize, c: isize| {
        r >= 0 && c >= 0 && (r as usize) < height && (c as usize) < width && labels[r as usize * width + c as usize] == class_id
    };
    let mut out = Vec::new();
    for r in 0..height as isize {
        for c in 0..width as isize {
            if inside(r, c) && !(inside(r - 1, c) && inside(r + 1, c) && inside(r, c - 1) && inside(r, c + 1)) {
                out.push((r as usize, c as usize));
            }
        }
    }
    out
}

fn nearest(p: (usize, usize), set: &[(usize, usize)]) -> f64 {
    set.iter()
        .map(|q| {
            let dr = p.0 as f64 - q.0 as f64;
            let dc = p.1 as f64 - q.1 as f64;
            dr * dr + dc * dc
        })
        .fold(f64::INFINITY, f64::min)
        .sqrt()
}

/// Average surface distance in pixels: the mean, over boundary pixels of
/// both masks, of the distance to the other mask's nearest boundary pixel.
/// `None` when either surface is empty.
pub fn asd(pred: &[u8], gt: &[u8], width: usize, class_id: u8) -> Result<Option<f64>> {
    same_len(pred, gt)?;
    if width == 0 || pred.len() % width != 0 {
        return Err(Error::Shape(format!("{} pixels do not form rows of {width}", pred.len())));
    }
    let a = boundary(pred, width, class_id);
    let b = boundary(gt, width, class_id);
    if a.is_empty() || b.is_empty() {
        return Ok(None);
    }
    let total: f64 = a.iter().map(|&p| nearest(p, &b)).sum::<f64>() + b.iter().map(|&p| nearest(p, &a)).sum::<f64>();
    Ok(Some(total / (a.len() + b.len()) as f64))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TTest {
    pub n: usize,
    pub mean_diff: f64,
    pub t: Option<f64>,
    pub p: Option<f64>,
    /// All differences identical, so the statistic is undefined.
    pub degenerate: bool,
}

fn check_pairs(a: &[f64], b: &[f64]) -> Result<()> {
    if a.len() != b.len() {
        return Err(Error::Shape(format!("{} vs {} paired values", a.len(), b.len())));
    }
    if a.len() < 2 {
        return Err(Error::Empty("need at least two pairs".into()));
    }
    Ok(())
}

fn mean_sd(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}

/// Two-sided paired t-test on `a - b` with `n - 1` degrees of freedom.
pub fn paired_t_test(a: &[f64], b: &[f64]) -> Result<TTest> {
    check_pairs(a, b)?;
    let d: Vec<f64> = a.iter().zip(b).map(|(x, y)| x - y).collect();
    let n = d.len();
    let (mean, sd) = mean_sd(&d);
    if sd == 0.0 || !sd.is_finite() {
        return Ok(TTest {
            n,
            mean_diff: mean,
            t: None,
            p: None,
            degenerate: true,
        });
    }
    let t = mean / (sd / (n as f64).sqrt());
    let dist = StudentsT::new(0.0, 1.0, (n - 1) as f64).map_err(|e| Error::Validation(e.to_string()))?;
    let p = 2.0 * (1.0 - dist.cdf(t.abs()));
    Ok(TTest {
        n,
        mean_diff: mean,
        t: Some(t),
        p: Some(p),
        degenerate: false,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BlandAltman {
    /// `(mean_i, diff_i)` with `diff_i = a_i - b_i`.
    pub points: Vec<(f64, f64)>,
    pub bias: f64,
    pub sd: f64,
    pub lower: f64,
    pub upper: f64,
}

pub fn bland_altman(a: &[f64], b: &[f64]) -> Result<BlandAltman> {
    check_pairs(a, b)?;
    let points: Vec<(f64, f64)> = a.iter().zip(b).map(|(x, y)| ((x + y) / 2.0, x - y)).collect();
    let diffs: Vec<f64> = points.iter().map(|p| p.1).collect();
    let (bias, sd) = mean_sd(&diffs);
    Ok(BlandAltman {
        points,
        bias,
        sd,
        lower: bias - 1.96 * sd,
        upper: bias + 1.96 * sd,
    })
}

/// Scores of one sample for the foreground classes `1..C`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClassScores {
    pub dice: Vec<f64>,
    pub dice_both_empty: Vec<bool>,
    pub asd: Vec<Option<f64>>,
}

pub fn class_scores(pred: &[u8], gt: &[u8], width: usize, num_classes: usize) -> Result<ClassScores> {
    let mut s = ClassScores {
        dice: Vec::new(),
        dice_both_empty: Vec::new(),
        asd: Vec::new(),
    };
    for c in 1..num_classes as u8 {
        let d = dice(pred, gt, c)?;
        s.dice.push(d.value);
        s.dice_both_empty.push(d.both_empty);
        s.asd.push(asd(pred, gt, width, c)?);
    }
    Ok(s)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SampleScores {
    pub id: String,
    pub scores: ClassScores,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FoldReport {
    pub fold: usize,
    pub class_names: Vec<String>,
    pub samples: Vec<SampleScores>,
    pub class_dice: Vec<f64>,
    /// `None` when no sample had a valid distance for the class.
    pub class_asd: Vec<Option<f64>>,
    pub asd_invalid: Vec<usize>,
    pub mean_dice: f64,
    pub mean_asd: Option<f64>,
}

fn mean(xs: impl Iterator<Item = f64>) -> Option<f64> {
    let (s, n) = xs.fold((0.0, 0usize), |(s, n), x| (s + x, n + 1));
    (n > 0).then(|| s / n as f64)
}

pub fn class_name(class_id: usize) -> String {
    STRUCTURES
        .get(class_id.wrapping_sub(1))
        .map(|s| s.to_string())
        .unwrap_or_else(|| format!("class{class_id}"))
}

/// Aggregates per-sample scores: class means over valid entries, then the
/// mean over classes.
pub fn aggregate(fold: usize, samples: Vec<SampleScores>, num_classes: usize) -> Result<FoldReport> {
    if samples.is_empty() {
        return Err(Error::Empty("test set".into()));
    }
    let k = num_classes - 1;
    let class_dice: Vec<f64> = (0..k)
        .map(|c| mean(samples.iter().map(|s| s.scores.dice[c])).expect("nonempty"))
        .collect();
    let class_asd: Vec<Option<f64>> = (0..k).map(|c| mean(samples.iter().filter_map(|s| s.scores.asd[c]))).collect();
    let asd_invalid = (0..k)
        .map(|c| samples.iter().filter(|s| s.scores.asd[c].is_none()).count())
        .collect();
    Ok(FoldReport {
        fold,
        class_names: (1..num_classes).map(class_name).collect(),
        mean_dice: mean(class_dice.iter().copied()).expect("at least one class"),
        mean_asd: mean(class_asd.iter().flatten().copied()),
        samples,
        class_dice,
        class_asd,
        asd_invalid,
    })
}

/// Scores label predictions against ground truth.
pub fn evaluate_predictions(
    fold: usize,
    test_set: &[&DomainSample],
    predictions: &[Vec<u8>],
    num_classes: usize,
) -> Result<FoldReport> {
    if predictions.len() != test_set.len() {
        return Err(Error::Shape(format!("{} predictions for {} samples", predictions.len(), test_set.len())));
    }
    let samples = test_set
        .iter()
        .zip(predictions)
        .map(|(s, p)| {
            let gt = s
                .label
                .as_ref()
                .ok_or_else(|| Error::Validation(format!("{} has no label", s.id)))?;
            Ok(SampleScores {
                id: s.id.clone(),
                scores: class_scores(p, gt, s.width, num_classes)?,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    aggregate(fold, samples, num_classes)
}

const EVAL_BATCH: usize = 4;

/// Evaluates the student alone, without dropout.
pub fn evaluate_fold(student: &Segmenter<f32>, test_set: &[&DomainSample], fold: usize) -> Result<FoldReport> {
    if test_set.is_empty() {
        return Err(Error::Empty("test set".into()));
    }
    // Evaluation passes draw no random numbers; the generator only satisfies
    // the forward signature.
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let mut predictions = Vec::with_capacity(test_set.len());
    for chunk in test_set.chunks(EVAL_BATCH) {
        let logits = student.logits(&image_batch(chunk)?, Pass::Eval, &mut rng)?;
        predictions.extend(argmax_channels(&logits));
    }
    evaluate_predictions(fold, test_set, &predictions, student.num_classes())
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

/// Per-sample rows: `sample,class,dice,asd,dice_both_empty,asd_valid`.
pub fn write_fold_csv(report: &FoldReport, path: &Path) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(["sample", "class", "dice", "asd", "dice_both_empty", "asd_valid"])?;
    for s in &report.samples {
        for (c, name) in report.class_names.iter().enumerate() {
            w.write_record([
                s.id.clone(),
                name.clone(),
                s.scores.dice[c].to_string(),
                fmt_opt(s.scores.asd[c]),
                s.scores.dice_both_empty[c].to_string(),
                s.scores.asd[c].is_some().to_string(),
            ])?;
        }
    }
    w.flush()?;
    Ok(())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FoldSummary {
    pub fold: usize,
    pub num_samples: usize,
    pub class_names: Vec<String>,
    pub class_dice: Vec<f64>,
    pub class_asd: Vec<Option<f64>>,
    pub asd_invalid: Vec<usize>,
    pub mean_dice: f64,
    pub mean_asd: Option<f64>,
}

impl From<&FoldReport> for FoldSummary {
    fn from(r: &FoldReport) -> Self {
        Self {
            fold: r.fold,
            num_samples: r.samples.len(),
            class_names: r.class_names.clone(),
            class_dice: r.class_dice.clone(),
            class_asd: r.class_asd.clone(),
            asd_invalid: r.asd_invalid.clone(),
            mean_dice: r.mean_dice,
            mean_asd: r.mean_asd,
        }
    }
}

pub fn write_fold_json(report: &FoldReport, path: &Path) -> Result<()> {
    std::fs::write(path, serde_json::to_string_pretty(&FoldSummary::from(report))?)?;
    Ok(())
}

pub fn write_t_test_csv(rows: &[(String, TTest)], path: &Path) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(["comparison", "n", "mean_diff", "t", "p", "degenerate"])?;
    for (name, t) in rows {
        w.write_record([
            name.clone(),
            t.n.to_string(),
            t.mean_diff.to_string(),
            fmt_opt(t.t),
            fmt_opt(t.p),
            t.degenerate.to_string(),
        ])?;
    }
    w.flush()?;
    Ok(())
}

/// Point rows followed by the bias and limit lines.
pub fn write_bland_altman_csv(ba: &BlandAltman, path: &Path) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(["kind", "mean", "diff"])?;
    for (m, d) in &ba.points {
        w.write_record(["point".to_string(), m.to_string(), d.to_string()])?;
    }
    for (k, v) in [("bias", ba.bias), ("lower", ba.lower), ("upper", ba.upper)] {
        w.write_record([k.to_string(), String::new(), v.to_string()])?;
    }
    w.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn grid(h: usize, w: usize, cells: &[(usize, usize)], v: u8) -> Vec<u8> {
        let mut g = vec![0u8; h * w];
        for &(r, c) in cells {
            g[r * w + c] = v;
        }
        g
    }

    #[test]
    fn dice_examples() {
        let a = grid(4, 4, &[(0, 0), (0, 1), (1, 0), (1, 1)], 1);
        assert_eq!(dice(&a, &a, 1).unwrap().value, 100.0);
        let b = grid(4, 4, &[(2, 2), (2, 3), (3, 2), (3, 3)], 1);
        assert_eq!(dice(&a, &b, 1).unwrap().value, 0.0);
        let c = grid(4, 4, &[(0, 0), (0, 1), (2, 0), (2, 1)], 1);
        assert_eq!(dice(&a, &c, 1).unwrap().value, 50.0);
        let e = dice(&a, &a, 2).unwrap();
        assert!(e.both_empty && e.value == 100.0);
        assert!(dice(&a, &a[..3], 1).is_err());
    }

    #[test]
    fn asd_examples() {
        let a = grid(8, 8, &[(1, 1), (2, 1), (3, 1), (4, 1)], 1);
        assert_eq!(asd(&a, &a, 8, 1).unwrap(), Some(0.0));
        let b = grid(8, 8, &[(1, 4), (2, 4), (3, 4), (4, 4)], 1);
        assert_eq!(asd(&a, &b, 8, 1).unwrap(), Some(3.0));
        let empty = vec![0u8; 64];
        assert_eq!(asd(&empty, &a, 8, 1).unwrap(), None);
    }

    #[test]
    fn boundary_treats_the_border_as_outside() {
        let full = vec![1u8; 9];
        let b = boundary(&full, 3, 1);
        assert_eq!(b.len(), 8);
        assert!(!b.contains(&(1, 1)));
    }

    #[test]
    fn t_test_examples() {
        let a = [1.0, 2.0, 3.0, 4.0];
        let z = [0.0; 4];
        let r = paired_t_test(&a, &z).unwrap();
        let sd = (5.0f64 / 3.0).sqrt();
        assert!((r.t.unwrap() - 2.5 / (sd / 2.0)).abs() < 1e-12);
        assert!((r.p.unwrap() - 0.0305).abs() < 1e-3);
        let s = paired_t_test(&z, &a).unwrap();
        assert_eq!(s.t.unwrap(), -r.t.unwrap());
        assert_eq!(s.p, r.p);
        assert!(paired_t_test(&a, &a).unwrap().degenerate);
        assert!(paired_t_test(&a, &a[..3]).is_err());
    }

    #[test]
    fn bland_altman_examples() {
        let a = [1.0, 2.0, 5.0];
        let r = bland_altman(&a, &a).unwrap();
        assert_eq!((r.bias, r.lower, r.upper), (0.0, 0.0, 0.0));
        let b: Vec<f64> = a.iter().map(|x| x - 1.0).collect();
        let r = bland_altman(&a, &b).unwrap();
        assert_eq!((r.bias, r.sd, r.lower, r.upper), (1.0, 0.0, 1.0, 1.0));
    }

    #[test]
    fn report_means_and_degenerate_predictors() {
        let gt = grid(4, 4, &[(0, 0), (1, 1)], 1);
        let s = DomainSample {
            id: "a".into(),
            domain: crate::phantom::Domain::Test,
            height: 4,
            width: 4,
            image: vec![0.0; 16],
            label: Some(gt.clone()),
        };
        let r = evaluate_predictions(0, &[&s], &[gt.clone()], 3).unwrap();
        assert_eq!(r.class_dice, vec![100.0, 100.0]);
        assert_eq!(r.class_asd[0], Some(0.0));
        let bg = evaluate_predictions(0, &[&s], &[vec![0; 16]], 3).unwrap();
        assert_eq!(bg.class_dice[0], 0.0);
        assert_eq!(bg.asd_invalid, vec![1, 1]);
        assert!(evaluate_predictions(0, &[], &[], 3).is_err());
    }
}
