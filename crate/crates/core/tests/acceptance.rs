//! One pass/fail line per acceptance criterion.
//!
//! Criterion 6 reads the recorded ordering experiment under
//! `results/ordering` (produced by `dtpp ablate`); it is reported but not
//! asserted, since rerunning it takes hours.

use std::fs;
use std::path::{Path, PathBuf};

use dualteacher::alignment::{gan_objective, l1_loss};
use dualteacher::config::{Mode, TrainConfig};
use dualteacher::consistency::{
    ema_blend, ema_update, entropy, masked_consistency_loss, mc_uncertainty, schedule_value, EmaState, RampSchedule,
    UncertaintyMap,
};
use dualteacher::distill::{hybrid_seg_loss, importance_weight, weighted_kd_loss, ImportanceWeight, SoftTarget};
use dualteacher::metrics::{asd, dice, evaluate_fold, paired_t_test, write_fold_json};
use dualteacher::networks::{Model, Segmenter, SegmenterConfig};
use dualteacher::nn::ParamSet;
use dualteacher::phantom::{generate_phantom, make_folds, Dataset, PhantomSpec, SplitCounts};
use dualteacher::seeding::stream_rng;
use dualteacher::trainer::{read_log, student_objective, train_iteration, IterationBatches, RunState, StudentParts, TrainData, Trainer};
use dualteacher::Tensor;
use rand::Rng;

type Check = std::result::Result<String, String>;

fn ensure(ok: bool, msg: impl Into<String>) -> std::result::Result<(), String> {
    if ok {
        Ok(())
    } else {
        Err(msg.into())
    }
}

fn close(a: f64, b: f64, tol: f64, what: &str) -> std::result::Result<(), String> {
    ensure((a - b).abs() <= tol, format!("{what}: {a} vs {b}"))
}

fn tiny_spec() -> PhantomSpec {
    PhantomSpec {
        image_size: 16,
        num_classes: 4,
        num_samples_per_split: SplitCounts {
            source: 4,
            labeled_target: 8,
            unlabeled_target: 8,
            test: 0,
        },
        seed: 11,
        ..PhantomSpec::default()
    }
}

fn tiny_config(mode: Mode) -> TrainConfig {
    TrainConfig::default()
        .with_overrides(&[
            format!("mode={}", mode.name()),
            "segmenter.num_classes=4".into(),
            "segmenter.base_width=2".into(),
            "generator.width=2".into(),
            "generator.res_blocks=1".into(),
            "discriminator.width=2".into(),
            "n_passes=8".into(),
            "epochs=2".into(),
            "t_max=2".into(),
        ])
        .unwrap()
}

fn random_probs<R: Rng>(rng: &mut R, n: usize, c: usize, hw: usize) -> Tensor<f64> {
    let mut data = vec![0.0; n * c * hw];
    for s in 0..n {
        for px in 0..hw {
            let raw: Vec<f64> = (0..c).map(|_| rng.random_range(-4.0..4.0f64).exp()).collect();
            let z: f64 = raw.iter().sum();
            for k in 0..c {
                data[(s * c + k) * hw + px] = raw[k] / z;
            }
        }
    }
    Tensor::from_vec(&[n, c, hw, 1], data).unwrap()
}

/// Central differences of `f` against `grad`, relative to the larger magnitude.
fn fd_check(x: &Tensor<f64>, grad: &Tensor<f64>, f: impl Fn(&Tensor<f64>) -> f64, what: &str) -> std::result::Result<(), String> {
    let h = 1e-6;
    for i in 0..x.len() {
        let mut up = x.clone();
        up.data_mut()[i] += h;
        let mut down = x.clone();
        down.data_mut()[i] -= h;
        let fd = (f(&up) - f(&down)) / (2.0 * h);
        let an = grad.data()[i];
        let scale = fd.abs().max(an.abs()).max(1e-8);
        ensure((fd - an).abs() / scale <= 1e-3, format!("{what} gradient {i}: analytic {an} vs numeric {fd}"))?;
    }
    Ok(())
}

fn loss_fidelity() -> Check {
    let mut rng = stream_rng(101, 0, 0);
    let mut checked = 0;

    // Adversarial objective.
    let half = Tensor::full(&[2, 1, 4, 4], 0.5f64);
    close(gan_objective(&half, &half).unwrap().value, -2.0 * 2f64.ln(), 1e-12, "adv at chance")?;
    let perfect = gan_objective(&Tensor::full(&[2, 1, 4, 4], 1.0f64), &Tensor::full(&[2, 1, 4, 4], 0.0)).unwrap();
    close(perfect.value, 2.0 * (1.0 - 1e-3f64).ln(), 1e-12, "adv perfect")?;
    let real = Tensor::from_vec(&[1, 1, 3, 3], (0..9).map(|_| rng.random_range(0.05..0.95)).collect()).unwrap();
    let fake = Tensor::from_vec(&[1, 1, 3, 3], (0..9).map(|_| rng.random_range(0.05..0.95)).collect()).unwrap();
    let g = gan_objective(&real, &fake).unwrap();
    fd_check(&fake, &g.grad_fake, |f| gan_objective(&real, f).unwrap().value, "adv")?;
    checked += 3;

    // Cycle L1.
    let x = Tensor::from_vec(&[1, 1, 4, 4], (0..16).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap();
    close(l1_loss(&x, &x).unwrap().value, 0.0, 0.0, "identity cycle")?;
    close(l1_loss(&x.map(|v| v + 0.5), &x).unwrap().value, 0.5, 1e-12, "offset cycle")?;
    let y = Tensor::from_vec(&[1, 1, 4, 4], (0..16).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap();
    let brute = x.data().iter().zip(y.data()).map(|(a, b)| (a - b).abs()).sum::<f64>() / 16.0;
    close(l1_loss(&y, &x).unwrap().value, brute, 1e-12, "cycle oracle")?;
    checked += 3;

    // Hybrid segmentation loss.
    let labels: Vec<u8> = (0..2 * 16).map(|_| rng.random_range(0..3)).collect();
    let refs: Vec<&[u8]> = labels.chunks(16).collect();
    let mut onehot = Tensor::zeros(&[2, 3, 4, 4]);
    for (i, &l) in labels.iter().enumerate() {
        let (s, px) = (i / 16, i % 16);
        onehot.data_mut()[(s * 3 + l as usize) * 16 + px] = 1.0f64;
    }
    let perfect = hybrid_seg_loss(&onehot, &refs).unwrap();
    ensure(perfect.ce.abs() < 1e-3 && perfect.dice.abs() < 1e-3, "perfect prediction loss")?;
    let uni_labels = vec![0u8; 16];
    let uniform = hybrid_seg_loss(&Tensor::full(&[1, 8, 4, 4], 0.125f64), &[&uni_labels]).unwrap();
    close(uniform.ce, 8f64.ln(), 1e-12, "uniform CE")?;
    let probs = random_probs(&mut rng, 2, 3, 16);
    let hl = hybrid_seg_loss(&probs, &refs).unwrap();
    let (mut ce, mut inter, mut ps, mut ys) = (0.0, [0.0; 3], [0.0; 3], [0.0; 3]);
    for s in 0..2 {
        for px in 0..16 {
            for k in 0..3 {
                let p = probs.data()[(s * 3 + k) * 16 + px];
                let y = (labels[s * 16 + px] as usize == k) as u8 as f64;
                ce -= y * p.max(1e-6).ln();
                inter[k] += p * y;
                ps[k] += p;
                ys[k] += y;
            }
        }
    }
    let dice_oracle = 1.0 - (0..3).map(|k| (2.0 * inter[k] + 1e-5) / (ps[k] + ys[k] + 1e-5)).sum::<f64>() / 3.0;
    close(hl.ce, ce / 32.0, 1e-9, "CE oracle")?;
    close(hl.dice, dice_oracle, 1e-9, "Dice loss oracle")?;
    fd_check(&probs, &hl.grad, |p| hybrid_seg_loss(p, &refs).unwrap().total(), "hybrid")?;
    checked += 4;

    // Importance weights.
    close(importance_weight(0.5, 10.0).unwrap().weight, 1.0, 1e-12, "w(0.5)")?;
    close(importance_weight(0.8, 10.0).unwrap().weight, 4.0, 1e-9, "w(0.8)")?;
    let w = importance_weight(0.999, 10.0).unwrap();
    ensure(w.weight == 10.0 && w.clamped, "w(0.999) clamps to 10")?;
    checked += 3;

    // Weighted distillation.
    let teacher_p = random_probs(&mut rng, 3, 4, 9);
    let teacher = SoftTarget::new(teacher_p.clone()).unwrap();
    let ws: Vec<ImportanceWeight> = [0.3, 0.6, 0.9].iter().map(|&d| importance_weight(d, 10.0).unwrap()).collect();
    let self_kd = weighted_kd_loss(&teacher, &teacher_p, &ws, false).unwrap();
    let ent = entropy(&teacher_p);
    let want = (0..3)
        .map(|i| ws[i].weight * ent.values.data()[i * 9..(i + 1) * 9].iter().sum::<f64>() / 9.0)
        .sum::<f64>()
        / 3.0;
    close(self_kd.value, want, 1e-9, "KD entropy oracle")?;
    let zero: Vec<ImportanceWeight> = ws.iter().map(|w| ImportanceWeight { weight: 0.0, ..*w }).collect();
    close(weighted_kd_loss(&teacher, &teacher_p, &zero, false).unwrap().value, 0.0, 0.0, "zero weights")?;
    let student = random_probs(&mut rng, 3, 4, 9);
    let base = weighted_kd_loss(&teacher, &student, &ws, false).unwrap();
    let doubled: Vec<ImportanceWeight> = ws.iter().map(|w| ImportanceWeight { weight: 2.0 * w.weight, ..*w }).collect();
    close(weighted_kd_loss(&teacher, &student, &doubled, false).unwrap().value, 2.0 * base.value, 1e-12, "doubled weights")?;
    fd_check(&student, &base.grad, |s| weighted_kd_loss(&teacher, s, &ws, false).unwrap().value, "KD")?;
    checked += 4;

    // Entropy.
    let mut two = vec![0.0f64; 8];
    two[0] = 0.5;
    two[1] = 0.5;
    let u = entropy(&Tensor::from_vec(&[1, 8, 1, 1], two).unwrap());
    close(u.values.data()[0], 2f64.ln(), 1e-12, "two-point entropy")?;
    let u = entropy(&Tensor::full(&[1, 8, 1, 1], 0.125f64));
    close(u.values.data()[0], 8f64.ln(), 1e-12, "uniform entropy")?;
    let mut hot = vec![0.0f64; 8];
    hot[3] = 1.0;
    close(entropy(&Tensor::from_vec(&[1, 8, 1, 1], hot).unwrap()).values.data()[0], 0.0, 0.0, "one-hot entropy")?;
    checked += 3;

    // Masked consistency.
    let sp = random_probs(&mut rng, 1, 3, 16);
    let tp = random_probs(&mut rng, 1, 3, 16);
    let u: Vec<f64> = (0..16).map(|i| if i % 2 == 0 { 0.1 } else { 0.9 }).collect();
    let umap = UncertaintyMap { values: Tensor::from_vec(&[1, 1, 16, 1], u).unwrap(), u_max: 3f64.ln() };
    let sq = |px: usize| (0..3).map(|k| (sp.data()[k * 16 + px] - tp.data()[k * 16 + px]).powi(2)).sum::<f64>();
    let full = masked_consistency_loss(&sp, &tp, &umap, 3f64.ln() + 0.1).unwrap();
    close(full.value, (0..16).map(sq).sum::<f64>() / 16.0, 1e-12, "full-mask MSE")?;
    let half = masked_consistency_loss(&sp, &tp, &umap, 0.5).unwrap();
    close(half.value, (0..16).step_by(2).map(sq).sum::<f64>() / 8.0, 1e-12, "half-mask MSE")?;
    fd_check(&sp, &half.grad, |s| masked_consistency_loss(s, &tp, &umap, 0.5).unwrap().value, "consistency")?;
    let empty = masked_consistency_loss(&sp, &tp, &umap, 0.0).unwrap();
    ensure(empty.value == 0.0 && empty.empty_mask, "empty mask guard")?;
    checked += 4;

    // Student objective.
    let parts = StudentParts { seg: 1.0, inter: 0.2, intra: 0.5 };
    close(student_objective(&parts, 5.0, 0.1).unwrap(), 2.05, 1e-12, "student objective")?;
    close(student_objective(&parts, 0.0, 0.0).unwrap(), 1.0, 0.0, "student objective without teachers")?;
    checked += 2;

    Ok(format!("{checked} loss examples and oracles"))
}

fn schedules() -> Check {
    let lc = RampSchedule::lambda_con(50.0);
    let ut = RampSchedule::u_thre(50.0, 8);
    let ln8 = 8f64.ln();
    ensure(schedule_value(&lc, 50.0).unwrap() == 0.1, "lambda_con(t_max) != 0.1")?;
    close(schedule_value(&lc, 0.0).unwrap(), 0.1 * (-5f64).exp(), 1e-9, "lambda_con(0)")?;
    close(schedule_value(&ut, 0.0).unwrap(), 0.75 * ln8 + 0.25 * (-5f64).exp() * ln8, 1e-9, "u_thre(0)")?;
    close(schedule_value(&ut, 50.0).unwrap(), ln8, 1e-9, "u_thre(t_max)")?;
    Ok("ramp endpoints".into())
}

fn uncertainty_bound() -> Check {
    let mut rng = stream_rng(202, 0, 0);
    for _ in 0..1000 {
        let c = rng.random_range(2..=8);
        let u = entropy(&random_probs(&mut rng, 1, c, 16));
        let bound = (c as f64).ln() + 1e-6;
        ensure(u.values.data().iter().all(|&v| (0.0..=bound).contains(&v)), format!("random map with C={c} out of range"))?;
    }

    let cfg = tiny_config(Mode::Full);
    let data = TrainData::from_fold(&generate_phantom(&tiny_spec()).unwrap(), 0).unwrap();
    let mut state = RunState::new(cfg.clone()).unwrap();
    let iters = data.iterations_per_epoch(&cfg);
    let mut live = 0;
    let bound = 4f64.ln() + 1e-6;
    for epoch in 0..2 {
        for slot in 0..iters {
            let b = IterationBatches::draw(&data, &cfg, epoch, state.iteration, slot).unwrap();
            let out = train_iteration(&mut state, &b).map_err(|e| e.to_string())?;
            let u = out.uncertainty.ok_or("full mode produced no uncertainty map")?;
            ensure(
                u.values.data().iter().all(|&v| (0.0..=bound).contains(&(v as f64))),
                format!("live map at iteration {} out of range", out.record.iteration),
            )?;
            live += 1;
        }
        state.epoch += 1;
    }

    let ema = state.ema.as_ref().ok_or("no EMA teacher")?;
    let x = dualteacher::phantom::image_batch(&data.unlabeled_target.iter().take(2).collect::<Vec<_>>()).unwrap();
    let (_, umap) = mc_uncertainty(&ema.teacher, &x, 8, 0.1, &mut rng).map_err(|e| e.to_string())?;
    let var = umap.variance();
    ensure(var > 0.0, "MC uncertainty has zero variance")?;
    Ok(format!("1000 random maps, {live} live maps, MC variance {var:.3e}"))
}

fn ema_suite() -> Check {
    let set = |v: f32| {
        let mut ps = ParamSet::new();
        ps.push("w", Tensor::full(&[4], v));
        ps
    };
    let mut t = set(0.3);
    ema_blend(&mut t, &set(0.9), 0.0).unwrap();
    ensure(t.get(0).data().iter().all(|&v| v == 0.9), "alpha = 0 must copy the student")?;
    let mut t = set(0.3);
    ema_blend(&mut t, &set(0.9), 1.0).unwrap();
    ensure(t.get(0).data().iter().all(|&v| v == 0.3), "alpha = 1 must keep the teacher")?;

    let mut rng = stream_rng(303, 0, 0);
    let cfg = SegmenterConfig { num_classes: 3, base_width: 2, depth: 1, ..SegmenterConfig::default() };
    let teacher0 = Segmenter::<f64>::new(cfg.clone(), &mut rng).unwrap();
    let student = Segmenter::<f64>::new(cfg, &mut rng).unwrap();
    let mut state = EmaState::new(&teacher0, 0.99).unwrap();
    for _ in 0..100 {
        ema_update(&mut state, student.params()).unwrap();
    }
    let a100 = 0.99f64.powi(100);
    let mut worst = 0.0f64;
    for ((t, t0), s) in state.teacher.params().iter().zip(teacher0.params().iter()).zip(student.params().iter()) {
        for ((&v, &v0), &sv) in t.value.data().iter().zip(t0.value.data()).zip(s.value.data()) {
            worst = worst.max((v - (a100 * v0 + (1.0 - a100) * sv)).abs());
        }
    }
    ensure(worst <= 1e-6, format!("closed form off by {worst}"))?;
    Ok(format!("degenerate cases exact, k=100 error {worst:.1e}"))
}

fn oracle_boundary(m: &[bool], w: usize) -> Vec<(f64, f64)> {
    let h = m.len() / w;
    let mut padded = vec![false; (h + 2) * (w + 2)];
    for r in 0..h {
        for c in 0..w {
            padded[(r + 1) * (w + 2) + c + 1] = m[r * w + c];
        }
    }
    let at = |r: usize, c: usize| padded[r * (w + 2) + c];
    let mut out = Vec::new();
    for r in 1..=h {
        for c in 1..=w {
            if at(r, c) && (!at(r - 1, c) || !at(r + 1, c) || !at(r, c - 1) || !at(r, c + 1)) {
                out.push(((r - 1) as f64, (c - 1) as f64));
            }
        }
    }
    out
}

/// Two-sided Student-t p-value by Simpson integration of `cos^(df-1)` after
/// the substitution `x = sqrt(df) tan(theta)`.
fn t_p_value(t: f64, df: usize) -> f64 {
    let f = |th: f64| th.cos().powi(df as i32 - 1);
    let simpson = |a: f64, b: f64| {
        let n = 20_000;
        let h = (b - a) / n as f64;
        let mut s = f(a) + f(b);
        for i in 1..n {
            s += f(a + i as f64 * h) * if i % 2 == 1 { 4.0 } else { 2.0 };
        }
        s * h / 3.0
    };
    let half_pi = std::f64::consts::FRAC_PI_2;
    let theta = (t.abs() / (df as f64).sqrt()).atan();
    simpson(theta, half_pi) / simpson(0.0, half_pi)
}

fn metric_oracles() -> Check {
    let mut rng = stream_rng(404, 0, 0);
    for case in 0..50 {
        let w = rng.random_range(4..=16);
        let h = rng.random_range(4..=16);
        let fill = rng.random_range(0.1..0.7);
        let pred: Vec<u8> = (0..w * h).map(|_| rng.random_bool(fill) as u8).collect();
        let gt: Vec<u8> = (0..w * h).map(|_| rng.random_bool(fill) as u8).collect();

        let (p, g) = (pred.iter().filter(|&&v| v == 1).count(), gt.iter().filter(|&&v| v == 1).count());
        let both = pred.iter().zip(&gt).filter(|(a, b)| **a == 1 && **b == 1).count();
        let want = if p + g == 0 { 100.0 } else { 100.0 * 2.0 * both as f64 / (p + g) as f64 };
        let got = dice(&pred, &gt, 1).unwrap().value;
        ensure(got == want, format!("case {case}: Dice {got} vs {want}"))?;

        let bp = oracle_boundary(&pred.iter().map(|&v| v == 1).collect::<Vec<_>>(), w);
        let bg = oracle_boundary(&gt.iter().map(|&v| v == 1).collect::<Vec<_>>(), w);
        let got = asd(&pred, &gt, w, 1).unwrap();
        if bp.is_empty() || bg.is_empty() {
            ensure(got.is_none(), format!("case {case}: ASD should be undefined"))?;
            continue;
        }
        let dist = |a: &(f64, f64), set: &[(f64, f64)]| {
            set.iter().map(|b| ((a.0 - b.0).powi(2) + (a.1 - b.1).powi(2)).sqrt()).fold(f64::INFINITY, f64::min)
        };
        let total: f64 = bp.iter().map(|a| dist(a, &bg)).sum::<f64>() + bg.iter().map(|b| dist(b, &bp)).sum::<f64>();
        let want = total / (bp.len() + bg.len()) as f64;
        let got = got.ok_or(format!("case {case}: ASD missing"))?;
        ensure((got - want).abs() <= 1e-9, format!("case {case}: ASD {got} vs {want}"))?;
    }

    let mut worst = 0.0f64;
    for _ in 0..20 {
        let n = rng.random_range(3..15);
        let a: Vec<f64> = (0..n).map(|_| rng.random_range(60.0..95.0)).collect();
        let b: Vec<f64> = a.iter().map(|x| x + rng.random_range(-4.0..3.0)).collect();
        let r = paired_t_test(&a, &b).unwrap();
        let p = r.p.ok_or("t-test unexpectedly degenerate")?;
        worst = worst.max((p - t_p_value(r.t.unwrap(), n - 1)).abs());
    }
    ensure(worst <= 1e-3, format!("t-test p off by {worst}"))?;
    Ok(format!("50 mask pairs exact, t-test p error {worst:.1e}"))
}

fn results_dir() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../results/ordering/report")
}

fn ordering() -> Check {
    let path = results_dir().join("table.csv");
    let mut r = csv::Reader::from_path(&path).map_err(|e| format!("no recorded ordering experiment at {}: {e}", path.display()))?;
    let headers = r.headers().map_err(|e| e.to_string())?.clone();
    let col = |name: &str| headers.iter().position(|h| h == name).ok_or(format!("table.csv lacks {name}"));
    let (mode_c, runs_c, dice_c) = (col("mode")?, col("runs")?, col("mean_dice")?);
    let mut means = std::collections::HashMap::new();
    for row in r.records() {
        let row = row.map_err(|e| e.to_string())?;
        let runs: usize = row[runs_c].parse().map_err(|_| "bad runs column")?;
        ensure(runs == 12, format!("{} has {runs} runs, expected 3 seeds x 4 folds", &row[mode_c]))?;
        means.insert(row[mode_c].to_string(), row[dice_c].parse::<f64>().map_err(|_| "bad mean_dice column")?);
    }
    let get = |m: &str| means.get(m).copied().ok_or(format!("mode {m} missing from the table"));
    let (full, vanilla, intra_off, inter_off, sup) = (
        get("full")?,
        get("vanilla_two_teacher")?,
        get("no_intra_teacher")?,
        get("no_inter_teacher")?,
        get("supervised_only")?,
    );
    let single = intra_off.max(inter_off);
    let summary = format!(
        "full {full:.2}, vanilla {vanilla:.2}, no_intra {intra_off:.2}, no_inter {inter_off:.2}, supervised {sup:.2}"
    );
    ensure(
        full - vanilla >= 1.0 && vanilla - single >= 1.0 && single - sup >= 1.0,
        format!("ordering violated: {summary}"),
    )?;
    Ok(summary)
}

fn inference_isolation() -> Check {
    let ds = generate_phantom(&tiny_spec()).unwrap();
    let split = make_folds(&ds, 0).unwrap();
    let data = TrainData::from_split(&ds, &split).unwrap();
    let mut trainer = Trainer::new(tiny_config(Mode::Full), data, None).map_err(|e| e.to_string())?;
    trainer.run_epoch().map_err(|e| e.to_string())?;

    let s = &trainer.state;
    let counts = || -> Vec<(&str, u64)> {
        let aam = s.aam.as_ref().unwrap();
        vec![
            ("inter_teacher", s.inter_teacher.as_ref().unwrap().0.params().access_count()),
            ("ema_teacher", s.ema.as_ref().unwrap().teacher.params().access_count()),
            ("g_s2t", aam.g_s2t.params().access_count()),
            ("g_t2s", aam.g_t2s.params().access_count()),
            ("d_s", aam.d_s.params().access_count()),
            ("d_t", aam.d_t.params().access_count()),
        ]
    };
    let before = counts();
    let student_before = s.student.params().access_count();
    let test = ds.lookup(&split.test).unwrap();
    evaluate_fold(&s.student, &test, 0).map_err(|e| e.to_string())?;
    let after = counts();
    for ((name, a), (_, b)) in before.iter().zip(&after) {
        ensure(a == b, format!("{name} touched during evaluation ({a} -> {b})"))?;
    }
    let student_reads = s.student.params().access_count() - student_before;
    ensure(student_reads > 0, "student never read")?;
    Ok(format!("student read {student_reads} times, 6 other networks untouched"))
}

fn run_once(ds: &Dataset, dir: &Path) -> std::result::Result<Vec<u8>, String> {
    let split = make_folds(ds, 1).unwrap();
    let data = TrainData::from_split(ds, &split).unwrap();
    let mut trainer = Trainer::new(tiny_config(Mode::Full), data, Some(dir)).map_err(|e| e.to_string())?;
    trainer.train().map_err(|e| e.to_string())?;
    let report = evaluate_fold(&trainer.state.student, &ds.lookup(&split.test).unwrap(), 1).map_err(|e| e.to_string())?;
    let path = dir.join("summary.json");
    write_fold_json(&report, &path).map_err(|e| e.to_string())?;
    fs::read(&path).map_err(|e| e.to_string())
}

fn determinism() -> Check {
    let ds = generate_phantom(&tiny_spec()).unwrap();
    let tmp = tempfile::tempdir().unwrap();
    let (a, b) = (tmp.path().join("a"), tmp.path().join("b"));
    let ra = run_once(&ds, &a)?;
    let rb = run_once(&ds, &b)?;
    let la = read_log(&a.join("train_log.csv")).map_err(|e| e.to_string())?;
    let lb = read_log(&b.join("train_log.csv")).map_err(|e| e.to_string())?;
    ensure(la.len() == lb.len() && !la.is_empty(), "trace lengths differ")?;
    let mut worst = 0.0f64;
    for (x, y) in la.iter().zip(&lb) {
        ensure(x.phases == y.phases, "phase logs differ")?;
        for (u, v) in x.numbers().into_iter().zip(y.numbers()) {
            match (u, v) {
                (Some(u), Some(v)) => worst = worst.max((u - v).abs()),
                (u, v) => ensure(u == v, format!("iteration {}: {u:?} vs {v:?}", x.iteration))?,
            }
        }
    }
    ensure(worst <= 1e-6, format!("traces differ by {worst}"))?;
    ensure(ra == rb, "final reports differ")?;
    Ok(format!("{} iterations, max trace difference {worst:.1e}, reports identical", la.len()))
}

#[test]
fn acceptance() {
    let criteria: [(&str, fn() -> Check, bool); 8] = [
        ("loss fidelity", loss_fidelity, true),
        ("schedule fidelity", schedules, true),
        ("uncertainty bound", uncertainty_bound, true),
        ("EMA closed form", ema_suite, true),
        ("metric oracles", metric_oracles, true),
        ("scaled ordering experiment", ordering, false),
        ("inference isolation", inference_isolation, true),
        ("determinism", determinism, true),
    ];
    let mut failed = Vec::new();
    for (i, (name, check, asserted)) in criteria.into_iter().enumerate() {
        match check() {
            Ok(detail) => println!("criterion {}: PASS  {name}: {detail}", i + 1),
            Err(why) => {
                println!("criterion {}: FAIL  {name}: {why}", i + 1);
                if asserted {
                    failed.push(i + 1);
                }
            }
        }
    }
    assert!(failed.is_empty(), "failed criteria: {failed:?}");
}
