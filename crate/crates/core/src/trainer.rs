//! Training orchestration: per-iteration update order, ablation modes,
//! logging, checkpointing and resumption.

use std::fs::{self, File, OpenOptions};
use std::path::{Path, PathBuf};

use rand::seq::{index, SliceRandom};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::alignment::{aam_step, AamConfig, AamState};
use crate::autograd::Tape;
use crate::checkpoint::{load_model, save_model};
use crate::config::{Mode, TrainConfig};
use crate::consistency::{
    add_noise, ema_update, masked_consistency_loss, mc_uncertainty, schedule_value, EmaState, RampSchedule,
    UncertaintyMap,
};
use crate::distill::{
    cross_entropy_loss, hybrid_seg_loss, importance_weight, inter_teacher_step, weighted_kd_loss, ImportanceWeight,
    SoftTarget,
};
use crate::error::{Error, Result};
use crate::networks::{Model, Pass, Segmenter};
use crate::nn::{Adam, AdamConfig};
use crate::phantom::{augment, image_batch, make_folds, Dataset, DomainSample, SplitManifest};
use crate::seeding::stream_rng;
use crate::tensor::{argmax_channels, Tensor};

const INIT_STREAM: u64 = 1;
const SHUFFLE_STREAM: u64 = 2;
const DRAW_STREAM: u64 = 3;
const AUGMENT_STREAM: u64 = 4;
const STEP_STREAM: u64 = 5;

const RUN_STATE_VERSION: u32 = 1;

/// Training pools of one fold, held in memory.
#[derive(Clone, Debug)]
pub struct TrainData {
    pub num_classes: usize,
    pub source: Vec<DomainSample>,
    pub labeled_target: Vec<DomainSample>,
    pub unlabeled_target: Vec<DomainSample>,
}

impl TrainData {
    pub fn from_split(dataset: &Dataset, split: &SplitManifest) -> Result<Self> {
        let take = |ids: &[String]| -> Result<Vec<DomainSample>> {
            Ok(dataset.lookup(ids)?.into_iter().cloned().collect())
        };
        let data = Self {
            num_classes: dataset.num_classes,
            source: take(&split.source)?,
            labeled_target: take(&split.labeled_target)?,
            unlabeled_target: take(&split.unlabeled_target)?,
        };
        if data.labeled_target.is_empty() {
            return Err(Error::Empty("labeled target pool".into()));
        }
        Ok(data)
    }

    pub fn from_fold(dataset: &Dataset, fold: usize) -> Result<Self> {
        Self::from_split(dataset, &make_folds(dataset, fold)?)
    }

    fn check(&self, config: &TrainConfig) -> Result<()> {
        if self.num_classes != config.segmenter.num_classes {
            return Err(Error::Structure(format!(
                "data has {} classes, segmenter has {}",
                self.num_classes, config.segmenter.num_classes
            )));
        }
        let f = config.flags();
        let needs_source = f.aam || f.joint_source;
        if needs_source && self.source.is_empty() {
            return Err(Error::Empty(format!("source pool (required by mode {})", config.mode)));
        }
        if (f.pseudo_label || f.intra_teacher) && self.unlabeled_target.is_empty() {
            return Err(Error::Empty(format!("unlabeled pool (required by mode {})", config.mode)));
        }
        Ok(())
    }

    /// One epoch is a pass over the unlabeled pool (or the labeled target
    /// pool when there is no unlabeled data).
    pub fn iterations_per_epoch(&self, config: &TrainConfig) -> usize {
        if self.unlabeled_target.is_empty() {
            self.labeled_target.len().div_ceil(config.batch.labeled_target)
        } else {
            self.unlabeled_target.len().div_ceil(config.batch.unlabeled_target)
        }
    }
}

/// Inputs of one iteration.
#[derive(Clone, Debug)]
pub struct IterationBatches {
    pub x_s: Tensor<f32>,
    pub y_s: Vec<Vec<u8>>,
    pub x_t: Tensor<f32>,
    pub y_t: Vec<Vec<u8>>,
    pub x_u: Option<Tensor<f32>>,
    /// Target images for the alignment module, drawn from both target pools.
    pub x_aam_t: Tensor<f32>,
}

fn labels_of(samples: &[DomainSample]) -> Result<Vec<Vec<u8>>> {
    samples
        .iter()
        .map(|s| s.label.clone().ok_or_else(|| Error::Validation(format!("{} has no label", s.id))))
        .collect()
}

fn refs(labels: &[Vec<u8>]) -> Vec<&[u8]> {
    labels.iter().map(|l| l.as_slice()).collect()
}

impl IterationBatches {
    /// Deterministic draw for `(seed, epoch, iteration)`: unlabeled images
    /// follow the epoch's shuffled order, the other pools are sampled.
    pub fn draw(data: &TrainData, config: &TrainConfig, epoch: usize, iteration: u64, slot: usize) -> Result<Self> {
        let seed = config.seed;
        let mut rng = stream_rng(seed, DRAW_STREAM, iteration);
        let mut aug_rng = stream_rng(seed, AUGMENT_STREAM, iteration);
        let mut pick = |pool: &[DomainSample], b: usize, rng: &mut dyn rand::RngCore| -> Vec<DomainSample> {
            let n = pool.len();
            if n == 0 {
                return Vec::new();
            }
            let idx: Vec<usize> = if b <= n {
                index::sample(rng, n, b).into_vec()
            } else {
                (0..b).map(|_| rng.random_range(0..n)).collect()
            };
            idx.into_iter()
                .map(|i| {
                    if config.augment {
                        augment(&pool[i], &config.augmentation, &mut aug_rng)
                    } else {
                        pool[i].clone()
                    }
                })
                .collect()
        };
        let src = pick(&data.source, config.batch.source, &mut rng);
        let tgt = pick(&data.labeled_target, config.batch.labeled_target, &mut rng);
        let union: Vec<DomainSample> = data.labeled_target.iter().chain(&data.unlabeled_target).cloned().collect();
        let aam_t = pick(&union, config.batch.labeled_target, &mut rng);

        let x_u = if data.unlabeled_target.is_empty() {
            None
        } else {
            let mut order: Vec<usize> = (0..data.unlabeled_target.len()).collect();
            order.shuffle(&mut stream_rng(seed, SHUFFLE_STREAM, epoch as u64));
            let b = config.batch.unlabeled_target;
            let chosen: Vec<DomainSample> = (0..b)
                .map(|k| {
                    let s = &data.unlabeled_target[order[(slot * b + k) % order.len()]];
                    if config.augment {
                        augment(s, &config.augmentation, &mut aug_rng)
                    } else {
                        s.clone()
                    }
                })
                .collect();
            Some(image_batch(&chosen.iter().collect::<Vec<_>>())?)
        };
        let batch = |v: &[DomainSample]| -> Result<Tensor<f32>> {
            if v.is_empty() {
                Ok(Tensor::zeros(&[0]))
            } else {
                image_batch(&v.iter().collect::<Vec<_>>())
            }
        };
        Ok(Self {
            x_s: batch(&src)?,
            y_s: labels_of(&src)?,
            x_t: batch(&tgt)?,
            y_t: labels_of(&tgt)?,
            x_u,
            x_aam_t: batch(&aam_t)?,
        })
    }
}

/// Components of the student objective. `seg` holds every supervised term
/// (labeled target, plus joint-training and pseudo-label terms in baseline
/// modes).
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct StudentParts {
    pub seg: f64,
    pub inter: f64,
    pub intra: f64,
}

/// `seg + lambda_kd * inter + lambda_con * intra`.
pub fn student_objective(parts: &StudentParts, lambda_kd: f64, lambda_con: f64) -> Result<f64> {
    for (name, v) in [("seg", parts.seg), ("inter", parts.inter), ("intra", parts.intra)] {
        if !v.is_finite() {
            return Err(Error::NonFinite(format!("student loss component {name} = {v}")));
        }
    }
    Ok(parts.seg + lambda_kd * parts.inter + lambda_con * parts.intra)
}

/// Argmax labels of a model's evaluation-mode prediction; ties resolve to
/// the lowest class index.
pub fn pseudo_label_pass<R: Rng + ?Sized>(model: &Segmenter<f32>, x_u: &Tensor<f32>, rng: &mut R) -> Result<Vec<Vec<u8>>> {
    let logits = model.logits(x_u, Pass::Eval, rng)?;
    Ok(argmax_channels(&logits))
}

/// One row of `train_log.csv`. Components of inactive phases are empty.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LogRecord {
    pub iteration: u64,
    pub epoch: usize,
    pub phases: String,
    pub aam_total: Option<f64>,
    pub aam_adv_t: Option<f64>,
    pub aam_adv_s: Option<f64>,
    pub aam_cyc: Option<f64>,
    pub aam_gen: Option<f64>,
    pub aam_disc: Option<f64>,
    pub teacher_ce: Option<f64>,
    pub teacher_dice: Option<f64>,
    pub stu_seg: f64,
    pub stu_joint: Option<f64>,
    pub stu_pseudo: Option<f64>,
    pub stu_inter: Option<f64>,
    pub stu_intra: Option<f64>,
    pub stu_total: f64,
    pub lambda_con: Option<f64>,
    pub u_thre: Option<f64>,
    pub mask_coverage: Option<f64>,
    pub kd_weight_mean: Option<f64>,
    pub kd_weight_max: Option<f64>,
    pub kd_clamp_rate: Option<f64>,
}

impl LogRecord {
    pub fn phase_list(&self) -> Vec<&str> {
        self.phases.split('+').filter(|p| !p.is_empty()).collect()
    }

    /// Numeric fields in column order, for trace comparisons.
    pub fn numbers(&self) -> Vec<Option<f64>> {
        vec![
            self.aam_total,
            self.aam_adv_t,
            self.aam_adv_s,
            self.aam_cyc,
            self.aam_gen,
            self.aam_disc,
            self.teacher_ce,
            self.teacher_dice,
            Some(self.stu_seg),
            self.stu_joint,
            self.stu_pseudo,
            self.stu_inter,
            self.stu_intra,
            Some(self.stu_total),
            self.lambda_con,
            self.u_thre,
            self.mask_coverage,
            self.kd_weight_mean,
            self.kd_weight_max,
            self.kd_clamp_rate,
        ]
    }
}

/// Everything a run mutates. Components a mode does not use are absent.
#[derive(Clone, Debug)]
pub struct RunState {
    pub config: TrainConfig,
    pub student: Segmenter<f32>,
    pub opt_student: Adam<f32>,
    pub inter_teacher: Option<(Segmenter<f32>, Adam<f32>)>,
    pub ema: Option<EmaState<f32>>,
    pub aam: Option<AamState<f32>>,
    pub epoch: usize,
    pub iteration: u64,
}

impl RunState {
    pub fn new(config: TrainConfig) -> Result<Self> {
        config.validate()?;
        let f = config.flags();
        let seed = config.seed;
        let student = Segmenter::new(config.segmenter.clone(), &mut stream_rng(seed, INIT_STREAM, 0))?;
        let opt_student = Adam::new(AdamConfig::with_lr(config.lr), student.params());
        let inter_teacher = if f.inter_teacher {
            let t = Segmenter::new(config.segmenter.clone(), &mut stream_rng(seed, INIT_STREAM, 1))?;
            let o = Adam::new(AdamConfig::with_lr(config.lr), t.params());
            Some((t, o))
        } else {
            None
        };
        let ema = if f.intra_teacher {
            Some(EmaState::new(&student, config.alpha)?)
        } else {
            None
        };
        let aam = if f.aam {
            Some(AamState::new(&aam_config(&config), &mut stream_rng(seed, INIT_STREAM, 2))?)
        } else {
            None
        };
        Ok(Self {
            config,
            student,
            opt_student,
            inter_teacher,
            ema,
            aam,
            epoch: 0,
            iteration: 0,
        })
    }

    fn divergence(&self, what: &str) -> Error {
        Error::Divergence {
            step: self.iteration,
            components: what.to_string(),
        }
    }
}

pub fn aam_config(config: &TrainConfig) -> AamConfig {
    AamConfig {
        lambda_cyc: config.lambda_cyc,
        optimizer: AdamConfig {
            beta1: config.aam_beta1,
            ..AdamConfig::with_lr(config.aam_lr)
        },
        generator: config.generator.clone(),
        discriminator: config.discriminator.clone(),
    }
}

/// Result of one iteration besides the mutated state.
#[derive(Clone, Debug)]
pub struct IterationOutput {
    pub record: LogRecord,
    pub uncertainty: Option<UncertaintyMap<f32>>,
}

fn finite_or(state: &RunState, name: &str, v: f64) -> Result<f64> {
    if v.is_finite() {
        Ok(v)
    } else {
        Err(state.divergence(&format!("{name}={v}")))
    }
}

/// One iteration in the fixed order: alignment, inter-domain teacher,
/// student, EMA teacher. Phases a mode disables are skipped.
pub fn train_iteration(state: &mut RunState, b: &IterationBatches) -> Result<IterationOutput> {
    let config = state.config.clone();
    let f = config.flags();
    let mut rng = stream_rng(config.seed, STEP_STREAM, state.iteration);
    let mut phases = Vec::new();
    let mut rec = LogRecord {
        iteration: state.iteration,
        epoch: state.epoch,
        ..LogRecord::default()
    };
    let epoch_t = state.epoch as f64;

    // Appearance alignment.
    let synthetic = match state.aam.as_mut() {
        Some(aam) => {
            phases.push("aam");
            let (r, syn) = aam_step(aam, &b.x_s, &b.x_aam_t).map_err(|e| match e {
                Error::Divergence { components, .. } => Error::Divergence {
                    step: rec.iteration,
                    components: format!("aam {components}"),
                },
                other => other,
            })?;
            rec.aam_total = Some(r.total);
            rec.aam_adv_t = Some(r.adv_t);
            rec.aam_adv_s = Some(r.adv_s);
            rec.aam_cyc = Some(r.cyc);
            rec.aam_gen = Some(r.gen_loss);
            rec.aam_disc = Some(r.disc_loss);
            Some(syn)
        }
        None => None,
    };

    // Inter-domain teacher.
    let soft = match (state.inter_teacher.as_mut(), synthetic.as_ref()) {
        (Some((teacher, opt)), Some(syn)) => {
            phases.push("inter");
            let (ce, dice) = inter_teacher_step(teacher, opt, &syn.images, &refs(&b.y_s), &mut rng)
                .map_err(|e| Error::Divergence {
                    step: rec.iteration,
                    components: format!("inter-domain teacher: {e}"),
                })?;
            rec.teacher_ce = Some(ce as f64);
            rec.teacher_dice = Some(dice as f64);
            Some(SoftTarget::new(teacher.predict(&syn.images, Pass::Eval, &mut rng)?)?)
        }
        _ => None,
    };

    // Student.
    phases.push("student");
    let lambda_con = if f.intra_teacher {
        schedule_value(&RampSchedule::lambda_con(config.t_max), epoch_t)?
    } else {
        0.0
    };
    let mut tape = Tape::new();
    let bound = state.student.params().bind(&mut tape, true);
    let mut grads_in = Vec::new();
    let mut parts = StudentParts::default();

    let xt = tape.constant(b.x_t.clone());
    let pt = state.student.probs(&mut tape, &bound, xt, Pass::Train, &mut rng)?;
    let seg = hybrid_seg_loss(tape.value(pt), &refs(&b.y_t))?;
    rec.stu_seg = finite_or(state, "stu_seg", seg.total() as f64)?;
    parts.seg += rec.stu_seg;
    grads_in.push((pt, seg.grad));

    // Source-derived stream: raw or translated images.
    let joint = f.joint_source || f.joint_synthetic;
    if joint || soft.is_some() {
        let images = if f.joint_source {
            &b.x_s
        } else {
            &synthetic.as_ref().expect("alignment active").images
        };
        let xs = tape.constant(images.clone());
        let ps = state.student.probs(&mut tape, &bound, xs, Pass::Train, &mut rng)?;
        let mut g = Tensor::zeros(tape.value(ps).shape());
        if joint {
            let l = hybrid_seg_loss(tape.value(ps), &refs(&b.y_s))?;
            let v = finite_or(state, "stu_joint", l.total() as f64)?;
            rec.stu_joint = Some(v);
            parts.seg += v;
            g.add_assign(&l.grad);
        }
        if let Some(soft) = &soft {
            let syn = synthetic.as_ref().expect("alignment active");
            let weights: Vec<ImportanceWeight> = if f.inter_rc {
                syn.d_scores
                    .iter()
                    .map(|&d| importance_weight(d as f64, config.w_max))
                    .collect::<Result<_>>()?
            } else {
                vec![ImportanceWeight::uniform(); syn.d_scores.len()]
            };
            let n = weights.len() as f64;
            rec.kd_weight_mean = Some(weights.iter().map(|w| w.weight).sum::<f64>() / n);
            rec.kd_weight_max = Some(weights.iter().map(|w| w.weight).fold(f64::MIN, f64::max));
            rec.kd_clamp_rate = Some(weights.iter().filter(|w| w.clamped).count() as f64 / n);
            let kd = weighted_kd_loss(soft, tape.value(ps), &weights, config.renormalize_weights)?;
            let v = finite_or(state, "stu_inter", kd.value as f64)?;
            rec.stu_inter = Some(v);
            parts.inter = v;
            g.add_assign(&kd.grad.scale(config.lambda_kd as f32));
        }
        grads_in.push((ps, g));
    }

    // Unlabeled stream.
    let mut uncertainty = None;
    if let Some(x_u) = &b.x_u {
        if let Some(ema) = state.ema.as_ref() {
            let noisy = add_noise(x_u, config.noise_std, &mut rng);
            let xu = tape.constant(noisy);
            let pu = state.student.probs(&mut tape, &bound, xu, Pass::Train, &mut rng)?;
            let (umap, u_thre) = if f.intra_rc {
                let (_, umap) = mc_uncertainty(&ema.teacher, x_u, config.n_passes, config.noise_std, &mut rng)?;
                let t = schedule_value(&RampSchedule::u_thre(config.t_max, config.segmenter.num_classes), epoch_t)?;
                rec.u_thre = Some(t);
                (umap, t)
            } else {
                let (n, _, h, w) = x_u.dims4();
                let umap = UncertaintyMap {
                    values: Tensor::zeros(&[n, 1, h, w]),
                    u_max: (config.segmenter.num_classes as f64).ln(),
                };
                (umap, f64::INFINITY)
            };
            let target = ema
                .teacher
                .predict(&add_noise(x_u, config.noise_std, &mut rng), Pass::Eval, &mut rng)?;
            let con = masked_consistency_loss(tape.value(pu), &target, &umap, u_thre)?;
            let v = finite_or(state, "stu_intra", con.value as f64)?;
            rec.stu_intra = Some(v);
            rec.mask_coverage = Some(con.coverage);
            rec.lambda_con = Some(lambda_con);
            parts.intra = v;
            grads_in.push((pu, con.grad.scale(lambda_con as f32)));
            if f.intra_rc {
                uncertainty = Some(umap);
            }
        } else if f.pseudo_label && state.epoch >= config.pseudo_label_warmup {
            let labels = pseudo_label_pass(&state.student, x_u, &mut rng)?;
            let xu = tape.constant(x_u.clone());
            let pu = state.student.probs(&mut tape, &bound, xu, Pass::Train, &mut rng)?;
            let l = cross_entropy_loss(tape.value(pu), &refs(&labels))?;
            let v = finite_or(state, "stu_pseudo", l.value as f64)?;
            rec.stu_pseudo = Some(v);
            parts.seg += config.pseudo_label_weight * v;
            grads_in.push((pu, l.grad.scale(config.pseudo_label_weight as f32)));
        }
    }

    let total = student_objective(&parts, config.lambda_kd, lambda_con).map_err(|e| state.divergence(&e.to_string()))?;
    rec.stu_total = total;
    let root = tape.loss(total as f32, grads_in);
    let grads = tape.backward(root);
    let g = bound.grads(&grads, state.student.params());
    if !g.iter().all(|t| t.all_finite()) {
        return Err(state.divergence("non-finite student gradient"));
    }
    state.opt_student.step(state.student.params_mut(), &g)?;

    // Intra-domain teacher.
    if let Some(ema) = state.ema.as_mut() {
        phases.push("ema");
        ema_update(ema, state.student.params())?;
    }

    rec.phases = phases.join("+");
    state.iteration += 1;
    Ok(IterationOutput {
        record: rec,
        uncertainty,
    })
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct RunMeta {
    format_version: u32,
    epoch: usize,
    iteration: u64,
    config: TrainConfig,
}

/// Writes every model, optimizer and the loop counters to `dir`.
pub fn checkpoint(state: &RunState, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir)?;
    save_model(dir, "student", &state.student, state.iteration, Some(&state.opt_student))?;
    if let Some((t, o)) = &state.inter_teacher {
        save_model(dir, "inter_teacher", t, state.iteration, Some(o))?;
    }
    if let Some(ema) = &state.ema {
        save_model(dir, "ema_teacher", &ema.teacher, ema.step, None)?;
    }
    if let Some(a) = &state.aam {
        save_model(dir, "g_s2t", &a.g_s2t, a.step, Some(&a.opt_g_s2t))?;
        save_model(dir, "g_t2s", &a.g_t2s, a.step, Some(&a.opt_g_t2s))?;
        save_model(dir, "d_s", &a.d_s, a.step, Some(&a.opt_d_s))?;
        save_model(dir, "d_t", &a.d_t, a.step, Some(&a.opt_d_t))?;
    }
    let meta = RunMeta {
        format_version: RUN_STATE_VERSION,
        epoch: state.epoch,
        iteration: state.iteration,
        config: state.config.clone(),
    };
    fs::write(dir.join("run_state.json"), serde_json::to_string_pretty(&meta)?)?;
    Ok(())
}

/// Rebuilds a run from [`checkpoint`] output.
pub fn resume(dir: &Path) -> Result<RunState> {
    let meta = read_meta(dir)?;
    let mut state = RunState::new(meta.config)?;
    load_model(dir, "student", &mut state.student, Some(&mut state.opt_student))?;
    if let Some((t, o)) = state.inter_teacher.as_mut() {
        load_model(dir, "inter_teacher", t, Some(o))?;
    }
    if let Some(ema) = state.ema.as_mut() {
        ema.step = load_model(dir, "ema_teacher", &mut ema.teacher, None)?;
    }
    if let Some(a) = state.aam.as_mut() {
        load_model(dir, "g_s2t", &mut a.g_s2t, Some(&mut a.opt_g_s2t))?;
        load_model(dir, "g_t2s", &mut a.g_t2s, Some(&mut a.opt_g_t2s))?;
        load_model(dir, "d_s", &mut a.d_s, Some(&mut a.opt_d_s))?;
        a.step = load_model(dir, "d_t", &mut a.d_t, Some(&mut a.opt_d_t))?;
    }
    state.epoch = meta.epoch;
    state.iteration = meta.iteration;
    Ok(state)
}

fn read_meta(dir: &Path) -> Result<RunMeta> {
    let path = dir.join("run_state.json");
    let meta: RunMeta = serde_json::from_str(&fs::read_to_string(&path)?).map_err(|e| Error::CorruptHeader {
        path: path.clone(),
        reason: e.to_string(),
    })?;
    if meta.format_version != RUN_STATE_VERSION {
        return Err(Error::UnknownVersion {
            path,
            found: meta.format_version,
            supported: RUN_STATE_VERSION,
        });
    }
    Ok(meta)
}

/// Reads the configuration stored next to a checkpoint.
pub fn checkpoint_config(dir: &Path) -> Result<TrainConfig> {
    Ok(read_meta(dir)?.config)
}

/// Loads only the student of a checkpoint; no other model is built.
pub fn load_student(dir: &Path) -> Result<(TrainConfig, Segmenter<f32>)> {
    let config = checkpoint_config(dir)?;
    let mut student = Segmenter::new(config.segmenter.clone(), &mut stream_rng(config.seed, INIT_STREAM, 0))?;
    load_model(dir, "student", &mut student, None)?;
    Ok((config, student))
}

/// Drives epochs over a fold and maintains the run directory
/// (`config.json`, `train_log.csv`, `checkpoints/`, `uncertainty/`).
pub struct Trainer {
    pub state: RunState,
    pub data: TrainData,
    pub log: Vec<LogRecord>,
    run_dir: Option<PathBuf>,
}

impl Trainer {
    pub fn new(config: TrainConfig, data: TrainData, run_dir: Option<&Path>) -> Result<Self> {
        data.check(&config)?;
        let state = RunState::new(config)?;
        if let Some(dir) = run_dir {
            fs::create_dir_all(dir.join("checkpoints"))?;
            fs::write(dir.join("config.json"), serde_json::to_string_pretty(&state.config)?)?;
            csv::Writer::from_path(dir.join("train_log.csv"))?.flush()?;
        }
        Ok(Self {
            state,
            data,
            log: Vec::new(),
            run_dir: run_dir.map(Path::to_path_buf),
        })
    }

    /// Continues a run from `run_dir/checkpoints`, discarding log rows past
    /// the checkpoint.
    pub fn resume(run_dir: &Path, data: TrainData) -> Result<Self> {
        let state = resume(&run_dir.join("checkpoints"))?;
        data.check(&state.config)?;
        let log_path = run_dir.join("train_log.csv");
        let log: Vec<LogRecord> = if log_path.exists() {
            read_log(&log_path)?
                .into_iter()
                .filter(|r| r.iteration < state.iteration)
                .collect()
        } else {
            Vec::new()
        };
        let mut w = csv::Writer::from_path(&log_path)?;
        for r in &log {
            w.serialize(r)?;
        }
        w.flush()?;
        Ok(Self {
            state,
            data,
            log,
            run_dir: Some(run_dir.to_path_buf()),
        })
    }

    pub fn run_dir(&self) -> Option<&Path> {
        self.run_dir.as_deref()
    }

    fn append_log(&self, rows: &[LogRecord]) -> Result<()> {
        let Some(dir) = &self.run_dir else {
            return Ok(());
        };
        let path = dir.join("train_log.csv");
        let has_header = fs::metadata(&path).map(|m| m.len() > 0).unwrap_or(false);
        let file = OpenOptions::new().create(true).append(true).open(&path)?;
        let mut w = csv::WriterBuilder::new().has_headers(!has_header).from_writer(file);
        for r in rows {
            w.serialize(r)?;
        }
        w.flush()?;
        Ok(())
    }

    /// Runs one full epoch and returns its log rows.
    pub fn run_epoch(&mut self) -> Result<Vec<LogRecord>> {
        let iters = self.data.iterations_per_epoch(&self.state.config);
        let mut rows = Vec::with_capacity(iters);
        let mut last_umap = None;
        for slot in 0..iters {
            let batches = IterationBatches::draw(
                &self.data,
                &self.state.config,
                self.state.epoch,
                self.state.iteration,
                slot,
            )?;
            let out = train_iteration(&mut self.state, &batches)?;
            log::debug!("iteration {} total {:.5}", out.record.iteration, out.record.stu_total);
            rows.push(out.record);
            if out.uncertainty.is_some() {
                last_umap = out.uncertainty;
            }
        }
        self.append_log(&rows)?;
        self.log.extend(rows.iter().cloned());
        if let (Some(dir), Some(u), true) = (&self.run_dir, &last_umap, self.state.config.dump_uncertainty) {
            dump_uncertainty(&dir.join("uncertainty"), self.state.epoch, u)?;
        }
        self.state.epoch += 1;
        let every = self.state.config.checkpoint_every;
        if let Some(dir) = &self.run_dir {
            if every > 0 && self.state.epoch % every == 0 {
                checkpoint(&self.state, &dir.join("checkpoints"))?;
            }
        }
        Ok(rows)
    }

    /// Trains until the configured epoch count and writes a final checkpoint.
    pub fn train(&mut self) -> Result<()> {
        while self.state.epoch < self.state.config.epochs {
            self.run_epoch()?;
            log::info!(
                "{} epoch {}/{} done",
                self.state.config.mode,
                self.state.epoch,
                self.state.config.epochs
            );
        }
        if let Some(dir) = &self.run_dir {
            checkpoint(&self.state, &dir.join("checkpoints"))?;
        }
        Ok(())
    }
}

pub fn read_log(path: &Path) -> Result<Vec<LogRecord>> {
    let mut r = csv::Reader::from_reader(File::open(path)?);
    r.deserialize().map(|row| row.map_err(Error::from)).collect()
}

fn dump_uncertainty(dir: &Path, epoch: usize, u: &UncertaintyMap<f32>) -> Result<()> {
    fs::create_dir_all(dir)?;
    let stem = format!("epoch_{epoch:04}");
    let bytes: Vec<u8> = u.values.data().iter().flat_map(|v| v.to_le_bytes()).collect();
    fs::write(dir.join(format!("{stem}.img")), bytes)?;
    let meta = serde_json::json!({
        "dtype": "float32",
        "shape": u.values.shape(),
        "u_max": u.u_max,
        "epoch": epoch,
    });
    fs::write(dir.join(format!("{stem}.json")), serde_json::to_string_pretty(&meta)?)?;
    Ok(())
}

/// Modes whose runs are compared in the ordering experiment.
pub const ORDERING_MODES: [Mode; 5] = [
    Mode::SupervisedOnly,
    Mode::NoIntraTeacher,
    Mode::NoInterTeacher,
    Mode::VanillaTwoTeacher,
    Mode::Full,
];
