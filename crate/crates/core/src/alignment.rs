//! Appearance alignment: a cycle-consistent GAN translating source images
//! into target-style synthetic images.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::Tape;
use crate::distill::LossGrad;
use crate::error::{Error, Result};
use crate::networks::{
    patch_means, Direction, Discriminator, DiscriminatorConfig, DomainSide, Generator, GeneratorConfig, Model,
};
use crate::nn::{Adam, AdamConfig};
use crate::tensor::{Real, Tensor};

/// Clamp applied to discriminator probabilities inside every logarithm.
pub const LOG_EPS: f64 = 1e-3;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AamConfig {
    pub lambda_cyc: f64,
    pub optimizer: AdamConfig,
    pub generator: GeneratorConfig,
    pub discriminator: DiscriminatorConfig,
}

impl Default for AamConfig {
    fn default() -> Self {
        Self {
            lambda_cyc: 10.0,
            optimizer: AdamConfig {
                beta1: 0.5,
                ..AdamConfig::with_lr(2e-4)
            },
            generator: GeneratorConfig::default(),
            discriminator: DiscriminatorConfig::default(),
        }
    }
}

impl AamConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lambda_cyc >= 0.0 && self.lambda_cyc.is_finite()) {
            return Err(Error::config("lambda_cyc", "must be a nonnegative number"));
        }
        if !(self.optimizer.lr > 0.0) {
            return Err(Error::config("aam_lr", "must be positive"));
        }
        if self.generator.in_channels != self.discriminator.in_channels {
            return Err(Error::config("discriminator.in_channels", "must match the generator"));
        }
        Ok(())
    }
}

/// Two generators, two discriminators and their optimizers.
#[derive(Clone, Debug)]
pub struct AamState<T> {
    pub g_s2t: Generator<T>,
    pub g_t2s: Generator<T>,
    pub d_s: Discriminator<T>,
    pub d_t: Discriminator<T>,
    pub lambda_cyc: f64,
    pub opt_g_s2t: Adam<T>,
    pub opt_g_t2s: Adam<T>,
    pub opt_d_s: Adam<T>,
    pub opt_d_t: Adam<T>,
    pub step: u64,
}

impl<T: Real> AamState<T> {
    pub fn new<R: Rng + ?Sized>(config: &AamConfig, rng: &mut R) -> Result<Self> {
        config.validate()?;
        let g_s2t = Generator::new(config.generator.clone(), Direction::SourceToTarget, rng)?;
        let g_t2s = Generator::new(config.generator.clone(), Direction::TargetToSource, rng)?;
        let d_s = Discriminator::new(config.discriminator.clone(), DomainSide::Source, rng)?;
        let d_t = Discriminator::new(config.discriminator.clone(), DomainSide::Target, rng)?;
        let opt = config.optimizer;
        Ok(Self {
            opt_g_s2t: Adam::new(opt, g_s2t.params()),
            opt_g_t2s: Adam::new(opt, g_t2s.params()),
            opt_d_s: Adam::new(opt, d_s.params()),
            opt_d_t: Adam::new(opt, d_t.params()),
            g_s2t,
            g_t2s,
            d_s,
            d_t,
            lambda_cyc: config.lambda_cyc,
            step: 0,
        })
    }
}

/// `mean log D(real) + mean log(1 - D(fake))` with gradients with respect
/// to both score maps.
#[derive(Clone, Debug)]
pub struct GanObjective<T> {
    pub value: T,
    pub grad_real: Tensor<T>,
    pub grad_fake: Tensor<T>,
}

fn clamp_score(d: f64) -> (f64, bool) {
    let c = d.clamp(LOG_EPS, 1.0 - LOG_EPS);
    (c, d > LOG_EPS && d < 1.0 - LOG_EPS)
}

pub fn gan_objective<T: Real>(real_scores: &Tensor<T>, fake_scores: &Tensor<T>) -> Result<GanObjective<T>> {
    if real_scores.is_empty() || fake_scores.is_empty() {
        return Err(Error::Empty("discriminator scores".into()));
    }
    let nr = real_scores.len() as f64;
    let nf = fake_scores.len() as f64;
    let mut value = 0.0;
    let grad_real = Tensor::from_vec(
        real_scores.shape(),
        real_scores
            .data()
            .iter()
            .map(|d| {
                let (c, inside) = clamp_score(d.f64());
                value += c.ln() / nr;
                T::of(if inside { 1.0 / (c * nr) } else { 0.0 })
            })
            .collect(),
    )?;
    let grad_fake = Tensor::from_vec(
        fake_scores.shape(),
        fake_scores
            .data()
            .iter()
            .map(|d| {
                let (c, inside) = clamp_score(d.f64());
                value += (1.0 - c).ln() / nf;
                T::of(if inside { -1.0 / ((1.0 - c) * nf) } else { 0.0 })
            })
            .collect(),
    )?;
    Ok(GanObjective {
        value: T::of(value),
        grad_real,
        grad_fake,
    })
}

/// Non-saturating generator loss `-mean log D(fake)`.
pub fn generator_objective<T: Real>(fake_scores: &Tensor<T>) -> Result<LossGrad<T>> {
    if fake_scores.is_empty() {
        return Err(Error::Empty("discriminator scores".into()));
    }
    let n = fake_scores.len() as f64;
    let mut value = 0.0;
    let grad = fake_scores.map(|d| {
        let (c, inside) = clamp_score(d.f64());
        value -= c.ln() / n;
        T::of(if inside { -1.0 / (c * n) } else { 0.0 })
    });
    Ok(LossGrad {
        value: T::of(value),
        grad,
    })
}

/// `mean |recon - original|` with its (sub)gradient with respect to `recon`.
pub fn l1_loss<T: Real>(recon: &Tensor<T>, original: &Tensor<T>) -> Result<LossGrad<T>> {
    if recon.shape() != original.shape() {
        return Err(Error::Shape(format!("{:?} vs {:?}", recon.shape(), original.shape())));
    }
    if recon.is_empty() {
        return Err(Error::Empty("cycle batch".into()));
    }
    let n = recon.len() as f64;
    let mut value = 0.0;
    let grad = Tensor::from_vec(
        recon.shape(),
        recon
            .data()
            .iter()
            .zip(original.data())
            .map(|(r, o)| {
                let d = r.f64() - o.f64();
                value += d.abs() / n;
                T::of(d.signum() * if d == 0.0 { 0.0 } else { 1.0 / n })
            })
            .collect(),
    )?;
    Ok(LossGrad {
        value: T::of(value),
        grad,
    })
}

fn check_batches<T: Real>(batch_s: &Tensor<T>, batch_t: &Tensor<T>) -> Result<()> {
    for (name, b) in [("source", batch_s), ("target", batch_t)] {
        if b.shape().len() != 4 || b.shape()[0] == 0 {
            return Err(Error::Empty(format!("{name} batch")));
        }
    }
    if batch_s.shape()[1..] != batch_t.shape()[1..] {
        return Err(Error::Shape(format!(
            "source {:?} and target {:?} geometries differ",
            batch_s.shape(),
            batch_t.shape()
        )));
    }
    Ok(())
}

/// Adversarial objectives `(loss_adv_t, loss_adv_s)` at the current state.
pub fn adv_loss<T: Real>(state: &AamState<T>, batch_s: &Tensor<T>, batch_t: &Tensor<T>) -> Result<(T, T)> {
    check_batches(batch_s, batch_t)?;
    let fake_t = state.g_s2t.translate(batch_s)?;
    let fake_s = state.g_t2s.translate(batch_t)?;
    let t = gan_objective(&state.d_t.patch_scores(batch_t)?, &state.d_t.patch_scores(&fake_t)?)?;
    let s = gan_objective(&state.d_s.patch_scores(batch_s)?, &state.d_s.patch_scores(&fake_s)?)?;
    Ok((t.value, s.value))
}

/// Cycle reconstruction error: the average of the two cycles' mean L1 errors.
pub fn cycle_loss<T: Real>(state: &AamState<T>, batch_s: &Tensor<T>, batch_t: &Tensor<T>) -> Result<T> {
    check_batches(batch_s, batch_t)?;
    let rec_s = state.g_t2s.translate(&state.g_s2t.translate(batch_s)?)?;
    let rec_t = state.g_s2t.translate(&state.g_t2s.translate(batch_t)?)?;
    let a = l1_loss(&rec_s, batch_s)?.value;
    let b = l1_loss(&rec_t, batch_t)?.value;
    Ok((a + b) * T::of(0.5))
}

/// Translated source images and the target discriminator's score for each.
#[derive(Clone, Debug)]
pub struct SyntheticBatch<T> {
    pub images: Tensor<T>,
    pub d_scores: Vec<T>,
}

/// Loss values of one alignment step, all evaluated at the pre-step state.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct AamReport {
    pub step: u64,
    pub adv_t: f64,
    pub adv_s: f64,
    pub cyc: f64,
    pub gen_adv: f64,
    pub gen_loss: f64,
    pub disc_loss: f64,
    pub total: f64,
}

impl AamReport {
    fn check(&self) -> Result<()> {
        let parts = [
            ("adv_t", self.adv_t),
            ("adv_s", self.adv_s),
            ("cyc", self.cyc),
            ("gen_adv", self.gen_adv),
            ("disc_loss", self.disc_loss),
        ];
        if parts.iter().all(|(_, v)| v.is_finite()) {
            return Ok(());
        }
        let components = parts.iter().map(|(k, v)| format!("{k}={v}")).collect::<Vec<_>>().join(" ");
        Err(Error::Divergence {
            step: self.step,
            components,
        })
    }
}

/// One generator update (discriminators frozen) followed by one
/// discriminator update on the detached fakes.
pub fn aam_step<T: Real>(
    state: &mut AamState<T>,
    batch_s: &Tensor<T>,
    batch_t: &Tensor<T>,
) -> Result<(AamReport, SyntheticBatch<T>)> {
    check_batches(batch_s, batch_t)?;
    let lambda = state.lambda_cyc;

    // Generators.
    let mut tape = Tape::new();
    let b_s2t = state.g_s2t.params().bind(&mut tape, true);
    let b_t2s = state.g_t2s.params().bind(&mut tape, true);
    let b_ds = state.d_s.params().bind(&mut tape, false);
    let b_dt = state.d_t.params().bind(&mut tape, false);
    let xs = tape.constant(batch_s.clone());
    let xt = tape.constant(batch_t.clone());
    let fake_t = state.g_s2t.forward(&mut tape, &b_s2t, xs)?;
    let rec_s = state.g_t2s.forward(&mut tape, &b_t2s, fake_t)?;
    let fake_s = state.g_t2s.forward(&mut tape, &b_t2s, xt)?;
    let rec_t = state.g_s2t.forward(&mut tape, &b_s2t, fake_s)?;
    let dt_fake = state.d_t.forward(&mut tape, &b_dt, fake_t)?;
    let ds_fake = state.d_s.forward(&mut tape, &b_ds, fake_s)?;
    let ga = generator_objective(tape.value(dt_fake))?;
    let gb = generator_objective(tape.value(ds_fake))?;
    let ca = l1_loss(tape.value(rec_s), batch_s)?;
    let cb = l1_loss(tape.value(rec_t), batch_t)?;
    let cyc = 0.5 * (ca.value.f64() + cb.value.f64());
    let gen_adv = ga.value.f64() + gb.value.f64();
    let gen_loss = gen_adv + lambda * cyc;
    let half_lambda = T::of(0.5 * lambda);
    let root = tape.loss(
        T::of(gen_loss),
        vec![
            (dt_fake, ga.grad),
            (ds_fake, gb.grad),
            (rec_s, ca.grad.scale(half_lambda)),
            (rec_t, cb.grad.scale(half_lambda)),
        ],
    );
    let fake_t_val = tape.value(fake_t).clone();
    let fake_s_val = tape.value(fake_s).clone();

    // Discriminators, on the fakes of the same (pre-update) generators.
    let mut dtape = Tape::new();
    let bd_s = state.d_s.params().bind(&mut dtape, true);
    let bd_t = state.d_t.params().bind(&mut dtape, true);
    let xs_d = dtape.constant(batch_s.clone());
    let xt_d = dtape.constant(batch_t.clone());
    let ft_d = dtape.constant(fake_t_val.clone());
    let fs_d = dtape.constant(fake_s_val);
    let dt_real = state.d_t.forward(&mut dtape, &bd_t, xt_d)?;
    let dt_fk = state.d_t.forward(&mut dtape, &bd_t, ft_d)?;
    let ds_real = state.d_s.forward(&mut dtape, &bd_s, xs_d)?;
    let ds_fk = state.d_s.forward(&mut dtape, &bd_s, fs_d)?;
    let obj_t = gan_objective(dtape.value(dt_real), dtape.value(dt_fk))?;
    let obj_s = gan_objective(dtape.value(ds_real), dtape.value(ds_fk))?;
    let adv_t = obj_t.value.f64();
    let adv_s = obj_s.value.f64();
    let report = AamReport {
        step: state.step,
        adv_t,
        adv_s,
        cyc,
        gen_adv,
        gen_loss,
        disc_loss: -(adv_t + adv_s),
        total: adv_t + adv_s + lambda * cyc,
    };
    report.check()?;

    let neg = T::of(-1.0);
    let droot = dtape.loss(
        T::of(report.disc_loss),
        vec![
            (dt_real, obj_t.grad_real.scale(neg)),
            (dt_fk, obj_t.grad_fake.scale(neg)),
            (ds_real, obj_s.grad_real.scale(neg)),
            (ds_fk, obj_s.grad_fake.scale(neg)),
        ],
    );

    let grads = tape.backward(root);
    let g1 = b_s2t.grads(&grads, state.g_s2t.params());
    let g2 = b_t2s.grads(&grads, state.g_t2s.params());
    let dgrads = dtape.backward(droot);
    let g3 = bd_s.grads(&dgrads, state.d_s.params());
    let g4 = bd_t.grads(&dgrads, state.d_t.params());
    state.opt_g_s2t.step(state.g_s2t.params_mut(), &g1)?;
    state.opt_g_t2s.step(state.g_t2s.params_mut(), &g2)?;
    state.opt_d_s.step(state.d_s.params_mut(), &g3)?;
    state.opt_d_t.step(state.d_t.params_mut(), &g4)?;
    state.step += 1;

    let d_scores = patch_means(&state.d_t.patch_scores(&fake_t_val)?);
    Ok((
        report,
        SyntheticBatch {
            images: fake_t_val,
            d_scores,
        },
    ))
}
