//! Parameters, layers and the Adam optimizer.

use std::sync::atomic::{AtomicU64, Ordering};

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::autograd::{Gradients, Tape, Var};
use crate::error::{Error, Result};
use crate::kernels::ConvGeometry;
use crate::tensor::{Real, Tensor};

#[derive(Clone, Debug, PartialEq)]
pub struct Param<T> {
    pub name: String,
    pub value: Tensor<T>,
}

/// Ordered, named parameter tensors of one model.
///
/// Every bind or read increments an access counter so callers can verify
/// which models a code path touched.
#[derive(Debug)]
pub struct ParamSet<T> {
    params: Vec<Param<T>>,
    accesses: AtomicU64,
}

impl<T: Clone> Clone for ParamSet<T> {
    fn clone(&self) -> Self {
        Self {
            params: self.params.clone(),
            accesses: AtomicU64::new(0),
        }
    }
}

impl<T: Real> Default for ParamSet<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Real> ParamSet<T> {
    pub fn new() -> Self {
        Self {
            params: Vec::new(),
            accesses: AtomicU64::new(0),
        }
    }

    pub fn push(&mut self, name: impl Into<String>, value: Tensor<T>) -> usize {
        self.params.push(Param {
            name: name.into(),
            value,
        });
        self.params.len() - 1
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = &Param<T>> {
        self.params.iter()
    }

    pub fn get(&self, i: usize) -> &Tensor<T> {
        &self.params[i].value
    }

    pub fn num_scalars(&self) -> usize {
        self.params.iter().map(|p| p.value.len()).sum()
    }

    pub fn access_count(&self) -> u64 {
        self.accesses.load(Ordering::Relaxed)
    }

    fn touch(&self) {
        self.accesses.fetch_add(1, Ordering::Relaxed);
    }

    /// Registers every parameter on the tape. Non-trainable bindings act as
    /// constants, so no gradient flows into them.
    pub fn bind(&self, tape: &mut Tape<T>, trainable: bool) -> Bound {
        self.touch();
        Bound {
            vars: self
                .params
                .iter()
                .map(|p| tape.leaf(p.value.clone(), trainable))
                .collect(),
        }
    }

    /// Snapshot of all parameter values in declared order.
    pub fn read(&self) -> Vec<Tensor<T>> {
        self.touch();
        self.params.iter().map(|p| p.value.clone()).collect()
    }

    /// Overwrites all parameter values. Order and shapes must match.
    pub fn write(&mut self, values: Vec<Tensor<T>>) -> Result<()> {
        if values.len() != self.params.len() {
            return Err(Error::Structure(format!(
                "expected {} parameter tensors, got {}",
                self.params.len(),
                values.len()
            )));
        }
        for (p, v) in self.params.iter().zip(&values) {
            if p.value.shape() != v.shape() {
                return Err(Error::Structure(format!(
                    "parameter `{}` has shape {:?}, got {:?}",
                    p.name,
                    p.value.shape(),
                    v.shape()
                )));
            }
        }
        for (p, v) in self.params.iter_mut().zip(values) {
            p.value = v;
        }
        Ok(())
    }

    pub fn values_mut(&mut self) -> impl Iterator<Item = &mut Tensor<T>> {
        self.params.iter_mut().map(|p| &mut p.value)
    }

    pub fn shapes(&self) -> Vec<(String, Vec<usize>)> {
        self.params
            .iter()
            .map(|p| (p.name.clone(), p.value.shape().to_vec()))
            .collect()
    }
}

/// Tape variables of one model's parameters.
#[derive(Clone, Debug)]
pub struct Bound {
    vars: Vec<Var>,
}

impl Bound {
    pub fn var(&self, i: usize) -> Var {
        self.vars[i]
    }

    /// Parameter gradients in declared order; parameters that did not
    /// influence the root get zeros.
    pub fn grads<T: Real>(&self, grads: &Gradients<T>, params: &ParamSet<T>) -> Vec<Tensor<T>> {
        self.vars
            .iter()
            .zip(params.iter())
            .map(|(v, p)| {
                grads
                    .get(*v)
                    .cloned()
                    .unwrap_or_else(|| Tensor::zeros(p.value.shape()))
            })
            .collect()
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Init {
    /// Normal with std `sqrt(2 / fan_in)`.
    HeNormal,
    /// Normal truncated at two standard deviations.
    TruncatedNormal(f64),
}

fn sample_init<T: Real, R: Rng + ?Sized>(init: Init, fan_in: usize, n: usize, rng: &mut R) -> Vec<T> {
    match init {
        Init::HeNormal => {
            let std = (2.0 / fan_in as f64).sqrt();
            let d = Normal::new(0.0, std).expect("valid std");
            (0..n).map(|_| T::of(d.sample(rng))).collect()
        }
        Init::TruncatedNormal(std) => {
            let d = Normal::new(0.0, std).expect("valid std");
            (0..n)
                .map(|_| loop {
                    let v: f64 = d.sample(rng);
                    if v.abs() <= 2.0 * std {
                        break T::of(v);
                    }
                })
                .collect()
        }
    }
}

#[derive(Clone, Copy, Debug)]
pub struct Conv2d {
    weight: usize,
    bias: usize,
    geometry: ConvGeometry,
}

impl Conv2d {
    #[allow(clippy::too_many_arguments)]
    pub fn new<T: Real, R: Rng + ?Sized>(
        params: &mut ParamSet<T>,
        name: &str,
        in_ch: usize,
        out_ch: usize,
        kernel: usize,
        geometry: ConvGeometry,
        init: Init,
        rng: &mut R,
    ) -> Self {
        let fan_in = in_ch * kernel * kernel;
        let w = sample_init(init, fan_in, out_ch * fan_in, rng);
        let weight = params.push(
            format!("{name}.weight"),
            Tensor::from_vec(&[out_ch, in_ch, kernel, kernel], w).expect("conv weight shape"),
        );
        let bias = params.push(format!("{name}.bias"), Tensor::zeros(&[out_ch]));
        Self {
            weight,
            bias,
            geometry,
        }
    }

    /// 3x3, stride 1, same padding.
    pub fn same3<T: Real, R: Rng + ?Sized>(
        params: &mut ParamSet<T>,
        name: &str,
        in_ch: usize,
        out_ch: usize,
        init: Init,
        rng: &mut R,
    ) -> Self {
        Self::new(params, name, in_ch, out_ch, 3, ConvGeometry { stride: 1, pad: 1 }, init, rng)
    }

    pub fn forward<T: Real>(&self, tape: &mut Tape<T>, bound: &Bound, x: Var) -> Var {
        tape.conv2d(x, bound.var(self.weight), Some(bound.var(self.bias)), self.geometry)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl AdamConfig {
    pub fn with_lr(lr: f64) -> Self {
        Self {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

#[derive(Clone, Debug)]
pub struct Adam<T> {
    pub config: AdamConfig,
    step: u64,
    m: Vec<Tensor<T>>,
    v: Vec<Tensor<T>>,
}

impl<T: Real> Adam<T> {
    pub fn new(config: AdamConfig, params: &ParamSet<T>) -> Self {
        let zeros: Vec<Tensor<T>> = params.iter().map(|p| Tensor::zeros(p.value.shape())).collect();
        Self {
            config,
            step: 0,
            m: zeros.clone(),
            v: zeros,
        }
    }

    pub fn steps(&self) -> u64 {
        self.step
    }

    pub fn step(&mut self, params: &mut ParamSet<T>, grads: &[Tensor<T>]) -> Result<()> {
        if grads.len() != params.len() {
            return Err(Error::Structure(format!(
                "{} gradients for {} parameters",
                grads.len(),
                params.len()
            )));
        }
        self.step += 1;
        let c = &self.config;
        let (b1, b2) = (T::of(c.beta1), T::of(c.beta2));
        let bc1 = 1.0 - c.beta1.powi(self.step as i32);
        let bc2 = 1.0 - c.beta2.powi(self.step as i32);
        let step_size = T::of(c.lr * bc2.sqrt() / bc1);
        let eps = T::of(c.eps * bc2.sqrt());
        for (((p, g), m), v) in params
            .values_mut()
            .zip(grads)
            .zip(self.m.iter_mut())
            .zip(self.v.iter_mut())
        {
            if p.shape() != g.shape() {
                return Err(Error::Structure(format!(
                    "gradient shape {:?} for parameter {:?}",
                    g.shape(),
                    p.shape()
                )));
            }
            for (((pv, &gv), mv), vv) in p
                .data_mut()
                .iter_mut()
                .zip(g.data())
                .zip(m.data_mut())
                .zip(v.data_mut())
            {
                *mv = b1 * *mv + (T::one() - b1) * gv;
                *vv = b2 * *vv + (T::one() - b2) * gv * gv;
                *pv -= step_size * *mv / (vv.sqrt() + eps);
            }
        }
        Ok(())
    }

    /// First and second moment buffers, for checkpointing.
    pub fn moments(&self) -> (&[Tensor<T>], &[Tensor<T>]) {
        (&self.m, &self.v)
    }

    pub fn restore(&mut self, step: u64, m: Vec<Tensor<T>>, v: Vec<Tensor<T>>) -> Result<()> {
        let same = |a: &[Tensor<T>], b: &[Tensor<T>]| {
            a.len() == b.len() && a.iter().zip(b).all(|(x, y)| x.shape() == y.shape())
        };
        if !same(&m, &self.m) || !same(&v, &self.v) {
            return Err(Error::Structure("optimizer moment shapes differ".into()));
        }
        self.step = step;
        self.m = m;
        self.v = v;
        Ok(())
    }
}
