//! Named parameter storage, initialisation, Adam and checkpoint files.

use std::collections::BTreeMap;
use std::path::Path;

use ndarray::{ArrayD, IxDyn};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::tape::{cst, Scalar};
use crate::error::{Error, Result};
use crate::io::{read_tensors, write_tensors, TensorData};

#[derive(Debug, Clone, PartialEq)]
pub struct ParamSet<T> {
    pub names: Vec<String>,
    pub values: Vec<ArrayD<T>>,
    pub grads: Vec<ArrayD<T>>,
}

impl<T: Scalar> Default for ParamSet<T> {
    fn default() -> Self {
        Self {
            names: Vec::new(),
            values: Vec::new(),
            grads: Vec::new(),
        }
    }
}

impl<T: Scalar> ParamSet<T> {
    pub fn add(&mut self, name: impl Into<String>, value: ArrayD<T>) -> usize {
        let name = name.into();
        assert!(!self.names.contains(&name), "duplicate parameter {name}");
        self.grads.push(ArrayD::zeros(value.raw_dim()));
        self.values.push(value);
        self.names.push(name);
        self.values.len() - 1
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn num_scalars(&self) -> usize {
        self.values.iter().map(|v| v.len()).sum()
    }

    pub fn zero_grads(&mut self) {
        for g in &mut self.grads {
            g.fill(T::zero());
        }
    }

    pub fn scale_grads(&mut self, c: T) {
        for g in &mut self.grads {
            g.mapv_inplace(|v| v * c);
        }
    }

    pub fn grad_norm(&self) -> T {
        self.grads.iter().flat_map(|g| g.iter()).map(|&v| v * v).sum::<T>().sqrt()
    }

    pub fn cast<U: Scalar>(&self) -> ParamSet<U> {
        let conv = |a: &ArrayD<T>| a.mapv(|v| cst::<U>(v.to_f64().expect("finite")));
        ParamSet {
            names: self.names.clone(),
            values: self.values.iter().map(conv).collect(),
            grads: self.grads.iter().map(conv).collect(),
        }
    }

    pub fn is_finite(&self) -> bool {
        self.values.iter().flat_map(|v| v.iter()).all(|v| v.is_finite())
    }
}

/// He-normal convolution weights `[out, in, k, k]`; a small positive bias
/// keeps freshly initialised ReLUs off their kink.
pub fn conv_init<T: Scalar>(rng: &mut ChaCha8Rng, out: usize, inp: usize, k: usize) -> (ArrayD<T>, ArrayD<T>) {
    let std = (2.0 / (inp * k * k) as f64).sqrt();
    let normal = Normal::new(0.0, std).expect("positive std");
    let w = ArrayD::from_shape_simple_fn(IxDyn(&[out, inp, k, k]), || cst(normal.sample(rng)));
    (w, ArrayD::from_elem(IxDyn(&[out]), cst(0.01)))
}

/// He-normal linear weights `[in, out]` and zero bias.
pub fn linear_init<T: Scalar>(rng: &mut ChaCha8Rng, inp: usize, out: usize) -> (ArrayD<T>, ArrayD<T>) {
    let std = (2.0 / inp as f64).sqrt();
    let normal = Normal::new(0.0, std).expect("positive std");
    let w = ArrayD::from_shape_simple_fn(IxDyn(&[inp, out]), || cst(normal.sample(rng)));
    (w, ArrayD::zeros(IxDyn(&[out])))
}

/// Uniform noise in `[-a, a]`, used for small output layers.
pub fn uniform<T: Scalar>(rng: &mut ChaCha8Rng, shape: &[usize], a: f64) -> ArrayD<T> {
    ArrayD::from_shape_simple_fn(IxDyn(shape), || cst(rng.gen_range(-a..=a)))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Global gradient-norm clip; 0 disables clipping.
    pub clip_norm: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            clip_norm: 10.0,
        }
    }
}

pub struct Adam {
    pub cfg: AdamConfig,
    m: Vec<ArrayD<f32>>,
    v: Vec<ArrayD<f32>>,
    t: i32,
}

impl Adam {
    pub fn new(cfg: AdamConfig, params: &ParamSet<f32>) -> Self {
        Self {
            cfg,
            m: params.values.iter().map(|v| ArrayD::zeros(v.raw_dim())).collect(),
            v: params.values.iter().map(|v| ArrayD::zeros(v.raw_dim())).collect(),
            t: 0,
        }
    }

    /// One update from the accumulated gradients, scaled by `lr_scale`.
    pub fn step(&mut self, params: &mut ParamSet<f32>, lr_scale: f64) {
        self.t += 1;
        let c = &self.cfg;
        let norm = params.grad_norm() as f64;
        let clip = if c.clip_norm > 0.0 && norm > c.clip_norm {
            (c.clip_norm / norm) as f32
        } else {
            1.0
        };
        let (b1, b2) = (c.beta1 as f32, c.beta2 as f32);
        let bc1 = 1.0 - c.beta1.powi(self.t);
        let bc2 = 1.0 - c.beta2.powi(self.t);
        let step = (c.lr * lr_scale * bc2.sqrt() / bc1) as f32;
        let eps = (c.eps * bc2.sqrt()) as f32;
        for i in 0..params.len() {
            ndarray::Zip::from(&mut params.values[i])
                .and(&params.grads[i])
                .and(&mut self.m[i])
                .and(&mut self.v[i])
                .for_each(|p, &g, m, v| {
                    let g = g * clip;
                    *m = b1 * *m + (1.0 - b1) * g;
                    *v = b2 * *v + (1.0 - b2) * g * g;
                    *p -= step * *m / (v.sqrt() + eps);
                });
        }
    }
}

/// Header stored with every checkpoint.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub format: String,
    pub version: u32,
    /// Network kind, e.g. "detector".
    pub kind: String,
    /// Architecture configuration as JSON.
    pub config: serde_json::Value,
}

pub const CHECKPOINT_FORMAT: &str = "occpose-checkpoint";
pub const CHECKPOINT_VERSION: u32 = 1;

pub fn save_checkpoint(path: &Path, params: &ParamSet<f32>, kind: &str, config: serde_json::Value) -> Result<()> {
    let meta = CheckpointMeta {
        format: CHECKPOINT_FORMAT.into(),
        version: CHECKPOINT_VERSION,
        kind: kind.into(),
        config,
    };
    let tensors: BTreeMap<String, TensorData> = params
        .names
        .iter()
        .zip(&params.values)
        .map(|(n, v)| (n.clone(), TensorData::F32(v.clone())))
        .collect();
    write_tensors(path, &tensors, &serde_json::to_string(&meta)?)
}

pub fn read_checkpoint_meta(path: &Path) -> Result<(CheckpointMeta, BTreeMap<String, TensorData>)> {
    let (tensors, meta) = read_tensors(path)?;
    let meta: CheckpointMeta = serde_json::from_str(&meta)?;
    if meta.format != CHECKPOINT_FORMAT || meta.version != CHECKPOINT_VERSION {
        return Err(Error::Format(format!(
            "{}: unsupported checkpoint {} v{}",
            path.display(),
            meta.format,
            meta.version
        )));
    }
    Ok((meta, tensors))
}

/// Fills `params` from a checkpoint, requiring identical names and shapes.
pub fn load_into(params: &mut ParamSet<f32>, mut tensors: BTreeMap<String, TensorData>) -> Result<()> {
    if tensors.len() != params.len() {
        return Err(Error::Format(format!(
            "checkpoint has {} tensors, model expects {}",
            tensors.len(),
            params.len()
        )));
    }
    for (name, value) in params.names.iter().zip(params.values.iter_mut()) {
        let t = tensors
            .remove(name)
            .ok_or_else(|| Error::Format(format!("checkpoint lacks parameter {name}")))?
            .into_f32(name)?;
        if t.shape() != value.shape() {
            return Err(Error::Format(format!(
                "parameter {name}: checkpoint shape {:?}, model shape {:?}",
                t.shape(),
                value.shape()
            )));
        }
        *value = t;
    }
    Ok(())
}
