//! The noise-prediction network `ε_θ`, its training, and the Gaussian-filter baseline.
//!
//! The network is a two-level U-Net over single-channel `l × l` images:
//!
//! ```text
//! stem   conv3x3  1      -> c1            + t_stem, SiLU     (l)
//! enc1   conv3x3/2 c1    -> c2            + t_enc1, SiLU     (l/2)
//! enc2   conv3x3/2 c2    -> c3            + t_enc2, SiLU     (l/4)
//! mid    conv3x3  c3     -> c3            SiLU               (l/4)
//! dec1   up2, concat enc1, conv c3+c2 -> c2, SiLU            (l/2)
//! dec2   up2, concat stem, conv c2+c1 -> c1, SiLU            (l)
//! head   conv3x3  c1     -> 1, then 0.5 (Y + Yᵀ)
//! ```
//!
//! `t_*` are per-channel biases from the step embedding:
//! `h = SiLU(W_e · emb(k) + b_e)`, `t_s = W_s h + b_s`.

mod filter;
mod train;
mod unet;

use std::path::Path;

use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::container::{Tensor, TensorFile};
use crate::diffusion::EpsModel;
use crate::error::{Error, Result};
use crate::linalg::SymMatrix;
use crate::rng::SeedStream;

pub use filter::{gaussian_filter_precondition, gaussian_kernel};
pub use train::{
    loss_simple, train, train_resumable, zero_predictor_loss, TrainHyper, TrainOutcome, TrainRecord, TrainState,
    TrainingSet,
};
pub use unet::{loss_and_gradient, predict_batch};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Architecture {
    pub c1: usize,
    pub c2: usize,
    pub c3: usize,
    pub d_emb: usize,
}

impl Default for Architecture {
    fn default() -> Self {
        Self { c1: 16, c2: 32, c3: 64, d_emb: 32 }
    }
}

impl Architecture {
    pub fn validate(&self) -> Result<()> {
        if self.c1 == 0 || self.c2 == 0 || self.c3 == 0 {
            return Err(Error::invalid("channel widths must be positive"));
        }
        if self.d_emb == 0 || self.d_emb % 2 != 0 {
            return Err(Error::invalid(format!("embedding size must be even and positive, got {}", self.d_emb)));
        }
        Ok(())
    }

    /// Tensor names and shapes, in storage order. Each bias directly follows its weight.
    pub fn layout(&self) -> Vec<(&'static str, Vec<usize>)> {
        let Architecture { c1, c2, c3, d_emb } = *self;
        vec![
            ("emb/w", vec![c1, d_emb]),
            ("emb/b", vec![c1]),
            ("emb_stem/w", vec![c1, c1]),
            ("emb_stem/b", vec![c1]),
            ("emb_enc1/w", vec![c2, c1]),
            ("emb_enc1/b", vec![c2]),
            ("emb_enc2/w", vec![c3, c1]),
            ("emb_enc2/b", vec![c3]),
            ("stem/w", vec![c1, 1, 3, 3]),
            ("stem/b", vec![c1]),
            ("enc1/w", vec![c2, c1, 3, 3]),
            ("enc1/b", vec![c2]),
            ("enc2/w", vec![c3, c2, 3, 3]),
            ("enc2/b", vec![c3]),
            ("mid/w", vec![c3, c3, 3, 3]),
            ("mid/b", vec![c3]),
            ("dec1/w", vec![c2, c3 + c2, 3, 3]),
            ("dec1/b", vec![c2]),
            ("dec2/w", vec![c1, c2 + c1, 3, 3]),
            ("dec2/b", vec![c1]),
            ("head/w", vec![1, c1, 3, 3]),
            ("head/b", vec![1]),
        ]
    }

    pub fn param_count(&self) -> usize {
        self.layout().iter().map(|(_, s)| s.iter().product::<usize>()).sum()
    }
}

/// Indices into [`Architecture::layout`].
pub(crate) mod slot {
    pub const EMB: usize = 0;
    pub const EMB_STEM: usize = 2;
    pub const EMB_ENC1: usize = 4;
    pub const EMB_ENC2: usize = 6;
    pub const STEM: usize = 8;
    pub const ENC1: usize = 10;
    pub const ENC2: usize = 12;
    pub const MID: usize = 14;
    pub const DEC1: usize = 16;
    pub const DEC2: usize = 18;
    pub const HEAD: usize = 20;
}

/// All network weights in one flat buffer, laid out as [`Architecture::layout`].
#[derive(Clone, PartialEq)]
pub struct DenoiserParams {
    arch: Architecture,
    values: Vec<f64>,
    offsets: Vec<usize>,
}

impl std::fmt::Debug for DenoiserParams {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("DenoiserParams")
            .field("arch", &self.arch)
            .field("param_count", &self.values.len())
            .finish()
    }
}

fn offsets_for(arch: &Architecture) -> Vec<usize> {
    let mut offsets = vec![0];
    for (_, shape) in arch.layout() {
        let last = *offsets.last().unwrap();
        offsets.push(last + shape.iter().product::<usize>());
    }
    offsets
}

impl DenoiserParams {
    pub fn zeros(arch: Architecture) -> Result<Self> {
        arch.validate()?;
        let offsets = offsets_for(&arch);
        Ok(Self {
            arch,
            values: vec![0.0; *offsets.last().unwrap()],
            offsets,
        })
    }

    /// Uniform `±1/√fan_in` initialization for every weight and bias.
    pub fn init(arch: Architecture, seed: SeedStream) -> Result<Self> {
        let mut p = Self::zeros(arch)?;
        let mut rng = seed.rng();
        let layout = arch.layout();
        for pair in 0..layout.len() / 2 {
            let w_shape = &layout[2 * pair].1;
            let fan_in: usize = w_shape[1..].iter().product();
            let bound = 1.0 / (fan_in as f64).sqrt();
            let (a, b) = (p.offsets[2 * pair], p.offsets[2 * pair + 2]);
            for v in &mut p.values[a..b] {
                *v = rng.gen_range(-bound..bound);
            }
        }
        Ok(p)
    }

    pub fn from_values(arch: Architecture, values: Vec<f64>) -> Result<Self> {
        let mut p = Self::zeros(arch)?;
        if values.len() != p.values.len() {
            return Err(Error::dim(format!(
                "architecture needs {} parameters, got {}",
                p.values.len(),
                values.len()
            )));
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::Data("parameters must be finite".into()));
        }
        p.values = values;
        Ok(p)
    }

    pub fn architecture(&self) -> Architecture {
        self.arch
    }

    pub fn param_count(&self) -> usize {
        self.values.len()
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [f64] {
        &mut self.values
    }

    pub(crate) fn range(&self, slot: usize) -> std::ops::Range<usize> {
        self.offsets[slot]..self.offsets[slot + 1]
    }

    pub(crate) fn slice(&self, slot: usize) -> &[f64] {
        &self.values[self.range(slot)]
    }

    pub fn to_container(&self) -> TensorFile {
        TensorFile::new(
            self.arch
                .layout()
                .into_iter()
                .enumerate()
                .map(|(i, (name, shape))| Tensor::new(name, shape, self.slice(i).to_vec()).expect("layout is consistent"))
                .collect(),
        )
    }

    /// Rebuilds parameters from a container; the architecture is read off the tensor shapes.
    pub fn from_container(file: &TensorFile) -> Result<Self> {
        let emb = file.require("emb/w")?;
        let mid = file.require("mid/w")?;
        let enc1 = file.require("enc1/w")?;
        if emb.info.shape.len() != 2 || mid.info.shape.len() != 4 || enc1.info.shape.len() != 4 {
            return Err(Error::format("unexpected tensor rank in weights file"));
        }
        let arch = Architecture {
            c1: emb.info.shape[0],
            d_emb: emb.info.shape[1],
            c2: enc1.info.shape[0],
            c3: mid.info.shape[0],
        };
        arch.validate().map_err(|e| Error::format(e.to_string()))?;
        let layout = arch.layout();
        if file.tensors.len() != layout.len() {
            return Err(Error::format(format!(
                "weights file has {} tensors, architecture needs {}",
                file.tensors.len(),
                layout.len()
            )));
        }
        let mut values = Vec::with_capacity(arch.param_count());
        for (t, (name, shape)) in file.tensors.iter().zip(&layout) {
            if t.info.name != *name || t.info.shape != *shape {
                return Err(Error::format(format!(
                    "tensor {} {:?} does not match expected {} {:?}",
                    t.info.name, t.info.shape, name, shape
                )));
            }
            values.extend_from_slice(&t.data);
        }
        Self::from_values(arch, values).map_err(|e| Error::format(e.to_string()))
    }
}

pub fn save_params(params: &DenoiserParams, path: impl AsRef<Path>) -> Result<()> {
    params.to_container().write(path)
}

pub fn load_params(path: impl AsRef<Path>) -> Result<DenoiserParams> {
    DenoiserParams::from_container(&TensorFile::read(path)?)
}

/// `(sin kω_0, cos kω_0, sin kω_1, cos kω_1, …)` with `ω_j = 10000^(−2j/d_emb)`.
pub fn sinusoidal_embed(k: usize, d_emb: usize) -> Result<Vec<f64>> {
    if d_emb % 2 != 0 {
        return Err(Error::invalid(format!("embedding size must be even, got {d_emb}")));
    }
    let mut out = Vec::with_capacity(d_emb);
    for j in 0..d_emb / 2 {
        let w = 10000f64.powf(-2.0 * j as f64 / d_emb as f64);
        let a = k as f64 * w;
        out.push(a.sin());
        out.push(a.cos());
    }
    Ok(out)
}

/// Single-input forward pass.
pub fn unet_forward(x: &SymMatrix, k: usize, params: &DenoiserParams) -> Result<SymMatrix> {
    Ok(predict_batch(params, std::slice::from_ref(x), &[k])?.remove(0))
}

impl EpsModel for DenoiserParams {
    fn predict(&self, x: &SymMatrix, k: usize) -> Result<SymMatrix> {
        unet_forward(x, k, self)
    }
}
