//! The three networks: searchable mask-to-image generator, conditional
//! patch discriminator, and a small U-Net segmenter.

mod cell;
mod discriminator;
mod generator;
mod segnet;

pub use cell::{CellDirection, SearchableCell};
pub use discriminator::DiscriminatorNet;
pub use generator::GeneratorNet;
pub use segnet::{SegNet, NUM_CLASSES};


use rand::Rng;

use crate::autodiff::{GroupName, ParamGroup, Var};
use crate::error::Result;
use crate::scalar::Real;
use crate::tensor::{ConvSpec, Tensor};

/// Hidden-layer nonlinearity shared by all three networks.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Activation {
    Relu,
    LeakyRelu(f64),
    /// `x · sigmoid(x)`; smooth, so finite-difference second-order
    /// products do not straddle kinks.
    Silu,
    Tanh,
}

impl Activation {
    pub fn apply<'t, T: Real>(&self, x: Var<'t, T>) -> Result<Var<'t, T>> {
        match *self {
            Activation::Relu => Ok(x.relu()),
            Activation::LeakyRelu(slope) => Ok(x.leaky_relu(T::lit(slope))),
            Activation::Silu => x.silu(),
            Activation::Tanh => Ok(x.tanh()),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ModelConfig {
    /// Square image extent; a power of two.
    pub img_size: usize,
    pub img_channels: usize,
    /// Encoder (and decoder) cell count of the generator.
    pub enc_cells: usize,
    pub base_channels: usize,
    pub activation: Activation,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            img_size: 32,
            img_channels: 1,
            enc_cells: 3,
            base_channels: 4,
            activation: Activation::Silu,
        }
    }
}

/// Shape and init scale of one parameter tensor.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamSpec {
    pub label: String,
    pub shape: Vec<usize>,
    pub fan_in: usize,
}

/// Ordered parameter declarations of one group.
#[derive(Debug, Clone)]
pub struct ParamLayout {
    name: GroupName,
    specs: Vec<ParamSpec>,
}

impl ParamLayout {
    pub fn new(name: GroupName) -> Self {
        Self { name, specs: Vec::new() }
    }

    pub(crate) fn declare(&mut self, label: String, shape: Vec<usize>, fan_in: usize) -> usize {
        self.specs.push(ParamSpec { label, shape, fan_in });
        self.specs.len() - 1
    }

    pub fn specs(&self) -> &[ParamSpec] {
        &self.specs
    }

    pub fn numel(&self) -> usize {
        self.specs.iter().map(|s| s.shape.iter().product::<usize>()).sum()
    }

    /// Centered uniform init with half-width `1/√fan_in`.
    pub fn init<T: Real>(&self, rng: &mut impl Rng) -> ParamGroup<T> {
        let mut group = ParamGroup::new(self.name);
        for spec in &self.specs {
            let bound = 1.0 / (spec.fan_in.max(1) as f64).sqrt();
            let t = Tensor::from_fn(&spec.shape, |_| T::lit(rng.gen_range(-bound..bound)));
            group.push(spec.label.clone(), t);
        }
        group
    }

    /// Checks that `group` has exactly this layout.
    pub fn validate<T: Real>(&self, group: &ParamGroup<T>) -> Result<()> {
        let ok = group.name() == self.name
            && group.len() == self.specs.len()
            && group.entries().zip(&self.specs).all(|((l, t), s)| l == s.label && t.shape() == s.shape.as_slice());
        if ok {
            Ok(())
        } else {
            Err(crate::Error::invalid(format!(
                "parameter group {} does not match the {} layout ({} tensors expected, {} given)",
                group.name(),
                self.name,
                self.specs.len(),
                group.len()
            )))
        }
    }
}

/// Per-cell choice after search: the highest-weight candidate.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CellChoice {
    pub cell: String,
    pub index: usize,
    pub spec: ConvSpec,
}

/// Collapses every cell's mixture to its argmax candidate, lowest index on
/// ties. `arch` must follow the generator's architecture layout.
pub fn derive_architecture<T: Real>(gen: &GeneratorNet, arch: &ParamGroup<T>) -> Result<Vec<CellChoice>> {
    gen.arch_layout().validate(arch)?;
    Ok(gen
        .cells()
        .map(|cell| {
            let index = argmax_lowest(arch.get(cell.logit_index()).data());
            CellChoice {
                cell: cell.label().to_string(),
                index,
                spec: cell.specs()[index],
            }
        })
        .collect())
}

/// Index of the largest value; the first one wins ties.
pub fn argmax_lowest<T: Real>(values: &[T]) -> usize {
    let mut best = 0;
    for (i, &v) in values.iter().enumerate().skip(1) {
        if v > values[best] {
            best = i;
        }
    }
    best
}

/// Per-pixel class prediction from 2-class logits: 1 where the foreground
/// logit exceeds the background one.
pub fn predict_mask<T: Real>(logits: &Tensor<T>) -> Result<Tensor<T>> {
    let bg = logits.slice_channels(0, 1)?;
    let fg = logits.slice_channels(1, 1)?;
    fg.zip_with(&bg, "predict_mask", |f, b| if f > b { T::one() } else { T::zero() })
}
