use rand::Rng;

use crate::autodiff::{GroupName, ParamGroup, Var};
use crate::error::{Error, Result};
use crate::scalar::Real;
use crate::tensor::ConvSpec;

use super::{ModelConfig, ParamLayout};

const LAYERS: usize = 3;

/// Conditional patch discriminator: three Conv-421 layers over the
/// channel-concatenated (mask, image) pair, ending in a one-channel logit
/// map at 1/8 resolution. No final sigmoid.
#[derive(Debug, Clone)]
pub struct DiscriminatorNet {
    cfg: ModelConfig,
    layout: ParamLayout,
    weights: Vec<usize>,
    biases: Vec<usize>,
}

impl DiscriminatorNet {
    pub fn new(cfg: ModelConfig) -> Self {
        let mut layout = ParamLayout::new(GroupName::H);
        let mut weights = Vec::new();
        let mut biases = Vec::new();
        let mut cin = 1 + cfg.img_channels;
        for i in 0..LAYERS {
            let cout = if i + 1 == LAYERS { 1 } else { cfg.base_channels << i };
            let fan_in = cin * 16;
            weights.push(layout.declare(format!("d{i}.weight"), vec![cout, cin, 4, 4], fan_in));
            biases.push(layout.declare(format!("d{i}.bias"), vec![cout], fan_in));
            cin = cout;
        }
        Self {
            cfg,
            layout,
            weights,
            biases,
        }
    }

    pub fn layout(&self) -> &ParamLayout {
        &self.layout
    }

    pub fn init<T: Real>(&self, rng: &mut impl Rng) -> ParamGroup<T> {
        self.layout.init(rng)
    }

    pub fn forward<'t, T: Real>(&self, h: &[Var<'t, T>], mask: Var<'t, T>, image: Var<'t, T>) -> Result<Var<'t, T>> {
        let (ms, is) = (mask.shape(), image.shape());
        if ms.len() != 4 || is.len() != 4 || ms[0] != is[0] || ms[2..] != is[2..] {
            return Err(Error::ShapeMismatch {
                op: "discriminator_forward",
                lhs: ms,
                rhs: is,
            });
        }
        let mut x = Var::concat_channels(&[mask, image])?;
        let spec = ConvSpec::conv(4, 2, 1);
        for i in 0..LAYERS {
            x = x.conv2d(h[self.weights[i]], Some(h[self.biases[i]]), spec)?;
            if i + 1 < LAYERS {
                x = self.cfg.activation.apply(x)?;
            }
        }
        Ok(x)
    }
}
