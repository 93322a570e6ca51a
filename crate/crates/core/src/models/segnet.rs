use rand::Rng;

use crate::autodiff::{GroupName, ParamGroup, Var};
use crate::error::{Error, Result};
use crate::scalar::Real;
use crate::tensor::ConvSpec;

use super::{ModelConfig, ParamLayout};

pub const NUM_CLASSES: usize = 2;

/// Two-level U-Net producing per-pixel logits for background and
/// foreground.
#[derive(Debug, Clone)]
pub struct SegNet {
    cfg: ModelConfig,
    layout: ParamLayout,
    layers: Vec<(usize, usize, ConvSpec)>,
}

const SAME: ConvSpec = ConvSpec::conv(3, 1, 1);
const DOWN: ConvSpec = ConvSpec::conv(4, 2, 1);
const UP: ConvSpec = ConvSpec::up(4, 2, 1);

impl SegNet {
    pub fn new(cfg: ModelConfig) -> Self {
        let b = cfg.base_channels;
        let plan = [
            ("in", cfg.img_channels, b, SAME),
            ("down1", b, 2 * b, DOWN),
            ("down2", 2 * b, 4 * b, DOWN),
            ("up2", 4 * b, 2 * b, UP),
            ("merge2", 4 * b, 2 * b, SAME),
            ("up1", 2 * b, b, UP),
            ("head", 2 * b, NUM_CLASSES, SAME),
        ];
        let mut layout = ParamLayout::new(GroupName::S);
        let mut layers = Vec::new();
        for (name, cin, cout, spec) in plan {
            let k = spec.kernel;
            let shape = if spec.transposed { vec![cin, cout, k, k] } else { vec![cout, cin, k, k] };
            let fan_in = cin * k * k;
            let w = layout.declare(format!("{name}.weight"), shape, fan_in);
            let bias = layout.declare(format!("{name}.bias"), vec![cout], fan_in);
            layers.push((w, bias, spec));
        }
        Self { cfg, layout, layers }
    }

    pub fn layout(&self) -> &ParamLayout {
        &self.layout
    }

    pub fn init<T: Real>(&self, rng: &mut impl Rng) -> ParamGroup<T> {
        self.layout.init(rng)
    }

    fn layer<'t, T: Real>(&self, i: usize, s: &[Var<'t, T>], x: Var<'t, T>) -> Result<Var<'t, T>> {
        let (w, b, spec) = self.layers[i];
        x.conv2d(s[w], Some(s[b]), spec)
    }

    /// Class logits of shape `(batch, 2, H, W)`.
    pub fn forward<'t, T: Real>(&self, s: &[Var<'t, T>], image: Var<'t, T>) -> Result<Var<'t, T>> {
        let shape = image.shape();
        if shape.len() != 4 || shape[1] != self.cfg.img_channels || !shape[2].is_multiple_of(4) || !shape[3].is_multiple_of(4) {
            return Err(Error::InvalidShape {
                op: "segnet_forward",
                msg: format!("expected (batch, {}, 4m, 4n), got {shape:?}", self.cfg.img_channels),
            });
        }
        let act = |x: Var<'t, T>| self.cfg.activation.apply(x);
        let c1 = act(self.layer(0, s, image)?)?;
        let c2 = act(self.layer(1, s, c1)?)?;
        let c3 = act(self.layer(2, s, c2)?)?;
        let u2 = act(self.layer(3, s, c3)?)?;
        let m2 = act(self.layer(4, s, Var::concat_channels(&[u2, c2])?)?)?;
        let u1 = act(self.layer(5, s, m2)?)?;
        self.layer(6, s, Var::concat_channels(&[u1, c1])?)
    }
}
