use rand::Rng;

use crate::autodiff::{GroupName, ParamGroup, Var};
use crate::error::{Error, Result};
use crate::scalar::Real;

use super::{CellDirection, ModelConfig, ParamLayout, SearchableCell};

/// U-Net shaped mask-to-image generator built from searchable cells.
///
/// Encoder cell `i` halves the extent and widens to `base · 2^i` channels.
/// Decoder cells double the extent; from the second decoder on, the input
/// is the previous decoder output concatenated with the encoder output of
/// matching resolution. The last decoder emits `img_channels` through tanh.
#[derive(Debug, Clone)]
pub struct GeneratorNet {
    cfg: ModelConfig,
    encoders: Vec<SearchableCell>,
    decoders: Vec<SearchableCell>,
    weights: ParamLayout,
    arch: ParamLayout,
}

impl GeneratorNet {
    pub fn new(cfg: ModelConfig) -> Result<Self> {
        let e = cfg.enc_cells;
        if e == 0 || cfg.base_channels == 0 || cfg.img_channels == 0 {
            return Err(Error::invalid("generator needs at least one cell and one channel"));
        }
        let mut weights = ParamLayout::new(GroupName::G);
        let mut arch = ParamLayout::new(GroupName::A);
        let width = |i: usize| cfg.base_channels << i;
        let mut encoders = Vec::with_capacity(e);
        for i in 0..e {
            let cin = if i == 0 { 1 } else { width(i - 1) };
            encoders.push(SearchableCell::declare(
                &format!("enc{i}"),
                CellDirection::Encoder,
                cin,
                width(i),
                &mut weights,
                &mut arch,
            ));
        }
        let mut decoders = Vec::with_capacity(e);
        for j in 0..e {
            // level this decoder upsamples from
            let level = e - 1 - j;
            let cin = if j == 0 { width(level) } else { 2 * width(level) };
            let cout = if level == 0 { cfg.img_channels } else { width(level - 1) };
            decoders.push(SearchableCell::declare(
                &format!("dec{j}"),
                CellDirection::Decoder,
                cin,
                cout,
                &mut weights,
                &mut arch,
            ));
        }
        Ok(Self {
            cfg,
            encoders,
            decoders,
            weights,
            arch,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.cfg
    }

    pub fn weight_layout(&self) -> &ParamLayout {
        &self.weights
    }

    pub fn arch_layout(&self) -> &ParamLayout {
        &self.arch
    }

    /// All cells, encoders first.
    pub fn cells(&self) -> impl Iterator<Item = &SearchableCell> {
        self.encoders.iter().chain(&self.decoders)
    }

    /// Fresh generator weights `G` and architecture logits `A`.
    pub fn init<T: Real>(&self, rng: &mut impl Rng) -> (ParamGroup<T>, ParamGroup<T>) {
        let g = self.weights.init(rng);
        let a = self.arch.init(rng);
        (g, a)
    }

    fn check_mask(&self, shape: &[usize]) -> Result<()> {
        let e = self.cfg.enc_cells;
        let bad = |msg: String| Err(Error::InvalidShape { op: "generator_forward", msg });
        if shape.len() != 4 || shape[1] != 1 {
            return bad(format!("mask must be (batch, 1, H, W), got {shape:?}"));
        }
        let (h, w) = (shape[2], shape[3]);
        if h != w || !h.is_power_of_two() || h < (1 << e) {
            return bad(format!("extent {h}x{w} must be square, a power of two, and at least {}", 1 << e));
        }
        Ok(())
    }

    /// Image for `mask` under weights `g` and architecture `a`; values in
    /// (−1, 1), same spatial shape as the mask.
    pub fn forward<'t, T: Real>(&self, g: &[Var<'t, T>], a: &[Var<'t, T>], mask: Var<'t, T>) -> Result<Var<'t, T>> {
        self.check_mask(&mask.shape())?;
        let act = self.cfg.activation;
        let mut skips = Vec::with_capacity(self.encoders.len());
        let mut h = mask;
        for cell in &self.encoders {
            h = act.apply(cell.forward(g, a, h)?)?;
            skips.push(h);
        }
        let e = self.decoders.len();
        for (j, cell) in self.decoders.iter().enumerate() {
            let input = if j == 0 { h } else { Var::concat_channels(&[h, skips[e - 1 - j]])? };
            let y = cell.forward(g, a, input)?;
            h = if j + 1 == e { y.tanh() } else { act.apply(y)? };
        }
        Ok(h)
    }
}
