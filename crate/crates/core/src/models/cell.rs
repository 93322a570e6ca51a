use crate::autodiff::Var;
use crate::error::{Error, Result};
use crate::scalar::Real;
use crate::tensor::{ConvSpec, CANDIDATE_SPECS};

use super::ParamLayout;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CellDirection {
    /// strided convolutions, halving the spatial extent
    Encoder,
    /// transposed convolutions, doubling it
    Decoder,
}

/// K candidate operators mixed by softmax-normalized selection logits:
/// `y = Σ_k softmax(logits)_k · o_k(x)`.
#[derive(Debug, Clone)]
pub struct SearchableCell {
    label: String,
    direction: CellDirection,
    in_channels: usize,
    out_channels: usize,
    specs: Vec<ConvSpec>,
    weights: Vec<usize>,
    biases: Vec<usize>,
    logits: usize,
}

impl SearchableCell {
    /// Declares the candidates' weights in `weights` and one logit vector in
    /// `arch`.
    pub fn declare(
        label: &str,
        direction: CellDirection,
        in_channels: usize,
        out_channels: usize,
        weights: &mut ParamLayout,
        arch: &mut ParamLayout,
    ) -> Self {
        let specs: Vec<ConvSpec> = CANDIDATE_SPECS
            .iter()
            .map(|&(k, s, p)| match direction {
                CellDirection::Encoder => ConvSpec::conv(k, s, p),
                CellDirection::Decoder => ConvSpec::up(k, s, p),
            })
            .collect();
        let mut w_idx = Vec::with_capacity(specs.len());
        let mut b_idx = Vec::with_capacity(specs.len());
        for (k, spec) in specs.iter().enumerate() {
            let kk = spec.kernel;
            let shape = match direction {
                CellDirection::Encoder => vec![out_channels, in_channels, kk, kk],
                CellDirection::Decoder => vec![in_channels, out_channels, kk, kk],
            };
            let fan_in = in_channels * kk * kk;
            w_idx.push(weights.declare(format!("{label}.op{k}.weight"), shape, fan_in));
            b_idx.push(weights.declare(format!("{label}.op{k}.bias"), vec![out_channels], fan_in));
        }
        // tiny init scale keeps the initial mixture close to uniform
        let logits = arch.declare(format!("{label}.alpha"), vec![specs.len()], 1_000_000);
        Self {
            label: label.to_string(),
            direction,
            in_channels,
            out_channels,
            specs,
            weights: w_idx,
            biases: b_idx,
            logits,
        }
    }

    pub fn label(&self) -> &str {
        &self.label
    }

    pub fn direction(&self) -> CellDirection {
        self.direction
    }

    pub fn specs(&self) -> &[ConvSpec] {
        &self.specs
    }

    pub fn in_channels(&self) -> usize {
        self.in_channels
    }

    pub fn out_channels(&self) -> usize {
        self.out_channels
    }

    /// Position of this cell's logit vector in the architecture group.
    pub fn logit_index(&self) -> usize {
        self.logits
    }

    /// Output of candidate `k` alone.
    pub fn candidate<'t, T: Real>(&self, k: usize, weights: &[Var<'t, T>], x: Var<'t, T>) -> Result<Var<'t, T>> {
        x.conv2d(weights[self.weights[k]], Some(weights[self.biases[k]]), self.specs[k])
    }

    /// The softmax-weighted mixture of all candidates.
    pub fn forward<'t, T: Real>(&self, weights: &[Var<'t, T>], arch: &[Var<'t, T>], x: Var<'t, T>) -> Result<Var<'t, T>> {
        let shape = x.shape();
        if shape.len() != 4 || shape[1] != self.in_channels {
            return Err(Error::InvalidShape {
                op: "cell_forward",
                msg: format!("{} expects {} input channels, got {shape:?}", self.label, self.in_channels),
            });
        }
        let alpha = arch[self.logits].softmax()?;
        let mut mixed: Option<Var<'t, T>> = None;
        for k in 0..self.specs.len() {
            let term = self.candidate(k, weights, x)?.scale_by(alpha.index(k)?)?;
            mixed = Some(match mixed {
                Some(acc) => acc.add(term)?,
                None => term,
            });
        }
        mixed.ok_or_else(|| Error::invalid("cell without candidates"))
    }
}
