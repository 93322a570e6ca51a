use crate::autodiff::{Tape, Var};
use crate::error::Result;
use crate::scalar::Real;
use crate::tensor::Tensor;

use super::Networks;

/// Mean binary cross-entropy of logits against a constant target:
/// `softplus(x) − t·x`.
pub fn bce_with_logits<'t, T: Real>(logits: Var<'t, T>, target: f64) -> Result<Var<'t, T>> {
    let t = T::lit(target);
    if t == T::zero() {
        return Ok(logits.softplus().mean());
    }
    logits.softplus().sub(logits.mul_const(t)).map(|v| v.mean())
}

/// Mean per-pixel cross-entropy of 2-class logits `(B, 2, H, W)` against a
/// binary mask `(B, 1, H, W)`, written through the logit difference
/// `d = l₁ − l₀` as `softplus(d) − d·m`.
pub fn pixel_cross_entropy<'t, T: Real>(logits: Var<'t, T>, masks: Var<'t, T>) -> Result<Var<'t, T>> {
    let d = logits.slice_channels(1, 1)?.sub(logits.slice_channels(0, 1)?)?;
    Ok(d.softplus().sub(d.mul(masks)?)?.mean())
}

pub fn segmentation_loss<'t, T: Real>(
    nets: &Networks,
    tape: &'t Tape<T>,
    s: &[Var<'t, T>],
    images: Var<'t, T>,
    masks: &Tensor<T>,
) -> Result<Var<'t, T>> {
    let logits = nets.seg.forward(s, images)?;
    pixel_cross_entropy(logits, tape.leaf(masks.clone()))
}

/// Generator objective `BCE(D(M, G(M)), 1) + λ·mean|G(M) − I|` given the
/// generated images.
pub fn generator_loss<'t, T: Real>(
    nets: &Networks,
    h: &[Var<'t, T>],
    masks: Var<'t, T>,
    fake: Var<'t, T>,
    real: Var<'t, T>,
    lambda_l1: f64,
) -> Result<Var<'t, T>> {
    let adv = bce_with_logits(nets.disc.forward(h, masks, fake)?, 1.0)?;
    if lambda_l1 == 0.0 {
        return Ok(adv);
    }
    let l1 = fake.sub(real)?.abs().mean();
    adv.add(l1.mul_const(T::lit(lambda_l1)))
}

/// Discriminator objective `BCE(D(M, I), 1) + BCE(D(M, G(M)), 0)`; the
/// generated images are cut from the graph.
pub fn discriminator_loss<'t, T: Real>(
    nets: &Networks,
    h: &[Var<'t, T>],
    masks: Var<'t, T>,
    fake: Var<'t, T>,
    real: Var<'t, T>,
) -> Result<Var<'t, T>> {
    let on_real = bce_with_logits(nets.disc.forward(h, masks, real)?, 1.0)?;
    let on_fake = bce_with_logits(nets.disc.forward(h, masks, fake.detach())?, 0.0)?;
    on_real.add(on_fake)
}

/// Both GAN objectives on one tape.
pub struct GanLosses<'t, T> {
    pub disc: Var<'t, T>,
    pub gen: Var<'t, T>,
}

pub fn gan_losses<'t, T: Real>(
    nets: &Networks,
    tape: &'t Tape<T>,
    g: &[Var<'t, T>],
    a: &[Var<'t, T>],
    h: &[Var<'t, T>],
    masks: &Tensor<T>,
    images: &Tensor<T>,
    lambda_l1: f64,
) -> Result<GanLosses<'t, T>> {
    let (m, real) = (tape.leaf(masks.clone()), tape.leaf(images.clone()));
    let fake = nets.gen.forward(g, a, m)?;
    Ok(GanLosses {
        disc: discriminator_loss(nets, h, m, fake, real)?,
        gen: generator_loss(nets, h, m, fake, real, lambda_l1)?,
    })
}
