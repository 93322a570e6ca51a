//! One iteration of the trilevel scheme, split into its stages.

use rand::Rng;

use crate::augment::{apply_sequence, random_sequence, AugmentConfig};
use crate::autodiff::{grads_as_group, mixed_hvp_exact, mixed_hvp_fd, objective2, ParamGroup, Tape, Var};
use crate::error::{Error, Result};
use crate::scalar::Real;
use crate::tensor::{dot, Tensor};

use super::losses::{gan_losses, generator_loss, segmentation_loss};
use super::{Backend, Networks, TrainConfig};

/// The four parameter groups.
#[derive(Debug, Clone, PartialEq)]
pub struct Params<T> {
    pub g: ParamGroup<T>,
    pub h: ParamGroup<T>,
    pub s: ParamGroup<T>,
    pub a: ParamGroup<T>,
}

/// Aligned `(B, 1, H, W)` images and masks.
#[derive(Debug, Clone, PartialEq)]
pub struct Batch<T> {
    pub images: Tensor<T>,
    pub masks: Tensor<T>,
}

impl<T: Real> Batch<T> {
    pub fn len(&self) -> usize {
        self.masks.shape()[0]
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

pub(crate) fn ensure_finite<T: Real>(what: &str, values: &[T]) -> Result<()> {
    match values.iter().position(|v| !v.is_finite()) {
        None => Ok(()),
        Some(i) => Err(Error::NonFinite(format!("{what}: entry {i} is {}", values[i]))),
    }
}

/// Plain gradient step `p − η·grad`; a zero rate returns `p` untouched.
pub fn descend<T: Real>(p: &ParamGroup<T>, eta: f64, grad: &[T]) -> Result<ParamGroup<T>> {
    if eta == 0.0 {
        if grad.len() != p.numel() {
            return Err(Error::LengthMismatch { expected: p.numel(), actual: grad.len() });
        }
        return Ok(p.clone());
    }
    p.axpy(T::lit(-eta), grad)
}

#[derive(Debug, Clone)]
pub struct Stage1<T> {
    pub g: ParamGroup<T>,
    pub h: ParamGroup<T>,
    pub loss_g: f64,
    pub loss_d: f64,
    pub grad_g: Vec<T>,
}

/// `G' = G − η_g ∇_G L_gen`, `H' = H − η_h ∇_H L_disc`; A is read only.
pub fn stage1_update<T: Real>(nets: &Networks, cfg: &TrainConfig, p: &Params<T>, real: &Batch<T>) -> Result<Stage1<T>> {
    let tape = Tape::new();
    let (g, a, h) = (tape.bind(&p.g), tape.bind(&p.a), tape.bind(&p.h));
    let losses = gan_losses(nets, &tape, &g, &a, &h, &real.masks, &real.images, cfg.lambda_l1)?;
    let grad_g = grads_as_group(&tape, losses.gen, &g, &p.g)?.flatten();
    let grad_h = grads_as_group(&tape, losses.disc, &h, &p.h)?.flatten();
    ensure_finite("generator gradient", &grad_g)?;
    ensure_finite("discriminator gradient", &grad_h)?;
    Ok(Stage1 {
        g: descend(&p.g, cfg.eta_g, &grad_g)?,
        h: descend(&p.h, cfg.eta_h, &grad_h)?,
        loss_g: losses.gen.value().item().as_f64(),
        loss_d: losses.disc.value().item().as_f64(),
        grad_g,
    })
}

/// Augments every mask with its own random sequence and renders images
/// with the given generator weights and architecture.
pub fn synth_batch<T: Real>(
    nets: &Networks,
    g: &ParamGroup<T>,
    a: &ParamGroup<T>,
    masks: &Tensor<T>,
    augment: &AugmentConfig,
    rng: &mut impl Rng,
) -> Result<Batch<T>> {
    let kinds = augment.kinds();
    let extent = masks.shape()[3];
    let mut augmented = Vec::with_capacity(masks.shape()[0]);
    for i in 0..masks.shape()[0] {
        let m = masks.slice_batch(i, 1)?;
        augmented.push(if kinds.is_empty() {
            m
        } else {
            apply_sequence(&random_sequence(rng, &kinds, augment.max_len, extent)?, &m)?
        });
    }
    let refs: Vec<&Tensor<T>> = augmented.iter().collect();
    let masks = Tensor::stack(&refs)?.reshape(masks.shape())?;
    let images = generate(nets, g, a, &masks)?;
    Ok(Batch { images, masks })
}

pub fn generate<T: Real>(nets: &Networks, g: &ParamGroup<T>, a: &ParamGroup<T>, masks: &Tensor<T>) -> Result<Tensor<T>> {
    let tape = Tape::new();
    let out = nets.gen.forward(&tape.bind(g), &tape.bind(a), tape.leaf(masks.clone()))?;
    let v = (*out.value()).clone();
    Ok(v)
}

/// `L_seg(S, D̂) + γ·L_seg(S, D_tr)`. The synthetic images are a tape value
/// so callers can keep their dependence on the generator. Either term may
/// be absent; a zero `gamma` drops the real term.
pub fn stage2_objective<'t, T: Real>(
    nets: &Networks,
    tape: &'t Tape<T>,
    s: &[Var<'t, T>],
    synth: Option<(Var<'t, T>, &Tensor<T>)>,
    real: Option<&Batch<T>>,
    gamma: f64,
) -> Result<Var<'t, T>> {
    let synth_term = match synth {
        Some((images, masks)) => Some(segmentation_loss(nets, tape, s, images, masks)?),
        None => None,
    };
    let real_term = match real {
        Some(b) if gamma != 0.0 => {
            Some(segmentation_loss(nets, tape, s, tape.leaf(b.images.clone()), &b.masks)?.mul_const(T::lit(gamma)))
        }
        _ => None,
    };
    match (synth_term, real_term) {
        (Some(x), Some(y)) => x.add(y),
        (Some(x), None) | (None, Some(x)) => Ok(x),
        (None, None) => Err(Error::invalid("segmentation objective has neither synthetic nor weighted real data")),
    }
}

/// `S' = S − η_s ∇_S [L_seg(S, D̂) + γ·L_seg(S, D_tr)]`. Returns S' and the
/// objective value at S.
pub fn stage2_update<T: Real>(
    nets: &Networks,
    s: &ParamGroup<T>,
    synth: Option<&Batch<T>>,
    real: Option<&Batch<T>>,
    gamma: f64,
    eta_s: f64,
) -> Result<(ParamGroup<T>, f64)> {
    let tape = Tape::new();
    let sv = tape.bind(s);
    let synth = synth.map(|b| (tape.leaf(b.images.clone()), &b.masks));
    let loss = stage2_objective(nets, &tape, &sv, synth, real, gamma)?;
    let value = loss.value().item();
    if !value.is_finite() {
        return Err(Error::NonFinite(format!("segmentation objective is {value}")));
    }
    let grad = grads_as_group(&tape, loss, &sv, s)?.flatten();
    ensure_finite("segmentation gradient", &grad)?;
    Ok((descend(s, eta_s, &grad)?, value.as_f64()))
}

/// Validation loss at `s` and its gradient.
pub fn validation_gradient<T: Real>(nets: &Networks, s: &ParamGroup<T>, val: &Batch<T>) -> Result<(f64, Vec<T>)> {
    let tape = Tape::new();
    let sv = tape.bind(s);
    let loss = segmentation_loss(nets, &tape, &sv, tape.leaf(val.images.clone()), &val.masks)?;
    let grad = grads_as_group(&tape, loss, &sv, s)?.flatten();
    Ok((loss.value().item().as_f64(), grad))
}

/// State an iteration's hypergradient depends on.
#[derive(Debug, Clone, Copy)]
pub struct HyperInputs<'a, T> {
    /// G, H, S, A at the start of the iteration.
    pub params: &'a Params<T>,
    /// Generator weights after stage 1.
    pub g_prime: &'a ParamGroup<T>,
    /// Real batch of stage 1 (and the γ term of stage 2).
    pub real: &'a Batch<T>,
    /// Augmented masks the synthetic batch was rendered from.
    pub synth_masks: &'a Tensor<T>,
}

fn mixed<T, F>(backend: Backend, cfg: &TrainConfig, f: F, p: &ParamGroup<T>, q: &ParamGroup<T>, v: &[T]) -> Result<Vec<T>>
where
    T: Real,
    F: for<'t> Fn(&'t Tape<T>, &[Var<'t, T>], &[Var<'t, T>]) -> Result<Var<'t, T>>,
{
    match backend {
        Backend::Fd => mixed_hvp_fd(f, p, q, v, cfg.eps_rule()),
        Backend::Exact => mixed_hvp_exact(f, p, q, v),
    }
}

/// Gradient of the validation loss w.r.t. A given `v = ∇_{S'} L_val`:
///
/// `u = ∇²_{G',S} L_seg(S, D̂(G')) · v`, `w = ∇²_{A,G} L_gen · u`, result
/// `η_g·η_s·w`. The two `−η` factors of the unrolled steps cancel in sign.
/// The real-data term of stage 2 has no G' dependence and drops out of `u`.
///
/// With `cfg.direct_path`, `−η_s ∇²_{A,S} L_seg(S, D̂(A)) · v` is added for
/// the mixture weights used while rendering D̂.
pub fn hypergradient<T: Real>(nets: &Networks, cfg: &TrainConfig, inp: HyperInputs<'_, T>, v: &[T]) -> Result<Vec<T>> {
    let p = inp.params;
    let backend = cfg.hypergrad_backend;
    let masks = inp.synth_masks;
    let mut out = vec![T::zero(); p.a.numel()];

    if cfg.eta_g != 0.0 && cfg.eta_s != 0.0 {
        let a_frozen = &p.a;
        let synth_loss = objective2(move |tape: &Tape<T>, gp: &[Var<'_, T>], s: &[Var<'_, T>]| {
            let images = nets.gen.forward(gp, &tape.bind(a_frozen), tape.leaf(masks.clone()))?;
            segmentation_loss(nets, tape, s, images, masks)
        });
        let u = mixed(backend, cfg, synth_loss, inp.g_prime, &p.s, v)?;
        ensure_finite("hypergradient intermediate u", &u)?;

        let (h, real) = (&p.h, inp.real);
        let gen_loss = objective2(move |tape: &Tape<T>, a: &[Var<'_, T>], g: &[Var<'_, T>]| {
            let m = tape.leaf(real.masks.clone());
            let fake = nets.gen.forward(g, a, m)?;
            generator_loss(nets, &tape.bind(h), m, fake, tape.leaf(real.images.clone()), cfg.lambda_l1)
        });
        let w = mixed(backend, cfg, gen_loss, &p.a, &p.g, &u)?;
        let scale = T::lit(cfg.eta_g * cfg.eta_s);
        for (o, wi) in out.iter_mut().zip(&w) {
            *o = scale * *wi;
        }
    }

    if cfg.direct_path && cfg.eta_s != 0.0 {
        let g_prime = inp.g_prime;
        let direct_loss = objective2(move |tape: &Tape<T>, a: &[Var<'_, T>], s: &[Var<'_, T>]| {
            let images = nets.gen.forward(&tape.bind(g_prime), a, tape.leaf(masks.clone()))?;
            segmentation_loss(nets, tape, s, images, masks)
        });
        let d = mixed(backend, cfg, direct_loss, &p.a, &p.s, v)?;
        let scale = T::lit(cfg.eta_s);
        for (o, di) in out.iter_mut().zip(&d) {
            *o -= scale * *di;
        }
    }
    ensure_finite("hypergradient", &out)?;
    Ok(out)
}

#[derive(Debug, Clone)]
pub struct Hypergrad<T> {
    pub grad: Vec<T>,
    /// Validation loss at S'.
    pub val_loss: f64,
    pub v_norm: f64,
}

/// Stage 3: validation gradient at S', then the chain back to A.
pub fn stage3_hypergrad<T: Real>(
    nets: &Networks,
    cfg: &TrainConfig,
    inp: HyperInputs<'_, T>,
    s_prime: &ParamGroup<T>,
    val: &Batch<T>,
) -> Result<Hypergrad<T>> {
    let (val_loss, v) = validation_gradient(nets, s_prime, val)?;
    let v_norm = dot(&v, &v).sqrt().as_f64();
    let grad = if v_norm == 0.0 {
        vec![T::zero(); inp.params.a.numel()]
    } else {
        hypergradient(nets, cfg, inp, &v)?
    };
    Ok(Hypergrad { grad, val_loss, v_norm })
}

/// The map the hypergradient differentiates: `a_stage1` enters only the
/// stage-1 generator step, rendering uses the unperturbed A, and the
/// result is the validation loss after the stage-2 step.
pub fn unrolled_val_loss<T: Real>(
    nets: &Networks,
    cfg: &TrainConfig,
    inp: HyperInputs<'_, T>,
    a_stage1: &ParamGroup<T>,
    val: &Batch<T>,
) -> Result<T> {
    let p = inp.params;
    let perturbed = Params { a: a_stage1.clone(), ..p.clone() };
    let g_prime = stage1_update(nets, cfg, &perturbed, inp.real)?.g;
    let synth = Batch { images: generate(nets, &g_prime, &p.a, inp.synth_masks)?, masks: inp.synth_masks.clone() };
    let (s_prime, _) = stage2_update(nets, &p.s, Some(&synth), Some(inp.real), cfg.gamma, cfg.eta_s)?;
    let tape = Tape::new();
    let loss = segmentation_loss(nets, &tape, &tape.bind(&s_prime), tape.leaf(val.images.clone()), &val.masks)?;
    let v = loss.value().item();
    Ok(v)
}
