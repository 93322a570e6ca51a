//! Finite-difference oracles for first derivatives, mixed second-order
//! products and the architecture hypergradient.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{
    cosine, max_relative_error, mixed_hvp_exact, mixed_hvp_fd, numeric_gradient, objective, objective2,
    value_and_grad, GroupName, ParamGroup, Tape, Var,
};
use crate::engine::{
    generator_loss, hypergradient, pixel_cross_entropy, stage1_update, stage2_update, synth_batch,
    unrolled_val_loss, validation_gradient, Backend, Batch, HyperInputs, Networks, TrainConfig,
};
use crate::error::Result;
use crate::synthdata::{gen_task, Dataset, Difficulty};
use crate::tensor::{dot, ConvSpec, Tensor};

/// Central-difference step for first-order checks.
pub const GRAD_STEP: f64 = 1e-5;
/// Largest accepted max relative error of an analytic gradient.
pub const GRAD_TOLERANCE: f64 = 1e-5;
/// Denominator floor of the relative error, so entries that are zero up to
/// rounding are compared absolutely.
pub const RELATIVE_FLOOR: f64 = 1e-3;
pub const HVP_COSINE: f64 = 0.999;
pub const HVP_RATIO: (f64, f64) = (0.99, 1.01);
/// Step of the brute-force hypergradient oracle.
pub const HYPER_STEP: f64 = 1e-4;
pub const HYPER_COSINE_EXACT: f64 = 0.99;
pub const HYPER_COSINE_FD: f64 = 0.95;

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheck {
    pub name: String,
    pub params: usize,
    pub max_rel_error: f64,
}

impl GradCheck {
    pub fn passed(&self) -> bool {
        self.max_rel_error < GRAD_TOLERANCE
    }
}

/// Compares the tape gradient of `f` at `params` with central differences.
pub fn check_objective<F>(name: impl Into<String>, f: F, params: &ParamGroup<f64>) -> Result<GradCheck>
where
    F: for<'t> Fn(&'t Tape<f64>, &[Var<'t, f64>]) -> Result<Var<'t, f64>>,
{
    let (_, analytic) = value_and_grad(&f, params)?;
    let numeric = numeric_gradient(
        |flat| {
            let p = params.unflatten(flat)?;
            let tape = Tape::new();
            let vars = tape.bind(&p);
            Ok(f(&tape, &vars)?.value().item())
        },
        &params.flatten(),
        GRAD_STEP,
    )?;
    Ok(GradCheck {
        name: name.into(),
        params: params.numel(),
        max_rel_error: max_relative_error(&analytic.flatten(), &numeric, RELATIVE_FLOOR),
    })
}

fn rand_tensor(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor<f64> {
    Tensor::from_fn(shape, |_| rng.gen_range(-1.0..1.0))
}

fn group(name: GroupName, tensors: Vec<Tensor<f64>>) -> ParamGroup<f64> {
    let mut g = ParamGroup::new(name);
    for (i, t) in tensors.into_iter().enumerate() {
        g.push(format!("t{i}"), t);
    }
    g
}

pub type OpCase = (&'static str, Vec<usize>, fn(Var<'_, f64>) -> Result<Var<'_, f64>>);

/// One small expression per differentiable operation, with its input shape.
pub fn op_cases() -> Vec<OpCase> {
    vec![
        ("add", vec![5], |x| x.add(x.mul_const(0.3))),
        ("sub", vec![5], |x| x.sub(x.mul(x)?)),
        ("mul", vec![5], |x| x.mul(x.sigmoid())),
        ("neg", vec![5], |x| x.neg().mul(x)),
        ("relu", vec![7], |x| Ok(x.add_const(0.05).relu())),
        ("leaky_relu", vec![7], |x| Ok(x.add_const(0.05).leaky_relu(0.2))),
        ("sigmoid", vec![5], |x| Ok(x.sigmoid())),
        ("tanh", vec![5], |x| Ok(x.tanh())),
        ("exp", vec![5], |x| Ok(x.exp())),
        ("log", vec![5], |x| Ok(x.mul(x)?.add_const(0.5).log())),
        ("recip", vec![5], |x| Ok(x.mul(x)?.add_const(0.5).recip())),
        ("softplus", vec![5], |x| Ok(x.mul_const(3.0).softplus())),
        ("abs", vec![5], |x| Ok(x.add_const(0.05).abs())),
        ("silu", vec![5], |x| x.silu()),
        ("softmax", vec![4], |x| x.softmax()),
        ("scale_by", vec![4], |x| x.scale_by(x.index(1)?)),
        ("shift_by", vec![4], |x| x.mul(x)?.shift_by(x.index(2)?)),
        ("index_scatter", vec![4], |x| x.index(3)?.mul(x.index(0)?)?.scatter(2, &[4])),
        ("dot", vec![4], |x| x.dot(x.tanh())),
        ("expand", vec![3], |x| x.sum().expand(&[2, 2])),
        ("mean", vec![3, 2], |x| Ok(x.mul(x)?.mean())),
        ("channels", vec![2, 3, 2, 2], |x| {
            let a = x.slice_channels(0, 1)?;
            let b = x.slice_channels(1, 2)?.tanh();
            let c = Var::concat_channels(&[b, a])?;
            c.embed_channels(1, 4)?.mul(x.embed_channels(0, 4)?)
        }),
        ("bias", vec![2, 3, 2, 2], |x| {
            let b = x.channel_sum()?.tanh();
            x.add_bias(b)
        }),
        ("channel_broadcast", vec![2, 3, 2, 2], |x| {
            let b = x.channel_sum()?.channel_broadcast(&[2, 3, 2, 2])?;
            x.mul(b.sigmoid())
        }),
        ("conv", vec![1, 2, 6, 6], |x| {
            let k = x.slice_channels(0, 1)?.conv2d(x.slice_channels(1, 1)?.mul_const(0.1), None, ConvSpec::conv(6, 1, 5))?;
            Ok(k.tanh())
        }),
    ]
}

/// Gradient checks of every operation and of the convolution family over
/// all candidate kernel, stride and padding combinations.
pub fn op_checks(seed: u64) -> Result<Vec<GradCheck>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::new();
    for (name, shape, op) in op_cases() {
        let x0 = rand_tensor(&mut rng, &shape);
        let probe = {
            let tape = Tape::new();
            op(tape.leaf(x0.clone()))?.shape()
        };
        let weights = if probe.is_empty() { Tensor::scalar(0.7) } else { rand_tensor(&mut rng, &probe) };
        let p = group(GroupName::S, vec![x0]);
        let f = objective(|t: &Tape<f64>, v: &[Var<'_, f64>]| op(v[0])?.mul(t.leaf(weights.clone())).map(|y| y.sum()));
        out.push(check_objective(name, f, &p)?);
    }
    for spec in [
        ConvSpec::conv(4, 2, 1),
        ConvSpec::conv(6, 2, 2),
        ConvSpec::conv(8, 2, 3),
        ConvSpec::conv(3, 1, 1),
        ConvSpec::up(4, 2, 1),
        ConvSpec::up(6, 2, 2),
        ConvSpec::up(8, 2, 3),
    ] {
        let x = rand_tensor(&mut rng, &[2, 2, 4, 4]);
        let k = spec.kernel;
        let w_shape = if spec.transposed { [2, 3, k, k] } else { [3, 2, k, k] };
        let w = rand_tensor(&mut rng, &w_shape).scale(1.0 / ((2 * k * k) as f64).sqrt());
        let p = group(GroupName::G, vec![x, w, rand_tensor(&mut rng, &[3])]);
        let f = objective(move |_: &Tape<f64>, v: &[Var<'_, f64>]| {
            let y = v[0].conv2d(v[1], Some(v[2]), spec)?;
            Ok(y.tanh().mul(y)?.sum())
        });
        out.push(check_objective(format!("conv2d {spec}"), f, &p)?);
    }
    Ok(out)
}

/// Config of the hypergradient oracle instance: 8×8 images, one encoder
/// cell, width 1.
///
/// The L1 term of the generator objective is piecewise linear in G, so the
/// finite-difference product over G is only accurate while `G ± εu` stays
/// on one linear piece of every pixel residual. The default
/// `eps_scale = 0.01` moves G by a norm of 0.01, which flips residual signs
/// on this instance; `1e-4` does not.
pub fn tiny_config() -> TrainConfig {
    TrainConfig {
        img_size: 8,
        enc_cells: 1,
        base_channels: 1,
        eta_g: 0.5,
        eta_h: 0.1,
        eta_s: 0.5,
        lambda_l1: 1.0,
        eps_scale: 1e-4,
        iters: 4,
        ..TrainConfig::default()
    }
}

fn batch_of(ds: &Dataset<f64>) -> Result<Batch<f64>> {
    let idx: Vec<usize> = (0..ds.len()).collect();
    let (images, masks) = ds.batch(&idx)?;
    Ok(Batch { images, masks })
}

/// Gradient checks of the generator (weights and architecture logits), the
/// discriminator and the segmenter on 8×8 inputs, each under 2,000
/// parameters: a two-cell width-1 generator, width-2 discriminator and
/// segmenter.
pub fn network_checks(seed: u64) -> Result<Vec<GradCheck>> {
    let narrow = TrainConfig { img_size: 8, enc_cells: 2, base_channels: 1, ..TrainConfig::default() };
    let wide = TrainConfig { base_channels: 2, ..narrow.clone() };
    let gen_nets = Networks::new(narrow.model_config())?;
    let nets = Networks::new(wide.model_config())?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let g = gen_nets.init::<f64>(&mut rng);
    let p = nets.init::<f64>(&mut rng);
    let a = g.a.unflatten(&(0..g.a.numel()).map(|_| rng.gen_range(-0.5..0.5)).collect::<Vec<_>>())?;
    let data = gen_task::<f64>(seed, 2, 8, Difficulty::Default)?;
    let b = batch_of(&data)?;
    let weights = rand_tensor(&mut rng, b.images.shape());

    let mut out = Vec::new();
    let a_ref = &a;
    let f_g = objective(|t: &Tape<f64>, g: &[Var<'_, f64>]| {
        let y = gen_nets.gen.forward(g, &t.bind(a_ref), t.leaf(b.masks.clone()))?;
        Ok(y.mul(t.leaf(weights.clone()))?.sum())
    });
    out.push(check_objective("generator weights", f_g, &g.g)?);
    let g_ref = &g.g;
    let f_a = objective(|t: &Tape<f64>, a: &[Var<'_, f64>]| {
        let y = gen_nets.gen.forward(&t.bind(g_ref), a, t.leaf(b.masks.clone()))?;
        Ok(y.mul(t.leaf(weights.clone()))?.sum())
    });
    out.push(check_objective("generator architecture", f_a, &a)?);
    let f_h = objective(|t: &Tape<f64>, h: &[Var<'_, f64>]| {
        let logits = nets.disc.forward(h, t.leaf(b.masks.clone()), t.leaf(b.images.clone()))?;
        Ok(logits.softplus().mean())
    });
    out.push(check_objective("discriminator", f_h, &p.h)?);
    let f_s = objective(|t: &Tape<f64>, s: &[Var<'_, f64>]| {
        let logits = nets.seg.forward(s, t.leaf(b.images.clone()))?;
        pixel_cross_entropy(logits, t.leaf(b.masks.clone()))
    });
    out.push(check_objective("segmenter", f_s, &p.s)?);
    Ok(out)
}

#[derive(Debug, Clone, PartialEq)]
pub struct HvpCheck {
    pub params: usize,
    pub cosine: f64,
    pub fd_norm: f64,
    pub exact_norm: f64,
}

impl HvpCheck {
    /// `‖fd‖ / ‖exact‖`, or 1 when both vanish.
    pub fn ratio(&self) -> f64 {
        if self.fd_norm == 0.0 && self.exact_norm == 0.0 {
            1.0
        } else {
            self.fd_norm / self.exact_norm
        }
    }

    pub fn passed(&self) -> bool {
        let r = self.ratio();
        self.cosine >= HVP_COSINE && (HVP_RATIO.0..=HVP_RATIO.1).contains(&r)
    }
}

/// Mixed product `∇²_{A,G} L_gen · v` of a tiny generator against a fixed
/// discriminator, finite-difference against double backward. The L1 term
/// is left out: it is piecewise linear, so a central difference can
/// straddle a kink. With `zero_direction` the direction is the zero vector.
pub fn hvp_check(seed: u64, zero_direction: bool) -> Result<HvpCheck> {
    let cfg = tiny_config();
    let nets = Networks::new(cfg.model_config())?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let p = nets.init::<f64>(&mut rng);
    let a = p.a.unflatten(&(0..p.a.numel()).map(|_| rng.gen_range(-0.5..0.5)).collect::<Vec<_>>())?;
    let b = batch_of(&gen_task::<f64>(seed, 2, 8, Difficulty::Default)?)?;
    let f = objective2(|t: &Tape<f64>, a: &[Var<'_, f64>], g: &[Var<'_, f64>]| {
        let masks = t.leaf(b.masks.clone());
        let fake = nets.gen.forward(g, a, masks)?;
        generator_loss(&nets, &t.bind(&p.h), masks, fake, t.leaf(b.images.clone()), 0.0)
    });
    let v: Vec<f64> = if zero_direction {
        vec![0.0; p.g.numel()]
    } else {
        (0..p.g.numel()).map(|_| rng.gen_range(-1.0..1.0)).collect()
    };
    let fd = mixed_hvp_fd(f, &a, &p.g, &v, cfg.eps_rule())?;
    let exact = mixed_hvp_exact(f, &a, &p.g, &v)?;
    Ok(HvpCheck {
        params: a.numel() + p.g.numel() + p.h.numel(),
        cosine: cosine(&fd, &exact),
        fd_norm: dot(&fd, &fd).sqrt(),
        exact_norm: dot(&exact, &exact).sqrt(),
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct HyperCheck {
    pub oracle: Vec<f64>,
    pub exact: Vec<f64>,
    pub fd: Vec<f64>,
}

impl HyperCheck {
    pub fn exact_cosine(&self) -> f64 {
        cosine(&self.exact, &self.oracle)
    }

    pub fn fd_cosine(&self) -> f64 {
        cosine(&self.fd, &self.oracle)
    }

    pub fn passed(&self) -> bool {
        self.exact_cosine() >= HYPER_COSINE_EXACT && self.fd_cosine() >= HYPER_COSINE_FD
    }
}

/// The stage-3 chain on a 4-train / 2-val instance, with both backends,
/// against central differences of `A ↦ L_val(S'(G'(A)))` where `A` enters
/// through the stage-1 update only.
pub fn hyper_check(cfg: &TrainConfig, seed: u64) -> Result<HyperCheck> {
    cfg.validate()?;
    let nets = Networks::new(cfg.model_config())?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut params = nets.init::<f64>(&mut rng);
    // move the logits off the symmetric point, where the mixture is flat in A
    let spread: Vec<f64> = (0..params.a.numel()).map(|_| rng.gen_range(-0.5..0.5)).collect();
    params.a = params.a.unflatten(&spread)?;
    let all = gen_task::<f64>(seed + 100, 6, cfg.img_size, Difficulty::Default)?;
    let real = batch_of(&all.subset(&[0, 1, 2, 3], "train")?)?;
    let val = batch_of(&all.subset(&[4, 5], "val")?)?;

    let st1 = stage1_update(&nets, cfg, &params, &real)?;
    let synth = synth_batch(&nets, &st1.g, &params.a, &real.masks, &cfg.augment, &mut rng)?;
    let (s_prime, _) = stage2_update(&nets, &params.s, Some(&synth), Some(&real), cfg.gamma, cfg.eta_s)?;
    let (_, v) = validation_gradient(&nets, &s_prime, &val)?;
    let inp = HyperInputs { params: &params, g_prime: &st1.g, real: &real, synth_masks: &synth.masks };

    let oracle = numeric_gradient(
        |a: &[f64]| unrolled_val_loss(&nets, cfg, inp, &params.a.unflatten(a)?, &val),
        &params.a.flatten(),
        HYPER_STEP,
    )?;
    let exact = hypergradient(&nets, &TrainConfig { hypergrad_backend: Backend::Exact, ..cfg.clone() }, inp, &v)?;
    let fd = hypergradient(&nets, &TrainConfig { hypergrad_backend: Backend::Fd, ..cfg.clone() }, inp, &v)?;
    Ok(HyperCheck { oracle, exact, fd })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn every_op_matches_finite_differences() {
        for c in op_checks(11).unwrap() {
            assert!(c.passed(), "{}: max relative error {}", c.name, c.max_rel_error);
        }
    }

    #[test]
    fn full_networks_match_finite_differences() {
        for c in network_checks(5).unwrap() {
            assert!(c.params <= 2000, "{} has {} parameters", c.name, c.params);
            assert!(c.passed(), "{}: max relative error {}", c.name, c.max_rel_error);
        }
    }

    #[test]
    fn hvp_backends_agree_on_a_tiny_pair() {
        let c = hvp_check(4, false).unwrap();
        assert!(c.params <= 600, "{}", c.params);
        assert!(c.passed(), "{c:?}");
    }

    #[test]
    fn hypergradient_matches_the_unrolled_oracle() {
        let c = hyper_check(&tiny_config(), 8).unwrap();
        assert!(c.passed(), "exact {} fd {}", c.exact_cosine(), c.fd_cosine());
    }

    #[test]
    fn default_step_agrees_on_a_smooth_generator_objective() {
        let cfg = TrainConfig { lambda_l1: 0.0, eps_scale: TrainConfig::default().eps_scale, ..tiny_config() };
        for seed in 0..3 {
            let c = hyper_check(&cfg, seed).unwrap();
            assert!(c.passed(), "seed {seed}: exact {} fd {}", c.exact_cosine(), c.fd_cosine());
        }
    }

    #[test]
    fn hvp_zero_direction_is_zero_on_both_sides() {
        let c = hvp_check(3, true).unwrap();
        assert_eq!((c.fd_norm, c.exact_norm), (0.0, 0.0));
        assert!(c.passed());
    }

    #[test]
    fn frozen_generator_gives_a_zero_hypergradient_on_both_sides() {
        let cfg = TrainConfig { eta_g: 0.0, ..tiny_config() };
        let c = hyper_check(&cfg, 2).unwrap();
        assert!(c.oracle.iter().chain(&c.exact).chain(&c.fd).all(|&x| x == 0.0));
        assert!(c.passed());
    }
}
