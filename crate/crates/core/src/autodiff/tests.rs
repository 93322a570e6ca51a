use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::*;
use crate::error::{Error, Result};
use crate::gradcheck::op_cases;
use crate::tensor::{ConvSpec, Tensor};

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

/// Analytic gradient of `f` against central differences at step `h`.
fn check_grad<F>(f: F, params: &ParamGroup<f64>, h: f64) -> f64
where
    F: for<'t> Fn(&'t Tape<f64>, &[Var<'t, f64>]) -> Result<Var<'t, f64>>,
{
    let (_, analytic) = value_and_grad(&f, params).unwrap();
    let numeric = numeric_gradient(
        |flat| {
            let p = params.unflatten(flat)?;
            let tape = Tape::new();
            let vars = tape.bind(&p);
            Ok(f(&tape, &vars)?.value().item())
        },
        &params.flatten(),
        h,
    )
    .unwrap();
    max_relative_error(&analytic.flatten(), &numeric, 1e-3)
}

#[test]
fn sum_of_squares_gradient() {
    let p = group(GroupName::S, vec![Tensor::from_vec(vec![1.0, 2.0])]);
    let (loss, g) = value_and_grad(|_, v| Ok(v[0].mul(v[0])?.sum()), &p).unwrap();
    assert_eq!(loss, 5.0);
    assert_eq!(g.flatten(), vec![2.0, 4.0]);
}

#[test]
fn constant_loss_has_zero_gradient() {
    let p = group(GroupName::S, vec![Tensor::from_vec(vec![1.0, -2.0, 3.0])]);
    let (_, g) = value_and_grad(|t, _| Ok(t.scalar(4.0)), &p).unwrap();
    assert_eq!(g.flatten(), vec![0.0; 3]);
}

#[test]
fn non_scalar_loss_is_rejected() {
    let tape = Tape::new();
    let x = tape.leaf(Tensor::from_vec(vec![1.0, 2.0]));
    assert!(matches!(tape.gradients(x, &[x]), Err(Error::NonScalarLoss(_))));
}

#[test]
fn detached_values_receive_no_gradient() {
    let tape = Tape::new();
    let x = tape.leaf(Tensor::from_vec(vec![3.0]));
    let y = x.mul(x.detach()).unwrap().sum();
    let g = tape.gradients(y, &[x]).unwrap();
    assert_eq!(g[0].value().data(), &[3.0]);
}

#[test]
fn two_layer_net_matches_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let input = rand_tensor(&mut rng, &[2, 2, 6, 6]);
    let p = group(
        GroupName::S,
        vec![
            rand_tensor(&mut rng, &[3, 2, 3, 3]),
            rand_tensor(&mut rng, &[3]),
            rand_tensor(&mut rng, &[1, 3, 4, 4]),
            rand_tensor(&mut rng, &[1]),
        ],
    );
    let f = objective(|t: &Tape<f64>, v: &[Var<'_, f64>]| {
        let x = t.leaf(input.clone());
        let h = x.conv2d(v[0], Some(v[1]), ConvSpec::conv(3, 1, 1))?.tanh();
        let y = h.conv2d(v[2], Some(v[3]), ConvSpec::conv(4, 2, 1))?;
        Ok(y.mul(y)?.mean())
    });
    let err = check_grad(f, &p, 1e-5);
    assert!(err < 1e-6, "max relative error {err}");
}

#[test]
fn conv_family_gradients_match_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    for spec in [
        ConvSpec::conv(4, 2, 1),
        ConvSpec::conv(6, 2, 2),
        ConvSpec::conv(3, 1, 1),
        ConvSpec::up(4, 2, 1),
        ConvSpec::up(8, 2, 3),
    ] {
        let x = rand_tensor(&mut rng, &[2, 2, 4, 4]);
        let w_shape = if spec.transposed { [2, 3, spec.kernel, spec.kernel] } else { [3, 2, spec.kernel, spec.kernel] };
        let p = group(GroupName::G, vec![x, rand_tensor(&mut rng, &w_shape), rand_tensor(&mut rng, &[3])]);
        let f = objective(move |_: &Tape<f64>, v: &[Var<'_, f64>]| {
            let y = v[0].conv2d(v[1], Some(v[2]), spec)?;
            Ok(y.tanh().mul(y)?.sum())
        });
        let err = check_grad(f, &p, 1e-5);
        assert!(err < 1e-5, "{spec}: max relative error {err}");
    }
}

#[test]
fn gradient_is_linear_in_the_loss() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let p = group(GroupName::S, vec![rand_tensor(&mut rng, &[6])]);
    let f1 = objective(|_: &Tape<f64>, v: &[Var<'_, f64>]| Ok(v[0].tanh().sum()));
    let f2 = objective(|_: &Tape<f64>, v: &[Var<'_, f64>]| Ok(v[0].mul(v[0])?.exp().sum()));
    let (_, g1) = value_and_grad(f1, &p).unwrap();
    let (_, g2) = value_and_grad(f2, &p).unwrap();
    let (_, g) = value_and_grad(|t, v| f1(t, v)?.add(f2(t, v)?), &p).unwrap();
    for ((a, b), c) in g1.flatten().iter().zip(g2.flatten()).zip(g.flatten()) {
        assert!((a + b - c).abs() < 1e-12);
    }
}

#[test]
fn replaying_a_tape_is_bit_identical() {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let tape = Tape::new();
    let x = tape.leaf(rand_tensor(&mut rng, &[1, 1, 5, 5]));
    let w = tape.leaf(rand_tensor(&mut rng, &[2, 1, 3, 3]));
    let loss = x.conv2d(w, None, ConvSpec::conv(3, 1, 1)).unwrap().sigmoid().sum();
    let a = tape.gradients(loss, &[w, x]).unwrap();
    let b = tape.gradients(loss, &[w, x]).unwrap();
    for (ga, gb) in a.iter().zip(&b) {
        assert_eq!(ga.value().data(), gb.value().data());
    }
}

#[test]
fn grad_dot_examples() {
    let x = vec![1.0, -2.0, 0.5];
    let p = group(GroupName::S, vec![Tensor::from_vec(x.clone())]);
    let half_sq = objective(|_: &Tape<f64>, v: &[Var<'_, f64>]| Ok(v[0].mul(v[0])?.sum().mul_const(0.5)));
    let r = grad_dot(half_sq, &p, &x).unwrap();
    assert!((r - 5.25).abs() < 1e-15);
    assert_eq!(grad_dot(half_sq, &p, &[0.0; 3]).unwrap(), 0.0);
    assert!(matches!(grad_dot(half_sq, &p, &[1.0]), Err(Error::LengthMismatch { .. })));
}

#[test]
fn grad_dot_on_random_quadratic() {
    let mut rng = ChaCha8Rng::seed_from_u64(21);
    let n = 5;
    let q: Vec<f64> = (0..n * n).map(|_| rng.gen_range(-1.0..1.0)).collect();
    let x: Vec<f64> = (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect();
    let v: Vec<f64> = (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect();
    // dense-matrix oracle: ∇(xᵀQx) = (Q + Qᵀ)x
    let mut want = 0.0;
    for i in 0..n {
        let mut gi = 0.0;
        for j in 0..n {
            gi += (q[i * n + j] + q[j * n + i]) * x[j];
        }
        want += gi * v[i];
    }
    let qt = Tensor::new(vec![n, n], q.clone()).unwrap();
    let p = group(GroupName::S, vec![Tensor::from_vec(x.clone())]);
    let f = objective(|t: &Tape<f64>, vars: &[Var<'_, f64>]| {
        // xᵀQx = Σ_ij Q_ij x_i x_j built from scalar taps
        let mut acc = t.scalar(0.0);
        for i in 0..n {
            for j in 0..n {
                let term = vars[0].index(i)?.mul(vars[0].index(j)?)?.mul_const(qt.data()[i * n + j]);
                acc = acc.add(term)?;
            }
        }
        Ok(acc)
    });
    let got = grad_dot(f, &p, &v).unwrap();
    assert!((got - want).abs() < 1e-12, "{got} vs {want}");
}

fn pq_squared<'t>(_: &'t Tape<f64>, p: &[Var<'t, f64>], q: &[Var<'t, f64>]) -> Result<Var<'t, f64>> {
    let inner = p[0].dot(q[0])?;
    inner.mul(inner)
}

#[test]
fn mixed_hvp_closed_form_example() {
    let p = group(GroupName::G, vec![Tensor::from_vec(vec![1.0])]);
    let q = group(GroupName::S, vec![Tensor::from_vec(vec![2.0])]);
    let fd = mixed_hvp_fd(pq_squared, &p, &q, &[1.0], EpsRule::default()).unwrap();
    assert!((fd[0] - 8.0).abs() < 1e-6, "{fd:?}");
    let exact = mixed_hvp_exact(pq_squared, &p, &q, &[1.0]).unwrap();
    assert!((exact[0] - 8.0).abs() < 1e-12, "{exact:?}");
}

#[test]
fn mixed_hvp_independent_of_q_is_zero() {
    let p = group(GroupName::G, vec![Tensor::from_vec(vec![1.0, 2.0])]);
    let q = group(GroupName::S, vec![Tensor::from_vec(vec![3.0])]);
    let f = objective2(|_: &Tape<f64>, p: &[Var<'_, f64>], _: &[Var<'_, f64>]| Ok(p[0].exp().sum()));
    assert_eq!(mixed_hvp_fd(f, &p, &q, &[1.5], EpsRule::default()).unwrap(), vec![0.0, 0.0]);
    assert_eq!(mixed_hvp_exact(f, &p, &q, &[1.5]).unwrap(), vec![0.0, 0.0]);
}

#[test]
fn mixed_hvp_zero_direction_is_zero() {
    let p = group(GroupName::G, vec![Tensor::from_vec(vec![1.0])]);
    let q = group(GroupName::S, vec![Tensor::from_vec(vec![2.0])]);
    assert_eq!(mixed_hvp_fd(pq_squared, &p, &q, &[0.0], EpsRule::default()).unwrap(), vec![0.0]);
}

fn small_net(input: &Tensor<f64>) -> impl for<'a> Fn(&'a Tape<f64>, &[Var<'a, f64>], &[Var<'a, f64>]) -> Result<Var<'a, f64>> + '_ {
    objective2(move |t: &Tape<f64>, p: &[Var<'_, f64>], q: &[Var<'_, f64>]| {
        let x = t.leaf(input.clone());
        let h = x.conv2d(p[0], Some(q[0]), ConvSpec::conv(3, 1, 1))?.silu()?;
        let y = h.conv2d(q[1], Some(p[1]), ConvSpec::conv(4, 2, 1))?.tanh();
        Ok(y.mul(y)?.mean())
    })
}

#[test]
fn mixed_hvp_is_antisymmetric_in_direction() {
    let mut rng = ChaCha8Rng::seed_from_u64(17);
    let input = rand_tensor(&mut rng, &[1, 1, 4, 4]);
    let p = group(GroupName::A, vec![rand_tensor(&mut rng, &[2, 1, 3, 3]), rand_tensor(&mut rng, &[1])]);
    let q = group(GroupName::G, vec![rand_tensor(&mut rng, &[2]), rand_tensor(&mut rng, &[1, 2, 4, 4])]);
    let v: Vec<f64> = (0..q.numel()).map(|_| rng.gen_range(-1.0..1.0)).collect();
    let neg: Vec<f64> = v.iter().map(|x| -x).collect();
    let a = mixed_hvp_fd(small_net(&input), &p, &q, &v, EpsRule::default()).unwrap();
    let b = mixed_hvp_fd(small_net(&input), &p, &q, &neg, EpsRule::default()).unwrap();
    for (x, y) in a.iter().zip(&b) {
        assert_eq!(*x, -*y);
    }
}

#[test]
fn exact_and_fd_mixed_products_agree_on_a_50_parameter_net() {
    let mut rng = ChaCha8Rng::seed_from_u64(23);
    let input = rand_tensor(&mut rng, &[2, 1, 4, 4]);
    // 18 + 1 in p, 2 + 32 in q: 53 parameters
    let p = group(GroupName::A, vec![rand_tensor(&mut rng, &[2, 1, 3, 3]), rand_tensor(&mut rng, &[1])]);
    let q = group(GroupName::G, vec![rand_tensor(&mut rng, &[2]), rand_tensor(&mut rng, &[1, 2, 4, 4])]);
    let v: Vec<f64> = (0..q.numel()).map(|_| rng.gen_range(-1.0..1.0)).collect();
    let fd = mixed_hvp_fd(small_net(&input), &p, &q, &v, EpsRule::default()).unwrap();
    let exact = mixed_hvp_exact(small_net(&input), &p, &q, &v).unwrap();
    let c = cosine(&fd, &exact);
    assert!(c >= 0.999, "cosine {c}");
}

#[test]
fn every_op_second_order_matches_differenced_gradient() {
    // L(p, q) = Σ w ⊙ op(p + q), so ∇²_{P,Q} L is the Hessian of the op.
    let mut rng = ChaCha8Rng::seed_from_u64(29);
    for (name, shape, op) in op_cases() {
        if matches!(name, "relu" | "leaky_relu" | "abs") {
            continue; // piecewise linear: Hessian is zero a.e.
        }
        let x0 = rand_tensor(&mut rng, &shape);
        let out_shape = {
            let tape = Tape::new();
            op(tape.leaf(x0.clone())).unwrap().shape()
        };
        let weights = if out_shape.is_empty() { Tensor::scalar(0.7) } else { rand_tensor(&mut rng, &out_shape) };
        let p = group(GroupName::G, vec![x0.scale(0.5)]);
        let q = group(GroupName::S, vec![x0.scale(0.5)]);
        let v: Vec<f64> = (0..q.numel()).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let f = objective2(|t: &Tape<f64>, p: &[Var<'_, f64>], q: &[Var<'_, f64>]| {
            Ok(op(p[0].add(q[0])?)?.mul(t.leaf(weights.clone()))?.sum())
        });
        let exact = mixed_hvp_exact(f, &p, &q, &v).unwrap();
        let fd = mixed_hvp_fd(f, &p, &q, &v, EpsRule { scale: 1e-4 }).unwrap();
        let err = max_relative_error(&exact, &fd, 1e-3);
        assert!(err < 1e-5, "{name}: second-order relative error {err}");
    }
}
