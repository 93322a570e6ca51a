//! First- and mixed second-order derivative products over parameter groups.

use crate::error::{Error, Result};
use crate::scalar::Real;
use crate::tensor::dot;

use super::{ParamGroup, Tape, Var};

/// Finite-difference step for a direction `v`: `scale / ‖v‖₂`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EpsRule {
    pub scale: f64,
}

impl Default for EpsRule {
    fn default() -> Self {
        Self { scale: 0.01 }
    }
}

impl EpsRule {
    pub fn step<T: Real>(&self, v_norm: T) -> T {
        T::lit(self.scale) / v_norm
    }
}

/// Collects gradient values of `loss` w.r.t. `vars` into a group shaped like `like`.
pub fn grads_as_group<'t, T: Real>(
    tape: &'t Tape<T>,
    loss: Var<'t, T>,
    vars: &[Var<'t, T>],
    like: &ParamGroup<T>,
) -> Result<ParamGroup<T>> {
    let grads = tape.gradients(loss, vars)?;
    like.with_tensors(grads.iter().map(|g| (*g.value()).clone()).collect())
}

/// Loss value and its gradient with respect to `params`.
pub fn value_and_grad<T, F>(f: F, params: &ParamGroup<T>) -> Result<(T, ParamGroup<T>)>
where
    T: Real,
    F: for<'t> Fn(&'t Tape<T>, &[Var<'t, T>]) -> Result<Var<'t, T>>,
{
    let tape = Tape::new();
    let vars = tape.bind(params);
    let loss = f(&tape, &vars)?;
    let value = loss.value().item();
    Ok((value, grads_as_group(&tape, loss, &vars, params)?))
}

/// `⟨∇ loss(params), v⟩`.
pub fn grad_dot<T, F>(f: F, params: &ParamGroup<T>, v: &[T]) -> Result<T>
where
    T: Real,
    F: for<'t> Fn(&'t Tape<T>, &[Var<'t, T>]) -> Result<Var<'t, T>>,
{
    if v.len() != params.numel() {
        return Err(Error::LengthMismatch {
            expected: params.numel(),
            actual: v.len(),
        });
    }
    let (_, g) = value_and_grad(f, params)?;
    Ok(dot(&g.flatten(), v))
}

fn gradient_wrt_first<T, F>(f: &F, p: &ParamGroup<T>, q: &ParamGroup<T>) -> Result<Vec<T>>
where
    T: Real,
    F: for<'t> Fn(&'t Tape<T>, &[Var<'t, T>], &[Var<'t, T>]) -> Result<Var<'t, T>>,
{
    let tape = Tape::new();
    let pv = tape.bind(p);
    let qv = tape.bind(q);
    let loss = f(&tape, &pv, &qv)?;
    Ok(grads_as_group(&tape, loss, &pv, p)?.flatten())
}

fn check_direction<T: Real>(q: &ParamGroup<T>, v: &[T]) -> Result<T> {
    if v.len() != q.numel() {
        return Err(Error::LengthMismatch {
            expected: q.numel(),
            actual: v.len(),
        });
    }
    if v.iter().any(|x| !x.is_finite()) {
        return Err(Error::NonFinite("hvp direction".into()));
    }
    Ok(dot(v, v).sqrt())
}

/// Central-difference estimate of `∇²_{P,Q} L · v`:
/// `[∇_P L(P, Q + εv) − ∇_P L(P, Q − εv)] / 2ε`, with `ε` from `eps`.
///
/// Returns zeros when `v = 0`, where the exact product vanishes.
pub fn mixed_hvp_fd<T, F>(f: F, p: &ParamGroup<T>, q: &ParamGroup<T>, v: &[T], eps: EpsRule) -> Result<Vec<T>>
where
    T: Real,
    F: for<'t> Fn(&'t Tape<T>, &[Var<'t, T>], &[Var<'t, T>]) -> Result<Var<'t, T>>,
{
    let norm = check_direction(q, v)?;
    if norm == T::zero() {
        return Ok(vec![T::zero(); p.numel()]);
    }
    let step = eps.step(norm);
    let plus = q.axpy(step, v)?;
    let minus = q.axpy(-step, v)?;
    let g_plus = gradient_wrt_first(&f, p, &plus)?;
    let g_minus = gradient_wrt_first(&f, p, &minus)?;
    let denom = step + step;
    Ok(g_plus.iter().zip(&g_minus).map(|(&a, &b)| (a - b) / denom).collect())
}

/// Exact `∇_P ⟨∇_Q L(P, Q), v⟩` by differentiating the recorded gradient.
pub fn mixed_hvp_exact<T, F>(f: F, p: &ParamGroup<T>, q: &ParamGroup<T>, v: &[T]) -> Result<Vec<T>>
where
    T: Real,
    F: for<'t> Fn(&'t Tape<T>, &[Var<'t, T>], &[Var<'t, T>]) -> Result<Var<'t, T>>,
{
    let norm = check_direction(q, v)?;
    if norm == T::zero() {
        return Ok(vec![T::zero(); p.numel()]);
    }
    let tape = Tape::new();
    let pv = tape.bind(p);
    let qv = tape.bind(q);
    let loss = f(&tape, &pv, &qv)?;
    let gq = tape.gradients(loss, &qv)?;
    let direction = q.unflatten(v)?;
    let mut inner: Option<Var<'_, T>> = None;
    for (g, d) in gq.iter().zip(direction.tensors()) {
        let term = g.dot(tape.leaf(d.clone()))?;
        inner = Some(match inner {
            Some(acc) => acc.add(term)?,
            None => term,
        });
    }
    let inner = inner.ok_or_else(|| Error::invalid("empty perturbation group"))?;
    Ok(grads_as_group(&tape, inner, &pv, p)?.flatten())
}

/// Central finite-difference gradient of a scalar function of a flat vector.
/// Used by gradient checks; `h` is the absolute step.
pub fn numeric_gradient<T: Real>(mut f: impl FnMut(&[T]) -> Result<T>, x: &[T], h: T) -> Result<Vec<T>> {
    let mut probe = x.to_vec();
    let mut out = Vec::with_capacity(x.len());
    for i in 0..x.len() {
        let orig = probe[i];
        probe[i] = orig + h;
        let up = f(&probe)?;
        probe[i] = orig - h;
        let down = f(&probe)?;
        probe[i] = orig;
        out.push((up - down) / (h + h));
    }
    Ok(out)
}

/// Cosine similarity; defined as 1 when both vectors are zero.
pub fn cosine<T: Real>(a: &[T], b: &[T]) -> T {
    let na = dot(a, a).sqrt();
    let nb = dot(b, b).sqrt();
    if na == T::zero() && nb == T::zero() {
        return T::one();
    }
    if na == T::zero() || nb == T::zero() {
        return T::zero();
    }
    dot(a, b) / (na * nb)
}

/// Max over entries of `|a − b| / max(|a|, |b|, floor)`.
pub fn max_relative_error<T: Real>(a: &[T], b: &[T], floor: T) -> T {
    a.iter()
        .zip(b)
        .map(|(&x, &y)| (x - y).abs() / x.abs().max(y.abs()).max(floor))
        .fold(T::zero(), T::max)
}

/// Pins a closure to the single-group objective signature, so that the
/// tape lifetime in its arguments and result is inferred as higher-ranked.
pub fn objective<T, F>(f: F) -> F
where
    T: Real,
    F: for<'t> Fn(&'t Tape<T>, &[Var<'t, T>]) -> Result<Var<'t, T>>,
{
    f
}

/// Two-group counterpart of [`objective`].
pub fn objective2<T, F>(f: F) -> F
where
    T: Real,
    F: for<'t> Fn(&'t Tape<T>, &[Var<'t, T>], &[Var<'t, T>]) -> Result<Var<'t, T>>,
{
    f
}
