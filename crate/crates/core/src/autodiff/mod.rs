//! Reverse-mode differentiation and second-order products.

mod hvp;
mod params;
mod tape;

pub use hvp::{
    cosine, grad_dot, grads_as_group, max_relative_error, mixed_hvp_exact, mixed_hvp_fd, numeric_gradient, objective,
    objective2,
    value_and_grad, EpsRule,
};
pub use params::{GroupName, ParamGroup};
pub use tape::{Tape, Var};

#[cfg(test)]
mod tests;
