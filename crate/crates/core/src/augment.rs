//! Geometric mask augmentation. Only exact, interpolation-free transforms
//! are offered so augmented masks stay strictly binary.

use rand::Rng;

use crate::error::{Error, Result};
use crate::scalar::Real;
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum AugmentKind {
    Rotate90,
    FlipHorizontal,
    FlipVertical,
    Translate,
}

impl AugmentKind {
    pub const ALL: [AugmentKind; 4] = [
        AugmentKind::Rotate90,
        AugmentKind::FlipHorizontal,
        AugmentKind::FlipVertical,
        AugmentKind::Translate,
    ];
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AugmentOp {
    /// Counter-clockwise quarter-turns, 1 to 3.
    Rotate90(u8),
    /// Mirrors columns.
    FlipHorizontal,
    /// Mirrors rows.
    FlipVertical,
    /// Shifts content by `dx` columns and `dy` rows; vacated pixels become 0.
    Translate { dx: i32, dy: i32 },
}

impl AugmentOp {
    pub fn kind(&self) -> AugmentKind {
        match self {
            AugmentOp::Rotate90(_) => AugmentKind::Rotate90,
            AugmentOp::FlipHorizontal => AugmentKind::FlipHorizontal,
            AugmentOp::FlipVertical => AugmentKind::FlipVertical,
            AugmentOp::Translate { .. } => AugmentKind::Translate,
        }
    }
}

/// Set of transform kinds an augmentation sequence may draw from.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct AugmentConfig {
    pub rotate: bool,
    pub flip: bool,
    pub translate: bool,
    pub max_len: usize,
}

impl Default for AugmentConfig {
    fn default() -> Self {
        Self { rotate: true, flip: true, translate: true, max_len: 3 }
    }
}

impl AugmentConfig {
    pub fn none() -> Self {
        Self { rotate: false, flip: false, translate: false, max_len: 3 }
    }

    /// `flip` enables both mirror directions.
    pub fn kinds(&self) -> Vec<AugmentKind> {
        let mut kinds = Vec::new();
        if self.rotate {
            kinds.push(AugmentKind::Rotate90);
        }
        if self.flip {
            kinds.push(AugmentKind::FlipHorizontal);
            kinds.push(AugmentKind::FlipVertical);
        }
        if self.translate {
            kinds.push(AugmentKind::Translate);
        }
        kinds
    }
}

/// Applies `op` to every (H, W) plane of a rank ≥ 2 tensor. Rotations need
/// square planes.
pub fn apply<T: Real>(op: AugmentOp, mask: &Tensor<T>) -> Result<Tensor<T>> {
    let rank = mask.rank();
    if rank < 2 {
        return Err(Error::invalid(format!("augmentation needs a rank >= 2 tensor, got shape {:?}", mask.shape())));
    }
    let (h, w) = (mask.shape()[rank - 2], mask.shape()[rank - 1]);
    // source pixel for each destination pixel, None means zero fill
    let src: Box<dyn Fn(usize, usize) -> Option<(usize, usize)>> = match op {
        AugmentOp::Rotate90(q) => {
            if !(1..=3).contains(&q) {
                return Err(Error::invalid(format!("rotation must be 1 to 3 quarter-turns, got {q}")));
            }
            if h != w {
                return Err(Error::invalid(format!("rotation needs square planes, got {h}x{w}")));
            }
            let n = h - 1;
            Box::new(move |r, c| {
                Some(match q {
                    1 => (c, n - r),
                    2 => (n - r, n - c),
                    _ => (n - c, r),
                })
            })
        }
        AugmentOp::FlipHorizontal => Box::new(move |r, c| Some((r, w - 1 - c))),
        AugmentOp::FlipVertical => Box::new(move |r, c| Some((h - 1 - r, c))),
        AugmentOp::Translate { dx, dy } => {
            if dx.unsigned_abs() as usize >= w || dy.unsigned_abs() as usize >= h {
                return Err(Error::invalid(format!("translation ({dx}, {dy}) must be smaller than the {h}x{w} extent")));
            }
            Box::new(move |r, c| {
                let sr = r as i64 - dy as i64;
                let sc = c as i64 - dx as i64;
                (sr >= 0 && sc >= 0 && (sr as usize) < h && (sc as usize) < w).then_some((sr as usize, sc as usize))
            })
        }
    };
    let plane = h * w;
    let data = mask.data();
    let out = Tensor::from_fn(mask.shape(), |i| {
        let (base, r, c) = (i - i % plane, (i % plane) / w, i % w);
        match src(r, c) {
            Some((sr, sc)) => data[base + sr * w + sc],
            None => T::zero(),
        }
    });
    Ok(out)
}

pub fn apply_sequence<T: Real>(ops: &[AugmentOp], mask: &Tensor<T>) -> Result<Tensor<T>> {
    ops.iter().try_fold(mask.clone(), |m, &op| apply(op, &m))
}

/// Draws a length uniformly from 1..=max_len, then for each step a kind
/// uniformly from `kinds` and its parameters uniformly. Translation offsets
/// lie within ±25% of `extent`.
pub fn random_sequence(rng: &mut impl Rng, kinds: &[AugmentKind], max_len: usize, extent: usize) -> Result<Vec<AugmentOp>> {
    if kinds.is_empty() {
        return Err(Error::invalid("no augmentation kind enabled"));
    }
    if max_len == 0 {
        return Err(Error::invalid("augmentation sequence length must be at least 1"));
    }
    let len = rng.gen_range(1..=max_len);
    let reach = (extent / 4) as i32;
    Ok((0..len)
        .map(|_| match kinds[rng.gen_range(0..kinds.len())] {
            AugmentKind::Rotate90 => AugmentOp::Rotate90(rng.gen_range(1..=3)),
            AugmentKind::FlipHorizontal => AugmentOp::FlipHorizontal,
            AugmentKind::FlipVertical => AugmentOp::FlipVertical,
            AugmentKind::Translate => AugmentOp::Translate {
                dx: rng.gen_range(-reach..=reach),
                dy: rng.gen_range(-reach..=reach),
            },
        })
        .collect())
}
