use std::fmt;

use crate::error::{Error, Result};
use crate::scalar::Real;
use crate::tensor::Tensor;

/// Which of the four optimized quantities a group holds.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum GroupName {
    /// generator weights
    G,
    /// discriminator weights
    H,
    /// segmenter weights
    S,
    /// architecture logits
    A,
}

impl GroupName {
    pub const ALL: [GroupName; 4] = [GroupName::G, GroupName::H, GroupName::S, GroupName::A];

    pub fn as_str(&self) -> &'static str {
        match self {
            GroupName::G => "G",
            GroupName::H => "H",
            GroupName::S => "S",
            GroupName::A => "A",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|g| g.as_str() == s)
    }
}

impl fmt::Display for GroupName {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// Named, ordered collection of parameter tensors.
#[derive(Clone, PartialEq)]
pub struct ParamGroup<T> {
    name: GroupName,
    entries: Vec<(String, Tensor<T>)>,
}

impl<T> fmt::Debug for ParamGroup<T> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("ParamGroup")
            .field("name", &self.name)
            .field("tensors", &self.entries.len())
            .field("numel", &self.entries.iter().map(|(_, t)| t.data.len()).sum::<usize>())
            .finish()
    }
}

impl<T: Real> ParamGroup<T> {
    pub fn new(name: GroupName) -> Self {
        Self {
            name,
            entries: Vec::new(),
        }
    }

    pub fn name(&self) -> GroupName {
        self.name
    }

    /// Appends a tensor and returns its position.
    pub fn push(&mut self, label: impl Into<String>, tensor: Tensor<T>) -> usize {
        self.entries.push((label.into(), tensor));
        self.entries.len() - 1
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Total element count over all tensors.
    pub fn numel(&self) -> usize {
        self.entries.iter().map(|(_, t)| t.numel()).sum()
    }

    pub fn get(&self, index: usize) -> &Tensor<T> {
        &self.entries[index].1
    }

    pub fn find(&self, label: &str) -> Option<&Tensor<T>> {
        self.entries.iter().find(|(l, _)| l == label).map(|(_, t)| t)
    }

    pub fn entries(&self) -> impl Iterator<Item = (&str, &Tensor<T>)> {
        self.entries.iter().map(|(l, t)| (l.as_str(), t))
    }

    pub fn tensors(&self) -> impl Iterator<Item = &Tensor<T>> {
        self.entries.iter().map(|(_, t)| t)
    }

    /// Concatenation of all tensors' data in group order.
    pub fn flatten(&self) -> Vec<T> {
        let mut flat = Vec::with_capacity(self.numel());
        for (_, t) in &self.entries {
            flat.extend_from_slice(t.data());
        }
        flat
    }

    /// A group with the same labels and shapes holding `flat`.
    pub fn unflatten(&self, flat: &[T]) -> Result<Self> {
        if flat.len() != self.numel() {
            return Err(Error::LengthMismatch {
                expected: self.numel(),
                actual: flat.len(),
            });
        }
        let mut offset = 0;
        let mut entries = Vec::with_capacity(self.entries.len());
        for (label, t) in &self.entries {
            let n = t.numel();
            entries.push((label.clone(), Tensor::new(t.shape().to_vec(), flat[offset..offset + n].to_vec())?));
            offset += n;
        }
        Ok(Self { name: self.name, entries })
    }

    /// Builds a same-layout group from per-tensor values (e.g. gradients).
    pub fn with_tensors(&self, tensors: Vec<Tensor<T>>) -> Result<Self> {
        if tensors.len() != self.entries.len() {
            return Err(Error::LengthMismatch {
                expected: self.entries.len(),
                actual: tensors.len(),
            });
        }
        let mut entries = Vec::with_capacity(tensors.len());
        for ((label, old), new) in self.entries.iter().zip(tensors) {
            old.check_same_shape(&new, "with_tensors")?;
            entries.push((label.clone(), new));
        }
        Ok(Self { name: self.name, entries })
    }

    /// `self + alpha · direction`, element-wise over a flat direction.
    pub fn axpy(&self, alpha: T, direction: &[T]) -> Result<Self> {
        if direction.len() != self.numel() {
            return Err(Error::LengthMismatch {
                expected: self.numel(),
                actual: direction.len(),
            });
        }
        let flat: Vec<T> = self.flatten().iter().zip(direction).map(|(&p, &d)| p + alpha * d).collect();
        self.unflatten(&flat)
    }

    pub fn cast<U: Real>(&self) -> ParamGroup<U> {
        ParamGroup {
            name: self.name,
            entries: self.entries.iter().map(|(l, t)| (l.clone(), t.cast())).collect(),
        }
    }
}
