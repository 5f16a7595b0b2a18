//! Feature vectors as seen by the weak rules.

use serde::{Deserialize, Serialize};

/// Read access to a feature vector. Indices at or beyond `dim` are invalid;
/// absent sparse entries read as zero.
pub trait FeatureAccess {
    fn dim(&self) -> usize;

    /// Value of feature `j`. Callers must ensure `j < self.dim()`.
    fn value(&self, j: usize) -> f32;
}

impl FeatureAccess for [f32] {
    fn dim(&self) -> usize {
        self.len()
    }

    #[inline]
    fn value(&self, j: usize) -> f32 {
        self[j]
    }
}

impl FeatureAccess for Vec<f32> {
    fn dim(&self) -> usize {
        self.len()
    }

    #[inline]
    fn value(&self, j: usize) -> f32 {
        self[j]
    }
}

/// An example's features, stored dense or as sorted `(index, value)` pairs.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub enum Features {
    Dense(Vec<f32>),
    Sparse { dim: usize, entries: Vec<(u32, f32)> },
}

impl Features {
    /// Expands to a dense vector of length `dim()`.
    pub fn to_dense(&self) -> Vec<f32> {
        match self {
            Features::Dense(v) => v.clone(),
            Features::Sparse { dim, entries } => {
                let mut out = vec![0.0; *dim];
                for &(j, v) in entries {
                    out[j as usize] = v;
                }
                out
            }
        }
    }

    /// Non-zero entries as `(index, value)`, ascending by index.
    pub fn nonzeros(&self) -> Vec<(u32, f32)> {
        match self {
            Features::Dense(v) => v
                .iter()
                .enumerate()
                .filter(|(_, &x)| x != 0.0)
                .map(|(j, &x)| (j as u32, x))
                .collect(),
            Features::Sparse { entries, .. } => entries.clone(),
        }
    }
}

impl FeatureAccess for Features {
    fn dim(&self) -> usize {
        match self {
            Features::Dense(v) => v.len(),
            Features::Sparse { dim, .. } => *dim,
        }
    }

    #[inline]
    fn value(&self, j: usize) -> f32 {
        match self {
            Features::Dense(v) => v[j],
            Features::Sparse { entries, .. } => entries
                .binary_search_by_key(&(j as u32), |&(k, _)| k)
                .map(|pos| entries[pos].1)
                .unwrap_or(0.0),
        }
    }
}
