//! The model broadcast message and the accept/discard rule applied to it.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::StrongModel;

/// A model together with the loss bound it is certified to satisfy.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelMessage {
    pub worker_id: usize,
    pub seq: u64,
    pub bound: f64,
    pub model: StrongModel,
}

impl ModelMessage {
    pub fn validate(&self, dim: Option<usize>) -> Result<()> {
        if !(self.bound > 0.0 && self.bound <= 1.0) {
            return Err(Error::domain(format!("bound {} outside (0, 1]", self.bound)));
        }
        self.model.validate(dim)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Decision {
    Accept,
    Discard,
}

/// Whether a message from `sender` carrying `incoming` should replace the
/// local `current` bound: strictly better by the relative margin, and never
/// from oneself.
pub fn should_accept(own_id: usize, current: f64, sender: usize, incoming: f64, epsilon_rel: f64) -> Decision {
    if sender != own_id && incoming < current * (1.0 - epsilon_rel) {
        Decision::Accept
    } else {
        Decision::Discard
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn acceptance_table() {
        assert_eq!(should_accept(0, 0.8, 1, 0.8, 0.0), Decision::Discard);
        assert_eq!(should_accept(0, 0.8, 1, 0.5, 0.0), Decision::Accept);
        assert_eq!(should_accept(0, 0.8, 0, 0.1, 0.0), Decision::Discard);
        assert_eq!(should_accept(0, 0.8, 1, 0.75, 0.1), Decision::Discard);
        assert_eq!(should_accept(0, 0.8, 1, 0.7, 0.1), Decision::Accept);
        assert_eq!(should_accept(0, 0.8, 1, f64::NAN, 0.0), Decision::Discard);
    }
}
