//! Shared training-loop utilities.

use crate::{Error, Result};

/// Logged (iteration, loss) pairs from a training run.
#[derive(Debug, Clone, Default)]
pub struct TrainTrace {
    pub entries: Vec<(u64, f64)>,
}

impl TrainTrace {
    pub fn push(&mut self, iter: u64, loss: f64) {
        self.entries.push((iter, loss));
    }

    pub fn first_loss(&self) -> Option<f64> {
        self.entries.first().map(|&(_, l)| l)
    }

    pub fn last_loss(&self) -> Option<f64> {
        self.entries.last().map(|&(_, l)| l)
    }

    /// Loss at the latest logged iteration <= `iter`.
    pub fn loss_at(&self, iter: u64) -> Option<f64> {
        self.entries
            .iter()
            .rev()
            .find(|&&(i, _)| i <= iter)
            .map(|&(_, l)| l)
    }
}

pub(crate) fn ensure_finite(loss: f64, name: &str, iter: u64) -> Result<()> {
    if loss.is_finite() {
        Ok(())
    } else {
        Err(Error::NonFiniteLoss {
            loss: name.to_string(),
            iter,
        })
    }
}
