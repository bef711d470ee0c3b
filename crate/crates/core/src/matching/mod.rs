//! Box geometry, optimal bipartite assignment, and the set prediction loss.

mod boxes;
mod hungarian;
mod loss;

pub use boxes::{cxcywh_to_xyxy, giou, iou, Box, CornerBox};
pub use hungarian::{assignment_cost, hungarian};
pub use loss::{match_cost, match_predictions, set_loss, Assignment, LossWeights, SetLoss, Target};

use thiserror::Error;

use crate::ndgrad::NdError;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum MatchError {
    #[error("input error: {0}")]
    Input(String),
    #[error("capacity error: {targets} targets exceed {predictions} predictions")]
    Capacity { targets: usize, predictions: usize },
    #[error(transparent)]
    Nd(#[from] NdError),
}
