use thiserror::Error;

use crate::network::{DescriptorDist, DescriptorSpace};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum TvError {
    #[error("descriptor spaces differ: {0:?} vs {1:?}")]
    SpaceMismatch(DescriptorSpace, DescriptorSpace),
}

/// Total variation `½ Σ |p − q|` over the union of both supports.
pub fn tv_distance(p: &DescriptorDist, q: &DescriptorDist) -> Result<f64, TvError> {
    if p.space != q.space {
        return Err(TvError::SpaceMismatch(p.space, q.space));
    }
    let mut sum = 0.0;
    for (d, a) in &p.probs {
        sum += (a - q.probs.get(d).copied().unwrap_or(0.0)).abs();
    }
    for (d, b) in &q.probs {
        if !p.probs.contains_key(d) {
            sum += b.abs();
        }
    }
    Ok((0.5 * sum).clamp(0.0, 1.0))
}
