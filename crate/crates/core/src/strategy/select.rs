use alloc::format;
use alloc::vec::Vec;

use crate::{Error, Result};

/// Indices of the `m` highest confidences, ordered by descending confidence
/// and then ascending index.
pub fn select_top_m(confidences: &[u32], m: usize) -> Result<Vec<usize>> {
    if m == 0 || m > confidences.len() {
        return Err(Error::Parameter(format!(
            "M must be in 1..={} (got {m})",
            confidences.len()
        )));
    }
    let mut order: Vec<usize> = (0..confidences.len()).collect();
    order.sort_by(|&a, &b| confidences[b].cmp(&confidences[a]).then(a.cmp(&b)));
    order.truncate(m);
    Ok(order)
}
