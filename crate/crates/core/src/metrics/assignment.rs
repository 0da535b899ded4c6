//! Smallest-l2 assignment between two sets of tensors.

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::tensor::{pairwise_sum, Tensor};

fn sq_distance(a: &Tensor, b: &Tensor) -> f64 {
    let d: Vec<f64> = a
        .data()
        .iter()
        .zip(b.data())
        .map(|(x, y)| (x - y) * (x - y))
        .collect();
    pairwise_sum(&d)
}

/// Index of the nearest target for each query; ties go to the lower index.
pub fn nearest_targets(queries: &[Tensor], targets: &[Tensor]) -> Result<Vec<usize>> {
    if queries.is_empty() || targets.is_empty() {
        return Err(Error::domain(
            "assignment needs non-empty query and target sets",
        ));
    }
    let shape = queries[0].shape();
    for t in queries.iter().chain(targets) {
        if t.shape() != shape {
            return Err(Error::Shape {
                expected: shape.to_vec(),
                actual: t.shape().to_vec(),
            });
        }
    }
    Ok(queries
        .par_iter()
        .map(|q| {
            let mut best = (f64::INFINITY, 0);
            for (j, t) in targets.iter().enumerate() {
                let d = sq_distance(q, t);
                if d < best.0 {
                    best = (d, j);
                }
            }
            best.1
        })
        .collect())
}

/// Fraction of queries whose nearest target is `truth[i]`. Each query is
/// scored independently; several queries may share a nearest target.
pub fn nn_assignment_accuracy(
    queries: &[Tensor],
    targets: &[Tensor],
    truth: &[usize],
) -> Result<f64> {
    if truth.len() != queries.len() {
        return Err(Error::Shape {
            expected: vec![queries.len()],
            actual: vec![truth.len()],
        });
    }
    if let Some(&bad) = truth.iter().find(|&&t| t >= targets.len()) {
        return Err(Error::param(
            "truth",
            format!(
                "target index {bad} out of range for {} targets",
                targets.len()
            ),
        ));
    }
    let nearest = nearest_targets(queries, targets)?;
    let hits = nearest.iter().zip(truth).filter(|(a, b)| a == b).count();
    Ok(hits as f64 / queries.len() as f64)
}
