//! Exact k-nearest-neighbor search by blocked brute force.

use ndarray::{ArrayView2, Axis};
use rayon::prelude::*;

use crate::error::{Error, Result};

const QUERY_BLOCK: usize = 64;

/// k nearest reference rows for every query row, ordered by
/// (squared distance, reference index).
#[derive(Debug, Clone)]
pub struct Neighbors {
    k: usize,
    indices: Vec<usize>,
    sq_dists: Vec<f64>,
}

impl Neighbors {
    pub fn k(&self) -> usize {
        self.k
    }

    pub fn n_queries(&self) -> usize {
        if self.k == 0 {
            0
        } else {
            self.indices.len() / self.k
        }
    }

    pub fn indices(&self, query: usize) -> &[usize] {
        &self.indices[query * self.k..(query + 1) * self.k]
    }

    pub fn sq_dists(&self, query: usize) -> &[f64] {
        &self.sq_dists[query * self.k..(query + 1) * self.k]
    }
}

pub fn squared_euclidean(a: &[f64], b: &[f64]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(x, y)| {
            let d = x - y;
            d * d
        })
        .sum()
}

/// Searches `reference` for the `k` nearest rows of each `query` row.
///
/// With `exclude_self`, query `i` never returns reference row `i`; use it when
/// query and reference are the same matrix.
pub fn knn_search(
    reference: ArrayView2<f64>,
    query: ArrayView2<f64>,
    k: usize,
    exclude_self: bool,
) -> Result<Neighbors> {
    if reference.ncols() != query.ncols() {
        return Err(Error::InvalidArgument(format!(
            "reference dim {} != query dim {}",
            reference.ncols(),
            query.ncols()
        )));
    }
    let available = reference.nrows() - usize::from(exclude_self && reference.nrows() > 0);
    if k == 0 || k > available {
        return Err(Error::InvalidArgument(format!(
            "k = {k} but only {available} reference rows are available"
        )));
    }
    let reference = reference.as_standard_layout();
    let query = query.as_standard_layout();
    let ref_rows: Vec<&[f64]> = reference
        .axis_iter(Axis(0))
        .map(|r| r.to_slice().expect("standard layout"))
        .collect();
    let query_rows: Vec<&[f64]> = query
        .axis_iter(Axis(0))
        .map(|r| r.to_slice().expect("standard layout"))
        .collect();

    let blocks: Vec<(Vec<usize>, Vec<f64>)> = query_rows
        .par_chunks(QUERY_BLOCK)
        .enumerate()
        .map(|(block, rows)| {
            let mut idx = Vec::with_capacity(rows.len() * k);
            let mut dst = Vec::with_capacity(rows.len() * k);
            let mut scratch: Vec<(f64, usize)> = Vec::with_capacity(ref_rows.len());
            for (offset, q) in rows.iter().enumerate() {
                let qi = block * QUERY_BLOCK + offset;
                scratch.clear();
                scratch.extend(
                    ref_rows
                        .iter()
                        .enumerate()
                        .filter(|&(j, _)| !(exclude_self && j == qi))
                        .map(|(j, r)| (squared_euclidean(q, r), j)),
                );
                let cmp = |a: &(f64, usize), b: &(f64, usize)| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1));
                if k < scratch.len() {
                    scratch.select_nth_unstable_by(k - 1, cmp);
                    scratch.truncate(k);
                }
                scratch.sort_unstable_by(cmp);
                for &(d, j) in &scratch {
                    idx.push(j);
                    dst.push(d);
                }
            }
            (idx, dst)
        })
        .collect();

    let mut indices = Vec::with_capacity(query_rows.len() * k);
    let mut sq_dists = Vec::with_capacity(query_rows.len() * k);
    for (i, d) in blocks {
        indices.extend(i);
        sq_dists.extend(d);
    }
    Ok(Neighbors {
        k,
        indices,
        sq_dists,
    })
}
