//! Candidate scans shared by the inference routines.
//!
//! Results are collected in candidate order, so argmax tie-breaking is the
//! same whether or not the scan runs on several threads.

#[cfg(feature = "parallel")]
const PAR_THRESHOLD: usize = 48;

pub(crate) fn map_candidates<F>(candidates: &[usize], f: F) -> Vec<f64>
where
    F: Fn(usize) -> f64 + Sync + Send,
{
    #[cfg(feature = "parallel")]
    {
        if candidates.len() >= PAR_THRESHOLD {
            use rayon::prelude::*;
            return candidates.par_iter().map(|&c| f(c)).collect();
        }
    }
    candidates.iter().map(|&c| f(c)).collect()
}

/// Index of the first strict maximum.
pub(crate) fn argmax_first(values: &[f64]) -> Option<usize> {
    let mut best: Option<usize> = None;
    for (i, &v) in values.iter().enumerate() {
        match best {
            Some(b) if v <= values[b] => {}
            _ => best = Some(i),
        }
    }
    best
}
