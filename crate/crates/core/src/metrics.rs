//! Empirical distances and posterior summary statistics.
//!
//! `w1_1d` is the exact empirical Wasserstein-1 distance between equal-size
//! 1D sample sets (mean absolute difference of sorted samples). `sliced_w1`
//! averages `w1_1d` over projections onto random unit directions, the
//! standard surrogate in dimension above one.

use ndarray::ArrayView2;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Fixed seed for the shuffle used when sample counts differ; keeps
/// truncation deterministic across runs.
const TRUNCATION_SHUFFLE_SEED: u64 = 0x5eed_57a7_1e55_u64;

/// A named metric evaluation, serialized into experiment outputs.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct MetricReport {
    pub name: String,
    pub value: f64,
    pub sample_count_a: usize,
    pub sample_count_b: usize,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub directions: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
}

fn sorted(v: &[f64]) -> Vec<f64> {
    let mut out = v.to_vec();
    out.sort_by(|a, b| a.partial_cmp(b).unwrap());
    out
}

/// Truncates the longer sample set to the shorter one after a seeded
/// shuffle, so unequal counts compare a uniform subsample.
fn equalize(a: &[f64], b: &[f64]) -> (Vec<f64>, Vec<f64>) {
    let m = a.len().min(b.len());
    let cut = |v: &[f64]| -> Vec<f64> {
        if v.len() == m {
            return v.to_vec();
        }
        let mut out = v.to_vec();
        let mut rng = ChaCha8Rng::seed_from_u64(TRUNCATION_SHUFFLE_SEED);
        out.shuffle(&mut rng);
        out.truncate(m);
        out
    };
    (cut(a), cut(b))
}

/// Exact empirical Wasserstein-1 distance between 1D sample sets.
pub fn w1_1d(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.is_empty() || b.is_empty() {
        return Err(Error::Precondition("w1_1d needs nonempty samples".into()));
    }
    let (a, b) = equalize(a, b);
    let a = sorted(&a);
    let b = sorted(&b);
    let sum: f64 = a.iter().zip(&b).map(|(x, y)| (x - y).abs()).sum();
    Ok(sum / a.len() as f64)
}

/// Monte-Carlo sliced Wasserstein-1 distance: the average over `n_dirs`
/// uniform unit-sphere directions of the 1D distance between projections.
pub fn sliced_w1(
    a: ArrayView2<'_, f64>,
    b: ArrayView2<'_, f64>,
    n_dirs: usize,
    seed: u64,
) -> Result<f64> {
    let n = a.ncols();
    if n == 0 || n != b.ncols() {
        return Err(Error::DimensionMismatch { expected: n, got: b.ncols() });
    }
    if n_dirs == 0 {
        return Err(Error::Precondition("need at least one direction".into()));
    }
    if a.nrows() == 0 || b.nrows() == 0 {
        return Err(Error::Precondition("sliced_w1 needs nonempty samples".into()));
    }

    // Directions drawn up front so the parallel loop stays deterministic.
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let dirs: Vec<Vec<f64>> = (0..n_dirs)
        .map(|_| {
            loop {
                let d: Vec<f64> = (0..n).map(|_| StandardNormal.sample(&mut rng)).collect();
                let norm = d.iter().map(|x| x * x).sum::<f64>().sqrt();
                if norm > 1e-12 {
                    return d.into_iter().map(|x| x / norm).collect();
                }
            }
        })
        .collect();

    let distances: Vec<f64> = dirs
        .par_iter()
        .map(|d| {
            let project = |m: &ArrayView2<'_, f64>| -> Vec<f64> {
                m.rows()
                    .into_iter()
                    .map(|row| row.iter().zip(d).map(|(x, di)| x * di).sum())
                    .collect()
            };
            w1_1d(&project(&a), &project(&b))
        })
        .collect::<Result<_>>()?;

    Ok(distances.iter().sum::<f64>() / n_dirs as f64)
}

/// Coordinate-wise sample mean and population (1/N) standard deviation.
pub fn mean_and_std(samples: ArrayView2<'_, f64>) -> Result<(Vec<f64>, Vec<f64>)> {
    let (rows, cols) = (samples.nrows(), samples.ncols());
    if rows == 0 {
        return Err(Error::Precondition("summarize needs nonempty samples".into()));
    }
    let mut mean = vec![0.0; cols];
    let mut std = vec![0.0; cols];
    for i in 0..cols {
        let col = samples.column(i);
        let m = col.sum() / rows as f64;
        let var = col.fold(0.0, |acc, v| acc + (v - m) * (v - m)) / rows as f64;
        mean[i] = m;
        std[i] = var.sqrt();
    }
    Ok((mean, std))
}

/// Summary of one posterior time slice.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SliceSummary {
    pub t: f64,
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

/// Per-time posterior means and standard deviation bands.
pub fn summarize(times: &[f64], slices: &[ArrayView2<'_, f64>]) -> Result<Vec<SliceSummary>> {
    if times.len() != slices.len() {
        return Err(Error::DimensionMismatch { expected: times.len(), got: slices.len() });
    }
    times
        .iter()
        .zip(slices)
        .map(|(t, s)| {
            let (mean, std) = mean_and_std(*s)?;
            Ok(SliceSummary { t: *t, mean, std })
        })
        .collect()
}
