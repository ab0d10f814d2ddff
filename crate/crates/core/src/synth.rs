//! Synthetic series generators used by the integration tests, the acceptance
//! suite, and the benchmarks.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::data::TimeSeries;
use crate::error::Result;

/// A clean multi-modality signal: per modality, the sum of two seeded
/// sinusoids plus a little Gaussian-ish jitter.
pub fn multi_sine(n_modalities: usize, len: usize, seed: u64) -> TimeSeries {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let params: Vec<(f64, f64, f64, f64, f64)> = (0..n_modalities)
        .map(|_| {
            (
                rng.random_range(0.02..0.12),                 // fundamental frequency
                rng.random_range(0.0..std::f64::consts::TAU), // phase
                rng.random_range(0.2..0.5),                   // harmonic amplitude
                rng.random_range(2.0..4.0),                   // harmonic ratio
                rng.random_range(-1.0..1.0),                  // offset
            )
        })
        .collect();
    let noise = 0.02;
    let mut values = Vec::with_capacity(len * n_modalities);
    for t in 0..len {
        for &(freq, phase, harm_amp, harm_ratio, offset) in &params {
            let x = t as f64;
            let base = (std::f64::consts::TAU * freq * x + phase).sin();
            let harmonic = harm_amp * (std::f64::consts::TAU * freq * harm_ratio * x).sin();
            let jitter = noise * (rng.random::<f64>() * 2.0 - 1.0);
            values.push((offset + base + harmonic + jitter) as f32);
        }
    }
    let names = (0..n_modalities).map(|m| format!("m{m}")).collect();
    TimeSeries::new(values, names).expect("generated series is well-formed")
}

/// Adds `count` spikes of `magnitude_stds` per-modality standard deviations
/// at distinct seeded positions (one random modality each) and returns the
/// spiked series with its binary labels.
pub fn inject_spikes(
    series: &TimeSeries,
    count: usize,
    magnitude_stds: f64,
    seed: u64,
) -> Result<(TimeSeries, Vec<u8>)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let m = series.n_modalities();
    let len = series.len();
    let mut stds = Vec::with_capacity(m);
    for modality in 0..m {
        let column: Vec<f64> = (0..len).map(|t| series.value(t, modality) as f64).collect();
        let mean = column.iter().sum::<f64>() / len as f64;
        let var = column.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / len as f64;
        stds.push(var.sqrt().max(1e-6));
    }

    let mut positions = std::collections::BTreeSet::new();
    while positions.len() < count.min(len) {
        positions.insert(rng.random_range(0..len));
    }
    let mut values = series.values().to_vec();
    let mut labels = vec![0u8; len];
    for &t in &positions {
        let modality = rng.random_range(0..m);
        values[t * m + modality] += (magnitude_stds * stds[modality]) as f32;
        labels[t] = 1;
    }
    Ok((
        TimeSeries::new(values, series.modality_names().to_vec())?,
        labels,
    ))
}
