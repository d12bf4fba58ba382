//! Signal-to-noise weights and the scaled, centered population vectors.

use super::{center_unit_vectors, ResponseDataset};
use crate::error::{CoreError, CoreResult};

/// Degenerate-case handling for the SNR ratio.
#[derive(Debug, Clone, Copy)]
pub struct SnrConfig {
    /// Threshold below which sigma/eta count as zero.
    pub eps: f32,
    /// Weight assigned when noise vanishes but signal remains.
    pub w_max: f32,
}

impl Default for SnrConfig {
    fn default() -> Self {
        SnrConfig { eps: 1e-6, w_max: 1e3 }
    }
}

/// Per-neuron signal strength, noise strength, and weight sigma/eta.
#[derive(Debug, Clone)]
pub struct SnrWeights {
    pub sigma: Vec<f32>,
    pub eta: Vec<f32>,
    pub weights: Vec<f32>,
}

impl SnrWeights {
    pub fn len(&self) -> usize {
        self.weights.len()
    }

    pub fn is_empty(&self) -> bool {
        self.weights.is_empty()
    }
}

/// Estimates per-neuron SNR weights from repeated (oracle) stimuli.
///
/// Signal: variance over stimuli of the trial-mean response. Noise: mean
/// over stimuli of the across-trial variance. Both use the population
/// divisor (N, not N-1). Degenerate rule: eta ~ 0 and sigma ~ 0 gives
/// weight 0; eta ~ 0 alone gives `w_max`.
pub fn compute_snr_weights(ds: &ResponseDataset, cfg: SnrConfig) -> CoreResult<SnrWeights> {
    let oracle = ds.oracle_indices();
    if oracle.len() < 2 {
        return Err(CoreError::Data(format!(
            "compute_snr_weights needs >= 2 oracle stimuli, found {}",
            oracle.len()
        )));
    }
    let n_neurons = ds.n_neurons();
    let n_stim = oracle.len() as f64;

    let mut sigma = vec![0.0f32; n_neurons];
    let mut eta = vec![0.0f32; n_neurons];
    let mut weights = vec![0.0f32; n_neurons];

    for a in 0..n_neurons {
        let mut mean_sum = 0.0f64;
        let mut mean_sq_sum = 0.0f64;
        let mut var_sum = 0.0f64;
        for &i in &oracle {
            let t = ds.trial_count(i);
            let mut s = 0.0f64;
            let mut sq = 0.0f64;
            for trial in 0..t {
                let v = ds.response(i, trial)[a] as f64;
                s += v;
                sq += v * v;
            }
            let m = s / t as f64;
            mean_sum += m;
            mean_sq_sum += m * m;
            var_sum += (sq / t as f64 - m * m).max(0.0);
        }
        let grand = mean_sum / n_stim;
        let sig2 = (mean_sq_sum / n_stim - grand * grand).max(0.0);
        let eta2 = var_sum / n_stim;
        let s = sig2.sqrt() as f32;
        let e = eta2.sqrt() as f32;
        sigma[a] = s;
        eta[a] = e;
        weights[a] = if e < cfg.eps {
            if s < cfg.eps {
                0.0
            } else {
                cfg.w_max
            }
        } else {
            s / e
        };
    }

    Ok(SnrWeights { sigma, eta, weights })
}

/// SNR-scaled population responses with centered unit vectors.
///
/// Each stimulus contributes its first trial (the per-trial convention of
/// the data similarity); stimuli whose centered vector has near-zero norm
/// are flagged degenerate and excluded from similarity computations.
#[derive(Debug, Clone)]
pub struct ScaledPopulation {
    /// Scaled per-stimulus responses w_a * rho_a.
    pub vectors: Vec<Vec<f32>>,
    /// Mean scaled response over all stimuli.
    pub mean: Vec<f32>,
    /// Unit vectors; `None` marks degenerate stimuli.
    pub units: Vec<Option<Vec<f32>>>,
    /// Original stimulus index per row.
    pub stimulus_ids: Vec<usize>,
}

impl ScaledPopulation {
    pub fn degenerate_ids(&self) -> Vec<usize> {
        self.units
            .iter()
            .zip(self.stimulus_ids.iter())
            .filter(|(u, _)| u.is_none())
            .map(|(_, &id)| id)
            .collect()
    }

    pub fn included_ids(&self) -> Vec<usize> {
        self.units
            .iter()
            .zip(self.stimulus_ids.iter())
            .filter(|(u, _)| u.is_some())
            .map(|(_, &id)| id)
            .collect()
    }
}

/// Scales single-trial responses by the SNR weights, centers over all
/// stimuli, and normalizes.
pub fn scale_and_center(ds: &ResponseDataset, weights: &SnrWeights) -> CoreResult<ScaledPopulation> {
    if weights.len() != ds.n_neurons() {
        return Err(CoreError::Shape(format!(
            "weights for {} neurons, dataset has {}",
            weights.len(),
            ds.n_neurons()
        )));
    }
    let ids: Vec<usize> = (0..ds.n_stimuli()).collect();
    let rows: Vec<Vec<f32>> = ids
        .iter()
        .map(|&i| {
            ds.response(i, 0)
                .iter()
                .zip(weights.weights.iter())
                .map(|(&r, &w)| w * r)
                .collect()
        })
        .collect();
    scale_rows_into_population(rows, ids)
}

/// Shared tail of the scaled-population pipeline, reused by the model
/// similarity path.
pub(crate) fn scale_rows_into_population(
    rows: Vec<Vec<f32>>,
    stimulus_ids: Vec<usize>,
) -> CoreResult<ScaledPopulation> {
    if rows.is_empty() {
        return Err(CoreError::Data("scale_and_center: no stimuli".into()));
    }
    let (mean, units) = center_unit_vectors(&rows);
    Ok(ScaledPopulation { vectors: rows, mean, units, stimulus_ids })
}
