//! Population-response similarity: SNR weighting, centered unit vectors,
//! per-trial/oracle/model similarity matrices, cross-scan stability
//! statistics, and a conv-encoder denoiser.

mod denoiser;
mod matrices;
mod snr;

pub use denoiser::{fit_denoiser, similarity_model, DenoiserConfig, PredictiveModel, ReadoutKind};
pub use matrices::{
    average_over_scans, cka_index, fluctuation_stats, matrix_correlation, similarity_data,
    similarity_oracle, FluctuationStats, TrialSimilarities,
};
pub use snr::{compute_snr_weights, scale_and_center, ScaledPopulation, SnrConfig, SnrWeights};

use serde::{Deserialize, Serialize};

use crate::error::{CoreError, CoreResult};
use crate::tensor::Tensor;

/// Norms below this flag a stimulus as degenerate (no unit vector).
pub const DEGENERATE_NORM_EPS: f32 = 1e-6;

/// Multi-trial responses of one scan: `response(i, t)` is the population
/// vector (one value per neuron) for stimulus `i`, trial `t`.
#[derive(Debug, Clone)]
pub struct ResponseDataset {
    pub scan_id: String,
    /// Grayscale stimuli, [n_stimuli, h, w], values in [0, 1].
    pub stimuli: Tensor,
    /// Per stimulus: row-major [trials, neurons].
    responses: Vec<Vec<f32>>,
    trial_counts: Vec<usize>,
    oracle: Vec<bool>,
    n_neurons: usize,
}

impl ResponseDataset {
    /// Validates the ragged layout: every stimulus has >= 1 trial, the
    /// oracle flag holds exactly when >= 2 trials exist, and all values
    /// are finite.
    pub fn new(
        scan_id: String,
        stimuli: Tensor,
        responses: Vec<Vec<f32>>,
        trial_counts: Vec<usize>,
        oracle: Vec<bool>,
        n_neurons: usize,
    ) -> CoreResult<Self> {
        let n_stim = trial_counts.len();
        if stimuli.shape().len() != 3 || stimuli.shape()[0] != n_stim {
            return Err(CoreError::Shape(format!(
                "stimuli shape {:?} vs {} stimuli",
                stimuli.shape(),
                n_stim
            )));
        }
        if responses.len() != n_stim || oracle.len() != n_stim {
            return Err(CoreError::Data(format!(
                "scan {scan_id}: {} responses / {} oracle flags for {} stimuli",
                responses.len(),
                oracle.len(),
                n_stim
            )));
        }
        for (i, (&t, r)) in trial_counts.iter().zip(responses.iter()).enumerate() {
            if t == 0 {
                return Err(CoreError::Data(format!("stimulus {i} has no trials")));
            }
            if oracle[i] != (t >= 2) {
                return Err(CoreError::Data(format!(
                    "stimulus {i}: oracle flag {} inconsistent with {t} trials",
                    oracle[i]
                )));
            }
            if r.len() != t * n_neurons {
                return Err(CoreError::Shape(format!(
                    "stimulus {i}: {} values for {t} trials x {n_neurons} neurons",
                    r.len()
                )));
            }
            if r.iter().any(|v| !v.is_finite()) {
                return Err(CoreError::NonFinite(format!("stimulus {i} has non-finite responses")));
            }
        }
        Ok(ResponseDataset { scan_id, stimuli, responses, trial_counts, oracle, n_neurons })
    }

    pub fn n_stimuli(&self) -> usize {
        self.trial_counts.len()
    }

    pub fn n_neurons(&self) -> usize {
        self.n_neurons
    }

    pub fn trial_count(&self, stimulus: usize) -> usize {
        self.trial_counts[stimulus]
    }

    pub fn trial_counts(&self) -> &[usize] {
        &self.trial_counts
    }

    pub fn is_oracle(&self, stimulus: usize) -> bool {
        self.oracle[stimulus]
    }

    pub fn oracle_flags(&self) -> &[bool] {
        &self.oracle
    }

    pub fn oracle_indices(&self) -> Vec<usize> {
        (0..self.n_stimuli()).filter(|&i| self.oracle[i]).collect()
    }

    pub fn non_oracle_indices(&self) -> Vec<usize> {
        (0..self.n_stimuli()).filter(|&i| !self.oracle[i]).collect()
    }

    /// Population vector for one (stimulus, trial).
    pub fn response(&self, stimulus: usize, trial: usize) -> &[f32] {
        let n = self.n_neurons;
        &self.responses[stimulus][trial * n..(trial + 1) * n]
    }

    /// Mean over trials for one stimulus.
    pub fn trial_mean(&self, stimulus: usize) -> Vec<f32> {
        let t = self.trial_counts[stimulus];
        let n = self.n_neurons;
        let mut mean = vec![0.0f32; n];
        for trial in 0..t {
            for (m, &v) in mean.iter_mut().zip(self.response(stimulus, trial)) {
                *m += v;
            }
        }
        for m in &mut mean {
            *m /= t as f32;
        }
        mean
    }

    /// One grayscale stimulus as an [h, w] tensor.
    pub fn stimulus_image(&self, i: usize) -> Tensor {
        let s = self.stimuli.shape();
        let (h, w) = (s[1], s[2]);
        let data = self.stimuli.data()[i * h * w..(i + 1) * h * w].to_vec();
        Tensor::new(vec![h, w], data).expect("stimulus slice")
    }

    /// Multiplies every response by a constant (test hook for the cosine
    /// invariance property).
    pub fn scale_responses(&mut self, c: f32) {
        for r in &mut self.responses {
            for v in r.iter_mut() {
                *v *= c;
            }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SimilarityKind {
    Data,
    Oracle,
    Model,
    NeuralTarget,
    Cnn,
    Shuffle,
    Random,
}

/// Symmetric matrix of pairwise representation similarities over a list
/// of stimulus ids.
#[derive(Debug, Clone, PartialEq)]
pub struct SimilarityMatrix {
    pub kind: SimilarityKind,
    /// Original stimulus indices for the rows/columns.
    pub stimuli: Vec<usize>,
    values: Vec<f32>,
    n: usize,
}

impl SimilarityMatrix {
    pub fn from_values(
        kind: SimilarityKind,
        stimuli: Vec<usize>,
        values: Vec<f32>,
    ) -> CoreResult<Self> {
        let n = stimuli.len();
        if values.len() != n * n {
            return Err(CoreError::Shape(format!(
                "similarity matrix: {} values for {n} stimuli",
                values.len()
            )));
        }
        Ok(SimilarityMatrix { kind, stimuli, values, n })
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn get(&self, i: usize, j: usize) -> f32 {
        self.values[i * self.n + j]
    }

    pub(crate) fn set_sym(&mut self, i: usize, j: usize, v: f32) {
        self.values[i * self.n + j] = v;
        self.values[j * self.n + i] = v;
    }

    pub fn values(&self) -> &[f32] {
        &self.values
    }

    pub fn to_tensor(&self) -> Tensor {
        Tensor::new(vec![self.n, self.n], self.values.clone()).expect("square matrix")
    }

    /// Strict upper-triangle entries in row-major order.
    pub fn upper_triangle(&self) -> Vec<f32> {
        let mut out = Vec::with_capacity(self.n * (self.n.saturating_sub(1)) / 2);
        for i in 0..self.n {
            for j in i + 1..self.n {
                out.push(self.get(i, j));
            }
        }
        out
    }

    /// Checks symmetry (<= 1e-6), range [-1, 1], and a unit diagonal when
    /// `unit_diagonal` is set (per-trial matrices).
    pub fn validate(&self, unit_diagonal: bool) -> CoreResult<()> {
        for i in 0..self.n {
            for j in 0..self.n {
                let v = self.get(i, j);
                if !v.is_finite() || !(-1.0..=1.0).contains(&v) {
                    return Err(CoreError::Data(format!("entry ({i},{j}) = {v} out of [-1,1]")));
                }
                let asym = (v - self.get(j, i)).abs();
                if asym > 1e-6 {
                    return Err(CoreError::Data(format!("asymmetry {asym} at ({i},{j})")));
                }
            }
            if unit_diagonal && (self.get(i, i) - 1.0).abs() > 1e-6 {
                return Err(CoreError::Data(format!("diagonal ({i},{i}) = {}", self.get(i, i))));
            }
        }
        Ok(())
    }
}

/// Pearson correlation in f64; `None` when either side has zero variance.
pub fn pearson(xs: &[f32], ys: &[f32]) -> Option<f64> {
    if xs.len() != ys.len() || xs.len() < 2 {
        return None;
    }
    let n = xs.len() as f64;
    let mx = xs.iter().map(|&v| v as f64).sum::<f64>() / n;
    let my = ys.iter().map(|&v| v as f64).sum::<f64>() / n;
    let (mut sxx, mut syy, mut sxy) = (0.0f64, 0.0f64, 0.0f64);
    for (&x, &y) in xs.iter().zip(ys.iter()) {
        let dx = x as f64 - mx;
        let dy = y as f64 - my;
        sxx += dx * dx;
        syy += dy * dy;
        sxy += dx * dy;
    }
    if sxx <= 0.0 || syy <= 0.0 {
        return None;
    }
    Some(sxy / (sxx * syy).sqrt())
}

/// Centers rows around their mean and normalizes; `None` marks rows whose
/// centered norm falls below [`DEGENERATE_NORM_EPS`].
pub(crate) fn center_unit_vectors(rows: &[Vec<f32>]) -> (Vec<f32>, Vec<Option<Vec<f32>>>) {
    let dim = rows.first().map(|r| r.len()).unwrap_or(0);
    let mut mean = vec![0.0f32; dim];
    for r in rows {
        for (m, &v) in mean.iter_mut().zip(r.iter()) {
            *m += v;
        }
    }
    let inv = 1.0 / rows.len().max(1) as f32;
    for m in &mut mean {
        *m *= inv;
    }
    let units = rows
        .iter()
        .map(|r| {
            let centered: Vec<f32> = r.iter().zip(mean.iter()).map(|(&v, &m)| v - m).collect();
            let norm = centered.iter().map(|&v| (v as f64) * (v as f64)).sum::<f64>().sqrt() as f32;
            if norm < DEGENERATE_NORM_EPS {
                None
            } else {
                Some(centered.iter().map(|&v| v / norm).collect())
            }
        })
        .collect();
    (mean, units)
}

pub(crate) fn unit_dot(a: &[f32], b: &[f32]) -> f32 {
    let mut acc = 0.0f64;
    for (&x, &y) in a.iter().zip(b.iter()) {
        acc += (x as f64) * (y as f64);
    }
    (acc as f32).clamp(-1.0, 1.0)
}
