//! Conv-encoder denoiser: predicts per-neuron responses from stimuli so
//! similarity targets come from deterministic model outputs instead of
//! noisy single trials.

use super::snr::{scale_rows_into_population, SnrWeights};
use super::{matrices::similarity_data, pearson, ResponseDataset, SimilarityKind, SimilarityMatrix};
use crate::error::{CoreError, CoreResult};
use crate::rng::Rng;
use crate::tensor::{gather_images, Layer, LayerOp, NetworkGraph, Tape, Tensor};
use crate::tensor::optim::sgd_step;

/// How the linear readout consumes the encoder features.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ReadoutKind {
    /// Readout over all spatial positions. Richer response geometry, but
    /// with many parameters it will chase trial noise on small datasets.
    Flattened,
    /// Global-average-pooled features first. A hard bottleneck that acts
    /// as strong regularization; the better denoiser on very noisy data.
    Pooled,
}

#[derive(Debug, Clone)]
pub struct DenoiserConfig {
    /// Conv channels of the 3-layer encoder; 0 drops the encoder and fits
    /// a linear readout on raw pixels.
    pub channels: usize,
    /// Residual connection from the first activation to the last conv.
    pub skip: bool,
    /// Softplus output head (responses are non-negative rates).
    pub softplus_head: bool,
    pub readout: ReadoutKind,
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f32,
    pub momentum: f32,
    pub seed: u64,
    /// Prediction variance below this zeroes the neuron's correlation.
    pub corr_eps: f32,
}

impl Default for DenoiserConfig {
    fn default() -> Self {
        DenoiserConfig {
            channels: 12,
            skip: true,
            softplus_head: true,
            readout: ReadoutKind::Flattened,
            epochs: 40,
            batch_size: 16,
            learning_rate: 0.03,
            momentum: 0.9,
            seed: 0,
            corr_eps: 1e-6,
        }
    }
}

/// Encoder plus linear readout, with per-neuron prediction correlations
/// v_a measured on held-out oracle means.
#[derive(Debug, Clone)]
pub struct PredictiveModel {
    pub net: NetworkGraph,
    pub v: Vec<f32>,
}

impl PredictiveModel {
    /// Predicted response vectors for the given stimulus rows.
    pub fn predict(&self, stimuli: &Tensor, ids: &[usize]) -> CoreResult<Vec<Vec<f32>>> {
        let n_neurons = self.net.output_features();
        let mut out = Vec::with_capacity(ids.len());
        for chunk in ids.chunks(64) {
            let batch = gather_images(stimuli, chunk)?;
            let (pred, _) = self.net.infer(&batch)?;
            for r in 0..chunk.len() {
                out.push(pred.data()[r * n_neurons..(r + 1) * n_neurons].to_vec());
            }
        }
        Ok(out)
    }
}

fn denoiser_layers(cfg: &DenoiserConfig, n_neurons: usize) -> Vec<Layer> {
    if cfg.channels == 0 {
        let mut layers = vec![
            Layer { op: LayerOp::Flatten, input: 0 },
            Layer { op: LayerOp::Linear { out_features: n_neurons }, input: 1 },
        ];
        if cfg.softplus_head {
            layers.push(Layer { op: LayerOp::Softplus, input: 2 });
        }
        return layers;
    }
    let c = cfg.channels;
    let mut layers = vec![
        Layer { op: LayerOp::Conv2d { out_channels: c, kernel: 3, stride: 1, pad: 1 }, input: 0 },
        Layer { op: LayerOp::Relu, input: 1 },
        Layer { op: LayerOp::Conv2d { out_channels: c, kernel: 3, stride: 1, pad: 1 }, input: 2 },
        Layer { op: LayerOp::Relu, input: 3 },
        Layer { op: LayerOp::Conv2d { out_channels: c, kernel: 3, stride: 1, pad: 1 }, input: 4 },
    ];
    let mut prev = 5;
    if cfg.skip {
        layers.push(Layer { op: LayerOp::ResidualAdd { other: 2 }, input: prev });
        prev += 1;
    }
    layers.push(Layer { op: LayerOp::Relu, input: prev });
    let gather = match cfg.readout {
        ReadoutKind::Flattened => LayerOp::Flatten,
        ReadoutKind::Pooled => LayerOp::GlobalAvgPool,
    };
    layers.push(Layer { op: gather, input: prev + 1 });
    layers.push(Layer { op: LayerOp::Linear { out_features: n_neurons }, input: prev + 2 });
    if cfg.softplus_head {
        layers.push(Layer { op: LayerOp::Softplus, input: prev + 3 });
    }
    layers
}

/// Fits the denoiser by mean squared error on non-oracle single trials,
/// then scores each neuron by correlating predictions with the held-out
/// oracle trial means.
pub fn fit_denoiser(ds: &ResponseDataset, cfg: &DenoiserConfig) -> CoreResult<PredictiveModel> {
    let fit_idx = ds.non_oracle_indices();
    let oracle_idx = ds.oracle_indices();
    if fit_idx.is_empty() {
        return Err(CoreError::Data("fit_denoiser: no non-oracle stimuli to fit on".into()));
    }
    if oracle_idx.is_empty() {
        return Err(CoreError::Data("fit_denoiser: no oracle stimuli for validation".into()));
    }
    let s = ds.stimuli.shape();
    let (h, w) = (s[1], s[2]);
    let n_neurons = ds.n_neurons();

    let mut rng = Rng::new(cfg.seed);
    let mut net = NetworkGraph::new([1, h, w], denoiser_layers(cfg, n_neurons), vec![], &mut rng)?;

    // One sample per (stimulus, trial) over the fitting split.
    let mut samples: Vec<(usize, usize)> = Vec::new();
    for &i in &fit_idx {
        for t in 0..ds.trial_count(i) {
            samples.push((i, t));
        }
    }

    let mut order: Vec<usize> = (0..samples.len()).collect();
    for epoch in 0..cfg.epochs {
        // Three-stage step decay over the run.
        let stage = (3 * epoch) / cfg.epochs.max(1);
        let lr = cfg.learning_rate * 0.3f32.powi(stage as i32);
        rng.shuffle(&mut order);
        for (step, chunk) in order.chunks(cfg.batch_size).enumerate() {
            let ids: Vec<usize> = chunk.iter().map(|&k| samples[k].0).collect();
            let batch = gather_images(&ds.stimuli, &ids)?;
            let mut target = Vec::with_capacity(chunk.len() * n_neurons);
            for &k in chunk {
                let (i, t) = samples[k];
                target.extend_from_slice(ds.response(i, t));
            }
            let target = Tensor::new(vec![chunk.len(), n_neurons], target)?;

            let mut tape = Tape::new();
            let input = tape.input(&batch);
            let binds = net.bind(&mut tape);
            let pass = net.forward_on(&mut tape, &binds, input)?;
            let target_id = tape.input(&target);
            let diff = tape.sub(pass.output, target_id)?;
            let sq = tape.mul(diff, diff)?;
            let loss = tape.mean_all(sq);
            let loss_val = tape.scalar_value(loss);
            if !loss_val.is_finite() {
                return Err(CoreError::NonFinite(format!(
                    "denoiser training diverged at epoch {epoch} step {step} (loss {loss_val})"
                )));
            }
            tape.backward(loss)?;
            let grads = tape.param_grads();
            sgd_step(net.params_mut(), &grads, lr, cfg.momentum)?;
        }
    }

    // Validation: correlation against oracle means across oracle stimuli.
    let model = PredictiveModel { net, v: vec![0.0; n_neurons] };
    let preds = model.predict(&ds.stimuli, &oracle_idx)?;
    let mut v = vec![0.0f32; n_neurons];
    for a in 0..n_neurons {
        let p: Vec<f32> = preds.iter().map(|r| r[a]).collect();
        let t: Vec<f32> = oracle_idx.iter().map(|&i| ds.trial_mean(i)[a]).collect();
        let var_p = variance(&p);
        v[a] = if var_p < cfg.corr_eps as f64 {
            0.0
        } else {
            pearson(&p, &t).unwrap_or(0.0) as f32
        };
    }
    Ok(PredictiveModel { net: model.net, v })
}

fn variance(xs: &[f32]) -> f64 {
    if xs.is_empty() {
        return 0.0;
    }
    let n = xs.len() as f64;
    let m = xs.iter().map(|&v| v as f64).sum::<f64>() / n;
    xs.iter().map(|&v| (v as f64 - m).powi(2)).sum::<f64>() / n
}

/// Model similarity: scaled model responses w_a v_a rho_hat, centered over
/// the given stimuli and normalized, same pipeline as the data similarity.
pub fn similarity_model(
    model: &PredictiveModel,
    weights: &SnrWeights,
    stimuli: &Tensor,
    ids: &[usize],
) -> CoreResult<SimilarityMatrix> {
    if weights.len() != model.v.len() {
        return Err(CoreError::Shape(format!(
            "weights for {} neurons, model has {}",
            weights.len(),
            model.v.len()
        )));
    }
    let preds = model.predict(stimuli, ids)?;
    let rows: Vec<Vec<f32>> = preds
        .into_iter()
        .map(|r| {
            r.iter()
                .zip(weights.weights.iter().zip(model.v.iter()))
                .map(|(&p, (&w, &v))| w * v * p)
                .collect()
        })
        .collect();
    let pop = scale_rows_into_population(rows, ids.to_vec())?;
    let mut m = similarity_data(&pop)?;
    m.kind = SimilarityKind::Model;
    Ok(m)
}
