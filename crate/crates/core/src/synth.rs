//! Synthetic data: multi-trial scans with known ground truth (replacing
//! recordings) and an oriented-grating classification task.
//!
//! Scan responses follow rho = softplus(G . phi(stimulus)) + noise with
//! phi a fixed random conv feature map, so the denoiser's encoder family
//! can recover the mapping (realizable by construction). Per-neuron noise
//! is drawn relative to each neuron's signal strength, keeping the SNR in
//! a controlled band; sigma_true / eta_true / clean responses are stored
//! for oracle-based tests.

use serde::{Deserialize, Serialize};

use crate::error::{CoreError, CoreResult};
use crate::io::{ClassDataset, GroundTruth};
use crate::rng::Rng;
use crate::similarity::ResponseDataset;
use crate::tensor::{gather_images, Layer, LayerOp, NetworkGraph, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum TuningKind {
    /// softplus(G . phi(x)): exactly representable by the denoiser family.
    Realizable,
    /// softplus(G . tanh(2 phi(x))): the tanh squash is outside the
    /// denoiser family.
    Misspecified,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SynthConfig {
    pub neurons: usize,
    pub stimuli: usize,
    /// Leading `oracle` stimuli get `repeats` trials, the rest one trial.
    pub oracle: usize,
    pub repeats: usize,
    pub image_size: usize,
    pub tuning: TuningKind,
    /// Per-neuron noise std as a fraction of that neuron's signal std,
    /// drawn uniformly from this range.
    pub noise_rel_range: [f32; 2],
    /// Per-scan perturbation of the readout (0 = identical tuning).
    pub scan_jitter: f32,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            neurons: 80,
            stimuli: 160,
            oracle: 40,
            repeats: 8,
            image_size: 16,
            tuning: TuningKind::Realizable,
            noise_rel_range: [0.4, 1.0],
            scan_jitter: 0.0,
            seed: 0,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> CoreResult<()> {
        if self.neurons == 0 || self.stimuli == 0 {
            return Err(CoreError::Config("synth: neurons and stimuli must be >= 1".into()));
        }
        if self.oracle > self.stimuli {
            return Err(CoreError::Config(format!(
                "synth: oracle count {} exceeds stimulus count {}",
                self.oracle, self.stimuli
            )));
        }
        if self.oracle > 0 && self.repeats < 2 {
            return Err(CoreError::Config("synth: oracle stimuli need repeats >= 2".into()));
        }
        if self.image_size < 4 {
            return Err(CoreError::Config("synth: image size must be >= 4".into()));
        }
        let [lo, hi] = self.noise_rel_range;
        if !(0.0..=10.0).contains(&lo) || hi < lo {
            return Err(CoreError::Config(format!("synth: bad noise range [{lo}, {hi}]")));
        }
        Ok(())
    }
}

// ---- stimulus rendering ----------------------------------------------------

fn render_grating(
    size: usize,
    theta: f32,
    cycles: f32,
    phase: f32,
    contrast: f32,
    env_sigma: f32,
    pixel_noise: f32,
    rng: &mut Rng,
) -> Vec<f32> {
    let mut img = vec![0.0f32; size * size];
    let (st, ct) = theta.sin_cos();
    let freq = cycles / size as f32;
    let c = (size as f32 - 1.0) / 2.0;
    for y in 0..size {
        for x in 0..size {
            let dx = x as f32 - c;
            let dy = y as f32 - c;
            let u = dx * ct + dy * st;
            let r2 = dx * dx + dy * dy;
            let env = (-r2 / (2.0 * env_sigma * env_sigma)).exp();
            let v = 0.5
                + 0.5 * contrast * env * (2.0 * std::f32::consts::PI * freq * u + phase).cos()
                + pixel_noise * rng.normal();
            img[y * size + x] = v.clamp(0.0, 1.0);
        }
    }
    img
}

fn render_texture(size: usize, rng: &mut Rng) -> Vec<f32> {
    // Smooth random field: a few low-frequency cosine components.
    let comps: Vec<(f32, f32, f32, f32)> = (0..6)
        .map(|_| {
            (
                rng.range(-2.5, 2.5) / size as f32,
                rng.range(-2.5, 2.5) / size as f32,
                rng.range(0.0, 2.0 * std::f32::consts::PI),
                rng.range(0.1, 0.3),
            )
        })
        .collect();
    let mut img = vec![0.0f32; size * size];
    for y in 0..size {
        for x in 0..size {
            let mut v = 0.5;
            for &(fx, fy, ph, a) in &comps {
                v += a
                    * (2.0 * std::f32::consts::PI * (fx * x as f32 + fy * y as f32) + ph).cos();
            }
            img[y * size + x] = v.clamp(0.0, 1.0);
        }
    }
    img
}

fn render_stimulus_set(n: usize, size: usize, rng: &mut Rng) -> Tensor {
    let mut data = Vec::with_capacity(n * size * size);
    for _ in 0..n {
        let img = if rng.uniform() < 0.7 {
            let theta = rng.range(0.0, std::f32::consts::PI);
            let cycles = rng.range(1.5, 3.5);
            let phase = rng.range(0.0, 2.0 * std::f32::consts::PI);
            let contrast = rng.range(0.6, 1.0);
            let env = rng.range(0.25, 0.5) * size as f32;
            render_grating(size, theta, cycles, phase, contrast, env, 0.02, rng)
        } else {
            render_texture(size, rng)
        };
        data.extend_from_slice(&img);
    }
    Tensor::new(vec![n, size, size], data).expect("stimulus tensor")
}

// ---- tuning model ----------------------------------------------------------

const FEATURE_CHANNELS: usize = 12;

// 3x3 stride-1 conv features, flattened: the denoiser's first conv has
// the same shape and its readout sees flattened features too, so the
// generator mapping lies inside the denoiser family (realizable).
fn feature_net(size: usize, rng: &mut Rng) -> NetworkGraph {
    NetworkGraph::new(
        [1, size, size],
        vec![
            Layer { op: LayerOp::Conv2d { out_channels: FEATURE_CHANNELS, kernel: 3, stride: 1, pad: 1 }, input: 0 },
            Layer { op: LayerOp::Relu, input: 1 },
            Layer { op: LayerOp::Flatten, input: 2 },
        ],
        vec![],
        rng,
    )
    .expect("feature net")
}

struct Tuning {
    feat: NetworkGraph,
    feat_dim: usize,
    readout: Vec<f32>, // [neurons, feat_dim]
    bias: Vec<f32>,
    kind: TuningKind,
}

impl Tuning {
    fn new(cfg: &SynthConfig, rng: &mut Rng) -> Self {
        let feat = feature_net(cfg.image_size, &mut rng.derive(1));
        let feat_dim = FEATURE_CHANNELS * cfg.image_size * cfg.image_size;
        let mut r = rng.derive(2);
        let scale = (2.0 / feat_dim as f32).sqrt() * 3.0;
        let readout = (0..cfg.neurons * feat_dim).map(|_| scale * r.normal()).collect();
        let bias = (0..cfg.neurons).map(|_| r.range(-0.5, 0.5)).collect();
        Tuning { feat, feat_dim, readout, bias, kind: cfg.tuning }
    }

    /// Noiseless responses [neurons, n_stimuli].
    fn clean_responses(&self, stimuli: &Tensor, jitter: Option<(&mut Rng, f32)>) -> Tensor {
        let n_stim = stimuli.shape()[0];
        let n_neurons = self.bias.len();
        let d = self.feat_dim;
        let readout: Vec<f32> = match jitter {
            Some((rng, j)) if j > 0.0 => {
                let scale = (2.0 / d as f32).sqrt() * 3.0;
                self.readout.iter().map(|&w| w + j * scale * rng.normal()).collect()
            }
            _ => self.readout.clone(),
        };
        let ids: Vec<usize> = (0..n_stim).collect();
        let mut clean = vec![0.0f32; n_neurons * n_stim];
        for chunk in ids.chunks(64) {
            let batch = gather_images(stimuli, chunk).expect("stimulus batch");
            let (feats, _) = self.feat.infer(&batch).expect("feature pass");
            for (row, &i) in chunk.iter().enumerate() {
                let g = &feats.data()[row * d..(row + 1) * d];
                let g: Vec<f32> = match self.kind {
                    TuningKind::Realizable => g.to_vec(),
                    TuningKind::Misspecified => g.iter().map(|&v| (2.0 * v).tanh()).collect(),
                };
                for a in 0..n_neurons {
                    let w = &readout[a * d..(a + 1) * d];
                    let u: f32 =
                        w.iter().zip(g.iter()).map(|(&wv, &gv)| wv * gv).sum::<f32>() + self.bias[a];
                    // softplus, stable on both tails
                    clean[a * n_stim + i] = u.max(0.0) + (-u.abs()).exp().ln_1p();
                }
            }
        }
        Tensor::new(vec![n_neurons, n_stim], clean).expect("clean tensor")
    }
}

// ---- scan generation -------------------------------------------------------

/// Generates `n_scans` scans sharing stimuli and tuning, with independent
/// trial noise per scan, plus the generator ground truth.
pub fn synth_scan_set(
    cfg: &SynthConfig,
    n_scans: usize,
) -> CoreResult<(Vec<ResponseDataset>, GroundTruth)> {
    cfg.validate()?;
    if n_scans == 0 {
        return Err(CoreError::Config("synth: need >= 1 scan".into()));
    }
    let root = Rng::new(cfg.seed);
    let stimuli = render_stimulus_set(cfg.stimuli, cfg.image_size, &mut root.derive(10));
    let tuning = Tuning::new(cfg, &mut root.derive(20));
    let clean = tuning.clean_responses(&stimuli, None);

    // Noise std per neuron, relative to the oracle-subset signal strength.
    let oracle_ids: Vec<usize> = (0..cfg.oracle).collect();
    let sigma_true: Vec<f32> = (0..cfg.neurons)
        .map(|a| {
            let vals: Vec<f64> = oracle_ids
                .iter()
                .map(|&i| clean.data()[a * cfg.stimuli + i] as f64)
                .collect();
            let m = vals.iter().sum::<f64>() / vals.len().max(1) as f64;
            (vals.iter().map(|v| (v - m) * (v - m)).sum::<f64>() / vals.len().max(1) as f64).sqrt()
                as f32
        })
        .collect();
    let mut rel_rng = root.derive(30);
    let eta_true: Vec<f32> = sigma_true
        .iter()
        .map(|&s| rel_rng.range(cfg.noise_rel_range[0], cfg.noise_rel_range[1]) * s.max(1e-3))
        .collect();

    let trial_counts: Vec<usize> =
        (0..cfg.stimuli).map(|i| if i < cfg.oracle { cfg.repeats } else { 1 }).collect();
    let oracle_flags: Vec<bool> = trial_counts.iter().map(|&t| t >= 2).collect();

    let mut scans = Vec::with_capacity(n_scans);
    for h in 0..n_scans {
        let scan_clean = if cfg.scan_jitter > 0.0 {
            let mut jrng = root.derive(40 + h as u64);
            tuning.clean_responses(&stimuli, Some((&mut jrng, cfg.scan_jitter)))
        } else {
            clean.clone()
        };
        let mut noise_rng = root.derive(1000 + h as u64);
        let mut responses = Vec::with_capacity(cfg.stimuli);
        for i in 0..cfg.stimuli {
            let t = trial_counts[i];
            let mut flat = Vec::with_capacity(t * cfg.neurons);
            for _ in 0..t {
                for a in 0..cfg.neurons {
                    let c = scan_clean.data()[a * cfg.stimuli + i];
                    flat.push(c + eta_true[a] * noise_rng.normal());
                }
            }
            responses.push(flat);
        }
        scans.push(ResponseDataset::new(
            format!("{h}"),
            stimuli.clone(),
            responses,
            trial_counts.clone(),
            oracle_flags.clone(),
            cfg.neurons,
        )?);
    }

    Ok((scans, GroundTruth { sigma: sigma_true, eta: eta_true, clean }))
}

/// Single-scan convenience wrapper.
pub fn synth_scan(cfg: &SynthConfig) -> CoreResult<(ResponseDataset, GroundTruth)> {
    let (mut scans, gt) = synth_scan_set(cfg, 1)?;
    Ok((scans.remove(0), gt))
}

// ---- classification task ---------------------------------------------------

/// Oriented-grating images; label = orientation bin. Classes are balanced
/// exactly (sample i gets label i mod classes).
pub fn synth_classification(
    classes: usize,
    per_class: usize,
    size: usize,
    seed: u64,
) -> CoreResult<(Tensor, Vec<usize>)> {
    if classes < 2 {
        return Err(CoreError::Config("synth_classification needs >= 2 classes".into()));
    }
    if per_class == 0 || size < 4 {
        return Err(CoreError::Config("synth_classification: per_class >= 1, size >= 4".into()));
    }
    let n = classes * per_class;
    let root = Rng::new(seed);
    let mut data = Vec::with_capacity(n * size * size);
    let mut labels = Vec::with_capacity(n);
    let bin = std::f32::consts::PI / classes as f32;
    for i in 0..n {
        let label = i % classes;
        let mut rng = root.derive(i as u64);
        let theta = label as f32 * bin + bin * rng.range(0.2, 0.8);
        let cycles = rng.range(1.8, 3.2);
        let phase = rng.range(0.0, 2.0 * std::f32::consts::PI);
        let contrast = rng.range(0.5, 1.0);
        let env = rng.range(0.3, 0.55) * size as f32;
        let img = render_grating(size, theta, cycles, phase, contrast, env, 0.04, &mut rng);
        data.extend_from_slice(&img);
        labels.push(label);
    }
    Ok((Tensor::new(vec![n, size, size], data)?, labels))
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ClassSynthConfig {
    pub classes: usize,
    pub per_class_train: usize,
    pub per_class_test: usize,
    pub image_size: usize,
    pub seed: u64,
}

impl Default for ClassSynthConfig {
    fn default() -> Self {
        ClassSynthConfig {
            classes: 3,
            per_class_train: 120,
            per_class_test: 70,
            image_size: 16,
            seed: 0,
        }
    }
}

/// Train/test dataset with disjoint generator streams.
pub fn synth_class_dataset(cfg: &ClassSynthConfig) -> CoreResult<ClassDataset> {
    let (train_images, train_labels) = synth_classification(
        cfg.classes,
        cfg.per_class_train,
        cfg.image_size,
        Rng::new(cfg.seed).derive(1).next_u64(),
    )?;
    let (test_images, test_labels) = synth_classification(
        cfg.classes,
        cfg.per_class_test,
        cfg.image_size,
        Rng::new(cfg.seed).derive(2).next_u64(),
    )?;
    let ds = ClassDataset {
        classes: cfg.classes,
        train_images,
        train_labels,
        test_images,
        test_labels,
    };
    ds.validate()?;
    Ok(ds)
}
