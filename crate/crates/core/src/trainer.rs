//! Joint training: each step processes one classification batch and one
//! batch of stimulus pairs through the same convolutional core, combines
//! cross-entropy with the similarity penalty, and applies a single SGD
//! update to all parameters including the gamma logits.

use serde::{Deserialize, Serialize};

use crate::error::{CoreError, CoreResult};
use crate::io::ClassDataset;
use crate::parallel::parallel_map;
use crate::regularizer::{
    combine_losses, pair_similarity_loss, total_loss, GammaWeights, LossBreakdown, TargetKind,
};
use crate::rng::Rng;
use crate::similarity::SimilarityMatrix;
use crate::tensor::optim::{lr_schedule, sgd_step};
use crate::tensor::{gather_images, Layer, LayerOp, NetworkGraph, Tape, Tensor};

pub const GAMMA_PARAM: &str = "gamma.logits";

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub base_lr: f32,
    pub momentum: f32,
    pub seed: u64,
    pub alpha: f32,
    pub target_kind: TargetKind,
    pub clamp_eps: f32,
    /// Residual block widths of the classifier.
    pub widths: Vec<usize>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 20,
            batch_size: 32,
            base_lr: 0.02,
            momentum: 0.9,
            seed: 0,
            alpha: 20.0,
            target_kind: TargetKind::Neural,
            clamp_eps: 1e-6,
            widths: vec![16, 32, 64],
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> CoreResult<()> {
        if self.epochs == 0 {
            return Err(CoreError::Config("epochs must be >= 1".into()));
        }
        if self.batch_size < 2 {
            return Err(CoreError::Config("batch size must be >= 2".into()));
        }
        if !(self.alpha >= 0.0) || !self.alpha.is_finite() {
            return Err(CoreError::Config(format!("alpha {} invalid", self.alpha)));
        }
        if !(self.clamp_eps > 0.0 && self.clamp_eps < 0.1) {
            return Err(CoreError::Config(format!("clamp_eps {} invalid", self.clamp_eps)));
        }
        if self.widths.is_empty() {
            return Err(CoreError::Config("classifier needs >= 1 block width".into()));
        }
        Ok(())
    }
}

/// Small residual classifier: conv stem plus one residual block per width
/// (stride 2 between stages), affine channel scaling in place of batch
/// norm, taps at the stem and at every block output.
pub fn residual_classifier(
    input: [usize; 3],
    widths: &[usize],
    classes: usize,
    rng: &mut Rng,
) -> CoreResult<NetworkGraph> {
    let mut layers: Vec<Layer> = Vec::new();
    let mut taps: Vec<usize> = Vec::new();
    let mut zero_scale_layers: Vec<usize> = Vec::new();
    let mut prev_node = 0usize; // network input

    let node_of = |layer_idx: usize| layer_idx + 1;

    // Stem.
    layers.push(Layer { op: LayerOp::Conv2d { out_channels: widths[0], kernel: 3, stride: 1, pad: 1 }, input: prev_node });
    layers.push(Layer { op: LayerOp::ChannelAffine, input: node_of(layers.len() - 1) });
    layers.push(Layer { op: LayerOp::Relu, input: node_of(layers.len() - 1) });
    taps.push(layers.len() - 1);
    prev_node = node_of(layers.len() - 1);
    let mut prev_ch = widths[0];

    for (stage, &w) in widths.iter().enumerate() {
        let stride = if stage == 0 { 1 } else { 2 };
        let block_in = prev_node;

        layers.push(Layer { op: LayerOp::Conv2d { out_channels: w, kernel: 3, stride, pad: 1 }, input: block_in });
        layers.push(Layer { op: LayerOp::ChannelAffine, input: node_of(layers.len() - 1) });
        layers.push(Layer { op: LayerOp::Relu, input: node_of(layers.len() - 1) });
        layers.push(Layer { op: LayerOp::Conv2d { out_channels: w, kernel: 3, stride: 1, pad: 1 }, input: node_of(layers.len() - 1) });
        layers.push(Layer { op: LayerOp::ChannelAffine, input: node_of(layers.len() - 1) });
        // Zero-initialized below so every block starts as the identity;
        // residual depth then cannot compound activation magnitudes.
        zero_scale_layers.push(layers.len() - 1);
        let main_out = node_of(layers.len() - 1);

        let skip_node = if stride == 1 && w == prev_ch {
            block_in
        } else {
            layers.push(Layer { op: LayerOp::Conv2d { out_channels: w, kernel: 1, stride, pad: 0 }, input: block_in });
            node_of(layers.len() - 1)
        };
        layers.push(Layer { op: LayerOp::ResidualAdd { other: skip_node }, input: main_out });
        layers.push(Layer { op: LayerOp::Relu, input: node_of(layers.len() - 1) });
        taps.push(layers.len() - 1);
        prev_node = node_of(layers.len() - 1);
        prev_ch = w;
    }

    layers.push(Layer { op: LayerOp::GlobalAvgPool, input: prev_node });
    layers.push(Layer { op: LayerOp::Linear { out_features: classes }, input: node_of(layers.len() - 1) });

    let mut net = NetworkGraph::new(input, layers, taps, rng)?;
    for i in zero_scale_layers {
        let name = format!("layer{i:02}.scale");
        let shape = net.params().get(&name).expect("affine scale").shape().to_vec();
        net.params_mut().set(&name, Tensor::zeros(&shape))?;
    }
    Ok(net)
}

/// Bilinear resize with letterboxing (gray padding) to the target shape;
/// identity when shapes already match.
pub fn resize_images(images: &Tensor, out_h: usize, out_w: usize) -> CoreResult<Tensor> {
    let s = images.shape();
    if s.len() != 3 {
        return Err(CoreError::Shape(format!("resize_images expects [n,h,w], got {s:?}")));
    }
    let (n, h, w) = (s[0], s[1], s[2]);
    if h == out_h && w == out_w {
        return Ok(images.clone());
    }
    let scale = (out_h as f32 / h as f32).min(out_w as f32 / w as f32);
    let rh = ((h as f32 * scale).round() as usize).clamp(1, out_h);
    let rw = ((w as f32 * scale).round() as usize).clamp(1, out_w);
    let off_y = (out_h - rh) / 2;
    let off_x = (out_w - rw) / 2;
    let mut out = vec![0.5f32; n * out_h * out_w];
    for i in 0..n {
        let src = &images.data()[i * h * w..(i + 1) * h * w];
        let dst = &mut out[i * out_h * out_w..(i + 1) * out_h * out_w];
        for y in 0..rh {
            // Map destination pixel centers back into source coordinates.
            let sy = ((y as f32 + 0.5) * h as f32 / rh as f32 - 0.5).clamp(0.0, h as f32 - 1.0);
            let y0 = sy.floor() as usize;
            let y1 = (y0 + 1).min(h - 1);
            let fy = sy - y0 as f32;
            for x in 0..rw {
                let sx = ((x as f32 + 0.5) * w as f32 / rw as f32 - 0.5).clamp(0.0, w as f32 - 1.0);
                let x0 = sx.floor() as usize;
                let x1 = (x0 + 1).min(w - 1);
                let fx = sx - x0 as f32;
                let v = src[y0 * w + x0] * (1.0 - fy) * (1.0 - fx)
                    + src[y0 * w + x1] * (1.0 - fy) * fx
                    + src[y1 * w + x0] * fy * (1.0 - fx)
                    + src[y1 * w + x1] * fy * fx;
                dst[(y + off_y) * out_w + (x + off_x)] = v;
            }
        }
    }
    Tensor::new(vec![n, out_h, out_w], out)
}

/// Fraction of rows whose argmax logit matches the label.
pub fn evaluate_accuracy(net: &NetworkGraph, images: &Tensor, labels: &[usize]) -> CoreResult<f64> {
    let n = images.shape()[0];
    if labels.len() != n {
        return Err(CoreError::Shape(format!("{} labels for {n} images", labels.len())));
    }
    let classes = net.output_features();
    let ids: Vec<usize> = (0..n).collect();
    let mut correct = 0usize;
    for chunk in ids.chunks(64) {
        let batch = gather_images(images, chunk)?;
        let (logits, _) = net.infer(&batch)?;
        for (row, &i) in chunk.iter().enumerate() {
            let r = &logits.data()[row * classes..(row + 1) * classes];
            let pred = argmax(r);
            if pred == labels[i] {
                correct += 1;
            }
        }
    }
    Ok(correct as f64 / n as f64)
}

pub fn argmax(xs: &[f32]) -> usize {
    let mut best = 0;
    for (i, &v) in xs.iter().enumerate() {
        if v > xs[best] {
            best = i;
        }
    }
    best
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub lr: f32,
    pub loss: LossBreakdown,
    /// Held-out (test split) classification accuracy.
    pub accuracy: f64,
    /// Informational only; excluded from serialized reports so identical
    /// seeds produce identical artifacts.
    #[serde(skip)]
    pub wall_clock_s: f64,
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct TrainLog {
    pub entries: Vec<EpochRecord>,
}

impl TrainLog {
    pub fn final_accuracy(&self) -> f64 {
        self.entries.last().map(|e| e.accuracy).unwrap_or(0.0)
    }

    pub fn final_gamma(&self) -> Vec<f32> {
        self.entries.last().map(|e| e.loss.gamma.clone()).unwrap_or_default()
    }

    pub fn csv_header(k: usize) -> Vec<String> {
        let mut h = vec![
            "epoch".to_string(),
            "lr".to_string(),
            "loss_task".to_string(),
            "loss_similarity".to_string(),
            "loss_total".to_string(),
            "accuracy".to_string(),
        ];
        for i in 0..k {
            h.push(format!("gamma_{i}"));
        }
        h
    }

    pub fn csv_rows(&self) -> Vec<Vec<String>> {
        self.entries
            .iter()
            .map(|e| {
                let mut row = vec![
                    e.epoch.to_string(),
                    format!("{}", e.lr),
                    format!("{}", e.loss.task),
                    format!("{}", e.loss.similarity),
                    format!("{}", e.loss.total),
                    format!("{}", e.accuracy),
                ];
                for g in &e.loss.gamma {
                    row.push(format!("{g}"));
                }
                row
            })
            .collect()
    }
}

pub struct TrainOutcome {
    pub net: NetworkGraph,
    pub log: TrainLog,
}

/// Trains the classifier jointly with the similarity penalty.
///
/// `stimuli` ([n,h,w], resized here to the classifier input) and `target`
/// must come together; with `target = None` the run is classification
/// only and the RNG streams are laid out so an `alpha = 0` run with a
/// target produces the identical parameter trajectory.
pub fn joint_train(
    cfg: &TrainConfig,
    class_ds: &ClassDataset,
    stimuli: Option<&Tensor>,
    target: Option<&SimilarityMatrix>,
) -> CoreResult<TrainOutcome> {
    cfg.validate()?;
    class_ds.validate()?;
    let (h, w) = class_ds.image_size();
    let n_train = class_ds.train_images.shape()[0];
    if n_train < cfg.batch_size {
        return Err(CoreError::Config(format!(
            "batch size {} exceeds training set size {n_train}",
            cfg.batch_size
        )));
    }

    let (pair_images, pair_target) = match (stimuli, target) {
        (Some(s), Some(t)) => {
            if t.n() < 2 {
                return Err(CoreError::Data("similarity target needs >= 2 stimuli".into()));
            }
            if let Some(&max_id) = t.stimuli.iter().max() {
                if max_id >= s.shape()[0] {
                    return Err(CoreError::Data(format!(
                        "target references stimulus {max_id}, only {} available",
                        s.shape()[0]
                    )));
                }
            }
            (Some(resize_images(s, h, w)?), Some(t))
        }
        (None, None) => (None, None),
        _ => {
            return Err(CoreError::Config(
                "joint_train needs stimuli and target together (or neither)".into(),
            ))
        }
    };

    let root = Rng::new(cfg.seed);
    let mut init_rng = root.derive(1);
    let mut class_rng = root.derive(2);
    let mut pair_rng = root.derive(3);

    let mut net = residual_classifier([1, h, w], &cfg.widths, class_ds.classes, &mut init_rng)?;
    let k = net.tap_count();
    net.params_mut().insert(GAMMA_PARAM, Tensor::zeros(&[k]))?;

    let pairs_per_step = cfg.batch_size / 2;
    let mut log = TrainLog::default();
    let mut order: Vec<usize> = (0..n_train).collect();
    let started = std::time::Instant::now();

    for epoch in 0..cfg.epochs {
        let lr = lr_schedule(epoch, cfg.base_lr);
        class_rng.shuffle(&mut order);
        let mut task_sum = 0.0f64;
        let mut sim_sum = 0.0f64;
        let mut steps = 0usize;

        for chunk in order.chunks_exact(cfg.batch_size) {
            let batch = gather_images(&class_ds.train_images, chunk)?;
            let targets: Vec<usize> = chunk.iter().map(|&i| class_ds.train_labels[i]).collect();

            let mut tape = Tape::new();
            let input_id = tape.input(&batch);
            let binds = net.bind(&mut tape);
            let pass = net.forward_on(&mut tape, &binds, input_id)?;
            let ce = tape.softmax_cross_entropy(pass.output, &targets)?;

            let (loss_node, sim_value) = match (&pair_images, pair_target) {
                (Some(imgs), Some(t)) => {
                    let mut left = Vec::with_capacity(pairs_per_step);
                    let mut right = Vec::with_capacity(pairs_per_step);
                    let mut tvals = Vec::with_capacity(pairs_per_step);
                    let m = t.n();
                    for _ in 0..pairs_per_step {
                        let i = pair_rng.below(m);
                        let mut j = pair_rng.below(m - 1);
                        if j >= i {
                            j += 1;
                        }
                        left.push(t.stimuli[i]);
                        right.push(t.stimuli[j]);
                        tvals.push(t.get(i, j));
                    }
                    let lb = gather_images(imgs, &left)?;
                    let rb = gather_images(imgs, &right)?;
                    let l_in = tape.input(&lb);
                    let r_in = tape.input(&rb);
                    let l_pass = net.forward_on(&mut tape, &binds, l_in)?;
                    let r_pass = net.forward_on(&mut tape, &binds, r_in)?;
                    let gamma_id = binds.node(GAMMA_PARAM).expect("gamma bound");
                    let pair = pair_similarity_loss(
                        &mut tape,
                        &l_pass.taps,
                        &r_pass.taps,
                        gamma_id,
                        &tvals,
                        cfg.clamp_eps,
                    )?;
                    let sim_value = tape.scalar_value(pair.loss) as f64;
                    let combined = combine_losses(&mut tape, ce, pair.loss, cfg.alpha)?;
                    (combined, sim_value)
                }
                _ => (ce, 0.0),
            };

            let task_value = tape.scalar_value(ce) as f64;
            let total_value = tape.scalar_value(loss_node) as f64;
            if !total_value.is_finite() {
                return Err(CoreError::NonFinite(format!(
                    "training loss diverged at epoch {epoch} step {steps} \
                     (task {task_value}, similarity {sim_value})"
                )));
            }

            tape.backward(loss_node)?;
            let grads = tape.param_grads();
            sgd_step(net.params_mut(), &grads, lr, cfg.momentum).map_err(|e| {
                CoreError::NonFinite(format!("epoch {epoch} step {steps}: {e}"))
            })?;

            task_sum += task_value;
            sim_sum += sim_value;
            steps += 1;
        }

        let gamma = GammaWeights::from_logits(
            net.params().get(GAMMA_PARAM).expect("gamma param").data().to_vec(),
        )?;
        let accuracy =
            evaluate_accuracy(&net, &class_ds.test_images, &class_ds.test_labels)?;
        let denom = steps.max(1) as f64;
        log.entries.push(EpochRecord {
            epoch,
            lr,
            loss: total_loss(task_sum / denom, sim_sum / denom, cfg.alpha, &gamma),
            accuracy,
            wall_clock_s: started.elapsed().as_secs_f64(),
        });
    }

    Ok(TrainOutcome { net, log })
}

/// One (label, config, target) job of a suite.
pub struct TrainJob {
    pub label: String,
    pub config: TrainConfig,
    pub target: Option<SimilarityMatrix>,
}

pub struct SuiteRun {
    pub label: String,
    pub seed: u64,
    pub outcome: CoreResult<TrainOutcome>,
}

pub struct SuiteResult {
    pub runs: Vec<SuiteRun>,
}

impl SuiteResult {
    /// Successful outcomes for one label.
    pub fn outcomes(&self, label: &str) -> Vec<&TrainOutcome> {
        self.runs
            .iter()
            .filter(|r| r.label == label)
            .filter_map(|r| r.outcome.as_ref().ok())
            .collect()
    }

    /// Mean and standard error of the final test accuracy for one label.
    pub fn accuracy_mean_sem(&self, label: &str) -> Option<(f64, f64)> {
        let accs: Vec<f64> =
            self.outcomes(label).iter().map(|o| o.log.final_accuracy()).collect();
        mean_sem(&accs)
    }
}

/// Sample mean and standard error (N-1 divisor).
pub fn mean_sem(xs: &[f64]) -> Option<(f64, f64)> {
    if xs.is_empty() {
        return None;
    }
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    if xs.len() == 1 {
        return Some((mean, 0.0));
    }
    let var = xs.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / (n - 1.0);
    Some((mean, (var / n).sqrt()))
}

/// Trains every (job, seed) combination, in parallel across runs; each
/// run is isolated with its own RNG streams. Failures are recorded and
/// the suite continues.
pub fn train_suite(
    jobs: &[TrainJob],
    seeds: &[u64],
    class_ds: &ClassDataset,
    stimuli: Option<&Tensor>,
    max_threads: usize,
) -> SuiteResult {
    let mut specs = Vec::new();
    for job in jobs {
        for &seed in seeds {
            specs.push((job, seed));
        }
    }
    let runs = parallel_map(specs.len(), max_threads, |i| {
        let (job, seed) = specs[i];
        let mut cfg = job.config.clone();
        cfg.seed = seed;
        // Jobs without a target train classification-only.
        let job_stimuli = if job.target.is_some() { stimuli } else { None };
        let outcome = joint_train(&cfg, class_ds, job_stimuli, job.target.as_ref());
        SuiteRun { label: job.label.clone(), seed, outcome }
    });
    SuiteResult { runs }
}
