//! The similarity-matching penalty: per-layer centered cosine similarity,
//! softmax-weighted layer combination, arctanh-squared loss against the
//! neural target, and the shuffle/random control targets.

use serde::{Deserialize, Serialize};

use crate::error::{CoreError, CoreResult};
use crate::rng::Rng;
use crate::similarity::{SimilarityKind, SimilarityMatrix, DEGENERATE_NORM_EPS};
use crate::tensor::{NodeId, Tape};

/// Trainable layer-combination weights, parameterized as softmax logits so
/// the probabilities always sit on the simplex.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct GammaWeights {
    logits: Vec<f32>,
}

impl GammaWeights {
    pub fn uniform(k: usize) -> CoreResult<Self> {
        if k == 0 {
            return Err(CoreError::Config("gamma weights need K >= 1 layers".into()));
        }
        Ok(GammaWeights { logits: vec![0.0; k] })
    }

    pub fn from_logits(logits: Vec<f32>) -> CoreResult<Self> {
        if logits.is_empty() {
            return Err(CoreError::Config("gamma weights need K >= 1 layers".into()));
        }
        if logits.iter().any(|v| !v.is_finite()) {
            return Err(CoreError::NonFinite("gamma logits must be finite".into()));
        }
        Ok(GammaWeights { logits })
    }

    pub fn k(&self) -> usize {
        self.logits.len()
    }

    pub fn logits(&self) -> &[f32] {
        &self.logits
    }

    /// Softmax of the logits: non-negative, sums to one.
    pub fn probabilities(&self) -> Vec<f32> {
        let m = self.logits.iter().cloned().fold(f32::NEG_INFINITY, f32::max);
        let mut p: Vec<f32> = self.logits.iter().map(|&v| (v - m).exp()).collect();
        let z: f32 = p.iter().sum();
        for v in &mut p {
            *v /= z;
        }
        p
    }
}

/// Regularization target flavor.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum TargetKind {
    /// Scan-averaged model similarity (the real target).
    Neural,
    /// Joint row/column permutation of the neural target.
    Shuffle,
    /// Entrywise permutation of the off-diagonal entries.
    ShuffleEntrywise,
    /// I.i.d. draws from the empirical off-diagonal distribution.
    Random,
    /// Single-trial data similarity instead of the model similarity.
    Data,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RegularizerConfig {
    /// Regularization strength alpha in L = L_task + alpha * L_similarity.
    pub alpha: f32,
    /// Tap layer indices inside the classifier (K of them).
    pub tap_layers: Vec<usize>,
    /// Clamp epsilon keeping arctanh off its singularities.
    pub clamp_eps: f32,
    pub target_kind: TargetKind,
}

impl RegularizerConfig {
    pub fn validate(&self) -> CoreResult<()> {
        if !(self.alpha >= 0.0) || !self.alpha.is_finite() {
            return Err(CoreError::Config(format!("alpha {} must be finite and >= 0", self.alpha)));
        }
        if self.tap_layers.is_empty() {
            return Err(CoreError::Config("regularizer needs >= 1 tap layer".into()));
        }
        if !(self.clamp_eps > 0.0 && self.clamp_eps < 0.1) {
            return Err(CoreError::Config(format!(
                "clamp_eps {} must lie in (0, 0.1)",
                self.clamp_eps
            )));
        }
        Ok(())
    }
}

impl Default for RegularizerConfig {
    fn default() -> Self {
        RegularizerConfig {
            alpha: 20.0,
            tap_layers: vec![],
            clamp_eps: 1e-6,
            target_kind: TargetKind::Neural,
        }
    }
}

/// Loss bookkeeping for one step or epoch; total = task + alpha * similarity.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub task: f64,
    pub similarity: f64,
    pub total: f64,
    pub gamma: Vec<f32>,
}

/// Combines task and (batch-mean) similarity losses per the additive rule.
pub fn total_loss(task: f64, similarity: f64, alpha: f32, gamma: &GammaWeights) -> LossBreakdown {
    LossBreakdown {
        task,
        similarity,
        total: task + alpha as f64 * similarity,
        gamma: gamma.probabilities(),
    }
}

/// Centered cosine similarity per tap layer; `None` flags a degenerate
/// pair (a zero-norm centered feature) that must be excluded from loss.
pub fn layer_similarity(
    taps_i: &[Vec<f32>],
    taps_j: &[Vec<f32>],
    batch_means: &[Vec<f32>],
) -> CoreResult<Vec<Option<f32>>> {
    if taps_i.len() != taps_j.len() || taps_i.len() != batch_means.len() {
        return Err(CoreError::Shape(format!(
            "layer_similarity: {} / {} / {} layers",
            taps_i.len(),
            taps_j.len(),
            batch_means.len()
        )));
    }
    let mut out = Vec::with_capacity(taps_i.len());
    for ((fi, fj), mean) in taps_i.iter().zip(taps_j.iter()).zip(batch_means.iter()) {
        if fi.len() != fj.len() || fi.len() != mean.len() {
            return Err(CoreError::Shape("layer_similarity: feature sizes differ".into()));
        }
        let (mut dot, mut ni, mut nj) = (0.0f64, 0.0f64, 0.0f64);
        for ((&a, &b), &m) in fi.iter().zip(fj.iter()).zip(mean.iter()) {
            let ca = (a - m) as f64;
            let cb = (b - m) as f64;
            dot += ca * cb;
            ni += ca * ca;
            nj += cb * cb;
        }
        let eps2 = (DEGENERATE_NORM_EPS as f64) * (DEGENERATE_NORM_EPS as f64);
        if ni < eps2 || nj < eps2 {
            out.push(None);
        } else {
            out.push(Some(((dot / (ni * nj).sqrt()) as f32).clamp(-1.0, 1.0)));
        }
    }
    Ok(out)
}

/// Softmax-weighted combination over layers; lies between the extreme
/// per-layer values.
pub fn combined_similarity(per_layer: &[f32], gamma: &GammaWeights) -> CoreResult<f32> {
    if per_layer.len() != gamma.k() {
        return Err(CoreError::Shape(format!(
            "combined_similarity: {} values for K={}",
            per_layer.len(),
            gamma.k()
        )));
    }
    let p = gamma.probabilities();
    Ok(per_layer.iter().zip(p.iter()).map(|(&s, &g)| s * g).sum())
}

/// Squared arctanh difference after clamping both similarities into
/// [-1+eps, 1-eps].
pub fn similarity_loss(s_cnn: f32, s_neural: f32, eps: f32) -> CoreResult<f32> {
    if !s_cnn.is_finite() || !s_neural.is_finite() {
        return Err(CoreError::NonFinite(format!(
            "similarity_loss inputs ({s_cnn}, {s_neural}) must be finite"
        )));
    }
    let lim = 1.0 - eps;
    let a = s_cnn.clamp(-lim, lim).atanh();
    let b = s_neural.clamp(-lim, lim).atanh();
    Ok((a - b) * (a - b))
}

/// Applies a stored permutation jointly to rows and columns.
pub fn shuffle_target_with(s: &SimilarityMatrix, perm: &[usize]) -> CoreResult<SimilarityMatrix> {
    let n = s.n();
    if perm.len() != n {
        return Err(CoreError::Shape(format!("permutation of {} for {n} stimuli", perm.len())));
    }
    let mut values = vec![0.0f32; n * n];
    for i in 0..n {
        for j in 0..n {
            values[i * n + j] = s.get(perm[i], perm[j]);
        }
    }
    SimilarityMatrix::from_values(SimilarityKind::Shuffle, s.stimuli.clone(), values)
}

/// Builds a control target from the neural matrix: `Shuffle` permutes
/// stimulus indices jointly, `ShuffleEntrywise` permutes off-diagonal
/// entries, `Random` draws off-diagonal entries i.i.d. from the empirical
/// distribution (unit diagonal).
pub fn make_control_target(
    s: &SimilarityMatrix,
    kind: TargetKind,
    seed: u64,
) -> CoreResult<SimilarityMatrix> {
    let n = s.n();
    let mut rng = Rng::new(seed);
    match kind {
        TargetKind::Shuffle => {
            let perm = rng.permutation(n);
            shuffle_target_with(s, &perm)
        }
        TargetKind::ShuffleEntrywise => {
            let mut upper = s.upper_triangle();
            rng.shuffle(&mut upper);
            let mut out = SimilarityMatrix::from_values(
                SimilarityKind::Shuffle,
                s.stimuli.clone(),
                vec![0.0; n * n],
            )?;
            let mut k = 0;
            for i in 0..n {
                out.set_sym(i, i, s.get(i, i));
                for j in i + 1..n {
                    out.set_sym(i, j, upper[k]);
                    k += 1;
                }
            }
            Ok(out)
        }
        TargetKind::Random => {
            let pool = s.upper_triangle();
            if pool.is_empty() {
                return Err(CoreError::Data("random target needs n >= 2".into()));
            }
            let mut out = SimilarityMatrix::from_values(
                SimilarityKind::Random,
                s.stimuli.clone(),
                vec![0.0; n * n],
            )?;
            for i in 0..n {
                out.set_sym(i, i, 1.0);
                for j in i + 1..n {
                    out.set_sym(i, j, pool[rng.below(pool.len())]);
                }
            }
            Ok(out)
        }
        TargetKind::Neural | TargetKind::Data => Err(CoreError::Config(
            "make_control_target expects a control kind (shuffle/random)".into(),
        )),
    }
}

/// Differentiable pair-batch similarity loss recorded on the tape.
pub struct PairBatchLoss {
    /// Scalar loss node: mean squared arctanh mismatch over valid pairs.
    pub loss: NodeId,
    pub valid_pairs: usize,
    pub degenerate_pairs: usize,
}

/// Records the pair loss for a batch: per-layer centered cosine
/// similarities from tap features, softmax(gamma) combination, clamp +
/// arctanh, squared difference against the target, mean over valid pairs.
///
/// `taps_left[k]` / `taps_right[k]` are [B, D_k] feature nodes from two
/// forward passes sharing parameters; the feature mean is estimated from
/// the 2B vectors of the batch and gradients flow through it.
pub fn pair_similarity_loss(
    tape: &mut Tape,
    taps_left: &[NodeId],
    taps_right: &[NodeId],
    gamma_logits: NodeId,
    targets: &[f32],
    clamp_eps: f32,
) -> CoreResult<PairBatchLoss> {
    let k = taps_left.len();
    if k == 0 || k != taps_right.len() {
        return Err(CoreError::Shape(format!(
            "pair_similarity_loss: {k} left / {} right tap layers",
            taps_right.len()
        )));
    }
    let b = tape.shape(taps_left[0])[0];
    if targets.len() != b {
        return Err(CoreError::Shape(format!("{} targets for batch of {b} pairs", targets.len())));
    }
    if targets.iter().any(|v| !v.is_finite()) {
        return Err(CoreError::NonFinite("pair targets must be finite".into()));
    }

    let eps2 = DEGENERATE_NORM_EPS * DEGENERATE_NORM_EPS;
    let norm2_floor = 1e-12f32;
    let gamma = tape.softmax_vec(gamma_logits)?;

    let mut mask = vec![1.0f32; b];
    let mut s_cnn: Option<NodeId> = None;
    for layer in 0..k {
        let (l, r) = (taps_left[layer], taps_right[layer]);
        if tape.shape(l) != tape.shape(r) || tape.shape(l)[0] != b {
            return Err(CoreError::Shape(format!(
                "pair_similarity_loss: tap {layer} shapes {:?} vs {:?}",
                tape.shape(l),
                tape.shape(r)
            )));
        }
        let cat = tape.concat_rows(l, r)?;
        let mean = tape.mean_rows(cat)?;
        let cl = tape.sub_row(l, mean)?;
        let cr = tape.sub_row(r, mean)?;
        let dots = tape.row_dot(cl, cr)?;
        let nl2 = tape.row_dot(cl, cl)?;
        let nr2 = tape.row_dot(cr, cr)?;

        for i in 0..b {
            if tape.value(nl2)[i] < eps2 || tape.value(nr2)[i] < eps2 {
                mask[i] = 0.0;
            }
        }

        let prod = tape.mul(nl2, nr2)?;
        let prod_floor = tape.max_const(prod, norm2_floor);
        let denom = tape.sqrt(prod_floor);
        let s_k = tape.div(dots, denom)?;

        let g_k = tape.index_scalar(gamma, layer)?;
        let weighted = tape.mul_scalar(s_k, g_k)?;
        s_cnn = Some(match s_cnn {
            None => weighted,
            Some(acc) => tape.add(acc, weighted)?,
        });
    }
    let s_cnn = s_cnn.expect("K >= 1");

    let lim = 1.0 - clamp_eps;
    let clamped = tape.clamp(s_cnn, -lim, lim)?;
    let atanh_cnn = tape.arctanh(clamped);

    let target_atanh: Vec<f32> = targets.iter().map(|&t| t.clamp(-lim, lim).atanh()).collect();
    let t_id = tape.input(&crate::tensor::Tensor::new(vec![b], target_atanh)?);
    let diff = tape.sub(atanh_cnn, t_id)?;
    let sq = tape.mul(diff, diff)?;

    let valid = mask.iter().filter(|&&m| m > 0.0).count();
    let mask_id = tape.input(&crate::tensor::Tensor::new(vec![b], mask)?);
    let masked = tape.mul(sq, mask_id)?;
    let total = tape.sum_all(masked);
    let loss = if valid > 0 {
        tape.scale(total, 1.0 / valid as f32)
    } else {
        tape.scale(total, 0.0)
    };
    Ok(PairBatchLoss { loss, valid_pairs: valid, degenerate_pairs: b - valid })
}

/// L_total node = task + alpha * similarity.
pub fn combine_losses(
    tape: &mut Tape,
    task_loss: NodeId,
    sim_loss: NodeId,
    alpha: f32,
) -> CoreResult<NodeId> {
    let scaled = tape.scale(sim_loss, alpha);
    tape.add(task_loss, scaled)
}
