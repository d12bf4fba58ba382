//! Robustness evaluation: accuracy under Gaussian input noise, minimal
//! L-inf perturbations via epsilon-bisection around PGD, and a
//! gradient-based L2 boundary attack. Attacks run lock-step over sample
//! batches; every per-sample random stream is derived from (seed, sample
//! index) so batching and threading never change results.

use serde::{Deserialize, Serialize};

use crate::error::{CoreError, CoreResult};
use crate::parallel::parallel_map;
use crate::rng::Rng;
use crate::tensor::{NetworkGraph, Tape, Tensor};
use crate::trainer::argmax;

// ---- model call helpers ----------------------------------------------------

fn logits_of(net: &NetworkGraph, xs: &Tensor) -> CoreResult<Tensor> {
    let s = xs.shape();
    let batch = xs.clone().reshaped(vec![s[0], 1, s[1], s[2]])?;
    let (logits, _) = net.infer(&batch)?;
    Ok(logits)
}

fn predictions_of(net: &NetworkGraph, xs: &Tensor) -> CoreResult<Vec<usize>> {
    let logits = logits_of(net, xs)?;
    let k = logits.shape()[1];
    Ok((0..logits.shape()[0]).map(|i| argmax(&logits.data()[i * k..(i + 1) * k])).collect())
}

/// Cross-entropy input gradients for a [n,h,w] stack; also returns logits.
fn ce_input_grads(net: &NetworkGraph, xs: &Tensor, ys: &[usize]) -> CoreResult<(Tensor, Vec<f32>)> {
    let s = xs.shape().to_vec();
    let mut tape = Tape::new();
    let batch = xs.clone().reshaped(vec![s[0], 1, s[1], s[2]])?;
    let input = tape.input(&batch);
    let binds = net.bind(&mut tape);
    let pass = net.forward_on(&mut tape, &binds, input)?;
    let loss = tape.softmax_cross_entropy(pass.output, ys)?;
    let logits = tape.value_tensor(pass.output);
    tape.backward(loss)?;
    let g = tape
        .grad(input)
        .map(|g| g.to_vec())
        .unwrap_or_else(|| vec![0.0; batch.numel()]);
    Ok((logits, g))
}

/// Input gradients of sum_i (z[i, adv_i] - z[i, y_i]); also returns the
/// per-sample difference values.
fn margin_input_grads(
    net: &NetworkGraph,
    xs: &Tensor,
    ys: &[usize],
    adv: &[usize],
) -> CoreResult<(Vec<f32>, Vec<f32>)> {
    let s = xs.shape().to_vec();
    let (n, k) = (s[0], net.output_features());
    let mut tape = Tape::new();
    let batch = xs.clone().reshaped(vec![s[0], 1, s[1], s[2]])?;
    let input = tape.input(&batch);
    let binds = net.bind(&mut tape);
    let pass = net.forward_on(&mut tape, &binds, input)?;
    // Select z_adv - z_y per row with a constant +-1 mask.
    let mut sel = vec![0.0f32; n * k];
    for i in 0..n {
        sel[i * k + adv[i]] += 1.0;
        sel[i * k + ys[i]] -= 1.0;
    }
    let sel_id = tape.input(&Tensor::new(vec![n, k], sel)?);
    let weighted = tape.mul(pass.output, sel_id)?;
    let total = tape.sum_all(weighted);

    let logits = tape.value(pass.output);
    let margins: Vec<f32> =
        (0..n).map(|i| logits[i * k + adv[i]] - logits[i * k + ys[i]]).collect();
    tape.backward(total)?;
    let g = tape
        .grad(input)
        .map(|g| g.to_vec())
        .unwrap_or_else(|| vec![0.0; batch.numel()]);
    Ok((g, margins))
}

pub fn linf_distance(a: &[f32], b: &[f32]) -> f64 {
    a.iter().zip(b.iter()).map(|(&x, &y)| (x - y).abs() as f64).fold(0.0, f64::max)
}

pub fn l2_distance(a: &[f32], b: &[f32]) -> f64 {
    a.iter()
        .zip(b.iter())
        .map(|(&x, &y)| {
            let d = (x - y) as f64;
            d * d
        })
        .sum::<f64>()
        .sqrt()
}

// ---- Gaussian noise curves ---------------------------------------------------

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct NoiseCurve {
    pub sigmas: Vec<f32>,
    /// Mean accuracy per level (over noise seeds).
    pub accuracy: Vec<f64>,
    pub sem: Vec<f64>,
    /// accuracy[level][seed]
    pub per_seed: Vec<Vec<f64>>,
}

/// Accuracy on x + N(0, sigma^2) clipped to [0,1], per noise level, with
/// SEM across the provided noise seeds.
pub fn noise_eval(
    net: &NetworkGraph,
    images: &Tensor,
    labels: &[usize],
    sigmas: &[f32],
    seeds: &[u64],
) -> CoreResult<NoiseCurve> {
    if sigmas.is_empty() || seeds.is_empty() {
        return Err(CoreError::Config("noise_eval needs >= 1 sigma and seed".into()));
    }
    if sigmas.windows(2).any(|w| w[0] >= w[1]) || sigmas[0] < 0.0 {
        return Err(CoreError::Config("sigmas must be non-negative and strictly increasing".into()));
    }
    let s = images.shape().to_vec();
    let n = s[0];
    if labels.len() != n {
        return Err(CoreError::Shape(format!("{} labels for {n} images", labels.len())));
    }

    let mut per_seed = Vec::with_capacity(sigmas.len());
    for (li, &sigma) in sigmas.iter().enumerate() {
        let mut accs = Vec::with_capacity(seeds.len());
        for &seed in seeds {
            let acc = if sigma == 0.0 {
                accuracy_against(net, images, labels)?
            } else {
                let mut rng = Rng::new(seed).derive(li as u64);
                let mut noisy = images.data().to_vec();
                for v in &mut noisy {
                    *v = (*v + sigma * rng.normal()).clamp(0.0, 1.0);
                }
                let noisy = Tensor::new(s.clone(), noisy)?;
                accuracy_against(net, &noisy, labels)?
            };
            accs.push(acc);
        }
        per_seed.push(accs);
    }
    let mut accuracy = Vec::new();
    let mut sem = Vec::new();
    for accs in &per_seed {
        let (m, e) = crate::trainer::mean_sem(accs).expect("non-empty");
        accuracy.push(m);
        sem.push(e);
    }
    Ok(NoiseCurve { sigmas: sigmas.to_vec(), accuracy, sem, per_seed })
}

fn accuracy_against(net: &NetworkGraph, images: &Tensor, labels: &[usize]) -> CoreResult<f64> {
    let n = images.shape()[0];
    let mut correct = 0usize;
    let ids: Vec<usize> = (0..n).collect();
    for chunk in ids.chunks(128) {
        let sub = gather_rows(images, chunk);
        let preds = predictions_of(net, &sub)?;
        for (p, &i) in preds.iter().zip(chunk) {
            if *p == labels[i] {
                correct += 1;
            }
        }
    }
    Ok(correct as f64 / n as f64)
}

fn gather_rows(images: &Tensor, ids: &[usize]) -> Tensor {
    let s = images.shape();
    let hw = s[1] * s[2];
    let mut data = Vec::with_capacity(ids.len() * hw);
    for &i in ids {
        data.extend_from_slice(&images.data()[i * hw..(i + 1) * hw]);
    }
    Tensor::new(vec![ids.len(), s[1], s[2]], data).expect("gather rows")
}

// ---- PGD --------------------------------------------------------------------

/// PGD hyperparameter grid searched per sample.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PgdGrid {
    pub step_sizes: Vec<f32>,
    pub iterations: Vec<usize>,
    pub repeats: usize,
}

impl PgdGrid {
    /// Full published grid.
    pub fn paper() -> Self {
        PgdGrid {
            step_sizes: vec![1e-6, 1e-5, 1e-4, 1e-3, 1e-2, 1e-1, 1.0],
            iterations: vec![10, 30, 50, 100, 200],
            repeats: 5,
        }
    }

    /// Trimmed grid for desk-scale evaluation.
    pub fn desk() -> Self {
        PgdGrid { step_sizes: vec![1e-2, 1e-1], iterations: vec![10, 40], repeats: 1 }
    }

    fn combos(&self) -> Vec<(f32, usize)> {
        let mut out = Vec::new();
        for &it in &self.iterations {
            for &st in &self.step_sizes {
                out.push((st, it));
            }
        }
        out
    }
}

/// Batched PGD at fixed per-sample epsilon. Returns, per sample, the
/// adversarial image if the label flipped. Signed-gradient ascent on the
/// cross-entropy, projected onto the L-inf ball and the [0,1] box.
#[allow(clippy::too_many_arguments)]
fn pgd_batch(
    net: &NetworkGraph,
    xs: &Tensor,
    ys: &[usize],
    eps: &[f32],
    step: f32,
    iters: usize,
    seed: u64,
    sample_salts: &[u64],
) -> CoreResult<Vec<Option<Vec<f32>>>> {
    let s = xs.shape().to_vec();
    let (n, hw) = (s[0], s[1] * s[2]);
    let mut found: Vec<Option<Vec<f32>>> = vec![None; n];
    let mut active: Vec<usize> = (0..n).collect();

    // Random start inside the ball.
    let mut delta = vec![0.0f32; n * hw];
    for i in 0..n {
        let mut rng = Rng::new(seed).derive(sample_salts[i]);
        if eps[i] > 0.0 {
            for v in &mut delta[i * hw..(i + 1) * hw] {
                *v = rng.range(-eps[i], eps[i]);
            }
        }
    }

    for iter in 0..=iters {
        if active.is_empty() {
            break;
        }
        // Assemble the active sub-batch of clipped adversarial candidates.
        let mut sub = Vec::with_capacity(active.len() * hw);
        for &i in &active {
            for j in 0..hw {
                sub.push((xs.data()[i * hw + j] + delta[i * hw + j]).clamp(0.0, 1.0));
            }
        }
        let sub = Tensor::new(vec![active.len(), s[1], s[2]], sub)?;
        let sub_ys: Vec<usize> = active.iter().map(|&i| ys[i]).collect();

        if iter == iters {
            // Final success check only.
            let preds = predictions_of(net, &sub)?;
            for (row, &i) in active.iter().enumerate() {
                if preds[row] != ys[i] {
                    found[i] = Some(sub.data()[row * hw..(row + 1) * hw].to_vec());
                }
            }
            break;
        }

        let (logits, grads) = ce_input_grads(net, &sub, &sub_ys)?;
        let k = logits.shape()[1];
        let mut still = Vec::with_capacity(active.len());
        for (row, &i) in active.iter().enumerate() {
            let pred = argmax(&logits.data()[row * k..(row + 1) * k]);
            if pred != ys[i] {
                found[i] = Some(sub.data()[row * hw..(row + 1) * hw].to_vec());
                continue;
            }
            let g = &grads[row * hw..(row + 1) * hw];
            if g.iter().any(|v| !v.is_finite()) {
                // Attack failure for this sample; leave as not found.
                continue;
            }
            if eps[i] > 0.0 {
                for j in 0..hw {
                    let d = &mut delta[i * hw + j];
                    *d += step * g[j].signum();
                    *d = d.clamp(-eps[i], eps[i]);
                    // Keep x + delta inside the box.
                    let x = xs.data()[i * hw + j];
                    *d = (x + *d).clamp(0.0, 1.0) - x;
                }
            }
            still.push(i);
        }
        active = still;
    }
    Ok(found)
}

/// Single-sample PGD at fixed epsilon (the batch path with one row).
/// Returns the adversarial image iff the label flipped.
pub fn pgd_attack(
    net: &NetworkGraph,
    x: &Tensor,
    y: usize,
    eps: f32,
    step: f32,
    iters: usize,
    seed: u64,
) -> CoreResult<Option<Tensor>> {
    if eps < 0.0 {
        return Err(CoreError::Config(format!("pgd epsilon {eps} must be >= 0")));
    }
    let s = x.shape();
    if s.len() != 2 {
        return Err(CoreError::Shape(format!("pgd_attack expects one [h,w] image, got {s:?}")));
    }
    let xs = x.clone().reshaped(vec![1, s[0], s[1]])?;
    let found = pgd_batch(net, &xs, &[y], &[eps], step, iters, seed, &[0])?;
    Ok(match found.into_iter().next().flatten() {
        Some(adv) => Some(Tensor::new(x.shape().to_vec(), adv)?),
        None => None,
    })
}

/// Dyadic bisection refinement of a monotone success threshold.
pub fn bisect<F: FnMut(f32) -> bool>(lo: f32, hi: f32, rounds: usize, mut success: F) -> (f32, f32) {
    let (mut lo, mut hi) = (lo, hi);
    for _ in 0..rounds {
        let mid = 0.5 * (lo + hi);
        if success(mid) {
            hi = mid;
        } else {
            lo = mid;
        }
    }
    (lo, hi)
}

pub const LINF_BRACKET_TOP: f32 = 0.5;
pub const LINF_BISECT_ROUNDS: usize = 12;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum NormKind {
    L2,
    LInf,
}

/// Outcome of a minimal-perturbation search for one sample.
#[derive(Debug, Clone)]
pub struct AttackResult {
    pub norm: NormKind,
    /// Minimal perturbation norm; bracket top (L-inf) or the starting
    /// distance (L2) when nothing better was found.
    pub distance: f64,
    pub found: bool,
    pub adversarial: Option<Tensor>,
    pub queries: usize,
    /// Winning hyperparameters, e.g. "step=0.01,iters=40".
    pub hyperparams: String,
}

/// Minimal L-inf distances for a sample batch: bisection over epsilon
/// (12 rounds, bracket [0, 0.5]) with the PGD grid tried at every trial
/// epsilon; distances are re-measured from the best adversarial found.
pub fn min_linf_distance_batch(
    net: &NetworkGraph,
    xs: &Tensor,
    ys: &[usize],
    grid: &PgdGrid,
    seed: u64,
    sample_salts: &[u64],
) -> CoreResult<Vec<AttackResult>> {
    let s = xs.shape().to_vec();
    let (n, hw) = (s[0], s[1] * s[2]);
    if ys.len() != n || sample_salts.len() != n {
        return Err(CoreError::Shape("min_linf: labels/salts length mismatch".into()));
    }
    let combos = grid.combos();

    let mut results: Vec<AttackResult> = (0..n)
        .map(|_| AttackResult {
            norm: NormKind::LInf,
            distance: LINF_BRACKET_TOP as f64,
            found: false,
            adversarial: None,
            queries: 0,
            hyperparams: String::new(),
        })
        .collect();

    // Clean pass: misclassified samples score zero immediately.
    let preds = predictions_of(net, xs)?;
    let mut open: Vec<usize> = Vec::new();
    for i in 0..n {
        results[i].queries += 1;
        if preds[i] != ys[i] {
            results[i].found = true;
            results[i].distance = 0.0;
            results[i].adversarial =
                Some(Tensor::new(vec![s[1], s[2]], xs.data()[i * hw..(i + 1) * hw].to_vec())?);
            results[i].hyperparams = "clean-misclassified".into();
        } else {
            open.push(i);
        }
    }

    // Per-sample brackets: lo = known failure, hi = known success once found.
    let mut lo = vec![0.0f32; n];
    let mut hi = vec![LINF_BRACKET_TOP; n];
    let mut have_success = vec![false; n];

    // 1 establishing pass at the bracket top + LINF_BISECT_ROUNDS halvings.
    for round in 0..=LINF_BISECT_ROUNDS {
        if open.is_empty() {
            break;
        }
        let trial: Vec<f32> =
            open.iter().map(|&i| if round == 0 { hi[i] } else { 0.5 * (lo[i] + hi[i]) }).collect();

        // Try grid combos (and repeats) until each open sample succeeds.
        let mut pending: Vec<usize> = (0..open.len()).collect();
        let mut succeeded: Vec<bool> = vec![false; open.len()];
        for (ci, &(step, iters)) in combos.iter().enumerate() {
            for rep in 0..grid.repeats.max(1) {
                if pending.is_empty() {
                    break;
                }
                let rows: Vec<usize> = pending.clone();
                let sub_ids: Vec<usize> = rows.iter().map(|&r| open[r]).collect();
                let sub = gather_rows(xs, &sub_ids);
                let sub_ys: Vec<usize> = sub_ids.iter().map(|&i| ys[i]).collect();
                let sub_eps: Vec<f32> = rows.iter().map(|&r| trial[r]).collect();
                let salts: Vec<u64> = sub_ids
                    .iter()
                    .map(|&i| {
                        sample_salts[i]
                            .wrapping_mul(0x1000)
                            .wrapping_add((round * 100 + ci * 10 + rep) as u64)
                    })
                    .collect();
                let found =
                    pgd_batch(net, &sub, &sub_ys, &sub_eps, step, iters, seed, &salts)?;
                for (slot, &r) in rows.iter().enumerate() {
                    let i = open[r];
                    results[i].queries += iters + 1;
                    if let Some(adv) = &found[slot] {
                        let dist = linf_distance(adv, &xs.data()[i * hw..(i + 1) * hw]);
                        if !results[i].found || dist < results[i].distance {
                            results[i].distance = dist;
                            results[i].adversarial =
                                Some(Tensor::new(vec![s[1], s[2]], adv.clone())?);
                            results[i].hyperparams = format!("step={step},iters={iters}");
                            results[i].found = true;
                        }
                        succeeded[r] = true;
                    }
                }
                pending.retain(|&r| !succeeded[r]);
            }
        }

        let mut still_open = Vec::new();
        for (r, &i) in open.iter().enumerate() {
            if succeeded[r] {
                hi[i] = trial[r];
                have_success[i] = true;
            } else {
                lo[i] = trial[r];
                if round == 0 {
                    // No success even at the bracket top: scored there.
                    continue;
                }
            }
            still_open.push(i);
        }
        open = still_open;
    }

    for i in 0..n {
        if !results[i].found {
            results[i].distance = LINF_BRACKET_TOP as f64;
            results[i].hyperparams = "not-found".into();
        } else {
            let _ = have_success[i];
        }
    }
    Ok(results)
}

/// Single-sample minimal L-inf distance (the batch path with one row).
pub fn min_linf_distance(
    net: &NetworkGraph,
    x: &Tensor,
    y: usize,
    grid: &PgdGrid,
    seed: u64,
) -> CoreResult<AttackResult> {
    let s = x.shape();
    if s.len() != 2 {
        return Err(CoreError::Shape(format!("min_linf_distance expects [h,w], got {s:?}")));
    }
    let xs = x.clone().reshaped(vec![1, s[0], s[1]])?;
    let mut out = min_linf_distance_batch(net, &xs, &[y], grid, seed, &[0])?;
    Ok(out.remove(0))
}

// ---- gradient-based boundary attack (L2) -------------------------------------

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct BoundaryConfig {
    pub step_sizes: Vec<f32>,
    /// Model-call budget per step size.
    pub queries: usize,
    /// Binary-search depth of each boundary line search.
    pub line_search_steps: usize,
}

impl BoundaryConfig {
    /// Published step-size sweep.
    pub fn paper() -> Self {
        BoundaryConfig {
            step_sizes: vec![0.0003, 0.001, 0.003, 0.01, 0.03, 0.1],
            queries: 1000,
            line_search_steps: 10,
        }
    }

    pub fn desk() -> Self {
        BoundaryConfig { step_sizes: vec![0.01, 0.1], queries: 130, line_search_steps: 8 }
    }
}

struct BoundaryState {
    x_cur: Vec<f32>,
    best: Vec<f32>,
    best_dist: f64,
    queries: usize,
    done: bool,
}

/// Batched gradient boundary attack at one step size. `starts[i]` must be
/// classified differently from `ys[i]`.
fn boundary_batch(
    net: &NetworkGraph,
    xs: &Tensor,
    ys: &[usize],
    starts: &[Vec<f32>],
    step_size: f32,
    cfg: &BoundaryConfig,
) -> CoreResult<Vec<(Vec<f32>, f64, usize)>> {
    let s = xs.shape().to_vec();
    let (n, hw) = (s[0], s[1] * s[2]);
    let start_preds = {
        let flat: Vec<f32> = starts.iter().flat_map(|r| r.iter().copied()).collect();
        predictions_of(net, &Tensor::new(vec![n, s[1], s[2]], flat)?)?
    };
    for i in 0..n {
        if start_preds[i] == ys[i] {
            return Err(CoreError::Data(format!(
                "boundary attack: start image for sample {i} is not adversarial"
            )));
        }
    }

    let mut states: Vec<BoundaryState> = (0..n)
        .map(|i| {
            let d = l2_distance(&starts[i], &xs.data()[i * hw..(i + 1) * hw]);
            BoundaryState {
                x_cur: starts[i].clone(),
                best: starts[i].clone(),
                best_dist: d,
                queries: 1,
                done: d == 0.0,
            }
        })
        .collect();

    let iter_cost = cfg.line_search_steps + 2;
    loop {
        let active: Vec<usize> =
            (0..n).filter(|&i| !states[i].done && states[i].queries + iter_cost <= cfg.queries).collect();
        if active.is_empty() {
            break;
        }

        // Line search between the original and the current adversarial:
        // t=0 is clean, t=1 adversarial; halve toward the boundary.
        let mut t_adv = vec![1.0f32; active.len()];
        let mut t_clean = vec![0.0f32; active.len()];
        for _ in 0..cfg.line_search_steps {
            let mut probe = Vec::with_capacity(active.len() * hw);
            for (slot, &i) in active.iter().enumerate() {
                let t = 0.5 * (t_adv[slot] + t_clean[slot]);
                let orig = &xs.data()[i * hw..(i + 1) * hw];
                for j in 0..hw {
                    probe.push(orig[j] + t * (states[i].x_cur[j] - orig[j]));
                }
            }
            let probe_t = Tensor::new(vec![active.len(), s[1], s[2]], probe)?;
            let preds = predictions_of(net, &probe_t)?;
            for (slot, &i) in active.iter().enumerate() {
                let t = 0.5 * (t_adv[slot] + t_clean[slot]);
                if preds[slot] != ys[i] {
                    t_adv[slot] = t;
                } else {
                    t_clean[slot] = t;
                }
                states[i].queries += 1;
            }
        }

        // Boundary points on the adversarial side.
        let mut xb = Vec::with_capacity(active.len() * hw);
        for (slot, &i) in active.iter().enumerate() {
            let orig = &xs.data()[i * hw..(i + 1) * hw];
            for j in 0..hw {
                xb.push(orig[j] + t_adv[slot] * (states[i].x_cur[j] - orig[j]));
            }
        }
        let xb_t = Tensor::new(vec![active.len(), s[1], s[2]], xb)?;
        let xb_preds = predictions_of(net, &xb_t)?;
        for (slot, &i) in active.iter().enumerate() {
            states[i].queries += 1;
            let b = &xb_t.data()[slot * hw..(slot + 1) * hw];
            let d = l2_distance(b, &xs.data()[i * hw..(i + 1) * hw]);
            if xb_preds[slot] != ys[i] && d < states[i].best_dist {
                states[i].best_dist = d;
                states[i].best = b.to_vec();
            }
        }

        // Local boundary geometry from the two top logits.
        let sub_ys: Vec<usize> = active.iter().map(|&i| ys[i]).collect();
        let (grads, margins) = margin_input_grads(net, &xb_t, &sub_ys, &xb_preds)?;
        for (slot, &i) in active.iter().enumerate() {
            states[i].queries += 1;
            let g = &grads[slot * hw..(slot + 1) * hw];
            let d_val = margins[slot] as f64;
            if g.iter().any(|v| !v.is_finite()) {
                states[i].done = true;
                continue;
            }
            let orig = &xs.data()[i * hw..(i + 1) * hw];
            let xb_row = &xb_t.data()[slot * hw..(slot + 1) * hw];

            let g2: f64 = g.iter().map(|&v| (v as f64) * (v as f64)).sum();
            let g2 = g2.max(1e-20);
            let v: Vec<f64> =
                (0..hw).map(|j| (orig[j] - xb_row[j]) as f64).collect();
            let gv: f64 = g.iter().zip(v.iter()).map(|(&gj, &vj)| gj as f64 * vj).sum();
            // Stay on the boundary (first order) while moving toward the
            // original image.
            let lam = (gv + d_val) / g2;
            let mut delta: Vec<f64> =
                (0..hw).map(|j| v[j] - lam * g[j] as f64).collect();
            let dn: f64 = delta.iter().map(|d| d * d).sum::<f64>().sqrt();
            let xb_dist = l2_distance(xb_row, orig);
            let r = (step_size as f64) * xb_dist.max(1e-12);
            if dn > r {
                let sc = r / dn;
                for d in &mut delta {
                    *d *= sc;
                }
            }
            let mut x_new = vec![0.0f32; hw];
            for j in 0..hw {
                x_new[j] = ((xb_row[j] as f64 + delta[j]).clamp(0.0, 1.0)) as f32;
            }
            states[i].x_cur = x_new;
        }

        // Check proposals; fall back to the boundary point when the step
        // left the adversarial region.
        let mut props = Vec::with_capacity(active.len() * hw);
        for &i in &active {
            props.extend_from_slice(&states[i].x_cur);
        }
        let props_t = Tensor::new(vec![active.len(), s[1], s[2]], props)?;
        let prop_preds = predictions_of(net, &props_t)?;
        for (slot, &i) in active.iter().enumerate() {
            states[i].queries += 1;
            let adv_ok = prop_preds[slot] != ys[i];
            if adv_ok {
                let d = l2_distance(&states[i].x_cur, &xs.data()[i * hw..(i + 1) * hw]);
                if d < states[i].best_dist {
                    states[i].best_dist = d;
                    states[i].best = states[i].x_cur.clone();
                }
            } else {
                // Retreat to the adversarial-side boundary point.
                states[i].x_cur = xb_t.data()[slot * hw..(slot + 1) * hw].to_vec();
            }
            if states[i].best_dist < 1e-9 {
                states[i].done = true;
            }
        }
    }

    Ok(states.into_iter().map(|st| (st.best, st.best_dist, st.queries)).collect())
}

/// Gradient-based L2 boundary attack for one sample at one step size.
pub fn boundary_attack_l2(
    net: &NetworkGraph,
    x_orig: &Tensor,
    y: usize,
    x_start: &Tensor,
    queries: usize,
    step: f32,
) -> CoreResult<AttackResult> {
    let s = x_orig.shape();
    if s.len() != 2 || x_start.shape() != s {
        return Err(CoreError::Shape("boundary_attack_l2 expects matching [h,w] images".into()));
    }
    let cfg = BoundaryConfig { step_sizes: vec![step], queries, ..BoundaryConfig::desk() };
    let xs = x_orig.clone().reshaped(vec![1, s[0], s[1]])?;
    let out = boundary_batch(net, &xs, &[y], &[x_start.data().to_vec()], step, &cfg)?;
    let (best, dist, used) = out.into_iter().next().expect("one sample");
    Ok(AttackResult {
        norm: NormKind::L2,
        distance: dist,
        found: true,
        adversarial: Some(Tensor::new(s.to_vec(), best)?),
        queries: used,
        hyperparams: format!("step={step}"),
    })
}

/// Minimal L2 distances for a batch, minimized over the configured step
/// sizes. `starts[i]` must already be adversarial for sample i.
pub fn boundary_attack_batch(
    net: &NetworkGraph,
    xs: &Tensor,
    ys: &[usize],
    starts: &[Vec<f32>],
    cfg: &BoundaryConfig,
) -> CoreResult<Vec<AttackResult>> {
    let s = xs.shape().to_vec();
    let n = s[0];
    let mut results: Vec<AttackResult> = (0..n)
        .map(|_| AttackResult {
            norm: NormKind::L2,
            distance: f64::INFINITY,
            found: false,
            adversarial: None,
            queries: 0,
            hyperparams: String::new(),
        })
        .collect();
    for &step in &cfg.step_sizes {
        let out = boundary_batch(net, xs, ys, starts, step, cfg)?;
        for (i, (best, dist, used)) in out.into_iter().enumerate() {
            results[i].queries += used;
            if dist < results[i].distance {
                results[i].distance = dist;
                results[i].adversarial = Some(Tensor::new(vec![s[1], s[2]], best)?);
                results[i].found = true;
                results[i].hyperparams = format!("step={step}");
            }
        }
    }
    Ok(results)
}

// ---- report -----------------------------------------------------------------

#[derive(Debug, Clone)]
pub struct SampleRobustness {
    pub index: usize,
    pub label: usize,
    pub clean_correct: bool,
    pub linf: AttackResult,
    pub l2: AttackResult,
}

#[derive(Debug, Clone)]
pub struct RobustnessReport {
    pub rows: Vec<SampleRobustness>,
    pub median_linf: f64,
    pub median_l2: f64,
}

pub fn median(xs: &[f64]) -> Option<f64> {
    if xs.is_empty() {
        return None;
    }
    let mut v = xs.to_vec();
    v.sort_by(f64::total_cmp);
    let n = v.len();
    Some(if n % 2 == 1 { v[n / 2] } else { 0.5 * (v[n / 2 - 1] + v[n / 2]) })
}

/// Median minimal distances over the evaluated samples (per norm).
pub fn robustness_score(rows: Vec<SampleRobustness>) -> CoreResult<RobustnessReport> {
    if rows.is_empty() {
        return Err(CoreError::Data("robustness_score needs >= 1 sample".into()));
    }
    let linf: Vec<f64> = rows.iter().map(|r| r.linf.distance).collect();
    let l2: Vec<f64> = rows.iter().map(|r| r.l2.distance).collect();
    Ok(RobustnessReport {
        median_linf: median(&linf).expect("non-empty"),
        median_l2: median(&l2).expect("non-empty"),
        rows,
    })
}

/// Independent re-check of an adversarial example: box constraints, label
/// flip, and measured norm. Returns the re-measured norm.
pub fn verify_adversarial(
    net: &NetworkGraph,
    x_orig: &Tensor,
    x_adv: &Tensor,
    y: usize,
    norm: NormKind,
) -> CoreResult<f64> {
    if x_adv.shape() != x_orig.shape() {
        return Err(CoreError::Shape("adversarial/original shapes differ".into()));
    }
    if x_adv.data().iter().any(|&v| !(0.0..=1.0).contains(&v)) {
        return Err(CoreError::Data("adversarial pixels outside [0,1]".into()));
    }
    let s = x_orig.shape();
    let xs = x_adv.clone().reshaped(vec![1, s[0], s[1]])?;
    let pred = predictions_of(net, &xs)?[0];
    if pred == y {
        return Err(CoreError::Data(format!(
            "adversarial example still classified as the true class {y}"
        )));
    }
    Ok(match norm {
        NormKind::LInf => linf_distance(x_adv.data(), x_orig.data()),
        NormKind::L2 => l2_distance(x_adv.data(), x_orig.data()),
    })
}

/// Full per-sample evaluation: minimal L-inf (bisected PGD) and minimal
/// L2 (boundary attack started from the nearest differently-predicted
/// candidate image). Samples are split into chunks across threads; all
/// randomness derives from (seed, sample index).
#[allow(clippy::too_many_arguments)]
pub fn evaluate_robustness(
    net: &NetworkGraph,
    images: &Tensor,
    labels: &[usize],
    candidates: &Tensor,
    sample_count: usize,
    pgd: &PgdGrid,
    boundary: &BoundaryConfig,
    seed: u64,
    max_threads: usize,
) -> CoreResult<RobustnessReport> {
    let n = images.shape()[0].min(sample_count);
    if n == 0 {
        return Err(CoreError::Data("evaluate_robustness needs >= 1 sample".into()));
    }
    let s = images.shape().to_vec();
    let hw = s[1] * s[2];
    if candidates.shape().len() != 3 || candidates.shape()[1] != s[1] || candidates.shape()[2] != s[2] {
        return Err(CoreError::Shape("candidate pool must match image shape".into()));
    }
    let cand_preds = {
        let mut preds = Vec::new();
        let ids: Vec<usize> = (0..candidates.shape()[0]).collect();
        for chunk in ids.chunks(128) {
            preds.extend(predictions_of(net, &gather_rows(candidates, chunk))?);
        }
        preds
    };

    let threads = max_threads.max(1);
    let chunk_size = n.div_ceil(threads);
    let chunks: Vec<Vec<usize>> =
        (0..n).collect::<Vec<_>>().chunks(chunk_size).map(|c| c.to_vec()).collect();

    let per_chunk = parallel_map(chunks.len(), threads, |ci| -> CoreResult<Vec<SampleRobustness>> {
        let ids = &chunks[ci];
        let xs = gather_rows(images, ids);
        let ys: Vec<usize> = ids.iter().map(|&i| labels[i]).collect();
        let salts: Vec<u64> = ids.iter().map(|&i| i as u64).collect();

        let linf = min_linf_distance_batch(net, &xs, &ys, pgd, seed, &salts)?;

        // Boundary starts: nearest candidate with a different predicted
        // class; misclassified-clean samples score 0 outright.
        let clean_preds = predictions_of(net, &xs)?;
        let mut starts: Vec<Vec<f32>> = Vec::with_capacity(ids.len());
        let mut boundary_rows: Vec<usize> = Vec::new();
        let mut l2: Vec<AttackResult> = (0..ids.len())
            .map(|_| AttackResult {
                norm: NormKind::L2,
                distance: 0.0,
                found: false,
                adversarial: None,
                queries: 0,
                hyperparams: String::new(),
            })
            .collect();
        for (row, &i) in ids.iter().enumerate() {
            if clean_preds[row] != ys[row] {
                l2[row] = AttackResult {
                    norm: NormKind::L2,
                    distance: 0.0,
                    found: true,
                    adversarial: Some(Tensor::new(
                        vec![s[1], s[2]],
                        images.data()[i * hw..(i + 1) * hw].to_vec(),
                    )?),
                    queries: 1,
                    hyperparams: "clean-misclassified".into(),
                };
                continue;
            }
            let x = &images.data()[i * hw..(i + 1) * hw];
            let mut best: Option<(f64, usize)> = None;
            for (c, &p) in cand_preds.iter().enumerate() {
                if p == ys[row] {
                    continue;
                }
                let d = l2_distance(x, &candidates.data()[c * hw..(c + 1) * hw]);
                if best.map(|(bd, _)| d < bd).unwrap_or(true) {
                    best = Some((d, c));
                }
            }
            match best {
                Some((_, c)) => {
                    starts.push(candidates.data()[c * hw..(c + 1) * hw].to_vec());
                    boundary_rows.push(row);
                }
                None => {
                    // No adversarial start exists; score pessimistically at
                    // the farthest box corner.
                    let worst: f64 = x
                        .iter()
                        .map(|&v| {
                            let d = v.max(1.0 - v) as f64;
                            d * d
                        })
                        .sum::<f64>()
                        .sqrt();
                    l2[row] = AttackResult {
                        norm: NormKind::L2,
                        distance: worst,
                        found: false,
                        adversarial: None,
                        queries: 1,
                        hyperparams: "no-start".into(),
                    };
                }
            }
        }
        if !boundary_rows.is_empty() {
            let sub_ids: Vec<usize> = boundary_rows.iter().map(|&r| ids[r]).collect();
            let sub = gather_rows(images, &sub_ids);
            let sub_ys: Vec<usize> = boundary_rows.iter().map(|&r| ys[r]).collect();
            let out = boundary_attack_batch(net, &sub, &sub_ys, &starts, boundary)?;
            for (slot, r) in boundary_rows.into_iter().enumerate() {
                l2[r] = out[slot].clone();
            }
        }

        let mut rows = Vec::with_capacity(ids.len());
        for (row, &i) in ids.iter().enumerate() {
            rows.push(SampleRobustness {
                index: i,
                label: ys[row],
                clean_correct: clean_preds[row] == ys[row],
                linf: linf[row].clone(),
                l2: l2[row].clone(),
            });
        }
        Ok(rows)
    });

    let mut rows = Vec::with_capacity(n);
    for chunk in per_chunk {
        rows.extend(chunk?);
    }
    robustness_score(rows)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::{Layer, LayerOp};

    /// Binary linear classifier: logit0 = w.x + b, logit1 = 0.
    fn linear_model(w: &[f32], b: f32, h: usize, wd: usize) -> NetworkGraph {
        let mut rng = Rng::new(0);
        let mut net = NetworkGraph::new(
            [1, h, wd],
            vec![
                Layer { op: LayerOp::Flatten, input: 0 },
                Layer { op: LayerOp::Linear { out_features: 2 }, input: 1 },
            ],
            vec![],
            &mut rng,
        )
        .unwrap();
        let mut weights = vec![0.0f32; 2 * h * wd];
        weights[..h * wd].copy_from_slice(w);
        net.params_mut()
            .set("layer01.weight", Tensor::new(vec![2, h * wd], weights).unwrap())
            .unwrap();
        net.params_mut().set("layer01.bias", Tensor::new(vec![2], vec![b, 0.0]).unwrap()).unwrap();
        net
    }

    #[test]
    fn median_small_cases() {
        assert_eq!(median(&[1.0, 2.0, 3.0]).unwrap(), 2.0);
        assert_eq!(median(&[4.0, 1.0]).unwrap(), 2.5);
        assert!(median(&[]).is_none());
    }

    #[test]
    fn robustness_score_all_misclassified_is_zero() {
        let rows: Vec<SampleRobustness> = (0..3)
            .map(|i| SampleRobustness {
                index: i,
                label: 0,
                clean_correct: false,
                linf: AttackResult {
                    norm: NormKind::LInf,
                    distance: 0.0,
                    found: true,
                    adversarial: None,
                    queries: 1,
                    hyperparams: String::new(),
                },
                l2: AttackResult {
                    norm: NormKind::L2,
                    distance: 0.0,
                    found: true,
                    adversarial: None,
                    queries: 1,
                    hyperparams: String::new(),
                },
            })
            .collect();
        let rep = robustness_score(rows).unwrap();
        assert_eq!(rep.median_linf, 0.0);
        assert_eq!(rep.median_l2, 0.0);
    }

    #[test]
    fn bisect_finds_monotone_threshold() {
        let truth = 0.2137f32;
        let (lo, hi) = bisect(0.0, 0.5, 12, |x| x >= truth);
        assert!(lo <= truth && truth <= hi);
        assert!((hi - lo) <= 0.5 * 0.5f32.powi(11));
        assert!((hi - truth).abs() <= 0.5 * 0.5f32.powi(12) + 1e-6);
    }

    #[test]
    fn pgd_eps_zero_only_succeeds_on_misclassified() {
        let w = vec![1.0f32; 4];
        let net = linear_model(&w, -1.0, 2, 2);
        // x with w.x + b > 0 -> class 0.
        let x = Tensor::new(vec![2, 2], vec![0.5; 4]).unwrap(); // margin 1 > 0
        let r = pgd_attack(&net, &x, 0, 0.0, 0.1, 10, 3).unwrap();
        assert!(r.is_none());
        // Same point with true label 1 is already misclassified.
        let r = pgd_attack(&net, &x, 1, 0.0, 0.1, 10, 3).unwrap();
        let adv = r.expect("clean input already flips");
        assert_eq!(adv.data(), x.data());
    }

    #[test]
    fn linear_min_linf_matches_margin_over_l1() {
        let mut rng = Rng::new(4);
        for trial in 0..3 {
            let w: Vec<f32> = (0..9).map(|_| rng.range(-1.0, 1.0)).collect();
            let x = Tensor::new(vec![3, 3], (0..9).map(|_| rng.range(0.35, 0.65)).collect())
                .unwrap();
            let margin: f32 =
                w.iter().zip(x.data()).map(|(&a, &b)| a * b).sum::<f32>();
            let l1: f32 = w.iter().map(|v| v.abs()).sum();
            // Choose bias so the true threshold lands in (0.02, 0.2).
            let want = 0.05 + 0.04 * trial as f32;
            let b = want * l1 - margin;
            let net = linear_model(&w, b, 3, 3);
            let truth = (margin + b) / l1;
            assert!(truth > 0.0);

            let res = min_linf_distance(&net, &x, 0, &PgdGrid::desk(), 11).unwrap();
            assert!(res.found, "no adversarial found");
            let rel = (res.distance - truth as f64).abs() / truth as f64;
            assert!(rel < 0.05, "trial {trial}: got {} want {truth} (rel {rel:.3})", res.distance);

            // Verify the emitted example independently.
            let adv = res.adversarial.as_ref().unwrap();
            let measured = verify_adversarial(&net, &x, adv, 0, NormKind::LInf).unwrap();
            assert!(measured <= res.distance + 1e-5);
        }
    }

    #[test]
    fn logit_scaling_leaves_min_linf_unchanged() {
        let mut rng = Rng::new(9);
        let w: Vec<f32> = (0..9).map(|_| rng.range(-1.0, 1.0)).collect();
        let x =
            Tensor::new(vec![3, 3], (0..9).map(|_| rng.range(0.4, 0.6)).collect()).unwrap();
        let margin: f32 = w.iter().zip(x.data()).map(|(&a, &b)| a * b).sum::<f32>();
        let l1: f32 = w.iter().map(|v| v.abs()).sum();
        let b = 0.08 * l1 - margin;
        let net = linear_model(&w, b, 3, 3);
        let doubled = {
            let w2: Vec<f32> = w.iter().map(|&v| 2.0 * v).collect();
            linear_model(&w2, 2.0 * b, 3, 3)
        };
        let a = min_linf_distance(&net, &x, 0, &PgdGrid::desk(), 5).unwrap();
        let c = min_linf_distance(&doubled, &x, 0, &PgdGrid::desk(), 5).unwrap();
        assert_eq!(a.distance, c.distance);
    }

    #[test]
    fn boundary_attack_converges_to_projection_on_linear_model() {
        let mut rng = Rng::new(6);
        let w: Vec<f32> = (0..16).map(|_| rng.range(-1.0, 1.0)).collect();
        let x = Tensor::new(vec![4, 4], (0..16).map(|_| rng.range(0.4, 0.6)).collect()).unwrap();
        let margin: f32 = w.iter().zip(x.data()).map(|(&a, &b)| a * b).sum::<f32>();
        let l2w: f32 = w.iter().map(|v| v * v).sum::<f32>().sqrt();
        let b = 0.2 * l2w - margin; // projection distance 0.2
        let net = linear_model(&w, b, 4, 4);
        let truth = ((margin + b) / l2w) as f64;

        // Start: x pushed across the boundary along -w.
        let start: Vec<f32> = x
            .data()
            .iter()
            .zip(w.iter())
            .map(|(&xv, &wv)| (xv - 0.5 * wv / l2w).clamp(0.0, 1.0))
            .collect();
        let start_t = Tensor::new(vec![4, 4], start).unwrap();
        let res = boundary_attack_l2(&net, &x, 0, &start_t, 200, 0.1).unwrap();
        let rel = (res.distance - truth).abs() / truth;
        assert!(rel < 0.05, "distance {} vs projection {truth} (rel {rel:.3})", res.distance);
        let adv = res.adversarial.as_ref().unwrap();
        let measured = verify_adversarial(&net, &x, adv, 0, NormKind::L2).unwrap();
        assert!((measured - res.distance).abs() < 1e-5);
    }

    #[test]
    fn boundary_attack_start_equal_origin_scores_zero() {
        let w = vec![1.0f32; 4];
        let net = linear_model(&w, -3.0, 2, 2); // everything classed 1
        let x = Tensor::new(vec![2, 2], vec![0.5; 4]).unwrap();
        // True label 0, model says 1: x itself is adversarial.
        let res = boundary_attack_l2(&net, &x, 0, &x, 50, 0.1).unwrap();
        assert_eq!(res.distance, 0.0);
    }

    #[test]
    fn boundary_attack_rejects_non_adversarial_start() {
        let w = vec![1.0f32; 4];
        let net = linear_model(&w, -1.0, 2, 2);
        let x = Tensor::new(vec![2, 2], vec![0.5; 4]).unwrap(); // classed 0
        assert!(boundary_attack_l2(&net, &x, 0, &x, 50, 0.1).is_err());
    }

    #[test]
    fn boundary_best_distance_non_increasing_in_queries() {
        let mut rng = Rng::new(12);
        let w: Vec<f32> = (0..16).map(|_| rng.range(-1.0, 1.0)).collect();
        let x = Tensor::new(vec![4, 4], (0..16).map(|_| rng.range(0.4, 0.6)).collect()).unwrap();
        let margin: f32 = w.iter().zip(x.data()).map(|(&a, &b)| a * b).sum::<f32>();
        let l2w: f32 = w.iter().map(|v| v * v).sum::<f32>().sqrt();
        let net = linear_model(&w, 0.25 * l2w - margin, 4, 4);
        let start: Vec<f32> = x
            .data()
            .iter()
            .zip(w.iter())
            .map(|(&xv, &wv)| (xv - 0.6 * wv / l2w).clamp(0.0, 1.0))
            .collect();
        let start_t = Tensor::new(vec![4, 4], start).unwrap();
        let mut prev = f64::INFINITY;
        for q in [30usize, 60, 120, 240] {
            let res = boundary_attack_l2(&net, &x, 0, &start_t, q, 0.1).unwrap();
            assert!(res.distance <= prev + 1e-9, "distance rose from {prev} to {}", res.distance);
            prev = res.distance;
        }
    }

    #[test]
    fn noise_eval_sigma_zero_equals_clean_and_is_deterministic() {
        let mut rng = Rng::new(2);
        let w: Vec<f32> = (0..16).map(|_| rng.range(-1.0, 1.0)).collect();
        let net = linear_model(&w, 0.0, 4, 4);
        let images = Tensor::rand_uniform(&[20, 4, 4], 0.0, 1.0, &mut rng);
        let labels: Vec<usize> = (0..20).map(|i| i % 2).collect();
        let clean = accuracy_against(&net, &images, &labels).unwrap();
        let curve = noise_eval(&net, &images, &labels, &[0.0, 0.2], &[1, 2]).unwrap();
        assert_eq!(curve.accuracy[0], clean);
        let again = noise_eval(&net, &images, &labels, &[0.0, 0.2], &[1, 2]).unwrap();
        assert_eq!(curve.per_seed, again.per_seed);
    }

    #[test]
    fn paper_grids_match_published_values() {
        let g = PgdGrid::paper();
        assert_eq!(g.iterations, vec![10, 30, 50, 100, 200]);
        assert_eq!(g.step_sizes.len(), 7);
        assert_eq!(g.repeats, 5);
        let b = BoundaryConfig::paper();
        assert_eq!(b.step_sizes, vec![0.0003, 0.001, 0.003, 0.01, 0.03, 0.1]);
    }

    #[test]
    fn batched_linf_equals_single_sample_path() {
        let mut rng = Rng::new(21);
        let w: Vec<f32> = (0..9).map(|_| rng.range(-1.0, 1.0)).collect();
        let l1: f32 = w.iter().map(|v| v.abs()).sum();
        let images =
            Tensor::new(vec![3, 3, 3], (0..27).map(|_| rng.range(0.4, 0.6)).collect()).unwrap();
        // Bias chosen so sample 0 sits ~0.06 from the boundary.
        let m0: f32 = w.iter().zip(&images.data()[..9]).map(|(&a, &b)| a * b).sum();
        let net = linear_model(&w, 0.06 * l1 - m0, 3, 3);
        let ys = [0usize, 0, 0];
        let batch =
            min_linf_distance_batch(&net, &images, &ys, &PgdGrid::desk(), 7, &[0, 1, 2]).unwrap();
        for i in 0..3 {
            let x = Tensor::new(vec![3, 3], images.data()[i * 9..(i + 1) * 9].to_vec()).unwrap();
            let single = {
                let xs = x.clone().reshaped(vec![1, 3, 3]).unwrap();
                min_linf_distance_batch(&net, &xs, &[0], &PgdGrid::desk(), 7, &[i as u64]).unwrap()
                    .remove(0)
            };
            assert_eq!(batch[i].distance, single.distance, "sample {i}");
            assert_eq!(batch[i].found, single.found);
        }
    }
}
