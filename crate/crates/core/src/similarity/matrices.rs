//! Similarity matrices from data, oracle trials, and model responses,
//! plus the cross-scan stability statistics and matrix-level metrics.

use super::snr::{ScaledPopulation, SnrWeights};
use super::{center_unit_vectors, unit_dot, ResponseDataset, SimilarityKind, SimilarityMatrix};
use crate::error::{CoreError, CoreResult};
use crate::tensor::Tensor;

/// Per-trial similarity over non-degenerate stimuli: S_ij = e_i . e_j
/// with an exact unit diagonal.
pub fn similarity_data(pop: &ScaledPopulation) -> CoreResult<SimilarityMatrix> {
    let included: Vec<(usize, &Vec<f32>)> = pop
        .units
        .iter()
        .zip(pop.stimulus_ids.iter())
        .filter_map(|(u, &id)| u.as_ref().map(|e| (id, e)))
        .collect();
    if included.len() < 2 {
        return Err(CoreError::Data(format!(
            "similarity_data needs >= 2 non-degenerate stimuli, found {}",
            included.len()
        )));
    }
    let n = included.len();
    let ids: Vec<usize> = included.iter().map(|(id, _)| *id).collect();
    let mut m = SimilarityMatrix::from_values(SimilarityKind::Data, ids, vec![0.0; n * n])?;
    for i in 0..n {
        m.set_sym(i, i, 1.0);
        for j in i + 1..n {
            m.set_sym(i, j, unit_dot(included[i].1, included[j].1));
        }
    }
    Ok(m)
}

/// Trial-pair similarities per oracle stimulus (upper triangle t1 < t2),
/// the raw material of the repeat-fluctuation statistic.
#[derive(Debug, Clone)]
pub struct TrialSimilarities {
    pub stimulus_ids: Vec<usize>,
    pub per_stimulus: Vec<Vec<f32>>,
}

/// Oracle similarity: trials are treated as distinct pseudo-stimuli,
/// centered jointly, and S_ij averages all trial-pair similarities
/// (same-trial pairs excluded on the diagonal). The diagonal may be < 1.
pub fn similarity_oracle(
    ds: &ResponseDataset,
    weights: &SnrWeights,
) -> CoreResult<(SimilarityMatrix, TrialSimilarities)> {
    if weights.len() != ds.n_neurons() {
        return Err(CoreError::Shape(format!(
            "weights for {} neurons, dataset has {}",
            weights.len(),
            ds.n_neurons()
        )));
    }
    let oracle = ds.oracle_indices();
    if oracle.len() < 2 {
        return Err(CoreError::Data(format!(
            "similarity_oracle needs >= 2 oracle stimuli, found {}",
            oracle.len()
        )));
    }
    for &i in &oracle {
        if ds.trial_count(i) < 2 {
            return Err(CoreError::Data(format!(
                "oracle stimulus {i} has {} trials (need >= 2)",
                ds.trial_count(i)
            )));
        }
    }

    // All scaled trial vectors, jointly centered.
    let mut rows: Vec<Vec<f32>> = Vec::new();
    let mut owner: Vec<(usize, usize)> = Vec::new(); // (oracle position, trial)
    for (pos, &i) in oracle.iter().enumerate() {
        for t in 0..ds.trial_count(i) {
            rows.push(
                ds.response(i, t)
                    .iter()
                    .zip(weights.weights.iter())
                    .map(|(&r, &w)| w * r)
                    .collect(),
            );
            owner.push((pos, t));
        }
    }
    let (_, units) = center_unit_vectors(&rows);

    // Group valid unit vectors per oracle stimulus.
    let n = oracle.len();
    let mut per_stim: Vec<Vec<&Vec<f32>>> = vec![Vec::new(); n];
    for (row, (pos, _)) in owner.iter().enumerate() {
        if let Some(e) = units[row].as_ref() {
            per_stim[*pos].push(e);
        }
    }

    let mut m = SimilarityMatrix::from_values(SimilarityKind::Oracle, oracle.clone(), vec![0.0; n * n])?;
    let mut trial_sims: Vec<Vec<f32>> = vec![Vec::new(); n];
    for i in 0..n {
        let ti = &per_stim[i];
        if ti.len() < 2 {
            return Err(CoreError::Data(format!(
                "oracle stimulus {} has {} non-degenerate trials (need >= 2)",
                oracle[i],
                ti.len()
            )));
        }
        // Diagonal: mean over distinct trial pairs.
        let mut acc = 0.0f64;
        let mut cnt = 0usize;
        for a in 0..ti.len() {
            for b in a + 1..ti.len() {
                let s = unit_dot(ti[a], ti[b]);
                trial_sims[i].push(s);
                acc += s as f64;
                cnt += 1;
            }
        }
        m.set_sym(i, i, (acc / cnt as f64) as f32);

        for j in i + 1..n {
            let tj = &per_stim[j];
            let mut acc = 0.0f64;
            for ea in ti.iter() {
                for eb in tj.iter() {
                    acc += unit_dot(ea, eb) as f64;
                }
            }
            m.set_sym(i, j, (acc / (ti.len() * tj.len()) as f64) as f32);
        }
    }

    Ok((m, TrialSimilarities { stimulus_ids: oracle, per_stimulus: trial_sims }))
}

/// Scan-vs-repeat fluctuation samples and their standard deviations.
#[derive(Debug, Clone)]
pub struct FluctuationStats {
    /// S^oracle deviations from the cross-scan mean, all scans and entries.
    pub scan_samples: Vec<f32>,
    /// Trial-pair similarities minus the matching oracle diagonal.
    pub repeat_samples: Vec<f32>,
    pub scan_std: f64,
    pub repeat_std: f64,
}

fn population_std(xs: &[f32]) -> f64 {
    if xs.is_empty() {
        return 0.0;
    }
    let n = xs.len() as f64;
    let mean = xs.iter().map(|&v| v as f64).sum::<f64>() / n;
    let var = xs.iter().map(|&v| (v as f64 - mean).powi(2)).sum::<f64>() / n;
    var.sqrt()
}

/// Compares variability across scans against variability across repeats.
///
/// `oracle_mats[h]` and `trial_sims[h]` come from `similarity_oracle` on
/// scan `h`; all scans must share the oracle stimulus set.
pub fn fluctuation_stats(
    oracle_mats: &[SimilarityMatrix],
    trial_sims: &[TrialSimilarities],
) -> CoreResult<FluctuationStats> {
    if oracle_mats.len() < 2 {
        return Err(CoreError::Data(format!(
            "fluctuation_stats needs >= 2 scans, got {}",
            oracle_mats.len()
        )));
    }
    if trial_sims.len() != oracle_mats.len() {
        return Err(CoreError::Data("one TrialSimilarities per scan required".into()));
    }
    let ids = &oracle_mats[0].stimuli;
    for m in oracle_mats.iter().skip(1) {
        if &m.stimuli != ids {
            return Err(CoreError::Data("scans have mismatched oracle stimulus sets".into()));
        }
    }
    let n = ids.len();
    let scans = oracle_mats.len() as f64;

    let mut scan_samples = Vec::with_capacity(oracle_mats.len() * n * (n + 1) / 2);
    for i in 0..n {
        for j in i..n {
            let mean: f64 =
                oracle_mats.iter().map(|m| m.get(i, j) as f64).sum::<f64>() / scans;
            for m in oracle_mats {
                scan_samples.push((m.get(i, j) as f64 - mean) as f32);
            }
        }
    }

    let mut repeat_samples = Vec::new();
    for (m, ts) in oracle_mats.iter().zip(trial_sims.iter()) {
        if ts.stimulus_ids != *ids {
            return Err(CoreError::Data("trial similarities mismatch oracle stimuli".into()));
        }
        for (i, sims) in ts.per_stimulus.iter().enumerate() {
            let oracle_ii = m.get(i, i);
            for &s in sims {
                repeat_samples.push(s - oracle_ii);
            }
        }
    }

    let scan_std = population_std(&scan_samples);
    let repeat_std = population_std(&repeat_samples);
    Ok(FluctuationStats { scan_samples, repeat_samples, scan_std, repeat_std })
}

/// Entrywise mean of similarity matrices over scans (the regularization
/// target). All inputs must share the stimulus index list.
pub fn average_over_scans(mats: &[SimilarityMatrix]) -> CoreResult<SimilarityMatrix> {
    let first = mats
        .first()
        .ok_or_else(|| CoreError::Data("average_over_scans: no matrices".into()))?;
    for m in mats.iter().skip(1) {
        if m.stimuli != first.stimuli {
            return Err(CoreError::Data("average_over_scans: stimulus sets differ".into()));
        }
    }
    let n = first.n();
    let inv = 1.0 / mats.len() as f64;
    let mut values = vec![0.0f32; n * n];
    for (k, v) in values.iter_mut().enumerate() {
        let mut acc = 0.0f64;
        for m in mats {
            acc += m.values()[k] as f64;
        }
        *v = (acc * inv) as f32;
    }
    SimilarityMatrix::from_values(SimilarityKind::NeuralTarget, first.stimuli.clone(), values)
}

/// Pearson correlation over the strict upper triangles of two equally
/// sized similarity matrices.
pub fn matrix_correlation(a: &SimilarityMatrix, b: &SimilarityMatrix) -> CoreResult<f64> {
    if a.n() != b.n() {
        return Err(CoreError::Shape(format!("matrix sizes differ: {} vs {}", a.n(), b.n())));
    }
    if a.n() < 3 {
        return Err(CoreError::Data("matrix_correlation needs n >= 3".into()));
    }
    let ua = a.upper_triangle();
    let ub = b.upper_triangle();
    super::pearson(&ua, &ub)
        .ok_or_else(|| CoreError::Data("matrix_correlation undefined: zero variance".into()))
}

/// Linear centered kernel alignment between two feature matrices with a
/// shared sample axis: ||Yc' Xc||_F^2 / (||Xc' Xc||_F ||Yc' Yc||_F).
pub fn cka_index(feat_a: &Tensor, feat_b: &Tensor) -> CoreResult<f64> {
    let sa = feat_a.shape();
    let sb = feat_b.shape();
    if sa.len() != 2 || sb.len() != 2 || sa[0] != sb[0] {
        return Err(CoreError::Shape(format!(
            "cka_index expects [n,p] and [n,q] with equal n, got {sa:?} and {sb:?}"
        )));
    }
    let n = sa[0];
    if n < 2 {
        return Err(CoreError::Data("cka_index needs >= 2 samples".into()));
    }
    let xc = center_columns(feat_a.data(), n, sa[1]);
    let yc = center_columns(feat_b.data(), n, sb[1]);
    let cross = gram_cross_norm_sq(&xc, &yc, n, sa[1], sb[1]);
    let xx = gram_cross_norm_sq(&xc, &xc, n, sa[1], sa[1]).sqrt();
    let yy = gram_cross_norm_sq(&yc, &yc, n, sb[1], sb[1]).sqrt();
    if xx <= 0.0 || yy <= 0.0 {
        return Err(CoreError::Data("cka_index undefined: zero-variance features".into()));
    }
    Ok(cross / (xx * yy))
}

fn center_columns(data: &[f32], n: usize, d: usize) -> Vec<f64> {
    let mut means = vec![0.0f64; d];
    for i in 0..n {
        for j in 0..d {
            means[j] += data[i * d + j] as f64;
        }
    }
    for m in &mut means {
        *m /= n as f64;
    }
    let mut out = vec![0.0f64; n * d];
    for i in 0..n {
        for j in 0..d {
            out[i * d + j] = data[i * d + j] as f64 - means[j];
        }
    }
    out
}

/// ||X' Y||_F^2 computed column-pair by column-pair.
fn gram_cross_norm_sq(x: &[f64], y: &[f64], n: usize, p: usize, q: usize) -> f64 {
    let mut acc = 0.0f64;
    for a in 0..p {
        for b in 0..q {
            let mut dot = 0.0f64;
            for i in 0..n {
                dot += x[i * p + a] * y[i * q + b];
            }
            acc += dot * dot;
        }
    }
    acc
}

#[cfg(test)]
mod tests {
    use super::super::snr::{compute_snr_weights, scale_and_center, SnrConfig, SnrWeights};
    use super::*;
    use crate::rng::Rng;

    fn dataset(rows: &[Vec<Vec<f32>>]) -> ResponseDataset {
        // rows[i][t] = neuron vector for stimulus i, trial t.
        let n_stim = rows.len();
        let n_neurons = rows[0][0].len();
        let stim = Tensor::zeros(&[n_stim, 2, 2]);
        let mut responses = Vec::new();
        let mut counts = Vec::new();
        let mut oracle = Vec::new();
        for trials in rows {
            let mut flat = Vec::new();
            for t in trials {
                flat.extend_from_slice(t);
            }
            responses.push(flat);
            counts.push(trials.len());
            oracle.push(trials.len() >= 2);
        }
        ResponseDataset::new("t".into(), stim, responses, counts, oracle, n_neurons).unwrap()
    }

    fn unit_weights(n: usize) -> SnrWeights {
        SnrWeights { sigma: vec![1.0; n], eta: vec![1.0; n], weights: vec![1.0; n] }
    }

    #[test]
    fn data_similarity_diagonal_and_antipodal() {
        let ds = dataset(&[vec![vec![1.0, 0.0]], vec![vec![0.0, 1.0]]]);
        let pop = scale_and_center(&ds, &unit_weights(2)).unwrap();
        let m = similarity_data(&pop).unwrap();
        assert_eq!(m.get(0, 0), 1.0);
        assert_eq!(m.get(1, 1), 1.0);
        // Two stimuli centered against their mean are antipodal.
        assert!((m.get(0, 1) + 1.0).abs() < 1e-5);
        m.validate(true).unwrap();
    }

    #[test]
    fn data_similarity_matches_brute_force() {
        let mut rng = Rng::new(9);
        let rows: Vec<Vec<Vec<f32>>> = (0..5)
            .map(|_| vec![(0..3).map(|_| rng.range(-1.0, 1.0)).collect::<Vec<f32>>()])
            .collect();
        let ds = dataset(&rows);
        let pop = scale_and_center(&ds, &unit_weights(3)).unwrap();
        let m = similarity_data(&pop).unwrap();

        // Brute force: center, normalize, dot.
        let flat: Vec<Vec<f64>> = rows
            .iter()
            .map(|r| r[0].iter().map(|&v| v as f64).collect())
            .collect();
        let mean: Vec<f64> = (0..3)
            .map(|j| flat.iter().map(|r| r[j]).sum::<f64>() / 5.0)
            .collect();
        let units: Vec<Vec<f64>> = flat
            .iter()
            .map(|r| {
                let c: Vec<f64> = r.iter().zip(&mean).map(|(v, m)| v - m).collect();
                let n = c.iter().map(|v| v * v).sum::<f64>().sqrt();
                c.iter().map(|v| v / n).collect()
            })
            .collect();
        for i in 0..5 {
            for j in 0..5 {
                let expect: f64 = if i == j {
                    1.0
                } else {
                    units[i].iter().zip(&units[j]).map(|(a, b)| a * b).sum()
                };
                assert!(
                    (m.get(i, j) as f64 - expect).abs() < 1e-5,
                    "entry ({i},{j}): {} vs {expect}",
                    m.get(i, j)
                );
            }
        }
    }

    #[test]
    fn oracle_diagonal_equals_trial_pair_similarity_for_two_trials() {
        // Two oracle stimuli, two trials each.
        let ds = dataset(&[
            vec![vec![1.0, 0.0, 0.2], vec![0.8, 0.1, 0.3]],
            vec![vec![0.0, 1.0, -0.4], vec![0.1, 0.9, -0.2]],
        ]);
        let w = unit_weights(3);
        let (m, ts) = similarity_oracle(&ds, &w).unwrap();
        // With T=2 the diagonal is the single distinct trial pair.
        assert!((m.get(0, 0) - ts.per_stimulus[0][0]).abs() < 1e-6);
        assert!((m.get(1, 1) - ts.per_stimulus[1][0]).abs() < 1e-6);

        // Off-diagonal: brute force over the 4 combinations.
        let rows: Vec<Vec<f32>> = vec![
            vec![1.0, 0.0, 0.2],
            vec![0.8, 0.1, 0.3],
            vec![0.0, 1.0, -0.4],
            vec![0.1, 0.9, -0.2],
        ];
        let (_, units) = center_unit_vectors(&rows);
        let e: Vec<&Vec<f32>> = units.iter().map(|u| u.as_ref().unwrap()).collect();
        let expect = (unit_dot(e[0], e[2]) + unit_dot(e[0], e[3]) + unit_dot(e[1], e[2])
            + unit_dot(e[1], e[3]))
            / 4.0;
        assert!((m.get(0, 1) - expect).abs() < 1e-6);
    }

    #[test]
    fn noise_free_repeats_have_unit_oracle_diagonal() {
        let ds = dataset(&[
            vec![vec![1.0, 0.0], vec![1.0, 0.0]],
            vec![vec![0.0, 1.0], vec![0.0, 1.0]],
        ]);
        let w = compute_snr_weights(&ds, SnrConfig::default()).unwrap();
        // Zero noise: weights hit w_max but the similarity is scale free.
        let (m, _) = similarity_oracle(&ds, &w).unwrap();
        assert!((m.get(0, 0) - 1.0).abs() < 1e-5);
        assert!((m.get(1, 1) - 1.0).abs() < 1e-5);
    }

    #[test]
    fn fluctuations_zero_for_identical_scans() {
        let ds = dataset(&[
            vec![vec![1.0, 0.0, 0.3], vec![0.9, 0.1, 0.2]],
            vec![vec![0.0, 1.0, -0.1], vec![0.1, 0.8, 0.0]],
        ]);
        let w = unit_weights(3);
        let (m, ts) = similarity_oracle(&ds, &w).unwrap();
        let stats = fluctuation_stats(&[m.clone(), m.clone()], &[ts.clone(), ts]).unwrap();
        assert!(stats.scan_samples.iter().all(|&v| v.abs() < 1e-7));
        assert_eq!(stats.scan_std, 0.0);
    }

    #[test]
    fn two_scan_deltas_are_half_differences() {
        let ids = vec![0usize, 1];
        let a = SimilarityMatrix::from_values(
            SimilarityKind::Oracle,
            ids.clone(),
            vec![0.9, 0.2, 0.2, 0.8],
        )
        .unwrap();
        let b = SimilarityMatrix::from_values(
            SimilarityKind::Oracle,
            ids.clone(),
            vec![0.7, 0.4, 0.4, 0.8],
        )
        .unwrap();
        let ts = TrialSimilarities { stimulus_ids: ids, per_stimulus: vec![vec![], vec![]] };
        let stats = fluctuation_stats(&[a, b], &[ts.clone(), ts]).unwrap();
        // Entries (0,0): +-0.1, (0,1): -+0.1, (1,1): 0.
        let mut sorted = stats.scan_samples.clone();
        sorted.sort_by(f32::total_cmp);
        assert!((sorted[0] + 0.1).abs() < 1e-6);
        assert!((sorted[5] - 0.1).abs() < 1e-6);
    }

    #[test]
    fn mismatched_scan_stimuli_rejected() {
        let a = SimilarityMatrix::from_values(SimilarityKind::Oracle, vec![0, 1], vec![1.0; 4])
            .unwrap();
        let b = SimilarityMatrix::from_values(SimilarityKind::Oracle, vec![0, 2], vec![1.0; 4])
            .unwrap();
        let ts = TrialSimilarities { stimulus_ids: vec![0, 1], per_stimulus: vec![vec![], vec![]] };
        assert!(fluctuation_stats(&[a, b], &[ts.clone(), ts]).is_err());
    }

    #[test]
    fn scan_average_is_entrywise_mean() {
        let ids = vec![3usize, 7];
        let a = SimilarityMatrix::from_values(SimilarityKind::Model, ids.clone(), vec![1.0, 0.2, 0.2, 1.0]).unwrap();
        let b = SimilarityMatrix::from_values(SimilarityKind::Model, ids.clone(), vec![1.0, 0.6, 0.6, 1.0]).unwrap();
        let avg = average_over_scans(&[a.clone(), b]).unwrap();
        assert_eq!(avg.kind, SimilarityKind::NeuralTarget);
        assert!((avg.get(0, 1) - 0.4).abs() < 1e-7);
        // Single matrix passes through unchanged.
        let single = average_over_scans(&[a.clone()]).unwrap();
        assert_eq!(single.values(), a.values());
    }

    #[test]
    fn matrix_correlation_identity_and_negation() {
        let mut rng = Rng::new(2);
        let n = 4;
        let mut vals = vec![0.0f32; n * n];
        let mut m = SimilarityMatrix::from_values(
            SimilarityKind::Data,
            (0..n).collect(),
            vals.clone(),
        )
        .unwrap();
        for i in 0..n {
            for j in i..n {
                m.set_sym(i, j, rng.range(-0.5, 0.5));
            }
        }
        assert!((matrix_correlation(&m, &m).unwrap() - 1.0).abs() < 1e-12);

        for i in 0..n {
            for j in 0..n {
                vals[i * n + j] = -m.get(i, j);
            }
        }
        let neg =
            SimilarityMatrix::from_values(SimilarityKind::Data, (0..n).collect(), vals).unwrap();
        assert!((matrix_correlation(&m, &neg).unwrap() + 1.0).abs() < 1e-12);
    }

    #[test]
    fn matrix_correlation_hand_case() {
        // 4x4 with known upper triangles.
        let ids: Vec<usize> = (0..4).collect();
        let mut a = SimilarityMatrix::from_values(SimilarityKind::Data, ids.clone(), vec![0.0; 16]).unwrap();
        let mut b = SimilarityMatrix::from_values(SimilarityKind::Data, ids, vec![0.0; 16]).unwrap();
        let ua = [0.1f32, 0.4, -0.2, 0.3, 0.0, 0.5];
        let ub = [0.2f32, 0.3, -0.1, 0.2, 0.1, 0.4];
        let mut k = 0;
        for i in 0..4 {
            for j in i + 1..4 {
                a.set_sym(i, j, ua[k]);
                b.set_sym(i, j, ub[k]);
                k += 1;
            }
        }
        let expect = super::super::pearson(&ua, &ub).unwrap();
        assert!((matrix_correlation(&a, &b).unwrap() - expect).abs() < 1e-12);
    }

    #[test]
    fn cka_trivial_cases() {
        let mut rng = Rng::new(5);
        let a = Tensor::rand_uniform(&[10, 3], -1.0, 1.0, &mut rng);
        assert!((cka_index(&a, &a).unwrap() - 1.0).abs() < 1e-9);

        // Invertible scalar rescaling leaves CKA at 1.
        let scaled = Tensor::new(
            vec![10, 3],
            a.data().iter().map(|&v| -2.5 * v).collect(),
        )
        .unwrap();
        assert!((cka_index(&a, &scaled).unwrap() - 1.0).abs() < 1e-9);

        let zero = Tensor::zeros(&[10, 2]);
        assert!(cka_index(&a, &zero).is_err());
    }

    #[test]
    fn cka_matches_centered_gram_brute_force() {
        let mut rng = Rng::new(6);
        let n = 10;
        let a = Tensor::rand_uniform(&[n, 3], -1.0, 1.0, &mut rng);
        let b = Tensor::rand_uniform(&[n, 4], -1.0, 1.0, &mut rng);
        let got = cka_index(&a, &b).unwrap();

        // Brute force in Gram space: K = Xc Xc', L = Yc Yc',
        // CKA = sum(K .* L) / sqrt(sum(K .* K) sum(L .* L)).
        let xc = center_columns(a.data(), n, 3);
        let yc = center_columns(b.data(), n, 4);
        let gram = |x: &[f64], d: usize| -> Vec<f64> {
            let mut g = vec![0.0f64; n * n];
            for i in 0..n {
                for j in 0..n {
                    for k in 0..d {
                        g[i * n + j] += x[i * d + k] * x[j * d + k];
                    }
                }
            }
            g
        };
        let k = gram(&xc, 3);
        let l = gram(&yc, 4);
        let dot = |p: &[f64], q: &[f64]| p.iter().zip(q).map(|(a, b)| a * b).sum::<f64>();
        let expect = dot(&k, &l) / (dot(&k, &k).sqrt() * dot(&l, &l).sqrt());
        assert!((got - expect).abs() < 1e-9, "{got} vs {expect}");
        assert!((0.0..=1.0).contains(&got));
    }
}
