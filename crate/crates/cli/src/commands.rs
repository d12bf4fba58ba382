//! Subcommand implementations. Every output goes through the atomic
//! write helpers; all seeds are recorded in the emitted metadata.

use std::path::{Path, PathBuf};

use simreg_core::error::{CoreError, CoreResult};
use simreg_core::io::{
    atomic_write_json, load_class_dataset, load_network, load_response_scans, load_similarity,
    read_json, save_class_dataset, save_network, save_response_scans, save_similarity, write_csv,
};
use simreg_core::regularizer::{make_control_target, TargetKind};
use simreg_core::robustness::{evaluate_robustness, noise_eval, verify_adversarial, NormKind};
use simreg_core::similarity::{
    compute_snr_weights, fit_denoiser, scale_and_center, similarity_data, similarity_model,
    average_over_scans, PredictiveModel, SimilarityKind, SimilarityMatrix, SnrConfig,
};
use simreg_core::synth::{synth_class_dataset, synth_scan_set};
use simreg_core::tensor::Tensor;
use simreg_core::trainer::{joint_train, TrainLog};

use crate::configs::*;

use serde::Serialize;

pub struct Overrides {
    pub seed: Option<u64>,
    pub out: Option<String>,
}

fn out_dir(cfg_out: &str, ov: &Overrides) -> PathBuf {
    PathBuf::from(ov.out.clone().unwrap_or_else(|| cfg_out.to_string()))
}

pub fn synth_data(config: &Path, ov: &Overrides) -> CoreResult<()> {
    let mut cfg: SynthDataConfig = read_json(config)?;
    if let Some(seed) = ov.seed {
        cfg.seed = seed;
    }
    let out = out_dir(&cfg.out, ov);
    let synth = cfg.to_synth();
    let (scans, gt) = synth_scan_set(&synth, cfg.scans.max(1))?;
    let manifest = save_response_scans(&out, &scans, Some(&gt), Some(synth.seed))?;
    eprintln!("wrote {}", manifest.display());
    Ok(())
}

pub fn synth_task(config: &Path, ov: &Overrides) -> CoreResult<()> {
    let mut cfg: SynthTaskConfig = read_json(config)?;
    if let Some(seed) = ov.seed {
        cfg.seed = seed;
    }
    let out = out_dir(&cfg.out, ov);
    let ds = synth_class_dataset(&cfg.to_class_synth())?;
    let manifest = save_class_dataset(&out, &ds, Some(cfg.seed))?;
    eprintln!("wrote {}", manifest.display());
    Ok(())
}

const READOUT_V: &str = "readout.v";

pub fn save_denoiser(dir: &Path, model: &PredictiveModel) -> CoreResult<()> {
    let mut net = model.net.clone();
    net.params_mut().insert(READOUT_V, Tensor::from_vec(model.v.clone()))?;
    save_network(dir, &net)?;
    Ok(())
}

pub fn load_denoiser(dir: &Path) -> CoreResult<PredictiveModel> {
    let net = load_network(dir)?;
    let v = net
        .params()
        .get(READOUT_V)
        .ok_or_else(|| CoreError::Format(format!("{}: missing {READOUT_V}", dir.display())))?
        .data()
        .to_vec();
    Ok(PredictiveModel { net, v })
}

#[derive(Serialize)]
struct DenoiserMetrics {
    seed: u64,
    scans: Vec<ScanMetric>,
}

#[derive(Serialize)]
struct ScanMetric {
    id: String,
    mean_v: f64,
    min_v: f64,
    max_v: f64,
}

pub fn fit_denoiser_cmd(config: &Path, ov: &Overrides) -> CoreResult<()> {
    let cfg: FitDenoiserConfig = read_json(config)?;
    let seed = ov.seed.or(cfg.seed).unwrap_or(0);
    let out = out_dir(&cfg.out, ov);
    let (scans, _) = load_response_scans(Path::new(&cfg.data))?;
    let dn_json = cfg.denoiser.clone().unwrap_or_default();

    let mut metrics = DenoiserMetrics { seed, scans: Vec::new() };
    for (i, ds) in scans.iter().enumerate() {
        let dn_cfg = dn_json.to_config(seed.wrapping_add(i as u64));
        let model = fit_denoiser(ds, &dn_cfg)?;
        let vmean = model.v.iter().map(|&v| v as f64).sum::<f64>() / model.v.len().max(1) as f64;
        let vmin = model.v.iter().cloned().fold(f32::INFINITY, f32::min) as f64;
        let vmax = model.v.iter().cloned().fold(f32::NEG_INFINITY, f32::max) as f64;
        save_denoiser(&out.join(format!("scan-{}", ds.scan_id)), &model)?;
        metrics.scans.push(ScanMetric { id: ds.scan_id.clone(), mean_v: vmean, min_v: vmin, max_v: vmax });
        eprintln!("scan {}: mean v = {vmean:.3}", ds.scan_id);
    }
    atomic_write_json(&out.join("metrics.json"), &metrics)?;
    Ok(())
}

#[derive(Serialize)]
struct SimilarityMetrics {
    kind: SimilarityKind,
    stimuli: usize,
    off_diag_mean: f64,
    off_diag_min: f64,
    off_diag_max: f64,
    seed: u64,
}

pub fn build_similarity(config: &Path, ov: &Overrides) -> CoreResult<()> {
    let mut cfg: BuildSimilarityConfig = read_json(config)?;
    if let Some(seed) = ov.seed {
        cfg.seed = seed;
    }
    let out = out_dir(&cfg.out, ov);
    let (scans, _) = load_response_scans(Path::new(&cfg.data))?;
    let first = scans
        .first()
        .ok_or_else(|| CoreError::Data("build-similarity: manifest has no scans".into()))?;

    let include: Vec<usize> = match cfg.include {
        StimulusInclude::All => (0..first.n_stimuli()).collect(),
        StimulusInclude::NonOracle => first.non_oracle_indices(),
        StimulusInclude::Oracle => first.oracle_indices(),
    };
    if include.len() < 2 {
        return Err(CoreError::Data("build-similarity: fewer than 2 stimuli selected".into()));
    }

    let mut per_scan = Vec::with_capacity(scans.len());
    for ds in &scans {
        let weights = compute_snr_weights(ds, SnrConfig::default())?;
        let m = match cfg.source {
            SimilaritySource::Model => {
                let dir = cfg.denoisers.as_ref().ok_or_else(|| {
                    CoreError::Config("model source requires `denoisers` directory".into())
                })?;
                let model = load_denoiser(&Path::new(dir).join(format!("scan-{}", ds.scan_id)))?;
                similarity_model(&model, &weights, &ds.stimuli, &include)?
            }
            SimilaritySource::Data => {
                let pop = scale_and_center(ds, &weights)?;
                let full = similarity_data(&pop)?;
                restrict_matrix(&full, &include)?
            }
        };
        per_scan.push(m);
    }
    let mut target = average_over_scans(&per_scan)?;
    if cfg.source == SimilaritySource::Data {
        target.kind = SimilarityKind::Data;
    }
    if let Some(control) = &cfg.control {
        target = make_control_target(&target, control.kind, control.seed.unwrap_or(cfg.seed))?;
    }
    target.validate(false)?;

    std::fs::create_dir_all(&out)?;
    let path = save_similarity(&out.join("target"), &target)?;
    let off = target.upper_triangle();
    let metrics = SimilarityMetrics {
        kind: target.kind,
        stimuli: target.n(),
        off_diag_mean: off.iter().map(|&v| v as f64).sum::<f64>() / off.len().max(1) as f64,
        off_diag_min: off.iter().cloned().fold(f32::INFINITY, f32::min) as f64,
        off_diag_max: off.iter().cloned().fold(f32::NEG_INFINITY, f32::max) as f64,
        seed: cfg.seed,
    };
    atomic_write_json(&out.join("metrics.json"), &metrics)?;
    eprintln!("wrote {}", path.display());
    Ok(())
}

/// Sub-matrix over the given original stimulus ids (which must all be
/// present and non-degenerate in `m`).
fn restrict_matrix(m: &SimilarityMatrix, ids: &[usize]) -> CoreResult<SimilarityMatrix> {
    let rows: Vec<usize> = ids
        .iter()
        .map(|id| {
            m.stimuli
                .iter()
                .position(|s| s == id)
                .ok_or_else(|| CoreError::Data(format!("stimulus {id} degenerate or missing")))
        })
        .collect::<CoreResult<_>>()?;
    let n = rows.len();
    let mut values = vec![0.0f32; n * n];
    for (a, &ra) in rows.iter().enumerate() {
        for (b, &rb) in rows.iter().enumerate() {
            values[a * n + b] = m.get(ra, rb);
        }
    }
    SimilarityMatrix::from_values(m.kind, ids.to_vec(), values)
}

fn expected_kinds(kind: TargetKind) -> &'static [SimilarityKind] {
    match kind {
        TargetKind::Neural => &[SimilarityKind::NeuralTarget, SimilarityKind::Model],
        TargetKind::Data => &[SimilarityKind::Data],
        TargetKind::Shuffle | TargetKind::ShuffleEntrywise => &[SimilarityKind::Shuffle],
        TargetKind::Random => &[SimilarityKind::Random],
    }
}

#[derive(Serialize)]
struct TrainMeta {
    seed: u64,
    alpha: f32,
    target_kind: TargetKind,
    epochs: usize,
    batch_size: usize,
    base_lr: f32,
    momentum: f32,
    widths: Vec<usize>,
    final_accuracy: f64,
    final_gamma: Vec<f32>,
}

pub fn train(config: &Path, ov: &Overrides) -> CoreResult<()> {
    let cfg: TrainCommandConfig = read_json(config)?;
    let seed = ov.seed.or(cfg.seed).unwrap_or(0);
    let out = out_dir(&cfg.out, ov);
    let class_ds = load_class_dataset(Path::new(&cfg.task))?;
    let train_cfg = cfg.train.clone().unwrap_or_default().to_config(seed);

    let (stimuli, target) = match (&cfg.data, &cfg.target) {
        (Some(data), Some(target)) => {
            let (scans, _) = load_response_scans(Path::new(data))?;
            let stimuli = scans
                .first()
                .ok_or_else(|| CoreError::Data("train: response manifest has no scans".into()))?
                .stimuli
                .clone();
            let m = load_similarity(Path::new(target))?;
            if !expected_kinds(train_cfg.target_kind).contains(&m.kind) {
                return Err(CoreError::Config(format!(
                    "target kind {:?} does not match configured {:?}",
                    m.kind, train_cfg.target_kind
                )));
            }
            (Some(stimuli), Some(m))
        }
        (None, None) => (None, None),
        _ => {
            return Err(CoreError::Config(
                "train: `data` and `target` must be provided together".into(),
            ))
        }
    };

    let outcome = joint_train(&train_cfg, &class_ds, stimuli.as_ref(), target.as_ref())?;

    save_network(&out.join("checkpoint"), &outcome.net)?;
    let k = outcome.log.entries.first().map(|e| e.loss.gamma.len()).unwrap_or(0);
    let header = TrainLog::csv_header(k);
    let header_refs: Vec<&str> = header.iter().map(String::as_str).collect();
    write_csv(&out.join("train_log.csv"), &header_refs, &outcome.log.csv_rows())?;
    let meta = TrainMeta {
        seed,
        alpha: train_cfg.alpha,
        target_kind: train_cfg.target_kind,
        epochs: train_cfg.epochs,
        batch_size: train_cfg.batch_size,
        base_lr: train_cfg.base_lr,
        momentum: train_cfg.momentum,
        widths: train_cfg.widths.clone(),
        final_accuracy: outcome.log.final_accuracy(),
        final_gamma: outcome.log.final_gamma(),
    };
    atomic_write_json(&out.join("meta.json"), &meta)?;
    eprintln!("final accuracy {:.4}", outcome.log.final_accuracy());
    Ok(())
}

pub fn eval_noise(config: &Path, ov: &Overrides) -> CoreResult<()> {
    let cfg: EvalNoiseConfig = read_json(config)?;
    let out = PathBuf::from(ov.out.clone().unwrap_or_else(|| cfg.out.clone()));
    let net = load_network(&Path::new(&cfg.checkpoint).join("checkpoint"))
        .or_else(|_| load_network(Path::new(&cfg.checkpoint)))?;
    let task = load_class_dataset(Path::new(&cfg.task))?;
    let curve = noise_eval(&net, &task.test_images, &task.test_labels, &cfg.sigmas, &cfg.noise_seeds)?;

    let mut header = vec!["sigma".to_string(), "accuracy".to_string(), "sem".to_string()];
    for s in &cfg.noise_seeds {
        header.push(format!("seed_{s}"));
    }
    let header_refs: Vec<&str> = header.iter().map(String::as_str).collect();
    let rows: Vec<Vec<String>> = curve
        .sigmas
        .iter()
        .enumerate()
        .map(|(i, s)| {
            let mut row =
                vec![format!("{s}"), format!("{}", curve.accuracy[i]), format!("{}", curve.sem[i])];
            for acc in &curve.per_seed[i] {
                row.push(format!("{acc}"));
            }
            row
        })
        .collect();
    write_csv(&out, &header_refs, &rows)?;
    eprintln!("wrote {}", out.display());
    Ok(())
}

#[derive(Serialize)]
struct RobustnessSummary {
    samples: usize,
    median_linf: f64,
    median_l2: f64,
    linf_found: usize,
    l2_found: usize,
    verified: usize,
    seed: u64,
}

pub fn eval_adversarial(config: &Path, ov: &Overrides) -> CoreResult<()> {
    let mut cfg: EvalAdversarialConfig = read_json(config)?;
    if let Some(seed) = ov.seed {
        cfg.seed = seed;
    }
    let out = out_dir(&cfg.out, ov);
    let net = load_network(&Path::new(&cfg.checkpoint).join("checkpoint"))
        .or_else(|_| load_network(Path::new(&cfg.checkpoint)))?;
    let task = load_class_dataset(Path::new(&cfg.task))?;
    let pgd = cfg.pgd.clone().unwrap_or_default().to_grid();
    let boundary = cfg.boundary.clone().unwrap_or_default().to_config();
    let threads = cfg
        .threads
        .unwrap_or_else(|| std::thread::available_parallelism().map(|v| v.get()).unwrap_or(1));

    let report = evaluate_robustness(
        &net,
        &task.test_images,
        &task.test_labels,
        &task.train_images,
        cfg.samples,
        &pgd,
        &boundary,
        cfg.seed,
        threads,
    )?;

    // Independent re-verification of every emitted adversarial example.
    let s = task.test_images.shape();
    let hw = s[1] * s[2];
    let mut verified = 0usize;
    for row in &report.rows {
        let x = Tensor::new(
            vec![s[1], s[2]],
            task.test_images.data()[row.index * hw..(row.index + 1) * hw].to_vec(),
        )?;
        for (res, norm) in [(&row.linf, NormKind::LInf), (&row.l2, NormKind::L2)] {
            if let Some(adv) = &res.adversarial {
                let measured = verify_adversarial(&net, &x, adv, row.label, norm)?;
                if measured > res.distance + 1e-5 {
                    return Err(CoreError::Data(format!(
                        "sample {}: reported {:?} distance {} but measured {measured}",
                        row.index, norm, res.distance
                    )));
                }
                verified += 1;
            }
        }
    }

    std::fs::create_dir_all(&out)?;
    let header = [
        "index",
        "label",
        "clean_correct",
        "linf_distance",
        "linf_found",
        "linf_queries",
        "linf_hyperparams",
        "l2_distance",
        "l2_found",
        "l2_queries",
        "l2_hyperparams",
    ];
    let rows: Vec<Vec<String>> = report
        .rows
        .iter()
        .map(|r| {
            vec![
                r.index.to_string(),
                r.label.to_string(),
                r.clean_correct.to_string(),
                format!("{}", r.linf.distance),
                r.linf.found.to_string(),
                r.linf.queries.to_string(),
                r.linf.hyperparams.clone(),
                format!("{}", r.l2.distance),
                r.l2.found.to_string(),
                r.l2.queries.to_string(),
                r.l2.hyperparams.clone(),
            ]
        })
        .collect();
    write_csv(&out.join("samples.csv"), &header, &rows)?;
    let summary = RobustnessSummary {
        samples: report.rows.len(),
        median_linf: report.median_linf,
        median_l2: report.median_l2,
        linf_found: report.rows.iter().filter(|r| r.linf.found).count(),
        l2_found: report.rows.iter().filter(|r| r.l2.found).count(),
        verified,
        seed: cfg.seed,
    };
    atomic_write_json(&out.join("summary.json"), &summary)?;
    eprintln!(
        "median L-inf {:.5}, median L2 {:.4} over {} samples",
        report.median_linf,
        report.median_l2,
        report.rows.len()
    );
    Ok(())
}

fn read_csv(path: &Path) -> CoreResult<(Vec<String>, Vec<Vec<String>>)> {
    let text = std::fs::read_to_string(path)?;
    let mut lines = text.lines();
    let header = lines
        .next()
        .ok_or_else(|| CoreError::Format(format!("{}: empty csv", path.display())))?
        .split(',')
        .map(String::from)
        .collect();
    let rows = lines
        .filter(|l| !l.is_empty())
        .map(|l| l.split(',').map(String::from).collect())
        .collect();
    Ok((header, rows))
}

#[derive(Serialize)]
struct ReportSummary {
    runs: Vec<RunSummary>,
}

#[derive(Serialize)]
struct RunSummary {
    label: String,
    #[serde(skip_serializing_if = "Option::is_none")]
    final_accuracy: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    max_final_gamma: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    median_linf: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    median_l2: Option<f64>,
}

pub fn report(config: &Path, ov: &Overrides) -> CoreResult<()> {
    let cfg: ReportConfig = read_json(config)?;
    let out = out_dir(&cfg.out, ov);
    std::fs::create_dir_all(&out)?;

    let mut gamma_rows: Vec<Vec<String>> = Vec::new();
    let mut noise_rows: Vec<Vec<String>> = Vec::new();
    let mut robust_rows: Vec<Vec<String>> = Vec::new();
    let mut summaries = Vec::new();

    for run in &cfg.runs {
        let mut summary = RunSummary {
            label: run.label.clone(),
            final_accuracy: None,
            max_final_gamma: None,
            median_linf: None,
            median_l2: None,
        };
        if let Some(p) = &run.train_log {
            let (header, rows) = read_csv(Path::new(p))?;
            let gamma_cols: Vec<usize> = header
                .iter()
                .enumerate()
                .filter(|(_, h)| h.starts_with("gamma_"))
                .map(|(i, _)| i)
                .collect();
            let acc_col = header
                .iter()
                .position(|h| h == "accuracy")
                .ok_or_else(|| CoreError::Format(format!("{p}: no accuracy column")))?;
            for row in &rows {
                let mut g = vec![run.label.clone(), row[0].clone()];
                for &c in &gamma_cols {
                    g.push(row[c].clone());
                }
                gamma_rows.push(g);
            }
            if let Some(last) = rows.last() {
                summary.final_accuracy = last[acc_col].parse::<f64>().ok();
                summary.max_final_gamma = gamma_cols
                    .iter()
                    .filter_map(|&c| last[c].parse::<f64>().ok())
                    .fold(None, |acc: Option<f64>, v| Some(acc.map_or(v, |a| a.max(v))));
            }
        }
        if let Some(p) = &run.noise_curve {
            let (_, rows) = read_csv(Path::new(p))?;
            for row in &rows {
                noise_rows.push(vec![
                    run.label.clone(),
                    row[0].clone(),
                    row[1].clone(),
                    row[2].clone(),
                ]);
            }
        }
        if let Some(p) = &run.robustness_summary {
            let v: serde_json::Value = read_json(Path::new(p))?;
            let linf = v.get("median_linf").and_then(|x| x.as_f64());
            let l2 = v.get("median_l2").and_then(|x| x.as_f64());
            summary.median_linf = linf;
            summary.median_l2 = l2;
            robust_rows.push(vec![
                run.label.clone(),
                linf.map(|x| x.to_string()).unwrap_or_default(),
                l2.map(|x| x.to_string()).unwrap_or_default(),
            ]);
        }
        summaries.push(summary);
    }

    let max_gamma = gamma_rows.iter().map(|r| r.len()).max().unwrap_or(2) - 2;
    let mut gheader = vec!["label".to_string(), "epoch".to_string()];
    for i in 0..max_gamma {
        gheader.push(format!("gamma_{i}"));
    }
    let gheader_refs: Vec<&str> = gheader.iter().map(String::as_str).collect();
    write_csv(&out.join("gamma_trajectories.csv"), &gheader_refs, &gamma_rows)?;
    write_csv(&out.join("noise_curves.csv"), &["label", "sigma", "accuracy", "sem"], &noise_rows)?;
    write_csv(&out.join("robustness.csv"), &["label", "median_linf", "median_l2"], &robust_rows)?;
    atomic_write_json(&out.join("summary.json"), &ReportSummary { runs: summaries })?;
    eprintln!("wrote report to {}", out.display());
    Ok(())
}
