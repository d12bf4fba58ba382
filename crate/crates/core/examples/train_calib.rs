// Criterion-6 calibration: alpha=0 vs alpha=20 (neural target) vs shuffle
// on the desk task; noise curves at several sigmas.
use simreg_core::regularizer::{make_control_target, TargetKind};
use simreg_core::robustness::noise_eval;
use simreg_core::similarity::*;
use simreg_core::synth::*;
use simreg_core::trainer::*;

fn main() {
    let t0 = std::time::Instant::now();
    // Neural target from one synthetic scan (default noise regime).
    let scan_cfg = SynthConfig { neurons: 80, stimuli: 160, oracle: 40, repeats: 8, seed: 100, ..Default::default() };
    let (scans, _) = synth_scan_set(&scan_cfg, 3).unwrap();
    let ds = scans[0].clone();
    let mut mats = Vec::new();
    for (i, scan) in scans.iter().enumerate() {
        let w = compute_snr_weights(scan, SnrConfig::default()).unwrap();
        let dn = DenoiserConfig { seed: 100 + i as u64, ..Default::default() };
        let model = fit_denoiser(scan, &dn).unwrap();
        let include = scan.non_oracle_indices();
        mats.push(similarity_model(&model, &w, &scan.stimuli, &include).unwrap());
    }
    let mut target = average_over_scans(&mats).unwrap();
    {
        let mut off = target.upper_triangle();
        off.sort_by(f32::total_cmp);
        let q = |f: f64| off[((off.len() - 1) as f64 * f) as usize];
        println!("[{:.0?}] target built: n={} offdiag min={:.3} q01={:.3} q50={:.3} q99={:.3} max={:.3}",
            t0.elapsed(), target.n(), q(0.0), q(0.01), q(0.5), q(0.99), q(1.0));
    }
    let shuffle = make_control_target(&target, TargetKind::Shuffle, 9).unwrap();
    target.kind = SimilarityKind::NeuralTarget;

    let task = synth_class_dataset(&ClassSynthConfig { classes: 3, per_class_train: 120, per_class_test: 70, image_size: 16, seed: 200 }).unwrap();

    let jobs = vec![
        TrainJob { label: "alpha0".into(), config: TrainConfig { alpha: 0.0, ..Default::default() }, target: None },
        TrainJob { label: "neural".into(), config: TrainConfig { alpha: 20.0, clamp_eps: 0.03, ..Default::default() }, target: Some(target.clone()) },
        TrainJob { label: "shuffle".into(), config: TrainConfig { alpha: 20.0, clamp_eps: 0.03, target_kind: TargetKind::Shuffle, ..Default::default() }, target: Some(shuffle) },
    ];
    let seeds = [1u64, 2, 3];
    let mut suite = train_suite(&jobs, &seeds, &task, Some(&ds.stimuli), 2);
    let sweep_jobs = vec![
        TrainJob { label: "alpha2".into(), config: TrainConfig { alpha: 2.0, clamp_eps: 0.03, ..Default::default() }, target: Some(target.clone()) },
        TrainJob { label: "alpha8".into(), config: TrainConfig { alpha: 8.0, clamp_eps: 0.03, ..Default::default() }, target: Some(target.clone()) },
    ];
    let sweep = train_suite(&sweep_jobs, &[1u64], &task, Some(&ds.stimuli), 2);
    suite.runs.extend(sweep.runs);
    println!("[{:.0?}] suite done", t0.elapsed());
    for r in &suite.runs {
        if let Err(e) = &r.outcome {
            println!("RUN FAILED {} seed {}: {e}", r.label, r.seed);
        }
    }

    let sigmas = [0.0f32, 0.1, 0.2, 0.3, 0.5, 0.8];
    for label in ["alpha0", "alpha2", "alpha8", "neural", "shuffle"] {
        for (i, o) in suite.outcomes(label).iter().enumerate() {
            let curve = noise_eval(&o.net, &task.test_images, &task.test_labels, &sigmas, &[0, 1, 2, 3, 4]).unwrap();
            let accs: Vec<String> = curve.accuracy.iter().map(|a| format!("{a:.3}")).collect();
            let g = o.log.final_gamma();
            let maxg = g.iter().cloned().fold(0.0f32, f32::max);
            println!("{label} seed{}: clean={:.3} curve=[{}] sim_first={:.4} sim_last={:.4} max_gamma={:.2}",
                i + 1, curve.accuracy[0], accs.join(", "),
                o.log.entries.first().unwrap().loss.similarity,
                o.log.entries.last().unwrap().loss.similarity, maxg);
        }
    }
    // Quick robustness ordering check on seed-1 models (50 samples).
    use simreg_core::robustness::{evaluate_robustness, BoundaryConfig, PgdGrid};
    for label in ["alpha0", "neural", "shuffle"] {
        let o = &suite.outcomes(label)[0];
        let rep = evaluate_robustness(&o.net, &task.test_images, &task.test_labels,
            &task.train_images, 50, &PgdGrid::desk(), &BoundaryConfig::desk(), 7, 2).unwrap();
        println!("[{:.0?}] {label}: median_linf={:.5} median_l2={:.4}", t0.elapsed(), rep.median_linf, rep.median_l2);
    }
    println!("[{:.0?}] total", t0.elapsed());
}
