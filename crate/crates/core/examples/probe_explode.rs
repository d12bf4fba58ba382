// Step-by-step diagnostics of a diverging alpha=20 run.
use simreg_core::regularizer::{combine_losses, make_control_target, pair_similarity_loss, TargetKind};
use simreg_core::rng::Rng;
use simreg_core::similarity::*;
use simreg_core::synth::*;
use simreg_core::tensor::{gather_images, Tape, Tensor};
use simreg_core::tensor::optim::{lr_schedule, sgd_step};
use simreg_core::trainer::*;

fn main() {
    let scan_cfg = SynthConfig { neurons: 80, stimuli: 160, oracle: 40, repeats: 8, seed: 100, ..Default::default() };
    let (scans, _) = synth_scan_set(&scan_cfg, 3).unwrap();
    let mut mats = Vec::new();
    for (i, scan) in scans.iter().enumerate() {
        let w = compute_snr_weights(scan, SnrConfig::default()).unwrap();
        let dn = DenoiserConfig { seed: 100 + i as u64, ..Default::default() };
        let model = fit_denoiser(scan, &dn).unwrap();
        let include = scan.non_oracle_indices();
        mats.push(similarity_model(&model, &w, &scan.stimuli, &include).unwrap());
    }
    let target = average_over_scans(&mats).unwrap();
    let _ = make_control_target(&target, TargetKind::Shuffle, 9).unwrap();
    let task = synth_class_dataset(&ClassSynthConfig { classes: 3, per_class_train: 120, per_class_test: 70, image_size: 16, seed: 200 }).unwrap();

    // Manual joint loop replicating joint_train with diagnostics.
    let cfg = TrainConfig { alpha: 20.0, clamp_eps: 0.03, seed: 1, ..Default::default() };
    let (h, w) = task.image_size();
    let root = Rng::new(cfg.seed);
    let mut init_rng = root.derive(1);
    let mut class_rng = root.derive(2);
    let mut pair_rng = root.derive(3);
    let mut net = residual_classifier([1, h, w], &cfg.widths, task.classes, &mut init_rng).unwrap();
    let k = net.tap_count();
    net.params_mut().insert(GAMMA_PARAM, Tensor::zeros(&[k])).unwrap();

    let stimuli = resize_images(&scans[0].stimuli, h, w).unwrap();
    let n_train = task.train_images.shape()[0];
    let mut order: Vec<usize> = (0..n_train).collect();
    let pairs_per_step = cfg.batch_size / 2;

    'outer: for epoch in 0..6 {
        let lr = lr_schedule(epoch, cfg.base_lr);
        class_rng.shuffle(&mut order);
        for (step, chunk) in order.chunks_exact(cfg.batch_size).enumerate() {
            let batch = gather_images(&task.train_images, chunk).unwrap();
            let targets_c: Vec<usize> = chunk.iter().map(|&i| task.train_labels[i]).collect();
            let mut tape = Tape::new();
            let input_id = tape.input(&batch);
            let binds = net.bind(&mut tape);
            let pass = net.forward_on(&mut tape, &binds, input_id).unwrap();
            let ce = tape.softmax_cross_entropy(pass.output, &targets_c).unwrap();

            let m = target.n();
            let mut left = Vec::new(); let mut right = Vec::new(); let mut tvals = Vec::new();
            for _ in 0..pairs_per_step {
                let i = pair_rng.below(m);
                let mut j = pair_rng.below(m - 1);
                if j >= i { j += 1; }
                left.push(target.stimuli[i]);
                right.push(target.stimuli[j]);
                tvals.push(target.get(i, j));
            }
            let lb = gather_images(&stimuli, &left).unwrap();
            let rb = gather_images(&stimuli, &right).unwrap();
            let l_in = tape.input(&lb);
            let r_in = tape.input(&rb);
            let l_pass = net.forward_on(&mut tape, &binds, l_in).unwrap();
            let r_pass = net.forward_on(&mut tape, &binds, r_in).unwrap();
            let gamma_id = binds.node(GAMMA_PARAM).unwrap();
            let pair = pair_similarity_loss(&mut tape, &l_pass.taps, &r_pass.taps, gamma_id, &tvals, cfg.clamp_eps).unwrap();
            let sim_v = tape.scalar_value(pair.loss);
            let task_v = tape.scalar_value(ce);
            let combined = combine_losses(&mut tape, ce, pair.loss, cfg.alpha).unwrap();
            tape.backward(combined).unwrap();
            let grads = tape.param_grads();
            let mut worst = ("", 0.0f32);
            for (name, g) in grads.iter() {
                let m = g.data().iter().fold(0.0f32, |a, &v| a.max(v.abs()));
                if m > worst.1 { worst = (name, m); }
            }
            // feature norms at taps
            let tap_norm: Vec<f32> = l_pass.taps.iter().map(|&t| {
                tape.value(t).iter().fold(0.0f32, |a, &v| a.max(v.abs()))
            }).collect();
            println!("ep{epoch} step{step}: task={task_v:.3} sim={sim_v:.3} max|grad|={:.2e}({}) tapmax={:?} lr={lr}", worst.1, worst.0, tap_norm);
            if !sim_v.is_finite() || !task_v.is_finite() {
                println!("DIVERGED");
                break 'outer;
            }
            sgd_step(net.params_mut(), &grads, lr, cfg.momentum).unwrap();
        }
    }
}
