use simreg_core::similarity::*;
use simreg_core::synth::{synth_scan, SynthConfig};

fn main() {
    for (readout, ch, epochs) in [
        (ReadoutKind::Pooled, 16usize, 100usize),
        (ReadoutKind::Pooled, 16, 150),
        (ReadoutKind::Pooled, 24, 150),
    ] {
        for seed in [1u64, 2, 3] {
            let cfg = SynthConfig {
                neurons: 60, stimuli: 400, oracle: 50, repeats: 10,
                noise_rel_range: [1.5, 2.8], seed, ..Default::default()
            };
            let (ds, _) = synth_scan(&cfg).unwrap();
            let w = compute_snr_weights(&ds, SnrConfig::default()).unwrap();
            let (s_oracle, _) = similarity_oracle(&ds, &w).unwrap();
            let pop = scale_and_center(&ds, &w).unwrap();
            let full = similarity_data(&pop).unwrap();
            let oracle_ids = ds.oracle_indices();
            let keep: Vec<usize> = full.stimuli.iter().enumerate()
                .filter(|(_, id)| oracle_ids.contains(id)).map(|(r, _)| r).collect();
            let mut sub = vec![0.0f32; keep.len() * keep.len()];
            for (a, &ra) in keep.iter().enumerate() {
                for (b, &rb) in keep.iter().enumerate() {
                    sub[a * keep.len() + b] = full.get(ra, rb);
                }
            }
            let s_data = SimilarityMatrix::from_values(SimilarityKind::Data, oracle_ids.clone(), sub).unwrap();
            let dn = DenoiserConfig { readout, channels: ch, epochs, seed, ..Default::default() };
            let model = fit_denoiser(&ds, &dn).unwrap();
            let mean_v: f32 = model.v.iter().sum::<f32>() / model.v.len() as f32;
            let s_model = similarity_model(&model, &w, &ds.stimuli, &oracle_ids).unwrap();
            let cm = matrix_correlation(&s_model, &s_oracle).unwrap();
            let cd = matrix_correlation(&s_data, &s_oracle).unwrap();
            println!("{readout:?} ch{ch} ep{epochs} seed {seed}: v={mean_v:.3} model={cm:.3} data={cd:.3} margin={:+.3}", cm - cd);
        }
    }
}
