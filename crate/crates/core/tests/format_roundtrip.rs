//! Property tests for the on-disk tensor format and a few numeric
//! invariants that hold for arbitrary inputs.

use proptest::prelude::*;

use simreg_core::io::{read_tensor, write_tensor};
use simreg_core::regularizer::{combined_similarity, GammaWeights};
use simreg_core::tensor::{lr_schedule, Tensor};

fn arb_shape() -> impl Strategy<Value = Vec<usize>> {
    prop::collection::vec(1usize..6, 1..4)
}

proptest! {
    #[test]
    fn tensor_file_roundtrip_is_bit_identical(
        shape in arb_shape(),
        seed in any::<u32>(),
    ) {
        let numel: usize = shape.iter().product();
        let mut rng = simreg_core::rng::Rng::new(seed as u64);
        let data: Vec<f32> = (0..numel).map(|_| rng.range(-1e6, 1e6)).collect();
        let t = Tensor::new(shape, data).unwrap();

        let dir = std::env::temp_dir().join(format!("simreg-prop-{}-{seed}", std::process::id()));
        std::fs::create_dir_all(&dir).unwrap();
        let path = dir.join("t.nrtb");
        write_tensor(&path, &t).unwrap();
        let back = read_tensor(&path).unwrap();
        std::fs::remove_dir_all(&dir).ok();

        prop_assert_eq!(back.shape(), t.shape());
        for (a, b) in t.data().iter().zip(back.data()) {
            prop_assert_eq!(a.to_bits(), b.to_bits());
        }
    }

    #[test]
    fn lr_schedule_is_periodic_and_decaying(epoch in 0usize..200, base in 0.001f32..1.0) {
        let lr = lr_schedule(epoch, base);
        prop_assert!(lr > 0.0 && lr <= base);
        // 20-epoch period.
        prop_assert_eq!(lr, lr_schedule(epoch + 20, base));
        // Non-increasing within a period.
        if epoch % 20 < 19 {
            prop_assert!(lr_schedule(epoch + 1, base) <= lr);
        }
    }

    #[test]
    fn gamma_probabilities_stay_on_simplex(
        logits in prop::collection::vec(-30.0f32..30.0, 1..8),
    ) {
        let g = GammaWeights::from_logits(logits).unwrap();
        let p = g.probabilities();
        let sum: f32 = p.iter().sum();
        prop_assert!((sum - 1.0).abs() < 1e-6);
        prop_assert!(p.iter().all(|&v| v >= 0.0));

        // Convex combination stays inside the value range.
        let sims: Vec<f32> = (0..p.len()).map(|i| -1.0 + 2.0 * (i as f32 / p.len() as f32)).collect();
        let s = combined_similarity(&sims, &g).unwrap();
        let lo = sims.iter().cloned().fold(f32::INFINITY, f32::min);
        let hi = sims.iter().cloned().fold(f32::NEG_INFINITY, f32::max);
        prop_assert!(s >= lo - 1e-6 && s <= hi + 1e-6);
    }
}
