//! Front-end invariants: gradient fidelity, hop-shift alignment, and the
//! prepend boundary guarantee the prepending attack relies on.

use uptb_core::features::{extract_features, FeatureConfig};
use uptb_core::tape::{finite_difference_check, Tape};
use uptb_core::tensor::Tensor;

fn noise(n: usize, seed: u64) -> Tensor<f64> {
    use rand::{Rng, SeedableRng};
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
    let vals: Vec<f64> = (0..n)
        .map(|_| rng.gen_range(-12000.0f64..12000.0).round())
        .collect();
    Tensor::new(vec![n], vals).unwrap()
}

#[test]
fn gradient_of_feature_sum_matches_finite_differences() {
    let cfg = FeatureConfig::fast_4khz();
    let n = cfg.window_samples() + 2 * cfg.hop_samples(); // 3 frames
    let w = noise(n, 3);
    let err = finite_difference_check(
        |tape, x| {
            let f = extract_features(tape, x, &cfg)?;
            tape.reduce_sum(None, &f)
        },
        &w,
        1e-2, // raw sample units scale by 2^-15 inside the pipeline
    )
    .unwrap();
    assert!(err < 1e-4, "err={err}");
}

#[test]
fn one_hop_shift_moves_features_one_frame() {
    let cfg = FeatureConfig::fast_4khz();
    let hop = cfg.hop_samples();
    let n = cfg.window_samples() + 6 * hop;
    let w = noise(n, 11);

    let mut shifted_vals = vec![0.0f64; hop];
    shifted_vals.extend_from_slice(w.data());
    let shifted = Tensor::new(vec![n + hop], shifted_vals).unwrap();

    let mut tape = Tape::new();
    let base = extract_features(&mut tape, &w, &cfg).unwrap();
    let moved = extract_features(&mut tape, &shifted, &cfg).unwrap();
    assert_eq!(moved.shape()[0], base.shape()[0] + 1);
    let mels = cfg.num_mels;
    for f in 0..base.shape()[0] {
        for m in 0..mels {
            let a = base.data()[f * mels + m];
            let b = moved.data()[(f + 1) * mels + m];
            assert!((a - b).abs() < 1e-9, "frame {f} mel {m}: {a} vs {b}");
        }
    }
}

#[test]
fn prepend_does_not_contaminate_suffix_frames() {
    // with the prepend length a multiple of the hop, every window that
    // sees only x-samples must reproduce x's own features exactly
    let cfg = FeatureConfig::fast_4khz();
    let hop = cfg.hop_samples();
    let win = cfg.window_samples();
    let s = 5 * hop; // delta length
    let x = noise(win + 4 * hop, 17);
    let delta = noise(s, 23);

    let mut combined_vals = delta.to_vec();
    combined_vals.extend_from_slice(x.data());
    let combined = Tensor::new(vec![s + x.len()], combined_vals).unwrap();

    let mut tape = Tape::new();
    let fx = extract_features(&mut tape, &x, &cfg).unwrap();
    let fc = extract_features(&mut tape, &combined, &cfg).unwrap();

    // combined frame i starts at i * hop; it sees only x once i*hop >= s
    let first_clean = s / hop;
    let mels = cfg.num_mels;
    let mut checked = 0;
    for i in first_clean..fc.shape()[0] {
        let j = i - first_clean;
        if j >= fx.shape()[0] {
            break;
        }
        for m in 0..mels {
            let a = fc.data()[i * mels + m];
            let b = fx.data()[j * mels + m];
            assert!(
                a.to_bits() == b.to_bits(),
                "frame {i} mel {m} differs: {a} vs {b}"
            );
        }
        checked += 1;
    }
    assert!(checked >= 4, "checked only {checked} frames");
}
