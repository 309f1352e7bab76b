//! Round-trip property tests for the artifact container.

use hmdc_core::artifact::{load_artifact, save_artifact};
use hmdc_core::config::CondenseConfig;
use hmdc_core::data::{DatasetSpec, SyntheticSet};
use ndarray::Array4;
use proptest::prelude::*;

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    /// save -> load is bit-exact for arbitrary float content, including
    /// non-round values, negatives, and subnormals.
    #[test]
    fn artifact_roundtrip_bit_exact(
        classes in 1usize..5,
        ipc in 1usize..4,
        side in 2usize..7,
        raw in prop::collection::vec(prop::num::f32::ANY, 1..8),
    ) {
        let n = classes * ipc;
        let mut bits = raw.iter().cycle();
        let images = Array4::from_shape_fn((n, 1, side, side), |_| {
            let v = *bits.next().unwrap();
            if v.is_nan() { 0.0 } else { v }
        });
        let labels = (0..n).map(|i| i / ipc).collect();
        let synth = SyntheticSet { images, labels, ipc, num_classes: classes };
        let spec = DatasetSpec {
            name: "mnist".into(),
            num_classes: classes,
            image_shape: (1, side, side),
            mean: vec![0.0],
            std: vec![1.0],
        };
        let cfg = CondenseConfig::for_dataset("mnist");
        let dir = tempfile::tempdir().unwrap();
        save_artifact(&synth, &spec, &cfg, dir.path()).unwrap();
        let (loaded, manifest) = load_artifact(dir.path()).unwrap();
        // bit-exact comparison
        for (a, b) in synth.images.iter().zip(loaded.images.iter()) {
            prop_assert_eq!(a.to_bits(), b.to_bits());
        }
        prop_assert_eq!(&synth.labels, &loaded.labels);
        prop_assert_eq!(manifest.shape, [n, 1, side, side]);
    }
}
