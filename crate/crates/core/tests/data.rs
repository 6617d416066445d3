use bsce_core::data::{
    class_counts, class_prototypes, inject_noise_with, synth_dataset, DatasetSpec, NoiseModel,
};
use bsce_core::losses::class_weights;

fn flat_spec(classes: usize, per_class: usize, seed: u64) -> DatasetSpec {
    DatasetSpec {
        classes,
        head_count: per_class,
        imbalance_ratio: 1.0,
        noise_rate: 0.0,
        seed,
        ..DatasetSpec::default()
    }
}

#[test]
fn prototypes_are_nearest_neighbour_separable() {
    let spec = DatasetSpec {
        pixel_noise: 0.1,
        ..flat_spec(20, 10, 4)
    };
    let protos = class_prototypes(&spec).unwrap();
    let data = synth_dataset(&spec).unwrap();
    let wrong = data
        .test
        .iter()
        .filter(|s| {
            let dist = |k: usize| -> f64 {
                protos[k]
                    .pixels()
                    .iter()
                    .zip(&s.pixels)
                    .map(|(a, b)| (a - *b as f64).powi(2))
                    .sum()
            };
            let nearest = (0..spec.classes)
                .min_by(|a, b| dist(*a).total_cmp(&dist(*b)))
                .unwrap();
            nearest != s.true_label
        })
        .count();
    let err = wrong as f64 / data.test.len() as f64;
    assert!(err < 0.05, "nearest-prototype error {err}");
}

#[test]
fn symmetric_noise_rate_is_within_binomial_bounds() {
    let eta = 0.4;
    let clean = synth_dataset(&DatasetSpec {
        image_side: 4,
        ..flat_spec(10, 1000, 8)
    })
    .unwrap();
    let noisy = inject_noise_with(&clean, eta, NoiseModel::Symmetric, 17).unwrap();
    let n = noisy.train.len() as f64;
    let flipped = noisy
        .train
        .iter()
        .filter(|s| s.observed_label != s.true_label)
        .count() as f64;
    // Four standard deviations around the expected rate.
    let sd = (eta * (1.0 - eta) / n).sqrt();
    assert!((flipped / n - eta).abs() < 4.0 * sd, "rate {}", flipped / n);

    // Wrong labels are spread over the other classes.
    let mut hits = vec![0usize; 10];
    noisy
        .train
        .iter()
        .filter(|s| s.true_label == 0 && s.observed_label != 0)
        .for_each(|s| hits[s.observed_label] += 1);
    assert_eq!(hits[0], 0);
    assert!(hits[1..].iter().all(|h| *h > 15), "{hits:?}");
}

#[test]
fn pairwise_noise_moves_to_next_class() {
    let clean = synth_dataset(&DatasetSpec {
        image_side: 4,
        ..flat_spec(5, 200, 1)
    })
    .unwrap();
    let noisy = inject_noise_with(&clean, 0.3, NoiseModel::Pairwise, 2).unwrap();
    for s in noisy
        .train
        .iter()
        .filter(|s| s.observed_label != s.true_label)
    {
        assert_eq!(s.observed_label, (s.true_label + 1) % 5);
    }
    assert_eq!(noisy.val, clean.val);
    assert_eq!(noisy.test, clean.test);
}

#[test]
fn long_tail_weights_favour_rare_classes() {
    let data = synth_dataset(&DatasetSpec {
        noise_rate: 0.0,
        image_side: 4,
        ..DatasetSpec::default()
    })
    .unwrap();
    let counts = class_counts(&data).unwrap();
    assert_eq!(counts[0], 500);
    assert_eq!(counts[19], 10);
    assert!(counts.windows(2).all(|w| w[0] >= w[1]));
    let w = class_weights(&counts).unwrap();
    assert!(w.weights().windows(2).all(|p| p[0] <= p[1]));
    assert!(w.weights()[0] < 1.0 && w.weights()[19] > 1.0);
}
