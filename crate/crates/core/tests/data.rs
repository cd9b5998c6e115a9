//! Preprocessing statistics, class weighting and split properties.

mod common;

use std::path::PathBuf;

use common::rng;
use linvit::data::{
    class_weights, load_image, normalize01, preprocess, resize_bilinear, standardize, write_synthetic_dataset,
    Dataset, PreprocConfig, Sample,
};
use linvit::Tensor;
use proptest::prelude::*;
use rand::Rng;

fn mean_std(t: &Tensor<f32>) -> (f64, f64) {
    let n = t.numel() as f64;
    let m = t.data().iter().map(|&v| v as f64).sum::<f64>() / n;
    let v = t.data().iter().map(|&x| (x as f64 - m).powi(2)).sum::<f64>() / n;
    (m, v.sqrt())
}

fn raw_frame(h: usize, w: usize, seed: u64) -> Tensor<f32> {
    let mut r = rng(seed);
    Tensor::from_fn([3, h, w], |_| r.random_range(0..=255u8) as f32)
}

fn labelled(per_class: &[usize]) -> Dataset {
    let samples = per_class
        .iter()
        .enumerate()
        .flat_map(|(label, &n)| {
            (0..n).map(move |i| Sample {
                path: PathBuf::from(format!("{label}/{i}.png")),
                label,
            })
        })
        .collect();
    Dataset::new(samples, (0..per_class.len()).map(|c| format!("class{c}")).collect()).unwrap()
}

#[test]
fn hand_values() {
    let n = normalize01(&Tensor::new([1, 1, 3], vec![0.0f32, 127.0, 255.0]).unwrap());
    assert_eq!(n.data()[0], 0.0);
    assert!((n.data()[1] - 127.0 / 255.0).abs() < 1e-7);
    assert_eq!(n.data()[2], 1.0);
    assert!(normalize01(&Tensor::zeros([3, 2, 2])).data().iter().all(|&v| v == 0.0));
    assert_eq!(class_weights(&[200, 400, 800]).unwrap(), vec![1.0, 0.5, 0.25]);
    assert_eq!(class_weights(&[400, 400, 400]).unwrap(), vec![1.0; 3]);
    let tiny = class_weights(&[1, 1_000_000]).unwrap();
    assert!(tiny[1] > 0.0 && tiny[1].is_finite());
}

#[test]
fn written_frames_load_through_the_pipeline() {
    let dir = tempfile::tempdir().unwrap();
    let ds = write_synthetic_dataset(dir.path(), 3, 40, 1).unwrap();
    assert_eq!(ds.len(), 9);
    let raw = load_image(&ds.samples()[0].path).unwrap();
    assert_eq!(raw.shape(), &[3, 40, 40]);
    let set = ds.load(&PreprocConfig::default()).unwrap();
    for img in set.images() {
        assert_eq!(img.shape(), &[3, 224, 224]);
        assert!(mean_std(img).0.abs() < 1e-5);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn pipeline_output_is_standardized(h in 1usize..300, w in 1usize..300, seed in any::<u64>()) {
        let out = preprocess(&raw_frame(h, w, seed), &PreprocConfig::default()).unwrap();
        prop_assert_eq!(out.shape(), &[3, 224, 224]);
        prop_assert!(out.is_finite());
        let (m, s) = mean_std(&out);
        prop_assert!(m.abs() < 1e-5, "{m}");
        prop_assert!((s - 1.0).abs() < 1e-3, "{s}");
    }

    #[test]
    fn resize_stays_within_source_range(h in 1usize..40, w in 1usize..40, oh in 1usize..60, ow in 1usize..60, seed in any::<u64>()) {
        let src = raw_frame(h, w, seed);
        let out = resize_bilinear(&src, oh, ow).unwrap();
        prop_assert_eq!(out.shape(), &[3, oh, ow]);
        let lo = src.data().iter().cloned().fold(f32::INFINITY, f32::min);
        let hi = src.data().iter().cloned().fold(f32::NEG_INFINITY, f32::max);
        prop_assert!(out.data().iter().all(|&v| v >= lo - 1e-3 && v <= hi + 1e-3));
    }

    #[test]
    fn standardize_any_nonconstant_image(seed in any::<u64>(), scale in 1e-3f32..1.0, offset in 0.0f32..1.0) {
        let mut r = rng(seed);
        let mut img = Tensor::from_fn([3, 16, 16], |_| offset + scale * r.random::<f32>());
        img.data_mut()[0] = offset;
        img.data_mut()[1] = offset + scale;
        let (m, s) = mean_std(&standardize(&img, 1e-6));
        prop_assert!(m.abs() < 1e-5);
        prop_assert!((s - 1.0).abs() < 1e-3, "{s}");
    }

    #[test]
    fn weights_ignore_uniform_scaling(counts in prop::collection::vec(1usize..5000, 1..6), c in 1usize..50) {
        let w = class_weights(&counts).unwrap();
        let scaled: Vec<usize> = counts.iter().map(|&n| n * c).collect();
        prop_assert_eq!(&class_weights(&scaled).unwrap(), &w);
        let rarest = counts.iter().position(|&n| n == *counts.iter().min().unwrap()).unwrap();
        prop_assert_eq!(w[rarest], 1.0);
        prop_assert!(w.iter().all(|&x| x > 0.0 && x <= 1.0));
    }

    #[test]
    fn split_is_a_stratified_partition(
        counts in prop::collection::vec(20usize..120, 2..4),
        train in 0.5f64..0.8,
        seed in any::<u64>(),
    ) {
        let val = (1.0 - train) / 2.0;
        let ratios = [train, val, 1.0 - train - val];
        let ds = labelled(&counts);
        let (a, b, c) = ds.split(ratios, seed).unwrap();
        let mut all: Vec<&PathBuf> = [&a, &b, &c].iter().flat_map(|d| d.samples().iter().map(|s| &s.path)).collect();
        prop_assert_eq!(all.len(), ds.len());
        all.sort();
        all.dedup();
        prop_assert_eq!(all.len(), ds.len());
        for (class, &n) in counts.iter().enumerate() {
            for (part, r) in [&a, &b, &c].iter().zip(ratios) {
                let got = part.counts()[class] as f64;
                prop_assert!((got - r * n as f64).abs() <= 1.0, "class {class}: {got} vs {}", r * n as f64);
            }
        }
    }
}
