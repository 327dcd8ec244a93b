use proptest::prelude::*;

use metaseg::autodiff::Tape;
use metaseg::embed::EmbedConfig;
use metaseg::episodes::{gen_synthetic, load_dataset_dir, sample_episode, write_dataset_dir, SegDataset, Split, SynthConfig};
use metaseg::trainer::{meta_train, RunOptions, TrainConfig};
use metaseg::Tensor;

fn pinned() -> SegDataset {
    gen_synthetic(&SynthConfig::default()).unwrap()
}

#[test]
fn class_draws_are_uniform() {
    let ds = pinned();
    let ids = ds.split_ids(Split::Train).to_vec();
    let episodes = 5000;
    let mut counts = vec![0usize; 256];
    for s in 0..episodes {
        for &c in &sample_episode(&ds, Split::Train, 2, 1, 1, s).unwrap().class_table {
            counts[c as usize] += 1;
        }
    }
    let expected = (episodes * 2) as f64 / ids.len() as f64;
    let chi2: f64 = ids.iter().map(|&c| (counts[c as usize] as f64 - expected).powi(2) / expected).sum();
    // 99.9th percentile of chi-square with 9 degrees of freedom
    assert!(chi2 < 27.88, "chi2 {chi2}");
}

#[test]
fn train_episodes_never_show_novel_pixels() {
    let ds = pinned();
    let novel = ds.split_ids(Split::Novel).to_vec();
    for s in 0..2000u64 {
        let ep = sample_episode(&ds, Split::Train, 2, 5, 2, s).unwrap();
        for sample in ep.support.iter().chain(&ep.query) {
            let raw = &ds.records[sample.record].mask;
            assert!(raw.iter().all(|v| !novel.contains(v)), "episode {s}");
        }
    }
}

#[test]
fn dataset_directory_round_trip_keeps_checksum() {
    let cfg = SynthConfig {
        num_classes: 5,
        images_per_class: 6,
        novel_classes: vec![5],
        ..SynthConfig::default()
    };
    let ds = gen_synthetic(&cfg).unwrap();
    let dir = tempfile::tempdir().unwrap();
    write_dataset_dir(&ds, dir.path()).unwrap();
    let back = load_dataset_dir(dir.path()).unwrap();
    assert_eq!(back.checksum(), ds.checksum());
}

#[test]
fn smoke_run_keeps_losses_finite_and_lambda_positive() {
    let ds = gen_synthetic(&SynthConfig {
        num_classes: 6,
        images_per_class: 10,
        image_size: 16,
        radius_min: 3.0,
        radius_max: 6.0,
        novel_classes: vec![5, 6],
        ..SynthConfig::default()
    })
    .unwrap();
    let cfg = TrainConfig {
        epochs: 4,
        episodes_per_epoch: 3,
        n: 2,
        q: 1,
        lr: 0.05,
        eval_every: 0,
        embed: EmbedConfig::micro(4),
        ..TrainConfig::default()
    };
    let mut seen = 0;
    meta_train::<f32>(&ds, &cfg, None, RunOptions::default(), |ck| {
        let m = ck.history.last().unwrap();
        assert!(m.mean_loss.is_finite());
        assert!(ck.model.head.lambda() > 0.0);
        assert!(ck.model.named_params().iter().all(|(_, t)| t.all_finite()));
        seen += 1;
        Ok(())
    })
    .unwrap();
    assert_eq!(seen, 4);
}

proptest! {
    #[test]
    fn softmax_rows_sum_to_one(
        rows in 1usize..6,
        cols in 2usize..6,
        scale in 0.1f64..500.0,
        seed in 0u64..10_000,
    ) {
        let mut state = seed;
        let data: Vec<f64> = (0..rows * cols)
            .map(|_| {
                state = state.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
                ((state >> 11) as f64 / (1u64 << 53) as f64 - 0.5) * scale
            })
            .collect();
        let labels: Vec<usize> = (0..rows).map(|r| r % cols).collect();
        let mut tape = Tape::<f64>::new();
        let x = tape.leaf(Tensor::new(&[rows, cols], data).unwrap());
        let loss = tape.softmax_cross_entropy(x, &labels).unwrap();
        let p = tape.saved_softmax(loss).unwrap();
        for r in 0..rows {
            let s: f64 = p[r * cols..(r + 1) * cols].iter().sum();
            prop_assert!((s - 1.0).abs() <= 1e-6);
        }
    }
}
