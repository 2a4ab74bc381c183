//! Behaviour of the two training steps on easy data.

use dctau::config::TrainConfig;
use dctau::experiment::{build_split, posteriors};
use dctau::model::train::{train_classifier, train_contrastive};
use dctau::openset::argmax;

fn separated(seed: u64) -> TrainConfig {
    TrainConfig {
        seed,
        classes: 4,
        known_classes: 3,
        per_class: 60,
        dim: 4,
        spread: 0.3,
        hidden: vec![16],
        proj_dim: 8,
        batch_size: 64,
        epochs_contrastive: 15,
        epochs_classifier: 60,
        warmup_epochs: 2,
        ..TrainConfig::default()
    }
}

#[test]
fn contrastive_loss_falls_on_separated_blobs() {
    for seed in 0..5 {
        let cfg = separated(seed);
        let split = build_split(&cfg).unwrap();
        let (_, losses) = train_contrastive(&split, &cfg).unwrap();
        assert_eq!(losses.len(), cfg.epochs_contrastive);
        assert!(
            losses.last().unwrap() < losses.first().unwrap(),
            "seed {seed}: {losses:?}"
        );
    }
}

#[test]
fn classifier_fits_separable_training_data() {
    for seed in 0..3 {
        let cfg = separated(seed);
        let split = build_split(&cfg).unwrap();
        let (params, _) = train_contrastive(&split, &cfg).unwrap();
        let (trained, _) = train_classifier(params.clone(), &split, &cfg).unwrap();
        assert_eq!(trained.encoder, params.encoder);
        assert_eq!(trained.projection, params.projection);

        let post = posteriors(&trained, split.train.features()).unwrap();
        let correct = post
            .outer_iter()
            .zip(split.train.labels())
            .filter(|(row, &y)| argmax(row.view()).0 == y)
            .count();
        assert_eq!(correct, split.train.len(), "seed {seed}");
    }
}
