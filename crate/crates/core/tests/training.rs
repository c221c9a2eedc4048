use ldspn::train::{train, TrainConfig};
use ldspn::{Corpus, Error, Model, ModelSettings, SyntheticSpec};

fn corpus() -> Corpus {
    let spec = SyntheticSpec {
        num_labels: 4,
        vocab_size: 30,
        train_size: 40,
        valid_size: 10,
        test_size: 0,
        seed: 2,
        ..SyntheticSpec::default()
    };
    let raw = spec.generate().unwrap();
    Corpus::from_raw(&raw.train, &raw.valid, &raw.test).unwrap()
}

fn tiny() -> ModelSettings {
    ModelSettings {
        d_model: 16,
        num_heads: 2,
        encoder_layers: 1,
        decoder_layers: 1,
        ffn_width: 32,
        ..ModelSettings::default()
    }
}

#[test]
fn frozen_encoder_stays_put_while_the_rest_learns() {
    let corpus = corpus();
    let (mut model, _) = Model::for_corpus(&corpus, tiny(), 0).unwrap();
    let before = model.snapshot();
    let cfg = TrainConfig {
        epochs: 2,
        freeze_encoder: true,
        ..TrainConfig::default()
    };
    // Force the last epoch to be restored so the comparison sees trained weights.
    train(
        &mut model,
        &corpus.train,
        &ldspn::Dataset::default(),
        &cfg,
        |_, _, _| Ok(()),
    )
    .unwrap();
    let after = model.snapshot();

    let names: Vec<String> = model.params.iter().map(|(_, n, _)| n.to_string()).collect();
    let mut moved_other = false;
    for ((name, b), a) in names.iter().zip(&before).zip(&after) {
        if name.starts_with("encoder.") {
            assert_eq!(a, b, "{name} moved while frozen");
        } else {
            moved_other |= a != b;
        }
    }
    assert!(moved_other);
}

#[test]
fn unfrozen_encoder_trains() {
    let corpus = corpus();
    let (mut model, _) = Model::for_corpus(&corpus, tiny(), 0).unwrap();
    let before = model.snapshot();
    let cfg = TrainConfig {
        epochs: 1,
        ..TrainConfig::default()
    };
    train(
        &mut model,
        &corpus.train,
        &ldspn::Dataset::default(),
        &cfg,
        |_, _, _| Ok(()),
    )
    .unwrap();
    let after = model.snapshot();
    let moved = model
        .params
        .iter()
        .zip(before.iter().zip(&after))
        .any(|((_, name, _), (b, a))| name.starts_with("encoder.") && a != b);
    assert!(moved);
}

#[test]
fn divergence_is_reported_with_its_position() {
    let corpus = corpus();
    let (mut model, _) = Model::for_corpus(&corpus, tiny(), 0).unwrap();
    let cfg = TrainConfig {
        epochs: 3,
        lr: 1e300,
        ..TrainConfig::default()
    };
    let mut seen = 0;
    let err = train(&mut model, &corpus.train, &corpus.valid, &cfg, |_, _, _| {
        seen += 1;
        Ok(())
    })
    .unwrap_err();
    assert!(matches!(err, Error::Diverged { epoch: 1, .. }), "{err}");
    assert_eq!(seen, 0);
    assert_eq!(err.class(), ldspn::ErrorClass::Numeric);
}

#[test]
fn best_valid_epoch_is_restored() {
    let corpus = corpus();
    let (mut model, _) = Model::for_corpus(&corpus, tiny(), 1).unwrap();
    let cfg = TrainConfig {
        epochs: 6,
        ..TrainConfig::default()
    };
    let mut snapshots = Vec::new();
    let outcome = train(&mut model, &corpus.train, &corpus.valid, &cfg, |_, m, _| {
        snapshots.push(m.snapshot());
        Ok(())
    })
    .unwrap();
    let best = outcome
        .epochs
        .iter()
        .map(|e| e.valid.unwrap().f1)
        .fold(f64::NEG_INFINITY, f64::max);
    assert_eq!(outcome.best_valid_f1, Some(best));
    // Ties keep the earliest epoch.
    let first_best = outcome
        .epochs
        .iter()
        .position(|e| e.valid.unwrap().f1 == best)
        .unwrap();
    assert_eq!(outcome.best_epoch, first_best + 1);
    assert_eq!(model.snapshot(), snapshots[first_best]);
}
