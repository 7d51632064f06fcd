use iqan_core::microworld::{generate_dataset, parse_question, split_for_augmentation, world_vocabulary, GenConfig, QType, SplitSpec};
use iqan_core::train::{augment_with_vqg, encode_examples, train};
use iqan_core::{Regime, TrainConfig};

#[test]
fn trained_generator_asks_about_the_right_attribute() {
    let data = generate_dataset(1600, 100, &GenConfig::default(), 21).unwrap();
    let (set1, set2) = split_for_augmentation(
        &data.train,
        &SplitSpec {
            fraction_pairs: 0.5,
            seed: 21,
        },
    )
    .unwrap();
    let render = data.manifest.render();
    let vocab = world_vocabulary();
    let cfg = TrainConfig {
        regime: Regime::Dt,
        seed: 21,
        ..TrainConfig::default()
    };
    let enc1 = encode_examples(&set1, &render, &vocab).unwrap();
    let val = encode_examples(&data.val, &render, &vocab).unwrap();
    let out = train(&cfg, "vqg", &enc1, &val, None, &mut |_| Ok(())).unwrap();

    let set2: Vec<_> = set2.into_iter().take(100).collect();
    let aug = augment_with_vqg(&out.best.model, &set2, &render, &vocab, &cfg.beam).unwrap();
    assert_eq!(aug.examples.len() + aug.dropped, set2.len());
    let matched = aug
        .examples
        .iter()
        .filter(|e| {
            let asked = e.question.as_deref().and_then(parse_question).map(|p| p.qtype);
            asked.is_some() && asked == QType::of_value(&e.answer)
        })
        .count();
    let rate = matched as f64 / set2.len() as f64;
    let samples: Vec<_> = aug.examples.iter().take(3).map(|e| (&e.answer, e.question.as_deref())).collect();
    assert!(rate >= 0.8, "qtype match {matched}/{} ({rate:.2}), e.g. {samples:?}", set2.len());
}

#[test]
fn empty_set2_gives_nothing() {
    let data = generate_dataset(20, 5, &GenConfig::default(), 3).unwrap();
    let cfg = TrainConfig::default();
    let model = iqan_core::Model::init(
        &cfg.model,
        world_vocabulary().len(),
        iqan_core::microworld::world_answers().len(),
        iqan_core::microworld::CELL_DIM,
        &mut <rand_chacha::ChaCha8Rng as rand::SeedableRng>::seed_from_u64(1),
    )
    .unwrap();
    let aug = augment_with_vqg(&model, &[], &data.manifest.render(), &world_vocabulary(), &cfg.beam).unwrap();
    assert!(aug.examples.is_empty() && aug.dropped == 0);
}
