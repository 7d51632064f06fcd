//! Shared fixtures for the criterion benches under `benches/`.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use iqan_core::fusion::{FusionConfig, FusionParams};
use iqan_core::microworld::{generate_dataset, world_answers, world_vocabulary, GenConfig, CELL_DIM};
use iqan_core::train::encode_examples;
use iqan_core::{EncodedExample, Model, ModelConfig, Vector};

/// Fusion parameters at the default widths plus one projected input pair.
pub fn fusion_fixture(rank: usize) -> (FusionParams, Vector, Vector) {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let m = ModelConfig::default();
    let cfg = FusionConfig {
        d_q: m.d_q,
        d_v: CELL_DIM,
        d_a: m.d_a,
        t: m.t,
        t_v: m.t_v,
        rank,
        backend: m.backend,
    };
    let params = FusionParams::init(&cfg, &mut rng).expect("default widths are valid");
    let q = Vector::uniform(m.t, 1.0, &mut rng);
    let v = Vector::uniform(m.t_v, 1.0, &mut rng);
    (params, q, v)
}

/// A default-width model and `n` encoded training examples.
pub fn training_fixture(n: usize) -> (Model, Vec<EncodedExample>) {
    let data = generate_dataset(n, 1, &GenConfig::default(), 3).expect("default generator config");
    let examples = encode_examples(&data.train, &data.manifest.render(), &world_vocabulary()).expect("encodable");
    let model = Model::init(
        &ModelConfig::default(),
        world_vocabulary().len(),
        world_answers().len(),
        CELL_DIM,
        &mut ChaCha8Rng::seed_from_u64(1),
    )
    .expect("default model config");
    (model, examples)
}
