//! Diagnostic: relative magnitudes at the decoder input.

use slvm::apl::{self, DecoderConfig, FrozenDecoder, PromptLearnerParams, DEFAULT_HIDDEN};
use slvm::augment::resize_pair;
use slvm::dataset::partition_folds;
use slvm::episode::sample_episode;
use slvm::features::{EmbeddingProvider, EncoderConfig, SurrogateEncoder};
use slvm::{fixture, pgml};

fn stats(name: &str, t: &slvm::Tensor) {
    let n = t.len() as f64;
    let mean_abs = t.data().iter().map(|v| v.abs()).sum::<f64>() / n;
    let max = t.data().iter().fold(0.0f64, |m, v| m.max(v.abs()));
    println!("{name:16} mean|x| {mean_abs:9.4}  max|x| {max:9.4}");
}

fn main() {
    let ds = fixture::generate(0, 60, 64);
    let split = partition_folds(&ds.classes_by_name(), &[3, 2], 1).unwrap();
    let encoder = SurrogateEncoder::build(0, EncoderConfig::default());
    let (c_h, c_m) = encoder.channels();
    let decoder = FrozenDecoder::build(c_h, 1, DecoderConfig::default());
    let params = PromptLearnerParams::init(c_m + 1, DEFAULT_HIDDEN, c_h, 42);
    let size = 128usize;

    let ep = sample_episode(&ds, &split, 1, 1, 3).unwrap();
    let (qi, _) = resize_pair(&ep.query.image, &ep.query.mask, size, size);
    let (si, sm) = resize_pair(&ep.supports[0].image, &ep.supports[0].mask, size, size);
    let qf = encoder.features(&ep.query.id, &qi).unwrap();
    let sf = encoder.features(&ep.supports[0].id, &si).unwrap();
    let prior = pgml::episode_prior(&qf.high, &[(sf.high.clone(), sm)], 1).unwrap();
    let fused = pgml::fuse(&qf.mid, &prior);

    stats("E_H (query)", &qf.high);
    stats("E_M (query)", &qf.mid);
    let pe = apl::embed_prior(&params, &prior);
    stats("prior embed", &pe);
    let w = apl::derive_prompt_indicators(&params, &fused, &prior).unwrap();
    stats("w", &w);
    let gate = apl::gate(&w, &qf.high, &pe).unwrap();
    stats("gated image", &gate.gated_image);
    stats("gated prior", &gate.gated_prior);
    let trace = apl::forward(&params, &decoder, &fused, &prior, &qf.high, size, size).unwrap();
    stats("probs", &trace.probs);
}
