//! Diagnostic: desk-scale training trajectories across hyperparameters.

use slvm::apl::{DecoderConfig, FrozenDecoder};
use slvm::dataset::partition_folds;
use slvm::features::{EmbeddingProvider, EncoderConfig, SurrogateEncoder};
use slvm::fixture;
use slvm::model::AblationFlags;
use slvm::train::{train, TrainConfig};

fn main() {
    let ds = fixture::generate(0, 60, 64);
    let split = partition_folds(&ds.classes_by_name(), &[3, 2], 1).unwrap();
    let encoder = SurrogateEncoder::build(0, EncoderConfig::default());
    let decoder = FrozenDecoder::build(encoder.channels().0, 1, DecoderConfig::default());

    for (lr, epochs, augment) in [(0.001, 150, false), (0.003, 150, false), (0.003, 150, true)] {
        let config = TrainConfig {
            lr,
            epochs,
            episodes_per_epoch: 16,
            image_size: 128,
            augment,
            seed: 0,
            ..TrainConfig::default()
        };
        let t0 = std::time::Instant::now();
        let outcome = train(&config, &ds, &split, &encoder, &decoder, AblationFlags::ALL_ON)
            .unwrap();
        let mean = |e: usize| outcome.log.epoch_mean_self_guidance(e).unwrap();
        println!(
            "lr {lr} augment {augment}: Ls {:.4} / {:.4} / {:.4} / {:.4} / {:.4}  ({:.1}s)",
            mean(0),
            mean(25),
            mean(50),
            mean(100),
            mean(epochs - 1),
            t0.elapsed().as_secs_f64()
        );
    }
}
