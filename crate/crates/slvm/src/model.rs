//! The assembled model: feature provider, prior module, prompt learner,
//! frozen decoder, and the ablation switches.
//!
//! Ablation semantics:
//! - `apl` off: the prediction is the normalized prior thresholded at 0.5
//!   and nearest-upsampled to query resolution; nothing trains.
//! - `pgml` off: the prior is a constant 0.5 map, so no support guidance
//!   reaches the gate or the fused features.
//! - `fsla` off: the fine-tuning phase never activates (`beta` forced 0).

use crate::apl::{self, FrozenDecoder, PromptLearnerParams};
use crate::augment::resize_pair;
use crate::episode::Episode;
use crate::error::{Error, Result};
use crate::features::{EmbeddingProvider, FeaturePair};
use crate::nn::nearest_resize;
use crate::pgml::{self, PriorMask};
use crate::tensor::Tensor;

/// Component toggles mirroring the ablation study rows.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct AblationFlags {
    pub apl: bool,
    pub pgml: bool,
    pub fsla: bool,
}

impl AblationFlags {
    pub const ALL_ON: AblationFlags = AblationFlags {
        apl: true,
        pgml: true,
        fsla: true,
    };

    pub const ALL_OFF: AblationFlags = AblationFlags {
        apl: false,
        pgml: false,
        fsla: false,
    };

    /// The four standard ablation rows, weakest first.
    pub fn study_rows() -> [AblationFlags; 4] {
        [
            AblationFlags::ALL_OFF,
            AblationFlags {
                apl: true,
                pgml: false,
                fsla: false,
            },
            AblationFlags {
                apl: true,
                pgml: true,
                fsla: false,
            },
            AblationFlags::ALL_ON,
        ]
    }

    /// Stable `apl,pgml,fsla` encoding, e.g. `1,1,0`.
    pub fn encode(&self) -> String {
        format!(
            "{},{},{}",
            self.apl as u8, self.pgml as u8, self.fsla as u8
        )
    }

    /// Parse flags like `apl,pgml` (named, comma separated; absent = off)
    /// or `1,1,0` (positional).
    pub fn parse(text: &str) -> Result<AblationFlags> {
        let text = text.trim();
        if text.is_empty() {
            return Ok(AblationFlags::ALL_OFF);
        }
        let parts: Vec<&str> = text.split(',').map(str::trim).collect();
        if parts.len() == 3 && parts.iter().all(|p| *p == "0" || *p == "1") {
            return Ok(AblationFlags {
                apl: parts[0] == "1",
                pgml: parts[1] == "1",
                fsla: parts[2] == "1",
            });
        }
        let mut flags = AblationFlags::ALL_OFF;
        for part in parts {
            match part {
                "apl" => flags.apl = true,
                "pgml" => flags.pgml = true,
                "fsla" => flags.fsla = true,
                other => {
                    return Err(Error::Config(format!(
                        "unknown ablation flag `{other}` (expected apl, pgml, fsla)"
                    )))
                }
            }
        }
        Ok(flags)
    }
}

/// A trained (or untrained, for ablation baselines) model ready to predict.
pub struct SlvmModel {
    pub provider: Box<dyn EmbeddingProvider>,
    pub decoder: FrozenDecoder,
    pub params: PromptLearnerParams,
    pub flags: AblationFlags,
    /// Side length images are resized to before encoding.
    pub image_size: usize,
}

/// Per-member features of an episode, after resizing to the working size.
pub struct EpisodeFeatures {
    pub supports: Vec<(FeaturePair, crate::tensor::BinaryMask)>,
    pub query: FeaturePair,
    /// Query mask at the working size.
    pub query_mask: crate::tensor::BinaryMask,
    /// Original query dimensions, for reporting predictions at native size.
    pub native_h: usize,
    pub native_w: usize,
}

impl SlvmModel {
    /// Resize every member to the working size and run the provider.
    pub fn episode_features(&self, episode: &Episode) -> Result<EpisodeFeatures> {
        let size = self.image_size;
        let mut supports = Vec::with_capacity(episode.supports.len());
        for member in &episode.supports {
            let (img, mask) = resize_pair(&member.image, &member.mask, size, size);
            supports.push((self.provider.features(&member.id, &img)?, mask));
        }
        let (qimg, qmask) = resize_pair(&episode.query.image, &episode.query.mask, size, size);
        let query = self.provider.features(&episode.query.id, &qimg)?;
        Ok(EpisodeFeatures {
            supports,
            query,
            query_mask: qmask,
            native_h: episode.query.image.height(),
            native_w: episode.query.image.width(),
        })
    }

    /// The episode's prior mask under the current flags.
    pub fn prior_for(&self, feats: &EpisodeFeatures, target_class: u8) -> Result<PriorMask> {
        if !self.flags.pgml {
            let (h, w, _) = feats.query.high.shape();
            return Ok(PriorMask::constant(h, w, target_class));
        }
        let supports: Vec<(Tensor, crate::tensor::BinaryMask)> = feats
            .supports
            .iter()
            .map(|(f, m)| (f.high.clone(), m.clone()))
            .collect();
        pgml::episode_prior(&feats.query.high, &supports, target_class)
    }

    /// Predict query-mask probabilities at the query's native resolution.
    pub fn predict_episode(&self, episode: &Episode) -> Result<Tensor> {
        episode.validate()?;
        let (native_h, native_w) = (
            episode.query.image.height(),
            episode.query.image.width(),
        );
        if !self.flags.apl && !self.flags.pgml {
            // constant 0.5 prior thresholded at 0.5: everything foreground
            return Ok(Tensor::filled(native_h, native_w, 1, 1.0));
        }
        let feats = self.episode_features(episode)?;
        let prior = self.prior_for(&feats, episode.target_class)?;

        if !self.flags.apl {
            // prior-only prediction: threshold, then nearest-upsample
            let binary = prior.normalized.map(|v| (v >= 0.5) as u8 as f64);
            return Ok(nearest_resize(&binary, native_h, native_w));
        }

        let fused = pgml::fuse(&feats.query.mid, &prior);
        let trace = apl::forward(
            &self.params,
            &self.decoder,
            &fused,
            &prior,
            &feats.query.high,
            self.image_size,
            self.image_size,
        )?;
        // report at native resolution
        Ok(crate::nn::bilinear_resize(&trace.probs, native_h, native_w))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::apl::DecoderConfig;
    use crate::dataset::partition_folds;
    use crate::episode::sample_episode;
    use crate::features::{EncoderConfig, SurrogateEncoder};
    use crate::fixture;

    fn build_model(flags: AblationFlags) -> SlvmModel {
        let encoder = SurrogateEncoder::build(0, EncoderConfig::default());
        let (c_h, c_m) = encoder.channels();
        SlvmModel {
            provider: Box::new(encoder),
            decoder: FrozenDecoder::build(c_h, 1, DecoderConfig::default()),
            params: PromptLearnerParams::init(c_m + 1, 8, c_h, 2),
            flags,
            image_size: 64,
        }
    }

    #[test]
    fn flags_round_trip_both_syntaxes() {
        for flags in AblationFlags::study_rows() {
            assert_eq!(AblationFlags::parse(&flags.encode()).unwrap(), flags);
        }
        assert_eq!(
            AblationFlags::parse("apl,fsla").unwrap(),
            AblationFlags {
                apl: true,
                pgml: false,
                fsla: true
            }
        );
        assert!(AblationFlags::parse("apl,bogus").is_err());
    }

    #[test]
    fn study_rows_are_the_four_standard_configurations() {
        let rows = AblationFlags::study_rows();
        let encoded: Vec<String> = rows.iter().map(|f| f.encode()).collect();
        assert_eq!(encoded, vec!["0,0,0", "1,0,0", "1,1,0", "1,1,1"]);
    }

    #[test]
    fn prediction_shapes_and_ranges_per_flag_row() {
        let ds = fixture::generate(0, 24, 64);
        let split = partition_folds(&ds.classes_by_name(), &[3, 2], 1).unwrap();
        let episode = sample_episode(&ds, &split, 3, 1, 5).unwrap();
        for flags in AblationFlags::study_rows() {
            let model = build_model(flags);
            let pred = model.predict_episode(&episode).unwrap();
            assert_eq!(pred.shape(), (64, 64, 1), "flags {}", flags.encode());
            assert!(pred.data().iter().all(|&v| (0.0..=1.0).contains(&v)));
        }
    }

    #[test]
    fn all_off_predicts_everything_foreground() {
        let ds = fixture::generate(0, 24, 64);
        let split = partition_folds(&ds.classes_by_name(), &[3, 2], 1).unwrap();
        let episode = sample_episode(&ds, &split, 4, 1, 9).unwrap();
        let model = build_model(AblationFlags::ALL_OFF);
        let pred = model.predict_episode(&episode).unwrap();
        assert!(pred.data().iter().all(|&v| v == 1.0));
    }

    #[test]
    fn prediction_is_deterministic() {
        let ds = fixture::generate(0, 24, 64);
        let split = partition_folds(&ds.classes_by_name(), &[3, 2], 1).unwrap();
        let episode = sample_episode(&ds, &split, 3, 2, 11).unwrap();
        let model = build_model(AblationFlags::ALL_ON);
        let a = model.predict_episode(&episode).unwrap();
        let b = model.predict_episode(&episode).unwrap();
        assert_eq!(a, b);
    }
}
