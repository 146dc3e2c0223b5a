//! Frozen feature providers.
//!
//! A provider maps an image to a [`FeaturePair`]: high-level features at a
//! coarse resolution and intermediate features one stage earlier. Two
//! implementations exist — a small seeded convolutional encoder that stands
//! in for a large pretrained backbone, and a reader for precomputed
//! embedding caches produced by an external exporter. Both are frozen:
//! their output is a pure function of the input, and the surrogate's
//! parameter fingerprint is checked before and after every training run.

use std::path::{Path, PathBuf};

use crate::cache;
use crate::error::{Error, Result};
use crate::fingerprint::digest_params;
use crate::nn::{relu, Conv2d};
use crate::rng::derive_seed;
use crate::tensor::Tensor;

/// High-level (`high`) and intermediate (`mid`) feature maps for one image.
#[derive(Debug, Clone, PartialEq)]
pub struct FeaturePair {
    pub high: Tensor,
    pub mid: Tensor,
    pub source_id: String,
    pub encoder_fingerprint: String,
}

impl FeaturePair {
    pub fn new(
        high: Tensor,
        mid: Tensor,
        source_id: impl Into<String>,
        encoder_fingerprint: impl Into<String>,
    ) -> Result<Self> {
        if !high.all_finite() || !mid.all_finite() {
            return Err(Error::Shape("non-finite feature values".into()));
        }
        if high.height() > mid.height() || high.width() > mid.width() {
            return Err(Error::Shape(format!(
                "high-level features {:?} finer than intermediate {:?}",
                high.shape(),
                mid.shape()
            )));
        }
        Ok(FeaturePair {
            high,
            mid,
            source_id: source_id.into(),
            encoder_fingerprint: encoder_fingerprint.into(),
        })
    }
}

/// Anything that can produce frozen features for an image.
pub trait EmbeddingProvider: Send + Sync {
    fn features(&self, id: &str, image: &Tensor) -> Result<FeaturePair>;

    /// Digest identifying the parameter set (or cache) behind this provider.
    fn fingerprint(&self) -> &str;

    /// Recomputed digest of the current state; diverges from
    /// [`Self::fingerprint`] only if frozen parameters drifted.
    fn live_fingerprint(&self) -> String {
        self.fingerprint().to_string()
    }

    /// Spatial stride from input to the high-level / intermediate maps.
    fn strides(&self) -> (usize, usize);

    /// Channel counts of the high-level / intermediate maps.
    fn channels(&self) -> (usize, usize);
}

/// Architecture of the surrogate encoder: four stride-2 stages; the
/// intermediate tap is stage 3, the high-level tap stage 4.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct EncoderConfig {
    pub stage_channels: [usize; 4],
}

impl Default for EncoderConfig {
    fn default() -> Self {
        EncoderConfig {
            stage_channels: [16, 32, 64, 128],
        }
    }
}

impl EncoderConfig {
    pub fn mid_channels(&self) -> usize {
        self.stage_channels[2]
    }

    pub fn high_channels(&self) -> usize {
        self.stage_channels[3]
    }
}

/// Minimum input side length the encoder accepts.
pub const MIN_INPUT: usize = 16;

/// A small frozen convolutional encoder, deterministic in its seed.
#[derive(Debug, Clone)]
pub struct SurrogateEncoder {
    stages: Vec<Conv2d>,
    config: EncoderConfig,
    fingerprint: String,
}

impl SurrogateEncoder {
    pub fn build(seed: u64, config: EncoderConfig) -> Self {
        let mut stages = Vec::with_capacity(4);
        let mut in_ch = 3;
        for (i, &out_ch) in config.stage_channels.iter().enumerate() {
            stages.push(Conv2d::init(
                in_ch,
                out_ch,
                3,
                2,
                1,
                true,
                derive_seed(seed, i as u64),
            ));
            in_ch = out_ch;
        }
        let fingerprint = fingerprint_of(&stages);
        SurrogateEncoder {
            stages,
            config,
            fingerprint,
        }
    }

    pub fn config(&self) -> &EncoderConfig {
        &self.config
    }

    /// Recompute the digest from the current parameters. Equal to
    /// [`Self::fingerprint`] unless something mutated the weights.
    pub fn current_fingerprint(&self) -> String {
        fingerprint_of(&self.stages)
    }

    /// Run the frozen encoder. Features are quantized to `f32` precision so
    /// they survive the embedding cache bit for bit.
    pub fn encode(&self, id: &str, image: &Tensor) -> Result<FeaturePair> {
        let (h, w, c) = image.shape();
        if c != 3 {
            return Err(Error::Shape(format!("encoder expects 3 channels, got {c}")));
        }
        if h < MIN_INPUT || w < MIN_INPUT {
            return Err(Error::Shape(format!(
                "encoder expects at least {MIN_INPUT}x{MIN_INPUT} input, got {h}x{w}"
            )));
        }
        let mut x = image.clone();
        let mut mid = None;
        for (i, stage) in self.stages.iter().enumerate() {
            x = relu(&stage.forward(&x)?);
            if i == 2 {
                mid = Some(x.clone());
            }
        }
        let mut mid = mid.expect("four-stage encoder");
        mid.quantize_f32();
        x.quantize_f32();
        FeaturePair::new(x, mid, id, self.fingerprint.clone())
    }

    #[cfg(test)]
    pub(crate) fn perturb_for_test(&mut self) {
        self.stages[0].weight[0] += 1e-3;
    }
}

fn fingerprint_of(stages: &[Conv2d]) -> String {
    let names: Vec<String> = (0..stages.len())
        .flat_map(|i| [format!("stage{i}.weight"), format!("stage{i}.bias")])
        .collect();
    let mut tensors: Vec<(&str, &[f64])> = Vec::new();
    for (i, s) in stages.iter().enumerate() {
        tensors.push((&names[i * 2], &s.weight));
        if let Some(b) = &s.bias {
            tensors.push((&names[i * 2 + 1], b));
        }
    }
    digest_params(tensors.into_iter())
}

impl EmbeddingProvider for SurrogateEncoder {
    fn features(&self, id: &str, image: &Tensor) -> Result<FeaturePair> {
        self.encode(id, image)
    }

    fn fingerprint(&self) -> &str {
        &self.fingerprint
    }

    fn live_fingerprint(&self) -> String {
        self.current_fingerprint()
    }

    fn strides(&self) -> (usize, usize) {
        (16, 8)
    }

    fn channels(&self) -> (usize, usize) {
        (self.config.high_channels(), self.config.mid_channels())
    }
}

/// True iff the encoder's parameters still digest to `reference`.
pub fn verify_frozen(encoder: &SurrogateEncoder, reference: &str) -> bool {
    encoder.current_fingerprint() == reference
}

/// Save both levels of a feature pair as `<id>.high.bin` / `<id>.mid.bin`
/// under `dir`.
pub fn save_cached_embedding(pair: &FeaturePair, dir: &Path) -> Result<()> {
    let (high_path, mid_path) = cache::feature_paths(dir, &pair.source_id);
    cache::save_feature_tensor(&high_path, &pair.high)?;
    cache::save_feature_tensor(&mid_path, &pair.mid)
}

/// Load the feature pair for `id` from a cache directory.
pub fn load_cached_embedding(dir: &Path, id: &str, fingerprint: &str) -> Result<FeaturePair> {
    let (high_path, mid_path) = cache::feature_paths(dir, id);
    let high = cache::load_feature_tensor(&high_path)?;
    let mid = cache::load_feature_tensor(&mid_path)?;
    FeaturePair::new(high, mid, id, fingerprint)
}

/// Provider backed by a directory of precomputed embeddings.
#[derive(Debug, Clone)]
pub struct CachedEmbeddings {
    dir: PathBuf,
    fingerprint: String,
    strides: (usize, usize),
    channels: (usize, usize),
}

impl CachedEmbeddings {
    /// Open a cache directory. Strides and channel counts are read off one
    /// probe entry so downstream modules can size themselves.
    pub fn open(dir: impl Into<PathBuf>, probe_id: &str, input_side: usize) -> Result<Self> {
        let dir = dir.into();
        let pair = load_cached_embedding(&dir, probe_id, "probe")?;
        let high_stride = input_side / pair.high.height().max(1);
        let mid_stride = input_side / pair.mid.height().max(1);
        let fingerprint = format!(
            "cache:{}",
            crate::fingerprint::digest_bytes(dir.to_string_lossy().as_bytes())
        );
        Ok(CachedEmbeddings {
            dir,
            fingerprint,
            strides: (high_stride, mid_stride),
            channels: (pair.high.channels(), pair.mid.channels()),
        })
    }
}

impl EmbeddingProvider for CachedEmbeddings {
    fn features(&self, id: &str, _image: &Tensor) -> Result<FeaturePair> {
        load_cached_embedding(&self.dir, id, &self.fingerprint)
    }

    fn fingerprint(&self) -> &str {
        &self.fingerprint
    }

    fn strides(&self) -> (usize, usize) {
        self.strides
    }

    fn channels(&self) -> (usize, usize) {
        self.channels
    }
}
