//! Automatic prompt learning.
//!
//! A small trainable head turns the fused query features and the prior
//! mask into soft prompt indicators `w` in `(0, 1)`; a bias-free 1x1 lift
//! embeds the prior into feature space. The frozen decoder then consumes
//! `w * high_features` and `(1 - w) * prior_embedding` (concatenated along
//! channels) and emits one logit map, upsampled to the query resolution.
//!
//! Only the head and the lift are trainable; gradients reach them through
//! the frozen decoder via the hand-written backward pass at the bottom of
//! this module, which is finite-difference checked in the tests.

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::fingerprint::digest_params;
use crate::nn::{
    bilinear_resize, bilinear_resize_backward, relu, relu_backward, sigmoid, sigmoid_backward,
    Conv2d,
};
use crate::pgml::{FusedQueryFeatures, PriorMask};
use crate::rng::derive_seed;
use crate::tensor::Tensor;

/// Prior odds are clipped to this range before entering the gate logit, so
/// extreme prior values bias the gate strongly without saturating it.
const PRIOR_LOGIT_CLIP: f64 = 0.01;

/// The trainable parameters: a two-layer conv head producing the prompt
/// indicators, and the prior embedding lift. Nothing else trains.
#[derive(Debug, Clone)]
pub struct PromptLearnerParams {
    /// 3x3, fused channels (C_M + 1) -> hidden.
    pub conv1: Conv2d,
    /// 3x3, hidden -> 1 logit channel.
    pub conv2: Conv2d,
    /// 1x1 bias-free lift, 1 -> C_H.
    pub lift: Conv2d,
}

pub const DEFAULT_HIDDEN: usize = 32;

impl PromptLearnerParams {
    pub fn init(fused_channels: usize, hidden: usize, high_channels: usize, seed: u64) -> Self {
        let mut params = PromptLearnerParams {
            conv1: Conv2d::init(fused_channels, hidden, 3, 1, 1, true, derive_seed(seed, 101)),
            conv2: Conv2d::init(hidden, 1, 3, 1, 1, true, derive_seed(seed, 102)),
            lift: Conv2d::init(1, high_channels, 1, 1, 0, false, derive_seed(seed, 103)),
        };
        params.quantize_f32();
        params
    }

    /// Keep parameters on the `f32` grid so checkpoints (which store 32-bit
    /// floats) round-trip bit-exactly. Called at init and after optimizer
    /// steps.
    pub fn quantize_f32(&mut self) {
        for conv in [&mut self.conv1, &mut self.conv2, &mut self.lift] {
            for w in &mut conv.weight {
                *w = *w as f32 as f64;
            }
            if let Some(b) = &mut conv.bias {
                for v in b {
                    *v = *v as f32 as f64;
                }
            }
        }
    }

    /// All-zero parameters; with these the head is silent and `w` is driven
    /// by the prior alone.
    pub fn zeroed(fused_channels: usize, hidden: usize, high_channels: usize) -> Self {
        let mut p = Self::init(fused_channels, hidden, high_channels, 0);
        for conv in [&mut p.conv1, &mut p.conv2, &mut p.lift] {
            conv.weight.iter_mut().for_each(|w| *w = 0.0);
            if let Some(b) = &mut conv.bias {
                b.iter_mut().for_each(|v| *v = 0.0);
            }
        }
        p
    }

    /// Canonical (name, values) listing; fixes the flatten order used by
    /// the optimizer, the fingerprint, and the checkpoint format.
    pub fn tensors(&self) -> Vec<(&'static str, &[f64])> {
        let mut out: Vec<(&'static str, &[f64])> = vec![
            ("indicator.conv1.weight", &self.conv1.weight),
            ("indicator.conv1.bias", self.conv1.bias.as_deref().unwrap_or(&[])),
            ("indicator.conv2.weight", &self.conv2.weight),
            ("indicator.conv2.bias", self.conv2.bias.as_deref().unwrap_or(&[])),
            ("prior_embed.weight", &self.lift.weight),
        ];
        out.retain(|(_, v)| !v.is_empty());
        out
    }

    pub fn fingerprint(&self) -> String {
        digest_params(self.tensors().into_iter())
    }

    pub fn param_count(&self) -> usize {
        self.tensors().iter().map(|(_, v)| v.len()).sum()
    }

    /// Flatten into one vector in canonical order.
    pub fn flatten(&self) -> Vec<f64> {
        self.tensors()
            .into_iter()
            .flat_map(|(_, v)| v.iter().copied().collect::<Vec<_>>())
            .collect()
    }

    /// Overwrite parameters from a flat vector in canonical order.
    pub fn unflatten(&mut self, flat: &[f64]) {
        assert_eq!(flat.len(), self.param_count(), "flat parameter length");
        let mut off = 0;
        let mut take = |dst: &mut [f64]| {
            dst.copy_from_slice(&flat[off..off + dst.len()]);
            off += dst.len();
        };
        take(&mut self.conv1.weight);
        take(self.conv1.bias.as_deref_mut().expect("conv1 has bias"));
        take(&mut self.conv2.weight);
        take(self.conv2.bias.as_deref_mut().expect("conv2 has bias"));
        take(&mut self.lift.weight);
    }
}

/// Gradients mirroring [`PromptLearnerParams::flatten`] order.
#[derive(Debug, Clone)]
pub struct ParamGrads {
    pub conv1_weight: Vec<f64>,
    pub conv1_bias: Vec<f64>,
    pub conv2_weight: Vec<f64>,
    pub conv2_bias: Vec<f64>,
    pub lift_weight: Vec<f64>,
}

impl ParamGrads {
    pub fn zeros_like(params: &PromptLearnerParams) -> Self {
        ParamGrads {
            conv1_weight: vec![0.0; params.conv1.weight.len()],
            conv1_bias: vec![0.0; params.conv1.bias.as_ref().map_or(0, Vec::len)],
            conv2_weight: vec![0.0; params.conv2.weight.len()],
            conv2_bias: vec![0.0; params.conv2.bias.as_ref().map_or(0, Vec::len)],
            lift_weight: vec![0.0; params.lift.weight.len()],
        }
    }

    pub fn flatten(&self) -> Vec<f64> {
        let mut out = Vec::new();
        out.extend_from_slice(&self.conv1_weight);
        out.extend_from_slice(&self.conv1_bias);
        out.extend_from_slice(&self.conv2_weight);
        out.extend_from_slice(&self.conv2_bias);
        out.extend_from_slice(&self.lift_weight);
        out
    }

    pub fn add_assign(&mut self, other: &ParamGrads) {
        let pairs = [
            (&mut self.conv1_weight, &other.conv1_weight),
            (&mut self.conv1_bias, &other.conv1_bias),
            (&mut self.conv2_weight, &other.conv2_weight),
            (&mut self.conv2_bias, &other.conv2_bias),
            (&mut self.lift_weight, &other.lift_weight),
        ];
        for (dst, src) in pairs {
            for (d, s) in dst.iter_mut().zip(src) {
                *d += s;
            }
        }
    }

    pub fn scale(&mut self, factor: f64) {
        for v in self
            .conv1_weight
            .iter_mut()
            .chain(&mut self.conv1_bias)
            .chain(&mut self.conv2_weight)
            .chain(&mut self.conv2_bias)
            .chain(&mut self.lift_weight)
        {
            *v *= factor;
        }
    }
}

/// The frozen mask decoder: two fusion conv blocks with 2x bilinear
/// upsampling stages, then a 1x1 head emitting a single logit channel.
/// Seeded deterministically and never trained.
#[derive(Debug, Clone)]
pub struct FrozenDecoder {
    fuse1: Conv2d,
    fuse2: Conv2d,
    head: Conv2d,
    fingerprint: String,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DecoderConfig {
    pub fuse_channels: [usize; 2],
    /// Init gain on the logit head; sized so untrained logits span O(1)
    /// rather than hugging zero, which would flatten every output to 0.5.
    pub head_gain: f64,
}

impl Default for DecoderConfig {
    fn default() -> Self {
        DecoderConfig {
            fuse_channels: [64, 16],
            head_gain: 3.0,
        }
    }
}

impl FrozenDecoder {
    pub fn build(high_channels: usize, seed: u64, config: DecoderConfig) -> Self {
        let [c1, c2] = config.fuse_channels;
        let fuse1 = Conv2d::init(2 * high_channels, c1, 3, 1, 1, true, derive_seed(seed, 201));
        let fuse2 = Conv2d::init(c1, c2, 3, 1, 1, true, derive_seed(seed, 202));
        let mut head = Conv2d::init(c2, 1, 1, 1, 0, true, derive_seed(seed, 203));
        for w in &mut head.weight {
            *w *= config.head_gain;
        }
        let fingerprint = Self::fingerprint_of(&fuse1, &fuse2, &head);
        FrozenDecoder {
            fuse1,
            fuse2,
            head,
            fingerprint,
        }
    }

    fn fingerprint_of(fuse1: &Conv2d, fuse2: &Conv2d, head: &Conv2d) -> String {
        let mut tensors: Vec<(&str, &[f64])> = Vec::new();
        for (name_w, name_b, conv) in [
            ("fuse1.weight", "fuse1.bias", fuse1),
            ("fuse2.weight", "fuse2.bias", fuse2),
            ("head.weight", "head.bias", head),
        ] {
            tensors.push((name_w, &conv.weight));
            if let Some(b) = &conv.bias {
                tensors.push((name_b, b));
            }
        }
        digest_params(tensors.into_iter())
    }

    pub fn fingerprint(&self) -> &str {
        &self.fingerprint
    }

    /// Recompute the digest from current parameters; differs from
    /// [`Self::fingerprint`] only if something mutated the weights.
    pub fn current_fingerprint(&self) -> String {
        Self::fingerprint_of(&self.fuse1, &self.fuse2, &self.head)
    }

    pub fn input_channels(&self) -> usize {
        self.fuse1.in_ch
    }

    #[cfg(test)]
    pub(crate) fn perturb_for_test(&mut self) {
        self.fuse1.weight[0] += 1e-3;
    }
}

/// The prompt gate of one query: the indicator field and both gated
/// operands handed to the frozen decoder.
#[derive(Debug, Clone)]
pub struct PromptGate {
    /// `h_H x w_H x 1`, entries in `[0, 1]`.
    pub w: Tensor,
    /// `w * image_high`.
    pub gated_image: Tensor,
    /// `(1 - w) * prior_embedding`.
    pub gated_prior: Tensor,
}

/// Elementwise gating: `w * image_high` and `(1 - w) * prior_embedding`.
pub fn gate(w: &Tensor, image_high: &Tensor, prior_embedding: &Tensor) -> Result<PromptGate> {
    let (h, ww, c) = image_high.shape();
    if w.shape() != (h, ww, 1) {
        return Err(Error::Shape(format!(
            "indicator {:?} does not match features {:?}",
            w.shape(),
            image_high.shape()
        )));
    }
    if prior_embedding.shape() != (h, ww, c) {
        return Err(Error::Shape(format!(
            "prior embedding {:?} does not match features {:?}",
            prior_embedding.shape(),
            image_high.shape()
        )));
    }
    let mut gated_image = Tensor::zeros(h, ww, c);
    let mut gated_prior = Tensor::zeros(h, ww, c);
    for y in 0..h {
        for x in 0..ww {
            let g = w.at(y, x, 0);
            for ch in 0..c {
                *gated_image.at_mut(y, x, ch) = g * image_high.at(y, x, ch);
                *gated_prior.at_mut(y, x, ch) = (1.0 - g) * prior_embedding.at(y, x, ch);
            }
        }
    }
    Ok(PromptGate {
        w: w.clone(),
        gated_image,
        gated_prior,
    })
}

/// Logit of the clipped prior, centered per map. Min-max normalized priors
/// are often top-heavy; without centering the bias drives the gate toward 1
/// everywhere and the prior branch never reaches the decoder. A constant
/// prior yields an all-zero bias.
fn prior_logit_bias(prior_normalized: &Tensor) -> Tensor {
    let logits = prior_normalized.map(|p| {
        let p = p.clamp(PRIOR_LOGIT_CLIP, 1.0 - PRIOR_LOGIT_CLIP);
        (p / (1.0 - p)).ln()
    });
    let mean = logits.data().iter().sum::<f64>() / logits.len() as f64;
    logits.map(|v| v - mean)
}

/// Intermediates of the indicator head needed for its backward pass.
#[derive(Debug, Clone)]
pub struct HeadTrace {
    fused_small: Tensor,
    pre1: Tensor,
    act1: Tensor,
    pub w: Tensor,
}

/// Prompt indicators: the conv head runs on the fused features resized to
/// the prior grid, the normalized prior enters as a logit bias, and a
/// logistic squash keeps the output in `(0, 1)`.
pub fn derive_prompt_indicators(
    params: &PromptLearnerParams,
    fused: &FusedQueryFeatures,
    prior: &PriorMask,
) -> Result<Tensor> {
    Ok(derive_prompt_indicators_traced(params, fused, prior)?.w)
}

pub fn derive_prompt_indicators_traced(
    params: &PromptLearnerParams,
    fused: &FusedQueryFeatures,
    prior: &PriorMask,
) -> Result<HeadTrace> {
    let (ph, pw, _) = prior.normalized.shape();
    if fused.tensor.channels() != params.conv1.in_ch {
        return Err(Error::Shape(format!(
            "fused features have {} channels, head expects {}",
            fused.tensor.channels(),
            params.conv1.in_ch
        )));
    }
    let fused_small = bilinear_resize(&fused.tensor, ph, pw);
    let pre1 = params.conv1.forward(&fused_small)?;
    let act1 = relu(&pre1);
    let pre2 = params.conv2.forward(&act1)?;
    let z = pre2.zip(&prior_logit_bias(&prior.normalized), |a, b| a + b)?;
    let w = sigmoid(&z);
    Ok(HeadTrace {
        fused_small,
        pre1,
        act1,
        w,
    })
}

/// Gradients of the head parameters given the gradient w.r.t. `w`.
pub fn head_backward(
    params: &PromptLearnerParams,
    trace: &HeadTrace,
    d_w: &Tensor,
) -> (ParamGrads, ()) {
    let mut grads = ParamGrads::zeros_like(params);
    let d_z = sigmoid_backward(&trace.w, d_w);
    let (g2w, g2b) = params.conv2.backward_params(&trace.act1, &d_z);
    grads.conv2_weight = g2w;
    grads.conv2_bias = g2b.expect("conv2 has bias");
    let d_act1 = params
        .conv2
        .backward_input(&d_z, trace.act1.height(), trace.act1.width());
    let d_pre1 = relu_backward(&trace.pre1, &d_act1);
    let (g1w, g1b) = params.conv1.backward_params(&trace.fused_small, &d_pre1);
    grads.conv1_weight = g1w;
    grads.conv1_bias = g1b.expect("conv1 has bias");
    (grads, ())
}

/// Per-pixel lift of the 1-channel normalized prior to feature space.
/// Bias-free, so it is exactly linear in the prior.
pub fn embed_prior(params: &PromptLearnerParams, prior: &PriorMask) -> Tensor {
    params
        .lift
        .forward(&prior.normalized)
        .expect("1x1 lift accepts any single-channel map")
}

/// Run the frozen decoder on the gated tensors and upsample the logit map
/// to `out_h x out_w`. Intermediates are returned for the backward pass.
#[derive(Debug, Clone)]
pub struct DecodeTrace {
    dec_pre1: Tensor,
    dec_pre2: Tensor,
    /// Logits at the decoder's native (pre-final-upsample) resolution.
    small_h: usize,
    small_w: usize,
    pub logits: Tensor,
}

pub fn gate_and_decode(
    decoder: &FrozenDecoder,
    w: &Tensor,
    image_high: &Tensor,
    prior_embedding: &Tensor,
    out_h: usize,
    out_w: usize,
) -> Result<Tensor> {
    let gated = gate(w, image_high, prior_embedding)?;
    Ok(decode_gated(decoder, &gated, out_h, out_w)?.logits)
}

pub fn decode_gated(
    decoder: &FrozenDecoder,
    gated: &PromptGate,
    out_h: usize,
    out_w: usize,
) -> Result<DecodeTrace> {
    let concat = gated.gated_image.concat_channels(&gated.gated_prior)?;
    if concat.channels() != decoder.input_channels() {
        return Err(Error::Shape(format!(
            "decoder expects {} input channels, got {}",
            decoder.input_channels(),
            concat.channels()
        )));
    }
    let (h, w) = (concat.height(), concat.width());
    let dec_pre1 = decoder.fuse1.forward(&concat)?;
    let up1 = bilinear_resize(&relu(&dec_pre1), 2 * h, 2 * w);
    let dec_pre2 = decoder.fuse2.forward(&up1)?;
    let up2 = bilinear_resize(&relu(&dec_pre2), 4 * h, 4 * w);
    let logits_small = decoder.head.forward(&up2)?;
    let logits = bilinear_resize(&logits_small, out_h, out_w);
    Ok(DecodeTrace {
        dec_pre1,
        dec_pre2,
        small_h: 4 * h,
        small_w: 4 * w,
        logits,
    })
}

/// Everything the backward pass needs from one query's forward run.
#[derive(Debug, Clone)]
pub struct ForwardTrace {
    pub head: HeadTrace,
    prior_normalized: Tensor,
    prior_embedding: Tensor,
    image_high: Tensor,
    decode: DecodeTrace,
    /// Query-resolution probabilities, in `(0, 1)`.
    pub probs: Tensor,
}

impl ForwardTrace {
    pub fn indicators(&self) -> &Tensor {
        &self.head.w
    }
}

/// Full prompt-learning forward for one query: indicators, prior
/// embedding, gating, frozen decode, logistic output at `out_h x out_w`.
pub fn forward(
    params: &PromptLearnerParams,
    decoder: &FrozenDecoder,
    fused: &FusedQueryFeatures,
    prior: &PriorMask,
    image_high: &Tensor,
    out_h: usize,
    out_w: usize,
) -> Result<ForwardTrace> {
    let head = derive_prompt_indicators_traced(params, fused, prior)?;
    let prior_embedding = embed_prior(params, prior);
    let gated = gate(&head.w, image_high, &prior_embedding)?;
    let decode = decode_gated(decoder, &gated, out_h, out_w)?;
    let probs = sigmoid(&decode.logits);
    Ok(ForwardTrace {
        head,
        prior_normalized: prior.normalized.clone(),
        prior_embedding,
        image_high: image_high.clone(),
        decode,
        probs,
    })
}

/// Backpropagate `d_probs` (gradient w.r.t. the output probabilities)
/// through the frozen decoder into the trainable parameters. Decoder and
/// encoder weights receive no gradient by construction.
pub fn backward(
    params: &PromptLearnerParams,
    decoder: &FrozenDecoder,
    trace: &ForwardTrace,
    d_probs: &Tensor,
) -> ParamGrads {
    let (fh, fw, _) = trace.image_high.shape();
    // output logistic
    let d_logits = sigmoid_backward(&trace.probs, d_probs);
    // final upsample back to the decoder's native grid
    let d_small = bilinear_resize_backward(&d_logits, trace.decode.small_h, trace.decode.small_w);
    // frozen decoder, input gradients only
    let d_up2 = decoder
        .head
        .backward_input(&d_small, trace.decode.small_h, trace.decode.small_w);
    let d_act2 = bilinear_resize_backward(&d_up2, 2 * fh, 2 * fw);
    let d_pre2 = relu_backward(&trace.decode.dec_pre2, &d_act2);
    let d_up1 = decoder.fuse2.backward_input(&d_pre2, 2 * fh, 2 * fw);
    let d_act1 = bilinear_resize_backward(&d_up1, fh, fw);
    let d_pre1 = relu_backward(&trace.decode.dec_pre1, &d_act1);
    let d_concat = decoder.fuse1.backward_input(&d_pre1, fh, fw);
    let c_h = trace.image_high.channels();
    let (d_gated_image, d_gated_prior) = d_concat
        .split_channels(c_h)
        .expect("decoder input is the two gated halves");

    // gate: gated_image = w * E(X), gated_prior = (1 - w) * pe
    let mut d_w = Tensor::zeros(fh, fw, 1);
    let mut d_pe = Tensor::zeros(fh, fw, c_h);
    for y in 0..fh {
        for x in 0..fw {
            let mut acc = 0.0;
            let g = trace.head.w.at(y, x, 0);
            for ch in 0..c_h {
                acc += d_gated_image.at(y, x, ch) * trace.image_high.at(y, x, ch);
                acc -= d_gated_prior.at(y, x, ch) * trace.prior_embedding.at(y, x, ch);
                *d_pe.at_mut(y, x, ch) = (1.0 - g) * d_gated_prior.at(y, x, ch);
            }
            *d_w.at_mut(y, x, 0) = acc;
        }
    }

    // lift weights (input is the normalized prior, a constant)
    let (g_lift, _) = params.lift.backward_params(&trace.prior_normalized, &d_pe);
    // indicator head
    let (mut grads, ()) = head_backward(params, &trace.head, &d_w);
    grads.lift_weight = g_lift;
    grads
}

// ---------------------------------------------------------------------------
// Checkpoints: each tensor in the binary container, listed by a manifest.
// ---------------------------------------------------------------------------

pub const CHECKPOINT_MANIFEST: &str = "manifest.txt";

/// Fingerprints a checkpoint carries alongside the tensors.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CheckpointMeta {
    pub encoder_fingerprint: String,
    pub decoder_fingerprint: String,
    pub params_fingerprint: String,
}

fn conv_dims(conv: &Conv2d) -> Vec<u32> {
    vec![
        conv.out_ch as u32,
        conv.in_ch as u32,
        conv.k as u32,
        conv.k as u32,
    ]
}

/// Write the prompt-learner checkpoint: one container file per tensor plus
/// a manifest listing names, shapes, and the run fingerprints.
pub fn save_checkpoint(
    dir: &Path,
    params: &PromptLearnerParams,
    encoder_fingerprint: &str,
    decoder_fingerprint: &str,
) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let entries: Vec<(&str, Vec<u32>, &[f64])> = vec![
        ("indicator.conv1.weight", conv_dims(&params.conv1), &params.conv1.weight),
        (
            "indicator.conv1.bias",
            vec![params.conv1.out_ch as u32],
            params.conv1.bias.as_deref().expect("conv1 has bias"),
        ),
        ("indicator.conv2.weight", conv_dims(&params.conv2), &params.conv2.weight),
        (
            "indicator.conv2.bias",
            vec![params.conv2.out_ch as u32],
            params.conv2.bias.as_deref().expect("conv2 has bias"),
        ),
        ("prior_embed.weight", conv_dims(&params.lift), &params.lift.weight),
    ];
    let mut manifest = String::new();
    manifest.push_str(&format!("encoder_fingerprint {encoder_fingerprint}\n"));
    manifest.push_str(&format!("decoder_fingerprint {decoder_fingerprint}\n"));
    manifest.push_str(&format!("params_fingerprint {}\n", params.fingerprint()));
    for (name, dims, values) in &entries {
        let dim_str: Vec<String> = dims.iter().map(|d| d.to_string()).collect();
        manifest.push_str(&format!("tensor {name} {} {name}.bin\n", dim_str.join("x")));
        crate::cache::write_tensor_file(&dir.join(format!("{name}.bin")), dims, values)?;
    }
    let manifest_path = dir.join(CHECKPOINT_MANIFEST);
    fs::write(&manifest_path, manifest).map_err(|e| Error::io(&manifest_path, e))
}

/// Load a checkpoint; shapes are reconstructed from the manifest and the
/// stored fingerprint is verified against the loaded tensors.
pub fn load_checkpoint(dir: &Path) -> Result<(PromptLearnerParams, CheckpointMeta)> {
    let manifest_path = dir.join(CHECKPOINT_MANIFEST);
    let text = fs::read_to_string(&manifest_path).map_err(|e| Error::io(&manifest_path, e))?;
    let mut meta = CheckpointMeta {
        encoder_fingerprint: String::new(),
        decoder_fingerprint: String::new(),
        params_fingerprint: String::new(),
    };
    let mut tensors: Vec<(String, Vec<usize>)> = Vec::new();
    for line in text.lines() {
        let fields: Vec<&str> = line.split_whitespace().collect();
        match fields.as_slice() {
            ["encoder_fingerprint", v] => meta.encoder_fingerprint = v.to_string(),
            ["decoder_fingerprint", v] => meta.decoder_fingerprint = v.to_string(),
            ["params_fingerprint", v] => meta.params_fingerprint = v.to_string(),
            ["tensor", name, dims, _file] => {
                let parsed: std::result::Result<Vec<usize>, _> =
                    dims.split('x').map(str::parse).collect();
                let parsed = parsed.map_err(|_| {
                    Error::format(&manifest_path, format!("bad tensor dims `{dims}`"))
                })?;
                tensors.push((name.to_string(), parsed));
            }
            [] => {}
            _ => {
                return Err(Error::format(
                    &manifest_path,
                    format!("unrecognized manifest line `{line}`"),
                ))
            }
        }
    }

    let shape_of = |name: &str| -> Result<&Vec<usize>> {
        tensors
            .iter()
            .find(|(n, _)| n == name)
            .map(|(_, d)| d)
            .ok_or_else(|| Error::format(&manifest_path, format!("manifest lacks tensor {name}")))
    };
    let conv1_shape = shape_of("indicator.conv1.weight")?;
    let conv2_shape = shape_of("indicator.conv2.weight")?;
    let lift_shape = shape_of("prior_embed.weight")?;
    let (hidden, fused_channels) = (conv1_shape[0], conv1_shape[1]);
    if conv2_shape[1] != hidden || conv2_shape[0] != 1 {
        return Err(Error::format(&manifest_path, "head shapes inconsistent"));
    }
    let high_channels = lift_shape[0];

    let mut params = PromptLearnerParams::zeroed(fused_channels, hidden, high_channels);
    let load_into = |name: &str, dst: &mut [f64]| -> Result<()> {
        let path = dir.join(format!("{name}.bin"));
        let stored = crate::cache::read_tensor_file(&path)?;
        if stored.values.len() != dst.len() {
            return Err(Error::format(
                &path,
                format!("tensor holds {} values, expected {}", stored.values.len(), dst.len()),
            ));
        }
        dst.copy_from_slice(&stored.values);
        Ok(())
    };
    load_into("indicator.conv1.weight", &mut params.conv1.weight)?;
    load_into(
        "indicator.conv1.bias",
        params.conv1.bias.as_deref_mut().expect("bias"),
    )?;
    load_into("indicator.conv2.weight", &mut params.conv2.weight)?;
    load_into(
        "indicator.conv2.bias",
        params.conv2.bias.as_deref_mut().expect("bias"),
    )?;
    load_into("prior_embed.weight", &mut params.lift.weight)?;

    let fingerprint = params.fingerprint();
    if fingerprint != meta.params_fingerprint {
        return Err(Error::format(
            &manifest_path,
            format!(
                "params fingerprint mismatch: manifest {}, loaded {}",
                meta.params_fingerprint, fingerprint
            ),
        ));
    }
    Ok((params, meta))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::rng_from_seed;
    use proptest::prelude::*;
    use rand::Rng;

    fn random_tensor(h: usize, w: usize, c: usize, seed: u64) -> Tensor {
        let mut r = rng_from_seed(seed);
        Tensor::from_vec(h, w, c, (0..h * w * c).map(|_| r.gen_range(-1.0..1.0)).collect())
            .unwrap()
    }

    fn random_prior(h: usize, w: usize, seed: u64) -> PriorMask {
        let mut r = rng_from_seed(seed);
        let raw =
            Tensor::from_vec(h, w, 1, (0..h * w).map(|_| r.gen_range(-1.0..1.0)).collect())
                .unwrap();
        PriorMask::from_raw(raw, 1).unwrap()
    }

    fn small_setup(seed: u64) -> (PromptLearnerParams, FusedQueryFeatures, PriorMask, Tensor) {
        // tiny dims keep finite differences cheap: C_M = 3, C_H = 4, hidden 4
        let params = PromptLearnerParams::init(4, 4, 4, seed);
        let fused = FusedQueryFeatures {
            tensor: random_tensor(6, 6, 4, seed.wrapping_add(1)),
        };
        let prior = random_prior(3, 3, seed.wrapping_add(2));
        let image_high = random_tensor(3, 3, 4, seed.wrapping_add(3));
        (params, fused, prior, image_high)
    }

    fn max_rel_err(analytic: &[f64], numeric: &[f64]) -> f64 {
        let scale = analytic
            .iter()
            .chain(numeric)
            .fold(0.0f64, |m, v| m.max(v.abs()))
            .max(1e-8);
        analytic
            .iter()
            .zip(numeric)
            .fold(0.0f64, |m, (a, n)| m.max((a - n).abs()))
            / scale
    }

    #[test]
    fn indicators_stay_strictly_inside_unit_interval() {
        let (params, fused, prior, _) = small_setup(1);
        let w = derive_prompt_indicators(&params, &fused, &prior).unwrap();
        assert!(w.data().iter().all(|&v| v > 0.0 && v < 1.0));
    }

    #[test]
    fn zero_head_and_flat_prior_give_a_constant_map() {
        let params = PromptLearnerParams::zeroed(4, 4, 4);
        let fused = FusedQueryFeatures {
            tensor: random_tensor(6, 6, 4, 5),
        };
        let prior = PriorMask::constant(3, 3, 1);
        let w = derive_prompt_indicators(&params, &fused, &prior).unwrap();
        assert!(w.data().iter().all(|&v| (v - 0.5).abs() < 1e-12));
    }

    #[test]
    fn head_gradient_matches_finite_differences() {
        // d mean(w) / d head params, central differences with step 1e-3
        let (mut params, fused, prior, _) = small_setup(2);
        let trace = derive_prompt_indicators_traced(&params, &fused, &prior).unwrap();
        let n = trace.w.len() as f64;
        let d_w = Tensor::filled(trace.w.height(), trace.w.width(), 1, 1.0 / n);
        let (grads, ()) = head_backward(&params, &trace, &d_w);
        let analytic = {
            let mut v = grads.conv1_weight.clone();
            v.extend_from_slice(&grads.conv1_bias);
            v.extend_from_slice(&grads.conv2_weight);
            v.extend_from_slice(&grads.conv2_bias);
            v
        };

        let flat0 = params.flatten();
        let head_len = analytic.len();
        let mut numeric = Vec::with_capacity(head_len);
        for i in 0..head_len {
            let mut plus = flat0.clone();
            plus[i] += 1e-3;
            params.unflatten(&plus);
            let wp = derive_prompt_indicators(&params, &fused, &prior).unwrap();
            let mut minus = flat0.clone();
            minus[i] -= 1e-3;
            params.unflatten(&minus);
            let wm = derive_prompt_indicators(&params, &fused, &prior).unwrap();
            let mean = |t: &Tensor| t.data().iter().sum::<f64>() / t.len() as f64;
            numeric.push((mean(&wp) - mean(&wm)) / 2e-3);
        }
        params.unflatten(&flat0);
        assert!(max_rel_err(&analytic, &numeric) < 1e-4);
    }

    #[test]
    fn prior_embedding_is_linear_and_bias_free() {
        let (params, _, prior, _) = small_setup(3);
        let zero = PriorMask {
            raw: Tensor::zeros(3, 3, 1),
            normalized: Tensor::zeros(3, 3, 1),
            target_class: 1,
        };
        let e0 = embed_prior(&params, &zero);
        assert!(e0.data().iter().all(|&v| v == 0.0));

        let doubled = PriorMask {
            raw: prior.raw.clone(),
            normalized: prior.normalized.map(|v| 2.0 * v),
            target_class: 1,
        };
        let e1 = embed_prior(&params, &prior);
        let e2 = embed_prior(&params, &doubled);
        for (a, b) in e1.data().iter().zip(e2.data()) {
            assert!((2.0 * a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn prior_embedding_matches_per_pixel_matmul() {
        let (params, _, prior, _) = small_setup(4);
        let e = embed_prior(&params, &prior);
        for y in 0..3 {
            for x in 0..3 {
                let p = prior.normalized.at(y, x, 0);
                for ch in 0..4 {
                    // 1x1 conv weight [out][in=1][1][1]
                    let want = params.lift.weight[ch] * p;
                    assert!((e.at(y, x, ch) - want).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn gate_annihilation_at_the_extremes() {
        let (params, _, prior, image_high) = small_setup(5);
        let pe = embed_prior(&params, &prior);

        let ones = Tensor::filled(3, 3, 1, 1.0);
        let g = gate(&ones, &image_high, &pe).unwrap();
        assert_eq!(g.gated_image, image_high);
        assert!(g.gated_prior.data().iter().all(|&v| v == 0.0));

        let zeros = Tensor::zeros(3, 3, 1);
        let g = gate(&zeros, &image_high, &pe).unwrap();
        assert!(g.gated_image.data().iter().all(|&v| v == 0.0));
        assert_eq!(g.gated_prior, pe);
    }

    #[test]
    fn extreme_gate_output_ignores_the_silenced_branch() {
        let (params, _, prior, image_high) = small_setup(6);
        let decoder = FrozenDecoder::build(4, 9, DecoderConfig::default());
        let pe = embed_prior(&params, &prior);
        let other_pe = random_tensor(3, 3, 4, 99);
        let ones = Tensor::filled(3, 3, 1, 1.0);
        let a = gate_and_decode(&decoder, &ones, &image_high, &pe, 12, 12).unwrap();
        let b = gate_and_decode(&decoder, &ones, &image_high, &other_pe, 12, 12).unwrap();
        assert_eq!(a, b);

        let zeros = Tensor::zeros(3, 3, 1);
        let other_high = random_tensor(3, 3, 4, 98);
        let a = gate_and_decode(&decoder, &zeros, &image_high, &pe, 12, 12).unwrap();
        let b = gate_and_decode(&decoder, &zeros, &other_high, &pe, 12, 12).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn gating_is_elementwise_multiplication() {
        // scalar-loop oracle plus the division complementarity check
        let w = random_tensor(4, 4, 1, 7).map(|v| (v + 1.0) / 2.0);
        let feats = random_tensor(4, 4, 4, 8);
        let pe = random_tensor(4, 4, 4, 9);
        let g = gate(&w, &feats, &pe).unwrap();
        for y in 0..4 {
            for x in 0..4 {
                let gv = w.at(y, x, 0);
                for ch in 0..4 {
                    assert!((g.gated_image.at(y, x, ch) - gv * feats.at(y, x, ch)).abs() < 1e-12);
                    assert!(
                        (g.gated_prior.at(y, x, ch) - (1.0 - gv) * pe.at(y, x, ch)).abs() < 1e-12
                    );
                    if gv > 1e-6 {
                        let recovered = g.gated_image.at(y, x, ch) / gv;
                        assert!((recovered - feats.at(y, x, ch)).abs() < 1e-9);
                    }
                }
            }
        }
    }

    #[test]
    fn forward_shape_and_determinism() {
        let (params, fused, prior, image_high) = small_setup(10);
        let decoder = FrozenDecoder::build(4, 2, DecoderConfig::default());
        let a = forward(&params, &decoder, &fused, &prior, &image_high, 24, 24).unwrap();
        let b = forward(&params, &decoder, &fused, &prior, &image_high, 24, 24).unwrap();
        assert_eq!(a.probs.shape(), (24, 24, 1));
        assert_eq!(a.probs, b.probs);
        assert!(a.probs.data().iter().all(|&v| v > 0.0 && v < 1.0));
    }

    #[test]
    fn end_to_end_gradient_matches_finite_differences() {
        // objective: probe-weighted sum of output probabilities, gradient
        // w.r.t. every trainable parameter, through the frozen decoder
        let (mut params, fused, prior, image_high) = small_setup(11);
        let decoder = FrozenDecoder::build(4, 3, DecoderConfig::default());
        let probe = random_tensor(12, 12, 1, 12);

        let trace = forward(&params, &decoder, &fused, &prior, &image_high, 12, 12).unwrap();
        let grads = backward(&params, &decoder, &trace, &probe);
        let analytic = grads.flatten();

        let flat0 = params.flatten();
        let mut numeric = Vec::with_capacity(flat0.len());
        for i in 0..flat0.len() {
            let mut pv = flat0.clone();
            pv[i] += 1e-5;
            params.unflatten(&pv);
            let fp = forward(&params, &decoder, &fused, &prior, &image_high, 12, 12).unwrap();
            let mut mv = flat0.clone();
            mv[i] -= 1e-5;
            params.unflatten(&mv);
            let fm = forward(&params, &decoder, &fused, &prior, &image_high, 12, 12).unwrap();
            let dot = |t: &Tensor| -> f64 {
                t.data().iter().zip(probe.data()).map(|(a, b)| a * b).sum()
            };
            numeric.push((dot(&fp.probs) - dot(&fm.probs)) / 2e-5);
        }
        params.unflatten(&flat0);
        assert!(
            max_rel_err(&analytic, &numeric) < 1e-6,
            "relative error {}",
            max_rel_err(&analytic, &numeric)
        );
    }

    #[test]
    fn decoder_fingerprint_is_stable_under_use() {
        let decoder = FrozenDecoder::build(4, 4, DecoderConfig::default());
        let before = decoder.fingerprint().to_string();
        let (params, fused, prior, image_high) = small_setup(13);
        let _ = forward(&params, &decoder, &fused, &prior, &image_high, 12, 12).unwrap();
        assert_eq!(decoder.current_fingerprint(), before);

        let mut tampered = decoder.clone();
        tampered.perturb_for_test();
        assert_ne!(tampered.current_fingerprint(), before);
    }

    #[test]
    fn checkpoint_round_trip_preserves_everything() {
        let dir = tempfile::tempdir().unwrap();
        let (params, _, _, _) = small_setup(14);
        save_checkpoint(dir.path(), &params, "enc-fp", "dec-fp").unwrap();
        let (loaded, meta) = load_checkpoint(dir.path()).unwrap();
        assert_eq!(loaded.fingerprint(), params.fingerprint());
        assert_eq!(meta.encoder_fingerprint, "enc-fp");
        assert_eq!(meta.decoder_fingerprint, "dec-fp");
        assert_eq!(loaded.flatten(), params.flatten());
    }

    proptest! {
        #[test]
        fn forward_never_emits_non_finite_values(seed in 0u64..50, wv in 0.0f64..=1.0) {
            let (params, fused, prior, image_high) = small_setup(seed);
            let decoder = FrozenDecoder::build(4, seed, DecoderConfig::default());
            // force the gate to an arbitrary constant in [0,1]
            let w = Tensor::filled(3, 3, 1, wv);
            let pe = embed_prior(&params, &prior);
            let logits = gate_and_decode(&decoder, &w, &image_high, &pe, 12, 12).unwrap();
            let probs = sigmoid(&logits);
            prop_assert!(probs.all_finite());
            prop_assert!(probs.data().iter().all(|&v| (0.0..=1.0).contains(&v)));
            let trace = forward(&params, &decoder, &fused, &prior, &image_high, 12, 12).unwrap();
            prop_assert!(trace.probs.all_finite());
        }
    }
}
