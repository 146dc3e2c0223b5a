//! Diagnostic: gradient magnitudes and single-batch descent on L_s.

use slvm::apl::{self, DecoderConfig, FrozenDecoder, PromptLearnerParams, DEFAULT_HIDDEN};
use slvm::augment::{resize_label, resize_pair};
use slvm::dataset::partition_folds;
use slvm::episode::sample_episode;
use slvm::features::{EmbeddingProvider, EncoderConfig, SurrogateEncoder};
use slvm::loss::{cosine_pair_grad, pair_loss_terms};
use slvm::nn::{avg_pool_to, avg_pool_to_backward};
use slvm::{fixture, pgml};

fn main() {
    let ds = fixture::generate(0, 60, 64);
    let split = partition_folds(&ds.classes_by_name(), &[3, 2], 1).unwrap();
    let encoder = SurrogateEncoder::build(0, EncoderConfig::default());
    let (c_h, c_m) = encoder.channels();
    let decoder = FrozenDecoder::build(c_h, 1, DecoderConfig::default());
    let mut params = PromptLearnerParams::init(c_m + 1, DEFAULT_HIDDEN, c_h, 42);
    let size = 128usize;

    // one fixed batch of 4 shape episodes (classes 1 and 2)
    let eps: Vec<_> = (0..4u64)
        .map(|i| sample_episode(&ds, &split, 1 + (i % 2) as u8, 1, i).unwrap())
        .collect();

    let mut prepared = Vec::new();
    for ep in &eps {
        let (qi, qm) = resize_pair(&ep.query.image, &ep.query.mask, size, size);
        let (si, sm) = resize_pair(&ep.supports[0].image, &ep.supports[0].mask, size, size);
        let qf = encoder.features(&ep.query.id, &qi).unwrap();
        let sf = encoder.features(&ep.supports[0].id, &si).unwrap();
        let prior = pgml::episode_prior(&qf.high, &[(sf.high.clone(), sm)], ep.target_class).unwrap();
        let fused = pgml::fuse(&qf.mid, &prior);
        prepared.push((qf, qm, prior, fused));
    }

    for iter in 0..60 {
        let mut ls = 0.0;
        let mut grads = apl::ParamGrads::zeros_like(&params);
        for (qf, qm, prior, fused) in &prepared {
            let trace = apl::forward(&params, &decoder, fused, prior, &qf.high, size, size).unwrap();
            let (fh, fw, _) = qf.high.shape();
            let pred_small = avg_pool_to(&trace.probs, fh, fw);
            let t_small = resize_label(qm, fh, fw);
            let t: Vec<f64> = t_small.data().iter().map(|&v| v as f64).collect();
            ls += pair_loss_terms(pred_small.data(), &t) / prepared.len() as f64;
            let g = cosine_pair_grad(pred_small.data(), &t, prepared.len());
            let g_small = slvm::Tensor::from_vec(fh, fw, 1, g).unwrap();
            let d_probs = avg_pool_to_backward(&g_small, size, size);
            let g = apl::backward(&params, &decoder, &trace, &d_probs);
            grads.add_assign(&g);
        }
        if iter % 10 == 0 || iter == 59 {
            let norm = |v: &[f64]| (v.iter().map(|x| x * x).sum::<f64>()).sqrt();
            println!(
                "iter {iter:3}: Ls {ls:.5}  |g| conv1 {:.2e} conv2 {:.2e} lift {:.2e}",
                norm(&grads.conv1_weight),
                norm(&grads.conv2_weight),
                norm(&grads.lift_weight),
            );
        }
        // plain SGD, aggressive
        let mut flat = params.flatten();
        let g = grads.flatten();
        for (p, gv) in flat.iter_mut().zip(&g) {
            *p -= 2.0 * gv;
        }
        params.unflatten(&flat);
    }
}
