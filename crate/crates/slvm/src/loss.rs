//! Training losses and the two-phase weighting.
//!
//! The self-guidance loss treats each predicted mask and its target as flat
//! vectors and averages `1 - cos(Y_i, T_i)` over the batch. The fine-tuning
//! loss is mean pixel-wise binary cross-entropy at full resolution. Both
//! come with analytic gradients, finite-difference checked below.

use crate::error::{Error, Result};
use crate::tensor::{BinaryMask, Tensor};

/// Clipping bound for probabilities inside the cross-entropy.
pub const BCE_CLIP: f64 = 1e-7;

/// Which part of the two-phase schedule a step belongs to.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Phase {
    /// Self-guidance only.
    SelfGuidance,
    /// Self-guidance plus fine-tuning.
    FineTune,
}

impl Phase {
    pub fn index(self) -> usize {
        match self {
            Phase::SelfGuidance => 1,
            Phase::FineTune => 2,
        }
    }
}

/// The loss terms of one step.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossBreakdown {
    pub self_guidance: f64,
    pub fine_tune: f64,
    pub total: f64,
}

/// Mean cosine dissimilarity over `N` vector pairs:
/// `(1/N) * sum(1 - Y_i . T_i / (|Y_i| |T_i|))`. A zero-norm vector makes
/// its pair's cosine term 0 (so the pair contributes 1).
pub fn cosine_loss(pairs: &[(&[f64], &[f64])]) -> Result<f64> {
    if pairs.is_empty() {
        return Err(Error::Config("cosine loss needs at least one pair".into()));
    }
    let mut acc = 0.0;
    for (pred, target) in pairs {
        if pred.len() != target.len() {
            return Err(Error::Shape(format!(
                "cosine pair lengths {} vs {}",
                pred.len(),
                target.len()
            )));
        }
        acc += 1.0 - pair_cosine(pred, target);
    }
    Ok(acc / pairs.len() as f64)
}

/// One pair's unscaled `1 - cos(pred, target)` term.
pub fn pair_loss_terms(pred: &[f64], target: &[f64]) -> f64 {
    1.0 - pair_cosine(pred, target)
}

fn pair_cosine(pred: &[f64], target: &[f64]) -> f64 {
    let dot: f64 = pred.iter().zip(target).map(|(a, b)| a * b).sum();
    let np: f64 = pred.iter().map(|v| v * v).sum::<f64>().sqrt();
    let nt: f64 = target.iter().map(|v| v * v).sum::<f64>().sqrt();
    if np == 0.0 || nt == 0.0 {
        0.0
    } else {
        dot / (np * nt)
    }
}

/// Gradient of one pair's `1 - cos` term w.r.t. the prediction, already
/// scaled by `1/N`. Zero-norm pairs have zero gradient.
pub fn cosine_pair_grad(pred: &[f64], target: &[f64], n_pairs: usize) -> Vec<f64> {
    let dot: f64 = pred.iter().zip(target).map(|(a, b)| a * b).sum();
    let np: f64 = pred.iter().map(|v| v * v).sum::<f64>().sqrt();
    let nt: f64 = target.iter().map(|v| v * v).sum::<f64>().sqrt();
    if np == 0.0 || nt == 0.0 {
        return vec![0.0; pred.len()];
    }
    let scale = 1.0 / n_pairs as f64;
    pred.iter()
        .zip(target)
        .map(|(&y, &t)| scale * (-t / (np * nt) + dot * y / (np.powi(3) * nt)))
        .collect()
}

/// Mean pixel-wise binary cross-entropy; predictions are clipped to
/// `[BCE_CLIP, 1 - BCE_CLIP]` before the logs.
pub fn fine_tune_loss(pred: &Tensor, target: &BinaryMask) -> Result<f64> {
    let (h, w, c) = pred.shape();
    if c != 1 || (h, w) != target.shape() {
        return Err(Error::Shape(format!(
            "prediction {:?} vs target {:?}",
            pred.shape(),
            target.shape()
        )));
    }
    let n = (h * w) as f64;
    let mut acc = 0.0;
    for (p, &t) in pred.data().iter().zip(target.data()) {
        let p = p.clamp(BCE_CLIP, 1.0 - BCE_CLIP);
        let t = t as f64;
        acc -= t * p.ln() + (1.0 - t) * (1.0 - p).ln();
    }
    Ok(acc / n)
}

/// Gradient of [`fine_tune_loss`] w.r.t. the prediction. Zero where the
/// clip is active.
pub fn fine_tune_loss_grad(pred: &Tensor, target: &BinaryMask) -> Tensor {
    let (h, w, _) = pred.shape();
    let n = (h * w) as f64;
    let mut grad = Tensor::zeros(h, w, 1);
    for (g, (p, &t)) in grad
        .data_mut()
        .iter_mut()
        .zip(pred.data().iter().zip(target.data()))
    {
        if (BCE_CLIP..=1.0 - BCE_CLIP).contains(p) {
            let t = t as f64;
            *g = (p - t) / (p * (1.0 - p)) / n;
        }
    }
    grad
}

/// Combine the two terms per the phase schedule: in the self-guidance
/// phase the fine-tuning term is reported but unweighted.
pub fn total_loss(ls: f64, lf: f64, alpha: f64, beta: f64, phase: Phase) -> LossBreakdown {
    let total = match phase {
        Phase::SelfGuidance => alpha * ls,
        Phase::FineTune => alpha * ls + beta * lf,
    };
    LossBreakdown {
        self_guidance: ls,
        fine_tune: lf,
        total,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::rng_from_seed;
    use proptest::prelude::*;
    use rand::Rng;

    #[test]
    fn perfect_alignment_scores_zero() {
        let t = [1.0, 0.0, 1.0, 1.0];
        let loss = cosine_loss(&[(&t, &t)]).unwrap();
        assert!(loss.abs() < 1e-9);
    }

    #[test]
    fn orthogonal_pair_scores_one() {
        let p = [1.0, 0.0];
        let t = [0.0, 1.0];
        let loss = cosine_loss(&[(&p, &t)]).unwrap();
        assert!((loss - 1.0).abs() < 1e-9);
    }

    #[test]
    fn two_pair_hand_case() {
        // pairs ([1,0],[1,0]) and ([1,0],[0,1]) -> (0 + 1)/2
        let a = [1.0, 0.0];
        let b = [0.0, 1.0];
        let loss = cosine_loss(&[(&a, &a), (&a, &b)]).unwrap();
        assert!((loss - 0.5).abs() < 1e-9);
    }

    #[test]
    fn zero_norm_counts_as_cosine_zero() {
        let z = [0.0, 0.0];
        let t = [1.0, 1.0];
        let loss = cosine_loss(&[(&z, &t)]).unwrap();
        assert!((loss - 1.0).abs() < 1e-12);
        assert!(cosine_pair_grad(&z, &t, 1).iter().all(|&g| g == 0.0));
    }

    #[test]
    fn length_mismatch_is_a_shape_error() {
        let a = [1.0];
        let b = [1.0, 2.0];
        assert!(matches!(cosine_loss(&[(&a[..], &b[..])]), Err(Error::Shape(_))));
    }

    #[test]
    fn positive_scaling_keeps_loss_zero() {
        let t = [0.0, 1.0, 1.0, 0.0];
        let scaled: Vec<f64> = t.iter().map(|v| v * 3.7).collect();
        let loss = cosine_loss(&[(&scaled, &t)]).unwrap();
        assert!(loss.abs() < 1e-12);
    }

    #[test]
    fn cosine_grad_matches_finite_differences() {
        let mut r = rng_from_seed(5);
        for trial in 0..20 {
            let n = 4 + trial % 5;
            let pred: Vec<f64> = (0..n).map(|_| r.gen_range(0.05..1.0)).collect();
            let target: Vec<f64> = (0..n).map(|_| (r.gen_bool(0.5)) as u8 as f64).collect();
            let analytic = cosine_pair_grad(&pred, &target, 1);
            for i in 0..n {
                let mut plus = pred.clone();
                plus[i] += 1e-6;
                let mut minus = pred.clone();
                minus[i] -= 1e-6;
                let fp = cosine_loss(&[(&plus, &target)]).unwrap();
                let fm = cosine_loss(&[(&minus, &target)]).unwrap();
                let numeric = (fp - fm) / 2e-6;
                let denom = analytic[i].abs().max(numeric.abs()).max(1e-6);
                assert!(
                    ((analytic[i] - numeric) / denom).abs() < 1e-4,
                    "trial {trial} coord {i}: analytic {} vs numeric {}",
                    analytic[i],
                    numeric
                );
            }
        }
    }

    #[test]
    fn bce_of_exact_prediction_is_clip_scale() {
        let target = BinaryMask::from_vec(2, 2, vec![1, 0, 0, 1]).unwrap();
        let pred = target.to_tensor();
        let loss = fine_tune_loss(&pred, &target).unwrap();
        assert!(loss < 1e-5);
    }

    #[test]
    fn bce_of_half_is_ln_two() {
        let target = BinaryMask::from_vec(2, 2, vec![1, 0, 1, 0]).unwrap();
        let pred = Tensor::filled(2, 2, 1, 0.5);
        let loss = fine_tune_loss(&pred, &target).unwrap();
        assert!((loss - std::f64::consts::LN_2).abs() < 1e-12);
    }

    #[test]
    fn bce_matches_scalar_loop() {
        let mut r = rng_from_seed(9);
        let pred = Tensor::from_vec(4, 4, 1, (0..16).map(|_| r.gen_range(0.01..0.99)).collect())
            .unwrap();
        let target =
            BinaryMask::from_vec(4, 4, (0..16).map(|_| r.gen_bool(0.5) as u8).collect()).unwrap();
        let loss = fine_tune_loss(&pred, &target).unwrap();
        let mut oracle = 0.0;
        for y in 0..4 {
            for x in 0..4 {
                let p = pred.at(y, x, 0);
                let t = target.get(y, x) as f64;
                oracle -= t * p.ln() + (1.0 - t) * (1.0 - p).ln();
            }
        }
        oracle /= 16.0;
        assert!((loss - oracle).abs() < 1e-12);
    }

    #[test]
    fn bce_grad_matches_finite_differences() {
        let mut r = rng_from_seed(13);
        for _ in 0..20 {
            let pred =
                Tensor::from_vec(3, 3, 1, (0..9).map(|_| r.gen_range(0.1..0.9)).collect()).unwrap();
            let target =
                BinaryMask::from_vec(3, 3, (0..9).map(|_| r.gen_bool(0.5) as u8).collect())
                    .unwrap();
            let analytic = fine_tune_loss_grad(&pred, &target);
            for i in 0..9 {
                let mut plus = pred.clone();
                plus.data_mut()[i] += 1e-6;
                let mut minus = pred.clone();
                minus.data_mut()[i] -= 1e-6;
                let numeric = (fine_tune_loss(&plus, &target).unwrap()
                    - fine_tune_loss(&minus, &target).unwrap())
                    / 2e-6;
                let a = analytic.data()[i];
                let denom = a.abs().max(numeric.abs()).max(1e-6);
                assert!(((a - numeric) / denom).abs() < 1e-4);
            }
        }
    }

    #[test]
    fn total_loss_arithmetic() {
        let b = total_loss(0.4, 0.2, 1.0, 1.0, Phase::FineTune);
        assert!((b.total - 0.6).abs() < 1e-12);

        let b = total_loss(0.4, 123.0, 1.5, 1.0, Phase::SelfGuidance);
        assert!((b.total - 0.6).abs() < 1e-12);
        assert_eq!(b.fine_tune, 123.0); // reported, unweighted

        let b = total_loss(0.7, 0.9, 0.0, 0.0, Phase::FineTune);
        assert_eq!(b.total, 0.0);
    }

    #[test]
    fn doubling_alpha_doubles_the_self_guidance_share() {
        let base = total_loss(0.3, 0.5, 1.0, 2.0, Phase::FineTune);
        let doubled = total_loss(0.3, 0.5, 2.0, 2.0, Phase::FineTune);
        let share_base = base.total - 2.0 * 0.5;
        let share_doubled = doubled.total - 2.0 * 0.5;
        assert!((share_doubled - 2.0 * share_base).abs() < 1e-12);
    }

    proptest! {
        #[test]
        fn cosine_loss_stays_in_range(seed in 0u64..300) {
            let mut r = rng_from_seed(seed);
            let n = r.gen_range(1usize..6);
            let len = r.gen_range(1usize..10);
            let pairs_data: Vec<(Vec<f64>, Vec<f64>)> = (0..n)
                .map(|_| {
                    let p: Vec<f64> = (0..len).map(|_| r.gen_range(-1.0..1.0)).collect();
                    let t: Vec<f64> = (0..len).map(|_| r.gen_range(-1.0..1.0)).collect();
                    (p, t)
                })
                .collect();
            let pairs: Vec<(&[f64], &[f64])> = pairs_data
                .iter()
                .map(|(p, t)| (p.as_slice(), t.as_slice()))
                .collect();
            let loss = cosine_loss(&pairs).unwrap();
            prop_assert!((0.0..=2.0).contains(&loss));
        }

        #[test]
        fn loss_is_zero_iff_positively_proportional(seed in 0u64..300, factor in 0.01f64..50.0) {
            let mut r = rng_from_seed(seed);
            let t: Vec<f64> = (0..8).map(|_| r.gen_range(0.0..1.0) + 0.01).collect();
            let p: Vec<f64> = t.iter().map(|v| v * factor).collect();
            prop_assert!(cosine_loss(&[(&p, &t)]).unwrap().abs() < 1e-9);
            // a genuinely different direction scores positive
            let mut q = t.clone();
            q[0] += 10.0;
            prop_assert!(cosine_loss(&[(&q, &t)]).unwrap() > 1e-6);
        }
    }
}
