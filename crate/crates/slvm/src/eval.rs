//! Per-class IoU, fold-wise mean IoU over a fixed episode registry, the
//! ablation harness, and mask export.
//!
//! Per-class IoU is the mean over that class's registry episodes of the
//! intersection-over-union between the thresholded prediction and the
//! ground truth at native resolution; fold mIoU is the unweighted mean of
//! its classes, and the report mean is the unweighted mean over folds.
//! Episodes whose union is empty carry no information and are excluded
//! from the averages.

use std::collections::BTreeMap;
use std::fs;
use std::io::BufWriter;
use std::path::Path;

use rayon::prelude::*;

use crate::dataset::{ClassId, Dataset, FoldSplit};
use crate::episode::{sample_episode, RegistryEntry};
use crate::error::{Error, Result};
use crate::model::{AblationFlags, SlvmModel};
use crate::tensor::{BinaryMask, Tensor};

/// Intersection over union of two binary masks; `None` when the union is
/// empty (no information either way).
pub fn binary_iou(pred: &BinaryMask, target: &BinaryMask) -> Result<Option<f64>> {
    if pred.shape() != target.shape() {
        return Err(Error::Shape(format!(
            "iou of {:?} against {:?}",
            pred.shape(),
            target.shape()
        )));
    }
    let mut intersection = 0usize;
    let mut union = 0usize;
    for (&p, &t) in pred.data().iter().zip(target.data()) {
        intersection += (p & t) as usize;
        union += (p | t) as usize;
    }
    if union == 0 {
        Ok(None)
    } else {
        Ok(Some(intersection as f64 / union as f64))
    }
}

/// Threshold probabilities into a binary mask.
pub fn threshold_mask(probs: &Tensor, threshold: f64) -> BinaryMask {
    let (h, w, _) = probs.shape();
    let data = probs.data().iter().map(|&v| (v >= threshold) as u8).collect();
    BinaryMask::from_vec(h, w, data).expect("thresholding yields 0/1")
}

/// Round to the report precision (4 decimal places).
fn round4(v: f64) -> f64 {
    (v * 10_000.0).round() / 10_000.0
}

/// Evaluation results plus the digests that make two runs comparable.
#[derive(Debug, Clone, PartialEq)]
pub struct MetricsReport {
    pub per_class_iou: BTreeMap<ClassId, f64>,
    pub fold_miou: BTreeMap<usize, f64>,
    pub mean_miou: f64,
    pub shots: usize,
    pub ablation_flags: AblationFlags,
    pub config_digest: String,
    pub registry_digest: String,
}

/// Run the model over every registry episode and aggregate.
///
/// Protocol checks: every row must target the split's held-out fold, a
/// test-fold class, and the requested shot count.
pub fn evaluate(
    model: &SlvmModel,
    dataset: &Dataset,
    split: &FoldSplit,
    registry: &[RegistryEntry],
    shots: usize,
    threshold: f64,
    config_digest: &str,
    registry_digest: &str,
) -> Result<MetricsReport> {
    if registry.is_empty() {
        return Err(Error::Protocol("empty episode registry".into()));
    }
    for entry in registry {
        if entry.fold != split.fold_index() {
            return Err(Error::Protocol(format!(
                "registry row targets fold {}, split holds out fold {}",
                entry.fold,
                split.fold_index()
            )));
        }
        if !split.is_test_class(entry.class) {
            return Err(Error::Protocol(format!(
                "registry row targets class {}, which is not in the test fold",
                entry.class
            )));
        }
        if entry.shot != shots {
            return Err(Error::Protocol(format!(
                "registry row is {}-shot, evaluation requested {}-shot",
                entry.shot, shots
            )));
        }
    }

    // episodes evaluate independently; aggregation below is an ordered fold
    let ious: Vec<(ClassId, Option<f64>)> = registry
        .par_iter()
        .map(|entry| -> Result<(ClassId, Option<f64>)> {
            let episode = sample_episode(dataset, split, entry.class, entry.shot, entry.seed)?;
            let probs = model.predict_episode(&episode)?;
            let pred = threshold_mask(&probs, threshold);
            Ok((entry.class, binary_iou(&pred, &episode.query.mask)?))
        })
        .collect::<Result<_>>()?;

    let mut sums: BTreeMap<ClassId, (f64, usize)> = BTreeMap::new();
    for (class, iou) in ious {
        if let Some(v) = iou {
            let slot = sums.entry(class).or_insert((0.0, 0));
            slot.0 += v;
            slot.1 += 1;
        }
    }
    let per_class_iou: BTreeMap<ClassId, f64> = sums
        .into_iter()
        .map(|(c, (sum, n))| (c, round4(sum / n as f64)))
        .collect();
    if per_class_iou.is_empty() {
        return Err(Error::Protocol(
            "every registry episode had an empty union; nothing to score".into(),
        ));
    }
    let fold_mean = per_class_iou.values().sum::<f64>() / per_class_iou.len() as f64;
    let mut fold_miou = BTreeMap::new();
    fold_miou.insert(split.fold_index(), round4(fold_mean));
    let mean_miou = round4(fold_miou.values().sum::<f64>() / fold_miou.len() as f64);

    Ok(MetricsReport {
        per_class_iou,
        fold_miou,
        mean_miou,
        shots,
        ablation_flags: model.flags,
        config_digest: config_digest.to_string(),
        registry_digest: registry_digest.to_string(),
    })
}

/// Export thresholded predictions for every registry episode as 1-bit PNGs
/// named `<episode_seed>_<class>.png`.
pub fn export_masks(
    model: &SlvmModel,
    dataset: &Dataset,
    split: &FoldSplit,
    registry: &[RegistryEntry],
    threshold: f64,
    out_dir: &Path,
) -> Result<Vec<std::path::PathBuf>> {
    fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let mut written = Vec::with_capacity(registry.len());
    for entry in registry {
        let episode = sample_episode(dataset, split, entry.class, entry.shot, entry.seed)?;
        let probs = model.predict_episode(&episode)?;
        let mask = threshold_mask(&probs, threshold);
        let path = out_dir.join(format!("{}_{}.png", entry.seed, entry.class));
        write_mask_png(&mask, &path)?;
        written.push(path);
    }
    Ok(written)
}

/// Write a binary mask as a 1-bit grayscale PNG (bits packed MSB-first).
pub fn write_mask_png(mask: &BinaryMask, path: &Path) -> Result<()> {
    let (h, w) = mask.shape();
    let row_bytes = w.div_ceil(8);
    let mut packed = vec![0u8; row_bytes * h];
    for y in 0..h {
        for x in 0..w {
            if mask.get(y, x) == 1 {
                packed[y * row_bytes + x / 8] |= 0x80 >> (x % 8);
            }
        }
    }
    let file = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut encoder = png::Encoder::new(BufWriter::new(file), w as u32, h as u32);
    encoder.set_color(png::ColorType::Grayscale);
    encoder.set_depth(png::BitDepth::One);
    let mut writer = encoder
        .write_header()
        .map_err(|e| Error::format(path, format!("png header: {e}")))?;
    writer
        .write_image_data(&packed)
        .map_err(|e| Error::format(path, format!("png payload: {e}")))?;
    Ok(())
}

/// Read a 1-bit grayscale PNG back into a binary mask.
pub fn read_mask_png(path: &Path) -> Result<BinaryMask> {
    let file = fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut decoder = png::Decoder::new(std::io::BufReader::new(file));
    decoder.set_transformations(png::Transformations::IDENTITY);
    let mut reader = decoder
        .read_info()
        .map_err(|e| Error::format(path, format!("png header: {e}")))?;
    let info = reader.info();
    if info.color_type != png::ColorType::Grayscale || info.bit_depth != png::BitDepth::One {
        return Err(Error::format(path, "expected a 1-bit grayscale mask"));
    }
    let (w, h) = (info.width as usize, info.height as usize);
    let mut buf = vec![0u8; reader.output_buffer_size().unwrap_or(h * w.div_ceil(8))];
    let frame = reader
        .next_frame(&mut buf)
        .map_err(|e| Error::format(path, format!("png payload: {e}")))?;
    let row_bytes = frame.buffer_size() / h;
    let mut mask = BinaryMask::zeros(h, w);
    for y in 0..h {
        for x in 0..w {
            let bit = (buf[y * row_bytes + x / 8] >> (7 - x % 8)) & 1;
            mask.set(y, x, bit);
        }
    }
    Ok(mask)
}

/// Shared inputs for one ablation sweep.
pub struct AblationSetup<'a> {
    pub dataset: &'a Dataset,
    pub split: &'a FoldSplit,
    pub registry: &'a [RegistryEntry],
    pub train_config: &'a crate::train::TrainConfig,
    pub encoder_seed: u64,
    pub decoder_seed: u64,
    pub threshold: f64,
    pub config_digest: String,
}

/// Run each flag configuration against the shared registry and seeds.
/// Rows with the prompt learner enabled train first; the others evaluate
/// untrained.
pub fn run_ablation(
    setup: &AblationSetup<'_>,
    rows: &[AblationFlags],
) -> Result<Vec<MetricsReport>> {
    use crate::apl::{DecoderConfig, FrozenDecoder, PromptLearnerParams, DEFAULT_HIDDEN};
    use crate::features::{EmbeddingProvider, EncoderConfig, SurrogateEncoder};

    let registry_digest = crate::episode::registry_digest(setup.registry);
    let mut reports = Vec::with_capacity(rows.len());
    for &flags in rows {
        let encoder = SurrogateEncoder::build(setup.encoder_seed, EncoderConfig::default());
        let (c_high, c_mid) = encoder.channels();
        let decoder = FrozenDecoder::build(c_high, setup.decoder_seed, DecoderConfig::default());
        let params = if flags.apl {
            crate::train::train(
                setup.train_config,
                setup.dataset,
                setup.split,
                &encoder,
                &decoder,
                flags,
            )?
            .params
        } else {
            PromptLearnerParams::init(
                c_mid + 1,
                DEFAULT_HIDDEN,
                c_high,
                crate::rng::derive_seed(setup.train_config.seed, 0xB007),
            )
        };
        let model = SlvmModel {
            provider: Box::new(encoder),
            decoder,
            params,
            flags,
            image_size: setup.train_config.image_size,
        };
        reports.push(evaluate(
            &model,
            setup.dataset,
            setup.split,
            setup.registry,
            setup.train_config.shots,
            setup.threshold,
            &setup.config_digest,
            &registry_digest,
        )?);
    }
    Ok(reports)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::apl::{DecoderConfig, FrozenDecoder, PromptLearnerParams};
    use crate::dataset::partition_folds;
    use crate::episode::build_registry;
    use crate::features::{EmbeddingProvider, EncoderConfig, SurrogateEncoder};
    use crate::fixture;

    fn mask_of(bits: &[u8], h: usize, w: usize) -> BinaryMask {
        BinaryMask::from_vec(h, w, bits.to_vec()).unwrap()
    }

    #[test]
    fn identical_nonempty_masks_score_one() {
        let m = mask_of(&[1, 0, 1, 1], 2, 2);
        assert_eq!(binary_iou(&m, &m).unwrap(), Some(1.0));
    }

    #[test]
    fn disjoint_nonempty_masks_score_zero() {
        let a = mask_of(&[1, 0, 0, 0], 2, 2);
        let b = mask_of(&[0, 0, 0, 1], 2, 2);
        assert_eq!(binary_iou(&a, &b).unwrap(), Some(0.0));
    }

    #[test]
    fn partial_overlap_counts_pixels() {
        // pred covers 2 of target's 4 pixels plus 2 false positives: 2/6
        let target = mask_of(&[1, 1, 1, 1, 0, 0, 0, 0, 0], 3, 3);
        let pred = mask_of(&[1, 1, 0, 0, 0, 1, 1, 0, 0], 3, 3);
        let iou = binary_iou(&pred, &target).unwrap().unwrap();
        assert!((iou - 2.0 / 6.0).abs() < 1e-12);
    }

    #[test]
    fn empty_union_is_undefined() {
        let z = BinaryMask::zeros(2, 2);
        assert_eq!(binary_iou(&z, &z).unwrap(), None);
    }

    #[test]
    fn iou_is_symmetric() {
        let a = mask_of(&[1, 1, 0, 0, 1, 0, 0, 0, 1], 3, 3);
        let b = mask_of(&[0, 1, 1, 0, 1, 1, 0, 0, 0], 3, 3);
        assert_eq!(binary_iou(&a, &b).unwrap(), binary_iou(&b, &a).unwrap());
    }

    #[test]
    fn shape_mismatch_is_an_error() {
        let a = BinaryMask::zeros(2, 2);
        let b = BinaryMask::zeros(2, 3);
        assert!(binary_iou(&a, &b).is_err());
    }

    fn oracle_model(ds: &Dataset) -> SlvmModel {
        // a model whose prediction is driven entirely by the prior; only
        // used where flags make the output deterministic of the episode
        let encoder = SurrogateEncoder::build(0, EncoderConfig::default());
        let (c_high, c_mid) = encoder.channels();
        SlvmModel {
            provider: Box::new(encoder),
            decoder: FrozenDecoder::build(c_high, 1, DecoderConfig::default()),
            params: PromptLearnerParams::init(c_mid + 1, 8, c_high, 0),
            flags: AblationFlags::ALL_OFF,
            image_size: ds.items[0].image.height(),
        }
    }

    /// Confusion-matrix oracle: per-episode tp/fp/fn via an explicit pixel
    /// loop, means taken per class, then across classes.
    fn confusion_oracle(
        predictions: &[(ClassId, BinaryMask, BinaryMask)],
    ) -> (BTreeMap<ClassId, f64>, f64) {
        let mut per_class: BTreeMap<ClassId, Vec<f64>> = BTreeMap::new();
        for (class, pred, gt) in predictions {
            let (h, w) = pred.shape();
            let (mut tp, mut fp, mut fne) = (0usize, 0usize, 0usize);
            for y in 0..h {
                for x in 0..w {
                    match (pred.get(y, x), gt.get(y, x)) {
                        (1, 1) => tp += 1,
                        (1, 0) => fp += 1,
                        (0, 1) => fne += 1,
                        _ => {}
                    }
                }
            }
            if tp + fp + fne > 0 {
                per_class
                    .entry(*class)
                    .or_default()
                    .push(tp as f64 / (tp + fp + fne) as f64);
            }
        }
        let per_class_mean: BTreeMap<ClassId, f64> = per_class
            .into_iter()
            .map(|(c, v)| (c, round4(v.iter().sum::<f64>() / v.len() as f64)))
            .collect();
        let miou =
            round4(per_class_mean.values().sum::<f64>() / per_class_mean.len() as f64);
        (per_class_mean, miou)
    }

    #[test]
    fn evaluate_matches_confusion_matrix_oracle() {
        let ds = fixture::generate(2, 30, 32);
        let split = partition_folds(&ds.classes_by_name(), &[3, 2], 1).unwrap();
        let model = oracle_model(&ds);
        for count in [4usize, 11, 20] {
            let registry = build_registry(&ds, &split, 1, count, 77).unwrap();
            let report = evaluate(
                &model, &ds, &split, &registry, 1, 0.5, "cfg", "reg",
            )
            .unwrap();

            // independent pass: rebuild every episode and prediction
            let mut predictions = Vec::new();
            for entry in &registry {
                let ep = sample_episode(&ds, &split, entry.class, entry.shot, entry.seed).unwrap();
                let probs = model.predict_episode(&ep).unwrap();
                let pred = threshold_mask(&probs, 0.5);
                predictions.push((entry.class, pred, ep.query.mask.clone()));
            }
            let (per_class, miou) = confusion_oracle(&predictions);
            assert_eq!(report.per_class_iou, per_class, "count {count}");
            assert_eq!(report.mean_miou, miou, "count {count}");
        }
    }

    #[test]
    fn ground_truth_predictions_score_perfect() {
        let ds = fixture::generate(3, 20, 32);
        let split = partition_folds(&ds.classes_by_name(), &[3, 2], 1).unwrap();
        let registry = build_registry(&ds, &split, 1, 6, 5).unwrap();
        for entry in &registry {
            let ep = sample_episode(&ds, &split, entry.class, entry.shot, entry.seed).unwrap();
            assert_eq!(
                binary_iou(&ep.query.mask, &ep.query.mask).unwrap(),
                Some(1.0)
            );
        }
    }

    #[test]
    fn registry_targeting_wrong_fold_or_class_is_rejected() {
        let ds = fixture::generate(2, 24, 32);
        let split = partition_folds(&ds.classes_by_name(), &[3, 2], 1).unwrap();
        let model = oracle_model(&ds);
        let bad_fold = vec![RegistryEntry {
            fold: 0,
            shot: 1,
            class: 3,
            seed: 1,
        }];
        assert!(matches!(
            evaluate(&model, &ds, &split, &bad_fold, 1, 0.5, "c", "r"),
            Err(Error::Protocol(_))
        ));
        let train_class = vec![RegistryEntry {
            fold: 1,
            shot: 1,
            class: 0,
            seed: 1,
        }];
        assert!(matches!(
            evaluate(&model, &ds, &split, &train_class, 1, 0.5, "c", "r"),
            Err(Error::Protocol(_))
        ));
        let wrong_shot = vec![RegistryEntry {
            fold: 1,
            shot: 5,
            class: 3,
            seed: 1,
        }];
        assert!(matches!(
            evaluate(&model, &ds, &split, &wrong_shot, 1, 0.5, "c", "r"),
            Err(Error::Protocol(_))
        ));
    }

    #[test]
    fn evaluation_is_deterministic() {
        let ds = fixture::generate(4, 24, 32);
        let split = partition_folds(&ds.classes_by_name(), &[3, 2], 1).unwrap();
        let registry = build_registry(&ds, &split, 1, 8, 3).unwrap();
        let model = oracle_model(&ds);
        let a = evaluate(&model, &ds, &split, &registry, 1, 0.5, "c", "r").unwrap();
        let b = evaluate(&model, &ds, &split, &registry, 1, 0.5, "c", "r").unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn mask_png_round_trip_is_bitwise() {
        let dir = tempfile::tempdir().unwrap();
        // odd width exercises row padding
        let mut mask = BinaryMask::zeros(5, 11);
        for y in 0..5 {
            for x in 0..11 {
                mask.set(y, x, ((x * 3 + y) % 2) as u8);
            }
        }
        let path = dir.path().join("m.png");
        write_mask_png(&mask, &path).unwrap();
        let back = read_mask_png(&path).unwrap();
        assert_eq!(back, mask);
    }

    #[test]
    fn export_writes_one_file_per_registry_row() {
        let dir = tempfile::tempdir().unwrap();
        let ds = fixture::generate(5, 24, 32);
        let split = partition_folds(&ds.classes_by_name(), &[3, 2], 1).unwrap();
        let registry = build_registry(&ds, &split, 1, 10, 9).unwrap();
        let model = oracle_model(&ds);
        let written = export_masks(&model, &ds, &split, &registry, 0.5, dir.path()).unwrap();
        assert_eq!(written.len(), 10);
        for (entry, path) in registry.iter().zip(&written) {
            assert!(path.ends_with(format!("{}_{}.png", entry.seed, entry.class)));
            // re-load equals the thresholded prediction
            let ep = sample_episode(&ds, &split, entry.class, entry.shot, entry.seed).unwrap();
            let probs = model.predict_episode(&ep).unwrap();
            let expect = threshold_mask(&probs, 0.5);
            assert_eq!(read_mask_png(path).unwrap(), expect);
        }
    }
}
