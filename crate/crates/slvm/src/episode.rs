//! Episode sampling and the episode registry.
//!
//! An episode is one few-shot task: `k` support image/mask pairs plus a
//! single query, all for one target class. Sampling is a pure function of
//! `(dataset, split, class, k, seed)`; the registry pins a reproducible
//! list of `(fold, shot, class, seed)` rows so that any two evaluation runs
//! see exactly the same tasks.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use rand::Rng;

use crate::dataset::{ClassId, Dataset, FoldSplit};
use crate::error::{Error, Result};
use crate::fingerprint::digest_bytes;
use crate::rng::{derive_seed, rng_from_seed};
use crate::tensor::{BinaryMask, Tensor};

/// One image drawn into an episode, with its binary mask for the target
/// class.
#[derive(Debug, Clone)]
pub struct EpisodeMember {
    pub id: String,
    pub image: Tensor,
    pub mask: BinaryMask,
}

/// A single few-shot task.
#[derive(Debug, Clone)]
pub struct Episode {
    pub target_class: ClassId,
    pub supports: Vec<EpisodeMember>,
    pub query: EpisodeMember,
    pub seed: u64,
}

impl Episode {
    pub fn k(&self) -> usize {
        self.supports.len()
    }

    /// Check the episode invariants: nonempty binary masks everywhere,
    /// matching dimensions, distinct samples.
    pub fn validate(&self) -> Result<()> {
        if self.supports.is_empty() {
            return Err(Error::Config("episode needs k >= 1 supports".into()));
        }
        for member in self.supports.iter().chain(std::iter::once(&self.query)) {
            let (h, w, _) = member.image.shape();
            if (h, w) != member.mask.shape() {
                return Err(Error::Shape(format!(
                    "member {} image {}x{} vs mask {:?}",
                    member.id,
                    h,
                    w,
                    member.mask.shape()
                )));
            }
            if member.mask.foreground() == 0 {
                return Err(Error::DegenerateSupport(format!(
                    "member {} has no foreground for class {}",
                    member.id, self.target_class
                )));
            }
        }
        let mut ids: Vec<&str> = self.supports.iter().map(|m| m.id.as_str()).collect();
        ids.push(&self.query.id);
        ids.sort_unstable();
        ids.dedup();
        if ids.len() != self.supports.len() + 1 {
            return Err(Error::Protocol(
                "episode reuses a sample between supports and query".into(),
            ));
        }
        Ok(())
    }
}

/// Draw `k` supports and one query for `class`, deterministically in
/// `seed`. All members contain foreground for the class; supports and the
/// query are distinct dataset samples.
pub fn sample_episode(
    dataset: &Dataset,
    split: &FoldSplit,
    class: ClassId,
    k: usize,
    seed: u64,
) -> Result<Episode> {
    if k == 0 {
        return Err(Error::Config("episode needs k >= 1 supports".into()));
    }
    if !split.folds().iter().any(|f| f.contains(&class)) {
        return Err(Error::Protocol(format!(
            "class {class} is not assigned to any fold"
        )));
    }
    let eligible = dataset.eligible_for(class);
    if eligible.len() < k + 1 {
        return Err(Error::Sampling {
            class,
            k,
            available: eligible.len(),
            needed: k + 1,
        });
    }
    // partial Fisher-Yates: the first k+1 slots are the draw
    let mut pool = eligible;
    let mut rng = rng_from_seed(seed);
    for i in 0..=k {
        let j = rng.gen_range(i..pool.len());
        pool.swap(i, j);
    }
    let member = |idx: usize| {
        let item = &dataset.items[idx];
        EpisodeMember {
            id: item.id.clone(),
            image: item.image.clone(),
            mask: item.label.mask_for(class),
        }
    };
    let supports = pool[..k].iter().map(|&i| member(i)).collect();
    let episode = Episode {
        target_class: class,
        supports,
        query: member(pool[k]),
        seed,
    };
    episode.validate()?;
    Ok(episode)
}

/// One row of the episode registry.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct RegistryEntry {
    pub fold: usize,
    pub shot: usize,
    pub class: ClassId,
    pub seed: u64,
}

/// Serialize registry rows as `fold,shot,class_id,seed` lines.
pub fn registry_to_string(entries: &[RegistryEntry]) -> String {
    let mut out = String::new();
    for e in entries {
        writeln!(out, "{},{},{},{}", e.fold, e.shot, e.class, e.seed).expect("string write");
    }
    out
}

pub fn parse_registry(text: &str, origin: &Path) -> Result<Vec<RegistryEntry>> {
    let mut entries = Vec::new();
    for (lineno, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split(',').collect();
        if fields.len() != 4 {
            return Err(Error::format(
                origin,
                format!("registry line {} has {} fields, expected 4", lineno + 1, fields.len()),
            ));
        }
        let parse = |s: &str, what: &str| -> Result<u64> {
            s.parse::<u64>().map_err(|_| {
                Error::format(
                    origin,
                    format!("registry line {}: bad {what} `{s}`", lineno + 1),
                )
            })
        };
        entries.push(RegistryEntry {
            fold: parse(fields[0], "fold")? as usize,
            shot: parse(fields[1], "shot")? as usize,
            class: parse(fields[2], "class id")? as ClassId,
            seed: parse(fields[3], "seed")?,
        });
    }
    Ok(entries)
}

pub fn write_registry(path: &Path, entries: &[RegistryEntry]) -> Result<()> {
    fs::write(path, registry_to_string(entries)).map_err(|e| Error::io(path, e))
}

pub fn read_registry(path: &Path) -> Result<Vec<RegistryEntry>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_registry(&text, path)
}

/// Digest of the registry's canonical serialization; reports carry this so
/// runs are comparable.
pub fn registry_digest(entries: &[RegistryEntry]) -> String {
    digest_bytes(registry_to_string(entries).as_bytes())
}

/// Build a fixed evaluation registry: `count` episodes for the test fold,
/// cycling its classes round-robin, with per-row seeds derived from
/// `base_seed`. Fails early if any class cannot supply `shot + 1` images.
pub fn build_registry(
    dataset: &Dataset,
    split: &FoldSplit,
    shot: usize,
    count: usize,
    base_seed: u64,
) -> Result<Vec<RegistryEntry>> {
    let classes = split.test_classes();
    if classes.is_empty() {
        return Err(Error::Config("test fold has no classes".into()));
    }
    for &class in classes {
        let available = dataset.eligible_for(class).len();
        if available < shot + 1 {
            return Err(Error::Sampling {
                class,
                k: shot,
                available,
                needed: shot + 1,
            });
        }
    }
    Ok((0..count)
        .map(|i| RegistryEntry {
            fold: split.fold_index(),
            shot,
            class: classes[i % classes.len()],
            seed: derive_seed(base_seed, i as u64),
        })
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::partition_folds;
    use crate::fixture;

    fn fixture_and_split() -> (Dataset, FoldSplit) {
        let ds = fixture::generate(0, 24, 32);
        let split = partition_folds(&ds.classes_by_name(), &[3, 2], 1).unwrap();
        (ds, split)
    }

    #[test]
    fn identical_seeds_give_identical_episodes() {
        let (ds, split) = fixture_and_split();
        let a = sample_episode(&ds, &split, 1, 2, 7).unwrap();
        let b = sample_episode(&ds, &split, 1, 2, 7).unwrap();
        assert_eq!(a.query.id, b.query.id);
        assert_eq!(a.query.image, b.query.image);
        assert_eq!(a.query.mask, b.query.mask);
        for (x, y) in a.supports.iter().zip(&b.supports) {
            assert_eq!(x.id, y.id);
            assert_eq!(x.image, y.image);
            assert_eq!(x.mask, y.mask);
        }
    }

    #[test]
    fn exactly_k_eligible_images_cannot_fill_an_episode() {
        // synthesize a dataset where class 4 appears in exactly 3 images
        let ds = fixture::generate(0, 60, 32);
        let keep: Vec<usize> = ds.eligible_for(4).into_iter().take(3).collect();
        let small = Dataset {
            items: keep.iter().map(|&i| ds.items[i].clone()).collect(),
            class_names: ds.class_names.clone(),
        };
        let split = partition_folds(&small.classes_by_name(), &[3, 2], 1).unwrap();
        let err = sample_episode(&small, &split, 4, 3, 0).unwrap_err();
        match err {
            Error::Sampling {
                class,
                available,
                needed,
                ..
            } => {
                assert_eq!(class, 4);
                assert_eq!(available, 3);
                assert_eq!(needed, 4);
            }
            other => panic!("expected sampling error, got {other}"),
        }
    }

    #[test]
    fn supports_and_query_are_disjoint_and_distinct() {
        let ds = fixture::generate(1, 40, 32);
        let split = partition_folds(&ds.classes_by_name(), &[3, 2], 0).unwrap();
        // enumerate: k = 5 must draw 6 distinct ids, query not among supports
        let ep = sample_episode(&ds, &split, 2, 5, 13).unwrap();
        let mut ids: Vec<&str> = ep.supports.iter().map(|m| m.id.as_str()).collect();
        assert!(!ids.contains(&ep.query.id.as_str()));
        ids.push(&ep.query.id);
        ids.sort_unstable();
        ids.dedup();
        assert_eq!(ids.len(), 6);
    }

    #[test]
    fn all_masks_have_foreground() {
        let (ds, split) = fixture_and_split();
        for seed in 0..20 {
            let ep = sample_episode(&ds, &split, 3, 2, seed).unwrap();
            assert!(ep.query.mask.foreground() >= 1);
            for s in &ep.supports {
                assert!(s.mask.foreground() >= 1);
            }
        }
    }

    #[test]
    fn unknown_class_is_a_protocol_error() {
        let (ds, split) = fixture_and_split();
        let err = sample_episode(&ds, &split, 99, 1, 0).unwrap_err();
        assert!(matches!(err, Error::Protocol(_)));
    }

    #[test]
    fn registry_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("registry.txt");
        let entries = vec![
            RegistryEntry {
                fold: 1,
                shot: 5,
                class: 3,
                seed: 42,
            },
            RegistryEntry {
                fold: 1,
                shot: 5,
                class: 4,
                seed: 43,
            },
        ];
        write_registry(&path, &entries).unwrap();
        let back = read_registry(&path).unwrap();
        assert_eq!(back, entries);
        assert_eq!(registry_digest(&back), registry_digest(&entries));
    }

    #[test]
    fn malformed_registry_lines_are_rejected() {
        let origin = Path::new("registry.txt");
        assert!(parse_registry("1,2,3", origin).is_err());
        assert!(parse_registry("a,1,2,3", origin).is_err());
        assert!(parse_registry("1,1,2,3\n\n2,1,0,9\n", origin).is_ok());
    }

    #[test]
    fn registry_cycles_test_classes() {
        let (ds, split) = fixture_and_split();
        let entries = build_registry(&ds, &split, 1, 6, 5).unwrap();
        assert_eq!(entries.len(), 6);
        let classes: Vec<ClassId> = entries.iter().map(|e| e.class).collect();
        // test fold holds classes {3, 4} (square, triangle)
        assert_eq!(classes, vec![3, 4, 3, 4, 3, 4]);
        assert!(entries.iter().all(|e| e.fold == 1 && e.shot == 1));
        // seeds all distinct
        let mut seeds: Vec<u64> = entries.iter().map(|e| e.seed).collect();
        seeds.sort_unstable();
        seeds.dedup();
        assert_eq!(seeds.len(), 6);
    }
}
