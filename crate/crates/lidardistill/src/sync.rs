//! Temporal lidar-image pairing and manifest handling.
//!
//! A manifest is a JSONL file: one record per lidar frame with keys
//! `lidar`, `image`, `mask`, `featmap`, `labels`, `dt_ns`; absent fields are
//! null. Paths are stored relative to the manifest's directory so datasets
//! stay relocatable.

use std::collections::BTreeSet;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ManifestRecord {
    pub lidar: PathBuf,
    pub image: Option<PathBuf>,
    pub mask: Option<PathBuf>,
    pub featmap: Option<PathBuf>,
    pub labels: Option<PathBuf>,
    /// Signed image-minus-lidar timestamp gap, nanoseconds; null when unpaired.
    pub dt_ns: Option<i64>,
}

impl ManifestRecord {
    pub fn unpaired(lidar: PathBuf) -> Self {
        ManifestRecord { lidar, image: None, mask: None, featmap: None, labels: None, dt_ns: None }
    }
}

/// Ordered pairing records plus the directory that relative paths resolve
/// against (empty for in-memory manifests).
#[derive(Clone, Debug, Default, PartialEq)]
pub struct PairManifest {
    pub records: Vec<ManifestRecord>,
    pub base: PathBuf,
}

impl PairManifest {
    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    /// Resolves a record path against the manifest directory.
    pub fn resolve(&self, path: &Path) -> PathBuf {
        if path.is_absolute() {
            path.to_path_buf()
        } else {
            self.base.join(path)
        }
    }

    pub fn validate(&self) -> Result<()> {
        let mut seen = BTreeSet::new();
        for r in &self.records {
            if !seen.insert(&r.lidar) {
                return Err(Error::Validation(format!(
                    "duplicate lidar path {} in manifest",
                    r.lidar.display()
                )));
            }
        }
        Ok(())
    }
}

fn check_sorted(ts: &[u64], what: &str) -> Result<()> {
    if ts.windows(2).any(|w| w[0] > w[1]) {
        return Err(Error::Validation(format!("{what} timestamps are not sorted ascending")));
    }
    Ok(())
}

/// Pairs each lidar timestamp with the image minimizing |Δt|, ties broken
/// toward the earlier image. Returns, per lidar frame, the chosen image
/// index and signed gap, or `None` when the closest image is farther than
/// `max_dt_ns`. Two-pointer scan, O(n + m).
pub fn pair_timestamps(
    lidar_ts: &[u64],
    image_ts: &[u64],
    max_dt_ns: i64,
) -> Result<Vec<Option<(usize, i64)>>> {
    if max_dt_ns <= 0 {
        return Err(Error::Validation("max_dt_ns must be > 0".into()));
    }
    check_sorted(lidar_ts, "lidar")?;
    check_sorted(image_ts, "image")?;
    let gap = |img: u64, lid: u64| img as i128 - lid as i128;
    let mut out = Vec::with_capacity(lidar_ts.len());
    let mut j = 0usize;
    for &t in lidar_ts {
        if image_ts.is_empty() {
            out.push(None);
            continue;
        }
        while j + 1 < image_ts.len() && gap(image_ts[j + 1], t).abs() < gap(image_ts[j], t).abs() {
            j += 1;
        }
        let d = gap(image_ts[j], t);
        if d.abs() <= max_dt_ns as i128 {
            out.push(Some((j, d as i64)));
        } else {
            out.push(None);
        }
    }
    Ok(out)
}

/// Builds a manifest by pairing lidar frames with their temporally closest
/// images. Unpaired frames are retained with a null image.
pub fn pair_frames(
    lidar: &[(u64, PathBuf)],
    images: &[(u64, PathBuf)],
    max_dt_ns: i64,
) -> Result<PairManifest> {
    let lidar_ts: Vec<u64> = lidar.iter().map(|(t, _)| *t).collect();
    let image_ts: Vec<u64> = images.iter().map(|(t, _)| *t).collect();
    let pairing = pair_timestamps(&lidar_ts, &image_ts, max_dt_ns)?;
    let records = lidar
        .iter()
        .zip(&pairing)
        .map(|((_, lpath), pair)| {
            let mut rec = ManifestRecord::unpaired(lpath.clone());
            if let Some((j, dt)) = pair {
                rec.image = Some(images[*j].1.clone());
                rec.dt_ns = Some(*dt);
            }
            rec
        })
        .collect();
    let manifest = PairManifest { records, base: PathBuf::new() };
    manifest.validate()?;
    Ok(manifest)
}

/// Fills `mask`, `featmap`, and `labels` for records whose sibling files
/// exist under the dataset layout `<root>/{masks,features,labels}/<ts>.*`.
/// Masks and feature maps are keyed by image timestamp, label files by
/// lidar timestamp.
pub fn attach_dataset_artifacts(manifest: &mut PairManifest, root: &Path) {
    for rec in &mut manifest.records {
        if let Some(image) = &rec.image {
            if let Some(stem) = image.file_stem() {
                let mask = Path::new("masks").join(stem).with_extension("pgm");
                if root.join(&mask).is_file() {
                    rec.mask = Some(mask);
                }
                let featmap = Path::new("features").join(stem).with_extension("fmap");
                if root.join(&featmap).is_file() {
                    rec.featmap = Some(featmap);
                }
            }
        }
        if let Some(stem) = rec.lidar.file_stem() {
            let labels = Path::new("labels").join(stem).with_extension("plbl");
            if root.join(&labels).is_file() {
                rec.labels = Some(labels);
            }
        }
    }
}

/// Splits into contiguous train/val/test blocks. Validation and test get
/// `floor(n * ratio)` records each; the remainder goes to train.
pub fn split_manifest(
    manifest: &PairManifest,
    ratios: (f64, f64, f64),
) -> Result<(PairManifest, PairManifest, PairManifest)> {
    let (rt, rv, rs) = ratios;
    if (rt + rv + rs - 1.0).abs() > 1e-9 {
        return Err(Error::Validation(format!("split ratios must sum to 1, got {}", rt + rv + rs)));
    }
    if rt < 0.0 || rv < 0.0 || rs < 0.0 {
        return Err(Error::Validation("split ratios must be non-negative".into()));
    }
    let n = manifest.records.len();
    if n == 0 {
        return Err(Error::Validation("cannot split an empty manifest".into()));
    }
    // The epsilon guards floor against products like 20 * 0.15 landing a
    // hair below their exact integer value.
    let n_val = ((n as f64) * rv + 1e-9).floor() as usize;
    let n_test = ((n as f64) * rs + 1e-9).floor() as usize;
    let n_train = n - n_val - n_test;
    let part = |range: std::ops::Range<usize>| PairManifest {
        records: manifest.records[range].to_vec(),
        base: manifest.base.clone(),
    };
    Ok((
        part(0..n_train),
        part(n_train..n_train + n_val),
        part(n_train + n_val..n),
    ))
}

pub fn read_manifest(path: &Path) -> Result<PairManifest> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut records = Vec::new();
    for (lineno, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let rec: ManifestRecord = serde_json::from_str(line)
            .map_err(|e| Error::format(path, format!("line {}: {e}", lineno + 1)))?;
        records.push(rec);
    }
    let base = path.parent().map(Path::to_path_buf).unwrap_or_default();
    let manifest = PairManifest { records, base };
    manifest.validate()?;
    Ok(manifest)
}

pub fn write_manifest(manifest: &PairManifest, path: &Path) -> Result<()> {
    manifest.validate()?;
    let mut buf = Vec::new();
    for rec in &manifest.records {
        serde_json::to_writer(&mut buf, rec).map_err(|e| Error::Internal(e.to_string()))?;
        buf.push(b'\n');
    }
    let mut file = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    file.write_all(&buf).map_err(|e| Error::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use tempfile::tempdir;

    fn paths(ts: &[u64], ext: &str) -> Vec<(u64, PathBuf)> {
        ts.iter().map(|t| (*t, PathBuf::from(format!("{t}.{ext}")))).collect()
    }

    #[test]
    fn pairs_with_nearest_image() {
        let m = pair_frames(&paths(&[1000], "lfrm"), &paths(&[990, 1005, 1100], "ppm"), 10).unwrap();
        assert_eq!(m.records[0].image, Some(PathBuf::from("1005.ppm")));
        assert_eq!(m.records[0].dt_ns, Some(5));
    }

    #[test]
    fn tie_breaks_toward_earlier_image() {
        let m = pair_frames(&paths(&[1000], "lfrm"), &paths(&[995, 1005], "ppm"), 10).unwrap();
        assert_eq!(m.records[0].image, Some(PathBuf::from("995.ppm")));
        assert_eq!(m.records[0].dt_ns, Some(-5));
    }

    #[test]
    fn gap_beyond_max_dt_leaves_frame_unpaired() {
        let m = pair_frames(&paths(&[1000], "lfrm"), &paths(&[2000], "ppm"), 500).unwrap();
        assert_eq!(m.records[0].image, None);
        assert_eq!(m.records[0].dt_ns, None);
    }

    #[test]
    fn unsorted_input_is_rejected() {
        assert!(pair_timestamps(&[5, 3], &[1], 10).is_err());
        assert!(pair_timestamps(&[1], &[5, 3], 10).is_err());
    }

    #[test]
    fn split_20_records_is_14_3_3() {
        let manifest = PairManifest {
            records: (0..20).map(|i| ManifestRecord::unpaired(PathBuf::from(format!("{i}.lfrm")))).collect(),
            base: PathBuf::new(),
        };
        let (train, val, test) = split_manifest(&manifest, (0.70, 0.15, 0.15)).unwrap();
        assert_eq!((train.len(), val.len(), test.len()), (14, 3, 3));
        // contiguous, order preserving
        assert_eq!(train.records[0].lidar, PathBuf::from("0.lfrm"));
        assert_eq!(val.records[0].lidar, PathBuf::from("14.lfrm"));
        assert_eq!(test.records[2].lidar, PathBuf::from("19.lfrm"));
    }

    #[test]
    fn split_single_record_goes_to_train() {
        let manifest = PairManifest {
            records: vec![ManifestRecord::unpaired(PathBuf::from("a.lfrm"))],
            base: PathBuf::new(),
        };
        let (train, val, test) = split_manifest(&manifest, (0.70, 0.15, 0.15)).unwrap();
        assert_eq!((train.len(), val.len(), test.len()), (1, 0, 0));
    }

    #[test]
    fn split_empty_manifest_is_error() {
        let manifest = PairManifest::default();
        assert!(split_manifest(&manifest, (0.70, 0.15, 0.15)).is_err());
    }

    #[test]
    fn manifest_round_trip_and_null_fields() {
        let dir = tempdir().unwrap();
        let path = dir.path().join("manifest.jsonl");
        let manifest = PairManifest {
            records: vec![
                ManifestRecord {
                    lidar: "lidar/1.lfrm".into(),
                    image: Some("images/2.ppm".into()),
                    mask: None,
                    featmap: Some("features/2.fmap".into()),
                    labels: None,
                    dt_ns: Some(-3),
                },
                ManifestRecord::unpaired("lidar/9.lfrm".into()),
            ],
            base: PathBuf::new(),
        };
        write_manifest(&manifest, &path).unwrap();
        let text = fs::read_to_string(&path).unwrap();
        assert!(text.lines().next().unwrap().contains("\"mask\":null"));
        let back = read_manifest(&path).unwrap();
        assert_eq!(back.records, manifest.records);
        assert_eq!(back.base, dir.path());
    }

    #[test]
    fn duplicate_lidar_paths_rejected() {
        let manifest = PairManifest {
            records: vec![
                ManifestRecord::unpaired("a.lfrm".into()),
                ManifestRecord::unpaired("a.lfrm".into()),
            ],
            base: PathBuf::new(),
        };
        assert!(manifest.validate().is_err());
    }

    /// O(n*m) reference pairing used to check the two-pointer scan.
    fn brute_force_pair(lidar: &[u64], images: &[u64], max_dt: i64) -> Vec<Option<(usize, i64)>> {
        lidar
            .iter()
            .map(|&t| {
                let mut best: Option<(usize, i128)> = None;
                for (j, &it) in images.iter().enumerate() {
                    let d = it as i128 - t as i128;
                    let better = match best {
                        None => true,
                        Some((_, bd)) => d.abs() < bd.abs(),
                    };
                    if better {
                        best = Some((j, d));
                    }
                }
                best.and_then(|(j, d)| (d.abs() <= max_dt as i128).then(|| (j, d as i64)))
            })
            .collect()
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(256))]

        #[test]
        fn prop_pairing_matches_brute_force(
            mut lidar in prop::collection::vec(0u64..10_000, 0..30),
            mut images in prop::collection::vec(0u64..10_000, 0..30),
            max_dt in 1i64..5_000,
        ) {
            lidar.sort_unstable();
            images.sort_unstable();
            let fast = pair_timestamps(&lidar, &images, max_dt).unwrap();
            let slow = brute_force_pair(&lidar, &images, max_dt);
            // compare achieved |Δt| (several indices can tie at the same gap,
            // but the tie rule picks the earliest in both implementations)
            prop_assert_eq!(fast, slow);
        }

        #[test]
        fn prop_split_partitions_exactly(n in 1usize..200) {
            let manifest = PairManifest {
                records: (0..n).map(|i| ManifestRecord::unpaired(PathBuf::from(format!("{i}.lfrm")))).collect(),
                base: PathBuf::new(),
            };
            let (train, val, test) = split_manifest(&manifest, (0.70, 0.15, 0.15)).unwrap();
            prop_assert_eq!(train.len() + val.len() + test.len(), n);
            prop_assert_eq!(val.len(), (n as f64 * 0.15 + 1e-9).floor() as usize);
            prop_assert_eq!(test.len(), val.len());
            let rebuilt: Vec<_> = train
                .records
                .iter()
                .chain(&val.records)
                .chain(&test.records)
                .cloned()
                .collect();
            prop_assert_eq!(rebuilt, manifest.records);
        }
    }
}
