//! Class taxonomies, label remapping, and mask-to-point label transfer.
//!
//! The four-class structural space (wall, floor, ceiling, non-structural)
//! comes in two builtin variants that differ in what happens to unmatched
//! source classes: the pseudo-label variant ignores them, the real-label
//! variant folds them into non-structural. The asymmetry is deliberate; it
//! mirrors how pseudo and manual annotations are produced.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::frameio::SemanticMask;
use crate::geometry::ProjectionMap;

pub use crate::frameio::IGNORE_ID;

pub const WALL: u16 = 0;
pub const FLOOR: u16 = 1;
pub const CEILING: u16 = 2;
pub const NON_STRUCTURAL: u16 = 3;

pub const STRUCTURAL_CLASS_NAMES: [&str; 4] = ["wall", "floor", "ceiling", "non_structural"];

/// Total mapping from a source taxonomy to a target taxonomy of `n_classes`
/// ids; sources without an entry map to the ignore sentinel.
#[derive(Clone, Debug, PartialEq)]
pub struct LabelMap {
    table: BTreeMap<u16, u16>,
    pub n_classes: u16,
    pub class_names: Vec<String>,
}

impl LabelMap {
    pub fn new(entries: &[(u16, u16)], n_classes: u16, class_names: Vec<String>) -> Result<Self> {
        let mut table = BTreeMap::new();
        for &(src, dst) in entries {
            if dst != IGNORE_ID && dst >= n_classes {
                return Err(Error::Validation(format!(
                    "label map target {dst} out of range for {n_classes} classes"
                )));
            }
            if table.insert(src, dst).is_some() {
                return Err(Error::Validation(format!("duplicate source id {src} in label map")));
            }
        }
        Ok(LabelMap { table, n_classes, class_names })
    }

    /// Identity over `n_classes` ids.
    pub fn identity(n_classes: u16, class_names: Vec<String>) -> Self {
        let table = (0..n_classes).map(|i| (i, i)).collect();
        LabelMap { table, n_classes, class_names }
    }

    pub fn apply(&self, id: u16) -> u16 {
        if id == IGNORE_ID {
            return IGNORE_ID;
        }
        self.table.get(&id).copied().unwrap_or(IGNORE_ID)
    }
}

/// Element-wise remap; the ignore sentinel is preserved.
pub fn remap_mask(mask: &SemanticMask, map: &LabelMap) -> SemanticMask {
    SemanticMask {
        width: mask.width,
        height: mask.height,
        ids: mask.ids.iter().map(|&id| map.apply(id)).collect(),
    }
}

/// Remaps a per-point label sequence with the same semantics as
/// [`remap_mask`].
pub fn remap_labels(labels: &[u16], map: &LabelMap) -> Vec<u16> {
    labels.iter().map(|&id| map.apply(id)).collect()
}

/// Transfers mask labels to points: every valid point takes the label of
/// its rounded pixel, invalid points take the ignore sentinel. No occlusion
/// reasoning; points stacked on one pixel all receive that pixel's label.
pub fn transfer_labels(proj: &ProjectionMap, mask: &SemanticMask) -> Result<Vec<u16>> {
    if mask.width != proj.width || mask.height != proj.height {
        return Err(Error::Shape(format!(
            "mask is {}x{} but projection map is {}x{}",
            mask.width, mask.height, proj.width, proj.height
        )));
    }
    Ok(proj
        .points
        .iter()
        .map(|p| if p.valid { mask.get(p.px as usize, p.py as usize) } else { IGNORE_ID })
        .collect())
}

/// [`transfer_labels`] with an optional occlusion heuristic: a valid point
/// whose depth exceeds the shallowest point on its pixel by more than
/// `max_depth_gap_m` is ignored instead of labeled. Off by default in the
/// pipeline.
pub fn transfer_labels_depth_filtered(
    proj: &ProjectionMap,
    mask: &SemanticMask,
    max_depth_gap_m: f64,
) -> Result<Vec<u16>> {
    let mut labels = transfer_labels(proj, mask)?;
    let mut min_depth: BTreeMap<(i32, i32), f64> = BTreeMap::new();
    for p in proj.points.iter().filter(|p| p.valid) {
        let e = min_depth.entry((p.px, p.py)).or_insert(f64::INFINITY);
        *e = e.min(p.depth);
    }
    for (p, label) in proj.points.iter().zip(&mut labels) {
        if p.valid && p.depth > min_depth[&(p.px, p.py)] + max_depth_gap_m {
            *label = IGNORE_ID;
        }
    }
    Ok(labels)
}

/// Which builtin structural-map variant to construct.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum StructuralVariant {
    /// Unmatched source classes are ignored (how pseudo-labels are built).
    PseudoLabel,
    /// Unmatched source classes become non-structural (how manual
    /// annotations are defined).
    RealLabel,
}

/// Builds the four-class structural map over a named source taxonomy:
/// {wall, building} -> wall; {floor, sidewalk, road} -> floor;
/// ceiling -> ceiling; names in `extra_ignore` -> ignore; everything else
/// per the variant.
pub fn builtin_structural_map(
    source_names: &[&str],
    variant: StructuralVariant,
    extra_ignore: &[&str],
) -> LabelMap {
    let entries: Vec<(u16, u16)> = source_names
        .iter()
        .enumerate()
        .map(|(i, name)| {
            let lower = name.to_ascii_lowercase();
            let target = if extra_ignore.iter().any(|x| x.eq_ignore_ascii_case(&lower)) {
                IGNORE_ID
            } else {
                match lower.as_str() {
                    "wall" | "building" => WALL,
                    "floor" | "sidewalk" | "road" => FLOOR,
                    "ceiling" => CEILING,
                    _ => match variant {
                        StructuralVariant::PseudoLabel => IGNORE_ID,
                        StructuralVariant::RealLabel => NON_STRUCTURAL,
                    },
                }
            };
            (i as u16, target)
        })
        .collect();
    let names = STRUCTURAL_CLASS_NAMES.iter().map(|s| s.to_string()).collect();
    LabelMap::new(&entries, 4, names).expect("builtin map entries are valid by construction")
}

/// Loads a label map from a text file of `src_id<TAB>target_id|IGNORE`
/// lines; `#` comments and blank lines are skipped.
pub fn load_label_map(path: &Path, n_classes: u16) -> Result<LabelMap> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut entries = Vec::new();
    for (lineno, raw) in text.lines().enumerate() {
        let line = raw.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let mut parts = line.split('\t');
        let (src, dst) = match (parts.next(), parts.next(), parts.next()) {
            (Some(a), Some(b), None) => (a.trim(), b.trim()),
            _ => {
                return Err(Error::format(
                    path,
                    format!("line {}: expected `src_id<TAB>target_id|IGNORE`", lineno + 1),
                ))
            }
        };
        let src: u16 = src
            .parse()
            .map_err(|_| Error::format(path, format!("line {}: bad source id {src:?}", lineno + 1)))?;
        let dst: u16 = if dst.eq_ignore_ascii_case("IGNORE") {
            IGNORE_ID
        } else {
            dst.parse()
                .map_err(|_| Error::format(path, format!("line {}: bad target id {dst:?}", lineno + 1)))?
        };
        entries.push((src, dst));
    }
    let names = (0..n_classes).map(|i| format!("class_{i}")).collect();
    LabelMap::new(&entries, n_classes, names)
}

pub fn save_label_map(map: &LabelMap, path: &Path) -> Result<()> {
    let mut text = String::new();
    for (src, dst) in &map.table {
        if *dst == IGNORE_ID {
            text.push_str(&format!("{src}\tIGNORE\n"));
        } else {
            text.push_str(&format!("{src}\t{dst}\n"));
        }
    }
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::{ProjectedPoint, ProjectionMap};
    use proptest::prelude::*;
    use tempfile::tempdir;

    const SOURCES: [&str; 8] =
        ["wall", "building", "floor", "sidewalk", "road", "ceiling", "chair", "desk"];

    #[test]
    fn pseudo_variant_maps_structures_and_ignores_furniture() {
        let map = builtin_structural_map(&SOURCES, StructuralVariant::PseudoLabel, &[]);
        assert_eq!(map.apply(0), WALL); // wall
        assert_eq!(map.apply(1), WALL); // building
        assert_eq!(map.apply(3), FLOOR); // sidewalk
        assert_eq!(map.apply(5), CEILING);
        assert_eq!(map.apply(6), IGNORE_ID); // chair
        assert_eq!(map.apply(7), IGNORE_ID); // desk
    }

    #[test]
    fn real_variant_groups_remainder_into_non_structural() {
        let map = builtin_structural_map(&SOURCES, StructuralVariant::RealLabel, &[]);
        assert_eq!(map.apply(7), NON_STRUCTURAL); // desk
        assert_eq!(map.apply(5), CEILING);
        assert_eq!(map.apply(2), FLOOR);
    }

    #[test]
    fn extra_ignore_list_wins_in_both_variants() {
        for variant in [StructuralVariant::PseudoLabel, StructuralVariant::RealLabel] {
            let map = builtin_structural_map(&SOURCES, variant, &["chair"]);
            assert_eq!(map.apply(6), IGNORE_ID);
        }
    }

    #[test]
    fn unlisted_source_maps_to_ignore() {
        let map = LabelMap::new(&[(0, 1)], 4, vec![]).unwrap();
        assert_eq!(map.apply(99), IGNORE_ID);
        assert_eq!(map.apply(IGNORE_ID), IGNORE_ID);
    }

    #[test]
    fn remap_mask_is_elementwise_and_keeps_ignore() {
        let map = builtin_structural_map(&SOURCES, StructuralVariant::PseudoLabel, &[]);
        let mask = SemanticMask { width: 3, height: 1, ids: vec![1, 6, IGNORE_ID] };
        let out = remap_mask(&mask, &map);
        assert_eq!(out.ids, vec![WALL, IGNORE_ID, IGNORE_ID]);
    }

    #[test]
    fn remap_with_identity_is_idempotent() {
        let id = LabelMap::identity(4, vec![]);
        let mask = SemanticMask { width: 2, height: 2, ids: vec![0, 3, IGNORE_ID, 2] };
        assert_eq!(remap_mask(&mask, &id), mask);
    }

    fn proj_of(points: Vec<ProjectedPoint>) -> ProjectionMap {
        ProjectionMap { width: 4, height: 3, points }
    }

    fn valid_at(px: i32, py: i32, depth: f64) -> ProjectedPoint {
        ProjectedPoint { valid: true, u: px as f64, v: py as f64, px, py, depth }
    }

    fn invalid() -> ProjectedPoint {
        ProjectedPoint { valid: false, u: -1.0, v: -1.0, px: -1, py: -1, depth: -1.0 }
    }

    #[test]
    fn transfer_all_invalid_gives_all_ignore() {
        let mask = SemanticMask { width: 4, height: 3, ids: vec![0; 12] };
        let labels = transfer_labels(&proj_of(vec![invalid(), invalid()]), &mask).unwrap();
        assert_eq!(labels, vec![IGNORE_ID, IGNORE_ID]);
    }

    #[test]
    fn transfer_is_direct_pixel_lookup() {
        let mut mask = SemanticMask { width: 4, height: 3, ids: vec![0; 12] };
        mask.ids[2 * 4 + 3] = WALL + 1; // (px, py) = (3, 2)
        let labels = transfer_labels(&proj_of(vec![valid_at(3, 2, 1.0)]), &mask).unwrap();
        assert_eq!(labels, vec![WALL + 1]);
    }

    #[test]
    fn two_points_on_one_pixel_share_the_label() {
        let mut mask = SemanticMask { width: 4, height: 3, ids: vec![0; 12] };
        mask.ids[5] = 2; // (1, 1)
        let proj = proj_of(vec![valid_at(1, 1, 1.0), valid_at(1, 1, 5.0)]);
        let labels = transfer_labels(&proj, &mask).unwrap();
        assert_eq!(labels, vec![2, 2]);
    }

    #[test]
    fn depth_filter_ignores_occluded_points() {
        let mut mask = SemanticMask { width: 4, height: 3, ids: vec![0; 12] };
        mask.ids[5] = 2;
        let proj = proj_of(vec![valid_at(1, 1, 1.0), valid_at(1, 1, 5.0)]);
        let labels = transfer_labels_depth_filtered(&proj, &mask, 0.5).unwrap();
        assert_eq!(labels, vec![2, IGNORE_ID]);
    }

    #[test]
    fn transfer_dimension_mismatch_is_error() {
        let mask = SemanticMask { width: 2, height: 2, ids: vec![0; 4] };
        assert!(transfer_labels(&proj_of(vec![]), &mask).is_err());
    }

    #[test]
    fn load_label_map_parses_and_validates() {
        let dir = tempdir().unwrap();
        let path = dir.path().join("map.tsv");
        fs::write(&path, "# comment\n0\t1\n1\tIGNORE\n\n2\t3\n").unwrap();
        let map = load_label_map(&path, 4).unwrap();
        assert_eq!(map.apply(0), 1);
        assert_eq!(map.apply(1), IGNORE_ID);
        assert_eq!(map.apply(2), 3);

        fs::write(&path, "0\t1\n0\t2\n").unwrap();
        assert!(load_label_map(&path, 4).is_err(), "duplicate source must fail");
        fs::write(&path, "0\t9\n").unwrap();
        assert!(load_label_map(&path, 4).is_err(), "target out of range must fail");
    }

    #[test]
    fn label_map_save_load_round_trip() {
        let dir = tempdir().unwrap();
        let path = dir.path().join("map.tsv");
        let map = builtin_structural_map(&SOURCES, StructuralVariant::RealLabel, &["chair"]);
        save_label_map(&map, &path).unwrap();
        let back = load_label_map(&path, 4).unwrap();
        for src in 0..SOURCES.len() as u16 {
            assert_eq!(back.apply(src), map.apply(src));
        }
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(64))]

        /// Element-wise maps commute with pixel lookup.
        #[test]
        fn prop_remap_commutes_with_transfer(
            ids in prop::collection::vec(0u16..6, 12),
            pts in prop::collection::vec((0i32..4, 0i32..3, any::<bool>()), 0..10),
            targets in prop::collection::vec(prop::option::of(0u16..4), 6),
        ) {
            let mask = SemanticMask { width: 4, height: 3, ids };
            let entries: Vec<(u16, u16)> = targets
                .iter()
                .enumerate()
                .map(|(i, t)| (i as u16, t.unwrap_or(IGNORE_ID)))
                .collect();
            let map = LabelMap::new(&entries, 4, vec![]).unwrap();
            let proj = proj_of(
                pts.iter()
                    .map(|&(px, py, ok)| if ok { valid_at(px, py, 1.0) } else { invalid() })
                    .collect(),
            );
            let a = remap_labels(&transfer_labels(&proj, &mask).unwrap(), &map);
            let b = transfer_labels(&proj, &remap_mask(&mask, &map)).unwrap();
            prop_assert_eq!(a, b);
        }

        /// Invalid points never receive a real label.
        #[test]
        fn prop_invalid_points_stay_ignored(
            ids in prop::collection::vec(0u16..6, 12),
            n in 0usize..20,
        ) {
            let mask = SemanticMask { width: 4, height: 3, ids };
            let proj = proj_of((0..n).map(|_| invalid()).collect());
            let labels = transfer_labels(&proj, &mask).unwrap();
            prop_assert!(labels.iter().all(|&l| l == IGNORE_ID));
        }
    }
}
