//! On-disk layout for stacks and datasets.
//!
//! A stack directory holds `manifest.json` plus one headerless plane file per
//! b-value (`f32`, little-endian, row-major) and one byte-per-pixel file per
//! mask (0 or 1). A dataset directory holds `dataset.json` and one stack
//! directory per case.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::dwi::{BValue, DwiStack, ImagePlane, Label, LabeledCase, Mask, Protocol, ThetaPolicy};
use crate::error::{Error, Result};

pub const STACK_FORMAT: &str = "mbda-stack";
pub const DATASET_FORMAT: &str = "mbda-dataset";
pub const FORMAT_VERSION: u32 = 1;
pub const MANIFEST_NAME: &str = "manifest.json";
pub const DATASET_INDEX_NAME: &str = "dataset.json";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StackManifest {
    pub format: String,
    pub version: u32,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub id: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub label: Option<Label>,
    pub width: usize,
    pub height: usize,
    /// Kept as raw numbers so ordering violations surface as protocol errors.
    pub protocol: Vec<f64>,
    pub planes: Vec<String>,
    pub lesion_mask: String,
    pub fat_mask: String,
    pub theta: f64,
    #[serde(default)]
    pub theta_policy: ThetaPolicy,
    /// Free-form audit records (adaptation reports, provenance).
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub annotations: BTreeMap<String, serde_json::Value>,
}

pub fn plane_file_name(b: BValue) -> String {
    format!("b{}.f32", b.value())
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value).map_err(|e| Error::json(path, e))?;
    text.push('\n');
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

pub fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| Error::json(path, e))
}

pub fn write_plane(path: &Path, plane: &ImagePlane) -> Result<()> {
    let mut bytes = Vec::with_capacity(plane.data().len() * 4);
    for &v in plane.data() {
        bytes.extend_from_slice(&(v as f32).to_le_bytes());
    }
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

pub fn read_plane(path: &Path, width: usize, height: usize) -> Result<ImagePlane> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let expected = width * height * 4;
    if bytes.len() != expected {
        return Err(Error::format(
            path,
            format!("expected {expected} bytes for a {width}x{height} f32 plane, found {}", bytes.len()),
        ));
    }
    let data = bytes
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64)
        .collect();
    ImagePlane::new(width, height, data).map_err(|e| Error::format(path, e.to_string()))
}

pub fn write_mask(path: &Path, mask: &Mask) -> Result<()> {
    let bytes: Vec<u8> = mask.data().iter().map(|&m| m as u8).collect();
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

pub fn read_mask(path: &Path, width: usize, height: usize) -> Result<Mask> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    if bytes.len() != width * height {
        return Err(Error::format(
            path,
            format!("expected {} mask bytes, found {}", width * height, bytes.len()),
        ));
    }
    let data = bytes
        .iter()
        .map(|&b| match b {
            0 => Ok(false),
            1 => Ok(true),
            other => Err(Error::format(path, format!("mask byte {other} is not 0 or 1"))),
        })
        .collect::<Result<Vec<_>>>()?;
    Mask::new(width, height, data)
}

/// Manifest describing `stack` with default file names and no id or label.
pub fn manifest_for(stack: &DwiStack) -> StackManifest {
    let (width, height) = stack.dims();
    StackManifest {
        format: STACK_FORMAT.into(),
        version: FORMAT_VERSION,
        id: None,
        label: None,
        width,
        height,
        protocol: stack.protocol().values(),
        planes: stack.protocol().bvalues().iter().map(|b| plane_file_name(*b)).collect(),
        lesion_mask: "lesion_mask.u8".into(),
        fat_mask: "fat_mask.u8".into(),
        theta: stack.theta(),
        theta_policy: if stack.fat_mask().is_empty() {
            ThetaPolicy::ZeroFallback
        } else {
            ThetaPolicy::Strict
        },
        annotations: BTreeMap::new(),
    }
}

/// Writes a stack plus `manifest` into `dir`, returning the manifest path.
pub fn save_stack_with(stack: &DwiStack, manifest: &StackManifest, dir: &Path) -> Result<PathBuf> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    for (plane, name) in stack.planes().iter().zip(&manifest.planes) {
        write_plane(&dir.join(name), plane)?;
    }
    write_mask(&dir.join(&manifest.lesion_mask), stack.lesion_mask())?;
    write_mask(&dir.join(&manifest.fat_mask), stack.fat_mask())?;
    let path = dir.join(MANIFEST_NAME);
    write_json(&path, manifest)?;
    Ok(path)
}

pub fn save_stack(stack: &DwiStack, dir: &Path) -> Result<PathBuf> {
    save_stack_with(stack, &manifest_for(stack), dir)
}

pub fn save_stack_annotated(
    stack: &DwiStack,
    dir: &Path,
    annotations: BTreeMap<String, serde_json::Value>,
) -> Result<PathBuf> {
    let mut manifest = manifest_for(stack);
    manifest.annotations = annotations;
    save_stack_with(stack, &manifest, dir)
}

pub fn save_case(case: &LabeledCase, dir: &Path) -> Result<PathBuf> {
    let mut manifest = manifest_for(&case.stack);
    manifest.id = Some(case.id.clone());
    manifest.label = Some(case.label);
    save_stack_with(&case.stack, &manifest, dir)
}

fn manifest_path(path: &Path) -> PathBuf {
    if path.is_dir() {
        path.join(MANIFEST_NAME)
    } else {
        path.to_path_buf()
    }
}

/// Reads a manifest and its stack. `path` may name the manifest file or
/// the stack directory.
pub fn load_stack_with_manifest(path: &Path) -> Result<(DwiStack, StackManifest)> {
    let path = manifest_path(path);
    let dir = path.parent().unwrap_or(Path::new("."));
    let manifest: StackManifest = read_json(&path)?;
    if manifest.format != STACK_FORMAT {
        return Err(Error::format(&path, format!("unknown format tag {:?}", manifest.format)));
    }
    if manifest.version != FORMAT_VERSION {
        return Err(Error::format(&path, format!("unsupported version {}", manifest.version)));
    }
    let protocol = Protocol::from_values(&manifest.protocol)?;
    if manifest.planes.len() != protocol.len() {
        return Err(Error::DimensionMismatch {
            expected: format!("{} plane files", protocol.len()),
            found: format!("{} plane files", manifest.planes.len()),
        });
    }
    let (w, h) = (manifest.width, manifest.height);
    if w == 0 || h == 0 {
        return Err(Error::format(&path, "width and height must be positive"));
    }
    let planes = manifest
        .planes
        .iter()
        .map(|name| read_plane(&dir.join(name), w, h))
        .collect::<Result<Vec<_>>>()?;
    let lesion = read_mask(&dir.join(&manifest.lesion_mask), w, h)?;
    let fat = read_mask(&dir.join(&manifest.fat_mask), w, h)?;
    let stack = DwiStack::new(protocol, planes, lesion, fat, manifest.theta_policy)?;
    Ok((stack, manifest))
}

pub fn load_stack(path: &Path) -> Result<DwiStack> {
    load_stack_with_manifest(path).map(|(s, _)| s)
}

pub fn load_case(path: &Path) -> Result<LabeledCase> {
    let (stack, manifest) = load_stack_with_manifest(path)?;
    let path = manifest_path(path);
    let id = manifest.id.ok_or_else(|| Error::format(&path, "manifest has no case id"))?;
    let label = manifest.label.ok_or_else(|| Error::format(&path, "manifest has no label"))?;
    Ok(LabeledCase { id, stack, label })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetEntry {
    pub id: String,
    pub label: Label,
    /// Stack directory relative to the dataset directory.
    pub dir: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetIndex {
    pub format: String,
    pub version: u32,
    pub seed: u64,
    pub cases: Vec<DatasetEntry>,
    #[serde(default)]
    pub config: serde_json::Value,
}

pub fn save_dataset(cases: &[LabeledCase], seed: u64, config: serde_json::Value, dir: &Path) -> Result<PathBuf> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut entries = Vec::with_capacity(cases.len());
    for case in cases {
        save_case(case, &dir.join(&case.id))?;
        entries.push(DatasetEntry { id: case.id.clone(), label: case.label, dir: case.id.clone() });
    }
    let index = DatasetIndex {
        format: DATASET_FORMAT.into(),
        version: FORMAT_VERSION,
        seed,
        cases: entries,
        config,
    };
    let path = dir.join(DATASET_INDEX_NAME);
    write_json(&path, &index)?;
    Ok(path)
}

/// Loads every case listed in a dataset index. `path` may name the index
/// file or the dataset directory.
pub fn load_dataset(path: &Path) -> Result<(DatasetIndex, Vec<LabeledCase>)> {
    let path = if path.is_dir() { path.join(DATASET_INDEX_NAME) } else { path.to_path_buf() };
    let dir = path.parent().unwrap_or(Path::new("."));
    let index: DatasetIndex = read_json(&path)?;
    if index.format != DATASET_FORMAT {
        return Err(Error::format(&path, format!("unknown format tag {:?}", index.format)));
    }
    let mut seen = std::collections::BTreeSet::new();
    let mut cases = Vec::with_capacity(index.cases.len());
    for entry in &index.cases {
        if !seen.insert(entry.id.clone()) {
            return Err(Error::format(&path, format!("duplicate case id {}", entry.id)));
        }
        let case = load_case(&dir.join(&entry.dir))?;
        if case.id != entry.id || case.label != entry.label {
            return Err(Error::format(&path, format!("index entry {} disagrees with its manifest", entry.id)));
        }
        cases.push(case);
    }
    Ok((index, cases))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn small_stack(bvals: &[f64], values: &[f64], lesion: Vec<bool>, fat: Vec<bool>, w: usize, h: usize) -> DwiStack {
        let protocol = Protocol::from_values(bvals).unwrap();
        let planes = values.chunks(w * h).map(|c| ImagePlane::new(w, h, c.to_vec()).unwrap()).collect();
        DwiStack::new(protocol, planes, Mask::new(w, h, lesion).unwrap(), Mask::new(w, h, fat).unwrap(), ThetaPolicy::ZeroFallback)
            .unwrap()
    }

    fn demo_stack(w: usize, h: usize, nb: usize) -> DwiStack {
        let bvals = [0.0, 100.0, 750.0, 1500.0];
        let protocol = Protocol::from_values(&bvals[..nb]).unwrap();
        let planes = (0..nb)
            .map(|k| ImagePlane::new(w, h, (0..w * h).map(|i| (i as f32 * 0.5 + k as f32) as f64).collect()).unwrap())
            .collect();
        let lesion = Mask::from_fn(w, h, |x, y| x > 2 && y > 2 && x < 6 && y < 6);
        let fat = Mask::from_fn(w, h, |x, _| x == 0);
        DwiStack::new(protocol, planes, lesion, fat, ThetaPolicy::Strict).unwrap()
    }

    #[test]
    fn two_bvalue_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let s = demo_stack(8, 8, 2);
        let path = save_stack(&s, dir.path()).unwrap();
        let back = load_stack(&path).unwrap();
        assert_eq!(back.planes().len(), 2);
        assert_eq!(back, s);
    }

    #[test]
    fn four_bvalue_manifest_lists_planes_in_order() {
        let dir = tempfile::tempdir().unwrap();
        let s = demo_stack(64, 64, 4);
        let path = save_stack(&s, dir.path()).unwrap();
        let m: StackManifest = read_json(&path).unwrap();
        assert_eq!(m.planes, vec!["b0.f32", "b100.f32", "b750.f32", "b1500.f32"]);
        assert_eq!(fs::metadata(dir.path().join("b750.f32")).unwrap().len(), 64 * 64 * 4);
    }

    #[test]
    fn empty_lesion_mask_survives() {
        let dir = tempfile::tempdir().unwrap();
        let s = small_stack(&[0.0, 900.0], &[1.0, 2.0, 3.0, 4.0, 0.5, 0.5, 0.5, 0.5], vec![false; 4], vec![true, false, false, false], 2, 2);
        let back = load_stack(&save_stack(&s, dir.path()).unwrap()).unwrap();
        assert!(back.lesion_mask().is_empty());
        assert_eq!(back, s);
    }

    #[test]
    fn decreasing_protocol_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let s = demo_stack(4, 4, 2);
        let path = save_stack(&s, dir.path()).unwrap();
        let mut m: StackManifest = read_json(&path).unwrap();
        m.protocol = vec![100.0, 0.0];
        write_json(&path, &m).unwrap();
        assert!(matches!(load_stack(&path), Err(Error::Protocol(_))));
    }

    #[test]
    fn truncated_plane_is_a_format_error() {
        let dir = tempfile::tempdir().unwrap();
        let s = demo_stack(4, 4, 2);
        let path = save_stack(&s, dir.path()).unwrap();
        let plane = dir.path().join("b100.f32");
        let mut bytes = fs::read(&plane).unwrap();
        bytes.pop();
        fs::write(&plane, bytes).unwrap();
        assert!(matches!(load_stack(&path), Err(Error::Format { .. })));
    }

    #[test]
    fn bad_format_tag_and_mask_byte() {
        let dir = tempfile::tempdir().unwrap();
        let s = demo_stack(4, 4, 2);
        let path = save_stack(&s, dir.path()).unwrap();
        fs::write(dir.path().join("fat_mask.u8"), vec![2u8; 16]).unwrap();
        assert!(matches!(load_stack(&path), Err(Error::Format { .. })));

        let mut m: StackManifest = read_json(&path).unwrap();
        m.format = "nifti".into();
        write_json(&path, &m).unwrap();
        assert!(matches!(load_stack(dir.path()), Err(Error::Format { .. })));
    }

    #[test]
    fn case_round_trip_keeps_id_and_label() {
        let dir = tempfile::tempdir().unwrap();
        let case = LabeledCase { id: "case007".into(), stack: demo_stack(5, 5, 3), label: Label::Malignant };
        save_case(&case, dir.path()).unwrap();
        assert_eq!(load_case(dir.path()).unwrap(), case);
    }

    fn arb_stack() -> impl Strategy<Value = DwiStack> {
        (1usize..6, 1usize..6, 2usize..5).prop_flat_map(|(w, h, nb)| {
            let n = w * h;
            (
                Just((w, h, nb)),
                proptest::collection::vec(0.0f32..1.0e4, n * nb),
                proptest::collection::vec(any::<bool>(), n),
                proptest::collection::vec(any::<bool>(), n),
                proptest::collection::btree_set(1u16..3000, nb - 1),
            )
                .prop_map(|((w, h, _nb), vals, lesion, fat, bset)| {
                    let mut bvals = vec![0.0];
                    bvals.extend(bset.into_iter().map(f64::from));
                    let protocol = Protocol::from_values(&bvals).unwrap();
                    let planes = vals
                        .chunks(w * h)
                        .map(|c| ImagePlane::new(w, h, c.iter().map(|&v| v as f64).collect()).unwrap())
                        .collect();
                    DwiStack::new(
                        protocol,
                        planes,
                        Mask::new(w, h, lesion).unwrap(),
                        Mask::new(w, h, fat).unwrap(),
                        ThetaPolicy::ZeroFallback,
                    )
                    .unwrap()
                })
        })
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(48))]
        #[test]
        fn save_load_is_bit_exact(stack in arb_stack()) {
            let dir = tempfile::tempdir().unwrap();
            let back = load_stack(&save_stack(&stack, dir.path()).unwrap()).unwrap();
            prop_assert_eq!(back.protocol(), stack.protocol());
            for (a, b) in back.planes().iter().zip(stack.planes()) {
                let bits_a: Vec<u64> = a.data().iter().map(|v| v.to_bits()).collect();
                let bits_b: Vec<u64> = b.data().iter().map(|v| v.to_bits()).collect();
                prop_assert_eq!(bits_a, bits_b);
            }
            prop_assert_eq!(back.theta().to_bits(), stack.theta().to_bits());
            prop_assert_eq!(back, stack);
        }
    }
}
