//! Samples, datasets, the on-disk sample format and patient-wise splitting.
//!
//! A sample directory holds `meta.json` plus raw little-endian tensors:
//! `volume.f32` (H×W×D, row-major), one `image_<name>.f32` per 2D modality
//! (H×W), `mask.u8` (H×W, values 0/1) and optionally `surface.i32` (H×W
//! depth indices). A dataset root holds `manifest.json` listing the sample
//! directories with their patient ids.

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::path::{Path, PathBuf};

use ndarray::{Array2, Array3};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const FORMAT_VERSION: u32 = 1;

/// Volumetric intensities, axes `(H, W, D)`; `D` is the A-scan axis.
#[derive(Debug, Clone, PartialEq)]
pub struct VoxelGrid {
    data: Array3<f32>,
}

impl VoxelGrid {
    pub fn new(data: Array3<f32>) -> Result<Self> {
        if data.dim().2 == 0 || data.dim().0 == 0 || data.dim().1 == 0 {
            return Err(Error::Invariant(format!("volume dims {:?} must be positive", data.dim())));
        }
        if let Some(v) = data.iter().find(|v| !v.is_finite()) {
            return Err(Error::Invariant(format!("volume holds non-finite value {v}")));
        }
        Ok(Self { data })
    }

    pub fn zeros(dims: (usize, usize, usize)) -> Self {
        Self { data: Array3::zeros(dims) }
    }

    pub fn data(&self) -> &Array3<f32> {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut Array3<f32> {
        &mut self.data
    }

    pub fn into_inner(self) -> Array3<f32> {
        self.data
    }

    pub fn dims(&self) -> (usize, usize, usize) {
        self.data.dim()
    }

    pub fn enface_dims(&self) -> (usize, usize) {
        let (h, w, _) = self.data.dim();
        (h, w)
    }
}

/// Planar intensities, axes `(H, W)`.
#[derive(Debug, Clone, PartialEq)]
pub struct EnFaceGrid {
    data: Array2<f32>,
}

impl EnFaceGrid {
    pub fn new(data: Array2<f32>) -> Result<Self> {
        if data.is_empty() {
            return Err(Error::Invariant("image must be nonempty".into()));
        }
        if let Some(v) = data.iter().find(|v| !v.is_finite()) {
            return Err(Error::Invariant(format!("image holds non-finite value {v}")));
        }
        Ok(Self { data })
    }

    pub fn data(&self) -> &Array2<f32> {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut Array2<f32> {
        &mut self.data
    }

    pub fn into_inner(self) -> Array2<f32> {
        self.data
    }

    pub fn dims(&self) -> (usize, usize) {
        self.data.dim()
    }
}

/// Binary en-face mask.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MaskGrid {
    data: Array2<u8>,
}

impl MaskGrid {
    pub fn new(data: Array2<u8>) -> Result<Self> {
        if let Some(v) = data.iter().find(|&&v| v > 1) {
            return Err(Error::Invariant(format!("mask value {v} is not binary")));
        }
        Ok(Self { data })
    }

    pub fn zeros(dims: (usize, usize)) -> Self {
        Self { data: Array2::zeros(dims) }
    }

    pub fn from_bools(data: &Array2<bool>) -> Self {
        Self { data: data.mapv(u8::from) }
    }

    /// Thresholds a probability map: `p >= threshold` is foreground.
    pub fn from_probabilities(p: &Array2<f32>, threshold: f32) -> Self {
        Self { data: p.mapv(|v| u8::from(v >= threshold)) }
    }

    pub fn data(&self) -> &Array2<u8> {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut Array2<u8> {
        &mut self.data
    }

    pub fn dims(&self) -> (usize, usize) {
        self.data.dim()
    }

    pub fn count(&self) -> usize {
        self.data.iter().filter(|&&v| v == 1).count()
    }
}

/// Per-column depth index of the flattening reference surface.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SurfaceMap {
    depth: Array2<i32>,
}

impl SurfaceMap {
    pub fn new(depth: Array2<i32>) -> Self {
        Self { depth }
    }

    pub fn depth(&self) -> &Array2<i32> {
        &self.depth
    }

    pub fn dims(&self) -> (usize, usize) {
        self.depth.dim()
    }

    /// Checks every index against a volume depth `d`.
    pub fn check_range(&self, d: usize) -> Result<()> {
        match self.depth.iter().find(|&&v| v < 0 || v as usize >= d) {
            Some(v) => Err(Error::Invariant(format!("surface index {v} outside depth range [0, {d})"))),
            None => Ok(()),
        }
    }
}

/// Millimetres per voxel along `(H, W, D)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Spacing {
    pub h: f64,
    pub w: f64,
    pub d: f64,
}

impl Spacing {
    pub fn new(h: f64, w: f64, d: f64) -> Result<Self> {
        let s = Self { h, w, d };
        s.validate()?;
        Ok(s)
    }

    pub fn validate(&self) -> Result<()> {
        if [self.h, self.w, self.d].iter().all(|v| v.is_finite() && *v > 0.0) {
            Ok(())
        } else {
            Err(Error::Invariant(format!("spacing {self:?} must be strictly positive")))
        }
    }
}

/// One co-registered case.
#[derive(Debug, Clone, PartialEq)]
pub struct StudySample {
    pub patient_id: String,
    pub eye_id: String,
    pub volume: VoxelGrid,
    pub images: BTreeMap<String, EnFaceGrid>,
    pub mask: MaskGrid,
    pub surface: Option<SurfaceMap>,
    pub spacing: Spacing,
}

impl StudySample {
    pub fn validate(&self) -> Result<()> {
        if self.patient_id.is_empty() {
            return Err(Error::Invariant("patient_id must be nonempty".into()));
        }
        self.spacing.validate()?;
        let (h, w, d) = self.volume.dims();
        if self.mask.dims() != (h, w) {
            return Err(Error::ShapeMismatch {
                what: "mask vs volume en-face".into(),
                expected: vec![h, w],
                found: vec![self.mask.dims().0, self.mask.dims().1],
            });
        }
        if let Some(s) = &self.surface {
            if s.dims() != (h, w) {
                return Err(Error::ShapeMismatch {
                    what: "surface vs volume en-face".into(),
                    expected: vec![h, w],
                    found: vec![s.dims().0, s.dims().1],
                });
            }
            s.check_range(d)?;
        }
        Ok(())
    }

    /// The single 2D modality, or the named one when several are present.
    pub fn image(&self, name: Option<&str>) -> Option<&EnFaceGrid> {
        match name {
            Some(n) => self.images.get(n),
            None => self.images.values().next(),
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
struct Shapes {
    volume: [usize; 3],
    mask: [usize; 2],
    images: BTreeMap<String, [usize; 2]>,
    surface: Option<[usize; 2]>,
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
struct Dtypes {
    volume: String,
    image: String,
    mask: String,
    surface: String,
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
struct SampleMeta {
    format_version: u32,
    patient_id: String,
    eye_id: String,
    shapes: Shapes,
    spacing_mm: [f64; 3],
    dtypes: Dtypes,
    modalities: Vec<String>,
    surface: Option<String>,
}

fn image_file(name: &str) -> String {
    format!("image_{name}.f32")
}

fn write_bytes(path: &Path, bytes: &[u8]) -> Result<()> {
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

fn read_bytes(path: &Path) -> Result<Vec<u8>> {
    fs::read(path).map_err(|e| Error::io(path, e))
}

fn f32_bytes<'a>(values: impl Iterator<Item = &'a f32>) -> Vec<u8> {
    values.flat_map(|v| v.to_le_bytes()).collect()
}

fn check_len(path: &Path, bytes: &[u8], width: usize, dims: &[usize]) -> Result<()> {
    let expected: usize = dims.iter().product();
    if bytes.len() % width != 0 || bytes.len() / width != expected {
        return Err(Error::ShapeMismatch {
            what: path.display().to_string(),
            expected: dims.to_vec(),
            found: vec![bytes.len() / width],
        });
    }
    Ok(())
}

fn read_f32(path: &Path, dims: &[usize]) -> Result<Vec<f32>> {
    let bytes = read_bytes(path)?;
    check_len(path, &bytes, 4, dims)?;
    Ok(bytes.chunks_exact(4).map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]])).collect())
}

/// Writes `sample` into `dir` (created if needed).
pub fn save_sample(sample: &StudySample, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let (h, w, d) = sample.volume.dims();
    let meta = SampleMeta {
        format_version: FORMAT_VERSION,
        patient_id: sample.patient_id.clone(),
        eye_id: sample.eye_id.clone(),
        shapes: Shapes {
            volume: [h, w, d],
            mask: [sample.mask.dims().0, sample.mask.dims().1],
            images: sample.images.iter().map(|(k, v)| (k.clone(), [v.dims().0, v.dims().1])).collect(),
            surface: sample.surface.as_ref().map(|s| [s.dims().0, s.dims().1]),
        },
        spacing_mm: [sample.spacing.h, sample.spacing.w, sample.spacing.d],
        dtypes: Dtypes { volume: "f32le".into(), image: "f32le".into(), mask: "u8".into(), surface: "i32le".into() },
        modalities: sample.images.keys().cloned().collect(),
        surface: sample.surface.as_ref().map(|_| "surface.i32".to_string()),
    };
    let meta_json = serde_json::to_string_pretty(&meta).expect("meta serializes");
    write_bytes(&dir.join("meta.json"), meta_json.as_bytes())?;
    write_bytes(&dir.join("volume.f32"), &f32_bytes(sample.volume.data().iter()))?;
    for (name, img) in &sample.images {
        write_bytes(&dir.join(image_file(name)), &f32_bytes(img.data().iter()))?;
    }
    let mask: Vec<u8> = sample.mask.data().iter().copied().collect();
    write_bytes(&dir.join("mask.u8"), &mask)?;
    if let Some(s) = &sample.surface {
        let bytes: Vec<u8> = s.depth().iter().flat_map(|v| v.to_le_bytes()).collect();
        write_bytes(&dir.join("surface.i32"), &bytes)?;
    }
    Ok(())
}

/// Reads a sample written by [`save_sample`] and validates its invariants.
pub fn load_sample(dir: &Path) -> Result<StudySample> {
    let meta_path = dir.join("meta.json");
    let meta_text = fs::read_to_string(&meta_path).map_err(|e| Error::io(&meta_path, e))?;
    let meta: SampleMeta = serde_json::from_str(&meta_text)
        .map_err(|e| Error::Descriptor { path: meta_path.clone(), reason: e.to_string() })?;
    if meta.format_version != FORMAT_VERSION {
        return Err(Error::Descriptor {
            path: meta_path,
            reason: format!("unsupported format_version {}", meta.format_version),
        });
    }
    let [h, w, d] = meta.shapes.volume;
    let vol = read_f32(&dir.join("volume.f32"), &[h, w, d])?;
    let volume = VoxelGrid::new(Array3::from_shape_vec((h, w, d), vol).expect("length checked"))?;

    let mut images = BTreeMap::new();
    for name in &meta.modalities {
        let [ih, iw] = *meta.shapes.images.get(name).ok_or_else(|| Error::Descriptor {
            path: meta_path.clone(),
            reason: format!("no shape for modality {name}"),
        })?;
        let px = read_f32(&dir.join(image_file(name)), &[ih, iw])?;
        images.insert(name.clone(), EnFaceGrid::new(Array2::from_shape_vec((ih, iw), px).expect("length checked"))?);
    }

    let [mh, mw] = meta.shapes.mask;
    let mask_path = dir.join("mask.u8");
    let mask_bytes = read_bytes(&mask_path)?;
    check_len(&mask_path, &mask_bytes, 1, &[mh, mw])?;
    let mask = MaskGrid::new(Array2::from_shape_vec((mh, mw), mask_bytes).expect("length checked"))?;

    let surface = match (&meta.surface, meta.shapes.surface) {
        (Some(file), Some([sh, sw])) => {
            let path = dir.join(file);
            let bytes = read_bytes(&path)?;
            check_len(&path, &bytes, 4, &[sh, sw])?;
            let idx: Vec<i32> = bytes.chunks_exact(4).map(|c| i32::from_le_bytes([c[0], c[1], c[2], c[3]])).collect();
            Some(SurfaceMap::new(Array2::from_shape_vec((sh, sw), idx).expect("length checked")))
        }
        (None, None) => None,
        _ => {
            return Err(Error::Descriptor { path: meta_path, reason: "surface file and shape disagree".into() });
        }
    };

    let [sh, sw, sd] = meta.spacing_mm;
    let sample = StudySample {
        patient_id: meta.patient_id,
        eye_id: meta.eye_id,
        volume,
        images,
        mask,
        surface,
        spacing: Spacing { h: sh, w: sw, d: sd },
    };
    sample.validate()?;
    Ok(sample)
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub sample_dir: String,
    pub patient_id: String,
}

/// Index of a dataset directory.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DatasetManifest {
    #[serde(skip)]
    pub root: PathBuf,
    pub format_version: u32,
    pub samples: Vec<ManifestEntry>,
}

impl DatasetManifest {
    pub fn new(root: impl Into<PathBuf>, samples: Vec<ManifestEntry>) -> Result<Self> {
        let m = Self { root: root.into(), format_version: FORMAT_VERSION, samples };
        m.validate()?;
        Ok(m)
    }

    pub fn validate(&self) -> Result<()> {
        let mut dirs = BTreeSet::new();
        for e in &self.samples {
            if e.patient_id.is_empty() {
                return Err(Error::Invariant(format!("sample {} has an empty patient_id", e.sample_dir)));
            }
            if !dirs.insert(&e.sample_dir) {
                return Err(Error::Invariant(format!("duplicate sample_dir {}", e.sample_dir)));
            }
        }
        Ok(())
    }

    pub fn patients(&self) -> BTreeSet<String> {
        self.samples.iter().map(|e| e.patient_id.clone()).collect()
    }

    /// Sample directories (absolute) belonging to any of `patients`, in manifest order.
    pub fn sample_dirs(&self, patients: &BTreeSet<String>) -> Vec<PathBuf> {
        self.samples
            .iter()
            .filter(|e| patients.contains(&e.patient_id))
            .map(|e| self.root.join(&e.sample_dir))
            .collect()
    }

    pub fn save(&self) -> Result<()> {
        fs::create_dir_all(&self.root).map_err(|e| Error::io(&self.root, e))?;
        let path = self.root.join("manifest.json");
        let json = serde_json::to_string_pretty(self).expect("manifest serializes");
        write_bytes(&path, json.as_bytes())
    }

    pub fn load(root: &Path) -> Result<Self> {
        let path = root.join("manifest.json");
        let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        let mut m: Self =
            serde_json::from_str(&text).map_err(|e| Error::Descriptor { path: path.clone(), reason: e.to_string() })?;
        m.root = root.to_path_buf();
        m.validate()?;
        Ok(m)
    }
}

/// Patient-level partition of a dataset.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SplitSpec {
    pub train: BTreeSet<String>,
    pub val: BTreeSet<String>,
    pub test: BTreeSet<String>,
    /// Fraction of the full training partition retained.
    pub train_pct: f64,
    pub seed: u64,
}

impl SplitSpec {
    pub fn is_disjoint(&self) -> bool {
        self.train.is_disjoint(&self.val) && self.train.is_disjoint(&self.test) && self.val.is_disjoint(&self.test)
    }
}

/// Largest-remainder apportionment of `n` items to `fractions`.
pub fn largest_remainder(n: usize, fractions: &[f64]) -> Vec<usize> {
    let quotas: Vec<f64> = fractions.iter().map(|f| f * n as f64).collect();
    let mut sizes: Vec<usize> = quotas.iter().map(|q| q.floor() as usize).collect();
    let assigned: usize = sizes.iter().sum();
    let mut order: Vec<usize> = (0..fractions.len()).collect();
    // stable: equal remainders favour the earlier partition
    order.sort_by(|&a, &b| {
        let ra = quotas[a] - quotas[a].floor();
        let rb = quotas[b] - quotas[b].floor();
        rb.partial_cmp(&ra).unwrap_or(std::cmp::Ordering::Equal)
    });
    for &i in order.iter().take(n.saturating_sub(assigned)) {
        sizes[i] += 1;
    }
    sizes
}

/// Assigns every patient to exactly one of train/val/test.
pub fn split_patientwise(manifest: &DatasetManifest, fractions: [f64; 3], seed: u64) -> Result<SplitSpec> {
    if fractions.iter().any(|f| !(0.0..=1.0).contains(f)) || (fractions.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
        return Err(Error::InvalidArgument(format!("split fractions {fractions:?} must be in [0,1] and sum to 1")));
    }
    let mut patients: Vec<String> = manifest.patients().into_iter().collect();
    let n = patients.len();
    if n < fractions.len() {
        return Err(Error::InvalidArgument(format!("{n} patients cannot fill {} partitions", fractions.len())));
    }
    let mut sizes = largest_remainder(n, &fractions);
    // tiny cohorts: a requested partition never ends up empty
    for i in 0..sizes.len() {
        if fractions[i] > 0.0 && sizes[i] == 0 {
            let donor = (0..sizes.len()).max_by_key(|&j| sizes[j]).expect("non-empty");
            sizes[donor] -= 1;
            sizes[i] += 1;
        }
    }
    patients.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let mut it = patients.into_iter();
    let train = it.by_ref().take(sizes[0]).collect();
    let val = it.by_ref().take(sizes[1]).collect();
    let test = it.collect();
    Ok(SplitSpec { train, val, test, train_pct: 1.0, seed })
}

/// Keeps `ceil(pct·|train|)` training patients. The kept set is a prefix of a
/// seed-fixed permutation, so smaller fractions give subsets of larger ones.
pub fn subsample_training(split: &SplitSpec, pct: f64, seed: u64) -> Result<SplitSpec> {
    if !(pct > 0.0 && pct <= 1.0) {
        return Err(Error::InvalidArgument(format!("training fraction {pct} must be in (0, 1]")));
    }
    let mut order: Vec<String> = split.train.iter().cloned().collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed ^ 0x5eed_0000_0000_0001));
    // guard against 0.1·60 = 6.000000000000001
    let keep = ((pct * order.len() as f64) - 1e-9).ceil().max(1.0) as usize;
    let mut out = split.clone();
    out.train = order.into_iter().take(keep).collect();
    out.train_pct = split.train_pct * pct;
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn manifest(n_patients: usize, per: usize) -> DatasetManifest {
        let mut samples = Vec::new();
        for p in 0..n_patients {
            for s in 0..per {
                samples.push(ManifestEntry { sample_dir: format!("p{p:03}_s{s}"), patient_id: format!("p{p:03}") });
            }
        }
        DatasetManifest::new("/nonexistent", samples).unwrap()
    }

    pub(crate) fn sample(surface: bool) -> StudySample {
        let volume = Array3::from_shape_fn((4, 8, 6), |(h, w, d)| (h * 100 + w * 10 + d) as f32 * 0.25 - 3.0);
        let mut images = BTreeMap::new();
        images.insert("slo".to_string(), EnFaceGrid::new(Array2::from_shape_fn((4, 8), |(h, w)| (h + w) as f32 / 7.0)).unwrap());
        let mask = MaskGrid::new(Array2::from_shape_fn((4, 8), |(h, w)| u8::from((h + w) % 3 == 0))).unwrap();
        StudySample {
            patient_id: "p001".into(),
            eye_id: "OD".into(),
            volume: VoxelGrid::new(volume).unwrap(),
            images,
            mask,
            surface: surface.then(|| SurfaceMap::new(Array2::from_shape_fn((4, 8), |(h, w)| ((h + w) % 6) as i32))),
            spacing: Spacing::new(0.12, 0.006, 0.0039).unwrap(),
        }
    }

    #[test]
    fn sample_roundtrip_is_bit_exact() {
        let dir = tempfile::tempdir().unwrap();
        for with_surface in [true, false] {
            let s = sample(with_surface);
            let d = dir.path().join(format!("s{with_surface}"));
            save_sample(&s, &d).unwrap();
            let back = load_sample(&d).unwrap();
            assert_eq!(back, s);
            let meta: serde_json::Value = serde_json::from_str(&fs::read_to_string(d.join("meta.json")).unwrap()).unwrap();
            if !with_surface {
                assert!(meta["surface"].is_null());
                assert!(!d.join("surface.i32").exists());
            }
        }
    }

    #[test]
    fn save_into_unwritable_location_names_the_path() {
        let dir = tempfile::tempdir().unwrap();
        let blocker = dir.path().join("file");
        fs::write(&blocker, b"x").unwrap();
        let target = blocker.join("sample");
        let err = save_sample(&sample(false), &target).unwrap_err();
        assert!(err.to_string().contains(&blocker.display().to_string()), "{err}");
    }

    #[test]
    fn load_reports_distinct_error_kinds() {
        let dir = tempfile::tempdir().unwrap();
        let d = dir.path().join("s");
        save_sample(&sample(false), &d).unwrap();

        // wrong payload length vs declared (4,8,6)
        fs::write(d.join("volume.f32"), vec![0u8; 4 * 8 * 5 * 4]).unwrap();
        assert!(matches!(load_sample(&d), Err(Error::ShapeMismatch { .. })));

        save_sample(&sample(false), &d).unwrap();
        let mut mask = fs::read(d.join("mask.u8")).unwrap();
        mask[3] = 2;
        fs::write(d.join("mask.u8"), mask).unwrap();
        assert!(matches!(load_sample(&d), Err(Error::Invariant(_))));

        save_sample(&sample(false), &d).unwrap();
        fs::remove_file(d.join("image_slo.f32")).unwrap();
        assert!(matches!(load_sample(&d), Err(Error::MissingFile(_))));
    }

    #[test]
    fn split_sizes_follow_largest_remainder() {
        let s = split_patientwise(&manifest(10, 2), [0.6, 0.1, 0.3], 0).unwrap();
        assert_eq!((s.train.len(), s.val.len(), s.test.len()), (6, 1, 3));
        assert_eq!(largest_remainder(7, &[0.6, 0.1, 0.3]), vec![4, 1, 2]);
        assert_eq!(largest_remainder(30, &[0.6, 0.1, 0.3]), vec![18, 3, 9]);
    }

    #[test]
    fn split_is_deterministic_and_seed_dependent() {
        let m = manifest(100, 1);
        let a = split_patientwise(&m, [0.6, 0.1, 0.3], 0).unwrap();
        assert_eq!(a, split_patientwise(&m, [0.6, 0.1, 0.3], 0).unwrap());
        let b = split_patientwise(&m, [0.6, 0.1, 0.3], 1).unwrap();
        assert_ne!(a.train, b.train);
    }

    #[test]
    fn split_rejects_bad_inputs() {
        assert!(split_patientwise(&manifest(2, 1), [0.6, 0.1, 0.3], 0).is_err());
        assert!(split_patientwise(&manifest(10, 1), [0.6, 0.1, 0.2], 0).is_err());
        let tiny = split_patientwise(&manifest(3, 1), [0.6, 0.1, 0.3], 0).unwrap();
        assert_eq!((tiny.train.len(), tiny.val.len(), tiny.test.len()), (1, 1, 1));
    }

    #[test]
    fn subsample_identity_prefix_and_errors() {
        let full = split_patientwise(&manifest(100, 1), [0.6, 0.1, 0.3], 4).unwrap();
        assert_eq!(subsample_training(&full, 1.0, 9).unwrap().train, full.train);
        let p10 = subsample_training(&full, 0.1, 9).unwrap();
        let p20 = subsample_training(&full, 0.2, 9).unwrap();
        assert_eq!(p10.train.len(), 6);
        assert_eq!(p20.train.len(), 12);
        assert!(p10.train.is_subset(&p20.train));
        assert_eq!(p10.val, full.val);
        assert_eq!(p10.test, full.test);
        assert_eq!(subsample_training(&full, 0.2, 9).unwrap(), p20);
        assert!(subsample_training(&full, 0.0, 9).is_err());
        assert!(subsample_training(&full, -0.5, 9).is_err());
    }

    #[test]
    fn manifest_rejects_duplicates_and_empty_ids() {
        let dup = vec![
            ManifestEntry { sample_dir: "a".into(), patient_id: "p".into() },
            ManifestEntry { sample_dir: "a".into(), patient_id: "q".into() },
        ];
        assert!(DatasetManifest::new("/x", dup).is_err());
        let empty = vec![ManifestEntry { sample_dir: "a".into(), patient_id: String::new() }];
        assert!(DatasetManifest::new("/x", empty).is_err());
    }

    proptest! {
        #[test]
        fn partitions_are_disjoint_and_cover(n in 3usize..60, per in 1usize..3, seed in 0u64..1000) {
            let m = manifest(n, per);
            let s = split_patientwise(&m, [0.6, 0.1, 0.3], seed).unwrap();
            prop_assert!(s.is_disjoint());
            let all: BTreeSet<String> = s.train.union(&s.val).chain(s.test.iter()).cloned().collect();
            prop_assert_eq!(all, m.patients());
        }

        #[test]
        fn pct_chain_is_nested(n in 3usize..80, seed in 0u64..1000, mut pcts in proptest::collection::vec(0.01f64..1.0, 1..5)) {
            let full = split_patientwise(&manifest(n, 1), [0.6, 0.1, 0.3], seed).unwrap();
            pcts.push(1.0);
            pcts.sort_by(|a, b| a.partial_cmp(b).unwrap());
            let chain: Vec<_> = pcts.iter().map(|&p| subsample_training(&full, p, seed).unwrap().train).collect();
            for w in chain.windows(2) {
                prop_assert!(w[0].is_subset(&w[1]));
            }
        }
    }
}
