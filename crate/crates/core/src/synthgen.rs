//! Deterministic co-registered (volume, image, mask) scenes.
//!
//! En-face geometry lives in "W units": a pixel `(h, w)` has its center at
//! `Y = (h + ½)·a`, `X = w + ½` with `a = W/H`, so the field of view is square
//! and structure shapes are isotropic in physical space.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use ndarray::{Array2, Array3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::datamodel::{
    save_sample, DatasetManifest, EnFaceGrid, ManifestEntry, MaskGrid, Spacing, StudySample, SurfaceMap, VoxelGrid,
};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Task {
    Lesion,
    Vessel,
}

impl Task {
    /// Name of the 2D modality rendered for this task.
    pub fn image_name(self) -> &'static str {
        match self {
            Task::Lesion => "faf",
            Task::Vessel => "slo",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SceneSpec {
    /// `(H, W, D)`.
    pub dims: (usize, usize, usize),
    pub task: Task,
    pub n_structures: usize,
    /// Lesion radius or vessel half-width, in W-axis voxels.
    pub structure_scale: f64,
    /// Fraction of each structure's footprint rendered only in the 2D image.
    pub modality2d_exclusive_frac: f64,
    /// 3D-only mimics with no mask or image footprint.
    pub confounder_count: usize,
    pub noise_sigma: f64,
    /// Depth change of the surface per W-axis voxel.
    pub surface_tilt: f64,
    /// Salt mixed into every scene seed.
    pub seed_space: u64,
}

impl Default for SceneSpec {
    fn default() -> Self {
        Self::lesion()
    }
}

impl SceneSpec {
    pub fn lesion() -> Self {
        Self {
            dims: (32, 128, 64),
            task: Task::Lesion,
            n_structures: 3,
            structure_scale: 12.0,
            modality2d_exclusive_frac: 0.3,
            confounder_count: 2,
            noise_sigma: 0.1,
            surface_tilt: 0.1,
            seed_space: 0,
        }
    }

    pub fn vessel() -> Self {
        Self { task: Task::Vessel, n_structures: 4, structure_scale: 3.0, ..Self::lesion() }
    }

    pub fn for_task(task: Task) -> Self {
        match task {
            Task::Lesion => Self::lesion(),
            Task::Vessel => Self::vessel(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let (h, w, d) = self.dims;
        if h == 0 || w == 0 || d == 0 {
            return Err(Error::InvalidArgument(format!("scene dims {:?} must be positive", self.dims)));
        }
        if d < 12 {
            return Err(Error::InvalidArgument(format!("scene depth {d} too shallow for the layer model (need >= 12)")));
        }
        if !(0.0..=1.0).contains(&self.modality2d_exclusive_frac) {
            return Err(Error::InvalidArgument(format!(
                "modality2d_exclusive_frac {} outside [0, 1]",
                self.modality2d_exclusive_frac
            )));
        }
        if !(self.structure_scale > 0.0) || !(self.noise_sigma >= 0.0) || !self.surface_tilt.is_finite() {
            return Err(Error::InvalidArgument("structure_scale must be > 0 and noise_sigma >= 0".into()));
        }
        Ok(())
    }

    fn aspect(&self) -> f64 {
        self.dims.1 as f64 / self.dims.0 as f64
    }

    fn extent(&self) -> (f64, f64) {
        (self.dims.0 as f64 * self.aspect(), self.dims.1 as f64)
    }

    pub fn spacing(&self) -> Spacing {
        let (h, w, d) = self.dims;
        Spacing { h: 6.0 / h as f64, w: 6.0 / w as f64, d: 2.0 / d as f64 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "shape", rename_all = "lowercase")]
pub enum Geometry {
    Ellipse { cy: f64, cx: f64, ry: f64, rx: f64, angle: f64 },
    Curve { points: Vec<(f64, f64)>, radius: f64 },
}

impl Geometry {
    /// Membership of a point given in W units.
    pub fn contains(&self, y: f64, x: f64) -> bool {
        match self {
            Geometry::Ellipse { cy, cx, ry, rx, angle } => {
                let (dy, dx) = (y - cy, x - cx);
                let (s, c) = angle.sin_cos();
                let u = dx * c + dy * s;
                let v = -dx * s + dy * c;
                (u / rx).powi(2) + (v / ry).powi(2) <= 1.0
            }
            Geometry::Curve { points, radius } => nearest_on_curve(points, y, x).0 <= *radius,
        }
    }

    pub fn center(&self) -> (f64, f64) {
        match self {
            Geometry::Ellipse { cy, cx, .. } => (*cy, *cx),
            Geometry::Curve { points, .. } => {
                let n = points.len() as f64;
                (points.iter().map(|p| p.0).sum::<f64>() / n, points.iter().map(|p| p.1).sum::<f64>() / n)
            }
        }
    }

    /// Bounding radius around [`Geometry::center`].
    pub fn radius(&self) -> f64 {
        match self {
            Geometry::Ellipse { ry, rx, .. } => rx.max(*ry),
            Geometry::Curve { points, radius } => {
                let (cy, cx) = self.center();
                points.iter().map(|p| ((p.0 - cy).powi(2) + (p.1 - cx).powi(2)).sqrt()).fold(0.0, f64::max) + radius
            }
        }
    }
}

/// Distance to a polyline and the arclength of the closest point.
fn nearest_on_curve(points: &[(f64, f64)], y: f64, x: f64) -> (f64, f64) {
    let mut best = (f64::INFINITY, 0.0);
    let mut arc = 0.0;
    for seg in points.windows(2) {
        let (a, b) = (seg[0], seg[1]);
        let (vy, vx) = (b.0 - a.0, b.1 - a.1);
        let len2 = vy * vy + vx * vx;
        let t = if len2 > 0.0 { (((y - a.0) * vy + (x - a.1) * vx) / len2).clamp(0.0, 1.0) } else { 0.0 };
        let (py, px) = (a.0 + t * vy, a.1 + t * vx);
        let d = ((y - py).powi(2) + (x - px).powi(2)).sqrt();
        let len = len2.sqrt();
        if d < best.0 {
            best = (d, arc + t * len);
        }
        arc += len;
    }
    best
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Structure {
    pub geometry: Geometry,
    /// Pixels this structure owns (first structure containing a pixel owns it).
    pub footprint_pixels: usize,
    /// Owned pixels left out of the volume rendering.
    pub exclusive_pixels: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SceneTruth {
    pub mask: MaskGrid,
    pub surface: SurfaceMap,
    pub structures: Vec<Structure>,
    pub confounders: Vec<Structure>,
    /// Mask pixels with no volume signal.
    pub exclusive: MaskGrid,
    /// En-face pixels whose A-scan carries structure or confounder signal.
    pub volume_evidence: MaskGrid,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Scene {
    pub sample: StudySample,
    pub truth: SceneTruth,
}

/// splitmix64 finalizer, used to derive independent child seeds.
pub fn derive_seed(base: u64, index: u64) -> u64 {
    let mut z = base ^ index.wrapping_add(1).wrapping_mul(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

const BAND: f32 = 1.0;

fn retina_thickness(d: usize) -> isize {
    ((d as f64 * 0.3).round() as isize).max(3)
}

/// Structure-free A-scan intensity at signed distance `k = depth − surface`.
pub fn background_profile(k: isize, depth: usize) -> f32 {
    let rt = retina_thickness(depth);
    match k {
        k if k < -rt => 0.05,
        k if k < -1 => 0.3 + 0.12 * (2.0 * std::f32::consts::PI * k as f32 / 5.0).cos(),
        -1 | 1 => 0.6,
        0 => BAND,
        k => 0.25 * (-((k - 1) as f32) / 6.0).exp(),
    }
}

fn lesion_profile(k: isize, depth: usize) -> f32 {
    match k {
        -1..=1 => 0.2,
        k if k > 1 => 0.85 * (-((k - 1) as f32) / 20.0).exp(),
        k => background_profile(k, depth),
    }
}

fn vessel_profile(k: isize, depth: usize) -> f32 {
    match k {
        -3 | -2 => 1.1,
        k if k >= -1 => 0.3 * background_profile(k, depth),
        k => background_profile(k, depth),
    }
}

fn surface_map(spec: &SceneSpec, rng: &mut ChaCha8Rng) -> Array2<i32> {
    let (h, w, d) = spec.dims;
    let a = spec.aspect();
    let phase = rng.random_range(0.0..std::f64::consts::TAU);
    let base = 0.62 * d as f64;
    let lo = retina_thickness(d) as f64 + 4.0;
    let hi = (d as f64 - 5.0).max(lo);
    Array2::from_shape_fn((h, w), |(i, j)| {
        let y = (i as f64 + 0.5) * a - h as f64 * a / 2.0;
        let x = j as f64 + 0.5 - w as f64 / 2.0;
        let s = base + spec.surface_tilt * (x + 0.5 * y) + 0.04 * d as f64 * (std::f64::consts::TAU * j as f64 / w as f64 + phase).sin();
        s.round().clamp(lo, hi) as i32
    })
}

fn place_ellipse(spec: &SceneSpec, rng: &mut ChaCha8Rng, taken: &[Geometry]) -> Result<Geometry> {
    let (ey, ex) = spec.extent();
    let rmax = spec.structure_scale * 1.3;
    if 2.0 * rmax >= ey.min(ex) {
        return Err(Error::InvalidArgument(format!("lesions of scale {} cannot fit a {ey:.0}x{ex:.0} field", spec.structure_scale)));
    }
    for _ in 0..500 {
        let rx = spec.structure_scale * rng.random_range(0.7..1.3);
        let ry = spec.structure_scale * rng.random_range(0.7..1.3);
        let r = rx.max(ry);
        let cy = rng.random_range(r..ey - r);
        let cx = rng.random_range(r..ex - r);
        let clear = taken.iter().all(|g| {
            let (oy, ox) = g.center();
            ((oy - cy).powi(2) + (ox - cx).powi(2)).sqrt() >= g.radius() + r + 2.0
        });
        if clear {
            return Ok(Geometry::Ellipse { cy, cx, ry, rx, angle: rng.random_range(0.0..std::f64::consts::PI) });
        }
    }
    Err(Error::InvalidArgument(format!(
        "cannot place {} non-overlapping lesions of scale {} in the field",
        spec.n_structures + spec.confounder_count,
        spec.structure_scale
    )))
}

fn trace_curve(spec: &SceneSpec, rng: &mut ChaCha8Rng) -> Result<Geometry> {
    let (ey, ex) = spec.extent();
    let radius = spec.structure_scale;
    if 4.0 * radius >= ey.min(ex) {
        return Err(Error::InvalidArgument(format!("vessels of half-width {radius} cannot fit a {ey:.0}x{ex:.0} field")));
    }
    let min_len = (0.25 * (ey + ex) / 2.0).max(4.0) as usize;
    let turn = Normal::new(0.0, 0.04).expect("positive sigma");
    for _ in 0..200 {
        let target = (rng.random_range(0.5..1.0) * (ey + ex) / 2.0) as usize;
        let mut p = (rng.random_range(radius..ey - radius), rng.random_range(radius..ex - radius));
        let mut heading = rng.random_range(0.0..std::f64::consts::TAU);
        let mut omega = 0.0;
        let mut points = vec![p];
        for _ in 0..target {
            omega = 0.85 * omega + turn.sample(rng);
            heading += omega;
            let next = (p.0 + heading.sin(), p.1 + heading.cos());
            if next.0 < 0.0 || next.0 > ey || next.1 < 0.0 || next.1 > ex {
                break;
            }
            p = next;
            points.push(p);
        }
        if points.len() > min_len {
            return Ok(Geometry::Curve { points, radius });
        }
    }
    Err(Error::InvalidArgument("cannot trace a vessel of sufficient length in the field".into()))
}

/// Ordering key used to pick the contiguous 2D-exclusive part of a footprint.
fn exclusion_key(g: &Geometry, y: f64, x: f64, cut_angle: f64) -> f64 {
    match g {
        Geometry::Ellipse { .. } => y * cut_angle.sin() + x * cut_angle.cos(),
        Geometry::Curve { points, .. } => nearest_on_curve(points, y, x).1,
    }
}

fn pixel_center(spec: &SceneSpec, i: usize, j: usize) -> (f64, f64) {
    ((i as f64 + 0.5) * spec.aspect(), j as f64 + 0.5)
}

/// Renders one scene; identical `(spec, seed)` give bit-identical output.
pub fn generate_scene(spec: &SceneSpec, seed: u64) -> Result<Scene> {
    spec.validate()?;
    let (h, w, d) = spec.dims;
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, spec.seed_space));
    let surface = surface_map(spec, &mut rng);

    let mut geoms: Vec<Geometry> = Vec::new();
    for _ in 0..spec.n_structures + spec.confounder_count {
        let g = match spec.task {
            Task::Lesion => place_ellipse(spec, &mut rng, &geoms)?,
            Task::Vessel => trace_curve(spec, &mut rng)?,
        };
        geoms.push(g);
    }
    let confounder_geoms = geoms.split_off(spec.n_structures);

    // per-pixel owner among true structures
    let mut owner: Array2<Option<usize>> = Array2::from_elem((h, w), None);
    let mut owned: Vec<Vec<(usize, usize)>> = vec![Vec::new(); geoms.len()];
    for i in 0..h {
        for j in 0..w {
            let (y, x) = pixel_center(spec, i, j);
            if let Some(k) = geoms.iter().position(|g| g.contains(y, x)) {
                owner[[i, j]] = Some(k);
                owned[k].push((i, j));
            }
        }
    }

    let mut exclusive = Array2::<u8>::zeros((h, w));
    let mut structures = Vec::with_capacity(geoms.len());
    for (k, g) in geoms.iter().enumerate() {
        let cut_angle = rng.random_range(0.0..std::f64::consts::TAU);
        let offset: f64 = rng.random_range(0.0..1.0);
        let mut px: Vec<(f64, (usize, usize))> = owned[k]
            .iter()
            .map(|&(i, j)| {
                let (y, x) = pixel_center(spec, i, j);
                (exclusion_key(g, y, x, cut_angle), (i, j))
            })
            .collect();
        px.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
        let n = px.len();
        let n_ex = (spec.modality2d_exclusive_frac * n as f64).round() as usize;
        let start = ((offset * (n - n_ex + 1) as f64).floor() as usize).min(n - n_ex);
        for &(_, (i, j)) in &px[start..start + n_ex] {
            exclusive[[i, j]] = 1;
        }
        structures.push(Structure { geometry: g.clone(), footprint_pixels: n, exclusive_pixels: n_ex });
    }

    let mask = owner.mapv(|o| u8::from(o.is_some()));
    let mut evidence = Array2::<u8>::zeros((h, w));
    let mut volume = Array3::<f32>::zeros((h, w, d));
    let profile: fn(isize, usize) -> f32 = match spec.task {
        Task::Lesion => lesion_profile,
        Task::Vessel => vessel_profile,
    };
    let mut confounders = Vec::with_capacity(confounder_geoms.len());
    let mut conf_px = Array2::<bool>::from_elem((h, w), false);
    for g in &confounder_geoms {
        let mut n = 0;
        for i in 0..h {
            for j in 0..w {
                let (y, x) = pixel_center(spec, i, j);
                if mask[[i, j]] == 0 && g.contains(y, x) {
                    n += usize::from(!conf_px[[i, j]]);
                    conf_px[[i, j]] = true;
                }
            }
        }
        confounders.push(Structure { geometry: g.clone(), footprint_pixels: n, exclusive_pixels: 0 });
    }
    for i in 0..h {
        for j in 0..w {
            let s = surface[[i, j]] as isize;
            let signal = (mask[[i, j]] == 1 && exclusive[[i, j]] == 0) || conf_px[[i, j]];
            evidence[[i, j]] = u8::from(signal);
            for k in 0..d {
                let rel = k as isize - s;
                volume[[i, j, k]] = if signal { profile(rel, d) } else { background_profile(rel, d) };
            }
        }
    }

    let a = spec.aspect();
    let waves: Vec<(f64, f64, f64)> = (0..3)
        .map(|_| {
            (
                rng.random_range(0.05..0.25),
                rng.random_range(0.05..0.25),
                rng.random_range(0.0..std::f64::consts::TAU),
            )
        })
        .collect();
    let mut image = Array2::from_shape_fn((h, w), |(i, j)| {
        let y = (i as f64 + 0.5) * a;
        let x = j as f64 + 0.5;
        let tex: f64 = waves.iter().map(|&(fy, fx, ph)| (fy * y + fx * x + ph).sin()).sum();
        (0.45 + 0.06 * tex) as f32
    });
    for ((i, j), v) in image.indexed_iter_mut() {
        if mask[[i, j]] == 1 {
            *v = match spec.task {
                Task::Lesion => 0.95,
                Task::Vessel => 0.1,
            };
        }
    }

    if spec.noise_sigma > 0.0 {
        let noise = Normal::new(0.0f32, spec.noise_sigma as f32).expect("positive sigma");
        volume.mapv_inplace(|v| v + noise.sample(&mut rng));
        image.mapv_inplace(|v| v + noise.sample(&mut rng));
    }

    let surface = SurfaceMap::new(surface);
    let mask = MaskGrid::new(mask)?;
    let mut images = BTreeMap::new();
    images.insert(spec.task.image_name().to_string(), EnFaceGrid::new(image)?);
    let sample = StudySample {
        patient_id: "synthetic".into(),
        eye_id: "OD".into(),
        volume: VoxelGrid::new(volume)?,
        images,
        mask: mask.clone(),
        surface: Some(surface.clone()),
        spacing: spec.spacing(),
    };
    sample.validate()?;
    Ok(Scene {
        sample,
        truth: SceneTruth {
            mask,
            surface,
            structures,
            confounders,
            exclusive: MaskGrid::new(exclusive)?,
            volume_evidence: MaskGrid::new(evidence)?,
        },
    })
}

pub const EXCLUSIVE_FILE: &str = "exclusive.u8";
pub const TRUTH_FILE: &str = "truth.json";

#[derive(Serialize, Deserialize)]
struct TruthRecord {
    spec: SceneSpec,
    seed: u64,
    structures: Vec<Structure>,
    confounders: Vec<Structure>,
}

/// Reads the 2D-exclusive map stored next to a generated sample.
pub fn load_exclusive(dir: &Path, dims: (usize, usize)) -> Result<MaskGrid> {
    let path = dir.join(EXCLUSIVE_FILE);
    let bytes = fs::read(&path).map_err(|e| Error::io(&path, e))?;
    if bytes.len() != dims.0 * dims.1 {
        return Err(Error::ShapeMismatch { what: path.display().to_string(), expected: vec![dims.0, dims.1], found: vec![bytes.len()] });
    }
    MaskGrid::new(Array2::from_shape_vec(dims, bytes).expect("length checked"))
}

/// Writes `n_patients × samples_per_patient` scenes plus `manifest.json`.
/// Scene `(i, j)` uses seed `derive_seed(derive_seed(seed, i), j)`.
pub fn generate_dataset(
    spec: &SceneSpec,
    n_patients: usize,
    samples_per_patient: usize,
    seed: u64,
    out_dir: &Path,
) -> Result<DatasetManifest> {
    spec.validate()?;
    let mut entries = Vec::new();
    for i in 0..n_patients {
        let patient_seed = derive_seed(seed, i as u64);
        let patient_id = format!("P{i:04}");
        for j in 0..samples_per_patient {
            let scene_seed = derive_seed(patient_seed, j as u64);
            let Scene { mut sample, truth } = generate_scene(spec, scene_seed)?;
            sample.patient_id = patient_id.clone();
            sample.eye_id = if j % 2 == 0 { "OD" } else { "OS" }.into();
            let rel = format!("{patient_id}_S{j}");
            let dir = out_dir.join(&rel);
            save_sample(&sample, &dir)?;
            let ex_path = dir.join(EXCLUSIVE_FILE);
            let bytes: Vec<u8> = truth.exclusive.data().iter().copied().collect();
            fs::write(&ex_path, bytes).map_err(|e| Error::io(&ex_path, e))?;
            let record = TruthRecord { spec: spec.clone(), seed: scene_seed, structures: truth.structures, confounders: truth.confounders };
            let truth_path = dir.join(TRUTH_FILE);
            let json = serde_json::to_string_pretty(&record).expect("truth serializes");
            fs::write(&truth_path, json).map_err(|e| Error::io(&truth_path, e))?;
            entries.push(ManifestEntry { sample_dir: rel, patient_id: patient_id.clone() });
        }
    }
    let manifest = DatasetManifest::new(out_dir, entries)?;
    manifest.save()?;
    Ok(manifest)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::preprocess::flatten_along_surface;

    fn quiet(task: Task) -> SceneSpec {
        SceneSpec { noise_sigma: 0.0, ..SceneSpec::for_task(task) }
    }

    #[test]
    fn empty_scene_has_empty_mask() {
        let spec = SceneSpec { n_structures: 0, confounder_count: 0, noise_sigma: 0.0, ..SceneSpec::lesion() };
        let s = generate_scene(&spec, 1).unwrap();
        assert_eq!(s.sample.mask.count(), 0);
    }

    #[test]
    fn deterministic() {
        for spec in [SceneSpec::lesion(), SceneSpec::vessel()] {
            assert_eq!(generate_scene(&spec, 77).unwrap(), generate_scene(&spec, 77).unwrap());
            assert_ne!(generate_scene(&spec, 77).unwrap().sample, generate_scene(&spec, 78).unwrap().sample);
        }
    }

    #[test]
    fn mask_is_union_of_catalog_footprints() {
        for task in [Task::Lesion, Task::Vessel] {
            for seed in 0..5 {
                let spec = SceneSpec::for_task(task);
                let s = generate_scene(&spec, seed).unwrap();
                let (h, w) = s.truth.mask.dims();
                let a = w as f64 / h as f64;
                for ((i, j), &m) in s.truth.mask.data().indexed_iter() {
                    let (y, x) = ((i as f64 + 0.5) * a, j as f64 + 0.5);
                    let inside = s.truth.structures.iter().any(|st| st.geometry.contains(y, x));
                    assert_eq!(m == 1, inside);
                }
                assert_eq!(s.sample.mask, s.truth.mask);
            }
        }
    }

    #[test]
    fn zero_exclusive_fraction_leaves_volume_evidence_everywhere() {
        for task in [Task::Lesion, Task::Vessel] {
            let spec = SceneSpec { modality2d_exclusive_frac: 0.0, ..quiet(task) };
            let s = generate_scene(&spec, 3).unwrap();
            let d = spec.dims.2;
            for ((i, j), &m) in s.sample.mask.data().indexed_iter() {
                if m == 0 {
                    continue;
                }
                let surf = s.truth.surface.depth()[[i, j]] as isize;
                let differs = (0..d).any(|k| s.sample.volume.data()[[i, j, k]] != background_profile(k as isize - surf, d));
                assert!(differs, "mask pixel ({i},{j}) has no volume signal");
            }
        }
    }

    #[test]
    fn exclusive_pixels_have_no_volume_signal() {
        for task in [Task::Lesion, Task::Vessel] {
            let s = generate_scene(&quiet(task), 4).unwrap();
            let d = s.sample.volume.dims().2;
            for ((i, j), &e) in s.truth.exclusive.data().indexed_iter() {
                if e == 1 {
                    assert_eq!(s.sample.mask.data()[[i, j]], 1);
                    let surf = s.truth.surface.depth()[[i, j]] as isize;
                    assert!((0..d).all(|k| s.sample.volume.data()[[i, j, k]] == background_profile(k as isize - surf, d)));
                }
            }
        }
    }

    #[test]
    fn complementarity_dial() {
        for task in [Task::Lesion, Task::Vessel] {
            for f in [0.0, 0.3, 0.6] {
                let spec = SceneSpec { modality2d_exclusive_frac: f, ..SceneSpec::for_task(task) };
                let (mut ex, mut pos) = (0usize, 0usize);
                for seed in 0..20 {
                    let s = generate_scene(&spec, seed).unwrap();
                    for (&m, &v) in s.truth.mask.data().iter().zip(s.truth.volume_evidence.data().iter()) {
                        if m == 1 {
                            pos += 1;
                            ex += usize::from(v == 0);
                        }
                    }
                }
                let frac = ex as f64 / pos as f64;
                assert!((frac - f).abs() <= 0.05, "{task:?} f={f}: measured {frac}");
            }
        }
    }

    #[test]
    fn flattened_band_sits_at_anchor() {
        for task in [Task::Lesion, Task::Vessel] {
            let spec = SceneSpec { surface_tilt: 0.15, ..quiet(task) };
            let s = generate_scene(&spec, 9).unwrap();
            let anchor = 30;
            let flat = flatten_along_surface(&s.sample.volume, &s.truth.surface, anchor).unwrap();
            let (h, w, d) = s.sample.volume.dims();
            for i in 0..h {
                for j in 0..w {
                    if s.truth.volume_evidence.data()[[i, j]] == 1 {
                        continue;
                    }
                    let col: Vec<f32> = (0..d).map(|k| flat.data()[[i, j, k]]).collect();
                    let argmax = (0..d).max_by(|&a, &b| col[a].total_cmp(&col[b]).then(b.cmp(&a))).unwrap();
                    assert!(argmax.abs_diff(anchor) <= 1, "column ({i},{j}) band at {argmax}");
                }
            }
        }
    }

    #[test]
    fn unfit_structures_error() {
        let spec = SceneSpec { structure_scale: 40.0, ..SceneSpec::lesion() };
        assert!(generate_scene(&spec, 0).is_err());
        let crowded = SceneSpec { n_structures: 60, ..SceneSpec::lesion() };
        assert!(generate_scene(&crowded, 0).is_err());
        let thick = SceneSpec { structure_scale: 40.0, ..SceneSpec::vessel() };
        assert!(generate_scene(&thick, 0).is_err());
    }

    #[test]
    fn seed_mixer_spreads() {
        let seeds: std::collections::BTreeSet<u64> = (0..1000).map(|i| derive_seed(42, i)).collect();
        assert_eq!(seeds.len(), 1000);
        assert_ne!(derive_seed(1, 0), derive_seed(2, 0));
    }
}
