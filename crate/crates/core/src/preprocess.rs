//! Geometric and intensity preprocessing, training augmentation and cutout
//! corruption.

use ndarray::{s, Array, Array2, Array3, Axis, Dimension};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::datamodel::{EnFaceGrid, StudySample, SurfaceMap, VoxelGrid};
use crate::error::{Error, Result};

/// Shifts every A-scan so that its surface voxel lands at `anchor_depth`.
/// Vacated positions are zero.
pub fn flatten_along_surface(volume: &VoxelGrid, surface: &SurfaceMap, anchor_depth: usize) -> Result<VoxelGrid> {
    let (h, w, d) = volume.dims();
    if surface.dims() != (h, w) {
        return Err(Error::ShapeMismatch {
            what: "surface vs volume en-face".into(),
            expected: vec![h, w],
            found: vec![surface.dims().0, surface.dims().1],
        });
    }
    if anchor_depth >= d {
        return Err(Error::InvalidArgument(format!("anchor depth {anchor_depth} outside [0, {d})")));
    }
    surface.check_range(d)?;
    let src = volume.data();
    let mut out = Array3::<f32>::zeros((h, w, d));
    for ((i, j), &s) in surface.depth().indexed_iter() {
        let shift = anchor_depth as isize - s as isize;
        let col = src.slice(s![i, j, ..]);
        let mut dst = out.slice_mut(s![i, j, ..]);
        for k in 0..d as isize {
            let from = k - shift;
            if from >= 0 && from < d as isize {
                dst[k as usize] = col[from as usize];
            }
        }
    }
    VoxelGrid::new(out)
}

/// Cuts `out_depth` slices starting at `anchor_depth − ⌊above_frac·out_depth⌋`;
/// slices outside the volume are zero.
pub fn crop_depth(volume: &VoxelGrid, anchor_depth: isize, out_depth: usize, above_frac: f64) -> Result<VoxelGrid> {
    if out_depth == 0 {
        return Err(Error::InvalidArgument("crop depth must be at least 1".into()));
    }
    if !(0.0..=1.0).contains(&above_frac) {
        return Err(Error::InvalidArgument(format!("above_frac {above_frac} outside [0, 1]")));
    }
    let (h, w, d) = volume.dims();
    let start = anchor_depth - (above_frac * out_depth as f64).floor() as isize;
    let lo = start.max(0);
    let hi = (start + out_depth as isize).min(d as isize);
    let mut out = Array3::<f32>::zeros((h, w, out_depth));
    if lo < hi {
        let dst_lo = (lo - start) as usize;
        let dst_hi = (hi - start) as usize;
        out.slice_mut(s![.., .., dst_lo..dst_hi])
            .assign(&volume.data().slice(s![.., .., lo as usize..hi as usize]));
    }
    VoxelGrid::new(out)
}

const ZSCORE_EPS: f64 = 1e-8;

fn zscore_in_place<D: Dimension>(values: &mut Array<f32, D>) {
    let n = values.len().max(1) as f64;
    let mean = values.iter().map(|&v| f64::from(v)).sum::<f64>() / n;
    let std = (values.iter().map(|&v| (f64::from(v) - mean).powi(2)).sum::<f64>() / n).sqrt();
    values.mapv_inplace(|v| if std > ZSCORE_EPS { ((f64::from(v) - mean) / std) as f32 } else { 0.0 });
}

/// Zero mean, unit population standard deviation; constant input maps to zeros.
pub fn zscore_volume(volume: &VoxelGrid) -> VoxelGrid {
    let mut out = volume.clone();
    zscore_in_place(out.data_mut());
    out
}

pub fn zscore_image(image: &EnFaceGrid) -> EnFaceGrid {
    let mut out = image.clone();
    zscore_in_place(out.data_mut());
    out
}

/// Center-crops `image` to the target aspect ratio, then resamples it
/// bilinearly (pixel centers at half-integers) to `(target_h, target_w)`.
pub fn align_enface(image: &EnFaceGrid, target_h: usize, target_w: usize) -> Result<EnFaceGrid> {
    if target_h == 0 || target_w == 0 {
        return Err(Error::InvalidArgument("alignment target must be at least 1x1".into()));
    }
    let (h, w) = image.dims();
    if (h, w) == (target_h, target_w) {
        return Ok(image.clone());
    }
    let target_ratio = target_h as f64 / target_w as f64;
    let (ch, cw) = if h as f64 / w as f64 > target_ratio {
        (((w as f64 * target_ratio).round() as usize).clamp(1, h), w)
    } else {
        (h, ((h as f64 / target_ratio).round() as usize).clamp(1, w))
    };
    let (oh, ow) = ((h - ch) / 2, (w - cw) / 2);
    let src = image.data().slice(s![oh..oh + ch, ow..ow + cw]);
    let sy = ch as f64 / target_h as f64;
    let sx = cw as f64 / target_w as f64;
    let sample_axis = |o: usize, scale: f64, n: usize| -> (usize, usize, f64) {
        let c = ((o as f64 + 0.5) * scale - 0.5).clamp(0.0, (n - 1) as f64);
        let i0 = c.floor() as usize;
        let i1 = (i0 + 1).min(n - 1);
        (i0, i1, c - i0 as f64)
    };
    let out = Array2::from_shape_fn((target_h, target_w), |(i, j)| {
        let (y0, y1, fy) = sample_axis(i, sy, ch);
        let (x0, x1, fx) = sample_axis(j, sx, cw);
        let top = f64::from(src[[y0, x0]]) * (1.0 - fx) + f64::from(src[[y0, x1]]) * fx;
        let bottom = f64::from(src[[y1, x0]]) * (1.0 - fx) + f64::from(src[[y1, x1]]) * fx;
        (top * (1.0 - fy) + bottom * fy) as f32
    });
    EnFaceGrid::new(out)
}

/// Random training-time perturbations.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AugmentPolicy {
    /// Probability of flipping along each en-face axis independently.
    pub flip_prob: f64,
    pub mult_noise_range: (f64, f64),
    /// Additive Gaussian noise sigma, in z-score units.
    pub add_noise_sigma: f64,
    /// Contrast gain around the grid mean.
    pub contrast_range: (f64, f64),
    pub intensity_shift_range: (f64, f64),
}

impl Default for AugmentPolicy {
    fn default() -> Self {
        Self {
            flip_prob: 0.5,
            mult_noise_range: (0.9, 1.1),
            add_noise_sigma: 0.05,
            contrast_range: (0.9, 1.1),
            intensity_shift_range: (-0.1, 0.1),
        }
    }
}

impl AugmentPolicy {
    /// No-op policy.
    pub fn identity() -> Self {
        Self {
            flip_prob: 0.0,
            mult_noise_range: (1.0, 1.0),
            add_noise_sigma: 0.0,
            contrast_range: (1.0, 1.0),
            intensity_shift_range: (0.0, 0.0),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let ordered = |r: (f64, f64)| r.0 <= r.1;
        if !(0.0..=1.0).contains(&self.flip_prob)
            || self.add_noise_sigma < 0.0
            || !ordered(self.mult_noise_range)
            || !ordered(self.contrast_range)
            || !ordered(self.intensity_shift_range)
        {
            return Err(Error::InvalidArgument(format!("invalid augmentation policy {self:?}")));
        }
        Ok(())
    }
}

fn uniform(rng: &mut ChaCha8Rng, (lo, hi): (f64, f64)) -> f64 {
    if lo == hi {
        lo
    } else {
        rng.random_range(lo..hi)
    }
}

fn perturb<D: Dimension>(values: &mut Array<f32, D>, policy: &AugmentPolicy, rng: &mut ChaCha8Rng) {
    let gain = uniform(rng, policy.contrast_range) as f32;
    let mult = uniform(rng, policy.mult_noise_range) as f32;
    let shift = uniform(rng, policy.intensity_shift_range) as f32;
    let mean = (values.iter().map(|&v| f64::from(v)).sum::<f64>() / values.len().max(1) as f64) as f32;
    let noise = (policy.add_noise_sigma > 0.0).then(|| Normal::new(0.0f32, policy.add_noise_sigma as f32).expect("sigma > 0"));
    for v in values.iter_mut() {
        let mut x = *v * gain + (1.0 - gain) * mean;
        x = x * mult + shift;
        if let Some(n) = &noise {
            x += n.sample(rng);
        }
        *v = x;
    }
}

/// Flips are shared by every modality and the mask; intensity changes are
/// drawn independently per modality and never touch the mask.
pub fn augment_sample(sample: &StudySample, policy: &AugmentPolicy, rng_seed: u64) -> Result<StudySample> {
    policy.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(rng_seed);
    let flip_h = rng.random_bool(policy.flip_prob);
    let flip_w = rng.random_bool(policy.flip_prob);
    let mut out = sample.clone();
    for (axis, on) in [(0usize, flip_h), (1, flip_w)] {
        if !on {
            continue;
        }
        out.volume.data_mut().invert_axis(Axis(axis));
        for img in out.images.values_mut() {
            img.data_mut().invert_axis(Axis(axis));
        }
        out.mask.data_mut().invert_axis(Axis(axis));
        if let Some(s) = &out.surface {
            let mut depth = s.depth().clone();
            depth.invert_axis(Axis(axis));
            out.surface = Some(SurfaceMap::new(depth.as_standard_layout().to_owned()));
        }
    }
    // keep owned arrays in standard layout so raw iteration stays row-major
    out.volume = VoxelGrid::new(out.volume.data().as_standard_layout().to_owned())?;
    out.mask = crate::datamodel::MaskGrid::new(out.mask.data().as_standard_layout().to_owned())?;
    perturb(out.volume.data_mut(), policy, &mut rng);
    for img in out.images.values_mut() {
        *img = EnFaceGrid::new(img.data().as_standard_layout().to_owned())?;
        perturb(img.data_mut(), policy, &mut rng);
    }
    Ok(out)
}

/// Occlusion boxes filled with near-mean noise.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CutoutSpec {
    pub n_masks: usize,
    /// Box extent as a fraction of `(H, W, D)`.
    pub frac: [f64; 3],
    /// Fill values are uniform in `[μ − band·μ, μ + band·μ]`.
    pub fill_band: f64,
}

impl CutoutSpec {
    pub fn new(n_masks: usize) -> Self {
        Self { n_masks, frac: [0.95, 0.1, 0.1], fill_band: 0.1 }
    }

    /// `⌊frac·dim⌋` per axis, at least one voxel.
    pub fn box_dims(&self, dims: (usize, usize, usize)) -> Result<[usize; 3]> {
        if self.frac.iter().any(|f| !(*f > 0.0 && *f <= 1.0)) {
            return Err(Error::InvalidArgument(format!("cutout fractions {:?} must be in (0, 1]", self.frac)));
        }
        let dims = [dims.0, dims.1, dims.2];
        let mut out = [0; 3];
        for a in 0..3 {
            out[a] = ((self.frac[a] * dims[a] as f64).floor() as usize).max(1);
            if out[a] > dims[a] {
                return Err(Error::InvalidArgument(format!("cutout box {out:?} exceeds volume {dims:?}")));
            }
        }
        Ok(out)
    }
}

pub fn apply_cutout(volume: &VoxelGrid, spec: &CutoutSpec, rng_seed: u64) -> Result<VoxelGrid> {
    let dims = volume.dims();
    let [bh, bw, bd] = spec.box_dims(dims)?;
    if spec.n_masks == 0 {
        return Ok(volume.clone());
    }
    let n = volume.data().len() as f64;
    let mu = volume.data().iter().map(|&v| f64::from(v)).sum::<f64>() / n;
    let (lo, hi) = {
        let a = mu - spec.fill_band * mu;
        let b = mu + spec.fill_band * mu;
        (a.min(b), a.max(b))
    };
    let mut rng = ChaCha8Rng::seed_from_u64(rng_seed);
    let mut out = volume.data().clone();
    for _ in 0..spec.n_masks {
        let h0 = rng.random_range(0..=dims.0 - bh);
        let w0 = rng.random_range(0..=dims.1 - bw);
        let d0 = rng.random_range(0..=dims.2 - bd);
        for v in out.slice_mut(s![h0..h0 + bh, w0..w0 + bw, d0..d0 + bd]).iter_mut() {
            *v = if lo < hi { rng.random_range(lo..=hi) as f32 } else { lo as f32 };
        }
    }
    VoxelGrid::new(out)
}

/// Keeps every `step`-th slice along H of the volume and, when `with_mask`,
/// of the mask; images and the surface are left untouched.
pub fn subsample_slices(sample: &StudySample, step: usize, with_mask: bool) -> Result<StudySample> {
    let (h, _, _) = sample.volume.dims();
    if step == 0 {
        return Err(Error::InvalidArgument("slice step must be >= 1".into()));
    }
    if step > 1 && h < 2 {
        return Err(Error::InvalidArgument(format!("cannot subsample a volume with H = {h}")));
    }
    let mut out = sample.clone();
    out.volume = VoxelGrid::new(sample.volume.data().slice(s![..;step, .., ..]).to_owned())?;
    if with_mask {
        out.mask = crate::datamodel::MaskGrid::new(sample.mask.data().slice(s![..;step, ..]).to_owned())?;
    }
    out.surface = None;
    out.spacing.h *= step as f64;
    Ok(out)
}

/// Sample-level pipeline: en-face alignment, flattening, depth crop, z-score.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Preprocessing {
    pub out_depth: usize,
    /// Fraction of the crop window placed above the flattening surface.
    pub above_frac: f64,
    pub zscore: bool,
}

impl Default for Preprocessing {
    fn default() -> Self {
        Self { out_depth: 128, above_frac: 0.75, zscore: true }
    }
}

impl Preprocessing {
    pub fn apply(&self, sample: &StudySample) -> Result<StudySample> {
        let (h, w, d) = sample.volume.dims();
        let mut out = sample.clone();
        for img in out.images.values_mut() {
            *img = align_enface(img, h, w)?;
        }
        out.volume = match &sample.surface {
            Some(surface) => {
                let n = surface.depth().len() as f64;
                let mean = surface.depth().iter().map(|&v| f64::from(v)).sum::<f64>() / n;
                let anchor = (mean.round() as usize).min(d - 1);
                let flat = flatten_along_surface(&sample.volume, surface, anchor)?;
                crop_depth(&flat, anchor as isize, self.out_depth, self.above_frac)?
            }
            None if d == self.out_depth => sample.volume.clone(),
            None => {
                let start = (d as isize - self.out_depth as isize) / 2;
                let anchor = start + (self.above_frac * self.out_depth as f64).floor() as isize;
                crop_depth(&sample.volume, anchor, self.out_depth, self.above_frac)?
            }
        };
        out.surface = None;
        if self.zscore {
            out.volume = zscore_volume(&out.volume);
            for img in out.images.values_mut() {
                *img = zscore_image(img);
            }
        }
        Ok(out)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::datamodel::{MaskGrid, Spacing};
    use proptest::prelude::*;
    use rand::Rng;
    use std::collections::BTreeMap;

    fn random_volume(dims: (usize, usize, usize), seed: u64) -> VoxelGrid {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        VoxelGrid::new(Array3::from_shape_fn(dims, |_| rng.random_range(0.1f32..2.0))).unwrap()
    }

    #[test]
    fn flatten_constant_surface() {
        let v = random_volume((3, 4, 10), 1);
        let surf = SurfaceMap::new(Array2::from_elem((3, 4), 6));
        assert_eq!(flatten_along_surface(&v, &surf, 6).unwrap(), v);
        let shifted = flatten_along_surface(&v, &surf, 2).unwrap();
        for ((i, j, k), &x) in shifted.data().indexed_iter() {
            let expect = if k + 4 < 10 { v.data()[[i, j, k + 4]] } else { 0.0 };
            assert_eq!(x, expect);
        }
    }

    #[test]
    fn flatten_tilted_plane_reads_surface_at_anchor() {
        let v = random_volume((5, 7, 20), 2);
        let surf = SurfaceMap::new(Array2::from_shape_fn((5, 7), |(i, j)| (3 + i + 2 * j) as i32 % 20));
        let anchor = 9;
        let flat = flatten_along_surface(&v, &surf, anchor).unwrap();
        for ((i, j), &s) in surf.depth().indexed_iter() {
            assert_eq!(flat.data()[[i, j, anchor]], v.data()[[i, j, s as usize]]);
        }
    }

    #[test]
    fn flatten_rejects_out_of_range_surface() {
        let v = random_volume((2, 2, 5), 3);
        let surf = SurfaceMap::new(Array2::from_elem((2, 2), 5));
        assert!(flatten_along_surface(&v, &surf, 1).is_err());
    }

    #[test]
    fn crop_window_rule() {
        let v = random_volume((2, 3, 128), 4);
        assert_eq!(crop_depth(&v, 96, 128, 0.75).unwrap(), v);

        let v = random_volume((2, 3, 60), 5);
        let c = crop_depth(&v, 10, 128, 0.75).unwrap();
        assert_eq!(c.dims(), (2, 3, 128));
        // window [-86, 42)
        for ((i, j, k), &x) in c.data().indexed_iter() {
            let src = k as isize - 86;
            let expect = if (0..42).contains(&src) { v.data()[[i, j, src as usize]] } else { 0.0 };
            assert_eq!(x, expect);
        }

        let c = crop_depth(&v, 30, 16, 0.5).unwrap();
        assert_eq!(c.data(), &v.data().slice(s![.., .., 22..38]).to_owned());
    }

    #[test]
    fn zscore_cases() {
        let img = EnFaceGrid::new(Array2::from_shape_vec((2, 2), vec![1.0, 2.0, 3.0, 4.0]).unwrap()).unwrap();
        let z = zscore_image(&img);
        let vals: Vec<f64> = z.data().iter().map(|&v| f64::from(v)).collect();
        let mean = vals.iter().sum::<f64>() / 4.0;
        let std = (vals.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / 4.0).sqrt();
        assert!(mean.abs() < 1e-6 && (std - 1.0).abs() < 1e-6);

        let c = EnFaceGrid::new(Array2::from_elem((3, 3), 7.5)).unwrap();
        assert!(zscore_image(&c).data().iter().all(|&v| v == 0.0));
    }

    /// Bilinear interpolation written from the textbook definition, without cropping.
    fn bilinear_oracle(src: &Array2<f32>, th: usize, tw: usize) -> Array2<f64> {
        let (h, w) = src.dim();
        Array2::from_shape_fn((th, tw), |(i, j)| {
            let y = ((i as f64 + 0.5) * h as f64 / th as f64 - 0.5).max(0.0).min((h - 1) as f64);
            let x = ((j as f64 + 0.5) * w as f64 / tw as f64 - 0.5).max(0.0).min((w - 1) as f64);
            let mut acc = 0.0;
            for yy in 0..h {
                for xx in 0..w {
                    let wy = (1.0 - (y - yy as f64).abs()).max(0.0);
                    let wx = (1.0 - (x - xx as f64).abs()).max(0.0);
                    acc += wy * wx * f64::from(src[[yy, xx]]);
                }
            }
            acc
        })
    }

    #[test]
    fn align_cases() {
        let board = EnFaceGrid::new(Array2::from_shape_fn((4, 4), |(i, j)| ((i + j) % 2) as f32)).unwrap();
        let half = align_enface(&board, 2, 2).unwrap();
        for ((i, j), &v) in half.data().indexed_iter() {
            let block: f32 = board.data().slice(s![2 * i..2 * i + 2, 2 * j..2 * j + 2]).iter().sum::<f32>() / 4.0;
            assert!((v - block).abs() < 1e-6);
        }
        assert_eq!(align_enface(&board, 4, 4).unwrap(), board);
        let c = EnFaceGrid::new(Array2::from_elem((6, 10), 3.25)).unwrap();
        let out = align_enface(&c, 4, 5).unwrap();
        assert_eq!(out.dims(), (4, 5));
        assert!(out.data().iter().all(|&v| (v - 3.25).abs() < 1e-6));

        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let r = EnFaceGrid::new(Array2::from_shape_fn((9, 12), |_| rng.random_range(0.0f32..1.0))).unwrap();
        let got = align_enface(&r, 6, 8).unwrap();
        let want = bilinear_oracle(r.data(), 6, 8);
        for (a, b) in got.data().iter().zip(want.iter()) {
            assert!((f64::from(*a) - b).abs() < 1e-5);
        }
    }

    fn small_sample() -> StudySample {
        let mut images = BTreeMap::new();
        images.insert("slo".into(), EnFaceGrid::new(Array2::from_shape_fn((6, 8), |(i, j)| (i * 8 + j) as f32)).unwrap());
        let mut mask = Array2::zeros((6, 8));
        mask[[1, 2]] = 1;
        mask[[1, 3]] = 1;
        mask[[2, 2]] = 1;
        StudySample {
            patient_id: "p".into(),
            eye_id: "OS".into(),
            volume: random_volume((6, 8, 5), 9),
            images,
            mask: MaskGrid::new(mask).unwrap(),
            surface: Some(SurfaceMap::new(Array2::from_shape_fn((6, 8), |(i, _)| i as i32 % 5))),
            spacing: Spacing::new(0.1, 0.05, 0.004).unwrap(),
        }
    }

    #[test]
    fn degenerate_policy_is_identity() {
        let s = small_sample();
        assert_eq!(augment_sample(&s, &AugmentPolicy::identity(), 42).unwrap(), s);
    }

    #[test]
    fn double_forced_flip_restores() {
        let s = small_sample();
        let policy = AugmentPolicy { flip_prob: 1.0, ..AugmentPolicy::identity() };
        let once = augment_sample(&s, &policy, 1).unwrap();
        assert_ne!(once.mask, s.mask);
        let twice = augment_sample(&once, &policy, 2).unwrap();
        assert_eq!(twice, s);
    }

    fn centroid(m: &MaskGrid) -> (f64, f64) {
        let mut acc = (0.0, 0.0, 0.0);
        for ((i, j), &v) in m.data().indexed_iter() {
            if v == 1 {
                acc = (acc.0 + i as f64, acc.1 + j as f64, acc.2 + 1.0);
            }
        }
        (acc.0 / acc.2, acc.1 / acc.2)
    }

    #[test]
    fn mask_stays_binary_and_co_flipped() {
        let s = small_sample();
        let (h, w) = s.mask.dims();
        let c0 = centroid(&s.mask);
        for seed in 0..40 {
            let a = augment_sample(&s, &AugmentPolicy::default(), seed).unwrap();
            assert!(a.mask.data().iter().all(|&v| v <= 1));
            assert_eq!(a.mask.count(), s.mask.count());
            let c = centroid(&a.mask);
            let flip_h = (c.0 - c0.0).abs() > 1e-9;
            let flip_w = (c.1 - c0.1).abs() > 1e-9;
            if flip_h {
                assert!((c.0 - (h as f64 - 1.0 - c0.0)).abs() < 1e-9);
            }
            if flip_w {
                assert!((c.1 - (w as f64 - 1.0 - c0.1)).abs() < 1e-9);
            }
            // the surface depends on the row only, so it must follow the H flip alone
            let mut expect = s.surface.as_ref().unwrap().depth().clone();
            if flip_h {
                expect.invert_axis(Axis(0));
            }
            assert_eq!(a.surface.as_ref().unwrap().depth(), &expect);
        }
        assert_eq!(augment_sample(&s, &AugmentPolicy::default(), 5).unwrap(), augment_sample(&s, &AugmentPolicy::default(), 5).unwrap());
    }

    #[test]
    fn cutout_box_dims_for_clinical_volume() {
        assert_eq!(CutoutSpec::new(1).box_dims((49, 1024, 496)).unwrap(), [46, 102, 49]);
    }

    #[test]
    fn cutout_zero_masks_is_identity() {
        let v = random_volume((8, 20, 20), 6);
        assert_eq!(apply_cutout(&v, &CutoutSpec::new(0), 1).unwrap(), v);
    }

    #[test]
    fn cutout_rejects_oversized_fraction() {
        let v = random_volume((8, 20, 20), 6);
        let spec = CutoutSpec { n_masks: 1, frac: [1.5, 0.1, 0.1], fill_band: 0.1 };
        assert!(apply_cutout(&v, &spec, 0).is_err());
    }

    proptest! {
        #[test]
        fn cutout_changes_only_within_band_and_boxes(n in 0usize..6, seed in 0u64..500) {
            let v = random_volume((10, 30, 20), seed);
            let spec = CutoutSpec::new(n);
            let out = apply_cutout(&v, &spec, seed).unwrap();
            let mu = v.data().iter().map(|&x| f64::from(x)).sum::<f64>() / v.data().len() as f64;
            let [bh, bw, bd] = spec.box_dims(v.dims()).unwrap();
            let mut changed = 0;
            for (a, b) in v.data().iter().zip(out.data().iter()) {
                if a != b {
                    changed += 1;
                    let b = f64::from(*b);
                    prop_assert!(b >= (mu - 0.1 * mu) as f32 as f64 - 1e-6 && b <= (mu + 0.1 * mu) as f32 as f64 + 1e-6);
                }
            }
            prop_assert!(changed <= n * bh * bw * bd);
            prop_assert_eq!(out.clone(), apply_cutout(&v, &spec, seed).unwrap());
        }

        #[test]
        fn zscore_standardizes_and_is_idempotent(vals in proptest::collection::vec(-100f32..100.0, 4..200)) {
            let n = vals.len();
            let v = VoxelGrid::new(Array3::from_shape_vec((1, 1, n), vals).unwrap()).unwrap();
            let z = zscore_volume(&v);
            let xs: Vec<f64> = z.data().iter().map(|&x| f64::from(x)).collect();
            let mean = xs.iter().sum::<f64>() / n as f64;
            let std = (xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n as f64).sqrt();
            if xs.iter().any(|&x| x != 0.0) {
                prop_assert!(mean.abs() < 1e-5);
                prop_assert!((std - 1.0).abs() < 1e-5);
            }
            let zz = zscore_volume(&z);
            for (a, b) in z.data().iter().zip(zz.data().iter()) {
                prop_assert!((a - b).abs() < 1e-5);
            }
        }

        #[test]
        fn flatten_preserves_column_values_up_to_truncation(seed in 0u64..300, anchor in 0usize..12) {
            let v = random_volume((3, 4, 12), seed);
            let mut rng = ChaCha8Rng::seed_from_u64(seed + 1);
            let surf = SurfaceMap::new(Array2::from_shape_fn((3, 4), |_| rng.random_range(0..12)));
            let flat = flatten_along_surface(&v, &surf, anchor).unwrap();
            for ((i, j), &s) in surf.depth().indexed_iter() {
                let shift = anchor as isize - s as isize;
                let mut kept: Vec<f32> = (0..12isize)
                    .filter(|k| (0..12).contains(&(k + shift)))
                    .map(|k| v.data()[[i, j, k as usize]])
                    .collect();
                let mut got: Vec<f32> = flat.data().slice(s![i, j, ..]).iter().copied().filter(|&x| x != 0.0).collect();
                kept.sort_by(f32::total_cmp);
                got.sort_by(f32::total_cmp);
                prop_assert_eq!(kept, got);
            }
        }
    }

    #[test]
    fn slice_subsampling_halves_h_only() {
        let s = small_sample();
        let half = subsample_slices(&s, 2, false).unwrap();
        assert_eq!(half.volume.dims(), (3, 8, 5));
        assert_eq!(half.mask, s.mask);
        assert_eq!(half.images, s.images);
        assert_eq!(half.volume.data().slice(s![1, .., ..]), s.volume.data().slice(s![2, .., ..]));
        assert_eq!(subsample_slices(&s, 2, true).unwrap().mask.dims(), (3, 8));
        let mut thin = s.clone();
        thin.volume = VoxelGrid::new(s.volume.data().slice(s![..1, .., ..]).to_owned()).unwrap();
        assert!(subsample_slices(&thin, 2, false).is_err());
    }

    #[test]
    fn pipeline_aligns_flattens_crops_and_normalizes() {
        let mut s = small_sample();
        s.images.insert("slo".into(), EnFaceGrid::new(Array2::from_shape_fn((12, 16), |(i, j)| (i + j) as f32)).unwrap());
        let p = Preprocessing { out_depth: 4, above_frac: 0.75, zscore: true };
        let out = p.apply(&s).unwrap();
        assert_eq!(out.volume.dims(), (6, 8, 4));
        assert_eq!(out.images["slo"].dims(), (6, 8));
        assert!(out.surface.is_none());
        let m: f64 = out.volume.data().iter().map(|&v| f64::from(v)).sum::<f64>() / out.volume.data().len() as f64;
        assert!(m.abs() < 1e-5);
        assert_eq!(out.mask, s.mask);
    }
}
