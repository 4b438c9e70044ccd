//! Simulated sparse annotations derived from dense label maps.
//!
//! Every technique is a pure function of `(label, params, seed)`. Annotated
//! pixels always carry the dense label's class: whenever a class mask is
//! dilated, pixels that land on another class are dropped.

pub mod blobs;
pub mod contour;
pub mod morph;
pub mod skeleton;
pub mod slic;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

pub use blobs::blob_filter;

use crate::error::{FwsError, Result};
use crate::image::{BinaryMask, Grid, LabelImage, SparseLabelImage, UNANNOTATED};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Technique {
    Points,
    Grid,
    Contours,
    Skeleton,
    Regions,
}

impl Technique {
    pub const ALL: [Technique; 5] =
        [Technique::Points, Technique::Grid, Technique::Contours, Technique::Skeleton, Technique::Regions];

    pub fn name(self) -> &'static str {
        match self {
            Technique::Points => "points",
            Technique::Grid => "grid",
            Technique::Contours => "contours",
            Technique::Skeleton => "skeleton",
            Technique::Regions => "regions",
        }
    }

    /// Points take an integer count; the others a fraction in `(0, 1]`.
    pub fn density_is_count(self) -> bool {
        self == Technique::Points
    }

    pub fn validate_density(self, density: f64) -> Result<()> {
        let ok = if self.density_is_count() {
            density >= 1.0 && density.fract() == 0.0
        } else {
            density > 0.0 && density <= 1.0
        };
        if ok {
            Ok(())
        } else {
            Err(FwsError::range("density", format!("{density} invalid for {}", self.name())))
        }
    }
}

impl std::fmt::Display for Technique {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

impl std::str::FromStr for Technique {
    type Err = FwsError;

    fn from_str(s: &str) -> Result<Self> {
        Technique::ALL
            .into_iter()
            .find(|t| t.name() == s)
            .ok_or_else(|| FwsError::Config(format!("unknown technique {s:?}")))
    }
}

/// Size parameters shared by all techniques.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SizeParams {
    pub point_size: usize,
    pub grid_spacing: usize,
    pub erode_radius: usize,
    pub dilate_radius: usize,
    pub compactness: f64,
    /// Superpixel side is `min(H, W) / region_scale`.
    pub region_scale: f64,
}

impl Default for SizeParams {
    fn default() -> Self {
        Self { point_size: 2, grid_spacing: 8, erode_radius: 2, dilate_radius: 1, compactness: 0.5, region_scale: 12.0 }
    }
}

impl SizeParams {
    pub fn validate(&self) -> Result<()> {
        if self.point_size < 1 {
            return Err(FwsError::range("point_size", "must be >= 1"));
        }
        if self.grid_spacing < 2 {
            return Err(FwsError::range("grid_spacing", "must be >= 2"));
        }
        if !(self.compactness > 0.0) {
            return Err(FwsError::range("compactness", "must be > 0"));
        }
        if !(self.region_scale > 0.0) {
            return Err(FwsError::range("region_scale", "must be > 0"));
        }
        Ok(())
    }
}

/// A complete sparsification request.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SparsifyParams {
    pub technique: Technique,
    pub density: f64,
    pub sizes: SizeParams,
    pub seed: u64,
}

/// Result of a sparsification; `warning` is set when the technique found
/// nothing it could annotate.
#[derive(Clone, Debug, PartialEq)]
pub struct Sparsified {
    pub label: SparseLabelImage,
    pub warning: Option<String>,
}

/// Dispatches to the technique in `params`.
pub fn sparsify(y: &LabelImage, params: &SparsifyParams) -> Result<Sparsified> {
    params.sizes.validate()?;
    params.technique.validate_density(params.density)?;
    let s = &params.sizes;
    let plain = |label| Sparsified { label, warning: None };
    Ok(match params.technique {
        Technique::Points => plain(sparsify_points(y, params.density as usize, s.point_size, s.dilate_radius, params.seed)?),
        Technique::Grid => plain(sparsify_grid(y, params.density, s.point_size, s.grid_spacing, params.seed)?),
        Technique::Contours => {
            plain(sparsify_contours(y, params.density, s.erode_radius, s.dilate_radius, params.seed)?)
        }
        Technique::Skeleton => plain(sparsify_skeleton(y, params.density, s.dilate_radius, params.seed)?),
        Technique::Regions => {
            let (label, empty) = sparsify_regions(y, params.density, s.compactness, s.region_scale, params.seed)?;
            let warning = empty.then(|| "no single-class regions; label left unannotated".to_string());
            if let Some(w) = &warning {
                log::warn!("{w}");
            }
            Sparsified { label, warning }
        }
    })
}

fn check_label(y: &LabelImage) -> Result<usize> {
    let (h, w) = y.dims();
    if h < 8 || w < 8 {
        return Err(FwsError::range("label size", format!("{h}x{w}, need at least 8x8")));
    }
    match y.pixels().iter().max() {
        Some(&m) if m != UNANNOTATED => Ok(m as usize + 1),
        _ => Err(FwsError::range("label value", "dense label contains the unannotated sentinel")),
    }
}

fn check_fraction(what: &'static str, p: f64) -> Result<()> {
    if p > 0.0 && p <= 1.0 {
        Ok(())
    } else {
        Err(FwsError::range(what, format!("{p} not in (0, 1]")))
    }
}

/// `ceil(p * n)`, so any positive fraction selects at least one item.
pub fn fraction_count(p: f64, n: usize) -> usize {
    ((p * n as f64).ceil() as usize).min(n)
}

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Copies the dense class onto every annotated pixel.
fn from_mask(y: &LabelImage, annotated: &BinaryMask) -> SparseLabelImage {
    Grid::from_fn(y.height(), y.width(), |r, c| if annotated.get(r, c) { y.get(r, c) } else { UNANNOTATED })
}

/// Dilates each class mask by `radius` and keeps the pixels whose dense
/// class matches.
fn dilate_per_class(y: &LabelImage, class_masks: &[BinaryMask], radius: usize) -> BinaryMask {
    let (h, w) = y.dims();
    let mut out = BinaryMask::filled(h, w, false);
    for (c, m) in class_masks.iter().enumerate() {
        let d = morph::dilate(m, radius);
        for i in 0..h * w {
            if d.pixels()[i] && y.pixels()[i] as usize == c {
                out.pixels_mut()[i] = true;
            }
        }
    }
    out
}

/// Downscaled grid dims and the full-resolution sample of each cell.
fn downscale(y: &LabelImage, s: usize) -> (usize, usize, impl Fn(usize, usize) -> u8 + '_) {
    let (h, w) = y.dims();
    let (hd, wd) = (h.div_ceil(s), w.div_ceil(s));
    let sample = move |r: usize, c: usize| y.get((r * s + s / 2).min(h - 1), (c * s + s / 2).min(w - 1));
    (hd, wd, sample)
}

/// Marks the full-resolution block of downscaled cell `(r, c)` in class mask `class`.
fn upscale_into(masks: &mut [BinaryMask], class: usize, r: usize, c: usize, s: usize) {
    let m = &mut masks[class];
    let (h, w) = m.dims();
    for y in r * s..((r + 1) * s).min(h) {
        for x in c * s..((c + 1) * s).min(w) {
            m.set(y, x, true);
        }
    }
}

/// Random points: the first `n_p` cells of a seeded permutation of the
/// `s_p`-downscaled label, upscaled and dilated by `s_d`. Larger `n_p` under
/// the same seed annotates a superset.
pub fn sparsify_points(y: &LabelImage, n_p: usize, s_p: usize, s_d: usize, seed: u64) -> Result<SparseLabelImage> {
    let classes = check_label(y)?;
    if s_p < 1 {
        return Err(FwsError::range("point_size", "must be >= 1"));
    }
    let (hd, wd, sample) = downscale(y, s_p);
    if n_p < 1 || n_p > hd * wd {
        return Err(FwsError::range("n_p", format!("{n_p} not in 1..={}", hd * wd)));
    }
    let mut order: Vec<usize> = (0..hd * wd).collect();
    order.shuffle(&mut rng(seed));
    let mut masks = vec![BinaryMask::filled(y.height(), y.width(), false); classes];
    for &i in &order[..n_p] {
        let (r, c) = (i / wd, i % wd);
        upscale_into(&mut masks, sample(r, c) as usize, r, c, s_p);
    }
    Ok(from_mask(y, &dilate_per_class(y, &masks, s_d)))
}

/// Regular lattice with `s_g` downscaled pixels between points, upscaled,
/// then thinned by random blobs covering `p_g` of the image.
pub fn sparsify_grid(y: &LabelImage, p_g: f64, s_p: usize, s_g: usize, seed: u64) -> Result<SparseLabelImage> {
    let classes = check_label(y)?;
    check_fraction("p_g", p_g)?;
    if s_p < 1 || s_g < 2 {
        return Err(FwsError::range("grid sizes", format!("point_size {s_p}, spacing {s_g}")));
    }
    let (hd, wd, sample) = downscale(y, s_p);
    if s_g >= hd.min(wd) {
        return Err(FwsError::range("grid_spacing", format!("{s_g} leaves no lattice in {hd}x{wd}")));
    }
    let mut masks = vec![BinaryMask::filled(y.height(), y.width(), false); classes];
    for r in (s_g / 2..hd).step_by(s_g) {
        for c in (s_g / 2..wd).step_by(s_g) {
            upscale_into(&mut masks, sample(r, c) as usize, r, c, s_p);
        }
    }
    let lattice = dilate_per_class(y, &masks, 0);
    Ok(from_mask(y, &blob_filter(&lattice, p_g, seed)))
}

/// Every polyline contour of every class eroded by `s_e`, in class order.
pub fn class_contours(y: &LabelImage, s_e: usize) -> Result<Vec<(usize, Vec<contour::Point>)>> {
    let classes = check_label(y)?;
    let mut out = Vec::new();
    for c in 0..classes {
        let eroded = morph::erode(&y.class_mask(c as u8), s_e);
        out.extend(contour::find_contours(&eroded).into_iter().map(|l| (c, l)));
    }
    Ok(out)
}

/// A seeded `ceil(p_c * n)` subset of the class contours, drawn and dilated
/// by `s_d`.
pub fn sparsify_contours(y: &LabelImage, p_c: f64, s_e: usize, s_d: usize, seed: u64) -> Result<SparseLabelImage> {
    check_fraction("p_c", p_c)?;
    let lines = class_contours(y, s_e)?;
    let classes = check_label(y)?;
    let mut order: Vec<usize> = (0..lines.len()).collect();
    order.shuffle(&mut rng(seed));
    let mut masks = vec![BinaryMask::filled(y.height(), y.width(), false); classes];
    for &i in &order[..fraction_count(p_c, lines.len())] {
        let (c, line) = &lines[i];
        contour::rasterize(line, &mut masks[*c]);
    }
    Ok(from_mask(y, &dilate_per_class(y, &masks, s_d)))
}

/// Medial axis of every class region, dilated by `s_d`, thinned by blobs
/// covering `p_s` of the image.
pub fn sparsify_skeleton(y: &LabelImage, p_s: f64, s_d: usize, seed: u64) -> Result<SparseLabelImage> {
    let classes = check_label(y)?;
    check_fraction("p_s", p_s)?;
    let masks: Vec<BinaryMask> = (0..classes).map(|c| skeleton::medial_axis(&y.class_mask(c as u8))).collect();
    let sk = dilate_per_class(y, &masks, s_d);
    Ok(from_mask(y, &blob_filter(&sk, p_s, seed)))
}

/// Superpixels of the label map with their purity.
pub fn label_regions(y: &LabelImage, s_c: f64, region_scale: f64) -> Result<(Grid<usize>, Vec<bool>)> {
    let classes = check_label(y)?;
    let step = y.height().min(y.width()) as f64 / region_scale;
    let (lab, n) = slic::slic(y, classes, step, s_c);
    let mut class_of = vec![None; n];
    let mut pure = vec![true; n];
    for (&k, &v) in lab.pixels().iter().zip(y.pixels()) {
        match class_of[k] {
            None => class_of[k] = Some(v),
            Some(c) if c != v => pure[k] = false,
            _ => {}
        }
    }
    Ok((lab, pure))
}

/// A seeded `ceil(p_r * n)` subset of single-class superpixels, annotated
/// whole. The flag is set when no single-class superpixel exists.
pub fn sparsify_regions(
    y: &LabelImage,
    p_r: f64,
    s_c: f64,
    region_scale: f64,
    seed: u64,
) -> Result<(SparseLabelImage, bool)> {
    check_fraction("p_r", p_r)?;
    if !(s_c > 0.0) {
        return Err(FwsError::range("compactness", "must be > 0"));
    }
    let (lab, pure) = label_regions(y, s_c, region_scale)?;
    let mut ids: Vec<usize> = (0..pure.len()).filter(|&k| pure[k]).collect();
    if ids.is_empty() {
        return Ok((SparseLabelImage::unannotated(y.height(), y.width()), true));
    }
    ids.shuffle(&mut rng(seed));
    let mut chosen = vec![false; pure.len()];
    for &k in &ids[..fraction_count(p_r, ids.len())] {
        chosen[k] = true;
    }
    Ok((from_mask(y, &lab.map(|k| chosen[k])), false))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::sparsify::morph::components;
    use proptest::prelude::*;

    /// Disc with a cup, centred.
    fn fundus_mask(n: usize, shift: f64) -> LabelImage {
        let c = n as f64 / 2.0 + shift;
        LabelImage::from_fn(n, n, |r, x| {
            let d = (r as f64 - c).hypot(x as f64 - c * 0.95);
            if d < n as f64 * 0.14 {
                2
            } else if d < n as f64 * 0.32 {
                1
            } else {
                0
            }
        })
    }

    fn consistent(y: &LabelImage, s: &SparseLabelImage) -> bool {
        s.pixels().iter().zip(y.pixels()).all(|(&a, &b)| a == UNANNOTATED || a == b)
    }

    fn annotated(s: &SparseLabelImage) -> Vec<bool> {
        s.pixels().iter().map(|&v| v != UNANNOTATED).collect()
    }

    fn classes_present(s: &SparseLabelImage) -> std::collections::BTreeSet<u8> {
        s.pixels().iter().copied().filter(|&v| v != UNANNOTATED).collect()
    }

    #[test]
    fn single_point_is_one_blob_of_one_class() {
        let y = fundus_mask(64, 0.0);
        for seed in 0..10 {
            let s = sparsify_points(&y, 1, 2, 1, seed).unwrap();
            assert!(consistent(&y, &s));
            assert_eq!(classes_present(&s).len(), 1);
            assert_eq!(components(&s, true, |v| v != UNANNOTATED).1, 1);
        }
    }

    #[test]
    fn all_points_is_identity() {
        let y = fundus_mask(32, 0.3);
        assert_eq!(sparsify_points(&y, 32 * 32, 1, 0, 5).unwrap(), y);
        assert!(sparsify_points(&y, 32 * 32 + 1, 1, 0, 5).is_err());
    }

    #[test]
    fn points_are_nested() {
        let y = fundus_mask(64, 0.0);
        let a = annotated(&sparsify_points(&y, 13, 2, 1, 7).unwrap());
        let b = annotated(&sparsify_points(&y, 25, 2, 1, 7).unwrap());
        assert!(a.iter().zip(&b).all(|(&x, &y)| !x || y));
        assert!(b.iter().filter(|&&v| v).count() > a.iter().filter(|&&v| v).count());
    }

    #[test]
    fn full_grid_is_the_lattice() {
        let y = fundus_mask(64, 0.0);
        let s = sparsify_grid(&y, 1.0, 1, 8, 3).unwrap();
        let want = Grid::from_fn(64, 64, |r, c| if r % 8 == 4 && c % 8 == 4 { y.get(r, c) } else { UNANNOTATED });
        assert_eq!(s, want);
        assert!(sparsify_grid(&y, 1.0, 1, 64, 3).is_err());
        assert!(sparsify_grid(&y, 1.0, 8, 8, 3).is_err());
    }

    #[test]
    fn half_grid_is_about_half() {
        let y = fundus_mask(128, 0.0);
        let full = sparsify_grid(&y, 1.0, 1, 4, 0).unwrap().annotated_count() as f64;
        for seed in 0..5 {
            let half = sparsify_grid(&y, 0.5, 1, 4, seed).unwrap().annotated_count() as f64;
            assert!((half / full - 0.5).abs() <= 0.1, "{}", half / full);
        }
        let sparse = sparsify_grid(&y, 0.1, 1, 4, 0).unwrap().annotated_count() as f64;
        assert!(sparse < full * 0.2);
    }

    #[test]
    fn contour_of_disk_is_closed_ring_inside() {
        let y = LabelImage::from_fn(40, 40, |r, c| u8::from((r as f64 - 19.5).hypot(c as f64 - 19.5) < 12.0));
        let s = sparsify_contours(&y, 1.0, 2, 0, 1).unwrap();
        let ring = s.class_mask(1);
        assert!(ring.pixels().iter().any(|&v| v));
        assert_eq!(components(&ring, true, |v| v).1, 1);
        // Closed: the ring separates its interior from the outside.
        let (_, holes) = components(&ring, false, |v| !v);
        assert_eq!(holes, 2);
        // Strictly inside the disk and off its boundary.
        let boundary = morph::dilate(&y.class_mask(0), 1);
        assert!(ring.pixels().iter().zip(boundary.pixels()).all(|(&r, &b)| !r || !b));
    }

    #[test]
    fn contour_fraction_uses_ceiling() {
        let y = LabelImage::from_fn(48, 48, |r, c| {
            let blob = |cy: f64, cx: f64| (r as f64 - cy).hypot(c as f64 - cx) < 6.0;
            u8::from(blob(12.0, 12.0) || blob(12.0, 36.0) || blob(36.0, 24.0))
        });
        let lines = class_contours(&y, 1).unwrap();
        let total = lines.len();
        assert_eq!(total, 6);
        let s = sparsify_contours(&y, 0.5, 1, 0, 9).unwrap();
        // Count kept polylines by the drawn components of each class.
        let kept: usize = (0..2u8).map(|c| components(&s.class_mask(c), true, |v| v).1).sum();
        assert_eq!(kept, fraction_count(0.5, total));
        assert_eq!(kept, 3);
    }

    #[test]
    fn all_background_contours_are_empty() {
        let y = LabelImage::filled(16, 16, 0);
        assert_eq!(sparsify_contours(&y, 1.0, 2, 1, 0).unwrap().annotated_count(), 0);
    }

    #[test]
    fn skeleton_of_line_and_seed_independence() {
        let y = LabelImage::from_fn(16, 16, |r, c| u8::from(r == 8 && (2..14).contains(&c)));
        let s = sparsify_skeleton(&y, 1.0, 0, 0).unwrap();
        assert_eq!(s.class_mask(1), y.class_mask(1));
        assert_eq!(s, sparsify_skeleton(&y, 1.0, 0, 99).unwrap());
    }

    #[test]
    fn skeleton_of_square_is_dilated_diagonals() {
        let y = LabelImage::from_fn(29, 29, |r, c| u8::from((4..25).contains(&r) && (4..25).contains(&c)));
        let s = sparsify_skeleton(&y, 1.0, 1, 0).unwrap();
        let diag = BinaryMask::from_fn(29, 29, |r, c| {
            let (a, b) = (r as isize - 4, c as isize - 4);
            (0..21).contains(&a) && (0..21).contains(&b) && (a == b || a + b == 20)
        });
        let want = Grid::from_fn(29, 29, |r, c| morph::dilate(&diag, 1).get(r, c) && y.get(r, c) == 1);
        assert_eq!(s.class_mask(1), want);
    }

    #[test]
    fn regions_select_ceiling_of_pure() {
        let y = fundus_mask(96, 0.0);
        let (lab, pure) = label_regions(&y, 0.5, 12.0).unwrap();
        let n_pure = pure.iter().filter(|&&p| p).count();
        let (s, warn) = sparsify_regions(&y, 0.25, 0.5, 12.0, 4).unwrap();
        assert!(!warn);
        let mut selected = std::collections::BTreeSet::new();
        for (i, &v) in s.pixels().iter().enumerate() {
            if v != UNANNOTATED {
                selected.insert(lab.pixels()[i]);
            }
        }
        assert_eq!(selected.len(), fraction_count(0.25, n_pure));
        // Selected regions are annotated whole.
        for (i, &k) in lab.pixels().iter().enumerate() {
            assert_eq!(selected.contains(&k), s.pixels()[i] != UNANNOTATED);
        }
    }

    #[test]
    fn uniform_image_regions_fraction() {
        let y = LabelImage::filled(96, 96, 0);
        let (s, _) = sparsify_regions(&y, 0.5, 0.5, 12.0, 2).unwrap();
        let frac = s.annotated_count() as f64 / (96.0 * 96.0);
        assert!((frac - 0.5).abs() < 0.15, "{frac}");
        let (all, _) = sparsify_regions(&y, 1.0, 0.5, 12.0, 2).unwrap();
        assert_eq!(all, y);
    }

    #[test]
    fn no_pure_regions_warns() {
        // A checkerboard mixes every region.
        let y = LabelImage::from_fn(16, 16, |r, c| ((r + c) % 2) as u8);
        let (s, warn) = sparsify_regions(&y, 1.0, 1000.0, 2.0, 0).unwrap();
        assert!(warn);
        assert_eq!(s.annotated_count(), 0);
    }

    #[test]
    fn regions_annotate_most_at_full_density() {
        let y = fundus_mask(128, 0.0);
        let sizes = SizeParams::default();
        let count = |t: Technique| {
            let d = if t == Technique::Points { 50.0 } else { 1.0 };
            sparsify(&y, &SparsifyParams { technique: t, density: d, sizes, seed: 1 }).unwrap().label.annotated_count()
        };
        let regions = count(Technique::Regions);
        for t in [Technique::Points, Technique::Grid, Technique::Contours, Technique::Skeleton] {
            assert!(regions > count(t), "{t}");
        }
    }

    #[test]
    fn full_density_covers_all_classes() {
        let y = fundus_mask(128, 0.0);
        for t in [Technique::Grid, Technique::Skeleton, Technique::Regions] {
            let p = SparsifyParams { technique: t, density: 1.0, sizes: SizeParams::default(), seed: 0 };
            assert_eq!(classes_present(&sparsify(&y, &p).unwrap().label).len(), 3, "{t}");
        }
    }

    #[test]
    fn rejects_bad_params() {
        let y = fundus_mask(32, 0.0);
        let p = |t, d| SparsifyParams { technique: t, density: d, sizes: SizeParams::default(), seed: 0 };
        assert!(sparsify(&y, &p(Technique::Grid, 0.0)).is_err());
        assert!(sparsify(&y, &p(Technique::Skeleton, 1.5)).is_err());
        assert!(sparsify(&y, &p(Technique::Points, 2.5)).is_err());
        assert!(sparsify(&LabelImage::filled(4, 4, 0), &p(Technique::Skeleton, 1.0)).is_err());
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(24))]
        #[test]
        fn every_technique_is_label_consistent_and_deterministic(
            t in 0usize..5,
            d in 0.05f64..1.0,
            seed in 0u64..1000,
            shift in -6.0f64..6.0,
        ) {
            let y = fundus_mask(48, shift);
            let technique = Technique::ALL[t];
            let density = if technique == Technique::Points { (d * 60.0).ceil() } else { d };
            let p = SparsifyParams { technique, density, sizes: SizeParams::default(), seed };
            let a = sparsify(&y, &p).unwrap();
            prop_assert!(consistent(&y, &a.label));
            prop_assert_eq!(a, sparsify(&y, &p).unwrap());
        }
    }
}
