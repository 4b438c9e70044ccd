//! Dataset directories, disc-centred cropping, and the synthetic fundus
//! generator.
//!
//! Layout: `<root>/<split>/images/<id>.png` and `<root>/<split>/masks/<id>.png`
//! with mask values 0 (background), 1 (rim), 2 (cup), 255 (unannotated).
//! `<root>/<split>/support.txt` lists the support ids, one per line.

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::episodes::{DatasetBundle, Sample};
use crate::error::{FwsError, Result};
use crate::image::{FundusImage, Grid, LabelImage, CUP, NUM_CLASSES, RIM, UNANNOTATED};
use crate::par;

const SUPPORT_LIST: &str = "support.txt";

fn item_rng(seed: u64, index: usize) -> ChaCha8Rng {
    let mut r = ChaCha8Rng::seed_from_u64(seed);
    r.set_stream(index as u64);
    r
}

/// Padding around the disc bounding box, as fractions of the box size.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CropSpec {
    pub v_pad_mean: f64,
    pub v_pad_std: f64,
    pub h_pad_mean: f64,
    pub h_pad_std: f64,
    pub seed: u64,
}

impl CropSpec {
    pub fn validate(&self) -> Result<()> {
        let all = [self.v_pad_mean, self.v_pad_std, self.h_pad_mean, self.h_pad_std];
        if all.iter().all(|v| v.is_finite() && *v >= 0.0) {
            Ok(())
        } else {
            Err(FwsError::Config(format!("crop padding statistics must be finite and >= 0: {all:?}")))
        }
    }
}

/// Tight bounding box `(y0, x0, h, w)` of the disc (rim or cup).
pub fn disc_bbox(dense: &LabelImage) -> Result<(usize, usize, usize, usize)> {
    let (mut y0, mut x0, mut y1, mut x1) = (usize::MAX, usize::MAX, 0, 0);
    for y in 0..dense.height() {
        for x in 0..dense.width() {
            let v = dense.get(y, x);
            if v == RIM || v == CUP {
                y0 = y0.min(y);
                x0 = x0.min(x);
                y1 = y1.max(y);
                x1 = x1.max(x);
            }
        }
    }
    if y0 == usize::MAX {
        return Err(FwsError::NoDisc);
    }
    Ok((y0, x0, y1 - y0 + 1, x1 - x0 + 1))
}

/// Crops to the disc bounding box plus a padding per side drawn from
/// `Normal(mean, std)` times the box size, clamped to `>= 0` and to the
/// image. The draw is seeded by `(spec.seed, index)`.
pub fn crop_around_disc(
    image: &FundusImage,
    dense: &LabelImage,
    spec: &CropSpec,
    index: usize,
) -> Result<(FundusImage, LabelImage)> {
    spec.validate()?;
    if (image.height(), image.width()) != dense.dims() {
        return Err(FwsError::Shape("image and mask differ in size".into()));
    }
    let (by, bx, bh, bw) = disc_bbox(dense)?;
    let mut rng = item_rng(spec.seed, index);
    let v = Normal::new(spec.v_pad_mean, spec.v_pad_std).map_err(|e| FwsError::Config(e.to_string()))?;
    let h = Normal::new(spec.h_pad_mean, spec.h_pad_std).map_err(|e| FwsError::Config(e.to_string()))?;
    let mut pad = |d: &Normal<f64>, size: usize| (d.sample(&mut rng).max(0.0) * size as f64).round() as usize;
    let (top, bottom, left, right) = (pad(&v, bh), pad(&v, bh), pad(&h, bw), pad(&h, bw));
    let y0 = by.saturating_sub(top);
    let x0 = bx.saturating_sub(left);
    let y1 = (by + bh + bottom).min(dense.height());
    let x1 = (bx + bw + right).min(dense.width());
    Ok((image.crop(y0, x0, y1 - y0, x1 - x0), dense.crop(y0, x0, y1 - y0, x1 - x0)))
}

/// Parameters of the synthetic fundus generator.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SynthSpec {
    pub count: usize,
    pub image_size: usize,
    pub channels: usize,
    /// Disc semi-axis range as a fraction of the image size.
    pub disc_radius: (f64, f64),
    pub cup_ratio: (f64, f64),
    /// Per-pixel Gaussian noise standard deviation.
    pub noise: f64,
    /// Amplitude of the low-frequency background texture.
    pub texture: f64,
    pub seed: u64,
}

impl Default for SynthSpec {
    fn default() -> Self {
        Self {
            count: 200,
            image_size: 128,
            channels: 3,
            disc_radius: (0.25, 0.35),
            cup_ratio: (0.3, 0.7),
            noise: 0.04,
            texture: 0.08,
            seed: 0,
        }
    }
}

impl SynthSpec {
    pub fn validate(&self) -> Result<()> {
        let (r0, r1) = self.disc_radius;
        let (c0, c1) = self.cup_ratio;
        if self.image_size < 16 || self.channels == 0 {
            return Err(FwsError::Config("synth image_size must be >= 16 and channels >= 1".into()));
        }
        if !(0.0 < r0 && r0 <= r1 && r1 < 0.45) {
            return Err(FwsError::Config(format!("synth disc_radius {r0}..{r1} must lie in (0, 0.45)")));
        }
        if !(0.0 < c0 && c0 <= c1 && c1 < 1.0) {
            return Err(FwsError::Config(format!("synth cup_ratio {c0}..{c1} must lie in (0, 1)")));
        }
        if !(self.noise >= 0.0 && self.texture >= 0.0) {
            return Err(FwsError::Config("synth noise and texture must be >= 0".into()));
        }
        Ok(())
    }
}

/// 8-bit quantization, so saved images reload bit-identically.
fn quantize(v: f64) -> f32 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8 as f32 / 255.0
}

struct Ellipse {
    cy: f64,
    cx: f64,
    a: f64,
    b: f64,
    cos: f64,
    sin: f64,
}

impl Ellipse {
    /// Normalized radius: `< 1` inside.
    fn rho(&self, y: f64, x: f64) -> f64 {
        let (dy, dx) = (y - self.cy, x - self.cx);
        let u = dx * self.cos + dy * self.sin;
        let v = -dx * self.sin + dy * self.cos;
        ((u / self.a).powi(2) + (v / self.b).powi(2)).sqrt()
    }
}

/// One synthetic image and mask, determined by `(spec.seed, index)`.
pub fn synth_sample(spec: &SynthSpec, index: usize) -> Result<(FundusImage, LabelImage)> {
    let n = spec.image_size;
    let nf = n as f64;
    let mut rng = item_rng(spec.seed, index);
    let r = rng.random_range(spec.disc_radius.0..=spec.disc_radius.1) * nf;
    let aspect: f64 = rng.random_range(0.85..=1.15);
    let theta = rng.random_range(0.0..std::f64::consts::PI);
    let (a, b) = (r * aspect.sqrt(), r / aspect.sqrt());
    let margin = a.max(b) + 2.0;
    let jitter = (nf / 2.0 - margin).max(0.0) * 0.5;
    let disc = Ellipse {
        cy: nf / 2.0 + rng.random_range(-jitter..=jitter),
        cx: nf / 2.0 + rng.random_range(-jitter..=jitter),
        a,
        b,
        cos: theta.cos(),
        sin: theta.sin(),
    };
    let ratio = rng.random_range(spec.cup_ratio.0..=spec.cup_ratio.1);
    // Cup offset keeps the cup ellipse inside the disc ellipse.
    let slack = (1.0 - ratio) * a.min(b) * 0.5;
    let cup = Ellipse {
        cy: disc.cy + rng.random_range(-slack..=slack) * 0.7,
        cx: disc.cx + rng.random_range(-slack..=slack) * 0.7,
        a: a * ratio,
        b: b * ratio,
        cos: disc.cos,
        sin: disc.sin,
    };
    let label = LabelImage::from_fn(n, n, |y, x| {
        let (fy, fx) = (y as f64 + 0.5, x as f64 + 0.5);
        if cup.rho(fy, fx) < 1.0 && disc.rho(fy, fx) < 1.0 {
            CUP
        } else if disc.rho(fy, fx) < 1.0 {
            RIM
        } else {
            0
        }
    });

    // Colours per class and channel, with per-image variation.
    let l = spec.channels;
    let base: Vec<[f64; 3]> = (0..l)
        .map(|c| {
            let k = [[0.55, 0.80, 0.92], [0.22, 0.55, 0.78], [0.10, 0.30, 0.60]][c % 3];
            let shift = rng.random_range(-0.05..=0.05);
            [k[0] + shift, k[1] + shift, k[2] + shift]
        })
        .collect();
    let waves: Vec<(f64, f64, f64, f64)> = (0..4)
        .map(|_| {
            (
                rng.random_range(0.5..3.0) * std::f64::consts::TAU / nf,
                rng.random_range(0.5..3.0) * std::f64::consts::TAU / nf,
                rng.random_range(0.0..std::f64::consts::TAU),
                rng.random_range(0.5..1.0),
            )
        })
        .collect();
    // Vessels: a few dark sinusoidal curves across the image.
    let vessels: Vec<(bool, f64, f64, f64, f64)> = (0..3)
        .map(|_| {
            (
                rng.random_bool(0.5),
                rng.random_range(0.2..0.8) * nf,
                rng.random_range(0.02..0.08) * nf,
                rng.random_range(0.5..2.0) * std::f64::consts::TAU / nf,
                rng.random_range(1.0..2.5),
            )
        })
        .collect();
    let noise = Normal::new(0.0, spec.noise.max(1e-12)).map_err(|e| FwsError::Config(e.to_string()))?;
    let mut pixels = Vec::with_capacity(n * n * l);
    for y in 0..n {
        for x in 0..n {
            let (fy, fx) = (y as f64 + 0.5, x as f64 + 0.5);
            let cls = label.get(y, x) as usize;
            let tex: f64 = waves.iter().map(|&(wy, wx, ph, amp)| amp * (wy * fy + wx * fx + ph).sin()).sum::<f64>() / 4.0;
            // Soft falloff across the disc edge.
            let glow = (1.0 - disc.rho(fy, fx)).clamp(-0.3, 0.3) * 0.2;
            let dark = vessels
                .iter()
                .map(|&(horiz, off, amp, freq, width)| {
                    let (u, v) = if horiz { (fx, fy) } else { (fy, fx) };
                    let d = (v - off - amp * (freq * u).sin()).abs();
                    (-(d / width).powi(2)).exp()
                })
                .fold(0.0f64, f64::max);
            for colours in &base {
                let v = colours[cls] + glow + spec.texture * tex - 0.25 * dark + noise.sample(&mut rng);
                pixels.push(quantize(v));
            }
        }
    }
    Ok((FundusImage::new(n, n, l, pixels)?, label))
}

/// `spec.count` synthetic samples with ids `synth_00000`, ...; generated in
/// parallel, each from its own seeded stream.
pub fn generate_synthetic(spec: &SynthSpec) -> Result<Vec<Sample>> {
    spec.validate()?;
    par::map_range(spec.count, |i| {
        let (img, lab) = synth_sample(spec, i)?;
        Sample::new(format!("synth_{i:05}"), img, lab)
    })
    .into_iter()
    .collect()
}

/// How a directory becomes a bundle.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LoadSpec {
    /// Target `(height, width)`; `None` keeps the stored size.
    pub size: Option<(usize, usize)>,
    /// Support share of the sorted ids when no support list exists.
    pub support_fraction: f64,
}

impl Default for LoadSpec {
    fn default() -> Self {
        Self { size: Some((128, 128)), support_fraction: 0.75 }
    }
}

fn image_err(path: &Path, e: ::image::ImageError) -> FwsError {
    FwsError::Image { path: path.to_path_buf(), source: e }
}

/// Reads an 8-bit grey or RGB(A) PNG as `[0, 1]` values; alpha is dropped.
pub fn read_image(path: &Path) -> Result<FundusImage> {
    let img = ::image::open(path).map_err(|e| image_err(path, e))?;
    let (w, h) = (img.width() as usize, img.height() as usize);
    let (channels, raw) = match img.color().channel_count() {
        1 | 2 => (1, img.into_luma8().into_raw()),
        _ => (3, img.into_rgb8().into_raw()),
    };
    FundusImage::new(h, w, channels, raw.into_iter().map(|v| v as f32 / 255.0).collect())
}

pub fn write_image(path: &Path, img: &FundusImage) -> Result<()> {
    let bytes: Vec<u8> = img.pixels().iter().map(|&v| (v.clamp(0.0, 1.0) * 255.0).round() as u8).collect();
    let color = match img.channels() {
        1 => ::image::ExtendedColorType::L8,
        3 => ::image::ExtendedColorType::Rgb8,
        c => return Err(FwsError::Data { path: path.to_path_buf(), msg: format!("cannot write {c}-channel PNG") }),
    };
    ::image::save_buffer(path, &bytes, img.width() as u32, img.height() as u32, color).map_err(|e| image_err(path, e))
}

/// Reads a mask; values must be classes, or the sentinel when `sparse`.
pub fn read_mask(path: &Path, sparse: bool) -> Result<Grid<u8>> {
    let img = ::image::open(path).map_err(|e| image_err(path, e))?.into_luma8();
    let (w, h) = (img.width() as usize, img.height() as usize);
    let raw = img.into_raw();
    if let Some(bad) = raw.iter().find(|&&v| (v as usize) >= NUM_CLASSES && !(sparse && v == UNANNOTATED)) {
        return Err(FwsError::Data { path: path.to_path_buf(), msg: format!("unknown mask value {bad}") });
    }
    Grid::from_vec(h, w, raw)
}

pub fn write_mask(path: &Path, mask: &Grid<u8>) -> Result<()> {
    ::image::save_buffer(
        path,
        mask.pixels(),
        mask.width() as u32,
        mask.height() as u32,
        ::image::ExtendedColorType::L8,
    )
    .map_err(|e| image_err(path, e))
}

fn png_stems(dir: &Path) -> Result<BTreeMap<String, PathBuf>> {
    let mut out = BTreeMap::new();
    if !dir.exists() {
        return Ok(out);
    }
    for entry in fs::read_dir(dir).map_err(|e| FwsError::io(dir, e))? {
        let p = entry.map_err(|e| FwsError::io(dir, e))?.path();
        if p.extension().is_some_and(|e| e.eq_ignore_ascii_case("png")) {
            if let Some(stem) = p.file_stem().and_then(|s| s.to_str()) {
                out.insert(stem.to_string(), p);
            }
        }
    }
    Ok(out)
}

/// Loads `<root>/<split>` into a bundle, resizing images bilinearly and
/// masks by nearest neighbour.
pub fn load_dataset(root: &Path, split: &str, spec: &LoadSpec) -> Result<DatasetBundle> {
    let dir = root.join(split);
    let images = png_stems(&dir.join("images"))?;
    let masks = png_stems(&dir.join("masks"))?;
    let unmatched: Vec<&String> = images.keys().filter(|k| !masks.contains_key(*k)).chain(masks.keys().filter(|k| !images.contains_key(*k))).collect();
    if !unmatched.is_empty() {
        return Err(FwsError::Data { path: dir, msg: format!("unmatched image/mask files: {unmatched:?}") });
    }
    if images.is_empty() {
        log::warn!("{} contains no images", dir.display());
    }
    let entries: Vec<(&String, &PathBuf)> = images.iter().collect();
    let samples = par::map_slice(&entries, |&(id, ipath)| -> Result<Sample> {
        let mut img = read_image(ipath)?;
        let mut mask = read_mask(&masks[id], false)?;
        if let Some((h, w)) = spec.size {
            mask = mask.resize_nearest(h, w);
            if (img.height(), img.width()) != (h, w) {
                img = img.resize_bilinear(h, w);
            }
        }
        Sample::new(id.clone(), img, mask).map_err(|e| FwsError::Data { path: ipath.clone(), msg: e.to_string() })
    })
    .into_iter()
    .collect::<Result<Vec<_>>>()?;

    let list = dir.join(SUPPORT_LIST);
    let support_ids: BTreeSet<String> = if list.exists() {
        let text = fs::read_to_string(&list).map_err(|e| FwsError::io(&list, e))?;
        text.lines().map(str::trim).filter(|l| !l.is_empty()).map(String::from).collect()
    } else {
        let n = samples.len();
        // Both pools non-empty whenever there are two or more samples.
        let k = match n {
            0 | 1 => n,
            _ => ((spec.support_fraction * n as f64).round() as usize).clamp(1, n - 1),
        };
        samples.iter().take(k).map(|s| s.id.clone()).collect()
    };
    let (support, query): (Vec<Sample>, Vec<Sample>) = samples.into_iter().partition(|s| support_ids.contains(&s.id));
    DatasetBundle::new(format!("{}/{split}", root.display()), support, query)
}

/// Writes a bundle to `<root>/<split>` with its support list.
pub fn save_dataset(bundle: &DatasetBundle, root: &Path, split: &str) -> Result<()> {
    let dir = root.join(split);
    for sub in ["images", "masks"] {
        let d = dir.join(sub);
        fs::create_dir_all(&d).map_err(|e| FwsError::io(&d, e))?;
    }
    let all: Vec<&Sample> = bundle.support.iter().chain(&bundle.query).collect();
    par::map_slice(&all, |s| -> Result<()> {
        write_image(&dir.join("images").join(format!("{}.png", s.id)), &s.image)?;
        write_mask(&dir.join("masks").join(format!("{}.png", s.id)), &s.label)
    })
    .into_iter()
    .collect::<Result<()>>()?;
    let list = dir.join(SUPPORT_LIST);
    let text: String = bundle.support.iter().map(|s| format!("{}\n", s.id)).collect();
    fs::write(&list, text).map_err(|e| FwsError::io(&list, e))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> SynthSpec {
        SynthSpec { count: 6, image_size: 48, ..SynthSpec::default() }
    }

    #[test]
    fn synthetic_is_deterministic_and_distinct() {
        let a = generate_synthetic(&small()).unwrap();
        assert_eq!(a, generate_synthetic(&small()).unwrap());
        for i in 0..a.len() {
            for j in i + 1..a.len() {
                assert_ne!(a[i].image, a[j].image);
            }
        }
    }

    #[test]
    fn synthetic_class_fractions() {
        for s in generate_synthetic(&SynthSpec { count: 20, ..small() }).unwrap() {
            let count = |c: u8| s.label.pixels().iter().filter(|&&v| v == c).count();
            let (bg, rim, cup) = (count(0), count(1), count(2));
            assert!(bg > rim && rim > 0 && cup > 0, "{bg} {rim} {cup}");
            // Cup strictly inside the disc: every cup pixel's 4-neighbours are disc.
            let (h, w) = s.label.dims();
            for y in 0..h {
                for x in 0..w {
                    if s.label.get(y, x) == CUP {
                        assert!(y > 0 && x > 0 && y + 1 < h && x + 1 < w);
                        for (dy, dx) in [(0, 1), (2, 1), (1, 0), (1, 2)] {
                            assert_ne!(s.label.get(y + dy - 1, x + dx - 1), 0);
                        }
                    }
                }
            }
        }
    }

    #[test]
    fn crop_tight_box_and_clamping() {
        let s = &generate_synthetic(&small()).unwrap()[0];
        let zero = CropSpec { v_pad_mean: 0.0, v_pad_std: 0.0, h_pad_mean: 0.0, h_pad_std: 0.0, seed: 1 };
        let (_, m) = crop_around_disc(&s.image, &s.label, &zero, 0).unwrap();
        let (_, _, bh, bw) = disc_bbox(&s.label).unwrap();
        assert_eq!(m.dims(), (bh, bw));
        // Strongly negative padding clamps to the tight box.
        let neg = CropSpec { v_pad_mean: 0.0, v_pad_std: 5.0, h_pad_mean: 0.0, h_pad_std: 5.0, seed: 1 };
        let disc_px = |m: &LabelImage| m.pixels().iter().filter(|&&v| v != 0).count();
        for i in 0..20 {
            let (img, m) = crop_around_disc(&s.image, &s.label, &neg, i).unwrap();
            assert!(m.height() >= bh && m.width() >= bw);
            assert_eq!(disc_px(&m), disc_px(&s.label));
            assert_eq!((img.height(), img.width()), m.dims());
        }
        let refuge = CropSpec { v_pad_mean: 0.20, v_pad_std: 0.08, h_pad_mean: 0.27, h_pad_std: 0.11, seed: 0 };
        refuge.validate().unwrap();
        assert!(matches!(
            crop_around_disc(&s.image, &LabelImage::filled(48, 48, 0), &refuge, 0),
            Err(FwsError::NoDisc)
        ));
    }

    #[test]
    fn save_load_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let samples = generate_synthetic(&small()).unwrap();
        let b = DatasetBundle::split("x", samples, 4).unwrap();
        save_dataset(&b, dir.path(), "train").unwrap();
        let back = load_dataset(dir.path(), "train", &LoadSpec { size: None, support_fraction: 0.5 }).unwrap();
        assert_eq!(back.support, b.support);
        assert_eq!(back.query, b.query);
    }

    #[test]
    fn load_rejects_bad_masks_and_handles_empty() {
        let dir = tempfile::tempdir().unwrap();
        let empty = load_dataset(dir.path(), "none", &LoadSpec::default()).unwrap();
        assert!(empty.support.is_empty() && empty.query.is_empty());
        let s = &generate_synthetic(&small()).unwrap()[0];
        let d = dir.path().join("bad");
        fs::create_dir_all(d.join("images")).unwrap();
        fs::create_dir_all(d.join("masks")).unwrap();
        write_image(&d.join("images/a.png"), &s.image).unwrap();
        let mut m = (*s.label).clone();
        m.pixels_mut()[0] = 7;
        write_mask(&d.join("masks/a.png"), &m).unwrap();
        let err = load_dataset(dir.path(), "bad", &LoadSpec::default()).unwrap_err().to_string();
        assert!(err.contains("a.png") && err.contains('7'), "{err}");
        write_image(&d.join("images/b.png"), &s.image).unwrap();
        let err = load_dataset(dir.path(), "bad", &LoadSpec::default()).unwrap_err().to_string();
        assert!(err.contains("unmatched"), "{err}");
    }

    #[test]
    fn load_resizes_masks_nearest() {
        let dir = tempfile::tempdir().unwrap();
        let b = DatasetBundle::split("x", generate_synthetic(&small()).unwrap(), 3).unwrap();
        save_dataset(&b, dir.path(), "s").unwrap();
        let r = load_dataset(dir.path(), "s", &LoadSpec { size: Some((32, 40)), support_fraction: 0.5 }).unwrap();
        for s in r.support.iter().chain(&r.query) {
            assert_eq!(s.label.dims(), (32, 40));
            assert!(s.label.pixels().iter().all(|&v| v < 3));
        }
    }
}
