//! Smooth random blob masks used to thin sparse labels.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::morph::edt;
use crate::image::{BinaryMask, Grid};

/// Blob diameter relative to the image side.
const BLOB_SIZE_FRACTION: f64 = 0.1;

/// Separable Gaussian smoothing with half-sample symmetric borders,
/// truncated at four standard deviations.
pub fn gaussian_smooth(src: &Grid<f64>, sigma: f64) -> Grid<f64> {
    let radius = (4.0 * sigma + 0.5) as isize;
    let kernel: Vec<f64> = {
        let k: Vec<f64> = (-radius..=radius).map(|i| (-((i * i) as f64) / (2.0 * sigma * sigma)).exp()).collect();
        let s: f64 = k.iter().sum();
        k.into_iter().map(|v| v / s).collect()
    };
    let reflect = |i: isize, n: usize| -> usize {
        let n = n as isize;
        let period = 2 * n;
        let m = i.rem_euclid(period);
        (if m < n { m } else { period - 1 - m }) as usize
    };
    let (h, w) = src.dims();
    let mut tmp = Grid::filled(h, w, 0.0);
    for y in 0..h {
        for x in 0..w {
            let mut acc = 0.0;
            for (k, kv) in kernel.iter().enumerate() {
                acc += kv * src.get(y, reflect(x as isize + k as isize - radius, w));
            }
            tmp.set(y, x, acc);
        }
    }
    let mut out = Grid::filled(h, w, 0.0);
    for y in 0..h {
        for x in 0..w {
            let mut acc = 0.0;
            for (k, kv) in kernel.iter().enumerate() {
                acc += kv * tmp.get(reflect(y as isize + k as isize - radius, h), x);
            }
            out.set(y, x, acc);
        }
    }
    out
}

/// Random rounded blobs covering `round(coverage * H * W)` pixels.
///
/// Seed points are smoothed by a Gaussian and the highest-valued pixels are
/// kept; pixels where the smoothed field vanishes are ranked by distance to
/// the nearest seed point so blobs grow round rather than in raster order.
pub fn blobs(height: usize, width: usize, coverage: f64, seed: u64) -> BinaryMask {
    let n = height * width;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n_pts = ((1.0 / BLOB_SIZE_FRACTION) as usize).pow(2);
    let mut pts = Grid::filled(height, width, 0.0);
    for _ in 0..n_pts {
        let y = ((height as f64 * rng.random::<f64>()) as usize).min(height - 1);
        let x = ((width as f64 * rng.random::<f64>()) as usize).min(width - 1);
        pts.set(y, x, 1.0);
    }
    let sigma = 0.25 * height.max(width) as f64 * BLOB_SIZE_FRACTION;
    let field = gaussian_smooth(&pts, sigma.max(0.5));
    let dist = edt(&pts.map(|v| v == 0.0));
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| {
        field.pixels()[b]
            .total_cmp(&field.pixels()[a])
            .then(dist.pixels()[a].total_cmp(&dist.pixels()[b]))
            .then(a.cmp(&b))
    });
    let keep = ((coverage.clamp(0.0, 1.0) * n as f64).round() as usize).min(n);
    let mut out = vec![false; n];
    for &i in &order[..keep] {
        out[i] = true;
    }
    BinaryMask::from_vec(height, width, out).expect("dims match")
}

/// `mask AND blobs(coverage)`; coverage 1 returns the mask unchanged.
pub fn blob_filter(mask: &BinaryMask, coverage: f64, seed: u64) -> BinaryMask {
    if coverage >= 1.0 {
        return mask.clone();
    }
    let (h, w) = mask.dims();
    let b = blobs(h, w, coverage, seed);
    Grid::from_fn(h, w, |y, x| mask.get(y, x) && b.get(y, x))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn smoothing_preserves_mass() {
        let mut g = Grid::filled(20, 20, 0.0);
        g.set(10, 10, 1.0);
        let s = gaussian_smooth(&g, 1.5);
        assert!((s.pixels().iter().sum::<f64>() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn identity_and_empty() {
        let m = BinaryMask::from_fn(16, 16, |y, x| (y + x) % 3 == 0);
        assert_eq!(blob_filter(&m, 1.0, 4), m);
        let e = BinaryMask::filled(16, 16, false);
        assert_eq!(blob_filter(&e, 0.4, 4), e);
    }

    #[test]
    fn half_coverage_on_full_mask() {
        let m = BinaryMask::filled(128, 128, true);
        for seed in 0..5 {
            let f = blob_filter(&m, 0.5, seed);
            let frac = f.pixels().iter().filter(|&&v| v).count() as f64 / (128.0 * 128.0);
            assert!((0.45..=0.55).contains(&frac), "{frac}");
        }
    }

    #[test]
    fn blobs_are_seeded() {
        assert_eq!(blobs(32, 32, 0.3, 1), blobs(32, 32, 0.3, 1));
        assert_ne!(blobs(32, 32, 0.3, 1), blobs(32, 32, 0.3, 2));
    }
}
