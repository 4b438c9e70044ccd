//! Binary morphology, connected components and distance transforms.

use crate::image::{BinaryMask, Grid};

/// Offsets of a disk structuring element, `dy^2 + dx^2 <= r^2`.
pub fn disk(radius: usize) -> Vec<(isize, isize)> {
    let r = radius as isize;
    let mut out = Vec::new();
    for dy in -r..=r {
        for dx in -r..=r {
            if dy * dy + dx * dx <= r * r {
                out.push((dy, dx));
            }
        }
    }
    out
}

pub fn dilate(mask: &BinaryMask, radius: usize) -> BinaryMask {
    if radius == 0 {
        return mask.clone();
    }
    let (h, w) = mask.dims();
    let se = disk(radius);
    let mut out = BinaryMask::filled(h, w, false);
    for y in 0..h {
        for x in 0..w {
            if !mask.get(y, x) {
                continue;
            }
            for &(dy, dx) in &se {
                let (ny, nx) = (y as isize + dy, x as isize + dx);
                if ny >= 0 && nx >= 0 && (ny as usize) < h && (nx as usize) < w {
                    out.set(ny as usize, nx as usize, true);
                }
            }
        }
    }
    out
}

/// Erosion where pixels outside the image count as foreground.
pub fn erode(mask: &BinaryMask, radius: usize) -> BinaryMask {
    if radius == 0 {
        return mask.clone();
    }
    let (h, w) = mask.dims();
    let se = disk(radius);
    Grid::from_fn(h, w, |y, x| {
        se.iter().all(|&(dy, dx)| {
            let (ny, nx) = (y as isize + dy, x as isize + dx);
            ny < 0 || nx < 0 || ny as usize >= h || nx as usize >= w || mask.get(ny as usize, nx as usize)
        })
    })
}

/// Labels connected components of pixels sharing the same value; `eight`
/// selects 8-connectivity. Returns labels (raster order of first pixel) and
/// the component count.
pub fn components<T: Copy + PartialEq>(grid: &Grid<T>, eight: bool, include: impl Fn(T) -> bool) -> (Grid<usize>, usize) {
    let (h, w) = grid.dims();
    const NONE: usize = usize::MAX;
    let mut labels = Grid::filled(h, w, NONE);
    let mut n = 0;
    let mut stack = Vec::new();
    let nbrs: &[(isize, isize)] = if eight {
        &[(-1, -1), (-1, 0), (-1, 1), (0, -1), (0, 1), (1, -1), (1, 0), (1, 1)]
    } else {
        &[(-1, 0), (0, -1), (0, 1), (1, 0)]
    };
    for y in 0..h {
        for x in 0..w {
            let v = grid.get(y, x);
            if labels.get(y, x) != NONE || !include(v) {
                continue;
            }
            labels.set(y, x, n);
            stack.push((y, x));
            while let Some((cy, cx)) = stack.pop() {
                for &(dy, dx) in nbrs {
                    let (ny, nx) = (cy as isize + dy, cx as isize + dx);
                    if ny < 0 || nx < 0 || ny as usize >= h || nx as usize >= w {
                        continue;
                    }
                    let (ny, nx) = (ny as usize, nx as usize);
                    if labels.get(ny, nx) == NONE && grid.get(ny, nx) == v {
                        labels.set(ny, nx, n);
                        stack.push((ny, nx));
                    }
                }
            }
            n += 1;
        }
    }
    (labels, n)
}

/// Squared distance standing in for "no background pixel".
const FAR: f64 = 1e20;

/// 1-D squared distance transform of a sampled function (lower envelope of
/// parabolas).
fn edt_1d(f: &[f64], d: &mut [f64], v: &mut [usize], z: &mut [f64]) {
    let mut k = 0usize;
    v[0] = 0;
    z[0] = f64::NEG_INFINITY;
    z[1] = f64::INFINITY;
    for q in 1..f.len() {
        let fq = f[q] + (q * q) as f64;
        let mut s;
        loop {
            let p = v[k];
            s = (fq - (f[p] + (p * p) as f64)) / (2.0 * (q - p) as f64);
            if s > z[k] {
                break;
            }
            k -= 1;
        }
        k += 1;
        v[k] = q;
        z[k] = s;
        z[k + 1] = f64::INFINITY;
    }
    k = 0;
    for (q, dq) in d.iter_mut().enumerate() {
        while z[k + 1] < q as f64 {
            k += 1;
        }
        let p = v[k];
        let diff = q as f64 - p as f64;
        *dq = diff * diff + f[p];
    }
}

/// Exact Euclidean distance from each foreground pixel to the nearest
/// background pixel; background pixels are 0. Without any background pixel
/// every distance is infinite.
pub fn edt(mask: &BinaryMask) -> Grid<f64> {
    let (h, w) = mask.dims();
    let n = h.max(w);
    let (mut v, mut z) = (vec![0usize; n], vec![0.0; n + 1]);
    let mut f = vec![0.0; n];
    let mut d = vec![0.0; n];
    let mut g = Grid::from_fn(h, w, |y, x| if mask.get(y, x) { FAR } else { 0.0 });
    for x in 0..w {
        for y in 0..h {
            f[y] = g.get(y, x);
        }
        edt_1d(&f[..h], &mut d[..h], &mut v, &mut z);
        for y in 0..h {
            g.set(y, x, d[y]);
        }
    }
    for y in 0..h {
        for x in 0..w {
            f[x] = g.get(y, x);
        }
        edt_1d(&f[..w], &mut d[..w], &mut v, &mut z);
        for x in 0..w {
            g.set(y, x, if d[x] >= FAR / 2.0 { f64::INFINITY } else { d[x].sqrt() });
        }
    }
    g
}
