//! Medial-axis skeleton by distance-ordered single-pass thinning.

use std::sync::OnceLock;

use super::morph::{components, edt};
use crate::image::{BinaryMask, Grid};

/// 3x3 neighbourhood bit for offset `(dy, dx)`; the centre is bit 4.
#[inline]
fn bit(dy: isize, dx: isize) -> usize {
    ((dy + 1) * 3 + (dx + 1)) as usize
}

fn pattern(index: usize) -> Grid<bool> {
    Grid::from_fn(3, 3, |y, x| index & (1 << (y * 3 + x)) != 0)
}

/// `keep[index]`: whether a foreground centre survives with this
/// neighbourhood. A centre is removable only if its neighbours form exactly
/// one 8-connected component and the pattern has at least 3 pixels.
fn keep_table() -> &'static [bool; 512] {
    static TABLE: OnceLock<[bool; 512]> = OnceLock::new();
    TABLE.get_or_init(|| {
        let mut t = [false; 512];
        for (index, slot) in t.iter_mut().enumerate() {
            let centre = index & (1 << 4) != 0;
            if !centre {
                continue;
            }
            let without = components(&pattern(index & !(1 << 4)), true, |v| v).1;
            let total = index.count_ones();
            *slot = without != 1 || total < 3;
        }
        t
    })
}

fn neighbourhood(mask: &BinaryMask, y: usize, x: usize) -> usize {
    let (h, w) = mask.dims();
    let mut idx = 0;
    for dy in -1isize..=1 {
        for dx in -1isize..=1 {
            let (ny, nx) = (y as isize + dy, x as isize + dx);
            if ny >= 0 && nx >= 0 && (ny as usize) < h && (nx as usize) < w && mask.get(ny as usize, nx as usize) {
                idx |= 1 << bit(dy, dx);
            }
        }
    }
    idx
}

/// Medial axis of a binary mask.
///
/// Foreground pixels are visited once in increasing order of distance to the
/// background, then of cornerness (background count in the 3x3 window), then
/// raster index; each is removed unless that would disconnect its
/// neighbourhood or shorten a line end.
pub fn medial_axis(mask: &BinaryMask) -> BinaryMask {
    let (h, w) = mask.dims();
    let table = keep_table();
    let dist = edt(mask);
    let mut fg: Vec<(f64, u32, usize)> = Vec::new();
    for y in 0..h {
        for x in 0..w {
            if mask.get(y, x) {
                let corner = 9 - neighbourhood(mask, y, x).count_ones();
                fg.push((dist.get(y, x), corner, y * w + x));
            }
        }
    }
    fg.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)).then(a.2.cmp(&b.2)));
    let mut out = mask.clone();
    for &(_, _, i) in &fg {
        let (y, x) = (i / w, i % w);
        let keep = table[neighbourhood(&out, y, x)];
        out.set(y, x, keep);
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn line_is_its_own_skeleton() {
        let m = BinaryMask::from_fn(9, 15, |y, x| y == 4 && (2..13).contains(&x));
        assert_eq!(medial_axis(&m), m);
        let d = BinaryMask::from_fn(12, 12, |y, x| y == x && y > 1 && y < 10);
        assert_eq!(medial_axis(&d), d);
    }

    #[test]
    fn square_gives_diagonals() {
        let m = BinaryMask::from_fn(25, 25, |y, x| (2..23).contains(&y) && (2..23).contains(&x));
        let want = BinaryMask::from_fn(25, 25, |y, x| {
            let (a, b) = (y as isize - 2, x as isize - 2);
            (0..21).contains(&a) && (0..21).contains(&b) && (a == b || a + b == 20)
        });
        assert_eq!(medial_axis(&m), want);
    }

    #[test]
    fn skeleton_is_subset_and_connected() {
        let m = BinaryMask::from_fn(30, 40, |y, x| {
            ((y as f64 - 15.0) / 10.0).powi(2) + ((x as f64 - 20.0) / 16.0).powi(2) < 1.0
        });
        let s = medial_axis(&m);
        assert!(s.pixels().iter().zip(m.pixels()).all(|(&a, &b)| !a || b));
        assert!(s.pixels().iter().any(|&v| v));
        assert_eq!(components(&s, true, |v| v).1, 1);
    }
}
