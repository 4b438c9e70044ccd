//! Iso-contours of binary masks by marching squares, and their rasterization.

use crate::image::BinaryMask;

/// A contour vertex in `(row, col)` image coordinates.
pub type Point = (f64, f64);

const NONE: usize = usize::MAX;

/// Contours at level 0.5 of a binary mask, as polylines. Closed contours
/// repeat their first vertex at the end. Saddle cells keep diagonal
/// foreground corners apart.
pub fn find_contours(mask: &BinaryMask) -> Vec<Vec<Point>> {
    let (h, w) = mask.dims();
    if h < 2 || w < 2 {
        return Vec::new();
    }
    // Vertex ids: horizontal edges (r, c)-(r, c+1) first, then vertical
    // edges (r, c)-(r+1, c).
    let n_h = h * (w - 1);
    let hid = |r: usize, c: usize| r * (w - 1) + c;
    let vid = |r: usize, c: usize| n_h + r * w + c;
    let n = n_h + (h - 1) * w;
    let coord = |id: usize| -> Point {
        if id < n_h {
            ((id / (w - 1)) as f64, (id % (w - 1)) as f64 + 0.5)
        } else {
            let k = id - n_h;
            ((k / w) as f64 + 0.5, (k % w) as f64)
        }
    };
    let mut adj = vec![[NONE; 2]; n];
    let mut link = |a: usize, b: usize| {
        for (x, y) in [(a, b), (b, a)] {
            let slot = if adj[x][0] == NONE { 0 } else { 1 };
            debug_assert_eq!(adj[x][slot], NONE, "marching squares vertex degree exceeds 2");
            adj[x][slot] = y;
        }
    };
    for r in 0..h - 1 {
        for c in 0..w - 1 {
            let ul = mask.get(r, c);
            let ur = mask.get(r, c + 1);
            let ll = mask.get(r + 1, c);
            let lr = mask.get(r + 1, c + 1);
            let (top, bottom, left, right) = (hid(r, c), hid(r + 1, c), vid(r, c), vid(r, c + 1));
            match (ul, ur, ll, lr) {
                (true, false, false, true) => {
                    link(top, left);
                    link(bottom, right);
                }
                (false, true, true, false) => {
                    link(top, right);
                    link(bottom, left);
                }
                _ => {
                    let mut crossed = Vec::with_capacity(2);
                    if ul != ur {
                        crossed.push(top);
                    }
                    if ll != lr {
                        crossed.push(bottom);
                    }
                    if ul != ll {
                        crossed.push(left);
                    }
                    if ur != lr {
                        crossed.push(right);
                    }
                    if crossed.len() == 2 {
                        link(crossed[0], crossed[1]);
                    }
                }
            }
        }
    }
    let degree = |a: &[usize; 2]| a.iter().filter(|&&v| v != NONE).count();
    let mut seen = vec![false; n];
    let mut out = Vec::new();
    let walk = |start: usize, seen: &mut Vec<bool>| -> Vec<Point> {
        let mut line = vec![coord(start)];
        seen[start] = true;
        let (mut prev, mut cur) = (NONE, start);
        loop {
            let next = adj[cur].iter().copied().find(|&v| v != NONE && v != prev && !seen[v]);
            match next {
                Some(v) => {
                    seen[v] = true;
                    line.push(coord(v));
                    prev = cur;
                    cur = v;
                }
                None => {
                    if degree(&adj[cur]) == 2 && adj[cur].contains(&start) && line.len() > 2 {
                        line.push(coord(start));
                    }
                    return line;
                }
            }
        }
    };
    for id in 0..n {
        if !seen[id] && degree(&adj[id]) == 1 {
            out.push(walk(id, &mut seen));
        }
    }
    for id in 0..n {
        if !seen[id] && degree(&adj[id]) == 2 {
            out.push(walk(id, &mut seen));
        }
    }
    out
}

/// Integer pixels of the segment from `a` to `b` (Bresenham).
pub fn line_pixels(a: (isize, isize), b: (isize, isize)) -> Vec<(isize, isize)> {
    let (mut y, mut x) = a;
    let dy = -(b.0 - y).abs();
    let dx = (b.1 - x).abs();
    let sy = if y < b.0 { 1 } else { -1 };
    let sx = if x < b.1 { 1 } else { -1 };
    let mut err = dx + dy;
    let mut out = Vec::new();
    loop {
        out.push((y, x));
        if (y, x) == b {
            return out;
        }
        let e2 = 2 * err;
        if e2 >= dy {
            err += dy;
            x += sx;
        }
        if e2 <= dx {
            err += dx;
            y += sy;
        }
    }
}

/// Draws a polyline with vertices rounded to the nearest pixel.
pub fn rasterize(line: &[Point], mask: &mut BinaryMask) {
    let (h, w) = mask.dims();
    let round = |p: &Point| -> (isize, isize) {
        ((p.0.round() as isize).clamp(0, h as isize - 1), (p.1.round() as isize).clamp(0, w as isize - 1))
    };
    let mut prev: Option<(isize, isize)> = None;
    for p in line {
        let q = round(p);
        let seg = match prev {
            Some(a) => line_pixels(a, q),
            None => vec![q],
        };
        for (y, x) in seg {
            mask.set(y as usize, x as usize, true);
        }
        prev = Some(q);
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::sparsify::morph::components;

    #[test]
    fn square_gives_one_closed_contour() {
        let m = BinaryMask::from_fn(8, 8, |y, x| (2..6).contains(&y) && (2..6).contains(&x));
        let c = find_contours(&m);
        assert_eq!(c.len(), 1);
        let line = &c[0];
        assert_eq!(line.first(), line.last());
        // 4x4 block: 16 boundary edge crossings.
        assert_eq!(line.len(), 17);
    }

    #[test]
    fn saddle_separates_diagonal_pixels() {
        let m = BinaryMask::from_vec(4, 4, vec![false, false, false, false, false, true, false, false, false, false, true, false, false, false, false, false]).unwrap();
        assert_eq!(find_contours(&m).len(), 2);
    }

    #[test]
    fn border_touching_region_is_open() {
        let m = BinaryMask::from_fn(6, 6, |_, x| x < 3);
        let c = find_contours(&m);
        assert_eq!(c.len(), 1);
        assert_ne!(c[0].first(), c[0].last());
    }

    #[test]
    fn bresenham_endpoints_and_connectivity() {
        let p = line_pixels((0, 0), (3, 7));
        assert_eq!(p.first(), Some(&(0, 0)));
        assert_eq!(p.last(), Some(&(3, 7)));
        for w in p.windows(2) {
            assert!((w[0].0 - w[1].0).abs() <= 1 && (w[0].1 - w[1].1).abs() <= 1);
        }
    }

    #[test]
    fn rasterized_ring_is_connected() {
        let m = BinaryMask::from_fn(20, 20, |y, x| (y as f64 - 9.5).powi(2) + (x as f64 - 9.5).powi(2) < 36.0);
        let c = find_contours(&m);
        let mut r = BinaryMask::filled(20, 20, false);
        rasterize(&c[0], &mut r);
        assert_eq!(components(&r, true, |v| v).1, 1);
    }
}
