//! SLIC superpixels over a one-hot encoded label map.

use super::morph::components;
use crate::image::{Grid, LabelImage};

const ITERATIONS: usize = 10;

/// Superpixel labels `0..n` and their count.
///
/// `step` is the seed spacing; `compactness` weighs spatial against label
/// distance. Components smaller than a quarter of a seed cell are merged
/// into a neighbour, so every returned region is 4-connected.
pub fn slic(y: &LabelImage, classes: usize, step: f64, compactness: f64) -> (Grid<usize>, usize) {
    let (h, w) = y.dims();
    let step = step.max(1.0);
    let onehot = |v: u8| -> Vec<f64> { (0..classes).map(|c| if c == v as usize { 1.0 } else { 0.0 }).collect() };
    // Centres: (row, col, colour...).
    let mut centres: Vec<(f64, f64, Vec<f64>)> = Vec::new();
    let mut cy = step / 2.0;
    while cy < h as f64 {
        let mut cx = step / 2.0;
        while cx < w as f64 {
            let v = y.get(cy as usize, cx as usize);
            centres.push((cy, cx, onehot(v)));
            cx += step;
        }
        cy += step;
    }
    if centres.is_empty() {
        centres.push(((h / 2) as f64, (w / 2) as f64, onehot(y.get(h / 2, w / 2))));
    }
    let spatial = (compactness / step).powi(2);
    let mut assign = Grid::filled(h, w, 0usize);
    let mut best = Grid::filled(h, w, f64::INFINITY);
    let win = (2.0 * step).ceil() as isize;
    for _ in 0..ITERATIONS {
        best.pixels_mut().iter_mut().for_each(|v| *v = f64::INFINITY);
        for (k, (cy, cx, col)) in centres.iter().enumerate() {
            let (y0, y1) = ((*cy as isize - win).max(0), (*cy as isize + win).min(h as isize - 1));
            let (x0, x1) = ((*cx as isize - win).max(0), (*cx as isize + win).min(w as isize - 1));
            for py in y0..=y1 {
                for px in x0..=x1 {
                    let (py, px) = (py as usize, px as usize);
                    let v = y.get(py, px) as usize;
                    let dc: f64 = col
                        .iter()
                        .enumerate()
                        .map(|(c, &m)| {
                            let t = if c == v { 1.0 } else { 0.0 } - m;
                            t * t
                        })
                        .sum();
                    let ds = (py as f64 - cy).powi(2) + (px as f64 - cx).powi(2);
                    let d = dc + ds * spatial;
                    if d < best.get(py, px) {
                        best.set(py, px, d);
                        assign.set(py, px, k);
                    }
                }
            }
        }
        let mut acc = vec![(0.0, 0.0, vec![0.0; classes], 0usize); centres.len()];
        for py in 0..h {
            for px in 0..w {
                let a = &mut acc[assign.get(py, px)];
                a.0 += py as f64;
                a.1 += px as f64;
                a.2[y.get(py, px) as usize] += 1.0;
                a.3 += 1;
            }
        }
        for (c, a) in centres.iter_mut().zip(acc) {
            if a.3 > 0 {
                let n = a.3 as f64;
                *c = (a.0 / n, a.1 / n, a.2.into_iter().map(|v| v / n).collect());
            }
        }
    }
    enforce_connectivity(&assign, ((step * step) / 4.0).max(1.0) as usize)
}

/// Splits labels into 4-connected components and merges those smaller than
/// `min_size` into the previously visited adjacent component.
fn enforce_connectivity(assign: &Grid<usize>, min_size: usize) -> (Grid<usize>, usize) {
    let (h, w) = assign.dims();
    let (comp, n) = components(assign, false, |_| true);
    let mut size = vec![0usize; n];
    for &c in comp.pixels() {
        size[c] += 1;
    }
    // Resolve merges in raster order of each component's first pixel, which
    // is the component id order.
    let mut target: Vec<usize> = (0..n).collect();
    let mut first = vec![usize::MAX; n];
    for (i, &c) in comp.pixels().iter().enumerate() {
        if first[c] == usize::MAX {
            first[c] = i;
        }
    }
    let mut merged_size = size.clone();
    for c in 0..n {
        if size[c] >= min_size {
            continue;
        }
        let (fy, fx) = (first[c] / w, first[c] % w);
        // Neighbour of the first pixel from an earlier component: above or left.
        let mut nb = None;
        if fx > 0 && comp.get(fy, fx - 1) != c {
            nb = Some(comp.get(fy, fx - 1));
        } else if fy > 0 && comp.get(fy - 1, fx) != c {
            nb = Some(comp.get(fy - 1, fx));
        }
        if nb.is_none() {
            // First pixel at the top-left: look at any 4-neighbour of the component.
            'search: for (i, &cc) in comp.pixels().iter().enumerate() {
                if cc != c {
                    continue;
                }
                let (py, px) = (i / w, i % w);
                for (dy, dx) in [(0isize, 1isize), (1, 0), (0, -1), (-1, 0)] {
                    let (ny, nx) = (py as isize + dy, px as isize + dx);
                    if ny >= 0 && nx >= 0 && (ny as usize) < h && (nx as usize) < w {
                        let o = comp.get(ny as usize, nx as usize);
                        if o != c {
                            nb = Some(o);
                            break 'search;
                        }
                    }
                }
            }
        }
        if let Some(mut t) = nb {
            while target[t] != t {
                t = target[t];
            }
            target[c] = t;
            merged_size[t] += merged_size[c];
        }
    }
    let root = |mut c: usize| {
        while target[c] != c {
            c = target[c];
        }
        c
    };
    let mut remap = vec![usize::MAX; n];
    let mut next = 0;
    let mut out = Grid::filled(h, w, 0usize);
    for (i, &c) in comp.pixels().iter().enumerate() {
        let r = root(c);
        if remap[r] == usize::MAX {
            remap[r] = next;
            next += 1;
        }
        out.pixels_mut()[i] = remap[r];
    }
    (out, next)
}
