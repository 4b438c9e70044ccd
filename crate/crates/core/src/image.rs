//! Image containers shared by every module.

use serde::{Deserialize, Serialize};

use crate::error::{FwsError, Result};

/// Encoded value of an unannotated pixel.
pub const UNANNOTATED: u8 = 255;

/// Number of dense classes: background, disc rim, cup.
pub const NUM_CLASSES: usize = 3;

pub const BACKGROUND: u8 = 0;
pub const RIM: u8 = 1;
pub const CUP: u8 = 2;

/// Row-major `H x W` grid.
#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Grid<T> {
    height: usize,
    width: usize,
    pixels: Vec<T>,
}

impl<T: Copy> Grid<T> {
    pub fn filled(height: usize, width: usize, v: T) -> Self {
        Self { height, width, pixels: vec![v; height * width] }
    }

    pub fn from_vec(height: usize, width: usize, pixels: Vec<T>) -> Result<Self> {
        if pixels.len() != height * width {
            return Err(FwsError::Shape(format!("{} pixels for {height}x{width}", pixels.len())));
        }
        Ok(Self { height, width, pixels })
    }

    pub fn from_fn(height: usize, width: usize, f: impl Fn(usize, usize) -> T) -> Self {
        let mut pixels = Vec::with_capacity(height * width);
        for y in 0..height {
            for x in 0..width {
                pixels.push(f(y, x));
            }
        }
        Self { height, width, pixels }
    }

    #[inline]
    pub fn height(&self) -> usize {
        self.height
    }

    #[inline]
    pub fn width(&self) -> usize {
        self.width
    }

    #[inline]
    pub fn dims(&self) -> (usize, usize) {
        (self.height, self.width)
    }

    #[inline]
    pub fn get(&self, y: usize, x: usize) -> T {
        self.pixels[y * self.width + x]
    }

    #[inline]
    pub fn set(&mut self, y: usize, x: usize, v: T) {
        self.pixels[y * self.width + x] = v;
    }

    #[inline]
    pub fn pixels(&self) -> &[T] {
        &self.pixels
    }

    #[inline]
    pub fn pixels_mut(&mut self) -> &mut [T] {
        &mut self.pixels
    }

    pub fn into_pixels(self) -> Vec<T> {
        self.pixels
    }

    pub fn map<U: Copy>(&self, f: impl Fn(T) -> U) -> Grid<U> {
        Grid { height: self.height, width: self.width, pixels: self.pixels.iter().map(|&v| f(v)).collect() }
    }

    /// Nearest-neighbour resampling.
    pub fn resize_nearest(&self, height: usize, width: usize) -> Self {
        Self::from_fn(height, width, |y, x| {
            let sy = (y * self.height) / height;
            let sx = (x * self.width) / width;
            self.get(sy, sx)
        })
    }

    /// Copies the rectangle `[y0, y0+h) x [x0, x0+w)`.
    pub fn crop(&self, y0: usize, x0: usize, h: usize, w: usize) -> Self {
        Self::from_fn(h, w, |y, x| self.get(y0 + y, x0 + x))
    }
}

/// Binary mask.
pub type BinaryMask = Grid<bool>;

/// Dense label map with values in `{0, 1, 2}`.
pub type LabelImage = Grid<u8>;

/// Sparse label map with values in `{0, 1, 2, UNANNOTATED}`.
pub type SparseLabelImage = Grid<u8>;

impl Grid<u8> {
    /// Validates a dense label map.
    pub fn dense(height: usize, width: usize, pixels: Vec<u8>) -> Result<Self> {
        if let Some(v) = pixels.iter().find(|&&v| v as usize >= NUM_CLASSES) {
            return Err(FwsError::range("label value", format!("{v} not in 0..{NUM_CLASSES}")));
        }
        Self::from_vec(height, width, pixels)
    }

    /// All-unannotated sparse map.
    pub fn unannotated(height: usize, width: usize) -> Self {
        Self::filled(height, width, UNANNOTATED)
    }

    pub fn annotated_count(&self) -> usize {
        self.pixels.iter().filter(|&&v| v != UNANNOTATED).count()
    }

    /// Mask of pixels equal to `class`.
    pub fn class_mask(&self, class: u8) -> BinaryMask {
        self.map(|v| v == class)
    }
}

/// `H x W x L` image with values in `[0, 1]`, stored channel-last.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FundusImage {
    height: usize,
    width: usize,
    channels: usize,
    pixels: Vec<f32>,
}

impl FundusImage {
    pub fn new(height: usize, width: usize, channels: usize, pixels: Vec<f32>) -> Result<Self> {
        if channels == 0 || pixels.len() != height * width * channels {
            return Err(FwsError::Shape(format!(
                "{} values for {height}x{width}x{channels}",
                pixels.len()
            )));
        }
        if !pixels.iter().all(|v| v.is_finite()) {
            return Err(FwsError::NonFinite("image pixel".into()));
        }
        Ok(Self { height, width, channels, pixels })
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn pixels(&self) -> &[f32] {
        &self.pixels
    }

    #[inline]
    pub fn get(&self, y: usize, x: usize, c: usize) -> f32 {
        self.pixels[(y * self.width + x) * self.channels + c]
    }

    /// Channel-first copy, the layout the network consumes.
    pub fn to_chw(&self) -> Vec<f32> {
        let hw = self.height * self.width;
        let mut out = vec![0.0; hw * self.channels];
        for (i, px) in self.pixels.chunks_exact(self.channels).enumerate() {
            for (c, &v) in px.iter().enumerate() {
                out[c * hw + i] = v;
            }
        }
        out
    }

    pub fn crop(&self, y0: usize, x0: usize, h: usize, w: usize) -> Self {
        let l = self.channels;
        let mut pixels = Vec::with_capacity(h * w * l);
        for y in y0..y0 + h {
            let row = (y * self.width + x0) * l;
            pixels.extend_from_slice(&self.pixels[row..row + w * l]);
        }
        Self { height: h, width: w, channels: l, pixels }
    }

    /// Bilinear resampling with half-pixel centres.
    pub fn resize_bilinear(&self, height: usize, width: usize) -> Self {
        let l = self.channels;
        let mut pixels = vec![0.0; height * width * l];
        let sy = self.height as f32 / height as f32;
        let sx = self.width as f32 / width as f32;
        for y in 0..height {
            let fy = ((y as f32 + 0.5) * sy - 0.5).clamp(0.0, (self.height - 1) as f32);
            let y0 = fy.floor() as usize;
            let y1 = (y0 + 1).min(self.height - 1);
            let ty = fy - y0 as f32;
            for x in 0..width {
                let fx = ((x as f32 + 0.5) * sx - 0.5).clamp(0.0, (self.width - 1) as f32);
                let x0 = fx.floor() as usize;
                let x1 = (x0 + 1).min(self.width - 1);
                let tx = fx - x0 as f32;
                for c in 0..l {
                    let a = self.get(y0, x0, c) * (1.0 - tx) + self.get(y0, x1, c) * tx;
                    let b = self.get(y1, x0, c) * (1.0 - tx) + self.get(y1, x1, c) * tx;
                    pixels[(y * width + x) * l + c] = a * (1.0 - ty) + b * ty;
                }
            }
        }
        Self { height, width, channels: l, pixels }
    }
}
