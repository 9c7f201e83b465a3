//! Image-like multi-channel maps with a validity mask, bilinear sampling and
//! Gaussian pyramids.

use crate::error::{Error, Result};

/// `C x H x W` real-valued map plus an `H x W` validity mask.
#[derive(Clone, Debug, PartialEq)]
pub struct DenseMap {
    channels: usize,
    height: usize,
    width: usize,
    data: Vec<f64>,
    mask: Vec<bool>,
}

/// Integer cell and fractional offsets of a bilinear sample.
#[derive(Clone, Copy, Debug)]
pub struct BilinearCell {
    pub index: usize,
    pub ax: f64,
    pub ay: f64,
}

impl DenseMap {
    pub fn new(channels: usize, height: usize, width: usize, data: Vec<f64>, mask: Vec<bool>) -> Result<Self> {
        if data.len() != channels * height * width {
            return Err(Error::DimensionMismatch {
                expected: channels * height * width,
                actual: data.len(),
            });
        }
        if mask.len() != height * width {
            return Err(Error::DimensionMismatch {
                expected: height * width,
                actual: mask.len(),
            });
        }
        Ok(Self {
            channels,
            height,
            width,
            data,
            mask,
        })
    }

    pub fn filled(channels: usize, height: usize, width: usize, value: f64) -> Self {
        Self {
            channels,
            height,
            width,
            data: vec![value; channels * height * width],
            mask: vec![true; height * width],
        }
    }

    /// Builds a map from `f(channel, y, x)`.
    pub fn from_fn(
        channels: usize,
        height: usize,
        width: usize,
        mut f: impl FnMut(usize, usize, usize) -> f64,
    ) -> Self {
        let mut data = Vec::with_capacity(channels * height * width);
        for c in 0..channels {
            for y in 0..height {
                for x in 0..width {
                    data.push(f(c, y, x));
                }
            }
        }
        Self {
            channels,
            height,
            width,
            data,
            mask: vec![true; height * width],
        }
    }

    pub fn with_mask(mut self, mask: Vec<bool>) -> Result<Self> {
        if mask.len() != self.height * self.width {
            return Err(Error::DimensionMismatch {
                expected: self.height * self.width,
                actual: mask.len(),
            });
        }
        self.mask = mask;
        Ok(self)
    }

    pub fn channels(&self) -> usize {
        self.channels
    }
    pub fn height(&self) -> usize {
        self.height
    }
    pub fn width(&self) -> usize {
        self.width
    }
    pub fn plane_len(&self) -> usize {
        self.height * self.width
    }
    pub fn data(&self) -> &[f64] {
        &self.data
    }
    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }
    pub fn mask(&self) -> &[bool] {
        &self.mask
    }
    pub fn mask_mut(&mut self) -> &mut [bool] {
        &mut self.mask
    }

    pub fn channel(&self, c: usize) -> &[f64] {
        let n = self.plane_len();
        &self.data[c * n..(c + 1) * n]
    }

    #[inline]
    pub fn get(&self, c: usize, y: usize, x: usize) -> f64 {
        self.data[c * self.plane_len() + y * self.width + x]
    }

    #[inline]
    pub fn at_index(&self, c: usize, index: usize) -> f64 {
        self.data[c * self.plane_len() + index]
    }

    pub fn set(&mut self, c: usize, y: usize, x: usize, v: f64) {
        let n = self.plane_len();
        self.data[c * n + y * self.width + x] = v;
    }

    #[inline]
    pub fn is_valid(&self, y: usize, x: usize) -> bool {
        self.mask[y * self.width + x]
    }

    pub fn valid_count(&self) -> usize {
        self.mask.iter().filter(|&&m| m).count()
    }

    /// Locates the bilinear cell for `(u, v)`; `None` unless all four neighbours
    /// are inside the image and valid.
    #[inline]
    pub fn cell(&self, u: f64, v: f64) -> Option<BilinearCell> {
        mask_cell(&self.mask, self.height, self.width, u, v)
    }

    #[inline]
    pub fn sample_channel(&self, c: usize, cell: &BilinearCell) -> f64 {
        let base = c * self.plane_len() + cell.index;
        let w = self.width;
        let (f00, f10, f01, f11) = (
            self.data[base],
            self.data[base + 1],
            self.data[base + w],
            self.data[base + w + 1],
        );
        let (a, b) = (cell.ax, cell.ay);
        (1.0 - b) * ((1.0 - a) * f00 + a * f10) + b * ((1.0 - a) * f01 + a * f11)
    }

    /// Value and spatial derivatives `(f, df/du, df/dv)` of one channel.
    #[inline]
    pub fn sample_channel_grad(&self, c: usize, cell: &BilinearCell) -> (f64, f64, f64) {
        let base = c * self.plane_len() + cell.index;
        let w = self.width;
        let (f00, f10, f01, f11) = (
            self.data[base],
            self.data[base + 1],
            self.data[base + w],
            self.data[base + w + 1],
        );
        let (a, b) = (cell.ax, cell.ay);
        let value = (1.0 - b) * ((1.0 - a) * f00 + a * f10) + b * ((1.0 - a) * f01 + a * f11);
        let du = (1.0 - b) * (f10 - f00) + b * (f11 - f01);
        let dv = (1.0 - a) * (f01 - f00) + a * (f11 - f10);
        (value, du, dv)
    }

    /// Samples every channel at `(u, v)` into `out`.
    pub fn sample(&self, u: f64, v: f64, out: &mut [f64]) -> bool {
        match self.cell(u, v) {
            Some(cell) => {
                for (c, o) in out.iter_mut().enumerate().take(self.channels) {
                    *o = self.sample_channel(c, &cell);
                }
                true
            }
            None => false,
        }
    }
}

/// Bilinear cell lookup against a bare `height x width` mask.
#[inline]
pub fn mask_cell(mask: &[bool], height: usize, width: usize, u: f64, v: f64) -> Option<BilinearCell> {
    let x0 = last_cell_start(u, width)?;
    let y0 = last_cell_start(v, height)?;
    let i = y0 * width + x0;
    if !(mask[i] && mask[i + 1] && mask[i + width] && mask[i + width + 1]) {
        return None;
    }
    Some(BilinearCell {
        index: i,
        ax: u - x0 as f64,
        ay: v - y0 as f64,
    })
}

// Coordinates within rounding distance of the first or last row/column are
// snapped onto the nearest full cell so integer samples reach the whole image.
const EDGE_TOL: f64 = 1e-9;

#[inline]
fn last_cell_start(t: f64, size: usize) -> Option<usize> {
    if size < 2 || !(t >= -EDGE_TOL) {
        return None;
    }
    let t0 = t.floor();
    if t0 < 0.0 {
        Some(0)
    } else if t0 + 1.0 < size as f64 {
        Some(t0 as usize)
    } else if t <= (size - 1) as f64 + EDGE_TOL {
        Some(size - 2)
    } else {
        None
    }
}

/// Square Gaussian smoothing kernel.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct GaussianKernel {
    pub size: usize,
    pub sigma: f64,
}

impl Default for GaussianKernel {
    fn default() -> Self {
        Self { size: 5, sigma: 1.0 }
    }
}

impl GaussianKernel {
    fn weights(&self) -> Vec<f64> {
        let r = (self.size / 2) as isize;
        (-r..=r)
            .map(|d| (-((d * d) as f64) / (2.0 * self.sigma * self.sigma)).exp())
            .collect()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct FeaturePyramid {
    levels: Vec<DenseMap>,
}

impl FeaturePyramid {
    pub fn levels(&self) -> &[DenseMap] {
        &self.levels
    }
    pub fn level(&self, i: usize) -> &DenseMap {
        &self.levels[i]
    }
    pub fn level_count(&self) -> usize {
        self.levels.len()
    }
}

/// Gaussian pyramid with `levels` levels; level 0 is `map` itself.
///
/// A coarse pixel `j` is the smoothed value of fine pixel `2j`. It is valid only
/// when every kernel tap lies inside the fine image and on a valid fine pixel.
pub fn build_pyramid(map: &DenseMap, levels: usize, kernel: GaussianKernel) -> Result<FeaturePyramid> {
    if levels == 0 {
        return Err(Error::Config("pyramid needs at least one level".into()));
    }
    if kernel.size.is_multiple_of(2) || kernel.sigma <= 0.0 {
        return Err(Error::Config("kernel size must be odd and sigma positive".into()));
    }
    let div = 1usize << (levels - 1);
    if !map.height.is_multiple_of(div) || !map.width.is_multiple_of(div) {
        return Err(Error::Config(format!(
            "map size {}x{} not divisible by {div} for {levels} levels",
            map.height, map.width
        )));
    }
    let mut out = vec![map.clone()];
    for _ in 1..levels {
        let next = downsample(out.last().unwrap(), &kernel);
        out.push(next);
    }
    Ok(FeaturePyramid { levels: out })
}

fn downsample(fine: &DenseMap, kernel: &GaussianKernel) -> DenseMap {
    let w1d = kernel.weights();
    let r = (kernel.size / 2) as isize;
    let (h, w) = (fine.height / 2, fine.width / 2);
    let (fh, fw) = (fine.height as isize, fine.width as isize);
    let mut data = vec![0.0; fine.channels * h * w];
    let mut mask = vec![false; h * w];
    let plane = h * w;
    for y in 0..h {
        for x in 0..w {
            let (cy, cx) = (2 * y as isize, 2 * x as isize);
            let mut all_valid = true;
            let mut wsum = 0.0;
            for dy in -r..=r {
                for dx in -r..=r {
                    let (yy, xx) = (cy + dy, cx + dx);
                    if yy < 0 || xx < 0 || yy >= fh || xx >= fw {
                        all_valid = false;
                        continue;
                    }
                    if !fine.is_valid(yy as usize, xx as usize) {
                        all_valid = false;
                    }
                    wsum += w1d[(dy + r) as usize] * w1d[(dx + r) as usize];
                }
            }
            mask[y * w + x] = all_valid;
            for c in 0..fine.channels {
                let mut acc = 0.0;
                for dy in -r..=r {
                    for dx in -r..=r {
                        let (yy, xx) = (cy + dy, cx + dx);
                        if yy < 0 || xx < 0 || yy >= fh || xx >= fw {
                            continue;
                        }
                        acc += w1d[(dy + r) as usize] * w1d[(dx + r) as usize] * fine.get(c, yy as usize, xx as usize);
                    }
                }
                data[c * plane + y * w + x] = acc / wsum;
            }
        }
    }
    DenseMap {
        channels: fine.channels,
        height: h,
        width: w,
        data,
        mask,
    }
}

/// Keeps every `2^level`-th pixel of a map without smoothing.
pub fn subsample(map: &DenseMap, level: usize) -> DenseMap {
    let step = 1usize << level;
    let (h, w) = (map.height / step, map.width / step);
    let mut data = Vec::with_capacity(map.channels * h * w);
    for c in 0..map.channels {
        for y in 0..h {
            for x in 0..w {
                data.push(map.get(c, y * step, x * step));
            }
        }
    }
    let mut mask = Vec::with_capacity(h * w);
    for y in 0..h {
        for x in 0..w {
            mask.push(map.is_valid(y * step, x * step));
        }
    }
    DenseMap {
        channels: map.channels,
        height: h,
        width: w,
        data,
        mask,
    }
}

/// Circular validity mask inscribed in an `h x w` image, mimicking an endoscope.
pub fn circular_mask(height: usize, width: usize, radius_frac: f64) -> Vec<bool> {
    let cy = (height as f64 - 1.0) / 2.0;
    let cx = (width as f64 - 1.0) / 2.0;
    let r = radius_frac * (height.min(width) as f64) / 2.0;
    let mut mask = Vec::with_capacity(height * width);
    for y in 0..height {
        for x in 0..width {
            let (dy, dx) = (y as f64 - cy, x as f64 - cx);
            mask.push(dx * dx + dy * dy <= r * r);
        }
    }
    mask
}
