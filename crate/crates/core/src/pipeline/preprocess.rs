//! Cube preprocessing: dark subtraction, sensor-response correction,
//! foreground detection and region averaging.

use std::collections::VecDeque;

use super::cube::DataCube;
use crate::error::{Error, Result};
use crate::spectral::{Domain, LabeledSample, Role, Spectrum};

/// Bands whose response is at or below this are zeroed instead of divided.
pub const RESPONSE_FLOOR: f64 = 1e-3;

/// `max(cube - dark, 0)` elementwise.
pub fn dark_subtract(cube: &DataCube, dark: &DataCube) -> Result<DataCube> {
    cube.same_shape(dark)?;
    let mut out = cube.clone();
    for (o, d) in out.values_mut().iter_mut().zip(dark.values()) {
        *o = (*o - *d).max(0.0);
    }
    Ok(out)
}

/// Divides each band plane by the sensor response at that band. Bands with a
/// response at or below [`RESPONSE_FLOOR`] are set to zero and reported.
pub fn sensor_correct(cube: &DataCube, response: &Spectrum) -> Result<(DataCube, Vec<usize>)> {
    if !response.grid().same_as(cube.grid()) {
        return Err(Error::dim("sensor response grid", cube.bands(), response.len()));
    }
    let mut out = cube.clone();
    let p = cube.pixels();
    let mut masked = Vec::new();
    for (b, &r) in response.values().iter().enumerate() {
        let plane = &mut out.values_mut()[b * p..(b + 1) * p];
        if r <= RESPONSE_FLOOR {
            plane.iter_mut().for_each(|v| *v = 0.0);
            masked.push(b);
        } else {
            plane.iter_mut().for_each(|v| *v = (*v as f64 / r) as f32);
        }
    }
    if !masked.is_empty() {
        log::warn!("sensor response ≤ {RESPONSE_FLOOR} at {} band(s); those bands were zeroed", masked.len());
    }
    Ok((out, masked))
}

/// Binary image, row-major.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Mask {
    pub width: usize,
    pub height: usize,
    pub data: Vec<bool>,
}

impl Mask {
    pub fn new(width: usize, height: usize, data: Vec<bool>) -> Result<Self> {
        if data.len() != width * height {
            return Err(Error::dim("Mask::new", width * height, data.len()));
        }
        Ok(Self { width, height, data })
    }

    pub fn full(width: usize, height: usize) -> Self {
        Self { width, height, data: vec![true; width * height] }
    }

    pub fn get(&self, x: usize, y: usize) -> bool {
        self.data[y * self.width + x]
    }

    pub fn count(&self) -> usize {
        self.data.iter().filter(|&&b| b).count()
    }

    pub fn is_empty(&self) -> bool {
        self.count() == 0
    }

    /// `(x0, y0, x1, y1)` inclusive, or `None` for an empty mask.
    pub fn bounding_box(&self) -> Option<(usize, usize, usize, usize)> {
        let mut bb: Option<(usize, usize, usize, usize)> = None;
        for y in 0..self.height {
            for x in 0..self.width {
                if self.get(x, y) {
                    bb = Some(match bb {
                        None => (x, y, x, y),
                        Some((a, b, c, d)) => (a.min(x), b.min(y), c.max(x), d.max(y)),
                    });
                }
            }
        }
        bb
    }
}

/// Otsu threshold over a 256-bin histogram spanning `[min, max]`. Returns
/// `None` when the values are constant.
pub fn otsu_threshold(values: &[f64]) -> Option<f64> {
    let lo = values.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if !(hi > lo) {
        return None;
    }
    const BINS: usize = 256;
    let width = (hi - lo) / BINS as f64;
    let mut hist = [0usize; BINS];
    for &v in values {
        let b = (((v - lo) / width) as usize).min(BINS - 1);
        hist[b] += 1;
    }
    let total = values.len() as f64;
    let sum_all: f64 = hist.iter().enumerate().map(|(i, &c)| i as f64 * c as f64).sum();
    let (mut w0, mut sum0) = (0.0, 0.0);
    let (mut best, mut best_var) = (0, -1.0);
    for (i, &c) in hist.iter().enumerate() {
        w0 += c as f64;
        sum0 += i as f64 * c as f64;
        let w1 = total - w0;
        if w0 == 0.0 || w1 == 0.0 {
            continue;
        }
        let m0 = sum0 / w0;
        let m1 = (sum_all - sum0) / w1;
        let var = w0 * w1 * (m0 - m1) * (m0 - m1);
        if var > best_var {
            best_var = var;
            best = i;
        }
    }
    // everything strictly above the upper edge of the best bin is foreground
    Some(lo + (best + 1) as f64 * width)
}

fn morph(mask: &Mask, keep: bool) -> Mask {
    let (w, h) = (mask.width, mask.height);
    let mut out = vec![!keep; w * h];
    for y in 0..h {
        for x in 0..w {
            let mut all = true;
            let mut any = false;
            for yy in y.saturating_sub(1)..=(y + 1).min(h - 1) {
                for xx in x.saturating_sub(1)..=(x + 1).min(w - 1) {
                    let v = mask.get(xx, yy);
                    all &= v;
                    any |= v;
                }
            }
            out[y * w + x] = if keep { all } else { any };
        }
    }
    Mask { width: w, height: h, data: out }
}

/// 3×3 erosion then dilation; pixels outside the image are ignored.
pub fn open3(mask: &Mask) -> Mask {
    if mask.width == 0 || mask.height == 0 {
        return mask.clone();
    }
    morph(&morph(mask, true), false)
}

/// Largest 8-connected component; ties go to the component found first in
/// row-major order.
pub fn largest_component(mask: &Mask) -> Mask {
    let (w, h) = (mask.width, mask.height);
    let mut label = vec![0usize; w * h];
    let mut best = (0usize, 0usize);
    let mut next = 0;
    let mut queue = VecDeque::new();
    for start in 0..w * h {
        if !mask.data[start] || label[start] != 0 {
            continue;
        }
        next += 1;
        label[start] = next;
        queue.push_back(start);
        let mut size = 0;
        while let Some(i) = queue.pop_front() {
            size += 1;
            let (x, y) = (i % w, i / w);
            for yy in y.saturating_sub(1)..=(y + 1).min(h - 1) {
                for xx in x.saturating_sub(1)..=(x + 1).min(w - 1) {
                    let j = yy * w + xx;
                    if mask.data[j] && label[j] == 0 {
                        label[j] = next;
                        queue.push_back(j);
                    }
                }
            }
        }
        if size > best.1 {
            best = (next, size);
        }
    }
    Mask {
        width: w,
        height: h,
        data: label.iter().map(|&l| l != 0 && l == best.0).collect(),
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Foreground {
    pub mask: Mask,
    /// Constant image or nothing left after opening.
    pub degenerate: bool,
}

/// Band-mean image, Otsu threshold, 3×3 opening, largest component.
pub fn foreground_mask(cube: &DataCube) -> Foreground {
    let (w, h) = (cube.width(), cube.height());
    let img = cube.mean_image();
    let Some(t) = otsu_threshold(&img) else {
        log::warn!("foreground mask is degenerate: the band-mean image is constant");
        return Foreground { mask: Mask { width: w, height: h, data: vec![false; w * h] }, degenerate: true };
    };
    let raw = Mask { width: w, height: h, data: img.iter().map(|&v| v > t).collect() };
    let mask = largest_component(&open3(&raw));
    let degenerate = mask.is_empty();
    if degenerate {
        log::warn!("foreground mask is degenerate: nothing survived the opening");
    }
    Foreground { mask, degenerate }
}

/// A region's top-left corner and the sample averaged over it.
#[derive(Debug, Clone, PartialEq)]
pub struct Region {
    pub x: usize,
    pub y: usize,
    pub size: usize,
    pub sample: LabeledSample,
}

/// Top-left corners of `size × size` tiles laid from the mask's bounding box
/// corner in row-major order, kept when every pixel is in the mask.
pub fn tile_origins(mask: &Mask, size: usize) -> Vec<(usize, usize)> {
    let Some((x0, y0, x1, y1)) = mask.bounding_box() else {
        return Vec::new();
    };
    if size == 0 {
        return Vec::new();
    }
    let mut out = Vec::new();
    let mut y = y0;
    while y + size - 1 <= y1 {
        let mut x = x0;
        while x + size - 1 <= x1 {
            if (y..y + size).all(|yy| (x..x + size).all(|xx| mask.get(xx, yy))) {
                out.push((x, y));
            }
            x += size;
        }
        y += size;
    }
    out
}

fn tile_mean(cube: &DataCube, x: usize, y: usize, size: usize) -> Vec<f64> {
    let p = cube.pixels();
    let n = (size * size) as f64;
    (0..cube.bands())
        .map(|b| {
            let plane = &cube.values()[b * p..(b + 1) * p];
            let mut s = 0.0;
            for yy in y..y + size {
                for xx in x..x + size {
                    s += plane[yy * cube.width() + xx] as f64;
                }
            }
            s / n
        })
        .collect()
}

/// Averages fluorescence and white-light spectra over every qualifying
/// tile. Samples are unlabeled and numbered in tile order.
pub fn extract_regions(fluo: &DataCube, white: &DataCube, mask: &Mask, size: usize) -> Result<Vec<Region>> {
    fluo.same_shape(white)?;
    if mask.width != fluo.width() || mask.height != fluo.height() {
        return Err(Error::dim("mask size", fluo.pixels(), mask.width * mask.height));
    }
    tile_origins(mask, size)
        .into_iter()
        .enumerate()
        .map(|(i, (x, y))| {
            let f = Spectrum::new(fluo.grid().clone(), tile_mean(fluo, x, y, size), Role::Fluorescence)?;
            let r = Spectrum::new(white.grid().clone(), tile_mean(white, x, y, size), Role::Reflectance)?;
            let sample = LabeledSample::new(i as u64, f, r, None, Domain::Human)?;
            Ok(Region { x, y, size, sample })
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::pipeline::cube::CubeKind;
    use crate::spectral::WavelengthGrid;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn grid(n: usize) -> WavelengthGrid {
        WavelengthGrid::uniform(500.0, 10.0, n).unwrap()
    }

    fn random(w: usize, h: usize, bands: usize, seed: u64) -> DataCube {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let v = (0..w * h * bands).map(|_| rng.random::<f32>()).collect();
        DataCube::new(w, h, grid(bands), CubeKind::Fluorescence, v).unwrap()
    }

    fn disk_cube(w: usize, h: usize, r: f64) -> (DataCube, Mask) {
        let (cx, cy) = (w as f64 / 2.0, h as f64 / 2.0);
        let mut c = DataCube::zeros(w, h, grid(3), CubeKind::White);
        let mut truth = vec![false; w * h];
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for y in 0..h {
            for x in 0..w {
                let inside = ((x as f64 + 0.5 - cx).powi(2) + (y as f64 + 0.5 - cy).powi(2)).sqrt() <= r;
                truth[y * w + x] = inside;
                for b in 0..3 {
                    let base = if inside { 0.8 } else { 0.1 };
                    c.set(b, x, y, base + rng.random_range(-0.05..0.05));
                }
            }
        }
        (c, Mask::new(w, h, truth).unwrap())
    }

    #[test]
    fn dark_subtraction_contracts() {
        let c = random(5, 4, 3, 1);
        let zero = DataCube::zeros(5, 4, grid(3), CubeKind::Dark);
        assert_eq!(dark_subtract(&c, &zero).unwrap(), c);
        assert!(dark_subtract(&c, &c).unwrap().values().iter().all(|v| *v == 0.0));
        let d = random(5, 4, 3, 2);
        let out = dark_subtract(&c, &d).unwrap();
        for i in 0..c.values().len() {
            assert_eq!(out.values()[i], (c.values()[i] - d.values()[i]).max(0.0));
        }
        let other = DataCube::zeros(4, 5, grid(3), CubeKind::Dark);
        assert!(matches!(dark_subtract(&c, &other), Err(Error::Dimension { .. })));
    }

    #[test]
    fn sensor_correction_divides_per_band() {
        let c = random(3, 3, 4, 3);
        let ones = Spectrum::new(grid(4), vec![1.0; 4], Role::Reflectance).unwrap();
        assert_eq!(sensor_correct(&c, &ones).unwrap().0, c);
        let twos = Spectrum::new(grid(4), vec![2.0; 4], Role::Reflectance).unwrap();
        let half = sensor_correct(&c, &twos).unwrap().0;
        for (a, b) in half.values().iter().zip(c.values()) {
            assert_eq!(*a, b / 2.0);
        }
        let resp = Spectrum::new(grid(4), vec![0.5, 1e-4, 3.0, 0.9], Role::Reflectance).unwrap();
        let (out, masked) = sensor_correct(&c, &resp).unwrap();
        assert_eq!(masked, vec![1]);
        for b in 0..4 {
            for i in 0..9 {
                let want = if b == 1 { 0.0 } else { (c.plane(b)[i] as f64 / resp.values()[b]) as f32 };
                assert_eq!(out.plane(b)[i], want);
            }
        }
    }

    #[test]
    fn disk_mask_iou() {
        let (c, truth) = disk_cube(64, 48, 15.0);
        let fg = foreground_mask(&c);
        assert!(!fg.degenerate);
        let inter = fg.mask.data.iter().zip(&truth.data).filter(|(a, b)| **a && **b).count();
        let union = fg.mask.data.iter().zip(&truth.data).filter(|(a, b)| **a || **b).count();
        assert!(inter as f64 / union as f64 >= 0.95);
    }

    #[test]
    fn constant_cube_is_degenerate() {
        let c = DataCube::new(4, 4, grid(2), CubeKind::White, vec![0.3; 32]).unwrap();
        let fg = foreground_mask(&c);
        assert!(fg.degenerate);
        assert!(fg.mask.is_empty());
    }

    #[test]
    fn isolated_bright_pixel_is_removed() {
        let (mut c, _) = disk_cube(40, 40, 12.0);
        for b in 0..3 {
            c.set(b, 1, 1, 0.9);
        }
        let fg = foreground_mask(&c);
        assert!(!fg.mask.get(1, 1));
        assert!(fg.mask.get(20, 20));
    }

    #[test]
    fn tiling_arithmetic() {
        let m = Mask::full(30, 30);
        assert_eq!(tile_origins(&m, 10).len(), 9);
        let mut partial = Mask::full(35, 22);
        partial.data[0] = false;
        // first tile loses its corner pixel; 3 columns × 2 rows otherwise
        assert_eq!(tile_origins(&partial, 10).len(), 5);
    }

    #[test]
    fn tile_means_match_loop_oracle() {
        let f = random(23, 21, 4, 7);
        let w = random(23, 21, 4, 8);
        let regions = extract_regions(&f, &w, &Mask::full(23, 21), 10).unwrap();
        assert_eq!(regions.len(), 4);
        for r in &regions {
            for b in 0..4 {
                let mut s = 0.0f64;
                for dy in 0..10 {
                    for dx in 0..10 {
                        s += f.get(b, r.x + dx, r.y + dy) as f64;
                    }
                }
                assert!((r.sample.fluo.values()[b] - s / 100.0).abs() < 1e-12);
            }
        }
        let constant = DataCube::new(10, 10, grid(2), CubeKind::Fluorescence, vec![0.25; 200]).unwrap();
        let one = extract_regions(&constant, &constant, &Mask::full(10, 10), 10).unwrap();
        assert_eq!(one[0].sample.fluo.values(), &[0.25, 0.25]);
    }
}
