//! Single-channel image container, Sobel and Gaussian kernels, and the
//! parametric defocus renderer.
//!
//! Intensities are stored as `f64` in a nominal `[0,1]` range (8-bit file
//! inputs are divided by 255 on load). All spatial filters use reflect-101
//! boundary handling: `gfedcb|abcdefgh|gfedcb`.

use crate::error::{Error, Result};

/// Row-major single-channel raster.
#[derive(Debug, Clone, PartialEq)]
pub struct GrayImage {
    width: usize,
    height: usize,
    pixels: Vec<f64>,
}

impl GrayImage {
    /// Zero-filled image. Panics on zero dimensions.
    pub fn new(width: usize, height: usize) -> Self {
        assert!(width >= 1 && height >= 1, "image dimensions must be >= 1");
        GrayImage {
            width,
            height,
            pixels: vec![0.0; width * height],
        }
    }

    /// Builds an image from a row-major pixel buffer, validating the
    /// length and that every intensity is finite.
    pub fn from_pixels(width: usize, height: usize, pixels: Vec<f64>) -> Result<Self> {
        if width == 0 || height == 0 {
            return Err(Error::EmptyImage);
        }
        if pixels.len() != width * height {
            return Err(Error::PixelCount {
                width,
                height,
                len: pixels.len(),
            });
        }
        if let Some(index) = pixels.iter().position(|p| !p.is_finite()) {
            return Err(Error::NonFiniteIntensity { index });
        }
        Ok(GrayImage {
            width,
            height,
            pixels,
        })
    }

    #[inline]
    pub fn width(&self) -> usize {
        self.width
    }

    #[inline]
    pub fn height(&self) -> usize {
        self.height
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize) -> f64 {
        self.pixels[y * self.width + x]
    }

    #[inline]
    pub fn set(&mut self, x: usize, y: usize, v: f64) {
        self.pixels[y * self.width + x] = v;
    }

    pub fn pixels(&self) -> &[f64] {
        &self.pixels
    }

    pub fn pixels_mut(&mut self) -> &mut [f64] {
        &mut self.pixels
    }

    pub fn row(&self, y: usize) -> &[f64] {
        &self.pixels[y * self.width..(y + 1) * self.width]
    }

    pub fn mean(&self) -> f64 {
        self.pixels.iter().sum::<f64>() / self.pixels.len() as f64
    }

    /// Pixel values scaled by `a`.
    pub fn scaled(&self, a: f64) -> GrayImage {
        GrayImage {
            width: self.width,
            height: self.height,
            pixels: self.pixels.iter().map(|p| a * p).collect(),
        }
    }
}

/// Reflect-101 index: mirrors about the edge without repeating the edge
/// sample, so index -1 maps to 1 and index n maps to n-2.
#[inline]
pub fn reflect101(i: isize, n: usize) -> usize {
    debug_assert!(n >= 1);
    if n == 1 {
        return 0;
    }
    let period = 2 * (n as isize - 1);
    let mut m = i % period;
    if m < 0 {
        m += period;
    }
    if m < n as isize {
        m as usize
    } else {
        (period - m) as usize
    }
}

/// Full-resolution responses of the 3x3 Sobel kernels.
///
/// The x kernel is `[-1 0 1; -2 0 2; -1 0 1]` applied as a sliding
/// correlation; the y kernel is its transpose. Boundaries are reflect-101.
pub fn sobel_gradients(img: &GrayImage) -> (GrayImage, GrayImage) {
    let (w, h) = (img.width, img.height);
    let mut gx = GrayImage::new(w, h);
    let mut gy = GrayImage::new(w, h);
    for y in 0..h {
        let ym = reflect101(y as isize - 1, h);
        let yp = reflect101(y as isize + 1, h);
        for x in 0..w {
            let xm = reflect101(x as isize - 1, w);
            let xp = reflect101(x as isize + 1, w);
            let a = img.get(xm, ym);
            let b = img.get(x, ym);
            let c = img.get(xp, ym);
            let d = img.get(xm, y);
            let f = img.get(xp, y);
            let g = img.get(xm, yp);
            let hh = img.get(x, yp);
            let i = img.get(xp, yp);
            gx.set(x, y, (c + 2.0 * f + i) - (a + 2.0 * d + g));
            gy.set(x, y, (g + 2.0 * hh + i) - (a + 2.0 * b + c));
        }
    }
    (gx, gy)
}

/// Discrete Gaussian taps for `sigma > 0`: radius `ceil(3*sigma)`,
/// weights `exp(-k^2 / 2 sigma^2)` normalized to sum 1.
pub fn gaussian_kernel(sigma: f64) -> Vec<f64> {
    assert!(sigma > 0.0 && sigma.is_finite());
    let radius = (3.0 * sigma).ceil() as usize;
    let mut taps = Vec::with_capacity(2 * radius + 1);
    let denom = 2.0 * sigma * sigma;
    for k in -(radius as isize)..=(radius as isize) {
        taps.push((-((k * k) as f64) / denom).exp());
    }
    let sum: f64 = taps.iter().sum();
    for t in &mut taps {
        *t /= sum;
    }
    taps
}

/// Separable Gaussian blur with reflect-101 boundaries.
///
/// `sigma = 0` returns the input unchanged. For very small sigma the
/// discrete kernel degenerates towards an impulse; it is still
/// renormalized rather than skipped, so blurring is continuous in sigma.
pub fn gaussian_blur(img: &GrayImage, sigma: f64) -> GrayImage {
    assert!(sigma >= 0.0 && sigma.is_finite(), "sigma must be >= 0");
    if sigma == 0.0 {
        return img.clone();
    }
    let taps = gaussian_kernel(sigma);
    let radius = (taps.len() - 1) / 2;
    let (w, h) = (img.width, img.height);

    // Horizontal pass, then vertical.
    let mut tmp = GrayImage::new(w, h);
    for y in 0..h {
        for x in 0..w {
            let mut acc = 0.0;
            for (j, t) in taps.iter().enumerate() {
                let sx = reflect101(x as isize + j as isize - radius as isize, w);
                acc += t * img.get(sx, y);
            }
            tmp.set(x, y, acc);
        }
    }
    let mut out = GrayImage::new(w, h);
    for y in 0..h {
        for x in 0..w {
            let mut acc = 0.0;
            for (j, t) in taps.iter().enumerate() {
                let sy = reflect101(y as isize + j as isize - radius as isize, h);
                acc += t * tmp.get(x, sy);
            }
            out.set(x, y, acc);
        }
    }
    out
}

/// Extracts the `size`x`size` patch centred at `(cx, cy)`.
///
/// The rectangle is `[cx - size/2, cx - size/2 + size)` in x and the same
/// in y; it must lie fully inside the image.
pub fn extract_patch(img: &GrayImage, cx: usize, cy: usize, size: usize) -> Result<GrayImage> {
    assert!(size >= 1);
    let half = (size / 2) as isize;
    let x0 = cx as isize - half;
    let y0 = cy as isize - half;
    let oob = |edge| Error::PatchOutOfBounds {
        cx,
        cy,
        size,
        width: img.width,
        height: img.height,
        edge,
    };
    if x0 < 0 {
        return Err(oob("left"));
    }
    if y0 < 0 {
        return Err(oob("top"));
    }
    if x0 as usize + size > img.width {
        return Err(oob("right"));
    }
    if y0 as usize + size > img.height {
        return Err(oob("bottom"));
    }
    let (x0, y0) = (x0 as usize, y0 as usize);
    let mut pixels = Vec::with_capacity(size * size);
    for y in y0..y0 + size {
        pixels.extend_from_slice(&img.pixels[y * img.width + x0..y * img.width + x0 + size]);
    }
    Ok(GrayImage {
        width: size,
        height: size,
        pixels,
    })
}

/// Centre used when no explicit patch position is configured.
pub fn default_patch_center(img: &GrayImage) -> (usize, usize) {
    (img.width / 2, img.height / 2)
}

/// Gaussian defocus model: blur scale grows linearly with focal error,
/// `sigma = sigma0 * |f_star - f|`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DefocusModel {
    pub sigma0: f64,
    pub f_star: f64,
}

impl DefocusModel {
    pub fn new(sigma0: f64, f_star: f64) -> Result<Self> {
        if !(sigma0 > 0.0 && sigma0.is_finite()) {
            return Err(Error::InvalidSigma0(sigma0));
        }
        if !(0.0..=1.0).contains(&f_star) {
            return Err(Error::InvalidFStar(f_star));
        }
        Ok(DefocusModel { sigma0, f_star })
    }

    #[inline]
    pub fn sigma_at(&self, f: f64) -> f64 {
        self.sigma0 * (self.f_star - f).abs()
    }
}

/// Renders the view of `sharp` at focal power `f` under `model`.
pub fn defocus_render(sharp: &GrayImage, f: f64, model: &DefocusModel) -> Result<GrayImage> {
    if !(0.0..=1.0).contains(&f) {
        return Err(Error::FocalPowerRange(f));
    }
    Ok(gaussian_blur(sharp, model.sigma_at(f)))
}

/// Renders only the `size`x`size` patch centred at `(cx, cy)` of the
/// defocused view. Bit-identical to
/// `extract_patch(&defocus_render(sharp, f, model)?, cx, cy, size)` but
/// skips the blur outside the patch footprint.
pub fn defocus_render_patch(
    sharp: &GrayImage,
    f: f64,
    model: &DefocusModel,
    cx: usize,
    cy: usize,
    size: usize,
) -> Result<GrayImage> {
    if !(0.0..=1.0).contains(&f) {
        return Err(Error::FocalPowerRange(f));
    }
    let sigma = model.sigma_at(f);
    if sigma == 0.0 {
        return extract_patch(sharp, cx, cy, size);
    }

    let half = (size / 2) as isize;
    let x0 = cx as isize - half;
    let y0 = cy as isize - half;
    let (w, h) = (sharp.width, sharp.height);
    if x0 < 0 || y0 < 0 || x0 as usize + size > w || y0 as usize + size > h {
        // Reuse the boundary diagnostics of the plain path.
        return extract_patch(sharp, cx, cy, size);
    }
    let (x0u, y0u) = (x0 as usize, y0 as usize);

    let taps = gaussian_kernel(sigma);
    let radius = ((taps.len() - 1) / 2) as isize;

    // Horizontally blurred rows for the window of source rows that the
    // vertical pass can touch. Reflection folds out-of-range indices back
    // towards the interior by at most `radius`, so the clipped window
    // covers every reflected row.
    let row_lo = (y0 - radius).max(0) as usize;
    let row_hi = ((y0 + size as isize + radius) as usize).min(h);
    let rows = row_hi - row_lo;
    let mut tmp = vec![0.0f64; rows * size];
    for (ri, y) in (row_lo..row_hi).enumerate() {
        for px in 0..size {
            let x = x0u + px;
            let mut acc = 0.0;
            for (j, t) in taps.iter().enumerate() {
                let sx = reflect101(x as isize + j as isize - radius, w);
                acc += t * sharp.get(sx, y);
            }
            tmp[ri * size + px] = acc;
        }
    }

    let mut pixels = vec![0.0f64; size * size];
    for py in 0..size {
        let y = y0u + py;
        for px in 0..size {
            let mut acc = 0.0;
            for (j, t) in taps.iter().enumerate() {
                let sy = reflect101(y as isize + j as isize - radius, h);
                acc += t * tmp[(sy - row_lo) * size + px];
            }
            pixels[py * size + px] = acc;
        }
    }
    GrayImage::from_pixels(size, size, pixels)
}
