//! Scalar contrast focal metrics: mean gradient magnitude (MGM) and mean
//! local ratio (MLR). Higher means sharper.

use serde::{Deserialize, Serialize};

use crate::image::{gaussian_blur, sobel_gradients, GrayImage};

/// Smoothing scale used by MLR unless configured otherwise.
pub const DEFAULT_MLR_SIGMA: f64 = 4.0;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum MetricKind {
    Mgm,
    Mlr { sigma: f64 },
}

impl MetricKind {
    pub fn mlr_default() -> Self {
        MetricKind::Mlr {
            sigma: DEFAULT_MLR_SIGMA,
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            MetricKind::Mgm => "mgm",
            MetricKind::Mlr { .. } => "mlr",
        }
    }
}

/// Mean Euclidean norm of the Sobel gradient pair over all pixels.
pub fn mgm(img: &GrayImage) -> f64 {
    let (gx, gy) = sobel_gradients(img);
    let n = img.width() * img.height();
    let sum: f64 = gx
        .pixels()
        .iter()
        .zip(gy.pixels())
        .map(|(x, y)| (x * x + y * y).sqrt())
        .sum();
    sum / n as f64
}

/// Mean over pixels of `max((G+1)/(I+1), (I+1)/(G+1))` where `G` is the
/// Gaussian-blurred image. Intensities are in `[0,1]`, so the `+1`
/// offsets keep both denominators at least 1; the result is always >= 1.
pub fn mlr(img: &GrayImage, sigma: f64) -> f64 {
    assert!(sigma > 0.0, "mlr sigma must be positive");
    let blurred = gaussian_blur(img, sigma);
    let n = img.width() * img.height();
    let sum: f64 = img
        .pixels()
        .iter()
        .zip(blurred.pixels())
        .map(|(&i, &g)| {
            let r = (g + 1.0) / (i + 1.0);
            r.max(1.0 / r)
        })
        .sum();
    sum / n as f64
}

pub fn evaluate_metric(kind: MetricKind, patch: &GrayImage) -> f64 {
    match kind {
        MetricKind::Mgm => mgm(patch),
        MetricKind::Mlr { sigma } => mlr(patch, sigma),
    }
}
