//! Separable resampling with clamp-to-edge boundaries.
//!
//! Output pixel `i` along an axis of `n_in → n_out` samples the input at
//! `(i + 0.5)·n_in/n_out − 0.5` (pixel-center convention). When shrinking
//! with antialiasing the kernel is stretched by the shrink factor and the
//! weights renormalised, as in common antialiased image resizers.

use crate::error::Result;
use crate::field::Field;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Kernel {
    /// Catmull-Rom cubic (a = −0.5).
    Bicubic,
    /// Triangle filter.
    Bilinear,
}

impl Kernel {
    fn support(self) -> f64 {
        match self {
            Kernel::Bicubic => 2.0,
            Kernel::Bilinear => 1.0,
        }
    }

    fn weight(self, x: f64) -> f64 {
        let x = x.abs();
        match self {
            Kernel::Bicubic => {
                const A: f64 = -0.5;
                if x <= 1.0 {
                    ((A + 2.0) * x - (A + 3.0)) * x * x + 1.0
                } else if x < 2.0 {
                    ((A * x - 5.0 * A) * x + 8.0 * A) * x - 4.0 * A
                } else {
                    0.0
                }
            }
            Kernel::Bilinear => (1.0 - x).max(0.0),
        }
    }
}

/// Tap indices (already clamped) and normalised weights for each output sample.
struct AxisWeights {
    taps: Vec<Vec<(usize, f64)>>,
}

impl AxisWeights {
    fn new(n_in: usize, n_out: usize, kernel: Kernel, antialias: bool) -> Self {
        let scale = n_in as f64 / n_out as f64;
        let stretch = if antialias && scale > 1.0 { scale } else { 1.0 };
        let radius = kernel.support() * stretch;
        let taps = (0..n_out)
            .map(|i| {
                let center = (i as f64 + 0.5) * scale - 0.5;
                let lo = (center - radius).floor() as isize;
                let hi = (center + radius).ceil() as isize;
                let mut row: Vec<(usize, f64)> = (lo..=hi)
                    .filter_map(|j| {
                        let w = kernel.weight((j as f64 - center) / stretch);
                        (w != 0.0).then(|| (j.clamp(0, n_in as isize - 1) as usize, w))
                    })
                    .collect();
                let total: f64 = row.iter().map(|(_, w)| w).sum();
                row.iter_mut().for_each(|(_, w)| *w /= total);
                row
            })
            .collect();
        Self { taps }
    }
}

/// Resizes every channel to `out_h × out_w`.
pub fn resize(f: &Field, out_h: usize, out_w: usize, kernel: Kernel, antialias: bool) -> Result<Field> {
    let (c, h, w) = f.dims();
    let wx = AxisWeights::new(w, out_w, kernel, antialias);
    let wy = AxisWeights::new(h, out_h, kernel, antialias);
    let mut out = Vec::with_capacity(c * out_h * out_w);
    let mut rows = vec![0.0f64; h * out_w];
    for ch in 0..c {
        let plane = f.plane(ch);
        for y in 0..h {
            let src = &plane[y * w..(y + 1) * w];
            for (x, taps) in wx.taps.iter().enumerate() {
                rows[y * out_w + x] = taps.iter().map(|&(j, wt)| src[j] as f64 * wt).sum();
            }
        }
        for taps in &wy.taps {
            for x in 0..out_w {
                out.push(taps.iter().map(|&(j, wt)| rows[j * out_w + x] * wt).sum::<f64>() as f32);
            }
        }
    }
    Field::new(f.channels().to_vec(), out_h, out_w, out)
}

/// Catmull-Rom resize; `antialias` widens the kernel when shrinking.
pub fn bicubic_resize(f: &Field, out_h: usize, out_w: usize, antialias: bool) -> Result<Field> {
    resize(f, out_h, out_w, Kernel::Bicubic, antialias)
}

/// Bilinear resize without antialiasing (align-corners = false).
pub fn bilinear_resize(f: &Field, out_h: usize, out_w: usize) -> Result<Field> {
    resize(f, out_h, out_w, Kernel::Bilinear, false)
}

/// Half-width of the input footprint of one output sample along an axis,
/// in input pixels. Outputs whose footprint stays inside the grid are not
/// affected by edge clamping.
pub fn footprint_radius(n_in: usize, n_out: usize, kernel: Kernel, antialias: bool) -> f64 {
    let scale = n_in as f64 / n_out as f64;
    let stretch = if antialias && scale > 1.0 { scale } else { 1.0 };
    kernel.support() * stretch
}
