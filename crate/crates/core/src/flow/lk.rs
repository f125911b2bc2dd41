//! Dense pyramidal Lucas-Kanade.
//!
//! Coarse-to-fine: each level starts from the upsampled coarser estimate and
//! refines it per pixel by Gauss-Newton iterations of the windowed 2x2 normal
//! equations, the whole window shifted by that pixel's flow. Pixels whose
//! mean structure tensor has a smaller eigenvalue below `min_eigen` keep the
//! coarser estimate.

use rayon::prelude::*;

use super::{FlowError, FlowField, Frame};
use crate::field::{GridShape, VectorField};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LkParams {
    pub levels: usize,
    pub window: usize,
    pub iterations: usize,
    pub min_eigen: f64,
}

impl Default for LkParams {
    fn default() -> Self {
        Self {
            levels: 3,
            window: 9,
            iterations: 5,
            min_eigen: 1e-4,
        }
    }
}

impl LkParams {
    pub fn validate(&self) -> Result<(), FlowError> {
        if self.levels < 1 {
            return Err(FlowError::InvalidParams("levels must be >= 1".into()));
        }
        if self.window < 3 || self.window.is_multiple_of(2) {
            return Err(FlowError::InvalidParams(format!(
                "window must be odd and >= 3, got {}",
                self.window
            )));
        }
        if !(self.min_eigen.is_finite() && self.min_eigen >= 0.0) {
            return Err(FlowError::InvalidParams("min_eigen must be >= 0".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
struct Image {
    w: usize,
    h: usize,
    data: Vec<f64>,
}

impl Image {
    fn zeros(w: usize, h: usize) -> Self {
        Self {
            w,
            h,
            data: vec![0.0; w * h],
        }
    }

    #[inline]
    fn get(&self, x: isize, y: isize) -> f64 {
        let x = x.clamp(0, self.w as isize - 1) as usize;
        let y = y.clamp(0, self.h as isize - 1) as usize;
        self.data[y * self.w + x]
    }

    #[inline]
    fn bilinear(&self, x: f64, y: f64) -> f64 {
        let x = x.clamp(0.0, (self.w - 1) as f64);
        let y = y.clamp(0.0, (self.h - 1) as f64);
        let x0 = (x.floor() as usize).min(self.w - 1);
        let y0 = (y.floor() as usize).min(self.h - 1);
        let x1 = (x0 + 1).min(self.w - 1);
        let y1 = (y0 + 1).min(self.h - 1);
        let (fx, fy) = (x - x0 as f64, y - y0 as f64);
        let d = &self.data;
        let top = d[y0 * self.w + x0] * (1.0 - fx) + d[y0 * self.w + x1] * fx;
        let bottom = d[y1 * self.w + x0] * (1.0 - fx) + d[y1 * self.w + x1] * fx;
        top * (1.0 - fy) + bottom * fy
    }

    fn map_rows<F>(w: usize, h: usize, f: F) -> Self
    where
        F: Fn(usize, usize) -> f64 + Sync,
    {
        let mut img = Self::zeros(w, h);
        img.data.par_chunks_mut(w).enumerate().for_each(|(y, row)| {
            for (x, v) in row.iter_mut().enumerate() {
                *v = f(x, y);
            }
        });
        img
    }

    /// Separable 5-tap binomial blur followed by 2x decimation.
    fn pyr_down(&self) -> Self {
        const K: [f64; 5] = [1.0 / 16.0, 4.0 / 16.0, 6.0 / 16.0, 4.0 / 16.0, 1.0 / 16.0];
        let horiz = Self::map_rows(self.w, self.h, |x, y| {
            (0..5)
                .map(|k| K[k] * self.get(x as isize + k as isize - 2, y as isize))
                .sum()
        });
        let (w2, h2) = (self.w.div_ceil(2), self.h.div_ceil(2));
        Self::map_rows(w2, h2, |x, y| {
            (0..5)
                .map(|k| K[k] * horiz.get(2 * x as isize, 2 * y as isize + k as isize - 2))
                .sum()
        })
    }
}

fn pyramid(frame: &Frame, levels: usize) -> Vec<Image> {
    let shape = frame.shape();
    let mut pyr = vec![Image {
        w: shape.width(),
        h: shape.height(),
        data: frame.intensities().to_vec(),
    }];
    while pyr.len() < levels {
        let last = pyr.last().expect("non-empty");
        if last.w < 8 || last.h < 8 {
            break;
        }
        let next = last.pyr_down();
        pyr.push(next);
    }
    pyr
}

/// Per-pixel flow as two planes.
struct FlowPlanes {
    u: Image,
    v: Image,
}

impl FlowPlanes {
    fn upsample(&self, w: usize, h: usize) -> Self {
        let up = |img: &Image| {
            Image::map_rows(w, h, |x, y| {
                2.0 * img.bilinear(0.5 * x as f64, 0.5 * y as f64)
            })
        };
        Self {
            u: up(&self.u),
            v: up(&self.v),
        }
    }
}

/// Largest per-iteration update, in pixels of the current level.
const MAX_UPDATE: f64 = 1.0;
/// Per-pixel iterations stop once the update falls below this.
const CONVERGED: f64 = 1e-3;

fn refine_level(prev: &Image, curr: &Image, init: FlowPlanes, params: &LkParams) -> FlowPlanes {
    let (w, h) = (curr.w, curr.h);
    let r = (params.window / 2) as isize;
    let ix = Image::map_rows(w, h, |x, y| {
        0.5 * (curr.get(x as isize + 1, y as isize) - curr.get(x as isize - 1, y as isize))
    });
    let iy = Image::map_rows(w, h, |x, y| {
        0.5 * (curr.get(x as isize, y as isize + 1) - curr.get(x as isize, y as isize - 1))
    });

    let solve = |x: usize, y: usize| -> (f64, f64) {
        let i = y * w + x;
        let (mut u, mut v) = (init.u.data[i], init.v.data[i]);
        // Window clipped at the borders; the structure tensor is fixed.
        let (x0, x1) = (
            (x as isize - r).max(0),
            (x as isize + r).min(w as isize - 1),
        );
        let (y0, y1) = (
            (y as isize - r).max(0),
            (y as isize + r).min(h as isize - 1),
        );
        let (mut a, mut b, mut c) = (0.0, 0.0, 0.0);
        for yy in y0..=y1 {
            for xx in x0..=x1 {
                let j = yy as usize * w + xx as usize;
                let (gx, gy) = (ix.data[j], iy.data[j]);
                a += gx * gx;
                b += gx * gy;
                c += gy * gy;
            }
        }
        let count = ((x1 - x0 + 1) * (y1 - y0 + 1)) as f64;
        let lambda_min = (0.5 * (a + c) - (0.25 * (a - c).powi(2) + b * b).sqrt()) / count;
        if !(lambda_min >= params.min_eigen && lambda_min > 0.0) {
            return (u, v);
        }
        let det = a * c - b * b;
        for _ in 0..params.iterations {
            let (mut bx, mut by) = (0.0, 0.0);
            for yy in y0..=y1 {
                for xx in x0..=x1 {
                    let j = yy as usize * w + xx as usize;
                    let e = prev.bilinear(xx as f64 - u, yy as f64 - v) - curr.data[j];
                    bx += ix.data[j] * e;
                    by += iy.data[j] * e;
                }
            }
            let du = (c * bx - b * by) / det;
            let dv = (a * by - b * bx) / det;
            let norm = du.hypot(dv);
            let scale = if norm > MAX_UPDATE {
                MAX_UPDATE / norm
            } else {
                1.0
            };
            u += scale * du;
            v += scale * dv;
            if norm < CONVERGED {
                break;
            }
        }
        (u, v)
    };

    let mut out = FlowPlanes {
        u: Image::zeros(w, h),
        v: Image::zeros(w, h),
    };
    out.u
        .data
        .par_chunks_mut(w)
        .zip(out.v.data.par_chunks_mut(w))
        .enumerate()
        .for_each(|(y, (ur, vr))| {
            for x in 0..w {
                (ur[x], vr[x]) = solve(x, y);
            }
        });
    out
}

/// Dense flow from `prev` to `curr`, indexed on the grid of `curr`.
pub fn flow_estimate(
    prev: &Frame,
    curr: &Frame,
    params: &LkParams,
) -> Result<FlowField, FlowError> {
    params.validate()?;
    if prev.shape() != curr.shape() {
        return Err(FlowError::ShapeMismatch(prev.shape(), curr.shape()));
    }
    let prev_pyr = pyramid(prev, params.levels);
    let curr_pyr = pyramid(curr, params.levels);
    let coarsest = curr_pyr.last().expect("non-empty");
    let mut flow = FlowPlanes {
        u: Image::zeros(coarsest.w, coarsest.h),
        v: Image::zeros(coarsest.w, coarsest.h),
    };
    for level in (0..curr_pyr.len()).rev() {
        let (p, c) = (&prev_pyr[level], &curr_pyr[level]);
        if flow.u.w != c.w || flow.u.h != c.h {
            flow = flow.upsample(c.w, c.h);
        }
        flow = refine_level(p, c, flow, params);
    }
    let shape: GridShape = curr.shape();
    let mut data = Vec::with_capacity(shape.len() * 2);
    for (u, v) in flow.u.data.iter().zip(&flow.v.data) {
        data.push(*u);
        data.push(*v);
    }
    Ok(FlowField::from_field(VectorField::from_vec(
        shape, 2, data,
    )?)?)
}
