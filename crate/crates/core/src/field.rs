//! Dense grid containers and clamp-to-edge bilinear interpolation.
//!
//! Every dense quantity in the pipeline (flow, Jacobian state, variances)
//! is a [`VectorField`]: a row-major grid of fixed-length vectors with the
//! channel dimension contiguous per pixel.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum FieldError {
    #[error("grid must be at least 2x2, got {width}x{height}")]
    InvalidShape { width: usize, height: usize },
    #[error("vector dimension must be positive")]
    ZeroDimension,
    #[error("data length {got} does not match {width}x{height}x{dim}")]
    LengthMismatch {
        width: usize,
        height: usize,
        dim: usize,
        got: usize,
    },
    #[error("shape mismatch: {0:?} vs {1:?}")]
    ShapeMismatch(GridShape, GridShape),
    #[error("field contains a non-finite value at index {0}")]
    NonFinite(usize),
}

/// Width and height of a pixel grid.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct GridShape {
    width: usize,
    height: usize,
}

impl GridShape {
    pub fn new(width: usize, height: usize) -> Result<Self, FieldError> {
        if width < 2 || height < 2 {
            return Err(FieldError::InvalidShape { width, height });
        }
        Ok(Self { width, height })
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
    pub fn len(&self) -> usize {
        self.width * self.height
    }

    #[inline]
    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    #[inline]
    pub fn index(&self, x: usize, y: usize) -> usize {
        y * self.width + x
    }

    /// Grid coordinate of the pixel with linear index `i`.
    #[inline]
    pub fn coord(&self, i: usize) -> PixelCoord {
        PixelCoord::new((i % self.width) as f64, (i / self.width) as f64)
    }

    #[inline]
    pub fn contains(&self, p: PixelCoord) -> bool {
        p.x >= 0.0
            && p.y >= 0.0
            && p.x <= (self.width - 1) as f64
            && p.y <= (self.height - 1) as f64
    }

    /// Clamp a continuous coordinate into `[0, w-1] x [0, h-1]`.
    #[inline]
    pub fn clamp(&self, p: PixelCoord) -> PixelCoord {
        PixelCoord::new(
            p.x.clamp(0.0, (self.width - 1) as f64),
            p.y.clamp(0.0, (self.height - 1) as f64),
        )
    }
}

/// Continuous image position: `x` is the column, `y` the row.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct PixelCoord {
    pub x: f64,
    pub y: f64,
}

impl PixelCoord {
    #[inline]
    pub const fn new(x: f64, y: f64) -> Self {
        Self { x, y }
    }

    #[inline]
    pub fn offset(self, dx: f64, dy: f64) -> Self {
        Self::new(self.x + dx, self.y + dy)
    }

    #[inline]
    pub fn distance(self, other: PixelCoord) -> f64 {
        (self.x - other.x).hypot(self.y - other.y)
    }

    pub fn is_finite(self) -> bool {
        self.x.is_finite() && self.y.is_finite()
    }
}

/// Bilinear weights of a clamped query: the top-left node and the
/// fractional offsets towards the right and bottom neighbours.
#[derive(Debug, Clone, Copy)]
struct Stencil {
    x0: usize,
    y0: usize,
    x1: usize,
    y1: usize,
    fx: f64,
    fy: f64,
}

impl Stencil {
    #[inline]
    fn new(shape: GridShape, at: PixelCoord) -> Self {
        let p = shape.clamp(at);
        let x0 = (p.x.floor() as usize).min(shape.width - 1);
        let y0 = (p.y.floor() as usize).min(shape.height - 1);
        let x1 = (x0 + 1).min(shape.width - 1);
        let y1 = (y0 + 1).min(shape.height - 1);
        Self {
            x0,
            y0,
            x1,
            y1,
            fx: p.x - x0 as f64,
            fy: p.y - y0 as f64,
        }
    }
}

/// Row-major grid of `dim`-vectors.
#[derive(Debug, Clone, PartialEq)]
pub struct VectorField {
    shape: GridShape,
    dim: usize,
    data: Vec<f64>,
}

impl VectorField {
    pub fn zeros(shape: GridShape, dim: usize) -> Result<Self, FieldError> {
        Self::filled(shape, dim, 0.0)
    }

    pub fn filled(shape: GridShape, dim: usize, value: f64) -> Result<Self, FieldError> {
        if dim == 0 {
            return Err(FieldError::ZeroDimension);
        }
        Ok(Self {
            shape,
            dim,
            data: vec![value; shape.len() * dim],
        })
    }

    pub fn from_vec(shape: GridShape, dim: usize, data: Vec<f64>) -> Result<Self, FieldError> {
        if dim == 0 {
            return Err(FieldError::ZeroDimension);
        }
        if data.len() != shape.len() * dim {
            return Err(FieldError::LengthMismatch {
                width: shape.width,
                height: shape.height,
                dim,
                got: data.len(),
            });
        }
        if let Some(i) = data.iter().position(|v| !v.is_finite()) {
            return Err(FieldError::NonFinite(i));
        }
        Ok(Self { shape, dim, data })
    }

    /// Build a field by evaluating `f(pixel_coord, out)` for every pixel.
    pub fn from_fn<F>(shape: GridShape, dim: usize, f: F) -> Result<Self, FieldError>
    where
        F: Fn(PixelCoord, &mut [f64]) + Sync,
    {
        let mut field = Self::zeros(shape, dim)?;
        field
            .data
            .par_chunks_mut(dim)
            .enumerate()
            .for_each(|(i, out)| f(shape.coord(i), out));
        Ok(field)
    }

    #[inline]
    pub fn shape(&self) -> GridShape {
        self.shape
    }

    #[inline]
    pub fn dim(&self) -> usize {
        self.dim
    }

    #[inline]
    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    #[inline]
    pub fn as_mut_slice(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.data
    }

    #[inline]
    pub fn pixel(&self, i: usize) -> &[f64] {
        &self.data[i * self.dim..(i + 1) * self.dim]
    }

    #[inline]
    pub fn pixel_mut(&mut self, i: usize) -> &mut [f64] {
        &mut self.data[i * self.dim..(i + 1) * self.dim]
    }

    #[inline]
    pub fn at(&self, x: usize, y: usize) -> &[f64] {
        self.pixel(self.shape.index(x, y))
    }

    pub fn pixels(&self) -> std::slice::ChunksExact<'_, f64> {
        self.data.chunks_exact(self.dim)
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Bilinear interpolation of the first `out.len()` channels at `at`.
    ///
    /// The query is clamped to the grid before sampling, so every input is
    /// valid. At lattice points the stored vector is returned bit-exactly.
    #[inline]
    pub fn interpolate_into(&self, at: PixelCoord, out: &mut [f64]) {
        debug_assert!(out.len() <= self.dim);
        let s = Stencil::new(self.shape, at);
        let w = self.shape.width;
        let d = self.dim;
        let v00 = &self.data[(s.y0 * w + s.x0) * d..];
        let v10 = &self.data[(s.y0 * w + s.x1) * d..];
        let v01 = &self.data[(s.y1 * w + s.x0) * d..];
        let v11 = &self.data[(s.y1 * w + s.x1) * d..];
        if s.fx == 0.0 && s.fy == 0.0 {
            out.copy_from_slice(&v00[..out.len()]);
            return;
        }
        let (fx, fy) = (s.fx, s.fy);
        for (c, o) in out.iter_mut().enumerate() {
            let top = v00[c] + fx * (v10[c] - v00[c]);
            let bottom = v01[c] + fx * (v11[c] - v01[c]);
            *o = top + fy * (bottom - top);
        }
    }

    pub fn interpolate(&self, at: PixelCoord) -> Vec<f64> {
        let mut out = vec![0.0; self.dim];
        self.interpolate_into(at, &mut out);
        out
    }

    /// Resample the field: `output[i] = interpolate(self, coords[i])`.
    pub fn sample(&self, coords: &[PixelCoord]) -> Result<VectorField, FieldError> {
        if coords.len() != self.shape.len() {
            return Err(FieldError::LengthMismatch {
                width: self.shape.width,
                height: self.shape.height,
                dim: 1,
                got: coords.len(),
            });
        }
        Ok(self.sample_with(|i| coords[i]))
    }

    /// Resample with per-pixel source coordinates produced by `coord`.
    pub fn sample_with<F>(&self, coord: F) -> VectorField
    where
        F: Fn(usize) -> PixelCoord + Sync,
    {
        let mut out = vec![0.0; self.data.len()];
        out.par_chunks_mut(self.dim)
            .enumerate()
            .for_each(|(i, o)| self.interpolate_into(coord(i), o));
        VectorField {
            shape: self.shape,
            dim: self.dim,
            data: out,
        }
    }
}

/// Identity coordinate grid (`coords[i] = x_i`).
pub fn identity_coords(shape: GridShape) -> Vec<PixelCoord> {
    (0..shape.len()).map(|i| shape.coord(i)).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn shape(w: usize, h: usize) -> GridShape {
        GridShape::new(w, h).unwrap()
    }

    fn ramp_x(w: usize, h: usize) -> VectorField {
        VectorField::from_fn(shape(w, h), 1, |p, o| o[0] = p.x).unwrap()
    }

    #[test]
    fn rejects_degenerate_shapes() {
        assert!(GridShape::new(1, 5).is_err());
        assert!(GridShape::new(5, 1).is_err());
        assert!(GridShape::new(2, 2).is_ok());
    }

    #[test]
    fn from_vec_validates() {
        let s = shape(2, 2);
        assert!(matches!(
            VectorField::from_vec(s, 2, vec![0.0; 7]),
            Err(FieldError::LengthMismatch { .. })
        ));
        assert_eq!(
            VectorField::from_vec(s, 1, vec![0.0, f64::NAN, 0.0, 0.0]),
            Err(FieldError::NonFinite(1))
        );
    }

    #[test]
    fn lattice_point_returns_stored_vector() {
        let f = VectorField::from_fn(shape(8, 8), 3, |p, o| {
            o[0] = p.x * 1.3 + 0.1;
            o[1] = (p.y * 7.0).sin();
            o[2] = p.x * p.y;
        })
        .unwrap();
        assert_eq!(
            f.interpolate(PixelCoord::new(3.0, 5.0)),
            f.at(3, 5).to_vec()
        );
    }

    #[test]
    fn midpoint_between_two_nodes() {
        let mut f = VectorField::zeros(shape(2, 2), 1).unwrap();
        f.pixel_mut(1)[0] = 2.0;
        f.pixel_mut(3)[0] = 2.0;
        assert_eq!(f.interpolate(PixelCoord::new(0.5, 0.0)), vec![1.0]);
    }

    #[test]
    fn out_of_bounds_clamps_to_edge() {
        let f = VectorField::from_fn(shape(6, 4), 2, |p, o| {
            o[0] = p.x + 2.0 * p.y;
            o[1] = p.y * p.y;
        })
        .unwrap();
        assert_eq!(
            f.interpolate(PixelCoord::new(-4.2, 1.0)),
            f.interpolate(PixelCoord::new(0.0, 1.0))
        );
        assert_eq!(
            f.interpolate(PixelCoord::new(100.0, 100.0)),
            f.at(5, 3).to_vec()
        );
    }

    #[test]
    fn identity_sampling_is_exact() {
        let f = VectorField::from_fn(shape(7, 5), 2, |p, o| {
            o[0] = (p.x * 0.37).cos();
            o[1] = p.y.sqrt();
        })
        .unwrap();
        let out = f.sample(&identity_coords(f.shape())).unwrap();
        assert_eq!(out, f);
    }

    #[test]
    fn translation_of_row_constant_field() {
        let f = VectorField::from_fn(shape(6, 5), 1, |p, o| o[0] = p.y * 3.0).unwrap();
        let coords: Vec<_> = identity_coords(f.shape())
            .into_iter()
            .map(|p| p.offset(1.0, 0.0))
            .collect();
        assert_eq!(f.sample(&coords).unwrap(), f);
    }

    #[test]
    fn half_pixel_shift_of_ramp_clamps_at_right_edge() {
        let f = ramp_x(5, 3);
        let coords: Vec<_> = identity_coords(f.shape())
            .into_iter()
            .map(|p| p.offset(0.5, 0.0))
            .collect();
        let out = f.sample(&coords).unwrap();
        for i in 0..f.shape().len() {
            let x = f.shape().coord(i).x;
            assert_eq!(out.pixel(i)[0], (x + 0.5).min(4.0));
        }
    }

    #[test]
    fn sample_rejects_wrong_coord_count() {
        let f = ramp_x(3, 3);
        assert!(f.sample(&[PixelCoord::default(); 4]).is_err());
    }
}
