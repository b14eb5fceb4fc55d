//! Differentiable ROI transform: crop a box from a raw image by mapping a
//! normalized target grid through a closed-form affine matrix and bilinearly
//! sampling the source, with analytic gradients w.r.t. both the source image
//! and the four box coordinates.
//!
//! Coordinate convention: origin at the top-left, x = column index,
//! y = row index, pixel centers at integer coordinates. Reads outside the
//! image are zero-padded and contribute no gradient.

use crate::error::{Error, Result};
use crate::grid::Grid2D;

/// Bounding box as continuous pixel coordinates: (x-left, y-top, x-right,
/// y-bottom). The four coordinates are the free variables of refinement.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BBox {
    pub m1: f64,
    pub n1: f64,
    pub m2: f64,
    pub n2: f64,
}

/// Minimum box side length in pixels.
pub const MIN_BOX_SIDE: f64 = 2.0;

impl BBox {
    pub fn new(m1: f64, n1: f64, m2: f64, n2: f64) -> Result<Self> {
        let b = BBox { m1, n1, m2, n2 };
        b.validate()?;
        Ok(b)
    }

    pub fn validate(&self) -> Result<()> {
        let ok = [self.m1, self.n1, self.m2, self.n2]
            .iter()
            .all(|v| v.is_finite())
            && self.width() >= MIN_BOX_SIDE
            && self.height() >= MIN_BOX_SIDE;
        if ok {
            Ok(())
        } else {
            Err(Error::DegenerateBox {
                m1: self.m1,
                n1: self.n1,
                m2: self.m2,
                n2: self.n2,
            })
        }
    }

    pub fn width(&self) -> f64 {
        self.m2 - self.m1
    }

    pub fn height(&self) -> f64 {
        self.n2 - self.n1
    }

    pub fn center(&self) -> (f64, f64) {
        ((self.m1 + self.m2) / 2.0, (self.n1 + self.n2) / 2.0)
    }

    pub fn area(&self) -> f64 {
        self.width() * self.height()
    }
}

/// 2x3 affine matrix mapping normalized target coordinates to source pixels.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AffineMatrix {
    pub a11: f64,
    pub a12: f64,
    pub a13: f64,
    pub a21: f64,
    pub a22: f64,
    pub a23: f64,
}

impl AffineMatrix {
    /// Applies the matrix to homogeneous target coordinates (x, y, 1).
    #[inline]
    pub fn apply(&self, x: f64, y: f64) -> (f64, f64) {
        (
            self.a11 * x + self.a12 * y + self.a13,
            self.a21 * x + self.a22 * y + self.a23,
        )
    }
}

/// Closed-form transform matrix of a box: the target square [-1,1]^2 maps
/// onto the box, so A = 1/2 [[m2-m1, 0, m2+m1], [0, n2-n1, n2+n1]].
pub fn affine_from_box(b: &BBox) -> Result<AffineMatrix> {
    b.validate()?;
    Ok(AffineMatrix {
        a11: (b.m2 - b.m1) / 2.0,
        a12: 0.0,
        a13: (b.m2 + b.m1) / 2.0,
        a21: 0.0,
        a22: (b.n2 - b.n1) / 2.0,
        a23: (b.n2 + b.n1) / 2.0,
    })
}

/// Regular normalized grid over the output image: H*W pairs spanning
/// [-1, 1]^2 inclusive, row-major with x varying fastest.
#[derive(Debug, Clone, PartialEq)]
pub struct TargetGrid {
    h: usize,
    w: usize,
    xs: Vec<f64>,
    ys: Vec<f64>,
}

impl TargetGrid {
    pub fn h(&self) -> usize {
        self.h
    }

    pub fn w(&self) -> usize {
        self.w
    }

    /// Number of grid points (H * W).
    pub fn len(&self) -> usize {
        self.h * self.w
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// The k-th point in row-major order.
    #[inline]
    pub fn point(&self, k: usize) -> (f64, f64) {
        (self.xs[k % self.w], self.ys[k / self.w])
    }

    pub fn xs(&self) -> &[f64] {
        &self.xs
    }

    pub fn ys(&self) -> &[f64] {
        &self.ys
    }
}

pub fn make_target_grid(h: usize, w: usize) -> Result<TargetGrid> {
    if h < 2 || w < 2 {
        return Err(Error::GridTooSmall { h, w });
    }
    let axis = |n: usize| -> Vec<f64> {
        (0..n)
            .map(|i| -1.0 + 2.0 * i as f64 / (n - 1) as f64)
            .collect()
    };
    Ok(TargetGrid {
        h,
        w,
        xs: axis(w),
        ys: axis(h),
    })
}

/// Continuous source-pixel positions, one per target grid point.
#[derive(Debug, Clone, PartialEq)]
pub struct SourceGrid {
    h: usize,
    w: usize,
    points: Vec<(f64, f64)>,
}

impl SourceGrid {
    pub fn h(&self) -> usize {
        self.h
    }

    pub fn w(&self) -> usize {
        self.w
    }

    pub fn points(&self) -> &[(f64, f64)] {
        &self.points
    }
}

/// Maps every target grid point through the affine matrix.
pub fn map_grid(a: &AffineMatrix, t: &TargetGrid) -> SourceGrid {
    let mut points = Vec::with_capacity(t.len());
    for y in t.ys() {
        for x in t.xs() {
            points.push(a.apply(*x, *y));
        }
    }
    SourceGrid {
        h: t.h,
        w: t.w,
        points,
    }
}

/// Forward-pass cache: corner indices and interpolation fractions per sample.
#[derive(Debug, Clone)]
pub struct SampleCache {
    source: SourceGrid,
    target: TargetGrid,
    corners: Vec<(i64, i64)>,
    fracs: Vec<(f64, f64)>,
    src_shape: (usize, usize, usize),
}

/// A crop plus everything the backward pass needs.
#[derive(Debug, Clone)]
pub struct CropResult {
    pub v: Grid2D,
    pub cache: SampleCache,
}

#[inline]
fn read_or_zero(u: &Grid2D, row: i64, col: i64, ch: usize) -> f64 {
    if row >= 0 && col >= 0 && (row as usize) < u.rows() && (col as usize) < u.cols() {
        u.get(row as usize, col as usize, ch)
    } else {
        0.0
    }
}

/// Bilinearly samples `u` at every point of `s`, zero-padding out-of-bounds
/// reads. The interpolation cell of a sample with integer coordinate is the
/// one to its right/below, so forward and backward agree at cell boundaries.
pub fn sample_crop(u: &Grid2D, s: &SourceGrid, t: &TargetGrid) -> Result<CropResult> {
    if !u.is_finite() {
        return Err(Error::NonFinite {
            context: "sample_crop source",
        });
    }
    let (h, w, c) = (s.h, s.w, u.channels());
    let mut v = Grid2D::zeros(h, w, c);
    let mut corners = Vec::with_capacity(s.points.len());
    let mut fracs = Vec::with_capacity(s.points.len());

    for (k, &(x, y)) in s.points.iter().enumerate() {
        let x0 = x.floor();
        let y0 = y.floor();
        let dx = x - x0;
        let dy = y - y0;
        let (xi, yi) = (x0 as i64, y0 as i64);
        corners.push((xi, yi));
        fracs.push((dx, dy));
        let (row, col) = (k / w, k % w);
        for ch in 0..c {
            let u00 = read_or_zero(u, yi, xi, ch);
            let u01 = read_or_zero(u, yi, xi + 1, ch);
            let u10 = read_or_zero(u, yi + 1, xi, ch);
            let u11 = read_or_zero(u, yi + 1, xi + 1, ch);
            let value = (1.0 - dx) * (1.0 - dy) * u00
                + dx * (1.0 - dy) * u01
                + (1.0 - dx) * dy * u10
                + dx * dy * u11;
            v.set(row, col, ch, value);
        }
    }

    Ok(CropResult {
        v,
        cache: SampleCache {
            source: s.clone(),
            target: t.clone(),
            corners,
            fracs,
            src_shape: u.shape(),
        },
    })
}

/// Convenience forward: box -> affine -> grid -> crop.
pub fn crop_box(u: &Grid2D, b: &BBox, h: usize, w: usize) -> Result<CropResult> {
    let a = affine_from_box(b)?;
    let t = make_target_grid(h, w)?;
    let s = map_grid(&a, &t);
    sample_crop(u, &s, &t)
}

/// Gradient of the crop w.r.t. the four box coordinates, as (m1, n1, m2, n2).
pub type BoxGrad = [f64; 4];

/// Smallest distance from any source sample of the box's H x W grid to the
/// integer lattice, per axis. Finite-difference probes need this clearance
/// to stay within one interpolation cell.
pub fn lattice_clearance(b: &BBox, h: usize, w: usize) -> Result<f64> {
    let a = affine_from_box(b)?;
    let t = make_target_grid(h, w)?;
    let dist = |v: f64| (v - v.round()).abs();
    let min_x = t
        .xs()
        .iter()
        .map(|&xt| dist(a.apply(xt, -1.0).0))
        .fold(f64::INFINITY, f64::min);
    let min_y = t
        .ys()
        .iter()
        .map(|&yt| dist(a.apply(-1.0, yt).1))
        .fold(f64::INFINITY, f64::min);
    Ok(min_x.min(min_y))
}

/// Translates the box by sub-pixel steps until every source sample clears
/// the integer lattice by `guard`. Keeps the box size; the returned box is
/// within one pixel of the input.
pub fn nudge_off_lattice(b: &BBox, h: usize, w: usize, guard: f64) -> Result<BBox> {
    let a = affine_from_box(b)?;
    let t = make_target_grid(h, w)?;
    let dist = |v: f64| (v - v.round()).abs();
    let find_shift = |base: &[f64]| -> Option<f64> {
        for k in 0..1000 {
            let shift = (k as f64) * 0.0137 % 1.0;
            if base.iter().all(|&v| dist(v + shift) > guard) {
                return Some(shift);
            }
        }
        None
    };
    let xs: Vec<f64> = t.xs().iter().map(|&xt| a.apply(xt, -1.0).0).collect();
    let ys: Vec<f64> = t.ys().iter().map(|&yt| a.apply(-1.0, yt).1).collect();
    let sx = find_shift(&xs).ok_or(Error::PerturbRejection { attempts: 1000 })?;
    let sy = find_shift(&ys).ok_or(Error::PerturbRejection { attempts: 1000 })?;
    Ok(BBox {
        m1: b.m1 + sx,
        n1: b.n1 + sy,
        m2: b.m2 + sx,
        n2: b.n2 + sy,
    })
}

/// Backward pass of [`sample_crop`]: scatters interpolation weights into
/// `dL/dU` and chains the bilinear spatial derivative through the affine
/// dependence of each source point on the box coordinates
/// (`dx_s/dm1 = (1 - x_t)/2`, `dx_s/dm2 = (1 + x_t)/2`, same for y with n).
pub fn crop_backward(cache: &SampleCache, dl_dv: &Grid2D, u: &Grid2D) -> Result<(Grid2D, BoxGrad)> {
    let (h, w) = (cache.source.h, cache.source.w);
    if dl_dv.shape() != (h, w, u.channels()) {
        return Err(Error::ShapeMismatch {
            context: "crop_backward upstream gradient",
            expected: (h, w, u.channels()),
            got: dl_dv.shape(),
        });
    }
    if u.shape() != cache.src_shape {
        return Err(Error::ShapeMismatch {
            context: "crop_backward source image",
            expected: cache.src_shape,
            got: u.shape(),
        });
    }

    let c = u.channels();
    let mut dl_du = Grid2D::zeros(u.rows(), u.cols(), c);
    let mut grad: BoxGrad = [0.0; 4];

    for k in 0..cache.corners.len() {
        let (xi, yi) = cache.corners[k];
        let (dx, dy) = cache.fracs[k];
        let (xt, yt) = cache.target.point(k);
        let (row, col) = (k / w, k % w);

        let mut dl_dxs = 0.0;
        let mut dl_dys = 0.0;
        for ch in 0..c {
            let g = dl_dv.get(row, col, ch);
            if g == 0.0 {
                continue;
            }
            let u00 = read_or_zero(u, yi, xi, ch);
            let u01 = read_or_zero(u, yi, xi + 1, ch);
            let u10 = read_or_zero(u, yi + 1, xi, ch);
            let u11 = read_or_zero(u, yi + 1, xi + 1, ch);

            scatter(&mut dl_du, yi, xi, ch, (1.0 - dx) * (1.0 - dy) * g);
            scatter(&mut dl_du, yi, xi + 1, ch, dx * (1.0 - dy) * g);
            scatter(&mut dl_du, yi + 1, xi, ch, (1.0 - dx) * dy * g);
            scatter(&mut dl_du, yi + 1, xi + 1, ch, dx * dy * g);

            dl_dxs += g * ((1.0 - dy) * (u01 - u00) + dy * (u11 - u10));
            dl_dys += g * ((1.0 - dx) * (u10 - u00) + dx * (u11 - u01));
        }

        grad[0] += dl_dxs * (1.0 - xt) / 2.0;
        grad[2] += dl_dxs * (1.0 + xt) / 2.0;
        grad[1] += dl_dys * (1.0 - yt) / 2.0;
        grad[3] += dl_dys * (1.0 + yt) / 2.0;
    }

    Ok((dl_du, grad))
}

#[inline]
fn scatter(g: &mut Grid2D, row: i64, col: i64, ch: usize, value: f64) {
    if row >= 0 && col >= 0 && (row as usize) < g.rows() && (col as usize) < g.cols() {
        g.add_at(row as usize, col as usize, ch, value);
    }
}
