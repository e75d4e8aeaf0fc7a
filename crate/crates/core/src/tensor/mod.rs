//! Dense 4-D tensors and the reference numerical kernels.
//!
//! Everything is f64 and row-major (n, c, h, w). Tensors are immutable
//! values once constructed; all operations here are pure functions.

mod conv;
mod gemm;

pub use conv::{conv2d, conv2d_grad_input, conv2d_grad_weights, conv2d_ref, conv_out_dim};
pub use gemm::{gemm_abt_acc, gemm_acc};

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Shape {
    pub n: usize,
    pub c: usize,
    pub h: usize,
    pub w: usize,
}

impl Shape {
    pub fn new(n: usize, c: usize, h: usize, w: usize) -> Self {
        Shape { n, c, h, w }
    }

    pub fn numel(&self) -> usize {
        self.n * self.c * self.h * self.w
    }

    pub fn scalar() -> Self {
        Shape::new(1, 1, 1, 1)
    }

    pub fn is_scalar(&self) -> bool {
        self.numel() == 1
    }
}

impl std::fmt::Display for Shape {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{}x{}x{}x{}", self.n, self.c, self.h, self.w)
    }
}

/// Dense (n, c, h, w) array of f64, row-major.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    shape: Shape,
    data: Vec<f64>,
}

impl Tensor {
    pub fn zeros(shape: Shape) -> Self {
        Tensor {
            shape,
            data: vec![0.0; shape.numel()],
        }
    }

    pub fn full(shape: Shape, value: f64) -> Self {
        Tensor {
            shape,
            data: vec![value; shape.numel()],
        }
    }

    pub fn scalar(value: f64) -> Self {
        Tensor::full(Shape::scalar(), value)
    }

    pub fn from_vec(shape: Shape, data: Vec<f64>) -> Result<Self> {
        if data.len() != shape.numel() {
            return Err(Error::Shape(format!(
                "data length {} does not match shape {} ({} elements)",
                data.len(),
                shape,
                shape.numel()
            )));
        }
        Ok(Tensor { shape, data })
    }

    pub fn shape(&self) -> Shape {
        self.shape
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.data
    }

    /// Reinterpret the same buffer under a new shape with equal element count.
    pub fn reshaped(mut self, shape: Shape) -> Result<Self> {
        if shape.numel() != self.data.len() {
            return Err(Error::Shape(format!(
                "cannot reshape {} elements to {}",
                self.data.len(),
                shape
            )));
        }
        self.shape = shape;
        Ok(self)
    }

    #[inline]
    pub fn idx(&self, n: usize, c: usize, y: usize, x: usize) -> usize {
        ((n * self.shape.c + c) * self.shape.h + y) * self.shape.w + x
    }

    #[inline]
    pub fn at(&self, n: usize, c: usize, y: usize, x: usize) -> f64 {
        self.data[self.idx(n, c, y, x)]
    }

    #[inline]
    pub fn at_mut(&mut self, n: usize, c: usize, y: usize, x: usize) -> &mut f64 {
        let i = self.idx(n, c, y, x);
        &mut self.data[i]
    }

    /// The contiguous h*w plane of one (sample, channel) pair.
    pub fn plane(&self, n: usize, c: usize) -> &[f64] {
        let hw = self.shape.h * self.shape.w;
        let start = (n * self.shape.c + c) * hw;
        &self.data[start..start + hw]
    }

    pub fn plane_mut(&mut self, n: usize, c: usize) -> &mut [f64] {
        let hw = self.shape.h * self.shape.w;
        let start = (n * self.shape.c + c) * hw;
        &mut self.data[start..start + hw]
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Tensor {
        Tensor {
            shape: self.shape,
            data: self.data.iter().map(|&x| f(x)).collect(),
        }
    }

    pub fn zip_map(&self, other: &Tensor, f: impl Fn(f64, f64) -> f64) -> Result<Tensor> {
        if self.shape != other.shape {
            return Err(Error::Shape(format!(
                "elementwise op on mismatched shapes {} vs {}",
                self.shape, other.shape
            )));
        }
        Ok(Tensor {
            shape: self.shape,
            data: self
                .data
                .iter()
                .zip(other.data.iter())
                .map(|(&a, &b)| f(a, b))
                .collect(),
        })
    }

    pub fn add(&self, other: &Tensor) -> Result<Tensor> {
        self.zip_map(other, |a, b| a + b)
    }

    pub fn sub(&self, other: &Tensor) -> Result<Tensor> {
        self.zip_map(other, |a, b| a - b)
    }

    pub fn mul(&self, other: &Tensor) -> Result<Tensor> {
        self.zip_map(other, |a, b| a * b)
    }

    pub fn scale(&self, k: f64) -> Tensor {
        self.map(|x| k * x)
    }

    pub fn sum(&self) -> f64 {
        self.data.iter().sum()
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }

    /// Largest absolute elementwise difference; shapes must match.
    pub fn max_abs_diff(&self, other: &Tensor) -> f64 {
        assert_eq!(self.shape, other.shape);
        self.data
            .iter()
            .zip(other.data.iter())
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }

    /// Fill with uniform samples from [lo, hi).
    pub fn random_uniform(shape: Shape, lo: f64, hi: f64, rng: &mut crate::rng::Rng) -> Tensor {
        Tensor {
            shape,
            data: (0..shape.numel()).map(|_| rng.uniform(lo, hi)).collect(),
        }
    }

    /// Fill with standard Gaussian samples.
    pub fn random_gaussian(shape: Shape, rng: &mut crate::rng::Rng) -> Tensor {
        Tensor {
            shape,
            data: (0..shape.numel()).map(|_| rng.gaussian()).collect(),
        }
    }
}

/// Convolution kernel weights, shaped (c_out, c_in_per_group, k, k).
#[derive(Clone, Debug, PartialEq)]
pub struct KernelWeights {
    data: Tensor,
    groups: usize,
}

impl KernelWeights {
    pub fn new(data: Tensor, groups: usize) -> Result<Self> {
        let s = data.shape();
        let (c_out, k_h, k_w) = (s.n, s.h, s.w);
        if k_h != k_w {
            return Err(Error::Shape(format!("kernel must be square, got {k_h}x{k_w}")));
        }
        if k_h % 2 == 0 {
            return Err(Error::Shape(format!("kernel size {k_h} must be odd")));
        }
        if groups == 0 || c_out % groups != 0 {
            return Err(Error::Shape(format!(
                "groups {groups} must divide c_out {c_out}"
            )));
        }
        Ok(KernelWeights { data, groups })
    }

    pub fn tensor(&self) -> &Tensor {
        &self.data
    }

    pub fn tensor_mut(&mut self) -> &mut Tensor {
        &mut self.data
    }

    pub fn groups(&self) -> usize {
        self.groups
    }

    pub fn c_out(&self) -> usize {
        self.data.shape().n
    }

    pub fn c_in_per_group(&self) -> usize {
        self.data.shape().c
    }

    /// Total input channels the kernel applies to.
    pub fn c_in(&self) -> usize {
        self.c_in_per_group() * self.groups
    }

    pub fn k(&self) -> usize {
        self.data.shape().h
    }
}

/// Which axes a reduction collapses.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Axes {
    pub n: bool,
    pub c: bool,
    pub h: bool,
    pub w: bool,
}

impl Axes {
    /// Per-channel batch statistics (BatchNorm).
    pub const NHW: Axes = Axes { n: true, c: false, h: true, w: true };
    /// Per-(sample, channel) spatial statistics (InstanceNorm).
    pub const HW: Axes = Axes { n: false, c: false, h: true, w: true };
    /// Per-sample statistics (LayerNorm).
    pub const CHW: Axes = Axes { n: false, c: true, h: true, w: true };
    /// Per-location channel statistics (feature norm).
    pub const C: Axes = Axes { n: false, c: true, h: false, w: false };
    pub const NONE: Axes = Axes { n: false, c: false, h: false, w: false };

    pub fn any(&self) -> bool {
        self.n || self.c || self.h || self.w
    }
}

/// Population mean and variance over the selected axes.
///
/// Outputs keep the input rank with reduced extents set to 1, so they
/// broadcast back over the input positionally.
pub fn reduce_moments(input: &Tensor, axes: Axes) -> Result<(Tensor, Tensor)> {
    if !axes.any() {
        return Err(Error::InvalidArg("reduce_moments: empty axis set".into()));
    }
    let s = input.shape();
    let count = (if axes.n { s.n } else { 1 })
        * (if axes.c { s.c } else { 1 })
        * (if axes.h { s.h } else { 1 })
        * (if axes.w { s.w } else { 1 });
    if count == 0 {
        return Err(Error::InvalidArg(
            "reduce_moments: reduction extent is zero".into(),
        ));
    }
    let out_shape = Shape::new(
        if axes.n { 1 } else { s.n },
        if axes.c { 1 } else { s.c },
        if axes.h { 1 } else { s.h },
        if axes.w { 1 } else { s.w },
    );
    let mut mean = Tensor::zeros(out_shape);
    let mut var = Tensor::zeros(out_shape);

    // Two passes for numerical robustness of the variance.
    for n in 0..s.n {
        for c in 0..s.c {
            for y in 0..s.h {
                for x in 0..s.w {
                    let gi = group_index(&mean, axes, n, c, y, x);
                    mean.data[gi] += input.at(n, c, y, x);
                }
            }
        }
    }
    for v in mean.data.iter_mut() {
        *v /= count as f64;
    }
    for n in 0..s.n {
        for c in 0..s.c {
            for y in 0..s.h {
                for x in 0..s.w {
                    let gi = group_index(&var, axes, n, c, y, x);
                    let d = input.at(n, c, y, x) - mean.data[gi];
                    var.data[gi] += d * d;
                }
            }
        }
    }
    for v in var.data.iter_mut() {
        *v /= count as f64;
    }
    Ok((mean, var))
}

#[inline]
pub(crate) fn group_index(out: &Tensor, axes: Axes, n: usize, c: usize, y: usize, x: usize) -> usize {
    out.idx(
        if axes.n { 0 } else { n },
        if axes.c { 0 } else { c },
        if axes.h { 0 } else { y },
        if axes.w { 0 } else { x },
    )
}

/// Bilinear interpolation of one channel plane at pixel-unit coordinates.
///
/// (0, 0) is the top-left pixel center; out-of-bounds neighbors read as zero.
pub fn bilinear_sample(input: &Tensor, y: f64, x: f64, n: usize, c: usize) -> f64 {
    let s = input.shape();
    let plane = input.plane(n, c);
    sample_plane(plane, s.h, s.w, y, x)
}

/// Bilinear sample of a raw h*w plane. Shared by the deformable kernels.
#[inline]
pub(crate) fn sample_plane(plane: &[f64], h: usize, w: usize, y: f64, x: f64) -> f64 {
    let y0 = y.floor();
    let x0 = x.floor();
    let dy = y - y0;
    let dx = x - x0;
    let y0 = y0 as i64;
    let x0 = x0 as i64;
    let fetch = |yy: i64, xx: i64| -> f64 {
        if yy < 0 || xx < 0 || yy >= h as i64 || xx >= w as i64 {
            0.0
        } else {
            plane[yy as usize * w + xx as usize]
        }
    };
    let v00 = fetch(y0, x0);
    let v01 = fetch(y0, x0 + 1);
    let v10 = fetch(y0 + 1, x0);
    let v11 = fetch(y0 + 1, x0 + 1);
    (1.0 - dy) * ((1.0 - dx) * v00 + dx * v01) + dy * ((1.0 - dx) * v10 + dx * v11)
}

/// Value plus spatial partials (d/dy, d/dx) of a bilinear sample.
///
/// At exact integer coordinates the partials use the right-continuous
/// corner (floor) convention.
#[inline]
pub(crate) fn sample_plane_with_grad(
    plane: &[f64],
    h: usize,
    w: usize,
    y: f64,
    x: f64,
) -> (f64, f64, f64) {
    let y0 = y.floor();
    let x0 = x.floor();
    let dy = y - y0;
    let dx = x - x0;
    let y0 = y0 as i64;
    let x0 = x0 as i64;
    let fetch = |yy: i64, xx: i64| -> f64 {
        if yy < 0 || xx < 0 || yy >= h as i64 || xx >= w as i64 {
            0.0
        } else {
            plane[yy as usize * w + xx as usize]
        }
    };
    let v00 = fetch(y0, x0);
    let v01 = fetch(y0, x0 + 1);
    let v10 = fetch(y0 + 1, x0);
    let v11 = fetch(y0 + 1, x0 + 1);
    let value = (1.0 - dy) * ((1.0 - dx) * v00 + dx * v01) + dy * ((1.0 - dx) * v10 + dx * v11);
    let d_dy = (1.0 - dx) * (v10 - v00) + dx * (v11 - v01);
    let d_dx = (1.0 - dy) * (v01 - v00) + dy * (v11 - v10);
    (value, d_dy, d_dx)
}

/// Scatter `g` into the four neighbors of (y, x) with bilinear weights,
/// skipping out-of-bounds corners. The adjoint of `sample_plane`.
#[inline]
pub(crate) fn scatter_plane(plane: &mut [f64], h: usize, w: usize, y: f64, x: f64, g: f64) {
    let y0f = y.floor();
    let x0f = x.floor();
    let dy = y - y0f;
    let dx = x - x0f;
    let y0 = y0f as i64;
    let x0 = x0f as i64;
    let mut put = |yy: i64, xx: i64, wgt: f64| {
        if yy >= 0 && xx >= 0 && yy < h as i64 && xx < w as i64 {
            plane[yy as usize * w + xx as usize] += wgt * g;
        }
    };
    put(y0, x0, (1.0 - dy) * (1.0 - dx));
    put(y0, x0 + 1, (1.0 - dy) * dx);
    put(y0 + 1, x0, dy * (1.0 - dx));
    put(y0 + 1, x0 + 1, dy * dx);
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::Rng;

    #[test]
    fn from_vec_rejects_bad_length() {
        assert!(Tensor::from_vec(Shape::new(1, 1, 2, 2), vec![1.0; 3]).is_err());
    }

    #[test]
    fn bilinear_integer_coords_hit_stored_pixels() {
        let t = Tensor::from_vec(
            Shape::new(1, 1, 3, 4),
            (0..12).map(|i| i as f64).collect(),
        )
        .unwrap();
        assert_eq!(bilinear_sample(&t, 1.0, 2.0, 0, 0), t.at(0, 0, 1, 2));
        assert_eq!(bilinear_sample(&t, 0.0, 0.0, 0, 0), t.at(0, 0, 0, 0));
    }

    #[test]
    fn bilinear_center_of_2x2_averages() {
        let t = Tensor::from_vec(Shape::new(1, 1, 2, 2), vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        assert_eq!(bilinear_sample(&t, 0.5, 0.5, 0, 0), 2.5);
    }

    #[test]
    fn bilinear_far_out_of_bounds_is_zero() {
        let t = Tensor::full(Shape::new(1, 1, 2, 2), 9.0);
        assert_eq!(bilinear_sample(&t, -5.0, -5.0, 0, 0), 0.0);
    }

    #[test]
    fn bilinear_is_convex_combination_of_neighbors() {
        let mut rng = Rng::seed_from(11);
        let t = Tensor::random_uniform(Shape::new(1, 1, 5, 5), -2.0, 2.0, &mut rng);
        for _ in 0..500 {
            let y = rng.uniform(-1.5, 5.5);
            let x = rng.uniform(-1.5, 5.5);
            let v = bilinear_sample(&t, y, x, 0, 0);
            // Collect the four touched values, zero standing in for OOB.
            let y0 = y.floor() as i64;
            let x0 = x.floor() as i64;
            let mut lo = f64::INFINITY;
            let mut hi = f64::NEG_INFINITY;
            for (yy, xx) in [(y0, x0), (y0, x0 + 1), (y0 + 1, x0), (y0 + 1, x0 + 1)] {
                let val = if yy < 0 || xx < 0 || yy >= 5 || xx >= 5 {
                    0.0
                } else {
                    t.at(0, 0, yy as usize, xx as usize)
                };
                lo = lo.min(val);
                hi = hi.max(val);
            }
            assert!(v >= lo - 1e-12 && v <= hi + 1e-12, "{v} not in [{lo},{hi}]");
        }
    }

    #[test]
    fn sample_grad_matches_finite_differences() {
        let mut rng = Rng::seed_from(5);
        let t = Tensor::random_uniform(Shape::new(1, 1, 6, 6), -1.0, 1.0, &mut rng);
        let plane = t.plane(0, 0);
        for _ in 0..200 {
            let y = rng.uniform(0.1, 4.9);
            let x = rng.uniform(0.1, 4.9);
            let (_, gy, gx) = sample_plane_with_grad(plane, 6, 6, y, x);
            let e = 1e-6;
            let fy = (sample_plane(plane, 6, 6, y + e, x) - sample_plane(plane, 6, 6, y - e, x))
                / (2.0 * e);
            let fx = (sample_plane(plane, 6, 6, y, x + e) - sample_plane(plane, 6, 6, y, x - e))
                / (2.0 * e);
            assert!((gy - fy).abs() < 1e-6, "gy {gy} vs fd {fy}");
            assert!((gx - fx).abs() < 1e-6, "gx {gx} vs fd {fx}");
        }
    }

    #[test]
    fn moments_of_constant_tensor() {
        let t = Tensor::full(Shape::new(2, 3, 4, 4), 5.0);
        for axes in [Axes::NHW, Axes::HW, Axes::CHW, Axes::C] {
            let (mean, var) = reduce_moments(&t, axes).unwrap();
            assert!(mean.data().iter().all(|&m| (m - 5.0).abs() < 1e-12));
            assert!(var.data().iter().all(|&v| v.abs() < 1e-12));
        }
    }

    #[test]
    fn moments_of_two_values() {
        let t = Tensor::from_vec(Shape::new(1, 1, 1, 2), vec![1.0, 3.0]).unwrap();
        let (mean, var) = reduce_moments(&t, Axes::HW).unwrap();
        assert_eq!(mean.data()[0], 2.0);
        assert_eq!(var.data()[0], 1.0);
    }

    #[test]
    fn moments_reject_empty_axis_set() {
        let t = Tensor::zeros(Shape::new(1, 1, 2, 2));
        assert!(reduce_moments(&t, Axes::NONE).is_err());
    }

    #[test]
    fn moments_shapes_broadcast_back() {
        let t = Tensor::zeros(Shape::new(2, 3, 4, 5));
        let (mean, _) = reduce_moments(&t, Axes::NHW).unwrap();
        assert_eq!(mean.shape(), Shape::new(1, 3, 1, 1));
        let (mean, _) = reduce_moments(&t, Axes::C).unwrap();
        assert_eq!(mean.shape(), Shape::new(2, 1, 4, 5));
    }

    #[test]
    fn kernel_weights_validate() {
        let t = Tensor::zeros(Shape::new(4, 2, 3, 3));
        assert!(KernelWeights::new(t.clone(), 2).is_ok());
        assert!(KernelWeights::new(t.clone(), 3).is_err());
        let even = Tensor::zeros(Shape::new(4, 2, 2, 2));
        assert!(KernelWeights::new(even, 1).is_err());
    }
}
