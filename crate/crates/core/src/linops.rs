//! Matrix-free linear operators of the saddle-point problem.
//!
//! Pixel images are stored row-major; `i = y * width + x`. The discrete
//! gradient uses forward differences with a zero difference at the right and
//! bottom borders, and `div` is its exact negative adjoint.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{Error, Result};
use crate::features::{BinMap, Histogram};

/// Relaxed segmentation `u: Ω → [0,1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct ProbabilityMap {
    pub width: usize,
    pub height: usize,
    pub values: Vec<f64>,
}

impl ProbabilityMap {
    pub fn new(width: usize, height: usize, values: Vec<f64>) -> Result<Self> {
        if values.len() != width * height {
            return Err(Error::dims(format!("{} values for {width}x{height}", values.len())));
        }
        Ok(Self { width, height, values })
    }

    pub fn constant(width: usize, height: usize, value: f64) -> Self {
        Self { width, height, values: vec![value; width * height] }
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }
}

/// A 2-vector per pixel, split into its two component planes.
#[derive(Debug, Clone, PartialEq)]
pub struct VectorField {
    pub width: usize,
    pub height: usize,
    pub x: Vec<f64>,
    pub y: Vec<f64>,
}

impl VectorField {
    pub fn zeros(width: usize, height: usize) -> Self {
        Self { width, height, x: vec![0.0; width * height], y: vec![0.0; width * height] }
    }
}

/// Forward-difference gradient into `out_x`, `out_y`.
pub fn grad_into(width: usize, height: usize, u: &[f64], out_x: &mut [f64], out_y: &mut [f64]) {
    for y in 0..height {
        let row = y * width;
        for x in 0..width {
            let i = row + x;
            out_x[i] = if x + 1 < width { u[i + 1] - u[i] } else { 0.0 };
            out_y[i] = if y + 1 < height { u[i + width] - u[i] } else { 0.0 };
        }
    }
}

pub fn grad(u: &ProbabilityMap) -> VectorField {
    let mut field = VectorField::zeros(u.width, u.height);
    grad_into(u.width, u.height, &u.values, &mut field.x, &mut field.y);
    field
}

/// Divergence `-∇ᵀ`, accumulated as `out += scale * div(p)`.
pub fn div_accumulate(width: usize, height: usize, px: &[f64], py: &[f64], scale: f64, out: &mut [f64]) {
    for y in 0..height {
        let row = y * width;
        for x in 0..width {
            let i = row + x;
            let mut d = 0.0;
            if x + 1 < width {
                d += px[i];
            }
            if x > 0 {
                d -= px[i - 1];
            }
            if y + 1 < height {
                d += py[i];
            }
            if y > 0 {
                d -= py[i - width];
            }
            out[i] += scale * d;
        }
    }
}

pub fn div(p: &VectorField) -> Vec<f64> {
    let mut out = vec![0.0; p.width * p.height];
    div_accumulate(p.width, p.height, &p.x, &p.y, 1.0, &mut out);
    out
}

/// Isotropic total variation `Σ_x ‖∇u(x)‖₂`.
pub fn total_variation(width: usize, height: usize, u: &[f64]) -> f64 {
    let mut tv = 0.0;
    for y in 0..height {
        for x in 0..width {
            let i = y * width + x;
            let gx = if x + 1 < width { u[i + 1] - u[i] } else { 0.0 };
            let gy = if y + 1 < height { u[i + width] - u[i] } else { 0.0 };
            tv += gx.hypot(gy);
        }
    }
    tv
}

/// Histogram operator `H`: per-bin scatter-add of `u`.
pub fn apply_h(bins: &BinMap, u: &[f64]) -> Vec<f64> {
    let mut out = vec![0.0; bins.m];
    apply_h_accumulate(bins, u, 1.0, &mut out);
    out
}

pub fn apply_h_accumulate(bins: &BinMap, u: &[f64], scale: f64, out: &mut [f64]) {
    for (&b, &v) in bins.bins.iter().zip(u) {
        out[b as usize] += scale * v;
    }
}

/// Adjoint `Hᵀq`: each pixel gathers the value of its bin.
pub fn apply_h_adj(bins: &BinMap, q: &[f64]) -> Vec<f64> {
    bins.bins.iter().map(|&b| q[b as usize]).collect()
}

/// Rank-one operator `A = a 1ᵀ`: `Au = a ⟨u,1⟩`.
pub fn apply_rank_one(a: &Histogram, u: &[f64]) -> Vec<f64> {
    let mass: f64 = u.iter().sum();
    a.0.iter().map(|v| v * mass).collect()
}

/// Adjoint of the rank-one operator: the constant image `⟨a,q⟩`.
pub fn apply_rank_one_adj(a: &Histogram, q: &[f64], pixels: usize) -> Vec<f64> {
    vec![dot(&a.0, q); pixels]
}

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub fn norm2(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}

/// Dual variables `p = (p_A, q_A, p_B, q_B, p_C)`.
#[derive(Debug, Clone, PartialEq)]
pub struct DualStack {
    pub p_a: Vec<f64>,
    pub q_a: Vec<f64>,
    pub p_b: Vec<f64>,
    pub q_b: Vec<f64>,
    pub p_c: VectorField,
}

impl DualStack {
    pub fn zeros(m: usize, width: usize, height: usize) -> Self {
        Self {
            p_a: vec![0.0; m],
            q_a: vec![0.0; m],
            p_b: vec![0.0; m],
            q_b: vec![0.0; m],
            p_c: VectorField::zeros(width, height),
        }
    }

    /// Concatenation `[p_A, q_A, p_B, q_B, p_C.x, p_C.y]`.
    pub fn to_flat(&self) -> Vec<f64> {
        let mut v = Vec::with_capacity(4 * self.p_a.len() + 2 * self.p_c.x.len());
        for part in [&self.p_a, &self.q_a, &self.p_b, &self.q_b, &self.p_c.x, &self.p_c.y] {
            v.extend_from_slice(part);
        }
        v
    }

    pub fn from_flat(flat: &[f64], m: usize, width: usize, height: usize) -> Result<Self> {
        let n = width * height;
        if flat.len() != 4 * m + 2 * n {
            return Err(Error::dims(format!("dual vector of length {} for M={m}, N={n}", flat.len())));
        }
        let seg = |k: usize| flat[k * m..(k + 1) * m].to_vec();
        Ok(Self {
            p_a: seg(0),
            q_a: seg(1),
            p_b: seg(2),
            q_b: seg(3),
            p_c: VectorField {
                width,
                height,
                x: flat[4 * m..4 * m + n].to_vec(),
                y: flat[4 * m + n..].to_vec(),
            },
        })
    }
}

/// A real linear map between flat vectors, with its adjoint.
pub trait LinearOperator {
    fn input_len(&self) -> usize;
    fn output_len(&self) -> usize;
    /// `y = K x` (overwrites `y`).
    fn apply(&self, x: &[f64], y: &mut [f64]);
    /// `x = Kᵀ y` (overwrites `x`).
    fn apply_adjoint(&self, y: &[f64], x: &mut [f64]);
}

/// The stacked segmentation operator `K = [H; A; -H; -B; ∇]`.
#[derive(Debug, Clone)]
pub struct SegmentationOperator<'a> {
    pub bins: &'a BinMap,
    pub a: &'a Histogram,
    pub b: &'a Histogram,
}

impl<'a> SegmentationOperator<'a> {
    pub fn new(bins: &'a BinMap, a: &'a Histogram, b: &'a Histogram) -> Result<Self> {
        if a.len() != bins.m || b.len() != bins.m {
            return Err(Error::dims(format!(
                "exemplar histograms of length {}/{} for M={}",
                a.len(),
                b.len(),
                bins.m
            )));
        }
        Ok(Self { bins, a, b })
    }

    pub fn apply_k(&self, u: &ProbabilityMap) -> DualStack {
        let mut out = vec![0.0; self.output_len()];
        self.apply(&u.values, &mut out);
        DualStack::from_flat(&out, self.bins.m, self.bins.width, self.bins.height).expect("sized by operator")
    }

    pub fn apply_k_adj(&self, p: &DualStack) -> ProbabilityMap {
        let mut out = vec![0.0; self.input_len()];
        self.apply_adjoint(&p.to_flat(), &mut out);
        ProbabilityMap { width: self.bins.width, height: self.bins.height, values: out }
    }
}

impl LinearOperator for SegmentationOperator<'_> {
    fn input_len(&self) -> usize {
        self.bins.pixel_count()
    }

    fn output_len(&self) -> usize {
        4 * self.bins.m + 2 * self.bins.pixel_count()
    }

    fn apply(&self, u: &[f64], y: &mut [f64]) {
        let m = self.bins.m;
        let n = self.bins.pixel_count();
        let (w, h) = (self.bins.width, self.bins.height);
        let hist = apply_h(self.bins, u);
        let mass: f64 = u.iter().sum();
        for i in 0..m {
            y[i] = hist[i];
            y[m + i] = self.a.0[i] * mass;
            y[2 * m + i] = -hist[i];
            y[3 * m + i] = -self.b.0[i] * mass;
        }
        let (gx, gy) = y[4 * m..].split_at_mut(n);
        grad_into(w, h, u, gx, gy);
    }

    fn apply_adjoint(&self, y: &[f64], x: &mut [f64]) {
        let m = self.bins.m;
        let n = self.bins.pixel_count();
        let (w, h) = (self.bins.width, self.bins.height);
        let (p_a, rest) = y.split_at(m);
        let (q_a, rest) = rest.split_at(m);
        let (p_b, rest) = rest.split_at(m);
        let (q_b, pc) = rest.split_at(m);
        let constant = dot(&self.a.0, q_a) - dot(&self.b.0, q_b);
        for (xi, &bin) in x.iter_mut().zip(&self.bins.bins) {
            let k = bin as usize;
            *xi = p_a[k] - p_b[k] + constant;
        }
        div_accumulate(w, h, &pc[..n], &pc[n..], -1.0, x);
    }
}

/// Forward-difference gradient as a standalone operator.
#[derive(Debug, Clone, Copy)]
pub struct GradientOperator {
    pub width: usize,
    pub height: usize,
}

impl LinearOperator for GradientOperator {
    fn input_len(&self) -> usize {
        self.width * self.height
    }

    fn output_len(&self) -> usize {
        2 * self.width * self.height
    }

    fn apply(&self, x: &[f64], y: &mut [f64]) {
        let (gx, gy) = y.split_at_mut(self.input_len());
        grad_into(self.width, self.height, x, gx, gy);
    }

    fn apply_adjoint(&self, y: &[f64], x: &mut [f64]) {
        let n = self.input_len();
        x.iter_mut().for_each(|v| *v = 0.0);
        div_accumulate(self.width, self.height, &y[..n], &y[n..], -1.0, x);
    }
}

/// Safety factor applied to power-iteration norm estimates.
pub const OP_NORM_INFLATION: f64 = 1.01;

/// Estimates `‖K‖` by power iteration on `KᵀK` from a seeded Gaussian start,
/// returning the square root of the Rayleigh quotient inflated by 1%.
pub fn op_norm(op: &dyn LinearOperator, iters: usize, seed: u64) -> Result<f64> {
    if iters < 20 {
        return Err(Error::invalid(format!("op_norm needs at least 20 iterations, got {iters}")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut x: Vec<f64> = (0..op.input_len()).map(|_| StandardNormal.sample(&mut rng)).collect();
    let mut y = vec![0.0; op.output_len()];
    let mut estimate = 0.0f64;
    for _ in 0..iters {
        let nx = norm2(&x);
        if nx == 0.0 {
            break;
        }
        x.iter_mut().for_each(|v| *v /= nx);
        op.apply(&x, &mut y);
        // Rayleigh quotient of KᵀK at a unit vector; nondecreasing along the iteration.
        estimate = estimate.max(dot(&y, &y));
        op.apply_adjoint(&y, &mut x);
    }
    Ok(estimate.sqrt() * OP_NORM_INFLATION)
}

/// Elementwise clamp to `[0,1]`.
pub fn project_box(u: &mut [f64]) {
    for v in u {
        *v = v.clamp(0.0, 1.0);
    }
}

/// Per-pixel projection of a vector field onto the ℓ2 ball of radius `rho`.
pub fn project_ball(px: &mut [f64], py: &mut [f64], rho: f64) -> Result<()> {
    if !(rho >= 0.0) {
        return Err(Error::invalid(format!("ball radius must be non-negative, got {rho}")));
    }
    for (x, y) in px.iter_mut().zip(py.iter_mut()) {
        let norm = x.hypot(*y);
        if norm > rho {
            let s = rho / norm;
            *x *= s;
            *y *= s;
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn gradient_of_constant_and_ramp() {
        let c = ProbabilityMap::constant(4, 3, 0.7);
        let g = grad(&c);
        assert!(g.x.iter().chain(&g.y).all(|&v| v == 0.0));

        let ramp = ProbabilityMap::new(4, 3, (0..12).map(|i| (i % 4) as f64).collect()).unwrap();
        let g = grad(&ramp);
        for y in 0..3 {
            for x in 0..4 {
                let i = y * 4 + x;
                assert_eq!(g.x[i], if x < 3 { 1.0 } else { 0.0 });
                assert_eq!(g.y[i], 0.0);
            }
        }
    }

    #[test]
    fn divergence_of_zero_and_unit_stencil() {
        assert!(div(&VectorField::zeros(3, 3)).iter().all(|&v| v == 0.0));
        // unit x- and y-components at the interior pixel (1,1) of a 3x3 grid
        let mut p = VectorField::zeros(3, 3);
        p.x[4] = 1.0;
        p.y[4] = 1.0;
        let d = div(&p);
        let expected = [0.0, 0.0, 0.0, 0.0, 2.0, -1.0, 0.0, -1.0, 0.0];
        assert_eq!(d, expected);
    }

    #[test]
    fn histogram_operator_cases() {
        let bm = BinMap::new(3, 1, 2, vec![0, 1, 1]).unwrap();
        assert_eq!(apply_h_adj(&bm, &[1.0, 1.0]), vec![1.0; 3]);
        assert_eq!(apply_h(&bm, &[0.0, 1.0, 0.0]), vec![0.0, 1.0]);
    }

    #[test]
    fn rank_one_cases() {
        let a = Histogram(vec![0.25, 0.75]);
        assert_eq!(apply_rank_one(&a, &[0.0; 4]), vec![0.0, 0.0]);
        assert_eq!(apply_rank_one(&a, &[1.0; 4]), vec![1.0, 3.0]);
        assert_eq!(apply_rank_one_adj(&a, &[2.0, 4.0], 3), vec![3.5; 3]);
    }

    #[test]
    fn k_of_zero_and_pc_only_adjoint() {
        let bm = BinMap::new(3, 2, 2, vec![0, 1, 0, 1, 1, 0]).unwrap();
        let a = Histogram(vec![0.5, 0.5]);
        let b = Histogram(vec![0.2, 0.8]);
        let k = SegmentationOperator::new(&bm, &a, &b).unwrap();
        let z = k.apply_k(&ProbabilityMap::constant(3, 2, 0.0));
        assert!(z.to_flat().iter().all(|&v| v == 0.0));

        let mut p = DualStack::zeros(2, 3, 2);
        p.p_c.x = vec![0.3, -1.0, 2.0, 0.5, 0.1, 0.7];
        p.p_c.y = vec![1.0, 0.2, -0.4, 0.9, 0.0, 0.3];
        let kt = k.apply_k_adj(&p);
        let d = div(&p.p_c);
        for (l, r) in kt.values.iter().zip(&d) {
            assert!((l + r).abs() < 1e-15);
        }
    }

    #[test]
    fn op_norm_identity_and_gradient_bound() {
        struct Identity(usize);
        impl LinearOperator for Identity {
            fn input_len(&self) -> usize {
                self.0
            }
            fn output_len(&self) -> usize {
                self.0
            }
            fn apply(&self, x: &[f64], y: &mut [f64]) {
                y.copy_from_slice(x)
            }
            fn apply_adjoint(&self, y: &[f64], x: &mut [f64]) {
                x.copy_from_slice(y)
            }
        }
        let est = op_norm(&Identity(17), 20, 1).unwrap();
        assert!((est / OP_NORM_INFLATION - 1.0).abs() < 1e-6);

        let g = GradientOperator { width: 64, height: 64 };
        let est = op_norm(&g, 100, 2).unwrap();
        assert!(est / OP_NORM_INFLATION <= 8f64.sqrt());
        assert!(op_norm(&g, 19, 2).is_err());
    }

    #[test]
    fn projections() {
        let mut u = vec![0.5, -3.0, 2.0];
        project_box(&mut u);
        assert_eq!(u, vec![0.5, 0.0, 1.0]);

        let (mut x, mut y) = (vec![3.0, 0.1, 0.0], vec![4.0, 0.2, 0.0]);
        project_ball(&mut x, &mut y, 1.0).unwrap();
        assert!((x[0] - 0.6).abs() < 1e-15 && (y[0] - 0.8).abs() < 1e-15);
        assert_eq!((x[1], y[1]), (0.1, 0.2));
        assert_eq!((x[2], y[2]), (0.0, 0.0));
        assert!(project_ball(&mut x, &mut y, -1.0).is_err());
    }
}
