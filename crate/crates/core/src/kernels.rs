//! Rotated anisotropic stationary kernels and the intrinsic coregionalization
//! model (ICM) for multi-lane inputs.
//!
//! The squared distance between two inputs is measured in a coordinate frame
//! rotated by `angle`:
//!
//! ```text
//! d^2 = (R (x - x'))^T diag(ls^-2, lt^-2) (R (x - x')),   R = [[cos a, -sin a], [sin a, cos a]]
//! ```
//!
//! With `angle = 0` this is the ARD distance. Multi-output covariances are
//! `k(x, x') * B[i, j]` with `B = A A^T`.

use std::f64::consts::{FRAC_PI_2, PI};

use nalgebra::{DMatrix, Matrix2};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub enum KernelFamily {
    #[serde(rename = "SE")]
    SquaredExponential,
    Matern32,
    #[default]
    Matern52,
}

/// `B = A A^T` with `A` stored row-major as `outputs x rank`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Coregionalization {
    pub rank: usize,
    #[serde(rename = "A")]
    pub a: Vec<f64>,
}

impl Coregionalization {
    /// `A` = first `rank` columns of the identity.
    pub fn identity(outputs: usize, rank: usize) -> Self {
        let mut a = vec![0.0; outputs * rank];
        for i in 0..outputs.min(rank) {
            a[i * rank + i] = 1.0;
        }
        Self { rank, a }
    }

    pub fn from_matrix(a: &DMatrix<f64>) -> Self {
        let rank = a.ncols();
        let mut flat = Vec::with_capacity(a.len());
        for i in 0..a.nrows() {
            for j in 0..rank {
                flat.push(a[(i, j)]);
            }
        }
        Self { rank, a: flat }
    }

    pub fn outputs(&self) -> usize {
        self.a.len().checked_div(self.rank).unwrap_or(0)
    }

    pub fn validate(&self) -> Result<()> {
        if self.rank == 0 || self.a.is_empty() || !self.a.len().is_multiple_of(self.rank) {
            return Err(Error::InvalidKernel(format!(
                "coregionalization A has {} entries, not a multiple of rank {}",
                self.a.len(),
                self.rank
            )));
        }
        if self.rank > self.outputs() {
            return Err(Error::InvalidKernel(format!(
                "rank {} exceeds number of outputs {}",
                self.rank,
                self.outputs()
            )));
        }
        if self.a.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidKernel("coregionalization A is not finite".into()));
        }
        Ok(())
    }

    pub fn a_matrix(&self) -> DMatrix<f64> {
        DMatrix::from_row_slice(self.outputs(), self.rank, &self.a)
    }

    pub fn b_matrix(&self) -> DMatrix<f64> {
        let a = self.a_matrix();
        &a * a.transpose()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct KernelSpec {
    #[serde(default)]
    pub family: KernelFamily,
    /// Signal variance, (m/s)^2.
    pub variance: f64,
    pub lengthscale_s: f64,
    pub lengthscale_t: f64,
    /// Rotation angle in radians.
    #[serde(default)]
    pub angle: f64,
    /// Observation noise variance, (m/s)^2.
    pub noise_variance: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub coregionalization: Option<Coregionalization>,
}

impl KernelSpec {
    pub fn new(family: KernelFamily, variance: f64, lengthscales: [f64; 2], angle: f64, noise_variance: f64) -> Self {
        Self {
            family,
            variance,
            lengthscale_s: lengthscales[0],
            lengthscale_t: lengthscales[1],
            angle,
            noise_variance,
            coregionalization: None,
        }
    }

    pub fn with_coregionalization(mut self, coreg: Coregionalization) -> Self {
        self.coregionalization = Some(coreg);
        self
    }

    pub fn validate(&self) -> Result<()> {
        let positive = |v: f64| v.is_finite() && v > 0.0;
        if !positive(self.variance) {
            return Err(Error::InvalidKernel(format!("variance must be positive, got {}", self.variance)));
        }
        if !positive(self.lengthscale_s) || !positive(self.lengthscale_t) {
            return Err(Error::InvalidKernel("lengthscales must be positive".into()));
        }
        if !positive(self.noise_variance) {
            return Err(Error::InvalidKernel(format!(
                "noise variance must be positive, got {}",
                self.noise_variance
            )));
        }
        if !self.angle.is_finite() {
            return Err(Error::InvalidKernel("angle must be finite".into()));
        }
        if let Some(c) = &self.coregionalization {
            c.validate()?;
        }
        Ok(())
    }

    /// Number of outputs (lanes) this kernel covers; 1 without coregionalization.
    pub fn outputs(&self) -> usize {
        self.coregionalization.as_ref().map_or(1, Coregionalization::outputs)
    }

    /// Same covariance function, reported with `lengthscale_s >= lengthscale_t`
    /// and the angle wrapped into `(-pi/2, pi/2]`. The angle is then the
    /// direction of longest correlation measured from the space axis.
    pub fn canonical(&self) -> Self {
        let mut out = self.clone();
        if out.lengthscale_t > out.lengthscale_s {
            std::mem::swap(&mut out.lengthscale_s, &mut out.lengthscale_t);
            out.angle -= FRAC_PI_2;
        }
        out.angle = wrap_angle(out.angle);
        out
    }

    pub fn evaluator(&self) -> Result<Kernel> {
        self.validate()?;
        Ok(Kernel::new(self))
    }
}

/// Wraps an angle into `(-pi/2, pi/2]` using the pi-periodicity of the quadratic form.
pub fn wrap_angle(angle: f64) -> f64 {
    let mut a = angle.rem_euclid(PI);
    if a > FRAC_PI_2 {
        a -= PI;
    }
    a
}

/// A kernel input: coordinates plus a 1-based output (lane) index.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Input {
    pub x: [f64; 2],
    pub lane: u32,
}

impl Input {
    pub fn new(x: [f64; 2], lane: u32) -> Self {
        Self { x, lane }
    }

    pub fn at(s: f64, t: f64) -> Self {
        Self { x: [s, t], lane: 1 }
    }
}

pub fn rotation_matrix(angle: f64) -> Matrix2<f64> {
    let (sin, cos) = angle.sin_cos();
    Matrix2::new(cos, -sin, sin, cos)
}

pub fn ard_sq_dist(x: [f64; 2], x2: [f64; 2], lengthscale_s: f64, lengthscale_t: f64) -> f64 {
    let ds = (x[0] - x2[0]) / lengthscale_s;
    let dt = (x[1] - x2[1]) / lengthscale_t;
    ds * ds + dt * dt
}

pub fn rotated_sq_dist(x: [f64; 2], x2: [f64; 2], lengthscale_s: f64, lengthscale_t: f64, angle: f64) -> f64 {
    let (sin, cos) = angle.sin_cos();
    let (ds, dt) = (x[0] - x2[0], x[1] - x2[1]);
    let u1 = (cos * ds - sin * dt) / lengthscale_s;
    let u2 = (sin * ds + cos * dt) / lengthscale_t;
    u1 * u1 + u2 * u2
}

/// Correlation profile `g(r)` and `dg/dr` as a function of the squared distance.
fn profile(family: KernelFamily, r: f64) -> (f64, f64) {
    match family {
        KernelFamily::SquaredExponential => {
            let g = (-0.5 * r).exp();
            (g, -0.5 * g)
        }
        KernelFamily::Matern32 => {
            let d = (3.0 * r).sqrt();
            let e = (-d).exp();
            ((1.0 + d) * e, -1.5 * e)
        }
        KernelFamily::Matern52 => {
            let d = (5.0 * r).sqrt();
            let e = (-d).exp();
            ((1.0 + d + 5.0 * r / 3.0) * e, -(5.0 / 6.0) * (1.0 + d) * e)
        }
    }
}

/// Base covariance `sigma^2 g(d_rot^2)` without the coregionalization factor.
pub fn kernel_eval(spec: &KernelSpec, x: [f64; 2], x2: [f64; 2]) -> f64 {
    let r = rotated_sq_dist(x, x2, spec.lengthscale_s, spec.lengthscale_t, spec.angle);
    spec.variance * profile(spec.family, r).0
}

/// ICM covariance between output `i` at `x` and output `j` at `x2` (1-based).
pub fn icm_eval(
    spec: &KernelSpec,
    coreg: &Coregionalization,
    (x, i): ([f64; 2], u32),
    (x2, j): ([f64; 2], u32),
) -> Result<f64> {
    let outputs = coreg.outputs();
    for lane in [i, j] {
        if lane == 0 || lane as usize > outputs {
            return Err(Error::LaneOutOfRange { lane, lanes: outputs });
        }
    }
    let (i, j) = (i as usize - 1, j as usize - 1);
    let b: f64 = (0..coreg.rank)
        .map(|q| coreg.a[i * coreg.rank + q] * coreg.a[j * coreg.rank + q])
        .sum();
    Ok(kernel_eval(spec, x, x2) * b)
}

/// Gram matrix `K[a, b] = k(xa[a], xb[b])` including coregionalization.
pub fn gram(spec: &KernelSpec, xa: &[Input], xb: &[Input]) -> Result<DMatrix<f64>> {
    let k = spec.evaluator()?;
    k.check_inputs(xa)?;
    k.check_inputs(xb)?;
    Ok(k.gram(xa, xb))
}

/// Derivatives of a Gram matrix with respect to each hyperparameter.
#[derive(Debug, Clone)]
pub struct KernelGradients {
    pub log_variance: DMatrix<f64>,
    pub log_lengthscale_s: DMatrix<f64>,
    pub log_lengthscale_t: DMatrix<f64>,
    pub angle: DMatrix<f64>,
    /// One matrix per entry of `A`, row-major.
    pub coregionalization: Vec<DMatrix<f64>>,
}

pub fn kernel_grad(spec: &KernelSpec, xa: &[Input], xb: &[Input]) -> Result<KernelGradients> {
    let k = spec.evaluator()?;
    k.check_inputs(xa)?;
    k.check_inputs(xb)?;
    let (n, m) = (xa.len(), xb.len());
    let mut out = KernelGradients {
        log_variance: DMatrix::zeros(n, m),
        log_lengthscale_s: DMatrix::zeros(n, m),
        log_lengthscale_t: DMatrix::zeros(n, m),
        angle: DMatrix::zeros(n, m),
        coregionalization: vec![DMatrix::zeros(n, m); k.a.len()],
    };
    let rank = k.rank;
    for (p, a) in xa.iter().enumerate() {
        for (q, b) in xb.iter().enumerate() {
            let e = k.entry(a, b);
            out.log_variance[(p, q)] = e.value;
            out.log_lengthscale_s[(p, q)] = e.d_log_ls;
            out.log_lengthscale_t[(p, q)] = e.d_log_lt;
            out.angle[(p, q)] = e.d_angle;
            if rank > 0 {
                let (i, j) = (a.lane as usize - 1, b.lane as usize - 1);
                // dB[i,j]/dA[r,c] = delta(i,r) A[j,c] + delta(j,r) A[i,c]
                for c in 0..rank {
                    out.coregionalization[i * rank + c][(p, q)] += e.base * k.a[j * rank + c];
                    out.coregionalization[j * rank + c][(p, q)] += e.base * k.a[i * rank + c];
                }
            }
        }
    }
    Ok(out)
}

/// Gradient of `sum(G .* K(xa, xb))` with respect to every kernel parameter
/// and both input sets.
#[derive(Debug, Clone, PartialEq)]
pub struct ContractedGrad {
    pub log_variance: f64,
    pub log_lengthscale_s: f64,
    pub log_lengthscale_t: f64,
    pub angle: f64,
    pub a: Vec<f64>,
    pub xa: Vec<[f64; 2]>,
    pub xb: Vec<[f64; 2]>,
}

#[derive(Debug, Clone, Copy)]
struct Entry {
    value: f64,
    /// Covariance without the coregionalization factor.
    base: f64,
    d_log_ls: f64,
    d_log_lt: f64,
    d_angle: f64,
    /// dK/dxa; dK/dxb is its negative.
    d_x: [f64; 2],
}

/// Kernel with precomputed trigonometry and coregionalization matrix.
#[derive(Debug, Clone)]
pub struct Kernel {
    pub family: KernelFamily,
    pub variance: f64,
    inv_ls2: f64,
    inv_lt2: f64,
    cos: f64,
    sin: f64,
    outputs: usize,
    rank: usize,
    a: Vec<f64>,
    b: Vec<f64>,
}

impl Kernel {
    fn new(spec: &KernelSpec) -> Self {
        let (sin, cos) = spec.angle.sin_cos();
        let (outputs, rank, a, b) = match &spec.coregionalization {
            Some(c) => {
                let bm = c.b_matrix();
                let b = (0..bm.nrows())
                    .flat_map(|i| (0..bm.ncols()).map(move |j| (i, j)))
                    .map(|ij| bm[ij])
                    .collect();
                (c.outputs(), c.rank, c.a.clone(), b)
            }
            None => (1, 0, Vec::new(), Vec::new()),
        };
        Self {
            family: spec.family,
            variance: spec.variance,
            inv_ls2: spec.lengthscale_s.powi(-2),
            inv_lt2: spec.lengthscale_t.powi(-2),
            cos,
            sin,
            outputs,
            rank,
            a,
            b,
        }
    }

    pub fn outputs(&self) -> usize {
        self.outputs
    }

    pub fn is_coregionalized(&self) -> bool {
        self.rank > 0
    }

    pub fn check_inputs(&self, inputs: &[Input]) -> Result<()> {
        if self.rank == 0 {
            return Ok(());
        }
        match inputs.iter().find(|p| p.lane == 0 || p.lane as usize > self.outputs) {
            Some(p) => Err(Error::LaneOutOfRange {
                lane: p.lane,
                lanes: self.outputs,
            }),
            None => Ok(()),
        }
    }

    #[inline]
    fn b_factor(&self, la: u32, lb: u32) -> f64 {
        if self.rank == 0 {
            1.0
        } else {
            self.b[(la as usize - 1) * self.outputs + lb as usize - 1]
        }
    }

    #[inline]
    fn sq_dist(&self, a: &[f64; 2], b: &[f64; 2]) -> (f64, f64, f64) {
        let (ds, dt) = (a[0] - b[0], a[1] - b[1]);
        let u1 = self.cos * ds - self.sin * dt;
        let u2 = self.sin * ds + self.cos * dt;
        (u1 * u1 * self.inv_ls2 + u2 * u2 * self.inv_lt2, u1, u2)
    }

    #[inline]
    pub fn cov(&self, a: &Input, b: &Input) -> f64 {
        let (r, _, _) = self.sq_dist(&a.x, &b.x);
        self.variance * profile(self.family, r).0 * self.b_factor(a.lane, b.lane)
    }

    /// Prior variance at an input.
    pub fn diag(&self, a: &Input) -> f64 {
        self.variance * self.b_factor(a.lane, a.lane)
    }

    fn entry(&self, a: &Input, b: &Input) -> Entry {
        let (r, u1, u2) = self.sq_dist(&a.x, &b.x);
        let (g, dg) = profile(self.family, r);
        let bf = self.b_factor(a.lane, b.lane);
        let base = self.variance * g;
        let dk_dr = self.variance * dg * bf;
        // dr/d(dx) = 2 R^T M u
        let (mu1, mu2) = (u1 * self.inv_ls2, u2 * self.inv_lt2);
        let dr_ds = 2.0 * (self.cos * mu1 + self.sin * mu2);
        let dr_dt = 2.0 * (-self.sin * mu1 + self.cos * mu2);
        Entry {
            value: base * bf,
            base,
            d_log_ls: dk_dr * (-2.0 * u1 * u1 * self.inv_ls2),
            d_log_lt: dk_dr * (-2.0 * u2 * u2 * self.inv_lt2),
            d_angle: dk_dr * 2.0 * u1 * u2 * (self.inv_lt2 - self.inv_ls2),
            d_x: [dk_dr * dr_ds, dk_dr * dr_dt],
        }
    }

    pub fn gram(&self, xa: &[Input], xb: &[Input]) -> DMatrix<f64> {
        DMatrix::from_fn(xa.len(), xb.len(), |p, q| self.cov(&xa[p], &xb[q]))
    }

    /// Symmetric Gram matrix of one input set.
    pub fn gram_sym(&self, x: &[Input]) -> DMatrix<f64> {
        let n = x.len();
        let mut k = DMatrix::zeros(n, n);
        for p in 0..n {
            for q in 0..=p {
                let v = self.cov(&x[p], &x[q]);
                k[(p, q)] = v;
                k[(q, p)] = v;
            }
        }
        k
    }

    /// Derivatives of `sum_{p,q} weight[p,q] K[p,q]`.
    pub fn contract(&self, weight: &DMatrix<f64>, xa: &[Input], xb: &[Input]) -> ContractedGrad {
        assert_eq!(weight.shape(), (xa.len(), xb.len()));
        let mut out = ContractedGrad {
            log_variance: 0.0,
            log_lengthscale_s: 0.0,
            log_lengthscale_t: 0.0,
            angle: 0.0,
            a: vec![0.0; self.a.len()],
            xa: vec![[0.0; 2]; xa.len()],
            xb: vec![[0.0; 2]; xb.len()],
        };
        // accumulated sum of weight * base kernel per (lane, lane) pair
        let mut lane_w = vec![0.0; self.outputs * self.outputs];
        for (q, b) in xb.iter().enumerate() {
            for (p, a) in xa.iter().enumerate() {
                let w = weight[(p, q)];
                if w == 0.0 {
                    continue;
                }
                let e = self.entry(a, b);
                out.log_variance += w * e.value;
                out.log_lengthscale_s += w * e.d_log_ls;
                out.log_lengthscale_t += w * e.d_log_lt;
                out.angle += w * e.d_angle;
                out.xa[p][0] += w * e.d_x[0];
                out.xa[p][1] += w * e.d_x[1];
                out.xb[q][0] -= w * e.d_x[0];
                out.xb[q][1] -= w * e.d_x[1];
                if self.rank > 0 {
                    lane_w[(a.lane as usize - 1) * self.outputs + b.lane as usize - 1] += w * e.base;
                }
            }
        }
        if self.rank > 0 {
            // d/dA sum_ij W[i,j] (A A^T)[i,j] = (W + W^T) A
            let l = self.outputs;
            for i in 0..l {
                for c in 0..self.rank {
                    out.a[i * self.rank + c] = (0..l)
                        .map(|j| (lane_w[i * l + j] + lane_w[j * l + i]) * self.a[j * self.rank + c])
                        .sum();
                }
            }
        }
        out
    }

    /// Derivatives of `sum_p weight[p] k(x_p, x_p)`. Only the variance and
    /// coregionalization parameters enter the diagonal.
    pub fn contract_diag(&self, weight: &[f64], x: &[Input]) -> (f64, Vec<f64>) {
        let mut d_log_var = 0.0;
        let mut d_a = vec![0.0; self.a.len()];
        for (w, p) in weight.iter().zip(x) {
            let v = self.diag(p);
            d_log_var += w * v;
            if self.rank > 0 {
                let i = p.lane as usize - 1;
                for c in 0..self.rank {
                    d_a[i * self.rank + c] += w * self.variance * 2.0 * self.a[i * self.rank + c];
                }
            }
        }
        (d_log_var, d_a)
    }
}
