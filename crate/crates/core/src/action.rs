//! Assembly of the auxiliary functional density, its split into an eigenvalue
//! part and a coordinate-dependent residual, and diagnostics.
//!
//! Per interior cell `(n1, n2)` the density consists of
//!
//! * a canonical part: weighted boundary differences of the exponent plus its
//!   two time derivatives,
//! * a Hamiltonian part: for each particle the product of the spatial
//!   gradient with its opposite-axis time integral, plus the spatial
//!   Laplacian, both scaled by `-hbar^2 / 2m`,
//! * the regularized light-cone interaction density.
//!
//! The residual of the two-time wave equation is the density minus its value
//! on the reference trajectory with the same endpoints and zeroed interior
//! vertices: what is left depends only on the vertices that are free to vary.
//! Constants that do not depend on the endpoints form the eigenvalue; the
//! endpoint-dependent remainder is reported separately per trajectory family.
//!
//! Two weighting conventions for the canonical part are implemented because
//! the source formulas state two inconsistent patterns; the free-solution
//! validation picks the one consistent with the direct discrete form.

use std::io::{self, Write};

use nalgebra::DMatrix;
use num_traits::Float;
use rayon::prelude::*;
use thiserror::Error;

use crate::chi::{
    chi_grad1_at, chi_grad2_at, chi_lap1_at, chi_lap2_at, chi_value_at, i_over_hbar, time_stencil,
    BlockSet, ChiCoefficients,
};
use crate::grid::{Constants, TimeGrid, Trajectory};
use crate::kernel::{interval_squared, regularized_delta_unchecked, KernelConfig};
use crate::scalar::{cdot, cvec_zero, czero, CVec3, Scalar, Vec3, C};

#[derive(Debug, Error, PartialEq)]
pub enum ActionError {
    #[error("discretized Hamiltonian dimension {dim} exceeds the cap {cap}")]
    DimensionTooLarge { dim: usize, cap: usize },
    #[error("need at least one collocation trajectory")]
    NoTrajectories,
}

/// Which of the two stated weight patterns the canonical part uses.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PrefactorConvention {
    /// `1/(T1 T2)` on both boundary pairs, `1/T2` and `1/T1` on the time
    /// derivatives.
    Eq23,
    /// `1/T1`, `1/T2` on the boundary pairs, unit weights on the time
    /// derivatives. Matches the direct discretization of the canonical term.
    Eq29,
}

impl PrefactorConvention {
    pub fn name(&self) -> &'static str {
        match self {
            PrefactorConvention::Eq23 => "eq23",
            PrefactorConvention::Eq29 => "eq29",
        }
    }

    fn weights<T: Scalar>(&self, t1_len: T, t2_len: T) -> (T, T, T, T) {
        match self {
            PrefactorConvention::Eq23 => {
                let b = (t1_len * t2_len).recip();
                (b, b, t2_len.recip(), t1_len.recip())
            }
            PrefactorConvention::Eq29 => {
                (t1_len.recip(), t2_len.recip(), T::one(), T::one())
            }
        }
    }
}

#[derive(Debug, Clone, Copy)]
pub struct WOptions {
    pub convention: PrefactorConvention,
    /// Evaluate the second boundary pair literally with the final endpoint of
    /// particle 2 in both terms instead of correcting the earlier one to the
    /// initial endpoint.
    pub literal_second_boundary: bool,
}

impl Default for WOptions {
    fn default() -> Self {
        WOptions {
            convention: PrefactorConvention::Eq29,
            literal_second_boundary: false,
        }
    }
}

/// Density of the auxiliary functional per interior cell, row-major over
/// `(n1, n2)` with `n1, n2 >= 1`.
pub type DensityField<T> = Vec<C<T>>;

#[inline]
fn cell_index(n1: usize, n2: usize, n2_slices: usize) -> usize {
    (n1 - 1) * n2_slices + (n2 - 1)
}

/// Opposite-axis integrals of the spatial gradients:
/// `G1[n1] = sum_{n2 >= 1} eps * grad_x1 chi(n1, n2; x1(n1), x2(n2))` and the
/// mirrored `G2`.
fn cross_integrals<T: Scalar>(
    coeffs: &ChiCoefficients<T>,
    traj: &Trajectory<T>,
    grid: &TimeGrid<T>,
    constants: &Constants<T>,
) -> (Vec<CVec3<T>>, Vec<CVec3<T>>) {
    let eps = grid.epsilon();
    let hbar = constants.hbar;
    let (n1m, n2m) = (grid.slices_1(), grid.slices_2());
    let mut g1 = vec![cvec_zero::<T>(); n1m + 1];
    let mut g2 = vec![cvec_zero::<T>(); n2m + 1];
    for n1 in 1..=n1m {
        let mut acc = cvec_zero::<T>();
        for n2 in 1..=n2m {
            let g = chi_grad1_at(coeffs.node(n1, n2), traj.x1(n1), traj.x2(n2), hbar);
            for k in 0..3 {
                acc[k] += g[k] * eps;
            }
        }
        g1[n1] = acc;
    }
    for n2 in 1..=n2m {
        let mut acc = cvec_zero::<T>();
        for n1 in 1..=n1m {
            let g = chi_grad2_at(coeffs.node(n1, n2), traj.x1(n1), traj.x2(n2), hbar);
            for k in 0..3 {
                acc[k] += g[k] * eps;
            }
        }
        g2[n2] = acc;
    }
    (g1, g2)
}

/// Full density of the auxiliary functional along one trajectory.
pub fn lambda_density_field<T: Scalar>(
    coeffs: &ChiCoefficients<T>,
    traj: &Trajectory<T>,
    grid: &TimeGrid<T>,
    kernel: &KernelConfig<T>,
    constants: &Constants<T>,
    opts: &WOptions,
) -> DensityField<T> {
    let (n1m, n2m) = (grid.slices_1(), grid.slices_2());
    let eps = grid.epsilon();
    let hbar = constants.hbar;
    let (b1, b2, g1w, g2w) = opts
        .convention
        .weights::<T>(grid.duration_1(), grid.duration_2());
    let hoi = C::new(T::zero(), -hbar); // hbar / i
    let k1 = -(hbar * hbar) / (T::lit(2.0) * constants.m1);
    let k2 = -(hbar * hbar) / (T::lit(2.0) * constants.m2);
    let coupling = kernel.coupling_prefactor.value::<T>() * kernel.e1e2;
    let (gi1, gi2) = cross_integrals(coeffs, traj, grid, constants);
    let mut out = vec![czero::<T>(); n1m * n2m];
    for n1 in 1..=n1m {
        let x1 = traj.x1(n1);
        let t1 = grid.time_1(n1);
        for n2 in 1..=n2m {
            let x2 = traj.x2(n2);
            let t2 = grid.time_2(n2);
            // canonical part
            let chi_a = chi_value_at(coeffs.node(n1m, n2), traj.x1(n1m), x2, hbar);
            let chi_b = chi_value_at(coeffs.node(0, n2), traj.x1(0), x2, hbar);
            let chi_c = chi_value_at(coeffs.node(n1, n2m), x1, traj.x2(n2m), hbar);
            let x2_low = if opts.literal_second_boundary {
                traj.x2(n2m)
            } else {
                traj.x2(0)
            };
            let chi_d = chi_value_at(coeffs.node(n1, 0), x1, x2_low, hbar);
            let mut dt1 = czero::<T>();
            for (i, w) in time_stencil(n1, n1m, eps) {
                if w != T::zero() {
                    dt1 += chi_value_at(coeffs.node(i, n2), x1, x2, hbar) * w;
                }
            }
            let mut dt2 = czero::<T>();
            for (j, w) in time_stencil(n2, n2m, eps) {
                if w != T::zero() {
                    dt2 += chi_value_at(coeffs.node(n1, j), x1, x2, hbar) * w;
                }
            }
            let canonical =
                hoi * ((chi_a - chi_b) * b1 + (chi_c - chi_d) * b2 - dt1 * g1w - dt2 * g2w);
            // Hamiltonian part; the Laplacian enters with the same sign as
            // the gradient square, as the second derivative of the log of
            // the wave functional dictates.
            let b = coeffs.node(n1, n2);
            let grad1 = chi_grad1_at(b, x1, x2, hbar);
            let grad2 = chi_grad2_at(b, x1, x2, hbar);
            let ham = (cdot(&grad1, &gi1[n1]) + chi_lap1_at(b, hbar)) * k1
                + (cdot(&grad2, &gi2[n2]) + chi_lap2_at(b, hbar)) * k2;
            // interaction density
            let coul = if coupling == T::zero() {
                T::zero()
            } else {
                coupling * regularized_delta_unchecked(interval_squared(t1, t2, x1, x2), kernel.sigma)
            };
            out[cell_index(n1, n2, n2m)] = canonical + ham + C::new(coul, T::zero());
        }
    }
    out
}

/// Accumulates `Re(cot_cell * d density_cell / d coefficient)` for every
/// coefficient into `grad`, reusing the coefficient lattice as the gradient
/// container. The linearization point enters through the bilinear gradient
/// product, so `coeffs` must be the point the cotangents were computed at.
pub fn accumulate_density_adjoint<T: Scalar>(
    coeffs: &ChiCoefficients<T>,
    traj: &Trajectory<T>,
    grid: &TimeGrid<T>,
    constants: &Constants<T>,
    opts: &WOptions,
    cot: &[C<T>],
    grad: &mut ChiCoefficients<T>,
) {
    let (n1m, n2m) = (grid.slices_1(), grid.slices_2());
    let eps = grid.epsilon();
    let hbar = constants.hbar;
    let (b1, b2, g1w, g2w) = opts
        .convention
        .weights::<T>(grid.duration_1(), grid.duration_2());
    let hoi = C::new(T::zero(), -hbar);
    let k1 = -(hbar * hbar) / (T::lit(2.0) * constants.m1);
    let k2 = -(hbar * hbar) / (T::lit(2.0) * constants.m2);
    let (gi1, gi2) = cross_integrals(coeffs, traj, grid, constants);
    let mut cot_g1 = vec![cvec_zero::<T>(); n1m + 1];
    let mut cot_g2 = vec![cvec_zero::<T>(); n2m + 1];
    for n1 in 1..=n1m {
        let x1 = traj.x1(n1);
        for n2 in 1..=n2m {
            let x2 = traj.x2(n2);
            let f = cot[cell_index(n1, n2, n2m)];
            if f == czero() {
                continue;
            }
            // canonical
            let fb1 = f * hoi * b1;
            scatter_value(grad.node_mut(n1m, n2), traj.x1(n1m), x2, fb1, hbar);
            scatter_value(grad.node_mut(0, n2), traj.x1(0), x2, -fb1, hbar);
            let fb2 = f * hoi * b2;
            scatter_value(grad.node_mut(n1, n2m), x1, traj.x2(n2m), fb2, hbar);
            let x2_low = if opts.literal_second_boundary {
                traj.x2(n2m)
            } else {
                traj.x2(0)
            };
            scatter_value(grad.node_mut(n1, 0), x1, x2_low, -fb2, hbar);
            for (i, w) in time_stencil(n1, n1m, eps) {
                if w != T::zero() {
                    scatter_value(grad.node_mut(i, n2), x1, x2, -f * hoi * (g1w * w), hbar);
                }
            }
            for (j, w) in time_stencil(n2, n2m, eps) {
                if w != T::zero() {
                    scatter_value(grad.node_mut(n1, j), x1, x2, -f * hoi * (g2w * w), hbar);
                }
            }
            // Hamiltonian
            let b = coeffs.node(n1, n2);
            let base1 = f * k1;
            let base2 = f * k2;
            let fvec1 = [base1 * gi1[n1][0], base1 * gi1[n1][1], base1 * gi1[n1][2]];
            scatter_grad1(grad.node_mut(n1, n2), x1, x2, &fvec1, hbar);
            let fvec2 = [base2 * gi2[n2][0], base2 * gi2[n2][1], base2 * gi2[n2][2]];
            scatter_grad2(grad.node_mut(n1, n2), x1, x2, &fvec2, hbar);
            scatter_lap1(grad.node_mut(n1, n2), base1, hbar);
            scatter_lap2(grad.node_mut(n1, n2), base2, hbar);
            let d1 = chi_grad1_at(b, x1, x2, hbar);
            let d2 = chi_grad2_at(b, x1, x2, hbar);
            for k in 0..3 {
                cot_g1[n1][k] += base1 * d1[k];
                cot_g2[n2][k] += base2 * d2[k];
            }
        }
    }
    // gradient-integral cotangents flow back into every node of their row
    for n1 in 1..=n1m {
        let fvec = [cot_g1[n1][0] * eps, cot_g1[n1][1] * eps, cot_g1[n1][2] * eps];
        if fvec.iter().all(|c| *c == czero()) {
            continue;
        }
        for n2 in 1..=n2m {
            scatter_grad1(grad.node_mut(n1, n2), traj.x1(n1), traj.x2(n2), &fvec, hbar);
        }
    }
    for n2 in 1..=n2m {
        let fvec = [cot_g2[n2][0] * eps, cot_g2[n2][1] * eps, cot_g2[n2][2] * eps];
        if fvec.iter().all(|c| *c == czero()) {
            continue;
        }
        for n1 in 1..=n1m {
            scatter_grad2(grad.node_mut(n1, n2), traj.x1(n1), traj.x2(n2), &fvec, hbar);
        }
    }
}

fn scatter_value<T: Scalar>(gb: &mut BlockSet<T>, x1: &Vec3<T>, x2: &Vec3<T>, f: C<T>, hbar: T) {
    let a = (f * i_over_hbar(hbar)).re;
    let r = f.re;
    let two = T::lit(2.0);
    gb.s00 += a;
    gb.r00 += r;
    for k in 0..3 {
        gb.s10.0[k] += a * x1.0[k];
        gb.s01.0[k] += a * x2.0[k];
        gb.r10.0[k] += r * x1.0[k];
        gb.r01.0[k] += r * x2.0[k];
        gb.s20.diag[k] += a * x1.0[k] * x1.0[k];
        gb.s02.diag[k] += a * x2.0[k] * x2.0[k];
        gb.r20.diag[k] += r * x1.0[k] * x1.0[k];
        gb.r02.diag[k] += r * x2.0[k] * x2.0[k];
        for l in 0..3 {
            gb.s11.0[k][l] += a * x1.0[k] * x2.0[l];
            gb.r11.0[k][l] += r * x1.0[k] * x2.0[l];
        }
    }
    let pairs = [(0usize, 1usize), (0, 2), (1, 2)];
    for (idx, (k, l)) in pairs.iter().enumerate() {
        gb.s20.off[idx] += a * two * x1.0[*k] * x1.0[*l];
        gb.s02.off[idx] += a * two * x2.0[*k] * x2.0[*l];
        gb.r20.off[idx] += r * two * x1.0[*k] * x1.0[*l];
        gb.r02.off[idx] += r * two * x2.0[*k] * x2.0[*l];
    }
}

fn scatter_grad1<T: Scalar>(
    gb: &mut BlockSet<T>,
    x1: &Vec3<T>,
    x2: &Vec3<T>,
    fvec: &CVec3<T>,
    hbar: T,
) {
    let ih = i_over_hbar(hbar);
    let a: [T; 3] = std::array::from_fn(|k| (fvec[k] * ih).re);
    let r: [T; 3] = std::array::from_fn(|k| fvec[k].re);
    let two = T::lit(2.0);
    for k in 0..3 {
        gb.s10.0[k] += a[k];
        gb.r10.0[k] += r[k];
        gb.s20.diag[k] += a[k] * two * x1.0[k];
        gb.r20.diag[k] += r[k] * two * x1.0[k];
        for l in 0..3 {
            gb.s11.0[k][l] += a[k] * x2.0[l];
            gb.r11.0[k][l] += r[k] * x2.0[l];
        }
    }
    let pairs = [(0usize, 1usize), (0, 2), (1, 2)];
    for (idx, (k, l)) in pairs.iter().enumerate() {
        gb.s20.off[idx] += two * (a[*k] * x1.0[*l] + a[*l] * x1.0[*k]);
        gb.r20.off[idx] += two * (r[*k] * x1.0[*l] + r[*l] * x1.0[*k]);
    }
}

fn scatter_grad2<T: Scalar>(
    gb: &mut BlockSet<T>,
    x1: &Vec3<T>,
    x2: &Vec3<T>,
    fvec: &CVec3<T>,
    hbar: T,
) {
    let ih = i_over_hbar(hbar);
    let a: [T; 3] = std::array::from_fn(|l| (fvec[l] * ih).re);
    let r: [T; 3] = std::array::from_fn(|l| fvec[l].re);
    let two = T::lit(2.0);
    for l in 0..3 {
        gb.s01.0[l] += a[l];
        gb.r01.0[l] += r[l];
        gb.s02.diag[l] += a[l] * two * x2.0[l];
        gb.r02.diag[l] += r[l] * two * x2.0[l];
        for k in 0..3 {
            gb.s11.0[k][l] += a[l] * x1.0[k];
            gb.r11.0[k][l] += r[l] * x1.0[k];
        }
    }
    let pairs = [(0usize, 1usize), (0, 2), (1, 2)];
    for (idx, (k, l)) in pairs.iter().enumerate() {
        gb.s02.off[idx] += two * (a[*k] * x2.0[*l] + a[*l] * x2.0[*k]);
        gb.r02.off[idx] += two * (r[*k] * x2.0[*l] + r[*l] * x2.0[*k]);
    }
}

fn scatter_lap1<T: Scalar>(gb: &mut BlockSet<T>, f: C<T>, hbar: T) {
    let a = (f * i_over_hbar(hbar)).re;
    let r = f.re;
    let two = T::lit(2.0);
    for k in 0..3 {
        gb.s20.diag[k] += a * two;
        gb.r20.diag[k] += r * two;
    }
}

fn scatter_lap2<T: Scalar>(gb: &mut BlockSet<T>, f: C<T>, hbar: T) {
    let a = (f * i_over_hbar(hbar)).re;
    let r = f.re;
    let two = T::lit(2.0);
    for k in 0..3 {
        gb.s02.diag[k] += a * two;
        gb.r02.diag[k] += r * two;
    }
}

/// Direct discretization of the canonical term: velocity differences dotted
/// into the opposite-axis gradient integrals, summed over both particles.
/// Telescopes to a boundary expression for exponent fields linear in time.
pub fn canonical_part_discrete<T: Scalar>(
    coeffs: &ChiCoefficients<T>,
    traj: &Trajectory<T>,
    grid: &TimeGrid<T>,
    constants: &Constants<T>,
) -> C<T> {
    let hoi = C::new(T::zero(), -constants.hbar);
    let (gi1, gi2) = cross_integrals(coeffs, traj, grid, constants);
    let mut acc = czero::<T>();
    for n1 in 1..=grid.slices_1() {
        let dx = traj.x1(n1).sub(traj.x1(n1 - 1));
        for k in 0..3 {
            acc += gi1[n1][k] * dx.0[k];
        }
    }
    for n2 in 1..=grid.slices_2() {
        let dx = traj.x2(n2).sub(traj.x2(n2 - 1));
        for k in 0..3 {
            acc += gi2[n2][k] * dx.0[k];
        }
    }
    acc * hoi
}

/// Integral form of the canonical part under the chosen weight convention:
/// the double Riemann sum of the boundary-difference and time-derivative
/// density.
pub fn canonical_part_continuum<T: Scalar>(
    coeffs: &ChiCoefficients<T>,
    traj: &Trajectory<T>,
    grid: &TimeGrid<T>,
    constants: &Constants<T>,
    convention: PrefactorConvention,
) -> C<T> {
    let (n1m, n2m) = (grid.slices_1(), grid.slices_2());
    let eps = grid.epsilon();
    let hbar = constants.hbar;
    let (b1, b2, g1w, g2w) = convention.weights::<T>(grid.duration_1(), grid.duration_2());
    let hoi = C::new(T::zero(), -hbar);
    let mut acc = czero::<T>();
    for n1 in 1..=n1m {
        let x1 = traj.x1(n1);
        for n2 in 1..=n2m {
            let x2 = traj.x2(n2);
            let chi_a = chi_value_at(coeffs.node(n1m, n2), traj.x1(n1m), x2, hbar);
            let chi_b = chi_value_at(coeffs.node(0, n2), traj.x1(0), x2, hbar);
            let chi_c = chi_value_at(coeffs.node(n1, n2m), x1, traj.x2(n2m), hbar);
            let chi_d = chi_value_at(coeffs.node(n1, 0), x1, traj.x2(0), hbar);
            let mut dt1 = czero::<T>();
            for (i, w) in time_stencil(n1, n1m, eps) {
                if w != T::zero() {
                    dt1 += chi_value_at(coeffs.node(i, n2), x1, x2, hbar) * w;
                }
            }
            let mut dt2 = czero::<T>();
            for (j, w) in time_stencil(n2, n2m, eps) {
                if w != T::zero() {
                    dt2 += chi_value_at(coeffs.node(n1, j), x1, x2, hbar) * w;
                }
            }
            acc += ((chi_a - chi_b) * b1 + (chi_c - chi_d) * b2 - dt1 * g1w - dt2 * g2w)
                * (eps * eps);
        }
    }
    acc * hoi
}

/// Double-time integral of the Hamiltonian part along a trajectory,
/// including the interaction sum.
pub fn hamiltonian_part<T: Scalar>(
    coeffs: &ChiCoefficients<T>,
    traj: &Trajectory<T>,
    grid: &TimeGrid<T>,
    kernel: &KernelConfig<T>,
    constants: &Constants<T>,
) -> C<T> {
    let (n1m, n2m) = (grid.slices_1(), grid.slices_2());
    let eps2 = grid.epsilon() * grid.epsilon();
    let hbar = constants.hbar;
    let k1 = -(hbar * hbar) / (T::lit(2.0) * constants.m1);
    let k2 = -(hbar * hbar) / (T::lit(2.0) * constants.m2);
    let (gi1, gi2) = cross_integrals(coeffs, traj, grid, constants);
    let mut acc = czero::<T>();
    for n1 in 1..=n1m {
        let x1 = traj.x1(n1);
        for n2 in 1..=n2m {
            let x2 = traj.x2(n2);
            let b = coeffs.node(n1, n2);
            let grad1 = chi_grad1_at(b, x1, x2, hbar);
            let grad2 = chi_grad2_at(b, x1, x2, hbar);
            acc += ((cdot(&grad1, &gi1[n1]) + chi_lap1_at(b, hbar)) * k1
                + (cdot(&grad2, &gi2[n2]) + chi_lap2_at(b, hbar)) * k2)
                * eps2;
        }
    }
    acc + C::new(crate::kernel::coulomb_action_term(traj, grid, kernel), T::zero())
}

/// Literal assembly of the eigenvalue density from the coefficient blocks:
/// boundary differences of the phase constant, the gradient-coefficient
/// products with their opposite-axis integrals, amplitude-block traces, and
/// the equal-time interaction kernel at finite width. Real by construction.
pub fn scalar_part_lambda<T: Scalar>(
    coeffs: &ChiCoefficients<T>,
    grid: &TimeGrid<T>,
    kernel: &KernelConfig<T>,
    constants: &Constants<T>,
    convention: PrefactorConvention,
) -> C<T> {
    let (n1m, n2m) = (grid.slices_1(), grid.slices_2());
    let eps = grid.epsilon();
    let hbar2 = constants.hbar * constants.hbar;
    let (b1, b2, _, _) = convention.weights::<T>(grid.duration_1(), grid.duration_2());
    let half_m1 = (T::lit(2.0) * constants.m1).recip();
    let half_m2 = (T::lit(2.0) * constants.m2).recip();
    let coupling = kernel.coupling_prefactor.value::<T>() * kernel.e1e2;
    // opposite-axis integrals of the linear coefficient blocks
    let mut s10_bar = vec![Vec3::<T>::zero(); n1m + 1];
    let mut r10_bar = vec![Vec3::<T>::zero(); n1m + 1];
    for n1 in 1..=n1m {
        for n2 in 1..=n2m {
            let b = coeffs.node(n1, n2);
            s10_bar[n1] = s10_bar[n1].add(&b.s10.scale(eps));
            r10_bar[n1] = r10_bar[n1].add(&b.r10.scale(eps));
        }
    }
    let mut s01_bar = vec![Vec3::<T>::zero(); n2m + 1];
    let mut r01_bar = vec![Vec3::<T>::zero(); n2m + 1];
    for n2 in 1..=n2m {
        for n1 in 1..=n1m {
            let b = coeffs.node(n1, n2);
            s01_bar[n2] = s01_bar[n2].add(&b.s01.scale(eps));
            r01_bar[n2] = r01_bar[n2].add(&b.r01.scale(eps));
        }
    }
    let mut acc = T::zero();
    for n1 in 1..=n1m {
        let t1 = grid.time_1(n1);
        for n2 in 1..=n2m {
            let t2 = grid.time_2(n2);
            let b = coeffs.node(n1, n2);
            let boundary = b1 * (coeffs.node(n1m, n2).s00 - coeffs.node(0, n2).s00)
                + b2 * (coeffs.node(n1, n2m).s00 - coeffs.node(n1, 0).s00);
            let part1 = half_m1
                * (b.s10.dot(&s10_bar[n1])
                    - hbar2 * b.r10.dot(&r10_bar[n1])
                    - hbar2 * b.r20.trace());
            let part2 = half_m2
                * (b.s01.dot(&s01_bar[n2])
                    - hbar2 * b.r01.dot(&r01_bar[n2])
                    - hbar2 * b.r02.trace());
            let dt = t1 - t2;
            let coul = if coupling == T::zero() {
                T::zero()
            } else {
                coupling * regularized_delta_unchecked(dt * dt, kernel.sigma)
            };
            acc += boundary + part1 + part2 + coul;
        }
    }
    C::new(acc * eps * eps, T::zero())
}

/// Zero-trajectory used for the derived eigenvalue: every vertex at the
/// origin, endpoints included.
fn zero_trajectory<T: Scalar>(grid: &TimeGrid<T>) -> Trajectory<T> {
    Trajectory::straight(grid, &crate::grid::Endpoints::zero())
}

/// Eigenvalue derived by evaluating the full density at zero coordinates.
/// This is the self-consistent counterpart of [`scalar_part_lambda`]; the two
/// differ where the literal coefficient assembly drops terms.
pub fn lambda_derived<T: Scalar>(
    coeffs: &ChiCoefficients<T>,
    grid: &TimeGrid<T>,
    kernel: &KernelConfig<T>,
    constants: &Constants<T>,
    opts: &WOptions,
) -> C<T> {
    let zero = zero_trajectory(grid);
    let field = lambda_density_field(coeffs, &zero, grid, kernel, constants, opts);
    let eps2 = grid.epsilon() * grid.epsilon();
    field.iter().fold(czero::<T>(), |a, v| a + v) * eps2
}

/// Report comparing the literal eigenvalue assembly against the derived one.
#[derive(Debug, Clone)]
pub struct LambdaCrossCheck<T> {
    pub literal: C<T>,
    pub derived: C<T>,
    /// Largest per-cell gap between the literal density and the density of
    /// the full assembly at zero coordinates.
    pub max_cell_gap: T,
    /// The equal-time interaction entry diverges as the width shrinks; the
    /// eigenvalue is only meaningful at the configured finite width.
    pub equal_time_kernel_finite_width_only: bool,
}

pub fn lambda_cross_check<T: Scalar>(
    coeffs: &ChiCoefficients<T>,
    grid: &TimeGrid<T>,
    kernel: &KernelConfig<T>,
    constants: &Constants<T>,
    opts: &WOptions,
) -> LambdaCrossCheck<T> {
    let literal = scalar_part_lambda(coeffs, grid, kernel, constants, opts.convention);
    let derived = lambda_derived(coeffs, grid, kernel, constants, opts);
    // per-cell comparison
    let zero = zero_trajectory(grid);
    let field = lambda_density_field(coeffs, &zero, grid, kernel, constants, opts);
    let (n1m, n2m) = (grid.slices_1(), grid.slices_2());
    let eps = grid.epsilon();
    let hbar2 = constants.hbar * constants.hbar;
    let (b1, b2, _, _) = opts
        .convention
        .weights::<T>(grid.duration_1(), grid.duration_2());
    let half_m1 = (T::lit(2.0) * constants.m1).recip();
    let half_m2 = (T::lit(2.0) * constants.m2).recip();
    let coupling = kernel.coupling_prefactor.value::<T>() * kernel.e1e2;
    let mut max_gap = T::zero();
    for n1 in 1..=n1m {
        for n2 in 1..=n2m {
            let b = coeffs.node(n1, n2);
            let mut s10_bar = Vec3::<T>::zero();
            let mut r10_bar = Vec3::<T>::zero();
            for j in 1..=n2m {
                s10_bar = s10_bar.add(&coeffs.node(n1, j).s10.scale(eps));
                r10_bar = r10_bar.add(&coeffs.node(n1, j).r10.scale(eps));
            }
            let mut s01_bar = Vec3::<T>::zero();
            let mut r01_bar = Vec3::<T>::zero();
            for i in 1..=n1m {
                s01_bar = s01_bar.add(&coeffs.node(i, n2).s01.scale(eps));
                r01_bar = r01_bar.add(&coeffs.node(i, n2).r01.scale(eps));
            }
            let boundary = b1 * (coeffs.node(n1m, n2).s00 - coeffs.node(0, n2).s00)
                + b2 * (coeffs.node(n1, n2m).s00 - coeffs.node(n1, 0).s00);
            let dt = grid.time_1(n1) - grid.time_2(n2);
            let coul = if coupling == T::zero() {
                T::zero()
            } else {
                coupling * regularized_delta_unchecked(dt * dt, kernel.sigma)
            };
            let literal_cell = boundary
                + half_m1
                    * (b.s10.dot(&s10_bar) - hbar2 * b.r10.dot(&r10_bar) - hbar2 * b.r20.trace())
                + half_m2
                    * (b.s01.dot(&s01_bar) - hbar2 * b.r01.dot(&r01_bar) - hbar2 * b.r02.trace())
                + coul;
            let gap = (field[cell_index(n1, n2, n2m)] - C::new(literal_cell, T::zero())).norm();
            max_gap = max_gap.max(gap);
        }
    }
    LambdaCrossCheck {
        literal,
        derived,
        max_cell_gap: max_gap,
        equal_time_kernel_finite_width_only: coupling != T::zero(),
    }
}

/// Coordinate-dependent residual of the two-time wave equation, sampled on
/// collocation trajectories, plus the eigenvalue split.
#[derive(Debug, Clone)]
pub struct ResidualField<T> {
    pub slices_1: usize,
    pub slices_2: usize,
    /// Per trajectory, per interior cell (row-major, `n1` outer).
    pub residual: Vec<Vec<C<T>>>,
    /// Eigenvalue derived from the density at zero coordinates.
    pub lambda: C<T>,
    /// Endpoint family of each input trajectory.
    pub family_of: Vec<usize>,
    /// Per family: integrated density gap between the family's reference
    /// trajectory and the zero trajectory. Together with `lambda` and the
    /// residual this reassembles the full functional exactly.
    pub family_boundary: Vec<C<T>>,
}

impl<T: Scalar> ResidualField<T> {
    pub fn max_norm(&self) -> T {
        let mut m = T::zero();
        for field in &self.residual {
            for v in field {
                m = m.max(v.norm());
            }
        }
        m
    }
}

fn endpoint_key<T: Scalar>(traj: &Trajectory<T>) -> [u64; 12] {
    let ep = traj.endpoints();
    let mut out = [0u64; 12];
    let all = [ep.x1_start, ep.x1_end, ep.x2_start, ep.x2_end];
    for (i, v) in all.iter().enumerate() {
        for k in 0..3 {
            out[i * 3 + k] = v.0[k].to_f64().unwrap_or(f64::NAN).to_bits();
        }
    }
    out
}

/// Groups trajectories by their endpoint set, first-seen order.
pub(crate) fn family_partition<T: Scalar>(
    trajs: &[Trajectory<T>],
) -> (Vec<usize>, Vec<Trajectory<T>>) {
    let mut keys: Vec<[u64; 12]> = Vec::new();
    let mut refs: Vec<Trajectory<T>> = Vec::new();
    let mut family_of = Vec::with_capacity(trajs.len());
    for t in trajs {
        let key = endpoint_key(t);
        let idx = match keys.iter().position(|k| *k == key) {
            Some(i) => i,
            None => {
                keys.push(key);
                refs.push(t.reference());
                refs.len() - 1
            }
        };
        family_of.push(idx);
    }
    (family_of, refs)
}

/// Evaluates the residual operator on every trajectory: the density minus its
/// value on the same-endpoint zero-interior reference. The residual vanishes
/// identically on a reference trajectory by construction.
pub fn residual_w_chi<T: Scalar>(
    coeffs: &ChiCoefficients<T>,
    trajs: &[Trajectory<T>],
    grid: &TimeGrid<T>,
    kernel: &KernelConfig<T>,
    constants: &Constants<T>,
    opts: &WOptions,
) -> Result<ResidualField<T>, ActionError> {
    if trajs.is_empty() {
        return Err(ActionError::NoTrajectories);
    }
    let (family_of, refs) = family_partition(trajs);
    let ref_fields: Vec<DensityField<T>> = refs
        .iter()
        .map(|r| lambda_density_field(coeffs, r, grid, kernel, constants, opts))
        .collect();
    let residual: Vec<Vec<C<T>>> = trajs
        .par_iter()
        .zip(family_of.par_iter())
        .map(|(t, fam)| {
            let field = lambda_density_field(coeffs, t, grid, kernel, constants, opts);
            field
                .iter()
                .zip(ref_fields[*fam].iter())
                .map(|(a, b)| a - b)
                .collect()
        })
        .collect();
    let zero = zero_trajectory(grid);
    let zero_field = lambda_density_field(coeffs, &zero, grid, kernel, constants, opts);
    let eps2 = grid.epsilon() * grid.epsilon();
    let lambda = zero_field.iter().fold(czero::<T>(), |a, v| a + v) * eps2;
    let family_boundary: Vec<C<T>> = ref_fields
        .iter()
        .map(|rf| {
            rf.iter()
                .zip(zero_field.iter())
                .fold(czero::<T>(), |a, (r, z)| a + (r - z))
                * eps2
        })
        .collect();
    Ok(ResidualField {
        slices_1: grid.slices_1(),
        slices_2: grid.slices_2(),
        residual,
        lambda,
        family_of,
        family_boundary,
    })
}

/// Columnar export: `traj <TAB> n1 <TAB> n2 <TAB> re <TAB> im`.
pub fn write_residual_field<T: Scalar, W: Write>(
    field: &ResidualField<T>,
    out: &mut W,
) -> io::Result<()> {
    writeln!(out, "# residual field")?;
    writeln!(out, "# lambda_re = {:.17e}", field.lambda.re)?;
    writeln!(out, "# lambda_im = {:.17e}", field.lambda.im)?;
    writeln!(out, "# columns: traj\tn1\tn2\tre\tim")?;
    for (ti, cells) in field.residual.iter().enumerate() {
        for n1 in 1..=field.slices_1 {
            for n2 in 1..=field.slices_2 {
                let v = cells[cell_index(n1, n2, field.slices_2)];
                writeln!(out, "{ti}\t{n1}\t{n2}\t{:.17e}\t{:.17e}", v.re, v.im)?;
            }
        }
    }
    Ok(())
}

pub const HAMILTONIAN_DIM_CAP: usize = 4096;

/// Explicit matrix of the discretized Hamiltonian with one spatial dimension
/// per particle: second-difference kinetic stencils per time vertex plus the
/// diagonal interaction kernel, on the product basis of all vertex variables.
/// Real symmetric by construction.
pub fn hamiltonian_matrix_tiny<T>(
    grid: &TimeGrid<T>,
    spatial_points: usize,
    spatial_extent: T,
    kernel: &KernelConfig<T>,
    constants: &Constants<T>,
) -> Result<DMatrix<T>, ActionError>
where
    T: Scalar + nalgebra::RealField,
{
    let n_vars = grid.slices_1() + grid.slices_2();
    let dim = spatial_points
        .checked_pow(n_vars as u32)
        .filter(|d| *d <= HAMILTONIAN_DIM_CAP)
        .ok_or(ActionError::DimensionTooLarge {
            dim: spatial_points
                .checked_pow(n_vars as u32)
                .unwrap_or(usize::MAX),
            cap: HAMILTONIAN_DIM_CAP,
        })?;
    let eps = grid.epsilon();
    let h = spatial_extent / T::from_usize(spatial_points - 1).unwrap();
    let x_of = |d: usize| {
        -spatial_extent * T::lit(0.5) + h * T::from_usize(d).unwrap()
    };
    // kinetic coefficient per vertex variable: eps hbar^2 / (2 m h^2)
    let kin1 = eps * constants.hbar * constants.hbar
        / (T::lit(2.0) * constants.m1 * h * h);
    let kin2 = eps * constants.hbar * constants.hbar
        / (T::lit(2.0) * constants.m2 * h * h);
    let coupling = kernel.coupling_prefactor.value::<T>() * kernel.e1e2;
    let eps2 = eps * eps;
    let n1m = grid.slices_1();
    let decode = |state: usize| {
        let mut digits = vec![0usize; n_vars];
        let mut s = state;
        for d in digits.iter_mut() {
            *d = s % spatial_points;
            s /= spatial_points;
        }
        digits
    };
    let mut mat = DMatrix::<T>::zeros(dim, dim);
    let mut stride = 1usize;
    let mut strides = vec![0usize; n_vars];
    for st in strides.iter_mut() {
        *st = stride;
        stride *= spatial_points;
    }
    for state in 0..dim {
        let digits = decode(state);
        let mut diag = T::zero();
        for (a, &d) in digits.iter().enumerate() {
            let kin = if a < n1m { kin1 } else { kin2 };
            diag += kin * T::lit(2.0);
            if d + 1 < spatial_points {
                let neighbor = state + strides[a];
                mat[(state, neighbor)] = -kin;
                mat[(neighbor, state)] = -kin;
            }
        }
        if coupling != T::zero() {
            let mut pot = T::zero();
            for n1 in 1..=grid.slices_1() {
                let u = x_of(digits[n1 - 1]);
                for n2 in 1..=grid.slices_2() {
                    let v = x_of(digits[n1m + n2 - 1]);
                    let du = u - v;
                    let dt = grid.time_1(n1) - grid.time_2(n2);
                    let s2 = dt * dt - du * du;
                    pot += regularized_delta_unchecked(s2, kernel.sigma);
                }
            }
            diag += coupling * eps2 * pot;
        }
        mat[(state, state)] = diag;
    }
    Ok(mat)
}

/// Largest asymmetry entry of a square matrix.
pub fn max_asymmetry<T>(mat: &DMatrix<T>) -> T
where
    T: Scalar + nalgebra::RealField,
{
    let mut m = T::zero();
    for i in 0..mat.nrows() {
        for j in (i + 1)..mat.ncols() {
            let d = Float::abs(mat[(i, j)] - mat[(j, i)]);
            if d > m {
                m = d;
            }
        }
    }
    m
}
