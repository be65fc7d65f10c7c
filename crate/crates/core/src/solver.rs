//! Least-squares collocation solver for the two-time wave equation.
//!
//! The unknowns are every coefficient block on the lattice, flattened into a
//! real vector. The objective is
//!
//! ```text
//! F(c) = sum_traj sum_cell |residual(c)|^2 * eps^2
//! ```
//!
//! minimized by damped Gauss-Newton. The residual is quadratic in the
//! coefficients, so Jacobian products are computed exactly by an odd
//! difference of the residual map, and the transposed products by the
//! hand-written adjoint of the density assembly. Normal equations are solved
//! matrix-free with conjugate gradients under Levenberg damping; a plain
//! gradient step with backtracking takes over when damped steps keep failing.
//! Everything is sequential and deterministic apart from an order-preserving
//! parallel map over trajectories.

use std::io::{self, Write};

use rayon::prelude::*;
use thiserror::Error;

use crate::action::{
    accumulate_density_adjoint, family_partition, lambda_density_field, lambda_derived, WOptions,
};
use crate::chi::ChiCoefficients;
use crate::grid::{Constants, TimeGrid, Trajectory};
use crate::kernel::KernelConfig;
use crate::scalar::{czero, Scalar, C};

#[derive(Debug, Error, PartialEq)]
pub enum SolveError {
    #[error("step acceptance failed {0} consecutive times")]
    Diverged(usize),
    #[error("non-finite value in coefficients or residual")]
    NonFinite,
    #[error("need at least {want} collocation trajectories, got {got}")]
    TooFewTrajectories { want: usize, got: usize },
    #[error("tolerance must be positive")]
    NonPositiveTolerance,
}

pub const ABSOLUTE_OBJECTIVE_FLOOR: f64 = 1e-20;
const INITIAL_DAMPING: f64 = 1e-3;
const MAX_CONSECUTIVE_REJECTS: usize = 50;

/// Outcome of a collocation solve.
#[derive(Debug, Clone)]
pub struct SolveReport<T> {
    pub final_coeffs: ChiCoefficients<T>,
    /// Objective value at the start and after each accepted step;
    /// non-increasing by construction.
    pub residual_history: Vec<T>,
    /// Eigenvalue of the final coefficients (density at zero coordinates).
    pub lambda: C<T>,
    pub converged: bool,
    pub iterations: usize,
    pub initial_objective: T,
}

impl<T: Scalar> SolveReport<T> {
    pub fn objective(&self) -> T {
        *self.residual_history.last().unwrap()
    }

    pub fn relative_residual(&self) -> T {
        if self.initial_objective == T::zero() {
            T::zero()
        } else {
            self.objective() / self.initial_objective
        }
    }
}

// ---------------------------------------------------------------------------
// Flat degree-of-freedom vector <-> coefficient lattice
// ---------------------------------------------------------------------------

pub const DOF_PER_NODE: usize = 56;

pub fn dof_len<T: Scalar>(coeffs: &ChiCoefficients<T>) -> usize {
    let (n1, n2) = coeffs.slices();
    (n1 + 1) * (n2 + 1) * DOF_PER_NODE
}

pub fn pack<T: Scalar>(coeffs: &ChiCoefficients<T>) -> Vec<T> {
    let (n1, n2) = coeffs.slices();
    let mut out = Vec::with_capacity(dof_len(coeffs));
    for i1 in 0..=n1 {
        for i2 in 0..=n2 {
            let b = coeffs.node(i1, i2);
            out.push(b.s00);
            out.push(b.r00);
            out.extend_from_slice(&b.s10.0);
            out.extend_from_slice(&b.s01.0);
            out.extend_from_slice(&b.r10.0);
            out.extend_from_slice(&b.r01.0);
            for s in [&b.s20, &b.s02, &b.r20, &b.r02] {
                out.extend_from_slice(&s.diag);
                out.extend_from_slice(&s.off);
            }
            for m in [&b.s11, &b.r11] {
                for row in &m.0 {
                    out.extend_from_slice(row);
                }
            }
        }
    }
    out
}

pub fn unpack<T: Scalar>(template: &ChiCoefficients<T>, dof: &[T]) -> ChiCoefficients<T> {
    let (n1, n2) = template.slices();
    assert_eq!(dof.len(), dof_len(template));
    let mut out = template.clone();
    let mut it = dof.iter().copied();
    let mut next = || it.next().unwrap();
    for i1 in 0..=n1 {
        for i2 in 0..=n2 {
            let b = out.node_mut(i1, i2);
            b.s00 = next();
            b.r00 = next();
            for k in 0..3 {
                b.s10.0[k] = next();
            }
            for k in 0..3 {
                b.s01.0[k] = next();
            }
            for k in 0..3 {
                b.r10.0[k] = next();
            }
            for k in 0..3 {
                b.r01.0[k] = next();
            }
            for s in [&mut b.s20, &mut b.s02, &mut b.r20, &mut b.r02] {
                for k in 0..3 {
                    s.diag[k] = next();
                }
                for k in 0..3 {
                    s.off[k] = next();
                }
            }
            for m in [&mut b.s11, &mut b.r11] {
                for row in m.0.iter_mut() {
                    for v in row.iter_mut() {
                        *v = next();
                    }
                }
            }
        }
    }
    out
}

// ---------------------------------------------------------------------------
// Collocation problem: residual vector and Jacobian products
// ---------------------------------------------------------------------------

struct Problem<'a, T: Scalar> {
    trajs: &'a [Trajectory<T>],
    family_of: Vec<usize>,
    refs: Vec<Trajectory<T>>,
    grid: &'a TimeGrid<T>,
    kernel: &'a KernelConfig<T>,
    constants: &'a Constants<T>,
    opts: &'a WOptions,
    template: ChiCoefficients<T>,
    cells: usize,
}

impl<'a, T: Scalar> Problem<'a, T> {
    fn new(
        trajs: &'a [Trajectory<T>],
        grid: &'a TimeGrid<T>,
        kernel: &'a KernelConfig<T>,
        constants: &'a Constants<T>,
        opts: &'a WOptions,
        template: ChiCoefficients<T>,
    ) -> Self {
        let (family_of, refs) = family_partition(trajs);
        Problem {
            trajs,
            family_of,
            refs,
            grid,
            kernel,
            constants,
            opts,
            template,
            cells: grid.slices_1() * grid.slices_2(),
        }
    }

    /// Scaled residual vector: `eps * (density(traj) - density(reference))`
    /// concatenated over trajectories.
    fn residual_vec(&self, coeffs: &ChiCoefficients<T>) -> Vec<C<T>> {
        let eps = self.grid.epsilon();
        let ref_fields: Vec<Vec<C<T>>> = self
            .refs
            .iter()
            .map(|r| {
                lambda_density_field(coeffs, r, self.grid, self.kernel, self.constants, self.opts)
            })
            .collect();
        let per_traj: Vec<Vec<C<T>>> = self
            .trajs
            .par_iter()
            .zip(self.family_of.par_iter())
            .map(|(t, fam)| {
                let field = lambda_density_field(
                    coeffs,
                    t,
                    self.grid,
                    self.kernel,
                    self.constants,
                    self.opts,
                );
                field
                    .iter()
                    .zip(ref_fields[*fam].iter())
                    .map(|(a, b)| (a - b) * eps)
                    .collect()
            })
            .collect();
        per_traj.concat()
    }

    /// Exact Jacobian application via the odd difference of the quadratic
    /// residual map.
    fn apply_j(&self, coeffs_dof: &[T], v: &[T]) -> Vec<C<T>> {
        let half = T::lit(0.5);
        let plus: Vec<T> = coeffs_dof.iter().zip(v).map(|(a, b)| *a + *b).collect();
        let minus: Vec<T> = coeffs_dof.iter().zip(v).map(|(a, b)| *a - *b).collect();
        let rp = self.residual_vec(&unpack(&self.template, &plus));
        let rm = self.residual_vec(&unpack(&self.template, &minus));
        rp.iter().zip(rm.iter()).map(|(a, b)| (a - b) * half).collect()
    }

    /// Transposed Jacobian application through the density adjoint.
    fn apply_jt(&self, coeffs: &ChiCoefficients<T>, u: &[C<T>]) -> Vec<T> {
        let eps = self.grid.epsilon();
        let mut grad = ChiCoefficients::zeros_like(&self.template);
        let mut ref_cot: Vec<Vec<C<T>>> = self
            .refs
            .iter()
            .map(|_| vec![czero::<T>(); self.cells])
            .collect();
        for (ti, traj) in self.trajs.iter().enumerate() {
            let cot: Vec<C<T>> = u[ti * self.cells..(ti + 1) * self.cells]
                .iter()
                .map(|c| c.conj() * eps)
                .collect();
            for (rc, c) in ref_cot[self.family_of[ti]].iter_mut().zip(cot.iter()) {
                *rc -= *c;
            }
            accumulate_density_adjoint(
                coeffs,
                traj,
                self.grid,
                self.constants,
                self.opts,
                &cot,
                &mut grad,
            );
        }
        for (r, cot) in self.refs.iter().zip(ref_cot.iter()) {
            accumulate_density_adjoint(
                coeffs,
                r,
                self.grid,
                self.constants,
                self.opts,
                cot,
                &mut grad,
            );
        }
        pack(&grad)
    }
}

impl<T: Scalar> ChiCoefficients<T> {
    fn zeros_like(other: &ChiCoefficients<T>) -> ChiCoefficients<T> {
        let mut out = other.clone();
        let dof = vec![T::zero(); dof_len(other)];
        out = unpack(&out, &dof);
        out
    }
}

fn objective<T: Scalar>(r: &[C<T>]) -> T {
    r.iter().fold(T::zero(), |a, v| a + v.norm_sqr())
}

fn dot<T: Scalar>(a: &[T], b: &[T]) -> T {
    a.iter().zip(b).fold(T::zero(), |acc, (x, y)| acc + *x * *y)
}

/// Conjugate gradients on the damped normal equations
/// `(J^T J + mu I) delta = -J^T r`.
fn gauss_newton_step<T: Scalar>(
    problem: &Problem<'_, T>,
    coeffs: &ChiCoefficients<T>,
    coeffs_dof: &[T],
    r: &[C<T>],
    mu: T,
    max_iter: usize,
    rel_tol: T,
) -> Vec<T> {
    let n = coeffs_dof.len();
    let b: Vec<T> = problem
        .apply_jt(coeffs, r)
        .into_iter()
        .map(|x| -x)
        .collect();
    let mut x = vec![T::zero(); n];
    let mut res = b.clone();
    let mut p = res.clone();
    let mut rs_old = dot(&res, &res);
    let rs0 = rs_old;
    if rs0 == T::zero() {
        return x;
    }
    for _ in 0..max_iter {
        let jp = problem.apply_j(coeffs_dof, &p);
        let mut ap = problem.apply_jt(coeffs, &jp);
        for (a, pv) in ap.iter_mut().zip(p.iter()) {
            *a += mu * *pv;
        }
        let denom = dot(&p, &ap);
        if denom <= T::zero() || !denom.is_finite() {
            break;
        }
        let alpha = rs_old / denom;
        for (xv, pv) in x.iter_mut().zip(p.iter()) {
            *xv += alpha * *pv;
        }
        for (rv, av) in res.iter_mut().zip(ap.iter()) {
            *rv -= alpha * *av;
        }
        let rs_new = dot(&res, &res);
        if rs_new <= rel_tol * rel_tol * rs0 {
            break;
        }
        let beta = rs_new / rs_old;
        for (pv, rv) in p.iter_mut().zip(res.iter()) {
            *pv = *rv + beta * *pv;
        }
        rs_old = rs_new;
    }
    x
}

/// Minimizes the collocation objective by damped Gauss-Newton starting from
/// `initial`. Convergence means `F <= tol * F0` or `F` below the absolute
/// floor. Deterministic for identical inputs.
#[allow(clippy::too_many_arguments)]
pub fn solve<T: Scalar>(
    initial: &ChiCoefficients<T>,
    trajs: &[Trajectory<T>],
    grid: &TimeGrid<T>,
    kernel: &KernelConfig<T>,
    constants: &Constants<T>,
    opts: &WOptions,
    tol: T,
    max_iter: usize,
) -> Result<SolveReport<T>, SolveError> {
    if tol <= T::zero() {
        return Err(SolveError::NonPositiveTolerance);
    }
    if trajs.len() < 4 {
        return Err(SolveError::TooFewTrajectories {
            want: 4,
            got: trajs.len(),
        });
    }
    if !initial.all_finite() {
        return Err(SolveError::NonFinite);
    }
    let problem = Problem::new(trajs, grid, kernel, constants, opts, initial.clone());
    let floor = T::lit(ABSOLUTE_OBJECTIVE_FLOOR);

    let mut coeffs = initial.clone();
    let mut dof = pack(&coeffs);
    let mut r = problem.residual_vec(&coeffs);
    let mut f = objective(&r);
    if !f.is_finite() {
        return Err(SolveError::NonFinite);
    }
    let f0 = f;
    let mut history = vec![f];
    let mut mu = T::lit(INITIAL_DAMPING);
    let mut rejects = 0usize;
    let mut iterations = 0usize;
    let mut converged = f <= tol * f0 || f <= floor;

    while !converged && iterations < max_iter {
        iterations += 1;
        // inner accuracy follows the outer progress
        let ratio = if f0 > T::zero() { f / f0 } else { T::zero() };
        let rel_tol = ratio.sqrt().max(T::lit(1e-10)).min(T::lit(1e-2));
        let cg_cap = dof.len().min(400);
        let delta = gauss_newton_step(&problem, &coeffs, &dof, &r, mu, cg_cap, rel_tol);
        let trial_dof: Vec<T> = dof.iter().zip(delta.iter()).map(|(a, d)| *a + *d).collect();
        let trial = unpack(&problem.template, &trial_dof);
        let trial_r = problem.residual_vec(&trial);
        let trial_f = objective(&trial_r);
        if trial_f.is_finite() && trial_f < f {
            coeffs = trial;
            dof = trial_dof;
            r = trial_r;
            f = trial_f;
            history.push(f);
            mu = (mu / T::lit(3.0)).max(T::lit(1e-14));
            rejects = 0;
        } else {
            mu *= T::lit(2.0);
            rejects += 1;
            // fallback: steepest descent with backtracking
            if rejects >= 5 {
                let g = problem.apply_jt(&coeffs, &r);
                let gg = dot(&g, &g);
                if gg > T::zero() {
                    let mut alpha = f / gg;
                    let mut improved = false;
                    for _ in 0..40 {
                        let cand_dof: Vec<T> = dof
                            .iter()
                            .zip(g.iter())
                            .map(|(a, gv)| *a - alpha * *gv)
                            .collect();
                        let cand = unpack(&problem.template, &cand_dof);
                        let cand_r = problem.residual_vec(&cand);
                        let cand_f = objective(&cand_r);
                        if cand_f.is_finite() && cand_f < f {
                            coeffs = cand;
                            dof = cand_dof;
                            r = cand_r;
                            f = cand_f;
                            history.push(f);
                            rejects = 0;
                            improved = true;
                            break;
                        }
                        alpha = alpha * T::lit(0.5);
                    }
                    if !improved {
                        rejects += 1;
                    }
                }
            }
            if rejects >= MAX_CONSECUTIVE_REJECTS {
                return Err(SolveError::Diverged(rejects));
            }
        }
        converged = f <= tol * f0 || f <= floor;
    }

    let lambda = lambda_derived(&coeffs, grid, kernel, constants, opts);
    Ok(SolveReport {
        final_coeffs: coeffs,
        residual_history: history,
        lambda,
        converged,
        iterations,
        initial_objective: f0,
    })
}

/// Gradient of the collocation objective at `coeffs`, via the adjoint.
pub fn objective_gradient<T: Scalar>(
    coeffs: &ChiCoefficients<T>,
    trajs: &[Trajectory<T>],
    grid: &TimeGrid<T>,
    kernel: &KernelConfig<T>,
    constants: &Constants<T>,
    opts: &WOptions,
) -> (T, Vec<T>) {
    let problem = Problem::new(trajs, grid, kernel, constants, opts, coeffs.clone());
    let r = problem.residual_vec(coeffs);
    let f = objective(&r);
    let two = T::lit(2.0);
    let g = problem
        .apply_jt(coeffs, &r)
        .into_iter()
        .map(|x| two * x)
        .collect();
    (f, g)
}

#[derive(Debug, Clone)]
pub struct GradCheckReport<T> {
    pub max_rel_deviation: T,
    pub checked: usize,
    pub gradient_norm: T,
}

/// Compares the adjoint gradient of the objective against central finite
/// differences along seeded random coordinate directions.
#[allow(clippy::too_many_arguments)]
pub fn gradient_check<T: Scalar>(
    coeffs: &ChiCoefficients<T>,
    trajs: &[Trajectory<T>],
    grid: &TimeGrid<T>,
    kernel: &KernelConfig<T>,
    constants: &Constants<T>,
    opts: &WOptions,
    directions: usize,
    seed: u64,
) -> GradCheckReport<T> {
    use rand::{Rng, SeedableRng};
    let problem = Problem::new(trajs, grid, kernel, constants, opts, coeffs.clone());
    let (_, g) = objective_gradient(coeffs, trajs, grid, kernel, constants, opts);
    let dof = pack(coeffs);
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
    let mut max_rel = T::zero();
    for _ in 0..directions {
        let j = rng.gen_range(0..dof.len());
        let h = T::lit(1e-5) * dof[j].abs().max(T::one());
        let mut plus = dof.clone();
        let mut minus = dof.clone();
        plus[j] += h;
        minus[j] -= h;
        let fp = objective(&problem.residual_vec(&unpack(&problem.template, &plus)));
        let fm = objective(&problem.residual_vec(&unpack(&problem.template, &minus)));
        let fd = (fp - fm) / (T::lit(2.0) * h);
        let denom = g[j].abs().max(fd.abs()).max(T::lit(1e-10));
        max_rel = max_rel.max((g[j] - fd).abs() / denom);
    }
    let gradient_norm = dot(&g, &g).sqrt();
    GradCheckReport {
        max_rel_deviation: max_rel,
        checked: directions,
        gradient_norm,
    }
}

/// Structured results file: resolved inputs echo is the caller's duty; this
/// writes the solve outcome and the final coefficient blocks.
pub fn write_solve_report<T: Scalar, W: Write>(
    report: &SolveReport<T>,
    out: &mut W,
) -> io::Result<()> {
    writeln!(out, "# solve report")?;
    writeln!(out, "converged = {}", report.converged)?;
    writeln!(out, "iterations = {}", report.iterations)?;
    writeln!(out, "initial_objective = {:.17e}", report.initial_objective)?;
    writeln!(out, "final_objective = {:.17e}", report.objective())?;
    writeln!(out, "relative_residual = {:.17e}", report.relative_residual())?;
    writeln!(out, "lambda_re = {:.17e}", report.lambda.re)?;
    writeln!(out, "lambda_im = {:.17e}", report.lambda.im)?;
    writeln!(out, "cross_block_max_norm = {:.17e}", report.final_coeffs.cross_block_max_norm())?;
    writeln!(out, "# residual history")?;
    for (i, v) in report.residual_history.iter().enumerate() {
        writeln!(out, "history\t{i}\t{v:.17e}")?;
    }
    writeln!(out, "# final coefficients")?;
    crate::chi::write_coefficients(&report.final_coeffs, out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::chi::free_particle_chi;
    use crate::grid::{bind_constants, make_grid, sample_collocation, Endpoints};
    use crate::kernel::CouplingPrefactor;
    use crate::scalar::Vec3;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn kernel(e1e2: f64, sigma: f64) -> KernelConfig<f64> {
        KernelConfig::new(sigma, CouplingPrefactor::Half, e1e2).unwrap()
    }

    fn random_endpoints(seed: u64) -> Endpoints<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut v = || {
            Vec3::new(
                rng.gen_range(-0.5..0.5),
                rng.gen_range(-0.5..0.5),
                rng.gen_range(-0.5..0.5),
            )
        };
        Endpoints {
            x1_start: v(),
            x1_end: v(),
            x2_start: v(),
            x2_end: v(),
        }
    }

    #[test]
    fn pack_unpack_roundtrip() {
        let g = make_grid(1.0, 1.0, 0.5).unwrap();
        let c = bind_constants(&g, 1.0);
        let coeffs = free_particle_chi(&g, &Vec3::new(1.0, 2.0, 3.0), &Vec3::new(-1.0, 0.5, 0.0), &c);
        let dof = pack(&coeffs);
        assert_eq!(dof.len(), 9 * DOF_PER_NODE);
        let back = unpack(&coeffs, &dof);
        assert_eq!(back, coeffs);
    }

    #[test]
    fn free_start_converges_at_iteration_zero() {
        let g = make_grid(1.0, 1.0, 0.25).unwrap();
        let c = bind_constants(&g, 1.0).with_masses(1.0, 2.0);
        let coeffs = free_particle_chi(&g, &Vec3::new(1.0, 0.0, 0.0), &Vec3::new(2.0, 0.0, 0.0), &c);
        let trajs = sample_collocation(&g, &random_endpoints(1), 4, 5);
        let report = solve(
            &coeffs,
            &trajs,
            &g,
            &kernel(0.0, 1e-2),
            &c,
            &WOptions::default(),
            1e-10,
            50,
        )
        .unwrap();
        assert!(report.converged);
        assert_eq!(report.iterations, 0);
        assert!(report.objective() <= 1e-20);
    }

    #[test]
    fn zero_start_zero_coupling_is_fixed_point() {
        let g = make_grid(1.0, 1.0, 0.5).unwrap();
        let c = bind_constants(&g, 1.0);
        let coeffs = ChiCoefficients::zeros(&g);
        let trajs = sample_collocation(&g, &random_endpoints(2), 4, 6);
        let report = solve(
            &coeffs,
            &trajs,
            &g,
            &kernel(0.0, 1e-2),
            &c,
            &WOptions::default(),
            1e-10,
            50,
        )
        .unwrap();
        assert!(report.converged);
        assert_eq!(report.iterations, 0);
    }

    #[test]
    fn rejects_bad_inputs() {
        let g = make_grid(1.0, 1.0, 0.5).unwrap();
        let c = bind_constants(&g, 1.0);
        let coeffs = ChiCoefficients::zeros(&g);
        let trajs = sample_collocation(&g, &random_endpoints(2), 2, 6);
        assert!(matches!(
            solve(&coeffs, &trajs, &g, &kernel(0.0, 1e-2), &c, &WOptions::default(), 1e-10, 5),
            Err(SolveError::TooFewTrajectories { .. })
        ));
        let trajs = sample_collocation(&g, &random_endpoints(2), 4, 6);
        assert!(matches!(
            solve(&coeffs, &trajs, &g, &kernel(0.0, 1e-2), &c, &WOptions::default(), 0.0, 5),
            Err(SolveError::NonPositiveTolerance)
        ));
    }

    #[test]
    fn gradient_vanishes_at_exact_solution() {
        let g = make_grid(1.0, 1.0, 0.25).unwrap();
        let c = bind_constants(&g, 1.0).with_masses(1.0, 2.0);
        let coeffs = free_particle_chi(&g, &Vec3::new(1.0, 0.0, 0.0), &Vec3::new(0.0, 1.0, 0.0), &c);
        let trajs = sample_collocation(&g, &random_endpoints(3), 4, 9);
        let (f, g_vec) = objective_gradient(
            &coeffs,
            &trajs,
            &g,
            &kernel(0.0, 1e-2),
            &c,
            &WOptions::default(),
        );
        assert!(f < 1e-25);
        let gnorm = dot(&g_vec, &g_vec).sqrt();
        assert!(gnorm <= 1e-12, "gradient norm {gnorm}");
    }

    #[test]
    fn gradient_matches_finite_differences() {
        let g = make_grid(0.75, 0.5, 0.25).unwrap();
        let c = bind_constants(&g, 1.0).with_masses(0.9, 1.4);
        // generic non-stationary point
        let mut coeffs =
            free_particle_chi(&g, &Vec3::new(1.0, 0.0, 0.0), &Vec3::new(0.0, 1.0, 0.0), &c);
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        for n1 in 0..=g.slices_1() {
            for n2 in 0..=g.slices_2() {
                let b = coeffs.node_mut(n1, n2);
                b.s11.0[0][1] = rng.gen_range(-0.05..0.05);
                b.r20.diag[1] = rng.gen_range(-0.05..0.05);
                b.r00 = rng.gen_range(-0.05..0.05);
            }
        }
        let trajs = sample_collocation(&g, &random_endpoints(7), 5, 11);
        let report = gradient_check(
            &coeffs,
            &trajs,
            &g,
            &kernel(1e-3, 1e-2),
            &c,
            &WOptions::default(),
            20,
            1234,
        );
        assert!(
            report.max_rel_deviation < 1e-6,
            "max relative deviation {}",
            report.max_rel_deviation
        );
    }

    #[test]
    fn monotone_history_and_convergence_from_perturbed_start() {
        let g = make_grid(1.0, 1.0, 0.25).unwrap();
        let c = bind_constants(&g, 1.0).with_masses(1.0, 2.0);
        let mut coeffs =
            free_particle_chi(&g, &Vec3::new(1.0, 0.0, 0.0), &Vec3::new(2.0, 0.0, 0.0), &c);
        for n1 in 0..=g.slices_1() {
            for n2 in 0..=g.slices_2() {
                coeffs.node_mut(n1, n2).s11.0[0][0] = 1e-2;
                coeffs.node_mut(n1, n2).r11.0[1][2] = -1e-2;
            }
        }
        let mut trajs = sample_collocation(&g, &random_endpoints(21), 16, 31);
        trajs.extend(sample_collocation(&g, &random_endpoints(22), 16, 32));
        let report = solve(
            &coeffs,
            &trajs,
            &g,
            &kernel(0.0, 1e-2),
            &c,
            &WOptions::default(),
            1e-18,
            60,
        )
        .unwrap();
        assert!(report.converged, "relative {}", report.relative_residual());
        for w in report.residual_history.windows(2) {
            assert!(w[1] <= w[0]);
        }
        let cross = report.final_coeffs.cross_block_max_norm();
        assert!(cross <= 1e-8, "cross norm {cross}");
    }

    #[test]
    fn permutation_invariance_of_residual_history() {
        // relabeling the particles transposes the problem; histories match
        let g = make_grid(1.0, 1.0, 0.25).unwrap();
        let c12 = bind_constants(&g, 1.0).with_masses(1.0, 2.0);
        let c21 = bind_constants(&g, 1.0).with_masses(2.0, 1.0);
        let p1 = Vec3::new(1.0, 0.0, 0.0);
        let p2 = Vec3::new(0.0, 2.0, 0.0);
        let mut a = free_particle_chi(&g, &p1, &p2, &c12);
        let mut b = free_particle_chi(&g, &p2, &p1, &c21);
        for n1 in 0..=g.slices_1() {
            for n2 in 0..=g.slices_2() {
                a.node_mut(n1, n2).s11.0[0][1] = 5e-3;
                // transposed lattice and transposed cross block
                b.node_mut(n2, n1).s11.0[1][0] = 5e-3;
            }
        }
        let ep = random_endpoints(77);
        let trajs: Vec<_> = sample_collocation(&g, &ep, 6, 13);
        let trajs_swapped: Vec<_> = trajs
            .iter()
            .map(|t| {
                let x1: Vec<_> = (0..=g.slices_2()).map(|n| *t.x2(n)).collect();
                let x2: Vec<_> = (0..=g.slices_1()).map(|n| *t.x1(n)).collect();
                Trajectory::new(&g, x1, x2).unwrap()
            })
            .collect();
        let opts = WOptions::default();
        let ra = solve(&a, &trajs, &g, &kernel(0.0, 1e-2), &c12, &opts, 1e-12, 30).unwrap();
        let rb = solve(
            &b,
            &trajs_swapped,
            &g,
            &kernel(0.0, 1e-2),
            &c21,
            &opts,
            1e-12,
            30,
        )
        .unwrap();
        assert_eq!(ra.residual_history.len(), rb.residual_history.len());
        for (x, y) in ra.residual_history.iter().zip(rb.residual_history.iter()) {
            let scale = x.abs().max(*y).max(1e-30);
            assert!((x - y).abs() / scale < 1e-9, "{x} vs {y}");
        }
    }
}
