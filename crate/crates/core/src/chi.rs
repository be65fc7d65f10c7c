//! Quadratic coefficient ansatz for the wave-function exponent on the
//! two-time grid.
//!
//! Per node `(n1, n2)` the exponent is
//!
//! ```text
//! chi(x1, x2) = (i/hbar) s(x1, x2) + rho(x1, x2)
//! ```
//!
//! where `s` and `rho` are real polynomials of total degree two in the two
//! particle positions. The `rho` blocks store the product of the slice length
//! with the amplitude density as a single quantity; no attempt is made to
//! split that product, which would be ill-defined in the continuum limit.
//!
//! Coefficients live on the `(N1+1) x (N2+1)` node lattice (times
//! `n * epsilon` on each axis including both edges) so that boundary-time
//! evaluations and one-sided time differences are defined everywhere the
//! residual operator needs them.

use std::io::{self, BufRead, Write};

use thiserror::Error;

use crate::grid::{Constants, TimeGrid, Trajectory};
use crate::scalar::{czero, CVec3, Mat3, Scalar, Sym3, Vec3, C};

#[derive(Debug, Error, PartialEq)]
pub enum ChiError {
    #[error("node index ({0}, {1}) outside the coefficient lattice")]
    OutOfGrid(usize, usize),
    #[error("real part of the summed exponent is {0}, above the overflow bound {1}")]
    Overflow(f64, f64),
    #[error("coefficient file is malformed: {0}")]
    Parse(String),
}

/// Coefficient blocks of one lattice node.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BlockSet<T> {
    pub s00: T,
    pub r00: T,
    pub s10: Vec3<T>,
    pub s01: Vec3<T>,
    pub r10: Vec3<T>,
    pub r01: Vec3<T>,
    pub s20: Sym3<T>,
    pub s02: Sym3<T>,
    pub r20: Sym3<T>,
    pub r02: Sym3<T>,
    pub s11: Mat3<T>,
    pub r11: Mat3<T>,
}

impl<T: Scalar> BlockSet<T> {
    pub fn zero() -> Self {
        BlockSet {
            s00: T::zero(),
            r00: T::zero(),
            s10: Vec3::zero(),
            s01: Vec3::zero(),
            r10: Vec3::zero(),
            r01: Vec3::zero(),
            s20: Sym3::zero(),
            s02: Sym3::zero(),
            r20: Sym3::zero(),
            r02: Sym3::zero(),
            s11: Mat3::zero(),
            r11: Mat3::zero(),
        }
    }

    fn s_value(&self, x1: &Vec3<T>, x2: &Vec3<T>) -> T {
        self.s00
            + self.s10.dot(x1)
            + self.s01.dot(x2)
            + self.s20.quad(x1)
            + self.s11.bilinear(x1, x2)
            + self.s02.quad(x2)
    }

    fn r_value(&self, x1: &Vec3<T>, x2: &Vec3<T>) -> T {
        self.r00
            + self.r10.dot(x1)
            + self.r01.dot(x2)
            + self.r20.quad(x1)
            + self.r11.bilinear(x1, x2)
            + self.r02.quad(x2)
    }
}

/// Grid-indexed coefficient tensors for the whole lattice.
#[derive(Debug, Clone, PartialEq)]
pub struct ChiCoefficients<T> {
    n1: usize,
    n2: usize,
    nodes: Vec<BlockSet<T>>,
}

impl<T: Scalar> ChiCoefficients<T> {
    pub fn zeros(grid: &TimeGrid<T>) -> Self {
        let n1 = grid.slices_1();
        let n2 = grid.slices_2();
        ChiCoefficients {
            n1,
            n2,
            nodes: vec![BlockSet::zero(); (n1 + 1) * (n2 + 1)],
        }
    }

    pub fn slices(&self) -> (usize, usize) {
        (self.n1, self.n2)
    }

    #[inline]
    fn idx(&self, n1: usize, n2: usize) -> usize {
        n1 * (self.n2 + 1) + n2
    }

    pub fn node(&self, n1: usize, n2: usize) -> &BlockSet<T> {
        &self.nodes[self.idx(n1, n2)]
    }

    pub fn node_mut(&mut self, n1: usize, n2: usize) -> &mut BlockSet<T> {
        let i = self.idx(n1, n2);
        &mut self.nodes[i]
    }

    pub fn in_range(&self, n1: usize, n2: usize) -> bool {
        n1 <= self.n1 && n2 <= self.n2
    }

    /// Largest cross-block entry over the lattice; zero exactly when the
    /// ansatz factorizes into a product of single-particle wave functions.
    pub fn cross_block_max_norm(&self) -> T {
        let mut m = T::zero();
        for b in &self.nodes {
            m = m.max(b.s11.max_abs()).max(b.r11.max_abs());
        }
        m
    }

    pub fn all_finite(&self) -> bool {
        self.nodes.iter().all(|b| {
            let mut vals = vec![b.s00, b.r00];
            vals.extend_from_slice(&b.s10.0);
            vals.extend_from_slice(&b.s01.0);
            vals.extend_from_slice(&b.r10.0);
            vals.extend_from_slice(&b.r01.0);
            for s in [&b.s20, &b.s02, &b.r20, &b.r02] {
                vals.extend_from_slice(&s.diag);
                vals.extend_from_slice(&s.off);
            }
            for m in [&b.s11, &b.r11] {
                for row in &m.0 {
                    vals.extend_from_slice(row);
                }
            }
            vals.iter().all(|v| v.is_finite())
        })
    }
}

/// Value and derivatives of the exponent at one node and one coordinate pair.
#[derive(Debug, Clone, Copy)]
pub struct ChiValue<T> {
    pub value: C<T>,
    pub grad_x1: CVec3<T>,
    pub grad_x2: CVec3<T>,
    pub lap_x1: C<T>,
    pub lap_x2: C<T>,
    pub dt1: C<T>,
    pub dt2: C<T>,
}

#[inline]
pub(crate) fn i_over_hbar<T: Scalar>(hbar: T) -> C<T> {
    C::new(T::zero(), hbar.recip())
}

#[inline]
pub(crate) fn chi_value_at<T: Scalar>(
    b: &BlockSet<T>,
    x1: &Vec3<T>,
    x2: &Vec3<T>,
    hbar: T,
) -> C<T> {
    i_over_hbar(hbar) * b.s_value(x1, x2) + b.r_value(x1, x2)
}

#[inline]
pub(crate) fn chi_grad1_at<T: Scalar>(
    b: &BlockSet<T>,
    x1: &Vec3<T>,
    x2: &Vec3<T>,
    hbar: T,
) -> CVec3<T> {
    let ih = i_over_hbar(hbar);
    let gs = b.s20.grad(x1).add(&b.s11.mul_vec(x2)).add(&b.s10);
    let gr = b.r20.grad(x1).add(&b.r11.mul_vec(x2)).add(&b.r10);
    [
        ih * gs.0[0] + gr.0[0],
        ih * gs.0[1] + gr.0[1],
        ih * gs.0[2] + gr.0[2],
    ]
}

#[inline]
pub(crate) fn chi_grad2_at<T: Scalar>(
    b: &BlockSet<T>,
    x1: &Vec3<T>,
    x2: &Vec3<T>,
    hbar: T,
) -> CVec3<T> {
    let ih = i_over_hbar(hbar);
    let gs = b.s02.grad(x2).add(&b.s11.tr_mul_vec(x1)).add(&b.s01);
    let gr = b.r02.grad(x2).add(&b.r11.tr_mul_vec(x1)).add(&b.r01);
    [
        ih * gs.0[0] + gr.0[0],
        ih * gs.0[1] + gr.0[1],
        ih * gs.0[2] + gr.0[2],
    ]
}

#[inline]
pub(crate) fn chi_lap1_at<T: Scalar>(b: &BlockSet<T>, hbar: T) -> C<T> {
    let two = T::lit(2.0);
    i_over_hbar(hbar) * (two * b.s20.trace()) + two * b.r20.trace()
}

#[inline]
pub(crate) fn chi_lap2_at<T: Scalar>(b: &BlockSet<T>, hbar: T) -> C<T> {
    let two = T::lit(2.0);
    i_over_hbar(hbar) * (two * b.s02.trace()) + two * b.r02.trace()
}

/// Finite-difference stencil in one time index: centered in the interior,
/// one-sided second order at the edges (first order when only two nodes
/// exist). Returns `(index, weight)` pairs.
pub(crate) fn time_stencil<T: Scalar>(n: usize, n_max: usize, eps: T) -> [(usize, T); 3] {
    let z = (n, T::zero());
    if n == 0 {
        if n_max >= 2 {
            [
                (0, T::lit(-1.5) / eps),
                (1, T::lit(2.0) / eps),
                (2, T::lit(-0.5) / eps),
            ]
        } else {
            [(0, -T::one() / eps), (1, T::one() / eps), z]
        }
    } else if n == n_max {
        if n_max >= 2 {
            [
                (n_max, T::lit(1.5) / eps),
                (n_max - 1, T::lit(-2.0) / eps),
                (n_max - 2, T::lit(0.5) / eps),
            ]
        } else {
            [(n_max - 1, -T::one() / eps), (n_max, T::one() / eps), z]
        }
    } else {
        let half = T::lit(0.5) / eps;
        [(n - 1, -half), (n + 1, half), z]
    }
}

/// Evaluates the exponent and its analytic spatial derivatives at a node;
/// time derivatives come from finite differences of the coefficient lattice
/// at the same coordinates. The slice length is recovered from the bound
/// constants.
pub fn eval_chi<T: Scalar>(
    coeffs: &ChiCoefficients<T>,
    cell: (usize, usize),
    x1: &Vec3<T>,
    x2: &Vec3<T>,
    constants: &Constants<T>,
) -> Result<ChiValue<T>, ChiError> {
    let (n1, n2) = cell;
    if !coeffs.in_range(n1, n2) {
        return Err(ChiError::OutOfGrid(n1, n2));
    }
    let hbar = constants.hbar;
    let eps = constants.epsilon();
    let b = coeffs.node(n1, n2);
    let mut dt1 = czero();
    for (i, w) in time_stencil(n1, coeffs.n1, eps) {
        if w != T::zero() {
            dt1 += chi_value_at(coeffs.node(i, n2), x1, x2, hbar) * w;
        }
    }
    let mut dt2 = czero();
    for (j, w) in time_stencil(n2, coeffs.n2, eps) {
        if w != T::zero() {
            dt2 += chi_value_at(coeffs.node(n1, j), x1, x2, hbar) * w;
        }
    }
    Ok(ChiValue {
        value: chi_value_at(b, x1, x2, hbar),
        grad_x1: chi_grad1_at(b, x1, x2, hbar),
        grad_x2: chi_grad2_at(b, x1, x2, hbar),
        lap_x1: chi_lap1_at(b, hbar),
        lap_x2: chi_lap2_at(b, hbar),
        dt1,
        dt2,
    })
}

/// Exact zero-coupling solution: an additive, purely imaginary exponent with
/// plane-wave structure for each particle and the kinetic dispersion
/// `W = p^2 / 2m`. Only `s00` varies across the lattice, linearly in both
/// times; all quadratic and cross blocks vanish.
pub fn free_particle_chi<T: Scalar>(
    grid: &TimeGrid<T>,
    p1: &Vec3<T>,
    p2: &Vec3<T>,
    constants: &Constants<T>,
) -> ChiCoefficients<T> {
    let w1 = p1.norm_sq() / (T::lit(2.0) * constants.m1);
    let w2 = p2.norm_sq() / (T::lit(2.0) * constants.m2);
    let t1_len = grid.duration_1();
    let t2_len = grid.duration_2();
    let mut out = ChiCoefficients::zeros(grid);
    for n1 in 0..=grid.slices_1() {
        let t1 = grid.time_1(n1);
        for n2 in 0..=grid.slices_2() {
            let t2 = grid.time_2(n2);
            let b = out.node_mut(n1, n2);
            b.s00 = -(w1 * t1 / t2_len + w2 * t2 / t1_len);
            b.s10 = p1.scale(t2_len.recip());
            b.s01 = p2.scale(t1_len.recip());
        }
    }
    out
}

pub const DEFAULT_OVERFLOW_BOUND: f64 = 700.0;

/// Product of the per-cell wave-function factors along a trajectory,
/// computed as `exp(sum eps * chi)` for stability.
pub fn reconstruct_wavefunctional<T: Scalar>(
    coeffs: &ChiCoefficients<T>,
    traj: &Trajectory<T>,
    constants: &Constants<T>,
) -> Result<C<T>, ChiError> {
    reconstruct_wavefunctional_with_bound(coeffs, traj, constants, T::lit(DEFAULT_OVERFLOW_BOUND))
}

pub fn reconstruct_wavefunctional_with_bound<T: Scalar>(
    coeffs: &ChiCoefficients<T>,
    traj: &Trajectory<T>,
    constants: &Constants<T>,
    bound: T,
) -> Result<C<T>, ChiError> {
    let log = log_wavefunctional(coeffs, traj, constants);
    if log.re > bound {
        return Err(ChiError::Overflow(
            log.re.to_f64().unwrap_or(f64::NAN),
            bound.to_f64().unwrap_or(f64::NAN),
        ));
    }
    Ok(log.exp())
}

/// `sum_{n1,n2 >= 1} eps * chi` along the trajectory, the log of the
/// reconstructed functional.
pub fn log_wavefunctional<T: Scalar>(
    coeffs: &ChiCoefficients<T>,
    traj: &Trajectory<T>,
    constants: &Constants<T>,
) -> C<T> {
    let eps = constants.epsilon();
    let hbar = constants.hbar;
    let (n1m, n2m) = coeffs.slices();
    let mut acc = czero();
    for n1 in 1..=n1m {
        for n2 in 1..=n2m {
            acc += chi_value_at(coeffs.node(n1, n2), traj.x1(n1), traj.x2(n2), hbar) * eps;
        }
    }
    acc
}

/// Splits the coefficient lattice into its phase part and amplitude part.
/// `recombine` restores the original bit for bit.
pub fn split_s_r<T: Scalar>(
    coeffs: &ChiCoefficients<T>,
) -> (ChiCoefficients<T>, ChiCoefficients<T>) {
    let mut s_part = coeffs.clone();
    let mut r_part = coeffs.clone();
    for b in &mut s_part.nodes {
        b.r00 = T::zero();
        b.r10 = Vec3::zero();
        b.r01 = Vec3::zero();
        b.r20 = Sym3::zero();
        b.r02 = Sym3::zero();
        b.r11 = Mat3::zero();
    }
    for b in &mut r_part.nodes {
        b.s00 = T::zero();
        b.s10 = Vec3::zero();
        b.s01 = Vec3::zero();
        b.s20 = Sym3::zero();
        b.s02 = Sym3::zero();
        b.s11 = Mat3::zero();
    }
    (s_part, r_part)
}

pub fn recombine<T: Scalar>(
    s_part: &ChiCoefficients<T>,
    r_part: &ChiCoefficients<T>,
) -> ChiCoefficients<T> {
    assert_eq!(s_part.slices(), r_part.slices());
    let mut out = s_part.clone();
    for (o, r) in out.nodes.iter_mut().zip(r_part.nodes.iter()) {
        o.r00 = r.r00;
        o.r10 = r.r10;
        o.r01 = r.r01;
        o.r20 = r.r20;
        o.r02 = r.r02;
        o.r11 = r.r11;
    }
    out
}

// ---------------------------------------------------------------------------
// Columnar serialization: one line per (node, block, component).
// Format: `n1 <TAB> n2 <TAB> block <TAB> k <TAB> l <TAB> value`, with k/l
// set to 0 where a block has fewer indices. Deterministic ordering.
// ---------------------------------------------------------------------------

const BLOCK_NAMES: [&str; 12] = [
    "s00", "r00", "s10", "s01", "r10", "r01", "s20", "s02", "r20", "r02", "s11", "r11",
];

fn for_each_component<T: Scalar>(b: &BlockSet<T>, mut f: impl FnMut(&str, usize, usize, T)) {
    f("s00", 0, 0, b.s00);
    f("r00", 0, 0, b.r00);
    for k in 0..3 {
        f("s10", k, 0, b.s10.0[k]);
    }
    for k in 0..3 {
        f("s01", k, 0, b.s01.0[k]);
    }
    for k in 0..3 {
        f("r10", k, 0, b.r10.0[k]);
    }
    for k in 0..3 {
        f("r01", k, 0, b.r01.0[k]);
    }
    let sym = [("s20", &b.s20), ("s02", &b.s02), ("r20", &b.r20), ("r02", &b.r02)];
    for (name, s) in sym {
        for k in 0..3 {
            f(name, k, k, s.diag[k]);
        }
        f(name, 0, 1, s.off[0]);
        f(name, 0, 2, s.off[1]);
        f(name, 1, 2, s.off[2]);
    }
    for (name, m) in [("s11", &b.s11), ("r11", &b.r11)] {
        for k in 0..3 {
            for l in 0..3 {
                f(name, k, l, m.0[k][l]);
            }
        }
    }
}

pub fn write_coefficients<T: Scalar, W: Write>(
    coeffs: &ChiCoefficients<T>,
    out: &mut W,
) -> io::Result<()> {
    writeln!(out, "# chi coefficient lattice")?;
    writeln!(out, "# nodes_1 = {}", coeffs.n1 + 1)?;
    writeln!(out, "# nodes_2 = {}", coeffs.n2 + 1)?;
    writeln!(out, "# columns: n1\tn2\tblock\tk\tl\tvalue")?;
    for n1 in 0..=coeffs.n1 {
        for n2 in 0..=coeffs.n2 {
            let mut err = None;
            for_each_component(coeffs.node(n1, n2), |name, k, l, v| {
                if err.is_none() {
                    if let Err(e) = writeln!(out, "{n1}\t{n2}\t{name}\t{k}\t{l}\t{v:.17e}") {
                        err = Some(e);
                    }
                }
            });
            if let Some(e) = err {
                return Err(e);
            }
        }
    }
    Ok(())
}

pub fn read_coefficients<T: Scalar, R: BufRead>(
    input: R,
    grid: &TimeGrid<T>,
) -> Result<ChiCoefficients<T>, ChiError> {
    let mut out = ChiCoefficients::zeros(grid);
    for (lineno, line) in input.lines().enumerate() {
        let line = line.map_err(|e| ChiError::Parse(e.to_string()))?;
        if line.starts_with('#') || line.trim().is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split('\t').collect();
        if fields.len() != 6 {
            return Err(ChiError::Parse(format!(
                "line {}: expected 6 tab-separated fields",
                lineno + 1
            )));
        }
        let bad = |what: &str| ChiError::Parse(format!("line {}: bad {}", lineno + 1, what));
        let n1: usize = fields[0].parse().map_err(|_| bad("n1"))?;
        let n2: usize = fields[1].parse().map_err(|_| bad("n2"))?;
        let k: usize = fields[3].parse().map_err(|_| bad("k"))?;
        let l: usize = fields[4].parse().map_err(|_| bad("l"))?;
        let v = T::from_f64(fields[5].parse::<f64>().map_err(|_| bad("value"))?)
            .ok_or_else(|| bad("value"))?;
        if !out.in_range(n1, n2) || k > 2 || l > 2 {
            return Err(bad("index"));
        }
        let name = fields[2];
        if !BLOCK_NAMES.contains(&name) {
            return Err(bad("block name"));
        }
        let b = out.node_mut(n1, n2);
        let sym_slot = |s: &mut Sym3<T>, k: usize, l: usize, v: T| {
            if k == l {
                s.diag[k] = v;
            } else {
                let (a, b2) = (k.min(l), k.max(l));
                let idx = match (a, b2) {
                    (0, 1) => 0,
                    (0, 2) => 1,
                    _ => 2,
                };
                s.off[idx] = v;
            }
        };
        match name {
            "s00" => b.s00 = v,
            "r00" => b.r00 = v,
            "s10" => b.s10.0[k] = v,
            "s01" => b.s01.0[k] = v,
            "r10" => b.r10.0[k] = v,
            "r01" => b.r01.0[k] = v,
            "s20" => sym_slot(&mut b.s20, k, l, v),
            "s02" => sym_slot(&mut b.s02, k, l, v),
            "r20" => sym_slot(&mut b.r20, k, l, v),
            "r02" => sym_slot(&mut b.r02, k, l, v),
            "s11" => b.s11.0[k][l] = v,
            "r11" => b.r11.0[k][l] = v,
            _ => unreachable!(),
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grid::{bind_constants, make_grid, Endpoints};
    use num_complex::Complex;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn setup() -> (TimeGrid<f64>, Constants<f64>) {
        let g = make_grid(1.0, 2.0, 0.25).unwrap();
        let c = bind_constants(&g, 1.0);
        (g, c)
    }

    fn random_coeffs(grid: &TimeGrid<f64>, rng: &mut ChaCha8Rng) -> ChiCoefficients<f64> {
        let mut out = ChiCoefficients::zeros(grid);
        for n1 in 0..=grid.slices_1() {
            for n2 in 0..=grid.slices_2() {
                let b = out.node_mut(n1, n2);
                let mut r = || rng.gen_range(-0.5..0.5);
                b.s00 = r();
                b.r00 = r();
                b.s10 = Vec3::new(r(), r(), r());
                b.s01 = Vec3::new(r(), r(), r());
                b.r10 = Vec3::new(r(), r(), r());
                b.r01 = Vec3::new(r(), r(), r());
                for s in [&mut b.s20, &mut b.s02, &mut b.r20, &mut b.r02] {
                    s.diag = [r(), r(), r()];
                    s.off = [r(), r(), r()];
                }
                for m in [&mut b.s11, &mut b.r11] {
                    for row in m.0.iter_mut() {
                        for v in row.iter_mut() {
                            *v = r();
                        }
                    }
                }
            }
        }
        out
    }

    #[test]
    fn eval_zero_coefficients() {
        let (g, c) = setup();
        let coeffs = ChiCoefficients::zeros(&g);
        let v = eval_chi(&coeffs, (1, 1), &Vec3::new(1.0, 2.0, 3.0), &Vec3::zero(), &c).unwrap();
        assert_eq!(v.value, Complex::new(0.0, 0.0));
        assert_eq!(v.lap_x1, Complex::new(0.0, 0.0));
        assert_eq!(v.dt1, Complex::new(0.0, 0.0));
    }

    #[test]
    fn eval_linear_term() {
        let (g, c) = setup();
        let mut coeffs = ChiCoefficients::zeros(&g);
        coeffs.node_mut(1, 1).s10 = Vec3::new(1.0, 0.0, 0.0);
        let v = eval_chi(&coeffs, (1, 1), &Vec3::new(2.0, 0.0, 0.0), &Vec3::zero(), &c).unwrap();
        assert_eq!(v.value, Complex::new(0.0, 2.0));
        assert_eq!(v.grad_x1[0], Complex::new(0.0, 1.0));
        assert_eq!(v.lap_x1, Complex::new(0.0, 0.0));
    }

    #[test]
    fn eval_quadratic_term() {
        let (g, c) = setup();
        let mut coeffs = ChiCoefficients::zeros(&g);
        coeffs.node_mut(2, 1).s20 = Sym3::identity();
        let v = eval_chi(&coeffs, (2, 1), &Vec3::new(1.0, 1.0, 0.0), &Vec3::zero(), &c).unwrap();
        assert_eq!(v.value, Complex::new(0.0, 2.0));
        assert_eq!(v.lap_x1, Complex::new(0.0, 6.0));
    }

    #[test]
    fn eval_out_of_grid() {
        let (g, c) = setup();
        let coeffs = ChiCoefficients::zeros(&g);
        assert!(matches!(
            eval_chi(&coeffs, (99, 0), &Vec3::zero(), &Vec3::zero(), &c),
            Err(ChiError::OutOfGrid(99, 0))
        ));
    }

    #[test]
    fn gradients_match_finite_differences() {
        let (g, c) = setup();
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let h = 1e-5;
        for _ in 0..100 {
            let coeffs = random_coeffs(&g, &mut rng);
            let x1 = Vec3::new(
                rng.gen_range(-1.0..1.0),
                rng.gen_range(-1.0..1.0),
                rng.gen_range(-1.0..1.0),
            );
            let x2 = Vec3::new(
                rng.gen_range(-1.0..1.0),
                rng.gen_range(-1.0..1.0),
                rng.gen_range(-1.0..1.0),
            );
            let n1 = rng.gen_range(0..=g.slices_1());
            let n2 = rng.gen_range(0..=g.slices_2());
            let v = eval_chi(&coeffs, (n1, n2), &x1, &x2, &c).unwrap();
            for k in 0..3 {
                let mut xp = x1;
                let mut xm = x1;
                xp.0[k] += h;
                xm.0[k] -= h;
                let fp = eval_chi(&coeffs, (n1, n2), &xp, &x2, &c).unwrap().value;
                let fm = eval_chi(&coeffs, (n1, n2), &xm, &x2, &c).unwrap().value;
                let fd = (fp - fm) / (2.0 * h);
                let scale = v.grad_x1[k].norm().max(fd.norm()).max(1e-8);
                assert!(
                    (v.grad_x1[k] - fd).norm() / scale < 1e-6,
                    "grad_x1[{k}] mismatch"
                );
            }
        }
    }

    #[test]
    fn free_chi_example_value() {
        // p1 = (1,0,0), m1 = 1, T2 = 2: at t1 = 1, x1 = (1,0,0), t2 = 0 the
        // exponent is -i(0.5 - 1)/2 = 0.25 i
        let g = make_grid(1.0, 2.0, 0.5).unwrap();
        let c = bind_constants(&g, 1.0);
        let coeffs = free_particle_chi(&g, &Vec3::new(1.0, 0.0, 0.0), &Vec3::zero(), &c);
        let v = eval_chi(&coeffs, (2, 0), &Vec3::new(1.0, 0.0, 0.0), &Vec3::zero(), &c).unwrap();
        assert!((v.value - Complex::new(0.0, 0.25)).norm() < 1e-14);
    }

    #[test]
    fn free_chi_zero_momenta_is_zero() {
        let (g, c) = setup();
        let coeffs = free_particle_chi(&g, &Vec3::zero(), &Vec3::zero(), &c);
        assert_eq!(coeffs, ChiCoefficients::zeros(&g));
    }

    #[test]
    fn free_chi_structure() {
        let (g, c) = setup();
        let c2 = c.with_masses(1.0, 2.0);
        let coeffs = free_particle_chi(&g, &Vec3::new(1.0, -2.0, 0.5), &Vec3::new(0.3, 0.0, 0.0), &c2);
        assert_eq!(coeffs.cross_block_max_norm(), 0.0);
        // x-blocks are time independent; s00 varies linearly in both times
        let eps = g.epsilon();
        for n1 in 0..=g.slices_1() {
            for n2 in 0..=g.slices_2() {
                let b = coeffs.node(n1, n2);
                assert_eq!(b.s10, coeffs.node(0, 0).s10);
                assert_eq!(b.s01, coeffs.node(0, 0).s01);
                let d00 = coeffs.node(0, 0).s00;
                let dt1 = if g.slices_1() > 0 {
                    (coeffs.node(1, 0).s00 - d00) / eps
                } else {
                    0.0
                };
                let dt2 = (coeffs.node(0, 1).s00 - d00) / eps;
                let want = d00 + dt1 * g.time_1(n1) + dt2 * g.time_2(n2);
                assert!((b.s00 - want).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn wavefunctional_identities() {
        let (g, c) = setup();
        // zero exponent -> 1
        let zero = ChiCoefficients::zeros(&g);
        let t = Trajectory::straight(&g, &Endpoints::zero());
        assert_eq!(
            reconstruct_wavefunctional(&zero, &t, &c).unwrap(),
            Complex::new(1.0, 0.0)
        );
        // single-cell grid with constant chi -> exp(eps chi)
        let g1 = make_grid(1.0, 1.0, 1.0).unwrap();
        let c1 = bind_constants(&g1, 1.0);
        let mut k = ChiCoefficients::zeros(&g1);
        for n1 in 0..=1 {
            for n2 in 0..=1 {
                k.node_mut(n1, n2).r00 = 0.3;
                k.node_mut(n1, n2).s00 = 0.7;
            }
        }
        let t1 = Trajectory::straight(&g1, &Endpoints::zero());
        let got = reconstruct_wavefunctional(&k, &t1, &c1).unwrap();
        let want = (Complex::new(0.3, 0.7)).exp();
        assert!((got - want).norm() < 1e-14);
    }

    #[test]
    fn wavefunctional_log_matches_integral_sums() {
        let (g, c) = setup();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let coeffs = random_coeffs(&g, &mut rng);
        let ep = Endpoints::zero();
        let t = crate::grid::sample_collocation(&g, &ep, 1, 5).pop().unwrap();
        let log = log_wavefunctional(&coeffs, &t, &c);
        // (i/hbar_tilde) S + R with S, R the eps^2-weighted sums
        let eps = g.epsilon();
        let mut s_sum = 0.0;
        let mut r_sum = 0.0;
        for n1 in 1..=g.slices_1() {
            for n2 in 1..=g.slices_2() {
                let b = coeffs.node(n1, n2);
                s_sum += eps * eps * b.s_value(t.x1(n1), t.x2(n2));
                // stored amplitude blocks already carry one factor of eps
                r_sum += eps * b.r_value(t.x1(n1), t.x2(n2));
            }
        }
        let want = Complex::new(0.0, 1.0 / c.hbar_tilde) * s_sum + r_sum;
        assert!((log - want).norm() / want.norm() < 1e-12);
    }

    #[test]
    fn free_wavefunctional_has_unit_modulus() {
        let (g, c) = setup();
        let c2 = c.with_masses(1.0, 2.0);
        let coeffs = free_particle_chi(&g, &Vec3::new(1.0, 0.0, 0.0), &Vec3::new(2.0, 0.0, 0.0), &c2);
        let ep = Endpoints {
            x1_start: Vec3::zero(),
            x1_end: Vec3::new(1.0, 0.0, 0.0),
            x2_start: Vec3::zero(),
            x2_end: Vec3::new(0.0, 1.0, 0.0),
        };
        let t = Trajectory::straight(&g, &ep);
        let psi = reconstruct_wavefunctional(&coeffs, &t, &c2).unwrap();
        assert!((psi.norm() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn overflow_guard() {
        let g = make_grid(1.0, 1.0, 1.0).unwrap();
        let c = bind_constants(&g, 1.0);
        let mut k = ChiCoefficients::zeros(&g);
        k.node_mut(1, 1).r00 = 1e5;
        let t = Trajectory::straight(&g, &Endpoints::zero());
        assert!(matches!(
            reconstruct_wavefunctional(&k, &t, &c),
            Err(ChiError::Overflow(_, _))
        ));
    }

    #[test]
    fn split_recombine_roundtrip_bitwise() {
        let (g, c) = setup();
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        let coeffs = random_coeffs(&g, &mut rng);
        let (s_part, r_part) = split_s_r(&coeffs);
        // phase part of the free solution is the whole of it
        let free = free_particle_chi(&g, &Vec3::new(1.0, 0.0, 0.0), &Vec3::zero(), &c);
        let (fs, fr) = split_s_r(&free);
        assert_eq!(fs, free);
        assert_eq!(fr, ChiCoefficients::zeros(&g));
        assert_eq!(recombine(&s_part, &r_part), coeffs);
    }

    #[test]
    fn serialization_roundtrip() {
        let (g, _) = setup();
        let mut rng = ChaCha8Rng::seed_from_u64(23);
        let coeffs = random_coeffs(&g, &mut rng);
        let mut buf = Vec::new();
        write_coefficients(&coeffs, &mut buf).unwrap();
        let back = read_coefficients(std::io::BufReader::new(&buf[..]), &g).unwrap();
        for n1 in 0..=g.slices_1() {
            for n2 in 0..=g.slices_2() {
                let a = coeffs.node(n1, n2);
                let b = back.node(n1, n2);
                assert!((a.s00 - b.s00).abs() < 1e-15);
                assert!((a.s11.0[1][2] - b.s11.0[1][2]).abs() < 1e-15);
                assert!((a.r02.off[1] - b.r02.off[1]).abs() < 1e-15);
            }
        }
    }
}
