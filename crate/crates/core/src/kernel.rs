//! Minkowski interval, Gaussian-regularized light-cone delta, and the
//! double-time Coulomb interaction sums.
//!
//! The regularization replaces the sharp light-cone support by a Gaussian of
//! width `sigma` in the squared interval; the physical limit is reached by
//! evaluating on a decreasing `sigma` sequence. The inner time integral is
//! done by adaptive quadrature that subdivides at the light-cone roots, where
//! the integrand is a pair of narrow bumps.

use thiserror::Error;

use crate::grid::{TimeGrid, Trajectory};
use crate::scalar::{Scalar, Vec3};

#[derive(Debug, Error, PartialEq)]
pub enum KernelError {
    #[error("regularization width must be positive, got {0}")]
    NonPositiveSigma(f64),
    #[error("spatial separation must be positive, got {0}")]
    NonPositiveSeparation(f64),
    #[error("adaptive quadrature failed to reach tolerance {tol} (best error estimate {best})")]
    QuadratureFailure { tol: f64, best: f64 },
}

/// Coupling prefactor convention for the interaction term. The action
/// operator definition carries 1/2, the assembled wave-equation form a plain
/// product; both appear in the source material, so the choice is explicit.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CouplingPrefactor {
    Half,
    Full,
}

impl CouplingPrefactor {
    pub fn value<T: Scalar>(&self) -> T {
        match self {
            CouplingPrefactor::Half => T::lit(0.5),
            CouplingPrefactor::Full => T::one(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct KernelConfig<T> {
    pub sigma: T,
    pub coupling_prefactor: CouplingPrefactor,
    pub e1e2: T,
}

impl<T: Scalar> KernelConfig<T> {
    pub fn new(sigma: T, coupling_prefactor: CouplingPrefactor, e1e2: T) -> Result<Self, KernelError> {
        if sigma <= T::zero() {
            return Err(KernelError::NonPositiveSigma(sigma.to_f64().unwrap_or(f64::NAN)));
        }
        Ok(KernelConfig {
            sigma,
            coupling_prefactor,
            e1e2,
        })
    }
}

/// Squared Minkowski interval `(t1-t2)^2 - |x1-x2|^2` (c = 1).
#[inline]
pub fn interval_squared<T: Scalar>(t1: T, t2: T, x1: &Vec3<T>, x2: &Vec3<T>) -> T {
    let dt = t1 - t2;
    dt * dt - x1.sub(x2).norm_sq()
}

#[inline]
pub(crate) fn regularized_delta_unchecked<T: Scalar>(s2: T, sigma: T) -> T {
    let norm = (T::lit(2.0) * T::PI() * sigma).sqrt().recip();
    norm * (-(s2 * s2) / (T::lit(2.0) * sigma)).exp()
}

/// Gaussian stand-in for the light-cone delta: `exp(-(s2)^2/(2 sigma)) / sqrt(2 pi sigma)`.
/// Even in `s2` and strictly positive (underflow to 0 aside).
pub fn regularized_delta<T: Scalar>(s2: T, sigma: T) -> Result<T, KernelError> {
    if sigma <= T::zero() {
        return Err(KernelError::NonPositiveSigma(sigma.to_f64().unwrap_or(f64::NAN)));
    }
    Ok(regularized_delta_unchecked(s2, sigma))
}

/// Adaptive Simpson on `[a, b]` with absolute tolerance.
fn adaptive_simpson<T: Scalar, F: Fn(T) -> T>(
    f: &F,
    a: T,
    b: T,
    tol: T,
    max_depth: u32,
) -> Result<T, KernelError> {
    fn simpson<T: Scalar>(fa: T, fm: T, fb: T, h: T) -> T {
        h / T::lit(6.0) * (fa + T::lit(4.0) * fm + fb)
    }
    struct Frame<T> {
        a: T,
        b: T,
        fa: T,
        fm: T,
        fb: T,
        whole: T,
        tol: T,
        depth: u32,
    }
    let half = T::lit(0.5);
    let m0 = (a + b) * half;
    let (fa0, fm0, fb0) = (f(a), f(m0), f(b));
    let mut stack = vec![Frame {
        a,
        b,
        fa: fa0,
        fm: fm0,
        fb: fb0,
        whole: simpson(fa0, fm0, fb0, b - a),
        tol,
        depth: 0,
    }];
    let mut total = T::zero();
    while let Some(fr) = stack.pop() {
        let m = (fr.a + fr.b) * half;
        let lm = (fr.a + m) * half;
        let rm = (m + fr.b) * half;
        let flm = f(lm);
        let frm = f(rm);
        let h = m - fr.a;
        let left = simpson(fr.fa, flm, fr.fm, h);
        let right = simpson(fr.fm, frm, fr.fb, h);
        let err = (left + right - fr.whole) / T::lit(15.0);
        if err.abs() <= fr.tol || fr.depth >= max_depth {
            if fr.depth >= max_depth && err.abs() > fr.tol {
                return Err(KernelError::QuadratureFailure {
                    tol: tol.to_f64().unwrap_or(f64::NAN),
                    best: err.abs().to_f64().unwrap_or(f64::NAN),
                });
            }
            total += left + right + err;
        } else {
            let child_tol = fr.tol * half;
            stack.push(Frame {
                a: fr.a,
                b: m,
                fa: fr.fa,
                fm: flm,
                fb: fr.fm,
                whole: left,
                tol: child_tol,
                depth: fr.depth + 1,
            });
            stack.push(Frame {
                a: m,
                b: fr.b,
                fa: fr.fm,
                fm: frm,
                fb: fr.fb,
                whole: right,
                tol: child_tol,
                depth: fr.depth + 1,
            });
        }
    }
    Ok(total)
}

const QUAD_TOL: f64 = 1e-10;
const QUAD_MAX_DEPTH: u32 = 48;

/// Inner time integral of the regularized light-cone kernel over a window,
/// for a static spatial separation `r`:
/// `int_lo^hi dt2 delta_sigma((t1-t2)^2 - r^2)`.
///
/// The interval is split at the light-cone roots `t2 = t1 -+ r` (and at `t1`
/// itself) so the adaptive rule sees each Gaussian bump on its own panel.
pub fn coulomb_time_integral_window<T: Scalar>(
    t1: T,
    r: T,
    lo: T,
    hi: T,
    config: &KernelConfig<T>,
) -> Result<T, KernelError> {
    if r <= T::zero() {
        return Err(KernelError::NonPositiveSeparation(r.to_f64().unwrap_or(f64::NAN)));
    }
    let sigma = config.sigma;
    let f = |t2: T| regularized_delta_unchecked((t1 - t2) * (t1 - t2) - r * r, sigma);
    let mut cuts = vec![lo, hi];
    for c in [t1 - r, t1, t1 + r] {
        if c > lo && c < hi {
            cuts.push(c);
        }
    }
    cuts.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let tol = T::lit(QUAD_TOL) / T::from_usize(cuts.len() - 1).unwrap();
    let mut total = T::zero();
    for w in cuts.windows(2) {
        total += adaptive_simpson(&f, w[0], w[1], tol, QUAD_MAX_DEPTH)?;
    }
    Ok(total)
}

/// Inner time integral over `[0, T2]`. As `sigma -> 0` this approaches
/// `(number of roots t2 = t1 -+ r inside the window) / (2 r)`.
pub fn coulomb_time_integral<T: Scalar>(
    t1: T,
    r: T,
    t2_len: T,
    config: &KernelConfig<T>,
) -> Result<T, KernelError> {
    coulomb_time_integral_window(t1, r, T::zero(), t2_len, config)
}

/// Discrete double Riemann sum of the interaction term along a trajectory:
/// `prefactor * e1e2 * sum_{n1,n2} eps^2 delta_sigma(s^2)` over interior and
/// final nodes of both axes.
pub fn coulomb_action_term<T: Scalar>(
    traj: &Trajectory<T>,
    grid: &TimeGrid<T>,
    config: &KernelConfig<T>,
) -> T {
    let eps2 = grid.epsilon() * grid.epsilon();
    let coupling = config.coupling_prefactor.value::<T>() * config.e1e2;
    if coupling == T::zero() {
        return T::zero();
    }
    let mut acc = T::zero();
    for n1 in 1..=grid.slices_1() {
        let t1 = grid.time_1(n1);
        for n2 in 1..=grid.slices_2() {
            let t2 = grid.time_2(n2);
            let s2 = interval_squared(t1, t2, traj.x1(n1), traj.x2(n2));
            acc += regularized_delta_unchecked(s2, config.sigma);
        }
    }
    coupling * eps2 * acc
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grid::{make_grid, Endpoints, Trajectory};

    fn cfg(sigma: f64) -> KernelConfig<f64> {
        KernelConfig::new(sigma, CouplingPrefactor::Full, 1.0).unwrap()
    }

    #[test]
    fn interval_examples() {
        let o = Vec3::zero();
        let ex = Vec3::new(1.0, 0.0, 0.0);
        assert_eq!(interval_squared(1.0, 0.0, &o, &o), 1.0);
        assert_eq!(interval_squared(0.0, 0.0, &o, &ex), -1.0);
        let e2 = Vec3::new(2.0, 0.0, 0.0);
        assert_eq!(interval_squared(2.0, 0.0, &o, &e2), 0.0);
    }

    #[test]
    fn delta_examples() {
        let v = regularized_delta(0.0, 1.0).unwrap();
        assert!((v - 1.0 / (2.0 * std::f64::consts::PI).sqrt()).abs() < 1e-12);
        let a = regularized_delta(0.7, 0.3).unwrap();
        let b = regularized_delta(-0.7, 0.3).unwrap();
        assert_eq!(a, b);
        assert!(regularized_delta(10.0, 1e-2).unwrap() < 1e-300);
        assert!(matches!(
            regularized_delta(1.0, 0.0),
            Err(KernelError::NonPositiveSigma(_))
        ));
    }

    #[test]
    fn delta_normalizes_to_one() {
        // quadrature over a wide window captures all mass for these widths
        for sigma in [1e-1, 1e-3] {
            let c = cfg(sigma);
            let f = |u: f64| regularized_delta_unchecked(u, c.sigma);
            let v = adaptive_simpson(&f, -20.0 * sigma.sqrt(), 20.0 * sigma.sqrt(), 1e-12, 48)
                .unwrap();
            assert!((v - 1.0).abs() < 1e-8, "sigma={sigma}: got {v}");
        }
    }

    #[test]
    fn time_integral_examples() {
        // both roots interior -> 1/r
        let v = coulomb_time_integral(5.0, 0.5, 10.0, &cfg(1e-6)).unwrap();
        assert!((v - 2.0).abs() < 1e-3, "got {v}");
        // only the later root interior
        let v = coulomb_time_integral(0.1, 0.5, 10.0, &cfg(1e-6)).unwrap();
        assert!((v - 1.0).abs() < 1e-3, "got {v}");
        // light cone far outside the window
        let v = coulomb_time_integral(5.0, 20.0, 10.0, &cfg(1e-6)).unwrap();
        assert!(v.abs() < 1e-6, "got {v}");
        assert!(matches!(
            coulomb_time_integral(5.0, 0.0, 10.0, &cfg(1e-6)),
            Err(KernelError::NonPositiveSeparation(_))
        ));
    }

    #[test]
    fn time_integral_translation_invariance() {
        let c = cfg(1e-4);
        let a = coulomb_time_integral_window(3.0, 0.5, 0.0, 8.0, &c).unwrap();
        let b = coulomb_time_integral_window(4.5, 0.5, 1.5, 9.5, &c).unwrap();
        assert!((a - b).abs() < 1e-9, "{a} vs {b}");
    }

    #[test]
    fn sigma_convergence_toward_light_cone_limit() {
        // Error decays linearly in sigma for interior roots; the bound
        // |err| <= C sqrt(sigma) holds with room to spare.
        let sigmas = [1e-2, 1e-3, 1e-4, 1e-5, 1e-6];
        let errs: Vec<f64> = sigmas
            .iter()
            .map(|&s| (coulomb_time_integral(5.0, 0.5, 10.0, &cfg(s)).unwrap() - 2.0).abs())
            .collect();
        for w in errs.windows(2) {
            assert!(w[1] < w[0]);
        }
        assert!(*errs.last().unwrap() < 1e-3);
        // fitted order in sigma over the asymptotic tail
        let p = (errs[2] / errs[4]).ln() / (sigmas[2] / sigmas[4] as f64).ln();
        assert!((0.7..1.3).contains(&p), "order in sigma = {p}");
        // C sqrt(sigma) bound with C fitted on the coarsest point
        let c0 = errs[0] / sigmas[0].sqrt();
        for (e, s) in errs.iter().zip(sigmas.iter()) {
            assert!(*e <= c0 * s.sqrt() * 1.0001);
        }
    }

    #[test]
    fn action_term_zero_coupling() {
        let g = make_grid(1.0, 1.0, 0.25).unwrap();
        let t = Trajectory::straight(&g, &Endpoints::zero());
        let c = KernelConfig::new(1e-2, CouplingPrefactor::Half, 0.0).unwrap();
        assert_eq!(coulomb_action_term(&t, &g, &c), 0.0);
    }

    #[test]
    fn action_term_static_separation_matches_root_count_oracle() {
        // Static separation r: as eps -> 0 at small sigma the double sum
        // approaches int_0^T1 (roots inside [0,T2])/(2r) dt1 = (2T - 2r)/(2r).
        let r = 0.5;
        let t_len = 10.0;
        let oracle = (2.0 * t_len - 2.0 * r) / (2.0 * r); // 19 for these numbers
        let c = cfg(1e-6);
        let mut prev_err = f64::INFINITY;
        for eps in [0.01, 0.005, 0.0025] {
            let g = make_grid(t_len, t_len, eps).unwrap();
            let ep = Endpoints {
                x1_start: Vec3::zero(),
                x1_end: Vec3::zero(),
                x2_start: Vec3::new(r, 0.0, 0.0),
                x2_end: Vec3::new(r, 0.0, 0.0),
            };
            let t = Trajectory::straight(&g, &ep);
            let v = coulomb_action_term(&t, &g, &c);
            let err = (v - oracle).abs();
            assert!(err < prev_err || err < 2e-2 * oracle);
            prev_err = err;
        }
        assert!(prev_err < 2e-2 * oracle, "final error {prev_err}");
    }

    #[test]
    fn action_term_riemann_order_in_eps() {
        // fixed sigma, smooth static trajectory: measured order in eps
        // within the generic first-to-second-order window
        let r = 0.6;
        let c = cfg(5e-2);
        let t_len = 4.0;
        let ep = Endpoints {
            x1_start: Vec3::zero(),
            x1_end: Vec3::zero(),
            x2_start: Vec3::new(r, 0.0, 0.0),
            x2_end: Vec3::new(r, 0.0, 0.0),
        };
        let vals: Vec<f64> = [0.05, 0.025, 0.0125, 0.00625]
            .iter()
            .map(|&eps| {
                let g = make_grid(t_len, t_len, eps).unwrap();
                let t = Trajectory::straight(&g, &ep);
                coulomb_action_term(&t, &g, &c)
            })
            .collect();
        // Richardson-style order estimate from successive differences
        let d1 = (vals[0] - vals[3]).abs();
        let d2 = (vals[1] - vals[3]).abs();
        let order = (d1 / d2).log2();
        assert!(
            (0.8..2.2).contains(&order),
            "measured order {order}, values {vals:?}"
        );
    }
}
