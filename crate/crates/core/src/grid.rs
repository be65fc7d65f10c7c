//! Two-time discretization: uniform slicing of both time intervals, the
//! broken-line trajectory representation, and the bookkeeping between the
//! functional constant and the per-slice one.
//!
//! Both axes share a single step: `epsilon == T1/N1 == T2/N2`. Every discrete
//! formula in the crate assumes this, so commensurability is enforced at
//! construction rather than patched up later.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::scalar::{Scalar, Vec3};

#[derive(Debug, Error, PartialEq)]
pub enum GridError {
    #[error("durations and step must be positive (T1={t1}, T2={t2}, epsilon={epsilon})")]
    NonPositive { t1: f64, t2: f64, epsilon: f64 },
    #[error("interval of length {t} is not an integer multiple of epsilon={epsilon}")]
    NonCommensurate { t: f64, epsilon: f64 },
    #[error("trajectory arrays must have lengths N1+1={want1} and N2+1={want2}, got {got1} and {got2}")]
    LengthMismatch {
        want1: usize,
        want2: usize,
        got1: usize,
        got2: usize,
    },
}

/// Two time axes `[0,T1]`, `[0,T2]` sliced into `N1`, `N2` steps of common
/// length `epsilon`. Node times are `t_n = n * epsilon`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TimeGrid<T> {
    t1: T,
    t2: T,
    n1: usize,
    n2: usize,
    epsilon: T,
}

impl<T: Scalar> TimeGrid<T> {
    pub fn duration_1(&self) -> T {
        self.t1
    }

    pub fn duration_2(&self) -> T {
        self.t2
    }

    pub fn slices_1(&self) -> usize {
        self.n1
    }

    pub fn slices_2(&self) -> usize {
        self.n2
    }

    pub fn epsilon(&self) -> T {
        self.epsilon
    }

    /// Node time on the first axis, `n` in `0..=N1`.
    pub fn time_1(&self, n: usize) -> T {
        T::from_usize(n).unwrap() * self.epsilon
    }

    /// Node time on the second axis, `n` in `0..=N2`.
    pub fn time_2(&self, n: usize) -> T {
        T::from_usize(n).unwrap() * self.epsilon
    }
}

fn commensurate<T: Scalar>(t: T, epsilon: T) -> Result<usize, GridError> {
    let ratio = t / epsilon;
    let rounded = ratio.round();
    let rel = ((ratio - rounded) / ratio).abs();
    if rel > T::lit(1e-9) || rounded < T::one() {
        return Err(GridError::NonCommensurate {
            t: t.to_f64().unwrap_or(f64::NAN),
            epsilon: epsilon.to_f64().unwrap_or(f64::NAN),
        });
    }
    Ok(rounded.to_usize().expect("slice count fits in usize"))
}

/// Builds the grid, requiring both `T1/epsilon` and `T2/epsilon` to be
/// integral to within 1e-9 relative.
pub fn make_grid<T: Scalar>(t1: T, t2: T, epsilon: T) -> Result<TimeGrid<T>, GridError> {
    if t1 <= T::zero() || t2 <= T::zero() || epsilon <= T::zero() {
        return Err(GridError::NonPositive {
            t1: t1.to_f64().unwrap_or(f64::NAN),
            t2: t2.to_f64().unwrap_or(f64::NAN),
            epsilon: epsilon.to_f64().unwrap_or(f64::NAN),
        });
    }
    let n1 = commensurate(t1, epsilon)?;
    let n2 = commensurate(t2, epsilon)?;
    Ok(TimeGrid {
        t1,
        t2,
        n1,
        n2,
        epsilon,
    })
}

/// Physical constants of a run. `hbar_tilde` is the per-slice constant of the
/// functional theory and always equals `epsilon * hbar` once bound to a grid.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Constants<T> {
    pub hbar: T,
    pub hbar_tilde: T,
    pub m1: T,
    pub m2: T,
    pub e1e2: T,
}

impl<T: Scalar> Constants<T> {
    pub fn with_masses(mut self, m1: T, m2: T) -> Self {
        assert!(m1 > T::zero() && m2 > T::zero(), "masses must be positive");
        self.m1 = m1;
        self.m2 = m2;
        self
    }

    pub fn with_coupling(mut self, e1e2: T) -> Self {
        self.e1e2 = e1e2;
        self
    }

    /// Slice length recovered from the bound constants.
    pub fn epsilon(&self) -> T {
        self.hbar_tilde / self.hbar
    }
}

/// Binds the per-slice constant to a grid: `hbar_tilde = epsilon * hbar`.
/// Masses default to 1 and the coupling to 0; see the builder methods.
pub fn bind_constants<T: Scalar>(grid: &TimeGrid<T>, hbar: T) -> Constants<T> {
    assert!(hbar > T::zero(), "hbar must be positive");
    Constants {
        hbar,
        hbar_tilde: grid.epsilon() * hbar,
        m1: T::one(),
        m2: T::one(),
        e1e2: T::zero(),
    }
}

/// The four fixed endpoint vertices shared by a family of trajectories.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Endpoints<T> {
    pub x1_start: Vec3<T>,
    pub x1_end: Vec3<T>,
    pub x2_start: Vec3<T>,
    pub x2_end: Vec3<T>,
}

impl<T: Scalar> Endpoints<T> {
    pub fn zero() -> Self {
        Endpoints {
            x1_start: Vec3::zero(),
            x1_end: Vec3::zero(),
            x2_start: Vec3::zero(),
            x2_end: Vec3::zero(),
        }
    }
}

/// Broken-line vertices for both particles. Endpoints (indices 0 and N) are
/// fixed at construction; no mutation path can move them afterwards.
#[derive(Debug, Clone, PartialEq)]
pub struct Trajectory<T> {
    x1: Vec<Vec3<T>>,
    x2: Vec<Vec3<T>>,
}

impl<T: Scalar> Trajectory<T> {
    pub fn new(
        grid: &TimeGrid<T>,
        x1: Vec<Vec3<T>>,
        x2: Vec<Vec3<T>>,
    ) -> Result<Self, GridError> {
        if x1.len() != grid.slices_1() + 1 || x2.len() != grid.slices_2() + 1 {
            return Err(GridError::LengthMismatch {
                want1: grid.slices_1() + 1,
                want2: grid.slices_2() + 1,
                got1: x1.len(),
                got2: x2.len(),
            });
        }
        Ok(Trajectory { x1, x2 })
    }

    /// Straight line between the endpoints on both axes.
    pub fn straight(grid: &TimeGrid<T>, ep: &Endpoints<T>) -> Self {
        let lerp = |a: &Vec3<T>, b: &Vec3<T>, n: usize, nn: usize| {
            let f = T::from_usize(n).unwrap() / T::from_usize(nn).unwrap();
            a.add(&b.sub(a).scale(f))
        };
        let x1 = (0..=grid.slices_1())
            .map(|n| lerp(&ep.x1_start, &ep.x1_end, n, grid.slices_1()))
            .collect();
        let x2 = (0..=grid.slices_2())
            .map(|n| lerp(&ep.x2_start, &ep.x2_end, n, grid.slices_2()))
            .collect();
        Trajectory { x1, x2 }
    }

    /// Same endpoints, all interior vertices at the origin. This is the
    /// reference configuration used to split off the coordinate-dependent
    /// part of the auxiliary functional.
    pub fn zero_interior(grid: &TimeGrid<T>, ep: &Endpoints<T>) -> Self {
        let n1 = grid.slices_1();
        let n2 = grid.slices_2();
        let x1 = (0..=n1)
            .map(|n| {
                if n == 0 {
                    ep.x1_start
                } else if n == n1 {
                    ep.x1_end
                } else {
                    Vec3::zero()
                }
            })
            .collect();
        let x2 = (0..=n2)
            .map(|n| {
                if n == 0 {
                    ep.x2_start
                } else if n == n2 {
                    ep.x2_end
                } else {
                    Vec3::zero()
                }
            })
            .collect();
        Trajectory { x1, x2 }
    }

    pub fn x1(&self, n: usize) -> &Vec3<T> {
        &self.x1[n]
    }

    pub fn x2(&self, n: usize) -> &Vec3<T> {
        &self.x2[n]
    }

    pub fn endpoints(&self) -> Endpoints<T> {
        Endpoints {
            x1_start: self.x1[0],
            x1_end: *self.x1.last().unwrap(),
            x2_start: self.x2[0],
            x2_end: *self.x2.last().unwrap(),
        }
    }

    /// Reference trajectory with the same endpoints and zeroed interior.
    pub fn reference(&self) -> Self {
        let n1 = self.x1.len() - 1;
        let n2 = self.x2.len() - 1;
        let mut x1 = vec![Vec3::zero(); n1 + 1];
        let mut x2 = vec![Vec3::zero(); n2 + 1];
        x1[0] = self.x1[0];
        x1[n1] = self.x1[n1];
        x2[0] = self.x2[0];
        x2[n2] = self.x2[n2];
        Trajectory { x1, x2 }
    }
}

/// Collocation sampler settings. The interior shape is a cubic bump that
/// vanishes at both endpoints plus uniform vertex jitter; both are scaled by
/// `amplitude`, so zero amplitude degenerates to the straight line.
#[derive(Debug, Clone, Copy)]
pub struct SamplerOptions<T> {
    pub amplitude: T,
}

impl<T: Scalar> Default for SamplerOptions<T> {
    fn default() -> Self {
        SamplerOptions {
            amplitude: T::lit(0.5),
        }
    }
}

/// Draws `count` trajectories interpolating the fixed endpoints.
/// Deterministic for equal seeds.
pub fn sample_collocation<T: Scalar>(
    grid: &TimeGrid<T>,
    endpoints: &Endpoints<T>,
    count: usize,
    seed: u64,
) -> Vec<Trajectory<T>> {
    sample_collocation_with(grid, endpoints, count, seed, SamplerOptions::default())
}

pub fn sample_collocation_with<T: Scalar>(
    grid: &TimeGrid<T>,
    endpoints: &Endpoints<T>,
    count: usize,
    seed: u64,
    opts: SamplerOptions<T>,
) -> Vec<Trajectory<T>> {
    assert!(count >= 1, "need at least one trajectory");
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let jitter = T::lit(0.2);
    let mut axis = |n_slices: usize, a: &Vec3<T>, b: &Vec3<T>| -> Vec<Vec3<T>> {
        // cubic bump tau(1-tau)(c2 + c3 tau) per component, zero at endpoints
        let c2: [f64; 3] = std::array::from_fn(|_| rng.gen_range(-1.0..=1.0));
        let c3: [f64; 3] = std::array::from_fn(|_| rng.gen_range(-1.0..=1.0));
        (0..=n_slices)
            .map(|n| {
                let tau = n as f64 / n_slices as f64;
                let base = a.add(&b.sub(a).scale(T::lit(tau)));
                if n == 0 || n == n_slices {
                    return base;
                }
                let bump = tau * (1.0 - tau);
                let shape = Vec3::from_f64(
                    bump * (c2[0] + c3[0] * tau),
                    bump * (c2[1] + c3[1] * tau),
                    bump * (c2[2] + c3[2] * tau),
                );
                let noise = Vec3::from_f64(
                    rng.gen_range(-1.0..=1.0),
                    rng.gen_range(-1.0..=1.0),
                    rng.gen_range(-1.0..=1.0),
                );
                base.add(&shape.scale(opts.amplitude))
                    .add(&noise.scale(opts.amplitude * jitter))
            })
            .collect()
    };
    (0..count)
        .map(|_| {
            let x1 = axis(grid.slices_1(), &endpoints.x1_start, &endpoints.x1_end);
            let x2 = axis(grid.slices_2(), &endpoints.x2_start, &endpoints.x2_end);
            Trajectory { x1, x2 }
        })
        .collect()
}
