//! Discrete-time lateral kinematic vehicle model and the bound-substitution
//! transform shared by all tuners.
//!
//! The lateral state relative to a reference curve is `x = [d, theta, kappa,
//! kappa_dot]` driven by the curvature-jerk input `u` and disturbed by the
//! reference orientation `theta_r`. The model is an integrator chain sampled
//! at `Ts`, with the vehicle speed `v` entering as a time-variant parameter.

use nalgebra::{Matrix3x4, Matrix4, Matrix4x3, Vector4};

use crate::{Error, Result};

/// Lateral state relative to the reference curve.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct VehicleState {
    /// Signed lateral offset from the reference curve [m].
    pub d: f64,
    /// Vehicle orientation [rad].
    pub theta: f64,
    /// Path curvature [1/m].
    pub kappa: f64,
    /// Curvature rate [1/(m s)].
    pub kappa_dot: f64,
}

impl VehicleState {
    pub fn new(d: f64, theta: f64, kappa: f64, kappa_dot: f64) -> Self {
        Self { d, theta, kappa, kappa_dot }
    }

    pub fn zero() -> Self {
        Self::new(0.0, 0.0, 0.0, 0.0)
    }

    pub fn as_vector(&self) -> Vector4<f64> {
        Vector4::new(self.d, self.theta, self.kappa, self.kappa_dot)
    }

    pub fn from_vector(v: &Vector4<f64>) -> Self {
        Self::new(v[0], v[1], v[2], v[3])
    }

    pub fn is_finite(&self) -> bool {
        self.as_vector().iter().all(|x| x.is_finite())
    }
}

/// State, input and parameter box bounds.
#[derive(Clone, Debug, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(default)]
pub struct Bounds {
    pub x_min: [f64; 4],
    pub x_max: [f64; 4],
    pub u_min: f64,
    pub u_max: f64,
    pub p_min: [f64; 5],
    pub p_max: [f64; 5],
}

impl Default for Bounds {
    fn default() -> Self {
        Self {
            x_min: [-2.0, -1000.0, -0.04, -0.15],
            x_max: [2.0, 1000.0, 0.04, 0.15],
            u_min: -0.07,
            u_max: 0.07,
            p_min: [1e-6; 5],
            p_max: [1e5, 1e5, 1e5, 1e5, 1e-3],
        }
    }
}

impl Bounds {
    /// Componentwise strict `min < max` and finiteness.
    pub fn validate(&self) -> Result<()> {
        let pairs = self
            .x_min
            .iter()
            .zip(self.x_max.iter())
            .chain(std::iter::once((&self.u_min, &self.u_max)))
            .chain(self.p_min.iter().zip(self.p_max.iter()));
        for (lo, hi) in pairs {
            if !lo.is_finite() || !hi.is_finite() || lo >= hi {
                return Err(Error::InvalidConfig(format!(
                    "bounds must be finite with min < max, got [{lo}, {hi}]"
                )));
            }
        }
        Ok(())
    }

    pub fn state_contains(&self, x: &VehicleState, tol: f64) -> bool {
        let v = x.as_vector();
        (0..4).all(|i| v[i] >= self.x_min[i] - tol && v[i] <= self.x_max[i] + tol)
    }
}

/// Discrete-time system matrices for a given speed and sample time.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelMatrices {
    /// 4x4 state transition.
    pub a: Matrix4<f64>,
    /// Input column (curvature jerk).
    pub b: Vector4<f64>,
    /// Disturbance column (reference orientation).
    pub bz: Vector4<f64>,
}

/// Closed-form discretization of the lateral integrator chain.
pub fn system_matrices(v: f64, ts: f64) -> Result<ModelMatrices> {
    if !ts.is_finite() || ts <= 0.0 {
        return Err(Error::InvalidConfig(format!("sample time must be positive, got {ts}")));
    }
    if !v.is_finite() || v < 0.0 {
        return Err(Error::InvalidConfig(format!("speed must be nonnegative, got {v}")));
    }
    let a = Matrix4::new(
        1.0,
        v * ts,
        0.5 * v * v * ts * ts,
        v * v * ts * ts * ts / 6.0,
        0.0,
        1.0,
        v * ts,
        0.5 * v * ts * ts,
        0.0,
        0.0,
        1.0,
        ts,
        0.0,
        0.0,
        0.0,
        1.0,
    );
    let b = Vector4::new(
        v * v * ts.powi(4) / 24.0,
        v * ts.powi(3) / 6.0,
        0.5 * ts * ts,
        ts,
    );
    let bz = Vector4::new(-v * ts, 0.0, 0.0, 0.0);
    Ok(ModelMatrices { a, b, bz })
}

/// One model step `A x + B u + Bz theta_r`. Pure arithmetic, no clamping.
pub fn step(x: &VehicleState, u: f64, v: f64, theta_r: f64, ts: f64) -> Result<VehicleState> {
    let m = system_matrices(v, ts)?;
    let next = m.a * x.as_vector() + m.b * u + m.bz * theta_r;
    Ok(VehicleState::from_vector(&next))
}

/// Measurement selector mapping `y_d = [d_d, theta_d, kappa_d]` into state
/// space; the fourth row is zero because the curvature rate is not measured.
pub fn measurement_selector() -> Matrix4x3<f64> {
    Matrix4x3::new(1.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0)
}

/// Rank of the observability matrix stacked from `H A^k`, `k = 0..3`, where
/// `H` is the transpose of the given selector.
pub fn observability_rank(v: f64, ts: f64, c: &Matrix4x3<f64>) -> Result<usize> {
    if !v.is_finite() || v <= 0.0 {
        return Err(Error::InvalidConfig(format!("observability check requires v > 0, got {v}")));
    }
    let m = system_matrices(v, ts)?;
    let h: Matrix3x4<f64> = c.transpose();
    let mut rows = nalgebra::DMatrix::<f64>::zeros(12, 4);
    let mut ha = h;
    for k in 0..4 {
        rows.view_mut((3 * k, 0), (3, 4)).copy_from(&ha);
        ha *= m.a;
    }
    let svd = rows.svd(false, false);
    let smax = svd.singular_values.max();
    let tol = 12.0 * f64::EPSILON * smax.max(1.0);
    Ok(svd.singular_values.iter().filter(|&&s| s > tol).count())
}

/// Maps an unbounded substitution variable back into `(lo, hi)` through a
/// scaled tanh. The result is strictly interior for every finite input.
pub fn from_unbounded(tilde: f64, lo: f64, hi: f64) -> f64 {
    debug_assert!(lo < hi);
    let half = 0.5 * (hi - lo);
    let mid = 0.5 * (lo + hi);
    let y = half.mul_add(tilde.tanh(), mid);
    // tanh saturates to exactly +-1 in f64 for |tilde| > ~19; nudge back in.
    if y >= hi {
        hi.next_down()
    } else if y <= lo {
        lo.next_up()
    } else {
        y
    }
}

/// Exact inverse of [`from_unbounded`] on the open interval.
pub fn to_unbounded(value: f64, lo: f64, hi: f64) -> Result<f64> {
    debug_assert!(lo < hi);
    if !(value > lo && value < hi) {
        return Err(Error::OutOfRange(format!(
            "value {value} not strictly inside ({lo}, {hi})"
        )));
    }
    let ratio = (2.0 * value - lo - hi) / (hi - lo);
    Ok(ratio.clamp(-1.0 + f64::EPSILON, 1.0 - f64::EPSILON).atanh())
}
