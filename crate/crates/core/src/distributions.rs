//! Probability pieces of the forecast output: bivariate Gaussians over
//! waypoint positions and Von Mises densities over headings, each with
//! analytic derivatives of the negative log-likelihood; the map from raw
//! network outputs to constrained parameters; and the SE(2) push-forward of
//! a waypoint distribution between coordinate frames.
//!
//! Loss convention: the Gaussian NLL drops the constant `log(2*pi)` term
//! (`0.5*log|Sigma| + 0.5*(x-mu)' Sigma^-1 (x-mu)`), while the Von Mises NLL
//! keeps its full normalizer `log(2*pi*I0(kappa))`. The `pdf` methods always
//! include full normalization, so densities integrate to one.

use crate::error::{Error, Result};
use crate::geometry::wrap_angle;
use serde::{Deserialize, Serialize};

/// Number of output channels per forecast waypoint:
/// `(mu_x, mu_y, sigma_x, sigma_y, rho, eta, kappa)`.
pub const PARAMS_PER_STEP: usize = 7;

/// Channel indices within one waypoint's parameter block.
pub mod channel {
    pub const MU_X: usize = 0;
    pub const MU_Y: usize = 1;
    pub const SIGMA_X: usize = 2;
    pub const SIGMA_Y: usize = 3;
    pub const RHO: usize = 4;
    pub const ETA: usize = 5;
    pub const KAPPA: usize = 6;
}

/// Additive floor keeping constrained standard deviations strictly positive.
pub const SIGMA_FLOOR: f64 = 1e-4;

/// Constrained correlations are kept strictly inside (-1, 1): `tanh`
/// saturates to exactly 1.0 in `f64` for arguments above ~19, which would
/// make the covariance singular.
pub const RHO_LIMIT: f64 = 1.0 - 1e-9;

// ---------------------------------------------------------------------------
// Modified Bessel functions of the first kind, orders 0 and 1.
// ---------------------------------------------------------------------------

/// Largest argument evaluated by the power series before switching to the
/// asymptotic expansion (series terms stay comfortably inside `f64` range).
const BESSEL_SERIES_MAX: f64 = 300.0;

fn check_kappa(op: &'static str, kappa: f64) -> Result<()> {
    if !kappa.is_finite() || kappa < 0.0 {
        return Err(Error::domain(op, format!("kappa must be finite and >= 0, got {kappa}")));
    }
    Ok(())
}

/// Modified Bessel function `I0(kappa)` for `kappa >= 0`.
///
/// Power series `sum_m ((kappa/2)^(2m) / (m!)^2)` summed to machine
/// precision; for very large arguments the standard asymptotic expansion
/// takes over before the series terms would overflow.
pub fn bessel_i0(kappa: f64) -> Result<f64> {
    check_kappa("bessel_i0", kappa)?;
    if kappa <= BESSEL_SERIES_MAX {
        let q = 0.25 * kappa * kappa;
        let mut term = 1.0;
        let mut sum = 1.0;
        let mut m = 0usize;
        loop {
            m += 1;
            term *= q / ((m * m) as f64);
            let next = sum + term;
            if next == sum || m > 2000 {
                return Ok(next);
            }
            sum = next;
        }
    } else {
        Ok(i0_asymptotic_scaled(kappa) * kappa.exp())
    }
}

/// Modified Bessel function `I1(kappa)` for `kappa >= 0`, by the analogous
/// series `sum_m (kappa/2)^(2m+1) / (m! (m+1)!)`.
pub fn bessel_i1(kappa: f64) -> Result<f64> {
    check_kappa("bessel_i1", kappa)?;
    if kappa <= BESSEL_SERIES_MAX {
        let q = 0.25 * kappa * kappa;
        let mut term = 0.5 * kappa;
        let mut sum = term;
        let mut m = 0usize;
        loop {
            m += 1;
            term *= q / ((m * (m + 1)) as f64);
            let next = sum + term;
            if next == sum || m > 2000 {
                return Ok(next);
            }
            sum = next;
        }
    } else {
        Ok(i1_asymptotic_scaled(kappa) * kappa.exp())
    }
}

/// `log(I0(kappa))`, safe for large concentrations.
pub fn log_bessel_i0(kappa: f64) -> Result<f64> {
    check_kappa("log_bessel_i0", kappa)?;
    if kappa <= BESSEL_SERIES_MAX {
        Ok(bessel_i0(kappa)?.ln())
    } else {
        Ok(kappa + i0_asymptotic_scaled(kappa).ln())
    }
}

/// The ratio `I1(kappa)/I0(kappa)` (the derivative of `log I0`).
pub fn bessel_i1_over_i0(kappa: f64) -> Result<f64> {
    check_kappa("bessel_i1_over_i0", kappa)?;
    if kappa <= BESSEL_SERIES_MAX {
        Ok(bessel_i1(kappa)? / bessel_i0(kappa)?)
    } else {
        Ok(i1_asymptotic_scaled(kappa) / i0_asymptotic_scaled(kappa))
    }
}

/// `e^-z I0(z)` by the asymptotic expansion, valid for large `z`.
fn i0_asymptotic_scaled(z: f64) -> f64 {
    // I_nu(z) ~ e^z / sqrt(2 pi z) * sum_k a_k(nu) / z^k with
    // a_k(0) = prod_{j=1..k} (2j-1)^2 / (8^k k!).
    let mut term = 1.0;
    let mut sum = 1.0;
    for k in 1..=8u32 {
        let j = (2 * k - 1) as f64;
        term *= j * j / (8.0 * k as f64 * z);
        sum += term;
    }
    sum / (2.0 * std::f64::consts::PI * z).sqrt()
}

/// `e^-z I1(z)` by the asymptotic expansion, valid for large `z`.
fn i1_asymptotic_scaled(z: f64) -> f64 {
    // Signed terms (-1)^k a_k(1)/z^k with
    // a_k(1) = prod_{j=1..k} (4 - (2j-1)^2) / (8^k k!).
    let mut term = 1.0;
    let mut sum = 1.0;
    for k in 1..=8u32 {
        let j = (2 * k - 1) as f64;
        term *= (j * j - 4.0) / (8.0 * k as f64 * z);
        sum += term;
    }
    sum / (2.0 * std::f64::consts::PI * z).sqrt()
}

// ---------------------------------------------------------------------------
// Bivariate Gaussian.
// ---------------------------------------------------------------------------

/// A bivariate Gaussian parameterized by per-axis standard deviations and a
/// correlation coefficient.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Gauss2 {
    pub mean: [f64; 2],
    pub sigma: [f64; 2],
    pub rho: f64,
}

impl Gauss2 {
    pub fn new(mean: [f64; 2], sigma: [f64; 2], rho: f64) -> Result<Self> {
        let finite = mean.iter().chain(sigma.iter()).all(|v| v.is_finite()) && rho.is_finite();
        if !finite {
            return Err(Error::domain("Gauss2::new", "parameters must be finite".to_string()));
        }
        if sigma[0] <= 0.0 || sigma[1] <= 0.0 {
            return Err(Error::domain(
                "Gauss2::new",
                format!("standard deviations must be positive, got {sigma:?}"),
            ));
        }
        if rho.abs() >= 1.0 {
            return Err(Error::domain(
                "Gauss2::new",
                format!("correlation must satisfy |rho| < 1, got {rho}"),
            ));
        }
        Ok(Gauss2 { mean, sigma, rho })
    }

    /// Covariance matrix entries `[[xx, xy], [xy, yy]]`.
    pub fn covariance(&self) -> [[f64; 2]; 2] {
        let [sx, sy] = self.sigma;
        let xy = self.rho * sx * sy;
        [[sx * sx, xy], [xy, sy * sy]]
    }

    /// Fully-normalized density.
    pub fn pdf(&self, x: [f64; 2]) -> f64 {
        let q = 1.0 - self.rho * self.rho;
        let dx = (x[0] - self.mean[0]) / self.sigma[0];
        let dy = (x[1] - self.mean[1]) / self.sigma[1];
        let z = dx * dx - 2.0 * self.rho * dx * dy + dy * dy;
        let norm = 2.0 * std::f64::consts::PI * self.sigma[0] * self.sigma[1] * q.sqrt();
        (-z / (2.0 * q)).exp() / norm
    }
}

/// Value and gradients of the (constant-free) bivariate Gaussian NLL.
#[derive(Debug, Clone, Copy)]
pub struct Gauss2Nll {
    pub loss: f64,
    pub d_mean: [f64; 2],
    pub d_sigma: [f64; 2],
    pub d_rho: f64,
    pub d_x: [f64; 2],
}

/// Negative log-likelihood `0.5 log|Sigma| + 0.5 (x-mu)' Sigma^-1 (x-mu)`
/// (the additive `log(2 pi)` constant is omitted), with analytic gradients
/// with respect to all five parameters and the evaluation point.
pub fn gauss2_nll(g: &Gauss2, x: [f64; 2]) -> Gauss2Nll {
    let [sx, sy] = g.sigma;
    let rho = g.rho;
    let q = 1.0 - rho * rho;
    let dx = x[0] - g.mean[0];
    let dy = x[1] - g.mean[1];
    let z = dx * dx / (sx * sx) - 2.0 * rho * dx * dy / (sx * sy) + dy * dy / (sy * sy);
    let loss = sx.ln() + sy.ln() + 0.5 * q.ln() + z / (2.0 * q);

    // d loss / d dx, then mean and x gradients by the chain rule.
    let g_dx = (dx / (sx * sx) - rho * dy / (sx * sy)) / q;
    let g_dy = (dy / (sy * sy) - rho * dx / (sx * sy)) / q;
    let d_sx = 1.0 / sx + (rho * dx * dy / (sx * sx * sy) - dx * dx / (sx * sx * sx)) / q;
    let d_sy = 1.0 / sy + (rho * dx * dy / (sx * sy * sy) - dy * dy / (sy * sy * sy)) / q;
    let d_rho = -rho / q - dx * dy / (sx * sy * q) + z * rho / (q * q);

    Gauss2Nll {
        loss,
        d_mean: [-g_dx, -g_dy],
        d_sigma: [d_sx, d_sy],
        d_rho,
        d_x: [g_dx, g_dy],
    }
}

// ---------------------------------------------------------------------------
// Von Mises.
// ---------------------------------------------------------------------------

/// A Von Mises distribution over angles with mean direction `eta` and
/// concentration `kappa >= 0` (`kappa = 0` is the uniform circle).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct VonMisesDist {
    pub eta: f64,
    pub kappa: f64,
}

impl VonMisesDist {
    pub fn new(eta: f64, kappa: f64) -> Result<Self> {
        if !eta.is_finite() {
            return Err(Error::domain("VonMisesDist::new", format!("eta must be finite, got {eta}")));
        }
        check_kappa("VonMisesDist::new", kappa)?;
        Ok(VonMisesDist { eta: wrap_angle(eta), kappa })
    }

    /// Fully-normalized density on the circle.
    pub fn pdf(&self, theta: f64) -> f64 {
        let i0 = bessel_i0(self.kappa).expect("kappa validated at construction");
        (self.kappa * (theta - self.eta).cos()).exp() / (2.0 * std::f64::consts::PI * i0)
    }
}

/// Value and gradients of the Von Mises NLL.
#[derive(Debug, Clone, Copy)]
pub struct VonMisesNll {
    pub loss: f64,
    pub d_eta: f64,
    pub d_kappa: f64,
    pub d_theta: f64,
}

/// Negative log-likelihood `-kappa cos(theta - eta) + log(2 pi I0(kappa))`
/// with analytic gradients with respect to `eta`, `kappa`, and `theta`.
pub fn vonmises_nll(vm: &VonMisesDist, theta: f64) -> VonMisesNll {
    let delta = theta - vm.eta;
    let (sin_d, cos_d) = delta.sin_cos();
    let log_i0 = log_bessel_i0(vm.kappa).expect("kappa validated at construction");
    let ratio = bessel_i1_over_i0(vm.kappa).expect("kappa validated at construction");
    let loss = -vm.kappa * cos_d + (2.0 * std::f64::consts::PI).ln() + log_i0;
    VonMisesNll {
        loss,
        d_eta: -vm.kappa * sin_d,
        d_kappa: -cos_d + ratio,
        d_theta: vm.kappa * sin_d,
    }
}

// ---------------------------------------------------------------------------
// Raw-to-constrained parameter map.
// ---------------------------------------------------------------------------

/// Numerically stable `log(1 + e^x)`.
#[inline]
pub fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

/// Logistic sigmoid (the derivative of [`softplus`]).
#[inline]
pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Map one waypoint's raw 7-channel output to valid distribution parameters:
/// means pass through, standard deviations through `softplus + SIGMA_FLOOR`,
/// correlation through `tanh`, the heading mean is angle-wrapped, and the
/// concentration through `softplus`.
pub fn constrain_params(raw: &[f64; PARAMS_PER_STEP]) -> [f64; PARAMS_PER_STEP] {
    use channel::*;
    let mut out = *raw;
    out[SIGMA_X] = softplus(raw[SIGMA_X]) + SIGMA_FLOOR;
    out[SIGMA_Y] = softplus(raw[SIGMA_Y]) + SIGMA_FLOOR;
    out[RHO] = raw[RHO].tanh().clamp(-RHO_LIMIT, RHO_LIMIT);
    out[ETA] = wrap_angle(raw[ETA]);
    out[KAPPA] = softplus(raw[KAPPA]);
    out
}

/// Pull an upstream gradient on constrained parameters back to raw outputs
/// (the constraint map's Jacobian is diagonal).
pub fn constrain_params_vjp(
    raw: &[f64; PARAMS_PER_STEP],
    upstream: &[f64; PARAMS_PER_STEP],
) -> [f64; PARAMS_PER_STEP] {
    use channel::*;
    let mut out = *upstream;
    out[SIGMA_X] = upstream[SIGMA_X] * sigmoid(raw[SIGMA_X]);
    out[SIGMA_Y] = upstream[SIGMA_Y] * sigmoid(raw[SIGMA_Y]);
    let t = raw[RHO].tanh().clamp(-RHO_LIMIT, RHO_LIMIT);
    out[RHO] = upstream[RHO] * (1.0 - t * t);
    // Angle wrapping and the identity channels have unit derivative.
    out[KAPPA] = upstream[KAPPA] * sigmoid(raw[KAPPA]);
    out
}

// ---------------------------------------------------------------------------
// SE(2) push-forward of a constrained waypoint distribution.
// ---------------------------------------------------------------------------

/// Re-express a constrained waypoint distribution in another frame: the mean
/// maps as a point, the covariance as `R Sigma R'`, the heading mean shifts
/// by the rotation, and the concentration is unchanged.
pub fn transform_params(
    con: &[f64; PARAMS_PER_STEP],
    rot: f64,
    trans: [f64; 2],
) -> [f64; PARAMS_PER_STEP] {
    use channel::*;
    let (s, c) = rot.sin_cos();
    let (mx, my) = (con[MU_X], con[MU_Y]);
    let (sx, sy, rho) = (con[SIGMA_X], con[SIGMA_Y], con[RHO]);

    let a = sx * sx;
    let b = sy * sy;
    let v = rho * sx * sy;
    let a2 = c * c * a - 2.0 * c * s * v + s * s * b;
    let b2 = s * s * a + 2.0 * c * s * v + c * c * b;
    let v2 = c * s * (a - b) + (c * c - s * s) * v;
    let sx2 = a2.sqrt();
    let sy2 = b2.sqrt();

    let mut out = [0.0; PARAMS_PER_STEP];
    out[MU_X] = c * mx - s * my + trans[0];
    out[MU_Y] = s * mx + c * my + trans[1];
    out[SIGMA_X] = sx2;
    out[SIGMA_Y] = sy2;
    out[RHO] = v2 / (sx2 * sy2);
    out[ETA] = wrap_angle(con[ETA] + rot);
    out[KAPPA] = con[KAPPA];
    out
}

/// Vector-Jacobian product of [`transform_params`] with respect to the input
/// parameters (the transform itself is treated as constant).
pub fn transform_params_vjp(
    con: &[f64; PARAMS_PER_STEP],
    rot: f64,
    upstream: &[f64; PARAMS_PER_STEP],
) -> [f64; PARAMS_PER_STEP] {
    use channel::*;
    let (s, c) = rot.sin_cos();
    let (sx, sy, rho) = (con[SIGMA_X], con[SIGMA_Y], con[RHO]);

    // Recompute the forward covariance path.
    let a = sx * sx;
    let b = sy * sy;
    let v = rho * sx * sy;
    let a2 = c * c * a - 2.0 * c * s * v + s * s * b;
    let b2 = s * s * a + 2.0 * c * s * v + c * c * b;
    let v2 = c * s * (a - b) + (c * c - s * s) * v;
    let sx2 = a2.sqrt();
    let sy2 = b2.sqrt();
    let rho2 = v2 / (sx2 * sy2);

    // Upstream on (sigma_x', sigma_y', rho') -> upstream on (a', b', v').
    let g_a2 = upstream[SIGMA_X] / (2.0 * sx2) - upstream[RHO] * rho2 / (2.0 * a2);
    let g_b2 = upstream[SIGMA_Y] / (2.0 * sy2) - upstream[RHO] * rho2 / (2.0 * b2);
    let g_v2 = upstream[RHO] / (sx2 * sy2);

    // Transpose of the linear map (a, b, v) -> (a', b', v').
    let g_a = c * c * g_a2 + s * s * g_b2 + c * s * g_v2;
    let g_b = s * s * g_a2 + c * c * g_b2 - c * s * g_v2;
    let g_v = -2.0 * c * s * g_a2 + 2.0 * c * s * g_b2 + (c * c - s * s) * g_v2;

    let mut out = [0.0; PARAMS_PER_STEP];
    // Mean rotates; gradient rotates back.
    out[MU_X] = c * upstream[MU_X] + s * upstream[MU_Y];
    out[MU_Y] = -s * upstream[MU_X] + c * upstream[MU_Y];
    out[SIGMA_X] = 2.0 * sx * g_a + rho * sy * g_v;
    out[SIGMA_Y] = 2.0 * sy * g_b + rho * sx * g_v;
    out[RHO] = sx * sy * g_v;
    out[ETA] = upstream[ETA];
    out[KAPPA] = upstream[KAPPA];
    out
}

// ---------------------------------------------------------------------------
// Whole-trajectory view.
// ---------------------------------------------------------------------------

/// One forecast waypoint: a Gaussian over position and a Von Mises over
/// heading, in whatever frame the parameters are expressed in.
#[derive(Debug, Clone, Copy)]
pub struct WaypointDistribution {
    pub position: Gauss2,
    pub heading: VonMisesDist,
}

impl WaypointDistribution {
    /// Build from one constrained 7-channel block.
    pub fn from_constrained(block: &[f64; PARAMS_PER_STEP]) -> Result<Self> {
        use channel::*;
        Ok(WaypointDistribution {
            position: Gauss2::new(
                [block[MU_X], block[MU_Y]],
                [block[SIGMA_X], block[SIGMA_Y]],
                block[RHO],
            )?,
            heading: VonMisesDist::new(block[ETA], block[KAPPA])?,
        })
    }
}

/// A full per-actor forecast: one waypoint distribution per future timestep.
#[derive(Debug, Clone)]
pub struct TrajectoryDistribution {
    pub steps: Vec<WaypointDistribution>,
}

impl TrajectoryDistribution {
    /// Interpret a flat constrained parameter vector (`steps * 7` values) as
    /// a trajectory distribution.
    pub fn from_constrained(flat: &[f64]) -> Result<Self> {
        if flat.len() % PARAMS_PER_STEP != 0 {
            return Err(Error::shape(
                "TrajectoryDistribution::from_constrained",
                format!("length {} is not a multiple of {PARAMS_PER_STEP}", flat.len()),
            ));
        }
        let steps = flat
            .chunks_exact(PARAMS_PER_STEP)
            .map(|chunk| {
                let block: &[f64; PARAMS_PER_STEP] = chunk.try_into().expect("chunk size");
                WaypointDistribution::from_constrained(block)
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(TrajectoryDistribution { steps })
    }
}
