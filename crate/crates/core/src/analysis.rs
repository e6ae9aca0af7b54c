//! Stretching rates, contraction envelopes and the residuals of the
//! energy-dissipation balance, the evolution variational inequality and the
//! weak formulation.

use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::flow::{solve, solve_with_tangent, FlowConfig, Trajectory};
use crate::material::{certification_grid, MaterialLaw};
use crate::metric::{bhattacharya, geodesic_distance, GeodesicOptions};
use crate::numerics::{golden_section_min, GAUSS5};
use crate::state::{energy_with_loading, weighted_mean, Covector, StepDensity, TangentVector};

/// Cellwise density of the Hessian form,
/// `k (k W'' + k'/2 (W' - G - [k(W' - G)]/[k]))`.
pub fn hessian_density(law: &MaterialLaw, p: &[f64], g: &[f64]) -> Vec<f64> {
    let k: Vec<f64> = p.iter().map(|&q| law.k(q)).collect();
    let xi: Vec<f64> = p.iter().zip(g).map(|(&q, &gi)| law.dw(q) - gi).collect();
    let c = weighted_mean(&k, &xi);
    p.iter()
        .zip(&k)
        .zip(&xi)
        .map(|((&q, &kq), &x)| kq * (kq * law.d2w(q) + 0.5 * law.dk(q) * (x - c)))
        .collect()
}

/// `<xi, H xi>` for the cellwise density `h`.
pub fn hessian_form(h: &[f64], k: &[f64], xi: &[f64]) -> f64 {
    let c = weighted_mean(k, xi);
    h.iter().zip(xi).map(|(hi, x)| hi * (x - c).powi(2)).sum::<f64>() / h.len() as f64
}

/// `<xi, K xi>`.
pub fn onsager_form(k: &[f64], xi: &[f64]) -> f64 {
    let c = weighted_mean(k, xi);
    k.iter().zip(xi).map(|(ki, x)| ki * (x - c).powi(2)).sum::<f64>() / k.len() as f64
}

/// Pointwise lower bound of `H/k` at the density `p`: the infimum of
/// `k W'' + k'/2 (W' - g)` over the certification grid and the loading
/// values, plus the worst case of `-k'/2 [k(W' - G)]/[k]`.
///
/// The last term is bounded using the sampled range of `k'`, so it is also a
/// valid bound when the weighted stress mean is negative.
pub fn lambda_hat(law: &MaterialLaw, p: &StepDensity, g: &[f64]) -> Result<f64> {
    let c = law.constants()?;
    let (g_lo, g_hi) = g.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), &v| (a.min(v), b.max(v)));
    let f = |q: f64| {
        let base = law.k(q) * law.d2w(q) + 0.5 * law.dk(q) * law.dw(q);
        let dk = 0.5 * law.dk(q);
        base - (dk * g_lo).max(dk * g_hi)
    };
    let grid = certification_grid(law, &c.grid);
    let vals: Vec<f64> = grid.iter().map(|&q| f(q)).collect();
    let (i, mut inf) = vals
        .iter()
        .enumerate()
        .fold((0, f64::INFINITY), |(bi, bv), (i, &v)| if v < bv { (i, v) } else { (bi, bv) });
    let a = grid[i.saturating_sub(1)];
    let b = grid[(i + 1).min(grid.len() - 1)];
    if b > a {
        inf = inf.min(golden_section_min(f, a, b, 80).1);
    }
    // cells outside the grid still contribute exactly
    for &q in p.cells() {
        inf = inf.min(f(q));
    }
    let k: Vec<f64> = p.cells().iter().map(|&q| law.k(q)).collect();
    let xi: Vec<f64> = p.cells().iter().zip(g).map(|(&q, &gi)| law.dw(q) - gi).collect();
    let mean_stress = weighted_mean(&k, &xi);
    let dk_hi = if c.dk_min >= 0.0 { c.c_k } else { c.dk_max };
    let shift = -0.5 * (mean_stress * dk_hi).max(mean_stress * c.dk_min);
    Ok(inf + shift - 1e-9 * inf.abs().max(1.0))
}

/// Infinitesimal sublevel stretching bound
/// `λ_W - C_k/2 ((1 + κ̄/κ̲)‖G‖ + (B1 (E + ‖G‖) + B2)/κ̲)`.
///
/// The `B1 ‖G‖` term accounts for `mean W = E + mean(G p) <= E + ‖G‖` on the
/// sublevel; it vanishes without loading.
pub fn l_inf(law: &MaterialLaw, level: f64) -> Result<f64> {
    let c = law.constants()?;
    let g = c.g_sup_norm;
    Ok(c.lambda_w
        - 0.5 * c.c_k * ((1.0 + c.kappa_hi / c.kappa_lo) * g + (c.b1 * (level + g) + c.b2) / c.kappa_lo))
}

/// Energy level `2 C1 E + C2 + (2 C1 + 1)‖G‖` reached by geodesics between
/// points of the sublevel `E`.
pub fn geodesic_level(law: &MaterialLaw, level: f64) -> Result<f64> {
    let c = law.constants()?;
    match (c.c1, c.c2) {
        (Some(c1), Some(c2)) => Ok(2.0 * c1 * level + c2 + (2.0 * c1 + 1.0) * c.g_sup_norm),
        _ => Err(Error::UnsupportedLaw(format!("law '{}' has no certified doubling constants", law.id()))),
    }
}

/// Global stretching bound `L_inf` evaluated at [`geodesic_level`].
pub fn l_glob(law: &MaterialLaw, level: f64) -> Result<f64> {
    l_inf(law, geodesic_level(law, level)?)
}

/// `∫_0^t exp(-λ s) ds`.
pub fn m_lambda(lambda: f64, t: f64) -> f64 {
    if lambda.abs() <= 1e-12 {
        t
    } else {
        -(-lambda * t).exp_m1() / lambda
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct FormSample {
    pub xi: Vec<f64>,
    pub hessian: f64,
    pub onsager: f64,
    pub ratio: f64,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct StretchingReport {
    pub hessian_density: Vec<f64>,
    pub lambda_hat: f64,
    pub level: f64,
    pub l_inf: f64,
    pub samples: Vec<FormSample>,
    pub min_ratio: f64,
}

/// Samples `<xi, H xi> / <xi, K xi>` at random covectors and compares against
/// [`lambda_hat`] and [`l_inf`] at the energy of `p`.
pub fn stretching_report<R: Rng>(law: &MaterialLaw, p: &StepDensity, samples: usize, rng: &mut R) -> Result<StretchingReport> {
    let g = law.loading_cells(p.n());
    let h = hessian_density(law, p.cells(), &g);
    let k: Vec<f64> = p.cells().iter().map(|&q| law.k(q)).collect();
    let lh = lambda_hat(law, p, &g)?;
    let level = energy_with_loading(law, p.cells(), &g);
    let mut out = Vec::with_capacity(samples);
    let mut min_ratio = f64::INFINITY;
    for _ in 0..samples {
        let xi: Vec<f64> = (0..p.n()).map(|_| rng.gen_range(-1.0..=1.0)).collect();
        let hf = hessian_form(&h, &k, &xi);
        let kf = onsager_form(&k, &xi);
        let ratio = if kf > 0.0 { hf / kf } else { f64::INFINITY };
        min_ratio = min_ratio.min(ratio);
        out.push(FormSample { xi, hessian: hf, onsager: kf, ratio });
    }
    Ok(StretchingReport {
        hessian_density: h,
        lambda_hat: lh,
        level,
        l_inf: l_inf(law, level)?,
        samples: out,
        min_ratio,
    })
}

/// The two terms of `d/dt R(p, y) = -<G y, H G y> + <y, zeta>`.
pub fn stretching_rate(law: &MaterialLaw, p: &[f64], g: &[f64], y: &[f64], zeta: &[f64]) -> (f64, f64) {
    let h = hessian_density(law, p, g);
    let k: Vec<f64> = p.iter().map(|&q| law.k(q)).collect();
    let xi: Vec<f64> = y.iter().zip(&k).map(|(a, b)| a / b).collect();
    let n = p.len() as f64;
    (-hessian_form(&h, &k, &xi), y.iter().zip(zeta).map(|(a, b)| a * b).sum::<f64>() / n)
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct StretchingCheck {
    pub t: f64,
    pub step: f64,
    pub formula: f64,
    pub fd_coarse: f64,
    pub fd_fine: f64,
    /// Richardson combination of the two central differences.
    pub fd_extrapolated: f64,
    pub relative_error: f64,
}

fn half_norm_sq(law: &MaterialLaw, p: &[f64], y: &[f64]) -> f64 {
    0.5 * p.iter().zip(y).map(|(&q, &v)| v * v / law.k(q)).sum::<f64>() / p.len() as f64
}

/// Compares the stretching relation with central differences of `R(p(t), y(t))`
/// at steps `h` and `h/2`.
pub fn stretching_fd_check(
    law: &MaterialLaw,
    p0: &StepDensity,
    y0: &TangentVector,
    zeta: &Covector,
    t: f64,
    h: f64,
    cfg: &FlowConfig,
) -> Result<StretchingCheck> {
    if !(t > h && h > 0.0) {
        return Err(Error::InvalidParameter("need t > h > 0".into()));
    }
    let times = vec![t - h, t - h / 2.0, t, t + h / 2.0, t + h];
    let cfg = FlowConfig { t_end: t + h, output_times: times.clone(), record_every: None, ..cfg.clone() };
    let tr = solve_with_tangent(law, p0, y0, zeta, &cfg)?;
    let ys = tr.tangents.as_ref().expect("tangent flow");
    let r_at = |tt: f64| {
        let i = tr.times.iter().position(|&s| (s - tt).abs() <= 1e-14 * tt.max(1.0)).expect("recorded time");
        half_norm_sq(law, tr.states[i].cells(), ys[i].cells())
    };
    let fd_coarse = (r_at(t + h) - r_at(t - h)) / (2.0 * h);
    let fd_fine = (r_at(t + h / 2.0) - r_at(t - h / 2.0)) / h;
    let fd_extrapolated = (4.0 * fd_fine - fd_coarse) / 3.0;
    let i = tr.times.iter().position(|&s| (s - t).abs() <= 1e-14 * t.max(1.0)).expect("recorded time");
    let (a, b) = stretching_rate(law, tr.states[i].cells(), &tr.loading_cells, ys[i].cells(), zeta.cells());
    let formula = a + b;
    Ok(StretchingCheck {
        t,
        step: h,
        formula,
        fd_coarse,
        fd_fine,
        fd_extrapolated,
        relative_error: (fd_extrapolated - formula).abs() / formula.abs().max(1e-300),
    })
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct GrowthSample {
    pub t: f64,
    pub norm: f64,
    pub envelope: f64,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct GrowthReport {
    pub level: f64,
    pub rate: f64,
    pub samples: Vec<GrowthSample>,
    /// Largest `norm - envelope` (0 when the envelope holds everywhere).
    pub worst_violation: f64,
}

/// Checks `‖y(t)‖ <= e^{-L t}‖y(0)‖ + M_L(t) sqrt(κ̄) ‖zeta‖_∞` with
/// `L = l_inf(E(p(0)))` along a tangent trajectory.
pub fn growth_check(law: &MaterialLaw, tr: &Trajectory) -> Result<GrowthReport> {
    let ys = tr
        .tangents
        .as_ref()
        .ok_or_else(|| Error::InvalidParameter("trajectory carries no tangent".into()))?;
    let c = law.constants()?;
    let level = tr.energies[0];
    let rate = l_inf(law, level)?;
    let zeta_sup = tr.zeta.as_ref().map_or(0.0, |z| z.iter().fold(0.0f64, |m, v| m.max(v.abs())));
    let norm = |i: usize| (2.0 * half_norm_sq(law, tr.states[i].cells(), ys[i].cells())).sqrt();
    let y0 = norm(0);
    let mut worst = 0.0f64;
    let samples = tr
        .times
        .iter()
        .enumerate()
        .map(|(i, &t)| {
            let envelope = (-rate * t).exp() * y0 + m_lambda(rate, t) * c.kappa_hi.sqrt() * zeta_sup;
            let n = norm(i);
            worst = worst.max(n - envelope);
            GrowthSample { t, norm: n, envelope }
        })
        .collect();
    Ok(GrowthReport { level, rate, samples, worst_violation: worst })
}

#[derive(Clone, Copy, Debug, Serialize, Deserialize, PartialEq, Eq)]
#[serde(rename_all = "kebab-case")]
pub enum DistanceMode {
    /// Closed form for `k = κp`: `(2/√κ) Bh`.
    Bhattacharya,
    /// Numerical geodesic distance of the law.
    Intrinsic,
}

fn linear_kappa(law: &MaterialLaw) -> Result<f64> {
    let c = law.constants()?;
    if (c.kappa_hi - c.kappa_lo).abs() > 1e-9 * c.kappa_hi {
        return Err(Error::UnsupportedLaw(format!(
            "the Bhattacharya mode needs k = κp, law '{}' has κ in [{}, {}]",
            law.id(),
            c.kappa_lo,
            c.kappa_hi
        )));
    }
    Ok(0.5 * (c.kappa_lo + c.kappa_hi))
}

fn distance(law: &MaterialLaw, mode: DistanceMode, a: &StepDensity, b: &StepDensity, opts: &GeodesicOptions) -> Result<f64> {
    match mode {
        DistanceMode::Bhattacharya => Ok(2.0 / linear_kappa(law)?.sqrt() * bhattacharya(a, b)?),
        DistanceMode::Intrinsic => {
            if a == b {
                return Ok(0.0);
            }
            Ok(geodesic_distance(law, a, b, opts)?.distance)
        }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ContractionSample {
    pub t: f64,
    pub measured: f64,
    pub envelope: f64,
    pub ratio: f64,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ContractionReport {
    pub mode: DistanceMode,
    pub level: f64,
    pub rate: f64,
    pub prefactor: f64,
    pub initial_distance: f64,
    /// Locality threshold of the intrinsic estimate (`None` in the closed-form mode).
    pub locality_threshold: Option<f64>,
    pub within_locality: bool,
    pub samples: Vec<ContractionSample>,
    pub max_ratio: f64,
}

/// Locality threshold `sqrt(8 / max(1, -L_inf(E + 1)))` of the intrinsic contraction estimate.
pub fn locality_threshold(law: &MaterialLaw, level: f64) -> Result<f64> {
    Ok((8.0 / (-l_inf(law, level + 1.0)?).max(1.0)).sqrt())
}

/// Solves both flows and compares their distance at each time of `t_grid`
/// with the contraction envelope: `√(κ̄/κ̲) e^{-L_glob(E) t} Bh(p0, p1)` in the
/// Bhattacharya mode, `e^{-L_inf(E+2) t} D(p0, p1)` in the intrinsic mode.
#[allow(clippy::too_many_arguments)]
pub fn contraction_check(
    law: &MaterialLaw,
    p0: &StepDensity,
    p1: &StepDensity,
    level: f64,
    t_grid: &[f64],
    mode: DistanceMode,
    flow: &FlowConfig,
    geo: &GeodesicOptions,
) -> Result<ContractionReport> {
    if p0.n() != p1.n() {
        return Err(Error::DimensionMismatch { expected: p0.n(), got: p1.n() });
    }
    let g = law.loading_cells(p0.n());
    for p in [p0, p1] {
        let e = energy_with_loading(law, p.cells(), &g);
        if e > level {
            return Err(Error::InvalidLevel(format!("initial energy {e} exceeds the level {level}")));
        }
    }
    let c = law.constants()?;
    let (rate, prefactor, threshold) = match mode {
        DistanceMode::Bhattacharya => (l_glob(law, level)?, (c.kappa_hi / c.kappa_lo).sqrt(), None),
        DistanceMode::Intrinsic => (l_inf(law, level + 2.0)?, 1.0, Some(locality_threshold(law, level)?)),
    };
    let t_end = t_grid.iter().cloned().fold(0.0, f64::max);
    let flows: Vec<Trajectory> = if t_end > 0.0 {
        let cfg = FlowConfig { t_end, output_times: t_grid.to_vec(), record_every: None, ..flow.clone() };
        [p0, p1].par_iter().map(|p| solve(law, p, &cfg)).collect::<Result<_>>()?
    } else {
        Vec::new()
    };
    let at = |j: usize, t: f64| -> StepDensity {
        if t <= 0.0 {
            return [p0, p1][j].clone();
        }
        let tr = &flows[j];
        let i = tr.times.iter().position(|&s| s == t).expect("recorded time");
        tr.states[i].clone()
    };
    let d0 = distance(law, mode, p0, p1, geo)?;
    let samples: Vec<ContractionSample> = t_grid
        .par_iter()
        .map(|&t| {
            let measured = distance(law, mode, &at(0, t), &at(1, t), geo)?;
            let envelope = prefactor * (-rate * t).exp() * d0;
            let ratio = if envelope > 0.0 {
                measured / envelope
            } else if measured <= 1e-14 {
                0.0
            } else {
                f64::INFINITY
            };
            Ok(ContractionSample { t, measured, envelope, ratio })
        })
        .collect::<Result<_>>()?;
    let max_ratio = samples.iter().map(|s| s.ratio).fold(0.0, f64::max);
    Ok(ContractionReport {
        mode,
        level,
        rate,
        prefactor,
        initial_distance: d0,
        locality_threshold: threshold,
        within_locality: threshold.is_none_or(|th| d0 <= th),
        samples,
        max_ratio,
    })
}

/// `|E(0) - E(T) - ∫(R + R*) dt| / (1 + |E(0)|)` over the recorded horizon.
pub fn edb_residual(tr: &Trajectory) -> f64 {
    let e0 = tr.energies[0];
    let e1 = *tr.energies.last().expect("trajectory has states");
    let d = *tr.dissipation.last().expect("trajectory has states");
    (e0 - e1 - d).abs() / (1.0 + e0.abs())
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct EviPair {
    pub s: f64,
    pub t: f64,
    pub lhs: f64,
    pub rhs: f64,
    pub residual: f64,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct EviReport {
    pub mode: DistanceMode,
    pub lambda_used: f64,
    pub reference_energy: f64,
    pub pairs: Vec<EviPair>,
    pub worst_residual: f64,
}

/// Derivative-free evolution variational inequality
/// `e^{λ(t-s)}/2 D(p(t), q)² - D(p(s), q)²/2 <= (∫_0^{t-s} e^{λr} dr) (E(q) - E(p(t)))`
/// along `tr`, reported as `lhs - rhs` per pair. The time factor is
/// `m_lambda(-λ, t - s)`: integrating `d/dt (e^{λt} D²/2) <= e^{λt}(E(q) - E(p(t)))`
/// with a nonincreasing energy.
pub fn evi_residual(
    law: &MaterialLaw,
    tr: &Trajectory,
    q: &StepDensity,
    lambda: f64,
    pairs: &[(f64, f64)],
    mode: DistanceMode,
    geo: &GeodesicOptions,
) -> Result<EviReport> {
    if q.n() != tr.n {
        return Err(Error::DimensionMismatch { expected: tr.n, got: q.n() });
    }
    if let Some(&(s, t)) = pairs.iter().find(|(s, t)| !(s < t) || *s < 0.0) {
        return Err(Error::InvalidParameter(format!("EVI pairs need 0 <= s < t, got ({s}, {t})")));
    }
    let eq = energy_with_loading(law, q.cells(), &tr.loading_cells);
    let out: Vec<EviPair> = pairs
        .par_iter()
        .map(|&(s, t)| {
            let ps = tr.density_at(s)?;
            let pt = tr.density_at(t)?;
            let ds = distance(law, mode, &ps, q, geo)?;
            let dt = distance(law, mode, &pt, q, geo)?;
            let lhs = 0.5 * (lambda * (t - s)).exp() * dt * dt - 0.5 * ds * ds;
            let rhs = m_lambda(-lambda, t - s) * (eq - energy_with_loading(law, pt.cells(), &tr.loading_cells));
            Ok(EviPair { s, t, lhs, rhs, residual: lhs - rhs })
        })
        .collect::<Result<_>>()?;
    let worst = out.iter().map(|p| p.residual).fold(f64::NEG_INFINITY, f64::max);
    Ok(EviReport { mode, lambda_used: lambda, reference_energy: eq, pairs: out, worst_residual: worst })
}

/// Test function `φ(t, x) = (1 - t/T)²₊ P(t/T) ψ(x)` with a polynomial `P`
/// and a step function `ψ` on the trajectory's cells.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct TestFunction {
    pub horizon: f64,
    pub time_coeffs: Vec<f64>,
    pub space: Vec<f64>,
}

impl TestFunction {
    fn time_factor(&self, t: f64) -> (f64, f64) {
        if t >= self.horizon {
            return (0.0, 0.0);
        }
        let tau = t / self.horizon;
        let (mut poly, mut dpoly) = (0.0, 0.0);
        for c in self.time_coeffs.iter().rev() {
            dpoly = dpoly * tau + poly;
            poly = poly * tau + c;
        }
        let w = (1.0 - tau).powi(2);
        let dw = -2.0 * (1.0 - tau);
        (w * poly, (dw * poly + w * dpoly) / self.horizon)
    }
}

/// Largest mismatch of the weak formulation
/// `∫p(0)φ(0) + ∫∫ (p ∂_t φ - k_p (W' - G - [k_p(W' - G)]/[k_p]) φ) = 0`
/// over the test functions, with time integrals by 5-point Gauss rules on
/// every accepted step of the dense output.
pub fn weak_form_residual(law: &MaterialLaw, tr: &Trajectory, tests: &[TestFunction]) -> Result<f64> {
    let n = tr.n;
    for tf in tests {
        if tf.space.len() != n {
            return Err(Error::DimensionMismatch { expected: n, got: tf.space.len() });
        }
        if !(tf.horizon > 0.0) {
            return Err(Error::InvalidParameter("test function horizon must be positive".into()));
        }
    }
    let integrand = |p: &[f64], t: f64, tf: &TestFunction| -> f64 {
        let (phi, dphi) = tf.time_factor(t);
        if phi == 0.0 && dphi == 0.0 {
            return 0.0;
        }
        let k: Vec<f64> = p.iter().map(|&q| law.k(q)).collect();
        let xi: Vec<f64> = p.iter().zip(&tr.loading_cells).map(|(&q, g)| law.dw(q) - g).collect();
        let c = weighted_mean(&k, &xi);
        (0..n)
            .map(|i| (p[i] * dphi - k[i] * (xi[i] - c) * phi) * tf.space[i])
            .sum::<f64>()
            / n as f64
    };
    let mut intervals: Vec<(f64, f64)> = tr.segments().iter().map(|s| (s.t0, s.t1())).collect();
    let t_final = tr.diagnostics.t_final;
    let horizon = tests.iter().map(|t| t.horizon).fold(0.0, f64::max);
    if horizon > t_final {
        let pieces = 64;
        let dt = (horizon - t_final) / pieces as f64;
        intervals.extend((0..pieces).map(|j| (t_final + j as f64 * dt, t_final + (j + 1) as f64 * dt)));
    }
    let worst = tests
        .par_iter()
        .map(|tf| {
            let p0 = tr.states[0].cells();
            let lhs = tf.time_factor(0.0).0 * p0.iter().zip(&tf.space).map(|(a, b)| a * b).sum::<f64>() / n as f64;
            let mut total = 0.0;
            for &(a, b) in &intervals {
                if a >= tf.horizon {
                    continue;
                }
                let b = b.min(tf.horizon);
                for &(x, w) in GAUSS5.iter() {
                    let t = a + x * (b - a);
                    total += w * (b - a) * integrand(&tr.state_at(t), t, tf);
                }
            }
            (lhs + total).abs()
        })
        .reduce(|| 0.0, f64::max);
    Ok(worst)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::material::{catalog_default, catalog_double_well, Loading};
    use crate::sampling::{random_density, random_tangent, rng_from_seed, sample_sublevel};
    use approx::assert_relative_eq;

    #[test]
    fn hessian_at_constant_state() {
        let law = catalog_double_well().with_loading(Loading::constant(0.7));
        let h = hessian_density(&law, &[1.0; 4], &[0.7; 4]);
        let expected = law.k(1.0).powi(2) * law.d2w(1.0);
        for v in h {
            assert_relative_eq!(v, expected, epsilon = 1e-12);
        }
    }

    #[test]
    fn forms_vanish_on_constants() {
        let law = catalog_default();
        let p = [0.5, 1.5, 1.0];
        let h = hessian_density(&law, &p, &[0.0; 3]);
        let k: Vec<f64> = p.iter().map(|&q| law.k(q)).collect();
        assert!(hessian_form(&h, &k, &[2.0; 3]).abs() < 1e-14);
        assert!(onsager_form(&k, &[2.0; 3]).abs() < 1e-14);
    }

    #[test]
    fn lambda_hat_default_uniform() {
        let law = catalog_default();
        let lh = lambda_hat(&law, &StepDensity::uniform(4), &[0.0; 4]).unwrap();
        // independent grid scan of 4q W'' + 2W' plus the mean-stress term 2
        let grid = crate::numerics::log_space(1e-4, 1e4, 200_001);
        let inf = grid.iter().map(|&q| 4.0 * q * law.d2w(q) + 2.0 * law.dw(q)).fold(f64::INFINITY, f64::min);
        assert!((lh - (inf + 2.0)).abs() < 1e-6, "{lh} vs {}", inf + 2.0);
    }

    #[test]
    fn sampled_ratios_respect_lambda_hat() {
        let mut rng = rng_from_seed(11);
        for law in [catalog_default(), catalog_double_well().with_loading(Loading::sine(0.5, 2.0))] {
            for _ in 0..10 {
                let p = random_density(&mut rng, 6, 1.2);
                let rep = stretching_report(&law, &p, 100, &mut rng).unwrap();
                assert!(rep.min_ratio >= rep.lambda_hat - 1e-9);
            }
        }
    }

    #[test]
    fn l_inf_formula() {
        let law = catalog_default();
        let c = law.constants().unwrap();
        let v = l_inf(&law, 1.0).unwrap();
        let by_hand = c.lambda_w - 0.5 * c.c_k * ((c.b1 + c.b2) / c.kappa_lo);
        assert_relative_eq!(v, by_hand, epsilon = 1e-12);
        assert!(l_inf(&law, 2.0).unwrap() <= v);
        assert!(l_glob(&law, 1.0).unwrap().is_finite());
        assert!(geodesic_level(&law, 1.0).unwrap() >= 1.0);
    }

    #[test]
    fn l_inf_below_lambda_hat_on_sublevel() {
        let law = catalog_double_well().with_loading(Loading::sine(0.4, 1.0));
        let level = 0.8;
        let bound = l_inf(&law, level).unwrap();
        let ps = sample_sublevel(&mut rng_from_seed(2), &law, 8, level, 200, 1.5).unwrap();
        for p in ps {
            let g = law.loading_cells(8);
            assert!(lambda_hat(&law, &p, &g).unwrap() >= bound);
        }
    }

    #[test]
    fn m_lambda_values() {
        assert_eq!(m_lambda(0.0, 2.5), 2.5);
        assert_eq!(m_lambda(3.0, 0.0), 0.0);
        assert_relative_eq!(m_lambda(1.0, 1.0), 1.0 - (-1.0f64).exp(), epsilon = 1e-15);
        let t = 0.7;
        assert!((m_lambda(1.1e-12, t) - m_lambda(0.0, t)).abs() <= 1.1e-12 * t * t / 2.0 + 1e-16);
        let h = 1e-6;
        let fd = (m_lambda(-0.8, t + h) - m_lambda(-0.8, t - h)) / (2.0 * h);
        assert_relative_eq!(fd, (0.8 * t).exp(), epsilon = 1e-8);
    }

    #[test]
    fn stretching_matches_finite_differences() {
        let law = catalog_double_well().with_loading(Loading::sine(0.3, 1.0));
        let mut rng = rng_from_seed(4);
        let cfg = FlowConfig { rtol: 1e-12, atol: 1e-14, ..Default::default() };
        for _ in 0..3 {
            let p0 = random_density(&mut rng, 5, 0.8);
            let y0 = random_tangent(&mut rng, 5, 1.0);
            let zeta = Covector::new(random_tangent(&mut rng, 5, 1.0).into_cells()).unwrap();
            let chk = stretching_fd_check(&law, &p0, &y0, &zeta, 0.2, 1e-3, &cfg).unwrap();
            assert!(chk.relative_error < 1e-4, "{chk:?}");
        }
    }

    #[test]
    fn growth_envelope_holds() {
        let law = catalog_default();
        let mut rng = rng_from_seed(8);
        let p0 = random_density(&mut rng, 6, 0.7);
        let y0 = random_tangent(&mut rng, 6, 1.0);
        let zeta = Covector::new(random_tangent(&mut rng, 6, 0.5).into_cells()).unwrap();
        let cfg = FlowConfig { t_end: 2.0, record_every: Some(0.05), ..Default::default() };
        let tr = solve_with_tangent(&law, &p0, &y0, &zeta, &cfg).unwrap();
        let rep = growth_check(&law, &tr).unwrap();
        assert!(rep.worst_violation <= 1e-6, "{}", rep.worst_violation);
    }

    #[test]
    fn contraction_identical_pair() {
        let law = catalog_double_well();
        let p = random_density(&mut rng_from_seed(1), 4, 0.5);
        let e = crate::state::energy(&law, &p);
        let rep = contraction_check(
            &law,
            &p,
            &p,
            e,
            &[0.0, 0.5],
            DistanceMode::Bhattacharya,
            &FlowConfig::default(),
            &GeodesicOptions::default(),
        )
        .unwrap();
        assert_eq!(rep.max_ratio, 0.0);
    }

    #[test]
    fn edb_and_evi_on_default_flow() {
        let law = catalog_default();
        let mut rng = rng_from_seed(6);
        let p0 = random_density(&mut rng, 8, 0.6);
        let tr = solve(&law, &p0, &FlowConfig { t_end: 3.0, ..Default::default() }).unwrap();
        assert!(edb_residual(&tr) < 1e-6);
        let q = StepDensity::uniform(8);
        let e = tr.energies[0].max(crate::state::energy(&law, &q));
        let lambda = l_glob(&law, e).unwrap();
        let pairs = [(0.0, 0.1), (0.1, 0.5), (0.5, 2.0)];
        let rep = evi_residual(&law, &tr, &q, lambda, &pairs, DistanceMode::Bhattacharya, &GeodesicOptions::default())
            .unwrap();
        assert!(rep.worst_residual <= 1e-4 * (1.0 + rep.reference_energy.abs()), "{rep:?} {:?}", law.constants());
    }

    #[test]
    fn evi_at_equilibrium_is_trivial() {
        let law = catalog_default();
        let q = StepDensity::uniform(4);
        let tr = solve(&law, &q, &FlowConfig::default()).unwrap();
        let rep = evi_residual(&law, &tr, &q, 0.3, &[(0.0, 0.5)], DistanceMode::Bhattacharya, &GeodesicOptions::default())
            .unwrap();
        assert_eq!(rep.worst_residual, 0.0);
    }

    #[test]
    fn weak_form_small() {
        let law = catalog_default();
        let mut rng = rng_from_seed(9);
        let p0 = random_density(&mut rng, 6, 0.8);
        let tr = solve(&law, &p0, &FlowConfig { t_end: 2.0, ..Default::default() }).unwrap();
        let zero = TestFunction { horizon: 1.0, time_coeffs: vec![0.0], space: vec![0.0; 6] };
        assert_eq!(weak_form_residual(&law, &tr, &[zero]).unwrap(), 0.0);
        let mass = TestFunction { horizon: 1.5, time_coeffs: vec![1.0], space: vec![1.0; 6] };
        assert!(weak_form_residual(&law, &tr, &[mass]).unwrap() < 1e-9);
        let tests: Vec<TestFunction> = (0..8)
            .map(|_| TestFunction {
                horizon: rng.gen_range(0.5..2.0),
                time_coeffs: (0..3).map(|_| rng.gen_range(-1.0..1.0)).collect(),
                space: (0..6).map(|_| rng.gen_range(-1.0..1.0)).collect(),
            })
            .collect();
        let r = weak_form_residual(&law, &tr, &tests).unwrap();
        assert!(r < 1e-5, "{r}");
    }
}
