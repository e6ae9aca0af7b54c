//! Hellinger and Bhattacharya distances with their closed-form geodesics, and
//! the geodesic distance induced by a general inverse viscosity `k`, computed
//! by path relaxation (authoritative) or geodesic shooting.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::material::MaterialLaw;
use crate::numerics::{mean, solve_dense};
use crate::ode::{integrate, Control, DenseSegment, OdeOptions, StepHook};
use crate::state::{weighted_mean, StepDensity};

fn same_n(p0: &StepDensity, p1: &StepDensity) -> Result<()> {
    if p0.n() != p1.n() {
        return Err(Error::DimensionMismatch {
            expected: p0.n(),
            got: p1.n(),
        });
    }
    Ok(())
}

/// `He(p0, p1) = ||sqrt(p1) - sqrt(p0)||_{L²}`.
pub fn hellinger(p0: &StepDensity, p1: &StepDensity) -> Result<f64> {
    same_n(p0, p1)?;
    let s: f64 = p0
        .cells()
        .iter()
        .zip(p1.cells())
        .map(|(a, b)| (b.sqrt() - a.sqrt()).powi(2))
        .sum();
    Ok((s / p0.n() as f64).sqrt())
}

/// `Bh = 2 arcsin(He / 2)`.
pub fn bh_from_hellinger(he: f64) -> f64 {
    2.0 * (0.5 * he).clamp(-1.0, 1.0).asin()
}

/// Bhattacharya distance, the spherical version of the Hellinger distance.
pub fn bhattacharya(p0: &StepDensity, p1: &StepDensity) -> Result<f64> {
    Ok(bh_from_hellinger(hellinger(p0, p1)?))
}

/// `||p1 - p0||_{L¹}`.
pub fn l1_distance(p0: &StepDensity, p1: &StepDensity) -> Result<f64> {
    same_n(p0, p1)?;
    Ok(p0.cells().iter().zip(p1.cells()).map(|(a, b)| (a - b).abs()).sum::<f64>() / p0.n() as f64)
}

/// Constants `(2/sqrt(κ̄), 2/sqrt(κ̲))` with `C_low Bh <= D <= C_upp Bh`.
pub fn sandwich_constants(law: &MaterialLaw) -> Result<(f64, f64)> {
    let c = law.constants()?;
    Ok((2.0 / c.kappa_hi.sqrt(), 2.0 / c.kappa_lo.sqrt()))
}

/// Time change `t(s)` of the Bhattacharya geodesic for distance `delta`.
pub fn bh_time(s: f64, delta: f64) -> f64 {
    if delta <= 0.0 {
        return s;
    }
    let a = (s * delta).sin();
    let b = (delta - s * delta).sin();
    a / (a + b)
}

/// Normalization factor `n(t) = 1 / (1 - 2 (t - t²)(1 - cos delta))`.
pub fn bh_normalizer(t: f64, delta: f64) -> f64 {
    1.0 / (1.0 - 2.0 * (t - t * t) * (1.0 - delta.cos()))
}

/// Point at parameter `s` on the Bhattacharya geodesic from `p0` to `p1`.
pub fn bh_geodesic(p0: &StepDensity, p1: &StepDensity, s: f64) -> Result<StepDensity> {
    let delta = bhattacharya(p0, p1)?;
    if delta == 0.0 || s <= 0.0 {
        return Ok(p0.clone());
    }
    if s >= 1.0 {
        return Ok(p1.clone());
    }
    let t = bh_time(s, delta);
    let nt = bh_normalizer(t, delta);
    let cells = p0
        .cells()
        .iter()
        .zip(p1.cells())
        .map(|(a, b)| nt * ((1.0 - t) * a.sqrt() + t * b.sqrt()).powi(2))
        .collect();
    StepDensity::boundary(cells)
}

/// Initial velocity of the Bhattacharya geodesic,
/// `(delta / sin delta) 2 (sqrt(p0 p1) - p0 cos delta)`.
pub fn bh_geodesic_velocity(p0: &StepDensity, p1: &StepDensity) -> Result<Vec<f64>> {
    let delta = bhattacharya(p0, p1)?;
    if delta == 0.0 {
        return Ok(vec![0.0; p0.n()]);
    }
    let f = delta / delta.sin();
    Ok(p0
        .cells()
        .iter()
        .zip(p1.cells())
        .map(|(a, b)| f * 2.0 * ((a * b).sqrt() - a * delta.cos()))
        .collect())
}

/// Result of [`bh_geodesic_bounds_check`].
#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
pub struct GeodesicBoundsReport {
    pub samples: usize,
    /// Smallest slack of `min(p0, p1) <= gamma <= 2 max(p0, p1)` over all
    /// samples; nonnegative when the bounds hold.
    pub worst_margin: f64,
    /// Range of the normalization factor over the samples.
    pub normalizer_min: f64,
    pub normalizer_max: f64,
}

/// Checks `min(p0, p1) <= gamma(s) <= 2 max(p0, p1)` at `samples + 1`
/// uniformly spaced parameters.
pub fn bh_geodesic_bounds_check(p0: &StepDensity, p1: &StepDensity, samples: usize) -> Result<GeodesicBoundsReport> {
    let delta = bhattacharya(p0, p1)?;
    let samples = samples.max(1);
    let mut worst = f64::INFINITY;
    let (mut nmin, mut nmax) = (f64::INFINITY, f64::NEG_INFINITY);
    for j in 0..=samples {
        let s = j as f64 / samples as f64;
        let nt = bh_normalizer(bh_time(s, delta), delta);
        nmin = nmin.min(nt);
        nmax = nmax.max(nt);
        let g = bh_geodesic(p0, p1, s)?;
        for ((a, b), c) in p0.cells().iter().zip(p1.cells()).zip(g.cells()) {
            let lo = c - a.min(*b);
            let hi = 2.0 * a.max(*b) - c;
            worst = worst.min(lo).min(hi);
        }
    }
    if worst < -1e-10 {
        return Err(Error::PropertyViolation(format!(
            "Bhattacharya geodesic leaves [min(p0,p1), 2 max(p0,p1)] by {}",
            -worst
        )));
    }
    Ok(GeodesicBoundsReport {
        samples: samples + 1,
        worst_margin: worst,
        normalizer_min: nmin,
        normalizer_max: nmax,
    })
}

// ---------------------------------------------------------------------------
// Geodesic shooting

/// A point of a shot: position, momentum and the Lagrange multiplier
/// `lambda = [k(gamma) xi] / [k(gamma)]`.
#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
pub struct ShootingState {
    pub s: f64,
    pub gamma: StepDensity,
    pub xi: Vec<f64>,
    pub lambda: f64,
}

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
pub struct ShootingTrajectory {
    pub states: Vec<ShootingState>,
    /// `<xi, K(gamma) xi>` at each recorded state; conserved along a shot.
    pub hamiltonian: Vec<f64>,
    /// True when the recorded multipliers never decrease (to 1e-9 relative).
    pub lambda_monotone: bool,
}

impl ShootingTrajectory {
    pub fn end(&self) -> &ShootingState {
        self.states.last().expect("shot has states")
    }
}

#[derive(Clone, Debug)]
pub struct ShootOptions {
    pub rtol: f64,
    pub atol: f64,
    /// Number of uniform intervals at which states are recorded.
    pub record: usize,
}

impl Default for ShootOptions {
    fn default() -> Self {
        ShootOptions {
            rtol: 1e-11,
            atol: 1e-13,
            record: 32,
        }
    }
}

fn shooting_rhs(law: &MaterialLaw, n: usize, y: &[f64], dy: &mut [f64]) {
    let (g, xi) = y.split_at(n);
    if g.iter().any(|v| !(*v > 0.0)) {
        dy.iter_mut().for_each(|v| *v = f64::NAN);
        return;
    }
    let k: Vec<f64> = g.iter().map(|&q| law.k(q)).collect();
    let lam = weighted_mean(&k, xi);
    for i in 0..n {
        let d = xi[i] - lam;
        dy[i] = k[i] * d;
        dy[n + i] = -0.5 * law.dk(g[i]) * d * d;
    }
}

fn hamiltonian_of(law: &MaterialLaw, g: &[f64], xi: &[f64]) -> f64 {
    let k: Vec<f64> = g.iter().map(|&q| law.k(q)).collect();
    let lam = weighted_mean(&k, xi);
    mean(&k.iter().zip(xi).map(|(k, x)| k * (x - lam).powi(2)).collect::<Vec<_>>())
}

struct ShotRecorder {
    n: usize,
    times: Vec<f64>,
    next: usize,
    states: Vec<(f64, Vec<f64>)>,
}

impl StepHook for ShotRecorder {
    fn admissible(&mut self, _t: f64, y: &[f64]) -> bool {
        y[..self.n].iter().all(|v| *v > 0.0)
    }

    fn accepted(&mut self, seg: &DenseSegment, t: f64, _y: &mut [f64]) -> Result<Control> {
        while self.next < self.times.len() && self.times[self.next] <= t + 1e-14 {
            let ts = self.times[self.next];
            self.states.push((ts, seg.eval(ts)));
            self.next += 1;
        }
        Ok(Control::Continue)
    }
}

/// Integrates the geodesic equations
/// `gamma' = k(gamma)(xi - lambda)`, `xi' = -k'(gamma)(xi - lambda)²/2`
/// from `(p0, xi0)` up to `s_end`.
pub fn geodesic_shoot(
    law: &MaterialLaw,
    p0: &StepDensity,
    xi0: &[f64],
    s_end: f64,
    opts: &ShootOptions,
) -> Result<ShootingTrajectory> {
    let n = p0.n();
    if xi0.len() != n {
        return Err(Error::DimensionMismatch { expected: n, got: xi0.len() });
    }
    if p0.is_boundary() {
        return Err(Error::Invariant("positivity (shooting needs an interior start)".into()));
    }
    if xi0.iter().any(|v| !v.is_finite()) {
        return Err(Error::InvalidParameter("non-finite initial momentum".into()));
    }
    let record = opts.record.max(1);
    let times: Vec<f64> = (0..=record).map(|j| s_end * j as f64 / record as f64).collect();
    let mut y0 = p0.cells().to_vec();
    y0.extend_from_slice(xi0);
    let mut hook = ShotRecorder {
        n,
        times: times.clone(),
        next: 1,
        states: vec![(0.0, y0.clone())],
    };
    let ode = OdeOptions {
        rtol: opts.rtol,
        atol: opts.atol,
        ..Default::default()
    };
    let res = integrate(
        |_, y, dy| shooting_rhs(law, n, y, dy),
        0.0,
        &y0,
        s_end,
        &times[1..],
        &ode,
        &mut hook,
    );
    match res {
        Ok(_) => {}
        Err(Error::StiffnessFailure { t, .. }) => return Err(Error::LeftDomain { s: t }),
        Err(e) => return Err(e),
    }
    let mut states = Vec::with_capacity(hook.states.len());
    let mut hamiltonian = Vec::with_capacity(hook.states.len());
    for (s, y) in hook.states {
        let (g, xi) = y.split_at(n);
        if g.iter().any(|v| !(*v > 0.0)) {
            return Err(Error::LeftDomain { s });
        }
        let k: Vec<f64> = g.iter().map(|&q| law.k(q)).collect();
        let lambda = weighted_mean(&k, xi);
        hamiltonian.push(hamiltonian_of(law, g, xi));
        states.push(ShootingState {
            s,
            gamma: StepDensity::normalized(g.to_vec())?,
            xi: xi.to_vec(),
            lambda,
        });
    }
    let lambda_monotone = states
        .windows(2)
        .all(|w| w[1].lambda >= w[0].lambda - 1e-9 * w[0].lambda.abs().max(1.0));
    Ok(ShootingTrajectory {
        states,
        hamiltonian,
        lambda_monotone,
    })
}

/// Boundary-value solution of the shooting problem.
#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
pub struct ShootingSolution {
    pub xi0: Vec<f64>,
    /// `sqrt(<xi0, K(p0) xi0>)`, the length of the shot.
    pub distance: f64,
    /// Sup-norm mismatch `|gamma(1) - p1|`.
    pub residual: f64,
    pub iterations: usize,
}

/// Solves `gamma(1) = p1` for the initial momentum by damped Newton
/// iteration with a finite-difference Jacobian. The starting guess is the
/// Bhattacharya geodesic velocity divided by `k(p0)` unless supplied.
pub fn shoot_bvp(
    law: &MaterialLaw,
    p0: &StepDensity,
    p1: &StepDensity,
    xi_init: Option<&[f64]>,
    max_iter: usize,
) -> Result<ShootingSolution> {
    same_n(p0, p1)?;
    let n = p0.n();
    let opts = ShootOptions { record: 1, ..Default::default() };
    let mut xi: Vec<f64> = match xi_init {
        Some(x) => x.to_vec(),
        None => {
            let v = bh_geodesic_velocity(p0, p1)?;
            v.iter().zip(p0.cells()).map(|(v, &q)| v / law.k(q)).collect()
        }
    };
    let shoot_residual = |xi: &[f64]| -> Option<Vec<f64>> {
        let tr = geodesic_shoot(law, p0, xi, 1.0, &opts).ok()?;
        Some(tr.end().gamma.cells().iter().zip(p1.cells()).map(|(a, b)| a - b).collect())
    };
    let norm = |r: &[f64]| r.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    let mut r = shoot_residual(&xi).ok_or(Error::LeftDomain { s: f64::NAN })?;
    let mut iterations = 0;
    while iterations < max_iter && norm(&r) > 1e-10 {
        iterations += 1;
        let mut jac = vec![vec![0.0; n]; n];
        for j in 0..n {
            let h = 1e-7 * (1.0 + xi[j].abs());
            let mut xp = xi.clone();
            xp[j] += h;
            let rp = shoot_residual(&xp).ok_or(Error::LeftDomain { s: f64::NAN })?;
            for i in 0..n {
                jac[i][j] = (rp[i] - r[i]) / h;
            }
        }
        // Momenta are defined up to constants: solve the least-squares system
        // augmented by a zero-mean row for the update.
        let mut ata = vec![vec![0.0; n]; n];
        let mut atb = vec![0.0; n];
        for a in 0..n {
            for b in 0..n {
                ata[a][b] = (0..n).map(|i| jac[i][a] * jac[i][b]).sum::<f64>() + 1.0;
            }
            atb[a] = -(0..n).map(|i| jac[i][a] * r[i]).sum::<f64>();
        }
        let step = solve_dense(ata, atb).ok_or_else(|| Error::InvalidParameter("singular shooting Jacobian".into()))?;
        let mut damping = 1.0;
        let current = norm(&r);
        loop {
            let trial: Vec<f64> = xi.iter().zip(&step).map(|(x, d)| x + damping * d).collect();
            if let Some(rt) = shoot_residual(&trial) {
                if norm(&rt) < current {
                    xi = trial;
                    r = rt;
                    break;
                }
            }
            damping *= 0.5;
            if damping < 1e-6 {
                return Err(Error::InvalidParameter(format!(
                    "shooting did not converge (residual {current})"
                )));
            }
        }
    }
    let distance = hamiltonian_of(law, p0.cells(), &xi).sqrt();
    Ok(ShootingSolution {
        xi0: xi,
        distance,
        residual: norm(&r),
        iterations,
    })
}

// ---------------------------------------------------------------------------
// Path relaxation

/// An `s`-parametrized discrete path with its discrete action.
#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
pub struct GeodesicPath {
    pub s: Vec<f64>,
    pub knots: Vec<StepDensity>,
    /// Discrete action (squared length) of this path.
    pub action: f64,
}

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields, default)]
pub struct GeodesicOptions {
    /// Interior knots of the coarse path.
    pub knots: usize,
    pub max_iter: usize,
    /// Relative action decrease over `window` iterations that counts as converged.
    pub rel_tol: f64,
    pub window: usize,
    /// Lower clip for interior knot values.
    pub floor: f64,
    /// Repeat the relaxation with twice as many segments and extrapolate the
    /// action to zero segment length.
    pub extrapolate: bool,
    /// Seeded zero-mean perturbation `(seed, relative amplitude)` of the
    /// initial interior knots; breaks the cell symmetry of replicated pairs.
    pub perturbation: Option<(u64, f64)>,
    /// Cross-validate against the shooting boundary-value solver.
    pub shooting_check: bool,
}

impl Default for GeodesicOptions {
    fn default() -> Self {
        GeodesicOptions {
            knots: 32,
            max_iter: 200_000,
            rel_tol: 1e-10,
            window: 20,
            floor: 1e-12,
            extrapolate: true,
            perturbation: None,
            shooting_check: false,
        }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
pub struct DistanceResult {
    /// Best estimate of the geodesic distance.
    pub distance: f64,
    /// Squared distance estimate (extrapolated when enabled).
    pub action: f64,
    pub action_coarse: f64,
    pub action_fine: Option<f64>,
    pub iterations: usize,
    pub converged: bool,
    /// "converged" or "upper-bound-only".
    pub status: String,
    /// Relaxed path (the finest one computed).
    pub path: GeodesicPath,
    pub shooting_distance: Option<f64>,
}

/// Discrete action of a path through the given knots (endpoints included),
/// uniform in `s`, with `k` evaluated at segment midpoints.
pub fn discrete_action(law: &MaterialLaw, knots: &[&[f64]]) -> f64 {
    let segs = knots.len() - 1;
    let ds = 1.0 / segs as f64;
    let n = knots[0].len();
    let mut total = 0.0;
    for w in knots.windows(2) {
        for i in 0..n {
            let (a, b) = (w[0][i], w[1][i]);
            total += (b - a).powi(2) / law.k(0.5 * (a + b));
        }
    }
    total / (ds * n as f64)
}

struct Relaxation<'a> {
    law: &'a MaterialLaw,
    p0: &'a [f64],
    p1: &'a [f64],
    n: usize,
    interior: usize,
}

impl Relaxation<'_> {
    fn knot<'b>(&'b self, x: &'b [f64], j: usize) -> &'b [f64] {
        if j == 0 {
            self.p0
        } else if j == self.interior + 1 {
            self.p1
        } else {
            &x[(j - 1) * self.n..j * self.n]
        }
    }

    fn value_grad(&self, x: &[f64], grad: &mut [f64]) -> f64 {
        let n = self.n;
        let segs = self.interior + 1;
        let scale = segs as f64 / n as f64;
        grad.iter_mut().for_each(|g| *g = 0.0);
        let mut total = 0.0;
        for j in 0..segs {
            let (a, b) = (self.knot(x, j), self.knot(x, j + 1));
            for i in 0..n {
                let d = b[i] - a[i];
                let m = 0.5 * (a[i] + b[i]);
                let k = self.law.k(m);
                let dk = self.law.dk(m);
                total += d * d / k;
                let common = -0.5 * d * d * dk / (k * k);
                let db = 2.0 * d / k + common;
                let da = -2.0 * d / k + common;
                if j >= 1 {
                    grad[(j - 1) * n + i] += da * scale;
                }
                if j < self.interior {
                    grad[j * n + i] += db * scale;
                }
            }
        }
        total * scale
    }

    fn value(&self, x: &[f64]) -> f64 {
        let n = self.n;
        let segs = self.interior + 1;
        let mut total = 0.0;
        for j in 0..segs {
            let (a, b) = (self.knot(x, j), self.knot(x, j + 1));
            for i in 0..n {
                total += (b[i] - a[i]).powi(2) / self.law.k(0.5 * (a[i] + b[i]));
            }
        }
        total * segs as f64 / n as f64
    }

    /// Clips each interior knot to the floor and rescales it to unit mass.
    fn project(&self, x: &mut [f64], floor: f64) {
        for knot in x.chunks_mut(self.n) {
            knot.iter_mut().for_each(|v| *v = v.max(floor));
            let m = mean(knot);
            knot.iter_mut().for_each(|v| *v /= m);
        }
    }

    /// Natural-gradient direction `-K(x) g` per knot.
    fn direction(&self, x: &[f64], g: &[f64], d: &mut [f64]) {
        let n = self.n;
        for j in 0..self.interior {
            let xs = &x[j * n..(j + 1) * n];
            let gs = &g[j * n..(j + 1) * n];
            let k: Vec<f64> = xs.iter().map(|&q| self.law.k(q)).collect();
            let lam = weighted_mean(&k, gs);
            for i in 0..n {
                d[j * n + i] = -k[i] * (gs[i] - lam);
            }
        }
    }
}

struct RelaxOutcome {
    x: Vec<f64>,
    action: f64,
    iterations: usize,
    converged: bool,
}

/// Spectral projected gradient with Barzilai-Borwein steps and nonmonotone
/// backtracking.
fn relax(prob: &Relaxation, mut x: Vec<f64>, opts: &GeodesicOptions) -> RelaxOutcome {
    const MEMORY: usize = 10;
    let dim = x.len();
    prob.project(&mut x, opts.floor);
    let mut g = vec![0.0; dim];
    let mut f = prob.value_grad(&x, &mut g);
    let mut d = vec![0.0; dim];
    let mut xn = vec![0.0; dim];
    let mut gn = vec![0.0; dim];
    let mut history = vec![f];
    let mut recent = std::collections::VecDeque::from(vec![f]);
    if dim == 0 || f == 0.0 {
        return RelaxOutcome { x, action: f, iterations: 0, converged: true };
    }
    prob.direction(&x, &g, &mut d);
    // first step moves each knot value by at most 1% of itself
    let rel = x
        .iter()
        .zip(&d)
        .map(|(x, d)| d.abs() / x.max(1e-300))
        .fold(0.0f64, f64::max);
    let mut alpha = if rel > 0.0 { 0.01 / rel } else { 1.0 };
    let mut converged = false;
    let mut iterations = 0;
    while iterations < opts.max_iter {
        iterations += 1;
        prob.direction(&x, &g, &mut d);
        let f_ref = recent.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let mut step = alpha;
        let mut accepted = false;
        for _ in 0..60 {
            for i in 0..dim {
                xn[i] = x[i] + step * d[i];
            }
            prob.project(&mut xn, opts.floor);
            let gd: f64 = (0..dim).map(|i| g[i] * (xn[i] - x[i])).sum();
            let trial = prob.value(&xn);
            if trial.is_finite() && trial <= f_ref + 1e-4 * gd {
                accepted = true;
                break;
            }
            step *= 0.5;
        }
        if !accepted {
            // no decrease at floating-point resolution
            converged = true;
            break;
        }
        let f_new = prob.value_grad(&xn, &mut gn);
        let mut sy = 0.0;
        let mut sms = 0.0;
        for i in 0..dim {
            let s = xn[i] - x[i];
            sy += s * (gn[i] - g[i]);
            sms += s * s / prob.law.k(xn[i]);
        }
        alpha = if sy > 0.0 { (sms / sy).clamp(1e-14, 1e14) } else { (step * 4.0).min(1e14) };
        std::mem::swap(&mut x, &mut xn);
        std::mem::swap(&mut g, &mut gn);
        f = f_new;
        history.push(f);
        recent.push_back(f);
        if recent.len() > MEMORY {
            recent.pop_front();
        }
        let w = opts.window;
        if history.len() > w {
            let old = history[history.len() - 1 - w];
            if (old - f) <= opts.rel_tol * f.abs() {
                converged = true;
                break;
            }
        }
    }
    RelaxOutcome { x, action: f, iterations, converged }
}

fn refine_interior(coarse: &[f64], p0: &[f64], p1: &[f64], n: usize, interior: usize) -> Vec<f64> {
    // knots 0..=interior+1 of the coarse path, then midpoints between them
    let knot = |j: usize| -> &[f64] {
        if j == 0 {
            p0
        } else if j == interior + 1 {
            p1
        } else {
            &coarse[(j - 1) * n..j * n]
        }
    };
    let mut x = Vec::with_capacity(n * (2 * interior + 1));
    for j in 0..=interior {
        if j > 0 {
            x.extend_from_slice(knot(j));
        }
        let (a, b) = (knot(j), knot(j + 1));
        x.extend(a.iter().zip(b).map(|(a, b)| 0.5 * (a + b)));
    }
    x
}

fn build_path(p0: &StepDensity, p1: &StepDensity, x: &[f64], interior: usize, action: f64) -> Result<GeodesicPath> {
    let n = p0.n();
    let segs = interior + 1;
    let mut knots = vec![p0.clone()];
    for j in 0..interior {
        knots.push(StepDensity::boundary(x[j * n..(j + 1) * n].to_vec())?);
    }
    knots.push(p1.clone());
    Ok(GeodesicPath {
        s: (0..=segs).map(|j| j as f64 / segs as f64).collect(),
        knots,
        action,
    })
}

/// Geodesic distance `D^k_N(p0, p1)` by relaxation of a discrete path.
///
/// The initial path samples the Bhattacharya geodesic unless
/// `initial` supplies interior knots (one density per interior knot).
pub fn geodesic_distance(
    law: &MaterialLaw,
    p0: &StepDensity,
    p1: &StepDensity,
    opts: &GeodesicOptions,
) -> Result<DistanceResult> {
    geodesic_distance_from(law, p0, p1, None, opts)
}

pub fn geodesic_distance_from(
    law: &MaterialLaw,
    p0: &StepDensity,
    p1: &StepDensity,
    initial: Option<&[StepDensity]>,
    opts: &GeodesicOptions,
) -> Result<DistanceResult> {
    same_n(p0, p1)?;
    if opts.knots == 0 {
        return Err(Error::InvalidParameter("need at least one interior knot".into()));
    }
    let n = p0.n();
    let interior = match initial {
        Some(path) => path.len(),
        None => opts.knots,
    };
    if interior == 0 {
        return Err(Error::InvalidParameter("initial path has no interior knots".into()));
    }
    let mut x = match initial {
        Some(path) => {
            if let Some(bad) = path.iter().find(|q| q.n() != n) {
                return Err(Error::DimensionMismatch { expected: n, got: bad.n() });
            }
            path.iter().flat_map(|q| q.cells().to_vec()).collect()
        }
        None => {
            let segs = interior + 1;
            let mut x = Vec::with_capacity(n * interior);
            for j in 1..=interior {
                x.extend_from_slice(bh_geodesic(p0, p1, j as f64 / segs as f64)?.cells());
            }
            x
        }
    };
    if let Some((seed, amp)) = opts.perturbation {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for knot in x.chunks_mut(n) {
            let noise: Vec<f64> = (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let m = mean(&noise);
            for (v, z) in knot.iter_mut().zip(&noise) {
                *v *= 1.0 + amp * (z - m);
            }
        }
    }

    let prob = Relaxation { law, p0: p0.cells(), p1: p1.cells(), n, interior };
    let coarse = relax(&prob, x, opts);
    let mut iterations = coarse.iterations;
    let mut converged = coarse.converged;
    let boundary = p0.is_boundary() || p1.is_boundary();

    let (action, action_fine, path) = if opts.extrapolate && coarse.action > 0.0 {
        let fine_interior = 2 * interior + 1;
        let x_f = refine_interior(&coarse.x, p0.cells(), p1.cells(), n, interior);
        let prob_f = Relaxation { law, p0: p0.cells(), p1: p1.cells(), n, interior: fine_interior };
        let fine = relax(&prob_f, x_f, opts);
        iterations += fine.iterations;
        converged &= fine.converged;
        // Segment-length expansion: second order for interior endpoints,
        // first order when an endpoint has vanishing cells.
        let extrapolated = if boundary {
            2.0 * fine.action - coarse.action
        } else {
            (4.0 * fine.action - coarse.action) / 3.0
        };
        let path = build_path(p0, p1, &fine.x, fine_interior, fine.action)?;
        (extrapolated.max(0.0), Some(fine.action), path)
    } else {
        let path = build_path(p0, p1, &coarse.x, interior, coarse.action)?;
        (coarse.action, None, path)
    };

    let shooting_distance = if opts.shooting_check && !boundary {
        shoot_bvp(law, p0, p1, None, 30).ok().map(|s| s.distance)
    } else {
        None
    };

    Ok(DistanceResult {
        distance: action.sqrt(),
        action,
        action_coarse: coarse.action,
        action_fine,
        iterations,
        converged,
        status: if converged { "converged".into() } else { "upper-bound-only".into() },
        path,
        shooting_distance,
    })
}

/// Distances in `P_{mN}` for each multiple `m`, with the endpoints embedded
/// by cell replication.
pub fn refine_distance_ladder(
    law: &MaterialLaw,
    p0: &StepDensity,
    p1: &StepDensity,
    multiples: &[usize],
    opts: &GeodesicOptions,
) -> Result<Vec<DistanceResult>> {
    use rayon::prelude::*;
    if multiples.is_empty() || multiples.contains(&0) || multiples.windows(2).any(|w| w[0] >= w[1]) {
        return Err(Error::InvalidParameter("multiples must be increasing positive integers".into()));
    }
    multiples
        .par_iter()
        .map(|&m| geodesic_distance(law, &p0.replicate(m), &p1.replicate(m), opts))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::material::{catalog_appendix_k, catalog_default};
    use approx::assert_relative_eq;
    use std::f64::consts::PI;

    fn d(c: &[f64]) -> StepDensity {
        StepDensity::new(c.to_vec()).unwrap()
    }

    fn disjoint_pair() -> (StepDensity, StepDensity) {
        (
            StepDensity::boundary(vec![0.0, 2.0]).unwrap(),
            StepDensity::boundary(vec![2.0, 0.0]).unwrap(),
        )
    }

    fn random_pair(rng: &mut ChaCha8Rng, n: usize, lo: f64, hi: f64) -> (StepDensity, StepDensity) {
        let mut gen = || StepDensity::normalized((0..n).map(|_| rng.gen_range(lo..hi)).collect()).unwrap();
        (gen(), gen())
    }

    #[test]
    fn closed_form_anchors() {
        let (p0, p1) = disjoint_pair();
        assert_relative_eq!(hellinger(&p0, &p1).unwrap(), 2f64.sqrt(), epsilon = 1e-15);
        assert_relative_eq!(bhattacharya(&p0, &p1).unwrap(), PI / 2.0, epsilon = 1e-15);
        let (a, b) = (d(&[0.5, 1.5]), d(&[1.5, 0.5]));
        assert_relative_eq!(hellinger(&a, &b).unwrap(), (2.0 - 3f64.sqrt()).sqrt(), epsilon = 1e-15);
        assert_relative_eq!(bhattacharya(&a, &b).unwrap(), PI / 6.0, epsilon = 1e-14);
        assert_eq!(bhattacharya(&a, &a).unwrap(), 0.0);
        assert!(matches!(hellinger(&a, &d(&[1.0, 1.0, 1.0])), Err(Error::DimensionMismatch { .. })));
    }

    #[test]
    fn arcsin_and_arccos_forms_agree() {
        for he in [0.0, 0.1, 0.7, 1.2, 2f64.sqrt()] {
            let a = bh_from_hellinger(he);
            let b = (1.0 - 0.5 * he * he).clamp(-1.0, 1.0).acos();
            assert!((a - b).abs() < 1e-7 || (a - b).abs() < 1e-12 * a);
        }
    }

    #[test]
    fn geodesic_midpoint_of_disjoint_pair_is_uniform() {
        let (p0, p1) = disjoint_pair();
        let g = bh_geodesic(&p0, &p1, 0.5).unwrap();
        for c in g.cells() {
            assert_relative_eq!(*c, 1.0, epsilon = 1e-14);
        }
        assert_eq!(bh_geodesic(&p0, &p1, 0.0).unwrap(), p0);
        assert_relative_eq!(bh_time(0.5, 0.3), 0.5, epsilon = 1e-15);
    }

    #[test]
    fn shooting_reproduces_bhattacharya_geodesic() {
        let law = catalog_default();
        let (p0, p1) = (d(&[0.4, 1.2, 1.9, 0.5]), d(&[1.5, 0.3, 0.7, 1.5]));
        let v = bh_geodesic_velocity(&p0, &p1).unwrap();
        let xi0: Vec<f64> = v.iter().zip(p0.cells()).map(|(v, q)| v / law.k(*q)).collect();
        let shot = geodesic_shoot(&law, &p0, &xi0, 1.0, &ShootOptions::default()).unwrap();
        for st in &shot.states {
            let g = bh_geodesic(&p0, &p1, st.s).unwrap();
            let err = g.cells().iter().zip(st.gamma.cells()).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
            assert!(err < 1e-6, "s = {}: {err}", st.s);
        }
        assert!(shot.lambda_monotone);
        let h0 = shot.hamiltonian[0];
        assert!(shot.hamiltonian.iter().all(|h| (h - h0).abs() < 1e-8 * h0));
        // shot length equals the Bhattacharya distance for k = 4p
        assert_relative_eq!(h0.sqrt(), bhattacharya(&p0, &p1).unwrap(), max_relative = 1e-10);
    }

    #[test]
    fn constant_momentum_shot_stays_put() {
        let law = catalog_default();
        let p0 = d(&[0.5, 1.5]);
        let shot = geodesic_shoot(&law, &p0, &[0.7, 0.7], 1.0, &ShootOptions::default()).unwrap();
        assert_eq!(shot.end().gamma.cells(), p0.cells());
    }

    #[test]
    fn shooting_leaves_domain() {
        let law = catalog_default();
        let p0 = d(&[0.5, 1.5]);
        match geodesic_shoot(&law, &p0, &[-50.0, 50.0], 1.0, &ShootOptions::default()) {
            Err(Error::LeftDomain { s }) => assert!(s > 0.0 && s < 1.0),
            other => panic!("expected left-domain, got {other:?}"),
        }
    }

    #[test]
    fn relaxation_matches_bhattacharya_for_linear_k() {
        let law = catalog_default();
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for n in [2, 4, 8] {
            let (p0, p1) = random_pair(&mut rng, n, 0.2, 3.0);
            let r = geodesic_distance(&law, &p0, &p1, &GeodesicOptions::default()).unwrap();
            let bh = bhattacharya(&p0, &p1).unwrap();
            assert!(r.converged);
            assert!((r.distance - bh).abs() <= 1e-4 * bh, "N = {n}: {} vs {bh}", r.distance);
        }
        let p = d(&[0.5, 1.5]);
        assert_eq!(geodesic_distance(&law, &p, &p, &GeodesicOptions::default()).unwrap().distance, 0.0);
    }

    #[test]
    fn shooting_bvp_matches_relaxation_for_appendix_k() {
        let law = catalog_appendix_k(0.2).unwrap();
        let (p0, p1) = (d(&[0.5, 2.4, 0.1]), d(&[1.6, 0.9, 0.5]));
        let sol = shoot_bvp(&law, &p0, &p1, None, 40).unwrap();
        let r = geodesic_distance(&law, &p0, &p1, &GeodesicOptions::default()).unwrap();
        assert!(sol.residual < 1e-9);
        assert_relative_eq!(sol.distance, r.distance, max_relative = 1e-3);
    }

    #[test]
    fn boundary_pair_distance() {
        let law = catalog_default();
        let (p0, p1) = disjoint_pair();
        // vanishing endpoint cells make the segment-length error first order
        let r = geodesic_distance(&law, &p0, &p1, &GeodesicOptions::default()).unwrap();
        assert!((r.distance - PI / 2.0).abs() < 5e-3, "{}", r.distance);
    }
}
