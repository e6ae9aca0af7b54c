//! The discretized gradient flow `p' = -K(p)(W'(p) - G^N)`, its linearization
//! along a solution, and loading-interpolated families of flows.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::material::{Loading, MaterialLaw};
use crate::metric::{discrete_action, GeodesicPath};
use crate::numerics::mean;
use crate::ode::{eval_segments, integrate, Control, DenseSegment, OdeOptions, StepHook};
use crate::state::{
    energy_with_loading, sublevel_density_floor, weighted_mean, Covector, StepDensity, TangentVector,
    RENORMALIZE_LIMIT,
};

/// What to do when a step would push a cell below the positivity guard.
#[derive(Clone, Copy, Debug, Serialize, Deserialize, PartialEq, Eq)]
#[serde(rename_all = "kebab-case")]
pub enum FloorPolicy {
    /// Reject the step and retry with half the step size.
    RejectStep,
    /// Abort with an integrity failure.
    Error,
}

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields, default)]
pub struct FlowConfig {
    pub rtol: f64,
    pub atol: f64,
    pub t_end: f64,
    pub max_step: f64,
    pub positivity_floor_policy: FloorPolicy,
    /// Record stride in time; `None` records every accepted step.
    pub record_every: Option<f64>,
    /// Explicit record times (take precedence over `record_every`).
    pub output_times: Vec<f64>,
    /// Stop once the metric norm of the vector field stays below this value
    /// for three accepted steps (only for flows without a tangent).
    pub steady_tol: f64,
}

impl Default for FlowConfig {
    fn default() -> Self {
        FlowConfig {
            rtol: 1e-8,
            atol: 1e-10,
            t_end: 1.0,
            max_step: f64::INFINITY,
            positivity_floor_policy: FloorPolicy::RejectStep,
            record_every: None,
            output_times: Vec::new(),
            steady_tol: 1e-12,
        }
    }
}

impl FlowConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.rtol > 0.0 && self.atol > 0.0) {
            return Err(Error::InvalidParameter("tolerances must be positive".into()));
        }
        if !(self.t_end > 0.0 && self.t_end.is_finite()) {
            return Err(Error::InvalidParameter("t_end must be positive and finite".into()));
        }
        if !(self.max_step > 0.0) {
            return Err(Error::InvalidParameter("max_step must be positive".into()));
        }
        if let Some(dt) = self.record_every {
            if !(dt > 0.0) {
                return Err(Error::InvalidParameter("record_every must be positive".into()));
            }
        }
        if self.output_times.iter().any(|t| !(*t >= 0.0 && t.is_finite())) {
            return Err(Error::InvalidParameter("output times must be finite and nonnegative".into()));
        }
        Ok(())
    }

    fn record_times(&self) -> Option<Vec<f64>> {
        if !self.output_times.is_empty() {
            let mut t: Vec<f64> = self.output_times.iter().cloned().filter(|&t| t <= self.t_end).collect();
            t.push(0.0);
            t.sort_by(f64::total_cmp);
            t.dedup();
            return Some(t);
        }
        self.record_every.map(|dt| {
            let m = (self.t_end / dt).floor() as usize;
            let mut t: Vec<f64> = (0..=m).map(|i| i as f64 * dt).collect();
            if t.last().is_none_or(|&l| self.t_end - l > 1e-12 * self.t_end) {
                t.push(self.t_end);
            }
            t
        })
    }
}

#[derive(Clone, Debug, Default, Serialize, Deserialize, PartialEq)]
pub struct Diagnostics {
    pub accepted: usize,
    pub rejected_error: usize,
    pub rejected_positivity: usize,
    pub evaluations: usize,
    pub renormalizations: usize,
    pub max_mass_drift: f64,
    pub max_tangent_drift: f64,
    pub t_final: f64,
    pub reached_steady_state: bool,
    /// Positivity guard used by the step control.
    pub positivity_guard: f64,
    /// Sublevel floor for the initial energy.
    pub sublevel_floor: f64,
}

/// A solved flow: recorded states with energies and the running dissipation
/// integral, plus the dense output of every accepted step.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct Trajectory {
    pub law_id: String,
    pub n: usize,
    pub times: Vec<f64>,
    pub states: Vec<StepDensity>,
    pub tangents: Option<Vec<TangentVector>>,
    pub energies: Vec<f64>,
    /// Running `∫ (R(p, p') + R*(p, -DE)) dt` at each recorded time.
    pub dissipation: Vec<f64>,
    pub loading_cells: Vec<f64>,
    pub zeta: Option<Vec<f64>>,
    pub diagnostics: Diagnostics,
    #[serde(skip)]
    segments: Vec<DenseSegment>,
}

impl Trajectory {
    pub fn t_end(&self) -> f64 {
        *self.times.last().expect("trajectory has states")
    }

    pub fn final_state(&self) -> &StepDensity {
        self.states.last().expect("trajectory has states")
    }

    /// Cell values of the density at time `t` from the dense output; times past
    /// an early steady-state stop return the final state.
    pub fn state_at(&self, t: f64) -> Vec<f64> {
        if t <= 0.0 || self.segments.is_empty() {
            return self.states[0].cells().to_vec();
        }
        if t >= self.diagnostics.t_final {
            return self.final_state().cells().to_vec();
        }
        let y = eval_segments(&self.segments, t).expect("segments present");
        y[..self.n].to_vec()
    }

    /// Density at time `t` (renormalized to unit mass).
    pub fn density_at(&self, t: f64) -> Result<StepDensity> {
        StepDensity::normalized(self.state_at(t))
    }

    /// Running dissipation integral at time `t`.
    pub fn dissipation_at(&self, t: f64) -> f64 {
        if t <= 0.0 || self.segments.is_empty() {
            return 0.0;
        }
        if t >= self.diagnostics.t_final {
            return *self.dissipation.last().expect("trajectory has states");
        }
        let y = eval_segments(&self.segments, t).expect("segments present");
        *y.last().expect("augmented state")
    }

    pub fn segments(&self) -> &[DenseSegment] {
        &self.segments
    }
}

/// `-K(p)(W'(p) - G)` on raw slices, returning `(k, xi - lambda)` scratch too.
fn field_raw(law: &MaterialLaw, p: &[f64], g: &[f64], k: &mut [f64], xi: &mut [f64], out: &mut [f64]) {
    for i in 0..p.len() {
        k[i] = law.k(p[i]);
        xi[i] = law.dw(p[i]) - g[i];
    }
    let lam = weighted_mean(k, xi);
    for i in 0..p.len() {
        out[i] = -k[i] * (xi[i] - lam);
    }
}

/// The vector field of the discretized flow.
pub fn vector_field(law: &MaterialLaw, p: &StepDensity) -> TangentVector {
    vector_field_with_loading(law, p, &law.loading_cells(p.n()))
}

pub fn vector_field_with_loading(law: &MaterialLaw, p: &StepDensity, g: &[f64]) -> TangentVector {
    let n = p.n();
    let (mut k, mut xi, mut out) = (vec![0.0; n], vec![0.0; n], vec![0.0; n]);
    field_raw(law, p.cells(), g, &mut k, &mut xi, &mut out);
    TangentVector::centered(out)
}

/// Derivative of the vector field at `p` in direction `y`:
/// `-(DK(p)y)(W' - G) - K(p)(W'' y)` with
/// `(DK(p)y)xi = k'y(xi - [k xi]/[k]) - k([k'y xi][k] - [k xi][k'y])/[k]²`.
pub fn field_derivative_raw(law: &MaterialLaw, p: &[f64], g: &[f64], y: &[f64], out: &mut [f64]) {
    let n = p.len();
    let mut k = vec![0.0; n];
    let mut dky = vec![0.0; n];
    let mut xi = vec![0.0; n];
    let mut w2y = vec![0.0; n];
    for i in 0..n {
        k[i] = law.k(p[i]);
        dky[i] = law.dk(p[i]) * y[i];
        xi[i] = law.dw(p[i]) - g[i];
        w2y[i] = law.d2w(p[i]) * y[i];
    }
    let nf = n as f64;
    let sk = k.iter().sum::<f64>() / nf;
    let skxi = k.iter().zip(&xi).map(|(a, b)| a * b).sum::<f64>() / nf;
    let sdky = dky.iter().sum::<f64>() / nf;
    let sdkyxi = dky.iter().zip(&xi).map(|(a, b)| a * b).sum::<f64>() / nf;
    let lam = skxi / sk;
    let dlam = (sdkyxi * sk - skxi * sdky) / (sk * sk);
    let lam2 = k.iter().zip(&w2y).map(|(a, b)| a * b).sum::<f64>() / nf / sk;
    for i in 0..n {
        let dk_xi = dky[i] * (xi[i] - lam) - k[i] * dlam;
        let k_w2y = k[i] * (w2y[i] - lam2);
        out[i] = -dk_xi - k_w2y;
    }
}

pub fn field_derivative(law: &MaterialLaw, p: &StepDensity, y: &TangentVector) -> Vec<f64> {
    let g = law.loading_cells(p.n());
    let mut out = vec![0.0; p.n()];
    field_derivative_raw(law, p.cells(), &g, y.cells(), &mut out);
    out
}

struct FlowHook<'a> {
    law: &'a MaterialLaw,
    n: usize,
    tangent: bool,
    guard: f64,
    policy: FloorPolicy,
    g: &'a [f64],
    record_times: Option<Vec<f64>>,
    next_record: usize,
    steady_tol: f64,
    steady_count: usize,
    diag: Diagnostics,
    rec_t: Vec<f64>,
    rec_y: Vec<Vec<f64>>,
    segments: Vec<DenseSegment>,
    policy_error: Option<Error>,
}

impl FlowHook<'_> {
    fn record(&mut self, t: f64, y: &[f64]) {
        self.rec_t.push(t);
        self.rec_y.push(y.to_vec());
    }
}

impl StepHook for FlowHook<'_> {
    fn admissible(&mut self, t: f64, y: &[f64]) -> bool {
        let ok = y[..self.n].iter().all(|&v| v >= self.guard);
        if !ok {
            self.diag.rejected_positivity += 1;
            if self.policy == FloorPolicy::Error && self.policy_error.is_none() {
                self.policy_error = Some(Error::IntegrityFailure {
                    t,
                    detail: format!("invariant: positivity (a cell fell below the guard {})", self.guard),
                });
            }
        }
        ok && self.policy_error.is_none()
    }

    fn accepted(&mut self, seg: &DenseSegment, t: f64, y: &mut [f64]) -> Result<Control> {
        if let Some(e) = self.policy_error.take() {
            return Err(e);
        }
        let n = self.n;
        let mut modified = false;
        let m = mean(&y[..n]);
        let drift = (m - 1.0).abs();
        self.diag.max_mass_drift = self.diag.max_mass_drift.max(drift);
        if drift > RENORMALIZE_LIMIT {
            return Err(Error::IntegrityFailure {
                t,
                detail: format!("unit mass drifted to {m}"),
            });
        }
        if drift > 1e-12 {
            y[..n].iter_mut().for_each(|v| *v /= m);
            self.diag.renormalizations += 1;
            modified = true;
        }
        if self.tangent {
            let ys = &mut y[n..2 * n];
            let my = mean(ys);
            let scale = ys.iter().fold(1.0f64, |a, v| a.max(v.abs()));
            self.diag.max_tangent_drift = self.diag.max_tangent_drift.max(my.abs() / scale);
            if my.abs() > RENORMALIZE_LIMIT * scale {
                return Err(Error::IntegrityFailure {
                    t,
                    detail: format!("tangent mean drifted to {my}"),
                });
            }
            if my.abs() > 1e-12 * scale {
                ys.iter_mut().for_each(|v| *v -= my);
                modified = true;
            }
        }
        self.segments.push(seg.clone());

        match &self.record_times {
            None => {
                let yv = y.to_vec();
                self.record(t, &yv);
            }
            Some(times) => {
                while self.next_record < times.len() && times[self.next_record] <= t + 1e-12 * t.abs().max(1.0) {
                    let tr = times[self.next_record];
                    let yr = if (tr - t).abs() <= 1e-12 * t.abs().max(1.0) { y.to_vec() } else { seg.eval(tr) };
                    self.rec_t.push(tr);
                    self.rec_y.push(yr);
                    self.next_record += 1;
                }
            }
        }

        if !self.tangent && self.steady_tol > 0.0 {
            let mut k = vec![0.0; n];
            let mut xi = vec![0.0; n];
            let mut f = vec![0.0; n];
            field_raw(self.law, &y[..n], self.g, &mut k, &mut xi, &mut f);
            let norm = (f.iter().zip(&k).map(|(v, k)| v * v / k).sum::<f64>() / n as f64).sqrt();
            if norm < self.steady_tol {
                self.steady_count += 1;
                if self.steady_count >= 3 {
                    self.diag.reached_steady_state = true;
                    return Ok(Control::Stop);
                }
            } else {
                self.steady_count = 0;
            }
        }
        Ok(if modified { Control::ContinueModified } else { Control::Continue })
    }
}

fn check_initial(law: &MaterialLaw, p0: &StepDensity) -> Result<()> {
    if p0.is_boundary() {
        return Err(Error::Invariant("positivity (flow needs positive cells)".into()));
    }
    if let Some(i) = p0.cells().iter().position(|&q| !law.w(q).is_finite()) {
        return Err(Error::Invariant(format!("finite energy (W overflows at cell {i})")));
    }
    Ok(())
}

fn run(
    law: &MaterialLaw,
    p0: &StepDensity,
    g: &[f64],
    tangent: Option<(&[f64], &[f64])>,
    cfg: &FlowConfig,
) -> Result<Trajectory> {
    cfg.validate()?;
    check_initial(law, p0)?;
    let n = p0.n();
    if g.len() != n {
        return Err(Error::DimensionMismatch { expected: n, got: g.len() });
    }
    if let Some((y0, z)) = tangent {
        if y0.len() != n {
            return Err(Error::DimensionMismatch { expected: n, got: y0.len() });
        }
        if z.len() != n {
            return Err(Error::DimensionMismatch { expected: n, got: z.len() });
        }
    }
    let e0 = energy_with_loading(law, p0.cells(), g);
    // The floor depends on the loading only through sup G.
    let floor = {
        let g_sup = g.iter().cloned().fold(f64::NEG_INFINITY, f64::max).max(0.0);
        let shifted = law.with_loading(Loading::constant(g_sup));
        sublevel_density_floor(&shifted, n, e0).unwrap_or(0.0)
    };
    let guard = if floor > 0.0 { (floor / 10.0).min(1e-13) } else { 1e-13 };

    let dim = if tangent.is_some() { 2 * n + 1 } else { n + 1 };
    let mut y0 = Vec::with_capacity(dim);
    y0.extend_from_slice(p0.cells());
    if let Some((yt, _)) = tangent {
        y0.extend_from_slice(yt);
    }
    y0.push(0.0);

    let zeta: Option<Vec<f64>> = tangent.map(|(_, z)| z.to_vec());
    let record_times = cfg.record_times();
    let mut hook = FlowHook {
        law,
        n,
        tangent: tangent.is_some(),
        guard,
        policy: cfg.positivity_floor_policy,
        g,
        record_times: record_times.clone(),
        next_record: 1,
        steady_tol: cfg.steady_tol,
        steady_count: 0,
        diag: Diagnostics { positivity_guard: guard, sublevel_floor: floor, ..Default::default() },
        rec_t: Vec::new(),
        rec_y: Vec::new(),
        segments: Vec::new(),
        policy_error: None,
    };
    hook.record(0.0, &y0);

    let mut k = vec![0.0; n];
    let mut xi = vec![0.0; n];
    let mut kz = vec![0.0; n];
    let mut dvy = vec![0.0; n];
    let rhs = |_t: f64, y: &[f64], dy: &mut [f64]| {
        let p = &y[..n];
        if p.iter().any(|v| !(*v > 0.0)) {
            dy.iter_mut().for_each(|v| *v = f64::NAN);
            return;
        }
        field_raw(law, p, g, &mut k, &mut xi, &mut dy[..n]);
        // R(p, p') + R*(p, -(W' - G))
        let lam = weighted_mean(&k, &xi);
        let mut r = 0.0;
        let mut rs = 0.0;
        for i in 0..n {
            r += dy[i] * dy[i] / k[i];
            rs += k[i] * (xi[i] - lam).powi(2);
        }
        dy[dim - 1] = 0.5 * (r + rs) / n as f64;
        if let Some(z) = zeta.as_deref() {
            let yt = &y[n..2 * n];
            field_derivative_raw(law, p, g, yt, &mut dvy);
            let lz = weighted_mean(&k, z);
            for i in 0..n {
                kz[i] = k[i] * (z[i] - lz);
                dy[n + i] = dvy[i] + kz[i];
            }
        }
    };
    let opts = OdeOptions {
        rtol: cfg.rtol,
        atol: cfg.atol,
        max_step: cfg.max_step,
        ..Default::default()
    };
    let stops = record_times.clone().unwrap_or_default();
    let (_, stats) = integrate(rhs, 0.0, &y0, cfg.t_end, &stops, &opts, &mut hook)?;
    if let Some(e) = hook.policy_error.take() {
        return Err(e);
    }

    hook.diag.accepted = stats.accepted;
    hook.diag.rejected_error = stats.rejected_error;
    hook.diag.evaluations = stats.evaluations;
    hook.diag.t_final = stats.t_final;
    // an early steady-state stop leaves later record times: extend constantly
    if let Some(times) = &record_times {
        let last = hook.rec_y.last().cloned().expect("initial record");
        let last_t = *hook.rec_t.last().expect("initial record");
        let final_y = match hook.segments.last() {
            Some(seg) if stats.stopped_early => {
                let mut v = seg.end();
                let m = mean(&v[..n]);
                v[..n].iter_mut().for_each(|x| *x /= m);
                v
            }
            _ => last,
        };
        for &tr in times.iter().skip(hook.next_record) {
            if tr > last_t {
                hook.record(tr, &final_y);
            }
        }
    } else if stats.stopped_early && hook.rec_t.last() != Some(&stats.t_final) {
        let y = hook.rec_y.last().cloned().expect("initial record");
        hook.record(stats.t_final, &y);
    }

    let mut states = Vec::with_capacity(hook.rec_t.len());
    let mut tangents = tangent.map(|_| Vec::with_capacity(hook.rec_t.len()));
    let mut energies = Vec::with_capacity(hook.rec_t.len());
    let mut dissipation = Vec::with_capacity(hook.rec_t.len());
    for (t, y) in hook.rec_t.iter().zip(&hook.rec_y) {
        let p = StepDensity::new(y[..n].to_vec()).map_err(|e| Error::IntegrityFailure {
            t: *t,
            detail: e.to_string(),
        })?;
        energies.push(energy_with_loading(law, p.cells(), g));
        states.push(p);
        if let Some(ts) = tangents.as_mut() {
            ts.push(TangentVector::centered(y[n..2 * n].to_vec()));
        }
        dissipation.push(y[dim - 1]);
    }
    Ok(Trajectory {
        law_id: law.id().to_string(),
        n,
        times: hook.rec_t,
        states,
        tangents,
        energies,
        dissipation,
        loading_cells: g.to_vec(),
        zeta,
        diagnostics: hook.diag,
        segments: hook.segments,
    })
}

/// Solves the flow from `p0` with the law's loading.
pub fn solve(law: &MaterialLaw, p0: &StepDensity, cfg: &FlowConfig) -> Result<Trajectory> {
    let g = law.loading_cells(p0.n());
    run(law, p0, &g, None, cfg)
}

/// Solves the flow with explicitly given loading cell values.
pub fn solve_with_loading(law: &MaterialLaw, p0: &StepDensity, g: &[f64], cfg: &FlowConfig) -> Result<Trajectory> {
    run(law, p0, g, None, cfg)
}

/// Solves the flow together with the tangent equation
/// `y' = DV(p) y + K(p) zeta`.
pub fn solve_with_tangent(
    law: &MaterialLaw,
    p0: &StepDensity,
    y0: &TangentVector,
    zeta: &Covector,
    cfg: &FlowConfig,
) -> Result<Trajectory> {
    let g = law.loading_cells(p0.n());
    let mut cfg = cfg.clone();
    cfg.steady_tol = 0.0;
    run(law, p0, &g, Some((y0.cells(), zeta.cells())), &cfg)
}

/// Solves the flow from every knot of `path`, the knot at parameter `s`
/// using the loading `(1 - s) g_a + s g_b` (cell values).
pub fn solve_parametrized(
    law: &MaterialLaw,
    path: &GeodesicPath,
    g_a: &[f64],
    g_b: &[f64],
    cfg: &FlowConfig,
) -> Result<Vec<Trajectory>> {
    path.knots
        .par_iter()
        .zip(path.s.par_iter())
        .map(|(q, &s)| {
            let g: Vec<f64> = g_a.iter().zip(g_b).map(|(a, b)| (1.0 - s) * a + s * b).collect();
            run(law, q, &g, None, cfg)
        })
        .collect()
}

/// Discrete length of the curve `s -> p_s(t)` transported by a family of
/// flows (one per knot, knots uniform in `s`); an upper bound of the
/// discrete distance between the transported endpoints.
pub fn transported_length(law: &MaterialLaw, family: &[Trajectory], t: f64) -> f64 {
    let knots: Vec<Vec<f64>> = family.iter().map(|tr| tr.state_at(t)).collect();
    let refs: Vec<&[f64]> = knots.iter().map(|k| k.as_slice()).collect();
    discrete_action(law, &refs).sqrt()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::material::{catalog_default, catalog_double_well};
    use crate::state::{energy, onsager_apply};
    use approx::assert_relative_eq;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn d(c: &[f64]) -> StepDensity {
        StepDensity::new(c.to_vec()).unwrap()
    }

    #[test]
    fn field_examples() {
        let law = catalog_default();
        let f = vector_field(&law, &StepDensity::uniform(4));
        assert!(f.cells().iter().all(|v| v.abs() < 1e-15));
        let p = d(&[0.5, 1.5]);
        let xi = Covector::new(p.cells().iter().map(|&q| law.dw(q)).collect()).unwrap();
        let expected = onsager_apply(&law, &p, &xi).unwrap();
        let f = vector_field(&law, &p);
        for (a, b) in f.cells().iter().zip(expected.cells()) {
            assert_relative_eq!(*a, -b, epsilon = 1e-14);
        }
    }

    #[test]
    fn field_derivative_matches_central_difference() {
        let law = catalog_double_well().with_loading(Loading::sine(0.3, 1.0));
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..20 {
            let n = rng.gen_range(2..12);
            let p = StepDensity::normalized((0..n).map(|_| rng.gen_range(0.3..2.5)).collect()).unwrap();
            let y = TangentVector::centered((0..n).map(|_| rng.gen_range(-1.0..1.0)).collect());
            let an = field_derivative(&law, &p, &y);
            let eps = 1e-6;
            let shift = |sgn: f64| {
                let q: Vec<f64> = p.cells().iter().zip(y.cells()).map(|(a, b)| a + sgn * eps * b).collect();
                let g = law.loading_cells(n);
                let (mut k, mut xi, mut out) = (vec![0.0; n], vec![0.0; n], vec![0.0; n]);
                field_raw(&law, &q, &g, &mut k, &mut xi, &mut out);
                out
            };
            let (fp, fm) = (shift(1.0), shift(-1.0));
            let scale = an.iter().fold(0.0f64, |m, v| m.max(v.abs()));
            for i in 0..n {
                let fd = (fp[i] - fm[i]) / (2.0 * eps);
                assert!((fd - an[i]).abs() <= 1e-5 * scale, "{fd} vs {}", an[i]);
            }
        }
    }

    #[test]
    fn equilibrium_is_constant() {
        let law = catalog_default();
        let tr = solve(&law, &StepDensity::uniform(6), &FlowConfig { t_end: 2.0, ..Default::default() }).unwrap();
        assert_eq!(tr.final_state().cells(), &[1.0; 6]);
        assert_eq!(*tr.dissipation.last().unwrap(), 0.0);
        assert!(tr.diagnostics.reached_steady_state);
    }

    #[test]
    fn energy_decreases_and_balance_holds() {
        let law = catalog_default();
        let p0 = d(&[0.3, 1.9, 0.8, 1.2, 0.6, 1.4, 0.9, 0.9]);
        let tr = solve(&law, &p0, &FlowConfig { t_end: 5.0, steady_tol: 1e-10, ..Default::default() }).unwrap();
        for w in tr.energies.windows(2) {
            assert!(w[1] <= w[0] + 1e-12);
        }
        let e0 = energy(&law, &p0);
        let res = (e0 - tr.energies.last().unwrap() - tr.dissipation.last().unwrap()).abs() / (1.0 + e0.abs());
        assert!(res < 1e-6, "{res}");
        for s in &tr.states {
            assert!((mean(s.cells()) - 1.0).abs() < 1e-10);
            assert!(s.min_cell() >= tr.diagnostics.sublevel_floor * (1.0 - 1e-6));
        }
    }

    #[test]
    fn record_stride_and_semigroup() {
        let law = catalog_double_well();
        let p0 = d(&[0.4, 1.6, 1.1, 0.9]);
        let cfg = |t_end| FlowConfig { t_end, rtol: 1e-10, atol: 1e-12, steady_tol: 0.0, ..Default::default() };
        let full = solve(&law, &p0, &cfg(0.5)).unwrap();
        let half = solve(&law, &p0, &cfg(0.2)).unwrap();
        let rest = solve(&law, half.final_state(), &cfg(0.3)).unwrap();
        for (a, b) in full.final_state().cells().iter().zip(rest.final_state().cells()) {
            assert!((a - b).abs() < 1e-8);
        }
        let strided = solve(&law, &p0, &FlowConfig { record_every: Some(0.1), ..cfg(0.5) }).unwrap();
        assert_eq!(strided.times.len(), 6);
        assert!((strided.times[3] - 0.3).abs() < 1e-15);
    }

    #[test]
    fn zero_tangent_stays_zero() {
        let law = catalog_default();
        let p0 = d(&[0.5, 1.5, 1.0]);
        let tr = solve_with_tangent(
            &law,
            &p0,
            &TangentVector::zeros(3),
            &Covector::zeros(3),
            &FlowConfig { t_end: 1.0, ..Default::default() },
        )
        .unwrap();
        for y in tr.tangents.unwrap() {
            assert!(y.cells().iter().all(|v| *v == 0.0));
        }
    }

    #[test]
    fn tangent_matches_perturbed_flows() {
        let law = catalog_default();
        let p0 = d(&[0.5, 1.5, 1.2, 0.8]);
        let y0 = TangentVector::new(vec![0.3, -0.2, 0.1, -0.2]).unwrap();
        let cfg = FlowConfig { t_end: 0.3, rtol: 1e-11, atol: 1e-13, ..Default::default() };
        let tr = solve_with_tangent(&law, &p0, &y0, &Covector::zeros(4), &cfg).unwrap();
        let eps = 1e-5;
        let shifted = |sgn: f64| {
            let q: Vec<f64> = p0.cells().iter().zip(y0.cells()).map(|(a, b)| a + sgn * eps * b).collect();
            solve(&law, &d(&q), &FlowConfig { steady_tol: 0.0, ..cfg.clone() }).unwrap()
        };
        let (a, b) = (shifted(1.0), shifted(-1.0));
        let y_end = tr.tangents.as_ref().unwrap().last().unwrap();
        for i in 0..4 {
            let fd = (a.final_state().cells()[i] - b.final_state().cells()[i]) / (2.0 * eps);
            assert!((fd - y_end.cells()[i]).abs() < 1e-5, "{fd} vs {}", y_end.cells()[i]);
        }
    }

    #[test]
    fn parametrized_endpoints_and_transport() {
        use crate::metric::{bhattacharya, geodesic_distance, GeodesicOptions};
        let law = catalog_default();
        let p0 = d(&[0.5, 1.5, 1.2, 0.8]);
        let p1 = d(&[1.4, 0.6, 0.9, 1.1]);
        let geo = geodesic_distance(&law, &p0, &p1, &GeodesicOptions { extrapolate: false, ..Default::default() }).unwrap();
        let ga = Loading::sine(0.3, 1.0).cell_averages(4);
        let gb = Loading::constant(0.2).cell_averages(4);
        let cfg = FlowConfig { t_end: 0.3, steady_tol: 0.0, ..Default::default() };
        let fam = solve_parametrized(&law, &geo.path, &ga, &gb, &cfg).unwrap();
        let a = solve_with_loading(&law, &p0, &ga, &cfg).unwrap();
        let b = solve_with_loading(&law, &p1, &gb, &cfg).unwrap();
        assert_eq!(fam[0].final_state(), a.final_state());
        assert_eq!(fam.last().unwrap().final_state(), b.final_state());
        // same loading on both ends: transported length bounds the distance
        let fam = solve_parametrized(&law, &geo.path, &ga, &ga, &cfg).unwrap();
        let (qa, qb) = (fam[0].final_state(), fam.last().unwrap().final_state());
        let exact = bhattacharya(qa, qb).unwrap();
        assert!(transported_length(&law, &fam, 0.3) >= exact * (1.0 - 1e-3));
    }

    #[test]
    fn negative_cells_are_rejected() {
        assert!(StepDensity::new(vec![-0.1, 2.1]).is_err());
        let law = catalog_default();
        let b = StepDensity::boundary(vec![0.0, 2.0]).unwrap();
        assert!(matches!(solve(&law, &b, &FlowConfig::default()), Err(Error::Invariant(_))));
    }
}
