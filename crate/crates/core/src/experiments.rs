//! Scripted studies: the two-cell counterexample curve, convergence of the
//! flow under cell refinement, and cross-resolution stability envelopes.

use std::f64::consts::FRAC_PI_2;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::analysis::{l_inf, m_lambda};
use crate::error::{Error, Result};
use crate::flow::{solve, FlowConfig, Trajectory};
use crate::material::{catalog_appendix_k, Loading, MaterialLaw};
use crate::metric::{bhattacharya, geodesic_distance, geodesic_distance_from, GeodesicOptions, GeodesicPath};
use crate::sampling::{rng_from_seed, sample_sublevel};
use crate::state::{energy_with_loading, project, StepDensity};

/// Cell values and their `s`-derivatives along the counterexample curve in
/// `P_{2M}`: two cells carry `α`, `M - 2` cells carry `2s²` and the right
/// half carries `β`, subject to `α/M + 2s²(1/2 - 1/M) + β/2 = 1`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct CurvePoint {
    pub alpha: f64,
    pub middle: f64,
    pub beta: f64,
    pub d_alpha: f64,
    pub d_middle: f64,
    pub d_beta: f64,
}

/// The switching parameter `1/√M` where `α` reaches 2.
pub fn switch_point(m: usize) -> f64 {
    1.0 / (m as f64).sqrt()
}

/// Counterexample curve at parameter `s ∈ [0, 1]`.
pub fn curve_point(m: usize, s: f64) -> CurvePoint {
    let mf = m as f64;
    let sm = switch_point(m);
    let middle = 2.0 * s * s;
    let d_middle = 4.0 * s;
    if s <= sm {
        CurvePoint {
            alpha: 2.0 * s * s * mf,
            middle,
            beta: 2.0 - 6.0 * s * s + 4.0 * s * s / mf,
            d_alpha: 4.0 * s * mf,
            d_middle,
            d_beta: -12.0 * s + 8.0 * s / mf,
        }
    } else {
        let beta_sm = 2.0 - 6.0 * sm * sm + 4.0 * sm * sm / mf;
        let scale = beta_sm / (1.0 - sm).powi(2);
        let beta = scale * (1.0 - s).powi(2);
        let d_beta = -2.0 * scale * (1.0 - s);
        CurvePoint {
            alpha: mf * (1.0 - s * s + 2.0 * s * s / mf - 0.5 * beta),
            middle,
            beta,
            d_alpha: mf * (-2.0 * s + 4.0 * s / mf - 0.5 * d_beta),
            d_middle,
            d_beta,
        }
    }
}

impl CurvePoint {
    fn mass(&self, m: usize) -> f64 {
        let mf = m as f64;
        self.alpha / mf + self.middle * (mf - 2.0) / (2.0 * mf) + self.beta / 2.0
    }

    /// Cells of the curve point in `P_{2M}`.
    pub fn cells(&self, m: usize) -> Vec<f64> {
        let mut c = Vec::with_capacity(2 * m);
        c.extend([self.alpha, self.alpha]);
        c.extend(std::iter::repeat_n(self.middle, m - 2));
        c.extend(std::iter::repeat_n(self.beta, m));
        c
    }
}

/// Graded `s`-grid with `points` nodes, split at the switch point and
/// clustered quadratically towards it from both sides.
pub fn graded_grid(m: usize, points: usize) -> Vec<f64> {
    let sm = switch_point(m);
    let left = ((points as f64 * sm).round() as usize).clamp(8, points - 8);
    let right = points - left;
    let mut s: Vec<f64> = (0..left)
        .map(|j| {
            let u = 1.0 - j as f64 / left as f64;
            sm * (1.0 - u * u)
        })
        .collect();
    s.extend((0..=right).map(|j| {
        let u = j as f64 / right as f64;
        sm + (1.0 - sm) * u * u
    }));
    s
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct CounterexampleResult {
    pub m: usize,
    pub epsilon: f64,
    /// Square root of the action of the curve.
    pub j: f64,
    pub bh_value: f64,
    pub margin: f64,
    pub grid_points: usize,
    /// Sampled curve (65 knots, endpoints included).
    pub curve: GeodesicPath,
}

/// Builds the counterexample curve for `M` and measures its action
/// `J² = ∫∫ (∂_s p)²/k(p) dx ds` for the appendix law with `ε = M^{-3/2}`.
pub fn appendix_counterexample(m: usize) -> Result<CounterexampleResult> {
    appendix_counterexample_with_grid(m, 2048)
}

pub fn appendix_counterexample_with_grid(m: usize, points: usize) -> Result<CounterexampleResult> {
    if m < 2 {
        return Err(Error::InvalidParameter(format!("M must be at least 2, got {m}")));
    }
    if points < 32 {
        return Err(Error::InvalidParameter("the s-grid needs at least 32 points".into()));
    }
    let eps = (m as f64).powf(-1.5);
    let law = catalog_appendix_k(eps)?;
    let sm = switch_point(m);
    let at_switch = curve_point(m, sm);
    if (at_switch.alpha - 2.0).abs() > 1e-10 {
        return Err(Error::ConstructionBug(format!("alpha at the switch point is {}", at_switch.alpha)));
    }
    let grid = graded_grid(m, points);
    let mf = m as f64;
    let mut action = 0.0;
    for w in grid.windows(2) {
        let s = 0.5 * (w[0] + w[1]);
        let c = curve_point(m, s);
        let drift = (c.mass(m) - 1.0).abs();
        if drift > 1e-10 {
            return Err(Error::ConstructionBug(format!("curve mass off by {drift} at s = {s}")));
        }
        let density = (2.0 * c.d_alpha.powi(2) / law.k(c.alpha)
            + (mf - 2.0) * c.d_middle.powi(2) / law.k(c.middle)
            + mf * c.d_beta.powi(2) / law.k(c.beta))
            / (2.0 * mf);
        action += density * (w[1] - w[0]);
    }
    let j = action.sqrt();
    let knots = 64;
    let s: Vec<f64> = (0..=knots).map(|i| i as f64 / knots as f64).collect();
    let curve_knots = s
        .iter()
        .map(|&si| StepDensity::boundary(curve_point(m, si).cells(m)))
        .collect::<Result<Vec<_>>>()?;
    let p0 = &curve_knots[0];
    let p1 = &curve_knots[knots];
    let bh = bhattacharya(p0, p1)?;
    Ok(CounterexampleResult {
        m,
        epsilon: eps,
        j,
        bh_value: bh,
        margin: FRAC_PI_2 - j,
        grid_points: grid.len(),
        curve: GeodesicPath { s, knots: curve_knots, action },
    })
}

/// Runs the counterexample for every `M` in parallel.
pub fn counterexample_scan(ms: &[usize], points: usize) -> Result<Vec<CounterexampleResult>> {
    ms.par_iter().map(|&m| appendix_counterexample_with_grid(m, points)).collect()
}

/// First entry of a scan whose margin exceeds `threshold`.
pub fn first_with_margin(results: &[CounterexampleResult], threshold: f64) -> Option<&CounterexampleResult> {
    results.iter().find(|r| r.margin > threshold)
}

/// Relaxes the discrete geodesic problem in `P_{2M}` starting from the
/// counterexample curve; the result is an upper bound below `J`.
pub fn counterexample_distance(result: &CounterexampleResult, opts: &GeodesicOptions) -> Result<f64> {
    let law = catalog_appendix_k(result.epsilon)?;
    let knots = &result.curve.knots;
    let last = knots.len() - 1;
    // interior knots need strictly positive cells
    let interior: Vec<StepDensity> = knots[1..last]
        .iter()
        .map(|q| StepDensity::normalized(q.cells().iter().map(|&v| v.max(opts.floor)).collect()))
        .collect::<Result<_>>()?;
    let opts = GeodesicOptions { knots: interior.len(), ..opts.clone() };
    Ok(geodesic_distance_from(&law, &knots[0], &knots[last], Some(&interior), &opts)?.distance)
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct RefinementReport {
    pub law_id: String,
    pub ladder: Vec<usize>,
    pub times: Vec<f64>,
    /// `energies[i][j]`: energy at resolution `ladder[i]`, time `times[j]`.
    pub energies: Vec<Vec<f64>>,
    /// `bh_differences[i][j]`: `Bh(p^{N_i}(t_j), p^{N_{i+1}}(t_j))`.
    pub bh_differences: Vec<Vec<f64>>,
    /// `energy_differences[i][j]`: `|E_{N_i} - E_{N_{i+1}}|` at `t_j`.
    pub energy_differences: Vec<Vec<f64>>,
    /// Whether the Bh differences decrease along the ladder at every time.
    pub monotone: bool,
}

/// Solves the flow from the projections of `p0` onto each resolution of the
/// ladder and compares successive resolutions.
pub fn refinement_convergence(
    law: &MaterialLaw,
    p0: &StepDensity,
    ladder: &[usize],
    t_grid: &[f64],
    cfg: &FlowConfig,
) -> Result<RefinementReport> {
    if ladder.is_empty() || ladder.windows(2).any(|w| w[1] <= w[0] || w[1] % w[0] != 0) {
        return Err(Error::InvalidParameter("ladder must be increasing with each entry dividing the next".into()));
    }
    if let Some(&n) = ladder.iter().find(|&&n| !p0.n().is_multiple_of(n)) {
        return Err(Error::InvalidResolution(format!("{n} does not divide the resolution {}", p0.n())));
    }
    let mut times: Vec<f64> = t_grid.to_vec();
    times.sort_by(f64::total_cmp);
    let t_end = times.last().cloned().unwrap_or(0.0);
    let flows: Vec<Option<Trajectory>> = ladder
        .par_iter()
        .map(|&n| {
            let start = project(p0.cells(), n)?;
            if t_end <= 0.0 {
                return Ok(None);
            }
            let cfg = FlowConfig { t_end, output_times: times.clone(), record_every: None, ..cfg.clone() };
            solve(law, &start, &cfg).map(Some)
        })
        .collect::<Result<_>>()?;
    let state = |i: usize, t: f64| -> Result<StepDensity> {
        match &flows[i] {
            Some(tr) if t > 0.0 => {
                let j = tr.times.iter().position(|&s| s == t).expect("recorded time");
                Ok(tr.states[j].clone())
            }
            _ => project(p0.cells(), ladder[i]),
        }
    };
    let mut energies = Vec::with_capacity(ladder.len());
    for (i, &n) in ladder.iter().enumerate() {
        let g = law.loading_cells(n);
        energies.push(
            times
                .iter()
                .map(|&t| Ok(energy_with_loading(law, state(i, t)?.cells(), &g)))
                .collect::<Result<Vec<f64>>>()?,
        );
    }
    let mut bh_differences = Vec::new();
    let mut energy_differences = Vec::new();
    for i in 0..ladder.len().saturating_sub(1) {
        let r = ladder[i + 1] / ladder[i];
        let mut bh = Vec::with_capacity(times.len());
        for &t in &times {
            bh.push(bhattacharya(&state(i, t)?.replicate(r), &state(i + 1, t)?)?);
        }
        bh_differences.push(bh);
        energy_differences.push(energies[i].iter().zip(&energies[i + 1]).map(|(a, b)| (a - b).abs()).collect());
    }
    let monotone = (0..times.len()).all(|j| bh_differences.windows(2).all(|w| w[1][j] <= w[0][j]));
    Ok(RefinementReport {
        law_id: law.id().to_string(),
        ladder: ladder.to_vec(),
        times,
        energies,
        bh_differences,
        energy_differences,
        monotone,
    })
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct EnvelopeSample {
    pub t: f64,
    pub measured: f64,
    pub envelope: f64,
    pub ratio: f64,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct EnvelopeCase {
    pub coarse: StepDensity,
    pub fine: StepDensity,
    pub samples: Vec<EnvelopeSample>,
    pub max_ratio: f64,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct GrowthEnvelopeReport {
    pub law_id: String,
    pub level: f64,
    pub rate: f64,
    pub n: usize,
    /// `‖G^N - G^{2N}‖_∞`.
    pub loading_gap: f64,
    pub cases: Vec<EnvelopeCase>,
    pub max_ratio: f64,
}

/// Cross-resolution stability: flows in `P_N` and `P_{2N}` with their own
/// loading averages stay within
/// `e^{-L t} D(0) + M_L(t) √κ̄ ‖G^N - G^{2N}‖_∞` (`L = l_inf(E + 2)`) in the
/// intrinsic distance of `P_{2N}`. The loading is scaled by `zeta_scale`.
#[allow(clippy::too_many_arguments)]
pub fn growth_envelope_study(
    law: &MaterialLaw,
    level: f64,
    zeta_scale: f64,
    t_grid: &[f64],
    n: usize,
    cases: usize,
    seed: u64,
    flow: &FlowConfig,
    geo: &GeodesicOptions,
) -> Result<GrowthEnvelopeReport> {
    let base = law.loading().clone();
    let label = format!("{zeta_scale}*{}", base.label());
    let law = law.with_loading(Loading::custom(label, move |x| zeta_scale * base.eval(x)));
    let c = law.constants()?;
    let rate = l_inf(&law, level + 2.0)?;
    let g_coarse = law.loading_cells(n);
    let g_fine = law.loading_cells(2 * n);
    let loading_gap = g_fine
        .iter()
        .enumerate()
        .map(|(i, g)| (g - g_coarse[i / 2]).abs())
        .fold(0.0, f64::max);
    let mut rng = rng_from_seed(seed);
    let coarse = sample_sublevel(&mut rng, &law, n, level, cases, 1.0)?;
    let fine = sample_sublevel(&mut rng, &law, 2 * n, level, cases, 1.0)?;
    let mut times: Vec<f64> = t_grid.to_vec();
    times.sort_by(f64::total_cmp);
    let t_end = times.last().cloned().unwrap_or(0.0);
    let cfg = FlowConfig { t_end: t_end.max(1e-12), output_times: times.clone(), record_every: None, ..flow.clone() };
    let dist = |a: &StepDensity, b: &StepDensity| -> Result<f64> {
        if a == b {
            return Ok(0.0);
        }
        Ok(geodesic_distance(&law, a, b, geo)?.distance)
    };
    let out: Vec<EnvelopeCase> = coarse
        .into_par_iter()
        .zip(fine.into_par_iter())
        .map(|(pc, pf)| {
            let tc = solve(&law, &pc, &cfg)?;
            let tf = solve(&law, &pf, &cfg)?;
            let d0 = dist(&pc.replicate(2), &pf)?;
            let mut samples = Vec::with_capacity(times.len());
            for &t in &times {
                let i = tc.times.iter().position(|&s| s == t).unwrap_or(0);
                let j = tf.times.iter().position(|&s| s == t).unwrap_or(0);
                let measured = dist(&tc.states[i].replicate(2), &tf.states[j])?;
                let envelope = (-rate * t).exp() * d0 + m_lambda(rate, t) * c.kappa_hi.sqrt() * loading_gap;
                let ratio = if envelope > 0.0 { measured / envelope } else { 0.0 };
                samples.push(EnvelopeSample { t, measured, envelope, ratio });
            }
            let max_ratio = samples.iter().map(|s| s.ratio).fold(0.0, f64::max);
            Ok(EnvelopeCase { coarse: pc, fine: pf, samples, max_ratio })
        })
        .collect::<Result<_>>()?;
    let max_ratio = out.iter().map(|c| c.max_ratio).fold(0.0, f64::max);
    Ok(GrowthEnvelopeReport {
        law_id: law.id().to_string(),
        level,
        rate,
        n,
        loading_gap,
        cases: out,
        max_ratio,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::material::catalog_default;

    #[test]
    fn curve_endpoints_and_continuity() {
        for m in [4, 16, 64] {
            let a = curve_point(m, 0.0);
            assert_eq!((a.alpha, a.middle, a.beta), (0.0, 0.0, 2.0));
            let b = curve_point(m, 1.0);
            assert!((b.alpha - 2.0).abs() < 1e-12 && b.beta == 0.0 && b.middle == 2.0);
            let sm = switch_point(m);
            let (l, r) = (curve_point(m, sm), curve_point(m, sm + 1e-13));
            assert!((l.alpha - 2.0).abs() < 1e-10);
            assert!((l.alpha - r.alpha).abs() < 1e-9 && (l.beta - r.beta).abs() < 1e-9);
            for i in 1..200 {
                let s = i as f64 / 200.0;
                let c = curve_point(m, s);
                assert!((c.mass(m) - 1.0).abs() < 1e-12);
                if s > sm {
                    assert!(c.alpha > 2.0);
                }
            }
        }
    }

    #[test]
    fn curve_derivatives_match_differences() {
        let m = 16;
        for &s in &[0.1, 0.2, 0.6, 0.9] {
            let h = 1e-6;
            let (a, b, c) = (curve_point(m, s - h), curve_point(m, s + h), curve_point(m, s));
            assert!(((b.alpha - a.alpha) / (2.0 * h) - c.d_alpha).abs() < 1e-5);
            assert!(((b.beta - a.beta) / (2.0 * h) - c.d_beta).abs() < 1e-6);
        }
    }

    #[test]
    fn counterexample_beats_bhattacharya() {
        let r = appendix_counterexample(256).unwrap();
        assert!((r.bh_value - FRAC_PI_2).abs() < 1e-12);
        assert!(r.margin > 0.01, "J = {}", r.j);
        assert!(r.curve.knots.iter().all(|q| (q.cells().iter().sum::<f64>() / 512.0 - 1.0).abs() < 1e-12));
    }

    #[test]
    fn j_converges_under_grid_refinement() {
        let js: Vec<f64> = [256, 512, 1024, 2048]
            .iter()
            .map(|&pts| appendix_counterexample_with_grid(64, pts).unwrap().j)
            .collect();
        let steps: Vec<f64> = js.windows(2).map(|w| (w[1] - w[0]).abs()).collect();
        assert!(steps.windows(2).all(|w| w[1] < w[0]), "{js:?}");
        assert!(steps[2] < 1e-5);
    }

    #[test]
    fn ladder_at_time_zero() {
        let law = catalog_default();
        let p0 = StepDensity::new(vec![0.5, 1.5, 1.2, 0.8]).unwrap().replicate(4);
        let rep = refinement_convergence(&law, &p0, &[4, 8, 16], &[0.0, 0.2], &FlowConfig::default()).unwrap();
        for d in &rep.bh_differences {
            assert!(d[0].abs() < 1e-7);
            assert!(d[1].abs() < 1e-6);
        }
        assert!(refinement_convergence(&law, &p0, &[3, 6], &[0.1], &FlowConfig::default()).is_err());
    }
}
