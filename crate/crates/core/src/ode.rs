//! Dormand–Prince 5(4) integrator with dense output and step hooks.
//!
//! The driver is generic over a right-hand side and a [`StepHook`] that can
//! reject candidate states (positivity guards), adjust accepted states
//! (mass re-centering) and stop the integration early (steady states).

use crate::error::{Error, Result};

const C2: f64 = 1.0 / 5.0;
const C3: f64 = 3.0 / 10.0;
const C4: f64 = 4.0 / 5.0;
const C5: f64 = 8.0 / 9.0;
const A21: f64 = 1.0 / 5.0;
const A31: f64 = 3.0 / 40.0;
const A32: f64 = 9.0 / 40.0;
const A41: f64 = 44.0 / 45.0;
const A42: f64 = -56.0 / 15.0;
const A43: f64 = 32.0 / 9.0;
const A51: f64 = 19372.0 / 6561.0;
const A52: f64 = -25360.0 / 2187.0;
const A53: f64 = 64448.0 / 6561.0;
const A54: f64 = -212.0 / 729.0;
const A61: f64 = 9017.0 / 3168.0;
const A62: f64 = -355.0 / 33.0;
const A63: f64 = 46732.0 / 5247.0;
const A64: f64 = 49.0 / 176.0;
const A65: f64 = -5103.0 / 18656.0;
const A71: f64 = 35.0 / 384.0;
const A73: f64 = 500.0 / 1113.0;
const A74: f64 = 125.0 / 192.0;
const A75: f64 = -2187.0 / 6784.0;
const A76: f64 = 11.0 / 84.0;
const E1: f64 = 71.0 / 57600.0;
const E3: f64 = -71.0 / 16695.0;
const E4: f64 = 71.0 / 1920.0;
const E5: f64 = -17253.0 / 339200.0;
const E6: f64 = 22.0 / 525.0;
const E7: f64 = -1.0 / 40.0;
const D1: f64 = -12715105075.0 / 11282082432.0;
const D3: f64 = 87487479700.0 / 32700410799.0;
const D4: f64 = -10690763975.0 / 1880347072.0;
const D5: f64 = 701980252875.0 / 199316789632.0;
const D6: f64 = -1453857185.0 / 822651844.0;
const D7: f64 = 69997945.0 / 29380423.0;

/// Integrator tolerances and step limits.
#[derive(Clone, Debug)]
pub struct OdeOptions {
    pub rtol: f64,
    pub atol: f64,
    pub max_step: f64,
    pub initial_step: Option<f64>,
    pub max_steps: usize,
}

impl Default for OdeOptions {
    fn default() -> Self {
        OdeOptions {
            rtol: 1e-8,
            atol: 1e-10,
            max_step: f64::INFINITY,
            initial_step: None,
            max_steps: 2_000_000,
        }
    }
}

/// Continuous extension of one accepted step (fourth order in time).
#[derive(Clone, Debug)]
pub struct DenseSegment {
    pub t0: f64,
    pub h: f64,
    coeffs: [Vec<f64>; 5],
}

impl DenseSegment {
    pub fn t1(&self) -> f64 {
        self.t0 + self.h
    }

    pub fn dim(&self) -> usize {
        self.coeffs[0].len()
    }

    pub fn eval_into(&self, t: f64, out: &mut [f64]) {
        let th = ((t - self.t0) / self.h).clamp(0.0, 1.0);
        let th1 = 1.0 - th;
        let [r1, r2, r3, r4, r5] = &self.coeffs;
        for i in 0..out.len() {
            out[i] = r1[i] + th * (r2[i] + th1 * (r3[i] + th * (r4[i] + th1 * r5[i])));
        }
    }

    pub fn eval(&self, t: f64) -> Vec<f64> {
        let mut out = vec![0.0; self.dim()];
        self.eval_into(t, &mut out);
        out
    }

    /// State at the end of the step.
    pub fn end(&self) -> Vec<f64> {
        self.coeffs[0].iter().zip(&self.coeffs[1]).map(|(a, b)| a + b).collect()
    }
}

/// What the hook asks the driver to do after an accepted step.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Control {
    Continue,
    /// The hook modified the state; the first stage must be recomputed.
    ContinueModified,
    Stop,
}

pub trait StepHook {
    /// Returns false to reject a candidate state; the step is then halved.
    fn admissible(&mut self, _t: f64, _y: &[f64]) -> bool {
        true
    }

    /// Called with the accepted step's dense segment and the new state.
    fn accepted(&mut self, _segment: &DenseSegment, _t: f64, _y: &mut [f64]) -> Result<Control> {
        Ok(Control::Continue)
    }
}

/// A hook that accepts everything.
pub struct NoHook;
impl StepHook for NoHook {}

/// Counters reported by [`integrate`].
#[derive(Clone, Debug, Default, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct OdeStats {
    pub accepted: usize,
    pub rejected_error: usize,
    pub rejected_hook: usize,
    pub evaluations: usize,
    pub t_final: f64,
    pub stopped_early: bool,
}

fn error_norm(y0: &[f64], y1: &[f64], err: &[f64], rtol: f64, atol: f64) -> f64 {
    let n = y0.len();
    let s: f64 = (0..n)
        .map(|i| {
            let sc = atol + rtol * y0[i].abs().max(y1[i].abs());
            (err[i] / sc).powi(2)
        })
        .sum();
    (s / n as f64).sqrt()
}

fn initial_step<F>(f: &mut F, t: f64, y: &[f64], k1: &[f64], opts: &OdeOptions, span: f64) -> f64
where
    F: FnMut(f64, &[f64], &mut [f64]),
{
    let n = y.len();
    let sc: Vec<f64> = y.iter().map(|v| opts.atol + opts.rtol * v.abs()).collect();
    let d0 = (y.iter().zip(&sc).map(|(v, s)| (v / s).powi(2)).sum::<f64>() / n as f64).sqrt();
    let d1 = (k1.iter().zip(&sc).map(|(v, s)| (v / s).powi(2)).sum::<f64>() / n as f64).sqrt();
    let mut h0 = if d0 < 1e-5 || d1 < 1e-5 { 1e-6 } else { 0.01 * d0 / d1 };
    h0 = h0.min(span).min(opts.max_step);
    let y1: Vec<f64> = y.iter().zip(k1).map(|(v, k)| v + h0 * k).collect();
    let mut k2 = vec![0.0; n];
    f(t + h0, &y1, &mut k2);
    let d2 = (k2
        .iter()
        .zip(k1)
        .zip(&sc)
        .map(|((a, b), s)| ((a - b) / s).powi(2))
        .sum::<f64>()
        / n as f64)
        .sqrt()
        / h0;
    let h1 = if !d2.is_finite() {
        h0
    } else if d1.max(d2) <= 1e-15 {
        (h0 * 1e-3).max(1e-6)
    } else {
        (0.01 / d1.max(d2)).powf(0.2)
    };
    (100.0 * h0).min(h1).min(span).min(opts.max_step)
}

/// Integrates `y' = f(t, y)` from `t0` to `t_end`.
///
/// `stops` are times (inside `(t0, t_end]`) that accepted steps land on
/// exactly. Returns the final state and counters.
pub fn integrate<F, H>(
    mut f: F,
    t0: f64,
    y0: &[f64],
    t_end: f64,
    stops: &[f64],
    opts: &OdeOptions,
    hook: &mut H,
) -> Result<(Vec<f64>, OdeStats)>
where
    F: FnMut(f64, &[f64], &mut [f64]),
    H: StepHook,
{
    let n = y0.len();
    let mut stats = OdeStats::default();
    let mut t = t0;
    let mut y = y0.to_vec();
    if t_end <= t0 {
        stats.t_final = t0;
        return Ok((y, stats));
    }
    let mut stops: Vec<f64> = stops.iter().cloned().filter(|&s| s > t0 && s < t_end).collect();
    stops.push(t_end);
    stops.sort_by(f64::total_cmp);
    stops.dedup();
    let mut next_stop = 0usize;

    let mut k = vec![vec![0.0; n]; 7];
    f(t, &y, &mut k[0]);
    stats.evaluations += 1;
    if k[0].iter().any(|v| !v.is_finite()) {
        return Err(Error::IntegrityFailure {
            t,
            detail: "non-finite right-hand side at the initial state".into(),
        });
    }
    let mut h = match opts.initial_step {
        Some(h) => h,
        None => initial_step(&mut f, t, &y, &k[0], opts, t_end - t0),
    };
    let mut ytmp = vec![0.0; n];
    let mut ynew = vec![0.0; n];
    let mut err = vec![0.0; n];
    let mut rejected_last = false;

    while t < t_end {
        if stats.accepted + stats.rejected_error + stats.rejected_hook >= opts.max_steps {
            return Err(Error::StiffnessFailure { t, h });
        }
        let h_min = 1e-13 * t.abs().max(1.0);
        if h < h_min {
            return Err(Error::StiffnessFailure { t, h });
        }
        h = h.min(opts.max_step);
        let target = stops[next_stop];
        let mut landing = false;
        if t + h >= target || target - (t + h) < 1e-12 * target.abs().max(1.0) {
            h = target - t;
            landing = true;
        }

        let stages: [(f64, &[f64]); 5] = [
            (C2, &[A21]),
            (C3, &[A31, A32]),
            (C4, &[A41, A42, A43]),
            (C5, &[A51, A52, A53, A54]),
            (1.0, &[A61, A62, A63, A64, A65]),
        ];
        for (s, (c, a)) in stages.iter().enumerate() {
            for i in 0..n {
                let mut acc = 0.0;
                for (j, aj) in a.iter().enumerate() {
                    acc += aj * k[j][i];
                }
                ytmp[i] = y[i] + h * acc;
            }
            let (head, tail) = k.split_at_mut(s + 1);
            let _ = head;
            f(t + c * h, &ytmp, &mut tail[0]);
        }
        for i in 0..n {
            ynew[i] = y[i] + h * (A71 * k[0][i] + A73 * k[2][i] + A74 * k[3][i] + A75 * k[4][i] + A76 * k[5][i]);
        }
        let (head, tail) = k.split_at_mut(6);
        let _ = head;
        f(t + h, &ynew, &mut tail[0]);
        stats.evaluations += 6;
        for i in 0..n {
            err[i] = h
                * (E1 * k[0][i] + E3 * k[2][i] + E4 * k[3][i] + E5 * k[4][i] + E6 * k[5][i] + E7 * k[6][i]);
        }
        let finite = ynew.iter().all(|v| v.is_finite()) && k.iter().flatten().all(|v| v.is_finite());
        let en = if finite { error_norm(&y, &ynew, &err, opts.rtol, opts.atol) } else { f64::INFINITY };

        if !en.is_finite() || !hook.admissible(t + h, &ynew) {
            stats.rejected_hook += 1;
            h *= 0.5;
            rejected_last = true;
            continue;
        }
        if en > 1.0 {
            stats.rejected_error += 1;
            let fac = (0.9 * en.powf(-0.2)).max(0.2);
            h *= fac;
            rejected_last = true;
            continue;
        }

        // accepted: build the dense segment
        let mut coeffs: [Vec<f64>; 5] = Default::default();
        coeffs[0] = y.clone();
        coeffs[1] = ynew.iter().zip(&y).map(|(a, b)| a - b).collect();
        coeffs[2] = (0..n).map(|i| h * k[0][i] - coeffs[1][i]).collect();
        coeffs[3] = (0..n).map(|i| coeffs[1][i] - h * k[6][i] - coeffs[2][i]).collect();
        coeffs[4] = (0..n)
            .map(|i| {
                h * (D1 * k[0][i] + D3 * k[2][i] + D4 * k[3][i] + D5 * k[4][i] + D6 * k[5][i] + D7 * k[6][i])
            })
            .collect();
        let seg = DenseSegment { t0: t, h, coeffs };
        t = if landing { target } else { t + h };
        if landing {
            next_stop += 1;
        }
        y.copy_from_slice(&ynew);
        let last = k.pop().expect("seven stages");
        k.insert(0, last);
        stats.accepted += 1;

        let control = hook.accepted(&seg, t, &mut y)?;
        match control {
            Control::Continue => {}
            Control::ContinueModified => {
                f(t, &y, &mut k[0]);
                stats.evaluations += 1;
            }
            Control::Stop => {
                stats.stopped_early = true;
                break;
            }
        }

        let mut fac = if en == 0.0 { 5.0 } else { (0.9 * en.powf(-0.2)).clamp(0.2, 5.0) };
        if rejected_last {
            fac = fac.min(1.0);
        }
        rejected_last = false;
        let h_prev = seg.h;
        h = if landing { h_prev.max(h) * fac } else { h * fac };
    }
    stats.t_final = t;
    Ok((y, stats))
}

/// A hook that keeps every dense segment, for reconstruction after the solve.
#[derive(Default)]
pub struct Recorder {
    pub segments: Vec<DenseSegment>,
}

impl StepHook for Recorder {
    fn accepted(&mut self, segment: &DenseSegment, _t: f64, _y: &mut [f64]) -> Result<Control> {
        self.segments.push(segment.clone());
        Ok(Control::Continue)
    }
}

/// Evaluates a piecewise dense solution at `t` (clamped to its range).
pub fn eval_segments(segments: &[DenseSegment], t: f64) -> Option<Vec<f64>> {
    if segments.is_empty() {
        return None;
    }
    let idx = segments.partition_point(|s| s.t1() < t).min(segments.len() - 1);
    Some(segments[idx].eval(t))
}
