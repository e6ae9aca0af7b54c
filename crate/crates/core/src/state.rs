//! Step-function densities, tangent vectors and covectors on a uniform grid of
//! `[0, 1]`, with the energy, Onsager operator and dissipation potentials.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::material::MaterialLaw;
use crate::numerics::{bisect, log_grid_min, log_space, mean};

/// Tolerance for the unit-mass and zero-mean invariants.
pub const MASS_TOL: f64 = 1e-12;
/// Drift up to this size is silently corrected; beyond it construction fails.
pub const RENORMALIZE_LIMIT: f64 = 1e-9;

/// A density in `P_N`: `N` cell values with unit mean.
///
/// Cells are strictly positive, except for densities built with
/// [`StepDensity::boundary`], which may contain zeros and are only accepted by
/// the distance functions.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepDensity {
    cells: Vec<f64>,
}

fn check_mass(cells: &mut [f64]) -> Result<()> {
    let m = mean(cells);
    let drift = (m - 1.0).abs();
    if drift > RENORMALIZE_LIMIT {
        return Err(Error::Invariant(format!("unit mass (mean = {m})")));
    }
    // within tolerance the cells are kept bit-for-bit so stored densities reload exactly
    if drift > MASS_TOL {
        cells.iter_mut().for_each(|c| *c /= m);
    }
    Ok(())
}

impl StepDensity {
    /// Validates positivity and unit mean (renormalizing drift in `(1e-12, 1e-9]`).
    pub fn new(mut cells: Vec<f64>) -> Result<Self> {
        if cells.is_empty() {
            return Err(Error::InvalidResolution("density needs at least one cell".into()));
        }
        if let Some(c) = cells.iter().find(|c| !c.is_finite()) {
            return Err(Error::Invariant(format!("finiteness (cell value {c})")));
        }
        if let Some(c) = cells.iter().find(|c| **c <= 0.0) {
            return Err(Error::Invariant(format!("positivity (cell value {c})")));
        }
        check_mass(&mut cells)?;
        Ok(StepDensity { cells })
    }

    /// A nonnegative density, possibly with vanishing cells (a point of the
    /// metric closure of `P_N`).
    pub fn boundary(mut cells: Vec<f64>) -> Result<Self> {
        if cells.is_empty() {
            return Err(Error::InvalidResolution("density needs at least one cell".into()));
        }
        if let Some(c) = cells.iter().find(|c| !(c.is_finite() && **c >= 0.0)) {
            return Err(Error::Invariant(format!("nonnegativity (cell value {c})")));
        }
        check_mass(&mut cells)?;
        Ok(StepDensity { cells })
    }

    /// Scales positive cell values to unit mean.
    pub fn normalized(cells: Vec<f64>) -> Result<Self> {
        if cells.is_empty() {
            return Err(Error::InvalidResolution("density needs at least one cell".into()));
        }
        if let Some(c) = cells.iter().find(|c| !(c.is_finite() && **c > 0.0)) {
            return Err(Error::Invariant(format!("positivity (cell value {c})")));
        }
        let m = mean(&cells);
        Self::new(cells.into_iter().map(|c| c / m).collect())
    }

    pub fn uniform(n: usize) -> Self {
        StepDensity { cells: vec![1.0; n] }
    }

    pub fn n(&self) -> usize {
        self.cells.len()
    }

    pub fn cells(&self) -> &[f64] {
        &self.cells
    }

    pub fn into_cells(self) -> Vec<f64> {
        self.cells
    }

    pub fn min_cell(&self) -> f64 {
        self.cells.iter().cloned().fold(f64::INFINITY, f64::min)
    }

    pub fn max_cell(&self) -> f64 {
        self.cells.iter().cloned().fold(f64::NEG_INFINITY, f64::max)
    }

    /// True when some cell vanishes.
    pub fn is_boundary(&self) -> bool {
        self.cells.iter().any(|c| *c <= 0.0)
    }

    /// Embeds into `P_{mN}` by repeating each cell `m` times.
    pub fn replicate(&self, m: usize) -> StepDensity {
        assert!(m >= 1);
        StepDensity {
            cells: self.cells.iter().flat_map(|&c| std::iter::repeat_n(c, m)).collect(),
        }
    }
}

/// An element of `T_N`: cell values with zero mean.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TangentVector {
    cells: Vec<f64>,
}

impl TangentVector {
    /// Validates the zero-mean invariant, re-centering drift up to 1e-9
    /// (relative to the largest entry when that exceeds one).
    pub fn new(mut cells: Vec<f64>) -> Result<Self> {
        if let Some(c) = cells.iter().find(|c| !c.is_finite()) {
            return Err(Error::Invariant(format!("finiteness (cell value {c})")));
        }
        if cells.is_empty() {
            return Err(Error::InvalidResolution("tangent needs at least one cell".into()));
        }
        let scale = cells.iter().fold(1.0f64, |m, c| m.max(c.abs()));
        let m = mean(&cells);
        if m.abs() > RENORMALIZE_LIMIT * scale {
            return Err(Error::Invariant(format!("zero mean (mean = {m})")));
        }
        if m != 0.0 {
            cells.iter_mut().for_each(|c| *c -= m);
        }
        Ok(TangentVector { cells })
    }

    /// Subtracts the mean of arbitrary cell values.
    pub fn centered(mut cells: Vec<f64>) -> Self {
        let m = mean(&cells);
        cells.iter_mut().for_each(|c| *c -= m);
        TangentVector { cells }
    }

    pub fn zeros(n: usize) -> Self {
        TangentVector { cells: vec![0.0; n] }
    }

    pub fn n(&self) -> usize {
        self.cells.len()
    }

    pub fn cells(&self) -> &[f64] {
        &self.cells
    }

    pub fn into_cells(self) -> Vec<f64> {
        self.cells
    }
}

/// An arbitrary step function, paired with tangents through the `L²` product.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Covector {
    cells: Vec<f64>,
}

impl Covector {
    pub fn new(cells: Vec<f64>) -> Result<Self> {
        if let Some(c) = cells.iter().find(|c| !c.is_finite()) {
            return Err(Error::Invariant(format!("finiteness (cell value {c})")));
        }
        Ok(Covector { cells })
    }

    pub fn zeros(n: usize) -> Self {
        Covector { cells: vec![0.0; n] }
    }

    pub fn n(&self) -> usize {
        self.cells.len()
    }

    pub fn cells(&self) -> &[f64] {
        &self.cells
    }

    pub fn into_cells(self) -> Vec<f64> {
        self.cells
    }
}

/// The spatial mean `[f]` of a step function.
pub fn average(f: &[f64]) -> f64 {
    mean(f)
}

fn check_dim(expected: usize, got: usize) -> Result<()> {
    if expected != got {
        return Err(Error::DimensionMismatch { expected, got });
    }
    Ok(())
}

/// Projection onto `P_N` by cell averaging of a finer step function.
pub fn project(fine: &[f64], n: usize) -> Result<StepDensity> {
    if n == 0 || fine.is_empty() || !fine.len().is_multiple_of(n) {
        return Err(Error::InvalidResolution(format!(
            "cannot project {} cells onto {n} cells",
            fine.len()
        )));
    }
    let m = fine.len() / n;
    let cells = fine.chunks(m).map(mean).collect();
    StepDensity::new(cells)
}

/// `E_N(p) = [W(p) - G^N p]`.
pub fn energy(law: &MaterialLaw, p: &StepDensity) -> f64 {
    energy_with_loading(law, p.cells(), &law.loading_cells(p.n()))
}

/// Energy with precomputed loading cell averages.
pub fn energy_with_loading(law: &MaterialLaw, p: &[f64], g: &[f64]) -> f64 {
    p.iter().zip(g).map(|(&pi, &gi)| law.w(pi) - gi * pi).sum::<f64>() / p.len() as f64
}

/// `K(p) xi = k(p) (xi - [k xi]/[k])` on raw slices with precomputed `k(p)`.
pub fn onsager_apply_raw(k: &[f64], xi: &[f64], out: &mut [f64]) {
    let lam = weighted_mean(k, xi);
    for ((o, &ki), &x) in out.iter_mut().zip(k).zip(xi) {
        *o = ki * (x - lam);
    }
}

/// `[k xi] / [k]`.
pub fn weighted_mean(k: &[f64], xi: &[f64]) -> f64 {
    let num: f64 = k.iter().zip(xi).map(|(a, b)| a * b).sum();
    let den: f64 = k.iter().sum();
    num / den
}

pub fn k_cells(law: &MaterialLaw, p: &[f64]) -> Vec<f64> {
    p.iter().map(|&q| law.k(q)).collect()
}

/// The Onsager operator applied to a covector.
pub fn onsager_apply(law: &MaterialLaw, p: &StepDensity, xi: &Covector) -> Result<TangentVector> {
    check_dim(p.n(), xi.n())?;
    let k = k_cells(law, p.cells());
    let mut out = vec![0.0; p.n()];
    onsager_apply_raw(&k, xi.cells(), &mut out);
    Ok(TangentVector::centered(out))
}

/// A representative of the metric tensor applied to a tangent, `y / k(p)`.
/// Any constant shift gives the same pairing with tangents.
pub fn metric_apply(law: &MaterialLaw, p: &StepDensity, y: &TangentVector) -> Result<Covector> {
    check_dim(p.n(), y.n())?;
    Covector::new(p.cells().iter().zip(y.cells()).map(|(&q, &v)| v / law.k(q)).collect())
}

/// `R(p, y) = [y² / k(p)] / 2`.
pub fn dissipation_primal(law: &MaterialLaw, p: &StepDensity, y: &TangentVector) -> Result<f64> {
    check_dim(p.n(), y.n())?;
    Ok(dissipation_primal_raw(&k_cells(law, p.cells()), y.cells()))
}

pub fn dissipation_primal_raw(k: &[f64], y: &[f64]) -> f64 {
    0.5 * y.iter().zip(k).map(|(v, k)| v * v / k).sum::<f64>() / y.len() as f64
}

/// `R*(p, xi) = [k (xi - [k xi]/[k])²] / 2`.
pub fn dissipation_dual(law: &MaterialLaw, p: &StepDensity, xi: &Covector) -> Result<f64> {
    check_dim(p.n(), xi.n())?;
    Ok(dissipation_dual_raw(&k_cells(law, p.cells()), xi.cells()))
}

pub fn dissipation_dual_raw(k: &[f64], xi: &[f64]) -> f64 {
    let lam = weighted_mean(k, xi);
    0.5 * k.iter().zip(xi).map(|(k, x)| k * (x - lam).powi(2)).sum::<f64>() / xi.len() as f64
}

/// Lower estimate of `inf E_N`: `inf_q (W(q) - sup G q)` over the
/// certification range, valid for every `N` because cells are positive.
pub fn energy_infimum_estimate(law: &MaterialLaw) -> f64 {
    let g_sup = law.loading().sup();
    log_grid_min(|q| law.w(q) - g_sup * q, 1e-6, 1e6, 20_001).1
}

/// A lower bound `delta` for every cell of every `p` in `P_N` with
/// `E_N(p) <= level`.
///
/// A single cell satisfies `W(p_j) <= N E' - (N - 1) min(0, inf W)` with
/// `E' = max(E, E + sup G)`; the floor is the smallest `p` in `(0, 1]` where
/// `W` drops to that bound.
pub fn sublevel_density_floor(law: &MaterialLaw, n: usize, level: f64) -> Result<f64> {
    if n == 0 {
        return Err(Error::InvalidResolution("N must be positive".into()));
    }
    let inf = energy_infimum_estimate(law);
    if !(level >= inf) {
        return Err(Error::InvalidLevel(format!(
            "level {level} is below the estimated infimum {inf} of the energy"
        )));
    }
    let g_sup = law.loading().sup();
    let e_prime = level.max(level + g_sup);
    let (_, w_min) = log_grid_min(|q| law.w(q), 1e-6, 1e6, 20_001);
    let bound = n as f64 * e_prime - (n as f64 - 1.0) * w_min.min(0.0);

    let grid = log_space(1e-300, 1.0, 4000);
    let first = grid.iter().position(|&q| law.w(q) <= bound);
    match first {
        None => Err(Error::InvalidLevel(format!(
            "no cell value in (0, 1] reaches W <= {bound}; level {level} is empty"
        ))),
        Some(0) => Err(Error::InvalidLevel(format!(
            "W stays below {bound} near 0; no positive floor exists"
        ))),
        Some(i) => Ok(bisect(|q| law.w(q) - bound, grid[i - 1], grid[i], 200)),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::material::{catalog_default, Loading};
    use approx::assert_relative_eq;
    use proptest::prelude::*;

    fn d(c: &[f64]) -> StepDensity {
        StepDensity::new(c.to_vec()).unwrap()
    }

    #[test]
    fn construction_invariants() {
        assert!(StepDensity::new(vec![0.5, 1.5]).is_ok());
        assert!(matches!(StepDensity::new(vec![-0.5, 2.5]), Err(Error::Invariant(_))));
        assert!(matches!(StepDensity::new(vec![1.0, 1.5]), Err(Error::Invariant(_))));
        let p = StepDensity::new(vec![0.5, 1.5 + 1e-10]).unwrap();
        assert!((average(p.cells()) - 1.0).abs() < 1e-15);
        assert!(StepDensity::boundary(vec![0.0, 2.0]).unwrap().is_boundary());
        assert!(TangentVector::new(vec![1.0, -1.0]).is_ok());
        assert!(TangentVector::new(vec![1.0, -0.5]).is_err());
    }

    #[test]
    fn average_examples() {
        assert_eq!(average(&[3.0, 3.0, 3.0]), 3.0);
        assert_eq!(average(&[0.5, 1.5]), 1.0);
    }

    #[test]
    fn projection_of_sine_profile() {
        use std::f64::consts::PI;
        let m = 1 << 16;
        let fine: Vec<f64> = (0..m)
            .map(|i| {
                // exact cell average of the profile on each fine cell
                let (a, b) = (i as f64 / m as f64, (i + 1) as f64 / m as f64);
                1.0 - ((2.0 * PI * b).cos() - (2.0 * PI * a).cos()) / (4.0 * PI) * m as f64
            })
            .collect();
        let p = project(&fine, 4).unwrap();
        for i in 0..4 {
            let (a, b) = (i as f64 / 4.0, (i + 1) as f64 / 4.0);
            let exact = 1.0 - ((2.0 * PI * b).cos() - (2.0 * PI * a).cos()) / (4.0 * PI) * 4.0;
            assert_relative_eq!(p.cells()[i], exact, epsilon = 1e-10);
        }
        assert!(matches!(project(&fine[..10], 4), Err(Error::InvalidResolution(_))));
    }

    #[test]
    fn energy_examples() {
        let law = catalog_default();
        assert_eq!(energy(&law, &StepDensity::uniform(5)), 0.0);
        let e = energy(&law, &d(&[0.5, 1.5]));
        let expected = 0.5 * ((0.125 + 1.0) + (0.125 + 1.0 / 1.5 - 1.0));
        assert_relative_eq!(e, expected, epsilon = 1e-14);
        let shifted = law.with_loading(Loading::constant(0.7));
        assert_relative_eq!(energy(&shifted, &d(&[0.5, 1.5])), e - 0.7, epsilon = 1e-14);
    }

    #[test]
    fn onsager_and_dissipation_examples() {
        let law = catalog_default();
        let p = d(&[0.5, 1.5]);
        let y = onsager_apply(&law, &p, &Covector::new(vec![1.0, 0.0]).unwrap()).unwrap();
        assert_relative_eq!(y.cells()[0], 1.5, epsilon = 1e-14);
        assert_relative_eq!(y.cells()[1], -1.5, epsilon = 1e-14);
        let zero = onsager_apply(&law, &p, &Covector::new(vec![2.0, 2.0]).unwrap()).unwrap();
        assert!(zero.cells().iter().all(|v| v.abs() < 1e-15));
        let r = dissipation_primal(&law, &p, &TangentVector::new(vec![1.0, -1.0]).unwrap()).unwrap();
        assert_relative_eq!(r, 1.0 / 6.0, epsilon = 1e-15);
        let rs = dissipation_dual(&law, &p, &Covector::new(vec![1.0, 0.0]).unwrap()).unwrap();
        assert_relative_eq!(rs, 0.375, epsilon = 1e-15);
        assert!(matches!(
            dissipation_dual(&law, &p, &Covector::zeros(3)),
            Err(Error::DimensionMismatch { .. })
        ));
    }

    #[test]
    fn sublevel_floor_example() {
        let law = catalog_default();
        let delta = sublevel_density_floor(&law, 4, 1.0).unwrap();
        // W attains its minimum at the root of p^3 - p^2 - 1 = 0
        let q = bisect(|p| p * p * p - p * p - 1.0, 1.0, 2.0, 200);
        let w_min = law.w(q);
        assert!(w_min < 0.0);
        let bound = 4.0 - 3.0 * w_min;
        let oracle = bisect(|x| 1.0 / x - 1.0 + (x - 1.0).powi(2) / 2.0 - bound, 1e-6, 1.0, 200);
        assert_relative_eq!(delta, oracle, max_relative = 1e-10);
        let smaller = sublevel_density_floor(&law, 4, 2.0).unwrap();
        assert!(smaller <= delta);
        assert!(matches!(sublevel_density_floor(&law, 4, -5.0), Err(Error::InvalidLevel(_))));
    }

    fn density(n: usize) -> impl Strategy<Value = StepDensity> {
        prop::collection::vec(0.05f64..5.0, n).prop_map(|c| StepDensity::normalized(c).unwrap())
    }

    fn density_and_covector() -> impl Strategy<Value = (StepDensity, Vec<f64>)> {
        (2usize..=64).prop_flat_map(|n| (density(n), prop::collection::vec(-3.0f64..3.0, n)))
    }

    proptest! {
        #[test]
        fn onsager_output_has_zero_mean((p, xi) in density_and_covector()) {
            let law = catalog_default();
            let k = k_cells(&law, p.cells());
            let mut out = vec![0.0; p.n()];
            onsager_apply_raw(&k, &xi, &mut out);
            let scale = 1.0 + out.iter().fold(0.0f64, |m, v| m.max(v.abs()));
            prop_assert!(mean(&out).abs() < 1e-14 * scale);
        }

        #[test]
        fn duality_between_potentials((p, xi) in density_and_covector()) {
            let law = catalog_default();
            let xi = Covector::new(xi).unwrap();
            let y = onsager_apply(&law, &p, &xi).unwrap();
            let dual = dissipation_dual(&law, &p, &xi).unwrap();
            let primal = dissipation_primal(&law, &p, &y).unwrap();
            prop_assert!((dual - primal).abs() <= 1e-10 * dual.abs().max(1e-300));
        }

        #[test]
        fn dual_dissipation_vanishes_only_on_constants((p, xi) in density_and_covector()) {
            let law = catalog_default();
            let spread = xi.iter().cloned().fold(f64::NEG_INFINITY, f64::max)
                - xi.iter().cloned().fold(f64::INFINITY, f64::min);
            let v = dissipation_dual(&law, &p, &Covector::new(xi).unwrap()).unwrap();
            prop_assert!(v >= 0.0);
            if spread > 1e-6 {
                prop_assert!(v > 0.0);
            }
            let c = dissipation_dual(&law, &p, &Covector::new(vec![0.37; p.n()]).unwrap()).unwrap();
            prop_assert!(c.abs() < 1e-28);
        }

        #[test]
        fn project_preserves_mass_and_is_idempotent(p in (1usize..=16).prop_flat_map(|n| (density(n * 4), Just(n)))) {
            let (fine, n) = p;
            let q = project(fine.cells(), n).unwrap();
            prop_assert!((mean(q.cells()) - 1.0).abs() < 1e-12);
            let again = project(q.cells(), n).unwrap();
            for (a, b) in q.cells().iter().zip(again.cells()) {
                prop_assert!((a - b).abs() <= 1e-15 * a.abs().max(1.0));
            }
        }
    }
}
