//! Locality measurements: log-linear decay fits, Combes-Thomas bound checks,
//! low-rank resolvent updates, and defect-versus-reference comparisons.
//!
//! The theorems being probed are qualitative (generic constants, exponential
//! rates), so everything here reduces statements to fitted exponents,
//! goodness-of-fit and monotone trends over controlled pair windows.

use nalgebra::{ComplexField, DMatrix, DVector, Dyn};
use num_complex::Complex64;

use crate::error::{Error, Result};
use crate::lattice::{Configuration, Displacement};
use crate::model::Hamiltonian;
use crate::response::Responder;
use crate::spectral::{diagonalize, full_resolvent, Observable};

/// Least-squares fit of log|value| against distance.
#[derive(Debug, Clone, serde::Serialize)]
pub struct DecayFit {
    pub log_prefactor: f64,
    /// Fitted decay exponent (positive means decay).
    pub eta_hat: f64,
    pub r_squared: f64,
    pub window: (f64, f64),
    pub n_samples: usize,
}

/// Options controlling which (distance, value) samples enter a fit.
#[derive(Debug, Clone, Copy)]
pub struct FitOptions {
    pub r_min: f64,
    pub r_max: f64,
    /// Values at or below this magnitude are treated as numerically zero.
    pub floor: f64,
}

impl Default for FitOptions {
    fn default() -> Self {
        Self {
            r_min: 0.0,
            r_max: f64::INFINITY,
            floor: 1e-14,
        }
    }
}

/// Fit log|value| = log C - eta * r by least squares over the window.
pub fn fit_decay(samples: &[(f64, f64)], opts: &FitOptions) -> Result<DecayFit> {
    let pts: Vec<(f64, f64)> = samples
        .iter()
        .filter(|(r, v)| *r >= opts.r_min && *r <= opts.r_max && v.abs() > opts.floor)
        .map(|(r, v)| (*r, v.abs().ln()))
        .collect();
    if pts.len() < 5 {
        return Err(Error::Fit(format!(
            "only {} usable samples in the window; need at least 5",
            pts.len()
        )));
    }
    let r_lo = pts.iter().map(|p| p.0).fold(f64::INFINITY, f64::min);
    let r_hi = pts.iter().map(|p| p.0).fold(0.0f64, f64::max);
    if r_lo > 0.0 && r_hi / r_lo < 3.0 {
        return Err(Error::Fit(format!(
            "distance span {r_lo:.3}..{r_hi:.3} too narrow for a decay fit"
        )));
    }

    let n = pts.len() as f64;
    let sx: f64 = pts.iter().map(|p| p.0).sum();
    let sy: f64 = pts.iter().map(|p| p.1).sum();
    let sxx: f64 = pts.iter().map(|p| p.0 * p.0).sum();
    let sxy: f64 = pts.iter().map(|p| p.0 * p.1).sum();
    let denom = n * sxx - sx * sx;
    if denom.abs() < 1e-300 {
        return Err(Error::Fit("degenerate distance distribution".into()));
    }
    let slope = (n * sxy - sx * sy) / denom;
    let intercept = (sy - slope * sx) / n;

    let mean_y = sy / n;
    let mut ss_res = 0.0;
    let mut ss_tot = 0.0;
    for (x, y) in &pts {
        let pred = intercept + slope * x;
        ss_res += (y - pred) * (y - pred);
        ss_tot += (y - mean_y) * (y - mean_y);
    }
    // constant data: the horizontal line is a perfect fit
    let degenerate = ss_tot <= 1e-20 * n * (1.0 + mean_y * mean_y);
    let r_squared = if degenerate {
        1.0
    } else {
        (1.0 - ss_res / ss_tot).clamp(0.0, 1.0)
    };

    Ok(DecayFit {
        log_prefactor: intercept,
        eta_hat: -slope,
        r_squared,
        window: (r_lo, r_hi),
        n_samples: pts.len(),
    })
}

/// Median nearest-neighbour distance; sets the pre-asymptotic window edge.
pub fn median_nn_distance(cfg: &Configuration, u: &Displacement) -> f64 {
    let n = cfg.n_sites();
    let mut nns: Vec<f64> = (0..n)
        .map(|l| {
            (0..n)
                .filter(|&k| k != l)
                .map(|k| cfg.displaced_pair_distance(l, k, u))
                .fold(f64::INFINITY, f64::min)
        })
        .collect();
    nns.sort_by(f64::total_cmp);
    nns[nns.len() / 2]
}

/// Largest pairwise distance (minimum image if periodic).
pub fn max_pair_distance(cfg: &Configuration, u: &Displacement) -> f64 {
    let n = cfg.n_sites();
    let mut d = 0.0f64;
    for l in 0..n {
        for k in 0..l {
            d = d.max(cfg.displaced_pair_distance(l, k, u));
        }
    }
    d
}

/// Default fit window: drop r < 2 * nn spacing (pre-asymptotic) and keep only
/// the first third of the distance range (boundary / wrap contamination).
pub fn default_fit_window(cfg: &Configuration, u: &Displacement) -> FitOptions {
    FitOptions {
        r_min: 2.0 * median_nn_distance(cfg, u),
        r_max: max_pair_distance(cfg, u) / 3.0,
        floor: 1e-14,
    }
}

/// One off-diagonal resolvent sample.
#[derive(Debug, Clone, serde::Serialize)]
pub struct CtPair {
    pub l: usize,
    pub k: usize,
    pub r: f64,
    pub value: f64,
    pub bound: f64,
}

/// Combes-Thomas check report: fitted resolvent decay rate plus violation
/// counts of the 2/d * exp(-gamma r) bound at the half-rate safety margin.
#[derive(Debug, Clone, serde::Serialize)]
pub struct CtReport {
    pub d: f64,
    pub pairs: Vec<CtPair>,
    pub fit: Option<DecayFit>,
    pub violations: usize,
}

/// Evaluate the full resolvent at z and test exponential off-diagonal decay.
pub fn ct_check(
    cfg: &Configuration,
    u: &Displacement,
    h: &Hamiltonian,
    z: Complex64,
    d_predicted: f64,
) -> Result<CtReport> {
    let cache = diagonalize(h)?;
    let dist = cache
        .eigenvalues
        .iter()
        .fold(f64::INFINITY, |d, &l| d.min((z - l).norm()));
    if dist < d_predicted * (1.0 - 1e-9) {
        return Err(Error::NearSingular { z, dist });
    }
    let r = full_resolvent(h, z)?;
    let no = h.n_orbitals;
    let n = h.n_sites;

    let mut samples = Vec::new();
    let mut pairs = Vec::new();
    for l in 0..n {
        for k in 0..n {
            if l == k {
                continue;
            }
            let mut v = 0.0f64;
            for a in 0..no {
                for b in 0..no {
                    v = v.max(r[(l * no + a, k * no + b)].norm());
                }
            }
            let rd = cfg.displaced_pair_distance(l, k, u);
            samples.push((rd, v));
            pairs.push(CtPair {
                l,
                k,
                r: rd,
                value: v,
                bound: 0.0,
            });
        }
    }

    let fit = fit_decay(&samples, &FitOptions::default()).ok();
    let mut violations = 0;
    if let Some(f) = &fit {
        let gamma_safe = 0.5 * f.eta_hat.max(0.0);
        for p in &mut pairs {
            p.bound = 2.0 / d_predicted * (-gamma_safe * p.r).exp();
            if p.value > p.bound {
                violations += 1;
            }
        }
    }

    Ok(CtReport {
        d: d_predicted,
        pairs,
        fit,
        violations,
    })
}

/// A finite-rank update P = U V^T.
#[derive(Debug, Clone)]
pub struct LowRankUpdate<T: ComplexField> {
    pub u: DMatrix<T>,
    pub v: DMatrix<T>,
}

impl<T: ComplexField> LowRankUpdate<T> {
    pub fn new(u: DMatrix<T>, v: DMatrix<T>) -> Result<Self> {
        if u.nrows() != v.nrows() || u.ncols() != v.ncols() {
            return Err(Error::InvalidArgument(
                "low-rank factors must have matching shapes".into(),
            ));
        }
        Ok(Self { u, v })
    }

    pub fn rank(&self) -> usize {
        self.u.ncols()
    }

    pub fn to_dense(&self) -> DMatrix<T> {
        &self.u * self.v.transpose()
    }
}

/// Action of (A + U V^T)^{-1} assembled from the factorisation of A and a
/// rank-sized capacitance solve.
pub struct UpdatedInverse<T: ComplexField> {
    base: nalgebra::linalg::LU<T, Dyn, Dyn>,
    a_inv_u: DMatrix<T>,
    capacitance: nalgebra::linalg::LU<T, Dyn, Dyn>,
    v: DMatrix<T>,
}

/// Build the updated inverse action (A + P)^{-1} from A's LU factorisation.
pub fn woodbury_resolvent<T: ComplexField>(
    base: nalgebra::linalg::LU<T, Dyn, Dyn>,
    update: &LowRankUpdate<T>,
) -> Result<UpdatedInverse<T>> {
    let r = update.rank();
    let a_inv_u = if r == 0 {
        DMatrix::zeros(update.u.nrows(), 0)
    } else {
        base.solve(&update.u)
            .ok_or_else(|| Error::Update("base operator is singular".into()))?
    };
    let capacitance_matrix = DMatrix::identity(r, r) + update.v.transpose() * &a_inv_u;
    let capacitance = capacitance_matrix.lu();
    if r > 0 {
        // reject numerically singular capacitance
        let probe = capacitance.solve(&DMatrix::<T>::identity(r, r));
        if probe.is_none() {
            return Err(Error::Update("I + V^T A^{-1} U is singular".into()));
        }
    }
    Ok(UpdatedInverse {
        base,
        a_inv_u,
        capacitance,
        v: update.v.clone(),
    })
}

impl<T: ComplexField> UpdatedInverse<T> {
    /// x = (A + U V^T)^{-1} rhs
    pub fn apply(&self, rhs: &DVector<T>) -> Result<DVector<T>> {
        let base_solve = self
            .base
            .solve(rhs)
            .ok_or_else(|| Error::Update("base solve failed".into()))?;
        if self.v.ncols() == 0 {
            return Ok(base_solve);
        }
        let small = self.v.transpose() * &base_solve;
        let correction = self
            .capacitance
            .solve(&small)
            .ok_or_else(|| Error::Update("capacitance solve failed".into()))?;
        Ok(&base_solve - &self.a_inv_u * correction)
    }
}

/// Raw locality table: |d^j O_l / du(m)^j| against pair distance.
#[derive(Debug, Clone, serde::Serialize)]
pub struct LocalityRow {
    pub l: usize,
    pub m: usize,
    pub r: f64,
    pub value: f64,
}

#[derive(Debug, Clone, serde::Serialize)]
pub struct LocalityExperiment {
    pub order: usize,
    pub fit: DecayFit,
    pub rows: Vec<LocalityRow>,
}

/// Measure the decay of first (j=1) or diagonal second (j=2, m = n probes)
/// derivatives of self-consistent site observables, fitted over the default
/// window. For j=2 the distance coordinate is 2 r_lm, matching the summed
/// pair distances in the locality statement.
pub fn locality_experiment(
    responder: &Responder,
    obs: &Observable,
    order: usize,
    opts: Option<FitOptions>,
) -> Result<LocalityExperiment> {
    if !(1..=2).contains(&order) {
        return Err(Error::InvalidArgument(format!(
            "derivative order {order} not supported (1 or 2)"
        )));
    }
    let state = &responder.state;
    let cfg = &state.system.config;
    let u = &state.u;
    let n = cfg.n_sites();
    let dim = cfg.dim;
    let channel = responder.channel(obs)?;

    let mut rows = Vec::new();
    let mut samples = Vec::new();
    for m in 0..n {
        for i in 0..dim {
            let values = match order {
                1 => channel.site_gradient_all(m, i)?,
                _ => channel.site_hessian_all(m, i, m, i)?,
            };
            for l in 0..n {
                if l == m {
                    continue;
                }
                let r = cfg.displaced_pair_distance(l, m, u);
                let coord = if order == 2 { 2.0 * r } else { r };
                let value = values[l].abs();
                rows.push(LocalityRow {
                    l,
                    m,
                    r: coord,
                    value,
                });
                samples.push((coord, value));
            }
        }
    }

    let mut fit_opts = opts.unwrap_or_else(|| default_fit_window(cfg, u));
    if order == 2 {
        fit_opts.r_min *= 2.0;
        fit_opts.r_max *= 2.0;
    }
    let fit = fit_decay(&samples, &fit_opts)?;
    Ok(LocalityExperiment { order, fit, rows })
}

/// Pair-constant bin for the defect comparison.
#[derive(Debug, Clone, serde::Serialize)]
pub struct DefectBin {
    pub dist_lo: f64,
    pub dist_hi: f64,
    pub mean_log_constant: f64,
    pub n_pairs: usize,
}

#[derive(Debug, Clone, serde::Serialize)]
pub struct DefectComparison {
    /// Isolated eigenvalues strictly inside the reference gap.
    pub in_gap_count: usize,
    pub in_gap_eigenvalues: Vec<f64>,
    pub reference_gap: (f64, f64),
    /// l2 norm of the density deviation on common sites.
    pub rho_deviation_l2: f64,
    /// Decay fit of per-site |rho - rho_ref| against distance to the defect.
    pub rho_deviation_fit: Option<DecayFit>,
    /// Gradient decay fit on the reference system.
    pub reference_fit: DecayFit,
    /// Reference mean log pair-constant (log C at the fitted rate).
    pub reference_log_constant: f64,
    /// Defect-system pair constants binned by distance to the defect.
    pub bins: Vec<DefectBin>,
}

#[derive(Debug, Clone, Copy)]
pub struct DefectComparisonOptions {
    pub bin_width: f64,
    /// Margin (fraction of the gap) inside which band-edge states are not
    /// counted as in-gap.
    pub edge_margin: f64,
}

impl Default for DefectComparisonOptions {
    fn default() -> Self {
        Self {
            bin_width: 3.0,
            edge_margin: 0.02,
        }
    }
}

/// Map each defect-system site onto the reference site at the same position.
/// Unmatched sites must lie inside the defect ball.
fn match_sites(def: &Configuration, reference: &Configuration) -> Result<Vec<Option<usize>>> {
    let r_def = def.defect_radius.unwrap_or(0.0);
    let center = def
        .defect_center
        .clone()
        .unwrap_or_else(|| DVector::zeros(def.dim));
    let mut map = Vec::with_capacity(def.n_sites());
    for l in 0..def.n_sites() {
        let pos = &def.sites[l];
        let hit = reference
            .sites
            .iter()
            .position(|p| (p - pos).norm() < 1e-9);
        if hit.is_none() && (pos - &center).norm() > r_def + 1e-9 {
            return Err(Error::Geometry(format!(
                "defect site {l} at {pos:?} has no reference partner outside the defect ball"
            )));
        }
        map.push(hit);
    }
    Ok(map)
}

/// Compare locality constants, spectra and densities of a defect system
/// against its defect-free reference.
pub fn defect_comparison(
    def_responder: &Responder,
    ref_responder: &Responder,
    obs: &Observable,
    opts: &DefectComparisonOptions,
) -> Result<DefectComparison> {
    let def_state = &def_responder.state;
    let ref_state = &ref_responder.state;
    let def_cfg = &def_state.system.config;
    let ref_cfg = &ref_state.system.config;
    let site_map = match_sites(def_cfg, ref_cfg)?;

    // reference band edges around mu
    let mu = ref_state.system.mu;
    let (below, above) = ref_state.spectral.straddle(mu);
    let (edge_lo, edge_hi) = match (below, above) {
        (Some(b), Some(a)) => (b, a),
        _ => {
            return Err(Error::InvalidArgument(
                "reference spectrum does not straddle mu; no gap to probe".into(),
            ))
        }
    };
    let gap = edge_hi - edge_lo;
    let margin = opts.edge_margin * gap;
    let in_gap_eigenvalues: Vec<f64> = def_state
        .spectral
        .eigenvalues
        .iter()
        .copied()
        .filter(|&l| l > edge_lo + margin && l < edge_hi - margin)
        .collect();

    // density deviation on common sites, against distance to the defect
    let mut dev_sq = 0.0;
    let mut dev_samples = Vec::new();
    for (l, mapped) in site_map.iter().enumerate() {
        if let Some(k) = mapped {
            let d = (def_state.density.rho[l] - ref_state.density.rho[*k]).abs();
            dev_sq += d * d;
            if let Some(dist) = def_cfg.distance_to_defect(l) {
                dev_samples.push((dist, d));
            }
        }
    }
    let dev_window = {
        let mut w = default_fit_window(def_cfg, &def_state.u);
        // site samples run against defect distance, which spans half the
        // pair-distance range
        w.r_max = max_pair_distance(def_cfg, &def_state.u) / 2.5;
        w
    };
    let rho_deviation_fit = fit_decay(&dev_samples, &dev_window).ok();

    // reference decay fit
    let ref_exp = locality_experiment(ref_responder, obs, 1, None)?;
    let eta_ref = ref_exp.fit.eta_hat;
    let window = default_fit_window(ref_cfg, &ref_state.u);
    let mut ref_logc = Vec::new();
    for row in &ref_exp.rows {
        if row.r >= window.r_min && row.r <= window.r_max && row.value > window.floor {
            ref_logc.push(row.value.ln() + eta_ref * row.r);
        }
    }
    if ref_logc.is_empty() {
        return Err(Error::Fit("no reference pairs in the window".into()));
    }
    let reference_log_constant = ref_logc.iter().sum::<f64>() / ref_logc.len() as f64;

    // defect-system pair constants binned by distance to the defect
    let def_exp = locality_experiment(def_responder, obs, 1, None)?;
    let def_window = default_fit_window(def_cfg, &def_state.u);
    let mut binned: Vec<(f64, Vec<f64>)> = Vec::new();
    for row in &def_exp.rows {
        if row.r < def_window.r_min || row.r > def_window.r_max || row.value <= def_window.floor {
            continue;
        }
        let (dl, dm) = (
            def_cfg.distance_to_defect(row.l),
            def_cfg.distance_to_defect(row.m),
        );
        let defect_dist = match (dl, dm) {
            (Some(a), Some(b)) => a.min(b),
            _ => continue,
        };
        let logc = row.value.ln() + eta_ref * row.r;
        let bin = (defect_dist / opts.bin_width).floor() as usize;
        while binned.len() <= bin {
            binned.push((binned.len() as f64 * opts.bin_width, Vec::new()));
        }
        binned[bin].1.push(logc);
    }
    let bins: Vec<DefectBin> = binned
        .into_iter()
        .filter(|(_, v)| !v.is_empty())
        .map(|(lo, v)| DefectBin {
            dist_lo: lo,
            dist_hi: lo + opts.bin_width,
            mean_log_constant: v.iter().sum::<f64>() / v.len() as f64,
            n_pairs: v.len(),
        })
        .collect();

    Ok(DefectComparison {
        in_gap_count: in_gap_eigenvalues.len(),
        in_gap_eigenvalues,
        reference_gap: (edge_lo, edge_hi),
        rho_deviation_l2: dev_sq.sqrt(),
        rho_deviation_fit,
        reference_fit: ref_exp.fit,
        reference_log_constant,
        bins,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::lattice::build_chain;
    use crate::model::{assemble, HoppingModel, OnsiteModel};
    use approx::assert_relative_eq;
    use rand::prelude::*;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn fit_recovers_exact_exponential() {
        let samples: Vec<(f64, f64)> = (1..=12)
            .map(|i| {
                let r = i as f64;
                (r, 3.0 * (-0.7 * r).exp())
            })
            .collect();
        let fit = fit_decay(&samples, &FitOptions::default()).unwrap();
        assert_relative_eq!(fit.eta_hat, 0.7, epsilon = 1e-8);
        assert_relative_eq!(fit.log_prefactor, 3.0f64.ln(), epsilon = 1e-8);
        assert!(fit.r_squared > 1.0 - 1e-12);
    }

    #[test]
    fn fit_handles_noise() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let samples: Vec<(f64, f64)> = (1..=30)
            .map(|i| {
                let r = i as f64 * 0.5;
                (r, (-r).exp() * (1.0 + 0.01 * (rng.gen::<f64>() - 0.5)))
            })
            .collect();
        let fit = fit_decay(&samples, &FitOptions::default()).unwrap();
        assert!(
            fit.eta_hat > 0.95 && fit.eta_hat < 1.05,
            "eta {}",
            fit.eta_hat
        );
    }

    #[test]
    fn fit_constant_samples_gives_zero_rate() {
        let samples: Vec<(f64, f64)> = (1..=10).map(|i| (i as f64, 2.5)).collect();
        let fit = fit_decay(&samples, &FitOptions::default()).unwrap();
        assert!(fit.eta_hat.abs() < 1e-12);
        assert_relative_eq!(fit.r_squared, 1.0);
    }

    #[test]
    fn fit_rejects_thin_data() {
        let few = vec![(1.0, 0.5), (2.0, 0.25), (3.0, 0.12)];
        assert!(fit_decay(&few, &FitOptions::default()).is_err());
        // narrow span
        let narrow: Vec<(f64, f64)> = (0..10)
            .map(|i| (1.0 + 0.1 * i as f64, 0.5 / (i + 1) as f64))
            .collect();
        assert!(fit_decay(&narrow, &FitOptions::default()).is_err());
    }

    fn chain_hamiltonian(n: usize) -> (Configuration, Displacement, Hamiltonian) {
        let cfg = build_chain(n, 1.0).unwrap();
        let u = Displacement::zeros(&cfg);
        let mut hop = HoppingModel::new(1.0, 1.0, 1.0, 1).unwrap();
        hop.r_cut = 1.5; // nearest neighbour: clean [-2, 2] band
        let rho = DVector::from_element(n, 0.5);
        let h = assemble(&cfg, &u, &rho, &hop, &OnsiteModel::Constant { c: 0.0 }).unwrap();
        (cfg, u, h)
    }

    #[test]
    fn ct_check_chain_clean_decay() {
        let (cfg, u, h) = chain_hamiltonian(40);
        let report = ct_check(&cfg, &u, &h, Complex64::new(0.0, 3.0), 3.0).unwrap();
        let fit = report.fit.as_ref().expect("fit exists");
        assert!(fit.r_squared >= 0.98, "r2 = {}", fit.r_squared);
        assert!(fit.eta_hat > 0.0);
        assert_eq!(report.violations, 0);
    }

    #[test]
    fn ct_rate_monotone_in_clearance() {
        let (cfg, u, h) = chain_hamiltonian(40);
        let r1 = ct_check(&cfg, &u, &h, Complex64::new(0.0, 1.0), 1.0).unwrap();
        let r4 = ct_check(&cfg, &u, &h, Complex64::new(0.0, 4.0), 4.0).unwrap();
        let g1 = r1.fit.unwrap().eta_hat;
        let g4 = r4.fit.unwrap().eta_hat;
        assert!(g4 >= g1, "gamma(4) = {g4} < gamma(1) = {g1}");
    }

    #[test]
    fn ct_too_close_rejected() {
        let (cfg, u, h) = chain_hamiltonian(10);
        assert!(matches!(
            ct_check(&cfg, &u, &h, Complex64::new(0.0, 0.5), 1.0),
            Err(Error::NearSingular { .. })
        ));
    }

    #[test]
    fn ct_diagonal_hamiltonian_has_zero_offdiagonal() {
        let n = 8;
        let cfg = build_chain(n, 1.0).unwrap();
        let u = Displacement::zeros(&cfg);
        let matrix = DMatrix::from_fn(n, n, |i, j| if i == j { 0.3 * i as f64 } else { 0.0 });
        let h = Hamiltonian {
            matrix,
            n_sites: n,
            n_orbitals: 1,
        };
        let report = ct_check(&cfg, &u, &h, Complex64::new(0.0, 3.0), 2.0).unwrap();
        assert!(report.fit.is_none());
        assert_eq!(report.violations, 0);
        assert!(report.pairs.iter().all(|p| p.value <= 1e-14));
    }

    fn seeded_matrix(n: usize, seed: u64) -> DMatrix<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        DMatrix::from_fn(n, n, |_, _| rng.gen::<f64>() - 0.5) + DMatrix::identity(n, n) * 2.0
    }

    #[test]
    fn woodbury_identity_rank0() {
        let a = seeded_matrix(6, 1);
        let rhs = DVector::from_fn(6, |i, _| i as f64 - 2.0);
        let upd = LowRankUpdate::new(DMatrix::<f64>::zeros(6, 0), DMatrix::zeros(6, 0)).unwrap();
        let inv = woodbury_resolvent(a.clone().lu(), &upd).unwrap();
        let x = inv.apply(&rhs).unwrap();
        let direct = a.lu().solve(&rhs).unwrap();
        assert!((x - direct).amax() < 1e-13);
    }

    #[test]
    fn woodbury_matches_dense_inverse() {
        let a = seeded_matrix(8, 2);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let u = DMatrix::from_fn(8, 2, |_, _| rng.gen::<f64>() - 0.5);
        let v = DMatrix::from_fn(8, 2, |_, _| rng.gen::<f64>() - 0.5);
        let upd = LowRankUpdate::new(u.clone(), v.clone()).unwrap();
        let rhs = DVector::from_fn(8, |i, _| (i as f64).sin());
        let inv = woodbury_resolvent(a.clone().lu(), &upd).unwrap();
        let x = inv.apply(&rhs).unwrap();
        let dense = (&a + upd.to_dense()).lu().solve(&rhs).unwrap();
        assert!((x - dense).amax() < 1e-10);
    }

    #[test]
    fn woodbury_sequential_rank1_equals_rank2() {
        let a = seeded_matrix(8, 4);
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let u = DMatrix::from_fn(8, 2, |_, _| rng.gen::<f64>() - 0.5);
        let v = DMatrix::from_fn(8, 2, |_, _| rng.gen::<f64>() - 0.5);
        let rhs = DVector::from_fn(8, |i, _| 1.0 / (1.0 + i as f64));

        // one rank-2 update
        let upd2 = LowRankUpdate::new(u.clone(), v.clone()).unwrap();
        let x2 = woodbury_resolvent(a.clone().lu(), &upd2)
            .unwrap()
            .apply(&rhs)
            .unwrap();

        // two sequential rank-1 updates: apply the second update on the
        // dense sum of the first
        let a1 = &a + u.column(0) * v.column(0).transpose();
        let upd_b = LowRankUpdate::new(
            DMatrix::from_fn(8, 1, |i, _| u[(i, 1)]),
            DMatrix::from_fn(8, 1, |i, _| v[(i, 1)]),
        )
        .unwrap();
        let x_seq = woodbury_resolvent(a1.lu(), &upd_b)
            .unwrap()
            .apply(&rhs)
            .unwrap();
        assert!((x2 - x_seq).amax() < 1e-10);
    }

    #[test]
    fn woodbury_complex_resolvent_shift() {
        // complex path: update a resolvent (H - z) by an on-site shift
        let (_, _, h) = chain_hamiltonian(8);
        let z = Complex64::new(0.2, 1.5);
        let n = 8;
        let shifted = DMatrix::from_fn(n, n, |i, j| {
            let mut v = Complex64::new(h.matrix[(i, j)], 0.0);
            if i == j {
                v -= z;
            }
            v
        });
        let delta = Complex64::new(0.7, 0.0);
        let mut u = DMatrix::zeros(n, 1);
        u[(3, 0)] = delta;
        let mut v = DMatrix::zeros(n, 1);
        v[(3, 0)] = Complex64::new(1.0, 0.0);
        let upd = LowRankUpdate::new(u, v).unwrap();
        let rhs = DVector::from_fn(n, |i, _| Complex64::new(i as f64, -0.3));
        let got = woodbury_resolvent(shifted.clone().lu(), &upd)
            .unwrap()
            .apply(&rhs)
            .unwrap();
        let mut dense = shifted;
        dense[(3, 3)] += delta;
        let want = dense.lu().solve(&rhs).unwrap();
        let err = (got - want).iter().fold(0.0f64, |m, c| m.max(c.norm()));
        assert!(err < 1e-10);
    }

    #[test]
    fn woodbury_singular_capacitance_rejected() {
        // A = I, u = e0, v = -e0: I + v^T A^{-1} u = 0
        let a: DMatrix<f64> = DMatrix::identity(4, 4);
        let mut u = DMatrix::zeros(4, 1);
        u[(0, 0)] = 1.0;
        let mut v = DMatrix::zeros(4, 1);
        v[(0, 0)] = -1.0;
        let upd = LowRankUpdate::new(u, v).unwrap();
        assert!(woodbury_resolvent(a.lu(), &upd).is_err());
    }
}
