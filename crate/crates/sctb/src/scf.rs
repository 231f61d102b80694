//! Self-consistency: the density map rho -> F(u; rho), its damped /
//! Anderson-accelerated fixed point, and the stability operator whose
//! invertibility margin controls everything downstream.

use nalgebra::{DMatrix, DVector};
use num_complex::Complex64;

use crate::error::{Error, Result};
use crate::lattice::{Configuration, Displacement};
use crate::model::{assemble, Hamiltonian, HoppingModel, OnsiteModel};
use crate::spectral::{
    build_contour, diagonalize, full_resolvent, local_observable_spectral_all, Beta, Contour,
    ContourSettings, Observable, SpectralCache,
};

/// A tight-binding problem instance: geometry, model and thermodynamic state.
#[derive(Debug, Clone)]
pub struct TightBindingSystem {
    pub config: Configuration,
    pub hopping: HoppingModel,
    pub onsite: OnsiteModel,
    pub mu: f64,
    pub beta: Beta,
}

/// Converged electronic density with its fixed-point residual.
#[derive(Debug, Clone)]
pub struct Density {
    pub rho: DVector<f64>,
    pub residual: f64,
    pub iterations: usize,
}

/// Fixed-point solver parameters.
#[derive(Debug, Clone, Copy, serde::Serialize, serde::Deserialize)]
pub struct ScfParams {
    pub mixing: f64,
    pub anderson_depth: usize,
    pub tol: f64,
    pub max_iter: usize,
}

impl Default for ScfParams {
    fn default() -> Self {
        Self {
            mixing: 0.5,
            anderson_depth: 5,
            tol: 1e-12,
            max_iter: 400,
        }
    }
}

impl ScfParams {
    fn validate(&self) -> Result<()> {
        if !(0.0 < self.mixing && self.mixing <= 1.0) {
            return Err(Error::InvalidArgument(format!(
                "mixing must lie in (0, 1], got {}",
                self.mixing
            )));
        }
        if self.tol <= 0.0 || self.max_iter == 0 {
            return Err(Error::InvalidArgument(
                "scf needs tol > 0 and max_iter >= 1".into(),
            ));
        }
        Ok(())
    }
}

impl TightBindingSystem {
    pub fn n_sites(&self) -> usize {
        self.config.n_sites()
    }

    pub fn fermi_observable(&self) -> Observable {
        Observable::fermi(self.mu, self.beta)
    }

    pub fn grand_potential_observable(&self) -> Observable {
        Observable::grand_potential(self.mu, self.beta)
    }

    pub fn assemble(&self, u: &Displacement, rho: &DVector<f64>) -> Result<Hamiltonian> {
        assemble(&self.config, u, rho, &self.hopping, &self.onsite)
    }

    /// Uniform half-filling start.
    pub fn default_density(&self) -> DVector<f64> {
        DVector::from_element(self.n_sites(), self.hopping.n_orbitals as f64 / 2.0)
    }

    /// Solve the self-consistency equation from the default start.
    pub fn converge(&self, u: &Displacement, params: &ScfParams) -> Result<ConvergedState> {
        self.converge_from(u, &self.default_density(), params)
    }

    pub fn converge_from(
        &self,
        u: &Displacement,
        rho0: &DVector<f64>,
        params: &ScfParams,
    ) -> Result<ConvergedState> {
        let density = scf_solve(self, u, rho0, params)?;
        let hamiltonian = self.assemble(u, &density.rho)?;
        let spectral = diagonalize(&hamiltonian)?;
        Ok(ConvergedState {
            system: self.clone(),
            u: u.clone(),
            density,
            hamiltonian,
            spectral,
        })
    }
}

/// One application of the density map F(u; rho): assemble, diagonalise,
/// occupy. Zero-temperature runs require mu to stay clear of the spectrum.
pub fn density_map(
    sys: &TightBindingSystem,
    u: &Displacement,
    rho_in: &DVector<f64>,
) -> Result<DVector<f64>> {
    let h = sys.assemble(u, rho_in)?;
    let cache = diagonalize(&h)?;
    if sys.beta.is_infinite() {
        let dist = cache.distance_to_spectrum(sys.mu);
        if dist < 1e-8 {
            return Err(Error::GapClosed { mu: sys.mu, dist });
        }
    }
    Ok(local_observable_spectral_all(
        &cache,
        &sys.fermi_observable(),
    ))
}

fn clamp_density(rho: &mut DVector<f64>, n_orbitals: usize) {
    let nb = n_orbitals as f64;
    for x in rho.iter_mut() {
        *x = x.clamp(0.0, nb);
    }
}

/// Damped fixed-point iteration with Anderson acceleration.
///
/// Iterates rho <- rho + alpha g(rho) with g = F - rho; once enough history
/// exists the update extrapolates over the last `anderson_depth` residual
/// differences. Iterates are clamped into the physical box [0, N_b].
pub fn scf_solve(
    sys: &TightBindingSystem,
    u: &Displacement,
    rho0: &DVector<f64>,
    params: &ScfParams,
) -> Result<Density> {
    params.validate()?;
    let n = sys.n_sites();
    if rho0.len() != n {
        return Err(Error::InvalidArgument(format!(
            "initial density has {} entries for {n} sites",
            rho0.len()
        )));
    }
    let mut rho = rho0.clone();
    clamp_density(&mut rho, sys.hopping.n_orbitals);

    let mut rho_hist: Vec<DVector<f64>> = Vec::new();
    let mut g_hist: Vec<DVector<f64>> = Vec::new();
    let mut residual = f64::INFINITY;

    for it in 0..params.max_iter {
        let f = density_map(sys, u, &rho)?;
        let g = &f - &rho;
        residual = g.amax();
        if residual <= params.tol {
            return Ok(Density {
                rho,
                residual,
                iterations: it,
            });
        }

        rho_hist.push(rho.clone());
        g_hist.push(g.clone());
        let keep = params.anderson_depth + 1;
        if rho_hist.len() > keep {
            rho_hist.remove(0);
            g_hist.remove(0);
        }

        let m = g_hist.len() - 1;
        let mut next = if m == 0 || params.anderson_depth == 0 {
            &rho + &g * params.mixing
        } else {
            // least-squares combination of the last m residual differences
            let mut dg = DMatrix::zeros(n, m);
            let mut dx = DMatrix::zeros(n, m);
            for j in 0..m {
                dg.set_column(j, &(&g_hist[j + 1] - &g_hist[j]));
                dx.set_column(j, &(&rho_hist[j + 1] - &rho_hist[j]));
            }
            let gamma = dg
                .clone()
                .svd(true, true)
                .solve(&g, 1e-13)
                .map_err(|e| Error::Numerical(format!("anderson least squares: {e}")))?;
            &rho + &g * params.mixing - (&dx + &dg * params.mixing) * gamma
        };
        clamp_density(&mut next, sys.hopping.n_orbitals);
        rho = next;
    }

    Err(Error::NonConvergence {
        iterations: params.max_iter,
        residual,
    })
}

/// A converged (u, rho) pair with its assembled Hamiltonian and eigenpairs.
#[derive(Debug, Clone)]
pub struct ConvergedState {
    pub system: TightBindingSystem,
    pub u: Displacement,
    pub density: Density,
    pub hamiltonian: Hamiltonian,
    pub spectral: SpectralCache,
}

impl ConvergedState {
    /// The Fermi contour paired with this state's spectrum.
    pub fn fermi_contour(&self, settings: &ContourSettings) -> Result<Contour> {
        build_contour(&self.spectral, &self.system.fermi_observable(), settings)
    }

    /// Distance from mu to the spectrum (half the symmetric gap).
    pub fn mu_clearance(&self) -> f64 {
        self.spectral.distance_to_spectrum(self.system.mu)
    }

    /// v'(rho) on every site.
    pub fn vprime(&self) -> DVector<f64> {
        self.density.rho.map(|r| self.system.onsite.derivative(r))
    }

    /// v''(rho) on every site.
    pub fn vsecond(&self) -> DVector<f64> {
        self.density
            .rho
            .map(|r| self.system.onsite.second_derivative(r))
    }
}

/// The stability operator and both of its smallness measures.
#[derive(Debug, Clone)]
pub struct StabilityOperator {
    pub matrix: DMatrix<f64>,
    /// 1 / ||(I - L)^{-1}||_2, i.e. the smallest singular value of I - L.
    pub margin: f64,
    /// dist(1, spectrum(L)); reported alongside, asserted nowhere (L is
    /// non-normal, so the two measures differ in general). None when the
    /// bounded Schur iteration does not converge.
    pub spectral_distance: Option<f64>,
}

/// Assemble L(u; rho) by contour quadrature over squared resolvent entries.
pub fn stability_operator(state: &ConvergedState, contour: &Contour) -> Result<StabilityOperator> {
    let h = &state.hamiltonian;
    let n = h.n_sites;
    let no = h.n_orbitals;
    let obs = state.system.fermi_observable();

    let mut acc = DMatrix::from_element(n, n, Complex64::new(0.0, 0.0));
    for (z, w) in contour.nodes.iter().zip(&contour.weights) {
        let f = obs.eval_contour(*z)?;
        let r = full_resolvent(h, *z)?;
        for l in 0..n {
            for k in 0..n {
                let mut sq = Complex64::new(0.0, 0.0);
                for a in 0..no {
                    for b in 0..no {
                        let e = r[(l * no + a, k * no + b)];
                        sq += e * e;
                    }
                }
                acc[(l, k)] += w * f * sq;
            }
        }
    }

    let vprime = state.vprime();
    let mut matrix = DMatrix::zeros(n, n);
    for l in 0..n {
        for k in 0..n {
            let v = acc[(l, k)];
            if v.im.abs() > 1e-8 * (1.0 + v.re.abs()) {
                return Err(Error::Numerical(format!(
                    "stability quadrature left imaginary residual {:.3e}",
                    v.im
                )));
            }
            matrix[(l, k)] = v.re * vprime[k];
        }
    }

    let margin = stability_margin(&matrix);
    let spectral_distance = spectrum_distance_to_one(&matrix);

    Ok(StabilityOperator {
        matrix,
        margin,
        spectral_distance,
    })
}

/// dist(1, spectrum(L)) via a bounded Schur iteration; None on non-convergence.
pub fn spectrum_distance_to_one(l_matrix: &DMatrix<f64>) -> Option<f64> {
    nalgebra::linalg::Schur::try_new(l_matrix.clone(), 1e-12, 10_000).map(|s| {
        s.complex_eigenvalues()
            .iter()
            .fold(f64::INFINITY, |d, e| d.min((e - 1.0).norm()))
    })
}

/// Stability margin 1 / ||(I - L)^{-1}||_2 via the smallest singular value.
pub fn stability_margin(l_matrix: &DMatrix<f64>) -> f64 {
    let n = l_matrix.nrows();
    let i_minus_l = DMatrix::identity(n, n) - l_matrix;
    let sv = i_minus_l.svd(false, false).singular_values;
    let smin = sv.iter().fold(f64::INFINITY, |m, &s| m.min(s));
    if smin < 1e-12 {
        0.0
    } else {
        smin
    }
}
