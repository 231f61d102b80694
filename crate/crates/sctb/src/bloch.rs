//! Bloch transform of the reference crystal: wavevector-indexed Hamiltonians,
//! band structure, the reference gap, and the Bloch-decomposed stability
//! operator, each cross-checked against periodic supercells by unitary
//! equivalence at commensurate wavevectors.

use nalgebra::{DMatrix, DVector};
use num_complex::Complex64;

use crate::error::{Error, Result};
use crate::lattice::{build_multilattice, Configuration, Displacement, PeriodicCell};
use crate::model::{HoppingModel, OnsiteModel};
use crate::scf::{stability_operator, ConvergedState, Density, TightBindingSystem};
use crate::spectral::{diagonalize, Beta, ContourSettings};

/// A translation-invariant reference crystal: unit cell plus a per-basis-site
/// self-consistent density.
#[derive(Debug, Clone)]
pub struct ReferenceCrystal {
    pub cell_matrix: DMatrix<f64>,
    pub basis: Vec<DVector<f64>>,
    pub species: Vec<u32>,
    pub rho_ref: Vec<f64>,
}

impl ReferenceCrystal {
    pub fn n_basis(&self) -> usize {
        self.basis.len()
    }

    pub fn dim(&self) -> usize {
        self.cell_matrix.nrows()
    }

    /// Extract the unit-cell data from a periodic supercell configuration and
    /// a density defined on it, verifying translation invariance of the
    /// density over cells.
    pub fn from_supercell(cfg: &Configuration, rho: &DVector<f64>) -> Result<Self> {
        let cell = cfg
            .cell
            .as_ref()
            .ok_or_else(|| Error::InvalidArgument("configuration has no cell metadata".into()))?;
        let nb = cell.basis.len();
        let n_cells: usize = cell.repeats.iter().product();
        if cfg.n_sites() != nb * n_cells || rho.len() != cfg.n_sites() {
            return Err(Error::InvalidArgument(
                "site count does not match cell metadata".into(),
            ));
        }
        let mut rho_ref = Vec::with_capacity(nb);
        let mut species = Vec::with_capacity(nb);
        for b in 0..nb {
            rho_ref.push(rho[b]);
            species.push(cfg.species[b]);
        }
        for c in 0..n_cells {
            for b in 0..nb {
                let idx = c * nb + b;
                if (rho[idx] - rho_ref[b]).abs() > 1e-10 {
                    return Err(Error::InvalidArgument(format!(
                        "density is not translation invariant: site {idx} deviates by {:.3e}",
                        (rho[idx] - rho_ref[b]).abs()
                    )));
                }
                if cfg.species[idx] != species[b] {
                    return Err(Error::InvalidArgument(
                        "species pattern is not translation invariant".into(),
                    ));
                }
            }
        }
        Ok(Self {
            cell_matrix: cell.matrix.clone(),
            basis: cell.basis.clone(),
            species,
            rho_ref: rho_ref,
        })
    }

    /// Periodic supercell of `m` cells per axis with the tiled density.
    pub fn supercell(&self, m: usize) -> Result<(Configuration, DVector<f64>)> {
        let d = self.dim();
        let mut cfg = build_multilattice(&self.cell_matrix, &self.basis, &vec![m; d], true)?;
        let nb = self.n_basis();
        let n_cells = cfg.n_sites() / nb;
        let mut rho = DVector::zeros(cfg.n_sites());
        for c in 0..n_cells {
            for b in 0..nb {
                cfg.species[c * nb + b] = self.species[b];
                rho[c * nb + b] = self.rho_ref[b];
            }
        }
        Ok((cfg, rho))
    }

    /// Reciprocal lattice matrix 2 pi A^{-T}.
    pub fn reciprocal_matrix(&self) -> Result<DMatrix<f64>> {
        self.cell_matrix
            .transpose()
            .try_inverse()
            .map(|m| m * (2.0 * std::f64::consts::PI))
            .ok_or_else(|| Error::InvalidArgument("singular cell matrix".into()))
    }

    /// Commensurate wavevector grid: xi_j = 2 pi A^{-T} (j / m) per axis.
    pub fn commensurate_grid(&self, m: usize) -> Result<Vec<DVector<f64>>> {
        let recip = self.reciprocal_matrix()?;
        let d = self.dim();
        let mut out = Vec::new();
        let mut idx = vec![0usize; d];
        loop {
            let frac = DVector::from_fn(d, |i, _| idx[i] as f64 / m as f64);
            out.push(&recip * frac);
            let mut i = 0;
            loop {
                if i == d {
                    return Ok(out);
                }
                idx[i] += 1;
                if idx[i] >= m {
                    idx[i] = 0;
                    i += 1;
                } else {
                    break;
                }
            }
        }
    }
}

/// Enumerate lattice vectors A*gamma with |base + A*gamma| <= cutoff.
fn cells_within(a: &DMatrix<f64>, base: &DVector<f64>, cutoff: f64) -> Vec<DVector<f64>> {
    let d = a.nrows();
    let mut min_extent = f64::INFINITY;
    for j in 0..d {
        min_extent = min_extent.min(a.column(j).norm());
    }
    let reach = ((cutoff + base.norm()) / min_extent).ceil() as i64 + 1;
    let mut out = Vec::new();
    let mut idx = vec![-reach; d];
    loop {
        let mut t = DVector::zeros(d);
        for j in 0..d {
            t += a.column(j) * idx[j] as f64;
        }
        if (base + &t).norm() <= cutoff {
            out.push(t);
        }
        let mut i = 0;
        loop {
            if i == d {
                return out;
            }
            idx[i] += 1;
            if idx[i] > reach {
                idx[i] = -reach;
                i += 1;
            } else {
                break;
            }
        }
    }
}

/// Bloch Hamiltonian at wavevector xi: lattice-summed, phase-twisted hopping
/// plus the on-site diagonal, Hermitised exactly.
pub fn bloch_hamiltonian(
    crystal: &ReferenceCrystal,
    hop: &HoppingModel,
    onsite: &OnsiteModel,
    xi: &DVector<f64>,
) -> Result<DMatrix<Complex64>> {
    let nb = crystal.n_basis();
    let no = hop.n_orbitals;
    let nn = nb * no;
    let mut m = DMatrix::from_element(nn, nn, Complex64::new(0.0, 0.0));

    for l in 0..nb {
        for k in 0..nb {
            let base = &crystal.basis[l] - &crystal.basis[k];
            for t in cells_within(&crystal.cell_matrix, &base, hop.r_cut) {
                let sep = &base + &t;
                let is_self = l == k && sep.norm() == 0.0;
                if is_self {
                    continue;
                }
                let block = hop.block(&sep);
                let phase = Complex64::new(0.0, -sep.dot(xi)).exp();
                for a in 0..no {
                    for b in 0..no {
                        m[(l * no + a, k * no + b)] += phase * block[(a, b)];
                    }
                }
            }
        }
        let diag = onsite.value(crystal.rho_ref[l]) + hop.shift_for(crystal.species[l]);
        for a in 0..no {
            m[(l * no + a, l * no + a)] += diag;
        }
    }

    let deviation = (0..nn)
        .flat_map(|i| (0..nn).map(move |j| (i, j)))
        .fold(0.0f64, |dmax, (i, j)| {
            dmax.max((m[(i, j)] - m[(j, i)].conj()).norm())
        });
    if deviation > 1e-12 * (1.0 + hop.h0) {
        return Err(Error::Numerical(format!(
            "Bloch matrix lost Hermiticity: deviation {deviation:.3e}"
        )));
    }
    // enforce exact Hermiticity
    let herm = (&m + m.adjoint()) * Complex64::new(0.5, 0.0);
    Ok(herm)
}

/// Eigenvalues of a Hermitian complex matrix, ascending.
pub fn hermitian_eigenvalues(m: &DMatrix<Complex64>) -> Vec<f64> {
    let eig = m.clone().symmetric_eigen();
    let mut v: Vec<f64> = eig.eigenvalues.iter().copied().collect();
    v.sort_by(f64::total_cmp);
    v
}

#[derive(Debug, Clone, serde::Serialize)]
pub struct BandStructure {
    /// Wavevector fractional coordinates (row-major over the grid).
    pub xi_fracs: Vec<Vec<f64>>,
    /// Bands per grid point, ascending.
    pub bands: Vec<Vec<f64>>,
    /// Reference gap at mu; zero when a band straddles mu.
    pub gap: f64,
    pub edge_below: Option<f64>,
    pub edge_above: Option<f64>,
}

/// Sample all bands over an m^d commensurate grid and measure the gap at mu.
pub fn band_structure(
    crystal: &ReferenceCrystal,
    hop: &HoppingModel,
    onsite: &OnsiteModel,
    grid: usize,
    mu: f64,
) -> Result<BandStructure> {
    if grid < 8 {
        return Err(Error::InvalidArgument(format!(
            "band grid must be at least 8 per axis, got {grid}"
        )));
    }
    let xis = crystal.commensurate_grid(grid)?;
    let recip = crystal.reciprocal_matrix()?;
    let recip_inv = recip
        .clone()
        .try_inverse()
        .ok_or_else(|| Error::InvalidArgument("singular reciprocal matrix".into()))?;

    let mut bands = Vec::with_capacity(xis.len());
    let mut xi_fracs = Vec::with_capacity(xis.len());
    for xi in &xis {
        let h = bloch_hamiltonian(crystal, hop, onsite, xi)?;
        bands.push(hermitian_eigenvalues(&h));
        xi_fracs.push((&recip_inv * xi).iter().copied().collect());
    }

    let n_bands = bands[0].len();
    let mut gapless = false;
    let mut edge_below: Option<f64> = None;
    let mut edge_above: Option<f64> = None;
    for n in 0..n_bands {
        let lo = bands.iter().map(|b| b[n]).fold(f64::INFINITY, f64::min);
        let hi = bands.iter().map(|b| b[n]).fold(f64::NEG_INFINITY, f64::max);
        if lo <= mu && mu <= hi {
            gapless = true;
        }
        if hi < mu {
            edge_below = Some(edge_below.map_or(hi, |e: f64| e.max(hi)));
        }
        if lo > mu {
            edge_above = Some(edge_above.map_or(lo, |e: f64| e.min(lo)));
        }
    }
    let gap = if gapless {
        0.0
    } else {
        match (edge_below, edge_above) {
            (Some(b), Some(a)) => a - b,
            _ => 0.0,
        }
    };

    Ok(BandStructure {
        xi_fracs,
        bands,
        gap,
        edge_below,
        edge_above,
    })
}

/// Compare commensurate Bloch eigenvalues against the direct diagonalisation
/// of an m-cell periodic supercell; returns the largest matched-pair
/// deviation.
pub fn supercell_consistency(
    crystal: &ReferenceCrystal,
    hop: &HoppingModel,
    onsite: &OnsiteModel,
    m: usize,
) -> Result<f64> {
    if m < 1 {
        return Err(Error::InvalidArgument("need at least one cell".into()));
    }
    let mut folded: Vec<f64> = Vec::new();
    for xi in crystal.commensurate_grid(m)? {
        let h = bloch_hamiltonian(crystal, hop, onsite, &xi)?;
        folded.extend(hermitian_eigenvalues(&h));
    }
    folded.sort_by(f64::total_cmp);

    let (cfg, rho) = crystal.supercell(m)?;
    let u = Displacement::zeros(&cfg);
    let h = crate::model::assemble(&cfg, &u, &rho, hop, onsite)?;
    let cache = diagonalize(&h)?;

    if folded.len() != cache.eigenvalues.len() {
        return Err(Error::Numerical(
            "folded and supercell spectra have different sizes".into(),
        ));
    }
    let mut worst = 0.0f64;
    for (a, b) in folded.iter().zip(cache.eigenvalues.iter()) {
        worst = worst.max((a - b).abs());
    }
    Ok(worst)
}

/// Bloch-decomposed stability operator on a commensurate grid.
///
/// The squared-resolvent quadrature is taken from one large periodic
/// supercell (folding is exact at commensurate wavevectors), then
/// phase-twisted and lattice-summed per the Bloch decomposition.
pub struct BlochStability {
    /// L_xi per grid point, in `commensurate_grid(m)` order.
    pub l_matrices: Vec<DMatrix<Complex64>>,
    /// min over the grid of 1 / ||(I - L_xi)^{-1}||_2.
    pub margin: f64,
    /// The supercell state the resolvents came from.
    pub supercell_state: ConvergedState,
}

pub fn bloch_stability(
    crystal: &ReferenceCrystal,
    hop: &HoppingModel,
    onsite: &OnsiteModel,
    mu: f64,
    beta: Beta,
    m: usize,
    settings: &ContourSettings,
) -> Result<BlochStability> {
    let (cfg, rho) = crystal.supercell(m)?;
    let u = Displacement::zeros(&cfg);
    let system = TightBindingSystem {
        config: cfg.clone(),
        hopping: hop.clone(),
        onsite: onsite.clone(),
        mu,
        beta,
    };
    let hamiltonian = system.assemble(&u, &rho)?;
    let spectral = diagonalize(&hamiltonian)?;
    let residual = {
        let f = crate::scf::density_map(&system, &u, &rho)?;
        (&f - &rho).amax()
    };
    let state = ConvergedState {
        system,
        u,
        density: Density {
            rho: rho.clone(),
            residual,
            iterations: 0,
        },
        hamiltonian,
        spectral,
    };

    let contour = state.fermi_contour(settings)?;
    let stab = stability_operator(&state, &contour)?;

    // supercell L entries, re-expressed as a lattice sum: for 1D-like cells
    // the flattened cell index c corresponds to the translation A * c.
    let nb = crystal.n_basis();
    let d = crystal.dim();
    let n_cells: usize = cfg.cell.as_ref().unwrap().repeats.iter().product();
    let mut cell_vecs = Vec::with_capacity(n_cells);
    {
        // reconstruct each cell's integer coordinates in build order
        let mut idx = vec![0usize; d];
        for _ in 0..n_cells {
            let mut t = DVector::zeros(d);
            for j in 0..d {
                t += crystal.cell_matrix.column(j) * idx[j] as f64;
            }
            cell_vecs.push(t);
            let mut i = 0;
            while i < d {
                idx[i] += 1;
                if idx[i] >= m {
                    idx[i] = 0;
                    i += 1;
                } else {
                    break;
                }
            }
        }
    }

    let mut l_matrices = Vec::new();
    let mut margin = f64::INFINITY;
    for xi in crystal.commensurate_grid(m)? {
        let mut l_xi = DMatrix::from_element(nb, nb, Complex64::new(0.0, 0.0));
        for l in 0..nb {
            for k in 0..nb {
                let mut acc = Complex64::new(0.0, 0.0);
                for (c, t) in cell_vecs.iter().enumerate() {
                    let sep = &crystal.basis[l] + t - &crystal.basis[k];
                    let phase = Complex64::new(0.0, -sep.dot(&xi)).exp();
                    acc += phase * stab.matrix[(c * nb + l, k)];
                }
                l_xi[(l, k)] = acc;
            }
        }
        // margin via smallest singular value of I - L_xi
        let i_minus = DMatrix::<Complex64>::identity(nb, nb) - &l_xi;
        let smin = i_minus
            .svd(false, false)
            .singular_values
            .iter()
            .fold(f64::INFINITY, |mn, &s| mn.min(s));
        margin = margin.min(smin);
        l_matrices.push(l_xi);
    }

    Ok(BlochStability {
        l_matrices,
        margin,
        supercell_state: state,
    })
}
