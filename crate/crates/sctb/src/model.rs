//! Two-centre tight-binding model: exponentially decaying hopping plus a
//! bounded non-linear on-site term.
//!
//! Hopping follows the single-exponential family
//! `h(r) = -h0 * exp(-gamma0 * (r - r_on))`, cut off where it drops below
//! 1e-12, with optional two-orbital mixing to exercise orbital indices.
//! The on-site term is either a constant (linear model) or a saturating
//! `U * tanh(rho - rho0)`. Species enter through a per-species on-site energy
//! shift, which is how substitutional defects are realised.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;

use crate::error::{Error, Result};
use crate::lattice::{noninterpenetration_constant, Configuration, Displacement};

/// Exponential hopping family with orbital structure.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct HoppingModel {
    pub h0: f64,
    pub gamma0: f64,
    pub r_on: f64,
    pub n_orbitals: usize,
    /// Numerical cutoff radius; entries beyond it are exactly zero.
    pub r_cut: f64,
    /// Off-diagonal orbital mixing for the two-orbital toy variant.
    #[serde(default)]
    pub orbital_mix: f64,
    /// Per-species on-site energy shift (site-diagonal, density independent).
    #[serde(default)]
    pub species_shift: BTreeMap<u32, f64>,
}

impl HoppingModel {
    /// Cutoff placed where h0 * exp(-gamma0 (r - r_on)) < 1e-12.
    pub fn default_r_cut(h0: f64, gamma0: f64, r_on: f64) -> f64 {
        r_on + (12.0 * std::f64::consts::LN_10 + h0.max(1e-300).ln()) / gamma0
    }

    pub fn new(h0: f64, gamma0: f64, r_on: f64, n_orbitals: usize) -> Result<Self> {
        if h0 <= 0.0 || gamma0 <= 0.0 || n_orbitals == 0 {
            return Err(Error::InvalidArgument(format!(
                "hopping model requires h0 > 0, gamma0 > 0, n_orbitals >= 1 \
                 (got {h0}, {gamma0}, {n_orbitals})"
            )));
        }
        Ok(Self {
            h0,
            gamma0,
            r_on,
            n_orbitals,
            r_cut: Self::default_r_cut(h0, gamma0, r_on),
            orbital_mix: 0.0,
            species_shift: BTreeMap::new(),
        })
    }

    pub fn shift_for(&self, species: u32) -> f64 {
        self.species_shift.get(&species).copied().unwrap_or(0.0)
    }

    fn radial(&self, r: f64) -> f64 {
        -self.h0 * (-self.gamma0 * (r - self.r_on)).exp()
    }

    /// Orbital mixing matrix applied to every hopping block.
    fn orbital_matrix(&self) -> DMatrix<f64> {
        let mut m = DMatrix::identity(self.n_orbitals, self.n_orbitals);
        if self.orbital_mix != 0.0 {
            for a in 0..self.n_orbitals {
                for b in 0..self.n_orbitals {
                    if a != b {
                        m[(a, b)] = self.orbital_mix;
                    }
                }
            }
        }
        m
    }

    /// Hopping block h(xi), zero beyond the cutoff.
    pub fn block(&self, xi: &DVector<f64>) -> DMatrix<f64> {
        let r = xi.norm();
        if r > self.r_cut {
            return DMatrix::zeros(self.n_orbitals, self.n_orbitals);
        }
        self.orbital_matrix() * self.radial(r)
    }

    /// Gradient component i of the hopping block.
    pub fn block_grad(&self, xi: &DVector<f64>, i: usize) -> DMatrix<f64> {
        let r = xi.norm();
        if r > self.r_cut || r == 0.0 {
            return DMatrix::zeros(self.n_orbitals, self.n_orbitals);
        }
        let dradial = -self.gamma0 * self.radial(r);
        self.orbital_matrix() * (dradial * xi[i] / r)
    }

    /// Hessian component (i, j) of the hopping block.
    pub fn block_hess(&self, xi: &DVector<f64>, i: usize, j: usize) -> DMatrix<f64> {
        let r = xi.norm();
        if r > self.r_cut || r == 0.0 {
            return DMatrix::zeros(self.n_orbitals, self.n_orbitals);
        }
        let h = self.radial(r);
        let h1 = -self.gamma0 * h;
        let h2 = self.gamma0 * self.gamma0 * h;
        let unit_i = xi[i] / r;
        let unit_j = xi[j] / r;
        let kron = if i == j { 1.0 } else { 0.0 };
        let scalar = h2 * unit_i * unit_j + h1 * (kron - unit_i * unit_j) / r;
        self.orbital_matrix() * scalar
    }
}

/// Density-dependent on-site term v(rho).
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum OnsiteModel {
    Constant { c: f64 },
    /// v(rho) = u * tanh(rho - rho0)
    Tanh { u: f64, rho0: f64 },
}

impl OnsiteModel {
    pub fn value(&self, rho: f64) -> f64 {
        match self {
            OnsiteModel::Constant { c } => *c,
            OnsiteModel::Tanh { u, rho0 } => u * (rho - rho0).tanh(),
        }
    }

    pub fn derivative(&self, rho: f64) -> f64 {
        match self {
            OnsiteModel::Constant { .. } => 0.0,
            OnsiteModel::Tanh { u, rho0 } => {
                let t = (rho - rho0).tanh();
                u * (1.0 - t * t)
            }
        }
    }

    pub fn second_derivative(&self, rho: f64) -> f64 {
        match self {
            OnsiteModel::Constant { .. } => 0.0,
            OnsiteModel::Tanh { u, rho0 } => {
                let t = (rho - rho0).tanh();
                -2.0 * u * t * (1.0 - t * t)
            }
        }
    }

    pub fn sup_norm(&self) -> f64 {
        match self {
            OnsiteModel::Constant { c } => c.abs(),
            OnsiteModel::Tanh { u, .. } => u.abs(),
        }
    }

    pub fn derivative_sup_norm(&self) -> f64 {
        match self {
            OnsiteModel::Constant { .. } => 0.0,
            OnsiteModel::Tanh { u, .. } => u.abs(),
        }
    }

    pub fn second_derivative_sup_norm(&self) -> f64 {
        match self {
            OnsiteModel::Constant { .. } => 0.0,
            // max of |2 tanh sech^2| = 4 / (3 sqrt 3)
            OnsiteModel::Tanh { u, .. } => u.abs() * 4.0 / (3.0 * 3.0f64.sqrt()),
        }
    }
}

/// Assembled real symmetric Hamiltonian with its (site, orbital) indexing.
#[derive(Debug, Clone)]
pub struct Hamiltonian {
    pub matrix: DMatrix<f64>,
    pub n_sites: usize,
    pub n_orbitals: usize,
}

impl Hamiltonian {
    pub fn dim(&self) -> usize {
        self.n_sites * self.n_orbitals
    }

    pub fn index(&self, site: usize, orbital: usize) -> usize {
        site * self.n_orbitals + orbital
    }
}

fn check_density(rho: &DVector<f64>, n_sites: usize, n_orbitals: usize) -> Result<()> {
    if rho.len() != n_sites {
        return Err(Error::InvalidArgument(format!(
            "density length {} does not match {n_sites} sites",
            rho.len()
        )));
    }
    let nb = n_orbitals as f64;
    for (l, &x) in rho.iter().enumerate() {
        if !(-1e-10..=nb + 1e-10).contains(&x) {
            return Err(Error::InvalidArgument(format!(
                "density at site {l} is {x}, outside [0, {nb}]"
            )));
        }
    }
    Ok(())
}

/// Assemble H(u; rho): hopping over all images within the cutoff plus the
/// on-site diagonal. The result is symmetrised exactly.
pub fn assemble(
    cfg: &Configuration,
    u: &Displacement,
    rho: &DVector<f64>,
    hop: &HoppingModel,
    onsite: &OnsiteModel,
) -> Result<Hamiltonian> {
    let n = cfg.n_sites();
    let no = hop.n_orbitals;
    check_density(rho, n, no)?;
    if n > 1 {
        let m = noninterpenetration_constant(cfg, u)?;
        if m <= 0.0 {
            return Err(Error::Geometry(format!(
                "non-interpenetration constant is {m}; displaced sites coincide"
            )));
        }
    }

    let u_max = u.norm_inf();
    let reach = hop.r_cut + 2.0 * u_max + 1.0;
    let mut h = DMatrix::zeros(n * no, n * no);

    for l in 0..n {
        for k in 0..=l {
            let mut block = DMatrix::zeros(no, no);
            let du = &u.u[l] - &u.u[k];
            for img in cfg.image_vectors(l, k, reach) {
                let xi = img + &du;
                if xi.norm() <= hop.r_cut {
                    block += hop.block(&xi);
                }
            }
            if l == k {
                let shift = hop.shift_for(cfg.species[l]) + onsite.value(rho[l]);
                for a in 0..no {
                    block[(a, a)] += shift;
                }
                // self-image sums are symmetric already; enforce exactly
                let sym = (&block + block.transpose()) * 0.5;
                h.view_mut((l * no, l * no), (no, no)).copy_from(&sym);
            } else {
                h.view_mut((l * no, k * no), (no, no)).copy_from(&block);
                h.view_mut((k * no, l * no), (no, no))
                    .copy_from(&block.transpose());
            }
        }
    }

    Ok(Hamiltonian {
        matrix: h,
        n_sites: n,
        n_orbitals: no,
    })
}

/// Derivative of the linear Hamiltonian with respect to one displacement
/// component. Nonzero only in the row/column blocks touching `center`.
#[derive(Debug, Clone)]
pub struct HamiltonianDerivative {
    pub center: usize,
    pub direction: usize,
    /// (site k, d h(m,k) block / d [u(m)]_i) for k != center.
    pub blocks: Vec<(usize, DMatrix<f64>)>,
    pub n_sites: usize,
    pub n_orbitals: usize,
}

impl HamiltonianDerivative {
    pub fn to_dense(&self) -> DMatrix<f64> {
        let no = self.n_orbitals;
        let nn = self.n_sites * no;
        let m = self.center;
        let mut out = DMatrix::zeros(nn, nn);
        for (k, blk) in &self.blocks {
            let mut view = out.view_mut((m * no, k * no), (no, no));
            view += blk;
            let mut view = out.view_mut((k * no, m * no), (no, no));
            view += blk.transpose();
        }
        out
    }
}

/// d H^L / d [u(m)]_i as sparse row/column blocks.
pub fn hamiltonian_derivative(
    cfg: &Configuration,
    u: &Displacement,
    hop: &HoppingModel,
    m: usize,
    i: usize,
) -> Result<HamiltonianDerivative> {
    let n = cfg.n_sites();
    if m >= n || i >= cfg.dim {
        return Err(Error::InvalidArgument(format!(
            "derivative site {m} / direction {i} out of range"
        )));
    }
    let u_max = u.norm_inf();
    let reach = hop.r_cut + 2.0 * u_max + 1.0;
    let mut blocks = Vec::new();
    for k in 0..n {
        if k == m {
            continue;
        }
        let du = &u.u[m] - &u.u[k];
        let mut blk = DMatrix::zeros(hop.n_orbitals, hop.n_orbitals);
        let mut any = false;
        for img in cfg.image_vectors(m, k, reach) {
            let xi = img + &du;
            if xi.norm() <= hop.r_cut {
                blk += hop.block_grad(&xi, i);
                any = true;
            }
        }
        if any {
            blocks.push((k, blk));
        }
    }
    Ok(HamiltonianDerivative {
        center: m,
        direction: i,
        blocks,
        n_sites: n,
        n_orbitals: hop.n_orbitals,
    })
}

/// d^2 H^L / d[u(m)]_i d[u(n)]_j as a dense matrix.
pub fn hamiltonian_second_derivative(
    cfg: &Configuration,
    u: &Displacement,
    hop: &HoppingModel,
    m: usize,
    i: usize,
    n_site: usize,
    j: usize,
) -> Result<DMatrix<f64>> {
    let n = cfg.n_sites();
    let no = hop.n_orbitals;
    if m >= n || n_site >= n || i >= cfg.dim || j >= cfg.dim {
        return Err(Error::InvalidArgument(
            "second-derivative indices out of range".into(),
        ));
    }
    let u_max = u.norm_inf();
    let reach = hop.r_cut + 2.0 * u_max + 1.0;
    let mut out = DMatrix::zeros(n * no, n * no);
    let add_pair = |l: usize, k: usize, sign: f64, out: &mut DMatrix<f64>| {
        let du = &u.u[l] - &u.u[k];
        let mut blk = DMatrix::zeros(no, no);
        for img in cfg.image_vectors(l, k, reach) {
            let xi = img + du.clone();
            if xi.norm() <= hop.r_cut {
                blk += hop.block_hess(&xi, i, j);
            }
        }
        blk *= sign;
        let mut view = out.view_mut((l * no, k * no), (no, no));
        view += &blk;
        let mut view = out.view_mut((k * no, l * no), (no, no));
        view += blk.transpose();
    };
    if m == n_site {
        for k in 0..n {
            if k != m {
                add_pair(m, k, 1.0, &mut out);
            }
        }
    } else {
        add_pair(m, n_site, -1.0, &mut out);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::lattice::build_chain;
    use approx::assert_relative_eq;
    use rand::prelude::*;
    use rand_chacha::ChaCha8Rng;

    fn unit_hop() -> HoppingModel {
        HoppingModel::new(1.0, 1.0, 1.0, 1).unwrap()
    }

    fn disp1(vals: &[f64]) -> Displacement {
        Displacement {
            u: vals.iter().map(|&v| DVector::from_vec(vec![v])).collect(),
        }
    }

    #[test]
    fn dimer_matrix() {
        let cfg = build_chain(2, 1.0).unwrap();
        let u = Displacement::zeros(&cfg);
        let rho = DVector::zeros(2);
        let onsite = OnsiteModel::Constant { c: 0.0 };
        let h = assemble(&cfg, &u, &rho, &unit_hop(), &onsite).unwrap();
        assert_relative_eq!(h.matrix[(0, 0)], 0.0);
        assert_relative_eq!(h.matrix[(0, 1)], -1.0);
        assert_relative_eq!(h.matrix[(1, 0)], -1.0);
        assert_relative_eq!(h.matrix[(1, 1)], 0.0);
    }

    #[test]
    fn single_atom_tanh_onsite() {
        let cfg = build_chain(1, 1.0).unwrap();
        let u = Displacement::zeros(&cfg);
        let rho = DVector::zeros(1);
        let onsite = OnsiteModel::Tanh { u: 1.0, rho0: 0.0 };
        let h = assemble(&cfg, &u, &rho, &unit_hop(), &onsite).unwrap();
        assert_eq!(h.matrix[(0, 0)], 0.0);
    }

    #[test]
    fn random_u_exactly_symmetric() {
        let cfg = build_chain(5, 1.0).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let u = disp1(&(0..5).map(|_| 0.2 * rng.gen::<f64>() - 0.1).collect::<Vec<_>>());
        let rho = DVector::from_element(5, 0.5);
        let onsite = OnsiteModel::Tanh { u: 0.4, rho0: 0.5 };
        let h = assemble(&cfg, &u, &rho, &unit_hop(), &onsite).unwrap();
        let asym = (&h.matrix - h.matrix.transpose()).abs().max();
        assert_eq!(asym, 0.0);
    }

    #[test]
    fn translational_invariance_exact_on_dyadic_shift() {
        let cfg = build_chain(6, 1.0).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        // dyadic displacement entries keep u + c exact in floating point
        let vals: Vec<f64> = (0..6)
            .map(|_| (rng.gen_range(-64i32..64) as f64) / 1024.0)
            .collect();
        let u = disp1(&vals);
        let shifted = disp1(&vals.iter().map(|v| v + 1.0).collect::<Vec<_>>());
        let rho = DVector::from_element(6, 0.5);
        let onsite = OnsiteModel::Tanh { u: 0.4, rho0: 0.5 };
        let a = assemble(&cfg, &u, &rho, &unit_hop(), &onsite).unwrap();
        let b = assemble(&cfg, &shifted, &rho, &unit_hop(), &onsite).unwrap();
        assert_eq!((&a.matrix - &b.matrix).abs().max(), 0.0);
    }

    #[test]
    fn entrywise_decay_bound() {
        let cfg = build_chain(8, 1.2).unwrap();
        let u = Displacement::zeros(&cfg);
        let rho = DVector::from_element(8, 0.5);
        let hop = HoppingModel::new(1.5, 2.0, 1.0, 1).unwrap();
        let onsite = OnsiteModel::Constant { c: 0.3 };
        let h = assemble(&cfg, &u, &rho, &hop, &onsite).unwrap();
        for l in 0..8 {
            for k in 0..8 {
                if l != k {
                    let r = cfg.pair_distance(l, k);
                    let bound = hop.h0 * (-hop.gamma0 * (r - hop.r_on)).exp();
                    assert!(h.matrix[(l, k)].abs() <= bound + 1e-15);
                }
            }
        }
    }

    #[test]
    fn density_out_of_range_rejected() {
        let cfg = build_chain(2, 1.0).unwrap();
        let u = Displacement::zeros(&cfg);
        let rho = DVector::from_vec(vec![0.5, 1.5]);
        let onsite = OnsiteModel::Constant { c: 0.0 };
        assert!(assemble(&cfg, &u, &rho, &unit_hop(), &onsite).is_err());
    }

    #[test]
    fn coincident_sites_rejected() {
        let cfg = build_chain(2, 1.0).unwrap();
        let u = disp1(&[0.5, -0.5]);
        let rho = DVector::zeros(2);
        let onsite = OnsiteModel::Constant { c: 0.0 };
        assert!(assemble(&cfg, &u, &rho, &unit_hop(), &onsite).is_err());
    }

    #[test]
    fn derivative_matches_finite_difference() {
        let cfg = build_chain(2, 1.0).unwrap();
        let hop = unit_hop();
        let u = Displacement::zeros(&cfg);
        let d = hamiltonian_derivative(&cfg, &u, &hop, 1, 0)
            .unwrap()
            .to_dense();

        let fd = |t: f64| {
            let ut = disp1(&[0.0, t]);
            let rho = DVector::zeros(2);
            assemble(&cfg, &ut, &rho, &hop, &OnsiteModel::Constant { c: 0.0 })
                .unwrap()
                .matrix
        };
        let h = 1e-6;
        let fd_mat = (fd(h) - fd(-h)) / (2.0 * h);
        assert!((&d - &fd_mat).abs().max() < 1e-6);
        // the (0,1) entry equals d/dt h(1 + t) = gamma0 h0 = 1
        assert_relative_eq!(d[(0, 1)], 1.0, max_relative = 1e-12);
    }

    #[test]
    fn derivative_of_isolated_site_is_zero() {
        // far beyond the cutoff: derivative must vanish identically
        let mut cfg = build_chain(2, 1.0).unwrap();
        cfg.sites[1][0] = 1e6;
        let hop = unit_hop();
        let u = Displacement::zeros(&cfg);
        let d = hamiltonian_derivative(&cfg, &u, &hop, 1, 0).unwrap();
        assert!(d.blocks.is_empty());
    }

    #[test]
    fn directional_derivative_matches_assemble() {
        let cfg = build_chain(5, 1.1).unwrap();
        let hop = HoppingModel::new(1.0, 1.5, 1.0, 1).unwrap();
        let onsite = OnsiteModel::Constant { c: 0.0 };
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let base: Vec<f64> = (0..5).map(|_| 0.1 * rng.gen::<f64>()).collect();
        let dir: Vec<f64> = (0..5).map(|_| rng.gen::<f64>() - 0.5).collect();

        let mut analytic = DMatrix::zeros(5, 5);
        for m in 0..5 {
            let u = disp1(&base);
            let d = hamiltonian_derivative(&cfg, &u, &hop, m, 0).unwrap();
            analytic += d.to_dense() * dir[m];
        }

        let rho = DVector::from_element(5, 0.0);
        let eval = |t: f64| {
            let vals: Vec<f64> = base.iter().zip(&dir).map(|(b, d)| b + t * d).collect();
            assemble(&cfg, &disp1(&vals), &rho, &hop, &onsite)
                .unwrap()
                .matrix
        };
        let h = 1e-6;
        let fd = (eval(h) - eval(-h)) / (2.0 * h);
        assert!((&analytic - &fd).abs().max() < 1e-6);
    }

    #[test]
    fn second_derivative_matches_fd_of_derivative() {
        let cfg = build_chain(4, 1.0).unwrap();
        let hop = HoppingModel::new(1.0, 1.5, 1.0, 1).unwrap();
        let base = disp1(&[0.0, 0.05, -0.03, 0.01]);

        for (m, n) in [(1, 2), (2, 2)] {
            let s = hamiltonian_second_derivative(&cfg, &base, &hop, m, 0, n, 0).unwrap();
            let h = 1e-5;
            let fd = {
                let mut up = base.clone();
                up.u[n][0] += h;
                let mut dn = base.clone();
                dn.u[n][0] -= h;
                (hamiltonian_derivative(&cfg, &up, &hop, m, 0)
                    .unwrap()
                    .to_dense()
                    - hamiltonian_derivative(&cfg, &dn, &hop, m, 0)
                        .unwrap()
                        .to_dense())
                    / (2.0 * h)
            };
            assert!(
                (&s - &fd).abs().max() < 1e-6,
                "mismatch for m={m}, n={n}: {}",
                (&s - &fd).abs().max()
            );
        }
    }

    #[test]
    fn two_orbital_variant_symmetric_and_mixed() {
        let cfg = build_chain(3, 1.0).unwrap();
        let mut hop = HoppingModel::new(1.0, 1.0, 1.0, 2).unwrap();
        hop.orbital_mix = 0.3;
        let u = Displacement::zeros(&cfg);
        let rho = DVector::from_element(3, 1.0);
        let onsite = OnsiteModel::Constant { c: 0.0 };
        let h = assemble(&cfg, &u, &rho, &hop, &onsite).unwrap();
        assert_eq!(h.dim(), 6);
        assert_eq!((&h.matrix - h.matrix.transpose()).abs().max(), 0.0);
        assert_relative_eq!(h.matrix[(0, 3)], -0.3); // orbital 0 - orbital 1 hop
        assert_relative_eq!(h.matrix[(0, 2)], -1.0);
    }

    #[test]
    fn onsite_derivative_closed_forms() {
        let onsite = OnsiteModel::Tanh { u: 0.7, rho0: 0.4 };
        let h = 1e-6;
        for rho in [0.1, 0.4, 0.9] {
            let fd = (onsite.value(rho + h) - onsite.value(rho - h)) / (2.0 * h);
            assert_relative_eq!(onsite.derivative(rho), fd, max_relative = 1e-8);
            let fd2 = (onsite.derivative(rho + h) - onsite.derivative(rho - h)) / (2.0 * h);
            assert_relative_eq!(onsite.second_derivative(rho), fd2, max_relative = 1e-6);
        }
        assert_relative_eq!(onsite.sup_norm(), 0.7);
        assert_relative_eq!(onsite.derivative_sup_norm(), 0.7);
    }
}
