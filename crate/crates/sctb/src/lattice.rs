//! Finite atomic configurations, reference multi-lattices, point defects and
//! displacement fields.
//!
//! A [`Configuration`] is a finite set of sites in R^d, optionally carrying
//! periodic-cell metadata (cell matrix, basis offsets, repeat counts). All
//! distances on periodic configurations are evaluated over lattice images of
//! the supercell, so the same code serves open clusters and periodic rings.

use nalgebra::{DMatrix, DVector};
use std::fmt::Write as _;

use crate::error::{Error, Result};

/// Periodic-cell metadata: supercell = `matrix * diag(repeats)`.
#[derive(Debug, Clone)]
pub struct PeriodicCell {
    /// Lattice matrix A (columns are primitive cell vectors).
    pub matrix: DMatrix<f64>,
    /// Basis offsets of the unit cell (each contains the origin cell's sites).
    pub basis: Vec<DVector<f64>>,
    /// Repeat count per axis.
    pub repeats: Vec<usize>,
    /// Whether distances wrap around the supercell.
    pub periodic: bool,
}

impl PeriodicCell {
    /// Supercell translation matrix `A * diag(repeats)`.
    pub fn supercell_matrix(&self) -> DMatrix<f64> {
        let d = self.matrix.nrows();
        let mut m = self.matrix.clone();
        for j in 0..d {
            let r = self.repeats[j] as f64;
            for i in 0..d {
                m[(i, j)] *= r;
            }
        }
        m
    }
}

/// A finite atomic configuration.
#[derive(Debug, Clone)]
pub struct Configuration {
    pub dim: usize,
    pub sites: Vec<DVector<f64>>,
    pub species: Vec<u32>,
    pub cell: Option<PeriodicCell>,
    /// Radius of the ball (about the defect center) containing all defect edits.
    pub defect_radius: Option<f64>,
    /// Defect center; the origin unless a translated edit position was recorded.
    pub defect_center: Option<DVector<f64>>,
}

/// A point-defect edit applied to a configuration.
#[derive(Debug, Clone)]
pub enum DefectEdit {
    Vacancy { site: usize },
    Interstitial { position: Vec<f64>, species: u32 },
    Substitution { site: usize, species: u32 },
}

/// Per-site displacement field paired with its host configuration size.
#[derive(Debug, Clone)]
pub struct Displacement {
    pub u: Vec<DVector<f64>>,
}

impl Displacement {
    pub fn zeros(cfg: &Configuration) -> Self {
        Self {
            u: vec![DVector::zeros(cfg.dim); cfg.sites.len()],
        }
    }

    pub fn len(&self) -> usize {
        self.u.len()
    }

    pub fn is_empty(&self) -> bool {
        self.u.is_empty()
    }

    /// Componentwise a*x + y.
    pub fn axpy(&mut self, a: f64, x: &Displacement) {
        for (ui, xi) in self.u.iter_mut().zip(&x.u) {
            ui.axpy(a, xi, 1.0);
        }
    }

    pub fn sub(&self, other: &Displacement) -> Displacement {
        Displacement {
            u: self
                .u
                .iter()
                .zip(&other.u)
                .map(|(a, b)| a - b)
                .collect(),
        }
    }

    pub fn norm_inf(&self) -> f64 {
        self.u
            .iter()
            .flat_map(|v| v.iter())
            .fold(0.0, |m, x| m.max(x.abs()))
    }
}

/// Exponent and cutoff of the weighted finite-difference stencil.
#[derive(Debug, Clone, Copy)]
pub struct StencilWeights {
    pub upsilon: f64,
    pub cutoff: f64,
}

impl StencilWeights {
    /// Cutoff chosen so the dropped tail weight e^{-2*upsilon*cutoff} is below 1e-14.
    pub fn with_default_cutoff(upsilon: f64) -> Result<Self> {
        if upsilon <= 0.0 {
            return Err(Error::InvalidArgument(format!(
                "stencil exponent must be positive, got {upsilon}"
            )));
        }
        let cutoff = 14.0 * std::f64::consts::LN_10 / (2.0 * upsilon) + 1.0;
        Ok(Self { upsilon, cutoff })
    }

    pub fn new(upsilon: f64, cutoff: f64) -> Result<Self> {
        if upsilon <= 0.0 || cutoff <= 0.0 {
            return Err(Error::InvalidArgument(format!(
                "stencil weights require upsilon > 0, cutoff > 0 (got {upsilon}, {cutoff})"
            )));
        }
        Ok(Self { upsilon, cutoff })
    }
}

impl Configuration {
    pub fn n_sites(&self) -> usize {
        self.sites.len()
    }

    /// Shift every site (and the recorded defect center) by `offset`.
    pub fn translate(&mut self, offset: &DVector<f64>) {
        for s in &mut self.sites {
            *s += offset;
        }
        if let Some(c) = &mut self.defect_center {
            *c += offset;
        }
    }

    fn supercell(&self) -> Option<DMatrix<f64>> {
        self.cell
            .as_ref()
            .filter(|c| c.periodic)
            .map(|c| c.supercell_matrix())
    }

    /// Reference pair vector from k to l, minimum image if periodic.
    pub fn pair_vector(&self, l: usize, k: usize) -> DVector<f64> {
        let raw = &self.sites[l] - &self.sites[k];
        match self.supercell() {
            Some(sc) => minimum_image(&raw, &sc),
            None => raw,
        }
    }

    /// Reference pair distance, minimum image if periodic.
    pub fn pair_distance(&self, l: usize, k: usize) -> f64 {
        self.pair_vector(l, k).norm()
    }

    /// Displaced pair vector r_lk(u) = (pos_l + u_l) - (pos_k + u_k), taking the
    /// image nearest in the reference geometry when periodic.
    pub fn displaced_pair_vector(&self, l: usize, k: usize, u: &Displacement) -> DVector<f64> {
        self.pair_vector(l, k) + &u.u[l] - &u.u[k]
    }

    pub fn displaced_pair_distance(&self, l: usize, k: usize, u: &Displacement) -> f64 {
        self.displaced_pair_vector(l, k, u).norm()
    }

    /// All reference image vectors from k to l with norm at most `cutoff`.
    ///
    /// Open configurations yield at most the single direct vector. Periodic
    /// ones enumerate supercell translations, which is what keeps finite
    /// supercells unitarily equivalent to their Bloch decomposition.
    pub fn image_vectors(&self, l: usize, k: usize, cutoff: f64) -> Vec<DVector<f64>> {
        let raw = &self.sites[l] - &self.sites[k];
        match self.supercell() {
            None => {
                if l != k && raw.norm() <= cutoff {
                    vec![raw]
                } else {
                    vec![]
                }
            }
            Some(sc) => {
                let mut out = Vec::new();
                for t in lattice_translations(&sc, &raw, cutoff) {
                    let v = &raw + &t;
                    let is_self = l == k && t.norm() == 0.0;
                    if !is_self && v.norm() <= cutoff {
                        out.push(v);
                    }
                }
                out
            }
        }
    }

    /// Distance from site `l` to the defect center (minimum image if periodic).
    pub fn distance_to_defect(&self, l: usize) -> Option<f64> {
        let c = self.defect_center.as_ref()?;
        let raw = &self.sites[l] - c;
        let v = match self.supercell() {
            Some(sc) => minimum_image(&raw, &sc),
            None => raw,
        };
        Some(v.norm())
    }

    fn check_no_coincident(&self) -> Result<()> {
        let n = self.n_sites();
        for l in 0..n {
            for k in (l + 1)..n {
                if self.pair_distance(l, k) == 0.0 {
                    return Err(Error::Geometry(format!("sites {l} and {k} coincide")));
                }
            }
        }
        Ok(())
    }

    /// Serialize to the plain text site-list format.
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "# dim {}", self.dim);
        if let Some(cell) = &self.cell {
            let flat: Vec<String> = cell.matrix.iter().map(|x| format!("{x:.17e}")).collect();
            let _ = writeln!(s, "# cell {}", flat.join(" "));
            for b in &cell.basis {
                let row: Vec<String> = b.iter().map(|x| format!("{x:.17e}")).collect();
                let _ = writeln!(s, "# basis {}", row.join(" "));
            }
            let reps: Vec<String> = cell.repeats.iter().map(|r| r.to_string()).collect();
            let _ = writeln!(s, "# repeats {}", reps.join(" "));
            let _ = writeln!(s, "# periodic {}", u8::from(cell.periodic));
        }
        if let Some(r) = self.defect_radius {
            let _ = writeln!(s, "# r_def {r:.17e}");
        }
        if let Some(c) = &self.defect_center {
            let row: Vec<String> = c.iter().map(|x| format!("{x:.17e}")).collect();
            let _ = writeln!(s, "# defect_center {}", row.join(" "));
        }
        for (pos, sp) in self.sites.iter().zip(&self.species) {
            let row: Vec<String> = pos.iter().map(|x| format!("{x:.17e}")).collect();
            let _ = writeln!(s, "{} {}", row.join(" "), sp);
        }
        s
    }

    /// Parse the text site-list format written by [`Configuration::to_text`].
    pub fn from_text(text: &str) -> Result<Self> {
        let mut dim = None;
        let mut cell_matrix: Option<Vec<f64>> = None;
        let mut basis: Vec<DVector<f64>> = Vec::new();
        let mut repeats: Option<Vec<usize>> = None;
        let mut periodic = false;
        let mut defect_radius = None;
        let mut defect_center = None;
        let mut sites = Vec::new();
        let mut species = Vec::new();

        let parse_floats = |s: &str| -> Result<Vec<f64>> {
            s.split_whitespace()
                .map(|t| {
                    t.parse::<f64>()
                        .map_err(|e| Error::Config(format!("bad number {t:?}: {e}")))
                })
                .collect()
        };

        for line in text.lines() {
            let line = line.trim();
            if line.is_empty() {
                continue;
            }
            if let Some(rest) = line.strip_prefix('#') {
                let rest = rest.trim();
                if let Some(v) = rest.strip_prefix("dim ") {
                    dim = Some(
                        v.trim()
                            .parse::<usize>()
                            .map_err(|e| Error::Config(format!("bad dim: {e}")))?,
                    );
                } else if let Some(v) = rest.strip_prefix("cell ") {
                    cell_matrix = Some(parse_floats(v)?);
                } else if let Some(v) = rest.strip_prefix("basis ") {
                    basis.push(DVector::from_vec(parse_floats(v)?));
                } else if let Some(v) = rest.strip_prefix("repeats ") {
                    repeats = Some(
                        v.split_whitespace()
                            .map(|t| {
                                t.parse::<usize>()
                                    .map_err(|e| Error::Config(format!("bad repeat: {e}")))
                            })
                            .collect::<Result<_>>()?,
                    );
                } else if let Some(v) = rest.strip_prefix("periodic ") {
                    periodic = v.trim() == "1";
                } else if let Some(v) = rest.strip_prefix("r_def ") {
                    defect_radius = Some(parse_floats(v)?[0]);
                } else if let Some(v) = rest.strip_prefix("defect_center ") {
                    defect_center = Some(DVector::from_vec(parse_floats(v)?));
                }
                continue;
            }
            let mut nums = parse_floats(line)?;
            let sp = nums
                .pop()
                .ok_or_else(|| Error::Config("empty site line".into()))? as u32;
            sites.push(DVector::from_vec(nums));
            species.push(sp);
        }

        let dim = dim.ok_or_else(|| Error::Config("missing '# dim' header".into()))?;
        for s in &sites {
            if s.len() != dim {
                return Err(Error::Config("site dimension mismatch".into()));
            }
        }
        let cell = match cell_matrix {
            None => None,
            Some(flat) => {
                let m = DMatrix::from_iterator(dim, dim, flat.into_iter());
                Some(PeriodicCell {
                    matrix: m,
                    basis,
                    repeats: repeats.unwrap_or_else(|| vec![1; dim]),
                    periodic,
                })
            }
        };
        let cfg = Configuration {
            dim,
            sites,
            species,
            cell,
            defect_radius,
            defect_center,
        };
        cfg.check_no_coincident()?;
        Ok(cfg)
    }
}

/// Wrap `v` into the minimum-image representative of the supercell `sc`.
fn minimum_image(v: &DVector<f64>, sc: &DMatrix<f64>) -> DVector<f64> {
    let d = v.len();
    let frac = sc
        .clone()
        .lu()
        .solve(v)
        .expect("supercell matrix is non-singular");
    let rounded: DVector<f64> = frac.map(|x| x.round());
    let mut best = v - sc * &rounded;
    let mut best_norm = best.norm();
    // Search neighbouring images; exact for the skew levels used here.
    let mut shift = vec![0i64; d];
    loop {
        let t: DVector<f64> = DVector::from_fn(d, |i, _| rounded[i] + shift[i] as f64);
        let cand = v - sc * &t;
        let norm = cand.norm();
        if norm < best_norm {
            best_norm = norm;
            best = cand;
        }
        // advance odometer over {-1,0,1}^d
        let mut i = 0;
        loop {
            if i == d {
                return best;
            }
            shift[i] += 1;
            if shift[i] > 1 {
                shift[i] = -1;
                i += 1;
            } else {
                break;
            }
        }
    }
}

/// All supercell translations t with |raw + t| <= cutoff.
fn lattice_translations(sc: &DMatrix<f64>, raw: &DVector<f64>, cutoff: f64) -> Vec<DVector<f64>> {
    let d = raw.len();
    // Per-axis bound: smallest extent of a cell vector.
    let mut min_extent = f64::INFINITY;
    for j in 0..d {
        min_extent = min_extent.min(sc.column(j).norm());
    }
    let reach = ((cutoff + raw.norm()) / min_extent).ceil() as i64 + 1;
    let mut out = Vec::new();
    let mut idx = vec![-reach; d];
    loop {
        let t: DVector<f64> = {
            let mut v = DVector::zeros(d);
            for j in 0..d {
                v += sc.column(j) * idx[j] as f64;
            }
            v
        };
        if (raw + &t).norm() <= cutoff {
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

/// Build an open 1D chain of `n` sites with lattice constant `a`.
pub fn build_chain(n: usize, a: f64) -> Result<Configuration> {
    if n < 1 || a <= 0.0 {
        return Err(Error::InvalidArgument(format!(
            "chain requires n >= 1 and a > 0 (got n = {n}, a = {a})"
        )));
    }
    let sites = (0..n)
        .map(|i| DVector::from_vec(vec![i as f64 * a]))
        .collect();
    Ok(Configuration {
        dim: 1,
        sites,
        species: vec![0; n],
        cell: None,
        defect_radius: None,
        defect_center: None,
    })
}

/// Build a multi-lattice: basis offsets repeated over an integer box of cells.
pub fn build_multilattice(
    a: &DMatrix<f64>,
    basis: &[DVector<f64>],
    repeats: &[usize],
    periodic: bool,
) -> Result<Configuration> {
    let d = a.nrows();
    if a.ncols() != d {
        return Err(Error::InvalidArgument("cell matrix must be square".into()));
    }
    if a.determinant().abs() < 1e-14 {
        return Err(Error::InvalidArgument("cell matrix is singular".into()));
    }
    if repeats.len() != d || repeats.iter().any(|&r| r < 1) {
        return Err(Error::InvalidArgument(format!(
            "repeats must give >= 1 per axis, got {repeats:?}"
        )));
    }
    if basis.is_empty() {
        return Err(Error::InvalidArgument("empty unit cell".into()));
    }
    let mut sites = Vec::new();
    let mut species = Vec::new();
    let mut idx = vec![0usize; d];
    loop {
        for (b, off) in basis.iter().enumerate() {
            let mut pos = off.clone();
            for j in 0..d {
                pos += a.column(j) * idx[j] as f64;
            }
            sites.push(pos);
            species.push(b as u32);
        }
        let mut i = 0;
        loop {
            if i == d {
                let cfg = Configuration {
                    dim: d,
                    sites,
                    species,
                    cell: Some(PeriodicCell {
                        matrix: a.clone(),
                        basis: basis.to_vec(),
                        repeats: repeats.to_vec(),
                        periodic,
                    }),
                    defect_radius: None,
                    defect_center: None,
                };
                cfg.check_no_coincident()?;
                return Ok(cfg);
            }
            idx[i] += 1;
            if idx[i] >= repeats[i] {
                idx[i] = 0;
                i += 1;
            } else {
                break;
            }
        }
    }
}

/// Apply a point-defect edit, recording the defect ball.
///
/// `declared_r_def` bounds where edits may occur; exceeding it is an error.
/// The recorded radius is the smallest origin-centered ball containing the
/// edit, so defect experiments should place the defect at the origin.
pub fn apply_point_defect(
    cfg: &Configuration,
    edit: &DefectEdit,
    declared_r_def: Option<f64>,
) -> Result<Configuration> {
    let mut out = cfg.clone();
    let edit_pos: DVector<f64> = match edit {
        DefectEdit::Vacancy { site } => {
            if *site >= cfg.n_sites() {
                return Err(Error::InvalidArgument(format!(
                    "vacancy site {site} out of range"
                )));
            }
            let pos = cfg.sites[*site].clone();
            out.sites.remove(*site);
            out.species.remove(*site);
            pos
        }
        DefectEdit::Interstitial { position, species } => {
            if position.len() != cfg.dim {
                return Err(Error::InvalidArgument(
                    "interstitial position dimension mismatch".into(),
                ));
            }
            let pos = DVector::from_vec(position.clone());
            out.sites.push(pos.clone());
            out.species.push(*species);
            pos
        }
        DefectEdit::Substitution { site, species } => {
            if *site >= cfg.n_sites() {
                return Err(Error::InvalidArgument(format!(
                    "substitution site {site} out of range"
                )));
            }
            out.species[*site] = *species;
            cfg.sites[*site].clone()
        }
    };
    let r = edit_pos.norm();
    if let Some(declared) = declared_r_def {
        if r > declared {
            return Err(Error::InvalidArgument(format!(
                "edit at radius {r:.3} lies outside the declared defect ball {declared:.3}"
            )));
        }
    }
    out.defect_radius = Some(out.defect_radius.unwrap_or(0.0).max(r));
    out.defect_center = Some(DVector::zeros(cfg.dim));
    out.check_no_coincident()?;
    Ok(out)
}

/// Uniform non-interpenetration constant: min over pairs of r_lk(u) / |l - k|.
pub fn noninterpenetration_constant(cfg: &Configuration, u: &Displacement) -> Result<f64> {
    let n = cfg.n_sites();
    if n < 2 {
        return Err(Error::Undefined(
            "non-interpenetration needs at least two sites".into(),
        ));
    }
    if u.len() != n {
        return Err(Error::InvalidArgument(format!(
            "displacement length {} does not match site count {n}",
            u.len()
        )));
    }
    let sc = cfg.supercell();
    let mut m = f64::INFINITY;
    for l in 0..n {
        for k in 0..=l {
            let raw = &cfg.sites[l] - &cfg.sites[k];
            let du = &u.u[l] - &u.u[k];
            match &sc {
                None => {
                    if l != k {
                        m = m.min((&raw + &du).norm() / raw.norm());
                    }
                }
                Some(sc) => {
                    // Direct image plus the surrounding shell; farther images
                    // only push the ratio towards 1.
                    for t in lattice_translations(sc, &raw, 2.0 * supercell_diameter(sc)) {
                        let sep = &raw + &t;
                        let r0 = sep.norm();
                        if r0 == 0.0 {
                            continue;
                        }
                        m = m.min((sep + &du).norm() / r0);
                    }
                }
            }
        }
    }
    Ok(m)
}

fn supercell_diameter(sc: &DMatrix<f64>) -> f64 {
    let d = sc.nrows();
    (0..d).map(|j| sc.column(j).norm()).sum()
}

/// Squared stencil value: sum_l sum_{0<|sigma|<=cutoff} e^{-2*upsilon*|sigma|} |D_sigma u(l)|^2.
pub fn stencil_seminorm_squared(
    cfg: &Configuration,
    u: &Displacement,
    w: &StencilWeights,
) -> Result<f64> {
    let n = cfg.n_sites();
    if u.len() != n {
        return Err(Error::InvalidArgument(format!(
            "displacement length {} does not match site count {n}",
            u.len()
        )));
    }
    let mut total = 0.0;
    for l in 0..n {
        for lp in 0..n {
            if lp == l && cfg.supercell().is_none() {
                continue;
            }
            let diff = &u.u[lp] - &u.u[l];
            let d2 = diff.norm_squared();
            for sigma in cfg.image_vectors(lp, l, w.cutoff) {
                let r = sigma.norm();
                if r == 0.0 {
                    continue;
                }
                total += (-2.0 * w.upsilon * r).exp() * d2;
            }
        }
    }
    Ok(total)
}

/// Weighted finite-difference seminorm ||Du||.
pub fn stencil_seminorm(cfg: &Configuration, u: &Displacement, w: &StencilWeights) -> Result<f64> {
    Ok(stencil_seminorm_squared(cfg, u, w)?.sqrt())
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use proptest::prelude::*;

    fn disp(_cfg: &Configuration, vals: &[f64]) -> Displacement {
        Displacement {
            u: vals.iter().map(|&v| DVector::from_vec(vec![v])).collect(),
        }
    }

    #[test]
    fn chain_basic() {
        let c = build_chain(2, 1.0).unwrap();
        assert_eq!(c.sites[0][0], 0.0);
        assert_eq!(c.sites[1][0], 1.0);

        let single = build_chain(1, 2.0).unwrap();
        assert_eq!(single.n_sites(), 1);
        assert_eq!(single.sites[0][0], 0.0);

        let five = build_chain(5, 1.0).unwrap();
        assert_eq!(five.pair_distance(0, 4), 4.0);

        assert!(build_chain(0, 1.0).is_err());
        assert!(build_chain(3, -1.0).is_err());
    }

    #[test]
    fn multilattice_counts() {
        let a1 = DMatrix::from_vec(1, 1, vec![1.0]);
        let ring = build_multilattice(&a1, &[DVector::zeros(1)], &[4], true).unwrap();
        assert_eq!(ring.n_sites(), 4);
        // ring distance wraps: site 0 to site 3 is one lattice constant
        assert_relative_eq!(ring.pair_distance(0, 3), 1.0);

        let a2 = DMatrix::identity(2, 2);
        let basis = vec![
            DVector::from_vec(vec![0.0, 0.0]),
            DVector::from_vec(vec![0.5, 0.5]),
        ];
        let latt = build_multilattice(&a2, &basis, &[2, 2], false).unwrap();
        assert_eq!(latt.n_sites(), 8);

        let latt3 = build_multilattice(&a1, &[DVector::zeros(1)], &[7], false).unwrap();
        assert_eq!(latt3.n_sites(), 7);

        let singular = DMatrix::from_vec(2, 2, vec![1.0, 1.0, 1.0, 1.0]);
        assert!(build_multilattice(&singular, &basis, &[2, 2], false).is_err());
    }

    #[test]
    fn vacancy_at_centered_origin() {
        let mut chain = build_chain(9, 1.0).unwrap();
        chain.translate(&DVector::from_vec(vec![-4.0]));
        let defected =
            apply_point_defect(&chain, &DefectEdit::Vacancy { site: 4 }, Some(0.5)).unwrap();
        assert_eq!(defected.n_sites(), 8);
        assert_eq!(defected.defect_radius, Some(0.0));
        // outside the defect ball the configuration matches the reference
        for s in &defected.sites {
            assert!(chain.sites.iter().any(|r| (r - s).norm() == 0.0));
        }
    }

    #[test]
    fn substitution_keeps_geometry() {
        let chain = build_chain(9, 1.0).unwrap();
        let defected = apply_point_defect(
            &chain,
            &DefectEdit::Substitution { site: 4, species: 1 },
            Some(5.0),
        )
        .unwrap();
        assert_eq!(defected.n_sites(), 9);
        assert_eq!(defected.species[4], 1);
        assert_eq!(defected.species[3], 0);
        for (a, b) in chain.sites.iter().zip(&defected.sites) {
            assert_eq!((a - b).norm(), 0.0);
        }
    }

    #[test]
    fn interstitial_min_distance() {
        let chain = build_chain(9, 1.0).unwrap();
        let defected = apply_point_defect(
            &chain,
            &DefectEdit::Interstitial {
                position: vec![4.5],
                species: 0,
            },
            Some(5.0),
        )
        .unwrap();
        assert_eq!(defected.n_sites(), 10);
        let mut min_pair = f64::INFINITY;
        for l in 0..10 {
            for k in 0..l {
                min_pair = min_pair.min(defected.pair_distance(l, k));
            }
        }
        assert_relative_eq!(min_pair, 0.5);
    }

    #[test]
    fn edit_outside_declared_ball_rejected() {
        let chain = build_chain(9, 1.0).unwrap();
        let err = apply_point_defect(&chain, &DefectEdit::Vacancy { site: 8 }, Some(1.0));
        assert!(err.is_err());
    }

    #[test]
    fn noninterpenetration_values() {
        let chain = build_chain(5, 1.0).unwrap();
        let zero = Displacement::zeros(&chain);
        assert_relative_eq!(noninterpenetration_constant(&chain, &zero).unwrap(), 1.0);

        let two = build_chain(2, 1.0).unwrap();
        let u = disp(&two, &[0.0, -0.25]);
        assert_relative_eq!(noninterpenetration_constant(&two, &u).unwrap(), 0.75);

        // coincident displaced sites
        let u = disp(&two, &[0.5, -0.5]);
        assert_relative_eq!(noninterpenetration_constant(&two, &u).unwrap(), 0.0);

        let single = build_chain(1, 1.0).unwrap();
        assert!(noninterpenetration_constant(&single, &Displacement::zeros(&single)).is_err());
    }

    #[test]
    fn stencil_two_site_value() {
        let two = build_chain(2, 1.0).unwrap();
        let w = StencilWeights::with_default_cutoff(1.0).unwrap();
        let eps = 1e-3;
        let u = disp(&two, &[0.0, eps]);
        let got = stencil_seminorm_squared(&two, &u, &w).unwrap();
        assert_relative_eq!(got, 2.0 * (-2.0f64).exp() * eps * eps, max_relative = 1e-12);

        let zero = Displacement::zeros(&two);
        assert_eq!(stencil_seminorm(&two, &zero, &w).unwrap(), 0.0);
    }

    #[test]
    fn text_roundtrip() {
        let a1 = DMatrix::from_vec(1, 1, vec![2.0]);
        let basis = vec![
            DVector::from_vec(vec![0.0]),
            DVector::from_vec(vec![0.9]),
        ];
        let mut cfg = build_multilattice(&a1, &basis, &[3], true).unwrap();
        cfg.defect_radius = Some(1.25);
        cfg.defect_center = Some(DVector::zeros(1));
        let text = cfg.to_text();
        let back = Configuration::from_text(&text).unwrap();
        assert_eq!(back.n_sites(), cfg.n_sites());
        assert_eq!(back.species, cfg.species);
        assert_eq!(back.defect_radius, cfg.defect_radius);
        for (a, b) in cfg.sites.iter().zip(&back.sites) {
            assert_eq!((a - b).norm(), 0.0);
        }
        let cell = back.cell.unwrap();
        assert!(cell.periodic);
        assert_eq!(cell.repeats, vec![3]);
    }

    proptest! {
        #[test]
        fn stencil_homogeneity(vals in proptest::collection::vec(-1.0f64..1.0, 6), scale in 0.1f64..4.0) {
            let cfg = build_chain(6, 1.0).unwrap();
            let w = StencilWeights::with_default_cutoff(1.0).unwrap();
            let u = disp(&cfg, &vals);
            let mut su = u.clone();
            for v in &mut su.u { *v *= scale; }
            let a = stencil_seminorm(&cfg, &u, &w).unwrap();
            let b = stencil_seminorm(&cfg, &su, &w).unwrap();
            prop_assert!((b - scale * a).abs() <= 1e-10 * (1.0 + b));
        }

        #[test]
        fn stencil_triangle(
            x in proptest::collection::vec(-1.0f64..1.0, 6),
            y in proptest::collection::vec(-1.0f64..1.0, 6),
        ) {
            let cfg = build_chain(6, 1.0).unwrap();
            let w = StencilWeights::with_default_cutoff(1.0).unwrap();
            let ux = disp(&cfg, &x);
            let uy = disp(&cfg, &y);
            let mut sum = ux.clone();
            sum.axpy(1.0, &uy);
            let a = stencil_seminorm(&cfg, &ux, &w).unwrap();
            let b = stencil_seminorm(&cfg, &uy, &w).unwrap();
            let c = stencil_seminorm(&cfg, &sum, &w).unwrap();
            prop_assert!(c <= a + b + 1e-10);
        }
    }
}
