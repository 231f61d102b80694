//! Eigendecomposition, Fermi-Dirac calculus, contour construction and local
//! observables computed two independent ways (spectral sums and contour
//! quadrature).
//!
//! # Contours
//!
//! Three contour kinds are built, all sampled with the trapezoidal rule which
//! converges exponentially for analytic integrands:
//!
//! - **observable**: a circle enclosing the whole spectrum with a configured
//!   real-axis margin; for entire observables (polynomials).
//! - **fermi (finite beta)**: a flattened ellipse whose semi-minor axis is
//!   just below pi/(2 beta). Every point of the ellipse is then at distance
//!   >= pi/(2 beta) from every Matsubara pole mu + i pi (2k+1) / beta, and the
//!   closed region stays inside the strip |Im z| < pi / beta where both the
//!   occupation function and the grand-potential logarithm are analytic.
//! - **fermi (zero T)**: a circle enclosing exactly the spectrum below mu,
//!   with clearance g/2 at the gap crossing. Requires a spectral gap.

use nalgebra::{DMatrix, DVector};
use num_complex::Complex64;
use serde::{de, Deserialize, Deserializer, Serialize, Serializer};

use crate::error::{Error, Result};
use crate::model::Hamiltonian;

/// Inverse Fermi-temperature, possibly infinite.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Beta {
    Finite(f64),
    Infinite,
}

impl Beta {
    pub fn is_infinite(self) -> bool {
        matches!(self, Beta::Infinite)
    }

    pub fn finite(self) -> Option<f64> {
        match self {
            Beta::Finite(b) => Some(b),
            Beta::Infinite => None,
        }
    }
}

impl Serialize for Beta {
    fn serialize<S: Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        match self {
            Beta::Finite(b) => s.serialize_f64(*b),
            Beta::Infinite => s.serialize_str("inf"),
        }
    }
}

impl<'de> Deserialize<'de> for Beta {
    fn deserialize<D: Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        struct V;
        impl<'de> de::Visitor<'de> for V {
            type Value = Beta;
            fn expecting(&self, f: &mut std::fmt::Formatter) -> std::fmt::Result {
                f.write_str("a positive number or the string \"inf\"")
            }
            fn visit_f64<E: de::Error>(self, v: f64) -> std::result::Result<Beta, E> {
                if v > 0.0 && v.is_finite() {
                    Ok(Beta::Finite(v))
                } else {
                    Err(E::custom(format!("beta must be positive and finite, got {v}")))
                }
            }
            fn visit_i64<E: de::Error>(self, v: i64) -> std::result::Result<Beta, E> {
                self.visit_f64(v as f64)
            }
            fn visit_u64<E: de::Error>(self, v: u64) -> std::result::Result<Beta, E> {
                self.visit_f64(v as f64)
            }
            fn visit_str<E: de::Error>(self, v: &str) -> std::result::Result<Beta, E> {
                if v == "inf" {
                    Ok(Beta::Infinite)
                } else {
                    Err(E::custom(format!(
                        "beta must be a number or \"inf\", got {v:?}"
                    )))
                }
            }
        }
        d.deserialize_any(V)
    }
}

/// Fermi-Dirac occupation f(z - mu), numerically stable for large |beta (z - mu)|.
///
/// At zero temperature this is the characteristic function of (-inf, mu) with
/// value 1/2 at mu, evaluated on the real part.
pub fn fermi(z: Complex64, mu: f64, beta: Beta) -> Result<Complex64> {
    match beta {
        Beta::Infinite => {
            let x = z.re - mu;
            Ok(Complex64::new(
                if x < 0.0 {
                    1.0
                } else if x > 0.0 {
                    0.0
                } else {
                    0.5
                },
                0.0,
            ))
        }
        Beta::Finite(b) => {
            let x = (z - mu) * b;
            // Matsubara poles sit at x = i pi (2k+1)
            let dy = {
                let t = (x.im / std::f64::consts::PI - 1.0) / 2.0;
                let k = t.round();
                (x.im - std::f64::consts::PI * (2.0 * k + 1.0)).abs()
            };
            if x.re.hypot(dy) < 1e-12 {
                return Err(Error::InvalidArgument(format!(
                    "fermi evaluated at a Matsubara pole: z = {z}"
                )));
            }
            if x.re > 0.0 {
                let e = (-x).exp();
                Ok(e / (1.0 + e))
            } else {
                Ok(Complex64::new(1.0, 0.0) / (1.0 + x.exp()))
            }
        }
    }
}

/// log(1 + e^x) on the strip |Im x| < pi, overflow-guarded, principal branch.
fn log1p_exp(x: Complex64) -> Complex64 {
    if x.re > 30.0 {
        x + (1.0 + (-x).exp()).ln()
    } else {
        (1.0 + x.exp()).ln()
    }
}

/// Local quantity kinds paired with their natural contour.
#[derive(Debug, Clone, PartialEq)]
pub enum ObservableKind {
    /// Occupation f( . - mu): yields the electronic density.
    Fermi,
    /// Grand-potential integrand: -(2/beta) log(1 + e^{-beta (z - mu)}) at
    /// finite beta, 2 (z - mu) chi_(-inf,mu) at zero temperature.
    GrandPotential,
    /// Entire test observable p(z); coefficients from highest to constant.
    Polynomial(Vec<f64>),
}

#[derive(Debug, Clone)]
pub struct Observable {
    pub kind: ObservableKind,
    pub mu: f64,
    pub beta: Beta,
}

impl Observable {
    pub fn fermi(mu: f64, beta: Beta) -> Self {
        Self {
            kind: ObservableKind::Fermi,
            mu,
            beta,
        }
    }

    pub fn grand_potential(mu: f64, beta: Beta) -> Self {
        Self {
            kind: ObservableKind::GrandPotential,
            mu,
            beta,
        }
    }

    pub fn polynomial(coeffs: Vec<f64>) -> Self {
        Self {
            kind: ObservableKind::Polynomial(coeffs),
            mu: 0.0,
            beta: Beta::Infinite,
        }
    }

    /// Evaluate on the real axis (the spectral path).
    pub fn eval_real(&self, lambda: f64) -> f64 {
        match &self.kind {
            ObservableKind::Fermi => match self.beta {
                Beta::Infinite => {
                    if lambda < self.mu {
                        1.0
                    } else if lambda > self.mu {
                        0.0
                    } else {
                        0.5
                    }
                }
                Beta::Finite(b) => {
                    let x = b * (lambda - self.mu);
                    if x > 0.0 {
                        let e = (-x).exp();
                        e / (1.0 + e)
                    } else {
                        1.0 / (1.0 + x.exp())
                    }
                }
            },
            ObservableKind::GrandPotential => match self.beta {
                Beta::Infinite => {
                    if lambda < self.mu {
                        2.0 * (lambda - self.mu)
                    } else {
                        0.0
                    }
                }
                Beta::Finite(b) => {
                    let x = b * (lambda - self.mu);
                    if x <= 0.0 {
                        2.0 * (lambda - self.mu) - (2.0 / b) * x.exp().ln_1p()
                    } else {
                        -(2.0 / b) * (-x).exp().ln_1p()
                    }
                }
            },
            ObservableKind::Polynomial(c) => c.iter().fold(0.0, |acc, &ci| acc * lambda + ci),
        }
    }

    /// Evaluate the contour integrand. For zero-temperature fermi kinds the
    /// occupied-states contour absorbs the step, so the integrand is the
    /// analytic continuation from the occupied side.
    pub fn eval_contour(&self, z: Complex64) -> Result<Complex64> {
        match &self.kind {
            ObservableKind::Fermi => match self.beta {
                Beta::Infinite => Ok(Complex64::new(1.0, 0.0)),
                b @ Beta::Finite(_) => fermi(z, self.mu, b),
            },
            ObservableKind::GrandPotential => match self.beta {
                Beta::Infinite => Ok(2.0 * (z - self.mu)),
                Beta::Finite(b) => {
                    // 2 (z - mu) - (2 / beta) log(1 + e^{beta (z - mu)});
                    // analytic on |Im(z - mu)| < pi / beta
                    let x = (z - self.mu) * b;
                    if x.im.abs() >= std::f64::consts::PI {
                        return Err(Error::Contour(format!(
                            "grand-potential integrand evaluated outside its strip: z = {z}"
                        )));
                    }
                    Ok(2.0 * (z - self.mu) - log1p_exp(x) * (2.0 / b))
                }
            },
            ObservableKind::Polynomial(c) => Ok(c
                .iter()
                .fold(Complex64::new(0.0, 0.0), |acc, &ci| acc * z + ci)),
        }
    }

    /// Whether the paired contour is fermi-like (built from mu, beta) rather
    /// than a plain spectrum-enclosing circle.
    pub fn wants_fermi_contour(&self) -> bool {
        !matches!(self.kind, ObservableKind::Polynomial(_))
    }
}

/// Sorted eigenpairs of an assembled Hamiltonian.
#[derive(Debug, Clone)]
pub struct SpectralCache {
    pub eigenvalues: DVector<f64>,
    /// Columns are orthonormal eigenvectors, matching `eigenvalues`.
    pub eigenvectors: DMatrix<f64>,
    pub n_sites: usize,
    pub n_orbitals: usize,
}

impl SpectralCache {
    pub fn min_eigenvalue(&self) -> f64 {
        self.eigenvalues[0]
    }

    pub fn max_eigenvalue(&self) -> f64 {
        self.eigenvalues[self.eigenvalues.len() - 1]
    }

    /// Distance from mu to the spectrum.
    pub fn distance_to_spectrum(&self, mu: f64) -> f64 {
        self.eigenvalues
            .iter()
            .fold(f64::INFINITY, |d, &l| d.min((l - mu).abs()))
    }

    /// (max eigenvalue < mu, min eigenvalue > mu); either may be absent.
    pub fn straddle(&self, mu: f64) -> (Option<f64>, Option<f64>) {
        let mut below = None;
        let mut above = None;
        for &l in self.eigenvalues.iter() {
            if l < mu {
                below = Some(l);
            } else if l > mu && above.is_none() {
                above = Some(l);
            }
        }
        (below, above)
    }

    /// Spectral gap at mu (0 when eigenvalues sit on mu or only one side exists
    /// on both ends is treated as infinite clearance by callers).
    pub fn gap_at(&self, mu: f64) -> f64 {
        let (below, above) = self.straddle(mu);
        match (below, above) {
            (Some(b), Some(a)) => {
                if self.eigenvalues.iter().any(|&l| l == mu) {
                    0.0
                } else {
                    a - b
                }
            }
            _ => f64::INFINITY,
        }
    }
}

/// Dense symmetric eigendecomposition with sorted eigenvalues and verified
/// residuals.
pub fn diagonalize(h: &Hamiltonian) -> Result<SpectralCache> {
    if h.matrix.iter().any(|x| !x.is_finite()) {
        return Err(Error::Numerical(
            "Hamiltonian contains non-finite entries".into(),
        ));
    }
    let n = h.matrix.nrows();
    let (eigenvalues, eigenvectors) = crate::eigen::symmetric_eigen(&h.matrix)?;

    let scale = eigenvalues
        .iter()
        .fold(1.0f64, |m, &l| m.max(l.abs()));
    let residual = (&h.matrix * &eigenvectors
        - &eigenvectors * DMatrix::from_diagonal(&eigenvalues))
        .abs()
        .max();
    if residual > 1e-10 * scale {
        return Err(Error::Numerical(format!(
            "eigensolver residual {residual:.3e} exceeds tolerance"
        )));
    }
    let ortho = (eigenvectors.transpose() * &eigenvectors - DMatrix::identity(n, n))
        .abs()
        .max();
    if ortho > 1e-12 * (n as f64) {
        return Err(Error::Numerical(format!(
            "eigenvectors lost orthonormality: deviation {ortho:.3e}"
        )));
    }

    Ok(SpectralCache {
        eigenvalues,
        eigenvectors,
        n_sites: h.n_sites,
        n_orbitals: h.n_orbitals,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub enum ContourKind {
    Observable,
    FermiFinite,
    FermiZeroT,
}

/// A closed quadrature contour: an axis-aligned ellipse sampled by the
/// trapezoidal rule. `weights` absorb the 1/(2 pi i) prefactor, so
/// `sum_q w_q g(z_q)` approximates the positively oriented
/// (1/2 pi i) closed integral of g.
#[derive(Debug, Clone)]
pub struct Contour {
    pub kind: ContourKind,
    pub center: f64,
    pub semi_major: f64,
    pub semi_minor: f64,
    pub nodes: Vec<Complex64>,
    pub weights: Vec<Complex64>,
    /// min over nodes of the distance to the target spectrum
    pub clearance: f64,
    /// min over nodes of the distance to the Matsubara poles (finite-beta fermi)
    pub pole_clearance: Option<f64>,
}

#[derive(Debug, Clone, Copy)]
pub struct ContourSettings {
    /// Minimum number of quadrature nodes; thin ellipses increase it.
    pub n_quad: usize,
    /// Real-axis clearance for observable-kind contours.
    pub margin: f64,
    /// Raise the node count until the trapezoid aliasing bound reaches ~1e-12.
    pub auto_refine: bool,
}

impl Default for ContourSettings {
    fn default() -> Self {
        Self {
            n_quad: 64,
            margin: 0.5,
            auto_refine: true,
        }
    }
}

/// Trapezoid aliasing exponent per node for a pole at distance s from the
/// ellipse centre: |ln rho0 - ln rho(s)| in the Joukowski parameter.
fn aliasing_exponent(a: f64, b: f64, s: f64) -> f64 {
    let gamma2 = a * a - b * b;
    if gamma2 <= 0.0 {
        // circle (or tall ellipse): fall back to the circular-annulus rule
        let r = a.min(b);
        return (s / r).ln().abs().max(1e-12);
    }
    let gamma = gamma2.sqrt();
    let rho0 = (a + b) / gamma;
    let rho = if s <= gamma {
        1.0
    } else {
        (s + (s * s - gamma2).sqrt()) / gamma
    };
    (rho0.ln() - rho.ln()).abs()
}

impl Contour {
    fn from_ellipse(
        kind: ContourKind,
        center: f64,
        a: f64,
        b: f64,
        settings: &ContourSettings,
        eigenvalues: &DVector<f64>,
        enclosed: &dyn Fn(f64) -> bool,
    ) -> Result<Contour> {
        let mut n = settings.n_quad.max(8);
        if settings.auto_refine {
            let mut w_min = f64::INFINITY;
            for &l in eigenvalues.iter() {
                w_min = w_min.min(aliasing_exponent(a, b, (l - center).abs()));
            }
            if w_min.is_finite() {
                let needed = (28.0 / w_min).ceil();
                if needed > 50_000.0 {
                    return Err(Error::Contour(format!(
                        "an eigenvalue lies too close to the contour \
                         (would need {needed} quadrature nodes)"
                    )));
                }
                n = n.max((needed as usize).next_multiple_of(2));
            }
        }
        let mut nodes = Vec::with_capacity(n);
        let mut weights = Vec::with_capacity(n);
        for q in 0..n {
            let theta = 2.0 * std::f64::consts::PI * (q as f64 + 0.5) / n as f64;
            let (s, c) = theta.sin_cos();
            nodes.push(Complex64::new(center + a * c, b * s));
            let zprime = Complex64::new(-a * s, b * c);
            weights.push(zprime / Complex64::new(0.0, n as f64));
        }
        let mut clearance = f64::INFINITY;
        for z in &nodes {
            for &l in eigenvalues.iter() {
                clearance = clearance.min((z - l).norm());
            }
        }
        if clearance <= 0.0 {
            return Err(Error::Contour(
                "contour touches the spectrum; no clearance".into(),
            ));
        }
        // sanity: the ellipse must separate enclosed from excluded eigenvalues
        for &l in eigenvalues.iter() {
            let inside = ((l - center) / a).powi(2) < 1.0;
            if inside != enclosed(l) {
                return Err(Error::Contour(format!(
                    "eigenvalue {l} on the wrong side of the contour"
                )));
            }
        }
        Ok(Contour {
            kind,
            center,
            semi_major: a,
            semi_minor: b,
            nodes,
            weights,
            clearance,
            pole_clearance: None,
        })
    }

    /// Winding number of the contour around a real point (diagnostic).
    pub fn winding_number(&self, p: f64) -> i32 {
        let mut total = 0.0;
        let n = self.nodes.len();
        for q in 0..n {
            let z0 = self.nodes[q] - p;
            let z1 = self.nodes[(q + 1) % n] - p;
            total += (z1 / z0).arg();
        }
        (total / (2.0 * std::f64::consts::PI)).round() as i32
    }
}

/// Construct the contour paired with `obs` around the spectrum in `cache`.
pub fn build_contour(
    cache: &SpectralCache,
    obs: &Observable,
    settings: &ContourSettings,
) -> Result<Contour> {
    let lo = cache.min_eigenvalue();
    let hi = cache.max_eigenvalue();
    let span = hi - lo;

    if !obs.wants_fermi_contour() {
        let margin = settings.margin;
        if margin <= 0.0 {
            return Err(Error::Contour("observable margin must be positive".into()));
        }
        let r = span / 2.0 + margin;
        return Contour::from_ellipse(
            ContourKind::Observable,
            (lo + hi) / 2.0,
            r,
            r,
            settings,
            &cache.eigenvalues,
            &|_| true,
        );
    }

    match obs.beta {
        Beta::Finite(beta) => {
            let b = 0.999 * std::f64::consts::PI / (2.0 * beta);
            let dh = (3.0 * b).max(0.05 * (span + 1.0));
            let a = span / 2.0 + dh;
            let mut contour = Contour::from_ellipse(
                ContourKind::FermiFinite,
                (lo + hi) / 2.0,
                a,
                b,
                settings,
                &cache.eigenvalues,
                &|_| true,
            )?;
            let mut pole_clearance = f64::INFINITY;
            for z in &contour.nodes {
                for k in -2i64..=2 {
                    let y = std::f64::consts::PI * (2 * k + 1) as f64 / beta;
                    let d = (z.re - obs.mu).hypot(z.im - y);
                    pole_clearance = pole_clearance.min(d);
                }
            }
            if pole_clearance < std::f64::consts::PI / (2.0 * beta) * (1.0 - 1e-9) {
                return Err(Error::Contour(format!(
                    "fermi contour violates the Matsubara clearance: {pole_clearance:.3e}"
                )));
            }
            contour.pole_clearance = Some(pole_clearance);
            Ok(contour)
        }
        Beta::Infinite => {
            let dist = cache.distance_to_spectrum(obs.mu);
            if dist < 1e-8 {
                return Err(Error::GapClosed { mu: obs.mu, dist });
            }
            let (below, above) = cache.straddle(obs.mu);
            let occ_max = below.ok_or_else(|| {
                Error::Contour("zero-temperature contour needs occupied states".into())
            })?;
            let half_gap = match above {
                Some(a) => (a - occ_max) / 2.0,
                None => settings.margin,
            };
            let center = (lo + occ_max) / 2.0;
            let r = (occ_max - lo) / 2.0 + half_gap;
            Contour::from_ellipse(
                ContourKind::FermiZeroT,
                center,
                r,
                r,
                settings,
                &cache.eigenvalues,
                &|l| l < obs.mu,
            )
        }
    }
}

/// Solve (H - z) x = e_(k,b) by complex LU; residual verified below 1e-10.
pub fn resolvent_column(
    h: &Hamiltonian,
    z: Complex64,
    k: usize,
    b: usize,
    cache: Option<&SpectralCache>,
) -> Result<DVector<Complex64>> {
    let n = h.dim();
    let idx = h.index(k, b);
    if idx >= n {
        return Err(Error::InvalidArgument(format!(
            "column index ({k}, {b}) out of range"
        )));
    }
    if let Some(c) = cache {
        let dist = c
            .eigenvalues
            .iter()
            .fold(f64::INFINITY, |d, &l| d.min((z - l).norm()));
        if dist < 1e-8 {
            return Err(Error::NearSingular { z, dist });
        }
    }
    let shifted = shift_complex(&h.matrix, z);
    let lu = shifted.clone().lu();
    let mut rhs = DVector::zeros(n);
    rhs[idx] = Complex64::new(1.0, 0.0);
    let x = lu
        .solve(&rhs)
        .ok_or_else(|| Error::NearSingular { z, dist: 0.0 })?;
    let residual = (&shifted * &x - &rhs).norm();
    if residual > 1e-10 {
        return Err(Error::Numerical(format!(
            "resolvent solve residual {residual:.3e}"
        )));
    }
    Ok(x)
}

/// Full resolvent (H - z)^{-1} as a dense complex matrix.
pub fn full_resolvent(h: &Hamiltonian, z: Complex64) -> Result<DMatrix<Complex64>> {
    let shifted = shift_complex(&h.matrix, z);
    shifted
        .lu()
        .try_inverse()
        .ok_or(Error::NearSingular { z, dist: 0.0 })
}

fn shift_complex(m: &DMatrix<f64>, z: Complex64) -> DMatrix<Complex64> {
    let n = m.nrows();
    DMatrix::from_fn(n, n, |i, j| {
        let mut v = Complex64::new(m[(i, j)], 0.0);
        if i == j {
            v -= z;
        }
        v
    })
}

/// O_l via the spectral sum over eigenpairs.
pub fn local_observable_spectral(cache: &SpectralCache, obs: &Observable, l: usize) -> f64 {
    let no = cache.n_orbitals;
    let mut total = 0.0;
    for (s, &lambda) in cache.eigenvalues.iter().enumerate() {
        let mut weight = 0.0;
        for a in 0..no {
            let c = cache.eigenvectors[(l * no + a, s)];
            weight += c * c;
        }
        total += obs.eval_real(lambda) * weight;
    }
    total
}

/// All O_l at once via the spectral sum.
pub fn local_observable_spectral_all(cache: &SpectralCache, obs: &Observable) -> DVector<f64> {
    DVector::from_fn(cache.n_sites, |l, _| {
        local_observable_spectral(cache, obs, l)
    })
}

/// O_l via contour quadrature of the resolvent diagonal.
///
/// The imaginary residual of the quadrature must stay below 1e-8; it is
/// checked and discarded.
pub fn local_observable_contour(
    h: &Hamiltonian,
    obs: &Observable,
    contour: &Contour,
    l: usize,
) -> Result<f64> {
    if contour.clearance <= 0.0 {
        return Err(Error::Contour("contour clearance is not positive".into()));
    }
    let no = h.n_orbitals;
    let mut acc = Complex64::new(0.0, 0.0);
    for (z, w) in contour.nodes.iter().zip(&contour.weights) {
        let o = obs.eval_contour(*z)?;
        let shifted = shift_complex(&h.matrix, *z);
        let lu = shifted.lu();
        for a in 0..no {
            let mut rhs = DVector::zeros(h.dim());
            rhs[h.index(l, a)] = Complex64::new(1.0, 0.0);
            let x = lu
                .solve(&rhs)
                .ok_or(Error::NearSingular { z: *z, dist: 0.0 })?;
            acc -= w * o * x[h.index(l, a)];
        }
    }
    check_imaginary(acc)
}

/// All O_l at once via one full resolvent per node.
pub fn local_observable_contour_all(
    h: &Hamiltonian,
    obs: &Observable,
    contour: &Contour,
) -> Result<DVector<f64>> {
    if contour.clearance <= 0.0 {
        return Err(Error::Contour("contour clearance is not positive".into()));
    }
    let no = h.n_orbitals;
    let mut acc = vec![Complex64::new(0.0, 0.0); h.n_sites];
    for (z, w) in contour.nodes.iter().zip(&contour.weights) {
        let o = obs.eval_contour(*z)?;
        let r = full_resolvent(h, *z)?;
        for (l, site_acc) in acc.iter_mut().enumerate() {
            let mut diag = Complex64::new(0.0, 0.0);
            for a in 0..no {
                diag += r[(l * no + a, l * no + a)];
            }
            *site_acc -= w * o * diag;
        }
    }
    let mut out = DVector::zeros(h.n_sites);
    for (l, v) in acc.into_iter().enumerate() {
        out[l] = check_imaginary(v)?;
    }
    Ok(out)
}

fn check_imaginary(v: Complex64) -> Result<f64> {
    if v.im.abs() > 1e-8 * (1.0 + v.re.abs()) {
        return Err(Error::Numerical(format!(
            "contour quadrature left an imaginary residual {:.3e}",
            v.im
        )));
    }
    Ok(v.re)
}
