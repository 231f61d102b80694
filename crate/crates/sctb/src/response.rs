//! Analytic derivatives of self-consistent site observables.
//!
//! Differentiating the self-consistency equation rho = F(u; rho) gives the
//! density response d rho / d u = (I - L)^{-1} phi, where phi is a contour
//! quadrature of the resolvent sandwiched around the bare Hamiltonian
//! derivative. First and second derivatives of any site observable follow by
//! the chain rule through the on-site term. Everything here is validated
//! against finite differences with full SCF re-solves (the `fd` submodule).

use nalgebra::{DMatrix, DVector, Dyn};
use num_complex::Complex64;

use crate::error::{Error, Result};
use crate::model::{
    hamiltonian_derivative, hamiltonian_second_derivative, HamiltonianDerivative,
};
use crate::scf::{stability_operator, ConvergedState, StabilityOperator};
use crate::spectral::{full_resolvent, Contour, ContourSettings, Observable};

/// Precomputed per-contour-node resolvents and the stability operator for a
/// converged state; the workhorse behind all response quantities.
pub struct Responder {
    pub state: ConvergedState,
    pub contour: Contour,
    resolvents: Vec<DMatrix<Complex64>>,
    fermi_weights: Vec<Complex64>,
    /// Quadrature of orbital-summed squared resolvent entries with the fermi
    /// weight; the stability operator is this matrix times diag(v'(rho)).
    pub w_fermi: DMatrix<f64>,
    pub stability: StabilityOperator,
    i_minus_l: nalgebra::linalg::LU<f64, Dyn, Dyn>,
}

fn check_im(v: Complex64, what: &str) -> Result<f64> {
    if v.im.abs() > 1e-8 * (1.0 + v.re.abs()) {
        return Err(Error::Numerical(format!(
            "{what}: imaginary residual {:.3e}",
            v.im
        )));
    }
    Ok(v.re)
}

impl Responder {
    pub fn new(state: &ConvergedState, settings: &ContourSettings) -> Result<Self> {
        let contour = state.fermi_contour(settings)?;
        let h = &state.hamiltonian;
        let fermi_obs = state.system.fermi_observable();

        let mut resolvents = Vec::with_capacity(contour.nodes.len());
        let mut fermi_weights = Vec::with_capacity(contour.nodes.len());
        for (z, w) in contour.nodes.iter().zip(&contour.weights) {
            resolvents.push(full_resolvent(h, *z)?);
            fermi_weights.push(w * fermi_obs.eval_contour(*z)?);
        }

        let stability = stability_operator(state, &contour)?;
        let n = h.n_sites;
        let no = h.n_orbitals;
        let mut w_fermi = DMatrix::zeros(n, n);
        {
            let mut acc = DMatrix::from_element(n, n, Complex64::new(0.0, 0.0));
            for (r, fw) in resolvents.iter().zip(&fermi_weights) {
                for l in 0..n {
                    for k in 0..n {
                        let mut sq = Complex64::new(0.0, 0.0);
                        for a in 0..no {
                            for b in 0..no {
                                let e = r[(l * no + a, k * no + b)];
                                sq += e * e;
                            }
                        }
                        acc[(l, k)] += fw * sq;
                    }
                }
            }
            for l in 0..n {
                for k in 0..n {
                    w_fermi[(l, k)] = check_im(acc[(l, k)], "fermi squared-entry quadrature")?;
                }
            }
        }

        let i_minus_l =
            (DMatrix::identity(n, n) - &stability.matrix).lu();

        Ok(Self {
            state: state.clone(),
            contour,
            resolvents,
            fermi_weights,
            w_fermi,
            stability,
            i_minus_l,
        })
    }

    fn n_sites(&self) -> usize {
        self.state.hamiltonian.n_sites
    }

    fn derivative_blocks(&self, m: usize, i: usize) -> Result<HamiltonianDerivative> {
        hamiltonian_derivative(
            &self.state.system.config,
            &self.state.u,
            &self.state.system.hopping,
            m,
            i,
        )
    }

    /// Contour weights w_q * obs(z_q) for an observable evaluated on this
    /// state's fermi contour. Fermi-like observables must match the system's
    /// thermodynamic state.
    fn observable_weights(&self, obs: &Observable) -> Result<Vec<Complex64>> {
        if obs.wants_fermi_contour()
            && (obs.mu != self.state.system.mu || obs.beta != self.state.system.beta)
        {
            return Err(Error::InvalidArgument(
                "observable thermodynamic state differs from the converged state".into(),
            ));
        }
        self.contour
            .nodes
            .iter()
            .zip(&self.contour.weights)
            .map(|(z, w)| Ok(w * obs.eval_contour(*z)?))
            .collect()
    }

    /// Site traces of R B R over the contour with the given weights; the
    /// sparse row/column structure of B keeps each node at O(n^2).
    fn sandwich_diag(
        &self,
        weights: &[Complex64],
        blocks: &HamiltonianDerivative,
    ) -> Result<DVector<f64>> {
        let n = self.n_sites();
        let no = self.state.hamiltonian.n_orbitals;
        let m = blocks.center;
        let mut acc = vec![Complex64::new(0.0, 0.0); n];
        for (r, w) in self.resolvents.iter().zip(weights) {
            if w.norm() == 0.0 {
                continue;
            }
            for p in 0..n {
                // S_p = sum_k G_k R^{(k,p)}, T_p = sum_k R^{(p,k)} G_k^T
                let mut s = DMatrix::from_element(no, no, Complex64::new(0.0, 0.0));
                let mut t = DMatrix::from_element(no, no, Complex64::new(0.0, 0.0));
                for (k, g) in &blocks.blocks {
                    for a in 0..no {
                        for b in 0..no {
                            let mut sv = Complex64::new(0.0, 0.0);
                            let mut tv = Complex64::new(0.0, 0.0);
                            for c in 0..no {
                                sv += g[(a, c)] * r[(k * no + c, p * no + b)];
                                tv += r[(p * no + a, k * no + c)] * g[(b, c)];
                            }
                            s[(a, b)] += sv;
                            t[(a, b)] += tv;
                        }
                    }
                }
                // trace(R^{(p,m)} S_p) + trace(T_p R^{(m,p)})
                let mut tr = Complex64::new(0.0, 0.0);
                for a in 0..no {
                    for b in 0..no {
                        tr += r[(p * no + a, m * no + b)] * s[(b, a)];
                        tr += t[(a, b)] * r[(m * no + b, p * no + a)];
                    }
                }
                acc[p] += w * tr;
            }
        }
        let mut out = DVector::zeros(n);
        for (p, v) in acc.into_iter().enumerate() {
            out[p] = check_im(v, "sandwich quadrature")?;
        }
        Ok(out)
    }

    /// The response vector phi^(m,i): fermi-weighted quadrature of
    /// [R (dH^L/du) R] site diagonals.
    pub fn phi(&self, m: usize, i: usize) -> Result<DVector<f64>> {
        let blocks = self.derivative_blocks(m, i)?;
        self.sandwich_diag(&self.fermi_weights, &blocks)
    }

    /// d rho / d [u(m)]_i by solving (I - L) x = phi^(m,i).
    pub fn density_response(&self, m: usize, i: usize) -> Result<DVector<f64>> {
        if self.stability.margin <= 0.0 {
            return Err(Error::Stability(
                "I - L is singular; no density response".into(),
            ));
        }
        let phi = self.phi(m, i)?;
        self.i_minus_l
            .solve(&phi)
            .ok_or_else(|| Error::Stability("I - L solve failed".into()))
    }

    fn solve_i_minus_l(&self, rhs: &DVector<f64>) -> Result<DVector<f64>> {
        self.i_minus_l
            .solve(rhs)
            .ok_or_else(|| Error::Stability("I - L solve failed".into()))
    }

    /// Open a response channel for one observable: caches the squared-entry
    /// quadrature matrix W so repeated gradient calls stay cheap.
    pub fn channel(&self, obs: &Observable) -> Result<ResponseChannel<'_>> {
        let weights = self.observable_weights(obs)?;
        let n = self.n_sites();
        let no = self.state.hamiltonian.n_orbitals;
        let mut acc = DMatrix::from_element(n, n, Complex64::new(0.0, 0.0));
        for (r, w) in self.resolvents.iter().zip(&weights) {
            for l in 0..n {
                for k in 0..n {
                    let mut sq = Complex64::new(0.0, 0.0);
                    for a in 0..no {
                        for b in 0..no {
                            let e = r[(l * no + a, k * no + b)];
                            sq += e * e;
                        }
                    }
                    acc[(l, k)] += w * sq;
                }
            }
        }
        let mut w_matrix = DMatrix::zeros(n, n);
        for l in 0..n {
            for k in 0..n {
                w_matrix[(l, k)] = check_im(acc[(l, k)], "squared-entry quadrature")?;
            }
        }
        Ok(ResponseChannel {
            responder: self,
            obs: obs.clone(),
            weights,
            w_matrix,
        })
    }
}

/// Gradient and Hessian evaluation of one observable's self-consistent site
/// values on a fixed converged state.
pub struct ResponseChannel<'a> {
    responder: &'a Responder,
    pub obs: Observable,
    weights: Vec<Complex64>,
    pub w_matrix: DMatrix<f64>,
}

impl ResponseChannel<'_> {
    /// d O^sc_l / d [u(m)]_i for every site l.
    pub fn site_gradient_all(&self, m: usize, i: usize) -> Result<DVector<f64>> {
        let r = self.responder;
        let blocks = r.derivative_blocks(m, i)?;
        let linear = r.sandwich_diag(&self.weights, &blocks)?;
        let rho_prime = r.density_response(m, i)?;
        let vprime = r.state.vprime();
        let weighted = DVector::from_fn(r.n_sites(), |k, _| vprime[k] * rho_prime[k]);
        Ok(linear + &self.w_matrix * weighted)
    }

    /// d^2 O^sc_l / d [u(m)]_i d [u(n)]_j for every site l.
    ///
    /// Assembles the differentiated sandwich (including the bare second
    /// derivative of the hopping), the differentiated squared-entry matrix,
    /// and the second density response obtained by differentiating
    /// (I - L)^{-1} phi term by term.
    pub fn site_hessian_all(&self, m: usize, i: usize, n_site: usize, j: usize) -> Result<DVector<f64>> {
        let r = self.responder;
        let state = &r.state;
        let n = r.n_sites();
        let no = state.hamiltonian.n_orbitals;
        let nn = n * no;

        let rho_m = r.density_response(m, i)?;
        let rho_n = r.density_response(n_site, j)?;
        let vprime = state.vprime();
        let vsecond = state.vsecond();

        let bm = r.derivative_blocks(m, i)?.to_dense();
        let bn = r.derivative_blocks(n_site, j)?.to_dense();
        let smn = hamiltonian_second_derivative(
            &state.system.config,
            &state.u,
            &state.system.hopping,
            m,
            i,
            n_site,
            j,
        )?;

        // C^n = dH^L/du(n) + diag(v' * drho/du(n)): the full H derivative
        let mut cn = bn.map(|x| Complex64::new(x, 0.0));
        for k in 0..n {
            let d = vprime[k] * rho_n[k];
            for a in 0..no {
                cn[(k * no + a, k * no + a)] += d;
            }
        }
        let bm_c = bm.map(|x| Complex64::new(x, 0.0));
        let smn_c = smn.map(|x| Complex64::new(x, 0.0));

        let site_trace_product = |a: &DMatrix<Complex64>, b: &DMatrix<Complex64>| -> Vec<Complex64> {
            let mut out = vec![Complex64::new(0.0, 0.0); n];
            for l in 0..n {
                let mut tr = Complex64::new(0.0, 0.0);
                for orb in 0..no {
                    let p = l * no + orb;
                    for q in 0..nn {
                        tr += a[(p, q)] * b[(q, p)];
                    }
                }
                out[l] = tr;
            }
            out
        };

        let mut a_obs = vec![Complex64::new(0.0, 0.0); n];
        let mut a_fermi = vec![Complex64::new(0.0, 0.0); n];
        let mut dw_obs = DMatrix::from_element(n, n, Complex64::new(0.0, 0.0));
        let mut dw_fermi = DMatrix::from_element(n, n, Complex64::new(0.0, 0.0));

        for ((res, w_obs), w_f) in r
            .resolvents
            .iter()
            .zip(&self.weights)
            .zip(&r.fermi_weights)
        {
            let rcr = res * (&cn * res); // R C^n R
            let bmr = &bm_c * res; // B^m R
            let rbm = res * &bm_c; // R B^m
            let smnr = &smn_c * res;

            // -R C R B R + R S R - R B R C R, site-diagonal traces
            let t1 = site_trace_product(&rcr, &bmr);
            let t2 = site_trace_product(res, &smnr);
            let t3 = site_trace_product(&rbm, &rcr);
            for l in 0..n {
                let v = -t1[l] + t2[l] - t3[l];
                a_obs[l] += w_obs * v;
                a_fermi[l] += w_f * v;
            }

            // differentiated squared entries: -2 sum_ab R_{lk} [R C R]_{lk}
            for l in 0..n {
                for k in 0..n {
                    let mut e = Complex64::new(0.0, 0.0);
                    for a in 0..no {
                        for b in 0..no {
                            e += res[(l * no + a, k * no + b)] * rcr[(l * no + a, k * no + b)];
                        }
                    }
                    dw_obs[(l, k)] += -2.0 * w_obs * e;
                    dw_fermi[(l, k)] += -2.0 * w_f * e;
                }
            }
        }

        // d L / du(n) and the second density response
        let mut dl = DMatrix::zeros(n, n);
        for l in 0..n {
            for k in 0..n {
                dl[(l, k)] = check_im(dw_fermi[(l, k)], "dW fermi")? * vprime[k]
                    + r.w_fermi[(l, k)] * vsecond[k] * rho_n[k];
            }
        }
        let dphi = DVector::from_fn(n, |l, _| a_fermi[l].re);
        for l in 0..n {
            check_im(a_fermi[l], "dphi quadrature")?;
        }
        let rho_mn = r.solve_i_minus_l(&(&dl * &rho_m + dphi))?;

        let mut out = DVector::zeros(n);
        for l in 0..n {
            let mut v = check_im(a_obs[l], "hessian sandwich")?;
            for k in 0..n {
                let dw = check_im(dw_obs[(l, k)], "dW obs")?;
                v += dw * vprime[k] * rho_m[k]
                    + self.w_matrix[(l, k)]
                        * (vsecond[k] * rho_n[k] * rho_m[k] + vprime[k] * rho_mn[k]);
            }
            out[l] = v;
        }
        Ok(out)
    }
}

/// Finite-difference oracles with full SCF re-solves per stencil point.
pub mod fd {
    use super::*;
    use crate::lattice::Displacement;
    use crate::scf::{scf_solve, ScfParams, TightBindingSystem};
    use crate::spectral::{diagonalize, local_observable_spectral_all};

    fn checked_step(step: f64) -> Result<f64> {
        if !(1e-7..=1e-2).contains(&step) {
            return Err(Error::Oracle(format!(
                "step {step} outside the trusted range [1e-7, 1e-2]"
            )));
        }
        Ok(step)
    }

    /// Central difference of a scalar function.
    pub fn central_diff(mut f: impl FnMut(f64) -> Result<f64>, step: f64) -> Result<f64> {
        let h = checked_step(step)?;
        Ok((f(h)? - f(-h)?) / (2.0 * h))
    }

    /// Richardson-extrapolated central difference: (4 D(h/2) - D(h)) / 3.
    pub fn central_diff_richardson(
        mut f: impl FnMut(f64) -> Result<f64>,
        step: f64,
    ) -> Result<f64> {
        let h = checked_step(step)?;
        let d = |f: &mut dyn FnMut(f64) -> Result<f64>, h: f64| -> Result<f64> {
            Ok((f(h)? - f(-h)?) / (2.0 * h))
        };
        let dh = d(&mut f, h)?;
        let dh2 = d(&mut f, h / 2.0)?;
        Ok((4.0 * dh2 - dh) / 3.0)
    }

    fn displaced(u: &Displacement, m: usize, i: usize, t: f64) -> Displacement {
        let mut v = u.clone();
        v.u[m][i] += t;
        v
    }

    /// Self-consistent O^sc_l values at a displaced geometry (spectral path).
    pub fn site_values(
        sys: &TightBindingSystem,
        u: &Displacement,
        rho_start: &DVector<f64>,
        obs: &Observable,
        params: &ScfParams,
    ) -> Result<DVector<f64>> {
        let d = scf_solve(sys, u, rho_start, params)?;
        let h = sys.assemble(u, &d.rho)?;
        let cache = diagonalize(&h)?;
        Ok(local_observable_spectral_all(&cache, obs))
    }

    /// Central FD of the self-consistent density with respect to [u(m)]_i.
    pub fn density_response(
        sys: &TightBindingSystem,
        u: &Displacement,
        rho_star: &DVector<f64>,
        m: usize,
        i: usize,
        step: f64,
        params: &ScfParams,
    ) -> Result<DVector<f64>> {
        let h = checked_step(step)?;
        let up = scf_solve(sys, &displaced(u, m, i, h), rho_star, params)?;
        let dn = scf_solve(sys, &displaced(u, m, i, -h), rho_star, params)?;
        Ok((up.rho - dn.rho) / (2.0 * h))
    }

    /// Central FD of all self-consistent site observables w.r.t. [u(m)]_i.
    pub fn site_gradient(
        sys: &TightBindingSystem,
        u: &Displacement,
        rho_star: &DVector<f64>,
        obs: &Observable,
        m: usize,
        i: usize,
        step: f64,
        params: &ScfParams,
    ) -> Result<DVector<f64>> {
        let h = checked_step(step)?;
        let up = site_values(sys, &displaced(u, m, i, h), rho_star, obs, params)?;
        let dn = site_values(sys, &displaced(u, m, i, -h), rho_star, obs, params)?;
        Ok((up - dn) / (2.0 * h))
    }
}
