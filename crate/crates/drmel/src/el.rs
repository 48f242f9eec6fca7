//! The empirical-likelihood core under the density ratio model: the dual
//! function D(λ, θ), its analytic gradient and Hessian, the unconstrained
//! maximum-EL fit, fitted weights and distribution functions, and maximum-EL
//! quantiles.
//!
//! Per observation x from population k the dual decomposes as
//! `θ_kᵀq(x) − log h̄(x,θ) − log{1 + Σ_c λ_c ψ_c(x,θ)}` with the mixture
//! `h̄ = Σ_r ρ_r exp(θ_rᵀq)` and `ψ_c = h_{r_c}·[1(x ≤ ξ_c) − τ_c]/h̄`. All
//! exponentials are evaluated relative to their running maximum, so large
//! parameter values cannot overflow intermediate quantities.

use crate::error::{Error, Result};
use crate::model::{BasisFunction, DrmParams, MultiSample, QuantileSpec};
use crate::solver::{solve_system, sym_eigenvalues, Mat, SolveOptions, SolveReport};

// ---------------------------------------------------------------------------
// Internal evaluation engine
// ---------------------------------------------------------------------------

/// Affine rescaling of the non-constant basis components, used to condition
/// the solve; parameter estimates are mapped back afterwards. The identity
/// rescaling gives evaluation in the caller's original coordinates.
#[derive(Clone, Debug)]
pub(crate) struct Standardization {
    mu: Vec<f64>,
    sigma: Vec<f64>,
}

impl Standardization {
    fn identity(d: usize) -> Self {
        Standardization {
            mu: vec![0.0; d],
            sigma: vec![1.0; d],
        }
    }

    fn from_columns(q: &[f64], n: usize, d: usize) -> Self {
        let mut mu = vec![0.0; d];
        let mut sigma = vec![1.0; d];
        for s in 1..d {
            let mean = (0..n).map(|j| q[j * d + s]).sum::<f64>() / n as f64;
            let var = (0..n)
                .map(|j| {
                    let e = q[j * d + s] - mean;
                    e * e
                })
                .sum::<f64>()
                / (n as f64 - 1.0).max(1.0);
            mu[s] = mean;
            sigma[s] = if var > 0.0 { var.sqrt() } else { 1.0 };
        }
        Standardization { mu, sigma }
    }

    fn is_identity(&self) -> bool {
        self.mu.iter().all(|&v| v == 0.0) && self.sigma.iter().all(|&v| v == 1.0)
    }

    /// θ rows in original coordinates from rows in rescaled coordinates.
    pub(crate) fn theta_raw_from_engine(&self, flat: &[f64], m: usize, d: usize) -> Vec<f64> {
        let mut out = vec![0.0; m * d];
        for i in 0..m {
            let mut shift = 0.0;
            for s in 1..d {
                let v = flat[s * m + i] / self.sigma[s];
                out[s * m + i] = v;
                shift += v * self.mu[s];
            }
            out[i] = flat[i] - shift;
        }
        out
    }

    /// θ rows in rescaled coordinates from rows in original coordinates.
    pub(crate) fn theta_engine_from_raw(&self, flat: &[f64], m: usize, d: usize) -> Vec<f64> {
        let mut out = vec![0.0; m * d];
        for i in 0..m {
            let mut shift = 0.0;
            for s in 1..d {
                out[s * m + i] = flat[s * m + i] * self.sigma[s];
                shift += flat[s * m + i] * self.mu[s];
            }
            out[i] = flat[i] + shift;
        }
        out
    }
}

/// Precomputed per-dataset state for dual-function evaluation: pooled
/// observations with population tags and the basis matrix.
pub(crate) struct ElEngine {
    pub(crate) obs: Vec<f64>,
    pub(crate) pop: Vec<u32>,
    /// n_k as f64, indexed by population.
    pub(crate) counts: Vec<f64>,
    pub(crate) n: usize,
    pub(crate) m: usize,
    pub(crate) d: usize,
    /// n × d row-major basis values in engine coordinates.
    pub(crate) q: Vec<f64>,
    pub(crate) std: Standardization,
    ln_n: f64,
}

impl ElEngine {
    pub(crate) fn new(ms: &MultiSample, basis: &BasisFunction, standardize: bool) -> Result<Self> {
        basis.check_domain(ms)?;
        let n = ms.total();
        let d = basis.dim();
        let m = ms.m();
        let mut obs = Vec::with_capacity(n);
        let mut pop = Vec::with_capacity(n);
        let mut q = Vec::with_capacity(n * d);
        for (k, x) in ms.iter_obs() {
            obs.push(x);
            pop.push(k as u32);
            q.extend(basis.eval(x)?);
        }
        let std = if standardize && m > 0 {
            Standardization::from_columns(&q, n, d)
        } else {
            Standardization::identity(d)
        };
        if !std.is_identity() {
            for j in 0..n {
                for s in 1..d {
                    q[j * d + s] = (q[j * d + s] - std.mu[s]) / std.sigma[s];
                }
            }
        }
        let counts = (0..=m).map(|k| ms.count(k) as f64).collect();
        Ok(ElEngine {
            obs,
            pop,
            counts,
            n,
            m,
            d,
            q,
            std,
            ln_n: (n as f64).ln(),
        })
    }

    /// Engine over a caller-supplied basis matrix in original coordinates;
    /// used to probe invariance under basis recombination.
    #[cfg(test)]
    pub(crate) fn with_matrix(ms: &MultiSample, q: Vec<f64>, d: usize) -> Self {
        let n = ms.total();
        assert_eq!(q.len(), n * d);
        let m = ms.m();
        let mut obs = Vec::with_capacity(n);
        let mut pop = Vec::with_capacity(n);
        for (k, x) in ms.iter_obs() {
            obs.push(x);
            pop.push(k as u32);
        }
        let counts = (0..=m).map(|k| ms.count(k) as f64).collect();
        ElEngine {
            obs,
            pop,
            counts,
            n,
            m,
            d,
            q,
            std: Standardization::identity(d),
            ln_n: (n as f64).ln(),
        }
    }

    pub(crate) fn dim_theta(&self) -> usize {
        self.m * self.d
    }

    /// Positive-definiteness check of the pooled second-moment matrix of the
    /// basis, the finite-sample analogue of the identifiability condition.
    pub(crate) fn check_moment_matrix(&self) -> Result<()> {
        let d = self.d;
        let mut mm = Mat::zeros(d, d);
        for j in 0..self.n {
            let row = &self.q[j * d..(j + 1) * d];
            for s in 0..d {
                for t in 0..d {
                    mm[(s, t)] += row[s] * row[t];
                }
            }
        }
        for s in 0..d {
            for t in 0..d {
                mm[(s, t)] /= self.n as f64;
            }
        }
        let eig = sym_eigenvalues(&mm);
        let lo = eig[0];
        let hi = eig[eig.len() - 1];
        if !(lo > 1e-12 * hi.max(1.0)) {
            return Err(Error::IllConditionedBasis(format!(
                "pooled moment matrix eigenvalues span [{lo:.3e}, {hi:.3e}]"
            )));
        }
        Ok(())
    }
}

/// Active quantile constraints: population, level, hypothesized value, and
/// the per-observation indicator offsets u_c(x) = 1(x ≤ ξ_c) − τ_c.
#[derive(Clone)]
pub(crate) struct Constraints {
    pub(crate) pops: Vec<usize>,
    pub(crate) taus: Vec<f64>,
    pub(crate) xis: Vec<f64>,
    u: Vec<f64>, // n × l row-major
}

impl Constraints {
    pub(crate) fn none() -> Self {
        Constraints {
            pops: Vec::new(),
            taus: Vec::new(),
            xis: Vec::new(),
            u: Vec::new(),
        }
    }

    pub(crate) fn build(engine: &ElEngine, specs: &[QuantileSpec]) -> Result<Self> {
        let mut cons = Constraints {
            pops: Vec::with_capacity(specs.len()),
            taus: Vec::with_capacity(specs.len()),
            xis: Vec::with_capacity(specs.len()),
            u: vec![0.0; engine.n * specs.len()],
        };
        for spec in specs {
            if spec.population > engine.m {
                return Err(Error::InvalidSpec(format!(
                    "population {} out of range 0..={}",
                    spec.population, engine.m
                )));
            }
            let xi = spec.value.ok_or_else(|| {
                Error::InvalidSpec(format!(
                    "spec for population {} has no hypothesized value",
                    spec.population
                ))
            })?;
            cons.pops.push(spec.population);
            cons.taus.push(spec.tau);
            cons.xis.push(xi);
        }
        let l = cons.len();
        for c in 0..l {
            cons.fill_column(engine, c);
        }
        Ok(cons)
    }

    pub(crate) fn len(&self) -> usize {
        self.pops.len()
    }

    /// Move constraint c to a new hypothesized value, refreshing indicators.
    pub(crate) fn set_xi(&mut self, engine: &ElEngine, c: usize, xi: f64) {
        self.xis[c] = xi;
        self.fill_column(engine, c);
    }

    fn fill_column(&mut self, engine: &ElEngine, c: usize) {
        let l = self.len();
        let tau = self.taus[c];
        let xi = self.xis[c];
        for j in 0..engine.n {
            self.u[j * l + c] = if engine.obs[j] <= xi { 1.0 - tau } else { -tau };
        }
    }
}

/// Which derivative levels an evaluation should produce.
#[derive(Clone, Copy, PartialEq, PartialOrd)]
pub(crate) enum Want {
    Value,
    Gradient,
    Hessian,
}

/// Reusable output and scratch space for [`ElEngine::eval`]; size is
/// l + m·d with the multiplier block first.
pub(crate) struct EvalOut {
    pub(crate) value: f64,
    pub(crate) grad: Vec<f64>,
    pub(crate) hess: Mat,
    hv: Vec<f64>,
    psi: Vec<f64>,
    av: Vec<f64>,
    wv: Vec<f64>,
    // Per-observation exponent state for the most recent θ. A solver
    // evaluates the gradient at an accepted trial point and then the
    // Hessian at that same point; caching makes the exponentials a
    // once-per-point cost.
    cached_theta: Vec<f64>,
    cache_valid: bool,
    c_t: Vec<f64>,
    c_es: Vec<f64>,
    c_e0: Vec<f64>,
    c_sumw: Vec<f64>,
    c_loghbar: Vec<f64>,
}

impl EvalOut {
    pub(crate) fn new(engine: &ElEngine, l: usize) -> Self {
        let p = l + engine.dim_theta();
        let (n, m) = (engine.n, engine.m);
        EvalOut {
            value: 0.0,
            grad: vec![0.0; p],
            hess: Mat::zeros(p, p),
            hv: vec![0.0; m],
            psi: vec![0.0; l],
            av: vec![0.0; m],
            wv: vec![0.0; engine.dim_theta()],
            cached_theta: vec![f64::NAN; engine.dim_theta()],
            cache_valid: false,
            c_t: vec![0.0; n * m],
            c_es: vec![0.0; n * m],
            c_e0: vec![0.0; n],
            c_sumw: vec![0.0; n],
            c_loghbar: vec![0.0; n],
        }
    }
}

impl ElEngine {
    /// Evaluate the dual function at (λ, θ) with θ flattened component-major
    /// in engine coordinates. Returns false (and leaves outputs partially
    /// accumulated) when some weight denominator 1 + λᵀψ is non-positive.
    pub(crate) fn eval(
        &self,
        cons: &Constraints,
        lambda: &[f64],
        theta: &[f64],
        want: Want,
        out: &mut EvalOut,
    ) -> bool {
        let (m, d, l) = (self.m, self.d, cons.len());
        debug_assert_eq!(lambda.len(), l);
        debug_assert_eq!(theta.len(), m * d);
        let p = l + m * d;
        let nf = self.n as f64;
        out.value = 0.0;
        out.grad[..p].fill(0.0);
        if want >= Want::Hessian {
            out.hess.fill(0.0);
        }

        let cache_hit = out.cache_valid && out.cached_theta == theta;
        if !cache_hit {
            for j in 0..self.n {
                let qrow = &self.q[j * d..(j + 1) * d];
                let mut mx = 0.0f64;
                for i in 0..m {
                    let mut ti = 0.0;
                    for s in 0..d {
                        ti += theta[s * m + i] * qrow[s];
                    }
                    out.c_t[j * m + i] = ti;
                    if ti > mx {
                        mx = ti;
                    }
                }
                let e0 = (-mx).exp();
                let mut sum_w = self.counts[0] * e0;
                for i in 0..m {
                    let e = (out.c_t[j * m + i] - mx).exp();
                    out.c_es[j * m + i] = e;
                    sum_w += self.counts[i + 1] * e;
                }
                out.c_e0[j] = e0;
                out.c_sumw[j] = sum_w;
                out.c_loghbar[j] = mx + sum_w.ln() - self.ln_n;
            }
            out.cached_theta.copy_from_slice(theta);
            out.cache_valid = true;
        }

        let EvalOut {
            value,
            grad,
            hess,
            hv,
            psi,
            av,
            wv,
            c_t,
            c_es,
            c_e0,
            c_sumw,
            c_loghbar,
            ..
        } = out;

        for j in 0..self.n {
            let qrow = &self.q[j * d..(j + 1) * d];
            let k = self.pop[j] as usize;
            let tj = &c_t[j * m..(j + 1) * m];
            let es = &c_es[j * m..(j + 1) * m];
            let e0 = c_e0[j];
            let sum_w = c_sumw[j];
            let log_hbar = c_loghbar[j];

            let mut w = 1.0;
            for c in 0..l {
                let er = if cons.pops[c] == 0 {
                    e0
                } else {
                    es[cons.pops[c] - 1]
                };
                let pc = cons.u[j * l + c] * er * nf / sum_w;
                psi[c] = pc;
                w += lambda[c] * pc;
            }
            if l > 0 && !(w > 0.0) {
                return false;
            }

            let t_own = if k == 0 { 0.0 } else { tj[k - 1] };
            *value += t_own - log_hbar - w.ln();

            if want >= Want::Gradient {
                for c in 0..l {
                    grad[c] -= psi[c] / w;
                }
                for i in 0..m {
                    hv[i] = self.counts[i + 1] * es[i] / sum_w;
                }
                for i in 0..m {
                    av[i] = hv[i] / w;
                }
                for c in 0..l {
                    if cons.pops[c] > 0 {
                        av[cons.pops[c] - 1] += lambda[c] * psi[c] / w;
                    }
                }
                for s in 0..d {
                    let qs = qrow[s];
                    let gslice = &mut grad[l + s * m..l + (s + 1) * m];
                    for (g, &a) in gslice.iter_mut().zip(av.iter()) {
                        *g -= qs * a;
                    }
                    if k > 0 {
                        gslice[k - 1] += qs;
                    }
                }
            }

            if want >= Want::Hessian {
                // Upper triangle only; mirrored once after the data pass.
                let md = m * d;
                for c in 0..l {
                    let pc = psi[c] / w;
                    for c2 in c..l {
                        hess[(c, c2)] += pc * psi[c2] / w;
                    }
                    let hrow = &mut hess.row_mut(c)[l..l + md];
                    for s in 0..d {
                        let qpc = qrow[s] * pc;
                        for (h, &a) in hrow[s * m..(s + 1) * m].iter_mut().zip(av.iter()) {
                            *h += qpc * a;
                        }
                    }
                    if cons.pops[c] > 0 {
                        let i = cons.pops[c] - 1;
                        for s in 0..d {
                            hrow[s * m + i] -= qrow[s] * pc;
                        }
                    }
                }
                // θθ block: per-observation rank-1 update w wᵀ with a
                // same-population diagonal correction, w = q ⊗ a.
                for s in 0..d {
                    let qs = qrow[s];
                    for (wdst, &a) in wv[s * m..(s + 1) * m].iter_mut().zip(av.iter()) {
                        *wdst = qs * a;
                    }
                }
                for r1 in 0..md {
                    let wr = wv[r1];
                    let hrow = &mut hess.row_mut(l + r1)[l + r1..l + md];
                    for (h, &w2) in hrow.iter_mut().zip(&wv[r1..md]) {
                        *h += wr * w2;
                    }
                }
                for s in 0..d {
                    let qs = qrow[s];
                    for t2 in s..d {
                        let qq = qs * qrow[t2];
                        let base_r = l + s * m;
                        let base_c = l + t2 * m;
                        for i in 0..m {
                            hess[(base_r + i, base_c + i)] -= qq * av[i];
                        }
                    }
                }
            }
        }

        if want >= Want::Hessian {
            for r in 0..p {
                for c in r + 1..p {
                    hess[(c, r)] = hess[(r, c)];
                }
            }
        }
        true
    }

    /// Per-observation log h̄(x_j, θ), overflow-guarded.
    pub(crate) fn per_obs_log_hbar(&self, theta: &[f64]) -> Vec<f64> {
        let (m, d) = (self.m, self.d);
        let mut out = Vec::with_capacity(self.n);
        for j in 0..self.n {
            let qrow = &self.q[j * d..(j + 1) * d];
            let mut mx = 0.0f64;
            let mut t = [0.0f64; 32];
            debug_assert!(m <= 32);
            for i in 0..m {
                let mut ti = 0.0;
                for s in 0..d {
                    ti += theta[s * m + i] * qrow[s];
                }
                t[i] = ti;
                if ti > mx {
                    mx = ti;
                }
            }
            let mut sum_w = self.counts[0] * (-mx).exp();
            for i in 0..m {
                sum_w += self.counts[i + 1] * (t[i] - mx).exp();
            }
            out.push(mx + sum_w.ln() - self.ln_n);
        }
        out
    }

    /// Fitted masses p̂_j = 1/(n h̄_j w_j) at a dual point; `None` when some
    /// weight denominator is non-positive.
    pub(crate) fn per_obs_weights(
        &self,
        cons: &Constraints,
        lambda: &[f64],
        theta: &[f64],
    ) -> Option<Vec<f64>> {
        let (m, d, l) = (self.m, self.d, cons.len());
        let nf = self.n as f64;
        let mut t = vec![0.0; m];
        let mut es = vec![0.0; m];
        let mut out = Vec::with_capacity(self.n);
        for j in 0..self.n {
            let qrow = &self.q[j * d..(j + 1) * d];
            let mut mx = 0.0f64;
            for i in 0..m {
                let mut ti = 0.0;
                for s in 0..d {
                    ti += theta[s * m + i] * qrow[s];
                }
                t[i] = ti;
                if ti > mx {
                    mx = ti;
                }
            }
            let e0 = (-mx).exp();
            let mut sum_w = self.counts[0] * e0;
            for i in 0..m {
                es[i] = (t[i] - mx).exp();
                sum_w += self.counts[i + 1] * es[i];
            }
            let log_hbar = mx + sum_w.ln() - self.ln_n;
            let mut w = 1.0;
            for c in 0..l {
                let er = if cons.pops[c] == 0 { e0 } else { es[cons.pops[c] - 1] };
                w += lambda[c] * cons.u[j * l + c] * er * nf / sum_w;
            }
            if !(w > 0.0) {
                return None;
            }
            out.push((-self.ln_n - log_hbar).exp() / w);
        }
        Some(out)
    }

    /// θ_rᵀ q(x_j) for one population row (0 for the base population).
    pub(crate) fn per_obs_tilt(&self, theta: &[f64], r: usize) -> Vec<f64> {
        let (m, d) = (self.m, self.d);
        let mut out = Vec::with_capacity(self.n);
        for j in 0..self.n {
            let qrow = &self.q[j * d..(j + 1) * d];
            let mut ti = 0.0;
            if r > 0 {
                for s in 0..d {
                    ti += theta[s * m + (r - 1)] * qrow[s];
                }
            }
            out.push(ti);
        }
        out
    }
}

// ---------------------------------------------------------------------------
// Public dual-function operations (original coordinates)
// ---------------------------------------------------------------------------

/// A point of the dual function: one multiplier per quantile constraint and
/// the density-ratio parameters.
#[derive(Clone, Debug)]
pub struct DualPoint {
    pub lambda: Vec<f64>,
    pub theta: DrmParams,
}

fn engine_for_point(
    ms: &MultiSample,
    basis: &BasisFunction,
    specs: &[QuantileSpec],
    pt: &DualPoint,
) -> Result<(ElEngine, Constraints)> {
    if pt.lambda.len() != specs.len() {
        return Err(Error::InvalidArgument(format!(
            "lambda has length {}, expected {}",
            pt.lambda.len(),
            specs.len()
        )));
    }
    if pt.theta.m() != ms.m() || pt.theta.dim() != basis.dim() {
        return Err(Error::InvalidArgument(
            "theta dimensions do not match data/basis".to_string(),
        ));
    }
    let engine = ElEngine::new(ms, basis, false)?;
    let cons = Constraints::build(&engine, specs)?;
    Ok((engine, cons))
}

/// The mixture density h̄(x, θ) = Σ_r ρ_r exp(θ_rᵀ q(x)); overflows to
/// infinity only when the true value exceeds the floating-point range —
/// use [`log_hbar`] in that regime.
pub fn hbar(ms: &MultiSample, basis: &BasisFunction, theta: &DrmParams, x: f64) -> Result<f64> {
    Ok(log_hbar(ms, basis, theta, x)?.exp())
}

/// log h̄(x, θ), computed with exponents shifted by their maximum so that
/// arbitrarily large θᵀq cannot overflow.
pub fn log_hbar(ms: &MultiSample, basis: &BasisFunction, theta: &DrmParams, x: f64) -> Result<f64> {
    if theta.m() != ms.m() || theta.dim() != basis.dim() {
        return Err(Error::InvalidArgument(
            "theta dimensions do not match data/basis".to_string(),
        ));
    }
    let q = basis.eval(x)?;
    let m = ms.m();
    let mut mx = 0.0f64;
    let mut t = vec![0.0; m];
    for i in 0..m {
        let ti: f64 = theta.row(i + 1).iter().zip(&q).map(|(a, b)| a * b).sum();
        t[i] = ti;
        mx = mx.max(ti);
    }
    let mut s = ms.rho(0) * (-mx).exp();
    for i in 0..m {
        s += ms.rho(i + 1) * (t[i] - mx).exp();
    }
    Ok(mx + s.ln())
}

/// Dual function value D(λ, θ) at a point, in original coordinates.
pub fn dual_value(
    ms: &MultiSample,
    basis: &BasisFunction,
    specs: &[QuantileSpec],
    pt: &DualPoint,
) -> Result<f64> {
    let (engine, cons) = engine_for_point(ms, basis, specs, pt)?;
    let mut out = EvalOut::new(&engine, cons.len());
    if !engine.eval(&cons, &pt.lambda, &pt.theta.flatten(), Want::Value, &mut out) {
        return Err(Error::InfeasiblePoint);
    }
    Ok(out.value)
}

/// Analytic gradient of the dual function, multiplier block first, then the
/// component-major θ block.
pub fn dual_gradient(
    ms: &MultiSample,
    basis: &BasisFunction,
    specs: &[QuantileSpec],
    pt: &DualPoint,
) -> Result<Vec<f64>> {
    let (engine, cons) = engine_for_point(ms, basis, specs, pt)?;
    let mut out = EvalOut::new(&engine, cons.len());
    if !engine.eval(&cons, &pt.lambda, &pt.theta.flatten(), Want::Gradient, &mut out) {
        return Err(Error::InfeasiblePoint);
    }
    Ok(out.grad)
}

/// Analytic second-derivative matrix of the dual function, ordered like the
/// gradient. Serves as the Newton Jacobian for the saddle-point system.
pub fn dual_hessian(
    ms: &MultiSample,
    basis: &BasisFunction,
    specs: &[QuantileSpec],
    pt: &DualPoint,
) -> Result<Mat> {
    let (engine, cons) = engine_for_point(ms, basis, specs, pt)?;
    let mut out = EvalOut::new(&engine, cons.len());
    if !engine.eval(&cons, &pt.lambda, &pt.theta.flatten(), Want::Hessian, &mut out) {
        return Err(Error::InfeasiblePoint);
    }
    Ok(out.hess)
}

// ---------------------------------------------------------------------------
// Unconstrained fit
// ---------------------------------------------------------------------------

/// Unconstrained maximum-EL solution.
#[derive(Clone, Debug)]
pub struct DrmFit {
    /// Maximizer of the unconstrained dual in original coordinates.
    pub theta_hat: DrmParams,
    /// sup ℓ_n = sup_θ D(0, θ) − n log n.
    pub log_el: f64,
    /// Fitted base-distribution masses p̂_kj, organized like the samples.
    pub weights: Vec<Vec<f64>>,
    /// Sample analogue of the θθ second-derivative block divided by n,
    /// stored for conditioning diagnostics.
    pub info_matrix: Mat,
    /// Condition number of `info_matrix` (ratio of extreme absolute
    /// eigenvalues); values above 1e12 indicate a numerically fragile basis.
    pub condition: f64,
    pub report: SolveReport,
}

impl DrmFit {
    pub fn ill_conditioned(&self) -> bool {
        !(self.condition < 1e12)
    }
}

pub(crate) struct InternalFit {
    /// θ̂ flattened, in the owning engine's coordinates.
    pub(crate) theta: Vec<f64>,
    /// D(0, θ̂) in engine coordinates (coordinate-invariant).
    pub(crate) sup_dual: f64,
    pub(crate) report: SolveReport,
}

/// Maximize D(0, θ) over θ by damped Newton using the analytic Hessian;
/// the objective is concave, so the residual-decreasing line search is
/// globally safe. `x0` is the starting point in engine coordinates (zeros
/// for a cold start, a previous fit to warm-start resamples).
pub(crate) fn fit_engine_from(
    engine: &ElEngine,
    x0: &[f64],
    opts: &SolveOptions,
) -> Result<InternalFit> {
    engine.check_moment_matrix()?;
    let p = engine.dim_theta();
    debug_assert_eq!(x0.len(), p);
    let cons = Constraints::none();
    if p == 0 {
        let mut out = EvalOut::new(engine, 0);
        engine.eval(&cons, &[], &[], Want::Value, &mut out);
        return Ok(InternalFit {
            theta: Vec::new(),
            sup_dual: out.value,
            report: SolveReport {
                root: Vec::new(),
                residual_norm: 0.0,
                iterations: 0,
                converged: true,
            },
        });
    }
    let scratch = std::cell::RefCell::new(EvalOut::new(engine, 0));
    let report = {
        let f = |x: &[f64], res: &mut [f64]| {
            let mut out = scratch.borrow_mut();
            if !engine.eval(&cons, &[], x, Want::Gradient, &mut out) {
                return false;
            }
            res.copy_from_slice(&out.grad);
            true
        };
        let jac = |x: &[f64], j: &mut Mat| {
            let mut out = scratch.borrow_mut();
            if !engine.eval(&cons, &[], x, Want::Hessian, &mut out) {
                return false;
            }
            j.clone_from(&out.hess);
            true
        };
        solve_system(f, Some(jac), x0, opts)?
    };
    if !report.converged {
        return Err(Error::SolverFailure(format!(
            "unconstrained fit did not converge: residual {:.3e} after {} iterations",
            report.residual_norm, report.iterations
        )));
    }
    let mut val = EvalOut::new(engine, 0);
    engine.eval(&cons, &[], &report.root, Want::Value, &mut val);
    Ok(InternalFit {
        theta: report.root.clone(),
        sup_dual: val.value,
        report,
    })
}

/// A few plain Newton corrections in the target coordinate system, used
/// after mapping a solution back from rescaled coordinates so that the
/// reported residual honours the requested tolerance in the original
/// parametrization.
pub(crate) fn polish(
    engine: &ElEngine,
    cons: &Constraints,
    lambda: &mut [f64],
    theta: &mut Vec<f64>,
    opts: &SolveOptions,
) -> (f64, usize) {
    let l = cons.len();
    let p = l + engine.dim_theta();
    let mut out = EvalOut::new(engine, l);
    let mut norm = f64::INFINITY;
    let mut iters = 0;
    for _ in 0..6 {
        if !engine.eval(cons, lambda, theta, Want::Hessian, &mut out) {
            break;
        }
        norm = out.grad.iter().fold(0.0f64, |s, v| s.max(v.abs()));
        if norm <= opts.residual_tol {
            break;
        }
        let Some(step) = out.hess.lu_solve(&out.grad) else {
            break;
        };
        let mut trial_l = lambda.to_vec();
        let mut trial_t = theta.clone();
        for i in 0..l {
            trial_l[i] -= step[i];
        }
        for i in l..p {
            trial_t[i - l] -= step[i];
        }
        let mut check = EvalOut::new(engine, l);
        if !engine.eval(cons, &trial_l, &trial_t, Want::Gradient, &mut check) {
            break;
        }
        let new_norm = check.grad.iter().fold(0.0f64, |s, v| s.max(v.abs()));
        if !new_norm.is_finite() || new_norm >= norm {
            break;
        }
        lambda.copy_from_slice(&trial_l);
        *theta = trial_t;
        norm = new_norm;
        iters += 1;
    }
    (norm, iters)
}

/// Fit the density ratio model without quantile constraints: θ̂ solves
/// ∂D(0, θ)/∂θ = 0 and the fitted masses are p̂_kj = 1/(n h̄(x_kj, θ̂)).
pub fn fit_unconstrained(
    ms: &MultiSample,
    basis: &BasisFunction,
    opts: &SolveOptions,
) -> Result<DrmFit> {
    let engine = ElEngine::new(ms, basis, true)?;
    let fit = fit_engine_from(&engine, &vec![0.0; engine.dim_theta()], opts)?;
    let (m, d) = (engine.m, engine.d);
    let mut theta_raw = engine.std.theta_raw_from_engine(&fit.theta, m, d);

    // Refine in original coordinates so the residual contract holds there.
    let raw = ElEngine::new(ms, basis, false)?;
    let cons = Constraints::none();
    let mut lambda: [f64; 0] = [];
    let (residual, extra) = polish(&raw, &cons, &mut lambda, &mut theta_raw, opts);
    let report = SolveReport {
        root: theta_raw.clone(),
        residual_norm: residual,
        iterations: fit.report.iterations + extra,
        converged: residual <= opts.residual_tol,
    };
    if !report.converged {
        return Err(Error::SolverFailure(format!(
            "fit residual {residual:.3e} exceeds tolerance after polishing"
        )));
    }

    let mut val = EvalOut::new(&raw, 0);
    raw.eval(&cons, &[], &theta_raw, Want::Value, &mut val);
    let nf = ms.total() as f64;
    let log_el = val.value - nf * nf.ln();

    let log_hbar = raw.per_obs_log_hbar(&theta_raw);
    let mut weights: Vec<Vec<f64>> = (0..=m).map(|k| Vec::with_capacity(ms.count(k))).collect();
    for (j, lh) in log_hbar.iter().enumerate() {
        weights[raw.pop[j] as usize].push((-nf.ln() - lh).exp());
    }

    let mut hess_out = EvalOut::new(&raw, 0);
    raw.eval(&cons, &[], &theta_raw, Want::Hessian, &mut hess_out);
    let p = m * d;
    let mut info = Mat::zeros(p, p);
    for r in 0..p {
        for c in 0..p {
            info[(r, c)] = hess_out.hess[(r, c)] / nf;
        }
    }
    let condition = if p == 0 {
        1.0
    } else {
        let eig = sym_eigenvalues(&info);
        let mut hi = 0.0f64;
        let mut lo = f64::INFINITY;
        for e in eig {
            hi = hi.max(e.abs());
            lo = lo.min(e.abs());
        }
        if lo > 0.0 {
            hi / lo
        } else {
            f64::INFINITY
        }
    };

    Ok(DrmFit {
        theta_hat: DrmParams::from_flat(m, d, &theta_raw),
        log_el,
        weights,
        info_matrix: info,
        condition,
        report,
    })
}

// ---------------------------------------------------------------------------
// Fitted distribution functions and maximum-EL quantiles
// ---------------------------------------------------------------------------

/// A fitted population distribution function: a right-continuous step
/// function with jumps at the pooled observations.
#[derive(Clone, Debug)]
pub struct FittedCdf {
    pub population: usize,
    /// Distinct jump points, ascending.
    pub points: Vec<f64>,
    /// Cumulative mass at each jump point.
    pub cum: Vec<f64>,
}

impl FittedCdf {
    /// G̃_r(x).
    pub fn value_at(&self, x: f64) -> f64 {
        let idx = self.points.partition_point(|&p| p <= x);
        if idx == 0 {
            0.0
        } else {
            self.cum[idx - 1]
        }
    }

    pub fn terminal(&self) -> f64 {
        *self.cum.last().unwrap_or(&0.0)
    }
}

/// Fitted CDF of population r: cumulative weighted sums of
/// p̂_kj · h_r(x_kj, θ̂) over the pooled data.
pub fn fitted_cdf(
    fit: &DrmFit,
    ms: &MultiSample,
    basis: &BasisFunction,
    r: usize,
) -> Result<FittedCdf> {
    if r >= ms.n_populations() {
        return Err(Error::InvalidArgument(format!(
            "population {r} out of range 0..={}",
            ms.m()
        )));
    }
    let engine = ElEngine::new(ms, basis, false)?;
    let theta = fit.theta_hat.flatten();
    let log_hbar = engine.per_obs_log_hbar(&theta);
    let tilt = engine.per_obs_tilt(&theta, r);
    let nf = ms.total() as f64;
    // mass_j = p̂_j h_r(x_j) = exp(t_r − log n − log h̄); the exponent is
    // bounded above by log(1/ρ_r), so this cannot overflow.
    let mut pairs: Vec<(f64, f64)> = (0..engine.n)
        .map(|j| (engine.obs[j], (tilt[j] - nf.ln() - log_hbar[j]).exp()))
        .collect();
    pairs.sort_by(|a, b| a.0.total_cmp(&b.0));
    let mut points = Vec::with_capacity(pairs.len());
    let mut cum = Vec::with_capacity(pairs.len());
    let mut acc = 0.0;
    for (x, mass) in pairs {
        acc += mass;
        if points.last() == Some(&x) {
            *cum.last_mut().unwrap() = acc;
        } else {
            points.push(x);
            cum.push(acc);
        }
    }
    Ok(FittedCdf {
        population: r,
        points,
        cum,
    })
}

/// Maximum-EL quantile ξ̃ = inf{x : G̃_r(x) ≥ τ}, evaluated over the jump
/// points with a 1e-9 slack against accumulated rounding in the masses.
pub fn mele_quantile(fc: &FittedCdf, tau: f64) -> Result<f64> {
    if !(tau > 0.0 && tau < 1.0) {
        return Err(Error::InvalidSpec(format!(
            "level must be in (0,1), got {tau}"
        )));
    }
    let idx = fc.cum.partition_point(|&c| c < tau - 1e-9);
    let idx = idx.min(fc.points.len() - 1);
    Ok(fc.points[idx])
}

/// MELE quantiles for a list of specs from one fit.
pub fn mele_quantiles(
    fit: &DrmFit,
    ms: &MultiSample,
    basis: &BasisFunction,
    specs: &[QuantileSpec],
) -> Result<Vec<f64>> {
    let mut cache: Vec<Option<FittedCdf>> = vec![None; ms.n_populations()];
    let mut out = Vec::with_capacity(specs.len());
    for spec in specs {
        spec.check_population(ms)?;
        if cache[spec.population].is_none() {
            cache[spec.population] = Some(fitted_cdf(fit, ms, basis, spec.population)?);
        }
        out.push(mele_quantile(cache[spec.population].as_ref().unwrap(), spec.tau)?);
    }
    Ok(out)
}
