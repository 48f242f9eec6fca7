//! Profile log-EL under quantile constraints, the ELRT statistic, its
//! chi-square calibrated tests, and ELRT confidence regions.
//!
//! The profile is computed as the saddle point of the dual function: a
//! Newton root of the (dm + l)-dimensional gradient system with the
//! analytic Hessian as Jacobian. Iterates with a non-positive weight
//! denominator are rejected and the step halved. The starting point pairs
//! λ = 0 with per-population parameters constructed by bisection on the
//! monotone basis component, which makes the equal-weight constraint system
//! solvable exactly and places the iterate in the saddle's basin.

use std::cell::RefCell;

use rayon::prelude::*;

use crate::el::{
    fit_engine_from, polish, Constraints, DualPoint, ElEngine, EvalOut, InternalFit, Want,
};
use crate::error::{Error, Result};
use crate::model::{BasisFunction, DrmParams, MultiSample, QuantileSpec};
use crate::solver::{chisq_cdf, chisq_quantile, solve_system, LuFactors, Mat, SolveOptions, SolveReport};
use crate::wald_np::np_estimate;

// ---------------------------------------------------------------------------
// Public result types
// ---------------------------------------------------------------------------

/// Saddle point of the dual function for a fixed quantile hypothesis.
#[derive(Clone, Debug)]
pub struct ProfileSolution {
    /// (λ̂, θ̂) in original coordinates.
    pub point: DualPoint,
    /// Profile log-EL value D(λ̂, θ̂) − n log n.
    pub profile_log_el: f64,
    /// Constrained fitted masses p̂_kj, organized like the samples.
    pub constrained_weights: Vec<Vec<f64>>,
    pub report: SolveReport,
}

/// An ELRT test outcome, calibrated against χ²_l.
#[derive(Clone, Copy, Debug)]
pub struct TestResult {
    pub r_n: f64,
    pub df: usize,
    pub p_value: f64,
    pub converged: bool,
}

/// Rectangular evaluation grid of a two-dimensional ELRT confidence region.
#[derive(Clone, Debug)]
pub struct RegionGrid {
    pub spec_a: QuantileSpec,
    pub spec_b: QuantileSpec,
    pub xs: Vec<f64>,
    pub ys: Vec<f64>,
    /// R_n values, row-major over (ys × xs). Infinite entries mark grid
    /// points outside the pooled data range; NaN marks solver failures.
    pub rn: Vec<f64>,
    pub threshold: f64,
    pub alpha: f64,
    pub mask: Vec<bool>,
    /// Cell-count area of the included points.
    pub area: f64,
    pub failures: usize,
    pub out_of_range: usize,
}

impl RegionGrid {
    pub fn mask_at(&self, ix: usize, iy: usize) -> bool {
        self.mask[iy * self.xs.len() + ix]
    }

    /// Delimited export: a comment header with the region summary, a column
    /// header, then one record per grid point.
    pub fn export(&self, delim: char) -> String {
        let d = delim;
        let mut out = String::new();
        out.push_str(&format!(
            "# threshold={:.6} alpha={} area={:.6} failures={} out_of_range={}\n",
            self.threshold, self.alpha, self.area, self.failures, self.out_of_range
        ));
        out.push_str(&format!("xi_a{d}xi_b{d}r_n{d}included\n"));
        for (iy, &y) in self.ys.iter().enumerate() {
            for (ix, &x) in self.xs.iter().enumerate() {
                let rn = self.rn[iy * self.xs.len() + ix];
                let inc = self.mask[iy * self.xs.len() + ix] as u8;
                out.push_str(&format!("{x:.10e}{d}{y:.10e}{d}{rn:.10e}{d}{inc}\n"));
            }
        }
        out
    }
}

/// One-dimensional ELRT confidence set scan for a single quantile.
#[derive(Clone, Debug)]
pub struct ElrtInterval {
    pub spec: QuantileSpec,
    pub xs: Vec<f64>,
    pub rn: Vec<f64>,
    pub threshold: f64,
    pub alpha: f64,
    /// Cell-count length of the included points.
    pub length: f64,
    pub failures: usize,
    pub out_of_range: usize,
}

impl ElrtInterval {
    pub fn export(&self, delim: char) -> String {
        let d = delim;
        let mut out = String::new();
        out.push_str(&format!(
            "# threshold={:.6} alpha={} length={:.6} failures={} out_of_range={}\n",
            self.threshold, self.alpha, self.length, self.failures, self.out_of_range
        ));
        out.push_str(&format!("xi{d}r_n{d}included\n"));
        for (i, &x) in self.xs.iter().enumerate() {
            let inc = (self.rn[i] <= self.threshold) as u8;
            out.push_str(&format!("{x:.10e}{d}{:.10e}{d}{inc}\n", self.rn[i]));
        }
        out
    }
}

// ---------------------------------------------------------------------------
// Initialization (bisection on the monotone component)
// ---------------------------------------------------------------------------

/// log Σ_{j ∈ support} exp(t · q_j), shift-guarded.
fn lse_masked(q2: &[f64], mask_le: &[bool], want_le: bool, t: f64) -> f64 {
    let mut mx = f64::NEG_INFINITY;
    for j in 0..q2.len() {
        if mask_le[j] == want_le {
            let v = t * q2[j];
            if v > mx {
                mx = v;
            }
        }
    }
    let mut s = 0.0;
    for j in 0..q2.len() {
        if mask_le[j] == want_le {
            s += (t * q2[j] - mx).exp();
        }
    }
    mx + s.ln()
}

/// Solve for (θ_r1, θ_r2) so that the equal-weight system puts mass τ on
/// {x ≤ ξ}: bisection on the strictly decreasing map
/// t ↦ log A_r(t) − log B_r(t) − log(τ/(1−τ)).
fn bisect_constrained_row(
    engine: &ElEngine,
    mono: usize,
    xi: f64,
    tau: f64,
) -> Result<(f64, f64)> {
    let n = engine.n;
    let d = engine.d;
    let q2: Vec<f64> = (0..n).map(|j| engine.q[j * d + mono]).collect();
    let mask_le: Vec<bool> = engine.obs.iter().map(|&x| x <= xi).collect();
    let n_le = mask_le.iter().filter(|&&b| b).count();
    if n_le == 0 || n_le == n {
        return Err(Error::InvalidArgument(format!(
            "hypothesized value {xi} lies outside the pooled sample range; \
             the profile log-EL is undefined"
        )));
    }
    let target = (tau / (1.0 - tau)).ln();
    let g = |t: f64| lse_masked(&q2, &mask_le, true, t) - lse_masked(&q2, &mask_le, false, t) - target;

    let (mut lo, mut hi) = (-1.0f64, 1.0f64);
    let mut glo = g(lo);
    let mut ghi = g(hi);
    let mut tries = 0;
    while glo <= 0.0 {
        lo *= 2.0;
        glo = g(lo);
        tries += 1;
        if tries > 60 {
            return Err(Error::BracketNotFound(60));
        }
    }
    tries = 0;
    while ghi >= 0.0 {
        hi *= 2.0;
        ghi = g(hi);
        tries += 1;
        if tries > 60 {
            return Err(Error::BracketNotFound(60));
        }
    }
    let mut mid = 0.5 * (lo + hi);
    for _ in 0..200 {
        mid = 0.5 * (lo + hi);
        let gm = g(mid);
        if gm.abs() < 1e-12 || (hi - lo) < 1e-13 * (1.0 + mid.abs()) {
            break;
        }
        if gm > 0.0 {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    // θ_r1 normalizes the tilted equal weights: −log{A_r + B_r} with
    // p* = 1/n folded in.
    let la = lse_masked(&q2, &mask_le, true, mid);
    let lb = lse_masked(&q2, &mask_le, false, mid);
    let lab = if la > lb {
        la + (1.0 + (lb - la).exp()).ln()
    } else {
        lb + (1.0 + (la - lb).exp()).ln()
    };
    let t1 = (n as f64).ln() - lab;
    Ok((t1, mid))
}

/// Starting θ in engine coordinates: constrained populations from the
/// bisection construction, the rest from the unconstrained fit; a
/// constrained base population shifts every row so θ_0 stays zero.
fn equal_weight_init_theta(
    engine: &ElEngine,
    cons: &Constraints,
    fit_theta: &[f64],
    mono: Option<usize>,
) -> Result<Vec<f64>> {
    let (m, d) = (engine.m, engine.d);
    if m == 0 {
        return Ok(Vec::new());
    }
    let mono = mono.ok_or_else(|| {
        Error::InvalidBasis(
            "profile initialization needs a monotone non-constant basis component".to_string(),
        )
    })?;
    let mut theta = fit_theta.to_vec();
    let mut base_row: Option<(f64, f64)> = None;
    let mut done = vec![false; m + 1];
    for c in 0..cons.len() {
        let r = cons.pops[c];
        if done[r] {
            continue;
        }
        done[r] = true;
        let (t1, t2) = bisect_constrained_row(engine, mono, cons.xis[c], cons.taus[c])?;
        if r == 0 {
            base_row = Some((t1, t2));
        } else {
            for s in 0..d {
                theta[s * m + (r - 1)] = 0.0;
            }
            theta[r - 1] = t1;
            theta[mono * m + (r - 1)] = t2;
        }
    }
    if let Some((t1, t2)) = base_row {
        for i in 0..m {
            theta[i] -= t1;
            theta[mono * m + i] -= t2;
        }
    }
    Ok(theta)
}

// ---------------------------------------------------------------------------
// The saddle solve
// ---------------------------------------------------------------------------

pub(crate) struct ProfileInternal {
    pub(crate) lambda: Vec<f64>,
    pub(crate) theta: Vec<f64>,
    pub(crate) dual: f64,
    pub(crate) report: SolveReport,
}

fn profile_from(
    engine: &ElEngine,
    cons: &Constraints,
    lambda0: &[f64],
    theta0: &[f64],
    opts: &SolveOptions,
    scratch: &RefCell<EvalOut>,
) -> Result<ProfileInternal> {
    let l = cons.len();
    let p = l + engine.dim_theta();
    let mut x0 = Vec::with_capacity(p);
    x0.extend_from_slice(lambda0);
    x0.extend_from_slice(theta0);
    let report = solve_system(
        |x: &[f64], res: &mut [f64]| {
            let mut out = scratch.borrow_mut();
            if !engine.eval(cons, &x[..l], &x[l..], Want::Gradient, &mut out) {
                return false;
            }
            res.copy_from_slice(&out.grad);
            true
        },
        Some(|x: &[f64], j: &mut Mat| {
            let mut out = scratch.borrow_mut();
            if !engine.eval(cons, &x[..l], &x[l..], Want::Hessian, &mut out) {
                return false;
            }
            j.clone_from(&out.hess);
            true
        }),
        &x0,
        opts,
    )?;
    let mut out = scratch.borrow_mut();
    if !engine.eval(cons, &report.root[..l], &report.root[l..], Want::Value, &mut out) {
        return Err(Error::InfeasiblePoint);
    }
    Ok(ProfileInternal {
        lambda: report.root[..l].to_vec(),
        theta: report.root[l..].to_vec(),
        dual: out.value,
        report,
    })
}

fn factor_with_regularization(hess: &Mat) -> Option<LuFactors> {
    if let Some(f) = hess.lu_factor() {
        return Some(f);
    }
    let mut mu = 1e-8;
    while mu <= 1e-2 {
        let mut reg = hess.clone();
        for i in 0..reg.rows() {
            reg[(i, i)] += mu;
        }
        if let Some(f) = reg.lu_factor() {
            return Some(f);
        }
        mu *= 10.0;
    }
    None
}

/// Modified Newton for warm-started scan solves: steps reuse a cached
/// Jacobian factorization (often from a neighbouring grid point) and only
/// refresh it when progress stalls, so most iterations cost one gradient
/// pass. Returns None when even a fresh Jacobian cannot make progress; the
/// caller then falls back to the damped full-Newton path.
#[allow(clippy::too_many_arguments)]
fn chord_solve(
    engine: &ElEngine,
    cons: &Constraints,
    lambda0: &[f64],
    theta0: &[f64],
    opts: &SolveOptions,
    scratch: &RefCell<EvalOut>,
    lu: &mut Option<LuFactors>,
) -> Option<ProfileInternal> {
    let l = cons.len();
    let p = l + engine.dim_theta();
    let mut x = Vec::with_capacity(p);
    x.extend_from_slice(lambda0);
    x.extend_from_slice(theta0);

    let mut out = scratch.borrow_mut();
    if !engine.eval(cons, &x[..l], &x[l..], Want::Gradient, &mut out) {
        return None;
    }
    let mut g = out.grad.clone();
    let mut norm = g.iter().fold(0.0f64, |s, v| s.max(v.abs()));
    let mut fresh = false;
    let mut trial = vec![0.0; p];
    let mut iters = 0usize;

    for _ in 0..opts.max_iter {
        if norm <= opts.residual_tol {
            if !engine.eval(cons, &x[..l], &x[l..], Want::Value, &mut out) {
                return None;
            }
            return Some(ProfileInternal {
                lambda: x[..l].to_vec(),
                theta: x[l..].to_vec(),
                dual: out.value,
                report: SolveReport {
                    root: x,
                    residual_norm: norm,
                    iterations: iters,
                    converged: true,
                },
            });
        }
        if lu.is_none() {
            if !engine.eval(cons, &x[..l], &x[l..], Want::Hessian, &mut out) {
                return None;
            }
            *lu = factor_with_regularization(&out.hess);
            fresh = true;
            if lu.is_none() {
                return None;
            }
        }
        let step = lu.as_ref().unwrap().solve(&g);
        let mut t = 1.0f64;
        let mut accepted = false;
        for _ in 0..10 {
            for i in 0..p {
                trial[i] = x[i] - t * step[i];
            }
            if engine.eval(cons, &trial[..l], &trial[l..], Want::Gradient, &mut out) {
                let tn = out.grad.iter().fold(0.0f64, |s, v| s.max(v.abs()));
                if tn.is_finite() && tn < norm {
                    x.copy_from_slice(&trial);
                    g.copy_from_slice(&out.grad);
                    // Slow contraction on a stale Jacobian: refresh next.
                    if tn > 0.05 * norm && !fresh {
                        *lu = None;
                    }
                    norm = tn;
                    accepted = true;
                    break;
                }
            }
            t *= 0.5;
        }
        iters += 1;
        if !accepted {
            if fresh {
                return None;
            }
            *lu = None;
            continue;
        }
        fresh = false;
    }
    None
}

// ---------------------------------------------------------------------------
// Per-dataset analysis context
// ---------------------------------------------------------------------------

/// Everything needed to evaluate R_n repeatedly on one dataset: the
/// standardized engine, the unconstrained fit, and the constraint template.
pub(crate) struct ElrtAnalysis {
    pub(crate) engine: ElEngine,
    pub(crate) fit: InternalFit,
    pub(crate) specs: Vec<QuantileSpec>,
    cons_proto: Constraints,
    mono: Option<usize>,
    opts: SolveOptions,
}

impl ElrtAnalysis {
    /// Fit the model and prepare constraint templates. Spec values are
    /// placeholders here; every evaluation sets its own hypothesized point.
    pub(crate) fn new(
        ms: &MultiSample,
        basis: &BasisFunction,
        specs: &[QuantileSpec],
        opts: &SolveOptions,
    ) -> Result<Self> {
        if specs.is_empty() {
            return Err(Error::InvalidSpec("no quantile specs given".to_string()));
        }
        for spec in specs {
            spec.check_population(ms)?;
        }
        let engine = ElEngine::new(ms, basis, true)?;
        let fit = fit_engine_from(&engine, &vec![0.0; engine.dim_theta()], opts)?;
        let mono = basis.monotone_component(ms);
        // Template with in-range placeholder values; real values are set
        // per evaluation.
        let placeholder = engine.obs[0];
        let filled: Vec<QuantileSpec> = specs
            .iter()
            .map(|s| {
                let mut c = *s;
                if c.value.is_none() {
                    c.value = Some(placeholder);
                }
                c
            })
            .collect();
        let cons_proto = Constraints::build(&engine, &filled)?;
        Ok(ElrtAnalysis {
            engine,
            fit,
            specs: specs.to_vec(),
            cons_proto,
            mono,
            opts: opts.clone(),
        })
    }

    pub(crate) fn sup_dual(&self) -> f64 {
        self.fit.sup_dual
    }

    /// Maximum-EL quantiles of the spec populations.
    pub(crate) fn mele(&self) -> Vec<f64> {
        crate::wald_np::mele_from_engine(&self.engine, &self.fit.theta, &self.specs)
    }

    fn cons_at(&self, xi: &[f64]) -> Constraints {
        let mut cons = self.cons_proto.clone();
        for (c, &v) in xi.iter().enumerate() {
            cons.set_xi(&self.engine, c, v);
        }
        cons
    }

    fn pooled_feasible(&self, xi: f64) -> bool {
        let n_le = self.engine.obs.iter().filter(|&&x| x <= xi).count();
        n_le > 0 && n_le < self.engine.n
    }

    /// Solve the profile at a hypothesized point, optionally warm-started;
    /// returns the solution or None on failure (after an initialization
    /// retry).
    fn solve_at(
        &self,
        cons: &Constraints,
        warm: Option<(&[f64], &[f64])>,
        opts: &SolveOptions,
        scratch: &RefCell<EvalOut>,
        lu: &mut Option<LuFactors>,
    ) -> Option<ProfileInternal> {
        let l = cons.len();
        if let Some((l0, t0)) = warm {
            if let Some(sol) = chord_solve(&self.engine, cons, l0, t0, opts, scratch, lu) {
                return Some(sol);
            }
        }
        *lu = None;
        let init = equal_weight_init_theta(&self.engine, cons, &self.fit.theta, self.mono).ok()?;
        let sol = profile_from(&self.engine, cons, &vec![0.0; l], &init, opts, scratch).ok()?;
        if sol.report.converged {
            Some(sol)
        } else {
            None
        }
    }

    /// Scan solves trade a little residual slack for fewer Newton steps;
    /// the statistic is quadratically insensitive to it near the saddle.
    fn scan_opts(&self) -> SolveOptions {
        let mut o = self.opts.clone();
        o.residual_tol = o.residual_tol.max(1e-7);
        o
    }

    fn rn_of(&self, sol: &ProfileInternal) -> Option<f64> {
        let r = 2.0 * (self.fit.sup_dual - sol.dual);
        if r < -1e-8 {
            None
        } else {
            Some(r.max(0.0))
        }
    }

    /// R_n at a hypothesized quantile vector. Points outside the pooled
    /// sample range yield +∞ (the constrained problem has no solution
    /// there); solver failures are errors.
    pub(crate) fn rn_at(&self, xi: &[f64]) -> Result<f64> {
        assert_eq!(xi.len(), self.specs.len());
        if xi.iter().any(|&v| !self.pooled_feasible(v)) {
            return Ok(f64::INFINITY);
        }
        let sol = self.solve_robust(xi).ok_or_else(|| {
            Error::SolverFailure("profile saddle solve did not converge".to_string())
        })?;
        self.rn_of(&sol).ok_or_else(|| {
            Error::SolverFailure("ELRT statistic negative beyond numerical slack".to_string())
        })
    }

    /// Direct solve with a homotopy fallback: when the one-shot solve fails
    /// (hypotheses deep in a tail sit far from the equal-weight start), the
    /// saddle is tracked along the segment from the maximum-EL point to the
    /// target, each step warm-starting the next.
    fn solve_robust(&self, xi: &[f64]) -> Option<ProfileInternal> {
        let cons = self.cons_at(xi);
        let scratch = RefCell::new(EvalOut::new(&self.engine, cons.len()));
        if let Some(sol) = self.solve_at(&cons, None, &self.opts, &scratch, &mut None) {
            return Some(sol);
        }
        let mele = self.mele();
        'ladder: for steps in [8usize, 32] {
            let mut warm: Option<(Vec<f64>, Vec<f64>)> = None;
            let mut lu = None;
            let mut cons = self.cons_proto.clone();
            for k in 1..=steps {
                let f = k as f64 / steps as f64;
                let point: Vec<f64> = mele
                    .iter()
                    .zip(xi)
                    .map(|(&a, &b)| a + f * (b - a))
                    .collect();
                for (c, &v) in point.iter().enumerate() {
                    cons.set_xi(&self.engine, c, v);
                }
                match self.solve_at(
                    &cons,
                    warm.as_ref().map(|(a, b)| (&a[..], &b[..])),
                    &self.opts,
                    &scratch,
                    &mut lu,
                ) {
                    Some(sol) => {
                        if k == steps {
                            return Some(sol);
                        }
                        warm = Some((sol.lambda, sol.theta));
                    }
                    None => continue 'ladder,
                }
            }
        }
        None
    }

    /// Full profile solution at a hypothesized point (engine coordinates).
    pub(crate) fn profile_at(&self, xi: &[f64]) -> Result<ProfileInternal> {
        for &v in xi {
            if !self.pooled_feasible(v) {
                return Err(Error::InvalidArgument(format!(
                    "hypothesized value {v} lies outside the pooled sample range; \
                     the profile log-EL is undefined"
                )));
            }
        }
        if let Some(sol) = self.solve_robust(xi) {
            return Ok(sol);
        }
        // Surface the unconverged report rather than silently failing.
        let cons = self.cons_at(xi);
        let l = cons.len();
        let scratch = RefCell::new(EvalOut::new(&self.engine, l));
        let init = equal_weight_init_theta(&self.engine, &cons, &self.fit.theta, self.mono)?;
        profile_from(&self.engine, &cons, &vec![0.0; l], &init, &self.opts, &scratch)
    }

    /// Scan R_n over a rectangle (two specs). Grid nodes sharing an
    /// indicator pattern collapse to one solve; unique rows are processed
    /// in fixed blocks, serpentine within a block so each solve warm-starts
    /// from an adjacent solved point. Block boundaries are fixed, so the
    /// result does not depend on thread scheduling.
    pub(crate) fn scan_grid(&self, xs: &[f64], ys: &[f64]) -> RnGrid {
        assert_eq!(self.specs.len(), 2);
        let n = self.engine.n;
        let mut pooled = self.engine.obs.clone();
        pooled.sort_by(|a, b| a.total_cmp(b));
        let count_le = |v: f64| pooled.partition_point(|&t| t <= v);
        let ca: Vec<usize> = xs.iter().map(|&v| count_le(v)).collect();
        let cb: Vec<usize> = ys.iter().map(|&v| count_le(v)).collect();
        let (ux, gx) = unique_groups(&ca);
        let (uy, gy) = unique_groups(&cb);
        let opts = self.scan_opts();

        const BLOCK: usize = 8;
        let blocks: Vec<(usize, usize)> = (0..uy.len())
            .step_by(BLOCK)
            .map(|s| (s, (s + BLOCK).min(uy.len())))
            .collect();

        let chunks: Vec<Vec<f64>> = blocks
            .par_iter()
            .map(|&(row_lo, row_hi)| {
                let mut out = vec![f64::NAN; (row_hi - row_lo) * ux.len()];
                let mut cons = self.cons_proto.clone();
                let scratch = RefCell::new(EvalOut::new(&self.engine, cons.len()));
                let mut lu: Option<LuFactors> = None;
                let mut warm: Option<(Vec<f64>, Vec<f64>)> = None;
                for (step, r) in (row_lo..row_hi).enumerate() {
                    let iy = uy[r];
                    let base = step * ux.len();
                    if cb[iy] == 0 || cb[iy] == n {
                        out[base..base + ux.len()].fill(f64::INFINITY);
                        warm = None;
                        continue;
                    }
                    cons.set_xi(&self.engine, 1, ys[iy]);
                    let cols: Vec<usize> = if step % 2 == 0 {
                        (0..ux.len()).collect()
                    } else {
                        (0..ux.len()).rev().collect()
                    };
                    for jx in cols {
                        let ix = ux[jx];
                        if ca[ix] == 0 || ca[ix] == n {
                            out[base + jx] = f64::INFINITY;
                            warm = None;
                            continue;
                        }
                        cons.set_xi(&self.engine, 0, xs[ix]);
                        let sol = self.solve_at(
                            &cons,
                            warm.as_ref().map(|(a, b)| (&a[..], &b[..])),
                            &opts,
                            &scratch,
                            &mut lu,
                        );
                        match sol {
                            Some(s) => {
                                out[base + jx] = self.rn_of(&s).unwrap_or(f64::NAN);
                                warm = Some((s.lambda, s.theta));
                            }
                            None => {
                                out[base + jx] = f64::NAN;
                                warm = None;
                            }
                        }
                    }
                }
                out
            })
            .collect();

        // Reassemble unique rows then broadcast to the full lattice.
        let mut unique_rows: Vec<&[f64]> = Vec::with_capacity(uy.len());
        for (bi, &(row_lo, row_hi)) in blocks.iter().enumerate() {
            for step in 0..row_hi - row_lo {
                unique_rows.push(&chunks[bi][step * ux.len()..(step + 1) * ux.len()]);
            }
        }
        let (nx, ny) = (xs.len(), ys.len());
        let mut rn = vec![0.0; nx * ny];
        let mut failures = 0usize;
        let mut out_of_range = 0usize;
        for iy in 0..ny {
            for ix in 0..nx {
                let v = unique_rows[gy[iy]][gx[ix]];
                if v.is_nan() {
                    failures += 1;
                } else if v.is_infinite() {
                    out_of_range += 1;
                }
                rn[iy * nx + ix] = v;
            }
        }
        RnGrid {
            rn,
            failures,
            out_of_range,
        }
    }

    /// One-dimensional R_n scan for interval studies.
    pub(crate) fn scan_line(&self, xs: &[f64]) -> RnGrid {
        assert_eq!(self.specs.len(), 1);
        let n = self.engine.n;
        let opts = self.scan_opts();
        let mut rn = vec![f64::NAN; xs.len()];
        let mut failures = 0usize;
        let mut out_of_range = 0usize;
        let mut cons = self.cons_proto.clone();
        let scratch = RefCell::new(EvalOut::new(&self.engine, cons.len()));
        let mut lu: Option<LuFactors> = None;
        let mut warm: Option<(Vec<f64>, Vec<f64>)> = None;
        for (i, &x) in xs.iter().enumerate() {
            let n_le = self.engine.obs.iter().filter(|&&t| t <= x).count();
            if n_le == 0 || n_le == n {
                rn[i] = f64::INFINITY;
                out_of_range += 1;
                warm = None;
                continue;
            }
            cons.set_xi(&self.engine, 0, x);
            match self.solve_at(
                &cons,
                warm.as_ref().map(|(a, b)| (&a[..], &b[..])),
                &opts,
                &scratch,
                &mut lu,
            ) {
                Some(s) => {
                    rn[i] = self.rn_of(&s).unwrap_or(f64::NAN);
                    if rn[i].is_nan() {
                        failures += 1;
                    }
                    warm = Some((s.lambda, s.theta));
                }
                None => {
                    failures += 1;
                    warm = None;
                }
            }
        }
        RnGrid {
            rn,
            failures,
            out_of_range,
        }
    }
}

/// Raw scan output shared by grids and lines.
pub(crate) struct RnGrid {
    pub(crate) rn: Vec<f64>,
    pub(crate) failures: usize,
    pub(crate) out_of_range: usize,
}

fn unique_groups(vals: &[usize]) -> (Vec<usize>, Vec<usize>) {
    let mut reps = Vec::new();
    let mut group = Vec::with_capacity(vals.len());
    for (i, &v) in vals.iter().enumerate() {
        if reps.is_empty() || vals[*reps.last().unwrap()] != v {
            reps.push(i);
        }
        group.push(reps.len() - 1);
    }
    (reps, group)
}

// ---------------------------------------------------------------------------
// Public operations
// ---------------------------------------------------------------------------

/// Feasible starting point for the profile solve: λ = 0 with θ rows built
/// per the bisection construction (constrained populations) and the
/// unconstrained fit (the rest), in original coordinates.
pub fn init_profile(
    ms: &MultiSample,
    basis: &BasisFunction,
    specs: &[QuantileSpec],
) -> Result<DualPoint> {
    let opts = SolveOptions::default();
    let engine = ElEngine::new(ms, basis, true)?;
    let fit = fit_engine_from(&engine, &vec![0.0; engine.dim_theta()], &opts)?;
    let cons = Constraints::build(&engine, specs)?;
    let mono = basis.monotone_component(ms);
    let theta = equal_weight_init_theta(&engine, &cons, &fit.theta, mono)?;
    let raw = engine.std.theta_raw_from_engine(&theta, engine.m, engine.d);
    Ok(DualPoint {
        lambda: vec![0.0; specs.len()],
        theta: DrmParams::from_flat(engine.m, engine.d, &raw),
    })
}

/// Profile log-EL for a fully specified hypothesis: the Newton root of the
/// joint gradient system, refined in original coordinates.
pub fn profile_log_el(
    ms: &MultiSample,
    basis: &BasisFunction,
    specs: &[QuantileSpec],
    opts: &SolveOptions,
) -> Result<ProfileSolution> {
    let analysis = ElrtAnalysis::new(ms, basis, specs, opts)?;
    let xi: Vec<f64> = specs
        .iter()
        .map(|s| {
            s.value.ok_or_else(|| {
                Error::InvalidSpec(format!(
                    "spec for population {} has no hypothesized value",
                    s.population
                ))
            })
        })
        .collect::<Result<_>>()?;
    let sol = analysis.profile_at(&xi)?;
    let engine = &analysis.engine;
    let (m, d) = (engine.m, engine.d);
    let mut theta_raw = engine.std.theta_raw_from_engine(&sol.theta, m, d);
    let mut lambda = sol.lambda.clone();

    let raw_engine = ElEngine::new(ms, basis, false)?;
    let filled: Vec<QuantileSpec> = specs.to_vec();
    let cons_raw = Constraints::build(&raw_engine, &filled)?;
    let (residual, extra) = polish(&raw_engine, &cons_raw, &mut lambda, &mut theta_raw, opts);

    let mut val = EvalOut::new(&raw_engine, cons_raw.len());
    if !raw_engine.eval(&cons_raw, &lambda, &theta_raw, Want::Value, &mut val) {
        return Err(Error::InfeasiblePoint);
    }
    let nf = ms.total() as f64;
    let profile = val.value - nf * nf.ln();

    let flat_weights = raw_engine
        .per_obs_weights(&cons_raw, &lambda, &theta_raw)
        .ok_or(Error::InfeasiblePoint)?;
    let mut weights: Vec<Vec<f64>> = (0..=m).map(|k| Vec::with_capacity(ms.count(k))).collect();
    for (j, w) in flat_weights.iter().enumerate() {
        weights[raw_engine.pop[j] as usize].push(*w);
    }

    let mut root = lambda.clone();
    root.extend_from_slice(&theta_raw);
    let report = SolveReport {
        root,
        residual_norm: residual,
        iterations: sol.report.iterations + extra,
        converged: sol.report.converged && residual <= opts.residual_tol,
    };
    Ok(ProfileSolution {
        point: DualPoint {
            lambda,
            theta: DrmParams::from_flat(m, d, &theta_raw),
        },
        profile_log_el: profile,
        constrained_weights: weights,
        report,
    })
}

/// The ELRT statistic R_n = 2[sup ℓ_n − ℓ̃_n(ξ*)] with its χ²_l p-value.
pub fn elrt_statistic(
    ms: &MultiSample,
    basis: &BasisFunction,
    specs: &[QuantileSpec],
    opts: &SolveOptions,
) -> Result<TestResult> {
    let analysis = ElrtAnalysis::new(ms, basis, specs, opts)?;
    let xi: Vec<f64> = specs
        .iter()
        .map(|s| {
            s.value.ok_or_else(|| {
                Error::InvalidSpec(format!(
                    "spec for population {} has no hypothesized value",
                    s.population
                ))
            })
        })
        .collect::<Result<_>>()?;
    let sol = analysis.profile_at(&xi)?;
    let r = 2.0 * (analysis.sup_dual() - sol.dual);
    if r < -1e-8 {
        return Err(Error::SolverFailure(format!(
            "ELRT statistic {r:.3e} negative beyond numerical slack"
        )));
    }
    let r_n = r.max(0.0);
    let df = specs.len();
    Ok(TestResult {
        r_n,
        df,
        p_value: 1.0 - chisq_cdf(df as u32, r_n),
        converged: sol.report.converged,
    })
}

/// Evaluate the ELRT confidence region for two quantiles on a rectangular
/// grid. The bounding box is the maximum-EL point ± 4 nonparametric
/// standard errors; pass an explicit box (for example, a doubled Wald
/// ellipse box) through [`elrt_region_in_box`].
pub fn elrt_region(
    ms: &MultiSample,
    basis: &BasisFunction,
    specs: &[QuantileSpec],
    alpha: f64,
    nx: usize,
    ny: usize,
    opts: &SolveOptions,
) -> Result<RegionGrid> {
    let analysis = ElrtAnalysis::new(ms, basis, specs, opts)?;
    let bbox = default_bbox(ms, &analysis)?;
    region_from_analysis(&analysis, alpha, nx, ny, bbox)
}

/// As [`elrt_region`], with the evaluation rectangle supplied by the caller
/// as per-axis (low, high) bounds.
pub fn elrt_region_in_box(
    ms: &MultiSample,
    basis: &BasisFunction,
    specs: &[QuantileSpec],
    alpha: f64,
    nx: usize,
    ny: usize,
    opts: &SolveOptions,
    bbox: [(f64, f64); 2],
) -> Result<RegionGrid> {
    let analysis = ElrtAnalysis::new(ms, basis, specs, opts)?;
    region_from_analysis(&analysis, alpha, nx, ny, bbox)
}

/// MELE ± 4 nonparametric standard errors per axis.
pub(crate) fn default_bbox(ms: &MultiSample, analysis: &ElrtAnalysis) -> Result<[(f64, f64); 2]> {
    let est = np_estimate(ms, &analysis.specs)?;
    let se = est.standard_errors(ms.total());
    let mele = analysis.mele();
    Ok([
        (mele[0] - 4.0 * se[0], mele[0] + 4.0 * se[0]),
        (mele[1] - 4.0 * se[1], mele[1] + 4.0 * se[1]),
    ])
}

pub(crate) fn linspace(lo: f64, hi: f64, n: usize) -> Vec<f64> {
    assert!(n >= 2, "grid needs at least 2 points per axis");
    let step = (hi - lo) / (n - 1) as f64;
    (0..n).map(|i| lo + i as f64 * step).collect()
}


fn region_from_analysis(
    analysis: &ElrtAnalysis,
    alpha: f64,
    nx: usize,
    ny: usize,
    bbox: [(f64, f64); 2],
) -> Result<RegionGrid> {
    if analysis.specs.len() != 2 {
        return Err(Error::InvalidSpec(
            "region grids need exactly two quantile specs".to_string(),
        ));
    }
    if !(alpha > 0.0 && alpha < 1.0) {
        return Err(Error::InvalidArgument(format!(
            "alpha must be in (0,1), got {alpha}"
        )));
    }
    let xs = linspace(bbox[0].0, bbox[0].1, nx);
    let ys = linspace(bbox[1].0, bbox[1].1, ny);
    let scan = analysis.scan_grid(&xs, &ys);
    let total = nx * ny;
    if scan.failures * 100 >= total {
        return Err(Error::TooManyFailures {
            what: "region grid solves",
            failed: scan.failures,
            total,
            limit_percent: 1.0,
        });
    }
    let threshold = chisq_quantile(2, 1.0 - alpha);
    let mask: Vec<bool> = scan.rn.iter().map(|&r| r <= threshold).collect();
    let dx = (bbox[0].1 - bbox[0].0) / (nx - 1) as f64;
    let dy = (bbox[1].1 - bbox[1].0) / (ny - 1) as f64;
    let area = mask.iter().filter(|&&b| b).count() as f64 * dx * dy;
    Ok(RegionGrid {
        spec_a: analysis.specs[0],
        spec_b: analysis.specs[1],
        xs,
        ys,
        rn: scan.rn,
        threshold,
        alpha,
        mask,
        area,
        failures: scan.failures,
        out_of_range: scan.out_of_range,
    })
}
