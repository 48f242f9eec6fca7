//! Self-contained numerical kernels: a damped Newton solver for square
//! nonlinear systems with Broyden fallback, chi-square distribution
//! functions built on the regularized incomplete gamma function, and a
//! finite-difference gradient checker.

use crate::error::{Error, Result};

// ---------------------------------------------------------------------------
// Dense matrices
// ---------------------------------------------------------------------------

/// Small dense row-major matrix. Sized for systems of a few dozen unknowns;
/// everything here is O(n³) direct linear algebra.
#[derive(Clone, Debug, PartialEq)]
pub struct Mat {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl Mat {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Mat {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn from_rows(rows: &[&[f64]]) -> Self {
        let r = rows.len();
        let c = if r == 0 { 0 } else { rows[0].len() };
        let mut data = Vec::with_capacity(r * c);
        for row in rows {
            assert_eq!(row.len(), c, "ragged rows");
            data.extend_from_slice(row);
        }
        Mat { rows: r, cols: c, data }
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Mat::zeros(n, n);
        for i in 0..n {
            m[(i, i)] = 1.0;
        }
        m
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn fill(&mut self, v: f64) {
        self.data.fill(v);
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn row_mut(&mut self, i: usize) -> &mut [f64] {
        let c = self.cols;
        &mut self.data[i * c..(i + 1) * c]
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Solve `self * x = b` by LU with partial pivoting. Returns `None` when
    /// a pivot collapses relative to the matrix scale.
    pub fn lu_solve(&self, b: &[f64]) -> Option<Vec<f64>> {
        assert_eq!(self.rows, self.cols, "square system required");
        assert_eq!(b.len(), self.rows);
        let n = self.rows;
        let mut a = self.data.clone();
        let mut x = b.to_vec();
        let scale = a.iter().fold(0.0f64, |s, v| s.max(v.abs())).max(1.0);
        for col in 0..n {
            let mut piv = col;
            let mut best = a[col * n + col].abs();
            for r in col + 1..n {
                let v = a[r * n + col].abs();
                if v > best {
                    best = v;
                    piv = r;
                }
            }
            if !(best > scale * 1e-14) {
                return None;
            }
            if piv != col {
                for c in 0..n {
                    a.swap(col * n + c, piv * n + c);
                }
                x.swap(col, piv);
            }
            let d = a[col * n + col];
            for r in col + 1..n {
                let f = a[r * n + col] / d;
                if f == 0.0 {
                    continue;
                }
                for c in col + 1..n {
                    a[r * n + c] -= f * a[col * n + c];
                }
                x[r] -= f * x[col];
            }
        }
        for col in (0..n).rev() {
            let mut v = x[col];
            for c in col + 1..n {
                v -= a[col * n + c] * x[c];
            }
            x[col] = v / a[col * n + col];
        }
        if x.iter().all(|v| v.is_finite()) {
            Some(x)
        } else {
            None
        }
    }

    /// Factor the matrix once for repeated solves against many right-hand
    /// sides; returns `None` on a collapsed pivot.
    pub fn lu_factor(&self) -> Option<LuFactors> {
        assert_eq!(self.rows, self.cols);
        let n = self.rows;
        let mut a = self.data.clone();
        let mut perm: Vec<usize> = (0..n).collect();
        let scale = a.iter().fold(0.0f64, |s, v| s.max(v.abs())).max(1.0);
        for col in 0..n {
            let mut piv = col;
            let mut best = a[col * n + col].abs();
            for r in col + 1..n {
                let v = a[r * n + col].abs();
                if v > best {
                    best = v;
                    piv = r;
                }
            }
            if !(best > scale * 1e-14) {
                return None;
            }
            if piv != col {
                for c in 0..n {
                    a.swap(col * n + c, piv * n + c);
                }
                perm.swap(col, piv);
            }
            let d = a[col * n + col];
            for r in col + 1..n {
                let f = a[r * n + col] / d;
                a[r * n + col] = f;
                if f == 0.0 {
                    continue;
                }
                for c in col + 1..n {
                    a[r * n + c] -= f * a[col * n + c];
                }
            }
        }
        Some(LuFactors { n, lu: a, perm })
    }

    /// Determinant by LU; small matrices only.
    pub fn det(&self) -> f64 {
        assert_eq!(self.rows, self.cols);
        let n = self.rows;
        let mut a = self.data.clone();
        let mut det = 1.0f64;
        for col in 0..n {
            let mut piv = col;
            let mut best = a[col * n + col].abs();
            for r in col + 1..n {
                let v = a[r * n + col].abs();
                if v > best {
                    best = v;
                    piv = r;
                }
            }
            if best == 0.0 {
                return 0.0;
            }
            if piv != col {
                for c in 0..n {
                    a.swap(col * n + c, piv * n + c);
                }
                det = -det;
            }
            let d = a[col * n + col];
            det *= d;
            for r in col + 1..n {
                let f = a[r * n + col] / d;
                for c in col + 1..n {
                    a[r * n + c] -= f * a[col * n + c];
                }
            }
        }
        det
    }
}

/// A reusable LU factorization with partial pivoting.
#[derive(Clone, Debug)]
pub struct LuFactors {
    n: usize,
    lu: Vec<f64>,
    perm: Vec<usize>,
}

impl LuFactors {
    pub fn solve(&self, b: &[f64]) -> Vec<f64> {
        let n = self.n;
        assert_eq!(b.len(), n);
        let mut x: Vec<f64> = self.perm.iter().map(|&p| b[p]).collect();
        for col in 0..n {
            let xc = x[col];
            if xc != 0.0 {
                for r in col + 1..n {
                    x[r] -= self.lu[r * n + col] * xc;
                }
            }
        }
        for col in (0..n).rev() {
            let mut v = x[col];
            for c in col + 1..n {
                v -= self.lu[col * n + c] * x[c];
            }
            x[col] = v / self.lu[col * n + col];
        }
        x
    }
}

impl std::ops::Index<(usize, usize)> for Mat {
    type Output = f64;
    fn index(&self, (r, c): (usize, usize)) -> &f64 {
        &self.data[r * self.cols + c]
    }
}

impl std::ops::IndexMut<(usize, usize)> for Mat {
    fn index_mut(&mut self, (r, c): (usize, usize)) -> &mut f64 {
        &mut self.data[r * self.cols + c]
    }
}

/// Eigenvalues of a symmetric matrix by the cyclic Jacobi method,
/// returned in ascending order.
pub fn sym_eigenvalues(m: &Mat) -> Vec<f64> {
    assert_eq!(m.rows(), m.cols());
    let n = m.rows();
    let mut a = m.clone();
    for _sweep in 0..60 {
        let mut off = 0.0;
        for r in 0..n {
            for c in r + 1..n {
                off += a[(r, c)] * a[(r, c)];
            }
        }
        if off.sqrt() < 1e-14 * (1.0 + frobenius(&a)) {
            break;
        }
        for p in 0..n {
            for q in p + 1..n {
                let apq = a[(p, q)];
                if apq.abs() < 1e-300 {
                    continue;
                }
                let tau = (a[(q, q)] - a[(p, p)]) / (2.0 * apq);
                let t = if tau >= 0.0 {
                    1.0 / (tau + (1.0 + tau * tau).sqrt())
                } else {
                    -1.0 / (-tau + (1.0 + tau * tau).sqrt())
                };
                let c = 1.0 / (1.0 + t * t).sqrt();
                let s = t * c;
                for k in 0..n {
                    let akp = a[(k, p)];
                    let akq = a[(k, q)];
                    a[(k, p)] = c * akp - s * akq;
                    a[(k, q)] = s * akp + c * akq;
                }
                for k in 0..n {
                    let apk = a[(p, k)];
                    let aqk = a[(q, k)];
                    a[(p, k)] = c * apk - s * aqk;
                    a[(q, k)] = s * apk + c * aqk;
                }
            }
        }
    }
    let mut eig: Vec<f64> = (0..n).map(|i| a[(i, i)]).collect();
    eig.sort_by(|x, y| x.total_cmp(y));
    eig
}

fn frobenius(a: &Mat) -> f64 {
    a.data().iter().map(|v| v * v).sum::<f64>().sqrt()
}

// ---------------------------------------------------------------------------
// Damped Newton / Broyden root solver
// ---------------------------------------------------------------------------

/// Options for [`solve_system`].
#[derive(Clone, Debug)]
pub struct SolveOptions {
    /// Convergence threshold on the max-norm of the residual.
    pub residual_tol: f64,
    /// Iteration cap.
    pub max_iter: usize,
    /// Maximum number of step halvings per iteration.
    pub step_halving_max: usize,
    /// Use a finite-difference Jacobian when no analytic one is supplied.
    /// When false, an initial finite-difference Jacobian is maintained by
    /// Broyden rank-1 updates instead of being recomputed.
    pub fd_jacobian: bool,
}

impl Default for SolveOptions {
    fn default() -> Self {
        SolveOptions {
            residual_tol: 1e-10,
            max_iter: 200,
            step_halving_max: 40,
            fd_jacobian: true,
        }
    }
}

/// Outcome of a nonlinear solve.
#[derive(Clone, Debug)]
pub struct SolveReport {
    pub root: Vec<f64>,
    pub residual_norm: f64,
    pub iterations: usize,
    pub converged: bool,
}

fn max_norm(v: &[f64]) -> f64 {
    v.iter().fold(0.0f64, |s, x| s.max(x.abs()))
}

/// Find a root of the square system `f(x) = 0` by damped Newton iteration.
///
/// `f` writes the residual into its output slice and returns `false` when
/// the point is infeasible (the step is then halved). `jac` fills the
/// Jacobian and returns `false` when it cannot be evaluated, in which case
/// the last Jacobian is carried forward by a Broyden rank-1 update.
/// Singular Jacobians are retried with growing diagonal regularization
/// before giving up.
pub fn solve_system<F, J>(
    mut f: F,
    mut jac: Option<J>,
    x0: &[f64],
    opts: &SolveOptions,
) -> Result<SolveReport>
where
    F: FnMut(&[f64], &mut [f64]) -> bool,
    J: FnMut(&[f64], &mut Mat) -> bool,
{
    let p = x0.len();
    let mut x = x0.to_vec();
    let mut fx = vec![0.0; p];
    if !f(&x, &mut fx) || !fx.iter().all(|v| v.is_finite()) {
        return Err(Error::SolverFailure(
            "initial point is infeasible".to_string(),
        ));
    }
    if p == 0 {
        return Ok(SolveReport {
            root: x,
            residual_norm: 0.0,
            iterations: 0,
            converged: true,
        });
    }
    let mut norm = max_norm(&fx);
    let mut jmat = Mat::zeros(p, p);
    let mut have_j = false;
    let mut stalls = 0usize;

    for iter in 0..opts.max_iter {
        if norm <= opts.residual_tol {
            return Ok(SolveReport {
                root: x,
                residual_norm: norm,
                iterations: iter,
                converged: true,
            });
        }

        let analytic_ok = match jac.as_mut() {
            Some(j) => j(&x, &mut jmat) && jmat.is_finite(),
            None => false,
        };
        if analytic_ok {
            have_j = true;
        } else if jac.is_none() && opts.fd_jacobian {
            fd_jacobian(&mut f, &x, &fx, &mut jmat)?;
            have_j = true;
        } else if !have_j {
            // First iteration of a Broyden-only run, or the analytic
            // Jacobian failed before any estimate exists: bootstrap from
            // finite differences.
            fd_jacobian(&mut f, &x, &fx, &mut jmat)?;
            have_j = true;
        }
        // else: keep the Broyden-updated jmat from the previous step.

        let step = solve_regularized(&jmat, &fx)?;

        let mut t = 1.0f64;
        let mut trial = vec![0.0; p];
        let mut ftrial = vec![0.0; p];
        let mut accepted = false;
        let mut fallback: Option<(Vec<f64>, Vec<f64>, f64)> = None;
        for _ in 0..=opts.step_halving_max {
            for i in 0..p {
                trial[i] = x[i] - t * step[i];
            }
            let feasible = f(&trial, &mut ftrial) && ftrial.iter().all(|v| v.is_finite());
            if feasible {
                let tn = max_norm(&ftrial);
                if tn < norm {
                    broyden_update(&mut jmat, &x, &trial, &fx, &ftrial);
                    x.copy_from_slice(&trial);
                    fx.copy_from_slice(&ftrial);
                    norm = tn;
                    accepted = true;
                    stalls = 0;
                    break;
                }
                if fallback.is_none() {
                    fallback = Some((trial.clone(), ftrial.clone(), tn));
                }
            }
            t *= 0.5;
        }
        if !accepted {
            match fallback {
                // No halving reduced the residual: take the best feasible
                // trial once to escape, but give up on a repeat stall.
                Some((tx, tfx, tn)) if stalls == 0 => {
                    broyden_update(&mut jmat, &x, &tx, &fx, &tfx);
                    x = tx;
                    fx = tfx;
                    norm = tn;
                    stalls += 1;
                }
                Some(_) => {
                    return Ok(SolveReport {
                        root: x,
                        residual_norm: norm,
                        iterations: iter + 1,
                        converged: false,
                    });
                }
                None => return Err(Error::FeasibilityLost(opts.step_halving_max)),
            }
        }
    }
    let converged = norm <= opts.residual_tol;
    Ok(SolveReport {
        root: x,
        residual_norm: norm,
        iterations: opts.max_iter,
        converged,
    })
}

fn fd_jacobian<F>(f: &mut F, x: &[f64], fx: &[f64], out: &mut Mat) -> Result<()>
where
    F: FnMut(&[f64], &mut [f64]) -> bool,
{
    let p = x.len();
    let mut xp = x.to_vec();
    let mut fp = vec![0.0; p];
    let mut fm = vec![0.0; p];
    for j in 0..p {
        let h = 1e-7 * (1.0 + x[j].abs());
        xp[j] = x[j] + h;
        let ok_p = f(&xp, &mut fp);
        xp[j] = x[j] - h;
        let ok_m = f(&xp, &mut fm);
        xp[j] = x[j];
        if ok_p && ok_m {
            for i in 0..p {
                out[(i, j)] = (fp[i] - fm[i]) / (2.0 * h);
            }
        } else if ok_p {
            for i in 0..p {
                out[(i, j)] = (fp[i] - fx[i]) / h;
            }
        } else if ok_m {
            for i in 0..p {
                out[(i, j)] = (fx[i] - fm[i]) / h;
            }
        } else {
            return Err(Error::SolverFailure(
                "finite-difference Jacobian infeasible in both directions".to_string(),
            ));
        }
    }
    Ok(())
}

fn broyden_update(j: &mut Mat, x_old: &[f64], x_new: &[f64], f_old: &[f64], f_new: &[f64]) {
    let p = x_old.len();
    let mut dx = vec![0.0; p];
    let mut r = vec![0.0; p];
    let mut dx2 = 0.0;
    for i in 0..p {
        dx[i] = x_new[i] - x_old[i];
        dx2 += dx[i] * dx[i];
    }
    if dx2 <= 0.0 {
        return;
    }
    for i in 0..p {
        let mut jdx = 0.0;
        for k in 0..p {
            jdx += j[(i, k)] * dx[k];
        }
        r[i] = f_new[i] - f_old[i] - jdx;
    }
    for i in 0..p {
        if r[i] == 0.0 {
            continue;
        }
        let fi = r[i] / dx2;
        for k in 0..p {
            j[(i, k)] += fi * dx[k];
        }
    }
}

/// Solve `J d = b`; on a singular pivot retry with `J + μI`, μ growing
/// tenfold up to 1e-2, before reporting failure.
fn solve_regularized(j: &Mat, b: &[f64]) -> Result<Vec<f64>> {
    if let Some(d) = j.lu_solve(b) {
        return Ok(d);
    }
    let mut mu = 1e-8;
    while mu <= 1e-2 {
        let mut reg = j.clone();
        for i in 0..reg.rows() {
            reg[(i, i)] += mu;
        }
        if let Some(d) = reg.lu_solve(b) {
            return Ok(d);
        }
        mu *= 10.0;
    }
    Err(Error::SingularJacobian)
}

// ---------------------------------------------------------------------------
// Chi-square distribution via the regularized incomplete gamma function
// ---------------------------------------------------------------------------

/// ln Γ(x) for x > 0, Lanczos approximation (g = 7, 9 coefficients).
pub fn ln_gamma(x: f64) -> f64 {
    const COEF: [f64; 8] = [
        676.5203681218851,
        -1259.1392167224028,
        771.32342877765313,
        -176.61502916214059,
        12.507343278686905,
        -0.13857109526572012,
        9.9843695780195716e-6,
        1.5056327351493116e-7,
    ];
    const G: f64 = 7.0;
    debug_assert!(x > 0.0);
    if x < 0.5 {
        // Reflection for small arguments.
        let pi = std::f64::consts::PI;
        return (pi / (pi * x).sin()).ln() - ln_gamma(1.0 - x);
    }
    let z = x - 1.0;
    let mut sum = 0.99999999999980993;
    for (i, c) in COEF.iter().enumerate() {
        sum += c / (z + i as f64 + 1.0);
    }
    let t = z + G + 0.5;
    0.5 * (2.0 * std::f64::consts::PI).ln() + (z + 0.5) * t.ln() - t + sum.ln()
}

/// Regularized lower incomplete gamma P(a, x): series expansion for
/// x < a + 1, continued fraction otherwise.
pub fn gamma_p(a: f64, x: f64) -> f64 {
    assert!(a > 0.0, "shape must be positive");
    if x <= 0.0 {
        return 0.0;
    }
    if x < a + 1.0 {
        gamma_p_series(a, x)
    } else {
        1.0 - gamma_q_cf(a, x)
    }
}

fn gamma_p_series(a: f64, x: f64) -> f64 {
    let mut ap = a;
    let mut sum = 1.0 / a;
    let mut del = sum;
    for _ in 0..500 {
        ap += 1.0;
        del *= x / ap;
        sum += del;
        if del.abs() < sum.abs() * 1e-16 {
            break;
        }
    }
    sum * (-x + a * x.ln() - ln_gamma(a)).exp()
}

fn gamma_q_cf(a: f64, x: f64) -> f64 {
    // Modified Lentz continued fraction for Q(a, x).
    const TINY: f64 = 1e-300;
    let mut b = x + 1.0 - a;
    let mut c = 1.0 / TINY;
    let mut d = 1.0 / b;
    let mut h = d;
    for i in 1..500 {
        let an = -(i as f64) * (i as f64 - a);
        b += 2.0;
        d = an * d + b;
        if d.abs() < TINY {
            d = TINY;
        }
        c = b + an / c;
        if c.abs() < TINY {
            c = TINY;
        }
        d = 1.0 / d;
        let del = d * c;
        h *= del;
        if (del - 1.0).abs() < 1e-16 {
            break;
        }
    }
    (-x + a * x.ln() - ln_gamma(a)).exp() * h
}

/// P(χ²_df ≤ x). Negative x yields 0.
pub fn chisq_cdf(df: u32, x: f64) -> f64 {
    assert!(df >= 1);
    if x <= 0.0 {
        return 0.0;
    }
    gamma_p(df as f64 / 2.0, x / 2.0)
}

/// χ²_df density, used as the quantile Newton derivative.
pub fn chisq_pdf(df: u32, x: f64) -> f64 {
    if x <= 0.0 {
        return 0.0;
    }
    let a = df as f64 / 2.0;
    ((a - 1.0) * x.ln() - x / 2.0 - a * std::f64::consts::LN_2 - ln_gamma(a)).exp()
}

/// The p-quantile of χ²_df, by a bracketed Newton iteration on the CDF.
pub fn chisq_quantile(df: u32, p: f64) -> f64 {
    assert!(df >= 1);
    assert!(p > 0.0 && p < 1.0, "probability must be in (0,1)");
    let k = df as f64;
    // Wilson-Hilferty starting point.
    let z = crate::dist::normal_quantile(p);
    let v = 1.0 - 2.0 / (9.0 * k) + z * (2.0 / (9.0 * k)).sqrt();
    let mut x = if v > 0.0 { k * v * v * v } else { k * 0.5 };
    let (mut lo, mut hi) = (0.0f64, x.max(k) * 2.0 + 10.0);
    while chisq_cdf(df, hi) < p {
        hi *= 2.0;
    }
    for _ in 0..200 {
        let fx = chisq_cdf(df, x) - p;
        if fx.abs() < 1e-14 {
            break;
        }
        if fx > 0.0 {
            hi = x;
        } else {
            lo = x;
        }
        let d = chisq_pdf(df, x);
        let mut next = if d > 0.0 { x - fx / d } else { 0.5 * (lo + hi) };
        if !(next > lo && next < hi) {
            next = 0.5 * (lo + hi);
        }
        if (next - x).abs() < 1e-13 * (1.0 + x.abs()) {
            x = next;
            break;
        }
        x = next;
    }
    x
}

// ---------------------------------------------------------------------------
// Derivative checking
// ---------------------------------------------------------------------------

/// Maximum over coordinates of the relative disagreement between a central
/// finite difference of `f` and the supplied gradient `g` at `x`.
pub fn check_gradient<F, G>(mut f: F, mut g: G, x: &[f64], h: f64) -> f64
where
    F: FnMut(&[f64]) -> f64,
    G: FnMut(&[f64]) -> Vec<f64>,
{
    let grad = g(x);
    assert_eq!(grad.len(), x.len());
    let mut xp = x.to_vec();
    let mut worst = 0.0f64;
    for i in 0..x.len() {
        let hi = h * (1.0 + x[i].abs());
        xp[i] = x[i] + hi;
        let fp = f(&xp);
        xp[i] = x[i] - hi;
        let fm = f(&xp);
        xp[i] = x[i];
        let fd = (fp - fm) / (2.0 * hi);
        let err = (fd - grad[i]).abs() / (1.0 + grad[i].abs());
        worst = worst.max(err);
    }
    worst
}
