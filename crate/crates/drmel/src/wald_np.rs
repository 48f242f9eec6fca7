//! The two comparator methods: Wald inference from maximum-EL quantiles with
//! a bootstrap covariance estimate, and fully nonparametric inference from
//! sample quantiles with a kernel-density plug-in variance.

use rand::rngs::StdRng;
use rand::{Rng, SeedableRng};
use rayon::prelude::*;

use crate::dist::std_normal_pdf;
use crate::el::{fit_engine_from, ElEngine};
use crate::error::{Error, Result};
use crate::model::{BasisFunction, MultiSample, QuantileSpec};
use crate::rng::substream_seed;
use crate::solver::{chisq_quantile, sym_eigenvalues, Mat, SolveOptions};

// ---------------------------------------------------------------------------
// Elliptical regions from a quadratic form
// ---------------------------------------------------------------------------

/// The region {ξ : n (c − ξ)ᵀ S⁻¹ (c − ξ) ≤ threshold} with center c and
/// shape matrix S (a covariance of √n-scaled estimates).
#[derive(Clone, Debug)]
pub struct Ellipse {
    pub center: Vec<f64>,
    pub shape: Mat,
    inv: Mat,
    pub n: f64,
    pub threshold: f64,
    pub alpha: f64,
}

impl Ellipse {
    pub fn new(center: Vec<f64>, shape: Mat, n: f64, threshold: f64, alpha: f64) -> Result<Self> {
        let l = center.len();
        assert_eq!(shape.rows(), l);
        assert_eq!(shape.cols(), l);
        let mut inv = Mat::zeros(l, l);
        for c in 0..l {
            let mut e = vec![0.0; l];
            e[c] = 1.0;
            let col = shape
                .lu_solve(&e)
                .ok_or_else(|| Error::SolverFailure("singular shape matrix".to_string()))?;
            for r in 0..l {
                inv[(r, c)] = col[r];
            }
        }
        Ok(Ellipse {
            center,
            shape,
            inv,
            n,
            threshold,
            alpha,
        })
    }

    /// The quadratic statistic n (c − ξ)ᵀ S⁻¹ (c − ξ).
    pub fn statistic(&self, xi: &[f64]) -> f64 {
        let l = self.center.len();
        assert_eq!(xi.len(), l);
        let mut acc = 0.0;
        for r in 0..l {
            let dr = self.center[r] - xi[r];
            for c in 0..l {
                acc += dr * self.inv[(r, c)] * (self.center[c] - xi[c]);
            }
        }
        self.n * acc
    }

    pub fn contains(&self, xi: &[f64]) -> bool {
        self.statistic(xi) <= self.threshold
    }

    /// Region area for l = 2: π · threshold · √det(S) / n.
    pub fn area(&self) -> Option<f64> {
        if self.center.len() != 2 {
            return None;
        }
        Some(std::f64::consts::PI * self.threshold * self.shape.det().max(0.0).sqrt() / self.n)
    }

    /// Interval length for l = 1.
    pub fn length(&self) -> Option<f64> {
        if self.center.len() != 1 {
            return None;
        }
        Some(2.0 * (self.threshold * self.shape[(0, 0)] / self.n).max(0.0).sqrt())
    }

    /// Per-axis bounding box of the region.
    pub fn bbox(&self) -> Vec<(f64, f64)> {
        (0..self.center.len())
            .map(|i| {
                let half = (self.threshold * self.shape[(i, i)] / self.n).max(0.0).sqrt();
                (self.center[i] - half, self.center[i] + half)
            })
            .collect()
    }

    /// One delimited record: center, row-major shape, radius², alpha, area
    /// (or length for one dimension).
    pub fn export_record(&self, delim: char) -> String {
        let mut fields: Vec<String> = self.center.iter().map(|v| format!("{v:.10e}")).collect();
        for r in 0..self.shape.rows() {
            for c in 0..self.shape.cols() {
                fields.push(format!("{:.10e}", self.shape[(r, c)]));
            }
        }
        fields.push(format!("{:.10e}", self.threshold));
        fields.push(format!("{}", self.alpha));
        let size = self.area().or_else(|| self.length()).unwrap_or(f64::NAN);
        fields.push(format!("{size:.10e}"));
        fields.join(&delim.to_string())
    }
}

// ---------------------------------------------------------------------------
// Nonparametric method
// ---------------------------------------------------------------------------

/// Sample quantile ξ̂ = inf{x : ECDF(x) ≥ τ}.
pub fn empirical_quantile(sample: &[f64], tau: f64) -> Result<f64> {
    if sample.is_empty() {
        return Err(Error::InvalidArgument("empty sample".to_string()));
    }
    if !(tau > 0.0 && tau < 1.0) {
        return Err(Error::InvalidSpec(format!(
            "level must be in (0,1), got {tau}"
        )));
    }
    let mut sorted = sample.to_vec();
    sorted.sort_by(|a, b| a.total_cmp(b));
    Ok(empirical_quantile_sorted(&sorted, tau))
}

pub(crate) fn empirical_quantile_sorted(sorted: &[f64], tau: f64) -> f64 {
    let n = sorted.len();
    let t = n as f64 * tau;
    // ECDF(x_(k)) = k/n ≥ τ at k = ⌈nτ⌉; guard the integer case against
    // floating-point representation of nτ.
    let mut k = t.ceil() as usize;
    if (t - t.round()).abs() < 1e-9 {
        k = t.round() as usize;
    }
    sorted[k.clamp(1, n) - 1]
}

/// Silverman's rule-of-thumb bandwidth
/// 0.9 · min{σ̂, IQR̂/1.34} · n^{−1/5}.
pub fn silverman_bandwidth(sample: &[f64]) -> Result<f64> {
    let n = sample.len();
    if n < 2 {
        return Err(Error::DegenerateSample(
            "bandwidth needs at least two observations".to_string(),
        ));
    }
    let nf = n as f64;
    let mean = sample.iter().sum::<f64>() / nf;
    let var = sample.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / (nf - 1.0);
    let sd = var.sqrt();
    let mut sorted = sample.to_vec();
    sorted.sort_by(|a, b| a.total_cmp(b));
    let iqr = empirical_quantile_sorted(&sorted, 0.75) - empirical_quantile_sorted(&sorted, 0.25);
    if !(sd > 0.0) {
        return Err(Error::DegenerateSample(
            "all observations are equal; spread is zero".to_string(),
        ));
    }
    // A zero interquartile range (heavy ties) falls back to the standard
    // deviation rather than collapsing the bandwidth.
    let scale = if iqr > 0.0 { sd.min(iqr / 1.34) } else { sd };
    Ok(0.9 * scale * nf.powf(-0.2))
}

#[cfg(test)]
pub(crate) fn silverman_from_summary(sd: f64, iqr: f64, n: usize) -> f64 {
    0.9 * sd.min(iqr / 1.34) * (n as f64).powf(-0.2)
}

/// Gaussian kernel density estimate at x.
pub fn kde_at(sample: &[f64], bandwidth: f64, x: f64) -> f64 {
    assert!(bandwidth > 0.0, "bandwidth must be positive");
    let nf = sample.len() as f64;
    let s: f64 = sample
        .iter()
        .map(|&xj| std_normal_pdf((xj - x) / bandwidth))
        .sum();
    s / (nf * bandwidth)
}

/// Nonparametric estimate: sample quantiles and the diagonal plug-in
/// covariance τ_r(1−τ_r)/(ρ_r ĝ_r²(ξ̂_r)).
#[derive(Clone, Debug)]
pub struct NpEstimate {
    pub xi_hat: Vec<f64>,
    /// Diagonal entries of T̂.
    pub t_diag: Vec<f64>,
    pub bandwidths: Vec<f64>,
}

impl NpEstimate {
    pub fn t_matrix(&self) -> Mat {
        let l = self.t_diag.len();
        let mut t = Mat::zeros(l, l);
        for i in 0..l {
            t[(i, i)] = self.t_diag[i];
        }
        t
    }

    /// √(T̂_rr / n): the standard error of each sample quantile.
    pub fn standard_errors(&self, n: usize) -> Vec<f64> {
        self.t_diag
            .iter()
            .map(|t| (t / n as f64).sqrt())
            .collect()
    }
}

pub fn np_estimate(ms: &MultiSample, specs: &[QuantileSpec]) -> Result<NpEstimate> {
    if specs.is_empty() {
        return Err(Error::InvalidSpec("no quantile specs given".to_string()));
    }
    let mut xi_hat = Vec::with_capacity(specs.len());
    let mut t_diag = Vec::with_capacity(specs.len());
    let mut bandwidths = Vec::with_capacity(specs.len());
    for spec in specs {
        spec.check_population(ms)?;
        let sorted = ms.sorted(spec.population);
        let xi = empirical_quantile_sorted(sorted, spec.tau);
        let b = silverman_bandwidth(sorted)?;
        let g = kde_at(sorted, b, xi);
        if !(g > 0.0) {
            return Err(Error::DegenerateSample(format!(
                "zero density estimate at the population {} sample quantile",
                spec.population
            )));
        }
        xi_hat.push(xi);
        bandwidths.push(b);
        t_diag.push(spec.tau * (1.0 - spec.tau) / (ms.rho(spec.population) * g * g));
    }
    Ok(NpEstimate {
        xi_hat,
        t_diag,
        bandwidths,
    })
}

/// Nonparametric confidence region
/// {ξ : n (ξ̂ − ξ)ᵀ T̂⁻¹ (ξ̂ − ξ) ≤ χ²_l(1 − α)}.
pub fn np_region(ms: &MultiSample, specs: &[QuantileSpec], alpha: f64) -> Result<Ellipse> {
    check_alpha(alpha)?;
    let est = np_estimate(ms, specs)?;
    let threshold = chisq_quantile(specs.len() as u32, 1.0 - alpha);
    Ellipse::new(
        est.xi_hat.clone(),
        est.t_matrix(),
        ms.total() as f64,
        threshold,
        alpha,
    )
}

fn check_alpha(alpha: f64) -> Result<()> {
    if !(alpha > 0.0 && alpha < 1.0) {
        return Err(Error::InvalidArgument(format!(
            "alpha must be in (0,1), got {alpha}"
        )));
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// Wald method with bootstrap covariance
// ---------------------------------------------------------------------------

/// Maximum-EL quantiles with a bootstrap covariance estimate of
/// √n (ξ̃ − ξ).
#[derive(Clone, Debug)]
pub struct WaldEstimate {
    pub xi_tilde: Vec<f64>,
    pub omega_tilde: Mat,
    pub replicates: usize,
    pub seed: u64,
    pub failures: usize,
}

/// Maximum-EL quantiles straight from an engine-coordinate fit, without
/// materializing full CDF objects.
pub(crate) fn mele_from_engine(
    engine: &ElEngine,
    theta: &[f64],
    specs: &[QuantileSpec],
) -> Vec<f64> {
    let log_hbar = engine.per_obs_log_hbar(theta);
    let nf = engine.n as f64;
    let mut out = Vec::with_capacity(specs.len());
    let mut cache: Vec<Option<(Vec<f64>, Vec<f64>)>> = vec![None; engine.m + 1];
    for spec in specs {
        let r = spec.population;
        if cache[r].is_none() {
            let tilt = engine.per_obs_tilt(theta, r);
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
            cache[r] = Some((points, cum));
        }
        let (points, cum) = cache[r].as_ref().unwrap();
        let idx = cum.partition_point(|&c| c < spec.tau - 1e-9);
        out.push(points[idx.min(points.len() - 1)]);
    }
    out
}

/// Estimate ξ̃ and Ω̃ by refitting the model on within-population resamples.
/// Deterministic in (data, replicates, seed).
pub fn wald_estimate(
    ms: &MultiSample,
    basis: &BasisFunction,
    specs: &[QuantileSpec],
    replicates: usize,
    seed: u64,
    opts: &SolveOptions,
) -> Result<WaldEstimate> {
    if replicates < 50 {
        return Err(Error::InvalidArgument(format!(
            "bootstrap needs at least 50 replicates, got {replicates}"
        )));
    }
    for spec in specs {
        spec.check_population(ms)?;
    }
    let engine = ElEngine::new(ms, basis, true)?;
    let fit = fit_engine_from(&engine, &vec![0.0; engine.dim_theta()], opts)?;
    let theta_raw = engine
        .std
        .theta_raw_from_engine(&fit.theta, engine.m, engine.d);
    let xi_tilde = mele_from_engine(&engine, &fit.theta, specs);

    let results: Vec<Option<Vec<f64>>> = (0..replicates)
        .into_par_iter()
        .map(|b| {
            let mut rng = StdRng::seed_from_u64(substream_seed(seed, &[0x626f6f74, b as u64]));
            let resampled: Vec<Vec<f64>> = (0..=ms.m())
                .map(|k| {
                    let src = ms.values(k);
                    (0..src.len())
                        .map(|_| src[rng.random_range(0..src.len())])
                        .collect()
                })
                .collect();
            let rms = MultiSample::new(resampled).ok()?;
            let reng = ElEngine::new(&rms, basis, true).ok()?;
            let warm = reng
                .std
                .theta_engine_from_raw(&theta_raw, reng.m, reng.d);
            let rfit = fit_engine_from(&reng, &warm, opts).ok()?;
            Some(mele_from_engine(&reng, &rfit.theta, specs))
        })
        .collect();

    let l = specs.len();
    let ok: Vec<&Vec<f64>> = results.iter().flatten().collect();
    let failures = replicates - ok.len();
    if failures * 20 > replicates {
        return Err(Error::TooManyFailures {
            what: "bootstrap refits",
            failed: failures,
            total: replicates,
            limit_percent: 5.0,
        });
    }
    let bn = ok.len() as f64;
    let mut mean = vec![0.0; l];
    for v in &ok {
        for i in 0..l {
            mean[i] += v[i];
        }
    }
    for mi in mean.iter_mut() {
        *mi /= bn;
    }
    let mut cov = Mat::zeros(l, l);
    for v in &ok {
        for r in 0..l {
            for c in 0..l {
                cov[(r, c)] += (v[r] - mean[r]) * (v[c] - mean[c]);
            }
        }
    }
    let nf = ms.total() as f64;
    for r in 0..l {
        for c in 0..l {
            cov[(r, c)] *= nf / (bn - 1.0);
        }
    }
    Ok(WaldEstimate {
        xi_tilde,
        omega_tilde: cov,
        replicates,
        seed,
        failures,
    })
}

/// Wald confidence region
/// {ξ : n (ξ̃ − ξ)ᵀ Ω̃⁻¹ (ξ̃ − ξ) ≤ χ²_l(1 − α)}.
pub fn wald_region(est: &WaldEstimate, n: usize, alpha: f64) -> Result<Ellipse> {
    check_alpha(alpha)?;
    let threshold = chisq_quantile(est.xi_tilde.len() as u32, 1.0 - alpha);
    Ellipse::new(
        est.xi_tilde.clone(),
        est.omega_tilde.clone(),
        n as f64,
        threshold,
        alpha,
    )
}

/// Smallest eigenvalue of a symmetric covariance-like matrix; used by the
/// positive-semidefiniteness checks.
pub fn min_eigenvalue(mat: &Mat) -> f64 {
    sym_eigenvalues(mat)[0]
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::MultiSample;
    use rand::rngs::StdRng;
    use rand::SeedableRng;
    use rand_distr::{Distribution, Normal};

    #[test]
    fn empirical_quantile_examples() {
        assert_eq!(empirical_quantile(&[1.0, 2.0, 3.0, 4.0], 0.5).unwrap(), 2.0);
        assert_eq!(empirical_quantile(&[5.0], 0.3).unwrap(), 5.0);
        assert_eq!(empirical_quantile(&[5.0], 0.9).unwrap(), 5.0);
        assert_eq!(empirical_quantile(&[1.0, 1.0, 1.0, 9.0], 0.75).unwrap(), 1.0);
        assert!(empirical_quantile(&[1.0], 1.0).is_err());
    }

    #[test]
    fn empirical_quantile_matches_naive_scan() {
        let mut rng = StdRng::seed_from_u64(5);
        let normal = Normal::new(0.0, 1.0).unwrap();
        for n in [1usize, 2, 7, 50] {
            let mut xs: Vec<f64> = (0..n).map(|_| normal.sample(&mut rng)).collect();
            xs.sort_by(|a, b| a.total_cmp(b));
            for i in 1..20 {
                let tau = i as f64 / 20.0;
                let got = empirical_quantile_sorted(&xs, tau);
                // inf{x : #(≤x)/n ≥ τ} by direct scan.
                let want = *xs
                    .iter()
                    .find(|&&x| {
                        let cnt = xs.iter().filter(|&&y| y <= x).count();
                        cnt as f64 / n as f64 >= tau - 1e-12
                    })
                    .unwrap();
                assert_eq!(got, want, "n={n} tau={tau}");
            }
        }
    }

    #[test]
    fn silverman_formula_value() {
        // σ̂ = 1, IQR̂ = 1.34, n = 100 gives 0.9 · 100^(−1/5).
        let b = silverman_from_summary(1.0, 1.34, 100);
        assert!((b - 0.9 * 100f64.powf(-0.2)).abs() < 1e-12);
        // min picks IQR/1.34 = 1 when σ̂ is larger.
        let b2 = silverman_from_summary(2.0, 1.34, 100);
        assert!((b2 - b).abs() < 1e-12);
    }

    #[test]
    fn silverman_degenerate_errors() {
        assert!(silverman_bandwidth(&[3.0]).is_err());
        assert!(silverman_bandwidth(&[2.0, 2.0, 2.0]).is_err());
        // Zero IQR with positive spread still yields a usable bandwidth.
        let b = silverman_bandwidth(&[1.0, 1.0, 1.0, 1.0, 1.0, 9.0]).unwrap();
        assert!(b > 0.0);
    }

    #[test]
    fn kde_point_values() {
        assert!((kde_at(&[0.0], 1.0, 0.0) - 0.3989422804014327).abs() < 1e-12);
        assert!((kde_at(&[-1.0, 1.0], 1.0, 0.0) - 0.24197072451914337).abs() < 1e-12);
    }

    #[test]
    fn kde_integrates_to_one() {
        let mut rng = StdRng::seed_from_u64(9);
        let normal = Normal::new(0.5, 1.3).unwrap();
        let xs: Vec<f64> = (0..60).map(|_| normal.sample(&mut rng)).collect();
        let b = silverman_bandwidth(&xs).unwrap();
        // Trapezoid quadrature over a wide window.
        let (lo, hi, steps) = (-10.0f64, 12.0f64, 4000usize);
        let h = (hi - lo) / steps as f64;
        let mut integral = 0.0;
        for i in 0..=steps {
            let x = lo + i as f64 * h;
            let w = if i == 0 || i == steps { 0.5 } else { 1.0 };
            integral += w * kde_at(&xs, b, x);
        }
        integral *= h;
        assert!((integral - 1.0).abs() < 0.01, "integral {integral}");
    }

    #[test]
    fn np_t_matrix_is_diagonal_and_positive() {
        let mut rng = StdRng::seed_from_u64(21);
        let normal = Normal::new(0.0, 1.0).unwrap();
        let ms = MultiSample::new(vec![
            (0..80).map(|_| normal.sample(&mut rng)).collect(),
            (0..70).map(|_| normal.sample(&mut rng)).collect(),
        ])
        .unwrap();
        let specs = [
            QuantileSpec::new(0, 0.5).unwrap(),
            QuantileSpec::new(1, 0.3).unwrap(),
        ];
        let est = np_estimate(&ms, &specs).unwrap();
        let t = est.t_matrix();
        assert_eq!(t[(0, 1)], 0.0);
        assert_eq!(t[(1, 0)], 0.0);
        assert!(est.t_diag.iter().all(|&v| v > 0.0 && v.is_finite()));
        assert!(est.bandwidths.iter().all(|&b| b > 0.0));
    }

    #[test]
    fn np_region_scale_equivariance() {
        // Doubling the data doubles the quantile and scales √T̂ entries so
        // the standardized statistic at the scaled point is unchanged.
        let mut rng = StdRng::seed_from_u64(33);
        let normal = Normal::new(2.0, 1.0).unwrap();
        let xs: Vec<f64> = (0..90).map(|_| normal.sample(&mut rng)).collect();
        let doubled: Vec<f64> = xs.iter().map(|x| 2.0 * x).collect();
        let ms1 = MultiSample::new(vec![xs]).unwrap();
        let ms2 = MultiSample::new(vec![doubled]).unwrap();
        let specs = [QuantileSpec::new(0, 0.4).unwrap()];
        let r1 = np_region(&ms1, &specs, 0.05).unwrap();
        let r2 = np_region(&ms2, &specs, 0.05).unwrap();
        assert!((r2.center[0] - 2.0 * r1.center[0]).abs() < 1e-12);
        let probe = r1.center[0] + 0.3;
        let s1 = r1.statistic(&[probe]);
        let s2 = r2.statistic(&[2.0 * probe]);
        // Bandwidth scaling is exact under x → 2x, so densities scale as 1/2
        // and the quadratic forms agree exactly.
        assert!((s1 - s2).abs() < 1e-9, "{s1} vs {s2}");
    }

    #[test]
    fn ellipse_area_identity_formula() {
        let shape = Mat::from_rows(&[&[1.0, 0.0], &[0.0, 1.0]]);
        let e = Ellipse::new(vec![0.0, 0.0], shape, 100.0, 5.991464547107980, 0.05).unwrap();
        assert!((e.area().unwrap() - 0.18822740813).abs() < 1e-8);
        assert!(e.contains(&[0.0, 0.0]), "center must lie inside");
    }

    #[test]
    fn ellipse_area_matches_grid_count() {
        let shape = Mat::from_rows(&[&[1.4, 0.5], &[0.5, 0.9]]);
        let e = Ellipse::new(vec![0.3, -0.2], shape, 50.0, 4.60517, 0.10).unwrap();
        let bbox = e.bbox();
        let (nx, ny) = (801, 801);
        let dx = (bbox[0].1 - bbox[0].0) * 1.1 / (nx - 1) as f64;
        let dy = (bbox[1].1 - bbox[1].0) * 1.1 / (ny - 1) as f64;
        let x0 = e.center[0] - 0.55 * (bbox[0].1 - bbox[0].0) * 1.0;
        let y0 = e.center[1] - 0.55 * (bbox[1].1 - bbox[1].0) * 1.0;
        let mut count = 0usize;
        for iy in 0..ny {
            for ix in 0..nx {
                if e.contains(&[x0 + ix as f64 * dx, y0 + iy as f64 * dy]) {
                    count += 1;
                }
            }
        }
        let cell_area = count as f64 * dx * dy;
        let rel = (cell_area - e.area().unwrap()).abs() / e.area().unwrap();
        assert!(rel < 0.01, "cell-count area off by {rel}");
    }

    fn gaussian_ms(seed: u64, sizes: &[usize], means: &[f64], sds: &[f64]) -> MultiSample {
        let mut rng = StdRng::seed_from_u64(seed);
        let samples = sizes
            .iter()
            .enumerate()
            .map(|(k, &n)| {
                let d = Normal::new(means[k], sds[k]).unwrap();
                (0..n).map(|_| d.sample(&mut rng)).collect()
            })
            .collect();
        MultiSample::new(samples).unwrap()
    }

    #[test]
    fn bootstrap_is_deterministic() {
        let ms = gaussian_ms(7, &[40, 50], &[0.0, 0.4], &[1.0, 1.1]);
        let b = BasisFunction::parse("1,x").unwrap();
        let specs = [QuantileSpec::new(0, 0.5).unwrap(), QuantileSpec::new(1, 0.5).unwrap()];
        let opts = SolveOptions::default();
        let e1 = wald_estimate(&ms, &b, &specs, 60, 99, &opts).unwrap();
        let e2 = wald_estimate(&ms, &b, &specs, 60, 99, &opts).unwrap();
        assert_eq!(e1.omega_tilde, e2.omega_tilde);
        assert_eq!(e1.xi_tilde, e2.xi_tilde);
        let e3 = wald_estimate(&ms, &b, &specs, 60, 100, &opts).unwrap();
        assert_ne!(e1.omega_tilde, e3.omega_tilde);
    }

    #[test]
    fn bootstrap_median_variance_single_sample() {
        // For a single standard normal sample, Ω̃ should estimate the
        // asymptotic variance of √n ξ̂ at τ = 1/2, which is
        // 1/(4 φ(0)²) = π/2.
        let mut rng = StdRng::seed_from_u64(123);
        let normal = Normal::new(0.0, 1.0).unwrap();
        let mut vals = Vec::new();
        for rep in 0..6 {
            let xs: Vec<f64> = (0..400).map(|_| normal.sample(&mut rng)).collect();
            let ms = MultiSample::new(vec![xs]).unwrap();
            let b = BasisFunction::parse("1,x").unwrap();
            let specs = [QuantileSpec::new(0, 0.5).unwrap()];
            let est = wald_estimate(&ms, &b, &specs, 300, rep, &SolveOptions::default()).unwrap();
            vals.push(est.omega_tilde[(0, 0)]);
        }
        let mean = vals.iter().sum::<f64>() / vals.len() as f64;
        let target = std::f64::consts::PI / 2.0;
        assert!(
            (mean - target).abs() < 0.35 * target,
            "mean bootstrap variance {mean} vs π/2 = {target}"
        );
    }

    #[test]
    fn bootstrap_off_diagonal_near_zero_for_independent_populations() {
        let ms = gaussian_ms(11, &[120, 120], &[0.0, 0.0], &[1.0, 1.0]);
        let b = BasisFunction::parse("1,x").unwrap();
        let specs = [QuantileSpec::new(0, 0.5).unwrap(), QuantileSpec::new(1, 0.5).unwrap()];
        let est = wald_estimate(&ms, &b, &specs, 300, 5, &SolveOptions::default()).unwrap();
        let scale = (est.omega_tilde[(0, 0)] * est.omega_tilde[(1, 1)]).sqrt();
        assert!(
            est.omega_tilde[(0, 1)].abs() < 0.35 * scale,
            "off-diagonal {} vs scale {scale}",
            est.omega_tilde[(0, 1)]
        );
        // Symmetric positive semidefinite.
        assert!((est.omega_tilde[(0, 1)] - est.omega_tilde[(1, 0)]).abs() < 1e-12);
        assert!(min_eigenvalue(&est.omega_tilde) > -1e-10);
    }

    #[test]
    fn singular_covariance_is_rejected() {
        let shape = Mat::from_rows(&[&[1.0, 1.0], &[1.0, 1.0]]);
        assert!(Ellipse::new(vec![0.0, 0.0], shape, 10.0, 5.99, 0.05).is_err());
    }

    #[test]
    fn mele_equals_sample_quantile_single_population() {
        let ms = gaussian_ms(3, &[75], &[1.0], &[2.0]);
        let b = BasisFunction::parse("1,x").unwrap();
        let specs = [
            QuantileSpec::new(0, 0.25).unwrap(),
            QuantileSpec::new(0, 0.5).unwrap(),
            QuantileSpec::new(0, 0.9).unwrap(),
        ];
        let engine = ElEngine::new(&ms, &b, true).unwrap();
        let xi = mele_from_engine(&engine, &[], &specs);
        for (i, spec) in specs.iter().enumerate() {
            let want = empirical_quantile_sorted(ms.sorted(0), spec.tau);
            assert_eq!(xi[i], want);
        }
    }
}
