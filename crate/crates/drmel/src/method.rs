//! A registry of interchangeable confidence-region strategies. Each method
//! (ELRT, Wald, nonparametric) lives behind a common trait, is registered
//! by name, and is selected at runtime from configuration or the command
//! line. One `analyze` call evaluates every requested confidence level so
//! per-level work (the R_n scan, the bootstrap covariance) is shared.

use crate::elrt::{linspace, ElrtAnalysis, ElrtInterval, RegionGrid};
use crate::error::{Error, Result};
use crate::model::{BasisFunction, MultiSample, QuantileSpec};
use crate::solver::{chisq_quantile, SolveOptions};
use crate::wald_np::{np_estimate, np_region, wald_estimate, wald_region, Ellipse};

/// Tuning shared by all methods.
#[derive(Clone, Debug)]
pub struct MethodOptions {
    pub solve: SolveOptions,
    /// ELRT scan resolution (grid for two specs, line for one).
    pub grid_nx: usize,
    pub grid_ny: usize,
    /// Bootstrap replicates behind the Wald covariance.
    pub bootstrap_replicates: usize,
    /// Seed for the bootstrap resampling stream.
    pub seed: u64,
    /// Evaluate region sizes (the ELRT scan is the costly part); coverage
    /// of a hypothesized point never needs it.
    pub compute_size: bool,
}

impl Default for MethodOptions {
    fn default() -> Self {
        MethodOptions {
            solve: SolveOptions::default(),
            grid_nx: 101,
            grid_ny: 101,
            bootstrap_replicates: 300,
            seed: 0,
            compute_size: true,
        }
    }
}

/// One dataset plus the inference request handed to a method.
pub struct MethodContext<'a> {
    pub ms: &'a MultiSample,
    pub basis: &'a BasisFunction,
    pub specs: &'a [QuantileSpec],
    pub alphas: &'a [f64],
    /// Point whose containment is recorded (the truth in coverage studies,
    /// a hypothesis otherwise).
    pub truth: Option<&'a [f64]>,
    pub opts: &'a MethodOptions,
}

/// A confidence region in one of the three geometries.
#[derive(Clone, Debug)]
pub enum Region {
    Contour(RegionGrid),
    Band(ElrtInterval),
    Ellipse(Ellipse),
}

impl Region {
    /// Geometric membership; for grid-backed regions this is the mask value
    /// at the nearest grid node.
    pub fn contains(&self, point: &[f64]) -> bool {
        match self {
            Region::Contour(g) => {
                let ix = nearest(&g.xs, point[0]);
                let iy = nearest(&g.ys, point[1]);
                g.mask_at(ix, iy)
            }
            Region::Band(b) => {
                let i = nearest(&b.xs, point[0]);
                b.rn[i] <= b.threshold
            }
            Region::Ellipse(e) => e.contains(point),
        }
    }

    pub fn size(&self) -> Option<f64> {
        match self {
            Region::Contour(g) => Some(g.area),
            Region::Band(b) => Some(b.length),
            Region::Ellipse(e) => e.area().or_else(|| e.length()),
        }
    }

    pub fn export(&self, delim: char) -> String {
        match self {
            Region::Contour(g) => g.export(delim),
            Region::Band(b) => b.export(delim),
            Region::Ellipse(e) => {
                let d = delim;
                let l = e.center.len();
                let mut head: Vec<String> = (0..l).map(|i| format!("center_{i}")).collect();
                for r in 0..l {
                    for c in 0..l {
                        head.push(format!("shape_{r}{c}"));
                    }
                }
                head.push("radius2".to_string());
                head.push("alpha".to_string());
                head.push(if l == 2 { "area" } else { "length" }.to_string());
                format!("{}\n{}\n", head.join(&d.to_string()), e.export_record(d))
            }
        }
    }
}

fn nearest(grid: &[f64], v: f64) -> usize {
    let mut best = 0;
    let mut dist = f64::INFINITY;
    for (i, &g) in grid.iter().enumerate() {
        let e = (g - v).abs();
        if e < dist {
            dist = e;
            best = i;
        }
    }
    best
}

/// Per-level outcome of one method on one dataset.
#[derive(Clone, Debug)]
pub struct AlphaOutcome {
    pub alpha: f64,
    pub threshold: f64,
    /// Containment of the context's truth point, when one was given. ELRT
    /// containment is decided by direct evaluation of R_n at the point,
    /// not by grid membership.
    pub covered: Option<bool>,
    pub size: Option<f64>,
    pub region: Option<Region>,
}

#[derive(Debug)]
pub struct MethodAnalysis {
    pub method: &'static str,
    pub outcomes: Vec<AlphaOutcome>,
}

/// An interchangeable confidence-region strategy.
pub trait RegionMethod: Sync + Send {
    fn name(&self) -> &'static str;
    fn analyze(&self, ctx: &MethodContext) -> Result<MethodAnalysis>;
}

/// The empirical-likelihood ratio method: χ²-calibrated R_n level sets.
pub struct ElrtMethod;

impl RegionMethod for ElrtMethod {
    fn name(&self) -> &'static str {
        "elrt"
    }

    fn analyze(&self, ctx: &MethodContext) -> Result<MethodAnalysis> {
        let l = ctx.specs.len();
        let analysis = ElrtAnalysis::new(ctx.ms, ctx.basis, ctx.specs, &ctx.opts.solve)?;
        let rn_truth = match ctx.truth {
            Some(t) => Some(analysis.rn_at(t)?),
            None => None,
        };
        let scan = if ctx.opts.compute_size {
            Some(ElrtScan::new(ctx, &analysis)?)
        } else {
            None
        };
        let mut outcomes = Vec::with_capacity(ctx.alphas.len());
        for &alpha in ctx.alphas {
            check_alpha(alpha)?;
            let threshold = chisq_quantile(l as u32, 1.0 - alpha);
            let covered = rn_truth.map(|r| r <= threshold);
            let (size, region) = match &scan {
                Some(s) => {
                    let (size, region) = s.level(&analysis, alpha, threshold);
                    (Some(size), Some(region))
                }
                None => (None, None),
            };
            outcomes.push(AlphaOutcome {
                alpha,
                threshold,
                covered,
                size,
                region,
            });
        }
        Ok(MethodAnalysis {
            method: self.name(),
            outcomes,
        })
    }
}

/// The Wald method: an ellipse from the maximum-EL quantiles and a
/// bootstrap covariance estimate.
pub struct WaldMethod;

impl RegionMethod for WaldMethod {
    fn name(&self) -> &'static str {
        "wald"
    }

    fn analyze(&self, ctx: &MethodContext) -> Result<MethodAnalysis> {
        let est = wald_estimate(
            ctx.ms,
            ctx.basis,
            ctx.specs,
            ctx.opts.bootstrap_replicates,
            ctx.opts.seed,
            &ctx.opts.solve,
        )?;
        let mut outcomes = Vec::with_capacity(ctx.alphas.len());
        for &alpha in ctx.alphas {
            check_alpha(alpha)?;
            let region = wald_region(&est, ctx.ms.total(), alpha)?;
            outcomes.push(AlphaOutcome {
                alpha,
                threshold: region.threshold,
                covered: ctx.truth.map(|t| region.contains(t)),
                size: region.area().or_else(|| region.length()),
                region: Some(Region::Ellipse(region)),
            });
        }
        Ok(MethodAnalysis {
            method: self.name(),
            outcomes,
        })
    }
}

/// The fully nonparametric method: sample quantiles with a kernel-density
/// plug-in covariance.
pub struct NonparametricMethod;

impl RegionMethod for NonparametricMethod {
    fn name(&self) -> &'static str {
        "np"
    }

    fn analyze(&self, ctx: &MethodContext) -> Result<MethodAnalysis> {
        // Shared estimate work is cheap here; regions per level reuse it
        // through np_region's internals.
        let _ = np_estimate(ctx.ms, ctx.specs)?;
        let mut outcomes = Vec::with_capacity(ctx.alphas.len());
        for &alpha in ctx.alphas {
            check_alpha(alpha)?;
            let region = np_region(ctx.ms, ctx.specs, alpha)?;
            outcomes.push(AlphaOutcome {
                alpha,
                threshold: region.threshold,
                covered: ctx.truth.map(|t| region.contains(t)),
                size: region.area().or_else(|| region.length()),
                region: Some(Region::Ellipse(region)),
            });
        }
        Ok(MethodAnalysis {
            method: self.name(),
            outcomes,
        })
    }
}

/// All built-in methods in presentation order.
pub fn registry() -> Vec<Box<dyn RegionMethod>> {
    vec![
        Box::new(ElrtMethod),
        Box::new(WaldMethod),
        Box::new(NonparametricMethod),
    ]
}

/// Look a method up by its registered name.
pub fn by_name(name: &str) -> Option<Box<dyn RegionMethod>> {
    match name.trim().to_ascii_lowercase().as_str() {
        "elrt" => Some(Box::new(ElrtMethod)),
        "wald" => Some(Box::new(WaldMethod)),
        "np" | "nonparametric" => Some(Box::new(NonparametricMethod)),
        _ => None,
    }
}

/// Registered method names.
pub fn method_names() -> Vec<&'static str> {
    registry().iter().map(|m| m.name()).collect()
}

fn check_alpha(alpha: f64) -> Result<()> {
    if !(alpha > 0.0 && alpha < 1.0) {
        return Err(Error::InvalidArgument(format!(
            "alpha must be in (0,1), got {alpha}"
        )));
    }
    Ok(())
}

/// Shared ELRT scan reused across confidence levels: the R_n field is
/// evaluated once over a box wide enough for the smallest alpha.
pub(crate) struct ElrtScan {
    xs: Vec<f64>,
    ys: Option<Vec<f64>>,
    rn: Vec<f64>,
    failures: usize,
    out_of_range: usize,
}

impl ElrtScan {
    pub(crate) fn new(ctx: &MethodContext, analysis: &ElrtAnalysis) -> Result<Self> {
        let l = ctx.specs.len();
        let est = np_estimate(ctx.ms, ctx.specs)?;
        let se = est.standard_errors(ctx.ms.total());
        let mele = analysis.mele();
        if l == 2 {
            let xs = linspace(
                mele[0] - 4.0 * se[0],
                mele[0] + 4.0 * se[0],
                ctx.opts.grid_nx,
            );
            let ys = linspace(
                mele[1] - 4.0 * se[1],
                mele[1] + 4.0 * se[1],
                ctx.opts.grid_ny,
            );
            let scan = analysis.scan_grid(&xs, &ys);
            let total = xs.len() * ys.len();
            if scan.failures * 100 >= total {
                return Err(Error::TooManyFailures {
                    what: "region grid solves",
                    failed: scan.failures,
                    total,
                    limit_percent: 1.0,
                });
            }
            Ok(ElrtScan {
                xs,
                ys: Some(ys),
                rn: scan.rn,
                failures: scan.failures,
                out_of_range: scan.out_of_range,
            })
        } else if l == 1 {
            let xs = linspace(
                mele[0] - 4.0 * se[0],
                mele[0] + 4.0 * se[0],
                ctx.opts.grid_nx,
            );
            let scan = analysis.scan_line(&xs);
            if scan.failures * 100 >= xs.len() {
                return Err(Error::TooManyFailures {
                    what: "interval scan solves",
                    failed: scan.failures,
                    total: xs.len(),
                    limit_percent: 1.0,
                });
            }
            Ok(ElrtScan {
                xs,
                ys: None,
                rn: scan.rn,
                failures: scan.failures,
                out_of_range: scan.out_of_range,
            })
        } else {
            Err(Error::InvalidSpec(
                "size evaluation supports one or two quantile specs".to_string(),
            ))
        }
    }

    pub(crate) fn level(&self, analysis: &ElrtAnalysis, alpha: f64, threshold: f64) -> (f64, Region) {
        match &self.ys {
            Some(ys) => {
                let mask: Vec<bool> = self.rn.iter().map(|&r| r <= threshold).collect();
                let dx = (self.xs[self.xs.len() - 1] - self.xs[0]) / (self.xs.len() - 1) as f64;
                let dy = (ys[ys.len() - 1] - ys[0]) / (ys.len() - 1) as f64;
                let area = mask.iter().filter(|&&b| b).count() as f64 * dx * dy;
                let grid = RegionGrid {
                    spec_a: analysis.specs[0],
                    spec_b: analysis.specs[1],
                    xs: self.xs.clone(),
                    ys: ys.clone(),
                    rn: self.rn.clone(),
                    threshold,
                    alpha,
                    mask,
                    area,
                    failures: self.failures,
                    out_of_range: self.out_of_range,
                };
                (area, Region::Contour(grid))
            }
            None => {
                let dx = (self.xs[self.xs.len() - 1] - self.xs[0]) / (self.xs.len() - 1) as f64;
                let length =
                    self.rn.iter().filter(|&&r| r <= threshold).count() as f64 * dx;
                let band = ElrtInterval {
                    spec: analysis.specs[0],
                    xs: self.xs.clone(),
                    rn: self.rn.clone(),
                    threshold,
                    alpha,
                    length,
                    failures: self.failures,
                    out_of_range: self.out_of_range,
                };
                (length, Region::Band(band))
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::rngs::StdRng;
    use rand::SeedableRng;
    use rand_distr::{Distribution, Normal};

    fn toy() -> (MultiSample, BasisFunction) {
        let mut rng = StdRng::seed_from_u64(4);
        let d0 = Normal::new(0.0, 1.0).unwrap();
        let d1 = Normal::new(0.5, 1.2).unwrap();
        (
            MultiSample::new(vec![
                (0..70).map(|_| d0.sample(&mut rng)).collect(),
                (0..80).map(|_| d1.sample(&mut rng)).collect(),
            ])
            .unwrap(),
            BasisFunction::parse("1,x,x2").unwrap(),
        )
    }

    #[test]
    fn registry_names() {
        assert_eq!(method_names(), vec!["elrt", "wald", "np"]);
        assert!(by_name("ELRT").is_some());
        assert!(by_name("nonparametric").is_some());
        assert!(by_name("bayes").is_none());
    }

    #[test]
    fn all_methods_analyze_two_spec_context() {
        let (ms, basis) = toy();
        let specs = [
            QuantileSpec::new(0, 0.5).unwrap(),
            QuantileSpec::new(1, 0.5).unwrap(),
        ];
        let truth = [0.0, 0.5];
        let mut opts = MethodOptions::default();
        opts.grid_nx = 41;
        opts.grid_ny = 41;
        opts.bootstrap_replicates = 60;
        let ctx = MethodContext {
            ms: &ms,
            basis: &basis,
            specs: &specs,
            alphas: &[0.10, 0.05],
            truth: Some(&truth),
            opts: &opts,
        };
        for method in registry() {
            let a = method.analyze(&ctx).unwrap();
            assert_eq!(a.outcomes.len(), 2);
            for o in &a.outcomes {
                assert!(o.covered.is_some());
                let size = o.size.expect("size");
                assert!(size.is_finite() && size > 0.0, "{} size {size}", a.method);
            }
            // 90% size never exceeds 95% size.
            assert!(a.outcomes[0].size.unwrap() <= a.outcomes[1].size.unwrap() + 1e-12);
        }
    }

    #[test]
    fn elrt_interval_outcome_single_spec() {
        let (ms, basis) = toy();
        let specs = [QuantileSpec::new(0, 0.5).unwrap()];
        let mut opts = MethodOptions::default();
        opts.grid_nx = 101;
        let ctx = MethodContext {
            ms: &ms,
            basis: &basis,
            specs: &specs,
            alphas: &[0.05],
            truth: Some(&[0.0]),
            opts: &opts,
        };
        let a = ElrtMethod.analyze(&ctx).unwrap();
        let o = &a.outcomes[0];
        assert!(o.size.unwrap() > 0.0);
        match o.region.as_ref().unwrap() {
            Region::Band(b) => assert_eq!(b.xs.len(), 101),
            other => panic!("expected band, got {other:?}"),
        }
    }
}
