//! Domain types for multi-sample data, density-ratio basis functions, and
//! quantile hypotheses, plus input validation.
//!
//! All types are immutable after construction and safe to share across
//! threads.

use std::fmt;
use std::fs;
use std::path::Path;

use crate::error::{Error, Result};

// ---------------------------------------------------------------------------
// MultiSample
// ---------------------------------------------------------------------------

/// The m+1 independent samples. Population indices run 0..=m; population 0
/// is the base. Within-population load order is preserved; sorted views are
/// cached for quantile and range queries.
#[derive(Clone, Debug)]
pub struct MultiSample {
    samples: Vec<Vec<f64>>,
    sorted: Vec<Vec<f64>>,
    pooled_sorted: Vec<f64>,
    total: usize,
}

impl MultiSample {
    pub fn new(samples: Vec<Vec<f64>>) -> Result<Self> {
        if samples.is_empty() {
            return Err(Error::InvalidArgument("no populations given".to_string()));
        }
        let mut total = 0usize;
        for (k, s) in samples.iter().enumerate() {
            if s.is_empty() {
                return Err(Error::EmptyPopulation(k));
            }
            if let Some(bad) = s.iter().find(|v| !v.is_finite()) {
                return Err(Error::InvalidArgument(format!(
                    "population {k} contains non-finite value {bad}"
                )));
            }
            total += s.len();
        }
        let sorted: Vec<Vec<f64>> = samples
            .iter()
            .map(|s| {
                let mut v = s.clone();
                v.sort_by(|a, b| a.total_cmp(b));
                v
            })
            .collect();
        let mut pooled_sorted: Vec<f64> = Vec::with_capacity(total);
        for s in &samples {
            pooled_sorted.extend_from_slice(s);
        }
        pooled_sorted.sort_by(|a, b| a.total_cmp(b));
        Ok(MultiSample {
            samples,
            sorted,
            pooled_sorted,
            total,
        })
    }

    /// Number of non-base populations; populations are indexed 0..=m.
    pub fn m(&self) -> usize {
        self.samples.len() - 1
    }

    pub fn n_populations(&self) -> usize {
        self.samples.len()
    }

    /// Total observation count n = Σ n_k.
    pub fn total(&self) -> usize {
        self.total
    }

    pub fn count(&self, k: usize) -> usize {
        self.samples[k].len()
    }

    /// Sample proportion ρ_k = n_k / n.
    pub fn rho(&self, k: usize) -> f64 {
        self.samples[k].len() as f64 / self.total as f64
    }

    /// Observations of population k in load order.
    pub fn values(&self, k: usize) -> &[f64] {
        &self.samples[k]
    }

    /// Observations of population k in ascending order.
    pub fn sorted(&self, k: usize) -> &[f64] {
        &self.sorted[k]
    }

    /// All observations pooled and sorted ascending.
    pub fn pooled_sorted(&self) -> &[f64] {
        &self.pooled_sorted
    }

    /// Number of pooled observations ≤ x.
    pub fn pooled_count_le(&self, x: f64) -> usize {
        self.pooled_sorted.partition_point(|&v| v <= x)
    }

    /// Iterate (population, value) in population-major, load order.
    pub fn iter_obs(&self) -> impl Iterator<Item = (usize, f64)> + '_ {
        self.samples
            .iter()
            .enumerate()
            .flat_map(|(k, s)| s.iter().map(move |&x| (k, x)))
    }
}

/// Load a two-column delimited file of `<population index><delim><value>`
/// records. Population indices must form a contiguous 0..=m set.
pub fn load_samples(path: &Path, delimiter: char) -> Result<MultiSample> {
    let text = fs::read_to_string(path).map_err(|source| Error::Io {
        path: path.display().to_string(),
        source,
    })?;
    parse_samples(&text, delimiter)
}

/// Parse sample records from already-loaded text; see [`load_samples`].
pub fn parse_samples(text: &str, delimiter: char) -> Result<MultiSample> {
    let mut by_pop: Vec<Vec<f64>> = Vec::new();
    let mut seen = Vec::new();
    for (idx, raw) in text.lines().enumerate() {
        let line = idx + 1;
        let t = raw.trim();
        if t.is_empty() {
            continue;
        }
        let (a, b) = t.split_once(delimiter).ok_or_else(|| Error::Malformed {
            line,
            msg: format!("expected '<population>{delimiter}<value>', got {t:?}"),
        })?;
        let k: usize = a.trim().parse().map_err(|_| Error::Malformed {
            line,
            msg: format!("population index {:?} is not a non-negative integer", a.trim()),
        })?;
        let x: f64 = b.trim().parse().map_err(|_| Error::Malformed {
            line,
            msg: format!("value {:?} is not a number", b.trim()),
        })?;
        if !x.is_finite() {
            return Err(Error::Malformed {
                line,
                msg: format!("non-finite value {x}"),
            });
        }
        if k >= by_pop.len() {
            by_pop.resize_with(k + 1, Vec::new);
            seen.resize(k + 1, false);
        }
        by_pop[k].push(x);
        seen[k] = true;
    }
    if by_pop.is_empty() {
        return Err(Error::InvalidArgument("no records found".to_string()));
    }
    if let Some(k) = seen.iter().position(|s| !s) {
        return Err(Error::MissingPopulation(k));
    }
    MultiSample::new(by_pop)
}

// ---------------------------------------------------------------------------
// BasisFunction
// ---------------------------------------------------------------------------

/// One component of the vector-valued basis q(x).
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum BasisComponent {
    /// Constant 1; required in position 0.
    One,
    /// Identity x.
    X,
    /// x².
    XSquared,
    /// ln x; strictly positive data required.
    LogX,
    /// x^p for user p; strictly positive data required unless p is a
    /// non-negative integer.
    Power(f64),
}

impl BasisComponent {
    fn canonical_power(&self) -> Option<f64> {
        match self {
            BasisComponent::One => Some(0.0),
            BasisComponent::X => Some(1.0),
            BasisComponent::XSquared => Some(2.0),
            BasisComponent::Power(p) => Some(*p),
            BasisComponent::LogX => None,
        }
    }

    fn same_function(&self, other: &BasisComponent) -> bool {
        match (self.canonical_power(), other.canonical_power()) {
            (Some(a), Some(b)) => a == b,
            (None, None) => true,
            _ => false,
        }
    }

    fn needs_positive(&self) -> bool {
        match self {
            BasisComponent::LogX => true,
            BasisComponent::Power(p) => p.fract() != 0.0 || *p < 0.0,
            _ => false,
        }
    }

    pub fn eval(&self, x: f64) -> Result<f64> {
        match self {
            BasisComponent::One => Ok(1.0),
            BasisComponent::X => Ok(x),
            BasisComponent::XSquared => Ok(x * x),
            BasisComponent::LogX => {
                if x > 0.0 {
                    Ok(x.ln())
                } else {
                    Err(Error::Domain {
                        component: "log x".to_string(),
                        x,
                    })
                }
            }
            BasisComponent::Power(p) => {
                if self.needs_positive() && x <= 0.0 {
                    Err(Error::Domain {
                        component: format!("x^{p}"),
                        x,
                    })
                } else {
                    Ok(x.powf(*p))
                }
            }
        }
    }
}

impl fmt::Display for BasisComponent {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            BasisComponent::One => write!(f, "1"),
            BasisComponent::X => write!(f, "x"),
            BasisComponent::XSquared => write!(f, "x2"),
            BasisComponent::LogX => write!(f, "logx"),
            BasisComponent::Power(p) => write!(f, "x^{p}"),
        }
    }
}

/// The vector-valued basis q(x) of the density ratio model. Component 0 is
/// always the constant 1 and the components are pairwise distinct.
#[derive(Clone, Debug, PartialEq)]
pub struct BasisFunction {
    components: Vec<BasisComponent>,
}

impl BasisFunction {
    pub fn new(components: Vec<BasisComponent>) -> Result<Self> {
        if components.is_empty() {
            return Err(Error::InvalidBasis("basis is empty".to_string()));
        }
        if !matches!(components[0], BasisComponent::One) {
            return Err(Error::InvalidBasis(
                "component 0 must be the constant 1".to_string(),
            ));
        }
        for i in 0..components.len() {
            for j in i + 1..components.len() {
                if components[i].same_function(&components[j]) {
                    return Err(Error::InvalidBasis(format!(
                        "components {} and {} coincide ({})",
                        i, j, components[i]
                    )));
                }
            }
        }
        Ok(BasisFunction { components })
    }

    /// Parse a comma-separated component list such as "1,x,x2", "1,x,logx",
    /// or "1,x,x^0.5".
    pub fn parse(s: &str) -> Result<Self> {
        let comps = s
            .split(',')
            .map(|t| {
                let t = t.trim();
                match t {
                    "1" => Ok(BasisComponent::One),
                    "x" => Ok(BasisComponent::X),
                    "x2" | "x^2" => Ok(BasisComponent::XSquared),
                    "logx" | "log" => Ok(BasisComponent::LogX),
                    _ => {
                        if let Some(p) = t.strip_prefix("x^") {
                            p.parse::<f64>()
                                .map(BasisComponent::Power)
                                .map_err(|_| Error::InvalidBasis(format!("bad power {t:?}")))
                        } else {
                            Err(Error::InvalidBasis(format!("unknown component {t:?}")))
                        }
                    }
                }
            })
            .collect::<Result<Vec<_>>>()?;
        BasisFunction::new(comps)
    }

    pub fn dim(&self) -> usize {
        self.components.len()
    }

    pub fn components(&self) -> &[BasisComponent] {
        &self.components
    }

    /// True when any component requires strictly positive data.
    pub fn requires_positive(&self) -> bool {
        self.components.iter().any(|c| c.needs_positive())
    }

    /// Evaluate q(x); component 0 is always 1.
    pub fn eval(&self, x: f64) -> Result<Vec<f64>> {
        self.components.iter().map(|c| c.eval(x)).collect()
    }

    /// Index of a component that is monotone increasing over the data in
    /// `ms`, if any. x and log x (and x^p, p > 0, on positive data) qualify
    /// everywhere; x² qualifies when all pooled observations are
    /// non-negative.
    pub fn monotone_component(&self, ms: &MultiSample) -> Option<usize> {
        let pooled = ms.pooled_sorted();
        let all_nonneg = pooled.first().is_some_and(|&v| v >= 0.0);
        self.components.iter().position(|c| match c {
            BasisComponent::One => false,
            BasisComponent::X | BasisComponent::LogX => true,
            BasisComponent::XSquared => all_nonneg,
            BasisComponent::Power(p) => *p > 0.0,
        })
    }

    /// Reject data the basis cannot evaluate (log/fractional powers of
    /// non-positive observations).
    pub fn check_domain(&self, ms: &MultiSample) -> Result<()> {
        if self.requires_positive() {
            if let Some(&lo) = ms.pooled_sorted().first() {
                if lo <= 0.0 {
                    let comp = self
                        .components
                        .iter()
                        .find(|c| c.needs_positive())
                        .unwrap();
                    return Err(Error::Domain {
                        component: comp.to_string(),
                        x: lo,
                    });
                }
            }
        }
        Ok(())
    }
}

impl fmt::Display for BasisFunction {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let parts: Vec<String> = self.components.iter().map(|c| c.to_string()).collect();
        write!(f, "{}", parts.join(","))
    }
}

/// Evaluate a basis at a point; thin wrapper kept for symmetry with the
/// other operations.
pub fn eval_basis(b: &BasisFunction, x: f64) -> Result<Vec<f64>> {
    b.eval(x)
}

// ---------------------------------------------------------------------------
// QuantileSpec
// ---------------------------------------------------------------------------

/// A population quantile of interest: population index r, level τ_r, and an
/// optional hypothesized value ξ_r*.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct QuantileSpec {
    pub population: usize,
    pub tau: f64,
    pub value: Option<f64>,
}

impl QuantileSpec {
    pub fn new(population: usize, tau: f64) -> Result<Self> {
        if !(tau > 0.0 && tau < 1.0) {
            return Err(Error::InvalidSpec(format!(
                "level must be in (0,1), got {tau}"
            )));
        }
        Ok(QuantileSpec {
            population,
            tau,
            value: None,
        })
    }

    pub fn with_value(population: usize, tau: f64, value: f64) -> Result<Self> {
        let mut s = QuantileSpec::new(population, tau)?;
        if !value.is_finite() {
            return Err(Error::InvalidSpec(format!(
                "hypothesized value must be finite, got {value}"
            )));
        }
        s.value = Some(value);
        Ok(s)
    }

    /// Parse "r:tau" or "r:tau:xi_star".
    pub fn parse(s: &str) -> Result<Self> {
        let parts: Vec<&str> = s.split(':').collect();
        if parts.len() != 2 && parts.len() != 3 {
            return Err(Error::InvalidSpec(format!(
                "expected r:tau or r:tau:xi_star, got {s:?}"
            )));
        }
        let population = parts[0]
            .trim()
            .parse::<usize>()
            .map_err(|_| Error::InvalidSpec(format!("bad population index in {s:?}")))?;
        let tau = parts[1]
            .trim()
            .parse::<f64>()
            .map_err(|_| Error::InvalidSpec(format!("bad level in {s:?}")))?;
        if parts.len() == 3 {
            let v = parts[2]
                .trim()
                .parse::<f64>()
                .map_err(|_| Error::InvalidSpec(format!("bad hypothesized value in {s:?}")))?;
            QuantileSpec::with_value(population, tau, v)
        } else {
            QuantileSpec::new(population, tau)
        }
    }

    pub fn check_population(&self, ms: &MultiSample) -> Result<()> {
        if self.population >= ms.n_populations() {
            return Err(Error::InvalidSpec(format!(
                "population {} out of range 0..={}",
                self.population,
                ms.m()
            )));
        }
        Ok(())
    }
}

/// Check that every hypothesized quantile value lies strictly inside its own
/// population's sample range, the condition under which a tested hypothesis
/// is meaningful. Violations name the offending population.
pub fn validate_quantile_values(ms: &MultiSample, specs: &[QuantileSpec]) -> Result<()> {
    if specs.is_empty() {
        return Err(Error::InvalidSpec("no quantile specs given".to_string()));
    }
    for spec in specs {
        spec.check_population(ms)?;
        let value = spec.value.ok_or_else(|| {
            Error::InvalidSpec(format!(
                "spec for population {} has no hypothesized value",
                spec.population
            ))
        })?;
        let s = ms.sorted(spec.population);
        let (lo, hi) = (s[0], s[s.len() - 1]);
        if !(value > lo && value < hi) {
            return Err(Error::OutOfRange {
                population: spec.population,
                value,
                lo,
                hi,
            });
        }
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// DrmParams
// ---------------------------------------------------------------------------

/// Density-ratio parameters: one row θ_r per non-base population (θ_0 ≡ 0 is
/// implicit and never stored). Flattened vectors are ordered by basis
/// component first, population second: (θ_11, θ_21, …, θ_m1, θ_12, …).
#[derive(Clone, Debug, PartialEq)]
pub struct DrmParams {
    m: usize,
    d: usize,
    rows: Vec<f64>, // row-major: rows[r * d + s] = θ_{r+1, s}
}

impl DrmParams {
    pub fn zeros(m: usize, d: usize) -> Self {
        DrmParams {
            m,
            d,
            rows: vec![0.0; m * d],
        }
    }

    pub fn from_rows(rows: Vec<Vec<f64>>, d: usize) -> Result<Self> {
        let m = rows.len();
        let mut data = Vec::with_capacity(m * d);
        for (i, r) in rows.iter().enumerate() {
            if r.len() != d {
                return Err(Error::InvalidArgument(format!(
                    "theta row {} has length {}, expected {}",
                    i + 1,
                    r.len(),
                    d
                )));
            }
            data.extend_from_slice(r);
        }
        if let Some(bad) = data.iter().find(|v| !v.is_finite()) {
            return Err(Error::InvalidArgument(format!(
                "non-finite parameter value {bad}"
            )));
        }
        Ok(DrmParams { m, d, rows: data })
    }

    pub fn m(&self) -> usize {
        self.m
    }

    pub fn dim(&self) -> usize {
        self.d
    }

    /// θ_r for population r in 1..=m.
    pub fn row(&self, r: usize) -> &[f64] {
        assert!(r >= 1 && r <= self.m, "row index is 1..=m");
        &self.rows[(r - 1) * self.d..r * self.d]
    }

    /// Flatten in the component-major order (θ_11, θ_21, …, θ_m1, θ_12, …).
    pub fn flatten(&self) -> Vec<f64> {
        let mut out = vec![0.0; self.m * self.d];
        for i in 0..self.m {
            for s in 0..self.d {
                out[s * self.m + i] = self.rows[i * self.d + s];
            }
        }
        out
    }

    /// Rebuild from a component-major flat vector.
    pub fn from_flat(m: usize, d: usize, flat: &[f64]) -> Self {
        assert_eq!(flat.len(), m * d);
        let mut rows = vec![0.0; m * d];
        for i in 0..m {
            for s in 0..d {
                rows[i * d + s] = flat[s * m + i];
            }
        }
        DrmParams { m, d, rows }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn parse_counts_and_proportions() {
        let ms = parse_samples("0,1.0\n0,2.0\n1,3.0\n", ',').unwrap();
        assert_eq!(ms.m(), 1);
        assert_eq!(ms.count(0), 2);
        assert_eq!(ms.count(1), 1);
        assert_eq!(ms.total(), 3);
        assert!((ms.rho(0) - 2.0 / 3.0).abs() < 1e-15);
        assert!((ms.rho(1) - 1.0 / 3.0).abs() < 1e-15);
        let rho_sum: f64 = (0..ms.n_populations()).map(|k| ms.rho(k)).sum();
        assert!((rho_sum - 1.0).abs() < 1e-15);
    }

    #[test]
    fn parse_reports_malformed_line() {
        let err = parse_samples("0,1.0\n2,abc\n", ',').unwrap_err();
        match err {
            Error::Malformed { line, .. } => assert_eq!(line, 2),
            other => panic!("unexpected error {other:?}"),
        }
    }

    #[test]
    fn parse_rejects_population_gap() {
        let err = parse_samples("0,1.0\n2,2.0\n", ',').unwrap_err();
        match err {
            Error::MissingPopulation(k) => assert_eq!(k, 1),
            other => panic!("unexpected error {other:?}"),
        }
    }

    #[test]
    fn parse_rejects_non_finite() {
        assert!(parse_samples("0,inf\n", ',').is_err());
        assert!(parse_samples("0,nan\n", ',').is_err());
    }

    #[test]
    fn basis_eval_examples() {
        let b = BasisFunction::parse("1,x,x2").unwrap();
        assert_eq!(b.eval(2.0).unwrap(), vec![1.0, 2.0, 4.0]);
        let b = BasisFunction::parse("1,x,logx").unwrap();
        assert_eq!(b.eval(1.0).unwrap(), vec![1.0, 1.0, 0.0]);
        assert!(b.eval(-1.0).is_err());
    }

    #[test]
    fn basis_rejects_bad_shapes() {
        assert!(BasisFunction::parse("x,1").is_err());
        assert!(BasisFunction::parse("1,x,x").is_err());
        // x^1 duplicates x even though spelled differently.
        assert!(BasisFunction::new(vec![
            BasisComponent::One,
            BasisComponent::X,
            BasisComponent::Power(1.0)
        ])
        .is_err());
    }

    #[test]
    fn monotone_component_detection() {
        let pos = MultiSample::new(vec![vec![1.0, 2.0, 3.0]]).unwrap();
        let mixed = MultiSample::new(vec![vec![-1.0, 2.0, 3.0]]).unwrap();
        let b = BasisFunction::parse("1,x2").unwrap();
        assert_eq!(b.monotone_component(&pos), Some(1));
        assert_eq!(b.monotone_component(&mixed), None);
        let b = BasisFunction::parse("1,x,x2").unwrap();
        assert_eq!(b.monotone_component(&mixed), Some(1));
    }

    #[test]
    fn validate_range_examples() {
        let ms = MultiSample::new(vec![vec![1.0, 2.0, 3.0]]).unwrap();
        let ok = [QuantileSpec::with_value(0, 0.5, 2.0).unwrap()];
        assert!(validate_quantile_values(&ms, &ok).is_ok());
        for bad in [3.0, 0.5] {
            let specs = [QuantileSpec::with_value(0, 0.5, bad).unwrap()];
            match validate_quantile_values(&ms, &specs).unwrap_err() {
                Error::OutOfRange { population, .. } => assert_eq!(population, 0),
                other => panic!("unexpected error {other:?}"),
            }
        }
    }

    #[test]
    fn spec_parsing() {
        let s = QuantileSpec::parse("5:0.5").unwrap();
        assert_eq!(s.population, 5);
        assert_eq!(s.value, None);
        let s = QuantileSpec::parse("0:0.9:2.5").unwrap();
        assert_eq!(s.value, Some(2.5));
        assert!(QuantileSpec::parse("0:1.5").is_err());
        assert!(QuantileSpec::parse("0").is_err());
    }

    #[test]
    fn drm_params_flatten_order() {
        // m=2, d=3: flat order is θ_11, θ_21, θ_12, θ_22, θ_13, θ_23.
        let p = DrmParams::from_rows(vec![vec![1.0, 2.0, 3.0], vec![4.0, 5.0, 6.0]], 3).unwrap();
        assert_eq!(p.flatten(), vec![1.0, 4.0, 2.0, 5.0, 3.0, 6.0]);
        let q = DrmParams::from_flat(2, 3, &p.flatten());
        assert_eq!(p, q);
    }

    proptest! {
        #[test]
        fn basis_component_zero_is_one(x in -50.0f64..50.0) {
            let b = BasisFunction::parse("1,x,x2").unwrap();
            prop_assert_eq!(b.eval(x).unwrap()[0], 1.0);
        }

        #[test]
        fn validate_is_monotone_in_value(v in 0.0f64..1.0) {
            // Passing for any interior point means passing for every point
            // strictly between the same population's min and max.
            let ms = MultiSample::new(vec![vec![1.0, 2.0, 5.0, 9.0]]).unwrap();
            let xi = 1.0 + v * (9.0 - 1.0);
            let spec = [QuantileSpec::with_value(0, 0.5, xi).unwrap()];
            let inside = xi > 1.0 && xi < 9.0;
            prop_assert_eq!(validate_quantile_values(&ms, &spec).is_ok(), inside);
        }
    }
}
