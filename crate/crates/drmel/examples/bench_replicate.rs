//! Timing probe for one coverage replicate of the six-population normal
//! design: unconstrained fit, statistic at the truth, full region scan,
//! and the bootstrap covariance.

use std::time::Instant;

use drmel::elrt::elrt_region;
use drmel::method::{MethodContext, MethodOptions, RegionMethod, WaldMethod};
use drmel::model::{BasisFunction, QuantileSpec};
use drmel::sim::{generate, truth_vector, Design, Family};
use drmel::solver::SolveOptions;

fn main() {
    let design = Design {
        family: Family::Normal {
            means: vec![0.0, 0.0, 1.0, 1.0, 2.0, 2.0],
            sds: vec![1.0, 1.2, 1.3, 1.5, 2.0, 1.5],
        },
        sizes: vec![100; 6],
        basis: BasisFunction::parse("1,x,x2").unwrap(),
        specs: vec![
            QuantileSpec::new(0, 0.5).unwrap(),
            QuantileSpec::new(5, 0.5).unwrap(),
        ],
        alphas: vec![0.10, 0.05],
        replicates: 1,
        seed: 123,
    };
    let ms = generate(&design, 0).unwrap();
    let truth = truth_vector(&design).unwrap();
    let opts = SolveOptions::default();

    let t0 = Instant::now();
    let fit = drmel::el::fit_unconstrained(&ms, &design.basis, &opts).unwrap();
    println!(
        "fit: {:?} (iters {}, logEL {:.3})",
        t0.elapsed(),
        fit.report.iterations,
        fit.log_el
    );

    let t0 = Instant::now();
    let specs_v: Vec<QuantileSpec> = design
        .specs
        .iter()
        .zip(&truth)
        .map(|(s, &v)| QuantileSpec::with_value(s.population, s.tau, v).unwrap())
        .collect();
    let stat = drmel::elrt::elrt_statistic(&ms, &design.basis, &specs_v, &opts).unwrap();
    println!("statistic at truth: {:?} (Rn {:.4})", t0.elapsed(), stat.r_n);

    for g in [41usize, 61, 101] {
        let t0 = Instant::now();
        let region = elrt_region(&ms, &design.basis, &design.specs, 0.05, g, g, &opts).unwrap();
        println!(
            "region {g}x{g}: {:?} (area {:.5}, failures {}, oor {})",
            t0.elapsed(),
            region.area,
            region.failures,
            region.out_of_range
        );
    }

    let t0 = Instant::now();
    let mut mopts = MethodOptions::default();
    mopts.bootstrap_replicates = 300;
    mopts.seed = 99;
    let ctx = MethodContext {
        ms: &ms,
        basis: &design.basis,
        specs: &design.specs,
        alphas: &design.alphas,
        truth: Some(&truth),
        opts: &mopts,
    };
    let wald = WaldMethod.analyze(&ctx).unwrap();
    println!(
        "wald bootstrap 300: {:?} (area95 {:.4})",
        t0.elapsed(),
        wald.outcomes[1].size.unwrap()
    );
}
