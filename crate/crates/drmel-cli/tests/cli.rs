//! End-to-end tests of the command-line interface: output formats, exit
//! codes, and determinism of file outputs.

use std::fs;
use std::path::PathBuf;
use std::process::{Command, Output};

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_drmel"))
}

fn tmpfile(name: &str) -> PathBuf {
    let mut p = std::env::temp_dir();
    p.push(format!("drmel-cli-test-{}-{name}", std::process::id()));
    p
}

fn write_tmp(name: &str, contents: &str) -> PathBuf {
    let p = tmpfile(name);
    fs::write(&p, contents).unwrap();
    p
}

fn stdout(out: &Output) -> String {
    String::from_utf8_lossy(&out.stdout).to_string()
}

fn ten_point_single_population() -> PathBuf {
    let text: String = (1..=10).map(|v| format!("0,{v}\n")).collect();
    write_tmp("m0.csv", &text)
}

fn two_population_toy() -> PathBuf {
    write_tmp(
        "toy.csv",
        "0,1.2\n0,0.3\n0,2.2\n0,-0.4\n0,1.9\n0,0.8\n1,2.1\n1,3.0\n1,1.4\n1,2.6\n1,0.9\n1,1.7\n",
    )
}

#[test]
fn fit_prints_theta_and_log_el() {
    let data = two_population_toy();
    let out = bin()
        .args(["fit", "--data", data.to_str().unwrap(), "--basis", "1,x"])
        .output()
        .unwrap();
    assert!(out.status.success());
    let s = stdout(&out);
    assert!(s.contains("theta[1] = "), "missing theta line: {s}");
    assert!(s.contains("log_el = "), "missing log_el line: {s}");
}

#[test]
fn fit_single_population_reports_empirical_log_el() {
    let data = ten_point_single_population();
    let out = bin()
        .args(["fit", "--data", data.to_str().unwrap(), "--basis", "1,x"])
        .output()
        .unwrap();
    assert!(out.status.success());
    let s = stdout(&out);
    // log-EL of the bare empirical distribution is -n log n.
    let want = -(10.0f64 * 10.0f64.ln());
    let line = s.lines().find(|l| l.starts_with("log_el")).unwrap();
    let v: f64 = line.split('=').nth(1).unwrap().trim().parse().unwrap();
    assert!((v - want).abs() < 1e-6, "{v} vs {want}");
}

#[test]
fn fit_rejects_log_basis_on_negative_data_with_exit_2() {
    let data = two_population_toy();
    let out = bin()
        .args(["fit", "--data", data.to_str().unwrap(), "--basis", "1,x,logx"])
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn test_subcommand_matches_closed_form() {
    let data = ten_point_single_population();
    let out = bin()
        .args([
            "test",
            "--data",
            data.to_str().unwrap(),
            "--basis",
            "1,x",
            "--spec",
            "0:0.5:7.2",
        ])
        .output()
        .unwrap();
    assert!(out.status.success());
    let s = stdout(&out);
    let line = s.lines().find(|l| l.starts_with("Rn=")).expect("machine line");
    // Rn=<v> df=<l> p=<v>
    let mut parts = line.split_whitespace();
    let rn: f64 = parts.next().unwrap().strip_prefix("Rn=").unwrap().parse().unwrap();
    let df: usize = parts.next().unwrap().strip_prefix("df=").unwrap().parse().unwrap();
    let p: f64 = parts.next().unwrap().strip_prefix("p=").unwrap().parse().unwrap();
    assert!((rn - 1.645658).abs() < 1e-4, "rn {rn}");
    assert_eq!(df, 1);
    assert!((p - 0.1996).abs() < 2e-3, "p {p}");
}

#[test]
fn test_subcommand_rejects_out_of_range_with_exit_2() {
    let data = ten_point_single_population();
    let out = bin()
        .args([
            "test",
            "--data",
            data.to_str().unwrap(),
            "--basis",
            "1,x",
            "--spec",
            "0:0.5:99",
        ])
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn region_writes_grid_with_threshold_header() {
    let data = write_tmp("region-data.csv", &gaussian_two_pop(60, 70, 11));
    let out_path = tmpfile("region-out.csv");
    let out = bin()
        .args([
            "region",
            "--data",
            data.to_str().unwrap(),
            "--basis",
            "1,x,x2",
            "--spec",
            "0:0.5",
            "--spec",
            "1:0.5",
            "--alpha",
            "0.05",
            "--grid",
            "21",
            "--out",
            out_path.to_str().unwrap(),
        ])
        .output()
        .unwrap();
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let contents = fs::read_to_string(&out_path).unwrap();
    let header = contents.lines().next().unwrap();
    assert!(header.contains("threshold=5.991465"), "header: {header}");
    assert!(header.contains("alpha=0.05"));
    assert!(header.contains("area="));
    assert_eq!(contents.lines().nth(1).unwrap(), "xi_a,xi_b,r_n,included");
    // 21x21 grid points plus two header lines.
    assert_eq!(contents.lines().count(), 2 + 21 * 21);
}

#[test]
fn simulate_is_byte_identical_under_fixed_seed() {
    let out1 = tmpfile("sim-a.csv");
    let out2 = tmpfile("sim-b.csv");
    for out_path in [&out1, &out2] {
        let out = bin()
            .args([
                "simulate",
                "--family",
                "normal",
                "--means",
                "0,0.5",
                "--sds",
                "1,1.2",
                "--sizes",
                "40,50",
                "--basis",
                "1,x,x2",
                "--spec",
                "0:0.5",
                "--spec",
                "1:0.5",
                "--alpha",
                "0.10,0.05",
                "--reps",
                "10",
                "--seed",
                "21",
                "--grid",
                "31",
                "--bootstrap",
                "60",
                "--methods",
                "elrt,np",
                "--out",
                out_path.to_str().unwrap(),
            ])
            .output()
            .unwrap();
        assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    }
    let a = fs::read(&out1).unwrap();
    let b = fs::read(&out2).unwrap();
    assert_eq!(a, b, "fixed-seed simulate runs must be byte-identical");
}

#[test]
fn qq_writes_sorted_pairs() {
    let out_path = tmpfile("qq.csv");
    let out = bin()
        .args([
            "qq",
            "--family",
            "normal",
            "--means",
            "0",
            "--sds",
            "1",
            "--sizes",
            "40",
            "--basis",
            "1,x",
            "--spec",
            "0:0.5",
            "--reps",
            "50",
            "--seed",
            "4",
            "--out",
            out_path.to_str().unwrap(),
        ])
        .output()
        .unwrap();
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let contents = fs::read_to_string(&out_path).unwrap();
    let mut lines = contents.lines();
    assert_eq!(lines.next().unwrap(), "r_n,chisq_quantile");
    let rows: Vec<(f64, f64)> = lines
        .map(|l| {
            let (a, b) = l.split_once(',').unwrap();
            (a.parse().unwrap(), b.parse().unwrap())
        })
        .collect();
    assert_eq!(rows.len(), 50);
    for w in rows.windows(2) {
        assert!(w[0].0 <= w[1].0, "statistics must be sorted");
        assert!(w[0].1 <= w[1].1, "theoretical quantiles must be sorted");
    }
}

#[test]
fn out_dir_env_var_redirects_relative_outputs() {
    let dir = tmpfile("outdir");
    fs::create_dir_all(&dir).unwrap();
    let out = bin()
        .env("DRMEL_OUT_DIR", &dir)
        .args([
            "qq",
            "--family",
            "normal",
            "--means",
            "0",
            "--sds",
            "1",
            "--sizes",
            "30",
            "--basis",
            "1,x",
            "--spec",
            "0:0.5",
            "--reps",
            "5",
            "--seed",
            "1",
            "--out",
            "redirected-qq.csv",
        ])
        .output()
        .unwrap();
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    assert!(dir.join("redirected-qq.csv").exists());
}

#[test]
fn simulate_accepts_design_file() {
    let design = write_tmp(
        "design.txt",
        "family = normal\nmeans = 0, 0.5\nsds = 1, 1.2\nsizes = 40, 50\nbasis = 1,x,x2\n\
         spec = 0:0.5\nspec = 1:0.5\nalpha = 0.05\nreps = 5\nseed = 13\n",
    );
    let out_path = tmpfile("sim-design.csv");
    let out = bin()
        .args([
            "simulate",
            "--design",
            design.to_str().unwrap(),
            "--methods",
            "np",
            "--out",
            out_path.to_str().unwrap(),
        ])
        .output()
        .unwrap();
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let contents = fs::read_to_string(&out_path).unwrap();
    assert!(contents.starts_with("method,alpha,coverage,mc_se,avg_area,failures"));
}

/// Deterministic two-population pseudo-Gaussian sample without pulling a
/// rand dependency into the test: a Weyl sequence pushed through the
/// inverse-CDF of a logistic-ish shape is plenty for smoke data.
fn gaussian_two_pop(n0: usize, n1: usize, seed: u64) -> String {
    let mut s = String::new();
    let mut state = seed as f64 / 97.0;
    let mut next = move || {
        state = (state + 0.6180339887498949) % 1.0;
        let u: f64 = state.clamp(1e-6, 1.0 - 1e-6);
        (u / (1.0 - u)).ln() * 0.55
    };
    for _ in 0..n0 {
        s.push_str(&format!("0,{:.6}\n", next()));
    }
    for _ in 0..n1 {
        s.push_str(&format!("1,{:.6}\n", 0.4 + 1.1 * next()));
    }
    s
}
