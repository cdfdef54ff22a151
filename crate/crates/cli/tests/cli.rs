use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use tempfile::TempDir;

const HEADER: &str =
    "algorithm,dataset,n,d,kappa,compressor,seed,t,rounds,bits_per_client,sqdist_mean,sqdist_ybar,obj_gap,lyapunov";

const MINIMAL: &str = r#"
[problem]
source = "quadratic"
dim = 6
clients = 3
kappa = 50.0

[run]
seeds = [0]
max_iterations = 300

[[algorithm]]
name = "locodl"
"#;

const TWO_BLOCKS: &str = r#"
[problem]
source = "quadratic"
dim = 8
clients = 4
kappa = 100.0
data_seed = 3

[run]
seeds = [0, 1]
stop = { sqdist-ratio = 1e-6 }
max_iterations = 50000

[[algorithm]]
name = "locodl"
compressor = { kind = "rand-k", k = 2 }

[[algorithm]]
name = "diana"
compressor = { kind = "rand-k", k = 2 }
"#;

fn locodl(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_locodl")).args(args).env_remove("LOCODL_OUT_DIR").output().unwrap()
}

fn write_config(dir: &Path, text: &str) -> PathBuf {
    let path = dir.join("experiment.toml");
    std::fs::write(&path, text).unwrap();
    path
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

#[test]
fn minimal_run_writes_one_csv_with_the_schema_header() {
    let dir = TempDir::new().unwrap();
    let config = write_config(dir.path(), MINIMAL);
    let out = dir.path().join("out");
    let o = locodl(&["run", s(&config), "--out", s(&out)]);
    assert!(o.status.success(), "{}", stderr(&o));
    let csvs: Vec<_> = std::fs::read_dir(&out)
        .unwrap()
        .map(|e| e.unwrap().path())
        .filter(|p| p.extension().is_some_and(|e| e == "csv"))
        .collect();
    assert_eq!(csvs.len(), 1);
    let text = std::fs::read_to_string(&csvs[0]).unwrap();
    let mut lines = text.lines();
    assert_eq!(lines.next(), Some(HEADER));
    assert!(lines.next().unwrap().starts_with("locodl,quadratic,3,6,50"));
    assert!(out.join("manifest.txt").exists());
    assert!(stdout(&o).contains("tau"));
}

#[test]
fn out_dir_comes_from_the_environment() {
    let dir = TempDir::new().unwrap();
    let config = write_config(dir.path(), MINIMAL);
    let out = dir.path().join("from-env");
    let o = Command::new(env!("CARGO_BIN_EXE_locodl"))
        .args(["run", s(&config)])
        .env("LOCODL_OUT_DIR", &out)
        .output()
        .unwrap();
    assert!(o.status.success(), "{}", stderr(&o));
    assert!(out.join("locodl_identity_seed0.csv").exists());
}

#[test]
fn chi_violation_exits_3_and_names_the_condition() {
    let dir = TempDir::new().unwrap();
    let text = MINIMAL.replace(
        "name = \"locodl\"",
        "name = \"locodl\"\ncompressor = { kind = \"rand-k\", k = 1 }\nparams = { chi = 0.9, rho = 0.5 }",
    );
    let config = write_config(dir.path(), &text);
    let out = dir.path().join("out");
    let o = locodl(&["run", s(&config), "--out", s(&out)]);
    assert_eq!(o.status.code(), Some(3), "{}", stderr(&o));
    assert!(stderr(&o).contains("2ρ − ρ²(1+ω_av) − χ ≥ 0"), "{}", stderr(&o));
    assert!(!out.join("locodl_rand-1_seed0.csv").exists());
}

#[test]
fn bad_config_and_missing_file_exit_2() {
    let dir = TempDir::new().unwrap();
    let config = write_config(dir.path(), &MINIMAL.replace("clients", "client_count"));
    assert_eq!(locodl(&["run", s(&config)]).status.code(), Some(2));
    let missing = dir.path().join("nope.toml");
    assert_eq!(locodl(&["run", s(&missing)]).status.code(), Some(2));
}

#[test]
fn rerun_is_byte_identical_and_resolved_config_reproduces_it() {
    let dir = TempDir::new().unwrap();
    let config = write_config(dir.path(), TWO_BLOCKS);
    let (a, b, c) = (dir.path().join("a"), dir.path().join("b"), dir.path().join("c"));
    assert!(locodl(&["run", s(&config), "--out", s(&a)]).status.success());
    assert!(locodl(&["run", s(&config), "--out", s(&b)]).status.success());
    let resolved = a.join("resolved.toml");
    let o = locodl(&["run", s(&resolved), "--out", s(&c)]);
    assert!(o.status.success(), "{}", stderr(&o));
    let names = ["locodl_rand-2_seed0.csv", "locodl_rand-2_seed1.csv", "diana_rand-2_seed0.csv", "diana_rand-2_seed1.csv"];
    for name in names {
        let first = std::fs::read(a.join(name)).unwrap();
        assert_eq!(first, std::fs::read(b.join(name)).unwrap(), "{name}");
        assert_eq!(first, std::fs::read(c.join(name)).unwrap(), "{name}");
    }
    let manifest = std::fs::read_to_string(a.join("manifest.txt")).unwrap();
    let hash = |m: &str| m.lines().find(|l| l.starts_with("input_hash=")).unwrap().to_string();
    assert_eq!(hash(&manifest), hash(&std::fs::read_to_string(b.join("manifest.txt")).unwrap()));
    assert!(manifest.lines().any(|l| l.starts_with("locodl,rand-2,")));
}

#[test]
fn seeds_flag_overrides_the_file() {
    let dir = TempDir::new().unwrap();
    let config = write_config(dir.path(), MINIMAL);
    let out = dir.path().join("out");
    assert!(locodl(&["run", s(&config), "--out", s(&out), "--seeds", "4,9"]).status.success());
    assert!(out.join("locodl_identity_seed4.csv").exists());
    assert!(out.join("locodl_identity_seed9.csv").exists());
    assert!(!out.join("locodl_identity_seed0.csv").exists());
}

#[test]
fn kappa_sweep_writes_a_summary_row_per_cell_and_a_slope() {
    let dir = TempDir::new().unwrap();
    let text = TWO_BLOCKS.replace("[[algorithm]]\nname = \"diana\"\ncompressor = { kind = \"rand-k\", k = 2 }\n", "");
    let config = write_config(dir.path(), &text);
    let out = dir.path().join("sweep");
    let o = locodl(&["sweep", s(&config), "--vary", "kappa=1e1,1e2,1e3", "--out", s(&out)]);
    assert!(o.status.success(), "{}", stderr(&o));
    let summary = std::fs::read_to_string(out.join("summary.csv")).unwrap();
    let rows: Vec<&str> = summary.lines().skip(1).collect();
    assert_eq!(rows.len(), 3);
    for row in &rows {
        let bits: f64 = row.split(',').nth(4).unwrap().parse().unwrap();
        assert!(bits > 0.0, "{row}");
    }
    let slope_line = stdout(&o).lines().find(|l| l.starts_with("slope locodl")).unwrap().to_string();
    let slope: f64 = slope_line.rsplit(' ').next().unwrap().parse().unwrap();
    assert!(slope.is_finite() && slope > 0.0, "{slope_line}");
    assert!(out.join("kappa_1e2").join("locodl_rand-2_seed0.csv").exists());
}

#[test]
fn empty_sweep_list_exits_2() {
    let dir = TempDir::new().unwrap();
    let config = write_config(dir.path(), TWO_BLOCKS);
    let o = locodl(&["sweep", s(&config), "--vary", "kappa=", "--out", s(&dir.path().join("x"))]);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn certify_rand_1_on_ones_reports_ratio_near_nine() {
    let o = locodl(&["certify", "rand-k", "--k", "1", "--d", "10", "--trials", "100000", "--seed", "1"]);
    assert!(o.status.success(), "{}", stderr(&o));
    let out = stdout(&o);
    let ratio: f64 = out
        .lines()
        .find(|l| l.starts_with("variance ratio"))
        .and_then(|l| l.split_whitespace().nth(2))
        .unwrap()
        .parse()
        .unwrap();
    assert!((ratio - 9.0).abs() < 0.05, "{out}");
    assert!(out.lines().any(|l| l == "PASS"));
}

#[test]
fn certify_against_an_understated_omega_exits_1() {
    let o = locodl(&["certify", "rand-k", "--k", "1", "--d", "10", "--declared-omega", "4"]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stdout(&o).lines().any(|l| l == "FAIL"));
}

#[test]
fn certify_rejects_unknown_names_and_too_few_trials() {
    assert_eq!(locodl(&["certify", "top-k", "--d", "10"]).status.code(), Some(2));
    assert_eq!(locodl(&["certify", "natural", "--d", "10", "--trials", "9999"]).status.code(), Some(2));
}

#[test]
fn plot_draws_one_polyline_per_series_with_decade_ticks() {
    let dir = TempDir::new().unwrap();
    let config = write_config(dir.path(), TWO_BLOCKS);
    let out = dir.path().join("out");
    assert!(locodl(&["run", s(&config), "--out", s(&out)]).status.success());

    let one = dir.path().join("one.svg");
    let csv = out.join("locodl_rand-2_seed0.csv");
    let o = locodl(&["plot", s(&csv), "--out", s(&one)]);
    assert!(o.status.success(), "{}", stderr(&o));
    let svg = std::fs::read_to_string(&one).unwrap();
    assert_eq!(svg.matches("<polyline").count(), 1);
    assert!(svg.matches(r#"class="ytick""#).count() >= 2);
    assert!(svg.contains(">1e0<"));

    let two = dir.path().join("two.svg");
    let all: Vec<PathBuf> = ["locodl_rand-2_seed0.csv", "locodl_rand-2_seed1.csv", "diana_rand-2_seed1.csv"]
        .iter()
        .map(|n| out.join(n))
        .collect();
    let mut args = vec!["plot"];
    args.extend(all.iter().map(|p| s(p)));
    args.extend(["--x", "t", "--y", "sqdist_ybar", "--out", s(&two)]);
    let o = locodl(&args);
    assert!(o.status.success(), "{}", stderr(&o));
    let svg = std::fs::read_to_string(&two).unwrap();
    assert_eq!(svg.matches("<polyline").count(), 2);
    assert!(svg.contains("locodl rand-2 (seed 0)"));
    assert!(svg.contains("diana rand-2 (seed 1)"));
}

#[test]
fn plot_rejects_a_foreign_header() {
    let dir = TempDir::new().unwrap();
    let csv = dir.path().join("other.csv");
    std::fs::write(&csv, "a,b\n1,2\n").unwrap();
    let o = locodl(&["plot", s(&csv), "--out", s(&dir.path().join("p.svg"))]);
    assert_eq!(o.status.code(), Some(2));
    assert!(!dir.path().join("p.svg").exists());
}
