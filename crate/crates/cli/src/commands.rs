use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use locodl::compressors::{certify, CompressorKind, CompressorSpec};
use locodl::harness::{
    content_hash, csv_bytes, fit_communication_exponent, median, metadata_text, prepare, resolve_params, run_prepared,
    ExperimentConfig, ExperimentTrace, ResolvedParams,
};
use locodl::Error;

use crate::config::ExperimentFile;
use crate::output::{slug, write_atomic};

/// Results of one `[[algorithm]]` block.
pub struct BlockOutput {
    pub config: ExperimentConfig,
    pub resolved: ResolvedParams,
    pub traces: Vec<ExperimentTrace>,
    pub files: Vec<PathBuf>,
}

/// Certification failed; exits with status 1.
#[derive(Debug)]
pub struct CertificationFailed;

impl std::fmt::Display for CertificationFailed {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str("compressor failed certification")
    }
}

impl std::error::Error for CertificationFailed {}

fn run_file_name(config: &ExperimentConfig, compressor: &str, seed: u64) -> String {
    format!("{}_{}_seed{seed}", config.algorithm.name(), slug(compressor))
}

/// Runs every block of `file` and writes one CSV and one metadata file per
/// (block, seed) into `out`.
pub fn execute(file: &ExperimentFile, out: &Path) -> Result<Vec<BlockOutput>> {
    let prepared = prepare(&file.problem, file.run.reference_tol)?;
    let configs = file.experiments();
    // Resolve everything first so a bad block fails before any run starts.
    let resolved: Vec<ResolvedParams> =
        configs.iter().map(|c| resolve_params(c, &prepared.problem)).collect::<Result<_, Error>>()?;
    let mut outputs = Vec::new();
    for (config, resolved) in configs.into_iter().zip(resolved) {
        let traces = run_prepared(&config, &prepared)?;
        let mut files = Vec::new();
        for trace in &traces {
            let stem = run_file_name(&config, &trace.meta.compressor, trace.meta.seed);
            let csv_path = out.join(format!("{stem}.csv"));
            write_atomic(&csv_path, &csv_bytes(std::slice::from_ref(trace))?)?;
            write_atomic(&out.join(format!("{stem}.meta.txt")), metadata_text(&trace.meta).as_bytes())?;
            files.push(csv_path);
        }
        outputs.push(BlockOutput { config, resolved, traces, files });
    }
    Ok(outputs)
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map_or("-".to_string(), |v| format!("{v:.6e}"))
}

pub fn params_table(outputs: &[BlockOutput]) -> String {
    let mut s = format!(
        "{:<9} {:<16} {:>13} {:>13} {:>13} {:>13} {:>13} {:>13} {:>13}\n",
        "algorithm", "compressor", "gamma", "chi", "rho", "p", "omega", "omega_av", "tau"
    );
    for o in outputs {
        let r = &o.resolved;
        let _ = writeln!(
            s,
            "{:<9} {:<16} {:>13} {:>13} {:>13} {:>13} {:>13} {:>13} {:>13}",
            r.algorithm.name(),
            r.compressor,
            format!("{:.6e}", r.gamma),
            fmt_opt(r.chi),
            fmt_opt(r.rho),
            fmt_opt(r.p),
            format!("{:.6e}", r.omega),
            format!("{:.6e}", r.omega_av),
            fmt_opt(r.tau)
        );
    }
    s
}

fn input_hash(config_bytes: &[u8], file: &ExperimentFile) -> Result<String> {
    let data = match file.dataset_path() {
        Some(p) => std::fs::read(p).map_err(|e| Error::Input(format!("cannot read {}: {e}", p.display())))?,
        None => Vec::new(),
    };
    Ok(content_hash(&[config_bytes, &data]))
}

fn manifest(config_path: &Path, out: &Path, hash: &str, outputs: &[BlockOutput]) -> String {
    let mut s = String::new();
    let _ = writeln!(s, "config={}", config_path.display());
    let _ = writeln!(s, "output_dir={}", out.display());
    let _ = writeln!(s, "input_hash={hash}");
    s.push_str("\n[params]\nalgorithm,compressor,gamma,chi,rho,p,alpha,omega,omega_av,tau\n");
    let opt = |v: Option<f64>| v.map_or(String::new(), |v| v.to_string());
    for o in outputs {
        let r = &o.resolved;
        let _ = writeln!(
            s,
            "{},{},{},{},{},{},{},{},{},{}",
            r.algorithm.name(),
            r.compressor,
            r.gamma,
            opt(r.chi),
            opt(r.rho),
            opt(r.p),
            opt(r.alpha),
            r.omega,
            r.omega_av,
            opt(r.tau)
        );
    }
    s.push_str("\n[files]\n");
    for o in outputs {
        for f in &o.files {
            let name = f.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_default();
            let _ = writeln!(s, "{name}");
        }
    }
    s
}

/// The input file with every block's parameters pinned to the resolved values.
fn resolved_file(file: &ExperimentFile, outputs: &[BlockOutput]) -> ExperimentFile {
    let mut pinned = file.clone();
    for (block, o) in pinned.algorithm.iter_mut().zip(outputs) {
        block.params = o.resolved.as_overrides();
    }
    pinned
}

pub fn cmd_run(config_path: &Path, out: &Path, seeds: Option<Vec<u64>>) -> Result<()> {
    let (mut file, bytes) = ExperimentFile::load(config_path)?;
    if let Some(seeds) = seeds {
        file.run.seeds = seeds;
    }
    let outputs = execute(&file, out)?;
    print!("{}", params_table(&outputs));
    let hash = input_hash(&bytes, &file)?;
    write_atomic(&out.join("manifest.txt"), manifest(config_path, out, &hash, &outputs).as_bytes())?;
    write_atomic(&out.join("resolved.toml"), resolved_file(&file, &outputs).to_toml().as_bytes())?;
    for o in &outputs {
        for t in &o.traces {
            let last = t.last();
            println!(
                "{} {} seed {}: {} iterations, {} rounds, {} bits/client, sqdist_mean {:.3e}{}",
                t.meta.algorithm.name(),
                t.meta.compressor,
                t.meta.seed,
                t.meta.iterations,
                last.rounds,
                last.bits_per_client,
                last.sqdist_mean,
                if t.meta.reached_target { ", target reached" } else { "" }
            );
        }
    }
    println!("wrote {}", out.display());
    Ok(())
}

/// A `key=v1,v2,...` sweep axis.
#[derive(Debug, Clone, PartialEq)]
pub struct Vary {
    pub key: String,
    pub values: Vec<String>,
}

impl std::str::FromStr for Vary {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        let (key, list) = s.split_once('=').ok_or("expected key=v1,v2,...")?;
        let values: Vec<String> =
            list.split(',').map(str::trim).filter(|v| !v.is_empty()).map(str::to_string).collect();
        Ok(Vary { key: key.trim().to_string(), values })
    }
}

fn apply(file: &mut ExperimentFile, key: &str, value: &str) -> Result<(), Error> {
    let bad = || Error::Input(format!("invalid value `{value}` for {key}"));
    match key {
        "kappa" => file.problem.kappa = value.parse().map_err(|_| bad())?,
        "n" | "clients" => file.problem.clients = value.parse().map_err(|_| bad())?,
        "data_seed" => file.problem.data_seed = value.parse().map_err(|_| bad())?,
        other => return Err(Error::Input(format!("cannot vary `{other}` (use kappa, n or data_seed)"))),
    }
    Ok(())
}

pub fn cmd_sweep(config_path: &Path, out: &Path, vary: &Vary, seeds: Option<Vec<u64>>) -> Result<()> {
    if vary.values.is_empty() {
        return Err(Error::Input(format!("empty value list for `{}`", vary.key)).into());
    }
    let (mut base, bytes) = ExperimentFile::load(config_path)?;
    if let Some(seeds) = seeds {
        base.run.seeds = seeds;
    }
    if base.run.stop.is_none() {
        return Err(Error::Input("a sweep needs a stop rule in [run]".into()).into());
    }
    let mut summary = String::from("vary,value,algorithm,compressor,median_bits,reached,seeds\n");
    let mut points: Vec<(String, Vec<(f64, f64)>)> = Vec::new();
    for value in &vary.values {
        let mut file = base.clone();
        apply(&mut file, &vary.key, value)?;
        let cell = out.join(slug(&format!("{}={value}", vary.key)));
        let outputs = execute(&file, &cell)?;
        println!("{} = {value}", vary.key);
        print!("{}", params_table(&outputs));
        for o in &outputs {
            let bits: Vec<f64> =
                o.traces.iter().filter(|t| t.meta.reached_target).map(|t| t.last().bits_per_client).collect();
            let m = median(&bits);
            let label = format!("{} {}", o.config.algorithm.name(), o.resolved.compressor);
            let _ = writeln!(
                summary,
                "{},{value},{},{},{},{},{}",
                vary.key,
                o.config.algorithm.name(),
                o.resolved.compressor,
                m.map_or("NaN".to_string(), |m| m.to_string()),
                bits.len(),
                o.traces.len()
            );
            if let (Some(m), Ok(x)) = (m, value.parse::<f64>()) {
                match points.iter_mut().find(|(l, _)| *l == label) {
                    Some((_, p)) => p.push((x, m)),
                    None => points.push((label, vec![(x, m)])),
                }
            }
        }
    }
    write_atomic(&out.join("summary.csv"), summary.as_bytes())?;
    print!("{summary}");
    let mut exponents = format!("input_hash={}\n", input_hash(&bytes, &base)?);
    if vary.key == "kappa" {
        for (label, p) in &points {
            let line = match fit_communication_exponent(p) {
                Ok(slope) => format!("slope {label} = {slope:.4}"),
                Err(e) => format!("slope {label} unavailable: {e}"),
            };
            println!("{line}");
            exponents.push_str(&line);
            exponents.push('\n');
        }
    }
    write_atomic(&out.join("exponent.txt"), exponents.as_bytes())?;
    println!("wrote {}", out.display());
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, clap::ValueEnum)]
pub enum Probe {
    /// The all-ones vector.
    Ones,
    /// `1, 2, ..., d` with alternating signs.
    Ramp,
}

pub struct CertifyArgs {
    pub compressor: String,
    pub d: usize,
    pub k: Option<usize>,
    pub trials: usize,
    pub seed: u64,
    pub declared_omega: Option<f64>,
    pub probe: Probe,
}

pub fn cmd_certify(args: &CertifyArgs) -> Result<()> {
    if args.trials < 10_000 {
        bail!(Error::Input(format!("certification needs at least 10000 trials, got {}", args.trials)));
    }
    let kind = CompressorKind::from_name(&args.compressor, args.k)?;
    let spec = CompressorSpec::new(kind, args.d)?;
    let x: Vec<f64> = match args.probe {
        Probe::Ones => vec![1.0; args.d],
        Probe::Ramp => (1..=args.d).map(|j| if j % 2 == 0 { -(j as f64) } else { j as f64 }).collect(),
    };
    let declared = args.declared_omega.unwrap_or_else(|| spec.omega());
    let c = certify(&spec, &x, args.trials, args.seed, declared).context("certification")?;
    println!("compressor {spec} d={} trials={} seed={}", args.d, args.trials, args.seed);
    println!(
        "unbiasedness: max |mean - x| = {:.3} standard errors (limit 4): {}",
        c.max_standard_errors,
        if c.unbiased { "pass" } else { "FAIL" }
    );
    println!(
        "variance ratio {:.6} vs declared omega {} (bound {:.6}): {}",
        c.variance_ratio,
        c.declared_omega,
        c.variance_bound,
        if c.variance_ok { "pass" } else { "FAIL" }
    );
    println!("bits per message: {}", spec.bit_cost());
    if c.passed() {
        println!("PASS");
        Ok(())
    } else {
        println!("FAIL");
        Err(CertificationFailed.into())
    }
}
