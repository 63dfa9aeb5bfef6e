use clap::{Parser, Subcommand, ValueEnum};
use serde_json::Value;
use std::fs::{self, File};
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use tghard::experiment::{
    error_vs_n_csv, gap_rows_csv, gap_vs_degree_csv, planted_samples, run_estimate, run_gap,
    summarize, summary_text, EstimateReport, ExperimentConfig, GapReport,
};
use tghard::instance::{
    assemble_instance, residuals_csv, verify_instance, Instance2D, InstanceFile,
};
use tghard::sample_io::{write_samples, SampleFormat};
use tghard::Error;

/// Moment-matched truncated Gaussian instances and gap experiments.
#[derive(Parser)]
#[command(name = "tghard", version)]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Clone, Copy, ValueEnum)]
enum Format {
    Csv,
    Bin,
}

#[derive(Subcommand)]
enum Cmd {
    /// Construct T and U, certify the instance and write it as JSON.
    Build {
        #[arg(long)]
        epsilon: f64,
        #[arg(long)]
        k: usize,
        #[arg(long, default_value_t = 1)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Recompute all certificates of an instance file.
    Verify {
        #[arg(long = "in")]
        input: PathBuf,
        /// JSON report path; the residual table goes next to it as .csv.
        #[arg(long)]
        report: PathBuf,
    },
    /// Draw planted samples in d dimensions.
    Sample {
        #[arg(long = "in")]
        input: PathBuf,
        #[arg(long)]
        d: usize,
        #[arg(long)]
        n: usize,
        #[arg(long, default_value_t = 1)]
        seed: u64,
        #[arg(long, value_enum, default_value_t = Format::Bin)]
        format: Format,
        #[arg(long)]
        out: PathBuf,
    },
    /// Exact and empirical Hermite gaps.
    Gap {
        #[arg(long = "in")]
        input: PathBuf,
        #[arg(long)]
        d: usize,
        #[arg(long)]
        n: usize,
        #[arg(long)]
        degree_max: Option<usize>,
        #[arg(long, default_value_t = 1e-3)]
        tau: f64,
        #[arg(long, default_value_t = 1)]
        seed: u64,
        /// JSON report path; all rows also go next to it as .csv.
        #[arg(long)]
        out: PathBuf,
    },
    /// Naive and set-aware mean estimation.
    Estimate {
        #[arg(long = "in")]
        input: PathBuf,
        #[arg(long)]
        d: usize,
        #[arg(long)]
        n: usize,
        #[arg(long, default_value_t = 1)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Merge verify.json, gap.json and estimate.json found in a directory.
    Report {
        #[arg(long)]
        dir: PathBuf,
    },
}

/// Exit status classes.
enum Failure {
    Certificate(String),
    Construction(String),
    Io(String),
}

impl Failure {
    fn code(&self) -> u8 {
        match self {
            Failure::Certificate(_) => 1,
            Failure::Construction(_) => 2,
            Failure::Io(_) => 3,
        }
    }

    fn message(&self) -> &str {
        match self {
            Failure::Certificate(m) | Failure::Construction(m) | Failure::Io(m) => m,
        }
    }
}

fn classify(e: Error) -> Failure {
    let msg = e.to_string();
    match e.root() {
        Error::Io(_) | Error::Json(_) | Error::Format(_) => Failure::Io(msg),
        Error::Certificate(_) => Failure::Certificate(msg),
        _ => Failure::Construction(msg),
    }
}

type Outcome = Result<bool, Failure>;

fn io_err(path: &Path, e: impl std::fmt::Display) -> Failure {
    Failure::Io(format!("{}: {e}", path.display()))
}

fn write_text(path: &Path, text: &str) -> Result<(), Failure> {
    fs::write(path, text).map_err(|e| io_err(path, e))
}

fn write_json<T: serde::Serialize>(path: &Path, value: &T) -> Result<(), Failure> {
    let mut s = serde_json::to_string_pretty(value).map_err(|e| io_err(path, e))?;
    s.push('\n');
    write_text(path, &s)
}

fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T, Failure> {
    let text = fs::read_to_string(path).map_err(|e| io_err(path, e))?;
    serde_json::from_str(&text).map_err(|e| io_err(path, e))
}

fn load_instance(path: &Path) -> Result<Instance2D, Failure> {
    let file: InstanceFile = read_json(path)?;
    file.instance().map_err(|e| io_err(path, e))
}

fn build(epsilon: f64, k: usize, seed: u64, out: &Path) -> Outcome {
    let inst = assemble_instance(epsilon, k, seed).map_err(classify)?;
    let report = verify_instance(&inst).map_err(classify)?;
    let pass = report.pass;
    write_json(out, &InstanceFile::new(&inst, Some(report)))?;
    println!(
        "T: {} intervals, U: {} intervals, Z = {}",
        inst.t_set.len(),
        inst.u_set.len(),
        inst.z
    );
    Ok(pass)
}

fn verify(input: &Path, report_path: &Path) -> Outcome {
    let inst = load_instance(input)?;
    let r = verify_instance(&inst).map_err(classify)?;
    write_json(report_path, &r)?;
    write_text(&report_path.with_extension("csv"), &residuals_csv(&r))?;
    let mark = |b: bool| if b { "PASS" } else { "FAIL" };
    println!(
        "{} moment residuals: max {:e} (tolerance {:e})",
        mark(r.passes.moments),
        r.max_moment_residual,
        r.moment_tolerance
    );
    println!("{} Z = {} ≥ 1/2", mark(r.passes.mass), r.mass_s);
    println!("{} Γ(T×U) = {} ≤ 1", mark(r.passes.gsa), r.gsa);
    println!(
        "{} χ² = {} ≤ {}",
        mark(r.passes.chi_square),
        r.chi_square,
        r.chi_square_bound
    );
    println!(
        "{} mass of U error {:e}",
        mark(r.passes.u_mass),
        r.u_mass_error
    );
    println!("g* = {:e}", r.gap_star);
    Ok(r.pass)
}

fn sample(input: &Path, d: usize, n: usize, seed: u64, format: Format, out: &Path) -> Outcome {
    let inst = load_instance(input)?;
    let (_, batch) = planted_samples(&inst, d, n, seed).map_err(classify)?;
    let fmt = match format {
        Format::Csv => SampleFormat::Csv,
        Format::Bin => SampleFormat::Bin,
    };
    let f = File::create(out).map_err(|e| io_err(out, e))?;
    write_samples(f, &batch.points, n, d, fmt).map_err(|e| io_err(out, e))?;
    println!("acceptance rate {} (Z = {})", batch.acceptance_rate, inst.z);
    Ok(true)
}

fn gap(input: &Path, cfg: ExperimentConfig, out: &Path) -> Outcome {
    let inst = load_instance(input)?;
    let rep = run_gap(&inst, &cfg).map_err(classify)?;
    write_json(out, &rep)?;
    write_text(&out.with_extension("csv"), &gap_rows_csv(&rep))?;
    println!(
        "max exact gap to degree {}: {:e}; g* = {:e}; {} statistics exceed tau",
        cfg.k, rep.max_low_degree_gap, rep.g_star, rep.statistics_exceeding_tau
    );
    Ok(rep.low_degree_matched)
}

fn estimate(input: &Path, d: usize, n: usize, seed: u64, out: &Path) -> Outcome {
    let inst = load_instance(input)?;
    let rep = run_estimate(&inst, d, n, seed).map_err(classify)?;
    write_json(out, &rep)?;
    for r in &rep.rows {
        println!("{:?}: |mu_hat| = {}, error = {}", r.method, r.norm, r.error);
    }
    Ok(true)
}

fn report(dir: &Path) -> Outcome {
    let names = ["verify.json", "gap.json", "estimate.json"];
    let missing: Vec<&str> = names
        .iter()
        .copied()
        .filter(|f| !dir.join(f).is_file())
        .collect();
    if !missing.is_empty() {
        return Err(Failure::Io(format!(
            "missing inputs in {}: {}",
            dir.display(),
            missing.join(", ")
        )));
    }
    let certs: Value = read_json(&dir.join(names[0]))?;
    let g: GapReport = read_json(&dir.join(names[1]))?;
    let e: EstimateReport = read_json(&dir.join(names[2]))?;
    let s = summarize(certs, &g, &e).map_err(|err| io_err(&dir.join(names[0]), err))?;
    let text = summary_text(&s);
    write_json(&dir.join("summary.json"), &s)?;
    write_text(&dir.join("summary.txt"), &text)?;
    write_text(&dir.join("gap_vs_degree.csv"), &gap_vs_degree_csv(&g))?;
    write_text(&dir.join("error_vs_n.csv"), &error_vs_n_csv(&e))?;
    print!("{text}");
    Ok(s.pass)
}

fn run(cli: Cli) -> Outcome {
    match cli.cmd {
        Cmd::Build {
            epsilon,
            k,
            seed,
            out,
        } => build(epsilon, k, seed, &out),
        Cmd::Verify { input, report } => verify(&input, &report),
        Cmd::Sample {
            input,
            d,
            n,
            seed,
            format,
            out,
        } => sample(&input, d, n, seed, format, &out),
        Cmd::Gap {
            input,
            d,
            n,
            degree_max,
            tau,
            seed,
            out,
        } => {
            let inst = load_instance(&input)?;
            let dm = degree_max.unwrap_or(inst.params.k + 1);
            let cfg =
                ExperimentConfig::for_instance(&inst, d, n, dm, seed, tau).map_err(classify)?;
            gap(&input, cfg, &out)
        }
        Cmd::Estimate {
            input,
            d,
            n,
            seed,
            out,
        } => estimate(&input, d, n, seed, &out),
        Cmd::Report { dir } => report(&dir),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    if let Some(t) = std::env::var("THREADS")
        .ok()
        .and_then(|v| v.parse::<usize>().ok())
    {
        if t > 0 {
            // Only fails if a pool already exists, which cannot happen here.
            let _ = rayon::ThreadPoolBuilder::new()
                .num_threads(t)
                .build_global();
        }
    }
    match run(cli) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(1),
        Err(f) => {
            eprintln!("error: {}", f.message());
            ExitCode::from(f.code())
        }
    }
}
