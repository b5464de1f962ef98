//! Implementation of the `hilo` commands.

use std::fs;
use std::io::{self, Write};
use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand, ValueEnum};
use hilo_core::analysis::{
    self, bonferroni_pairwise, rm_anova_oneway, rm_anova_twoway, table_from_reports, AnalysisError, Factor, Metric,
    RmTable,
};
use hilo_core::protocol::{Condition, ProtocolError, Session, SessionConfig, ValidationReport};
use nalgebra::{DMatrix, SymmetricEigen};
use serde_json::json;
use thiserror::Error;

pub const OUT_ENV: &str = "HILO_OUT";

#[derive(Debug, Error)]
pub enum CliError {
    #[error("{0}")]
    Usage(String),
    #[error("{0}")]
    Runtime(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Usage(_) => 2,
            CliError::Runtime(_) => 1,
        }
    }
}

impl From<ProtocolError> for CliError {
    fn from(e: ProtocolError) -> Self {
        CliError::Runtime(e.to_string())
    }
}

impl From<AnalysisError> for CliError {
    fn from(e: AnalysisError) -> Self {
        CliError::Runtime(e.to_string())
    }
}

fn io_err(path: &Path) -> impl FnOnce(io::Error) -> CliError + '_ {
    move |e| CliError::Runtime(format!("{}: {e}", path.display()))
}

pub type Result<T> = std::result::Result<T, CliError>;

#[derive(Debug, Parser)]
#[command(name = "hilo", version, about = "Human-in-the-loop stiffness optimisation")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Run batch sessions against the simulated walker.
    Simulate {
        /// Session config (TOML); defaults when absent.
        #[arg(long)]
        config: Option<PathBuf>,
        /// Master seed; subject i uses seed + i.
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long, env = OUT_ENV, default_value = "hilo-out")]
        out: PathBuf,
        #[arg(long, default_value_t = 1)]
        subjects: u32,
        /// Print the effective config and exit.
        #[arg(long)]
        print_config: bool,
    },
    /// Continue a saved session to the end.
    Resume {
        #[arg(long = "resume", value_name = "PATH")]
        snapshot: PathBuf,
        #[arg(long, env = OUT_ENV, default_value = "hilo-out")]
        out: PathBuf,
    },
    /// Run the validation block that closes the current day of a saved
    /// session.
    Validate {
        #[arg(long = "resume", value_name = "PATH")]
        snapshot: PathBuf,
        #[arg(long, env = OUT_ENV, default_value = "hilo-out")]
        out: PathBuf,
    },
    /// Repeated-measures analysis over subjects' validation reports.
    Analyze {
        /// reports.json files or run directories.
        inputs: Vec<PathBuf>,
        #[arg(long, value_enum, default_value = "total")]
        metric: MetricArg,
        /// Also write the summary here.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Serve the session API and live stream.
    Serve {
        #[arg(long, default_value = "127.0.0.1:8080")]
        addr: String,
        /// Directory for session snapshots.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Write plottable series from a session snapshot.
    Export {
        /// session.json or a run directory.
        input: PathBuf,
        #[arg(long, value_enum)]
        kind: ExportKind,
        #[arg(long, env = OUT_ENV, default_value = "hilo-out")]
        out: PathBuf,
    },
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum MetricArg {
    Total,
    Effort,
    Tracking,
    Stiffness,
}

impl From<MetricArg> for Metric {
    fn from(m: MetricArg) -> Self {
        match m {
            MetricArg::Total => Metric::Total,
            MetricArg::Effort => Metric::Effort,
            MetricArg::Tracking => Metric::Tracking,
            MetricArg::Stiffness => Metric::Stiffness,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum ExportKind {
    MeanTrajectory,
    CovarianceEllipses,
    ValidationBars,
}

pub fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Simulate {
            config,
            seed,
            out,
            subjects,
            print_config,
        } => {
            let cfg = load_config(config.as_deref(), seed)?;
            if print_config {
                print!("{}", cfg.to_toml());
                return Ok(());
            }
            if subjects == 0 {
                return Err(CliError::Usage("--subjects must be at least 1".into()));
            }
            simulate(&cfg, subjects, &out)
        }
        Command::Resume { snapshot, out } => {
            let session = load_snapshot(&snapshot)?;
            finish_run(session, &out)
        }
        Command::Validate { snapshot, out } => {
            let mut session = load_snapshot(&snapshot)?;
            let report = session.run_validation()?;
            fs::create_dir_all(&out).map_err(io_err(&out))?;
            write_outputs(&session, &out)?;
            println!("day {} validation: {}", report.day + 1, describe(&report));
            Ok(())
        }
        Command::Analyze { inputs, metric, out } => {
            if inputs.is_empty() {
                return Err(CliError::Usage("analyze needs at least one reports file or run directory".into()));
            }
            let summary = analyze(&inputs, metric.into())?;
            print!("{summary}");
            if let Some(p) = out {
                fs::write(&p, &summary).map_err(io_err(&p))?;
            }
            Ok(())
        }
        Command::Serve { addr, out } => {
            if let Some(dir) = &out {
                fs::create_dir_all(dir).map_err(io_err(dir))?;
            }
            let rt = tokio::runtime::Runtime::new().map_err(|e| CliError::Runtime(e.to_string()))?;
            rt.block_on(hilo_service::serve(&addr, out))
                .map_err(|e| CliError::Runtime(format!("serve {addr}: {e}")))
        }
        Command::Export { input, kind, out } => {
            let snapshot = if input.is_dir() { input.join("session.json") } else { input };
            let session = load_snapshot(&snapshot)?;
            fs::create_dir_all(&out).map_err(io_err(&out))?;
            let (name, text) = export(&session, kind);
            let dest = out.join(name);
            fs::write(&dest, text).map_err(io_err(&dest))?;
            println!("{}", dest.display());
            Ok(())
        }
    }
}

/// Config from a TOML file (usage error when missing or invalid); a
/// relative `path_file` is resolved against the config's directory.
pub fn load_config(path: Option<&Path>, seed: Option<u64>) -> Result<SessionConfig> {
    let mut cfg = match path {
        None => SessionConfig::default(),
        Some(p) => {
            let text = fs::read_to_string(p).map_err(|e| CliError::Usage(format!("config {}: {e}", p.display())))?;
            let mut cfg = SessionConfig::from_toml(&text)
                .map_err(|e| CliError::Usage(format!("config {}: {e}", p.display())))?;
            if let (Some(file), Some(dir)) = (&cfg.path_file, p.parent()) {
                if file.is_relative() {
                    cfg.path_file = Some(dir.join(file));
                }
            }
            cfg
        }
    };
    if let Some(s) = seed {
        cfg.seed = s;
    }
    cfg.validate().map_err(|e| CliError::Usage(e.to_string()))?;
    Ok(cfg)
}

fn load_snapshot(path: &Path) -> Result<Session> {
    if !path.exists() {
        return Err(CliError::Usage(format!("{}: no such file", path.display())));
    }
    Ok(Session::load(path)?)
}

fn subject_dir(out: &Path, subjects: u32, i: u32) -> PathBuf {
    if subjects == 1 {
        out.to_path_buf()
    } else {
        out.join(format!("subject-{:02}", i + 1))
    }
}

/// One worker per subject.
pub fn simulate(cfg: &SessionConfig, subjects: u32, out: &Path) -> Result<()> {
    let results: Vec<Result<()>> = std::thread::scope(|scope| {
        let handles: Vec<_> = (0..subjects)
            .map(|i| {
                let mut c = cfg.clone();
                c.seed = cfg.seed.wrapping_add(i as u64);
                let dir = subject_dir(out, subjects, i);
                scope.spawn(move || -> Result<()> {
                    let session = Session::new(c)?;
                    finish_run(session, &dir)
                })
            })
            .collect();
        handles.into_iter().map(|h| h.join().expect("subject worker panicked")).collect()
    });
    results.into_iter().collect()
}

/// Runs to the end, snapshotting after every generation, then writes the
/// archive, reports and manifest.
fn finish_run(mut session: Session, dir: &Path) -> Result<()> {
    let snaps = dir.join("snapshots");
    fs::create_dir_all(&snaps).map_err(io_err(&snaps))?;
    write_manifest(&session, dir)?;
    while !session.is_finished() {
        let g = session.cma.generation;
        session.run_trial()?;
        if session.cma.generation > g {
            let p = snaps.join(format!("gen-{:03}.json", session.cma.generation));
            session.save(&p)?;
        }
    }
    write_outputs(&session, dir)?;
    println!(
        "{}: {} records, {} validation reports, final mean {:?}",
        dir.display(),
        session.archive.len(),
        session.reports.len(),
        session.cma.clamped_mean(&session.params)
    );
    Ok(())
}

fn write_manifest(session: &Session, dir: &Path) -> Result<()> {
    let manifest = json!({
        "tool": "hilo",
        "version": env!("CARGO_PKG_VERSION"),
        "seed": session.config.seed,
        "config": session.config,
    });
    let p = dir.join("manifest.json");
    fs::write(&p, serde_json::to_string_pretty(&manifest).expect("manifest serialises")).map_err(io_err(&p))?;
    let p = dir.join("config.toml");
    fs::write(&p, session.config.to_toml()).map_err(io_err(&p))
}

fn write_outputs(session: &Session, dir: &Path) -> Result<()> {
    let p = dir.join("archive.jsonl");
    let mut f = io::BufWriter::new(fs::File::create(&p).map_err(io_err(&p))?);
    session.write_archive(&mut f).and_then(|_| f.flush()).map_err(io_err(&p))?;
    let p = dir.join("reports.json");
    fs::write(&p, serde_json::to_string_pretty(&session.reports).expect("reports serialise")).map_err(io_err(&p))?;
    session.save(&dir.join("session.json"))?;
    Ok(())
}

fn describe(report: &ValidationReport) -> String {
    Condition::ALL
        .iter()
        .map(|c| format!("{}={:.4}", analysis::condition_label(*c), report.mean_total(*c)))
        .collect::<Vec<_>>()
        .join(" ")
}

/// Expands run directories (a subject or a directory of subjects) into
/// named reports files.
fn collect_reports(inputs: &[PathBuf]) -> Result<Vec<(String, PathBuf)>> {
    let mut out = Vec::new();
    for input in inputs {
        if input.is_file() {
            let name = input
                .parent()
                .and_then(|p| p.file_name())
                .map_or_else(|| input.display().to_string(), |n| n.to_string_lossy().into_owned());
            out.push((name, input.clone()));
        } else if input.join("reports.json").is_file() {
            let name = input.file_name().map_or_else(|| input.display().to_string(), |n| n.to_string_lossy().into_owned());
            out.push((name, input.join("reports.json")));
        } else if input.is_dir() {
            let mut subs: Vec<PathBuf> = fs::read_dir(input)
                .map_err(io_err(input))?
                .filter_map(|e| e.ok().map(|e| e.path()))
                .filter(|p| p.join("reports.json").is_file())
                .collect();
            if subs.is_empty() {
                return Err(CliError::Usage(format!("{}: no reports.json found", input.display())));
            }
            subs.sort();
            for s in subs {
                let name = s.file_name().expect("directory entry").to_string_lossy().into_owned();
                out.push((name, s.join("reports.json")));
            }
        } else {
            return Err(CliError::Usage(format!("{}: no such file or directory", input.display())));
        }
    }
    Ok(out)
}

/// Summary table with significance markers (* p<0.05, ** p<0.01).
pub fn analyze(inputs: &[PathBuf], metric: Metric) -> Result<String> {
    let mut subjects = Vec::new();
    for (name, path) in collect_reports(inputs)? {
        let text = fs::read_to_string(&path).map_err(io_err(&path))?;
        let reports: Vec<ValidationReport> =
            serde_json::from_str(&text).map_err(|e| CliError::Runtime(format!("{}: {e}", path.display())))?;
        if reports.is_empty() {
            return Err(CliError::Runtime(format!("{}: no validation reports", path.display())));
        }
        subjects.push((name, reports));
    }
    if subjects.len() < 2 {
        return Err(CliError::Runtime(format!(
            "need at least 2 subjects for a repeated-measures analysis (got {}); error df would be 0",
            subjects.len()
        )));
    }
    let table = table_from_reports(&subjects, &analysis::CONTROLLER_CONDITIONS, metric)?;
    let (anova, factors) = if table.times.len() >= 2 {
        (rm_anova_twoway(&table)?, vec![Factor::Condition, Factor::Time])
    } else {
        (rm_anova_oneway(&table)?, vec![Factor::Condition])
    };
    let pairwise = factors
        .into_iter()
        .map(|f| Ok((f, bonferroni_pairwise(&table, f)?)))
        .collect::<Result<Vec<_>>>()?;
    let mut text = analysis::summary_table(&anova, &pairwise);
    text.push_str(&cell_means(&table));
    Ok(text)
}

fn cell_means(table: &RmTable) -> String {
    let (s, c, t) = table.dims();
    let mut out = String::from("# cell means\ncondition,time,mean\n");
    for j in 0..c {
        for k in 0..t {
            let m = (0..s).map(|i| table.get(i, j, k)).sum::<f64>() / s as f64;
            out.push_str(&format!("{},{},{:.6}\n", table.conditions[j], table.times[k], m));
        }
    }
    out
}

/// File name and contents for one export kind.
pub fn export(session: &Session, kind: ExportKind) -> (&'static str, String) {
    let dim = session.params.dim;
    let axes: Vec<String> = session
        .config
        .optimized_joints
        .iter()
        .map(|j| serde_json::to_value(j).unwrap().as_str().unwrap().to_string())
        .collect();
    match kind {
        ExportKind::MeanTrajectory => {
            let mut out = format!("label,generation,{}\n", axes.join(","));
            for (i, h) in session.history.iter().enumerate() {
                let vals: Vec<String> = h.mean.iter().map(|v| format!("{v:.9}")).collect();
                out.push_str(&format!("G{},{},{}\n", i + 1, h.generation, vals.join(",")));
            }
            ("mean_trajectory.csv", out)
        }
        ExportKind::CovarianceEllipses => {
            let mut out = String::from("label,generation,center_x,center_y,semi_major,semi_minor,angle_rad\n");
            for (i, h) in session.history.iter().enumerate() {
                let c = DMatrix::from_fn(dim, dim, |r, k| h.covariance[r][k] * h.sigma * h.sigma);
                let eig = SymmetricEigen::new(c);
                let mut order: Vec<usize> = (0..dim).collect();
                order.sort_by(|a, b| eig.eigenvalues[*b].total_cmp(&eig.eigenvalues[*a]));
                let major = eig.eigenvalues[order[0]].max(0.0).sqrt();
                let minor = order.get(1).map_or(0.0, |k| eig.eigenvalues[*k].max(0.0).sqrt());
                let v = eig.eigenvectors.column(order[0]);
                let angle = if dim >= 2 {
                    let a = v[1].atan2(v[0]);
                    // direction is unsigned; keep it in (-π/2, π/2]
                    if a > std::f64::consts::FRAC_PI_2 {
                        a - std::f64::consts::PI
                    } else if a <= -std::f64::consts::FRAC_PI_2 {
                        a + std::f64::consts::PI
                    } else {
                        a
                    }
                } else {
                    0.0
                };
                let cy = h.mean.get(1).copied().unwrap_or(0.0);
                out.push_str(&format!(
                    "G{},{},{:.9},{:.9},{:.9},{:.9},{:.9}\n",
                    i + 1,
                    h.generation,
                    h.mean[0],
                    cy,
                    major,
                    minor,
                    angle
                ));
            }
            ("covariance_ellipses.csv", out)
        }
        ExportKind::ValidationBars => {
            let mut out = String::from("day,condition,mean,std,n\n");
            for r in &session.reports {
                for c in Condition::ALL {
                    let xs: Vec<f64> = (0..r.rounds.len()).filter_map(|k| r.cost(k, c).map(|x| x.total)).collect();
                    let n = xs.len() as f64;
                    let mean = xs.iter().sum::<f64>() / n;
                    let sd = if xs.len() > 1 {
                        (xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt()
                    } else {
                        0.0
                    };
                    out.push_str(&format!(
                        "{},{},{:.9},{:.9},{}\n",
                        r.day + 1,
                        analysis::condition_label(c),
                        mean,
                        sd,
                        xs.len()
                    ));
                }
            }
            ("validation_bars.csv", out)
        }
    }
}
