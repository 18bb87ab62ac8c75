mod config;
mod report;

use std::fs;
use std::io::BufWriter;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use config::{ConfigError, RunConfig};
use rejuv_core::design::{design, Design};
use rejuv_core::sets::Ellipsoid;
use rejuv_core::sim::{run_scenario, write_ellipse_csv};
use report::{DesignReport, SimSummary, VerifySection};

#[derive(Parser)]
#[command(
    name = "rejuv",
    version,
    about = "Software-rejuvenation controller design, certification and simulation"
)]
struct Cli {
    /// Overrides the mission seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    #[arg(long)]
    config: PathBuf,
    /// Overrides `output.dir`.
    #[arg(long)]
    out_dir: Option<PathBuf>,
}

#[derive(Subcommand)]
enum Command {
    /// Compute gains, the invariant ellipsoid and write the design report.
    Design(Common),
    /// Certify T_UC and store the result in the design report.
    Verify {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        tuc: Option<f64>,
        #[arg(long)]
        eps_sc: Option<f64>,
        /// Also bisect for the largest certifiable T_UC.
        #[arg(long)]
        max_tuc: bool,
        #[arg(long, default_value_t = 1e-3)]
        tol: f64,
        /// Upper end of the bisection bracket.
        #[arg(long, default_value_t = 1.0)]
        tuc_hi: f64,
    },
    /// Run the mission and write the trace.
    Simulate {
        #[command(flatten)]
        common: Common,
        /// Run even when the design report is missing or not certified.
        #[arg(long)]
        force: bool,
    },
    /// Write ellipse projections around every reference of the last trace.
    ExportPlots(Common),
}

enum Failure {
    Config(String),
    Compute(String),
}

impl From<ConfigError> for Failure {
    fn from(e: ConfigError) -> Self {
        Failure::Config(e.to_string())
    }
}

fn compute<E: std::fmt::Display>(e: E) -> Failure {
    Failure::Compute(e.to_string())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Compute(m)) => {
            eprintln!("error: {m}");
            ExitCode::from(1)
        }
        Err(Failure::Config(m)) => {
            eprintln!("config error: {m}");
            ExitCode::from(2)
        }
    }
}

fn load(common: &Common, seed: Option<u64>) -> Result<(RunConfig, PathBuf), Failure> {
    let mut cfg = RunConfig::load(&common.config)?;
    if let Some(s) = seed {
        cfg.mission.seed = s;
    }
    let dir = common
        .out_dir
        .clone()
        .unwrap_or_else(|| cfg.output.dir.clone());
    Ok((cfg, dir))
}

fn build_design(cfg: &RunConfig) -> Result<Design, Failure> {
    design(&cfg.quadrotor, &cfg.clamp, &cfg.design).map_err(compute)
}

fn write_json<T: serde::Serialize>(path: &Path, value: &T) -> Result<(), Failure> {
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent).map_err(compute)?;
    }
    let f = fs::File::create(path).map_err(compute)?;
    serde_json::to_writer_pretty(BufWriter::new(f), value).map_err(compute)
}

fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T, Failure> {
    let text = fs::read_to_string(path)
        .map_err(|e| Failure::Compute(format!("cannot read {}: {e}", path.display())))?;
    serde_json::from_str(&text).map_err(|e| Failure::Compute(format!("{}: {e}", path.display())))
}

fn create(path: &Path) -> Result<BufWriter<fs::File>, Failure> {
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent).map_err(compute)?;
    }
    Ok(BufWriter::new(fs::File::create(path).map_err(compute)?))
}

fn run(cli: Cli) -> Result<(), Failure> {
    match cli.command {
        Command::Design(common) => {
            let (cfg, dir) = load(&common, cli.seed)?;
            let d = build_design(&cfg)?;
            let report = DesignReport::new(&cfg, &d, None);
            let path = dir.join(&cfg.output.design_report);
            write_json(&path, &report)?;
            println!(
                "design: abscissa {:.6}, log det P {:.6} -> {}",
                report.closed_loop_abscissa,
                report.log_det_p,
                path.display()
            );
        }
        Command::Verify {
            common,
            tuc,
            eps_sc,
            max_tuc,
            tol,
            tuc_hi,
        } => {
            let (mut cfg, dir) = load(&common, cli.seed)?;
            if let Some(e) = eps_sc {
                cfg.design.eps_sc = e;
            }
            if let Some(t) = tuc {
                cfg.design.t_uc = t;
            }
            cfg.validate()?;
            if max_tuc && !(tol > 0.0 && tuc_hi > tol) {
                return Err(Failure::Config("need 0 < tol < tuc_hi".into()));
            }
            let d = build_design(&cfg)?;
            let tuc_report = d
                .certify(cfg.design.t_uc, cfg.design.n_grid, &cfg.design)
                .map_err(compute)?;
            let bisection = if max_tuc {
                Some(match d.find_max_tuc(tol, tuc_hi, tol, cfg.design.n_grid) {
                    Ok(t) => report::Bisection {
                        max_tuc: Some(t),
                        note: None,
                    },
                    Err(rejuv_core::design::DesignError::Reach(
                        e @ rejuv_core::reach::ReachError::Bracket(_),
                    )) => report::Bisection {
                        max_tuc: None,
                        note: Some(e.to_string()),
                    },
                    Err(e) => return Err(compute(e)),
                })
            } else {
                None
            };
            let worst = tuc_report
                .worst_values
                .iter()
                .cloned()
                .fold(f64::NEG_INFINITY, f64::max);
            println!(
                "verify: T_UC={} eps_SC={} pass={} max V={:.6} margin={:.6}",
                tuc_report.t_uc, cfg.design.eps_sc, tuc_report.pass, worst, tuc_report.margin
            );
            if let Some(b) = &bisection {
                match (b.max_tuc, &b.note) {
                    (Some(t), _) => println!("verify: max certifiable T_UC ≈ {t}"),
                    (None, Some(n)) => println!("verify: no certifiable T_UC in range ({n})"),
                    _ => {}
                }
            }
            let report = DesignReport::new(
                &cfg,
                &d,
                Some(VerifySection {
                    report: tuc_report,
                    bisection,
                }),
            );
            write_json(&dir.join(&cfg.output.design_report), &report)?;
        }
        Command::Simulate { common, force } => {
            let (cfg, dir) = load(&common, cli.seed)?;
            let d = build_design(&cfg)?;
            let report_path = dir.join(&cfg.output.design_report);
            let certified = match read_json::<DesignReport>(&report_path) {
                Ok(r) => {
                    if !r.matches(&d) {
                        return Err(Failure::Compute(format!(
                            "{} does not match the configured design; rerun verify",
                            report_path.display()
                        )));
                    }
                    // A certificate only covers uncertain periods up to its own T_UC.
                    let t = cfg.timing();
                    r.verify
                        .map(|v| v.report.pass && v.report.t_uc >= t.t_sr + t.t_r - 1e-12)
                        .unwrap_or(false)
                }
                Err(_) => false,
            };
            if !certified && !force {
                return Err(Failure::Compute(format!(
                    "design is not certified (missing or failed verify section in {}); use --force to run anyway",
                    report_path.display()
                )));
            }
            if !certified {
                eprintln!("warning: simulating an uncertified design");
            }
            let scenario = cfg.scenario();
            let trace = run_scenario(&scenario, &d).map_err(compute)?;
            trace
                .write_csv(create(&dir.join(&cfg.output.trace_csv))?)
                .map_err(compute)?;
            trace
                .write_events_jsonl(create(&dir.join(&cfg.output.events))?)
                .map_err(compute)?;
            let summary = SimSummary::new(&trace, certified, scenario.seed);
            write_json(&dir.join(&cfg.output.summary), &summary)?;
            let o = &trace.outcome;
            println!(
                "simulate: completed={} at {:?}s, final V(goal)={:.3e}, {} records{}",
                o.completed,
                o.completion_time,
                o.final_v_goal,
                trace.records.len(),
                o.fault
                    .as_ref()
                    .map(|f| format!(", fault: {f}"))
                    .unwrap_or_default()
            );
        }
        Command::ExportPlots(common) => {
            let (cfg, dir) = load(&common, cli.seed)?;
            let report: DesignReport = read_json(&dir.join(&cfg.output.design_report))?;
            let summary: SimSummary = read_json(&dir.join(&cfg.output.summary))?;
            let e_c = Ellipsoid::new(
                rejuv_core::numerics::Vector::zeros(report.p.len()),
                report::from_rows(&report.p),
                1.0,
            )
            .map_err(compute)?;
            let path = dir.join(&cfg.output.ellipses);
            write_ellipse_csv(
                &e_c,
                report.eps_sc,
                report.eps_tc,
                &summary.references,
                cfg.output.ellipse_points,
                create(&path)?,
            )
            .map_err(compute)?;
            println!("export-plots: {}", path.display());
        }
    }
    Ok(())
}
