mod config;
mod manifest;
mod svg;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::Parser;
use serde_json::json;

use rgflow::analysis::{exponent_run, magnetization_run, HamiltonianSource, MagnetizationCurve, MagnetizationPoint};
use rgflow::basis::{bare_hamiltonian, BasisSet};
use rgflow::flow::{run_flow, tc_scan, FlowTable};
use rgflow::lattice::Boundary;
use rgflow::oracle::fixtures;

use config::{Cli, RunConfig};
use manifest::Run;
use svg::{line_plot, Series};

pub const VERSION: &str = concat!(env!("CARGO_PKG_VERSION"), "+", env!("RGFLOW_GIT_DESCRIBE"));

#[derive(Debug)]
pub enum CliError {
    Usage(String),
    Validation(String),
    Numerical(String),
}

impl std::fmt::Display for CliError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            CliError::Usage(m) => write!(f, "usage error: {m}"),
            CliError::Validation(m) => write!(f, "invalid input: {m}"),
            CliError::Numerical(m) => write!(f, "numerical failure: {m}"),
        }
    }
}

impl CliError {
    fn exit_code(&self) -> u8 {
        match self {
            CliError::Usage(_) => 2,
            CliError::Validation(_) => 3,
            CliError::Numerical(_) => 4,
        }
    }
}

impl From<rgflow::Error> for CliError {
    fn from(e: rgflow::Error) -> Self {
        match e {
            rgflow::Error::Numerical(_) => CliError::Numerical(e.to_string()),
            _ => CliError::Validation(e.to_string()),
        }
    }
}

fn basis(cfg: &RunConfig) -> Result<BasisSet, CliError> {
    cfg.basis.parse::<BasisSet>().map_err(CliError::from)
}

fn csv_bytes(write: impl FnOnce(&mut Vec<u8>) -> rgflow::Result<()>) -> Result<Vec<u8>, CliError> {
    let mut buf = Vec::new();
    write(&mut buf)?;
    Ok(buf)
}

fn json_bytes<T: serde::Serialize>(value: &T) -> Vec<u8> {
    let mut text = serde_json::to_string_pretty(value).expect("results serialize");
    text.push('\n');
    text.into_bytes()
}

fn cmd_flow(cfg: &RunConfig, run: &mut Run) -> Result<(), CliError> {
    let basis = basis(cfg)?;
    rgflow::flow::check_flow_size(cfg.l0, cfg.iters)?;
    let mut text = Vec::new();
    let mut summary = Vec::new();
    let mut series = Vec::new();
    for (i, &t) in cfg.temperatures.iter().enumerate() {
        let table = run_flow(t, &basis, cfg.iters, cfg.l0, &cfg.chain)?;
        let mut buf = csv_bytes(|b| table.write_csv(b))?;
        if i > 0 {
            // one header for the whole file
            let body = buf.iter().position(|&c| c == b'\n').map_or(0, |p| p + 1);
            buf.drain(..body);
        }
        text.extend(buf);
        let last = table.rows.last().expect("flow has rows");
        summary.push(json!({"T": t, "final_M2": last.m2, "final_M2_stderr": last.m2_stderr}));
        series.push(Series {
            label: format!("T={t}"),
            points: table.rows.iter().map(|r| (r.iteration as f64, r.m2)).collect(),
            dashed: false,
        });
    }
    run.output("flow.csv", &text)?;
    run.results = json!({ "flows": summary });
    if cfg.svg {
        run.plot("flow.svg", line_plot("Second moment along the flow", "iteration", "M2", &series))?;
    }
    Ok(())
}

fn cmd_tc_scan(cfg: &RunConfig, run: &mut Run) -> Result<(), CliError> {
    let basis = basis(cfg)?;
    let result = tc_scan(&cfg.temperatures, &basis, cfg.iters, cfg.l0, &cfg.chain)?;
    run.output("scan.csv", &csv_bytes(|b| result.write_csv(b))?)?;
    let bracket = json!({
        "bracket": result.bracket.map(|(a, b)| [a, b]),
        "midpoint": result.midpoint(),
        "warning": result.warning,
        "trends": result.points.iter().map(|p| json!({"T": p.temperature, "trend": p.trend})).collect::<Vec<_>>(),
    });
    run.output("bracket.json", &json_bytes(&bracket))?;
    if let Some(w) = &result.warning {
        eprintln!("warning: {w}");
    }
    run.results = bracket;
    if cfg.svg {
        let series: Vec<Series> = result
            .points
            .iter()
            .map(|p| Series {
                label: format!("T={}", p.temperature),
                points: p.m2.iter().enumerate().map(|(i, &m)| ((i + 1) as f64, m)).collect(),
                dashed: p.trend == rgflow::flow::Trend::Decaying,
            })
            .collect();
        run.plot("scan.svg", line_plot("Second moment trajectories", "iteration", "M2", &series))?;
    }
    Ok(())
}

/// `bare`, or `FILE:rowN` naming row N of each flow in a flow CSV.
fn parse_source(source: &str) -> Result<Option<(PathBuf, usize)>, CliError> {
    if source == "bare" {
        return Ok(None);
    }
    let bad = || CliError::Usage(format!("--source must be `bare` or `FILE:rowN`, got {source:?}"));
    let (file, row) = source.rsplit_once(':').ok_or_else(bad)?;
    let n = row.strip_prefix("row").and_then(|n| n.parse::<usize>().ok()).filter(|&n| n >= 1).ok_or_else(bad)?;
    Ok(Some((PathBuf::from(file), n)))
}

fn cmd_magnetization(cfg: &RunConfig, run: &mut Run) -> Result<(), CliError> {
    let boundary: Boundary = cfg.boundary.parse().map_err(CliError::from)?;
    let basis = basis(cfg)?;
    let (source, hamiltonians) = match parse_source(&cfg.source)? {
        None => {
            if cfg.temperatures.is_empty() {
                return Err(CliError::Usage("a bare magnetization curve needs --T".into()));
            }
            let hs = cfg.temperatures.iter().map(|&t| Ok((t, bare_hamiltonian(t, &basis)?))).collect::<Result<Vec<_>, CliError>>()?;
            (HamiltonianSource::Bare, hs)
        }
        Some((file, n)) => {
            let text = std::fs::read_to_string(&file).map_err(|e| CliError::Validation(format!("cannot read {}: {e}", file.display())))?;
            let flows = FlowTable::read_csv_all(&text, &basis)?;
            let hs = flows
                .iter()
                .filter(|f| cfg.temperatures.is_empty() || cfg.temperatures.iter().any(|t| (t - f.temperature).abs() < 1e-9))
                .map(|f| Ok((f.temperature, f.coefficients(n)?)))
                .collect::<Result<Vec<_>, CliError>>()?;
            if hs.is_empty() {
                return Err(CliError::Validation(format!("{} has no flow at the requested temperatures", file.display())));
            }
            (HamiltonianSource::Renormalized { iteration: n }, hs)
        }
    };
    let mut points = Vec::new();
    for (t, alpha) in &hamiltonians {
        let m = magnetization_run(alpha, cfg.size, boundary, &cfg.chain)?;
        points.push(MagnetizationPoint { temperature: *t, m: m.mean, stderr: m.stderr });
    }
    let curve = MagnetizationCurve { size: cfg.size, source, points };
    run.output("magnetization.csv", &csv_bytes(|b| curve.write_csv(b))?)?;
    run.results = serde_json::to_value(&curve).expect("curve serializes");
    if cfg.svg {
        let measured = Series { label: "m".into(), points: curve.points.iter().map(|p| (p.temperature, p.m)).collect(), dashed: false };
        let lo = curve.points.iter().map(|p| p.temperature).fold(f64::INFINITY, f64::min);
        let hi = curve.points.iter().map(|p| p.temperature).fold(f64::NEG_INFINITY, f64::max);
        let exact = Series {
            label: "exact".into(),
            points: (0..=100).map(|i| lo + (hi - lo) * i as f64 / 100.0).map(|t| (t, rgflow::analysis::onsager_magnetization(t))).collect(),
            dashed: true,
        };
        run.plot("magnetization.svg", line_plot("Magnetization", "T", "m", &[measured, exact]))?;
    }
    Ok(())
}

fn cmd_exponents(cfg: &RunConfig, run: &mut Run) -> Result<(), CliError> {
    let basis = basis(cfg)?;
    let fine = match cfg.levels.as_slice() {
        [a, b] if *a >= 1 && *b == a + 1 => *a,
        other => return Err(CliError::Validation(format!("--levels needs two adjacent levels like 2,3, got {other:?}"))),
    };
    let t = cfg.temperatures[0];
    let r = exponent_run(t, cfg.l0, fine, &basis, &cfg.chain)?;
    if let Some(w) = &r.warning {
        eprintln!("warning: {w}");
    }
    let out = json!({"T": t, "L0": cfg.l0, "levels": cfg.levels, "result": r});
    run.output("exponents.json", &json_bytes(&out))?;
    run.results = json!({"nu": r.nu, "nu_stderr": r.nu_stderr, "thermal_eigenvalue": r.thermal_eigenvalue, "thermal_stderr": r.thermal_stderr});
    Ok(())
}

fn cmd_oracle(cfg: &RunConfig, run: &mut Run) -> Result<(), CliError> {
    let basis = basis(cfg)?;
    let fx = fixtures(cfg.size, cfg.temperatures[0], &basis)?;
    let summary = json!({"log_z": fx.log_z, "distance": fx.distance, "residual_norm": fx.fit.residual_norm});
    if cfg.emit_fixtures {
        run.output("fixtures.json", &json_bytes(&fx))?;
    } else {
        println!("{}", serde_json::to_string_pretty(&summary).expect("summary serializes"));
    }
    run.results = summary;
    Ok(())
}

fn execute(cfg: &RunConfig) -> Result<(), CliError> {
    if let Some(n) = cfg.threads {
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(|e| CliError::Validation(format!("thread pool: {e}")))?;
    }
    let mut run = Run::start(cfg)?;
    let outcome = match cfg.command.as_str() {
        "flow" => cmd_flow(cfg, &mut run),
        "tc-scan" => cmd_tc_scan(cfg, &mut run),
        "magnetization" => cmd_magnetization(cfg, &mut run),
        "exponents" => cmd_exponents(cfg, &mut run),
        "oracle" => cmd_oracle(cfg, &mut run),
        other => Err(CliError::Usage(format!("unknown command {other}"))),
    };
    match outcome {
        Ok(()) => run.finish(),
        Err(e) => {
            run.fail(&e);
            Err(e)
        }
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 2 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match RunConfig::resolve(cli).and_then(|cfg| execute(&cfg)) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("rgflow: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}
