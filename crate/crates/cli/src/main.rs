use std::fs::{self, File};
use std::io::{BufReader, BufWriter};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use rbs_core::config::ScenarioConfig;
use rbs_core::harness::report::{render, single};
use rbs_core::harness::{
    evaluate_model, measure, parse_params, report_emit, run_preset, simulate_traced, Format, Model, Preset,
};
use rbs_core::sim::{read_csv, replay, write_csv, Trace};
use rbs_core::Error;

#[derive(Parser)]
#[command(name = "rbs", version, about = "Range-based sharding simulator")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Run one scenario, or a preset sweep over it.
    Run {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        preset: Option<Preset>,
        /// Directory for the report and, when recorded, the trace.
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long, default_value = "table")]
        format: Format,
    },
    /// Evaluate a closed-form model.
    Models {
        #[arg(long)]
        name: Model,
        /// Comma separated `k=v` pairs.
        #[arg(long, default_value = "")]
        params: String,
    },
    /// Re-execute a recorded trace and compare final balances.
    Replay {
        #[arg(long)]
        trace: PathBuf,
    },
}

const EXIT_CONFIG: u8 = 2;
const EXIT_INVARIANT: u8 = 3;

fn exit_for(err: &Error) -> ExitCode {
    match err {
        Error::Config(_) | Error::ModelDomain { .. } => ExitCode::from(EXIT_CONFIG),
        Error::Invariant(_) => ExitCode::from(EXIT_INVARIANT),
        _ => ExitCode::FAILURE,
    }
}

fn fail(err: &Error) -> ExitCode {
    eprintln!("error: {err}");
    exit_for(err)
}

fn load_config(path: &Path, seed: Option<u64>) -> Result<ScenarioConfig, Error> {
    let text = fs::read_to_string(path).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
    let mut cfg = ScenarioConfig::from_toml(&text)?;
    if let Some(s) = seed {
        cfg.seed = s;
    }
    Ok(cfg)
}

fn write_trace(dir: &Path, trace: &Trace) -> Result<PathBuf, Error> {
    fs::create_dir_all(dir)?;
    let path = dir.join("trace.csv");
    write_csv(trace.rows().unwrap_or_default(), BufWriter::new(File::create(&path)?))?;
    Ok(path)
}

fn emit(out: Option<&Path>, text: &str, write: impl FnOnce(&Path) -> Result<PathBuf, Error>) -> Result<(), Error> {
    print!("{text}");
    if let Some(dir) = out {
        let path = write(dir)?;
        eprintln!("wrote {}", path.display());
    }
    Ok(())
}

fn run(config: &Path, seed: Option<u64>, preset: Option<Preset>, out: Option<&Path>, format: Format) -> ExitCode {
    let cfg = match load_config(config, seed) {
        Ok(c) => c,
        Err(e) => return fail(&e),
    };
    if let Some(p) = preset {
        let report = match run_preset(p, &cfg) {
            Ok(r) => r,
            Err(e) => return fail(&e),
        };
        let text = render(format, &report.points, &report.summary);
        return match emit(out, &text, |d| report_emit(d, format, &report.points, &report.summary)) {
            Ok(()) => ExitCode::SUCCESS,
            Err(e) => fail(&e),
        };
    }

    // Always record, so a violation can be handed back for inspection.
    let keep_trace = cfg.record_trace;
    let traced = ScenarioConfig {
        record_trace: true,
        ..cfg.clone()
    };
    let sim = match simulate_traced(&traced) {
        Ok(o) => o,
        Err(f) => {
            eprintln!("error: {}", f.error);
            if let (Error::Invariant(_), Some(trace)) = (&f.error, &f.trace) {
                let dir = out.map(Path::to_path_buf).unwrap_or_else(std::env::temp_dir);
                match write_trace(&dir, trace) {
                    Ok(p) => eprintln!("trace: {}", p.display()),
                    Err(e) => eprintln!("could not write trace: {e}"),
                }
            }
            return exit_for(&f.error);
        }
    };
    let points = [single(measure(&cfg, &sim))];
    let none = Default::default();
    let text = render(format, &points, &none);
    let res = emit(out, &text, |d| {
        if keep_trace {
            let p = write_trace(d, &sim.trace)?;
            eprintln!("wrote {}", p.display());
        }
        report_emit(d, format, &points, &none)
    });
    match res {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => fail(&e),
    }
}

fn models(name: Model, params: &str) -> ExitCode {
    match parse_params(params).and_then(|p| evaluate_model(name, &p)) {
        Ok(v) => {
            println!("{} = {v}", name.name());
            ExitCode::SUCCESS
        }
        Err(e) => fail(&e),
    }
}

fn replay_file(path: &Path) -> ExitCode {
    let rows = match File::open(path)
        .map_err(Error::from)
        .and_then(|f| read_csv(BufReader::new(f)))
    {
        Ok(r) => r,
        Err(e) => return fail(&e),
    };
    match replay(&rows) {
        Ok(r) => {
            println!(
                "rows={} accounts={} entries={} burned={} digest={} digest_ok={} balances_ok={}",
                r.rows,
                r.accounts,
                r.entries,
                r.burned,
                r.digest.to_hex(),
                r.digest_ok,
                r.balances_ok
            );
            for m in &r.mismatches {
                println!("mismatch: {m}");
            }
            if r.digest_ok && r.balances_ok {
                ExitCode::SUCCESS
            } else {
                ExitCode::from(EXIT_INVARIANT)
            }
        }
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(EXIT_INVARIANT)
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match cli.cmd {
        Cmd::Run {
            config,
            seed,
            preset,
            out,
            format,
        } => run(&config, seed, preset, out.as_deref(), format),
        Cmd::Models { name, params } => models(name, &params),
        Cmd::Replay { trace } => replay_file(&trace),
    }
}
