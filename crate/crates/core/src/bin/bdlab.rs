use bdlab::cli::config::{self, ExperimentConfig};
use bdlab::cli::{exit_code, run};
use bdlab::poisson::TruncatedModel;
use clap::{Parser, Subcommand};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

#[derive(Parser)]
#[command(name = "bdlab", version, about = "Birth-death Dirichlet forms on mixed Poisson configurations")]
struct Cli {
    /// Override the seed given in the config.
    #[arg(long, global = true)]
    seed: Option<u64>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run the experiment described by a config file and write a JSON report.
    Run {
        config: PathBuf,
        /// Report path; otherwise the config's `output`, then
        /// $BDLAB_OUTPUT_DIR/<config stem>.json, then stdout.
        #[arg(long, short)]
        output: Option<PathBuf>,
    },
    /// Parse and resolve a config without running it.
    Validate { config: PathBuf },
    /// Write the truncated pmf table of a config's model as CSV.
    DumpPmf {
        config: PathBuf,
        #[arg(long)]
        csv: PathBuf,
    },
}

fn base_dir(path: &Path) -> PathBuf {
    path.parent().map(Path::to_path_buf).unwrap_or_default()
}

fn load(path: &Path, seed: Option<u64>) -> Result<ExperimentConfig, ExitCode> {
    match config::load(path) {
        Ok(mut c) => {
            if let Some(s) = seed {
                c.seed = s;
            }
            Ok(c)
        }
        Err(e) => {
            eprintln!("config error: {e}");
            Err(ExitCode::from(2))
        }
    }
}

fn fail(e: bdlab::Error) -> ExitCode {
    eprintln!("error: {e}");
    ExitCode::from(exit_code(&e) as u8)
}

fn report_path(cli_output: Option<PathBuf>, cfg: &ExperimentConfig, config_path: &Path) -> Option<PathBuf> {
    cli_output.or_else(|| cfg.output.as_ref().map(|p| base_dir(config_path).join(p))).or_else(|| {
        let dir = std::env::var_os("BDLAB_OUTPUT_DIR")?;
        let stem = config_path.file_stem()?;
        Some(Path::new(&dir).join(stem).with_extension("json"))
    })
}

fn same_file(a: &Path, b: &Path) -> bool {
    matches!((a.canonicalize(), b.canonicalize()), (Ok(x), Ok(y)) if x == y)
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match cli.command {
        Command::Validate { config } => {
            let cfg = match load(&config, cli.seed) {
                Ok(c) => c,
                Err(code) => return code,
            };
            match cfg.resolve(&base_dir(&config)) {
                Ok(_) => {
                    println!("ok");
                    ExitCode::SUCCESS
                }
                Err(e) => {
                    eprintln!("config error: {e}");
                    ExitCode::from(2)
                }
            }
        }
        Command::DumpPmf { config, csv } => {
            let cfg = match load(&config, cli.seed) {
                Ok(c) => c,
                Err(code) => return code,
            };
            let written = cfg
                .resolve(&base_dir(&config))
                .map_err(bdlab::Error::from)
                .and_then(|r| TruncatedModel::build(r.space, r.mixing, &r.policy))
                .and_then(|m| m.write_pmf_csv(std::fs::File::create(&csv)?));
            match written {
                Ok(()) => ExitCode::SUCCESS,
                Err(e) => fail(e),
            }
        }
        Command::Run { config, output } => {
            let cfg = match load(&config, cli.seed) {
                Ok(c) => c,
                Err(code) => return code,
            };
            let (report, pass) = match run::run(&cfg, &base_dir(&config)) {
                Ok(r) => r,
                Err(e) => return fail(e),
            };
            let text = serde_json::to_string_pretty(&report).expect("report serializes");
            match report_path(output, &cfg, &config) {
                Some(path) => {
                    if same_file(&path, &config) {
                        eprintln!("error: report path {} is the config file", path.display());
                        return ExitCode::from(2);
                    }
                    if let Err(e) = std::fs::write(&path, text + "\n") {
                        return fail(e.into());
                    }
                }
                None => println!("{text}"),
            }
            if pass {
                ExitCode::SUCCESS
            } else {
                ExitCode::from(1)
            }
        }
    }
}
