// Copyright 2026 The iontrap Authors
//
// Licensed under the Apache License, Version 2.0 (the "License");
// you may not use this file except in compliance with the License.
// You may obtain a copy of the License at
//
//    http://www.apache.org/licenses/LICENSE-2.0
//
// Unless required by applicable law or agreed to in writing, software
// distributed under the License is distributed on an "AS IS" BASIS,
// WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
// See the License for the specific language governing permissions and
// limitations under the License.

//! `iontrap` command line tool.

use std::path::PathBuf;
use std::process::ExitCode;
use std::time::Instant;

use clap::{Args, Parser, Subcommand};

use iontrap::config::ExperimentConfig;
use iontrap::experiments::{self, FitModel};
use iontrap::report::CommandOutput;
use iontrap::units::khz;

#[derive(Parser)]
#[command(
    name = "iontrap",
    version,
    about = "Dispersive sideband quantum logic in trapped-ion crystals"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct Common {
    /// TOML configuration (or a summary.json from an earlier run).
    #[arg(long, value_name = "FILE")]
    config: Option<PathBuf>,
    /// Master seed; overrides run.seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Shots per point; overrides run.shots.
    #[arg(long)]
    shots: Option<usize>,
    /// Worker threads (0 = one per core).
    #[arg(long, default_value_t = 0)]
    threads: usize,
    /// Output directory.
    #[arg(long, value_name = "DIR", default_value = "out")]
    out: PathBuf,
}

#[derive(Subcommand)]
enum Command {
    /// Equilibrium positions, axial mode frequencies and Lamb-Dicke factors.
    Modes {
        #[command(flatten)]
        common: Common,
        /// Number of ions; overrides crystal.ion_count.
        #[arg(long)]
        ions: Option<usize>,
    },
    /// Ramsey phase rate versus Fock state with the dispersive beam on.
    StarkScan {
        #[command(flatten)]
        common: Common,
    },
    /// Conditional-phase gate on the four basis inputs.
    TruthTable {
        #[command(flatten)]
        common: Common,
    },
    /// Blue-sideband flops after the gate, fitted per input.
    RabiFlop {
        #[command(flatten)]
        common: Common,
    },
    /// N-ion entangling sequence over a scan of the dispersive pulse length.
    Ghz {
        #[command(flatten)]
        common: Common,
    },
    /// Plain Ramsey versus spin echo under quasi-static detuning noise.
    Echo {
        #[command(flatten)]
        common: Common,
    },
    /// Fit a three-column CSV (x, y, stderr).
    Fit {
        #[command(flatten)]
        common: Common,
        #[arg(long, value_name = "FILE")]
        input: PathBuf,
        #[arg(long, value_enum)]
        model: FitModel,
        /// Calibrated W01 of the flop model, kHz.
        #[arg(long)]
        omega01_khz: Option<f64>,
    },
}

fn load(common: &Common, required: bool) -> iontrap::Result<ExperimentConfig> {
    let mut cfg = match &common.config {
        Some(p) => ExperimentConfig::load(p)?,
        None if required => {
            return Err(iontrap::Error::Config(
                "--config FILE is required for this command".into(),
            ));
        }
        None => ExperimentConfig::default(),
    };
    if let Some(s) = common.seed {
        cfg.run.seed = s;
    }
    if let Some(n) = common.shots {
        cfg.run.shots = n;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn run(cli: Cli) -> iontrap::Result<(CommandOutput, Option<ExperimentConfig>, Common)> {
    Ok(match cli.command {
        Command::Modes { common, ions } => {
            let mut cfg = load(&common, false)?;
            if let Some(n) = ions {
                cfg.crystal.ion_count = n;
            }
            cfg.validate()?;
            let m = experiments::modes_table(&cfg)?;
            print!("{}", m.positions_csv());
            print!("{}", m.modes_csv());
            (m.output(), Some(cfg), common)
        }
        Command::StarkScan { common } => {
            let cfg = load(&common, true)?;
            (
                experiments::stark_scan(&cfg, common.threads)?.output(),
                Some(cfg),
                common,
            )
        }
        Command::TruthTable { common } => {
            let cfg = load(&common, true)?;
            let r = experiments::truth_table_experiment(&cfg, common.threads)?;
            print!("{}", r.table.to_csv());
            (r.output(), Some(cfg), common)
        }
        Command::RabiFlop { common } => {
            let cfg = load(&common, true)?;
            (
                experiments::rabi_flop(&cfg, common.threads)?.output(),
                Some(cfg),
                common,
            )
        }
        Command::Ghz { common } => {
            let cfg = load(&common, true)?;
            (experiments::ghz(&cfg, common.threads)?.output(), Some(cfg), common)
        }
        Command::Echo { common } => {
            let cfg = load(&common, true)?;
            (
                experiments::spin_echo(&cfg, common.threads)?.output(),
                Some(cfg),
                common,
            )
        }
        Command::Fit {
            common,
            input,
            model,
            omega01_khz,
        } => {
            let out = experiments::fit_file(&input, model, omega01_khz.map(khz))?;
            (out, None, common)
        }
    })
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let start = Instant::now();
    match run(cli) {
        Ok((out, cfg, common)) => {
            for w in &out.warnings {
                eprintln!("warning: {w}");
            }
            match out.write(&common.out, cfg.as_ref(), common.threads, start.elapsed()) {
                Ok(files) => {
                    for f in files {
                        eprintln!("wrote {}", f.display());
                    }
                }
                Err(e) => {
                    eprintln!("error: {e}");
                    return ExitCode::from(1);
                }
            }
            if out.ok {
                ExitCode::SUCCESS
            } else {
                eprintln!("error: fit did not converge");
                ExitCode::from(2)
            }
        }
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(1)
        }
    }
}
