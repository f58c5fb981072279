use std::path::PathBuf;
use std::process::ExitCode;

use clap::Parser;
use crossbar_bp::experiment::{self, Cli, DATA_ENV};

fn main() -> ExitCode {
    let cli = Cli::parse();
    let manifest = match experiment::parse_config(&cli, std::env::var_os(DATA_ENV).map(PathBuf::from)) {
        Ok(m) => m,
        Err(e) => {
            eprintln!("error: {e}");
            return ExitCode::from(2);
        }
    };
    let cells = manifest.cells();
    eprintln!(
        "crossbar-bp: preset={} cells={} jobs={} out={}",
        manifest.preset.map_or("none", |p| p.as_str()),
        cells.len(),
        manifest.jobs,
        manifest.out.display()
    );
    eprintln!(
        "config: {}",
        serde_json::to_string(&manifest.config).expect("config serializes")
    );
    match experiment::run_grid(&manifest) {
        Ok(report) => {
            for cell in &report.cells {
                match (&cell.error, cell.mean_final_window, cell.transfer_mean) {
                    (Some(err), _, _) => eprintln!("FAILED {}: {err}", cell.name),
                    (None, Some(mean), Some(transfer)) => {
                        println!("{}: final-window mean {mean:.4}, transfer mean {transfer:.4}", cell.name)
                    }
                    (None, Some(mean), None) => println!("{}: final-window mean {mean:.4}", cell.name),
                    (None, None, _) => println!("{}: done", cell.name),
                }
            }
            if report.all_ok() {
                ExitCode::SUCCESS
            } else {
                ExitCode::from(1)
            }
        }
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(1)
        }
    }
}
