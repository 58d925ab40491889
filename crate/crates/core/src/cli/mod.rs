//! The `sam` command line: `train`, `ablate`, `sweep-delta`, `heatmap` and
//! `replay`. Exit status is 0 on success, 2 for usage errors, 3 for data or
//! format errors and 4 for numeric failures.

mod args;
mod artifacts;
mod commands;

use clap::Parser;

pub use args::{AblateArgs, Cli, Command, DataArgs, HeatmapArgs, ModelArgs, ModuleArgs, OptimArgs, ReplayArgs, SweepArgs, TrainArgs};
pub use artifacts::{heatmap_svg, line_chart_svg, xml_escape, InputDigest, RunManifest};
pub use commands::{
    heatmap_for, rewrite_out, Checkpoint, DataSource, FoldReport, Heatmap, ResolvedConfig, TrainReport, ABLATION_HEADER,
    SWEEP_HEADER,
};

/// Parses `argv` (program name first), runs the command and returns the
/// exit status. Diagnostics go to stderr.
pub fn run<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<String>,
{
    let argv: Vec<String> = argv.into_iter().map(Into::into).collect();
    let cli = match Cli::try_parse_from(&argv) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { 2 } else { 0 };
        }
    };
    let rest = &argv[1.min(argv.len())..];
    let result = match &cli.command {
        Command::Train(a) => commands::train(a, rest),
        Command::Ablate(a) => commands::ablate(a, rest),
        Command::SweepDelta(a) => commands::sweep(a, rest),
        Command::Heatmap(a) => commands::heatmap(a, rest),
        Command::Replay(a) => commands::replay(a),
    };
    match result {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}
