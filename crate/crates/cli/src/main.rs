use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use tab2vox::harness::{self, RunConfig};

#[derive(Parser, Debug)]
#[command(
    name = "tab2vox",
    version,
    about = "Voxel-embedding architecture search for item demand forecasting"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
    /// JSON run configuration; flags below take precedence over it.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Panel CSV to use instead of a synthetic one.
    #[arg(long, global = true)]
    panel: Option<PathBuf>,
    /// Restrict the run to one cross-validation fold (0-4).
    #[arg(long, global = true)]
    fold: Option<usize>,
    /// Epochs for both the search and the retraining.
    #[arg(long, global = true)]
    epochs: Option<usize>,
    /// Model run-time budget for selection; `inf` removes it.
    #[arg(long, global = true, allow_negative_numbers = true)]
    budget_seconds: Option<f64>,
    #[arg(long, global = true, allow_negative_numbers = true)]
    w1: Option<f64>,
    #[arg(long, global = true, allow_negative_numbers = true)]
    w2: Option<f64>,
    #[arg(long, global = true)]
    max_groups: Option<usize>,
    /// Selection problem file for `select`.
    #[arg(long, global = true)]
    problem: Option<PathBuf>,
    /// Item whose voxel image `report` plots.
    #[arg(long, global = true)]
    item: Option<String>,
}

#[derive(Subcommand, Debug, Clone, Copy)]
enum Command {
    /// Write a synthetic panel and its planted structure.
    Synth,
    /// Validate and clean a panel, and write fold splits.
    Ingest,
    /// Search embedding and cell architecture per fold.
    Search,
    /// Retrain the derived architectures and forecast test items.
    Train,
    /// Run baselines and write result and metric tables.
    Evaluate,
    /// Group items and solve the model-selection problem.
    Select,
    /// Write plots and a summary from existing outputs.
    Report,
}

impl Cli {
    fn config(&self) -> tab2vox::Result<RunConfig> {
        let mut c = match &self.config {
            Some(p) => RunConfig::from_file(p)?,
            None => RunConfig::default(),
        };
        if let Some(s) = self.seed {
            c.seed = s;
        }
        if let Some(o) = &self.out {
            c.out = o.clone();
        }
        if let Some(p) = &self.panel {
            c.panel = Some(p.clone());
        }
        if let Some(f) = self.fold {
            c.folds = vec![f];
        }
        if let Some(e) = self.epochs {
            c.search.epochs = e;
            c.train.epochs = e;
        }
        if let Some(t) = self.budget_seconds {
            c.selection.budget_seconds = t.is_finite().then_some(t);
        }
        if let Some(w) = self.w1 {
            c.selection.w1 = Some(w);
        }
        if let Some(w) = self.w2 {
            c.selection.w2 = Some(w);
        }
        if let Some(g) = self.max_groups {
            c.selection.max_groups = g;
        }
        if let Some(p) = &self.problem {
            c.selection.problem = Some(p.clone());
        }
        if let Some(i) = &self.item {
            c.report.sample_item = Some(i.clone());
        }
        Ok(c)
    }
}

fn run(cli: &Cli) -> tab2vox::Result<Vec<PathBuf>> {
    let cfg = cli.config()?;
    match cli.command {
        Command::Synth => harness::stage_synth(&cfg),
        Command::Ingest => harness::stage_ingest(&cfg),
        Command::Search => harness::stage_search(&cfg),
        Command::Train => harness::stage_train(&cfg),
        Command::Evaluate => harness::stage_evaluate(&cfg),
        Command::Select => harness::stage_select(&cfg),
        Command::Report => harness::stage_report(&cfg),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(&cli) {
        Ok(files) => {
            for f in files {
                println!("{}", f.display());
            }
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("error: {}: {e}", e.name());
            ExitCode::from(1)
        }
    }
}
