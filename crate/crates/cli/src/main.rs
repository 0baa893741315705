use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use clap::{Parser, Subcommand};
use tcscore_cli::commands::{self, Arch};
use tcscore_cli::RunConfig;

#[derive(Parser)]
#[command(name = "tcscore", version, about = "PD-L1 tumor cell scoring pipeline")]
struct Cli {
    /// JSON run configuration; unknown keys are rejected.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Overrides every seed in the configuration.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Worker threads (1 guarantees bitwise reproducibility).
    #[arg(long, global = true)]
    threads: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic cohort: slides, annotations, ground truth, scores.
    Synth {
        #[arg(long)]
        out: PathBuf,
        /// Number of slides (overrides the config).
        #[arg(long)]
        slides: Option<usize>,
    },
    /// Train one architecture on a cohort's training split.
    Train {
        #[arg(long)]
        data: PathBuf,
        #[arg(long, value_parser = parse_arch)]
        arch: Arch,
        #[arg(long)]
        out: PathBuf,
        /// Training iterations (overrides the config).
        #[arg(long)]
        iterations: Option<u64>,
    },
    /// Tissue mask, sliding-window class map and overlay per slide.
    Predict {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(required = true)]
        slides: Vec<PathBuf>,
    },
    /// TC score per class map.
    Score {
        #[arg(long)]
        out: PathBuf,
        #[arg(required = true)]
        maps: Vec<PathBuf>,
    },
    /// Pairwise and leave-one-out concordance of score-table columns.
    Concord {
        /// Score table (slide_id plus one column per scorer).
        #[arg(long)]
        scores: PathBuf,
        /// Scores CSV from `score`, added to the table as a column.
        #[arg(long)]
        candidate: Option<PathBuf>,
        #[arg(long, default_value = "TC_cnn")]
        name: String,
        /// Keep only comparisons against this column.
        #[arg(long)]
        reference: Option<String>,
        /// Columns to compare (default: all).
        #[arg(long, value_delimiter = ',')]
        columns: Option<Vec<String>>,
        #[arg(long)]
        cutoff: Option<f64>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Concordance as slides with high rater variability are excluded.
    Curves {
        #[arg(long)]
        scores: PathBuf,
        #[arg(long)]
        candidate: Option<PathBuf>,
        #[arg(long, default_value = "TC_cnn")]
        name: String,
        #[arg(long, value_delimiter = ',')]
        thresholds: Option<Vec<f64>>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train all three architectures on identical patches and compare them
    /// on the held-out slides.
    Compare {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
}

fn parse_arch(s: &str) -> Result<Arch> {
    s.parse()
}

fn load_table(scores: &Path, candidate: Option<&Path>, name: &str) -> Result<tcscore::stats::ScoreTable> {
    let table = commands::read_table(scores)?;
    match candidate {
        Some(c) => commands::merge_scores(&table, c, name),
        None => Ok(table),
    }
}

fn fmt3(v: Option<f64>) -> String {
    v.map_or_else(|| "undefined".into(), |v| format!("{v:.3}"))
}

fn run(cli: Cli) -> Result<()> {
    if let Some(n) = cli.threads {
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .context("configuring the worker pool")?;
    }
    let mut cfg = match &cli.config {
        Some(path) => RunConfig::load(path)?,
        None => RunConfig::default(),
    };
    if let Some(seed) = cli.seed {
        cfg = cfg.with_seed(seed);
    }
    match cli.command {
        Command::Synth { out, slides } => {
            if let Some(n) = slides {
                cfg.cohort.slides = n;
            }
            commands::synth(&cfg, &out)
        }
        Command::Train {
            data,
            arch,
            out,
            iterations,
        } => {
            if let Some(n) = iterations {
                cfg.fs_vgg.iterations = n;
                cfg.ae_ssl.iterations = n;
                cfg.acgan.iterations = n;
            }
            let s = commands::train(&cfg, &data, arch, &out)?;
            println!("{}", serde_json::to_string(&s)?);
            Ok(())
        }
        Command::Predict { checkpoint, out, slides } => {
            cfg.write(&out)?;
            for (id, s) in commands::predict_slides(&cfg, &checkpoint, &slides, &out)? {
                match s {
                    Some(s) => println!("{id}\t{:.3}", s.value),
                    None => println!("{id}\tno tumor"),
                }
            }
            Ok(())
        }
        Command::Score { out, maps } => {
            for (id, s) in commands::score(&maps, &out)? {
                println!("{id}\t{:.3}", s.value);
            }
            Ok(())
        }
        Command::Concord {
            scores,
            candidate,
            name,
            reference,
            columns,
            cutoff,
            out,
        } => {
            if let Some(c) = cutoff {
                cfg.stats.cutoff = c;
            }
            let table = load_table(&scores, candidate.as_deref(), &name)?;
            cfg.write(&out)?;
            let report = commands::concord(&cfg, &table, columns.as_deref(), reference.as_deref(), &out)?;
            for r in &report.pairwise {
                println!(
                    "{} vs {}: Lcc {:?} Pcc {:?} MAE {:?} OPA {:.3}",
                    r.candidate, r.reference, r.lcc, r.pcc, r.mae, r.opa
                );
            }
            Ok(())
        }
        Command::Curves {
            scores,
            candidate,
            name,
            thresholds,
            out,
        } => {
            if let Some(t) = thresholds {
                cfg.stats.thresholds = t;
            }
            let table = load_table(&scores, candidate.as_deref(), &name)?;
            if let Some(dir) = out.parent().filter(|d| !d.as_os_str().is_empty()) {
                cfg.write(dir)?;
            }
            commands::curves(&cfg, &table, &out)?;
            Ok(())
        }
        Command::Compare { data, out } => {
            for b in commands::compare(&cfg, &data, &out)? {
                println!("{}: Lcc {} Pcc {} MAE {:.2} (n={})", b.model, fmt3(b.lcc), fmt3(b.pcc), b.mae, b.n);
            }
            Ok(())
        }
    }
}

fn main() {
    env_logger::Builder::from_env(env_logger::Env::new().filter_or("TC_SCORER_LOG", "info")).init();
    if let Err(e) = run(Cli::parse()) {
        eprintln!("error: {e:#}");
        std::process::exit(1);
    }
}
