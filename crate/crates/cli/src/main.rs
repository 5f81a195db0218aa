use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand};
use serde::{Deserialize, Serialize};

use misspred::bench::{
    build_summary, conform, hints_for, load_source, make_instance, plot_data, read_records, replication_seed,
    run_experiment, write_plot_data, write_records, DataSource, ExperimentConfig, FittedPipeline, Method,
    PipelineOptions,
};
use misspred::data::{read_csv, write_csv, ColumnHint, CsvOptions, MaskedMatrix};
use misspred::theory::verify_suite;

#[derive(Parser)]
#[command(name = "misspred", version, about = "Prediction with missing data: pipelines, benchmarks and theory checks")]
struct Cli {
    /// JSON configuration file
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Master seed (overrides the configuration file)
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output path: a directory for generate/benchmark/verify-theory, a file otherwise
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Worker threads (default: all cores)
    #[arg(long, global = true)]
    threads: Option<usize>,
    /// Token marking a missing cell in CSV files
    #[arg(long, global = true)]
    na_token: Option<String>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Draw one train/test instance from a data source configuration
    Generate,
    /// Fit one pipeline on a CSV file and write the model as JSON
    Train {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        target: String,
        /// e.g. itr:mean:best, adaptive:best, joint:linear, mia:forest
        #[arg(long, value_parser = parse_method)]
        method: Method,
        /// Test features, imputed jointly with training rows by v1 pipelines
        #[arg(long)]
        test: Option<PathBuf>,
        /// Columns to read as categorical
        #[arg(long, value_delimiter = ',')]
        categorical: Vec<String>,
    },
    /// Apply a saved model to a CSV file
    Predict {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        data: PathBuf,
    },
    /// Run an experiment configuration
    Benchmark,
    /// Run the exact theory checks
    VerifyTheory,
    /// Aggregate a results file into long-format figure data
    PlotData {
        #[arg(long)]
        results: PathBuf,
    },
}

#[derive(Serialize, Deserialize)]
struct ModelFile {
    format: String,
    target: String,
    pipeline: FittedPipeline,
}

const MODEL_FORMAT: &str = "misspred-model-1";

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let usage = e.use_stderr();
            let _ = e.print();
            return if usage { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    if let Some(n) = cli.threads {
        if n == 0 {
            eprintln!("error: --threads must be positive");
            return ExitCode::from(1);
        }
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(n).build_global() {
            eprintln!("error: {e}");
            return ExitCode::from(2);
        }
    }
    match run(&cli) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
    }
}

fn parse_method(s: &str) -> std::result::Result<Method, String> {
    s.parse().map_err(|e: misspred::Error| e.to_string())
}

fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    serde_json::from_str(&text).with_context(|| format!("parsing {}", path.display()))
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    fs::write(path, serde_json::to_string_pretty(value)? + "\n").with_context(|| format!("writing {}", path.display()))
}

fn out_dir(cli: &Cli) -> Result<PathBuf> {
    let dir = cli.out.clone().unwrap_or_else(|| PathBuf::from("."));
    fs::create_dir_all(&dir).with_context(|| format!("creating {}", dir.display()))?;
    Ok(dir)
}

fn require_config(cli: &Cli) -> Result<&Path> {
    match &cli.config {
        Some(p) => Ok(p),
        None => bail!("this subcommand needs --config"),
    }
}

fn run(cli: &Cli) -> Result<ExitCode> {
    let na = cli.na_token.clone();
    match &cli.command {
        Command::Generate => {
            let source: DataSource = read_json(require_config(cli)?)?;
            let na = na.unwrap_or_else(|| "NA".into());
            let seed = cli.seed.unwrap_or(0);
            let loaded = load_source(&source, &na)?;
            let inst = make_instance(&source, loaded.as_ref(), (None, None), seed)?;
            let dir = out_dir(cli)?;
            write_csv(dir.join("train.csv"), &inst.train, Some(("y", &inst.train_y)), &na)?;
            write_csv(dir.join("test.csv"), &inst.test, Some(("y", &inst.test_y)), &na)?;
            if let (Some(a), Some(b)) = (&inst.train_full, &inst.test_full) {
                write_csv(dir.join("train_full.csv"), a, Some(("y", &inst.train_y)), &na)?;
                write_csv(dir.join("test_full.csv"), b, Some(("y", &inst.test_y)), &na)?;
            }
            let manifest = serde_json::json!({
                "source": source,
                "seed": seed,
                "mechanism": inst.mechanism,
                "missing_param": inst.missing_param,
                "missing_value": inst.missing_value,
                "train_rows": inst.train.nrows(),
                "test_rows": inst.test.nrows(),
                "generator": inst.meta,
            });
            write_json(&dir.join("manifest.json"), &manifest)?;
            println!("wrote {}", dir.display());
        }
        Command::Train {
            data,
            target,
            method,
            test,
            categorical,
        } => {
            let opts: PipelineOptions = match &cli.config {
                Some(p) => read_json(p)?,
                None => PipelineOptions::default(),
            };
            let csv = CsvOptions {
                na_token: na.unwrap_or_else(|| "NA".into()),
                target: Some(target.clone()),
                hints: categorical.iter().map(|c| (c.clone(), ColumnHint::Categorical)).collect(),
            };
            let (x, y) = read_csv(data, &csv)?;
            let y = y.with_context(|| format!("target column '{target}' not found"))?;
            let seed = cli.seed.unwrap_or(0);
            let pipeline = match test {
                Some(t) => {
                    let te = read_features(t, &x.kinds().to_vec(), x.names(), &csv.na_token)?;
                    FittedPipeline::fit_with_test(method, &x, &y, &te, &opts, seed)?
                }
                None => FittedPipeline::fit(method, &x, &y, &opts, seed)?,
            };
            let out = cli.out.clone().unwrap_or_else(|| PathBuf::from("model.json"));
            let file = ModelFile {
                format: MODEL_FORMAT.into(),
                target: target.clone(),
                pipeline,
            };
            fs::write(&out, serde_json::to_string(&file)?).with_context(|| format!("writing {}", out.display()))?;
            println!("wrote {}", out.display());
        }
        Command::Predict { model, data } => {
            let file: ModelFile = read_json(model)?;
            if file.format != MODEL_FORMAT {
                bail!("unsupported model format '{}'", file.format);
            }
            let p = &file.pipeline;
            let x = read_features(data, &p.kinds, &p.names, &na.unwrap_or_else(|| "NA".into()))?;
            let pred = p.predict(&x)?;
            let mut text = String::from("prediction\n");
            for v in pred {
                text.push_str(&misspred::data::format_f64(v));
                text.push('\n');
            }
            match &cli.out {
                Some(out) => fs::write(out, text).with_context(|| format!("writing {}", out.display()))?,
                None => print!("{text}"),
            }
        }
        Command::Benchmark => {
            let mut config: ExperimentConfig = read_json(require_config(cli)?)?;
            if let Some(s) = cli.seed {
                config.seed = s;
            }
            if let Some(t) = na {
                config.na_token = t;
            }
            let start = std::time::Instant::now();
            let records = run_experiment(&config)?;
            let dir = out_dir(cli)?;
            write_records(&records, fs::File::create(dir.join("results.csv"))?)?;
            let summary = build_summary(&config.name, &config.methods, &records);
            write_json(&dir.join("summary.json"), &summary)?;
            let errors = records.iter().filter(|r| !r.is_ok()).count();
            let manifest = serde_json::json!({
                "config": config,
                "records": records.len(),
                "errors": errors,
                "threads": rayon::current_num_threads(),
                "wall_time_s": start.elapsed().as_secs_f64(),
                "version": env!("CARGO_PKG_VERSION"),
                "data_seeds": (0..config.replications)
                    .map(|r| replication_seed(config.seed, &config.dataset(), r))
                    .collect::<Vec<_>>(),
            });
            write_json(&dir.join("manifest.json"), &manifest)?;
            for row in &summary.rows {
                println!(
                    "{:<28} n={:<6} {}={:<6} {} = {:.4} (se {:.4}, {} ok, {} errors)",
                    row.method, row.n_train, row.missing_param, row.missing_value, row.metric, row.mean, row.se, row.n, row.n_errors
                );
            }
            println!("wrote {} records to {}", records.len(), dir.display());
        }
        Command::VerifyTheory => {
            let checks = verify_suite(cli.seed.unwrap_or(0));
            for c in &checks {
                println!("{} {}: {}", if c.passed { "PASS" } else { "FAIL" }, c.name, c.detail);
            }
            if let Some(dir) = &cli.out {
                fs::create_dir_all(dir)?;
                write_json(&dir.join("theory.json"), &checks)?;
            }
            let failed = checks.iter().filter(|c| !c.passed).count();
            println!("{} of {} checks passed", checks.len() - failed, checks.len());
            if failed > 0 {
                return Ok(ExitCode::from(2));
            }
        }
        Command::PlotData { results } => {
            let file = fs::File::open(results).with_context(|| format!("opening {}", results.display()))?;
            let rows = plot_data(&read_records(file)?);
            match &cli.out {
                Some(out) => write_plot_data(&rows, fs::File::create(out)?)?,
                None => write_plot_data(&rows, std::io::stdout())?,
            }
        }
    }
    Ok(ExitCode::SUCCESS)
}

/// Reads the model's feature columns from `path`, by name, in the model's
/// column order and level coding. Other columns (such as the target) are ignored.
fn read_features(path: &Path, kinds: &[misspred::ColumnKind], names: &[String], na: &str) -> Result<MaskedMatrix> {
    let opts = CsvOptions {
        na_token: na.into(),
        target: None,
        hints: hints_for(kinds, names),
    };
    let (x, _) = read_csv(path, &opts)?;
    let cols = names
        .iter()
        .map(|n| x.names().iter().position(|m| m == n).with_context(|| format!("column '{n}' missing from {}", path.display())))
        .collect::<Result<Vec<_>>>()?;
    Ok(conform(&x.select_columns(&cols), kinds)?)
}
