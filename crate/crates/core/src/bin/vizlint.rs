use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand};
use serde_json::json;

use vizlint::bundled::bundled_tables;
use vizlint::data::{load_rows, load_table_dir, load_table_file, profile_table, DataTable};
use vizlint::eval::{
    render_report, run_eval, score, EndpointConfig, EvalRecord, HttpClient, MockClient,
    ModelClient, Phrasing,
};
use vizlint::genset::{
    generate_dataset, manifest_path, read_dataset, write_dataset, write_manifest, GenConfig,
    Manifest,
};
use vizlint::io::{to_json_lines, write_atomic};
use vizlint::par::Execution;
use vizlint::rules::{explain, lint, rule_catalog, ViolationSet};
use vizlint::spec::parse_document;

#[derive(Parser)]
#[command(
    name = "vizlint",
    version,
    about = "Chart design-rule linter, dataset generator and model evaluator"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Check one chart against the rule catalog. Exit 0 when clean, 1 on violations, 2 on error.
    Lint {
        #[arg(long)]
        spec: PathBuf,
        /// CSV or JSON table; defaults to inline values, then the bundled table named by the chart.
        #[arg(long)]
        table: Option<PathBuf>,
        /// Print clause-by-clause evidence for one rule to stderr.
        #[arg(long, value_name = "RULE")]
        explain: Option<String>,
    },
    /// Print per-column profiles of a table.
    Profile {
        #[arg(long)]
        table: PathBuf,
    },
    /// Print the rule catalog.
    Catalog,
    /// Synthesize a rule-annotated dataset.
    Generate {
        #[arg(long, default_value_t = 2000, value_parser = clap::value_parser!(u64).range(1..))]
        size: u64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 1e-3)]
        epsilon: f64,
        #[arg(long, default_value_t = 1e-4)]
        temp: f64,
        /// Directory of CSV/JSON tables; defaults to the bundled tables.
        #[arg(long)]
        tables: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        /// Keep every annotated candidate.
        #[arg(long)]
        no_filter: bool,
        #[arg(long)]
        sequential: bool,
    },
    /// Query a model endpoint on every instance of a dataset.
    Evaluate {
        #[arg(long)]
        dataset: PathBuf,
        #[arg(long, default_value = "http://localhost:8000/v1")]
        endpoint: String,
        #[arg(long, default_value = "default")]
        model: String,
        #[arg(long, default_value_t = 5, value_parser = clap::value_parser!(u32).range(1..))]
        k: u32,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value = "natural")]
        phrasing: Phrasing,
        /// Seconds per request.
        #[arg(long, default_value_t = 120.0)]
        timeout: f64,
        #[arg(long, default_value_t = 4, value_parser = clap::value_parser!(u64).range(1..))]
        parallel: u64,
        #[arg(long)]
        out: PathBuf,
        /// Built-in offline endpoint: oracle, empty, prose or noisy:<p>.
        #[arg(long)]
        mock: Option<String>,
        #[arg(long)]
        tables: Option<PathBuf>,
    },
    /// Score evaluation records against ground truth.
    Report {
        /// Evaluation output directory or records file.
        #[arg(long)]
        records: PathBuf,
        /// Dataset file, or a JSON object mapping instance ids to rule lists.
        #[arg(long)]
        ground_truth: PathBuf,
    },
}

fn echo_config(value: serde_json::Value) {
    eprintln!(
        "{}",
        serde_json::to_string(&value).expect("config serializes")
    );
}

fn load_tables(dir: Option<&Path>) -> Result<Vec<DataTable>> {
    match dir {
        Some(dir) => {
            let tables = load_table_dir(dir)
                .with_context(|| format!("loading tables from {}", dir.display()))?;
            if tables.is_empty() {
                bail!("no .csv or .json tables in {}", dir.display());
            }
            Ok(tables)
        }
        None => Ok(bundled_tables()),
    }
}

fn cmd_lint(spec_path: &Path, table_path: Option<&Path>, rule: Option<&str>) -> Result<ExitCode> {
    echo_config(
        json!({"command": "lint", "spec": spec_path, "table": table_path, "explain": rule}),
    );
    let text = fs::read_to_string(spec_path)
        .with_context(|| format!("reading {}", spec_path.display()))?;
    let doc = parse_document(&text).with_context(|| format!("parsing {}", spec_path.display()))?;
    let table = match (table_path, &doc.inline_values) {
        (Some(path), _) => {
            load_table_file(path).with_context(|| format!("loading {}", path.display()))?
        }
        (None, Some(rows)) => {
            load_rows(doc.spec.data_ref.clone(), rows).context("loading inline values")?
        }
        (None, None) => bundled_tables()
            .into_iter()
            .find(|t| t.name == doc.spec.data_ref)
            .with_context(|| {
                format!(
                    "no --table given and no bundled table `{}`",
                    doc.spec.data_ref
                )
            })?,
    };
    let violations = lint(&doc.spec, &table)?;
    println!("{}", violations);
    if let Some(rule) = rule {
        eprint!("{}", explain(&doc.spec, &table, rule)?);
    }
    Ok(if violations.is_empty() {
        ExitCode::SUCCESS
    } else {
        ExitCode::from(1)
    })
}

fn cmd_profile(path: &Path) -> Result<ExitCode> {
    echo_config(json!({"command": "profile", "table": path}));
    let table = load_table_file(path).with_context(|| format!("loading {}", path.display()))?;
    println!("{}", serde_json::to_string_pretty(&profile_table(&table))?);
    Ok(ExitCode::SUCCESS)
}

fn cmd_catalog() -> Result<ExitCode> {
    println!("{}", serde_json::to_string_pretty(rule_catalog())?);
    Ok(ExitCode::SUCCESS)
}

#[allow(clippy::too_many_arguments)]
fn cmd_generate(
    size: u64,
    seed: u64,
    epsilon: f64,
    temperature: f64,
    tables: Option<&Path>,
    out: &Path,
    no_filter: bool,
    sequential: bool,
) -> Result<ExitCode> {
    let config = GenConfig {
        target_size: size as usize,
        seed,
        epsilon,
        temperature,
        filter: !no_filter,
        execution: if sequential {
            Execution::Sequential
        } else {
            Execution::Parallel
        },
        ..GenConfig::default()
    };
    let tables = load_tables(tables)?;
    echo_config(json!({
        "command": "generate",
        "config": config,
        "tables": tables.iter().map(|t| &t.name).collect::<Vec<_>>(),
        "out": out,
    }));
    let dataset = generate_dataset(&config, &tables)?;
    write_dataset(out, &dataset.instances)?;
    let manifest = Manifest::new(&config, &tables, &dataset);
    write_manifest(&manifest_path(out), &manifest)?;
    eprintln!(
        "wrote {} instances to {} (kl {:.4} -> {:.4}, {} candidates)",
        dataset.instances.len(),
        out.display(),
        dataset.initial_kl,
        dataset.final_kl(),
        dataset.stats.candidates
    );
    Ok(ExitCode::SUCCESS)
}

fn cmd_evaluate(
    dataset_path: &Path,
    endpoint: EndpointConfig,
    phrasing: Phrasing,
    out: &Path,
    mock: Option<&str>,
    tables: Option<&Path>,
) -> Result<ExitCode> {
    echo_config(json!({
        "command": "evaluate",
        "dataset": dataset_path,
        "endpoint": endpoint,
        "phrasing": phrasing,
        "out": out,
        "mock": mock,
        "tables": tables,
    }));
    let dataset = read_dataset(dataset_path)?;
    let tables = load_tables(tables)?;
    let client: Box<dyn ModelClient> = match mock {
        Some(kind) => Box::new(MockClient::parse(kind, MockClient::truth_from(&dataset))?),
        None => Box::new(HttpClient::new(
            &endpoint.base_url,
            &endpoint.model,
            endpoint.timeout(),
        )),
    };
    fs::create_dir_all(out)?;
    let run_info =
        json!({"dataset": dataset_path, "endpoint": endpoint, "phrasing": phrasing, "mock": mock});
    write_atomic(
        &out.join("run.json"),
        serde_json::to_string_pretty(&run_info)?.as_bytes(),
    )?;
    let journal = out.join("records.jsonl");
    let run = run_eval(
        &dataset,
        &tables,
        client.as_ref(),
        &endpoint,
        phrasing,
        Some(&journal),
    )?;
    write_atomic(&journal, to_json_lines(&run.records).as_bytes())?;
    for warning in &run.warnings {
        log::warn!("{warning}");
        eprintln!("warning: {warning}");
    }
    let adherent = run.records.iter().filter(|r| r.adherent).count();
    eprintln!(
        "wrote {} records to {} ({} resumed, {} adherent)",
        run.records.len(),
        journal.display(),
        run.resumed,
        adherent
    );
    Ok(ExitCode::SUCCESS)
}

fn read_ground_truth(path: &Path) -> Result<BTreeMap<String, ViolationSet>> {
    let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    if let Ok(map) = serde_json::from_str::<BTreeMap<String, Vec<String>>>(&text) {
        return map
            .into_iter()
            .map(|(id, names)| Ok((id, ViolationSet::from_names(names)?)))
            .collect();
    }
    Ok(read_dataset(path)?
        .into_iter()
        .map(|i| (i.id, i.violations))
        .collect())
}

fn cmd_report(records: &Path, ground_truth: &Path) -> Result<ExitCode> {
    echo_config(json!({"command": "report", "records": records, "ground_truth": ground_truth}));
    let (file, dir) = if records.is_dir() {
        (records.join("records.jsonl"), records.to_path_buf())
    } else {
        let dir = records.parent().map(Path::to_path_buf).unwrap_or_default();
        (records.to_path_buf(), dir)
    };
    let records: Vec<EvalRecord> = vizlint::io::read_json_lines(&file)?;
    let metrics = score(&records, &read_ground_truth(ground_truth)?)?;
    write_atomic(
        &dir.join("metrics.json"),
        serde_json::to_string_pretty(&metrics)?.as_bytes(),
    )?;
    print!("{}", render_report(&metrics));
    Ok(ExitCode::SUCCESS)
}

fn run(cli: Cli) -> Result<ExitCode> {
    match cli.command {
        Command::Lint {
            spec,
            table,
            explain,
        } => cmd_lint(&spec, table.as_deref(), explain.as_deref()),
        Command::Profile { table } => cmd_profile(&table),
        Command::Catalog => cmd_catalog(),
        Command::Generate {
            size,
            seed,
            epsilon,
            temp,
            tables,
            out,
            no_filter,
            sequential,
        } => cmd_generate(
            size,
            seed,
            epsilon,
            temp,
            tables.as_deref(),
            &out,
            no_filter,
            sequential,
        ),
        Command::Evaluate {
            dataset,
            endpoint,
            model,
            k,
            seed,
            phrasing,
            timeout,
            parallel,
            out,
            mock,
            tables,
        } => {
            if !(timeout > 0.0 && timeout.is_finite()) {
                bail!("--timeout must be a positive number of seconds");
            }
            let endpoint = EndpointConfig {
                base_url: endpoint,
                model,
                timeout_secs: timeout,
                parallel: parallel as usize,
                k,
                seed,
            };
            cmd_evaluate(
                &dataset,
                endpoint,
                phrasing,
                &out,
                mock.as_deref(),
                tables.as_deref(),
            )
        }
        Command::Report {
            records,
            ground_truth,
        } => cmd_report(&records, &ground_truth),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    match run(Cli::parse()) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
    }
}
