//! `localegn`: data generation, training, evaluation, transfer and
//! layer-count recommendation.
//!
//! Exit codes: 0 success, 1 usage or configuration error, 2 data error,
//! 3 numeric failure.

mod config;

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, CommandFactory, Parser, Subcommand};

use localegn::checkpoint::Checkpoint;
use localegn::eval::{self, EvalReport, Evaluation, Persistence, Trained};
use localegn::graph::{load_graph, save_graph};
use localegn::locale::{self, Speeds};
use localegn::series::{load_signals, save_signals, signal_width};
use localegn::synthetic::{self, DiffusionSpec};
use localegn::train::{self, AdamConfig};
use localegn::{
    Aggregation, Dataset, DirectedGraph, Error, ErrorKind, ModelConfig, ModelVariant, Normalizer, Protocol,
    SignalSeries, TrainConfig,
};

#[derive(Parser, Debug)]
#[command(name = "localegn", version, about = "Localized graph-network traffic forecasting")]
struct Cli {
    /// Read defaults for the subcommand from the `[<subcommand>]` section
    /// of this file. Flags on the command line take precedence.
    #[arg(long, global = true, value_name = "FILE")]
    config: Option<PathBuf>,

    #[command(subcommand)]
    command: Cmd,
}

#[derive(Subcommand, Debug)]
enum Cmd {
    /// Generate a synthetic diffusion dataset (edge CSV and signal CSV).
    Gen(GenArgs),
    /// Train a model and write a checkpoint and training log.
    Train(TrainArgs),
    /// Evaluate checkpoints or a baseline on the test split.
    Eval(EvalArgs),
    /// Evaluate checkpoints zero-shot on another graph.
    Transfer(TransferArgs),
    /// Recommend the number of GN layers from propagation speeds.
    Klayers(KlayersArgs),
}

#[derive(Args, Debug)]
struct GenArgs {
    #[arg(long, default_value_t = 20)]
    nodes: usize,
    #[arg(long, default_value_t = 2016)]
    steps: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Probability of each ordered node pair being an edge.
    #[arg(long, default_value_t = 0.1)]
    edge_prob: f64,
    /// Diffusion coefficient, in [0, 0.5).
    #[arg(long, default_value_t = 0.3)]
    alpha: f64,
    /// Noise standard deviation.
    #[arg(long, default_value_t = 0.025)]
    sigma: f64,
    #[arg(long, default_value_t = 60.0)]
    base: f64,
    /// Per-step forcing amplitude.
    #[arg(long, default_value_t = 0.5)]
    amplitude: f64,
    /// Forcing period in steps.
    #[arg(long, default_value_t = 288.0)]
    period: f64,
    /// Interval length in minutes.
    #[arg(long, default_value_t = 5.0)]
    interval: f64,
    /// Free-flow speed written to every edge, km/h.
    #[arg(long, default_value_t = 90.0)]
    freeflow: f64,
    /// Shockwave speed written to every edge, km/h.
    #[arg(long, default_value_t = 20.0)]
    shockwave: f64,
    #[arg(long, default_value = "graph.csv")]
    graph_out: PathBuf,
    #[arg(long, default_value = "signals.csv")]
    signals_out: PathBuf,
}

#[derive(Args, Debug)]
struct DataArgs {
    /// Edge CSV: tail,head,distance_km[,freeflow_kmh,shockwave_kmh].
    #[arg(long)]
    graph: PathBuf,
    /// Signal CSV: one column per node, one row per interval.
    #[arg(long)]
    signals: PathBuf,
    /// Unit label for reports.
    #[arg(long, default_value = "units")]
    units: String,
}

#[derive(Args, Debug)]
struct TrainArgs {
    #[command(flatten)]
    data: DataArgs,
    #[arg(long, default_value = "localegn", value_parser = parse_variant)]
    variant: ModelVariant,
    #[arg(long, default_value_t = 12)]
    lookback: usize,
    #[arg(long, default_value_t = 64)]
    hidden: usize,
    #[arg(long, default_value_t = 1)]
    gn_layers: usize,
    /// Readings per GRU step (1 = scalar recurrence, lookback = whole window).
    #[arg(long, default_value_t = 1)]
    gru_input_width: usize,
    /// incoming or outgoing.
    #[arg(long, default_value = "incoming", value_parser = parse_aggregation)]
    aggregation: Aggregation,
    #[arg(long, default_value_t = 0.001)]
    lr: f64,
    #[arg(long, default_value_t = 0.0005)]
    weight_decay: f64,
    /// Apply weight decay directly to the weights instead of the gradient.
    #[arg(long)]
    decoupled_decay: bool,
    #[arg(long, default_value_t = 3000)]
    iterations: usize,
    #[arg(long, default_value_t = 16)]
    batch_size: usize,
    #[arg(long, default_value_t = 100)]
    val_every: usize,
    /// Fraction of training windows kept.
    #[arg(long, default_value_t = 0.2)]
    subsample: f64,
    /// Keep one random run of consecutive windows instead of a scattered
    /// random subset.
    #[arg(long)]
    contiguous_subsample: bool,
    #[arg(long, value_delimiter = ',', default_value = "1,3,6,9,12")]
    horizons: Vec<usize>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Independent runs with seeds seed, seed+1, ...; more than one also
    /// evaluates every run on the test split.
    #[arg(long, default_value_t = 1)]
    repeats: usize,
    /// Checkpoint path; with several repeats each run's file gets a
    /// `-seed<N>` suffix.
    #[arg(long, default_value = "checkpoint.json")]
    checkpoint: PathBuf,
    /// Training log CSV (iter,loss,val_rmse) of the first run.
    #[arg(long)]
    log: Option<PathBuf>,
    /// Write the test-split report CSV here.
    #[arg(long)]
    report: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct EvalArgs {
    #[command(flatten)]
    data: DataArgs,
    /// Checkpoint to evaluate; repeat for several runs.
    #[arg(long)]
    checkpoint: Vec<PathBuf>,
    /// Evaluate a baseline instead of a checkpoint.
    #[arg(long, value_parser = ["persistence"])]
    baseline: Option<String>,
    #[arg(long, value_delimiter = ',', default_value = "1,3,6,9,12")]
    horizons: Vec<usize>,
    /// Lookback used to place test windows for a baseline.
    #[arg(long, default_value_t = 12)]
    lookback: usize,
    #[arg(long)]
    report: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct TransferArgs {
    #[command(flatten)]
    data: DataArgs,
    /// Source checkpoint; repeat for several runs.
    #[arg(long, required = true)]
    checkpoint: Vec<PathBuf>,
    #[arg(long, value_delimiter = ',', default_value = "1,3,6,9,12")]
    horizons: Vec<usize>,
    /// Required variant; checkpoints with another variant are rejected.
    #[arg(long, value_parser = parse_variant)]
    variant: Option<ModelVariant>,
    /// Required hidden width.
    #[arg(long)]
    hidden: Option<usize>,
    /// Required lookback.
    #[arg(long)]
    lookback: Option<usize>,
    /// Required number of GN layers.
    #[arg(long)]
    gn_layers: Option<usize>,
    #[arg(long)]
    report: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct KlayersArgs {
    #[arg(long)]
    graph: PathBuf,
    /// Horizon in intervals.
    #[arg(long, default_value_t = 1)]
    steps: usize,
    /// Interval length in minutes.
    #[arg(long, default_value_t = 5.0)]
    interval: f64,
    /// Global free-flow speed, km/h; overrides per-edge speeds.
    #[arg(long)]
    freeflow: Option<f64>,
    /// Global shockwave speed, km/h; overrides per-edge speeds.
    #[arg(long)]
    shockwave: Option<f64>,
    /// Per-node CSV: node,forward_max_hop,backward_max_hop.
    #[arg(long)]
    out: Option<PathBuf>,
}

fn parse_variant(s: &str) -> Result<ModelVariant, String> {
    s.parse().map_err(|e: Error| e.to_string())
}

fn parse_aggregation(s: &str) -> Result<Aggregation, String> {
    s.parse().map_err(|e: Error| e.to_string())
}

fn load_data(d: &DataArgs) -> localegn::Result<(DirectedGraph, SignalSeries)> {
    let graph = load_graph(&d.graph, Some(signal_width(&d.signals)?))?;
    let series = load_signals(&d.signals, &graph)?;
    Ok((graph, series))
}

fn emit_report(report: &EvalReport, path: Option<&Path>) -> localegn::Result<()> {
    print!("{report}");
    if let Some(p) = path {
        report.save_csv(p)?;
    }
    Ok(())
}

fn seeded_path(path: &Path, seed: u64) -> PathBuf {
    let stem = path.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
    let name = match path.extension() {
        Some(ext) => format!("{stem}-seed{seed}.{}", ext.to_string_lossy()),
        None => format!("{stem}-seed{seed}"),
    };
    path.with_file_name(name)
}

fn cmd_gen(a: GenArgs) -> localegn::Result<()> {
    let spec = DiffusionSpec {
        nodes: a.nodes,
        edge_prob: a.edge_prob,
        alpha: a.alpha,
        sigma: a.sigma,
        steps: a.steps,
        seed: a.seed,
        base: a.base,
        amplitude: a.amplitude,
        period: a.period,
        interval_minutes: a.interval,
        freeflow_kmh: a.freeflow,
        shockwave_kmh: a.shockwave,
    };
    let (graph, series) = synthetic::generate(&spec)?;
    save_graph(&graph, &a.graph_out)?;
    save_signals(&series, &a.signals_out)?;
    println!(
        "wrote {} ({} nodes, {} edges) and {} ({} rows)",
        a.graph_out.display(),
        graph.num_nodes(),
        graph.num_edges(),
        a.signals_out.display(),
        series.len()
    );
    Ok(())
}

fn cmd_train(a: TrainArgs) -> localegn::Result<()> {
    let (graph, series) = load_data(&a.data)?;
    let model_cfg = ModelConfig {
        variant: a.variant,
        lookback: a.lookback,
        attr_dim: graph.attr_dim(),
        hidden: a.hidden,
        gn_layers: a.gn_layers,
        gru_input_width: a.gru_input_width,
        aggregation: a.aggregation,
    };
    let protocol = Protocol {
        lookback: a.lookback,
        horizons: a.horizons.clone(),
        subsample: a.subsample,
        contiguous: a.contiguous_subsample,
        ..Protocol::default()
    };
    let train_cfg = TrainConfig {
        adam: AdamConfig {
            learning_rate: a.lr,
            weight_decay: a.weight_decay,
            decoupled: a.decoupled_decay,
            ..AdamConfig::default()
        },
        iterations: a.iterations,
        batch_size: a.batch_size,
        val_every: a.val_every,
        seed: a.seed,
    };
    if a.repeats <= 1 {
        let data = Dataset::prepare(graph, series, protocol.clone(), a.seed)?;
        let (model, log) = train::train(model_cfg, &train_cfg, &data)?;
        let trained = Trained {
            model,
            normalizer: data.normalizer,
        };
        Checkpoint::new(&trained, train_cfg, protocol).save(&a.checkpoint)?;
        if let Some(p) = &a.log {
            log.save_csv(p)?;
        }
        println!(
            "best checkpoint at iteration {}; final validation RMSE {}",
            log.best_iter,
            log.best_val_rmse().expect("checkpoint rows carry validation RMSE")
        );
        if let Some(p) = &a.report {
            let report = EvalReport::from_runs(&[eval::evaluate_test(&trained, &data)?], a.data.units.as_str())?;
            emit_report(&report, Some(p))?;
        }
        println!("checkpoint written to {}", a.checkpoint.display());
        return Ok(());
    }
    let ex = eval::repeat_experiment(
        &graph,
        &series,
        &protocol,
        model_cfg,
        &train_cfg,
        a.repeats,
        false,
        &a.data.units,
    )?;
    for run in &ex.runs {
        let cfg = TrainConfig {
            seed: run.seed,
            ..train_cfg
        };
        let path = seeded_path(&a.checkpoint, run.seed);
        Checkpoint::new(&run.trained, cfg, protocol.clone()).save(&path)?;
        println!(
            "seed {}: best iteration {}, validation RMSE {}, checkpoint {}",
            run.seed,
            run.log.best_iter,
            run.log.best_val_rmse().expect("checkpoint rows carry validation RMSE"),
            path.display()
        );
    }
    if let Some(p) = &a.log {
        ex.runs[0].log.save_csv(p)?;
    }
    emit_report(&ex.report, a.report.as_deref())
}

fn load_checkpoints(paths: &[PathBuf], expected: impl Fn(&ModelConfig) -> ModelConfig) -> localegn::Result<Vec<(Trained, Protocol)>> {
    paths
        .iter()
        .map(|p| {
            if !p.exists() {
                return Err(Error::Config(format!("checkpoint {} does not exist", p.display())));
            }
            let ck = Checkpoint::load(p)?;
            let want = expected(&ck.manifest.model);
            let protocol = ck.manifest.protocol.clone();
            Ok((ck.into_trained(Some(&want))?, protocol))
        })
        .collect()
}

fn cmd_eval(a: EvalArgs) -> localegn::Result<()> {
    let (graph, series) = load_data(&a.data)?;
    let report = match (&a.baseline, a.checkpoint.is_empty()) {
        (Some(_), true) => {
            let protocol = Protocol {
                lookback: a.lookback,
                horizons: a.horizons.clone(),
                ..Protocol::default()
            };
            let identity = Normalizer { mean: 0.0, std: 1.0 };
            let data = Dataset::prepare_with(graph, series, protocol, 0, identity)?;
            EvalReport::from_runs(&[eval::evaluate_test(&Persistence, &data)?], a.data.units.as_str())?
        }
        (None, false) => {
            let runs = load_checkpoints(&a.checkpoint, |c| *c)?;
            let evals = runs
                .into_iter()
                .map(|(trained, protocol)| {
                    let protocol = Protocol {
                        horizons: a.horizons.clone(),
                        ..protocol
                    };
                    let data = Dataset::prepare_with(graph.clone(), series.clone(), protocol, 0, trained.normalizer)?;
                    eval::evaluate_test(&trained, &data)
                })
                .collect::<localegn::Result<Vec<Evaluation>>>()?;
            EvalReport::from_runs(&evals, a.data.units.as_str())?
        }
        _ => {
            return Err(Error::Config(
                "give either --checkpoint (one or more) or --baseline persistence".into(),
            ))
        }
    };
    emit_report(&report, a.report.as_deref())
}

fn cmd_transfer(a: TransferArgs) -> localegn::Result<()> {
    let (graph, series) = load_data(&a.data)?;
    let runs = load_checkpoints(&a.checkpoint, |c| ModelConfig {
        variant: a.variant.unwrap_or(c.variant),
        hidden: a.hidden.unwrap_or(c.hidden),
        lookback: a.lookback.unwrap_or(c.lookback),
        gn_layers: a.gn_layers.unwrap_or(c.gn_layers),
        ..*c
    })?;
    let evals = runs
        .into_iter()
        .map(|(trained, protocol)| {
            let protocol = Protocol {
                horizons: a.horizons.clone(),
                ..protocol
            };
            eval::transfer_evaluate(&trained, graph.clone(), series.clone(), protocol)
        })
        .collect::<localegn::Result<Vec<Evaluation>>>()?;
    emit_report(&EvalReport::from_runs(&evals, a.data.units.as_str())?, a.report.as_deref())
}

fn cmd_klayers(a: KlayersArgs) -> localegn::Result<()> {
    let graph = load_graph(&a.graph, None)?;
    let speeds = match (a.freeflow, a.shockwave) {
        (Some(f), Some(w)) => Speeds::Global {
            freeflow_kmh: f,
            shockwave_kmh: w,
        },
        (None, None) if graph.speeds().is_some() => Speeds::PerEdge,
        (None, None) => {
            return Err(Error::Config(
                "the graph has no speed columns; pass --freeflow and --shockwave (km/h)".into(),
            ))
        }
        _ => return Err(Error::Config("--freeflow and --shockwave must be given together".into())),
    };
    let r = locale::recommend_k(&graph, a.steps, a.interval, speeds)?;
    if let Some(p) = &a.out {
        r.write_csv(std::fs::File::create(p)?)?;
    }
    println!("recommended_k={}", r.k);
    Ok(())
}

fn exit_code(kind: ErrorKind) -> u8 {
    match kind {
        ErrorKind::Usage => 1,
        ErrorKind::Data => 2,
        ErrorKind::Numeric => 3,
    }
}

fn main() -> ExitCode {
    let args = match config::expand(std::env::args().collect(), &Cli::command()) {
        Ok(a) => a,
        Err(msg) => {
            eprintln!("error: {msg}");
            return ExitCode::from(1);
        }
    };
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 1 } else { 0 });
        }
    };
    let result = match cli.command {
        Cmd::Gen(a) => cmd_gen(a),
        Cmd::Train(a) => cmd_train(a),
        Cmd::Eval(a) => cmd_eval(a),
        Cmd::Transfer(a) => cmd_transfer(a),
        Cmd::Klayers(a) => cmd_klayers(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(e.kind()))
        }
    }
}
