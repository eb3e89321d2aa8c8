use std::net::SocketAddr;
use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use gosl_cli::convert::{convert_sbm, convert_tabular, Features, TabularInput};
use gosl_core::active::{Strategy, Variant};
use gosl_core::config::RunConfig;
use gosl_core::report::summary_table;
use gosl_core::runner::{run_matrix, MatrixOptions};
use gosl_core::session::{Session, SessionSpec, SNAPSHOT_FILE};
use rand::Rng;

const CONFIG_HELP: &str = "\
Configuration is a JSON object. Keys and defaults:
  dataset                 registry name (cora, amazon_computer, amazon_cs, amazon_photo,
                          lastfm_asia, ...), {\"sbm\": {...}}, or {\"content\": .., \"cites\": ..}
  data_root               \"data\"; relative to the config file
  id_classes              registry division for named datasets; required otherwise
  seeds                   required, non-empty
  strategies              [\"lego\"]; also \"random\", \"uncertainty\"
  variants                [\"full\"]; also \"no_filter\", \"no_cluster\" (lego only)
  w_unknown               0.1; the weight of unknown nodes in the filter loss,
                          usually one of 0.001, 0.1, 0.2
  hidden                  32
  lr                      0.01
  dropout                 0.5
  weight_decay            5e-4 (first layer)
  epochs                  300
  m                       48 K-Medoids clusters
  kmedoids_max_iters      100
  budget                  {\"initial\": 5, \"per_round\": 2, \"total\": 15}, each times the
                          number of ID classes; e.g. {\"initial\": 4, \"per_round\": 2,
                          \"total\": 10} or {\"initial\": 6, \"per_round\": 2, \"total\": 20}
  normalize_features      true for file-backed datasets, false for SBM
  warm_start              false
  id_only_seeding         false
  precision_includes_initial  true
  evaluate_rounds         false

Presets: reproduce-cora, ablate-cora, sbm-smoke.";

#[derive(Parser)]
#[command(
    name = "gosl",
    version,
    about = "Label-efficient open-set node classification on graphs"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run an experiment matrix with the simulated oracle.
    #[command(after_long_help = CONFIG_HELP)]
    Run(MatrixArgs),
    /// Run the lego strategy with every ablation variant.
    #[command(after_long_help = CONFIG_HELP)]
    Ablate(MatrixArgs),
    /// Serve a human-annotation session over HTTP.
    #[command(after_long_help = CONFIG_HELP)]
    Annotate(AnnotateArgs),
    /// Convert a tabular dataset or an SBM spec into .content/.cites files.
    Convert(ConvertArgs),
}

#[derive(Args)]
struct Source {
    /// JSON configuration file.
    #[arg(long, conflicts_with = "preset")]
    config: Option<PathBuf>,
    /// Built-in configuration: reproduce-cora, ablate-cora or sbm-smoke.
    #[arg(long)]
    preset: Option<String>,
    /// Overrides data_root.
    #[arg(long)]
    data_root: Option<PathBuf>,
}

impl Source {
    fn load(&self) -> Result<Option<RunConfig>> {
        let mut config = match (&self.config, &self.preset) {
            (Some(path), _) => RunConfig::from_path(path)?,
            (None, Some(name)) => RunConfig::preset(name)?,
            (None, None) => return Ok(None),
        };
        if let Some(root) = &self.data_root {
            config.data_root = root.clone();
        }
        Ok(Some(config))
    }
}

#[derive(Args)]
struct MatrixArgs {
    #[command(flatten)]
    source: Source,
    /// Directory for effective_config.json, runs/, scores/ and summary.tsv.
    #[arg(long, default_value = "results")]
    out_dir: PathBuf,
    /// Parallel runs; 0 uses every core.
    #[arg(long, default_value_t = 0)]
    jobs: usize,
    /// Added to every seed.
    #[arg(long, default_value_t = 0)]
    seed_offset: u64,
}

#[derive(Args)]
struct AnnotateArgs {
    #[command(flatten)]
    source: Source,
    /// Session directory; created from the configuration's first run when empty.
    #[arg(long)]
    state: PathBuf,
    /// Listen address.
    #[arg(long, default_value = "127.0.0.1:8080")]
    bind: SocketAddr,
    /// Token required in the X-Session-Token header of label posts; random when omitted.
    #[arg(long)]
    session_token: Option<String>,
    /// Added to the seed of a new session.
    #[arg(long, default_value_t = 0)]
    seed_offset: u64,
}

#[derive(Args)]
struct ConvertArgs {
    /// CSV of source,target node ids.
    #[arg(long, required_unless_present = "sbm", requires = "labels")]
    edges: Option<PathBuf>,
    /// CSV of node,label.
    #[arg(long)]
    labels: Option<PathBuf>,
    /// CSV of node,f0,f1,...
    #[arg(long, conflicts_with = "feature_sets")]
    features: Option<PathBuf>,
    /// JSON object mapping node ids to lists of active feature indices.
    #[arg(long)]
    feature_sets: Option<PathBuf>,
    /// The CSV inputs have no header row.
    #[arg(long)]
    no_headers: bool,
    /// JSON SBM spec to generate instead of reading tables.
    #[arg(long, conflicts_with_all = ["edges", "labels", "features", "feature_sets"])]
    sbm: Option<PathBuf>,
    /// Output directory.
    #[arg(long)]
    out_dir: PathBuf,
    /// Base name of the output files.
    #[arg(long)]
    name: String,
}

fn run(args: MatrixArgs, ablate: bool) -> Result<()> {
    let Some(mut config) = args.source.load()? else {
        bail!("pass --config or --preset");
    };
    if ablate {
        config.strategies = vec![Strategy::Lego];
        config.variants = Variant::ALL.to_vec();
    }
    let options = MatrixOptions {
        out_dir: Some(args.out_dir.clone()),
        jobs: args.jobs,
        seed_offset: args.seed_offset,
    };
    let result = run_matrix(&config, &options)?;
    print!("{}", result.table);
    log::info!("wrote {}", args.out_dir.display());
    Ok(())
}

fn open_or_create(args: &AnnotateArgs) -> Result<()> {
    let has_session = args.state.join(SNAPSHOT_FILE).is_file();
    match (has_session, args.source.load()?) {
        (true, Some(_)) => log::warn!(
            "{} already holds a session; ignoring the configuration",
            args.state.display()
        ),
        (true, None) => {}
        (false, Some(config)) => {
            let spec = SessionSpec::from_run_config(&config, args.seed_offset)?;
            Session::create(&args.state, spec)?;
            log::info!("created a session in {}", args.state.display());
        }
        (false, None) => bail!(
            "no session found in {} (missing {SNAPSHOT_FILE}); pass --config or --preset to start one",
            args.state.display()
        ),
    }
    Ok(())
}

fn annotate(args: AnnotateArgs) -> Result<()> {
    open_or_create(&args)?;
    let token = args.session_token.clone().unwrap_or_else(|| {
        let bytes: [u8; 12] = rand::rng().random();
        bytes.iter().map(|b| format!("{b:02x}")).collect()
    });
    if args.session_token.is_none() {
        eprintln!("session token: {token}");
    }
    let runtime = tokio::runtime::Runtime::new().context("cannot start the async runtime")?;
    let summary = runtime.block_on(gosl_annotate::serve(&args.state, args.bind, &token))?;
    print!("{}", summary_table(std::slice::from_ref(&summary)));
    Ok(())
}

fn convert(args: ConvertArgs) -> Result<()> {
    let report = if let Some(spec) = &args.sbm {
        convert_sbm(spec, &args.out_dir, &args.name)?
    } else {
        let features = match (&args.features, &args.feature_sets) {
            (Some(p), None) => Features::Csv(p),
            (None, Some(p)) => Features::IndexJson(p),
            _ => bail!("pass exactly one of --features or --feature-sets"),
        };
        let input = TabularInput {
            edges: args.edges.as_deref().expect("required by clap"),
            labels: args.labels.as_deref().expect("required by clap"),
            features,
            has_headers: !args.no_headers,
        };
        convert_tabular(&input, &args.out_dir, &args.name)?
    };
    let out = |ext: &str| args.out_dir.join(format!("{}.{ext}", args.name));
    println!(
        "{} nodes, {} features, {} classes, {} edges ({} skipped) -> {}, {}",
        report.nodes,
        report.features,
        report.classes.len(),
        report.edges,
        report.skipped_edges,
        out("content").display(),
        out("cites").display()
    );
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Run(args) => run(args, false),
        Command::Ablate(args) => run(args, true),
        Command::Annotate(args) => annotate(args),
        Command::Convert(args) => convert(args),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
