//! `fedsilo`: manage federations, partition data, serve endpoints and run
//! federated experiments.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::sync::Arc;
use std::time::Duration;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};

use fedsilo_core::codec::encode_state;
use fedsilo_core::comm::{FsStore, ObjectStore, TcpEndpointLink, TcpServer};
use fedsilo_core::federation::{
    add_member, create_federation, register_endpoint, run_endpoint, DataloaderRegistry, EndpointConfig,
    EndpointRuntime, FederationManifest,
};
use fedsilo_core::orchestrator::{
    endpoint_runtime, kinds, read_run_log, render_table, run_baselines, run_over_tcp, simulate, summarize_log,
    ExperimentConfig, RunLog, RunReport,
};
use fedsilo_core::partition::{dual_dirichlet_partition, partition_report, PartitionConfig};

#[derive(Debug, Parser)]
#[command(name = "fedsilo", version, about = "Cross-silo federated fine-tuning launcher")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Create and edit federation manifests.
    #[command(subcommand)]
    Federation(FederationCmd),
    /// Split a label file across clients with a dual-Dirichlet draw.
    Partition(PartitionArgs),
    /// Serve tasks for one endpoint until the server disconnects.
    Endpoint(EndpointArgs),
    /// Run a federated experiment.
    Run(RunArgs),
    /// Train the pooled-data and per-client baselines for an experiment.
    Baselines(BaselinesArgs),
    /// Print a summary table for one or more run logs.
    Report(ReportArgs),
}

#[derive(Debug, Subcommand)]
enum FederationCmd {
    /// Start a new federation owned by `--owner`.
    Create {
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long)]
        owner: String,
        #[arg(long)]
        email: String,
    },
    AddMember {
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long)]
        identity: String,
        #[arg(long)]
        email: String,
    },
    /// Register an endpoint owned by a member and print its id.
    RegisterEndpoint {
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long)]
        owner: String,
        #[arg(long)]
        dataloader: String,
        #[arg(long, default_value = "")]
        address: String,
    },
}

#[derive(Debug, Args)]
struct PartitionArgs {
    /// Integer labels, as a JSON array or separated by whitespace or commas.
    #[arg(long)]
    labels: PathBuf,
    #[arg(long)]
    clients: usize,
    #[arg(long, default_value_t = 2.0, value_parser = positive)]
    alpha1: f64,
    #[arg(long, default_value_t = 8.0, value_parser = positive)]
    alpha2: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Directory for `partition_plan.json` and `partition_report.csv`.
    #[arg(long, default_value = ".")]
    out: PathBuf,
}

#[derive(Debug, Args)]
struct EndpointArgs {
    /// Derive manifest, loader and store from an experiment config.
    #[arg(long, conflicts_with_all = ["manifest", "dataloader"])]
    config: Option<PathBuf>,
    #[arg(long, requires = "dataloader")]
    manifest: Option<PathBuf>,
    #[arg(long, required_unless_present = "index")]
    endpoint_id: Option<String>,
    /// Roster position, as an alternative to `--endpoint-id` with `--config`.
    #[arg(long, requires = "config", conflicts_with = "endpoint_id")]
    index: Option<usize>,
    /// Loader spec for the training shard.
    #[arg(long)]
    dataloader: Option<String>,
    #[arg(long)]
    val_dataloader: Option<String>,
    /// Object store directory shared with the server.
    #[arg(long)]
    store_dir: Option<PathBuf>,
    /// Where `finalize` writes the received model.
    #[arg(long)]
    output_dir: Option<PathBuf>,
    /// Server address.
    #[arg(long)]
    connect: String,
    /// Seconds to keep retrying the initial connection.
    #[arg(long, default_value_t = 30)]
    connect_timeout: u64,
}

#[derive(Debug, Args)]
struct RunArgs {
    #[arg(long)]
    config: PathBuf,
    /// Host every client on an in-process thread instead of waiting for TCP
    /// endpoints.
    #[arg(long)]
    simulate: bool,
    /// Override the config's listen address.
    #[arg(long)]
    listen: Option<String>,
    /// Seconds to wait for all endpoints to connect.
    #[arg(long, default_value_t = 60)]
    connect_timeout: u64,
}

#[derive(Debug, Args)]
struct BaselinesArgs {
    #[arg(long)]
    config: PathBuf,
}

#[derive(Debug, Args)]
struct ReportArgs {
    #[arg(required = true)]
    runlogs: Vec<PathBuf>,
}

fn positive(s: &str) -> Result<f64, String> {
    let v: f64 = s.parse().map_err(|e| format!("{e}"))?;
    if v > 0.0 && v.is_finite() {
        Ok(v)
    } else {
        Err(format!("must be positive, got {v}"))
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    match dispatch(cli.command) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
    }
}

fn dispatch(command: Command) -> Result<ExitCode> {
    match command {
        Command::Federation(cmd) => federation(cmd),
        Command::Partition(args) => partition(args),
        Command::Endpoint(args) => endpoint(args),
        Command::Run(args) => run(args),
        Command::Baselines(args) => baselines(args),
        Command::Report(args) => report(args),
    }
}

fn federation(cmd: FederationCmd) -> Result<ExitCode> {
    match cmd {
        FederationCmd::Create { manifest, owner, email } => {
            if manifest.exists() {
                bail!("{} already exists", manifest.display());
            }
            let m = create_federation(&owner, &email)?;
            m.save(&manifest)?;
            println!("{}", m.group_id);
        }
        FederationCmd::AddMember {
            manifest,
            identity,
            email,
        } => {
            let mut m = FederationManifest::load(&manifest)?;
            add_member(&mut m, &identity, &email)?;
            m.save(&manifest)?;
        }
        FederationCmd::RegisterEndpoint {
            manifest,
            owner,
            dataloader,
            address,
        } => {
            let mut m = FederationManifest::load(&manifest)?;
            let record = register_endpoint(&mut m, &owner, &dataloader, &address)?;
            m.save(&manifest)?;
            println!("{}", record.endpoint_id);
        }
    }
    Ok(ExitCode::SUCCESS)
}

fn read_labels(path: &Path) -> Result<Vec<usize>> {
    let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    if text.trim_start().starts_with('[') {
        return serde_json::from_str(&text).with_context(|| format!("parsing {}", path.display()));
    }
    text.split(|c: char| c.is_whitespace() || c == ',')
        .filter(|t| !t.is_empty())
        .map(|t| {
            t.parse()
                .with_context(|| format!("{}: {t:?} is not a class label", path.display()))
        })
        .collect()
}

fn partition(args: PartitionArgs) -> Result<ExitCode> {
    let labels = read_labels(&args.labels)?;
    let config = PartitionConfig::new(args.clients, args.alpha1, args.alpha2, args.seed);
    let plan = dual_dirichlet_partition(&labels, &config)?;
    let report = partition_report(&plan, &labels)?;
    fs::create_dir_all(&args.out)?;
    let plan_path = args.out.join("partition_plan.json");
    let csv_path = args.out.join("partition_report.csv");
    fs::write(&plan_path, plan.to_json())?;
    fs::write(&csv_path, report.to_csv())?;
    print!("{}", report.to_table());
    eprintln!("wrote {} and {}", plan_path.display(), csv_path.display());
    Ok(ExitCode::SUCCESS)
}

fn endpoint(args: EndpointArgs) -> Result<ExitCode> {
    let mut runtime = match &args.config {
        Some(path) => {
            let config = ExperimentConfig::load(path)?;
            let fed = config.resolve()?;
            let id = match (&args.endpoint_id, args.index) {
                (Some(id), _) => id.clone(),
                (None, Some(i)) => fed
                    .roster
                    .get(i)
                    .cloned()
                    .with_context(|| format!("--index {i} is outside a roster of {}", fed.roster.len()))?,
                (None, None) => unreachable!("clap requires one of them"),
            };
            let store = config.open_store()?;
            endpoint_runtime(&config, &fed, &id, store)?
        }
        None => manual_runtime(&args)?,
    };
    let id = runtime.endpoint_id().to_string();
    let mut link = TcpEndpointLink::connect(&args.connect, id.clone(), Duration::from_secs(args.connect_timeout))?;
    log::info!("endpoint {id} connected to {}", args.connect);
    let handled = run_endpoint(&mut runtime, &mut link)?;
    log::info!("endpoint {id} served {handled} tasks");
    Ok(ExitCode::SUCCESS)
}

fn manual_runtime(args: &EndpointArgs) -> Result<EndpointRuntime> {
    let Some(manifest_path) = &args.manifest else {
        bail!("give either --config or --manifest with --dataloader");
    };
    let manifest = FederationManifest::load(manifest_path)?;
    let id = args.endpoint_id.clone().context("--endpoint-id is required with --manifest")?;
    let mut config = EndpointConfig::for_record(&manifest, &id)?;
    let mut registry = DataloaderRegistry::new();
    registry.register(&config.dataloader, args.dataloader.as_deref().expect("clap requires it"))?;
    if let Some(val) = &args.val_dataloader {
        let name = format!("{}.val", config.dataloader);
        registry.register(&name, val)?;
        config.val_dataloader = Some(name);
    }
    config.output_dir = args.output_dir.clone();
    let store_dir = args.store_dir.clone().unwrap_or_else(|| PathBuf::from("objects"));
    let store: Arc<dyn ObjectStore> = Arc::new(FsStore::new(store_dir));
    Ok(EndpointRuntime::new(manifest, config, registry, store)?)
}

fn finish_run(config: &ExperimentConfig, report: &RunReport, log: &RunLog) -> Result<ExitCode> {
    let out = config.output_dir();
    if let Some(state) = &report.final_state {
        let path = out.join("final_model.apfl");
        fs::write(&path, encode_state(state)).with_context(|| format!("writing {}", path.display()))?;
    }
    print!("{}", render_table(&[summarize_log(log.records())?]));
    if report.is_aborted() {
        return Ok(ExitCode::from(2));
    }
    Ok(ExitCode::SUCCESS)
}

fn run(args: RunArgs) -> Result<ExitCode> {
    let mut config = ExperimentConfig::load(&args.config)?;
    if let Some(listen) = args.listen {
        config.listen = listen;
    }
    let fed = config.resolve()?;
    let store = config.open_store()?;
    let mut log = RunLog::create(&config.run_log_path())?;
    let report = if args.simulate {
        simulate(&config, &fed, store, &mut log)?.report
    } else {
        let server = TcpServer::bind(config.listen.as_str())?;
        log::info!(
            "waiting for {} endpoints on {}",
            fed.roster.len(),
            server.local_addr()
        );
        run_over_tcp(
            &config,
            &fed,
            &server,
            store.as_ref(),
            &mut log,
            Duration::from_secs(args.connect_timeout),
        )?
    };
    finish_run(&config, &report, &log)
}

fn baselines(args: BaselinesArgs) -> Result<ExitCode> {
    let config = ExperimentConfig::load(&args.config)?;
    let fed = config.resolve()?;
    let result = run_baselines(&config, &fed)?;
    let path = config.run_log_path();
    let mut log = RunLog::append(&path)?;
    log.write(kinds::BASELINES, serde_json::to_value(&result)?)?;
    println!("global    {:.4}", result.global_accuracy);
    for (id, acc) in result.clients.iter().zip(&result.local_accuracies) {
        println!("local     {acc:.4}  {id}");
    }
    println!("local avg {:.4}", result.local_average);
    eprintln!("appended to {}", path.display());
    Ok(ExitCode::SUCCESS)
}

fn report(args: ReportArgs) -> Result<ExitCode> {
    let mut runs = Vec::new();
    for path in &args.runlogs {
        let records = read_run_log(path)?;
        runs.push(summarize_log(&records).with_context(|| path.display().to_string())?);
    }
    print!("{}", render_table(&runs));
    Ok(ExitCode::SUCCESS)
}
