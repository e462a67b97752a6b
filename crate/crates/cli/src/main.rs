use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::error::ErrorKind;
use clap::{Args, CommandFactory, FromArgMatches, Parser, Subcommand};

use noran::gradcheck;
use noran::influence::{verify_corollary, GraphSpec, InfluenceMode};
use noran::kg::{make_inductive_split, parse_triples, KnowledgeGraph};
use noran::layers::MpKind;
use noran::pipeline::{checkpoint, evaluate_held_out, train, RankMode, TrainConfig};
use noran::relnet::{PatternMask, RelationNetwork};
use noran::tensor::Fault;
use noran::{Error, CHECKPOINT_VERSION};

/// Inductive knowledge graph completion over relation networks.
#[derive(Debug, Parser)]
#[command(name = "noran")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Hold out a random entity subset and every triple touching it.
    Split {
        #[arg(long)]
        input: PathBuf,
        #[arg(long, default_value_t = 0.1)]
        unseen_frac: f64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out_dir: PathBuf,
    },
    /// Build the relation network of a triple file.
    BuildNet {
        #[arg(long)]
        input: PathBuf,
        /// Comma-separated subset of HH, TT, HT.
        #[arg(long, default_value = "HH,TT,HT")]
        mask: String,
        #[arg(long)]
        degree_cap: Option<usize>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Print node, edge and degree statistics.
        #[arg(long)]
        stats: bool,
        /// Write the edge list (`u v pattern`) here; `-` for stdout.
        #[arg(long)]
        export: Option<PathBuf>,
    },
    /// Train encoder and classifier, then write a checkpoint.
    Train(Box<TrainArgs>),
    /// Rank held-out triples against a trained checkpoint.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        train: PathBuf,
        #[arg(long)]
        eval: PathBuf,
        #[arg(long, default_value = "relations", value_parser = ["relations", "tails"])]
        mode: String,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Print a table instead of `key=value` lines.
        #[arg(long)]
        table: bool,
        /// Also write the `key=value` report to this file.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Compare influence distributions with k-step random walks.
    VerifyInfluence {
        #[arg(long, value_parser = ["gcn", "sage", "gin", "sgc", "gat"])]
        layer: String,
        #[arg(long, default_value_t = 2)]
        k: usize,
        /// Builtin (path-N, cycle-N, star-N, asymmetric) or an edge-list file.
        #[arg(long, default_value = "path-4")]
        graph_spec: String,
        #[arg(long, default_value_t = 20)]
        trials: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value = "exact", value_parser = ["exact", "statistical", "gat-contrast"])]
        mode: String,
        #[arg(long, default_value_t = 0)]
        center: usize,
    },
    /// Finite-difference check of every backward rule.
    Gradcheck {
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Scale the matmul backward rule by 1 + EPS.
        #[arg(long, hide = true)]
        inject_fault: Option<f64>,
    },
}

#[derive(Debug, Args)]
struct TrainArgs {
    /// `key = value` config file.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    train: PathBuf,
    #[arg(long)]
    out_checkpoint: PathBuf,
    #[arg(long)]
    dim: Option<String>,
    #[arg(long)]
    gnn: Option<String>,
    #[arg(long)]
    depth: Option<String>,
    #[arg(long)]
    estimator: Option<String>,
    #[arg(long)]
    combiner: Option<String>,
    #[arg(long)]
    mask: Option<String>,
    #[arg(long)]
    degree_cap: Option<String>,
    #[arg(long)]
    lr: Option<String>,
    #[arg(long)]
    batch_size: Option<String>,
    #[arg(long)]
    epochs: Option<String>,
    #[arg(long)]
    margin: Option<String>,
    #[arg(long)]
    seed: Option<String>,
    /// Any other config key, as `key=value`.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    extra: Vec<String>,
}

impl TrainArgs {
    fn overrides(&self) -> Vec<(String, String)> {
        let named = [
            ("dim", &self.dim),
            ("gnn", &self.gnn),
            ("depth", &self.depth),
            ("estimator", &self.estimator),
            ("combiner", &self.combiner),
            ("mask", &self.mask),
            ("degree_cap", &self.degree_cap),
            ("lr", &self.lr),
            ("batch_size", &self.batch_size),
            ("epochs", &self.epochs),
            ("margin", &self.margin),
            ("seed", &self.seed),
        ];
        let mut out: Vec<(String, String)> = self
            .extra
            .iter()
            .map(|kv| match kv.split_once('=') {
                Some((k, v)) => (k.trim().to_owned(), v.trim().to_owned()),
                None => (kv.clone(), String::new()),
            })
            .collect();
        out.extend(named.into_iter().filter_map(|(k, v)| v.as_ref().map(|v| (k.to_owned(), v.clone()))));
        out
    }
}

/// Failure classes, one per exit code.
#[derive(Debug)]
enum Failure {
    Input(String),
    Training(String),
    Verification(String),
}

impl Failure {
    fn code(&self) -> u8 {
        match self {
            Failure::Input(_) => 2,
            Failure::Training(_) => 3,
            Failure::Verification(_) => 4,
        }
    }

    fn message(&self) -> &str {
        match self {
            Failure::Input(m) | Failure::Training(m) | Failure::Verification(m) => m,
        }
    }
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        Failure::Input(e.to_string())
    }
}

fn io_error(path: &Path, source: std::io::Error) -> Failure {
    Error::Io {
        path: path.display().to_string(),
        source,
    }
    .into()
}

fn read_graph(path: &Path) -> Result<KnowledgeGraph, Failure> {
    let bytes = fs::read(path).map_err(|e| io_error(path, e))?;
    parse_triples(&bytes).map_err(|e| Failure::Input(format!("{}: {e}", path.display())))
}

fn write(path: &Path, contents: impl AsRef<[u8]>) -> Result<(), Failure> {
    fs::write(path, contents).map_err(|e| io_error(path, e))
}

fn input<E: Into<Error>>(e: E) -> Failure {
    Failure::from(e.into())
}

fn run_split(input_path: &Path, unseen_frac: f64, seed: u64, out_dir: &Path) -> Result<(), Failure> {
    let kg = read_graph(input_path)?;
    let split = make_inductive_split(&kg, unseen_frac, seed).map_err(input)?;
    fs::create_dir_all(out_dir).map_err(|e| io_error(out_dir, e))?;
    write(&out_dir.join("train.tsv"), split.train_graph.to_tsv())?;
    write(&out_dir.join("eval.tsv"), split.eval_tsv(&kg))?;
    write(&out_dir.join("unseen_entities.txt"), split.unseen_names(&kg))?;
    println!("train={} eval={} unseen={}", split.train_graph.len(), split.eval_triples.len(), split.unseen_entities.len());
    Ok(())
}

fn run_build_net(input_path: &Path, mask: &str, degree_cap: Option<usize>, seed: u64, stats: bool, export: Option<&Path>) -> Result<(), Failure> {
    let kg = read_graph(input_path)?;
    let mask = PatternMask::parse(mask).map_err(input)?;
    if degree_cap == Some(0) {
        return Err(Failure::Input("--degree-cap must be positive".into()));
    }
    let net = RelationNetwork::build(&kg, mask, degree_cap, seed);
    if stats {
        print!("{}", net.stats());
    }
    match export {
        Some(p) if p == Path::new("-") => print!("{}", net.export_edge_list()),
        Some(p) => write(p, net.export_edge_list())?,
        None => {}
    }
    Ok(())
}

fn run_train(args: &TrainArgs) -> Result<(), Failure> {
    let mut cfg = TrainConfig::default();
    if let Some(path) = &args.config {
        let text = fs::read_to_string(path).map_err(|e| io_error(path, e))?;
        cfg.apply_text(&text).map_err(|e| Failure::Input(format!("{}: {e}", path.display())))?;
    }
    for (k, v) in args.overrides() {
        cfg.set(&k, &v).map_err(|e| Failure::Input(e.to_string()))?;
    }
    let kg = read_graph(&args.train)?;
    let outcome = train(&kg, &cfg, |epoch, loss| println!("epoch={epoch} loss={loss:.6}")).map_err(|e| Failure::Training(e.to_string()))?;
    println!("classifier_loss={:.6}", outcome.classifier_loss);
    checkpoint::save(&outcome.model, &args.out_checkpoint).map_err(|e| Failure::Input(format!("{}: {e}", args.out_checkpoint.display())))
}

fn run_eval(ckpt: &Path, train_path: &Path, eval_path: &Path, mode: &str, seed: u64, table: bool, out: Option<&Path>) -> Result<(), Failure> {
    let model = checkpoint::load(ckpt).map_err(|e| Failure::Input(format!("{}: {e}", ckpt.display())))?;
    let train_kg = read_graph(train_path)?;
    let eval_kg = read_graph(eval_path)?;
    let mode: RankMode = mode.parse().map_err(input)?;
    let report = evaluate_held_out(&model, &train_kg, &eval_kg, mode, seed).map_err(input)?;
    if table {
        print!("{report}");
    } else {
        print!("{}", report.to_kv());
    }
    if let Some(p) = out {
        write(p, report.to_kv())?;
    }
    Ok(())
}

fn run_verify(layer: &str, k: usize, graph_spec: &str, trials: usize, seed: u64, mode: &str, center: usize) -> Result<(), Failure> {
    let kind: MpKind = layer.parse().map_err(|e: noran::layers::LayerError| Failure::Input(e.to_string()))?;
    let mode: InfluenceMode = mode.parse().map_err(input)?;
    let spec = GraphSpec::resolve(graph_spec).map_err(input)?;
    let report = verify_corollary(kind, &spec, k, trials, seed, mode, center).map_err(input)?;
    print!("{report}");
    if report.passed {
        Ok(())
    } else {
        Err(Failure::Verification(format!("{mode} check failed for {kind} on {}", spec.name)))
    }
}

fn run_gradcheck(seed: u64, fault: Option<f64>) -> Result<(), Failure> {
    let report = gradcheck::run_suite(seed, fault.map(Fault::ScaleMatmulBackward)).map_err(input)?;
    print!("{report}");
    if report.passed() {
        Ok(())
    } else {
        Err(Failure::Verification(format!("relative error above {:e}", gradcheck::TOLERANCE)))
    }
}

fn version() -> String {
    format!("{} (checkpoint format v{CHECKPOINT_VERSION})", env!("CARGO_PKG_VERSION"))
}

fn main() -> ExitCode {
    let mut command = Cli::command().version(version());
    let cli = match Cli::from_arg_matches(&command.clone().get_matches()) {
        Ok(cli) => cli,
        Err(e) => e.format(&mut command).exit(),
    };
    let result = match &cli.command {
        Command::Split {
            input,
            unseen_frac,
            seed,
            out_dir,
        } => run_split(input, *unseen_frac, *seed, out_dir),
        Command::BuildNet {
            input,
            mask,
            degree_cap,
            seed,
            stats,
            export,
        } => run_build_net(input, mask, *degree_cap, *seed, *stats, export.as_deref()),
        Command::Train(args) => run_train(args),
        Command::Eval {
            checkpoint,
            train,
            eval,
            mode,
            seed,
            table,
            out,
        } => run_eval(checkpoint, train, eval, mode, *seed, *table, out.as_deref()),
        Command::VerifyInfluence {
            layer,
            k,
            graph_spec,
            trials,
            seed,
            mode,
            center,
        } => {
            if mode == "exact" && layer == "gat" {
                command
                    .error(ErrorKind::ArgumentConflict, "--mode exact needs a fixed layer family (gcn, sage, gin, sgc); use --mode gat-contrast for gat")
                    .exit();
            }
            run_verify(layer, *k, graph_spec, *trials, *seed, mode, *center)
        }
        Command::Gradcheck { seed, inject_fault } => run_gradcheck(*seed, *inject_fault),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {}", f.message());
            ExitCode::from(f.code())
        }
    }
}
