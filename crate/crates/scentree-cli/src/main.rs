//! `scentree` — scenario trees, nested distances, distance bounds,
//! quantizers and the inventory benchmark from one binary.
//!
//! Values print as JSON on stdout; trees and reports go to files. Exit code
//! 1 with a message on stderr for any invalid input.

use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use serde_json::json;

use scentree_cli::experiments::{self, ExperimentConfig};
use scentree_core::inventory::{
    closed_form_value_gaussian, closed_form_value_lognormal, solve_on_tree, InventorySpec,
};
use scentree_core::models::ProcessModel;
use scentree_core::nested::{
    bound_report_model, bound_report_trees, leaf_path_kw, nested_distance, SupEstimation,
};
use scentree_core::quantize::{
    forward_backward, monte_carlo_tree, stagewise_optimal_tree, FBTrace, FbVariant,
    QuantizeConfig, StepRule,
};
use scentree_core::tree::ScenarioTree;

#[derive(Parser)]
#[command(
    name = "scentree",
    version,
    about = "Scenario-tree quantization of stochastic processes, with nested-distance bounds"
)]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Inspect or transform scenario-tree files.
    Tree {
        #[command(subcommand)]
        cmd: TreeCmd,
    },
    /// Distances between two trees.
    Dist {
        #[command(subcommand)]
        cmd: DistCmd,
    },
    /// Distance bounds between trees, or between a model and a tree.
    Bound(BoundArgs),
    /// Build a scenario tree for a process model.
    Quantize(QuantizeArgs),
    /// Multistage inventory control on trees and in closed form.
    Inventory {
        #[command(subcommand)]
        cmd: InventoryCmd,
    },
    /// Reproducible benchmark sweeps writing report.csv/report.json/meta.json.
    Experiment(ExperimentArgs),
}

#[derive(Subcommand)]
enum TreeCmd {
    /// Parse a tree file, check its invariants and print a summary.
    Validate { file: PathBuf },
    /// Rewire the tree so stages up to `--stage` are revealed at once.
    Clairvoyant {
        /// Stage whose predecessor structure replaces the earlier ones.
        #[arg(long)]
        stage: usize,
        file: PathBuf,
        /// Output path; stdout when omitted.
        #[arg(short, long)]
        out: Option<PathBuf>,
    },
}

#[derive(Subcommand)]
enum DistCmd {
    /// Transport distance between the leaf-path distributions (history
    /// structure ignored).
    Kw {
        #[arg(long, default_value_t = 1)]
        r: u32,
        a: PathBuf,
        b: PathBuf,
    },
    /// Nested distance by the exact backward recursion.
    Nested {
        a: PathBuf,
        b: PathBuf,
        #[arg(long, default_value_t = 1)]
        r: u32,
    },
}

#[derive(Args)]
struct BoundArgs {
    /// eq6 | eq10 | chain compare two tree files; eq7 | eq12 compare a model
    /// file against a tree file.
    #[arg(long)]
    which: String,
    a: PathBuf,
    b: PathBuf,
    #[arg(long, default_value_t = 1)]
    r: u32,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Extra sampled histories per stage in the sup estimates.
    #[arg(long, default_value_t = SupEstimation::default().extra_histories)]
    histories: usize,
    /// Quantile-grid size for scalar conditional distributions.
    #[arg(long, default_value_t = SupEstimation::default().scalar_atoms)]
    scalar_atoms: usize,
    /// Monte Carlo atoms for joint tail distributions.
    #[arg(long, default_value_t = SupEstimation::default().joint_samples)]
    joint_samples: usize,
}

#[derive(Args)]
struct QuantizeArgs {
    /// mc | stagewise | fb
    #[arg(long)]
    method: String,
    /// full | two-stage — update window of the fb backward pass.
    #[arg(long, default_value = "two-stage")]
    variant: String,
    #[arg(long)]
    model: PathBuf,
    /// "b=5,T=3" for a balanced tree, or per-stage "b=2:3:4".
    #[arg(long)]
    topology: String,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(short, long)]
    out: PathBuf,
    /// Sample budget per subtree pass (fb only).
    #[arg(long, default_value_t = 1000)]
    iterations: usize,
    /// Distance order the quantizer descends.
    #[arg(long, default_value_t = 2)]
    r: u32,
    /// diminishing | square-summable | polyak
    #[arg(long, default_value = "diminishing")]
    step: String,
    /// Initial tree for fb; defaults to the stage-wise optimal tree.
    #[arg(long)]
    init: Option<PathBuf>,
    /// Write the fb iteration trace (iteration, objective, skip count) here.
    #[arg(long)]
    trace: Option<PathBuf>,
    /// Smallest conditional probability kept for unsampled children.
    #[arg(long, default_value_t = 0.0)]
    floor: f64,
    /// Optimize lognormal models in demand space instead of log space.
    #[arg(long, default_value_t = false)]
    lognormal_direct: bool,
}

#[derive(Subcommand)]
enum InventoryCmd {
    /// Exact multistage optimum on a scenario tree.
    Solve {
        #[arg(long)]
        spec: PathBuf,
        #[arg(long)]
        tree: PathBuf,
        /// Write the full solution (orders, stocks, shortages) here.
        #[arg(short, long)]
        out: Option<PathBuf>,
    },
    /// Closed-form optimal value of the uncapacitated problem.
    ClosedForm {
        #[arg(long)]
        spec: PathBuf,
    },
}

#[derive(Args)]
struct ExperimentArgs {
    /// bound-gap | success-prob | branchiness | inventory
    id: String,
    /// JSON config; defaults apply when omitted.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 7)]
    seed: u64,
    /// Worker threads; the SCENTREE_JOBS environment variable wins over this.
    #[arg(long)]
    jobs: Option<usize>,
}

fn main() {
    if let Err(err) = run(Cli::parse()) {
        eprintln!("error: {err:#}");
        std::process::exit(1);
    }
}

fn run(cli: Cli) -> Result<()> {
    match cli.cmd {
        Cmd::Tree { cmd } => run_tree(cmd),
        Cmd::Dist { cmd } => run_dist(cmd),
        Cmd::Bound(args) => run_bound(args),
        Cmd::Quantize(args) => run_quantize(args),
        Cmd::Inventory { cmd } => run_inventory(cmd),
        Cmd::Experiment(args) => run_experiment(args),
    }
}

fn load_tree(path: &Path) -> Result<ScenarioTree> {
    let text =
        fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    ScenarioTree::from_json(&text).with_context(|| format!("parsing tree {}", path.display()))
}

fn load_model(path: &Path) -> Result<ProcessModel> {
    let text =
        fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    ProcessModel::from_json(&text).with_context(|| format!("parsing model {}", path.display()))
}

fn emit_tree(tree: &ScenarioTree, out: Option<&Path>) -> Result<()> {
    match out {
        Some(path) => {
            fs::write(path, tree.to_json()).with_context(|| format!("writing {}", path.display()))?
        }
        None => println!("{}", tree.to_json()),
    }
    Ok(())
}

fn run_tree(cmd: TreeCmd) -> Result<()> {
    match cmd {
        TreeCmd::Validate { file } => {
            let tree = load_tree(&file)?;
            let leaf_probs = tree.leaf_probabilities()?;
            println!(
                "{}",
                json!({
                    "file": file,
                    "stages": tree.stages(),
                    "dim": tree.dim(),
                    "nodes": tree.node_count(),
                    "leaves": tree.leaf_count(),
                    "min_leaf_probability": leaf_probs.iter().cloned().fold(f64::INFINITY, f64::min),
                    "valid": true,
                })
            );
        }
        TreeCmd::Clairvoyant { stage, file, out } => {
            let tree = load_tree(&file)?;
            emit_tree(&tree.make_clairvoyant(stage)?, out.as_deref())?;
        }
    }
    Ok(())
}

fn run_dist(cmd: DistCmd) -> Result<()> {
    let (label, value, r) = match cmd {
        DistCmd::Kw { r, a, b } => {
            ("kw", leaf_path_kw(&load_tree(&a)?, &load_tree(&b)?, r)?, r)
        }
        DistCmd::Nested { a, b, r } => (
            "nested",
            nested_distance(&load_tree(&a)?, &load_tree(&b)?, r)?.value,
            r,
        ),
    };
    println!("{}", json!({ "distance": label, "order": r, "value": value }));
    Ok(())
}

fn run_bound(args: BoundArgs) -> Result<()> {
    let (report, value) = match args.which.as_str() {
        "eq6" | "eq10" | "chain" => {
            let report = bound_report_trees(&load_tree(&args.a)?, &load_tree(&args.b)?, args.r)?;
            let value = match args.which.as_str() {
                "eq6" => report.upper["eq6"],
                // A tree with an odd horizon reports the odd-stage variant.
                "eq10" => *report
                    .upper
                    .get("eq10")
                    .or_else(|| report.upper.get("eq11"))
                    .expect("two-stage bound"),
                _ => *report.lower_chain.last().expect("chain"),
            };
            (report, value)
        }
        "eq7" | "eq12" => {
            let cfg = SupEstimation {
                extra_histories: args.histories,
                scalar_atoms: args.scalar_atoms,
                joint_samples: args.joint_samples,
                seed: args.seed,
            };
            let report =
                bound_report_model(&load_model(&args.a)?, &load_tree(&args.b)?, args.r, &cfg)?;
            let value = report.upper[args.which.as_str()];
            (report, value)
        }
        other => bail!("unknown bound '{other}'; expected eq6, eq7, eq10, eq12 or chain"),
    };
    let mut doc = serde_json::to_value(&report)?;
    doc.as_object_mut()
        .expect("report object")
        .insert("which".into(), json!(args.which));
    doc.as_object_mut()
        .expect("report object")
        .insert("value".into(), json!(value));
    println!("{}", serde_json::to_string_pretty(&doc)?);
    Ok(())
}

/// "b=5,T=3" (balanced) or "b=2:3:4" (per stage, T implied).
fn parse_topology(text: &str) -> Result<Vec<usize>> {
    let mut branch: Option<Vec<usize>> = None;
    let mut stages: Option<usize> = None;
    for part in text.split(',') {
        let (key, value) = part
            .split_once('=')
            .with_context(|| format!("topology part '{part}' is not key=value"))?;
        match key.trim() {
            "b" => {
                let list: Vec<usize> = value
                    .split(':')
                    .map(|v| v.trim().parse::<usize>())
                    .collect::<std::result::Result<_, _>>()
                    .with_context(|| format!("branching '{value}'"))?;
                branch = Some(list);
            }
            "T" => stages = Some(value.trim().parse().with_context(|| format!("stages '{value}'"))?),
            other => bail!("unknown topology key '{other}'"),
        }
    }
    let branch = branch.context("topology needs b=...")?;
    if branch.iter().any(|&b| b == 0) {
        bail!("branching factors must be positive");
    }
    let branching = match (branch.len(), stages) {
        (1, Some(t)) => vec![branch[0]; t],
        (1, None) => bail!("balanced topology needs T=..."),
        (n, Some(t)) if n != t => bail!("per-stage list has {n} entries but T={t}"),
        _ => branch,
    };
    Ok(branching)
}

fn write_trace(path: &Path, trace: &FBTrace) -> Result<()> {
    let mut csv = String::from("iteration,objective,skip_count\n");
    for row in &trace.rows {
        csv.push_str(&format!(
            "{},{},{}\n",
            row.iteration,
            experiments::fmt(row.objective),
            row.skips
        ));
    }
    fs::write(path, csv).with_context(|| format!("writing {}", path.display()))?;
    Ok(())
}

fn run_quantize(args: QuantizeArgs) -> Result<()> {
    let model = load_model(&args.model)?;
    let branching = parse_topology(&args.topology)?;
    if branching.len() != model.stages() {
        bail!(
            "topology has {} stages but the model has {}",
            branching.len(),
            model.stages()
        );
    }
    let step = match args.step.as_str() {
        "diminishing" => StepRule::Diminishing { exponent: 0.75 },
        "square-summable" => StepRule::SquareSummable,
        "polyak" => StepRule::Polyak,
        other => bail!("unknown step rule '{other}'"),
    };
    let variant = match args.variant.as_str() {
        "full" => FbVariant::Full,
        "two-stage" => FbVariant::EfficientTwoStage,
        other => bail!("unknown variant '{other}'; expected full or two-stage"),
    };
    let cfg = QuantizeConfig {
        iterations: args.iterations,
        step,
        order: args.r,
        variant,
        seed: args.seed,
        probability_floor: args.floor,
        trace: args.trace.is_some(),
        mass_samples: 8192,
        lognormal_direct: args.lognormal_direct,
    };
    let (tree, trace) = match args.method.as_str() {
        "mc" => (monte_carlo_tree(&model, &branching, args.seed)?, None),
        "stagewise" => (stagewise_optimal_tree(&model, &branching, &cfg)?, None),
        "fb" => {
            let initial = match &args.init {
                Some(path) => load_tree(path)?,
                None => stagewise_optimal_tree(&model, &branching, &cfg)?,
            };
            let (tree, trace) = forward_backward(&model, &initial, &cfg)?;
            (tree, Some(trace))
        }
        other => bail!("unknown method '{other}'; expected mc, stagewise or fb"),
    };
    fs::write(&args.out, tree.to_json())
        .with_context(|| format!("writing {}", args.out.display()))?;
    if let (Some(path), Some(trace)) = (&args.trace, &trace) {
        write_trace(path, trace)?;
    }
    let mut doc = json!({
        "method": args.method,
        "stages": tree.stages(),
        "dim": tree.dim(),
        "leaves": tree.leaf_count(),
        "out": args.out,
    });
    if let Some(trace) = &trace {
        doc.as_object_mut().expect("doc").insert(
            "zero_mass_nodes".into(),
            json!(trace.zero_mass_nodes.len()),
        );
        doc.as_object_mut().expect("doc").insert(
            "unsampled_blocks".into(),
            json!(trace.unsampled_blocks.len()),
        );
    }
    println!("{}", serde_json::to_string_pretty(&doc)?);
    Ok(())
}

fn run_inventory(cmd: InventoryCmd) -> Result<()> {
    match cmd {
        InventoryCmd::Solve { spec, tree, out } => {
            let text = fs::read_to_string(&spec)
                .with_context(|| format!("reading {}", spec.display()))?;
            let spec = InventorySpec::from_json(&text)?;
            let tree = load_tree(&tree)?;
            let solution = solve_on_tree(&spec, &tree)?;
            if let Some(path) = out {
                fs::write(&path, serde_json::to_string_pretty(&solution)?)
                    .with_context(|| format!("writing {}", path.display()))?;
            }
            println!(
                "{}",
                json!({
                    "value": solution.value,
                    "duality_gap": solution.duality_gap,
                    "max_balance_residual": solution.max_balance_residual(&spec, &tree),
                })
            );
        }
        InventoryCmd::ClosedForm { spec } => {
            let text = fs::read_to_string(&spec)
                .with_context(|| format!("reading {}", spec.display()))?;
            let spec = InventorySpec::from_json(&text)?;
            let value = if spec.model.is_lognormal() {
                closed_form_value_lognormal(&spec)?
            } else {
                closed_form_value_gaussian(&spec)?
            };
            println!("{}", json!({ "value": value }));
        }
    }
    Ok(())
}

fn run_experiment(args: ExperimentArgs) -> Result<()> {
    let cfg = match &args.config {
        Some(path) => {
            let text = fs::read_to_string(path)
                .with_context(|| format!("reading {}", path.display()))?;
            serde_json::from_str(&text)
                .with_context(|| format!("parsing config {}", path.display()))?
        }
        None => ExperimentConfig::default(),
    };
    let jobs = match std::env::var("SCENTREE_JOBS") {
        Ok(text) => Some(
            text.parse::<usize>()
                .context("SCENTREE_JOBS must be a positive integer")?,
        ),
        Err(_) => args.jobs,
    };
    let started = Instant::now();
    let report = match jobs {
        Some(n) => rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build()
            .context("building worker pool")?
            .install(|| experiments::run(&args.id, &cfg, args.seed)),
        None => experiments::run(&args.id, &cfg, args.seed),
    }?;
    experiments::write_outputs(&args.out, &report, &cfg, args.seed, jobs, started)?;
    println!(
        "{}",
        json!({
            "id": report.id,
            "rows": report.rows.len(),
            "out": args.out,
            "summary": report.summary,
        })
    );
    Ok(())
}
