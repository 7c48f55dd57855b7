//! Command-line front end: train models, query them, and run the
//! evaluation harness. Primary results go to stdout with fixed column
//! order and four decimal places; diagnostics go to stderr.

use std::path::PathBuf;

use anyhow::{anyhow, bail, Context, Result};
use clap::{Args, Parser, Subcommand};

use cfw_core::corpus::{
    self, generate_synthetic, load_dataset, PlantedPair, Protocol, SynthConfig,
};
use cfw_core::evaluator::{run_protocol, EvalConfig, Stratum};
use cfw_core::marginals::count_marginals;
use cfw_core::model::{load_model, save_model, CfwModel};
use cfw_core::recommender::{recommend, similar_items, Algorithm, Query};
use cfw_core::trainer::{build_model_with_stats, count_pairs, TrainConfig};
use cfw_core::woe::{
    approximate_posterior, effective_woe, expected_theta_h_given_e, log_odds_ratio_ase, logit,
    ml_woe, percentile_woe, simple_woe,
};

#[derive(Parser)]
#[command(name = "cfw", version, about = "Item-to-item collaborative filtering")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train a model from a preference dataset.
    Train(TrainArgs),
    /// Rank likely items for a set of evidence items.
    Recommend(RecommendArgs),
    /// List stored similar items for one item.
    Similar(SimilarArgs),
    /// Score a model against a held-out test set.
    Evaluate(EvaluateArgs),
    /// Generate a synthetic preference dataset.
    Synth(SynthArgs),
    /// Show model internals or pairwise diagnostics.
    Inspect(InspectArgs),
}

#[derive(Args)]
struct TrainArgs {
    /// Preference dataset (one `user<TAB>item item ...` line per user).
    #[arg(long)]
    data: PathBuf,
    /// Output model path.
    #[arg(long)]
    out: PathBuf,
    /// Association list capacity per item.
    #[arg(long, default_value_t = 40)]
    f: usize,
    /// Counting passes; omit to size automatically from memory budget.
    #[arg(long)]
    partitions: Option<usize>,
    /// Posterior memo capacity (0 disables).
    #[arg(long, default_value_t = 100_000)]
    cache: usize,
    /// Fast pruning of pairs that cannot reach any list.
    #[arg(long, default_value = "on", value_parser = parse_switch)]
    skip_bound: bool,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Args)]
struct RecommendArgs {
    #[arg(long)]
    model: PathBuf,
    /// Comma-separated evidence items, e.g. "i0003,i0017".
    #[arg(long)]
    items: String,
    /// Combiner: cfwm, cfwp, or baseline.
    #[arg(long, default_value = "cfwm", value_parser = parse_algorithm)]
    mode: Algorithm,
    #[arg(long, default_value_t = 10)]
    top: usize,
}

#[derive(Args)]
struct SimilarArgs {
    #[arg(long)]
    model: PathBuf,
    #[arg(long)]
    item: String,
    /// Minimum conservative weight of evidence to report.
    #[arg(long, default_value_t = 1.0)]
    threshold: f64,
    /// Cap on reported items (default: whole stored list).
    #[arg(long)]
    top: Option<usize>,
}

#[derive(Args)]
struct EvaluateArgs {
    #[arg(long)]
    model: PathBuf,
    /// Held-out test dataset.
    #[arg(long)]
    test: PathBuf,
    /// given-<k> (e.g. given-1, given-5) or all-but-1.
    #[arg(long, value_parser = parse_protocol)]
    protocol: Protocol,
    #[arg(long, default_value = "cfwm", value_parser = parse_algorithm)]
    algo: Algorithm,
    #[arg(long, default_value_t = 5.0)]
    half_life: f64,
    /// Restrict queries to a frequency stratum: all, low, or high.
    #[arg(long, default_value = "all", value_parser = parse_stratum)]
    stratum: Stratum,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Optional path for the per-user score table.
    #[arg(long)]
    per_user_out: Option<PathBuf>,
}

#[derive(Args)]
struct SynthArgs {
    #[arg(long)]
    users: usize,
    #[arg(long)]
    items: usize,
    /// Marginal decay exponent over item rank.
    #[arg(long, default_value_t = 1.0)]
    zipf: f64,
    /// Target expected liked-set size per user.
    #[arg(long, default_value_t = 4.0)]
    mean_items: f64,
    /// Planted association "E,H,OMEGA" (by index or generated token);
    /// repeatable.
    #[arg(long)]
    plant: Vec<String>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct InspectArgs {
    #[arg(long)]
    model: PathBuf,
    /// Show one item's marginal and stored lists.
    #[arg(long)]
    item: Option<String>,
    /// Recompute pairwise diagnostics "E,H" from a dataset (needs --data).
    #[arg(long)]
    pair: Option<String>,
    #[arg(long)]
    data: Option<PathBuf>,
}

fn parse_algorithm(s: &str) -> Result<Algorithm, String> {
    match s {
        "cfwm" => Ok(Algorithm::CfwM),
        "cfwp" => Ok(Algorithm::CfwP),
        "baseline" => Ok(Algorithm::Baseline),
        other => Err(format!("expected cfwm, cfwp, or baseline, got {other:?}")),
    }
}

fn parse_stratum(s: &str) -> Result<Stratum, String> {
    match s {
        "all" => Ok(Stratum::All),
        "low" => Ok(Stratum::Low),
        "high" => Ok(Stratum::High),
        other => Err(format!("expected all, low, or high, got {other:?}")),
    }
}

fn parse_protocol(s: &str) -> Result<Protocol, String> {
    if s == "all-but-1" {
        return Ok(Protocol::AllBut1);
    }
    if let Some(k) = s.strip_prefix("given-") {
        if let Ok(k) = k.parse::<usize>() {
            if k >= 1 {
                return Ok(Protocol::GivenK(k));
            }
        }
    }
    Err(format!("expected given-<k> or all-but-1, got {s:?}"))
}

fn parse_switch(s: &str) -> Result<bool, String> {
    match s {
        "on" => Ok(true),
        "off" => Ok(false),
        other => Err(format!("expected on or off, got {other:?}")),
    }
}

fn main() {
    // Rust ignores SIGPIPE by default; restore it so piping into `head`
    // terminates quietly instead of panicking on a closed stdout.
    unsafe {
        libc::signal(libc::SIGPIPE, libc::SIG_DFL);
    }
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    let outcome = match cli.command {
        Command::Train(args) => cmd_train(args),
        Command::Recommend(args) => cmd_recommend(args),
        Command::Similar(args) => cmd_similar(args),
        Command::Evaluate(args) => cmd_evaluate(args),
        Command::Synth(args) => cmd_synth(args),
        Command::Inspect(args) => cmd_inspect(args),
    };
    if let Err(err) = outcome {
        eprintln!("error: {err:#}");
        std::process::exit(1);
    }
}

fn cmd_train(args: TrainArgs) -> Result<()> {
    let data = load_dataset(&args.data).context("loading training data")?;
    let cfg = TrainConfig {
        f: args.f,
        partitions: args.partitions,
        cache_capacity: args.cache,
        skip_bound: args.skip_bound,
        seed: args.seed,
        ..TrainConfig::default()
    };
    let (model, stats) = build_model_with_stats(&data, &cfg).context("training")?;
    save_model(&model, &args.out).context("writing model")?;
    println!("users {}", model.meta.n_users);
    println!("items {}", model.n_items());
    println!("pairs_evaluated {}", stats.pairs_evaluated);
    println!("pairs_skipped {}", stats.pairs_skipped);
    println!("cache_hit_rate {:.4}", stats.cache_hit_rate());
    println!("model {}", args.out.display());
    Ok(())
}

fn cmd_recommend(args: RecommendArgs) -> Result<()> {
    let model = load_model(&args.model).context("loading model")?;
    let evidence: Vec<String> = args
        .items
        .split(',')
        .map(|t| t.trim().to_string())
        .filter(|t| !t.is_empty())
        .collect();
    let query = Query {
        evidence,
        algorithm: args.mode,
        max_results: Some(args.top),
    };
    let recs = recommend(&model, &query);
    if recs.unknown_evidence > 0 {
        eprintln!(
            "warning: {} evidence item(s) not in the model vocabulary",
            recs.unknown_evidence
        );
    }
    if recs.baseline_fallback {
        eprintln!("warning: no usable evidence; falling back to popularity baseline");
    }
    println!("rank\titem\tscore\tomega");
    for (rank, scored) in recs.items.iter().enumerate() {
        println!(
            "{}\t{}\t{:.4}\t{:.4}",
            rank + 1,
            model.token(scored.item),
            scored.score,
            scored.combined_omega
        );
    }
    Ok(())
}

fn cmd_similar(args: SimilarArgs) -> Result<()> {
    let model = load_model(&args.model).context("loading model")?;
    let hits = similar_items(&model, &args.item, args.threshold, args.top)?;
    println!("rank\titem\tomega_p05");
    for (rank, (item, omega)) in hits.iter().enumerate() {
        println!("{}\t{}\t{:.4}", rank + 1, model.token(*item), omega);
    }
    Ok(())
}

fn cmd_evaluate(args: EvaluateArgs) -> Result<()> {
    let model = load_model(&args.model).context("loading model")?;
    let test = load_dataset(&args.test).context("loading test data")?;
    let cfg = EvalConfig {
        protocol: args.protocol,
        algorithm: args.algo,
        half_life: args.half_life,
        seed: args.seed,
        stratum: args.stratum,
    };
    let report = run_protocol(&model, &test, &cfg)?;
    println!("protocol {}", protocol_name(args.protocol));
    println!("algorithm {}", algorithm_name(args.algo));
    println!("stratum {}", stratum_name(args.stratum));
    println!("half_life {}", args.half_life);
    println!("seed {}", args.seed);
    println!("score {:.4}", report.score);
    println!("n_users_scored {}", report.n_scored);
    println!("n_users_skipped {}", report.n_skipped);
    println!("queries_per_second {:.1}", report.queries_per_second);
    if let Some(path) = args.per_user_out {
        let mut table = String::from("user\tscore\n");
        for user in &report.per_user {
            table.push_str(&format!("{}\t{:.4}\n", user.user_id, user.score));
        }
        std::fs::write(&path, table)
            .with_context(|| format!("writing per-user scores to {}", path.display()))?;
    }
    Ok(())
}

fn cmd_synth(args: SynthArgs) -> Result<()> {
    let mut cfg = SynthConfig::new(args.users, args.items);
    cfg.zipf_exponent = args.zipf;
    cfg.mean_items_per_user = args.mean_items;
    cfg.seed = args.seed;
    for spec in &args.plant {
        cfg.planted.push(parse_plant(spec, args.items)?);
    }
    let dataset = generate_synthetic(&cfg)?;
    corpus::save_dataset(&dataset, &args.out).context("writing dataset")?;
    println!("users {}", dataset.n_users());
    println!("items {}", dataset.n_items());
    println!("file {}", args.out.display());
    Ok(())
}

fn parse_plant(spec: &str, n_items: usize) -> Result<PlantedPair> {
    let parts: Vec<&str> = spec.split(',').map(str::trim).collect();
    if parts.len() != 3 {
        bail!("--plant expects \"E,H,OMEGA\", got {spec:?}");
    }
    let omega: f64 = parts[2]
        .parse()
        .with_context(|| format!("bad omega in --plant {spec:?}"))?;
    Ok(PlantedPair {
        item_e: parse_item_index(parts[0], n_items)?,
        item_h: parse_item_index(parts[1], n_items)?,
        omega,
    })
}

/// Accepts a bare index ("17") or a generated token ("i0017").
fn parse_item_index(token: &str, n_items: usize) -> Result<usize> {
    let digits = token.strip_prefix('i').unwrap_or(token);
    let index: usize = digits
        .parse()
        .map_err(|_| anyhow!("cannot parse item {token:?} as an index or i-token"))?;
    if index >= n_items {
        bail!("item {token:?} is out of range for {n_items} items");
    }
    Ok(index)
}

fn cmd_inspect(args: InspectArgs) -> Result<()> {
    let model = load_model(&args.model).context("loading model")?;
    match (&args.item, &args.pair) {
        (Some(item), None) => inspect_item(&model, item),
        (None, Some(pair)) => {
            let data = args
                .data
                .as_ref()
                .ok_or_else(|| anyhow!("--pair needs --data to recompute counts"))?;
            inspect_pair(pair, data)
        }
        (None, None) => {
            inspect_summary(&model);
            Ok(())
        }
        (Some(_), Some(_)) => bail!("choose one of --item or --pair"),
    }
}

fn inspect_summary(model: &CfwModel) {
    println!("version {}", model.meta.version);
    println!("n_users {}", model.meta.n_users);
    println!("items {}", model.n_items());
    println!("f {}", model.f);
    println!("seed {}", model.meta.seed);
    let stored: usize = model.predict_lists.iter().map(Vec::len).sum();
    println!("predict_associations {stored}");
    let stored: usize = model.similar_lists.iter().map(Vec::len).sum();
    println!("similar_associations {stored}");
}

fn inspect_item(model: &CfwModel, item: &str) -> Result<()> {
    let id = model
        .lookup(item)
        .ok_or_else(|| anyhow!("unknown item {item:?}"))?;
    println!("item {item}");
    println!("likes {}", model.marginals.likes(id));
    println!("dislikes {}", model.marginals.dislikes(id));
    println!("theta {:.6}", model.marginals.theta(id));
    println!("omega_0 {:.4}", model.omega_0(id));
    println!("predict_list rank\titem\ttheta_h_given_e\tomega_eff\tomega_p05");
    for (rank, a) in model.predict_lists[id as usize].iter().enumerate() {
        println!(
            "{}\t{}\t{:.4}\t{:.4}\t{:.4}",
            rank + 1,
            model.token(a.target),
            a.theta_h_given_e,
            a.omega_eff,
            a.omega_p05
        );
    }
    println!("similar_list rank\titem\tomega_p05\tomega_eff\ttheta_h_given_e");
    for (rank, a) in model.similar_lists[id as usize].iter().enumerate() {
        println!(
            "{}\t{}\t{:.4}\t{:.4}\t{:.4}",
            rank + 1,
            model.token(a.target),
            a.omega_p05,
            a.omega_eff,
            a.theta_h_given_e
        );
    }
    Ok(())
}

fn inspect_pair(pair: &str, data: &PathBuf) -> Result<()> {
    let (e_token, h_token) = pair
        .split_once(',')
        .ok_or_else(|| anyhow!("--pair expects \"E,H\", got {pair:?}"))?;
    let (e_token, h_token) = (e_token.trim(), h_token.trim());
    let dataset = load_dataset(data).context("loading data")?;
    let e = dataset
        .lookup(e_token)
        .ok_or_else(|| anyhow!("unknown item {e_token:?}"))?;
    let h = dataset
        .lookup(h_token)
        .ok_or_else(|| anyhow!("unknown item {h_token:?}"))?;
    if e == h {
        bail!("pair items must differ");
    }
    let marginals = count_marginals(&dataset)?;
    let counts = count_pairs(&dataset, &marginals, &[e]);
    let table = counts.table(e, h).expect("e is in the partition");
    let (theta_e, theta_h) = (marginals.theta(e), marginals.theta(h));
    println!("pair {e_token},{h_token}");
    println!(
        "counts a={} b={} c={} d={}",
        table.a, table.b, table.c, table.d
    );
    println!("theta_e {theta_e:.6}");
    println!("theta_h {theta_h:.6}");

    let posterior = approximate_posterior(&table, theta_e, theta_h)?;
    let omega_0 = logit(theta_h);
    println!("omega_eff {:.4}", effective_woe(&posterior, omega_0));
    println!("omega_p05 {:.4}", percentile_woe(&posterior, 0.05));
    println!(
        "theta_h_given_e {:.6}",
        expected_theta_h_given_e(&posterior, omega_0)
    );
    match ml_woe(&table) {
        Some(ml) => println!("omega_ml {ml:.4}"),
        None => println!("omega_ml undefined"),
    }
    println!("omega_simple {:.4}", simple_woe(&table));
    match log_odds_ratio_ase(&table) {
        Ok((log_ratio, se)) => println!("log_odds_ratio {log_ratio:.4} ase {se:.4}"),
        Err(err) => println!("log_odds_ratio undefined ({err})"),
    }
    println!("posterior segment\tcenter\twidth\tprob");
    for (i, seg) in posterior.segments.iter().enumerate() {
        println!(
            "{}\t{:.4}\t{:.4}\t{:.6}",
            i + 1,
            seg.center,
            seg.width,
            seg.prob
        );
    }
    Ok(())
}

fn protocol_name(protocol: Protocol) -> String {
    match protocol {
        Protocol::GivenK(k) => format!("given-{k}"),
        Protocol::AllBut1 => "all-but-1".to_string(),
    }
}

fn algorithm_name(algorithm: Algorithm) -> &'static str {
    match algorithm {
        Algorithm::CfwM => "cfwm",
        Algorithm::CfwP => "cfwp",
        Algorithm::Baseline => "baseline",
    }
}

fn stratum_name(stratum: Stratum) -> &'static str {
    match stratum {
        Stratum::All => "all",
        Stratum::Low => "low",
        Stratum::High => "high",
    }
}
