//! Command-line driver: config ingestion, pipeline subcommands, checkpoint
//! persistence, and CSV/JSON metric emission.

mod config;

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

use rawgrl::actor_critic::AcModel;
use rawgrl::net::generate_realization;
use rawgrl::nn::ParamStore;
use rawgrl::online::{online_csv, run_online_paired, OnlineRecord};
use rawgrl::train::{
    evaluate, pretrain_csv, pretrain_inference, train_actor_critic, train_csv, GroupPolicy,
};

use config::AppConfig;

const EXIT_CONFIG: u8 = 2;
const EXIT_IO: u8 = 3;
const EXIT_NONCONVERGENCE: u8 = 4;

#[derive(Parser)]
#[command(name = "rawgrl", about = "RAW user grouping: training, evaluation, online runs")]
struct Cli {
    /// TOML configuration file; defaults apply when omitted.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Master seed override.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory.
    #[arg(long, global = true, default_value = "out")]
    out: PathBuf,
    /// Worker threads (falls back to RAWGRL_THREADS, then 1).
    #[arg(long, global = true)]
    threads: Option<usize>,
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum OnlineMode {
    Static,
    Mobile,
}

#[derive(Subcommand)]
enum Cmd {
    /// Train the sensing-inference network.
    Pretrain,
    /// Train actor and critic starting from a pre-trained inference network.
    Train {
        /// Checkpoint holding the inference network.
        #[arg(long)]
        omega: PathBuf,
    },
    /// Evaluate grouping policies over random realizations.
    Eval {
        /// Checkpoint with all networks.
        #[arg(long)]
        ckpt: PathBuf,
        /// Comma-separated policies: proposed,rand,unif,mcon,mhid,mint.
        #[arg(long, value_delimiter = ',', default_value = "proposed,rand,unif")]
        policies: Vec<String>,
    },
    /// Paired online fine-tuning against a fixed-weights control.
    Online {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long, value_enum, default_value = "static")]
        mode: OnlineMode,
        /// Total simulated slots.
        #[arg(long, default_value_t = 2000)]
        total_slots: usize,
    },
    /// Mean throughput over a grid of user counts and group counts.
    SweepKz {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long, value_delimiter = ',')]
        k_list: Vec<usize>,
        #[arg(long, value_delimiter = ',')]
        z_list: Vec<usize>,
        #[arg(long, default_value_t = 10)]
        realizations: usize,
    },
    /// Quick end-to-end sanity check on a tiny scenario.
    Selftest,
}

fn exit_code_for(e: &rawgrl::Error) -> u8 {
    match e {
        rawgrl::Error::NonConvergence(_) => EXIT_NONCONVERGENCE,
        rawgrl::Error::Io(_) | rawgrl::Error::Serde(_) => EXIT_IO,
        _ => EXIT_CONFIG,
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(match e {
                AppError::Config(_) => EXIT_CONFIG,
                AppError::Io(_) => EXIT_IO,
                AppError::Core(ref c) => exit_code_for(c),
            })
        }
    }
}

#[derive(Debug)]
enum AppError {
    Config(String),
    Io(std::io::Error),
    Core(rawgrl::Error),
}

impl std::fmt::Display for AppError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            AppError::Config(m) => write!(f, "{m}"),
            AppError::Io(e) => write!(f, "{e}"),
            AppError::Core(e) => write!(f, "{e}"),
        }
    }
}

impl From<std::io::Error> for AppError {
    fn from(e: std::io::Error) -> Self {
        AppError::Io(e)
    }
}

impl From<rawgrl::Error> for AppError {
    fn from(e: rawgrl::Error) -> Self {
        AppError::Core(e)
    }
}

type AppResult<T> = Result<T, AppError>;

fn load_config(path: Option<&Path>, seed: Option<u64>) -> AppResult<AppConfig> {
    let mut cfg = match path {
        None => AppConfig::default(),
        Some(p) => {
            let text = std::fs::read_to_string(p).map_err(|e| {
                AppError::Config(format!("cannot read config {}: {e}", p.display()))
            })?;
            toml::from_str(&text)
                .map_err(|e| AppError::Config(format!("bad config {}: {e}", p.display())))?
        }
    };
    if let Some(s) = seed {
        cfg.train.seed = s;
        cfg.online.seed = s;
        cfg.eval.seed = s;
    }
    cfg.validate().map_err(AppError::Core)?;
    Ok(cfg)
}

fn resolve_threads(flag: Option<usize>) -> usize {
    flag.or_else(|| std::env::var("RAWGRL_THREADS").ok().and_then(|v| v.parse().ok()))
        .unwrap_or(1)
        .max(1)
}

fn write_manifest(
    out: &Path,
    phase: &str,
    cfg: &AppConfig,
    outputs: &[PathBuf],
) -> AppResult<()> {
    let config_json = serde_json::to_value(cfg).map_err(rawgrl::Error::from)?;
    let mut hasher = std::collections::hash_map::DefaultHasher::new();
    use std::hash::{Hash, Hasher};
    config_json.to_string().hash(&mut hasher);
    phase.hash(&mut hasher);
    let manifest = serde_json::json!({
        "run_id": format!("{:016x}", hasher.finish()),
        "phase": phase,
        "config": config_json,
        "outputs": outputs.iter().map(|p| p.display().to_string()).collect::<Vec<_>>(),
        "created_unix": std::time::SystemTime::now()
            .duration_since(std::time::UNIX_EPOCH)
            .map(|d| d.as_secs())
            .unwrap_or(0),
    });
    std::fs::write(out.join(format!("{phase}_manifest.json")), manifest.to_string())?;
    Ok(())
}

fn load_store(path: &Path) -> AppResult<ParamStore> {
    ParamStore::load(path).map_err(|e| match e {
        rawgrl::Error::Io(io) => {
            AppError::Config(format!("cannot read checkpoint {}: {io}", path.display()))
        }
        other => AppError::Core(other),
    })
}

fn run(cli: Cli) -> AppResult<()> {
    let cfg = load_config(cli.config.as_deref(), cli.seed)?;
    std::fs::create_dir_all(&cli.out)?;
    let out = cli.out.as_path();
    let threads = resolve_threads(cli.threads);
    match cli.cmd {
        Cmd::Pretrain => cmd_pretrain(&cfg, out),
        Cmd::Train { omega } => cmd_train(&cfg, &omega, out),
        Cmd::Eval { ckpt, policies } => cmd_eval(&cfg, &ckpt, &policies, out, threads),
        Cmd::Online { ckpt, mode, total_slots } => {
            cmd_online(&cfg, &ckpt, mode, total_slots, out)
        }
        Cmd::SweepKz { ckpt, k_list, z_list, realizations } => {
            cmd_sweep_kz(&cfg, &ckpt, &k_list, &z_list, realizations, out, threads)
        }
        Cmd::Selftest => cmd_selftest(),
    }
}

fn cmd_pretrain(cfg: &AppConfig, out: &Path) -> AppResult<()> {
    let model = AcModel::new(cfg.scenario.num_aps());
    let mut store = ParamStore::new();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.train.seed);
    model.init_omega(&mut store, &mut rng);
    let log = pretrain_inference(&model, &mut store, &cfg.train, &cfg.scenario, Some(out))
        .map_err(AppError::Core)?;
    let ckpt = out.join("omega.json");
    store.save(&ckpt).map_err(AppError::Core)?;
    let log_path = out.join("pretrain_log.csv");
    std::fs::write(&log_path, pretrain_csv(&log))?;
    write_manifest(out, "pretrain", cfg, &[ckpt, log_path])?;
    Ok(())
}

fn cmd_train(cfg: &AppConfig, omega: &Path, out: &Path) -> AppResult<()> {
    let model = AcModel::new(cfg.scenario.num_aps());
    let mut store = load_store(omega)?;
    if store.get("omega.w0").map(|t| t.shape.first().copied()).unwrap_or(None)
        != Some(2 * cfg.scenario.num_aps())
    {
        return Err(AppError::Config(format!(
            "checkpoint {} does not match an inference network for {} APs",
            omega.display(),
            cfg.scenario.num_aps()
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.train.seed.wrapping_add(1));
    model.init_actor_critic(&mut store, &mut rng);
    let log = train_actor_critic(&model, &mut store, &cfg.train, &cfg.scenario, &cfg.mac, Some(out))
        .map_err(AppError::Core)?;
    let ckpt = out.join("actor_critic.json");
    store.save(&ckpt).map_err(AppError::Core)?;
    let log_path = out.join("train_log.csv");
    std::fs::write(&log_path, train_csv(&log))?;
    write_manifest(out, "train", cfg, &[ckpt, log_path])?;
    Ok(())
}

fn cmd_eval(
    cfg: &AppConfig,
    ckpt: &Path,
    policies: &[String],
    out: &Path,
    threads: usize,
) -> AppResult<()> {
    let store = load_store(ckpt)?;
    let model = AcModel::new(cfg.scenario.num_aps());
    let parsed: Vec<GroupPolicy> = policies
        .iter()
        .map(|p| p.parse().map_err(AppError::Core))
        .collect::<AppResult<_>>()?;
    let mut results: Vec<(GroupPolicy, rawgrl::train::EvalSummary)> = Vec::new();
    let chunks: Vec<Vec<GroupPolicy>> =
        parsed.chunks(threads.max(1)).map(|c| c.to_vec()).collect();
    for chunk in chunks {
        let outs = std::thread::scope(|scope| {
            let handles: Vec<_> = chunk
                .iter()
                .map(|&policy| {
                    let (model, store, cfg) = (&model, &store, cfg);
                    scope.spawn(move || {
                        evaluate(
                            policy,
                            model,
                            store,
                            &cfg.scenario,
                            &cfg.mac,
                            cfg.eval.realizations,
                            cfg.eval.sim_slots,
                            cfg.eval.seed,
                        )
                        .map(|s| (policy, s))
                    })
                })
                .collect();
            handles.into_iter().map(|h| h.join().expect("eval worker")).collect::<Vec<_>>()
        });
        for r in outs {
            results.push(r.map_err(AppError::Core)?);
        }
    }
    let mut outputs = Vec::new();
    let mut summary = serde_json::Map::new();
    for (policy, s) in &results {
        let path = out.join(format!("eval_{policy}_cdf.csv"));
        std::fs::write(&path, s.cdf_csv())?;
        summary.insert(
            policy.to_string(),
            serde_json::json!({ "mean_worst": s.mean_worst, "mean_total": s.mean_total }),
        );
        outputs.push(path);
    }
    let summary_path = out.join("eval_summary.json");
    std::fs::write(&summary_path, serde_json::Value::Object(summary).to_string())?;
    outputs.push(summary_path);
    write_manifest(out, "eval", cfg, &outputs)?;
    Ok(())
}

fn paired_csv(tuned: &[OnlineRecord], fixed: &[OnlineRecord]) -> String {
    let mut csv =
        String::from("update_index,k_star,tuned_min,tuned_mean,fixed_min,fixed_mean,ratio\n");
    for (t, f) in tuned.iter().zip(fixed) {
        let ratio = if f.worst > 0.0 { t.worst / f.worst } else { f64::NAN };
        csv.push_str(&format!(
            "{},{},{},{},{},{},{}\n",
            t.update, t.k_star, t.worst, t.mean, f.worst, f.mean, ratio
        ));
    }
    csv
}

fn cmd_online(
    cfg: &AppConfig,
    ckpt: &Path,
    mode: OnlineMode,
    total_slots: usize,
    out: &Path,
) -> AppResult<()> {
    let store = load_store(ckpt)?;
    let mut scenario = cfg.scenario.clone();
    if mode == OnlineMode::Mobile {
        scenario.mobility_speed = 2.0;
    }
    let model = AcModel::new(scenario.num_aps());
    let real = generate_realization(&scenario, cfg.online.seed).map_err(AppError::Core)?;
    let (tuned, fixed) =
        run_online_paired(&real, &model, &store, &cfg.online, &scenario, &cfg.mac, total_slots)
            .map_err(AppError::Core)?;
    let mode_name = if mode == OnlineMode::Mobile { "mobile" } else { "static" };
    let paired_path = out.join(format!("online_{mode_name}.csv"));
    std::fs::write(&paired_path, paired_csv(&tuned, &fixed))?;
    let tuned_path = out.join(format!("online_{mode_name}_tuned.csv"));
    std::fs::write(&tuned_path, online_csv(&tuned))?;
    let mut cfg_snapshot = cfg.clone();
    cfg_snapshot.scenario = scenario;
    write_manifest(out, &format!("online_{mode_name}"), &cfg_snapshot, &[paired_path, tuned_path])?;
    Ok(())
}

fn cmd_sweep_kz(
    cfg: &AppConfig,
    ckpt: &Path,
    k_list: &[usize],
    z_list: &[usize],
    realizations: usize,
    out: &Path,
    threads: usize,
) -> AppResult<()> {
    if k_list.is_empty() || z_list.is_empty() {
        return Err(AppError::Config("k-list and z-list must be nonempty".into()));
    }
    for &z in z_list {
        if !z.is_power_of_two() {
            return Err(AppError::Config(format!("group count {z} is not a power of 2")));
        }
    }
    let store = load_store(ckpt)?;
    let model = AcModel::new(cfg.scenario.num_aps());
    let cells: Vec<(usize, usize)> =
        k_list.iter().flat_map(|&k| z_list.iter().map(move |&z| (k, z))).collect();
    let mut rows: Vec<(usize, usize, f64, f64)> = Vec::new();
    for chunk in cells.chunks(threads.max(1)) {
        let outs = std::thread::scope(|scope| {
            let handles: Vec<_> = chunk
                .iter()
                .map(|&(k, z)| {
                    let (model, store, cfg) = (&model, &store, cfg);
                    scope.spawn(move || {
                        let scenario = rawgrl::net::ScenarioConfig {
                            num_users: k,
                            num_groups: z,
                            ..cfg.scenario.clone()
                        };
                        evaluate(
                            GroupPolicy::Proposed,
                            model,
                            store,
                            &scenario,
                            &cfg.mac,
                            realizations,
                            cfg.eval.sim_slots,
                            cfg.eval.seed,
                        )
                        .map(|s| (k, z, s.mean_worst, s.mean_total))
                    })
                })
                .collect();
            handles.into_iter().map(|h| h.join().expect("sweep worker")).collect::<Vec<_>>()
        });
        for r in outs {
            rows.push(r.map_err(AppError::Core)?);
        }
    }
    let mut csv = String::from("num_users,num_groups,mean_worst,mean_total\n");
    for (k, z, worst, total) in rows {
        csv.push_str(&format!("{k},{z},{worst},{total}\n"));
    }
    let path = out.join("sweep_kz.csv");
    std::fs::write(&path, csv)?;
    write_manifest(out, "sweep_kz", cfg, &[path])?;
    Ok(())
}

fn cmd_selftest() -> AppResult<()> {
    let scenario = rawgrl::net::ScenarioConfig {
        num_users: 4,
        num_groups: 2,
        ..rawgrl::net::ScenarioConfig::default()
    };
    let model = AcModel::new(scenario.num_aps());
    let mut store = ParamStore::new();
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    model.init_all(&mut store, &mut rng);
    let tcfg = rawgrl::train::TrainConfig {
        steps: 2,
        sim_slots: 10,
        ..rawgrl::train::TrainConfig::default()
    };
    pretrain_inference(&model, &mut store, &tcfg, &scenario, None).map_err(AppError::Core)?;
    let mac = rawgrl::sim::MacConfig::default();
    train_actor_critic(&model, &mut store, &tcfg, &scenario, &mac, None)
        .map_err(AppError::Core)?;
    let summary =
        evaluate(GroupPolicy::Proposed, &model, &store, &scenario, &mac, 1, 10, 0)
            .map_err(AppError::Core)?;
    if !summary.mean_worst.is_finite() {
        return Err(AppError::Config("selftest produced a non-finite metric".into()));
    }
    println!("selftest ok");
    Ok(())
}
