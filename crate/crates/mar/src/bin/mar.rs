//! Command-line runner: synthetic data generation, the two training phases,
//! retrieval evaluation, mined-pair inspection and hyperparameter sweeps.
//!
//! Exit statuses: 1 for usage/config errors, 2 for data errors, 3 for
//! numerical failures.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use mar::agents::AgentBank;
use mar::data;
use mar::encoder::EncoderParams;
use mar::error::{MarError, Result};
use mar::evalset;
use mar::geometry::{self, UnitVector};
use mar::mining;
use mar::softlabel::{self, SoftMultilabel};
use mar::trainer::{self, Phase};
use mar::{FullConfig, MiningMode};

#[derive(Parser)]
#[command(name = "mar", version, about = "Soft multilabel guided cross-view embedding learning")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(clap::Args)]
struct ConfigArgs {
    /// Config file of `key = value` lines; defaults apply when omitted.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Point overrides applied after the config file, e.g. `--set lambda2=25`.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    sets: Vec<String>,
}

#[derive(Subcommand)]
enum Cmd {
    /// Generate a synthetic target/auxiliary dataset pair.
    Synth {
        #[command(flatten)]
        config: ConfigArgs,
        /// Shortcut for `--set seed=...`.
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Run only the agent-loss pretraining phase and freeze the scale.
    Pretrain {
        #[command(flatten)]
        config: ConfigArgs,
        #[arg(long)]
        target: PathBuf,
        #[arg(long)]
        aux: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Run the full schedule: pretraining, scale freezing, constrained training.
    Train {
        #[command(flatten)]
        config: ConfigArgs,
        #[arg(long)]
        target: PathBuf,
        #[arg(long)]
        aux: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Score a checkpoint on a labeled dataset (rank-1/5/10 and mAP).
    Eval {
        /// Encoder checkpoint.
        #[arg(long)]
        encoder: PathBuf,
        /// Labeled dataset file.
        #[arg(long)]
        data: PathBuf,
        /// CMC ranks to report.
        #[arg(long, default_value = "1,5,10", value_delimiter = ',')]
        ks: Vec<usize>,
    },
    /// Dump one batch's mined pairs as CSV.
    MineReport {
        #[command(flatten)]
        config: ConfigArgs,
        #[arg(long)]
        encoder: PathBuf,
        #[arg(long)]
        agents: PathBuf,
        /// Frozen logit scale (see scale.txt in a run directory).
        #[arg(long)]
        scale: f64,
        #[arg(long)]
        target: PathBuf,
        /// Output CSV path.
        #[arg(long)]
        out: PathBuf,
    },
    /// Rerun training over a grid of values for one config key.
    Sweep {
        #[command(flatten)]
        config: ConfigArgs,
        /// Config key to vary (any train or synthetic-data key).
        #[arg(long)]
        param: String,
        /// Comma-separated values for the key.
        #[arg(long, value_delimiter = ',')]
        values: Vec<String>,
        #[arg(long)]
        out: PathBuf,
    },
}

fn exit_code(e: &MarError) -> u8 {
    match e {
        MarError::Config(_) | MarError::InvalidSpec(_) => 1,
        MarError::NumericalFailure(_) | MarError::NonFiniteActivation => 3,
        _ => 2,
    }
}

fn load_config(args: &ConfigArgs) -> Result<FullConfig> {
    let mut cfg = match &args.config {
        Some(path) => FullConfig::load(path)?,
        None => FullConfig::default(),
    };
    for s in &args.sets {
        let (k, v) = s
            .split_once('=')
            .ok_or_else(|| MarError::Config(format!("--set expects KEY=VALUE, got `{s}`")))?;
        cfg.set(k.trim(), v.trim())?;
    }
    cfg.train.validate()?;
    cfg.synth.validate()?;
    Ok(cfg)
}

fn write_run_file(dir: &Path, name: &str, contents: &str) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    Ok(std::fs::write(dir.join(name), contents)?)
}

fn save_state(dir: &Path, tag: &str, state: &trainer::TrainState) -> Result<()> {
    state.encoder.save(&dir.join(format!("encoder_{tag}.bin")))?;
    state.agents.save(&dir.join(format!("agents_{tag}.bin")))
}

fn run_training(
    cfg: &FullConfig,
    target: &Path,
    aux: &Path,
    out: &Path,
    full: bool,
) -> Result<()> {
    let target = data::load(target)?;
    let aux = data::load(aux)?;
    std::fs::create_dir_all(out)?;
    write_run_file(out, "config.txt", &cfg.resolved_text())?;

    let mut pretrain_cfg = cfg.train.clone();
    pretrain_cfg.train_epochs = 0;
    if pretrain_cfg.pretrain_epochs == 0 && pretrain_cfg.scale_override.is_none() {
        return Err(MarError::Config(
            "pretrain_epochs = 0 requires scale_override".into(),
        ));
    }
    let (pre_state, pre_records) = trainer::train(&pretrain_cfg, &target, &aux)?;
    write_run_file(out, "pretrain_metrics.csv", &trainer::metrics_csv(&pre_records))?;
    save_state(out, "pretrain", &pre_state)?;

    if full {
        let (state, records) = trainer::train(&cfg.train, &target, &aux)?;
        let constrained: Vec<_> = records
            .iter()
            .filter(|r| r.phase == Phase::Constrained)
            .cloned()
            .collect();
        write_run_file(out, "metrics.csv", &trainer::metrics_csv(&constrained))?;
        save_state(out, "final", &state)?;
        write_run_file(out, "scale.txt", &format!("scale = {}\n", state.scale))?;
    } else {
        write_run_file(out, "scale.txt", &format!("scale = {}\n", pre_state.scale))?;
    }
    Ok(())
}

fn cmd_synth(args: &ConfigArgs, seed: Option<u64>, out: &Path) -> Result<()> {
    let mut cfg = load_config(args)?;
    if let Some(s) = seed {
        cfg.set("seed", &s.to_string())?;
    }
    let (target, aux) = data::generate(&cfg.synth)?;
    std::fs::create_dir_all(out)?;
    data::save(&out.join("target.txt"), &target)?;
    data::save(&out.join("aux.txt"), &aux)?;
    write_run_file(out, "config.txt", &cfg.resolved_text())?;
    println!(
        "wrote {} target and {} auxiliary rows to {}",
        target.len(),
        aux.len(),
        out.display()
    );
    Ok(())
}

fn cmd_eval(encoder: &Path, dataset: &Path, ks: &[usize]) -> Result<()> {
    let encoder = EncoderParams::load(encoder)?;
    let ds = data::load(dataset)?;
    let set = trainer::embed_dataset(&encoder, &ds)?;
    let report = evalset::cmc_map(&set, &set, ks)?;
    for (k, acc) in &report.cmc {
        println!("rank{k} = {acc}");
    }
    println!("map = {}", report.map);
    println!("evaluated_probes = {}", report.evaluated_probes);
    println!("skipped_probes = {}", report.skipped_probes);
    Ok(())
}

fn cmd_mine_report(
    args: &ConfigArgs,
    encoder: &Path,
    agents: &Path,
    scale: f64,
    target: &Path,
    out: &Path,
) -> Result<()> {
    if !(scale > 0.0 && scale.is_finite()) {
        return Err(MarError::InvalidScale(scale));
    }
    let cfg = load_config(args)?;
    let encoder = EncoderParams::load(encoder)?;
    let bank = AgentBank::load(agents, true)?;
    let ds = data::load(target)?;

    let (idx, _) = trainer::compose_batch(cfg.train.seed, 0, cfg.train.batch_size, ds.len(), 1)?;
    let embeddings: Vec<UnitVector> = idx
        .iter()
        .map(|&i| Ok(UnitVector::from_unit(encoder.forward(&ds.features[i], true)?.embedding)))
        .collect::<Result<_>>()?;
    let sims = geometry::pairwise_similarities(&embeddings)?;
    let labels: Vec<SoftMultilabel> = embeddings
        .iter()
        .map(|u| softlabel::soft_multilabel(u.coords(), &bank, scale))
        .collect::<Result<_>>()?;
    let agreements = geometry::SimilarityTable::from_fn(labels.len(), |i, j| {
        softlabel::agreement(&labels[i], &labels[j]).expect("equal label dims")
    })?;
    let sets = match cfg.train.mining {
        MiningMode::Guided => {
            let thresholds = mining::compute_thresholds(&sims, &agreements, cfg.train.p)?;
            mining::build_sets(&sims, &agreements, &thresholds)
        }
        MiningMode::Baseline => mining::baseline_sets(&sims, cfg.train.p)?,
    };
    let mut tag = vec!["none"; sims.len()];
    for &(i, j) in &sets.positives {
        tag[sims.pair_index(i, j)] = "P";
    }
    for &(i, j) in &sets.hard_negatives {
        tag[sims.pair_index(i, j)] = "N";
    }
    let mut csv = String::from("pair_i,pair_j,similarity,agreement,set\n");
    for (i, j, s) in sims.iter_pairs() {
        csv.push_str(&format!(
            "{},{},{},{},{}\n",
            idx[i],
            idx[j],
            s,
            agreements.get(i, j),
            tag[sims.pair_index(i, j)]
        ));
    }
    if let Some(dir) = out.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir)?;
    }
    std::fs::write(out, csv)?;
    println!(
        "wrote {} pairs ({} positive, {} hard negative) to {}",
        sims.len(),
        sets.positives.len(),
        sets.hard_negatives.len(),
        out.display()
    );
    Ok(())
}

fn cmd_sweep(args: &ConfigArgs, param: &str, values: &[String], out: &Path) -> Result<()> {
    if values.is_empty() {
        return Err(MarError::Config("--values must list at least one value".into()));
    }
    let base = load_config(args)?;
    std::fs::create_dir_all(out)?;
    let mut summary = format!("{param},rank1,map,final_total\n");
    for value in values {
        let mut cfg = base.clone();
        cfg.set(param, value)?;
        cfg.train.validate()?;
        cfg.synth.validate()?;
        let (target, aux) = data::generate(&cfg.synth)?;
        let (state, records) = trainer::train(&cfg.train, &target, &aux)?;
        let set = trainer::embed_dataset(&state.encoder, &target)?;
        let report = evalset::cmc_map(&set, &set, &[1])?;
        let total = records.last().map(|r| r.losses.total).unwrap_or(f64::NAN);
        summary.push_str(&format!("{},{},{},{}\n", value, report.cmc[0].1, report.map, total));

        let run_dir = out.join(format!("{param}_{value}"));
        write_run_file(&run_dir, "config.txt", &cfg.resolved_text())?;
        write_run_file(&run_dir, "metrics.csv", &trainer::metrics_csv(&records))?;
        println!("{param} = {value}: rank1 = {}, map = {}", report.cmc[0].1, report.map);
    }
    write_run_file(out, "summary.csv", &summary)?;
    Ok(())
}

fn run(cli: &Cli) -> Result<()> {
    match &cli.cmd {
        Cmd::Synth { config, seed, out } => cmd_synth(config, *seed, out),
        Cmd::Pretrain { config, target, aux, out } => {
            run_training(&load_config(config)?, target, aux, out, false)
        }
        Cmd::Train { config, target, aux, out } => {
            run_training(&load_config(config)?, target, aux, out, true)
        }
        Cmd::Eval { encoder, data, ks } => cmd_eval(encoder, data, ks),
        Cmd::MineReport { config, encoder, agents, scale, target, out } => {
            cmd_mine_report(config, encoder, agents, *scale, target, out)
        }
        Cmd::Sweep { config, param, values, out } => cmd_sweep(config, param, values, out),
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            // Help and version requests are not usage errors.
            use clap::error::ErrorKind;
            let kind = e.kind();
            let _ = e.print();
            return if matches!(kind, ErrorKind::DisplayHelp | ErrorKind::DisplayVersion) {
                ExitCode::SUCCESS
            } else {
                ExitCode::from(1)
            };
        }
    };
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}
