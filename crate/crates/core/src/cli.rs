//! Command-line surface. Every subcommand reads the same flat
//! configuration (`--config <file>` then repeated `--set key=value`).
//!
//! Success prints one JSON summary line on stdout and exits 0. Failures
//! print one line `error: kind=<kind> msg=<message>` on stderr and exit 2
//! for usage errors, 1 otherwise.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Args, CommandFactory, FromArgMatches, Parser, Subcommand};
use serde_json::json;

use crate::analysis::{
    frontier_stats, heatmap_rows, mask_selectivity, missing_betas, preference_accuracy, sparsity_rows, write_frontier,
    write_heatmap, write_sparsity, FrontierPoint, DEFAULT_BETA_GRID,
};
use crate::config::{schema_help, Config};
use crate::data::{generate_dataset, make_sft_corpus, Dataset, SftCorpus};
use crate::error::{Error, Result};
use crate::losses::Method;
use crate::masks::MaskKind;
use crate::model::TransformerLM;
use crate::train::{
    list_checkpoints, load_checkpoint, read_metrics, run_po, run_sft, LoadedCheckpoint, PoInit, RunInfo,
};

#[derive(Parser, Debug)]
#[command(name = "sparsepo", version, about = "Token-level preference optimization with sparse masks on a toy transformer")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug)]
struct Common {
    /// Config file with `key = value` lines.
    #[arg(long, value_name = "FILE")]
    config: Option<PathBuf>,
    /// Override one key; repeatable, applied after the file.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
}

#[derive(Args, Debug)]
struct PoArgs {
    #[command(flatten)]
    common: Common,
    /// Objective; overrides the `method` key.
    #[arg(long, value_name = "METHOD")]
    method: Option<String>,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate a synthetic preference (or SFT) dataset file.
    GenData(Common),
    /// Supervised fine-tuning on chosen-style sequences.
    Sft(Common),
    /// Preference optimization with the chosen method.
    Po(PoArgs),
    /// Held-out preference accuracy (and mask selectivity for masked methods).
    Eval(Common),
    /// Expected reward vs. response-level KL for every checkpoint of the given runs.
    Frontier(Common),
    /// Per-token reward and KL, raw and masked, scaled to [0, 1].
    Heatmap(Common),
    /// Sparsity and token-level KL series for a beta sweep.
    SparsityReport(Common),
}

fn one_line(s: &str) -> String {
    s.split_whitespace().collect::<Vec<_>>().join(" ")
}

/// Parses `argv` (including the program name), runs the command and
/// returns the process exit code.
pub fn run(argv: &[String]) -> i32 {
    let help = schema_help();
    let cmd = Cli::command()
        .after_help(help.clone())
        .mut_subcommands(|s| s.after_help(help.clone()));
    let matches = match cmd.try_get_matches_from(argv) {
        Ok(m) => m,
        Err(e) => {
            use clap::error::ErrorKind;
            if matches!(e.kind(), ErrorKind::DisplayHelp | ErrorKind::DisplayVersion) {
                let _ = e.print();
                return 0;
            }
            if e.kind() == ErrorKind::DisplayHelpOnMissingArgumentOrSubcommand {
                let _ = e.print();
                return 2;
            }
            let msg = e.to_string();
            let first = msg.lines().next().unwrap_or("").trim_start_matches("error: ");
            eprintln!("error: kind=usage msg={}", one_line(first));
            return 2;
        }
    };
    let cli = match Cli::from_arg_matches(&matches) {
        Ok(c) => c,
        Err(e) => {
            eprintln!("error: kind=usage msg={}", one_line(&e.to_string()));
            return 2;
        }
    };
    match dispatch(cli.command) {
        Ok(summary) => {
            println!("{summary}");
            0
        }
        Err(e) => {
            eprintln!("error: kind={} msg={}", e.kind(), one_line(&e.to_string()));
            if e.kind() == "usage" {
                2
            } else {
                1
            }
        }
    }
}

fn load_config(c: &Common) -> Result<Config> {
    Config::load(c.config.as_deref(), &c.set)
}

fn dispatch(cmd: Command) -> Result<serde_json::Value> {
    match cmd {
        Command::GenData(c) => gen_data(&load_config(&c)?),
        Command::Sft(c) => sft(&load_config(&c)?),
        Command::Po(a) => {
            let cfg = load_config(&a.common)?;
            let method = match a.method.as_deref() {
                Some(m) => Method::parse(m).ok_or_else(|| {
                    let all: Vec<&str> = Method::ALL.iter().map(|m| m.name()).collect();
                    Error::Usage(format!("unknown method '{m}' (expected one of {})", all.join(", ")))
                })?,
                None => cfg.method()?,
            };
            po(&cfg, method)
        }
        Command::Eval(c) => eval(&load_config(&c)?),
        Command::Frontier(c) => frontier(&load_config(&c)?),
        Command::Heatmap(c) => heatmap(&load_config(&c)?),
        Command::SparsityReport(c) => sparsity_report(&load_config(&c)?),
    }
}

fn train_pairs(cfg: &Config) -> Result<Dataset> {
    match cfg.path("data.train") {
        Some(p) => Dataset::load(&p),
        None => generate_dataset(&cfg.vocab_spec()?, &cfg.gen_config()?),
    }
}

fn eval_pairs(cfg: &Config) -> Result<Dataset> {
    match cfg.path("data.eval") {
        Some(p) => Dataset::load(&p),
        None => generate_dataset(&cfg.vocab_spec()?, &cfg.eval_gen_config()?),
    }
}

fn init_model(cfg: &Config) -> Result<TransformerLM> {
    match cfg.path("init") {
        Some(p) => TransformerLM::load(&p),
        None => TransformerLM::new(cfg.model_config()?),
    }
}

fn gen_data(cfg: &Config) -> Result<serde_json::Value> {
    let spec = cfg.vocab_spec()?;
    let gen = cfg.gen_config()?;
    let kind = cfg.raw("data.kind").to_string();
    let out = cfg
        .path("data.out")
        .unwrap_or_else(|| cfg.out_dir().join(format!("{kind}.jsonl")));
    if kind == "sft" {
        make_sft_corpus(&spec, &gen)?.save(&out)?;
    } else {
        generate_dataset(&spec, &gen)?.save(&out)?;
    }
    Ok(json!({"command": "gen-data", "kind": kind, "records": gen.n, "out": out}))
}

fn sft(cfg: &Config) -> Result<serde_json::Value> {
    let corpus = match cfg.path("data.train") {
        Some(p) => SftCorpus::load(&p)?,
        None => make_sft_corpus(&cfg.vocab_spec()?, &cfg.gen_config()?)?,
    };
    let model = init_model(cfg)?;
    let log = run_sft(&model, &corpus, &cfg.sft_config()?)?;
    let dir = cfg.out_dir();
    fs::create_dir_all(&dir)?;
    let ckpt = dir.join("sft.ckpt");
    model.save(&ckpt)?;
    let mut f = fs::File::create(dir.join("sft_log.jsonl"))?;
    for r in &log {
        serde_json::to_writer(&mut f, r)?;
        writeln!(f)?;
    }
    Ok(json!({
        "command": "sft",
        "steps": log.last().map_or(0, |r| r.step + 1),
        "final_loss": log.last().map(|r| r.loss),
        "checkpoint": ckpt,
    }))
}

fn po(cfg: &Config, method: Method) -> Result<serde_json::Value> {
    let data = train_pairs(cfg)?;
    let sweep = cfg.float_list("betas")?;
    let betas = if sweep.is_empty() {
        vec![cfg.float("beta")?]
    } else {
        sweep.clone()
    };
    let mut runs = Vec::new();
    for beta in betas {
        let train = cfg.train_config(method, beta)?;
        let run_dir = if sweep.is_empty() {
            cfg.out_dir()
        } else {
            cfg.out_dir().join(format!("beta_{beta}"))
        };
        let init = match cfg.path("resume") {
            Some(p) if p.as_os_str() == "latest" => {
                let (_, latest) = list_checkpoints(&run_dir)?
                    .pop()
                    .ok_or_else(|| Error::Checkpoint(format!("no checkpoints in {}", run_dir.display())))?;
                PoInit::Resume(latest)
            }
            Some(p) => PoInit::Resume(p),
            None => PoInit::Model(init_model(cfg)?),
        };
        let out = run_po(init, &data, &train, &run_dir)?;
        runs.push(json!({
            "run_dir": run_dir,
            "beta": beta,
            "steps_done": out.steps_done,
            "total_steps": out.total_steps,
            "final_loss": out.metrics.last().map(|m| m.loss),
        }));
    }
    Ok(json!({"command": "po", "method": method.name(), "runs": runs}))
}

/// A step checkpoint path, or the newest checkpoint of a run directory.
fn resolve_checkpoint(p: &Path) -> Result<PathBuf> {
    if p.is_dir() {
        return list_checkpoints(p)?
            .pop()
            .map(|(_, path)| path)
            .ok_or_else(|| Error::Checkpoint(format!("no checkpoints in {}", p.display())));
    }
    Ok(p.to_path_buf())
}

fn load_policy_and_reference(cfg: &Config, policy: &Path) -> Result<(LoadedCheckpoint, TransformerLM)> {
    let ckpt = resolve_checkpoint(policy)?;
    let loaded = load_checkpoint(&ckpt, cfg.u64("seed")?, cfg.mapo_sites()?.as_deref())?;
    let ref_path = cfg.path("reference").unwrap_or_else(|| {
        ckpt.parent()
            .map(|d| d.join("reference.ckpt"))
            .unwrap_or_else(|| PathBuf::from("reference.ckpt"))
    });
    let reference = TransformerLM::load(&ref_path)?.frozen_copy();
    Ok((loaded, reference))
}

fn policy_path(cfg: &Config) -> PathBuf {
    cfg.path("policy").unwrap_or_else(|| cfg.out_dir())
}

fn eval(cfg: &Config) -> Result<serde_json::Value> {
    let (ck, reference) = load_policy_and_reference(cfg, &policy_path(cfg))?;
    let data = eval_pairs(cfg)?;
    let loss = cfg.loss_config(ck.method, ck.beta)?;
    let acc = preference_accuracy(&ck.policy, &reference, &data, &loss)?;
    let selectivity = match ck.method.mask_kind() {
        Some(k) if k != MaskKind::AllOnes => Some(mask_selectivity(&reference, &ck.strategy, loss.epsilon, &data)?),
        _ => None,
    };
    let report = json!({
        "command": "eval",
        "method": ck.method.name(),
        "beta": ck.beta,
        "step": ck.step,
        "accuracy": acc.accuracy,
        "n_pairs": acc.n_pairs,
        "n_ties": acc.n_ties,
        "selectivity": selectivity,
    });
    if let Some(out) = cfg.path("eval.out") {
        if let Some(dir) = out.parent().filter(|d| !d.as_os_str().is_empty()) {
            fs::create_dir_all(dir)?;
        }
        fs::write(&out, serde_json::to_string_pretty(&report)?)?;
    }
    Ok(report)
}

/// Run directories named by `key`, or `out_dir` itself, expanding any
/// directory that holds runs in subdirectories (a beta sweep).
fn expand_runs(cfg: &Config, key: &str) -> Result<Vec<PathBuf>> {
    let roots: Vec<PathBuf> = {
        let l = cfg.list(key);
        if l.is_empty() {
            vec![cfg.out_dir()]
        } else {
            l.into_iter().map(PathBuf::from).collect()
        }
    };
    let mut runs = Vec::new();
    for root in roots {
        if root.join("run.json").is_file() {
            runs.push(root);
            continue;
        }
        let mut subs: Vec<PathBuf> = fs::read_dir(&root)
            .map_err(|e| Error::Analysis(format!("{}: {e}", root.display())))?
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| p.join("run.json").is_file())
            .collect();
        if subs.is_empty() {
            return Err(Error::Analysis(format!("{} holds no PO runs", root.display())));
        }
        subs.sort();
        runs.extend(subs);
    }
    Ok(runs)
}

fn run_name(p: &Path) -> String {
    p.file_name()
        .map(|n| n.to_string_lossy().into_owned())
        .unwrap_or_else(|| p.display().to_string())
}

fn frontier(cfg: &Config) -> Result<serde_json::Value> {
    let runs = expand_runs(cfg, "frontier.runs")?;
    let data = eval_pairs(cfg)?;
    let n = cfg.uint("frontier.n_prompts")?.min(data.len());
    let prompts: Vec<Vec<usize>> = data.pairs[..n].iter().map(|p| p.prompt.clone()).collect();
    let sampler = cfg.sampler_config()?;
    let seed = cfg.u64("seed")?;
    let mut points = Vec::new();
    for run in &runs {
        let info = RunInfo::load(run)?;
        let reference = TransformerLM::load(&run.join("reference.ckpt"))?.frozen_copy();
        for (step, path) in list_checkpoints(run)? {
            let ck = load_checkpoint(&path, seed, cfg.mapo_sites()?.as_deref())?;
            let (mean_reward, mean_kl, n_truncated) =
                frontier_stats(&ck.policy, &reference, &data.spec, &prompts, &sampler, seed)?;
            points.push(FrontierPoint {
                run: run_name(run),
                beta: info.beta,
                step,
                mean_reward,
                mean_kl,
                n_prompts: prompts.len(),
                n_truncated,
            });
        }
    }
    let out = cfg.path("frontier.out").unwrap_or_else(|| cfg.out_dir().join("frontier.csv"));
    write_frontier(&out, &points)?;
    Ok(json!({"command": "frontier", "rows": points.len(), "runs": runs.len(), "out": out}))
}

fn heatmap(cfg: &Config) -> Result<serde_json::Value> {
    let (ck, reference) = load_policy_and_reference(cfg, &policy_path(cfg))?;
    let data = eval_pairs(cfg)?;
    let loss = cfg.loss_config(ck.method, ck.beta)?;
    let mut rows = Vec::new();
    for i in cfg.uint_list("heatmap.pairs")? {
        let pair = data
            .pairs
            .get(i)
            .ok_or_else(|| Error::Analysis(format!("pair index {i} out of range ({} pairs)", data.len())))?;
        rows.extend(heatmap_rows(&ck.policy, &reference, &ck.strategy, &loss, &data.spec, pair, i)?);
    }
    let out = cfg.path("heatmap.out").unwrap_or_else(|| cfg.out_dir().join("heatmap.jsonl"));
    write_heatmap(&out, ck.method, &rows)?;
    Ok(json!({"command": "heatmap", "rows": rows.len(), "out": out}))
}

fn sparsity_report(cfg: &Config) -> Result<serde_json::Value> {
    let runs = expand_runs(cfg, "report.runs")?;
    let mut rows = Vec::new();
    let mut present = Vec::new();
    for run in &runs {
        let info = RunInfo::load(run)?;
        let metrics = read_metrics(&run.join("metrics.jsonl"))?;
        present.push(info.beta);
        rows.extend(sparsity_rows(info.beta, &metrics));
    }
    let grid = {
        let g = cfg.float_list("report.betas")?;
        if g.is_empty() {
            DEFAULT_BETA_GRID.to_vec()
        } else {
            g
        }
    };
    let missing = missing_betas(&grid, &present);
    for b in &missing {
        eprintln!("missing beta: {b}");
    }
    let out = cfg.path("report.out").unwrap_or_else(|| cfg.out_dir().join("sparsity.csv"));
    write_sparsity(&out, &rows)?;
    Ok(json!({"command": "sparsity-report", "rows": rows.len(), "missing_betas": missing, "out": out}))
}
