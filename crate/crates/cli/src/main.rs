//! `moh` command-line entry point: train, eval, convert, bench, analyze.

use std::fs::File;
use std::io::BufWriter;
use std::path::PathBuf;

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand};

use moh_core::analysis::{
    attention_pattern_similarity, head_load_density, output_feature_cosine, write_head_load_csv,
    write_similarity_csv,
};
use moh_core::attention::{attention_patterns, head_features};
use moh_core::checkpoint::{load_checkpoint, save_checkpoint, Checkpoint};
use moh_core::config::{load_task_spec, load_train_config};
use moh_core::moh::RouterMode;
use moh_core::sparse::{benchmark_inference, format_bench_table, write_bench_csv};
use moh_core::task::gen_task;
use moh_core::train::{evaluate, train, write_metrics_csv, ModelMode};

#[derive(Parser)]
#[command(name = "moh", about = "Mixture-of-Head attention workbench", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train a model on a synthetic task and write a checkpoint.
    Train {
        /// Training config (flat key=value file).
        #[arg(long)]
        config: PathBuf,
        /// Task spec (flat key=value file).
        #[arg(long)]
        task: PathBuf,
        /// Output checkpoint path.
        #[arg(long)]
        out: PathBuf,
        /// Metrics log CSV path.
        #[arg(long)]
        log: PathBuf,
    },
    /// Evaluate a checkpoint on a task's held-out split.
    Eval {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        task: PathBuf,
    },
    /// Retrofit a dense checkpoint into a parameter-free MoH checkpoint.
    Convert {
        #[arg(long)]
        ckpt: PathBuf,
        /// Leading heads kept always-on.
        #[arg(long)]
        shared: usize,
        /// Routed heads activated per token.
        #[arg(long)]
        topk: usize,
        #[arg(long)]
        out: PathBuf,
    },
    /// Wall-clock and FLOP comparison of sparse vs dense head execution.
    Bench {
        #[arg(long)]
        heads: usize,
        /// Per-head dimension.
        #[arg(long)]
        dim: usize,
        #[arg(long)]
        seq: usize,
        /// Comma-separated activation ratios in (0, 1].
        #[arg(long, value_delimiter = ',')]
        ratios: Vec<f64>,
        /// Timing repetitions per point (median reported), minimum 5.
        #[arg(long, default_value_t = 11)]
        reps: usize,
        /// Output CSV path.
        #[arg(long)]
        out: PathBuf,
    },
    /// Export head-load and head-redundancy statistics for a checkpoint.
    Analyze {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        task: PathBuf,
        /// Output directory; writes head_load.csv and similarity.csv.
        #[arg(long)]
        out: PathBuf,
    },
}

fn main() -> Result<()> {
    match Cli::parse().command {
        Command::Train {
            config,
            task,
            out,
            log,
        } => cmd_train(config, task, out, log),
        Command::Eval { ckpt, task } => cmd_eval(ckpt, task),
        Command::Convert {
            ckpt,
            shared,
            topk,
            out,
        } => cmd_convert(ckpt, shared, topk, out),
        Command::Bench {
            heads,
            dim,
            seq,
            ratios,
            reps,
            out,
        } => cmd_bench(heads, dim, seq, ratios, reps, out),
        Command::Analyze { ckpt, task, out } => cmd_analyze(ckpt, task, out),
    }
}

fn cmd_train(config: PathBuf, task: PathBuf, out: PathBuf, log: PathBuf) -> Result<()> {
    let cfg = load_train_config(&config).with_context(|| format!("reading {config:?}"))?;
    let spec = load_task_spec(&task).with_context(|| format!("reading {task:?}"))?;
    if cfg.moh.d_in != spec.feature_dim {
        bail!(
            "model d_in ({}) must equal task feature_dim ({})",
            cfg.moh.d_in,
            spec.feature_dim
        );
    }
    let outcome = train(&cfg, &spec)?;
    write_metrics_csv(&outcome.metrics, BufWriter::new(File::create(&log)?))?;
    save_checkpoint(
        &Checkpoint::from_model(
            &outcome.model,
            outcome.final_step as u64,
            outcome.rng_seed,
            outcome.rng_word_pos,
        ),
        &out,
    )?;
    let dataset = gen_task(&spec)?;
    let eval = evaluate(&outcome.model, &dataset.test)?;
    println!(
        "trained {} steps; test accuracy {:.4}, test loss {:.6}",
        outcome.final_step, eval.accuracy, eval.mean_task_loss
    );
    println!("checkpoint: {}", out.display());
    println!("metrics log: {}", log.display());
    Ok(())
}

fn cmd_eval(ckpt: PathBuf, task: PathBuf) -> Result<()> {
    let model = load_checkpoint(&ckpt)?.to_model()?;
    let spec = load_task_spec(&task)?;
    if model.cfg.d_in != spec.feature_dim {
        bail!(
            "checkpoint d_in ({}) must equal task feature_dim ({})",
            model.cfg.d_in,
            spec.feature_dim
        );
    }
    let dataset = gen_task(&spec)?;
    let eval = evaluate(&model, &dataset.test)?;
    println!(
        "test accuracy {:.4}, test loss {:.6}",
        eval.accuracy, eval.mean_task_loss
    );
    if !eval.routed_f.is_empty() {
        let f = eval
            .routed_f
            .iter()
            .map(|v| format!("{v:.3}"))
            .collect::<Vec<_>>()
            .join(" ");
        println!("routed head selection frequencies: {f}");
    }
    Ok(())
}

fn cmd_convert(ckpt: PathBuf, shared: usize, topk: usize, out: PathBuf) -> Result<()> {
    let loaded = load_checkpoint(&ckpt)?;
    let mut converted = loaded.clone();
    converted.mode = ModelMode::Moh;
    converted.cfg.router_mode = RouterMode::ParameterFree;
    converted.cfg.shared_heads = shared;
    converted.cfg.top_k = topk;
    converted.cfg.validate()?;
    // The parameter-free router has no weights; drop any learned router
    // tensors the source checkpoint carried.
    converted.tensors.retain(|(n, _)| !n.starts_with("router/"));
    // Fail fast if the attention weights cannot drive the new config.
    converted.to_model()?;
    save_checkpoint(&converted, &out)?;
    println!(
        "converted to MoH: {} heads, {} shared, top-{} routed ({}% activation)",
        converted.cfg.heads,
        shared,
        topk,
        (100.0 * converted.cfg.activation_ratio()).round()
    );
    println!("checkpoint: {}", out.display());
    Ok(())
}

fn cmd_bench(
    heads: usize,
    dim: usize,
    seq: usize,
    ratios: Vec<f64>,
    reps: usize,
    out: PathBuf,
) -> Result<()> {
    let reports = benchmark_inference(heads, dim, seq, &ratios, reps)?;
    print!("{}", format_bench_table(&reports));
    write_bench_csv(&reports, BufWriter::new(File::create(&out)?))?;
    println!("csv: {}", out.display());
    Ok(())
}

fn cmd_analyze(ckpt: PathBuf, task: PathBuf, out: PathBuf) -> Result<()> {
    let model = load_checkpoint(&ckpt)?.to_model()?;
    let spec = load_task_spec(&task)?;
    if model.cfg.d_in != spec.feature_dim {
        bail!(
            "checkpoint d_in ({}) must equal task feature_dim ({})",
            model.cfg.d_in,
            spec.feature_dim
        );
    }
    let dataset = gen_task(&spec)?;
    std::fs::create_dir_all(&out)?;

    // Head load per class label.
    let eval = evaluate(&model, &dataset.test)?;
    if eval.decisions.is_empty() {
        bail!("dense checkpoints make no routing decisions; convert or train a MoH model first");
    }
    let labels: Vec<String> = dataset
        .test
        .iter()
        .map(|s| format!("class_{}", s.label))
        .collect();
    let profiles = head_load_density(&eval.decisions, &labels)?;
    let head_load_path = out.join("head_load.csv");
    write_head_load_csv(
        &profiles,
        model.cfg.shared_heads,
        BufWriter::new(File::create(&head_load_path)?),
    )?;

    // Pairwise head redundancy over the full test split.
    let h = model.cfg.heads;
    let mut attn_sums = vec![0.0; h * h];
    let mut cos_sums = vec![0.0; h * h];
    for s in &dataset.test {
        let patterns = attention_patterns(&s.input, &s.input, &model.weights)?;
        let features = head_features(&s.input, &s.input, &model.weights)?;
        let t_ctx = s.input.shape()[0];
        let hv = model.cfg.d_v / h;
        for i in 0..h {
            for j in i + 1..h {
                attn_sums[i * h + j] +=
                    attention_pattern_similarity(&patterns[i], &patterns[j], t_ctx)?;
                let (cos, _) = output_feature_cosine(&features[i], &features[j], hv)?;
                cos_sums[i * h + j] += cos;
            }
        }
    }
    let n = dataset.test.len() as f64;
    let mut rows = Vec::new();
    for i in 0..h {
        for j in i + 1..h {
            rows.push((i, j, attn_sums[i * h + j] / n, cos_sums[i * h + j] / n));
        }
    }
    let similarity_path = out.join("similarity.csv");
    write_similarity_csv(&rows, BufWriter::new(File::create(&similarity_path)?))?;

    println!("head load: {}", head_load_path.display());
    println!("similarity: {}", similarity_path.display());
    Ok(())
}
