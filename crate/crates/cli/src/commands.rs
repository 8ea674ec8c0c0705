use std::fs::{self, File};
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use gqa_core::allocation::write_events;
use gqa_core::analysis::{
    head_similarity, kv_sweep, nonuniform_fraction, similarity_blend_residual, sweep_csv,
    AllocationHistory, SimilarityMatrix,
};
use gqa_core::convert::{conversion_report, mha_to_grouped};
use gqa_core::model::{ForwardOptions, Mode};
use gqa_core::rng::{self, Stream};
use gqa_core::tensor::{set_precision, Tape};
use gqa_core::train::{bench_inference, evaluate, train_loop, Phase};
use gqa_core::{Checkpoint, Dataset, Error, Precision, Tensor, TrainConfig, Variant, ViT};
use log::{info, warn};
use serde_json::{json, Value};

use crate::config::{resolve_all, FileConfig};
use crate::{Analyze, Command};

pub fn run(command: Command) -> Result<()> {
    match command {
        Command::Train {
            base,
            model,
            data,
            train,
            out,
            run_dir,
        } => {
            let r = resolve_all(&base, &model, &data, &train)?;
            let effective = json!({
                "command": "train",
                "seed": r.seed,
                "model": r.model,
                "train": r.train,
                "data": r.data,
            });
            let start = Checkpoint::fresh(ViT::new(r.model, r.seed)?, r.seed);
            run_training(start, &r.train_data, &r.train, effective, &out, run_dir)
        }
        Command::Finetune {
            base,
            input,
            data,
            train,
            out,
            run_dir,
        } => {
            let file = FileConfig::load(base.config.as_deref())?;
            let start = load_checkpoint(&input)?;
            let seed = file.seed_or(base.seed, start.seed)?;
            let spec = file.overlay(&data)?.resolve(&data, seed)?;
            let cfg = file.overlay(&train)?.build(Phase::Finetune, seed)?;
            let train_data = spec.load_for(&start.model.config, true)?;
            let effective = json!({
                "command": "finetune",
                "input": input,
                "seed": seed,
                "model": start.model.config,
                "start_step": start.step,
                "train": cfg,
                "data": spec,
            });
            run_training(start, &train_data, &cfg, effective, &out, run_dir)
        }
        Command::Convert {
            input,
            kv_heads,
            variant,
            out,
        } => {
            let src = load_checkpoint(&input)?;
            let dst = mha_to_grouped(&src.model, kv_heads, variant)?;
            let report = conversion_report(&src.model, &dst)?;
            let effective = json!({
                "command": "convert",
                "input": input,
                "kv_heads": kv_heads,
                "variant": dst.config.attention.variant,
                "model": dst.config,
            });
            Checkpoint::fresh(dst, src.seed).save(&out)?;
            info!("wrote {}", out.display());
            emit(&json!({ "config": effective, "report": report }), None)
        }
        Command::Eval {
            base,
            input,
            data,
            train_split,
            batch_size,
            out,
        } => {
            let file = FileConfig::load(base.config.as_deref())?;
            let mut ck = load_checkpoint(&input)?;
            let seed = file.seed(base.seed)?;
            let spec = file.overlay(&data)?.resolve(&data, seed)?;
            let eval_data = spec.load_for(&ck.model.config, train_split)?;
            let result = evaluate(&mut ck.model, &eval_data, batch_size)?;
            let effective = json!({
                "command": "eval",
                "input": input,
                "split": if train_split { "train" } else { "test" },
                "batch_size": batch_size,
                "model": ck.model.config,
                "data": spec,
            });
            emit(
                &json!({
                    "config": effective,
                    "accuracy": result.accuracy,
                    "loss": result.loss,
                    "examples": result.examples,
                }),
                out.as_deref(),
            )
        }
        Command::SweepKv {
            base,
            model,
            data,
            train,
            gs,
            eval_batch,
            out,
        } => {
            let r = resolve_all(&base, &model, &data, &train)?;
            let eval_data = r.data.load_for(&r.model, false)?;
            let rows = kv_sweep(
                &r.model,
                &gs,
                &r.train,
                &r.train_data,
                &eval_data,
                eval_batch,
            )?;
            let csv = sweep_csv(&rows)?;
            let effective = json!({
                "command": "sweep-kv",
                "seed": r.seed,
                "gs": gs,
                "eval_batch": eval_batch,
                "model": r.model,
                "train": r.train,
                "data": r.data,
            });
            emit_csv(&csv, &effective, out.as_deref(), "config.json")
        }
        Command::Analyze { what } => analyze(what),
        Command::Bench {
            base,
            model,
            variants,
            batch,
            warmup,
            repeats,
            precision,
            out,
        } => {
            let file = FileConfig::load(base.config.as_deref())?;
            let seed = file.seed(base.seed)?;
            let model_args = file.overlay(&model)?;
            let precision: Precision = serde_json::from_value(Value::String(precision.clone()))
                .with_context(|| format!("unknown precision '{precision}'"))?;
            let mut models = Vec::with_capacity(variants.len());
            let mut configs = Vec::with_capacity(variants.len());
            for (i, &variant) in variants.iter().enumerate() {
                let mut args = model_args.clone();
                args.variant = Some(variant);
                if matches!(variant, Variant::Mha | Variant::Mqa) {
                    args.kv_heads = None;
                }
                let cfg = args.build(seed, None)?;
                let repeats_before = variants[..i].iter().filter(|&&v| v == variant).count();
                let name = match repeats_before {
                    0 => variant.to_string(),
                    n => format!("{variant}#{}", n + 1),
                };
                configs.push(json!({ "name": name, "model": cfg }));
                models.push((name, ViT::new(cfg, seed)?));
            }
            let first = &models[0].1.config;
            let shape = [batch, first.channels, first.image_size, first.image_size];
            let images =
                Tensor::uniform(shape, 0.0, 1.0, &mut rng::derive(Stream::Bench, seed, &[]));
            let report = {
                let _guard = set_precision(precision);
                bench_inference(&mut models, &images, warmup, repeats)?
            };
            let effective = json!({
                "command": "bench",
                "seed": seed,
                "batch": batch,
                "warmup": warmup,
                "repeats": repeats,
                "precision": precision,
                "models": configs,
            });
            emit(
                &json!({ "config": effective, "report": report }),
                out.as_deref(),
            )
        }
    }
}

fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    Checkpoint::load(path).with_context(|| format!("loading checkpoint {}", path.display()))
}

fn emit(value: &Value, out: Option<&Path>) -> Result<()> {
    let text = serde_json::to_string_pretty(value)?;
    print_stdout(&format!("{text}\n"))?;
    if let Some(path) = out {
        fs::write(path, text + "\n").with_context(|| format!("writing {}", path.display()))?;
    }
    Ok(())
}

/// Writes to stdout; a closed pipe (e.g. `| head`) is not an error.
fn print_stdout(text: &str) -> Result<()> {
    let mut out = std::io::stdout().lock();
    match out.write_all(text.as_bytes()).and_then(|()| out.flush()) {
        Err(e) if e.kind() != std::io::ErrorKind::BrokenPipe => Err(e.into()),
        _ => Ok(()),
    }
}

/// CSV to `out` with the config in a sidecar `<out>.<suffix>`, or both to stdout.
fn emit_csv(csv: &str, sidecar: &Value, out: Option<&Path>, suffix: &str) -> Result<()> {
    match out {
        Some(path) => {
            fs::write(path, csv).with_context(|| format!("writing {}", path.display()))?;
            let side = sidecar_path(path, suffix);
            fs::write(&side, serde_json::to_string_pretty(sidecar)? + "\n")?;
            info!("wrote {} and {}", path.display(), side.display());
        }
        None => {
            print_stdout(csv)?;
            eprintln!("{}", serde_json::to_string(sidecar)?);
        }
    }
    Ok(())
}

fn sidecar_path(path: &Path, suffix: &str) -> PathBuf {
    let mut name = path.as_os_str().to_owned();
    name.push(".");
    name.push(suffix);
    PathBuf::from(name)
}

fn default_run_dir(out: &Path) -> PathBuf {
    let stem = out
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| "gqa".into());
    out.with_file_name(format!("{stem}-run"))
}

/// Trains and writes the checkpoint plus `config.json`, `steps.jsonl`,
/// `alloc.jsonl` and `metrics.json` in the run directory. Each JSON-lines file
/// starts with a `{"config": ...}` header line.
fn run_training(
    start: Checkpoint,
    data: &Dataset,
    cfg: &TrainConfig,
    effective: Value,
    out: &Path,
    run_dir: Option<PathBuf>,
) -> Result<()> {
    let run_dir = run_dir.unwrap_or_else(|| default_run_dir(out));
    fs::create_dir_all(&run_dir)
        .with_context(|| format!("creating run directory {}", run_dir.display()))?;
    fs::write(
        run_dir.join("config.json"),
        serde_json::to_string_pretty(&effective)? + "\n",
    )?;
    let header = serde_json::to_string(&json!({ "config": effective }))?;

    let mut steps = BufWriter::new(File::create(run_dir.join("steps.jsonl"))?);
    writeln!(steps, "{header}")?;
    let mut write_err = None;
    let total = cfg.steps;
    let outcome = train_loop(start, data, cfg, |log| {
        if log.step % 50 == 0 {
            info!("step {} loss {:.4}", log.step, log.loss);
        }
        if let Err(e) = serde_json::to_string(log)
            .map_err(anyhow::Error::from)
            .and_then(|line| {
                writeln!(steps, "{line}")?;
                Ok(())
            })
        {
            write_err.get_or_insert(e);
        }
    });
    steps.flush()?;
    if let Some(e) = write_err {
        return Err(e.context("writing steps.jsonl"));
    }
    let outcome = match outcome {
        Ok(o) => o,
        Err(Error::Diverged {
            step,
            loss,
            last_good,
        }) => {
            let rescue = sidecar_path(out, "diverged.gqac");
            last_good.save(&rescue)?;
            bail!(
                "training diverged at step {step} (loss {loss}); last good state saved to {}",
                rescue.display()
            );
        }
        Err(e) => return Err(e.into()),
    };

    let mut alloc = BufWriter::new(File::create(run_dir.join("alloc.jsonl"))?);
    writeln!(alloc, "{header}")?;
    write_events(&mut alloc, &outcome.metrics.events)?;
    alloc.flush()?;

    outcome.checkpoint.save(out)?;
    let m = &outcome.metrics;
    let summary = json!({
        "config": effective,
        "checkpoint": out,
        "run_dir": run_dir,
        "steps": m.steps,
        "start_step": m.start_step,
        "first_loss": m.losses.first(),
        "final_loss": m.losses.last(),
        "loss_reduction": m.loss_reduction(10),
        "epoch_accuracy": m.epoch_accuracy,
        "seconds": m.total_seconds(),
        "allocation_events": m.events.len(),
    });
    fs::write(
        run_dir.join("metrics.json"),
        serde_json::to_string_pretty(&json!({ "summary": summary, "metrics": m }))? + "\n",
    )?;
    info!("trained {total} steps, wrote {}", out.display());
    emit(&summary, None)
}

fn analyze(what: Analyze) -> Result<()> {
    match what {
        Analyze::Heads {
            base,
            input,
            data,
            layer,
            samples,
            out,
        } => {
            let file = FileConfig::load(base.config.as_deref())?;
            let ck = load_checkpoint(&input)?;
            let mut model = ck.model;
            let cfg = model.config.clone();
            if cfg.depth == 0 {
                bail!("model has no encoder layers");
            }
            let layer = layer.unwrap_or(cfg.depth - 1);
            if layer >= cfg.depth {
                bail!("layer {layer} out of range for depth {}", cfg.depth);
            }
            let seed = file.seed(base.seed)?;
            let spec = file.overlay(&data)?.resolve(&data, seed)?;
            let eval_data = spec.load_for(&cfg, false)?;
            let n = samples.min(eval_data.len()).max(1);
            let (images, _) = eval_data.batch(&(0..n).collect::<Vec<_>>())?;
            let tape = Tape::no_grad();
            let opts = ForwardOptions {
                capture_heads: true,
                ..Default::default()
            };
            let fwd = model.forward(&tape, &images, Mode::Eval, opts)?;
            let sim = head_similarity(&fwd.heads[layer], cfg.attention.variant.name(), layer)?;
            let alloc = model.alloc_states[layer].alloc.clone();
            let (intra, inter) = sim.group_means(&alloc)?;
            let effective = json!({
                "command": "analyze heads",
                "input": input,
                "layer": layer,
                "samples": n,
                "model": cfg,
                "data": spec,
            });
            let summary = json!({
                "config": effective,
                "allocation": alloc.counts(),
                "intra_group_mean": intra,
                "inter_group_mean": inter,
                "zero_heads": sim.zero_heads,
            });
            emit_csv(&sim.to_csv()?, &summary, out.as_deref(), "json")
        }
        Analyze::Alloc {
            input,
            heads,
            kv_heads,
            out,
        } => {
            let mut runs = Vec::with_capacity(input.len());
            for path in &input {
                runs.push(analyze_alloc_file(path, heads, kv_heads)?);
            }
            let effective = json!({
                "command": "analyze alloc",
                "inputs": input,
                "heads": heads,
                "kv_heads": kv_heads,
            });
            emit(
                &json!({ "config": effective, "runs": runs }),
                out.as_deref(),
            )
        }
        Analyze::Blend {
            target,
            gqa,
            mha,
            out,
        } => {
            let fit = similarity_blend_residual(
                &read_similarity(&target)?,
                &read_similarity(&gqa)?,
                &read_similarity(&mha)?,
            )?;
            let effective =
                json!({ "command": "analyze blend", "target": target, "gqa": gqa, "mha": mha });
            emit(
                &json!({ "config": effective, "lambda": fit.lambda, "residual": fit.residual }),
                out.as_deref(),
            )
        }
    }
}

fn analyze_alloc_file(path: &Path, heads: Option<usize>, kv_heads: Option<usize>) -> Result<Value> {
    let reader =
        BufReader::new(File::open(path).with_context(|| format!("opening {}", path.display()))?);
    let mut header: Option<Value> = None;
    let mut body = String::new();
    for line in reader.lines() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        if header.is_none() && body.is_empty() && line.starts_with("{\"config\"") {
            header = Some(serde_json::from_str(&line)?);
            continue;
        }
        body.push_str(&line);
        body.push('\n');
    }
    let from_header = |key: &str| {
        header
            .as_ref()
            .and_then(|h| h["config"]["model"]["attention"][key].as_u64())
            .map(|v| v as usize)
    };
    let h = heads
        .or_else(|| from_header("heads"))
        .context("--heads not given and not in the log header")?;
    let g = kv_heads
        .or_else(|| from_header("kv_heads"))
        .context("--kv-heads not given and not in the log header")?;
    let hist = AllocationHistory::from_jsonl(body.as_bytes())
        .with_context(|| format!("reading allocation events from {}", path.display()))?;
    if hist.events.is_empty() {
        warn!("{} has no allocation events", path.display());
    }
    let fraction = nonuniform_fraction(&hist, h, g)?;
    let mut per_layer = serde_json::Map::new();
    for layer in hist.layers() {
        per_layer.insert(
            layer.to_string(),
            json!(nonuniform_fraction(&hist.for_layer(layer), h, g)?),
        );
    }
    Ok(json!({
        "path": path,
        "variant": header.as_ref().map(|h| h["config"]["model"]["attention"]["variant"].clone()),
        "heads": h,
        "kv_heads": g,
        "events": hist.events.len(),
        "nonuniform_fraction": fraction,
        "per_layer": per_layer,
    }))
}

/// Reads the matrix written by `analyze heads`.
fn read_similarity(path: &Path) -> Result<SimilarityMatrix> {
    let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    let mut lines = text.lines().filter(|l| !l.trim().is_empty());
    let header = lines
        .next()
        .with_context(|| format!("{} is empty", path.display()))?;
    let h = header.split(',').count() - 1;
    let mut m = Vec::with_capacity(h);
    for (i, line) in lines.enumerate() {
        let row: Vec<f64> = line
            .split(',')
            .skip(1)
            .map(|v| v.trim().parse::<f64>())
            .collect::<std::result::Result<_, _>>()
            .with_context(|| format!("{} row {}: not a number", path.display(), i + 1))?;
        if row.len() != h {
            bail!(
                "{} row {} has {} values, expected {h}",
                path.display(),
                i + 1,
                row.len()
            );
        }
        m.push(row);
    }
    if m.len() != h {
        bail!("{} has {} rows for {h} columns", path.display(), m.len());
    }
    Ok(SimilarityMatrix {
        m,
        variant: String::new(),
        layer: 0,
        zero_heads: Vec::new(),
    })
}
