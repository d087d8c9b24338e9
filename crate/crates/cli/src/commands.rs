use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use anyhow::Context;
use proteinttt::backbone::{checkpoint_hash, read_checkpoint, save_checkpoint, Checkpoint, Model};
use proteinttt::config::RunConfig;
use proteinttt::heads::{embed, ClassifierHead};
use proteinttt::scoring::{evaluate_assay, pseudo_perplexity, EVAL_BATCH};
use proteinttt::seqio::{parse_a3m, parse_fasta, parse_mutations, tokenize, MutationRecord, TokenSequence};
use proteinttt::synth::generate;
use proteinttt::ttt::{self, run_grid, GridTarget, TttSession, UniformRows};
use serde_json::{json, Value};

use crate::{CliError, CliResult};

fn output_dir(cfg: &RunConfig) -> CliResult<PathBuf> {
    let dir = cfg.paths.output_dir.clone().unwrap_or_else(|| PathBuf::from("out"));
    std::fs::create_dir_all(&dir).with_context(|| format!("creating {}", dir.display()))?;
    Ok(dir)
}

fn require<'a>(path: Option<&'a Path>, flag: &str) -> CliResult<&'a Path> {
    match path {
        Some(p) if p.exists() => Ok(p),
        Some(p) => Err(CliError::Usage(format!("{flag}: {} does not exist", p.display()))),
        None => Err(CliError::Usage(format!("missing required {flag}"))),
    }
}

fn sha256_file(path: &Path) -> CliResult<String> {
    let bytes = std::fs::read(path).with_context(|| format!("reading {}", path.display()))?;
    Ok(checkpoint_hash(&bytes))
}

struct Loaded {
    ckpt: Checkpoint,
    hash: String,
}

fn load_base(cfg: &RunConfig) -> CliResult<Loaded> {
    let path = require(cfg.paths.checkpoint.as_deref(), "--checkpoint")?;
    let bytes = std::fs::read(path).with_context(|| format!("reading {}", path.display()))?;
    let ckpt = read_checkpoint(&bytes).with_context(|| format!("loading {}", path.display()))?;
    Ok(Loaded {
        ckpt,
        hash: checkpoint_hash(&bytes),
    })
}

fn read_sequences(path: &Path) -> CliResult<Vec<TokenSequence>> {
    let bytes = std::fs::read(path).with_context(|| format!("reading {}", path.display()))?;
    let records = parse_fasta(&bytes).with_context(|| format!("parsing {}", path.display()))?;
    Ok(records
        .iter()
        .map(|r| tokenize(&r.sequence, r.id.clone()))
        .collect::<Result<_, _>>()
        .with_context(|| format!("tokenizing {}", path.display()))?)
}

/// Writes `manifest.json` with the resolved config, input checkpoint hash
/// and a SHA-256 for every output file.
fn write_manifest(
    dir: &Path,
    command: &str,
    cfg: &RunConfig,
    input_hash: Option<&str>,
    outputs: &[PathBuf],
    extra: Value,
) -> CliResult<()> {
    let mut files = BTreeMap::new();
    for p in outputs {
        let rel = p.strip_prefix(dir).unwrap_or(p).display().to_string();
        files.insert(rel, sha256_file(p)?);
    }
    let manifest = json!({
        "command": command,
        "run_config": cfg.to_json(),
        "input_checkpoint_hash": input_hash,
        "outputs": files,
        "details": extra,
    });
    std::fs::write(dir.join("manifest.json"), serde_json::to_string_pretty(&manifest)? + "\n")?;
    Ok(())
}

fn meta(command: &str, cfg: &RunConfig, input_hash: Option<&str>, extra: Value) -> Value {
    json!({
        "command": command,
        "run_config": cfg.to_json(),
        "input_checkpoint_hash": input_hash,
        "details": extra,
    })
}

pub fn gen_corpus(cfg: &RunConfig) -> CliResult<()> {
    let dir = output_dir(cfg)?;
    let corpus = generate(&cfg.synth)?;
    let files = corpus.write_to_dir(&dir)?;
    write_manifest(&dir, "gen-corpus", cfg, None, &files, json!({ "train": corpus.train.len() }))?;
    println!("wrote {} files to {}", files.len() + 1, dir.display());
    Ok(())
}

fn read_families(path: &Path) -> CliResult<BTreeMap<String, String>> {
    let mut r = csv::Reader::from_path(path).with_context(|| format!("reading {}", path.display()))?;
    let headers = r.headers()?.clone();
    let col = |name: &str| {
        headers
            .iter()
            .position(|h| h == name)
            .ok_or_else(|| CliError::Usage(format!("--families: missing column {name:?}")))
    };
    let (id, fam) = (col("id")?, col("family")?);
    let mut out = BTreeMap::new();
    for row in r.records() {
        let row = row?;
        out.insert(row[id].to_string(), row[fam].to_string());
    }
    Ok(out)
}

pub fn pretrain(cfg: &RunConfig) -> CliResult<()> {
    let corpus_path = require(cfg.paths.corpus.as_deref(), "--corpus")?;
    let corpus = read_sequences(corpus_path)?;
    let dir = output_dir(cfg)?;
    let mut model = Model::<f32>::init(&cfg.model)?;
    let report = ttt::pretrain(&mut model, &corpus, &cfg.pretrain)?;

    let curve = dir.join("loss_curve.jsonl");
    let mut text = String::new();
    for (i, l) in report.step_losses.iter().enumerate() {
        text += &serde_json::to_string(&json!({ "step": i + 1, "loss": l }))?;
        text.push('\n');
    }
    std::fs::write(&curve, text)?;

    let mut ckpt = Checkpoint::new(model.snapshot());
    if let Some(fam_path) = &cfg.paths.families {
        let families = read_families(require(Some(fam_path.as_path()), "--families")?)?;
        let labelled: Vec<(&TokenSequence, &String)> = corpus
            .iter()
            .filter_map(|s| families.get(s.source_id()).map(|f| (s, f)))
            .collect();
        let mut labels: Vec<String> = labelled.iter().map(|(_, f)| (*f).clone()).collect();
        labels.sort();
        labels.dedup();
        let embeddings = labelled
            .iter()
            .map(|(s, _)| embed(&model, s))
            .collect::<Result<Vec<_>, _>>()?;
        let targets: Vec<usize> = labelled
            .iter()
            .map(|(_, f)| labels.binary_search(f).expect("label collected above"))
            .collect();
        ckpt.head = Some(ClassifierHead::train(labels, &embeddings, &targets, &cfg.head)?);
    }
    let corpus_hash = sha256_file(corpus_path)?;
    ckpt.meta = Some(meta(
        "pretrain",
        cfg,
        None,
        json!({ "corpus_sha256": corpus_hash, "final_epoch_loss": report.epoch_losses.last() }),
    ));
    let ckpt_path = dir.join("model.ckpt");
    save_checkpoint(&ckpt_path, &ckpt)?;
    write_manifest(
        &dir,
        "pretrain",
        cfg,
        None,
        &[ckpt_path.clone(), curve],
        json!({ "corpus_sha256": corpus_hash, "epoch_losses": report.epoch_losses }),
    )?;
    println!("checkpoint {} ({})", ckpt_path.display(), sha256_file(&ckpt_path)?);
    Ok(())
}

pub fn ttt(cfg: &RunConfig, target_id: Option<&str>) -> CliResult<()> {
    let base = load_base(cfg)?;
    let targets = read_sequences(require(cfg.paths.targets.as_deref(), "--target")?)?;
    let target = match target_id {
        Some(id) => targets
            .iter()
            .find(|t| t.source_id() == id)
            .ok_or_else(|| CliError::Usage(format!("--target-id {id} not found")))?,
        None => targets.first().ok_or_else(|| CliError::Usage("--target: FASTA holds no records".into()))?,
    };
    cfg.ttt.validate().map_err(|e| CliError::Usage(e.to_string()))?;
    let mut session = TttSession::new(Model::from_snapshot(base.ckpt.snapshot.clone()));
    if let Some(head) = &base.ckpt.head {
        session = session.with_head(head.clone());
    }
    let pool = match &cfg.paths.msa {
        Some(p) => {
            let path = require(Some(p.as_path()), "--msa")?;
            let msa = parse_a3m(&std::fs::read(path)?).with_context(|| format!("parsing {}", path.display()))?;
            let rows = (0..msa.depth())
                .map(|i| {
                    let row = msa.degapped(i).unwrap_or_default();
                    tokenize(&row, msa.ids()[i].clone())
                })
                .collect::<Result<Vec<_>, _>>()?;
            if rows[0].residues() != target.residues() {
                return Err(CliError::Usage("--msa: first row must be the target".into()));
            }
            rows
        }
        None => vec![target.clone()],
    };
    let out = session.run(target, &pool, &UniformRows, &cfg.ttt, &mut |_, _| Ok(()))?;

    let dir = output_dir(cfg)?;
    let trace_path = dir.join("trace.jsonl");
    std::fs::write(&trace_path, out.trace.to_jsonl())?;
    let mut ckpt = Checkpoint::new(out.snapshot);
    ckpt.head = base.ckpt.head.clone();
    ckpt.meta = Some(meta(
        "ttt",
        cfg,
        Some(&base.hash),
        json!({ "target": target.source_id(), "selected_step": out.trace.selected_step }),
    ));
    let ckpt_path = dir.join("selected.ckpt");
    save_checkpoint(&ckpt_path, &ckpt)?;
    write_manifest(
        &dir,
        "ttt",
        cfg,
        Some(&base.hash),
        &[trace_path, ckpt_path],
        json!({ "target": target.source_id(), "selected_step": out.trace.selected_step }),
    )?;
    println!("selected step {} of {}", out.trace.selected_step, cfg.ttt.steps);
    Ok(())
}

fn reference_for<'a>(targets: &'a [TokenSequence], assay: &Path) -> Option<&'a TokenSequence> {
    let stem = assay.file_stem()?.to_str()?;
    targets
        .iter()
        .find(|t| t.source_id() == stem)
        .or(if targets.len() == 1 { targets.first() } else { None })
}

fn load_assay(targets: &[TokenSequence], path: &Path) -> anyhow::Result<(TokenSequence, Vec<MutationRecord>)> {
    let reference = reference_for(targets, path)
        .with_context(|| format!("no target matches assay {}", path.display()))?
        .clone();
    let bytes = std::fs::read(path).with_context(|| format!("reading {}", path.display()))?;
    let records = parse_mutations(&bytes, &reference).with_context(|| format!("parsing {}", path.display()))?;
    Ok((reference, records))
}

pub fn score(cfg: &RunConfig) -> CliResult<()> {
    let base = load_base(cfg)?;
    let targets = read_sequences(require(cfg.paths.targets.as_deref(), "--targets")?)?;
    if cfg.paths.assays.is_empty() {
        return Err(CliError::Usage("missing required --assay".into()));
    }
    let model = Model::from_snapshot(base.ckpt.snapshot.clone());
    let dir = output_dir(cfg)?;
    std::fs::create_dir_all(dir.join("scores"))?;
    let mut outputs = Vec::new();
    let mut summaries = Vec::new();
    let mut failures = Vec::new();
    for path in &cfg.paths.assays {
        let stem = path.file_stem().and_then(|s| s.to_str()).unwrap_or("assay").to_string();
        let result = load_assay(&targets, path).and_then(|(reference, records)| {
            Ok(evaluate_assay(&model, &reference, &records, cfg.scoring.mode, cfg.scoring.support)?)
        });
        match result {
            Ok(eval) => {
                let csv_path = dir.join("scores").join(format!("{stem}.csv"));
                std::fs::write(&csv_path, eval.to_csv()?)?;
                let summary = json!({
                    "assay": stem,
                    "spearman": eval.spearman,
                    "n": eval.n,
                    "mode": eval.mode,
                    "model_checkpoint_hash": base.hash,
                    "run_config": cfg.to_json(),
                });
                let sum_path = dir.join("scores").join(format!("{stem}.summary.json"));
                std::fs::write(&sum_path, serde_json::to_string_pretty(&summary)? + "\n")?;
                println!("{stem}: spearman {:.4} (n = {})", eval.spearman, eval.n);
                outputs.push(csv_path);
                outputs.push(sum_path);
                summaries.push(summary);
            }
            Err(e) => {
                eprintln!("{}: {e:#}", path.display());
                failures.push(json!({ "assay": path.display().to_string(), "error": format!("{e:#}") }));
            }
        }
    }
    let summary_path = dir.join("summary.json");
    std::fs::write(
        &summary_path,
        serde_json::to_string_pretty(&json!({ "assays": summaries, "failures": failures }))? + "\n",
    )?;
    outputs.push(summary_path);
    write_manifest(&dir, "score", cfg, Some(&base.hash), &outputs, json!({ "failures": failures }))?;
    if summaries.is_empty() {
        return Err(CliError::Engine(anyhow::anyhow!("no assay could be scored")));
    }
    Ok(())
}

pub fn perplexity(cfg: &RunConfig) -> CliResult<()> {
    let base = load_base(cfg)?;
    let targets = read_sequences(require(cfg.paths.targets.as_deref(), "--targets")?)?;
    let model = Model::from_snapshot(base.ckpt.snapshot.clone());
    let dir = output_dir(cfg)?;
    let mut text = String::new();
    for t in &targets {
        let p = pseudo_perplexity(&model, t, EVAL_BATCH)?;
        text += &serde_json::to_string(&json!({ "id": t.source_id(), "perplexity": p }))?;
        text.push('\n');
        println!("{}\t{p:.6}", t.source_id());
    }
    let path = dir.join("perplexity.jsonl");
    std::fs::write(&path, text)?;
    write_manifest(&dir, "perplexity", cfg, Some(&base.hash), &[path], Value::Null)?;
    Ok(())
}

pub fn grid(cfg: &RunConfig) -> CliResult<()> {
    let base = load_base(cfg)?;
    let targets = read_sequences(require(cfg.paths.targets.as_deref(), "--targets")?)?;
    let assay_dir = cfg.paths.assays.first();
    let mut grid_targets = Vec::with_capacity(targets.len());
    for t in &targets {
        let assay = match assay_dir {
            Some(d) => {
                let p = d.join(format!("{}.csv", t.source_id()));
                if p.exists() {
                    Some(load_assay(std::slice::from_ref(t), &p)?.1)
                } else {
                    None
                }
            }
            None => None,
        };
        grid_targets.push(GridTarget {
            sequence: t.clone(),
            assay,
        });
    }
    cfg.ttt.validate().map_err(|e| CliError::Usage(e.to_string()))?;
    let report = run_grid(
        &base.ckpt.snapshot,
        &grid_targets,
        &cfg.grid,
        &cfg.ttt,
        cfg.scoring.mode,
        cfg.jobs.max(1),
    )?;

    let dir = output_dir(cfg)?;
    let mut outputs = Vec::new();
    let mut cell_status = Vec::new();
    for (i, cell) in report.cells.iter().enumerate() {
        let cell_dir = dir.join("cells").join(cell.cell.slug(i));
        std::fs::create_dir_all(&cell_dir)?;
        for run in &cell.runs {
            let (name, body) = match (&run.trace, &run.error) {
                (Some(trace), _) => (format!("{}.jsonl", run.target_id), trace.to_jsonl()),
                (None, Some(e)) => (format!("{}.error.txt", run.target_id), e.clone() + "\n"),
                (None, None) => continue,
            };
            let p = cell_dir.join(name);
            std::fs::write(&p, body)?;
            outputs.push(p);
        }
        cell_status.push(json!({
            "cell": cell.cell.slug(i),
            "succeeded": cell.succeeded(),
            "errors": cell.runs.iter().filter_map(|r| r.error.clone()).collect::<Vec<_>>(),
        }));
    }
    let csv_path = dir.join("grid.csv");
    std::fs::write(&csv_path, report.to_csv()?)?;
    outputs.push(csv_path);
    write_manifest(&dir, "grid", cfg, Some(&base.hash), &outputs, json!({ "cells": cell_status }))?;
    let ok = report.cells.iter().filter(|c| c.succeeded()).count();
    println!("{ok} of {} cells succeeded", report.cells.len());
    if ok == 0 {
        return Err(CliError::Engine(anyhow::anyhow!("every grid cell failed")));
    }
    Ok(())
}
