//! Pilot run: pre-train on held-in families, customize on held-out targets
//! and report pseudo-perplexity and assay Spearman before and after.
//!
//! Usage: `pilot [key=value ...]` with keys dim, layers, ffn, heads, epochs,
//! plr, lr, steps, accum, mb, targets, seed, len, members.

use std::collections::HashMap;
use std::time::Instant;

use proteinttt::backbone::{Model, ModelConfig};
use proteinttt::masking::MaskingStrategy;
use proteinttt::scoring::{evaluate_assay, pseudo_perplexity, ProbabilitySupport, ScoringMode, EVAL_BATCH};
use proteinttt::synth::{generate, SyntheticFamilySpec};
use proteinttt::ttt::{pretrain, ttt_single, PretrainConfig, TttConfig};

fn main() {
    let args: HashMap<String, String> = std::env::args()
        .skip(1)
        .filter_map(|a| a.split_once('=').map(|(k, v)| (k.to_string(), v.to_string())))
        .collect();
    let get = |k: &str, d: f64| args.get(k).map_or(d, |v| v.parse().unwrap());
    let len = get("len", 40.0) as usize;
    let spec = SyntheticFamilySpec {
        length: len,
        members_per_family: get("members", 200.0) as usize,
        num_targets: get("targets", 20.0) as usize,
        seed: get("seed", 1.0) as u64,
        ..SyntheticFamilySpec::default()
    };
    let corpus = generate(&spec).unwrap();
    let cfg = ModelConfig {
        num_layers: get("layers", 2.0) as usize,
        model_dim: get("dim", 32.0) as usize,
        num_heads: get("heads", 4.0) as usize,
        ffn_dim: get("ffn", 64.0) as usize,
        max_positions: len + 2,
        vocab_size: 25,
        seed: get("seed", 1.0) as u64,
    };
    let mut model = Model::<f32>::init(&cfg).unwrap();
    let t0 = Instant::now();
    let report = pretrain(
        &mut model,
        &corpus.train_sequences(),
        &PretrainConfig {
            epochs: get("epochs", 20.0) as usize,
            learning_rate: get("plr", 0.05),
            micro_batch_size: get("pmb", 8.0) as usize,
            ..PretrainConfig::default()
        },
    )
    .unwrap();
    println!("pretrain {:.1}s epoch losses {:?}", t0.elapsed().as_secs_f64(),
        report.epoch_losses.iter().map(|l| (l * 1000.0).round() / 1000.0).collect::<Vec<_>>());
    let held_in: f64 = corpus.train.iter().take(10).map(|(s, _)| pseudo_perplexity(&model, s, EVAL_BATCH).unwrap()).sum::<f64>() / 10.0;
    let held_out: f64 = corpus.targets.iter().take(10).map(|t| pseudo_perplexity(&model, &t.sequence, EVAL_BATCH).unwrap()).sum::<f64>() / 10.0;
    println!("ppl held-in {held_in:.3} held-out {held_out:.3}");

    let tcfg = TttConfig {
        learning_rate: get("lr", 4e-4),
        micro_batch_size: get("mb", 4.0) as usize,
        grad_accum_steps: get("accum", 16.0) as usize,
        steps: get("steps", 30.0) as usize,
        masking: MaskingStrategy::fixed(0.15),
        emit_perplexity: true,
        ..TttConfig::default()
    };
    if args.get("mode").map(String::as_str) == Some("msa") {
        let mut wins = 0;
        for (i, t) in corpus.targets.iter().enumerate() {
            let c = TttConfig { seed: i as u64, ..tcfg };
            let (_, single) = ttt_single(&model, &t.sequence, &c).unwrap();
            let mut session = proteinttt::ttt::TttSession::new(model.clone());
            let msa = session.run(&t.sequence, &t.msa_rows, &proteinttt::ttt::UniformRows, &c, &mut |_, _| Ok(())).unwrap();
            let ps = single.perplexities()[single.selected_step].unwrap();
            let pm = msa.trace.perplexities()[msa.trace.selected_step].unwrap();
            if pm <= ps { wins += 1; }
            println!("target {i}: single {ps:.3} msa {pm:.3}");
        }
        println!("msa wins {wins}/{}", corpus.targets.len());
        return;
    }
    if args.get("mode").map(String::as_str) == Some("loss") {
        let mut ok = 0;
        let t1 = Instant::now();
        for run in 0..100u64 {
            let t = &corpus.targets[run as usize % corpus.targets.len()];
            let c = TttConfig { seed: 1000 + run, emit_perplexity: false, ..tcfg };
            let (_, tr) = ttt_single(&model, &t.sequence, &c).unwrap();
            let l = tr.losses();
            let mean = l.iter().sum::<f64>() / l.len() as f64;
            if mean < l[0] { ok += 1; }
        }
        println!("loss sanity {ok}/100 in {:.1}s", t1.elapsed().as_secs_f64());
        return;
    }
    if args.get("mode").map(String::as_str) == Some("grid") {
        for lr in [4e-5, 4e-4, 4e-3, get("lrmax", 4e-2)] {
            for accum in [1usize, 4, 16] {
                let c = TttConfig { learning_rate: lr, grad_accum_steps: accum, ..tcfg };
                let (_, tr) = ttt_single(&model, &corpus.targets[0].sequence, &c).unwrap();
                let p: Vec<f64> = tr.perplexities().into_iter().map(Option::unwrap).collect();
                let mono = p.windows(2).all(|w| w[1] <= w[0]);
                let traj: Vec<String> = p.iter().step_by(3).map(|v| format!("{v:.2}")).collect();
                println!("lr {lr} accum {accum} monotone {mono} [{}]", traj.join(" "));
            }
        }
        return;
    }
    let mut reductions = Vec::new();
    let mut better = 0;
    let mut sp_up = 0;
    for (i, t) in corpus.targets.iter().enumerate() {
        let t1 = Instant::now();
        let c = TttConfig { seed: i as u64, ..tcfg };
        let (snap, trace) = ttt_single(&model, &t.sequence, &c).unwrap();
        let p = trace.perplexities();
        let (p0, pt) = (p[0].unwrap(), p[trace.selected_step].unwrap());
        let red = (p0 - pt) / p0;
        reductions.push(red);
        if pt < p0 { better += 1; }
        let before = evaluate_assay(&model, &t.sequence, &t.assay, ScoringMode::MaskedMarginalIndependent, ProbabilitySupport::FullVocabulary).unwrap().spearman;
        let after_model = Model::from_snapshot(snap);
        let after = evaluate_assay(&after_model, &t.sequence, &t.assay, ScoringMode::MaskedMarginalIndependent, ProbabilitySupport::FullVocabulary).unwrap().spearman;
        if after >= before { sp_up += 1; }
        let traj: Vec<String> = p.iter().step_by(5).map(|v| format!("{:.2}", v.unwrap())).collect();
        println!("target {i}: ppl {p0:.3} -> {pt:.3} ({:.1}%) spearman {before:.3} -> {after:.3} [{}] {:.1}s", red * 100.0, traj.join(" "), t1.elapsed().as_secs_f64());
    }
    reductions.sort_by(f64::total_cmp);
    println!("improved {better}/{} median reduction {:.2}% spearman up {sp_up}/{}",
        reductions.len(), reductions[reductions.len() / 2] * 100.0, corpus.targets.len());
    println!("total {:.1}s", t0.elapsed().as_secs_f64());
}
