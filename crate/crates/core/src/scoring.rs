//! Evaluation through the masked-LM head: pseudo-perplexity, log-odds
//! variant scoring and Spearman rank correlation.

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};

use crate::backbone::{Batch, Model};
use crate::error::{Error, Result};
use crate::masking::leave_one_out_views;
use crate::optim::log_softmax;
use crate::seqio::{Alphabet, MutationRecord, MutationSet, TokenId, TokenSequence};
use crate::tensor::Scalar;

pub use crate::seqio::Substitution;

/// Conditioning used for the log-probabilities in the log-odds sum.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScoringMode {
    /// Each mutated position masked on its own (`x \ i`).
    #[default]
    MaskedMarginalIndependent,
    /// All mutated positions masked together (`x \ T`).
    MaskedMarginalJoint,
    /// One unmasked forward over the wild type (`x`).
    WildtypeMarginal,
}

impl ScoringMode {
    pub fn label(self) -> &'static str {
        match self {
            Self::MaskedMarginalIndependent => "independent",
            Self::MaskedMarginalJoint => "joint",
            Self::WildtypeMarginal => "wildtype",
        }
    }
}

/// Which tokens the softmax normalizes over when reading probabilities.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ProbabilitySupport {
    /// Full vocabulary, specials included.
    #[default]
    FullVocabulary,
    /// Renormalized over the 20 residues.
    Residues,
}

/// Default number of sequences per forward in batched evaluation.
pub const EVAL_BATCH: usize = 32;

fn row_log_probs<F: Scalar>(row: &[F], support: ProbabilitySupport) -> Vec<f64> {
    match support {
        ProbabilitySupport::FullVocabulary => log_softmax(row).into_iter().map(|v| v.as_f64()).collect(),
        ProbabilitySupport::Residues => {
            let residues = Alphabet::residue_ids();
            let sub = log_softmax(&row[residues.clone()]);
            let mut out = vec![f64::NEG_INFINITY; row.len()];
            for (id, v) in residues.zip(sub) {
                out[id] = v.as_f64();
            }
            out
        }
    }
}

/// Forwards `inputs` in chunks and returns log-prob rows at the requested
/// (input index, token position) pairs, in request order.
fn log_probs_at<F: Scalar>(
    model: &Model<F>,
    inputs: &[Vec<TokenId>],
    requests: &[(usize, usize)],
    support: ProbabilitySupport,
    chunk: usize,
) -> Result<Vec<Vec<f64>>> {
    let chunk = chunk.max(1);
    let vocab = model.config().vocab_size;
    let mut out = vec![Vec::new(); requests.len()];
    for (c, group) in inputs.chunks(chunk).enumerate() {
        let batch = Batch::from_sequences(group);
        let fwd = model.forward(&batch)?;
        for (slot, &(seq, pos)) in requests.iter().enumerate() {
            if seq / chunk != c {
                continue;
            }
            let row = (seq % chunk) * batch.len + pos;
            out[slot] = row_log_probs(&fwd.logits[row * vocab..(row + 1) * vocab], support);
        }
    }
    Ok(out)
}

/// `exp(mean_i -log p(x_i | x \ i))` over residue positions, using
/// batched leave-one-out forwards of at most `chunk` sequences.
pub fn pseudo_perplexity<F: Scalar>(model: &Model<F>, x: &TokenSequence, chunk: usize) -> Result<f64> {
    pseudo_perplexity_with(model, x, chunk, ProbabilitySupport::FullVocabulary)
}

pub fn pseudo_perplexity_with<F: Scalar>(
    model: &Model<F>,
    x: &TokenSequence,
    chunk: usize,
    support: ProbabilitySupport,
) -> Result<f64> {
    if x.is_empty() {
        return Err(Error::Empty("sequence"));
    }
    let views = leave_one_out_views(x);
    let inputs: Vec<Vec<TokenId>> = views.iter().map(|v| v.input.ids().to_vec()).collect();
    let requests: Vec<(usize, usize)> = (0..views.len()).map(|i| (i, i + 1)).collect();
    let rows = log_probs_at(model, &inputs, &requests, support, chunk)?;
    let nll: f64 = rows
        .iter()
        .zip(x.residues())
        .map(|(lp, &tok)| -lp[tok])
        .sum();
    Ok((nll / x.raw_length() as f64).exp())
}

fn log_odds_from(rows: &[Vec<f64>], muts: &MutationSet) -> f64 {
    rows.iter()
        .zip(muts.substitutions())
        .fold(0.0, |acc, (lp, s)| acc + (lp[s.mutant] - lp[s.wild_type]))
}

fn masked(reference: &TokenSequence, positions: impl IntoIterator<Item = usize>) -> Vec<TokenId> {
    let mut ids = reference.ids().to_vec();
    for p in positions {
        ids[p + 1] = Alphabet::MASK;
    }
    ids
}

/// Sum over mutated positions of `log p(mutant) - log p(wild type)` under
/// the conditioning selected by `mode`. The empty set scores exactly 0.
pub fn log_odds_score<F: Scalar>(
    model: &Model<F>,
    reference: &TokenSequence,
    muts: &MutationSet,
    mode: ScoringMode,
    support: ProbabilitySupport,
) -> Result<f64> {
    if muts.is_empty() {
        return Ok(0.0);
    }
    if let Some(s) = muts.substitutions().iter().find(|s| s.position >= reference.raw_length()) {
        return Err(Error::Mutation {
            mutant: s.to_string(),
            message: "position out of range".into(),
        });
    }
    let (inputs, requests): (Vec<Vec<TokenId>>, Vec<(usize, usize)>) = match mode {
        ScoringMode::MaskedMarginalIndependent => (
            muts.positions().map(|p| masked(reference, [p])).collect(),
            muts.positions().enumerate().map(|(i, p)| (i, p + 1)).collect(),
        ),
        ScoringMode::MaskedMarginalJoint => (
            vec![masked(reference, muts.positions())],
            muts.positions().map(|p| (0, p + 1)).collect(),
        ),
        ScoringMode::WildtypeMarginal => (
            vec![reference.ids().to_vec()],
            muts.positions().map(|p| (0, p + 1)).collect(),
        ),
    };
    let rows = log_probs_at(model, &inputs, &requests, support, EVAL_BATCH)?;
    Ok(log_odds_from(&rows, muts))
}

/// Average ranks (1-based); ties share the mean of their positions.
pub fn average_ranks(values: &[f64]) -> Vec<f64> {
    let mut order: Vec<usize> = (0..values.len()).collect();
    order.sort_by(|&a, &b| values[a].total_cmp(&values[b]));
    let mut ranks = vec![0.0; values.len()];
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && values[order[j + 1]] == values[order[i]] {
            j += 1;
        }
        let rank = (i + j) as f64 / 2.0 + 1.0;
        for &k in &order[i..=j] {
            ranks[k] = rank;
        }
        i = j + 1;
    }
    ranks
}

fn pearson(x: &[f64], y: &[f64]) -> Result<f64> {
    let n = x.len() as f64;
    let mx = x.iter().sum::<f64>() / n;
    let my = y.iter().sum::<f64>() / n;
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (&a, &b) in x.iter().zip(y) {
        sxy += (a - mx) * (b - my);
        sxx += (a - mx) * (a - mx);
        syy += (b - my) * (b - my);
    }
    if sxx == 0.0 || syy == 0.0 {
        return Err(Error::Undefined("correlation of a constant vector"));
    }
    Ok((sxy / (sxx * syy).sqrt()).clamp(-1.0, 1.0))
}

/// Spearman rank correlation with average-rank tie handling.
pub fn spearman(pred: &[f64], truth: &[f64]) -> Result<f64> {
    if pred.len() != truth.len() {
        return Err(Error::LengthMismatch {
            left: pred.len(),
            right: truth.len(),
        });
    }
    if pred.len() < 2 {
        return Err(Error::Undefined("spearman needs at least two values"));
    }
    if pred.iter().chain(truth).any(|v| v.is_nan()) {
        return Err(Error::Undefined("NaN in input"));
    }
    pearson(&average_ranks(pred), &average_ranks(truth))
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ScoredRecord {
    pub id: String,
    pub mutant: String,
    pub pred_score: f64,
    pub fitness: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct AssayEvaluation {
    pub spearman: f64,
    pub n: usize,
    pub mode: ScoringMode,
    pub scores: Vec<ScoredRecord>,
}

impl AssayEvaluation {
    /// `id,mutant,pred_score,fitness` table.
    pub fn to_csv(&self) -> Result<String> {
        let mut w = csv::Writer::from_writer(Vec::new());
        w.write_record(["id", "mutant", "pred_score", "fitness"])?;
        for r in &self.scores {
            w.write_record([
                r.id.clone(),
                r.mutant.clone(),
                format!("{}", r.pred_score),
                format!("{}", r.fitness),
            ])?;
        }
        let bytes = w.into_inner().map_err(|e| Error::Io(e.into_error()))?;
        Ok(String::from_utf8(bytes).expect("csv output is utf-8"))
    }
}

/// Scores every record and correlates predictions with measured fitness.
///
/// Per-position conditionals are shared across records in the independent
/// and wild-type modes; the joint mode runs one forward per record.
pub fn score_records<F: Scalar>(
    model: &Model<F>,
    reference: &TokenSequence,
    records: &[MutationRecord],
    mode: ScoringMode,
    support: ProbabilitySupport,
) -> Result<Vec<f64>> {
    match mode {
        ScoringMode::MaskedMarginalIndependent | ScoringMode::WildtypeMarginal => {
            let positions: BTreeSet<usize> = records.iter().flat_map(|r| r.mutations.positions()).collect();
            let positions: Vec<usize> = positions.into_iter().collect();
            let rows = if mode == ScoringMode::WildtypeMarginal {
                let requests: Vec<_> = positions.iter().map(|&p| (0, p + 1)).collect();
                log_probs_at(model, &[reference.ids().to_vec()], &requests, support, EVAL_BATCH)?
            } else {
                let inputs: Vec<_> = positions.iter().map(|&p| masked(reference, [p])).collect();
                let requests: Vec<_> = positions.iter().enumerate().map(|(i, &p)| (i, p + 1)).collect();
                log_probs_at(model, &inputs, &requests, support, EVAL_BATCH)?
            };
            let table: BTreeMap<usize, &Vec<f64>> = positions.iter().copied().zip(&rows).collect();
            Ok(records
                .iter()
                .map(|r| {
                    r.mutations
                        .substitutions()
                        .iter()
                        .fold(0.0, |acc, s| {
                            let lp = table[&s.position];
                            acc + (lp[s.mutant] - lp[s.wild_type])
                        })
                })
                .collect())
        }
        ScoringMode::MaskedMarginalJoint => {
            let active: Vec<usize> = (0..records.len()).filter(|&i| !records[i].mutations.is_empty()).collect();
            let inputs: Vec<_> = active
                .iter()
                .map(|&i| masked(reference, records[i].mutations.positions()))
                .collect();
            let mut requests = Vec::new();
            for (k, &i) in active.iter().enumerate() {
                requests.extend(records[i].mutations.positions().map(|p| (k, p + 1)));
            }
            let rows = log_probs_at(model, &inputs, &requests, support, EVAL_BATCH)?;
            let mut scores = vec![0.0; records.len()];
            let mut offset = 0;
            for &i in &active {
                let m = &records[i].mutations;
                scores[i] = log_odds_from(&rows[offset..offset + m.len()], m);
                offset += m.len();
            }
            Ok(scores)
        }
    }
}

pub fn evaluate_assay<F: Scalar>(
    model: &Model<F>,
    reference: &TokenSequence,
    records: &[MutationRecord],
    mode: ScoringMode,
    support: ProbabilitySupport,
) -> Result<AssayEvaluation> {
    let preds = score_records(model, reference, records, mode, support)?;
    let truth: Vec<f64> = records.iter().map(|r| r.measured_fitness).collect();
    let rho = spearman(&preds, &truth)?;
    Ok(AssayEvaluation {
        spearman: rho,
        n: records.len(),
        mode,
        scores: records
            .iter()
            .zip(&preds)
            .map(|(r, &p)| ScoredRecord {
                id: r.id.clone(),
                mutant: r.mutations.notation(),
                pred_score: p,
                fitness: r.measured_fitness,
            })
            .collect(),
    })
}
