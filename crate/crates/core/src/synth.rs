//! Synthetic protein families with exact fitness oracles.
//!
//! A root consensus and shared per-position residue profiles `q_i` are
//! drawn first. Each family consensus re-draws a fraction of the root
//! positions, and every family gets per-position substitution rates
//! `rho_i = rate * w_i`, giving the site table
//!
//! ```text
//! P_i(a) = (1 - rho_i) [a = c_i] + rho_i q_i(a)
//! ```
//!
//! Members are independent draws from the site tables. The fitness of a
//! mutation set on a target is the log-probability delta under its family
//! table, smoothed by `ORACLE_FLOOR` so that zero rates stay finite.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use rand::distr::weighted::WeightedIndex;
use rand::distr::Distribution;
use rand::seq::index;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::seqio::{
    write_fasta, write_mutations, Alphabet, FastaRecord, MutationRecord, MutationSet, Substitution, TokenId,
    TokenSequence, RESIDUES,
};

/// Uniform mixing weight applied before taking oracle logs.
pub const ORACLE_FLOOR: f64 = 1e-6;

/// Minimum edit distance, as a fraction of length, between the held-out
/// consensus and every held-in consensus.
pub const MIN_HELD_OUT_DISTANCE: f64 = 0.3;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SyntheticFamilySpec {
    pub num_families: usize,
    pub length: usize,
    /// Training members per held-in family.
    pub members_per_family: usize,
    /// Mean within-family substitution rate.
    pub substitution_rate: f64,
    /// Fraction of root positions re-drawn for each family consensus.
    pub divergence: f64,
    /// Profile sharpness; larger values concentrate `q_i`.
    pub profile_scale: f64,
    pub held_out_family: usize,
    /// Held-out members emitted as customization targets.
    pub num_targets: usize,
    /// Rows per target MSA, target included.
    pub msa_depth: usize,
    /// Random double mutants per assay, on top of every single mutant.
    pub assay_doubles: usize,
    /// Optional fixed consensus sequences, one per family.
    pub consensus: Option<Vec<String>>,
    pub seed: u64,
}

impl Default for SyntheticFamilySpec {
    fn default() -> Self {
        Self {
            num_families: 3,
            length: 40,
            members_per_family: 200,
            substitution_rate: 0.2,
            divergence: 0.5,
            profile_scale: 2.0,
            held_out_family: 2,
            num_targets: 20,
            msa_depth: 8,
            assay_doubles: 40,
            consensus: None,
            seed: 1,
        }
    }
}

impl SyntheticFamilySpec {
    pub fn validate(&self) -> Result<()> {
        let fail = |m: &str| Err(Error::Config(format!("synthetic spec: {m}")));
        if self.num_families < 2 {
            return fail("need at least two families");
        }
        if self.held_out_family >= self.num_families {
            return fail("held_out_family out of range");
        }
        if self.length < 2 {
            return fail("length must be >= 2");
        }
        if !(0.0..=1.0).contains(&self.substitution_rate) || !(0.0..=1.0).contains(&self.divergence) {
            return fail("rates must lie in [0, 1]");
        }
        if self.members_per_family == 0 || self.num_targets == 0 || self.msa_depth == 0 {
            return fail("member, target and msa counts must be >= 1");
        }
        if let Some(c) = &self.consensus {
            if c.len() != self.num_families || c.iter().any(|s| s.len() != self.length) {
                return fail("consensus list must give one sequence of `length` per family");
            }
            if c.iter().flat_map(|s| s.bytes()).any(|b| !RESIDUES.contains(&b)) {
                return fail("consensus must use the 20 canonical residues");
            }
        }
        Ok(())
    }
}

/// Levenshtein distance.
pub fn edit_distance<T: PartialEq>(a: &[T], b: &[T]) -> usize {
    let mut prev: Vec<usize> = (0..=b.len()).collect();
    let mut cur = vec![0; b.len() + 1];
    for (i, x) in a.iter().enumerate() {
        cur[0] = i + 1;
        for (j, y) in b.iter().enumerate() {
            cur[j + 1] = (prev[j] + usize::from(x != y)).min(prev[j + 1] + 1).min(cur[j] + 1);
        }
        std::mem::swap(&mut prev, &mut cur);
    }
    prev[b.len()]
}

/// Per-position residue distributions of one family, indexed by residue
/// offset (`id - FIRST_RESIDUE`).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SiteTable {
    pub consensus: Vec<TokenId>,
    pub probs: Vec<[f64; 20]>,
}

impl SiteTable {
    pub fn log_prob(&self, position: usize, id: TokenId) -> f64 {
        let p = self.probs[position][id - Alphabet::FIRST_RESIDUE];
        ((1.0 - ORACLE_FLOOR) * p + ORACLE_FLOOR / 20.0).ln()
    }

    /// Oracle fitness: summed log-probability delta of the substitutions.
    pub fn fitness(&self, muts: &MutationSet) -> f64 {
        muts.substitutions()
            .iter()
            .map(|s| self.log_prob(s.position, s.mutant) - self.log_prob(s.position, s.wild_type))
            .sum()
    }

    fn sample<R: Rng>(&self, rng: &mut R) -> Vec<TokenId> {
        self.probs
            .iter()
            .map(|p| {
                let d = WeightedIndex::new(p).expect("site table is a distribution");
                Alphabet::FIRST_RESIDUE + d.sample(rng)
            })
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticTarget {
    pub sequence: TokenSequence,
    pub msa_rows: Vec<TokenSequence>,
    pub assay: Vec<MutationRecord>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticCorpus {
    pub spec: SyntheticFamilySpec,
    pub tables: Vec<SiteTable>,
    /// Held-in members with their family index.
    pub train: Vec<(TokenSequence, usize)>,
    pub targets: Vec<SyntheticTarget>,
}

fn letters(ids: &[TokenId]) -> String {
    ids.iter().map(|&i| Alphabet::letter(i).expect("residue")).collect()
}

fn draw_consensus<R: Rng>(root: &[TokenId], divergence: f64, rng: &mut R) -> Vec<TokenId> {
    let mut c = root.to_vec();
    let n = (divergence * root.len() as f64).round() as usize;
    for p in index::sample(rng, root.len(), n.min(root.len())) {
        // always change the residue so the divergence is exact
        let shift = rng.random_range(1..Alphabet::NUM_RESIDUES);
        let off = (c[p] - Alphabet::FIRST_RESIDUE + shift) % Alphabet::NUM_RESIDUES;
        c[p] = Alphabet::FIRST_RESIDUE + off;
    }
    c
}

pub fn generate(spec: &SyntheticFamilySpec) -> Result<SyntheticCorpus> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let len = spec.length;
    let residue = |rng: &mut ChaCha8Rng| Alphabet::FIRST_RESIDUE + rng.random_range(0..Alphabet::NUM_RESIDUES);

    let profiles: Vec<[f64; 20]> = (0..len)
        .map(|_| {
            let mut z = [0.0; 20];
            for v in z.iter_mut() {
                let g: f64 = rng.sample(StandardNormal);
                *v = (spec.profile_scale * g).exp();
            }
            let s: f64 = z.iter().sum();
            z.map(|v| v / s)
        })
        .collect();

    let consensus: Vec<Vec<TokenId>> = match &spec.consensus {
        Some(given) => given
            .iter()
            .map(|s| s.bytes().map(|b| Alphabet::residue_id(b).expect("validated")).collect())
            .collect(),
        None => {
            let root: Vec<TokenId> = (0..len).map(|_| residue(&mut rng)).collect();
            let mut fams: Vec<Vec<TokenId>> =
                (0..spec.num_families).map(|_| draw_consensus(&root, spec.divergence, &mut rng)).collect();
            let min = (MIN_HELD_OUT_DISTANCE * len as f64).ceil() as usize;
            let far_enough = |fams: &[Vec<TokenId>]| {
                let h = &fams[spec.held_out_family];
                (0..fams.len())
                    .filter(|&f| f != spec.held_out_family)
                    .all(|f| edit_distance(h, &fams[f]) >= min)
            };
            let mut tries = 0;
            while !far_enough(&fams) {
                tries += 1;
                if tries > 1000 {
                    return Err(Error::Config("could not place a distant held-out consensus".into()));
                }
                // re-derive from a fresh root draw at the diverged positions
                let fresh: Vec<TokenId> = (0..len).map(|_| residue(&mut rng)).collect();
                fams[spec.held_out_family] = draw_consensus(&fresh, spec.divergence, &mut rng);
            }
            fams
        }
    };
    let min = (MIN_HELD_OUT_DISTANCE * len as f64).ceil() as usize;
    for (f, c) in consensus.iter().enumerate() {
        if f != spec.held_out_family && edit_distance(c, &consensus[spec.held_out_family]) < min {
            return Err(Error::Config(format!(
                "held-out consensus is closer than {min} edits to family {f}"
            )));
        }
    }

    let tables: Vec<SiteTable> = consensus
        .iter()
        .map(|c| {
            let probs = (0..len)
                .map(|i| {
                    let w: f64 = rng.random_range(0.5..1.5);
                    let rho = (spec.substitution_rate * w).min(1.0);
                    let mut p = profiles[i].map(|q| rho * q);
                    p[c[i] - Alphabet::FIRST_RESIDUE] += 1.0 - rho;
                    p
                })
                .collect();
            SiteTable {
                consensus: c.clone(),
                probs,
            }
        })
        .collect();

    let mut train = Vec::new();
    for (f, table) in tables.iter().enumerate() {
        if f == spec.held_out_family {
            continue;
        }
        for m in 0..spec.members_per_family {
            let ids = table.sample(&mut rng);
            train.push((TokenSequence::from_residue_ids(&ids, format!("fam{f}_m{m}"))?, f));
        }
    }

    let held = &tables[spec.held_out_family];
    let mut targets = Vec::with_capacity(spec.num_targets);
    for t in 0..spec.num_targets {
        let id = format!("fam{}_t{t}", spec.held_out_family);
        let ids = held.sample(&mut rng);
        let sequence = TokenSequence::from_residue_ids(&ids, id.clone())?;
        let mut msa_rows = vec![sequence.clone()];
        for r in 1..spec.msa_depth {
            msa_rows.push(TokenSequence::from_residue_ids(&held.sample(&mut rng), format!("{id}_h{r}"))?);
        }
        let assay = build_assay(held, &sequence, spec.assay_doubles, &mut rng)?;
        targets.push(SyntheticTarget {
            sequence,
            msa_rows,
            assay,
        });
    }

    Ok(SyntheticCorpus {
        spec: spec.clone(),
        tables,
        train,
        targets,
    })
}

fn build_assay<R: Rng>(
    table: &SiteTable,
    reference: &TokenSequence,
    doubles: usize,
    rng: &mut R,
) -> Result<Vec<MutationRecord>> {
    let wt = reference.residues();
    let record = |subs: Vec<Substitution>| -> Result<MutationRecord> {
        let mutations = MutationSet::new(subs, reference)?;
        Ok(MutationRecord {
            id: mutations.notation(),
            measured_fitness: table.fitness(&mutations),
            mutations,
        })
    };
    let other = |pos: usize, rng: &mut R| {
        let shift = rng.random_range(1..Alphabet::NUM_RESIDUES);
        Alphabet::FIRST_RESIDUE + (wt[pos] - Alphabet::FIRST_RESIDUE + shift) % Alphabet::NUM_RESIDUES
    };
    let mut out = vec![record(Vec::new())?];
    for (position, &wild_type) in wt.iter().enumerate() {
        for mutant in Alphabet::residue_ids().filter(|&m| m != wild_type) {
            out.push(record(vec![Substitution {
                position,
                wild_type,
                mutant,
            }])?);
        }
    }
    let mut seen = std::collections::BTreeSet::new();
    let mut attempts = 0;
    while seen.len() < doubles && attempts < doubles * 20 {
        attempts += 1;
        let pos = index::sample(rng, wt.len(), 2).into_vec();
        let subs: Vec<Substitution> = pos
            .iter()
            .map(|&p| Substitution {
                position: p,
                wild_type: wt[p],
                mutant: other(p, rng),
            })
            .collect();
        let r = record(subs)?;
        if seen.insert(r.id.clone()) {
            out.push(r);
        }
    }
    Ok(out)
}

impl SyntheticCorpus {
    pub fn train_sequences(&self) -> Vec<TokenSequence> {
        self.train.iter().map(|(s, _)| s.clone()).collect()
    }

    pub fn target_sequences(&self) -> Vec<TokenSequence> {
        self.targets.iter().map(|t| t.sequence.clone()).collect()
    }

    pub fn train_fasta(&self) -> String {
        let recs: Vec<FastaRecord> = self
            .train
            .iter()
            .map(|(s, _)| FastaRecord::new(s.source_id(), letters(s.residues())))
            .collect();
        write_fasta(&recs)
    }

    pub fn targets_fasta(&self) -> String {
        let recs: Vec<FastaRecord> = self
            .targets
            .iter()
            .map(|t| FastaRecord::new(t.sequence.source_id(), letters(t.sequence.residues())))
            .collect();
        write_fasta(&recs)
    }

    /// `id,family,held_out` for every training member and target.
    pub fn family_csv(&self) -> String {
        let mut out = String::from("id,family,held_out\n");
        for (s, f) in &self.train {
            writeln!(out, "{},{f},false", s.source_id()).unwrap();
        }
        for t in &self.targets {
            writeln!(out, "{},{},true", t.sequence.source_id(), self.spec.held_out_family).unwrap();
        }
        out
    }

    pub fn msa_a3m(&self, target: usize) -> String {
        let t = &self.targets[target];
        let recs: Vec<FastaRecord> = t
            .msa_rows
            .iter()
            .map(|s| FastaRecord::new(s.source_id(), letters(s.residues())))
            .collect();
        write_fasta(&recs)
    }

    /// Writes `train.fasta`, `targets.fasta`, `families.csv`,
    /// `assays/<target>.csv` and `msas/<target>.a3m`; returns the paths.
    pub fn write_to_dir(&self, dir: &Path) -> Result<Vec<PathBuf>> {
        std::fs::create_dir_all(dir.join("assays"))?;
        std::fs::create_dir_all(dir.join("msas"))?;
        let mut files = vec![
            (dir.join("train.fasta"), self.train_fasta()),
            (dir.join("targets.fasta"), self.targets_fasta()),
            (dir.join("families.csv"), self.family_csv()),
        ];
        for (i, t) in self.targets.iter().enumerate() {
            let id = t.sequence.source_id();
            files.push((dir.join("assays").join(format!("{id}.csv")), write_mutations(&t.assay)?));
            files.push((dir.join("msas").join(format!("{id}.a3m")), self.msa_a3m(i)));
        }
        for (path, text) in &files {
            std::fs::write(path, text)?;
        }
        Ok(files.into_iter().map(|(p, _)| p).collect())
    }
}
