use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::error::Result;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub step: usize,
    /// Mean micro-batch loss of the step; absent at step 0.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub loss: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub perplexity: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub confidence: Option<f64>,
    pub wall_ms: f64,
}

/// Records for steps `0..=T` and the step whose parameters were kept.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct TttTrace {
    pub steps: Vec<StepRecord>,
    pub selected_step: usize,
}

impl TttTrace {
    pub fn losses(&self) -> Vec<f64> {
        self.steps.iter().filter_map(|s| s.loss).collect()
    }

    pub fn perplexities(&self) -> Vec<Option<f64>> {
        self.steps.iter().map(|s| s.perplexity).collect()
    }

    pub fn final_step(&self) -> usize {
        self.steps.last().map_or(0, |s| s.step)
    }

    pub fn selected(&self) -> Option<&StepRecord> {
        self.steps.iter().find(|s| s.step == self.selected_step)
    }

    /// Earliest step with maximal confidence, or the final step when no
    /// confidence was recorded.
    pub fn argmax_confidence(&self) -> usize {
        let mut best: Option<(f64, usize)> = None;
        for s in &self.steps {
            if let Some(c) = s.confidence {
                if best.is_none_or(|(b, _)| c > b) {
                    best = Some((c, s.step));
                }
            }
        }
        best.map_or(self.final_step(), |(_, step)| step)
    }

    /// Equality on everything except wall time.
    pub fn same_trajectory(&self, other: &Self) -> bool {
        self.selected_step == other.selected_step
            && self.steps.len() == other.steps.len()
            && self.steps.iter().zip(&other.steps).all(|(a, b)| {
                a.step == b.step && a.loss == b.loss && a.perplexity == b.perplexity && a.confidence == b.confidence
            })
    }

    /// One JSON object per step.
    pub fn write_jsonl<W: Write>(&self, mut w: W) -> Result<()> {
        for s in &self.steps {
            serde_json::to_writer(&mut w, s)?;
            w.write_all(b"\n")?;
        }
        Ok(())
    }

    pub fn to_jsonl(&self) -> String {
        let mut out = Vec::new();
        self.write_jsonl(&mut out).expect("writing to memory");
        String::from_utf8(out).expect("json is utf-8")
    }
}
