//! Deterministic tokenizer and featurizer. A prefix (question, steps up to j)
//! is summarized by current-step token counts plus prefix aggregates; one
//! coordinate holds the raw token count of the current step.

use serde::{Deserialize, Serialize};

use crate::corpus::StepRecord;
use crate::error::{Error, Result};

/// Token emitted by the generator when a step carries a correct cue.
pub const CUE_POS: &str = "cuepos";
/// Token emitted when a step carries an incorrect cue.
pub const CUE_NEG: &str = "cueneg";
/// Prefix of nuisance style tokens.
pub const NUISANCE_PREFIX: &str = "style";
/// Separator inserted by step duplication.
pub const SEPARATOR: &str = "<sep>";

/// Feature layout, in order. `LENGTH_COORD` is the raw token count.
pub const FEATURE_NAMES: [&str; 8] = [
    "cue_pos_count",
    "cue_neg_count",
    "nuisance_count",
    "filler_count",
    "step_length",
    "prefix_depth",
    "cumulative_length",
    "prior_cue_rate",
];
pub const FEATURE_DIM: usize = FEATURE_NAMES.len();
pub const LENGTH_COORD: usize = 4;

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TokenSeq {
    pub tokens: Vec<String>,
}

impl TokenSeq {
    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn join(&self) -> String {
        self.tokens.join(" ")
    }
}

/// Lowercase, whitespace-split, order-preserving.
pub fn tokenize(text: &str) -> TokenSeq {
    TokenSeq {
        tokens: text
            .split_whitespace()
            .map(|t| t.to_lowercase())
            .collect(),
    }
}

/// Token count of a step's text.
pub fn step_length(step: &StepRecord) -> usize {
    tokenize(&step.text).len()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FeatureVector {
    pub values: Vec<f64>,
    pub length_coordinate_index: usize,
    pub prefix_depth: usize,
}

struct StepCounts {
    cue_pos: usize,
    cue_neg: usize,
    nuisance: usize,
    filler: usize,
    len: usize,
}

fn count_step(text: &str) -> StepCounts {
    let toks = tokenize(text);
    let mut c = StepCounts {
        cue_pos: 0,
        cue_neg: 0,
        nuisance: 0,
        filler: 0,
        len: toks.len(),
    };
    for t in &toks.tokens {
        if t == CUE_POS {
            c.cue_pos += 1;
        } else if t == CUE_NEG {
            c.cue_neg += 1;
        } else if t.starts_with(NUISANCE_PREFIX) {
            c.nuisance += 1;
        } else {
            c.filler += 1;
        }
    }
    c
}

/// Featurize the prefix ending at the last step of `steps`. The question id
/// is accepted for interface symmetry but carries no signal of its own.
pub fn featurize_prefix(_question_id: u32, steps: &[StepRecord]) -> Result<FeatureVector> {
    if steps.is_empty() {
        return Err(Error::validation("empty prefix"));
    }
    let current = count_step(&steps[steps.len() - 1].text);
    let depth = steps.len();
    let mut cum_len = 0usize;
    let mut prior_rate_sum = 0.0;
    for (i, s) in steps.iter().enumerate() {
        let c = count_step(&s.text);
        cum_len += c.len;
        if i + 1 < depth && c.len > 0 {
            prior_rate_sum += (c.cue_pos + c.cue_neg) as f64 / c.len as f64;
        }
    }
    let prior_cue_rate = if depth > 1 {
        prior_rate_sum / (depth - 1) as f64
    } else {
        0.0
    };
    let values = vec![
        current.cue_pos as f64,
        current.cue_neg as f64,
        current.nuisance as f64,
        current.filler as f64,
        current.len as f64,
        depth as f64,
        cum_len as f64,
        prior_cue_rate,
    ];
    debug_assert_eq!(values.len(), FEATURE_DIM);
    Ok(FeatureVector {
        values,
        length_coordinate_index: LENGTH_COORD,
        prefix_depth: depth,
    })
}

/// JSON description of the feature order, written next to generated corpora.
pub fn schema_json() -> String {
    let schema = serde_json::json!({
        "dimension": FEATURE_DIM,
        "length_coordinate_index": LENGTH_COORD,
        "coordinates": FEATURE_NAMES,
    });
    serde_json::to_string_pretty(&schema).expect("static schema serializes")
}

/// Short hash of the feature schema, stored in checkpoints so a model can
/// refuse features it was not trained on.
pub fn schema_hash() -> String {
    use sha2::{Digest, Sha256};
    let mut h = Sha256::new();
    h.update(schema_json().as_bytes());
    let digest = h.finalize();
    digest[..8].iter().map(|b| format!("{b:02x}")).collect()
}
