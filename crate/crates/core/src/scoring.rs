//! Relevance from the two choice log-probabilities.
//!
//! Two normalizations are provided:
//!
//! * [`Normalization::ProbSoftmax`]: `P(T) / (P(T) + P(F))`, computed from the
//!   log-probabilities with the max-shift trick. Higher is more relevant.
//! * [`Normalization::LiteralLogRatio`]: `s_T / (s_T + s_F)` on the raw
//!   log-probabilities. This value *falls* as `P(T)` rises, so documents are
//!   ranked ascending.

use std::cmp::Ordering;

use serde::{Deserialize, Serialize};

/// Inputs of exactly zero are moved here before the log-ratio division.
pub const LOG_RATIO_CLAMP: f64 = -1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Normalization {
    #[default]
    ProbSoftmax,
    LiteralLogRatio,
}

impl std::fmt::Display for Normalization {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Normalization::ProbSoftmax => "prob_softmax",
            Normalization::LiteralLogRatio => "literal_log_ratio",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RankDirection {
    Descending,
    Ascending,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RelevanceScore {
    pub s_true: f64,
    pub s_false: f64,
    pub s_rel: f64,
    pub normalization: Normalization,
    /// An input was outside the admissible range and got clamped.
    #[serde(default, skip_serializing_if = "std::ops::Not::not")]
    pub clamped: bool,
}

pub fn rank_direction(normalization: Normalization) -> RankDirection {
    match normalization {
        Normalization::ProbSoftmax => RankDirection::Descending,
        Normalization::LiteralLogRatio => RankDirection::Ascending,
    }
}

pub fn relevance(s_true: f64, s_false: f64, normalization: Normalization) -> RelevanceScore {
    let mut clamped = false;
    let mut clamp = |v: f64, hi: f64| {
        if v > hi || v.is_nan() {
            clamped = true;
            hi
        } else {
            v
        }
    };
    let s_rel = match normalization {
        Normalization::ProbSoftmax => {
            let t = clamp(s_true, 0.0);
            let f = clamp(s_false, 0.0);
            two_way_softmax(t, f)
        }
        Normalization::LiteralLogRatio => {
            let t = clamp(s_true, LOG_RATIO_CLAMP);
            let f = clamp(s_false, LOG_RATIO_CLAMP);
            t / (t + f)
        }
    };
    RelevanceScore {
        s_true,
        s_false,
        s_rel,
        normalization,
        clamped,
    }
}

fn two_way_softmax(t: f64, f: f64) -> f64 {
    let m = t.max(f);
    if m == f64::NEG_INFINITY {
        return 0.5;
    }
    let et = (t - m).exp();
    let ef = (f - m).exp();
    et / (et + ef)
}

impl RelevanceScore {
    /// Orders two scores so that the more relevant one comes first.
    pub fn cmp_relevance(&self, other: &Self) -> Ordering {
        match rank_direction(self.normalization) {
            RankDirection::Descending => other.s_rel.total_cmp(&self.s_rel),
            RankDirection::Ascending => self.s_rel.total_cmp(&other.s_rel),
        }
    }
}

/// Sorts indices by relevance; ties keep ascending index (corpus) order.
pub fn rank_indices(scores: &[RelevanceScore]) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..scores.len()).collect();
    idx.sort_by(|&a, &b| scores[a].cmp_relevance(&scores[b]).then(a.cmp(&b)));
    idx
}
