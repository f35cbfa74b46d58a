//! Rank-, length- and TP-sensitive latency model.
//!
//! Prefill cost is linear in prompt tokens and scaled by a multiplicative
//! rank factor `1 + c * r_eff / tp`, where `r_eff` is the largest rank the
//! batched kernel has to pad to. Decode iterations pay a fixed cost, a rank
//! term and a context term. Adapter fetches are bandwidth-bound transfers.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::domain::Rank;

const GB: f64 = 1e9;

/// Solution of `(1 + 128c) / (1 + 8c) = 2.7`.
pub const DEFAULT_RANK_COEFFICIENT: f64 = 1.7 / 106.4;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum CostError {
    #[error("prefill batch is empty")]
    EmptyBatch,
    #[error("prefill batch holds {tokens} prompt tokens, budget is {budget}")]
    TokenBudgetExceeded { tokens: u64, budget: u32 },
    #[error("fetch of zero bytes")]
    ZeroBytes,
    #[error("no rank-ratio anchor supplied for model {0:?}")]
    MissingRankAnchor(ModelSize),
    #[error("inconsistent anchor {0:?}: no non-negative rank coefficient reproduces it")]
    InconsistentAnchor(Anchor),
    #[error("invalid cost parameter {name}: {value}")]
    InvalidParam { name: &'static str, value: f64 },
}

/// Coefficients of the latency model. Times in seconds, bandwidths in bytes/s.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CostParams {
    /// Prefill seconds per prompt token.
    pub a: f64,
    /// Fixed prefill overhead per batch.
    pub b: f64,
    /// Rank coefficient of the prefill rank factor.
    pub c: f64,
    pub tp: u32,
    /// Base decode-iteration seconds.
    pub d: f64,
    /// Decode seconds per unit of rank.
    pub e: f64,
    /// Decode seconds per context token in the batch.
    pub f: f64,
    pub host_bw: f64,
    pub rdma_bw: f64,
    pub ssd_bw: f64,
    pub token_budget: u32,
}

impl Default for CostParams {
    fn default() -> Self {
        Self {
            a: 0.25e-3,
            b: 20e-3,
            c: DEFAULT_RANK_COEFFICIENT,
            tp: 1,
            d: 25e-3,
            e: 0.05e-3,
            f: 0.5e-6,
            host_bw: 20.0 * GB,
            rdma_bw: 20.0 * GB,
            ssd_bw: 2.0 * GB,
            token_budget: 8192,
        }
    }
}

impl CostParams {
    pub fn validate(&self) -> Result<(), CostError> {
        let checks: [(&'static str, f64); 9] = [
            ("a", self.a),
            ("b", self.b),
            ("c", self.c),
            ("d", self.d),
            ("e", self.e),
            ("f", self.f),
            ("host_bw", self.host_bw),
            ("rdma_bw", self.rdma_bw),
            ("ssd_bw", self.ssd_bw),
        ];
        for (name, value) in checks {
            if !value.is_finite() || value < 0.0 {
                return Err(CostError::InvalidParam { name, value });
            }
        }
        for (name, value) in [("host_bw", self.host_bw), ("rdma_bw", self.rdma_bw), ("ssd_bw", self.ssd_bw)] {
            if value == 0.0 {
                return Err(CostError::InvalidParam { name, value });
            }
        }
        if self.tp == 0 {
            return Err(CostError::InvalidParam { name: "tp", value: 0.0 });
        }
        if self.token_budget == 0 {
            return Err(CostError::InvalidParam {
                name: "token_budget",
                value: 0.0,
            });
        }
        Ok(())
    }

    /// Multiplier applied to prefill for an effective rank.
    pub fn rank_factor(&self, rank: Rank) -> f64 {
        1.0 + self.c * f64::from(rank) / f64::from(self.tp)
    }

    pub fn with_tp(mut self, tp: u32) -> Self {
        self.tp = tp;
        self
    }
}

/// One request's contribution to a prefill batch.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct PrefillItem {
    pub tokens: u32,
    pub rank: Rank,
}

/// One request's contribution to a decode iteration.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct DecodeItem {
    pub context: u32,
    pub rank: Rank,
}

/// Prefill seconds for `batch` while decodes padded to `resident_max_rank`
/// share the server.
pub fn prefill_time(batch: &[PrefillItem], resident_max_rank: Rank, p: &CostParams) -> Result<f64, CostError> {
    if batch.is_empty() {
        return Err(CostError::EmptyBatch);
    }
    let tokens: u64 = batch.iter().map(|i| u64::from(i.tokens)).sum();
    if tokens > u64::from(p.token_budget) {
        return Err(CostError::TokenBudgetExceeded {
            tokens,
            budget: p.token_budget,
        });
    }
    let batch_rank = batch.iter().map(|i| i.rank).max().unwrap_or(0);
    Ok(prefill_seconds(tokens, batch_rank.max(resident_max_rank), p))
}

/// Unchecked closed form `(b + a*tokens) * rank_factor(r_eff)`.
pub fn prefill_seconds(tokens: u64, effective_rank: Rank, p: &CostParams) -> f64 {
    (p.b + p.a * tokens as f64) * p.rank_factor(effective_rank)
}

/// Seconds for one decode iteration over every request in `batch`.
pub fn decode_iter_time(batch: &[DecodeItem], p: &CostParams) -> f64 {
    let max_rank = batch.iter().map(|i| i.rank).max().unwrap_or(0);
    let context: u64 = batch.iter().map(|i| u64::from(i.context)).sum();
    decode_seconds(context, max_rank, p)
}

pub fn decode_seconds(context_tokens: u64, max_rank: Rank, p: &CostParams) -> f64 {
    p.d + p.e * f64::from(max_rank) / f64::from(p.tp) + p.f * context_tokens as f64
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FetchSource {
    /// Local host memory to GPU.
    Host,
    /// Remote host memory, through the remote GPU, over RDMA.
    RemoteRdma,
    Ssd,
}

pub fn fetch_latency(bytes: u64, source: FetchSource, p: &CostParams) -> Result<f64, CostError> {
    if bytes == 0 {
        return Err(CostError::ZeroBytes);
    }
    let b = bytes as f64;
    Ok(match source {
        FetchSource::Host => b / p.host_bw,
        FetchSource::RemoteRdma => b / p.host_bw + b / p.rdma_bw,
        FetchSource::Ssd => b / p.ssd_bw,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ModelSize {
    #[serde(rename = "7b")]
    Llama7B,
    #[serde(rename = "30b")]
    Llama30B,
    #[serde(rename = "70b")]
    Llama70B,
}

impl ModelSize {
    /// Multiplier applied to `a` and `b`.
    pub fn compute_scale(self) -> f64 {
        match self {
            ModelSize::Llama7B => 1.0,
            ModelSize::Llama30B => 4.0,
            ModelSize::Llama70B => 9.0,
        }
    }

    pub fn billions(self) -> f64 {
        match self {
            ModelSize::Llama7B => 7.0,
            ModelSize::Llama30B => 30.0,
            ModelSize::Llama70B => 70.0,
        }
    }
}

impl std::str::FromStr for ModelSize {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_lowercase().as_str() {
            "7b" => Ok(Self::Llama7B),
            "30b" => Ok(Self::Llama30B),
            "70b" => Ok(Self::Llama70B),
            other => Err(format!("unknown model size {other:?} (expected 7b, 30b or 70b)")),
        }
    }
}

/// An observed relative-TTFT measurement: prefill at `rank_high` divided by
/// prefill at `rank_low`, both at tensor parallelism `tp`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Anchor {
    pub model: ModelSize,
    pub rank_high: Rank,
    pub rank_low: Rank,
    pub tp: u32,
    pub ratio: f64,
}

impl Anchor {
    /// rank 128 takes 2.7x the prefill of rank 8 (Llama 7B, TP=1, 2000 tokens).
    pub const LLAMA7B_RANK_RATIO: Anchor = Anchor {
        model: ModelSize::Llama7B,
        rank_high: 128,
        rank_low: 8,
        tp: 1,
        ratio: 2.7,
    };
    /// Relative TTFT of rank 128 on Llama 70B at TP=8 (45% slower than rank 8).
    pub const LLAMA70B_RELATIVE_TTFT: Anchor = Anchor {
        model: ModelSize::Llama70B,
        rank_high: 128,
        rank_low: 8,
        tp: 8,
        ratio: 1.45,
    };

    pub fn defaults() -> Vec<Anchor> {
        vec![Self::LLAMA7B_RANK_RATIO, Self::LLAMA70B_RELATIVE_TTFT]
    }
}

/// Solves `(1 + c*hi/tp) / (1 + c*lo/tp) = ratio` for `c`.
///
/// `Ok(None)` when the anchor does not constrain `c` (equal ranks, ratio 1).
pub fn rank_coefficient(rank_high: Rank, rank_low: Rank, tp: u32, ratio: f64) -> Result<Option<f64>, ()> {
    let hi = f64::from(rank_high);
    let lo = f64::from(rank_low);
    let denom = hi - ratio * lo;
    let numer = f64::from(tp) * (ratio - 1.0);
    if denom == 0.0 {
        return if numer == 0.0 { Ok(None) } else { Err(()) };
    }
    let c = numer / denom;
    if !c.is_finite() || c < 0.0 {
        return Err(());
    }
    Ok(Some(c))
}

fn solve_anchor(anchor: &Anchor) -> Result<Option<f64>, CostError> {
    rank_coefficient(anchor.rank_high, anchor.rank_low, anchor.tp, anchor.ratio)
        .map_err(|_| CostError::InconsistentAnchor(*anchor))
}

/// Fits the rank coefficient for `model` from `anchors` and scales the
/// compute terms of `base` by the model-size preset. Decode and transfer
/// parameters are left as configured.
///
/// Models without their own anchor interpolate `c` linearly in parameter
/// count between the nearest anchored models.
pub fn calibrate(base: &CostParams, model: ModelSize, anchors: &[Anchor]) -> Result<CostParams, CostError> {
    let mut solved: Vec<(ModelSize, Option<f64>)> = Vec::new();
    for anchor in anchors {
        solved.push((anchor.model, solve_anchor(anchor)?));
    }
    if !anchors.iter().any(|a| a.rank_high != a.rank_low) {
        return Err(CostError::MissingRankAnchor(model));
    }

    let c_for = |m: ModelSize| -> Option<f64> { solved.iter().find(|(sm, c)| *sm == m && c.is_some()).and_then(|(_, c)| *c) };

    let c = match c_for(model) {
        Some(c) => c,
        None if solved.iter().any(|(m, _)| *m == model) => base.c,
        None => {
            let below = solved
                .iter()
                .filter(|(m, c)| c.is_some() && m.billions() < model.billions())
                .max_by(|x, y| x.0.cmp(&y.0));
            let above = solved
                .iter()
                .filter(|(m, c)| c.is_some() && m.billions() > model.billions())
                .min_by(|x, y| x.0.cmp(&y.0));
            match (below, above) {
                (Some(&(lm, Some(lc))), Some(&(hm, Some(hc)))) => {
                    let t = (model.billions() - lm.billions()) / (hm.billions() - lm.billions());
                    lc + t * (hc - lc)
                }
                (Some(&(_, Some(c))), _) | (_, Some(&(_, Some(c)))) => c,
                _ => return Err(CostError::MissingRankAnchor(model)),
            }
        }
    };

    let scale = model.compute_scale();
    Ok(CostParams {
        a: base.a * scale,
        b: base.b * scale,
        c,
        ..base.clone()
    })
}
