//! Per-adapter token accounting and next-window demand projection.

use std::collections::{BTreeMap, VecDeque};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::domain::AdapterId;

/// Ring depth of closed windows kept per adapter.
pub const DEFAULT_HISTORY_DEPTH: usize = 16;
/// Projected load given to adapters without (enough) traffic, tokens/s.
pub const DEFAULT_DEMAND_FLOOR: f64 = 1.0;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum DemandError {
    #[error("unknown adapter {0}")]
    UnknownAdapter(AdapterId),
    #[error("time {time} precedes the open window starting at {window_start}")]
    TimeWentBackwards { time: f64, window_start: f64 },
    #[error("no closed window yet")]
    ColdStart,
    #[error("window length must be positive, got {0}")]
    BadWindow(f64),
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Extrapolation {
    /// `w_t + (w_t - w_{t-1})`.
    Linear,
    /// Exponentially weighted mean over the ring, oldest first.
    Ewma { alpha: f64 },
}

impl Default for Extrapolation {
    fn default() -> Self {
        Extrapolation::Linear
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DemandConfig {
    pub window_seconds: f64,
    pub depth: usize,
    pub floor: f64,
    pub extrapolation: Extrapolation,
}

impl Default for DemandConfig {
    fn default() -> Self {
        Self {
            window_seconds: 60.0,
            depth: DEFAULT_HISTORY_DEPTH,
            floor: DEFAULT_DEMAND_FLOOR,
            extrapolation: Extrapolation::Linear,
        }
    }
}

#[derive(Clone, Debug, Default)]
struct AdapterWindows {
    open_tokens: u64,
    closed: VecDeque<f64>,
}

/// Windowed TPS history for every registered adapter.
#[derive(Clone, Debug)]
pub struct TpsHistory {
    config: DemandConfig,
    open_window: u64,
    closed_any: bool,
    adapters: BTreeMap<AdapterId, AdapterWindows>,
}

impl TpsHistory {
    pub fn new<'a>(adapters: impl IntoIterator<Item = &'a AdapterId>, config: DemandConfig) -> Result<Self, DemandError> {
        if !(config.window_seconds > 0.0) || !config.window_seconds.is_finite() {
            return Err(DemandError::BadWindow(config.window_seconds));
        }
        Ok(Self {
            adapters: adapters
                .into_iter()
                .map(|a| (a.clone(), AdapterWindows::default()))
                .collect(),
            config,
            open_window: 0,
            closed_any: false,
        })
    }

    pub fn config(&self) -> &DemandConfig {
        &self.config
    }

    pub fn window_seconds(&self) -> f64 {
        self.config.window_seconds
    }

    fn window_of(&self, time: f64) -> u64 {
        (time / self.config.window_seconds).floor().max(0.0) as u64
    }

    /// Closes every window that ends at or before `time`.
    pub fn advance_to(&mut self, time: f64) -> Result<(), DemandError> {
        let target = self.window_of(time);
        if target < self.open_window {
            return Err(DemandError::TimeWentBackwards {
                time,
                window_start: self.open_window as f64 * self.config.window_seconds,
            });
        }
        let gap = target - self.open_window;
        if gap == 0 {
            return Ok(());
        }
        let depth = self.config.depth.max(2);
        let zeros = (gap - 1).min(depth as u64) as usize;
        let w = self.config.window_seconds;
        for hist in self.adapters.values_mut() {
            hist.closed.push_back(hist.open_tokens as f64 / w);
            hist.open_tokens = 0;
            for _ in 0..zeros {
                hist.closed.push_back(0.0);
            }
            while hist.closed.len() > depth {
                hist.closed.pop_front();
            }
        }
        self.open_window = target;
        self.closed_any = true;
        Ok(())
    }

    /// Accumulates `tokens` into the window containing `time`.
    pub fn record_request(&mut self, adapter: &AdapterId, tokens: u64, time: f64) -> Result<(), DemandError> {
        if !self.adapters.contains_key(adapter) {
            return Err(DemandError::UnknownAdapter(adapter.clone()));
        }
        self.advance_to(time)?;
        self.adapters.get_mut(adapter).expect("checked above").open_tokens += tokens;
        Ok(())
    }

    /// Closed windows for `adapter`, oldest first.
    pub fn closed_windows(&self, adapter: &AdapterId) -> Result<Vec<f64>, DemandError> {
        self.adapters
            .get(adapter)
            .map(|h| h.closed.iter().copied().collect())
            .ok_or_else(|| DemandError::UnknownAdapter(adapter.clone()))
    }

    /// TPS of the most recently closed window.
    pub fn prev_timestep_tps(&self, adapter: &AdapterId) -> Result<f64, DemandError> {
        let hist = self
            .adapters
            .get(adapter)
            .ok_or_else(|| DemandError::UnknownAdapter(adapter.clone()))?;
        if !self.closed_any {
            return Err(DemandError::ColdStart);
        }
        Ok(hist.closed.back().copied().unwrap_or(0.0))
    }

    /// Projected load for the next window, never below the floor.
    pub fn extrapolate(&self, adapter: &AdapterId) -> Result<f64, DemandError> {
        let hist = self
            .adapters
            .get(adapter)
            .ok_or_else(|| DemandError::UnknownAdapter(adapter.clone()))?;
        Ok(project(&hist.closed, self.config.extrapolation, self.config.floor))
    }

    pub fn estimate(&self) -> DemandEstimate {
        DemandEstimate {
            per_adapter: self
                .adapters
                .iter()
                .map(|(id, h)| (id.clone(), project(&h.closed, self.config.extrapolation, self.config.floor)))
                .collect(),
        }
    }
}

fn project(closed: &VecDeque<f64>, rule: Extrapolation, floor: f64) -> f64 {
    let n = closed.len();
    let raw = match (rule, n) {
        (_, 0) => floor,
        (Extrapolation::Linear, 1) => closed[0],
        (Extrapolation::Linear, _) => {
            let last = closed[n - 1];
            last + (last - closed[n - 2])
        }
        (Extrapolation::Ewma { alpha }, _) => {
            let mut it = closed.iter();
            let first = *it.next().expect("non-empty");
            it.fold(first, |acc, &w| alpha * w + (1.0 - alpha) * acc)
        }
    };
    raw.max(floor)
}

/// Projected next-window load ℓ (tokens/s) per adapter.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct DemandEstimate {
    pub per_adapter: BTreeMap<AdapterId, f64>,
}

impl DemandEstimate {
    /// Every adapter at the same load.
    pub fn uniform<'a>(adapters: impl IntoIterator<Item = &'a AdapterId>, load: f64) -> Self {
        Self {
            per_adapter: adapters.into_iter().map(|a| (a.clone(), load)).collect(),
        }
    }

    pub fn get(&self, adapter: &AdapterId) -> Option<f64> {
        self.per_adapter.get(adapter).copied()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn history(ids: &[&str], floor: f64) -> TpsHistory {
        let ids: Vec<AdapterId> = ids.iter().map(|s| AdapterId::from(*s)).collect();
        TpsHistory::new(
            &ids,
            DemandConfig {
                floor,
                ..DemandConfig::default()
            },
        )
        .unwrap()
    }

    fn with_windows(values: &[f64], floor: f64) -> TpsHistory {
        let mut h = history(&["A1"], floor);
        for (i, v) in values.iter().enumerate() {
            let t = i as f64 * 60.0;
            h.record_request(&"A1".into(), (v * 60.0).round() as u64, t).unwrap();
        }
        h.advance_to(values.len() as f64 * 60.0).unwrap();
        h
    }

    #[test]
    fn single_request_window_tps() {
        let mut h = history(&["A1"], 1.0);
        h.record_request(&"A1".into(), 600, 30.0).unwrap();
        h.advance_to(60.0).unwrap();
        assert_eq!(h.prev_timestep_tps(&"A1".into()).unwrap(), 10.0);
    }

    #[test]
    fn requests_in_same_window_add_up() {
        let mut h = history(&["A1"], 1.0);
        h.record_request(&"A1".into(), 300, 1.0).unwrap();
        h.record_request(&"A1".into(), 300, 59.0).unwrap();
        h.advance_to(60.0).unwrap();
        assert_eq!(h.prev_timestep_tps(&"A1".into()).unwrap(), 10.0);
    }

    #[test]
    fn request_past_boundary_closes_previous_window() {
        let mut h = history(&["A1"], 1.0);
        h.record_request(&"A1".into(), 600, 30.0).unwrap();
        h.record_request(&"A1".into(), 1200, 65.0).unwrap();
        assert_eq!(h.closed_windows(&"A1".into()).unwrap(), vec![10.0]);
        h.advance_to(120.0).unwrap();
        assert_eq!(h.closed_windows(&"A1".into()).unwrap(), vec![10.0, 20.0]);
    }

    #[test]
    fn idle_windows_are_recorded_as_zero() {
        let mut h = history(&["A1", "A2"], 1.0);
        h.record_request(&"A1".into(), 600, 10.0).unwrap();
        h.advance_to(200.0).unwrap();
        assert_eq!(h.closed_windows(&"A1".into()).unwrap(), vec![10.0, 0.0, 0.0]);
        assert_eq!(h.closed_windows(&"A2".into()).unwrap(), vec![0.0, 0.0, 0.0]);
        assert_eq!(h.prev_timestep_tps(&"A2".into()).unwrap(), 0.0);
    }

    #[test]
    fn prev_timestep_is_last_window() {
        assert_eq!(with_windows(&[5.0, 12.0], 1.0).prev_timestep_tps(&"A1".into()).unwrap(), 12.0);
        assert_eq!(with_windows(&[8.0], 1.0).prev_timestep_tps(&"A1".into()).unwrap(), 8.0);
        assert_eq!(history(&["A1"], 1.0).prev_timestep_tps(&"A1".into()), Err(DemandError::ColdStart));
    }

    #[test]
    fn unknown_adapter_and_backwards_time_are_rejected() {
        let mut h = history(&["A1"], 1.0);
        assert_eq!(
            h.record_request(&"B".into(), 1, 0.0),
            Err(DemandError::UnknownAdapter("B".into()))
        );
        h.record_request(&"A1".into(), 1, 130.0).unwrap();
        assert!(matches!(
            h.record_request(&"A1".into(), 1, 10.0),
            Err(DemandError::TimeWentBackwards { .. })
        ));
    }

    #[test]
    fn linear_extrapolation() {
        assert_eq!(with_windows(&[10.0, 14.0], 1.0).extrapolate(&"A1".into()).unwrap(), 18.0);
        assert_eq!(with_windows(&[20.0, 5.0], 1.0).extrapolate(&"A1".into()).unwrap(), 1.0);
        assert_eq!(with_windows(&[7.0, 7.0], 1.0).extrapolate(&"A1".into()).unwrap(), 7.0);
        assert_eq!(with_windows(&[9.0], 1.0).extrapolate(&"A1".into()).unwrap(), 9.0);
        assert_eq!(history(&["A1"], 2.5).extrapolate(&"A1".into()).unwrap(), 2.5);
    }

    #[test]
    fn ewma_variant() {
        let mut h = with_windows(&[10.0, 20.0], 0.0);
        h.config.extrapolation = Extrapolation::Ewma { alpha: 0.5 };
        assert_eq!(h.extrapolate(&"A1".into()).unwrap(), 15.0);
    }

    #[test]
    fn ring_is_bounded() {
        let values: Vec<f64> = (0..40).map(f64::from).collect();
        let h = with_windows(&values, 0.0);
        let w = h.closed_windows(&"A1".into()).unwrap();
        assert_eq!(w.len(), DEFAULT_HISTORY_DEPTH);
        assert_eq!(*w.last().unwrap(), 39.0);
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        proptest! {
            #[test]
            fn extrapolation_scales_above_floor(w0 in 1.0f64..1e4, w1 in 1.0f64..1e4, lambda in 0.1f64..10.0) {
                let floor = 1e-9;
                let a = project(&VecDeque::from(vec![w0, w1]), Extrapolation::Linear, floor);
                let b = project(&VecDeque::from(vec![w0 * lambda, w1 * lambda]), Extrapolation::Linear, floor);
                if a > floor && b > floor {
                    prop_assert!((b - a * lambda).abs() <= 1e-9 * b.abs().max(1.0));
                }
            }

            #[test]
            fn window_tps_conserves_tokens(reqs in proptest::collection::vec((0usize..4, 1u64..5000, 0.0f64..60.0), 1..100)) {
                let ids = ["a", "b", "c", "d"];
                let mut h = history(&ids, 1.0);
                let mut sorted = reqs.clone();
                sorted.sort_by(|x, y| x.2.total_cmp(&y.2));
                let mut total = 0u64;
                for (i, tokens, t) in &sorted {
                    h.record_request(&ids[*i].into(), *tokens, *t).unwrap();
                    total += tokens;
                }
                h.advance_to(60.0).unwrap();
                let sum: f64 = ids.iter().map(|id| h.prev_timestep_tps(&(*id).into()).unwrap()).sum();
                prop_assert!((sum - total as f64 / 60.0).abs() < 1e-6);
            }
        }
    }
}
