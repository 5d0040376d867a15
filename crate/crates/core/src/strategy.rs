//! Latency model for choosing where inference runs.
//!
//! A network strategy costs `b + D / B`: fixed compute and round-trip time
//! `b`, plus payload `D` bytes over bandwidth `B` bytes/s. Client-only
//! inference costs its compute time alone.

use std::cmp::Ordering;

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum StrategyError {
    #[error("profile '{0}' has a negative or non-finite component")]
    Component(String),
    #[error("client-only profile '{0}' must not send data or run remote stages")]
    ClientOnly(String),
    #[error("no profiles to choose from")]
    Empty,
    #[error("hysteresis margin must be >= 0 and dwell >= 1")]
    Hysteresis,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "type", content = "cut")]
pub enum StrategyKind {
    ClientOnly,
    ServerOnly,
    Split(u8),
}

/// Timings in seconds, payload in bytes.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StrategyProfile {
    pub name: String,
    pub kind: StrategyKind,
    pub client_infer: f64,
    pub encode: f64,
    pub decode: f64,
    pub server_infer: f64,
    pub payload_bytes: f64,
}

impl StrategyProfile {
    pub fn new(
        name: impl Into<String>,
        kind: StrategyKind,
        client_infer: f64,
        encode: f64,
        decode: f64,
        server_infer: f64,
        payload_bytes: f64,
    ) -> Result<Self, StrategyError> {
        let p = Self {
            name: name.into(),
            kind,
            client_infer,
            encode,
            decode,
            server_infer,
            payload_bytes,
        };
        p.validate()?;
        Ok(p)
    }

    pub fn client_only(name: impl Into<String>, client_infer: f64) -> Result<Self, StrategyError> {
        Self::new(
            name,
            StrategyKind::ClientOnly,
            client_infer,
            0.0,
            0.0,
            0.0,
            0.0,
        )
    }

    pub fn validate(&self) -> Result<(), StrategyError> {
        let parts = [
            self.client_infer,
            self.encode,
            self.decode,
            self.server_infer,
            self.payload_bytes,
        ];
        if parts.iter().any(|v| !(v.is_finite() && *v >= 0.0)) {
            return Err(StrategyError::Component(self.name.clone()));
        }
        if self.kind == StrategyKind::ClientOnly
            && (self.payload_bytes != 0.0
                || self.encode != 0.0
                || self.decode != 0.0
                || self.server_infer != 0.0)
        {
            return Err(StrategyError::ClientOnly(self.name.clone()));
        }
        Ok(())
    }

    /// Compute time, excluding round trip.
    pub fn compute(&self) -> f64 {
        self.client_infer + self.encode + self.decode + self.server_infer
    }

    /// Fixed latency `b` under `n`.
    pub fn fixed_latency(&self, n: &NetworkConditions) -> f64 {
        match self.kind {
            StrategyKind::ClientOnly => self.client_infer,
            _ => self.compute() + n.rtt,
        }
    }
}

/// `bandwidth` in bytes/s (0 means offline), `rtt` in seconds.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NetworkConditions {
    pub bandwidth: f64,
    pub rtt: f64,
}

impl NetworkConditions {
    pub fn new(bandwidth: f64, rtt: f64) -> Self {
        Self { bandwidth, rtt }
    }
}

/// End-to-end latency in seconds; `+inf` for a network strategy offline.
pub fn total_latency(p: &StrategyProfile, n: &NetworkConditions) -> f64 {
    match p.kind {
        StrategyKind::ClientOnly => p.client_infer,
        _ if n.bandwidth <= 0.0 => f64::INFINITY,
        _ => p.fixed_latency(n) + p.payload_bytes / n.bandwidth,
    }
}

fn rank(a: &StrategyProfile, b: &StrategyProfile, n: &NetworkConditions) -> Ordering {
    total_latency(a, n)
        .total_cmp(&total_latency(b, n))
        .then(a.payload_bytes.total_cmp(&b.payload_bytes))
        .then_with(|| a.name.cmp(&b.name))
}

/// Lowest-latency profile; ties go to the smaller payload, then the name.
pub fn best_strategy<'a>(
    profiles: &'a [StrategyProfile],
    n: &NetworkConditions,
) -> Result<&'a StrategyProfile, StrategyError> {
    profiles
        .iter()
        .min_by(|a, b| rank(a, b, n))
        .ok_or(StrategyError::Empty)
}

/// Bandwidth where the two latency lines meet, with RTT `rtt`.
pub fn crossover_bandwidth(p1: &StrategyProfile, p2: &StrategyProfile, rtt: f64) -> Option<f64> {
    let n = NetworkConditions::new(1.0, rtt);
    let (b1, b2) = (p1.fixed_latency(&n), p2.fixed_latency(&n));
    let d = p2.payload_bytes - p1.payload_bytes;
    let b = d / (b1 - b2);
    (b.is_finite() && b > 0.0).then_some(b)
}

/// Bandwidth grid with `points_per_decade` log-spaced points in `[lo, hi]`.
pub fn log_grid(lo: f64, hi: f64, points_per_decade: usize) -> Vec<f64> {
    let decades = (hi / lo).log10();
    let n = (decades * points_per_decade as f64).round() as usize;
    (0..=n)
        .map(|i| lo * 10f64.powf(decades * i as f64 / n.max(1) as f64))
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RegionRow {
    pub bandwidth: f64,
    pub strategy: String,
    pub latency: f64,
}

/// Best strategy at every bandwidth in `grid`.
pub fn latency_regions(
    profiles: &[StrategyProfile],
    rtt: f64,
    grid: &[f64],
) -> Result<Vec<RegionRow>, StrategyError> {
    grid.iter()
        .map(|&bw| {
            let n = NetworkConditions::new(bw, rtt);
            let p = best_strategy(profiles, &n)?;
            Ok(RegionRow {
                bandwidth: bw,
                strategy: p.name.clone(),
                latency: total_latency(p, &n),
            })
        })
        .collect()
}

/// Run-length compressed strategy names along a sweep.
pub fn region_sequence(rows: &[RegionRow]) -> Vec<String> {
    let mut out: Vec<String> = Vec::new();
    for r in rows {
        if out.last() != Some(&r.strategy) {
            out.push(r.strategy.clone());
        }
    }
    out
}

pub const DEFAULT_MARGIN: f64 = 0.1;
pub const DEFAULT_DWELL: u32 = 3;

/// Switches only after a candidate beats the current strategy by a relative
/// margin on `dwell` consecutive calls.
#[derive(Debug, Clone, PartialEq)]
pub struct HysteresisSelector {
    current: String,
    margin: f64,
    dwell: u32,
    candidate: Option<String>,
    streak: u32,
}

impl HysteresisSelector {
    pub fn new(initial: impl Into<String>, margin: f64, dwell: u32) -> Result<Self, StrategyError> {
        if !(margin >= 0.0 && margin.is_finite()) || dwell < 1 {
            return Err(StrategyError::Hysteresis);
        }
        Ok(Self {
            current: initial.into(),
            margin,
            dwell,
            candidate: None,
            streak: 0,
        })
    }

    pub fn with_defaults(initial: impl Into<String>) -> Self {
        Self::new(initial, DEFAULT_MARGIN, DEFAULT_DWELL).expect("defaults are valid")
    }

    pub fn current(&self) -> &str {
        &self.current
    }

    pub fn streak(&self) -> u32 {
        self.streak
    }

    /// Feed one observation of conditions; returns the strategy in force.
    pub fn select<'a>(
        &mut self,
        profiles: &'a [StrategyProfile],
        n: &NetworkConditions,
    ) -> Result<&'a StrategyProfile, StrategyError> {
        let best = best_strategy(profiles, n)?;
        let Some(current) = profiles.iter().find(|p| p.name == self.current) else {
            // the current strategy is no longer offered
            self.adopt(best);
            return Ok(best);
        };
        let (lb, lc) = (total_latency(best, n), total_latency(current, n));
        let beats = best.name != current.name
            && lb < lc
            && (lc.is_infinite() || lb <= lc * (1.0 - self.margin));
        if !beats {
            self.candidate = None;
            self.streak = 0;
            return Ok(current);
        }
        if self.candidate.as_deref() == Some(best.name.as_str()) {
            self.streak += 1;
        } else {
            self.candidate = Some(best.name.clone());
            self.streak = 1;
        }
        if self.streak >= self.dwell {
            self.adopt(best);
            return Ok(best);
        }
        Ok(current)
    }

    fn adopt(&mut self, p: &StrategyProfile) {
        self.current = p.name.clone();
        self.candidate = None;
        self.streak = 0;
    }
}
