//! Attention-mask policies and per-layer schedules.

use std::fmt;
use std::str::FromStr;
use std::sync::Arc;

use crate::error::{Error, Result};
use crate::tensor::MaskPlane;

/// What a query position may attend to. Every policy admits the diagonal,
/// so no softmax row is ever empty.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MaskPolicy {
    /// Full attention; the encoder default.
    Bidirectional,
    /// Position i attends to j <= i.
    CausalLeftToRight,
    /// Position i attends to j >= i; the mirror direction, realized as a
    /// mask so positions stay aligned across layers.
    CausalRightToLeft,
}

/// n×n allowance plane for one policy.
pub fn build_attention_mask(policy: MaskPolicy, n: usize) -> Result<MaskPlane> {
    if n == 0 {
        return Err(Error::Config("mask for empty sequence".into()));
    }
    let mut allowed = vec![false; n * n];
    for q in 0..n {
        for k in 0..n {
            allowed[q * n + k] = match policy {
                MaskPolicy::Bidirectional => true,
                MaskPolicy::CausalLeftToRight => k <= q,
                MaskPolicy::CausalRightToLeft => k >= q,
            };
        }
    }
    MaskPlane::new(n, allowed)
}

impl fmt::Display for MaskPolicy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            MaskPolicy::Bidirectional => "bi",
            MaskPolicy::CausalLeftToRight => "lr",
            MaskPolicy::CausalRightToLeft => "rl",
        })
    }
}

impl FromStr for MaskPolicy {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "bi" => Ok(MaskPolicy::Bidirectional),
            "lr" => Ok(MaskPolicy::CausalLeftToRight),
            "rl" => Ok(MaskPolicy::CausalRightToLeft),
            other => Err(Error::Config(format!("unknown mask policy {other:?} (bi|lr|rl)"))),
        }
    }
}

/// One policy per layer, index 0 = lowest layer.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MaskSchedule(pub Vec<MaskPolicy>);

impl MaskSchedule {
    pub fn uniform(policy: MaskPolicy, n_layers: usize) -> Self {
        MaskSchedule(vec![policy; n_layers])
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn has_causal_layer(&self) -> bool {
        self.0.iter().any(|p| *p != MaskPolicy::Bidirectional)
    }

    /// One shared plane per layer for sequence length n.
    pub fn planes(&self, n: usize) -> Result<Vec<Arc<MaskPlane>>> {
        self.0.iter().map(|&p| build_attention_mask(p, n).map(Arc::new)).collect()
    }
}

impl fmt::Display for MaskSchedule {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for (i, p) in self.0.iter().enumerate() {
            if i > 0 {
                f.write_str(",")?;
            }
            write!(f, "{p}")?;
        }
        Ok(())
    }
}

impl FromStr for MaskSchedule {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        if s.trim().is_empty() {
            return Err(Error::Config("empty mask schedule".into()));
        }
        let policies = s.split(',').map(|t| t.trim().parse()).collect::<Result<Vec<_>>>()?;
        Ok(MaskSchedule(policies))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn causal_lr_rows() {
        let m = build_attention_mask(MaskPolicy::CausalLeftToRight, 3).unwrap();
        let want = [
            [true, false, false],
            [true, true, false],
            [true, true, true],
        ];
        for q in 0..3 {
            for k in 0..3 {
                assert_eq!(m.is_allowed(q, k), want[q][k]);
            }
        }
    }

    #[test]
    fn causal_rl_is_mirror() {
        let m = build_attention_mask(MaskPolicy::CausalRightToLeft, 3).unwrap();
        for q in 0..3 {
            for k in 0..3 {
                assert_eq!(m.is_allowed(q, k), k >= q);
            }
        }
    }

    #[test]
    fn bidirectional_allows_all() {
        let m = build_attention_mask(MaskPolicy::Bidirectional, 5).unwrap();
        let count = (0..5).flat_map(|q| (0..5).map(move |k| (q, k)))
            .filter(|&(q, k)| m.is_allowed(q, k))
            .count();
        assert_eq!(count, 25);
    }

    #[test]
    fn schedule_round_trips_text() {
        let s: MaskSchedule = "lr,rl,bi,bi".parse().unwrap();
        assert_eq!(s.len(), 4);
        assert_eq!(s.to_string(), "lr,rl,bi,bi");
        assert!(s.has_causal_layer());
        assert!(!MaskSchedule::uniform(MaskPolicy::Bidirectional, 2).has_causal_layer());
        assert!("lr,xx".parse::<MaskSchedule>().is_err());
    }
}
