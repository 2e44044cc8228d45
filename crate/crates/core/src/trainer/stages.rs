//! Four-stage loss-curve analysis.
//!
//! MLM training curves characteristically pass through a steep *starting*
//! drop, a long *plateau*, a second *diving* drop, and a flat *convergence*
//! tail. This module locates the three boundaries between those stages from
//! a logged loss curve with a smoothed finite-difference slope and two
//! thresholds:
//!
//! * smooth the curve with a centered moving average of width `W`;
//! * `slope(t) = (smoothed(t+W) - smoothed(t-W)) / (2W)`;
//! * `starting_end` = first `t` with `slope(t) > -theta_dive` (the initial
//!   steep drop has ended);
//! * `plateau_end` = first later `t` with `slope(t) < -theta_dive` (the
//!   second dive begins);
//! * `diving_end` = first later `t` with `slope(t) > -theta_plateau` (the
//!   curve flattens into convergence).
//!
//! A boundary that never occurs clamps to the final logged step, so the
//! report is total and its boundaries are always monotone. By default the
//! thresholds are scale-free: `theta_dive` is 10% and `theta_plateau` 2% of
//! the curve's total smoothed drop per 1000 steps, so the same settings work
//! across corpora and budgets.

use crate::error::{Error, Result};
use crate::trainer::logs::TrainEntry;

pub const DEFAULT_SMOOTH_WINDOW: usize = 50;
/// Fraction of total smoothed drop per 1000 steps below which the curve
/// counts as flat.
pub const DEFAULT_THETA_PLATEAU_FRACTION: f64 = 0.02;
/// Fraction of total smoothed drop per 1000 steps above which a descent
/// counts as a dive.
pub const DEFAULT_THETA_DIVE_FRACTION: f64 = 0.10;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StageParams {
    pub smooth_window: usize,
    /// Absolute loss-per-step threshold; `None` uses the scale-free default.
    pub theta_plateau: Option<f64>,
    /// Absolute loss-per-step threshold; `None` uses the scale-free default.
    pub theta_dive: Option<f64>,
}

impl Default for StageParams {
    fn default() -> Self {
        StageParams {
            smooth_window: DEFAULT_SMOOTH_WINDOW,
            theta_plateau: None,
            theta_dive: None,
        }
    }
}

/// Stage boundaries in logged-step units.
#[derive(Debug, Clone, PartialEq)]
pub struct StageReport {
    pub starting_end: u64,
    pub plateau_end: u64,
    pub diving_end: u64,
    pub plateau_length: u64,
    /// Mean smoothed slope over each stage, in loss per step:
    /// `[starting, plateau, diving, convergence]`. Empty stages report 0.
    pub mean_slopes: [f64; 4],
}

pub const STAGE_CSV_HEADER: &str = "starting_end,plateau_end,diving_end,plateau_length";

impl StageReport {
    pub fn csv(&self) -> String {
        format!(
            "{STAGE_CSV_HEADER}\n{},{},{},{}\n",
            self.starting_end, self.plateau_end, self.diving_end, self.plateau_length
        )
    }

    pub fn from_csv(text: &str) -> Result<Self> {
        let mut lines = text.lines();
        match lines.next() {
            Some(h) if h.trim_end() == STAGE_CSV_HEADER => {}
            other => {
                return Err(Error::Data(format!(
                    "expected CSV header {STAGE_CSV_HEADER:?}, got {other:?}"
                )))
            }
        }
        let row = lines
            .next()
            .ok_or_else(|| Error::Data("stage CSV has no data row".into()))?;
        let fields: Vec<u64> = row
            .split(',')
            .map(|f| {
                f.trim()
                    .parse::<u64>()
                    .map_err(|_| Error::Data(format!("bad stage field {f:?}")))
            })
            .collect::<Result<_>>()?;
        if fields.len() != 4 {
            return Err(Error::Data(format!("expected 4 stage fields, got {}", fields.len())));
        }
        Ok(StageReport {
            starting_end: fields[0],
            plateau_end: fields[1],
            diving_end: fields[2],
            plateau_length: fields[3],
            mean_slopes: [0.0; 4],
        })
    }
}

/// Locates the four-stage boundaries of a logged loss curve.
pub fn detect_stages(entries: &[TrainEntry], params: &StageParams) -> Result<StageReport> {
    let w = params.smooth_window;
    if w == 0 {
        return Err(Error::Config("smooth_window must be positive".into()));
    }
    let n = entries.len();
    if n < 2 * w {
        return Err(Error::Data(format!(
            "loss log has {n} entries, need at least {} for smoothing window {w}",
            2 * w
        )));
    }

    // Centered moving average via prefix sums; the window is clipped at the
    // curve's ends.
    let mut prefix = Vec::with_capacity(n + 1);
    prefix.push(0.0f64);
    for e in entries {
        prefix.push(prefix.last().unwrap() + e.train_loss);
    }
    let half = w / 2;
    let smoothed = |t: usize| -> f64 {
        let lo = t.saturating_sub(half);
        let hi = (t + half).min(n - 1);
        (prefix[hi + 1] - prefix[lo]) / (hi + 1 - lo) as f64
    };
    let slope = |t: usize| -> f64 { (smoothed(t + w) - smoothed(t - w)) / (2 * w) as f64 };

    let total_drop = smoothed(0) - smoothed(n - 1);
    let theta_dive = params
        .theta_dive
        .unwrap_or(DEFAULT_THETA_DIVE_FRACTION * total_drop / 1000.0);
    let theta_plateau = params
        .theta_plateau
        .unwrap_or(DEFAULT_THETA_PLATEAU_FRACTION * total_drop / 1000.0);

    // Slopes are defined on [w, n-1-w]; scan for the three boundaries in
    // order, clamping any that never occur to the final index.
    let scan_start = w;
    let scan_end = n - 1 - w; // inclusive; empty scan when n == 2w
    let last = n - 1;

    let mut starting_end = last;
    let mut plateau_end = last;
    let mut diving_end = last;
    let mut t = scan_start;
    while t <= scan_end {
        if slope(t) > -theta_dive {
            starting_end = t;
            break;
        }
        t += 1;
    }
    if starting_end < last {
        let mut u = starting_end + 1;
        plateau_end = last;
        while u <= scan_end {
            if slope(u) < -theta_dive {
                plateau_end = u;
                break;
            }
            u += 1;
        }
        if plateau_end < last {
            let mut v = plateau_end + 1;
            diving_end = last;
            while v <= scan_end {
                if slope(v) > -theta_plateau {
                    diving_end = v;
                    break;
                }
                v += 1;
            }
        }
    }

    let mean_slope_over = |lo: usize, hi: usize| -> f64 {
        // Mean of slope(t) for t in [lo, hi] ∩ [scan_start, scan_end].
        let lo = lo.max(scan_start);
        let hi = hi.min(scan_end);
        if lo > hi {
            return 0.0;
        }
        let mut acc = 0.0;
        for t in lo..=hi {
            acc += slope(t);
        }
        acc / (hi - lo + 1) as f64
    };
    let mean_slopes = [
        mean_slope_over(scan_start, starting_end),
        mean_slope_over(starting_end + 1, plateau_end),
        mean_slope_over(plateau_end + 1, diving_end),
        mean_slope_over(diving_end + 1, scan_end),
    ];

    let report = StageReport {
        starting_end: entries[starting_end].step,
        plateau_end: entries[plateau_end].step,
        diving_end: entries[diving_end].step,
        plateau_length: entries[plateau_end].step - entries[starting_end].step,
        mean_slopes,
    };
    debug_assert!(
        report.starting_end <= report.plateau_end
            && report.plateau_end <= report.diving_end
            && report.diving_end <= entries[last].step
    );
    Ok(report)
}

/// Wraps a bare loss sequence as log entries stepped 0, 1, 2, …
pub fn entries_from_losses(losses: &[f64]) -> Vec<TrainEntry> {
    losses
        .iter()
        .enumerate()
        .map(|(i, &l)| TrainEntry {
            step: i as u64,
            train_loss: l,
            lr: 0.0,
            wall_clock_s: 0.0,
        })
        .collect()
}

/// Piecewise-linear loss curve through the given `(step, loss)` knots,
/// sampled at every integer step. Used to build stage-detection fixtures.
pub fn piecewise_linear_curve(knots: &[(u64, f64)]) -> Vec<f64> {
    assert!(knots.len() >= 2, "need at least two knots");
    let mut losses = Vec::with_capacity(knots.last().unwrap().0 as usize + 1);
    for pair in knots.windows(2) {
        let ((s0, l0), (s1, l1)) = (pair[0], pair[1]);
        assert!(s1 > s0, "knot steps must increase");
        for t in s0..s1 {
            let f = (t - s0) as f64 / (s1 - s0) as f64;
            losses.push(l0 + f * (l1 - l0));
        }
    }
    losses.push(knots.last().unwrap().1);
    losses
}

#[cfg(test)]
mod tests {
    use super::*;

    const W: u64 = DEFAULT_SMOOTH_WINDOW as u64;

    fn four_stage_knots() -> Vec<(u64, f64)> {
        vec![(0, 8.0), (1000, 4.0), (8000, 3.9), (10000, 1.0), (12000, 0.95)]
    }

    /// The repository's committed stage-detection fixture, byte for byte.
    fn four_stage_fixture_csv() -> String {
        let entries = entries_from_losses(&piecewise_linear_curve(&four_stage_knots()));
        let mut log = crate::trainer::logs::LossLog::new();
        for e in entries {
            log.push_train(e).unwrap();
        }
        log.train_csv()
    }

    const FIXTURE_PATH: &str =
        concat!(env!("CARGO_MANIFEST_DIR"), "/../../fixtures/four_stage_train_log.csv");

    #[test]
    #[ignore = "writes the committed fixture; run explicitly to regenerate"]
    fn regenerate_four_stage_fixture() {
        let path = std::path::Path::new(FIXTURE_PATH);
        std::fs::create_dir_all(path.parent().unwrap()).unwrap();
        std::fs::write(path, four_stage_fixture_csv()).unwrap();
    }

    #[test]
    fn shipped_four_stage_fixture_is_current() {
        let got = std::fs::read_to_string(FIXTURE_PATH).unwrap();
        assert_eq!(got, four_stage_fixture_csv(), "fixture drifted from its generator");
    }

    #[test]
    fn four_stage_fixture_boundaries_land_on_construction() {
        let entries = entries_from_losses(&piecewise_linear_curve(&four_stage_knots()));
        let report = detect_stages(&entries, &StageParams::default()).unwrap();
        assert!(report.starting_end.abs_diff(1000) <= W, "{report:?}");
        assert!(report.plateau_end.abs_diff(8000) <= W, "{report:?}");
        assert!(report.diving_end.abs_diff(10000) <= W, "{report:?}");
        assert_eq!(report.plateau_length, report.plateau_end - report.starting_end);
        // Stage character: steep, flat, steep, flat.
        assert!(report.mean_slopes[0] < report.mean_slopes[1]);
        assert!(report.mean_slopes[2] < report.mean_slopes[1]);
        assert!(report.mean_slopes[3] > report.mean_slopes[2]);
    }

    #[test]
    fn gentle_monotone_decay_never_dives() {
        let n = 60_000usize;
        let losses: Vec<f64> = (0..n).map(|t| 10.0 - t as f64 * (0.6 / n as f64)).collect();
        let entries = entries_from_losses(&losses);
        let report = detect_stages(&entries, &StageParams::default()).unwrap();
        assert_eq!(report.starting_end, W);
        assert_eq!(report.plateau_end, (n - 1) as u64);
        assert_eq!(report.diving_end, (n - 1) as u64);
    }

    #[test]
    fn steep_to_the_end_clamps_every_boundary() {
        let losses: Vec<f64> = (0..1000).map(|t| 10.0 - 0.003 * t as f64).collect();
        let entries = entries_from_losses(&losses);
        let report = detect_stages(&entries, &StageParams::default()).unwrap();
        assert_eq!(report.starting_end, 999);
        assert_eq!(report.plateau_end, 999);
        assert_eq!(report.diving_end, 999);
        assert_eq!(report.plateau_length, 0);
    }

    #[test]
    fn convex_decay_boundaries_are_ordered_and_in_range() {
        let losses: Vec<f64> = (0..6000).map(|t| 5.0 * (-(t as f64) / 800.0).exp()).collect();
        let entries = entries_from_losses(&losses);
        let report = detect_stages(&entries, &StageParams::default()).unwrap();
        assert!(report.starting_end <= report.plateau_end);
        assert!(report.plateau_end <= report.diving_end);
        assert!(report.diving_end <= 5999);
    }

    #[test]
    fn short_logs_and_zero_window_are_errors() {
        let entries = entries_from_losses(&vec![1.0; 99]);
        assert!(detect_stages(&entries, &StageParams::default()).is_err());
        let params = StageParams { smooth_window: 0, ..StageParams::default() };
        assert!(detect_stages(&entries, &params).is_err());
        let entries = entries_from_losses(&vec![1.0; 100]);
        assert!(detect_stages(&entries, &StageParams::default()).is_ok());
    }

    #[test]
    fn csv_round_trip() {
        let entries = entries_from_losses(&piecewise_linear_curve(&four_stage_knots()));
        let report = detect_stages(&entries, &StageParams::default()).unwrap();
        let text = report.csv();
        assert!(text.starts_with("starting_end,plateau_end,diving_end,plateau_length\n"));
        let back = StageReport::from_csv(&text).unwrap();
        assert_eq!(back.starting_end, report.starting_end);
        assert_eq!(back.plateau_end, report.plateau_end);
        assert_eq!(back.diving_end, report.diving_end);
        assert_eq!(back.plateau_length, report.plateau_length);
        assert!(StageReport::from_csv("bogus\n1,2,3,4\n").is_err());
        assert!(StageReport::from_csv(STAGE_CSV_HEADER).is_err());
    }
}
