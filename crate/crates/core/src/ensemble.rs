//! Parallel ensembles of independent paths and the pooled scaling-law
//! diagnostics.
//!
//! Paths are seeded as `(master_seed, path_id)` and reduced in path-id
//! order, so the summary is identical for any worker count. Per-path
//! results are condensed to a fixed-size [`PathSummary`] as soon as the
//! path finishes; hitting records and the occupation measure are dropped
//! on the worker.

use crate::integrator::{run_path, Record, SimConfig};
use crate::scaling::{compute_constants, ScalingConstants};
use crate::stats;
use crate::{Error, Result};
use rayon::prelude::*;
use serde::Serialize;

/// Terminal and running statistics of one path.
#[derive(Debug, Clone, Serialize)]
pub struct PathSummary {
    pub path_id: u64,
    pub aborted: bool,
    pub terminal_t: f64,
    pub terminal_x: f64,
    /// `x / t^α` at the horizon.
    pub rescaled: f64,
    /// Max of `|x|/t^α` over records with `t ≥ t_min_fraction·t_end`.
    pub thm_a_max: f64,
    /// Count of fast-advance (unit-time) level crossings on each side.
    pub a_flagged_pos: u64,
    pub a_flagged_neg: u64,
    /// Smallest outward drift ratio `±G(T)/T^{α-1}` over fast-advance
    /// crossings on the side the path ended on.
    pub lemma4_min_ratio: Option<f64>,
    /// Fast-advance crossings (terminal side) with outward ratio below
    /// `(4c₀)^{-β}` and below half of it.
    pub ratios_below_floor: u64,
    pub ratios_below_half_floor: u64,
    /// Backward-drift deficit diagnostic, when snapshots were enabled.
    pub gamma_plus: Option<f64>,
    /// ±1 by terminal side; 0 if |x| never reached 1 (uncommitted).
    pub sign: i8,
}

/// Histogram with explicit bin edges.
#[derive(Debug, Clone, Serialize)]
pub struct Histogram {
    pub edges: Vec<f64>,
    pub counts: Vec<u64>,
}

impl Histogram {
    fn build(values: &[f64], n_bins: usize) -> Histogram {
        if values.is_empty() {
            return Histogram { edges: vec![0.0, 1.0], counts: vec![0] };
        }
        let lo = values.iter().cloned().fold(f64::INFINITY, f64::min);
        let hi = values.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let span = (hi - lo).max(1e-12);
        let (lo, hi) = (lo - 1e-9 * span, hi + 1e-9 * span);
        let width = (hi - lo) / n_bins as f64;
        let edges: Vec<f64> = (0..=n_bins).map(|i| lo + i as f64 * width).collect();
        let mut counts = vec![0u64; n_bins];
        for &v in values {
            let idx = (((v - lo) / width) as usize).min(n_bins - 1);
            counts[idx] += 1;
        }
        Histogram { edges, counts }
    }
}

/// Pooled quantiles of `|x|/t^α` at one record time.
#[derive(Debug, Clone, Serialize)]
pub struct RecordQuantiles {
    pub t: f64,
    pub q10: f64,
    pub median: f64,
    pub q90: f64,
}

/// Pooled result of one ensemble run.
#[derive(Debug, Clone, Serialize)]
pub struct EnsembleSummary {
    pub n_paths: usize,
    pub n_aborted: usize,
    pub alpha: f64,
    /// Present when the kernel has a power-law tail.
    pub c0: Option<f64>,
    pub t_end: f64,
    pub sign_balance: f64,
    pub committed_fraction: f64,
    pub per_path: Vec<PathSummary>,
    pub rescaled_histogram: Histogram,
    pub record_quantiles: Vec<RecordQuantiles>,
}

impl EnsembleSummary {
    pub fn rescaled_values(&self) -> Vec<f64> {
        self.per_path.iter().filter(|p| !p.aborted).map(|p| p.rescaled).collect()
    }
}

fn summarize(cfg: &SimConfig, constants: Option<&ScalingConstants>, path_id: u64) -> (PathSummary, Vec<Record>) {
    let alpha = cfg.alpha();
    let run = run_path(cfg, path_id).expect("config validated before fan-out");
    let st = &run.state;
    let aborted = run.aborted.is_some();
    let terminal_t = st.t;
    let terminal_x = st.x;
    let rescaled = if terminal_t > 0.0 { terminal_x / terminal_t.powf(alpha) } else { 0.0 };

    let t_min = cfg.t_min_fraction * cfg.t_end;
    let mut thm_a_max: f64 = 0.0;
    for r in &st.records {
        if r.t >= t_min && r.t > 0.0 {
            thm_a_max = thm_a_max.max(r.x.abs() / r.t.powf(alpha));
        }
    }
    if terminal_t >= t_min && terminal_t > 0.0 {
        thm_a_max = thm_a_max.max(terminal_x.abs() / terminal_t.powf(alpha));
    }

    let a_flagged_pos = st.hittings.iter().filter(|h| h.level > 0.0 && h.a_event).count() as u64;
    let a_flagged_neg = st.hittings.iter().filter(|h| h.level < 0.0 && h.a_event).count() as u64;

    let sign: i8 = if st.max_so_far < 1.0 && st.min_so_far > -1.0 {
        0
    } else if terminal_x > 0.0 {
        1
    } else if terminal_x < 0.0 {
        -1
    } else {
        0
    };

    // Outward drift ratios over fast-advance crossings on the terminal side.
    let side = if terminal_x >= 0.0 { 1.0 } else { -1.0 };
    let mut lemma4_min_ratio: Option<f64> = None;
    let mut ratios_below_floor = 0u64;
    let mut ratios_below_half_floor = 0u64;
    let floor = constants.map(|c| c.drift_ratio_floor());
    for h in &st.hittings {
        if h.a_event && h.level * side > 0.0 {
            let outward = h.ratio * side;
            lemma4_min_ratio = Some(lemma4_min_ratio.map_or(outward, |m: f64| m.min(outward)));
            if let Some(fl) = floor {
                if outward < fl {
                    ratios_below_floor += 1;
                }
                if outward < 0.5 * fl {
                    ratios_below_half_floor += 1;
                }
            }
        }
    }

    let gamma_plus = run.gamma_plus(&cfg.kernel).ok();
    let records = if aborted { Vec::new() } else { st.records.clone() };

    (
        PathSummary {
            path_id,
            aborted,
            terminal_t,
            terminal_x,
            rescaled,
            thm_a_max,
            a_flagged_pos,
            a_flagged_neg,
            lemma4_min_ratio,
            ratios_below_floor,
            ratios_below_half_floor,
            gamma_plus,
            sign,
        },
        records,
    )
}

/// Run `n_paths` independent paths on `workers` threads and pool the
/// diagnostics. The result does not depend on `workers`.
pub fn run_ensemble(cfg: &SimConfig, n_paths: usize, workers: usize) -> Result<EnsembleSummary> {
    if n_paths == 0 {
        return Err(Error::TooFew { what: "paths", need: 1, got: 0 });
    }
    cfg.validate()?;
    let constants = cfg.kernel.beta().and_then(|beta| {
        compute_constants(beta, cfg.kernel.asymptotic_constant()).ok()
    });

    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(workers.max(1))
        .build()
        .map_err(|e| Error::InvalidConfig(format!("worker pool: {e}")))?;
    let results: Vec<(PathSummary, Vec<Record>)> = pool.install(|| {
        (0..n_paths as u64)
            .into_par_iter()
            .map(|path_id| summarize(cfg, constants.as_ref(), path_id))
            .collect()
    });

    let alpha = cfg.alpha();
    let per_path: Vec<PathSummary> = results.iter().map(|(s, _)| s.clone()).collect();
    let n_aborted = per_path.iter().filter(|p| p.aborted).count();

    let committed: Vec<&PathSummary> =
        per_path.iter().filter(|p| !p.aborted && p.sign != 0).collect();
    let n_live = n_paths - n_aborted;
    let committed_fraction =
        if n_live > 0 { committed.len() as f64 / n_live as f64 } else { 0.0 };
    let sign_balance = if committed.is_empty() {
        0.5
    } else {
        committed.iter().filter(|p| p.sign > 0).count() as f64 / committed.len() as f64
    };

    let rescaled: Vec<f64> =
        per_path.iter().filter(|p| !p.aborted).map(|p| p.rescaled).collect();
    let rescaled_histogram = Histogram::build(&rescaled, 40);

    // Records share the same time grid across non-aborted paths.
    let mut record_quantiles = Vec::new();
    if let Some((_, first)) = results.iter().find(|(s, _)| !s.aborted) {
        for (i, r0) in first.iter().enumerate() {
            let mut vals: Vec<f64> = results
                .iter()
                .filter(|(s, _)| !s.aborted)
                .filter_map(|(_, recs)| recs.get(i))
                .map(|r| if r.t > 0.0 { r.x.abs() / r.t.powf(alpha) } else { 0.0 })
                .collect();
            vals.sort_by(|a, b| a.partial_cmp(b).unwrap());
            record_quantiles.push(RecordQuantiles {
                t: r0.t,
                q10: stats::quantile_sorted(&vals, 0.1),
                median: stats::quantile_sorted(&vals, 0.5),
                q90: stats::quantile_sorted(&vals, 0.9),
            });
        }
    }

    Ok(EnsembleSummary {
        n_paths,
        n_aborted,
        alpha,
        c0: constants.map(|c| c.c0),
        t_end: cfg.t_end,
        sign_balance,
        committed_fraction,
        per_path,
        rescaled_histogram,
        record_quantiles,
    })
}

/// Per-horizon medians and exceedance fractions across a family of
/// ensembles at increasing horizons.
#[derive(Debug, Clone, Serialize)]
pub struct TrendPoint {
    pub horizon: f64,
    pub n_paths: usize,
    pub median_abs_rescaled: f64,
    /// Fraction of paths with running max `|x|/t^α` above `1.5·c₀`.
    pub frac_running_max_over_1_5_c0: Option<f64>,
    /// Median of `|rescaled - c₀|` (meaningful for nonnegative kernels).
    pub median_dist_to_c0: Option<f64>,
    pub mean_a_flagged_terminal_side: f64,
    pub frac_ratios_below_half_floor: Option<f64>,
}

#[derive(Debug, Clone, Serialize)]
pub struct TrendReport {
    pub points: Vec<TrendPoint>,
    /// Median distance to c₀ strictly decreasing across horizons.
    pub dist_to_c0_decreasing: Option<bool>,
    /// Exceedance fraction of the running-max statistic nonincreasing.
    pub running_max_frac_nonincreasing: Option<bool>,
    /// Mean fast-advance count increasing across horizons.
    pub a_flagged_increasing: bool,
}

/// Summarize a family of ensembles at different horizons (at least three)
/// and flag whether each series moves the way the limit theorems predict.
pub fn scaling_trend(entries: &[(f64, &EnsembleSummary)]) -> Result<TrendReport> {
    if entries.len() < 3 {
        return Err(Error::TooFew { what: "horizons", need: 3, got: entries.len() });
    }
    let mut sorted: Vec<&(f64, &EnsembleSummary)> = entries.iter().collect();
    sorted.sort_by(|a, b| a.0.partial_cmp(&b.0).unwrap());
    let points: Vec<TrendPoint> = sorted.iter().map(|(h, s)| trend_point(*h, s)).collect();

    let dists: Vec<Option<f64>> = points.iter().map(|p| p.median_dist_to_c0).collect();
    let dist_to_c0_decreasing = if dists.iter().all(|d| d.is_some()) {
        Some(dists.windows(2).all(|w| w[1].unwrap() < w[0].unwrap()))
    } else {
        None
    };
    let fracs: Vec<Option<f64>> = points.iter().map(|p| p.frac_running_max_over_1_5_c0).collect();
    let running_max_frac_nonincreasing = if fracs.iter().all(|f| f.is_some()) {
        Some(fracs.windows(2).all(|w| w[1].unwrap() <= w[0].unwrap()))
    } else {
        None
    };
    let a_flagged_increasing = points
        .windows(2)
        .all(|w| w[1].mean_a_flagged_terminal_side > w[0].mean_a_flagged_terminal_side);

    Ok(TrendReport { points, dist_to_c0_decreasing, running_max_frac_nonincreasing, a_flagged_increasing })
}

fn trend_point(horizon: f64, s: &EnsembleSummary) -> TrendPoint {
    let live: Vec<&PathSummary> = s.per_path.iter().filter(|p| !p.aborted).collect();
    let abs_rescaled: Vec<f64> = live.iter().map(|p| p.rescaled.abs()).collect();
    let median_abs_rescaled = stats::median(&abs_rescaled);
    let frac_running_max_over_1_5_c0 = s.c0.map(|c0| {
        live.iter().filter(|p| p.thm_a_max > 1.5 * c0).count() as f64 / live.len().max(1) as f64
    });
    let median_dist_to_c0 = s.c0.map(|c0| {
        let d: Vec<f64> = live.iter().map(|p| (p.rescaled - c0).abs()).collect();
        stats::median(&d)
    });
    let a_counts: Vec<f64> = live
        .iter()
        .map(|p| if p.sign >= 0 { p.a_flagged_pos as f64 } else { p.a_flagged_neg as f64 })
        .collect();
    let mean_a_flagged_terminal_side =
        a_counts.iter().sum::<f64>() / a_counts.len().max(1) as f64;
    let total_a: u64 = live.iter().map(|p| p.a_flagged_pos + p.a_flagged_neg).sum();
    let below: u64 = live.iter().map(|p| p.ratios_below_half_floor).sum();
    let frac_ratios_below_half_floor =
        s.c0.map(|_| if total_a > 0 { below as f64 / total_a as f64 } else { 0.0 });
    TrendPoint {
        horizon,
        n_paths: s.n_paths,
        median_abs_rescaled,
        frac_running_max_over_1_5_c0,
        median_dist_to_c0,
        mean_a_flagged_terminal_side,
        frac_ratios_below_half_floor,
    }
}

/// Pooled evidence about fast-advance crossings on the escape side: counts
/// (which should grow with the horizon) and the empirical distribution of
/// outward drift ratios against the `(4c₀)^{-β}` floor.
#[derive(Debug, Clone, Serialize)]
pub struct FastAdvanceReport {
    pub n_escaped_pos: usize,
    pub mean_a_flagged: f64,
    pub min_a_flagged: u64,
    pub total_a_flagged: u64,
    pub ratio_floor: f64,
    pub frac_below_floor: f64,
    pub frac_below_half_floor: f64,
    pub min_ratio: Option<f64>,
}

pub fn lemma4_report(summary: &EnsembleSummary, constants: &ScalingConstants) -> FastAdvanceReport {
    let escaped: Vec<&PathSummary> =
        summary.per_path.iter().filter(|p| !p.aborted && p.sign > 0).collect();
    let counts: Vec<u64> = escaped.iter().map(|p| p.a_flagged_pos).collect();
    let total: u64 = counts.iter().sum();
    let below: u64 = escaped.iter().map(|p| p.ratios_below_floor).sum();
    let below_half: u64 = escaped.iter().map(|p| p.ratios_below_half_floor).sum();
    let min_ratio = escaped
        .iter()
        .filter_map(|p| p.lemma4_min_ratio)
        .fold(None, |m: Option<f64>, r| Some(m.map_or(r, |v| v.min(r))));
    FastAdvanceReport {
        n_escaped_pos: escaped.len(),
        mean_a_flagged: if escaped.is_empty() { 0.0 } else { total as f64 / escaped.len() as f64 },
        min_a_flagged: counts.iter().copied().min().unwrap_or(0),
        total_a_flagged: total,
        ratio_floor: constants.drift_ratio_floor(),
        frac_below_floor: if total > 0 { below as f64 / total as f64 } else { 0.0 },
        frac_below_half_floor: if total > 0 { below_half as f64 / total as f64 } else { 0.0 },
        min_ratio,
    }
}

/// Two-sided KS comparison of positive rescaled endpoints against the
/// reflected negative ones; under an odd kernel both sides share a law.
pub fn symmetry_ks(summary: &EnsembleSummary, alpha_level: f64) -> stats::KsResult {
    let pos: Vec<f64> = summary
        .per_path
        .iter()
        .filter(|p| !p.aborted && p.sign > 0)
        .map(|p| p.rescaled)
        .collect();
    let neg: Vec<f64> = summary
        .per_path
        .iter()
        .filter(|p| !p.aborted && p.sign < 0)
        .map(|p| -p.rescaled)
        .collect();
    stats::ks_two_sample(&pos, &neg, alpha_level)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::kernels::Kernel;

    fn small_cfg(kernel: Kernel, t_end: f64, seed: u64) -> SimConfig {
        let mut cfg = SimConfig::new(kernel, t_end).unwrap();
        cfg.seed = seed;
        cfg
    }

    #[test]
    fn worker_count_does_not_change_the_summary() {
        let cfg = small_cfg(Kernel::durrett_rogers(0.5).unwrap(), 8.0, 31);
        let a = run_ensemble(&cfg, 24, 1).unwrap();
        let b = run_ensemble(&cfg, 24, 8).unwrap();
        let ja = serde_json::to_string(&a).unwrap();
        let jb = serde_json::to_string(&b).unwrap();
        assert_eq!(ja, jb);
    }

    #[test]
    fn zero_kernel_terminal_law_is_standard_normal() {
        let mut cfg = small_cfg(Kernel::zero(), 1.0, 17);
        cfg.gamma_snapshots = false;
        let s = run_ensemble(&cfg, 4000, 8).unwrap();
        assert_eq!(s.n_aborted, 0);
        let xs: Vec<f64> = s.per_path.iter().map(|p| p.terminal_x).collect();
        let (mean, var) = crate::stats::mean_var(&xs);
        // X(1) = B(1) exactly; loose 4-sigma bands at n = 4000.
        assert!(mean.abs() < 0.07, "mean {mean}");
        assert!((var - 1.0).abs() < 0.09, "var {var}");
        // Sign balance among committed paths near 1/2.
        assert!(
            (s.sign_balance - 0.5).abs() < 0.04,
            "balance {} committed {}",
            s.sign_balance,
            s.committed_fraction
        );
    }

    #[test]
    fn nonneg_kernel_paths_escape_right() {
        let cfg = small_cfg(Kernel::nonneg_power(0.5).unwrap(), 60.0, 5);
        let s = run_ensemble(&cfg, 16, 4).unwrap();
        for p in &s.per_path {
            assert!(p.terminal_x > 0.0, "path {} ended at {}", p.path_id, p.terminal_x);
            assert_eq!(p.sign, 1);
            assert!(p.a_flagged_pos >= 1, "path {} had no fast advances", p.path_id);
            assert!(p.gamma_plus.unwrap() >= 0.0);
        }
        let rep = lemma4_report(&s, &compute_constants(0.5, 1.0).unwrap());
        assert_eq!(rep.n_escaped_pos, 16);
        assert!(rep.total_a_flagged > 16);
        assert!(rep.min_ratio.is_some());
    }

    #[test]
    fn trend_requires_three_horizons() {
        let cfg = small_cfg(Kernel::nonneg_power(0.5).unwrap(), 4.0, 2);
        let s = run_ensemble(&cfg, 4, 2).unwrap();
        assert!(matches!(
            scaling_trend(&[(4.0, &s)]),
            Err(Error::TooFew { what: "horizons", .. })
        ));
        assert!(scaling_trend(&[(4.0, &s), (8.0, &s)]).is_err());
    }

    #[test]
    fn trend_points_carry_per_horizon_stats() {
        let mk = |t_end: f64| {
            let cfg = small_cfg(Kernel::nonneg_power(0.5).unwrap(), t_end, 7);
            run_ensemble(&cfg, 12, 4).unwrap()
        };
        let (a, b, c) = (mk(8.0), mk(16.0), mk(32.0));
        let rep = scaling_trend(&[(8.0, &a), (16.0, &b), (32.0, &c)]).unwrap();
        assert_eq!(rep.points.len(), 3);
        assert!(rep.points[0].horizon < rep.points[2].horizon);
        assert!(rep.points.iter().all(|p| p.median_dist_to_c0.is_some()));
        // Fast advances accumulate with the horizon on escaping paths.
        assert!(rep.a_flagged_increasing, "{:#?}", rep.points);
    }

    #[test]
    fn symmetry_ks_on_odd_kernel_small_sample() {
        let mut cfg = small_cfg(Kernel::durrett_rogers(0.5).unwrap(), 20.0, 13);
        cfg.gamma_snapshots = false;
        let s = run_ensemble(&cfg, 400, 8).unwrap();
        let ks = symmetry_ks(&s, 0.01);
        assert!(ks.n + ks.m > 300, "most paths commit by t=20: {} {}", ks.n, ks.m);
        assert!(ks.pass, "{ks:?}");
    }

    #[test]
    fn rejects_empty_ensemble() {
        let cfg = small_cfg(Kernel::zero(), 1.0, 0);
        assert!(run_ensemble(&cfg, 0, 1).is_err());
    }
}
