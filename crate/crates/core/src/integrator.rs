//! Advances one path of the self-interacting diffusion by Euler-Maruyama.
//!
//! Each step evaluates the drift `G = g_t(X_t)` against the occupation
//! measure of the history so far, deposits the step's time mass at the
//! step's starting position (left-endpoint rule, matching the frozen-drift
//! convention of the scheme: a step's own mass first affects the *next*
//! step's drift), then moves
//!
//! ```text
//! X ← X + G·dt + sqrt(dt)·ξ,      ξ ~ N(0,1) per-step counter draw.
//! ```
//!
//! The step size shrinks as the drift grows, `dt ≤ dt_safety/(1+|G|)`, so
//! the per-step drift displacement stays bounded while `G ~ t^{α-1}`
//! diverges. Steps also land exactly on record times and on `t_end`, which
//! keeps record grids identical across paths.
//!
//! Level crossings are detected by linear interpolation between step
//! endpoints; the within-step excursion of the Brownian bridge is ignored,
//! so hitting times carry a small positive bias that shrinks with
//! `dt_base` and largely cancels in differences of consecutive hitting
//! times.

use crate::kernels::Kernel;
use crate::occupation::{CellRecord, DriftEvaluator, DriftMode, DriftQuerySpec, OccupationMeasure};
use crate::rng::{self, StreamKey};
use crate::{Error, Result};
use serde::{Deserialize, Serialize};
use std::collections::HashMap;

/// Full description of one simulation; `(config, seed, path_id)` determines
/// a trajectory bit for bit.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimConfig {
    pub kernel: Kernel,
    pub t_end: f64,
    /// Upper bound on the step size.
    pub dt_base: f64,
    /// Drift-displacement cap: `dt ≤ dt_safety / (1 + |G|)`.
    pub dt_safety: f64,
    pub bin_width: f64,
    pub drift_spec: DriftQuerySpec,
    pub seed: u64,
    pub noise_on: bool,
    /// Times at which `(t, x, G)` samples are recorded; strictly increasing
    /// within `[0, t_end]`.
    pub record_times: Vec<f64>,
    /// Spacing of tracked hitting levels on both sides of the origin.
    pub level_step: f64,
    /// Early-time cut for the running-maximum statistic, as a fraction of
    /// `t_end`.
    pub t_min_fraction: f64,
    /// Save occupation deltas at dyadic times for the backward-drift
    /// diagnostic.
    pub gamma_snapshots: bool,
}

impl SimConfig {
    /// A config with conventional defaults for the given kernel and horizon:
    /// coarsened drift, geometric record times, unit level spacing.
    pub fn new(kernel: Kernel, t_end: f64) -> Result<Self> {
        let cfg = SimConfig {
            kernel,
            t_end,
            dt_base: 0.01,
            dt_safety: 0.1,
            bin_width: 0.1,
            drift_spec: DriftQuerySpec::coarsened(0.05, 2.0)?,
            seed: 0,
            noise_on: true,
            record_times: Self::geometric_record_times(1.0, std::f64::consts::SQRT_2.sqrt(), t_end),
            level_step: 1.0,
            t_min_fraction: 0.125,
            gamma_snapshots: true,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    /// Geometric grid `start, start·ratio, …` capped and terminated at
    /// `t_end`.
    pub fn geometric_record_times(start: f64, ratio: f64, t_end: f64) -> Vec<f64> {
        let mut times = Vec::new();
        if start > 0.0 && ratio > 1.0 {
            let mut v = start;
            while v < t_end * (1.0 - 1e-12) {
                times.push(v);
                v *= ratio;
            }
        }
        if t_end > 0.0 {
            times.push(t_end);
        }
        times
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.t_end > 0.0 && self.t_end.is_finite()) {
            return Err(Error::NonPositive { name: "t_end", value: self.t_end });
        }
        if !(self.dt_base > 0.0) {
            return Err(Error::NonPositive { name: "dt_base", value: self.dt_base });
        }
        if !(self.dt_safety > 0.0 && self.dt_safety <= 1.0) {
            return Err(Error::InvalidConfig(format!(
                "dt_safety must lie in (0, 1], got {}",
                self.dt_safety
            )));
        }
        if !(self.bin_width > 0.0) {
            return Err(Error::NonPositive { name: "bin_width", value: self.bin_width });
        }
        if !(self.level_step > 0.0) {
            return Err(Error::NonPositive { name: "level_step", value: self.level_step });
        }
        if !(self.t_min_fraction >= 0.0 && self.t_min_fraction < 1.0) {
            return Err(Error::InvalidConfig(format!(
                "t_min_fraction must lie in [0, 1), got {}",
                self.t_min_fraction
            )));
        }
        self.drift_spec.validate(self.bin_width)?;
        let mut prev = -f64::EPSILON;
        for &t in &self.record_times {
            if !(t >= 0.0 && t <= self.t_end && t > prev) {
                return Err(Error::InvalidConfig(format!(
                    "record_times must be strictly increasing within [0, {}]",
                    self.t_end
                )));
            }
            prev = t;
        }
        Ok(())
    }

    /// Scaling exponent used for rescaled diagnostics.
    pub fn alpha(&self) -> f64 {
        self.kernel.scaling_alpha()
    }
}

/// One `(t, x, G)` sample.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Record {
    pub t: f64,
    pub x: f64,
    pub g: f64,
}

/// First passage of one tracked level.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct HittingRecord {
    pub level: f64,
    pub t_hit: f64,
    /// Fast-advance event: `T_level ≤ T_{level∓step} + 1`, with the previous
    /// level taken one step closer to the origin on the same side.
    pub a_event: bool,
    /// Drift during the crossing step.
    pub g_at_hit: f64,
    /// `g_at_hit / t_hit^{α-1}` (signed; positive means outward on the
    /// positive side).
    pub ratio: f64,
}

/// First-passage bookkeeping: levels are crossed in order on each side, so
/// only the next untracked level and the previous hitting time are needed.
#[derive(Debug, Clone, Serialize, Deserialize)]
struct LevelTracker {
    next_pos: i64,
    prev_pos_t: f64,
    next_neg: i64,
    prev_neg_t: f64,
}

impl LevelTracker {
    fn new() -> Self {
        LevelTracker { next_pos: 1, prev_pos_t: 0.0, next_neg: 1, prev_neg_t: 0.0 }
    }
}

/// Occupation deltas bucketed by dyadic epochs, enough to evaluate the
/// drift any snapshot time would have produced at one final position.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct GammaTracker {
    enabled: bool,
    next_boundary: f64,
    /// Closed epochs: (close time, cells sorted by id).
    epochs: Vec<(f64, Vec<CellRecord>)>,
    #[serde(skip)]
    current: HashMap<i64, (f64, f64)>,
    /// Serialized image of `current` (sorted); rebuilt on deserialize.
    current_cells: Vec<CellRecord>,
}

impl GammaTracker {
    fn new(enabled: bool) -> Self {
        GammaTracker {
            enabled,
            next_boundary: 1.0,
            epochs: Vec::new(),
            current: HashMap::new(),
            current_cells: Vec::new(),
        }
    }

    #[inline]
    fn record(&mut self, cell: i64, x: f64, dt: f64, t: f64) {
        if !self.enabled {
            return;
        }
        while t >= self.next_boundary {
            let cells = Self::drain_sorted(&mut self.current);
            self.epochs.push((self.next_boundary, cells));
            self.next_boundary *= 2.0;
        }
        let e = self.current.entry(cell).or_insert((0.0, 0.0));
        e.0 += dt;
        e.1 += x * dt;
    }

    fn drain_sorted(current: &mut HashMap<i64, (f64, f64)>) -> Vec<CellRecord> {
        let mut cells: Vec<CellRecord> = current
            .drain()
            .map(|(cell_id, (mass, first_moment))| CellRecord { cell_id, mass, first_moment })
            .collect();
        cells.sort_by_key(|c| c.cell_id);
        cells
    }

    /// Snapshot times currently closed (the implicit empty snapshot at 0 is
    /// not listed).
    pub fn snapshot_times(&self) -> Vec<f64> {
        self.epochs.iter().map(|(s, _)| *s).collect()
    }

    fn prepare_serialize(&mut self) {
        self.current_cells = Self::drain_sorted(&mut self.current.clone());
    }

    fn restore_after_deserialize(&mut self) {
        self.current = self
            .current_cells
            .iter()
            .map(|c| (c.cell_id, (c.mass, c.first_moment)))
            .collect();
        self.current_cells.clear();
    }

    /// `min over snapshots s (including s = 0) of g_T(x) - g_s(x)`, where
    /// `g_s` is the drift the epoch prefix up to `s` produces at `x`.
    pub fn backward_drift_deficit(&self, kernel: &Kernel, x: f64) -> Result<f64> {
        if !self.enabled {
            return Err(Error::NoSnapshots);
        }
        let epoch_drift = |cells: &[CellRecord]| -> f64 {
            cells.iter().map(|c| c.mass * kernel.eval(x - c.first_moment / c.mass)).sum()
        };
        let mut partials = Vec::with_capacity(self.epochs.len() + 1);
        let mut acc = 0.0;
        partials.push(acc); // s = 0, empty history
        for (_, cells) in &self.epochs {
            acc += epoch_drift(cells);
            partials.push(acc);
        }
        let current: Vec<CellRecord> = {
            let mut m = self.current.clone();
            Self::drain_sorted(&mut m)
        };
        let g_final = acc + epoch_drift(&current);
        Ok(partials.into_iter().map(|g_s| g_final - g_s).fold(f64::INFINITY, f64::min))
    }
}

/// Evolving state of one trajectory.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PathState {
    pub path_id: u64,
    pub t: f64,
    pub x: f64,
    pub step_index: u64,
    pub max_so_far: f64,
    pub min_so_far: f64,
    #[serde(skip, default = "empty_measure")]
    pub measure: OccupationMeasure,
    pub records: Vec<Record>,
    pub hittings: Vec<HittingRecord>,
    next_record_idx: usize,
    levels: LevelTracker,
    pub gamma: GammaTracker,
}

fn empty_measure() -> OccupationMeasure {
    OccupationMeasure::new(1.0).expect("unit bin width")
}

/// Why a path stopped early.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AbortDiagnostic {
    pub t: f64,
    pub x: f64,
    pub g: f64,
    pub reason: String,
}

/// A finished (or aborted) path with its partial results retained.
#[derive(Debug)]
pub struct PathRun {
    pub state: PathState,
    pub aborted: Option<AbortDiagnostic>,
}

impl PathRun {
    /// Backward-drift deficit diagnostic at the terminal position.
    pub fn gamma_plus(&self, kernel: &Kernel) -> Result<f64> {
        self.state.gamma.backward_drift_deficit(kernel, self.state.x)
    }
}

/// Drives one path; holds the prepared drift evaluator and the path's
/// noise stream.
pub struct PathRunner<'c> {
    cfg: &'c SimConfig,
    eval: DriftEvaluator<'c>,
    key: StreamKey,
    alpha: f64,
}

impl<'c> PathRunner<'c> {
    pub fn new(cfg: &'c SimConfig, path_id: u64) -> Result<Self> {
        cfg.validate()?;
        Ok(PathRunner {
            cfg,
            eval: DriftEvaluator::new(&cfg.kernel, cfg.drift_spec),
            key: StreamKey::derive(cfg.seed, rng::context::PATH, path_id),
            alpha: cfg.kernel.scaling_alpha(),
        })
    }

    pub fn fresh_state(&self, path_id: u64) -> Result<PathState> {
        Ok(PathState {
            path_id,
            t: 0.0,
            x: 0.0,
            step_index: 0,
            max_so_far: 0.0,
            min_so_far: 0.0,
            measure: OccupationMeasure::new(self.cfg.bin_width)?,
            records: Vec::new(),
            hittings: Vec::new(),
            next_record_idx: 0,
            levels: LevelTracker::new(),
            gamma: GammaTracker::new(self.cfg.gamma_snapshots),
        })
    }

    /// Current drift `g_t(X_t)` of a state.
    pub fn drift(&self, st: &PathState) -> f64 {
        self.eval.eval(&st.measure, st.x)
    }

    /// Advance one step. The state must satisfy `t < t_end`.
    pub fn step(&self, st: &mut PathState) -> std::result::Result<(), AbortDiagnostic> {
        let cfg = self.cfg;
        let g = self.eval.eval(&st.measure, st.x);
        if !g.is_finite() {
            return Err(AbortDiagnostic {
                t: st.t,
                x: st.x,
                g,
                reason: "non-finite drift".to_string(),
            });
        }
        if st.next_record_idx < cfg.record_times.len()
            && st.t >= cfg.record_times[st.next_record_idx]
        {
            st.records.push(Record { t: st.t, x: st.x, g });
            st.next_record_idx += 1;
        }

        let mut dt = cfg.dt_base.min(cfg.dt_safety / (1.0 + g.abs()));
        let mut land: Option<f64> = None;
        if st.next_record_idx < cfg.record_times.len() {
            let rt = cfg.record_times[st.next_record_idx];
            if rt - st.t <= dt {
                dt = rt - st.t;
                land = Some(rt);
            }
        }
        if cfg.t_end - st.t <= dt {
            dt = cfg.t_end - st.t;
            land = Some(cfg.t_end);
        }
        debug_assert!(dt > 0.0, "step collapsed to dt={dt} at t={}", st.t);

        // Left-endpoint deposit: this step's mass is seen by the next
        // step's drift, not this one's.
        let cell = (st.x / cfg.bin_width).floor() as i64;
        if let Err(e) = st.measure.deposit(st.x, dt) {
            return Err(AbortDiagnostic { t: st.t, x: st.x, g, reason: e.to_string() });
        }
        st.gamma.record(cell, st.x, dt, st.t);

        let xi = if cfg.noise_on { self.key.normal_at(st.step_index) } else { 0.0 };
        let x_new = st.x + g * dt + dt.sqrt() * xi;
        let t_new = land.unwrap_or(st.t + dt);
        if !x_new.is_finite() {
            return Err(AbortDiagnostic {
                t: t_new,
                x: x_new,
                g,
                reason: "non-finite position".to_string(),
            });
        }

        let t0 = st.t;
        self.detect_crossings(st, x_new, t0, t_new, dt, g);

        st.x = x_new;
        st.t = t_new;
        st.max_so_far = st.max_so_far.max(x_new);
        st.min_so_far = st.min_so_far.min(x_new);
        st.step_index += 1;
        Ok(())
    }

    fn detect_crossings(&self, st: &mut PathState, x_new: f64, t0: f64, t1: f64, dt: f64, g: f64) {
        let ls = self.cfg.level_step;
        let x0 = st.x;
        if x_new > x0 {
            loop {
                let level = st.levels.next_pos as f64 * ls;
                if x_new < level {
                    break;
                }
                let t_hit = (t0 + dt * (level - x0) / (x_new - x0)).min(t1);
                let a_event = t_hit <= st.levels.prev_pos_t + 1.0;
                st.hittings.push(HittingRecord {
                    level,
                    t_hit,
                    a_event,
                    g_at_hit: g,
                    ratio: g / t_hit.powf(self.alpha - 1.0),
                });
                st.levels.prev_pos_t = t_hit;
                st.levels.next_pos += 1;
            }
        } else if x_new < x0 {
            loop {
                let level = -(st.levels.next_neg as f64) * ls;
                if x_new > level {
                    break;
                }
                let t_hit = (t0 + dt * (level - x0) / (x_new - x0)).min(t1);
                let a_event = t_hit <= st.levels.prev_neg_t + 1.0;
                st.hittings.push(HittingRecord {
                    level,
                    t_hit,
                    a_event,
                    g_at_hit: g,
                    ratio: g / t_hit.powf(self.alpha - 1.0),
                });
                st.levels.prev_neg_t = t_hit;
                st.levels.next_neg += 1;
            }
        }
    }

    /// Step until `t_end`; on abort the partial state is kept.
    pub fn run_to_end(&self, st: &mut PathState) -> Option<AbortDiagnostic> {
        while st.t < self.cfg.t_end {
            if let Err(abort) = self.step(st) {
                return Some(abort);
            }
        }
        // Terminal record, if t_end is a record time.
        if st.next_record_idx < self.cfg.record_times.len()
            && st.t >= self.cfg.record_times[st.next_record_idx]
        {
            let g = self.eval.eval(&st.measure, st.x);
            st.records.push(Record { t: st.t, x: st.x, g });
            st.next_record_idx += 1;
        }
        None
    }
}

/// Run one full path from scratch.
pub fn run_path(cfg: &SimConfig, path_id: u64) -> Result<PathRun> {
    let runner = PathRunner::new(cfg, path_id)?;
    let mut state = runner.fresh_state(path_id)?;
    let aborted = runner.run_to_end(&mut state);
    Ok(PathRun { state, aborted })
}

pub(crate) use serialization::snapshot_state;

pub(crate) mod serialization {
    //! Checkpoint glue: `PathState` splits into serde-friendly parts plus
    //! the cell snapshot of its measure (see [`crate::checkpoint`]).

    use super::*;

    pub fn snapshot_state(state: &PathState) -> (PathState, Vec<CellRecord>, f64) {
        let mut clone = state.clone();
        clone.gamma.prepare_serialize();
        let cells = state.measure.cells().collect();
        (clone, cells, state.measure.bin_width())
    }

    pub fn restore_state(
        mut state: PathState,
        cells: Vec<CellRecord>,
        bin_width: f64,
    ) -> Result<PathState> {
        state.measure = OccupationMeasure::from_cells(bin_width, cells)?;
        state.gamma.restore_after_deserialize();
        Ok(state)
    }
}
