//! Numerical certification of the deterministic and probabilistic facts the
//! scaling-law analysis rests on, each checked against a brute-force or
//! Monte Carlo oracle.
//!
//! * [`verify_lemma2`] — the one-sided drift-profile fact: if the drift of
//!   an occupation measure supported on `[a, b]` is nonpositive at a point
//!   `x₀` close enough to `b` (or if the interval is shorter than the
//!   kernel's peak), it is nonpositive on all of `[a, x₀]`. Checked on
//!   rejection-sampled atomic measures, the most adversarial discretization
//!   of a path history.
//! * [`verify_lemma7`] — drifted Brownian motion `M = B + ht` exits
//!   `[-a, a]` upward before the time cap `a²/2` with probability at least
//!   `1 - exp(2 - ah)` whenever `ah ≥ 6`.
//! * [`verify_sup_inequality`] — `P[sup_{s≤t} B_s ≥ a] ≤ exp(-a²/2t)`,
//!   cross-checked against the exact reflection value `2·Φ̄(a/√t)`.
//! * [`verify_all`] — the master report over a β grid, aggregating the
//!   above plus the kernel property checks, gap-sequence invariants, and
//!   scaling-constant residuals.
//!
//! Monte Carlo checks subtract a 3σ binomial band and a discretization
//! allowance measured by re-running at a 4× finer step (a Richardson-style
//! sentinel), rather than inventing a rate constant.

use crate::kernels::{check_kernel_properties, Kernel, PropertyReport};
use crate::rng::{self, StreamRng};
use crate::scaling::{self, compute_constants, DivergenceReport};
use crate::stats;
use crate::{Error, Result};
use rayon::prelude::*;
use serde::Serialize;

/// Default proposal budget per kept-instance target for the lemma-2
/// sampler.
const LEMMA2_PROPOSAL_BUDGET: u64 = 10_000_000;
/// Conclusion tolerance, relative to the instance's total mass.
const LEMMA2_TOL: f64 = 1e-12;
/// Grid points on `[a, x₀]` for the conclusion check.
const LEMMA2_GRID: usize = 1000;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum Lemma2Branch {
    /// `f(b - x₀) ≤ f(b - a)²` and `b - x₀ ≤ 1/16`.
    SmallGap,
    /// `b - a ≤ x_max`.
    ShortInterval,
}

/// A sampled instance: an atomic measure on `[a, b]` with a certificate
/// point `x₀` at which the drift profile is nonpositive.
#[derive(Debug, Clone)]
pub struct Lemma2Instance {
    pub a: f64,
    pub b: f64,
    pub x0: f64,
    pub branch: Lemma2Branch,
    /// (position, mass) pairs inside `[a, b]`.
    pub atoms: Vec<(f64, f64)>,
}

impl Lemma2Instance {
    pub fn total_mass(&self) -> f64 {
        self.atoms.iter().map(|&(_, m)| m).sum()
    }

    pub fn profile(&self, kernel: &Kernel, x: f64) -> f64 {
        self.atoms.iter().map(|&(p, m)| m * kernel.eval(x - p)).sum()
    }

    /// Re-verify the hypothesis this instance claims to satisfy.
    pub fn hypothesis_holds(&self, kernel: &Kernel, x_max: f64) -> bool {
        if !(self.a < self.b && self.a <= self.x0 && self.x0 <= self.b) {
            return false;
        }
        if self.atoms.iter().any(|&(p, m)| !(m > 0.0) || p < self.a || p > self.b) {
            return false;
        }
        if self.profile(kernel, self.x0) > 0.0 {
            return false;
        }
        match self.branch {
            Lemma2Branch::ShortInterval => self.b - self.a <= x_max,
            Lemma2Branch::SmallGap => {
                kernel.eval(self.b - self.x0) <= kernel.eval(self.b - self.a).powi(2)
                    && self.b - self.x0 <= 1.0 / 16.0
            }
        }
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct Lemma2Report {
    pub beta: f64,
    pub requested: usize,
    pub kept: usize,
    pub kept_small_gap: usize,
    pub kept_short_interval: usize,
    pub proposals: u64,
    pub violations: u64,
    /// Max over kept instances of `max_{grid x ∈ [a, x₀]} h(x) / mass`;
    /// the conclusion holds while this stays ≤ 1e-12.
    pub worst_margin: f64,
    pub starved: bool,
}

impl Lemma2Report {
    pub fn pass(&self) -> bool {
        self.violations == 0 && !self.starved
    }
}

/// Propose one instance; `None` if the hypothesis fails.
fn propose_lemma2(rng: &mut StreamRng, kernel: &Kernel, x_max: f64) -> Option<Lemma2Instance> {
    let (instance, _) = propose_lemma2_inner(rng, kernel, x_max)?;
    Some(instance)
}

fn propose_lemma2_inner(
    rng: &mut StreamRng,
    kernel: &Kernel,
    x_max: f64,
) -> Option<(Lemma2Instance, ())> {
    let branch = if rng.next_uniform() < 0.5 {
        Lemma2Branch::ShortInterval
    } else {
        Lemma2Branch::SmallGap
    };
    let a = rng.next_range(-5.0, 5.0);
    let instance = match branch {
        Lemma2Branch::ShortInterval => {
            let len = rng.next_uniform() * x_max;
            if len <= 0.0 {
                return None;
            }
            let b = a + len;
            let x0 = rng.next_range(a, b);
            let n = 1 + rng.next_index(8);
            let atoms: Vec<(f64, f64)> =
                (0..n).map(|_| (rng.next_range(a, b), -rng.next_uniform().ln())).collect();
            Lemma2Instance { a, b, x0, branch, atoms }
        }
        Lemma2Branch::SmallGap => {
            // Interval longer than the kernel peak, certificate point within
            // 1/16 of the right boundary. The hypothesis forces nearly all
            // mass above x0, so propose top-heavy clouds and tune a small
            // amount of below-mass to keep h(x0) barely nonpositive.
            let len = x_max * (1.0 + 29.0 * rng.next_uniform().powi(2));
            let b = a + len;
            let gap = rng.next_uniform() / 16.0;
            let x0 = b - gap;
            if x0 <= a {
                return None;
            }
            let n_top = 1 + rng.next_index(6);
            let mut atoms: Vec<(f64, f64)> = (0..n_top)
                .map(|_| (rng.next_range(x0, b), -rng.next_uniform().ln()))
                .collect();
            let top_drift: f64 =
                atoms.iter().map(|&(p, m)| m * kernel.eval(x0 - p)).sum();
            let n_below = rng.next_index(3);
            if n_below > 0 && top_drift < 0.0 {
                let raw: Vec<(f64, f64)> = (0..n_below)
                    .map(|_| (rng.next_range(a, x0), -rng.next_uniform().ln()))
                    .collect();
                let raw_drift: f64 = raw.iter().map(|&(p, m)| m * kernel.eval(x0 - p)).sum();
                if raw_drift > 0.0 {
                    // Scale so the below contribution uses a random fraction
                    // of the negative budget, keeping h(x0) ≤ 0.
                    let scale = rng.next_uniform() * (-top_drift) / raw_drift;
                    atoms.extend(raw.into_iter().map(|(p, m)| (p, m * scale)));
                }
            }
            atoms.retain(|&(_, m)| m > 0.0);
            if atoms.is_empty() {
                return None;
            }
            Lemma2Instance { a, b, x0, branch, atoms }
        }
    };
    if instance.hypothesis_holds(kernel, x_max) {
        Some((instance, ()))
    } else {
        None
    }
}

/// Rejection-sample `n_instances` valid instances and check the conclusion
/// `h(x) ≤ 1e-12·mass` on a 1000-point grid over `[a, x₀]`.
pub fn verify_lemma2(beta: f64, n_instances: usize, seed: u64) -> Result<Lemma2Report> {
    let kernel = Kernel::durrett_rogers(beta)?;
    let x_max = kernel.x_max()?;
    let stream_master = seed ^ beta.to_bits().rotate_left(17);

    const BATCH: u64 = 8192;
    let mut kept: Vec<Lemma2Instance> = Vec::with_capacity(n_instances);
    let mut proposals = 0u64;
    while kept.len() < n_instances && proposals < LEMMA2_PROPOSAL_BUDGET {
        let batch: Vec<Lemma2Instance> = (proposals..proposals + BATCH)
            .into_par_iter()
            .filter_map(|i| {
                let mut rng = StreamRng::new(stream_master, rng::context::LEMMA2, i);
                propose_lemma2(&mut rng, &kernel, x_max)
            })
            .collect();
        proposals += BATCH;
        kept.extend(batch);
    }
    kept.truncate(n_instances);
    let starved = kept.len() < n_instances;

    let kept_small_gap = kept.iter().filter(|i| i.branch == Lemma2Branch::SmallGap).count();
    let kept_short_interval = kept.len() - kept_small_gap;

    let results: Vec<(u64, f64)> = kept
        .par_iter()
        .map(|inst| {
            // Post-hoc re-verification of the hypothesis, then the
            // conclusion on the grid.
            assert!(inst.hypothesis_holds(&kernel, x_max));
            let mass = inst.total_mass();
            let mut worst = f64::NEG_INFINITY;
            for i in 0..LEMMA2_GRID {
                let x = inst.a + (inst.x0 - inst.a) * i as f64 / (LEMMA2_GRID - 1) as f64;
                worst = worst.max(inst.profile(&kernel, x) / mass);
            }
            ((worst > LEMMA2_TOL) as u64, worst)
        })
        .collect();
    let violations = results.iter().map(|(v, _)| v).sum();
    let worst_margin = results.iter().map(|(_, w)| *w).fold(f64::NEG_INFINITY, f64::max);

    Ok(Lemma2Report {
        beta,
        requested: n_instances,
        kept: kept.len(),
        kept_small_gap,
        kept_short_interval,
        proposals,
        violations,
        worst_margin,
        starved,
    })
}

#[derive(Debug, Clone, Serialize)]
pub struct Lemma7Report {
    pub a: f64,
    pub h: f64,
    pub n_trials: usize,
    pub dt: f64,
    /// `1 - exp(2 - ah)`.
    pub bound: f64,
    pub p_coarse: f64,
    pub p_fine: f64,
    pub se: f64,
    /// |p_fine - p_coarse|, the discretization sentinel.
    pub allowance: f64,
    pub pass: bool,
}

fn lemma7_trial(rng: &mut StreamRng, a: f64, h: f64, dt: f64) -> bool {
    let cap = 0.5 * a * a;
    let sqrt_dt = dt.sqrt();
    let drift = h * dt;
    let mut m = 0.0;
    let mut t = 0.0;
    while t < cap {
        m += drift + sqrt_dt * rng.next_normal();
        t += dt;
        if m >= a {
            return true;
        }
        if m <= -a {
            return false;
        }
    }
    false
}

/// Estimate the upward-exit probability of `M = B + ht` from `[-a, a]`
/// (capped at `a²/2`) and compare with the `1 - exp(2 - ah)` lower bound.
pub fn verify_lemma7(a: f64, h: f64, n_trials: usize, dt: f64, seed: u64) -> Result<Lemma7Report> {
    if !(a > 0.0 && h > 0.0 && a * h >= 6.0) {
        return Err(Error::Lemma7Domain { a, h });
    }
    if !(dt > 0.0 && dt <= a * a * 1e-5) {
        return Err(Error::InvalidConfig(format!(
            "lemma 7 monitoring step must satisfy 0 < dt ≤ {} , got {dt}",
            a * a * 1e-5
        )));
    }
    let run = |level: u64, step: f64| -> f64 {
        let hits: u64 = (0..n_trials as u64)
            .into_par_iter()
            .map(|trial| {
                let mut rng = StreamRng::new(seed, rng::context::LEMMA7, (level << 48) | trial);
                lemma7_trial(&mut rng, a, h, step) as u64
            })
            .sum();
        hits as f64 / n_trials as f64
    };
    let p_coarse = run(0, dt);
    let p_fine = run(1, dt / 4.0);
    let bound = 1.0 - (2.0 - a * h).exp();
    let se = stats::binomial_se(p_fine, n_trials);
    let allowance = (p_fine - p_coarse).abs();
    let pass = p_fine >= bound - 3.0 * se - allowance;
    Ok(Lemma7Report { a, h, n_trials, dt, bound, p_coarse, p_fine, se, allowance, pass })
}

#[derive(Debug, Clone, Serialize)]
pub struct SupBoundReport {
    pub t: f64,
    pub a: f64,
    pub n_trials: usize,
    /// `exp(-a²/(2t))`.
    pub bound: f64,
    /// Reflection-principle value `2·Φ̄(a/√t)`.
    pub exact: f64,
    pub p_coarse: f64,
    pub p_fine: f64,
    pub se: f64,
    pub allowance: f64,
    pub pass: bool,
}

fn sup_trial(rng: &mut StreamRng, t: f64, a: f64, n_steps: usize) -> bool {
    let dt = t / n_steps as f64;
    let sqrt_dt = dt.sqrt();
    let mut b = 0.0f64;
    if a <= 0.0 {
        return true;
    }
    for _ in 0..n_steps {
        b += sqrt_dt * rng.next_normal();
        if b >= a {
            return true;
        }
    }
    false
}

/// Monte Carlo check of the exponential bound on the running maximum of
/// Brownian motion, with the reflection value as the exact cross-check.
pub fn verify_sup_inequality(t: f64, a: f64, n_trials: usize, seed: u64) -> Result<SupBoundReport> {
    if !(t > 0.0) {
        return Err(Error::NonPositive { name: "t", value: t });
    }
    if !(a >= 0.0) {
        return Err(Error::InvalidConfig(format!("barrier must be nonnegative, got {a}")));
    }
    let run = |level: u64, n_steps: usize| -> f64 {
        let hits: u64 = (0..n_trials as u64)
            .into_par_iter()
            .map(|trial| {
                let mut rng = StreamRng::new(seed, rng::context::SUP_INEQ, (level << 48) | trial);
                sup_trial(&mut rng, t, a, n_steps) as u64
            })
            .sum();
        hits as f64 / n_trials as f64
    };
    let p_coarse = run(0, 2000);
    let p_fine = run(1, 8000);
    let bound = (-a * a / (2.0 * t)).exp();
    let exact = 2.0 * stats::normal_sf(a / t.sqrt());
    let se = stats::binomial_se(p_fine.max(1e-12).min(1.0 - 1e-12), n_trials);
    let allowance = (p_fine - p_coarse).abs();
    // Discrete monitoring only undercounts the supremum, so the estimate
    // must sit below bound and exact (within noise) and above exact minus
    // the measured discretization loss.
    let pass = p_fine <= bound + 3.0 * se
        && p_fine <= exact + 3.0 * se
        && p_fine >= exact - 3.0 * se - allowance - 2.0 * (p_coarse - p_fine).abs().max(se);
    Ok(SupBoundReport { t, a, n_trials, bound, exact, p_coarse, p_fine, se, allowance, pass })
}

#[derive(Debug, Clone, Serialize)]
pub struct ConstantsCheck {
    pub beta: f64,
    pub alpha: f64,
    pub c0: f64,
    pub residual: f64,
    pub pass: bool,
}

#[derive(Debug, Clone, Serialize)]
pub struct GapSequenceCheck {
    pub beta: f64,
    pub prefix_len: usize,
    pub nondecreasing: bool,
    pub second_equals_first: bool,
    pub strictly_increasing_after_two: bool,
    pub doubling_bound: bool,
    pub divergence: DivergenceReport,
    pub pass: bool,
}

fn check_gap_sequence(beta: f64, prefix_len: usize, target: f64, cap: u64) -> Result<GapSequenceCheck> {
    let seq = scaling::a_sequence(beta, prefix_len)?;
    let nondecreasing = seq.windows(2).all(|w| w[1] >= w[0]);
    let second_equals_first = seq[2] == seq[1];
    let strictly_increasing_after_two = seq[2..].windows(2).all(|w| w[1] > w[0]);
    let doubling_bound = seq[1..].windows(2).all(|w| w[1] <= 2.0 * w[0]);
    let divergence = scaling::divergence_check(beta, target, cap)?;
    let pass = nondecreasing
        && second_equals_first
        && strictly_increasing_after_two
        && doubling_bound
        && divergence.pass();
    Ok(GapSequenceCheck {
        beta,
        prefix_len,
        nondecreasing,
        second_equals_first,
        strictly_increasing_after_two,
        doubling_bound,
        divergence,
        pass,
    })
}

/// Work sizes for [`verify_all`]; defaults match the full certification run.
#[derive(Debug, Clone)]
pub struct VerifyOptions {
    pub lemma2_instances: usize,
    pub lemma7_trials: usize,
    pub sup_trials: usize,
    pub grid_step: f64,
    pub grid_lo: f64,
    pub grid_hi: f64,
    pub n_triples: usize,
    pub gap_prefix: usize,
    pub gap_target: f64,
    pub gap_cap: u64,
}

impl Default for VerifyOptions {
    fn default() -> Self {
        VerifyOptions {
            lemma2_instances: 10_000,
            lemma7_trials: 100_000,
            sup_trials: 100_000,
            grid_step: 1e-3,
            grid_lo: -2.0,
            grid_hi: 50.0,
            n_triples: 100_000,
            gap_prefix: 10_000,
            gap_target: 1e3,
            gap_cap: 10_000_000,
        }
    }
}

/// Aggregated certification report.
#[derive(Debug, Clone, Serialize)]
pub struct MasterReport {
    pub seed: u64,
    pub beta_grid: Vec<f64>,
    pub constants: Vec<ConstantsCheck>,
    pub kernel_properties: Vec<PropertyReport>,
    pub gap_sequences: Vec<GapSequenceCheck>,
    pub lemma2: Vec<Lemma2Report>,
    pub lemma7: Vec<Lemma7Report>,
    pub sup_inequality: Vec<SupBoundReport>,
    pub all_pass: bool,
}

impl MasterReport {
    pub fn render_text(&self) -> String {
        let mut out = String::new();
        let mut line = |s: String| {
            out.push_str(&s);
            out.push('\n');
        };
        line(format!("certification report (seed {})", self.seed));
        for c in &self.constants {
            line(format!(
                "  [{}] constants beta={:.3}: alpha={:.6} c0={:.9} residual={:.2e}",
                pf(c.pass),
                c.beta,
                c.alpha,
                c.c0,
                c.residual
            ));
        }
        for p in &self.kernel_properties {
            let worst =
                p.checks.iter().map(|c| c.worst_margin).fold(f64::INFINITY, f64::min);
            line(format!(
                "  [{}] kernel properties beta={:.3}: 5 checks, worst margin {:.2e}",
                pf(p.all_pass()),
                p.beta,
                worst
            ));
        }
        for g in &self.gap_sequences {
            line(format!(
                "  [{}] gap sequence beta={:.3}: target {} at n={} (certified ≤ {})",
                pf(g.pass),
                g.beta,
                g.divergence.target,
                g.divergence
                    .n_at_target
                    .map(|n| n.to_string())
                    .unwrap_or_else(|| "beyond cap".into()),
                g.divergence.n_certified
            ));
        }
        for l in &self.lemma2 {
            line(format!(
                "  [{}] drift-profile lemma beta={:.3}: kept {}/{} ({} gap, {} short), {} violations, worst {:.2e}",
                pf(l.pass()),
                l.beta,
                l.kept,
                l.requested,
                l.kept_small_gap,
                l.kept_short_interval,
                l.violations,
                l.worst_margin
            ));
        }
        for l in &self.lemma7 {
            line(format!(
                "  [{}] exit lemma a={} h={}: p={:.6} ≥ {:.6} - 3·{:.1e} - {:.1e}",
                pf(l.pass),
                l.a,
                l.h,
                l.p_fine,
                l.bound,
                l.se,
                l.allowance
            ));
        }
        for s in &self.sup_inequality {
            line(format!(
                "  [{}] sup bound t={} a={}: p={:.6} ≤ bound {:.6}, exact {:.6}",
                pf(s.pass),
                s.t,
                s.a,
                s.p_fine,
                s.bound,
                s.exact
            ));
        }
        line(format!("overall: {}", if self.all_pass { "PASS" } else { "FAIL" }));
        out
    }
}

fn pf(pass: bool) -> &'static str {
    if pass {
        "pass"
    } else {
        "FAIL"
    }
}

/// Run every certification section over a β grid.
pub fn verify_all(beta_grid: &[f64], seed: u64, opts: &VerifyOptions) -> Result<MasterReport> {
    let mut constants = Vec::new();
    let mut kernel_properties = Vec::new();
    let mut gap_sequences = Vec::new();
    let mut lemma2 = Vec::new();
    for &beta in beta_grid {
        let c = compute_constants(beta, 1.0)?;
        let residual = c.identity_residual();
        constants.push(ConstantsCheck {
            beta,
            alpha: c.alpha,
            c0: c.c0,
            residual,
            pass: residual.abs() <= 1e-12,
        });
        let kernel = Kernel::durrett_rogers(beta)?;
        kernel_properties.push(check_kernel_properties(
            &kernel,
            opts.grid_step,
            opts.grid_lo,
            opts.grid_hi,
            opts.n_triples,
            seed,
        )?);
        gap_sequences.push(check_gap_sequence(beta, opts.gap_prefix, opts.gap_target, opts.gap_cap)?);
        lemma2.push(verify_lemma2(beta, opts.lemma2_instances, seed)?);
    }

    let mut lemma7 = Vec::new();
    for h in [6.0, 8.0, 12.0, 20.0] {
        lemma7.push(verify_lemma7(1.0, h, opts.lemma7_trials, 1e-5, seed)?);
    }

    let mut sup_inequality = Vec::new();
    for (t, a) in [(1.0, 1.0), (1.0, 2.0), (4.0, 2.0)] {
        sup_inequality.push(verify_sup_inequality(t, a, opts.sup_trials, seed)?);
    }

    let all_pass = constants.iter().all(|c| c.pass)
        && kernel_properties.iter().all(|p| p.all_pass())
        && gap_sequences.iter().all(|g| g.pass)
        && lemma2.iter().all(|l| l.pass())
        && lemma7.iter().all(|l| l.pass)
        && sup_inequality.iter().all(|s| s.pass);

    Ok(MasterReport {
        seed,
        beta_grid: beta_grid.to_vec(),
        constants,
        kernel_properties,
        gap_sequences,
        lemma2,
        lemma7,
        sup_inequality,
        all_pass,
    })
}
