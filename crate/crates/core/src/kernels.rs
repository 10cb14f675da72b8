//! The interaction-function family and its analytic facts.
//!
//! The main member is the Durrett-Rogers kernel
//!
//! ```text
//! f(x) = x / (1 + |x|^{1+β}),   0 < β < 1,
//! ```
//!
//! an odd, bounded, self-repelling kernel with `f(x) ~ x^{-β}` at infinity.
//! `NonnegPower` is the simplest nonnegative kernel with the same tail,
//! `f(x) = (1+|x|)^{-β}`; `Zero` and `Constant` exist for integrator oracles.
//!
//! Facts other modules lean on (all checked by [`check_kernel_properties`]
//! and the tests here):
//!
//! * `‖f‖∞ ≤ 1` and `|f′| ≤ 1`, the maximum slope sitting at the origin;
//! * `f` increases up to `x_max = (1/β)^{1/(1+β)} ≥ 1` and decreases after;
//! * `f(γ) ≥ min(f(a), f(θ))` whenever `-x_max ≤ a ≤ γ ≤ θ`;
//! * `f′(x) ≥ -f(x)` on `[-1/2, ∞)`;
//! * `f(x_max) ≤ x_max^{-β}`.

use crate::{Error, Result};
use crate::rng::{self, StreamRng};
use serde::{Deserialize, Serialize};

/// One member of the interaction-function family.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Kernel {
    /// `f(x) = x / (1 + |x|^{1+β})`, odd, repelling, `l = 1`.
    DurrettRogers { beta: f64 },
    /// `f(x) = (1 + |x|)^{-β}`, nonnegative with `f(0) = 1`, `l = 1`.
    NonnegPower { beta: f64 },
    /// `f ≡ 0`; the path is plain Brownian motion.
    Zero,
    /// `f ≡ c`; the drift is `c·t` and the noise-free path a parabola.
    Constant { c: f64 },
}

fn check_beta(beta: f64) -> Result<f64> {
    if beta.is_finite() && 0.0 < beta && beta < 1.0 {
        Ok(beta)
    } else {
        Err(Error::BetaOutOfRange(beta))
    }
}

impl Kernel {
    pub fn durrett_rogers(beta: f64) -> Result<Self> {
        Ok(Kernel::DurrettRogers { beta: check_beta(beta)? })
    }

    pub fn nonneg_power(beta: f64) -> Result<Self> {
        Ok(Kernel::NonnegPower { beta: check_beta(beta)? })
    }

    pub fn zero() -> Self {
        Kernel::Zero
    }

    pub fn constant(c: f64) -> Self {
        Kernel::Constant { c }
    }

    pub fn name(&self) -> &'static str {
        match self {
            Kernel::DurrettRogers { .. } => "durrett_rogers",
            Kernel::NonnegPower { .. } => "nonneg_power",
            Kernel::Zero => "zero",
            Kernel::Constant { .. } => "constant",
        }
    }

    pub fn beta(&self) -> Option<f64> {
        match *self {
            Kernel::DurrettRogers { beta } | Kernel::NonnegPower { beta } => Some(beta),
            _ => None,
        }
    }

    /// The tail constant `l` in `x^β f(x) → l`.
    pub fn asymptotic_constant(&self) -> f64 {
        match *self {
            Kernel::DurrettRogers { .. } | Kernel::NonnegPower { .. } => 1.0,
            Kernel::Zero => 0.0,
            Kernel::Constant { c } => c,
        }
    }

    /// Scaling exponent `α = 2/(1+β)` of the superdiffusive regime. The
    /// constant kernel is the `β = 0` endpoint (`α = 2`, ballistic-in-t²
    /// noise-free motion); the zero kernel has no drift scale and maps to 1
    /// so that hitting-time ratios degenerate to the raw drift.
    pub fn scaling_alpha(&self) -> f64 {
        match *self {
            Kernel::DurrettRogers { beta } | Kernel::NonnegPower { beta } => 2.0 / (1.0 + beta),
            Kernel::Constant { .. } => 2.0,
            Kernel::Zero => 1.0,
        }
    }

    /// Evaluate `f(x)`. Total on the reals for every variant.
    #[inline]
    pub fn eval(&self, x: f64) -> f64 {
        match *self {
            Kernel::DurrettRogers { beta } => x / (1.0 + x.abs().powf(1.0 + beta)),
            Kernel::NonnegPower { beta } => (1.0 + x.abs()).powf(-beta),
            Kernel::Zero => 0.0,
            Kernel::Constant { c } => c,
        }
    }

    /// Evaluate `f′(x)`.
    ///
    /// For Durrett-Rogers and `x ≥ 0` this is the closed form
    /// `(1 - βx^{1+β}) / (1 + x^{1+β})²`; since `f` is odd and smooth at the
    /// origin, `f′` extends to `x < 0` as an even function. `NonnegPower` is
    /// even, so its derivative is odd (`0` at the kink by symmetry).
    #[inline]
    pub fn derivative(&self, x: f64) -> f64 {
        match *self {
            Kernel::DurrettRogers { beta } => {
                let a = x.abs().powf(1.0 + beta);
                let denom = 1.0 + a;
                (1.0 - beta * a) / (denom * denom)
            }
            Kernel::NonnegPower { beta } => {
                -beta * x.signum() * (1.0 + x.abs()).powf(-1.0 - beta)
            }
            Kernel::Zero | Kernel::Constant { .. } => 0.0,
        }
    }

    /// The unique positive maximum `x_max = (1/β)^{1/(1+β)}` of the
    /// Durrett-Rogers kernel; always `≥ 1`.
    pub fn x_max(&self) -> Result<f64> {
        match *self {
            Kernel::DurrettRogers { beta } => Ok((1.0 / beta).powf(1.0 / (1.0 + beta))),
            _ => Err(Error::UnsupportedKernel(self.name())),
        }
    }

    /// A monotone nonincreasing upper bound `d ↦ sup_{|y| ≥ d} |f′(y)|`,
    /// tabulated on a log grid. Used by the far-field drift coarsening to
    /// bound the error of collapsing a distant aggregate to its centroid.
    pub fn derivative_envelope(&self) -> DerivEnvelope {
        DerivEnvelope::build(self)
    }
}

/// Tabulated envelope of `|f′|` beyond a given distance.
///
/// Values at grid point `g` dominate `sup_{|y| ≥ g} |f′(y)|`; a lookup
/// rounds the query distance down to the grid, so the returned value is an
/// upper bound for any `d ≥ g`. Grid values come from pointwise dominating
/// expressions (`|f′(x)| ≤ 1/(1+x^{1+β})` for Durrett-Rogers since
/// `|1 - βa| ≤ 1 + a` for `a ≥ 0, β ≤ 1`; `|f′| = β(1+|x|)^{-1-β}` exactly
/// for NonnegPower), both nonincreasing in `|x|`, with a suffix-max sweep to
/// keep the table monotone against rounding.
#[derive(Debug, Clone)]
pub struct DerivEnvelope {
    /// Bound valid for all distances (i.e. `sup |f′|`).
    global: f64,
    d_min: f64,
    log2_d_min: f64,
    per_octave: f64,
    table: Vec<f64>,
}

const ENV_D_MIN: f64 = 1e-4;
const ENV_D_MAX: f64 = 1e12;
const ENV_PER_OCTAVE: usize = 8;

impl DerivEnvelope {
    fn build(kernel: &Kernel) -> Self {
        let dominating: Box<dyn Fn(f64) -> f64> = match *kernel {
            Kernel::DurrettRogers { beta } => {
                Box::new(move |d: f64| 1.0 / (1.0 + d.powf(1.0 + beta)))
            }
            Kernel::NonnegPower { beta } => {
                Box::new(move |d: f64| beta * (1.0 + d).powf(-1.0 - beta))
            }
            Kernel::Zero | Kernel::Constant { .. } => Box::new(|_| 0.0),
        };
        let global = dominating(0.0);
        let octaves = (ENV_D_MAX / ENV_D_MIN).log2().ceil() as usize;
        let n = octaves * ENV_PER_OCTAVE + 1;
        let mut table: Vec<f64> = (0..n)
            .map(|i| dominating(ENV_D_MIN * (i as f64 / ENV_PER_OCTAVE as f64).exp2()))
            .collect();
        // Suffix max: entry i must dominate every entry to its right.
        for i in (0..n - 1).rev() {
            table[i] = table[i].max(table[i + 1]);
        }
        DerivEnvelope {
            global,
            d_min: ENV_D_MIN,
            log2_d_min: ENV_D_MIN.log2(),
            per_octave: ENV_PER_OCTAVE as f64,
            table,
        }
    }

    /// Upper bound on `|f′(y)|` over all `|y| ≥ d`.
    #[inline]
    pub fn at(&self, d: f64) -> f64 {
        if !(d > self.d_min) {
            return self.global;
        }
        let idx = ((d.log2() - self.log2_d_min) * self.per_octave) as usize;
        if idx >= self.table.len() {
            *self.table.last().unwrap()
        } else {
            self.table[idx]
        }
    }
}

/// Outcome of one analytic property check on a grid.
#[derive(Debug, Clone, Serialize)]
pub struct PropertyCheck {
    pub name: &'static str,
    pub pass: bool,
    /// Smallest slack observed; the property holds iff this is ≥ -tolerance.
    pub worst_margin: f64,
    /// Abscissa (or triple midpoint) where the worst margin occurred.
    pub worst_at: f64,
}

/// Report from [`check_kernel_properties`].
#[derive(Debug, Clone, Serialize)]
pub struct PropertyReport {
    pub beta: f64,
    pub checks: Vec<PropertyCheck>,
}

impl PropertyReport {
    pub fn all_pass(&self) -> bool {
        self.checks.iter().all(|c| c.pass)
    }
}

/// Floating-point slack for grid checks of exact inequalities.
const GRID_TOL: f64 = 1e-12;

/// Evaluate the five analytic facts about the Durrett-Rogers kernel on a
/// grid over `[x_lo, x_hi]`:
///
/// 1. `‖f‖∞ ≤ 1`;
/// 2. `f` increasing on `[0, x_max]`, decreasing on `[x_max, x_hi]`;
/// 3. `f(γ) ≥ min(f(a), f(θ))` on `n_triples` sampled triples
///    `-x_max ≤ a ≤ γ ≤ θ ≤ x_hi`;
/// 4. `f′(x) ≥ -f(x)` on `[-1/2, x_hi]`;
/// 5. `f(x_max) ≤ x_max^{-β}`.
pub fn check_kernel_properties(
    kernel: &Kernel,
    grid_step: f64,
    x_lo: f64,
    x_hi: f64,
    n_triples: usize,
    seed: u64,
) -> Result<PropertyReport> {
    let beta = match *kernel {
        Kernel::DurrettRogers { beta } => beta,
        _ => return Err(Error::UnsupportedKernel(kernel.name())),
    };
    if !(grid_step > 0.0) || !(x_lo < x_hi) {
        return Err(Error::InvalidGrid(format!(
            "need grid_step > 0 and x_lo < x_hi, got step {grid_step}, [{x_lo}, {x_hi}]"
        )));
    }
    let x_max = kernel.x_max()?;
    let grid = |lo: f64, hi: f64| -> Vec<f64> {
        let n = ((hi - lo) / grid_step).ceil() as usize;
        (0..=n).map(|i| (lo + i as f64 * grid_step).min(hi)).collect()
    };

    let mut checks = Vec::with_capacity(5);

    // (1) sup |f| <= 1.
    {
        let mut worst = f64::INFINITY;
        let mut at = x_lo;
        for &x in &grid(x_lo, x_hi) {
            let m = 1.0 - kernel.eval(x).abs();
            if m < worst {
                worst = m;
                at = x;
            }
        }
        checks.push(PropertyCheck { name: "sup_f_le_1", pass: worst >= -GRID_TOL, worst_margin: worst, worst_at: at });
    }

    // (2) monotone up to x_max, down after.
    {
        let mut worst = f64::INFINITY;
        let mut at = 0.0;
        let up = grid(0.0, x_max);
        for w in up.windows(2) {
            let m = kernel.eval(w[1]) - kernel.eval(w[0]);
            if m < worst {
                worst = m;
                at = w[0];
            }
        }
        let down = grid(x_max, x_hi);
        for w in down.windows(2) {
            let m = kernel.eval(w[0]) - kernel.eval(w[1]);
            if m < worst {
                worst = m;
                at = w[0];
            }
        }
        checks.push(PropertyCheck { name: "monotone_about_x_max", pass: worst >= -GRID_TOL, worst_margin: worst, worst_at: at });
    }

    // (3) f(gamma) >= min(f(a), f(theta)) on sampled ordered triples.
    {
        let mut rng = StreamRng::new(seed, rng::context::KERNEL_TRIPLES, beta.to_bits());
        let mut worst = f64::INFINITY;
        let mut at = 0.0;
        for _ in 0..n_triples {
            let mut t = [
                rng.next_range(-x_max, x_hi),
                rng.next_range(-x_max, x_hi),
                rng.next_range(-x_max, x_hi),
            ];
            t.sort_by(|p, q| p.partial_cmp(q).unwrap());
            let m = kernel.eval(t[1]) - kernel.eval(t[0]).min(kernel.eval(t[2]));
            if m < worst {
                worst = m;
                at = t[1];
            }
        }
        checks.push(PropertyCheck { name: "mid_above_min", pass: worst >= -GRID_TOL, worst_margin: worst, worst_at: at });
    }

    // (4) f'(x) >= -f(x) on [-1/2, x_hi].
    {
        let mut worst = f64::INFINITY;
        let mut at = -0.5;
        for &x in &grid(-0.5, x_hi) {
            let m = kernel.derivative(x) + kernel.eval(x);
            if m < worst {
                worst = m;
                at = x;
            }
        }
        checks.push(PropertyCheck { name: "derivative_above_neg_f", pass: worst >= -GRID_TOL, worst_margin: worst, worst_at: at });
    }

    // (5) f(x_max) <= x_max^{-beta}.
    {
        let m = x_max.powf(-beta) - kernel.eval(x_max);
        checks.push(PropertyCheck { name: "peak_below_power_tail", pass: m >= -GRID_TOL, worst_margin: m, worst_at: x_max });
    }

    Ok(PropertyReport { beta, checks })
}
