//! LUT-based exponential path mirroring how an in-memory compute array would
//! evaluate `e^x`: convert to base 2 (the 1/ln2 factor is folded into stored
//! parameters offline), split the exponent into sign/integer/fraction, apply
//! the integer part as a pure exponent-field shift, and resolve the 12-bit
//! fraction through four cascaded 8-entry tables.
//!
//! Two table precisions are provided: `Exact` keeps full working-precision
//! entries, `Half` rounds every entry to 16-bit floats to match a narrow
//! hardware table. The exhaustive 4096-point sweep in the tests freezes the
//! measured error bounds of both.

use half::f16;

/// Base-2 exponent magnitudes beyond this saturate: the corresponding alpha
/// has underflowed (or blown up) long before.
pub const X_PRIME_LIMIT: f64 = 16384.0; // 2^14

/// Precision of the stored table entries.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum EntryMode {
    Exact,
    Half,
}

/// Four tables of eight entries; table `k`, entry `j` holds
/// `2^(j · 2^(-3(k+1)))`, so the cascade product reconstructs `2^frac` from
/// four 3-bit fields.
#[derive(Debug, Clone)]
pub struct LutBank {
    tables: [[f64; 8]; 4],
    pub mode: EntryMode,
}

impl LutBank {
    pub fn new(mode: EntryMode) -> Self {
        let mut tables = [[0.0f64; 8]; 4];
        for (k, table) in tables.iter_mut().enumerate() {
            let weight = (-(3.0 * (k as f64 + 1.0))).exp2();
            for (j, slot) in table.iter_mut().enumerate() {
                let exact = (j as f64 * weight).exp2();
                *slot = match mode {
                    EntryMode::Exact => exact,
                    EntryMode::Half => f64::from(f16::from_f64(exact)),
                };
            }
        }
        Self { tables, mode }
    }

    pub fn entry(&self, k: usize, j: usize) -> f64 {
        self.tables[k][j]
    }
}

/// Sign/integer/fraction decomposition of a base-2 exponent:
/// `x' ≈ int_part + frac12 · 2⁻¹²` after round-to-nearest-even at 12 bits.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SifDecomp {
    pub int_part: i32,
    /// Unsigned 12-bit fixed point, always in [0, 4096).
    pub frac12: u16,
}

/// Saturation signal for exponents beyond the representable guard range.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Saturation {
    /// Result collapses to 0.
    Underflow,
    /// Result collapses to the format maximum.
    Overflow,
}

/// Splits `x'` into integer and 12-bit fractional parts.
///
/// The floor/mod pair implements the two's-complement handling of negative
/// inputs: the fraction is re-expressed as `4096 - |frac|` and the borrowed
/// unit is absorbed into the integer term.
pub fn decompose(x_prime: f64) -> Result<SifDecomp, Saturation> {
    debug_assert!(x_prime.is_finite());
    if x_prime >= X_PRIME_LIMIT {
        return Err(Saturation::Overflow);
    }
    if x_prime <= -X_PRIME_LIMIT {
        return Err(Saturation::Underflow);
    }
    let scaled = (x_prime * 4096.0).round_ties_even() as i64;
    Ok(SifDecomp {
        int_part: scaled.div_euclid(4096) as i32,
        frac12: scaled.rem_euclid(4096) as u16,
    })
}

/// `2^(frac12 · 2⁻¹²)` through the four cascaded tables, MSB field first.
pub fn exp2_frac(frac12: u16, luts: &LutBank) -> f64 {
    debug_assert!(frac12 < 4096);
    let f1 = usize::from((frac12 >> 9) & 7);
    let f2 = usize::from((frac12 >> 6) & 7);
    let f3 = usize::from((frac12 >> 3) & 7);
    let f4 = usize::from(frac12 & 7);
    ((luts.tables[0][f1] * luts.tables[1][f2]) * luts.tables[2][f3]) * luts.tables[3][f4]
}

/// `v · 2^e` as exponent-field arithmetic: both factors are exact powers of
/// two, so no rounding occurs while the result stays normal.
fn ldexp(v: f64, e: i32) -> f64 {
    let half = e / 2;
    v * pow2i(half) * pow2i(e - half)
}

fn pow2i(e: i32) -> f64 {
    if (-1022..=1023).contains(&e) {
        f64::from_bits(((e + 1023) as u64) << 52)
    } else if e > 1023 {
        f64::INFINITY
    } else {
        0.0
    }
}

/// `2^x'` through decompose → table cascade → integer shift, with saturation
/// mapped to 0 / MAX. The boolean reports whether the guard fired.
pub fn exp2_x_checked(x_prime: f64, luts: &LutBank) -> (f64, bool) {
    match decompose(x_prime) {
        Ok(sif) => (ldexp(exp2_frac(sif.frac12, luts), sif.int_part), false),
        Err(Saturation::Underflow) => (0.0, true),
        Err(Saturation::Overflow) => (f64::MAX, true),
    }
}

/// `2^x'` with saturation applied silently.
pub fn exp2_x(x_prime: f64, luts: &LutBank) -> f64 {
    exp2_x_checked(x_prime, luts).0
}

/// `e^x` via base conversion. The hot rendering path avoids this runtime
/// multiply by pre-folding log₂e into the stored quadratic forms and calling
/// [`exp2_x`] directly; this entry point serves callers holding natural-log
/// exponents.
pub fn exp_e(x: f64, luts: &LutBank) -> f64 {
    exp2_x(x * std::f64::consts::LOG2_E, luts)
}

/// The single blended exponent `-(spatial_q + temporal_q) / 2`: log of the
/// product of the temporal and spatial Gaussian factors, evaluated with one
/// exp call.
pub fn merged_alpha_exponent(spatial_q: f64, temporal_q: f64) -> f64 {
    debug_assert!(spatial_q >= 0.0 && temporal_q >= 0.0);
    -0.5 * (spatial_q + temporal_q)
}

/// Result of the exhaustive 4096-point fraction sweep.
#[derive(Debug, Clone, Copy)]
pub struct SweepReport {
    pub max_rel_error: f64,
    pub worst_frac12: u16,
}

/// Compares [`exp2_frac`] against `2^(frac/4096)` on every 12-bit fraction.
pub fn sweep_frac_error(luts: &LutBank) -> SweepReport {
    let mut worst = SweepReport { max_rel_error: 0.0, worst_frac12: 0 };
    for frac in 0..4096u16 {
        let got = exp2_frac(frac, luts);
        let reference = (f64::from(frac) / 4096.0).exp2();
        let rel = ((got - reference) / reference).abs();
        if rel > worst.max_rel_error {
            worst = SweepReport { max_rel_error: rel, worst_frac12: frac };
        }
    }
    worst
}
