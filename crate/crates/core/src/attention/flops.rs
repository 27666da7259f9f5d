//! Analytic operation counts of the two attention variants, plus a small
//! wall-clock probe.

use std::fmt::Write as _;
use std::time::Instant;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

use super::otm::{one_to_many_attention, OtmAttnParams};
use super::standard::{standard_cross_attention, StdAttnParams};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Variant {
    Standard,
    OneToMany,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct FlopReport {
    pub variant: Variant,
    pub inputs: u64,
    pub heads: u64,
    pub d_k: u64,
    pub flops: u64,
}

/// Multiply-accumulate count for one query attending over `n` inputs.
///
/// standard: `(2N + 1) d_k^2 + N d_k + d_k^2`; one-to-many: `h d_k^2 + N h d_k + h d_k^2`.
pub fn flop_count(variant: Variant, n: u64, h: u64, d_k: u64) -> Result<FlopReport> {
    if n == 0 || h == 0 || d_k == 0 {
        return Err(Error::contract("flop_count needs N, h, d_k >= 1"));
    }
    let flops = match variant {
        Variant::Standard => (2 * n + 1) * d_k * d_k + n * d_k + d_k * d_k,
        Variant::OneToMany => h * d_k * d_k + n * h * d_k + h * d_k * d_k,
    };
    Ok(FlopReport {
        variant,
        inputs: n,
        heads: h,
        d_k,
        flops,
    })
}

/// Ratio rounded to one decimal, as printed in the tables.
pub fn ratio(num: u64, den: u64) -> String {
    format!("{:.1}x", num as f64 / den as f64)
}

#[derive(Debug, Clone, PartialEq)]
pub struct HeadsRow {
    pub heads: u64,
    pub standard: u64,
    pub one_to_many: u64,
    pub speedup: String,
    /// Measured seconds per query (standard, one-to-many).
    pub seconds: Option<(f64, f64)>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct InputsRow {
    pub inputs: u64,
    pub standard: u64,
    pub standard_slowdown: String,
    pub one_to_many: u64,
    pub one_to_many_slowdown: String,
    pub seconds: Option<(f64, f64)>,
}

pub const HEADS: [u64; 4] = [1, 2, 4, 8];
pub const INPUTS: [u64; 5] = [4, 8, 16, 32, 64];

/// Heads sweep at `n` inputs.
pub fn heads_sweep(n: u64, d_k: u64) -> Result<Vec<HeadsRow>> {
    HEADS
        .iter()
        .map(|&h| {
            let s = flop_count(Variant::Standard, n, h, d_k)?.flops;
            let o = flop_count(Variant::OneToMany, n, h, d_k)?.flops;
            Ok(HeadsRow {
                heads: h,
                standard: s,
                one_to_many: o,
                speedup: ratio(s, o),
                seconds: None,
            })
        })
        .collect()
}

/// Inputs sweep at `h` heads; slowdowns are relative to the first row.
pub fn inputs_sweep(h: u64, d_k: u64) -> Result<Vec<InputsRow>> {
    let s0 = flop_count(Variant::Standard, INPUTS[0], h, d_k)?.flops;
    let o0 = flop_count(Variant::OneToMany, INPUTS[0], h, d_k)?.flops;
    INPUTS
        .iter()
        .map(|&n| {
            let s = flop_count(Variant::Standard, n, h, d_k)?.flops;
            let o = flop_count(Variant::OneToMany, n, h, d_k)?.flops;
            Ok(InputsRow {
                inputs: n,
                standard: s,
                standard_slowdown: ratio(s, s0),
                one_to_many: o,
                one_to_many_slowdown: ratio(o, o0),
                seconds: None,
            })
        })
        .collect()
}

/// Mean seconds per query of both implementations on random data.
pub fn time_per_query(n: usize, h: usize, d_k: usize, queries: usize) -> Result<(f64, f64)> {
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let sp = StdAttnParams::<f32>::random(d_k, h, &mut rng)?;
    let op = OtmAttnParams::from_standard(&sp);
    let q = Tensor::<f32>::rand_uniform(&[d_k], -1.0, 1.0, &mut rng);
    let k = Tensor::<f32>::rand_uniform(&[n, d_k], -1.0, 1.0, &mut rng);
    let mut sink = 0.0f32;
    let t = Instant::now();
    for _ in 0..queries {
        sink += standard_cross_attention(&q, &k, &sp)?.data()[0];
    }
    let ts = t.elapsed().as_secs_f64() / queries as f64;
    let t = Instant::now();
    for _ in 0..queries {
        sink += one_to_many_attention(&q, &k, &op)?.data()[0];
    }
    let to = t.elapsed().as_secs_f64() / queries as f64;
    std::hint::black_box(sink);
    Ok((ts, to))
}

fn us(s: Option<(f64, f64)>, first: bool) -> String {
    match s {
        Some((a, b)) => format!("{:.2}", 1e6 * if first { a } else { b }),
        None => "-".into(),
    }
}

pub fn heads_table_text(rows: &[HeadsRow], n: u64, d_k: u64) -> String {
    let mut s = format!("FLOPs vs number of heads (N = {n}, d_k = {d_k})\n");
    let _ = writeln!(
        s,
        "{:>5} {:>14} {:>14} {:>9} {:>12} {:>12}",
        "heads", "standard", "one-to-many", "speedup", "std us/q", "otm us/q"
    );
    for r in rows {
        let _ = writeln!(
            s,
            "{:>5} {:>14} {:>14} {:>9} {:>12} {:>12}",
            r.heads,
            r.standard,
            r.one_to_many,
            r.speedup,
            us(r.seconds, true),
            us(r.seconds, false)
        );
    }
    s
}

pub fn inputs_table_text(rows: &[InputsRow], h: u64, d_k: u64) -> String {
    let mut s = format!("FLOPs vs number of inputs (h = {h}, d_k = {d_k})\n");
    let _ = writeln!(
        s,
        "{:>6} {:>14} {:>9} {:>14} {:>9} {:>12} {:>12}",
        "inputs", "standard", "slowdown", "one-to-many", "slowdown", "std us/q", "otm us/q"
    );
    for r in rows {
        let _ = writeln!(
            s,
            "{:>6} {:>14} {:>9} {:>14} {:>9} {:>12} {:>12}",
            r.inputs,
            r.standard,
            r.standard_slowdown,
            r.one_to_many,
            r.one_to_many_slowdown,
            us(r.seconds, true),
            us(r.seconds, false)
        );
    }
    s
}

pub fn heads_table_csv(rows: &[HeadsRow]) -> String {
    let mut s = String::from("heads,standard_flops,one_to_many_flops,speedup,standard_us,one_to_many_us\n");
    for r in rows {
        let _ = writeln!(
            s,
            "{},{},{},{},{},{}",
            r.heads,
            r.standard,
            r.one_to_many,
            r.speedup,
            us(r.seconds, true),
            us(r.seconds, false)
        );
    }
    s
}

pub fn inputs_table_csv(rows: &[InputsRow]) -> String {
    let mut s = String::from(
        "inputs,standard_flops,standard_slowdown,one_to_many_flops,one_to_many_slowdown,standard_us,one_to_many_us\n",
    );
    for r in rows {
        let _ = writeln!(
            s,
            "{},{},{},{},{},{},{}",
            r.inputs,
            r.standard,
            r.standard_slowdown,
            r.one_to_many,
            r.one_to_many_slowdown,
            us(r.seconds, true),
            us(r.seconds, false)
        );
    }
    s
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn affine_in_inputs() {
        for &(h, dk) in &[(1, 8), (4, 32), (2, 16)] {
            for n in 1..10 {
                let s = |n| flop_count(Variant::Standard, n, h, dk).unwrap().flops;
                let o = |n| flop_count(Variant::OneToMany, n, h, dk).unwrap().flops;
                assert_eq!(s(n + 1) - s(n), 2 * dk * dk + dk);
                assert_eq!(o(n + 1) - o(n), h * dk);
            }
        }
    }

    #[test]
    fn zero_counts_rejected() {
        assert!(flop_count(Variant::Standard, 0, 1, 1).is_err());
    }

    #[test]
    fn ratio_rounding() {
        assert_eq!(ratio(18688, 2304), "8.1x");
        assert_eq!(ratio(18688, 18432), "1.0x");
    }
}
