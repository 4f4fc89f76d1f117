//! Wall-clock comparison of exact and Nyström attention over growing bags.

use std::fmt::Write as _;
use std::time::Instant;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::attention::{exact_attention, nystrom_attention, AttentionConfig};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const BENCH_HEADER: &str = "M,m,method,wall_ms,mean_rel_err";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    Exact,
    Nystrom,
}

impl Method {
    pub fn as_str(self) -> &'static str {
        match self {
            Method::Exact => "exact",
            Method::Nystrom => "nystrom",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct BenchRow {
    pub seq_len: usize,
    pub landmarks: usize,
    pub method: Method,
    pub wall_ms: f64,
    /// Blank for the exact rows.
    pub mean_rel_err: Option<f64>,
}

#[derive(Debug, Clone, Copy)]
pub struct BenchOptions {
    pub landmarks: usize,
    pub repeats: usize,
    pub head_dim: usize,
    pub pinv_iterations: usize,
    pub seed: u64,
}

/// Mean over rows of ‖approx_i − exact_i‖ / ‖exact_i‖.
pub fn mean_row_relative_error(approx: &Tensor, exact: &Tensor) -> f64 {
    let n = exact.rows();
    let mut total = 0.0;
    for i in 0..n {
        let (mut num, mut den) = (0.0f64, 0.0f64);
        for (a, e) in approx.row(i).iter().zip(exact.row(i)) {
            num += (f64::from(*a) - f64::from(*e)).powi(2);
            den += f64::from(*e).powi(2);
        }
        total += num.sqrt() / den.sqrt().max(1e-12);
    }
    total / n.max(1) as f64
}

fn median(mut xs: Vec<f64>) -> f64 {
    xs.sort_by(f64::total_cmp);
    let n = xs.len();
    if n % 2 == 1 {
        xs[n / 2]
    } else {
        (xs[n / 2 - 1] + xs[n / 2]) / 2.0
    }
}

fn time_ms<F: FnMut() -> Result<Tensor>>(repeats: usize, mut f: F) -> Result<(f64, Tensor)> {
    let mut times = Vec::with_capacity(repeats);
    let mut last = None;
    for _ in 0..repeats {
        let t = Instant::now();
        let out = f()?;
        times.push(t.elapsed().as_secs_f64() * 1e3);
        last = Some(out);
    }
    Ok((median(times), last.expect("repeats >= 1")))
}

/// Times both methods on seeded Gaussian q, k, v for each length in
/// `seq_lens`, reporting the median over `repeats`.
pub fn bench_attention(seq_lens: &[usize], opts: BenchOptions) -> Result<Vec<BenchRow>> {
    if opts.repeats == 0 {
        return Err(Error::RangeError {
            key: "bench_repeats".into(),
            detail: "must be at least 1".into(),
        });
    }
    if let Some(&len) = seq_lens.iter().find(|&&len| len < opts.landmarks || len == 0) {
        return Err(Error::InvalidLandmarkCount {
            landmarks: opts.landmarks,
            len,
        });
    }
    let cfg = AttentionConfig::new(opts.head_dim, 1, opts.landmarks, opts.pinv_iterations)?;
    let mut rows = Vec::with_capacity(seq_lens.len() * 2);
    for &len in seq_lens {
        let mut rng = ChaCha8Rng::seed_from_u64(opts.seed ^ len as u64);
        let q = Tensor::randn(vec![len, opts.head_dim], 1.0, &mut rng);
        let k = Tensor::randn(vec![len, opts.head_dim], 1.0, &mut rng);
        let v = Tensor::randn(vec![len, opts.head_dim], 1.0, &mut rng);
        let (exact_ms, exact) = time_ms(opts.repeats, || exact_attention(&q, &k, &v))?;
        let (nys_ms, approx) = time_ms(opts.repeats, || nystrom_attention(&q, &k, &v, &cfg))?;
        rows.push(BenchRow {
            seq_len: len,
            landmarks: opts.landmarks,
            method: Method::Exact,
            wall_ms: exact_ms,
            mean_rel_err: None,
        });
        rows.push(BenchRow {
            seq_len: len,
            landmarks: opts.landmarks,
            method: Method::Nystrom,
            wall_ms: nys_ms,
            mean_rel_err: Some(mean_row_relative_error(&approx, &exact)),
        });
    }
    Ok(rows)
}

pub fn bench_csv(rows: &[BenchRow]) -> String {
    let mut out = String::from(BENCH_HEADER);
    out.push('\n');
    for r in rows {
        let err = r.mean_rel_err.map(|e| format!("{e}")).unwrap_or_default();
        let _ = writeln!(out, "{},{},{},{:.4},{}", r.seq_len, r.landmarks, r.method.as_str(), r.wall_ms, err);
    }
    out
}

/// Least-squares slope of ln(y) against ln(x).
pub fn loglog_slope(points: &[(f64, f64)]) -> Option<f64> {
    if points.len() < 2 || points.iter().any(|&(x, y)| x <= 0.0 || y <= 0.0) {
        return None;
    }
    let n = points.len() as f64;
    let (lx, ly): (Vec<f64>, Vec<f64>) = points.iter().map(|&(x, y)| (x.ln(), y.ln())).unzip();
    let mx = lx.iter().sum::<f64>() / n;
    let my = ly.iter().sum::<f64>() / n;
    let sxy: f64 = lx.iter().zip(&ly).map(|(x, y)| (x - mx) * (y - my)).sum();
    let sxx: f64 = lx.iter().map(|x| (x - mx).powi(2)).sum();
    (sxx > 0.0).then(|| sxy / sxx)
}

/// Fitted wall-time exponent of one method across the benchmarked lengths.
pub fn fitted_slope(rows: &[BenchRow], method: Method) -> Option<f64> {
    let pts: Vec<(f64, f64)> = rows
        .iter()
        .filter(|r| r.method == method)
        .map(|r| (r.seq_len as f64, r.wall_ms))
        .collect();
    loglog_slope(&pts)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn opts(landmarks: usize) -> BenchOptions {
        BenchOptions {
            landmarks,
            repeats: 1,
            head_dim: 8,
            pinv_iterations: 13,
            seed: 3,
        }
    }

    #[test]
    fn slope_of_power_law() {
        let pts: Vec<(f64, f64)> = [2.0, 4.0, 8.0, 16.0].iter().map(|&x: &f64| (x, 3.0 * x.powf(1.5))).collect();
        assert!((loglog_slope(&pts).unwrap() - 1.5).abs() < 1e-12);
        assert_eq!(loglog_slope(&pts[..1]), None);
        assert_eq!(loglog_slope(&[(1.0, 1.0), (1.0, 2.0)]), None);
    }

    #[test]
    fn median_odd_and_even() {
        assert_eq!(median(vec![3.0, 1.0, 2.0]), 2.0);
        assert_eq!(median(vec![4.0, 1.0, 2.0, 3.0]), 2.5);
    }

    #[test]
    fn full_landmarks_are_exact() {
        let rows = bench_attention(&[16], opts(16)).unwrap();
        assert_eq!(rows.len(), 2);
        assert_eq!(rows[0].mean_rel_err, None);
        assert!(rows[1].mean_rel_err.unwrap() < 1e-3);
    }

    #[test]
    fn error_columns_repeatable() {
        let a = bench_attention(&[32, 64], opts(8)).unwrap();
        let b = bench_attention(&[32, 64], opts(8)).unwrap();
        let errs = |r: &[BenchRow]| r.iter().map(|x| x.mean_rel_err).collect::<Vec<_>>();
        assert_eq!(errs(&a), errs(&b));
    }

    #[test]
    fn rejects_short_sequences_and_zero_repeats() {
        assert!(matches!(bench_attention(&[8, 4], opts(6)), Err(Error::InvalidLandmarkCount { len: 4, .. })));
        let mut o = opts(2);
        o.repeats = 0;
        assert!(matches!(bench_attention(&[4], o), Err(Error::RangeError { .. })));
    }

    #[test]
    fn csv_has_blank_error_for_exact() {
        let rows = vec![
            BenchRow {
                seq_len: 8,
                landmarks: 4,
                method: Method::Exact,
                wall_ms: 1.5,
                mean_rel_err: None,
            },
            BenchRow {
                seq_len: 8,
                landmarks: 4,
                method: Method::Nystrom,
                wall_ms: 0.5,
                mean_rel_err: Some(0.25),
            },
        ];
        assert_eq!(bench_csv(&rows), format!("{BENCH_HEADER}\n8,4,exact,1.5000,\n8,4,nystrom,0.5000,0.25\n"));
    }
}
