//! Landmark-based (Nyström) approximation of softmax attention.
//!
//! With landmark queries `Q̃` and keys `K̃` (segment means of `q` and `k`):
//!
//! ```text
//! F1 = softmax(q · K̃ᵀ / √d)        M×m
//! F2 = softmax(Q̃ · K̃ᵀ / √d)        m×m
//! F3 = softmax(Q̃ · kᵀ / √d)        m×M
//! out = F1 · F2⁺ · (F3 · v)
//! ```
//!
//! `F2⁺` is the Moore–Penrose pseudoinverse from Newton–Schulz iteration, so
//! the whole computation is matrix products and stays differentiable. Cost is
//! O(M·m·d + m³) instead of O(M²·d).

use std::ops::Range;

use crate::error::{Error, Result};
use crate::tensor::{Graph, Tensor, Var};

/// Splits `0..len` into `m` contiguous segments whose sizes differ by at most
/// one; the longer segments come first.
pub fn segment_bounds(len: usize, m: usize) -> Result<Vec<Range<usize>>> {
    if m < 1 || m > len {
        return Err(Error::InvalidLandmarkCount { landmarks: m, len });
    }
    let base = len / m;
    let extra = len % m;
    let mut start = 0;
    Ok((0..m)
        .map(|i| {
            let size = base + usize::from(i < extra);
            let r = start..start + size;
            start += size;
            r
        })
        .collect())
}

/// Landmark rows for one head.
#[derive(Debug, Clone)]
pub struct LandmarkSet {
    pub q_landmarks: Tensor,
    pub k_landmarks: Tensor,
    pub segment_bounds: Vec<Range<usize>>,
}

impl LandmarkSet {
    pub fn build(q: &Tensor, k: &Tensor, m: usize) -> Result<Self> {
        if q.dims2() != k.dims2() {
            return Err(Error::shape("landmarks", format!("q {:?} vs k {:?}", q.shape(), k.shape())));
        }
        let (q_landmarks, bounds) = segment_mean_landmarks(q, m)?;
        let (k_landmarks, _) = segment_mean_landmarks(k, m)?;
        Ok(Self {
            q_landmarks,
            k_landmarks,
            segment_bounds: bounds,
        })
    }
}

/// Segment-mean landmarks of the rows of `x`.
pub fn segment_mean_landmarks(x: &Tensor, m: usize) -> Result<(Tensor, Vec<Range<usize>>)> {
    let bounds = segment_bounds(x.rows(), m)?;
    let mut g = Graph::new();
    let xv = g.input(x)?;
    let l = g.segment_means(xv, bounds.clone())?;
    Ok((g.value(l), bounds))
}

/// Result of [`moore_penrose_pinv`]. `zero_input` flags the degenerate case
/// where the input was the zero matrix and the zero matrix was returned.
#[derive(Debug, Clone)]
pub struct PseudoInverse {
    pub matrix: Tensor,
    pub zero_input: bool,
}

/// Newton–Schulz pseudoinverse of a square matrix:
/// `Z₀ = aᵀ/(‖a‖₁‖a‖_∞)`, `Z ← ¼ Z (13I − aZ(15I − aZ(7I − aZ)))`.
pub fn moore_penrose_pinv(a: &Tensor, iterations: usize) -> Result<PseudoInverse> {
    let mut g = Graph::new();
    let av = g.input(a)?;
    let (z, zero_input) = pinv_op(&mut g, av, iterations)?;
    Ok(PseudoInverse {
        matrix: g.value(z),
        zero_input,
    })
}

/// Graph form of [`moore_penrose_pinv`]; differentiable through every
/// iteration including the initial scaling.
pub fn pinv(g: &mut Graph, a: Var, iterations: usize) -> Result<Var> {
    pinv_op(g, a, iterations).map(|(z, _)| z)
}

fn pinv_op(g: &mut Graph, a: Var, iterations: usize) -> Result<(Var, bool)> {
    let (r, c) = g.shape(a);
    if r != c {
        return Err(Error::shape("pinv", format!("{r}x{c} is not square")));
    }
    if iterations < 1 {
        return Err(Error::RangeError {
            key: "pinv_iterations".into(),
            detail: "must be at least 1".into(),
        });
    }
    let Some(mut z) = g.pinv_init(a)? else {
        return Ok((g.constant(r, r, vec![0.0; r * r])?, true));
    };
    for _ in 0..iterations {
        z = newton_schulz_step(g, a, z).map_err(|e| match e {
            Error::NonFinite { .. } => Error::NonFinite { op: "pinv" },
            other => other,
        })?;
    }
    Ok((z, false))
}

fn newton_schulz_step(g: &mut Graph, a: Var, z: Var) -> Result<Var> {
    let az = g.matmul(a, z)?;
    let t = g.affine_identity(az, -1.0, 7.0)?; // 7I - aZ
    let t = g.matmul(az, t)?;
    let t = g.affine_identity(t, -1.0, 15.0)?; // 15I - aZ(7I - aZ)
    let t = g.matmul(az, t)?;
    let t = g.affine_identity(t, -1.0, 13.0)?;
    let t = g.matmul(z, t)?;
    g.scale(t, 0.25)
}

/// Nyström attention for one head on the graph.
pub fn attend_nystrom(g: &mut Graph, q: Var, k: Var, v: Var, landmarks: usize, pinv_iterations: usize) -> Result<Var> {
    let (n, d) = g.shape(q);
    if g.shape(k) != (n, d) || g.rows(v) != n {
        return Err(Error::shape(
            "nystrom_attention",
            format!("q {:?}, k {:?}, v {:?}", g.shape(q), g.shape(k), g.shape(v)),
        ));
    }
    let bounds = segment_bounds(n, landmarks)?;
    let scale = 1.0 / (d as f64).sqrt();
    let q_l = g.segment_means(q, bounds.clone())?;
    let k_l = g.segment_means(k, bounds)?;

    let s1 = g.matmul_nt(q, k_l)?;
    let s1 = g.scale(s1, scale)?;
    let f1 = g.softmax_rows(s1)?;

    let s2 = g.matmul_nt(q_l, k_l)?;
    let s2 = g.scale(s2, scale)?;
    let f2 = g.softmax_rows(s2)?;
    let f2_inv = pinv(g, f2, pinv_iterations)?;

    let s3 = g.matmul_nt(q_l, k)?;
    let s3 = g.scale(s3, scale)?;
    let f3 = g.softmax_rows(s3)?;

    let f3v = g.matmul(f3, v)?;
    let mid = g.matmul(f2_inv, f3v)?;
    g.matmul(f1, mid)
}
