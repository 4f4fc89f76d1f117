//! Loop-based reference implementations used as oracles by unit tests.
//! Nothing here touches the graph.

use crate::tensor::{ParamId, ParamStore, Tensor};

pub(crate) type Mat = Vec<Vec<f64>>;

pub(crate) fn mat(t: &Tensor) -> Mat {
    let (r, c) = t.dims2();
    (0..r).map(|i| (0..c).map(|j| f64::from(t.at(i, j))).collect()).collect()
}

pub(crate) fn param(store: &ParamStore, name: &str) -> Mat {
    let id = store.find(name).unwrap_or_else(|| panic!("no parameter {name}"));
    mat(&store.get(id).tensor)
}

pub(crate) fn param_id(store: &ParamStore, id: ParamId) -> Mat {
    mat(&store.get(id).tensor)
}

pub(crate) fn mm(a: &Mat, b: &Mat) -> Mat {
    let n = b[0].len();
    a.iter()
        .map(|row| {
            (0..n)
                .map(|j| {
                    let mut s = 0.0;
                    for (t, x) in row.iter().enumerate() {
                        s += x * b[t][j];
                    }
                    s
                })
                .collect()
        })
        .collect()
}

pub(crate) fn add(a: &Mat, b: &Mat) -> Mat {
    a.iter()
        .zip(b)
        .map(|(x, y)| x.iter().zip(y).map(|(p, q)| p + q).collect())
        .collect()
}

pub(crate) fn add_bias(a: &Mat, b: &[f64]) -> Mat {
    a.iter()
        .map(|row| row.iter().zip(b).map(|(x, y)| x + y).collect())
        .collect()
}

pub(crate) fn linear(x: &Mat, w: &Mat, b: Option<&[f64]>) -> Mat {
    let y = mm(x, w);
    match b {
        Some(b) => add_bias(&y, b),
        None => y,
    }
}

pub(crate) fn layer_norm(x: &Mat, gamma: &[f64], beta: &[f64], eps: f64) -> Mat {
    x.iter()
        .map(|row| {
            let n = row.len() as f64;
            let mean = row.iter().sum::<f64>() / n;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
            row.iter()
                .enumerate()
                .map(|(j, v)| (v - mean) / (var + eps).sqrt() * gamma[j] + beta[j])
                .collect()
        })
        .collect()
}

pub(crate) fn gelu(x: &Mat) -> Mat {
    let c = (2.0 / std::f64::consts::PI).sqrt();
    x.iter()
        .map(|row| {
            row.iter()
                .map(|v| 0.5 * v * (1.0 + (c * (v + 0.044715 * v * v * v)).tanh()))
                .collect()
        })
        .collect()
}

pub(crate) fn softmax(row: &[f64]) -> Vec<f64> {
    let mx = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = row.iter().map(|v| (v - mx).exp()).collect();
    let z: f64 = e.iter().sum();
    e.iter().map(|v| v / z).collect()
}

fn cols(x: &Mat, start: usize, width: usize) -> Mat {
    x.iter().map(|r| r[start..start + width].to_vec()).collect()
}

/// Multi-head attention with bias-free projections read from `{prefix}.wq`
/// and friends.
pub(crate) fn mha(store: &ParamStore, prefix: &str, xq: &Mat, xkv: &Mat, heads: usize, causal: bool) -> Mat {
    let q = mm(xq, &param(store, &format!("{prefix}.wq")));
    let k = mm(xkv, &param(store, &format!("{prefix}.wk")));
    let v = mm(xkv, &param(store, &format!("{prefix}.wv")));
    let d = q[0].len();
    let hd = d / heads;
    let mut cat = vec![Vec::new(); xq.len()];
    for h in 0..heads {
        let (qh, kh, vh) = (cols(&q, h * hd, hd), cols(&k, h * hd, hd), cols(&v, h * hd, hd));
        for i in 0..qh.len() {
            let visible = if causal { i + 1 } else { kh.len() };
            let scores: Vec<f64> = (0..visible)
                .map(|j| qh[i].iter().zip(&kh[j]).map(|(a, b)| a * b).sum::<f64>() / (hd as f64).sqrt())
                .collect();
            let p = softmax(&scores);
            for c in 0..hd {
                cat[i].push((0..visible).map(|j| p[j] * vh[j][c]).sum());
            }
        }
    }
    mm(&cat, &param(store, &format!("{prefix}.wo")))
}

pub(crate) fn ln_param(store: &ParamStore, prefix: &str, x: &Mat, eps: f64) -> Mat {
    let g = &param(store, &format!("{prefix}.gamma"))[0];
    let b = &param(store, &format!("{prefix}.beta"))[0];
    layer_norm(x, g, b, eps)
}

pub(crate) fn linear_param(store: &ParamStore, prefix: &str, x: &Mat) -> Mat {
    let w = param(store, &format!("{prefix}.w"));
    let b = store.find(&format!("{prefix}.b")).map(|id| param_id(store, id)[0].clone());
    linear(x, &w, b.as_deref())
}

pub(crate) fn ffn(store: &ParamStore, prefix: &str, x: &Mat) -> Mat {
    let h = gelu(&linear_param(store, &format!("{prefix}.up"), x));
    linear_param(store, &format!("{prefix}.down"), &h)
}

pub(crate) fn max_abs_diff(t: &Tensor, m: &Mat) -> f64 {
    let mut worst = 0.0f64;
    for (i, row) in m.iter().enumerate() {
        for (j, v) in row.iter().enumerate() {
            worst = worst.max((f64::from(t.at(i, j)) - v).abs());
        }
    }
    worst
}
