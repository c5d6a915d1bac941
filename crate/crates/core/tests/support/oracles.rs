//! Independent reference computations, written from the formulas rather
//! than from the library code.

/// Single-pass product-moment correlation.
pub fn pearson(x: &[f64], y: &[f64]) -> f64 {
    let n = x.len() as f64;
    let (sx, sy): (f64, f64) = (x.iter().sum(), y.iter().sum());
    let sxy: f64 = x.iter().zip(y).map(|(a, b)| a * b).sum();
    let sxx: f64 = x.iter().map(|a| a * a).sum();
    let syy: f64 = y.iter().map(|b| b * b).sum();
    (n * sxy - sx * sy) / ((n * sxx - sx * sx) * (n * syy - sy * sy)).sqrt()
}

fn median(mut v: Vec<f64>) -> f64 {
    v.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let m = v.len();
    if m % 2 == 1 {
        v[m / 2]
    } else {
        (v[m / 2 - 1] + v[m / 2]) / 2.0
    }
}

/// Row-observation RBF Gram matrix with the median heuristic, taken over
/// every ordered pair i != j.
pub fn rbf_median(x: &[f64], n: usize) -> Vec<Vec<f64>> {
    let p = x.len() / n;
    let dist = |i: usize, j: usize| -> f64 {
        (0..p)
            .map(|t| (x[i * p + t] - x[j * p + t]).powi(2))
            .sum::<f64>()
            .sqrt()
    };
    let all: Vec<f64> = (0..n)
        .flat_map(|i| (0..n).filter(move |&j| j != i).map(move |j| (i, j)))
        .map(|(i, j)| dist(i, j))
        .filter(|&d| d != 0.0)
        .collect();
    let sigma = if all.is_empty() { 1.0 } else { median(all) };
    (0..n)
        .map(|i| {
            (0..n)
                .map(|j| (-dist(i, j).powi(2) / (2.0 * sigma * sigma)).exp())
                .collect()
        })
        .collect()
}

fn matmul(a: &[Vec<f64>], b: &[Vec<f64>]) -> Vec<Vec<f64>> {
    let n = a.len();
    (0..n)
        .map(|i| (0..n).map(|j| (0..n).map(|t| a[i][t] * b[t][j]).sum()).collect())
        .collect()
}

pub fn hsic(k: &[Vec<f64>], l: &[Vec<f64>]) -> f64 {
    let n = k.len();
    let h: Vec<Vec<f64>> = (0..n)
        .map(|i| (0..n).map(|j| f64::from(u8::from(i == j)) - 1.0 / n as f64).collect())
        .collect();
    let m = matmul(&matmul(&matmul(k, &h), l), &h);
    (0..n).map(|i| m[i][i]).sum::<f64>() / ((n - 1) as f64).powi(2)
}

pub fn cka(x: &[f64], y: &[f64], n: usize) -> f64 {
    let k = rbf_median(x, n);
    let l = rbf_median(y, n);
    hsic(&k, &l) / (hsic(&k, &k) * hsic(&l, &l)).sqrt()
}

/// Top-k by repeated argmax (lowest index on ties), renormalized.
pub fn top_k(w: &[f64], k: usize) -> Vec<(usize, f64)> {
    let mut taken = vec![false; w.len()];
    let mut picked = Vec::new();
    for _ in 0..k {
        let mut best = None;
        for i in 0..w.len() {
            if !taken[i] && best.map_or(true, |b: usize| w[i] > w[b]) {
                best = Some(i);
            }
        }
        let b = best.unwrap();
        taken[b] = true;
        picked.push(b);
    }
    let mass: f64 = picked.iter().map(|&i| w[i]).sum();
    picked.sort();
    picked.into_iter().map(|i| (i, w[i] / mass)).collect()
}
