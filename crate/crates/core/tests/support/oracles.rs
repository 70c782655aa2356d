//! Deliberately naive second implementations used as test oracles.

#![allow(dead_code)]

use bisparse::model::{ModelConfig, ModelWeights};

/// (overlap, candidate n-grams, reference n-grams) by pairing each candidate
/// n-gram with an unused equal reference n-gram, scanning linearly.
pub fn rouge_n_counts(cand: &[u32], refr: &[u32], n: usize) -> (usize, usize, usize) {
    let grams = |s: &[u32]| -> Vec<Vec<u32>> {
        if s.len() < n {
            return Vec::new();
        }
        (0..=s.len() - n).map(|i| s[i..i + n].to_vec()).collect()
    };
    let c = grams(cand);
    let r = grams(refr);
    let mut used = vec![false; r.len()];
    let mut overlap = 0;
    for g in &c {
        if let Some(idx) = (0..r.len()).find(|&i| !used[i] && r[i] == *g) {
            used[idx] = true;
            overlap += 1;
        }
    }
    (overlap, c.len(), r.len())
}

/// Full-table longest common subsequence.
pub fn lcs(a: &[u32], b: &[u32]) -> usize {
    let mut t = vec![vec![0usize; b.len() + 1]; a.len() + 1];
    for i in 1..=a.len() {
        for j in 1..=b.len() {
            t[i][j] = if a[i - 1] == b[j - 1] {
                t[i - 1][j - 1] + 1
            } else {
                t[i - 1][j].max(t[i][j - 1])
            };
        }
    }
    t[a.len()][b.len()]
}

/// Clipped multiset overlap by sorting both sides and merging.
pub fn multiset_overlap(cand: &[u32], refr: &[u32]) -> usize {
    let mut a = cand.to_vec();
    let mut b = refr.to_vec();
    a.sort_unstable();
    b.sort_unstable();
    let (mut i, mut j, mut n) = (0, 0, 0);
    while i < a.len() && j < b.len() {
        match a[i].cmp(&b[j]) {
            std::cmp::Ordering::Less => i += 1,
            std::cmp::Ordering::Greater => j += 1,
            std::cmp::Ordering::Equal => {
                n += 1;
                i += 1;
                j += 1;
            }
        }
    }
    n
}

/// (P, R, F1) on the 0..100 scale; 0 when either side is empty.
pub fn prf(overlap: usize, cand: usize, refr: usize) -> (f64, f64, f64) {
    if cand == 0 || refr == 0 {
        return (0.0, 0.0, 0.0);
    }
    let p = 100.0 * overlap as f64 / cand as f64;
    let r = 100.0 * overlap as f64 / refr as f64;
    let f = if p + r == 0.0 { 0.0 } else { 2.0 * p * r / (p + r) };
    (p, r, f)
}

type Mat = Vec<Vec<f64>>;

fn get(w: &ModelWeights, name: &str) -> (Vec<usize>, Vec<f64>) {
    let (_, t) = w
        .named()
        .into_iter()
        .find(|(n, _)| n == name)
        .unwrap_or_else(|| panic!("no parameter {name}"));
    (t.shape().to_vec(), t.data().to_vec())
}

fn mat(w: &ModelWeights, name: &str) -> Mat {
    let (shape, data) = get(w, name);
    data.chunks(shape[1]).map(|r| r.to_vec()).collect()
}

fn vector(w: &ModelWeights, name: &str) -> Vec<f64> {
    get(w, name).1
}

fn mm(a: &Mat, b: &Mat) -> Mat {
    a.iter()
        .map(|row| {
            (0..b[0].len())
                .map(|j| row.iter().enumerate().map(|(k, x)| x * b[k][j]).sum())
                .collect()
        })
        .collect()
}

fn layer_norm(x: &Mat, g: &[f64], b: &[f64], eps: f64) -> Mat {
    x.iter()
        .map(|row| {
            let n = row.len() as f64;
            let mean = row.iter().sum::<f64>() / n;
            let var = row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
            row.iter()
                .enumerate()
                .map(|(k, v)| (v - mean) / (var + eps).sqrt() * g[k] + b[k])
                .collect()
        })
        .collect()
}

fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + ((2.0 / std::f64::consts::PI).sqrt() * (x + 0.044715 * x.powi(3))).tanh())
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

/// Logits of one sequence, written out loop by loop for a causal model
/// without Q/K/V projections and with additive masking from dot-product
/// scores.
pub fn reference_logits(cfg: &ModelConfig, w: &ModelWeights, ids: &[usize]) -> Mat {
    let a = &cfg.attention;
    assert!(a.causal && !cfg.qkv_projection && cfg.tie_embeddings && a.normalized);
    let t = ids.len();
    let d = a.d_model;
    let dk = d / a.n_head;
    let wte = mat(w, "wte");
    let wpe = mat(w, "wpe");
    let mut x: Mat = (0..t)
        .map(|i| (0..d).map(|k| wte[ids[i]][k] + wpe[i][k]).collect())
        .collect();
    x = layer_norm(
        &x,
        &vector(w, "ln_in.gain"),
        &vector(w, "ln_in.bias"),
        cfg.layer_norm_eps,
    );
    for l in 0..cfg.n_layer {
        let m = cfg.mechanism_for(l);
        let h = layer_norm(
            &x,
            &vector(w, &format!("h.{l}.ln1.gain")),
            &vector(w, &format!("h.{l}.ln1.bias")),
            cfg.layer_norm_eps,
        );
        let mut heads = vec![vec![0.0; d]; t];
        for hd in 0..a.n_head {
            let q: Mat = h.iter().map(|r| r[hd * dk..(hd + 1) * dk].to_vec()).collect();
            let wa = if m.uses_bilinear() {
                mat(w, &format!("h.{l}.attn.bilinear.{hd}"))
            } else {
                (0..dk)
                    .map(|i| (0..dk).map(|j| if i == j { 1.0 } else { 0.0 }).collect())
                    .collect()
            };
            let span = m.uses_span_gates().then(|| vector(w, &format!("h.{l}.attn.span.{hd}")));
            let qw = mm(&q, &wa);
            for i in 0..t {
                let mut scores = vec![f64::NEG_INFINITY; t];
                for j in 0..=i {
                    let dot: f64 = (0..dk).map(|k| q[i][k] * q[j][k]).sum::<f64>() / (dk as f64).sqrt();
                    let mut s: f64 = (0..dk).map(|k| qw[i][k] * q[j][k]).sum::<f64>() / (dk as f64).sqrt();
                    let mut keep = true;
                    if m.uses_sparse_mask() && j != i && dot < a.sparsity_threshold {
                        keep = false;
                    }
                    if let Some(span) = &span {
                        let g = sigmoid(span[i - j]);
                        if g > a.span_drop {
                            s *= g;
                        } else if i != j {
                            keep = false;
                        }
                    }
                    if keep {
                        scores[j] = s;
                    }
                }
                let max = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let e: Vec<f64> = scores.iter().map(|s| (s - max).exp()).collect();
                let z: f64 = e.iter().sum();
                for k in 0..dk {
                    heads[i][hd * dk + k] = (0..t).map(|j| e[j] / z * q[j][k]).sum();
                }
            }
        }
        let pw = mat(w, &format!("h.{l}.attn.proj.w"));
        let pb = vector(w, &format!("h.{l}.attn.proj.b"));
        let attn = mm(&heads, &pw);
        for i in 0..t {
            for k in 0..d {
                x[i][k] += attn[i][k] + pb[k];
            }
        }
        let h = layer_norm(
            &x,
            &vector(w, &format!("h.{l}.ln2.gain")),
            &vector(w, &format!("h.{l}.ln2.bias")),
            cfg.layer_norm_eps,
        );
        let fb = vector(w, &format!("h.{l}.ffn.fc.b"));
        let ob = vector(w, &format!("h.{l}.ffn.out.b"));
        let mut f = mm(&h, &mat(w, &format!("h.{l}.ffn.fc.w")));
        for row in &mut f {
            for (k, v) in row.iter_mut().enumerate() {
                *v = gelu(*v + fb[k]);
            }
        }
        let f = mm(&f, &mat(w, &format!("h.{l}.ffn.out.w")));
        for i in 0..t {
            for k in 0..d {
                x[i][k] += f[i][k] + ob[k];
            }
        }
    }
    let x = layer_norm(&x, &vector(w, "ln_f.gain"), &vector(w, "ln_f.bias"), cfg.layer_norm_eps);
    x.iter()
        .map(|row| {
            wte.iter()
                .map(|e| row.iter().zip(e).map(|(a, b)| a * b).sum())
                .collect()
        })
        .collect()
}
