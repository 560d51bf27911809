//! Additive-angular-margin softmax loss over cosine logits.

use crate::mat::Mat;

/// Numerical guard keeping sqrt(1 - c^2) differentiable at the poles.
const COS_CLAMP: f64 = 1.0 - 1e-7;

/// AAM-softmax loss and gradients.
///
/// Embeddings and class weights are length-normalized internally; the
/// target class logit is `s * cos(theta_y + m)`, non-targets `s * cos`.
/// Returns (mean loss, d embeddings, d weights).
pub fn aam_loss(
    embeddings: &Mat,
    weights: &Mat,
    labels: &[usize],
    scale: f64,
    margin: f64,
) -> (f64, Mat, Mat) {
    let b = embeddings.rows;
    let e_dim = embeddings.cols;
    let n_classes = weights.rows;
    assert_eq!(weights.cols, e_dim);
    assert_eq!(labels.len(), b);
    for &y in labels {
        assert!(y < n_classes, "label out of range");
    }
    let (cos_m, sin_m) = (margin.cos(), margin.sin());

    // normalized rows and their norms
    let mut e_hat = embeddings.clone();
    let mut e_norm = vec![0.0f64; b];
    for i in 0..b {
        let n = norm(embeddings.row(i)).max(1e-12);
        e_norm[i] = n;
        for v in e_hat.row_mut(i) {
            *v /= n;
        }
    }
    let mut w_hat = weights.clone();
    let mut w_norm = vec![0.0f64; n_classes];
    for j in 0..n_classes {
        let n = norm(weights.row(j)).max(1e-12);
        w_norm[j] = n;
        for v in w_hat.row_mut(j) {
            *v /= n;
        }
    }

    let mut loss = 0.0;
    let mut d_emb = Mat::zeros(b, e_dim);
    let mut d_w = Mat::zeros(n_classes, e_dim);
    let mut cos = vec![0.0f64; n_classes];
    let mut z = vec![0.0f64; n_classes];
    let mut p = vec![0.0f64; n_classes];
    for i in 0..b {
        let y = labels[i];
        for j in 0..n_classes {
            cos[j] = dot(e_hat.row(i), w_hat.row(j));
            z[j] = scale * cos[j];
        }
        let c_y = cos[y].clamp(-COS_CLAMP, COS_CLAMP);
        let sin_y = (1.0 - c_y * c_y).sqrt();
        z[y] = scale * (c_y * cos_m - sin_y * sin_m);

        let zmax = z.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let mut denom = 0.0;
        for j in 0..n_classes {
            p[j] = (z[j] - zmax).exp();
            denom += p[j];
        }
        for v in &mut p {
            *v /= denom;
        }
        // no floor: a collapsed posterior must surface as a non-finite
        // loss so training aborts instead of silently continuing
        loss -= p[y].ln();

        // dz = p - onehot(y); dcos via the margin chain rule on the target
        for j in 0..n_classes {
            let dz = (p[j] - f64::from(j == y)) / b as f64;
            let dcos = if j == y {
                scale * dz * (cos_m + c_y / sin_y.max(1e-7) * sin_m)
            } else {
                scale * dz
            };
            // d cos / d e = (w_hat - cos * e_hat) / |e|
            // d cos / d w = (e_hat - cos * w_hat) / |w|
            let inv_e = 1.0 / e_norm[i];
            let inv_w = 1.0 / w_norm[j];
            let c = cos[j];
            for d in 0..e_dim {
                d_emb.row_mut(i)[d] += dcos * (w_hat.at(j, d) - c * e_hat.at(i, d)) * inv_e;
                d_w.row_mut(j)[d] += dcos * (e_hat.at(i, d) - c * w_hat.at(j, d)) * inv_w;
            }
        }
    }
    (loss / b as f64, d_emb, d_w)
}

/// Inference logits: `s * cos(theta_j)` without the margin.
pub fn cosine_logits(embedding: &[f64], weights: &Mat, scale: f64) -> Vec<f64> {
    let e_n = norm(embedding).max(1e-12);
    (0..weights.rows)
        .map(|j| {
            let w = weights.row(j);
            let w_n = norm(w).max(1e-12);
            scale * dot(embedding, w) / (e_n * w_n)
        })
        .collect()
}

pub fn log_softmax(logits: &[f64]) -> Vec<f64> {
    let m = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let lse = m + logits.iter().map(|&v| (v - m).exp()).sum::<f64>().ln();
    logits.iter().map(|&v| v - lse).collect()
}

fn norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}
