//! Multiclass logistic-regression score fusion: one scalar scale per
//! system, one offset per language, fit by Newton descent on the convex
//! cross-entropy objective.

use std::collections::BTreeMap;
use std::path::Path;

use thiserror::Error;

use crate::corpus::LabelSet;

#[derive(Debug, Error)]
pub enum FusionError {
    #[error("no systems to fuse")]
    NoSystems,
    #[error("utterance sets are misaligned across systems: {0}")]
    IdMisalignment(String),
    #[error("language {0:?} never appears in the labels")]
    DegenerateLabels(String),
    #[error("weight count {got} does not match system count {want}")]
    WeightMismatch { got: usize, want: usize },
    #[error("optimizer failed to reach gradient tolerance: |g| = {0:.3e}")]
    NoConvergence(f64),
    #[error("{path}: {detail}")]
    Parse { path: String, detail: String },
    #[error("{path}: {source}")]
    Io { path: String, source: std::io::Error },
    #[error("score matrix is empty or ragged")]
    BadShape,
}

/// Utterances x languages score matrix in log-likelihood scale.
#[derive(Debug, Clone, PartialEq)]
pub struct ScoreMatrix {
    pub system_id: String,
    pub ids: Vec<String>,
    pub n_classes: usize,
    /// row-major, ids.len() x n_classes
    pub scores: Vec<f64>,
}

impl ScoreMatrix {
    pub fn new(system_id: String, ids: Vec<String>, rows: Vec<Vec<f64>>) -> Self {
        assert_eq!(ids.len(), rows.len());
        let n_classes = rows.first().map_or(0, Vec::len);
        let mut scores = Vec::with_capacity(ids.len() * n_classes);
        for row in &rows {
            assert_eq!(row.len(), n_classes, "ragged score rows");
            scores.extend_from_slice(row);
        }
        ScoreMatrix {
            system_id,
            ids,
            n_classes,
            scores,
        }
    }

    #[inline]
    pub fn row(&self, u: usize) -> &[f64] {
        &self.scores[u * self.n_classes..(u + 1) * self.n_classes]
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    /// Reorder rows to follow `ids`; error when the utterance sets differ.
    pub fn align_to(&self, ids: &[String]) -> Result<ScoreMatrix, FusionError> {
        if self.ids == ids {
            return Ok(self.clone());
        }
        let index: BTreeMap<&str, usize> = self
            .ids
            .iter()
            .enumerate()
            .map(|(i, id)| (id.as_str(), i))
            .collect();
        if index.len() != ids.len() {
            return Err(FusionError::IdMisalignment(format!(
                "system {} covers {} utterances, expected {}",
                self.system_id,
                index.len(),
                ids.len()
            )));
        }
        let mut rows = Vec::with_capacity(ids.len());
        for id in ids {
            let &u = index.get(id.as_str()).ok_or_else(|| {
                FusionError::IdMisalignment(format!(
                    "system {} lacks utterance {id:?}",
                    self.system_id
                ))
            })?;
            rows.push(self.row(u).to_vec());
        }
        Ok(ScoreMatrix::new(self.system_id.clone(), ids.to_vec(), rows))
    }

    /// Write as TSV: header `segmentid` + language codes, one row per
    /// utterance. Scores print with full round-trip precision.
    pub fn save_tsv(&self, path: &Path, labels: &LabelSet) -> Result<(), FusionError> {
        assert_eq!(labels.len(), self.n_classes);
        let mut out = String::from("segmentid");
        for code in labels.codes() {
            out.push('\t');
            out.push_str(code);
        }
        out.push('\n');
        for (u, id) in self.ids.iter().enumerate() {
            out.push_str(id);
            for v in self.row(u) {
                out.push_str(&format!("\t{v}"));
            }
            out.push('\n');
        }
        std::fs::write(path, out).map_err(|e| FusionError::Io {
            path: path.display().to_string(),
            source: e,
        })
    }

    pub fn load_tsv(path: &Path, system_id: &str) -> Result<(ScoreMatrix, Vec<String>), FusionError> {
        let text = std::fs::read_to_string(path).map_err(|e| FusionError::Io {
            path: path.display().to_string(),
            source: e,
        })?;
        let mut lines = text.lines();
        let header = lines.next().ok_or_else(|| FusionError::Parse {
            path: path.display().to_string(),
            detail: "empty file".into(),
        })?;
        let cols: Vec<&str> = header.split('\t').collect();
        if cols.first() != Some(&"segmentid") || cols.len() < 2 {
            return Err(FusionError::Parse {
                path: path.display().to_string(),
                detail: "header must be segmentid + language codes".into(),
            });
        }
        let codes: Vec<String> = cols[1..].iter().map(|s| s.to_string()).collect();
        let mut ids = Vec::new();
        let mut rows = Vec::new();
        for (lineno, line) in lines.enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            let parts: Vec<&str> = line.split('\t').collect();
            if parts.len() != codes.len() + 1 {
                return Err(FusionError::Parse {
                    path: path.display().to_string(),
                    detail: format!("row {}: wrong column count", lineno + 2),
                });
            }
            ids.push(parts[0].to_string());
            let row: Result<Vec<f64>, _> = parts[1..].iter().map(|s| s.parse()).collect();
            rows.push(row.map_err(|_| FusionError::Parse {
                path: path.display().to_string(),
                detail: format!("row {}: bad score", lineno + 2),
            })?);
        }
        Ok((ScoreMatrix::new(system_id.to_string(), ids, rows), codes))
    }
}

/// Per-system scale and per-language offset.
#[derive(Debug, Clone, PartialEq)]
pub struct FusionWeights {
    pub alpha: Vec<f64>,
    pub beta: Vec<f64>,
}

impl FusionWeights {
    /// TSV: one `system_id<TAB>alpha` row per system, then one
    /// `beta<TAB>v...` row.
    pub fn save_tsv(&self, path: &Path, system_ids: &[String]) -> Result<(), FusionError> {
        assert_eq!(system_ids.len(), self.alpha.len());
        let mut out = String::new();
        for (id, a) in system_ids.iter().zip(&self.alpha) {
            out.push_str(&format!("{id}\t{a}\n"));
        }
        out.push_str("beta");
        for b in &self.beta {
            out.push_str(&format!("\t{b}"));
        }
        out.push('\n');
        std::fs::write(path, out).map_err(|e| FusionError::Io {
            path: path.display().to_string(),
            source: e,
        })
    }

    pub fn load_tsv(path: &Path) -> Result<(FusionWeights, Vec<String>), FusionError> {
        let text = std::fs::read_to_string(path).map_err(|e| FusionError::Io {
            path: path.display().to_string(),
            source: e,
        })?;
        let mut alpha = Vec::new();
        let mut ids = Vec::new();
        let mut beta = None;
        for line in text.lines() {
            if line.trim().is_empty() {
                continue;
            }
            let parts: Vec<&str> = line.split('\t').collect();
            if parts[0] == "beta" {
                let b: Result<Vec<f64>, _> = parts[1..].iter().map(|s| s.parse()).collect();
                beta = Some(b.map_err(|_| FusionError::Parse {
                    path: path.display().to_string(),
                    detail: "bad beta row".into(),
                })?);
            } else {
                if parts.len() != 2 {
                    return Err(FusionError::Parse {
                        path: path.display().to_string(),
                        detail: "alpha rows are system_id<TAB>value".into(),
                    });
                }
                ids.push(parts[0].to_string());
                alpha.push(parts[1].parse().map_err(|_| FusionError::Parse {
                    path: path.display().to_string(),
                    detail: "bad alpha value".into(),
                })?);
            }
        }
        let beta = beta.ok_or_else(|| FusionError::Parse {
            path: path.display().to_string(),
            detail: "missing beta row".into(),
        })?;
        Ok((FusionWeights { alpha, beta }, ids))
    }
}

/// Mean multiclass cross-entropy of `softmax(sum_i alpha_i S_i + beta)`
/// plus `lambda * |alpha|^2`, with its gradient.
pub fn fusion_objective(
    systems: &[ScoreMatrix],
    label_idx: &[usize],
    alpha: &[f64],
    beta: &[f64],
    l2_lambda: f64,
) -> (f64, Vec<f64>) {
    let n = label_idx.len();
    let l = beta.len();
    let m = systems.len();
    let mut obj = 0.0;
    let mut grad = vec![0.0f64; m + l];
    let mut z = vec![0.0f64; l];
    let mut p = vec![0.0f64; l];
    for u in 0..n {
        for c in 0..l {
            z[c] = beta[c];
        }
        for (i, s) in systems.iter().enumerate() {
            let row = s.row(u);
            for c in 0..l {
                z[c] += alpha[i] * row[c];
            }
        }
        let zmax = z.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let mut denom = 0.0;
        for c in 0..l {
            p[c] = (z[c] - zmax).exp();
            denom += p[c];
        }
        for c in 0..l {
            p[c] /= denom;
        }
        obj -= (p[label_idx[u]].max(1e-300)).ln();
        for c in 0..l {
            let e = p[c] - f64::from(c == label_idx[u]);
            grad[m + c] += e;
            for (i, s) in systems.iter().enumerate() {
                grad[i] += e * s.row(u)[c];
            }
        }
    }
    obj /= n as f64;
    for g in &mut grad {
        *g /= n as f64;
    }
    for i in 0..m {
        obj += l2_lambda * alpha[i] * alpha[i];
        grad[i] += 2.0 * l2_lambda * alpha[i];
    }
    (obj, grad)
}

fn fusion_hessian(
    systems: &[ScoreMatrix],
    label_idx: &[usize],
    alpha: &[f64],
    beta: &[f64],
    l2_lambda: f64,
) -> Vec<Vec<f64>> {
    let n = label_idx.len();
    let l = beta.len();
    let m = systems.len();
    let dim = m + l;
    let mut h = vec![vec![0.0f64; dim]; dim];
    let mut z = vec![0.0f64; l];
    let mut p = vec![0.0f64; l];
    // Jacobian of z wrt parameters: dz_c/dalpha_i = S_i[u,c]; dz_c/dbeta_j = [c==j]
    for u in 0..n {
        for c in 0..l {
            z[c] = beta[c];
        }
        for (i, s) in systems.iter().enumerate() {
            let row = s.row(u);
            for c in 0..l {
                z[c] += alpha[i] * row[c];
            }
        }
        let zmax = z.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let mut denom = 0.0;
        for c in 0..l {
            p[c] = (z[c] - zmax).exp();
            denom += p[c];
        }
        for c in 0..l {
            p[c] /= denom;
        }
        // W = diag(p) - p p^T; accumulate J^T W J
        // alpha-alpha block
        for i in 0..m {
            let si = systems[i].row(u);
            let pi: f64 = (0..l).map(|c| p[c] * si[c]).sum();
            for j in i..m {
                let sj = systems[j].row(u);
                let pj: f64 = (0..l).map(|c| p[c] * sj[c]).sum();
                let mut acc = 0.0;
                for c in 0..l {
                    acc += p[c] * si[c] * sj[c];
                }
                acc -= pi * pj;
                h[i][j] += acc;
            }
            // alpha-beta block: sum_c W[c,j] * S_i[u,c] = p_j S_i[u,j] - p_j * pi
            for j in 0..l {
                h[i][m + j] += p[j] * si[j] - p[j] * pi;
            }
        }
        // beta-beta block
        for c in 0..l {
            for d in c..l {
                let w = if c == d { p[c] - p[c] * p[c] } else { -p[c] * p[d] };
                h[m + c][m + d] += w;
            }
        }
    }
    let scale = 1.0 / n as f64;
    for i in 0..dim {
        for j in i..dim {
            h[i][j] *= scale;
            h[j][i] = h[i][j];
        }
    }
    for i in 0..m {
        h[i][i] += 2.0 * l2_lambda;
    }
    h
}

/// Solve `(H + ridge I) x = -g` by Cholesky with a growing ridge.
fn solve_newton_step(h: &[Vec<f64>], g: &[f64]) -> Vec<f64> {
    let mut ridge = 1e-10;
    loop {
        let mut a: Vec<Vec<f64>> = h.to_vec();
        for (i, row) in a.iter_mut().enumerate() {
            row[i] += ridge;
        }
        if let Some(chol) = cholesky(&a) {
            let neg_g: Vec<f64> = g.iter().map(|&v| -v).collect();
            return chol_solve(&chol, &neg_g);
        }
        ridge *= 10.0;
        assert!(ridge < 1e6, "Hessian irreparably non-PSD");
    }
}

fn cholesky(a: &[Vec<f64>]) -> Option<Vec<Vec<f64>>> {
    let n = a.len();
    let mut l = vec![vec![0.0f64; n]; n];
    for i in 0..n {
        for j in 0..=i {
            let mut sum = a[i][j];
            for k in 0..j {
                sum -= l[i][k] * l[j][k];
            }
            if i == j {
                if sum <= 0.0 {
                    return None;
                }
                l[i][j] = sum.sqrt();
            } else {
                l[i][j] = sum / l[j][j];
            }
        }
    }
    Some(l)
}

fn chol_solve(l: &[Vec<f64>], b: &[f64]) -> Vec<f64> {
    let n = b.len();
    let mut y = vec![0.0f64; n];
    for i in 0..n {
        let mut sum = b[i];
        for k in 0..i {
            sum -= l[i][k] * y[k];
        }
        y[i] = sum / l[i][i];
    }
    let mut x = vec![0.0f64; n];
    for i in (0..n).rev() {
        let mut sum = y[i];
        for k in i + 1..n {
            sum -= l[k][i] * x[k];
        }
        x[i] = sum / l[i][i];
    }
    x
}

const GRAD_TOL: f64 = 1e-7;

/// Fit fusion weights on validation scores.
///
/// `key` maps utterance id to language code; every language must appear.
/// The optimizer is damped Newton on the convex objective, run to gradient
/// norm <= 1e-7.
pub fn fit_fusion(
    systems: &[ScoreMatrix],
    key: &BTreeMap<String, String>,
    labels: &LabelSet,
    l2_lambda: f64,
) -> Result<FusionWeights, FusionError> {
    if systems.is_empty() {
        return Err(FusionError::NoSystems);
    }
    let ids = systems[0].ids.clone();
    let aligned: Vec<ScoreMatrix> = systems
        .iter()
        .map(|s| s.align_to(&ids))
        .collect::<Result<_, _>>()?;
    let l = labels.len();
    let mut label_idx = Vec::with_capacity(ids.len());
    let mut seen = vec![false; l];
    for id in &ids {
        let code = key
            .get(id)
            .ok_or_else(|| FusionError::IdMisalignment(format!("no label for {id:?}")))?;
        let idx = labels
            .index(code)
            .ok_or_else(|| FusionError::DegenerateLabels(code.clone()))?;
        seen[idx] = true;
        label_idx.push(idx);
    }
    if let Some(missing) = seen.iter().position(|&s| !s) {
        return Err(FusionError::DegenerateLabels(labels.code(missing).to_string()));
    }

    let m = aligned.len();
    let mut alpha = vec![0.0f64; m];
    let mut beta = vec![0.0f64; l];
    let (mut obj, mut grad) = fusion_objective(&aligned, &label_idx, &alpha, &beta, l2_lambda);
    for _ in 0..200 {
        let gnorm = grad.iter().map(|g| g * g).sum::<f64>().sqrt();
        if gnorm <= GRAD_TOL {
            return Ok(FusionWeights { alpha, beta });
        }
        let h = fusion_hessian(&aligned, &label_idx, &alpha, &beta, l2_lambda);
        let step = solve_newton_step(&h, &grad);
        // backtracking line search on the convex objective
        let mut t = 1.0;
        loop {
            let a2: Vec<f64> = alpha.iter().zip(&step[..m]).map(|(a, s)| a + t * s).collect();
            let b2: Vec<f64> = beta
                .iter()
                .zip(&step[m..])
                .map(|(b, s)| b + t * s)
                .collect();
            let (obj2, grad2) = fusion_objective(&aligned, &label_idx, &a2, &b2, l2_lambda);
            if obj2 <= obj + 1e-12 || t < 1e-8 {
                alpha = a2;
                beta = b2;
                obj = obj2;
                grad = grad2;
                break;
            }
            t *= 0.5;
        }
    }
    let gnorm = grad.iter().map(|g| g * g).sum::<f64>().sqrt();
    if gnorm <= GRAD_TOL {
        Ok(FusionWeights { alpha, beta })
    } else {
        Err(FusionError::NoConvergence(gnorm))
    }
}

/// Apply fusion weights: `fused = sum_i alpha_i S_i + beta`, rows aligned
/// by utterance id to the first system's order.
pub fn apply_fusion(
    weights: &FusionWeights,
    systems: &[ScoreMatrix],
) -> Result<ScoreMatrix, FusionError> {
    if systems.is_empty() {
        return Err(FusionError::NoSystems);
    }
    if weights.alpha.len() != systems.len() {
        return Err(FusionError::WeightMismatch {
            got: weights.alpha.len(),
            want: systems.len(),
        });
    }
    let ids = systems[0].ids.clone();
    let aligned: Vec<ScoreMatrix> = systems
        .iter()
        .map(|s| s.align_to(&ids))
        .collect::<Result<_, _>>()?;
    let l = aligned[0].n_classes;
    if weights.beta.len() != l {
        return Err(FusionError::BadShape);
    }
    let mut rows = Vec::with_capacity(ids.len());
    for u in 0..ids.len() {
        let mut row = weights.beta.clone();
        for (a, s) in weights.alpha.iter().zip(&aligned) {
            for (r, &v) in row.iter_mut().zip(s.row(u)) {
                *r += a * v;
            }
        }
        rows.push(row);
    }
    let name = format!(
        "fusion({})",
        aligned
            .iter()
            .map(|s| s.system_id.as_str())
            .collect::<Vec<_>>()
            .join("+")
    );
    Ok(ScoreMatrix::new(name, ids, rows))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn labels(n: usize) -> LabelSet {
        LabelSet::new((0..n).map(|i| format!("L{i}")).collect())
    }

    fn softmax(z: &[f64]) -> Vec<f64> {
        let m = z.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let e: Vec<f64> = z.iter().map(|&v| (v - m).exp()).collect();
        let s: f64 = e.iter().sum();
        e.into_iter().map(|v| v / s).collect()
    }

    /// scores drawn i.i.d., labels sampled from each row's softmax: the
    /// generating calibration is exactly (alpha=1, beta=0)
    fn self_consistent_set(
        n: usize,
        l: usize,
        seed: u64,
    ) -> (ScoreMatrix, BTreeMap<String, String>) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut ids = Vec::new();
        let mut rows = Vec::new();
        let mut key = BTreeMap::new();
        for u in 0..n {
            let row: Vec<f64> = (0..l).map(|_| rng.gen_range(-2.5..2.5)).collect();
            let p = softmax(&row);
            let mut cdf = 0.0;
            let draw: f64 = rng.gen();
            let mut y = l - 1;
            for (c, &pc) in p.iter().enumerate() {
                cdf += pc;
                if draw < cdf {
                    y = c;
                    break;
                }
            }
            let id = format!("u{u}");
            key.insert(id.clone(), format!("L{y}"));
            ids.push(id);
            rows.push(row);
        }
        (ScoreMatrix::new("cal".into(), ids, rows), key)
    }

    #[test]
    fn self_calibrated_system_fits_identity() {
        let (scores, key) = self_consistent_set(6000, 4, 51);
        let w = fit_fusion(&[scores], &key, &labels(4), 0.0).unwrap();
        assert!((w.alpha[0] - 1.0).abs() < 0.05, "alpha {:?}", w.alpha);
        for &b in &w.beta {
            assert!(b.abs() < 0.05, "beta {:?}", w.beta);
        }
    }

    #[test]
    fn noise_system_is_downweighted() {
        let mut rng = ChaCha8Rng::seed_from_u64(52);
        let l = 4;
        let n = 1200;
        let mut ids = Vec::new();
        let mut informative = Vec::new();
        let mut noise = Vec::new();
        let mut key = BTreeMap::new();
        for u in 0..n {
            let y = rng.gen_range(0..l);
            let id = format!("u{u}");
            key.insert(id.clone(), format!("L{y}"));
            ids.push(id);
            informative.push(
                (0..l)
                    .map(|c| if c == y { 3.0 } else { 0.0 } + rng.gen_range(-0.5..0.5))
                    .collect::<Vec<f64>>(),
            );
            noise.push((0..l).map(|_| rng.gen_range(-3.0..3.0)).collect::<Vec<f64>>());
        }
        let sys_a = ScoreMatrix::new("good".into(), ids.clone(), informative);
        let sys_b = ScoreMatrix::new("noise".into(), ids, noise);
        let w = fit_fusion(&[sys_a, sys_b], &key, &labels(l), 1e-3).unwrap();
        assert!(
            w.alpha[1].abs() <= 0.1 * w.alpha[0].abs(),
            "alpha {:?}",
            w.alpha
        );
    }

    #[test]
    fn missing_class_is_an_error() {
        let (scores, mut key) = self_consistent_set(50, 3, 53);
        // remap every L2 label to L1
        for v in key.values_mut() {
            if v == "L2" {
                *v = "L1".into();
            }
        }
        assert!(matches!(
            fit_fusion(&[scores], &key, &labels(3), 1e-4),
            Err(FusionError::DegenerateLabels(_))
        ));
    }

    #[test]
    fn identity_fusion_is_exact() {
        let (scores, _) = self_consistent_set(20, 3, 54);
        let w = FusionWeights {
            alpha: vec![1.0],
            beta: vec![0.0; 3],
        };
        let fused = apply_fusion(&w, &[scores.clone()]).unwrap();
        assert_eq!(fused.scores, scores.scores);
    }

    #[test]
    fn half_half_fusion_of_identical_matrices() {
        let (scores, _) = self_consistent_set(20, 3, 55);
        let w = FusionWeights {
            alpha: vec![0.5, 0.5],
            beta: vec![0.1, -0.2, 0.3],
        };
        let fused = apply_fusion(&w, &[scores.clone(), scores.clone()]).unwrap();
        for u in 0..scores.len() {
            for c in 0..3 {
                let want = scores.row(u)[c] + w.beta[c];
                assert!((fused.row(u)[c] - want).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn hand_one_by_two_case() {
        // alpha=[2], beta=[1,-1], S=[[0.5, 0]] -> [[2, -1]]
        let s = ScoreMatrix::new("s".into(), vec!["u".into()], vec![vec![0.5, 0.0]]);
        let w = FusionWeights {
            alpha: vec![2.0],
            beta: vec![1.0, -1.0],
        };
        let fused = apply_fusion(&w, &[s]).unwrap();
        assert_eq!(fused.row(0), &[2.0, -1.0]);
    }

    #[test]
    fn apply_is_affine_in_the_scores() {
        let (scores, _) = self_consistent_set(15, 3, 56);
        let scaled = ScoreMatrix::new(
            "s2".into(),
            scores.ids.clone(),
            (0..scores.len()).map(|u| scores.row(u).iter().map(|v| v * 4.0).collect()).collect(),
        );
        let w1 = FusionWeights {
            alpha: vec![0.8],
            beta: vec![0.3, 0.0, -0.3],
        };
        let w2 = FusionWeights {
            alpha: vec![0.2],
            beta: vec![0.3, 0.0, -0.3],
        };
        let a = apply_fusion(&w1, &[scores]).unwrap();
        let b = apply_fusion(&w2, &[scaled]).unwrap();
        for (x, y) in a.scores.iter().zip(&b.scores) {
            assert!((x - y).abs() < 1e-12);
        }
    }

    #[test]
    fn argmax_invariant_to_constant_beta_shift() {
        let (scores, _) = self_consistent_set(40, 4, 57);
        let w1 = FusionWeights {
            alpha: vec![1.3],
            beta: vec![0.2, -0.1, 0.5, 0.0],
        };
        let w2 = FusionWeights {
            alpha: vec![1.3],
            beta: w1.beta.iter().map(|b| b + 7.0).collect(),
        };
        let a = apply_fusion(&w1, &[scores.clone()]).unwrap();
        let b = apply_fusion(&w2, &[scores]).unwrap();
        for u in 0..a.len() {
            let am = a.row(u).iter().enumerate().max_by(|x, y| x.1.partial_cmp(y.1).unwrap()).unwrap().0;
            let bm = b.row(u).iter().enumerate().max_by(|x, y| x.1.partial_cmp(y.1).unwrap()).unwrap().0;
            assert_eq!(am, bm);
        }
    }

    #[test]
    fn objective_is_convex_along_random_segments() {
        let (scores, key) = self_consistent_set(60, 3, 58);
        let lab = labels(3);
        let label_idx: Vec<usize> = scores
            .ids
            .iter()
            .map(|id| lab.index(&key[id]).unwrap())
            .collect();
        let mut rng = ChaCha8Rng::seed_from_u64(59);
        let systems = vec![scores];
        for _ in 0..100 {
            let a0 = vec![rng.gen_range(-2.0..2.0)];
            let b0: Vec<f64> = (0..3).map(|_| rng.gen_range(-2.0..2.0)).collect();
            let a1 = vec![rng.gen_range(-2.0..2.0)];
            let b1: Vec<f64> = (0..3).map(|_| rng.gen_range(-2.0..2.0)).collect();
            let lambda = 1e-4;
            let (f0, _) = fusion_objective(&systems, &label_idx, &a0, &b0, lambda);
            let (f1, _) = fusion_objective(&systems, &label_idx, &a1, &b1, lambda);
            let mid_a = vec![(a0[0] + a1[0]) / 2.0];
            let mid_b: Vec<f64> = b0.iter().zip(&b1).map(|(x, y)| (x + y) / 2.0).collect();
            let (fm, _) = fusion_objective(&systems, &label_idx, &mid_a, &mid_b, lambda);
            assert!(fm <= (f0 + f1) / 2.0 + 1e-10, "midpoint above chord");
        }
    }

    #[test]
    fn fused_objective_beats_best_single_calibrated_system() {
        // two complementary noisy systems
        let mut rng = ChaCha8Rng::seed_from_u64(60);
        let l = 3;
        let n = 400;
        let mut ids = Vec::new();
        let mut key = BTreeMap::new();
        let mut r1 = Vec::new();
        let mut r2 = Vec::new();
        for u in 0..n {
            let y = rng.gen_range(0..l);
            let id = format!("u{u}");
            key.insert(id.clone(), format!("L{y}"));
            ids.push(id);
            r1.push(
                (0..l)
                    .map(|c| if c == y { 1.2 } else { 0.0 } + rng.gen_range(-1.0..1.0))
                    .collect::<Vec<f64>>(),
            );
            r2.push(
                (0..l)
                    .map(|c| if c == y { 1.2 } else { 0.0 } + rng.gen_range(-1.0..1.0))
                    .collect::<Vec<f64>>(),
            );
        }
        let s1 = ScoreMatrix::new("a".into(), ids.clone(), r1);
        let s2 = ScoreMatrix::new("b".into(), ids, r2);
        let lab = labels(l);
        let label_idx: Vec<usize> = s1.ids.iter().map(|id| lab.index(&key[id]).unwrap()).collect();

        let eval_ce = |systems: &[ScoreMatrix], w: &FusionWeights| {
            fusion_objective(systems, &label_idx, &w.alpha, &w.beta, 0.0).0
        };
        let w_joint = fit_fusion(&[s1.clone(), s2.clone()], &key, &lab, 0.0).unwrap();
        let joint_ce = eval_ce(&[s1.clone(), s2.clone()], &w_joint);
        for single in [&s1, &s2] {
            let w = fit_fusion(std::slice::from_ref(single), &key, &lab, 0.0).unwrap();
            let ce = eval_ce(std::slice::from_ref(single), &w);
            assert!(
                joint_ce <= ce + 1e-6,
                "joint {joint_ce} worse than single {ce}"
            );
        }
    }

    #[test]
    fn weights_roundtrip_tsv() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("w.tsv");
        let w = FusionWeights {
            alpha: vec![1.25, -0.5],
            beta: vec![0.1, 0.2, 0.3],
        };
        w.save_tsv(&path, &["s1".into(), "s2".into()]).unwrap();
        let (back, ids) = FusionWeights::load_tsv(&path).unwrap();
        assert_eq!(back, w);
        assert_eq!(ids, vec!["s1".to_string(), "s2".to_string()]);
    }

    #[test]
    fn scores_roundtrip_tsv() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("s.tsv");
        let (scores, _) = self_consistent_set(9, 3, 61);
        scores.save_tsv(&path, &labels(3)).unwrap();
        let (back, codes) = ScoreMatrix::load_tsv(&path, "cal").unwrap();
        assert_eq!(back.scores, scores.scores);
        assert_eq!(back.ids, scores.ids);
        assert_eq!(codes, labels(3).codes());
    }
}
