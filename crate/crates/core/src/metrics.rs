//! Bias and performance measurement.
//!
//! - AUC via the rank statistic (ties count one half);
//! - cross-dataset report: internal mean ("self"), external mean ("others"),
//!   and the normalized performance drop PD = (self - others) / self;
//! - classifier two-sample test (C2ST): train a probe to tell the sources
//!   apart; held-out accuracy near chance means the distributions match;
//! - embedding export with a top-2 principal-component projection for
//!   scatter plots.

use crate::error::{Error, Result};
use crate::losses::{task_loss, TaskMode};
use crate::network::{Activation, LayeredNet};
use crate::tape::Tape;
use crate::tensor::Tensor;
use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use std::io::Write;
use std::path::Path;

// ---------------------------------------------------------------------------
// Scores

/// Area under the ROC curve: probability that a random positive outranks a
/// random negative, ties counted one half. Rejects single-class input.
pub fn auc(scores: &[f64], labels: &[bool]) -> Result<f64> {
    if scores.len() != labels.len() {
        return Err(Error::ShapeMismatch {
            op: "auc",
            detail: format!("{} scores vs {} labels", scores.len(), labels.len()),
        });
    }
    let pos = labels.iter().filter(|&&l| l).count();
    let neg = labels.len() - pos;
    if pos == 0 || neg == 0 {
        return Err(Error::MetricUndefined(format!(
            "auc needs both classes, got {pos} positives / {neg} negatives"
        )));
    }
    // average ranks with tie groups sharing the mean rank
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].partial_cmp(&scores[b]).expect("non-finite score"));
    let mut rank_sum_pos = 0.0;
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && scores[order[j + 1]] == scores[order[i]] {
            j += 1;
        }
        let mean_rank = (i + j + 2) as f64 / 2.0; // ranks are 1-based
        for &idx in &order[i..=j] {
            if labels[idx] {
                rank_sum_pos += mean_rank;
            }
        }
        i = j + 1;
    }
    let p = pos as f64;
    Ok((rank_sum_pos - p * (p + 1.0) / 2.0) / (p * neg as f64))
}

/// Argmax-match accuracy for one-hot (or soft) targets.
pub fn accuracy(logits: &Tensor, y: &Tensor) -> Result<f64> {
    if logits.shape() != y.shape() || !logits.is_matrix() {
        return Err(Error::ShapeMismatch {
            op: "accuracy",
            detail: format!("{:?} vs {:?}", logits.shape(), y.shape()),
        });
    }
    let n = logits.rows();
    if n == 0 {
        return Err(Error::MetricUndefined("accuracy of empty batch".into()));
    }
    let argmax = |row: &[f64]| -> usize {
        let mut best = 0;
        for (k, &v) in row.iter().enumerate() {
            if v > row[best] {
                best = k;
            }
        }
        best
    };
    let mut correct = 0usize;
    for i in 0..n {
        if argmax(logits.row(i)) == argmax(y.row(i)) {
            correct += 1;
        }
    }
    Ok(correct as f64 / n as f64)
}

/// Macro-averaged AUC over label columns. Columns with a single class are
/// skipped; errors if no column is scoreable.
pub fn macro_auc(scores: &Tensor, y: &Tensor) -> Result<f64> {
    if scores.shape() != y.shape() || !scores.is_matrix() {
        return Err(Error::ShapeMismatch {
            op: "macro-auc",
            detail: format!("{:?} vs {:?}", scores.shape(), y.shape()),
        });
    }
    let (n, l) = (scores.rows(), scores.cols());
    let mut total = 0.0;
    let mut used = 0usize;
    for col in 0..l {
        let s: Vec<f64> = (0..n).map(|i| scores.at(i, col)).collect();
        let lab: Vec<bool> = (0..n).map(|i| y.at(i, col) > 0.5).collect();
        match auc(&s, &lab) {
            Ok(a) => {
                total += a;
                used += 1;
            }
            Err(Error::MetricUndefined(_)) => continue,
            Err(e) => return Err(e),
        }
    }
    if used == 0 {
        return Err(Error::MetricUndefined("macro-auc: no label column has both classes".into()));
    }
    Ok(total / used as f64)
}

// ---------------------------------------------------------------------------
// Cross-dataset report

/// Bias summary of one trained model under one internal/external split.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BiasReport {
    /// Mean internal test score.
    #[serde(rename = "self")]
    pub self_score: f64,
    /// Mean external test score.
    pub others: f64,
    /// (self - others) / self; missing when self == 0.
    pub pd: Option<f64>,
    /// Classifier-test accuracy on embeddings, when measured.
    pub c2st_acc: Option<f64>,
    /// Score per domain.
    pub per_domain: BTreeMap<String, f64>,
}

/// Combine per-domain scores into self / others / PD.
pub fn cross_dataset_report(
    per_domain: &BTreeMap<String, f64>,
    internal: &[String],
    external: &[String],
) -> Result<BiasReport> {
    if external.is_empty() {
        return Err(Error::Config("external set must be nonempty".into()));
    }
    for name in internal {
        if external.contains(name) {
            return Err(Error::Config(format!("domain {name} in both internal and external sets")));
        }
    }
    let fetch = |name: &String| -> Result<f64> {
        let v = *per_domain
            .get(name)
            .ok_or_else(|| Error::Config(format!("no score for domain {name}")))?;
        if !(0.0..=1.0).contains(&v) {
            return Err(Error::Config(format!("score {v} for {name} outside [0, 1]")));
        }
        Ok(v)
    };
    let mut self_score = 0.0;
    for name in internal {
        self_score += fetch(name)?;
    }
    self_score /= internal.len().max(1) as f64;
    let mut others = 0.0;
    for name in external {
        others += fetch(name)?;
    }
    others /= external.len() as f64;
    let pd = if self_score > 0.0 { Some((self_score - others) / self_score) } else { None };
    Ok(BiasReport {
        self_score,
        others,
        pd,
        c2st_acc: None,
        per_domain: per_domain.clone(),
    })
}

// ---------------------------------------------------------------------------
// Classifier two-sample test

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ProbeKind {
    /// Softmax regression on the (standardized) inputs.
    Linear,
    /// One relu hidden layer.
    OneHidden { hidden: usize },
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct C2stConfig {
    pub probe: ProbeKind,
    /// Train fraction of the stratified split.
    pub split_ratio: f64,
    pub seed: u64,
    /// Full-batch gradient-descent iterations for the probe.
    pub steps: usize,
    pub lr: f64,
    /// Verdict margin above chance level.
    pub chance_margin: f64,
}

impl Default for C2stConfig {
    fn default() -> Self {
        C2stConfig {
            probe: ProbeKind::Linear,
            split_ratio: 0.7,
            seed: 0,
            steps: 400,
            lr: 0.5,
            chance_margin: 0.05,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct C2stOutcome {
    /// Held-out probe accuracy.
    pub accuracy: f64,
    /// Chance level 1/K.
    pub chance: f64,
    /// True when accuracy exceeds chance by more than the margin, i.e. the
    /// sources are distinguishable.
    pub distinct: bool,
}

/// Two-sample special case of [`c2st_multi`].
pub fn c2st(a: &Tensor, b: &Tensor, cfg: &C2stConfig) -> Result<C2stOutcome> {
    c2st_multi(&[a.clone(), b.clone()], cfg)
}

/// Name-the-source test over K sets: build the union dataset labeled by
/// source, stratified train/test split, train the probe, report held-out
/// accuracy.
pub fn c2st_multi(sets: &[Tensor], cfg: &C2stConfig) -> Result<C2stOutcome> {
    if sets.len() < 2 {
        return Err(Error::Config("c2st needs at least two sets".into()));
    }
    let d = sets[0].cols();
    for (i, s) in sets.iter().enumerate() {
        if !s.is_matrix() || s.cols() != d {
            return Err(Error::ShapeMismatch {
                op: "c2st",
                detail: format!("set {i} has shape {:?}, expected {d} columns", s.shape()),
            });
        }
        if s.rows() == 0 {
            return Err(Error::Config(format!("c2st set {i} is empty")));
        }
    }
    if !(0.0 < cfg.split_ratio && cfg.split_ratio < 1.0) {
        return Err(Error::Config(format!("split ratio {} outside (0, 1)", cfg.split_ratio)));
    }

    let k = sets.len();
    let mut rng = crate::datagen::seed_stream(cfg.seed, "c2st-split");
    let mut train_rows: Vec<(usize, usize)> = Vec::new(); // (set, row)
    let mut test_rows: Vec<(usize, usize)> = Vec::new();
    for (si, s) in sets.iter().enumerate() {
        let mut idx: Vec<usize> = (0..s.rows()).collect();
        idx.shuffle(&mut rng);
        let n_train = ((s.rows() as f64) * cfg.split_ratio).round() as usize;
        let n_train = n_train.min(s.rows());
        if n_train == 0 || n_train == s.rows() {
            return Err(Error::Config(format!(
                "degenerate c2st split for set {si}: {} train of {} rows",
                n_train,
                s.rows()
            )));
        }
        for &r in &idx[..n_train] {
            train_rows.push((si, r));
        }
        for &r in &idx[n_train..] {
            test_rows.push((si, r));
        }
    }

    // standardize with train statistics
    let mut mean = vec![0.0; d];
    for &(si, r) in &train_rows {
        for (m, &v) in mean.iter_mut().zip(sets[si].row(r).iter()) {
            *m += v;
        }
    }
    for m in mean.iter_mut() {
        *m /= train_rows.len() as f64;
    }
    let mut var = vec![0.0; d];
    for &(si, r) in &train_rows {
        for (vv, (&v, m)) in var.iter_mut().zip(sets[si].row(r).iter().zip(mean.iter())) {
            *vv += (v - m) * (v - m);
        }
    }
    let std: Vec<f64> = var
        .iter()
        .map(|v| (v / train_rows.len() as f64).sqrt().max(1e-8))
        .collect();
    let standardize = |rows: &[(usize, usize)]| -> Tensor {
        let mut data = Vec::with_capacity(rows.len() * d);
        for &(si, r) in rows {
            for (j, &v) in sets[si].row(r).iter().enumerate() {
                data.push((v - mean[j]) / std[j]);
            }
        }
        Tensor::new(vec![rows.len(), d], data).expect("standardize shape")
    };
    let onehot = |rows: &[(usize, usize)]| -> Tensor {
        let mut data = vec![0.0; rows.len() * k];
        for (i, &(si, _)) in rows.iter().enumerate() {
            data[i * k + si] = 1.0;
        }
        Tensor::new(vec![rows.len(), k], data).expect("onehot shape")
    };
    let x_train = standardize(&train_rows);
    let y_train = onehot(&train_rows);
    let x_test = standardize(&test_rows);
    let y_test = onehot(&test_rows);

    let mut probe = match cfg.probe {
        ProbeKind::Linear => LayeredNet::init(&[d, k], &[Activation::Identity], cfg.seed)?,
        ProbeKind::OneHidden { hidden } => {
            LayeredNet::init(&[d, hidden, k], &[Activation::Relu, Activation::Identity], cfg.seed)?
        }
    };
    for _ in 0..cfg.steps {
        let mut tape = Tape::new();
        let fwd = probe.forward_with_taps(&mut tape, &x_train)?;
        let loss = task_loss(&mut tape, fwd.output, &y_train, TaskMode::SoftmaxCe)?;
        let grads = tape.backward(loss)?;
        for (l, layer) in probe.layers_mut().iter_mut().enumerate() {
            let gw = grads.wrt(fwd.weight_ids[l])?;
            for (w, g) in layer.weight.data_mut().iter_mut().zip(gw.iter()) {
                *w -= cfg.lr * g;
            }
            let gb = grads.wrt(fwd.bias_ids[l])?;
            for (b, g) in layer.bias.data_mut().iter_mut().zip(gb.iter()) {
                *b -= cfg.lr * g;
            }
        }
    }

    let logits = probe.infer(&x_test)?;
    let acc = accuracy(&logits, &y_test)?;
    let chance = 1.0 / k as f64;
    Ok(C2stOutcome {
        accuracy: acc,
        chance,
        distinct: acc > chance + cfg.chance_margin,
    })
}

// ---------------------------------------------------------------------------
// Embedding export and PCA

/// Top-2 principal components via power iteration with deflation.
///
/// Returns (components, explained_variances, total_variance); components are
/// rows of length d. The second component is zero when d == 1.
pub fn top2_principal_components(x: &Tensor) -> Result<(Vec<Vec<f64>>, Vec<f64>, f64)> {
    if !x.is_matrix() || x.rows() < 2 {
        return Err(Error::Config("pca needs a matrix with at least 2 rows".into()));
    }
    let (n, d) = (x.rows(), x.cols());
    let mut mean = vec![0.0; d];
    for i in 0..n {
        for (m, &v) in mean.iter_mut().zip(x.row(i).iter()) {
            *m += v;
        }
    }
    for m in mean.iter_mut() {
        *m /= n as f64;
    }
    // covariance (d x d)
    let mut cov = vec![0.0; d * d];
    for i in 0..n {
        let row = x.row(i);
        for a in 0..d {
            let va = row[a] - mean[a];
            for b in 0..d {
                cov[a * d + b] += va * (row[b] - mean[b]);
            }
        }
    }
    let denom = (n - 1) as f64;
    for v in cov.iter_mut() {
        *v /= denom;
    }
    let total_variance: f64 = (0..d).map(|i| cov[i * d + i]).sum();

    let power_iter = |cov: &[f64]| -> (Vec<f64>, f64) {
        // fixed pseudo-random start, deterministic across runs
        let mut v: Vec<f64> = (0..d)
            .map(|i| {
                let h = (i as u64).wrapping_mul(0x9e37_79b9_7f4a_7c15).wrapping_add(0x5eed);
                ((h >> 11) as f64 / (1u64 << 53) as f64) - 0.5 + 1e-3
            })
            .collect();
        let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        for x in v.iter_mut() {
            *x /= norm;
        }
        let mut eig = 0.0;
        for _ in 0..10_000 {
            let mut w = vec![0.0; d];
            for a in 0..d {
                let mut s = 0.0;
                for b in 0..d {
                    s += cov[a * d + b] * v[b];
                }
                w[a] = s;
            }
            let wnorm = w.iter().map(|x| x * x).sum::<f64>().sqrt();
            if wnorm < 1e-300 {
                return (v, 0.0); // null matrix: any direction, eigenvalue 0
            }
            for x in w.iter_mut() {
                *x /= wnorm;
            }
            let delta: f64 = w
                .iter()
                .zip(v.iter())
                .map(|(a, b)| (a - b).abs().min((a + b).abs()))
                .fold(0.0, f64::max);
            v = w;
            eig = wnorm;
            if delta < 1e-8 {
                break;
            }
        }
        (v, eig)
    };

    let (v1, e1) = power_iter(&cov);
    let (v2, e2) = if d >= 2 {
        let mut deflated = cov.clone();
        for a in 0..d {
            for b in 0..d {
                deflated[a * d + b] -= e1 * v1[a] * v1[b];
            }
        }
        power_iter(&deflated)
    } else {
        (vec![0.0; d], 0.0)
    };
    Ok((vec![v1, v2], vec![e1, e2], total_variance))
}

/// Write embeddings of the given sets to `path` (CSV: domain, label,
/// z_1..z_k) and a 2-D principal-component projection to the sibling file
/// `<path>.pca.csv` (CSV: domain, label, pc1, pc2).
pub fn export_embeddings(
    net: &LayeredNet,
    sets: &[(String, Tensor, Tensor)],
    path: &Path,
) -> Result<()> {
    if sets.is_empty() {
        return Err(Error::Config("nothing to export".into()));
    }
    let k = net.embedding_dim();
    let mut rows: Vec<(String, usize, Vec<f64>)> = Vec::new();
    for (name, x, y) in sets {
        let z = net.infer(x)?;
        for i in 0..z.rows() {
            let label = {
                let r = y.row(i);
                let mut best = 0;
                for (j, &v) in r.iter().enumerate() {
                    if v > r[best] {
                        best = j;
                    }
                }
                best
            };
            rows.push((name.clone(), label, z.row(i).to_vec()));
        }
    }

    let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
    write!(f, "domain,label")?;
    for j in 1..=k {
        write!(f, ",z{j}")?;
    }
    writeln!(f)?;
    for (name, label, z) in &rows {
        write!(f, "{name},{label}")?;
        for v in z {
            write!(f, ",{v}")?;
        }
        writeln!(f)?;
    }
    f.flush()?;

    let all = Tensor::from_rows(&rows.iter().map(|(_, _, z)| z.clone()).collect::<Vec<_>>())?;
    let (comps, _, _) = top2_principal_components(&all)?;
    // center before projecting
    let (n, d) = (all.rows(), all.cols());
    let mut mean = vec![0.0; d];
    for i in 0..n {
        for (m, &v) in mean.iter_mut().zip(all.row(i).iter()) {
            *m += v;
        }
    }
    for m in mean.iter_mut() {
        *m /= n as f64;
    }
    let pca_path = path.with_extension("pca.csv");
    let mut f = std::io::BufWriter::new(std::fs::File::create(&pca_path)?);
    writeln!(f, "domain,label,pc1,pc2")?;
    for (i, (name, label, z)) in rows.iter().enumerate() {
        let _ = i;
        let p1: f64 = z.iter().zip(comps[0].iter()).zip(mean.iter()).map(|((&zv, &c), &m)| (zv - m) * c).sum();
        let p2: f64 = z.iter().zip(comps[1].iter()).zip(mean.iter()).map(|((&zv, &c), &m)| (zv - m) * c).sum();
        writeln!(f, "{name},{label},{p1},{p2}")?;
    }
    f.flush()?;
    Ok(())
}
