//! Classifier bank: the shared visual-world head, per-domain bias heads, and
//! the linear domain classifier.
//!
//! The visual-world weights `w_vw` are the debiased classifier used alone at
//! inference. Each training domain i owns an elementwise scale `alpha_i` and
//! offset `delta_i`; its bias head is composed as
//! `w_i = alpha_i (*) w_vw + delta_i`. An intercept is handled by appending a
//! constant-1 feature column, so the classifier matrices carry one extra row.

use crate::error::{Error, Result};
use crate::tape::{Tape, ValueId};
use crate::tensor::Tensor;
use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Shared classifier plus per-domain multiplicative/additive bias terms.
///
/// All matrices are `(embedding_dim + 1) x label_dim`; the last row acts on
/// the appended intercept feature.
#[derive(Debug, Clone)]
pub struct BiasHeadBank {
    pub w_vw: Tensor,
    pub alphas: Vec<Tensor>,
    pub deltas: Vec<Tensor>,
    /// When false the intercept row of `w_i` is taken from `w_vw` unscaled
    /// (alpha's last row is masked out of the composition).
    pub alpha_scales_intercept: bool,
}

/// Linear domain classifier over detached embeddings.
#[derive(Debug, Clone)]
pub struct DomainClassifier {
    /// `(embedding_dim + 1) x n_domains`
    pub phi: Tensor,
}

/// Tape-registered handles for the bank's parameters.
pub struct BankOnTape {
    pub w_vw: ValueId,
    pub alphas: Vec<ValueId>,
    pub deltas: Vec<ValueId>,
    alpha_scales_intercept: bool,
}

impl BankOnTape {
    pub fn n_domains(&self) -> usize {
        self.alphas.len()
    }
}

impl BiasHeadBank {
    /// `alpha_i = 1`, `delta_i` random at `delta_scale` (small, to break
    /// symmetry), `w_vw` scaled-uniform like a dense layer.
    pub fn init(
        embedding_dim: usize,
        label_dim: usize,
        n_domains: usize,
        delta_scale: f64,
        seed: u64,
    ) -> Result<Self> {
        if embedding_dim == 0 || label_dim == 0 {
            return Err(Error::Config("head dims must be nonzero".into()));
        }
        let rows = embedding_dim + 1;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let bound = (6.0 / (rows + label_dim) as f64).sqrt();
        let w_data: Vec<f64> = (0..rows * label_dim).map(|_| rng.gen_range(-bound..bound)).collect();
        let w_vw = Tensor::new(vec![rows, label_dim], w_data)?;
        let mut alphas = Vec::with_capacity(n_domains);
        let mut deltas = Vec::with_capacity(n_domains);
        if delta_scale < 0.0 || !delta_scale.is_finite() {
            return Err(Error::Config(format!("delta scale must be >= 0, got {delta_scale}")));
        }
        for _ in 0..n_domains {
            alphas.push(Tensor::ones(vec![rows, label_dim]));
            let d: Vec<f64> = (0..rows * label_dim)
                .map(|_| if delta_scale == 0.0 { 0.0 } else { rng.gen_range(-delta_scale..delta_scale) })
                .collect();
            deltas.push(Tensor::new(vec![rows, label_dim], d)?);
        }
        Ok(BiasHeadBank { w_vw, alphas, deltas, alpha_scales_intercept: true })
    }

    pub fn n_domains(&self) -> usize {
        self.alphas.len()
    }

    pub fn embedding_dim(&self) -> usize {
        self.w_vw.rows() - 1
    }

    pub fn label_dim(&self) -> usize {
        self.w_vw.cols()
    }

    pub fn register(&self, tape: &mut Tape) -> Result<BankOnTape> {
        let w_vw = tape.leaf(self.w_vw.clone())?;
        let mut alphas = Vec::with_capacity(self.alphas.len());
        let mut deltas = Vec::with_capacity(self.deltas.len());
        for a in &self.alphas {
            alphas.push(tape.leaf(a.clone())?);
        }
        for d in &self.deltas {
            deltas.push(tape.leaf(d.clone())?);
        }
        Ok(BankOnTape {
            w_vw,
            alphas,
            deltas,
            alpha_scales_intercept: self.alpha_scales_intercept,
        })
    }

    /// Composed bias-head weights `w_i` as a plain tensor (inference path).
    pub fn composed(&self, domain: usize) -> Result<Tensor> {
        if domain >= self.n_domains() {
            return Err(Error::OutOfRange { what: "domain", index: domain, len: self.n_domains() });
        }
        let a = &self.alphas[domain];
        let d = &self.deltas[domain];
        let rows = self.w_vw.rows();
        let cols = self.w_vw.cols();
        let mut out = Vec::with_capacity(rows * cols);
        for r in 0..rows {
            let scale_row = self.alpha_scales_intercept || r + 1 < rows;
            for c in 0..cols {
                let av = if scale_row { a.at(r, c) } else { 1.0 };
                out.push(av * self.w_vw.at(r, c) + d.at(r, c));
            }
        }
        Tensor::new(vec![rows, cols], out)
    }
}

impl DomainClassifier {
    pub fn init(embedding_dim: usize, n_domains: usize, seed: u64) -> Result<Self> {
        if embedding_dim == 0 || n_domains == 0 {
            return Err(Error::Config("domain classifier dims must be nonzero".into()));
        }
        let rows = embedding_dim + 1;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let bound = (6.0 / (rows + n_domains) as f64).sqrt();
        let data: Vec<f64> = (0..rows * n_domains).map(|_| rng.gen_range(-bound..bound)).collect();
        Ok(DomainClassifier { phi: Tensor::new(vec![rows, n_domains], data)? })
    }

    pub fn n_domains(&self) -> usize {
        self.phi.cols()
    }

    pub fn register(&self, tape: &mut Tape) -> Result<ValueId> {
        tape.leaf(self.phi.clone())
    }
}

/// `[z, 1]`: append the constant intercept column.
pub fn with_intercept(tape: &mut Tape, z: ValueId) -> Result<ValueId> {
    let rows = tape.value(z).rows();
    let ones = tape.leaf(Tensor::ones(vec![rows, 1]))?;
    tape.concat_cols(z, ones)
}

fn check_embedding(tape: &Tape, z: ValueId, weight_rows: usize, op: &'static str) -> Result<()> {
    let t = tape.value(z);
    if !t.is_matrix() || t.cols() + 1 != weight_rows {
        return Err(Error::ShapeMismatch {
            op,
            detail: format!("embedding {:?} vs classifier rows {}", t.shape(), weight_rows),
        });
    }
    Ok(())
}

/// Visual-world logits `[z, 1] * w_vw`; differentiable w.r.t. both.
pub fn vw_logits(tape: &mut Tape, bank: &BankOnTape, z: ValueId) -> Result<ValueId> {
    check_embedding(tape, z, tape.value(bank.w_vw).rows(), "vw-logits")?;
    let zi = with_intercept(tape, z)?;
    tape.matmul(zi, bank.w_vw)
}

/// Bias-head logits `[z, 1] * (alpha_i (*) w_vw + delta_i)` for domain `i`;
/// differentiable w.r.t. z, w_vw, alpha_i and delta_i.
pub fn bias_logits(tape: &mut Tape, bank: &BankOnTape, domain: usize, z: ValueId) -> Result<ValueId> {
    if domain >= bank.alphas.len() {
        return Err(Error::OutOfRange { what: "domain", index: domain, len: bank.alphas.len() });
    }
    check_embedding(tape, z, tape.value(bank.w_vw).rows(), "bias-logits")?;
    let alpha = bank.alphas[domain];
    let effective_alpha = if bank.alpha_scales_intercept {
        alpha
    } else {
        // Mask alpha's intercept row to 1: alpha*M + (1-M), with M constant.
        let shape = tape.value(alpha).shape().to_vec();
        let (rows, cols) = (shape[0], shape[1]);
        let mut mask = Tensor::ones(vec![rows, cols]);
        let mut inv = Tensor::zeros(vec![rows, cols]);
        for c in 0..cols {
            mask.data_mut()[(rows - 1) * cols + c] = 0.0;
            inv.data_mut()[(rows - 1) * cols + c] = 1.0;
        }
        let m = tape.leaf(mask)?;
        let mi = tape.leaf(inv)?;
        let masked = tape.mul(alpha, m)?;
        tape.add(masked, mi)?
    };
    let scaled = tape.mul(effective_alpha, bank.w_vw)?;
    let w_i = tape.add(scaled, bank.deltas[domain])?;
    let zi = with_intercept(tape, z)?;
    tape.matmul(zi, w_i)
}

/// Domain-classifier logits `[z, 1] * phi`.
///
/// `z` must be a stop-gradient leaf (a fresh tape leaf holding the embedding
/// values): losses on these logits can then only reach `phi`, and the
/// embedding gradient is read out as data via `grad_wrt_activation` on that
/// leaf. The feature extractor is structurally unreachable.
pub fn domain_logits(tape: &mut Tape, phi: ValueId, z_detached: ValueId) -> Result<ValueId> {
    check_embedding(tape, z_detached, tape.value(phi).rows(), "domain-logits")?;
    let zi = with_intercept(tape, z_detached)?;
    tape.matmul(zi, phi)
}
