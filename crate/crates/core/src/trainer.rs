//! Training strategies.
//!
//! The full method is `mct`: bias-regularized learning plus multi-layer
//! cross-gradient augmentation. Per step, after the usual forward pass, one
//! tap is sampled from the configured tap set and the activation `Q` there is
//! perturbed along two gradient directions read off the tape as data:
//!
//! - `q_bar   = Q + eps * grad_Q L_domain` feeds the suffix of the network and
//!   only the visual-world head, making the shared classifier hold up on
//!   domain-shifted points;
//! - `q_tilde = Q + eps * grad_Q L_label` feeds the suffix and only the domain
//!   classifier, keeping the domain classifier insensitive to label content.
//!
//! The update rules are plain SGD, one line per parameter group:
//!
//! - `theta  -= eta * grad(C1 L_vw + C2 L_bias + C3 L_aug)`
//! - `w_vw   -= eta * grad(C1 L_vw + C2 L_bias + C3 L_aug + ||w_vw||^2)`
//! - `delta_i-= eta * grad(C2 L_bias_i + lambda ||delta_i||^2)`
//! - `alpha_i-= eta * grad(C2 L_bias_i + gamma ||alpha_i - 1||^2)`
//! - `phi    -= eta * grad(L_domain + L_domain_aug)`
//!
//! One combined backward pass serves the first four groups (their objectives
//! differ only in terms whose gradients vanish for the other groups); the
//! domain classifier gets its own backward over losses built on detached
//! embeddings, so its gradients cannot touch the feature extractor.
//!
//! Baselines: `erm` (task loss only), `mixup` (cross-domain convex mixing),
//! `crossgrad` (mct with the tap set forced to the input), `dann` (gradient
//! reversal instead of stop-gradient), `e2e-svm` (hinge objective, additive
//! bias), and `e2e-ce` (bias-regularized objective without augmentation).

use crate::datagen::{seed_stream, DomainDataset, Split};
use crate::error::{Error, Result};
use crate::heads::{domain_logits, vw_logits, BankOnTape, BiasHeadBank, DomainClassifier};
use crate::losses::{
    bias_reg_objective, svm_objective, task_loss, DomainTerm, DomainWeighting, LossWeights, TaskMode,
};
use crate::metrics::{accuracy, macro_auc};
use crate::network::{LayeredNet, NetForward, TapSet, INPUT_TAP};
use crate::tape::{Tape, ValueId};
use crate::tensor::Tensor;
use rand::seq::SliceRandom;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Beta, Distribution};
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Strategy {
    Mct,
    Erm,
    Mixup,
    Crossgrad,
    Dann,
    E2eSvm,
    E2eCe,
}

impl Strategy {
    pub fn name(&self) -> &'static str {
        match self {
            Strategy::Mct => "mct",
            Strategy::Erm => "erm",
            Strategy::Mixup => "mixup",
            Strategy::Crossgrad => "crossgrad",
            Strategy::Dann => "dann",
            Strategy::E2eSvm => "e2e-svm",
            Strategy::E2eCe => "e2e-ce",
        }
    }

    /// Strategies that model per-domain bias heads; they need >= 2 domains.
    pub fn models_bias(&self) -> bool {
        matches!(self, Strategy::Mct | Strategy::Crossgrad | Strategy::E2eSvm | Strategy::E2eCe)
    }
}

impl std::str::FromStr for Strategy {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        Ok(match s {
            "mct" => Strategy::Mct,
            "erm" => Strategy::Erm,
            "mixup" => Strategy::Mixup,
            "crossgrad" => Strategy::Crossgrad,
            "dann" => Strategy::Dann,
            "e2e-svm" => Strategy::E2eSvm,
            "e2e-ce" => Strategy::E2eCe,
            other => return Err(Error::Config(format!("unknown strategy: {other}"))),
        })
    }
}

/// Which taps the augmentation may perturb.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum TapSelector {
    Preset(TapPreset),
    Explicit(Vec<String>),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum TapPreset {
    /// The input and the final layer output.
    InputAndLast,
    /// Every tap except the final layer output.
    AllButLast,
}

impl Default for TapSelector {
    fn default() -> Self {
        TapSelector::Preset(TapPreset::InputAndLast)
    }
}

impl TapSelector {
    pub fn resolve(&self, net: &LayeredNet) -> Result<TapSet> {
        match self {
            TapSelector::Preset(TapPreset::InputAndLast) => Ok(TapSet::input_and_last(net)),
            TapSelector::Preset(TapPreset::AllButLast) => Ok(TapSet::all_but_last(net)),
            TapSelector::Explicit(names) => TapSet::new(names.clone(), net),
        }
    }
}

impl std::str::FromStr for TapSelector {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        Ok(match s {
            "input-and-last" => TapSelector::Preset(TapPreset::InputAndLast),
            "all-but-last" => TapSelector::Preset(TapPreset::AllButLast),
            list => TapSelector::Explicit(list.split(',').map(|t| t.trim().to_string()).collect()),
        })
    }
}

/// Everything one training run needs to know.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrainConfig {
    pub strategy: Strategy,
    /// Perturbation step size.
    pub epsilon: f64,
    /// Learning rate.
    pub eta: f64,
    /// Number of training steps.
    pub steps: usize,
    pub batch_size: usize,
    pub weights: LossWeights,
    /// Taps eligible for augmentation.
    pub tap_set: TapSelector,
    pub seed: u64,
    /// Beta(alpha, alpha) parameter for mixup.
    pub mixup_alpha: f64,
    /// Gradient-reversal multiplier for dann.
    pub dann_weight: f64,
    pub task_mode: TaskMode,
    pub domain_weighting: DomainWeighting,
    pub alpha_scales_intercept: bool,
    /// Init scale for the delta offsets.
    pub delta_init_scale: f64,
    /// Validation cadence in steps; 0 disables periodic eval.
    pub eval_every: usize,
    /// Scale epsilon by the RMS of the tap activation (off by default; the
    /// flat step size is the documented behavior).
    pub per_tap_eps_scale: bool,
    /// Hidden layer widths; the last entry is the embedding dim.
    pub hidden_dims: Vec<usize>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            strategy: Strategy::Mct,
            epsilon: 1.0,
            eta: 0.05,
            steps: 5000,
            batch_size: 64,
            weights: LossWeights::default(),
            tap_set: TapSelector::default(),
            seed: 0,
            mixup_alpha: 0.2,
            dann_weight: 0.1,
            task_mode: TaskMode::SoftmaxCe,
            domain_weighting: DomainWeighting::Equal,
            alpha_scales_intercept: true,
            delta_init_scale: 1e-2,
            eval_every: 0,
            per_tap_eps_scale: false,
            hidden_dims: vec![64, 64, 32],
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.epsilon >= 0.0 && self.epsilon.is_finite()) {
            return Err(Error::Config(format!("epsilon must be >= 0, got {}", self.epsilon)));
        }
        // eta = 0 is allowed: a zero-rate run is the documented way to probe
        // that a step leaves parameters untouched
        if !(self.eta >= 0.0 && self.eta.is_finite()) {
            return Err(Error::Config(format!("eta must be >= 0, got {}", self.eta)));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be >= 1".into()));
        }
        if self.hidden_dims.is_empty() {
            return Err(Error::Config("hidden_dims must be nonempty".into()));
        }
        if self.strategy == Strategy::Mixup && !(self.mixup_alpha > 0.0) {
            return Err(Error::Config(format!("mixup_alpha must be > 0, got {}", self.mixup_alpha)));
        }
        if self.dann_weight < 0.0 {
            return Err(Error::Config(format!("dann_weight must be >= 0, got {}", self.dann_weight)));
        }
        self.weights.validate()
    }
}

/// One mixed-domain mini-batch.
#[derive(Debug, Clone)]
pub struct DomainBatch {
    pub x: Tensor,
    pub y: Tensor,
    /// Per-row training-domain index (0-based, local to the training set).
    pub domains: Vec<usize>,
}

impl DomainBatch {
    pub fn new(x: Tensor, y: Tensor, domains: Vec<usize>, n_domains: usize) -> Result<Self> {
        if x.rows() != y.rows() || x.rows() != domains.len() {
            return Err(Error::ShapeMismatch {
                op: "domain-batch",
                detail: format!("{} feature rows, {} label rows, {} domain tags", x.rows(), y.rows(), domains.len()),
            });
        }
        if let Some(&bad) = domains.iter().find(|&&d| d >= n_domains) {
            return Err(Error::OutOfRange { what: "domain tag", index: bad, len: n_domains });
        }
        Ok(DomainBatch { x, y, domains })
    }

    pub fn len(&self) -> usize {
        self.domains.len()
    }

    pub fn is_empty(&self) -> bool {
        self.domains.is_empty()
    }

    /// One-hot domain matrix (n x n_domains) for the domain classifier.
    pub fn domain_onehot(&self, n_domains: usize) -> Tensor {
        let n = self.domains.len();
        let mut data = vec![0.0; n * n_domains];
        for (i, &d) in self.domains.iter().enumerate() {
            data[i * n_domains + d] = 1.0;
        }
        Tensor::new(vec![n, n_domains], data).expect("onehot shape")
    }
}

/// The two perturbed activations generated by the MCT function.
#[derive(Debug, Clone)]
pub struct AugmentedPair {
    /// Domain-guided perturbation `Q + eps * grad_Q L_d`.
    pub q_bar: Tensor,
    /// Label-guided perturbation `Q + eps * grad_Q L_y`.
    pub q_tilde: Tensor,
    pub tap: String,
    /// False when `Q` was not an ancestor of the respective loss (the
    /// perturbation is then zero).
    pub domain_connected: bool,
    pub label_connected: bool,
}

/// Generate the augmentation pair for tap activation `q`.
///
/// Both outputs are plain tensors: perturbation directions are data, no
/// second-order gradients flow through them.
pub fn mct_perturb(
    tape: &Tape,
    l_y: ValueId,
    l_d: ValueId,
    q: ValueId,
    tap: &str,
    eps: f64,
) -> Result<AugmentedPair> {
    let gd = tape.grad_wrt_activation(l_d, q)?;
    let gy = tape.grad_wrt_activation(l_y, q)?;
    let qv = tape.value(q);
    Ok(AugmentedPair {
        q_bar: qv.axpy(eps, &gd.grad)?,
        q_tilde: qv.axpy(eps, &gy.grad)?,
        tap: tap.to_string(),
        domain_connected: gd.connected,
        label_connected: gy.connected,
    })
}

/// Loss components of one training step. Components a strategy does not
/// compute stay 0. `objective` is the combined scalar behind the main
/// parameter update and equals the weighted sum of its components.
#[derive(Debug, Clone, Copy, Default, Serialize, Deserialize)]
pub struct StepMetrics {
    pub step: usize,
    pub l_vw: f64,
    pub l_bias: f64,
    pub l_aug: f64,
    pub r_wvw: f64,
    pub r_delta: f64,
    pub r_alpha: f64,
    pub l_domain: f64,
    pub objective: f64,
    /// Domains absent from this step's batch (their C2 term was skipped).
    pub skipped_domains: usize,
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct HistoryRow {
    pub metrics: StepMetrics,
    /// Validation score at this step, when evaluated.
    pub val_score: Option<f64>,
}

/// Final parameters of a run.
#[derive(Debug, Clone)]
pub struct TrainedModel {
    pub net: LayeredNet,
    pub bank: BiasHeadBank,
    pub dc: DomainClassifier,
    pub task_mode: TaskMode,
    /// Names of the training domains, in local index order.
    pub domain_names: Vec<String>,
}

impl TrainedModel {
    /// Visual-world logits for a feature batch.
    pub fn predict_vw(&self, x: &Tensor) -> Result<Tensor> {
        let z = self.net.infer(x)?;
        linear_with_intercept(&z, &self.bank.w_vw)
    }

    /// Bias-head logits for a feature batch under training domain `i`.
    pub fn predict_bias(&self, domain: usize, x: &Tensor) -> Result<Tensor> {
        let z = self.net.infer(x)?;
        let w = self.bank.composed(domain)?;
        linear_with_intercept(&z, &w)
    }

    pub fn embed(&self, x: &Tensor) -> Result<Tensor> {
        self.net.infer(x)
    }

    /// Task score of given logits: accuracy (softmax mode) or macro AUC
    /// (multilabel mode).
    pub fn score_logits(&self, logits: &Tensor, y: &Tensor) -> Result<f64> {
        match self.task_mode {
            TaskMode::SoftmaxCe => accuracy(logits, y),
            TaskMode::MultilabelBce => macro_auc(logits, y),
        }
    }

    /// Score of the visual-world head on a feature/label batch.
    pub fn score_vw(&self, x: &Tensor, y: &Tensor) -> Result<f64> {
        let logits = self.predict_vw(x)?;
        self.score_logits(&logits, y)
    }
}

/// `[z, 1] * w` without a tape.
pub fn linear_with_intercept(z: &Tensor, w: &Tensor) -> Result<Tensor> {
    if !z.is_matrix() || z.cols() + 1 != w.rows() {
        return Err(Error::ShapeMismatch {
            op: "linear-with-intercept",
            detail: format!("{:?} vs weights {:?}", z.shape(), w.shape()),
        });
    }
    let (n, d, l) = (z.rows(), z.cols(), w.cols());
    let mut out = vec![0.0; n * l];
    for i in 0..n {
        for c in 0..l {
            let mut s = 0.0;
            for j in 0..d {
                s += z.at(i, j) * w.at(j, c);
            }
            out[i * l + c] = s + w.at(d, c);
        }
    }
    Tensor::new(vec![n, l], out)
}

/// Evaluate the domain loss as a function of the activation at `tap`
/// (plain arithmetic; used for the ascent checks on `q_bar`).
pub fn domain_loss_at_tap(
    net: &LayeredNet,
    dc: &DomainClassifier,
    tap: &str,
    q: &Tensor,
    domains_onehot: &Tensor,
) -> Result<f64> {
    let z = forward_suffix_plain(net, tap, q)?;
    let logits = linear_with_intercept(&z, &dc.phi)?;
    let mut tape = Tape::new();
    let l = tape.leaf(logits)?;
    let loss = task_loss(&mut tape, l, domains_onehot, TaskMode::SoftmaxCe)?;
    Ok(tape.value(loss).item())
}

/// Evaluate the visual-world label loss as a function of the activation at
/// `tap` (plain arithmetic; used for the ascent checks on `q_tilde`).
pub fn label_loss_at_tap(
    net: &LayeredNet,
    bank: &BiasHeadBank,
    tap: &str,
    q: &Tensor,
    y: &Tensor,
    mode: TaskMode,
) -> Result<f64> {
    let z = forward_suffix_plain(net, tap, q)?;
    let logits = linear_with_intercept(&z, &bank.w_vw)?;
    let mut tape = Tape::new();
    let l = tape.leaf(logits)?;
    let loss = task_loss(&mut tape, l, y, mode)?;
    Ok(tape.value(loss).item())
}

/// Run the network suffix after `tap` without recording a tape.
pub fn forward_suffix_plain(net: &LayeredNet, tap: &str, q: &Tensor) -> Result<Tensor> {
    let mut tape = Tape::new();
    let zeros = Tensor::zeros(vec![1, net.input_dim()]);
    let fwd = net.forward_with_taps(&mut tape, &zeros)?;
    let qid = tape.leaf(q.clone())?;
    let z = net.forward_from_tap(&mut tape, &fwd, tap, qid)?;
    Ok(tape.value(z).clone())
}

/// Model parameters plus the RNG streams of a run.
pub struct TrainerState {
    pub net: LayeredNet,
    pub bank: BiasHeadBank,
    pub dc: DomainClassifier,
    tap_set: TapSet,
    batch_rng: ChaCha8Rng,
    tap_rng: ChaCha8Rng,
    mixup_rng: ChaCha8Rng,
}

#[derive(Debug)]
pub struct TrainOutcome {
    pub model: TrainedModel,
    pub history: Vec<HistoryRow>,
    /// Validation score after the last step (None when no val rows exist).
    pub final_val: Option<f64>,
}

struct TrainView {
    x: Tensor,
    y: Tensor,
}

fn train_views(datasets: &[&DomainDataset]) -> Result<Vec<TrainView>> {
    let d = datasets[0].n_features();
    let l = datasets[0].n_labels();
    let mut views = Vec::with_capacity(datasets.len());
    for ds in datasets {
        if ds.n_features() != d || ds.n_labels() != l {
            return Err(Error::ShapeMismatch {
                op: "train",
                detail: format!(
                    "domain {} has {}x{} data, expected {}x{}",
                    ds.name,
                    ds.n_features(),
                    ds.n_labels(),
                    d,
                    l
                ),
            });
        }
        let x = ds.split_x(Split::Train);
        let y = ds.split_y(Split::Train);
        if x.rows() == 0 {
            return Err(Error::Config(format!("domain {} has no training rows", ds.name)));
        }
        views.push(TrainView { x, y });
    }
    Ok(views)
}

/// Stratified uniform-with-replacement batch: every training domain appears
/// whenever `batch_size >= n_domains`; leftover slots go to randomly chosen
/// domains.
fn sample_batch(views: &[TrainView], batch_size: usize, rng: &mut ChaCha8Rng) -> DomainBatch {
    let n_domains = views.len();
    let base = batch_size / n_domains;
    let rem = batch_size % n_domains;
    let mut counts = vec![base; n_domains];
    if rem > 0 {
        let mut order: Vec<usize> = (0..n_domains).collect();
        order.shuffle(rng);
        for &d in order.iter().take(rem) {
            counts[d] += 1;
        }
    }
    let d = views[0].x.cols();
    let l = views[0].y.cols();
    let mut x = Vec::with_capacity(batch_size * d);
    let mut y = Vec::with_capacity(batch_size * l);
    let mut domains = Vec::with_capacity(batch_size);
    for (dom, view) in views.iter().enumerate() {
        let n = view.x.rows();
        for _ in 0..counts[dom] {
            let r = rng.gen_range(0..n);
            x.extend_from_slice(view.x.row(r));
            y.extend_from_slice(view.y.row(r));
            domains.push(dom);
        }
    }
    DomainBatch {
        x: Tensor::new(vec![domains.len(), d], x).expect("batch shape"),
        y: Tensor::new(vec![domains.len(), l], y).expect("batch shape"),
        domains,
    }
}

fn rows_per_domain(domains: &[usize], n_domains: usize) -> Vec<Vec<usize>> {
    let mut groups = vec![Vec::new(); n_domains];
    for (i, &d) in domains.iter().enumerate() {
        groups[d].push(i);
    }
    groups
}

fn select_label_rows(y: &Tensor, rows: &[usize]) -> Tensor {
    let l = y.cols();
    let mut data = Vec::with_capacity(rows.len() * l);
    for &r in rows {
        data.extend_from_slice(y.row(r));
    }
    Tensor::new(vec![rows.len(), l], data).expect("label rows")
}

fn apply_sgd(param: &mut Tensor, grad: &[f64], eta: f64) {
    for (p, g) in param.data_mut().iter_mut().zip(grad.iter()) {
        *p -= eta * g;
    }
}

fn update_net(net: &mut LayeredNet, fwd: &NetForward, grads: &crate::tape::Gradients, eta: f64) -> Result<()> {
    for (l, layer) in net.layers_mut().iter_mut().enumerate() {
        apply_sgd(&mut layer.weight, grads.wrt(fwd.weight_ids[l])?, eta);
        apply_sgd(&mut layer.bias, grads.wrt(fwd.bias_ids[l])?, eta);
    }
    Ok(())
}

/// Detached copy of a tape value, registered as a fresh leaf.
fn detach(tape: &mut Tape, id: ValueId) -> Result<ValueId> {
    let v = tape.value(id).clone();
    tape.leaf(v)
}

/// Domain cross-entropy on a detached embedding leaf. Returns (loss, leaf).
fn domain_loss_detached(
    tape: &mut Tape,
    phi: ValueId,
    z: ValueId,
    d_onehot: &Tensor,
) -> Result<(ValueId, ValueId)> {
    let zd = detach(tape, z)?;
    let logits = domain_logits(tape, phi, zd)?;
    let loss = task_loss(tape, logits, d_onehot, TaskMode::SoftmaxCe)?;
    Ok((loss, zd))
}

/// Bridge scalar whose gradient w.r.t. any ancestor of `z` equals the
/// gradient of the detached-head domain loss through the chain rule:
/// `s = sum(z * const(dL/dz_detached))`.
fn domain_loss_bridge(tape: &mut Tape, z: ValueId, l_domain: ValueId, zd: ValueId) -> Result<ValueId> {
    let gz = tape.grad_wrt_activation(l_domain, zd)?;
    let g = tape.leaf(gz.grad)?;
    let prod = tape.mul(z, g)?;
    tape.sum(prod)
}

/// Domain-weighted average of per-domain vw losses on the given embedding
/// node (used for the main and the augmented embeddings).
fn weighted_vw_loss(
    tape: &mut Tape,
    bank: &BankOnTape,
    z: ValueId,
    groups: &[(usize, Vec<usize>)],
    y: &Tensor,
    mode: TaskMode,
    weighting: DomainWeighting,
) -> Result<ValueId> {
    let sizes: Vec<usize> = groups.iter().map(|(_, rows)| rows.len()).collect();
    let total: usize = sizes.iter().sum();
    let mut acc: Option<ValueId> = None;
    for (gi, (_, rows)) in groups.iter().enumerate() {
        let w = match weighting {
            DomainWeighting::Equal => 1.0 / groups.len() as f64,
            DomainWeighting::Proportional => sizes[gi] as f64 / total as f64,
        };
        let zi = tape.select_rows(z, rows)?;
        let yi = select_label_rows(y, rows);
        let logits = vw_logits(tape, bank, zi)?;
        let li = task_loss(tape, logits, &yi, mode)?;
        let lw = tape.scale(li, w)?;
        acc = Some(match acc {
            None => lw,
            Some(a) => tape.add(a, lw)?,
        });
    }
    Ok(acc.expect("nonempty groups"))
}

impl TrainerState {
    /// Initialize all parameter groups from per-group seed streams; two
    /// strategies with the same seed share identical initial parameters.
    pub fn init(cfg: &TrainConfig, input_dim: usize, label_dim: usize, n_domains: usize) -> Result<Self> {
        let net = LayeredNet::init_mlp(
            input_dim,
            &cfg.hidden_dims,
            crate::datagen::derive_seed(cfg.seed, "init-net"),
        )?;
        let emb = net.embedding_dim();
        let mut bank = BiasHeadBank::init(
            emb,
            label_dim,
            n_domains,
            cfg.delta_init_scale,
            crate::datagen::derive_seed(cfg.seed, "init-heads"),
        )?;
        bank.alpha_scales_intercept = cfg.alpha_scales_intercept;
        let dc = DomainClassifier::init(emb, n_domains, crate::datagen::derive_seed(cfg.seed, "init-dc"))?;
        let tap_set = if cfg.strategy == Strategy::Crossgrad {
            // crossgrad is the single-layer special case: input tap only
            TapSet::new(vec![INPUT_TAP.to_string()], &net)?
        } else {
            cfg.tap_set.resolve(&net)?
        };
        Ok(TrainerState {
            net,
            bank,
            dc,
            tap_set,
            batch_rng: seed_stream(cfg.seed, "batch"),
            tap_rng: seed_stream(cfg.seed, "tap"),
            mixup_rng: seed_stream(cfg.seed, "mixup"),
        })
    }

    pub fn tap_set(&self) -> &TapSet {
        &self.tap_set
    }

    /// One step of the bias-regularized strategies (mct / crossgrad / e2e-ce;
    /// mct and crossgrad set `augment`).
    fn bias_step(&mut self, batch: &DomainBatch, cfg: &TrainConfig, augment: bool, step: usize) -> Result<StepMetrics> {
        let n_domains = self.bank.n_domains();
        let mut tape = Tape::new();
        let fwd = self.net.forward_with_taps(&mut tape, &batch.x)?;
        let bank_reg = self.bank.register(&mut tape)?;
        let phi = self.dc.register(&mut tape)?;

        let groups: Vec<(usize, Vec<usize>)> = rows_per_domain(&batch.domains, n_domains)
            .into_iter()
            .enumerate()
            .filter(|(_, rows)| !rows.is_empty())
            .collect();
        let skipped = n_domains - groups.len();

        let mut label_rows: Vec<Tensor> = Vec::with_capacity(groups.len());
        let mut z_rows: Vec<ValueId> = Vec::with_capacity(groups.len());
        for (_, rows) in &groups {
            z_rows.push(tape.select_rows(fwd.output, rows)?);
            label_rows.push(select_label_rows(&batch.y, rows));
        }
        let terms: Vec<DomainTerm> = groups
            .iter()
            .zip(z_rows.iter().zip(label_rows.iter()))
            .map(|((dom, _), (&z, y))| DomainTerm { domain: *dom, z, y })
            .collect();
        let parts = bias_reg_objective(&mut tape, &bank_reg, &terms, &cfg.weights, cfg.task_mode, cfg.domain_weighting)?;

        let d_onehot = batch.domain_onehot(n_domains);
        let (l_domain, zd) = domain_loss_detached(&mut tape, phi, fwd.output, &d_onehot)?;

        let mut phi_objective = l_domain;
        let mut l_aug_value = 0.0;
        let mut main_objective = parts.total;
        if augment {
            // sample a tap and build the perturbation pair
            let tap_names = self.tap_set.names();
            let tap = tap_names[self.tap_rng.gen_range(0..tap_names.len())].clone();
            let q = fwd.taps.get(&tap)?;
            let eps = if cfg.per_tap_eps_scale {
                cfg.epsilon * tape.value(q).rms()
            } else {
                cfg.epsilon
            };
            // the perturbation formulas are per sample; batch losses are
            // means, so scale them back up to give each row its own
            // full-strength gradient regardless of batch size
            let n_rows = batch.len() as f64;
            let bridge = domain_loss_bridge(&mut tape, fwd.output, l_domain, zd)?;
            let bridge_sum = tape.scale(bridge, n_rows)?;
            let vw_logits_all = vw_logits(&mut tape, &bank_reg, fwd.output)?;
            let l_y_mean = task_loss(&mut tape, vw_logits_all, &batch.y, cfg.task_mode)?;
            let l_y_sum = tape.scale(l_y_mean, n_rows)?;
            let pair = mct_perturb(&tape, l_y_sum, bridge_sum, q, &tap, eps)?;

            // augmented embedding via the suffix, fed only to the vw head
            let q_bar = tape.leaf(pair.q_bar)?;
            let z_bar = self.net.forward_from_tap(&mut tape, &fwd, &tap, q_bar)?;
            let zbar_groups: Vec<(usize, Vec<usize>)> = groups.clone();
            let l_aug = weighted_vw_loss(&mut tape, &bank_reg, z_bar, &zbar_groups, &batch.y, cfg.task_mode, cfg.domain_weighting)?;
            l_aug_value = tape.value(l_aug).item();
            let c3term = tape.scale(l_aug, cfg.weights.c3)?;
            main_objective = tape.add(main_objective, c3term)?;

            // label-perturbed embedding trains only the domain classifier
            let q_tilde = tape.leaf(pair.q_tilde)?;
            let z_tilde = self.net.forward_from_tap(&mut tape, &fwd, &tap, q_tilde)?;
            let (l_domain_aug, _) = domain_loss_detached(&mut tape, phi, z_tilde, &d_onehot)?;
            phi_objective = tape.add(l_domain, l_domain_aug)?;
        }

        let metrics = StepMetrics {
            step,
            l_vw: tape.value(parts.l_vw).item(),
            l_bias: tape.value(parts.l_bias).item(),
            l_aug: l_aug_value,
            r_wvw: tape.value(parts.r_wvw).item(),
            r_delta: tape.value(parts.r_delta).item(),
            r_alpha: tape.value(parts.r_alpha).item(),
            l_domain: tape.value(l_domain).item(),
            objective: tape.value(main_objective).item(),
            skipped_domains: skipped,
        };

        let g_main = tape.backward(main_objective)?;
        let g_phi = tape.backward(phi_objective)?;

        update_net(&mut self.net, &fwd, &g_main, cfg.eta)?;
        apply_sgd(&mut self.bank.w_vw, g_main.wrt(bank_reg.w_vw)?, cfg.eta);
        for i in 0..n_domains {
            apply_sgd(&mut self.bank.deltas[i], g_main.wrt(bank_reg.deltas[i])?, cfg.eta);
            apply_sgd(&mut self.bank.alphas[i], g_main.wrt(bank_reg.alphas[i])?, cfg.eta);
        }
        apply_sgd(&mut self.dc.phi, g_phi.wrt(phi)?, cfg.eta);
        Ok(metrics)
    }

    /// One hinge-objective step (additive bias only; alpha stays 1). The
    /// domain classifier still trains on detached embeddings.
    fn svm_step(&mut self, batch: &DomainBatch, cfg: &TrainConfig, step: usize) -> Result<StepMetrics> {
        let n_domains = self.bank.n_domains();
        let mut tape = Tape::new();
        let fwd = self.net.forward_with_taps(&mut tape, &batch.x)?;
        let bank_reg = self.bank.register(&mut tape)?;
        let phi = self.dc.register(&mut tape)?;

        let groups: Vec<(usize, Vec<usize>)> = rows_per_domain(&batch.domains, n_domains)
            .into_iter()
            .enumerate()
            .filter(|(_, rows)| !rows.is_empty())
            .collect();
        let skipped = n_domains - groups.len();

        // {0,1} labels to {-1,+1}
        let mut label_rows: Vec<Tensor> = Vec::with_capacity(groups.len());
        let mut z_rows: Vec<ValueId> = Vec::with_capacity(groups.len());
        for (_, rows) in &groups {
            z_rows.push(tape.select_rows(fwd.output, rows)?);
            let mut y = select_label_rows(&batch.y, rows);
            for v in y.data_mut() {
                *v = 2.0 * *v - 1.0;
            }
            label_rows.push(y);
        }
        let terms: Vec<DomainTerm> = groups
            .iter()
            .zip(z_rows.iter().zip(label_rows.iter()))
            .map(|((dom, _), (&z, y))| DomainTerm { domain: *dom, z, y })
            .collect();
        let parts = svm_objective(&mut tape, &bank_reg, &terms, &cfg.weights)?;

        let d_onehot = batch.domain_onehot(n_domains);
        let (l_domain, _) = domain_loss_detached(&mut tape, phi, fwd.output, &d_onehot)?;

        let metrics = StepMetrics {
            step,
            l_vw: tape.value(parts.l_vw).item(),
            l_bias: tape.value(parts.l_bias).item(),
            l_aug: 0.0,
            r_wvw: tape.value(parts.r_wvw).item(),
            r_delta: tape.value(parts.r_delta).item(),
            r_alpha: 0.0,
            l_domain: tape.value(l_domain).item(),
            objective: tape.value(parts.total).item(),
            skipped_domains: skipped,
        };

        let g_main = tape.backward(parts.total)?;
        let g_phi = tape.backward(l_domain)?;
        update_net(&mut self.net, &fwd, &g_main, cfg.eta)?;
        apply_sgd(&mut self.bank.w_vw, g_main.wrt(bank_reg.w_vw)?, cfg.eta);
        for i in 0..n_domains {
            apply_sgd(&mut self.bank.deltas[i], g_main.wrt(bank_reg.deltas[i])?, cfg.eta);
            // alpha frozen: the hinge objective predates multiplicative bias
        }
        apply_sgd(&mut self.dc.phi, g_phi.wrt(phi)?, cfg.eta);
        Ok(metrics)
    }

    /// Plain task-loss step on the vw head (no regularizer, no bias heads).
    fn erm_step(&mut self, batch: &DomainBatch, cfg: &TrainConfig, step: usize) -> Result<StepMetrics> {
        let mut tape = Tape::new();
        let fwd = self.net.forward_with_taps(&mut tape, &batch.x)?;
        let bank_reg = self.bank.register(&mut tape)?;
        let logits = vw_logits(&mut tape, &bank_reg, fwd.output)?;
        let l = task_loss(&mut tape, logits, &batch.y, cfg.task_mode)?;
        let obj = tape.scale(l, cfg.weights.c1)?;
        let metrics = StepMetrics {
            step,
            l_vw: tape.value(l).item(),
            objective: tape.value(obj).item(),
            ..Default::default()
        };
        let g = tape.backward(obj)?;
        update_net(&mut self.net, &fwd, &g, cfg.eta)?;
        apply_sgd(&mut self.bank.w_vw, g.wrt(bank_reg.w_vw)?, cfg.eta);
        Ok(metrics)
    }

    /// Cross-domain mixup: convex combinations of pairs from different
    /// domains, trained through the vw head only.
    fn mixup_step(&mut self, batch: &DomainBatch, cfg: &TrainConfig, step: usize) -> Result<StepMetrics> {
        if batch.len() < 2 {
            return Err(Error::Config("mixup needs batch size >= 2".into()));
        }
        let beta = Beta::new(cfg.mixup_alpha, cfg.mixup_alpha)
            .map_err(|e| Error::Config(format!("bad mixup alpha: {e}")))?;
        let n = batch.len();
        let d = batch.x.cols();
        let l = batch.y.cols();
        let mut x = Vec::with_capacity(n * d);
        let mut y = Vec::with_capacity(n * l);
        for j in 0..n {
            // partner from a different domain when one exists
            let candidates: Vec<usize> = (0..n)
                .filter(|&p| batch.domains[p] != batch.domains[j])
                .collect();
            let p = if candidates.is_empty() {
                loop {
                    let p = self.mixup_rng.gen_range(0..n);
                    if p != j || n == 1 {
                        break p;
                    }
                }
            } else {
                candidates[self.mixup_rng.gen_range(0..candidates.len())]
            };
            let b: f64 = beta.sample(&mut self.mixup_rng);
            for (xa, xb) in batch.x.row(j).iter().zip(batch.x.row(p).iter()) {
                x.push(b * xa + (1.0 - b) * xb);
            }
            for (ya, yb) in batch.y.row(j).iter().zip(batch.y.row(p).iter()) {
                y.push(b * ya + (1.0 - b) * yb);
            }
        }
        let mixed = DomainBatch {
            x: Tensor::new(vec![n, d], x)?,
            y: Tensor::new(vec![n, l], y)?,
            domains: batch.domains.clone(),
        };
        self.erm_step(&mixed, cfg, step)
    }

    /// Domain-adversarial step: the feature extractor receives the task
    /// gradient minus `dann_weight` times the domain gradient (gradient
    /// reversal replaces the stop-gradient).
    fn dann_step(&mut self, batch: &DomainBatch, cfg: &TrainConfig, step: usize) -> Result<StepMetrics> {
        let n_domains = self.bank.n_domains();
        let mut tape = Tape::new();
        let fwd = self.net.forward_with_taps(&mut tape, &batch.x)?;
        let bank_reg = self.bank.register(&mut tape)?;
        let phi = self.dc.register(&mut tape)?;

        let logits = vw_logits(&mut tape, &bank_reg, fwd.output)?;
        let l_task = task_loss(&mut tape, logits, &batch.y, cfg.task_mode)?;
        let obj = tape.scale(l_task, cfg.weights.c1)?;

        // connected domain loss: gradients reach theta here by design
        let zi = crate::heads::with_intercept(&mut tape, fwd.output)?;
        let dlogits = tape.matmul(zi, phi)?;
        let d_onehot = batch.domain_onehot(n_domains);
        let l_domain = task_loss(&mut tape, dlogits, &d_onehot, TaskMode::SoftmaxCe)?;

        let metrics = StepMetrics {
            step,
            l_vw: tape.value(l_task).item(),
            l_domain: tape.value(l_domain).item(),
            objective: tape.value(obj).item(),
            ..Default::default()
        };

        let g_task = tape.backward(obj)?;
        let g_dom = tape.backward(l_domain)?;
        for (li, layer) in self.net.layers_mut().iter_mut().enumerate() {
            let gw_t = g_task.wrt(fwd.weight_ids[li])?;
            let gw_d = g_dom.wrt(fwd.weight_ids[li])?;
            for ((w, gt), gd) in layer.weight.data_mut().iter_mut().zip(gw_t.iter()).zip(gw_d.iter()) {
                *w -= cfg.eta * (gt - cfg.dann_weight * gd);
            }
            let gb_t = g_task.wrt(fwd.bias_ids[li])?;
            let gb_d = g_dom.wrt(fwd.bias_ids[li])?;
            for ((b, gt), gd) in layer.bias.data_mut().iter_mut().zip(gb_t.iter()).zip(gb_d.iter()) {
                *b -= cfg.eta * (gt - cfg.dann_weight * gd);
            }
        }
        apply_sgd(&mut self.bank.w_vw, g_task.wrt(bank_reg.w_vw)?, cfg.eta);
        apply_sgd(&mut self.dc.phi, g_dom.wrt(phi)?, cfg.eta);
        Ok(metrics)
    }

    /// Dispatch one training step.
    pub fn step(&mut self, batch: &DomainBatch, cfg: &TrainConfig, step: usize) -> Result<StepMetrics> {
        match cfg.strategy {
            Strategy::Mct | Strategy::Crossgrad => self.bias_step(batch, cfg, true, step),
            Strategy::E2eCe => self.bias_step(batch, cfg, false, step),
            Strategy::E2eSvm => self.svm_step(batch, cfg, step),
            Strategy::Erm => self.erm_step(batch, cfg, step),
            Strategy::Mixup => self.mixup_step(batch, cfg, step),
            Strategy::Dann => self.dann_step(batch, cfg, step),
        }
    }
}

/// Validation score over the val splits of the training domains.
fn val_score(state: &TrainerState, datasets: &[&DomainDataset], mode: TaskMode) -> Result<Option<f64>> {
    let mut xs = Vec::new();
    let mut ys = Vec::new();
    for ds in datasets {
        let x = ds.split_x(Split::Val);
        if x.rows() > 0 {
            xs.push(x);
            ys.push(ds.split_y(Split::Val));
        }
    }
    if xs.is_empty() {
        return Ok(None);
    }
    let x = concat_rows(&xs)?;
    let y = concat_rows(&ys)?;
    let z = state.net.infer(&x)?;
    let logits = linear_with_intercept(&z, &state.bank.w_vw)?;
    let score = match mode {
        TaskMode::SoftmaxCe => accuracy(&logits, &y)?,
        TaskMode::MultilabelBce => macro_auc(&logits, &y)?,
    };
    Ok(Some(score))
}

pub(crate) fn concat_rows(parts: &[Tensor]) -> Result<Tensor> {
    let cols = parts[0].cols();
    let mut data = Vec::new();
    let mut rows = 0;
    for p in parts {
        if p.cols() != cols {
            return Err(Error::ShapeMismatch {
                op: "concat-rows",
                detail: format!("{} vs {} columns", p.cols(), cols),
            });
        }
        data.extend_from_slice(p.data());
        rows += p.rows();
    }
    Tensor::new(vec![rows, cols], data)
}

/// Run `cfg.steps` steps of the configured strategy over the given training
/// domains. Deterministic under `cfg.seed`. Aborts with
/// [`Error::Diverged`] if any loss goes non-finite.
pub fn train(cfg: &TrainConfig, datasets: &[&DomainDataset]) -> Result<TrainOutcome> {
    cfg.validate()?;
    if datasets.is_empty() {
        return Err(Error::Config("no training domains".into()));
    }
    let needs_two = cfg.strategy.models_bias() || cfg.strategy == Strategy::Dann;
    if needs_two && datasets.len() < 2 {
        return Err(Error::Config(format!(
            "strategy {} models dataset bias and needs >= 2 training domains, got {}",
            cfg.strategy.name(),
            datasets.len()
        )));
    }
    let views = train_views(datasets)?;
    let input_dim = datasets[0].n_features();
    let label_dim = datasets[0].n_labels();
    let mut state = TrainerState::init(cfg, input_dim, label_dim, datasets.len())?;

    let mut history = Vec::with_capacity(cfg.steps);
    for step in 0..cfg.steps {
        let batch = sample_batch(&views, cfg.batch_size, &mut state.batch_rng);
        let metrics = match state.step(&batch, cfg, step) {
            Ok(m) => m,
            Err(Error::NonFinite { .. }) => return Err(Error::Diverged { step }),
            Err(e) => return Err(e),
        };
        if !metrics.objective.is_finite() {
            return Err(Error::Diverged { step });
        }
        let val = if cfg.eval_every > 0 && (step + 1) % cfg.eval_every == 0 {
            val_score(&state, datasets, cfg.task_mode)?
        } else {
            None
        };
        history.push(HistoryRow { metrics, val_score: val });
    }

    let final_val = val_score(&state, datasets, cfg.task_mode)?;
    Ok(TrainOutcome {
        model: TrainedModel {
            net: state.net,
            bank: state.bank,
            dc: state.dc,
            task_mode: cfg.task_mode,
            domain_names: datasets.iter().map(|d| d.name.clone()).collect(),
        },
        history,
        final_val,
    })
}
