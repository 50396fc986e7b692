//! Trainable cohort normalization: margin-penalized sub-center cohort
//! scoring, the calibration + impostor-classification losses, mini-batch
//! construction, Adam fine-tuning, cohort initialization, and the
//! inference path for the trained variants.
//!
//! Two parameterizations are trained with the same simulated-verification
//! loss:
//!
//! - **Learnable impostor embeddings** (`Variant::Lie`): the cohort bank
//!   itself is the parameter tensor.
//! - **Learnable gates** (`Variant::Lwb`): the bank is frozen and four
//!   scalars gate the cohort statistics through sigmoids.
//!
//! Both also train the affine parameters of a batch normalization applied
//! to the flattened mini-batch score matrix. At inference batch norm is
//! bypassed: it is a strictly increasing affine map, so threshold-sweep
//! metrics cannot change, and the gates/bank alone define the score.

use std::collections::BTreeMap;

use crate::error::{Error, Result};
use crate::norms::{self, CohortCache, NormMethod};
use crate::rng::Rng;
use crate::scoring::{
    self, cosine, floored, stats_of_top_k, ScoreVector, Select, STD_FLOOR,
};
use crate::tape::{NodeId, Tape};
use crate::types::{Embedding, ImpostorBank, LabeledEmbedding, SpeakerId, TrialList};

/// Which parameter set the fine-tuning loop updates.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Variant {
    /// Train the impostor bank (plus batch-norm affine).
    Lie,
    /// Freeze the bank; train four scalar gates (plus batch-norm affine).
    Lwb,
}

impl Variant {
    pub fn parse(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "lie" => Ok(Variant::Lie),
            "lwb" => Ok(Variant::Lwb),
            other => Err(Error::InvalidConfig(format!(
                "unknown variant '{other}' (expected lie or lwb)"
            ))),
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Variant::Lie => "lie",
            Variant::Lwb => "lwb",
        }
    }
}

/// Whether the margin penalty is added to the angle or subtracted from the
/// cosine.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MarginSpace {
    Angular,
    Cosine,
}

impl MarginSpace {
    pub fn parse(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "angular" => Ok(MarginSpace::Angular),
            "cosine" => Ok(MarginSpace::Cosine),
            other => Err(Error::InvalidConfig(format!(
                "unknown margin space '{other}' (expected angular or cosine)"
            ))),
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            MarginSpace::Angular => "angular",
            MarginSpace::Cosine => "cosine",
        }
    }
}

/// Hyperparameters of the fine-tuning loop. Defaults follow the reference
/// evaluation protocol at full scale; desk-scale runs shrink
/// `speakers_per_batch` and `cohort_size`.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    /// Top-K cohort size.
    pub cohort_size: usize,
    /// Margin penalty (radians for `Angular`, cosine units for `Cosine`).
    pub margin: f64,
    /// Sub-centers per cohort speaker.
    pub n_sub: usize,
    /// Logit scale of the impostor-classification loss.
    pub aic_scale: f64,
    /// Weight of the impostor-classification loss in the total.
    pub aic_weight: f64,
    /// Weight of the calibration loss in the total. 1.0 reproduces the
    /// reference objective; 0.0 isolates the classification loss for
    /// ablations.
    pub cllr_weight: f64,
    pub speakers_per_batch: usize,
    /// Utterances drawn per speaker per batch; the verification-simulation
    /// batch needs exactly one enroll + one test, so this is fixed at 2.
    pub utts_per_speaker: usize,
    pub epochs: usize,
    pub learning_rate: f64,
    /// Multiplicative per-epoch decay (0.9 = minus 10% each epoch).
    pub lr_decay_per_epoch: f64,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub adam_eps: f64,
    pub seed: u64,
    /// Synthetic-generator knob echoed here so a config file can carry the
    /// full experiment; training itself ignores it.
    pub utterance_crop_seconds: f64,
    pub margin_space: MarginSpace,
    /// Sub-center pooling used in training and mirrored at inference.
    pub select: Select,
    /// Flip the calibration loss's target term to its sign-degenerate
    /// positive form (`log2(1 + e^{+s})` on targets) instead of the
    /// conventional negative form. Off by default; kept selectable for
    /// ablations of the degenerate objective.
    pub positive_target_cllr: bool,
    pub bn_momentum: f64,
    pub bn_eps: f64,
    pub variant: Variant,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            cohort_size: 400,
            margin: 0.5,
            n_sub: 2,
            aic_scale: 30.0,
            aic_weight: 0.1,
            cllr_weight: 1.0,
            speakers_per_batch: 200,
            utts_per_speaker: 2,
            epochs: 20,
            learning_rate: 1e-4,
            lr_decay_per_epoch: 0.9,
            adam_beta1: 0.9,
            adam_beta2: 0.999,
            adam_eps: 1e-8,
            seed: 0,
            utterance_crop_seconds: 0.0,
            margin_space: MarginSpace::Angular,
            select: Select::Min,
            positive_target_cllr: false,
            bn_momentum: 0.1,
            bn_eps: 1e-5,
            variant: Variant::Lie,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.cohort_size == 0 {
            return Err(Error::InvalidConfig("cohort_size must be >= 1".into()));
        }
        if self.margin < 0.0 {
            return Err(Error::NegativeMargin(self.margin));
        }
        if self.n_sub == 0 {
            return Err(Error::InvalidConfig("n_sub must be >= 1".into()));
        }
        if !(self.aic_scale > 0.0) {
            return Err(Error::InvalidConfig("aic_scale must be > 0".into()));
        }
        if self.aic_weight < 0.0 || self.cllr_weight < 0.0 {
            return Err(Error::InvalidConfig("loss weights must be >= 0".into()));
        }
        if self.utts_per_speaker != 2 {
            return Err(Error::InvalidConfig(
                "utts_per_speaker is fixed at 2 (one enroll + one test)".into(),
            ));
        }
        if self.speakers_per_batch < 2 {
            return Err(Error::InvalidConfig(
                "speakers_per_batch must be >= 2 (needs non-target scores)".into(),
            ));
        }
        if !(self.learning_rate > 0.0) {
            return Err(Error::InvalidConfig("learning_rate must be > 0".into()));
        }
        if !(self.lr_decay_per_epoch > 0.0 && self.lr_decay_per_epoch <= 1.0) {
            return Err(Error::InvalidConfig(
                "lr_decay_per_epoch must be in (0, 1]".into(),
            ));
        }
        if !(self.bn_momentum >= 0.0 && self.bn_momentum <= 1.0) {
            return Err(Error::InvalidConfig("bn_momentum must be in [0, 1]".into()));
        }
        if !(self.bn_eps > 0.0) {
            return Err(Error::InvalidConfig("bn_eps must be > 0".into()));
        }
        Ok(())
    }

    /// Learning rate after `epoch` full epochs of decay.
    pub fn lr_at_epoch(&self, epoch: usize) -> f64 {
        self.learning_rate * self.lr_decay_per_epoch.powi(epoch as i32)
    }
}

/// The four scalar gates of the learnable-gate variant. Initialized to the
/// identity arguments (w = 1, b = 0) so the sigmoids initially see the raw
/// cohort statistics.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LwbParams {
    pub w_mu: f64,
    pub b_mu: f64,
    pub w_sigma: f64,
    pub b_sigma: f64,
}

impl Default for LwbParams {
    fn default() -> Self {
        LwbParams {
            w_mu: 1.0,
            b_mu: 0.0,
            w_sigma: 1.0,
            b_sigma: 0.0,
        }
    }
}

impl LwbParams {
    pub fn as_array(&self) -> [f64; 4] {
        [self.w_mu, self.b_mu, self.w_sigma, self.b_sigma]
    }

    pub fn from_array(a: [f64; 4]) -> Self {
        LwbParams {
            w_mu: a[0],
            b_mu: a[1],
            w_sigma: a[2],
            b_sigma: a[3],
        }
    }

    pub fn shift(&self, mu: f64) -> f64 {
        sigmoid(self.w_mu * mu + self.b_mu)
    }

    pub fn scale(&self, sd: f64) -> f64 {
        sigmoid(self.w_sigma * sd + self.b_sigma)
    }
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

/// Batch normalization over the flattened mini-batch score tensor.
/// Training uses the batch's own statistics; the running estimates are
/// tracked only so checkpoints can expose calibrated outputs.
#[derive(Debug, Clone, PartialEq)]
pub struct ScoreBatchNorm {
    pub gamma: f64,
    pub beta: f64,
    pub running_mean: f64,
    pub running_var: f64,
}

impl Default for ScoreBatchNorm {
    fn default() -> Self {
        ScoreBatchNorm {
            gamma: 1.0,
            beta: 0.0,
            running_mean: 0.0,
            running_var: 1.0,
        }
    }
}

/// One verification-simulation mini-batch: per speaker, one enrollment and
/// one test utterance; targets are the diagonal pairs.
#[derive(Debug, Clone)]
pub struct TrainBatch {
    pub enroll: Vec<LabeledEmbedding>,
    pub test: Vec<LabeledEmbedding>,
}

impl TrainBatch {
    pub fn len(&self) -> usize {
        self.enroll.len()
    }

    pub fn is_empty(&self) -> bool {
        self.enroll.is_empty()
    }

    /// Flattened row-major target mask: true exactly on the diagonal.
    pub fn target_mask(&self) -> Vec<bool> {
        let n = self.len();
        let mut mask = vec![false; n * n];
        for i in 0..n {
            mask[i * n + i] = true;
        }
        mask
    }
}

/// Training embeddings grouped by speaker; the group index doubles as the
/// class index and matches the row order of a bank built by [`init_lies`].
pub struct TrainingPool {
    speakers: Vec<(SpeakerId, Vec<Embedding>)>,
}

impl TrainingPool {
    /// Group labeled embeddings by speaker name (sorted, so pool order is
    /// independent of input order) and assign class = position.
    pub fn from_labeled(embs: &[LabeledEmbedding]) -> Result<Self> {
        if embs.is_empty() {
            return Err(Error::EmptyInput);
        }
        let dim = embs[0].embedding.dim();
        let mut groups: BTreeMap<String, Vec<Embedding>> = BTreeMap::new();
        for le in embs {
            if le.embedding.dim() != dim {
                return Err(Error::DimMismatch {
                    expected: dim,
                    got: le.embedding.dim(),
                });
            }
            groups
                .entry(le.speaker.name.clone())
                .or_default()
                .push(le.embedding.clone());
        }
        let speakers = groups
            .into_iter()
            .enumerate()
            .map(|(class, (name, utts))| (SpeakerId::with_class(name, class), utts))
            .collect();
        Ok(TrainingPool { speakers })
    }

    pub fn len(&self) -> usize {
        self.speakers.len()
    }

    pub fn is_empty(&self) -> bool {
        self.speakers.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.speakers[0].1[0].dim()
    }

    pub fn speaker(&self, class: usize) -> (&SpeakerId, &[Embedding]) {
        let (id, utts) = &self.speakers[class];
        (id, utts)
    }

    fn eligible(&self, min_utts: usize) -> Vec<usize> {
        (0..self.len())
            .filter(|&c| self.speakers[c].1.len() >= min_utts)
            .collect()
    }
}

/// Margin-penalized scores of one labeled embedding against a
/// single-sub-center bank: every entry is the plain cosine except the
/// embedding's own class, which is penalized so the true speaker does not
/// win its own cohort slot. Training-only — inference never applies it.
pub fn penalized_scores(
    x: &LabeledEmbedding,
    bank: &ImpostorBank,
    m: f64,
    space: MarginSpace,
) -> Result<ScoreVector> {
    if bank.n_sub() != 1 {
        return Err(Error::SubCentersUnsupported {
            n_sub: bank.n_sub(),
        });
    }
    subcenter_penalized_scores(x, bank, m, Select::Min, space)
}

/// Apply the margin to one cosine value.
fn apply_margin(c: f64, m: f64, space: MarginSpace) -> f64 {
    match space {
        MarginSpace::Angular => {
            let sin_t = (1.0 - c * c).max(1e-12).sqrt();
            c * m.cos() - sin_t * m.sin()
        }
        MarginSpace::Cosine => c - m,
    }
}

/// Sub-center variant of [`penalized_scores`]: the margin hits every
/// sub-center of the own class *before* pooling, then each speaker's
/// sub-center scores are pooled with `select`.
pub fn subcenter_penalized_scores(
    x: &LabeledEmbedding,
    bank: &ImpostorBank,
    m: f64,
    select: Select,
    space: MarginSpace,
) -> Result<ScoreVector> {
    if m < 0.0 {
        return Err(Error::NegativeMargin(m));
    }
    let class = x.class()?;
    if class >= bank.len() {
        return Err(Error::ClassOutOfRange {
            class,
            c: bank.len(),
        });
    }
    let mut rows = scoring::score_rows(&x.embedding, bank)?;
    if m > 0.0 {
        let j = bank.n_sub();
        for sub in 0..j {
            let idx = class * j + sub;
            rows[idx] = apply_margin(rows[idx], m, space);
        }
    }
    let values = scoring::pool_rows(&rows, bank.n_sub(), select);
    Ok(ScoreVector {
        values,
        source: x.speaker.name.clone(),
    })
}

/// Training-view normalized score: raw cosine normalized by top-K
/// statistics of the margin-penalized, sub-center-pooled cohort scores of
/// each side.
pub fn tas_forward(
    e: &LabeledEmbedding,
    t: &LabeledEmbedding,
    bank: &ImpostorBank,
    cfg: &TrainConfig,
) -> Result<f64> {
    let raw = cosine(&e.embedding, &t.embedding)?;
    let se = subcenter_penalized_scores(e, bank, cfg.margin, cfg.select, cfg.margin_space)?;
    let st = subcenter_penalized_scores(t, bank, cfg.margin, cfg.select, cfg.margin_space)?;
    let e_top = stats_of_top_k(&se.values, cfg.cohort_size)?;
    let t_top = stats_of_top_k(&st.values, cfg.cohort_size)?;
    Ok(norms::as_norm1(raw, &e_top, &t_top))
}

/// Training-view normalized score of the learnable-gate variant: the
/// cohort statistics pass through `sigmoid(w·stat + b)` gates before
/// shifting and scaling the raw score.
pub fn lwb_forward(
    e: &LabeledEmbedding,
    t: &LabeledEmbedding,
    bank: &ImpostorBank,
    cfg: &TrainConfig,
    params: &LwbParams,
) -> Result<f64> {
    let raw = cosine(&e.embedding, &t.embedding)?;
    let se = subcenter_penalized_scores(e, bank, cfg.margin, cfg.select, cfg.margin_space)?;
    let st = subcenter_penalized_scores(t, bank, cfg.margin, cfg.select, cfg.margin_space)?;
    let e_top = stats_of_top_k(&se.values, cfg.cohort_size)?;
    let t_top = stats_of_top_k(&st.values, cfg.cohort_size)?;
    Ok(lwb_combine(raw, e_top.mean, e_top.std, t_top.mean, t_top.std, params))
}

/// The gate arithmetic shared by the training-view and inference paths.
fn lwb_combine(raw: f64, mu_e: f64, sd_e: f64, mu_t: f64, sd_t: f64, p: &LwbParams) -> f64 {
    (raw - p.shift(mu_e)) / (2.0 * floored(p.scale(sd_e)))
        + (raw - p.shift(mu_t)) / (2.0 * floored(p.scale(sd_t)))
}

/// Impostor-classification loss: mean cross-entropy of classifying each
/// labeled embedding as its own speaker, with logits `scale ·
/// (margin-penalized pooled cohort scores)`. Keeps trained cohorts
/// representative of their speakers.
pub fn aic_loss(embs: &[LabeledEmbedding], bank: &ImpostorBank, cfg: &TrainConfig) -> Result<f64> {
    if embs.is_empty() {
        return Err(Error::EmptyInput);
    }
    let mut total = 0.0;
    for x in embs {
        let scores =
            subcenter_penalized_scores(x, bank, cfg.margin, cfg.select, cfg.margin_space)?;
        let y = x.class()?;
        let logits: Vec<f64> = scores.values.iter().map(|v| cfg.aic_scale * v).collect();
        let mx = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let lse = mx + logits.iter().map(|v| (v - mx).exp()).sum::<f64>().ln();
        total += lse - logits[y];
    }
    Ok(total / embs.len() as f64)
}

/// Draw one verification-simulation batch: `speakers_per_batch` distinct
/// speakers, two distinct utterances each, one per role.
pub fn build_batch(pool: &TrainingPool, cfg: &TrainConfig, rng: &mut Rng) -> Result<TrainBatch> {
    let eligible = pool.eligible(cfg.utts_per_speaker);
    if eligible.len() < cfg.speakers_per_batch {
        return Err(Error::InsufficientData(format!(
            "need {} speakers with >= {} utterances, have {}",
            cfg.speakers_per_batch,
            cfg.utts_per_speaker,
            eligible.len()
        )));
    }
    let chosen = rng.sample_distinct(eligible.len(), cfg.speakers_per_batch);
    let classes: Vec<usize> = chosen.into_iter().map(|i| eligible[i]).collect();
    batch_from_classes(pool, &classes, rng)
}

/// Assemble a batch from explicit speaker classes (the epoch loop chunks a
/// shuffled speaker list into disjoint batches).
fn batch_from_classes(pool: &TrainingPool, classes: &[usize], rng: &mut Rng) -> Result<TrainBatch> {
    let mut enroll = Vec::with_capacity(classes.len());
    let mut test = Vec::with_capacity(classes.len());
    for &class in classes {
        let (id, utts) = pool.speaker(class);
        if utts.len() < 2 {
            return Err(Error::InsufficientData(format!(
                "speaker {} has {} utterance(s), need 2",
                id.name,
                utts.len()
            )));
        }
        let a = rng.below(utts.len());
        let mut b = rng.below(utts.len() - 1);
        if b >= a {
            b += 1;
        }
        let speaker = SpeakerId::with_class(id.name.clone(), class);
        enroll.push(LabeledEmbedding {
            embedding: utts[a].clone(),
            speaker: speaker.clone(),
        });
        test.push(LabeledEmbedding {
            embedding: utts[b].clone(),
            speaker,
        });
    }
    Ok(TrainBatch { enroll, test })
}

/// Diagnostics of one training step.
#[derive(Debug, Clone)]
pub struct LossReport {
    pub total: f64,
    pub cllr: f64,
    /// Unweighted impostor-classification loss.
    pub aic: f64,
    /// Times a cohort standard deviation hit the 1e-12 denominator floor.
    pub std_floor_hits: usize,
    /// Batch embeddings whose own speaker made it into their top-K cohort.
    pub own_class_leaks: usize,
    pub batch_mean: f64,
    pub batch_var: f64,
}

/// The taped loss of one batch plus handles to every parameter node.
pub struct BatchGraph {
    pub tape: Tape,
    pub loss: NodeId,
    pub cllr: NodeId,
    pub aic: NodeId,
    /// Bank parameter node (learnable-embedding variant only).
    pub bank_node: Option<NodeId>,
    /// Gate parameter nodes `[w_mu, b_mu, w_sigma, b_sigma]`
    /// (learnable-gate variant only).
    pub lwb_nodes: Option<[NodeId; 4]>,
    pub gamma: NodeId,
    pub beta: NodeId,
    pub bn_out: NodeId,
    pub std_floor_hits: usize,
    pub own_class_leaks: usize,
}

/// Record the full training loss of one batch on a fresh tape.
///
/// The raw trial-score matrix depends only on the batch embeddings, never
/// on trainable parameters, so it enters the graph as a constant; gradients
/// reach the parameters exclusively through the cohort statistics, the
/// gates, and batch normalization.
pub fn build_loss_graph(
    batch: &TrainBatch,
    bank: &ImpostorBank,
    lwb: &LwbParams,
    bn: &ScoreBatchNorm,
    cfg: &TrainConfig,
) -> Result<BatchGraph> {
    cfg.validate()?;
    let n = batch.len();
    if n == 0 {
        return Err(Error::EmptyInput);
    }
    let c = bank.len();
    let j = bank.n_sub();
    let dim = bank.dim();
    if cfg.cohort_size > c {
        return Err(Error::InvalidCohortSize {
            k: cfg.cohort_size,
            c,
        });
    }

    let flat = |embs: &[LabeledEmbedding]| -> Result<(Vec<f64>, Vec<usize>)> {
        let mut data = Vec::with_capacity(n * dim);
        let mut classes = Vec::with_capacity(n);
        for le in embs {
            if le.embedding.dim() != dim {
                return Err(Error::DimMismatch {
                    expected: dim,
                    got: le.embedding.dim(),
                });
            }
            data.extend_from_slice(le.embedding.normalized()?.values());
            let y = le.class()?;
            if y >= c {
                return Err(Error::ClassOutOfRange { class: y, c });
            }
            classes.push(y);
        }
        Ok((data, classes))
    };
    let (e_flat, e_classes) = flat(&batch.enroll)?;
    let (t_flat, t_classes) = flat(&batch.test)?;

    // Raw trial scores: constant under every parameterization.
    let raw = scoring::matmul_nt(&e_flat, &t_flat, n, n, dim);

    let mut tape = Tape::new();
    let (bank_node, centers_node) = match cfg.variant {
        Variant::Lie => {
            let node = tape.param(bank.centers().to_vec(), c * j, dim);
            (Some(node), node)
        }
        Variant::Lwb => {
            let node = tape.constant(bank.centers().to_vec(), c * j, dim);
            (None, node)
        }
    };
    let bank_normed = tape.normalize_rows(centers_node)?;

    let side = |tape: &mut Tape,
                flat_embs: &[f64],
                classes: &[usize]|
     -> Result<(NodeId, NodeId)> {
        let x = tape.constant(flat_embs.to_vec(), n, dim);
        let scores = tape.matmul_nt(x, bank_normed)?;
        let positions: Vec<(usize, usize)> = classes
            .iter()
            .enumerate()
            .flat_map(|(row, &y)| (0..j).map(move |sub| (row, y * j + sub)))
            .collect();
        let margined = if cfg.margin > 0.0 {
            match cfg.margin_space {
                MarginSpace::Angular => tape.angle_margin(scores, &positions, cfg.margin)?,
                MarginSpace::Cosine => tape.cosine_margin(scores, &positions, cfg.margin)?,
            }
        } else {
            scores
        };
        let pooled = tape.pool_cols(margined, j, cfg.select)?;
        let top = tape.top_k_rows(pooled, cfg.cohort_size)?;
        Ok((pooled, top))
    };
    let (pooled_e, top_e) = side(&mut tape, &e_flat, &e_classes)?;
    let (pooled_t, top_t) = side(&mut tape, &t_flat, &t_classes)?;

    let mu_e = tape.row_mean(top_e)?;
    let sd_e = tape.row_std(top_e)?;
    let mu_t = tape.row_mean(top_t)?;
    let sd_t = tape.row_std(top_t)?;

    let std_floor_hits = tape
        .value(sd_e)
        .iter()
        .chain(tape.value(sd_t))
        .filter(|&&s| s <= STD_FLOOR)
        .count();
    let mut own_class_leaks = 0usize;
    for (top, classes) in [(top_e, &e_classes), (top_t, &t_classes)] {
        let idx = tape.topk_indices(top).expect("top-k node");
        for (row, y) in classes.iter().enumerate() {
            if idx[row].contains(y) {
                own_class_leaks += 1;
            }
        }
    }

    let normalized = match cfg.variant {
        Variant::Lie => tape.pair_normalize(&raw, mu_e, sd_e, mu_t, sd_t)?,
        Variant::Lwb => {
            let w_mu = tape.param(vec![lwb.w_mu], 1, 1);
            let b_mu = tape.param(vec![lwb.b_mu], 1, 1);
            let w_sd = tape.param(vec![lwb.w_sigma], 1, 1);
            let b_sd = tape.param(vec![lwb.b_sigma], 1, 1);
            let gate = |tape: &mut Tape, x: NodeId, w: NodeId, b: NodeId| -> Result<NodeId> {
                let lin = tape.scale_shift(x, w, b)?;
                tape.sigmoid(lin)
            };
            let shift_e = gate(&mut tape, mu_e, w_mu, b_mu)?;
            let scale_e = gate(&mut tape, sd_e, w_sd, b_sd)?;
            let shift_t = gate(&mut tape, mu_t, w_mu, b_mu)?;
            let scale_t = gate(&mut tape, sd_t, w_sd, b_sd)?;
            let node = tape.pair_normalize(&raw, shift_e, scale_e, shift_t, scale_t)?;
            // stash gate nodes through the outer scope
            return finish_graph(
                tape,
                node,
                pooled_e,
                pooled_t,
                &e_classes,
                &t_classes,
                bank_node,
                Some([w_mu, b_mu, w_sd, b_sd]),
                bn,
                cfg,
                std_floor_hits,
                own_class_leaks,
            );
        }
    };
    finish_graph(
        tape,
        normalized,
        pooled_e,
        pooled_t,
        &e_classes,
        &t_classes,
        bank_node,
        None,
        bn,
        cfg,
        std_floor_hits,
        own_class_leaks,
    )
}

#[allow(clippy::too_many_arguments)]
fn finish_graph(
    mut tape: Tape,
    normalized: NodeId,
    pooled_e: NodeId,
    pooled_t: NodeId,
    e_classes: &[usize],
    t_classes: &[usize],
    bank_node: Option<NodeId>,
    lwb_nodes: Option<[NodeId; 4]>,
    bn: &ScoreBatchNorm,
    cfg: &TrainConfig,
    std_floor_hits: usize,
    own_class_leaks: usize,
) -> Result<BatchGraph> {
    let n = e_classes.len();
    let gamma = tape.param(vec![bn.gamma], 1, 1);
    let beta = tape.param(vec![bn.beta], 1, 1);
    let bn_out = tape.batch_norm(normalized, gamma, beta, cfg.bn_eps)?;

    let mut mask = vec![false; n * n];
    for i in 0..n {
        mask[i * n + i] = true;
    }
    let cllr = tape.cllr_loss(bn_out, &mask, !cfg.positive_target_cllr)?;

    let logits_e = tape.scale(pooled_e, cfg.aic_scale)?;
    let xe = tape.softmax_xent_mean(logits_e, e_classes)?;
    let logits_t = tape.scale(pooled_t, cfg.aic_scale)?;
    let xt = tape.softmax_xent_mean(logits_t, t_classes)?;
    let aic = tape.add_scaled(xe, xt, 0.5, 0.5)?;

    let loss = tape.add_scaled(cllr, aic, cfg.cllr_weight, cfg.aic_weight)?;
    Ok(BatchGraph {
        tape,
        loss,
        cllr,
        aic,
        bank_node,
        lwb_nodes,
        gamma,
        beta,
        bn_out,
        std_floor_hits,
        own_class_leaks,
    })
}

/// Adam with bias correction over one flat parameter vector.
#[derive(Debug, Clone, PartialEq)]
pub struct Adam {
    pub m: Vec<f64>,
    pub v: Vec<f64>,
    pub t: u64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Adam {
    pub fn new(n_params: usize, beta1: f64, beta2: f64, eps: f64) -> Self {
        Adam {
            m: vec![0.0; n_params],
            v: vec![0.0; n_params],
            t: 0,
            beta1,
            beta2,
            eps,
        }
    }

    pub fn step(&mut self, params: &mut [f64], grads: &[f64], lr: f64) {
        debug_assert_eq!(params.len(), grads.len());
        debug_assert_eq!(params.len(), self.m.len());
        self.t += 1;
        let bc1 = 1.0 - self.beta1.powi(self.t as i32);
        let bc2 = 1.0 - self.beta2.powi(self.t as i32);
        for i in 0..params.len() {
            let g = grads[i];
            self.m[i] = self.beta1 * self.m[i] + (1.0 - self.beta1) * g;
            self.v[i] = self.beta2 * self.v[i] + (1.0 - self.beta2) * g * g;
            let m_hat = self.m[i] / bc1;
            let v_hat = self.v[i] / bc2;
            params[i] -= lr * m_hat / (v_hat.sqrt() + self.eps);
        }
    }
}

/// The fine-tuning loop: owns the parameters, the optimizer state, and the
/// deterministic batch stream.
pub struct Trainer {
    pub cfg: TrainConfig,
    pub pool: TrainingPool,
    pub bank: ImpostorBank,
    pub lwb: LwbParams,
    pub bn: ScoreBatchNorm,
    pub adam: Adam,
    pub rng: Rng,
    pub epoch: usize,
}

/// Per-epoch aggregate written to stdout by the CLI and into checkpoints.
#[derive(Debug, Clone)]
pub struct EpochSummary {
    pub epoch: usize,
    pub lr: f64,
    pub mean_total: f64,
    pub mean_cllr: f64,
    pub mean_aic: f64,
    pub std_floor_hits: usize,
    pub own_class_leaks: usize,
    pub batches: usize,
}

impl Trainer {
    pub fn new(pool: TrainingPool, bank: ImpostorBank, cfg: TrainConfig) -> Result<Self> {
        cfg.validate()?;
        if bank.dim() != pool.dim() {
            return Err(Error::DimMismatch {
                expected: pool.dim(),
                got: bank.dim(),
            });
        }
        if bank.len() != pool.len() {
            return Err(Error::InvalidConfig(format!(
                "bank has {} speakers but the training pool has {}",
                bank.len(),
                pool.len()
            )));
        }
        if bank.n_sub() != cfg.n_sub {
            return Err(Error::InvalidConfig(format!(
                "bank has {} sub-center(s) but the config says {}",
                bank.n_sub(),
                cfg.n_sub
            )));
        }
        if cfg.cohort_size > bank.len() {
            return Err(Error::InvalidCohortSize {
                k: cfg.cohort_size,
                c: bank.len(),
            });
        }
        let n_params = Self::param_count(&bank, cfg.variant);
        let adam = Adam::new(n_params, cfg.adam_beta1, cfg.adam_beta2, cfg.adam_eps);
        let rng = Rng::new(cfg.seed, crate::rng::Stream::Train);
        Ok(Trainer {
            cfg,
            pool,
            bank,
            lwb: LwbParams::default(),
            bn: ScoreBatchNorm::default(),
            adam,
            rng,
            epoch: 0,
        })
    }

    fn param_count(bank: &ImpostorBank, variant: Variant) -> usize {
        match variant {
            // bank + gamma + beta
            Variant::Lie => bank.centers().len() + 2,
            // four gates + gamma + beta
            Variant::Lwb => 6,
        }
    }

    /// Flatten current parameters in the fixed checkpoint order.
    pub fn flat_params(&self) -> Vec<f64> {
        match self.cfg.variant {
            Variant::Lie => {
                let mut p = self.bank.centers().to_vec();
                p.push(self.bn.gamma);
                p.push(self.bn.beta);
                p
            }
            Variant::Lwb => {
                let mut p = self.lwb.as_array().to_vec();
                p.push(self.bn.gamma);
                p.push(self.bn.beta);
                p
            }
        }
    }

    fn write_back(&mut self, flat: &[f64]) {
        match self.cfg.variant {
            Variant::Lie => {
                let nb = self.bank.centers().len();
                self.bank.centers_mut().copy_from_slice(&flat[..nb]);
                self.bn.gamma = flat[nb];
                self.bn.beta = flat[nb + 1];
            }
            Variant::Lwb => {
                self.lwb = LwbParams::from_array([flat[0], flat[1], flat[2], flat[3]]);
                self.bn.gamma = flat[4];
                self.bn.beta = flat[5];
            }
        }
    }

    /// One optimizer step on one batch at the given learning rate.
    pub fn step(&mut self, batch: &TrainBatch, lr: f64) -> Result<LossReport> {
        let graph = build_loss_graph(batch, &self.bank, &self.lwb, &self.bn, &self.cfg)?;
        let total = graph.tape.scalar(graph.loss);
        if !total.is_finite() {
            return Err(Error::NonFinite {
                context: format!("training loss at epoch {}", self.epoch),
            });
        }
        let grads = graph.tape.backward(graph.loss)?;
        let mut flat_grads = Vec::with_capacity(self.adam.m.len());
        match self.cfg.variant {
            Variant::Lie => {
                flat_grads.extend_from_slice(grads.wrt(graph.bank_node.unwrap())?);
            }
            Variant::Lwb => {
                for node in graph.lwb_nodes.unwrap() {
                    flat_grads.push(grads.wrt(node)?[0]);
                }
            }
        }
        flat_grads.push(grads.wrt(graph.gamma)?[0]);
        flat_grads.push(grads.wrt(graph.beta)?[0]);
        if flat_grads.iter().any(|g| !g.is_finite()) {
            return Err(Error::NonFinite {
                context: format!("parameter gradient at epoch {}", self.epoch),
            });
        }

        let mut params = self.flat_params();
        self.adam.step(&mut params, &flat_grads, lr);
        self.write_back(&params);

        let (batch_mean, batch_var) = graph.tape.bn_stats(graph.bn_out).expect("bn node");
        let mom = self.cfg.bn_momentum;
        self.bn.running_mean = (1.0 - mom) * self.bn.running_mean + mom * batch_mean;
        self.bn.running_var = (1.0 - mom) * self.bn.running_var + mom * batch_var;

        Ok(LossReport {
            total,
            cllr: graph.tape.scalar(graph.cllr),
            aic: graph.tape.scalar(graph.aic),
            std_floor_hits: graph.std_floor_hits,
            own_class_leaks: graph.own_class_leaks,
            batch_mean,
            batch_var,
        })
    }

    /// One pass over `⌊eligible speakers / speakers_per_batch⌋` disjoint
    /// speaker batches, reshuffled each epoch.
    pub fn run_epoch(&mut self) -> Result<EpochSummary> {
        let lr = self.cfg.lr_at_epoch(self.epoch);
        let mut order = self.pool.eligible(self.cfg.utts_per_speaker);
        if order.len() < self.cfg.speakers_per_batch {
            return Err(Error::InsufficientData(format!(
                "need {} speakers with >= {} utterances, have {}",
                self.cfg.speakers_per_batch,
                self.cfg.utts_per_speaker,
                order.len()
            )));
        }
        self.rng.shuffle(&mut order);
        let n_batches = order.len() / self.cfg.speakers_per_batch;
        let mut sum = LossReport {
            total: 0.0,
            cllr: 0.0,
            aic: 0.0,
            std_floor_hits: 0,
            own_class_leaks: 0,
            batch_mean: 0.0,
            batch_var: 0.0,
        };
        for b in 0..n_batches {
            let classes =
                &order[b * self.cfg.speakers_per_batch..(b + 1) * self.cfg.speakers_per_batch];
            let batch = batch_from_classes(&self.pool, classes, &mut self.rng)?;
            let report = self.step(&batch, lr)?;
            sum.total += report.total;
            sum.cllr += report.cllr;
            sum.aic += report.aic;
            sum.std_floor_hits += report.std_floor_hits;
            sum.own_class_leaks += report.own_class_leaks;
        }
        let epoch = self.epoch;
        self.epoch += 1;
        let nb = n_batches.max(1) as f64;
        Ok(EpochSummary {
            epoch,
            lr,
            mean_total: sum.total / nb,
            mean_cllr: sum.cllr / nb,
            mean_aic: sum.aic / nb,
            std_floor_hits: sum.std_floor_hits,
            own_class_leaks: sum.own_class_leaks,
            batches: n_batches,
        })
    }

    /// Run the remaining epochs (`epoch..cfg.epochs`).
    pub fn train(&mut self) -> Result<Vec<EpochSummary>> {
        let mut summaries = Vec::new();
        while self.epoch < self.cfg.epochs {
            summaries.push(self.run_epoch()?);
        }
        Ok(summaries)
    }
}

/// Build the initial cohort bank: one (or `n_sub`) unit-length centers per
/// training speaker, in pool order so class indices line up.
///
/// - `n_sub = 1`: the renormalized mean of the speaker's normalized
///   embeddings.
/// - `n_sub > 1` with enough utterances: seeded k-means (distinct-utterance
///   init, 10 iterations, cosine assignment) on the normalized embeddings.
/// - `n_sub > 1` with fewer utterances: mean replicated with per-component
///   Gaussian jitter (sigma 0.01), renormalized.
pub fn init_lies(pool: &TrainingPool, n_sub: usize, rng: &mut Rng) -> Result<ImpostorBank> {
    if n_sub == 0 {
        return Err(Error::InvalidConfig("n_sub must be >= 1".into()));
    }
    let dim = pool.dim();
    let mut centers = Vec::with_capacity(pool.len() * n_sub * dim);
    let mut speakers = Vec::with_capacity(pool.len());
    for class in 0..pool.len() {
        let (id, utts) = pool.speaker(class);
        if utts.is_empty() {
            return Err(Error::InsufficientData(format!(
                "speaker {} has no utterances",
                id.name
            )));
        }
        let normed: Vec<Vec<f64>> = utts
            .iter()
            .map(|u| u.normalized().map(|e| e.values().to_vec()))
            .collect::<Result<_>>()?;
        if n_sub == 1 {
            centers.extend(renormalized_mean(&normed, dim)?);
        } else if normed.len() >= n_sub {
            centers.extend(kmeans_centers(&normed, n_sub, dim, rng)?);
        } else {
            let mean = renormalized_mean(&normed, dim)?;
            for _ in 0..n_sub {
                let mut jittered: Vec<f64> =
                    mean.iter().map(|v| v + 0.01 * rng.normal()).collect();
                let norm = jittered.iter().map(|v| v * v).sum::<f64>().sqrt();
                if norm == 0.0 {
                    return Err(Error::ZeroNorm);
                }
                for v in jittered.iter_mut() {
                    *v /= norm;
                }
                centers.extend(jittered);
            }
        }
        speakers.push(SpeakerId::with_class(id.name.clone(), class));
    }
    ImpostorBank::new(speakers, centers, n_sub, dim)
}

fn renormalized_mean(normed: &[Vec<f64>], dim: usize) -> Result<Vec<f64>> {
    let mut mean = vec![0.0; dim];
    for v in normed {
        for (m, x) in mean.iter_mut().zip(v) {
            *m += x;
        }
    }
    let inv = 1.0 / normed.len() as f64;
    for m in mean.iter_mut() {
        *m *= inv;
    }
    let norm = mean.iter().map(|v| v * v).sum::<f64>().sqrt();
    if norm == 0.0 {
        return Err(Error::ZeroNorm);
    }
    Ok(mean.into_iter().map(|v| v / norm).collect())
}

/// Seeded k-means on unit vectors: init with distinct utterances, assign by
/// highest cosine (lowest index on ties), update with renormalized means,
/// keep the previous center for empty clusters. 10 iterations.
fn kmeans_centers(
    normed: &[Vec<f64>],
    n_sub: usize,
    dim: usize,
    rng: &mut Rng,
) -> Result<Vec<f64>> {
    let init = rng.sample_distinct(normed.len(), n_sub);
    let mut centers: Vec<Vec<f64>> = init.iter().map(|&i| normed[i].clone()).collect();
    for _ in 0..10 {
        let mut sums = vec![vec![0.0; dim]; n_sub];
        let mut counts = vec![0usize; n_sub];
        for v in normed {
            let mut best = 0usize;
            let mut best_cos = f64::NEG_INFINITY;
            for (ci, center) in centers.iter().enumerate() {
                let cos: f64 = center.iter().zip(v).map(|(a, b)| a * b).sum();
                if cos > best_cos {
                    best_cos = cos;
                    best = ci;
                }
            }
            for (s, x) in sums[best].iter_mut().zip(v) {
                *s += x;
            }
            counts[best] += 1;
        }
        for ci in 0..n_sub {
            if counts[ci] == 0 {
                continue;
            }
            let norm = sums[ci].iter().map(|v| v * v).sum::<f64>().sqrt();
            if norm == 0.0 {
                continue;
            }
            for v in sums[ci].iter_mut() {
                *v /= norm;
            }
            centers[ci] = std::mem::take(&mut sums[ci]);
        }
    }
    Ok(centers.into_iter().flatten().collect())
}

/// Inference-time normalized score of a trained bank: top-K statistics of
/// the *margin-free*, min-pooled cohort scores — evaluation speakers are
/// unseen, so no class exists and no margin is ever applied.
pub fn infer_normalized_score(
    e: &Embedding,
    t: &Embedding,
    bank: &ImpostorBank,
    k: usize,
    select: Select,
) -> Result<f64> {
    let raw = cosine(e, t)?;
    let se = scoring::pooled_scores(e, bank, select)?;
    let st = scoring::pooled_scores(t, bank, select)?;
    let e_top = stats_of_top_k(&se, k)?;
    let t_top = stats_of_top_k(&st, k)?;
    Ok(norms::as_norm1(raw, &e_top, &t_top))
}

/// Batch inference for the trainable methods over a trial list, sharing
/// the per-embedding cohort cache (and therefore every arithmetic step)
/// with the classical scorer.
pub fn score_trials_trained<'e, F>(
    method: NormMethod,
    k: usize,
    bank: &ImpostorBank,
    lwb: &LwbParams,
    select: Select,
    trials: &TrialList,
    lookup: F,
) -> Result<Vec<f64>>
where
    F: Fn(&str) -> Option<&'e Embedding> + Sync,
{
    use rayon::prelude::*;
    let cache = CohortCache::build(bank, select, Some(k), trials, lookup)?;
    match method {
        // Identical code path to the classical adaptive S-norm: the trained
        // bank simply supplies the cohort.
        NormMethod::LieTas => trials
            .par_iter()
            .map(|t| norms::score_trial_classic(NormMethod::Asnorm1, &cache, t))
            .collect(),
        NormMethod::LwbTas => trials
            .par_iter()
            .map(|trial| {
                let e = cache.get(&trial.enroll_key())?;
                let t = cache.get(&trial.test_id)?;
                let raw = cosine(&e.embedding, &t.embedding)?;
                let et = e.top.as_ref().expect("cache built with k");
                let tt = t.top.as_ref().expect("cache built with k");
                Ok(lwb_combine(raw, et.mean, et.std, tt.mean, tt.std, lwb))
            })
            .collect(),
        other => Err(Error::InvalidConfig(format!(
            "method {other} is not a trained method"
        ))),
    }
}
