//! Training orchestration: per-epoch frequency estimation, adjusted
//! pseudo-labeling, loss composition, optimizer stepping, and the
//! per-epoch evaluation on a balanced held-out test set.
//!
//! Nothing in the training path touches the unlabeled pool's ground
//! truth; only [`evaluate_pool`] reads it, through the accessor on
//! [`Splits`].

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::adjust::{
    compute_omega, confidence_mask, first_stage_predict, refine_pseudo_label, scale_logits,
    second_stage_weights, FrequencyTable,
};
use crate::config::ExperimentConfig;
use crate::datagen::{
    build_splits_with_test, gen_synthetic_gaussian, ExperimentData, Splits, TestSet,
};
use crate::error::{Error, Result};
use crate::eval::{group_report, MetricsReport};
use crate::losses::{
    balanced_ce_labeled, ce_loss, entropy_reg, masked_pseudo_ce, pairwise_loss, total_loss,
    LossValue, PairTarget,
};
use crate::model::{Gradients, Mlp, Optimizer};
use crate::numerics::{argmax, softmax, softmax_backprop, Matrix};

const MODEL_SEED_OFFSET: u64 = 0x6d6f_64656c;
const COSINE_PAIR_THRESHOLD: f64 = 0.95;

/// Mutable state of one run.
#[derive(Debug, Clone)]
pub struct RunState {
    pub model: Mlp,
    pub optimizer: Optimizer,
    /// Frequency evidence of the current epoch, refreshed at its start.
    pub table: Option<FrequencyTable>,
    pub epoch: usize,
    pub history: Vec<MetricsReport>,
}

/// Mean per-term losses over one epoch's batches.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EpochStats {
    pub epoch: usize,
    pub pair: f64,
    pub ce: f64,
    pub balanced: f64,
    pub reg: f64,
    pub total: f64,
    pub batches: usize,
    /// Fraction of unlabeled samples that passed the confidence gate of
    /// the balanced branch.
    pub masked_fraction: f64,
}

/// Everything a finished run leaves behind.
#[derive(Debug, Clone)]
pub struct RunOutcome {
    pub state: RunState,
    pub stats: Vec<EpochStats>,
}

impl RunOutcome {
    pub fn history(&self) -> &[MetricsReport] {
        &self.state.history
    }
}

/// Materialize the synthetic source and carve out the splits plus the
/// balanced test set for a config.
pub fn prepare_data(cfg: &ExperimentConfig) -> Result<ExperimentData> {
    cfg.validate()?;
    let spec = &cfg.dataset;
    let labeled = spec.labeled_counts()?;
    let mut cap = 0usize;
    for c in 0..spec.total_classes() {
        let needed = if c < spec.known_classes {
            // Labeled plus unlabeled known-class draws, worst case the
            // head count for the unlabeled partition.
            labeled[c] + spec.unlabeled_head + cfg.test_per_class
        } else {
            spec.novel_head + cfg.test_per_class
        };
        cap = cap.max(needed);
    }
    let pools = gen_synthetic_gaussian(
        spec.total_classes(),
        spec.input_dim,
        cfg.separation,
        spec.seed,
        cap,
    )?;
    build_splits_with_test(spec, &pools, cfg.test_per_class)
}

/// Fresh model and optimizer for a config.
pub fn new_run_state(cfg: &ExperimentConfig) -> Result<RunState> {
    cfg.validate()?;
    let dims = cfg.layer_dims();
    let model = Mlp::init(dims, cfg.seed.wrapping_add(MODEL_SEED_OFFSET))?;
    let optimizer = Optimizer::new(cfg.optimizer, dims.num_params())?;
    Ok(RunState {
        model,
        optimizer,
        table: None,
        epoch: 0,
        history: Vec::new(),
    })
}

/// Seed-determined permutation of `0..len` for one epoch. Exposed so
/// tests can reconstruct the exact batch composition.
pub fn epoch_shuffle(seed: u64, epoch: usize, stream: u64, len: usize) -> Vec<usize> {
    let mut order: Vec<usize> = (0..len).collect();
    let mix = seed
        .wrapping_add((epoch as u64 + 1).wrapping_mul(0x9e37_79b9_7f4a_7c15))
        .wrapping_add(stream.wrapping_mul(0x2545_f491_4f6c_dd1d));
    let mut rng = ChaCha8Rng::seed_from_u64(mix);
    order.shuffle(&mut rng);
    order
}

fn gather_rows(m: &Matrix, idx: &[usize]) -> Matrix {
    let mut out = Matrix::zeros(idx.len(), m.cols());
    for (r, &i) in idx.iter().enumerate() {
        out.row_mut(r).copy_from_slice(m.row(i));
    }
    out
}

/// Split `order` into `n` chunks whose sizes differ by at most one.
fn partition(order: &[usize], n: usize) -> Vec<Vec<usize>> {
    let base = order.len() / n;
    let rem = order.len() % n;
    let mut chunks = Vec::with_capacity(n);
    let mut pos = 0;
    for b in 0..n {
        let size = base + usize::from(b < rem);
        chunks.push(order[pos..pos + size].to_vec());
        pos += size;
    }
    chunks
}

fn softmax_rows(logits: &Matrix) -> Result<Matrix> {
    let mut out = Matrix::zeros(logits.rows(), logits.cols());
    for r in 0..logits.rows() {
        let probs = softmax(logits.row(r))?;
        out.row_mut(r).copy_from_slice(&probs);
    }
    Ok(out)
}

fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na: f64 = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb: f64 = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    if na < 1e-12 || nb < 1e-12 {
        return 0.0;
    }
    dot / (na * nb)
}

/// Pair targets for one mixed batch: every labeled pair with agreement
/// decided by the labels, and unlabeled pairs only where the embedding
/// cosine similarity exceeds the threshold (all positives; uncertain
/// pairs are skipped rather than treated as negatives). Cross pairs
/// between the two parts are not formed.
fn build_pairs(
    labels: &[usize],
    unlabeled_embeddings: &Matrix,
    unlabeled_offset: usize,
) -> Vec<PairTarget> {
    let mut pairs = Vec::new();
    for i in 0..labels.len() {
        for j in i + 1..labels.len() {
            pairs.push(PairTarget {
                i,
                j,
                same: labels[i] == labels[j],
            });
        }
    }
    let n_u = unlabeled_embeddings.rows();
    for i in 0..n_u {
        for j in i + 1..n_u {
            if cosine(unlabeled_embeddings.row(i), unlabeled_embeddings.row(j))
                > COSINE_PAIR_THRESHOLD
            {
                pairs.push(PairTarget {
                    i: unlabeled_offset + i,
                    j: unlabeled_offset + j,
                    same: true,
                });
            }
        }
    }
    pairs
}

/// One full epoch: frequency estimation over the unlabeled pool, the
/// stage-one/stage-two factors, then seed-shuffled mixed batches with a
/// forward/loss/backward/step cycle each. Deterministic given the seed.
pub fn train_epoch(
    state: &mut RunState,
    splits: &Splits,
    cfg: &ExperimentConfig,
) -> Result<EpochStats> {
    let c_k = splits.known_classes;
    let c_t = splits.total_classes();
    let epoch = state.epoch;
    let adj = &cfg.adjust;

    // (1) Frequency estimation: plain argmax over the whole pool.
    let pool_preds = if splits.unlabeled_features.rows() > 0 {
        let logits = state.model.forward(&splits.unlabeled_features)?.logits;
        (0..logits.rows()).map(|r| argmax(logits.row(r))).collect()
    } else {
        Vec::new()
    };
    let table = FrequencyTable::build(splits.labeled_class_counts(), &pool_preds, c_t)?;

    // (2) Stage-one factors and stage-two weights.
    let omega = if cfg.baseline_mode {
        vec![1.0; c_k]
    } else {
        compute_omega(&table.labeled_counts, c_t, cfg.dataset.input_dim)?
    };
    let weights = if cfg.baseline_mode {
        vec![1.0; c_t]
    } else {
        second_stage_weights(&table.ratios, adj.alpha, adj.beta)?
    };
    state.table = Some(table);

    // (3) Mixed batches from seed-shuffled labeled/unlabeled orders.
    let m_l = splits.labeled_features.rows();
    let m_u = splits.unlabeled_features.rows();
    let n_batches = (m_l + m_u).div_ceil(cfg.batch_size).max(1);
    let order_l = epoch_shuffle(cfg.seed, epoch, 0, m_l);
    let order_u = epoch_shuffle(cfg.seed, epoch, 1, m_u);
    let chunks_l = partition(&order_l, n_batches);
    let chunks_u = partition(&order_u, n_batches);

    let mut sums = [0.0f64; 5];
    let mut masked_in = 0usize;
    let mut masked_total = 0usize;

    for (chunk_l, chunk_u) in chunks_l.iter().zip(&chunks_u) {
        let n_l = chunk_l.len();
        let n_u = chunk_u.len();
        let n = n_l + n_u;
        if n == 0 {
            continue;
        }
        let x_l = gather_rows(&splits.labeled_features, chunk_l);
        let y_l: Vec<usize> = chunk_l.iter().map(|&i| splits.labeled_labels[i]).collect();
        let x_u = gather_rows(&splits.unlabeled_features, chunk_u);

        let cache_l = if n_l > 0 {
            Some(state.model.forward(&x_l)?)
        } else {
            None
        };
        let cache_u = if n_u > 0 {
            Some(state.model.forward(&x_u)?)
        } else {
            None
        };

        // Full-batch logits (labeled rows first) and their probabilities.
        let mut logits = Matrix::zeros(n, c_t);
        if let Some(cl) = &cache_l {
            for r in 0..n_l {
                logits.row_mut(r).copy_from_slice(cl.logits.row(r));
            }
        }
        if let Some(cu) = &cache_u {
            for r in 0..n_u {
                logits.row_mut(n_l + r).copy_from_slice(cu.logits.row(r));
            }
        }
        let probs = softmax_rows(&logits)?;

        // Pseudo-labels for the unlabeled part. The plain branch uses
        // raw argmax; the balanced branch uses refined labels on the
        // stage-two scaled logits.
        let mut plain_labels = vec![0usize; n_u];
        let mut plain_mask = vec![false; n_u];
        let mut refined_labels = vec![0usize; n_u];
        let mut refined_mask = vec![false; n_u];
        let mut scaled = Matrix::zeros(n_u, c_t);
        if let Some(cu) = &cache_u {
            for r in 0..n_u {
                let row = cu.logits.row(r);
                plain_labels[r] = argmax(row);
                plain_mask[r] = confidence_mask(&softmax(row)?, adj.rho);
                refined_labels[r] = if cfg.baseline_mode {
                    plain_labels[r]
                } else {
                    refine_pseudo_label(row, &omega, adj.tau2)?
                };
                let srow = scale_logits(row, &weights)?;
                refined_mask[r] = confidence_mask(&softmax(&srow)?, adj.rho);
                scaled.row_mut(r).copy_from_slice(&srow);
            }
            masked_in += refined_mask.iter().filter(|&&m| m).count();
            masked_total += n_u;
        }

        // Plain cross-entropy branch: true labels plus gated pseudo
        // labels, each part averaged over its own samples.
        let mut ce = LossValue::zero(n, c_t);
        if n_l > 0 {
            let part = ce_loss(&logits.slice_rows(0, n_l), &y_l)?;
            ce.value += part.value;
            copy_rows(&mut ce.grad, &part.grad, 0);
        }
        if n_u > 0 {
            let part = masked_pseudo_ce(&logits.slice_rows(n_l, n), &plain_labels, &plain_mask)?;
            ce.value += part.value;
            copy_rows(&mut ce.grad, &part.grad, n_l);
        }

        // Balanced branch: prior-shifted labeled loss plus the gated
        // refined-label loss on scaled logits, chained back through the
        // elementwise scaling.
        let mut balanced = LossValue::zero(n, c_t);
        if n_l > 0 {
            let part = balanced_ce_labeled(&logits.slice_rows(0, n_l), &y_l, &omega, adj.tau1)?;
            balanced.value += part.value;
            copy_rows(&mut balanced.grad, &part.grad, 0);
        }
        if n_u > 0 {
            let mut part = masked_pseudo_ce(&scaled, &refined_labels, &refined_mask)?;
            for r in 0..n_u {
                for (c, &w) in weights.iter().enumerate() {
                    part.grad.set(r, c, part.grad.get(r, c) * w);
                }
            }
            balanced.value += part.value;
            copy_rows(&mut balanced.grad, &part.grad, n_l);
        }

        // Pairwise and entropy terms on probabilities, then pulled back
        // to logit space.
        let embeddings_u = cache_u
            .as_ref()
            .map(|c| c.embeddings.clone())
            .unwrap_or_else(|| Matrix::zeros(0, cfg.model.embed));
        let pairs = build_pairs(&y_l, &embeddings_u, n_l);
        let pair = pull_back(pairwise_loss(&probs, &pairs)?, &probs);
        let reg = pull_back(entropy_reg(&probs)?, &probs);

        let total = total_loss(&pair, &ce, &balanced, &reg, adj.lambda1, adj.lambda2)?;
        sums[0] += pair.value;
        sums[1] += ce.value;
        sums[2] += balanced.value;
        sums[3] += reg.value;
        sums[4] += total.value;

        // Backward through each sub-batch and one optimizer step.
        let mut grads = Gradients::zeros(&state.model.dims());
        if let Some(cl) = &cache_l {
            let g = total.grad.slice_rows(0, n_l);
            grads.add_assign(&state.model.backward(&x_l, cl, &g)?);
        }
        if let Some(cu) = &cache_u {
            let g = total.grad.slice_rows(n_l, n);
            grads.add_assign(&state.model.backward(&x_u, cu, &g)?);
        }
        state.optimizer.step(&mut state.model, &grads)?;
    }

    state.epoch += 1;
    let b = n_batches as f64;
    Ok(EpochStats {
        epoch,
        pair: sums[0] / b,
        ce: sums[1] / b,
        balanced: sums[2] / b,
        reg: sums[3] / b,
        total: sums[4] / b,
        batches: n_batches,
        masked_fraction: if masked_total > 0 {
            masked_in as f64 / masked_total as f64
        } else {
            0.0
        },
    })
}

fn copy_rows(dst: &mut Matrix, src: &Matrix, offset: usize) {
    for r in 0..src.rows() {
        dst.row_mut(offset + r).copy_from_slice(src.row(r));
    }
}

/// Convert a probability-space gradient to logit space row by row.
fn pull_back(loss: LossValue, probs: &Matrix) -> LossValue {
    let mut grad = Matrix::zeros(probs.rows(), probs.cols());
    for r in 0..probs.rows() {
        let g = softmax_backprop(probs.row(r), loss.grad.row(r));
        grad.row_mut(r).copy_from_slice(&g);
    }
    LossValue {
        value: loss.value,
        grad,
    }
}

/// Decision-time adjustment: the stage-one factors, or `None` in
/// baseline mode (plain argmax).
pub fn decision_shift(cfg: &ExperimentConfig, splits: &Splits) -> Result<Option<Vec<f64>>> {
    if cfg.baseline_mode {
        return Ok(None);
    }
    Ok(Some(compute_omega(
        &splits.labeled_class_counts(),
        splits.total_classes(),
        cfg.dataset.input_dim,
    )?))
}

/// Class decisions for a feature matrix: adjusted argmax over all slots
/// when factors are given, plain argmax otherwise.
pub fn predict_classes(
    model: &Mlp,
    features: &Matrix,
    shift: Option<(&[f64], f64)>,
) -> Result<Vec<usize>> {
    if features.rows() == 0 {
        return Ok(Vec::new());
    }
    let logits = model.forward(features)?.logits;
    (0..logits.rows())
        .map(|r| match shift {
            Some((omega, tau)) => refine_pseudo_label(logits.row(r), omega, tau),
            None => Ok(argmax(logits.row(r))),
        })
        .collect()
}

/// Score the model on the held-out test set.
pub fn evaluate_test(
    cfg: &ExperimentConfig,
    model: &Mlp,
    splits: &Splits,
    test: &TestSet,
    epoch: usize,
) -> Result<MetricsReport> {
    let shift = decision_shift(cfg, splits)?;
    let preds = predict_classes(
        model,
        &test.features,
        shift.as_deref().map(|o| (o, cfg.adjust.tau1)),
    )?;
    group_report(
        &preds,
        &test.labels,
        splits.known_classes,
        splits.total_classes(),
        epoch,
    )
}

/// Score the model transductively on the unlabeled pool. This is the
/// only routine that consults the pool's ground truth.
pub fn evaluate_pool(
    cfg: &ExperimentConfig,
    model: &Mlp,
    splits: &Splits,
    epoch: usize,
) -> Result<MetricsReport> {
    let shift = decision_shift(cfg, splits)?;
    let preds = predict_classes(
        model,
        &splits.unlabeled_features,
        shift.as_deref().map(|o| (o, cfg.adjust.tau1)),
    )?;
    group_report(
        &preds,
        splits.pool_ground_truth(),
        splits.known_classes,
        splits.total_classes(),
        epoch,
    )
}

/// Run the full epoch loop on prepared data, evaluating after every
/// epoch on the test set.
pub fn run_on_data(cfg: &ExperimentConfig, data: &ExperimentData) -> Result<RunOutcome> {
    cfg.validate()?;
    let mut state = new_run_state(cfg)?;
    let mut stats = Vec::with_capacity(cfg.epochs);
    for _ in 0..cfg.epochs {
        let epoch_stats = train_epoch(&mut state, &data.splits, cfg)?;
        let report = evaluate_test(cfg, &state.model, &data.splits, &data.test, epoch_stats.epoch)?;
        state.history.push(report);
        stats.push(epoch_stats);
    }
    Ok(RunOutcome { state, stats })
}

/// Generate data per the config and run the experiment on it.
pub fn run_experiment(cfg: &ExperimentConfig) -> Result<RunOutcome> {
    let data = prepare_data(cfg)?;
    run_on_data(cfg, &data)
}

#[derive(Serialize)]
struct Manifest<'a> {
    cache_sha256: &'a str,
    config: &'a ExperimentConfig,
}

/// Manifest making a run reconstructable: the resolved config (seed
/// included) plus a content hash of the dataset cache it consumed.
pub fn manifest_toml(cfg: &ExperimentConfig, cache_sha256: &str) -> Result<String> {
    toml::to_string_pretty(&Manifest {
        cache_sha256,
        config: cfg,
    })
    .map_err(|e| Error::invalid(format!("manifest serialize: {e}")))
}

/// Contents of a parsed run manifest.
#[derive(Debug, Clone, Deserialize)]
pub struct ParsedManifest {
    pub cache_sha256: String,
    pub config: ExperimentConfig,
}

/// Parse a manifest written by [`manifest_toml`] and re-validate the
/// embedded config.
pub fn parse_manifest(text: &str) -> Result<ParsedManifest> {
    let parsed: ParsedManifest =
        toml::from_str(text).map_err(|e| Error::invalid(format!("manifest parse: {e}")))?;
    parsed.config.validate()?;
    Ok(parsed)
}

/// Stage-one prediction over the known slots for every row; the
/// unlabeled-pool view the frequency table is built from uses plain
/// argmax instead, so this is exposed for diagnostics and tests.
pub fn first_stage_over(
    model: &Mlp,
    features: &Matrix,
    omega: &[f64],
    tau1: f64,
) -> Result<Vec<usize>> {
    if features.rows() == 0 {
        return Ok(Vec::new());
    }
    let logits = model.forward(features)?.logits;
    (0..logits.rows())
        .map(|r| first_stage_predict(logits.row(r), omega, tau1))
        .collect()
}
