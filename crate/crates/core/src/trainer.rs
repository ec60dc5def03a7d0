//! SGD training loop: learning-rate schedule, embedding-table gradient
//! multiplier, hard-negative refresh, dev-set evaluation, and checkpoints.

use std::collections::BTreeMap;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::corpus::{encode_text, ParallelCorpus, TokenIds};
use crate::encoder::{encode_corpus, Model, TapeModel};
use crate::error::{Error, Result};
use crate::index::ExactIndex;
use crate::metrics::{precision_at_n, rank_candidates};
use crate::miner::{retrieve_pairs, Direction};
use crate::objective::{mine_hard_negatives, tape_batch_loss, MarginConfig};
use crate::tensor::Mat;

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub batch_size: usize,
    /// (start step, rate) pieces; the rate of the last piece whose start is
    /// <= the current step applies.
    pub lr_schedule: Vec<(u64, f64)>,
    pub max_steps: u64,
    pub embed_grad_multiplier: f64,
    pub margin: MarginConfig,
    pub hard_negatives: usize,
    pub hard_negative_refresh: u64,
    pub hard_negative_pool: usize,
    pub length_penalty_lambda: f64,
    pub seed: u64,
    pub eval_every: u64,
    pub dev_fraction: f64,
    pub early_stop_patience: Option<u64>,
    pub grad_clip: Option<f64>,
}

impl TrainConfig {
    pub fn paper() -> Self {
        TrainConfig {
            batch_size: 100,
            lr_schedule: vec![(0, 0.003), (33_000_000, 0.0003)],
            max_steps: 40_000_000,
            embed_grad_multiplier: 25.0,
            margin: MarginConfig {
                m: 0.3,
                bidirectional: true,
            },
            hard_negatives: 5,
            hard_negative_refresh: 1_000_000,
            hard_negative_pool: 100_000,
            length_penalty_lambda: 11.0,
            seed: 0,
            eval_every: 100_000,
            dev_fraction: 0.1,
            early_stop_patience: None,
            grad_clip: None,
        }
    }

    pub fn desk() -> Self {
        TrainConfig {
            batch_size: 32,
            lr_schedule: vec![(0, 0.003)],
            max_steps: 2500,
            embed_grad_multiplier: 25.0,
            margin: MarginConfig {
                m: 0.3,
                bidirectional: true,
            },
            hard_negatives: 3,
            hard_negative_refresh: 100,
            hard_negative_pool: 2_000,
            length_penalty_lambda: 0.0,
            seed: 0,
            eval_every: 500,
            dev_fraction: 0.1,
            early_stop_patience: None,
            grad_clip: None,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.batch_size < 2 {
            return Err(Error::InvalidConfig("batch_size must be >= 2".into()));
        }
        if self.lr_schedule.is_empty() {
            return Err(Error::InvalidConfig("empty learning-rate schedule".into()));
        }
        if self.lr_schedule[0].0 != 0 {
            return Err(Error::InvalidConfig(
                "first schedule piece must start at step 0".into(),
            ));
        }
        for w in self.lr_schedule.windows(2) {
            if w[1].0 <= w[0].0 {
                return Err(Error::InvalidConfig(
                    "schedule starts must be strictly increasing".into(),
                ));
            }
        }
        if self.lr_schedule.iter().any(|&(_, r)| r <= 0.0 || !r.is_finite()) {
            return Err(Error::InvalidConfig("learning rates must be positive".into()));
        }
        if self.max_steps == 0 {
            return Err(Error::InvalidConfig("max_steps must be >= 1".into()));
        }
        if !(0.0..1.0).contains(&self.dev_fraction) {
            return Err(Error::InvalidConfig("dev_fraction must be in [0, 1)".into()));
        }
        if self.embed_grad_multiplier <= 0.0 {
            return Err(Error::InvalidConfig(
                "embed_grad_multiplier must be positive".into(),
            ));
        }
        if self.hard_negatives > 0 && self.hard_negative_refresh == 0 {
            return Err(Error::InvalidConfig(
                "hard_negative_refresh must be >= 1 when mining negatives".into(),
            ));
        }
        self.margin.validate()?;
        Ok(())
    }
}

/// Rate of the last schedule piece starting at or before `step`.
pub fn lr_at(schedule: &[(u64, f64)], step: u64) -> f64 {
    schedule
        .iter()
        .take_while(|&&(start, _)| start <= step)
        .last()
        .map(|&(_, r)| r)
        .unwrap_or_else(|| schedule[0].1)
}

/// One SGD update: `p -= lr * g`, with table gradients additionally scaled
/// by `table_multiplier`. Gradients must be in `visit` order.
pub fn sgd_step(
    model: &mut Model,
    grads: &[(String, bool, Mat)],
    lr: f64,
    table_multiplier: f64,
) -> Result<()> {
    for (_, g) in grads.iter().map(|(n, _, g)| (n, g)) {
        if !g.is_finite() {
            return Err(Error::NonFinite("gradient".into()));
        }
    }
    let mut i = 0;
    let mut err = None;
    model.visit_mut(|name, is_table, p| {
        if err.is_some() {
            return;
        }
        let Some((gname, _, g)) = grads.get(i) else {
            err = Some(Error::ShapeMismatch("missing gradient entries".into()));
            return;
        };
        if gname != name || g.rows() != p.rows() || g.cols() != p.cols() {
            err = Some(Error::ShapeMismatch(format!(
                "gradient {gname} does not match parameter {name}"
            )));
            return;
        }
        let scale = if is_table { lr * table_multiplier } else { lr };
        p.scaled_add_assign(g, -scale);
        i += 1;
    });
    if let Some(e) = err {
        return Err(e);
    }
    if i != grads.len() {
        return Err(Error::ShapeMismatch("extra gradient entries".into()));
    }
    Ok(())
}

/// Scales all gradients so their global l2 norm is at most `max_norm`.
fn clip_grads(grads: &mut [(String, bool, Mat)], max_norm: f64) {
    let total: f64 = grads.iter().map(|(_, _, g)| g.frobenius_sq()).sum();
    let norm = total.sqrt();
    if norm > max_norm && norm > 0.0 {
        let s = max_norm / norm;
        for (_, _, g) in grads.iter_mut() {
            *g = g.scale(s);
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct HistoryEntry {
    pub step: u64,
    pub loss: f64,
    pub dev_p1: Option<f64>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Checkpoint {
    pub step: u64,
    pub model: Model,
    pub history: Vec<HistoryEntry>,
}

impl Checkpoint {
    pub fn save(&self, path: &Path) -> Result<()> {
        let file = std::fs::File::create(path)?;
        serde_json::to_writer(std::io::BufWriter::new(file), self)
            .map_err(|e| Error::Other(format!("checkpoint serialization: {e}")))?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        // parse from a slice: reader-based JSON float parsing is not
        // guaranteed to round-trip bit-exactly
        let bytes = std::fs::read(path)?;
        serde_json::from_slice(&bytes).map_err(|e| Error::Other(format!("checkpoint parse: {e}")))
    }
}

/// P@1 of source-to-target retrieval for id'd sentence pairs.
pub fn eval_p1(model: &Model, pairs: &[crate::corpus::PairRecord]) -> Result<f64> {
    if pairs.is_empty() {
        return Err(Error::EmptyInput("empty evaluation set".into()));
    }
    let src: Vec<(String, String)> = pairs
        .iter()
        .map(|p| (p.src_id.clone(), p.src_text.clone()))
        .collect();
    let tgt: Vec<(String, String)> = pairs
        .iter()
        .map(|p| (p.tgt_id.clone(), p.tgt_text.clone()))
        .collect();
    let src_emb = encode_corpus(&src, model, 64)?;
    let tgt_emb = encode_corpus(&tgt, model, 64)?;
    let index = ExactIndex::build(&tgt_emb)?;
    let cands = retrieve_pairs(&src_emb, &index, 1, Direction::Forward);
    let ranked = rank_candidates(&cands);
    let gold: BTreeMap<String, String> = pairs
        .iter()
        .map(|p| (p.src_id.clone(), p.tgt_id.clone()))
        .collect();
    precision_at_n(&ranked, &gold, 1)
}

/// Trains the model on the corpus with plain SGD. Pairs are split into train
/// and dev by a seeded shuffle; batches reshuffle every epoch. When periodic
/// dev evaluation is enabled (`eval_every > 0`), the checkpoint that scored
/// the best dev P@1 is returned; otherwise the final one. The loss history
/// always covers the full run.
pub fn train(corpus: &ParallelCorpus, model: Model, cfg: &TrainConfig) -> Result<Checkpoint> {
    cfg.validate()?;
    corpus.validate()?;
    if corpus.pairs.is_empty() {
        return Err(Error::EmptyInput("empty training corpus".into()));
    }
    let mut model = model;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);

    let mut order: Vec<usize> = (0..corpus.pairs.len()).collect();
    order.shuffle(&mut rng);
    let n_dev = ((corpus.pairs.len() as f64) * cfg.dev_fraction).floor() as usize;
    let (dev_idx, train_idx) = order.split_at(n_dev);
    if train_idx.len() < 2 {
        return Err(Error::InvalidConfig(
            "need at least 2 training pairs after the dev split".into(),
        ));
    }
    let dev_pairs: Vec<crate::corpus::PairRecord> =
        dev_idx.iter().map(|&i| corpus.pairs[i].clone()).collect();
    let mut train_idx: Vec<usize> = train_idx.to_vec();

    // token ids are tokenizer-dependent only, computed once
    let tokens: Vec<(TokenIds, TokenIds)> = corpus
        .pairs
        .iter()
        .map(|p| {
            (
                encode_text(&p.src_text, &model.vocab, &model.tokenizer),
                encode_text(&p.tgt_text, &model.vocab, &model.tokenizer),
            )
        })
        .collect();
    let tgt_tokens_by_id: BTreeMap<&str, &TokenIds> = corpus
        .pairs
        .iter()
        .zip(&tokens)
        .map(|(p, (_, t))| (p.tgt_id.as_str(), t))
        .collect();
    let src_tokens_by_id: BTreeMap<&str, &TokenIds> = corpus
        .pairs
        .iter()
        .zip(&tokens)
        .map(|(p, (s, _))| (p.src_id.as_str(), s))
        .collect();

    let mut fwd_negs = crate::objective::HardNegativeSet::default();
    let mut bwd_negs = crate::objective::HardNegativeSet::default();

    let mut history = Vec::new();
    let mut step: u64 = 0;
    let mut best_dev = f64::NEG_INFINITY;
    let mut best_ckpt: Option<(u64, Model)> = None;
    let mut since_best: u64 = 0;
    let mut stop = false;

    'epochs: while !stop {
        train_idx.shuffle(&mut rng);
        for batch in train_idx.chunks(cfg.batch_size) {
            if batch.len() < 2 {
                continue;
            }
            if step >= cfg.max_steps {
                break 'epochs;
            }
            if cfg.hard_negatives > 0 && step % cfg.hard_negative_refresh == 0 {
                let pool_n = cfg.hard_negative_pool.min(train_idx.len());
                let pool_pairs: Vec<&crate::corpus::PairRecord> =
                    train_idx[..pool_n].iter().map(|&i| &corpus.pairs[i]).collect();
                let srcs: Vec<(String, String)> = pool_pairs
                    .iter()
                    .map(|p| (p.src_id.clone(), p.src_text.clone()))
                    .collect();
                let tgts: Vec<(String, String)> = pool_pairs
                    .iter()
                    .map(|p| (p.tgt_id.clone(), p.tgt_text.clone()))
                    .collect();
                let src_emb = encode_corpus(&srcs, &model, 64)?;
                let tgt_emb = encode_corpus(&tgts, &model, 64)?;
                let fwd_gold: BTreeMap<String, String> = pool_pairs
                    .iter()
                    .map(|p| (p.src_id.clone(), p.tgt_id.clone()))
                    .collect();
                let bwd_gold: BTreeMap<String, String> = pool_pairs
                    .iter()
                    .map(|p| (p.tgt_id.clone(), p.src_id.clone()))
                    .collect();
                fwd_negs = mine_hard_negatives(&src_emb, &tgt_emb, &fwd_gold, cfg.hard_negatives)?;
                bwd_negs = mine_hard_negatives(&tgt_emb, &src_emb, &bwd_gold, cfg.hard_negatives)?;
            }

            let src_batch: Vec<TokenIds> =
                batch.iter().map(|&i| tokens[i].0.clone()).collect();
            let tgt_batch: Vec<TokenIds> =
                batch.iter().map(|&i| tokens[i].1.clone()).collect();

            let (hard_fwd, hard_bwd) = if cfg.hard_negatives > 0 {
                let fwd_lists: Vec<Vec<&str>> = batch
                    .iter()
                    .map(|&i| {
                        fwd_negs
                            .negatives
                            .get(&corpus.pairs[i].src_id)
                            .map(|v| v.iter().map(String::as_str).collect())
                            .unwrap_or_default()
                    })
                    .collect();
                let bwd_lists: Vec<Vec<&str>> = batch
                    .iter()
                    .map(|&i| {
                        bwd_negs
                            .negatives
                            .get(&corpus.pairs[i].tgt_id)
                            .map(|v| v.iter().map(String::as_str).collect())
                            .unwrap_or_default()
                    })
                    .collect();
                // truncate to a rectangular batch
                let mf = fwd_lists.iter().map(Vec::len).min().unwrap_or(0);
                let mb = bwd_lists.iter().map(Vec::len).min().unwrap_or(0);
                let hf: Vec<Vec<TokenIds>> = fwd_lists
                    .iter()
                    .map(|l| l[..mf].iter().map(|id| tgt_tokens_by_id[id].clone()).collect())
                    .collect();
                let hb: Vec<Vec<TokenIds>> = bwd_lists
                    .iter()
                    .map(|l| l[..mb].iter().map(|id| src_tokens_by_id[id].clone()).collect())
                    .collect();
                (hf, hb)
            } else {
                (vec![Vec::new(); batch.len()], vec![Vec::new(); batch.len()])
            };

            let mut tm = TapeModel::new(&model);
            let root = tape_batch_loss(
                &mut tm,
                &src_batch,
                &tgt_batch,
                &cfg.margin,
                &hard_fwd,
                &hard_bwd,
                cfg.length_penalty_lambda,
            )?;
            let loss = tm.tape.value(root).scalar();
            if !loss.is_finite() {
                return Err(Error::NonFinite(format!("loss at step {step}")));
            }
            let mut grads = tm.param_grads(root);
            drop(tm);
            if let Some(c) = cfg.grad_clip {
                clip_grads(&mut grads, c);
            }
            let lr = lr_at(&cfg.lr_schedule, step);
            sgd_step(&mut model, &grads, lr, cfg.embed_grad_multiplier)?;
            step += 1;

            let eval_now = cfg.eval_every > 0 && step % cfg.eval_every == 0 && !dev_pairs.is_empty();
            let dev_p1 = if eval_now {
                Some(eval_p1(&model, &dev_pairs)?)
            } else {
                None
            };
            history.push(HistoryEntry { step, loss, dev_p1 });
            if let Some(p1) = dev_p1 {
                if p1 > best_dev {
                    best_dev = p1;
                    since_best = 0;
                    best_ckpt = Some((step, model.clone()));
                } else {
                    since_best += 1;
                    if let Some(patience) = cfg.early_stop_patience {
                        if since_best >= patience {
                            stop = true;
                            break;
                        }
                    }
                }
            }
            if step >= cfg.max_steps {
                break 'epochs;
            }
        }
    }

    // with dev evaluation enabled, keep the checkpoint that scored best on
    // the dev split (the earliest one on ties); otherwise the final model
    let (step, model) = match best_ckpt {
        Some((s, m)) => (s, m),
        None => (step, model),
    };
    Ok(Checkpoint {
        step,
        model,
        history,
    })
}
