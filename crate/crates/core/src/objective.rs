//! Ranking objective: in-batch sampled softmax NLL, the additive margin
//! variant, the bidirectional combination, hard negatives, and the vector
//! length penalty.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::encoder::{EmbeddingMatrix, TapeModel};
use crate::corpus::TokenIds;
use crate::error::{Error, Result};
use crate::tape::NodeId;
use crate::tensor::{dot, log_sum_exp, Mat};

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MarginConfig {
    pub m: f64,
    pub bidirectional: bool,
}

impl Default for MarginConfig {
    fn default() -> Self {
        MarginConfig {
            m: 0.3,
            bidirectional: true,
        }
    }
}

impl MarginConfig {
    pub fn validate(&self) -> Result<()> {
        if self.m < 0.0 {
            return Err(Error::InvalidConfig("margin must be >= 0".into()));
        }
        Ok(())
    }
}

/// N x (N + H) pairwise scores; column j < N is in-batch target j, columns
/// >= N are per-row hard negatives.
#[derive(Debug, Clone)]
pub struct ScoreMatrix {
    pub scores: Mat,
    pub batch: usize,
}

impl ScoreMatrix {
    pub fn hard_columns(&self) -> usize {
        self.scores.cols() - self.batch
    }
}

/// scores[i][j] = X_i . Y_j
pub fn score_matrix(x: &Mat, y: &Mat) -> Result<ScoreMatrix> {
    if x.cols() != y.cols() || x.rows() != y.rows() {
        return Err(Error::ShapeMismatch(format!(
            "score_matrix {}x{} vs {}x{}",
            x.rows(),
            x.cols(),
            y.rows(),
            y.cols()
        )));
    }
    Ok(ScoreMatrix {
        scores: x.matmul_transpose(y)?,
        batch: x.rows(),
    })
}

/// Appends per-row hard-negative score columns.
pub fn append_hard_columns(s: &ScoreMatrix, hard: &Mat) -> Result<ScoreMatrix> {
    if hard.rows() != s.batch {
        return Err(Error::ShapeMismatch(format!(
            "hard columns rows {} vs batch {}",
            hard.rows(),
            s.batch
        )));
    }
    let mut out = Mat::zeros(s.batch, s.scores.cols() + hard.cols());
    for r in 0..s.batch {
        out.row_mut(r)[..s.scores.cols()].copy_from_slice(s.scores.row(r));
        out.row_mut(r)[s.scores.cols()..].copy_from_slice(hard.row(r));
    }
    Ok(ScoreMatrix {
        scores: out,
        batch: s.batch,
    })
}

/// Subtracts the margin from positive (diagonal) entries only.
pub fn apply_additive_margin(s: &ScoreMatrix, cfg: &MarginConfig) -> ScoreMatrix {
    let mut scores = s.scores.clone();
    for i in 0..s.batch.min(scores.cols()) {
        scores.set(i, i, scores.get(i, i) - cfg.m);
    }
    ScoreMatrix {
        scores,
        batch: s.batch,
    }
}

/// Mean over rows of the additive-margin sampled softmax NLL: the positive
/// logit is reduced by the margin, every other column (in-batch and hard)
/// stays in the denominator.
pub fn directional_ams_loss(s: &ScoreMatrix, cfg: &MarginConfig) -> Result<f64> {
    if s.batch < 2 && s.hard_columns() == 0 {
        return Err(Error::InvalidConfig(
            "need at least one negative per row".into(),
        ));
    }
    let adjusted = apply_additive_margin(s, cfg);
    let mut total = 0.0;
    for i in 0..adjusted.batch {
        let row = adjusted.scores.row(i);
        total += log_sum_exp(row) - row[i];
    }
    Ok(total / adjusted.batch as f64)
}

/// Forward loss plus (when `cfg.bidirectional`) the same loss with source and
/// target roles swapped. `hard` carries per-direction hard-negative score
/// columns, already aligned with the rows of each direction.
pub fn bidirectional_ams_loss(
    x: &Mat,
    y: &Mat,
    cfg: &MarginConfig,
    hard: Option<(&Mat, &Mat)>,
) -> Result<f64> {
    let fwd = score_matrix(x, y)?;
    let fwd = match hard {
        Some((hf, _)) => append_hard_columns(&fwd, hf)?,
        None => fwd,
    };
    let mut loss = directional_ams_loss(&fwd, cfg)?;
    if cfg.bidirectional {
        let bwd = score_matrix(y, x)?;
        let bwd = match hard {
            Some((_, hb)) => append_hard_columns(&bwd, hb)?,
            None => bwd,
        };
        loss += directional_ams_loss(&bwd, cfg)?;
    }
    Ok(loss)
}

/// lambda times the mean pre-normalization l2 norm.
pub fn length_penalty(pre_norm_l2s: &[f64], lambda: f64) -> f64 {
    if pre_norm_l2s.is_empty() || lambda == 0.0 {
        return 0.0;
    }
    lambda * pre_norm_l2s.iter().sum::<f64>() / pre_norm_l2s.len() as f64
}

/// Per source id, an ordered list of hard-negative target ids (gold excluded).
#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct HardNegativeSet {
    pub negatives: BTreeMap<String, Vec<String>>,
}

/// Top-M highest-cosine pool entries for each source, excluding its gold
/// target, by exact search over the pool.
pub fn mine_hard_negatives(
    sources: &EmbeddingMatrix,
    pool: &EmbeddingMatrix,
    gold: &BTreeMap<String, String>,
    m: usize,
) -> Result<HardNegativeSet> {
    if m == 0 {
        return Err(Error::InvalidConfig("M must be >= 1".into()));
    }
    if pool.ids.is_empty() {
        return Err(Error::EmptyInput("empty hard-negative pool".into()));
    }
    let mut set = HardNegativeSet::default();
    for (r, src_id) in sources.ids.iter().enumerate() {
        let gold_tgt = gold.get(src_id);
        let q = sources.vectors.row(r);
        let mut scored: Vec<(f64, &String)> = pool
            .ids
            .iter()
            .enumerate()
            .filter(|(_, id)| Some(*id) != gold_tgt)
            .map(|(i, id)| (dot(q, pool.vectors.row(i)), id))
            .collect();
        scored.sort_by(|a, b| b.0.total_cmp(&a.0).then_with(|| a.1.cmp(b.1)));
        scored.truncate(m);
        set.negatives
            .insert(src_id.clone(), scored.into_iter().map(|(_, id)| id.clone()).collect());
    }
    Ok(set)
}

/// Tape-side batch loss used by the trainer. Builds both directions on one
/// tape so a single backward pass yields all parameter gradients.
///
/// `hard_fwd[i]` / `hard_bwd[i]` hold the token ids of row i's mined
/// negatives (targets for the forward direction, sources for the backward).
/// Returns `(loss node, mean pre-norm node)`.
pub fn tape_batch_loss(
    tm: &mut TapeModel,
    src: &[TokenIds],
    tgt: &[TokenIds],
    cfg: &MarginConfig,
    hard_fwd: &[Vec<TokenIds>],
    hard_bwd: &[Vec<TokenIds>],
    length_penalty_lambda: f64,
) -> Result<NodeId> {
    let n = src.len();
    if n != tgt.len() || n == 0 {
        return Err(Error::ShapeMismatch("batch sides differ or empty".into()));
    }
    if n < 2 && hard_fwd.iter().all(|h| h.is_empty()) {
        return Err(Error::InvalidConfig(
            "need at least one negative per row".into(),
        ));
    }

    let mut x_rows = Vec::with_capacity(n);
    let mut y_rows = Vec::with_capacity(n);
    let mut pre_norms = Vec::new();
    for ids in src {
        let (e, p) = tm.sentence(ids)?;
        x_rows.push(e);
        pre_norms.push(p);
    }
    for ids in tgt {
        let (e, p) = tm.sentence(ids)?;
        y_rows.push(e);
        pre_norms.push(p);
    }
    let x = tm.tape.concat_rows(&x_rows);
    let y = tm.tape.concat_rows(&y_rows);

    let pos: Vec<usize> = (0..n).collect();
    let mut direction_loss = |q: NodeId, base: NodeId, hard: &[Vec<TokenIds>]| -> Result<NodeId> {
        let scores = tm.tape.matmul_transpose(q, base)?;
        let scores = tm.tape.diag_add_scalar(scores, -cfg.m);
        let scores = if hard.iter().any(|h| !h.is_empty()) {
            let m = hard.iter().map(|h| h.len()).max().unwrap();
            if hard.iter().any(|h| h.len() != m) {
                return Err(Error::ShapeMismatch(
                    "ragged hard-negative lists in batch".into(),
                ));
            }
            let mut neg_rows = Vec::with_capacity(n * m);
            for negs in hard {
                for ids in negs {
                    let (e, _) = tm.sentence(ids)?;
                    neg_rows.push(e);
                }
            }
            let negs = tm.tape.concat_rows(&neg_rows);
            let all = tm.tape.matmul_transpose(q, negs)?; // n x (n*m)
            let idx: Vec<Vec<usize>> = (0..n).map(|i| (i * m..(i + 1) * m).collect()).collect();
            let own = tm.tape.gather_cols(all, &idx);
            tm.tape.concat_cols(&[scores, own])
        } else {
            scores
        };
        Ok(tm.tape.sampled_softmax_nll(scores, &pos))
    };

    let mut loss = direction_loss(x, y, hard_fwd)?;
    if cfg.bidirectional {
        let bwd = direction_loss(y, x, hard_bwd)?;
        loss = tm.tape.add(loss, bwd);
    }
    if length_penalty_lambda > 0.0 {
        let norms = tm.tape.concat_rows(&pre_norms);
        let mean = tm.tape.mean_rows(norms);
        let penalty = tm.tape.scale(mean, length_penalty_lambda);
        loss = tm.tape.add(loss, penalty);
    }
    Ok(loss)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn mc(m: f64) -> MarginConfig {
        MarginConfig {
            m,
            bidirectional: true,
        }
    }

    fn rand_unit_rows(rng: &mut ChaCha8Rng, n: usize, d: usize) -> Mat {
        let mut m = Mat::zeros(n, d);
        for r in 0..n {
            let mut row: Vec<f64> = (0..d).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let norm = crate::tensor::l2_norm(&row);
            for x in &mut row {
                *x /= norm;
            }
            m.row_mut(r).copy_from_slice(&row);
        }
        m
    }

    #[test]
    fn score_matrix_examples() {
        let eye = Mat::from_vec(2, 2, vec![1.0, 0.0, 0.0, 1.0]);
        let s = score_matrix(&eye, &eye).unwrap();
        assert_eq!(s.scores, Mat::from_vec(2, 2, vec![1.0, 0.0, 0.0, 1.0]));

        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let x = rand_unit_rows(&mut rng, 3, 4);
        let y = rand_unit_rows(&mut rng, 3, 4);
        let s = score_matrix(&x, &y).unwrap();
        for i in 0..3 {
            assert!((s.scores.get(i, i) - dot(x.row(i), y.row(i))).abs() < 1e-12);
            // unit rows: diagonal of self-similarity is 1
        }
        // scalar triple-loop oracle
        for i in 0..3 {
            for j in 0..3 {
                let mut acc = 0.0;
                for k in 0..4 {
                    acc += x.get(i, k) * y.get(j, k);
                }
                assert!((s.scores.get(i, j) - acc).abs() < 1e-12);
            }
        }

        let self_sim = score_matrix(&x, &x).unwrap();
        for i in 0..3 {
            assert!((self_sim.scores.get(i, i) - 1.0).abs() < 1e-9);
        }

        let bad = Mat::zeros(3, 5);
        assert!(score_matrix(&x, &bad).is_err());
    }

    #[test]
    fn margin_touches_diagonal_only() {
        let eye = ScoreMatrix {
            scores: Mat::from_vec(2, 2, vec![1.0, 0.0, 0.0, 1.0]),
            batch: 2,
        };
        let out = apply_additive_margin(&eye, &mc(0.3));
        assert_eq!(out.scores, Mat::from_vec(2, 2, vec![0.7, 0.0, 0.0, 0.7]));

        let unchanged = apply_additive_margin(&eye, &mc(0.0));
        assert_eq!(unchanged.scores, eye.scores);

        // hard-negative columns bitwise unchanged
        let hard = Mat::from_vec(2, 2, vec![0.9, -0.2, 0.4, 0.1]);
        let with_hard = append_hard_columns(&eye, &hard).unwrap();
        let out = apply_additive_margin(&with_hard, &mc(0.5));
        for r in 0..2 {
            for c in 2..4 {
                assert_eq!(out.scores.get(r, c).to_bits(), hard.get(r, c - 2).to_bits());
            }
        }
    }

    #[test]
    fn directional_loss_fixtures() {
        let eye = ScoreMatrix {
            scores: Mat::from_vec(2, 2, vec![1.0, 0.0, 0.0, 1.0]),
            batch: 2,
        };
        let l0 = directional_ams_loss(&eye, &mc(0.0)).unwrap();
        assert!((l0 - (1.0 + (-1.0f64).exp()).ln()).abs() < 1e-12);
        assert!((l0 - 0.31326).abs() < 1e-5);

        let l3 = directional_ams_loss(&eye, &mc(0.3)).unwrap();
        assert!((l3 - (1.0 + (-0.7f64).exp()).ln()).abs() < 1e-12);
        assert!((l3 - 0.40319).abs() < 1e-5);

        let flat = ScoreMatrix {
            scores: Mat::filled(4, 4, 0.5),
            batch: 4,
        };
        let lf = directional_ams_loss(&flat, &mc(0.0)).unwrap();
        assert!((lf - 4f64.ln()).abs() < 1e-12);

        // no negatives at all
        let solo = ScoreMatrix {
            scores: Mat::from_vec(1, 1, vec![1.0]),
            batch: 1,
        };
        assert!(directional_ams_loss(&solo, &mc(0.0)).is_err());
    }

    #[test]
    fn margin_zero_reduces_to_plain_softmax_exactly() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let s = ScoreMatrix {
            scores: rand_unit_rows(&mut rng, 5, 5),
            batch: 5,
        };
        // Eq. 7 at m=0 is Eq. 3: compute the plain NLL independently
        let mut expect = 0.0;
        for i in 0..5 {
            let row = s.scores.row(i);
            expect += log_sum_exp(row) - row[i];
        }
        expect /= 5.0;
        let got = directional_ams_loss(&s, &mc(0.0)).unwrap();
        assert_eq!(got.to_bits(), expect.to_bits());
    }

    #[test]
    fn margin_monotonicity() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let s = ScoreMatrix {
            scores: rand_unit_rows(&mut rng, 6, 6),
            batch: 6,
        };
        let mut prev = directional_ams_loss(&s, &mc(0.0)).unwrap();
        for m in [0.1, 0.3, 0.5] {
            let l = directional_ams_loss(&s, &mc(m)).unwrap();
            assert!(l > prev, "loss not strictly increasing at m={m}");
            prev = l;
        }
    }

    #[test]
    fn bidirectional_symmetry_and_fixture() {
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let x = rand_unit_rows(&mut rng, 4, 6);
        let y = rand_unit_rows(&mut rng, 4, 6);
        let cfg = mc(0.3);
        let xy = bidirectional_ams_loss(&x, &y, &cfg, None).unwrap();
        let yx = bidirectional_ams_loss(&y, &x, &cfg, None).unwrap();
        assert!((xy - yx).abs() < 1e-12);

        // symmetric fixture: X = Y = identity rows, N = 2
        let eye = Mat::from_vec(2, 2, vec![1.0, 0.0, 0.0, 1.0]);
        let l = bidirectional_ams_loss(&eye, &eye, &cfg, None).unwrap();
        assert!((l - 2.0 * (1.0 + (-0.7f64).exp()).ln()).abs() < 1e-12);
        assert!((l - 0.80637).abs() < 1e-4);

        // bidirectional off equals the forward directional loss
        let uni = MarginConfig {
            m: 0.3,
            bidirectional: false,
        };
        let fwd = directional_ams_loss(&score_matrix(&x, &y).unwrap(), &uni).unwrap();
        assert_eq!(
            bidirectional_ams_loss(&x, &y, &uni, None).unwrap().to_bits(),
            fwd.to_bits()
        );
    }

    #[test]
    fn hard_negatives_never_decrease_loss() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let s = ScoreMatrix {
            scores: rand_unit_rows(&mut rng, 4, 4),
            batch: 4,
        };
        let base = directional_ams_loss(&s, &mc(0.3)).unwrap();
        let hard = Mat::from_vec(4, 1, vec![0.2, -0.9, 0.5, 0.0]);
        let with = append_hard_columns(&s, &hard).unwrap();
        let l = directional_ams_loss(&with, &mc(0.3)).unwrap();
        assert!(l > base);
    }

    #[test]
    fn length_penalty_values() {
        assert_eq!(length_penalty(&[3.0, 5.0], 0.0), 0.0);
        assert!((length_penalty(&[3.0, 5.0], 11.0) - 44.0).abs() < 1e-12);
        assert!((length_penalty(&[1.0, 1.0, 1.0], 11.0) - 11.0).abs() < 1e-12);
    }

    #[test]
    fn hard_negative_mining_excludes_gold() {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let sources = EmbeddingMatrix {
            ids: vec!["s1".into()],
            vectors: rand_unit_rows(&mut rng, 1, 4),
            pre_norms: vec![1.0],
        };
        let pool_vecs = rand_unit_rows(&mut rng, 2, 4);
        let pool = EmbeddingMatrix {
            ids: vec!["gold".into(), "z".into()],
            vectors: pool_vecs,
            pre_norms: vec![1.0, 1.0],
        };
        let gold: BTreeMap<String, String> = [("s1".to_string(), "gold".to_string())].into();
        let set = mine_hard_negatives(&sources, &pool, &gold, 5).unwrap();
        assert_eq!(set.negatives["s1"], vec!["z".to_string()]);

        assert!(mine_hard_negatives(&sources, &pool, &gold, 0).is_err());
    }

    #[test]
    fn hard_negative_mining_matches_sort_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        let sources = EmbeddingMatrix {
            ids: vec!["s1".into()],
            vectors: rand_unit_rows(&mut rng, 1, 8),
            pre_norms: vec![1.0],
        };
        let pool_vecs = rand_unit_rows(&mut rng, 10, 8);
        let ids: Vec<String> = (0..10).map(|i| format!("p{i}")).collect();
        let pool = EmbeddingMatrix {
            ids: ids.clone(),
            vectors: pool_vecs.clone(),
            pre_norms: vec![1.0; 10],
        };
        let gold: BTreeMap<String, String> = [("s1".to_string(), "p3".to_string())].into();
        let set = mine_hard_negatives(&sources, &pool, &gold, 5).unwrap();

        // exhaustive oracle
        let mut scored: Vec<(f64, String)> = (0..10)
            .filter(|&i| ids[i] != "p3")
            .map(|i| (dot(sources.vectors.row(0), pool_vecs.row(i)), ids[i].clone()))
            .collect();
        scored.sort_by(|a, b| b.0.total_cmp(&a.0).then_with(|| a.1.cmp(&b.1)));
        let expect: Vec<String> = scored.into_iter().take(5).map(|(_, id)| id).collect();
        assert_eq!(set.negatives["s1"], expect);
    }
}
