//! The end-to-end mining pipeline: directional candidate retrieval, threshold
//! and mutual-nearest-neighbor filtering, margin-based rescoring, document
//! averaging, and the external second-stage scorer boundary.

use std::collections::HashMap;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;
use std::process::{Command, Stdio};

use serde::{Deserialize, Serialize};

use crate::encoder::EmbeddingMatrix;
use crate::error::{Error, Result};
use crate::index::NnIndex;
use crate::tensor::{dot, l2_norm, Mat};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Direction {
    Forward,
    Backward,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CandidatePair {
    pub src_id: String,
    pub tgt_id: String,
    pub cosine: f64,
    pub rescored: Option<f64>,
    pub direction: Direction,
}

impl CandidatePair {
    /// Rescored value when present, otherwise raw cosine.
    pub fn score(&self) -> f64 {
        self.rescored.unwrap_or(self.cosine)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum RescoreVariant {
    None,
    /// neighborhoods of both elements (Eq. with 2k averaging)
    Bidirectional,
    /// source-side neighborhood only
    OneDirectional,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MiningConfig {
    pub k: usize,
    pub threshold: f64,
    pub rescore_variant: RescoreVariant,
    pub rescore_k: usize,
}

impl Default for MiningConfig {
    fn default() -> Self {
        MiningConfig {
            k: 4,
            threshold: 0.5,
            rescore_variant: RescoreVariant::None,
            rescore_k: 4,
        }
    }
}

impl MiningConfig {
    pub fn validate(&self) -> Result<()> {
        if self.k < 1 || self.rescore_k < 1 {
            return Err(Error::InvalidConfig("k and rescore_k must be >= 1".into()));
        }
        Ok(())
    }
}

/// Top-k neighbors of every query become candidate pairs. For `Forward` the
/// queries are sources and the index holds targets; `Backward` is vice versa.
pub fn retrieve_pairs(
    queries: &EmbeddingMatrix,
    index: &dyn NnIndex,
    k: usize,
    direction: Direction,
) -> Vec<CandidatePair> {
    let mut out = Vec::new();
    for (r, qid) in queries.ids.iter().enumerate() {
        if index.is_empty() {
            continue;
        }
        let res = index.query_topk(queries.vectors.row(r), k);
        for (nid, score) in res.neighbors {
            let (src_id, tgt_id) = match direction {
                Direction::Forward => (qid.clone(), nid),
                Direction::Backward => (nid, qid.clone()),
            };
            out.push(CandidatePair {
                src_id,
                tgt_id,
                cosine: score,
                rescored: None,
                direction,
            });
        }
    }
    out
}

/// Keeps pairs with score >= tau (inclusive), preserving order.
pub fn filter_threshold(pairs: &[CandidatePair], tau: f64) -> Vec<CandidatePair> {
    pairs.iter().filter(|p| p.score() >= tau).cloned().collect()
}

/// Keeps (x, y) iff y is x's top-1 forward neighbor and x is y's top-1
/// backward neighbor. Inputs must be in per-query rank order.
pub fn mutual_nn_filter(
    forward: &[CandidatePair],
    backward: &[CandidatePair],
) -> Vec<CandidatePair> {
    let mut fwd_top1: HashMap<&str, &CandidatePair> = HashMap::new();
    for p in forward {
        fwd_top1.entry(&p.src_id).or_insert(p);
    }
    let mut bwd_top1: HashMap<&str, &str> = HashMap::new();
    for p in backward {
        bwd_top1.entry(&p.tgt_id).or_insert(&p.src_id);
    }
    let mut out: Vec<CandidatePair> = fwd_top1
        .values()
        .filter(|p| bwd_top1.get(p.tgt_id.as_str()) == Some(&p.src_id.as_str()))
        .map(|p| (*p).clone())
        .collect();
    out.sort_by(|a, b| a.src_id.cmp(&b.src_id).then_with(|| a.tgt_id.cmp(&b.tgt_id)));
    out
}

/// Margin-based rescoring: `rescored = phi/margin + phi`, where the margin is
/// the mean cosine of each element's k-neighborhood on the opposite side
/// (both sides for `Bidirectional`, source side only for `OneDirectional`).
/// Non-positive margins yield `-inf`.
pub fn margin_rescore(
    pairs: &[CandidatePair],
    src_emb: &EmbeddingMatrix,
    tgt_emb: &EmbeddingMatrix,
    src_index: Option<&dyn NnIndex>,
    tgt_index: &dyn NnIndex,
    variant: RescoreVariant,
    k: usize,
) -> Result<Vec<CandidatePair>> {
    if k < 1 {
        return Err(Error::InvalidConfig("rescore k must be >= 1".into()));
    }
    if variant == RescoreVariant::None {
        return Ok(pairs.to_vec());
    }
    let src_rows: HashMap<&str, usize> = src_emb
        .ids
        .iter()
        .enumerate()
        .map(|(i, id)| (id.as_str(), i))
        .collect();
    let tgt_rows: HashMap<&str, usize> = tgt_emb
        .ids
        .iter()
        .enumerate()
        .map(|(i, id)| (id.as_str(), i))
        .collect();

    // neighborhood means are cached per element
    let mut src_nn_mean: HashMap<&str, f64> = HashMap::new();
    let mut tgt_nn_mean: HashMap<&str, f64> = HashMap::new();

    let mut out = Vec::with_capacity(pairs.len());
    for p in pairs {
        let &sr = src_rows
            .get(p.src_id.as_str())
            .ok_or_else(|| Error::Other(format!("unknown source id {}", p.src_id)))?;
        let &tr = tgt_rows
            .get(p.tgt_id.as_str())
            .ok_or_else(|| Error::Other(format!("unknown target id {}", p.tgt_id)))?;
        let phi = dot(src_emb.vectors.row(sr), tgt_emb.vectors.row(tr));

        let fwd_mean = *src_nn_mean.entry(p.src_id.as_str()).or_insert_with(|| {
            let res = tgt_index.query_topk(src_emb.vectors.row(sr), k);
            mean_scores(&res.neighbors)
        });
        let margin = match variant {
            RescoreVariant::OneDirectional => fwd_mean,
            RescoreVariant::Bidirectional => {
                let src_index = src_index.ok_or_else(|| {
                    Error::InvalidConfig("bidirectional rescoring needs a source index".into())
                })?;
                let bwd_mean = *tgt_nn_mean.entry(p.tgt_id.as_str()).or_insert_with(|| {
                    let res = src_index.query_topk(tgt_emb.vectors.row(tr), k);
                    mean_scores(&res.neighbors)
                });
                fwd_mean / 2.0 + bwd_mean / 2.0
            }
            RescoreVariant::None => unreachable!(),
        };

        let rescored = if margin <= 0.0 {
            f64::NEG_INFINITY
        } else {
            phi / margin + phi
        };
        let mut p = p.clone();
        p.cosine = phi;
        p.rescored = Some(rescored);
        out.push(p);
    }
    Ok(out)
}

fn mean_scores(neighbors: &[(String, f64)]) -> f64 {
    if neighbors.is_empty() {
        return 0.0;
    }
    neighbors.iter().map(|(_, s)| s).sum::<f64>() / neighbors.len() as f64
}

/// An external pair scorer: consumes `src_text<TAB>tgt_text` lines, emits one
/// decimal score per line, in order.
pub trait Scorer {
    fn score_batch(&mut self, pairs: &[(String, String)]) -> Result<Vec<f64>>;
}

/// Runs a child process speaking the line protocol on stdin/stdout.
pub struct ProcessScorer {
    command: String,
}

impl ProcessScorer {
    pub fn new(command: impl Into<String>) -> Self {
        ProcessScorer {
            command: command.into(),
        }
    }
}

impl Scorer for ProcessScorer {
    fn score_batch(&mut self, pairs: &[(String, String)]) -> Result<Vec<f64>> {
        let mut child = Command::new("sh")
            .arg("-c")
            .arg(&self.command)
            .stdin(Stdio::piped())
            .stdout(Stdio::piped())
            .spawn()?;
        {
            let mut stdin = child.stdin.take().expect("piped stdin");
            for (src, tgt) in pairs {
                writeln!(stdin, "{src}\t{tgt}")?;
            }
        }
        let stdout = child.stdout.take().expect("piped stdout");
        let mut scores = Vec::with_capacity(pairs.len());
        for (i, line) in BufReader::new(stdout).lines().enumerate() {
            let line = line?;
            if i >= pairs.len() {
                return Err(Error::ScorerProtocol {
                    line: i + 1,
                    msg: "more output lines than input pairs".into(),
                });
            }
            let v: f64 = line.trim().parse().map_err(|_| Error::ScorerProtocol {
                line: i + 1,
                msg: format!("non-numeric score {line:?}"),
            })?;
            scores.push(v);
        }
        child.wait()?;
        if scores.len() != pairs.len() {
            return Err(Error::ScorerProtocol {
                line: scores.len() + 1,
                msg: format!("expected {} scores, got {}", pairs.len(), scores.len()),
            });
        }
        Ok(scores)
    }
}

/// Replaces each pair's rescored value with the external scorer's output;
/// order preserved.
pub fn second_stage_rescore(
    pairs: &[CandidatePair],
    texts: &dyn Fn(&str) -> Option<String>,
    scorer: &mut dyn Scorer,
) -> Result<Vec<CandidatePair>> {
    let lines: Vec<(String, String)> = pairs
        .iter()
        .map(|p| {
            let s = texts(&p.src_id)
                .ok_or_else(|| Error::Other(format!("no text for id {}", p.src_id)))?;
            let t = texts(&p.tgt_id)
                .ok_or_else(|| Error::Other(format!("no text for id {}", p.tgt_id)))?;
            Ok((s, t))
        })
        .collect::<Result<_>>()?;
    let scores = scorer.score_batch(&lines)?;
    Ok(pairs
        .iter()
        .zip(scores)
        .map(|(p, s)| {
            let mut p = p.clone();
            p.rescored = Some(s);
            p
        })
        .collect())
}

#[derive(Debug, Clone)]
pub struct DocEmbedding {
    pub doc_id: String,
    pub vector: Vec<f64>,
    pub sentence_count: usize,
}

/// Arithmetic mean of the document's sentence embeddings, stored
/// unnormalized; cosine is applied at query time.
pub fn doc_embed(doc_id: impl Into<String>, sentence_embeddings: &Mat) -> Result<DocEmbedding> {
    if sentence_embeddings.rows() == 0 {
        return Err(Error::EmptyInput("empty document".into()));
    }
    let n = sentence_embeddings.rows();
    let mut vector = vec![0.0; sentence_embeddings.cols()];
    for r in 0..n {
        for (acc, v) in vector.iter_mut().zip(sentence_embeddings.row(r)) {
            *acc += v;
        }
    }
    for v in &mut vector {
        *v /= n as f64;
    }
    Ok(DocEmbedding {
        doc_id: doc_id.into(),
        vector,
        sentence_count: n,
    })
}

fn docs_to_unit_matrix(docs: &[DocEmbedding]) -> Result<EmbeddingMatrix> {
    let mut rows = Vec::with_capacity(docs.len());
    let mut pre_norms = Vec::with_capacity(docs.len());
    for d in docs {
        let norm = l2_norm(&d.vector);
        if norm == 0.0 {
            return Err(Error::Degenerate(format!("zero document vector {}", d.doc_id)));
        }
        pre_norms.push(norm);
        rows.push(d.vector.iter().map(|v| v / norm).collect::<Vec<f64>>());
    }
    Ok(EmbeddingMatrix {
        ids: docs.iter().map(|d| d.doc_id.clone()).collect(),
        vectors: Mat::from_rows(&rows),
        pre_norms,
    })
}

/// Cosine retrieval over averaged document embeddings.
pub fn mine_documents(
    src_docs: &[DocEmbedding],
    tgt_docs: &[DocEmbedding],
    k: usize,
) -> Result<Vec<CandidatePair>> {
    let src = docs_to_unit_matrix(src_docs)?;
    let tgt = docs_to_unit_matrix(tgt_docs)?;
    let index = crate::index::ExactIndex::build(&tgt)?;
    Ok(retrieve_pairs(&src, &index, k, Direction::Forward))
}

/// Candidate file line format: `src_id<TAB>tgt_id<TAB>cosine<TAB>rescored`
/// with `NA` for an absent rescored value.
pub fn write_candidates<W: Write>(w: &mut W, pairs: &[CandidatePair]) -> Result<()> {
    for p in pairs {
        match p.rescored {
            Some(r) => writeln!(w, "{}\t{}\t{}\t{}", p.src_id, p.tgt_id, p.cosine, r)?,
            None => writeln!(w, "{}\t{}\t{}\tNA", p.src_id, p.tgt_id, p.cosine)?,
        }
    }
    Ok(())
}

pub fn read_candidates(path: &Path) -> Result<Vec<CandidatePair>> {
    let file = std::fs::File::open(path)?;
    let pname = path.display().to_string();
    let mut out = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line?;
        if line.is_empty() {
            continue;
        }
        let f: Vec<&str> = line.split('\t').collect();
        if f.len() != 4 {
            return Err(Error::MalformedLine {
                path: pname,
                line: i + 1,
                msg: format!("expected 4 fields, got {}", f.len()),
            });
        }
        let cosine: f64 = f[2].parse().map_err(|_| Error::MalformedLine {
            path: pname.clone(),
            line: i + 1,
            msg: format!("bad cosine {:?}", f[2]),
        })?;
        let rescored = if f[3] == "NA" {
            None
        } else {
            Some(f[3].parse().map_err(|_| Error::MalformedLine {
                path: pname.clone(),
                line: i + 1,
                msg: format!("bad rescored value {:?}", f[3]),
            })?)
        };
        out.push(CandidatePair {
            src_id: f[0].to_string(),
            tgt_id: f[1].to_string(),
            cosine,
            rescored,
            direction: Direction::Forward,
        });
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::index::ExactIndex;

    fn emb(ids: &[&str], rows: Vec<Vec<f64>>) -> EmbeddingMatrix {
        EmbeddingMatrix {
            ids: ids.iter().map(|s| s.to_string()).collect(),
            pre_norms: vec![1.0; rows.len()],
            vectors: Mat::from_rows(&rows),
        }
    }

    fn pair(s: &str, t: &str, c: f64) -> CandidatePair {
        CandidatePair {
            src_id: s.into(),
            tgt_id: t.into(),
            cosine: c,
            rescored: None,
            direction: Direction::Forward,
        }
    }

    #[test]
    fn retrieval_cardinality_and_direction() {
        let src = emb(&["s1", "s2"], vec![vec![1.0, 0.0], vec![0.0, 1.0]]);
        let tgt = emb(&["t1", "t2"], vec![vec![1.0, 0.0], vec![0.0, 1.0]]);
        let idx = ExactIndex::build(&tgt).unwrap();
        let fwd = retrieve_pairs(&src, &idx, 1, Direction::Forward);
        assert_eq!(fwd.len(), 2);
        assert_eq!((fwd[0].src_id.as_str(), fwd[0].tgt_id.as_str()), ("s1", "t1"));
        assert_eq!((fwd[1].src_id.as_str(), fwd[1].tgt_id.as_str()), ("s2", "t2"));

        let k3 = retrieve_pairs(&src, &idx, 3, Direction::Forward);
        assert_eq!(k3.len(), 4); // corpus smaller than k

        let sidx = ExactIndex::build(&src).unwrap();
        let bwd = retrieve_pairs(&tgt, &sidx, 1, Direction::Backward);
        assert_eq!((bwd[0].src_id.as_str(), bwd[0].tgt_id.as_str()), ("s1", "t1"));
    }

    #[test]
    fn threshold_filter_inclusive() {
        let pairs = vec![pair("a", "x", 0.9), pair("b", "y", 0.5), pair("c", "z", 0.49)];
        assert_eq!(filter_threshold(&pairs, -1.0).len(), 3);
        assert_eq!(filter_threshold(&pairs, 1.0 + 1e-9).len(), 0);
        let kept = filter_threshold(&pairs, 0.5);
        assert_eq!(kept.len(), 2);
        assert_eq!(kept[1].src_id, "b");
    }

    #[test]
    fn mutual_nn_basics() {
        let f = vec![pair("a", "b", 0.9)];
        let b_ok = vec![pair("a", "b", 0.9)];
        assert_eq!(mutual_nn_filter(&f, &b_ok).len(), 1);

        let b_other = vec![pair("c", "b", 0.8)];
        assert_eq!(mutual_nn_filter(&f, &b_other).len(), 0);
    }

    #[test]
    fn mutual_nn_matches_argmax_oracle() {
        // 4x4 toy corpus with a fixed score matrix
        let scores = Mat::from_rows(&vec![
            vec![0.9, 0.1, 0.3, 0.2],
            vec![0.2, 0.8, 0.7, 0.1],
            vec![0.1, 0.85, 0.6, 0.2],
            vec![0.3, 0.2, 0.1, 0.7],
        ]);
        let src_ids: Vec<String> = (0..4).map(|i| format!("s{i}")).collect();
        let tgt_ids: Vec<String> = (0..4).map(|i| format!("t{i}")).collect();
        let mut fwd = Vec::new();
        let mut bwd = Vec::new();
        for i in 0..4 {
            let j = (0..4).max_by(|&a, &b| scores.get(i, a).total_cmp(&scores.get(i, b))).unwrap();
            fwd.push(pair(&src_ids[i], &tgt_ids[j], scores.get(i, j)));
        }
        for j in 0..4 {
            let i = (0..4).max_by(|&a, &b| scores.get(a, j).total_cmp(&scores.get(b, j))).unwrap();
            bwd.push(pair(&src_ids[i], &tgt_ids[j], scores.get(i, j)));
        }
        let got = mutual_nn_filter(&fwd, &bwd);
        // oracle: mutual argmax
        let mut expect = Vec::new();
        for i in 0..4 {
            let j = (0..4).max_by(|&a, &b| scores.get(i, a).total_cmp(&scores.get(i, b))).unwrap();
            let i2 = (0..4).max_by(|&a, &b| scores.get(a, j).total_cmp(&scores.get(b, j))).unwrap();
            if i2 == i {
                expect.push((format!("s{i}"), format!("t{j}")));
            }
        }
        let got_ids: Vec<(String, String)> =
            got.iter().map(|p| (p.src_id.clone(), p.tgt_id.clone())).collect();
        assert_eq!(got_ids, expect);
    }

    #[test]
    fn mutual_nn_symmetry() {
        let f = vec![pair("a", "b", 0.9), pair("c", "d", 0.8)];
        let b = vec![pair("a", "b", 0.9), pair("e", "d", 0.7)];
        let kept = mutual_nn_filter(&f, &b);
        // swapping roles: forward' = backward with src/tgt semantics swapped
        let f_sw: Vec<CandidatePair> = b
            .iter()
            .map(|p| pair(&p.tgt_id, &p.src_id, p.cosine))
            .collect();
        let b_sw: Vec<CandidatePair> = f
            .iter()
            .map(|p| pair(&p.tgt_id, &p.src_id, p.cosine))
            .collect();
        let kept_sw = mutual_nn_filter(&f_sw, &b_sw);
        let a: Vec<(String, String)> =
            kept.iter().map(|p| (p.src_id.clone(), p.tgt_id.clone())).collect();
        let b2: Vec<(String, String)> =
            kept_sw.iter().map(|p| (p.tgt_id.clone(), p.src_id.clone())).collect();
        assert_eq!(a, b2);
    }

    #[test]
    fn rescore_mutual_top1_identity() {
        // x and y mutual top-1 with phi = 0.8, k = 1: margin = phi,
        // rescored = 1 + phi
        let c = 0.8f64;
        let s = (1.0 - c * c).sqrt();
        let src = emb(&["x"], vec![vec![1.0, 0.0]]);
        let tgt = emb(&["y"], vec![vec![c, s]]);
        let tidx = ExactIndex::build(&tgt).unwrap();
        let sidx = ExactIndex::build(&src).unwrap();
        let pairs = vec![pair("x", "y", c)];
        let out = margin_rescore(
            &pairs,
            &src,
            &tgt,
            Some(&sidx),
            &tidx,
            RescoreVariant::Bidirectional,
            1,
        )
        .unwrap();
        assert!((out[0].rescored.unwrap() - (1.0 + c)).abs() < 1e-9);
    }

    #[test]
    fn rescore_one_directional_hand_example() {
        // x's two nearest targets at cosine 0.8 and 0.6, pair phi = 0.8:
        // margin = 0.7, rescored = 0.8/0.7 + 0.8
        let (c1, c2) = (0.8f64, 0.6f64);
        let src = emb(&["x"], vec![vec![1.0, 0.0]]);
        let tgt = emb(
            &["t1", "t2"],
            vec![vec![c1, (1.0 - c1 * c1).sqrt()], vec![c2, (1.0 - c2 * c2).sqrt()]],
        );
        let tidx = ExactIndex::build(&tgt).unwrap();
        let pairs = vec![pair("x", "t1", c1)];
        let out = margin_rescore(
            &pairs,
            &src,
            &tgt,
            None,
            &tidx,
            RescoreVariant::OneDirectional,
            2,
        )
        .unwrap();
        let expect = c1 / 0.7 + c1;
        assert!((out[0].rescored.unwrap() - expect).abs() < 1e-9);
        assert!((expect - 1.9429).abs() < 1e-4);
    }

    #[test]
    fn rescore_degenerate_margin() {
        let src = emb(&["x"], vec![vec![1.0, 0.0]]);
        let tgt = emb(&["y"], vec![vec![-1.0, 0.0]]);
        let tidx = ExactIndex::build(&tgt).unwrap();
        let pairs = vec![pair("x", "y", -1.0)];
        let out = margin_rescore(
            &pairs,
            &src,
            &tgt,
            None,
            &tidx,
            RescoreVariant::OneDirectional,
            1,
        )
        .unwrap();
        assert_eq!(out[0].rescored, Some(f64::NEG_INFINITY));
        // any finite threshold drops it
        assert!(filter_threshold(&out, -1e12).is_empty());
    }

    struct EchoCosine;
    impl Scorer for EchoCosine {
        fn score_batch(&mut self, pairs: &[(String, String)]) -> Result<Vec<f64>> {
            pairs.iter().map(|(s, _)| Ok(s.parse().unwrap())).collect()
        }
    }

    #[test]
    fn second_stage_pass_through_and_constant() {
        let pairs = vec![pair("a", "b", 0.75), pair("c", "d", 0.25)];
        // texts are the cosine values themselves so an echo scorer is identity
        let texts = |id: &str| -> Option<String> {
            Some(match id {
                "a" => "0.75".into(),
                "c" => "0.25".into(),
                _ => "0".into(),
            })
        };
        let out = second_stage_rescore(&pairs, &texts, &mut EchoCosine).unwrap();
        assert!((out[0].rescored.unwrap() - 0.75).abs() < 1e-12);
        assert!((out[1].rescored.unwrap() - 0.25).abs() < 1e-12);

        let mut constant = ProcessScorer::new("awk '{print \"1.0\"}'");
        let out = second_stage_rescore(&pairs, &texts, &mut constant).unwrap();
        assert!(out.iter().all(|p| p.rescored == Some(1.0)));

        // one fewer line than pairs: protocol error
        let mut short = ProcessScorer::new("head -n 1 | awk '{print \"1.0\"}'");
        assert!(matches!(
            second_stage_rescore(&pairs, &texts, &mut short),
            Err(Error::ScorerProtocol { .. })
        ));
    }

    #[test]
    fn doc_embedding_mean() {
        let m = Mat::from_rows(&vec![vec![1.0, 0.0], vec![0.0, 1.0]]);
        let d = doc_embed("d1", &m).unwrap();
        assert_eq!(d.vector, vec![0.5, 0.5]);
        assert_eq!(d.sentence_count, 2);

        let same = Mat::from_rows(&vec![vec![0.3, 0.4]; 5]);
        let d = doc_embed("d2", &same).unwrap();
        assert!((d.vector[0] - 0.3).abs() < 1e-12);
        assert!((d.vector[1] - 0.4).abs() < 1e-12);

        assert!(doc_embed("d3", &Mat::zeros(0, 2)).is_err());
    }

    #[test]
    fn doc_mining_scale_invariance_and_order_invariance() {
        let s1 = vec![vec![1.0, 0.0], vec![0.8, 0.6]];
        let shuffled = vec![s1[1].clone(), s1[0].clone()];
        let a = doc_embed("d", &Mat::from_rows(&s1)).unwrap();
        let b = doc_embed("d", &Mat::from_rows(&shuffled)).unwrap();
        assert_eq!(a.vector, b.vector);

        // single-sentence documents reduce to sentence retrieval
        let src_docs = vec![doc_embed("sd", &Mat::from_rows(&vec![vec![1.0, 0.0]])).unwrap()];
        let tgt_docs = vec![
            doc_embed("t1", &Mat::from_rows(&vec![vec![1.0, 0.0]])).unwrap(),
            doc_embed("t2", &Mat::from_rows(&vec![vec![0.0, 1.0]])).unwrap(),
        ];
        let pairs = mine_documents(&src_docs, &tgt_docs, 1).unwrap();
        assert_eq!(pairs[0].tgt_id, "t1");
        assert!((pairs[0].cosine - 1.0).abs() < 1e-9);
    }

    #[test]
    fn candidate_file_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("cand.tsv");
        let pairs = vec![
            pair("a", "b", 0.123456789),
            CandidatePair {
                rescored: Some(1.5),
                ..pair("c", "d", -0.25)
            },
        ];
        let mut buf = Vec::new();
        write_candidates(&mut buf, &pairs).unwrap();
        std::fs::write(&path, &buf).unwrap();
        let back = read_candidates(&path).unwrap();
        assert_eq!(back.len(), 2);
        assert_eq!(back[0].rescored, None);
        assert_eq!(back[1].rescored, Some(1.5));
        assert_eq!(back[0].cosine, 0.123456789);

        std::fs::write(&path, "only\tthree\tfields\n").unwrap();
        assert!(matches!(
            read_candidates(&path),
            Err(Error::MalformedLine { line: 1, .. })
        ));
    }
}
