use std::collections::HashMap;

use bitext_core::corpus::{build_vocab, generate_synthetic_bitext, ParallelCorpus, TokenizerConfig};
use bitext_core::encoder::{encode_corpus, EmbeddingMatrix, EncoderConfig, Model};
use bitext_core::index::ExactIndex;
use bitext_core::metrics::{cosine_separation, precision_at_n, rank_candidates, GoldMap};
use bitext_core::miner::{retrieve_pairs, Direction};
use bitext_core::objective::MarginConfig;
use bitext_core::tensor::Mat;
use bitext_core::trainer::{train, TrainConfig};

fn envu(k: &str, d: u64) -> u64 { std::env::var(k).ok().and_then(|v| v.parse().ok()).unwrap_or(d) }

fn subset(emb: &EmbeddingMatrix, ids: &[String]) -> EmbeddingMatrix {
    let pos: HashMap<&str, usize> = emb.ids.iter().enumerate().map(|(i, id)| (id.as_str(), i)).collect();
    let rows: Vec<Vec<f64>> = ids.iter().map(|id| emb.vectors.row(pos[id.as_str()]).to_vec()).collect();
    EmbeddingMatrix { ids: ids.to_vec(), vectors: Mat::from_rows(&rows), pre_norms: vec![0.0; ids.len()] }
}

fn dir_p1(q: &EmbeddingMatrix, c: &EmbeddingMatrix, gold: &GoldMap) -> f64 {
    let ids: Vec<String> = gold.keys().cloned().collect();
    let qq = subset(q, &ids);
    let idx = ExactIndex::build(c).unwrap();
    precision_at_n(&rank_candidates(&retrieve_pairs(&qq, &idx, 1, Direction::Forward)), gold, 1).unwrap()
}

#[test]
#[ignore]
fn probe() {
    let seed = envu("P_SEED", 1);
    let corpus = generate_synthetic_bitext(seed, 2000, 200, (6, 12), 0.1).unwrap();
    let tr = &corpus.pairs[..1800];
    let tc = ParallelCorpus { pairs: tr.to_vec(), gold: tr.iter().map(|p| (p.src_id.clone(), p.tgt_id.clone())).collect() };
    let tok = TokenizerConfig::desk();
    let texts: Vec<String> = tr.iter().flat_map(|p| [p.src_text.clone(), p.tgt_text.clone()]).collect();
    let vocab = build_vocab(texts, 1000, &tok).unwrap();
    for (name, m, bd) in [("uni", 0.0, false), ("bi", 0.0, true), ("am", 0.3, true)] {
        let mut cfg = TrainConfig::desk();
        cfg.seed = seed;
        cfg.margin = MarginConfig { m, bidirectional: bd };
        cfg.eval_every = 0;
        let model = Model::init(tok.clone(), EncoderConfig::desk(), vocab.clone(), seed).unwrap();
        let model = train(&tc, model, &cfg).unwrap().model;
        let se = encode_corpus(&corpus.source_side(), &model, 64).unwrap();
        let te = encode_corpus(&corpus.target_side(), &model, 64).unwrap();
        let held = &corpus.pairs[1800..];
        let fg: GoldMap = held.iter().map(|p| (p.src_id.clone(), p.tgt_id.clone())).collect();
        let bg: GoldMap = held.iter().map(|p| (p.tgt_id.clone(), p.src_id.clone())).collect();
        let f = dir_p1(&se, &te, &fg);
        let b = dir_p1(&te, &se, &bg);
        let tg: GoldMap = tr.iter().map(|p| (p.src_id.clone(), p.tgt_id.clone())).collect();
        let tids: Vec<String> = tg.keys().cloned().collect();
        let q = subset(&se, &tids);
        let idx = ExactIndex::build(&te).unwrap();
        let pairs = retrieve_pairs(&q, &idx, 2, Direction::Forward);
        let (pos, neg) = cosine_separation(&pairs, &tg).unwrap();
        println!(
            "PROBE seed={seed} {name}: fwd {f:.3} bwd {b:.3} mean {:.4} sep {:.6}",
            (f + b) / 2.0,
            pos - neg
        );
    }
}
