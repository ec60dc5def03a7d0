//! Shared-weight sentence encoders: token embedding lookup (word + character
//! n-gram sum), a DAN or small transformer body, four-way pooling, and an
//! affine projection to the embedding space. The forward pass is built on the
//! tape so training gradients and inference share one implementation.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::corpus::{encode_text, TokenIds, TokenizerConfig, Vocabulary};
use crate::error::{Error, Result};
use crate::tape::{NodeId, Tape};
use crate::tensor::Mat;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EncoderKind {
    Dan,
    Transformer,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EncoderConfig {
    pub embed_dim: usize,
    pub num_layers: usize,
    pub num_heads: usize,
    pub hidden_size: usize,
    pub filter_size: usize,
    pub out_dim: usize,
    pub encoder_kind: EncoderKind,
    pub normalize_output: bool,
}

impl EncoderConfig {
    pub fn paper() -> Self {
        EncoderConfig {
            embed_dim: 300,
            num_layers: 3,
            num_heads: 8,
            hidden_size: 512,
            filter_size: 2048,
            out_dim: 500,
            encoder_kind: EncoderKind::Transformer,
            normalize_output: true,
        }
    }

    pub fn desk() -> Self {
        EncoderConfig {
            embed_dim: 128,
            num_layers: 1,
            num_heads: 2,
            hidden_size: 128,
            filter_size: 256,
            out_dim: 128,
            encoder_kind: EncoderKind::Dan,
            normalize_output: true,
        }
    }

    pub fn desk_transformer() -> Self {
        EncoderConfig {
            encoder_kind: EncoderKind::Transformer,
            ..EncoderConfig::desk()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let dims = [
            self.embed_dim,
            self.num_layers,
            self.num_heads,
            self.hidden_size,
            self.filter_size,
            self.out_dim,
        ];
        if dims.iter().any(|&d| d == 0) {
            return Err(Error::InvalidConfig("all dims must be positive".into()));
        }
        if self.hidden_size % self.num_heads != 0 {
            return Err(Error::InvalidConfig(format!(
                "hidden_size {} not divisible by num_heads {}",
                self.hidden_size, self.num_heads
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EmbeddingTables {
    pub word_table: Mat,
    pub ngram_table: Mat,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DanLayer {
    pub w: Mat,
    pub b: Mat,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TransformerLayer {
    pub wq: Mat,
    pub bq: Mat,
    pub wk: Mat,
    pub bk: Mat,
    pub wv: Mat,
    pub bv: Mat,
    pub wo: Mat,
    pub bo: Mat,
    pub ln1_gain: Mat,
    pub ln1_bias: Mat,
    pub ff1_w: Mat,
    pub ff1_b: Mat,
    pub ff2_w: Mat,
    pub ff2_b: Mat,
    pub ln2_gain: Mat,
    pub ln2_bias: Mat,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub enum EncoderLayers {
    Dan(Vec<DanLayer>),
    Transformer {
        input_w: Mat,
        input_b: Mat,
        layers: Vec<TransformerLayer>,
    },
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EncoderParams {
    pub layers: EncoderLayers,
    /// 1 x hidden query for attention pooling
    pub pool_query: Mat,
    /// (4 * hidden) x out_dim
    pub proj_w: Mat,
    pub proj_b: Mat,
}

#[derive(Debug, Clone)]
pub struct SentenceEmbedding {
    pub vector: Vec<f64>,
    pub pre_norm_l2: f64,
}

/// A complete trainable model: tokenizer settings, vocabulary, embedding
/// tables, and encoder parameters. The same object encodes both languages of
/// a pair.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Model {
    pub tokenizer: TokenizerConfig,
    pub encoder: EncoderConfig,
    pub vocab: Vocabulary,
    pub tables: EmbeddingTables,
    pub params: EncoderParams,
}

impl Model {
    pub fn init(
        tokenizer: TokenizerConfig,
        encoder: EncoderConfig,
        vocab: Vocabulary,
        seed: u64,
    ) -> Result<Self> {
        tokenizer.validate()?;
        encoder.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let d = encoder.embed_dim;
        let h = encoder.hidden_size;
        let tables = EmbeddingTables {
            word_table: Mat::glorot(vocab.id_space(), d, &mut rng),
            ngram_table: Mat::glorot(tokenizer.ngram_buckets, d, &mut rng),
        };
        let layers = match encoder.encoder_kind {
            EncoderKind::Dan => {
                let mut ls = Vec::new();
                for i in 0..encoder.num_layers {
                    let in_dim = if i == 0 { d } else { h };
                    ls.push(DanLayer {
                        w: Mat::glorot(in_dim, h, &mut rng),
                        b: Mat::zeros(1, h),
                    });
                }
                EncoderLayers::Dan(ls)
            }
            EncoderKind::Transformer => {
                let mut ls = Vec::new();
                for _ in 0..encoder.num_layers {
                    ls.push(TransformerLayer {
                        wq: Mat::glorot(h, h, &mut rng),
                        bq: Mat::zeros(1, h),
                        wk: Mat::glorot(h, h, &mut rng),
                        bk: Mat::zeros(1, h),
                        wv: Mat::glorot(h, h, &mut rng),
                        bv: Mat::zeros(1, h),
                        wo: Mat::glorot(h, h, &mut rng),
                        bo: Mat::zeros(1, h),
                        ln1_gain: Mat::filled(1, h, 1.0),
                        ln1_bias: Mat::zeros(1, h),
                        ff1_w: Mat::glorot(h, encoder.filter_size, &mut rng),
                        ff1_b: Mat::zeros(1, encoder.filter_size),
                        ff2_w: Mat::glorot(encoder.filter_size, h, &mut rng),
                        ff2_b: Mat::zeros(1, h),
                        ln2_gain: Mat::filled(1, h, 1.0),
                        ln2_bias: Mat::zeros(1, h),
                    });
                }
                EncoderLayers::Transformer {
                    input_w: Mat::glorot(d, h, &mut rng),
                    input_b: Mat::zeros(1, h),
                    layers: ls,
                }
            }
        };
        let params = EncoderParams {
            layers,
            pool_query: Mat::glorot(1, h, &mut rng),
            proj_w: Mat::glorot(4 * h, encoder.out_dim, &mut rng),
            proj_b: Mat::zeros(1, encoder.out_dim),
        };
        Ok(Model {
            tokenizer,
            encoder,
            vocab,
            tables,
            params,
        })
    }

    /// Visits every parameter in a fixed order. `is_table` marks the word and
    /// n-gram embedding tables (they get the gradient multiplier).
    pub fn visit(&self, mut f: impl FnMut(&str, bool, &Mat)) {
        f("word_table", true, &self.tables.word_table);
        f("ngram_table", true, &self.tables.ngram_table);
        match &self.params.layers {
            EncoderLayers::Dan(ls) => {
                for (i, l) in ls.iter().enumerate() {
                    f(&format!("dan{i}.w"), false, &l.w);
                    f(&format!("dan{i}.b"), false, &l.b);
                }
            }
            EncoderLayers::Transformer {
                input_w,
                input_b,
                layers,
            } => {
                f("input.w", false, input_w);
                f("input.b", false, input_b);
                for (i, l) in layers.iter().enumerate() {
                    for (suffix, m) in [
                        ("wq", &l.wq),
                        ("bq", &l.bq),
                        ("wk", &l.wk),
                        ("bk", &l.bk),
                        ("wv", &l.wv),
                        ("bv", &l.bv),
                        ("wo", &l.wo),
                        ("bo", &l.bo),
                        ("ln1_gain", &l.ln1_gain),
                        ("ln1_bias", &l.ln1_bias),
                        ("ff1_w", &l.ff1_w),
                        ("ff1_b", &l.ff1_b),
                        ("ff2_w", &l.ff2_w),
                        ("ff2_b", &l.ff2_b),
                        ("ln2_gain", &l.ln2_gain),
                        ("ln2_bias", &l.ln2_bias),
                    ] {
                        f(&format!("tx{i}.{suffix}"), false, m);
                    }
                }
            }
        }
        f("pool_query", false, &self.params.pool_query);
        f("proj_w", false, &self.params.proj_w);
        f("proj_b", false, &self.params.proj_b);
    }

    pub fn visit_mut(&mut self, mut f: impl FnMut(&str, bool, &mut Mat)) {
        f("word_table", true, &mut self.tables.word_table);
        f("ngram_table", true, &mut self.tables.ngram_table);
        match &mut self.params.layers {
            EncoderLayers::Dan(ls) => {
                for (i, l) in ls.iter_mut().enumerate() {
                    f(&format!("dan{i}.w"), false, &mut l.w);
                    f(&format!("dan{i}.b"), false, &mut l.b);
                }
            }
            EncoderLayers::Transformer {
                input_w,
                input_b,
                layers,
            } => {
                f("input.w", false, input_w);
                f("input.b", false, input_b);
                for (i, l) in layers.iter_mut().enumerate() {
                    for (suffix, m) in [
                        ("wq", &mut l.wq),
                        ("bq", &mut l.bq),
                        ("wk", &mut l.wk),
                        ("bk", &mut l.bk),
                        ("wv", &mut l.wv),
                        ("bv", &mut l.bv),
                        ("wo", &mut l.wo),
                        ("bo", &mut l.bo),
                        ("ln1_gain", &mut l.ln1_gain),
                        ("ln1_bias", &mut l.ln1_bias),
                        ("ff1_w", &mut l.ff1_w),
                        ("ff1_b", &mut l.ff1_b),
                        ("ff2_w", &mut l.ff2_w),
                        ("ff2_b", &mut l.ff2_b),
                        ("ln2_gain", &mut l.ln2_gain),
                        ("ln2_bias", &mut l.ln2_bias),
                    ] {
                        f(&format!("tx{i}.{suffix}"), false, m);
                    }
                }
            }
        }
        f("pool_query", false, &mut self.params.pool_query);
        f("proj_w", false, &mut self.params.proj_w);
        f("proj_b", false, &mut self.params.proj_b);
    }

    pub fn param_count(&self) -> usize {
        let mut n = 0;
        self.visit(|_, _, m| n += m.data().len());
        n
    }
}

/// Sinusoidal positional encodings for `len` positions.
fn positional_encoding(len: usize, dim: usize) -> Mat {
    let mut pe = Mat::zeros(len, dim);
    for t in 0..len {
        for i in 0..dim {
            let exponent = (2 * (i / 2)) as f64 / dim as f64;
            let angle = t as f64 / 10000f64.powf(exponent);
            pe.set(t, i, if i % 2 == 0 { angle.sin() } else { angle.cos() });
        }
    }
    pe
}

/// The model's parameters lifted onto a tape as leaves, in `visit` order.
pub struct TapeModel<'m> {
    pub tape: Tape,
    pub model: &'m Model,
    leaves: Vec<(String, bool, NodeId)>,
}

impl<'m> TapeModel<'m> {
    pub fn new(model: &'m Model) -> Self {
        let mut tape = Tape::new();
        let mut leaves = Vec::new();
        model.visit(|name, is_table, m| {
            let id = tape.leaf(m.clone());
            leaves.push((name.to_string(), is_table, id));
        });
        TapeModel {
            tape,
            model,
            leaves,
        }
    }

    fn leaf(&self, name: &str) -> NodeId {
        self.leaves
            .iter()
            .find(|(n, _, _)| n == name)
            .unwrap_or_else(|| panic!("no parameter leaf {name}"))
            .2
    }

    /// Token vectors: word embedding plus the sum of n-gram bucket embeddings.
    pub fn embed(&mut self, ids: &TokenIds) -> Result<NodeId> {
        let wt = self.leaf("word_table");
        let nt = self.leaf("ngram_table");
        self.tape.embed_sum(wt, nt, &ids.word_ids, &ids.ngram_ids)
    }

    /// Contextual states, one row per input token.
    pub fn encode(&mut self, token_vecs: NodeId) -> Result<NodeId> {
        let seq_len = self.tape.value(token_vecs).rows();
        if seq_len == 0 {
            return Err(Error::EmptyInput("cannot encode empty token sequence".into()));
        }
        match &self.model.params.layers {
            EncoderLayers::Dan(ls) => {
                let mut h = self.tape.mean_rows(token_vecs);
                for i in 0..ls.len() {
                    let w = self.leaf(&format!("dan{i}.w"));
                    let b = self.leaf(&format!("dan{i}.b"));
                    let z = self.tape.matmul(h, w)?;
                    let z = self.tape.add_row_broadcast(z, b);
                    h = self.tape.relu(z);
                }
                // every state equals the transformed mean vector
                let rows: Vec<NodeId> = vec![h; seq_len];
                Ok(self.tape.concat_rows(&rows))
            }
            EncoderLayers::Transformer { layers, .. } => {
                let cfg = &self.model.encoder;
                let iw = self.leaf("input.w");
                let ib = self.leaf("input.b");
                let x = self.tape.matmul(token_vecs, iw)?;
                let x = self.tape.add_row_broadcast(x, ib);
                let pe = self
                    .tape
                    .leaf(positional_encoding(seq_len, cfg.hidden_size));
                let mut x = self.tape.add(x, pe);
                let dk = cfg.hidden_size / cfg.num_heads;
                let n_layers = layers.len();
                for i in 0..n_layers {
                    let (wq, bq) = (self.leaf(&format!("tx{i}.wq")), self.leaf(&format!("tx{i}.bq")));
                    let (wk, bk) = (self.leaf(&format!("tx{i}.wk")), self.leaf(&format!("tx{i}.bk")));
                    let (wv, bv) = (self.leaf(&format!("tx{i}.wv")), self.leaf(&format!("tx{i}.bv")));
                    let (wo, bo) = (self.leaf(&format!("tx{i}.wo")), self.leaf(&format!("tx{i}.bo")));
                    let q = self.tape.matmul(x, wq)?;
                    let q = self.tape.add_row_broadcast(q, bq);
                    let k = self.tape.matmul(x, wk)?;
                    let k = self.tape.add_row_broadcast(k, bk);
                    let v = self.tape.matmul(x, wv)?;
                    let v = self.tape.add_row_broadcast(v, bv);
                    let mut heads = Vec::with_capacity(cfg.num_heads);
                    for hd in 0..cfg.num_heads {
                        let qh = self.tape.slice_cols(q, hd * dk, dk);
                        let kh = self.tape.slice_cols(k, hd * dk, dk);
                        let vh = self.tape.slice_cols(v, hd * dk, dk);
                        let logits = self.tape.matmul_transpose(qh, kh)?;
                        let logits = self.tape.scale(logits, 1.0 / (dk as f64).sqrt());
                        let attn = self.tape.softmax_rows(logits);
                        heads.push(self.tape.matmul(attn, vh)?);
                    }
                    let mha = self.tape.concat_cols(&heads);
                    let mha = self.tape.matmul(mha, wo)?;
                    let mha = self.tape.add_row_broadcast(mha, bo);
                    let res = self.tape.add(x, mha);
                    let g1 = self.leaf(&format!("tx{i}.ln1_gain"));
                    let b1 = self.leaf(&format!("tx{i}.ln1_bias"));
                    let normed = self.tape.layer_norm_rows(res, g1, b1);

                    let f1w = self.leaf(&format!("tx{i}.ff1_w"));
                    let f1b = self.leaf(&format!("tx{i}.ff1_b"));
                    let f2w = self.leaf(&format!("tx{i}.ff2_w"));
                    let f2b = self.leaf(&format!("tx{i}.ff2_b"));
                    let ff = self.tape.matmul(normed, f1w)?;
                    let ff = self.tape.add_row_broadcast(ff, f1b);
                    let ff = self.tape.relu(ff);
                    let ff = self.tape.matmul(ff, f2w)?;
                    let ff = self.tape.add_row_broadcast(ff, f2b);
                    let res2 = self.tape.add(normed, ff);
                    let g2 = self.leaf(&format!("tx{i}.ln2_gain"));
                    let b2 = self.leaf(&format!("tx{i}.ln2_bias"));
                    x = self.tape.layer_norm_rows(res2, g2, b2);
                }
                Ok(x)
            }
        }
    }

    /// `[max; mean; first; attention]` over the final-layer states.
    pub fn pool(&mut self, states: NodeId) -> Result<NodeId> {
        if self.tape.value(states).rows() == 0 {
            return Err(Error::EmptyInput("cannot pool empty states".into()));
        }
        let mx = self.tape.max_rows(states);
        let mn = self.tape.mean_rows(states);
        let first = self.tape.first_row(states);
        let q = self.leaf("pool_query");
        let logits = self.tape.matmul_transpose(q, states)?; // 1 x T
        let weights = self.tape.softmax_rows(logits);
        let attn = self.tape.matmul(weights, states)?;
        Ok(self.tape.concat_cols(&[mx, mn, first, attn]))
    }

    /// Returns `(embedding 1 x out_dim, pre-normalization l2 norm 1 x 1)`.
    pub fn project_and_normalize(&mut self, pooled: NodeId) -> Result<(NodeId, NodeId)> {
        let w = self.leaf("proj_w");
        let b = self.leaf("proj_b");
        let proj = self.tape.matmul(pooled, w)?;
        let proj = self.tape.add_row_broadcast(proj, b);
        let pre_norm = self.tape.row_norms(proj);
        let out = if self.model.encoder.normalize_output {
            self.tape.normalize_rows(proj)?
        } else {
            proj
        };
        Ok((out, pre_norm))
    }

    /// Full embed -> encode -> pool -> project path for one sentence.
    pub fn sentence(&mut self, ids: &TokenIds) -> Result<(NodeId, NodeId)> {
        let vecs = self.embed(ids)?;
        let states = self.encode(vecs)?;
        let pooled = self.pool(states)?;
        self.project_and_normalize(pooled)
    }

    /// Gradients of `root` for every parameter, in `visit` order.
    pub fn param_grads(&self, root: NodeId) -> Vec<(String, bool, Mat)> {
        let grads = self.tape.backward(root);
        self.leaves
            .iter()
            .map(|(name, is_table, id)| {
                let g = grads[id.0].clone().unwrap_or_else(|| {
                    let v = self.tape.value(*id);
                    Mat::zeros(v.rows(), v.cols())
                });
                (name.clone(), *is_table, g)
            })
            .collect()
    }
}

/// Embedding rows aligned with sentence ids.
#[derive(Debug, Clone)]
pub struct EmbeddingMatrix {
    pub ids: Vec<String>,
    pub vectors: Mat,
    pub pre_norms: Vec<f64>,
}

impl EmbeddingMatrix {
    pub fn row_of(&self, id: &str) -> Option<&[f64]> {
        self.ids.iter().position(|x| x == id).map(|i| self.vectors.row(i))
    }
}

pub fn embed_tokens(ids: &TokenIds, model: &Model) -> Result<Mat> {
    let mut tm = TapeModel::new(model);
    let node = tm.embed(ids)?;
    Ok(tm.tape.value(node).clone())
}

pub fn encode_states(ids: &TokenIds, model: &Model) -> Result<Mat> {
    let mut tm = TapeModel::new(model);
    let vecs = tm.embed(ids)?;
    let states = tm.encode(vecs)?;
    Ok(tm.tape.value(states).clone())
}

pub fn pool_states(states: &Mat, model: &Model) -> Result<Mat> {
    let mut tm = TapeModel::new(model);
    let s = tm.tape.leaf(states.clone());
    let pooled = tm.pool(s)?;
    Ok(tm.tape.value(pooled).clone())
}

pub fn project_and_normalize(pooled: &Mat, model: &Model) -> Result<SentenceEmbedding> {
    let mut tm = TapeModel::new(model);
    let p = tm.tape.leaf(pooled.clone());
    let (out, pre) = tm.project_and_normalize(p)?;
    Ok(SentenceEmbedding {
        vector: tm.tape.value(out).row(0).to_vec(),
        pre_norm_l2: tm.tape.value(pre).scalar(),
    })
}

pub fn embed_sentence(model: &Model, ids: &TokenIds) -> Result<SentenceEmbedding> {
    let mut tm = TapeModel::new(model);
    let (out, pre) = tm.sentence(ids)?;
    Ok(SentenceEmbedding {
        vector: tm.tape.value(out).row(0).to_vec(),
        pre_norm_l2: tm.tape.value(pre).scalar(),
    })
}

/// Encodes a list of (id, text) sentences; row order matches input order and
/// is independent of `batch_size`.
pub fn encode_corpus(
    sentences: &[(String, String)],
    model: &Model,
    batch_size: usize,
) -> Result<EmbeddingMatrix> {
    if batch_size == 0 {
        return Err(Error::InvalidConfig("batch_size must be >= 1".into()));
    }
    let mut ids = Vec::with_capacity(sentences.len());
    let mut rows: Vec<Vec<f64>> = Vec::with_capacity(sentences.len());
    let mut pre_norms = Vec::with_capacity(sentences.len());
    for chunk in sentences.chunks(batch_size) {
        for (id, text) in chunk {
            let toks = encode_text(text, &model.vocab, &model.tokenizer);
            let emb = embed_sentence(model, &toks)
                .map_err(|e| Error::SentenceEncode(id.clone(), e.to_string()))?;
            ids.push(id.clone());
            pre_norms.push(emb.pre_norm_l2);
            rows.push(emb.vector);
        }
    }
    let vectors = if rows.is_empty() {
        Mat::zeros(0, model.encoder.out_dim)
    } else {
        Mat::from_rows(&rows)
    };
    Ok(EmbeddingMatrix {
        ids,
        vectors,
        pre_norms,
    })
}
