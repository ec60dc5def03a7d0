//! Nearest-neighbor retrieval over embedding matrices: a brute-force exact
//! index (the correctness oracle) and an inverted-list approximate index with
//! a tunable probe count.

use std::collections::HashSet;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::encoder::EmbeddingMatrix;
use crate::error::{Error, Result};
use crate::tensor::{dot, Mat};

#[derive(Debug, Clone, PartialEq)]
pub struct QueryResult {
    /// (id, cosine), descending by score, ties broken by lower id.
    pub neighbors: Vec<(String, f64)>,
}

pub trait NnIndex {
    fn query_topk(&self, q: &[f64], k: usize) -> QueryResult;
    fn len(&self) -> usize;
    fn is_empty(&self) -> bool {
        self.len() == 0
    }
    fn dim(&self) -> usize;
}

fn top_k(ids: &[String], mut scored: Vec<(f64, u32)>, k: usize) -> QueryResult {
    let cmp = |a: &(f64, u32), b: &(f64, u32)| {
        b.0.total_cmp(&a.0)
            .then_with(|| ids[a.1 as usize].cmp(&ids[b.1 as usize]))
    };
    let k = k.min(scored.len());
    if k > 0 && k < scored.len() {
        scored.select_nth_unstable_by(k - 1, cmp);
        scored.truncate(k);
    }
    scored.sort_by(cmp);
    QueryResult {
        neighbors: scored
            .into_iter()
            .map(|(s, i)| (ids[i as usize].clone(), s))
            .collect(),
    }
}

#[derive(Debug, Clone)]
pub struct ExactIndex {
    ids: Vec<String>,
    matrix: Mat,
}

impl ExactIndex {
    pub fn build(emb: &EmbeddingMatrix) -> Result<Self> {
        Self::from_parts(emb.ids.clone(), emb.vectors.clone())
    }

    pub fn from_parts(ids: Vec<String>, matrix: Mat) -> Result<Self> {
        if ids.len() != matrix.rows() {
            return Err(Error::ShapeMismatch(format!(
                "{} ids vs {} rows",
                ids.len(),
                matrix.rows()
            )));
        }
        let mut seen = HashSet::new();
        for id in &ids {
            if !seen.insert(id) {
                return Err(Error::DuplicateId(id.clone()));
            }
        }
        Ok(ExactIndex { ids, matrix })
    }

    pub fn ids(&self) -> &[String] {
        &self.ids
    }

    pub fn matrix(&self) -> &Mat {
        &self.matrix
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut w = BufWriter::new(std::fs::File::create(path)?);
        write_header(&mut w, 0, self.matrix.cols(), self.ids.len(), 0, 0)?;
        write_mat(&mut w, &self.matrix)?;
        write_ids(&mut w, &self.ids)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let mut r = BufReader::new(std::fs::File::open(path)?);
        let h = read_header(&mut r)?;
        if h.kind != 0 {
            return Err(Error::Other("not an exact index file".into()));
        }
        let matrix = read_mat(&mut r, h.count, h.dim)?;
        let ids = read_ids(&mut r, h.count)?;
        Self::from_parts(ids, matrix)
    }
}

impl NnIndex for ExactIndex {
    fn query_topk(&self, q: &[f64], k: usize) -> QueryResult {
        assert!(k >= 1, "k must be >= 1");
        assert_eq!(q.len(), self.matrix.cols(), "query dimension mismatch");
        let scored: Vec<(f64, u32)> = (0..self.matrix.rows())
            .map(|r| (dot(q, self.matrix.row(r)), r as u32))
            .collect();
        top_k(&self.ids, scored, k)
    }

    fn len(&self) -> usize {
        self.ids.len()
    }

    fn dim(&self) -> usize {
        self.matrix.cols()
    }
}

#[derive(Debug, Clone)]
pub struct ApproxIndex {
    ids: Vec<String>,
    matrix: Mat,
    centroids: Mat,
    lists: Vec<Vec<u32>>,
    probe_count: usize,
    /// vectors regrouped so each cluster occupies a contiguous row block
    grouped: Mat,
    /// original row of each `grouped` row
    grouped_rows: Vec<u32>,
    /// row range of cluster c in `grouped` is offsets[c]..offsets[c + 1]
    offsets: Vec<usize>,
}

const KMEANS_ITERS: usize = 8;
const KMEANS_TRAIN_CAP: usize = 25_000;

impl ApproxIndex {
    /// Seeded spherical k-means partitioning with a fixed iteration count.
    pub fn build(emb: &EmbeddingMatrix, clusters: usize, seed: u64) -> Result<Self> {
        let n = emb.vectors.rows();
        let d = emb.vectors.cols();
        if clusters < 1 {
            return Err(Error::InvalidConfig("C must be >= 1".into()));
        }
        if clusters > n {
            return Err(Error::InvalidConfig(format!(
                "C = {clusters} exceeds corpus size {n}"
            )));
        }
        let exact_check = ExactIndex::from_parts(emb.ids.clone(), emb.vectors.clone())?;
        let (ids, matrix) = (exact_check.ids, exact_check.matrix);

        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut order: Vec<u32> = (0..n as u32).collect();
        order.shuffle(&mut rng);
        let train: Vec<u32> = order.iter().copied().take(KMEANS_TRAIN_CAP.max(clusters)).collect();

        let mut centroids = Mat::zeros(clusters, d);
        for (c, &row) in order.iter().take(clusters).enumerate() {
            centroids.row_mut(c).copy_from_slice(matrix.row(row as usize));
        }

        for _ in 0..KMEANS_ITERS {
            let mut sums = Mat::zeros(clusters, d);
            let mut counts = vec![0usize; clusters];
            for &row in &train {
                let c = nearest_centroid(&centroids, matrix.row(row as usize));
                counts[c] += 1;
                for (s, v) in sums.row_mut(c).iter_mut().zip(matrix.row(row as usize)) {
                    *s += v;
                }
            }
            for c in 0..clusters {
                if counts[c] == 0 {
                    // re-seed empty cluster from a random training row
                    let &row = train.choose(&mut rng).unwrap();
                    sums.row_mut(c).copy_from_slice(matrix.row(row as usize));
                    counts[c] = 1;
                }
                let norm = crate::tensor::l2_norm(sums.row(c));
                let inv = if norm > 0.0 { 1.0 / norm } else { 0.0 };
                for (dst, s) in centroids.row_mut(c).iter_mut().zip(sums.row(c)) {
                    *dst = s * inv;
                }
            }
        }

        let mut lists = vec![Vec::new(); clusters];
        for row in 0..n {
            let c = nearest_centroid(&centroids, matrix.row(row));
            lists[c].push(row as u32);
        }

        let probe = clusters.min(8);
        Ok(Self::assemble(ids, matrix, centroids, lists, probe))
    }

    /// Builds the contiguous per-cluster scan layout from the inverted lists.
    fn assemble(
        ids: Vec<String>,
        matrix: Mat,
        centroids: Mat,
        lists: Vec<Vec<u32>>,
        probe_count: usize,
    ) -> Self {
        let n = matrix.rows();
        let d = matrix.cols();
        let mut grouped = Mat::zeros(n, d);
        let mut grouped_rows = Vec::with_capacity(n);
        let mut offsets = Vec::with_capacity(lists.len() + 1);
        offsets.push(0);
        for list in &lists {
            for &row in list {
                let at = grouped_rows.len();
                grouped.row_mut(at).copy_from_slice(matrix.row(row as usize));
                grouped_rows.push(row);
            }
            offsets.push(grouped_rows.len());
        }
        ApproxIndex {
            ids,
            matrix,
            centroids,
            lists,
            probe_count,
            grouped,
            grouped_rows,
            offsets,
        }
    }

    pub fn clusters(&self) -> usize {
        self.lists.len()
    }

    pub fn probe_count(&self) -> usize {
        self.probe_count
    }

    pub fn set_probe_count(&mut self, probe: usize) -> Result<()> {
        if probe < 1 || probe > self.clusters() {
            return Err(Error::InvalidConfig(format!(
                "probe_count {probe} outside 1..={}",
                self.clusters()
            )));
        }
        self.probe_count = probe;
        Ok(())
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut w = BufWriter::new(std::fs::File::create(path)?);
        write_header(
            &mut w,
            1,
            self.matrix.cols(),
            self.ids.len(),
            self.clusters(),
            self.probe_count,
        )?;
        write_mat(&mut w, &self.centroids)?;
        for list in &self.lists {
            w.write_all(&(list.len() as u64).to_le_bytes())?;
            for &row in list {
                w.write_all(&row.to_le_bytes())?;
            }
        }
        write_mat(&mut w, &self.matrix)?;
        write_ids(&mut w, &self.ids)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let mut r = BufReader::new(std::fs::File::open(path)?);
        let h = read_header(&mut r)?;
        if h.kind != 1 {
            return Err(Error::Other("not an approximate index file".into()));
        }
        let centroids = read_mat(&mut r, h.clusters, h.dim)?;
        let mut lists = Vec::with_capacity(h.clusters);
        let mut total = 0usize;
        for _ in 0..h.clusters {
            let len = read_u64(&mut r)? as usize;
            let mut list = Vec::with_capacity(len);
            for _ in 0..len {
                let mut buf = [0u8; 4];
                r.read_exact(&mut buf)?;
                let row = u32::from_le_bytes(buf);
                if row as usize >= h.count {
                    return Err(Error::Other("inverted list row out of range".into()));
                }
                list.push(row);
            }
            total += len;
            lists.push(list);
        }
        if total != h.count {
            return Err(Error::Other(format!(
                "inverted lists cover {total} rows, expected {}",
                h.count
            )));
        }
        let matrix = read_mat(&mut r, h.count, h.dim)?;
        let ids = read_ids(&mut r, h.count)?;
        let mut idx = Self::assemble(ids, matrix, centroids, lists, 1);
        idx.set_probe_count(h.probe.max(1))?;
        Ok(idx)
    }
}

fn nearest_centroid(centroids: &Mat, v: &[f64]) -> usize {
    let mut best = 0;
    let mut best_score = f64::NEG_INFINITY;
    for c in 0..centroids.rows() {
        let s = dot(centroids.row(c), v);
        if s > best_score {
            best_score = s;
            best = c;
        }
    }
    best
}

impl NnIndex for ApproxIndex {
    fn query_topk(&self, q: &[f64], k: usize) -> QueryResult {
        assert!(k >= 1, "k must be >= 1");
        assert_eq!(q.len(), self.matrix.cols(), "query dimension mismatch");
        let mut ranked: Vec<(f64, u32)> = (0..self.clusters())
            .map(|c| (dot(self.centroids.row(c), q), c as u32))
            .collect();
        ranked.sort_by(|a, b| b.0.total_cmp(&a.0).then_with(|| a.1.cmp(&b.1)));
        let probed = &ranked[..self.probe_count];
        let total: usize = probed
            .iter()
            .map(|&(_, c)| self.lists[c as usize].len())
            .sum();
        let mut scored = Vec::with_capacity(total);
        for &(_, c) in probed {
            let (start, end) = (self.offsets[c as usize], self.offsets[c as usize + 1]);
            for i in start..end {
                scored.push((dot(q, self.grouped.row(i)), self.grouped_rows[i]));
            }
        }
        top_k(&self.ids, scored, k)
    }

    fn len(&self) -> usize {
        self.ids.len()
    }

    fn dim(&self) -> usize {
        self.matrix.cols()
    }
}

/// Mean over queries of |approx top-k intersect exact top-k| / k.
pub fn recall_vs_exact(
    approx: &ApproxIndex,
    exact: &ExactIndex,
    queries: &Mat,
    k: usize,
) -> f64 {
    if queries.rows() == 0 {
        return 1.0;
    }
    let mut total = 0.0;
    for r in 0..queries.rows() {
        let q = queries.row(r);
        let truth: HashSet<String> = exact
            .query_topk(q, k)
            .neighbors
            .into_iter()
            .map(|(id, _)| id)
            .collect();
        let hits = approx
            .query_topk(q, k)
            .neighbors
            .iter()
            .filter(|(id, _)| truth.contains(id))
            .count();
        total += hits as f64 / truth.len().max(1) as f64;
    }
    total / queries.rows() as f64
}

struct Header {
    kind: u8,
    dim: usize,
    count: usize,
    clusters: usize,
    probe: usize,
}

const MAGIC: &[u8; 4] = b"BTIX";
const VERSION: u32 = 1;

fn write_header<W: Write>(
    w: &mut W,
    kind: u8,
    dim: usize,
    count: usize,
    clusters: usize,
    probe: usize,
) -> Result<()> {
    w.write_all(MAGIC)?;
    w.write_all(&VERSION.to_le_bytes())?;
    w.write_all(&[kind])?;
    w.write_all(&(dim as u32).to_le_bytes())?;
    w.write_all(&(count as u64).to_le_bytes())?;
    w.write_all(&(clusters as u32).to_le_bytes())?;
    w.write_all(&(probe as u32).to_le_bytes())?;
    Ok(())
}

fn read_header<R: Read>(r: &mut R) -> Result<Header> {
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic)?;
    if &magic != MAGIC {
        return Err(Error::Other("bad index file magic".into()));
    }
    let mut v = [0u8; 4];
    r.read_exact(&mut v)?;
    let version = u32::from_le_bytes(v);
    if version != VERSION {
        return Err(Error::Version(version));
    }
    let mut kind = [0u8; 1];
    r.read_exact(&mut kind)?;
    let mut d = [0u8; 4];
    r.read_exact(&mut d)?;
    let dim = u32::from_le_bytes(d) as usize;
    let count = read_u64(r)? as usize;
    r.read_exact(&mut d)?;
    let clusters = u32::from_le_bytes(d) as usize;
    r.read_exact(&mut d)?;
    let probe = u32::from_le_bytes(d) as usize;
    Ok(Header {
        kind: kind[0],
        dim,
        count,
        clusters,
        probe,
    })
}

fn read_u64<R: Read>(r: &mut R) -> Result<u64> {
    let mut buf = [0u8; 8];
    r.read_exact(&mut buf)?;
    Ok(u64::from_le_bytes(buf))
}

fn write_mat<W: Write>(w: &mut W, m: &Mat) -> Result<()> {
    for &v in m.data() {
        w.write_all(&v.to_le_bytes())?;
    }
    Ok(())
}

fn read_mat<R: Read>(r: &mut R, rows: usize, cols: usize) -> Result<Mat> {
    let mut data = vec![0.0; rows * cols];
    let mut buf = [0u8; 8];
    for v in &mut data {
        r.read_exact(&mut buf)?;
        *v = f64::from_le_bytes(buf);
    }
    Ok(Mat::from_vec(rows, cols, data))
}

fn write_ids<W: Write>(w: &mut W, ids: &[String]) -> Result<()> {
    for id in ids {
        let bytes = id.as_bytes();
        w.write_all(&(bytes.len() as u32).to_le_bytes())?;
        w.write_all(bytes)?;
    }
    Ok(())
}

fn read_ids<R: Read>(r: &mut R, count: usize) -> Result<Vec<String>> {
    let mut ids = Vec::with_capacity(count);
    for _ in 0..count {
        let mut lbuf = [0u8; 4];
        r.read_exact(&mut lbuf)?;
        let len = u32::from_le_bytes(lbuf) as usize;
        let mut sbuf = vec![0u8; len];
        r.read_exact(&mut sbuf)?;
        ids.push(String::from_utf8(sbuf).map_err(|e| Error::Other(e.to_string()))?);
    }
    Ok(ids)
}

/// Convenience container for saving raw embeddings (an exact index file).
pub fn save_embeddings(emb: &EmbeddingMatrix, path: &Path) -> Result<()> {
    ExactIndex::build(emb)?.save(path)
}

pub fn load_embeddings(path: &Path) -> Result<EmbeddingMatrix> {
    let idx = ExactIndex::load(path)?;
    let pre_norms = vec![f64::NAN; idx.ids.len()];
    Ok(EmbeddingMatrix {
        ids: idx.ids,
        vectors: idx.matrix,
        pre_norms,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    fn unit_rows(seed: u64, n: usize, d: usize) -> EmbeddingMatrix {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut m = Mat::zeros(n, d);
        for r in 0..n {
            let mut row: Vec<f64> = (0..d).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let norm = crate::tensor::l2_norm(&row);
            for x in &mut row {
                *x /= norm;
            }
            m.row_mut(r).copy_from_slice(&row);
        }
        EmbeddingMatrix {
            ids: (0..n).map(|i| format!("v-{i:04}")).collect(),
            vectors: m,
            pre_norms: vec![1.0; n],
        }
    }

    #[test]
    fn exact_empty_singleton_and_duplicates() {
        let empty = ExactIndex::from_parts(vec![], Mat::zeros(0, 3)).unwrap();
        assert!(empty.query_topk(&[1.0, 0.0, 0.0], 5).neighbors.is_empty());

        let one = ExactIndex::from_parts(
            vec!["a".into()],
            Mat::from_vec(1, 3, vec![1.0, 0.0, 0.0]),
        )
        .unwrap();
        let r = one.query_topk(&[0.0, 1.0, 0.0], 3);
        assert_eq!(r.neighbors.len(), 1);
        assert_eq!(r.neighbors[0].0, "a");

        assert!(ExactIndex::from_parts(
            vec!["a".into(), "a".into()],
            Mat::zeros(2, 3)
        )
        .is_err());
    }

    #[test]
    fn exact_query_ordering() {
        let idx = ExactIndex::from_parts(
            vec!["e1".into(), "e2".into()],
            Mat::from_vec(2, 2, vec![1.0, 0.0, 0.0, 1.0]),
        )
        .unwrap();
        // self-match scores 1.0 first
        let r = idx.query_topk(&[1.0, 0.0], 2);
        assert_eq!(r.neighbors[0], ("e1".to_string(), 1.0));

        let r = idx.query_topk(&[0.6, 0.8], 2);
        assert_eq!(r.neighbors[0].0, "e2");
        assert!((r.neighbors[0].1 - 0.8).abs() < 1e-12);
        assert_eq!(r.neighbors[1].0, "e1");
        assert!((r.neighbors[1].1 - 0.6).abs() < 1e-12);

        // identical scores: lower id first
        let tie = ExactIndex::from_parts(
            vec!["b".into(), "a".into()],
            Mat::from_vec(2, 2, vec![1.0, 0.0, 1.0, 0.0]),
        )
        .unwrap();
        let r = tie.query_topk(&[1.0, 0.0], 2);
        assert_eq!(r.neighbors[0].0, "a");
        assert_eq!(r.neighbors[1].0, "b");

        // k greater than corpus size returns everything
        let r = idx.query_topk(&[1.0, 0.0], 99);
        assert_eq!(r.neighbors.len(), 2);
    }

    #[test]
    fn approx_degenerate_partitions() {
        let emb = unit_rows(1, 20, 8);
        let exact = ExactIndex::build(&emb).unwrap();

        // C = 1: single list, equals exact search
        let mut one = ApproxIndex::build(&emb, 1, 7).unwrap();
        one.set_probe_count(1).unwrap();
        assert_eq!(one.lists[0].len(), 20);
        for r in 0..5 {
            let q = emb.vectors.row(r);
            assert_eq!(one.query_topk(q, 5), exact.query_topk(q, 5));
        }

        // C = rows: all lists singletons
        let full = ApproxIndex::build(&emb, 20, 7).unwrap();
        assert!(full.lists.iter().all(|l| l.len() == 1));

        // fixed seed reproduces the partition
        let a = ApproxIndex::build(&emb, 4, 9).unwrap();
        let b = ApproxIndex::build(&emb, 4, 9).unwrap();
        assert_eq!(a.lists, b.lists);

        assert!(ApproxIndex::build(&emb, 21, 7).is_err());
    }

    #[test]
    fn probe_all_is_exact() {
        let emb = unit_rows(2, 64, 8);
        let exact = ExactIndex::build(&emb).unwrap();
        let mut approx = ApproxIndex::build(&emb, 8, 3).unwrap();
        approx.set_probe_count(8).unwrap();
        let queries = unit_rows(5, 10, 8);
        assert_eq!(recall_vs_exact(&approx, &exact, &queries.vectors, 5), 1.0);
        for r in 0..queries.vectors.rows() {
            let q = queries.vectors.row(r);
            assert_eq!(approx.query_topk(q, 5), exact.query_topk(q, 5));
        }
    }

    #[test]
    fn approx_score_integrity() {
        let emb = unit_rows(3, 50, 6);
        let mut approx = ApproxIndex::build(&emb, 5, 3).unwrap();
        approx.set_probe_count(2).unwrap();
        let q = unit_rows(4, 1, 6);
        let res = approx.query_topk(q.vectors.row(0), 10);
        for (id, score) in &res.neighbors {
            let row = emb.ids.iter().position(|x| x == id).unwrap();
            let recomputed = dot(q.vectors.row(0), emb.vectors.row(row));
            assert!((score - recomputed).abs() < 1e-12);
        }
        // sorted, deduplicated
        for w in res.neighbors.windows(2) {
            assert!(w[0].1 >= w[1].1);
            assert_ne!(w[0].0, w[1].0);
        }
    }

    #[test]
    fn monotone_probing() {
        let emb = unit_rows(6, 300, 8);
        let exact = ExactIndex::build(&emb).unwrap();
        let queries = unit_rows(7, 20, 8);
        let mut prev = 0.0;
        for probe in [1, 2, 4, 8, 16] {
            let mut approx = ApproxIndex::build(&emb, 16, 11).unwrap();
            approx.set_probe_count(probe).unwrap();
            let rec = recall_vs_exact(&approx, &exact, &queries.vectors, 10);
            assert!(
                rec >= prev - 1e-12,
                "recall decreased: {prev} -> {rec} at probe {probe}"
            );
            prev = rec;
        }
        assert_eq!(prev, 1.0);
    }

    #[test]
    fn persistence_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let emb = unit_rows(8, 30, 5);

        let exact = ExactIndex::build(&emb).unwrap();
        let p = dir.path().join("exact.idx");
        exact.save(&p).unwrap();
        let loaded = ExactIndex::load(&p).unwrap();
        assert_eq!(loaded.ids, exact.ids);
        assert_eq!(loaded.matrix, exact.matrix);

        let mut approx = ApproxIndex::build(&emb, 4, 2).unwrap();
        approx.set_probe_count(3).unwrap();
        let p = dir.path().join("approx.idx");
        approx.save(&p).unwrap();
        let loaded = ApproxIndex::load(&p).unwrap();
        assert_eq!(loaded.lists, approx.lists);
        assert_eq!(loaded.probe_count(), 3);
        let q = emb.vectors.row(0);
        assert_eq!(loaded.query_topk(q, 5), approx.query_topk(q, 5));

        // version / magic validation
        std::fs::write(dir.path().join("junk.idx"), b"NOPExxxxxxxxxxxxxxxx").unwrap();
        assert!(ExactIndex::load(&dir.path().join("junk.idx")).is_err());
    }
}
