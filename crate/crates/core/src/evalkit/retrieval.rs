use std::cmp::Ordering;
use std::collections::{BTreeMap, HashMap, HashSet};

use rand_distr::{Distribution, StandardNormal};
use serde::Serialize;

use crate::encoder::EncoderState;
use crate::error::{Error, Result};
use crate::imaging::{augment_uncropped, center_square, AugmentConfig, Image};
use crate::matrix::Matrix;
use crate::rng::RngStream;

const PAIR_STREAM: u64 = 0x9A1B;

/// Immutable set of labelled vectors searched by exact L2 distance.
#[derive(Debug, Clone, PartialEq)]
pub struct RetrievalIndex {
    ids: Vec<String>,
    vectors: Matrix,
    positions: HashMap<String, usize>,
}

impl RetrievalIndex {
    pub fn new(ids: Vec<String>, vectors: Matrix) -> Result<Self> {
        if ids.len() != vectors.rows() {
            return Err(Error::shape(format!(
                "{} ids for {} vectors",
                ids.len(),
                vectors.rows()
            )));
        }
        let mut positions = HashMap::with_capacity(ids.len());
        for (p, id) in ids.iter().enumerate() {
            if positions.insert(id.clone(), p).is_some() {
                return Err(Error::DuplicateId(id.clone()));
            }
        }
        Ok(Self {
            ids,
            vectors,
            positions,
        })
    }

    /// Ids `"0"`, `"1"`, ... in row order.
    pub fn with_row_ids(vectors: Matrix) -> Self {
        let ids = (0..vectors.rows()).map(|i| i.to_string()).collect();
        Self::new(ids, vectors).expect("row ids are unique")
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.vectors.cols()
    }

    pub fn ids(&self) -> &[String] {
        &self.ids
    }

    pub fn vectors(&self) -> &Matrix {
        &self.vectors
    }

    pub fn position(&self, id: &str) -> Option<usize> {
        self.positions.get(id).copied()
    }

    pub fn into_parts(self) -> (Vec<String>, Matrix) {
        (self.ids, self.vectors)
    }
}

/// Neighbors of one query, nearest first.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RankedResult {
    pub query: Option<String>,
    pub neighbors: Vec<String>,
    pub distances: Vec<f64>,
}

pub(crate) fn l2(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt()
}

fn rank(index: &RetrievalIndex, query: &[f64], k: usize, skip: Option<usize>) -> Result<(Vec<usize>, Vec<f64>)> {
    if query.len() != index.dim() {
        return Err(Error::shape(format!(
            "query has {} dims, index has {}",
            query.len(),
            index.dim()
        )));
    }
    let available = index.len() - usize::from(skip.is_some());
    if k > available {
        return Err(Error::invalid(format!(
            "k = {k} exceeds the {available} searchable items"
        )));
    }
    let mut cand: Vec<(f64, usize)> = (0..index.len())
        .filter(|&p| Some(p) != skip)
        .map(|p| (l2(query, index.vectors.row(p)), p))
        .collect();
    let order =
        |a: &(f64, usize), b: &(f64, usize)| a.0.total_cmp(&b.0).then_with(|| index.ids[a.1].cmp(&index.ids[b.1]));
    if k < cand.len() && k > 0 {
        cand.select_nth_unstable_by(k - 1, order);
    }
    cand.truncate(k);
    cand.sort_unstable_by(order);
    Ok(cand.into_iter().map(|(d, p)| (p, d)).unzip())
}

/// Exact top-`k` by L2 distance; equal distances are ordered by id.
pub fn knn(index: &RetrievalIndex, query: &[f64], k: usize) -> Result<RankedResult> {
    let (pos, distances) = rank(index, query, k, None)?;
    Ok(RankedResult {
        query: None,
        neighbors: pos.into_iter().map(|p| index.ids[p].clone()).collect(),
        distances,
    })
}

/// Top-`k` for an indexed item, the item itself excluded.
pub fn knn_by_id(index: &RetrievalIndex, id: &str, k: usize) -> Result<RankedResult> {
    let p = index
        .position(id)
        .ok_or_else(|| Error::invalid(format!("query id `{id}` is not in the index")))?;
    let (pos, distances) = rank(index, index.vectors.row(p), k, Some(p))?;
    Ok(RankedResult {
        query: Some(id.to_string()),
        neighbors: pos.into_iter().map(|q| index.ids[q].clone()).collect(),
        distances,
    })
}

/// Average precision over the relevant ranks of each query's full ranking
/// (query excluded), averaged over queries.
pub fn mean_average_precision(
    index: &RetrievalIndex,
    queries: &[String],
    relevance: &HashMap<String, HashSet<String>>,
) -> Result<f64> {
    if queries.is_empty() {
        return Err(Error::invalid("no queries given"));
    }
    let mut total = 0.0;
    for q in queries {
        let relevant = relevance
            .get(q)
            .filter(|r| !r.is_empty())
            .ok_or_else(|| Error::invalid(format!("query `{q}` has an empty relevance set")))?;
        if relevant.contains(q) {
            return Err(Error::invalid(format!(
                "relevance set of `{q}` contains the query itself"
            )));
        }
        let ranked = knn_by_id(index, q, index.len() - 1)?;
        let (mut hits, mut ap) = (0usize, 0.0);
        for (r, id) in ranked.neighbors.iter().enumerate() {
            if relevant.contains(id) {
                hits += 1;
                ap += hits as f64 / (r + 1) as f64;
            }
        }
        total += ap / relevant.len() as f64;
    }
    Ok(total / queries.len() as f64)
}

/// Anything that maps images to one embedding row each.
pub trait Embedder {
    fn embed_images(&self, images: &[Image]) -> Result<Matrix>;
}

/// Encoder embedding with the shorter side first resized to `short_side`.
#[derive(Debug, Clone, Copy)]
pub struct EncoderEmbedder<'a> {
    pub state: &'a EncoderState,
    pub short_side: usize,
}

impl Embedder for EncoderEmbedder<'_> {
    fn embed_images(&self, images: &[Image]) -> Result<Matrix> {
        self.state.embed(images, self.short_side)
    }
}

impl Embedder for EncoderState {
    fn embed_images(&self, images: &[Image]) -> Result<Matrix> {
        self.embed(images, self.spec().in_side)
    }
}

/// Ignores the pixels and returns i.i.d. standard normal rows.
#[derive(Debug, Clone, Copy)]
pub struct RandomEmbedder {
    pub dim: usize,
    pub seed: u64,
}

impl Embedder for RandomEmbedder {
    fn embed_images(&self, images: &[Image]) -> Result<Matrix> {
        let mut rng = RngStream::new(self.seed, 0xE3B).rng();
        let data = (0..images.len() * self.dim)
            .map(|_| StandardNormal.sample(&mut rng))
            .collect();
        Matrix::new(images.len(), self.dim, data)
    }
}

/// Raw pixel values scaled to `[0, 1]`; identical images embed identically.
#[derive(Debug, Clone, Copy, Default)]
pub struct PixelEmbedder;

impl Embedder for PixelEmbedder {
    fn embed_images(&self, images: &[Image]) -> Result<Matrix> {
        let width = images.first().map_or(0, |i| i.data().len());
        if images.iter().any(|i| i.data().len() != width) {
            return Err(Error::shape("pixel embedding needs equally sized images"));
        }
        let data = images
            .iter()
            .flat_map(|i| i.data().iter().map(|&v| v as f64 / 255.0))
            .collect();
        Matrix::new(images.len(), width, data)
    }
}

/// Top-`k` pair retrieval accuracies keyed by `k`.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct PairRetrieval {
    pub n_sources: usize,
    pub pooled: usize,
    pub accuracy: BTreeMap<usize, f64>,
}

impl PairRetrieval {
    pub fn top(&self, k: usize) -> Option<f64> {
        self.accuracy.get(&k).copied()
    }
}

/// Pair retrieval over pooled embeddings where row `i` and row `i + n` are
/// counterparts. For every item the counterpart's rank among the other
/// `2n - 1` items decides the hit at each `k`; ties are ordered by row.
pub fn pair_retrieval_from_embeddings(pooled: &Matrix, k_list: &[usize]) -> Result<PairRetrieval> {
    let total = pooled.rows();
    if total < 4 || !total.is_multiple_of(2) {
        return Err(Error::invalid(format!(
            "pooled embeddings need an even count ≥ 4, got {total}"
        )));
    }
    if let Some(&k) = k_list.iter().find(|&&k| k == 0 || k >= total) {
        return Err(Error::invalid(format!("k = {k} outside 1..{total}")));
    }
    let n = total / 2;
    let ranks: Vec<usize> = (0..total)
        .map(|a| {
            let b = if a < n { a + n } else { a - n };
            let target = l2(pooled.row(a), pooled.row(b));
            (0..total)
                .filter(|&c| c != a && c != b)
                .filter(|&c| {
                    let d = l2(pooled.row(a), pooled.row(c));
                    match d.total_cmp(&target) {
                        Ordering::Less => true,
                        Ordering::Equal => c < b,
                        Ordering::Greater => false,
                    }
                })
                .count()
        })
        .collect();
    let accuracy = k_list
        .iter()
        .map(|&k| (k, ranks.iter().filter(|&&r| r < k).count() as f64 / total as f64))
        .collect();
    Ok(PairRetrieval {
        n_sources: n,
        pooled: total,
        accuracy,
    })
}

/// Each source is augmented once with every enabled op except cropping;
/// originals and augmentations are center-cropped to their short-side
/// square, embedded together, and each item's counterpart is searched
/// among all other pooled items.
pub fn pair_retrieval_eval<E: Embedder + ?Sized>(
    embedder: &E,
    images: &[Image],
    cfg: &AugmentConfig,
    k_list: &[usize],
    seed: u64,
) -> Result<PairRetrieval> {
    if images.len() < 2 {
        return Err(Error::invalid(format!(
            "pair retrieval needs at least 2 images, got {}",
            images.len()
        )));
    }
    cfg.validate()?;
    let stream = RngStream::new(seed, PAIR_STREAM);
    let mut pooled: Vec<Image> = images.iter().map(center_square).collect();
    for (i, img) in images.iter().enumerate() {
        pooled.push(center_square(&augment_uncropped(
            img,
            cfg,
            &stream.derive(i as u64, 0),
        )?));
    }
    let emb = embedder.embed_images(&pooled)?;
    if emb.rows() != pooled.len() {
        return Err(Error::shape(format!(
            "embedder returned {} rows for {} images",
            emb.rows(),
            pooled.len()
        )));
    }
    pair_retrieval_from_embeddings(&emb, k_list)
}
