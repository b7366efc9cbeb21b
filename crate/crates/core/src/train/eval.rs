use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::numerics::{cosine_matrix_of, Tensor};

/// What counts as a correct retrieval.
#[derive(Clone, Copy, Debug)]
pub enum Truth<'a> {
    /// Query `i` is matched by corpus item `partner[i]` only.
    Pair(&'a [usize]),
    /// Any corpus item sharing the query's category is a match.
    Category { query: &'a [u32], corpus: &'a [u32] },
}

/// Candidate indices per query, best first. Ties in similarity go to the
/// lower candidate index.
#[derive(Clone, Debug, PartialEq)]
pub struct RetrievalResult {
    pub rankings: Vec<Vec<usize>>,
}

impl RetrievalResult {
    pub fn from_similarity(sim: &Tensor) -> Result<Self> {
        if sim.shape().rank() != 2 {
            return Err(Error::ShapeMismatch(format!("similarity must be a matrix, got {:?}", sim.dims())));
        }
        let rankings = (0..sim.rows())
            .into_par_iter()
            .map(|q| {
                let row = sim.row(q);
                let mut idx: Vec<usize> = (0..row.len()).collect();
                idx.sort_by(|&a, &b| row[b].total_cmp(&row[a]).then(a.cmp(&b)));
                idx
            })
            .collect();
        Ok(RetrievalResult { rankings })
    }

    pub fn corpus_size(&self) -> usize {
        self.rankings.first().map_or(0, Vec::len)
    }

    /// Fraction of queries with a correct candidate in the top `k`.
    pub fn recall(&self, truth: Truth<'_>, k: usize) -> Result<f64> {
        let m = self.corpus_size();
        if k == 0 || k > m {
            return Err(Error::InvalidArgument(format!("k = {k} outside 1..={m}")));
        }
        let n = self.rankings.len();
        let hits = match truth {
            Truth::Pair(partner) => {
                if partner.len() != n {
                    return Err(Error::ShapeMismatch(format!("{} partners for {n} queries", partner.len())));
                }
                self.rankings
                    .iter()
                    .zip(partner)
                    .filter(|(rank, p)| rank[..k].contains(p))
                    .count()
            }
            Truth::Category { query, corpus } => {
                if query.len() != n || corpus.len() != m {
                    return Err(Error::ShapeMismatch("category labels do not match the pool".into()));
                }
                self.rankings
                    .iter()
                    .zip(query)
                    .filter(|(rank, c)| rank[..k].iter().any(|&j| corpus[j] == **c))
                    .count()
            }
        };
        Ok(hits as f64 / n as f64)
    }
}

/// Ranks corpus rows by descending cosine similarity to each query row.
pub fn rank_by_cosine(query: &Tensor, corpus: &Tensor) -> Result<RetrievalResult> {
    RetrievalResult::from_similarity(&cosine_matrix_of(query, corpus)?)
}

pub fn recall_at_k(query: &Tensor, corpus: &Tensor, truth: Truth<'_>, k: usize) -> Result<f64> {
    rank_by_cosine(query, corpus)?.recall(truth, k)
}
