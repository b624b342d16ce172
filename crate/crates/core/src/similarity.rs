//! Video–query similarity: per-frame cosine distributions, max-pooled
//! partial similarity, pairwise matrices and branch fusion.

use std::io::Write;
use std::ops::Range;

use crate::compute::{dot, Tape, Tensor, Var};
use crate::csvfmt;
use crate::encoders::{EncodedQuery, EncodedVideo};
use crate::error::{dim_err, Error, Result};

/// Per-frame cosine similarities between one video and one query.
#[derive(Clone, Debug, PartialEq)]
pub struct SimilarityDistribution {
    pub scores: Vec<f64>,
}

impl SimilarityDistribution {
    pub fn len(&self) -> usize {
        self.scores.len()
    }

    pub fn is_empty(&self) -> bool {
        self.scores.is_empty()
    }

    /// Max-pooled similarity with the index attaining it (lowest on ties).
    pub fn max(&self) -> Option<(f64, usize)> {
        let mut best: Option<(f64, usize)> = None;
        for (i, &s) in self.scores.iter().enumerate() {
            if best.is_none_or(|(b, _)| s > b) {
                best = Some((s, i));
            }
        }
        best
    }
}

/// Dense similarity matrix with videos on rows and queries on columns.
#[derive(Clone, Debug, PartialEq)]
pub struct PairwiseMatrix {
    pub n_videos: usize,
    pub n_queries: usize,
    pub sims: Vec<f64>,
}

impl PairwiseMatrix {
    pub fn new(n_videos: usize, n_queries: usize, sims: Vec<f64>) -> Result<Self> {
        if sims.len() != n_videos * n_queries {
            return Err(dim_err!(
                "{}×{} similarity matrix with {} entries",
                n_videos,
                n_queries,
                sims.len()
            ));
        }
        Ok(Self {
            n_videos,
            n_queries,
            sims,
        })
    }

    pub fn from_tensor(t: &Tensor) -> Result<Self> {
        let (r, c) = t.dims2()?;
        Self::new(r, c, t.data().to_vec())
    }

    pub fn to_tensor(&self) -> Tensor {
        Tensor::matrix(self.n_videos, self.n_queries, self.sims.clone()).expect("consistent")
    }

    pub fn get(&self, video: usize, query: usize) -> f64 {
        self.sims[video * self.n_queries + query]
    }

    /// Query-major view: `out[q][v] = self[v][q]`.
    pub fn transposed(&self) -> Self {
        let mut sims = vec![0.0; self.sims.len()];
        for v in 0..self.n_videos {
            for q in 0..self.n_queries {
                sims[q * self.n_videos + v] = self.get(v, q);
            }
        }
        Self {
            n_videos: self.n_queries,
            n_queries: self.n_videos,
            sims,
        }
    }

    /// CSV with a header of query ids and one row per video id; values carry
    /// 9 significant digits.
    pub fn write_csv<W: Write>(&self, mut w: W, row_ids: &[String], col_ids: &[String]) -> std::io::Result<()> {
        assert_eq!(row_ids.len(), self.n_videos);
        assert_eq!(col_ids.len(), self.n_queries);
        write!(w, "id")?;
        for c in col_ids {
            write!(w, ",{}", csvfmt::field(c))?;
        }
        writeln!(w)?;
        for (r, id) in row_ids.iter().enumerate() {
            write!(w, "{}", csvfmt::field(id))?;
            for c in 0..self.n_queries {
                write!(w, ",{}", csvfmt::sig9(self.get(r, c)))?;
            }
            writeln!(w)?;
        }
        Ok(())
    }
}

pub fn cosine(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(dim_err!("cosine of vectors of length {} and {}", a.len(), b.len()));
    }
    let na = dot(a, a).sqrt();
    let nb = dot(b, b).sqrt();
    if na == 0.0 || nb == 0.0 {
        return Err(Error::DegenerateInput("cosine of a zero-norm vector".into()));
    }
    Ok(dot(a, b) / (na * nb))
}

/// Cosine between every frame (row of `frames`) and `query`.
pub fn frame_distribution(frames: &Tensor, query: &[f64]) -> Result<SimilarityDistribution> {
    let (k, z) = frames.dims2()?;
    if k == 0 {
        return Err(dim_err!("video without frames"));
    }
    if z != query.len() {
        return Err(dim_err!("frames of width {} vs query of width {}", z, query.len()));
    }
    if dot(query, query) == 0.0 {
        return Err(Error::DegenerateInput("query vector has zero norm".into()));
    }
    let scores = (0..k)
        .map(|i| {
            cosine(frames.row(i), query).map_err(|_| {
                Error::DegenerateInput(format!("frame {i} has zero norm"))
            })
        })
        .collect::<Result<_>>()?;
    Ok(SimilarityDistribution { scores })
}

/// Max over the per-frame cosine distribution.
pub fn partial_similarity(frames: &Tensor, query: &[f64]) -> Result<f64> {
    Ok(frame_distribution(frames, query)?.max().expect("k ≥ 1").0)
}

/// `out[v][q] = partial_similarity(video v, query q)` for arbitrary counts.
pub fn similarity_matrix(videos: &[EncodedVideo], queries: &[EncodedQuery]) -> Result<PairwiseMatrix> {
    let mut sims = Vec::with_capacity(videos.len() * queries.len());
    for v in videos {
        for q in queries {
            sims.push(partial_similarity(&v.features, q.sentence.data())?);
        }
    }
    PairwiseMatrix::new(videos.len(), queries.len(), sims)
}

/// Batch matrix of `N` aligned videos and queries.
pub fn pairwise_matrix(videos: &[EncodedVideo], queries: &[EncodedQuery]) -> Result<PairwiseMatrix> {
    if videos.len() != queries.len() {
        return Err(Error::Batch(format!(
            "{} videos vs {} queries in a batch",
            videos.len(),
            queries.len()
        )));
    }
    similarity_matrix(videos, queries)
}

/// Tape form: cosine of every stacked frame row against every sentence row,
/// `[Σk × S]`, and its per-video max `[V × S]`.
pub fn pairwise_on_tape(
    tape: &mut Tape,
    frames: Var,
    segments: &[Range<usize>],
    sentences: Var,
) -> Result<(Var, Var)> {
    let fnorm = tape.normalize_rows(frames).map_err(|e| match e {
        Error::DegenerateInput(m) => Error::DegenerateInput(format!("frame {m}")),
        other => other,
    })?;
    let qnorm = tape.normalize_rows(sentences).map_err(|e| match e {
        Error::DegenerateInput(m) => Error::DegenerateInput(format!("query {m}")),
        other => other,
    })?;
    let cos = tape.matmul_bt(fnorm, qnorm)?;
    let pooled = tape.segment_max_rows(cos, segments)?;
    Ok((cos, pooled))
}

/// `(1−σ)·S_I + σ·S_E`.
pub fn fuse(s_inheritance: f64, s_exploration: f64, sigma: f64) -> Result<f64> {
    check_sigma(sigma)?;
    Ok((1.0 - sigma) * s_inheritance + sigma * s_exploration)
}

pub fn fuse_matrices(inheritance: &PairwiseMatrix, exploration: &PairwiseMatrix, sigma: f64) -> Result<PairwiseMatrix> {
    check_sigma(sigma)?;
    if (inheritance.n_videos, inheritance.n_queries) != (exploration.n_videos, exploration.n_queries) {
        return Err(dim_err!("fusing matrices of different shapes"));
    }
    let sims = inheritance
        .sims
        .iter()
        .zip(&exploration.sims)
        .map(|(&i, &e)| (1.0 - sigma) * i + sigma * e)
        .collect();
    PairwiseMatrix::new(inheritance.n_videos, inheritance.n_queries, sims)
}

fn check_sigma(sigma: f64) -> Result<()> {
    if !(0.0..=1.0).contains(&sigma) {
        return Err(Error::Parameter(format!("fusion weight must be in [0,1], got {sigma}")));
    }
    Ok(())
}

/// Sample Pearson correlation between two equally long distributions.
pub fn branch_correlation(a: &SimilarityDistribution, b: &SimilarityDistribution) -> Result<f64> {
    pearson(&a.scores, &b.scores)
}

pub fn pearson(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(dim_err!("correlation of lengths {} and {}", a.len(), b.len()));
    }
    if a.len() < 2 {
        return Err(Error::DegenerateInput("correlation needs at least two points".into()));
    }
    let n = a.len() as f64;
    let ma = a.iter().sum::<f64>() / n;
    let mb = b.iter().sum::<f64>() / n;
    let (mut sab, mut saa, mut sbb) = (0.0, 0.0, 0.0);
    for (x, y) in a.iter().zip(b) {
        let (dx, dy) = (x - ma, y - mb);
        sab += dx * dy;
        saa += dx * dx;
        sbb += dy * dy;
    }
    if saa == 0.0 || sbb == 0.0 {
        return Err(Error::DegenerateInput("zero-variance distribution".into()));
    }
    Ok((sab / (saa.sqrt() * sbb.sqrt())).clamp(-1.0, 1.0))
}
