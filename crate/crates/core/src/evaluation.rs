//! Retrieval metrics and the analyses built on them: recall at K, recall
//! grouped by moment-to-video ratio, positive/negative similarity margins
//! and branch complementarity.

use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::csvfmt::sig9;
use crate::data::Dataset;
use crate::encoders::{encode_texts, encode_videos, EncodedQuery, EncodedVideo};
use crate::error::{Error, Result};
use crate::model::{BranchParams, ModelState};
use crate::similarity::{frame_distribution, fuse_matrices, pearson, similarity_matrix, PairwiseMatrix};

pub const RECALL_KS: [usize; 4] = [1, 5, 10, 100];

/// Videos encoded at once on one tape.
const ENCODE_CHUNK: usize = 64;

/// One branch's encodings of a set of videos and queries.
#[derive(Clone, Debug)]
pub struct EncodedPool {
    pub videos: Vec<EncodedVideo>,
    pub queries: Vec<EncodedQuery>,
}

pub fn encode_pool(branch: &BranchParams, ds: &Dataset, videos: &[usize], queries: &[usize]) -> Result<EncodedPool> {
    let mut out_v = Vec::with_capacity(videos.len());
    for chunk in videos.chunks(ENCODE_CHUNK) {
        let tensors: Vec<_> = chunk.iter().map(|&v| ds.videos[v].features.to_tensor()).collect();
        let refs: Vec<_> = tensors.iter().collect();
        out_v.extend(encode_videos(&branch.video, &refs)?);
    }
    let mut out_q = Vec::with_capacity(queries.len());
    for chunk in queries.chunks(ENCODE_CHUNK) {
        let tensors: Vec<_> = chunk.iter().map(|&q| ds.queries[q].features.to_tensor()).collect();
        let refs: Vec<_> = tensors.iter().collect();
        out_q.extend(encode_texts(&branch.text, &refs)?);
    }
    Ok(EncodedPool {
        videos: out_v,
        queries: out_q,
    })
}

fn check_dims(model: &ModelState, ds: &Dataset) -> Result<()> {
    let b = &model.inheritance;
    if b.video.input_dim() != ds.dims.video_dim || b.text.input_dim() != ds.dims.text_dim {
        return Err(Error::Contract(format!(
            "model expects video/text dims {}/{}, dataset has {}/{}",
            b.video.input_dim(),
            b.text.input_dim(),
            ds.dims.video_dim,
            ds.dims.text_dim
        )));
    }
    if let Some(max) = b.video.max_frames() {
        if let Some(v) = ds.videos.iter().find(|v| v.features.rows > max) {
            return Err(Error::Contract(format!(
                "video {:?} has {} frames, the model handles at most {max}",
                v.id, v.features.rows
            )));
        }
    }
    Ok(())
}

/// Partial similarities of both branches over an evaluation set. Matrices
/// are `[video × query]` in the order of `videos` and `queries`.
#[derive(Clone, Debug)]
pub struct ScoredSet {
    pub videos: Vec<usize>,
    pub queries: Vec<usize>,
    pub inheritance: PairwiseMatrix,
    pub exploration: PairwiseMatrix,
    pub inheritance_pool: EncodedPool,
    pub exploration_pool: EncodedPool,
}

impl ScoredSet {
    pub fn fused(&self, sigma: f64) -> Result<PairwiseMatrix> {
        fuse_matrices(&self.inheritance, &self.exploration, sigma)
    }

    /// Row of each query's ground-truth video within `videos`.
    pub fn ground_truth(&self, ds: &Dataset) -> Result<Vec<usize>> {
        let pos: std::collections::HashMap<usize, usize> =
            self.videos.iter().enumerate().map(|(i, &v)| (v, i)).collect();
        self.queries
            .iter()
            .map(|&q| {
                pos.get(&ds.queries[q].video).copied().ok_or_else(|| {
                    Error::Data(format!(
                        "query {:?} belongs to a video outside the evaluated set",
                        ds.queries[q].id
                    ))
                })
            })
            .collect()
    }
}

/// Encodes `videos` and `queries` with both branches and scores every pair.
pub fn score_set(model: &ModelState, ds: &Dataset, videos: &[usize], queries: &[usize]) -> Result<ScoredSet> {
    check_dims(model, ds)?;
    let ip = encode_pool(&model.inheritance, ds, videos, queries)?;
    let ep = encode_pool(&model.exploration, ds, videos, queries)?;
    Ok(ScoredSet {
        videos: videos.to_vec(),
        queries: queries.to_vec(),
        inheritance: similarity_matrix(&ip.videos, &ip.queries)?,
        exploration: similarity_matrix(&ep.videos, &ep.queries)?,
        inheritance_pool: ip,
        exploration_pool: ep,
    })
}

/// Candidate videos of one query, best first.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RankedResult {
    pub query_id: String,
    /// Dataset index of the query.
    pub query: usize,
    /// Dataset indices of the candidate videos in ranked order.
    pub ranking: Vec<usize>,
    /// 1-based position of the ground-truth video.
    pub rank: usize,
}

/// Sorts every column of `scores` (descending, ties by ascending video id).
pub fn rank_scores(ds: &Dataset, scores: &PairwiseMatrix, videos: &[usize], queries: &[usize]) -> Result<Vec<RankedResult>> {
    if scores.n_videos != videos.len() || scores.n_queries != queries.len() {
        return Err(Error::Contract("score matrix does not match the evaluated set".into()));
    }
    let mut out = Vec::with_capacity(queries.len());
    for (qi, &q) in queries.iter().enumerate() {
        let mut order: Vec<usize> = (0..videos.len()).collect();
        order.sort_by(|&a, &b| {
            scores
                .get(b, qi)
                .total_cmp(&scores.get(a, qi))
                .then_with(|| ds.videos[videos[a]].id.cmp(&ds.videos[videos[b]].id))
        });
        let ranking: Vec<usize> = order.into_iter().map(|i| videos[i]).collect();
        let gt = ds.queries[q].video;
        let rank = ranking.iter().position(|&v| v == gt).ok_or_else(|| {
            Error::Data(format!(
                "ground-truth video of query {:?} is not among the candidates",
                ds.queries[q].id
            ))
        })? + 1;
        out.push(RankedResult {
            query_id: ds.queries[q].id.clone(),
            query: q,
            ranking,
            rank,
        });
    }
    Ok(out)
}

/// Ranks every query against every video of the pool by fused similarity.
pub fn rank_all(model: &ModelState, ds: &Dataset, videos: &[usize], queries: &[usize], sigma: f64) -> Result<Vec<RankedResult>> {
    let scored = score_set(model, ds, videos, queries)?;
    rank_scores(ds, &scored.fused(sigma)?, videos, queries)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct RecallReport {
    pub r1: f64,
    pub r5: f64,
    pub r10: f64,
    pub r100: f64,
    pub sum_r: f64,
}

/// Fractions of queries whose ground truth lands in the top 1, 5, 10, 100.
pub fn recall_from_ranks(ranks: &[usize]) -> Result<RecallReport> {
    if ranks.is_empty() {
        return Err(Error::Contract("recall over zero queries".into()));
    }
    let n = ranks.len() as f64;
    let at = |k: usize| ranks.iter().filter(|&&r| r <= k).count() as f64 / n;
    let (r1, r5, r10, r100) = (at(1), at(5), at(10), at(100));
    Ok(RecallReport {
        r1,
        r5,
        r10,
        r100,
        sum_r: r1 + r5 + r10 + r100,
    })
}

pub fn recall_report(results: &[RankedResult]) -> Result<RecallReport> {
    recall_from_ranks(&results.iter().map(|r| r.rank).collect::<Vec<_>>())
}

/// Half-open bin `(lo, hi]` of moment-to-video ratios.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MvBin {
    pub lo: f64,
    pub hi: f64,
    pub count: usize,
    /// `None` for an empty bin.
    pub recall: Option<RecallReport>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MvGroupReport {
    pub bins: Vec<MvBin>,
}

/// Boundaries `0 = b₀ < b₁ < … < b_n = 1` splitting `ratios` into `n`
/// groups of near-equal size. Coinciding quantiles merge bins.
pub fn quantile_bins(ratios: &[f64], n: usize) -> Result<Vec<f64>> {
    if n == 0 {
        return Err(Error::Parameter("need at least one M/V bin".into()));
    }
    let mut sorted = ratios.to_vec();
    sorted.sort_by(f64::total_cmp);
    let mut edges = vec![0.0];
    if !sorted.is_empty() {
        for j in 1..n {
            let idx = (j * sorted.len()).div_ceil(n).max(1) - 1;
            let b = sorted[idx];
            if b > *edges.last().expect("nonempty") && b < 1.0 {
                edges.push(b);
            }
        }
    }
    edges.push(1.0);
    Ok(edges)
}

/// Recall per M/V bin; `edges` as produced by [`quantile_bins`].
pub fn grouped_by_mv(results: &[RankedResult], ds: &Dataset, edges: &[f64]) -> Result<MvGroupReport> {
    if edges.len() < 2 || edges[0] != 0.0 || *edges.last().expect("len ≥ 2") != 1.0 || edges.windows(2).any(|w| w[0] >= w[1]) {
        return Err(Error::Parameter(format!("M/V bin edges {edges:?} do not partition (0,1]")));
    }
    let mut ranks = vec![Vec::new(); edges.len() - 1];
    for r in results {
        let q = ds
            .queries
            .get(r.query)
            .filter(|q| q.id == r.query_id)
            .ok_or_else(|| Error::Data(format!("query {:?} has no moment annotation", r.query_id)))?;
        let mv = crate::data::mv_ratio(&q.moment, ds.videos[q.video].n_frames);
        let bin = edges[1..].iter().position(|&hi| mv <= hi).unwrap_or(edges.len() - 2);
        ranks[bin].push(r.rank);
    }
    let bins = ranks
        .into_iter()
        .enumerate()
        .map(|(i, r)| {
            Ok(MvBin {
                lo: edges[i],
                hi: edges[i + 1],
                count: r.len(),
                recall: if r.is_empty() { None } else { Some(recall_from_ranks(&r)?) },
            })
        })
        .collect::<Result<_>>()?;
    Ok(MvGroupReport { bins })
}

pub const HISTOGRAM_BINS: usize = 50;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct HistogramBin {
    pub bin_left: f64,
    pub bin_right: f64,
    pub pos_count: usize,
    pub neg_count: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MarginReport {
    pub positives: Vec<f64>,
    pub negatives: Vec<f64>,
    pub mean_positive: f64,
    pub mean_negative: f64,
    /// `mean(positives) − mean(negatives)`.
    pub center_distance: f64,
}

/// Splits a scored set into annotated (positive) and other pairs.
pub fn margin_from_scores(ds: &Dataset, scores: &PairwiseMatrix, videos: &[usize], queries: &[usize]) -> Result<MarginReport> {
    let mut positives = Vec::new();
    let mut negatives = Vec::new();
    for (qi, &q) in queries.iter().enumerate() {
        for (vi, &v) in videos.iter().enumerate() {
            let s = scores.get(vi, qi);
            if ds.queries[q].video == v {
                positives.push(s);
            } else {
                negatives.push(s);
            }
        }
    }
    if positives.is_empty() {
        return Err(Error::Data("margin report over a set without positive pairs".into()));
    }
    let mean = |xs: &[f64]| if xs.is_empty() { 0.0 } else { xs.iter().sum::<f64>() / xs.len() as f64 };
    let (mean_positive, mean_negative) = (mean(&positives), mean(&negatives));
    Ok(MarginReport {
        positives,
        negatives,
        mean_positive,
        mean_negative,
        center_distance: mean_positive - mean_negative,
    })
}

pub fn margin_report(model: &ModelState, ds: &Dataset, videos: &[usize], queries: &[usize], sigma: f64) -> Result<MarginReport> {
    let scored = score_set(model, ds, videos, queries)?;
    margin_from_scores(ds, &scored.fused(sigma)?, videos, queries)
}

impl MarginReport {
    /// Counts per uniform bin over `[−1, 1]`; the last bin is closed.
    pub fn histogram(&self) -> Vec<HistogramBin> {
        let width = 2.0 / HISTOGRAM_BINS as f64;
        let mut bins: Vec<HistogramBin> = (0..HISTOGRAM_BINS)
            .map(|i| HistogramBin {
                bin_left: -1.0 + i as f64 * width,
                bin_right: -1.0 + (i + 1) as f64 * width,
                pos_count: 0,
                neg_count: 0,
            })
            .collect();
        let slot = |s: f64| (((s + 1.0) / width).floor().max(0.0) as usize).min(HISTOGRAM_BINS - 1);
        for &s in &self.positives {
            bins[slot(s)].pos_count += 1;
        }
        for &s in &self.negatives {
            bins[slot(s)].neg_count += 1;
        }
        bins
    }

    pub fn write_histogram_csv<W: Write>(&self, mut w: W) -> std::io::Result<()> {
        writeln!(w, "bin_left,bin_right,pos_count,neg_count")?;
        for b in self.histogram() {
            writeln!(w, "{},{},{},{}", sig9(b.bin_left), sig9(b.bin_right), b.pos_count, b.neg_count)?;
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ComplementarityReport {
    /// Mean Pearson correlation between the two branches' per-frame
    /// distributions over the positive pairs.
    pub mean_correlation: f64,
    pub evaluated: usize,
    /// Pairs skipped because a distribution had zero variance.
    pub skipped: usize,
    /// Same mean taken over every query-video pair in the pool, or `None`
    /// when no pair had a usable correlation.
    pub all_pairs_correlation: Option<f64>,
    pub all_pairs_evaluated: usize,
}

pub fn complementarity_from_pools(
    ds: &Dataset,
    inheritance: &EncodedPool,
    exploration: &EncodedPool,
    videos: &[usize],
    queries: &[usize],
) -> Result<ComplementarityReport> {
    let pos: std::collections::HashMap<usize, usize> = videos.iter().enumerate().map(|(i, &v)| (v, i)).collect();
    let correlation = |qi: usize, vi: usize| -> Result<Option<f64>> {
        let a = frame_distribution(&inheritance.videos[vi].features, inheritance.queries[qi].sentence.data())?;
        let b = frame_distribution(&exploration.videos[vi].features, exploration.queries[qi].sentence.data())?;
        match pearson(&a.scores, &b.scores) {
            Ok(r) => Ok(Some(r)),
            Err(Error::DegenerateInput(_)) => Ok(None),
            Err(e) => Err(e),
        }
    };
    let (mut total, mut evaluated, mut skipped) = (0.0, 0, 0);
    let (mut all_total, mut all_evaluated) = (0.0, 0);
    for (qi, &q) in queries.iter().enumerate() {
        for vi in 0..videos.len() {
            let Some(r) = correlation(qi, vi)? else {
                if pos.get(&ds.queries[q].video) == Some(&vi) {
                    skipped += 1;
                }
                continue;
            };
            all_total += r;
            all_evaluated += 1;
            if pos.get(&ds.queries[q].video) == Some(&vi) {
                total += r;
                evaluated += 1;
            }
        }
    }
    if evaluated == 0 {
        return Err(Error::DegenerateInput("no positive pair had a usable correlation".into()));
    }
    Ok(ComplementarityReport {
        mean_correlation: total / evaluated as f64,
        evaluated,
        skipped,
        all_pairs_correlation: (all_evaluated > 0).then(|| all_total / all_evaluated as f64),
        all_pairs_evaluated: all_evaluated,
    })
}

pub fn complementarity(model: &ModelState, ds: &Dataset, videos: &[usize], queries: &[usize]) -> Result<ComplementarityReport> {
    let scored = score_set(model, ds, videos, queries)?;
    complementarity_from_pools(ds, &scored.inheritance_pool, &scored.exploration_pool, videos, queries)
}

/// Everything `prvr eval` reports.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub sigma: f64,
    pub n_videos: usize,
    pub n_queries: usize,
    pub recall: RecallReport,
    pub mv_groups: MvGroupReport,
    pub center_distance: f64,
    pub mean_positive: f64,
    pub mean_negative: f64,
    pub n_positive_pairs: usize,
    pub n_negative_pairs: usize,
    pub complementarity: Option<ComplementarityReport>,
}

/// Full evaluation of one set; also returns the margin lists for export.
pub fn evaluate(
    model: &ModelState,
    ds: &Dataset,
    videos: &[usize],
    queries: &[usize],
    sigma: f64,
    mv_bins: usize,
) -> Result<(EvalReport, MarginReport, Vec<RankedResult>)> {
    let scored = score_set(model, ds, videos, queries)?;
    let fused = scored.fused(sigma)?;
    let results = rank_scores(ds, &fused, videos, queries)?;
    let recall = recall_report(&results)?;
    let ratios: Vec<f64> = queries.iter().map(|&q| ds.mv_ratio(q)).collect();
    let mv_groups = grouped_by_mv(&results, ds, &quantile_bins(&ratios, mv_bins)?)?;
    let margin = margin_from_scores(ds, &fused, videos, queries)?;
    let comp = match complementarity_from_pools(ds, &scored.inheritance_pool, &scored.exploration_pool, videos, queries) {
        Ok(c) => Some(c),
        Err(Error::DegenerateInput(_)) => None,
        Err(e) => return Err(e),
    };
    let report = EvalReport {
        sigma,
        n_videos: videos.len(),
        n_queries: queries.len(),
        recall,
        mv_groups,
        center_distance: margin.center_distance,
        mean_positive: margin.mean_positive,
        mean_negative: margin.mean_negative,
        n_positive_pairs: margin.positives.len(),
        n_negative_pairs: margin.negatives.len(),
        complementarity: comp,
    };
    Ok((report, margin, results))
}
