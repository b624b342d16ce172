//! Teacher distributions, KL consistency and the inheritance-branch loss.

use crate::compute::{Tape, Tensor, Var};
use crate::error::{dim_err, Error, Result};
use crate::schedule::DecaySchedule;
use crate::similarity::{frame_distribution, PairwiseMatrix, SimilarityDistribution};
use crate::supervision::{soft_infonce, triplet_loss, SoftTargets};

/// Frozen teacher features for one (video, query) pair.
#[derive(Clone, Debug, PartialEq)]
pub struct TeacherRecord {
    pub teacher_id: String,
    /// `[k × d]`, one row per frame.
    pub video_feats: Tensor,
    pub query_feat: Vec<f64>,
}

/// Per-frame cosine between the teacher's frames and its query feature.
pub fn teacher_distribution(rec: &TeacherRecord) -> Result<SimilarityDistribution> {
    frame_distribution(&rec.video_feats, &rec.query_feat)
}

/// Element-wise sum of several teachers' distributions.
pub fn fuse_teachers(dists: &[SimilarityDistribution]) -> Result<SimilarityDistribution> {
    let first = dists
        .first()
        .ok_or_else(|| Error::Batch("no teacher distributions to fuse".into()))?;
    let mut scores = vec![0.0; first.len()];
    for d in dists {
        if d.len() != scores.len() {
            return Err(Error::Batch(format!(
                "teacher distributions of lengths {} and {}",
                scores.len(),
                d.len()
            )));
        }
        for (s, &v) in scores.iter_mut().zip(&d.scores) {
            *s += v;
        }
    }
    Ok(SimilarityDistribution { scores })
}

/// `KL(softmax(Cs/τ) ‖ softmax(Ct/τ))`. `cs` may be `[k]` or `[1×k]`; the
/// teacher side is a constant.
pub fn kl_consistency(tape: &mut Tape, cs: Var, ct: &SimilarityDistribution, tau_kl: f64) -> Result<Var> {
    if !(tau_kl > 0.0) {
        return Err(Error::Parameter(format!("tau_kl must be > 0, got {tau_kl}")));
    }
    let k = tape.value(cs).numel();
    if k == 0 || k != ct.len() {
        return Err(dim_err!("student distribution of length {} vs teacher {}", k, ct.len()));
    }
    let row = tape.gather(cs, (0..k).collect(), vec![1, k])?;
    let log_ps = tape.log_softmax(row, 1, tau_kl)?;
    let ps = tape.softmax(row, 1, tau_kl)?;
    let log_pt = log_softmax_plain(&ct.scores, tau_kl);
    let log_pt = tape.constant(Tensor::matrix(1, k, log_pt)?);
    let diff = tape.sub(log_ps, log_pt)?;
    let terms = tape.mul(ps, diff)?;
    Ok(tape.sum(terms))
}

pub(crate) fn log_softmax_plain(x: &[f64], tau: f64) -> Vec<f64> {
    let max = x.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let lse = x.iter().map(|v| ((v - max) / tau).exp()).sum::<f64>().ln();
    x.iter().map(|v| (v - max) / tau - lse).collect()
}

/// `w = w0·g(t)`.
pub fn dynamic_weight(schedule: &DecaySchedule, w0: f64, t: u64) -> Result<f64> {
    if !(w0 >= 0.0) {
        return Err(Error::Parameter(format!("w0 must be ≥ 0, got {w0}")));
    }
    Ok(w0 * schedule.value(t)?)
}

/// Loss terms of the inheritance branch.
#[derive(Clone, Copy, Debug)]
pub struct InheritanceLoss {
    pub total: Var,
    /// Mean KL over the positive pairs, before weighting.
    pub consistency: Var,
    pub nce: Var,
    pub triplet: Var,
}

/// `w·mean(L_c) + soft InfoNCE + triplet` on the inheritance similarities.
///
/// `cs[i]` is the student's per-frame distribution for positive pair `i`
/// and `ct[i]` the matching (fused) teacher distribution.
#[allow(clippy::too_many_arguments)]
pub fn inheritance_loss(
    tape: &mut Tape,
    s: Var,
    targets: &SoftTargets,
    cs: &[Var],
    ct: &[SimilarityDistribution],
    w: f64,
    margin: f64,
    temperature: f64,
    tau_kl: f64,
) -> Result<InheritanceLoss> {
    if cs.len() != ct.len() || cs.is_empty() {
        return Err(Error::Batch(format!(
            "{} student vs {} teacher distributions",
            cs.len(),
            ct.len()
        )));
    }
    let mut kl_sum = None;
    for (&c, t) in cs.iter().zip(ct) {
        let kl = kl_consistency(tape, c, t, tau_kl)?;
        kl_sum = Some(match kl_sum {
            None => kl,
            Some(acc) => tape.add(acc, kl)?,
        });
    }
    let consistency = tape.scale(kl_sum.expect("nonempty"), 1.0 / cs.len() as f64);
    let nce = soft_infonce(tape, s, targets, temperature)?;
    let triplet = triplet_loss(tape, s, margin)?;
    let weighted = tape.scale(consistency, w);
    let total = tape.add(weighted, nce)?;
    let total = tape.add(total, triplet)?;
    Ok(InheritanceLoss {
        total,
        consistency,
        nce,
        triplet,
    })
}

/// One teacher's features for the videos and queries of a batch.
#[derive(Clone, Debug)]
pub struct TeacherView<'a> {
    pub videos: Vec<&'a Tensor>,
    pub queries: Vec<&'a [f64]>,
}

/// Teacher pairwise matrix `[video × query]`: the max over the fused
/// per-frame distribution, divided by the teacher count so it stays in
/// `[−1, 1]`.
pub fn teacher_pairwise(teachers: &[TeacherView<'_>]) -> Result<PairwiseMatrix> {
    let first = teachers
        .first()
        .ok_or_else(|| Error::Batch("no teachers".into()))?;
    let (nv, nq) = (first.videos.len(), first.queries.len());
    if teachers.iter().any(|t| t.videos.len() != nv || t.queries.len() != nq) {
        return Err(Error::Batch("teachers disagree on the batch size".into()));
    }
    let mut sims = Vec::with_capacity(nv * nq);
    for v in 0..nv {
        for q in 0..nq {
            let dists = teachers
                .iter()
                .map(|t| frame_distribution(t.videos[v], t.queries[q]))
                .collect::<Result<Vec<_>>>()?;
            let fused = fuse_teachers(&dists)?;
            sims.push(fused.max().expect("k ≥ 1").0 / teachers.len() as f64);
        }
    }
    PairwiseMatrix::new(nv, nq, sims)
}
