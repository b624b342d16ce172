//! Dynamic soft targets and the contrastive losses that consume them.

use crate::compute::{Tape, Tensor, Var};
use crate::error::{Error, Result};
use crate::similarity::PairwiseMatrix;

/// Per-batch supervision matrices.
///
/// `t2v[i][j]` is the target mass for query `i` retrieving video `j`;
/// `v2t[i][j]` for video `i` retrieving query `j`. The first `hard_rows`
/// rows of each are identity rows.
#[derive(Clone, Debug, PartialEq)]
pub struct SoftTargets {
    pub n: usize,
    pub t2v: Vec<f64>,
    pub v2t: Vec<f64>,
    pub hard_rows: usize,
}

impl SoftTargets {
    /// Plain one-hot supervision.
    pub fn identity(n: usize) -> Self {
        let eye = Tensor::identity(n).into_data();
        Self {
            n,
            t2v: eye.clone(),
            v2t: eye,
            hard_rows: n,
        }
    }

    pub fn t2v_matrix(&self) -> PairwiseMatrix {
        PairwiseMatrix::new(self.n, self.n, self.t2v.clone()).expect("square")
    }

    pub fn v2t_matrix(&self) -> PairwiseMatrix {
        PairwiseMatrix::new(self.n, self.n, self.v2t.clone()).expect("square")
    }

    /// Largest off-diagonal entry over both matrices.
    pub fn max_off_diagonal(&self) -> f64 {
        self.off_diagonal().fold(0.0, f64::max)
    }

    /// Sum of all off-diagonal entries over both matrices.
    pub fn off_diagonal_mass(&self) -> f64 {
        self.off_diagonal().sum()
    }

    fn off_diagonal(&self) -> impl Iterator<Item = f64> + '_ {
        let n = self.n;
        self.t2v
            .iter()
            .chain(&self.v2t)
            .enumerate()
            .filter(move |(idx, _)| {
                let flat = idx % (n * n);
                flat / n != flat % n
            })
            .map(|(_, &v)| v)
    }
}

/// Mixes hard identity rows with a detached guidance matrix.
///
/// `guidance` is indexed `[anchor][candidate]` for the text→video direction
/// (rows are queries, columns are videos); the video→text targets are built
/// the same way from its transpose. Rows `0..⌊αN⌋` stay one-hot; the rest
/// become `β·I + (1−β)·clamp(T, 0, 1)`, optionally renormalized to sum 1.
pub fn build_soft_targets(
    guidance: &PairwiseMatrix,
    alpha: f64,
    beta: f64,
    row_normalize: bool,
) -> Result<SoftTargets> {
    if guidance.n_videos != guidance.n_queries {
        return Err(Error::Batch(format!(
            "guidance matrix must be square, got {}×{}",
            guidance.n_videos, guidance.n_queries
        )));
    }
    for (name, v) in [("alpha", alpha), ("beta", beta)] {
        if !(0.0..=1.0).contains(&v) {
            return Err(Error::Parameter(format!("{name} must be in [0,1], got {v}")));
        }
    }
    let n = guidance.n_videos;
    let hard_rows = ((alpha * n as f64).floor() as usize).min(n);
    let mix = |m: &PairwiseMatrix| {
        let mut out = vec![0.0; n * n];
        for i in 0..n {
            let row = &mut out[i * n..(i + 1) * n];
            if i < hard_rows {
                row[i] = 1.0;
                continue;
            }
            for (j, r) in row.iter_mut().enumerate() {
                let hard = if i == j { 1.0 } else { 0.0 };
                *r = beta * hard + (1.0 - beta) * m.get(i, j).clamp(0.0, 1.0);
            }
            if row_normalize {
                let total: f64 = row.iter().sum();
                if total > 0.0 {
                    row.iter_mut().for_each(|r| *r /= total);
                } else {
                    // Nothing to normalize: fall back to the hard row.
                    row.fill(0.0);
                    row[i] = 1.0;
                }
            }
        }
        out
    };
    Ok(SoftTargets {
        n,
        t2v: mix(guidance),
        v2t: mix(&guidance.transposed()),
        hard_rows,
    })
}

fn square_n(tape: &Tape, s: Var) -> Result<usize> {
    let (r, c) = tape.value(s).dims2()?;
    if r != c {
        return Err(Error::Batch(format!("similarity matrix must be square, got {r}×{c}")));
    }
    Ok(r)
}

/// Two-directional cross-entropy of the softmax over `S/τ` against the soft
/// targets. `s` is video-major: `s[i][j] = S(video i, query j)`.
pub fn soft_infonce(tape: &mut Tape, s: Var, targets: &SoftTargets, temperature: f64) -> Result<Var> {
    if !(temperature > 0.0) {
        return Err(Error::Parameter(format!("temperature must be > 0, got {temperature}")));
    }
    let n = square_n(tape, s)?;
    if targets.n != n {
        return Err(Error::Batch(format!(
            "targets for {} pairs, similarities for {}",
            targets.n, n
        )));
    }
    // Video i over queries.
    let lp_v2t = tape.log_softmax(s, 1, temperature)?;
    // Column j of the column softmax is query j over videos.
    let lp_t2v = tape.log_softmax(s, 0, temperature)?;
    let v2t = tape.constant(Tensor::matrix(n, n, targets.v2t.clone())?);
    let t2v_t = tape.constant(targets.t2v_matrix().transposed().to_tensor());
    let a = tape.mul(lp_v2t, v2t)?;
    let b = tape.mul(lp_t2v, t2v_t)?;
    let total = tape.add(a, b)?;
    let sum = tape.sum(total);
    Ok(tape.scale(sum, -1.0 / n as f64))
}

/// Hinge loss against the hardest in-batch negative query and video of each
/// positive pair.
pub fn triplet_loss(tape: &mut Tape, s: Var, margin: f64) -> Result<Var> {
    if !(margin >= 0.0) {
        return Err(Error::Parameter(format!("margin must be ≥ 0, got {margin}")));
    }
    let n = square_n(tape, s)?;
    if n < 2 {
        return Err(Error::Batch("triplet loss needs at least two pairs".into()));
    }
    let diag_idx: Vec<usize> = (0..n).map(|i| i * n + i).collect();
    let mut mask = vec![false; n * n];
    for &i in &diag_idx {
        mask[i] = true;
    }
    let pos = tape.gather(s, diag_idx, vec![n])?;
    let neg_query = tape.max_along(s, 1, Some(&mask))?;
    let neg_video = tape.max_along(s, 0, Some(&mask))?;
    let mut total = None;
    for neg in [neg_query, neg_video] {
        let d = tape.sub(neg, pos)?;
        let d = tape.add_scalar(d, margin);
        let h = tape.relu(d);
        let h = tape.sum(h);
        total = Some(match total {
            None => h,
            Some(t) => tape.add(t, h)?,
        });
    }
    Ok(tape.scale(total.expect("two terms"), 1.0 / n as f64))
}

/// Loss terms of one branch.
#[derive(Clone, Copy, Debug)]
pub struct BranchLoss {
    pub total: Var,
    pub nce: Var,
    pub triplet: Var,
}

/// `L_E = soft InfoNCE + triplet`.
pub fn exploration_loss(
    tape: &mut Tape,
    s: Var,
    targets: &SoftTargets,
    margin: f64,
    temperature: f64,
) -> Result<BranchLoss> {
    let nce = soft_infonce(tape, s, targets, temperature)?;
    let triplet = triplet_loss(tape, s, margin)?;
    let total = tape.add(nce, triplet)?;
    Ok(BranchLoss {
        total,
        nce,
        triplet,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn scalar_loss(s: &[Vec<f64>], f: impl Fn(&mut Tape, Var) -> Result<Var>) -> f64 {
        let mut tape = Tape::new();
        let v = tape.param(Tensor::from_rows(s).unwrap());
        let out = f(&mut tape, v).unwrap();
        tape.value(out).item()
    }

    #[test]
    fn alpha_one_is_identity() {
        let g = PairwiseMatrix::new(3, 3, vec![0.3; 9]).unwrap();
        for beta in [0.0, 0.4, 1.0] {
            let t = build_soft_targets(&g, 1.0, beta, true).unwrap();
            assert_eq!(t, SoftTargets::identity(3));
        }
    }

    #[test]
    fn beta_one_is_identity() {
        let g = PairwiseMatrix::new(3, 3, vec![0.3, 0.9, -0.2, 0.1, 0.5, 0.7, 0.0, 0.2, 0.4]).unwrap();
        let t = build_soft_targets(&g, 0.0, 1.0, true).unwrap();
        assert_eq!(t.t2v, SoftTargets::identity(3).t2v);
        assert_eq!(t.v2t, SoftTargets::identity(3).v2t);
        assert_eq!(t.hard_rows, 0);
    }

    #[test]
    fn mixed_row_matches_hand_evaluation() {
        let mut sims = vec![0.0; 16];
        sims[2 * 4 + 2] = 0.8;
        sims[2 * 4] = 0.4;
        let g = PairwiseMatrix::new(4, 4, sims).unwrap();
        let t = build_soft_targets(&g, 0.5, 0.5, false).unwrap();
        assert_eq!(t.hard_rows, 2);
        assert_eq!(&t.t2v[8..12], &[0.2, 0.0, 0.9, 0.0]);
        let tn = build_soft_targets(&g, 0.5, 0.5, true).unwrap();
        assert!((tn.t2v[8] - 0.2 / 1.1).abs() < 1e-15);
        // v2t comes from the transpose: row 0 sees the 0.4 in column 2.
        assert_eq!(&t.v2t[0..4], &[1.0, 0.0, 0.0, 0.0]);
        assert_eq!(&t.v2t[8..12], &[0.0, 0.0, 0.9, 0.0]);
    }

    #[test]
    fn negative_guidance_is_clamped() {
        let g = PairwiseMatrix::new(2, 2, vec![0.5, -0.9, -0.9, 0.5]).unwrap();
        let t = build_soft_targets(&g, 0.0, 0.0, false).unwrap();
        assert_eq!(t.t2v, vec![0.5, 0.0, 0.0, 0.5]);
    }

    #[test]
    fn target_errors() {
        let g = PairwiseMatrix::new(2, 3, vec![0.0; 6]).unwrap();
        assert!(matches!(build_soft_targets(&g, 0.5, 0.5, true), Err(Error::Batch(_))));
        let g = PairwiseMatrix::new(2, 2, vec![0.0; 4]).unwrap();
        assert!(matches!(build_soft_targets(&g, 1.5, 0.5, true), Err(Error::Parameter(_))));
    }

    #[test]
    fn uniform_similarities_give_two_ln2() {
        let s = vec![vec![0.3, 0.3], vec![0.3, 0.3]];
        let targets = SoftTargets::identity(2);
        let loss = scalar_loss(&s, |t, v| soft_infonce(t, v, &targets, 0.07));
        assert!((loss - 2.0 * 2f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn temperature_must_be_positive() {
        let mut tape = Tape::new();
        let v = tape.param(Tensor::identity(2));
        assert!(matches!(
            soft_infonce(&mut tape, v, &SoftTargets::identity(2), 0.0),
            Err(Error::Parameter(_))
        ));
    }

    #[test]
    fn triplet_examples() {
        let s = vec![vec![1.0, -1.0], vec![-1.0, 1.0]];
        assert_eq!(scalar_loss(&s, |t, v| triplet_loss(t, v, 0.2)), 0.0);
        let s = vec![vec![0.5, 0.5], vec![0.5, 0.5]];
        assert!((scalar_loss(&s, |t, v| triplet_loss(t, v, 0.2)) - 0.4).abs() < 1e-15);
        let mut tape = Tape::new();
        let v = tape.param(Tensor::from_rows(&[vec![1.0]]).unwrap());
        assert!(matches!(triplet_loss(&mut tape, v, 0.2), Err(Error::Batch(_))));
    }

    #[test]
    fn exploration_loss_is_sum_of_parts() {
        let s = vec![
            vec![0.9, 0.1, 0.4],
            vec![0.2, 0.7, 0.65],
            vec![0.3, 0.6, 0.8],
        ];
        let mut tape = Tape::new();
        let v = tape.param(Tensor::from_rows(&s).unwrap());
        let parts = exploration_loss(&mut tape, v, &SoftTargets::identity(3), 0.2, 0.07).unwrap();
        let (t, n, tr) = (
            tape.value(parts.total).item(),
            tape.value(parts.nce).item(),
            tape.value(parts.triplet).item(),
        );
        assert!((t - (n + tr)).abs() < 1e-12);
    }
}
