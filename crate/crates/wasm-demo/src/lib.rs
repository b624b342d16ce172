//! Browser bindings for a few pure pieces of `prvr-core`: decay curves, the
//! soft-target mixer and a planted-moment teacher distribution.

use prvr_core::data::{generate_synthetic, mv_ratio, SyntheticSpec};
use prvr_core::distillation::{teacher_distribution, TeacherRecord};
use prvr_core::schedule::{DecayKind, DecaySchedule};
use prvr_core::similarity::PairwiseMatrix;
use prvr_core::supervision::build_soft_targets;
use wasm_bindgen::prelude::*;

fn js_err(e: prvr_core::Error) -> JsError {
    JsError::new(&e.to_string())
}

fn parse_kind(kind: &str) -> Result<DecayKind, JsError> {
    match kind {
        "exponential" => Ok(DecayKind::Exponential),
        "linear" => Ok(DecayKind::Linear),
        "sigmoid" => Ok(DecayKind::Sigmoid),
        "fixed" => Ok(DecayKind::Fixed),
        other => Err(JsError::new(&format!("unknown decay kind {other:?}"))),
    }
}

/// `g(t)` for `t = 0..=t_max`.
#[wasm_bindgen]
pub fn decay_curve(kind: &str, factor: f64, intercept: f64, t_max: u32) -> Result<Vec<f64>, JsError> {
    let schedule = DecaySchedule {
        kind: parse_kind(kind)?,
        factor,
        intercept,
        ..DecaySchedule::fixed()
    };
    schedule.validate().map_err(js_err)?;
    (0..=u64::from(t_max))
        .map(|t| schedule.value(t).map_err(js_err))
        .collect()
}

/// Text→video soft targets for a row-major `n × n` guidance matrix whose rows
/// are queries and columns are videos.
#[wasm_bindgen]
pub fn soft_targets(guidance: Vec<f64>, n: usize, alpha: f64, beta: f64, row_normalize: bool) -> Result<Vec<f64>, JsError> {
    if guidance.len() != n * n {
        return Err(JsError::new(&format!("expected {} guidance values, got {}", n * n, guidance.len())));
    }
    let guidance = PairwiseMatrix::new(n, n, guidance).map_err(js_err)?;
    let targets = build_soft_targets(&guidance, alpha, beta, row_normalize).map_err(js_err)?;
    let t2v = targets.t2v_matrix();
    Ok((0..n).flat_map(|q| (0..n).map(move |v| (q, v))).map(|(q, v)| t2v.get(q, v)).collect())
}

/// Per-frame teacher cosines for one synthetic query and its planted moment.
#[wasm_bindgen]
pub struct TeacherView {
    scores: Vec<f64>,
    start: usize,
    end: usize,
    mv: f64,
}

#[wasm_bindgen]
impl TeacherView {
    #[wasm_bindgen(getter)]
    pub fn scores(&self) -> Vec<f64> {
        self.scores.clone()
    }

    #[wasm_bindgen(getter)]
    pub fn start(&self) -> usize {
        self.start
    }

    /// Inclusive last frame of the moment.
    #[wasm_bindgen(getter)]
    pub fn end(&self) -> usize {
        self.end
    }

    #[wasm_bindgen(getter)]
    pub fn mv(&self) -> f64 {
        self.mv
    }
}

#[wasm_bindgen]
pub fn planted_teacher(frames: usize, quality: f64, noise_std: f64, mv_lo: f64, mv_hi: f64, seed: u64) -> Result<TeacherView, JsError> {
    let spec = SyntheticSpec {
        name: "demo".into(),
        n_videos: 1,
        n_val_videos: 0,
        n_test_videos: 0,
        frames_per_video: frames,
        queries_per_video: 1,
        video_dim: 8,
        text_dim: 8,
        teacher_dim: 64,
        mv_range: [mv_lo, mv_hi],
        noise_std,
        teacher_quality: quality,
        seed,
        ..SyntheticSpec::desk(seed)
    };
    let ds = generate_synthetic(&spec).map_err(js_err)?;
    let query = &ds.queries[0];
    let video = &ds.videos[query.video];
    let record = TeacherRecord {
        teacher_id: spec.teachers[0].clone(),
        video_feats: video.teacher[0].to_tensor(),
        query_feat: query.teacher[0].first_row_f64(),
    };
    let dist = teacher_distribution(&record).map_err(js_err)?;
    Ok(TeacherView {
        scores: dist.scores,
        start: query.moment.start_frame,
        end: query.moment.end_frame,
        mv: mv_ratio(&query.moment, video.n_frames),
    })
}
