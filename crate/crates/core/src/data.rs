//! Datasets on disk and in memory: the binary feature format, the JSON
//! manifest, moment annotations, batching and the synthetic generator.
//!
//! Directory layout:
//!
//! ```text
//! manifest.json
//! video/<id>.prvf
//! text/<id>.prvf
//! teacher/<teacher_id>/video/<id>.prvf
//! teacher/<teacher_id>/text/<id>.prvf
//! ```

use std::collections::{HashMap, HashSet};
use std::fs;
use std::path::{Path, PathBuf};

use rand::seq::{IndexedRandom, SliceRandom};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::compute::Tensor;
use crate::error::{Error, Result};

pub const FEATURE_MAGIC: [u8; 4] = *b"PRVF";
pub const FEATURE_VERSION: u32 = 1;
const HEADER_LEN: usize = 16;

/// Row-major `f32` matrix as stored in a `.prvf` file.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureMatrix {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<f32>,
}

impl FeatureMatrix {
    pub fn new(rows: usize, cols: usize, data: Vec<f32>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::Dimension(format!(
                "{rows}×{cols} feature matrix with {} values",
                data.len()
            )));
        }
        Ok(Self { rows, cols, data })
    }

    pub fn row(&self, r: usize) -> &[f32] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn to_tensor(&self) -> Tensor {
        let data = self.data.iter().map(|&v| v as f64).collect();
        Tensor::matrix(self.rows, self.cols, data).expect("consistent shape")
    }

    /// First row as an `f64` vector.
    pub fn first_row_f64(&self) -> Vec<f64> {
        self.row(0).iter().map(|&v| v as f64).collect()
    }

    /// Keeps `max` rows at uniformly spaced positions when there are more.
    pub fn subsample_rows(&self, max: usize) -> FeatureMatrix {
        if self.rows <= max || max == 0 {
            return self.clone();
        }
        let data = subsample_indices(self.rows, max)
            .into_iter()
            .flat_map(|r| self.row(r).iter().copied())
            .collect();
        FeatureMatrix {
            rows: max,
            cols: self.cols,
            data,
        }
    }

    pub fn encode(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(HEADER_LEN + 4 * self.data.len());
        out.extend_from_slice(&FEATURE_MAGIC);
        out.extend_from_slice(&FEATURE_VERSION.to_le_bytes());
        out.extend_from_slice(&(self.rows as u32).to_le_bytes());
        out.extend_from_slice(&(self.cols as u32).to_le_bytes());
        for v in &self.data {
            out.extend_from_slice(&v.to_le_bytes());
        }
        out
    }

    /// Parses a `.prvf` image; `path` is only used in error messages.
    pub fn decode(bytes: &[u8], path: &Path) -> Result<Self> {
        let fail = |offset: usize, message: String| Error::Format {
            path: path.to_path_buf(),
            offset: offset as u64,
            message,
        };
        if bytes.len() < 4 || bytes[..4] != FEATURE_MAGIC {
            return Err(fail(0, "bad magic bytes, expected \"PRVF\"".into()));
        }
        if bytes.len() < HEADER_LEN {
            return Err(fail(bytes.len(), "truncated header".into()));
        }
        let word = |at: usize| u32::from_le_bytes(bytes[at..at + 4].try_into().expect("4 bytes"));
        let version = word(4);
        if version != FEATURE_VERSION {
            return Err(fail(4, format!("unsupported format version {version}")));
        }
        let (rows, cols) = (word(8) as usize, word(12) as usize);
        let expected = HEADER_LEN + 4 * rows * cols;
        if bytes.len() < expected {
            return Err(fail(
                bytes.len(),
                format!("truncated data: {rows}×{cols} needs {expected} bytes"),
            ));
        }
        if bytes.len() > expected {
            return Err(fail(expected, "trailing bytes after data".into()));
        }
        let data = bytes[HEADER_LEN..]
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
            .collect();
        Ok(Self { rows, cols, data })
    }

    pub fn read(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::decode(&bytes, path)
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        if let Some(parent) = path.parent() {
            fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
        }
        fs::write(path, self.encode()).map_err(|e| Error::io(path, e))
    }
}

/// `max` indices spread uniformly over `0..n`.
pub fn subsample_indices(n: usize, max: usize) -> Vec<usize> {
    if n <= max {
        return (0..n).collect();
    }
    (0..max).map(|i| i * n / max).collect()
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    #[default]
    Train,
    Val,
    Test,
}

/// Inclusive frame span of the moment a query describes.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MomentAnnotation {
    pub start_frame: usize,
    pub end_frame: usize,
}

/// Moment length over video length.
pub fn mv_ratio(m: &MomentAnnotation, n_frames: usize) -> f64 {
    (m.end_frame - m.start_frame + 1) as f64 / n_frames as f64
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Dims {
    pub video_dim: usize,
    pub text_dim: usize,
    pub teacher_dim: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct VideoEntry {
    pub id: String,
    pub n_frames: usize,
    pub feature_file: String,
    #[serde(default)]
    pub split: Split,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct QueryEntry {
    pub id: String,
    pub feature_file: String,
    pub n_tokens: usize,
    pub video_id: String,
    pub moment: MomentAnnotation,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetManifest {
    pub name: String,
    pub dims: Dims,
    pub videos: Vec<VideoEntry>,
    pub queries: Vec<QueryEntry>,
    #[serde(default)]
    pub teachers: Vec<String>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Video {
    pub id: String,
    pub split: Split,
    /// Frame count as annotated; `features` may hold fewer rows once capped.
    pub n_frames: usize,
    pub features: FeatureMatrix,
    /// One `[frames × teacher_dim]` matrix per teacher, in manifest order.
    pub teacher: Vec<FeatureMatrix>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Query {
    pub id: String,
    /// Index into `Dataset::videos`.
    pub video: usize,
    pub moment: MomentAnnotation,
    /// `[tokens × text_dim]`.
    pub features: FeatureMatrix,
    /// One `[1 × teacher_dim]` matrix per teacher.
    pub teacher: Vec<FeatureMatrix>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub name: String,
    pub dims: Dims,
    pub teachers: Vec<String>,
    pub videos: Vec<Video>,
    pub queries: Vec<Query>,
}

fn video_file(id: &str) -> String {
    format!("video/{id}.prvf")
}

fn text_file(id: &str) -> String {
    format!("text/{id}.prvf")
}

fn teacher_file(teacher: &str, kind: &str, id: &str) -> PathBuf {
    Path::new("teacher").join(teacher).join(kind).join(format!("{id}.prvf"))
}

fn check_id(kind: &str, id: &str) -> Result<()> {
    if id.is_empty() || id.contains(['/', '\\']) || id == "." || id == ".." {
        return Err(Error::Data(format!("invalid {kind} id {id:?}")));
    }
    Ok(())
}

impl Dataset {
    pub fn manifest(&self) -> DatasetManifest {
        DatasetManifest {
            name: self.name.clone(),
            dims: self.dims,
            videos: self
                .videos
                .iter()
                .map(|v| VideoEntry {
                    id: v.id.clone(),
                    n_frames: v.n_frames,
                    feature_file: video_file(&v.id),
                    split: v.split,
                })
                .collect(),
            queries: self
                .queries
                .iter()
                .map(|q| QueryEntry {
                    id: q.id.clone(),
                    feature_file: text_file(&q.id),
                    n_tokens: q.features.rows,
                    video_id: self.videos[q.video].id.clone(),
                    moment: q.moment,
                })
                .collect(),
            teachers: self.teachers.clone(),
        }
    }

    pub fn video_index(&self) -> HashMap<&str, usize> {
        self.videos.iter().enumerate().map(|(i, v)| (v.id.as_str(), i)).collect()
    }

    /// Queries attached to each video, by index.
    pub fn queries_by_video(&self) -> Vec<Vec<usize>> {
        let mut out = vec![Vec::new(); self.videos.len()];
        for (qi, q) in self.queries.iter().enumerate() {
            out[q.video].push(qi);
        }
        out
    }

    pub fn mv_ratio(&self, query: usize) -> f64 {
        let q = &self.queries[query];
        mv_ratio(&q.moment, self.videos[q.video].n_frames)
    }

    /// Copy with every video (student and teacher features) uniformly
    /// subsampled to at most `max_frames` rows.
    pub fn capped(&self, max_frames: usize) -> Dataset {
        let mut out = self.clone();
        for v in &mut out.videos {
            v.features = v.features.subsample_rows(max_frames);
            for t in &mut v.teacher {
                *t = t.subsample_rows(max_frames);
            }
        }
        out
    }

    /// Checks the structural invariants shared by loaded and generated data.
    pub fn validate(&self) -> Result<()> {
        let mut seen = HashSet::new();
        for v in &self.videos {
            check_id("video", &v.id)?;
            if !seen.insert(v.id.as_str()) {
                return Err(Error::Data(format!("duplicate video id {:?}", v.id)));
            }
            if v.n_frames == 0 {
                return Err(Error::Data(format!("video {:?} has no frames", v.id)));
            }
            if v.teacher.len() != self.teachers.len() {
                return Err(Error::Data(format!(
                    "video {:?} has {} teacher matrices for {} teachers",
                    v.id,
                    v.teacher.len(),
                    self.teachers.len()
                )));
            }
        }
        let mut seen = HashSet::new();
        for q in &self.queries {
            check_id("query", &q.id)?;
            if !seen.insert(q.id.as_str()) {
                return Err(Error::Data(format!("duplicate query id {:?}", q.id)));
            }
            let v = self
                .videos
                .get(q.video)
                .ok_or_else(|| Error::Data(format!("query {:?} points at a missing video", q.id)))?;
            let m = q.moment;
            if m.start_frame > m.end_frame || m.end_frame >= v.n_frames {
                return Err(Error::Data(format!(
                    "query {:?}: moment [{}, {}] outside video {:?} of {} frames",
                    q.id, m.start_frame, m.end_frame, v.id, v.n_frames
                )));
            }
            if q.teacher.len() != self.teachers.len() {
                return Err(Error::Data(format!("query {:?} lacks teacher features", q.id)));
            }
        }
        for t in &self.teachers {
            check_id("teacher", t)?;
        }
        Ok(())
    }
}

fn expect_shape(m: &FeatureMatrix, rows: usize, cols: usize, path: &Path) -> Result<()> {
    if m.rows != rows || m.cols != cols {
        return Err(Error::Format {
            path: path.to_path_buf(),
            offset: 8,
            message: format!("expected {rows}×{cols}, file holds {}×{}", m.rows, m.cols),
        });
    }
    Ok(())
}

/// Reads `manifest.json` and every feature file it references.
pub fn load_dataset(dir: &Path) -> Result<Dataset> {
    let manifest_path = dir.join("manifest.json");
    let text = fs::read_to_string(&manifest_path).map_err(|e| Error::io(&manifest_path, e))?;
    let manifest: DatasetManifest = serde_json::from_str(&text).map_err(|e| Error::Parse {
        path: manifest_path.clone(),
        message: e.to_string(),
    })?;
    let dims = manifest.dims;

    let mut videos = Vec::with_capacity(manifest.videos.len());
    for entry in &manifest.videos {
        check_id("video", &entry.id)?;
        let path = dir.join(&entry.feature_file);
        let features = FeatureMatrix::read(&path)?;
        expect_shape(&features, entry.n_frames, dims.video_dim, &path)?;
        let mut teacher = Vec::with_capacity(manifest.teachers.len());
        for t in &manifest.teachers {
            check_id("teacher", t)?;
            let path = dir.join(teacher_file(t, "video", &entry.id));
            let m = FeatureMatrix::read(&path)?;
            expect_shape(&m, entry.n_frames, dims.teacher_dim, &path)?;
            teacher.push(m);
        }
        videos.push(Video {
            id: entry.id.clone(),
            split: entry.split,
            n_frames: entry.n_frames,
            features,
            teacher,
        });
    }

    let index: HashMap<&str, usize> = manifest
        .videos
        .iter()
        .enumerate()
        .map(|(i, v)| (v.id.as_str(), i))
        .collect();
    let mut queries = Vec::with_capacity(manifest.queries.len());
    for entry in &manifest.queries {
        check_id("query", &entry.id)?;
        let video = *index.get(entry.video_id.as_str()).ok_or_else(|| {
            Error::Data(format!(
                "query {:?} refers to unknown video {:?}",
                entry.id, entry.video_id
            ))
        })?;
        let path = dir.join(&entry.feature_file);
        let features = FeatureMatrix::read(&path)?;
        expect_shape(&features, entry.n_tokens, dims.text_dim, &path)?;
        let mut teacher = Vec::with_capacity(manifest.teachers.len());
        for t in &manifest.teachers {
            let path = dir.join(teacher_file(t, "text", &entry.id));
            let m = FeatureMatrix::read(&path)?;
            expect_shape(&m, 1, dims.teacher_dim, &path)?;
            teacher.push(m);
        }
        queries.push(Query {
            id: entry.id.clone(),
            video,
            moment: entry.moment,
            features,
            teacher,
        });
    }

    let ds = Dataset {
        name: manifest.name,
        dims,
        teachers: manifest.teachers,
        videos,
        queries,
    };
    ds.validate()?;
    Ok(ds)
}

/// Writes the manifest and every feature file under `dir`.
pub fn write_dataset(ds: &Dataset, dir: &Path) -> Result<()> {
    ds.validate()?;
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    for v in &ds.videos {
        v.features.write(&dir.join(video_file(&v.id)))?;
        for (t, m) in ds.teachers.iter().zip(&v.teacher) {
            m.write(&dir.join(teacher_file(t, "video", &v.id)))?;
        }
    }
    for q in &ds.queries {
        q.features.write(&dir.join(text_file(&q.id)))?;
        for (t, m) in ds.teachers.iter().zip(&q.teacher) {
            m.write(&dir.join(teacher_file(t, "text", &q.id)))?;
        }
    }
    let path = dir.join("manifest.json");
    let mut json = serde_json::to_string_pretty(&ds.manifest()).expect("manifest serializes");
    json.push('\n');
    fs::write(&path, json).map_err(|e| Error::io(&path, e))
}

/// `N` aligned (video, query) pairs with distinct videos; pair `i` is the
/// only positive of row and column `i`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Batch {
    pub videos: Vec<usize>,
    pub queries: Vec<usize>,
}

impl Batch {
    pub fn len(&self) -> usize {
        self.videos.len()
    }

    pub fn is_empty(&self) -> bool {
        self.videos.is_empty()
    }

    pub fn video_ids(&self, ds: &Dataset) -> Vec<String> {
        self.videos.iter().map(|&v| ds.videos[v].id.clone()).collect()
    }

    pub fn query_ids(&self, ds: &Dataset) -> Vec<String> {
        self.queries.iter().map(|&q| ds.queries[q].id.clone()).collect()
    }
}

/// Shuffles the videos of `pool` with `seed ⊕ epoch`, cuts them into
/// batches of `n` (dropping the remainder) and draws one query per video.
/// Videos without queries are skipped.
pub fn make_batches(ds: &Dataset, pool: &[usize], n: usize, seed: u64, epoch: usize) -> Result<Vec<Batch>> {
    if n < 2 {
        return Err(Error::Batch(format!("batch size must be ≥ 2, got {n}")));
    }
    let by_video = ds.queries_by_video();
    let mut videos: Vec<usize> = pool.iter().copied().filter(|&v| !by_video[v].is_empty()).collect();
    if videos.len() < n {
        return Err(Error::Batch(format!(
            "{} videos with queries, fewer than the batch size {n}",
            videos.len()
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ epoch as u64);
    videos.shuffle(&mut rng);
    Ok(videos
        .chunks_exact(n)
        .map(|chunk| {
            let queries = chunk
                .iter()
                .map(|&v| by_video[v][rng.random_range(0..by_video[v].len())])
                .collect();
            Batch {
                videos: chunk.to_vec(),
                queries,
            }
        })
        .collect())
}

/// Video indices of the train, validation and test splits.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SplitPools {
    pub train: Vec<usize>,
    pub val: Vec<usize>,
    pub test: Vec<usize>,
}

/// Reads the split of every video. Without any validation videos, a seeded
/// tenth of the training videos is held out instead.
pub fn split_pools(ds: &Dataset, seed: u64) -> SplitPools {
    let of = |s: Split| -> Vec<usize> {
        ds.videos
            .iter()
            .enumerate()
            .filter(|(_, v)| v.split == s)
            .map(|(i, _)| i)
            .collect()
    };
    let (mut train, mut val, test) = (of(Split::Train), of(Split::Val), of(Split::Test));
    if val.is_empty() && train.len() >= 2 {
        let mut shuffled = train.clone();
        shuffled.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
        let n_val = (train.len() / 10).max(1);
        val = shuffled[..n_val].to_vec();
        val.sort_unstable();
        let held: HashSet<usize> = val.iter().copied().collect();
        train.retain(|v| !held.contains(v));
    }
    SplitPools { train, val, test }
}

/// Queries whose video is in `pool`, in dataset order.
pub fn queries_in(ds: &Dataset, pool: &[usize]) -> Vec<usize> {
    let set: HashSet<usize> = pool.iter().copied().collect();
    (0..ds.queries.len()).filter(|&q| set.contains(&ds.queries[q].video)).collect()
}

fn default_one() -> usize {
    1
}
fn default_tokens() -> usize {
    2
}
fn default_concepts_per_query() -> usize {
    2
}
fn default_teachers() -> Vec<String> {
    vec!["teacher".into()]
}
fn default_name() -> String {
    "synthetic".into()
}

/// Recipe for a dataset with planted relevant moments.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SyntheticSpec {
    #[serde(default = "default_name")]
    pub name: String,
    /// Training videos.
    pub n_videos: usize,
    #[serde(default)]
    pub n_val_videos: usize,
    #[serde(default)]
    pub n_test_videos: usize,
    pub frames_per_video: usize,
    #[serde(default = "default_one")]
    pub queries_per_video: usize,
    pub video_dim: usize,
    pub text_dim: usize,
    pub teacher_dim: usize,
    pub n_concepts: usize,
    #[serde(default = "default_concepts_per_query")]
    pub concepts_per_query: usize,
    #[serde(default = "default_tokens")]
    pub n_tokens: usize,
    pub mv_range: [f64; 2],
    pub noise_std: f64,
    pub teacher_quality: f64,
    #[serde(default = "default_teachers")]
    pub teachers: Vec<String>,
    pub seed: u64,
}

impl SyntheticSpec {
    /// The separable desk-scale setting used throughout the tests.
    pub fn desk(seed: u64) -> Self {
        Self {
            name: default_name(),
            n_videos: 256,
            n_val_videos: 32,
            n_test_videos: 64,
            frames_per_video: 32,
            queries_per_video: 4,
            video_dim: 64,
            text_dim: 64,
            teacher_dim: 64,
            n_concepts: 64,
            concepts_per_query: 2,
            n_tokens: 2,
            mv_range: [0.1, 0.25],
            noise_std: 0.1,
            teacher_quality: 1.0,
            teachers: default_teachers(),
            seed,
        }
    }

    /// Span-length bounds per query, after fitting each query's span into
    /// its own slice of the video.
    fn span_bounds(&self) -> Result<(usize, usize)> {
        let n = self.frames_per_video as f64;
        let lo = ((self.mv_range[0] * n - 1e-9).ceil() as usize).max(1);
        let hi = (self.mv_range[1] * n + 1e-9).floor() as usize;
        let region = self.frames_per_video / self.queries_per_video.max(1);
        let hi = hi.min(region);
        if lo > hi {
            return Err(Error::Parameter(format!(
                "no span length fits mv_range {:?} with {} frames and {} queries per video",
                self.mv_range, self.frames_per_video, self.queries_per_video
            )));
        }
        Ok((lo, hi))
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Parameter(m));
        let [lo, hi] = self.mv_range;
        if !(lo > 0.0 && lo <= hi && hi <= 1.0) {
            return bad(format!("mv_range must satisfy 0 < lo ≤ hi ≤ 1, got {:?}", self.mv_range));
        }
        if !(0.0..=1.0).contains(&self.teacher_quality) {
            return bad(format!("teacher_quality must be in [0,1], got {}", self.teacher_quality));
        }
        if !(self.noise_std >= 0.0 && self.noise_std.is_finite()) {
            return bad(format!("noise_std must be ≥ 0, got {}", self.noise_std));
        }
        for (name, v) in [
            ("frames_per_video", self.frames_per_video),
            ("queries_per_video", self.queries_per_video),
            ("video_dim", self.video_dim),
            ("text_dim", self.text_dim),
            ("n_tokens", self.n_tokens),
            ("concepts_per_query", self.concepts_per_query),
        ] {
            if v == 0 {
                return bad(format!("{name} must be ≥ 1"));
            }
        }
        if !self.teachers.is_empty() && self.teacher_dim == 0 {
            return bad("teacher_dim must be ≥ 1 when teachers are listed".into());
        }
        if self.n_concepts < self.concepts_per_query {
            return bad(format!(
                "n_concepts ({}) must be ≥ concepts_per_query ({})",
                self.n_concepts, self.concepts_per_query
            ));
        }
        if self.n_tokens < self.concepts_per_query {
            return bad(format!(
                "n_tokens ({}) must be ≥ concepts_per_query ({})",
                self.n_tokens, self.concepts_per_query
            ));
        }
        self.span_bounds().map(|_| ())
    }
}

fn normal_vec(rng: &mut ChaCha8Rng, n: usize, std: f64) -> Vec<f64> {
    (0..n).map(|_| std * rng.sample::<f64, _>(StandardNormal)).collect()
}

fn to_f32(rows: usize, cols: usize, data: Vec<f64>) -> FeatureMatrix {
    FeatureMatrix::new(rows, cols, data.into_iter().map(|v| v as f32).collect()).expect("shape")
}

/// Concept combinations for `total` queries; distinct while they last.
fn concept_sets(rng: &mut ChaCha8Rng, n: usize, c: usize, total: usize) -> Vec<Vec<usize>> {
    let mut seen = HashSet::new();
    let mut out = Vec::with_capacity(total);
    let all: Vec<usize> = (0..n).collect();
    for _ in 0..total {
        let mut pick = Vec::new();
        for _attempt in 0..64 {
            pick = all.choose_multiple(rng, c).copied().collect::<Vec<_>>();
            pick.sort_unstable();
            if !seen.contains(&pick) {
                break;
            }
        }
        seen.insert(pick.clone());
        out.push(pick);
    }
    out
}

/// Sum of the selected concept rows divided by `√c`.
fn mix_concepts(table: &[Vec<f64>], picks: &[usize]) -> Vec<f64> {
    let scale = 1.0 / (picks.len() as f64).sqrt();
    let mut out = vec![0.0; table[0].len()];
    for &p in picks {
        for (o, v) in out.iter_mut().zip(&table[p]) {
            *o += v * scale;
        }
    }
    out
}

/// Generates a dataset of background-noise videos with one planted concept
/// span per query.
///
/// Each query owns a set of concepts. Its span's frames are the normalized
/// sum of those concepts in video space plus noise; its tokens are the same
/// concepts in text space (plus noise) mixed with filler tokens. Teacher
/// features see the same structure in their own space, blended towards pure
/// noise as `teacher_quality` falls: at 0.3 the teacher's peak frame lands in
/// the planted span for only about a third of the queries.
pub fn generate_synthetic(spec: &SyntheticSpec) -> Result<Dataset> {
    spec.validate()?;
    let (lo, hi) = spec.span_bounds()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let table = |rng: &mut ChaCha8Rng, dim: usize| -> Vec<Vec<f64>> {
        (0..spec.n_concepts).map(|_| normal_vec(rng, dim, 1.0)).collect()
    };
    let video_concepts = table(&mut rng, spec.video_dim);
    let text_concepts = table(&mut rng, spec.text_dim);
    let teacher_concepts: Vec<_> = spec.teachers.iter().map(|_| table(&mut rng, spec.teacher_dim)).collect();

    let splits = std::iter::repeat_n(Split::Train, spec.n_videos)
        .chain(std::iter::repeat_n(Split::Val, spec.n_val_videos))
        .chain(std::iter::repeat_n(Split::Test, spec.n_test_videos));
    let n_total = spec.n_videos + spec.n_val_videos + spec.n_test_videos;
    let picks = concept_sets(
        &mut rng,
        spec.n_concepts,
        spec.concepts_per_query,
        n_total * spec.queries_per_video,
    );
    let (n, q_per) = (spec.frames_per_video, spec.queries_per_video);
    let region = n / q_per;
    let quality = spec.teacher_quality;
    // A random background vector projects onto a fixed concept with only
    // 1/√d of its norm, so the blend scales it by √d to make the corruption
    // show up in the teacher's similarities.
    let bg_scale = (spec.teacher_dim as f64).sqrt();
    let noise = spec.noise_std;

    let mut videos = Vec::with_capacity(n_total);
    let mut queries = Vec::with_capacity(n_total * q_per);
    for (vi, split) in splits.enumerate() {
        let mut frames: Vec<Vec<f64>> = (0..n).map(|_| normal_vec(&mut rng, spec.video_dim, 1.0)).collect();
        // The teacher's own view of each frame before blending.
        let mut clean_teacher: Vec<Vec<Vec<f64>>> = spec
            .teachers
            .iter()
            .map(|_| (0..n).map(|_| normal_vec(&mut rng, spec.teacher_dim, 1.0)).collect())
            .collect();
        for qj in 0..q_per {
            let qi = vi * q_per + qj;
            let concepts = &picks[qi];
            let len = rng.random_range(lo..=hi);
            let start = qj * region + rng.random_range(0..=region - len);
            let moment = MomentAnnotation {
                start_frame: start,
                end_frame: start + len - 1,
            };
            let planted = mix_concepts(&video_concepts, concepts);
            for frame in &mut frames[start..start + len] {
                let jitter = normal_vec(&mut rng, spec.video_dim, noise);
                *frame = planted.iter().zip(jitter).map(|(p, e)| p + e).collect();
            }
            for (clean, tc) in clean_teacher.iter_mut().zip(&teacher_concepts) {
                let planted = mix_concepts(tc, concepts);
                for frame in &mut clean[start..start + len] {
                    frame.clone_from(&planted);
                }
            }

            let mut tokens: Vec<Vec<f64>> = (0..spec.n_tokens)
                .map(|_| normal_vec(&mut rng, spec.text_dim, 1.0))
                .collect();
            let mut slots: Vec<usize> = (0..spec.n_tokens).collect();
            slots.shuffle(&mut rng);
            for (&slot, &c) in slots.iter().zip(concepts) {
                let jitter = normal_vec(&mut rng, spec.text_dim, noise);
                tokens[slot] = text_concepts[c].iter().zip(jitter).map(|(p, e)| p + e).collect();
            }
            let teacher_q = teacher_concepts
                .iter()
                .map(|tc| {
                    let jitter = normal_vec(&mut rng, spec.teacher_dim, noise);
                    let v = mix_concepts(tc, concepts).into_iter().zip(jitter).map(|(p, e)| p + e).collect();
                    to_f32(1, spec.teacher_dim, v)
                })
                .collect();
            queries.push(Query {
                id: format!("q{qi:05}"),
                video: vi,
                moment,
                features: to_f32(spec.n_tokens, spec.text_dim, tokens.concat()),
                teacher: teacher_q,
            });
        }
        let teacher_v = clean_teacher
            .into_iter()
            .map(|clean| {
                let rows: Vec<f64> = clean
                    .into_iter()
                    .flat_map(|c| {
                        let bg = normal_vec(&mut rng, spec.teacher_dim, 1.0);
                        let jitter = normal_vec(&mut rng, spec.teacher_dim, noise);
                        c.into_iter()
                            .zip(bg)
                            .zip(jitter)
                            .map(|((c, b), e)| quality * c + (1.0 - quality) * bg_scale * b + e)
                            .collect::<Vec<_>>()
                    })
                    .collect();
                to_f32(n, spec.teacher_dim, rows)
            })
            .collect();
        videos.push(Video {
            id: format!("v{vi:05}"),
            split,
            n_frames: n,
            features: to_f32(n, spec.video_dim, frames.concat()),
            teacher: teacher_v,
        });
    }
    let ds = Dataset {
        name: spec.name.clone(),
        dims: Dims {
            video_dim: spec.video_dim,
            text_dim: spec.text_dim,
            teacher_dim: spec.teacher_dim,
        },
        teachers: spec.teachers.clone(),
        videos,
        queries,
    };
    ds.validate()?;
    Ok(ds)
}
