//! Frozen input encoders: frames, script, question and candidate answers
//! become a [`FeatureBundle`].
//!
//! Encoders sit behind [`EmbeddingBackend`]. The built-in
//! [`SyntheticBackend`] is a fully specified, deterministic stand-in for
//! pretrained text and image encoders; an external adapter can instead
//! write feature caches in the same binary layout.

use std::collections::{BTreeMap, HashMap};
use std::path::{Path, PathBuf};

use image::RgbImage;
use ndarray::{Array1, Array2};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::container::{self, ContainerError, Entry, TensorData};
use crate::dataset;
use crate::par::{self, Execution};
use crate::seed;
use crate::types::{Button, Candidate, CandidateFeatures, FeatureBundle, QaFeatures, TaskInstance};

pub const CACHE_MAGIC: &[u8; 8] = b"AQTCFEAT";
pub const CACHE_EXTENSION: &str = "aqf";
pub const QUESTION_PREFIX: &str = "Question: ";
pub const ANSWER_PREFIX: &str = "Answer: ";
/// Stands in for `<buttonK>` in the answer text stream.
pub const PLACEHOLDER_WORDS: &str = "this button";

#[derive(Debug, Error)]
pub enum EmbeddingError {
    #[error("no frames in {0}")]
    EmptyVideo(PathBuf),
    #[error("empty text")]
    EmptyText,
    #[error("button {0} is not on the given image")]
    ButtonNotOnImage(u32),
    #[error("cannot read image {path}: {detail}")]
    Image { path: PathBuf, detail: String },
    #[error("corrupt feature cache: {0}")]
    CorruptCache(String),
    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),
    #[error(transparent)]
    Dataset(#[from] dataset::DatasetError),
    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
}

impl From<ContainerError> for EmbeddingError {
    fn from(e: ContainerError) -> Self {
        EmbeddingError::CorruptCache(e.to_string())
    }
}

/// Frozen text and image encoders with fixed output widths.
///
/// Implementations must be deterministic and safe to share across threads.
pub trait EmbeddingBackend: Send + Sync {
    fn text_dim(&self) -> usize;
    fn image_dim(&self) -> usize;
    fn embed_text(&self, text: &str) -> Result<Vec<f32>, EmbeddingError>;
    fn embed_image(&self, image: &RgbImage) -> Result<Vec<f32>, EmbeddingError>;
}

/// Which user-image rasters make up the visual button feature.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ButtonEncodingMode {
    None,
    Mask,
    #[default]
    Reverse,
    Both,
}

impl ButtonEncodingMode {
    pub const ALL: [ButtonEncodingMode; 4] = [
        ButtonEncodingMode::None,
        ButtonEncodingMode::Mask,
        ButtonEncodingMode::Reverse,
        ButtonEncodingMode::Both,
    ];

    pub fn button_dim(self, image_dim: usize) -> usize {
        match self {
            ButtonEncodingMode::None => 0,
            ButtonEncodingMode::Mask | ButtonEncodingMode::Reverse => image_dim,
            ButtonEncodingMode::Both => 2 * image_dim,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            ButtonEncodingMode::None => "none",
            ButtonEncodingMode::Mask => "mask",
            ButtonEncodingMode::Reverse => "reverse",
            ButtonEncodingMode::Both => "both",
        }
    }
}

/// 64-bit FNV-1a over the UTF-8 bytes.
pub fn fnv1a64(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for &b in bytes {
        h ^= b as u64;
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h
}

/// xorshift64* generator with Box-Muller normals.
#[derive(Clone, Debug)]
pub struct XorShift64Star {
    state: u64,
    spare: Option<f64>,
}

impl XorShift64Star {
    pub fn new(seed: u64) -> Self {
        let state = if seed == 0 {
            0x9E37_79B9_7F4A_7C15
        } else {
            seed
        };
        Self { state, spare: None }
    }

    pub fn next_u64(&mut self) -> u64 {
        let mut x = self.state;
        x ^= x >> 12;
        x ^= x << 25;
        x ^= x >> 27;
        self.state = x;
        x.wrapping_mul(0x2545_F491_4F6C_DD1D)
    }

    /// Uniform on the open interval (0, 1).
    pub fn next_open01(&mut self) -> f64 {
        ((self.next_u64() >> 11) as f64 + 0.5) / (1u64 << 53) as f64
    }

    pub fn next_normal(&mut self) -> f64 {
        if let Some(z) = self.spare.take() {
            return z;
        }
        let u1 = self.next_open01();
        let u2 = self.next_open01();
        let r = (-2.0 * u1.ln()).sqrt();
        let theta = 2.0 * std::f64::consts::PI * u2;
        self.spare = Some(r * theta.sin());
        r * theta.cos()
    }
}

/// Lowercased alphanumeric tokens.
pub fn tokenize(text: &str) -> Vec<String> {
    text.split(|c: char| !c.is_alphanumeric())
        .filter(|t| !t.is_empty())
        .map(str::to_lowercase)
        .collect()
}

fn l2_normalize(v: &mut [f64]) {
    let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    if norm > 0.0 {
        v.iter_mut().for_each(|x| *x /= norm);
    }
}

pub const GRID: usize = 8;
pub const GRID_FEATURES: usize = GRID * GRID * 3;

/// Deterministic hashing encoder.
///
/// Text: lowercase, split on non-alphanumerics, hash each token with
/// FNV-1a, xor with `splitmix64(seed)`, seed an xorshift64* generator and
/// draw `text_dim` Box-Muller normals; the sentence vector is the
/// L2-normalized mean of its token vectors (all zeros for no tokens).
///
/// Image: mean RGB in [0, 1] minus 0.5 over an 8x8 grid of cells (192
/// values ordered row, column, channel), times a fixed Gaussian projection
/// drawn from xorshift64* seeded with `derive(seed, IMAGE_PROJECTION, 0)`,
/// then L2-normalized.
#[derive(Clone, Debug)]
pub struct SyntheticBackend {
    text_dim: usize,
    image_dim: usize,
    seed: u64,
    projection: Array2<f64>,
}

impl SyntheticBackend {
    pub const DEFAULT_TEXT_DIM: usize = 64;
    pub const DEFAULT_IMAGE_DIM: usize = 64;

    pub fn new(text_dim: usize, image_dim: usize, seed: u64) -> Self {
        let mut rng = XorShift64Star::new(seed::derive(seed, seed::stream::IMAGE_PROJECTION, 0));
        let scale = 1.0 / (GRID_FEATURES as f64).sqrt();
        let projection =
            Array2::from_shape_fn((image_dim, GRID_FEATURES), |_| rng.next_normal() * scale);
        Self {
            text_dim,
            image_dim,
            seed,
            projection,
        }
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn token_vector(&self, token: &str) -> Vec<f64> {
        let mut rng = XorShift64Star::new(fnv1a64(token.as_bytes()) ^ seed::splitmix64(self.seed));
        (0..self.text_dim).map(|_| rng.next_normal()).collect()
    }

    pub fn grid_means(image: &RgbImage) -> Vec<f64> {
        let (w, h) = (image.width() as usize, image.height() as usize);
        let span = |i: usize, n: usize| {
            let lo = (i * n / GRID).min(n.saturating_sub(1));
            let hi = ((i + 1) * n / GRID).max(lo + 1).min(n.max(1));
            (lo, hi)
        };
        let mut out = Vec::with_capacity(GRID_FEATURES);
        for gy in 0..GRID {
            let (y0, y1) = span(gy, h);
            for gx in 0..GRID {
                let (x0, x1) = span(gx, w);
                let mut sum = [0.0f64; 3];
                let mut count = 0usize;
                for y in y0..y1.min(h) {
                    for x in x0..x1.min(w) {
                        let p = image.get_pixel(x as u32, y as u32).0;
                        for c in 0..3 {
                            sum[c] += p[c] as f64;
                        }
                        count += 1;
                    }
                }
                for s in sum {
                    let mean = if count == 0 {
                        0.0
                    } else {
                        s / (255.0 * count as f64)
                    };
                    out.push(mean - 0.5);
                }
            }
        }
        out
    }
}

impl Default for SyntheticBackend {
    fn default() -> Self {
        Self::new(Self::DEFAULT_TEXT_DIM, Self::DEFAULT_IMAGE_DIM, 0)
    }
}

impl EmbeddingBackend for SyntheticBackend {
    fn text_dim(&self) -> usize {
        self.text_dim
    }

    fn image_dim(&self) -> usize {
        self.image_dim
    }

    fn embed_text(&self, text: &str) -> Result<Vec<f32>, EmbeddingError> {
        let tokens = tokenize(text);
        let mut acc = vec![0.0f64; self.text_dim];
        for t in &tokens {
            for (a, v) in acc.iter_mut().zip(self.token_vector(t)) {
                *a += v;
            }
        }
        if !tokens.is_empty() {
            acc.iter_mut().for_each(|a| *a /= tokens.len() as f64);
        }
        l2_normalize(&mut acc);
        Ok(acc.into_iter().map(|x| x as f32).collect())
    }

    fn embed_image(&self, image: &RgbImage) -> Result<Vec<f32>, EmbeddingError> {
        let grid = Array1::from(Self::grid_means(image));
        let mut v = self.projection.dot(&grid).to_vec();
        l2_normalize(&mut v);
        Ok(v.into_iter().map(|x| x as f32).collect())
    }
}

pub fn cosine(a: &[f32], b: &[f32]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| *x as f64 * *y as f64).sum();
    let na: f64 = a.iter().map(|x| (*x as f64).powi(2)).sum::<f64>().sqrt();
    let nb: f64 = b.iter().map(|x| (*x as f64).powi(2)).sum::<f64>().sqrt();
    if na == 0.0 || nb == 0.0 {
        0.0
    } else {
        dot / (na * nb)
    }
}

fn load_rgb(path: &Path) -> Result<RgbImage, EmbeddingError> {
    image::open(path)
        .map(|i| i.to_rgb8())
        .map_err(|e| EmbeddingError::Image {
            path: path.to_path_buf(),
            detail: e.to_string(),
        })
}

/// All frames of a `frames/` directory, in numeric order (one per second).
pub fn sample_frames(frame_dir: &Path) -> Result<Vec<RgbImage>, EmbeddingError> {
    let paths = dataset::list_frames(frame_dir)?;
    if paths.is_empty() {
        return Err(EmbeddingError::EmptyVideo(frame_dir.to_path_buf()));
    }
    paths.iter().map(|p| load_rgb(p)).collect()
}

/// One row per sentence, no prefix.
pub fn encode_script(
    sentences: &[String],
    backend: &dyn EmbeddingBackend,
) -> Result<Array2<f32>, EmbeddingError> {
    let d = backend.text_dim();
    let mut out = Array2::zeros((sentences.len(), d));
    for (i, s) in sentences.iter().enumerate() {
        let row = backend.embed_text(s)?;
        check_len(&row, d)?;
        out.row_mut(i).assign(&Array1::from(row));
    }
    Ok(out)
}

pub fn encode_question(
    text: &str,
    backend: &dyn EmbeddingBackend,
) -> Result<Array1<f32>, EmbeddingError> {
    if text.trim().is_empty() {
        return Err(EmbeddingError::EmptyText);
    }
    let v = backend.embed_text(&format!("{QUESTION_PREFIX}{text}"))?;
    check_len(&v, backend.text_dim())?;
    Ok(Array1::from(v))
}

fn check_len(v: &[f32], want: usize) -> Result<(), EmbeddingError> {
    if v.len() != want {
        return Err(EmbeddingError::DimensionMismatch(format!(
            "backend returned {} values, expected {want}",
            v.len()
        )));
    }
    Ok(())
}

fn zero_box(img: &mut RgbImage, b: &Button) {
    let (w, h) = (img.width() as i64, img.height() as i64);
    for y in b.bbox.y1.max(0)..b.bbox.y2.min(h) {
        for x in b.bbox.x1.max(0)..b.bbox.x2.min(w) {
            img.put_pixel(x as u32, y as u32, image::Rgb([0, 0, 0]));
        }
    }
}

/// The masked raster (target box zeroed) and the reverse-masked raster
/// (every other button on this image zeroed, target box untouched).
pub fn build_button_rasters(
    image_id: &str,
    image: &RgbImage,
    buttons: &[Button],
    target: u32,
) -> Result<(RgbImage, RgbImage), EmbeddingError> {
    let tb = buttons
        .iter()
        .find(|b| b.button_id == target && b.image_id == image_id)
        .filter(|b| !b.bbox.is_degenerate() && b.bbox.within(image.width(), image.height()))
        .ok_or(EmbeddingError::ButtonNotOnImage(target))?;

    let mut mask = image.clone();
    zero_box(&mut mask, tb);

    let mut reverse = image.clone();
    for b in buttons
        .iter()
        .filter(|b| b.image_id == image_id && b.button_id != target)
    {
        zero_box(&mut reverse, b);
    }
    // The target box wins where boxes overlap.
    for y in tb.bbox.y1..tb.bbox.y2 {
        for x in tb.bbox.x1..tb.bbox.x2 {
            reverse.put_pixel(x as u32, y as u32, *image.get_pixel(x as u32, y as u32));
        }
    }
    Ok((mask, reverse))
}

/// Per-task memo of `(mask, reverse)` image embeddings by button id.
struct ButtonEmbeddings<'a> {
    task: &'a TaskInstance,
    images: BTreeMap<String, RgbImage>,
    memo: HashMap<u32, (Vec<f32>, Vec<f32>)>,
}

impl<'a> ButtonEmbeddings<'a> {
    fn new(task: &'a TaskInstance, images: BTreeMap<String, RgbImage>) -> Self {
        Self {
            task,
            images,
            memo: HashMap::new(),
        }
    }

    fn get(
        &mut self,
        button: u32,
        backend: &dyn EmbeddingBackend,
    ) -> Result<&(Vec<f32>, Vec<f32>), EmbeddingError> {
        if !self.memo.contains_key(&button) {
            let b = self
                .task
                .button(button)
                .ok_or(EmbeddingError::ButtonNotOnImage(button))?;
            let img = self
                .images
                .get(&b.image_id)
                .ok_or(EmbeddingError::ButtonNotOnImage(button))?;
            let (mask, reverse) =
                build_button_rasters(&b.image_id, img, &self.task.buttons, button)?;
            let pair = (backend.embed_image(&mask)?, backend.embed_image(&reverse)?);
            self.memo.insert(button, pair);
        }
        Ok(&self.memo[&button])
    }
}

fn button_feature(
    candidate: &Candidate,
    mode: ButtonEncodingMode,
    backend: &dyn EmbeddingBackend,
    memo: &mut ButtonEmbeddings<'_>,
) -> Result<Array1<f32>, EmbeddingError> {
    let d_b = mode.button_dim(backend.image_dim());
    let Some(button) = candidate
        .button_ref
        .filter(|_| mode != ButtonEncodingMode::None)
    else {
        return Ok(Array1::zeros(d_b));
    };
    let (mask, reverse) = memo.get(button, backend)?;
    let v: Vec<f32> = match mode {
        ButtonEncodingMode::None => Vec::new(),
        ButtonEncodingMode::Mask => mask.clone(),
        ButtonEncodingMode::Reverse => reverse.clone(),
        ButtonEncodingMode::Both => mask.iter().chain(reverse).copied().collect(),
    };
    check_len(&v, d_b)?;
    Ok(Array1::from(v))
}

fn answer_text(candidate: &Candidate) -> String {
    format!(
        "{ANSWER_PREFIX}{}",
        candidate.text_with_placeholder(PLACEHOLDER_WORDS)
    )
}

fn load_user_images(task: &TaskInstance) -> Result<BTreeMap<String, RgbImage>, EmbeddingError> {
    task.user_images
        .iter()
        .map(|(id, r)| Ok((id.clone(), load_rgb(&r.path)?)))
        .collect()
}

/// Text and button features of one candidate.
///
/// Candidates without a button get a zero button feature of the mode's width.
pub fn encode_candidate(
    candidate: &Candidate,
    task: &TaskInstance,
    user_images: &BTreeMap<String, RgbImage>,
    backend: &dyn EmbeddingBackend,
    mode: ButtonEncodingMode,
) -> Result<CandidateFeatures, EmbeddingError> {
    let mut memo = ButtonEmbeddings::new(task, user_images.clone());
    let text = Array1::from(backend.embed_text(&answer_text(candidate))?);
    let button = button_feature(candidate, mode, backend, &mut memo)?;
    Ok(CandidateFeatures { text, button })
}

/// Encode a whole task with images read from disk.
pub fn bundle(
    task: &TaskInstance,
    backend: &dyn EmbeddingBackend,
    mode: ButtonEncodingMode,
) -> Result<FeatureBundle, EmbeddingError> {
    let frames: Vec<RgbImage> = task
        .frames
        .iter()
        .map(|p| load_rgb(p))
        .collect::<Result<_, _>>()?;
    if frames.is_empty() {
        return Err(EmbeddingError::EmptyVideo(PathBuf::from(&task.task_id)));
    }
    bundle_with_rasters(task, &frames, load_user_images(task)?, backend, mode)
}

/// Encode a task from rasters already in memory.
pub fn bundle_with_rasters(
    task: &TaskInstance,
    frames: &[RgbImage],
    user_images: BTreeMap<String, RgbImage>,
    backend: &dyn EmbeddingBackend,
    mode: ButtonEncodingMode,
) -> Result<FeatureBundle, EmbeddingError> {
    let d_v = backend.image_dim();
    let mut video = Array2::zeros((frames.len(), d_v));
    for (i, f) in frames.iter().enumerate() {
        let row = backend.embed_image(f)?;
        check_len(&row, d_v)?;
        video.row_mut(i).assign(&Array1::from(row));
    }
    let script = encode_script(&task.script, backend)?;

    let mut memo = ButtonEmbeddings::new(task, user_images);
    let mut qas = Vec::with_capacity(task.qas.len());
    for qa in &task.qas {
        let question = encode_question(&qa.question, backend)?;
        let mut steps = Vec::with_capacity(qa.steps.len());
        for step in &qa.steps {
            let mut cands = Vec::with_capacity(step.candidates.len());
            for c in &step.candidates {
                let text = Array1::from(backend.embed_text(&answer_text(c))?);
                check_len(text.as_slice().unwrap(), backend.text_dim())?;
                let button = button_feature(c, mode, backend, &mut memo)?;
                cands.push(CandidateFeatures { text, button });
            }
            steps.push(cands);
        }
        qas.push(QaFeatures {
            qa_id: qa.qa_id.clone(),
            question,
            steps,
        });
    }
    Ok(FeatureBundle {
        task_id: task.task_id.clone(),
        video,
        script,
        qas,
    })
}

/// Bundle many tasks; per-task work runs in parallel when enabled.
pub fn bundle_all(
    tasks: &[TaskInstance],
    backend: &dyn EmbeddingBackend,
    mode: ButtonEncodingMode,
    exec: Execution,
) -> Result<Vec<FeatureBundle>, EmbeddingError> {
    par::try_map(exec, tasks, |t| bundle(t, backend, mode))
}

/// Keep a subset of a `both`-mode bundle's button features: mask is the
/// first half, reverse the second.
pub fn select_button_mode(both: &FeatureBundle, mode: ButtonEncodingMode) -> FeatureBundle {
    let mut out = both.clone();
    let d_v = both.image_dim();
    for c in out
        .qas
        .iter_mut()
        .flat_map(|q| q.steps.iter_mut().flatten())
    {
        let full = c.button.to_vec();
        let half = |lo: usize| {
            if full.len() == 2 * d_v {
                full[lo..lo + d_v].to_vec()
            } else {
                vec![0.0; d_v]
            }
        };
        c.button = Array1::from(match mode {
            ButtonEncodingMode::None => Vec::new(),
            ButtonEncodingMode::Mask => half(0),
            ButtonEncodingMode::Reverse => half(d_v),
            ButtonEncodingMode::Both => full,
        });
    }
    out
}

fn entry_of(name: String, a: &[f32], dims: &[usize]) -> Entry {
    Entry::f32(name, dims, a.to_vec())
}

/// Serialize a bundle to the feature-cache layout.
pub fn encode_cache(b: &FeatureBundle) -> Vec<u8> {
    let mut entries = vec![
        entry_of(
            "video".into(),
            &b.video.iter().copied().collect::<Vec<_>>(),
            b.video.shape(),
        ),
        entry_of(
            "script".into(),
            &b.script.iter().copied().collect::<Vec<_>>(),
            b.script.shape(),
        ),
    ];
    for qa in &b.qas {
        entries.push(entry_of(
            format!("question_{}", qa.qa_id),
            &qa.question.to_vec(),
            &[qa.question.len()],
        ));
        for (i, step) in qa.steps.iter().enumerate() {
            for (j, c) in step.iter().enumerate() {
                entries.push(entry_of(
                    format!("cand_{}_{i}_{j}_text", qa.qa_id),
                    &c.text.to_vec(),
                    &[c.text.len()],
                ));
                entries.push(entry_of(
                    format!("cand_{}_{i}_{j}_btn", qa.qa_id),
                    &c.button.to_vec(),
                    &[c.button.len()],
                ));
            }
        }
    }
    container::encode(CACHE_MAGIC, &entries, None)
}

fn corrupt(msg: impl Into<String>) -> EmbeddingError {
    EmbeddingError::CorruptCache(msg.into())
}

fn f32_data(e: &Entry) -> Result<Vec<f32>, EmbeddingError> {
    match &e.data {
        TensorData::F32(v) => Ok(v.clone()),
        TensorData::F64(_) => Err(corrupt(format!("{} is not f32", e.name))),
    }
}

fn matrix(e: &Entry) -> Result<Array2<f32>, EmbeddingError> {
    let shape = e.shape();
    if shape.len() != 2 {
        return Err(corrupt(format!("{} must be 2-d", e.name)));
    }
    Array2::from_shape_vec((shape[0], shape[1]), f32_data(e)?)
        .map_err(|err| corrupt(err.to_string()))
}

/// Parse a feature cache; `task_id` is not stored in the file.
pub fn decode_cache(bytes: &[u8], task_id: &str) -> Result<FeatureBundle, EmbeddingError> {
    let (entries, trailer) = container::decode(CACHE_MAGIC, bytes)?;
    if trailer.is_some() {
        return Err(corrupt("unexpected trailer"));
    }
    let find = |name: &str| {
        entries
            .iter()
            .find(|e| e.name == name)
            .ok_or_else(|| corrupt(format!("missing {name}")))
    };
    let video = matrix(find("video")?)?;
    let script = matrix(find("script")?)?;

    let mut order: Vec<String> = Vec::new();
    let mut questions: HashMap<String, Array1<f32>> = HashMap::new();
    type Slot = (Option<Array1<f32>>, Option<Array1<f32>>);
    let mut cands: HashMap<String, BTreeMap<(usize, usize), Slot>> = HashMap::new();
    for e in &entries {
        if let Some(qa) = e.name.strip_prefix("question_") {
            order.push(qa.to_string());
            questions.insert(qa.to_string(), Array1::from(f32_data(e)?));
        } else if let Some(rest) = e.name.strip_prefix("cand_") {
            let parts: Vec<&str> = rest.rsplitn(4, '_').collect();
            if parts.len() != 4 {
                return Err(corrupt(format!("bad key {}", e.name)));
            }
            let (kind, j, i, qa) = (parts[0], parts[1], parts[2], parts[3]);
            let i: usize = i
                .parse()
                .map_err(|_| corrupt(format!("bad key {}", e.name)))?;
            let j: usize = j
                .parse()
                .map_err(|_| corrupt(format!("bad key {}", e.name)))?;
            let slot = cands
                .entry(qa.to_string())
                .or_default()
                .entry((i, j))
                .or_default();
            let v = Some(Array1::from(f32_data(e)?));
            match kind {
                "text" => slot.0 = v,
                "btn" => slot.1 = v,
                _ => return Err(corrupt(format!("bad key {}", e.name))),
            }
        } else if e.name != "video" && e.name != "script" {
            return Err(corrupt(format!("unknown key {}", e.name)));
        }
    }

    let mut qas = Vec::with_capacity(order.len());
    for qa_id in order {
        let mut steps: Vec<Vec<CandidateFeatures>> = Vec::new();
        for ((i, j), (text, button)) in cands.remove(&qa_id).unwrap_or_default() {
            if i == steps.len() {
                steps.push(Vec::new());
            }
            if i + 1 != steps.len() || j != steps[i].len() {
                return Err(corrupt(format!("non-contiguous candidates in {qa_id}")));
            }
            let (Some(text), Some(button)) = (text, button) else {
                return Err(corrupt(format!("incomplete candidate {qa_id} {i} {j}")));
            };
            steps[i].push(CandidateFeatures { text, button });
        }
        let question = questions.remove(&qa_id).expect("recorded with order");
        qas.push(QaFeatures {
            qa_id,
            question,
            steps,
        });
    }
    if !cands.is_empty() {
        return Err(corrupt("candidates without a question"));
    }
    Ok(FeatureBundle {
        task_id: task_id.to_string(),
        video,
        script,
        qas,
    })
}

pub fn cache_path(dir: &Path, task_id: &str) -> PathBuf {
    dir.join(format!("{task_id}.{CACHE_EXTENSION}"))
}

pub fn write_cache(dir: &Path, bundle: &FeatureBundle) -> Result<PathBuf, EmbeddingError> {
    let path = cache_path(dir, &bundle.task_id);
    container::write_atomic(&path, &encode_cache(bundle)).map_err(|source| EmbeddingError::Io {
        path: path.clone(),
        source,
    })?;
    Ok(path)
}

pub fn read_cache(dir: &Path, task_id: &str) -> Result<FeatureBundle, EmbeddingError> {
    let path = cache_path(dir, task_id);
    let bytes = std::fs::read(&path).map_err(|source| EmbeddingError::Io {
        path: path.clone(),
        source,
    })?;
    decode_cache(&bytes, task_id)
}
