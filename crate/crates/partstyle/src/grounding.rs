//! Vision-language grounding: turning (image, part phrases) into region-word
//! alignment scores, localized grid cells, and detected part boxes.
//!
//! Three interchangeable backends sit behind [`GroundingBackend`]:
//!
//! * [`ToyGrounding`]: deterministic and differentiable. Phrases map to unit
//!   RGB directions through a small color-word table (extensible with the
//!   part words of a mesh, which map to the render palette); image cells map
//!   to gray-centered patch mean colors, so neutral pixels score exactly zero
//!   and chromatic agreement scores positive. Runs with no external weights.
//! * [`OracleGrounding`]: geometry-derived ground truth. Features are scaled
//!   one-hot part indicators computed from rendered part masks, so alignment
//!   reproduces mask-majority localization exactly. Not differentiable.
//! * [`PretrainedAdapter`]: bridges to a real grounding model running in a
//!   subprocess, speaking newline-delimited JSON with base64 PNG images.
//!
//! All downstream consumers (localization, detection, anchor selection, the
//! trainer, finetuning) work against the trait, never a concrete backend.

use std::collections::BTreeMap;
use std::io::{BufRead, BufReader, Write as IoWrite};
use std::path::PathBuf;
use std::process::{Child, Command, Stdio};
use std::sync::{Arc, Mutex};

use base64::Engine;
use nalgebra::Vector3;
use ndarray::Array2;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::autodiff::{sigmoid_scalar, Tape, Var};
use crate::mesh::PartitionedMesh;
use crate::render::{
    part_palette, project_part_bboxes, render, render_part_masks, Camera, PixelBox, RenderedImage,
    DEFAULT_MIN_BOX_SIDE,
};

/// Post-sigmoid localization threshold used when none is configured.
pub const DEFAULT_THRESHOLD: f64 = 0.5;
/// Pixels per embedding-grid cell used when none is configured.
pub const DEFAULT_GRID_STRIDE: u32 = 8;

/// Scale of the oracle backend's one-hot features; sigmoid(4) ≈ 0.982 clears
/// any reasonable threshold while disagreement scores sit at sigmoid(0) = 0.5.
const ORACLE_FEATURE_SCALE: f64 = 4.0;

#[derive(Debug, Error)]
pub enum GroundingError {
    #[error("phrase list must not be empty")]
    EmptyPhrases,
    #[error("phrase '{phrase}' contains no known style word; supported words: {supported}")]
    UnknownStyleWord { phrase: String, supported: String },
    #[error("phrase '{phrase}' names no known part; parts and synonyms: {known}")]
    UnknownPart { phrase: String, known: String },
    #[error("image size {image_size} is not a positive multiple of grid stride {stride}")]
    GridMismatch { image_size: u32, stride: u32 },
    #[error("visual dim {visual} does not match textual dim {textual}")]
    DimensionMismatch { visual: usize, textual: usize },
    #[error("location ({x},{y}) outside the {grid_w}x{grid_h} grid; content and styled images were produced with different cameras")]
    LocationOutOfBounds { x: usize, y: usize, grid_w: usize, grid_h: usize },
    #[error("{backend} backend is not differentiable; train with the toy or pretrained backend")]
    NotDifferentiable { backend: String },
    #[error("oracle backend needs an image with a camera attached")]
    MissingCamera,
    #[error("anchor selection needs at least one candidate camera")]
    NoCandidates,
    #[error("failed to spawn grounding adapter '{command}': {source}")]
    AdapterSpawn {
        command: String,
        #[source]
        source: std::io::Error,
    },
    #[error("grounding adapter i/o failed: {0}")]
    AdapterIo(#[from] std::io::Error),
    #[error("grounding adapter protocol error: {0}")]
    AdapterProtocol(String),
    #[error("grounding adapter reported: {0}")]
    AdapterRemote(String),
    #[error("failed to encode image for the adapter: {0}")]
    ImageEncode(String),
}

/// Fused visual/textual features for one (image, phrases) encoding.
///
/// `visual` holds one row per grid cell, row-major (index = y·grid_w + x);
/// `textual` one row per phrase. Rows share the embedding dimension.
#[derive(Debug, Clone)]
pub struct FusedFeatures {
    pub visual: Array2<f64>,
    pub textual: Array2<f64>,
    pub grid_w: usize,
    pub grid_h: usize,
    /// Pixels per grid cell; ties cells back to image rectangles.
    pub grid_stride: u32,
}

/// Pre-sigmoid region-word scores, one row per cell, one column per phrase.
#[derive(Debug, Clone)]
pub struct AlignmentMap {
    pub scores: Array2<f64>,
    pub grid_w: usize,
    pub grid_h: usize,
    pub grid_stride: u32,
}

impl AlignmentMap {
    pub fn score(&self, x: usize, y: usize, phrase: usize) -> f64 {
        self.scores[(y * self.grid_w + x, phrase)]
    }
}

/// One localized grid cell with the phrase (= part) that claimed it.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct SpatialLocation {
    pub x: usize,
    pub y: usize,
    pub part: usize,
}

/// Grid cells where the content image responded to a part phrase. Captured
/// once per camera on the content render and reused to index the styled
/// render's alignment map from the identical viewpoint.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SpatialLocationSet {
    pub entries: Vec<SpatialLocation>,
    pub grid_w: usize,
    pub grid_h: usize,
    pub grid_stride: u32,
    pub camera: Option<Camera>,
}

impl SpatialLocationSet {
    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Parts present in this set, ascending and deduplicated.
    pub fn parts_present(&self) -> Vec<usize> {
        let mut parts: Vec<usize> = self.entries.iter().map(|e| e.part).collect();
        parts.sort_unstable();
        parts.dedup();
        parts
    }
}

/// One detected part box with its confidence.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DetectedBox {
    pub pixel_box: PixelBox,
    pub phrase: usize,
    pub confidence: f64,
}

/// Learnable per-phrase adjustment vectors applied to the textual embedding
/// of exact phrases at encode time. An absent or zero entry leaves the
/// phrase's embedding untouched.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct PromptOffsets {
    pub vectors: BTreeMap<String, Vec<f64>>,
}

impl PromptOffsets {
    pub fn get(&self, phrase: &str) -> Option<&Vec<f64>> {
        self.vectors.get(&normalize_phrase(phrase))
    }

    pub fn set(&mut self, phrase: &str, vector: Vec<f64>) {
        self.vectors.insert(normalize_phrase(phrase), vector);
    }

    pub fn is_empty(&self) -> bool {
        self.vectors.is_empty()
    }
}

pub fn normalize_phrase(phrase: &str) -> String {
    phrase.trim().to_lowercase()
}

/// Alignment scores recorded on a tape, for loss backpropagation.
pub struct DiffAlignment {
    /// Cells × phrases score matrix node.
    pub scores: Var,
    pub grid_w: usize,
    pub grid_h: usize,
    pub grid_stride: u32,
}

/// A grounding model: encodes images and phrase lists into a shared feature
/// space and detects part boxes. Implementations must be deterministic for
/// identical inputs and offsets.
pub trait GroundingBackend: Send {
    /// Stable key naming the backend in logs, reports, and sidecar files.
    fn id(&self) -> String;

    fn encode(
        &self,
        image: &RenderedImage,
        phrases: &[String],
    ) -> Result<FusedFeatures, GroundingError>;

    fn detect_boxes(
        &self,
        image: &RenderedImage,
        phrases: &[String],
    ) -> Result<Vec<DetectedBox>, GroundingError>;

    /// Record alignment scoring of an on-tape image so losses can backprop
    /// into pixels. Backends without gradients return `NotDifferentiable`.
    fn diff_alignment(
        &self,
        _tape: &mut Tape,
        _pixels: Var,
        _image_size: u32,
        _phrases: &[String],
    ) -> Result<DiffAlignment, GroundingError> {
        Err(GroundingError::NotDifferentiable { backend: self.id() })
    }

    /// Install tuned prompt offsets; replaces any previous table.
    fn set_prompt_offsets(&mut self, offsets: PromptOffsets);

    fn prompt_offsets(&self) -> &PromptOffsets;
}

/// scores[cell, phrase] = dot(visual[cell], textual[phrase]).
///
/// Deliberately a plain triple loop: backend-independent, and its summation
/// order is the reference that tests compare against exactly.
pub fn alignment_map(features: &FusedFeatures) -> Result<AlignmentMap, GroundingError> {
    let d = features.visual.ncols();
    if d != features.textual.ncols() {
        return Err(GroundingError::DimensionMismatch {
            visual: d,
            textual: features.textual.ncols(),
        });
    }
    let cells = features.visual.nrows();
    let n = features.textual.nrows();
    let mut scores = Array2::zeros((cells, n));
    for c in 0..cells {
        for p in 0..n {
            let mut s = 0.0;
            for k in 0..d {
                s += features.visual[(c, k)] * features.textual[(p, k)];
            }
            scores[(c, p)] = s;
        }
    }
    Ok(AlignmentMap {
        scores,
        grid_w: features.grid_w,
        grid_h: features.grid_h,
        grid_stride: features.grid_stride,
    })
}

/// Grid cells whose best post-sigmoid phrase score strictly exceeds the
/// threshold, tagged with the winning phrase. An empty set is a valid result.
pub fn localize(
    backend: &dyn GroundingBackend,
    image: &RenderedImage,
    phrases: &[String],
    threshold: f64,
) -> Result<SpatialLocationSet, GroundingError> {
    let features = backend.encode(image, phrases)?;
    let map = alignment_map(&features)?;
    let mut entries = Vec::new();
    for y in 0..map.grid_h {
        for x in 0..map.grid_w {
            let cell = y * map.grid_w + x;
            let mut best = 0usize;
            for p in 1..phrases.len() {
                if map.scores[(cell, p)] > map.scores[(cell, best)] {
                    best = p;
                }
            }
            if sigmoid_scalar(map.scores[(cell, best)]) > threshold {
                entries.push(SpatialLocation { x, y, part: best });
            }
        }
    }
    Ok(SpatialLocationSet {
        entries,
        grid_w: map.grid_w,
        grid_h: map.grid_h,
        grid_stride: map.grid_stride,
        camera: image.camera,
    })
}

/// Camera from `candidates` whose content render detects the prompted parts
/// most confidently: score = sum over parts of the best box confidence,
/// divided by the part count (an undetected part contributes zero). Ties keep
/// the lowest candidate index.
pub fn select_anchor_view(
    backend: &dyn GroundingBackend,
    mesh: &PartitionedMesh,
    phrases: &[String],
    candidates: &[Camera],
    background: [f64; 3],
) -> Result<Camera, GroundingError> {
    if candidates.is_empty() {
        return Err(GroundingError::NoCandidates);
    }
    let mut best_idx = 0;
    let mut best_score = f64::NEG_INFINITY;
    for (i, cam) in candidates.iter().enumerate() {
        let image = render(mesh, cam, background);
        let boxes = backend.detect_boxes(&image, phrases)?;
        let mut per_part = vec![0.0f64; phrases.len()];
        for b in &boxes {
            if b.phrase < per_part.len() {
                per_part[b.phrase] = per_part[b.phrase].max(b.confidence);
            }
        }
        let score = per_part.iter().sum::<f64>() / phrases.len() as f64;
        log::debug!("anchor candidate {i} ({}) scored {score:.4}", cam.id());
        if score > best_score {
            best_score = score;
            best_idx = i;
        }
    }
    Ok(candidates[best_idx])
}

fn check_grid(image_size: u32, stride: u32) -> Result<usize, GroundingError> {
    if stride == 0 || image_size == 0 || !image_size.is_multiple_of(stride) {
        return Err(GroundingError::GridMismatch { image_size, stride });
    }
    Ok((image_size / stride) as usize)
}

fn tokens(phrase: &str) -> Vec<String> {
    phrase
        .split(|c: char| !c.is_alphanumeric())
        .filter(|t| !t.is_empty())
        .map(|t| t.to_lowercase())
        .collect()
}

/// Patch mean colors of a row-major (h·w)×3 pixel matrix on a gw×gh grid.
/// With `center`, each cell's mean gray level is subtracted per channel, so
/// achromatic patches map to the zero vector.
pub(crate) fn pooled_patch_means(
    pixels: &Array2<f64>,
    width: usize,
    height: usize,
    grid_w: usize,
    grid_h: usize,
    center: bool,
) -> Array2<f64> {
    let pw = width / grid_w;
    let ph = height / grid_h;
    let patch = (pw * ph) as f64;
    let mut out = Array2::zeros((grid_w * grid_h, 3));
    for gy in 0..grid_h {
        for gx in 0..grid_w {
            let mut acc = [0.0f64; 3];
            for dy in 0..ph {
                for dx in 0..pw {
                    let row = (gy * ph + dy) * width + gx * pw + dx;
                    for ch in 0..3 {
                        acc[ch] += pixels[(row, ch)];
                    }
                }
            }
            let cell = gy * grid_w + gx;
            let mean = [acc[0] / patch, acc[1] / patch, acc[2] / patch];
            let gray = if center { (mean[0] + mean[1] + mean[2]) / 3.0 } else { 0.0 };
            for ch in 0..3 {
                out[(cell, ch)] = mean[ch] - gray;
            }
        }
    }
    out
}

// ---------------------------------------------------------------------------
// Toy backend
// ---------------------------------------------------------------------------

/// Builtin chromatic vocabulary: word → RGB direction (normalized on use).
const COLOR_WORDS: [(&str, [f64; 3]); 12] = [
    ("red", [1.0, 0.0, 0.0]),
    ("green", [0.0, 1.0, 0.0]),
    ("blue", [0.0, 0.0, 1.0]),
    ("yellow", [1.0, 1.0, 0.0]),
    ("magenta", [1.0, 0.0, 1.0]),
    ("cyan", [0.0, 1.0, 1.0]),
    ("orange", [1.0, 0.5, 0.0]),
    ("purple", [0.5, 0.0, 1.0]),
    ("pink", [1.0, 0.4, 0.7]),
    ("brown", [0.6, 0.3, 0.1]),
    ("gold", [1.0, 0.84, 0.0]),
    ("silver", [0.75, 0.75, 0.75]),
];

/// Weight-free stand-in for a grounding model, operating directly in RGB.
///
/// Textual features are unit RGB directions looked up from the phrase's first
/// builtin color word, falling back to registered part words (which map to
/// the same palette the content renderer paints parts with). Visual features
/// are gray-centered patch means, linear in the pixels, so the whole encode
/// is differentiable and neutral backgrounds score exactly zero.
pub struct ToyGrounding {
    grid_stride: u32,
    threshold: f64,
    part_words: BTreeMap<String, [f64; 3]>,
    offsets: PromptOffsets,
}

impl ToyGrounding {
    pub fn new(grid_stride: u32) -> Self {
        Self {
            grid_stride,
            threshold: DEFAULT_THRESHOLD,
            part_words: BTreeMap::new(),
            offsets: PromptOffsets::default(),
        }
    }

    /// Register every part name and synonym of `mesh` to that part's palette
    /// color, making bare part phrases ("body") resolvable.
    pub fn for_mesh(mesh: &PartitionedMesh, grid_stride: u32) -> Self {
        let mut toy = Self::new(grid_stride);
        for (i, name) in mesh.part_names().iter().enumerate() {
            toy.register_word(name, part_palette(i));
            for syn in mesh.part_synonyms(i) {
                toy.register_word(syn, part_palette(i));
            }
        }
        toy
    }

    /// Extend (or deliberately corrupt, in tests) the word table.
    pub fn register_word(&mut self, word: &str, direction: [f64; 3]) {
        self.part_words.insert(word.to_lowercase(), direction);
    }

    fn base_direction(&self, phrase: &str) -> Result<Vector3<f64>, GroundingError> {
        let toks = tokens(phrase);
        for t in &toks {
            if let Some((_, rgb)) = COLOR_WORDS.iter().find(|(w, _)| w == t) {
                return Ok(Vector3::from_column_slice(rgb).normalize());
            }
        }
        for t in &toks {
            if let Some(rgb) = self.part_words.get(t) {
                return Ok(Vector3::from_column_slice(rgb).normalize());
            }
        }
        let mut supported: Vec<String> =
            COLOR_WORDS.iter().map(|(w, _)| (*w).to_string()).collect();
        supported.extend(self.part_words.keys().cloned());
        Err(GroundingError::UnknownStyleWord {
            phrase: phrase.to_string(),
            supported: supported.join(", "),
        })
    }

    /// Unit textual direction for a phrase, with any tuned offset applied
    /// before renormalization. A zero offset is exactly neutral.
    pub fn phrase_direction(&self, phrase: &str) -> Result<Vector3<f64>, GroundingError> {
        let mut dir = self.base_direction(phrase)?;
        if let Some(off) = self.offsets.get(phrase) {
            dir += Vector3::new(off[0], off[1], off[2]);
        }
        Ok(dir.normalize())
    }

    fn textual_matrix(&self, phrases: &[String]) -> Result<Array2<f64>, GroundingError> {
        if phrases.is_empty() {
            return Err(GroundingError::EmptyPhrases);
        }
        let mut textual = Array2::zeros((phrases.len(), 3));
        for (i, phrase) in phrases.iter().enumerate() {
            let dir = self.phrase_direction(phrase)?;
            for k in 0..3 {
                textual[(i, k)] = dir[k];
            }
        }
        Ok(textual)
    }
}

impl GroundingBackend for ToyGrounding {
    fn id(&self) -> String {
        "toy".to_string()
    }

    fn encode(
        &self,
        image: &RenderedImage,
        phrases: &[String],
    ) -> Result<FusedFeatures, GroundingError> {
        let textual = self.textual_matrix(phrases)?;
        let gw = check_grid(image.width, self.grid_stride)?;
        let gh = check_grid(image.height, self.grid_stride)?;
        let visual = pooled_patch_means(
            &image.pixels,
            image.width as usize,
            image.height as usize,
            gw,
            gh,
            true,
        );
        Ok(FusedFeatures { visual, textual, grid_w: gw, grid_h: gh, grid_stride: self.grid_stride })
    }

    /// Per phrase: the bounding rectangle (in pixels) of cells whose
    /// post-sigmoid score for that phrase exceeds the threshold; confidence
    /// is the mean post-sigmoid score inside. Unresponsive phrases yield no
    /// box.
    fn detect_boxes(
        &self,
        image: &RenderedImage,
        phrases: &[String],
    ) -> Result<Vec<DetectedBox>, GroundingError> {
        let features = self.encode(image, phrases)?;
        let map = alignment_map(&features)?;
        let stride = self.grid_stride;
        let mut boxes = Vec::new();
        for p in 0..phrases.len() {
            let mut bounds: Option<(usize, usize, usize, usize)> = None;
            let mut conf_sum = 0.0;
            let mut count = 0usize;
            for y in 0..map.grid_h {
                for x in 0..map.grid_w {
                    let s = sigmoid_scalar(map.score(x, y, p));
                    if s > self.threshold {
                        let b = bounds.get_or_insert((x, y, x, y));
                        b.0 = b.0.min(x);
                        b.1 = b.1.min(y);
                        b.2 = b.2.max(x);
                        b.3 = b.3.max(y);
                        conf_sum += s;
                        count += 1;
                    }
                }
            }
            if let Some((x0, y0, x1, y1)) = bounds {
                boxes.push(DetectedBox {
                    pixel_box: PixelBox {
                        x0: x0 as u32 * stride,
                        y0: y0 as u32 * stride,
                        x1: (x1 as u32 + 1) * stride,
                        y1: (y1 as u32 + 1) * stride,
                    },
                    phrase: p,
                    confidence: conf_sum / count as f64,
                });
            }
        }
        Ok(boxes)
    }

    fn diff_alignment(
        &self,
        tape: &mut Tape,
        pixels: Var,
        image_size: u32,
        phrases: &[String],
    ) -> Result<DiffAlignment, GroundingError> {
        let textual = self.textual_matrix(phrases)?;
        let g = check_grid(image_size, self.grid_stride)?;
        let pooled = tape.patch_pool(pixels, image_size as usize, image_size as usize, g, g, true);
        let text_node = tape.leaf(textual);
        let scores = tape.matmul_nt(pooled, text_node);
        Ok(DiffAlignment { scores, grid_w: g, grid_h: g, grid_stride: self.grid_stride })
    }

    fn set_prompt_offsets(&mut self, offsets: PromptOffsets) {
        self.offsets = offsets;
    }

    fn prompt_offsets(&self) -> &PromptOffsets {
        &self.offsets
    }
}

// ---------------------------------------------------------------------------
// Oracle backend
// ---------------------------------------------------------------------------

/// Geometry-derived ground truth built from part masks of the source mesh.
///
/// Visual features are `4·one_hot(majority visible part of the cell)` (zero
/// for pure background), textual features are `one_hot(part named by the
/// phrase)`, so thresholded alignment reproduces mask-majority localization
/// through the same code path the other backends use. Detection returns the
/// projected part boxes with confidence 1. Carries no gradients.
pub struct OracleGrounding {
    mesh: Arc<PartitionedMesh>,
    grid_stride: u32,
    min_box_side: u32,
    offsets: PromptOffsets,
}

impl OracleGrounding {
    pub fn new(mesh: Arc<PartitionedMesh>, grid_stride: u32) -> Self {
        Self {
            mesh,
            grid_stride,
            min_box_side: DEFAULT_MIN_BOX_SIDE,
            offsets: PromptOffsets::default(),
        }
    }

    pub fn with_min_box_side(mut self, min_side: u32) -> Self {
        self.min_box_side = min_side;
        self
    }

    fn resolve_phrase(&self, phrase: &str) -> Result<usize, GroundingError> {
        // The part word conventionally trails the style words, so scan from
        // the end.
        for t in tokens(phrase).iter().rev() {
            if let Some(part) = self.mesh.resolve_part(t) {
                return Ok(part);
            }
        }
        let mut known: Vec<String> = Vec::new();
        for (i, name) in self.mesh.part_names().iter().enumerate() {
            known.push(name.clone());
            known.extend(self.mesh.part_synonyms(i).iter().cloned());
        }
        Err(GroundingError::UnknownPart { phrase: phrase.to_string(), known: known.join(", ") })
    }

    /// Majority visible part per grid cell; -1 where the cell is pure
    /// background. Ties go to the lowest part index.
    pub fn cell_majorities(&self, camera: &Camera) -> Result<Vec<i32>, GroundingError> {
        let gw = check_grid(camera.image_size, self.grid_stride)?;
        let masks = render_part_masks(&self.mesh, camera);
        let stride = self.grid_stride as usize;
        let mut cells = vec![-1i32; gw * gw];
        for gy in 0..gw {
            for gx in 0..gw {
                let mut counts = vec![0usize; self.mesh.part_count()];
                for dy in 0..stride {
                    for dx in 0..stride {
                        let p = masks.part_at((gx * stride + dx) as u32, (gy * stride + dy) as u32);
                        if p >= 0 {
                            counts[p as usize] += 1;
                        }
                    }
                }
                let best = counts
                    .iter()
                    .enumerate()
                    .max_by(|a, b| a.1.cmp(b.1).then(b.0.cmp(&a.0)))
                    .map(|(i, &c)| (i, c))
                    .unwrap_or((0, 0));
                if best.1 > 0 {
                    cells[gy * gw + gx] = best.0 as i32;
                }
            }
        }
        Ok(cells)
    }
}

impl GroundingBackend for OracleGrounding {
    fn id(&self) -> String {
        "oracle".to_string()
    }

    fn encode(
        &self,
        image: &RenderedImage,
        phrases: &[String],
    ) -> Result<FusedFeatures, GroundingError> {
        if phrases.is_empty() {
            return Err(GroundingError::EmptyPhrases);
        }
        let camera = image.camera.ok_or(GroundingError::MissingCamera)?;
        let gw = check_grid(image.width, self.grid_stride)?;
        let d = self.mesh.part_count();
        let cells = self.cell_majorities(&camera)?;
        let mut visual = Array2::zeros((gw * gw, d));
        for (cell, &part) in cells.iter().enumerate() {
            if part >= 0 {
                visual[(cell, part as usize)] = ORACLE_FEATURE_SCALE;
            }
        }
        let mut textual = Array2::zeros((phrases.len(), d));
        for (i, phrase) in phrases.iter().enumerate() {
            textual[(i, self.resolve_phrase(phrase)?)] = 1.0;
        }
        Ok(FusedFeatures { visual, textual, grid_w: gw, grid_h: gw, grid_stride: self.grid_stride })
    }

    fn detect_boxes(
        &self,
        image: &RenderedImage,
        phrases: &[String],
    ) -> Result<Vec<DetectedBox>, GroundingError> {
        let camera = image.camera.ok_or(GroundingError::MissingCamera)?;
        let gt = project_part_bboxes(&self.mesh, &camera, self.min_box_side);
        let mut boxes = Vec::new();
        for (i, phrase) in phrases.iter().enumerate() {
            let part = self.resolve_phrase(phrase)?;
            if let Some(b) = gt[part] {
                boxes.push(DetectedBox { pixel_box: b, phrase: i, confidence: 1.0 });
            }
        }
        Ok(boxes)
    }

    fn set_prompt_offsets(&mut self, offsets: PromptOffsets) {
        if !offsets.is_empty() {
            log::debug!("oracle backend ignores prompt offsets");
        }
        self.offsets = offsets;
    }

    fn prompt_offsets(&self) -> &PromptOffsets {
        &self.offsets
    }
}

// ---------------------------------------------------------------------------
// Pretrained adapter
// ---------------------------------------------------------------------------

/// How to launch the external grounding model runner.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AdapterConfig {
    /// Executable to spawn (e.g. a python entry point).
    pub command: String,
    #[serde(default)]
    pub args: Vec<String>,
    /// Model weights path, forwarded to the runner.
    pub weights: PathBuf,
    /// Model configuration path, forwarded to the runner.
    pub model_config: PathBuf,
    #[serde(default = "default_stride")]
    pub grid_stride: u32,
}

fn default_stride() -> u32 {
    DEFAULT_GRID_STRIDE
}

#[derive(Serialize)]
struct AdapterRequest<'a> {
    op: &'a str,
    width: u32,
    height: u32,
    image_png_base64: &'a str,
    phrases: &'a [String],
    offsets: &'a BTreeMap<String, Vec<f64>>,
    grid_stride: u32,
}

#[derive(Deserialize)]
struct AdapterResponse {
    ok: bool,
    #[serde(default)]
    error: String,
    #[serde(default)]
    visual: Vec<Vec<f64>>,
    #[serde(default)]
    textual: Vec<Vec<f64>>,
    #[serde(default)]
    grid_w: usize,
    #[serde(default)]
    grid_h: usize,
    #[serde(default)]
    boxes: Vec<AdapterBox>,
}

#[derive(Deserialize)]
struct AdapterBox {
    x0: u32,
    y0: u32,
    x1: u32,
    y1: u32,
    phrase: usize,
    confidence: f64,
}

/// Bridge to a real grounding model in a persistent subprocess.
///
/// Speaks newline-delimited JSON over the child's stdin/stdout; images travel
/// as base64 PNG. Calls are serialized behind a mutex, matching the external
/// model's single-stream execution. The child receives the weights and model
/// config paths as trailing arguments and must answer one JSON object per
/// request line.
pub struct PretrainedAdapter {
    io: Mutex<AdapterIo>,
    grid_stride: u32,
    offsets: PromptOffsets,
    command: String,
}

struct AdapterIo {
    child: Child,
    stdin: std::process::ChildStdin,
    stdout: BufReader<std::process::ChildStdout>,
}

impl PretrainedAdapter {
    pub fn spawn(config: &AdapterConfig) -> Result<Self, GroundingError> {
        let mut child = Command::new(&config.command)
            .args(&config.args)
            .arg(&config.weights)
            .arg(&config.model_config)
            .stdin(Stdio::piped())
            .stdout(Stdio::piped())
            .spawn()
            .map_err(|source| GroundingError::AdapterSpawn {
                command: config.command.clone(),
                source,
            })?;
        let stdin = child.stdin.take().expect("piped stdin");
        let stdout = BufReader::new(child.stdout.take().expect("piped stdout"));
        Ok(Self {
            io: Mutex::new(AdapterIo { child, stdin, stdout }),
            grid_stride: config.grid_stride,
            offsets: PromptOffsets::default(),
            command: config.command.clone(),
        })
    }

    fn request(
        &self,
        op: &str,
        image: &RenderedImage,
        phrases: &[String],
    ) -> Result<AdapterResponse, GroundingError> {
        if phrases.is_empty() {
            return Err(GroundingError::EmptyPhrases);
        }
        let png = encode_png_base64(image)?;
        let req = AdapterRequest {
            op,
            width: image.width,
            height: image.height,
            image_png_base64: &png,
            phrases,
            offsets: &self.offsets.vectors,
            grid_stride: self.grid_stride,
        };
        let line = serde_json::to_string(&req)
            .map_err(|e| GroundingError::AdapterProtocol(e.to_string()))?;
        let mut io = self.io.lock().expect("adapter mutex poisoned");
        io.stdin.write_all(line.as_bytes())?;
        io.stdin.write_all(b"\n")?;
        io.stdin.flush()?;
        let mut reply = String::new();
        let n = io.stdout.read_line(&mut reply)?;
        if n == 0 {
            return Err(GroundingError::AdapterProtocol(format!(
                "'{}' closed its stdout",
                self.command
            )));
        }
        let resp: AdapterResponse = serde_json::from_str(reply.trim())
            .map_err(|e| GroundingError::AdapterProtocol(format!("bad reply: {e}")))?;
        if !resp.ok {
            return Err(GroundingError::AdapterRemote(resp.error));
        }
        Ok(resp)
    }
}

impl Drop for PretrainedAdapter {
    fn drop(&mut self) {
        if let Ok(mut io) = self.io.lock() {
            let _ = io.stdin.write_all(b"{\"op\":\"shutdown\"}\n");
            let _ = io.stdin.flush();
            let _ = io.child.wait();
        }
    }
}

impl GroundingBackend for PretrainedAdapter {
    fn id(&self) -> String {
        "pretrained".to_string()
    }

    fn encode(
        &self,
        image: &RenderedImage,
        phrases: &[String],
    ) -> Result<FusedFeatures, GroundingError> {
        let resp = self.request("encode", image, phrases)?;
        if resp.visual.is_empty() || resp.textual.len() != phrases.len() {
            return Err(GroundingError::AdapterProtocol(format!(
                "encode returned {} visual rows and {} textual rows for {} phrases",
                resp.visual.len(),
                resp.textual.len(),
                phrases.len()
            )));
        }
        if resp.visual.len() != resp.grid_w * resp.grid_h {
            return Err(GroundingError::AdapterProtocol(format!(
                "visual rows {} do not fill grid {}x{}",
                resp.visual.len(),
                resp.grid_w,
                resp.grid_h
            )));
        }
        let d = resp.visual[0].len();
        if resp.visual.iter().any(|r| r.len() != d) || resp.textual.iter().any(|r| r.len() != d) {
            return Err(GroundingError::AdapterProtocol("ragged feature rows".to_string()));
        }
        let visual = Array2::from_shape_fn((resp.visual.len(), d), |(i, j)| resp.visual[i][j]);
        let textual = Array2::from_shape_fn((resp.textual.len(), d), |(i, j)| resp.textual[i][j]);
        Ok(FusedFeatures {
            visual,
            textual,
            grid_w: resp.grid_w,
            grid_h: resp.grid_h,
            grid_stride: self.grid_stride,
        })
    }

    fn detect_boxes(
        &self,
        image: &RenderedImage,
        phrases: &[String],
    ) -> Result<Vec<DetectedBox>, GroundingError> {
        let resp = self.request("detect", image, phrases)?;
        Ok(resp
            .boxes
            .into_iter()
            .map(|b| DetectedBox {
                pixel_box: PixelBox { x0: b.x0, y0: b.y0, x1: b.x1, y1: b.y1 },
                phrase: b.phrase,
                confidence: b.confidence,
            })
            .collect())
    }

    fn set_prompt_offsets(&mut self, offsets: PromptOffsets) {
        self.offsets = offsets;
    }

    fn prompt_offsets(&self) -> &PromptOffsets {
        &self.offsets
    }
}

fn encode_png_base64(image: &RenderedImage) -> Result<String, GroundingError> {
    let mut img = image::RgbImage::new(image.width, image.height);
    for (i, px) in img.pixels_mut().enumerate() {
        for k in 0..3 {
            px.0[k] = (image.pixels[(i, k)].clamp(0.0, 1.0) * 255.0).round() as u8;
        }
    }
    let mut bytes = Vec::new();
    img.write_to(&mut std::io::Cursor::new(&mut bytes), image::ImageFormat::Png)
        .map_err(|e| GroundingError::ImageEncode(e.to_string()))?;
    Ok(base64::engine::general_purpose::STANDARD.encode(bytes))
}

// ---------------------------------------------------------------------------
// Backend selection
// ---------------------------------------------------------------------------

/// Config/CLI key for the grounding backend.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BackendKey {
    Toy,
    Oracle,
    Pretrained,
}

impl std::str::FromStr for BackendKey {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_lowercase().as_str() {
            "toy" => Ok(Self::Toy),
            "oracle" => Ok(Self::Oracle),
            "pretrained" => Ok(Self::Pretrained),
            other => {
                Err(format!("unknown backend '{other}' (expected toy, oracle, or pretrained)"))
            }
        }
    }
}

/// Instantiate a grounding backend by key. The pretrained key requires an
/// adapter configuration.
pub fn make_backend(
    key: BackendKey,
    mesh: &Arc<PartitionedMesh>,
    grid_stride: u32,
    adapter: Option<&AdapterConfig>,
) -> Result<Box<dyn GroundingBackend>, GroundingError> {
    match key {
        BackendKey::Toy => Ok(Box::new(ToyGrounding::for_mesh(mesh, grid_stride))),
        BackendKey::Oracle => Ok(Box::new(OracleGrounding::new(Arc::clone(mesh), grid_stride))),
        BackendKey::Pretrained => {
            let config = adapter.ok_or_else(|| {
                GroundingError::AdapterProtocol(
                    "pretrained backend requires an [adapter] configuration".to_string(),
                )
            })?;
            Ok(Box::new(PretrainedAdapter::spawn(config)?))
        }
    }
}
