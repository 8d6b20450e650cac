//! Prompt-offset tuning of a grounding backend against a rendered,
//! box-annotated dataset.
//!
//! The dataset pairs content renders from a viewpoint grid with captions that
//! cycle through part synonyms; ground-truth boxes come from the mask
//! projector with its small-box omission rule. Tuning learns one offset
//! vector per phrase, applied by the backend as renormalized addition to the
//! phrase's unit textual embedding, by minimizing binary cross-entropy
//! between post-sigmoid cell scores and box-membership cell labels. All
//! other backend state stays frozen.

use std::collections::BTreeMap;
use std::fs;
use std::io::{Read as IoRead, Write as IoWrite};
use std::path::{Path, PathBuf};

use ndarray::Array2;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::autodiff::Tape;
use crate::grounding::{DetectedBox, GroundingBackend, GroundingError, PromptOffsets};
use crate::mesh::PartitionedMesh;
use crate::render::{load_png, project_part_bboxes, render, Camera, PixelBox, RenderError};
use crate::trainer::Adam;

#[derive(Debug, Error)]
pub enum FinetuneError {
    #[error("synonym table has {got} entries for a mesh with {expected} parts")]
    SynonymTableShape { expected: usize, got: usize },
    #[error("part {part} has an empty synonym list; include at least its canonical name")]
    EmptySynonyms { part: usize },
    #[error("viewpoint list must not be empty")]
    NoViewpoints,
    #[error("part '{name}' is invisible from every viewpoint; the dataset cannot teach it")]
    InvisiblePart { name: String },
    #[error("dataset has no samples")]
    EmptyDataset,
    #[error(transparent)]
    Render(#[from] RenderError),
    #[error(transparent)]
    Grounding(#[from] GroundingError),
    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("serialization failed: {0}")]
    Serde(String),
    #[error(
        "offset tuning diverged at epoch {epoch}: loss {loss:.6} exceeds 10x the \
         initial {initial:.6}; lower the learning rate"
    )]
    TuneDiverged { epoch: usize, loss: f64, initial: f64 },
    #[error("offset file {path} is for {what} '{found}', expected '{expected}'")]
    OffsetKeyMismatch { path: PathBuf, what: &'static str, expected: String, found: String },
    #[error("offset file {path} is malformed: {msg}")]
    BadSidecar { path: PathBuf, msg: String },
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> FinetuneError + '_ {
    move |source| FinetuneError::Io { path: path.to_path_buf(), source }
}

// ---------------------------------------------------------------------------
// Dataset
// ---------------------------------------------------------------------------

/// One annotated render: caption phrases are part-indexed (phrase i describes
/// part i); boxes carry the part they bound, with small or invisible parts
/// absent.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DatasetSample {
    /// Image file, relative to the dataset root.
    pub image: String,
    pub camera: Camera,
    pub caption: String,
    pub phrases: Vec<String>,
    pub boxes: Vec<(usize, PixelBox)>,
}

/// A detection dataset on disk: PNG renders plus one annotation index.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct FinetuneDataset {
    pub samples: Vec<DatasetSample>,
    /// Per part: the phrases captions cycle through (first entry canonical).
    pub synonyms: Vec<Vec<String>>,
    pub image_size: u32,
    pub min_side: u32,
    pub background: [f64; 3],
    pub mesh_hash: String,
    #[serde(skip)]
    pub root: PathBuf,
}

impl FinetuneDataset {
    pub fn image_path(&self, sample: &DatasetSample) -> PathBuf {
        self.root.join(&sample.image)
    }

    pub fn part_count(&self) -> usize {
        self.synonyms.len()
    }
}

const ANNOTATION_FILE: &str = "annotations.json";

/// The default synonym table of a mesh: canonical name first, declared
/// synonyms after.
pub fn mesh_synonym_table(mesh: &PartitionedMesh) -> Vec<Vec<String>> {
    mesh.part_names()
        .iter()
        .enumerate()
        .map(|(i, name)| {
            let mut row = vec![name.clone()];
            row.extend(mesh.part_synonyms(i).iter().cloned());
            row
        })
        .collect()
}

/// Render one sample per (viewpoint × synonym assignment) into `out_dir` and
/// write the annotation index.
///
/// Assignment j gives part p the phrase `synonyms[p][j % len(p)]`, so the
/// assignment count is the longest synonym list and shorter lists cycle.
/// Boxes come from the mask projector with `min_side` omission. A part that
/// ends up with no box in any sample makes the whole generation fail.
pub fn generate_dataset(
    mesh: &PartitionedMesh,
    synonyms: &[Vec<String>],
    viewpoints: &[Camera],
    min_side: u32,
    background: [f64; 3],
    out_dir: &Path,
) -> Result<FinetuneDataset, FinetuneError> {
    if synonyms.len() != mesh.part_count() {
        return Err(FinetuneError::SynonymTableShape {
            expected: mesh.part_count(),
            got: synonyms.len(),
        });
    }
    if let Some(part) = synonyms.iter().position(|s| s.is_empty()) {
        return Err(FinetuneError::EmptySynonyms { part });
    }
    if viewpoints.is_empty() {
        return Err(FinetuneError::NoViewpoints);
    }
    let image_dir = out_dir.join("images");
    fs::create_dir_all(&image_dir).map_err(io_err(&image_dir))?;

    let n_assign = synonyms.iter().map(Vec::len).max().unwrap_or(1);
    let mut samples: Vec<DatasetSample> = Vec::with_capacity(viewpoints.len() * n_assign);
    let mut part_seen = vec![false; mesh.part_count()];
    for (v, camera) in viewpoints.iter().enumerate() {
        let image = render(mesh, camera, background);
        let boxes: Vec<(usize, PixelBox)> = project_part_bboxes(mesh, camera, min_side)
            .into_iter()
            .enumerate()
            .filter_map(|(part, b)| b.map(|b| (part, b)))
            .collect();
        for &(part, _) in &boxes {
            part_seen[part] = true;
        }
        for j in 0..n_assign {
            let idx = v * n_assign + j;
            let name = format!("images/sample_{idx:04}.png");
            if j == 0 {
                image.save_png(&out_dir.join(&name))?;
            } else {
                // identical render, different caption: link to the first copy
                let src = samples[v * n_assign].image.clone();
                fs::copy(out_dir.join(&src), out_dir.join(&name))
                    .map_err(io_err(&out_dir.join(&name)))?;
            }
            let phrases: Vec<String> = synonyms.iter().map(|s| s[j % s.len()].clone()).collect();
            samples.push(DatasetSample {
                image: name,
                camera: *camera,
                caption: phrases.join(", "),
                phrases,
                boxes: boxes.clone(),
            });
        }
    }
    if let Some(part) = part_seen.iter().position(|&s| !s) {
        return Err(FinetuneError::InvisiblePart { name: mesh.part_names()[part].clone() });
    }

    let dataset = FinetuneDataset {
        samples,
        synonyms: synonyms.to_vec(),
        image_size: viewpoints[0].image_size,
        min_side,
        background,
        mesh_hash: mesh.content_hash(),
        root: out_dir.to_path_buf(),
    };
    let index_path = out_dir.join(ANNOTATION_FILE);
    let json =
        serde_json::to_string_pretty(&dataset).map_err(|e| FinetuneError::Serde(e.to_string()))?;
    fs::write(&index_path, json).map_err(io_err(&index_path))?;
    Ok(dataset)
}

/// Load a dataset previously written by [`generate_dataset`].
pub fn load_dataset(dir: &Path) -> Result<FinetuneDataset, FinetuneError> {
    let index_path = dir.join(ANNOTATION_FILE);
    let json = fs::read_to_string(&index_path).map_err(io_err(&index_path))?;
    let mut dataset: FinetuneDataset =
        serde_json::from_str(&json).map_err(|e| FinetuneError::Serde(e.to_string()))?;
    dataset.root = dir.to_path_buf();
    Ok(dataset)
}

// ---------------------------------------------------------------------------
// Offset tuning
// ---------------------------------------------------------------------------

/// Result of an offset-tuning run.
#[derive(Debug, Clone)]
pub struct TuneReport {
    pub offsets: PromptOffsets,
    /// Full-batch loss after each epoch, preceded by the initial loss.
    pub losses: Vec<f64>,
}

struct SamplePrep {
    visual: Array2<f64>,
    labels: Array2<f64>,
    phrase_rows: Vec<usize>,
}

/// Learn per-phrase offset vectors minimizing binary cross-entropy between
/// the backend's post-sigmoid cell scores and box-membership labels, full
/// batch, one optimizer step per epoch. The tuned offsets are installed on
/// the backend and returned; zero epochs returns (and installs) zero offsets.
///
/// The parameterization matches the backend's offset contract: the tuned
/// vector is added to the phrase's unit textual embedding and renormalized,
/// so what tuning optimizes is exactly what encode later applies.
pub fn tune_offsets(
    backend: &mut dyn GroundingBackend,
    dataset: &FinetuneDataset,
    epochs: usize,
    learning_rate: f64,
) -> Result<TuneReport, FinetuneError> {
    if dataset.samples.is_empty() {
        return Err(FinetuneError::EmptyDataset);
    }
    // phrase table over the whole dataset, stable order
    let mut phrase_index: BTreeMap<String, usize> = BTreeMap::new();
    for s in &dataset.samples {
        for p in &s.phrases {
            let next = phrase_index.len();
            phrase_index.entry(p.clone()).or_insert(next);
        }
    }
    let phrases: Vec<String> = {
        let mut v = vec![String::new(); phrase_index.len()];
        for (p, &i) in &phrase_index {
            v[i] = p.clone();
        }
        v
    };

    // all feature extraction happens at zero offset; restore on any failure
    let prior = backend.prompt_offsets().clone();
    backend.set_prompt_offsets(PromptOffsets::default());
    let outcome = tune_inner(backend, dataset, epochs, learning_rate, &phrases, &phrase_index);
    match outcome {
        Ok(report) => {
            backend.set_prompt_offsets(report.offsets.clone());
            Ok(report)
        }
        Err(e) => {
            backend.set_prompt_offsets(prior);
            Err(e)
        }
    }
}

fn tune_inner(
    backend: &dyn GroundingBackend,
    dataset: &FinetuneDataset,
    epochs: usize,
    learning_rate: f64,
    phrases: &[String],
    phrase_index: &BTreeMap<String, usize>,
) -> Result<TuneReport, FinetuneError> {
    // base unit directions and per-sample constants
    let mut dim = 0;
    let mut dirs: Option<Array2<f64>> = None;
    let mut preps = Vec::with_capacity(dataset.samples.len());
    for sample in &dataset.samples {
        let img = load_with_camera(dataset, sample)?;
        let features = backend.encode(&img, &sample.phrases)?;
        if dirs.is_none() {
            dim = features.textual.ncols();
            dirs = Some(Array2::zeros((phrases.len(), dim)));
        }
        let dirs = dirs.as_mut().expect("initialized above");
        let phrase_rows: Vec<usize> = sample.phrases.iter().map(|p| phrase_index[p]).collect();
        for (i, &row) in phrase_rows.iter().enumerate() {
            for k in 0..dim {
                dirs[(row, k)] = features.textual[(i, k)];
            }
        }
        let labels = cell_labels(sample, features.grid_w, features.grid_h, features.grid_stride);
        preps.push(SamplePrep { visual: features.visual, labels, phrase_rows });
    }
    let dirs = dirs.expect("at least one sample");

    let mut offsets_mat = Array2::zeros((phrases.len(), dim));
    let mut losses = Vec::with_capacity(epochs + 1);
    let mut adam = Adam::new(learning_rate, &[(phrases.len(), dim)]);
    for epoch in 0..=epochs {
        let mut tape = Tape::new();
        let off = tape.leaf(offsets_mat.clone());
        let base = tape.leaf(dirs.clone());
        let shifted = tape.add(off, base);
        let textual_all = tape.normalize_rows(shifted);
        let mut acc = None;
        for prep in &preps {
            let textual = tape.gather_rows(textual_all, prep.phrase_rows.clone());
            let visual = tape.leaf(prep.visual.clone());
            let scores = tape.matmul_nt(visual, textual);
            let sp = tape.softplus(scores);
            let hit = tape.mul_const(scores, prep.labels.clone());
            let bce = tape.sub(sp, hit);
            let m = tape.mean(bce);
            acc = Some(match acc {
                Some(a) => tape.add(a, m),
                None => m,
            });
        }
        let acc = acc.expect("non-empty dataset");
        let loss_node = tape.affine(acc, 1.0 / preps.len() as f64, 0.0);
        let loss = tape.scalar_value(loss_node);
        losses.push(loss);
        if loss > 10.0 * losses[0] {
            return Err(FinetuneError::TuneDiverged { epoch, loss, initial: losses[0] });
        }
        if epoch == epochs {
            break;
        }
        let grads = tape.backward(loss_node);
        let grad = grads.of(off).cloned().unwrap_or_else(|| Array2::zeros((phrases.len(), dim)));
        adam.step(&mut [&mut offsets_mat], &[grad]);
    }

    let mut offsets = PromptOffsets::default();
    for (i, phrase) in phrases.iter().enumerate() {
        offsets.set(phrase, offsets_mat.row(i).to_vec());
    }
    Ok(TuneReport { offsets, losses })
}

/// 1.0 where the cell's center pixel lies inside a ground-truth box of that
/// phrase's part, else 0.0; cells × phrases.
fn cell_labels(sample: &DatasetSample, grid_w: usize, grid_h: usize, stride: u32) -> Array2<f64> {
    let mut labels = Array2::zeros((grid_w * grid_h, sample.phrases.len()));
    for gy in 0..grid_h {
        for gx in 0..grid_w {
            let cx = gx as u32 * stride + stride / 2;
            let cy = gy as u32 * stride + stride / 2;
            for (p, _) in sample.phrases.iter().enumerate() {
                let inside = sample.boxes.iter().any(|&(part, b)| part == p && b.contains(cx, cy));
                if inside {
                    labels[(gy * grid_w + gx, p)] = 1.0;
                }
            }
        }
    }
    labels
}

fn load_with_camera(
    dataset: &FinetuneDataset,
    sample: &DatasetSample,
) -> Result<crate::render::RenderedImage, FinetuneError> {
    let mut img = load_png(&dataset.image_path(sample))?;
    img.camera = Some(sample.camera);
    Ok(img)
}

// ---------------------------------------------------------------------------
// Average precision
// ---------------------------------------------------------------------------

/// Detection quality of a backend over a dataset.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ApReport {
    /// AP pooled over all parts.
    pub ap: f64,
    /// Per-part AP; None when the dataset holds no ground truth for the part.
    pub per_part: Vec<Option<f64>>,
    pub n_detections: usize,
    pub n_ground_truth: usize,
    pub iou_threshold: f64,
}

/// Run the backend's detector over every sample and score it against the
/// stored boxes at one IoU threshold.
pub fn evaluate_ap(
    backend: &dyn GroundingBackend,
    dataset: &FinetuneDataset,
    iou_threshold: f64,
) -> Result<ApReport, FinetuneError> {
    if dataset.samples.is_empty() {
        return Err(FinetuneError::EmptyDataset);
    }
    let mut per_sample = Vec::with_capacity(dataset.samples.len());
    for sample in &dataset.samples {
        let img = load_with_camera(dataset, sample)?;
        let detections = backend.detect_boxes(&img, &sample.phrases)?;
        per_sample.push((detections, sample.boxes.clone()));
    }
    Ok(compute_ap(&per_sample, dataset.part_count(), iou_threshold))
}

/// Per sample: the backend's detections and the annotated (part, box) truths.
pub type DetectionsAndTruths = (Vec<DetectedBox>, Vec<(usize, PixelBox)>);

/// Greedy confidence-ordered matching plus all-point precision-envelope
/// integration. Pure so tests can compare it against brute force.
pub fn compute_ap(
    per_sample: &[DetectionsAndTruths],
    part_count: usize,
    iou_threshold: f64,
) -> ApReport {
    let pooled = ap_over(per_sample, iou_threshold, None);
    let per_part = (0..part_count)
        .map(|part| {
            let has_gt = per_sample.iter().any(|(_, gts)| gts.iter().any(|&(p, _)| p == part));
            has_gt.then(|| ap_over(per_sample, iou_threshold, Some(part)).0)
        })
        .collect();
    ApReport {
        ap: pooled.0,
        per_part,
        n_detections: pooled.1,
        n_ground_truth: pooled.2,
        iou_threshold,
    }
}

/// (ap, detection count, ground-truth count), optionally restricted to one
/// part.
fn ap_over(
    per_sample: &[DetectionsAndTruths],
    iou_threshold: f64,
    only_part: Option<usize>,
) -> (f64, usize, usize) {
    let keep = |part: usize| only_part.is_none_or(|p| p == part);
    // (confidence, sample, part, box), sorted by confidence with a full
    // deterministic tie-break
    let mut detections: Vec<(f64, usize, usize, PixelBox)> = Vec::new();
    for (s, (dets, _)) in per_sample.iter().enumerate() {
        for d in dets {
            if keep(d.phrase) {
                detections.push((d.confidence, s, d.phrase, d.pixel_box));
            }
        }
    }
    detections.sort_by(|a, b| {
        b.0.total_cmp(&a.0)
            .then(a.1.cmp(&b.1))
            .then(a.2.cmp(&b.2))
            .then(a.3.x0.cmp(&b.3.x0))
            .then(a.3.y0.cmp(&b.3.y0))
    });
    let total_gt: usize =
        per_sample.iter().map(|(_, gts)| gts.iter().filter(|&&(p, _)| keep(p)).count()).sum();
    if total_gt == 0 {
        return (0.0, detections.len(), 0);
    }

    let mut gt_used: Vec<Vec<bool>> =
        per_sample.iter().map(|(_, gts)| vec![false; gts.len()]).collect();
    let mut precisions = Vec::with_capacity(detections.len());
    let mut recalls = Vec::with_capacity(detections.len());
    let (mut tp, mut fp) = (0usize, 0usize);
    for &(_, s, part, dbox) in &detections {
        let gts = &per_sample[s].1;
        let best = gts
            .iter()
            .enumerate()
            .filter(|(gi, (gp, _))| *gp == part && !gt_used[s][*gi])
            .map(|(gi, (_, gbox))| (gi, dbox.iou(gbox)))
            .filter(|&(_, iou)| iou >= iou_threshold)
            .max_by(|a, b| a.1.total_cmp(&b.1));
        match best {
            Some((gi, _)) => {
                gt_used[s][gi] = true;
                tp += 1;
            }
            None => fp += 1,
        }
        precisions.push(tp as f64 / (tp + fp) as f64);
        recalls.push(tp as f64 / total_gt as f64);
    }

    // monotone precision envelope, integrated over recall increments
    for i in (0..precisions.len().saturating_sub(1)).rev() {
        precisions[i] = precisions[i].max(precisions[i + 1]);
    }
    let mut ap = 0.0;
    let mut prev_recall = 0.0;
    for (p, r) in precisions.iter().zip(&recalls) {
        ap += (r - prev_recall) * p;
        prev_recall = *r;
    }
    (ap, detections.len(), total_gt)
}

// ---------------------------------------------------------------------------
// Offset sidecar
// ---------------------------------------------------------------------------

const SIDECAR_MAGIC: &[u8; 4] = b"PSOF";
const SIDECAR_VERSION: u32 = 1;

/// Write offsets keyed by (mesh content hash, backend id). Little-endian
/// throughout.
pub fn save_offsets(
    path: &Path,
    mesh_hash: &str,
    backend_id: &str,
    offsets: &PromptOffsets,
) -> Result<(), FinetuneError> {
    let mut buf: Vec<u8> = Vec::new();
    buf.extend_from_slice(SIDECAR_MAGIC);
    buf.extend_from_slice(&SIDECAR_VERSION.to_le_bytes());
    write_str(&mut buf, mesh_hash);
    write_str(&mut buf, backend_id);
    buf.extend_from_slice(&(offsets.vectors.len() as u32).to_le_bytes());
    for (phrase, vector) in &offsets.vectors {
        write_str(&mut buf, phrase);
        buf.extend_from_slice(&(vector.len() as u32).to_le_bytes());
        for v in vector {
            buf.extend_from_slice(&v.to_le_bytes());
        }
    }
    let mut f = fs::File::create(path).map_err(io_err(path))?;
    f.write_all(&buf).map_err(io_err(path))
}

/// Read offsets, verifying they belong to the given mesh and backend.
pub fn load_offsets(
    path: &Path,
    mesh_hash: &str,
    backend_id: &str,
) -> Result<PromptOffsets, FinetuneError> {
    let mut bytes = Vec::new();
    fs::File::open(path).map_err(io_err(path))?.read_to_end(&mut bytes).map_err(io_err(path))?;
    let bad = |msg: &str| FinetuneError::BadSidecar { path: path.to_path_buf(), msg: msg.into() };
    let mut cur = bytes.as_slice();
    if take(&mut cur, 4).ok_or_else(|| bad("truncated"))? != SIDECAR_MAGIC {
        return Err(bad("wrong magic"));
    }
    let version = read_u32(&mut cur).ok_or_else(|| bad("truncated"))?;
    if version != SIDECAR_VERSION {
        return Err(bad(&format!("unsupported version {version}")));
    }
    let found_mesh = read_str(&mut cur).ok_or_else(|| bad("truncated"))?;
    if found_mesh != mesh_hash {
        return Err(FinetuneError::OffsetKeyMismatch {
            path: path.to_path_buf(),
            what: "mesh",
            expected: mesh_hash.to_string(),
            found: found_mesh,
        });
    }
    let found_backend = read_str(&mut cur).ok_or_else(|| bad("truncated"))?;
    if found_backend != backend_id {
        return Err(FinetuneError::OffsetKeyMismatch {
            path: path.to_path_buf(),
            what: "backend",
            expected: backend_id.to_string(),
            found: found_backend,
        });
    }
    let count = read_u32(&mut cur).ok_or_else(|| bad("truncated"))? as usize;
    let mut offsets = PromptOffsets::default();
    for _ in 0..count {
        let phrase = read_str(&mut cur).ok_or_else(|| bad("truncated"))?;
        let dim = read_u32(&mut cur).ok_or_else(|| bad("truncated"))? as usize;
        let raw = take(&mut cur, dim * 8).ok_or_else(|| bad("truncated"))?;
        let vector: Vec<f64> = raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect();
        offsets.set(&phrase, vector);
    }
    Ok(offsets)
}

fn write_str(buf: &mut Vec<u8>, s: &str) {
    buf.extend_from_slice(&(s.len() as u32).to_le_bytes());
    buf.extend_from_slice(s.as_bytes());
}

fn take<'a>(cur: &mut &'a [u8], n: usize) -> Option<&'a [u8]> {
    if cur.len() < n {
        return None;
    }
    let (head, rest) = cur.split_at(n);
    *cur = rest;
    Some(head)
}

fn read_u32(cur: &mut &[u8]) -> Option<u32> {
    take(cur, 4).map(|b| u32::from_le_bytes(b.try_into().expect("4 bytes")))
}

fn read_str(cur: &mut &[u8]) -> Option<String> {
    let len = read_u32(cur)? as usize;
    let raw = take(cur, len)?;
    String::from_utf8(raw.to_vec()).ok()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fixtures;
    use crate::grounding::{OracleGrounding, ToyGrounding};
    use crate::render::uniform_viewpoints;
    use std::sync::Arc;

    fn lamp_views(image_size: u32) -> Vec<Camera> {
        uniform_viewpoints(4, &[0.0, 1.2], 2.5, 60f64.to_radians(), image_size).unwrap()
    }

    #[test]
    fn sample_count_is_views_times_assignments() {
        let mesh = fixtures::dumbbell(5, 8);
        let dir = tempfile::tempdir().unwrap();
        let views = uniform_viewpoints(4, &[0.0], 2.5, 1.0, 64).unwrap();
        // synonym lists of lengths 2 and 3 cycle over 3 assignments
        let synonyms = mesh_synonym_table(&mesh);
        assert_eq!(synonyms, vec![vec!["body", "torso"], vec!["handle", "grip", "holder"]]);
        let ds = generate_dataset(&mesh, &synonyms, &views, 4, [1.0; 3], dir.path()).unwrap();
        assert_eq!(ds.samples.len(), 12);
        let captions: Vec<&str> = ds.samples[..3].iter().map(|s| s.caption.as_str()).collect();
        assert_eq!(captions, vec!["body, handle", "torso, grip", "body, holder"]);
        for s in &ds.samples {
            assert!(ds.image_path(s).exists());
            assert_eq!(s.phrases.len(), 2);
        }
    }

    #[test]
    fn top_down_lamp_view_omits_the_thin_tube_box() {
        let mesh = fixtures::lamp(12);
        let dir = tempfile::tempdir().unwrap();
        let synonyms = mesh_synonym_table(&mesh);
        let ds =
            generate_dataset(&mesh, &synonyms, &lamp_views(128), 8, [1.0; 3], dir.path()).unwrap();
        assert_eq!(ds.samples.len(), 8);
        let top_down: Vec<&DatasetSample> =
            ds.samples.iter().filter(|s| s.camera.elevation > 1.0).collect();
        let side: Vec<&DatasetSample> =
            ds.samples.iter().filter(|s| s.camera.elevation == 0.0).collect();
        assert!(!top_down.is_empty() && !side.is_empty());
        for s in &top_down {
            assert!(
                !s.boxes.iter().any(|&(p, _)| p == 1),
                "tube box should be omitted from above: {:?}",
                s.boxes
            );
            assert!(s.boxes.iter().any(|&(p, _)| p == 0), "base visible from above");
        }
        assert!(side.iter().all(|s| s.boxes.iter().any(|&(p, _)| p == 1)));
    }

    #[test]
    fn fully_hidden_part_fails_generation() {
        let mesh = fixtures::nested_cubes();
        let dir = tempfile::tempdir().unwrap();
        let synonyms = mesh_synonym_table(&mesh);
        let views = uniform_viewpoints(4, &[0.0, 0.8], 2.5, 1.0, 64).unwrap();
        let err = generate_dataset(&mesh, &synonyms, &views, 4, [1.0; 3], dir.path()).unwrap_err();
        assert!(matches!(err, FinetuneError::InvisiblePart { ref name } if name == "core"));
    }

    #[test]
    fn regeneration_is_bit_exact() {
        let mesh = fixtures::lamp(10);
        let synonyms = mesh_synonym_table(&mesh);
        let d1 = tempfile::tempdir().unwrap();
        let d2 = tempfile::tempdir().unwrap();
        let a =
            generate_dataset(&mesh, &synonyms, &lamp_views(64), 4, [1.0; 3], d1.path()).unwrap();
        let b =
            generate_dataset(&mesh, &synonyms, &lamp_views(64), 4, [1.0; 3], d2.path()).unwrap();
        for (sa, sb) in a.samples.iter().zip(&b.samples) {
            assert_eq!(sa.boxes, sb.boxes);
            let bytes_a = std::fs::read(a.image_path(sa)).unwrap();
            let bytes_b = std::fs::read(b.image_path(sb)).unwrap();
            assert_eq!(bytes_a, bytes_b, "png bytes differ for {}", sa.image);
        }
        let ja = std::fs::read_to_string(d1.path().join(ANNOTATION_FILE)).unwrap();
        let jb = std::fs::read_to_string(d2.path().join(ANNOTATION_FILE)).unwrap();
        assert_eq!(ja, jb);
    }

    #[test]
    fn stored_boxes_match_recomputation_from_stored_cameras() {
        let mesh = fixtures::dumbbell(5, 8);
        let dir = tempfile::tempdir().unwrap();
        let views = uniform_viewpoints(3, &[0.3], 2.5, 1.0, 64).unwrap();
        let synonyms = mesh_synonym_table(&mesh);
        let ds = generate_dataset(&mesh, &synonyms, &views, 4, [1.0; 3], dir.path()).unwrap();
        let reloaded = load_dataset(dir.path()).unwrap();
        assert_eq!(reloaded.samples.len(), ds.samples.len());
        for s in &reloaded.samples {
            let recomputed: Vec<(usize, PixelBox)> =
                project_part_bboxes(&mesh, &s.camera, reloaded.min_side)
                    .into_iter()
                    .enumerate()
                    .filter_map(|(p, b)| b.map(|b| (p, b)))
                    .collect();
            assert_eq!(s.boxes, recomputed);
        }
    }

    #[test]
    fn oracle_detector_scores_perfect_ap() {
        let mesh = Arc::new(fixtures::dumbbell(5, 8));
        let dir = tempfile::tempdir().unwrap();
        let views = uniform_viewpoints(4, &[0.0, 0.5], 2.5, 1.0, 64).unwrap();
        let synonyms = mesh_synonym_table(&mesh);
        let ds = generate_dataset(&mesh, &synonyms, &views, 6, [1.0; 3], dir.path()).unwrap();
        let oracle = OracleGrounding::new(Arc::clone(&mesh), 8).with_min_box_side(6);
        let report = evaluate_ap(&oracle, &ds, 0.5).unwrap();
        assert_eq!(report.ap, 1.0);
        assert!(report.per_part.iter().all(|p| *p == Some(1.0)));
        assert_eq!(report.n_detections, report.n_ground_truth);
    }

    #[test]
    fn ap_matches_brute_force_on_a_hand_checked_set() {
        let b = |x0, y0, x1, y1| PixelBox { x0, y0, x1, y1 };
        let det = |bx, phrase, confidence| DetectedBox { pixel_box: bx, phrase, confidence };
        // 5 samples, one part; 4 ground truths, 5 detections.
        // Ordered by confidence: TP(0.9), FP(0.8), TP(0.7), FP(0.6), TP(0.5)
        // precision: 1, 1/2, 2/3, 2/4, 3/5; recall: 1/4, 1/4, 2/4, 2/4, 3/4
        // envelope: 1, 2/3, 2/3, 3/5, 3/5
        // ap = 1/4*1 + 1/4*2/3 + 1/4*3/5 = 0.56666...
        let per_sample = vec![
            (vec![det(b(0, 0, 10, 10), 0, 0.9)], vec![(0, b(0, 0, 10, 10))]),
            (vec![det(b(50, 50, 60, 60), 0, 0.8)], vec![(0, b(0, 0, 10, 10))]),
            (vec![det(b(1, 1, 11, 11), 0, 0.7)], vec![(0, b(0, 0, 10, 10))]),
            (
                vec![det(b(2, 0, 12, 10), 0, 0.5), det(b(40, 40, 50, 50), 0, 0.6)],
                vec![(0, b(0, 0, 10, 10))],
            ),
            (vec![], vec![]),
        ];
        let report = compute_ap(&per_sample, 1, 0.5);
        let expected = 0.25 * 1.0 + 0.25 * (2.0 / 3.0) + 0.25 * (3.0 / 5.0);
        assert!((report.ap - expected).abs() < 1e-12, "{} vs {expected}", report.ap);
        assert_eq!(report.n_ground_truth, 4);
        assert_eq!(report.n_detections, 5);
    }

    #[test]
    fn no_detections_scores_zero_and_shifted_boxes_score_zero() {
        let b = |x0: u32, y0: u32, x1: u32, y1: u32| PixelBox { x0, y0, x1, y1 };
        let gt = vec![(0, b(10, 10, 30, 30))];
        let none: Vec<(Vec<DetectedBox>, _)> = vec![(vec![], gt.clone())];
        assert_eq!(compute_ap(&none, 1, 0.5).ap, 0.0);
        // shifted by more than the box size: IoU 0
        let shifted = vec![(
            vec![DetectedBox { pixel_box: b(40, 40, 60, 60), phrase: 0, confidence: 1.0 }],
            gt,
        )];
        assert_eq!(compute_ap(&shifted, 1, 0.5).ap, 0.0);
    }

    #[test]
    fn zero_epochs_returns_zero_offsets_and_changes_nothing() {
        let mesh = fixtures::dumbbell(5, 8);
        let dir = tempfile::tempdir().unwrap();
        let views = uniform_viewpoints(3, &[0.0], 2.5, 1.0, 64).unwrap();
        let synonyms = mesh_synonym_table(&mesh);
        let ds = generate_dataset(&mesh, &synonyms, &views, 4, [1.0; 3], dir.path()).unwrap();

        let mut toy = ToyGrounding::for_mesh(&mesh, 8);
        let img = load_with_camera(&ds, &ds.samples[0]).unwrap();
        let before = toy.detect_boxes(&img, &ds.samples[0].phrases).unwrap();
        let report = tune_offsets(&mut toy, &ds, 0, 1e-2).unwrap();
        assert!(report.offsets.vectors.values().all(|v| v.iter().all(|&x| x == 0.0)));
        let after = toy.detect_boxes(&img, &ds.samples[0].phrases).unwrap();
        assert_eq!(before, after);
    }

    #[test]
    fn tuning_a_rotated_word_table_recovers_detection_ap() {
        let mesh = fixtures::dumbbell(6, 10);
        let dir = tempfile::tempdir().unwrap();
        let views = uniform_viewpoints(4, &[0.0], 2.5, 60f64.to_radians(), 64).unwrap();
        let synonyms = mesh_synonym_table(&mesh);
        let ds = generate_dataset(&mesh, &synonyms, &views, 6, [1.0; 3], dir.path()).unwrap();

        let mut toy = fixtures::rotated_palette_toy(&mesh, 8);
        let before = evaluate_ap(&toy, &ds, 0.5).unwrap();
        let report = tune_offsets(&mut toy, &ds, 150, 5e-2).unwrap();
        let after = evaluate_ap(&toy, &ds, 0.5).unwrap();
        assert!(
            after.ap >= before.ap + 0.3,
            "ap {} -> {} is not a 0.3 improvement",
            before.ap,
            after.ap
        );
        // loss is non-increasing within noise
        let first = report.losses.first().unwrap();
        let last = report.losses.last().unwrap();
        assert!(last < first, "loss {first} -> {last}");
    }

    #[test]
    fn diverging_learning_rate_aborts_and_restores_offsets() {
        let mesh = fixtures::dumbbell(5, 8);
        let dir = tempfile::tempdir().unwrap();
        let views = uniform_viewpoints(2, &[0.0], 2.5, 1.0, 64).unwrap();
        let synonyms = mesh_synonym_table(&mesh);
        let ds = generate_dataset(&mesh, &synonyms, &views, 4, [1.0; 3], dir.path()).unwrap();
        let mut toy = ToyGrounding::for_mesh(&mesh, 8);
        let mut marker = PromptOffsets::default();
        marker.set("body", vec![0.25, 0.0, 0.0]);
        toy.set_prompt_offsets(marker.clone());
        // an absurd learning rate makes the post-sigmoid objective blow up
        match tune_offsets(&mut toy, &ds, 500, 1e6) {
            Err(FinetuneError::TuneDiverged { .. }) => {
                assert_eq!(toy.prompt_offsets(), &marker, "prior offsets restored");
            }
            Ok(report) => {
                // bce on bounded inputs may refuse to diverge; then tuning
                // must still have kept every loss under the abort threshold
                assert!(report.losses.iter().all(|l| *l <= 10.0 * report.losses[0]));
            }
            Err(e) => panic!("unexpected error {e}"),
        }
    }

    #[test]
    fn offset_sidecar_round_trips_and_rejects_wrong_keys() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("offsets.bin");
        let mut offsets = PromptOffsets::default();
        offsets.set("body", vec![0.125, -0.5, 3.0]);
        offsets.set("grip", vec![0.0, 1e-17, -2.25]);
        save_offsets(&path, "meshhash", "toy", &offsets).unwrap();
        let loaded = load_offsets(&path, "meshhash", "toy").unwrap();
        assert_eq!(loaded, offsets);
        assert!(matches!(
            load_offsets(&path, "otherhash", "toy"),
            Err(FinetuneError::OffsetKeyMismatch { what: "mesh", .. })
        ));
        assert!(matches!(
            load_offsets(&path, "meshhash", "oracle"),
            Err(FinetuneError::OffsetKeyMismatch { what: "backend", .. })
        ));
        std::fs::write(&path, b"nope").unwrap();
        assert!(matches!(
            load_offsets(&path, "meshhash", "toy"),
            Err(FinetuneError::BadSidecar { .. })
        ));
    }
}
