//! Training losses.
//!
//! Two objectives drive stylization, used on alternating turns:
//!
//! * The part-style loss: alignment scores of the styled render are gathered
//!   at exactly the grid cells localized on the content render (same camera),
//!   each cell scored against its own part's phrase, then pushed toward a
//!   target value through a configurable distance.
//! * The embedding-similarity loss: per-part crops of the styled render are
//!   augmented (perspective-jittered full crops plus random sub-crops) and
//!   their embeddings pulled toward the part's style phrase embedding by
//!   negative mean cosine similarity.
//!
//! Every loss has a plain evaluation (reporting) and a tape evaluation
//! (training); both share the same geometry helpers so they cannot drift.

use ndarray::Array2;
use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::autodiff::{sigmoid_scalar, Tape, Var};
use crate::grounding::{AlignmentMap, SpatialLocationSet};

#[derive(Debug, Error)]
pub enum LossError {
    #[error("no localized regions to score; localization produced an empty set")]
    NoLocalizedRegions,
    #[error("location ({x},{y}) outside the {grid_w}x{grid_h} alignment grid; content and styled images disagree")]
    LocationOutOfBounds { x: usize, y: usize, grid_w: usize, grid_h: usize },
    #[error("phrase index {phrase} outside the alignment map's {phrases} phrases")]
    PhraseOutOfBounds { phrase: usize, phrases: usize },
    #[error("no patches to embed; every part's crop set was empty")]
    NoPatches,
    #[error("zero-norm embedding for {what}; cannot take cosine similarity")]
    ZeroNormEmbedding { what: String },
    #[error("'{phrase}' contains no word the embedding backend knows; supported: {supported}")]
    UnknownStyleWord { phrase: String, supported: String },
    #[error("embedding dimensions differ: image {image} vs text {text}")]
    EmbeddingDimMismatch { image: usize, text: usize },
}

/// Distance between post-sigmoid gathered scores and the target vector.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum DistanceKind {
    /// Euclidean norm of the residual (the default).
    L2,
    /// Mean squared residual.
    Mse,
    /// Binary cross-entropy against the target as a probability.
    Bce,
    /// Negative mean of the post-sigmoid scores.
    NegMean,
}

impl std::str::FromStr for DistanceKind {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_lowercase().as_str() {
            "l2" => Ok(Self::L2),
            "mse" => Ok(Self::Mse),
            "bce" => Ok(Self::Bce),
            "neg-mean" | "negmean" => Ok(Self::NegMean),
            other => Err(format!("unknown distance '{other}' (expected l2, mse, bce, neg-mean)")),
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LossConfig {
    /// Post-sigmoid localization threshold.
    pub threshold: f64,
    /// Fill value of the part-style learning target.
    pub target_value: f64,
    pub distance_kind: DistanceKind,
    /// Padding around part crop rectangles, pixels.
    pub crop_pad: u32,
    pub n_global_augs: usize,
    pub n_local_augs: usize,
    /// Smallest side fraction a random sub-crop may take.
    pub min_local_fraction: f64,
    /// Corner jitter of global augmentations, as a fraction of the crop side.
    pub perspective_strength: f64,
    /// Side length augmented patches are resampled to.
    pub aug_size: u32,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            threshold: 0.5,
            target_value: 1.0,
            distance_kind: DistanceKind::L2,
            crop_pad: 8,
            n_global_augs: 4,
            n_local_augs: 4,
            min_local_fraction: 0.5,
            perspective_strength: 0.3,
            aug_size: 32,
        }
    }
}

// ---------------------------------------------------------------------------
// Part-style loss
// ---------------------------------------------------------------------------

/// Pre-sigmoid scores of the map at each localized cell, each indexed by the
/// cell's own part phrase; order follows the location entries.
pub fn gather_alignment(
    map: &AlignmentMap,
    locations: &SpatialLocationSet,
) -> Result<Vec<f64>, LossError> {
    locations
        .entries
        .iter()
        .map(|e| {
            if e.x >= map.grid_w || e.y >= map.grid_h {
                return Err(LossError::LocationOutOfBounds {
                    x: e.x,
                    y: e.y,
                    grid_w: map.grid_w,
                    grid_h: map.grid_h,
                });
            }
            if e.part >= map.scores.ncols() {
                return Err(LossError::PhraseOutOfBounds {
                    phrase: e.part,
                    phrases: map.scores.ncols(),
                });
            }
            Ok(map.score(e.x, e.y, e.part))
        })
        .collect()
}

/// Tape analogue of [`gather_alignment`]: picks (cell, part) entries out of a
/// cells×phrases score node as a K×1 column.
pub fn gather_alignment_on_tape(
    tape: &mut Tape,
    scores: Var,
    grid_w: usize,
    grid_h: usize,
    locations: &SpatialLocationSet,
) -> Result<Var, LossError> {
    if locations.entries.is_empty() {
        return Err(LossError::NoLocalizedRegions);
    }
    let n_phrases = tape.value(scores).ncols();
    let mut coords = Vec::with_capacity(locations.entries.len());
    for e in &locations.entries {
        if e.x >= grid_w || e.y >= grid_h {
            return Err(LossError::LocationOutOfBounds { x: e.x, y: e.y, grid_w, grid_h });
        }
        if e.part >= n_phrases {
            return Err(LossError::PhraseOutOfBounds { phrase: e.part, phrases: n_phrases });
        }
        coords.push((e.y * grid_w + e.x, e.part));
    }
    Ok(tape.select(scores, coords))
}

/// Distance between the elementwise sigmoid of `gathered` and the constant
/// target vector. Empty input is an error: a silent zero loss would mask
/// localization failure.
pub fn part_style_loss(gathered: &[f64], config: &LossConfig) -> Result<f64, LossError> {
    if gathered.is_empty() {
        return Err(LossError::NoLocalizedRegions);
    }
    let t = config.target_value;
    let n = gathered.len() as f64;
    let value = match config.distance_kind {
        DistanceKind::L2 => {
            gathered.iter().map(|&s| (sigmoid_scalar(s) - t).powi(2)).sum::<f64>().sqrt()
        }
        DistanceKind::Mse => {
            gathered.iter().map(|&s| (sigmoid_scalar(s) - t).powi(2)).sum::<f64>() / n
        }
        DistanceKind::Bce => {
            let softplus = |x: f64| if x > 0.0 { x + (-x).exp().ln_1p() } else { x.exp().ln_1p() };
            gathered.iter().map(|&s| softplus(s) - t * s).sum::<f64>() / n
        }
        DistanceKind::NegMean => -gathered.iter().map(|&s| sigmoid_scalar(s)).sum::<f64>() / n,
    };
    Ok(value)
}

/// Tape analogue of [`part_style_loss`] over a K×1 gathered-score column.
pub fn part_style_loss_on_tape(tape: &mut Tape, gathered: Var, config: &LossConfig) -> Var {
    let k = tape.value(gathered).nrows();
    assert!(k > 0, "empty gather must be rejected before loss construction");
    let t = config.target_value;
    match config.distance_kind {
        DistanceKind::L2 => {
            let sig = tape.sigmoid(gathered);
            let shifted = tape.affine(sig, 1.0, -t);
            let sq = tape.square(shifted);
            let total = tape.sum(sq);
            tape.sqrt(total)
        }
        DistanceKind::Mse => {
            let sig = tape.sigmoid(gathered);
            let shifted = tape.affine(sig, 1.0, -t);
            let sq = tape.square(shifted);
            tape.mean(sq)
        }
        DistanceKind::Bce => {
            let sp = tape.softplus(gathered);
            let scaled = tape.affine(gathered, -t, 0.0);
            let combined = tape.add(sp, scaled);
            tape.mean(combined)
        }
        DistanceKind::NegMean => {
            let sig = tape.sigmoid(gathered);
            let m = tape.mean(sig);
            tape.affine(m, -1.0, 0.0)
        }
    }
}

// ---------------------------------------------------------------------------
// Crop geometry and augmentation
// ---------------------------------------------------------------------------

/// One part's crop rectangle in source-image pixels, half-open.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Crop {
    pub part: usize,
    pub x0: u32,
    pub y0: u32,
    pub x1: u32,
    pub y1: u32,
}

/// Per-part crop rectangles over one source image.
#[derive(Debug, Clone)]
pub struct CropSet {
    pub crops: Vec<Crop>,
    pub width: u32,
    pub height: u32,
}

/// Per part present in `locations`: the pixel bounding rectangle of its cells
/// (cell → pixel via the set's grid stride), expanded by `crop_pad` and
/// clipped to the image. Parts without locations are skipped.
pub fn crop_regions(
    width: u32,
    height: u32,
    locations: &SpatialLocationSet,
    crop_pad: u32,
) -> CropSet {
    let stride = locations.grid_stride;
    let mut crops = Vec::new();
    for part in locations.parts_present() {
        let mut b: Option<(usize, usize, usize, usize)> = None;
        for e in locations.entries.iter().filter(|e| e.part == part) {
            let r = b.get_or_insert((e.x, e.y, e.x, e.y));
            r.0 = r.0.min(e.x);
            r.1 = r.1.min(e.y);
            r.2 = r.2.max(e.x);
            r.3 = r.3.max(e.y);
        }
        let (cx0, cy0, cx1, cy1) = b.expect("parts_present implies at least one entry");
        crops.push(Crop {
            part,
            x0: (cx0 as u32 * stride).saturating_sub(crop_pad),
            y0: (cy0 as u32 * stride).saturating_sub(crop_pad),
            x1: ((cx1 as u32 + 1) * stride + crop_pad).min(width),
            y1: ((cy1 as u32 + 1) * stride + crop_pad).min(height),
        });
    }
    CropSet { crops, width, height }
}

/// One planned augmentation: a bilinear resampling of the source image onto
/// an aug_size² patch, tagged with the part it depicts. The taps are the
/// entire randomness; applying a plan is deterministic.
pub struct AugPlan {
    pub part: usize,
    pub taps: Vec<[(usize, f64); 4]>,
}

/// Bilinear taps for one output sample at continuous source coords (sx, sy),
/// clamped to the image. Pixel centers sit at integer + 0.5.
fn bilinear_taps(sx: f64, sy: f64, width: usize, height: usize) -> [(usize, f64); 4] {
    let fx = (sx - 0.5).clamp(0.0, (width - 1) as f64);
    let fy = (sy - 0.5).clamp(0.0, (height - 1) as f64);
    let ix = fx.floor() as usize;
    let iy = fy.floor() as usize;
    let ix1 = (ix + 1).min(width - 1);
    let iy1 = (iy + 1).min(height - 1);
    let ax = fx - ix as f64;
    let ay = fy - iy as f64;
    [
        (iy * width + ix, (1.0 - ax) * (1.0 - ay)),
        (iy * width + ix1, ax * (1.0 - ay)),
        (iy1 * width + ix, (1.0 - ax) * ay),
        (iy1 * width + ix1, ax * ay),
    ]
}

fn uniform_in<R: Rng>(rng: &mut R, lo: f64, hi: f64) -> f64 {
    if hi > lo {
        rng.gen_range(lo..hi)
    } else {
        lo
    }
}

/// Plan the augmentations of every crop: `n_global_augs` corner-jittered
/// full-crop warps followed by `n_local_augs` random sub-crops, each
/// resampled to aug_size². Zero perspective strength makes the global warp an
/// exact resize. Draw order is fixed, so a seeded RNG reproduces plans.
pub fn plan_augmentations<R: Rng>(
    crops: &CropSet,
    config: &LossConfig,
    rng: &mut R,
) -> Vec<AugPlan> {
    let s = config.aug_size as usize;
    let (iw, ih) = (crops.width as usize, crops.height as usize);
    let mut plans = Vec::new();
    for crop in &crops.crops {
        let (x0, y0) = (crop.x0 as f64, crop.y0 as f64);
        let (x1, y1) = (crop.x1 as f64, crop.y1 as f64);
        let (w, h) = (x1 - x0, y1 - y0);

        for _ in 0..config.n_global_augs {
            let j = config.perspective_strength * w.min(h);
            let mut corners = [[x0, y0], [x1, y0], [x0, y1], [x1, y1]];
            for c in &mut corners {
                c[0] = (c[0] + uniform_in(rng, -j, j)).clamp(0.0, iw as f64);
                c[1] = (c[1] + uniform_in(rng, -j, j)).clamp(0.0, ih as f64);
            }
            let mut taps = Vec::with_capacity(s * s);
            for oy in 0..s {
                for ox in 0..s {
                    let u = (ox as f64 + 0.5) / s as f64;
                    let v = (oy as f64 + 0.5) / s as f64;
                    let sx = (1.0 - u) * (1.0 - v) * corners[0][0]
                        + u * (1.0 - v) * corners[1][0]
                        + (1.0 - u) * v * corners[2][0]
                        + u * v * corners[3][0];
                    let sy = (1.0 - u) * (1.0 - v) * corners[0][1]
                        + u * (1.0 - v) * corners[1][1]
                        + (1.0 - u) * v * corners[2][1]
                        + u * v * corners[3][1];
                    taps.push(bilinear_taps(sx, sy, iw, ih));
                }
            }
            plans.push(AugPlan { part: crop.part, taps });
        }

        for _ in 0..config.n_local_augs {
            let fx = uniform_in(rng, config.min_local_fraction, 1.0);
            let fy = uniform_in(rng, config.min_local_fraction, 1.0);
            let sw = fx * w;
            let sh = fy * h;
            let ox0 = x0 + uniform_in(rng, 0.0, w - sw);
            let oy0 = y0 + uniform_in(rng, 0.0, h - sh);
            let mut taps = Vec::with_capacity(s * s);
            for oy in 0..s {
                for ox in 0..s {
                    let sx = ox0 + (ox as f64 + 0.5) / s as f64 * sw;
                    let sy = oy0 + (oy as f64 + 0.5) / s as f64 * sh;
                    taps.push(bilinear_taps(sx, sy, iw, ih));
                }
            }
            plans.push(AugPlan { part: crop.part, taps });
        }
    }
    plans
}

/// Apply plans to plain pixels: one (aug_size²)×3 patch per plan.
pub fn augment_plain(pixels: &Array2<f64>, plans: &[AugPlan]) -> Vec<(Array2<f64>, usize)> {
    plans
        .iter()
        .map(|plan| {
            let mut out = Array2::zeros((plan.taps.len(), 3));
            for (r, taps) in plan.taps.iter().enumerate() {
                for &(src, wgt) in taps {
                    for ch in 0..3 {
                        out[(r, ch)] += wgt * pixels[(src, ch)];
                    }
                }
            }
            (out, plan.part)
        })
        .collect()
}

/// Apply plans to an on-tape image: one patch node per plan.
pub fn augment_on_tape(tape: &mut Tape, pixels: Var, plans: &[AugPlan]) -> Vec<(Var, usize)> {
    plans.iter().map(|plan| (tape.resample(pixels, plan.taps.clone()), plan.part)).collect()
}

// ---------------------------------------------------------------------------
// Embedding loss
// ---------------------------------------------------------------------------

/// Joint image/text embedding space used by the crop-similarity loss.
pub trait EmbeddingBackend: Send {
    fn id(&self) -> String;

    /// Unit embedding of a style phrase.
    fn embed_text(&self, phrase: &str) -> Result<Vec<f64>, LossError>;

    /// Unit embedding of an RGB patch (rows × 3, row-major w×h).
    fn embed_image(
        &self,
        patch: &Array2<f64>,
        width: u32,
        height: u32,
    ) -> Result<Vec<f64>, LossError>;

    /// Tape analogue of [`EmbeddingBackend::embed_image`]; returns a 1×d unit
    /// row node.
    fn diff_embed_image(
        &self,
        tape: &mut Tape,
        patch: Var,
        width: u32,
        height: u32,
    ) -> Result<Var, LossError>;
}

/// Weight-free embedding analogue operating in gray-centered RGB space.
///
/// Text: the phrase's color word `w` embeds as unit(2·rgb(w) − 1). Images: a
/// patch embeds as unit(2·mean_rgb − 1). A pure-colored patch therefore
/// embeds exactly like its color word; mid-gray has no direction and errors.
pub struct ToyEmbedding {
    words: Vec<(String, [f64; 3])>,
}

impl Default for ToyEmbedding {
    fn default() -> Self {
        Self::new()
    }
}

impl ToyEmbedding {
    pub fn new() -> Self {
        let words = [
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
            ("white", [1.0, 1.0, 1.0]),
        ]
        .iter()
        .map(|(w, c)| (w.to_string(), *c))
        .collect();
        Self { words }
    }

    /// Extend the vocabulary (word → RGB in [0,1]³).
    pub fn register_word(&mut self, word: &str, rgb: [f64; 3]) {
        self.words.push((word.to_lowercase(), rgb));
    }

    fn lookup(&self, phrase: &str) -> Result<[f64; 3], LossError> {
        for token in phrase.split(|c: char| !c.is_alphanumeric()) {
            let t = token.to_lowercase();
            if let Some((_, rgb)) = self.words.iter().find(|(w, _)| *w == t) {
                return Ok(*rgb);
            }
        }
        Err(LossError::UnknownStyleWord {
            phrase: phrase.to_string(),
            supported: self.words.iter().map(|(w, _)| w.as_str()).collect::<Vec<_>>().join(", "),
        })
    }
}

fn unit3(v: [f64; 3], what: &str) -> Result<Vec<f64>, LossError> {
    let n = (v[0] * v[0] + v[1] * v[1] + v[2] * v[2]).sqrt();
    if n < 1e-12 {
        return Err(LossError::ZeroNormEmbedding { what: what.to_string() });
    }
    Ok(vec![v[0] / n, v[1] / n, v[2] / n])
}

impl EmbeddingBackend for ToyEmbedding {
    fn id(&self) -> String {
        "toy".to_string()
    }

    fn embed_text(&self, phrase: &str) -> Result<Vec<f64>, LossError> {
        let rgb = self.lookup(phrase)?;
        unit3(
            [2.0 * rgb[0] - 1.0, 2.0 * rgb[1] - 1.0, 2.0 * rgb[2] - 1.0],
            &format!("phrase '{phrase}'"),
        )
    }

    fn embed_image(
        &self,
        patch: &Array2<f64>,
        _width: u32,
        _height: u32,
    ) -> Result<Vec<f64>, LossError> {
        let n = patch.nrows() as f64;
        let mut mean = [0.0; 3];
        for r in 0..patch.nrows() {
            for ch in 0..3 {
                mean[ch] += patch[(r, ch)];
            }
        }
        unit3(
            [2.0 * mean[0] / n - 1.0, 2.0 * mean[1] / n - 1.0, 2.0 * mean[2] / n - 1.0],
            "image patch",
        )
    }

    fn diff_embed_image(
        &self,
        tape: &mut Tape,
        patch: Var,
        width: u32,
        height: u32,
    ) -> Result<Var, LossError> {
        let mean = tape.patch_pool(patch, width as usize, height as usize, 1, 1, false);
        let mapped = tape.affine(mean, 2.0, -1.0);
        let v = tape.value(mapped);
        let norm = (v[(0, 0)].powi(2) + v[(0, 1)].powi(2) + v[(0, 2)].powi(2)).sqrt();
        if norm < 1e-12 {
            return Err(LossError::ZeroNormEmbedding { what: "image patch".to_string() });
        }
        Ok(tape.normalize_rows(mapped))
    }
}

/// Negative mean cosine similarity between each patch's embedding and its
/// part's style-phrase embedding. Minimizing drives crops toward their style.
pub fn clip_style_loss(
    backend: &dyn EmbeddingBackend,
    patches: &[(Array2<f64>, usize)],
    patch_size: u32,
    style_phrases: &[String],
) -> Result<f64, LossError> {
    if patches.is_empty() {
        return Err(LossError::NoPatches);
    }
    let mut total = 0.0;
    for (patch, part) in patches {
        let e = backend.embed_image(patch, patch_size, patch_size)?;
        let t = backend.embed_text(&style_phrases[*part])?;
        if e.len() != t.len() {
            return Err(LossError::EmbeddingDimMismatch { image: e.len(), text: t.len() });
        }
        total += e.iter().zip(&t).map(|(a, b)| a * b).sum::<f64>();
    }
    Ok(-total / patches.len() as f64)
}

/// Tape analogue of [`clip_style_loss`] over on-tape patches.
pub fn clip_style_loss_on_tape(
    tape: &mut Tape,
    backend: &dyn EmbeddingBackend,
    patches: &[(Var, usize)],
    patch_size: u32,
    style_phrases: &[String],
) -> Result<Var, LossError> {
    if patches.is_empty() {
        return Err(LossError::NoPatches);
    }
    let mut acc: Option<Var> = None;
    for (patch, part) in patches {
        let e = backend.diff_embed_image(tape, *patch, patch_size, patch_size)?;
        let t = backend.embed_text(&style_phrases[*part])?;
        let t_node = tape.leaf(Array2::from_shape_vec((1, t.len()), t).expect("row vector"));
        let prod = tape.mul(e, t_node);
        let cos = tape.sum(prod);
        acc = Some(match acc {
            Some(a) => tape.add(a, cos),
            None => cos,
        });
    }
    let total = acc.expect("non-empty patches");
    Ok(tape.affine(total, -1.0 / patches.len() as f64, 0.0))
}
