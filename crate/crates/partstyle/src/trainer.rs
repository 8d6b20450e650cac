//! The optimization loop tying everything together.
//!
//! A run selects an anchor camera once (highest detection confidence over a
//! uniform viewpoint grid), then iterates: sample the anchor plus Gaussian
//! training views, localize part phrases on the content render of each view
//! (cached per camera), render the current styled mesh from the same cameras
//! on a tape, and minimize the scheduled loss — part-style alignment on one
//! turn, embedding crop similarity on the other — with an adaptive-moment
//! optimizer over the style field parameters.
//!
//! Determinism: all per-iteration randomness (view jitter, augmentations)
//! derives from a stream seeded by (run seed, iteration), so a run restarted
//! from a checkpoint continues exactly like the unbroken run. Checkpoints
//! carry the field, the optimizer moments, the iteration, and the anchor.

use std::collections::HashMap;
use std::fs::{self, File};
use std::io::{BufWriter, Write as IoWrite};
use std::path::{Path, PathBuf};
use std::sync::Arc;

use ndarray::Array2;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::autodiff::{Tape, Var};
use crate::field::{init_field, positional_encode, FieldConfig, FieldError, StyleField};
use crate::grounding::{
    localize, make_backend, select_anchor_view, AdapterConfig, BackendKey, GroundingBackend,
    GroundingError, SpatialLocationSet,
};
use crate::losses::{
    augment_on_tape, clip_style_loss_on_tape, crop_regions, gather_alignment_on_tape,
    part_style_loss_on_tape, plan_augmentations, CropSet, EmbeddingBackend, LossConfig, LossError,
    ToyEmbedding,
};
use crate::mesh::{apply_style, export_mesh, MeshError, PartitionedMesh, StylizedMesh};
use crate::render::{
    diff_render, make_camera, render, render_part_masks, sample_training_views, uniform_viewpoints,
    Camera, RenderError,
};

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("invalid training configuration: {0}")]
    Config(String),
    #[error("prompt error: {0}")]
    Prompt(String),
    #[error(transparent)]
    Field(#[from] FieldError),
    #[error(transparent)]
    Render(#[from] RenderError),
    #[error(transparent)]
    Grounding(#[from] GroundingError),
    #[error(transparent)]
    Loss(#[from] LossError),
    #[error(transparent)]
    Mesh(#[from] MeshError),
    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("serialization failed: {0}")]
    Serde(String),
    #[error(
        "iteration {iteration}: localization came up empty from every view; \
         diagnostic renders written to {diagnostics:?}"
    )]
    LocalizationFailed { iteration: usize, diagnostics: Vec<PathBuf> },
    #[error("checkpoint {path} has unsupported version {found}")]
    CheckpointVersion { path: PathBuf, found: u32 },
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> TrainError + '_ {
    move |source| TrainError::Io { path: path.to_path_buf(), source }
}

/// Which loss a given iteration optimizes.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LossTurn {
    PartStyle,
    Embedding,
}

impl LossTurn {
    pub fn as_str(self) -> &'static str {
        match self {
            LossTurn::PartStyle => "part-style",
            LossTurn::Embedding => "embedding",
        }
    }
}

/// Alternation pattern between the two losses.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Alternation {
    /// Even iterations part-style, odd iterations embedding.
    EveryOther,
    /// Switch loss every k iterations.
    Block(usize),
}

impl std::str::FromStr for Alternation {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let t = s.trim().to_lowercase();
        if t == "every-other" {
            return Ok(Self::EveryOther);
        }
        if let Some(k) = t.strip_prefix("block:").or_else(|| t.strip_prefix("block=")) {
            let k: usize = k.parse().map_err(|_| format!("bad block size in '{s}'"))?;
            if k == 0 {
                return Err("block size must be positive".to_string());
            }
            return Ok(Self::Block(k));
        }
        Err(format!("unknown alternation '{s}' (expected every-other or block:<k>)"))
    }
}

/// The loss scheduled for `iteration` (0-based).
pub fn schedule_loss(iteration: usize, alternation: Alternation) -> LossTurn {
    let phase = match alternation {
        Alternation::EveryOther => iteration % 2,
        Alternation::Block(k) => (iteration / k.max(1)) % 2,
    };
    if phase == 0 {
        LossTurn::PartStyle
    } else {
        LossTurn::Embedding
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub iterations: usize,
    pub learning_rate: f64,
    pub alternation: Alternation,
    /// Master seed: drives field initialization and all per-iteration noise.
    pub seed: u64,
    /// Gaussian-perturbed cameras added to the anchor each iteration.
    pub sampled_views: usize,
    /// Standard deviation of the view perturbations, radians.
    pub view_sigma: f64,
    pub snapshot_every: usize,
    pub grounding: BackendKey,
    pub embedding: EmbeddingKey,
    pub grid_stride: u32,
    /// With grounding disabled, every iteration runs the embedding loss on
    /// whole-image crops of every phrase: no part separation signal at all.
    pub grounding_enabled: bool,
    pub background: [f64; 3],
    pub image_size: u32,
    pub camera_distance: f64,
    /// Vertical field of view, radians.
    pub camera_fov: f64,
    pub anchor_azimuths: usize,
    pub anchor_elevations: Vec<f64>,
    pub loss: LossConfig,
    pub field: FieldConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            iterations: 2000,
            learning_rate: 5e-4,
            alternation: Alternation::EveryOther,
            seed: 0,
            sampled_views: 2,
            view_sigma: 15f64.to_radians(),
            snapshot_every: 100,
            grounding: BackendKey::Toy,
            embedding: EmbeddingKey::Toy,
            grid_stride: 8,
            grounding_enabled: true,
            background: [1.0, 1.0, 1.0],
            image_size: 512,
            camera_distance: 2.5,
            camera_fov: 60f64.to_radians(),
            anchor_azimuths: 8,
            anchor_elevations: vec![-std::f64::consts::FRAC_PI_6, 0.0, std::f64::consts::FRAC_PI_6],
            loss: LossConfig::default(),
            field: FieldConfig::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), TrainError> {
        if self.iterations == 0 {
            return Err(TrainError::Config("iterations must be at least 1".to_string()));
        }
        if self.snapshot_every == 0 {
            return Err(TrainError::Config("snapshot_every must be at least 1".to_string()));
        }
        if self.learning_rate.is_nan() || self.learning_rate < 0.0 {
            return Err(TrainError::Config("learning rate must be non-negative".to_string()));
        }
        if self.image_size == 0
            || self.grid_stride == 0
            || !self.image_size.is_multiple_of(self.grid_stride)
        {
            return Err(TrainError::Config(format!(
                "image size {} must be a positive multiple of grid stride {}",
                self.image_size, self.grid_stride
            )));
        }
        if let Alternation::Block(0) = self.alternation {
            return Err(TrainError::Config("block size must be positive".to_string()));
        }
        Ok(())
    }

    /// SHA-256 of the serialized configuration.
    pub fn hash(&self) -> String {
        let json = serde_json::to_string(self).expect("config serializes");
        format!("{:x}", Sha256::digest(json.as_bytes()))
    }
}

/// Embedding backend selector.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EmbeddingKey {
    Toy,
}

impl std::str::FromStr for EmbeddingKey {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_lowercase().as_str() {
            "toy" => Ok(Self::Toy),
            other => Err(format!("unknown embedding backend '{other}' (expected toy)")),
        }
    }
}

pub fn make_embedding(key: EmbeddingKey) -> Box<dyn EmbeddingBackend> {
    match key {
        EmbeddingKey::Toy => Box::new(ToyEmbedding::new()),
    }
}

// ---------------------------------------------------------------------------
// Prompt parsing
// ---------------------------------------------------------------------------

/// One "style words + part words" unit of the prompt.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PhrasalPair {
    /// The style words, e.g. "red".
    pub style: String,
    /// The part words as written, e.g. "handle".
    pub part_phrase: String,
    /// Resolved mesh part index.
    pub part: usize,
    /// The full pair as written, e.g. "red handle".
    pub full: String,
}

/// Parsed prompt: one pair per named part, ordered by part index, so phrase
/// index i everywhere refers to `pairs[i]`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PromptSpec {
    pub pairs: Vec<PhrasalPair>,
}

impl PromptSpec {
    /// Full phrasal pairs, for grounding.
    pub fn full_phrases(&self) -> Vec<String> {
        self.pairs.iter().map(|p| p.full.clone()).collect()
    }

    /// Style words only, for the embedding loss.
    pub fn style_phrases(&self) -> Vec<String> {
        self.pairs.iter().map(|p| p.style.clone()).collect()
    }
}

/// Parse "red body, blue handle" against the mesh's part names and synonyms.
/// Each comma-separated pair must end in a resolvable part phrase; the rest
/// is its style phrase. Duplicate or unknown parts are errors.
pub fn parse_prompt(text: &str, mesh: &PartitionedMesh) -> Result<PromptSpec, TrainError> {
    let known = || -> String {
        let mut names = Vec::new();
        for (i, name) in mesh.part_names().iter().enumerate() {
            names.push(name.clone());
            names.extend(mesh.part_synonyms(i).iter().cloned());
        }
        names.join(", ")
    };
    let mut pairs: Vec<PhrasalPair> = Vec::new();
    for raw in text.split(',') {
        let pair = raw.trim();
        if pair.is_empty() {
            continue;
        }
        let words: Vec<&str> = pair.split_whitespace().collect();
        // longest suffix of words resolving to a part wins
        let mut resolved = None;
        for start in 0..words.len() {
            let suffix = words[start..].join(" ");
            if let Some(part) = mesh.resolve_part(&suffix) {
                resolved = Some((start, suffix, part));
                break;
            }
        }
        let Some((start, part_phrase, part)) = resolved else {
            return Err(TrainError::Prompt(format!(
                "'{pair}' names no known part; parts and synonyms: {}",
                known()
            )));
        };
        if start == 0 {
            return Err(TrainError::Prompt(format!(
                "'{pair}' has no style words before the part phrase"
            )));
        }
        if pairs.iter().any(|p| p.part == part) {
            return Err(TrainError::Prompt(format!(
                "part '{}' appears more than once in the prompt",
                mesh.part_names()[part]
            )));
        }
        pairs.push(PhrasalPair {
            style: words[..start].join(" "),
            part_phrase,
            part,
            full: pair.to_string(),
        });
    }
    if pairs.is_empty() {
        return Err(TrainError::Prompt("prompt contains no phrasal pairs".to_string()));
    }
    pairs.sort_by_key(|p| p.part);
    Ok(PromptSpec { pairs })
}

// ---------------------------------------------------------------------------
// Optimizer
// ---------------------------------------------------------------------------

/// Adaptive-moment gradient descent state, serialized into checkpoints so a
/// resumed run continues identically.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AdamState {
    pub m: Vec<Array2<f64>>,
    pub v: Vec<Array2<f64>>,
    pub t: u64,
}

#[derive(Debug, Clone)]
pub struct Adam {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    pub state: AdamState,
}

impl Adam {
    pub fn new(learning_rate: f64, shapes: &[(usize, usize)]) -> Self {
        Self {
            learning_rate,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            state: AdamState {
                m: shapes.iter().map(|&s| Array2::zeros(s)).collect(),
                v: shapes.iter().map(|&s| Array2::zeros(s)).collect(),
                t: 0,
            },
        }
    }

    /// One update over parameters and their gradients (aligned slices).
    pub fn step(&mut self, params: &mut [&mut Array2<f64>], grads: &[Array2<f64>]) {
        assert_eq!(params.len(), grads.len(), "param/grad count mismatch");
        self.state.t += 1;
        let t = self.state.t as i32;
        let bc1 = 1.0 - self.beta1.powi(t);
        let bc2 = 1.0 - self.beta2.powi(t);
        for ((p, g), (m, v)) in
            params.iter_mut().zip(grads).zip(self.state.m.iter_mut().zip(self.state.v.iter_mut()))
        {
            azip(m, g, |m, g| *m = self.beta1 * *m + (1.0 - self.beta1) * g);
            azip(v, g, |v, g| *v = self.beta2 * *v + (1.0 - self.beta2) * g * g);
            for ((pv, mv), vv) in p.iter_mut().zip(m.iter()).zip(v.iter()) {
                let m_hat = mv / bc1;
                let v_hat = vv / bc2;
                *pv -= self.learning_rate * m_hat / (v_hat.sqrt() + self.epsilon);
            }
        }
    }
}

fn azip(dst: &mut Array2<f64>, src: &Array2<f64>, f: impl Fn(&mut f64, f64)) {
    for (d, &s) in dst.iter_mut().zip(src.iter()) {
        f(d, s);
    }
}

/// Stream seed for one iteration's randomness, derived so that iteration k's
/// draws are independent of how iterations 0..k were executed.
pub fn iteration_seed(seed: u64, iteration: usize) -> u64 {
    // splitmix64 finalizer over (seed, iteration)
    let mut z = seed ^ (iteration as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

// ---------------------------------------------------------------------------
// Checkpoints
// ---------------------------------------------------------------------------

const CHECKPOINT_VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
pub struct Checkpoint {
    pub version: u32,
    /// Next iteration to execute.
    pub iteration: usize,
    pub config_hash: String,
    pub mesh_hash: String,
    pub anchor: Camera,
    pub field: StyleField,
    pub adam: AdamState,
}

pub fn save_checkpoint(path: &Path, checkpoint: &Checkpoint) -> Result<(), TrainError> {
    let json = serde_json::to_string(checkpoint).map_err(|e| TrainError::Serde(e.to_string()))?;
    fs::write(path, json).map_err(io_err(path))
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint, TrainError> {
    let json = fs::read_to_string(path).map_err(io_err(path))?;
    let ckpt: Checkpoint =
        serde_json::from_str(&json).map_err(|e| TrainError::Serde(e.to_string()))?;
    if ckpt.version != CHECKPOINT_VERSION {
        return Err(TrainError::CheckpointVersion {
            path: path.to_path_buf(),
            found: ckpt.version,
        });
    }
    Ok(ckpt)
}

// ---------------------------------------------------------------------------
// Session
// ---------------------------------------------------------------------------

/// Everything produced by a completed run.
#[derive(Debug)]
pub struct RunArtifacts {
    pub run_dir: PathBuf,
    pub final_mesh: StylizedMesh,
    pub final_mesh_path: PathBuf,
    pub checkpoint_paths: Vec<PathBuf>,
    pub loss_log_path: PathBuf,
    pub turntable_paths: Vec<PathBuf>,
    pub metadata_path: PathBuf,
    pub anchor: Camera,
    pub final_param_hash: String,
    /// Hash of the configuration the run actually used (also in `meta.json`).
    pub config_hash: String,
}

/// Per-step outcome, mostly for tests and logging.
pub struct StepReport {
    pub iteration: usize,
    pub turn: LossTurn,
    /// (camera id, loss value) per view that contributed.
    pub per_view: Vec<(String, f64)>,
    pub total: f64,
    pub dropped_views: usize,
    /// max |vertex offset| this step, after displacement scaling.
    pub max_displacement: f64,
}

/// An in-progress training run. Owns the field, optimizer, backends, caches,
/// and the run directory's log writer.
pub struct TrainSession {
    config: TrainConfig,
    mesh: Arc<PartitionedMesh>,
    prompt: PromptSpec,
    grounding: Box<dyn GroundingBackend>,
    embedding: Box<dyn EmbeddingBackend>,
    field: StyleField,
    adam: Adam,
    iteration: usize,
    anchor: Camera,
    encoded: Array2<f64>,
    vertices_mat: Array2<f64>,
    normals_scaled: Array2<f64>,
    content_locations: HashMap<String, SpatialLocationSet>,
    run_dir: PathBuf,
    loss_writer: BufWriter<File>,
    checkpoint_paths: Vec<PathBuf>,
    config_hash: String,
}

impl TrainSession {
    /// Start a fresh run: validate, build backends, select the anchor view,
    /// initialize the field, and set up the run directory.
    pub fn new(
        config: &TrainConfig,
        mesh: &Arc<PartitionedMesh>,
        prompt_text: &str,
        out_dir: &Path,
        adapter: Option<&AdapterConfig>,
        anchor_override: Option<Camera>,
    ) -> Result<Self, TrainError> {
        config.validate()?;
        let prompt = parse_prompt(prompt_text, mesh)?;
        let grounding = make_backend(config.grounding, mesh, config.grid_stride, adapter)?;
        let embedding = make_embedding(config.embedding);

        let anchor = match anchor_override {
            Some(a) => a,
            None => {
                let candidates = uniform_viewpoints(
                    config.anchor_azimuths,
                    &config.anchor_elevations,
                    config.camera_distance,
                    config.camera_fov,
                    config.image_size,
                )?;
                select_anchor_view(
                    grounding.as_ref(),
                    mesh,
                    &prompt.full_phrases(),
                    &candidates,
                    config.background,
                )?
            }
        };
        log::info!("anchor view: {}", anchor.id());

        let mut field_config = config.field;
        field_config.seed = config.seed;
        let field = init_field(&field_config)?;
        let shapes: Vec<(usize, usize)> = field.parameters().iter().map(|p| p.dim()).collect();
        let adam = Adam::new(config.learning_rate, &shapes);

        Self::assemble(
            config.clone(),
            mesh,
            prompt,
            grounding,
            embedding,
            field,
            adam,
            0,
            anchor,
            out_dir,
        )
    }

    /// Continue a checkpointed run in a (possibly new) run directory.
    pub fn resume(
        config: &TrainConfig,
        mesh: &Arc<PartitionedMesh>,
        prompt_text: &str,
        out_dir: &Path,
        adapter: Option<&AdapterConfig>,
        checkpoint_path: &Path,
    ) -> Result<Self, TrainError> {
        config.validate()?;
        let ckpt = load_checkpoint(checkpoint_path)?;
        if ckpt.config_hash != config.hash() {
            log::warn!("resuming with a configuration different from the checkpoint's");
        }
        if ckpt.mesh_hash != mesh.content_hash() {
            return Err(TrainError::Config(
                "checkpoint was produced from a different mesh".to_string(),
            ));
        }
        let prompt = parse_prompt(prompt_text, mesh)?;
        let grounding = make_backend(config.grounding, mesh, config.grid_stride, adapter)?;
        let embedding = make_embedding(config.embedding);
        let mut adam = Adam::new(config.learning_rate, &[]);
        adam.state = ckpt.adam;
        Self::assemble(
            config.clone(),
            mesh,
            prompt,
            grounding,
            embedding,
            ckpt.field,
            adam,
            ckpt.iteration,
            ckpt.anchor,
            out_dir,
        )
    }

    #[allow(clippy::too_many_arguments)]
    fn assemble(
        config: TrainConfig,
        mesh: &Arc<PartitionedMesh>,
        prompt: PromptSpec,
        grounding: Box<dyn GroundingBackend>,
        embedding: Box<dyn EmbeddingBackend>,
        field: StyleField,
        adam: Adam,
        iteration: usize,
        anchor: Camera,
        out_dir: &Path,
    ) -> Result<Self, TrainError> {
        for sub in ["checkpoints", "renders"] {
            let dir = out_dir.join(sub);
            fs::create_dir_all(&dir).map_err(io_err(&dir))?;
        }
        let vertices_mat =
            Array2::from_shape_fn((mesh.vertices().len(), 3), |(i, k)| mesh.vertices()[i][k]);
        let mut field_config = config.field;
        field_config.seed = config.seed;
        let encoded = positional_encode(&vertices_mat, &field_config);
        let normals_scaled = Array2::from_shape_fn((mesh.vertices().len(), 3), |(i, k)| {
            mesh.vertex_normals()[i][k] * crate::mesh::DISPLACEMENT_SCALE
        });

        let config_snapshot = out_dir.join("config.toml");
        let toml = toml::to_string_pretty(&config).map_err(|e| TrainError::Serde(e.to_string()))?;
        fs::write(&config_snapshot, toml).map_err(io_err(&config_snapshot))?;

        let loss_log_path = out_dir.join("loss_log.csv");
        let fresh = !loss_log_path.exists();
        let file = fs::OpenOptions::new()
            .create(true)
            .append(true)
            .open(&loss_log_path)
            .map_err(io_err(&loss_log_path))?;
        let mut loss_writer = BufWriter::new(file);
        if fresh {
            writeln!(loss_writer, "iteration,loss_kind,value,camera")
                .map_err(io_err(&loss_log_path))?;
        }

        let config_hash = config.hash();
        Ok(Self {
            config,
            mesh: Arc::clone(mesh),
            prompt,
            grounding,
            embedding,
            field,
            adam,
            iteration,
            anchor,
            encoded,
            vertices_mat,
            normals_scaled,
            content_locations: HashMap::new(),
            run_dir: out_dir.to_path_buf(),
            loss_writer,
            checkpoint_paths: Vec::new(),
            config_hash,
        })
    }

    pub fn anchor(&self) -> Camera {
        self.anchor
    }

    pub fn iteration(&self) -> usize {
        self.iteration
    }

    pub fn field(&self) -> &StyleField {
        &self.field
    }

    /// Content-render localization for one camera, cached per camera id (the
    /// content mesh never changes, so recomputation is pure waste).
    fn content_localization(&mut self, camera: &Camera) -> Result<SpatialLocationSet, TrainError> {
        let key = camera.id();
        if let Some(hit) = self.content_locations.get(&key) {
            return Ok(hit.clone());
        }
        let image = render(self.mesh.as_ref(), camera, self.config.background);
        let set = localize(
            self.grounding.as_ref(),
            &image,
            &self.prompt.full_phrases(),
            self.config.loss.threshold,
        )?;
        self.content_locations.insert(key, set.clone());
        Ok(set)
    }

    /// Evaluate the field on tape and return (parameter leaves, colors e×3,
    /// positions e×3, max displacement magnitude).
    fn styled_geometry(&self, tape: &mut Tape) -> (crate::field::FieldVars, Var, Var, f64) {
        let vars = self.field.leaves(tape);
        let enc = tape.leaf(self.encoded.clone());
        let (colors, disps) = self.field.eval_on_tape(tape, &vars, enc);
        let disp3 = tape.repeat_col(disps, 3);
        let offsets = tape.mul_const(disp3, self.normals_scaled.clone());
        let base = tape.leaf(self.vertices_mat.clone());
        let positions = tape.add(base, offsets);
        let max_disp = tape
            .value(disps)
            .iter()
            .fold(0.0f64, |a, &d| a.max(d.abs() * crate::mesh::DISPLACEMENT_SCALE));
        (vars, colors, positions, max_disp)
    }

    /// Dump content renders of the given cameras for post-mortem inspection.
    fn write_failure_diagnostics(&self, cameras: &[Camera]) -> Vec<PathBuf> {
        let mut paths = Vec::new();
        for (k, cam) in cameras.iter().enumerate() {
            let img = render(self.mesh.as_ref(), cam, self.config.background);
            let path = self
                .run_dir
                .join("renders")
                .join(format!("failure_iter{:05}_view{k}.png", self.iteration));
            if img.save_png(&path).is_ok() {
                paths.push(path);
            }
        }
        paths
    }

    /// Execute one optimization step. Views whose localization is empty are
    /// dropped; if every view is empty the step aborts with diagnostics.
    pub fn step(&mut self) -> Result<StepReport, TrainError> {
        let iteration = self.iteration;
        let turn = if self.config.grounding_enabled {
            schedule_loss(iteration, self.config.alternation)
        } else {
            LossTurn::Embedding
        };
        let mut rng = ChaCha8Rng::seed_from_u64(iteration_seed(self.config.seed, iteration));
        let cameras = sample_training_views(
            &self.anchor,
            self.config.sampled_views,
            self.config.view_sigma,
            &mut rng,
        );

        // localize (or synthesize whole-image crops) per view
        let mut active: Vec<(Camera, Option<SpatialLocationSet>)> = Vec::new();
        let mut dropped = 0;
        if self.config.grounding_enabled {
            for cam in &cameras {
                let set = self.content_localization(cam)?;
                if set.is_empty() {
                    dropped += 1;
                    log::debug!("iteration {iteration}: view {} localized nothing", cam.id());
                } else {
                    active.push((*cam, Some(set)));
                }
            }
            if active.is_empty() {
                let diagnostics = self.write_failure_diagnostics(&cameras);
                return Err(TrainError::LocalizationFailed { iteration, diagnostics });
            }
        } else {
            active = cameras.iter().map(|c| (*c, None)).collect();
        }

        let mut tape = Tape::new();
        let (vars, colors, positions, max_displacement) = self.styled_geometry(&mut tape);

        let mut per_view: Vec<(String, f64)> = Vec::new();
        let mut total_var: Option<Var> = None;
        for (cam, locations) in &active {
            let pixels = diff_render(
                &mut tape,
                positions,
                colors,
                self.mesh.faces(),
                cam,
                self.config.background,
            );
            let view_loss = match turn {
                LossTurn::PartStyle => {
                    let locations = locations.as_ref().expect("grounded turn has locations");
                    let diff = self.grounding.diff_alignment(
                        &mut tape,
                        pixels,
                        self.config.image_size,
                        &self.prompt.full_phrases(),
                    )?;
                    let gathered = gather_alignment_on_tape(
                        &mut tape,
                        diff.scores,
                        diff.grid_w,
                        diff.grid_h,
                        locations,
                    )?;
                    part_style_loss_on_tape(&mut tape, gathered, &self.config.loss)
                }
                LossTurn::Embedding => {
                    let crops = match locations {
                        Some(locations) => crop_regions(
                            self.config.image_size,
                            self.config.image_size,
                            locations,
                            self.config.loss.crop_pad,
                        ),
                        // ungrounded ablation: every phrase sees the whole image
                        None => CropSet {
                            crops: (0..self.prompt.pairs.len())
                                .map(|part| crate::losses::Crop {
                                    part,
                                    x0: 0,
                                    y0: 0,
                                    x1: self.config.image_size,
                                    y1: self.config.image_size,
                                })
                                .collect(),
                            width: self.config.image_size,
                            height: self.config.image_size,
                        },
                    };
                    let plans = plan_augmentations(&crops, &self.config.loss, &mut rng);
                    let patches = augment_on_tape(&mut tape, pixels, &plans);
                    clip_style_loss_on_tape(
                        &mut tape,
                        self.embedding.as_ref(),
                        &patches,
                        self.config.loss.aug_size,
                        &self.prompt.style_phrases(),
                    )?
                }
            };
            per_view.push((cam.id(), tape.scalar_value(view_loss)));
            total_var = Some(match total_var {
                Some(acc) => tape.add(acc, view_loss),
                None => view_loss,
            });
        }

        let total_node = total_var.expect("at least one active view");
        let total = tape.scalar_value(total_node);
        let grads = tape.backward(total_node);

        // pull gradients in parameter order; untouched parameters get zeros
        let grad_mats: Vec<Array2<f64>> = vars
            .all()
            .iter()
            .zip(self.field.parameters())
            .map(|(&var, param)| match grads.of(var) {
                Some(g) => g.clone(),
                None => Array2::zeros(param.dim()),
            })
            .collect();
        {
            let mut params = self.field.parameters_mut();
            self.adam.step(&mut params, &grad_mats);
        }

        for (camera_id, value) in &per_view {
            writeln!(self.loss_writer, "{},{},{},{}", iteration, turn.as_str(), value, camera_id)
                .map_err(io_err(&self.run_dir.join("loss_log.csv")))?;
        }

        self.iteration += 1;
        Ok(StepReport {
            iteration,
            turn,
            per_view,
            total,
            dropped_views: dropped,
            max_displacement,
        })
    }

    /// The styled mesh produced by the current field parameters.
    pub fn current_mesh(&self) -> Result<StylizedMesh, TrainError> {
        let (colors, disps) = self.field.evaluate(&self.vertices_mat);
        Ok(apply_style(&self.mesh, &colors, &disps)?)
    }

    fn snapshot(&mut self) -> Result<(), TrainError> {
        let path =
            self.run_dir.join("checkpoints").join(format!("ckpt_{:05}.json", self.iteration));
        let ckpt = Checkpoint {
            version: CHECKPOINT_VERSION,
            iteration: self.iteration,
            config_hash: self.config_hash.clone(),
            mesh_hash: self.mesh.content_hash(),
            anchor: self.anchor,
            field: self.field.clone(),
            adam: self.adam.state.clone(),
        };
        save_checkpoint(&path, &ckpt)?;
        self.checkpoint_paths.push(path);
        self.loss_writer.flush().map_err(io_err(&self.run_dir.join("loss_log.csv")))?;

        let styled = self.current_mesh()?;
        let img = render(&styled, &self.anchor, self.config.background);
        let render_path =
            self.run_dir.join("renders").join(format!("iter_{:05}.png", self.iteration));
        img.save_png(&render_path)?;
        self.log_silhouette_iou(&img);
        Ok(())
    }

    /// Diagnostic: how much the displaced silhouette drifted from the content
    /// silhouette in the anchor view.
    fn log_silhouette_iou(&self, styled_img: &crate::render::RenderedImage) {
        let masks = render_part_masks(self.mesh.as_ref(), &self.anchor);
        let bg = self.config.background;
        let mut inter = 0usize;
        let mut union = 0usize;
        for y in 0..styled_img.height {
            for x in 0..styled_img.width {
                let styled_fg = styled_img.pixel(x, y) != bg;
                let content_fg = masks.part_at(x, y) >= 0;
                if styled_fg || content_fg {
                    union += 1;
                }
                if styled_fg && content_fg {
                    inter += 1;
                }
            }
        }
        let iou = if union == 0 { 1.0 } else { inter as f64 / union as f64 };
        log::info!(
            "iteration {}: content/styled silhouette IoU {:.4} at the anchor view",
            self.iteration,
            iou
        );
    }

    /// Run the remaining iterations and produce the final artifacts.
    pub fn run_to_completion(mut self) -> Result<RunArtifacts, TrainError> {
        let mut last_snapshot = None;
        while self.iteration < self.config.iterations {
            let report = self.step()?;
            if report.dropped_views > 0 {
                log::debug!(
                    "iteration {}: dropped {} empty view(s)",
                    report.iteration,
                    report.dropped_views
                );
            }
            if self.iteration.is_multiple_of(self.config.snapshot_every) {
                self.snapshot()?;
                last_snapshot = Some(self.iteration);
            }
        }
        if last_snapshot != Some(self.iteration) {
            self.snapshot()?;
        }
        self.finish()
    }

    fn finish(mut self) -> Result<RunArtifacts, TrainError> {
        self.loss_writer.flush().map_err(io_err(&self.run_dir.join("loss_log.csv")))?;
        let final_mesh = self.current_mesh()?;
        let final_mesh_path = self.run_dir.join("final_mesh.ply");
        export_mesh(&final_mesh, &final_mesh_path)?;

        let mut turntable_paths = Vec::new();
        for k in 0..8 {
            let az = std::f64::consts::TAU * k as f64 / 8.0;
            let cam = make_camera(
                az,
                0.0,
                self.config.camera_distance,
                self.config.camera_fov,
                self.config.image_size,
            )?;
            let img = render(&final_mesh, &cam, self.config.background);
            let path = self.run_dir.join("renders").join(format!("turntable_{k:02}.png"));
            img.save_png(&path)?;
            turntable_paths.push(path);
        }

        let final_param_hash = self.field.param_hash();
        let metadata_path = self.run_dir.join("meta.json");
        let meta = serde_json::json!({
            "config_hash": self.config_hash,
            "mesh_hash": self.mesh.content_hash(),
            "seed": self.config.seed,
            "iterations_completed": self.iteration,
            "anchor": self.anchor,
            "grounding_backend": self.grounding.id(),
            "embedding_backend": self.embedding.id(),
            "final_param_hash": final_param_hash,
            "prompt": self.prompt,
        });
        fs::write(&metadata_path, serde_json::to_string_pretty(&meta).expect("meta serializes"))
            .map_err(io_err(&metadata_path))?;

        Ok(RunArtifacts {
            loss_log_path: self.run_dir.join("loss_log.csv"),
            run_dir: self.run_dir,
            final_mesh,
            final_mesh_path,
            checkpoint_paths: self.checkpoint_paths,
            turntable_paths,
            metadata_path,
            anchor: self.anchor,
            final_param_hash,
            config_hash: self.config_hash,
        })
    }
}

/// Run a full stylization: anchor selection, `config.iterations` steps,
/// checkpoints, and final artifacts under `out_dir`.
pub fn run(
    config: &TrainConfig,
    mesh: &Arc<PartitionedMesh>,
    prompt_text: &str,
    out_dir: &Path,
    adapter: Option<&AdapterConfig>,
) -> Result<RunArtifacts, TrainError> {
    run_with_anchor(config, mesh, prompt_text, out_dir, adapter, None)
}

/// [`run`] with a pre-selected anchor camera (used by the consistency study,
/// which shares one anchor across seeds).
pub fn run_with_anchor(
    config: &TrainConfig,
    mesh: &Arc<PartitionedMesh>,
    prompt_text: &str,
    out_dir: &Path,
    adapter: Option<&AdapterConfig>,
    anchor: Option<Camera>,
) -> Result<RunArtifacts, TrainError> {
    TrainSession::new(config, mesh, prompt_text, out_dir, adapter, anchor)?.run_to_completion()
}

/// Continue a checkpointed run to completion under a new run directory.
pub fn resume(
    config: &TrainConfig,
    mesh: &Arc<PartitionedMesh>,
    prompt_text: &str,
    out_dir: &Path,
    adapter: Option<&AdapterConfig>,
    checkpoint: &Path,
) -> Result<RunArtifacts, TrainError> {
    TrainSession::resume(config, mesh, prompt_text, out_dir, adapter, checkpoint)?
        .run_to_completion()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fixtures;

    fn test_config() -> TrainConfig {
        TrainConfig {
            iterations: 6,
            learning_rate: 1e-2,
            seed: 11,
            snapshot_every: 3,
            image_size: 64,
            grid_stride: 8,
            anchor_azimuths: 4,
            anchor_elevations: vec![0.0],
            loss: LossConfig {
                aug_size: 16,
                n_global_augs: 2,
                n_local_augs: 2,
                ..LossConfig::default()
            },
            field: FieldConfig {
                hidden_width: 16,
                num_frequencies: 2,
                depth: 2,
                ..FieldConfig::default()
            },
            ..TrainConfig::default()
        }
    }

    #[test]
    fn schedule_alternates_and_blocks() {
        let turns: Vec<LossTurn> =
            (0..4).map(|i| schedule_loss(i, Alternation::EveryOther)).collect();
        assert_eq!(
            turns,
            vec![
                LossTurn::PartStyle,
                LossTurn::Embedding,
                LossTurn::PartStyle,
                LossTurn::Embedding
            ]
        );
        for i in 0..10 {
            assert_eq!(
                schedule_loss(i, Alternation::Block(1)),
                schedule_loss(i, Alternation::EveryOther)
            );
        }
        for i in 0..2000 {
            assert_eq!(schedule_loss(i, Alternation::Block(2000)), LossTurn::PartStyle);
        }
        assert_eq!(schedule_loss(5, Alternation::Block(3)), LossTurn::Embedding);
        assert_eq!(schedule_loss(6, Alternation::Block(3)), LossTurn::PartStyle);
    }

    #[test]
    fn alternation_parses_from_strings() {
        assert_eq!("every-other".parse::<Alternation>().unwrap(), Alternation::EveryOther);
        assert_eq!("block:5".parse::<Alternation>().unwrap(), Alternation::Block(5));
        assert!("block:0".parse::<Alternation>().is_err());
        assert!("sometimes".parse::<Alternation>().is_err());
    }

    #[test]
    fn prompt_parsing_resolves_parts_and_rejects_bad_pairs() {
        let mesh = fixtures::lamp(12);
        let spec = parse_prompt("wood base, gold tube, fur shade", &mesh).unwrap();
        assert_eq!(spec.pairs.len(), 3);
        assert_eq!(spec.style_phrases(), vec!["wood", "gold", "fur"]);
        assert_eq!(spec.pairs[0].part_phrase, "base");
        assert_eq!(spec.pairs.iter().map(|p| p.part).collect::<Vec<_>>(), vec![0, 1, 2]);

        let dumbbell = fixtures::dumbbell(4, 6);
        let by_synonym = parse_prompt("red torso, blue grip", &dumbbell).unwrap();
        assert_eq!(by_synonym.pairs[0].part, 0);
        assert_eq!(by_synonym.pairs[1].part, 1);
        assert_eq!(by_synonym.pairs[1].full, "blue grip");

        assert!(matches!(parse_prompt("shiny thing", &dumbbell), Err(TrainError::Prompt(_))));
        assert!(matches!(
            parse_prompt("red body, blue body", &dumbbell),
            Err(TrainError::Prompt(_))
        ));
        assert!(matches!(parse_prompt("body", &dumbbell), Err(TrainError::Prompt(_))));
        assert!(matches!(parse_prompt("  ", &dumbbell), Err(TrainError::Prompt(_))));
    }

    #[test]
    fn iteration_seeds_differ_and_reproduce() {
        assert_eq!(iteration_seed(7, 3), iteration_seed(7, 3));
        assert_ne!(iteration_seed(7, 3), iteration_seed(7, 4));
        assert_ne!(iteration_seed(7, 3), iteration_seed(8, 3));
    }

    #[test]
    fn adam_with_zero_learning_rate_keeps_parameters() {
        let mut p = Array2::from_elem((2, 2), 1.5);
        let g = Array2::from_elem((2, 2), 0.3);
        let mut adam = Adam::new(0.0, &[(2, 2)]);
        adam.step(&mut [&mut p], &[g]);
        assert_eq!(p, Array2::from_elem((2, 2), 1.5));
    }

    #[test]
    fn adam_moves_against_the_gradient() {
        let mut p = Array2::from_elem((1, 2), 1.0);
        let g = Array2::from_shape_vec((1, 2), vec![0.5, -0.5]).unwrap();
        let mut adam = Adam::new(0.1, &[(1, 2)]);
        adam.step(&mut [&mut p], &[g]);
        assert!(p[(0, 0)] < 1.0);
        assert!(p[(0, 1)] > 1.0);
    }

    #[test]
    fn short_run_produces_artifacts_and_per_view_log_rows() {
        let mesh = Arc::new(fixtures::dumbbell(5, 8));
        let dir = tempfile::tempdir().unwrap();
        let mut config = test_config();
        config.iterations = 1;
        let artifacts = run(&config, &mesh, "red body, blue handle", dir.path(), None).unwrap();
        assert!(artifacts.final_mesh_path.exists());
        assert!(artifacts.metadata_path.exists());
        assert_eq!(artifacts.turntable_paths.len(), 8);
        assert!(!artifacts.checkpoint_paths.is_empty());
        let log = std::fs::read_to_string(dir.path().join("loss_log.csv")).unwrap();
        let rows: Vec<&str> = log.lines().collect();
        assert_eq!(rows[0], "iteration,loss_kind,value,camera");
        // one row per active view at iteration 0
        let data_rows = rows.len() - 1;
        assert!((1..=3).contains(&data_rows), "got {data_rows} rows");
        for row in &rows[1..] {
            assert!(row.starts_with("0,part-style,"), "row {row}");
        }
    }

    #[test]
    fn fixed_seed_reproduces_the_final_mesh_hash() {
        let mesh = Arc::new(fixtures::dumbbell(4, 6));
        let config = test_config();
        let d1 = tempfile::tempdir().unwrap();
        let d2 = tempfile::tempdir().unwrap();
        let a = run(&config, &mesh, "red body, blue handle", d1.path(), None).unwrap();
        let b = run(&config, &mesh, "red body, blue handle", d2.path(), None).unwrap();
        assert_eq!(a.final_param_hash, b.final_param_hash);
        assert_eq!(a.anchor, b.anchor);
    }

    #[test]
    fn zero_learning_rate_leaves_the_field_unchanged() {
        let mesh = Arc::new(fixtures::dumbbell(4, 6));
        let dir = tempfile::tempdir().unwrap();
        let mut config = test_config();
        config.learning_rate = 0.0;
        config.iterations = 2;
        let mut session =
            TrainSession::new(&config, &mesh, "red body, blue handle", dir.path(), None, None)
                .unwrap();
        let before = session.field().param_hash();
        session.step().unwrap();
        session.step().unwrap();
        assert_eq!(session.field().param_hash(), before);
    }

    #[test]
    fn resume_matches_an_unbroken_run_exactly() {
        let mesh = Arc::new(fixtures::dumbbell(4, 6));
        let prompt = "red body, blue handle";
        let mut config = test_config();
        config.iterations = 6;
        config.snapshot_every = 3;

        let full_dir = tempfile::tempdir().unwrap();
        let full = run(&config, &mesh, prompt, full_dir.path(), None).unwrap();

        let part_dir = tempfile::tempdir().unwrap();
        let mut short = config.clone();
        short.iterations = 3;
        let halted = run(&short, &mesh, prompt, part_dir.path(), None).unwrap();
        let ckpt = halted
            .checkpoint_paths
            .iter()
            .find(|p| p.file_name().unwrap().to_str().unwrap().contains("00003"))
            .expect("checkpoint at iteration 3");

        let resumed_dir = tempfile::tempdir().unwrap();
        let resumed = resume(&config, &mesh, prompt, resumed_dir.path(), None, ckpt).unwrap();
        assert_eq!(resumed.final_param_hash, full.final_param_hash);
    }

    #[test]
    fn training_against_the_oracle_backend_fails_loudly() {
        let mesh = Arc::new(fixtures::dumbbell(4, 6));
        let dir = tempfile::tempdir().unwrap();
        let mut config = test_config();
        config.grounding = BackendKey::Oracle;
        config.iterations = 1;
        let err = run(&config, &mesh, "red body, blue handle", dir.path(), None).unwrap_err();
        assert!(matches!(err, TrainError::Grounding(GroundingError::NotDifferentiable { .. })));
    }

    #[test]
    fn part_style_loss_trends_down_over_early_iterations() {
        let mesh = Arc::new(fixtures::sphere(5, 8));
        let dir = tempfile::tempdir().unwrap();
        let mut config = test_config();
        config.learning_rate = 2e-3;
        config.iterations = 50;
        config.alternation = Alternation::Block(50); // part-style only
        config.snapshot_every = 50;
        let mut session =
            TrainSession::new(&config, &mesh, "red body", dir.path(), None, None).unwrap();
        let mut anchor_losses = Vec::new();
        for _ in 0..50 {
            let report = session.step().unwrap();
            anchor_losses.push(report.per_view[0].1);
            assert!(report.max_displacement <= crate::mesh::DISPLACEMENT_SCALE + 1e-12);
        }
        let regressions = anchor_losses.windows(2).filter(|w| w[1] > w[0] + 1e-12).count();
        assert!(regressions <= 5, "{regressions} non-monotone steps: {anchor_losses:?}");
        assert!(anchor_losses.last().unwrap() < anchor_losses.first().unwrap());
    }
}
