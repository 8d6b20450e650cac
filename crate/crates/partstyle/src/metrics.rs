//! Image comparison metrics and the multi-seed consistency study.
//!
//! The study protocol: run the same stylization under different seeds, render
//! every final mesh from one shared anchor camera (selected once, on the
//! first run), and report pairwise MSE / PSNR / SSIM — plus a perceptual
//! distance when a learned backend is plugged in — as mean ± standard
//! deviation over all run pairs.

use std::collections::BTreeMap;
use std::fmt::Write as FmtWrite;
use std::fs;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::mesh::PartitionedMesh;
use crate::render::{render, Camera, RenderError, RenderedImage};
use crate::trainer::{run_with_anchor, TrainConfig, TrainError};

/// PSNR reported for identical images (infinite in the limit).
pub const PSNR_CAP: f64 = 100.0;

const SSIM_WINDOW: usize = 11;
const SSIM_SIGMA: f64 = 1.5;
const SSIM_K1: f64 = 0.01;
const SSIM_K2: f64 = 0.03;

#[derive(Debug, Error)]
pub enum MetricsError {
    #[error("image dimensions differ: {a_width}x{a_height} vs {b_width}x{b_height}")]
    DimensionMismatch { a_width: u32, a_height: u32, b_width: u32, b_height: u32 },
    #[error(
        "images are {width}x{height}, smaller than the {SSIM_WINDOW}x{SSIM_WINDOW} ssim window"
    )]
    TooSmallForSsim { width: u32, height: u32 },
    #[error("consistency study needs at least 2 runs, got {got}")]
    TooFewRuns { got: usize },
    #[error("only {succeeded} of {total} runs succeeded; at least 2 are needed for pairs")]
    InsufficientRuns { succeeded: usize, total: usize },
    #[error(transparent)]
    Render(#[from] RenderError),
    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("serialization failed: {0}")]
    Serde(String),
    #[error("study configuration error: {0}")]
    Study(String),
    #[error("perceptual backend failed: {0}")]
    Perceptual(String),
}

/// Learned perceptual distance plug-in. None is built in; the study runs
/// without one and flags the metric as unavailable.
pub trait PerceptualBackend: Send {
    fn id(&self) -> String;
    fn distance(&self, a: &RenderedImage, b: &RenderedImage) -> Result<f64, MetricsError>;
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ImageMetrics {
    pub mse: f64,
    pub psnr: f64,
    pub ssim: f64,
    /// Present only when a perceptual backend was supplied.
    pub perceptual: Option<f64>,
}

/// Mean squared error over all pixels and channels.
pub fn mse(a: &RenderedImage, b: &RenderedImage) -> Result<f64, MetricsError> {
    check_dims(a, b)?;
    let n = a.pixels.len() as f64;
    let sum: f64 = a.pixels.iter().zip(b.pixels.iter()).map(|(x, y)| (x - y) * (x - y)).sum();
    Ok(sum / n)
}

/// 10·log10(1/mse) on unit-range images, capped at [`PSNR_CAP`].
pub fn psnr_from_mse(mse: f64) -> f64 {
    if mse <= 0.0 {
        return PSNR_CAP;
    }
    (10.0 * (1.0 / mse).log10()).min(PSNR_CAP)
}

/// Windowed structural similarity: 11×11 Gaussian weights (sigma 1.5),
/// stabilizers (0.01·L)² and (0.03·L)² with L = 1, averaged over the valid
/// window positions of each channel, then over channels.
pub fn ssim(a: &RenderedImage, b: &RenderedImage) -> Result<f64, MetricsError> {
    check_dims(a, b)?;
    let (w, h) = (a.width as usize, a.height as usize);
    if w < SSIM_WINDOW || h < SSIM_WINDOW {
        return Err(MetricsError::TooSmallForSsim { width: a.width, height: a.height });
    }
    let kernel = gaussian_kernel();
    let c1 = (SSIM_K1 * 1.0f64).powi(2);
    let c2 = (SSIM_K2 * 1.0f64).powi(2);

    let mut channel_means = [0.0f64; 3];
    for (ch, channel_mean) in channel_means.iter_mut().enumerate() {
        let mut total = 0.0;
        let mut windows = 0usize;
        for wy in 0..=(h - SSIM_WINDOW) {
            for wx in 0..=(w - SSIM_WINDOW) {
                let (mut ma, mut mb) = (0.0, 0.0);
                let (mut saa, mut sbb, mut sab) = (0.0, 0.0, 0.0);
                for ky in 0..SSIM_WINDOW {
                    for kx in 0..SSIM_WINDOW {
                        let weight = kernel[ky * SSIM_WINDOW + kx];
                        let idx = (wy + ky) * w + wx + kx;
                        let va = a.pixels[(idx, ch)];
                        let vb = b.pixels[(idx, ch)];
                        ma += weight * va;
                        mb += weight * vb;
                        saa += weight * va * va;
                        sbb += weight * vb * vb;
                        // grouped so the argument order cannot change the
                        // rounding: ssim(a,b) is bitwise ssim(b,a)
                        sab += weight * (va * vb);
                    }
                }
                let var_a = saa - ma * ma;
                let var_b = sbb - mb * mb;
                let cov = sab - ma * mb;
                let s = ((2.0 * ma * mb + c1) * (2.0 * cov + c2))
                    / ((ma * ma + mb * mb + c1) * (var_a + var_b + c2));
                total += s;
                windows += 1;
            }
        }
        *channel_mean = total / windows as f64;
    }
    Ok((channel_means[0] + channel_means[1] + channel_means[2]) / 3.0)
}

fn gaussian_kernel() -> Vec<f64> {
    let half = (SSIM_WINDOW / 2) as f64;
    let mut k = Vec::with_capacity(SSIM_WINDOW * SSIM_WINDOW);
    for y in 0..SSIM_WINDOW {
        for x in 0..SSIM_WINDOW {
            let dx = x as f64 - half;
            let dy = y as f64 - half;
            k.push((-(dx * dx + dy * dy) / (2.0 * SSIM_SIGMA * SSIM_SIGMA)).exp());
        }
    }
    let sum: f64 = k.iter().sum();
    for v in &mut k {
        *v /= sum;
    }
    k
}

fn check_dims(a: &RenderedImage, b: &RenderedImage) -> Result<(), MetricsError> {
    if a.width != b.width || a.height != b.height {
        return Err(MetricsError::DimensionMismatch {
            a_width: a.width,
            a_height: a.height,
            b_width: b.width,
            b_height: b.height,
        });
    }
    Ok(())
}

/// All metrics between two equally sized images; the perceptual entry is
/// filled only when a backend is supplied.
pub fn image_metrics(
    a: &RenderedImage,
    b: &RenderedImage,
    perceptual: Option<&dyn PerceptualBackend>,
) -> Result<ImageMetrics, MetricsError> {
    let mse_v = mse(a, b)?;
    let ssim_v = ssim(a, b)?;
    let perceptual_v = match perceptual {
        Some(backend) => Some(backend.distance(a, b)?),
        None => None,
    };
    Ok(ImageMetrics {
        mse: mse_v,
        psnr: psnr_from_mse(mse_v),
        ssim: ssim_v,
        perceptual: perceptual_v,
    })
}

// ---------------------------------------------------------------------------
// Consistency study
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RunEntry {
    pub seed: u64,
    pub run_dir: PathBuf,
    /// None when the run succeeded, else the error it failed with.
    pub failure: Option<String>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MetricSummary {
    pub mean: f64,
    /// Population standard deviation over the pairs.
    pub std: f64,
    pub values: Vec<f64>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ConsistencyReport {
    pub runs: Vec<RunEntry>,
    /// Index pairs (into `runs`) that produced metrics; failed runs appear in
    /// no pair.
    pub pairs: Vec<(usize, usize)>,
    /// Keyed mse / psnr / ssim (+ perceptual when available).
    pub metrics: BTreeMap<String, MetricSummary>,
    pub anchor: Camera,
    pub perceptual_available: bool,
}

impl ConsistencyReport {
    /// Human-readable summary table.
    pub fn table(&self) -> String {
        let mut out = String::new();
        let ok = self.runs.iter().filter(|r| r.failure.is_none()).count();
        writeln!(
            out,
            "consistency study: {} runs ({} ok), {} pairs",
            self.runs.len(),
            ok,
            self.pairs.len()
        )
        .expect("string write");
        writeln!(out, "{:<12} {:>12} {:>12}", "metric", "mean", "std").expect("string write");
        for (name, s) in &self.metrics {
            writeln!(out, "{:<12} {:>12.6} {:>12.6}", name, s.mean, s.std).expect("string write");
        }
        if !self.perceptual_available {
            writeln!(out, "perceptual metric unavailable: no backend configured")
                .expect("string write");
        }
        for r in &self.runs {
            if let Some(f) = &r.failure {
                writeln!(out, "excluded seed {}: {}", r.seed, f).expect("string write");
            }
        }
        out
    }
}

/// Run the same stylization once per seed and compare the final meshes
/// rendered from a shared anchor view, pairwise.
///
/// The anchor is selected by the first run and reused by every later run, so
/// differences come from optimization randomness alone. Failed runs are
/// recorded and excluded from the pairing; fewer than two survivors is an
/// error. The report lands in `out_dir/consistency_report.json` next to the
/// individual run directories.
pub fn consistency_study(
    config: &TrainConfig,
    mesh: &Arc<PartitionedMesh>,
    prompt: &str,
    seeds: &[u64],
    out_dir: &Path,
    perceptual: Option<&dyn PerceptualBackend>,
) -> Result<ConsistencyReport, MetricsError> {
    if seeds.len() < 2 {
        return Err(MetricsError::TooFewRuns { got: seeds.len() });
    }

    let mut runs = Vec::with_capacity(seeds.len());
    let mut images: Vec<Option<RenderedImage>> = Vec::with_capacity(seeds.len());
    let mut anchor: Option<Camera> = None;
    for (i, &seed) in seeds.iter().enumerate() {
        let mut run_config = config.clone();
        run_config.seed = seed;
        let run_dir = out_dir.join(format!("run_{i:02}_seed{seed}"));
        match run_with_anchor(&run_config, mesh, prompt, &run_dir, None, anchor) {
            Ok(artifacts) => {
                anchor.get_or_insert(artifacts.anchor);
                let image = render(&artifacts.final_mesh, &artifacts.anchor, config.background);
                images.push(Some(image));
                runs.push(RunEntry { seed, run_dir, failure: None });
            }
            Err(e @ TrainError::Config(_)) | Err(e @ TrainError::Prompt(_)) => {
                // a bad configuration fails every run identically; surface it
                return Err(MetricsError::Study(e.to_string()));
            }
            Err(e) => {
                log::warn!("seed {seed} run failed: {e}");
                images.push(None);
                runs.push(RunEntry { seed, run_dir, failure: Some(e.to_string()) });
            }
        }
    }

    let ok_indices: Vec<usize> = (0..runs.len()).filter(|&i| runs[i].failure.is_none()).collect();
    if ok_indices.len() < 2 {
        return Err(MetricsError::InsufficientRuns {
            succeeded: ok_indices.len(),
            total: runs.len(),
        });
    }

    let mut pairs = Vec::new();
    let mut values: BTreeMap<String, Vec<f64>> = BTreeMap::new();
    for (a, &i) in ok_indices.iter().enumerate() {
        for &j in &ok_indices[a + 1..] {
            let (img_i, img_j) = (
                images[i].as_ref().expect("ok run has image"),
                images[j].as_ref().expect("ok run has image"),
            );
            let m = image_metrics(img_i, img_j, perceptual)?;
            values.entry("mse".into()).or_default().push(m.mse);
            values.entry("psnr".into()).or_default().push(m.psnr);
            values.entry("ssim".into()).or_default().push(m.ssim);
            if let Some(p) = m.perceptual {
                values.entry("perceptual".into()).or_default().push(p);
            }
            pairs.push((i, j));
        }
    }

    let metrics = values
        .into_iter()
        .map(|(name, vals)| {
            let mean = vals.iter().sum::<f64>() / vals.len() as f64;
            let var = vals.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / vals.len() as f64;
            (name, MetricSummary { mean, std: var.sqrt(), values: vals })
        })
        .collect();

    let report = ConsistencyReport {
        runs,
        pairs,
        metrics,
        anchor: anchor.expect("at least one successful run"),
        perceptual_available: perceptual.is_some(),
    };
    let report_path = out_dir.join("consistency_report.json");
    let json =
        serde_json::to_string_pretty(&report).map_err(|e| MetricsError::Serde(e.to_string()))?;
    fs::write(&report_path, json)
        .map_err(|source| MetricsError::Io { path: report_path, source })?;
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::field::FieldConfig;
    use crate::fixtures;
    use crate::losses::LossConfig;
    use ndarray::Array2;

    fn constant_image(size: u32, value: f64) -> RenderedImage {
        RenderedImage {
            pixels: Array2::from_elem(((size * size) as usize, 3), value),
            width: size,
            height: size,
            camera: None,
            differentiable: false,
        }
    }

    fn gradient_image(size: u32) -> RenderedImage {
        let mut img = constant_image(size, 0.0);
        for y in 0..size {
            for x in 0..size {
                let v = (x + y) as f64 / (2 * size) as f64;
                for ch in 0..3 {
                    img.pixels[((y * size + x) as usize, ch)] = v + 0.01 * ch as f64;
                }
            }
        }
        img
    }

    #[test]
    fn identical_images_hit_the_fixed_points() {
        let img = gradient_image(24);
        let m = image_metrics(&img, &img, None).unwrap();
        assert_eq!(m.mse, 0.0);
        assert_eq!(m.psnr, PSNR_CAP);
        assert!((m.ssim - 1.0).abs() < 1e-12);
        assert!(m.perceptual.is_none());
    }

    #[test]
    fn constant_inversion_has_unit_mse_and_zero_psnr() {
        let black = constant_image(16, 0.0);
        let white = constant_image(16, 1.0);
        let m = image_metrics(&black, &white, None).unwrap();
        assert_eq!(m.mse, 1.0);
        assert_eq!(m.psnr, 0.0);
        assert!(m.ssim < 0.1, "dissimilar constants score near zero, got {}", m.ssim);
    }

    #[test]
    fn ssim_is_symmetric_and_bounded() {
        let a = gradient_image(20);
        let mut b = gradient_image(20);
        for v in b.pixels.iter_mut() {
            *v = (*v * 1.3 + 0.05).min(1.0);
        }
        let ab = ssim(&a, &b).unwrap();
        let ba = ssim(&b, &a).unwrap();
        assert_eq!(ab, ba);
        assert!((-1.0..=1.0).contains(&ab));
    }

    #[test]
    fn psnr_decreases_as_mse_grows() {
        let mut last = f64::INFINITY;
        for mse in [0.0, 1e-6, 1e-4, 1e-2, 0.5, 1.0] {
            let p = psnr_from_mse(mse);
            assert!(p <= last, "psnr must be non-increasing in mse");
            last = p;
        }
        assert_eq!(psnr_from_mse(0.0), PSNR_CAP);
    }

    #[test]
    fn mismatched_and_tiny_images_error() {
        let a = constant_image(16, 0.5);
        let b = constant_image(17, 0.5);
        assert!(matches!(mse(&a, &b), Err(MetricsError::DimensionMismatch { .. })));
        let tiny = constant_image(8, 0.5);
        assert!(matches!(ssim(&tiny, &tiny), Err(MetricsError::TooSmallForSsim { .. })));
    }

    fn study_config() -> TrainConfig {
        TrainConfig {
            iterations: 2,
            learning_rate: 1e-2,
            snapshot_every: 2,
            image_size: 32,
            grid_stride: 8,
            anchor_azimuths: 4,
            anchor_elevations: vec![0.0],
            sampled_views: 1,
            loss: LossConfig {
                aug_size: 8,
                n_global_augs: 1,
                n_local_augs: 1,
                ..LossConfig::default()
            },
            field: FieldConfig {
                hidden_width: 8,
                num_frequencies: 1,
                depth: 1,
                ..FieldConfig::default()
            },
            ..TrainConfig::default()
        }
    }

    #[test]
    fn study_pairs_all_successful_runs() {
        let mesh = Arc::new(fixtures::dumbbell(4, 6));
        let dir = tempfile::tempdir().unwrap();
        let report = consistency_study(
            &study_config(),
            &mesh,
            "red body, blue handle",
            &[1, 2, 3],
            dir.path(),
            None,
        )
        .unwrap();
        assert_eq!(report.pairs.len(), 3);
        assert_eq!(report.runs.len(), 3);
        assert!(report.runs.iter().all(|r| r.failure.is_none()));
        assert!(report.metrics.contains_key("mse"));
        assert!(!report.metrics.contains_key("perceptual"));
        assert!(!report.perceptual_available);
        assert!(dir.path().join("consistency_report.json").exists());
        let table = report.table();
        assert!(table.contains("3 pairs"));
        assert!(table.contains("perceptual metric unavailable"));
    }

    #[test]
    fn identical_seeds_are_pixel_identical() {
        let mesh = Arc::new(fixtures::dumbbell(4, 6));
        let dir = tempfile::tempdir().unwrap();
        let report = consistency_study(
            &study_config(),
            &mesh,
            "red body, blue handle",
            &[9, 9],
            dir.path(),
            None,
        )
        .unwrap();
        assert_eq!(report.pairs.len(), 1);
        assert_eq!(report.metrics["mse"].values, vec![0.0]);
        assert_eq!(report.metrics["psnr"].mean, PSNR_CAP);
    }

    #[test]
    fn study_needs_at_least_two_seeds() {
        let mesh = Arc::new(fixtures::dumbbell(4, 6));
        let dir = tempfile::tempdir().unwrap();
        let err = consistency_study(
            &study_config(),
            &mesh,
            "red body, blue handle",
            &[1],
            dir.path(),
            None,
        )
        .unwrap_err();
        assert!(matches!(err, MetricsError::TooFewRuns { got: 1 }));
    }

    #[test]
    fn all_failed_runs_is_an_error_with_counts() {
        let mesh = Arc::new(fixtures::dumbbell(4, 6));
        let dir = tempfile::tempdir().unwrap();
        // green scores negatively against both palette tints, so every view
        // localizes nothing and every seed aborts the same way
        let err = consistency_study(
            &study_config(),
            &mesh,
            "green body, green handle",
            &[1, 2],
            dir.path(),
            None,
        )
        .unwrap_err();
        assert!(
            matches!(err, MetricsError::InsufficientRuns { succeeded: 0, total: 2 }),
            "got {err}"
        );
    }
}
