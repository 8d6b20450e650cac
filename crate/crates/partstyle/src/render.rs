//! Deterministic CPU rendering with analytic derivatives.
//!
//! A look-at perspective camera orbits the normalized mesh (target at the
//! origin, +y up, right-handed; azimuth 0 looks down +z). Rasterization is
//! sequential with a z-buffer, flat two-directional diffuse shading plus
//! ambient, and no anti-aliasing, so identical inputs reproduce bit-identical
//! images. Part masks and projected part bounding boxes come from the same
//! traversal, which keeps mask and render visibility in exact agreement.
//!
//! [`diff_render`] records rendering on a [`Tape`]: pixel values are
//! differentiable w.r.t. vertex colors (exactly) and vertex positions (through
//! barycentric weights and shading; visibility jumps at silhouettes are not
//! differentiated, the usual hard-rasterizer caveat).

use std::path::{Path, PathBuf};

use nalgebra::{Matrix4, Perspective3, Point3, Vector2, Vector3, Vector4};
use ndarray::Array2;
use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::autodiff::{CustomOp, Tape, Var};
use crate::mesh::{PartitionedMesh, StylizedMesh};

/// Ambient light term; applies from every direction.
pub const AMBIENT_LIGHT: f64 = 0.30;
/// Two fixed world-space diffuse lights (direction, strength). Strengths sum
/// with the ambient term to just under 1, so shaded colors never clip.
pub const LIGHTS: [([f64; 3], f64); 2] = [([0.8, 1.0, 0.6], 0.45), ([-0.7, 0.4, -1.0], 0.24)];

/// Default smallest projected box side considered detectable, in pixels.
pub const DEFAULT_MIN_BOX_SIDE: u32 = 10;

const Z_NEAR: f64 = 0.05;
const Z_FAR: f64 = 50.0;
/// Elevation is clamped this far away from the poles.
const POLE_MARGIN: f64 = 1e-3;

#[derive(Debug, Error)]
pub enum RenderError {
    #[error("camera distance {0} must exceed 1.1 (unit mesh plus displacement headroom)")]
    DistanceInsideMesh(f64),
    #[error("camera elevation {0} must lie strictly between -pi/2 and pi/2")]
    ElevationAtPole(f64),
    #[error("field of view {0} must lie in (0, pi)")]
    InvalidFov(f64),
    #[error("image size must be positive")]
    ZeroImageSize,
    #[error("viewpoint grid needs at least one azimuth and one elevation")]
    EmptyViewGrid,
    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("png error on {path}: {msg}")]
    Png { path: PathBuf, msg: String },
}

/// Orbiting look-at camera; equality compares the defining parameters.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Camera {
    pub azimuth: f64,
    pub elevation: f64,
    pub distance: f64,
    /// Vertical field of view, radians.
    pub fov: f64,
    pub image_size: u32,
}

impl Camera {
    pub fn eye(&self) -> Vector3<f64> {
        let (sa, ca) = self.azimuth.sin_cos();
        let (se, ce) = self.elevation.sin_cos();
        self.distance * Vector3::new(sa * ce, se, ca * ce)
    }

    /// World → clip transform (view then perspective projection).
    pub fn view_proj(&self) -> Matrix4<f64> {
        let eye = self.eye();
        let view = Matrix4::look_at_rh(&Point3::from(eye), &Point3::origin(), &Vector3::y_axis());
        let proj = Perspective3::new(1.0, self.fov, Z_NEAR, Z_FAR).to_homogeneous();
        proj * view
    }

    /// Stable textual identity for logs and caches.
    pub fn id(&self) -> String {
        format!(
            "az{:+.6}_el{:+.6}_d{:.4}_fov{:.4}_px{}",
            self.azimuth, self.elevation, self.distance, self.fov, self.image_size
        )
    }
}

/// Validated camera constructor. Angles in radians.
pub fn make_camera(
    azimuth: f64,
    elevation: f64,
    distance: f64,
    fov: f64,
    image_size: u32,
) -> Result<Camera, RenderError> {
    // NaN fails both guards
    if distance.is_nan() || distance <= 1.1 {
        return Err(RenderError::DistanceInsideMesh(distance));
    }
    if elevation.is_nan() || elevation.abs() >= std::f64::consts::FRAC_PI_2 {
        return Err(RenderError::ElevationAtPole(elevation));
    }
    if !(fov > 0.0 && fov < std::f64::consts::PI) {
        return Err(RenderError::InvalidFov(fov));
    }
    if image_size == 0 {
        return Err(RenderError::ZeroImageSize);
    }
    Ok(Camera { azimuth, elevation, distance, fov, image_size })
}

/// Evenly spaced azimuth ring at each elevation, elevation-major order
/// (all azimuths of `elevations[0]` first).
pub fn uniform_viewpoints(
    n_azimuth: usize,
    elevations: &[f64],
    distance: f64,
    fov: f64,
    image_size: u32,
) -> Result<Vec<Camera>, RenderError> {
    if n_azimuth == 0 || elevations.is_empty() {
        return Err(RenderError::EmptyViewGrid);
    }
    let mut cams = Vec::with_capacity(n_azimuth * elevations.len());
    for &el in elevations {
        for k in 0..n_azimuth {
            let az = std::f64::consts::TAU * k as f64 / n_azimuth as f64;
            cams.push(make_camera(az, el, distance, fov, image_size)?);
        }
    }
    Ok(cams)
}

/// The anchor followed by `count` Gaussian-perturbed copies (azimuth and
/// elevation each jittered by N(0, sigma); elevation clamped away from the
/// poles). Deterministic for a given RNG state.
pub fn sample_training_views<R: Rng>(
    anchor: &Camera,
    count: usize,
    sigma: f64,
    rng: &mut R,
) -> Vec<Camera> {
    let limit = std::f64::consts::FRAC_PI_2 - POLE_MARGIN;
    let mut views = Vec::with_capacity(count + 1);
    views.push(*anchor);
    for _ in 0..count {
        let az = anchor.azimuth + sigma * standard_normal(rng);
        let el = (anchor.elevation + sigma * standard_normal(rng)).clamp(-limit, limit);
        views.push(Camera { azimuth: az, elevation: el, ..*anchor });
    }
    views
}

/// Standard normal via Box-Muller.
pub fn standard_normal<R: Rng>(rng: &mut R) -> f64 {
    let u1: f64 = rng.gen_range(f64::MIN_POSITIVE..1.0);
    let u2: f64 = rng.gen_range(0.0..1.0);
    (-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos()
}

/// A rendered RGB image, pixels row-major as an (h·w)×3 matrix in [0,1].
#[derive(Debug, Clone)]
pub struct RenderedImage {
    pub pixels: Array2<f64>,
    pub width: u32,
    pub height: u32,
    pub camera: Option<Camera>,
    /// True when the pixels were produced on a tape and carry gradients.
    pub differentiable: bool,
}

impl RenderedImage {
    pub fn pixel(&self, x: u32, y: u32) -> [f64; 3] {
        let r = (y * self.width + x) as usize;
        [self.pixels[(r, 0)], self.pixels[(r, 1)], self.pixels[(r, 2)]]
    }

    pub fn save_png(&self, path: &Path) -> Result<(), RenderError> {
        let mut img = image::RgbImage::new(self.width, self.height);
        for (i, px) in img.pixels_mut().enumerate() {
            for k in 0..3 {
                px.0[k] = (self.pixels[(i, k)].clamp(0.0, 1.0) * 255.0).round() as u8;
            }
        }
        img.save(path)
            .map_err(|e| RenderError::Png { path: path.to_path_buf(), msg: e.to_string() })
    }
}

/// Load a PNG back into the working representation (no camera attached).
pub fn load_png(path: &Path) -> Result<RenderedImage, RenderError> {
    let img = image::open(path)
        .map_err(|e| RenderError::Png { path: path.to_path_buf(), msg: e.to_string() })?
        .into_rgb8();
    let (w, h) = img.dimensions();
    let mut pixels = Array2::zeros(((w * h) as usize, 3));
    for (i, px) in img.pixels().enumerate() {
        for k in 0..3 {
            pixels[(i, k)] = px.0[k] as f64 / 255.0;
        }
    }
    Ok(RenderedImage { pixels, width: w, height: h, camera: None, differentiable: false })
}

/// Per-pixel part indices; -1 is background.
#[derive(Debug, Clone)]
pub struct PartMaskImage {
    pub parts: Vec<i32>,
    pub width: u32,
    pub height: u32,
    pub camera: Camera,
}

impl PartMaskImage {
    pub fn part_at(&self, x: u32, y: u32) -> i32 {
        self.parts[(y * self.width + x) as usize]
    }
}

/// Inclusive-exclusive pixel rectangle: x in [x0, x1), y in [y0, y1).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct PixelBox {
    pub x0: u32,
    pub y0: u32,
    pub x1: u32,
    pub y1: u32,
}

impl PixelBox {
    pub fn width(&self) -> u32 {
        self.x1 - self.x0
    }

    pub fn height(&self) -> u32 {
        self.y1 - self.y0
    }

    pub fn area(&self) -> u64 {
        self.width() as u64 * self.height() as u64
    }

    pub fn intersection_area(&self, other: &PixelBox) -> u64 {
        let x0 = self.x0.max(other.x0);
        let y0 = self.y0.max(other.y0);
        let x1 = self.x1.min(other.x1);
        let y1 = self.y1.min(other.y1);
        if x1 > x0 && y1 > y0 {
            (x1 - x0) as u64 * (y1 - y0) as u64
        } else {
            0
        }
    }

    pub fn iou(&self, other: &PixelBox) -> f64 {
        let inter = self.intersection_area(other);
        let union = self.area() + other.area() - inter;
        if union == 0 {
            0.0
        } else {
            inter as f64 / union as f64
        }
    }

    pub fn contains(&self, x: u32, y: u32) -> bool {
        x >= self.x0 && x < self.x1 && y >= self.y0 && y < self.y1
    }
}

/// What rasterization needs to color a surface.
enum Albedo<'a> {
    PerVertex(&'a [[f64; 3]]),
    PerFace(&'a [[f64; 3]]),
}

/// Anything the renderer can draw.
pub trait Renderable {
    fn positions(&self) -> Vec<Vector3<f64>>;
    fn base(&self) -> &PartitionedMesh;
    fn vertex_colors(&self) -> Option<&[[f64; 3]]>;
}

impl Renderable for PartitionedMesh {
    fn positions(&self) -> Vec<Vector3<f64>> {
        self.vertices().to_vec()
    }
    fn base(&self) -> &PartitionedMesh {
        self
    }
    fn vertex_colors(&self) -> Option<&[[f64; 3]]> {
        None
    }
}

impl Renderable for StylizedMesh {
    fn positions(&self) -> Vec<Vector3<f64>> {
        self.displaced_positions()
    }
    fn base(&self) -> &PartitionedMesh {
        &self.base
    }
    fn vertex_colors(&self) -> Option<&[[f64; 3]]> {
        Some(&self.vertex_colors)
    }
}

/// Stable debug palette assigned to parts by index. Content renders of a bare
/// partitioned mesh use it as per-part albedo so appearance-keyed grounding
/// backends can tell parts apart; orthogonal primaries come first.
pub fn part_palette(index: usize) -> [f64; 3] {
    const PALETTE: [[f64; 3]; 6] = [
        [1.0, 0.0, 0.0],
        [0.0, 0.0, 1.0],
        [0.0, 1.0, 0.0],
        [1.0, 1.0, 0.0],
        [1.0, 0.0, 1.0],
        [0.0, 1.0, 1.0],
    ];
    PALETTE[index % PALETTE.len()]
}

/// Render to an image. Bare meshes draw with the per-part palette; stylized
/// meshes draw their vertex colors on displaced positions.
pub fn render<S: Renderable>(source: &S, camera: &Camera, background: [f64; 3]) -> RenderedImage {
    let positions = source.positions();
    let mesh = source.base();
    let per_face_palette: Vec<[f64; 3]>;
    let albedo = match source.vertex_colors() {
        Some(colors) => Albedo::PerVertex(colors),
        None => {
            per_face_palette =
                mesh.face_parts().iter().map(|&p| part_palette(p as usize)).collect();
            Albedo::PerFace(&per_face_palette)
        }
    };
    let out = rasterize(&positions, mesh.faces(), &albedo, camera, background);
    RenderedImage {
        pixels: out.pixels,
        width: camera.image_size,
        height: camera.image_size,
        camera: Some(*camera),
        differentiable: false,
    }
}

/// Per-pixel part visibility of the base (undisplaced) mesh.
pub fn render_part_masks(mesh: &PartitionedMesh, camera: &Camera) -> PartMaskImage {
    let positions = mesh.vertices().to_vec();
    let palette: Vec<[f64; 3]> =
        mesh.face_parts().iter().map(|&p| part_palette(p as usize)).collect();
    let out = rasterize(&positions, mesh.faces(), &Albedo::PerFace(&palette), camera, [0.0; 3]);
    let parts = out
        .tri_id
        .iter()
        .map(|&t| if t < 0 { -1 } else { mesh.face_parts()[t as usize] as i32 })
        .collect();
    PartMaskImage { parts, width: camera.image_size, height: camera.image_size, camera: *camera }
}

/// Tight pixel bounding boxes of each part's visible pixels. Parts with no
/// visible pixels, or whose box's larger side is under `min_side`, are `None`.
pub fn project_part_bboxes(
    mesh: &PartitionedMesh,
    camera: &Camera,
    min_side: u32,
) -> Vec<Option<PixelBox>> {
    let masks = render_part_masks(mesh, camera);
    boxes_from_masks(&masks, mesh.part_count(), min_side)
}

/// Box extraction shared with tests' brute-force comparisons.
pub fn boxes_from_masks(
    masks: &PartMaskImage,
    part_count: usize,
    min_side: u32,
) -> Vec<Option<PixelBox>> {
    let mut bounds = vec![(u32::MAX, u32::MAX, 0u32, 0u32, 0u64); part_count];
    for y in 0..masks.height {
        for x in 0..masks.width {
            let p = masks.part_at(x, y);
            if p >= 0 {
                let b = &mut bounds[p as usize];
                b.0 = b.0.min(x);
                b.1 = b.1.min(y);
                b.2 = b.2.max(x);
                b.3 = b.3.max(y);
                b.4 += 1;
            }
        }
    }
    bounds
        .into_iter()
        .map(|(x0, y0, x1, y1, count)| {
            if count == 0 {
                return None;
            }
            let b = PixelBox { x0, y0, x1: x1 + 1, y1: y1 + 1 };
            if b.width().max(b.height()) < min_side {
                None
            } else {
                Some(b)
            }
        })
        .collect()
}

struct RasterOutput {
    pixels: Array2<f64>,
    tri_id: Vec<i32>,
}

fn orient2d(a: Vector2<f64>, b: Vector2<f64>, c: Vector2<f64>) -> f64 {
    (b.x - a.x) * (c.y - a.y) - (b.y - a.y) * (c.x - a.x)
}

/// Clip-space corner data for one triangle, or `None` if culled.
struct TriSetup {
    clip: [Vector4<f64>; 3],
    screen: [Vector2<f64>; 3],
    /// z_ndc at each corner (screen-affine, used for depth).
    zs: [f64; 3],
}

fn setup_triangle(
    positions: &[Vector3<f64>],
    face: &[u32; 3],
    vp: &Matrix4<f64>,
    size: f64,
) -> Option<TriSetup> {
    let mut clip = [Vector4::zeros(); 3];
    let mut screen = [Vector2::zeros(); 3];
    let mut zs = [0.0; 3];
    for k in 0..3 {
        let p = positions[face[k] as usize];
        let c = vp * Vector4::new(p.x, p.y, p.z, 1.0);
        if c.w <= 1e-9 {
            return None; // behind the camera
        }
        let ndc_z = c.z / c.w;
        if ndc_z < -1.0 {
            return None; // crosses the near plane; whole triangle dropped
        }
        screen[k] = Vector2::new((c.x / c.w + 1.0) * 0.5 * size, (1.0 - c.y / c.w) * 0.5 * size);
        zs[k] = ndc_z;
        clip[k] = c;
    }
    if zs.iter().all(|&z| z > 1.0) {
        return None; // entirely beyond the far plane
    }
    Some(TriSetup { clip, screen, zs })
}

/// Flat shading factor for a displaced-triangle normal, flipped toward the
/// viewer (meshes render two-sided).
fn face_shading(
    p0: Vector3<f64>,
    p1: Vector3<f64>,
    p2: Vector3<f64>,
    eye: Vector3<f64>,
) -> (f64, Vector3<f64>, f64) {
    let n_raw = (p1 - p0).cross(&(p2 - p0));
    let len = n_raw.norm();
    if len <= 1e-300 {
        return (AMBIENT_LIGHT, Vector3::new(0.0, 0.0, 1.0), 1.0);
    }
    let centroid = (p0 + p1 + p2) / 3.0;
    let sign = if n_raw.dot(&(eye - centroid)) < 0.0 { -1.0 } else { 1.0 };
    let n = n_raw * (sign / len);
    let mut s = AMBIENT_LIGHT;
    for (dir, strength) in LIGHTS {
        let l = Vector3::new(dir[0], dir[1], dir[2]).normalize();
        s += strength * n.dot(&l).max(0.0);
    }
    (s, n, sign)
}

fn rasterize(
    positions: &[Vector3<f64>],
    faces: &[[u32; 3]],
    albedo: &Albedo<'_>,
    camera: &Camera,
    background: [f64; 3],
) -> RasterOutput {
    let size = camera.image_size as usize;
    let sizef = camera.image_size as f64;
    let vp = camera.view_proj();
    let eye = camera.eye();

    let mut pixels = Array2::zeros((size * size, 3));
    for (i, &b) in background.iter().enumerate() {
        pixels.column_mut(i).fill(b);
    }
    let mut tri_id = vec![-1i32; size * size];
    let mut depth = vec![f64::INFINITY; size * size];

    for (fi, face) in faces.iter().enumerate() {
        let Some(tri) = setup_triangle(positions, face, &vp, sizef) else { continue };
        let [s0, s1, s2] = tri.screen;
        let area = orient2d(s0, s1, s2);
        if area.abs() < 1e-12 {
            continue;
        }
        let min_x = s0.x.min(s1.x).min(s2.x).floor().max(0.0) as usize;
        let max_x = (s0.x.max(s1.x).max(s2.x).ceil() as usize).min(size.saturating_sub(1));
        let min_y = s0.y.min(s1.y).min(s2.y).floor().max(0.0) as usize;
        let max_y = (s0.y.max(s1.y).max(s2.y).ceil() as usize).min(size.saturating_sub(1));
        if min_x > max_x || min_y > max_y {
            continue;
        }

        let (shade, _, _) = face_shading(
            positions[face[0] as usize],
            positions[face[1] as usize],
            positions[face[2] as usize],
            eye,
        );
        let flat_color = match albedo {
            Albedo::PerFace(cols) => Some(cols[fi]),
            Albedo::PerVertex(_) => None,
        };

        for py in min_y..=max_y {
            for px in min_x..=max_x {
                let q = Vector2::new(px as f64 + 0.5, py as f64 + 0.5);
                let w0 = orient2d(s1, s2, q);
                let w1 = orient2d(s2, s0, q);
                let w2 = orient2d(s0, s1, q);
                let inside =
                    (w0 >= 0.0 && w1 >= 0.0 && w2 >= 0.0) || (w0 <= 0.0 && w1 <= 0.0 && w2 <= 0.0);
                if !inside {
                    continue;
                }
                let total = w0 + w1 + w2;
                if total == 0.0 {
                    continue;
                }
                let ls = [w0 / total, w1 / total, w2 / total];
                let z = ls[0] * tri.zs[0] + ls[1] * tri.zs[1] + ls[2] * tri.zs[2];
                if !(-1.0..=1.0).contains(&z) {
                    continue;
                }
                let idx = py * size + px;
                if z >= depth[idx] {
                    continue;
                }
                depth[idx] = z;
                tri_id[idx] = fi as i32;

                let color = match (&flat_color, albedo) {
                    (Some(c), _) => *c,
                    (None, Albedo::PerVertex(cols)) => {
                        // perspective-correct interpolation of vertex colors
                        let u: [f64; 3] =
                            [ls[0] / tri.clip[0].w, ls[1] / tri.clip[1].w, ls[2] / tri.clip[2].w];
                        let usum = u[0] + u[1] + u[2];
                        let lp = [u[0] / usum, u[1] / usum, u[2] / usum];
                        let mut c = [0.0; 3];
                        for k in 0..3 {
                            let vc = cols[face[k] as usize];
                            for ch in 0..3 {
                                c[ch] += lp[k] * vc[ch];
                            }
                        }
                        c
                    }
                    (None, Albedo::PerFace(_)) => unreachable!(),
                };
                for ch in 0..3 {
                    pixels[(idx, ch)] = shade * color[ch];
                }
            }
        }
    }
    RasterOutput { pixels, tri_id }
}

/// Tape op: pixels = raster(positions, colors). Backward distributes pixel
/// gradients to vertex colors (via perspective-correct weights and shading)
/// and to vertex positions (via barycentric-weight and flat-shading partials).
struct RasterBackprop {
    faces: Vec<[u32; 3]>,
    view_proj: Matrix4<f64>,
    eye: Vector3<f64>,
    image_size: u32,
    tri_id: Vec<i32>,
}

impl CustomOp for RasterBackprop {
    fn name(&self) -> &'static str {
        "raster"
    }

    fn backward(
        &self,
        inputs: &[&Array2<f64>],
        output_grad: &Array2<f64>,
        input_grads: &mut [Array2<f64>],
    ) {
        let pos_mat = inputs[0];
        let col_mat = inputs[1];
        let positions: Vec<Vector3<f64>> = (0..pos_mat.nrows())
            .map(|i| Vector3::new(pos_mat[(i, 0)], pos_mat[(i, 1)], pos_mat[(i, 2)]))
            .collect();
        let size = self.image_size as usize;
        let sizef = self.image_size as f64;

        let (dpos, dcol) = {
            let (a, b) = input_grads.split_at_mut(1);
            (&mut a[0], &mut b[0])
        };

        for idx in 0..self.tri_id.len() {
            let fi = self.tri_id[idx];
            if fi < 0 {
                continue;
            }
            let g = [output_grad[(idx, 0)], output_grad[(idx, 1)], output_grad[(idx, 2)]];
            if g == [0.0; 3] {
                continue;
            }
            let face = self.faces[fi as usize];
            let tri = setup_triangle(&positions, &face, &self.view_proj, sizef)
                .expect("triangle was rasterized");
            let [s0, s1, s2] = tri.screen;
            let q = Vector2::new((idx % size) as f64 + 0.5, (idx / size) as f64 + 0.5);
            let w = [orient2d(s1, s2, q), orient2d(s2, s0, q), orient2d(s0, s1, q)];
            let total = w[0] + w[1] + w[2];
            let ls = [w[0] / total, w[1] / total, w[2] / total];
            let cw = [tri.clip[0].w, tri.clip[1].w, tri.clip[2].w];
            let u = [ls[0] / cw[0], ls[1] / cw[1], ls[2] / cw[2]];
            let usum = u[0] + u[1] + u[2];
            let lp = [u[0] / usum, u[1] / usum, u[2] / usum];

            let p = [
                positions[face[0] as usize],
                positions[face[1] as usize],
                positions[face[2] as usize],
            ];
            let (shade, normal, sign) = face_shading(p[0], p[1], p[2], self.eye);

            let colors: [[f64; 3]; 3] = [
                [
                    col_mat[(face[0] as usize, 0)],
                    col_mat[(face[0] as usize, 1)],
                    col_mat[(face[0] as usize, 2)],
                ],
                [
                    col_mat[(face[1] as usize, 0)],
                    col_mat[(face[1] as usize, 1)],
                    col_mat[(face[1] as usize, 2)],
                ],
                [
                    col_mat[(face[2] as usize, 0)],
                    col_mat[(face[2] as usize, 1)],
                    col_mat[(face[2] as usize, 2)],
                ],
            ];

            // d pixel / d vertex color: shade * lp_k, exact
            for k in 0..3 {
                let row = face[k] as usize;
                for ch in 0..3 {
                    dcol[(row, ch)] += g[ch] * shade * lp[k];
                }
            }

            // interpolated albedo, for the shading path
            let mut a = [0.0; 3];
            for k in 0..3 {
                for ch in 0..3 {
                    a[ch] += lp[k] * colors[k][ch];
                }
            }
            let d_shade: f64 = (0..3).map(|ch| g[ch] * a[ch]).sum();

            // d pixel / d lp_k = shade * colors[k]
            let d_lp: [f64; 3] =
                [0, 1, 2].map(|k| shade * (0..3).map(|ch| g[ch] * colors[k][ch]).sum::<f64>());

            // lp = u / sum(u)
            let dot: f64 = (0..3).map(|k| d_lp[k] * lp[k]).sum();
            let d_u: [f64; 3] = [0, 1, 2].map(|k| (d_lp[k] - dot) / usum);

            // u_k = ls_k / w_clip_k
            let d_ls: [f64; 3] = [0, 1, 2].map(|k| d_u[k] / cw[k]);
            let mut d_cw: [f64; 3] = [0, 1, 2].map(|k| -d_u[k] * ls[k] / (cw[k] * cw[k]));

            // ls_k = w_k / total: accumulate screen-position gradients
            let mut d_screen = [Vector2::zeros(); 3];
            {
                // d ls_k / d w_m = (delta_km - ls_k) / total
                let mut d_w = [0.0; 3];
                for k in 0..3 {
                    for (m, dw) in d_w.iter_mut().enumerate() {
                        let delta = if k == m { 1.0 } else { 0.0 };
                        *dw += d_ls[k] * (delta - ls[k]) / total;
                    }
                }
                // w_0 = orient2d(s1, s2, q) etc; partials of orient2d(a, b, c)
                // are da = (b.y - c.y, c.x - b.x), db = (c.y - a.y, a.x - c.x)
                let pairs = [(1usize, 2usize), (2, 0), (0, 1)];
                for (k, (ia, ib)) in pairs.iter().enumerate() {
                    let (sa, sb) = (tri.screen[*ia], tri.screen[*ib]);
                    d_screen[*ia] += d_w[k] * Vector2::new(sb.y - q.y, q.x - sb.x);
                    d_screen[*ib] += d_w[k] * Vector2::new(q.y - sa.y, sa.x - q.x);
                }
            }

            // screen = ((x/w + 1)/2 * size, (1 - y/w)/2 * size)
            let mut d_clip = [Vector4::zeros(); 3];
            for k in 0..3 {
                let c = tri.clip[k];
                let gx = d_screen[k].x;
                let gy = d_screen[k].y;
                d_clip[k].x = gx * sizef * 0.5 / c.w;
                d_clip[k].y = -gy * sizef * 0.5 / c.w;
                d_clip[k].w = -gx * sizef * 0.5 * c.x / (c.w * c.w)
                    + gy * sizef * 0.5 * c.y / (c.w * c.w)
                    + d_cw[k];
                d_cw[k] = 0.0;
            }

            // shading: s = ambient + sum strength * max(0, n.l)
            let mut d_n = Vector3::zeros();
            for (dir, strength) in LIGHTS {
                let l = Vector3::new(dir[0], dir[1], dir[2]).normalize();
                if normal.dot(&l) > 0.0 {
                    d_n += d_shade * strength * l;
                }
            }
            // n = sign * n_raw / |n_raw|
            let n_raw = (p[1] - p[0]).cross(&(p[2] - p[0]));
            let len = n_raw.norm();
            let mut d_p = [Vector3::zeros(); 3];
            if len > 1e-300 {
                let d_nraw = (d_n - normal * normal.dot(&d_n)) * (sign / len);
                let e1 = p[1] - p[0];
                let e2 = p[2] - p[0];
                let d_e1 = e2.cross(&d_nraw);
                let d_e2 = d_nraw.cross(&e1);
                d_p[1] += d_e1;
                d_p[2] += d_e2;
                d_p[0] -= d_e1 + d_e2;
            }

            // clip = VP * (p, 1): push clip gradients back to world space
            let m = &self.view_proj;
            for k in 0..3 {
                let dc = d_clip[k];
                for axis in 0..3 {
                    d_p[k][axis] += dc.x * m[(0, axis)] + dc.y * m[(1, axis)] + dc.w * m[(3, axis)];
                }
            }
            for k in 0..3 {
                let row = face[k] as usize;
                for axis in 0..3 {
                    dpos[(row, axis)] += d_p[k][axis];
                }
            }
        }
    }
}

/// Record a differentiable render on the tape.
///
/// `positions` is an e×3 node of world positions (base vertices plus offsets),
/// `colors` an e×3 node of vertex RGB. Returns the (h·w)×3 pixel node.
pub fn diff_render(
    tape: &mut Tape,
    positions: Var,
    colors: Var,
    faces: &[[u32; 3]],
    camera: &Camera,
    background: [f64; 3],
) -> Var {
    let pos_mat = tape.value(positions);
    let col_mat = tape.value(colors);
    let pos_vec: Vec<Vector3<f64>> = (0..pos_mat.nrows())
        .map(|i| Vector3::new(pos_mat[(i, 0)], pos_mat[(i, 1)], pos_mat[(i, 2)]))
        .collect();
    let col_vec: Vec<[f64; 3]> =
        (0..col_mat.nrows()).map(|i| [col_mat[(i, 0)], col_mat[(i, 1)], col_mat[(i, 2)]]).collect();
    let out = rasterize(&pos_vec, faces, &Albedo::PerVertex(&col_vec), camera, background);
    let op = RasterBackprop {
        faces: faces.to_vec(),
        view_proj: camera.view_proj(),
        eye: camera.eye(),
        image_size: camera.image_size,
        tri_id: out.tri_id,
    };
    tape.custom(vec![positions, colors], Box::new(op), out.pixels)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fixtures;
    use crate::mesh::{apply_style, identity_style};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use std::sync::Arc;

    fn cam(az: f64, el: f64, size: u32) -> Camera {
        make_camera(az, el, 2.5, 60f64.to_radians(), size).unwrap()
    }

    #[test]
    fn camera_validation_rejects_bad_parameters() {
        assert!(matches!(
            make_camera(0.0, 0.0, 1.0, 1.0, 64),
            Err(RenderError::DistanceInsideMesh(_))
        ));
        assert!(matches!(
            make_camera(0.0, std::f64::consts::FRAC_PI_2, 2.5, 1.0, 64),
            Err(RenderError::ElevationAtPole(_))
        ));
        assert!(matches!(make_camera(0.0, 0.0, 2.5, 0.0, 64), Err(RenderError::InvalidFov(_))));
        assert!(matches!(make_camera(0.0, 0.0, 2.5, 1.0, 0), Err(RenderError::ZeroImageSize)));
    }

    #[test]
    fn azimuth_zero_looks_down_positive_z() {
        let c = cam(0.0, 0.0, 64);
        let eye = c.eye();
        assert!(eye.z > 0.0 && eye.x.abs() < 1e-12 && eye.y.abs() < 1e-12);
    }

    #[test]
    fn uniform_viewpoints_are_elevation_major() {
        let els = [-0.5, 0.0, 0.5];
        let cams = uniform_viewpoints(8, &els, 2.5, 1.0, 64).unwrap();
        assert_eq!(cams.len(), 24);
        for c in &cams[0..8] {
            assert_eq!(c.elevation, -0.5);
        }
        assert!((cams[1].azimuth - std::f64::consts::TAU / 8.0).abs() < 1e-12);
        assert!(matches!(
            uniform_viewpoints(0, &els, 2.5, 1.0, 64),
            Err(RenderError::EmptyViewGrid)
        ));
    }

    #[test]
    fn sampled_views_start_with_anchor_and_respect_clamp() {
        let anchor = cam(1.0, 1.4, 64);
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let views = sample_training_views(&anchor, 5, 0.5, &mut rng);
        assert_eq!(views.len(), 6);
        assert_eq!(views[0], anchor);
        for v in &views {
            assert!(v.elevation.abs() < std::f64::consts::FRAC_PI_2);
        }
        let mut rng2 = ChaCha8Rng::seed_from_u64(9);
        let views2 = sample_training_views(&anchor, 5, 0.5, &mut rng2);
        for (a, b) in views.iter().zip(&views2) {
            assert_eq!(a, b);
        }
    }

    #[test]
    fn renders_are_bit_identical() {
        let mesh = fixtures::dumbbell(5, 8);
        let c = cam(0.7, 0.2, 64);
        let a = render(&mesh, &c, [1.0; 3]);
        let b = render(&mesh, &c, [1.0; 3]);
        assert_eq!(a.pixels, b.pixels);
    }

    #[test]
    fn red_styled_cube_shows_red_pixels_on_white() {
        let mesh = Arc::new(fixtures::cube());
        let e = mesh.vertices().len();
        let styled = apply_style(&mesh, &vec![[1.0, 0.0, 0.0]; e], &vec![0.0; e]).unwrap();
        let img = render(&styled, &cam(0.6, 0.3, 64), [1.0; 3]);
        let mut reds = 0;
        let mut background = 0;
        for i in 0..(64 * 64) {
            let px = [img.pixels[(i, 0)], img.pixels[(i, 1)], img.pixels[(i, 2)]];
            if px == [1.0, 1.0, 1.0] {
                background += 1;
            } else if px[0] > 0.2 && px[1] == 0.0 && px[2] == 0.0 {
                reds += 1;
            }
        }
        assert!(reds > 50, "expected red pixels, got {reds}");
        assert!(background > 50);
    }

    #[test]
    fn single_triangle_renders_from_both_sides() {
        let mesh = fixtures::single_triangle();
        for az in [0.0, std::f64::consts::PI] {
            let img = render(&mesh, &cam(az, 0.0, 64), [0.0; 3]);
            let lit = (0..64 * 64).filter(|&i| img.pixels[(i, 0)] > 0.0).count();
            assert!(lit > 20, "azimuth {az}: {lit} lit pixels");
        }
    }

    #[test]
    fn mesh_beyond_far_plane_renders_pure_background() {
        let mesh = fixtures::cube();
        let c = make_camera(0.3, 0.1, 80.0, 1.0, 32).unwrap();
        let img = render(&mesh, &c, [0.25, 0.5, 0.75]);
        for i in 0..(32 * 32) {
            assert_eq!(
                [img.pixels[(i, 0)], img.pixels[(i, 1)], img.pixels[(i, 2)]],
                [0.25, 0.5, 0.75]
            );
        }
    }

    #[test]
    fn masks_agree_with_render_visibility() {
        let mesh = fixtures::dumbbell(6, 10);
        let c = cam(0.9, -0.3, 96);
        let img = render(&mesh, &c, [1.0; 3]);
        let masks = render_part_masks(&mesh, &c);
        for y in 0..96 {
            for x in 0..96 {
                let px = img.pixel(x, y);
                let foreground = px != [1.0, 1.0, 1.0];
                assert_eq!(foreground, masks.part_at(x, y) >= 0, "disagreement at ({x},{y})");
            }
        }
    }

    #[test]
    fn bboxes_match_brute_force_mask_scan() {
        let mesh = fixtures::dumbbell(6, 10);
        let c = cam(0.4, 0.25, 128);
        let masks = render_part_masks(&mesh, &c);
        let boxes = project_part_bboxes(&mesh, &c, 1);
        for (part, &projected) in boxes.iter().enumerate() {
            let mut found: Option<(u32, u32, u32, u32)> = None;
            for y in 0..128 {
                for x in 0..128 {
                    if masks.part_at(x, y) == part as i32 {
                        let f = found.get_or_insert((x, y, x, y));
                        f.0 = f.0.min(x);
                        f.1 = f.1.min(y);
                        f.2 = f.2.max(x);
                        f.3 = f.3.max(y);
                    }
                }
            }
            match (found, projected) {
                (Some((x0, y0, x1, y1)), Some(b)) => {
                    assert_eq!((b.x0, b.y0, b.x1, b.y1), (x0, y0, x1 + 1, y1 + 1));
                }
                (None, None) => {}
                other => panic!("part {part}: mismatch {other:?}"),
            }
        }
    }

    #[test]
    fn min_side_omits_small_boxes() {
        let mesh = fixtures::dumbbell(6, 10);
        let c = cam(0.4, 0.25, 128);
        let strict = project_part_bboxes(&mesh, &c, 1000);
        assert!(strict.iter().all(Option::is_none));
    }

    #[test]
    fn hidden_part_has_no_box() {
        let mesh = fixtures::nested_cubes();
        let c = cam(0.8, 0.4, 96);
        let boxes = project_part_bboxes(&mesh, &c, 1);
        assert!(boxes[0].is_some(), "shell visible");
        assert!(boxes[1].is_none(), "core hidden");
    }

    #[test]
    fn png_round_trip_quantizes_within_half_step() {
        let mesh = Arc::new(fixtures::cube());
        let styled = identity_style(&mesh);
        let img = render(&styled, &cam(0.2, 0.1, 48), [1.0; 3]);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("r.png");
        img.save_png(&path).unwrap();
        let back = load_png(&path).unwrap();
        assert_eq!(back.width, 48);
        for i in 0..(48 * 48) {
            for k in 0..3 {
                assert!((back.pixels[(i, k)] - img.pixels[(i, k)]).abs() <= 0.5 / 255.0 + 1e-9);
            }
        }
    }

    /// Finite differences against the rasterizer's analytic adjoint, for both
    /// colors and positions. Loss = weighted sum of all pixels; tiny steps keep
    /// pixel coverage stable so silhouette jumps don't pollute the check.
    #[test]
    fn raster_gradients_match_finite_differences() {
        let mesh = fixtures::dumbbell(4, 6);
        let c = cam(0.5, 0.2, 48);
        let e = mesh.vertices().len();
        let mut rng = ChaCha8Rng::seed_from_u64(11);

        let base_pos = Array2::from_shape_fn((e, 3), |(i, k)| mesh.vertices()[i][k]);
        let base_col = Array2::from_shape_fn((e, 3), |_| rng.gen_range(0.1..0.9));
        let weights = Array2::from_shape_fn((48 * 48, 3), |_| rng.gen_range(-1.0..1.0));

        let eval = |pos: &Array2<f64>, col: &Array2<f64>| -> f64 {
            let mut tape = Tape::new();
            let p = tape.leaf(pos.clone());
            let cvar = tape.leaf(col.clone());
            let pix = diff_render(&mut tape, p, cvar, mesh.faces(), &c, [0.0; 3]);
            let weighted = tape.mul_const(pix, weights.clone());
            let loss = tape.sum(weighted);
            tape.scalar_value(loss)
        };

        let mut tape = Tape::new();
        let p = tape.leaf(base_pos.clone());
        let cvar = tape.leaf(base_col.clone());
        let pix = diff_render(&mut tape, p, cvar, mesh.faces(), &c, [0.0; 3]);
        let weighted = tape.mul_const(pix, weights.clone());
        let loss = tape.sum(weighted);
        let grads = tape.backward(loss);
        let dpos = grads.of(p).unwrap().clone();
        let dcol = grads.of(cvar).unwrap().clone();

        let mut checked = 0;
        let mut ok = 0;
        for trial in 0..60 {
            let vi = rng.gen_range(0..e);
            let axis = rng.gen_range(0..3);
            let color_side = trial % 2 == 0;
            let eps = 1e-6;
            let (fd, an) = if color_side {
                let mut plus = base_col.clone();
                plus[(vi, axis)] += eps;
                let mut minus = base_col.clone();
                minus[(vi, axis)] -= eps;
                ((eval(&base_pos, &plus) - eval(&base_pos, &minus)) / (2.0 * eps), dcol[(vi, axis)])
            } else {
                let mut plus = base_pos.clone();
                plus[(vi, axis)] += eps;
                let mut minus = base_pos.clone();
                minus[(vi, axis)] -= eps;
                ((eval(&plus, &base_col) - eval(&minus, &base_col)) / (2.0 * eps), dpos[(vi, axis)])
            };
            let denom = fd.abs().max(an.abs());
            if denom < 1e-7 {
                continue; // both negligible
            }
            checked += 1;
            if ((fd - an) / denom).abs() < 1e-3 {
                ok += 1;
            }
        }
        assert!(checked >= 30, "too few informative samples: {checked}");
        assert!(
            ok as f64 >= checked as f64 * 0.95,
            "raster adjoint mismatch: {ok}/{checked} within tolerance"
        );
    }
}
