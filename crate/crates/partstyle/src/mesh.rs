//! Partitioned triangle meshes: loading, validation, normalization, styling,
//! and vertex-colored export.
//!
//! A [`PartitionedMesh`] couples a triangle mesh with an exhaustive, disjoint
//! face-to-part labeling supplied by a TOML sidecar. After construction the
//! mesh is immutable: centered on its vertex centroid, scaled to a unit
//! bounding sphere, with unit area-weighted vertex normals. A
//! [`StylizedMesh`] layers per-vertex colors and bounded normal-direction
//! offsets on top without touching topology.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use nalgebra::Vector3;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

/// Fraction of a unit normal a full-strength displacement moves a vertex.
pub const DISPLACEMENT_SCALE: f64 = 0.1;

#[derive(Debug, Error)]
pub enum MeshError {
    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("obj parse error at line {line}: {msg}")]
    ObjParse { line: usize, msg: String },
    #[error("non-triangle face at line {line}: {count} vertices (triangulate the mesh first)")]
    NonTriangleFace { line: usize, count: usize },
    #[error("face at line {line} references vertex {index}, but only {count} vertices exist")]
    VertexIndexOutOfRange { line: usize, index: usize, count: usize },
    #[error("parts sidecar parse error: {0}")]
    SidecarParse(String),
    #[error("duplicate part name '{0}'")]
    DuplicatePartName(String),
    #[error("part '{part}' references face {index}, but only {count} faces exist")]
    FaceIndexOutOfRange { part: String, index: u32, count: usize },
    #[error("face {face} labeled by both '{first}' and '{second}'")]
    DoublyLabeledFace { face: u32, first: String, second: String },
    #[error("{count} faces are not assigned to any part (first unlabeled: {sample:?})")]
    UnlabeledFaces { count: usize, sample: Vec<u32> },
    #[error("part '{0}' has no faces")]
    EmptyPart(String),
    #[error("mesh has no vertices or no faces")]
    EmptyMesh,
    #[error("all vertices coincide; bounding sphere is degenerate")]
    DegenerateBounds,
    #[error("{what}: expected {expected} entries, got {got}")]
    StyleShapeMismatch { what: &'static str, expected: usize, got: usize },
    #[error("{what} out of range at vertex {index}: {value}")]
    StyleRangeViolation { what: &'static str, index: usize, value: f64 },
    #[error("ply parse error at line {line}: {msg}")]
    PlyParse { line: usize, msg: String },
    #[error("no group or material tags found in {0}")]
    NoGroupTags(PathBuf),
    #[error("face at line {line} is outside every group")]
    UngroupedFace { line: usize },
}

/// Immutable normalized triangle mesh with a disjoint, exhaustive part labeling.
#[derive(Debug, Clone)]
pub struct PartitionedMesh {
    vertices: Vec<Vector3<f64>>,
    faces: Vec<[u32; 3]>,
    part_names: Vec<String>,
    /// Per part: alternative names usable in prompts (canonical name excluded).
    part_synonyms: Vec<Vec<String>>,
    face_parts: Vec<u32>,
    vertex_normals: Vec<Vector3<f64>>,
}

impl PartitionedMesh {
    /// Build from raw geometry and per-part face lists. Geometry is validated,
    /// normalized, and given area-weighted vertex normals.
    pub fn new(
        vertices: Vec<Vector3<f64>>,
        faces: Vec<[u32; 3]>,
        parts: Vec<PartSpec>,
    ) -> Result<Self, MeshError> {
        if vertices.is_empty() || faces.is_empty() {
            return Err(MeshError::EmptyMesh);
        }
        for (i, f) in faces.iter().enumerate() {
            for &v in f {
                if v as usize >= vertices.len() {
                    return Err(MeshError::VertexIndexOutOfRange {
                        line: i,
                        index: v as usize,
                        count: vertices.len(),
                    });
                }
            }
        }

        let mut names: Vec<String> = Vec::with_capacity(parts.len());
        let mut synonyms = Vec::with_capacity(parts.len());
        let mut face_parts = vec![u32::MAX; faces.len()];
        for (pi, part) in parts.iter().enumerate() {
            if names.contains(&part.name) {
                return Err(MeshError::DuplicatePartName(part.name.clone()));
            }
            if part.faces.is_empty() {
                return Err(MeshError::EmptyPart(part.name.clone()));
            }
            for &fi in &part.faces {
                if fi as usize >= faces.len() {
                    return Err(MeshError::FaceIndexOutOfRange {
                        part: part.name.clone(),
                        index: fi,
                        count: faces.len(),
                    });
                }
                let slot = &mut face_parts[fi as usize];
                if *slot != u32::MAX {
                    return Err(MeshError::DoublyLabeledFace {
                        face: fi,
                        first: names[*slot as usize].clone(),
                        second: part.name.clone(),
                    });
                }
                *slot = pi as u32;
            }
            names.push(part.name.clone());
            synonyms.push(part.synonyms.clone());
        }
        let unlabeled: Vec<u32> = face_parts
            .iter()
            .enumerate()
            .filter(|(_, &p)| p == u32::MAX)
            .map(|(i, _)| i as u32)
            .collect();
        if !unlabeled.is_empty() {
            let sample = unlabeled.iter().copied().take(16).collect();
            return Err(MeshError::UnlabeledFaces { count: unlabeled.len(), sample });
        }

        let vertices = normalize_vertices(&vertices)?;
        let vertex_normals = area_weighted_normals(&vertices, &faces);
        Ok(Self {
            vertices,
            faces,
            part_names: names,
            part_synonyms: synonyms,
            face_parts,
            vertex_normals,
        })
    }

    pub fn vertices(&self) -> &[Vector3<f64>] {
        &self.vertices
    }

    pub fn faces(&self) -> &[[u32; 3]] {
        &self.faces
    }

    pub fn part_names(&self) -> &[String] {
        &self.part_names
    }

    pub fn part_count(&self) -> usize {
        self.part_names.len()
    }

    pub fn face_parts(&self) -> &[u32] {
        &self.face_parts
    }

    pub fn vertex_normals(&self) -> &[Vector3<f64>] {
        &self.vertex_normals
    }

    pub fn part_synonyms(&self, part: usize) -> &[String] {
        &self.part_synonyms[part]
    }

    /// Part index for a canonical name or synonym (case-insensitive).
    pub fn resolve_part(&self, word: &str) -> Option<usize> {
        let w = word.to_ascii_lowercase();
        self.part_names.iter().position(|n| n.to_ascii_lowercase() == w).or_else(|| {
            self.part_synonyms
                .iter()
                .position(|syns| syns.iter().any(|s| s.to_ascii_lowercase() == w))
        })
    }

    /// Vertex indices touched by at least one face of `part`.
    pub fn part_vertices(&self, part: usize) -> Vec<usize> {
        let mut seen = vec![false; self.vertices.len()];
        for (f, &p) in self.faces.iter().zip(&self.face_parts) {
            if p as usize == part {
                for &v in f {
                    seen[v as usize] = true;
                }
            }
        }
        seen.iter().enumerate().filter(|(_, &s)| s).map(|(i, _)| i).collect()
    }

    /// SHA-256 over geometry and labeling; stable identity for caches and
    /// sidecar files.
    pub fn content_hash(&self) -> String {
        let mut h = Sha256::new();
        for v in &self.vertices {
            for c in &[v.x, v.y, v.z] {
                h.update(c.to_le_bytes());
            }
        }
        for f in &self.faces {
            for &i in f {
                h.update(i.to_le_bytes());
            }
        }
        for &p in &self.face_parts {
            h.update(p.to_le_bytes());
        }
        for n in &self.part_names {
            h.update(n.as_bytes());
            h.update([0]);
        }
        hex(&h.finalize())
    }
}

/// One part's face list as read from (or written to) the sidecar.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PartSpec {
    pub name: String,
    #[serde(default)]
    pub synonyms: Vec<String>,
    pub faces: Vec<u32>,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct SidecarFile {
    #[serde(default = "default_schema")]
    schema: u32,
    part: Vec<PartSpec>,
}

fn default_schema() -> u32 {
    1
}

/// Load an ASCII OBJ triangle mesh plus its parts sidecar, validate the
/// labeling, and normalize the geometry.
pub fn load_mesh(mesh_path: &Path, parts_path: &Path) -> Result<PartitionedMesh, MeshError> {
    let raw = parse_obj(mesh_path)?;
    let parts = read_parts_sidecar(parts_path)?;
    PartitionedMesh::new(raw.vertices, raw.faces, parts)
}

/// Read a parts sidecar (TOML, `[[part]]` array ordered by part index).
pub fn read_parts_sidecar(path: &Path) -> Result<Vec<PartSpec>, MeshError> {
    let text = std::fs::read_to_string(path)
        .map_err(|source| MeshError::Io { path: path.to_path_buf(), source })?;
    let file: SidecarFile =
        toml::from_str(&text).map_err(|e| MeshError::SidecarParse(e.to_string()))?;
    Ok(file.part)
}

/// Write a parts sidecar.
pub fn write_parts_sidecar(path: &Path, parts: &[PartSpec]) -> Result<(), MeshError> {
    let file = SidecarFile { schema: 1, part: parts.to_vec() };
    let text = toml::to_string_pretty(&file).expect("sidecar serialization cannot fail");
    std::fs::write(path, text).map_err(|source| MeshError::Io { path: path.to_path_buf(), source })
}

/// Write the base geometry as ASCII OBJ (v/f lines only). Positions use
/// shortest-exact float printing, so a reload parses the same doubles.
pub fn write_obj(mesh: &PartitionedMesh, path: &Path) -> Result<(), MeshError> {
    use std::fmt::Write as _;
    let mut text = String::new();
    for v in &mesh.vertices {
        writeln!(text, "v {} {} {}", v.x, v.y, v.z).expect("string write cannot fail");
    }
    for f in &mesh.faces {
        // OBJ indices are 1-based
        writeln!(text, "f {} {} {}", f[0] + 1, f[1] + 1, f[2] + 1)
            .expect("string write cannot fail");
    }
    std::fs::write(path, text).map_err(|source| MeshError::Io { path: path.to_path_buf(), source })
}

/// The mesh's labeling as sidecar entries, one per part in index order.
pub fn part_specs(mesh: &PartitionedMesh) -> Vec<PartSpec> {
    (0..mesh.part_count())
        .map(|p| PartSpec {
            name: mesh.part_names()[p].clone(),
            synonyms: mesh.part_synonyms(p).to_vec(),
            faces: mesh
                .face_parts()
                .iter()
                .enumerate()
                .filter(|&(_, &q)| q as usize == p)
                .map(|(i, _)| i as u32)
                .collect(),
        })
        .collect()
}

/// Center the vertex centroid at the origin and scale the bounding sphere to
/// radius 1. Idempotent within floating-point roundoff.
pub fn normalize_mesh(mesh: &PartitionedMesh) -> Result<PartitionedMesh, MeshError> {
    let mut out = mesh.clone();
    out.vertices = normalize_vertices(&mesh.vertices)?;
    out.vertex_normals = area_weighted_normals(&out.vertices, &out.faces);
    Ok(out)
}

fn normalize_vertices(vertices: &[Vector3<f64>]) -> Result<Vec<Vector3<f64>>, MeshError> {
    let centroid: Vector3<f64> = vertices.iter().sum::<Vector3<f64>>() / vertices.len() as f64;
    let radius = vertices.iter().map(|v| (v - centroid).norm()).fold(0.0f64, f64::max);
    if radius <= 0.0 {
        return Err(MeshError::DegenerateBounds);
    }
    Ok(vertices.iter().map(|v| (v - centroid) / radius).collect())
}

/// Area-weighted vertex normals (degenerate faces contribute zero weight).
/// Vertices touched by no non-degenerate face fall back to +z with a warning.
fn area_weighted_normals(vertices: &[Vector3<f64>], faces: &[[u32; 3]]) -> Vec<Vector3<f64>> {
    let mut acc = vec![Vector3::zeros(); vertices.len()];
    for f in faces {
        let [a, b, c] = [f[0] as usize, f[1] as usize, f[2] as usize];
        // cross product length = 2·area, so summing raw cross products
        // weights each face normal by its area
        let n = (vertices[b] - vertices[a]).cross(&(vertices[c] - vertices[a]));
        acc[a] += n;
        acc[b] += n;
        acc[c] += n;
    }
    acc.into_iter()
        .enumerate()
        .map(|(i, n)| {
            let len = n.norm();
            if len <= 1e-300 {
                log::warn!("vertex {i} has no non-degenerate incident face; normal set to +z");
                Vector3::new(0.0, 0.0, 1.0)
            } else {
                n / len
            }
        })
        .collect()
}

/// A mesh plus the style a field produced for it: per-vertex colors and
/// normal-direction offsets. Topology and labeling are shared with the base.
#[derive(Debug, Clone)]
pub struct StylizedMesh {
    pub base: Arc<PartitionedMesh>,
    /// RGB in [0,1] per vertex.
    pub vertex_colors: Vec<[f64; 3]>,
    /// World-space displacement per vertex, |offset| <= DISPLACEMENT_SCALE.
    pub vertex_offsets: Vec<Vector3<f64>>,
}

impl StylizedMesh {
    pub fn displaced_positions(&self) -> Vec<Vector3<f64>> {
        self.base.vertices().iter().zip(&self.vertex_offsets).map(|(v, o)| v + o).collect()
    }

    /// Mean color over the vertices of one part.
    pub fn part_mean_color(&self, part: usize) -> [f64; 3] {
        let verts = self.base.part_vertices(part);
        let mut acc = [0.0; 3];
        for &v in &verts {
            for (a, c) in acc.iter_mut().zip(&self.vertex_colors[v]) {
                *a += c;
            }
        }
        let n = verts.len().max(1) as f64;
        [acc[0] / n, acc[1] / n, acc[2] / n]
    }

    pub fn max_offset_magnitude(&self) -> f64 {
        self.vertex_offsets.iter().map(|o| o.norm()).fold(0.0, f64::max)
    }
}

/// Displace along stored base normals and attach colors.
///
/// `colors` are RGB in [0,1]; `displacements` are unitless in [-1,1] and are
/// scaled by [`DISPLACEMENT_SCALE`] along each vertex's base normal, so the
/// offset bound holds by construction.
pub fn apply_style(
    mesh: &Arc<PartitionedMesh>,
    colors: &[[f64; 3]],
    displacements: &[f64],
) -> Result<StylizedMesh, MeshError> {
    let e = mesh.vertices().len();
    if colors.len() != e {
        return Err(MeshError::StyleShapeMismatch {
            what: "colors",
            expected: e,
            got: colors.len(),
        });
    }
    if displacements.len() != e {
        return Err(MeshError::StyleShapeMismatch {
            what: "displacements",
            expected: e,
            got: displacements.len(),
        });
    }
    for (i, c) in colors.iter().enumerate() {
        for &ch in c {
            if !(0.0..=1.0).contains(&ch) || ch.is_nan() {
                return Err(MeshError::StyleRangeViolation { what: "color", index: i, value: ch });
            }
        }
    }
    for (i, &d) in displacements.iter().enumerate() {
        if !(-1.0..=1.0).contains(&d) || d.is_nan() {
            return Err(MeshError::StyleRangeViolation {
                what: "displacement",
                index: i,
                value: d,
            });
        }
    }
    let offsets = mesh
        .vertex_normals()
        .iter()
        .zip(displacements)
        .map(|(n, &d)| n * (DISPLACEMENT_SCALE * d))
        .collect();
    Ok(StylizedMesh {
        base: Arc::clone(mesh),
        vertex_colors: colors.to_vec(),
        vertex_offsets: offsets,
    })
}

/// Identity style: mid-gray, zero displacement.
pub fn identity_style(mesh: &Arc<PartitionedMesh>) -> StylizedMesh {
    let e = mesh.vertices().len();
    apply_style(mesh, &vec![[0.5; 3]; e], &vec![0.0; e]).expect("identity style is always valid")
}

/// Export displaced positions plus 8-bit vertex colors as ASCII PLY.
///
/// Positions are printed with Rust's shortest-exact float formatting, so a
/// reload reproduces them bit-for-bit; colors quantize to 1/255 steps.
pub fn export_mesh(stylized: &StylizedMesh, path: &Path) -> Result<(), MeshError> {
    let positions = stylized.displaced_positions();
    let faces = stylized.base.faces();
    let mut out = String::new();
    out.push_str("ply\nformat ascii 1.0\ncomment part-stylized mesh\n");
    let _ = writeln!(out, "element vertex {}", positions.len());
    out.push_str(
        "property double x\nproperty double y\nproperty double z\n\
         property uchar red\nproperty uchar green\nproperty uchar blue\n",
    );
    let _ = writeln!(out, "element face {}", faces.len());
    out.push_str("property list uchar int vertex_indices\nend_header\n");
    for (p, c) in positions.iter().zip(&stylized.vertex_colors) {
        let q = quantize_color(c);
        let _ = writeln!(out, "{} {} {} {} {} {}", p.x, p.y, p.z, q[0], q[1], q[2]);
    }
    for f in faces {
        let _ = writeln!(out, "3 {} {} {}", f[0], f[1], f[2]);
    }
    std::fs::write(path, out).map_err(|source| MeshError::Io { path: path.to_path_buf(), source })
}

pub fn quantize_color(c: &[f64; 3]) -> [u8; 3] {
    [0, 1, 2].map(|k| (c[k].clamp(0.0, 1.0) * 255.0).round() as u8)
}

/// Geometry read back from an exported PLY.
#[derive(Debug)]
pub struct PlyContents {
    pub positions: Vec<Vector3<f64>>,
    pub colors: Vec<[u8; 3]>,
    pub faces: Vec<[u32; 3]>,
}

/// Minimal reader for the ASCII PLY layout [`export_mesh`] writes.
pub fn read_ply(path: &Path) -> Result<PlyContents, MeshError> {
    let text = std::fs::read_to_string(path)
        .map_err(|source| MeshError::Io { path: path.to_path_buf(), source })?;
    let mut lines = text.lines().enumerate();
    let mut vertex_count = None;
    let mut face_count = None;
    for (ln, line) in lines.by_ref() {
        let toks: Vec<&str> = line.split_whitespace().collect();
        match toks.as_slice() {
            ["element", "vertex", n] => {
                vertex_count = Some(
                    n.parse::<usize>()
                        .map_err(|e| MeshError::PlyParse { line: ln + 1, msg: e.to_string() })?,
                )
            }
            ["element", "face", n] => {
                face_count = Some(
                    n.parse::<usize>()
                        .map_err(|e| MeshError::PlyParse { line: ln + 1, msg: e.to_string() })?,
                )
            }
            ["end_header"] => break,
            _ => {}
        }
    }
    let (nv, nf) = match (vertex_count, face_count) {
        (Some(v), Some(f)) => (v, f),
        _ => {
            return Err(MeshError::PlyParse { line: 0, msg: "missing element declarations".into() })
        }
    };
    let mut positions = Vec::with_capacity(nv);
    let mut colors = Vec::with_capacity(nv);
    for _ in 0..nv {
        let (ln, line) = lines
            .next()
            .ok_or(MeshError::PlyParse { line: 0, msg: "unexpected end of vertex list".into() })?;
        let toks: Vec<&str> = line.split_whitespace().collect();
        if toks.len() < 6 {
            return Err(MeshError::PlyParse { line: ln + 1, msg: "short vertex row".into() });
        }
        let f = |i: usize| -> Result<f64, MeshError> {
            toks[i]
                .parse()
                .map_err(|_| MeshError::PlyParse { line: ln + 1, msg: "bad float".into() })
        };
        let u = |i: usize| -> Result<u8, MeshError> {
            toks[i]
                .parse()
                .map_err(|_| MeshError::PlyParse { line: ln + 1, msg: "bad color byte".into() })
        };
        positions.push(Vector3::new(f(0)?, f(1)?, f(2)?));
        colors.push([u(3)?, u(4)?, u(5)?]);
    }
    let mut faces = Vec::with_capacity(nf);
    for _ in 0..nf {
        let (ln, line) = lines
            .next()
            .ok_or(MeshError::PlyParse { line: 0, msg: "unexpected end of face list".into() })?;
        let toks: Vec<&str> = line.split_whitespace().collect();
        if toks.len() != 4 || toks[0] != "3" {
            return Err(MeshError::PlyParse { line: ln + 1, msg: "expected '3 a b c'".into() });
        }
        let v = |i: usize| -> Result<u32, MeshError> {
            toks[i]
                .parse()
                .map_err(|_| MeshError::PlyParse { line: ln + 1, msg: "bad face index".into() })
        };
        faces.push([v(1)?, v(2)?, v(3)?]);
    }
    Ok(PlyContents { positions, colors, faces })
}

struct RawObj {
    vertices: Vec<Vector3<f64>>,
    faces: Vec<[u32; 3]>,
    /// Active `g` group per face, if any group statements appeared.
    face_groups: Vec<Option<String>>,
    /// Active `usemtl` material per face.
    face_materials: Vec<Option<String>>,
    face_lines: Vec<usize>,
}

fn parse_obj(path: &Path) -> Result<RawObj, MeshError> {
    let text = std::fs::read_to_string(path)
        .map_err(|source| MeshError::Io { path: path.to_path_buf(), source })?;
    let mut raw = RawObj {
        vertices: Vec::new(),
        faces: Vec::new(),
        face_groups: Vec::new(),
        face_materials: Vec::new(),
        face_lines: Vec::new(),
    };
    let mut group: Option<String> = None;
    let mut material: Option<String> = None;
    let mut degenerate = 0usize;
    for (ln0, line) in text.lines().enumerate() {
        let line_no = ln0 + 1;
        let mut toks = line.split_whitespace();
        match toks.next() {
            Some("v") => {
                let mut xyz = [0.0f64; 3];
                for slot in &mut xyz {
                    let t = toks.next().ok_or(MeshError::ObjParse {
                        line: line_no,
                        msg: "vertex needs 3 coordinates".into(),
                    })?;
                    *slot = t.parse().map_err(|_| MeshError::ObjParse {
                        line: line_no,
                        msg: format!("bad coordinate '{t}'"),
                    })?;
                }
                raw.vertices.push(Vector3::new(xyz[0], xyz[1], xyz[2]));
            }
            Some("f") => {
                let refs: Vec<&str> = toks.collect();
                if refs.len() != 3 {
                    return Err(MeshError::NonTriangleFace { line: line_no, count: refs.len() });
                }
                let mut face = [0u32; 3];
                for (slot, r) in face.iter_mut().zip(&refs) {
                    let first = r.split('/').next().unwrap_or("");
                    let idx: i64 = first.parse().map_err(|_| MeshError::ObjParse {
                        line: line_no,
                        msg: format!("bad face index '{r}'"),
                    })?;
                    if idx < 1 {
                        return Err(MeshError::ObjParse {
                            line: line_no,
                            msg: format!(
                                "unsupported face index {idx} (expected 1-based positive)"
                            ),
                        });
                    }
                    let zero = (idx - 1) as usize;
                    if zero >= raw.vertices.len() {
                        return Err(MeshError::VertexIndexOutOfRange {
                            line: line_no,
                            index: idx as usize,
                            count: raw.vertices.len(),
                        });
                    }
                    *slot = zero as u32;
                }
                let [a, b, c] = [face[0] as usize, face[1] as usize, face[2] as usize];
                let area2 = (raw.vertices[b] - raw.vertices[a])
                    .cross(&(raw.vertices[c] - raw.vertices[a]))
                    .norm();
                if area2 <= 1e-300 {
                    degenerate += 1;
                }
                raw.faces.push(face);
                raw.face_groups.push(group.clone());
                raw.face_materials.push(material.clone());
                raw.face_lines.push(line_no);
            }
            Some("g") => group = toks.next().map(str::to_owned),
            Some("usemtl") => material = toks.next().map(str::to_owned),
            // comments, normals, texcoords, objects, smoothing, mtllib
            _ => {}
        }
    }
    if degenerate > 0 {
        log::warn!("{degenerate} degenerate (zero-area) faces kept in {}", path.display());
    }
    Ok(raw)
}

/// Derive a parts sidecar from an OBJ's native `g` group tags (falling back to
/// `usemtl` materials when no groups are present). Part order follows first
/// appearance in the file.
pub fn parts_from_obj_groups(mesh_path: &Path) -> Result<Vec<PartSpec>, MeshError> {
    let raw = parse_obj(mesh_path)?;
    let tags: &[Option<String>] = if raw.face_groups.iter().any(Option::is_some) {
        &raw.face_groups
    } else if raw.face_materials.iter().any(Option::is_some) {
        &raw.face_materials
    } else {
        return Err(MeshError::NoGroupTags(mesh_path.to_path_buf()));
    };
    let mut order: Vec<String> = Vec::new();
    let mut by_name: BTreeMap<String, Vec<u32>> = BTreeMap::new();
    for (fi, tag) in tags.iter().enumerate() {
        let Some(name) = tag else {
            return Err(MeshError::UngroupedFace { line: raw.face_lines[fi] });
        };
        if !by_name.contains_key(name) {
            order.push(name.clone());
        }
        by_name.entry(name.clone()).or_default().push(fi as u32);
    }
    Ok(order
        .into_iter()
        .map(|name| {
            let faces = by_name.remove(&name).unwrap_or_default();
            PartSpec { name, synonyms: Vec::new(), faces }
        })
        .collect())
}

fn hex(bytes: &[u8]) -> String {
    let mut s = String::with_capacity(bytes.len() * 2);
    for b in bytes {
        let _ = write!(s, "{b:02x}");
    }
    s
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    fn unit_cube_at(origin: f64, side: f64) -> (Vec<Vector3<f64>>, Vec<[u32; 3]>) {
        let mut vs = Vec::new();
        for z in [0.0, 1.0] {
            for y in [0.0, 1.0] {
                for x in [0.0, 1.0] {
                    vs.push(Vector3::new(origin + x * side, origin + y * side, origin + z * side));
                }
            }
        }
        // two triangles per cube face, outward winding not required here
        let quads =
            [[0, 1, 3, 2], [4, 6, 7, 5], [0, 4, 5, 1], [2, 3, 7, 6], [0, 2, 6, 4], [1, 5, 7, 3]];
        let mut faces = Vec::new();
        for q in quads {
            faces.push([q[0], q[1], q[2]]);
            faces.push([q[0], q[2], q[3]]);
        }
        (vs, faces)
    }

    fn one_part(faces: usize) -> Vec<PartSpec> {
        vec![PartSpec { name: "body".into(), synonyms: vec![], faces: (0..faces as u32).collect() }]
    }

    #[test]
    fn normalization_scales_offset_cube_to_unit_sphere() {
        let (vs, faces) = unit_cube_at(0.0, 10.0);
        let n = faces.len();
        let mesh = PartitionedMesh::new(vs, faces, one_part(n)).unwrap();
        // corners sit 5*sqrt(3) from the centroid, so the corner at the origin
        // maps to -(1,1,1)/sqrt(3)
        let expect = -1.0 / 3f64.sqrt();
        let v0 = mesh.vertices()[0];
        assert_relative_eq!(v0.x, expect, epsilon = 1e-12);
        assert_relative_eq!(v0.y, expect, epsilon = 1e-12);
        assert_relative_eq!(v0.z, expect, epsilon = 1e-12);
        let max_r = mesh.vertices().iter().map(|v| v.norm()).fold(0.0f64, f64::max);
        assert_relative_eq!(max_r, 1.0, epsilon = 1e-12);
    }

    #[test]
    fn normalization_is_idempotent() {
        let (vs, faces) = unit_cube_at(-3.0, 7.0);
        let n = faces.len();
        let mesh = PartitionedMesh::new(vs, faces, one_part(n)).unwrap();
        let again = normalize_mesh(&mesh).unwrap();
        for (a, b) in mesh.vertices().iter().zip(again.vertices()) {
            assert!((a - b).norm() < 1e-12);
        }
    }

    #[test]
    fn coincident_vertices_are_rejected() {
        let vs = vec![Vector3::new(1.0, 1.0, 1.0); 3];
        let faces = vec![[0u32, 1, 2]];
        let err = PartitionedMesh::new(vs, faces, one_part(1)).unwrap_err();
        assert!(matches!(err, MeshError::DegenerateBounds));
    }

    #[test]
    fn labeling_must_be_exhaustive_and_disjoint() {
        let (vs, faces) = unit_cube_at(0.0, 1.0);
        let missing =
            vec![PartSpec { name: "body".into(), synonyms: vec![], faces: (0..6).collect() }];
        match PartitionedMesh::new(vs.clone(), faces.clone(), missing).unwrap_err() {
            MeshError::UnlabeledFaces { count, sample } => {
                assert_eq!(count, 6);
                assert_eq!(sample[0], 6);
            }
            other => panic!("unexpected error: {other}"),
        }

        let overlapping = vec![
            PartSpec { name: "a".into(), synonyms: vec![], faces: (0..8).collect() },
            PartSpec { name: "b".into(), synonyms: vec![], faces: (7..12).collect() },
        ];
        let err = PartitionedMesh::new(vs, faces, overlapping).unwrap_err();
        assert!(matches!(err, MeshError::DoublyLabeledFace { face: 7, .. }));
    }

    #[test]
    fn empty_part_is_rejected() {
        let (vs, faces) = unit_cube_at(0.0, 1.0);
        let parts = vec![
            PartSpec { name: "all".into(), synonyms: vec![], faces: (0..12).collect() },
            PartSpec { name: "ghost".into(), synonyms: vec![], faces: vec![] },
        ];
        let err = PartitionedMesh::new(vs, faces, parts).unwrap_err();
        assert!(matches!(err, MeshError::EmptyPart(name) if name == "ghost"));
    }

    #[test]
    fn vertex_normals_are_unit_length() {
        let (vs, faces) = unit_cube_at(0.0, 2.0);
        let n = faces.len();
        let mesh = PartitionedMesh::new(vs, faces, one_part(n)).unwrap();
        for n in mesh.vertex_normals() {
            assert_relative_eq!(n.norm(), 1.0, epsilon = 1e-6);
        }
    }

    #[test]
    fn flat_patch_normals_point_up() {
        // two coplanar CCW triangles in the z=0 plane
        let vs = vec![
            Vector3::new(0.0, 0.0, 0.0),
            Vector3::new(1.0, 0.0, 0.0),
            Vector3::new(1.0, 1.0, 0.0),
            Vector3::new(0.0, 1.0, 0.0),
        ];
        let faces = vec![[0u32, 1, 2], [0, 2, 3]];
        let mesh = PartitionedMesh::new(vs, faces, one_part(2)).unwrap();
        for n in mesh.vertex_normals() {
            assert_relative_eq!(n.z, 1.0, epsilon = 1e-12);
        }
    }

    #[test]
    fn apply_style_validates_shapes_and_ranges() {
        let (vs, faces) = unit_cube_at(0.0, 1.0);
        let n = faces.len();
        let mesh = Arc::new(PartitionedMesh::new(vs, faces, one_part(n)).unwrap());
        let e = mesh.vertices().len();

        let err = apply_style(&mesh, &vec![[0.5; 3]; e - 1], &vec![0.0; e]).unwrap_err();
        assert!(matches!(err, MeshError::StyleShapeMismatch { what: "colors", .. }));

        let mut bad = vec![[0.5; 3]; e];
        bad[2][1] = 1.5;
        let err = apply_style(&mesh, &bad, &vec![0.0; e]).unwrap_err();
        assert!(matches!(err, MeshError::StyleRangeViolation { what: "color", index: 2, .. }));

        let err = apply_style(&mesh, &vec![[0.5; 3]; e], &vec![2.0; e]).unwrap_err();
        assert!(matches!(err, MeshError::StyleRangeViolation { what: "displacement", .. }));
    }

    #[test]
    fn displacement_bound_holds_at_extremes() {
        let (vs, faces) = unit_cube_at(0.0, 1.0);
        let n = faces.len();
        let mesh = Arc::new(PartitionedMesh::new(vs, faces, one_part(n)).unwrap());
        let e = mesh.vertices().len();
        let styled = apply_style(&mesh, &vec![[1.0, 0.0, 0.0]; e], &vec![1.0; e]).unwrap();
        assert!(styled.max_offset_magnitude() <= DISPLACEMENT_SCALE + 1e-6);
        let identity = identity_style(&mesh);
        for (p, v) in identity.displaced_positions().iter().zip(mesh.vertices()) {
            assert_eq!(p, v);
        }
    }

    #[test]
    fn export_reload_round_trips_positions_and_colors() {
        let (vs, faces) = unit_cube_at(0.0, 3.0);
        let nf = faces.len();
        let mesh = Arc::new(PartitionedMesh::new(vs, faces, one_part(nf)).unwrap());
        let e = mesh.vertices().len();
        let colors: Vec<[f64; 3]> = (0..e).map(|i| [(i as f64) / e as f64, 0.25, 0.9]).collect();
        let disp: Vec<f64> = (0..e).map(|i| ((i as f64) / e as f64) * 2.0 - 1.0).collect();
        let styled = apply_style(&mesh, &colors, &disp).unwrap();

        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("styled.ply");
        export_mesh(&styled, &path).unwrap();
        let reloaded = read_ply(&path).unwrap();

        assert_eq!(reloaded.faces, mesh.faces());
        let expected = styled.displaced_positions();
        for (a, b) in reloaded.positions.iter().zip(&expected) {
            assert!((a - b).norm() <= 1e-5, "positions drifted: {a:?} vs {b:?}");
        }
        for (got, want) in reloaded.colors.iter().zip(&colors) {
            for k in 0..3 {
                let back = got[k] as f64 / 255.0;
                assert!((back - want[k]).abs() <= 0.5 / 255.0 + 1e-12);
            }
        }
    }

    #[test]
    fn obj_loading_validates_faces() {
        let dir = tempfile::tempdir().unwrap();
        let obj = dir.path().join("m.obj");
        std::fs::write(&obj, "v 0 0 0\nv 1 0 0\nv 0 1 0\nv 0 0 1\nf 1 2 3 4\n").unwrap();
        let parts = dir.path().join("m.parts.toml");
        std::fs::write(&parts, "[[part]]\nname = \"a\"\nfaces = [0]\n").unwrap();
        let err = load_mesh(&obj, &parts).unwrap_err();
        assert!(matches!(err, MeshError::NonTriangleFace { line: 5, count: 4 }));

        std::fs::write(&obj, "v 0 0 0\nv 1 0 0\nf 1 2 9\n").unwrap();
        let err = load_mesh(&obj, &parts).unwrap_err();
        assert!(matches!(err, MeshError::VertexIndexOutOfRange { .. }));
    }

    #[test]
    fn obj_with_slash_refs_and_sidecar_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let obj = dir.path().join("m.obj");
        std::fs::write(
            &obj,
            "v 0 0 0\nv 1 0 0\nv 0 1 0\nv 0 0 1\nvn 0 0 1\nf 1/1/1 2/2/1 3/3/1\nf 1//1 3//1 4//1\n",
        )
        .unwrap();
        let parts_path = dir.path().join("m.parts.toml");
        let parts = vec![
            PartSpec { name: "left".into(), synonyms: vec!["port".into()], faces: vec![0] },
            PartSpec { name: "right".into(), synonyms: vec![], faces: vec![1] },
        ];
        write_parts_sidecar(&parts_path, &parts).unwrap();
        let mesh = load_mesh(&obj, &parts_path).unwrap();
        assert_eq!(mesh.part_names(), &["left".to_string(), "right".to_string()]);
        assert_eq!(mesh.resolve_part("PORT"), Some(0));
        assert_eq!(mesh.resolve_part("right"), Some(1));
        assert_eq!(mesh.resolve_part("nope"), None);
        assert_eq!(mesh.face_parts(), &[0, 1]);
    }

    #[test]
    fn converter_builds_sidecar_from_groups() {
        let dir = tempfile::tempdir().unwrap();
        let obj = dir.path().join("g.obj");
        std::fs::write(
            &obj,
            "v 0 0 0\nv 1 0 0\nv 0 1 0\nv 0 0 1\n\
             g head\nf 1 2 3\nf 1 3 4\ng tail\nf 2 3 4\n",
        )
        .unwrap();
        let parts = parts_from_obj_groups(&obj).unwrap();
        assert_eq!(parts.len(), 2);
        assert_eq!(parts[0].name, "head");
        assert_eq!(parts[0].faces, vec![0, 1]);
        assert_eq!(parts[1].name, "tail");
        assert_eq!(parts[1].faces, vec![2]);

        let plain = dir.path().join("plain.obj");
        std::fs::write(&plain, "v 0 0 0\nv 1 0 0\nv 0 1 0\nf 1 2 3\n").unwrap();
        assert!(matches!(parts_from_obj_groups(&plain).unwrap_err(), MeshError::NoGroupTags(_)));
    }

    #[test]
    fn obj_and_sidecar_round_trip_rebuilds_the_mesh() {
        let mesh = crate::fixtures::dumbbell(4, 6);
        let dir = tempfile::tempdir().unwrap();
        let obj = dir.path().join("d.obj");
        let sidecar = dir.path().join("d.parts.toml");
        write_obj(&mesh, &obj).unwrap();
        write_parts_sidecar(&sidecar, &part_specs(&mesh)).unwrap();

        let back = load_mesh(&obj, &sidecar).unwrap();
        assert_eq!(back.faces(), mesh.faces());
        assert_eq!(back.face_parts(), mesh.face_parts());
        assert_eq!(back.part_names(), mesh.part_names());
        assert_eq!(back.part_synonyms(0), mesh.part_synonyms(0));
        // loading re-normalizes; an already-normalized mesh moves only by
        // floating-point roundoff
        for (a, b) in back.vertices().iter().zip(mesh.vertices()) {
            assert!((a - b).norm() < 1e-12, "vertex moved: {a:?} vs {b:?}");
        }
    }

    #[test]
    fn content_hash_tracks_labeling() {
        let (vs, faces) = unit_cube_at(0.0, 1.0);
        let m1 = PartitionedMesh::new(vs.clone(), faces.clone(), one_part(faces.len())).unwrap();
        let m2 = PartitionedMesh::new(vs.clone(), faces.clone(), one_part(faces.len())).unwrap();
        assert_eq!(m1.content_hash(), m2.content_hash());
        let split = vec![
            PartSpec { name: "a".into(), synonyms: vec![], faces: (0..6).collect() },
            PartSpec { name: "b".into(), synonyms: vec![], faces: (6..12).collect() },
        ];
        let m3 = PartitionedMesh::new(vs, faces, split).unwrap();
        assert_ne!(m1.content_hash(), m3.content_hash());
    }
}
