//! Procedurally generated partitioned meshes.
//!
//! Small parametric shapes with clean part labelings, used by the test suite
//! and handy for trying the pipeline without mesh assets. All fixtures come
//! back normalized (unit bounding sphere, centroid at origin).

use nalgebra::Vector3;

use crate::grounding::ToyGrounding;
use crate::mesh::{PartSpec, PartitionedMesh};
use crate::render::part_palette;

/// Raw geometry under construction; face lists are grouped per part.
#[derive(Default)]
struct Builder {
    vertices: Vec<Vector3<f64>>,
    faces: Vec<[u32; 3]>,
    parts: Vec<PartSpec>,
}

impl Builder {
    fn begin_part(&mut self, name: &str, synonyms: &[&str]) {
        self.parts.push(PartSpec {
            name: name.to_owned(),
            synonyms: synonyms.iter().map(|s| s.to_string()).collect(),
            faces: Vec::new(),
        });
    }

    fn push_face(&mut self, a: u32, b: u32, c: u32) {
        self.faces.push([a, b, c]);
        let fi = (self.faces.len() - 1) as u32;
        self.parts.last_mut().expect("begin_part first").faces.push(fi);
    }

    fn build(self) -> PartitionedMesh {
        PartitionedMesh::new(self.vertices, self.faces, self.parts)
            .expect("fixture geometry is valid by construction")
    }

    /// UV sphere with outward winding. `rings >= 2`, `segments >= 3`.
    fn add_sphere(&mut self, center: Vector3<f64>, radius: f64, rings: usize, segments: usize) {
        assert!(rings >= 2 && segments >= 3);
        let base = self.vertices.len() as u32;
        self.vertices.push(center + Vector3::new(0.0, radius, 0.0));
        for i in 1..rings {
            let theta = std::f64::consts::PI * i as f64 / rings as f64;
            let (rr, y) = (radius * theta.sin(), radius * theta.cos());
            for j in 0..segments {
                let phi = std::f64::consts::TAU * j as f64 / segments as f64;
                self.vertices.push(center + Vector3::new(phi.sin() * rr, y, phi.cos() * rr));
            }
        }
        self.vertices.push(center - Vector3::new(0.0, radius, 0.0));
        let bottom = (self.vertices.len() - 1) as u32;

        let ring =
            |i: usize, j: usize| base + 1 + (i as u32) * segments as u32 + (j % segments) as u32;
        for j in 0..segments {
            self.push_face(base, ring(0, j), ring(0, j + 1));
        }
        for i in 0..rings - 2 {
            for j in 0..segments {
                let (a, b) = (ring(i, j), ring(i, j + 1));
                let (d, c) = (ring(i + 1, j), ring(i + 1, j + 1));
                self.push_face(a, d, c);
                self.push_face(a, c, b);
            }
        }
        for j in 0..segments {
            self.push_face(bottom, ring(rings - 2, j + 1), ring(rings - 2, j));
        }
    }

    /// Y-axis truncated cone from `(r_bottom, y_bottom)` to `(r_top, y_top)`,
    /// optionally capped.
    #[allow(clippy::too_many_arguments)]
    fn add_cone(
        &mut self,
        axis_x: f64,
        axis_z: f64,
        r_bottom: f64,
        y_bottom: f64,
        r_top: f64,
        y_top: f64,
        segments: usize,
        caps: bool,
    ) {
        assert!(segments >= 3);
        let base = self.vertices.len() as u32;
        for (rr, y) in [(r_bottom, y_bottom), (r_top, y_top)] {
            for j in 0..segments {
                let phi = std::f64::consts::TAU * j as f64 / segments as f64;
                self.vertices.push(Vector3::new(
                    axis_x + phi.sin() * rr,
                    y,
                    axis_z + phi.cos() * rr,
                ));
            }
        }
        let s = segments as u32;
        let bot = |j: usize| base + (j % segments) as u32;
        let top = |j: usize| base + s + (j % segments) as u32;
        for j in 0..segments {
            self.push_face(bot(j), bot(j + 1), top(j + 1));
            self.push_face(bot(j), top(j + 1), top(j));
        }
        if caps {
            self.vertices.push(Vector3::new(axis_x, y_bottom, axis_z));
            let bc = (self.vertices.len() - 1) as u32;
            self.vertices.push(Vector3::new(axis_x, y_top, axis_z));
            let tc = (self.vertices.len() - 1) as u32;
            for j in 0..segments {
                self.push_face(bc, bot(j + 1), bot(j));
                self.push_face(tc, top(j), top(j + 1));
            }
        }
    }

    fn add_box(&mut self, min: Vector3<f64>, max: Vector3<f64>) {
        let base = self.vertices.len() as u32;
        for z in [min.z, max.z] {
            for y in [min.y, max.y] {
                for x in [min.x, max.x] {
                    self.vertices.push(Vector3::new(x, y, z));
                }
            }
        }
        // outward-wound quads of a unit box (vertex order: x fastest, then y, z)
        let quads: [[u32; 4]; 6] = [
            [0, 2, 3, 1], // z = min (back)
            [4, 5, 7, 6], // z = max (front)
            [0, 1, 5, 4], // y = min
            [2, 6, 7, 3], // y = max
            [0, 4, 6, 2], // x = min
            [1, 3, 7, 5], // x = max
        ];
        for q in quads {
            self.push_face(base + q[0], base + q[1], base + q[2]);
            self.push_face(base + q[0], base + q[2], base + q[3]);
        }
    }
}

/// Two separated spheres: a larger "body" on -x and a smaller "handle" on +x.
///
/// The gap between them keeps grounding-grid cells single-part away from the
/// silhouettes. `rings`/`segments` control per-sphere resolution
/// (vertex count per sphere: `2 + (rings-1)*segments`).
pub fn dumbbell(rings: usize, segments: usize) -> PartitionedMesh {
    let mut b = Builder::default();
    b.begin_part("body", &["torso"]);
    b.add_sphere(Vector3::new(-0.5, 0.0, 0.0), 0.4, rings, segments);
    b.begin_part("handle", &["grip", "holder"]);
    b.add_sphere(Vector3::new(0.55, 0.0, 0.0), 0.3, rings, segments);
    b.build()
}

/// A lamp-like fixture: wide flat `base`, thin vertical `tube`, open conical
/// `shade`. From a near-top-down view the tube projects to only a few pixels,
/// exercising small-box omission; side views see it clearly.
pub fn lamp(segments: usize) -> PartitionedMesh {
    let mut b = Builder::default();
    b.begin_part("base", &[]);
    b.add_cone(0.0, 0.0, 0.5, -0.55, 0.5, -0.45, segments, true);
    b.begin_part("tube", &[]);
    b.add_cone(0.0, 0.0, 0.02, -0.45, 0.02, 0.3, segments, true);
    b.begin_part("shade", &[]);
    b.add_cone(0.0, 0.0, 0.45, 0.25, 0.12, 0.6, segments, false);
    b.build()
}

/// A cube `shell` fully containing a smaller `core` cube: the core is
/// invisible from every outside viewpoint.
pub fn nested_cubes() -> PartitionedMesh {
    let mut b = Builder::default();
    b.begin_part("shell", &[]);
    b.add_box(Vector3::new(-0.5, -0.5, -0.5), Vector3::new(0.5, 0.5, 0.5));
    b.begin_part("core", &[]);
    b.add_box(Vector3::new(-0.15, -0.15, -0.15), Vector3::new(0.15, 0.15, 0.15));
    b.build()
}

/// A toy grounding whose part vocabulary is deliberately misaligned: every
/// part word points at the next part's palette color, so detection misses
/// until prompt offsets are tuned.
pub fn rotated_palette_toy(mesh: &PartitionedMesh, grid_stride: u32) -> ToyGrounding {
    let mut toy = ToyGrounding::for_mesh(mesh, grid_stride);
    let n = mesh.part_count();
    for (i, name) in mesh.part_names().iter().enumerate() {
        toy.register_word(name, part_palette((i + 1) % n));
        for syn in mesh.part_synonyms(i) {
            toy.register_word(syn, part_palette((i + 1) % n));
        }
    }
    toy
}

/// One sphere, one part ("body").
pub fn sphere(rings: usize, segments: usize) -> PartitionedMesh {
    let mut b = Builder::default();
    b.begin_part("body", &[]);
    b.add_sphere(Vector3::new(0.0, 0.0, 0.0), 0.5, rings, segments);
    b.build()
}

/// Single-part cube.
pub fn cube() -> PartitionedMesh {
    let mut b = Builder::default();
    b.begin_part("cube", &[]);
    b.add_box(Vector3::new(-0.5, -0.5, -0.5), Vector3::new(0.5, 0.5, 0.5));
    b.build()
}

/// One triangle facing +z.
pub fn single_triangle() -> PartitionedMesh {
    let vertices = vec![
        Vector3::new(-0.8, -0.6, 0.0),
        Vector3::new(0.8, -0.6, 0.0),
        Vector3::new(0.0, 0.9, 0.0),
    ];
    let faces = vec![[0u32, 1, 2]];
    let parts = vec![PartSpec { name: "face".into(), synonyms: vec![], faces: vec![0] }];
    PartitionedMesh::new(vertices, faces, parts).expect("triangle fixture is valid")
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn dumbbell_has_expected_counts_and_parts() {
        let m = dumbbell(4, 6);
        let per_sphere = 2 + 3 * 6;
        assert_eq!(m.vertices().len(), 2 * per_sphere);
        assert_eq!(m.part_names(), &["body".to_string(), "handle".to_string()]);
        assert_eq!(m.resolve_part("grip"), Some(1));
        // every face labeled, both parts non-empty
        assert_eq!(m.face_parts().len(), m.faces().len());
        assert!(!m.part_vertices(0).is_empty());
        assert!(!m.part_vertices(1).is_empty());
    }

    #[test]
    fn fixtures_are_normalized() {
        for m in [dumbbell(5, 8), lamp(10), nested_cubes(), cube(), single_triangle()] {
            let centroid: Vector3<f64> =
                m.vertices().iter().sum::<Vector3<f64>>() / m.vertices().len() as f64;
            assert!(centroid.norm() < 1e-9, "centroid {centroid:?}");
            let r = m.vertices().iter().map(|v| v.norm()).fold(0.0f64, f64::max);
            assert!((r - 1.0).abs() < 1e-9, "radius {r}");
        }
    }

    #[test]
    fn sphere_normals_point_outward() {
        let m = dumbbell(6, 10);
        // body sphere sits left of the origin after normalization; its
        // vertices' normals should point away from the body center
        let body_verts = m.part_vertices(0);
        let center: Vector3<f64> =
            body_verts.iter().map(|&i| m.vertices()[i]).sum::<Vector3<f64>>()
                / body_verts.len() as f64;
        for &vi in &body_verts {
            let out = (m.vertices()[vi] - center).normalize();
            assert!(m.vertex_normals()[vi].dot(&out) > 0.3, "normal at {vi} not outward");
        }
    }
}
