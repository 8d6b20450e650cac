//! Writes the two-part dumbbell fixture to disk so the CLI has a mesh to
//! work on:
//!
//! ```text
//! cargo run --example make_dumbbell -- /tmp/dumbbell
//! cargo run -- stylize --mesh /tmp/dumbbell.obj \
//!     --prompt "red body, blue handle" --backend toy --iters 200 \
//!     --image-size 128 --out /tmp/runs
//! ```

use std::path::PathBuf;

use partstyle::fixtures;
use partstyle::mesh::{part_specs, write_obj, write_parts_sidecar};

fn main() {
    let stem = std::env::args().nth(1).unwrap_or_else(|| "dumbbell".to_string());
    let mesh = fixtures::dumbbell(12, 16);

    let obj_path = PathBuf::from(format!("{stem}.obj"));
    let parts_path = PathBuf::from(format!("{stem}.parts.toml"));
    write_obj(&mesh, &obj_path).expect("cannot write the obj file");
    write_parts_sidecar(&parts_path, &part_specs(&mesh)).expect("cannot write the sidecar");

    println!(
        "wrote {} ({} vertices, {} faces) and {}",
        obj_path.display(),
        mesh.vertices().len(),
        mesh.faces().len(),
        parts_path.display(),
    );
}
