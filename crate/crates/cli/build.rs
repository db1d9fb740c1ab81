//! Hashes the workspace sources so every run can record the exact code it
//! came from.

use std::path::{Path, PathBuf};

use sha2::{Digest, Sha256};
use walkdir::WalkDir;

fn main() {
    let here = PathBuf::from(std::env::var("CARGO_MANIFEST_DIR").expect("manifest dir"));
    let root = here.join("../..");
    let mut files: Vec<PathBuf> = Vec::new();
    for dir in ["crates/core/src", "crates/core/resources", "crates/cli/src"] {
        let d = root.join(dir);
        println!("cargo:rerun-if-changed={}", d.display());
        files.extend(WalkDir::new(&d).into_iter().filter_map(Result::ok).filter(|e| e.file_type().is_file()).map(|e| e.into_path()));
    }
    for f in ["Cargo.toml", "crates/core/Cargo.toml", "crates/cli/Cargo.toml", "crates/cli/build.rs"] {
        let p = root.join(f);
        println!("cargo:rerun-if-changed={}", p.display());
        files.push(p);
    }
    let rel = |p: &Path| p.strip_prefix(&root).unwrap_or(p).to_string_lossy().replace('\\', "/");
    files.sort_by_key(|p| rel(p));
    // Tree hash in the git style: each file contributes its path and the
    // digest of a "blob <len>\0" header plus its bytes.
    let mut tree = Sha256::new();
    for p in &files {
        let bytes = std::fs::read(p).unwrap_or_default();
        let mut blob = Sha256::new();
        blob.update(format!("blob {}\0", bytes.len()).as_bytes());
        blob.update(&bytes);
        tree.update(rel(p).as_bytes());
        tree.update([0u8]);
        tree.update(blob.finalize());
    }
    let hex: String = tree.finalize().iter().map(|b| format!("{b:02x}")).collect();
    println!("cargo:rustc-env=OPENVOCAB_SOURCE_HASH={hex}");
}
