//! Emission of HLS-flow artifacts for a dataflow graph.
//!
//! A bundle holds one C++ source per actor (`src/<actor>.cpp`), a synthesis
//! driver (`build.tcl`), the topology as XDF (`topology.xdf`) and one
//! interface descriptor per actor class (`actors/<Class>.actor`). Generation
//! is pure text; writing to disk goes through temp files renamed into place.

mod templates;
mod xdf;

use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use thiserror::Error;

use crate::quant::QuantizedModel;
use crate::sim::DataflowGraph;

pub use templates::{embedded_parameter_bits, parameter_table};
pub use xdf::{parse_topology, write_topology};

#[derive(Debug, Error)]
pub enum CodegenError {
    #[error("cannot write {path}: {source}")]
    IoFailure {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error("parameter code {code} of '{actor}' does not fit {bits} bits")]
    UnrepresentableParameter { actor: String, code: i32, bits: u32 },
    #[error("schema violation: {0}")]
    SchemaViolation(String),
    #[error("graph does not match model: {0}")]
    ModelMismatch(String),
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct EmissionBundle {
    /// Keyed by path relative to the emission root, e.g. `src/conv0.cpp`.
    pub layer_sources: BTreeMap<String, String>,
    pub build_script: String,
    pub topology_xdf: String,
    /// Keyed by actor class.
    pub actor_descriptors: BTreeMap<String, String>,
}

pub const BUILD_SCRIPT: &str = "build.tcl";
pub const TOPOLOGY_FILE: &str = "topology.xdf";

/// Identifier-safe form of an actor name.
pub fn ident(name: &str) -> String {
    let mut s: String = name
        .chars()
        .map(|c| if c.is_ascii_alphanumeric() || c == '_' { c } else { '_' })
        .collect();
    if s.is_empty() || s.starts_with(|c: char| c.is_ascii_digit()) {
        s.insert(0, '_');
    }
    s
}

pub fn source_path(actor: &str) -> String {
    format!("src/{}.cpp", ident(actor))
}

pub fn descriptor_path(class: &str) -> String {
    format!("actors/{class}.actor")
}

impl EmissionBundle {
    /// Every file of the bundle as `(relative path, contents)`, sorted by path.
    pub fn files(&self) -> BTreeMap<String, &str> {
        let mut files: BTreeMap<String, &str> = BTreeMap::new();
        for (k, v) in &self.layer_sources {
            files.insert(k.clone(), v);
        }
        for (class, v) in &self.actor_descriptors {
            files.insert(descriptor_path(class), v);
        }
        files.insert(BUILD_SCRIPT.to_string(), &self.build_script);
        files.insert(TOPOLOGY_FILE.to_string(), &self.topology_xdf);
        files
    }

    /// Writes the bundle under `root`, replacing existing files atomically.
    pub fn write_to(&self, root: &Path) -> Result<(), CodegenError> {
        for (rel, text) in self.files() {
            write_atomic(&root.join(rel), text.as_bytes())?;
        }
        Ok(())
    }
}

/// Writes through a temp file in the destination directory, then renames.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<(), CodegenError> {
    let io = |source| CodegenError::IoFailure {
        path: path.to_path_buf(),
        source,
    };
    let dir = match path.parent() {
        Some(d) if !d.as_os_str().is_empty() => d,
        _ => Path::new("."),
    };
    fs::create_dir_all(dir).map_err(io)?;
    let mut tmp = tempfile::NamedTempFile::new_in(dir).map_err(io)?;
    tmp.write_all(bytes).map_err(io)?;
    tmp.persist(path).map_err(|e| io(e.error))?;
    Ok(())
}

/// Generates the bundle for `graph` and, when `outdir` is given, writes it.
pub fn emit(graph: &DataflowGraph, model: &QuantizedModel, outdir: Option<&Path>) -> Result<EmissionBundle, CodegenError> {
    graph
        .validate()
        .map_err(|e| CodegenError::ModelMismatch(e.to_string()))?;
    if graph.parameter_bits() != model.param_bits {
        return Err(CodegenError::ModelMismatch(format!(
            "graph stores {} parameter bits, model has {}",
            graph.parameter_bits(),
            model.param_bits
        )));
    }
    let mut layer_sources = BTreeMap::new();
    let mut build_script = format!("# synthesis driver for {}\n", graph.name);
    for actor in &graph.actors {
        let path = source_path(&actor.name);
        layer_sources.insert(path.clone(), templates::actor_source(actor)?);
        build_script.push_str(&format!("synth {path} -top {}\n", ident(&actor.name)));
    }
    let mut by_class: BTreeMap<&str, Vec<&crate::sim::Actor>> = BTreeMap::new();
    for a in &graph.actors {
        by_class.entry(a.kind.class()).or_default().push(a);
    }
    let actor_descriptors = by_class
        .into_iter()
        .map(|(class, actors)| (class.to_string(), templates::descriptor(class, &actors)))
        .collect();
    let bundle = EmissionBundle {
        layer_sources,
        build_script,
        topology_xdf: write_topology(&graph.skeleton()),
        actor_descriptors,
    };
    if let Some(root) = outdir {
        bundle.write_to(root)?;
    }
    Ok(bundle)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn identifiers_are_sanitized() {
        assert_eq!(ident("conv0"), "conv0");
        assert_eq!(ident("/conv1/Conv"), "_conv1_Conv");
        assert_eq!(ident("3x"), "_3x");
    }

    #[test]
    fn atomic_write_replaces_file() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("a/b.txt");
        write_atomic(&p, b"one").unwrap();
        write_atomic(&p, b"two").unwrap();
        assert_eq!(fs::read_to_string(&p).unwrap(), "two");
        assert_eq!(fs::read_dir(dir.path().join("a")).unwrap().count(), 1);
    }
}
