//! Crate-level error with a short machine code per failure class.

use std::path::{Path, PathBuf};

use thiserror::Error;

use crate::codegen::CodegenError;
use crate::compose::ComposeError;
use crate::ir::{build_ir, IrError, ModelIR};
use crate::mnist::IdxError;
use crate::onnx::{decode_json_mirror, decode_onnx, IngestError, RawModel};
use crate::quant::QuantError;
use crate::sim::SimError;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("{0}")]
    Usage(String),
    #[error("cannot access {path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error(transparent)]
    Ingest(#[from] IngestError),
    #[error(transparent)]
    Ir(#[from] IrError),
    #[error(transparent)]
    Quant(#[from] QuantError),
    #[error(transparent)]
    Sim(#[from] SimError),
    #[error(transparent)]
    Compose(#[from] ComposeError),
    #[error(transparent)]
    Codegen(#[from] CodegenError),
    #[error(transparent)]
    Idx(#[from] IdxError),
    #[error("{0}")]
    Explore(String),
    #[error("{0}")]
    Format(String),
}

impl Error {
    /// Stable short code printed as `error[code]`.
    pub fn code(&self) -> &'static str {
        match self {
            Error::Usage(_) => "usage",
            Error::Io { .. } => "io",
            Error::Ingest(_) => "ingest",
            Error::Ir(_) => "ir",
            Error::Quant(QuantError::MalformedDatatype(_)) => "usage",
            Error::Quant(_) => "quant",
            Error::Sim(_) => "sim",
            Error::Compose(_) => "compose",
            Error::Codegen(_) => "codegen",
            Error::Idx(_) => "idx",
            Error::Explore(_) => "explore",
            Error::Format(_) => "format",
        }
    }

    /// 1 for usage errors, 2 for everything else.
    pub fn exit_code(&self) -> i32 {
        if self.code() == "usage" {
            1
        } else {
            2
        }
    }

    pub fn io(path: &Path, source: std::io::Error) -> Self {
        Error::Io {
            path: path.to_path_buf(),
            source,
        }
    }
}

/// Reads an ONNX protobuf, or its JSON mirror when the extension is `.json`.
pub fn load_raw_model(path: &Path) -> Result<RawModel> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    let is_json = path.extension().is_some_and(|e| e.eq_ignore_ascii_case("json"));
    if is_json {
        let text = String::from_utf8(bytes).map_err(|e| Error::Format(format!("{}: {e}", path.display())))?;
        Ok(decode_json_mirror(&text)?)
    } else {
        Ok(decode_onnx(&bytes)?)
    }
}

pub fn load_model(path: &Path) -> Result<ModelIR> {
    Ok(build_ir(&load_raw_model(path)?)?)
}
