//! Notebook (nbformat 4.5) export of a session trace.

use std::path::{Path, PathBuf};

use base64::Engine;
use serde::{Deserialize, Serialize};
use serde_json::{json, Map, Value};
use thiserror::Error;

use crate::cell::{Cell, CellKind, CellOutput, OutputChannel};

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct SessionMeta {
    pub session_id: String,
    pub model: String,
    pub language: String,
    /// Where relative output payload paths are resolved.
    #[serde(skip)]
    pub workdir: Option<PathBuf>,
}

#[derive(Debug, Error)]
pub enum SerializationError {
    #[error("output payload {path} could not be read: {source}")]
    Payload {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("rich output with binary media type {0} has no payload")]
    MissingPayload(String),
    #[error("cell id {0:?} is not a valid notebook cell id")]
    BadCellId(String),
}

fn is_textual(mime: &str) -> bool {
    mime.starts_with("text/") || mime == "application/json" || mime.ends_with("+json") || mime == "image/svg+xml"
}

fn valid_cell_id(id: &str) -> bool {
    (1..=64).contains(&id.len()) && id.chars().all(|c| c.is_ascii_alphanumeric() || c == '-' || c == '_')
}

fn output_json(out: &CellOutput, workdir: Option<&Path>) -> Result<Value, SerializationError> {
    Ok(match out.channel {
        OutputChannel::Stdout | OutputChannel::Stderr => json!({
            "output_type": "stream",
            "name": if out.channel == OutputChannel::Stdout { "stdout" } else { "stderr" },
            "text": out.text,
        }),
        OutputChannel::Error => json!({
            "output_type": "error",
            "ename": out.error_name.clone().unwrap_or_default(),
            "evalue": out.error_value.clone().unwrap_or_default(),
            "traceback": out.traceback.clone().unwrap_or_default(),
        }),
        OutputChannel::Rich => {
            let mime = out.mime.clone().unwrap_or_else(|| "text/plain".into());
            let mut data = Map::new();
            if is_textual(&mime) {
                data.insert(mime, Value::String(out.text.clone()));
            } else {
                let rel = out
                    .payload_path
                    .as_ref()
                    .ok_or_else(|| SerializationError::MissingPayload(mime.clone()))?;
                let full = workdir.map(|w| w.join(rel)).unwrap_or_else(|| PathBuf::from(rel));
                let bytes = std::fs::read(&full).map_err(|source| SerializationError::Payload {
                    path: rel.clone(),
                    source,
                })?;
                data.insert(mime, Value::String(base64::engine::general_purpose::STANDARD.encode(bytes)));
                data.insert("text/plain".into(), Value::String(format!("<{rel}>")));
            }
            json!({ "output_type": "display_data", "data": data, "metadata": {} })
        }
    })
}

/// Builds an nbformat 4.5 document from an ordered cell trace.
pub fn export_notebook(trace: &[Cell], meta: &SessionMeta) -> Result<Value, SerializationError> {
    let mut cells = Vec::with_capacity(trace.len());
    let mut count = 0u64;
    for cell in trace {
        if !valid_cell_id(cell.id.as_str()) {
            return Err(SerializationError::BadCellId(cell.id.0.clone()));
        }
        match cell.kind {
            CellKind::Markdown => cells.push(json!({
                "cell_type": "markdown",
                "id": cell.id.as_str(),
                "metadata": {},
                "source": cell.source,
            })),
            CellKind::Code => {
                let outputs = cell
                    .outputs
                    .iter()
                    .map(|o| output_json(o, meta.workdir.as_deref()))
                    .collect::<Result<Vec<_>, _>>()?;
                count += 1;
                cells.push(json!({
                    "cell_type": "code",
                    "id": cell.id.as_str(),
                    "metadata": { "origin_stage": cell.origin_stage },
                    "source": cell.source,
                    "execution_count": count,
                    "outputs": outputs,
                }));
            }
        }
    }
    let language = if meta.language.is_empty() { "python" } else { meta.language.as_str() };
    Ok(json!({
        "cells": cells,
        "metadata": {
            "kernelspec": { "name": "python3", "display_name": "Python 3", "language": language },
            "language_info": { "name": language },
            "cellwise": { "session_id": meta.session_id, "model": meta.model },
        },
        "nbformat": 4,
        "nbformat_minor": 5,
    }))
}
