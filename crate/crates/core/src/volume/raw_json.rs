//! Self-describing JSON volume format used for tests and synthetic data.
//!
//! ```json
//! {"format": "bpreg-raw", "dims": [nx, ny, nz], "spacing": [sx, sy, sz],
//!  "dtype": "int16", "encoding": "base64", "data": "<little-endian bytes>"}
//! ```
//!
//! `dtype` is `int16` or `float32`. Instead of `encoding`/`data` a plain
//! `values` array may be given. Voxels are ordered x fastest, then y, then z.

use std::path::Path;

use base64::engine::general_purpose::STANDARD;
use base64::Engine;
use serde::{Deserialize, Serialize};

use super::{to_stored_hu, RawVolume};
use crate::error::{BpregError, Result};

pub const RAW_FORMAT_TAG: &str = "bpreg-raw";

#[derive(Debug, Serialize, Deserialize)]
struct RawHeader {
    #[serde(default)]
    format: Option<String>,
    dims: [usize; 3],
    spacing: [f64; 3],
    #[serde(default = "default_dtype")]
    dtype: String,
    #[serde(default)]
    encoding: Option<String>,
    #[serde(default)]
    data: Option<String>,
    #[serde(default)]
    values: Option<Vec<f64>>,
}

fn default_dtype() -> String {
    "int16".to_string()
}

pub fn load_raw_json(path: &Path) -> Result<RawVolume> {
    let text = std::fs::read_to_string(path).map_err(|e| BpregError::io(path, e))?;
    let header: RawHeader =
        serde_json::from_str(&text).map_err(|e| BpregError::format(path, e.to_string()))?;
    if let Some(tag) = &header.format {
        if tag != RAW_FORMAT_TAG {
            return Err(BpregError::format(path, format!("unknown format tag {tag:?}")));
        }
    }
    let n: usize = header.dims.iter().product();
    let voxels: Vec<i16> = match (&header.values, &header.data) {
        (Some(values), _) => values.iter().map(|&v| to_stored_hu(v)).collect(),
        (None, Some(data)) => {
            match header.encoding.as_deref() {
                None | Some("base64") => {}
                Some(other) => {
                    return Err(BpregError::format(path, format!("unsupported encoding {other}")))
                }
            }
            let bytes = STANDARD
                .decode(data.as_bytes())
                .map_err(|e| BpregError::format(path, e.to_string()))?;
            decode_payload(&bytes, &header.dtype).map_err(|r| BpregError::format(path, r))?
        }
        (None, None) => return Err(BpregError::format(path, "missing voxel payload")),
    };
    if voxels.len() != n {
        return Err(BpregError::format(
            path,
            format!("dims {:?} need {n} voxels, payload has {}", header.dims, voxels.len()),
        ));
    }
    let vol = RawVolume {
        dims: header.dims,
        spacing: header.spacing,
        voxels,
    };
    vol.check().map_err(|r| BpregError::format(path, r))?;
    Ok(vol)
}

fn decode_payload(bytes: &[u8], dtype: &str) -> std::result::Result<Vec<i16>, String> {
    match dtype {
        "int16" => {
            if bytes.len() % 2 != 0 {
                return Err("int16 payload has odd byte count".into());
            }
            Ok(bytes
                .chunks_exact(2)
                .map(|c| i16::from_le_bytes([c[0], c[1]]))
                .collect())
        }
        "float32" => {
            if bytes.len() % 4 != 0 {
                return Err("float32 payload length not a multiple of 4".into());
            }
            Ok(bytes
                .chunks_exact(4)
                .map(|c| to_stored_hu(f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64))
                .collect())
        }
        other => Err(format!("unsupported dtype {other}")),
    }
}

pub fn save_raw_json(vol: &RawVolume, path: &Path) -> Result<()> {
    let bytes: Vec<u8> = vol.voxels.iter().flat_map(|v| v.to_le_bytes()).collect();
    let header = RawHeader {
        format: Some(RAW_FORMAT_TAG.to_string()),
        dims: vol.dims,
        spacing: vol.spacing,
        dtype: default_dtype(),
        encoding: Some("base64".to_string()),
        data: Some(STANDARD.encode(bytes)),
        values: None,
    };
    let text = serde_json::to_string(&header)?;
    std::fs::write(path, text).map_err(|e| BpregError::io(path, e))
}
