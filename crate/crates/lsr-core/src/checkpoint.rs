//! Flat binary checkpoint: configs in the header, then every parameter
//! with its shape, trainable flag, and f64 values.
//!
//! Layout (little-endian):
//!
//! ```text
//! magic "LSRCKPT1" | version u32
//! config text: len u64, utf8 ([encoder] + [adapter] sections)
//! param count u64
//! per param: name (len u32, utf8) | rows u64 | cols u64 | trainable u8 |
//!            rows*cols x f64
//! ```

use std::io::Write;
use std::path::Path;

use crate::config::{adapter_from_map, adapter_to_map, encoder_from_map, encoder_to_map, ConfigMap};
use crate::encoder::{AdapterConfig, EncoderConfig};
use crate::linalg::Matrix;
use crate::tape::ParameterStore;
use crate::{Error, Result};

const MAGIC: &[u8; 8] = b"LSRCKPT1";
const VERSION: u32 = 1;

/// A loaded checkpoint: the configs plus all parameter values and flags.
#[derive(Debug, Clone)]
pub struct Checkpoint {
    pub encoder: EncoderConfig,
    pub adapters: AdapterConfig,
    pub store: ParameterStore,
}

pub fn save_checkpoint(
    path: &Path,
    encoder: &EncoderConfig,
    adapters: &AdapterConfig,
    store: &ParameterStore,
) -> Result<()> {
    let mut map = ConfigMap::new();
    encoder_to_map(encoder, &mut map);
    adapter_to_map(adapters, &mut map);
    let header = map.to_text();

    let mut out = std::io::BufWriter::new(std::fs::File::create(path)?);
    out.write_all(MAGIC)?;
    out.write_all(&VERSION.to_le_bytes())?;
    out.write_all(&(header.len() as u64).to_le_bytes())?;
    out.write_all(header.as_bytes())?;
    out.write_all(&(store.len() as u64).to_le_bytes())?;
    for (name, param) in store.iter() {
        out.write_all(&(name.len() as u32).to_le_bytes())?;
        out.write_all(name.as_bytes())?;
        out.write_all(&(param.value.rows() as u64).to_le_bytes())?;
        out.write_all(&(param.value.cols() as u64).to_le_bytes())?;
        out.write_all(&[u8::from(param.trainable)])?;
        for v in param.value.data() {
            out.write_all(&v.to_le_bytes())?;
        }
    }
    out.flush()?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    let bytes = std::fs::read(path)?;
    let mut pos = 0usize;
    let take = |pos: &mut usize, n: usize| -> Result<&[u8]> {
        if *pos + n > bytes.len() {
            return Err(Error::FileFormat(format!(
                "{}: truncated checkpoint (wanted {n} bytes at offset {pos})",
                path.display(),
                pos = *pos
            )));
        }
        let out = &bytes[*pos..*pos + n];
        *pos += n;
        Ok(out)
    };

    if take(&mut pos, 8)? != MAGIC {
        return Err(Error::FileFormat(format!(
            "{}: bad magic, not a checkpoint",
            path.display()
        )));
    }
    let version = u32::from_le_bytes(take(&mut pos, 4)?.try_into().expect("4 bytes"));
    if version != VERSION {
        return Err(Error::FileFormat(format!(
            "{}: unsupported checkpoint version {version} (expected {VERSION})",
            path.display()
        )));
    }
    let header_len = u64::from_le_bytes(take(&mut pos, 8)?.try_into().expect("8 bytes")) as usize;
    let header = std::str::from_utf8(take(&mut pos, header_len)?)
        .map_err(|_| Error::FileFormat(format!("{}: header is not utf-8", path.display())))?
        .to_string();
    let map = ConfigMap::parse(&header)?;
    let encoder = encoder_from_map(&map)?;
    let adapters = adapter_from_map(&map, encoder.num_layers)?;

    let count = u64::from_le_bytes(take(&mut pos, 8)?.try_into().expect("8 bytes")) as usize;
    let mut store = ParameterStore::new();
    for _ in 0..count {
        let name_len = u32::from_le_bytes(take(&mut pos, 4)?.try_into().expect("4 bytes")) as usize;
        let name = std::str::from_utf8(take(&mut pos, name_len)?)
            .map_err(|_| {
                Error::FileFormat(format!("{}: parameter name is not utf-8", path.display()))
            })?
            .to_string();
        let rows = u64::from_le_bytes(take(&mut pos, 8)?.try_into().expect("8 bytes")) as usize;
        let cols = u64::from_le_bytes(take(&mut pos, 8)?.try_into().expect("8 bytes")) as usize;
        let trainable = take(&mut pos, 1)?[0] != 0;
        let raw = take(&mut pos, rows * cols * 8)?;
        let data: Vec<f64> = raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect();
        store.insert(name, Matrix::from_vec(rows, cols, data)?, trainable);
    }
    Ok(Checkpoint {
        encoder,
        adapters,
        store,
    })
}
