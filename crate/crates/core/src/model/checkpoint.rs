//! `PLR1` checkpoint files: magic, a little-endian u64 header length, a JSON
//! header (configuration and tensor manifest), then raw little-endian f32.

use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{PlrConfig, PlrParams};
use crate::error::{PlrError, Result};
use crate::tensor::Tensor;

const MAGIC: &[u8; 4] = b"PLR1";
const FORMAT_VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
struct Entry {
    name: String,
    shape: Vec<usize>,
    /// Byte offset into the payload.
    offset: usize,
}

#[derive(Serialize, Deserialize)]
struct Header {
    format_version: u32,
    config: PlrConfig,
    tensors: Vec<Entry>,
}

pub fn write_checkpoint(
    mut out: impl Write,
    params: &PlrParams<f32>,
    config: &PlrConfig,
) -> Result<()> {
    params.check_shapes(config)?;
    let mut offset = 0;
    let tensors = params
        .names()
        .into_iter()
        .zip(params.flat())
        .map(|(name, t)| {
            let e = Entry {
                name,
                shape: t.shape().to_vec(),
                offset,
            };
            offset += 4 * t.len();
            e
        })
        .collect();
    let header = serde_json::to_vec(&Header {
        format_version: FORMAT_VERSION,
        config: config.clone(),
        tensors,
    })?;
    out.write_all(MAGIC)?;
    out.write_all(&(header.len() as u64).to_le_bytes())?;
    out.write_all(&header)?;
    for t in params.flat() {
        let mut buf = Vec::with_capacity(4 * t.len());
        for v in t.data() {
            buf.extend_from_slice(&v.to_le_bytes());
        }
        out.write_all(&buf)?;
    }
    Ok(())
}

pub fn read_checkpoint(mut input: impl Read) -> Result<(PlrParams<f32>, PlrConfig)> {
    let mut bytes = Vec::new();
    input.read_to_end(&mut bytes)?;
    if bytes.len() < 12 || &bytes[..4] != MAGIC {
        return Err(PlrError::Format("missing PLR1 magic bytes".into()));
    }
    let header_len = u64::from_le_bytes(bytes[4..12].try_into().unwrap()) as usize;
    let body = &bytes[12..];
    if body.len() < header_len {
        return Err(PlrError::Format("truncated header".into()));
    }
    let header: Header = serde_json::from_slice(&body[..header_len])
        .map_err(|e| PlrError::Format(format!("unreadable header: {e}")))?;
    if header.format_version != FORMAT_VERSION {
        return Err(PlrError::Format(format!(
            "format version {} is not supported (expected {FORMAT_VERSION})",
            header.format_version
        )));
    }
    header.config.validate()?;
    let payload = &body[header_len..];
    let layout = PlrParams::<f32>::layout(&header.config);
    if layout.len() != header.tensors.len() {
        return Err(PlrError::Format(format!(
            "manifest lists {} tensors, configuration needs {}",
            header.tensors.len(),
            layout.len()
        )));
    }
    let mut tensors = Vec::with_capacity(layout.len());
    for ((name, shape), entry) in layout.into_iter().zip(&header.tensors) {
        if entry.name != name {
            return Err(PlrError::Format(format!(
                "manifest has `{}` where `{name}` belongs",
                entry.name
            )));
        }
        if entry.shape != shape {
            return Err(PlrError::CheckpointShape {
                name,
                found: entry.shape.clone(),
                expected: shape,
            });
        }
        let len: usize = shape.iter().product();
        let end = entry.offset + 4 * len;
        if end > payload.len() {
            return Err(PlrError::Format(format!(
                "payload truncated inside `{name}`"
            )));
        }
        let data = payload[entry.offset..end]
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
            .collect();
        tensors.push(Tensor::new(shape, data)?);
    }
    let params = PlrParams::from_flat(header.config.layers, tensors)?;
    if !params.is_finite() {
        return Err(PlrError::NonFinite("checkpoint payload".into()));
    }
    Ok((params, header.config))
}

pub fn save_checkpoint(params: &PlrParams<f32>, config: &PlrConfig, path: &Path) -> Result<()> {
    let mut buf = Vec::new();
    write_checkpoint(&mut buf, params, config)?;
    fs::write(path, buf)?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<(PlrParams<f32>, PlrConfig)> {
    read_checkpoint(fs::File::open(path)?)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> (PlrParams<f32>, PlrConfig, Vec<u8>) {
        let cfg = PlrConfig {
            d: 8,
            vocab_size: 30,
            ..Default::default()
        };
        let p = PlrParams::init(&cfg, 5).unwrap();
        let mut buf = Vec::new();
        write_checkpoint(&mut buf, &p, &cfg).unwrap();
        (p, cfg, buf)
    }

    #[test]
    fn round_trip_is_bit_exact() {
        let (p, cfg, buf) = sample();
        let (q, cfg2) = read_checkpoint(buf.as_slice()).unwrap();
        assert_eq!(cfg, cfg2);
        for (a, b) in p.flat().into_iter().zip(q.flat()) {
            let bits = |t: &Tensor<f32>| t.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
            assert_eq!(bits(a), bits(b));
        }
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.plr");
        save_checkpoint(&p, &cfg, &path).unwrap();
        assert_eq!(fs::read(&path).unwrap(), buf);
        assert_eq!(load_checkpoint(&path).unwrap().0, p);
    }

    #[test]
    fn corrupt_magic_is_a_format_error() {
        let (_, _, mut buf) = sample();
        buf[0] = b'X';
        assert!(matches!(
            read_checkpoint(buf.as_slice()),
            Err(PlrError::Format(_))
        ));
    }

    #[test]
    fn truncation_is_detected() {
        let (_, _, buf) = sample();
        let cut = &buf[..buf.len() - 10];
        assert!(matches!(read_checkpoint(cut), Err(PlrError::Format(_))));
        assert!(matches!(
            read_checkpoint(&buf[..20]),
            Err(PlrError::Format(_))
        ));
    }

    #[test]
    fn declared_vocab_mismatch_names_the_tensor() {
        let (_, _, buf) = sample();
        let header_len = u64::from_le_bytes(buf[4..12].try_into().unwrap()) as usize;
        let header = std::str::from_utf8(&buf[12..12 + header_len]).unwrap();
        let edited = header.replace("\"vocab_size\":30", "\"vocab_size\":31");
        assert_ne!(edited, header);
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&(edited.len() as u64).to_le_bytes());
        out.extend_from_slice(edited.as_bytes());
        out.extend_from_slice(&buf[12 + header_len..]);
        match read_checkpoint(out.as_slice()).unwrap_err() {
            PlrError::CheckpointShape { name, .. } => assert_eq!(name, "item_embeddings"),
            e => panic!("{e:?}"),
        }
    }

    #[test]
    fn version_mismatch_rejected() {
        let (_, _, buf) = sample();
        let header_len = u64::from_le_bytes(buf[4..12].try_into().unwrap()) as usize;
        let header = std::str::from_utf8(&buf[12..12 + header_len]).unwrap();
        let edited = header.replace("\"format_version\":1", "\"format_version\":2");
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&(edited.len() as u64).to_le_bytes());
        out.extend_from_slice(edited.as_bytes());
        out.extend_from_slice(&buf[12 + header_len..]);
        assert!(matches!(
            read_checkpoint(out.as_slice()),
            Err(PlrError::Format(_))
        ));
    }
}
