//! The IDX container used by the MNIST family.
//!
//! Layout: two zero bytes, a type byte (`0x08` = unsigned byte), a rank
//! byte, then `rank` big-endian `u32` extents followed by the payload.
//! Images are rank 3 (`0x00000803`), labels rank 1 (`0x00000801`).

use std::fs::File;
use std::io::Read;
use std::path::Path;

use flate2::read::GzDecoder;

use super::{DataError, ImageSet};
use crate::tensor::Tensor;

const IMAGES_MAGIC: u32 = 0x0000_0803;
const LABELS_MAGIC: u32 = 0x0000_0801;

#[derive(Clone, Debug, PartialEq)]
pub enum IdxData {
    /// `[N, 1, rows, cols]`, raw byte values as reals.
    Images(Tensor),
    Labels(Vec<usize>),
}

fn read_u32(bytes: &[u8], offset: usize) -> Result<u32, DataError> {
    bytes
        .get(offset..offset + 4)
        .map(|b| u32::from_be_bytes([b[0], b[1], b[2], b[3]]))
        .ok_or_else(|| DataError::Format {
            offset: bytes.len(),
            msg: format!("header truncated, needed 4 bytes at offset {offset}"),
        })
}

/// Decodes an uncompressed IDX buffer. The whole buffer must be consumed.
pub fn parse_idx(bytes: &[u8]) -> Result<IdxData, DataError> {
    let magic = read_u32(bytes, 0)?;
    let dims = match magic {
        IMAGES_MAGIC => 3,
        LABELS_MAGIC => 1,
        other => {
            return Err(DataError::Format {
                offset: 0,
                msg: format!("bad magic number {other:#010x}"),
            })
        }
    };
    let extents: Vec<usize> = (0..dims)
        .map(|d| read_u32(bytes, 4 + 4 * d).map(|v| v as usize))
        .collect::<Result<_, _>>()?;
    let header = 4 + 4 * dims;
    let payload: usize = extents.iter().product();
    let available = bytes.len() - header;
    if available < payload {
        return Err(DataError::Format {
            offset: bytes.len(),
            msg: format!("payload truncated: expected {payload} bytes, found {available}"),
        });
    }
    if available > payload {
        return Err(DataError::Format {
            offset: header + payload,
            msg: format!("{} trailing bytes after payload", available - payload),
        });
    }
    let body = &bytes[header..];
    Ok(match dims {
        3 => IdxData::Images(Tensor::new(
            &[extents[0], 1, extents[1], extents[2]],
            body.iter().map(|&b| b as f64).collect(),
        )?),
        _ => IdxData::Labels(body.iter().map(|&b| b as usize).collect()),
    })
}

/// Encodes images (`[N, 1, H, W]` with integral values in 0..=255) or labels.
pub fn serialize_idx(data: &IdxData) -> Result<Vec<u8>, DataError> {
    let mut out = Vec::new();
    let to_byte = |v: f64, i: usize| -> Result<u8, DataError> {
        if (0.0..=255.0).contains(&v) && v.fract() == 0.0 {
            Ok(v as u8)
        } else {
            Err(DataError::Format {
                offset: i,
                msg: format!("value {v} is not a byte"),
            })
        }
    };
    match data {
        IdxData::Images(t) => {
            let s = t.shape();
            if s.len() != 4 || s[1] != 1 {
                return Err(DataError::Format {
                    offset: 0,
                    msg: format!("image tensor must be [N, 1, H, W], got {s:?}"),
                });
            }
            out.extend_from_slice(&IMAGES_MAGIC.to_be_bytes());
            for e in [s[0], s[2], s[3]] {
                out.extend_from_slice(&(e as u32).to_be_bytes());
            }
            for (i, &v) in t.data().iter().enumerate() {
                out.push(to_byte(v, i)?);
            }
        }
        IdxData::Labels(labels) => {
            out.extend_from_slice(&LABELS_MAGIC.to_be_bytes());
            out.extend_from_slice(&(labels.len() as u32).to_be_bytes());
            for (i, &l) in labels.iter().enumerate() {
                out.push(to_byte(l as f64, i)?);
            }
        }
    }
    Ok(out)
}

/// Reads an IDX file, transparently gunzipping when it starts with the gzip magic.
pub fn load_idx(path: &Path) -> Result<IdxData, DataError> {
    let io = |source| DataError::Io {
        path: path.display().to_string(),
        source,
    };
    let mut raw = Vec::new();
    File::open(path).and_then(|mut f| f.read_to_end(&mut raw)).map_err(io)?;
    if raw.starts_with(&[0x1f, 0x8b]) {
        let mut inflated = Vec::new();
        GzDecoder::new(raw.as_slice()).read_to_end(&mut inflated).map_err(io)?;
        raw = inflated;
    }
    parse_idx(&raw)
}

/// Loads an image/label file pair; labels are optionally remapped first.
pub fn load_image_set(images: &Path, labels: &Path, remap: Option<&[(usize, usize)]>) -> Result<ImageSet, DataError> {
    let IdxData::Images(images) = load_idx(images)? else {
        return Err(DataError::Format {
            offset: 0,
            msg: format!("{} holds labels, expected images", images.display()),
        });
    };
    let IdxData::Labels(mut labels) = load_idx(labels)? else {
        return Err(DataError::Format {
            offset: 0,
            msg: format!("{} holds images, expected labels", labels.display()),
        });
    };
    if let Some(table) = remap {
        for l in labels.iter_mut() {
            if let Some(&(_, new)) = table.iter().find(|(raw, _)| raw == l) {
                *l = new;
            }
        }
    }
    let class_count = labels.iter().max().map_or(0, |m| m + 1);
    ImageSet::new(images, labels, class_count)
}

/// Parses a two-column `raw_label new_label` table. Blank lines and `#`
/// comments are ignored.
pub fn parse_label_remap(text: &str) -> Result<Vec<(usize, usize)>, DataError> {
    let mut table = Vec::new();
    for (n, line) in text.lines().enumerate() {
        let line = line.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let cols: Vec<&str> = line.split_whitespace().collect();
        let parse = |s: &str| {
            s.parse::<usize>().map_err(|e| DataError::Remap {
                line: n + 1,
                msg: format!("`{s}`: {e}"),
            })
        };
        match cols.as_slice() {
            [raw, new] => table.push((parse(raw)?, parse(new)?)),
            _ => {
                return Err(DataError::Remap {
                    line: n + 1,
                    msg: format!("expected two columns, got {}", cols.len()),
                })
            }
        }
    }
    Ok(table)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn empty_image_file() {
        let mut bytes = IMAGES_MAGIC.to_be_bytes().to_vec();
        for e in [0u32, 28, 28] {
            bytes.extend_from_slice(&e.to_be_bytes());
        }
        let IdxData::Images(t) = parse_idx(&bytes).unwrap() else {
            panic!("expected images")
        };
        assert_eq!(t.shape(), &[0, 1, 28, 28]);
        assert_eq!(t.numel(), 0);
    }

    #[test]
    fn hand_built_two_image_file() {
        let mut bytes = vec![0, 0, 8, 3, 0, 0, 0, 2, 0, 0, 0, 2, 0, 0, 0, 2];
        bytes.extend_from_slice(&[0, 10, 20, 255, 1, 2, 3, 4]);
        let IdxData::Images(t) = parse_idx(&bytes).unwrap() else {
            panic!("expected images")
        };
        assert_eq!(t.shape(), &[2, 1, 2, 2]);
        assert_eq!(t.data(), &[0., 10., 20., 255., 1., 2., 3., 4.]);
    }

    #[test]
    fn truncated_payload_reports_offset() {
        let bytes = vec![0, 0, 8, 1, 0, 0, 0, 5, 1, 2];
        match parse_idx(&bytes) {
            Err(DataError::Format { offset, .. }) => assert_eq!(offset, 10),
            other => panic!("unexpected {other:?}"),
        }
        match parse_idx(&[0, 0, 8]) {
            Err(DataError::Format { offset, .. }) => assert_eq!(offset, 3),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn bad_magic_rejected() {
        assert!(matches!(
            parse_idx(&[0, 0, 9, 1, 0, 0, 0, 0]),
            Err(DataError::Format { offset: 0, .. })
        ));
    }

    #[test]
    fn remap_table() {
        let t = parse_label_remap("# upper -> lower\n27 1\n 28   2 \n\n").unwrap();
        assert_eq!(t, vec![(27, 1), (28, 2)]);
        assert!(matches!(
            parse_label_remap("1 2 3"),
            Err(DataError::Remap { line: 1, .. })
        ));
    }

    #[test]
    fn gzip_and_raw_files_load_identically() {
        use flate2::{write::GzEncoder, Compression};
        use std::io::Write;
        let dir = tempfile::tempdir().unwrap();
        let labels = serialize_idx(&IdxData::Labels(vec![3, 1, 4, 1, 5])).unwrap();
        std::fs::write(dir.path().join("raw"), &labels).unwrap();
        let mut enc = GzEncoder::new(Vec::new(), Compression::default());
        enc.write_all(&labels).unwrap();
        std::fs::write(dir.path().join("gz"), enc.finish().unwrap()).unwrap();
        assert_eq!(
            load_idx(&dir.path().join("raw")).unwrap(),
            load_idx(&dir.path().join("gz")).unwrap()
        );
    }

    proptest! {
        #[test]
        fn serialize_then_parse_is_identity(n in 0usize..4, h in 1usize..5, w in 1usize..5, seed in any::<u64>()) {
            use rand::Rng;
            let mut rng = crate::rng::seeded(seed);
            let data: Vec<f64> = (0..n * h * w).map(|_| rng.random_range(0..=255u8) as f64).collect();
            let images = IdxData::Images(Tensor::new(&[n, 1, h, w], data).unwrap());
            prop_assert_eq!(parse_idx(&serialize_idx(&images).unwrap()).unwrap(), images);
            let labels = IdxData::Labels((0..n * h).map(|_| rng.random_range(0..10usize)).collect());
            prop_assert_eq!(parse_idx(&serialize_idx(&labels).unwrap()).unwrap(), labels);
        }
    }
}
