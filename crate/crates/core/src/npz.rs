//! Minimal NPZ (zip of `.npy` members) reader and writer for `uint8` arrays.
//!
//! Reading goes through the zip central directory, so archives written with
//! streaming data descriptors or zip64 extras (as numpy produces) are handled.
//! Members may be stored or deflate-compressed; every member's CRC-32 is
//! verified after decompression.

use std::collections::BTreeMap;
use std::io::Read;

use crate::error::{Error, Result};

const EOCD_SIG: u32 = 0x0605_4b50;
const ZIP64_EOCD_SIG: u32 = 0x0606_4b50;
const ZIP64_LOCATOR_SIG: u32 = 0x0706_4b50;
const CENTRAL_SIG: u32 = 0x0201_4b50;
const LOCAL_SIG: u32 = 0x0403_4b50;

const NPY_MAGIC: &[u8; 6] = b"\x93NUMPY";

/// A decoded C-order `uint8` array.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct U8Array {
    pub shape: Vec<usize>,
    pub data: Vec<u8>,
}

#[derive(Clone, Debug)]
struct Entry {
    name: String,
    method: u16,
    crc32: u32,
    compressed_size: u64,
    uncompressed_size: u64,
    local_offset: u64,
}

fn le16(b: &[u8], at: usize) -> u16 {
    u16::from_le_bytes([b[at], b[at + 1]])
}

fn le32(b: &[u8], at: usize) -> u32 {
    u32::from_le_bytes(b[at..at + 4].try_into().unwrap())
}

fn le64(b: &[u8], at: usize) -> u64 {
    u64::from_le_bytes(b[at..at + 8].try_into().unwrap())
}

/// Random-access view of a zip archive held in memory.
pub struct NpzArchive<'a> {
    bytes: &'a [u8],
    entries: BTreeMap<String, Entry>,
}

impl<'a> NpzArchive<'a> {
    pub fn parse(bytes: &'a [u8]) -> Result<Self> {
        let eocd = find_eocd(bytes)?;
        let mut count = le16(bytes, eocd + 10) as u64;
        let mut cd_size = le32(bytes, eocd + 12) as u64;
        let mut cd_offset = le32(bytes, eocd + 16) as u64;
        if count == 0xFFFF || cd_size == 0xFFFF_FFFF || cd_offset == 0xFFFF_FFFF {
            let loc = eocd
                .checked_sub(20)
                .filter(|&l| le32(bytes, l) == ZIP64_LOCATOR_SIG)
                .ok_or_else(|| {
                    Error::format("zip64 locator", eocd as u64, "missing zip64 end-of-directory locator")
                })?;
            let z = le64(bytes, loc + 8) as usize;
            if z + 56 > bytes.len() || le32(bytes, z) != ZIP64_EOCD_SIG {
                return Err(Error::format("zip64 end of directory", z as u64, "bad signature"));
            }
            count = le64(bytes, z + 32);
            cd_size = le64(bytes, z + 40);
            cd_offset = le64(bytes, z + 48);
        }
        if cd_offset.saturating_add(cd_size) > bytes.len() as u64 {
            return Err(Error::format(
                "central directory",
                cd_offset,
                "directory extends past end of file",
            ));
        }

        let mut entries = BTreeMap::new();
        let mut pos = cd_offset as usize;
        for _ in 0..count {
            if pos + 46 > bytes.len() || le32(bytes, pos) != CENTRAL_SIG {
                return Err(Error::format("central directory", pos as u64, "bad entry signature"));
            }
            let method = le16(bytes, pos + 10);
            let crc32 = le32(bytes, pos + 16);
            let mut compressed_size = le32(bytes, pos + 20) as u64;
            let mut uncompressed_size = le32(bytes, pos + 24) as u64;
            let name_len = le16(bytes, pos + 28) as usize;
            let extra_len = le16(bytes, pos + 30) as usize;
            let comment_len = le16(bytes, pos + 32) as usize;
            let mut local_offset = le32(bytes, pos + 42) as u64;
            let name_at = pos + 46;
            let end = name_at + name_len + extra_len + comment_len;
            if end > bytes.len() {
                return Err(Error::format("central directory", pos as u64, "entry truncated"));
            }
            let name = String::from_utf8_lossy(&bytes[name_at..name_at + name_len]).into_owned();

            // zip64 extended information: only the saturated fields are present, in order
            let mut extra = &bytes[name_at + name_len..name_at + name_len + extra_len];
            while extra.len() >= 4 {
                let id = le16(extra, 0);
                let size = le16(extra, 2) as usize;
                let body = &extra[4..(4 + size).min(extra.len())];
                if id == 0x0001 {
                    let mut off = 0;
                    let mut next = |field: &mut u64| {
                        if *field == 0xFFFF_FFFF && off + 8 <= body.len() {
                            *field = le64(body, off);
                            off += 8;
                        }
                    };
                    next(&mut uncompressed_size);
                    next(&mut compressed_size);
                    next(&mut local_offset);
                }
                extra = &extra[(4 + size).min(extra.len())..];
            }

            entries.insert(
                name.clone(),
                Entry {
                    name,
                    method,
                    crc32,
                    compressed_size,
                    uncompressed_size,
                    local_offset,
                },
            );
            pos = end;
        }
        Ok(NpzArchive { bytes, entries })
    }

    /// Member names, e.g. `train_images.npy`.
    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.entries.keys().map(String::as_str)
    }

    /// Decompressed bytes of one member, CRC-checked.
    pub fn member(&self, name: &str) -> Result<Vec<u8>> {
        let entry = self
            .entries
            .get(name)
            .ok_or_else(|| Error::format(name, 0, "member not found in archive"))?;
        let bytes = self.bytes;
        let at = entry.local_offset as usize;
        if at + 30 > bytes.len() || le32(bytes, at) != LOCAL_SIG {
            return Err(Error::format(&entry.name, at as u64, "bad local header signature"));
        }
        let data_at = at + 30 + le16(bytes, at + 26) as usize + le16(bytes, at + 28) as usize;
        let data_end = data_at as u64 + entry.compressed_size;
        if data_end > bytes.len() as u64 {
            return Err(Error::format(
                &entry.name,
                data_at as u64,
                format!(
                    "truncated: member needs {} bytes, {} available",
                    entry.compressed_size,
                    bytes.len().saturating_sub(data_at)
                ),
            ));
        }
        let raw = &bytes[data_at..data_end as usize];
        let data = match entry.method {
            0 => raw.to_vec(),
            8 => {
                let mut out = Vec::with_capacity(entry.uncompressed_size as usize);
                flate2::read::DeflateDecoder::new(raw)
                    .read_to_end(&mut out)
                    .map_err(|e| Error::format(&entry.name, data_at as u64, format!("deflate: {e}")))?;
                out
            }
            m => {
                return Err(Error::format(
                    &entry.name,
                    at as u64 + 8,
                    format!("unsupported compression method {m}"),
                ))
            }
        };
        if data.len() as u64 != entry.uncompressed_size {
            return Err(Error::format(
                &entry.name,
                data_at as u64,
                format!(
                    "size mismatch: {} bytes decoded, directory says {}",
                    data.len(),
                    entry.uncompressed_size
                ),
            ));
        }
        let crc = crc32fast::hash(&data);
        if crc != entry.crc32 {
            return Err(Error::format(
                &entry.name,
                data_at as u64,
                format!("CRC mismatch: computed {crc:08x}, stored {:08x}", entry.crc32),
            ));
        }
        Ok(data)
    }

    /// Decodes `<array>.npy` as a `uint8` array.
    pub fn array(&self, array: &str) -> Result<U8Array> {
        let name = format!("{array}.npy");
        let data = self.member(&name)?;
        parse_npy_u8(&data, &name)
    }
}

fn find_eocd(bytes: &[u8]) -> Result<usize> {
    if bytes.len() < 22 {
        return Err(Error::format("end of central directory", 0, "file too short to be a zip"));
    }
    let lowest = bytes.len().saturating_sub(22 + 0xFFFF);
    (lowest..=bytes.len() - 22)
        .rev()
        .find(|&i| le32(bytes, i) == EOCD_SIG)
        .ok_or_else(|| {
            Error::format(
                "end of central directory",
                bytes.len() as u64,
                "signature not found (not a zip archive or truncated)",
            )
        })
}

/// Parses an NPY v1/v2/v3 payload holding C-order `uint8` data.
pub fn parse_npy_u8(bytes: &[u8], member: &str) -> Result<U8Array> {
    if bytes.len() < 10 || &bytes[..6] != NPY_MAGIC {
        return Err(Error::format(member, 0, "bad NPY magic"));
    }
    let major = bytes[6];
    let (header_len, header_at) = match major {
        1 => (le16(bytes, 8) as usize, 10),
        2 | 3 if bytes.len() >= 12 => (le32(bytes, 8) as usize, 12),
        _ => return Err(Error::format(member, 6, format!("unsupported NPY version {major}"))),
    };
    let data_at = header_at + header_len;
    if data_at > bytes.len() {
        return Err(Error::format(member, header_at as u64, "truncated NPY header"));
    }
    let header = std::str::from_utf8(&bytes[header_at..data_at])
        .map_err(|_| Error::format(member, header_at as u64, "NPY header is not text"))?;

    let descr = dict_value(header, "descr")
        .ok_or_else(|| Error::format(member, header_at as u64, "NPY header lacks 'descr'"))?;
    let descr = descr.trim_matches(|c| c == '\'' || c == '"');
    if !matches!(descr, "|u1" | "u1" | "<u1" | ">u1" | "=u1") {
        return Err(Error::format(
            member,
            header_at as u64,
            format!("unsupported dtype {descr}, expected uint8"),
        ));
    }
    let fortran = dict_value(header, "fortran_order")
        .ok_or_else(|| Error::format(member, header_at as u64, "NPY header lacks 'fortran_order'"))?;
    if fortran.trim() != "False" {
        return Err(Error::format(member, header_at as u64, "Fortran-order arrays are not supported"));
    }
    let shape_text = dict_value(header, "shape")
        .ok_or_else(|| Error::format(member, header_at as u64, "NPY header lacks 'shape'"))?;
    let shape = shape_text
        .trim()
        .trim_start_matches('(')
        .trim_end_matches(')')
        .split(',')
        .map(str::trim)
        .filter(|s| !s.is_empty())
        .map(|s| s.trim_end_matches('L').parse::<usize>())
        .collect::<std::result::Result<Vec<_>, _>>()
        .map_err(|_| Error::format(member, header_at as u64, format!("bad shape {shape_text}")))?;
    let numel: usize = shape.iter().product();
    let payload = &bytes[data_at..];
    if payload.len() != numel {
        return Err(Error::format(
            member,
            data_at as u64,
            format!("shape {shape:?} needs {numel} bytes, payload has {}", payload.len()),
        ));
    }
    Ok(U8Array {
        shape,
        data: payload.to_vec(),
    })
}

/// Value text of `key` in a Python dict literal; tuples are returned whole.
fn dict_value<'h>(header: &'h str, key: &str) -> Option<&'h str> {
    let needle_single = format!("'{key}'");
    let needle_double = format!("\"{key}\"");
    let start = header
        .find(&needle_single)
        .map(|i| i + needle_single.len())
        .or_else(|| header.find(&needle_double).map(|i| i + needle_double.len()))?;
    let rest = header[start..].trim_start().strip_prefix(':')?.trim_start();
    let end = if rest.starts_with('(') {
        rest.find(')')? + 1
    } else if let Some(quote) = rest.chars().next().filter(|c| *c == '\'' || *c == '"') {
        rest[1..].find(quote)? + 2
    } else {
        rest.find([',', '}']).unwrap_or(rest.len())
    };
    Some(&rest[..end])
}

/// Encodes an NPY v1.0 `uint8` array.
pub fn encode_npy_u8(shape: &[usize], data: &[u8]) -> Vec<u8> {
    let shape_text = match shape {
        [one] => format!("({one},)"),
        dims => format!(
            "({})",
            dims.iter().map(usize::to_string).collect::<Vec<_>>().join(", ")
        ),
    };
    let mut header = format!("{{'descr': '|u1', 'fortran_order': False, 'shape': {shape_text}, }}");
    let unpadded = 10 + header.len() + 1;
    header.push_str(&" ".repeat((64 - unpadded % 64) % 64));
    header.push('\n');
    let mut out = Vec::with_capacity(10 + header.len() + data.len());
    out.extend_from_slice(NPY_MAGIC);
    out.extend_from_slice(&[1, 0]);
    out.extend_from_slice(&(header.len() as u16).to_le_bytes());
    out.extend_from_slice(header.as_bytes());
    out.extend_from_slice(data);
    out
}

/// Writes a stored (uncompressed) zip archive of `.npy` members.
pub fn write_npz(arrays: &[(&str, &U8Array)]) -> Vec<u8> {
    let mut out = Vec::new();
    let mut central = Vec::new();
    for (name, array) in arrays {
        let file_name = format!("{name}.npy");
        let payload = encode_npy_u8(&array.shape, &array.data);
        let crc = crc32fast::hash(&payload);
        let offset = out.len() as u32;
        let size = payload.len() as u32;

        out.extend_from_slice(&LOCAL_SIG.to_le_bytes());
        out.extend_from_slice(&20u16.to_le_bytes()); // version needed
        out.extend_from_slice(&0u16.to_le_bytes()); // flags
        out.extend_from_slice(&0u16.to_le_bytes()); // stored
        out.extend_from_slice(&0u16.to_le_bytes()); // time
        out.extend_from_slice(&0x21u16.to_le_bytes()); // date 1980-01-01
        out.extend_from_slice(&crc.to_le_bytes());
        out.extend_from_slice(&size.to_le_bytes());
        out.extend_from_slice(&size.to_le_bytes());
        out.extend_from_slice(&(file_name.len() as u16).to_le_bytes());
        out.extend_from_slice(&0u16.to_le_bytes());
        out.extend_from_slice(file_name.as_bytes());
        out.extend_from_slice(&payload);

        central.extend_from_slice(&CENTRAL_SIG.to_le_bytes());
        central.extend_from_slice(&20u16.to_le_bytes()); // made by
        central.extend_from_slice(&20u16.to_le_bytes()); // needed
        central.extend_from_slice(&0u16.to_le_bytes());
        central.extend_from_slice(&0u16.to_le_bytes());
        central.extend_from_slice(&0u16.to_le_bytes());
        central.extend_from_slice(&0x21u16.to_le_bytes());
        central.extend_from_slice(&crc.to_le_bytes());
        central.extend_from_slice(&size.to_le_bytes());
        central.extend_from_slice(&size.to_le_bytes());
        central.extend_from_slice(&(file_name.len() as u16).to_le_bytes());
        central.extend_from_slice(&[0; 8]); // extra, comment, disk, internal attrs
        central.extend_from_slice(&0u32.to_le_bytes()); // external attrs
        central.extend_from_slice(&offset.to_le_bytes());
        central.extend_from_slice(file_name.as_bytes());
    }
    let cd_offset = out.len() as u32;
    let cd_size = central.len() as u32;
    out.extend_from_slice(&central);
    out.extend_from_slice(&EOCD_SIG.to_le_bytes());
    out.extend_from_slice(&[0; 4]); // disk numbers
    out.extend_from_slice(&(arrays.len() as u16).to_le_bytes());
    out.extend_from_slice(&(arrays.len() as u16).to_le_bytes());
    out.extend_from_slice(&cd_size.to_le_bytes());
    out.extend_from_slice(&cd_offset.to_le_bytes());
    out.extend_from_slice(&0u16.to_le_bytes());
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::io::Write;

    fn small() -> U8Array {
        U8Array {
            shape: vec![2, 3],
            data: vec![0, 1, 2, 250, 254, 255],
        }
    }

    #[test]
    fn npy_header_is_64_byte_aligned() {
        let bytes = encode_npy_u8(&[4708, 28, 28], &[]);
        let header_len = le16(&bytes, 8) as usize;
        assert_eq!((10 + header_len) % 64, 0);
        assert_eq!(bytes[10 + header_len - 1], b'\n');
    }

    #[test]
    fn npz_round_trip() {
        let a = small();
        let b = U8Array {
            shape: vec![3],
            data: vec![1, 0, 1],
        };
        let zip = write_npz(&[("x", &a), ("y", &b)]);
        let archive = NpzArchive::parse(&zip).unwrap();
        assert_eq!(archive.names().collect::<Vec<_>>(), vec!["x.npy", "y.npy"]);
        assert_eq!(archive.array("x").unwrap(), a);
        assert_eq!(archive.array("y").unwrap(), b);
    }

    #[test]
    fn crc_mismatch_detected() {
        let mut zip = write_npz(&[("x", &small())]);
        // last payload byte lives just before the central directory
        let cd = le32(&zip, zip.len() - 6) as usize;
        zip[cd - 1] ^= 0xFF;
        let archive = NpzArchive::parse(&zip).unwrap();
        let err = archive.array("x").unwrap_err().to_string();
        assert!(err.contains("CRC mismatch") && err.contains("x.npy"), "{err}");
    }

    #[test]
    fn truncated_archive_is_rejected() {
        let zip = write_npz(&[("x", &small())]);
        assert!(NpzArchive::parse(&zip[..zip.len() / 2]).is_err());
    }

    #[test]
    fn missing_member_named() {
        let zip = write_npz(&[("x", &small())]);
        let archive = NpzArchive::parse(&zip).unwrap();
        match archive.array("train_images") {
            Err(Error::Format { field, .. }) => assert_eq!(field, "train_images.npy"),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn deflate_member_decodes() {
        // hand-build a one-member deflate archive
        let payload = encode_npy_u8(&[2, 3], &small().data);
        let mut enc = flate2::write::DeflateEncoder::new(Vec::new(), flate2::Compression::default());
        enc.write_all(&payload).unwrap();
        let compressed = enc.finish().unwrap();
        let mut zip = write_npz(&[("x", &small())]);
        // patch: rebuild with method 8 by swapping the stored data
        let name_len = le16(&zip, 26) as usize;
        let data_at = 30 + name_len;
        let cd_at = le32(&zip, zip.len() - 6) as usize;
        let mut rebuilt = zip[..data_at].to_vec();
        rebuilt[8..10].copy_from_slice(&8u16.to_le_bytes());
        rebuilt[18..22].copy_from_slice(&(compressed.len() as u32).to_le_bytes());
        rebuilt.extend_from_slice(&compressed);
        let new_cd = rebuilt.len() as u32;
        let mut central = zip[cd_at..zip.len() - 22].to_vec();
        central[10..12].copy_from_slice(&8u16.to_le_bytes());
        central[20..24].copy_from_slice(&(compressed.len() as u32).to_le_bytes());
        rebuilt.extend_from_slice(&central);
        let mut eocd = zip.split_off(zip.len() - 22);
        eocd[16..20].copy_from_slice(&new_cd.to_le_bytes());
        rebuilt.extend_from_slice(&eocd);
        let archive = NpzArchive::parse(&rebuilt).unwrap();
        assert_eq!(archive.array("x").unwrap(), small());
    }

    #[test]
    fn rejects_other_dtypes_and_fortran_order() {
        fn patch(bytes: &[u8], from: &[u8], to: &[u8]) -> Vec<u8> {
            let at = bytes.windows(from.len()).position(|w| w == from).unwrap();
            let mut out = bytes.to_vec();
            out[at..at + to.len()].copy_from_slice(to);
            out
        }
        let npy = encode_npy_u8(&[1], &[0]);
        let f8 = patch(&npy, b"|u1", b"<f8");
        let err = parse_npy_u8(&f8, "m").unwrap_err().to_string();
        assert!(err.contains("dtype"), "{err}");
        let fo = patch(&npy, b"False", b"True ");
        assert!(parse_npy_u8(&fo, "m").is_err());
    }

    #[test]
    fn dict_value_parses_tuples() {
        let h = "{'descr': '|u1', 'fortran_order': False, 'shape': (624, 1), }";
        assert_eq!(dict_value(h, "shape"), Some("(624, 1)"));
        assert_eq!(dict_value(h, "descr"), Some("'|u1'"));
        assert_eq!(dict_value(h, "fortran_order"), Some("False"));
    }
}
