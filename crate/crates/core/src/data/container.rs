//! Binary array container and checkpoint bundles.
//!
//! Layout: magic `LPRF`, format version `u16` little-endian, header length
//! `u32` little-endian, a UTF-8 structured-text header, then the raw
//! little-endian payload. A single-array file carries one `kind: array`
//! header; a checkpoint carries one `kind: checkpoint` header that lists
//! every bundled array plus counters and the config snapshot, followed by the
//! arrays' payloads concatenated in listed order. Round-trips are bit-exact.

use crate::dense::{DenseArray, Shape};
use crate::error::{Error, Result};
use crate::scalar::Scalar;
use std::collections::BTreeMap;
use std::io::{Read, Write};
use std::path::Path;

pub const MAGIC: &[u8; 4] = b"LPRF";
pub const FORMAT_VERSION: u16 = 1;
const CONFIG_MARKER: &str = "--- config ---";

fn shape_to_text(s: Shape) -> String {
    s.dims()
        .iter()
        .map(|d| d.to_string())
        .collect::<Vec<_>>()
        .join(" ")
}

fn shape_from_text(t: &str) -> Result<Shape> {
    let dims: Vec<usize> = t
        .split_whitespace()
        .map(|p| {
            p.parse::<usize>()
                .map_err(|_| Error::persistence(format!("bad shape component '{p}'")))
        })
        .collect::<Result<_>>()?;
    Shape::new(&dims).map_err(|e| Error::persistence(e.to_string()))
}

fn write_frame(path: &Path, header: &str, payload: &[u8]) -> Result<()> {
    let mut buf = Vec::with_capacity(10 + header.len() + payload.len());
    buf.extend_from_slice(MAGIC);
    buf.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    buf.extend_from_slice(&(header.len() as u32).to_le_bytes());
    buf.extend_from_slice(header.as_bytes());
    buf.extend_from_slice(payload);
    let mut f = std::fs::File::create(path)
        .map_err(|e| Error::persistence(format!("cannot create {}: {e}", path.display())))?;
    f.write_all(&buf)
        .map_err(|e| Error::persistence(format!("write {}: {e}", path.display())))?;
    Ok(())
}

fn read_frame(path: &Path) -> Result<(String, Vec<u8>)> {
    let mut f = std::fs::File::open(path)
        .map_err(|e| Error::persistence(format!("cannot open {}: {e}", path.display())))?;
    let mut bytes = Vec::new();
    f.read_to_end(&mut bytes)
        .map_err(|e| Error::persistence(format!("read {}: {e}", path.display())))?;
    if bytes.len() < 10 || &bytes[..4] != MAGIC {
        return Err(Error::persistence(format!(
            "{} is not an LPRF container (bad magic)",
            path.display()
        )));
    }
    let version = u16::from_le_bytes([bytes[4], bytes[5]]);
    if version > FORMAT_VERSION {
        return Err(Error::persistence(format!(
            "{}: format version {version} is newer than supported {FORMAT_VERSION}",
            path.display()
        )));
    }
    let hlen = u32::from_le_bytes([bytes[6], bytes[7], bytes[8], bytes[9]]) as usize;
    if bytes.len() < 10 + hlen {
        return Err(Error::persistence(format!(
            "{}: truncated header ({} bytes missing)",
            path.display(),
            10 + hlen - bytes.len()
        )));
    }
    let header = std::str::from_utf8(&bytes[10..10 + hlen])
        .map_err(|_| Error::persistence(format!("{}: header is not UTF-8", path.display())))?
        .to_string();
    Ok((header, bytes[10 + hlen..].to_vec()))
}

fn parse_kv(lines: &str) -> BTreeMap<String, String> {
    let mut out = BTreeMap::new();
    for line in lines.lines() {
        if let Some((k, v)) = line.split_once(':') {
            out.insert(k.trim().to_string(), v.trim().to_string());
        }
    }
    out
}

/// Write one named array.
pub fn save_array<T: Scalar>(path: &Path, name: &str, array: &DenseArray<T>) -> Result<()> {
    let header = format!(
        "kind: array\nname: {name}\ndtype: {}\nshape: {}\n",
        T::DTYPE,
        shape_to_text(array.shape())
    );
    let mut payload = Vec::with_capacity(array.len() * T::BYTE_WIDTH);
    for v in array.data() {
        payload.extend_from_slice(&v.to_le_bytes_vec());
    }
    write_frame(path, &header, &payload)
}

/// Read one named array back; dtype must match `T`.
pub fn load_array<T: Scalar>(path: &Path) -> Result<(String, DenseArray<T>)> {
    let (header, payload) = read_frame(path)?;
    let kv = parse_kv(&header);
    if kv.get("kind").map(String::as_str) != Some("array") {
        return Err(Error::persistence(format!(
            "{}: expected an array container",
            path.display()
        )));
    }
    let dtype = kv
        .get("dtype")
        .ok_or_else(|| Error::persistence("missing dtype".to_string()))?;
    if dtype != T::DTYPE {
        return Err(Error::persistence(format!(
            "dtype mismatch: file holds {dtype}, requested {}",
            T::DTYPE
        )));
    }
    let shape = shape_from_text(
        kv.get("shape")
            .ok_or_else(|| Error::persistence("missing shape".to_string()))?,
    )?;
    let name = kv.get("name").cloned().unwrap_or_default();
    let expect = shape.len() * T::BYTE_WIDTH;
    if payload.len() != expect {
        return Err(Error::persistence(format!(
            "payload size {} does not match header-declared {} elements",
            payload.len(),
            shape.len()
        )));
    }
    let data: Vec<T> = payload
        .chunks_exact(T::BYTE_WIDTH)
        .map(T::from_le_slice)
        .collect();
    let arr = DenseArray::new(shape, data).map_err(|e| Error::persistence(e.to_string()))?;
    Ok((name, arr))
}

/// A full run snapshot: every named array of all three networks (parameters,
/// batch-norm buffers, optimizer moments), step counters, and the resolved
/// config as TOML text.
#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub arrays: Vec<(String, DenseArray<f32>)>,
    pub counters: BTreeMap<String, u64>,
    pub config_toml: String,
}

pub fn save_checkpoint(path: &Path, ck: &Checkpoint) -> Result<()> {
    let mut header = String::from("kind: checkpoint\n");
    for (k, v) in &ck.counters {
        header.push_str(&format!("counter.{k}: {v}\n"));
    }
    header.push_str(&format!("arrays: {}\n", ck.arrays.len()));
    for (i, (name, arr)) in ck.arrays.iter().enumerate() {
        header.push_str(&format!(
            "array.{i}: {name} | f32 | {}\n",
            shape_to_text(arr.shape())
        ));
    }
    header.push_str(CONFIG_MARKER);
    header.push('\n');
    header.push_str(&ck.config_toml);

    let total: usize = ck.arrays.iter().map(|(_, a)| a.len() * 4).sum();
    let mut payload = Vec::with_capacity(total);
    for (_, arr) in &ck.arrays {
        for v in arr.data() {
            payload.extend_from_slice(&v.to_le_bytes());
        }
    }
    write_frame(path, &header, &payload)
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    let (header, payload) = read_frame(path)?;
    let (meta, config_toml) = match header.split_once(CONFIG_MARKER) {
        Some((m, c)) => (m, c.trim_start_matches('\n').to_string()),
        None => (header.as_str(), String::new()),
    };
    let kv = parse_kv(meta);
    if kv.get("kind").map(String::as_str) != Some("checkpoint") {
        return Err(Error::persistence(format!(
            "{}: expected a checkpoint container",
            path.display()
        )));
    }
    let count: usize = kv
        .get("arrays")
        .and_then(|v| v.parse().ok())
        .ok_or_else(|| Error::persistence("missing array count".to_string()))?;

    let mut counters = BTreeMap::new();
    for (k, v) in &kv {
        if let Some(name) = k.strip_prefix("counter.") {
            let val = v
                .parse::<u64>()
                .map_err(|_| Error::persistence(format!("bad counter value for {name}")))?;
            counters.insert(name.to_string(), val);
        }
    }

    let mut arrays = Vec::with_capacity(count);
    let mut offset = 0usize;
    for i in 0..count {
        let line = kv
            .get(&format!("array.{i}"))
            .ok_or_else(|| Error::persistence(format!("missing array.{i} entry")))?;
        let parts: Vec<&str> = line.split('|').map(str::trim).collect();
        if parts.len() != 3 || parts[1] != "f32" {
            return Err(Error::persistence(format!("malformed array entry: {line}")));
        }
        let shape = shape_from_text(parts[2])?;
        let nbytes = shape.len() * 4;
        if offset + nbytes > payload.len() {
            return Err(Error::persistence(format!(
                "payload size {} does not match header-declared arrays (need {})",
                payload.len(),
                offset + nbytes
            )));
        }
        let data: Vec<f32> = payload[offset..offset + nbytes]
            .chunks_exact(4)
            .map(f32::from_le_slice)
            .collect();
        offset += nbytes;
        arrays.push((
            parts[0].to_string(),
            DenseArray::new(shape, data).map_err(|e| Error::persistence(e.to_string()))?,
        ));
    }
    if offset != payload.len() {
        return Err(Error::persistence(format!(
            "payload has {} trailing bytes beyond declared arrays",
            payload.len() - offset
        )));
    }
    Ok(Checkpoint {
        arrays,
        counters,
        config_toml,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tdir() -> tempfile::TempDir {
        tempfile::tempdir().unwrap()
    }

    #[test]
    fn array_round_trip_is_bit_exact() {
        let dir = tdir();
        let p = dir.path().join("m.lprf");
        let a = DenseArray::<f32>::from_fn(Shape::d3(2, 3, 4), |i| (i as f32).sin());
        save_array(&p, "profile", &a).unwrap();
        let (name, b) = load_array::<f32>(&p).unwrap();
        assert_eq!(name, "profile");
        assert_eq!(a.shape(), b.shape());
        assert_eq!(a.data(), b.data());
    }

    #[test]
    fn checkpoint_round_trip_is_bit_exact() {
        let dir = tdir();
        let p = dir.path().join("ck.lprf");
        let mut counters = BTreeMap::new();
        counters.insert("joint_step".to_string(), 123u64);
        let ck = Checkpoint {
            arrays: vec![
                (
                    "ae.p.w1".to_string(),
                    DenseArray::from_fn(Shape::d4(2, 3, 3, 3), |i| i as f32 * 0.5 - 3.0),
                ),
                (
                    "policy.m.w1".to_string(),
                    DenseArray::from_fn(Shape::d1(7), |i| (i as f32).exp()),
                ),
            ],
            counters,
            config_toml: "batch_size = 32\nseed_data = 1\n".to_string(),
        };
        save_checkpoint(&p, &ck).unwrap();
        let got = load_checkpoint(&p).unwrap();
        assert_eq!(got, ck);
        // file bytes are stable given identical content
        let bytes1 = std::fs::read(&p).unwrap();
        save_checkpoint(&p, &ck).unwrap();
        assert_eq!(bytes1, std::fs::read(&p).unwrap());
    }

    #[test]
    fn corrupted_files_are_rejected() {
        let dir = tdir();
        let p = dir.path().join("bad.lprf");
        let a = DenseArray::<f32>::from_fn(Shape::d1(8), |i| i as f32);
        save_array(&p, "x", &a).unwrap();
        let good = std::fs::read(&p).unwrap();

        // bad magic
        let mut b = good.clone();
        b[0] = b'X';
        std::fs::write(&p, &b).unwrap();
        assert!(matches!(load_array::<f32>(&p), Err(Error::Persistence(_))));

        // future version
        let mut b = good.clone();
        b[4] = 0xff;
        b[5] = 0xff;
        std::fs::write(&p, &b).unwrap();
        let err = load_array::<f32>(&p).unwrap_err().to_string();
        assert!(err.contains("version"), "{err}");

        // truncated payload disagrees with header-declared count
        let b = good[..good.len() - 4].to_vec();
        std::fs::write(&p, &b).unwrap();
        assert!(matches!(load_array::<f32>(&p), Err(Error::Persistence(_))));

        // dtype mismatch
        std::fs::write(&p, &good).unwrap();
        assert!(load_array::<f64>(&p).is_err());
    }
}
