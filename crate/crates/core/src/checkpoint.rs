//! On-disk checkpoint directories.
//!
//! ```text
//! <dir>/manifest.tsv   name<TAB>shape<TAB>f32<TAB>file<TAB>crc32
//! <dir>/meta.tsv       key<TAB>value
//! <dir>/<name>.f32     raw little-endian f32, row-major
//! ```
//!
//! The shape column is comma separated. The crc32 column is lowercase hex;
//! `-` disables verification for that row.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::params::{Checkpoint, ParamSet};
use crate::tensor::Tensor;

pub const MANIFEST: &str = "manifest.tsv";
pub const META: &str = "meta.tsv";

fn check_field(s: &str) -> Result<()> {
    if s.is_empty() || s.contains(['\t', '\n', '\r']) {
        return Err(Error::Config(format!("{s:?} cannot be stored in a checkpoint")));
    }
    Ok(())
}

pub fn save_checkpoint(ckpt: &Checkpoint, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut manifest = String::new();
    for (name, t) in ckpt.tensors.iter() {
        check_field(name)?;
        if name.contains(['/', '\\']) {
            return Err(Error::Config(format!("tensor name {name:?} contains a path separator")));
        }
        let file = format!("{name}.f32");
        let bytes: Vec<u8> = t.data().iter().flat_map(|v| v.to_le_bytes()).collect();
        let path = dir.join(&file);
        fs::write(&path, &bytes).map_err(|e| Error::io(&path, e))?;
        let shape: Vec<String> = t.shape().iter().map(ToString::to_string).collect();
        manifest.push_str(&format!(
            "{name}\t{}\tf32\t{file}\t{:08x}\n",
            shape.join(","),
            crc32fast::hash(&bytes)
        ));
    }
    let path = dir.join(MANIFEST);
    fs::write(&path, manifest).map_err(|e| Error::io(&path, e))?;
    let mut meta = String::new();
    for (k, v) in &ckpt.meta {
        check_field(k)?;
        if v.contains(['\t', '\n', '\r']) {
            return Err(Error::Config(format!("meta value {v:?} contains a separator")));
        }
        meta.push_str(&format!("{k}\t{v}\n"));
    }
    let path = dir.join(META);
    fs::write(&path, meta).map_err(|e| Error::io(&path, e))
}

pub fn load_checkpoint(dir: &Path) -> Result<Checkpoint> {
    let corrupt = |msg: String| Error::CorruptCheckpoint(format!("{}: {msg}", dir.display()));
    let path = dir.join(MANIFEST);
    let manifest = fs::read_to_string(&path).map_err(|e| corrupt(format!("manifest unreadable: {e}")))?;
    let mut tensors = ParamSet::new();
    for (lineno, line) in manifest.lines().enumerate().filter(|(_, l)| !l.trim().is_empty()) {
        let cols: Vec<&str> = line.split('\t').collect();
        let [name, shape, dtype, file, crc] = cols[..] else {
            return Err(corrupt(format!("manifest line {} has {} columns", lineno + 1, cols.len())));
        };
        if dtype != "f32" {
            return Err(corrupt(format!("{name}: unsupported dtype {dtype}")));
        }
        if tensors.contains(name) {
            return Err(corrupt(format!("duplicate tensor {name}")));
        }
        let shape: Vec<usize> = shape
            .split(',')
            .map(|s| s.parse::<usize>().ok().filter(|&d| d > 0))
            .collect::<Option<_>>()
            .ok_or_else(|| corrupt(format!("{name}: bad shape {shape:?}")))?;
        let fpath = dir.join(file);
        let bytes = fs::read(&fpath).map_err(|e| corrupt(format!("{file}: {e}")))?;
        if crc != "-" {
            let want = u32::from_str_radix(crc, 16).map_err(|_| corrupt(format!("{name}: bad crc {crc:?}")))?;
            if crc32fast::hash(&bytes) != want {
                return Err(corrupt(format!("{file}: checksum mismatch")));
            }
        }
        let count: usize = shape.iter().product();
        if bytes.len() != count * 4 {
            return Err(corrupt(format!("{file}: {} bytes for shape {shape:?}", bytes.len())));
        }
        let data = bytes
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect();
        tensors.insert(name, Tensor::from_vec(&shape, data)?);
    }
    let mut meta = BTreeMap::new();
    let mpath = dir.join(META);
    if mpath.exists() {
        let text = fs::read_to_string(&mpath).map_err(|e| Error::io(&mpath, e))?;
        for line in text.lines().filter(|l| !l.is_empty()) {
            let (k, v) = line
                .split_once('\t')
                .ok_or_else(|| corrupt(format!("meta line {line:?}")))?;
            meta.insert(k.to_string(), v.to_string());
        }
    }
    Ok(Checkpoint { tensors, meta })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backbone::{init_backbone, BackboneConfig};

    #[test]
    fn round_trip_is_bit_exact() {
        let dir = tempfile::tempdir().unwrap();
        let mut ckpt = init_backbone(&BackboneConfig::default(), 11).unwrap();
        ckpt.set_meta("task", "rotation");
        save_checkpoint(&ckpt, dir.path()).unwrap();
        assert_eq!(load_checkpoint(dir.path()).unwrap(), ckpt);
    }

    #[test]
    fn tampered_tensor_is_detected() {
        let dir = tempfile::tempdir().unwrap();
        let ckpt = init_backbone(&BackboneConfig::default(), 11).unwrap();
        save_checkpoint(&ckpt, dir.path()).unwrap();
        let f = dir.path().join("backbone.stem.conv.weight.f32");
        let mut bytes = fs::read(&f).unwrap();
        bytes[3] ^= 0x40;
        fs::write(&f, bytes).unwrap();
        assert!(matches!(load_checkpoint(dir.path()), Err(Error::CorruptCheckpoint(_))));
    }

    #[test]
    fn missing_tensor_file_is_detected() {
        let dir = tempfile::tempdir().unwrap();
        let ckpt = init_backbone(&BackboneConfig::default(), 11).unwrap();
        save_checkpoint(&ckpt, dir.path()).unwrap();
        fs::remove_file(dir.path().join("backbone.stem.bn.bias.f32")).unwrap();
        assert!(matches!(load_checkpoint(dir.path()), Err(Error::CorruptCheckpoint(_))));
    }

    #[test]
    fn disabled_checksum_skips_verification() {
        let dir = tempfile::tempdir().unwrap();
        let mut ps = ParamSet::new();
        ps.insert("w", Tensor::from_vec(&[2], vec![1.0f32, 2.0]).unwrap());
        save_checkpoint(&Checkpoint::new(ps), dir.path()).unwrap();
        let m = dir.path().join(MANIFEST);
        let text = fs::read_to_string(&m).unwrap();
        let row: Vec<&str> = text.trim_end().split('\t').collect();
        fs::write(&m, format!("{}\t-\n", row[..4].join("\t"))).unwrap();
        fs::write(dir.path().join("w.f32"), [3.0f32, 4.0].iter().flat_map(|v| v.to_le_bytes()).collect::<Vec<_>>()).unwrap();
        let back = load_checkpoint(dir.path()).unwrap();
        assert_eq!(back.tensors.get("w").unwrap().data(), &[3.0, 4.0]);
    }
}
