//! Binary array blobs and the on-disk dataset directory layout.
//!
//! Blob format (all integers little-endian):
//!
//! ```text
//! offset 0  magic  b"SMBL"
//! offset 4  format version, u8 (currently 1)
//! offset 5  dtype code, u8 (1 = f32, 2 = f64, 3 = u32)
//! offset 6  ndim, u16
//! offset 8  ndim x u64 dimension sizes
//! then      product(dims) elements, little-endian
//! ```
//!
//! A dataset directory holds one blob per modality per split
//! (`a_images.blob`, `a_texts.blob`, `b_texts.blob`, `b_audio.blob`, and
//! the `eval_a_*`/`eval_b_*` counterparts) plus `manifest.json` with the
//! generation spec, vocabulary, per-sample scene records, and blob
//! checksums.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::datagen::{DatasetSpec, Scene, TriModalSample, Vocab, World, TEXT_LEN};
use crate::ensure_arg;
use crate::error::{Error, Result};
use crate::scalar::{Dtype, Scalar};
use crate::tensor::Tensor;

const BLOB_MAGIC: &[u8; 4] = b"SMBL";
const BLOB_VERSION: u8 = 1;
pub const MANIFEST_NAME: &str = "manifest.json";

fn encode_header(dtype: Dtype, dims: &[usize], out: &mut Vec<u8>) {
    out.extend_from_slice(BLOB_MAGIC);
    out.push(BLOB_VERSION);
    out.push(dtype.code());
    out.extend_from_slice(&(dims.len() as u16).to_le_bytes());
    for &d in dims {
        out.extend_from_slice(&(d as u64).to_le_bytes());
    }
}

fn decode_header(bytes: &[u8]) -> Result<(Dtype, Vec<usize>, usize)> {
    ensure_arg!(bytes.len() >= 8, "blob too short for header");
    if &bytes[0..4] != BLOB_MAGIC {
        return Err(Error::Format("bad blob magic".into()));
    }
    if bytes[4] != BLOB_VERSION {
        return Err(Error::Format(format!("unsupported blob version {}", bytes[4])));
    }
    let dtype = Dtype::from_code(bytes[5])
        .ok_or_else(|| Error::Format(format!("unknown dtype code {}", bytes[5])))?;
    let ndim = u16::from_le_bytes([bytes[6], bytes[7]]) as usize;
    let mut off = 8;
    ensure_arg!(bytes.len() >= off + 8 * ndim, "blob too short for {} dims", ndim);
    let mut dims = Vec::with_capacity(ndim);
    for _ in 0..ndim {
        let d = u64::from_le_bytes(bytes[off..off + 8].try_into().expect("8 bytes"));
        dims.push(d as usize);
        off += 8;
    }
    Ok((dtype, dims, off))
}

pub fn encode_tensor<S: Scalar>(t: &Tensor<S>) -> Vec<u8> {
    let mut out = Vec::with_capacity(8 + 8 * t.rank() + t.len() * S::DTYPE.byte_width());
    encode_header(S::DTYPE, t.dims(), &mut out);
    for &x in t.data() {
        x.write_le(&mut out);
    }
    out
}

pub fn decode_tensor<S: Scalar>(bytes: &[u8]) -> Result<Tensor<S>> {
    let (dtype, dims, off) = decode_header(bytes)?;
    if dtype != S::DTYPE {
        return Err(Error::Format(format!(
            "blob holds {:?}, expected {:?}",
            dtype,
            S::DTYPE
        )));
    }
    let n: usize = dims.iter().product();
    let w = dtype.byte_width();
    ensure_arg!(bytes.len() == off + n * w, "blob payload length mismatch");
    let data = (0..n).map(|i| S::read_le(&bytes[off + i * w..])).collect();
    Ok(Tensor::from_vec(&dims, data))
}

pub fn encode_u32(dims: &[usize], data: &[u32]) -> Vec<u8> {
    assert_eq!(dims.iter().product::<usize>(), data.len(), "u32 blob shape mismatch");
    let mut out = Vec::with_capacity(8 + 8 * dims.len() + data.len() * 4);
    encode_header(Dtype::U32, dims, &mut out);
    for &x in data {
        out.extend_from_slice(&x.to_le_bytes());
    }
    out
}

pub fn decode_u32(bytes: &[u8]) -> Result<(Vec<usize>, Vec<u32>)> {
    let (dtype, dims, off) = decode_header(bytes)?;
    if dtype != Dtype::U32 {
        return Err(Error::Format(format!("blob holds {:?}, expected U32", dtype)));
    }
    let n: usize = dims.iter().product();
    ensure_arg!(bytes.len() == off + n * 4, "blob payload length mismatch");
    let data = (0..n)
        .map(|i| u32::from_le_bytes(bytes[off + i * 4..off + i * 4 + 4].try_into().expect("4 bytes")))
        .collect();
    Ok((dims, data))
}

pub fn write_tensor<S: Scalar>(path: &Path, t: &Tensor<S>) -> Result<()> {
    fs::write(path, encode_tensor(t))?;
    Ok(())
}

pub fn read_tensor<S: Scalar>(path: &Path) -> Result<Tensor<S>> {
    decode_tensor(&fs::read(path)?)
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    let mut h = Sha256::new();
    h.update(bytes);
    let digest = h.finalize();
    digest.iter().map(|b| format!("{:02x}", b)).collect()
}

pub fn file_sha256(path: &Path) -> Result<String> {
    Ok(sha256_hex(&fs::read(path)?))
}

/// Sorted file-name to checksum map over a directory's regular files.
pub fn dir_checksums(dir: &Path) -> Result<BTreeMap<String, String>> {
    let mut out = BTreeMap::new();
    let mut entries: Vec<_> = fs::read_dir(dir)?.collect::<std::io::Result<_>>()?;
    entries.sort_by_key(|e| e.file_name());
    for e in entries {
        if e.file_type()?.is_file() {
            out.insert(
                e.file_name().to_string_lossy().into_owned(),
                file_sha256(&e.path())?,
            );
        }
    }
    Ok(out)
}

#[derive(Serialize, Deserialize)]
struct DatasetManifest {
    format_version: u32,
    spec: DatasetSpec,
    vocab: Vocab,
    a_tokens: Vec<u32>,
    b_tokens: Vec<u32>,
    /// Per-sample scene records, keyed by split name.
    samples: BTreeMap<String, Vec<Scene>>,
    /// sha-256 of every blob file in the directory.
    checksums: BTreeMap<String, String>,
}

const SPLITS: [(&str, bool); 4] = [("a", true), ("b", false), ("eval_a", true), ("eval_b", false)];

fn split_samples<'w>(world: &'w World, name: &str) -> &'w [TriModalSample] {
    match name {
        "a" => &world.a,
        "b" => &world.b,
        "eval_a" => &world.eval_a,
        "eval_b" => &world.eval_b,
        _ => unreachable!("unknown split {name}"),
    }
}

/// Write a generated world into `dir` (created if missing).
pub fn save_world(dir: &Path, world: &World) -> Result<()> {
    fs::create_dir_all(dir)?;
    let spec = &world.spec;
    let mut checksums = BTreeMap::new();
    let mut samples = BTreeMap::new();

    let mut put = |name: String, bytes: Vec<u8>| -> Result<()> {
        checksums.insert(name.clone(), sha256_hex(&bytes));
        fs::write(dir.join(name), bytes)?;
        Ok(())
    };

    for (split, has_image) in SPLITS {
        let items = split_samples(world, split);
        let n = items.len();

        let mut texts = Vec::with_capacity(n * TEXT_LEN);
        for s in items {
            texts.extend_from_slice(&s.text);
        }
        put(format!("{split}_texts.blob"), encode_u32(&[n, TEXT_LEN], &texts))?;

        if has_image {
            let (h, w) = (spec.image_h, spec.image_w);
            let mut data = Vec::with_capacity(n * h * w);
            for s in items {
                data.extend_from_slice(s.image.as_ref().expect("A-side sample has image").data());
            }
            let stacked = Tensor::from_vec(&[n, h, w], data);
            put(format!("{split}_images.blob"), encode_tensor(&stacked))?;
        } else {
            let (t, f) = (spec.audio_rows(), spec.bands);
            let mut data = Vec::with_capacity(n * t * f);
            for s in items {
                data.extend_from_slice(s.audio.as_ref().expect("B-side sample has audio").data());
            }
            let stacked = Tensor::from_vec(&[n, t, f], data);
            put(format!("{split}_audio.blob"), encode_tensor(&stacked))?;
        }

        samples.insert(split.to_string(), items.iter().map(|s| s.scene).collect());
    }

    let manifest = DatasetManifest {
        format_version: 1,
        spec: spec.clone(),
        vocab: world.vocab.clone(),
        a_tokens: world.a_tokens.iter().copied().collect(),
        b_tokens: world.b_tokens.iter().copied().collect(),
        samples,
        checksums,
    };
    fs::write(dir.join(MANIFEST_NAME), serde_json::to_vec_pretty(&manifest)?)?;
    Ok(())
}

/// Load a dataset directory written by [`save_world`], verifying blob
/// checksums against the manifest.
pub fn load_world(dir: &Path) -> Result<World> {
    let manifest_path = dir.join(MANIFEST_NAME);
    if !manifest_path.exists() {
        return Err(Error::InvalidArgument(format!(
            "{} is not a dataset directory (missing {})",
            dir.display(),
            MANIFEST_NAME
        )));
    }
    let manifest: DatasetManifest = serde_json::from_slice(&fs::read(manifest_path)?)?;
    if manifest.format_version != 1 {
        return Err(Error::Format(format!(
            "unsupported dataset format version {}",
            manifest.format_version
        )));
    }
    for (name, expected) in &manifest.checksums {
        let actual = file_sha256(&dir.join(name))?;
        if actual != *expected {
            return Err(Error::Format(format!("checksum mismatch for {}", name)));
        }
    }

    let spec = manifest.spec.clone();
    let load_split = |split: &str, has_image: bool| -> Result<Vec<TriModalSample>> {
        let scenes = manifest
            .samples
            .get(split)
            .ok_or_else(|| Error::Format(format!("manifest missing split {}", split)))?;
        let n = scenes.len();

        let bytes = fs::read(dir.join(format!("{split}_texts.blob")))?;
        let (tdims, texts) = decode_u32(&bytes)?;
        ensure_arg!(tdims == vec![n, TEXT_LEN], "text blob shape mismatch in split {}", split);

        let arrays: Tensor<f32> = read_tensor(&dir.join(if has_image {
            format!("{split}_images.blob")
        } else {
            format!("{split}_audio.blob")
        }))?;
        let per = arrays.len() / n.max(1);

        Ok((0..n)
            .map(|i| {
                let text = texts[i * TEXT_LEN..(i + 1) * TEXT_LEN].to_vec();
                let grid = Tensor::from_vec(
                    &arrays.dims()[1..],
                    arrays.data()[i * per..(i + 1) * per].to_vec(),
                );
                TriModalSample {
                    scene: scenes[i],
                    text,
                    image: has_image.then(|| grid.clone()),
                    audio: (!has_image).then(|| grid.clone()),
                }
            })
            .collect())
    };

    let a = load_split("a", true)?;
    let b = load_split("b", false)?;
    let eval_a = load_split("eval_a", true)?;
    let eval_b = load_split("eval_b", false)?;

    Ok(World {
        spec,
        vocab: manifest.vocab,
        a,
        b,
        eval_a,
        eval_b,
        a_tokens: manifest.a_tokens.into_iter().collect(),
        b_tokens: manifest.b_tokens.into_iter().collect(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::datagen::generate_datasets;

    #[test]
    fn tensor_blob_round_trip_f32_and_f64() {
        let t32 = Tensor::<f32>::from_vec(&[2, 3], vec![0.0, -1.5, 2.25, 3.0, 4.5, -6.0]);
        let back: Tensor<f32> = decode_tensor(&encode_tensor(&t32)).unwrap();
        assert!(t32.bit_eq(&back));

        let t64 = Tensor::<f64>::from_vec(&[4], vec![1e-300, -2.0, 0.1, 7.0]);
        let back: Tensor<f64> = decode_tensor(&encode_tensor(&t64)).unwrap();
        assert!(t64.bit_eq(&back));
    }

    #[test]
    fn u32_blob_round_trip() {
        let dims = vec![3, 2];
        let data = vec![0u32, 1, 2, 3, 4, u32::MAX];
        let (d2, back) = decode_u32(&encode_u32(&dims, &data)).unwrap();
        assert_eq!(d2, dims);
        assert_eq!(back, data);
    }

    #[test]
    fn decode_rejects_wrong_dtype_and_corruption() {
        let t = Tensor::<f32>::from_vec(&[2], vec![1.0, 2.0]);
        let bytes = encode_tensor(&t);
        assert!(decode_tensor::<f64>(&bytes).is_err());
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(decode_tensor::<f32>(&bad).is_err());
        let mut short = bytes;
        short.truncate(10);
        assert!(decode_tensor::<f32>(&short).is_err());
    }

    #[test]
    fn world_save_load_round_trip_is_exact() {
        let world = generate_datasets(&Default::default()).unwrap();
        let dir = tempfile::tempdir().unwrap();
        save_world(dir.path(), &world).unwrap();
        let back = load_world(dir.path()).unwrap();

        assert_eq!(back.spec, world.spec);
        assert_eq!(back.a_tokens, world.a_tokens);
        assert_eq!(back.b_tokens, world.b_tokens);
        assert_eq!(back.a.len(), world.a.len());
        for (x, y) in world.a.iter().zip(&back.a) {
            assert_eq!(x.scene, y.scene);
            assert_eq!(x.text, y.text);
            assert!(x.image.as_ref().unwrap().bit_eq(y.image.as_ref().unwrap()));
            assert!(y.audio.is_none());
        }
        for (x, y) in world.b.iter().zip(&back.b) {
            assert!(x.audio.as_ref().unwrap().bit_eq(y.audio.as_ref().unwrap()));
            assert!(y.image.is_none());
        }
        assert_eq!(back.eval_a.len(), world.eval_a.len());
        assert_eq!(back.eval_b.len(), world.eval_b.len());
    }

    #[test]
    fn same_world_saves_to_identical_checksums() {
        let spec = DatasetSpec::default();
        let d1 = tempfile::tempdir().unwrap();
        let d2 = tempfile::tempdir().unwrap();
        save_world(d1.path(), &generate_datasets(&spec).unwrap()).unwrap();
        save_world(d2.path(), &generate_datasets(&spec).unwrap()).unwrap();
        assert_eq!(dir_checksums(d1.path()).unwrap(), dir_checksums(d2.path()).unwrap());
    }

    #[test]
    fn load_detects_tampered_blob() {
        let world = generate_datasets(&Default::default()).unwrap();
        let dir = tempfile::tempdir().unwrap();
        save_world(dir.path(), &world).unwrap();
        let victim = dir.path().join("a_images.blob");
        let mut bytes = fs::read(&victim).unwrap();
        let last = bytes.len() - 1;
        bytes[last] ^= 0xff;
        fs::write(&victim, bytes).unwrap();
        assert!(matches!(load_world(dir.path()), Err(Error::Format(_))));
    }

    #[test]
    fn missing_manifest_is_an_invalid_argument() {
        let dir = tempfile::tempdir().unwrap();
        assert!(matches!(load_world(dir.path()), Err(Error::InvalidArgument(_))));
    }
}
