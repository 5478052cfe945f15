//! Upload and checkpoint containers.
//!
//! A container is a directory holding `manifest.json` plus raw row-major
//! little-endian float32 blobs. The format is language-neutral and
//! bit-exact, so an upload can be produced by one process and consumed by
//! another without loss.

use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};
use ndarray::{Array2, Array3, ArrayD, IxDyn};
use serde::{Deserialize, Serialize};
use std::fs::{self, File};
use std::io::{BufReader, BufWriter};
use std::path::Path;

use crate::error::{Error, Result};
use crate::types::{ClientUpload, ConceptVectors, LatentTensor};

pub const UPLOAD_SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Serialize, Deserialize)]
struct UploadManifest {
    schema_version: u32,
    client_id: u64,
    num_latents: usize,
    latent_shape: [usize; 3],
    labels: Vec<usize>,
    num_classes: usize,
    n_s: usize,
    n_v: usize,
    d_w: usize,
    optimized_v: Vec<bool>,
    domain_id: Option<usize>,
    dtype: String,
    byte_order: String,
    seed_provenance: String,
}

fn write_blob(path: &Path, values: impl Iterator<Item = f64>) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    for v in values {
        w.write_f32::<LittleEndian>(v as f32)?;
    }
    Ok(())
}

fn read_blob(path: &Path, expected_len: usize) -> Result<Vec<f64>> {
    let meta = fs::metadata(path)?;
    if meta.len() as usize != expected_len * 4 {
        return Err(Error::CorruptUpload(format!(
            "{} holds {} bytes, manifest expects {}",
            path.display(),
            meta.len(),
            expected_len * 4
        )));
    }
    let mut r = BufReader::new(File::open(path)?);
    let mut out = Vec::with_capacity(expected_len);
    for _ in 0..expected_len {
        out.push(r.read_f32::<LittleEndian>()? as f64);
    }
    Ok(out)
}

/// Writes one client upload as `manifest.json` + `latents.bin`, `S.bin`,
/// `V.bin` under `dir` (created if absent).
pub fn write_upload(upload: &ClientUpload, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir)?;
    let (h, w, c) = upload.latent_shape();
    let manifest = UploadManifest {
        schema_version: UPLOAD_SCHEMA_VERSION,
        client_id: upload.client_id,
        num_latents: upload.latents.len(),
        latent_shape: [h, w, c],
        labels: upload.latents.iter().map(|(_, y)| *y).collect(),
        num_classes: upload.concepts.num_classes(),
        n_s: upload.concepts.s.shape()[0],
        n_v: upload.concepts.v.shape()[1],
        d_w: upload.concepts.token_width(),
        optimized_v: upload.concepts.optimized.clone(),
        domain_id: upload.domain_id,
        dtype: "float32".into(),
        byte_order: "little-endian".into(),
        seed_provenance: upload.seed_provenance.clone(),
    };
    fs::write(dir.join("manifest.json"), serde_json::to_string_pretty(&manifest)?)?;
    write_blob(
        &dir.join("latents.bin"),
        upload.latents.iter().flat_map(|(z, _)| z.values().iter().copied()),
    )?;
    write_blob(&dir.join("S.bin"), upload.concepts.s.iter().copied())?;
    write_blob(&dir.join("V.bin"), upload.concepts.v.iter().copied())?;
    Ok(())
}

/// Reads an upload container back; every declared dimension is checked
/// against the blob sizes.
pub fn read_upload(dir: &Path) -> Result<ClientUpload> {
    let manifest: UploadManifest =
        serde_json::from_str(&fs::read_to_string(dir.join("manifest.json"))?)?;
    if manifest.schema_version != UPLOAD_SCHEMA_VERSION {
        return Err(Error::CorruptUpload(format!(
            "unsupported schema version {}",
            manifest.schema_version
        )));
    }
    if manifest.dtype != "float32" || manifest.byte_order != "little-endian" {
        return Err(Error::CorruptUpload("unsupported dtype or byte order".into()));
    }
    if manifest.labels.len() != manifest.num_latents {
        return Err(Error::CorruptUpload("label count != num_latents".into()));
    }
    let [h, w, c] = manifest.latent_shape;
    let per_latent = h * w * c;
    let raw = read_blob(&dir.join("latents.bin"), manifest.num_latents * per_latent)?;
    let mut latents = Vec::with_capacity(manifest.num_latents);
    for (i, &label) in manifest.labels.iter().enumerate() {
        let chunk = raw[i * per_latent..(i + 1) * per_latent].to_vec();
        let arr = Array3::from_shape_vec((h, w, c), chunk)
            .map_err(|e| Error::CorruptUpload(e.to_string()))?;
        latents.push((LatentTensor::new(arr)?, label));
    }
    let s_raw = read_blob(&dir.join("S.bin"), manifest.n_s * manifest.d_w)?;
    let s = Array2::from_shape_vec((manifest.n_s, manifest.d_w), s_raw)
        .map_err(|e| Error::CorruptUpload(e.to_string()))?;
    let v_raw = read_blob(
        &dir.join("V.bin"),
        manifest.num_classes * manifest.n_v * manifest.d_w,
    )?;
    let v = Array3::from_shape_vec((manifest.num_classes, manifest.n_v, manifest.d_w), v_raw)
        .map_err(|e| Error::CorruptUpload(e.to_string()))?;
    let concepts = ConceptVectors::new(s, v, manifest.optimized_v)?;
    ClientUpload::new(
        manifest.client_id,
        latents,
        concepts,
        manifest.domain_id,
        manifest.seed_provenance,
    )
}

#[derive(Debug, Serialize, Deserialize)]
struct WeightsManifest {
    schema_version: u32,
    names: Vec<String>,
    shapes: Vec<Vec<usize>>,
    dtype: String,
    byte_order: String,
}

/// Writes a set of named tensors (checkpoints use the same container
/// convention as uploads: manifest + one f32 blob).
pub fn write_tensors(dir: &Path, tensors: &[(String, ArrayD<f64>)]) -> Result<()> {
    fs::create_dir_all(dir)?;
    let manifest = WeightsManifest {
        schema_version: UPLOAD_SCHEMA_VERSION,
        names: tensors.iter().map(|(n, _)| n.clone()).collect(),
        shapes: tensors.iter().map(|(_, t)| t.shape().to_vec()).collect(),
        dtype: "float32".into(),
        byte_order: "little-endian".into(),
    };
    fs::write(dir.join("manifest.json"), serde_json::to_string_pretty(&manifest)?)?;
    write_blob(
        &dir.join("weights.bin"),
        tensors.iter().flat_map(|(_, t)| t.iter().copied()),
    )?;
    Ok(())
}

pub fn read_tensors(dir: &Path) -> Result<Vec<(String, ArrayD<f64>)>> {
    let manifest: WeightsManifest =
        serde_json::from_str(&fs::read_to_string(dir.join("manifest.json"))?)?;
    let total: usize = manifest.shapes.iter().map(|s| s.iter().product::<usize>()).sum();
    let raw = read_blob(&dir.join("weights.bin"), total)?;
    let mut tensors = Vec::with_capacity(manifest.names.len());
    let mut offset = 0;
    for (name, shape) in manifest.names.into_iter().zip(manifest.shapes) {
        let len: usize = shape.iter().product();
        let arr = ArrayD::from_shape_vec(IxDyn(&shape), raw[offset..offset + len].to_vec())
            .map_err(|e| Error::CorruptUpload(e.to_string()))?;
        tensors.push((name, arr));
        offset += len;
    }
    Ok(tensors)
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::Array3;
    use rand::RngExt;

    fn sample_upload(n: usize, num_classes: usize, n_s: usize, n_v: usize, d_w: usize) -> ClientUpload {
        let mut rng = crate::rng::derive_rng(7, crate::rng::RngScope::Noise, 0);
        let latents = (0..n)
            .map(|i| {
                let z = Array3::from_shape_fn((4, 4, 2), |_| rng.random_range(-2.0..2.0));
                (LatentTensor::new(z).unwrap(), i % num_classes)
            })
            .collect();
        let s = Array2::from_shape_fn((n_s, d_w), |_| rng.random_range(-1.0..1.0));
        let v = Array3::from_shape_fn((num_classes, n_v, d_w), |_| rng.random_range(-1.0..1.0));
        let concepts = ConceptVectors::new(s, v, vec![true; num_classes]).unwrap();
        ClientUpload::new(3, latents, concepts, Some(1), "seed=7".into()).unwrap()
    }

    #[test]
    fn round_trip_is_identity() {
        let dir = tempfile::tempdir().unwrap();
        let upload = sample_upload(5, 3, 2, 2, 8);
        write_upload(&upload, dir.path()).unwrap();
        let back = read_upload(dir.path()).unwrap();
        assert_eq!(upload, back);
    }

    #[test]
    fn manifest_records_declared_dims() {
        let dir = tempfile::tempdir().unwrap();
        let upload = sample_upload(4, 7, 4, 4, 64);
        write_upload(&upload, dir.path()).unwrap();
        let back = read_upload(dir.path()).unwrap();
        assert_eq!(back.concepts.num_classes(), 7);
        assert_eq!(back.concepts.s.shape(), &[4, 64]);
        assert_eq!(back.concepts.v.shape(), &[7, 4, 64]);
        assert_eq!(back.latents.len(), 4);
        assert_eq!(back.domain_id, Some(1));
    }

    #[test]
    fn truncated_blob_is_corrupt_upload() {
        let dir = tempfile::tempdir().unwrap();
        let upload = sample_upload(16, 3, 2, 2, 8);
        write_upload(&upload, dir.path()).unwrap();
        // Drop one latent's worth of bytes: manifest says 16, blob holds 15.
        let blob = dir.path().join("latents.bin");
        let bytes = fs::read(&blob).unwrap();
        fs::write(&blob, &bytes[..bytes.len() - 4 * 4 * 2 * 4]).unwrap();
        match read_upload(dir.path()) {
            Err(Error::CorruptUpload(_)) => {}
            other => panic!("expected corrupt-upload error, got {other:?}"),
        }
    }

    #[test]
    fn missing_blob_is_io_error() {
        let dir = tempfile::tempdir().unwrap();
        let upload = sample_upload(2, 3, 1, 1, 4);
        write_upload(&upload, dir.path()).unwrap();
        fs::remove_file(dir.path().join("S.bin")).unwrap();
        assert!(matches!(read_upload(dir.path()), Err(Error::Io(_))));
    }

    #[test]
    fn tensor_container_round_trips() {
        let dir = tempfile::tempdir().unwrap();
        let t1 = ArrayD::from_shape_vec(IxDyn(&[2, 3]), vec![1.0f64, 2.0, 3.0, 4.0, 5.0, 6.0])
            .unwrap();
        let t2 = ArrayD::from_shape_vec(IxDyn(&[4]), vec![0.25f64, -0.5, 0.75, 1.0]).unwrap();
        write_tensors(dir.path(), &[("a".into(), t1.clone()), ("b".into(), t2.clone())]).unwrap();
        let back = read_tensors(dir.path()).unwrap();
        assert_eq!(back[0].1, t1);
        assert_eq!(back[1].1, t2);
    }
}
