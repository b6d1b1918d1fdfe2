//! Parameter checkpoints: `manifest.json` plus one raw little-endian array
//! per parameter. Save/load round-trips are bit-exact.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::engine::{ParamStore, Real, Tensor};
use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub file: String,
    pub trainable: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckpointManifest {
    pub dtype: String,
    pub params: Vec<ManifestEntry>,
}

fn file_name(index: usize, name: &str) -> String {
    let clean: String = name
        .chars()
        .map(|c| if c.is_ascii_alphanumeric() || c == '_' || c == '-' { c } else { '_' })
        .collect();
    format!("{index:04}_{clean}.bin")
}

pub fn save<T: Real>(store: &ParamStore<T>, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut entries = Vec::with_capacity(store.len());
    for (id, p) in store.iter() {
        let file = file_name(id.0, &p.name);
        let mut bytes = Vec::with_capacity(p.value.len() * T::BYTES);
        for &v in p.value.data() {
            v.write_le(&mut bytes);
        }
        let path = dir.join(&file);
        fs::write(&path, bytes).map_err(|e| Error::io(&path, e))?;
        entries.push(ManifestEntry {
            name: p.name.clone(),
            shape: p.value.shape().to_vec(),
            file,
            trainable: p.trainable,
        });
    }
    let manifest = CheckpointManifest {
        dtype: T::DTYPE.to_string(),
        params: entries,
    };
    let path = dir.join("manifest.json");
    let text = serde_json::to_string_pretty(&manifest).expect("manifest serializes");
    fs::write(&path, text).map_err(|e| Error::io(&path, e))
}

pub fn read_manifest(dir: &Path) -> Result<CheckpointManifest> {
    let path = dir.join("manifest.json");
    let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    serde_json::from_str(&text).map_err(|e| Error::format(&path, e.to_string()))
}

/// Load a checkpoint into a fresh store (parameter ids follow manifest order).
pub fn load<T: Real>(dir: &Path) -> Result<ParamStore<T>> {
    let manifest = read_manifest(dir)?;
    if manifest.dtype != T::DTYPE {
        return Err(Error::format(
            dir.join("manifest.json"),
            format!("dtype {} but loading as {}", manifest.dtype, T::DTYPE),
        ));
    }
    let mut store = ParamStore::new();
    for e in &manifest.params {
        let path = dir.join(&e.file);
        let bytes = fs::read(&path).map_err(|err| Error::io(&path, err))?;
        let n: usize = e.shape.iter().product();
        if bytes.len() != n * T::BYTES {
            return Err(Error::format(&path, format!("expected {} bytes, found {}", n * T::BYTES, bytes.len())));
        }
        let data = bytes.chunks_exact(T::BYTES).map(T::read_le).collect();
        let id = store.add(e.name.clone(), Tensor::new(&e.shape, data)?);
        store.set_trainable(id, e.trainable);
    }
    Ok(store)
}

/// Overwrite the values of `store` from a checkpoint, matching by name.
pub fn load_into<T: Real>(store: &mut ParamStore<T>, dir: &Path) -> Result<()> {
    let loaded: ParamStore<T> = load(dir)?;
    if loaded.len() != store.len() {
        return Err(Error::format(
            dir.join("manifest.json"),
            format!("{} parameters, model has {}", loaded.len(), store.len()),
        ));
    }
    for (_, p) in loaded.iter() {
        let id = store
            .find(&p.name)
            .ok_or_else(|| Error::format(dir.join("manifest.json"), format!("unknown parameter {}", p.name)))?;
        if store.value(id).shape() != p.value.shape() {
            return Err(Error::shape("checkpoint", format!("{}: {:?} vs {:?}", p.name, store.value(id).shape(), p.value.shape())));
        }
        store.get_mut(id).value = p.value.clone();
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::engine::Rng;

    #[test]
    fn roundtrip_is_bit_exact() {
        let dir = tempfile::tempdir().unwrap();
        let mut rng = Rng::new(5);
        let mut store = ParamStore::<f32>::new();
        store.add("block.0/w", Tensor::new(&[3, 4], (0..12).map(|_| rng.normal() as f32).collect()).unwrap());
        let b = store.add("b", Tensor::new(&[2], vec![f32::MIN_POSITIVE, -0.0]).unwrap());
        store.set_trainable(b, false);
        save(&store, dir.path()).unwrap();
        let back: ParamStore<f32> = load(dir.path()).unwrap();
        for ((_, p), (_, q)) in store.iter().zip(back.iter()) {
            assert_eq!(p.name, q.name);
            assert_eq!(p.trainable, q.trainable);
            let pb: Vec<u32> = p.value.data().iter().map(|v| v.to_bits()).collect();
            let qb: Vec<u32> = q.value.data().iter().map(|v| v.to_bits()).collect();
            assert_eq!(pb, qb);
        }
        assert!(load::<f64>(dir.path()).is_err());
    }
}
