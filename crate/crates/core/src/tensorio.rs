//! Safetensors archives with a string metadata map.

use std::collections::{BTreeMap, HashMap};
use std::path::Path;

use candle_core::{DType, Device, Tensor};
use safetensors::tensor::TensorView;
use safetensors::{Dtype, SafeTensors};

use crate::error::{Error, Result};

fn to_bytes(t: &Tensor) -> Result<(Dtype, Vec<u8>)> {
    let flat = t.flatten_all()?;
    Ok(match t.dtype() {
        DType::F64 => (
            Dtype::F64,
            flat.to_vec1::<f64>()?
                .iter()
                .flat_map(|v| v.to_le_bytes())
                .collect(),
        ),
        DType::F32 => (
            Dtype::F32,
            flat.to_vec1::<f32>()?
                .iter()
                .flat_map(|v| v.to_le_bytes())
                .collect(),
        ),
        DType::U32 => (
            Dtype::U32,
            flat.to_vec1::<u32>()?
                .iter()
                .flat_map(|v| v.to_le_bytes())
                .collect(),
        ),
        other => {
            return Err(Error::Shape(format!(
                "unsupported dtype {other:?} for archives"
            )));
        }
    })
}

fn from_view(view: &TensorView<'_>) -> Result<Tensor> {
    let shape = view.shape().to_vec();
    let data = view.data();
    let dev = &Device::Cpu;
    Ok(match view.dtype() {
        Dtype::F64 => {
            let v: Vec<f64> = data
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
                .collect();
            Tensor::from_vec(v, shape, dev)?
        }
        Dtype::F32 => {
            let v: Vec<f32> = data
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
                .collect();
            Tensor::from_vec(v, shape, dev)?
        }
        Dtype::U32 => {
            let v: Vec<u32> = data
                .chunks_exact(4)
                .map(|c| u32::from_le_bytes(c.try_into().expect("4 bytes")))
                .collect();
            Tensor::from_vec(v, shape, dev)?
        }
        other => return Err(Error::Shape(format!("unsupported archive dtype {other:?}"))),
    })
}

/// Writes `tensors` and `metadata` to `path`, creating parent directories.
pub fn save(
    path: &Path,
    tensors: &BTreeMap<String, Tensor>,
    metadata: HashMap<String, String>,
) -> Result<()> {
    if let Some(parent) = path.parent() {
        if !parent.as_os_str().is_empty() {
            std::fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
        }
    }
    let encoded: Vec<(String, Dtype, Vec<usize>, Vec<u8>)> = tensors
        .iter()
        .map(|(k, t)| {
            let (dt, bytes) = to_bytes(t)?;
            Ok((k.clone(), dt, t.dims().to_vec(), bytes))
        })
        .collect::<Result<_>>()?;
    let views = encoded
        .iter()
        .map(|(k, dt, shape, bytes)| {
            TensorView::new(*dt, shape.clone(), bytes)
                .map(|v| (k.clone(), v))
                .map_err(|e| Error::checkpoint(path, e.to_string()))
        })
        .collect::<Result<Vec<_>>>()?;
    safetensors::serialize_to_file(views, Some(metadata), path)
        .map_err(|e| Error::checkpoint(path, e.to_string()))
}

/// Reads every tensor and the metadata map of an archive.
pub fn load(path: &Path) -> Result<(BTreeMap<String, Tensor>, HashMap<String, String>)> {
    let buf = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    let st = SafeTensors::deserialize(&buf).map_err(|e| Error::checkpoint(path, e.to_string()))?;
    let (_, meta) =
        SafeTensors::read_metadata(&buf).map_err(|e| Error::checkpoint(path, e.to_string()))?;
    let tensors = st
        .tensors()
        .iter()
        .map(|(k, v)| Ok((k.clone(), from_view(v)?)))
        .collect::<Result<_>>()?;
    Ok((tensors, meta.metadata().clone().unwrap_or_default()))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip_preserves_values_and_metadata() {
        let dir = std::env::temp_dir().join(format!("tensorio-{}", std::process::id()));
        let path = dir.join("a.safetensors");
        let mut map = BTreeMap::new();
        let dev = Device::Cpu;
        map.insert(
            "x".into(),
            Tensor::new(&[[1.5f64, -2.0], [1e-300, 3.0]], &dev).unwrap(),
        );
        map.insert("y".into(), Tensor::new(&[0.25f32, 7.0], &dev).unwrap());
        map.insert("z".into(), Tensor::new(&[3u32, 1, 4], &dev).unwrap());
        let meta = HashMap::from([("k".to_string(), "v".to_string())]);
        save(&path, &map, meta.clone()).unwrap();
        let (back, m) = load(&path).unwrap();
        assert_eq!(m, meta);
        assert_eq!(
            back["x"].to_vec2::<f64>().unwrap(),
            map["x"].to_vec2::<f64>().unwrap()
        );
        assert_eq!(back["y"].to_vec1::<f32>().unwrap(), vec![0.25, 7.0]);
        assert_eq!(back["z"].to_vec1::<u32>().unwrap(), vec![3, 1, 4]);
        std::fs::remove_dir_all(dir).unwrap();
    }

    #[test]
    fn corrupted_archive_is_an_error() {
        let dir = std::env::temp_dir().join(format!("tensorio-bad-{}", std::process::id()));
        std::fs::create_dir_all(&dir).unwrap();
        let path = dir.join("bad.safetensors");
        std::fs::write(&path, b"not an archive").unwrap();
        assert!(matches!(load(&path), Err(Error::Checkpoint { .. })));
        std::fs::remove_dir_all(dir).unwrap();
    }
}
