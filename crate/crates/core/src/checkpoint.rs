//! Versioned model files: a safetensors container whose tensors are the
//! network parameters and channel statistics, and whose metadata carries the
//! configuration, its fingerprint and the calibration.

use std::collections::{BTreeMap, HashMap};
use std::path::Path;

use candle_core::{DType, Device, Tensor};
use safetensors::tensor::{Dtype, TensorView};
use safetensors::SafeTensors;

use crate::error::{Error, Result};
use crate::features::ChannelStats;
use crate::inference::QuantileCalibration;
use crate::model::{ModelBundle, ModelConfig};

pub const FORMAT: &str = "ulsad-checkpoint";
pub const VERSION: u32 = 1;

const STATS_MU: &str = "stats.mu";
const STATS_SIGMA: &str = "stats.sigma";

fn persist(msg: impl std::fmt::Display) -> Error {
    Error::Persistence(msg.to_string())
}

fn f32_bytes(t: &Tensor) -> Result<Vec<u8>> {
    let v = t.to_dtype(DType::F32)?.flatten_all()?.to_vec1::<f32>()?;
    Ok(v.iter().flat_map(|x| x.to_le_bytes()).collect())
}

/// Write `model` to `path` (through a temporary file and a rename).
pub fn save_bundle(model: &ModelBundle, path: &Path) -> Result<()> {
    let mut buffers: Vec<(String, Vec<usize>, Vec<u8>)> = Vec::new();
    for (name, var) in model.params().named_vars() {
        buffers.push((name, var.dims().to_vec(), f32_bytes(var.as_tensor())?));
    }
    if let Some(stats) = &model.stats {
        let bytes = |v: &[f32]| v.iter().flat_map(|x| x.to_le_bytes()).collect::<Vec<u8>>();
        buffers.push((STATS_MU.into(), vec![stats.mu.len()], bytes(&stats.mu)));
        buffers.push((STATS_SIGMA.into(), vec![stats.sigma.len()], bytes(&stats.sigma)));
    }
    let views = buffers
        .iter()
        .map(|(name, shape, data)| {
            TensorView::new(Dtype::F32, shape.clone(), data)
                .map(|v| (name.clone(), v))
                .map_err(persist)
        })
        .collect::<Result<Vec<_>>>()?;

    let mut meta = HashMap::new();
    meta.insert("format".to_string(), FORMAT.to_string());
    meta.insert("version".to_string(), VERSION.to_string());
    meta.insert("fingerprint".to_string(), model.fingerprint());
    meta.insert(
        "model_config".to_string(),
        serde_json::to_string(model.config()).map_err(persist)?,
    );
    if let Some(cal) = &model.calibration {
        meta.insert(
            "calibration".to_string(),
            serde_json::to_string(cal).map_err(persist)?,
        );
    }

    let bytes = canonical_header(safetensors::serialize(views, Some(meta)).map_err(persist)?)?;
    let tmp = path.with_extension("tmp");
    std::fs::write(&tmp, bytes).map_err(|e| Error::io(&tmp, e))?;
    std::fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

/// Rewrite the JSON header with sorted keys so equal bundles give equal
/// files (the metadata map is hashed, so its order varies between runs).
fn canonical_header(bytes: Vec<u8>) -> Result<Vec<u8>> {
    let n = bytes
        .get(..8)
        .map(|b| u64::from_le_bytes(b.try_into().expect("8 bytes")) as usize)
        .ok_or_else(|| persist("short safetensors buffer"))?;
    let header: serde_json::Value = serde_json::from_slice(&bytes[8..8 + n]).map_err(persist)?;
    let mut text = serde_json::to_vec(&header).map_err(persist)?;
    // the format pads the header to 8-byte alignment with spaces
    while text.len() % 8 != 0 {
        text.push(b' ');
    }
    let mut out = Vec::with_capacity(8 + text.len() + bytes.len() - 8 - n);
    out.extend_from_slice(&(text.len() as u64).to_le_bytes());
    out.extend_from_slice(&text);
    out.extend_from_slice(&bytes[8 + n..]);
    Ok(out)
}

fn to_tensor(view: &TensorView<'_>, device: &Device) -> Result<Tensor> {
    if view.dtype() != Dtype::F32 {
        return Err(persist(format!("unexpected tensor dtype {:?}", view.dtype())));
    }
    let data: Vec<f32> = view
        .data()
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
        .collect();
    Ok(Tensor::from_vec(data, view.shape(), device)?)
}

/// Read a checkpoint. With `expected`, the stored configuration fingerprint
/// must match it.
pub fn load_bundle(path: &Path, expected: Option<&ModelConfig>, device: &Device) -> Result<ModelBundle> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    let where_ = path.display();
    let (_, header) = SafeTensors::read_metadata(&bytes)
        .map_err(|e| persist(format!("{where_} is not a model checkpoint: {e}")))?;
    let meta = header
        .metadata()
        .clone()
        .ok_or_else(|| persist(format!("{where_} has no checkpoint metadata")))?;
    let field = |k: &str| {
        meta.get(k)
            .ok_or_else(|| persist(format!("{where_} lacks the '{k}' field")))
    };
    if field("format")? != FORMAT {
        return Err(persist(format!("{where_} is not a {FORMAT} file")));
    }
    let version: u32 = field("version")?.parse().map_err(persist)?;
    if version != VERSION {
        return Err(persist(format!(
            "unsupported checkpoint version {version} (expected {VERSION})"
        )));
    }
    let config: ModelConfig = serde_json::from_str(field("model_config")?).map_err(persist)?;
    let stored = field("fingerprint")?;
    if *stored != config.fingerprint() {
        return Err(persist(
            "checkpoint fingerprint does not match its own configuration",
        ));
    }
    if let Some(exp) = expected {
        if exp.fingerprint() != *stored {
            return Err(persist(format!(
                "checkpoint was written for a different configuration (fingerprint {} vs {})",
                &stored[..12.min(stored.len())],
                &exp.fingerprint()[..12]
            )));
        }
    }
    let calibration: Option<QuantileCalibration> = meta
        .get("calibration")
        .map(|s| serde_json::from_str(s).map_err(persist))
        .transpose()?;

    let tensors = SafeTensors::deserialize(&bytes).map_err(persist)?;
    let mut params = BTreeMap::new();
    let mut stats: (Option<Vec<f32>>, Option<Vec<f32>>) = (None, None);
    for (name, view) in tensors.tensors() {
        let t = to_tensor(&view, device)?;
        match name.as_str() {
            STATS_MU => stats.0 = Some(t.to_vec1()?),
            STATS_SIGMA => stats.1 = Some(t.to_vec1()?),
            _ => {
                params.insert(name, t);
            }
        }
    }
    let mut model = ModelBundle::new(config, 0, device)
        .map_err(|e| persist(format!("invalid stored configuration: {e}")))?;
    if params.len() != model.params().named_vars().len() {
        return Err(persist(format!(
            "checkpoint holds {} parameters, model expects {}",
            params.len(),
            model.params().named_vars().len()
        )));
    }
    model.params().assign(&params)?;
    model.stats = match stats {
        (Some(mu), Some(sigma)) => Some(ChannelStats::new(mu, sigma).map_err(persist)?),
        (None, None) => None,
        _ => return Err(persist("checkpoint has partial channel statistics")),
    };
    model.calibration = calibration;
    Ok(model)
}
