use std::collections::BTreeMap;
use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::tensor::Tensor;
use crate::error::{GradError, Result};
use crate::rng::mix_seed;

/// Named parameters. Initialization of each entry depends only on the store
/// seed and the parameter path, never on creation order.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParameterStore {
    seed: u64,
    params: BTreeMap<String, Tensor>,
}

impl ParameterStore {
    pub fn new(seed: u64) -> Self {
        Self {
            seed,
            params: BTreeMap::new(),
        }
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    fn rng_for(&self, name: &str) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(mix_seed(self.seed, fnv1a(name)))
    }

    fn insert_new(&mut self, name: &str, t: Tensor) -> Result<()> {
        if self.params.contains_key(name) {
            return Err(GradError::InvalidConfig(format!(
                "duplicate parameter {name}"
            )));
        }
        self.params.insert(name.to_string(), t);
        Ok(())
    }

    /// Weight `[fan_in, fan_out]` drawn from `U(±1/sqrt(fan_in))`.
    pub fn init_weight(&mut self, name: &str, fan_in: usize, fan_out: usize) -> Result<()> {
        let bound = 1.0 / (fan_in as f64).sqrt();
        let mut rng = self.rng_for(name);
        let data = (0..fan_in * fan_out)
            .map(|_| rng.gen_range(-bound..bound))
            .collect();
        self.insert_new(name, Tensor::from_vec(fan_in, fan_out, data)?)
    }

    pub fn init_uniform(&mut self, name: &str, rows: usize, cols: usize, bound: f64) -> Result<()> {
        let mut rng = self.rng_for(name);
        let data = (0..rows * cols).map(|_| rng.gen_range(-bound..bound)).collect();
        self.insert_new(name, Tensor::from_vec(rows, cols, data)?)
    }

    pub fn init_const(&mut self, name: &str, rows: usize, cols: usize, value: f64) -> Result<()> {
        self.insert_new(name, Tensor::filled(rows, cols, value))
    }

    /// Weight and zero bias for a `fan_in -> fan_out` linear map.
    pub fn init_linear(&mut self, prefix: &str, fan_in: usize, fan_out: usize) -> Result<()> {
        self.init_weight(&format!("{prefix}.w"), fan_in, fan_out)?;
        self.init_const(&format!("{prefix}.b"), 1, fan_out, 0.0)
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.params.get(name)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.params.get_mut(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Tensor)> {
        self.params.iter()
    }

    pub fn names(&self) -> impl Iterator<Item = &String> {
        self.params.keys()
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn num_scalars(&self) -> usize {
        self.params.values().map(Tensor::len).sum()
    }

    /// Copy values from `other`, which must hold the same paths and shapes.
    pub fn load_from(&mut self, other: &ParameterStore) -> Result<()> {
        for (name, t) in self.params.iter_mut() {
            let src = other
                .get(name)
                .ok_or_else(|| GradError::MissingParameter(name.clone()))?;
            if src.shape() != t.shape() {
                return Err(GradError::ParameterShape {
                    path: name.clone(),
                    expected: t.shape(),
                    found: src.shape(),
                });
            }
            *t = src.clone();
        }
        Ok(())
    }

    pub fn save(&self, dir: &Path, file_stem: &str) -> Result<()> {
        save_tensors(dir, file_stem, self.seed, self.params.iter())
    }

    pub fn load(dir: &Path, file_stem: &str) -> Result<Self> {
        let (seed, params) = load_tensors(dir, file_stem)?;
        Ok(Self { seed, params })
    }
}

/// Manifest entry for one tensor in a checkpoint payload.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct TensorEntry {
    pub path: String,
    pub shape: [usize; 2],
    /// Offset in `f64` elements into the payload.
    pub offset: usize,
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct TensorManifest {
    pub format: String,
    pub seed: u64,
    pub payload: String,
    pub tensors: Vec<TensorEntry>,
}

const TENSOR_FORMAT: &str = "grad-tensors-v1";

/// Writes `<stem>.json` (manifest) and `<stem>.bin` (row-major little-endian
/// f64 payload) into `dir`.
pub fn save_tensors<'a>(
    dir: &Path,
    stem: &str,
    seed: u64,
    tensors: impl Iterator<Item = (&'a String, &'a Tensor)>,
) -> Result<()> {
    fs::create_dir_all(dir)?;
    let payload_name = format!("{stem}.bin");
    let mut entries = Vec::new();
    let mut bytes = Vec::new();
    let mut offset = 0;
    for (path, t) in tensors {
        entries.push(TensorEntry {
            path: path.clone(),
            shape: t.shape(),
            offset,
        });
        offset += t.len();
        for v in t.data() {
            bytes.extend_from_slice(&v.to_le_bytes());
        }
    }
    let manifest = TensorManifest {
        format: TENSOR_FORMAT.to_string(),
        seed,
        payload: payload_name.clone(),
        tensors: entries,
    };
    fs::File::create(dir.join(&payload_name))?.write_all(&bytes)?;
    fs::write(
        dir.join(format!("{stem}.json")),
        serde_json::to_vec_pretty(&manifest)?,
    )?;
    Ok(())
}

pub fn load_tensors(dir: &Path, stem: &str) -> Result<(u64, BTreeMap<String, Tensor>)> {
    let manifest_path = dir.join(format!("{stem}.json"));
    let bad = |reason: String| GradError::Checkpoint {
        path: manifest_path.clone(),
        reason,
    };
    let raw = fs::read(&manifest_path).map_err(|e| bad(e.to_string()))?;
    let manifest: TensorManifest =
        serde_json::from_slice(&raw).map_err(|e| bad(format!("corrupt manifest: {e}")))?;
    if manifest.format != TENSOR_FORMAT {
        return Err(bad(format!("unknown format {}", manifest.format)));
    }
    let payload_path = dir.join(&manifest.payload);
    let mut bytes = Vec::new();
    fs::File::open(&payload_path)
        .and_then(|mut f| f.read_to_end(&mut bytes))
        .map_err(|e| GradError::Checkpoint {
            path: payload_path.clone(),
            reason: e.to_string(),
        })?;
    if bytes.len() % 8 != 0 {
        return Err(GradError::Checkpoint {
            path: payload_path,
            reason: "payload length is not a multiple of 8".into(),
        });
    }
    let values: Vec<f64> = bytes
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
        .collect();
    let mut out = BTreeMap::new();
    for e in manifest.tensors {
        let n = e.shape[0] * e.shape[1];
        let slice = values.get(e.offset..e.offset + n).ok_or_else(|| GradError::Checkpoint {
            path: payload_path.clone(),
            reason: format!("payload truncated at parameter {}", e.path),
        })?;
        out.insert(e.path, Tensor::from_vec(e.shape[0], e.shape[1], slice.to_vec())?);
    }
    Ok((manifest.seed, out))
}

pub(crate) fn fnv1a(s: &str) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in s.bytes() {
        h ^= b as u64;
        h = h.wrapping_mul(0x0100_0000_01b3);
    }
    h
}
