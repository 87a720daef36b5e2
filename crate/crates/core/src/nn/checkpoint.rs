//! JSON checkpoint format.
//!
//! ```json
//! {
//!   "format": "riskguard-params/1",
//!   "meta": { ...free-form model configuration... },
//!   "tensors": [ { "name": "embed.weight", "shape": [99, 128], "data": [ ... ] } ]
//! }
//! ```
//!
//! `data` is row-major. Tensors are matched by name on load, so the file
//! order is irrelevant, but every model tensor must be present with an
//! identical shape.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{NnError, ParamStore, Tensor};

pub const FORMAT: &str = "riskguard-params/1";

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct NamedTensor {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct Checkpoint {
    pub format: String,
    #[serde(default)]
    pub meta: serde_json::Value,
    pub tensors: Vec<NamedTensor>,
}

impl Checkpoint {
    pub fn from_store(store: &ParamStore, meta: serde_json::Value) -> Self {
        let tensors = store
            .iter()
            .map(|(name, t)| NamedTensor { name: name.to_string(), shape: t.shape().to_vec(), data: t.data().to_vec() })
            .collect();
        Self { format: FORMAT.to_string(), meta, tensors }
    }

    pub fn load_into(&self, store: &mut ParamStore) -> Result<(), NnError> {
        if self.format != FORMAT {
            return Err(NnError::Checkpoint(format!("unsupported format {:?}", self.format)));
        }
        let entries = self
            .tensors
            .iter()
            .map(|t| Ok((t.name.clone(), Tensor::new(&t.shape, t.data.clone())?)))
            .collect::<Result<Vec<_>, NnError>>()?;
        store.load_named(&entries)
    }

    pub fn save(&self, path: &Path) -> Result<(), NnError> {
        let text = serde_json::to_string(self).map_err(|e| NnError::Checkpoint(e.to_string()))?;
        fs::write(path, text).map_err(|e| NnError::Checkpoint(format!("{}: {e}", path.display())))
    }

    pub fn load(path: &Path) -> Result<Self, NnError> {
        let text = fs::read_to_string(path).map_err(|e| NnError::Checkpoint(format!("{}: {e}", path.display())))?;
        serde_json::from_str(&text).map_err(|e| NnError::Checkpoint(format!("{}: {e}", path.display())))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn store_round_trip_is_exact() {
        let mut a = ParamStore::new();
        a.add("w", Tensor::new(&[2, 2], vec![0.1, -1.0 / 3.0, 1e-300, 7.0]).unwrap());
        a.add("b", Tensor::new(&[2], vec![f64::MIN_POSITIVE, -0.0]).unwrap());
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("ck.json");
        Checkpoint::from_store(&a, serde_json::json!({"kind": "test"})).save(&path).unwrap();

        let mut b = a.clone();
        for v in b.values_mut() {
            v.data_mut().iter_mut().for_each(|x| *x = 9.0);
        }
        let ck = Checkpoint::load(&path).unwrap();
        ck.load_into(&mut b).unwrap();
        assert_eq!(a, b);
        assert_eq!(ck.meta["kind"], "test");
    }

    #[test]
    fn shape_mismatch_is_rejected() {
        let mut a = ParamStore::new();
        a.add("w", Tensor::zeros(&[2, 2]));
        let mut b = ParamStore::new();
        b.add("w", Tensor::zeros(&[4]));
        let ck = Checkpoint::from_store(&a, serde_json::Value::Null);
        assert!(matches!(ck.load_into(&mut b), Err(NnError::Layout(_))));
    }
}
