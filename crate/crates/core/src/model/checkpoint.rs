use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{ModelArch, ModelBundle};
use crate::error::{Error, Result};
use crate::ndgraph::Tensor;

pub const CHECKPOINT_FORMAT: &str = "mmpda-checkpoint";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckpointEntry {
    pub name: String,
    pub shape: [usize; 2],
    pub values: Vec<f64>,
}

/// Flat JSON checkpoint. `params` follows [`super::Params::try_map`] order,
/// so the list doubles as the key order of the file.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub format: String,
    pub version: u32,
    pub arch: ModelArch,
    pub params: Vec<CheckpointEntry>,
}

impl Checkpoint {
    pub fn from_model(model: &ModelBundle) -> Self {
        let params = model
            .params
            .entries()
            .into_iter()
            .map(|(name, _, t)| CheckpointEntry {
                name,
                shape: t.shape(),
                values: t.data().to_vec(),
            })
            .collect();
        Checkpoint {
            format: CHECKPOINT_FORMAT.to_string(),
            version: CHECKPOINT_VERSION,
            arch: model.arch.clone(),
            params,
        }
    }

    pub fn into_model(self) -> Result<ModelBundle> {
        if self.format != CHECKPOINT_FORMAT || self.version != CHECKPOINT_VERSION {
            return Err(Error::contract(format!(
                "unsupported checkpoint {} v{}",
                self.format, self.version
            )));
        }
        // Shapes and names come from a freshly laid-out model; values from the file.
        let template = ModelBundle::init(self.arch.clone(), 0)?;
        let expected = template.params.entries().len();
        if expected != self.params.len() {
            return Err(Error::contract(format!(
                "checkpoint has {} tensors, architecture needs {expected}",
                self.params.len()
            )));
        }
        let mut entries = self.params.into_iter();
        let params = template.params.try_map(|name, _, t| {
            let e = entries.next().expect("length checked");
            if e.name != name || e.shape != t.shape() {
                return Err(Error::contract(format!(
                    "checkpoint entry {} {:?} does not match {name} {:?}",
                    e.name,
                    e.shape,
                    t.shape()
                )));
            }
            Tensor::new(e.shape[0], e.shape[1], e.values)
        })?;
        Ok(ModelBundle {
            arch: self.arch,
            params,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string(self)?;
        std::fs::write(path, text)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        Ok(serde_json::from_str(&text)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{FusionSpec, ModelDims};

    #[test]
    fn round_trip_is_bit_exact() {
        for fusion in [
            FusionSpec::GatedConcat,
            FusionSpec::CrossAttention {
                heads: 2,
                head_width: 4,
            },
        ] {
            let arch = ModelArch::new(
                vec![5, 3],
                ModelDims {
                    fusion,
                    ..ModelDims::default()
                },
            )
            .unwrap();
            let model = ModelBundle::init(arch, 99).unwrap();
            let text = serde_json::to_string(&Checkpoint::from_model(&model)).unwrap();
            let back: Checkpoint = serde_json::from_str(&text).unwrap();
            let restored = back.into_model().unwrap();
            for (a, b) in model.params.leaves().iter().zip(restored.params.leaves()) {
                let bits_a: Vec<u64> = a.data().iter().map(|v| v.to_bits()).collect();
                let bits_b: Vec<u64> = b.data().iter().map(|v| v.to_bits()).collect();
                assert_eq!(bits_a, bits_b);
            }
        }
    }

    #[test]
    fn rejects_mismatched_entries() {
        let arch = ModelArch::new(vec![2], ModelDims::default()).unwrap();
        let model = ModelBundle::init(arch, 1).unwrap();
        let mut ck = Checkpoint::from_model(&model);
        ck.params.swap(0, 1);
        assert!(ck.into_model().is_err());
        let mut ck = Checkpoint::from_model(&model);
        ck.version = 7;
        assert!(ck.into_model().is_err());
    }
}
