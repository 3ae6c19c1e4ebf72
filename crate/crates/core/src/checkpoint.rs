//! Saved models: vocabulary, word embeddings and encoder parameters. The
//! virtual matrices are training-only state and are never written.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::autodiff::Tensor;
use crate::data::Vocab;
use crate::error::{Error, Result};
use crate::model::MrcModel;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Checkpoint {
    pub vocab: Vec<String>,
    pub table: Tensor,
    pub model: MrcModel,
}

impl Checkpoint {
    pub fn new(vocab: &Vocab, table: &Tensor, model: &MrcModel) -> Result<Self> {
        let (v, d) = table.dims2()?;
        if v != vocab.len() || d != model.config.dim {
            return Err(Error::Contract(format!(
                "table {v} x {d} for vocabulary {} and width {}",
                vocab.len(),
                model.config.dim
            )));
        }
        Ok(Checkpoint {
            vocab: vocab.tokens().to_vec(),
            table: table.clone(),
            model: model.clone(),
        })
    }

    pub fn vocab(&self) -> Result<Vocab> {
        Vocab::from_tokens(self.vocab.clone())
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        serde_json::to_vec(self).expect("checkpoint serializes")
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        let ck: Checkpoint = serde_json::from_slice(&bytes).map_err(|e| Error::json(path, e))?;
        let (v, d) = ck.table.dims2()?;
        if v != ck.vocab.len() || d != ck.model.config.dim {
            return Err(Error::Data(format!(
                "{}: table is {v} x {d} for {} tokens and width {}",
                path.display(),
                ck.vocab.len(),
                ck.model.config.dim
            )));
        }
        Ok(ck)
    }
}
