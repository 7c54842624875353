//! JSON checkpoints written atomically (temp file, then rename).

use std::fs;
use std::io::{BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::encoder::ModelParams;
use crate::error::{Error, Result};
use crate::harness::config::TrainConfig;
use crate::ranker::Model;
use crate::tokenizer::Vocabulary;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub config: TrainConfig,
    /// Non-reserved vocabulary terms in id order.
    pub vocab: Vec<String>,
    pub steps_done: usize,
    pub params: ModelParams,
}

impl Checkpoint {
    pub fn new(config: TrainConfig, vocab: &Vocabulary, steps_done: usize, params: ModelParams) -> Self {
        Checkpoint { config, vocab: vocab.terms().to_vec(), steps_done, params }
    }

    pub fn vocabulary(&self) -> Vocabulary {
        Vocabulary::from_lines(self.vocab.iter().map(String::as_str))
    }

    pub fn model(&self) -> Result<Model> {
        Model::new(self.config.encoder, self.params.clone())
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let dir = match path.parent() {
            Some(d) if !d.as_os_str().is_empty() => d,
            _ => Path::new("."),
        };
        let tmp = tempfile::NamedTempFile::new_in(dir)?;
        {
            let mut w = BufWriter::new(tmp.as_file());
            serde_json::to_writer(&mut w, self)?;
            w.flush()?;
        }
        tmp.as_file().sync_all()?;
        tmp.persist(path).map_err(|e| Error::Io(e.error))?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let ck: Checkpoint = serde_json::from_str(&fs::read_to_string(path)?)?;
        ck.config.validate()?;
        ck.params.check_shapes(&ck.config.encoder)?;
        Ok(ck)
    }
}
