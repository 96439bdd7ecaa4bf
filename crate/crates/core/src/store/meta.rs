//! Metadata tables in an embedded transactional database.

use std::collections::{BTreeMap, HashMap};
use std::path::Path;

use redb::backends::InMemoryBackend;
use redb::{Database, ReadableTable, TableDefinition};
use serde::{Deserialize, Serialize};

use super::{BlobRef, TensorRecord};
use crate::error::Result;
use crate::fingerprint::TensorDigest;
use crate::format::{DType, Metadata};
use crate::planner::Member;

const CONFIG: TableDefinition<&str, &str> = TableDefinition::new("config");
const TENSORS: TableDefinition<&[u8], &[u8]> = TableDefinition::new("tensors");
const MODELS: TableDefinition<&str, &[u8]> = TableDefinition::new("models");

/// One unique tensor: its blob and its place in the clustering.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TensorRow {
    pub dtype: DType,
    pub shape: Vec<u64>,
    pub raw_len: u64,
    pub blob: BlobRef,
    pub cluster: u64,
    pub member: Member,
}

/// One model manifest, records in file order.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelRow {
    pub metadata: Option<Metadata>,
    pub records: Vec<TensorRecord>,
}

/// Rows written together in one transaction.
#[derive(Default)]
pub(crate) struct Batch {
    pub config: Vec<(String, String)>,
    pub tensors: Vec<(TensorDigest, TensorRow)>,
    pub models: Vec<(String, ModelRow)>,
}

pub(crate) struct Meta {
    db: Database,
}

impl Meta {
    pub fn open(path: &Path) -> Result<Self> {
        Ok(Meta {
            db: Database::create(path)?,
        })
    }

    pub fn in_memory() -> Result<Self> {
        Ok(Meta {
            db: Database::builder().create_with_backend(InMemoryBackend::new())?,
        })
    }

    pub fn config(&self, key: &str) -> Result<Option<String>> {
        let txn = self.db.begin_read()?;
        let table = match txn.open_table(CONFIG) {
            Ok(t) => t,
            Err(redb::TableError::TableDoesNotExist(_)) => return Ok(None),
            Err(e) => return Err(e.into()),
        };
        Ok(table.get(key)?.map(|v| v.value().to_string()))
    }

    #[allow(clippy::type_complexity)]
    pub fn load(&self) -> Result<(HashMap<TensorDigest, TensorRow>, BTreeMap<String, ModelRow>)> {
        let txn = self.db.begin_read()?;
        let mut tensors = HashMap::new();
        let mut models = BTreeMap::new();
        match txn.open_table(TENSORS) {
            Ok(table) => {
                for entry in table.iter()? {
                    let (k, v) = entry?;
                    let digest = TensorDigest(
                        k.value()
                            .try_into()
                            .map_err(|_| crate::Error::Meta("tensor key is not 16 bytes".into()))?,
                    );
                    tensors.insert(digest, serde_json::from_slice(v.value())?);
                }
            }
            Err(redb::TableError::TableDoesNotExist(_)) => {}
            Err(e) => return Err(e.into()),
        }
        match txn.open_table(MODELS) {
            Ok(table) => {
                for entry in table.iter()? {
                    let (k, v) = entry?;
                    models.insert(k.value().to_string(), serde_json::from_slice(v.value())?);
                }
            }
            Err(redb::TableError::TableDoesNotExist(_)) => {}
            Err(e) => return Err(e.into()),
        }
        Ok((tensors, models))
    }

    /// Writes the batch in one durable transaction.
    pub fn commit(&self, batch: &Batch) -> Result<()> {
        let txn = self.db.begin_write()?;
        {
            let mut config = txn.open_table(CONFIG)?;
            for (k, v) in &batch.config {
                config.insert(k.as_str(), v.as_str())?;
            }
            let mut tensors = txn.open_table(TENSORS)?;
            for (d, row) in &batch.tensors {
                tensors.insert(d.as_bytes().as_slice(), serde_json::to_vec(row)?.as_slice())?;
            }
            let mut models = txn.open_table(MODELS)?;
            for (id, row) in &batch.models {
                models.insert(id.as_str(), serde_json::to_vec(row)?.as_slice())?;
            }
        }
        txn.commit()?;
        Ok(())
    }
}
