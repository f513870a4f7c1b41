use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// One row of a raw check-in file before any filtering.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RawCheckin {
    pub user_key: String,
    /// UTC seconds since epoch.
    pub timestamp: i64,
    pub lat: f64,
    pub lon: f64,
    pub poi_key: String,
    /// Free-form category text; may be empty or abbreviated.
    pub category_text: String,
}

/// A reindexed visit inside a sequence.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct CheckinRecord {
    pub poi_id: usize,
    pub timestamp: i64,
    /// Seconds since the previous record in this sequence; 0 for the first.
    pub delta_t: i64,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct CheckinSequence {
    pub user_id: usize,
    pub records: Vec<CheckinRecord>,
}

impl CheckinSequence {
    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PoiEntry {
    pub key: String,
    pub lat: f64,
    pub lon: f64,
    /// Indices into the category word pool; never empty.
    pub category_word_ids: Vec<usize>,
}

/// Dense id tables for POIs, users, and the fixed category word pool.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Vocabulary {
    pub poi_table: Vec<PoiEntry>,
    pub user_table: Vec<String>,
    pub category_word_pool: Vec<String>,
}

impl Vocabulary {
    pub fn num_pois(&self) -> usize {
        self.poi_table.len()
    }

    pub fn num_users(&self) -> usize {
        self.user_table.len()
    }

    pub fn poi(&self, poi_id: usize) -> Result<&PoiEntry> {
        self.poi_table
            .get(poi_id)
            .ok_or_else(|| Error::Lookup(format!("unknown poi id {poi_id}")))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetSplit {
    pub train: Vec<usize>,
    pub valid: Vec<usize>,
    pub test: Vec<usize>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub few_shot_fraction: Option<f64>,
}
