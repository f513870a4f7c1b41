//! Data pipeline: parsing, preprocessing, vocabularies, splits, synthetic
//! corpora, and the processed-dataset archive.

pub mod archive;
pub mod categories;
pub mod parse;
pub mod preprocess;
pub mod split;
pub mod synthetic;
pub mod types;

pub use archive::{DatasetArchive, FORMAT_TAG};
pub use categories::{default_word_pool, match_categories};
pub use parse::{parse_checkin_file, parse_checkin_text, ColumnSpec, Delimiter, RowIssue};
pub use preprocess::{preprocess, sequences_to_raw, PreprocessConfig};
pub use split::{few_shot_subset, split_dataset};
pub use synthetic::{generate_synthetic, SyntheticSpec, LONG_GAP_SECS};
pub use types::{CheckinRecord, CheckinSequence, DatasetSplit, PoiEntry, RawCheckin, Vocabulary};
