//! Datasets, episode sampling, synthetic task distributions and file formats.

mod dataset;
mod episode;
mod io;
mod synthetic;

pub use dataset::{ClassData, Dataset, Normalization};
pub use episode::{sample_episode, Episode};
pub use io::{decode_fsds, encode_fsds, load_csv, load_fsds, write_fsds, FSDS_MAGIC, FSDS_VERSION};
pub use synthetic::{gen_synthetic, synthetic_centers, SyntheticSpec};

#[derive(Debug, thiserror::Error)]
pub enum DataError {
    #[error("not an FSDS file: bad magic {0:?}")]
    BadMagic([u8; 4]),
    #[error("unsupported FSDS version {0}")]
    UnsupportedVersion(u32),
    #[error("dataset file truncated")]
    Truncated,
    #[error("trailing bytes after dataset payload")]
    TrailingBytes,
    #[error("dataset has no examples")]
    Empty,
    #[error("class {class} has no examples")]
    EmptyClass { class: usize },
    #[error("class {class}: example shape {found:?}, expected {expected:?}")]
    FeatureShape {
        class: usize,
        expected: Vec<usize>,
        found: Vec<usize>,
    },
    #[error("episode needs {needed} classes, dataset has {available}")]
    InsufficientClasses { needed: usize, available: usize },
    #[error("class {class} has {available} examples, episode needs {needed}")]
    InsufficientExamples {
        class: usize,
        needed: usize,
        available: usize,
    },
    #[error("invalid synthetic spec: {0}")]
    InvalidSpec(String),
    #[error("line {line}: row length differs from header")]
    Ragged { line: usize },
    #[error("line {line}: non-numeric value in column '{column}'")]
    NonNumeric { line: usize, column: String },
    #[error("no column named '{0}'")]
    MissingColumn(String),
    #[error("csv: {0}")]
    Csv(#[from] csv::Error),
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
}
