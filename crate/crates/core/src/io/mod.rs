//! Serialization of feature sets and run configuration.

pub mod config;
pub mod pfs1;
pub mod table;

use std::path::Path;

pub use config::RunConfigFile;
pub use pfs1::{decode_pfs1, encode_pfs1, read_pfs1, write_pfs1, Precision};
pub use table::{export_csv, import_csv, CsvSchema};

use crate::error::Result;
use crate::feature_model::PairedFeatureSet;

fn is_csv(path: &Path) -> bool {
    path.extension()
        .is_some_and(|e| e.eq_ignore_ascii_case("csv"))
}

/// Reads CSV for a `.csv` extension and PFS1 otherwise.
pub fn read_feature_set(path: &Path) -> Result<PairedFeatureSet> {
    if is_csv(path) {
        import_csv(path, &CsvSchema::default())
    } else {
        read_pfs1(path)
    }
}

pub fn write_feature_set(path: &Path, set: &PairedFeatureSet, precision: Precision) -> Result<()> {
    if is_csv(path) {
        export_csv(path, set)
    } else {
        write_pfs1(path, set, precision)
    }
}

/// Re-encodes `input` as `output`, picking formats from the extensions.
pub fn convert(input: &Path, output: &Path, precision: Precision) -> Result<PairedFeatureSet> {
    let set = read_feature_set(input)?;
    write_feature_set(output, &set, precision)?;
    Ok(set)
}
