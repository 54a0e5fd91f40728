//! Zone graph and feature panel ingestion, windowing, splitting and scaling.

mod graph;
mod normalize;
mod panel;
mod window;

pub use graph::{load_graph, ZoneGraph};
pub use normalize::NormalizationStats;
pub use panel::{load_panel, FeaturePanel, NUM_FEATURES, OCCUPANCY, PRICE};
pub use window::{build_windows, chronological_split, SampleWindow, Split};

use std::path::Path;

use crate::error::{PagError, Result};

pub(crate) fn open_csv(path: &Path) -> Result<csv::Reader<std::fs::File>> {
    let file = std::fs::File::open(path).map_err(|e| PagError::io(path, e))?;
    Ok(csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(file))
}

pub(crate) fn csv_error(path: &Path, message: impl ToString) -> PagError {
    PagError::Csv {
        path: path.to_path_buf(),
        message: message.to_string(),
    }
}

pub(crate) fn check_header(path: &Path, reader: &mut csv::Reader<std::fs::File>, expected: &[&str]) -> Result<()> {
    let header = reader.headers().map_err(|e| csv_error(path, e))?;
    let got: Vec<&str> = header.iter().collect();
    if got != expected {
        return Err(csv_error(
            path,
            format!("expected header `{}`, found `{}`", expected.join(","), got.join(",")),
        ));
    }
    Ok(())
}
