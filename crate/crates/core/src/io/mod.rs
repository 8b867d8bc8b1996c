//! Files: the array container, prediction bundles, CSV import/export,
//! fitted-state and prediction files, and synthetic data sets.

pub mod bundle;
pub mod container;
pub mod csv;
pub mod predictions;
pub mod state;
pub mod synth;

pub use bundle::{load_bundle, read_bundle, write_bundle, PredictionBundle, Split, Targets};
pub use predictions::{predict_bundle, PredictionValues, Predictions};
pub use state::StateFile;
