//! Extraction, classification and morphometry of intracranial artery
//! networks from 3D angiography volumes, plus synthetic phantoms with
//! known ground truth for validating the measurements.

pub mod centerline;
pub mod edt;
pub mod error;
pub mod features;
pub mod graph;
pub mod guide;
pub mod hmrf;
pub mod io;
pub mod landmarks;
pub mod numeric;
pub mod pipeline;
pub mod simulate;
pub mod stats;
pub mod thinning;
pub mod topology;
pub mod volume;

pub use error::{Error, Result};
pub use hmrf::{em_segment, EmOutput, EmParams, LabelMap, Memberships};
pub use volume::{BinaryVolume, Grid, Volume3D};
