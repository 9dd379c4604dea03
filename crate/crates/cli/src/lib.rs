//! Command-line front end and calibration service for `roadtwin`.

pub mod cli;
pub mod geojson;
pub mod server;
