//! Next-day exit-volume forecasting for the toll stations of a closed highway
//! network.
//!
//! The crate is organised along the three phases of the method plus the
//! plumbing around them:
//!
//! * [`ingest`] parses toll records and external tables into a daily
//!   [`VolumePanel`](ingest::VolumePanel).
//! * [`synth`] generates synthetic networks and panels with known structure.
//! * [`features`] encodes weather and dates, finds upstream stations, fits
//!   Box-Cox normalisation, flags vital-few stations and builds feature tensors.
//! * [`neuralcore`] is the small dense numeric engine (convolution, LSTM, dense
//!   layers, Adam, gradient checking).
//! * [`model`] assembles the FCN + LSTM network and its training loop.
//! * [`decision`] inverse-transforms and calibrates predictions per station
//!   group and persists the [`ModelBundle`](decision::ModelBundle).
//! * [`evalreport`] scores predictions and writes reports.
//! * [`pipeline`] holds the run configuration and chains everything together.

pub mod dates;
pub mod decision;
pub mod error;
pub mod evalreport;
pub mod features;
pub mod ingest;
pub mod model;
pub mod neuralcore;
pub mod pipeline;
pub mod station;
pub mod synth;

pub use dates::DateRange;
pub use error::{Error, Result};
pub use station::StationId;
