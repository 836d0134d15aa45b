//! Human review of emitted samples: a JSON API over a dataset directory,
//! a durable vote log, and strict-majority aggregation per metric.
//!
//! Routes: `GET /api/samples/next?annotator=ID`, `GET /api/samples/{id}`,
//! `GET /api/samples/{id}/image`, `POST /api/votes`, `GET /api/report`.

pub mod report;
pub mod server;
pub mod votes;

pub use report::{build_report, resolve, Report, Resolution};
pub use server::{router, serve, Catalogue, ReviewService, SampleEntry};
pub use votes::{AnnotationVote, Metric, Score, VoteStore};
