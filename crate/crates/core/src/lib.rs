pub mod artifact;
pub mod gam;
pub mod ingest;
pub mod linalg;
pub mod matching;
pub mod model;
pub mod pipeline;
pub mod resilience;
pub mod severity;
pub mod stats;
pub mod synth;
pub mod time;
