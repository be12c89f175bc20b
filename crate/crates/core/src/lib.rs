pub mod discriminator;
pub mod error;
pub mod evaluation;
pub mod generator;
pub mod ingest;
pub mod linalg;
pub mod params;
pub mod schedule;
pub mod tape;
pub mod training;
