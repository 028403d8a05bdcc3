pub mod cluster;
pub mod graph;
pub mod ingest;
pub mod lab;
pub mod modes;
pub mod numeric;
pub mod patterns;
pub mod report;
pub mod sae;
