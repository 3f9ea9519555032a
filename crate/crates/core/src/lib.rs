pub mod clock;
pub mod hash;
pub mod ingest;
pub mod segment;
pub mod client;
pub mod jsonl;
pub mod validate;
pub mod embed;
pub mod distractor;
pub mod eval;
pub mod tpe;
pub mod optimize;
pub mod pipeline;
