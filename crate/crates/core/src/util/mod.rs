pub mod bin;
mod jsonl;

pub use jsonl::write_jsonl;
