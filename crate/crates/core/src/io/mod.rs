pub mod checkpoint;
pub mod config;
pub mod corpus;
pub mod export;
