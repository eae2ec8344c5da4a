pub mod analysis;
pub mod geodesy;
mod par;
pub mod poi_store;
pub mod projection;
pub mod simkit;
pub mod telemetry;
