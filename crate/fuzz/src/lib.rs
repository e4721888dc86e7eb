#[path = "checks.rs"]
pub mod checks;
