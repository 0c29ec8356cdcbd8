//! Placeholder; filled in after the core crate.
