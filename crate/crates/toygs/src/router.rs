//! Router (placeholder).
