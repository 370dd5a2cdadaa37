//! Pipeline (placeholder).
