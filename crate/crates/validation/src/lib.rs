//! Acceptance checks that span the whole pipeline live in `tests/acceptance.rs`.
