//! Acceptance checks live in `tests/acceptance.rs`; run them with
//! `cargo test -p bam-acceptance --test acceptance`.
