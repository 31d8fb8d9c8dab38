//! End-to-end acceptance checks; see `tests/acceptance.rs`. Kept in its own
//! package so a failing check does not stop the other test targets of a
//! workspace run.
