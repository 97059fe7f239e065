//! Holds the `acceptance` test target, which checks every acceptance
//! criterion and prints one PASS or FAIL line for each.
//!
//! Run it alone with `cargo test -p kvlab-validation --test acceptance`; pass
//! criterion ids (`C3 C9`) after `--` to run a subset.
