mod common;

use common::{uv_oracle_errors, xkx_oracle_errors};

#[test]
fn xkx_updates_match_loops() {
    for seed in [1, 2] {
        let (upd, fe) = xkx_oracle_errors(seed);
        assert!(upd < 1e-12, "update deviation {upd}");
        assert!(fe < 1e-12, "free energy deviation {fe}");
    }
}

#[test]
fn uv_updates_match_loops() {
    for seed in [3, 4] {
        let (upd, fe) = uv_oracle_errors(seed);
        assert!(upd < 1e-12, "update deviation {upd}");
        assert!(fe < 1e-12, "free energy deviation {fe}");
    }
}
