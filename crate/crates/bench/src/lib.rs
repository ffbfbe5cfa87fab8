//! Shared fixtures for the kernel benchmarks.

use nsk_core::dynamics::{PhysParams, System};
use nsk_core::experiments::{default_grid, default_init};
use nsk_core::FlowState;

/// Default relaxed-system state on an `n x n` grid.
pub fn fixture(n: usize) -> (FlowState, PhysParams) {
    let grid = default_grid(n).expect("valid grid");
    let state = default_init(&grid, 1.0).expect("valid init").with_eta();
    let params = PhysParams::new(System::RelaxedInsk, 1.0, 16.0, 1.0).expect("valid params");
    (state, params)
}
