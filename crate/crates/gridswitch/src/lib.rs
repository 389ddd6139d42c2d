//! Switching decisions for power exchange capacity.
//!
//! The library models transmission grids whose substations contain
//! controllable switches, scores the effect of open/close decisions on the
//! capacity to move power from one zone to the other, and trains a graph
//! network to propose good decisions without labeled data. The main
//! entry points, bottom up:
//!
//! * [`grid`]: addresses, injections, switches, lines, bus partitions,
//!   feature normalization, on-disk formats.
//! * [`lp`]: the exchange-capacity linear program and a dense two-phase
//!   simplex solver.
//! * [`exact`]: exhaustive enumeration and branch-and-bound over switching
//!   decisions, used as reference solvers.
//! * [`surrogate`]: the relaxed decision distribution, its gradient
//!   estimators, and the memory table.
//! * [`gnn`]: the continuous-depth message-passing network, its hand-rolled
//!   reverse pass, and the Adam optimizer.
//! * [`datagen`]: substation templates, base cases, and noisy context
//!   sampling for dataset generation.
//! * [`train`]: the self-supervised training loop, decision policies,
//!   ensembling, and evaluation reports.
//! * [`cli`]: the command-line front end (`gen-data`, `train`, `solve`,
//!   `eval`, `report`, `selftest`).
//!
//! Runnable walkthroughs for each capability live in `examples/`.

pub mod cli;
pub mod datagen;
pub mod exact;
pub mod gnn;
pub mod grid;
pub mod lp;
pub mod surrogate;
pub mod train;
