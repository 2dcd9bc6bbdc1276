//! Brute-force reference solvers. They share no code with the MILP builders
//! and are meant for small instances only.

pub mod heu;
pub mod opt;
