//! Fixed instances shared by the benchmarks.

use cfris::detection::TransceiverState;
use cfris::scenario::{Problem, SystemConfig};

/// Seeded problem in working units.
pub fn problem(l: usize, n: usize, k: usize, r: usize, t: usize, l_ris: usize) -> Problem {
    let mut c = SystemConfig::with_dims(l, n, k, r, t, l_ris);
    c.seed = 7;
    Problem::from_config(&c).expect("valid bench config").working_units()
}

/// Identity state with Algorithm-style initialization.
pub fn initial_state(p: &Problem) -> TransceiverState {
    TransceiverState::identity(p)
}
