pub mod invariants;
pub mod oracles;
pub mod toy;
pub mod experiments;
