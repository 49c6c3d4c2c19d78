//! Follower tracking law, the demonstration controller and the sampling baseline.

pub mod formation;
pub mod mppi;
pub mod pac;

pub use formation::{chi, formation_command, FormationConfig, FormationGains, FormationTracker};
pub use mppi::{Mppi, MppiConfig};
pub use pac::{pac_command, PacConfig};
