//! Concrete environments implementing [`crate::envcore::Environment`].

mod bitflip;
mod eqdisc;
mod maze;

pub use bitflip::{BitFlip, BitFlipConfig, BitState};
pub use eqdisc::{parse_target_pool, EqDiscConfig, EqGoal, EqState, EquationDiscovery, Target};
pub use maze::{KinematicMaze, MazeConfig, MazeLayout, MazeState};
