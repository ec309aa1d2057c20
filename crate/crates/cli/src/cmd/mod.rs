pub mod audit;
pub mod diff;
pub mod inspect;
pub mod merge;
pub mod stats;
pub mod verify;
