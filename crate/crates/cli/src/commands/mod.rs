pub mod analyze;
pub mod bench;
pub mod inspect;
pub mod merge;
pub mod verify;
