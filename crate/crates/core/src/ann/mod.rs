pub mod arch;
pub mod network;
pub mod train;
