pub mod analysis;
pub mod capsule_ops;
pub mod data_io;
pub mod network;
pub mod routing;
pub mod tensor;
