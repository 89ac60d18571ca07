//! The six evaluation tasks.

pub mod mixing;
pub mod separability;
pub mod consistency;
pub mod recall;
pub mod reconstruction;
