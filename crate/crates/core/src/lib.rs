pub mod autodiff;
pub mod corpus;
pub mod harness;
pub mod losses;
pub mod mask;
pub mod metrics;
pub mod models;
pub mod qam;
