pub mod attention;
pub mod boundary;
pub mod cli;
pub mod data;
pub mod model;
pub mod numerics;
pub mod training;
