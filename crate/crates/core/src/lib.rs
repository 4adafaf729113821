pub mod error;
pub mod field;
pub mod grid;
pub mod profiles;
pub mod quad;
pub mod response;
pub mod wiener;
pub mod quadratic;
pub mod diagnostics;
pub mod solver;
