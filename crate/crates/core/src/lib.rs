// `!(x > 0.0)` style checks are deliberate: they also reject NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]
// Index loops keep the sums-of-squares code close to the formulas.
#![allow(clippy::needless_range_loop)]

pub mod analysis;
pub mod cmaes;
pub mod controller;
pub mod objective;
pub mod plant;
pub mod protocol;
