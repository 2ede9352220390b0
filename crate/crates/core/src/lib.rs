//! Numerical core for quasilinear elliptic problems with rough coefficients:
//! meshes, N-functions, coefficient fields, sparse linear algebra, P1 finite
//! elements, gamblet-type coarse spaces and the nonlinear solvers built on
//! top of them.
#![allow(clippy::neg_cmp_op_on_partial_ord, clippy::needless_range_loop)]

pub mod coeff;
pub mod fem;
pub mod grps;
pub mod mesh;
pub mod nfunc;
pub mod solvers;
pub mod sparsela;
