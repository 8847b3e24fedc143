//! Weighted ADM mass, conformal identities and Penrose-type inequalities on
//! asymptotically flat weighted manifolds `(M^n, g, e^{-f} dV_g)`.

pub mod conformal;
pub mod curvature;
pub mod error;
pub mod family;
pub mod fields;
pub mod jet;
pub mod mass;
pub mod quadrature;
pub mod runner;
pub mod staticity;
pub mod surfaces;

pub use error::{Error, Result};
pub use family::{make_family, FamilyDoc, WeightedManifoldSpec};
pub use fields::EndPoint;
