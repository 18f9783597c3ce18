//! Anisotropic hierarchical C¹ bicubic splines on T-meshes, with surface
//! fitting and adaptive isogeometric Poisson solving on top.

pub mod bezier;
pub mod mesh;
pub mod quadrature;
pub mod refine;
pub mod space;
pub mod fitting;
pub mod iga;
pub mod report;
pub mod verify;
