//! Planning core for template-guided interstitial gynecologic brachytherapy:
//! voxel volumes and label maps, device meshes, rigid device registration,
//! GrowCut segmentation, virtual needle planning, dose/DVH evaluation, the
//! intraoperative message protocol and the versioned case archive.

pub mod archive;
pub mod dosimetry;
pub mod igtlink;
pub mod mesh;
pub mod phantom;
pub mod planning;
pub mod registration;
pub mod segmentation;
pub mod volume;

pub use nalgebra::{Point3, Vector3};
