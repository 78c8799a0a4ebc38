//! Rotational odometry and panoramic mapping for event cameras.
//!
//! Events are lifted onto the unit sphere, grouped into short motion-compensated
//! frames, and aligned against an incrementally built spherical map with a
//! point-to-line ICP on SO(3). A rotation-only event simulator and APE/RPE
//! metrics make the whole chain testable without hardware.

pub mod eval;
pub mod geometry;
pub mod kv;
pub mod frontend;
pub mod icp;
pub mod map;
pub mod panorama;
pub mod pipeline;
pub mod sim;
