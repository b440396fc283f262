//! Multi-view human capture toolkit: camera geometry, keypoint annotation,
//! body-model registration, depth-camera calibration, capture-timing
//! simulation and point-cloud cleanup.

pub mod bodymodel;
pub mod calibrate;
pub mod camgeom;
pub mod cloudproc;
pub mod kpanno;
pub mod optim;
pub mod pipeline;
pub mod register;
pub mod spatial;
pub mod syncsim;

pub use bodymodel::{BodyModel, BodyParams, JointLimits};
pub use camgeom::{Camera, CameraId, Intrinsics, Observation2D, RigidTransform, Rig};
pub use cloudproc::{BinaryMask, DepthImage, PointCloud};
pub use kpanno::{KeypointFrame2D, KeypointSequence3D, SkeletonTopology};
pub use pipeline::metrics::Metrics;
