//! Dense per-pixel image-Jacobian estimation with self-body recognition and
//! point servoing, plus a planar arm simulator to exercise it.
//!
//! Data flows `sim -> flow -> estimator -> selfrecog / servo`; the
//! [`experiment`] module wires the loop together from a JSON config.

pub mod estimator;
pub mod experiment;
pub mod field;
pub mod flow;
pub mod io;
pub mod selfrecog;
pub mod servo;
pub mod sim;

pub use estimator::{
    dije_step, hosoda_update, init_field, kf_update, predict_warp, DenseJacobianField, Dije,
    DijeConfig, EstimatorError, JointSample, NoiseParams, WarpMode,
};
pub use field::{FieldError, GridShape, PixelCoord, VectorField};
pub use flow::{flow_estimate, flow_oracle, FlowField, FlowProvider, Frame, LkParams};
pub use selfrecog::{assign_labels, evaluate_clusters, kmeans, ClusterModel, SelfMask};
pub use servo::{advect_point, jacobian_at, servo_step, ServoConfig, TrackedPoint};
pub use sim::{ArmModel, ArmScene, Attachment, Backdrop, CameraModel, Distractor, GroundTruth};
