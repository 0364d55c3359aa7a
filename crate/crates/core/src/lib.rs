//! Intra-network ensembling: several weight-shared sub-networks are carved out
//! of one CNN by per-layer channel selections, trained jointly with
//! switchable batch normalization, and combined by averaging or stacking.

pub mod arch;
pub mod bn;
pub mod checkpoint;
pub mod ensemble;
pub mod error;
pub mod gradcheck;
pub mod network;
pub mod ops;
pub mod optim;
pub mod plan;
pub mod tensor;

pub use arch::{ArchSpec, LayerSpec};
pub use bn::{Mode, SwitchableBnBank};
pub use error::{Error, Result};
pub use network::{init_parameters, joint_train_step, ParamBreakdown, ParameterStore, SharedNetwork};
pub use plan::{build_plan, kept_count, ChannelSelection, RecombinationKind, SubNetworkPlan, WidthRatioList};
pub use tensor::{Scalar, Tensor};
