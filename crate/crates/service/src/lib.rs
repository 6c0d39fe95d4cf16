//! Live interactive segmentation sessions. Each frame's features are
//! computed once on arrival; annotation edits re-derive guidance from the
//! cached features and rerun only the head.

pub mod api;
pub mod rle;
pub mod session;

pub use api::router;
pub use session::{
    Click, Created, Limits, LocalityMode, MaskResult, Polarity, ServiceError, Session, Store, Summary, Update,
};
