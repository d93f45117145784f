//! Label spaces, attention pooling and the six head architectures.

mod labels;
mod model;
mod pool;
mod predict;
mod spec;

pub use labels::{Category, LabelSpace, Misogyny, Task, NUM_CATEGORIES};
pub use model::{HeadTrace, Model, ModelTrace};
pub use pool::{attention_pool, AttentionPool};
pub use predict::{argmax, predict, Predictions, TaskLogits};
pub use spec::{Architecture, HeadKind, ModelSpec, TaskSelection, VERTICAL_LAYERS};
