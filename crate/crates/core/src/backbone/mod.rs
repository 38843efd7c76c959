//! ResNet18 layers and their attention augmentation.

mod model;
pub mod reference;
mod spec;

pub use model::{build_model, AttnPath, ConvBn, HeadBlock, Layer, Model, ResidualBlock};
pub use reference::PlainResNet18;
pub use spec::{AttnTemplate, Augment, Downsample, LayerSpec, ModelSpec};
