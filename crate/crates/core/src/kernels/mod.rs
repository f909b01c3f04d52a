pub mod broadcast;
pub mod conv2d;
pub mod conv3d;
pub mod layout;
pub mod matmul;
pub mod norm;
pub mod resize;

pub use conv2d::Conv2dSpec;
pub use conv3d::Conv3dSpec;
