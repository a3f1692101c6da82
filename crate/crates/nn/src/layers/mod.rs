mod activation;
mod attention;
mod conv;
mod linear;
mod norm;

pub use activation::{gelu, gelu_backward, relu_backward, relu_inplace, sigmoid, softmax_rows_inplace};
pub use attention::{AttentionCache, BlockCache, MultiHeadAttention, TransformerBlock};
pub use conv::{Conv2d, ConvTranspose2x2, MaxPool2x2, PoolCache};
pub use linear::Linear;
pub use norm::{BatchNorm2d, BnCache, LayerNorm, LnCache};
