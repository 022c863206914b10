//! Parameter and FLOP accounting.
//!
//! One multiply-accumulate is two FLOPs. Convolution costs cover the
//! multiply-accumulates only (bias adds are not counted). Pooling, ReLU and
//! element-wise addition cost one FLOP per output element; nearest-neighbour
//! upsampling and concatenation are pure data movement and cost nothing.

/// Cost model of a layer or block specification.
pub trait Cost {
    fn param_count(&self) -> u64;

    /// FLOPs for one sample at input resolution `h × w`.
    fn flops(&self, h: usize, w: usize) -> u64;
}

/// Full `k × k` convolution producing an `ho × wo` map.
pub fn conv_flops(k: usize, cin: usize, cout: usize, ho: usize, wo: usize) -> u64 {
    2 * (k * k * cin * cout * ho * wo) as u64
}

pub fn depthwise_flops(k: usize, channels: usize, ho: usize, wo: usize) -> u64 {
    2 * (k * k * channels * ho * wo) as u64
}

pub fn pointwise_flops(cin: usize, cout: usize, h: usize, w: usize) -> u64 {
    2 * (cin * cout * h * w) as u64
}
