pub mod gradients;
pub mod oracles;
pub mod pipeline;
