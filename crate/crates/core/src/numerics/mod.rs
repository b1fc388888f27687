//! Dense arrays and reverse-mode differentiation, sized for the encoder and
//! denoiser networks. All arithmetic is `f64`.

mod gradcheck;
mod graph;
mod params;
mod tensor;

pub use gradcheck::{finite_diff_check, GradCheckReport};
pub use graph::{Graph, Var};
pub use params::{ParamId, ParamStore};
pub use tensor::{gemm, Tensor};
