//! Dense arrays and the symmetric linear-algebra kernels the rest of the
//! crate is built on.

mod linalg;
mod tensor;

pub use linalg::{
    gen_eig_spd, spd_expm, spd_invsqrt, spd_logm, spd_powm, spd_sqrtm, sym_eig, Eigen,
    SymmetricMatrix, SPD_FLOOR,
};
pub use tensor::Tensor;
