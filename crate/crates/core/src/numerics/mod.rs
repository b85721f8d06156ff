pub mod fit;
pub mod quad;
pub mod roots;
pub mod sum;
pub mod zeta;
