pub mod gradcheck;
pub mod reference;
