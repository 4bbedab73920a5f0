//! Pure forward/backward compute kernels.
//!
//! Kernels take slices plus shape metadata and return freshly allocated
//! buffers. They are free of tape bookkeeping so they can be called from
//! multiple threads and tested in isolation; the tape wraps them and records
//! whatever context the backward pass needs.

pub mod attention;
pub mod conv;
pub mod norm;
pub mod pool;
pub mod resize;
