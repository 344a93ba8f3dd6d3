pub mod icl;
pub mod rank_one;
pub mod side_memory;
