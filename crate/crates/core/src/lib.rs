pub mod anneal;
pub mod backend;
pub mod depgraph;
pub mod ir;
pub mod machine;
pub mod perturb;
pub mod testing;
pub mod text;
