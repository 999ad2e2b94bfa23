pub use q2l_core;
