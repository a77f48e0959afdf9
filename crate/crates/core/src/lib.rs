pub mod classifier;
pub mod cluster;
pub mod environments;
pub mod features;
pub mod harness;
pub mod mdp;
pub mod percept;
pub mod rlvc_loop;
