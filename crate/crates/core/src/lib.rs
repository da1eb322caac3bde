pub mod cli;
pub mod ess_sampler;
pub mod flow_training;
pub mod multifidelity;
pub mod oracle;
pub mod potentials;
pub mod transport;
