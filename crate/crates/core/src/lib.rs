//! Planning and simulation of dynamic context parallelism for attention.
//!
//! A batch of variable-length, arbitrarily masked sequences is cut into data
//! and computation blocks ([`blockgen`]), placed on a two-tier device
//! hierarchy by balanced hypergraph partitioning ([`hypergraph`],
//! [`placement`]), grouped into communication-overlapped divisions
//! ([`scheduler`]), compiled into per-device instruction lists ([`plan`]) and
//! executed on a simulated cluster ([`simexec`]). [`pipeline`] drives the
//! whole loop over a stream of batches with planning ahead of execution.

pub mod baselines;
pub mod blockgen;
pub mod hypergraph;
pub mod mask;
pub mod model;
pub mod pipeline;
pub mod placement;
pub mod plan;
pub mod reference;
pub mod scheduler;
pub mod simexec;
