//! Finite-horizon optimal control of a linear plant whose control packets cross a
//! channel with i.i.d. random delay and loss. The actuator holds the newest control
//! that has arrived, and the controller learns through instantaneous acknowledgments
//! which control is being applied.

pub mod delay;
pub mod error;
pub mod io;
pub mod linalg;
pub mod linform;
pub mod model;
pub mod netsim;
pub mod oracle;
pub mod runtime;
pub mod synth;

pub use delay::DelayPmf;
pub use error::{Error, Result};
pub use model::SystemModel;
pub use synth::{riccati_reference, synthesize, GainSchedule};
