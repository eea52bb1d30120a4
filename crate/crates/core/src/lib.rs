//! Real-time skeletal pose streaming.
//!
//! The crate is organised the way a pose travels: [`model`] holds the
//! skeleton and quaternion math, [`codec`] squeezes frames into fixed-point
//! payloads, [`router`] fans signals out inside a process, [`transport`]
//! carries them between hosts through a relay server, [`rhythm`] re-times
//! and stylizes incoming motion against a beat grid, and [`harness`] replays,
//! records and measures all of the above.

pub mod clock;
pub mod codec;
pub mod harness;
pub mod model;
pub mod rhythm;
pub mod router;
pub mod transport;

pub use codec::{BoundsTable, EncodedFrame};
pub use model::{BodyZone, PoseFrame, Skeleton, UnitQuat};
pub use router::{Router, SignalDescriptor, SignalSelector};
pub use transport::{SignalPacket, SignalType};


