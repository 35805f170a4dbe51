//! Digital twin: a live session streamed to WebSocket clients.

pub mod joints;
pub mod protocol;
pub mod scene;
pub mod server;
pub mod session;

pub use protocol::{Message, MsgType, PROTOCOL_VERSION, SCHEMA};
pub use scene::{SceneFile, SceneModel};
pub use server::{bind, serve, ServeError, ServeOptions};
pub use session::{Outcome, Session, SessionError, SimState, Snapshot};
