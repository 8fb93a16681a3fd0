//! Live teaching sessions: a teacher demonstrates tasks, lets the agent try,
//! and gives positive or negative feedback while the agent acts. Every
//! completed episode refits the session's learner on the accumulated data.
//!
//! [`session::Session`] is the transport-independent state machine,
//! [`store::SessionStore`] persists sessions, and [`server`] exposes both
//! over HTTP and a websocket.

pub mod protocol;
pub mod server;
pub mod session;
pub mod store;
