//! HTTP gateway for live sessions: language-driven improvement and reward
//! learning from language or pairwise comparisons.
//!
//! Sessions are deterministic given their command log; see [`session`].

pub mod server;
pub mod session;

pub use server::{router, serve, AppState, FrameSet};
pub use session::{Assets, Command, LogEntry, Mode, Session, SessionError, SessionView, Status};
