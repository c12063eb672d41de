//! HTTP session service and batch commands for the MI session lab.
pub mod app;
pub mod commands;
pub mod config;
pub mod offline;
pub mod token;

pub use app::{router, AppState, BusyMode, ServiceOptions, StudyStage};
pub use config::{Backend, ServiceConfig};
pub use token::{Clock, ManualClock, SystemClock, WeekToken, WeekTokens};
