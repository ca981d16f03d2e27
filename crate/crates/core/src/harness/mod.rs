//! Traces, synthetic scenes, session simulation and file formats.

pub mod config;
pub mod io;
pub mod scene;
pub mod simulate;
pub mod traces;

pub use config::{RunConfig, SessionConfig, DEFAULT_VIEW_THRESHOLD, STANDARD_INTERVALS};
pub use scene::{generate_scene, Scene, SceneConfig, SceneKind};
pub use simulate::{simulate_session, toy_train, Models, SessionData, SimulationOutput};
pub use traces::{ingest_traces, GazeSample, GazeTrace};
