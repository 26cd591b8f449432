//! Planar box-catching simulator, throws, demonstrator, baselines and
//! evaluation.

mod baseline;
mod demo;
mod env;
mod eval;
mod learned;
mod throws;
mod traj;

pub use baseline::{ModelBasedConfig, ModelBasedPolicy};
pub use demo::{render, synth_demos, CameraConfig, DemoConfig, DemoTruth, Demonstration};
pub use env::{box_facing_q3, contact_force, energy, is_caught, Contact, Env, EnvConfig, EnvState, EpisodeResult, Observation, StepRecord};
pub use learned::{check_widths, Feedback, LearnedConfig, LearnedKind, LearnedPolicy};
pub use eval::{evaluate, read_results, run_episode, summarize, summary_csv, write_results, write_summary, EpisodeRow, Policy, SummaryRow};
pub use throws::{load_throws, reachable, sample_throws, save_throws, BoxProfile, ThrowConfig, ThrowSpec, PROFILES};
pub use traj::{ik_wrist, Quintic};
