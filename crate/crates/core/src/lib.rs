//! Scenario generation for automated-driving-system testing.
//!
//! The pipeline turns a natural-language accident report into an
//! interactive pattern sequence ([`ips`]), converts it into a test-case
//! template in the sequential scenario DSL ([`dsl`]) with LLM help
//! ([`llm`]), fills parameter ranges and picks the ego vehicle
//! ([`logicalize`]), and searches the resulting logical scenario with a
//! three-objective genetic algorithm ([`search`]) against a kinematic
//! simulator ([`sim`]) scored by [`fitness`]. Critical results are grouped
//! into types by [`triage`].

pub mod campaign;
pub mod config;
pub mod dsl;
pub mod fitness;
pub mod ips;
pub mod llm;
pub mod logicalize;
pub mod search;
pub mod sim;
pub mod triage;
