//! Prompt construction, chat clients and the retry-until-valid loops that
//! turn an accident report into an IPS and an IPS into a DSL template.
//!
//! Every prompt has a stable digest so responses can be recorded once and
//! replayed offline.

use std::collections::{BTreeMap, VecDeque};
use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::time::{Duration, SystemTime, UNIX_EPOCH};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::dsl::{parse_template, SlotKey, SlotState, TestCaseTemplate};
use crate::ips::{check_legality, parse_ips, serialize_ips, ActionVerb, Ips};
use crate::logicalize::ProposedRanges;

#[derive(Debug, Error)]
pub enum LlmError {
    #[error("the accident report is empty")]
    EmptyReport,
    #[error("the IPS is not legal: {0}")]
    IllegalIps(String),
    #[error("no legal IPS after {attempts} attempts; last problems: {}", last_violations.join("; "))]
    ExtractionFailed { attempts: usize, last_violations: Vec<String> },
    #[error("no valid template after {attempts} attempts; last problems: {}", last_problems.join("; "))]
    ConversionFailed { attempts: usize, last_problems: Vec<String> },
    #[error("transcript has no response for prompt {digest}")]
    UnknownDigest { digest: String },
    #[error("invalid LLM config: {0}")]
    InvalidConfig(String),
    #[error("transcript {path}: {message}")]
    Transcript { path: PathBuf, message: String },
    #[error("request failed: {0}")]
    Request(String),
    #[error("scripted client has no responses left")]
    ScriptExhausted,
}

/// A structured prompt: task, output format, attention list, optional
/// worked example, the input itself and feedback from rejected attempts.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Prompt {
    pub task: String,
    pub format_title: String,
    pub format_block: String,
    pub attentions: Vec<String>,
    pub example_block: Option<String>,
    pub input: String,
    pub feedback: Vec<String>,
}

impl Prompt {
    pub fn render(&self) -> String {
        let mut out = String::new();
        let _ = writeln!(out, "Task: {}\n", self.task);
        let _ = writeln!(out, "{}:\n{}\n", self.format_title, self.format_block.trim_end());
        out.push_str("Attentions:\n");
        for (i, a) in self.attentions.iter().enumerate() {
            let _ = writeln!(out, "{}. {a}", i + 1);
        }
        if let Some(ex) = &self.example_block {
            let _ = write!(out, "\nExample:\n{}\n", ex.trim_end());
        }
        let _ = write!(out, "\nInput:\n{}\n", self.input.trim_end());
        if !self.feedback.is_empty() {
            out.push_str("\nYour previous answer was rejected for these reasons; fix them:\n");
            for f in &self.feedback {
                let _ = writeln!(out, "- {f}");
            }
        }
        out
    }

    /// Hex SHA-256 of the canonical rendering.
    pub fn digest(&self) -> String {
        digest_text(&self.render())
    }

    fn with_feedback(&self, feedback: Vec<String>) -> Prompt {
        Prompt { feedback, ..self.clone() }
    }
}

/// Line endings normalised to `\n`, trailing whitespace trimmed from every
/// line, trailing blank lines dropped.
pub fn canonicalize(text: &str) -> String {
    let unified = text.replace("\r\n", "\n").replace('\r', "\n");
    let lines: Vec<&str> = unified.lines().map(str::trim_end).collect();
    let end = lines.iter().rposition(|l| !l.is_empty()).map_or(0, |i| i + 1);
    lines[..end].join("\n")
}

pub fn digest_text(text: &str) -> String {
    hex::encode(Sha256::digest(canonicalize(text).as_bytes()))
}

fn verb_list() -> String {
    ActionVerb::ALL.iter().map(|v| v.base_form()).collect::<Vec<_>>().join(", ")
}

pub const IPS_FORMAT: &str = "\
road: <straight|curved>, lanes: <number of lanes>
Vi: initial action of Vi.
Vj: initial action of Vj.
(Vi, Vj): interactive actions between Vi and Vj.";

/// Prompt asking for the road and interactive pattern sequence of a
/// report.
pub fn build_extraction_prompt(report: &str) -> Result<Prompt, LlmError> {
    if report.trim().is_empty() {
        return Err(LlmError::EmptyReport);
    }
    Ok(Prompt {
        task: "Read the accident report below. State the road the crash happened on and write the \
               interactive pattern sequence (IPS) of the vehicles involved."
            .into(),
        format_title: "IPS Format".into(),
        format_block: IPS_FORMAT.into(),
        attentions: vec![
            format!("Describe every action with one of these verbs only: {}.", verb_list()),
            "Call the vehicles V1, V2, ... in the order the report introduces them.".into(),
            "Give each vehicle exactly one initial-action line, before any pattern line.".into(),
            "Every pattern line names exactly two vehicles: the first one acts, the second one responds.".into(),
            "List the patterns in the order the events happened.".into(),
            "The road line gives the shape (straight or curved) and the number of lanes.".into(),
            "Reply with the IPS block only.".into(),
        ],
        example_block: None,
        input: report.trim().to_string(),
        feedback: Vec::new(),
    })
}

pub const TEST_CASE_MODEL: &str = "\
A test case lists the initial state of every vehicle, then the actions of the NPC vehicles.
npc(Vi, lane, offset, speed)                          initial lane id, position along the lane (m), speed (m/s)
accelerate(Vi, target_speed, trigger)                 speed up to target_speed (m/s)
decelerate(Vi, target_speed, trigger)                 slow down to target_speed (m/s)
lane_change(Vi, target_lane, target_speed, trigger)   move to target_lane while reaching target_speed
trigger is the per-vehicle order of the action: 1 for its first action, 2 for the next, and so on.
Write each parameter as ? when unknown or as a range [lo,hi].";

pub const CONVERSION_EXAMPLE: &str = "\
IPS:
road: straight, lanes: 2
V1: V1 drives in the right lane ahead of V2.
V2: V2 drives in the left lane.
(V1, V2): V1 swerves left in front of V2, V2 brakes.

Template:
road: straight, lanes: 2
npc(V1, lane=[2,2], offset=[15,30], speed=[8,12])
npc(V2, lane=[1,1], offset=[0,5], speed=[10,15])
lane_change(V1, target_lane=[1,1], target_speed=?, trigger=[1,1])
decelerate(V2, target_speed=[0,5], trigger=[1,1])";

/// Prompt asking for a DSL template matching a legal IPS.
pub fn build_conversion_prompt(ips: &Ips) -> Result<Prompt, LlmError> {
    let report = check_legality(ips);
    if !report.ok() {
        return Err(LlmError::IllegalIps(violation_messages(&report).join("; ")));
    }
    Ok(Prompt {
        task: "Write the test case template for the interactive pattern sequence below.".into(),
        format_title: "Test Case Model".into(),
        format_block: TEST_CASE_MODEL.into(),
        attentions: vec![
            "Start with the road line, copied from the IPS.".into(),
            "Declare every vehicle of the IPS with one npc line, all before any action.".into(),
            "Use only accelerate, decelerate and lane_change for actions; a brake is a decelerate, a swerve is a lane_change.".into(),
            "Give each vehicle's actions increasing trigger values.".into(),
            "Reply with the template only, one statement per line.".into(),
        ],
        example_block: Some(CONVERSION_EXAMPLE.into()),
        input: serialize_ips(ips),
        feedback: Vec::new(),
    })
}

/// Something that answers prompts.
pub trait ChatClient {
    fn complete(&mut self, prompt: &Prompt) -> Result<String, LlmError>;

    /// Flushes any recorded state. Called once the client is no longer
    /// needed.
    fn finish(&mut self) -> Result<(), LlmError> {
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TranscriptEntry {
    pub response: String,
    pub model: String,
    /// Seconds since the Unix epoch.
    pub timestamp: u64,
}

/// Recorded responses keyed by prompt digest.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct Transcript {
    pub entries: BTreeMap<String, TranscriptEntry>,
}

impl Transcript {
    pub fn load(path: &Path) -> Result<Self, LlmError> {
        let err = |message: String| LlmError::Transcript { path: path.to_path_buf(), message };
        let text = std::fs::read_to_string(path).map_err(|e| err(e.to_string()))?;
        serde_json::from_str(&text).map_err(|e| err(e.to_string()))
    }

    pub fn to_json(&self) -> String {
        let mut s = serde_json::to_string_pretty(self).expect("transcripts serialize");
        s.push('\n');
        s
    }

    pub fn save(&self, path: &Path) -> Result<(), LlmError> {
        std::fs::write(path, self.to_json())
            .map_err(|e| LlmError::Transcript { path: path.to_path_buf(), message: e.to_string() })
    }
}

/// Answers from a transcript; an unknown prompt is an error.
#[derive(Debug, Clone)]
pub struct ReplayClient {
    transcript: Transcript,
}

impl ReplayClient {
    pub fn new(transcript: Transcript) -> Self {
        Self { transcript }
    }

    pub fn open(path: &Path) -> Result<Self, LlmError> {
        Ok(Self::new(Transcript::load(path)?))
    }
}

impl ChatClient for ReplayClient {
    fn complete(&mut self, prompt: &Prompt) -> Result<String, LlmError> {
        let digest = prompt.digest();
        self.transcript.entries.get(&digest).map(|e| e.response.clone()).ok_or(LlmError::UnknownDigest { digest })
    }
}

/// Returns canned responses in order, whatever the prompt.
#[derive(Debug, Clone, Default)]
pub struct ScriptedClient {
    responses: VecDeque<String>,
}

impl ScriptedClient {
    pub fn new<I: IntoIterator<Item = S>, S: Into<String>>(responses: I) -> Self {
        Self { responses: responses.into_iter().map(Into::into).collect() }
    }
}

impl ChatClient for ScriptedClient {
    fn complete(&mut self, _prompt: &Prompt) -> Result<String, LlmError> {
        self.responses.pop_front().ok_or(LlmError::ScriptExhausted)
    }
}

/// Wraps a client and records every exchange. With a path, `finish`
/// merges the recording into that transcript file.
pub struct RecordingClient<C> {
    inner: C,
    model: String,
    transcript: Transcript,
    path: Option<PathBuf>,
    clock: fn() -> u64,
}

fn unix_now() -> u64 {
    SystemTime::now().duration_since(UNIX_EPOCH).map_or(0, |d| d.as_secs())
}

impl<C: ChatClient> RecordingClient<C> {
    pub fn new(inner: C, model: impl Into<String>, path: Option<PathBuf>) -> Self {
        Self { inner, model: model.into(), transcript: Transcript::default(), path, clock: unix_now }
    }

    /// Replaces the wall clock used for timestamps.
    pub fn with_clock(mut self, clock: fn() -> u64) -> Self {
        self.clock = clock;
        self
    }

    pub fn transcript(&self) -> &Transcript {
        &self.transcript
    }

    pub fn into_transcript(self) -> Transcript {
        self.transcript
    }
}

impl<C: ChatClient> ChatClient for RecordingClient<C> {
    fn complete(&mut self, prompt: &Prompt) -> Result<String, LlmError> {
        let response = self.inner.complete(prompt)?;
        self.transcript.entries.insert(
            prompt.digest(),
            TranscriptEntry { response: response.clone(), model: self.model.clone(), timestamp: (self.clock)() },
        );
        Ok(response)
    }

    fn finish(&mut self) -> Result<(), LlmError> {
        self.inner.finish()?;
        let Some(path) = &self.path else { return Ok(()) };
        let mut merged = if path.exists() { Transcript::load(path)? } else { Transcript::default() };
        merged.entries.extend(self.transcript.entries.clone());
        merged.save(path)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LlmMode {
    Live,
    #[default]
    Replay,
    Record,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LlmClientConfig {
    pub mode: LlmMode,
    /// Chat-completions URL of an OpenAI-compatible service.
    pub endpoint: String,
    pub model_name: String,
    pub max_tokens: u32,
    pub temperature: f64,
    pub max_retries: usize,
    /// Transcript read in replay mode and written in record mode.
    pub transcript: Option<PathBuf>,
    /// Environment variable holding the API key (live and record modes).
    pub api_key_env: String,
    pub timeout_secs: u64,
}

impl Default for LlmClientConfig {
    fn default() -> Self {
        Self {
            mode: LlmMode::Replay,
            endpoint: "https://api.openai.com/v1/chat/completions".into(),
            model_name: "gpt-4".into(),
            max_tokens: 1000,
            temperature: 0.8,
            max_retries: 3,
            transcript: None,
            api_key_env: "OPENAI_API_KEY".into(),
            timeout_secs: 120,
        }
    }
}

impl LlmClientConfig {
    pub fn check(&self) -> Result<(), LlmError> {
        if !(0.0..=2.0).contains(&self.temperature) {
            return Err(LlmError::InvalidConfig(format!("temperature must be in [0, 2], got {}", self.temperature)));
        }
        if self.max_tokens == 0 || self.max_retries == 0 {
            return Err(LlmError::InvalidConfig("max_tokens and max_retries must be positive".into()));
        }
        if self.mode != LlmMode::Live && self.transcript.is_none() {
            return Err(LlmError::InvalidConfig("replay and record modes need a transcript path".into()));
        }
        Ok(())
    }
}

/// Client for an OpenAI-compatible chat-completions endpoint.
pub struct LiveClient {
    agent: ureq::Agent,
    endpoint: String,
    model: String,
    max_tokens: u32,
    temperature: f64,
    api_key: String,
}

impl LiveClient {
    pub fn new(cfg: &LlmClientConfig) -> Result<Self, LlmError> {
        let api_key = std::env::var(&cfg.api_key_env)
            .map_err(|_| LlmError::InvalidConfig(format!("environment variable {} is not set", cfg.api_key_env)))?;
        let agent: ureq::Agent =
            ureq::Agent::config_builder().timeout_global(Some(Duration::from_secs(cfg.timeout_secs))).build().into();
        Ok(Self {
            agent,
            endpoint: cfg.endpoint.clone(),
            model: cfg.model_name.clone(),
            max_tokens: cfg.max_tokens,
            temperature: cfg.temperature,
            api_key,
        })
    }
}

impl ChatClient for LiveClient {
    fn complete(&mut self, prompt: &Prompt) -> Result<String, LlmError> {
        let body = serde_json::json!({
            "model": self.model,
            "messages": [{"role": "user", "content": prompt.render()}],
            "max_tokens": self.max_tokens,
            "temperature": self.temperature,
        });
        let reply: serde_json::Value = self
            .agent
            .post(&self.endpoint)
            .header("Authorization", &format!("Bearer {}", self.api_key))
            .send_json(&body)
            .and_then(|mut r| r.body_mut().read_json())
            .map_err(|e| LlmError::Request(e.to_string()))?;
        reply["choices"][0]["message"]["content"]
            .as_str()
            .map(str::to_string)
            .ok_or_else(|| LlmError::Request(format!("unexpected reply shape: {reply}")))
    }
}

/// Client selected by `cfg.mode`.
pub fn build_client(cfg: &LlmClientConfig) -> Result<Box<dyn ChatClient>, LlmError> {
    cfg.check()?;
    let transcript = cfg.transcript.clone();
    Ok(match cfg.mode {
        LlmMode::Replay => Box::new(ReplayClient::open(transcript.as_deref().expect("checked"))?),
        LlmMode::Live => Box::new(LiveClient::new(cfg)?),
        LlmMode::Record => Box::new(RecordingClient::new(LiveClient::new(cfg)?, cfg.model_name.clone(), transcript)),
    })
}

/// Body of the first fenced code block, or the whole text.
pub fn strip_fence(response: &str) -> &str {
    let Some(open) = response.find("```") else { return response.trim() };
    let after = &response[open + 3..];
    let body_start = after.find('\n').map_or(after.len(), |i| i + 1);
    let body = &after[body_start..];
    body[..body.find("```").unwrap_or(body.len())].trim()
}

fn violation_messages(report: &crate::ips::LegalityReport) -> Vec<String> {
    report.violations.iter().map(|v| v.to_string()).collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct Extraction {
    pub ips: Ips,
    pub attempts: usize,
}

/// Asks for an IPS until one parses and is legal, at most `max_retries`
/// times. Each retry lists the previous answer's problems.
pub fn extract_ips(report: &str, client: &mut dyn ChatClient, max_retries: usize) -> Result<Extraction, LlmError> {
    let base = build_extraction_prompt(report)?;
    let mut feedback = Vec::new();
    for attempt in 1..=max_retries.max(1) {
        let response = client.complete(&base.with_feedback(feedback))?;
        feedback = match parse_ips(strip_fence(&response)) {
            Err(e) => vec![format!("parse error: {e}")],
            Ok(ips) => {
                let report = check_legality(&ips);
                if report.ok() {
                    return Ok(Extraction { ips, attempts: attempt });
                }
                violation_messages(&report)
            }
        };
    }
    Err(LlmError::ExtractionFailed { attempts: max_retries.max(1), last_violations: feedback })
}

#[derive(Debug, Clone, PartialEq)]
pub struct Conversion {
    /// Template with every slot unbound.
    pub template: TestCaseTemplate,
    /// Ranges and values the response suggested.
    pub proposed: ProposedRanges,
    pub attempts: usize,
}

/// Problems that make a parsed template unusable for `ips`.
fn template_mismatch(tpl: &TestCaseTemplate, ips: &Ips) -> Vec<String> {
    let mut problems = Vec::new();
    if tpl.road != ips.road {
        problems.push(format!("road line must be \"{}\"", ips.road));
    }
    let want = ips.vehicles();
    let have = tpl.vehicles();
    for v in &want {
        if !have.contains(v) {
            problems.push(format!("{v} has no npc line"));
        }
    }
    for v in &have {
        if !want.contains(v) {
            problems.push(format!("{v} is not in the IPS"));
        }
    }
    problems
}

/// Splits a parsed template into an all-unbound template and the ranges
/// its slots carried.
pub fn split_proposals(mut tpl: TestCaseTemplate) -> (TestCaseTemplate, ProposedRanges) {
    let mut proposed = ProposedRanges::new();
    for (i, st) in tpl.statements.iter_mut().enumerate() {
        for slot in &mut st.params {
            let key = SlotKey { statement: i, param: slot.kind };
            match slot.state {
                SlotState::Range { lo, hi } => {
                    proposed.insert(key, (lo, hi));
                }
                SlotState::Value { value } => {
                    proposed.insert(key, (value, value));
                }
                SlotState::Unbound => {}
            }
            slot.state = SlotState::Unbound;
        }
    }
    (tpl, proposed)
}

/// Asks for a template until one parses and matches the IPS's road and
/// vehicles, at most `max_retries` times.
pub fn convert_to_template(ips: &Ips, client: &mut dyn ChatClient, max_retries: usize) -> Result<Conversion, LlmError> {
    let base = build_conversion_prompt(ips)?;
    let mut feedback = Vec::new();
    for attempt in 1..=max_retries.max(1) {
        let response = client.complete(&base.with_feedback(feedback))?;
        feedback = match parse_template(strip_fence(&response)) {
            Err(e) => vec![e.to_string()],
            Ok(tpl) => {
                let problems = template_mismatch(&tpl, ips);
                if problems.is_empty() {
                    let (template, proposed) = split_proposals(tpl);
                    return Ok(Conversion { template, proposed, attempts: attempt });
                }
                problems
            }
        };
    }
    Err(LlmError::ConversionFailed { attempts: max_retries.max(1), last_problems: feedback })
}
