//! Counsellor agent, observer agents and the session lifecycle.
//!
//! A session starts with a counsellor greeting and then moves through
//! `Active → AwaitContinue → Active | Closed`. Every counsellor candidate passes
//! the moderator before it reaches the transcript; after each client message
//! the off-track and end observers run, in that order, before generation.

use std::collections::HashMap;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::domain::{Speaker, Transcript, TranscriptSource, Volley};
use crate::gateway::{Agent, ChatMessage, Gateway, GatewayError};
use crate::prompts::{self, PromptCatalog, PromptError};

pub const CONTINUE_QUESTION: &str = "Would you like to continue the conversation?";
pub const FAREWELL: &str = "Thank you and have a great day. Goodbye!";
pub const APOLOGY: &str =
    "I'm sorry, I'm not able to continue our conversation right now. Thank you for talking with me today.";
pub const MAX_MODERATION_ATTEMPTS: u32 = 5;
/// Observers see at most this many counsellor/client exchanges.
pub const OBSERVER_WINDOW_EXCHANGES: usize = 5;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum SessionPhase {
    Active,
    AwaitContinue,
    Closed,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum ModerationLabel {
    Normal,
    FlaggedSustain,
    FlaggedSelfHarm,
}

impl ModerationLabel {
    pub fn as_str(self) -> &'static str {
        match self {
            ModerationLabel::Normal => "Normal",
            ModerationLabel::FlaggedSustain => "Flagged: Evokes Sustain Talk",
            ModerationLabel::FlaggedSelfHarm => "Flagged: Self Harm",
        }
    }

    /// Parses one of the moderator's label strings, ignoring case,
    /// surrounding whitespace, quotes and a trailing period.
    pub fn parse(reply: &str) -> Option<Self> {
        let cleaned = clean_token(reply);
        [ModerationLabel::Normal, ModerationLabel::FlaggedSustain, ModerationLabel::FlaggedSelfHarm]
            .into_iter()
            .find(|l| l.as_str().eq_ignore_ascii_case(&cleaned))
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct EndVerdict {
    pub explanation: String,
    pub ended: bool,
}

impl EndVerdict {
    /// Explanation body followed by a final-line `True`/`False` token.
    pub fn parse(reply: &str) -> Option<Self> {
        let lines: Vec<&str> = reply.lines().filter(|l| !l.trim().is_empty()).collect();
        let (last, body) = lines.split_last()?;
        let ended = parse_bool(last)?;
        Some(EndVerdict { explanation: body.join("\n").trim().to_string(), ended })
    }
}

fn clean_token(s: &str) -> String {
    s.trim()
        .trim_matches(|c: char| c == '"' || c == '\'' || c == '`' || c == '*')
        .trim_end_matches('.')
        .trim()
        .to_string()
}

/// Case-insensitive, whitespace-tolerant `True` / `False`.
pub fn parse_bool(s: &str) -> Option<bool> {
    let t = clean_token(s);
    if t.eq_ignore_ascii_case("true") {
        Some(true)
    } else if t.eq_ignore_ascii_case("false") {
        Some(false)
    } else {
        None
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum OffTrackPolicy {
    /// Record the flag and keep talking (study mode).
    FlagOnly,
    /// End the session with a farewell (deployment mode).
    Terminate,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum CloseReason {
    ClientDeclinedToContinue,
    OffTrack,
    ModerationExhausted,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum ContinueChoice {
    Yes,
    No,
}

impl ContinueChoice {
    pub fn button_text(self) -> &'static str {
        match self {
            ContinueChoice::Yes => "Selected: Yes",
            ContinueChoice::No => "Selected: No",
        }
    }

    /// Recognises the button text and short free-text answers.
    pub fn parse(text: &str) -> Option<Self> {
        let t = text.trim();
        let t = t
            .strip_prefix("Selected:")
            .or_else(|| t.strip_prefix("selected:"))
            .unwrap_or(t);
        let first = t
            .split(|c: char| !c.is_alphanumeric() && c != '\'')
            .find(|w| !w.is_empty())?
            .to_ascii_lowercase();
        match first.as_str() {
            "yes" | "y" | "yeah" | "yep" | "sure" | "ok" | "okay" => Some(ContinueChoice::Yes),
            "no" | "n" | "nope" | "nah" => Some(ContinueChoice::No),
            _ => None,
        }
    }

    fn is_button(text: &str) -> bool {
        let t = text.trim();
        t == ContinueChoice::Yes.button_text() || t == ContinueChoice::No.button_text()
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModerationRecord {
    pub volley_index: usize,
    pub attempts: u32,
    pub labels_seen: Vec<ModerationLabel>,
}

#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct SessionMeta {
    pub participant_id: String,
    pub client_name: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SessionState {
    pub transcript: Transcript,
    pub phase: SessionPhase,
    pub offtrack_flag: bool,
    pub moderation_log: Vec<ModerationRecord>,
    pub prompt_profile: String,
    pub meta: SessionMeta,
    pub close_reason: Option<CloseReason>,
    /// Indices of counsellor volleys carrying a closing summary.
    pub summary_volleys: Vec<usize>,
}

impl SessionState {
    pub fn new(meta: SessionMeta, profile: &str, source: TranscriptSource) -> Self {
        SessionState {
            transcript: Transcript::new(meta.participant_id.clone(), source),
            phase: SessionPhase::Active,
            offtrack_flag: false,
            moderation_log: Vec::new(),
            prompt_profile: profile.to_string(),
            meta,
            close_reason: None,
            summary_volleys: Vec::new(),
        }
    }

    pub fn is_closed(&self) -> bool {
        self.phase == SessionPhase::Closed
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum MessageKind {
    Turn,
    Summary,
    ContinueQuestion,
    Farewell,
    Apology,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CounsellorMessage {
    pub volley_index: usize,
    pub kind: MessageKind,
    pub text: String,
}

/// What one call to [`CounsellorEngine::advance`] produced.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Advance {
    pub messages: Vec<CounsellorMessage>,
    pub phase: SessionPhase,
    pub offtrack: bool,
    pub end: Option<EndVerdict>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TurnOutcome {
    pub volley_index: usize,
    pub text: String,
    pub attempts: u32,
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum EngineError {
    #[error(transparent)]
    Prompt(#[from] PromptError),
    #[error(transparent)]
    Gateway(#[from] GatewayError),
    #[error("{agent} reply is not a recognised label: {reply:?}")]
    UnparseableLabel { agent: &'static str, reply: String },
    #[error("moderator flagged all {MAX_MODERATION_ATTEMPTS} candidates")]
    ModerationExhausted,
    #[error("session is closed")]
    SessionClosed,
    #[error("operation needs phase {expected:?}, session is {found:?}")]
    InvalidPhase { expected: SessionPhase, found: SessionPhase },
    #[error("counsellor produced an empty candidate")]
    EmptyCandidate,
    #[error("observer needs at least one client volley")]
    NoClientVolley,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct EngineConfig {
    pub profile: String,
    pub offtrack_policy: OffTrackPolicy,
}

impl Default for EngineConfig {
    fn default() -> Self {
        EngineConfig { profile: "final".to_string(), offtrack_policy: OffTrackPolicy::FlagOnly }
    }
}

enum Moderated {
    Accepted { text: String, attempts: u32, labels: Vec<ModerationLabel> },
    Exhausted { labels: Vec<ModerationLabel> },
}

#[derive(Debug, Clone)]
pub struct CounsellorEngine {
    gateway: Gateway,
    catalog: PromptCatalog,
    config: EngineConfig,
}

impl CounsellorEngine {
    pub fn new(gateway: Gateway, catalog: PromptCatalog, config: EngineConfig) -> Self {
        CounsellorEngine { gateway, catalog, config }
    }

    pub fn gateway(&self) -> &Gateway {
        &self.gateway
    }

    pub fn config(&self) -> &EngineConfig {
        &self.config
    }

    pub fn catalog(&self) -> &PromptCatalog {
        &self.catalog
    }

    /// Counsellor system prompt for `profile` with session placeholders filled in.
    pub fn assemble_counsellor_prompt(&self, profile: &str, meta: &SessionMeta) -> Result<String, EngineError> {
        let template = self.catalog.get(PromptCatalog::counsellor_entry(profile)?)?;
        let mut vars = HashMap::new();
        if let Some(name) = meta.client_name.as_deref() {
            vars.insert("client_name", name);
        }
        Ok(prompts::render(template, &vars)?)
    }

    /// Creates a session and generates the counsellor's opening turn.
    pub fn open(&self, meta: SessionMeta, source: TranscriptSource) -> Result<SessionState, EngineError> {
        self.open_with_profile(meta, source, &self.config.profile)
    }

    pub fn open_with_profile(
        &self,
        meta: SessionMeta,
        source: TranscriptSource,
        profile: &str,
    ) -> Result<SessionState, EngineError> {
        let mut state = SessionState::new(meta, profile, source);
        self.assemble_counsellor_prompt(&state.prompt_profile, &state.meta)?;
        self.generate_moderated_turn(&mut state)?;
        Ok(state)
    }

    /// Classifies the candidate as the last counsellor utterance of the excerpt.
    pub fn moderate(&self, excerpt: &[Volley], candidate: &str) -> Result<ModerationLabel, EngineError> {
        if candidate.trim().is_empty() {
            return Err(EngineError::EmptyCandidate);
        }
        let mut text = format_excerpt(excerpt);
        if !text.is_empty() {
            text.push('\n');
        }
        text.push_str(&format!("Counsellor: {}", candidate.trim()));
        let req = self.gateway.request(
            Agent::Moderator,
            self.catalog.get(prompts::MODERATOR)?,
            vec![ChatMessage::user(text)],
        );
        let reply = self.gateway.complete(&req)?.text;
        ModerationLabel::parse(&reply)
            .ok_or(EngineError::UnparseableLabel { agent: "moderator", reply })
    }

    pub fn detect_offtrack(&self, excerpt: &[Volley]) -> Result<bool, EngineError> {
        if !excerpt.iter().any(|v| v.speaker == Speaker::Client) {
            return Err(EngineError::NoClientVolley);
        }
        let req = self.gateway.request(
            Agent::OffTrack,
            self.catalog.get(prompts::OFFTRACK)?,
            vec![ChatMessage::user(format_excerpt(excerpt))],
        );
        let reply = self.gateway.complete(&req)?.text;
        parse_bool(&reply).ok_or(EngineError::UnparseableLabel { agent: "offtrack", reply })
    }

    pub fn detect_end(&self, excerpt: &[Volley]) -> Result<EndVerdict, EngineError> {
        let req = self.gateway.request(
            Agent::EndDetector,
            self.catalog.get(prompts::END)?,
            vec![ChatMessage::user(format_excerpt(excerpt))],
        );
        let reply = self.gateway.complete(&req)?.text;
        EndVerdict::parse(&reply).ok_or(EngineError::UnparseableLabel { agent: "end", reply })
    }

    /// Generates, moderates and appends one counsellor turn.
    ///
    /// On five flagged candidates the session fails closed: an apology is
    /// appended, the phase becomes `Closed` and `ModerationExhausted` is returned.
    pub fn generate_moderated_turn(&self, state: &mut SessionState) -> Result<TurnOutcome, EngineError> {
        require_phase(state, SessionPhase::Active)?;
        let system = self.assemble_counsellor_prompt(&state.prompt_profile, &state.meta)?;
        match self.moderated_candidate(state, &system)? {
            Moderated::Accepted { text, attempts, labels } => {
                let volley_index = state.transcript.push(Speaker::Counsellor, text.clone());
                state.moderation_log.push(ModerationRecord { volley_index, attempts, labels_seen: labels });
                Ok(TurnOutcome { volley_index, text, attempts })
            }
            Moderated::Exhausted { labels } => {
                self.fail_closed(state, labels);
                Err(EngineError::ModerationExhausted)
            }
        }
    }

    /// Feeds one client message through the state machine.
    ///
    /// The state is only modified when the call succeeds, except for
    /// `ModerationExhausted`, which leaves the session closed with an apology.
    pub fn advance(&self, state: &mut SessionState, client_message: &str) -> Result<Advance, EngineError> {
        let mut working = state.clone();
        let result = self.advance_inner(&mut working, client_message);
        if matches!(result, Ok(_) | Err(EngineError::ModerationExhausted)) {
            *state = working;
        }
        result
    }

    /// Button path for the continue question.
    pub fn choose(&self, state: &mut SessionState, choice: ContinueChoice) -> Result<Advance, EngineError> {
        if state.phase != SessionPhase::AwaitContinue {
            if state.is_closed() {
                return Err(EngineError::SessionClosed);
            }
            return Err(EngineError::InvalidPhase { expected: SessionPhase::AwaitContinue, found: state.phase });
        }
        self.advance(state, choice.button_text())
    }

    fn advance_inner(&self, state: &mut SessionState, message: &str) -> Result<Advance, EngineError> {
        let first_new = state.transcript.volleys.len() + 1;
        let mut end = None;
        let mut offtrack = false;
        match state.phase {
            SessionPhase::Closed => return Err(EngineError::SessionClosed),
            SessionPhase::AwaitContinue => {
                let choice = ContinueChoice::parse(message);
                if ContinueChoice::is_button(message) {
                    state.transcript.push_event(Speaker::Client, message.trim());
                } else {
                    state.transcript.push(Speaker::Client, message);
                }
                state.phase = SessionPhase::Active;
                match choice {
                    Some(ContinueChoice::Yes) => {
                        self.turn_or_close(state)?;
                    }
                    Some(ContinueChoice::No) => {
                        self.close_with_farewell(state, CloseReason::ClientDeclinedToContinue);
                    }
                    None => {
                        (offtrack, end) = self.observe_and_respond(state)?;
                    }
                }
            }
            SessionPhase::Active => {
                state.transcript.push(Speaker::Client, message);
                (offtrack, end) = self.observe_and_respond(state)?;
            }
        }
        Ok(Advance {
            messages: self.messages_since(state, first_new),
            phase: state.phase,
            offtrack,
            end,
        })
    }

    fn observe_and_respond(&self, state: &mut SessionState) -> Result<(bool, Option<EndVerdict>), EngineError> {
        let window = observer_window(&state.transcript.volleys);
        let offtrack = self.detect_offtrack(window)?;
        if offtrack {
            state.offtrack_flag = true;
            if self.config.offtrack_policy == OffTrackPolicy::Terminate {
                self.close_with_farewell(state, CloseReason::OffTrack);
                return Ok((true, None));
            }
        }
        let verdict = self.detect_end(window)?;
        if verdict.ended {
            self.summary_turn(state)?;
        } else {
            self.turn_or_close(state)?;
        }
        Ok((offtrack, Some(verdict)))
    }

    fn turn_or_close(&self, state: &mut SessionState) -> Result<(), EngineError> {
        self.generate_moderated_turn(state).map(|_| ())
    }

    fn summary_turn(&self, state: &mut SessionState) -> Result<(), EngineError> {
        let mut system = self.assemble_counsellor_prompt(&state.prompt_profile, &state.meta)?;
        system.push_str("\n\n");
        system.push_str(self.catalog.get(prompts::SUMMARY_SUFFIX)?);
        match self.moderated_candidate(state, &system)? {
            Moderated::Accepted { text, attempts, labels } => {
                let body = format!("{}\n\n{}", text.trim(), CONTINUE_QUESTION);
                let volley_index = state.transcript.push(Speaker::Counsellor, body);
                state.moderation_log.push(ModerationRecord { volley_index, attempts, labels_seen: labels });
                state.summary_volleys.push(volley_index);
                state.phase = SessionPhase::AwaitContinue;
                Ok(())
            }
            Moderated::Exhausted { labels } => {
                self.fail_closed(state, labels);
                Err(EngineError::ModerationExhausted)
            }
        }
    }

    fn moderated_candidate(&self, state: &SessionState, system: &str) -> Result<Moderated, EngineError> {
        let history = counsellor_history(&state.transcript.volleys);
        let excerpt = moderator_window(&state.transcript.volleys);
        let mut labels = Vec::new();
        for attempt in 1..=MAX_MODERATION_ATTEMPTS {
            let req = self.gateway.request(Agent::Counsellor, system, history.clone());
            let candidate = self.gateway.complete(&req)?.text;
            let label = self.moderate(excerpt, &candidate)?;
            labels.push(label);
            if label == ModerationLabel::Normal {
                return Ok(Moderated::Accepted { text: candidate.trim().to_string(), attempts: attempt, labels });
            }
            tracing::info!(attempt, label = label.as_str(), "moderator rejected counsellor candidate");
        }
        Ok(Moderated::Exhausted { labels })
    }

    fn fail_closed(&self, state: &mut SessionState, labels: Vec<ModerationLabel>) {
        let volley_index = state.transcript.push(Speaker::Counsellor, APOLOGY);
        state.moderation_log.push(ModerationRecord {
            volley_index,
            attempts: MAX_MODERATION_ATTEMPTS,
            labels_seen: labels,
        });
        state.phase = SessionPhase::Closed;
        state.close_reason = Some(CloseReason::ModerationExhausted);
    }

    fn close_with_farewell(&self, state: &mut SessionState, reason: CloseReason) {
        state.transcript.push(Speaker::Counsellor, FAREWELL);
        state.phase = SessionPhase::Closed;
        state.close_reason = Some(reason);
    }

    fn messages_since(&self, state: &SessionState, first: usize) -> Vec<CounsellorMessage> {
        let mut out = Vec::new();
        for v in state.transcript.volleys.iter().skip(first) {
            if v.speaker != Speaker::Counsellor {
                continue;
            }
            if state.summary_volleys.contains(&v.index) {
                let summary = v.text.strip_suffix(CONTINUE_QUESTION).unwrap_or(&v.text).trim();
                out.push(CounsellorMessage { volley_index: v.index, kind: MessageKind::Summary, text: summary.to_string() });
                out.push(CounsellorMessage {
                    volley_index: v.index,
                    kind: MessageKind::ContinueQuestion,
                    text: CONTINUE_QUESTION.to_string(),
                });
            } else {
                let kind = match (v.text.as_str(), state.close_reason) {
                    (FAREWELL, Some(_)) => MessageKind::Farewell,
                    (APOLOGY, Some(CloseReason::ModerationExhausted)) => MessageKind::Apology,
                    _ => MessageKind::Turn,
                };
                out.push(CounsellorMessage { volley_index: v.index, kind, text: v.text.clone() });
            }
        }
        out
    }
}

fn require_phase(state: &SessionState, expected: SessionPhase) -> Result<(), EngineError> {
    match state.phase {
        p if p == expected => Ok(()),
        SessionPhase::Closed => Err(EngineError::SessionClosed),
        found => Err(EngineError::InvalidPhase { expected, found }),
    }
}

/// `Counsellor: …` / `Client: …` lines.
pub fn format_excerpt(volleys: &[Volley]) -> String {
    volleys
        .iter()
        .map(|v| format!("{}: {}", v.speaker.label(), v.text.trim()))
        .collect::<Vec<_>>()
        .join("\n")
}

/// The most recent exchanges shown to the off-track and end observers.
pub fn observer_window(volleys: &[Volley]) -> &[Volley] {
    let n = 2 * OBSERVER_WINDOW_EXCHANGES;
    &volleys[volleys.len().saturating_sub(n)..]
}

/// Context preceding a candidate; the candidate itself completes the last exchange.
fn moderator_window(volleys: &[Volley]) -> &[Volley] {
    let n = 2 * OBSERVER_WINDOW_EXCHANGES - 1;
    &volleys[volleys.len().saturating_sub(n)..]
}

/// Conversation as seen by the counsellor model: it speaks as the assistant.
fn counsellor_history(volleys: &[Volley]) -> Vec<ChatMessage> {
    volleys
        .iter()
        .map(|v| match v.speaker {
            Speaker::Counsellor => ChatMessage::assistant(v.text.clone()),
            Speaker::Client => ChatMessage::user(v.text.clone()),
        })
        .collect()
}
