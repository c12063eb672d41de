//! Self-play harness: the counsellor engine talking to a prompted virtual smoker.

use std::collections::HashMap;
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::domain::{Speaker, Transcript, TranscriptSource, Volley};
use crate::engine::{CounsellorEngine, EngineError, SessionMeta, SessionState};
use crate::gateway::{Agent, ChatMessage, GatewayError};
use crate::prompts::{self, PromptCatalog, PromptError};

pub const DEFAULT_MAX_VOLLEYS: usize = 60;

const DEFAULT_BACKSTORY: &str = include_str!("../backstories/default.txt");

#[derive(Debug, Error, Clone, PartialEq)]
pub enum SelfPlayError {
    #[error("backstory narrative is empty")]
    EmptyBackstory,
    #[error("backstory {0}: first line must name the client")]
    MissingName(String),
    #[error("max_volleys must be at least 2, got {0}")]
    InvalidConfig(usize),
    #[error("virtual client returned an empty reply")]
    EmptyClientReply,
    #[error("reading backstories: {0}")]
    Io(String),
    #[error(transparent)]
    Engine(#[from] EngineError),
    #[error(transparent)]
    Gateway(#[from] GatewayError),
    #[error(transparent)]
    Prompt(#[from] PromptError),
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Backstory {
    pub name: String,
    pub narrative: String,
    pub resistance_level: String,
    pub rules_block: String,
}

impl Backstory {
    pub fn new(name: impl Into<String>, narrative: impl Into<String>) -> Self {
        Backstory {
            name: name.into(),
            narrative: narrative.into(),
            resistance_level: String::new(),
            rules_block: default_rules(),
        }
    }

    /// The highly resistant smoker used during prompt iteration.
    pub fn default_client() -> Self {
        Self::parse(DEFAULT_BACKSTORY, "default").expect("vendored backstory parses")
    }

    /// `Name: …` header line, optional `Resistance: …` line, then the narrative.
    pub fn parse(text: &str, origin: &str) -> Result<Self, SelfPlayError> {
        let mut lines = text.lines();
        let header = lines.next().unwrap_or_default().trim();
        let name = header.strip_prefix("Name:").unwrap_or(header).trim();
        if name.is_empty() {
            return Err(SelfPlayError::MissingName(origin.to_string()));
        }
        let rest: Vec<&str> = lines.collect();
        let (resistance, body) = match rest.first().and_then(|l| l.trim().strip_prefix("Resistance:")) {
            Some(r) => (r.trim().to_string(), &rest[1..]),
            None => (String::new(), &rest[..]),
        };
        let narrative = body.join("\n").trim().to_string();
        if narrative.is_empty() {
            return Err(SelfPlayError::EmptyBackstory);
        }
        Ok(Backstory {
            name: name.to_string(),
            narrative,
            resistance_level: resistance,
            rules_block: default_rules(),
        })
    }

    /// Every `*.txt` file in `dir`, in file-name order.
    pub fn load_dir(dir: &Path) -> Result<Vec<Self>, SelfPlayError> {
        let mut paths: Vec<_> = std::fs::read_dir(dir)
            .map_err(|e| SelfPlayError::Io(format!("{}: {e}", dir.display())))?
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| p.extension().is_some_and(|x| x == "txt"))
            .collect();
        paths.sort();
        paths
            .iter()
            .map(|p| {
                let text = std::fs::read_to_string(p).map_err(|e| SelfPlayError::Io(format!("{}: {e}", p.display())))?;
                Backstory::parse(&text, &p.display().to_string())
            })
            .collect()
    }
}

fn default_rules() -> String {
    PromptCatalog::builtin()
        .get(prompts::VIRTUAL_CLIENT_RULES)
        .expect("rules are vendored")
        .trim_end()
        .to_string()
}

/// Fills the virtual-client template from `catalog` with the backstory.
pub fn assemble_client_prompt_with(catalog: &PromptCatalog, b: &Backstory) -> Result<String, SelfPlayError> {
    if b.narrative.trim().is_empty() {
        return Err(SelfPlayError::EmptyBackstory);
    }
    let vars = HashMap::from([("backstory", b.narrative.trim()), ("rules", b.rules_block.as_str())]);
    Ok(prompts::render(catalog.get(prompts::VIRTUAL_CLIENT)?, &vars)?)
}

pub fn assemble_client_prompt(b: &Backstory) -> Result<String, SelfPlayError> {
    assemble_client_prompt_with(&PromptCatalog::builtin(), b)
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SelfPlayConfig {
    pub backstory: Backstory,
    pub max_volleys: usize,
    pub seed: u64,
    pub counsellor_profile: String,
    pub participant_id: String,
}

impl SelfPlayConfig {
    pub fn new(backstory: Backstory) -> Self {
        SelfPlayConfig {
            participant_id: format!("selfplay-{}", backstory.name.to_lowercase()),
            backstory,
            max_volleys: DEFAULT_MAX_VOLLEYS,
            seed: 0,
            counsellor_profile: "final".to_string(),
        }
    }
}

/// Runs one conversation and returns the final session state.
///
/// Stops when the session closes or the volley cap is reached; in the latter
/// case the transcript is flagged as truncated.
pub fn run_session(engine: &CounsellorEngine, cfg: &SelfPlayConfig) -> Result<SessionState, SelfPlayError> {
    if cfg.max_volleys < 2 {
        return Err(SelfPlayError::InvalidConfig(cfg.max_volleys));
    }
    let system = assemble_client_prompt_with(engine.catalog(), &cfg.backstory)?;
    let meta = SessionMeta {
        participant_id: cfg.participant_id.clone(),
        client_name: Some(cfg.backstory.name.clone()),
    };
    let mut state = engine.open_with_profile(meta, TranscriptSource::SelfPlay, &cfg.counsellor_profile)?;

    while !state.is_closed() {
        let len = state.transcript.volleys.len();
        if len >= cfg.max_volleys {
            state.transcript.truncated = true;
            break;
        }
        let reply = client_reply(engine, &system, &state.transcript.volleys, cfg.seed)?;
        if len + 1 == cfg.max_volleys {
            state.transcript.push(Speaker::Client, reply);
            state.transcript.truncated = true;
            break;
        }
        match engine.advance(&mut state, &reply) {
            Ok(_) | Err(EngineError::ModerationExhausted) => {}
            Err(e) => return Err(e.into()),
        }
    }
    Ok(state)
}

pub fn run_selfplay(engine: &CounsellorEngine, cfg: &SelfPlayConfig) -> Result<Transcript, SelfPlayError> {
    run_session(engine, cfg).map(|s| s.transcript)
}

/// Runs many sessions concurrently; each session is sequential.
pub fn run_batch(engine: &CounsellorEngine, configs: &[SelfPlayConfig]) -> Vec<Result<Transcript, SelfPlayError>> {
    configs.par_iter().map(|cfg| run_selfplay(engine, cfg)).collect()
}

fn client_reply(
    engine: &CounsellorEngine,
    system: &str,
    volleys: &[Volley],
    seed: u64,
) -> Result<String, SelfPlayError> {
    // The virtual client speaks as the assistant, so roles are flipped.
    let messages = volleys
        .iter()
        .map(|v| match v.speaker {
            Speaker::Counsellor => ChatMessage::user(v.text.clone()),
            Speaker::Client => ChatMessage::assistant(v.text.clone()),
        })
        .collect();
    let mut req = engine.gateway().request(Agent::VirtualClient, system, messages);
    req.seed = Some(seed.wrapping_add(volleys.len() as u64));
    let text = engine.gateway().complete(&req)?.text;
    let text = text.trim();
    if text.is_empty() {
        return Err(SelfPlayError::EmptyClientReply);
    }
    Ok(text.to_string())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::domain::validate_transcript;
    use crate::engine::{EngineConfig, SessionPhase};
    use crate::gateway::{Gateway, MockBackend};

    fn engine(mock: MockBackend) -> CounsellorEngine {
        CounsellorEngine::new(Gateway::mock(mock), PromptCatalog::builtin(), EngineConfig::default())
    }

    #[test]
    fn client_prompt_contents() {
        let p = assemble_client_prompt(&Backstory::default_client()).unwrap();
        assert!(p.contains("Stay in character throughout."));
        assert!(p.contains("You are a human smoker"));
        assert!(p.contains("ignored for the promotion"));
        assert_eq!(
            assemble_client_prompt(&Backstory::new("X", "")),
            Err(SelfPlayError::EmptyBackstory)
        );
    }

    #[test]
    fn backstory_files() {
        let b = Backstory::default_client();
        assert_eq!(b.name, "Marcus");
        assert_eq!(b.resistance_level, "highly resistant");
        assert!(Backstory::parse("Name: Jo\n\n", "x").is_err());
        let plain = Backstory::parse("Jo\nsmokes at parties", "x").unwrap();
        assert_eq!((plain.name.as_str(), plain.narrative.as_str()), ("Jo", "smokes at parties"));
    }

    #[test]
    fn cap_truncates() {
        let mock = MockBackend::new().with_responder(|req| {
            Some(match req.agent.as_str() {
                "moderator" => "Normal".into(),
                "offtrack" => "False".into(),
                "end" => "ongoing\nFalse".into(),
                "client" => "meh".into(),
                _ => format!("turn {}", req.messages.len()),
            })
        });
        let mut cfg = SelfPlayConfig::new(Backstory::default_client());
        cfg.max_volleys = 10;
        let state = run_session(&engine(mock), &cfg).unwrap();
        assert_eq!(state.transcript.volleys.len(), 10);
        assert!(state.transcript.truncated);
        assert_eq!(state.transcript.source, TranscriptSource::SelfPlay);
        assert!(validate_transcript(&state.transcript).is_empty());
        cfg.max_volleys = 1;
        assert_eq!(run_session(&engine(MockBackend::new()), &cfg), Err(SelfPlayError::InvalidConfig(1)));
    }

    #[test]
    fn seed_is_forwarded() {
        let mock = MockBackend::new()
            .script(Agent::Counsellor, ["hi", "summary"])
            .script(Agent::Moderator, ["Normal"; 2])
            .script(Agent::VirtualClient, ["bye", "no"])
            .script(Agent::OffTrack, ["False"])
            .script(Agent::EndDetector, ["done\nTrue"]);
        let mut cfg = SelfPlayConfig::new(Backstory::default_client());
        cfg.seed = 40;
        let state = run_session(&engine(mock.clone()), &cfg).unwrap();
        assert_eq!(state.phase, SessionPhase::Closed);
        let seeds: Vec<_> = mock.requests_for(Agent::VirtualClient).iter().map(|r| r.seed).collect();
        assert_eq!(seeds, [Some(41), Some(43)]);
    }
}
