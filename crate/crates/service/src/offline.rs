//! Deterministic stand-in replies so every command runs without a model.

use milab_core::automisc::heuristic_reply;
use milab_core::gateway::{ChatRequest, MockBackend};

const COUNSELLOR_LINES: [&str; 6] = [
    "Hi, thanks for joining me today. What would you like to talk about regarding your smoking?",
    "It sounds like smoking has been part of your routine for a long time.",
    "What do you enjoy about smoking, and what do you like less about it?",
    "You're not sure you're ready, and you also care about your health.",
    "How might your days look if you smoked a little less?",
    "You've thought about this more than you let on.",
];

const CLIENT_LINES: [&str; 5] = [
    "I smoke when I'm stressed. It helps me relax.",
    "I've tried to quit before and it didn't work.",
    "Maybe I could cut down at work.",
    "My kids keep asking me to stop.",
    "I have to go now, bye.",
];

fn last_client_line(req: &ChatRequest) -> String {
    req.messages
        .first()
        .map(|m| m.text.lines().rfind(|l| l.starts_with("Client:")).unwrap_or_default().to_lowercase())
        .unwrap_or_default()
}

/// Reply for any agent: parser and annotators use keyword heuristics, the
/// dialogue agents cycle through canned lines, classifiers answer benignly.
pub fn offline_reply(req: &ChatRequest) -> Option<String> {
    if let Some(r) = heuristic_reply(req) {
        return Some(r);
    }
    let turns = req.messages.len();
    Some(match req.agent.as_str() {
        "moderator" => "Normal".to_string(),
        "offtrack" => "False".to_string(),
        "end" => {
            let last = last_client_line(req);
            let ended = ["bye", "have to go", "goodbye"].iter().any(|k| last.contains(k));
            format!("The client {} the conversation.\n{}", if ended { "closed" } else { "continues" }, if ended { "True" } else { "False" })
        }
        "client" => CLIENT_LINES[(turns / 2).min(CLIENT_LINES.len() - 1)].to_string(),
        _ => COUNSELLOR_LINES[(turns / 2) % COUNSELLOR_LINES.len()].to_string(),
    })
}

pub fn offline_backend() -> MockBackend {
    MockBackend::new().with_responder(offline_reply)
}
