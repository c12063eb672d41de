//! Automated MISC coding: volley segmentation, per-utterance annotation and
//! transcript-level summary metrics.

use std::collections::{HashMap, HashSet};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::domain::{
    reconstructs, Annotation, ClientCode, CounsellorCode, CounsellorLabel, MiscCode, Speaker, Supercategory, Transcript,
    Utterance, Volley,
};
use crate::gateway::{Agent, ChatMessage, ChatRequest, Gateway, GatewayError};
use crate::prompts::{self, PromptCatalog, PromptError};

pub const DEFAULT_CONTEXT_VOLLEYS: usize = 5;
pub const DEFAULT_ANNOTATOR_ID: &str = "automisc";

const RETRY_NOTE: &str = "Those segments do not reproduce the input text. Return the segmentation again so that joining the strings with single spaces gives back the input exactly, without adding, dropping or rewording anything.";

#[derive(Debug, Error, Clone, PartialEq)]
pub enum AutoMiscError {
    #[error("volley {volley}: segments do not reconstruct the volley text")]
    SegmentationMismatch { volley: usize },
    #[error("parser reply is not a list of strings: {0:?}")]
    UnparseableReply(String),
    #[error("no label field in annotator reply: {0:?}")]
    UnparseableLabel(String),
    #[error("label {label:?} is not allowed for {speaker}")]
    InvalidLabel { label: String, speaker: Speaker },
    #[error("volley {0} has empty text")]
    EmptyVolley(usize),
    #[error("utterance {0} is not spoken by the expected speaker")]
    WrongSpeaker(usize),
    #[error("annotations incomplete: {0}")]
    IncompleteAnnotations(String),
    #[error("no transcripts to summarise")]
    EmptyInput,
    #[error(transparent)]
    Gateway(#[from] GatewayError),
    #[error(transparent)]
    Prompt(#[from] PromptError),
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AnnotatedTranscript {
    pub transcript: Transcript,
    pub annotations: Vec<Annotation>,
    pub annotator_id: String,
}

impl AnnotatedTranscript {
    pub fn annotation_for(&self, utterance_index: usize) -> Option<&Annotation> {
        self.annotations.iter().find(|a| a.utterance_index == utterance_index)
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct CodeCounts {
    pub mico: u32,
    pub miin: u32,
    pub r: u32,
    pub q: u32,
    pub other: u32,
    pub c: u32,
    pub s: u32,
    pub n: u32,
}

impl CodeCounts {
    pub fn add(&mut self, code: MiscCode) {
        if let Some(label) = code.counsellor_label() {
            match label {
                CounsellorLabel::Mico => self.mico += 1,
                CounsellorLabel::Miin => self.miin += 1,
                CounsellorLabel::R => self.r += 1,
                CounsellorLabel::Q => self.q += 1,
                CounsellorLabel::Other => self.other += 1,
            }
        }
        match code.client_code() {
            Some(ClientCode::C) => self.c += 1,
            Some(ClientCode::S) => self.s += 1,
            Some(ClientCode::N) => self.n += 1,
            None => {}
        }
    }

    pub fn counsellor_total(&self) -> u32 {
        self.mico + self.miin + self.r + self.q + self.other
    }

    pub fn client_total(&self) -> u32 {
        self.c + self.s + self.n
    }
}

/// Transcript-level MISC summary. A metric is `None` when its denominator is zero.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SummaryScores {
    pub counts: CodeCounts,
    pub pct_mic: Option<f64>,
    pub rq_ratio: Option<f64>,
    pub pct_ct: Option<f64>,
}

impl SummaryScores {
    pub fn from_counts(counts: CodeCounts) -> Self {
        let consistent = counts.mico + counts.r + counts.q;
        SummaryScores {
            counts,
            pct_mic: ratio(100.0 * consistent as f64, consistent + counts.miin),
            rq_ratio: ratio(counts.r as f64, counts.q),
            pct_ct: ratio(100.0 * counts.c as f64, counts.c + counts.s),
        }
    }

    /// Counts codes given as `AutoMISCLabel` strings; blanks are skipped.
    pub fn from_labels<'a>(labels: impl IntoIterator<Item = &'a str>) -> Result<Self, AutoMiscError> {
        let mut counts = CodeCounts::default();
        for raw in labels {
            let label = raw.trim();
            if label.is_empty() {
                continue;
            }
            let code = serde_json::from_value::<MiscCode>(serde_json::Value::String(label.to_string()))
                .map_err(|_| AutoMiscError::InvalidLabel { label: label.to_string(), speaker: Speaker::Counsellor })?;
            counts.add(code);
        }
        Ok(Self::from_counts(counts))
    }
}

fn ratio(num: f64, den: u32) -> Option<f64> {
    (den > 0).then(|| num / den as f64)
}

/// Counts and metrics for a fully annotated transcript.
///
/// Every non-event utterance needs exactly one annotation whose code belongs
/// to the utterance's speaker.
pub fn summary_metrics(at: &AnnotatedTranscript) -> Result<SummaryScores, AutoMiscError> {
    let mut by_index: HashMap<usize, &Annotation> = HashMap::new();
    for a in &at.annotations {
        if by_index.insert(a.utterance_index, a).is_some() {
            return Err(AutoMiscError::IncompleteAnnotations(format!(
                "utterance {} annotated twice",
                a.utterance_index
            )));
        }
    }
    let mut counts = CodeCounts::default();
    let mut seen = 0;
    for v in at.transcript.volleys.iter().filter(|v| !v.system_event) {
        if !v.is_parsed() {
            return Err(AutoMiscError::IncompleteAnnotations(format!("volley {} is not segmented", v.index)));
        }
        for u in &v.utterances {
            let a = by_index
                .get(&u.index)
                .ok_or_else(|| AutoMiscError::IncompleteAnnotations(format!("utterance {} has no annotation", u.index)))?;
            if a.code.speaker() != u.speaker {
                return Err(AutoMiscError::IncompleteAnnotations(format!(
                    "utterance {} carries a {} code",
                    u.index,
                    a.code.speaker()
                )));
            }
            counts.add(a.code);
            seen += 1;
        }
    }
    if seen != by_index.len() {
        return Err(AutoMiscError::IncompleteAnnotations("annotation for an unknown utterance".into()));
    }
    Ok(SummaryScores::from_counts(counts))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MetricSummary {
    pub mean: Option<f64>,
    pub sd: Option<f64>,
    pub n_defined: usize,
}

impl MetricSummary {
    /// Mean and sample SD over the defined values. A single value has SD 0.
    pub fn of(values: impl IntoIterator<Item = Option<f64>>) -> Self {
        let xs: Vec<f64> = values.into_iter().flatten().collect();
        let n = xs.len();
        if n == 0 {
            return MetricSummary { mean: None, sd: None, n_defined: 0 };
        }
        let mean = xs.iter().sum::<f64>() / n as f64;
        let sd = if n == 1 {
            0.0
        } else {
            (xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1) as f64).sqrt()
        };
        MetricSummary { mean: Some(mean), sd: Some(sd), n_defined: n }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DatasetSummary {
    pub pct_mic: MetricSummary,
    pub rq_ratio: MetricSummary,
    pub pct_ct: MetricSummary,
    pub n: usize,
}

pub fn dataset_summary(scores: &[SummaryScores]) -> Result<DatasetSummary, AutoMiscError> {
    if scores.is_empty() {
        return Err(AutoMiscError::EmptyInput);
    }
    Ok(DatasetSummary {
        pct_mic: MetricSummary::of(scores.iter().map(|s| s.pct_mic)),
        rq_ratio: MetricSummary::of(scores.iter().map(|s| s.rq_ratio)),
        pct_ct: MetricSummary::of(scores.iter().map(|s| s.pct_ct)),
        n: scores.len(),
    })
}

/// Reads a list of strings in JSON or Python literal syntax, tolerating a
/// surrounding code fence or `Output:` prefix.
pub fn parse_string_list(reply: &str) -> Option<Vec<String>> {
    let start = reply.find('[')?;
    let end = reply.rfind(']')?;
    if end < start {
        return None;
    }
    let body = &reply[start..=end];
    if let Ok(v) = serde_json::from_str::<Vec<String>>(body) {
        return Some(v);
    }
    parse_python_list(body)
}

fn parse_python_list(s: &str) -> Option<Vec<String>> {
    let mut chars = s.chars().peekable();
    let mut out = Vec::new();
    let skip_ws = |it: &mut std::iter::Peekable<std::str::Chars>| {
        while it.peek().is_some_and(|c| c.is_whitespace()) {
            it.next();
        }
    };
    if chars.next()? != '[' {
        return None;
    }
    loop {
        skip_ws(&mut chars);
        match chars.next()? {
            ']' => break,
            q @ ('\'' | '"') => {
                let mut item = String::new();
                loop {
                    match chars.next()? {
                        '\\' => match chars.next()? {
                            'n' => item.push('\n'),
                            't' => item.push('\t'),
                            other => item.push(other),
                        },
                        c if c == q => break,
                        c => item.push(c),
                    }
                }
                out.push(item);
                skip_ws(&mut chars);
                match chars.next()? {
                    ',' => continue,
                    ']' => break,
                    _ => return None,
                }
            }
            _ => return None,
        }
    }
    Some(out)
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LabelledReply {
    pub explanation: String,
    pub label: String,
}

/// Extracts the last `label:` field and the `explanation:` text before it.
pub fn parse_labelled_reply(reply: &str) -> Option<LabelledReply> {
    let lines: Vec<&str> = reply.lines().collect();
    let (pos, label) = lines.iter().enumerate().rev().find_map(|(i, l)| field(l, "label").map(|v| (i, v)))?;
    let label = label
        .trim_matches(|c: char| c.is_whitespace() || matches!(c, '"' | '\'' | '`' | '*' | '.' | '<' | '>'))
        .to_string();
    if label.is_empty() {
        return None;
    }
    let explanation = lines[..pos]
        .iter()
        .rposition(|l| field(l, "explanation").is_some())
        .map(|start| {
            let first = field(lines[start], "explanation").unwrap_or_default();
            std::iter::once(first)
                .chain(lines[start + 1..pos].iter().map(|l| l.trim()))
                .collect::<Vec<_>>()
                .join(" ")
                .trim()
                .to_string()
        })
        .unwrap_or_default();
    Some(LabelledReply { explanation, label })
}

fn field<'a>(line: &'a str, name: &str) -> Option<&'a str> {
    let t = line.trim().trim_start_matches(['-', '*', '#', ' ']);
    let (key, value) = t.split_once(':')?;
    let key = key.trim().trim_matches('*');
    key.eq_ignore_ascii_case(name).then(|| value.trim())
}

fn excerpt(context: &[Volley], current: &Volley, upto: usize) -> String {
    let mut lines: Vec<String> =
        context.iter().map(|v| format!("{}: {}", v.speaker.label(), v.text.trim())).collect();
    let partial: Vec<&str> = current
        .utterances
        .iter()
        .take_while(|u| u.index <= upto)
        .map(|u| u.text.as_str())
        .collect();
    lines.push(format!("{}: {}", current.speaker.label(), partial.join(" ")));
    lines.join("\n")
}

/// The AutoMISC pipeline bound to a gateway and prompt catalog.
#[derive(Debug, Clone)]
pub struct AutoMisc {
    gateway: Gateway,
    catalog: PromptCatalog,
    context_volleys: usize,
    annotator_id: String,
}

impl AutoMisc {
    pub fn new(gateway: Gateway, catalog: PromptCatalog) -> Self {
        AutoMisc {
            gateway,
            catalog,
            context_volleys: DEFAULT_CONTEXT_VOLLEYS,
            annotator_id: DEFAULT_ANNOTATOR_ID.to_string(),
        }
    }

    pub fn with_context(mut self, volleys: usize) -> Self {
        self.context_volleys = volleys;
        self
    }

    pub fn with_annotator_id(mut self, id: impl Into<String>) -> Self {
        self.annotator_id = id.into();
        self
    }

    pub fn gateway(&self) -> &Gateway {
        &self.gateway
    }

    /// Segments one volley, numbering utterances from `first_index`.
    ///
    /// A reply whose segments do not reconstruct the volley is retried once.
    pub fn parse_volley(&self, v: &Volley, first_index: usize) -> Result<Vec<Utterance>, AutoMiscError> {
        if v.text.trim().is_empty() {
            return Err(AutoMiscError::EmptyVolley(v.index));
        }
        if v.system_event {
            return Ok(vec![Utterance { index: first_index, speaker: v.speaker, text: v.text.trim().to_string() }]);
        }
        let mut messages = vec![ChatMessage::user(format!("Input:  \"{}\"", v.text.trim()))];
        for attempt in 0..2 {
            let req = self.gateway.request(Agent::Parser, self.catalog.get(prompts::PARSER)?, messages.clone());
            let reply = self.gateway.complete(&req)?.text;
            let segments: Vec<String> = parse_string_list(&reply)
                .ok_or_else(|| AutoMiscError::UnparseableReply(reply.clone()))?
                .into_iter()
                .map(|s| s.trim().to_string())
                .filter(|s| !s.is_empty())
                .collect();
            if !segments.is_empty() && reconstructs(&v.text, segments.iter().map(String::as_str)) {
                return Ok(segments
                    .into_iter()
                    .enumerate()
                    .map(|(i, text)| Utterance { index: first_index + i, speaker: v.speaker, text })
                    .collect());
            }
            if attempt == 0 {
                tracing::debug!(volley = v.index, "segmentation mismatch, retrying");
                messages.push(ChatMessage::assistant(reply));
                messages.push(ChatMessage::user(RETRY_NOTE));
            }
        }
        Err(AutoMiscError::SegmentationMismatch { volley: v.index })
    }

    /// Segments every volley in order, assigning transcript-wide utterance indices.
    pub fn parse_transcript(&self, t: &mut Transcript) -> Result<(), AutoMiscError> {
        let mut next = 0;
        for i in 0..t.volleys.len() {
            let utterances = self.parse_volley(&t.volleys[i], next)?;
            next += utterances.len();
            t.volleys[i].utterances = utterances;
        }
        Ok(())
    }

    pub fn annotate_counsellor(
        &self,
        context: &[Volley],
        current: &Volley,
        u: &Utterance,
    ) -> Result<Annotation, AutoMiscError> {
        if u.speaker != Speaker::Counsellor {
            return Err(AutoMiscError::WrongSpeaker(u.index));
        }
        let system = format!(
            "{}\n\n{}",
            self.catalog.get(prompts::ANNOTATOR_COUNSELLOR)?.trim_end(),
            self.catalog.get(prompts::ANNOTATOR_FORMAT)?
        );
        let mut messages = vec![ChatMessage::user(excerpt(context, current, u.index))];
        let req = self.gateway.request(Agent::CounsellorAnnotator, system.as_str(), messages.clone());
        let reply = self.gateway.complete(&req)?.text;
        let first = parse_labelled_reply(&reply).ok_or_else(|| AutoMiscError::UnparseableLabel(reply.clone()))?;
        let code = match first.label.to_ascii_uppercase().as_str() {
            "MICO" => MiscCode::CounsellorGroup(Supercategory::Mico),
            "MIIN" => MiscCode::CounsellorGroup(Supercategory::Miin),
            "OTHER" => MiscCode::CounsellorGroup(Supercategory::Other),
            "R" => MiscCode::Counsellor(CounsellorCode::R),
            "Q" => MiscCode::Counsellor(CounsellorCode::Q),
            "RQ" => {
                messages.push(ChatMessage::assistant(reply));
                messages.push(ChatMessage::user(self.catalog.get(prompts::RQ_RESOLVE)?));
                let req = self.gateway.request(Agent::CounsellorAnnotator, system.as_str(), messages);
                let reply = self.gateway.complete(&req)?.text;
                let second =
                    parse_labelled_reply(&reply).ok_or_else(|| AutoMiscError::UnparseableLabel(reply.clone()))?;
                let code = match second.label.to_ascii_uppercase().as_str() {
                    "R" => CounsellorCode::R,
                    "Q" => CounsellorCode::Q,
                    _ => {
                        return Err(AutoMiscError::InvalidLabel { label: second.label, speaker: Speaker::Counsellor })
                    }
                };
                return Ok(self.annotation(u, MiscCode::Counsellor(code), join_explanations(&first, &second)));
            }
            _ => return Err(AutoMiscError::InvalidLabel { label: first.label, speaker: Speaker::Counsellor }),
        };
        Ok(self.annotation(u, code, first.explanation))
    }

    pub fn annotate_client(
        &self,
        context: &[Volley],
        current: &Volley,
        u: &Utterance,
    ) -> Result<Annotation, AutoMiscError> {
        if u.speaker != Speaker::Client || current.system_event {
            return Err(AutoMiscError::WrongSpeaker(u.index));
        }
        let system = format!(
            "{}\n\n{}",
            self.catalog.get(prompts::ANNOTATOR_CLIENT)?.trim_end(),
            self.catalog.get(prompts::ANNOTATOR_FORMAT)?
        );
        let req = self.gateway.request(
            Agent::ClientAnnotator,
            system,
            vec![ChatMessage::user(excerpt(context, current, u.index))],
        );
        let reply = self.gateway.complete(&req)?.text;
        let parsed = parse_labelled_reply(&reply).ok_or_else(|| AutoMiscError::UnparseableLabel(reply.clone()))?;
        let code: ClientCode = parsed
            .label
            .parse()
            .map_err(|_| AutoMiscError::InvalidLabel { label: parsed.label.clone(), speaker: Speaker::Client })?;
        Ok(self.annotation(u, MiscCode::Client(code), parsed.explanation))
    }

    fn annotation(&self, u: &Utterance, code: MiscCode, explanation: String) -> Annotation {
        Annotation { utterance_index: u.index, code, explanation, annotator_id: self.annotator_id.clone() }
    }

    /// Segments (if needed) and annotates every spoken utterance in order.
    pub fn annotate_transcript(&self, mut t: Transcript) -> Result<AnnotatedTranscript, AutoMiscError> {
        if !t.volleys.iter().all(Volley::is_parsed) {
            self.parse_transcript(&mut t)?;
        }
        let mut annotations = Vec::new();
        for (i, v) in t.volleys.iter().enumerate() {
            if v.system_event {
                continue;
            }
            let context = &t.volleys[i.saturating_sub(self.context_volleys)..i];
            for u in &v.utterances {
                annotations.push(match v.speaker {
                    Speaker::Counsellor => self.annotate_counsellor(context, v, u)?,
                    Speaker::Client => self.annotate_client(context, v, u)?,
                });
            }
        }
        Ok(AnnotatedTranscript { transcript: t, annotations, annotator_id: self.annotator_id.clone() })
    }

    /// Annotates transcripts concurrently.
    pub fn annotate_batch(&self, ts: Vec<Transcript>) -> Vec<Result<AnnotatedTranscript, AutoMiscError>> {
        ts.into_par_iter().map(|t| self.annotate_transcript(t)).collect()
    }
}

fn join_explanations(first: &LabelledReply, second: &LabelledReply) -> String {
    match (first.explanation.is_empty(), second.explanation.is_empty()) {
        (false, false) => format!("{} {}", first.explanation, second.explanation),
        (true, _) => second.explanation.clone(),
        (false, true) => first.explanation.clone(),
    }
}

/// Rule-of-thumb replies for the parser and annotator agents, so the pipeline
/// runs end to end without a model. Not a substitute for real annotation.
pub fn heuristic_reply(req: &ChatRequest) -> Option<String> {
    let first = &req.messages.first()?.text;
    match req.agent.as_str() {
        "parser" => {
            let text = first.trim().strip_prefix("Input:")?.trim();
            let text = text.strip_prefix('"').and_then(|t| t.strip_suffix('"')).unwrap_or(text);
            serde_json::to_string(&split_sentences(text)).ok()
        }
        "annotator-counsellor" => {
            let last = last_line(first);
            let asks = last.trim_end().ends_with('?');
            if req.messages.len() > 1 {
                let label = if asks { "Q" } else { "R" };
                return Some(format!("explanation: resolved by punctuation.\nlabel: {label}"));
            }
            let lower = last.to_lowercase();
            let label = if asks || lower.starts_with("it sounds") || lower.starts_with("you ") {
                "RQ"
            } else if lower.contains("you should") || lower.contains("you must") {
                "MIIN"
            } else if lower.contains("thank") || lower.contains("great") || lower.contains("appreciate") {
                "MICO"
            } else {
                "Other"
            };
            Some(format!("explanation: keyword heuristic.\nlabel: {label}"))
        }
        "annotator-client" => {
            let lower = last_line(first).to_lowercase();
            let label = if ["want to quit", "want to stop", "cut down", "i could try", "ready"]
                .iter()
                .any(|k| lower.contains(k))
            {
                "C"
            } else if ["relax", "can't", "cannot", "not ready", "enjoy", "don't want to quit"]
                .iter()
                .any(|k| lower.contains(k))
            {
                "S"
            } else {
                "N"
            };
            Some(format!("explanation: keyword heuristic.\nlabel: {label}"))
        }
        _ => None,
    }
}

/// Final sentence of the excerpt, i.e. roughly the utterance being coded.
fn last_line(text: &str) -> String {
    let line = text.lines().last().unwrap_or_default();
    let line = line.split_once(": ").map_or(line, |(_, rest)| rest);
    split_sentences(line).pop().unwrap_or_default()
}

/// Splits after `.`, `?` or `!` followed by whitespace.
pub fn split_sentences(text: &str) -> Vec<String> {
    let mut out = Vec::new();
    let mut current = String::new();
    let mut chars = text.chars().peekable();
    while let Some(c) = chars.next() {
        current.push(c);
        if matches!(c, '.' | '?' | '!') && chars.peek().is_some_and(|n| n.is_whitespace()) {
            out.push(current.trim().to_string());
            current.clear();
        }
    }
    if !current.trim().is_empty() {
        out.push(current.trim().to_string());
    }
    out.retain(|s| !s.is_empty());
    out
}

/// All utterance indices that need an annotation.
pub fn annotatable_indices(t: &Transcript) -> HashSet<usize> {
    t.volleys
        .iter()
        .filter(|v| !v.system_event)
        .flat_map(|v| v.utterances.iter().map(|u| u.index))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::domain::TranscriptSource;
    use crate::gateway::MockBackend;
    use proptest::prelude::*;

    fn pipeline(mock: MockBackend) -> AutoMisc {
        AutoMisc::new(Gateway::mock(mock), PromptCatalog::builtin())
    }

    fn utter(index: usize, speaker: Speaker, text: &str) -> Utterance {
        Utterance { index, speaker, text: text.into() }
    }

    fn volley(index: usize, speaker: Speaker, first: usize, parts: &[&str]) -> Volley {
        let mut v = Volley::new(index, speaker, parts.join(" "));
        v.utterances = parts.iter().enumerate().map(|(i, p)| utter(first + i, speaker, p)).collect();
        v
    }

    #[test]
    fn list_literals() {
        assert_eq!(parse_string_list(r#"["a", "b"]"#).unwrap(), ["a", "b"]);
        assert_eq!(
            parse_string_list("```python\n['I can\\'t quit.', \"Don't\"]\n```").unwrap(),
            ["I can't quit.", "Don't"]
        );
        assert_eq!(parse_string_list("Output: ['x',]").unwrap(), ["x"]);
        assert!(parse_string_list("no list here").is_none());
        assert!(parse_string_list("[1, 2]").is_none());
    }

    #[test]
    fn labelled_replies() {
        let r = parse_labelled_reply("explanation: asks about\nfeelings.\nlabel: RQ").unwrap();
        assert_eq!(r, LabelledReply { explanation: "asks about feelings.".into(), label: "RQ".into() });
        let r = parse_labelled_reply("- **Explanation:** x\n- **Label:** \"C\"").unwrap();
        assert_eq!(r.label, "C");
        assert!(parse_labelled_reply("C").is_none());
    }

    #[test]
    fn parse_volley_retries_once_then_fails() {
        let v = Volley::new(0, Speaker::Counsellor, "How long since your last drink? Do you feel ok?");
        let mock = MockBackend::new().script(
            Agent::Parser,
            [r#"["How long since your last drink?"]"#, r#"["How long since your last drink?", "Do you feel ok?"]"#],
        );
        let us = pipeline(mock.clone()).parse_volley(&v, 3).unwrap();
        assert_eq!(us.iter().map(|u| u.index).collect::<Vec<_>>(), [3, 4]);
        assert_eq!(mock.requests_for(Agent::Parser)[1].messages.len(), 3);

        let mock = MockBackend::new().script(Agent::Parser, [r#"["nope"]"#, r#"["still wrong"]"#]);
        assert_eq!(
            pipeline(mock).parse_volley(&v, 0),
            Err(AutoMiscError::SegmentationMismatch { volley: 0 })
        );
    }

    #[test]
    fn system_events_are_not_sent_to_the_parser() {
        let v = Volley::event(3, Speaker::Client, "Selected: Yes");
        let us = pipeline(MockBackend::new()).parse_volley(&v, 9).unwrap();
        assert_eq!(us, [utter(9, Speaker::Client, "Selected: Yes")]);
    }

    #[test]
    fn counsellor_two_pass() {
        let v = volley(0, Speaker::Counsellor, 0, &["How are you?"]);
        let mock = MockBackend::new().script(
            Agent::CounsellorAnnotator,
            ["explanation: a question\nlabel: RQ", "explanation: open question\nlabel: Q", "explanation: x\nlabel: MIIN", "label: GOOD"],
        );
        let p = pipeline(mock.clone());
        let a = p.annotate_counsellor(&[], &v, &v.utterances[0]).unwrap();
        assert_eq!(a.code, MiscCode::Counsellor(CounsellorCode::Q));
        assert_eq!(a.explanation, "a question open question");
        let second = &mock.requests_for(Agent::CounsellorAnnotator)[1];
        assert_eq!(second.messages.len(), 3);
        assert_eq!(
            p.annotate_counsellor(&[], &v, &v.utterances[0]).unwrap().code,
            MiscCode::CounsellorGroup(Supercategory::Miin)
        );
        assert!(matches!(
            p.annotate_counsellor(&[], &v, &v.utterances[0]),
            Err(AutoMiscError::InvalidLabel { .. })
        ));
    }

    #[test]
    fn client_labels() {
        let v = volley(1, Speaker::Client, 0, &["Smoking helps me relax"]);
        let mock = MockBackend::new().script(Agent::ClientAnnotator, ["explanation: status quo\nlabel: S", "label: X", "nothing"]);
        let p = pipeline(mock);
        assert_eq!(p.annotate_client(&[], &v, &v.utterances[0]).unwrap().code, MiscCode::Client(ClientCode::S));
        assert!(matches!(p.annotate_client(&[], &v, &v.utterances[0]), Err(AutoMiscError::InvalidLabel { .. })));
        assert!(matches!(p.annotate_client(&[], &v, &v.utterances[0]), Err(AutoMiscError::UnparseableLabel(_))));
    }

    #[test]
    fn excerpt_is_cumulative_and_windowed() {
        let mut t = Transcript::new("p", TranscriptSource::Live);
        let mut next = 0;
        for i in 0..8 {
            let sp = if i % 2 == 0 { Speaker::Counsellor } else { Speaker::Client };
            let v = volley(i, sp, next, &[&format!("v{i} a."), &format!("v{i} b.")]);
            next += 2;
            t.volleys.push(v);
        }
        let mock = MockBackend::new().with_responder(|req| {
            Some(if req.agent == "annotator-client" { "label: N".into() } else { "label: Other".into() })
        });
        let at = pipeline(mock.clone()).annotate_transcript(t).unwrap();
        assert_eq!(at.annotations.len(), 16);
        let reqs = mock.requests();
        let last = &reqs.last().unwrap().messages[0].text;
        assert_eq!(last.lines().count(), 6);
        assert!(last.starts_with("Counsellor: v2 a. v2 b."));
        assert!(last.ends_with("Client: v7 a. v7 b."));
        let first_of_last_volley = &reqs[reqs.len() - 2].messages[0].text;
        assert!(first_of_last_volley.ends_with("Client: v7 a."));
    }

    #[test]
    fn metric_examples() {
        let s = SummaryScores::from_counts(CodeCounts { mico: 4, r: 6, q: 4, miin: 1, other: 5, c: 6, s: 4, n: 10 });
        assert!((s.pct_mic.unwrap() - 93.333_333).abs() < 1e-4);
        assert_eq!(s.rq_ratio, Some(1.5));
        assert_eq!(s.pct_ct, Some(60.0));
        let s = SummaryScores::from_counts(CodeCounts { r: 3, ..Default::default() });
        assert_eq!(s.rq_ratio, None);
        assert_eq!(s.pct_ct, None);
        assert_eq!(s.pct_mic, Some(100.0));
    }

    #[test]
    fn dataset_summary_conventions() {
        let one = SummaryScores::from_counts(CodeCounts { r: 1, q: 1, c: 1, s: 1, ..Default::default() });
        let d = dataset_summary(&[one]).unwrap();
        assert_eq!(d.rq_ratio, MetricSummary { mean: Some(1.0), sd: Some(0.0), n_defined: 1 });
        let undefined = SummaryScores::from_counts(CodeCounts::default());
        let d = dataset_summary(&[one, undefined]).unwrap();
        assert_eq!(d.pct_ct.n_defined, 1);
        assert_eq!(d.n, 2);
        assert_eq!(dataset_summary(&[]), Err(AutoMiscError::EmptyInput));
        let m = MetricSummary::of([Some(2.0), Some(4.0), Some(4.0), Some(4.0), Some(5.0), Some(5.0), Some(7.0), Some(9.0)]);
        assert!((m.sd.unwrap() - 2.138_089_935).abs() < 1e-9);
    }

    #[test]
    fn summary_requires_complete_annotations() {
        let mut t = Transcript::new("p", TranscriptSource::Live);
        t.volleys.push(volley(0, Speaker::Counsellor, 0, &["Hi."]));
        t.volleys.push(volley(1, Speaker::Client, 1, &["Hello."]));
        let ann = |i, code| Annotation { utterance_index: i, code, explanation: String::new(), annotator_id: "x".into() };
        let mut at = AnnotatedTranscript {
            transcript: t,
            annotations: vec![ann(0, MiscCode::CounsellorGroup(Supercategory::Other))],
            annotator_id: "x".into(),
        };
        assert!(matches!(summary_metrics(&at), Err(AutoMiscError::IncompleteAnnotations(_))));
        at.annotations.push(ann(1, MiscCode::CounsellorGroup(Supercategory::Mico)));
        assert!(matches!(summary_metrics(&at), Err(AutoMiscError::IncompleteAnnotations(_))));
        at.annotations[1].code = MiscCode::Client(ClientCode::C);
        assert_eq!(summary_metrics(&at).unwrap().pct_ct, Some(100.0));
    }

    #[test]
    fn heuristic_pipeline_runs_end_to_end() {
        let mut t = Transcript::new("p", TranscriptSource::Live);
        t.push(Speaker::Counsellor, "Hi there. How are you today?");
        t.push(Speaker::Client, "I want to quit. Smoking helps me relax though.");
        t.push_event(Speaker::Client, "Selected: Yes");
        let p = pipeline(MockBackend::new().with_responder(heuristic_reply));
        let at = p.annotate_transcript(t).unwrap();
        assert_eq!(at.annotations.len(), 4);
        let s = summary_metrics(&at).unwrap();
        assert_eq!((s.counts.c, s.counts.s, s.counts.q), (1, 1, 1));
    }

    fn code_strategy() -> impl Strategy<Value = MiscCode> {
        prop_oneof![
            Just(MiscCode::CounsellorGroup(Supercategory::Mico)),
            Just(MiscCode::CounsellorGroup(Supercategory::Miin)),
            Just(MiscCode::CounsellorGroup(Supercategory::Other)),
            Just(MiscCode::Counsellor(CounsellorCode::R)),
            Just(MiscCode::Counsellor(CounsellorCode::Q)),
            Just(MiscCode::Client(ClientCode::C)),
            Just(MiscCode::Client(ClientCode::S)),
            Just(MiscCode::Client(ClientCode::N)),
        ]
    }

    proptest! {
        #[test]
        fn metrics_bounded_and_order_invariant(codes in prop::collection::vec(code_strategy(), 0..60), seed in any::<u64>()) {
            let mut counts = CodeCounts::default();
            codes.iter().for_each(|c| counts.add(*c));
            let mut shuffled = codes.clone();
            let n = shuffled.len();
            if n > 1 {
                let mut x = seed;
                for i in (1..n).rev() {
                    x = x.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
                    shuffled.swap(i, (x >> 33) as usize % (i + 1));
                }
            }
            let mut counts2 = CodeCounts::default();
            shuffled.iter().for_each(|c| counts2.add(*c));
            let s = SummaryScores::from_counts(counts);
            prop_assert_eq!(s, SummaryScores::from_counts(counts2));
            prop_assert_eq!((counts.counsellor_total() + counts.client_total()) as usize, codes.len());
            if let Some(p) = s.pct_mic { prop_assert!((0.0..=100.0).contains(&p)); }
            if let Some(p) = s.pct_ct { prop_assert!((0.0..=100.0).contains(&p)); }
            if let Some(r) = s.rq_ratio { prop_assert!(r >= 0.0); }
        }

        #[test]
        fn sentence_split_reconstructs(text in "[a-zA-Z ,.?!']{0,80}") {
            let parts = split_sentences(&text);
            prop_assert!(reconstructs(&text, parts.iter().map(String::as_str)));
        }
    }
}
