//! Shared domain model: transcripts, MISC behaviour codes and study instruments.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Speaker {
    Counsellor,
    Client,
}

impl Speaker {
    pub fn as_str(self) -> &'static str {
        match self {
            Speaker::Counsellor => "counsellor",
            Speaker::Client => "client",
        }
    }

    pub fn label(self) -> &'static str {
        match self {
            Speaker::Counsellor => "Counsellor",
            Speaker::Client => "Client",
        }
    }

    pub fn other(self) -> Speaker {
        match self {
            Speaker::Counsellor => Speaker::Client,
            Speaker::Client => Speaker::Counsellor,
        }
    }
}

impl fmt::Display for Speaker {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Speaker {
    type Err = DomainError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.trim().to_ascii_lowercase().as_str() {
            "counsellor" | "counselor" => Ok(Speaker::Counsellor),
            "client" => Ok(Speaker::Client),
            other => Err(DomainError::UnknownSpeaker(other.to_string())),
        }
    }
}

/// A single unit of thought inside a volley.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Utterance {
    /// Ordinal within the whole transcript, starting at 0.
    pub index: usize,
    pub speaker: Speaker,
    pub text: String,
}

/// An uninterrupted turn by one speaker.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Volley {
    pub index: usize,
    pub speaker: Speaker,
    pub text: String,
    /// Empty until the volley has been segmented.
    #[serde(default)]
    pub utterances: Vec<Utterance>,
    /// UI artifacts such as "Selected: Yes"; never annotated.
    #[serde(default)]
    pub system_event: bool,
}

impl Volley {
    pub fn new(index: usize, speaker: Speaker, text: impl Into<String>) -> Self {
        Volley {
            index,
            speaker,
            text: text.into(),
            utterances: Vec::new(),
            system_event: false,
        }
    }

    pub fn event(index: usize, speaker: Speaker, text: impl Into<String>) -> Self {
        Volley {
            system_event: true,
            ..Volley::new(index, speaker, text)
        }
    }

    pub fn is_parsed(&self) -> bool {
        !self.utterances.is_empty()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum TranscriptSource {
    Live,
    SelfPlay,
    Imported,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Transcript {
    pub participant_id: String,
    pub source: TranscriptSource,
    pub volleys: Vec<Volley>,
    /// Set by the self-play harness when the volley cap was hit before the session closed.
    #[serde(default)]
    pub truncated: bool,
    /// Corpus split for imported material, e.g. `HI` / `LO`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub cohort: Option<String>,
}

impl Transcript {
    pub fn new(participant_id: impl Into<String>, source: TranscriptSource) -> Self {
        Transcript {
            participant_id: participant_id.into(),
            source,
            volleys: Vec::new(),
            truncated: false,
            cohort: None,
        }
    }

    /// Appends a volley with the next contiguous index and returns that index.
    pub fn push(&mut self, speaker: Speaker, text: impl Into<String>) -> usize {
        let index = self.volleys.len();
        self.volleys.push(Volley::new(index, speaker, text));
        index
    }

    pub fn push_event(&mut self, speaker: Speaker, text: impl Into<String>) -> usize {
        let index = self.volleys.len();
        self.volleys.push(Volley::event(index, speaker, text));
        index
    }

    pub fn last_speaker(&self) -> Option<Speaker> {
        self.volleys.last().map(|v| v.speaker)
    }

    pub fn utterances(&self) -> impl Iterator<Item = &Utterance> {
        self.volleys.iter().flat_map(|v| v.utterances.iter())
    }

    pub fn count_speaker(&self, speaker: Speaker) -> usize {
        self.volleys.iter().filter(|v| v.speaker == speaker).count()
    }
}

/// Collapses whitespace runs to single spaces and trims.
pub fn normalize_whitespace(text: &str) -> String {
    text.split_whitespace().collect::<Vec<_>>().join(" ")
}

/// MISC counsellor supercategory.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Supercategory {
    #[serde(rename = "MICO")]
    Mico,
    #[serde(rename = "MIIN")]
    Miin,
    #[serde(rename = "RQ")]
    Rq,
    Other,
}

impl Supercategory {
    pub const ALL: [Supercategory; 4] = [
        Supercategory::Mico,
        Supercategory::Miin,
        Supercategory::Rq,
        Supercategory::Other,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Supercategory::Mico => "MICO",
            Supercategory::Miin => "MIIN",
            Supercategory::Rq => "RQ",
            Supercategory::Other => "Other",
        }
    }
}

impl fmt::Display for Supercategory {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Supercategory {
    type Err = DomainError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Supercategory::ALL
            .into_iter()
            .find(|c| c.as_str().eq_ignore_ascii_case(s.trim()))
            .ok_or_else(|| DomainError::UnknownCode(s.to_string()))
    }
}

/// The sixteen MISC counsellor behaviour codes.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum CounsellorCode {
    AF,
    ADP,
    EC,
    RCP,
    SU,
    ADWP,
    CON,
    DIR,
    RCWP,
    WA,
    R,
    Q,
    FA,
    FI,
    GI,
    ST,
}

impl CounsellorCode {
    pub const ALL: [CounsellorCode; 16] = [
        CounsellorCode::AF,
        CounsellorCode::ADP,
        CounsellorCode::EC,
        CounsellorCode::RCP,
        CounsellorCode::SU,
        CounsellorCode::ADWP,
        CounsellorCode::CON,
        CounsellorCode::DIR,
        CounsellorCode::RCWP,
        CounsellorCode::WA,
        CounsellorCode::R,
        CounsellorCode::Q,
        CounsellorCode::FA,
        CounsellorCode::FI,
        CounsellorCode::GI,
        CounsellorCode::ST,
    ];

    pub fn as_str(self) -> &'static str {
        use CounsellorCode::*;
        match self {
            AF => "AF",
            ADP => "ADP",
            EC => "EC",
            RCP => "RCP",
            SU => "SU",
            ADWP => "ADWP",
            CON => "CON",
            DIR => "DIR",
            RCWP => "RCWP",
            WA => "WA",
            R => "R",
            Q => "Q",
            FA => "FA",
            FI => "FI",
            GI => "GI",
            ST => "ST",
        }
    }

    pub fn supercategory(self) -> Supercategory {
        supercategory(self)
    }
}

/// Fixed code → supercategory mapping.
pub fn supercategory(code: CounsellorCode) -> Supercategory {
    use CounsellorCode::*;
    match code {
        AF | ADP | EC | RCP | SU => Supercategory::Mico,
        ADWP | CON | DIR | RCWP | WA => Supercategory::Miin,
        R | Q => Supercategory::Rq,
        FA | FI | GI | ST => Supercategory::Other,
    }
}

impl fmt::Display for CounsellorCode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for CounsellorCode {
    type Err = DomainError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        CounsellorCode::ALL
            .into_iter()
            .find(|c| c.as_str().eq_ignore_ascii_case(s.trim()))
            .ok_or_else(|| DomainError::UnknownCode(s.to_string()))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum ClientCode {
    /// Change talk.
    C,
    /// Sustain talk.
    S,
    /// Neutral.
    N,
}

impl ClientCode {
    pub const ALL: [ClientCode; 3] = [ClientCode::C, ClientCode::S, ClientCode::N];

    pub fn as_str(self) -> &'static str {
        match self {
            ClientCode::C => "C",
            ClientCode::S => "S",
            ClientCode::N => "N",
        }
    }
}

impl FromStr for ClientCode {
    type Err = DomainError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        ClientCode::ALL
            .into_iter()
            .find(|c| c.as_str().eq_ignore_ascii_case(s.trim()))
            .ok_or_else(|| DomainError::UnknownCode(s.to_string()))
    }
}

/// Five-way label used by the summary metrics: MICO, MIIN, R, Q, Other.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum CounsellorLabel {
    #[serde(rename = "MICO")]
    Mico,
    #[serde(rename = "MIIN")]
    Miin,
    R,
    Q,
    Other,
}

impl CounsellorLabel {
    pub const ALL: [CounsellorLabel; 5] = [
        CounsellorLabel::Mico,
        CounsellorLabel::Miin,
        CounsellorLabel::R,
        CounsellorLabel::Q,
        CounsellorLabel::Other,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            CounsellorLabel::Mico => "MICO",
            CounsellorLabel::Miin => "MIIN",
            CounsellorLabel::R => "R",
            CounsellorLabel::Q => "Q",
            CounsellorLabel::Other => "Other",
        }
    }
}

/// A behaviour code attached to one utterance.
///
/// Automated annotation only resolves MI-consistent, MI-inconsistent and Other
/// utterances to their supercategory, while human coders may use the full
/// sixteen-code set. Both granularities live here.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum MiscCode {
    Counsellor(CounsellorCode),
    /// Supercategory-level counsellor label. Never `Rq`: reflections and
    /// questions are always resolved to `R` or `Q`.
    CounsellorGroup(Supercategory),
    Client(ClientCode),
}

impl MiscCode {
    pub fn speaker(self) -> Speaker {
        match self {
            MiscCode::Client(_) => Speaker::Client,
            _ => Speaker::Counsellor,
        }
    }

    /// Five-way counsellor label, `None` for client codes.
    pub fn counsellor_label(self) -> Option<CounsellorLabel> {
        match self {
            MiscCode::Counsellor(CounsellorCode::R) => Some(CounsellorLabel::R),
            MiscCode::Counsellor(CounsellorCode::Q) => Some(CounsellorLabel::Q),
            MiscCode::Counsellor(code) => group_label(code.supercategory()),
            MiscCode::CounsellorGroup(group) => group_label(group),
            MiscCode::Client(_) => None,
        }
    }

    pub fn client_code(self) -> Option<ClientCode> {
        match self {
            MiscCode::Client(c) => Some(c),
            _ => None,
        }
    }

    /// Label string as written in the `AutoMISCLabel` column.
    pub fn as_str(self) -> &'static str {
        match self {
            MiscCode::Counsellor(c) => c.as_str(),
            MiscCode::CounsellorGroup(g) => g.as_str(),
            MiscCode::Client(c) => c.as_str(),
        }
    }

    /// Parses a label for an utterance spoken by `speaker`. Accepts the
    /// sixteen fine codes and the MICO / MIIN / Other groups for counsellors.
    pub fn parse_for(speaker: Speaker, label: &str) -> Result<MiscCode, DomainError> {
        let label = label.trim();
        match speaker {
            Speaker::Client => label.parse().map(MiscCode::Client),
            Speaker::Counsellor => {
                if let Ok(code) = label.parse::<CounsellorCode>() {
                    return Ok(MiscCode::Counsellor(code));
                }
                match label.parse::<Supercategory>() {
                    Ok(Supercategory::Rq) | Err(_) => {
                        Err(DomainError::UnknownCode(label.to_string()))
                    }
                    Ok(group) => Ok(MiscCode::CounsellorGroup(group)),
                }
            }
        }
    }
}

fn group_label(group: Supercategory) -> Option<CounsellorLabel> {
    match group {
        Supercategory::Mico => Some(CounsellorLabel::Mico),
        Supercategory::Miin => Some(CounsellorLabel::Miin),
        Supercategory::Other => Some(CounsellorLabel::Other),
        Supercategory::Rq => None,
    }
}

impl fmt::Display for MiscCode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl Serialize for MiscCode {
    fn serialize<S: serde::Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        s.serialize_str(self.as_str())
    }
}

impl<'de> Deserialize<'de> for MiscCode {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        let raw = String::deserialize(d)?;
        // "C" and "S" only exist for clients; counsellor codes never collide with them.
        if let Ok(c) = raw.parse::<ClientCode>() {
            return Ok(MiscCode::Client(c));
        }
        MiscCode::parse_for(Speaker::Counsellor, &raw).map_err(serde::de::Error::custom)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Annotation {
    pub utterance_index: usize,
    pub code: MiscCode,
    pub explanation: String,
    pub annotator_id: String,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum StudyPhase {
    Pre,
    Post,
    WeekLater,
}

/// Importance, confidence and readiness self-ratings, each 0–10.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct RulerTriple {
    pub importance: u8,
    pub confidence: u8,
    pub readiness: u8,
    pub phase: StudyPhase,
}

impl RulerTriple {
    pub fn new(
        importance: i64,
        confidence: i64,
        readiness: i64,
        phase: StudyPhase,
    ) -> Result<Self, DomainError> {
        let check = |name: &'static str, v: i64| -> Result<u8, DomainError> {
            if (0..=10).contains(&v) {
                Ok(v as u8)
            } else {
                Err(DomainError::OutOfRange { field: name, value: v, min: 0, max: 10 })
            }
        };
        Ok(RulerTriple {
            importance: check("importance", importance)?,
            confidence: check("confidence", confidence)?,
            readiness: check("readiness", readiness)?,
            phase,
        })
    }

    pub fn get(&self, ruler: Ruler) -> u8 {
        match ruler {
            Ruler::Importance => self.importance,
            Ruler::Confidence => self.confidence,
            Ruler::Readiness => self.readiness,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Ruler {
    Importance,
    Confidence,
    Readiness,
}

impl Ruler {
    pub const ALL: [Ruler; 3] = [Ruler::Importance, Ruler::Confidence, Ruler::Readiness];

    pub fn as_str(self) -> &'static str {
        match self {
            Ruler::Importance => "importance",
            Ruler::Confidence => "confidence",
            Ruler::Readiness => "readiness",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum CareRating {
    Poor,
    Fair,
    Good,
    VeryGood,
    Excellent,
    DoesNotApply,
}

impl CareRating {
    /// Item score 1–5, `None` for "Does Not Apply".
    pub fn score(self) -> Option<u32> {
        match self {
            CareRating::Poor => Some(1),
            CareRating::Fair => Some(2),
            CareRating::Good => Some(3),
            CareRating::VeryGood => Some(4),
            CareRating::Excellent => Some(5),
            CareRating::DoesNotApply => None,
        }
    }

    /// Rating for a numeric item score 1–5.
    pub fn from_score(score: i64) -> Result<Self, DomainError> {
        Ok(match score {
            1 => CareRating::Poor,
            2 => CareRating::Fair,
            3 => CareRating::Good,
            4 => CareRating::VeryGood,
            5 => CareRating::Excellent,
            _ => {
                return Err(DomainError::OutOfRange { field: "care item", value: score, min: 1, max: 5 })
            }
        })
    }

    pub fn label(self) -> &'static str {
        match self {
            CareRating::Poor => "Poor",
            CareRating::Fair => "Fair",
            CareRating::Good => "Good",
            CareRating::VeryGood => "Very Good",
            CareRating::Excellent => "Excellent",
            CareRating::DoesNotApply => "Does Not Apply",
        }
    }
}

impl FromStr for CareRating {
    type Err = DomainError;

    /// Accepts the option labels (any case or spacing) or a numeric 1–5 score;
    /// 0, "NA" and an empty cell read as "Does Not Apply".
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let key: String = s
            .chars()
            .filter(|c| c.is_ascii_alphanumeric())
            .collect::<String>()
            .to_ascii_lowercase();
        Ok(match key.as_str() {
            "poor" | "1" => CareRating::Poor,
            "fair" | "2" => CareRating::Fair,
            "good" | "3" => CareRating::Good,
            "verygood" | "4" => CareRating::VeryGood,
            "excellent" | "5" => CareRating::Excellent,
            "doesnotapply" | "na" | "0" | "" => CareRating::DoesNotApply,
            _ => return Err(DomainError::UnknownCareRating(s.to_string())),
        })
    }
}

pub const CARE_ITEMS: usize = 10;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "Vec<CareRating>", into = "Vec<CareRating>")]
pub struct CareResponse {
    items: [CareRating; CARE_ITEMS],
}

impl CareResponse {
    pub fn new(items: Vec<CareRating>) -> Result<Self, DomainError> {
        let len = items.len();
        let items: [CareRating; CARE_ITEMS] = items
            .try_into()
            .map_err(|_| DomainError::CareItemCount(len))?;
        Ok(CareResponse { items })
    }

    pub fn uniform(rating: CareRating) -> Self {
        CareResponse { items: [rating; CARE_ITEMS] }
    }

    pub fn items(&self) -> &[CareRating; CARE_ITEMS] {
        &self.items
    }
}

impl TryFrom<Vec<CareRating>> for CareResponse {
    type Error = DomainError;

    fn try_from(items: Vec<CareRating>) -> Result<Self, Self::Error> {
        CareResponse::new(items)
    }
}

impl From<CareResponse> for Vec<CareRating> {
    fn from(c: CareResponse) -> Self {
        c.items.to_vec()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct SmokingProfile {
    pub cigarettes_per_day: u32,
    /// Minutes from waking to the first cigarette.
    pub time_to_first_cigarette: u32,
}

impl SmokingProfile {
    /// Study enrolment required at least five cigarettes a day.
    pub fn meets_enrolment_minimum(&self) -> bool {
        self.cigarettes_per_day >= 5
    }
}

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum DomainError {
    #[error("{field} = {value} is outside [{min}, {max}]")]
    OutOfRange {
        field: &'static str,
        value: i64,
        min: i64,
        max: i64,
    },
    #[error("CARE response needs exactly 10 items, got {0}")]
    CareItemCount(usize),
    #[error("unknown CARE rating {0:?}")]
    UnknownCareRating(String),
    #[error("unknown behaviour code {0:?}")]
    UnknownCode(String),
    #[error("unknown speaker {0:?}")]
    UnknownSpeaker(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Severity {
    Error,
    Warning,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum ViolationKind {
    EmptyText,
    NonAlternating,
    FirstSpeakerNotCounsellor,
    NonContiguousIndex,
    UtteranceOrder,
    UtteranceSpeaker,
    Reconstruction,
}

impl ViolationKind {
    pub fn reason(self) -> &'static str {
        match self {
            ViolationKind::EmptyText => "empty text",
            ViolationKind::NonAlternating => "non-alternating",
            ViolationKind::FirstSpeakerNotCounsellor => "first volley is not the counsellor",
            ViolationKind::NonContiguousIndex => "volley index not contiguous",
            ViolationKind::UtteranceOrder => "utterance indices not strictly increasing",
            ViolationKind::UtteranceSpeaker => "utterance speaker differs from volley speaker",
            ViolationKind::Reconstruction => "utterances do not reconstruct the volley",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Violation {
    pub volley_index: usize,
    pub kind: ViolationKind,
    pub severity: Severity,
}

impl Violation {
    pub fn reason(&self) -> &'static str {
        self.kind.reason()
    }
}

impl fmt::Display for Violation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "volley {}: {}", self.volley_index, self.reason())
    }
}

/// Checks every transcript, volley and utterance invariant.
///
/// Alternation and opening-speaker problems are errors for live and self-play
/// transcripts but only warnings for imported corpora.
pub fn validate_transcript(t: &Transcript) -> Vec<Violation> {
    let structural = if t.source == TranscriptSource::Imported {
        Severity::Warning
    } else {
        Severity::Error
    };
    let mut out = Vec::new();
    let mut push = |volley_index, kind, severity| {
        out.push(Violation { volley_index, kind, severity })
    };

    if let Some(first) = t.volleys.first() {
        if first.speaker != Speaker::Counsellor {
            push(0, ViolationKind::FirstSpeakerNotCounsellor, structural);
        }
    }

    let mut last_utterance: Option<usize> = None;
    for (pos, v) in t.volleys.iter().enumerate() {
        if v.index != pos {
            push(pos, ViolationKind::NonContiguousIndex, Severity::Error);
        }
        if v.text.trim().is_empty() {
            push(pos, ViolationKind::EmptyText, Severity::Error);
        }
        if pos > 0 && t.volleys[pos - 1].speaker == v.speaker {
            push(pos, ViolationKind::NonAlternating, structural);
        }
        for u in &v.utterances {
            if last_utterance.is_some_and(|prev| u.index <= prev) {
                push(pos, ViolationKind::UtteranceOrder, Severity::Error);
            }
            last_utterance = Some(u.index);
            if u.speaker != v.speaker {
                push(pos, ViolationKind::UtteranceSpeaker, Severity::Error);
            }
            if u.text.trim().is_empty() {
                push(pos, ViolationKind::EmptyText, Severity::Error);
            }
        }
        if v.is_parsed() && !reconstructs(&v.text, v.utterances.iter().map(|u| u.text.as_str())) {
            push(pos, ViolationKind::Reconstruction, Severity::Error);
        }
    }
    out
}

/// True when no violation is an error.
pub fn is_valid(t: &Transcript) -> bool {
    validate_transcript(t).iter().all(|v| v.severity != Severity::Error)
}

/// Whether the segments, joined, equal the volley text modulo whitespace.
pub fn reconstructs<'a>(volley_text: &str, segments: impl IntoIterator<Item = &'a str>) -> bool {
    let joined = segments.into_iter().collect::<Vec<_>>().join(" ");
    normalize_whitespace(&joined) == normalize_whitespace(volley_text)
}
