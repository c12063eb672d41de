//! Survey scoring, study records, dataset export/import and reports.

use std::collections::{BTreeMap, HashMap};
use std::fs::{self, File, OpenOptions};
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::sync::{Mutex, RwLock};

use regex::Regex;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::automisc::{dataset_summary, AnnotatedTranscript, DatasetSummary, MetricSummary, SummaryScores};
use crate::domain::{
    is_valid, normalize_whitespace, reconstructs, Annotation, CareRating, CareResponse, DomainError, MiscCode, Ruler,
    RulerTriple, SmokingProfile, Speaker, StudyPhase, Transcript, TranscriptSource, Utterance, Volley,
};
use crate::stats::{wilcoxon_signed_rank, Alternative, MethodChoice, StatsError};

pub const DATA_FILE: &str = "data.csv";
pub const CONVERSATIONS_FILE: &str = "conversations.csv";

pub const DATA_COLUMNS: [&str; 43] = [
    "ParticipantId",
    "DailyNum",
    "FirstCig",
    "HeavinessOfSmokingIndex",
    "PreConvoQuitAttempt",
    "PreConvoNumQuitAttempts",
    "PreRulerImportance",
    "PreRulerConfidence",
    "PreRulerReadiness",
    "PostRulerImportance",
    "PostRulerConfidence",
    "PostRulerReadiness",
    "FeedbackQ1",
    "FeedbackQ2",
    "FeedbackQ3",
    "LikedBot",
    "FoundBotHelpful",
    "CAREQ1",
    "CAREQ2",
    "CAREQ3",
    "CAREQ4",
    "CAREQ5",
    "CAREQ6",
    "CAREQ7",
    "CAREQ8",
    "CAREQ9",
    "CAREQ10",
    "WeekLaterRulerImportance",
    "WeekLaterRulerConfidence",
    "WeekLaterRulerReadiness",
    "WeekLaterQuitAttempt",
    "WeekLaterNumQuitAttempts",
    "AutoMISC_MICO",
    "AutoMISC_MIIN",
    "AutoMISC_R",
    "AutoMISC_Q",
    "AutoMISC_Other",
    "AutoMISC_C",
    "AutoMISC_S",
    "AutoMISC_N",
    "AutoMISC_%MIC",
    "AutoMISC_R:Q",
    "AutoMISC_C:S",
];

pub const CONVERSATION_COLUMNS: [&str; 8] = [
    "ParticipantID",
    "Speaker",
    "Volley#",
    "Utterance#",
    "CumulativeVolley",
    "Utterance",
    "AutoMISCLabel",
    "AutoMISCExplanation",
];

/// Button presses recorded as client volleys.
const EVENT_TEXTS: [&str; 2] = ["Selected: Yes", "Selected: No"];

#[derive(Debug, Error, Clone, PartialEq)]
pub enum StoreError {
    #[error("expected a {expected:?} ruler, got {found:?}")]
    WrongPhase { expected: StudyPhase, found: StudyPhase },
    #[error("time to first cigarette must be positive")]
    NonPositiveTtfc,
    #[error("no records")]
    EmptyInput,
    #[error("schema violation: {0}")]
    SchemaViolation(String),
    #[error("line {line}: {message}")]
    MalformedRow { line: usize, message: String },
    #[error("unknown import format {0:?}")]
    UnknownFormat(String),
    #[error("{0}")]
    Io(String),
    #[error(transparent)]
    Stats(#[from] StatsError),
    #[error(transparent)]
    Domain(#[from] DomainError),
}

fn io_err(path: &Path, e: impl std::fmt::Display) -> StoreError {
    StoreError::Io(format!("{}: {e}", path.display()))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "status", content = "score", rename_all = "lowercase")]
pub enum CareScore {
    Valid(u32),
    /// More than two items answered "Does Not Apply".
    Invalid,
}

impl CareScore {
    pub fn value(self) -> Option<u32> {
        match self {
            CareScore::Valid(v) => Some(v),
            CareScore::Invalid => None,
        }
    }
}

pub const CARE_MAX: u32 = 50;
const CARE_MAX_MISSING: usize = 2;

/// Total CARE score; up to two missing items are imputed with the rounded
/// mean of the answered ones.
pub fn score_care(c: &CareResponse) -> CareScore {
    let answered: Vec<u32> = c.items().iter().filter_map(|r| r.score()).collect();
    let missing = c.items().len() - answered.len();
    if missing > CARE_MAX_MISSING {
        return CareScore::Invalid;
    }
    let sum: u32 = answered.iter().sum();
    let imputed = (sum as f64 / answered.len() as f64).round() as u32;
    CareScore::Valid(sum + imputed * missing as u32)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct HsiScore {
    pub value: u8,
    pub cpd_band: u8,
    pub ttfc_band: u8,
}

/// Heaviness of Smoking Index from cigarettes/day and minutes to first cigarette.
pub fn score_hsi(p: &SmokingProfile) -> Result<HsiScore, StoreError> {
    if p.time_to_first_cigarette == 0 {
        return Err(StoreError::NonPositiveTtfc);
    }
    let cpd_band = match p.cigarettes_per_day {
        0..=10 => 0,
        11..=20 => 1,
        21..=30 => 2,
        _ => 3,
    };
    let ttfc_band = match p.time_to_first_cigarette {
        1..=5 => 3,
        6..=30 => 2,
        31..=60 => 1,
        _ => 0,
    };
    Ok(HsiScore { value: cpd_band + ttfc_band, cpd_band, ttfc_band })
}

/// Low confidence, or high confidence that is not far above importance.
pub fn eligibility(pre: &RulerTriple) -> Result<bool, StoreError> {
    if pre.phase != StudyPhase::Pre {
        return Err(StoreError::WrongPhase { expected: StudyPhase::Pre, found: pre.phase });
    }
    let c = i32::from(pre.confidence);
    let i = i32::from(pre.importance);
    Ok(c <= 5 || c - i < 5)
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct ParticipantRecord {
    pub participant_id: String,
    pub smoking: Option<SmokingProfile>,
    pub pre_quit_attempt: Option<String>,
    pub pre_num_quit_attempts: Option<u32>,
    pub pre: Option<RulerTriple>,
    pub post: Option<RulerTriple>,
    pub week_later: Option<RulerTriple>,
    pub feedback: [String; 3],
    pub liked_bot: Option<String>,
    pub found_bot_helpful: Option<String>,
    pub care: Option<CareResponse>,
    pub week_quit_attempt: Option<String>,
    pub week_num_quit_attempts: Option<u32>,
    pub summary: Option<SummaryScores>,
    /// Sex, age, ethnicity, employment and similar fields used for subgroup tables.
    #[serde(default)]
    pub demographics: BTreeMap<String, String>,
}

impl ParticipantRecord {
    pub fn new(participant_id: impl Into<String>) -> Self {
        ParticipantRecord { participant_id: participant_id.into(), ..Default::default() }
    }

    pub fn ruler(&self, phase: StudyPhase) -> Option<&RulerTriple> {
        match phase {
            StudyPhase::Pre => self.pre.as_ref(),
            StudyPhase::Post => self.post.as_ref(),
            StudyPhase::WeekLater => self.week_later.as_ref(),
        }
    }

    pub fn validate(&self) -> Result<(), StoreError> {
        if self.participant_id.trim().is_empty() {
            return Err(StoreError::SchemaViolation("empty participant id".into()));
        }
        for (phase, slot) in [(StudyPhase::Pre, &self.pre), (StudyPhase::Post, &self.post), (StudyPhase::WeekLater, &self.week_later)] {
            if let Some(r) = slot {
                if r.phase != phase {
                    return Err(StoreError::SchemaViolation(format!(
                        "{}: {:?} ruler stored in the {phase:?} slot",
                        self.participant_id, r.phase
                    )));
                }
            }
        }
        if self.post.is_some() && self.pre.is_none() {
            return Err(StoreError::SchemaViolation(format!("{}: post ruler without pre", self.participant_id)));
        }
        if self.week_later.is_some() && self.post.is_none() {
            return Err(StoreError::SchemaViolation(format!("{}: week-later ruler without post", self.participant_id)));
        }
        Ok(())
    }
}

/// Pre-export text scrubbing.
pub trait Redactor: Send + Sync {
    fn redact(&self, text: &str) -> String;
}

pub struct NoRedaction;

impl Redactor for NoRedaction {
    fn redact(&self, text: &str) -> String {
        text.to_string()
    }
}

/// Replaces e-mail addresses and phone-number-like digit runs.
pub struct RegexRedactor {
    email: Regex,
    phone: Regex,
}

impl Default for RegexRedactor {
    fn default() -> Self {
        RegexRedactor {
            email: Regex::new(r"[A-Za-z0-9._%+-]+@[A-Za-z0-9.-]+\.[A-Za-z]{2,}").expect("valid regex"),
            phone: Regex::new(r"\+?\(?\d[\d\s().-]{7,}\d").expect("valid regex"),
        }
    }
}

impl Redactor for RegexRedactor {
    fn redact(&self, text: &str) -> String {
        let t = self.email.replace_all(text, "[EMAIL]");
        self.phone.replace_all(&t, "[PHONE]").into_owned()
    }
}

fn opt<T: ToString>(v: Option<T>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

fn fmt_metric(v: Option<f64>) -> String {
    match v {
        Some(x) => {
            let s = format!("{x:.2}");
            s.trim_end_matches('0').trim_end_matches('.').to_string()
        }
        None => String::new(),
    }
}

fn data_row(r: &ParticipantRecord) -> Result<Vec<String>, StoreError> {
    let ruler = |t: &Option<RulerTriple>, which: Ruler| opt(t.map(|t| t.get(which)));
    let hsi = match &r.smoking {
        Some(p) => score_hsi(p).ok().map(|h| h.value),
        None => None,
    };
    let mut row = vec![
        r.participant_id.clone(),
        opt(r.smoking.map(|s| s.cigarettes_per_day)),
        opt(r.smoking.map(|s| s.time_to_first_cigarette)),
        opt(hsi),
        r.pre_quit_attempt.clone().unwrap_or_default(),
        opt(r.pre_num_quit_attempts),
    ];
    for t in [&r.pre, &r.post] {
        for which in Ruler::ALL {
            row.push(ruler(t, which));
        }
    }
    row.extend(r.feedback.iter().cloned());
    row.push(r.liked_bot.clone().unwrap_or_default());
    row.push(r.found_bot_helpful.clone().unwrap_or_default());
    match &r.care {
        Some(c) => row.extend(c.items().iter().map(|i| i.score().map_or("NA".to_string(), |s| s.to_string()))),
        None => row.extend(std::iter::repeat_n(String::new(), 10)),
    }
    for which in Ruler::ALL {
        row.push(ruler(&r.week_later, which));
    }
    row.push(r.week_quit_attempt.clone().unwrap_or_default());
    row.push(opt(r.week_num_quit_attempts));
    match &r.summary {
        Some(s) => {
            let c = s.counts;
            row.extend([c.mico, c.miin, c.r, c.q, c.other, c.c, c.s, c.n].map(|x| x.to_string()));
            row.extend([s.pct_mic, s.rq_ratio, s.pct_ct].map(fmt_metric));
        }
        None => row.extend(std::iter::repeat_n(String::new(), 11)),
    }
    if row.len() != DATA_COLUMNS.len() {
        return Err(StoreError::SchemaViolation(format!("data row has {} fields", row.len())));
    }
    Ok(row)
}

fn csv_writer(path: &Path) -> Result<csv::Writer<File>, StoreError> {
    let file = File::create(path).map_err(|e| io_err(path, e))?;
    Ok(csv::WriterBuilder::new().terminator(csv::Terminator::Any(b'\n')).from_writer(file))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ExportSummary {
    pub participants: usize,
    pub utterance_rows: usize,
}

/// Writes `data.csv` and `conversations.csv` into `dir`.
pub fn export_study_dataset(
    dir: &Path,
    records: &[ParticipantRecord],
    transcripts: &[AnnotatedTranscript],
    redactor: &dyn Redactor,
) -> Result<ExportSummary, StoreError> {
    for r in records {
        r.validate()?;
    }
    check_transcripts(transcripts)?;
    fs::create_dir_all(dir).map_err(|e| io_err(dir, e))?;

    let data_path = dir.join(DATA_FILE);
    let mut w = csv_writer(&data_path)?;
    w.write_record(DATA_COLUMNS).map_err(|e| io_err(&data_path, e))?;
    for r in records {
        let mut row = data_row(r)?;
        for i in [12, 13, 14] {
            row[i] = redactor.redact(&row[i]);
        }
        w.write_record(&row).map_err(|e| io_err(&data_path, e))?;
    }
    w.flush().map_err(|e| io_err(&data_path, e))?;

    let rows = write_conversations(&dir.join(CONVERSATIONS_FILE), transcripts, redactor)?;
    Ok(ExportSummary { participants: records.len(), utterance_rows: rows })
}

/// Writes the per-utterance `conversations.csv` table to `path`; returns the row count.
pub fn write_conversations(
    path: &Path,
    transcripts: &[AnnotatedTranscript],
    redactor: &dyn Redactor,
) -> Result<usize, StoreError> {
    check_transcripts(transcripts)?;
    let mut w = csv_writer(path)?;
    w.write_record(CONVERSATION_COLUMNS).map_err(|e| io_err(path, e))?;
    let mut rows = 0;
    for at in transcripts {
        let by_index: HashMap<usize, &Annotation> = at.annotations.iter().map(|a| (a.utterance_index, a)).collect();
        for v in &at.transcript.volleys {
            let parts: Vec<String> = v.utterances.iter().map(|u| redactor.redact(&u.text)).collect();
            for (i, u) in v.utterances.iter().enumerate() {
                let cumulative = if i + 1 == parts.len() { redactor.redact(&v.text) } else { parts[..=i].join(" ") };
                let (label, explanation) = match by_index.get(&u.index) {
                    Some(a) if !v.system_event => (a.code.as_str().to_string(), a.explanation.clone()),
                    _ => (String::new(), String::new()),
                };
                w.write_record([
                    at.transcript.participant_id.as_str(),
                    v.speaker.as_str(),
                    &v.index.to_string(),
                    &u.index.to_string(),
                    &cumulative,
                    &parts[i],
                    &label,
                    &explanation,
                ])
                .map_err(|e| io_err(path, e))?;
                rows += 1;
            }
        }
    }
    w.flush().map_err(|e| io_err(path, e))?;
    Ok(rows)
}

fn check_transcripts(transcripts: &[AnnotatedTranscript]) -> Result<(), StoreError> {
    for at in transcripts {
        if !is_valid(&at.transcript) {
            return Err(StoreError::SchemaViolation(format!("transcript {} is invalid", at.transcript.participant_id)));
        }
        if let Some(v) = at.transcript.volleys.iter().find(|v| !v.is_parsed()) {
            return Err(StoreError::SchemaViolation(format!(
                "transcript {} volley {} is not segmented",
                at.transcript.participant_id, v.index
            )));
        }
    }
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ImportFormat {
    StudyCsv,
    Hlqc,
}

impl FromStr for ImportFormat {
    type Err = StoreError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.trim().to_ascii_lowercase().replace('_', "-").as_str() {
            "study-csv" | "studycsv" | "csv" => Ok(ImportFormat::StudyCsv),
            "hlqc" => Ok(ImportFormat::Hlqc),
            other => Err(StoreError::UnknownFormat(other.to_string())),
        }
    }
}

pub fn import_transcripts(path: &Path, format: ImportFormat) -> Result<Vec<Transcript>, StoreError> {
    match format {
        ImportFormat::StudyCsv => Ok(import_study_csv(path)?.into_iter().map(|a| a.transcript).collect()),
        ImportFormat::Hlqc => import_hlqc(path),
    }
}

fn conversations_path(path: &Path) -> PathBuf {
    if path.is_dir() {
        path.join(CONVERSATIONS_FILE)
    } else {
        path.to_path_buf()
    }
}

fn open_csv(path: &Path) -> Result<csv::Reader<File>, StoreError> {
    let file = File::open(path).map_err(|e| io_err(path, e))?;
    Ok(csv::ReaderBuilder::new().flexible(false).from_reader(file))
}

fn header_index(headers: &csv::StringRecord, path: &Path, wanted: &[&str]) -> Result<Vec<usize>, StoreError> {
    wanted
        .iter()
        .map(|w| {
            headers
                .iter()
                .position(|h| h.trim_start_matches('\u{feff}') == *w)
                .ok_or_else(|| StoreError::SchemaViolation(format!("{}: missing column {w}", path.display())))
        })
        .collect()
}

/// Rebuilds annotated transcripts from a `conversations.csv` (or a directory holding one).
pub fn import_study_csv(path: &Path) -> Result<Vec<AnnotatedTranscript>, StoreError> {
    let path = conversations_path(path);
    let mut rdr = open_csv(&path)?;
    let headers = rdr.headers().map_err(|e| io_err(&path, e))?.clone();
    let col = header_index(&headers, &path, &CONVERSATION_COLUMNS)?;

    let mut order: Vec<String> = Vec::new();
    let mut out: HashMap<String, AnnotatedTranscript> = HashMap::new();
    for (i, rec) in rdr.records().enumerate() {
        let line = i + 2;
        let rec = rec.map_err(|e| StoreError::MalformedRow { line, message: e.to_string() })?;
        let get = |k: usize| rec.get(col[k]).unwrap_or_default();
        let bad = |message: String| StoreError::MalformedRow { line, message };
        let pid = get(0).to_string();
        let speaker: Speaker = get(1).parse().map_err(|e: DomainError| bad(e.to_string()))?;
        let volley_no: usize = get(2).trim().parse().map_err(|_| bad(format!("bad Volley# {:?}", get(2))))?;
        let utt_no: usize = get(3).trim().parse().map_err(|_| bad(format!("bad Utterance# {:?}", get(3))))?;
        let at = out.entry(pid.clone()).or_insert_with(|| {
            order.push(pid.clone());
            AnnotatedTranscript {
                transcript: Transcript::new(pid.clone(), TranscriptSource::Imported),
                annotations: Vec::new(),
                annotator_id: String::new(),
            }
        });
        let volleys = &mut at.transcript.volleys;
        match volleys.last_mut() {
            Some(v) if v.index == volley_no => {
                if v.speaker != speaker {
                    return Err(bad(format!("speaker changes inside volley {volley_no}")));
                }
                v.text = get(4).to_string();
            }
            _ => {
                if volley_no != volleys.len() {
                    return Err(bad(format!("volley {volley_no} out of order")));
                }
                let mut v = Volley::new(volley_no, speaker, get(4));
                v.system_event = speaker == Speaker::Client && EVENT_TEXTS.contains(&get(4).trim());
                volleys.push(v);
            }
        }
        let v = volleys.last_mut().expect("just pushed");
        v.utterances.push(Utterance { index: utt_no, speaker, text: get(5).to_string() });
        let label = get(6).trim();
        if !label.is_empty() && !v.system_event {
            let code = MiscCode::parse_for(speaker, label).map_err(|e| bad(e.to_string()))?;
            at.annotations.push(Annotation {
                utterance_index: utt_no,
                code,
                explanation: get(7).to_string(),
                annotator_id: "imported".into(),
            });
        }
    }
    let mut result = Vec::with_capacity(order.len());
    for pid in order {
        let mut at = out.remove(&pid).expect("ordered key present");
        for v in &at.transcript.volleys {
            if !reconstructs(&v.text, v.utterances.iter().map(|u| u.text.as_str())) {
                return Err(StoreError::SchemaViolation(format!(
                    "{pid} volley {}: utterances do not reconstruct the volley",
                    v.index
                )));
            }
        }
        at.annotator_id = at.annotations.first().map(|a| a.annotator_id.clone()).unwrap_or_default();
        result.push(at);
    }
    Ok(result)
}

fn hlqc_speaker(tag: &str) -> Option<Speaker> {
    match tag.trim().to_ascii_lowercase().as_str() {
        "t" | "therapist" | "counsellor" | "counselor" | "interviewer" => Some(Speaker::Counsellor),
        "c" | "client" | "patient" => Some(Speaker::Client),
        _ => None,
    }
}

/// Parses one speaker-prefixed transcript. Lines without a tag continue the
/// previous volley; consecutive lines by the same speaker form one volley.
pub fn parse_hlqc(text: &str, participant_id: &str) -> Result<Transcript, StoreError> {
    let tag_re = Regex::new(r"^\s*([A-Za-z][A-Za-z ]{0,20}?)\s*:\s*(.*)$").expect("valid regex");
    let mut t = Transcript::new(participant_id, TranscriptSource::Imported);
    for (i, raw) in text.lines().enumerate() {
        let line = i + 1;
        if raw.trim().is_empty() {
            continue;
        }
        let (speaker, body) = match tag_re.captures(raw) {
            Some(c) => {
                let tag = c.get(1).map_or("", |m| m.as_str());
                let speaker = hlqc_speaker(tag)
                    .ok_or_else(|| StoreError::MalformedRow { line, message: format!("unknown speaker tag {tag:?}") })?;
                (Some(speaker), c.get(2).map_or("", |m| m.as_str()).trim())
            }
            None => (None, raw.trim()),
        };
        match (speaker, t.volleys.last_mut()) {
            (None, None) => {
                return Err(StoreError::MalformedRow { line, message: "text before the first speaker tag".into() })
            }
            (None, Some(v)) => append(&mut v.text, body),
            (Some(s), Some(v)) if v.speaker == s => append(&mut v.text, body),
            (Some(s), _) => {
                t.push(s, body);
            }
        }
    }
    if t.volleys.is_empty() {
        return Err(StoreError::MalformedRow { line: 0, message: format!("{participant_id}: no turns") });
    }
    Ok(t)
}

fn append(text: &mut String, more: &str) {
    if !more.is_empty() {
        if !text.is_empty() {
            text.push(' ');
        }
        text.push_str(more);
    }
}

fn cohort_of(path: &Path) -> Option<String> {
    path.components().rev().find_map(|c| {
        match c.as_os_str().to_string_lossy().to_ascii_lowercase().as_str() {
            "hi" | "high" | "hlqc_hi" => Some("HI".to_string()),
            "lo" | "low" | "hlqc_lo" => Some("LO".to_string()),
            _ => None,
        }
    })
}

/// Reads every `*.txt` transcript under `root`; the HI/LO split comes from the
/// directory a file sits in.
pub fn import_hlqc(root: &Path) -> Result<Vec<Transcript>, StoreError> {
    let mut files = Vec::new();
    collect_txt(root, &mut files)?;
    files.sort();
    files
        .iter()
        .map(|p| {
            let text = fs::read_to_string(p).map_err(|e| io_err(p, e))?;
            let id = p.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
            let mut t = parse_hlqc(&text, &id).map_err(|e| match e {
                StoreError::MalformedRow { line, message } => {
                    StoreError::MalformedRow { line, message: format!("{}: {message}", p.display()) }
                }
                other => other,
            })?;
            t.cohort = cohort_of(p.strip_prefix(root).unwrap_or(p));
            Ok(t)
        })
        .collect()
}

fn collect_txt(dir: &Path, out: &mut Vec<PathBuf>) -> Result<(), StoreError> {
    if dir.is_file() {
        out.push(dir.to_path_buf());
        return Ok(());
    }
    for entry in fs::read_dir(dir).map_err(|e| io_err(dir, e))? {
        let p = entry.map_err(|e| io_err(dir, e))?.path();
        if p.is_dir() {
            collect_txt(&p, out)?;
        } else if p.extension().is_some_and(|x| x == "txt") {
            out.push(p);
        }
    }
    Ok(())
}

/// Equality on everything the CSV schema carries: ids, speakers, texts,
/// utterances and event flags.
pub fn same_structure(a: &Transcript, b: &Transcript) -> bool {
    a.participant_id == b.participant_id
        && a.volleys.len() == b.volleys.len()
        && a.volleys.iter().zip(&b.volleys).all(|(x, y)| {
            x.index == y.index
                && x.speaker == y.speaker
                && x.text == y.text
                && x.system_event == y.system_event
                && x.utterances == y.utterances
        })
}

fn parse_int(s: &str) -> Option<i64> {
    let t = s.trim();
    t.parse::<i64>().ok().or_else(|| {
        let f = t.parse::<f64>().ok()?;
        (f.fract() == 0.0).then_some(f as i64)
    })
}

fn nonempty(s: &str) -> Option<String> {
    let t = s.trim();
    (!t.is_empty()).then(|| t.to_string())
}

/// Minutes from a numeric cell or one of the instrument's answer options.
fn parse_ttfc(s: &str) -> Option<u32> {
    if let Some(n) = parse_int(s) {
        return u32::try_from(n).ok();
    }
    let l = s.to_ascii_lowercase();
    if l.contains("within 5") || l.contains("0-5") {
        Some(5)
    } else if l.contains("6-30") || l.contains("6 - 30") {
        Some(30)
    } else if l.contains("31-60") || l.contains("31 - 60") {
        Some(60)
    } else if l.contains("after 60") || l.contains("more than 60") || l.contains("60+") {
        Some(61)
    } else {
        None
    }
}

/// Reads a `data.csv` by column name. Unparseable or missing cells become `None`.
pub fn read_data_csv(path: &Path) -> Result<Vec<ParticipantRecord>, StoreError> {
    let path = if path.is_dir() { path.join(DATA_FILE) } else { path.to_path_buf() };
    let mut rdr = open_csv(&path)?;
    let headers = rdr.headers().map_err(|e| io_err(&path, e))?.clone();
    let idx: HashMap<String, usize> = headers
        .iter()
        .enumerate()
        .map(|(i, h)| (h.trim_start_matches('\u{feff}').trim().to_string(), i))
        .collect();
    if !idx.contains_key("ParticipantId") {
        return Err(StoreError::SchemaViolation(format!("{}: missing column ParticipantId", path.display())));
    }
    let mut out = Vec::new();
    for (i, rec) in rdr.records().enumerate() {
        let rec = rec.map_err(|e| StoreError::MalformedRow { line: i + 2, message: e.to_string() })?;
        let get = |k: &str| idx.get(k).and_then(|&j| rec.get(j)).unwrap_or_default();
        let ruler = |prefix: &str, phase| {
            let v = |name: &str| parse_int(get(&format!("{prefix}Ruler{name}")));
            RulerTriple::new(v("Importance")?, v("Confidence")?, v("Readiness")?, phase).ok()
        };
        let care = (1..=10)
            .map(|q| {
                let cell = get(&format!("CAREQ{q}"));
                if cell.trim().is_empty() {
                    None
                } else {
                    cell.parse::<CareRating>().ok()
                }
            })
            .collect::<Option<Vec<_>>>()
            .and_then(|items| CareResponse::new(items).ok());
        let smoking = match (parse_int(get("DailyNum")), parse_ttfc(get("FirstCig"))) {
            (Some(cpd), Some(ttfc)) if cpd >= 0 => Some(SmokingProfile { cigarettes_per_day: cpd as u32, time_to_first_cigarette: ttfc }),
            _ => None,
        };
        let count = |k: &str| -> Option<u32> { parse_int(get(k)).and_then(|n| u32::try_from(n).ok()) };
        let summary = (|| {
            let c = crate::automisc::CodeCounts {
                mico: count("AutoMISC_MICO")?,
                miin: count("AutoMISC_MIIN")?,
                r: count("AutoMISC_R")?,
                q: count("AutoMISC_Q")?,
                other: count("AutoMISC_Other")?,
                c: count("AutoMISC_C")?,
                s: count("AutoMISC_S")?,
                n: count("AutoMISC_N")?,
            };
            Some(SummaryScores::from_counts(c))
        })();
        out.push(ParticipantRecord {
            participant_id: get("ParticipantId").to_string(),
            smoking,
            pre_quit_attempt: nonempty(get("PreConvoQuitAttempt")),
            pre_num_quit_attempts: count("PreConvoNumQuitAttempts"),
            pre: ruler("Pre", StudyPhase::Pre),
            post: ruler("Post", StudyPhase::Post),
            week_later: ruler("WeekLater", StudyPhase::WeekLater),
            feedback: [get("FeedbackQ1").to_string(), get("FeedbackQ2").to_string(), get("FeedbackQ3").to_string()],
            liked_bot: nonempty(get("LikedBot")),
            found_bot_helpful: nonempty(get("FoundBotHelpful")),
            care,
            week_quit_attempt: nonempty(get("WeekLaterQuitAttempt")),
            week_num_quit_attempts: count("WeekLaterNumQuitAttempts"),
            summary,
            demographics: BTreeMap::new(),
        });
    }
    Ok(out)
}

/// Merges a demographics CSV keyed by a participant id column into the records.
pub fn attach_demographics(records: &mut [ParticipantRecord], path: &Path) -> Result<usize, StoreError> {
    let mut rdr = open_csv(path)?;
    let headers: Vec<String> = rdr.headers().map_err(|e| io_err(path, e))?.iter().map(str::to_string).collect();
    let id_col = headers
        .iter()
        .position(|h| h.eq_ignore_ascii_case("ParticipantId") || h.eq_ignore_ascii_case("Participant id"))
        .ok_or_else(|| StoreError::SchemaViolation(format!("{}: no participant id column", path.display())))?;
    let mut by_id: HashMap<String, BTreeMap<String, String>> = HashMap::new();
    for (i, rec) in rdr.records().enumerate() {
        let rec = rec.map_err(|e| StoreError::MalformedRow { line: i + 2, message: e.to_string() })?;
        let fields = headers.iter().zip(rec.iter()).map(|(h, v)| (h.clone(), v.to_string())).collect();
        by_id.insert(rec.get(id_col).unwrap_or_default().to_string(), fields);
    }
    let mut matched = 0;
    for r in records.iter_mut() {
        if let Some(d) = by_id.remove(&r.participant_id) {
            r.demographics.extend(d);
            matched += 1;
        }
    }
    Ok(matched)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReleaseMismatch {
    pub participant_id: String,
    pub column: String,
    pub released: String,
    pub recomputed: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReleaseCheck {
    pub rows: usize,
    pub transcripts: usize,
    pub mismatches: Vec<ReleaseMismatch>,
    pub summary: DatasetSummary,
}

fn undefined_cell(s: &str) -> bool {
    matches!(s.trim().to_ascii_lowercase().as_str(), "" | "na" | "nan" | "inf" | "none" | "undefined")
}

/// Whether `value` rounds to `released` at the number of decimals it was published with.
pub fn matches_published(released: &str, value: Option<f64>) -> bool {
    match value {
        None => undefined_cell(released),
        Some(v) => {
            let r = released.trim();
            let Ok(parsed) = r.parse::<f64>() else { return false };
            let decimals = r.split_once('.').map_or(0, |(_, f)| f.len()) as i32;
            let scale = 10f64.powi(decimals);
            ((v * scale).round() - (parsed * scale).round()).abs() < 0.5
        }
    }
}

/// Recomputes %MIC and R:Q from per-utterance labels and compares them with
/// the released per-participant columns.
pub fn verify_release(dir: &Path) -> Result<ReleaseCheck, StoreError> {
    let data_path = dir.join(DATA_FILE);
    let mut rdr = open_csv(&data_path)?;
    let headers = rdr.headers().map_err(|e| io_err(&data_path, e))?.clone();
    let col = header_index(&headers, &data_path, &["ParticipantId", "AutoMISC_%MIC", "AutoMISC_R:Q"])?;
    let conv = conversations_path(dir);
    let mut crdr = open_csv(&conv)?;
    let cheaders = crdr.headers().map_err(|e| io_err(&conv, e))?.clone();
    let ccol = header_index(&cheaders, &conv, &["ParticipantID", "AutoMISCLabel"])?;
    let mut labels: HashMap<String, Vec<String>> = HashMap::new();
    for (i, rec) in crdr.records().enumerate() {
        let rec = rec.map_err(|e| StoreError::MalformedRow { line: i + 2, message: e.to_string() })?;
        labels.entry(rec[ccol[0]].to_string()).or_default().push(rec[ccol[1]].to_string());
    }
    let mut mismatches = Vec::new();
    let mut scores = Vec::new();
    let mut rows = 0;
    for (i, rec) in rdr.records().enumerate() {
        let rec = rec.map_err(|e| StoreError::MalformedRow { line: i + 2, message: e.to_string() })?;
        rows += 1;
        let pid = rec[col[0]].to_string();
        let Some(ls) = labels.get(&pid) else {
            mismatches.push(ReleaseMismatch {
                participant_id: pid,
                column: "conversations".into(),
                released: "present".into(),
                recomputed: "missing".into(),
            });
            continue;
        };
        let s = SummaryScores::from_labels(ls.iter().map(String::as_str))
            .map_err(|e| StoreError::SchemaViolation(format!("{pid}: {e}")))?;
        for (k, name, value) in [(1, "AutoMISC_%MIC", s.pct_mic), (2, "AutoMISC_R:Q", s.rq_ratio)] {
            if !matches_published(&rec[col[k]], value) {
                mismatches.push(ReleaseMismatch {
                    participant_id: pid.clone(),
                    column: name.into(),
                    released: rec[col[k]].to_string(),
                    recomputed: value.map_or("undefined".into(), |v| v.to_string()),
                });
            }
        }
        scores.push(s);
    }
    let summary = dataset_summary(&scores).map_err(|_| StoreError::EmptyInput)?;
    Ok(ReleaseCheck { rows, transcripts: labels.len(), mismatches, summary })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum GroupKey {
    Sex,
    AgeBand,
    Ethnicity,
    Employment,
}

impl FromStr for GroupKey {
    type Err = StoreError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.trim().to_ascii_lowercase().as_str() {
            "sex" | "gender" => Ok(GroupKey::Sex),
            "age" | "age-band" => Ok(GroupKey::AgeBand),
            "ethnicity" => Ok(GroupKey::Ethnicity),
            "employment" => Ok(GroupKey::Employment),
            other => Err(StoreError::UnknownFormat(other.to_string())),
        }
    }
}

fn demographic<'a>(r: &'a ParticipantRecord, names: &[&str]) -> Option<&'a str> {
    r.demographics
        .iter()
        .find(|(k, _)| names.iter().any(|n| k.eq_ignore_ascii_case(n)))
        .map(|(_, v)| v.trim())
        .filter(|v| !v.is_empty())
}

impl GroupKey {
    /// Group label for a record, `None` when the field is absent.
    pub fn group_of(self, r: &ParticipantRecord) -> Option<String> {
        match self {
            GroupKey::Sex => demographic(r, &["Sex", "Gender"]).map(str::to_string),
            GroupKey::AgeBand => {
                let age = demographic(r, &["Age"])?.parse::<f64>().ok()?;
                Some(if age < 30.0 { "<30" } else { ">=30" }.to_string())
            }
            GroupKey::Ethnicity => demographic(r, &["Ethnicity", "Ethnicity simplified"])
                .map(|e| if e.eq_ignore_ascii_case("white") { "White" } else { "Other" }.to_string()),
            GroupKey::Employment => demographic(r, &["Employment", "Employment status"]).map(|e| {
                let l = e.to_ascii_lowercase();
                if l.starts_with("full-time") || l.starts_with("full time") { "Full-Time" } else { "Other" }.to_string()
            }),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RulerDeltaRow {
    pub ruler: Ruler,
    pub mean_pre: f64,
    pub mean_post: Option<f64>,
    pub mean_week: f64,
    pub mean_delta: f64,
    pub sd_delta: f64,
    /// `None` when every delta is zero.
    pub p_value: Option<f64>,
    pub zero_delta_fraction: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RulerDeltaGroup {
    pub group: String,
    pub n: usize,
    pub rows: Vec<RulerDeltaRow>,
}

fn mean(xs: &[f64]) -> Option<f64> {
    (!xs.is_empty()).then(|| xs.iter().sum::<f64>() / xs.len() as f64)
}

fn ruler_rows(records: &[&ParticipantRecord], alternative: Alternative) -> Result<Vec<RulerDeltaRow>, StoreError> {
    Ruler::ALL
        .into_iter()
        .map(|ruler| {
            let pre: Vec<f64> = records.iter().map(|r| r.pre.map_or(0.0, |t| t.get(ruler) as f64)).collect();
            let week: Vec<f64> = records.iter().map(|r| r.week_later.map_or(0.0, |t| t.get(ruler) as f64)).collect();
            let post: Vec<f64> = records.iter().filter_map(|r| r.post.map(|t| t.get(ruler) as f64)).collect();
            let deltas: Vec<f64> = week.iter().zip(&pre).map(|(w, p)| w - p).collect();
            let d = MetricSummary::of(deltas.iter().map(|x| Some(*x)));
            let p_value = match wilcoxon_signed_rank(&pre, &week, alternative, MethodChoice::Auto) {
                Ok(t) => Some(t.p_value),
                Err(StatsError::AllZeroDifferences) => None,
                Err(e) => return Err(e.into()),
            };
            Ok(RulerDeltaRow {
                ruler,
                mean_pre: mean(&pre).unwrap_or_default(),
                mean_post: mean(&post),
                mean_week: mean(&week).unwrap_or_default(),
                mean_delta: d.mean.unwrap_or_default(),
                sd_delta: d.sd.unwrap_or_default(),
                p_value,
                zero_delta_fraction: deltas.iter().filter(|x| **x == 0.0).count() as f64 / deltas.len() as f64,
            })
        })
        .collect()
}

/// Week-later minus pre deltas for participants who completed both.
pub fn ruler_deltas(
    records: &[ParticipantRecord],
    alternative: Alternative,
    group_by: Option<GroupKey>,
) -> Result<Vec<RulerDeltaGroup>, StoreError> {
    let completers: Vec<&ParticipantRecord> =
        records.iter().filter(|r| r.pre.is_some() && r.week_later.is_some()).collect();
    if completers.is_empty() {
        return Err(StoreError::EmptyInput);
    }
    let Some(key) = group_by else {
        return Ok(vec![RulerDeltaGroup {
            group: "all".into(),
            n: completers.len(),
            rows: ruler_rows(&completers, alternative)?,
        }]);
    };
    let mut groups: BTreeMap<String, Vec<&ParticipantRecord>> = BTreeMap::new();
    for r in completers {
        if let Some(g) = key.group_of(r) {
            groups.entry(g).or_default().push(r);
        }
    }
    groups
        .into_iter()
        .map(|(group, rs)| Ok(RulerDeltaGroup { n: rs.len(), rows: ruler_rows(&rs, alternative)?, group }))
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CareSummary {
    pub n_valid: usize,
    pub n_invalid: usize,
    pub mean: Option<f64>,
    pub sd: Option<f64>,
    pub pct_perfect: Option<f64>,
    /// Mean item score per question over valid responses, ignoring "Does Not Apply".
    pub question_means: Vec<Option<f64>>,
}

pub fn care_summary(records: &[ParticipantRecord]) -> CareSummary {
    let responses: Vec<&CareResponse> = records.iter().filter_map(|r| r.care.as_ref()).collect();
    let scored: Vec<(&CareResponse, u32)> =
        responses.iter().filter_map(|c| score_care(c).value().map(|s| (*c, s))).collect();
    let totals = MetricSummary::of(scored.iter().map(|(_, s)| Some(*s as f64)));
    let question_means = (0..10)
        .map(|q| {
            let xs: Vec<f64> = scored.iter().filter_map(|(c, _)| c.items()[q].score().map(f64::from)).collect();
            mean(&xs)
        })
        .collect();
    CareSummary {
        n_valid: scored.len(),
        n_invalid: responses.len() - scored.len(),
        mean: totals.mean,
        sd: totals.sd,
        pct_perfect: (!scored.is_empty())
            .then(|| 100.0 * scored.iter().filter(|(_, s)| *s == CARE_MAX).count() as f64 / scored.len() as f64),
        question_means,
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StudyReport {
    pub participants: usize,
    pub care: CareSummary,
    pub rulers: Option<RulerDeltaGroup>,
    /// `(delta, participants)` for week-later minus pre confidence.
    pub confidence_delta_histogram: Vec<(i32, usize)>,
    pub zero_confidence_delta_pct: Option<f64>,
    pub misc: Option<DatasetSummary>,
}

pub fn study_report(records: &[ParticipantRecord]) -> Result<StudyReport, StoreError> {
    if records.is_empty() {
        return Err(StoreError::EmptyInput);
    }
    let rulers = match ruler_deltas(records, Alternative::TwoSided, None) {
        Ok(mut g) => g.pop(),
        Err(StoreError::EmptyInput) => None,
        Err(e) => return Err(e),
    };
    let mut hist: BTreeMap<i32, usize> = BTreeMap::new();
    for r in records {
        if let (Some(p), Some(w)) = (r.pre, r.week_later) {
            *hist.entry(i32::from(w.confidence) - i32::from(p.confidence)).or_default() += 1;
        }
    }
    let completers: usize = hist.values().sum();
    let scores: Vec<SummaryScores> = records.iter().filter_map(|r| r.summary).collect();
    Ok(StudyReport {
        participants: records.len(),
        care: care_summary(records),
        rulers,
        zero_confidence_delta_pct: (completers > 0)
            .then(|| 100.0 * hist.get(&0).copied().unwrap_or(0) as f64 / completers as f64),
        confidence_delta_histogram: hist.into_iter().collect(),
        misc: dataset_summary(&scores).ok(),
    })
}

/// Writes `report.json` plus one plot-ready CSV per figure; returns the files written.
pub fn write_report(dir: &Path, report: &StudyReport, records: &[ParticipantRecord]) -> Result<Vec<PathBuf>, StoreError> {
    fs::create_dir_all(dir).map_err(|e| io_err(dir, e))?;
    let json = dir.join("report.json");
    let body = serde_json::to_string_pretty(report).map_err(|e| io_err(&json, e))?;
    fs::write(&json, body + "\n").map_err(|e| io_err(&json, e))?;

    let hist = dir.join("confidence_delta_histogram.csv");
    let mut w = csv_writer(&hist)?;
    w.write_record(["delta", "participants"]).map_err(|e| io_err(&hist, e))?;
    for (d, n) in &report.confidence_delta_histogram {
        w.write_record([d.to_string(), n.to_string()]).map_err(|e| io_err(&hist, e))?;
    }
    w.flush().map_err(|e| io_err(&hist, e))?;

    let misc = dir.join("misc_metrics.csv");
    let mut w = csv_writer(&misc)?;
    w.write_record(["participant_id", "pct_mic", "rq_ratio", "pct_ct"]).map_err(|e| io_err(&misc, e))?;
    for r in records {
        if let Some(s) = &r.summary {
            w.write_record([r.participant_id.clone(), fmt_metric(s.pct_mic), fmt_metric(s.rq_ratio), fmt_metric(s.pct_ct)])
                .map_err(|e| io_err(&misc, e))?;
        }
    }
    w.flush().map_err(|e| io_err(&misc, e))?;

    let care = dir.join("care_questions.csv");
    let mut w = csv_writer(&care)?;
    w.write_record(["question", "mean"]).map_err(|e| io_err(&care, e))?;
    for (i, m) in report.care.question_means.iter().enumerate() {
        w.write_record([format!("CAREQ{}", i + 1), fmt_metric(*m)]).map_err(|e| io_err(&care, e))?;
    }
    w.flush().map_err(|e| io_err(&care, e))?;
    Ok(vec![json, hist, misc, care])
}

/// Participant records and transcripts behind one interface.
pub trait StudyStore: Send + Sync {
    fn put_record(&self, record: &ParticipantRecord) -> Result<(), StoreError>;
    fn put_transcript(&self, transcript: &AnnotatedTranscript) -> Result<(), StoreError>;
    fn record(&self, participant_id: &str) -> Option<ParticipantRecord>;
    fn records(&self) -> Vec<ParticipantRecord>;
    fn transcripts(&self) -> Vec<AnnotatedTranscript>;
}

#[derive(Debug, Default)]
struct Snapshot {
    records: BTreeMap<String, ParticipantRecord>,
    transcripts: BTreeMap<String, AnnotatedTranscript>,
}

#[derive(Debug, Default)]
pub struct MemoryStore {
    inner: RwLock<Snapshot>,
}

impl MemoryStore {
    pub fn new() -> Self {
        Self::default()
    }
}

impl StudyStore for MemoryStore {
    fn put_record(&self, record: &ParticipantRecord) -> Result<(), StoreError> {
        record.validate()?;
        self.inner
            .write()
            .expect("store lock poisoned")
            .records
            .insert(record.participant_id.clone(), record.clone());
        Ok(())
    }

    fn put_transcript(&self, t: &AnnotatedTranscript) -> Result<(), StoreError> {
        self.inner
            .write()
            .expect("store lock poisoned")
            .transcripts
            .insert(t.transcript.participant_id.clone(), t.clone());
        Ok(())
    }

    fn record(&self, participant_id: &str) -> Option<ParticipantRecord> {
        self.inner.read().expect("store lock poisoned").records.get(participant_id).cloned()
    }

    fn records(&self) -> Vec<ParticipantRecord> {
        self.inner.read().expect("store lock poisoned").records.values().cloned().collect()
    }

    fn transcripts(&self) -> Vec<AnnotatedTranscript> {
        self.inner.read().expect("store lock poisoned").transcripts.values().cloned().collect()
    }
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
enum JournalEntry {
    Record(Box<ParticipantRecord>),
    Transcript(AnnotatedTranscript),
}

/// Append-only JSON-lines journal; the latest entry per participant wins on replay.
#[derive(Debug)]
pub struct JournalStore {
    path: PathBuf,
    file: Mutex<File>,
    memory: MemoryStore,
}

impl JournalStore {
    pub fn open(path: &Path) -> Result<Self, StoreError> {
        let memory = MemoryStore::new();
        if path.exists() {
            let reader = BufReader::new(File::open(path).map_err(|e| io_err(path, e))?);
            for (i, line) in reader.lines().enumerate() {
                let line = line.map_err(|e| io_err(path, e))?;
                if line.trim().is_empty() {
                    continue;
                }
                let entry: JournalEntry = serde_json::from_str(&line)
                    .map_err(|e| StoreError::MalformedRow { line: i + 1, message: e.to_string() })?;
                match entry {
                    JournalEntry::Record(r) => memory.put_record(&r)?,
                    JournalEntry::Transcript(t) => memory.put_transcript(&t)?,
                }
            }
        }
        let file = OpenOptions::new().create(true).append(true).open(path).map_err(|e| io_err(path, e))?;
        Ok(JournalStore { path: path.to_path_buf(), file: Mutex::new(file), memory })
    }

    fn append(&self, entry: &JournalEntry) -> Result<(), StoreError> {
        let mut line = serde_json::to_string(entry).map_err(|e| io_err(&self.path, e))?;
        line.push('\n');
        let mut f = self.file.lock().expect("journal lock poisoned");
        f.write_all(line.as_bytes()).map_err(|e| io_err(&self.path, e))?;
        f.flush().map_err(|e| io_err(&self.path, e))
    }
}

impl StudyStore for JournalStore {
    fn put_record(&self, record: &ParticipantRecord) -> Result<(), StoreError> {
        record.validate()?;
        self.append(&JournalEntry::Record(Box::new(record.clone())))?;
        self.memory.put_record(record)
    }

    fn put_transcript(&self, t: &AnnotatedTranscript) -> Result<(), StoreError> {
        self.append(&JournalEntry::Transcript(t.clone()))?;
        self.memory.put_transcript(t)
    }

    fn record(&self, participant_id: &str) -> Option<ParticipantRecord> {
        self.memory.record(participant_id)
    }

    fn records(&self) -> Vec<ParticipantRecord> {
        self.memory.records()
    }

    fn transcripts(&self) -> Vec<AnnotatedTranscript> {
        self.memory.transcripts()
    }
}

/// Collapses whitespace in every volley and utterance.
pub fn normalize_transcript(t: &mut Transcript) {
    for v in &mut t.volleys {
        v.text = normalize_whitespace(&v.text);
        for u in &mut v.utterances {
            u.text = normalize_whitespace(&u.text);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::domain::{CareRating::*, Supercategory};
    use proptest::prelude::*;

    fn care(items: &[CareRating]) -> CareResponse {
        CareResponse::new(items.to_vec()).unwrap()
    }

    #[test]
    fn care_examples() {
        assert_eq!(score_care(&CareResponse::uniform(Excellent)), CareScore::Valid(50));
        assert_eq!(score_care(&CareResponse::uniform(Poor)), CareScore::Valid(10));
        let mut items = vec![Good; 10];
        items[..3].fill(DoesNotApply);
        assert_eq!(score_care(&care(&items)), CareScore::Invalid);
        // answered mean 4.25 rounds to 4
        let items = [DoesNotApply, DoesNotApply, Excellent, Excellent, VeryGood, VeryGood, VeryGood, VeryGood, VeryGood, VeryGood];
        assert_eq!(score_care(&care(&items)), CareScore::Valid(34 + 8));
    }

    #[test]
    fn hsi_examples() {
        let hsi = |cpd, ttfc| score_hsi(&SmokingProfile { cigarettes_per_day: cpd, time_to_first_cigarette: ttfc });
        assert_eq!(hsi(25, 10).unwrap(), HsiScore { value: 4, cpd_band: 2, ttfc_band: 2 });
        assert_eq!(hsi(5, 120).unwrap().value, 0);
        assert_eq!(hsi(40, 3).unwrap().value, 6);
        assert_eq!(hsi(10, 0), Err(StoreError::NonPositiveTtfc));
        for (cpd, band) in [(10, 0), (11, 1), (20, 1), (21, 2), (30, 2), (31, 3)] {
            assert_eq!(hsi(cpd, 61).unwrap().cpd_band, band);
        }
        for (ttfc, band) in [(5, 3), (6, 2), (30, 2), (31, 1), (60, 1), (61, 0)] {
            assert_eq!(hsi(0, ttfc).unwrap().ttfc_band, band);
        }
    }

    #[test]
    fn eligibility_examples() {
        let pre = |i, c| RulerTriple::new(i, c, 5, StudyPhase::Pre).unwrap();
        assert!(eligibility(&pre(0, 3)).unwrap());
        assert!(eligibility(&pre(6, 8)).unwrap());
        assert!(!eligibility(&pre(2, 9)).unwrap());
        let post = RulerTriple::new(2, 9, 5, StudyPhase::Post).unwrap();
        assert!(matches!(eligibility(&post), Err(StoreError::WrongPhase { .. })));
    }

    #[test]
    fn record_phase_order() {
        let mut r = ParticipantRecord::new("p");
        r.post = Some(RulerTriple::new(1, 1, 1, StudyPhase::Post).unwrap());
        assert!(r.validate().is_err());
        r.pre = Some(RulerTriple::new(1, 1, 1, StudyPhase::Pre).unwrap());
        assert!(r.validate().is_ok());
        r.week_later = Some(RulerTriple::new(1, 1, 1, StudyPhase::Post).unwrap());
        assert!(r.validate().is_err());
    }

    fn annotated() -> AnnotatedTranscript {
        let mut t = Transcript::new("P1", TranscriptSource::Live);
        t.push(Speaker::Counsellor, "Hi there!  How are you?");
        t.push(Speaker::Client, "Fine, thanks. I want to quit.");
        t.push(Speaker::Counsellor, "So you want to quit. Would you like to continue the conversation?");
        t.push_event(Speaker::Client, "Selected: Yes");
        let mut next = 0;
        let mut annotations = Vec::new();
        for v in &mut t.volleys {
            let parts = if v.system_event { vec![v.text.clone()] } else { crate::automisc::split_sentences(&v.text) };
            for p in parts {
                v.utterances.push(Utterance { index: next, speaker: v.speaker, text: p });
                if !v.system_event {
                    let code = match v.speaker {
                        Speaker::Counsellor => MiscCode::CounsellorGroup(Supercategory::Other),
                        Speaker::Client => MiscCode::Client(crate::domain::ClientCode::C),
                    };
                    annotations.push(Annotation { utterance_index: next, code, explanation: "why, \"quoted\"".into(), annotator_id: "a".into() });
                }
                next += 1;
            }
        }
        AnnotatedTranscript { transcript: t, annotations, annotator_id: "a".into() }
    }

    #[test]
    fn export_layout() {
        let dir = tempfile::tempdir().unwrap();
        let mut at = annotated();
        at.transcript.volleys.truncate(2);
        let mut rec = ParticipantRecord::new("P1");
        rec.pre = Some(RulerTriple::new(5, 3, 4, StudyPhase::Pre).unwrap());
        rec.care = Some(CareResponse::uniform(Excellent));
        let s = export_study_dataset(dir.path(), &[rec], &[at], &NoRedaction).unwrap();
        assert_eq!(s, ExportSummary { participants: 1, utterance_rows: 4 });
        let conv = fs::read_to_string(dir.path().join(CONVERSATIONS_FILE)).unwrap();
        let lines: Vec<&str> = conv.lines().collect();
        assert_eq!(lines[0], "ParticipantID,Speaker,Volley#,Utterance#,CumulativeVolley,Utterance,AutoMISCLabel,AutoMISCExplanation");
        assert_eq!(lines[1], r#"P1,counsellor,0,0,Hi there!,Hi there!,Other,"why, ""quoted""""#);
        assert!(lines[2].starts_with("P1,counsellor,0,1,Hi there!  How are you?,How are you?,"));
        assert!(!conv.contains('\r'));
        let data = fs::read_to_string(dir.path().join(DATA_FILE)).unwrap();
        assert_eq!(data.lines().next().unwrap().split(',').count(), 43);
    }

    #[test]
    fn empty_export_is_header_only() {
        let dir = tempfile::tempdir().unwrap();
        export_study_dataset(dir.path(), &[], &[], &NoRedaction).unwrap();
        assert_eq!(fs::read_to_string(dir.path().join(DATA_FILE)).unwrap().lines().count(), 1);
        assert_eq!(fs::read_to_string(dir.path().join(CONVERSATIONS_FILE)).unwrap().lines().count(), 1);
    }

    #[test]
    fn unparsed_transcripts_are_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let mut at = annotated();
        at.transcript.volleys[1].utterances.clear();
        assert!(matches!(
            export_study_dataset(dir.path(), &[], &[at], &NoRedaction),
            Err(StoreError::SchemaViolation(_))
        ));
    }

    #[test]
    fn study_csv_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let at = annotated();
        export_study_dataset(dir.path(), &[], std::slice::from_ref(&at), &NoRedaction).unwrap();
        let back = import_study_csv(dir.path()).unwrap();
        assert_eq!(back.len(), 1);
        assert!(same_structure(&back[0].transcript, &at.transcript));
        assert_eq!(back[0].transcript.source, TranscriptSource::Imported);
        assert_eq!(back[0].annotations.len(), at.annotations.len());
        assert!(back[0].transcript.volleys[3].system_event);
    }

    #[test]
    fn redaction() {
        let r = RegexRedactor::default();
        assert_eq!(r.redact("mail me at jo.smith@example.com or 416-555-0199"), "mail me at [EMAIL] or [PHONE]");
        assert_eq!(r.redact("I smoke 20 a day"), "I smoke 20 a day");
    }

    #[test]
    fn hlqc_parsing() {
        let t = parse_hlqc("T: Hello.\nHow are you?\nC: Fine.\nClient: Really.\n\nTherapist: Good.", "x").unwrap();
        assert_eq!(t.volleys.len(), 3);
        assert_eq!(t.volleys[0].text, "Hello. How are you?");
        assert_eq!(t.volleys[1].text, "Fine. Really.");
        assert_eq!(t.source, TranscriptSource::Imported);
        assert_eq!(
            parse_hlqc("T: hi\nNurse: hello", "x"),
            Err(StoreError::MalformedRow { line: 2, message: "unknown speaker tag \"Nurse\"".into() })
        );
        assert!(parse_hlqc("no tag", "x").is_err());
    }

    #[test]
    fn hlqc_directory_cohorts() {
        let dir = tempfile::tempdir().unwrap();
        for (sub, name) in [("HI", "a.txt"), ("LO", "b.txt")] {
            fs::create_dir_all(dir.path().join(sub)).unwrap();
            fs::write(dir.path().join(sub).join(name), "T: hi\nC: hello").unwrap();
        }
        let ts = import_transcripts(dir.path(), "hlqc".parse().unwrap()).unwrap();
        let cohorts: Vec<_> = ts.iter().map(|t| (t.participant_id.as_str(), t.cohort.as_deref())).collect();
        assert_eq!(cohorts, [("a", Some("HI")), ("b", Some("LO"))]);
        assert_eq!("xml".parse::<ImportFormat>(), Err(StoreError::UnknownFormat("xml".into())));
    }

    #[test]
    fn published_precision() {
        assert!(matches_published("93.33", Some(93.333333)));
        assert!(matches_published("93", Some(93.4)));
        assert!(!matches_published("93.3", Some(93.36)));
        assert!(matches_published("", None));
        assert!(!matches_published("1.5", None));
    }

    fn completer(id: &str, pre: (i64, i64, i64), week: (i64, i64, i64)) -> ParticipantRecord {
        let mut r = ParticipantRecord::new(id);
        r.pre = Some(RulerTriple::new(pre.0, pre.1, pre.2, StudyPhase::Pre).unwrap());
        r.post = Some(RulerTriple::new(pre.0, pre.1, pre.2, StudyPhase::Post).unwrap());
        r.week_later = Some(RulerTriple::new(week.0, week.1, week.2, StudyPhase::WeekLater).unwrap());
        r
    }

    #[test]
    fn ruler_delta_single_unchanged() {
        let g = ruler_deltas(&[completer("a", (5, 5, 5), (5, 5, 5))], Alternative::TwoSided, None).unwrap();
        assert_eq!(g[0].rows[1].mean_delta, 0.0);
        assert_eq!(g[0].rows[1].p_value, None);
        assert_eq!(ruler_deltas(&[ParticipantRecord::new("x")], Alternative::TwoSided, None), Err(StoreError::EmptyInput));
    }

    #[test]
    fn ruler_delta_grouping() {
        let mut a = completer("a", (5, 2, 5), (6, 5, 5));
        let mut b = completer("b", (5, 2, 5), (5, 3, 5));
        a.demographics.insert("Sex".into(), "Female".into());
        b.demographics.insert("Age".into(), "41".into());
        let g = ruler_deltas(&[a.clone(), b.clone()], Alternative::Greater, Some(GroupKey::Sex)).unwrap();
        assert_eq!(g.len(), 1);
        assert_eq!(g[0].group, "Female");
        let g = ruler_deltas(&[a, b], Alternative::Greater, Some(GroupKey::AgeBand)).unwrap();
        assert_eq!((g[0].group.as_str(), g[0].n), (">=30", 1));
    }

    #[test]
    fn report_single_perfect_care() {
        let mut r = completer("a", (5, 2, 5), (5, 2, 5));
        r.care = Some(CareResponse::uniform(Excellent));
        let rep = study_report(&[r.clone()]).unwrap();
        assert_eq!(rep.care.mean, Some(50.0));
        assert_eq!(rep.care.pct_perfect, Some(100.0));
        assert_eq!(rep.zero_confidence_delta_pct, Some(100.0));
        let dir = tempfile::tempdir().unwrap();
        let files = write_report(dir.path(), &rep, &[r]).unwrap();
        assert!(files.iter().all(|f| f.exists()));
        assert_eq!(study_report(&[]), Err(StoreError::EmptyInput));
    }

    #[test]
    fn data_csv_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let mut r = completer("a", (5, 2, 5), (6, 4, 7));
        r.smoking = Some(SmokingProfile { cigarettes_per_day: 12, time_to_first_cigarette: 20 });
        r.care = Some(care(&[Excellent, Good, DoesNotApply, Poor, Fair, VeryGood, Good, Good, Good, Good]));
        r.feedback = ["liked it".into(), "a, b".into(), String::new()];
        r.week_num_quit_attempts = Some(2);
        export_study_dataset(dir.path(), &[r.clone()], &[], &NoRedaction).unwrap();
        let back = read_data_csv(dir.path()).unwrap();
        assert_eq!(back, vec![r]);
    }

    #[test]
    fn journal_replays_latest() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("j.jsonl");
        {
            let s = JournalStore::open(&path).unwrap();
            s.put_record(&ParticipantRecord::new("a")).unwrap();
            let mut r = ParticipantRecord::new("a");
            r.feedback[0] = "second".into();
            s.put_record(&r).unwrap();
            s.put_transcript(&annotated()).unwrap();
        }
        let s = JournalStore::open(&path).unwrap();
        assert_eq!(s.records().len(), 1);
        assert_eq!(s.record("a").unwrap().feedback[0], "second");
        assert_eq!(s.transcripts(), vec![annotated()]);
    }

    fn rating() -> impl Strategy<Value = CareRating> {
        prop_oneof![Just(Poor), Just(Fair), Just(Good), Just(VeryGood), Just(Excellent), Just(DoesNotApply)]
    }

    proptest! {
        #[test]
        fn care_in_range(items in prop::collection::vec(rating(), 10)) {
            let missing = items.iter().filter(|r| **r == DoesNotApply).count();
            match score_care(&care(&items)) {
                CareScore::Valid(v) => { prop_assert!(missing <= 2); prop_assert!((10..=50).contains(&v)); }
                CareScore::Invalid => prop_assert!(missing > 2),
            }
        }

        #[test]
        fn hsi_in_range(cpd in 0u32..80, ttfc in 1u32..300) {
            let h = score_hsi(&SmokingProfile { cigarettes_per_day: cpd, time_to_first_cigarette: ttfc }).unwrap();
            prop_assert!(h.value <= 6);
            prop_assert_eq!(h.value, h.cpd_band + h.ttfc_band);
        }

        #[test]
        fn eligibility_low_branch_monotone(c in 0i64..=5, i in 0i64..=10) {
            let pre = RulerTriple::new(i, c, 0, StudyPhase::Pre).unwrap();
            prop_assert!(eligibility(&pre).unwrap());
            for lower in 0..c {
                prop_assert!(eligibility(&RulerTriple::new(i, lower, 0, StudyPhase::Pre).unwrap()).unwrap());
            }
        }
    }
}
