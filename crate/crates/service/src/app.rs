use std::collections::HashMap;
use std::sync::{Arc, RwLock};
use std::time::Duration;

use axum::body::Bytes;
use axum::extract::{Path, State};
use axum::http::StatusCode;
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use milab_core::automisc::{summary_metrics, AnnotatedTranscript, AutoMisc, AutoMiscError, SummaryScores};
use milab_core::engine::{
    CounsellorMessage, ContinueChoice, MessageKind, SessionMeta, SessionPhase, SessionState, APOLOGY,
};
use milab_core::store::{eligibility, score_hsi, ParticipantRecord, StudyStore};
use milab_core::{
    CareRating, CareResponse, CounsellorEngine, EngineError, RulerTriple, SmokingProfile, Speaker, StudyPhase,
    TranscriptSource, CARE_ITEMS,
};
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use thiserror::Error;
use tokio::sync::Mutex;

use crate::token::{Clock, TokenError, WeekToken, WeekTokens};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum StudyStage {
    PreSurvey,
    Conversation,
    PostSurvey,
    WeekLater,
    Done,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BusyMode {
    /// A second request on the same session waits its turn.
    Queue,
    /// A second request on the same session gets 409 busy.
    Reject,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ServiceOptions {
    pub busy_mode: BusyMode,
    pub handler_timeout: Duration,
}

impl Default for ServiceOptions {
    fn default() -> Self {
        ServiceOptions { busy_mode: BusyMode::Queue, handler_timeout: Duration::from_secs(180) }
    }
}

#[derive(Debug, Error)]
pub enum ApiError {
    #[error("unknown session")]
    UnknownSession,
    #[error("malformed request: {0}")]
    BadRequest(String),
    #[error("{0}")]
    ValidationFailed(String),
    #[error("operation needs study phase {expected:?}, session is in {found:?}")]
    WrongPhase { expected: StudyStage, found: StudyStage },
    #[error("the conversation is waiting for a continue choice or is not waiting for one")]
    ConversationPhase,
    #[error("the conversation has ended")]
    SessionClosed,
    #[error("another request for this session is in progress")]
    Busy,
    #[error("{0}")]
    Token(#[from] TokenError),
    #[error("language model unavailable: {0}")]
    Upstream(String),
    #[error("request timed out")]
    Timeout,
    #[error("internal error: {0}")]
    Internal(String),
}

impl ApiError {
    fn status(&self) -> StatusCode {
        match self {
            ApiError::UnknownSession => StatusCode::NOT_FOUND,
            ApiError::BadRequest(_) => StatusCode::BAD_REQUEST,
            ApiError::ValidationFailed(_) => StatusCode::UNPROCESSABLE_ENTITY,
            ApiError::WrongPhase { .. } | ApiError::ConversationPhase | ApiError::SessionClosed | ApiError::Busy => {
                StatusCode::CONFLICT
            }
            ApiError::Token(_) => StatusCode::FORBIDDEN,
            ApiError::Upstream(_) | ApiError::Timeout => StatusCode::SERVICE_UNAVAILABLE,
            ApiError::Internal(_) => StatusCode::INTERNAL_SERVER_ERROR,
        }
    }

    fn code(&self) -> &'static str {
        match self {
            ApiError::UnknownSession => "unknown-session",
            ApiError::BadRequest(_) => "bad-request",
            ApiError::ValidationFailed(_) => "validation-failed",
            ApiError::WrongPhase { .. } => "wrong-phase",
            ApiError::ConversationPhase => "conversation-phase",
            ApiError::SessionClosed => "session-closed",
            ApiError::Busy => "busy",
            ApiError::Token(TokenError::NotYet { .. }) => "not-yet-available",
            ApiError::Token(TokenError::Invalid) => "invalid-token",
            ApiError::Upstream(_) => "upstream-unavailable",
            ApiError::Timeout => "timeout",
            ApiError::Internal(_) => "internal",
        }
    }
}

#[derive(Debug, Serialize, Deserialize)]
pub struct ErrorBody {
    pub error: String,
    pub message: String,
    pub retryable: bool,
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        let status = self.status();
        // Upstream details can echo request content; keep them in the log.
        let message = match &self {
            ApiError::Upstream(detail) | ApiError::Internal(detail) => {
                tracing::warn!(%detail, "request failed");
                "please try again shortly".to_string()
            }
            other => other.to_string(),
        };
        let body = ErrorBody { error: self.code().into(), message, retryable: status == StatusCode::SERVICE_UNAVAILABLE };
        (status, Json(body)).into_response()
    }
}

fn engine_error(e: EngineError) -> ApiError {
    match e {
        EngineError::SessionClosed => ApiError::SessionClosed,
        EngineError::InvalidPhase { .. } => ApiError::ConversationPhase,
        EngineError::Gateway(g) => ApiError::Upstream(g.to_string()),
        EngineError::UnparseableLabel { .. } | EngineError::EmptyCandidate => ApiError::Upstream(e.to_string()),
        other => ApiError::Internal(other.to_string()),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum SurveyKind {
    Pre,
    Post,
    Week,
}

impl SurveyKind {
    fn stage(self) -> StudyStage {
        match self {
            SurveyKind::Pre => StudyStage::PreSurvey,
            SurveyKind::Post => StudyStage::PostSurvey,
            SurveyKind::Week => StudyStage::WeekLater,
        }
    }
}

#[derive(Debug)]
struct Session {
    id: String,
    stage: StudyStage,
    ineligible: bool,
    record: ParticipantRecord,
    conversation: Option<SessionState>,
    annotated: Option<AnnotatedTranscript>,
    last_survey: Option<SurveyKind>,
    week_token: Option<WeekToken>,
    client_name: Option<String>,
    consent: bool,
}

impl Session {
    fn client_spoke(&self) -> bool {
        self.conversation.as_ref().is_some_and(|c| c.transcript.count_speaker(Speaker::Client) > 0)
    }

    /// Whether `kind` may be (re)submitted now. A survey can be resubmitted
    /// until the participant does something in the following stage.
    fn accepts(&self, kind: SurveyKind) -> bool {
        if self.stage == kind.stage() {
            return true;
        }
        self.last_survey == Some(kind)
            && match kind {
                SurveyKind::Pre => {
                    (self.stage == StudyStage::Conversation && !self.client_spoke())
                        || (self.stage == StudyStage::Done && self.ineligible)
                }
                SurveyKind::Post => self.stage == StudyStage::WeekLater,
                SurveyKind::Week => self.stage == StudyStage::Done,
            }
    }
}

pub struct AppState {
    engine: Arc<CounsellorEngine>,
    automisc: Arc<AutoMisc>,
    store: Arc<dyn StudyStore>,
    sessions: RwLock<HashMap<String, Arc<Mutex<Session>>>>,
    tokens: WeekTokens,
    clock: Arc<dyn Clock>,
    options: ServiceOptions,
}

impl AppState {
    pub fn new(
        engine: CounsellorEngine,
        automisc: AutoMisc,
        store: Arc<dyn StudyStore>,
        tokens: WeekTokens,
        clock: Arc<dyn Clock>,
        options: ServiceOptions,
    ) -> Arc<Self> {
        Arc::new(AppState {
            engine: Arc::new(engine),
            automisc: Arc::new(automisc),
            store,
            sessions: RwLock::new(HashMap::new()),
            tokens,
            clock,
            options,
        })
    }

    fn session(&self, id: &str) -> Result<Arc<Mutex<Session>>, ApiError> {
        self.sessions.read().expect("session map poisoned").get(id).cloned().ok_or(ApiError::UnknownSession)
    }

    async fn lock<'a>(&self, s: &'a Mutex<Session>) -> Result<tokio::sync::MutexGuard<'a, Session>, ApiError> {
        match self.options.busy_mode {
            BusyMode::Queue => Ok(s.lock().await),
            BusyMode::Reject => s.try_lock().map_err(|_| ApiError::Busy),
        }
    }

    /// Runs blocking model work off the async executor, bounded by the handler timeout.
    async fn blocking<T: Send + 'static>(&self, f: impl FnOnce() -> T + Send + 'static) -> Result<T, ApiError> {
        match tokio::time::timeout(self.options.handler_timeout, tokio::task::spawn_blocking(f)).await {
            Ok(Ok(v)) => Ok(v),
            Ok(Err(e)) => Err(ApiError::Internal(e.to_string())),
            Err(_) => Err(ApiError::Timeout),
        }
    }

    fn persist(&self, s: &Session) -> Result<(), ApiError> {
        self.store.put_record(&s.record).map_err(|e| ApiError::Internal(e.to_string()))
    }

    fn persist_transcript(&self, s: &Session) -> Result<(), ApiError> {
        let at = match (&s.annotated, &s.conversation) {
            (Some(at), _) => at.clone(),
            (None, Some(c)) => AnnotatedTranscript {
                transcript: c.transcript.clone(),
                annotations: Vec::new(),
                annotator_id: String::new(),
            },
            (None, None) => return Ok(()),
        };
        self.store.put_transcript(&at).map_err(|e| ApiError::Internal(e.to_string()))
    }
}

pub fn router(state: Arc<AppState>) -> Router {
    Router::new()
        .route("/healthz", get(healthz))
        .route("/sessions", post(create_session))
        .route("/sessions/{id}/surveys/{kind}", post(submit_survey))
        .route("/sessions/{id}/messages", post(post_message))
        .route("/sessions/{id}/continue", post(post_continue))
        .route("/sessions/{id}/transcript", get(get_transcript))
        .route("/sessions/{id}/annotate", post(annotate))
        .with_state(state)
}

fn parse_body<T: DeserializeOwned + Default>(body: &Bytes, allow_empty: bool) -> Result<T, ApiError> {
    if allow_empty && body.iter().all(u8::is_ascii_whitespace) {
        return Ok(T::default());
    }
    serde_json::from_slice(body).map_err(|e| ApiError::BadRequest(e.to_string()))
}

#[derive(Debug, Serialize, Deserialize)]
pub struct ConversationView {
    pub status: SessionPhase,
    pub volleys: usize,
}

#[derive(Debug, Serialize, Deserialize)]
pub struct Envelope {
    pub session_id: String,
    pub phase: StudyStage,
    pub ineligible: bool,
    pub consent: bool,
    pub conversation: Option<ConversationView>,
}

fn envelope(s: &Session) -> Envelope {
    Envelope {
        session_id: s.id.clone(),
        phase: s.stage,
        ineligible: s.ineligible,
        consent: s.consent,
        conversation: s
            .conversation
            .as_ref()
            .map(|c| ConversationView { status: c.phase, volleys: c.transcript.volleys.len() }),
    }
}

async fn healthz() -> Json<serde_json::Value> {
    Json(serde_json::json!({ "status": "ok" }))
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct CreateSession {
    participant_id: Option<String>,
    client_name: Option<String>,
    #[serde(default)]
    consent: bool,
}

async fn create_session(State(app): State<Arc<AppState>>, body: Bytes) -> Result<(StatusCode, Json<Envelope>), ApiError> {
    let req: CreateSession = parse_body(&body, true)?;
    let id = uuid::Uuid::new_v4().simple().to_string();
    let participant_id = req.participant_id.filter(|p| !p.trim().is_empty()).unwrap_or_else(|| id.clone());
    let session = Session {
        id: id.clone(),
        stage: StudyStage::PreSurvey,
        ineligible: false,
        record: ParticipantRecord::new(participant_id.clone()),
        conversation: None,
        annotated: None,
        last_survey: None,
        week_token: None,
        client_name: req.client_name.filter(|n| !n.trim().is_empty()),
        consent: req.consent,
    };
    let env = envelope(&session);
    app.sessions.write().expect("session map poisoned").insert(id, Arc::new(Mutex::new(session)));
    tracing::info!(participant = %participant_id, "session created");
    Ok((StatusCode::CREATED, Json(env)))
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct RulerInput {
    importance: i64,
    confidence: i64,
    readiness: i64,
}

impl RulerInput {
    fn triple(&self, phase: StudyPhase) -> Result<RulerTriple, ApiError> {
        RulerTriple::new(self.importance, self.confidence, self.readiness, phase)
            .map_err(|e| ApiError::ValidationFailed(e.to_string()))
    }
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct PreSurvey {
    rulers: RulerInput,
    smoking: Option<SmokingProfile>,
    quit_attempt: Option<String>,
    num_quit_attempts: Option<u32>,
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct PostSurvey {
    rulers: RulerInput,
    care: Vec<serde_json::Value>,
    #[serde(default)]
    feedback: Vec<String>,
    liked_bot: Option<String>,
    found_bot_helpful: Option<String>,
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct WeekSurvey {
    token: String,
    rulers: RulerInput,
    quit_attempt: Option<String>,
    num_quit_attempts: Option<u32>,
}

fn care_item(v: &serde_json::Value) -> Result<CareRating, ApiError> {
    let parsed = match v {
        serde_json::Value::Number(n) => n.as_i64().ok_or(()).and_then(|n| CareRating::from_score(n).map_err(|_| ())),
        serde_json::Value::String(s) => s.parse::<CareRating>().map_err(|_| ()),
        serde_json::Value::Null => Ok(CareRating::DoesNotApply),
        _ => Err(()),
    };
    parsed.map_err(|_| ApiError::ValidationFailed(format!("invalid CARE answer {v}")))
}

#[derive(Debug, Serialize, Deserialize)]
pub struct SurveyAck {
    pub phase: StudyStage,
    pub ineligible: bool,
    /// Opening counsellor message when the conversation starts.
    pub messages: Vec<CounsellorMessage>,
    pub week_token: Option<WeekToken>,
}

async fn submit_survey(
    State(app): State<Arc<AppState>>,
    Path((id, kind)): Path<(String, String)>,
    body: Bytes,
) -> Result<Json<SurveyAck>, ApiError> {
    let kind = match kind.as_str() {
        "pre" => SurveyKind::Pre,
        "post" => SurveyKind::Post,
        "week" => SurveyKind::Week,
        other => return Err(ApiError::BadRequest(format!("unknown survey {other:?}"))),
    };
    let session = app.session(&id)?;
    let mut s = app.lock(&session).await?;
    if !s.accepts(kind) {
        return Err(ApiError::WrongPhase { expected: kind.stage(), found: s.stage });
    }
    let mut messages = Vec::new();
    match kind {
        SurveyKind::Pre => {
            let p: PreSurvey = parse_body(&body, false)?;
            let pre = p.rulers.triple(StudyPhase::Pre)?;
            if let Some(sp) = &p.smoking {
                score_hsi(sp).map_err(|e| ApiError::ValidationFailed(e.to_string()))?;
            }
            if s.stage == StudyStage::PreSurvey {
                let eligible = eligibility(&pre).map_err(|e| ApiError::Internal(e.to_string()))?;
                if eligible {
                    let meta = SessionMeta {
                        participant_id: s.record.participant_id.clone(),
                        client_name: s.client_name.clone(),
                    };
                    let engine = app.engine.clone();
                    let state = app.blocking(move || engine.open(meta, TranscriptSource::Live)).await?.map_err(engine_error)?;
                    messages = state
                        .transcript
                        .volleys
                        .iter()
                        .map(|v| CounsellorMessage { volley_index: v.index, kind: MessageKind::Turn, text: v.text.clone() })
                        .collect();
                    s.conversation = Some(state);
                    s.stage = StudyStage::Conversation;
                } else {
                    s.ineligible = true;
                    s.stage = StudyStage::Done;
                }
            }
            s.record.pre = Some(pre);
            s.record.smoking = p.smoking;
            s.record.pre_quit_attempt = p.quit_attempt;
            s.record.pre_num_quit_attempts = p.num_quit_attempts;
        }
        SurveyKind::Post => {
            let p: PostSurvey = parse_body(&body, false)?;
            let post = p.rulers.triple(StudyPhase::Post)?;
            if p.care.len() != CARE_ITEMS {
                return Err(ApiError::ValidationFailed(format!("CARE needs {CARE_ITEMS} answers, got {}", p.care.len())));
            }
            let items = p.care.iter().map(care_item).collect::<Result<Vec<_>, _>>()?;
            let care = CareResponse::new(items).map_err(|e| ApiError::ValidationFailed(e.to_string()))?;
            if p.feedback.len() > 3 {
                return Err(ApiError::ValidationFailed("at most three feedback answers".into()));
            }
            s.record.post = Some(post);
            s.record.care = Some(care);
            s.record.feedback = Default::default();
            for (slot, text) in s.record.feedback.iter_mut().zip(p.feedback) {
                *slot = text;
            }
            s.record.liked_bot = p.liked_bot;
            s.record.found_bot_helpful = p.found_bot_helpful;
            if s.week_token.is_none() {
                s.week_token = Some(app.tokens.issue(&s.id, app.clock.now()));
            }
            s.stage = StudyStage::WeekLater;
        }
        SurveyKind::Week => {
            let p: WeekSurvey = parse_body(&body, false)?;
            app.tokens.verify(&s.id, &p.token, app.clock.now())?;
            s.record.week_later = Some(p.rulers.triple(StudyPhase::WeekLater)?);
            s.record.week_quit_attempt = p.quit_attempt;
            s.record.week_num_quit_attempts = p.num_quit_attempts;
            s.stage = StudyStage::Done;
        }
    }
    s.last_survey = Some(kind);
    app.persist(&s)?;
    Ok(Json(SurveyAck {
        phase: s.stage,
        ineligible: s.ineligible,
        messages,
        week_token: if kind == SurveyKind::Post { s.week_token.clone() } else { None },
    }))
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct MessageInput {
    text: String,
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct ContinueInput {
    choice: String,
}

#[derive(Debug, Serialize, Deserialize)]
pub struct MessageReply {
    pub phase: StudyStage,
    pub conversation: SessionPhase,
    pub messages: Vec<CounsellorMessage>,
}

enum Step {
    Message(String),
    Choice(ContinueChoice),
}

async fn run_step(app: &AppState, id: &str, step: Step) -> Result<Json<MessageReply>, ApiError> {
    let session = app.session(id)?;
    let mut s = app.lock(&session).await?;
    let state = match &s.conversation {
        Some(c) if c.is_closed() => return Err(ApiError::SessionClosed),
        Some(c) if s.stage == StudyStage::Conversation => c.clone(),
        _ => return Err(ApiError::WrongPhase { expected: StudyStage::Conversation, found: s.stage }),
    };
    let engine = app.engine.clone();
    let (state, result) = app
        .blocking(move || {
            let mut state = state;
            let r = match step {
                Step::Message(text) => engine.advance(&mut state, &text),
                Step::Choice(choice) => engine.choose(&mut state, choice),
            };
            (state, r)
        })
        .await?;
    let messages = match result {
        Ok(adv) => adv.messages,
        Err(EngineError::ModerationExhausted) => {
            let volley_index = state.transcript.volleys.len() - 1;
            vec![CounsellorMessage { volley_index, kind: MessageKind::Apology, text: APOLOGY.to_string() }]
        }
        Err(e) => return Err(engine_error(e)),
    };
    let closed = state.is_closed();
    let phase = state.phase;
    s.conversation = Some(state);
    if closed {
        s.stage = StudyStage::PostSurvey;
        app.persist_transcript(&s)?;
    }
    Ok(Json(MessageReply { phase: s.stage, conversation: phase, messages }))
}

async fn post_message(
    State(app): State<Arc<AppState>>,
    Path(id): Path<String>,
    body: Bytes,
) -> Result<Json<MessageReply>, ApiError> {
    let m: MessageInput = parse_body(&body, false)?;
    if m.text.trim().is_empty() {
        return Err(ApiError::ValidationFailed("message is empty".into()));
    }
    run_step(&app, &id, Step::Message(m.text)).await
}

async fn post_continue(
    State(app): State<Arc<AppState>>,
    Path(id): Path<String>,
    body: Bytes,
) -> Result<Json<MessageReply>, ApiError> {
    let c: ContinueInput = parse_body(&body, false)?;
    let choice = match c.choice.trim().to_ascii_lowercase().as_str() {
        "yes" => ContinueChoice::Yes,
        "no" => ContinueChoice::No,
        other => return Err(ApiError::ValidationFailed(format!("choice must be yes or no, got {other:?}"))),
    };
    run_step(&app, &id, Step::Choice(choice)).await
}

#[derive(Debug, Serialize, Deserialize)]
pub struct UtteranceView {
    pub index: usize,
    pub text: String,
    pub label: Option<String>,
}

#[derive(Debug, Serialize, Deserialize)]
pub struct VolleyView {
    pub index: usize,
    pub speaker: Speaker,
    pub text: String,
    pub system_event: bool,
    pub utterances: Vec<UtteranceView>,
}

#[derive(Debug, Serialize, Deserialize)]
pub struct TranscriptView {
    pub session_id: String,
    pub phase: StudyStage,
    pub conversation: Option<SessionPhase>,
    pub volleys: Vec<VolleyView>,
    pub annotated: bool,
    pub summary: Option<SummaryScores>,
}

async fn get_transcript(State(app): State<Arc<AppState>>, Path(id): Path<String>) -> Result<Json<TranscriptView>, ApiError> {
    let session = app.session(&id)?;
    let s = session.lock().await;
    let labels: HashMap<usize, String> = s
        .annotated
        .iter()
        .flat_map(|at| at.annotations.iter().map(|a| (a.utterance_index, a.code.as_str().to_string())))
        .collect();
    let transcript = s.annotated.as_ref().map(|a| &a.transcript).or(s.conversation.as_ref().map(|c| &c.transcript));
    let volleys = transcript
        .map(|t| {
            t.volleys
                .iter()
                .map(|v| VolleyView {
                    index: v.index,
                    speaker: v.speaker,
                    text: v.text.clone(),
                    system_event: v.system_event,
                    utterances: v
                        .utterances
                        .iter()
                        .map(|u| UtteranceView { index: u.index, text: u.text.clone(), label: labels.get(&u.index).cloned() })
                        .collect(),
                })
                .collect()
        })
        .unwrap_or_default();
    Ok(Json(TranscriptView {
        session_id: s.id.clone(),
        phase: s.stage,
        conversation: s.conversation.as_ref().map(|c| c.phase),
        volleys,
        annotated: s.annotated.is_some(),
        summary: s.record.summary,
    }))
}

async fn annotate(State(app): State<Arc<AppState>>, Path(id): Path<String>) -> Result<Json<TranscriptView>, ApiError> {
    {
        let session = app.session(&id)?;
        let mut s = app.lock(&session).await?;
        let transcript = match &s.conversation {
            Some(c) if c.is_closed() => c.transcript.clone(),
            _ => return Err(ApiError::WrongPhase { expected: StudyStage::PostSurvey, found: s.stage }),
        };
        let automisc = app.automisc.clone();
        let at = app
            .blocking(move || automisc.annotate_transcript(transcript))
            .await?
            .map_err(|e| match e {
                AutoMiscError::Gateway(g) => ApiError::Upstream(g.to_string()),
                other => ApiError::Upstream(other.to_string()),
            })?;
        s.record.summary = Some(summary_metrics(&at).map_err(|e| ApiError::Internal(e.to_string()))?);
        s.annotated = Some(at);
        app.persist(&s)?;
        app.persist_transcript(&s)?;
    }
    get_transcript(State(app), Path(id)).await
}

impl std::fmt::Debug for AppState {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("AppState").field("options", &self.options).finish_non_exhaustive()
    }
}
