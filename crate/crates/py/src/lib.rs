//! Python module `milab`.

use std::collections::HashMap;
use std::sync::Arc;

use milab_core::automisc::{heuristic_reply, summary_metrics, AutoMisc, SummaryScores};
use milab_core::engine::{ContinueChoice, MessageKind, SessionMeta, SessionPhase};
use milab_core::gateway::ChatRequest;
use milab_core::stats::{
    self, collapse_label, Alternative, AgreementMatrix, MethodChoice,
};
use milab_core::store::{self, CareScore};
use milab_core::{
    CareRating, CareResponse, CounsellorEngine, EngineConfig, Gateway, MockBackend, PromptCatalog, RulerTriple,
    SessionState, SmokingProfile, StudyPhase, Transcript, TranscriptSource,
};
use pyo3::exceptions::{PyRuntimeError, PyValueError};
use pyo3::prelude::*;

fn value_err(e: impl std::fmt::Display) -> PyErr {
    PyValueError::new_err(e.to_string())
}

fn runtime_err(e: impl std::fmt::Display) -> PyErr {
    PyRuntimeError::new_err(e.to_string())
}

/// Five-way label for a counsellor code (MICO, MIIN, R, Q, Other) or the
/// client code itself.
#[pyfunction]
fn five_way_label(code: &str) -> String {
    collapse_label(code)
}

#[pyfunction]
fn supercategory(code: &str) -> PyResult<String> {
    let c: milab_core::CounsellorCode = code.parse().map_err(value_err)?;
    Ok(milab_core::supercategory(c).as_str().to_string())
}

/// CARE total from ten answers (1-5, or None for "does not apply"); None when
/// more than two answers are missing.
#[pyfunction]
fn score_care(answers: Vec<Option<i64>>) -> PyResult<Option<u32>> {
    let items = answers
        .into_iter()
        .map(|a| a.map_or(Ok(CareRating::DoesNotApply), CareRating::from_score))
        .collect::<Result<Vec<_>, _>>()
        .map_err(value_err)?;
    let care = CareResponse::new(items).map_err(value_err)?;
    Ok(match store::score_care(&care) {
        CareScore::Valid(v) => Some(v),
        CareScore::Invalid => None,
    })
}

/// Heaviness of Smoking Index.
#[pyfunction]
fn score_hsi(cigarettes_per_day: u32, minutes_to_first: u32) -> PyResult<u8> {
    let p = SmokingProfile { cigarettes_per_day, time_to_first_cigarette: minutes_to_first };
    Ok(store::score_hsi(&p).map_err(value_err)?.value)
}

#[pyfunction]
fn eligibility(importance: i64, confidence: i64, readiness: i64) -> PyResult<bool> {
    let pre = RulerTriple::new(importance, confidence, readiness, StudyPhase::Pre).map_err(value_err)?;
    store::eligibility(&pre).map_err(value_err)
}

#[pyfunction]
fn cohen_kappa(a: Vec<String>, b: Vec<String>) -> PyResult<f64> {
    stats::cohen_kappa(&a, &b).map_err(value_err)
}

/// Fleiss' kappa from an items x categories count matrix.
#[pyfunction]
fn fleiss_kappa(counts: Vec<Vec<u32>>) -> PyResult<f64> {
    let m = AgreementMatrix::new(counts).map_err(value_err)?;
    stats::fleiss_kappa(&m).map_err(value_err)
}

/// `(kappa, variance, z, p_two_sided)` under the chance-agreement null.
#[pyfunction]
fn fleiss_significance(counts: Vec<Vec<u32>>) -> PyResult<(f64, f64, f64, f64)> {
    let m = AgreementMatrix::new(counts).map_err(value_err)?;
    let s = stats::fleiss_significance(&m).map_err(value_err)?;
    Ok((s.kappa, s.variance, s.z, s.p_two_sided))
}

#[pyfunction]
#[pyo3(signature = (counts, alpha=0.05, n_sims=1000, seed=0))]
fn posthoc_power(counts: Vec<Vec<u32>>, alpha: f64, n_sims: usize, seed: u64) -> PyResult<f64> {
    let m = AgreementMatrix::new(counts).map_err(value_err)?;
    stats::posthoc_power(&m, alpha, n_sims, seed).map_err(value_err)
}

/// Wilcoxon signed-rank test on `after - before`. Returns `(statistic, p_value, method)`.
#[pyfunction]
#[pyo3(signature = (before, after, alternative="two-sided", method="auto"))]
fn wilcoxon(before: Vec<f64>, after: Vec<f64>, alternative: &str, method: &str) -> PyResult<(f64, f64, String)> {
    let alternative = match alternative {
        "two-sided" => Alternative::TwoSided,
        "greater" => Alternative::Greater,
        "less" => Alternative::Less,
        other => return Err(value_err(format!("unknown alternative {other:?}"))),
    };
    let method = match method {
        "auto" => MethodChoice::Auto,
        "exact" => MethodChoice::Exact,
        "normal" => MethodChoice::Normal,
        other => return Err(value_err(format!("unknown method {other:?}"))),
    };
    let r = stats::wilcoxon_signed_rank(&before, &after, alternative, method).map_err(value_err)?;
    let m = match r.method {
        stats::TestMethod::Exact => "exact",
        stats::TestMethod::NormalApprox => "normal",
    };
    Ok((r.statistic, r.p_value, m.to_string()))
}

type Metrics = HashMap<&'static str, Option<f64>>;
/// `(utterance text, code)` pairs and the summary metrics.
type Annotated = (Vec<(String, String)>, Metrics);

fn scores_dict(s: &SummaryScores) -> HashMap<&'static str, Option<f64>> {
    HashMap::from([("pct_mic", s.pct_mic), ("rq_ratio", s.rq_ratio), ("pct_ct", s.pct_ct)])
}

/// `%MIC`, `R:Q` and `%CT` from a list of MISC codes; undefined ratios are None.
#[pyfunction]
fn summary_metrics_from_labels(labels: Vec<String>) -> PyResult<HashMap<&'static str, Option<f64>>> {
    let s = SummaryScores::from_labels(labels.iter().map(String::as_str)).map_err(value_err)?;
    Ok(scores_dict(&s))
}

/// Wraps a Python callable `(agent, system_prompt, [(role, text), ...]) -> str | None`.
/// None falls back to the built-in keyword heuristics for parser and annotators.
fn python_gateway(responder: Py<PyAny>) -> Gateway {
    let responder = Arc::new(responder);
    let mock = MockBackend::new().with_responder(move |req: &ChatRequest| {
        let messages: Vec<(String, String)> = req
            .messages
            .iter()
            .map(|m| (format!("{:?}", m.role).to_lowercase(), m.text.clone()))
            .collect();
        let reply = Python::attach(|py| {
            responder
                .call1(py, (req.agent.clone(), req.system_prompt.clone(), messages))
                .and_then(|r| r.extract::<Option<String>>(py))
        });
        match reply {
            Ok(Some(text)) => Some(text),
            Ok(None) => heuristic_reply(req),
            Err(e) => {
                Python::attach(|py| e.print(py));
                None
            }
        }
    });
    Gateway::mock(mock)
}

fn kind_name(k: MessageKind) -> &'static str {
    match k {
        MessageKind::Turn => "turn",
        MessageKind::Summary => "summary",
        MessageKind::ContinueQuestion => "continue-question",
        MessageKind::Farewell => "farewell",
        MessageKind::Apology => "apology",
    }
}

fn phase_name(p: SessionPhase) -> &'static str {
    match p {
        SessionPhase::Active => "active",
        SessionPhase::AwaitContinue => "await-continue",
        SessionPhase::Closed => "closed",
    }
}

/// One counsellor conversation driven by a Python responder standing in for
/// the language model.
#[pyclass]
struct Session {
    engine: CounsellorEngine,
    state: SessionState,
}

#[pymethods]
impl Session {
    #[new]
    #[pyo3(signature = (responder, participant_id="py", profile="final", client_name=None))]
    fn new(responder: Py<PyAny>, participant_id: &str, profile: &str, client_name: Option<String>) -> PyResult<Self> {
        let config = EngineConfig { profile: profile.to_string(), ..EngineConfig::default() };
        let engine = CounsellorEngine::new(python_gateway(responder), PromptCatalog::builtin(), config);
        let meta = SessionMeta { participant_id: participant_id.to_string(), client_name };
        let state = engine.open(meta, TranscriptSource::Live).map_err(runtime_err)?;
        Ok(Session { engine, state })
    }

    #[getter]
    fn phase(&self) -> &'static str {
        phase_name(self.state.phase)
    }

    /// Sends a client message; returns the counsellor messages as `(kind, text)`.
    fn send(&mut self, text: &str) -> PyResult<Vec<(String, String)>> {
        let adv = self.engine.advance(&mut self.state, text).map_err(runtime_err)?;
        Ok(adv.messages.into_iter().map(|m| (kind_name(m.kind).to_string(), m.text)).collect())
    }

    /// Answers the continue question.
    fn choose(&mut self, keep_going: bool) -> PyResult<Vec<(String, String)>> {
        let choice = if keep_going { ContinueChoice::Yes } else { ContinueChoice::No };
        let adv = self.engine.choose(&mut self.state, choice).map_err(runtime_err)?;
        Ok(adv.messages.into_iter().map(|m| (kind_name(m.kind).to_string(), m.text)).collect())
    }

    /// `(speaker, text)` for every volley so far.
    fn transcript(&self) -> Vec<(String, String)> {
        self.state
            .transcript
            .volleys
            .iter()
            .map(|v| (format!("{:?}", v.speaker).to_lowercase(), v.text.clone()))
            .collect()
    }

    /// Runs the annotation pipeline on the closed conversation. Returns
    /// `(labels, metrics)` where labels are `(utterance text, code)`.
    #[pyo3(signature = (responder, context=5))]
    fn annotate(
        &self,
        responder: Py<PyAny>,
        context: usize,
    ) -> PyResult<Annotated> {
        if self.state.phase != SessionPhase::Closed {
            return Err(runtime_err("the conversation has not ended"));
        }
        annotate_transcript(self.state.transcript.clone(), responder, context)
    }
}

fn annotate_transcript(
    t: Transcript,
    responder: Py<PyAny>,
    context: usize,
) -> PyResult<Annotated> {
    let pipeline = AutoMisc::new(python_gateway(responder), PromptCatalog::builtin()).with_context(context);
    let at = pipeline.annotate_transcript(t).map_err(runtime_err)?;
    let text: HashMap<usize, &str> = at.transcript.utterances().map(|u| (u.index, u.text.as_str())).collect();
    let labels = at
        .annotations
        .iter()
        .map(|a| (text.get(&a.utterance_index).copied().unwrap_or_default().to_string(), a.code.as_str().to_string()))
        .collect();
    let scores = summary_metrics(&at).map_err(runtime_err)?;
    Ok((labels, scores_dict(&scores)))
}

/// Annotates a transcript given as `(speaker, text)` pairs.
#[pyfunction]
#[pyo3(signature = (volleys, responder, participant_id="py", context=5))]
fn annotate(
    volleys: Vec<(String, String)>,
    responder: Py<PyAny>,
    participant_id: &str,
    context: usize,
) -> PyResult<Annotated> {
    let mut t = Transcript::new(participant_id, TranscriptSource::Imported);
    for (speaker, text) in volleys {
        let speaker = match speaker.to_ascii_lowercase().as_str() {
            "counsellor" | "counselor" | "therapist" => milab_core::Speaker::Counsellor,
            "client" => milab_core::Speaker::Client,
            other => return Err(value_err(format!("unknown speaker {other:?}"))),
        };
        t.push(speaker, text);
    }
    annotate_transcript(t, responder, context)
}

#[pymodule]
fn milab(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_function(wrap_pyfunction!(five_way_label, m)?)?;
    m.add_function(wrap_pyfunction!(supercategory, m)?)?;
    m.add_function(wrap_pyfunction!(score_care, m)?)?;
    m.add_function(wrap_pyfunction!(score_hsi, m)?)?;
    m.add_function(wrap_pyfunction!(eligibility, m)?)?;
    m.add_function(wrap_pyfunction!(cohen_kappa, m)?)?;
    m.add_function(wrap_pyfunction!(fleiss_kappa, m)?)?;
    m.add_function(wrap_pyfunction!(fleiss_significance, m)?)?;
    m.add_function(wrap_pyfunction!(posthoc_power, m)?)?;
    m.add_function(wrap_pyfunction!(wilcoxon, m)?)?;
    m.add_function(wrap_pyfunction!(summary_metrics_from_labels, m)?)?;
    m.add_function(wrap_pyfunction!(annotate, m)?)?;
    m.add_class::<Session>()?;
    Ok(())
}
