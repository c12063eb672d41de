//! The work behind each CLI subcommand.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use milab_core::automisc::{dataset_summary, AnnotatedTranscript, AutoMisc, DatasetSummary, SummaryScores};
use milab_core::selfplay::{run_batch, Backstory, SelfPlayConfig};
use milab_core::stats::{
    collapse_label, fleiss_significance, posthoc_power, Alternative, FleissSignificance, PairwiseKappa, RatingTable,
};
use milab_core::store::{
    attach_demographics, export_study_dataset, import_hlqc, import_study_csv, read_data_csv, ruler_deltas,
    study_report, write_conversations, write_report, GroupKey, JournalStore, MemoryStore, NoRedaction,
    RegexRedactor, Redactor, StudyStore, CONVERSATIONS_FILE,
};
use milab_core::{
    CounsellorEngine, EngineConfig, Gateway, MockBackend, PromptCatalog, Transcript,
};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::app::AppState;
use crate::config::{Backend, ServiceConfig};
use crate::offline::{offline_backend, offline_reply};
use crate::token::{Clock, WeekTokens};

#[derive(Debug, Error)]
pub enum CommandError {
    #[error("{0}")]
    Usage(String),
    #[error("{path}: {message}")]
    Io { path: String, message: String },
    #[error(transparent)]
    Gateway(#[from] milab_core::GatewayError),
    #[error(transparent)]
    Prompt(#[from] milab_core::prompts::PromptError),
    #[error(transparent)]
    Store(#[from] milab_core::store::StoreError),
    #[error(transparent)]
    Stats(#[from] milab_core::stats::StatsError),
    #[error(transparent)]
    SelfPlay(#[from] milab_core::selfplay::SelfPlayError),
    #[error(transparent)]
    AutoMisc(#[from] milab_core::automisc::AutoMiscError),
}

fn io(path: &Path, e: impl std::fmt::Display) -> CommandError {
    CommandError::Io { path: path.display().to_string(), message: e.to_string() }
}

pub fn build_gateway(backend: Backend, cfg: &ServiceConfig) -> Result<Gateway, CommandError> {
    match backend {
        Backend::Remote => Ok(Gateway::remote(cfg.gateway.clone())?),
        Backend::Mock => {
            let mock = match &cfg.mock_script {
                Some(path) => {
                    let raw = fs::read_to_string(path).map_err(|e| io(path, e))?;
                    MockBackend::from_json(&raw)?.with_responder(offline_reply)
                }
                None => offline_backend(),
            };
            Ok(Gateway::mock(mock))
        }
    }
}

pub fn catalog(cfg: &ServiceConfig) -> Result<PromptCatalog, CommandError> {
    Ok(match &cfg.prompts {
        Some(dir) => PromptCatalog::load_dir(dir)?,
        None => PromptCatalog::builtin(),
    })
}

pub fn engine(cfg: &ServiceConfig, gateway: Gateway) -> Result<CounsellorEngine, CommandError> {
    let config = EngineConfig { profile: cfg.profile.clone(), offtrack_policy: cfg.offtrack_policy };
    Ok(CounsellorEngine::new(gateway, catalog(cfg)?, config))
}

pub fn automisc(cfg: &ServiceConfig, gateway: Gateway, context: usize) -> Result<AutoMisc, CommandError> {
    Ok(AutoMisc::new(gateway, catalog(cfg)?).with_context(context))
}

/// Application state for `serve`. The token secret comes from
/// `MILAB_TOKEN_SECRET` when set, otherwise it is random per process.
pub fn app_state(cfg: &ServiceConfig, clock: Arc<dyn Clock>) -> Result<Arc<AppState>, CommandError> {
    let gateway = build_gateway(cfg.backend, cfg)?;
    let store: Arc<dyn StudyStore> = match &cfg.journal {
        Some(path) => Arc::new(JournalStore::open(path)?),
        None => Arc::new(MemoryStore::new()),
    };
    let tokens = match std::env::var("MILAB_TOKEN_SECRET") {
        Ok(secret) if !secret.is_empty() => WeekTokens::new(secret.into_bytes(), cfg.week_delay_secs),
        _ => WeekTokens::random(cfg.week_delay_secs),
    };
    Ok(AppState::new(
        engine(cfg, gateway.clone())?,
        automisc(cfg, gateway, cfg.context_volleys)?,
        store,
        tokens,
        clock,
        cfg.options(),
    ))
}

#[derive(Debug, Clone)]
pub struct SimulateArgs {
    pub backstories: Option<PathBuf>,
    pub n: usize,
    pub seed: u64,
    pub max_volleys: usize,
    pub out: Option<PathBuf>,
}

/// Runs `n` self-play sessions, cycling through the backstories.
pub fn simulate(cfg: &ServiceConfig, backend: Backend, args: &SimulateArgs) -> Result<Vec<Transcript>, CommandError> {
    let backstories = match &args.backstories {
        Some(dir) => Backstory::load_dir(dir)?,
        None => vec![Backstory::default_client()],
    };
    if backstories.is_empty() {
        return Err(CommandError::Usage("no backstory files found".into()));
    }
    let configs: Vec<SelfPlayConfig> = (0..args.n)
        .map(|i| {
            let mut c = SelfPlayConfig::new(backstories[i % backstories.len()].clone());
            c.participant_id = format!("sim-{}-{i:03}", args.seed);
            c.seed = args.seed.wrapping_add(i as u64 * 1000);
            c.max_volleys = args.max_volleys;
            c.counsellor_profile = cfg.profile.clone();
            c
        })
        .collect();
    let engine = engine(cfg, build_gateway(backend, cfg)?)?;
    let transcripts = run_batch(&engine, &configs).into_iter().collect::<Result<Vec<_>, _>>()?;
    if let Some(dir) = &args.out {
        fs::create_dir_all(dir).map_err(|e| io(dir, e))?;
        for t in &transcripts {
            let path = dir.join(format!("{}.json", t.participant_id));
            let body = serde_json::to_string_pretty(t).map_err(|e| io(&path, e))?;
            fs::write(&path, body).map_err(|e| io(&path, e))?;
        }
    }
    Ok(transcripts)
}

/// Transcripts from a directory of JSON transcripts, a `conversations.csv`
/// (or a directory holding one), or a tree of speaker-tagged text files.
pub fn load_transcripts(input: &Path) -> Result<Vec<Transcript>, CommandError> {
    let csv = if input.is_dir() { input.join(CONVERSATIONS_FILE) } else { input.to_path_buf() };
    if csv.is_file() && csv.extension().is_some_and(|e| e == "csv") {
        return Ok(import_study_csv(&csv)?.into_iter().map(|a| a.transcript).collect());
    }
    if input.is_dir() {
        let mut json: Vec<PathBuf> = fs::read_dir(input)
            .map_err(|e| io(input, e))?
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| p.extension().is_some_and(|e| e == "json"))
            .collect();
        if !json.is_empty() {
            json.sort();
            return json
                .iter()
                .map(|p| {
                    let raw = fs::read_to_string(p).map_err(|e| io(p, e))?;
                    serde_json::from_str(&raw).map_err(|e| io(p, e))
                })
                .collect();
        }
    }
    Ok(import_hlqc(input)?)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AnnotateOutcome {
    pub annotated: usize,
    pub rows: usize,
    pub failures: Vec<String>,
}

pub fn annotate(
    cfg: &ServiceConfig,
    backend: Backend,
    input: &Path,
    out: &Path,
    context: usize,
) -> Result<AnnotateOutcome, CommandError> {
    let transcripts = load_transcripts(input)?;
    let pipeline = automisc(cfg, build_gateway(backend, cfg)?, context)?;
    let mut done = Vec::new();
    let mut failures = Vec::new();
    for (t, r) in transcripts.iter().zip(pipeline.annotate_batch(transcripts.clone())) {
        match r {
            Ok(at) => done.push(at),
            Err(e) => failures.push(format!("{}: {e}", t.participant_id)),
        }
    }
    if let Some(parent) = out.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent).map_err(|e| io(parent, e))?;
    }
    let rows = write_conversations(out, &done, &NoRedaction)?;
    Ok(AnnotateOutcome { annotated: done.len(), rows, failures })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsRow {
    pub participant_id: String,
    pub scores: SummaryScores,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub participants: Vec<MetricsRow>,
    pub summary: DatasetSummary,
}

/// Per-participant %MIC, R:Q and %CT from a labelled `conversations.csv`.
pub fn metrics(input: &Path) -> Result<MetricsReport, CommandError> {
    let annotated = import_study_csv(input)?;
    let participants: Vec<MetricsRow> = annotated
        .iter()
        .map(|at| {
            let labels: Vec<&str> = at.annotations.iter().map(|a| a.code.as_str()).collect();
            Ok(MetricsRow {
                participant_id: at.transcript.participant_id.clone(),
                scores: SummaryScores::from_labels(labels)?,
            })
        })
        .collect::<Result<_, CommandError>>()?;
    let scores: Vec<SummaryScores> = participants.iter().map(|p| p.scores).collect();
    Ok(MetricsReport { summary: dataset_summary(&scores)?, participants })
}

fn fmt_opt(v: Option<f64>, decimals: usize) -> String {
    v.map_or_else(|| "NA".to_string(), |x| format!("{x:.decimals$}"))
}

pub fn render_metrics(m: &MetricsReport) -> String {
    let mut s = format!("{:<20} {:>8} {:>8} {:>8}\n", "participant", "%MIC", "R:Q", "%CT");
    for p in &m.participants {
        let _ = writeln!(
            s,
            "{:<20} {:>8} {:>8} {:>8}",
            p.participant_id,
            fmt_opt(p.scores.pct_mic, 1),
            fmt_opt(p.scores.rq_ratio, 2),
            fmt_opt(p.scores.pct_ct, 1)
        );
    }
    let d = &m.summary;
    let _ = writeln!(
        s,
        "{:<20} {:>8} {:>8} {:>8}",
        format!("mean (n={})", d.n),
        fmt_opt(d.pct_mic.mean, 1),
        fmt_opt(d.rq_ratio.mean, 2),
        fmt_opt(d.pct_ct.mean, 1)
    );
    let _ = writeln!(
        s,
        "{:<20} {:>8} {:>8} {:>8}",
        "sd",
        fmt_opt(d.pct_mic.sd, 1),
        fmt_opt(d.rq_ratio.sd, 2),
        fmt_opt(d.pct_ct.sd, 1)
    );
    s
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
pub enum LabelLevel {
    /// MICO / MIIN / R / Q / Other for counsellors, C / S / N for clients.
    #[value(name = "5")]
    Five,
    /// Fine-grained codes as given.
    #[value(name = "16")]
    Sixteen,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AgreementReport {
    pub level: LabelLevel,
    pub items: usize,
    pub raters: u32,
    pub categories: Vec<String>,
    pub fleiss: FleissSignificance,
    pub power: f64,
    pub alpha: f64,
    pub pairwise: Vec<PairwiseKappa>,
}

pub fn agreement(
    ratings: &Path,
    level: LabelLevel,
    alpha: f64,
    sims: usize,
    seed: u64,
) -> Result<AgreementReport, CommandError> {
    let file = fs::File::open(ratings).map_err(|e| io(ratings, e))?;
    let mut table = RatingTable::from_csv(file)?;
    if level == LabelLevel::Five {
        table = table.map_labels(collapse_label);
    }
    let (m, categories) = table.agreement_matrix()?;
    let fleiss = fleiss_significance(&m)?;
    let power = posthoc_power(&m, alpha, sims, seed)?;
    Ok(AgreementReport {
        level,
        items: m.items(),
        raters: m.raters(),
        categories,
        fleiss,
        power,
        alpha,
        pairwise: table.pairwise_cohen(),
    })
}

pub fn render_agreement(r: &AgreementReport) -> String {
    let mut s = format!(
        "items {}  raters {}  categories {}\nFleiss kappa {:.3}  variance {:.3e}  z {:.2}  p {:.3e}  power {:.3} (alpha {})\n\n",
        r.items,
        r.raters,
        r.categories.join("/"),
        r.fleiss.kappa,
        r.fleiss.variance,
        r.fleiss.z,
        r.fleiss.p_two_sided,
        r.power,
        r.alpha
    );
    let _ = writeln!(s, "{:<12} {:<12} {:>6} {:>8}", "rater a", "rater b", "items", "kappa");
    for p in &r.pairwise {
        let _ = writeln!(s, "{:<12} {:<12} {:>6} {:>8}", p.rater_a, p.rater_b, p.items, fmt_opt(p.kappa, 3));
    }
    s
}

/// Writes the report files and returns a printable ruler table.
pub fn report(
    data: &Path,
    out: &Path,
    demographics: Option<&Path>,
    group_by: Option<GroupKey>,
) -> Result<String, CommandError> {
    let mut records = read_data_csv(data)?;
    if let Some(d) = demographics {
        attach_demographics(&mut records, d)?;
    }
    let rep = study_report(&records)?;
    write_report(out, &rep, &records)?;
    let groups = ruler_deltas(&records, Alternative::Greater, group_by)?;
    let mut s = String::new();
    for g in &groups {
        let _ = writeln!(s, "{} (n={})", g.group, g.n);
        let _ = writeln!(s, "  {:<11} {:>6} {:>6} {:>6} {:>7} {:>6} {:>9}", "ruler", "pre", "post", "week", "delta", "sd", "p");
        for r in &g.rows {
            let _ = writeln!(
                s,
                "  {:<11} {:>6.2} {:>6} {:>6.2} {:>7.2} {:>6.2} {:>9}",
                r.ruler.as_str(),
                r.mean_pre,
                fmt_opt(r.mean_post, 2),
                r.mean_week,
                r.mean_delta,
                r.sd_delta,
                r.p_value.map_or("NA".into(), |p| format!("{p:.2e}"))
            );
        }
    }
    let _ = writeln!(
        s,
        "CARE mean {} (sd {}), perfect {}%, valid {}",
        fmt_opt(rep.care.mean, 1),
        fmt_opt(rep.care.sd, 1),
        fmt_opt(rep.care.pct_perfect, 1),
        rep.care.n_valid
    );
    Ok(s)
}

/// Exports everything in a journal as `data.csv` + `conversations.csv`.
pub fn export(journal: &Path, out: &Path, redact: bool) -> Result<(usize, usize), CommandError> {
    let store = JournalStore::open(journal)?;
    let records = store.records();
    let transcripts: Vec<AnnotatedTranscript> = store.transcripts();
    let redactor: Box<dyn Redactor> = if redact { Box::new(RegexRedactor::default()) } else { Box::new(NoRedaction) };
    let s = export_study_dataset(out, &records, &transcripts, redactor.as_ref())?;
    Ok((s.participants, s.utterance_rows))
}
