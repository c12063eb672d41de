use milab_core::automisc::{heuristic_reply, summary_metrics, AutoMisc};
use milab_core::selfplay::{run_batch, Backstory, SelfPlayConfig};
use milab_core::store::{
    export_study_dataset, read_data_csv, verify_release, NoRedaction, ParticipantRecord, CONVERSATIONS_FILE, DATA_FILE,
};
use milab_core::{
    is_valid, CounsellorEngine, EngineConfig, Gateway, MockBackend, PromptCatalog, RulerTriple, StudyPhase,
};

fn offline_backend() -> MockBackend {
    MockBackend::new().with_responder(|req| {
        heuristic_reply(req).or_else(|| {
            let turns = req.messages.len();
            Some(match req.agent.as_str() {
                "moderator" => "Normal".into(),
                "offtrack" => "False".into(),
                "end" if turns > 0 && req.messages[0].text.lines().count() >= 7 => "wrapping up\nTrue".into(),
                "end" => "still talking\nFalse".into(),
                "client" if turns >= 7 => "No".into(),
                "client" => "I enjoy smoking, it helps me relax. Maybe I could cut down.".into(),
                _ => format!("It sounds like smoking matters to you. What would change if you quit? ({turns})"),
            })
        })
    })
}

#[test]
fn selfplay_annotate_export_verify() {
    let gw = Gateway::mock(offline_backend());
    let engine = CounsellorEngine::new(gw.clone(), PromptCatalog::builtin(), EngineConfig::default());
    let configs: Vec<SelfPlayConfig> = (0..4)
        .map(|i| {
            let mut c = SelfPlayConfig::new(Backstory::default_client());
            c.participant_id = format!("sp{i}");
            c.seed = i;
            c.max_volleys = 20;
            c
        })
        .collect();
    let transcripts: Vec<_> = run_batch(&engine, &configs).into_iter().map(Result::unwrap).collect();
    assert!(transcripts.iter().all(is_valid));

    let automisc = AutoMisc::new(gw, PromptCatalog::builtin());
    let annotated: Vec<_> =
        automisc.annotate_batch(transcripts).into_iter().map(Result::unwrap).collect();
    let records: Vec<ParticipantRecord> = annotated
        .iter()
        .map(|at| {
            let mut r = ParticipantRecord::new(at.transcript.participant_id.clone());
            r.pre = Some(RulerTriple::new(6, 3, 5, StudyPhase::Pre).unwrap());
            r.summary = Some(summary_metrics(at).unwrap());
            r
        })
        .collect();

    let dir = tempfile::tempdir().unwrap();
    export_study_dataset(dir.path(), &records, &annotated, &NoRedaction).unwrap();
    let check = verify_release(dir.path()).unwrap();
    assert_eq!(check.rows, 4);
    assert!(check.mismatches.is_empty(), "{:?}", check.mismatches);
    assert_eq!(read_data_csv(dir.path()).unwrap(), records);

    // Tampering with a published value is caught.
    let data = std::fs::read_to_string(dir.path().join(DATA_FILE)).unwrap();
    let mut lines: Vec<String> = data.lines().map(str::to_string).collect();
    let mut cells: Vec<String> = lines[1].split(',').map(str::to_string).collect();
    let mic = cells.len() - 3;
    cells[mic] = "12.5".into();
    lines[1] = cells.join(",");
    std::fs::write(dir.path().join(DATA_FILE), lines.join("\n") + "\n").unwrap();
    let check = verify_release(dir.path()).unwrap();
    assert_eq!(check.mismatches.len(), 1);
    assert_eq!(check.mismatches[0].column, "AutoMISC_%MIC");
    assert!(dir.path().join(CONVERSATIONS_FILE).exists());
}
