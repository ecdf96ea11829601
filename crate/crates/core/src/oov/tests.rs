use std::sync::Arc;
use std::thread;
use std::time::Duration;

use super::*;
use crate::datagen::{make_world, World, WorldSpec};
use crate::embed::VocabMatrices;
use crate::index::{RetrievalResult, StageTimings};
use crate::transport::testing::serve;

fn chain_with_score(score: f32) -> ChainResult {
    let r = RetrievalResult { entry_id: 0, score, rank: 1 };
    ChainResult {
        scene: r,
        prefix: r,
        postfix: r,
        scene_text: String::new(),
        prefix_text: String::new(),
        postfix_text: String::new(),
        full_text: String::new(),
        scene_candidates: vec![r],
        prefix_candidates: vec![r],
        postfix_candidates: vec![r],
        timings: StageTimings::default(),
    }
}

fn oov_world(hidden_fraction: f64) -> World {
    let spec = WorldSpec { dim: 256, frame_noise: 0.0, hidden_fraction, n_scenes: 6, events_per_scene: 10, ..Default::default() };
    make_world(&spec).unwrap().1
}

fn snapshot_of(world: &World) -> Snapshot {
    let m = VocabMatrices::build(&world.vocab, &world.encoder).unwrap();
    Snapshot::new(world.vocab.clone(), m).unwrap()
}

struct Fixed(&'static str);

impl CompletionClient for Fixed {
    fn complete(&self, _: &str, _: Option<&[f32]>) -> Result<String, OovError> {
        Ok(self.0.to_string())
    }
}

#[test]
fn detection_is_strict() {
    let cfg = UpgradeConfig::default();
    assert!(detect_oov(&chain_with_score(0.35), &cfg));
    assert!(!detect_oov(&chain_with_score(0.4), &cfg));
    assert!(!detect_oov(&chain_with_score(0.99), &cfg));
}

#[test]
fn config_validation() {
    assert!(UpgradeConfig::default().validate().is_ok());
    for t in [1.0, -1.0, 2.0, f32::NAN] {
        let cfg = UpgradeConfig { threshold: t, ..Default::default() };
        assert_eq!(cfg.validate().unwrap_err().code(), "oov.invalid_config");
    }
    let cfg = UpgradeConfig { max_new_per_event: 0, ..Default::default() };
    assert!(cfg.validate().is_err());
}

#[test]
fn parse_examples() {
    assert_eq!(parse_proposals("Slice mango; Hold knife; ", 10), vec!["slice mango", "hold knife"]);
    assert!(parse_proposals("", 10).is_empty());
    assert_eq!(parse_proposals("a;a;A", 10), vec!["a"]);
    assert_eq!(parse_proposals("Rub hands; Fold scarf.", 10), vec!["rub hands", "fold scarf"]);
    assert_eq!(parse_proposals(" ;  ; x  y ;", 10), vec!["x y"]);
}

#[test]
fn parse_truncates() {
    let raw: Vec<String> = (0..50).map(|i| format!("item {i}")).collect();
    let parsed = parse_proposals(&raw.join("; "), 10);
    assert_eq!(parsed.len(), 10);
    assert_eq!(parsed[9], "item 9");
}

#[test]
fn parse_keeps_non_ascii() {
    assert_eq!(parse_proposals("café au lait; 切る", 10), vec!["café au lait", "切る"]);
}

#[test]
fn non_ascii_passes_through_proposer() {
    assert_eq!(propose_narrations(&Fixed("Schnitt; café"), "x").unwrap(), "Schnitt; café");
}

#[test]
fn empty_description_is_protocol_error() {
    let err = describe_scene(&Fixed("  \n"), &[0.0; 4]).unwrap_err();
    assert_eq!(err.code(), "oov.client_protocol");
}

#[test]
fn transport_reads_text_field() {
    let url = serve(200, r#"{"text":"a person works in the kitchen"}"#, 1);
    let c = TransportClient::new(Endpoint::parse(&url).unwrap(), Duration::from_secs(5));
    assert_eq!(describe_scene(&c, &[0.5, 0.5]).unwrap(), "a person works in the kitchen");
}

#[test]
fn transport_without_text_is_protocol_error() {
    let url = serve(200, r#"{"answer":"x"}"#, 1);
    let c = TransportClient::new(Endpoint::parse(&url).unwrap(), Duration::from_secs(5));
    assert_eq!(propose_narrations(&c, "x").unwrap_err().code(), "oov.client_protocol");
}

#[test]
fn transport_timeout() {
    let ep = Endpoint::parse("cmd:sleep 5").unwrap();
    let c = TransportClient::new(ep, Duration::from_millis(200));
    assert!(matches!(describe_scene(&c, &[1.0]), Err(OovError::ClientTimeout(_))));
}

#[test]
fn transport_unavailable() {
    let c = TransportClient::new(Endpoint::parse("http://127.0.0.1:1/complete").unwrap(), Duration::from_secs(2));
    assert_eq!(describe_scene(&c, &[1.0]).unwrap_err().code(), "oov.client_unavailable");
}

#[test]
fn stub_describer_names_scene() {
    let world = oov_world(0.0);
    let d = StubDescriber::from_world(&world);
    for e in &world.events {
        let s = describe_scene(&d, &world.clip_center(e.id, false)).unwrap();
        assert_eq!(s, format!("a person works in the {}", world.scene_labels[e.scene]));
    }
}

#[test]
fn stub_proposer_lists_scene_events() {
    let p = StubProposer::new(vec![("kitchen".into(), vec!["slice mango".into(), "hold knife".into(), "wipe counter".into()])]);
    let raw = propose_narrations(&p, "a person works in the kitchen").unwrap();
    assert_eq!(raw, "slice mango; hold knife; wipe counter");
    assert_eq!(propose_narrations(&p, "a person works in the garage").unwrap(), "");
}

#[test]
fn stub_proposer_ignores_example_scenes() {
    let p = StubProposer::new(vec![("kitchen".into(), vec!["a".into()]), ("fireplace".into(), vec!["b".into()])]);
    assert_eq!(propose_narrations(&p, "a person works in the fireplace").unwrap(), "b");
}

#[test]
fn hidden_event_is_recovered() {
    let world = oov_world(0.1);
    let snap = snapshot_of(&world);
    let cfg = UpgradeConfig { max_new_per_event: world.spec.events_per_scene, ..Default::default() };
    let (d, p) = (StubDescriber::from_world(&world), StubProposer::from_world(&world));
    let hidden: Vec<_> = world.events.iter().filter(|e| e.hidden).collect();
    assert!(!hidden.is_empty());

    for e in &hidden {
        let before = snap.retrieve(&world.clip_center(e.id, false), cfg.chain).unwrap();
        assert_ne!(before.prefix_text, e.base);
        assert!(detect_oov(&before, &cfg), "hidden event {} scored {}", e.base, before.prefix.score);
    }
    let store = SnapshotStore::new(snap);
    let mut upgrades = 0;
    for e in &hidden {
        let out = store.process_clip(&world.clip_center(e.id, false), &world.encoder, &d, &p, &cfg).unwrap();
        upgrades += out.upgrade.is_some() as usize;
        assert_eq!(out.chain.prefix_text, e.base);
    }
    assert!(upgrades >= 1 && upgrades <= hidden.len());
    let final_vocab = store.current().vocab.clone();
    for e in &hidden {
        assert!(final_vocab.find(EntryKind::Prefix, &e.base).is_some());
    }
}

#[test]
fn in_vocab_clips_do_not_trigger() {
    let world = oov_world(0.1);
    let snap = snapshot_of(&world);
    let cfg = UpgradeConfig::default();
    for e in world.events.iter().filter(|e| !e.hidden) {
        let c = snap.retrieve(&world.clip_center(e.id, false), cfg.chain).unwrap();
        assert!(!detect_oov(&c, &cfg), "{} scored {}", e.base, c.prefix.score);
    }
}

#[test]
fn upgrade_keeps_ids_and_rows() {
    let world = oov_world(0.1);
    let snap = snapshot_of(&world);
    let e = world.events.iter().find(|e| e.hidden).unwrap();
    let cfg = UpgradeConfig { max_new_per_event: 20, ..Default::default() };
    let clip = world.clip_center(e.id, false);
    let (next, report) =
        upgrade(&snap, &clip, &world.encoder, &StubDescriber::from_world(&world), &StubProposer::from_world(&world), &cfg).unwrap();
    assert_eq!(report.accepted_count + report.rejected_count, report.parsed.len());
    assert_eq!(report.accepted, vec![e.base.clone()]);
    assert_eq!(next.id, snap.id + 1);
    assert_eq!(report.vocab_size_after, report.vocab_size_before + 1);
    for old in snap.vocab.entries() {
        assert_eq!(next.vocab.entry(old.id).unwrap().text, old.text);
        assert_eq!(next.matrices.vector(&next.vocab, old.id), snap.matrices.vector(&snap.vocab, old.id));
    }
    assert_eq!(next.vocab.entry(report.retry.prefix.entry_id).unwrap().origin, crate::vocab::Origin::Upgrade);
}

#[test]
fn duplicate_proposals_leave_vocab_unchanged() {
    let world = oov_world(0.0);
    let snap = snapshot_of(&world);
    let e = &world.events[0];
    let known = world.events[1].base.clone();
    let raw: &'static str = Box::leak(format!("{}; {known}", e.base).into_boxed_str());
    let store = SnapshotStore::new(snap);
    let report = store
        .upgrade(&world.clip_center(0, false), &world.encoder, &Fixed("a scene"), &Fixed(raw), &UpgradeConfig::default())
        .unwrap();
    assert_eq!(report.accepted_count, 0);
    assert_eq!(report.rejected_count, 2);
    assert_eq!(report.vocab_size_after, report.vocab_size_before);
    assert_eq!(store.current().id, 0);
}

#[test]
fn proposals_are_capped() {
    let world = oov_world(0.0);
    let raw: Vec<String> = (0..50).map(|i| format!("novel act {i}")).collect();
    let raw: &'static str = Box::leak(raw.join("; ").into_boxed_str());
    let cfg = UpgradeConfig { max_new_per_event: 10, ..Default::default() };
    let (next, report) =
        upgrade(&snapshot_of(&world), &world.clip_center(0, false), &world.encoder, &Fixed("s"), &Fixed(raw), &cfg).unwrap();
    assert_eq!(report.accepted_count, 10);
    assert_eq!(next.vocab.len(), world.vocab.len() + 10);
}

#[test]
fn global_policy_attaches_everywhere() {
    let world = oov_world(0.0);
    let cfg = UpgradeConfig { scene_policy: ScenePolicy::Global, ..Default::default() };
    let (next, _) =
        upgrade(&snapshot_of(&world), &world.clip_center(0, false), &world.encoder, &Fixed("s"), &Fixed("brand new act"), &cfg)
            .unwrap();
    let id = next.vocab.find(EntryKind::Prefix, "brand new act").unwrap();
    assert_eq!(next.vocab.entry(id).unwrap().scene_ids, next.vocab.ids(EntryKind::Scene).to_vec());
}

#[test]
fn failed_upgrade_keeps_old_snapshot() {
    let world = oov_world(0.0);
    let store = SnapshotStore::new(snapshot_of(&world));
    let before = store.current();
    let err = store
        .upgrade(&world.clip_center(0, false), &world.encoder, &Fixed(""), &Fixed("x"), &UpgradeConfig::default())
        .unwrap_err();
    assert_eq!(err.code(), "oov.client_protocol");
    assert!(Arc::ptr_eq(&before, &store.current()));
}

#[test]
fn readers_see_whole_snapshots() {
    let world = oov_world(0.0);
    let store = Arc::new(SnapshotStore::new(snapshot_of(&world)));
    let clip = world.clip_center(0, false);
    let reader = {
        let store = store.clone();
        let clip = clip.clone();
        thread::spawn(move || {
            for _ in 0..200 {
                let s = store.current();
                assert_eq!(s.vocab.count(EntryKind::Prefix), s.matrices.prefix.count());
                assert_eq!(s.index.vocab_hash(), &s.vocab.content_hash());
                s.retrieve(&clip, ChainOptions::default()).unwrap();
            }
        })
    };
    for i in 0..5 {
        let raw: &'static str = Box::leak(format!("fresh act {i}").into_boxed_str());
        store.upgrade(&clip, &world.encoder, &Fixed("s"), &Fixed(raw), &UpgradeConfig::default()).unwrap();
    }
    reader.join().unwrap();
    assert_eq!(store.current().id, 5);
}
