mod common;

use std::sync::Arc;
use std::time::Duration;

use serde_json::json;

use common::{agent, get, post, post_raw, scripted_session, spawn_server};
use semtraj::checkpoint::EmbeddingSource;
use semtraj::dataset::{DatasetConfig, Generator};
use semtraj::language::{LabelSet, Lexicon};
use semtraj::model::{build_model, ModelConfig, ModelKind};
use semtraj_cli::service::AppState;

fn generator() -> Generator {
    let lexicon = Lexicon::default();
    let labels = LabelSet::default_for(&lexicon).unwrap();
    Generator::new(DatasetConfig::default(), lexicon, labels)
}

fn oracle_server() -> String {
    spawn_server(Arc::new(AppState::new(None, None, generator())))
}

fn model_server() -> String {
    let cfg = ModelConfig {
        n_waypoints: common::N_WAYPOINTS,
        ..ModelConfig::tiny()
    };
    let table = EmbeddingSource::default().load(cfg.encoder, cfg.d_lang).unwrap();
    let model = build_model(ModelKind::Transformer, cfg, table, 0).unwrap();
    spawn_server(Arc::new(AppState::new(Some(model), None, generator())))
}

#[test]
fn health_reports_version_and_checkpoint() {
    let base = oracle_server();
    let (status, body) = get(&agent(), &format!("{base}/api/v1/health"));
    assert_eq!(status, 200);
    assert_eq!(body["status"], "ok");
    assert!(body["checkpoint"].is_null());
    assert_eq!(body["version"], env!("CARGO_PKG_VERSION"));
}

#[test]
fn oracle_session_script() {
    let base = oracle_server();
    for seed in [1, 2, 3] {
        let run = scripted_session(&base, "oracle", seed).unwrap();
        assert!(run.min_dist_after > run.min_dist_before);
    }
}

#[test]
fn model_session_script() {
    let base = model_server();
    scripted_session(&base, "model", 4).unwrap();
}

#[test]
fn model_engine_without_checkpoint_is_rejected() {
    let base = oracle_server();
    let (status, body) = post(&agent(), &format!("{base}/api/v1/session"), Some(&json!({"engine": "model"})));
    assert_eq!(status, 422);
    assert!(body["error"].is_string());
}

#[test]
fn error_statuses() {
    let base = oracle_server();
    let a = agent();
    let (status, body) = get(&a, &format!("{base}/api/v1/session/nope"));
    assert_eq!(status, 404);
    assert!(body["error"].as_str().unwrap().contains("nope"));
    let (status, _) = post(&a, &format!("{base}/api/v1/session/nope/command"), Some(&json!({"text": "x"})));
    assert_eq!(status, 404);

    let (status, _) = post_raw(&a, &format!("{base}/api/v1/session"), "{not json");
    assert_eq!(status, 400);
    let (status, _) = post(&a, &format!("{base}/api/v1/session"), Some(&json!({"seeed": 1})));
    assert_eq!(status, 400);

    let (status, created) = post(&a, &format!("{base}/api/v1/session"), Some(&json!({"seed": 5})));
    assert_eq!(status, 200);
    let url = format!("{base}/api/v1/session/{}", created["id"].as_str().unwrap());
    let (status, _) = post(&a, &format!("{url}/undo"), None);
    assert_eq!(status, 409);
    let (status, _) = post_raw(&a, &format!("{url}/command"), "[1, 2]");
    assert_eq!(status, 400);
    let (status, _) = post(&a, &format!("{url}/command"), Some(&json!({"text": "  "})));
    assert_eq!(status, 400);
    let (status, body) = post(&a, &format!("{url}/command"), Some(&json!({"text": "dance around the unicorn"})));
    assert_eq!(status, 422);
    assert!(body["error"].is_string());

    let (_, view) = get(&a, &url);
    assert_eq!(view["history"].as_array().unwrap().len(), 1, "failed commands must not touch history");
}

#[test]
fn same_seed_gives_same_scene() {
    let base = oracle_server();
    let a = agent();
    let (_, x) = post(&a, &format!("{base}/api/v1/session"), Some(&json!({"seed": 11})));
    let (_, y) = post(&a, &format!("{base}/api/v1/session"), Some(&json!({"seed": 11})));
    assert_ne!(x["id"], y["id"]);
    assert_eq!(x["world"], y["world"]);
    assert_eq!(x["trajectory"], y["trajectory"]);
}

#[test]
fn concurrent_commands_are_serialized() {
    let base = oracle_server();
    let a = agent();
    let (_, created) = post(&a, &format!("{base}/api/v1/session"), Some(&json!({"seed": 21})));
    let world = &created["world"];
    let label = world["objects"][0]["label"].as_str().unwrap().to_string();
    let url = format!("{base}/api/v1/session/{}", created["id"].as_str().unwrap());
    let handles: Vec<_> = ["left", "right"]
        .into_iter()
        .map(|side| {
            let url = url.clone();
            let text = format!("move to the {side} of the {label}");
            std::thread::spawn(move || post(&agent(), &format!("{url}/command"), Some(&json!({ "text": text }))))
        })
        .collect();
    let mut lens: Vec<u64> = handles
        .into_iter()
        .map(|h| {
            let (status, body) = h.join().unwrap();
            assert_eq!(status, 200, "{body}");
            body["history_len"].as_u64().unwrap()
        })
        .collect();
    lens.sort_unstable();
    assert_eq!(lens, [2, 3]);
    let (_, view) = get(&a, &url);
    assert_eq!(view["history"].as_array().unwrap().len(), 3);
}

#[test]
fn sweep_returns_every_cell() {
    let base = oracle_server();
    let a = agent();
    let (_, created) = post(&a, &format!("{base}/api/v1/session"), Some(&json!({"seed": 8})));
    let url = format!("{base}/api/v1/session/{}/sweep", created["id"].as_str().unwrap());
    let (status, cells) = post(&a, &url, Some(&json!({"target": 0})));
    assert_eq!(status, 200, "{cells}");
    assert_eq!(cells.as_array().unwrap().len(), 24);
    let (status, _) = post(&a, &url, Some(&json!({"target": 99})));
    assert_eq!(status, 422);
}

#[test]
fn idle_sessions_are_evicted() {
    let state = Arc::new(AppState::new(None, None, generator()).with_idle_timeout(Duration::ZERO));
    let base = spawn_server(state.clone());
    let (status, created) = post(&agent(), &format!("{base}/api/v1/session"), Some(&json!({"seed": 3})));
    assert_eq!(status, 200);
    assert_eq!(state.session_count(), 1);
    std::thread::sleep(Duration::from_millis(5));
    assert_eq!(state.evict_idle(), 1);
    assert_eq!(state.session_count(), 0);
    let (status, _) = get(&agent(), &format!("{base}/api/v1/session/{}", created["id"].as_str().unwrap()));
    assert_eq!(status, 404);
}
