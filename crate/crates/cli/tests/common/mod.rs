#![allow(dead_code)]

use std::sync::Arc;

use serde_json::{json, Value};

use semtraj::chomp::is_valid_target;
use semtraj::geom::{min_dist, Trajectory, World};
use semtraj::language::{generate_command, CommandAst, Direction, Intensity, Lexicon, Split};
use semtraj_cli::service::{router, AppState};

pub const N_WAYPOINTS: usize = 100;

/// Serves `state` on an ephemeral port from a background thread and returns
/// the base URL.
pub fn spawn_server(state: Arc<AppState>) -> String {
    let listener = std::net::TcpListener::bind("127.0.0.1:0").expect("bind");
    let addr = listener.local_addr().expect("addr");
    listener.set_nonblocking(true).expect("nonblocking");
    std::thread::spawn(move || {
        let rt = tokio::runtime::Builder::new_multi_thread()
            .worker_threads(2)
            .enable_all()
            .build()
            .expect("runtime");
        rt.block_on(async move {
            let listener = tokio::net::TcpListener::from_std(listener).expect("listener");
            axum::serve(listener, router(state, None)).await.expect("serve");
        });
    });
    format!("http://{addr}")
}

pub fn agent() -> ureq::Agent {
    ureq::Agent::config_builder()
        .http_status_as_error(false)
        .build()
        .into()
}

/// `(status, body)`; a missing or non-JSON body becomes `Value::Null`.
pub fn post(agent: &ureq::Agent, url: &str, body: Option<&Value>) -> (u16, Value) {
    let req = agent.post(url);
    let resp = match body {
        Some(b) => req.send_json(b),
        None => req.send_empty(),
    }
    .expect("transport");
    finish(resp)
}

pub fn post_raw(agent: &ureq::Agent, url: &str, body: &str) -> (u16, Value) {
    let resp = agent
        .post(url)
        .header("content-type", "application/json")
        .send(body)
        .expect("transport");
    finish(resp)
}

pub fn get(agent: &ureq::Agent, url: &str) -> (u16, Value) {
    finish(agent.get(url).call().expect("transport"))
}

fn finish(mut resp: ureq::http::Response<ureq::Body>) -> (u16, Value) {
    let status = resp.status().as_u16();
    let text = resp.body_mut().read_to_string().unwrap_or_default();
    (status, serde_json::from_str(&text).unwrap_or(Value::Null))
}

fn field<T: serde::de::DeserializeOwned>(v: &Value, key: &str) -> Result<T, String> {
    let f = v.get(key).ok_or_else(|| format!("response lacks `{key}`: {v}"))?;
    serde_json::from_value(f.clone()).map_err(|e| format!("`{key}` has the wrong shape: {e}"))
}

fn check_trajectory(t: &Trajectory, world: &World, what: &str) -> Result<(), String> {
    if t.len() != N_WAYPOINTS {
        return Err(format!("{what}: {} waypoints", t.len()));
    }
    if !t.is_finite() {
        return Err(format!("{what}: non-finite waypoint"));
    }
    let (first, last) = (t.waypoints[0], t.waypoints[N_WAYPOINTS - 1]);
    if first != world.start || last != world.goal {
        return Err(format!("{what}: endpoints {first:?} {last:?} differ from the world's"));
    }
    Ok(())
}

/// Outcome of [`scripted_session`].
pub struct SessionRun {
    pub engine: String,
    pub min_dist_before: f64,
    pub min_dist_after: f64,
}

/// Create → two commands → undo → get, checking every response. The first
/// command asks to move further from an object the original path passes by.
pub fn scripted_session(base: &str, engine: &str, seed: u64) -> Result<SessionRun, String> {
    let agent = agent();
    let lexicon = Lexicon::default();
    let (status, created) = post(&agent, &format!("{base}/api/v1/session"), Some(&json!({"seed": seed, "engine": engine})));
    if status != 200 {
        return Err(format!("create: status {status} {created}"));
    }
    let id: String = field(&created, "id")?;
    let world: World = field(&created, "world")?;
    let xi_o: Trajectory = field(&created, "trajectory")?;
    if field::<String>(&created, "engine")? != engine {
        return Err(format!("create: engine {}", created["engine"]));
    }
    check_trajectory(&xi_o, &world, "ξ_o")?;
    let target = (0..world.objects.len())
        .find(|&i| is_valid_target(&xi_o, world.objects[i].position))
        .ok_or("no valid target in scene")?;
    let label = world.objects[target].label.clone();

    let url = format!("{base}/api/v1/session/{id}");
    let mut trajectories = vec![xi_o.clone()];
    let commands = [(Direction::Further, Intensity::Strong), (Direction::Left, Intensity::Neutral)];
    for (k, (direction, intensity)) in commands.into_iter().enumerate() {
        let ast = CommandAst {
            direction,
            intensity,
            target_index: target,
        };
        let text = generate_command(&ast, &label, &lexicon, seed + k as u64, Split::Train).map_err(|e| e.to_string())?;
        let (status, resp) = post(&agent, &format!("{url}/command"), Some(&json!({ "text": text })));
        if status != 200 {
            return Err(format!("command {k}: status {status} {resp}"));
        }
        let t: Trajectory = field(&resp, "trajectory")?;
        check_trajectory(&t, &world, &format!("command {k}"))?;
        let similarity: Vec<f64> = field(&resp, "similarity")?;
        if similarity.len() != world.objects.len() || similarity.iter().any(|s| !s.is_finite()) {
            return Err(format!("command {k}: similarity {similarity:?}"));
        }
        let elapsed: f64 = field(&resp, "elapsed_ms")?;
        if !(elapsed >= 0.0) {
            return Err(format!("command {k}: elapsed_ms {elapsed}"));
        }
        if field::<String>(&resp, "engine")? != engine {
            return Err(format!("command {k}: engine {}", resp["engine"]));
        }
        if field::<usize>(&resp, "history_len")? != k + 2 {
            return Err(format!("command {k}: history_len {}", resp["history_len"]));
        }
        trajectories.push(t);
    }
    let target_pos = world.objects[target].position;
    let before = min_dist(&xi_o, target_pos);
    let after = min_dist(&trajectories[1], target_pos);
    if engine == "oracle" && after <= before {
        return Err(format!("oracle `further` did not increase min_dist: {before:.4} -> {after:.4}"));
    }

    let (status, undone) = post(&agent, &format!("{url}/undo"), None);
    if status != 200 {
        return Err(format!("undo: status {status} {undone}"));
    }
    let (status, view) = get(&agent, &url);
    if status != 200 {
        return Err(format!("get: status {status} {view}"));
    }
    if field::<String>(&view, "id")? != id || field::<World>(&view, "world")? != world {
        return Err("get: session identity changed".into());
    }
    let history: Vec<Value> = field(&view, "history")?;
    if history.len() != 2 {
        return Err(format!("get: history has {} entries after undo", history.len()));
    }
    let current: Trajectory = field(&view, "trajectory")?;
    if current != trajectories[1] {
        return Err("get: current trajectory is not the first command's result".into());
    }
    let first: Trajectory = field(&history[0], "trajectory")?;
    if first != xi_o {
        return Err("get: history[0] is not ξ_o".into());
    }
    Ok(SessionRun {
        engine: engine.to_string(),
        min_dist_before: before,
        min_dist_after: after,
    })
}
