use std::sync::Arc;
use std::time::Duration;

use axum::body::Body;
use axum::http::{Request, StatusCode};
use axum::Router;
use bam_service::protocol::{EventKind, Mode, ServerMessage, SessionEvent, Snapshot};
use bam_service::server::{router, AppState, EnvironmentSummary, EnvironmentView};
use bam_service::store::SessionStore;
use futures_util::{SinkExt, StreamExt};
use http_body_util::BodyExt;
use tokio_tungstenite::tungstenite::Message;
use tower::ServiceExt;

const LANE: &str = "bam-env 1
name: lane
domain: navigation
size: 4 2
start: cells 0,1
task east: 3,1
task west: 0,0
grid:
..#.
....
";

fn app(store: Option<SessionStore>, tick: Duration) -> (Arc<AppState>, Router) {
    let state = Arc::new(AppState::new(vec![("lane".into(), LANE.into())], store, tick).unwrap());
    (state.clone(), router(state))
}

async fn call(app: &Router, method: &str, uri: &str, body: Option<serde_json::Value>) -> (StatusCode, Vec<u8>) {
    let req = Request::builder().method(method).uri(uri);
    let req = match body {
        Some(b) => req
            .header("content-type", "application/json")
            .body(Body::from(b.to_string()))
            .unwrap(),
        None => req.body(Body::empty()).unwrap(),
    };
    let resp = app.clone().oneshot(req).await.unwrap();
    let status = resp.status();
    (status, resp.into_body().collect().await.unwrap().to_bytes().to_vec())
}

async fn create(app: &Router) -> Snapshot {
    let (status, body) = call(
        app,
        "POST",
        "/v1/sessions",
        Some(serde_json::json!({"environment": "lane", "algorithm": "cloning", "seed": 5})),
    )
    .await;
    assert_eq!(status, StatusCode::CREATED);
    serde_json::from_slice(&body).unwrap()
}

async fn event(app: &Router, id: &str, e: SessionEvent) -> (StatusCode, ServerMessage) {
    let (status, body) = call(
        app,
        "POST",
        &format!("/v1/sessions/{id}/events"),
        Some(serde_json::to_value(e).unwrap()),
    )
    .await;
    (status, serde_json::from_slice(&body).unwrap())
}

#[tokio::test]
async fn environments_are_listed_and_described() {
    let (_, app) = app(None, Duration::ZERO);
    let (status, body) = call(&app, "GET", "/v1/environments", None).await;
    assert_eq!(status, StatusCode::OK);
    let list: Vec<EnvironmentSummary> = serde_json::from_slice(&body).unwrap();
    assert_eq!(list.len(), 1);
    assert_eq!(list[0].tasks, vec!["east", "west"]);
    let (_, body) = call(&app, "GET", "/v1/environments/lane", None).await;
    let view: EnvironmentView = serde_json::from_slice(&body).unwrap();
    assert_eq!(view.rows, vec!["..#.", "...."]);
    assert_eq!(view.actions.len(), 5);
    assert_eq!(view.source, LANE);
    let (status, _) = call(&app, "GET", "/v1/environments/nope", None).await;
    assert_eq!(status, StatusCode::NOT_FOUND);
}

#[tokio::test]
async fn events_over_http() {
    let (_, app) = app(None, Duration::ZERO);
    let snap = create(&app).await;
    assert_eq!(snap.mode, Mode::Idle);
    let id = snap.session_id;
    let (status, msg) = event(&app, &id, SessionEvent::new(1, EventKind::FeedbackPositive)).await;
    assert_eq!(status, StatusCode::CONFLICT);
    assert!(matches!(msg, ServerMessage::Rejected { seq: Some(1), .. }));
    let script = [
        EventKind::StartDemo,
        EventKind::TeacherAction { action: 3 },
        EventKind::EndDemo,
    ];
    for (i, k) in script.into_iter().enumerate() {
        let (status, _) = event(&app, &id, SessionEvent::new(i as u64 + 1, k)).await;
        assert_eq!(status, StatusCode::OK);
    }
    let (_, body) = call(&app, "GET", &format!("/v1/sessions/{id}"), None).await;
    let snap: Snapshot = serde_json::from_slice(&body).unwrap();
    assert_eq!((snap.counts.demo_pairs, snap.counts.transitions), (2, 1));
    let (_, body) = call(&app, "GET", &format!("/v1/sessions/{id}/log"), None).await;
    assert_eq!(String::from_utf8(body).unwrap().lines().count(), 3);
    let (_, body) = call(&app, "GET", &format!("/v1/sessions/{id}/dataset"), None).await;
    assert!(String::from_utf8(body).unwrap().starts_with("bam-dataset 1"));
    let (status, body) = call(&app, "GET", &format!("/v1/sessions/{id}/checkpoint"), None).await;
    assert_eq!(status, StatusCode::OK);
    assert!(String::from_utf8(body).unwrap().contains("\"cloning\""));
    let (status, _) = call(&app, "GET", "/v1/sessions/missing/log", None).await;
    assert_eq!(status, StatusCode::NOT_FOUND);
    let (status, _) = call(&app, "GET", "/v1/sessions/..%2Fetc", None).await;
    assert_eq!(status, StatusCode::NOT_FOUND);
}

#[tokio::test]
async fn stored_sessions_resume_after_restart() {
    let dir = tempfile::tempdir().unwrap();
    let (_, first) = app(Some(SessionStore::open(dir.path()).unwrap()), Duration::ZERO);
    let id = create(&first).await.session_id;
    for (i, k) in [EventKind::StartDemo, EventKind::TeacherAction { action: 3 }, EventKind::EndDemo, EventKind::StartDemo]
        .into_iter()
        .enumerate()
    {
        event(&first, &id, SessionEvent::new(i as u64 + 1, k)).await;
    }
    let (_, second) = app(Some(SessionStore::open(dir.path()).unwrap()), Duration::ZERO);
    let (status, body) = call(&second, "GET", &format!("/v1/sessions/{id}"), None).await;
    assert_eq!(status, StatusCode::OK);
    let snap: Snapshot = serde_json::from_slice(&body).unwrap();
    assert_eq!(snap.mode, Mode::Idle);
    assert_eq!(snap.counts.demo_pairs, 2);
    assert_eq!(snap.events, 3);
}

#[tokio::test]
async fn storage_failure_makes_session_read_only() {
    let dir = tempfile::tempdir().unwrap();
    let root = dir.path().join("store");
    let (_, app) = app(Some(SessionStore::open(&root).unwrap()), Duration::ZERO);
    let id = create(&app).await.session_id;
    event(&app, &id, SessionEvent::new(1, EventKind::StartDemo)).await;
    std::fs::remove_dir_all(&root).unwrap();
    std::fs::write(&root, "not a directory").unwrap();
    let (status, msg) = event(&app, &id, SessionEvent::new(2, EventKind::EndDemo)).await;
    assert_eq!(status, StatusCode::OK);
    let ServerMessage::Snapshot(snap) = msg else { panic!("{msg:?}") };
    assert!(snap.read_only.is_some());
    let (status, _) = event(&app, &id, SessionEvent::new(3, EventKind::Reset)).await;
    assert_eq!(status, StatusCode::CONFLICT);
}

async fn next_snapshot<S>(ws: &mut S) -> ServerMessage
where
    S: StreamExt<Item = Result<Message, tokio_tungstenite::tungstenite::Error>> + Unpin,
{
    loop {
        match tokio::time::timeout(Duration::from_secs(10), ws.next()).await.unwrap() {
            Some(Ok(Message::Text(t))) => return serde_json::from_str(&t).unwrap(),
            Some(Ok(_)) => continue,
            other => panic!("socket closed: {other:?}"),
        }
    }
}

#[tokio::test(flavor = "multi_thread", worker_threads = 2)]
async fn websocket_session_with_server_ticks() {
    let (_, app) = app(None, Duration::from_millis(20));
    let id = create(&app).await.session_id;
    let listener = tokio::net::TcpListener::bind("127.0.0.1:0").await.unwrap();
    let addr = listener.local_addr().unwrap();
    tokio::spawn(async move { axum::serve(listener, app).await.unwrap() });
    let (mut ws, _) = tokio_tungstenite::connect_async(format!("ws://{addr}/v1/sessions/{id}/ws"))
        .await
        .unwrap();
    let ServerMessage::Snapshot(first) = next_snapshot(&mut ws).await else { panic!() };
    assert_eq!(first.session_id, id);

    let mut seq = 0;
    let mut send = |k: EventKind| {
        seq += 1;
        Message::Text(serde_json::to_string(&SessionEvent::new(seq, k)).unwrap().into())
    };
    for k in [
        EventKind::PlaceAgent { x: 0, y: 1 },
        EventKind::StartDemo,
        EventKind::TeacherAction { action: 3 },
        EventKind::TeacherAction { action: 3 },
        EventKind::TeacherAction { action: 3 },
        EventKind::EndDemo,
        EventKind::PlaceAgent { x: 0, y: 1 },
    ] {
        ws.send(send(k)).await.unwrap();
        assert!(matches!(next_snapshot(&mut ws).await, ServerMessage::Snapshot(_)));
    }
    ws.send(Message::Text("{\"kind\": \"jump\"}".into())).await.unwrap();
    assert!(matches!(next_snapshot(&mut ws).await, ServerMessage::Error { .. }));

    ws.send(send(EventKind::StartAgentEpisode)).await.unwrap();
    let mut feedback_sent = false;
    let end = loop {
        let ServerMessage::Snapshot(s) = next_snapshot(&mut ws).await else { continue };
        if s.mode == Mode::Idle && s.events > 8 {
            break s;
        }
        if !feedback_sent && s.episode.as_ref().is_some_and(|e| e.steps == 1) {
            ws.send(send(EventKind::FeedbackPositive)).await.unwrap();
            feedback_sent = true;
        }
    };
    assert!(end.at_goal);
    assert_eq!(end.counts.feedback_events, 3);
    assert_eq!(end.counts.transitions, 6);
    assert_eq!(end.learner.refits, 2);
}
