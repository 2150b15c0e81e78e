use std::net::SocketAddr;

use fieldseg::scene::load_scene;
use fieldseg::segmentation::{instance_stroke, StrokeSet};
use fieldseg::Error;
use reqwest::{Client, StatusCode};
use serde_json::{json, Value};

use super::{start, ServiceConfig};
use crate::error::{CliError, CliResult};
use crate::micro::{build_micro_root, SCENE_ID, STAGE1_ID, STAGE2_ID};

struct Probe {
    client: Client,
    base: String,
    failures: usize,
}

impl Probe {
    async fn call(
        &self,
        method: reqwest::Method,
        path: &str,
        body: Option<&Value>,
    ) -> Result<(StatusCode, Value), String> {
        let mut req = self.client.request(method, format!("{}{path}", self.base));
        if let Some(b) = body {
            req = req.json(b);
        }
        let resp = req.send().await.map_err(|e| e.to_string())?;
        let status = resp.status();
        let text = resp.text().await.map_err(|e| e.to_string())?;
        let value = if text.is_empty() {
            Value::Null
        } else {
            serde_json::from_str(&text).map_err(|e| e.to_string())?
        };
        Ok((status, value))
    }

    fn report(&mut self, name: &str, outcome: Result<(), String>) {
        match outcome {
            Ok(()) => println!("ok   {name}"),
            Err(msg) => {
                self.failures += 1;
                println!("FAIL {name}: {msg}");
            }
        }
    }
}

fn expect(cond: bool, msg: impl Into<String>) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg.into())
    }
}

/// Serves a generated micro-scene on a free local port and exercises every
/// endpoint once.
pub async fn self_check(max_resolution: usize, cache_entries: usize) -> CliResult<()> {
    let dir = tempfile::tempdir().map_err(|e| Error::io(std::env::temp_dir(), e))?;
    let root = dir.path().to_path_buf();
    {
        let root = root.clone();
        tokio::task::spawn_blocking(move || build_micro_root(&root))
            .await
            .map_err(|e| Error::Generation(e.to_string()))??;
    }
    let scene = load_scene(&root.join("scenes").join(SCENE_ID))?;
    let stroke = StrokeSet {
        strokes: vec![instance_stroke(&scene, 0, 1, 1.0)?],
    };
    let config = ServiceConfig {
        data_root: root,
        max_resolution,
        cache_entries,
    };
    let server = start(config, SocketAddr::from(([127, 0, 0, 1], 0)))
        .await
        .map_err(|e| Error::io("127.0.0.1:0", e))?;
    let mut p = Probe {
        client: Client::new(),
        base: format!("http://{}", server.addr),
        failures: 0,
    };
    use reqwest::Method;

    let r = p.call(Method::GET, "/api/scenes", None).await;
    p.report(
        "GET /api/scenes",
        r.and_then(|(s, v)| {
            expect(
                s == StatusCode::OK && v["scenes"][0]["id"] == SCENE_ID,
                format!("{s} {v}"),
            )
        }),
    );
    let r = p
        .call(Method::GET, &format!("/api/scenes/{SCENE_ID}"), None)
        .await;
    p.report(
        "GET /api/scenes/{id}",
        r.and_then(|(s, v)| {
            expect(
                s == StatusCode::OK && v["views"] == scene.views.len(),
                format!("{s} {v}"),
            )
        }),
    );
    let r = p.call(Method::GET, "/api/checkpoints", None).await;
    p.report(
        "GET /api/checkpoints",
        r.and_then(|(s, v)| {
            let n = v["checkpoints"].as_array().map_or(0, |a| a.len());
            expect(s == StatusCode::OK && n == 2, format!("{s} {v}"))
        }),
    );
    let r = p
        .call(
            Method::POST,
            "/api/sessions",
            Some(&json!({ "scene_id": SCENE_ID, "checkpoint_id": STAGE2_ID })),
        )
        .await;
    let mut session = String::new();
    p.report(
        "POST /api/sessions",
        r.and_then(|(s, v)| {
            session = v["session_id"].as_str().unwrap_or_default().to_string();
            expect(
                s == StatusCode::CREATED && !session.is_empty(),
                format!("{s} {v}"),
            )
        }),
    );
    let render = json!({ "view_id": 1, "outputs": ["rgb", "feature_pca"] });
    for (name, cached) in [("render", false), ("render (cached)", true)] {
        let r = p
            .call(
                Method::POST,
                &format!("/api/sessions/{session}/render"),
                Some(&render),
            )
            .await;
        p.report(
            &format!("POST /api/sessions/{{id}}/{name}"),
            r.and_then(|(s, v)| {
                expect(
                    s == StatusCode::OK
                        && v["cached"] == cached
                        && v["images"]["rgb"].is_string()
                        && v["images"]["feature_pca"].is_string(),
                    format!("{s} {v}"),
                )
            }),
        );
    }
    for (name, tau, clustered) in [
        ("segment", 0.5, true),
        ("segment (threshold only)", 0.3, false),
    ] {
        let body = json!({ "strokes": stroke, "k": 3, "threshold": tau });
        let r = p
            .call(
                Method::POST,
                &format!("/api/sessions/{session}/segment"),
                Some(&body),
            )
            .await;
        p.report(
            &format!("POST /api/sessions/{{id}}/{name}"),
            r.and_then(|(s, v)| {
                let n = v["masks"].as_array().map_or(0, |a| a.len());
                let renders_ok = clustered || v["renders"] == 0;
                expect(
                    s == StatusCode::OK
                        && n == scene.views.len()
                        && v["clustered"] == clustered
                        && renders_ok,
                    format!("{s} {v}"),
                )
            }),
        );
    }
    let r = p
        .call(
            Method::POST,
            "/api/sessions",
            Some(&json!({ "scene_id": SCENE_ID, "checkpoint_id": STAGE1_ID })),
        )
        .await;
    let stage1 = r
        .as_ref()
        .ok()
        .and_then(|(_, v)| v["session_id"].as_str().map(str::to_string))
        .unwrap_or_default();
    let r = p
        .call(
            Method::POST,
            &format!("/api/sessions/{stage1}/render"),
            Some(&json!({ "view_id": 0, "outputs": ["feature_pca"] })),
        )
        .await;
    p.report(
        "feature output on a stage-1 session is refused",
        r.and_then(|(s, v)| {
            expect(
                s == StatusCode::CONFLICT && v["error"]["code"] == "capability",
                format!("{s} {v}"),
            )
        }),
    );
    for (name, want) in [
        ("DELETE /api/sessions/{id}", StatusCode::NO_CONTENT),
        ("DELETE again", StatusCode::NOT_FOUND),
    ] {
        let r = p
            .call(Method::DELETE, &format!("/api/sessions/{session}"), None)
            .await;
        p.report(
            name,
            r.and_then(|(s, v)| expect(s == want, format!("{s} {v}"))),
        );
    }
    server.stop().await.map_err(|e| Error::io("server", e))?;
    if p.failures == 0 {
        println!("self-check passed");
        Ok(())
    } else {
        Err(CliError::Core(Error::domain(format!(
            "{} self-check probe(s) failed",
            p.failures
        ))))
    }
}
