use std::sync::Arc;

use kayra_core::cascade::{CascadeParams, ClassLabel};
use kayra_core::imaging::Raster;
use kayra_core::pipeline::{run_cascade, in_process, JobState, Retrying, Stage, StageOutcome, StageBackends};
use kayra_core::protocol::{SemSegRequest, StubModels};
use kayra_core::synthgen::{generate_spread, SyntheticSpec};
use kayra_models::{model_router, spawn_server, Endpoint, HttpBackends, ServiceEndpoints, StageTimeouts};

fn local() -> std::net::SocketAddr {
    "127.0.0.1:0".parse().unwrap()
}

#[test]
fn http_and_in_process_runs_are_identical() {
    let params = CascadeParams::default();
    let model = Arc::new(StubModels::new(params.clone()));
    let server = spawn_server(model_router(model.clone(), &Endpoint::ALL), local()).unwrap();
    let http = Retrying::new(HttpBackends::new(ServiceEndpoints::all(&server.url()), StageTimeouts::default()), 1);
    assert_eq!(http.inner.health(Endpoint::SemSeg).unwrap().model_version, StubModels::VERSION);

    let (img, gt) = generate_spread(&SyntheticSpec {
        seed: 11,
        image_id: "http".into(),
        overlap_pairs: 1,
        ..Default::default()
    })
    .unwrap();
    let remote = run_cascade(&gt.image_id, &img, &params, &http);
    let local_run = run_cascade(&gt.image_id, &img, &params, &in_process(model));
    assert_eq!(remote.state, JobState::Done);
    assert_eq!(
        serde_json::to_string(&remote.annotations).unwrap(),
        serde_json::to_string(&local_run.annotations).unwrap()
    );
    assert_eq!(remote.chain, local_run.chain);
}

#[test]
fn semseg_endpoint_answers_canvas_requests() {
    let model = Arc::new(StubModels::default());
    let server = spawn_server(model_router(model, &[Endpoint::SemSeg]), local()).unwrap();
    let client = HttpBackends::new(ServiceEndpoints::all(&server.url()), StageTimeouts::default());
    let img = Raster::from_fn(992, 992, |x, y| if (x as i64 - 400).pow(2) + (y as i64 - 500).pow(2) < 900 { 20 } else { 230 });
    let resp = client
        .semseg(&SemSegRequest {
            image_id: "disk".into(),
            image: img,
            roi: None,
        })
        .unwrap();
    let mask = resp.mask.decode().unwrap();
    assert_eq!((mask.width(), mask.height()), (992, 992));
    assert_eq!(mask.get(400, 500), 1);
    // The classify route is not mounted on a semseg-only service.
    let err = client.classify(&kayra_core::protocol::ClassifyRequest {
        image_id: "disk".into(),
        patch: Raster::filled(2, 2, 0),
        mask: kayra_core::protocol::RleMask {
            width: 2,
            height: 2,
            counts: vec![0, 4],
        },
        origin: None,
        augmented: false,
    });
    assert!(err.is_err());
}

#[test]
fn stopped_classifier_degrades_to_unknown() {
    let params = CascadeParams::default();
    let model = Arc::new(StubModels::new(params.clone()));
    let main = spawn_server(model_router(model.clone(), &[Endpoint::SemSeg, Endpoint::Instances, Endpoint::Dedup]), local()).unwrap();
    let classifier = spawn_server(model_router(model, &[Endpoint::Classify]), local()).unwrap();
    let endpoints = ServiceEndpoints {
        classify: classifier.url(),
        ..ServiceEndpoints::all(&main.url())
    };
    classifier.stop();
    let http = Retrying::new(HttpBackends::new(endpoints, StageTimeouts::default()), 1);
    let (img, gt) = generate_spread(&SyntheticSpec {
        seed: 12,
        image_id: "down".into(),
        ..Default::default()
    })
    .unwrap();
    let run = run_cascade(&gt.image_id, &img, &params, &http);
    assert_eq!(run.state, JobState::Partial);
    assert_eq!(run.status(Stage::Classify).outcome, StageOutcome::Degraded);
    assert_eq!(run.annotations.len(), gt.instances.len());
    assert!(run.annotations.iter().all(|a| a.class_label == ClassLabel::Unknown));
}
