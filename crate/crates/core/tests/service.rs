mod common;

use ctclip::retrieval::service::{spawn, QueryResponse, VolumeMeta};
use ctclip::retrieval::IndexInfo;
use serde_json::json;

async fn start() -> (String, reqwest::Client, ctclip::retrieval::EmbeddingIndex) {
    let (state, _) = common::service_fixture();
    let index = state.index().clone();
    let (addr, _) = spawn(state, "127.0.0.1:0".parse().unwrap()).await.unwrap();
    (format!("http://{addr}"), reqwest::Client::new(), index)
}

#[tokio::test]
async fn index_info_and_meta() {
    let (base, c, index) = start().await;
    let info: IndexInfo = c.get(format!("{base}/index/info")).send().await.unwrap().json().await.unwrap();
    assert_eq!(info, index.info());
    let meta: VolumeMeta = c.get(format!("{base}/volumes/s02/meta")).send().await.unwrap().json().await.unwrap();
    assert_eq!(meta.shape, [8, 8, 4]);
    assert!(meta.in_index);
    assert!(!meta.labels.is_empty());
    assert_eq!(c.get(format!("{base}/volumes/zz/meta")).send().await.unwrap().status(), 404);
}

#[tokio::test]
async fn query_by_raw_embedding_matches_study_query_plus_self() {
    let (base, c, index) = start().await;
    let e = index.get("s05").unwrap().embedding.values.clone();
    let r: QueryResponse = c
        .post(format!("{base}/query/volume"))
        .json(&json!({ "embedding": e, "k": 3 }))
        .send()
        .await
        .unwrap()
        .json()
        .await
        .unwrap();
    // a raw embedding does not exclude anything, so the study itself comes first
    assert_eq!(r.results[0].study_id, "s05");
    assert!((r.results[0].score - 1.0).abs() < 1e-6);
}

#[tokio::test]
async fn bad_requests_are_4xx_with_json_error() {
    let (base, c, _) = start().await;
    let both = json!({ "study_id": "s01", "embedding": [1.0, 0.0], "k": 2 });
    let r = c.post(format!("{base}/query/volume")).json(&both).send().await.unwrap();
    assert_eq!(r.status(), 400);
    let body: serde_json::Value = r.json().await.unwrap();
    assert!(body["error"].is_string());

    let wrong_dim = json!({ "embedding": [1.0, 0.0], "k": 2 });
    assert_eq!(c.post(format!("{base}/query/volume")).json(&wrong_dim).send().await.unwrap().status(), 400);

    let r = c.post(format!("{base}/query/text")).json(&json!({ "text": "alpha", "k": 0 })).send().await.unwrap();
    assert_eq!(r.status(), 400);

    assert_eq!(c.get(format!("{base}/volumes/s01/slice/oblique/0")).send().await.unwrap().status(), 400);
    assert_eq!(c.get(format!("{base}/volumes/s01/slice/axial/-1")).send().await.unwrap().status(), 400);
}

#[tokio::test]
async fn slices_along_every_axis() {
    let (base, c, _) = start().await;
    for (axis, idx, size) in [("axial", 3, (8, 8)), ("coronal", 7, (8, 4)), ("sagittal", 0, (8, 4))] {
        let r = c.get(format!("{base}/volumes/s00/slice/{axis}/{idx}")).send().await.unwrap();
        assert_eq!(r.status(), 200, "{axis}");
        let img = image::load_from_memory(&r.bytes().await.unwrap()).unwrap();
        assert_eq!((img.width(), img.height()), size, "{axis}");
    }
}
