//! The retrieval HTTP service: start it on a local port, exercise each route once,
//! and keep serving when `--forever` is given.
//!
//! cargo run --release --example serve -- [--forever] [model.ckpt]
//!
//! Routes: GET /healthz, GET /index/info, POST /query/text, POST /query/volume,
//! GET /volumes/{id}/meta, GET /volumes/{id}/slice/{axial|coronal|sagittal}/{i}.

use std::sync::Arc;

use ctclip::pipeline::{fork, synthetic_model, E2eConfig};
use ctclip::retrieval::service::{spawn, ServiceState, VolumeStore};
use ctclip::retrieval::EmbeddingIndex;
use serde_json::{json, Value};

#[tokio::main]
async fn main() -> ctclip::Result<()> {
    let args: Vec<String> = std::env::args().skip(1).collect();
    let forever = args.iter().any(|a| a == "--forever");
    let ckpt = args.iter().find(|a| !a.starts_with("--")).map(std::path::PathBuf::from);
    let dir = tempfile::tempdir().map_err(|e| ctclip::Error::InvalidArgument(e.to_string()))?;
    let (corpus, data, model) = tokio::task::block_in_place(|| synthetic_model(dir.path(), &E2eConfig::quick(), ckpt.as_deref()))?;

    let index = EmbeddingIndex::build(&model, &data, "example", Some(corpus.vocab.names().to_vec()))?;
    let mut volumes = VolumeStore::new();
    for r in &corpus.records {
        volumes.add_path(r.study_id.clone(), r.volume_path.clone());
    }
    let state = ServiceState::new(index, Arc::new(fork(&model)?), volumes);
    let (addr, server) = spawn(state, "127.0.0.1:0".parse().unwrap()).await?;
    let base = format!("http://{addr}");
    println!("serving on {base}");

    let c = reqwest::Client::new();
    let err = |e: reqwest::Error| ctclip::Error::Server(e.to_string());
    let health: Value = c.get(format!("{base}/healthz")).send().await.map_err(err)?.json().await.map_err(err)?;
    println!("GET  /healthz -> {health}");
    let info: Value = c.get(format!("{base}/index/info")).send().await.map_err(err)?.json().await.map_err(err)?;
    println!("GET  /index/info -> {info}");
    let q = json!({ "text": "Small pleural effusion.", "k": 3 });
    let r: Value = c.post(format!("{base}/query/text")).json(&q).send().await.map_err(err)?.json().await.map_err(err)?;
    println!("POST /query/text -> {r}");
    let q = json!({ "study_id": data[0].study_id, "k": 3 });
    let r: Value = c.post(format!("{base}/query/volume")).json(&q).send().await.map_err(err)?.json().await.map_err(err)?;
    println!("POST /query/volume -> {r}");
    let png = c
        .get(format!("{base}/volumes/{}/slice/axial/8", data[0].study_id))
        .send()
        .await
        .map_err(err)?
        .bytes()
        .await
        .map_err(err)?;
    println!("GET  /volumes/{}/slice/axial/8 -> {} byte PNG", data[0].study_id, png.len());

    if forever {
        println!("press Ctrl-C to stop");
        let _ = tokio::signal::ctrl_c().await;
    }
    server.abort();
    Ok(())
}
