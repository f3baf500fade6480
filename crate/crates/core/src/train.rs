//! Contrastive training of both towers.
//!
//! The loss is symmetric cross-entropy over the scaled cosine similarity matrix with
//! matched pairs on the diagonal. With `micro_batch` set, a step runs a two-pass
//! gradient cache: embeddings are computed chunk by chunk without a graph, the loss
//! gradient w.r.t. the embeddings is taken once, and each chunk is then re-encoded
//! and back-propagated against its slice of that gradient. The result equals the
//! full-batch gradient while holding only one chunk's activations at a time.

use std::io::Write;
use std::path::{Path, PathBuf};

use candle_core::backprop::GradStore;
use candle_core::{DType, Tensor, Var};
use candle_nn::optim::{AdamW, Optimizer, ParamsAdamW};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::clip::{similarity_logits, CtClip};
use crate::corpus::TextMode;
use crate::dataset::StudyData;
use crate::encoders::{Patches, TokenizedText};
use crate::error::{Error, Result};
use crate::nn::logsumexp_last;

/// Symmetric InfoNCE on a square `(n, n)` logit matrix whose diagonal holds the
/// matched pairs: the mean of the row-wise and column-wise cross-entropies.
pub fn contrastive_loss(logits: &Tensor) -> Result<Tensor> {
    let (n, m) = logits.dims2()?;
    if n != m {
        return Err(Error::InvalidArgument(format!(
            "similarity matrix must be square, got {n}×{m}"
        )));
    }
    if n == 0 {
        return Err(Error::InvalidArgument("empty batch".into()));
    }
    let eye = Tensor::eye(n, logits.dtype(), logits.device())?;
    let diag = (logits * &eye)?.sum(1)?;
    let rows = (logsumexp_last(logits)? - &diag)?.mean_all()?;
    let cols = (logsumexp_last(&logits.t()?.contiguous()?)? - &diag)?.mean_all()?;
    Ok(((rows + cols)? * 0.5)?)
}

/// One volume/report pair ready for the towers.
#[derive(Debug, Clone)]
pub struct TrainPair {
    pub study_id: String,
    pub patches: Patches,
    pub tokens: TokenizedText,
    pub text: String,
}

/// Sentences of a report, each keeping its terminator.
pub fn sentences(text: &str) -> Vec<&str> {
    text.split_inclusive(['.', '?', '!'])
        .map(str::trim)
        .filter(|s| !s.is_empty())
        .collect()
}

/// Keep each sentence with probability `keep`; at least one always survives.
pub fn drop_sentences(text: &str, keep: f64, rng: &mut impl Rng) -> String {
    let all = sentences(text);
    if all.len() <= 1 || keep >= 1.0 {
        return text.to_string();
    }
    let mut kept: Vec<&str> = all.iter().copied().filter(|_| rng.gen_bool(keep.max(0.0))).collect();
    if kept.is_empty() {
        kept.push(all[rng.gen_range(0..all.len())]);
    }
    kept.join(" ")
}

/// Pairs for every study that has report text; studies without text are skipped.
pub fn train_pairs(model: &CtClip, data: &[StudyData]) -> Result<Vec<TrainPair>> {
    data.iter()
        .filter_map(|d| d.text.as_ref().map(|t| (d, t)))
        .map(|(d, t)| {
            Ok(TrainPair {
                study_id: d.study_id.clone(),
                patches: d.patches.clone(),
                tokens: model.tokenize(t)?,
                text: t.clone(),
            })
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub steps: usize,
    pub learning_rate: f64,
    pub weight_decay: f64,
    pub seed: u64,
    /// Patient-level fraction of the training split to use.
    pub fraction: f64,
    pub text_mode: TextMode,
    /// Chunk size for gradient-cache accumulation; `None` runs the whole batch at once.
    pub micro_batch: Option<usize>,
    /// Write a checkpoint every this many steps (0 disables).
    pub checkpoint_every: usize,
    /// Per-sentence keep probability for report text augmentation; 1 disables it.
    pub sentence_keep: f64,
    /// Augment only before this step (0 = every step); later steps see full reports.
    pub sentence_keep_until: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            batch_size: 8,
            steps: 100,
            learning_rate: 1e-4,
            weight_decay: 0.0,
            seed: 0,
            fraction: 1.0,
            text_mode: TextMode::Both,
            micro_batch: None,
            checkpoint_every: 0,
            sentence_keep: 1.0,
            sentence_keep_until: 0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StepStats {
    pub step: usize,
    pub loss: f64,
    pub logit_scale: f64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub steps: Vec<StepStats>,
    pub checkpoints: Vec<PathBuf>,
}

impl TrainReport {
    pub fn losses(&self) -> Vec<f64> {
        self.steps.iter().map(|s| s.loss).collect()
    }
}

/// Optimizer state plus a deterministic batch sampler.
pub struct Trainer {
    model: CtClip,
    opt: AdamW,
    cfg: TrainConfig,
    step: usize,
    rng: ChaCha8Rng,
    aug_rng: ChaCha8Rng,
    order: Vec<usize>,
    cursor: usize,
}

impl Trainer {
    pub fn new(model: CtClip, cfg: TrainConfig) -> Result<Self> {
        let vars = model.store().all_vars();
        Self::with_vars(model, cfg, vars)
    }

    /// Train only the given parameters.
    pub fn with_vars(model: CtClip, cfg: TrainConfig, vars: Vec<Var>) -> Result<Self> {
        if cfg.batch_size == 0 {
            return Err(Error::Config("batch_size must be positive".into()));
        }
        let opt = AdamW::new(
            vars,
            ParamsAdamW {
                lr: cfg.learning_rate,
                weight_decay: cfg.weight_decay,
                ..Default::default()
            },
        )?;
        Ok(Self {
            model,
            opt,
            rng: ChaCha8Rng::seed_from_u64(cfg.seed),
            aug_rng: {
                let mut r = ChaCha8Rng::seed_from_u64(cfg.seed);
                r.set_stream(1);
                r
            },
            cfg,
            step: 0,
            order: Vec::new(),
            cursor: 0,
        })
    }

    /// Continue from a saved model at `start_step`. The batch sampler is replayed to
    /// the same position; optimizer moments restart from zero.
    pub fn resume(model: CtClip, cfg: TrainConfig, start_step: usize, n_pairs: usize) -> Result<Self> {
        let mut t = Self::new(model, cfg)?;
        for _ in 0..start_step {
            t.next_batch(n_pairs);
        }
        t.step = start_step;
        Ok(t)
    }

    pub fn model(&self) -> &CtClip {
        &self.model
    }

    pub fn into_model(self) -> CtClip {
        self.model
    }

    pub fn current_step(&self) -> usize {
        self.step
    }

    pub fn config(&self) -> &TrainConfig {
        &self.cfg
    }

    /// Indices of the next batch: shuffled epochs, partial tails dropped.
    pub fn next_batch(&mut self, n: usize) -> Vec<usize> {
        let b = self.cfg.batch_size.min(n);
        if self.cursor + b > self.order.len() {
            self.order = (0..n).collect();
            self.order.shuffle(&mut self.rng);
            self.cursor = 0;
        }
        let out = self.order[self.cursor..self.cursor + b].to_vec();
        self.cursor += b;
        out
    }

    fn augment(&mut self, idx: &[usize], pairs: &[TrainPair]) -> Result<Option<Vec<TrainPair>>> {
        let until = self.cfg.sentence_keep_until;
        if self.cfg.sentence_keep >= 1.0 || (until > 0 && self.step >= until) {
            return Ok(None);
        }
        idx.iter()
            .map(|&i| {
                let p = &pairs[i];
                let text = drop_sentences(&p.text, self.cfg.sentence_keep, &mut self.aug_rng);
                Ok(TrainPair {
                    study_id: p.study_id.clone(),
                    patches: p.patches.clone(),
                    tokens: self.model.tokenize(&text)?,
                    text,
                })
            })
            .collect::<Result<Vec<_>>>()
            .map(Some)
    }

    /// Gradients of the contrastive loss for one batch, without touching parameters.
    pub fn batch_gradients(&self, batch: &[&TrainPair]) -> Result<(f64, GradStore)> {
        match self.cfg.micro_batch {
            Some(m) if m > 0 && m < batch.len() => self.cached_gradients(batch, m),
            _ => self.full_gradients(batch),
        }
    }

    fn full_gradients(&self, batch: &[&TrainPair]) -> Result<(f64, GradStore)> {
        let p: Vec<&Patches> = batch.iter().map(|b| &b.patches).collect();
        let t: Vec<&TokenizedText> = batch.iter().map(|b| &b.tokens).collect();
        let v = self.model.volume_features(&p)?;
        let w = self.model.text_features(&t)?;
        let logits = similarity_logits(&v, &w, &self.model.logit_scale_tensor()?)?;
        let loss = contrastive_loss(&logits)?;
        let value = scalar(&loss)?;
        self.check_finite(value, batch)?;
        Ok((value, loss.backward()?))
    }

    fn cached_gradients(&self, batch: &[&TrainPair], chunk: usize) -> Result<(f64, GradStore)> {
        let model = &self.model;
        let p: Vec<&Patches> = batch.iter().map(|b| &b.patches).collect();
        let t: Vec<&TokenizedText> = batch.iter().map(|b| &b.tokens).collect();
        // pass 1: graph-free embeddings
        let mut vs = Vec::new();
        let mut ws = Vec::new();
        for (pc, tc) in p.chunks(chunk).zip(t.chunks(chunk)) {
            vs.push(model.volume_features(pc)?.detach());
            ws.push(model.text_features(tc)?.detach());
        }
        let v = Var::from_tensor(&Tensor::cat(&vs, 0)?)?;
        let w = Var::from_tensor(&Tensor::cat(&ws, 0)?)?;
        let logits = similarity_logits(v.as_tensor(), w.as_tensor(), &model.logit_scale_tensor()?)?;
        let loss = contrastive_loss(&logits)?;
        let value = scalar(&loss)?;
        self.check_finite(value, batch)?;
        let mut grads = loss.backward()?;
        let gv = grads
            .remove(v.as_tensor())
            .ok_or_else(|| Error::InvalidArgument("no gradient for volume embeddings".into()))?;
        let gw = grads
            .remove(w.as_tensor())
            .ok_or_else(|| Error::InvalidArgument("no gradient for text embeddings".into()))?;
        // pass 2: re-encode each chunk and push its slice of the embedding gradient
        let mut start = 0;
        for (pc, tc) in p.chunks(chunk).zip(t.chunks(chunk)) {
            let len = pc.len();
            let sv = (model.volume_features(pc)? * gv.narrow(0, start, len)?)?.sum_all()?;
            grads.extend(sv.backward()?)?;
            let sw = (model.text_features(tc)? * gw.narrow(0, start, len)?)?.sum_all()?;
            grads.extend(sw.backward()?)?;
            start += len;
        }
        Ok((value, grads))
    }

    fn check_finite(&self, loss: f64, batch: &[&TrainPair]) -> Result<()> {
        if loss.is_finite() {
            Ok(())
        } else {
            Err(Error::NonFiniteLoss {
                step: self.step,
                loss,
                batch: batch.iter().map(|b| b.study_id.clone()).collect(),
            })
        }
    }

    /// One optimizer step on the given batch, followed by the logit-scale clamp.
    pub fn train_step(&mut self, batch: &[&TrainPair]) -> Result<StepStats> {
        let (loss, grads) = self.batch_gradients(batch)?;
        self.opt.step(&grads)?;
        self.model.clamp_logit_scale()?;
        self.step += 1;
        Ok(StepStats {
            step: self.step,
            loss,
            logit_scale: self.model.logit_scale(),
        })
    }

    /// Run until `cfg.steps`, appending one JSON line per step to `log`.
    /// Periodic checkpoints go to `checkpoint_dir` when configured.
    pub fn fit(
        &mut self,
        pairs: &[TrainPair],
        mut log: Option<&mut dyn Write>,
        checkpoint_dir: Option<&Path>,
    ) -> Result<TrainReport> {
        if pairs.is_empty() {
            return Err(Error::InvalidArgument("no training pairs".into()));
        }
        let mut report = TrainReport::default();
        while self.step < self.cfg.steps {
            let idx = self.next_batch(pairs.len());
            let augmented = self.augment(&idx, pairs)?;
            let batch: Vec<&TrainPair> = match &augmented {
                Some(a) => a.iter().collect(),
                None => idx.iter().map(|&i| &pairs[i]).collect(),
            };
            let stats = self.train_step(&batch)?;
            if let Some(w) = log.as_deref_mut() {
                let line = serde_json::json!({
                    "step": stats.step,
                    "loss": stats.loss,
                    "logit_scale": stats.logit_scale,
                    "temperature": 1.0 / stats.logit_scale,
                    "lr": self.cfg.learning_rate,
                });
                writeln!(w, "{line}").map_err(|e| Error::io("<metrics log>", e))?;
            }
            report.steps.push(stats);
            if let Some(dir) = checkpoint_dir {
                if self.cfg.checkpoint_every > 0 && self.step % self.cfg.checkpoint_every == 0 {
                    let p = dir.join(format!("step_{:06}.ckpt", self.step));
                    self.save(&p)?;
                    report.checkpoints.push(p);
                }
            }
        }
        Ok(report)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        self.model.save(
            path,
            "contrastive",
            serde_json::json!({ "step": self.step, "train": self.cfg }),
        )
    }
}

pub(crate) fn scalar(t: &Tensor) -> Result<f64> {
    Ok(t.to_dtype(DType::F64)?.to_scalar::<f64>()?)
}

/// Step recorded in a checkpoint written by [`Trainer::save`].
pub fn checkpoint_step(meta: &serde_json::Value) -> usize {
    meta["extra"]["step"].as_u64().unwrap_or(0) as usize
}

#[cfg(test)]
pub(crate) mod tests {
    use super::*;
    use crate::clip::ClipConfig;
    use crate::encoders::{PatchConfig, TextConfig, WordTokenizer};
    use crate::volpre::TargetGeometry;
    use candle_core::Device;
    use rand::Rng;

    fn oracle_loss(m: &[Vec<f64>]) -> f64 {
        let n = m.len();
        let lse = |xs: Vec<f64>| {
            let mx = xs.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            mx + xs.iter().map(|x| (x - mx).exp()).sum::<f64>().ln()
        };
        let mut row = 0.0;
        let mut col = 0.0;
        for i in 0..n {
            row += lse(m[i].clone()) - m[i][i];
            col += lse((0..n).map(|j| m[j][i]).collect()) - m[i][i];
        }
        (row / n as f64 + col / n as f64) / 2.0
    }

    fn random_matrix(seed: u64, n: usize) -> Vec<Vec<f64>> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..n).map(|_| (0..n).map(|_| rng.gen_range(-5.0..5.0)).collect()).collect()
    }

    fn tensor(m: &[Vec<f64>]) -> Tensor {
        let n = m.len();
        Tensor::from_vec(m.concat(), (n, n), &Device::Cpu).unwrap()
    }

    #[test]
    fn loss_matches_scalar_oracle() {
        for seed in 0..5 {
            let m = random_matrix(seed, 4);
            let got = scalar(&contrastive_loss(&tensor(&m)).unwrap()).unwrap();
            assert!((got - oracle_loss(&m)).abs() < 1e-6, "{got} vs {}", oracle_loss(&m));
        }
    }

    #[test]
    fn single_pair_has_zero_loss() {
        let got = scalar(&contrastive_loss(&tensor(&[vec![3.7]])).unwrap()).unwrap();
        assert_eq!(got, 0.0);
    }

    #[test]
    fn loss_invariant_under_joint_permutation() {
        let m = random_matrix(9, 5);
        let perm = [3, 0, 4, 1, 2];
        let pm: Vec<Vec<f64>> = perm.iter().map(|&i| perm.iter().map(|&j| m[i][j]).collect()).collect();
        let a = scalar(&contrastive_loss(&tensor(&m)).unwrap()).unwrap();
        let b = scalar(&contrastive_loss(&tensor(&pm)).unwrap()).unwrap();
        assert!((a - b).abs() < 1e-12);
    }

    #[test]
    fn non_square_rejected() {
        let t = Tensor::zeros((2, 3), DType::F64, &Device::Cpu).unwrap();
        assert!(contrastive_loss(&t).is_err());
    }

    #[test]
    fn gradient_matches_finite_differences() {
        let m = random_matrix(21, 4);
        let var = Var::from_tensor(&tensor(&m)).unwrap();
        let loss = contrastive_loss(var.as_tensor()).unwrap();
        let g = loss.backward().unwrap().get(var.as_tensor()).unwrap().to_vec2::<f64>().unwrap();
        let h = 1e-6;
        for i in 0..4 {
            for j in 0..4 {
                let mut p = m.clone();
                p[i][j] += h;
                let mut q = m.clone();
                q[i][j] -= h;
                let fd = (oracle_loss(&p) - oracle_loss(&q)) / (2.0 * h);
                assert!((fd - g[i][j]).abs() < 1e-4, "({i},{j}) {fd} vs {}", g[i][j]);
            }
        }
    }

    pub(crate) fn tiny_model(dtype: DType) -> CtClip {
        let config = ClipConfig {
            geometry: TargetGeometry {
                spacing_mm: [1.0; 3],
                shape: [8, 8, 4],
            },
            vision: PatchConfig {
                patch_xyz: [4, 4, 2],
                embed_dim: 8,
                depth_spatial: 1,
                depth_temporal: 1,
                heads: 2,
                mlp_ratio: 2,
            },
            text: TextConfig {
                width: 8,
                depth: 1,
                heads: 2,
                mlp_ratio: 2,
                max_len: 16,
            },
            proj_dim: 6,
            init_temperature: 0.07,
            max_logit_scale: 100.0,
        };
        let tok = WordTokenizer::build(["alpha beta gamma delta epsilon zeta eta theta"], 1);
        CtClip::new(config, tok, 5, dtype).unwrap()
    }

    pub(crate) fn tiny_pairs(model: &CtClip, n: usize, seed: u64) -> Vec<TrainPair> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let words = ["alpha", "beta", "gamma", "delta", "epsilon", "zeta", "eta", "theta"];
        (0..n)
            .map(|i| {
                let data: Vec<f32> = (0..8 * 8 * 4).map(|_| rng.gen_range(-1.0..1.0)).collect();
                let text = format!("{} {}", words[i % 8], words[(i * 3 + 1) % 8]);
                TrainPair {
                    study_id: format!("s{i}"),
                    patches: Patches {
                        grid: [2, 2, 2],
                        patch_xyz: [4, 4, 2],
                        data,
                    },
                    tokens: model.tokenize(&text).unwrap(),
                    text,
                }
            })
            .collect()
    }

    #[test]
    fn sentence_dropout_keeps_one() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        assert_eq!(sentences("A b. C? D!"), vec!["A b.", "C?", "D!"]);
        for _ in 0..50 {
            let t = drop_sentences("A. B. C.", 0.0, &mut rng);
            assert_eq!(sentences(&t).len(), 1);
        }
        assert_eq!(drop_sentences("A. B.", 1.0, &mut rng), "A. B.");
    }

    #[test]
    fn overfits_four_pairs() {
        let model = tiny_model(DType::F32);
        let pairs = tiny_pairs(&model, 4, 1);
        let cfg = TrainConfig {
            batch_size: 4,
            steps: 60,
            learning_rate: 3e-3,
            ..Default::default()
        };
        let mut t = Trainer::new(model, cfg).unwrap();
        let r = t.fit(&pairs, None, None).unwrap();
        let l = r.losses();
        assert!(l.last().unwrap() < &(l[0] * 0.5), "{l:?}");
    }

    #[test]
    fn gradient_cache_equals_full_batch() {
        let model = tiny_model(DType::F64);
        let pairs = tiny_pairs(&model, 6, 2);
        let batch: Vec<&TrainPair> = pairs.iter().collect();
        let full = Trainer::new(model.clone(), TrainConfig::default()).unwrap();
        let cached = Trainer::new(
            model.clone(),
            TrainConfig {
                micro_batch: Some(2),
                ..Default::default()
            },
        )
        .unwrap();
        let (la, ga) = full.batch_gradients(&batch).unwrap();
        let (lb, gb) = cached.batch_gradients(&batch).unwrap();
        assert!((la - lb).abs() < 1e-10);
        for var in model.store().all_vars() {
            let a = ga.get(var.as_tensor()).unwrap().flatten_all().unwrap().to_vec1::<f64>().unwrap();
            let b = gb.get(var.as_tensor()).unwrap().flatten_all().unwrap().to_vec1::<f64>().unwrap();
            for (x, y) in a.iter().zip(&b) {
                assert!((x - y).abs() < 1e-9 * (1.0 + x.abs()), "{x} vs {y}");
            }
        }
    }

    #[test]
    fn zero_learning_rate_leaves_parameters() {
        let model = tiny_model(DType::F32);
        let before = model.store().snapshot().unwrap();
        let pairs = tiny_pairs(&model, 4, 3);
        let mut t = Trainer::new(
            model,
            TrainConfig {
                learning_rate: 0.0,
                steps: 3,
                batch_size: 4,
                ..Default::default()
            },
        )
        .unwrap();
        t.fit(&pairs, None, None).unwrap();
        assert_eq!(before, t.model().store().snapshot().unwrap());
    }

    #[test]
    fn logit_scale_is_clamped() {
        let mut model = tiny_model(DType::F32);
        let var = model.store().get(crate::clip::LOGIT_SCALE).unwrap().clone();
        var.set(&Tensor::new(10f32, &Device::Cpu).unwrap()).unwrap();
        model.clamp_logit_scale().unwrap();
        assert!((model.logit_scale() - 100.0).abs() < 1e-3);
        let _ = &mut model;
    }

    #[test]
    fn training_is_deterministic() {
        let run = || {
            let model = tiny_model(DType::F32);
            let pairs = tiny_pairs(&model, 6, 4);
            let mut t = Trainer::new(
                model,
                TrainConfig {
                    batch_size: 4,
                    steps: 4,
                    learning_rate: 1e-3,
                    ..Default::default()
                },
            )
            .unwrap();
            t.fit(&pairs, None, None).unwrap();
            t.into_model().store().snapshot().unwrap()
        };
        assert_eq!(run(), run());
    }
}
