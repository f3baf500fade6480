//! Fine-tuning regimes.
//!
//! * VocabFine: prompt-pair logits for every abnormality, laid out
//!   `[pos_1, neg_1, pos_2, neg_2, ...]`, trained with BCE against interleaved one-hot
//!   targets. The logit array is processed in fixed-size chunks; by default chunk
//!   gradients are summed and applied in one optimizer step.
//! * LiPro: a linear head on the L2-normalized volume embedding with a sigmoid per label.

use candle_core::backprop::GradStore;
use candle_core::{DType, Device, Tensor, Var};
use candle_nn::optim::{AdamW, Optimizer, ParamsAdamW};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::clip::{l2_normalize_rows, CtClip};
use crate::corpus::{AbnormalityVocab, LabelVector};
use crate::dataset::StudyData;
use crate::encoders::{Embedding, Patches, TokenizedText};
use crate::error::{Error, Result};
use crate::nn::{Checkpoint, Init, ParamStore};
use crate::train::scalar;
use crate::zeroshot::{build_vocab_prompts, PromptPair, PromptTemplate};

pub const DEFAULT_CHUNK: usize = 12;

/// Interleaved targets: label 1 → `(1, 0)`, label 0 → `(0, 1)`.
pub fn vocabfine_targets(labels: &LabelVector) -> Result<Vec<f64>> {
    if !labels.is_binary() {
        return Err(Error::InvalidArgument("VocabFine targets need binary labels".into()));
    }
    Ok(labels
        .values()
        .iter()
        .flat_map(|&l| if l == 1.0 { [1.0, 0.0] } else { [0.0, 1.0] })
        .collect())
}

/// Inverse of [`vocabfine_targets`].
pub fn labels_from_targets(targets: &[f64]) -> Result<LabelVector> {
    if targets.len() % 2 != 0 {
        return Err(Error::InvalidArgument("target array has odd length".into()));
    }
    let v = targets
        .chunks(2)
        .map(|p| match (p[0], p[1]) {
            (1.0, 0.0) => Ok(1u8),
            (0.0, 1.0) => Ok(0u8),
            _ => Err(Error::InvalidArgument(format!("invalid target pair {p:?}"))),
        })
        .collect::<Result<Vec<_>>>()?;
    LabelVector::from_binary(&v)
}

/// One item's `2·V` prompt logits with the chunk layout used for training.
#[derive(Debug, Clone, PartialEq)]
pub struct VocabFineBatchLogits {
    pub values: Vec<f64>,
    pub chunk_size: usize,
}

impl VocabFineBatchLogits {
    pub fn new(values: Vec<f64>, chunk_size: usize) -> Result<Self> {
        check_chunking(values.len(), chunk_size)?;
        Ok(Self { values, chunk_size })
    }

    pub fn vocab_size(&self) -> usize {
        self.values.len() / 2
    }

    pub fn chunks(&self) -> std::slice::Chunks<'_, f64> {
        self.values.chunks(self.chunk_size)
    }

    pub fn pair(&self, a: usize) -> (f64, f64) {
        (self.values[2 * a], self.values[2 * a + 1])
    }
}

fn check_chunking(len: usize, chunk: usize) -> Result<()> {
    if len == 0 || len % 2 != 0 {
        return Err(Error::InvalidArgument(format!("logit array length {len} is not 2·V")));
    }
    if chunk == 0 || len % chunk != 0 {
        return Err(Error::InvalidArgument(format!(
            "chunk size {chunk} does not divide {len} logits"
        )));
    }
    Ok(())
}

/// Element-wise BCE with logits, summed: `max(x,0) − x·y + log(1 + e^−|x|)`.
pub fn bce_with_logits_sum(logits: &Tensor, targets: &Tensor) -> Result<Tensor> {
    let pos = logits.relu()?;
    let soft = ((logits.abs()?.neg()?.exp()? + 1.0)?).log()?;
    Ok(((pos - (logits * targets)?)? + soft)?.sum_all()?)
}

pub fn bce_with_logits_mean(logits: &Tensor, targets: &Tensor) -> Result<Tensor> {
    let n = logits.elem_count() as f64;
    Ok((bce_with_logits_sum(logits, targets)? / n)?)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum VocabFreeze {
    /// Train every parameter.
    #[default]
    None,
    /// Train only the two projection layers into the shared space.
    ProjectionsOnly,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct VocabFineConfig {
    pub template_id: u8,
    pub chunk_size: usize,
    /// Apply an optimizer step after every chunk instead of once per logit array.
    pub step_per_chunk: bool,
    pub freeze: VocabFreeze,
    pub batch_size: usize,
    pub steps: usize,
    pub learning_rate: f64,
    pub weight_decay: f64,
    pub seed: u64,
}

impl Default for VocabFineConfig {
    fn default() -> Self {
        Self {
            template_id: 7,
            chunk_size: DEFAULT_CHUNK,
            step_per_chunk: false,
            freeze: VocabFreeze::None,
            batch_size: 8,
            steps: 50,
            learning_rate: 1e-4,
            weight_decay: 0.0,
            seed: 0,
        }
    }
}

const PROJECTION_PARAMS: [&str; 2] = ["vision.proj.", "text.proj."];

pub struct VocabFineTrainer {
    model: CtClip,
    opt: AdamW,
    cfg: VocabFineConfig,
    pairs: Vec<PromptPair>,
    /// Prompt tokens in logit order: `[pos_1, neg_1, ...]`.
    tokens: Vec<TokenizedText>,
    rng: ChaCha8Rng,
    order: Vec<usize>,
    cursor: usize,
    step: usize,
}

impl VocabFineTrainer {
    pub fn new(model: CtClip, vocab: &AbnormalityVocab, template: &PromptTemplate, cfg: VocabFineConfig) -> Result<Self> {
        check_chunking(2 * vocab.size(), cfg.chunk_size)?;
        if cfg.batch_size == 0 {
            return Err(Error::Config("batch_size must be positive".into()));
        }
        let pairs = build_vocab_prompts(vocab, template)?;
        let tokens = pairs
            .iter()
            .flat_map(|p| [model.tokenize(&p.positive), model.tokenize(&p.negative)])
            .collect::<Result<Vec<_>>>()?;
        let vars = match cfg.freeze {
            VocabFreeze::None => model.store().all_vars(),
            VocabFreeze::ProjectionsOnly => model.store().vars_with_prefix(&PROJECTION_PARAMS),
        };
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
            cfg,
            pairs,
            tokens,
            order: Vec::new(),
            cursor: 0,
            step: 0,
        })
    }

    pub fn model(&self) -> &CtClip {
        &self.model
    }

    pub fn into_model(self) -> CtClip {
        self.model
    }

    pub fn prompt_pairs(&self) -> &[PromptPair] {
        &self.pairs
    }

    fn chunk_logits(&self, vol: &Tensor, range: std::ops::Range<usize>) -> Result<Tensor> {
        let toks: Vec<&TokenizedText> = self.tokens[range].iter().collect();
        let t = l2_normalize_rows(&self.model.text_features(&toks)?)?;
        Ok(vol.matmul(&t.t()?)?.broadcast_mul(&self.model.logit_scale_tensor()?)?)
    }

    fn volume_tensor(&self, patches: &[&Patches]) -> Result<Tensor> {
        l2_normalize_rows(&self.model.volume_features(patches)?)
    }

    /// Per-item `2·V` logit arrays (no gradient tracking needed by callers).
    pub fn logits(&self, patches: &[&Patches]) -> Result<Vec<VocabFineBatchLogits>> {
        let v = self.volume_tensor(patches)?;
        let all = self.chunk_logits(&v, 0..self.tokens.len())?;
        all.to_dtype(DType::F64)?
            .to_vec2::<f64>()?
            .into_iter()
            .map(|row| VocabFineBatchLogits::new(row, self.cfg.chunk_size))
            .collect()
    }

    fn target_tensor(&self, labels: &[&LabelVector]) -> Result<Tensor> {
        let mut flat = Vec::with_capacity(labels.len() * self.tokens.len());
        for l in labels {
            l.check_len(self.pairs.len())?;
            flat.extend(vocabfine_targets(l)?);
        }
        Ok(Tensor::from_vec(flat, (labels.len(), self.tokens.len()), &Device::Cpu)?
            .to_dtype(self.model.dtype())?)
    }

    /// Accumulated gradient of the mean BCE over the batch, computed chunk by chunk.
    pub fn chunked_gradients(&self, patches: &[&Patches], labels: &[&LabelVector]) -> Result<(f64, GradStore)> {
        let targets = self.target_tensor(labels)?;
        let v = self.volume_tensor(patches)?;
        let n = targets.elem_count() as f64;
        let mut total = 0.0;
        let mut grads: Option<GradStore> = None;
        let c = self.cfg.chunk_size;
        for start in (0..self.tokens.len()).step_by(c) {
            let logits = self.chunk_logits(&v, start..start + c)?;
            let loss = (bce_with_logits_sum(&logits, &targets.narrow(1, start, c)?)? / n)?;
            total += scalar(&loss)?;
            let g = loss.backward()?;
            match grads.as_mut() {
                Some(acc) => acc.extend(g)?,
                None => grads = Some(g),
            }
        }
        Ok((total, grads.expect("at least one chunk")))
    }

    /// One update on a batch. Returns the mean BCE before the update.
    pub fn step(&mut self, patches: &[&Patches], labels: &[&LabelVector]) -> Result<f64> {
        if patches.len() != labels.len() || patches.is_empty() {
            return Err(Error::InvalidArgument("batch of volumes and labels must match and be non-empty".into()));
        }
        let loss = if self.cfg.step_per_chunk {
            let targets = self.target_tensor(labels)?;
            let n = targets.elem_count() as f64;
            let c = self.cfg.chunk_size;
            let mut total = 0.0;
            for start in (0..self.tokens.len()).step_by(c) {
                let v = self.volume_tensor(patches)?;
                let logits = self.chunk_logits(&v, start..start + c)?;
                let loss = (bce_with_logits_sum(&logits, &targets.narrow(1, start, c)?)? / n)?;
                total += scalar(&loss)?;
                self.opt.step(&loss.backward()?)?;
            }
            total
        } else {
            let (loss, grads) = self.chunked_gradients(patches, labels)?;
            self.opt.step(&grads)?;
            loss
        };
        if !loss.is_finite() {
            return Err(Error::NonFiniteLoss {
                step: self.step,
                loss,
                batch: Vec::new(),
            });
        }
        self.model.clamp_logit_scale()?;
        self.step += 1;
        Ok(loss)
    }

    /// Train on every labeled study in `data` for `cfg.steps` steps.
    pub fn fit(&mut self, data: &[StudyData]) -> Result<Vec<f64>> {
        let labeled: Vec<&StudyData> = data.iter().filter(|d| d.labels.is_some()).collect();
        if labeled.is_empty() {
            return Err(Error::InvalidArgument("VocabFine needs labeled studies".into()));
        }
        let mut losses = Vec::with_capacity(self.cfg.steps);
        for _ in 0..self.cfg.steps {
            let idx = next_batch(&mut self.rng, &mut self.order, &mut self.cursor, labeled.len(), self.cfg.batch_size);
            let p: Vec<&Patches> = idx.iter().map(|&i| &labeled[i].patches).collect();
            let l: Vec<&LabelVector> = idx.iter().map(|&i| labeled[i].labels.as_ref().unwrap()).collect();
            losses.push(self.step(&p, &l)?);
        }
        Ok(losses)
    }

    pub fn checkpoint(&self) -> Result<Checkpoint> {
        self.model.checkpoint(
            "vocabfine",
            serde_json::json!({
                "freeze": self.cfg.freeze,
                "template_id": self.cfg.template_id,
                "chunk_size": self.cfg.chunk_size,
                "step_per_chunk": self.cfg.step_per_chunk,
                "steps": self.step,
            }),
        )
    }
}

fn next_batch(rng: &mut ChaCha8Rng, order: &mut Vec<usize>, cursor: &mut usize, n: usize, batch: usize) -> Vec<usize> {
    let b = batch.min(n);
    if *cursor + b > order.len() {
        *order = (0..n).collect();
        order.shuffle(rng);
        *cursor = 0;
    }
    let out = order[*cursor..*cursor + b].to_vec();
    *cursor += b;
    out
}

pub const LIPRO_WEIGHT: &str = "lipro.weight";
pub const LIPRO_BIAS: &str = "lipro.bias";

/// Linear probe over the normalized volume embedding.
#[derive(Debug, Clone)]
pub struct LiProHead {
    store: ParamStore,
    weight: Tensor,
    bias: Tensor,
    pub freeze_backbone: bool,
}

impl LiProHead {
    /// Small uniform weights, zero bias.
    pub fn new(vocab_size: usize, dim: usize, freeze_backbone: bool, seed: u64, dtype: DType) -> Result<Self> {
        let mut store = ParamStore::new(dtype);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut init = Init::new(&mut store, &mut rng);
        let mut lp = init.pp("lipro");
        let weight = lp.uniform("weight", &[vocab_size, dim], 0.01)?;
        let bias = lp.constant("bias", &[vocab_size], 0.0)?;
        Ok(Self {
            store,
            weight,
            bias,
            freeze_backbone,
        })
    }

    pub fn vocab_size(&self) -> usize {
        self.weight.dims()[0]
    }

    pub fn dim(&self) -> usize {
        self.weight.dims()[1]
    }

    pub fn store(&self) -> &ParamStore {
        &self.store
    }

    pub fn set(&self, weight: &[Vec<f32>], bias: &[f32]) -> Result<()> {
        let (v, d) = (self.vocab_size(), self.dim());
        if weight.len() != v || weight.iter().any(|r| r.len() != d) || bias.len() != v {
            return Err(Error::InvalidArgument(format!("head must be {v}×{d} with {v} biases")));
        }
        self.store.assign(LIPRO_WEIGHT, &[v, d], &weight.concat())?;
        self.store.assign(LIPRO_BIAS, &[v], bias)
    }

    /// `(batch, dim)` features → `(batch, V)` logits, on normalized features.
    pub fn logits(&self, features: &Tensor) -> Result<Tensor> {
        let (_, d) = features.dims2()?;
        if d != self.dim() {
            return Err(Error::InvalidArgument(format!(
                "embedding dim {d} differs from head dim {}",
                self.dim()
            )));
        }
        let x = l2_normalize_rows(features)?;
        Ok(x.matmul(&self.weight.t()?)?.broadcast_add(&self.bias)?)
    }

    /// Per-label probabilities for one embedding, computed in f64.
    pub fn predict(&self, embedding: &Embedding) -> Result<LabelVector> {
        if embedding.dim() != self.dim() {
            return Err(Error::InvalidArgument(format!(
                "embedding dim {} differs from head dim {}",
                embedding.dim(),
                self.dim()
            )));
        }
        let e = embedding.normalized()?;
        let w = self.weight.to_dtype(DType::F64)?.to_vec2::<f64>()?;
        let b = self.bias.to_dtype(DType::F64)?.to_vec1::<f64>()?;
        let p = w
            .iter()
            .zip(&b)
            .map(|(row, bias)| {
                let z: f64 = row.iter().zip(&e.values).map(|(w, x)| w * *x as f64).sum::<f64>() + bias;
                crate::zeroshot::positive_probability(z, 0.0)
            })
            .collect();
        LabelVector::new(p)
    }

    /// Store this head's tensors into a model checkpoint.
    pub fn attach(&self, ck: &mut Checkpoint) -> Result<()> {
        let own = Checkpoint::from_store(serde_json::Value::Null, &self.store)?;
        ck.tensors.extend(own.tensors);
        Ok(())
    }

    pub fn from_checkpoint(ck: &Checkpoint, dtype: DType) -> Result<Self> {
        let (ws, _) = ck
            .tensors
            .get(LIPRO_WEIGHT)
            .ok_or_else(|| Error::Checkpoint("checkpoint has no linear probe head".into()))?;
        let freeze = ck.meta["extra"]["freeze_backbone"].as_bool().unwrap_or(true);
        let head = Self::new(ws[0], ws[1], freeze, 0, dtype)?;
        let own = Checkpoint {
            meta: serde_json::Value::Null,
            tensors: ck
                .tensors
                .iter()
                .filter(|(n, _)| n.starts_with("lipro."))
                .map(|(n, v)| (n.clone(), v.clone()))
                .collect(),
        };
        own.load_into(&head.store)?;
        Ok(head)
    }
}

/// Probabilities for one volume through the model and a head.
pub fn lipro_forward(model: &CtClip, patches: &Patches, head: &LiProHead) -> Result<LabelVector> {
    head.predict(&model.encode_patches(patches)?)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LiProConfig {
    pub freeze_backbone: bool,
    pub batch_size: usize,
    pub steps: usize,
    pub learning_rate: f64,
    pub weight_decay: f64,
    pub seed: u64,
}

impl Default for LiProConfig {
    fn default() -> Self {
        Self {
            freeze_backbone: true,
            batch_size: 16,
            steps: 200,
            learning_rate: 1e-2,
            weight_decay: 0.0,
            seed: 0,
        }
    }
}

fn label_tensor(labels: &[&LabelVector], dtype: DType) -> Result<Tensor> {
    let v = labels.first().map_or(0, |l| l.len());
    let flat: Vec<f64> = labels.iter().flat_map(|l| l.values().iter().copied()).collect();
    Ok(Tensor::from_vec(flat, (labels.len(), v), &Device::Cpu)?.to_dtype(dtype)?)
}

/// Train a head on fixed embeddings. Returns the per-step mean BCE.
pub fn train_head(head: &LiProHead, embeddings: &[Embedding], labels: &[LabelVector], cfg: &LiProConfig) -> Result<Vec<f64>> {
    if embeddings.len() != labels.len() || embeddings.is_empty() {
        return Err(Error::InvalidArgument("embeddings and labels must match and be non-empty".into()));
    }
    for l in labels {
        l.check_len(head.vocab_size())?;
    }
    let dtype = head.store.dtype();
    let mut opt = AdamW::new(
        head.store.all_vars(),
        ParamsAdamW {
            lr: cfg.learning_rate,
            weight_decay: cfg.weight_decay,
            ..Default::default()
        },
    )?;
    let d = head.dim();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let (mut order, mut cursor) = (Vec::new(), 0);
    let mut losses = Vec::with_capacity(cfg.steps);
    for _ in 0..cfg.steps {
        let idx = next_batch(&mut rng, &mut order, &mut cursor, embeddings.len(), cfg.batch_size);
        let flat: Vec<f32> = idx.iter().flat_map(|&i| embeddings[i].values.iter().copied()).collect();
        let x = Tensor::from_vec(flat, (idx.len(), d), &Device::Cpu)?.to_dtype(dtype)?;
        let y = label_tensor(&idx.iter().map(|&i| &labels[i]).collect::<Vec<_>>(), dtype)?;
        let loss = bce_with_logits_mean(&head.logits(&x)?, &y)?;
        losses.push(scalar(&loss)?);
        opt.step(&loss.backward()?)?;
    }
    Ok(losses)
}

/// Train a probe on labeled studies. With a frozen backbone the embeddings are computed
/// once and only the head is optimized; otherwise head and both towers train jointly.
pub fn lipro_train(model: &CtClip, head: &LiProHead, data: &[StudyData], cfg: &LiProConfig) -> Result<Vec<f64>> {
    let labeled: Vec<&StudyData> = data.iter().filter(|d| d.labels.is_some()).collect();
    if labeled.is_empty() {
        return Err(Error::InvalidArgument("linear probe needs labeled studies".into()));
    }
    let labels: Vec<LabelVector> = labeled.iter().map(|d| d.labels.clone().unwrap()).collect();
    if cfg.freeze_backbone {
        let p: Vec<&Patches> = labeled.iter().map(|d| &d.patches).collect();
        let emb = model.encode_patch_batch(&p, 8)?;
        return train_head(head, &emb, &labels, cfg);
    }
    let mut vars = head.store.all_vars();
    vars.extend(model.store().all_vars());
    let mut opt = AdamW::new(
        vars,
        ParamsAdamW {
            lr: cfg.learning_rate,
            weight_decay: cfg.weight_decay,
            ..Default::default()
        },
    )?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let (mut order, mut cursor) = (Vec::new(), 0);
    let mut losses = Vec::with_capacity(cfg.steps);
    for _ in 0..cfg.steps {
        let idx = next_batch(&mut rng, &mut order, &mut cursor, labeled.len(), cfg.batch_size);
        let p: Vec<&Patches> = idx.iter().map(|&i| &labeled[i].patches).collect();
        let y = label_tensor(&idx.iter().map(|&i| &labels[i]).collect::<Vec<_>>(), model.dtype())?;
        let loss = bce_with_logits_mean(&head.logits(&model.volume_features(&p)?)?, &y)?;
        losses.push(scalar(&loss)?);
        opt.step(&loss.backward()?)?;
    }
    Ok(losses)
}

/// Model plus head in one checkpoint, tagged with the regime and freeze flag.
pub fn lipro_checkpoint(model: &CtClip, head: &LiProHead, vocab: &AbnormalityVocab) -> Result<Checkpoint> {
    let mut ck = model.checkpoint(
        "lipro",
        serde_json::json!({ "freeze_backbone": head.freeze_backbone, "vocab": vocab.names() }),
    )?;
    head.attach(&mut ck)?;
    Ok(ck)
}

/// Vars the given regime leaves untouched, for freeze checks.
pub fn frozen_vars(model: &CtClip, freeze: VocabFreeze) -> Vec<(String, Var)> {
    match freeze {
        VocabFreeze::None => Vec::new(),
        VocabFreeze::ProjectionsOnly => model
            .store()
            .names()
            .filter(|n| !PROJECTION_PARAMS.iter().any(|p| n.starts_with(p)))
            .map(|n| (n.to_string(), model.store().get(n).unwrap().clone()))
            .collect(),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::evalstats::auroc;
    use crate::train::tests::{tiny_model, tiny_pairs};
    use crate::zeroshot::default_templates;
    use proptest::{prop_assert_eq, proptest};
    use rand::Rng;

    fn oracle_bce(x: &[f64], y: &[f64]) -> f64 {
        let s = |v: f64| 1.0 / (1.0 + (-v).exp());
        x.iter()
            .zip(y)
            .map(|(&x, &y)| -(y * s(x).ln() + (1.0 - y) * (1.0 - s(x)).ln()))
            .sum::<f64>()
            / x.len() as f64
    }

    #[test]
    fn targets_layout() {
        let t = vocabfine_targets(&LabelVector::from_binary(&[1, 0]).unwrap()).unwrap();
        assert_eq!(t, vec![1.0, 0.0, 0.0, 1.0]);
        let t = vocabfine_targets(&LabelVector::from_binary(&[1, 1, 1]).unwrap()).unwrap();
        assert_eq!(t, vec![1.0, 0.0, 1.0, 0.0, 1.0, 0.0]);
        assert!(vocabfine_targets(&LabelVector::new(vec![0.3]).unwrap()).is_err());
    }

    proptest! {
        #[test]
        fn targets_round_trip(bits in proptest::collection::vec(0u8..2, 1..40)) {
            let l = LabelVector::from_binary(&bits).unwrap();
            prop_assert_eq!(labels_from_targets(&vocabfine_targets(&l).unwrap()).unwrap(), l);
        }
    }

    #[test]
    fn chunk_layout_checks() {
        let l = VocabFineBatchLogits::new(vec![0.0; 36], 12).unwrap();
        assert_eq!(l.vocab_size(), 18);
        assert_eq!(l.chunks().count(), 3);
        assert!(VocabFineBatchLogits::new(vec![0.0; 36], 10).is_err());
    }

    #[test]
    fn bce_matches_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let x: Vec<f64> = (0..36).map(|_| rng.gen_range(-6.0..6.0)).collect();
        let y: Vec<f64> = (0..36).map(|_| rng.gen_range(0..2) as f64).collect();
        let xt = Tensor::new(x.as_slice(), &Device::Cpu).unwrap();
        let yt = Tensor::new(y.as_slice(), &Device::Cpu).unwrap();
        let got = scalar(&bce_with_logits_mean(&xt, &yt).unwrap()).unwrap();
        assert!((got - oracle_bce(&x, &y)).abs() < 1e-6);
        let sat = Tensor::new(&[60.0f64, -60.0], &Device::Cpu).unwrap();
        let tgt = Tensor::new(&[1.0f64, 0.0], &Device::Cpu).unwrap();
        assert!(scalar(&bce_with_logits_mean(&sat, &tgt).unwrap()).unwrap() < 1e-20);
    }

    #[test]
    fn zero_head_gives_half() {
        let head = LiProHead::new(3, 4, true, 0, DType::F64).unwrap();
        head.set(&vec![vec![0.0; 4]; 3], &[0.0; 3]).unwrap();
        let p = head.predict(&Embedding::new(vec![1.0, 2.0, 3.0, 4.0])).unwrap();
        assert_eq!(p.values(), &[0.5; 3]);
        assert!(head.predict(&Embedding::new(vec![1.0])).is_err());
    }

    #[test]
    fn head_matches_affine_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let head = LiProHead::new(18, 6, true, 0, DType::F64).unwrap();
        let w: Vec<Vec<f32>> = (0..18).map(|_| (0..6).map(|_| rng.gen_range(-2.0..2.0)).collect()).collect();
        let b: Vec<f32> = (0..18).map(|_| rng.gen_range(-1.0..1.0)).collect();
        head.set(&w, &b).unwrap();
        let e: Vec<f32> = (0..6).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let n = e.iter().map(|v| (*v as f64).powi(2)).sum::<f64>().sqrt();
        let p = head.predict(&Embedding::new(e.clone())).unwrap();
        assert_eq!(p.len(), 18);
        for a in 0..18 {
            let z: f64 = (0..6).map(|j| w[a][j] as f64 * e[j] as f64 / n).sum::<f64>() + b[a] as f64;
            assert!((p.values()[a] - 1.0 / (1.0 + (-z).exp())).abs() < 1e-6);
        }
        // the tensor path agrees
        let x = Tensor::from_vec(e, (1, 6), &Device::Cpu).unwrap().to_dtype(DType::F64).unwrap();
        let z = head.logits(&x).unwrap().to_vec2::<f64>().unwrap();
        assert!((1.0 / (1.0 + (-z[0][3]).exp()) - p.values()[3]).abs() < 1e-6);
    }

    #[test]
    fn separable_embeddings_reach_full_auroc() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut emb = Vec::new();
        let mut labels = Vec::new();
        for _ in 0..40 {
            let y: Vec<u8> = (0..2).map(|_| rng.gen_range(0..2)).collect();
            let mut e: Vec<f32> = (0..4).map(|_| rng.gen_range(-0.3..0.3)).collect();
            e[0] += if y[0] == 1 { 1.0 } else { -1.0 };
            e[1] += if y[1] == 1 { 1.0 } else { -1.0 };
            emb.push(Embedding::new(e));
            labels.push(LabelVector::from_binary(&y).unwrap());
        }
        let head = LiProHead::new(2, 4, true, 0, DType::F32).unwrap();
        let zero = head.store().snapshot().unwrap();
        train_head(&head, &emb, &labels, &LiProConfig { steps: 0, ..Default::default() }).unwrap();
        assert_eq!(zero, head.store().snapshot().unwrap());
        train_head(&head, &emb, &labels, &LiProConfig { steps: 200, ..Default::default() }).unwrap();
        for a in 0..2 {
            let s: Vec<f64> = emb.iter().map(|e| head.predict(e).unwrap().values()[a]).collect();
            let t: Vec<u8> = labels.iter().map(|l| l.values()[a] as u8).collect();
            assert_eq!(auroc(&s, &t).unwrap(), 1.0);
        }
    }

    fn vocab18() -> AbnormalityVocab {
        AbnormalityVocab::new((0..18).map(|i| format!("finding {i}"))).unwrap()
    }

    fn labeled(n: usize, v: usize, seed: u64) -> Vec<LabelVector> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..n)
            .map(|_| LabelVector::from_binary(&(0..v).map(|_| rng.gen_range(0..2)).collect::<Vec<u8>>()).unwrap())
            .collect()
    }

    #[test]
    fn chunked_step_equals_unchunked() {
        let model = tiny_model(DType::F64);
        let vocab = vocab18();
        let template = &default_templates()[6];
        let pairs = tiny_pairs(&model, 3, 5);
        let labels = labeled(3, 18, 6);
        let p: Vec<&Patches> = pairs.iter().map(|x| &x.patches).collect();
        let l: Vec<&LabelVector> = labels.iter().collect();
        // fresh, identically seeded models so the runs share no parameter storage
        let run = |chunk| {
            let cfg = VocabFineConfig { chunk_size: chunk, learning_rate: 1e-2, ..Default::default() };
            let mut t = VocabFineTrainer::new(tiny_model(DType::F64), &vocab, template, cfg).unwrap();
            let loss = t.step(&p, &l).unwrap();
            (loss, t.model().store().snapshot().unwrap())
        };
        let (la, a) = run(12);
        let (lb, b) = run(36);
        assert!((la - lb).abs() < 1e-9);
        for (k, va) in &a {
            for (x, y) in va.iter().zip(&b[k]) {
                assert!((x - y).abs() < 1e-6, "{k}: {x} vs {y}");
            }
        }
    }

    #[test]
    fn projection_freeze_keeps_backbone() {
        let model = tiny_model(DType::F32);
        let vocab = AbnormalityVocab::new(["alpha", "beta", "gamma"]).unwrap();
        let pairs = tiny_pairs(&model, 4, 7);
        let labels = labeled(4, 3, 8);
        let before = model.store().snapshot().unwrap();
        let cfg = VocabFineConfig {
            chunk_size: 6,
            freeze: VocabFreeze::ProjectionsOnly,
            learning_rate: 1e-2,
            ..Default::default()
        };
        let mut t = VocabFineTrainer::new(model, &vocab, &default_templates()[0], cfg).unwrap();
        let p: Vec<&Patches> = pairs.iter().map(|x| &x.patches).collect();
        let l: Vec<&LabelVector> = labels.iter().collect();
        t.step(&p, &l).unwrap();
        t.step(&p, &l).unwrap();
        let after = t.model().store().snapshot().unwrap();
        let mut changed = 0;
        for (k, v) in &before {
            if PROJECTION_PARAMS.iter().any(|p| k.starts_with(p)) {
                changed += (after[k] != *v) as usize;
            } else {
                assert_eq!(&after[k], v, "{k} moved");
            }
        }
        assert_eq!(changed, 4);
        let ck = t.checkpoint().unwrap();
        assert_eq!(ck.meta["regime"], "vocabfine");
        assert_eq!(ck.meta["extra"]["freeze"], "projections_only");
    }

    #[test]
    fn chunk_must_divide() {
        let model = tiny_model(DType::F32);
        let vocab = AbnormalityVocab::new(["alpha", "beta", "gamma"]).unwrap();
        let cfg = VocabFineConfig { chunk_size: 4, ..Default::default() };
        assert!(VocabFineTrainer::new(model, &vocab, &default_templates()[0], cfg).is_err());
    }
}
