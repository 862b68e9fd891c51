//! Toy non-autoregressive transformer TTS backbone.
//!
//! ```text
//! tokens ─ embed + pos ─ encoder × L_enc ─ norm ─ + speaker embedding
//!   ─ variance stub (log-duration head, pitch head, pitch embedding)
//!   ─ [variance adapter] ─ length regulation ─ + frame pos
//!   ─ decoder × L_dec (self-attn, FFN, [adapter mixture]) ─ norm
//!   ─ projection ─ postnet ─ frames
//! ```
//!
//! Every decoder layer owns one adapter slot after its feed-forward
//! sub-layer; slots stay empty until [`BackboneModel::insert_adapters`].
//! Transformer layers are pre-norm.

use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::adapters::{MixtureOfAdapters, ResidualAdapter};
use crate::numerics::{Tensor, Var, LAYER_NORM_EPS};
use crate::params::{join, ParamId, ParamStore, Session};
use crate::rng::Rng;
use crate::{Error, Result};

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub n_encoder_layers: usize,
    pub n_decoder_layers: usize,
    pub d_model: usize,
    pub n_heads: usize,
    pub d_ffn: usize,
    pub vocab_size: usize,
    pub n_speakers: usize,
    pub mel_dim: usize,
    /// Upper bound on a predicted per-token duration.
    pub max_duration: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self::desk()
    }
}

impl ModelConfig {
    /// Small CPU-trainable configuration.
    pub fn desk() -> Self {
        Self {
            n_encoder_layers: 2,
            n_decoder_layers: 3,
            d_model: 32,
            n_heads: 2,
            d_ffn: 64,
            vocab_size: 40,
            n_speakers: 12,
            mel_dim: 16,
            max_duration: 4,
        }
    }

    /// Full-size dimensions (4 encoder and 6 decoder layers, width 256);
    /// only used for parameter accounting.
    pub fn paper_dims() -> Self {
        Self {
            n_encoder_layers: 4,
            n_decoder_layers: 6,
            d_model: 256,
            n_heads: 2,
            d_ffn: 1024,
            vocab_size: 80,
            n_speakers: 261,
            mel_dim: 80,
            max_duration: 32,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("n_encoder_layers", self.n_encoder_layers),
            ("n_decoder_layers", self.n_decoder_layers),
            ("d_model", self.d_model),
            ("n_heads", self.n_heads),
            ("d_ffn", self.d_ffn),
            ("vocab_size", self.vocab_size),
            ("n_speakers", self.n_speakers),
            ("max_duration", self.max_duration),
        ];
        for (field, v) in positive {
            if v == 0 {
                return Err(Error::Config {
                    field,
                    reason: "must be at least 1".into(),
                });
            }
        }
        if !self.d_model.is_multiple_of(self.n_heads) {
            return Err(Error::Config {
                field: "n_heads",
                reason: format!("d_model {} is not divisible by {}", self.d_model, self.n_heads),
            });
        }
        if self.d_model < 2 {
            return Err(Error::Config {
                field: "d_model",
                reason: "must be at least 2".into(),
            });
        }
        if self.mel_dim < 2 {
            return Err(Error::Config {
                field: "mel_dim",
                reason: "must be at least 2".into(),
            });
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StrategyKind {
    Finetune,
    SingleAdapter,
    AdapterMix,
}

impl StrategyKind {
    pub fn name(self) -> &'static str {
        match self {
            StrategyKind::Finetune => "finetune",
            StrategyKind::SingleAdapter => "single_adapter",
            StrategyKind::AdapterMix => "adapter_mix",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "finetune" => Some(StrategyKind::Finetune),
            "single_adapter" | "adapter" => Some(StrategyKind::SingleAdapter),
            "adapter_mix" | "adaptermix" => Some(StrategyKind::AdapterMix),
            _ => None,
        }
    }
}

/// How a pretrained backbone is specialized to a new speaker.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdaptationStrategy {
    pub kind: StrategyKind,
    pub decoder_r: usize,
    pub variance_r: usize,
    pub n_adapters: usize,
    pub capacity: f64,
}

impl AdaptationStrategy {
    pub fn finetune() -> Self {
        Self {
            kind: StrategyKind::Finetune,
            decoder_r: 0,
            variance_r: 0,
            n_adapters: 0,
            capacity: 0.0,
        }
    }

    /// One residual adapter per decoder layer: a one-adapter mixture with
    /// capacity 1.
    pub fn single_adapter(decoder_r: usize, variance_r: usize) -> Self {
        Self {
            kind: StrategyKind::SingleAdapter,
            decoder_r,
            variance_r,
            n_adapters: 1,
            capacity: 1.0,
        }
    }

    pub fn adapter_mix(decoder_r: usize, variance_r: usize, n_adapters: usize, capacity: f64) -> Self {
        Self {
            kind: StrategyKind::AdapterMix,
            decoder_r,
            variance_r,
            n_adapters,
            capacity,
        }
    }

    /// Builds a strategy of `kind`; single-adapter forces `N = 1, c = 1`.
    pub fn of_kind(kind: StrategyKind, decoder_r: usize, variance_r: usize, n_adapters: usize, capacity: f64) -> Self {
        match kind {
            StrategyKind::Finetune => Self::finetune(),
            StrategyKind::SingleAdapter => Self::single_adapter(decoder_r, variance_r),
            StrategyKind::AdapterMix => Self::adapter_mix(decoder_r, variance_r, n_adapters, capacity),
        }
    }

    pub fn uses_adapters(&self) -> bool {
        self.kind != StrategyKind::Finetune
    }

    pub fn validate(&self, d_model: usize) -> Result<()> {
        if !self.uses_adapters() {
            return Ok(());
        }
        for (field, r) in [("decoder_r", self.decoder_r), ("variance_r", self.variance_r)] {
            if r == 0 || r > d_model {
                return Err(Error::Config {
                    field,
                    reason: format!("bottleneck {r} must be in 1..={d_model}"),
                });
            }
        }
        if self.n_adapters == 0 {
            return Err(Error::Config {
                field: "n_adapters",
                reason: "must be at least 1".into(),
            });
        }
        if !(self.capacity > 0.0 && self.capacity.is_finite()) {
            return Err(Error::Config {
                field: "capacity",
                reason: format!("{} must be positive", self.capacity),
            });
        }
        if self.kind == StrategyKind::SingleAdapter && (self.n_adapters != 1 || self.capacity != 1.0) {
            return Err(Error::Config {
                field: "n_adapters",
                reason: "single_adapter requires N = 1 and c = 1".into(),
            });
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
struct Linear {
    w: ParamId,
    b: ParamId,
}

impl Linear {
    fn init(store: &mut ParamStore, prefix: &str, n_in: usize, n_out: usize, scale: f64, rng: &mut Rng) -> Result<Self> {
        let bound = scale / libm::sqrt(n_in as f64);
        let w: Vec<f64> = (0..n_in * n_out).map(|_| rng.uniform_range(-bound, bound)).collect();
        Ok(Self {
            w: store.add(join(prefix, "w"), Tensor::new(vec![n_in, n_out], w)?)?,
            b: store.add(join(prefix, "b"), Tensor::zeros(&[n_out]))?,
        })
    }

    fn forward(&self, s: &mut Session<'_>, x: Var) -> Result<Var> {
        let (w, b) = (s.param(self.w), s.param(self.b));
        let g = s.graph_mut();
        let y = g.matmul(x, w)?;
        g.add_row(y, b)
    }
}

#[derive(Clone, Debug, PartialEq)]
struct Norm {
    gain: ParamId,
    bias: ParamId,
}

impl Norm {
    fn init(store: &mut ParamStore, prefix: &str, d: usize) -> Result<Self> {
        Ok(Self {
            gain: store.add(join(prefix, "gain"), Tensor::filled(&[d], 1.0))?,
            bias: store.add(join(prefix, "bias"), Tensor::zeros(&[d]))?,
        })
    }

    fn forward(&self, s: &mut Session<'_>, x: Var) -> Result<Var> {
        let (gain, bias) = (s.param(self.gain), s.param(self.bias));
        s.graph_mut().layer_norm(x, gain, bias, LAYER_NORM_EPS)
    }
}

#[derive(Clone, Debug, PartialEq)]
struct SelfAttention {
    q: Linear,
    k: Linear,
    v: Linear,
    out: Linear,
    n_heads: usize,
}

impl SelfAttention {
    fn init(store: &mut ParamStore, prefix: &str, d: usize, n_heads: usize, rng: &mut Rng) -> Result<Self> {
        Ok(Self {
            q: Linear::init(store, &join(prefix, "q"), d, d, 1.0, rng)?,
            k: Linear::init(store, &join(prefix, "k"), d, d, 1.0, rng)?,
            v: Linear::init(store, &join(prefix, "v"), d, d, 1.0, rng)?,
            out: Linear::init(store, &join(prefix, "out"), d, d, 1.0, rng)?,
            n_heads,
        })
    }

    fn forward(&self, s: &mut Session<'_>, x: Var) -> Result<Var> {
        let q = self.q.forward(s, x)?;
        let k = self.k.forward(s, x)?;
        let v = self.v.forward(s, x)?;
        let (_, d) = s.graph().value(x).dims2()?;
        let dh = d / self.n_heads;
        let g = s.graph_mut();
        let mut heads = Vec::with_capacity(self.n_heads);
        for h in 0..self.n_heads {
            let qh = g.slice_cols(q, h * dh, dh)?;
            let kh = g.slice_cols(k, h * dh, dh)?;
            let vh = g.slice_cols(v, h * dh, dh)?;
            heads.push(g.attention(qh, kh, vh)?);
        }
        let cat = if heads.len() == 1 { heads[0] } else { g.concat_cols(&heads)? };
        self.out.forward(s, cat)
    }
}

#[derive(Clone, Debug, PartialEq)]
struct TransformerLayer {
    attn_norm: Norm,
    attn: SelfAttention,
    ffn_norm: Norm,
    ffn_in: Linear,
    ffn_out: Linear,
}

impl TransformerLayer {
    fn init(store: &mut ParamStore, prefix: &str, cfg: &ModelConfig, rng: &mut Rng) -> Result<Self> {
        let d = cfg.d_model;
        Ok(Self {
            attn_norm: Norm::init(store, &join(prefix, "attn_norm"), d)?,
            attn: SelfAttention::init(store, &join(prefix, "attn"), d, cfg.n_heads, rng)?,
            ffn_norm: Norm::init(store, &join(prefix, "ffn_norm"), d)?,
            ffn_in: Linear::init(store, &join(prefix, "ffn_in"), d, cfg.d_ffn, 1.0, rng)?,
            ffn_out: Linear::init(store, &join(prefix, "ffn_out"), cfg.d_ffn, d, 1.0, rng)?,
        })
    }

    fn forward(&self, s: &mut Session<'_>, x: Var) -> Result<Var> {
        let h = self.attn_norm.forward(s, x)?;
        let h = self.attn.forward(s, h)?;
        let x = s.graph_mut().add(x, h)?;
        let h = self.ffn_norm.forward(s, x)?;
        let h = self.ffn_in.forward(s, h)?;
        let h = s.graph_mut().relu(h);
        let h = self.ffn_out.forward(s, h)?;
        s.graph_mut().add(x, h)
    }
}

#[derive(Clone, Debug, PartialEq)]
struct VarianceStub {
    duration: Linear,
    pitch: Linear,
    pitch_embed: Linear,
}

/// Teacher signals used in place of predictions during training.
#[derive(Clone, Copy, Debug)]
pub struct Teacher<'a> {
    pub durations: &'a [usize],
    pub pitch: &'a [f64],
}

/// Graph handles produced by one forward pass.
#[derive(Clone, Debug)]
pub struct ForwardOutput {
    /// `[T×mel_dim]` frames after the postnet.
    pub frames: Var,
    /// `[n×1]` predicted natural-log durations.
    pub log_durations: Var,
    /// `[n×1]` predicted pitch.
    pub pitch: Var,
    /// Durations actually used for length regulation.
    pub durations: Vec<usize>,
}

/// Plain-value result of inference.
#[derive(Clone, Debug, PartialEq)]
pub struct Synthesis {
    pub frames: Tensor,
    pub durations: Vec<usize>,
    pub pitch: Vec<f64>,
}

/// Trainable flag per parameter tensor, indexed by [`ParamId`].
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TrainableMask(Vec<bool>);

impl TrainableMask {
    pub fn all(n: usize) -> Self {
        Self(vec![true; n])
    }

    pub fn none(n: usize) -> Self {
        Self(vec![false; n])
    }

    pub fn from_flags(flags: Vec<bool>) -> Self {
        Self(flags)
    }

    pub fn flags(&self) -> &[bool] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn is_trainable(&self, id: ParamId) -> bool {
        self.0[id.index()]
    }

    pub fn set(&mut self, id: ParamId, trainable: bool) {
        self.0[id.index()] = trainable;
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ParamCount {
    pub total: usize,
    pub trainable: usize,
}

impl ParamCount {
    pub fn fraction(&self) -> f64 {
        if self.total == 0 {
            return 0.0;
        }
        self.trainable as f64 / self.total as f64
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct BackboneModel {
    config: ModelConfig,
    seed: u64,
    store: ParamStore,
    token_embedding: ParamId,
    speaker_embeddings: Vec<ParamId>,
    encoder: Vec<TransformerLayer>,
    encoder_norm: Norm,
    variance: VarianceStub,
    variance_adapter: Option<ResidualAdapter>,
    decoder: Vec<TransformerLayer>,
    slots: Vec<Option<MixtureOfAdapters>>,
    decoder_norm: Norm,
    projection: Linear,
    postnet: Linear,
    strategy: Option<AdaptationStrategy>,
}

/// Name of the speaker-embedding row of speaker `s`.
pub fn speaker_param_name(s: usize) -> String {
    format!("speaker_embedding.{s}")
}

fn sinusoid(pos: usize, j: usize, d: usize) -> f64 {
    let pair = (j / 2) as f64;
    let rate = libm::pow(10_000.0, -2.0 * pair / d as f64);
    let angle = pos as f64 * rate;
    if j.is_multiple_of(2) {
        libm::sin(angle)
    } else {
        libm::cos(angle)
    }
}

fn positional_encoding(n: usize, d: usize) -> Tensor {
    let data = (0..n).flat_map(|p| (0..d).map(move |j| sinusoid(p, j, d))).collect();
    Tensor::new(vec![n, d], data).expect("n·d values")
}

/// Round half up, then clamp to `[1, max_duration]`.
pub fn duration_from_log(log_d: f64, max_duration: usize) -> usize {
    let d = libm::floor(libm::exp(log_d) + 0.5);
    if !(d >= 1.0) {
        return 1;
    }
    if d >= max_duration as f64 {
        return max_duration;
    }
    d as usize
}

/// Frame-level row indices that repeat token `i` `durations[i]` times.
pub fn length_regulation_indices(durations: &[usize]) -> Vec<usize> {
    durations
        .iter()
        .enumerate()
        .flat_map(|(i, &d)| core::iter::repeat_n(i, d))
        .collect()
}

impl BackboneModel {
    /// A freshly initialized backbone with empty adapter slots.
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = Rng::derived(seed, &[0x6d6f64656c]);
        let mut store = ParamStore::new();
        let d = config.d_model;
        let tok: Vec<f64> = (0..config.vocab_size * d).map(|_| rng.normal()).collect();
        let token_embedding = store.add("token_embedding", Tensor::new(vec![config.vocab_size, d], tok)?)?;
        let mut speaker_embeddings = Vec::with_capacity(config.n_speakers);
        for s in 0..config.n_speakers {
            let row: Vec<f64> = (0..d).map(|_| 0.3 * rng.normal()).collect();
            speaker_embeddings.push(store.add(speaker_param_name(s), Tensor::vector(row))?);
        }
        let mut encoder = Vec::with_capacity(config.n_encoder_layers);
        for l in 0..config.n_encoder_layers {
            encoder.push(TransformerLayer::init(&mut store, &format!("encoder.{l}"), &config, &mut rng)?);
        }
        let encoder_norm = Norm::init(&mut store, "encoder.norm", d)?;
        let variance = VarianceStub {
            duration: Linear::init(&mut store, "variance.duration", d, 1, 1.0, &mut rng)?,
            pitch: Linear::init(&mut store, "variance.pitch", d, 1, 1.0, &mut rng)?,
            pitch_embed: Linear::init(&mut store, "variance.pitch_embed", 1, d, 1.0, &mut rng)?,
        };
        let mut decoder = Vec::with_capacity(config.n_decoder_layers);
        for l in 0..config.n_decoder_layers {
            decoder.push(TransformerLayer::init(&mut store, &format!("decoder.{l}"), &config, &mut rng)?);
        }
        let decoder_norm = Norm::init(&mut store, "decoder.norm", d)?;
        let projection = Linear::init(&mut store, "projection", d, config.mel_dim, 1.0, &mut rng)?;
        let postnet = Linear::init(&mut store, "postnet", config.mel_dim, config.mel_dim, 0.1, &mut rng)?;
        let n_dec = config.n_decoder_layers;
        Ok(Self {
            config,
            seed,
            store,
            token_embedding,
            speaker_embeddings,
            encoder,
            encoder_norm,
            variance,
            variance_adapter: None,
            decoder,
            slots: vec![None; n_dec],
            decoder_norm,
            projection,
            postnet,
            strategy: None,
        })
    }

    /// Rebuilds a model from saved tensors. The set of names must match
    /// exactly what `config` and `strategy` produce.
    pub fn restore(
        config: ModelConfig,
        seed: u64,
        strategy: Option<AdaptationStrategy>,
        tensors: &[(String, Tensor)],
    ) -> Result<Self> {
        let mut model = Self::new(config, seed)?;
        if let Some(st) = &strategy {
            model.insert_adapters(st, seed)?;
        }
        if tensors.len() != model.store.len() {
            return Err(Error::State(format!(
                "expected {} parameter tensors, found {}",
                model.store.len(),
                tensors.len()
            )));
        }
        for (name, t) in tensors {
            let id = model
                .store
                .find(name)
                .ok_or_else(|| Error::State(format!("unexpected parameter `{name}`")))?;
            if model.store.get(id).shape() != t.shape() {
                return Err(Error::Dimension {
                    op: "restore",
                    left: model.store.get(id).shape().to_vec(),
                    right: t.shape().to_vec(),
                });
            }
            model.store.set_data(id, t.data())?;
        }
        Ok(model)
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn store(&self) -> &ParamStore {
        &self.store
    }

    pub fn store_mut(&mut self) -> &mut ParamStore {
        &mut self.store
    }

    pub fn strategy(&self) -> Option<&AdaptationStrategy> {
        self.strategy.as_ref()
    }

    /// The mixture in decoder layer `layer`, if inserted.
    pub fn slot(&self, layer: usize) -> Option<&MixtureOfAdapters> {
        self.slots.get(layer).and_then(Option::as_ref)
    }

    pub fn variance_adapter(&self) -> Option<&ResidualAdapter> {
        self.variance_adapter.as_ref()
    }

    pub fn speaker_embedding(&self, speaker: usize) -> Option<ParamId> {
        self.speaker_embeddings.get(speaker).copied()
    }

    fn check_inputs(&self, tokens: &[usize], speaker: usize) -> Result<()> {
        if speaker >= self.config.n_speakers {
            return Err(Error::Index {
                what: "speaker",
                index: speaker,
                bound: self.config.n_speakers,
            });
        }
        if let Some(&t) = tokens.iter().find(|&&t| t >= self.config.vocab_size) {
            return Err(Error::Index {
                what: "token",
                index: t,
                bound: self.config.vocab_size,
            });
        }
        Ok(())
    }

    /// Records a forward pass. With a teacher, its durations and pitch drive
    /// length regulation and the pitch embedding; otherwise the model's own
    /// rounded predictions do.
    pub fn forward(
        &self,
        s: &mut Session<'_>,
        tokens: &[usize],
        speaker: usize,
        teacher: Option<Teacher<'_>>,
    ) -> Result<ForwardOutput> {
        self.check_inputs(tokens, speaker)?;
        let n = tokens.len();
        if let Some(t) = &teacher {
            if t.durations.len() != n || t.pitch.len() != n {
                return Err(Error::Contract(format!(
                    "teacher has {} durations and {} pitch values for {n} tokens",
                    t.durations.len(),
                    t.pitch.len()
                )));
            }
        }
        let d = self.config.d_model;

        let table = s.param(self.token_embedding);
        let x = s.graph_mut().gather_rows(table, tokens)?;
        let pe = s.graph_mut().constant(positional_encoding(n, d));
        let mut x = s.graph_mut().add(x, pe)?;
        for layer in &self.encoder {
            x = layer.forward(s, x)?;
        }
        let x = self.encoder_norm.forward(s, x)?;
        let spk = s.param(self.speaker_embeddings[speaker]);
        let e = s.graph_mut().add_row(x, spk)?;

        let log_durations = self.variance.duration.forward(s, e)?;
        let pitch = self.variance.pitch.forward(s, e)?;
        let (durations, pitch_in) = match teacher {
            Some(t) => {
                let col = Tensor::new(vec![n, 1], t.pitch.to_vec())?;
                (t.durations.to_vec(), s.graph_mut().constant(col))
            }
            None => {
                let ld = s.graph().value(log_durations).data().to_vec();
                let durs = ld.iter().map(|&v| duration_from_log(v, self.config.max_duration)).collect();
                let col = s.graph().value(pitch).clone();
                (durs, s.graph_mut().constant(col))
            }
        };
        let pitch_emb = self.variance.pitch_embed.forward(s, pitch_in)?;
        let mut v = s.graph_mut().add(e, pitch_emb)?;
        if let Some(adapter) = &self.variance_adapter {
            v = adapter.forward(s, v)?;
        }

        let idx = length_regulation_indices(&durations);
        let frames_in = s.graph_mut().gather_rows(v, &idx)?;
        let fpe = s.graph_mut().constant(positional_encoding(idx.len(), d));
        let mut y = s.graph_mut().add(frames_in, fpe)?;
        for (layer, slot) in self.decoder.iter().zip(&self.slots) {
            y = layer.forward(s, y)?;
            if let Some(moa) = slot {
                y = moa.forward(s, y)?;
            }
        }
        let y = self.decoder_norm.forward(s, y)?;
        let mel = self.projection.forward(s, y)?;
        let post = self.postnet.forward(s, mel)?;
        let frames = s.graph_mut().add(mel, post)?;
        Ok(ForwardOutput {
            frames,
            log_durations,
            pitch,
            durations,
        })
    }

    /// Inference without a teacher. An empty token sequence yields an empty
    /// frame matrix.
    pub fn synthesize(&self, tokens: &[usize], speaker: usize) -> Result<Synthesis> {
        self.check_inputs(tokens, speaker)?;
        if tokens.is_empty() {
            return Ok(Synthesis {
                frames: Tensor::zeros(&[0, self.config.mel_dim]),
                durations: Vec::new(),
                pitch: Vec::new(),
            });
        }
        let mut s = Session::inference(&self.store);
        let out = self.forward(&mut s, tokens, speaker, None)?;
        Ok(Synthesis {
            frames: s.graph().value(out.frames).clone(),
            durations: out.durations,
            pitch: s.graph().value(out.pitch).data().to_vec(),
        })
    }

    /// Teacher-forced training objective: frame MSE + log-duration MSE +
    /// pitch MSE.
    pub fn loss(
        &self,
        s: &mut Session<'_>,
        tokens: &[usize],
        speaker: usize,
        teacher: Teacher<'_>,
        target_frames: &Tensor,
    ) -> Result<Var> {
        if tokens.is_empty() {
            return Err(Error::DegenerateInput("loss of an empty utterance"));
        }
        let out = self.forward(s, tokens, speaker, Some(teacher))?;
        let n = tokens.len();
        let log_d: Vec<f64> = teacher.durations.iter().map(|&d| libm::log(d as f64)).collect();
        let g = s.graph_mut();
        let target = g.constant(target_frames.clone());
        let frame_loss = g.mse_loss(out.frames, target)?;
        let dur_target = g.constant(Tensor::new(vec![n, 1], log_d)?);
        let dur_loss = g.mse_loss(out.log_durations, dur_target)?;
        let pitch_target = g.constant(Tensor::new(vec![n, 1], teacher.pitch.to_vec())?);
        let pitch_loss = g.mse_loss(out.pitch, pitch_target)?;
        let l = g.add(frame_loss, dur_loss)?;
        g.add(l, pitch_loss)
    }

    /// Loss value without recording gradients.
    pub fn loss_value(&self, tokens: &[usize], speaker: usize, teacher: Teacher<'_>, target_frames: &Tensor) -> Result<f64> {
        let mut s = Session::inference(&self.store);
        let l = self.loss(&mut s, tokens, speaker, teacher, target_frames)?;
        Ok(s.graph().value(l).data()[0])
    }

    /// Fills every decoder slot with a mixture and appends a single adapter
    /// to the variance stub. Zero-initialized up projections leave every
    /// output unchanged.
    pub fn insert_adapters(&mut self, strategy: &AdaptationStrategy, seed: u64) -> Result<()> {
        if !strategy.uses_adapters() {
            return Err(Error::State("finetune strategy does not insert adapters".into()));
        }
        if self.strategy.is_some() || self.slots.iter().any(Option::is_some) || self.variance_adapter.is_some() {
            return Err(Error::State("adapters are already inserted".into()));
        }
        strategy.validate(self.config.d_model)?;
        let mut rng = Rng::derived(seed, &[0x61646170746572]);
        let d = self.config.d_model;
        for l in 0..self.slots.len() {
            self.slots[l] = Some(MixtureOfAdapters::init(
                &mut self.store,
                &format!("decoder.{l}.moa"),
                d,
                strategy.decoder_r,
                strategy.n_adapters,
                strategy.capacity,
                &mut rng,
            )?);
        }
        self.variance_adapter = Some(ResidualAdapter::init(
            &mut self.store,
            "variance.adapter",
            d,
            strategy.variance_r,
            &mut rng,
        )?);
        self.strategy = Some(strategy.clone());
        Ok(())
    }

    fn adapter_param_ids(&self) -> Vec<ParamId> {
        let mut ids: Vec<ParamId> = self.slots.iter().flatten().flat_map(|m| m.param_ids()).collect();
        if let Some(a) = &self.variance_adapter {
            ids.extend(a.param_ids());
        }
        ids
    }

    /// Finetune trains everything. Adapter strategies train exactly the
    /// inserted adapters plus the speaker-embedding row of `adapt_speaker`.
    pub fn build_trainable_mask(&self, strategy: &AdaptationStrategy, adapt_speaker: usize) -> Result<TrainableMask> {
        if adapt_speaker >= self.config.n_speakers {
            return Err(Error::Index {
                what: "speaker",
                index: adapt_speaker,
                bound: self.config.n_speakers,
            });
        }
        if !strategy.uses_adapters() {
            return Ok(TrainableMask::all(self.store.len()));
        }
        match &self.strategy {
            Some(inserted) if inserted == strategy => {}
            Some(inserted) => {
                return Err(Error::State(format!(
                    "inserted adapters ({}) do not match requested strategy ({})",
                    inserted.kind.name(),
                    strategy.kind.name()
                )))
            }
            None => return Err(Error::State("adapter strategy requires inserted adapters".into())),
        }
        let mut mask = TrainableMask::none(self.store.len());
        for id in self.adapter_param_ids() {
            mask.set(id, true);
        }
        mask.set(self.speaker_embeddings[adapt_speaker], true);
        Ok(mask)
    }

    pub fn count_parameters(&self, mask: &TrainableMask) -> ParamCount {
        let mut count = ParamCount { total: 0, trainable: 0 };
        for (id, _, t) in self.store.iter() {
            count.total += t.numel();
            if mask.is_trainable(id) {
                count.trainable += t.numel();
            }
        }
        count
    }
}

/// Closed-form parameter counts for a configuration and strategy, without
/// building the model.
pub fn closed_form_count(config: &ModelConfig, strategy: &AdaptationStrategy) -> ParamCount {
    let d = config.d_model;
    let linear = |i: usize, o: usize| i * o + o;
    let norm = 2 * d;
    let layer = norm + 4 * linear(d, d) + norm + linear(d, config.d_ffn) + linear(config.d_ffn, d);
    let backbone = config.vocab_size * d
        + config.n_speakers * d
        + config.n_encoder_layers * layer
        + norm
        + 2 * linear(d, 1)
        + linear(1, d)
        + config.n_decoder_layers * layer
        + norm
        + linear(d, config.mel_dim)
        + linear(config.mel_dim, config.mel_dim);
    if !strategy.uses_adapters() {
        return ParamCount {
            total: backbone,
            trainable: backbone,
        };
    }
    let adapters = config.n_decoder_layers
        * MixtureOfAdapters::param_count(d, strategy.decoder_r, strategy.n_adapters)
        + ResidualAdapter::param_count(d, strategy.variance_r);
    ParamCount {
        total: backbone + adapters,
        trainable: adapters + d,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> ModelConfig {
        ModelConfig {
            n_encoder_layers: 1,
            n_decoder_layers: 2,
            d_model: 8,
            n_heads: 2,
            d_ffn: 12,
            vocab_size: 6,
            n_speakers: 3,
            mel_dim: 4,
            max_duration: 4,
        }
    }

    #[test]
    fn config_validation() {
        assert!(ModelConfig::desk().validate().is_ok());
        assert!(ModelConfig::paper_dims().validate().is_ok());
        let bad = ModelConfig { n_heads: 3, ..small() };
        assert!(matches!(bad.validate(), Err(Error::Config { field: "n_heads", .. })));
        let bad = ModelConfig { mel_dim: 1, ..small() };
        assert!(matches!(bad.validate(), Err(Error::Config { field: "mel_dim", .. })));
        let bad = ModelConfig { n_speakers: 0, ..small() };
        assert!(bad.validate().is_err());
    }

    #[test]
    fn duration_rounding() {
        assert_eq!(duration_from_log(libm::log(2.5), 4), 3);
        assert_eq!(duration_from_log(libm::log(2.49), 4), 2);
        assert_eq!(duration_from_log(-10.0, 4), 1);
        assert_eq!(duration_from_log(10.0, 4), 4);
        assert_eq!(duration_from_log(f64::NAN, 4), 1);
    }

    #[test]
    fn length_regulation_repeats_tokens() {
        assert_eq!(length_regulation_indices(&[2, 1, 3]), vec![0, 0, 1, 2, 2, 2]);
        assert!(length_regulation_indices(&[]).is_empty());
    }

    #[test]
    fn empty_sequence_gives_empty_frames() {
        let m = BackboneModel::new(small(), 1).unwrap();
        let out = m.synthesize(&[], 0).unwrap();
        assert_eq!(out.frames.shape(), &[0, 4]);
    }

    #[test]
    fn single_token_with_duration_three() {
        let m = BackboneModel::new(small(), 1).unwrap();
        let mut s = Session::inference(m.store());
        let teacher = Teacher {
            durations: &[3],
            pitch: &[0.2],
        };
        let out = m.forward(&mut s, &[2], 1, Some(teacher)).unwrap();
        let frames = s.graph().value(out.frames);
        assert_eq!(frames.shape(), &[3, 4]);
        assert_eq!(out.durations, vec![3]);
    }

    #[test]
    fn unknown_ids_are_rejected() {
        let m = BackboneModel::new(small(), 1).unwrap();
        assert!(matches!(m.synthesize(&[0, 6], 0), Err(Error::Index { what: "token", index: 6, .. })));
        assert!(matches!(m.synthesize(&[0], 3), Err(Error::Index { what: "speaker", index: 3, .. })));
    }

    #[test]
    fn insertion_is_identity_and_single_shot() {
        let mut m = BackboneModel::new(small(), 4).unwrap();
        let before = m.synthesize(&[1, 2, 3, 4], 2).unwrap();
        let st = AdaptationStrategy::adapter_mix(4, 2, 3, 1.0);
        m.insert_adapters(&st, 9).unwrap();
        let after = m.synthesize(&[1, 2, 3, 4], 2).unwrap();
        assert_eq!(before, after);
        assert!(matches!(m.insert_adapters(&st, 9), Err(Error::State(_))));
        assert!(m.insert_adapters(&AdaptationStrategy::finetune(), 9).is_err());
        assert_eq!((0..2).filter(|&l| m.slot(l).is_some()).count(), 2);
        assert!(m.variance_adapter().is_some());
    }

    #[test]
    fn six_decoder_layers_get_six_mixtures() {
        let cfg = ModelConfig {
            n_decoder_layers: 6,
            ..small()
        };
        let mut m = BackboneModel::new(cfg, 0).unwrap();
        m.insert_adapters(&AdaptationStrategy::adapter_mix(4, 2, 4, 1.0), 0).unwrap();
        let mixtures: Vec<_> = (0..6).filter_map(|l| m.slot(l)).collect();
        assert_eq!(mixtures.len(), 6);
        assert!(mixtures.iter().all(|moa| moa.n_adapters() == 4));
        assert!(m.variance_adapter().is_some());
    }

    #[test]
    fn masks_follow_strategy() {
        let mut m = BackboneModel::new(small(), 0).unwrap();
        let ft = m.build_trainable_mask(&AdaptationStrategy::finetune(), 1).unwrap();
        assert_eq!(m.count_parameters(&ft).fraction(), 1.0);

        let st = AdaptationStrategy::single_adapter(4, 2);
        assert!(matches!(m.build_trainable_mask(&st, 1), Err(Error::State(_))));
        m.insert_adapters(&st, 0).unwrap();
        assert!(m
            .build_trainable_mask(&AdaptationStrategy::adapter_mix(4, 2, 2, 1.0), 1)
            .is_err());
        let mask = m.build_trainable_mask(&st, 1).unwrap();
        for (id, name, _) in m.store().iter() {
            let expect = name.contains("moa") || name.starts_with("variance.adapter") || name == "speaker_embedding.1";
            assert_eq!(mask.is_trainable(id), expect, "{name}");
        }
        let count = m.count_parameters(&mask);
        assert_eq!(count, closed_form_count(m.config(), &st));
        assert!(count.fraction() < 1.0);
    }

    #[test]
    fn closed_form_matches_built_model() {
        for st in [
            AdaptationStrategy::finetune(),
            AdaptationStrategy::single_adapter(8, 4),
            AdaptationStrategy::adapter_mix(8, 4, 4, 1.0),
            AdaptationStrategy::adapter_mix(3, 5, 2, 2.0),
        ] {
            let cfg = ModelConfig::desk();
            let mut m = BackboneModel::new(cfg.clone(), 3).unwrap();
            if st.uses_adapters() {
                m.insert_adapters(&st, 3).unwrap();
            }
            let mask = m.build_trainable_mask(&st, 11).unwrap();
            assert_eq!(m.count_parameters(&mask), closed_form_count(&cfg, &st));
        }
    }

    #[test]
    fn restore_round_trips_and_rejects_mismatch() {
        let mut m = BackboneModel::new(small(), 5).unwrap();
        let st = AdaptationStrategy::adapter_mix(4, 2, 2, 1.0);
        m.insert_adapters(&st, 6).unwrap();
        let id = m.store().find("decoder.1.moa.adapters.0.w_up").unwrap();
        m.store_mut().get_mut(id).data_mut()[3] = 0.25;
        let tensors: Vec<(String, Tensor)> = m.store().iter().map(|(_, n, t)| (n.into(), t.clone())).collect();
        let back = BackboneModel::restore(small(), 5, Some(st), &tensors).unwrap();
        assert_eq!(back.store(), m.store());
        assert!(BackboneModel::restore(small(), 5, None, &tensors).is_err());
    }

    #[test]
    fn strategy_validation() {
        assert!(AdaptationStrategy::adapter_mix(0, 2, 2, 1.0).validate(8).is_err());
        assert!(AdaptationStrategy::adapter_mix(9, 2, 2, 1.0).validate(8).is_err());
        assert!(AdaptationStrategy::adapter_mix(4, 2, 0, 1.0).validate(8).is_err());
        assert!(AdaptationStrategy::adapter_mix(4, 2, 2, -1.0).validate(8).is_err());
        let mut single = AdaptationStrategy::single_adapter(4, 2);
        assert!(single.validate(8).is_ok());
        single.n_adapters = 2;
        assert!(single.validate(8).is_err());
    }
}
