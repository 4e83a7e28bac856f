//! Tiny pre-LN transformer encoder with the four pretraining heads and their
//! losses.
//!
//! Parameters live in a flat [`Model`] list; a forward pass binds them onto a
//! [`Graph`] and the loss builders work on the bound handles, so the same code
//! serves training (f32), eval and finite-difference checks (f64).

use serde::{Deserialize, Serialize};

use crate::geocode::{self, GeoError, GeohashCode};
use crate::numerics::{grad_check, AttentionLayout, Graph, NumericsError, Real, RngStream, Tensor, Var};
use crate::taskgen::{OrderLabels, PretrainExample};
use crate::text::PAD_ID;

const LN_EPS: f64 = 1e-5;

#[derive(Debug, thiserror::Error)]
pub enum ModelError {
    #[error("invalid encoder config: {0}")]
    Config(String),
    #[error("input of {len} tokens exceeds max_len {max}")]
    TooLong { len: usize, max: usize },
    #[error("{what} label {value} outside 1..={bound}")]
    Label {
        what: &'static str,
        value: usize,
        bound: usize,
    },
    #[error("token id {id} outside vocabulary of {vocab}")]
    TokenId { id: u32, vocab: usize },
    #[error("non-finite {0} loss")]
    NonFinite(&'static str),
    #[error("parameter {name}: expected shape {expected:?}, got {got:?}")]
    ParamShape {
        name: String,
        expected: Vec<usize>,
        got: Vec<usize>,
    },
    #[error("batch is empty")]
    EmptyBatch,
    #[error(transparent)]
    Geo(#[from] GeoError),
    #[error(transparent)]
    Numerics(#[from] NumericsError),
}

type Result<T> = std::result::Result<T, ModelError>;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EncoderConfig {
    pub vocab_size: usize,
    pub d_model: usize,
    pub n_layers: usize,
    pub n_heads: usize,
    pub d_ff: usize,
    pub max_len: usize,
    pub dropout: f64,
    /// Number of geohash characters predicted, one head each.
    pub geohash_chars: usize,
    pub geohash_classes: usize,
    /// Phrase-order classes.
    pub phrase_classes: usize,
    /// Within-phrase token-order classes.
    pub token_classes: usize,
    pub temperature: f64,
    /// Token-order head reads the phrase head's hidden layer instead of its
    /// logits.
    pub token_head_from_hidden: bool,
    /// Contrastive denominator sums only the matched pairs of the batch.
    pub literal_contrastive: bool,
    pub init_std: f64,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        Self {
            vocab_size: 0,
            d_model: 64,
            n_layers: 2,
            n_heads: 4,
            d_ff: 256,
            max_len: 64,
            dropout: 0.1,
            geohash_chars: geocode::DEFAULT_CHARS,
            geohash_classes: geocode::NUM_CLASSES,
            phrase_classes: 8,
            token_classes: 8,
            temperature: 0.1,
            token_head_from_hidden: false,
            literal_contrastive: false,
            init_std: 0.02,
        }
    }
}

impl EncoderConfig {
    pub fn validate(&self) -> Result<()> {
        let dims = [
            ("vocab_size", self.vocab_size),
            ("d_model", self.d_model),
            ("n_layers", self.n_layers),
            ("n_heads", self.n_heads),
            ("d_ff", self.d_ff),
            ("max_len", self.max_len),
            ("geohash_chars", self.geohash_chars),
            ("geohash_classes", self.geohash_classes),
            ("phrase_classes", self.phrase_classes),
            ("token_classes", self.token_classes),
        ];
        if let Some((name, _)) = dims.iter().find(|(_, v)| *v == 0) {
            return Err(ModelError::Config(format!("{name} must be positive")));
        }
        if !self.d_model.is_multiple_of(self.n_heads) {
            return Err(ModelError::Config(format!(
                "d_model {} not divisible by n_heads {}",
                self.d_model, self.n_heads
            )));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(ModelError::Config(format!("dropout {} outside [0, 1)", self.dropout)));
        }
        if !(self.temperature > 0.0) || !(self.init_std > 0.0) {
            return Err(ModelError::Config("temperature and init_std must be positive".into()));
        }
        Ok(())
    }
}

/// Which part of the network a parameter belongs to. Head groups are frozen
/// when their task is disabled.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ParamGroup {
    Encoder,
    MlmHead,
    GeoHead,
    OrderHead,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ParamSpec {
    pub name: String,
    pub shape: Vec<usize>,
    pub group: ParamGroup,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum Init {
    Normal,
    Zeros,
    Ones,
}

#[derive(Clone, Copy, Debug)]
struct Dense {
    w: usize,
    b: usize,
}

#[derive(Clone, Copy, Debug)]
struct Norm {
    gamma: usize,
    beta: usize,
}

#[derive(Clone, Debug)]
struct Block {
    attn_norm: Norm,
    q: Dense,
    k: Dense,
    v: Dense,
    o: Dense,
    ff_norm: Norm,
    ff_in: Dense,
    ff_out: Dense,
}

/// Parameter indices by role.
#[derive(Clone, Debug)]
struct Layout {
    token_emb: usize,
    pos_emb: usize,
    blocks: Vec<Block>,
    final_norm: Norm,
    mlm_dense: Dense,
    mlm_norm: Norm,
    mlm_bias: usize,
    geo: Vec<(Dense, Dense)>,
    phrase_hidden: Dense,
    phrase_out: Dense,
    token_hidden: Dense,
    token_out: Dense,
}

struct Builder {
    specs: Vec<ParamSpec>,
    inits: Vec<Init>,
}

impl Builder {
    fn add(&mut self, name: String, shape: Vec<usize>, group: ParamGroup, init: Init) -> usize {
        self.specs.push(ParamSpec { name, shape, group });
        self.inits.push(init);
        self.specs.len() - 1
    }

    fn dense(&mut self, name: &str, n_in: usize, n_out: usize, group: ParamGroup) -> Dense {
        Dense {
            w: self.add(format!("{name}.weight"), vec![n_in, n_out], group, Init::Normal),
            b: self.add(format!("{name}.bias"), vec![n_out], group, Init::Zeros),
        }
    }

    fn norm(&mut self, name: &str, d: usize, group: ParamGroup) -> Norm {
        Norm {
            gamma: self.add(format!("{name}.gamma"), vec![d], group, Init::Ones),
            beta: self.add(format!("{name}.beta"), vec![d], group, Init::Zeros),
        }
    }
}

fn build_layout(cfg: &EncoderConfig) -> (Layout, Vec<ParamSpec>, Vec<Init>) {
    use ParamGroup::*;
    let d = cfg.d_model;
    let mut b = Builder {
        specs: Vec::new(),
        inits: Vec::new(),
    };
    let token_emb = b.add("embed.token".into(), vec![cfg.vocab_size, d], Encoder, Init::Normal);
    let pos_emb = b.add("embed.position".into(), vec![cfg.max_len, d], Encoder, Init::Normal);
    let blocks = (0..cfg.n_layers)
        .map(|i| {
            let p = format!("layer{i}");
            Block {
                attn_norm: b.norm(&format!("{p}.attn_norm"), d, Encoder),
                q: b.dense(&format!("{p}.attn.query"), d, d, Encoder),
                k: b.dense(&format!("{p}.attn.key"), d, d, Encoder),
                v: b.dense(&format!("{p}.attn.value"), d, d, Encoder),
                o: b.dense(&format!("{p}.attn.out"), d, d, Encoder),
                ff_norm: b.norm(&format!("{p}.ff_norm"), d, Encoder),
                ff_in: b.dense(&format!("{p}.ff.in"), d, cfg.d_ff, Encoder),
                ff_out: b.dense(&format!("{p}.ff.out"), cfg.d_ff, d, Encoder),
            }
        })
        .collect();
    let final_norm = b.norm("final_norm", d, Encoder);
    let mlm_dense = b.dense("mlm.dense", d, d, MlmHead);
    let mlm_norm = b.norm("mlm.norm", d, MlmHead);
    let mlm_bias = b.add("mlm.decoder_bias".into(), vec![cfg.vocab_size], MlmHead, Init::Zeros);
    let geo = (0..cfg.geohash_chars)
        .map(|i| {
            (
                b.dense(&format!("geo{i}.hidden"), d, d, GeoHead),
                b.dense(&format!("geo{i}.out"), d, cfg.geohash_classes, GeoHead),
            )
        })
        .collect();
    let phrase_hidden = b.dense("order.phrase.hidden", d, d, OrderHead);
    let phrase_out = b.dense("order.phrase.out", d, cfg.phrase_classes, OrderHead);
    let token_in = if cfg.token_head_from_hidden {
        d
    } else {
        cfg.phrase_classes
    };
    let token_hidden = b.dense("order.token.hidden", token_in, d, OrderHead);
    let token_out = b.dense("order.token.out", d, cfg.token_classes, OrderHead);
    let layout = Layout {
        token_emb,
        pos_emb,
        blocks,
        final_norm,
        mlm_dense,
        mlm_norm,
        mlm_bias,
        geo,
        phrase_hidden,
        phrase_out,
        token_hidden,
        token_out,
    };
    (layout, b.specs, b.inits)
}

/// The four pretraining tasks.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Task {
    GeoMp,
    GeoCp,
    Ucbl,
    Ptop,
}

impl Task {
    pub const ALL: [Task; 4] = [Task::GeoMp, Task::GeoCp, Task::Ucbl, Task::Ptop];

    pub fn name(self) -> &'static str {
        match self {
            Task::GeoMp => "geo_mp",
            Task::GeoCp => "geo_cp",
            Task::Ucbl => "ucbl",
            Task::Ptop => "ptop",
        }
    }

    /// Head parameters owned by the task, if any.
    pub fn head(self) -> Option<ParamGroup> {
        match self {
            Task::GeoMp => Some(ParamGroup::MlmHead),
            Task::GeoCp => Some(ParamGroup::GeoHead),
            Task::Ucbl => None,
            Task::Ptop => Some(ParamGroup::OrderHead),
        }
    }
}

impl std::fmt::Display for Task {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

impl std::str::FromStr for Task {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        Task::ALL
            .into_iter()
            .find(|t| t.name() == s)
            .ok_or_else(|| format!("unknown task {s:?}"))
    }
}

/// Enable flags for the four tasks.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(default)]
pub struct TaskSet {
    pub geo_mp: bool,
    pub geo_cp: bool,
    pub ucbl: bool,
    pub ptop: bool,
}

impl Default for TaskSet {
    fn default() -> Self {
        Self::all()
    }
}

impl TaskSet {
    pub fn all() -> Self {
        Self {
            geo_mp: true,
            geo_cp: true,
            ucbl: true,
            ptop: true,
        }
    }

    pub fn none() -> Self {
        Self {
            geo_mp: false,
            geo_cp: false,
            ucbl: false,
            ptop: false,
        }
    }

    pub fn without(task: Task) -> Self {
        let mut s = Self::all();
        s.set(task, false);
        s
    }

    pub fn enabled(&self, task: Task) -> bool {
        match task {
            Task::GeoMp => self.geo_mp,
            Task::GeoCp => self.geo_cp,
            Task::Ucbl => self.ucbl,
            Task::Ptop => self.ptop,
        }
    }

    pub fn set(&mut self, task: Task, on: bool) {
        match task {
            Task::GeoMp => self.geo_mp = on,
            Task::GeoCp => self.geo_cp = on,
            Task::Ucbl => self.ucbl = on,
            Task::Ptop => self.ptop = on,
        }
    }

    pub fn any(&self) -> bool {
        Task::ALL.iter().any(|t| self.enabled(*t))
    }

    /// Whether a parameter group receives updates under this set.
    pub fn trains(&self, group: ParamGroup) -> bool {
        match group {
            ParamGroup::Encoder => true,
            ParamGroup::MlmHead => self.geo_mp,
            ParamGroup::GeoHead => self.geo_cp,
            ParamGroup::OrderHead => self.ptop,
        }
    }

    /// Flag vector as a bit string in task order, e.g. `1011`.
    pub fn bits(&self) -> String {
        Task::ALL
            .iter()
            .map(|t| if self.enabled(*t) { '1' } else { '0' })
            .collect()
    }
}

/// Per-task loss values of one step; disabled tasks are exactly 0.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossParts {
    pub geo_mp: f64,
    pub geo_cp: f64,
    pub ucbl: f64,
    pub ptop: f64,
}

impl LossParts {
    pub fn get(&self, task: Task) -> f64 {
        match task {
            Task::GeoMp => self.geo_mp,
            Task::GeoCp => self.geo_cp,
            Task::Ucbl => self.ucbl,
            Task::Ptop => self.ptop,
        }
    }

    fn set(&mut self, task: Task, v: f64) {
        match task {
            Task::GeoMp => self.geo_mp = v,
            Task::GeoCp => self.geo_cp = v,
            Task::Ucbl => self.ucbl = v,
            Task::Ptop => self.ptop = v,
        }
    }

    /// Unweighted sum of the components.
    pub fn total(&self) -> f64 {
        self.geo_mp + self.geo_cp + self.ucbl + self.ptop
    }
}

/// Encoder weights plus head weights.
#[derive(Clone, Debug)]
pub struct Model<T: Real> {
    cfg: EncoderConfig,
    layout: Layout,
    specs: Vec<ParamSpec>,
    params: Vec<Tensor<T>>,
}

impl<T: Real> Model<T> {
    /// Weights drawn from N(0, init_std²); biases 0; norm gains 1.
    pub fn init(cfg: EncoderConfig, rng: &mut RngStream) -> Result<Self> {
        cfg.validate()?;
        let (layout, specs, inits) = build_layout(&cfg);
        let params = specs
            .iter()
            .zip(&inits)
            .map(|(s, init)| {
                Tensor::from_fn(&s.shape, |_| match init {
                    Init::Normal => T::c(rng.normal() * cfg.init_std),
                    Init::Zeros => T::zero(),
                    Init::Ones => T::one(),
                })
            })
            .collect();
        Ok(Self {
            cfg,
            layout,
            specs,
            params,
        })
    }

    /// Rebuild from stored tensors, checking names and shapes against the
    /// layout implied by `cfg`.
    pub fn from_params(cfg: EncoderConfig, named: Vec<(String, Tensor<T>)>) -> Result<Self> {
        cfg.validate()?;
        let (layout, specs, _) = build_layout(&cfg);
        if named.len() != specs.len() {
            return Err(ModelError::Config(format!(
                "expected {} parameters, got {}",
                specs.len(),
                named.len()
            )));
        }
        let mut params = Vec::with_capacity(specs.len());
        for (spec, (name, t)) in specs.iter().zip(named) {
            if name != spec.name || t.shape() != spec.shape.as_slice() {
                return Err(ModelError::ParamShape {
                    name,
                    expected: spec.shape.clone(),
                    got: t.shape().to_vec(),
                });
            }
            params.push(t);
        }
        Ok(Self {
            cfg,
            layout,
            specs,
            params,
        })
    }

    pub fn config(&self) -> &EncoderConfig {
        &self.cfg
    }

    pub fn specs(&self) -> &[ParamSpec] {
        &self.specs
    }

    pub fn params(&self) -> &[Tensor<T>] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [Tensor<T>] {
        &mut self.params
    }

    pub fn param_count(&self) -> usize {
        self.params.iter().map(Tensor::len).sum()
    }

    pub fn cast<U: Real>(&self) -> Model<U> {
        Model {
            cfg: self.cfg.clone(),
            layout: self.layout.clone(),
            specs: self.specs.clone(),
            params: self.params.iter().map(Tensor::cast).collect(),
        }
    }

    /// Puts every parameter on `g`. Groups rejected by `trainable` become
    /// constants so no gradient reaches them.
    pub fn bind(&self, g: &mut Graph<T>, trainable: impl Fn(ParamGroup) -> bool) -> Vec<Var> {
        self.specs
            .iter()
            .zip(&self.params)
            .map(|(s, t)| {
                if trainable(s.group) {
                    g.param(t.clone())
                } else {
                    g.constant(t.clone())
                }
            })
            .collect()
    }

    /// View of the network over handles already on a graph.
    pub fn net<'a>(&'a self, vars: &'a [Var]) -> Net<'a> {
        Net {
            cfg: &self.cfg,
            layout: &self.layout,
            vars,
        }
    }

    /// Frozen-weight graph for inference.
    fn eval_graph(&self) -> (Graph<T>, Vec<Var>) {
        let mut g = Graph::new();
        let vars = self.bind(&mut g, |_| false);
        (g, vars)
    }

    /// Final-layer representation at `[CLS]` for each sequence, `[n, d]`.
    pub fn cls_embeddings(&self, seqs: &[&[u32]]) -> Result<Tensor<T>> {
        let (mut g, vars) = self.eval_graph();
        let net = self.net(&vars);
        let enc = net.encode(&mut g, &Packed::from_unpadded(seqs), None)?;
        let cls = enc.cls(&mut g)?;
        Ok(g.value(cls).clone())
    }

    /// MLM logits over the vocabulary at `(sequence, position)` pairs.
    pub fn mlm_logits(&self, seqs: &[&[u32]], at: &[(usize, usize)]) -> Result<Tensor<T>> {
        let (mut g, vars) = self.eval_graph();
        let net = self.net(&vars);
        let enc = net.encode(&mut g, &Packed::from_unpadded(seqs), None)?;
        let rows: Vec<usize> = at.iter().map(|&(b, t)| enc.row(b, t)).collect();
        let logits = net.mlm_logits(&mut g, enc.hidden, &rows)?;
        Ok(g.value(logits).clone())
    }

    /// Phrase-order and token-order logits at `(sequence, position)` pairs.
    pub fn order_logits(
        &self,
        seqs: &[&[u32]],
        at: &[(usize, usize)],
    ) -> Result<(Tensor<T>, Tensor<T>)> {
        let (mut g, vars) = self.eval_graph();
        let net = self.net(&vars);
        let enc = net.encode(&mut g, &Packed::from_unpadded(seqs), None)?;
        let rows: Vec<usize> = at.iter().map(|&(b, t)| enc.row(b, t)).collect();
        let (alpha, beta) = net.order_logits(&mut g, enc.hidden, &rows)?;
        Ok((g.value(alpha).clone(), g.value(beta).clone()))
    }

    /// Geohash logits per head for each sequence, `[n, classes]` each.
    pub fn geo_logits(&self, seqs: &[&[u32]]) -> Result<Vec<Tensor<T>>> {
        let (mut g, vars) = self.eval_graph();
        let net = self.net(&vars);
        let enc = net.encode(&mut g, &Packed::from_unpadded(seqs), None)?;
        let cls = enc.cls(&mut g)?;
        let heads = net.geo_logits(&mut g, cls)?;
        Ok(heads.into_iter().map(|v| g.value(v).clone()).collect())
    }
}

/// Largest relative disagreement between the analytic gradient of the joint
/// loss and central finite differences, over every parameter coordinate.
/// Dropout is off.
pub fn joint_loss_grad_error(
    model: &Model<f64>,
    batch: &[PretrainExample],
    tasks: TaskSet,
    epsilon: f64,
) -> Result<f64> {
    grad_check(
        |g: &mut Graph<f64>, vars: &[Var]| -> Result<Var> {
            Ok(model.net(vars).joint_loss(g, batch, tasks, None)?.0)
        },
        model.params(),
        epsilon,
    )
}

/// A batch of id sequences with attention masks, right-padded to one length.
#[derive(Clone, Debug, PartialEq)]
pub struct Packed {
    pub ids: Vec<u32>,
    pub mask: Vec<bool>,
    pub batch: usize,
    pub len: usize,
}

impl Packed {
    /// Pack padded sequences, dropping trailing columns that are padding in
    /// every row. Masked keys get exactly zero attention, so trimming does not
    /// change any unpadded output.
    pub fn new(ids: &[&[u32]], masks: &[&[u8]]) -> Self {
        let batch = ids.len();
        let len = masks
            .iter()
            .map(|m| m.iter().rposition(|&x| x != 0).map_or(0, |p| p + 1))
            .max()
            .unwrap_or(0)
            .max(1);
        let mut out_ids = Vec::with_capacity(batch * len);
        let mut out_mask = Vec::with_capacity(batch * len);
        for (row, m) in ids.iter().zip(masks) {
            for t in 0..len {
                let on = m.get(t).is_some_and(|&x| x != 0);
                out_ids.push(if on { row[t] } else { PAD_ID });
                out_mask.push(on);
            }
        }
        Self {
            ids: out_ids,
            mask: out_mask,
            batch,
            len,
        }
    }

    /// Pack unpadded sequences; every token is attended.
    pub fn from_unpadded(seqs: &[&[u32]]) -> Self {
        let masks: Vec<Vec<u8>> = seqs.iter().map(|s| vec![1u8; s.len()]).collect();
        let refs: Vec<&[u8]> = masks.iter().map(Vec::as_slice).collect();
        Self::new(seqs, &refs)
    }
}

/// Encoder output over a packed batch.
#[derive(Clone, Copy, Debug)]
pub struct Encoded {
    /// `[batch * len, d_model]`
    pub hidden: Var,
    pub batch: usize,
    pub len: usize,
}

impl Encoded {
    pub fn row(&self, b: usize, t: usize) -> usize {
        b * self.len + t
    }

    /// `[batch, d_model]` rows at position 0.
    pub fn cls<T: Real>(&self, g: &mut Graph<T>) -> Result<Var> {
        let rows: Vec<usize> = (0..self.batch).map(|b| self.row(b, 0)).collect();
        Ok(g.select_rows(self.hidden, &rows)?)
    }
}

/// Network operations over parameters bound to a graph.
#[derive(Clone, Copy)]
pub struct Net<'a> {
    cfg: &'a EncoderConfig,
    layout: &'a Layout,
    vars: &'a [Var],
}

impl Net<'_> {
    fn dense<T: Real>(&self, g: &mut Graph<T>, x: Var, d: Dense) -> Result<Var> {
        let h = g.matmul(x, self.vars[d.w])?;
        Ok(g.add_row(h, self.vars[d.b])?)
    }

    fn norm<T: Real>(&self, g: &mut Graph<T>, x: Var, n: Norm) -> Result<Var> {
        Ok(g.layer_norm(x, self.vars[n.gamma], self.vars[n.beta], LN_EPS)?)
    }

    /// dense → GELU → dense
    fn mlp<T: Real>(&self, g: &mut Graph<T>, x: Var, hidden: Dense, out: Dense) -> Result<Var> {
        let h = self.dense(g, x, hidden)?;
        let h = g.gelu(h)?;
        self.dense(g, h, out)
    }

    fn drop<T: Real>(&self, g: &mut Graph<T>, x: Var, rng: &mut Option<&mut RngStream>) -> Result<Var> {
        match rng {
            Some(r) if self.cfg.dropout > 0.0 => Ok(g.dropout(x, self.cfg.dropout, r)?),
            _ => Ok(x),
        }
    }

    /// Per-token representations of a packed batch. Dropout applies only when
    /// an RNG is supplied.
    pub fn encode<T: Real>(
        &self,
        g: &mut Graph<T>,
        input: &Packed,
        mut rng: Option<&mut RngStream>,
    ) -> Result<Encoded> {
        let (cfg, l) = (self.cfg, self.layout);
        if input.len > cfg.max_len {
            return Err(ModelError::TooLong {
                len: input.len,
                max: cfg.max_len,
            });
        }
        if input.batch == 0 {
            return Err(ModelError::EmptyBatch);
        }
        let ids: Vec<usize> = input
            .ids
            .iter()
            .map(|&id| {
                if (id as usize) < cfg.vocab_size {
                    Ok(id as usize)
                } else {
                    Err(ModelError::TokenId {
                        id,
                        vocab: cfg.vocab_size,
                    })
                }
            })
            .collect::<Result<_>>()?;
        let positions: Vec<usize> = (0..input.batch).flat_map(|_| 0..input.len).collect();
        let tok = g.embedding(self.vars[l.token_emb], &ids)?;
        let pos = g.embedding(self.vars[l.pos_emb], &positions)?;
        let x = g.add(tok, pos)?;
        let mut x = self.drop(g, x, &mut rng)?;
        let layout = AttentionLayout {
            batch: input.batch,
            len: input.len,
            key_mask: input.mask.clone(),
        };
        for blk in &l.blocks {
            let h = self.norm(g, x, blk.attn_norm)?;
            let q = self.dense(g, h, blk.q)?;
            let k = self.dense(g, h, blk.k)?;
            let v = self.dense(g, h, blk.v)?;
            let a = g.attention(q, k, v, &layout, cfg.n_heads)?;
            let a = self.dense(g, a, blk.o)?;
            let a = self.drop(g, a, &mut rng)?;
            x = g.add(x, a)?;
            let h = self.norm(g, x, blk.ff_norm)?;
            let h = self.mlp(g, h, blk.ff_in, blk.ff_out)?;
            let h = self.drop(g, h, &mut rng)?;
            x = g.add(x, h)?;
        }
        let hidden = self.norm(g, x, l.final_norm)?;
        Ok(Encoded {
            hidden,
            batch: input.batch,
            len: input.len,
        })
    }

    /// Vocabulary logits at the given hidden rows; the decoder is the token
    /// embedding table.
    pub fn mlm_logits<T: Real>(&self, g: &mut Graph<T>, hidden: Var, rows: &[usize]) -> Result<Var> {
        let l = self.layout;
        let h = g.select_rows(hidden, rows)?;
        let h = self.dense(g, h, l.mlm_dense)?;
        let h = g.gelu(h)?;
        let h = self.norm(g, h, l.mlm_norm)?;
        let z = g.matmul_bt(h, self.vars[l.token_emb])?;
        Ok(g.add_row(z, self.vars[l.mlm_bias])?)
    }

    /// One `[n, classes]` logit block per geohash position.
    pub fn geo_logits<T: Real>(&self, g: &mut Graph<T>, cls: Var) -> Result<Vec<Var>> {
        self.layout
            .geo
            .iter()
            .map(|&(hidden, out)| self.mlp(g, cls, hidden, out))
            .collect()
    }

    /// Phrase-order and token-order logits at the given hidden rows.
    pub fn order_logits<T: Real>(
        &self,
        g: &mut Graph<T>,
        hidden: Var,
        rows: &[usize],
    ) -> Result<(Var, Var)> {
        let l = self.layout;
        let r = g.select_rows(hidden, rows)?;
        let ph = self.dense(g, r, l.phrase_hidden)?;
        let ph = g.gelu(ph)?;
        let alpha = self.dense(g, ph, l.phrase_out)?;
        let token_in = if self.cfg.token_head_from_hidden {
            ph
        } else {
            alpha
        };
        let beta = self.mlp(g, token_in, l.token_hidden, l.token_out)?;
        Ok((alpha, beta))
    }

    /// Mean negative log-likelihood of the original token over masked
    /// positions; 0 when nothing is masked.
    pub fn mlm_loss<T: Real>(
        &self,
        g: &mut Graph<T>,
        enc: &Encoded,
        labels: &[&[Option<u32>]],
    ) -> Result<Var> {
        let mut rows = Vec::new();
        let mut targets = Vec::new();
        for (b, seq) in labels.iter().enumerate() {
            for (t, label) in seq.iter().enumerate() {
                if let Some(id) = label {
                    if t >= enc.len {
                        continue;
                    }
                    rows.push(enc.row(b, t));
                    targets.push(Some(*id as usize));
                }
            }
        }
        if rows.is_empty() {
            return Ok(g.constant(Tensor::scalar(T::zero())));
        }
        let logits = self.mlm_logits(g, enc.hidden, &rows)?;
        Ok(g.cross_entropy(logits, &targets)?)
    }

    /// Mean over geohash positions of the per-position cross-entropy.
    pub fn geo_loss<T: Real>(&self, g: &mut Graph<T>, cls: Var, targets: &[GeohashCode]) -> Result<Var> {
        let n = self.cfg.geohash_chars;
        let classes: Vec<Vec<usize>> = targets.iter().map(GeohashCode::classes).collect();
        if let Some(bad) = targets.iter().find(|t| t.len() != n) {
            return Err(GeoError::InvalidCode(bad.to_string()).into());
        }
        let heads = self.geo_logits(g, cls)?;
        let mut total: Option<Var> = None;
        for (i, logits) in heads.into_iter().enumerate() {
            let labels: Vec<Option<usize>> = classes.iter().map(|c| Some(c[i])).collect();
            let ce = g.cross_entropy(logits, &labels)?;
            total = Some(match total {
                Some(acc) => g.add(acc, ce)?,
                None => ce,
            });
        }
        let total = total.expect("geohash_chars is positive");
        Ok(g.scale(total, T::c(1.0 / n as f64))?)
    }

    /// In-batch contrastive loss between anchors and their positives. The
    /// other positives of the batch act as negatives.
    pub fn contrastive_loss<T: Real>(&self, g: &mut Graph<T>, anchor: Var, positive: Var) -> Result<Var> {
        let b = g.value(anchor).rows();
        let sim = g.cosine_matrix(anchor, positive)?;
        let sim = g.scale(sim, T::c(1.0 / self.cfg.temperature))?;
        let labels: Vec<Option<usize>> = (0..b).map(Some).collect();
        let logits = if self.cfg.literal_contrastive {
            // Every row holds the matched-pair similarities only.
            let flat = g.reshape(sim, &[b * b, 1])?;
            let diag: Vec<usize> = (0..b).map(|i| i * b + i).collect();
            let diag = g.select_rows(flat, &diag)?;
            let row = g.reshape(diag, &[1, b])?;
            g.select_rows(row, &vec![0; b])?
        } else {
            sim
        };
        Ok(g.cross_entropy(logits, &labels)?)
    }

    /// Phrase-order plus token-order cross-entropy, each averaged over the
    /// labeled query tokens. Token `i` of a query sits at position `i + 1`.
    pub fn order_loss<T: Real>(
        &self,
        g: &mut Graph<T>,
        enc: &Encoded,
        labels: &[Option<&OrderLabels>],
    ) -> Result<Var> {
        let (q, r) = (self.cfg.phrase_classes, self.cfg.token_classes);
        let mut rows = Vec::new();
        let mut ya = Vec::new();
        let mut yb = Vec::new();
        for (b, l) in labels.iter().enumerate() {
            let Some(l) = l else { continue };
            for (i, (&a, &t)) in l.phrase_order.iter().zip(&l.token_order).enumerate() {
                if a == 0 || a > q {
                    return Err(ModelError::Label {
                        what: "phrase order",
                        value: a,
                        bound: q,
                    });
                }
                if t == 0 || t > r {
                    return Err(ModelError::Label {
                        what: "token order",
                        value: t,
                        bound: r,
                    });
                }
                if i + 1 >= enc.len {
                    return Err(ModelError::TooLong {
                        len: i + 2,
                        max: enc.len,
                    });
                }
                rows.push(enc.row(b, i + 1));
                ya.push(Some(a - 1));
                yb.push(Some(t - 1));
            }
        }
        if rows.is_empty() {
            return Ok(g.constant(Tensor::scalar(T::zero())));
        }
        let (alpha, beta) = self.order_logits(g, enc.hidden, &rows)?;
        let la = g.cross_entropy(alpha, &ya)?;
        let lb = g.cross_entropy(beta, &yb)?;
        Ok(g.add(la, lb)?)
    }

    /// Builds the enabled task losses over one batch and their sum. Disabled
    /// tasks are not computed and contribute exactly 0.
    pub fn joint_loss<T: Real>(
        &self,
        g: &mut Graph<T>,
        batch: &[PretrainExample],
        tasks: TaskSet,
        mut rng: Option<&mut RngStream>,
    ) -> Result<(Var, LossParts)> {
        if batch.is_empty() {
            return Err(ModelError::EmptyBatch);
        }
        let mut parts = LossParts::default();
        let mut total: Option<Var> = None;
        let mut push = |g: &mut Graph<T>, task: Task, v: Var| -> Result<()> {
            let x = g.value(v).item().f64();
            if !x.is_finite() {
                return Err(ModelError::NonFinite(task.name()));
            }
            parts.set(task, x);
            total = Some(match total {
                Some(acc) => g.add(acc, v)?,
                None => v,
            });
            Ok(())
        };

        if tasks.geo_mp || tasks.geo_cp {
            let ids: Vec<&[u32]> = batch.iter().map(|e| e.masked_ids.as_slice()).collect();
            let masks: Vec<&[u8]> = batch.iter().map(|e| e.attention_mask.as_slice()).collect();
            let enc = self.encode(g, &Packed::new(&ids, &masks), rng.as_deref_mut())?;
            if tasks.geo_mp {
                let labels: Vec<&[Option<u32>]> = batch.iter().map(|e| e.mlm_labels.as_slice()).collect();
                let v = self.mlm_loss(g, &enc, &labels)?;
                push(g, Task::GeoMp, v)?;
            }
            if tasks.geo_cp {
                let targets = batch
                    .iter()
                    .map(|e| GeohashCode::parse(&e.geohash_target))
                    .collect::<std::result::Result<Vec<_>, _>>()?;
                let cls = enc.cls(g)?;
                let v = self.geo_loss(g, cls, &targets)?;
                push(g, Task::GeoCp, v)?;
            }
        }
        if tasks.ucbl {
            let encode_cls = |g: &mut Graph<T>, rng: Option<&mut RngStream>, ids: Vec<&[u32]>, masks: Vec<&[u8]>| {
                let enc = self.encode(g, &Packed::new(&ids, &masks), rng)?;
                enc.cls(g)
            };
            let a = encode_cls(
                g,
                rng.as_deref_mut(),
                batch.iter().map(|e| e.anchor_query_ids.as_slice()).collect(),
                batch.iter().map(|e| e.anchor_mask.as_slice()).collect(),
            )?;
            let p = encode_cls(
                g,
                rng.as_deref_mut(),
                batch.iter().map(|e| e.positive_query_ids.as_slice()).collect(),
                batch.iter().map(|e| e.positive_mask.as_slice()).collect(),
            )?;
            let v = self.contrastive_loss(g, a, p)?;
            push(g, Task::Ucbl, v)?;
        }
        if tasks.ptop {
            let ids: Vec<&[u32]> = batch.iter().map(|e| e.shuffled_query_ids.as_slice()).collect();
            let masks: Vec<&[u8]> = batch.iter().map(|e| e.shuffled_mask.as_slice()).collect();
            let enc = self.encode(g, &Packed::new(&ids, &masks), rng)?;
            let labels: Vec<Option<&OrderLabels>> = batch.iter().map(|e| e.order_labels.as_ref()).collect();
            let v = self.order_loss(g, &enc, &labels)?;
            push(g, Task::Ptop, v)?;
        }
        let total = match total {
            Some(t) => t,
            None => g.constant(Tensor::scalar(T::zero())),
        };
        Ok((total, parts))
    }
}
