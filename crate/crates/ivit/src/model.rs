//! The instance transformer and its feature-vector variant.
//!
//! A bag of nucleus-centered patches becomes a token sequence: each patch is
//! projected by a small CNN, a learned class token is prepended, and split
//! x/y position embeddings plus a grade embedding are added. Pre-norm encoder
//! layers with pad-masked attention follow, and a linear head reads the class
//! token. The `ivit_h` variant swaps the CNN for a linear projection of ten
//! cellular features, drops position embeddings, and keeps grade and class
//! token.
//!
//! Embedding tables carry two reserved rows past the vocabulary: index V is
//! the class-token slot and index V+1 the pad slot. Pad rows never contribute
//! as attention keys, so logits are exactly independent of pad content.

use std::fmt;
use std::io::{Read, Write};
use std::path::Path;
use std::str::FromStr;

use indexmap::IndexMap;
use rand::SeedableRng;
use rand_chacha::ChaCha12Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::extraction::InstanceBag;
use crate::numerics::graph::Graph;
use crate::numerics::tensor::Tensor;

/// Width of the per-nucleus cellular feature vector consumed by `ivit_h`.
pub const RAW_FEATURE_DIM: usize = 10;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ModelKind {
    Ivit,
    IvitH,
}

impl fmt::Display for ModelKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            ModelKind::Ivit => write!(f, "ivit"),
            ModelKind::IvitH => write!(f, "ivit_h"),
        }
    }
}

impl FromStr for ModelKind {
    type Err = Error;
    fn from_str(s: &str) -> Result<ModelKind> {
        match s {
            "ivit" => Ok(ModelKind::Ivit),
            "ivit_h" => Ok(ModelKind::IvitH),
            other => Err(Error::Config(format!("unknown model kind {:?}", other))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct IViTConfig {
    /// Patch side length, divisible by 4.
    pub p: usize,
    /// Instance slots per bag (sequence length minus the class token).
    pub n: usize,
    /// Hidden width, even; heads need not divide it (see [`IViTConfig::head_dim`]).
    pub d: usize,
    pub heads: usize,
    pub layers: usize,
    pub grid_w: usize,
    pub grid_h: usize,
    pub n_grades: usize,
    pub n_classes: usize,
    pub mlp_ratio: usize,
}

impl IViTConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::Config(msg));
        if self.p < 8 || self.p % 4 != 0 {
            return bad(format!("patch size {} must be divisible by 4 and >= 8", self.p));
        }
        if self.d == 0 || self.d % 2 != 0 {
            return bad(format!("hidden size {} must be even and positive", self.d));
        }
        if self.heads == 0 || self.d / self.heads == 0 {
            return bad(format!("{} heads leave no dimensions out of {}", self.heads, self.d));
        }
        if self.n == 0 || self.layers == 0 || self.grid_w == 0 || self.grid_h == 0 || self.mlp_ratio == 0 {
            return bad("n, layers, grid extents, and mlp_ratio must be positive".into());
        }
        if self.n_grades == 0 || self.n_classes < 2 {
            return bad("need at least one grade and two classes".into());
        }
        Ok(())
    }

    /// Dimensions per attention head. Heads need not divide `d`: each head
    /// gets the floor share and the output projection restores width `d`.
    pub fn head_dim(&self) -> usize {
        self.d / self.heads
    }

    /// Concatenated width of all attention heads (= `d` when heads divide it).
    pub fn attn_width(&self) -> usize {
        self.heads * self.head_dim()
    }

    /// Flattened width after the two stride-2 convolutions.
    pub fn cnn_flat(&self) -> usize {
        16 * (self.p / 4) * (self.p / 4)
    }
}

/// Token sequence plus key-validity mask; row 0 is the class token.
#[derive(Debug, Clone)]
pub struct SequenceState {
    pub s: Tensor,
    pub mask: Vec<bool>,
}

/// Named parameter tensors in fixed creation order.
#[derive(Debug, Clone, Default)]
pub struct ParameterStore {
    map: IndexMap<String, Tensor>,
}

impl ParameterStore {
    pub fn new() -> ParameterStore {
        ParameterStore { map: IndexMap::new() }
    }

    fn insert(&mut self, name: &str, t: Tensor) -> Result<()> {
        if self.map.insert(name.to_string(), t).is_some() {
            return Err(Error::Contract { op: "ParameterStore", msg: format!("duplicate parameter {:?}", name) });
        }
        Ok(())
    }

    /// Builds a store from named tensors, rejecting duplicate names. Lets
    /// optimizer code be driven on hand-built parameter sets.
    pub fn from_named(pairs: Vec<(String, Tensor)>) -> Result<ParameterStore> {
        let mut store = ParameterStore::new();
        for (name, t) in pairs {
            store.insert(&name, t)?;
        }
        Ok(store)
    }

    pub fn get(&self, name: &str) -> Result<&Tensor> {
        self.map
            .get(name)
            .ok_or_else(|| Error::Checkpoint(format!("missing parameter {:?}", name)))
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.map.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn names(&self) -> Vec<&str> {
        self.map.keys().map(|k| k.as_str()).collect()
    }

    pub fn len(&self) -> usize {
        self.map.len()
    }

    pub fn is_empty(&self) -> bool {
        self.map.is_empty()
    }

    pub fn num_scalars(&self) -> usize {
        self.map.values().map(|t| t.numel()).sum()
    }

    fn assert_all_finite(&self) -> Result<()> {
        for (name, t) in self.iter() {
            if !t.data().iter().all(|v| v.is_finite()) {
                return Err(Error::Checkpoint(format!("parameter {:?} contains non-finite values", name)));
            }
        }
        Ok(())
    }
}

enum Init {
    /// Normal(0, 0.02) for embeddings and the class token.
    Embed,
    /// Normal(0, sqrt(2/fan_in)) for conv and linear weights.
    He(usize),
    Zeros,
    Ones,
}

fn init_tensor(rng: &mut ChaCha12Rng, shape: &[usize], init: Init) -> Result<Tensor> {
    let n: usize = shape.iter().product();
    let data = match init {
        Init::Zeros => vec![0.0; n],
        Init::Ones => vec![1.0; n],
        Init::Embed => {
            let dist = Normal::new(0.0, 0.02).expect("finite std");
            (0..n).map(|_| dist.sample(rng)).collect()
        }
        Init::He(fan_in) => {
            let dist = Normal::new(0.0, (2.0 / fan_in as f64).sqrt()).expect("finite std");
            (0..n).map(|_| dist.sample(rng)).collect()
        }
    };
    Tensor::param(shape, data)
}

/// (name, shape, init) for every parameter, in creation order.
fn parameter_plan(kind: ModelKind, c: &IViTConfig) -> Vec<(String, Vec<usize>, Init)> {
    let d = c.d;
    let mut plan: Vec<(String, Vec<usize>, Init)> = Vec::new();
    let mut push = |name: String, shape: Vec<usize>, init: Init| plan.push((name, shape, init));
    match kind {
        ModelKind::Ivit => {
            push("cnn.conv1.w".into(), vec![8, 3, 5, 5], Init::He(3 * 5 * 5));
            push("cnn.conv1.b".into(), vec![8], Init::Zeros);
            push("cnn.conv2.w".into(), vec![16, 8, 5, 5], Init::He(8 * 5 * 5));
            push("cnn.conv2.b".into(), vec![16], Init::Zeros);
            let flat = c.cnn_flat();
            push("cnn.fc1.w".into(), vec![flat, 256], Init::He(flat));
            push("cnn.fc1.b".into(), vec![256], Init::Zeros);
            push("cnn.fc2.w".into(), vec![256, d], Init::He(256));
            push("cnn.fc2.b".into(), vec![d], Init::Zeros);
        }
        ModelKind::IvitH => {
            push("proj.w".into(), vec![RAW_FEATURE_DIM, d], Init::He(RAW_FEATURE_DIM));
            push("proj.b".into(), vec![d], Init::Zeros);
        }
    }
    push("cls_token".into(), vec![1, d], Init::Embed);
    if kind == ModelKind::Ivit {
        push("pos_x".into(), vec![c.grid_w + 2, d / 2], Init::Embed);
        push("pos_y".into(), vec![c.grid_h + 2, d / 2], Init::Embed);
    }
    push("grade".into(), vec![c.n_grades + 2, d], Init::Embed);
    for l in 0..c.layers {
        let pfx = format!("layers.{}.", l);
        push(format!("{}ln1.gamma", pfx), vec![d], Init::Ones);
        push(format!("{}ln1.beta", pfx), vec![d], Init::Zeros);
        let aw = c.attn_width();
        for proj in ["q", "k", "v"] {
            push(format!("{}attn.w{}", pfx, proj), vec![d, aw], Init::He(d));
            push(format!("{}attn.b{}", pfx, proj), vec![aw], Init::Zeros);
        }
        push(format!("{}attn.wo", pfx), vec![aw, d], Init::He(aw));
        push(format!("{}attn.bo", pfx), vec![d], Init::Zeros);
        push(format!("{}ln2.gamma", pfx), vec![d], Init::Ones);
        push(format!("{}ln2.beta", pfx), vec![d], Init::Zeros);
        push(format!("{}mlp.w1", pfx), vec![d, c.mlp_ratio * d], Init::He(d));
        push(format!("{}mlp.b1", pfx), vec![c.mlp_ratio * d], Init::Zeros);
        push(format!("{}mlp.w2", pfx), vec![c.mlp_ratio * d, d], Init::He(c.mlp_ratio * d));
        push(format!("{}mlp.b2", pfx), vec![d], Init::Zeros);
    }
    push("head.w".into(), vec![d, c.n_classes], Init::He(d));
    push("head.b".into(), vec![c.n_classes], Init::Zeros);
    plan
}

pub struct IViT {
    pub kind: ModelKind,
    pub config: IViTConfig,
    pub params: ParameterStore,
}

impl IViT {
    /// Fresh model with the documented initialization, deterministic in `seed`.
    pub fn new(kind: ModelKind, config: IViTConfig, seed: u64) -> Result<IViT> {
        config.validate()?;
        let mut rng = ChaCha12Rng::seed_from_u64(seed);
        let mut params = ParameterStore::new();
        for (name, shape, init) in parameter_plan(kind, &config) {
            params.insert(&name, init_tensor(&mut rng, &shape, init)?)?;
        }
        Ok(IViT { kind, config, params })
    }

    /// Wraps externally built parameters, checking names and shapes exactly.
    pub fn from_parts(kind: ModelKind, config: IViTConfig, params: ParameterStore) -> Result<IViT> {
        config.validate()?;
        let plan = parameter_plan(kind, &config);
        if params.len() != plan.len() {
            return Err(Error::Checkpoint(format!(
                "expected {} parameters, got {}",
                plan.len(),
                params.len()
            )));
        }
        for (name, shape, _) in &plan {
            let t = params.get(name)?;
            if t.shape() != shape.as_slice() {
                return Err(Error::Checkpoint(format!(
                    "parameter {:?} has shape {:?}, expected {:?}",
                    name,
                    t.shape(),
                    shape
                )));
            }
        }
        params.assert_all_finite()?;
        Ok(IViT { kind, config, params })
    }

    fn p(&self, name: &str) -> &Tensor {
        self.params.get(name).expect("parameter set was validated at construction")
    }

    /// CNN projection of `count` patches taken row-wise from the front of
    /// `patches` ([*,3,P,P]); returns [count, D].
    pub fn embed_patches(&self, g: &mut Graph, patches: &Tensor, count: usize) -> Result<Tensor> {
        let c = &self.config;
        let per = 3 * c.p * c.p;
        let shape_ok = patches.ndim() == 4
            && patches.shape()[1..] == [3, c.p, c.p]
            && patches.shape()[0] >= count;
        if !shape_ok {
            return Err(Error::Shape {
                op: "embed_patches",
                details: format!("patches {:?} incompatible with P={} count {}", patches.shape(), c.p, count),
            });
        }
        if count == 0 {
            return Err(Error::Contract { op: "embed_patches", msg: "no patches to embed".into() });
        }
        let data = patches.data();
        let mut rows = Vec::with_capacity(count);
        for i in 0..count {
            let x = Tensor::from_vec(&[3, c.p, c.p], data[i * per..(i + 1) * per].to_vec())?;
            let c1 = g.conv2d(&x, self.p("cnn.conv1.w"), self.p("cnn.conv1.b"), 2, 2)?;
            let h1 = g.relu(&c1)?;
            let c2 = g.conv2d(&h1, self.p("cnn.conv2.w"), self.p("cnn.conv2.b"), 2, 2)?;
            let h2 = g.relu(&c2)?;
            let flat = g.reshape(&h2, &[1, c.cnn_flat()])?;
            let a1 = g.linear(&flat, self.p("cnn.fc1.w"), self.p("cnn.fc1.b"))?;
            let f1 = g.relu(&a1)?;
            rows.push(g.linear(&f1, self.p("cnn.fc2.w"), self.p("cnn.fc2.b"))?);
        }
        drop(data);
        if rows.len() == 1 {
            return Ok(rows.pop().unwrap());
        }
        g.concat_rows(&rows)
    }

    /// Builds S0 = [cls; tokens] + concat(pos_x, pos_y) + grade for a patch
    /// bag. Only valid slots are embedded; pad slots contribute a zero row
    /// plus the reserved pad rows of each table and are masked as keys.
    pub fn assemble_sequence(&self, g: &mut Graph, bag: &InstanceBag) -> Result<SequenceState> {
        if self.kind != ModelKind::Ivit {
            return Err(Error::Contract { op: "assemble_sequence", msg: "patch bags need an ivit model".into() });
        }
        let c = &self.config;
        if bag.patches.shape() != [c.n, 3, c.p, c.p] {
            return Err(Error::Shape {
                op: "assemble_sequence",
                details: format!("bag patches {:?}, config wants [{},3,{},{}]", bag.patches.shape(), c.n, c.p, c.p),
            });
        }
        if bag.grid_x.len() != c.n || bag.grid_y.len() != c.n || bag.grade_ids.len() != c.n || bag.valid.len() != c.n {
            return Err(Error::Shape {
                op: "assemble_sequence",
                details: format!("bag slot vectors must all have length {}", c.n),
            });
        }
        if bag.n_valid == 0 || bag.n_valid != bag.valid.iter().filter(|&&v| v).count() {
            return Err(Error::EmptyBag { roi_id: bag.roi_id.clone() });
        }

        // content rows: class token, then per slot the CNN embedding or zeros
        let valid_slots: Vec<usize> = (0..c.n).filter(|&i| bag.valid[i]).collect();
        let stacked = self.embed_valid_patches(g, bag, &valid_slots)?;
        let zero_row = Tensor::zeros(&[1, c.d]);
        let mut parts: Vec<Tensor> = Vec::with_capacity(c.n + 1);
        parts.push(self.p("cls_token").clone());
        let mut next_valid = 0usize;
        for i in 0..c.n {
            if bag.valid[i] {
                parts.push(g.slice_rows(&stacked, next_valid, 1)?);
                next_valid += 1;
            } else {
                parts.push(zero_row.clone());
            }
        }
        let content = g.concat_rows(&parts)?;

        // embedding ids: the class token uses slot V, pads already carry V+1
        let mut ids_x = Vec::with_capacity(c.n + 1);
        let mut ids_y = Vec::with_capacity(c.n + 1);
        let mut ids_g = Vec::with_capacity(c.n + 1);
        ids_x.push(c.grid_w);
        ids_y.push(c.grid_h);
        ids_g.push(c.n_grades);
        ids_x.extend_from_slice(&bag.grid_x);
        ids_y.extend_from_slice(&bag.grid_y);
        ids_g.extend_from_slice(&bag.grade_ids);

        let ex = g.embedding(self.p("pos_x"), &ids_x)?;
        let ey = g.embedding(self.p("pos_y"), &ids_y)?;
        let pos = g.concat_cols(&[ex, ey])?;
        let grd = g.embedding(self.p("grade"), &ids_g)?;
        let placed = g.add(&content, &pos)?;
        let s = g.add(&placed, &grd)?;

        let mut mask = Vec::with_capacity(c.n + 1);
        mask.push(true);
        mask.extend_from_slice(&bag.valid);
        Ok(SequenceState { s, mask })
    }

    fn embed_valid_patches(&self, g: &mut Graph, bag: &InstanceBag, slots: &[usize]) -> Result<Tensor> {
        let c = &self.config;
        let per = 3 * c.p * c.p;
        // contiguous re-pack so embed_patches sees a dense prefix
        let data = bag.patches.data();
        let mut packed = Vec::with_capacity(slots.len() * per);
        for &i in slots {
            packed.extend_from_slice(&data[i * per..(i + 1) * per]);
        }
        drop(data);
        let dense = Tensor::from_vec(&[slots.len(), 3, c.p, c.p], packed)?;
        self.embed_patches(g, &dense, slots.len())
    }

    /// Tokens from cellular feature vectors: linear 10->D projection, grade
    /// embedding, class token; no position embedding.
    pub fn assemble_sequence_h(
        &self,
        g: &mut Graph,
        features: &Tensor,
        grade_ids: &[usize],
        valid: &[bool],
    ) -> Result<SequenceState> {
        if self.kind != ModelKind::IvitH {
            return Err(Error::Contract { op: "assemble_sequence_h", msg: "feature bags need an ivit_h model".into() });
        }
        let c = &self.config;
        if features.shape() != [c.n, RAW_FEATURE_DIM] {
            return Err(Error::Shape {
                op: "assemble_sequence_h",
                details: format!("features {:?}, config wants [{},{}]", features.shape(), c.n, RAW_FEATURE_DIM),
            });
        }
        if grade_ids.len() != c.n || valid.len() != c.n {
            return Err(Error::Shape {
                op: "assemble_sequence_h",
                details: format!("slot vectors must have length {}", c.n),
            });
        }
        if !valid.iter().any(|&v| v) {
            return Err(Error::EmptyBag { roi_id: String::new() });
        }
        let tokens = g.linear(features, self.p("proj.w"), self.p("proj.b"))?;
        let content = g.concat_rows(&[self.p("cls_token").clone(), tokens])?;
        let mut ids_g = Vec::with_capacity(c.n + 1);
        ids_g.push(c.n_grades);
        ids_g.extend_from_slice(grade_ids);
        let grd = g.embedding(self.p("grade"), &ids_g)?;
        let s = g.add(&content, &grd)?;
        let mut mask = Vec::with_capacity(c.n + 1);
        mask.push(true);
        mask.extend_from_slice(valid);
        Ok(SequenceState { s, mask })
    }

    /// One pre-norm block: S' = S + MSA(LN(S)); out = S' + MLP(LN(S')).
    pub fn encoder_layer(&self, g: &mut Graph, state: &SequenceState, l: usize) -> Result<SequenceState> {
        let pfx = format!("layers.{}.", l);
        if l >= self.config.layers {
            return Err(Error::Contract { op: "encoder_layer", msg: format!("layer {} of {}", l, self.config.layers) });
        }
        let normed = g.layer_norm(
            &state.s,
            self.p(&format!("{}ln1.gamma", pfx)),
            self.p(&format!("{}ln1.beta", pfx)),
        )?;
        let attended = self.attention(g, &normed, &state.mask, &pfx)?;
        let mid = g.add(&attended, &state.s)?;

        let normed2 = g.layer_norm(
            &mid,
            self.p(&format!("{}ln2.gamma", pfx)),
            self.p(&format!("{}ln2.beta", pfx)),
        )?;
        let pre = g.linear(&normed2, self.p(&format!("{}mlp.w1", pfx)), self.p(&format!("{}mlp.b1", pfx)))?;
        let h = g.gelu(&pre)?;
        let expanded = g.linear(&h, self.p(&format!("{}mlp.w2", pfx)), self.p(&format!("{}mlp.b2", pfx)))?;
        let out = g.add(&expanded, &mid)?;
        Ok(SequenceState { s: out, mask: state.mask.clone() })
    }

    /// Masked multi-head attention over a normed sequence.
    fn attention(&self, g: &mut Graph, x: &Tensor, mask: &[bool], pfx: &str) -> Result<Tensor> {
        let c = &self.config;
        let hd = c.head_dim();
        let q = g.linear(x, self.p(&format!("{}attn.wq", pfx)), self.p(&format!("{}attn.bq", pfx)))?;
        let k = g.linear(x, self.p(&format!("{}attn.wk", pfx)), self.p(&format!("{}attn.bk", pfx)))?;
        let v = g.linear(x, self.p(&format!("{}attn.wv", pfx)), self.p(&format!("{}attn.bv", pfx)))?;
        let mut heads = Vec::with_capacity(c.heads);
        for hidx in 0..c.heads {
            let qh = g.slice_cols(&q, hidx * hd, hd)?;
            let kh = g.slice_cols(&k, hidx * hd, hd)?;
            let vh = g.slice_cols(&v, hidx * hd, hd)?;
            let kt = g.transpose(&kh)?;
            let raw = g.matmul(&qh, &kt)?;
            let scores = g.scale(&raw, 1.0 / (hd as f64).sqrt())?;
            let probs = g.softmax_rows(&scores, Some(mask))?;
            heads.push(g.matmul(&probs, &vh)?);
        }
        let ctx = g.concat_cols(&heads)?;
        g.linear(&ctx, self.p(&format!("{}attn.wo", pfx)), self.p(&format!("{}attn.bo", pfx)))
    }

    fn classify_state(&self, g: &mut Graph, mut state: SequenceState) -> Result<Tensor> {
        for l in 0..self.config.layers {
            state = self.encoder_layer(g, &state, l)?;
        }
        let cls = g.slice_rows(&state.s, 0, 1)?;
        g.linear(&cls, self.p("head.w"), self.p("head.b"))
    }

    /// Logits [1, n_classes] for one patch bag, recorded on `g`.
    pub fn forward_classify(&self, g: &mut Graph, bag: &InstanceBag) -> Result<Tensor> {
        let state = self.assemble_sequence(g, bag)?;
        self.classify_state(g, state)
    }

    /// Logits [1, n_classes] for one feature bag (`ivit_h`), recorded on `g`.
    pub fn forward_classify_h(
        &self,
        g: &mut Graph,
        features: &Tensor,
        grade_ids: &[usize],
        valid: &[bool],
    ) -> Result<Tensor> {
        let state = self.assemble_sequence_h(g, features, grade_ids, valid)?;
        self.classify_state(g, state)
    }

    /// Inference-only logits as a plain vector.
    pub fn logits(&self, bag: &InstanceBag) -> Result<Vec<f64>> {
        let mut g = Graph::inference();
        Ok(self.forward_classify(&mut g, bag)?.to_vec())
    }

    /// Inference-only argmax class for one bag.
    pub fn predict(&self, bag: &InstanceBag) -> Result<usize> {
        Ok(argmax(&self.logits(bag)?))
    }

    // -- checkpointing --------------------------------------------------

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
        self.write_checkpoint(&mut f)
    }

    pub fn write_checkpoint<W: Write>(&self, w: &mut W) -> Result<()> {
        let meta = CheckpointMeta { kind: self.kind, config: self.config };
        let json = serde_json::to_vec(&meta)?;
        w.write_all(CHECKPOINT_MAGIC)?;
        w.write_all(&(json.len() as u32).to_le_bytes())?;
        w.write_all(&json)?;
        w.write_all(&(self.params.len() as u32).to_le_bytes())?;
        for (name, tensor) in self.params.iter() {
            let mut blob = Vec::new();
            tensor.write_ivt1(&mut blob)?;
            w.write_all(&(name.len() as u32).to_le_bytes())?;
            w.write_all(name.as_bytes())?;
            w.write_all(&(blob.len() as u32).to_le_bytes())?;
            w.write_all(&blob)?;
        }
        Ok(())
    }

    pub fn load(path: &Path) -> Result<IViT> {
        let mut f = std::io::BufReader::new(std::fs::File::open(path)?);
        IViT::read_checkpoint(&mut f)
    }

    pub fn read_checkpoint<R: Read>(r: &mut R) -> Result<IViT> {
        let mut magic = [0u8; 4];
        r.read_exact(&mut magic)?;
        if &magic != CHECKPOINT_MAGIC {
            return Err(Error::Checkpoint(format!("bad checkpoint magic {:?}", magic)));
        }
        let json_len = read_u32(r)? as usize;
        let mut json = vec![0u8; json_len];
        r.read_exact(&mut json)?;
        let meta: CheckpointMeta =
            serde_json::from_slice(&json).map_err(|e| Error::Checkpoint(format!("config block: {}", e)))?;
        let n_entries = read_u32(r)? as usize;
        let mut params = ParameterStore::new();
        for _ in 0..n_entries {
            let name_len = read_u32(r)? as usize;
            let mut name = vec![0u8; name_len];
            r.read_exact(&mut name)?;
            let name = String::from_utf8(name).map_err(|e| Error::Checkpoint(format!("parameter name: {}", e)))?;
            let blob_len = read_u32(r)? as usize;
            let mut blob = vec![0u8; blob_len];
            r.read_exact(&mut blob)?;
            let raw = Tensor::read_ivt1(&mut blob.as_slice())?;
            params.insert(&name, Tensor::param(raw.shape(), raw.to_vec())?)?;
        }
        IViT::from_parts(meta.kind, meta.config, params)
    }
}

const CHECKPOINT_MAGIC: &[u8; 4] = b"IVTA";

#[derive(Serialize, Deserialize)]
struct CheckpointMeta {
    kind: ModelKind,
    config: IViTConfig,
}

fn read_u32<R: Read>(r: &mut R) -> Result<u32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)?;
    Ok(u32::from_le_bytes(b))
}

pub fn argmax(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in v.iter().enumerate() {
        if x > v[best] {
            best = i;
        }
    }
    best
}
