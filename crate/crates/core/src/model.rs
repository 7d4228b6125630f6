//! Toy vision transformer, its training loop and the two-stage
//! reparameterization into multiplication-reduced form.

use serde::{Deserialize, Serialize};

use crate::attention::{Attention, AttentionConfig, AttnMode, Projection};
use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::layers::{LayerNorm, Linear, LinearMode, Mlp, Module};
use crate::moe::{init_router, DispatchPlan, MoeConfig, MoeLayer};
use crate::param::{join, Param, Params};
use crate::quant::QuantConfig;
use crate::rng::Rng;
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BlockConfig {
    pub d: usize,
    pub h: usize,
    pub mlp_ratio: f32,
    pub attn_mode: AttnMode,
    pub mlp_mode: LinearMode,
    pub attn_linear_mode: LinearMode,
    /// Kept as dense softmax attention through reparameterization.
    pub exempt: bool,
}

impl BlockConfig {
    pub fn dense(d: usize, h: usize) -> Self {
        Self {
            d,
            h,
            mlp_ratio: 4.0,
            attn_mode: AttnMode::Softmax,
            mlp_mode: LinearMode::Dense,
            attn_linear_mode: LinearMode::Dense,
            exempt: false,
        }
    }

    pub fn hidden(&self) -> usize {
        ((self.d as f32 * self.mlp_ratio).round() as usize).max(1)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub blocks: Vec<BlockConfig>,
    pub patch: usize,
    pub img: usize,
    pub channels: usize,
    pub classes: usize,
    pub seed: u64,
    pub quant: QuantConfig,
    pub moe: MoeConfig,
    /// 0 = dense, 1 = binary linear attention, 2 = shift/MoE linears.
    pub stage: u8,
}

impl ModelConfig {
    /// `depth` dense blocks of width `d`; the last block is exempt from
    /// reparameterization.
    pub fn toy(d: usize, h: usize, depth: usize, classes: usize, seed: u64) -> Self {
        let mut blocks = vec![BlockConfig::dense(d, h); depth];
        if let Some(last) = blocks.last_mut() {
            last.exempt = true;
        }
        Self {
            blocks,
            patch: 4,
            img: 16,
            channels: 3,
            classes,
            seed,
            quant: QuantConfig::default(),
            moe: MoeConfig::default(),
            stage: 0,
        }
    }

    pub fn tokens(&self) -> usize {
        let g = self.img / self.patch;
        g * g
    }

    pub fn dim(&self) -> usize {
        self.blocks.first().map_or(0, |b| b.d)
    }

    pub fn validate(&self) -> Result<()> {
        if self.patch == 0 || self.img == 0 || !self.img.is_multiple_of(self.patch) {
            return Err(Error::Invalid(format!(
                "image side {} must be a positive multiple of patch {}",
                self.img, self.patch
            )));
        }
        if self.blocks.is_empty() || self.classes == 0 || self.channels == 0 {
            return Err(Error::Invalid("model needs blocks, classes and channels".into()));
        }
        let d = self.dim();
        for (i, b) in self.blocks.iter().enumerate() {
            if b.d != d {
                return Err(Error::Invalid(format!("block {i} width {} differs from {d}", b.d)));
            }
            if !(b.mlp_ratio > 0.0) {
                return Err(Error::Invalid(format!("block {i} mlp_ratio must be positive")));
            }
            AttentionConfig::new(b.d, b.h, b.attn_mode)?;
        }
        if self.stage > 2 {
            return Err(Error::Invalid(format!("unknown stage {}", self.stage)));
        }
        self.quant.validate()
    }
}

#[derive(Clone, Debug)]
pub enum FeedForward {
    Mlp(Mlp),
    Moe(MoeLayer<Mlp>),
}

impl Params for FeedForward {
    fn visit_params(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Param)) {
        match self {
            FeedForward::Mlp(m) => m.visit_params(prefix, f),
            FeedForward::Moe(m) => m.visit_params(prefix, f),
        }
    }

    fn after_update(&mut self) {
        match self {
            FeedForward::Mlp(m) => m.after_update(),
            FeedForward::Moe(m) => m.after_update(),
        }
    }
}

impl Module for FeedForward {
    fn forward(&mut self, x: &Tensor, train: bool) -> Result<Tensor> {
        match self {
            FeedForward::Mlp(m) => m.forward(x, train),
            FeedForward::Moe(m) => m.forward(x, train),
        }
    }

    fn backward(&mut self, dy: &Tensor) -> Result<Tensor> {
        match self {
            FeedForward::Mlp(m) => m.backward(dy),
            FeedForward::Moe(m) => m.backward(dy),
        }
    }
}

fn moe_of<E: Clone + Module>(dense: E, shift: E, d: usize, cfg: &MoeConfig, rng: &mut Rng) -> Result<MoeLayer<E>> {
    let router = init_router(d, 2, cfg, rng)?;
    MoeLayer::new(router, vec![dense, shift], cfg.lat.clone())
}

fn convert_linear(l: &Linear, mode: LinearMode, cfg: &ModelConfig, rng: &mut Rng) -> Result<Projection> {
    Ok(match mode {
        LinearMode::Dense => Projection::Linear(l.clone()),
        LinearMode::Shift => {
            let mut s = l.clone();
            s.to_shift(cfg.quant)?;
            Projection::Linear(s)
        }
        LinearMode::Moe => {
            let mut s = l.clone();
            s.to_shift(cfg.quant)?;
            Projection::Moe(moe_of(l.clone(), s, l.in_dim(), &cfg.moe, rng)?)
        }
    })
}

fn convert_mlp(m: &Mlp, mode: LinearMode, cfg: &ModelConfig, rng: &mut Rng) -> Result<FeedForward> {
    Ok(match mode {
        LinearMode::Dense => FeedForward::Mlp(m.clone()),
        LinearMode::Shift => {
            let mut s = m.clone();
            s.to_shift(cfg.quant)?;
            FeedForward::Mlp(s)
        }
        LinearMode::Moe => {
            let mut s = m.clone();
            s.to_shift(cfg.quant)?;
            FeedForward::Moe(moe_of(m.clone(), s, m.fc1.in_dim(), &cfg.moe, rng)?)
        }
    })
}

/// Pre-norm transformer block:
/// `h = x + Attn(LN(x))`, `y = h + FF(LN(h))`.
#[derive(Clone, Debug)]
pub struct Block {
    pub cfg: BlockConfig,
    pub ln1: LayerNorm,
    pub attn: Attention,
    pub ln2: LayerNorm,
    pub ff: FeedForward,
}

impl Block {
    pub fn new(cfg: BlockConfig, tokens: usize, model: &ModelConfig, rng: &mut Rng) -> Result<Self> {
        let acfg = AttentionConfig::new(cfg.d, cfg.h, cfg.attn_mode)?;
        let mut attn = Attention::new(acfg, tokens, rng)?;
        let mlp = Mlp::new(cfg.d, cfg.hidden(), rng);
        for p in attn.projections_mut() {
            if let Projection::Linear(l) = p {
                *p = convert_linear(&l.clone(), cfg.attn_linear_mode, model, rng)?;
            }
        }
        let ff = convert_mlp(&mlp, cfg.mlp_mode, model, rng)?;
        Ok(Self {
            ln1: LayerNorm::new(cfg.d),
            attn,
            ln2: LayerNorm::new(cfg.d),
            ff,
            cfg,
        })
    }

    pub fn aux_loss(&self) -> f64 {
        let ff = match &self.ff {
            FeedForward::Moe(m) => m.aux_loss(),
            FeedForward::Mlp(_) => 0.0,
        };
        ff + self.attn.aux_loss()
    }
}

impl Params for Block {
    fn visit_params(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Param)) {
        self.ln1.visit_params(&join(prefix, "ln1"), f);
        self.attn.visit_params(&join(prefix, "attn"), f);
        self.ln2.visit_params(&join(prefix, "ln2"), f);
        self.ff.visit_params(&join(prefix, "mlp"), f);
    }

    fn after_update(&mut self) {
        self.attn.after_update();
        self.ff.after_update();
    }
}

impl Module for Block {
    fn forward(&mut self, x: &Tensor, train: bool) -> Result<Tensor> {
        let a = self.attn.forward(&self.ln1.forward(x, train)?, train)?;
        let h = x.add(&a)?;
        let m = self.ff.forward(&self.ln2.forward(&h, train)?, train)?;
        h.add(&m)
    }

    fn backward(&mut self, dy: &Tensor) -> Result<Tensor> {
        let dm = self.ff.backward(dy)?;
        let mut dh = dy.clone();
        dh.add_assign(&self.ln2.backward(&dm)?)?;
        let da = self.attn.backward(&dh)?;
        let mut dx = dh;
        dx.add_assign(&self.ln1.backward(&da)?)?;
        Ok(dx)
    }
}

/// Splits `B × img × img × c` images into `(B·n) × (patch·patch·c)` rows,
/// tokens in raster order.
pub fn patchify(images: &Tensor, patch: usize) -> Result<Tensor> {
    let s = images.shape();
    if s.len() != 4 || s[1] != s[2] || !s[1].is_multiple_of(patch) {
        return Err(Error::dim("patchify", format!("{s:?} with patch {patch}")));
    }
    let (b, side, c) = (s[0], s[1], s[3]);
    let g = side / patch;
    let width = patch * patch * c;
    let mut out = Vec::with_capacity(images.len());
    let data = images.data();
    for img in 0..b {
        for t in 0..g * g {
            let (ty, tx) = (t / g, t % g);
            for dy in 0..patch {
                let y = ty * patch + dy;
                let start = ((img * side + y) * side + tx * patch) * c;
                out.extend_from_slice(&data[start..start + patch * c]);
            }
        }
    }
    Tensor::new([b * g * g, width], out)
}

/// Mean cross-entropy over rows and its gradient with respect to `logits`.
pub fn cross_entropy(logits: &Tensor, labels: &[usize]) -> Result<(f64, Tensor)> {
    let (b, k) = logits.dims2("cross_entropy")?;
    if labels.len() != b {
        return Err(Error::dim(
            "cross_entropy",
            format!("{} labels for {b} rows", labels.len()),
        ));
    }
    let mut grad = Tensor::zeros([b, k]);
    let mut loss = 0.0f64;
    for (i, &y) in labels.iter().enumerate() {
        if y >= k {
            return Err(Error::Invalid(format!("label {y} outside [0, {k})")));
        }
        let row = logits.row(i);
        let m = row.iter().fold(f64::NEG_INFINITY, |a, &v| a.max(v as f64));
        let z: f64 = row.iter().map(|&v| (v as f64 - m).exp()).sum();
        loss += z.ln() + m - row[y] as f64;
        for (j, g) in grad.row_mut(i).iter_mut().enumerate() {
            let p = (row[j] as f64 - m).exp() / z;
            let t = if j == y { 1.0 } else { 0.0 };
            *g = ((p - t) / b as f64) as f32;
        }
    }
    Ok((loss / b as f64, grad))
}

#[derive(Clone, Debug)]
pub struct Vit {
    pub cfg: ModelConfig,
    pub embed: Linear,
    /// Learned positional embedding, `tokens × d`.
    pub pos: Param,
    pub blocks: Vec<Block>,
    pub norm: LayerNorm,
    pub head: Linear,
    pub step: u64,
    images: usize,
}

impl Vit {
    pub fn new(cfg: ModelConfig) -> Result<Self> {
        cfg.validate()?;
        let mut rng = Rng::new(cfg.seed);
        let (d, n) = (cfg.dim(), cfg.tokens());
        let embed = Linear::new(cfg.patch * cfg.patch * cfg.channels, d, &mut rng);
        let pos = Param::new(Tensor::randn([n, d], 0.02, &mut rng));
        let blocks = cfg
            .blocks
            .iter()
            .map(|b| Block::new(b.clone(), n, &cfg, &mut rng))
            .collect::<Result<Vec<_>>>()?;
        // Small head init keeps the initial prediction near uniform.
        let head = Linear::from_weights(
            Tensor::randn([d, cfg.classes], 0.02, &mut rng),
            Tensor::zeros([cfg.classes]),
        );
        Ok(Self {
            norm: LayerNorm::new(d),
            embed,
            pos,
            blocks,
            head,
            step: 0,
            images: 0,
            cfg,
        })
    }

    /// Token activations entering the first block, `(B·n) × d`.
    pub fn embed_tokens(&mut self, images: &Tensor, train: bool) -> Result<Tensor> {
        let patches = patchify(images, self.cfg.patch)?;
        let mut x = self.embed.forward(&patches, train)?;
        let n = self.cfg.tokens();
        let d = x.cols();
        for (r, row) in x.data_mut().chunks_mut(d).enumerate() {
            for (v, &p) in row.iter_mut().zip(self.pos.value.row(r % n)) {
                *v += p;
            }
        }
        Ok(x)
    }

    /// Class logits, `B × classes`.
    pub fn forward(&mut self, images: &Tensor, train: bool) -> Result<Tensor> {
        let b = images.shape().first().copied().unwrap_or(0);
        let mut x = self.embed_tokens(images, train)?;
        for block in &mut self.blocks {
            x = block.forward(&x, train)?;
        }
        let x = self.norm.forward(&x, train)?;
        let n = self.cfg.tokens();
        let d = x.cols();
        let mut pooled = vec![0.0f32; b * d];
        for img in 0..b {
            let mut acc = vec![0.0f64; d];
            for t in 0..n {
                for (a, &v) in acc.iter_mut().zip(x.row(img * n + t)) {
                    *a += v as f64;
                }
            }
            for (o, a) in pooled[img * d..(img + 1) * d].iter_mut().zip(acc) {
                *o = (a / n as f64) as f32;
            }
        }
        if train {
            self.images = b;
        }
        self.head.forward(&Tensor::new([b, d], pooled)?, train)
    }

    pub fn backward(&mut self, dlogits: &Tensor) -> Result<()> {
        let dpool = self.head.backward(dlogits)?;
        let (n, d) = (self.cfg.tokens(), dpool.cols());
        let inv = 1.0 / n as f32;
        let mut dx = Tensor::zeros([self.images * n, d]);
        for (r, row) in dx.data_mut().chunks_mut(d).enumerate() {
            for (o, &g) in row.iter_mut().zip(dpool.row(r / n)) {
                *o = g * inv;
            }
        }
        let mut dx = self.norm.backward(&dx)?;
        for block in self.blocks.iter_mut().rev() {
            dx = block.backward(&dx)?;
        }
        let mut dpos = vec![0.0f32; n * d];
        for (r, row) in dx.data().chunks(d).enumerate() {
            for (a, &g) in dpos[(r % n) * d..(r % n + 1) * d].iter_mut().zip(row) {
                *a += g;
            }
        }
        self.pos.accumulate(&dpos);
        self.embed.backward(&dx)?;
        Ok(())
    }

    /// Sum of the λ-weighted balancing losses of every MoE layer.
    pub fn aux_loss(&self) -> f64 {
        self.blocks.iter().map(Block::aux_loss).sum()
    }

    /// Names and last dispatch plans of all MoE layers, in forward order.
    pub fn moe_plans(&self) -> Vec<(String, Option<&DispatchPlan>)> {
        let mut out = Vec::new();
        for (i, b) in self.blocks.iter().enumerate() {
            for (name, p) in ["q", "k", "v", "o"].iter().zip(b.attn.projections()) {
                if let Projection::Moe(m) = p {
                    out.push((format!("blocks.{i}.attn.{name}"), m.last_plan.as_ref()));
                }
            }
            if let FeedForward::Moe(m) = &b.ff {
                out.push((format!("blocks.{i}.mlp"), m.last_plan.as_ref()));
            }
        }
        out
    }

    /// Replaces σ, λ and the latencies in the config and in every existing
    /// MoE layer.
    pub fn set_moe_config(&mut self, moe: MoeConfig) -> Result<()> {
        if !(moe.sigma > 0.0) || !(moe.lambda >= 0.0) {
            return Err(Error::Invalid(format!(
                "need sigma > 0 and lambda >= 0 (got {}, {})",
                moe.sigma, moe.lambda
            )));
        }
        crate::moe::latency_coefficients(&moe.lat)?;
        fn apply<E: Module>(m: &mut MoeLayer<E>, moe: &MoeConfig) -> Result<()> {
            m.router.sigma = moe.sigma;
            m.router.lambda = moe.lambda;
            m.set_latencies(moe.lat.clone())
        }
        for b in &mut self.blocks {
            for p in b.attn.projections_mut() {
                if let Projection::Moe(m) = p {
                    apply(m, &moe)?;
                }
            }
            if let FeedForward::Moe(m) = &mut b.ff {
                apply(m, &moe)?;
            }
        }
        self.cfg.moe = moe;
        Ok(())
    }

    /// Every linear layer with its parameter prefix, MoE experts included.
    pub fn visit_linears(&mut self, f: &mut dyn FnMut(&str, &mut Linear)) {
        f("embed", &mut self.embed);
        for (i, b) in self.blocks.iter_mut().enumerate() {
            let pre = format!("blocks.{i}");
            for (name, p) in ["q", "k", "v", "o"].iter().zip(b.attn.projections_mut()) {
                let base = format!("{pre}.attn.{name}");
                match p {
                    Projection::Linear(l) => f(&base, l),
                    Projection::Moe(m) => {
                        for (e, l) in m.experts.iter_mut().enumerate() {
                            f(&format!("{base}.expert{e}"), l);
                        }
                    }
                }
            }
            let base = format!("{pre}.mlp");
            let mlps: Vec<(String, &mut Mlp)> = match &mut b.ff {
                FeedForward::Mlp(m) => vec![(base, m)],
                FeedForward::Moe(m) => m
                    .experts
                    .iter_mut()
                    .enumerate()
                    .map(|(e, m)| (format!("{base}.expert{e}"), m))
                    .collect(),
            };
            for (base, m) in mlps {
                f(&join(&base, "fc1"), &mut m.fc1);
                f(&join(&base, "fc2"), &mut m.fc2);
            }
        }
        f("head", &mut self.head);
    }

    pub fn param_count(&mut self) -> usize {
        let mut n = 0;
        self.visit_params("", &mut |_, p| n += p.value.len());
        n
    }
}

impl Params for Vit {
    fn visit_params(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Param)) {
        self.embed.visit_params(&join(prefix, "embed"), f);
        f(&join(prefix, "pos"), &mut self.pos);
        for (i, b) in self.blocks.iter_mut().enumerate() {
            b.visit_params(&join(prefix, &format!("blocks.{i}")), f);
        }
        self.norm.visit_params(&join(prefix, "norm"), f);
        self.head.visit_params(&join(prefix, "head"), f);
    }

    fn after_update(&mut self) {
        for b in &mut self.blocks {
            b.after_update();
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub steps: usize,
    pub batch: usize,
    pub lr: f32,
    pub momentum: f32,
    /// Global gradient-norm clip; 0 disables.
    pub clip: f32,
    /// Shuffle seed.
    pub seed: u64,
    /// Parameters whose names start with any of these stay fixed.
    pub freeze: Vec<String>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            steps: 1000,
            batch: 32,
            lr: 0.05,
            momentum: 0.9,
            clip: 1.0,
            seed: 0,
            freeze: Vec::new(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch == 0 || !(self.lr > 0.0) || !(0.0..1.0).contains(&self.momentum) || !(self.clip >= 0.0) {
            return Err(Error::Invalid(format!(
                "need batch > 0, lr > 0, momentum in [0, 1), clip ≥ 0 (got {}, {}, {}, {})",
                self.batch, self.lr, self.momentum, self.clip
            )));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub step: u64,
    pub loss: f64,
    pub cls_loss: f64,
    pub aux_loss: f64,
    /// Expert shares per MoE layer, forward order.
    pub shares: Vec<Vec<f64>>,
}

/// Endless deterministic minibatch order: reshuffled each epoch.
pub struct Batches {
    order: Vec<usize>,
    pos: usize,
    batch: usize,
    rng: Rng,
}

impl Batches {
    pub fn new(n: usize, batch: usize, seed: u64) -> Self {
        let mut rng = Rng::new(seed);
        let mut order: Vec<usize> = (0..n).collect();
        rng.shuffle(&mut order);
        Self {
            order,
            pos: 0,
            batch: batch.min(n),
            rng,
        }
    }

    pub fn next_batch(&mut self) -> Vec<usize> {
        if self.pos + self.batch > self.order.len() {
            self.rng.shuffle(&mut self.order);
            self.pos = 0;
        }
        let b = self.order[self.pos..self.pos + self.batch].to_vec();
        self.pos += self.batch;
        b
    }
}

/// Momentum SGD step `v ← μv + g; w ← w − lr·v` on every non-frozen
/// parameter, with optional global-norm clipping. Returns the pre-clip norm.
pub fn sgd_step(model: &mut impl Params, hyper: &TrainConfig) -> f64 {
    let frozen = |name: &str| hyper.freeze.iter().any(|p| name.starts_with(p.as_str()));
    let mut sq = 0.0f64;
    model.visit_params("", &mut |name, p| {
        if !frozen(name) {
            sq += p.grad.data().iter().map(|&g| g as f64 * g as f64).sum::<f64>();
        }
    });
    let norm = sq.sqrt();
    let scale = if hyper.clip > 0.0 && norm > hyper.clip as f64 {
        (hyper.clip as f64 / norm) as f32
    } else {
        1.0
    };
    let (lr, mu) = (hyper.lr, hyper.momentum);
    model.visit_params("", &mut |name, p| {
        if frozen(name) {
            return;
        }
        let Param { value, grad, velocity } = p;
        for ((w, v), &g) in value
            .data_mut()
            .iter_mut()
            .zip(velocity.data_mut().iter_mut())
            .zip(grad.data())
        {
            *v = mu * *v + g * scale;
            *w -= lr * *v;
        }
    });
    model.after_update();
    norm
}

/// Minibatch training on cross-entropy plus the MoE balancing terms.
pub fn train(model: &mut Vit, data: &Dataset, hyper: &TrainConfig) -> Result<Vec<StepRecord>> {
    hyper.validate()?;
    if data.is_empty() {
        return Err(Error::Invalid("empty dataset".into()));
    }
    check_compatible(model, data)?;
    let mut batches = Batches::new(data.len(), hyper.batch, hyper.seed);
    let mut trace = Vec::with_capacity(hyper.steps);
    for _ in 0..hyper.steps {
        let idx = batches.next_batch();
        let labels: Vec<usize> = idx.iter().map(|&i| data.labels[i]).collect();
        model.zero_grad();
        let logits = model.forward(&data.batch(&idx), true)?;
        let (cls, dlogits) = cross_entropy(&logits, &labels)?;
        let aux = model.aux_loss();
        let loss = cls + aux;
        if !loss.is_finite() {
            return Err(Error::Numeric(format!("loss {loss} at step {}", model.step)));
        }
        model.backward(&dlogits)?;
        sgd_step(model, hyper);
        trace.push(StepRecord {
            step: model.step,
            loss,
            cls_loss: cls,
            aux_loss: aux,
            shares: model
                .moe_plans()
                .iter()
                .map(|(_, p)| p.map(DispatchPlan::shares).unwrap_or_default())
                .collect(),
        });
        model.step += 1;
    }
    Ok(trace)
}

fn check_compatible(model: &Vit, data: &Dataset) -> Result<()> {
    if data.img() != model.cfg.img || data.channels() != model.cfg.channels || data.classes > model.cfg.classes {
        return Err(Error::Invalid(format!(
            "dataset ({}px, {} channels, {} classes) does not fit model ({}px, {} channels, {} classes)",
            data.img(),
            data.channels(),
            data.classes,
            model.cfg.img,
            model.cfg.channels,
            model.cfg.classes
        )));
    }
    Ok(())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LayerDispatch {
    pub name: String,
    pub shares: Vec<f64>,
    /// Expert index per token, image-major.
    pub expert_of: Vec<usize>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub accuracy: f64,
    pub loss: f64,
    pub samples: usize,
    pub dispatch: Vec<LayerDispatch>,
}

pub const EVAL_BATCH: usize = 64;

pub fn evaluate(model: &mut Vit, data: &Dataset) -> Result<EvalReport> {
    check_compatible(model, data)?;
    let mut correct = 0usize;
    let mut loss = 0.0f64;
    let mut dispatch: Vec<LayerDispatch> = Vec::new();
    let all: Vec<usize> = (0..data.len()).collect();
    for idx in all.chunks(EVAL_BATCH) {
        let labels: Vec<usize> = idx.iter().map(|&i| data.labels[i]).collect();
        let logits = model.forward(&data.batch(idx), false)?;
        let (l, _) = cross_entropy(&logits, &labels)?;
        loss += l * idx.len() as f64;
        for (r, &y) in labels.iter().enumerate() {
            if crate::moe::argmax_lowest(logits.row(r)) == y {
                correct += 1;
            }
        }
        for (k, (name, plan)) in model.moe_plans().into_iter().enumerate() {
            if dispatch.len() <= k {
                dispatch.push(LayerDispatch {
                    name,
                    shares: Vec::new(),
                    expert_of: Vec::new(),
                });
            }
            if let Some(p) = plan {
                dispatch[k].expert_of.extend_from_slice(&p.expert_of);
            }
        }
    }
    for d in &mut dispatch {
        let experts = d.expert_of.iter().max().map_or(0, |&m| m + 1).max(2);
        let mut counts = vec![0usize; experts];
        for &e in &d.expert_of {
            counts[e] += 1;
        }
        let total = d.expert_of.len().max(1) as f64;
        d.shares = counts.iter().map(|&c| c as f64 / total).collect();
    }
    Ok(EvalReport {
        accuracy: correct as f64 / data.len() as f64,
        loss: loss / data.len() as f64,
        samples: data.len(),
        dispatch,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Stage2Plan {
    pub mlp_mode: LinearMode,
    pub attn_linear_mode: LinearMode,
}

impl Default for Stage2Plan {
    fn default() -> Self {
        Self {
            mlp_mode: LinearMode::Shift,
            attn_linear_mode: LinearMode::Shift,
        }
    }
}

/// Stage 1: non-exempt blocks switch to binarized linear attention with the
/// DWConv branch on V (zero-initialized, so it starts as a no-op).
pub fn reparam_stage1(model: &mut Vit) -> Result<()> {
    if model.cfg.stage != 0 {
        return Err(Error::State(format!(
            "stage 1 needs a dense model, found stage {}",
            model.cfg.stage
        )));
    }
    for (b, cfg) in model.blocks.iter_mut().zip(model.cfg.blocks.iter_mut()) {
        if cfg.exempt {
            continue;
        }
        cfg.attn_mode = AttnMode::LinearBinary;
        b.cfg.attn_mode = AttnMode::LinearBinary;
        b.attn.cfg.mode = AttnMode::LinearBinary;
        b.attn.cfg.dwconv = true;
        b.attn.dw.value = Tensor::zeros(b.attn.dw.value.shape().to_vec());
        b.attn.dw.velocity = Tensor::zeros(b.attn.dw.value.shape().to_vec());
    }
    model.cfg.stage = 1;
    Ok(())
}

/// Stage 2: attention projections and MLP linears of non-exempt blocks
/// become shift layers or Mult/Shift mixtures, initialized from the current
/// dense weights.
pub fn reparam_stage2(model: &mut Vit, plan: Stage2Plan) -> Result<()> {
    if model.cfg.stage != 1 {
        return Err(Error::State(format!(
            "stage 2 needs a stage-1 model, found stage {}",
            model.cfg.stage
        )));
    }
    let mut rng = Rng::new(model.cfg.seed ^ 0x5EED_0002);
    let snapshot = model.cfg.clone();
    for (b, cfg) in model.blocks.iter_mut().zip(model.cfg.blocks.iter_mut()) {
        if cfg.exempt {
            continue;
        }
        for p in b.attn.projections_mut() {
            let Projection::Linear(l) = p else {
                return Err(Error::State("projection already converted".into()));
            };
            *p = convert_linear(&l.clone(), plan.attn_linear_mode, &snapshot, &mut rng)?;
        }
        let FeedForward::Mlp(m) = &b.ff else {
            return Err(Error::State("MLP already converted".into()));
        };
        b.ff = convert_mlp(&m.clone(), plan.mlp_mode, &snapshot, &mut rng)?;
        cfg.attn_linear_mode = plan.attn_linear_mode;
        cfg.mlp_mode = plan.mlp_mode;
        b.cfg = cfg.clone();
    }
    model.cfg.stage = 2;
    Ok(())
}

pub fn reparam(model: &mut Vit, stage: u8, plan: Stage2Plan) -> Result<()> {
    match stage {
        1 => reparam_stage1(model),
        2 => reparam_stage2(model, plan),
        s => Err(Error::Invalid(format!("unknown stage {s}"))),
    }
}
