//! Per-modality backbones, their warm-up pretraining, PEFT wrapping and the
//! projection heads into the shared embedding space.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::peft::{lora_wrap, AdapterBlock, LinearLayer, LoRALinear};
use crate::tensor::{AdamConfig, Graph, OptimizerState, ParameterSet, Tensor, Var};
use crate::world::scene::stable_seed;
use crate::world::{DatasetManifest, Modality, ModalityFeatures, BACKGROUND};

/// Sizes shared by every encoder and the PEFT attachments.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EncoderConfig {
    pub hidden: usize,
    pub embed_dim: usize,
    /// Requested LoRA rank; layers narrower than this use their own maximum.
    pub rank: usize,
    /// LoRA alpha is `alpha_per_rank · r`.
    pub alpha_per_rank: f64,
    pub adapter_bottleneck: usize,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        Self {
            hidden: 64,
            embed_dim: 32,
            rank: 8,
            alpha_per_rank: 2.0,
            adapter_bottleneck: 8,
        }
    }
}

impl EncoderConfig {
    pub fn validate(&self) -> Result<()> {
        if self.hidden == 0 || self.embed_dim == 0 || self.adapter_bottleneck == 0 {
            return Err(Error::Config("encoder sizes must be positive".into()));
        }
        if self.rank == 0 {
            return Err(Error::Config("LoRA rank must be at least 1".into()));
        }
        if !(self.alpha_per_rank > 0.0) {
            return Err(Error::Config("alpha_per_rank must be positive".into()));
        }
        Ok(())
    }
}

fn backbone_layers(m: Modality, hidden: usize) -> [LinearLayer; 2] {
    let p = format!("encoder.{}", m.name());
    [
        LinearLayer {
            path: format!("{p}.l1"),
            in_dim: m.dim(),
            out_dim: hidden,
        },
        LinearLayer {
            path: format!("{p}.l2"),
            in_dim: hidden,
            out_dim: hidden,
        },
    ]
}

/// Two-layer MLP `in → hidden → hidden` with optional LoRA and adapters on
/// each layer.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModalityEncoder {
    pub modality: Modality,
    pub layers: [LinearLayer; 2],
    pub lora: Option<[LoRALinear; 2]>,
    pub adapters: Option<[AdapterBlock; 2]>,
}

impl ModalityEncoder {
    /// Backbone-only view of the encoder.
    pub fn backbone(m: Modality, hidden: usize) -> Self {
        Self {
            modality: m,
            layers: backbone_layers(m, hidden),
            lora: None,
            adapters: None,
        }
    }

    fn layer(&self, g: &mut Graph, params: &ParameterSet, i: usize, x: Var) -> Result<Var> {
        let y = match &self.lora {
            Some(l) => l[i].forward(g, params, x)?,
            None => self.layers[i].forward(g, params, x)?,
        };
        match &self.adapters {
            Some(a) => a[i].forward(g, params, y),
            None => Ok(y),
        }
    }

    /// Latent for each row of `x: n × in`.
    pub fn forward(&self, g: &mut Graph, params: &ParameterSet, x: Var) -> Result<Var> {
        let (_, cols) = g.value(x).dims2();
        if cols != self.modality.dim() {
            return Err(Error::Shape(format!(
                "{} encoder expects {} features, got {cols}",
                self.modality,
                self.modality.dim()
            )));
        }
        let h = self.layer(g, params, 0, x)?;
        let h = g.relu(h);
        self.layer(g, params, 1, h)
    }

    /// Same encoder with PEFT attachments stripped, reading the same
    /// backbone parameters.
    pub fn without_peft(&self) -> Self {
        Self {
            lora: None,
            adapters: None,
            ..self.clone()
        }
    }
}

/// Linear map into the shared space followed by L2 normalisation.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ProjectionHead {
    pub linear: LinearLayer,
}

impl ProjectionHead {
    pub fn forward(&self, g: &mut Graph, params: &ParameterSet, latent: Var) -> Result<Var> {
        let z = self.linear.forward(g, params, latent)?;
        g.normalize_rows(z)
    }
}

/// Registers randomly initialised backbones for every modality.
pub fn init_backbones(params: &mut ParameterSet, hidden: usize, seed: u64) {
    for m in Modality::ALL {
        let mut rng = ChaCha8Rng::seed_from_u64(stable_seed(seed, 0xBB00 + m.index() as u64));
        for l in backbone_layers(m, hidden) {
            LinearLayer::init(params, &l.path, l.in_dim, l.out_dim, &mut rng);
        }
    }
}

/// Wraps pretrained, frozen backbones with LoRA and adapters and adds the
/// projection heads. Returns encoders and heads in canonical modality order.
pub fn attach_peft(
    params: &mut ParameterSet,
    config: &EncoderConfig,
    seed: u64,
) -> Result<(Vec<ModalityEncoder>, Vec<ProjectionHead>)> {
    config.validate()?;
    let mut encoders = Vec::new();
    let mut heads = Vec::new();
    for m in Modality::ALL {
        let layers = backbone_layers(m, config.hidden);
        for l in &layers {
            if params.get(&l.weight_path()).map(|t| t.shape().to_vec())
                != Some(vec![l.out_dim, l.in_dim])
            {
                return Err(Error::Contract(format!(
                    "backbone {} missing or misshapen",
                    l.path
                )));
            }
        }
        let mut rng = ChaCha8Rng::seed_from_u64(stable_seed(seed, 0xA0 + m.index() as u64));
        let wrap = |params: &mut ParameterSet, l: &LinearLayer, salt: u64| {
            let r = config.rank.min(l.in_dim).min(l.out_dim);
            lora_wrap(
                params,
                l.clone(),
                r,
                config.alpha_per_rank * r as f64,
                stable_seed(seed, salt),
            )
        };
        let lora = [
            wrap(params, &layers[0], 0x1A00 + m.index() as u64)?,
            wrap(params, &layers[1], 0x1B00 + m.index() as u64)?,
        ];
        let p = format!("encoder.{}", m.name());
        let adapters = [
            AdapterBlock::init(
                params,
                &format!("{p}.adapter1"),
                config.hidden,
                config.adapter_bottleneck,
                &mut rng,
            ),
            AdapterBlock::init(
                params,
                &format!("{p}.adapter2"),
                config.hidden,
                config.adapter_bottleneck,
                &mut rng,
            ),
        ];
        let proj = LinearLayer::init(
            params,
            &format!("projection.{}", m.name()),
            config.hidden,
            config.embed_dim,
            &mut rng,
        );
        encoders.push(ModalityEncoder {
            modality: m,
            layers,
            lora: Some(lora),
            adapters: Some(adapters),
        });
        heads.push(ProjectionHead { linear: proj });
    }
    Ok((encoders, heads))
}

/// Encodes one candidate's feature row.
pub fn encode(
    encoder: &ModalityEncoder,
    params: &ParameterSet,
    features: &ModalityFeatures,
    row: usize,
) -> Result<Vec<f64>> {
    if features.modality != encoder.modality {
        return Err(Error::Contract(format!(
            "{} features passed to the {} encoder",
            features.modality, encoder.modality
        )));
    }
    if !features.observed(row) {
        return Err(Error::Unavailable(format!(
            "{} for candidate {row}",
            features.modality
        )));
    }
    let mut g = Graph::no_grad();
    let x = g.constant(Tensor::new(
        &[1, encoder.modality.dim()],
        features.row(row).to_vec(),
    )?);
    let h = encoder.forward(&mut g, params, x)?;
    Ok(g.value(h).data().to_vec())
}

/// Projects one latent vector into the shared space.
pub fn project(head: &ProjectionHead, params: &ParameterSet, latent: &[f64]) -> Result<Vec<f64>> {
    let mut g = Graph::no_grad();
    let x = g.constant(Tensor::new(&[1, latent.len()], latent.to_vec())?);
    let z = head.forward(&mut g, params, x)?;
    Ok(g.value(z).data().to_vec())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PretrainConfig {
    pub epochs: usize,
    /// Candidate rows per optimisation step.
    pub batch_rows: usize,
    pub adam: AdamConfig,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        Self {
            epochs: 3,
            batch_rows: 256,
            adam: AdamConfig {
                lr: 3e-3,
                ..AdamConfig::default()
            },
        }
    }
}

/// Observed feature rows of one modality with their class labels.
pub fn labelled_rows(manifest: &DatasetManifest, m: Modality) -> (Vec<f64>, Vec<usize>) {
    let mut x = Vec::new();
    let mut y = Vec::new();
    for (_, f) in manifest.frames() {
        let feats = f.modality(m);
        for (i, &label) in f.labels.iter().enumerate() {
            if feats.observed(i) {
                x.extend_from_slice(feats.row(i));
                y.push(label);
            }
        }
    }
    (x, y)
}

fn probe_layer(m: Modality, hidden: usize) -> LinearLayer {
    LinearLayer {
        path: format!("probe.{}", m.name()),
        in_dim: hidden,
        out_dim: BACKGROUND + 1,
    }
}

fn probe_logits(
    enc: &ModalityEncoder,
    probe: &LinearLayer,
    g: &mut Graph,
    params: &ParameterSet,
    x: Var,
) -> Result<Var> {
    let h = enc.forward(g, params, x)?;
    let h = g.relu(h);
    probe.forward(g, params, h)
}

/// Result of backbone pretraining: frozen backbone parameters plus the
/// discarded probes' final training accuracy per modality.
#[derive(Debug, Clone, PartialEq)]
pub struct Pretrained {
    pub params: ParameterSet,
    pub probe_accuracy: Vec<(Modality, f64)>,
}

/// Trains each backbone separately on single-modality candidate
/// classification through a linear probe, discards the probes and freezes
/// every backbone path.
pub fn pretrain_backbones(
    train: &DatasetManifest,
    hidden: usize,
    config: &PretrainConfig,
    seed: u64,
) -> Result<Pretrained> {
    if train.records.is_empty() {
        return Err(Error::Contract(
            "pretraining needs a non-empty manifest".into(),
        ));
    }
    if config.epochs == 0 || config.batch_rows == 0 {
        return Err(Error::Config(
            "pretraining epochs and batch size must be positive".into(),
        ));
    }
    let mut out = ParameterSet::new();
    init_backbones(&mut out, hidden, seed);
    let mut accuracy = Vec::new();
    for m in Modality::ALL {
        let enc = ModalityEncoder::backbone(m, hidden);
        let probe_def = probe_layer(m, hidden);
        let mut params = out.subset(&format!("encoder.{}.", m.name()));
        let mut rng = ChaCha8Rng::seed_from_u64(stable_seed(seed, 0x9B0E + m.index() as u64));
        LinearLayer::init(
            &mut params,
            &probe_def.path,
            hidden,
            BACKGROUND + 1,
            &mut rng,
        );
        let (x, y) = labelled_rows(train, m);
        let dim = m.dim();
        let mut order: Vec<usize> = (0..y.len()).collect();
        let mut opt = OptimizerState::new(config.adam);
        for _ in 0..config.epochs {
            order.shuffle(&mut rng);
            for chunk in order.chunks(config.batch_rows) {
                let mut bx = Vec::with_capacity(chunk.len() * dim);
                for &i in chunk {
                    bx.extend_from_slice(&x[i * dim..(i + 1) * dim]);
                }
                let labels: Vec<usize> = chunk.iter().map(|&i| y[i]).collect();
                let mut g = Graph::new();
                let xb = g.constant(Tensor::new(&[chunk.len(), dim], bx)?);
                let logits = probe_logits(&enc, &probe_def, &mut g, &params, xb)?;
                let lp = g.log_softmax_rows(logits)?;
                let picked = g.gather(lp, &labels)?;
                let nll = g.mean(picked);
                let loss = g.scale(nll, -1.0);
                let grads = g.backward(loss)?;
                let g = grads.for_params(&params);
                opt.step(&mut params, &g)?;
            }
        }
        accuracy.push((m, probe_accuracy(&enc, &probe_def, &params, &x, &y)?));
        for l in &enc.layers {
            for path in [l.weight_path(), l.bias_path()] {
                out.insert(
                    path.clone(),
                    params.get(&path).expect("trained path").clone(),
                );
            }
        }
    }
    out.freeze_prefix("encoder.");
    Ok(Pretrained {
        params: out,
        probe_accuracy: accuracy,
    })
}

fn probe_accuracy(
    enc: &ModalityEncoder,
    probe: &LinearLayer,
    params: &ParameterSet,
    x: &[f64],
    y: &[usize],
) -> Result<f64> {
    if y.is_empty() {
        return Ok(0.0);
    }
    let mut g = Graph::no_grad();
    let xb = g.constant(Tensor::new(&[y.len(), enc.modality.dim()], x.to_vec())?);
    let logits = probe_logits(enc, probe, &mut g, params, xb)?;
    let t = g.value(logits);
    let hits = (0..y.len()).filter(|&i| argmax(t.row(i)) == y[i]).count();
    Ok(hits as f64 / y.len() as f64)
}

pub(crate) fn argmax(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in v.iter().enumerate() {
        if x > v[best] {
            best = i;
        }
    }
    best
}

/// Linear-probe accuracy of a frozen backbone on a held-out manifest, with a
/// freshly trained probe (backbone untouched).
pub fn probe_accuracy_on(
    backbone: &ParameterSet,
    m: Modality,
    hidden: usize,
    train: &DatasetManifest,
    eval: &DatasetManifest,
    config: &PretrainConfig,
    seed: u64,
) -> Result<f64> {
    let enc = ModalityEncoder::backbone(m, hidden);
    let probe_def = probe_layer(m, hidden);
    let mut params = backbone.subset(&format!("encoder.{}.", m.name()));
    params.freeze_prefix("encoder.");
    let mut rng = ChaCha8Rng::seed_from_u64(stable_seed(seed, 0x7E57));
    LinearLayer::init(
        &mut params,
        &probe_def.path,
        hidden,
        BACKGROUND + 1,
        &mut rng,
    );
    let (x, y) = labelled_rows(train, m);
    let dim = m.dim();
    let mut opt = OptimizerState::new(config.adam);
    let mut order: Vec<usize> = (0..y.len()).collect();
    for _ in 0..config.epochs {
        order.shuffle(&mut rng);
        for chunk in order.chunks(config.batch_rows) {
            let mut bx = Vec::with_capacity(chunk.len() * dim);
            for &i in chunk {
                bx.extend_from_slice(&x[i * dim..(i + 1) * dim]);
            }
            let labels: Vec<usize> = chunk.iter().map(|&i| y[i]).collect();
            let mut g = Graph::new();
            let xb = g.constant(Tensor::new(&[chunk.len(), dim], bx)?);
            let logits = probe_logits(&enc, &probe_def, &mut g, &params, xb)?;
            let lp = g.log_softmax_rows(logits)?;
            let picked = g.gather(lp, &labels)?;
            let nll = g.mean(picked);
            let loss = g.scale(nll, -1.0);
            let grads = g.backward(loss)?;
            let g = grads.for_params(&params);
            opt.step(&mut params, &g)?;
        }
    }
    let (ex, ey) = labelled_rows(eval, m);
    probe_accuracy(&enc, &probe_def, &params, &ex, &ey)
}
