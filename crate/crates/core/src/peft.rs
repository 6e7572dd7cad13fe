//! LoRA-wrapped linear layers, bottleneck adapters and trainability
//! accounting.
//!
//! Layers are thin handles naming paths in a [`ParameterSet`]; the tensors
//! themselves always live in the set so that freezing, checkpointing and
//! optimisation see one source of truth.

use std::collections::BTreeMap;

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{Graph, ParameterSet, Tensor, Var};
use crate::world::scene::{gaussian, rng_for};

/// Dense affine map with weight `out × in` and bias `out`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LinearLayer {
    pub path: String,
    pub in_dim: usize,
    pub out_dim: usize,
}

impl LinearLayer {
    pub fn weight_path(&self) -> String {
        format!("{}.weight", self.path)
    }

    pub fn bias_path(&self) -> String {
        format!("{}.bias", self.path)
    }

    /// Registers a layer with uniform Kaiming-style weights and zero bias.
    pub fn init(
        params: &mut ParameterSet,
        path: &str,
        in_dim: usize,
        out_dim: usize,
        rng: &mut ChaCha8Rng,
    ) -> Self {
        let bound = (6.0 / in_dim as f64).sqrt() / 2.0;
        let w = (0..in_dim * out_dim)
            .map(|_| rng.random_range(-bound..bound))
            .collect();
        Self::with_values(params, path, in_dim, out_dim, w, vec![0.0; out_dim])
    }

    /// Registers a zero-initialised layer.
    pub fn zeros(params: &mut ParameterSet, path: &str, in_dim: usize, out_dim: usize) -> Self {
        Self::with_values(
            params,
            path,
            in_dim,
            out_dim,
            vec![0.0; in_dim * out_dim],
            vec![0.0; out_dim],
        )
    }

    pub fn with_values(
        params: &mut ParameterSet,
        path: &str,
        in_dim: usize,
        out_dim: usize,
        weight: Vec<f64>,
        bias: Vec<f64>,
    ) -> Self {
        let layer = Self {
            path: path.to_string(),
            in_dim,
            out_dim,
        };
        params.insert(
            layer.weight_path(),
            Tensor::from_raw(vec![out_dim, in_dim], weight),
        );
        params.insert(layer.bias_path(), Tensor::from_raw(vec![out_dim], bias));
        layer
    }

    pub fn numel(&self) -> usize {
        self.in_dim * self.out_dim + self.out_dim
    }

    pub fn freeze(&self, params: &mut ParameterSet) -> Result<()> {
        params.freeze(&self.weight_path())?;
        params.freeze(&self.bias_path())
    }

    /// `x · Wᵀ + b` for a batch `x: n × in`.
    pub fn forward(&self, g: &mut Graph, params: &ParameterSet, x: Var) -> Result<Var> {
        let w = g.param(params, &self.weight_path())?;
        let b = g.param(params, &self.bias_path())?;
        let y = g.matmul_nt(x, w)?;
        g.add_row(y, b)
    }

    /// Plain single-vector evaluation, used as an independent reference.
    pub fn apply(&self, params: &ParameterSet, x: &[f64]) -> Result<Vec<f64>> {
        let w = lookup(params, &self.weight_path())?;
        let b = lookup(params, &self.bias_path())?;
        if x.len() != self.in_dim {
            return Err(Error::Shape(format!(
                "{}: input length {} != {}",
                self.path,
                x.len(),
                self.in_dim
            )));
        }
        Ok((0..self.out_dim)
            .map(|o| b.data()[o] + w.row(o).iter().zip(x).map(|(a, b)| a * b).sum::<f64>())
            .collect())
    }
}

fn lookup<'a>(params: &'a ParameterSet, path: &str) -> Result<&'a Tensor> {
    params
        .get(path)
        .ok_or_else(|| Error::Contract(format!("missing parameter {path}")))
}

/// Frozen base layer plus a trainable low-rank update `(alpha / r) · B · A`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LoRALinear {
    pub base: LinearLayer,
    pub rank: usize,
    pub alpha: f64,
}

impl LoRALinear {
    pub fn a_path(&self) -> String {
        format!("{}.lora.A", self.base.path)
    }

    pub fn b_path(&self) -> String {
        format!("{}.lora.B", self.base.path)
    }

    pub fn scaling(&self) -> f64 {
        self.alpha / self.rank as f64
    }

    pub fn forward(&self, g: &mut Graph, params: &ParameterSet, x: Var) -> Result<Var> {
        let base = self.base.forward(g, params, x)?;
        let a = g.param(params, &self.a_path())?;
        let b = g.param(params, &self.b_path())?;
        let ax = g.matmul_nt(x, a)?;
        let bax = g.matmul_nt(ax, b)?;
        let scaled = g.scale(bax, self.scaling());
        g.add(base, scaled)
    }

    /// Scalar reference: `base(x) + (alpha/r) · B(A x)`.
    pub fn apply(&self, params: &ParameterSet, x: &[f64]) -> Result<Vec<f64>> {
        let mut y = self.base.apply(params, x)?;
        let a = lookup(params, &self.a_path())?;
        let b = lookup(params, &self.b_path())?;
        let ax: Vec<f64> = (0..self.rank)
            .map(|k| a.row(k).iter().zip(x).map(|(p, q)| p * q).sum())
            .collect();
        for (o, yo) in y.iter_mut().enumerate() {
            *yo += self.scaling() * b.row(o).iter().zip(&ax).map(|(p, q)| p * q).sum::<f64>();
        }
        Ok(y)
    }
}

/// Wraps `base` with a rank-`r` adapter: `A ~ N(0, 1/r)`, `B = 0`; freezes the
/// base paths.
pub fn lora_wrap(
    params: &mut ParameterSet,
    base: LinearLayer,
    r: usize,
    alpha: f64,
    init_seed: u64,
) -> Result<LoRALinear> {
    if r == 0 || r > base.in_dim.min(base.out_dim) {
        return Err(Error::Config(format!(
            "LoRA rank {r} outside 1..={} for {}",
            base.in_dim.min(base.out_dim),
            base.path
        )));
    }
    if !(alpha > 0.0) {
        return Err(Error::Config(format!(
            "LoRA alpha must be positive, got {alpha}"
        )));
    }
    base.freeze(params)?;
    let layer = LoRALinear {
        base,
        rank: r,
        alpha,
    };
    let mut rng = rng_for(init_seed, 0x10A4);
    let std = (1.0 / r as f64).sqrt();
    let a = (0..r * layer.base.in_dim)
        .map(|_| gaussian(&mut rng, std))
        .collect();
    params.insert(
        layer.a_path(),
        Tensor::from_raw(vec![r, layer.base.in_dim], a),
    );
    params.insert(layer.b_path(), Tensor::zeros(&[layer.base.out_dim, r]));
    Ok(layer)
}

/// Folds the low-rank update into a plain layer at `dest`:
/// `W' = W + (alpha/r) · B · A`.
pub fn merge_lora(
    params: &mut ParameterSet,
    layer: &LoRALinear,
    dest: &str,
) -> Result<LinearLayer> {
    let (out, inp, r) = (layer.base.out_dim, layer.base.in_dim, layer.rank);
    let w = lookup(params, &layer.base.weight_path())?.clone();
    let bias = lookup(params, &layer.base.bias_path())?.clone();
    let a = lookup(params, &layer.a_path())?;
    let b = lookup(params, &layer.b_path())?;
    let s = layer.scaling();
    let mut merged = w.into_data();
    for o in 0..out {
        for i in 0..inp {
            let delta: f64 = (0..r)
                .map(|k| b.data()[o * r + k] * a.data()[k * inp + i])
                .sum();
            merged[o * inp + i] += s * delta;
        }
    }
    Ok(LinearLayer::with_values(
        params,
        dest,
        inp,
        out,
        merged,
        bias.into_data(),
    ))
}

/// Residual bottleneck `x + up(relu(down(x)))`, identity at initialisation.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AdapterBlock {
    pub down: LinearLayer,
    pub up: LinearLayer,
}

impl AdapterBlock {
    pub fn init(
        params: &mut ParameterSet,
        path: &str,
        dim: usize,
        bottleneck: usize,
        rng: &mut ChaCha8Rng,
    ) -> Self {
        Self {
            down: LinearLayer::init(params, &format!("{path}.down"), dim, bottleneck, rng),
            up: LinearLayer::zeros(params, &format!("{path}.up"), bottleneck, dim),
        }
    }

    pub fn forward(&self, g: &mut Graph, params: &ParameterSet, x: Var) -> Result<Var> {
        let h = self.down.forward(g, params, x)?;
        let h = g.relu(h);
        let u = self.up.forward(g, params, h)?;
        g.add(x, u)
    }

    pub fn apply(&self, params: &ParameterSet, x: &[f64]) -> Result<Vec<f64>> {
        let h: Vec<f64> = self
            .down
            .apply(params, x)?
            .into_iter()
            .map(|v| v.max(0.0))
            .collect();
        let u = self.up.apply(params, &h)?;
        Ok(x.iter().zip(u).map(|(a, b)| a + b).collect())
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct GroupCount {
    pub total: usize,
    pub trainable: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainabilityReport {
    pub total: usize,
    pub trainable: usize,
    pub fraction: f64,
    pub groups: BTreeMap<String, GroupCount>,
}

/// Group a parameter path belongs to for accounting purposes.
pub fn param_group(path: &str) -> &'static str {
    if path.contains(".lora.") {
        "lora"
    } else if path.contains(".adapter") {
        "adapter"
    } else if path.starts_with("encoder.") {
        "backbone"
    } else if path.starts_with("projection.") {
        "projection"
    } else if path.starts_with("fusion.") {
        "fusion"
    } else if path.starts_with("detect.") {
        "detection"
    } else {
        "other"
    }
}

/// Exact parameter counts by enumeration of the set.
pub fn trainability_report(params: &ParameterSet) -> TrainabilityReport {
    let mut groups: BTreeMap<String, GroupCount> = BTreeMap::new();
    let (mut total, mut trainable) = (0, 0);
    for (path, t) in params.iter() {
        let g = groups.entry(param_group(path).to_string()).or_default();
        g.total += t.len();
        total += t.len();
        if !params.is_frozen(path) {
            g.trainable += t.len();
            trainable += t.len();
        }
    }
    TrainabilityReport {
        total,
        trainable,
        fraction: if total == 0 {
            0.0
        } else {
            trainable as f64 / total as f64
        },
        groups,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    fn rng() -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(7)
    }

    #[test]
    fn hand_evaluated_lora() {
        let mut ps = ParameterSet::new();
        let base = LinearLayer::with_values(&mut ps, "l", 1, 1, vec![2.0], vec![0.0]);
        let l = lora_wrap(&mut ps, base, 1, 1.0, 0).unwrap();
        ps.insert(l.a_path(), Tensor::new(&[1, 1], vec![1.0]).unwrap());
        ps.insert(l.b_path(), Tensor::new(&[1, 1], vec![3.0]).unwrap());
        assert_eq!(l.apply(&ps, &[5.0]).unwrap(), vec![25.0]);
        let mut g = Graph::new();
        let x = g.constant(Tensor::new(&[1, 1], vec![5.0]).unwrap());
        let y = l.forward(&mut g, &ps, x).unwrap();
        assert_eq!(g.value(y).data(), &[25.0]);
    }

    #[test]
    fn lora_parameter_counts() {
        let mut ps = ParameterSet::new();
        let base = LinearLayer::init(&mut ps, "l", 64, 64, &mut rng());
        lora_wrap(&mut ps, base, 8, 16.0, 1).unwrap();
        let r = trainability_report(&ps);
        assert_eq!(r.trainable, 1024);
        assert_eq!(r.total - r.trainable, 4160);
    }

    #[test]
    fn rank_precondition() {
        let mut ps = ParameterSet::new();
        let base = LinearLayer::init(&mut ps, "l", 4, 3, &mut rng());
        assert!(matches!(
            lora_wrap(&mut ps, base.clone(), 0, 1.0, 0),
            Err(Error::Config(_))
        ));
        assert!(matches!(
            lora_wrap(&mut ps, base.clone(), 4, 1.0, 0),
            Err(Error::Config(_))
        ));
        assert!(lora_wrap(&mut ps, base, 3, 1.0, 0).is_ok());
    }

    #[test]
    fn zero_b_is_identity_and_freezes_base() {
        let mut ps = ParameterSet::new();
        let base = LinearLayer::init(&mut ps, "l", 5, 4, &mut rng());
        let plain = base.apply(&ps, &[1.0, -2.0, 0.5, 3.0, 0.1]).unwrap();
        let l = lora_wrap(&mut ps, base, 2, 4.0, 3).unwrap();
        assert_eq!(l.apply(&ps, &[1.0, -2.0, 0.5, 3.0, 0.1]).unwrap(), plain);

        let mut g = Graph::new();
        let x = g.constant(Tensor::new(&[1, 5], vec![1.0, -2.0, 0.5, 3.0, 0.1]).unwrap());
        let y = l.forward(&mut g, &ps, x).unwrap();
        let s = g.sum(y);
        let grads = g.backward(s).unwrap();
        assert!(grads.param("l.weight").is_none());
        assert!(grads.param("l.bias").is_none());
        assert!(grads.param("l.lora.B").is_some());
    }

    #[test]
    fn merge_zero_b_is_bitwise_base() {
        let mut ps = ParameterSet::new();
        let base = LinearLayer::init(&mut ps, "l", 6, 6, &mut rng());
        let l = lora_wrap(&mut ps, base.clone(), 2, 4.0, 3).unwrap();
        let m = merge_lora(&mut ps, &l, "m").unwrap();
        assert_eq!(ps.get(&m.weight_path()), ps.get(&base.weight_path()));
        assert_eq!(ps.get(&m.bias_path()), ps.get(&base.bias_path()));
    }

    #[test]
    fn adapter_hand_example() {
        let mut ps = ParameterSet::new();
        let down = LinearLayer::with_values(
            &mut ps,
            "a.down",
            2,
            2,
            vec![1.0, 0.0, 0.0, 1.0],
            vec![0.0; 2],
        );
        let up = LinearLayer::with_values(
            &mut ps,
            "a.up",
            2,
            2,
            vec![1.0, 0.0, 0.0, 1.0],
            vec![0.0; 2],
        );
        let block = AdapterBlock { down, up };
        assert_eq!(block.apply(&ps, &[-1.0, 2.0]).unwrap(), vec![-1.0, 4.0]);
    }

    #[test]
    fn adapter_identity_at_init() {
        let mut ps = ParameterSet::new();
        let block = AdapterBlock::init(&mut ps, "enc.adapter1", 8, 3, &mut rng());
        let x: Vec<f64> = (0..8).map(|i| i as f64 - 3.5).collect();
        assert_eq!(block.apply(&ps, &x).unwrap(), x);
    }

    #[test]
    fn report_extremes() {
        let mut ps = ParameterSet::new();
        let l = LinearLayer::init(&mut ps, "encoder.x.l1", 3, 2, &mut rng());
        assert_eq!(trainability_report(&ps).fraction, 1.0);
        l.freeze(&mut ps).unwrap();
        assert_eq!(trainability_report(&ps).fraction, 0.0);
        assert_eq!(trainability_report(&ps).groups["backbone"].total, 8);
    }

    #[test]
    fn groups_by_path() {
        assert_eq!(param_group("encoder.lidar.l1.lora.A"), "lora");
        assert_eq!(param_group("encoder.lidar.adapter1.up.weight"), "adapter");
        assert_eq!(param_group("encoder.lidar.l2.weight"), "backbone");
        assert_eq!(param_group("projection.radar.weight"), "projection");
        assert_eq!(param_group("fusion.q"), "fusion");
        assert_eq!(param_group("detect.l1.bias"), "detection");
    }
}
