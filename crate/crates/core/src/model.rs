//! Policy/value MLP written from scratch.
//!
//! All parameters live in one flat `Vec<f64>`; each dense layer is a
//! row-major `out × in` weight block followed by its bias. Layers are the
//! hidden stack, then the policy head, then the value head. Gradients and
//! Adam moments share this layout.

use std::io::{Read, Write};
use std::path::Path;

use rand::{Rng, RngCore};
use serde::{Deserialize, Serialize};

use crate::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Architecture {
    pub input: usize,
    pub hidden: Vec<usize>,
    pub actions: usize,
    pub dropout: f64,
}

impl Architecture {
    pub fn new(input: usize, hidden: &[usize], actions: usize) -> Self {
        Architecture {
            input,
            hidden: hidden.to_vec(),
            actions,
            dropout: 0.3,
        }
    }

    fn validate(&self) -> Result<()> {
        if self.input == 0 || self.actions == 0 || self.hidden.is_empty() || self.hidden.contains(&0)
        {
            return Err(Error::Model(format!("invalid layer sizes {self:?}")));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::Model(format!("dropout {} outside [0, 1)", self.dropout)));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
struct Dense {
    w: usize,
    b: usize,
    inp: usize,
    out: usize,
}

fn layout(arch: &Architecture) -> (Vec<Dense>, usize) {
    let mut layers = Vec::new();
    let mut off = 0;
    let mut push = |inp: usize, out: usize| {
        let d = Dense {
            w: off,
            b: off + inp * out,
            inp,
            out,
        };
        off += inp * out + out;
        layers.push(d);
    };
    let mut prev = arch.input;
    for &h in &arch.hidden {
        push(prev, h);
        prev = h;
    }
    push(prev, arch.actions);
    push(prev, 1);
    (layers, off)
}

#[inline]
fn dot(a: &[f64], b: &[f64]) -> f64 {
    let n = a.len().min(b.len());
    let (a, b) = (&a[..n], &b[..n]);
    let mut acc = [0.0f64; 4];
    let chunks = n / 4;
    for i in 0..chunks {
        let j = 4 * i;
        acc[0] += a[j] * b[j];
        acc[1] += a[j + 1] * b[j + 1];
        acc[2] += a[j + 2] * b[j + 2];
        acc[3] += a[j + 3] * b[j + 3];
    }
    let mut s = (acc[0] + acc[1]) + (acc[2] + acc[3]);
    for j in 4 * chunks..n {
        s += a[j] * b[j];
    }
    s
}

#[inline]
fn axpy(alpha: f64, x: &[f64], y: &mut [f64]) {
    for (yi, xi) in y.iter_mut().zip(x) {
        *yi += alpha * xi;
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct NetOutput {
    pub policy: Vec<f64>,
    pub value: f64,
}

/// Softmax restricted to `mask`; masked entries are exactly zero.
pub fn masked_softmax(logits: &[f64], mask: &[bool]) -> Result<Vec<f64>> {
    if logits.len() != mask.len() {
        return Err(Error::Model("mask length differs from logits".into()));
    }
    let max = logits
        .iter()
        .zip(mask)
        .filter(|(_, &m)| m)
        .map(|(&l, _)| l)
        .fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY {
        return Err(Error::Model("mask has no legal action".into()));
    }
    let mut out: Vec<f64> = logits
        .iter()
        .zip(mask)
        .map(|(&l, &m)| if m { (l - max).exp() } else { 0.0 })
        .collect();
    let sum: f64 = out.iter().sum();
    out.iter_mut().for_each(|p| *p /= sum);
    Ok(out)
}

/// Training examples in row-major flat storage.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct TrainBatch {
    pub feature_dim: usize,
    pub action_count: usize,
    pub features: Vec<f64>,
    pub policy_targets: Vec<f64>,
    pub value_targets: Vec<f64>,
    pub masks: Vec<bool>,
}

impl TrainBatch {
    pub fn new(feature_dim: usize, action_count: usize) -> Self {
        TrainBatch {
            feature_dim,
            action_count,
            ..Default::default()
        }
    }

    pub fn push(&mut self, features: &[f64], policy: &[f64], value: f64, mask: &[bool]) {
        self.features.extend_from_slice(features);
        self.policy_targets.extend_from_slice(policy);
        self.value_targets.push(value);
        self.masks.extend_from_slice(mask);
    }

    pub fn len(&self) -> usize {
        self.value_targets.len()
    }

    pub fn is_empty(&self) -> bool {
        self.value_targets.is_empty()
    }

    fn row<'a, T>(v: &'a [T], width: usize, i: usize) -> &'a [T] {
        &v[i * width..(i + 1) * width]
    }

    fn validate(&self, arch: &Architecture) -> Result<()> {
        let n = self.len();
        if n == 0 {
            return Err(Error::Model("empty batch".into()));
        }
        if self.feature_dim != arch.input || self.action_count != arch.actions {
            return Err(Error::Model(format!(
                "batch shape ({}, {}) does not match network ({}, {})",
                self.feature_dim, self.action_count, arch.input, arch.actions
            )));
        }
        if self.features.len() != n * self.feature_dim
            || self.policy_targets.len() != n * self.action_count
            || self.masks.len() != n * self.action_count
        {
            return Err(Error::Model("batch row counts differ".into()));
        }
        for i in 0..n {
            let pi = Self::row(&self.policy_targets, self.action_count, i);
            let mask = Self::row(&self.masks, self.action_count, i);
            let mut sum = 0.0;
            for (&p, &m) in pi.iter().zip(mask) {
                if p < 0.0 || (!m && p != 0.0) {
                    return Err(Error::Model(format!(
                        "policy target row {i} puts mass outside its mask"
                    )));
                }
                sum += p;
            }
            if (sum - 1.0).abs() > 1e-6 {
                return Err(Error::Model(format!("policy target row {i} sums to {sum}")));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct LossParts {
    pub total: f64,
    pub policy: f64,
    pub value: f64,
    pub regularization: f64,
}

/// Per-sample dropout multipliers (0 or `1/(1-p)`) for every hidden unit.
#[derive(Debug, Clone, PartialEq)]
pub struct DropoutMasks {
    per_sample: Vec<Vec<Vec<f64>>>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct NetParams {
    arch: Architecture,
    layers: Vec<Dense>,
    data: Vec<f64>,
}

struct Cache {
    /// Inputs to each dense layer (post-dropout activations), input first.
    inputs: Vec<Vec<f64>>,
    /// Pre-activations of hidden layers.
    pre: Vec<Vec<f64>>,
    policy: Vec<f64>,
    value: f64,
}

impl NetParams {
    /// Glorot-uniform weights, zero biases.
    pub fn init(arch: &Architecture, rng: &mut dyn RngCore) -> Result<Self> {
        let mut p = Self::zeros(arch)?;
        for d in p.layers.clone() {
            let limit = (6.0 / (d.inp + d.out) as f64).sqrt();
            for w in &mut p.data[d.w..d.b] {
                *w = rng.gen_range(-limit..=limit);
            }
        }
        Ok(p)
    }

    pub fn zeros(arch: &Architecture) -> Result<Self> {
        arch.validate()?;
        let (layers, n) = layout(arch);
        Ok(NetParams {
            arch: arch.clone(),
            layers,
            data: vec![0.0; n],
        })
    }

    pub fn architecture(&self) -> &Architecture {
        &self.arch
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    pub fn as_mut_slice(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    /// `(weight range, bias range)` for every dense layer, hidden first, then
    /// the policy and value heads.
    pub fn layer_ranges(&self) -> Vec<(std::ops::Range<usize>, std::ops::Range<usize>)> {
        self.layers
            .iter()
            .map(|d| (d.w..d.b, d.b..d.b + d.out))
            .collect()
    }

    #[cfg(test)]
    fn is_weight(&self, i: usize) -> bool {
        self.layers.iter().any(|d| (d.w..d.b).contains(&i))
    }

    pub fn weight_norm_sq(&self) -> f64 {
        self.layers
            .iter()
            .map(|d| self.data[d.w..d.b].iter().map(|w| w * w).sum::<f64>())
            .sum()
    }

    pub fn sample_dropout(&self, rows: usize, rng: &mut dyn RngCore) -> DropoutMasks {
        let p = self.arch.dropout;
        let keep = 1.0 / (1.0 - p);
        DropoutMasks {
            per_sample: (0..rows)
                .map(|_| {
                    self.arch
                        .hidden
                        .iter()
                        .map(|&h| {
                            (0..h)
                                .map(|_| if p > 0.0 && rng.gen::<f64>() < p { 0.0 } else { keep })
                                .collect()
                        })
                        .collect()
                })
                .collect(),
        }
    }

    fn run(&self, x: &[f64], mask: &[bool], dropout: Option<&[Vec<f64>]>) -> Result<Cache> {
        if x.len() != self.arch.input {
            return Err(Error::Model(format!(
                "expected {} features, got {}",
                self.arch.input,
                x.len()
            )));
        }
        if mask.len() != self.arch.actions {
            return Err(Error::Model(format!(
                "expected mask of {}, got {}",
                self.arch.actions,
                mask.len()
            )));
        }
        let hidden = self.arch.hidden.len();
        let mut inputs = Vec::with_capacity(hidden + 1);
        let mut pre = Vec::with_capacity(hidden);
        let mut h = x.to_vec();
        for (l, d) in self.layers[..hidden].iter().enumerate() {
            let z: Vec<f64> = (0..d.out)
                .map(|o| {
                    let row = &self.data[d.w + o * d.inp..d.w + (o + 1) * d.inp];
                    dot(row, &h) + self.data[d.b + o]
                })
                .collect();
            let mut a: Vec<f64> = z.iter().map(|&v| v.max(0.0)).collect();
            if let Some(masks) = dropout {
                a.iter_mut().zip(&masks[l]).for_each(|(v, m)| *v *= m);
            }
            inputs.push(std::mem::replace(&mut h, a));
            pre.push(z);
        }
        let head = |d: &Dense| -> Vec<f64> {
            (0..d.out)
                .map(|o| dot(&self.data[d.w + o * d.inp..d.w + (o + 1) * d.inp], &h) + self.data[d.b + o])
                .collect()
        };
        let logits = head(&self.layers[hidden]);
        let value = head(&self.layers[hidden + 1])[0].tanh();
        let policy = masked_softmax(&logits, mask)?;
        inputs.push(h);
        Ok(Cache {
            inputs,
            pre,
            policy,
            value,
        })
    }

    /// Inference when `train` is `None`; otherwise applies inverted dropout
    /// drawn from the given random stream.
    pub fn forward(
        &self,
        features: &[f64],
        mask: &[bool],
        train: Option<&mut dyn RngCore>,
    ) -> Result<NetOutput> {
        let masks = train.map(|rng| self.sample_dropout(1, rng));
        let cache = self.run(
            features,
            mask,
            masks.as_ref().map(|m| m.per_sample[0].as_slice()),
        )?;
        Ok(NetOutput {
            policy: cache.policy,
            value: cache.value,
        })
    }

    fn sample_loss(cache: &Cache, pi: &[f64], z: f64) -> (f64, f64) {
        let value = (cache.value - z).powi(2);
        let policy: f64 = pi
            .iter()
            .zip(&cache.policy)
            .filter(|(&t, _)| t > 0.0)
            .map(|(&t, &p)| -t * p.ln())
            .sum();
        (policy, value)
    }

    fn loss_impl(&self, batch: &TrainBatch, l2: f64, dropout: Option<&DropoutMasks>) -> Result<LossParts> {
        batch.validate(&self.arch)?;
        let n = batch.len();
        let (mut lp, mut lv) = (0.0, 0.0);
        for i in 0..n {
            let cache = self.run(
                TrainBatch::row(&batch.features, batch.feature_dim, i),
                TrainBatch::row(&batch.masks, batch.action_count, i),
                dropout.map(|d| d.per_sample[i].as_slice()),
            )?;
            let (p, v) = Self::sample_loss(
                &cache,
                TrainBatch::row(&batch.policy_targets, batch.action_count, i),
                batch.value_targets[i],
            );
            lp += p;
            lv += v;
        }
        let reg = l2 * self.weight_norm_sq();
        let (lp, lv) = (lp / n as f64, lv / n as f64);
        Ok(LossParts {
            total: lp + lv + reg,
            policy: lp,
            value: lv,
            regularization: reg,
        })
    }

    /// Mean squared value error plus policy cross-entropy plus `l2 · ‖W‖²`,
    /// evaluated without dropout.
    pub fn loss(&self, batch: &TrainBatch, l2: f64) -> Result<LossParts> {
        self.loss_impl(batch, l2, None)
    }

    pub fn loss_with_dropout(&self, batch: &TrainBatch, l2: f64, dropout: &DropoutMasks) -> Result<LossParts> {
        self.loss_impl(batch, l2, Some(dropout))
    }

    /// Exact gradient of the training loss; one dropout mask is drawn per
    /// call and used for every sample's forward and backward pass.
    pub fn grad(&self, batch: &TrainBatch, l2: f64, rng: &mut dyn RngCore) -> Result<(Vec<f64>, LossParts)> {
        let masks = if self.arch.dropout > 0.0 {
            Some(self.sample_dropout(batch.len(), rng))
        } else {
            None
        };
        self.grad_impl(batch, l2, masks.as_ref())
    }

    pub fn grad_with_dropout(
        &self,
        batch: &TrainBatch,
        l2: f64,
        dropout: Option<&DropoutMasks>,
    ) -> Result<(Vec<f64>, LossParts)> {
        self.grad_impl(batch, l2, dropout)
    }

    fn grad_impl(
        &self,
        batch: &TrainBatch,
        l2: f64,
        dropout: Option<&DropoutMasks>,
    ) -> Result<(Vec<f64>, LossParts)> {
        batch.validate(&self.arch)?;
        let n = batch.len();
        let scale = 1.0 / n as f64;
        let hidden = self.arch.hidden.len();
        let mut g = vec![0.0; self.data.len()];
        let (mut lp, mut lv) = (0.0, 0.0);
        for i in 0..n {
            let masks = dropout.map(|d| d.per_sample[i].as_slice());
            let cache = self.run(
                TrainBatch::row(&batch.features, batch.feature_dim, i),
                TrainBatch::row(&batch.masks, batch.action_count, i),
                masks,
            )?;
            let pi = TrainBatch::row(&batch.policy_targets, batch.action_count, i);
            let z = batch.value_targets[i];
            let (p, v) = Self::sample_loss(&cache, pi, z);
            lp += p;
            lv += v;

            let top = &cache.inputs[hidden];
            let mut dh = vec![0.0; top.len()];
            // Policy head: d/dlogits of cross-entropy under softmax is p - π.
            let ph = self.layers[hidden];
            for o in 0..ph.out {
                let dz = (cache.policy[o] - pi[o]) * scale;
                if dz == 0.0 {
                    continue;
                }
                g[ph.b + o] += dz;
                axpy(dz, top, &mut g[ph.w + o * ph.inp..ph.w + (o + 1) * ph.inp]);
                axpy(dz, &self.data[ph.w + o * ph.inp..ph.w + (o + 1) * ph.inp], &mut dh);
            }
            let vh = self.layers[hidden + 1];
            let dz = 2.0 * (cache.value - z) * (1.0 - cache.value * cache.value) * scale;
            g[vh.b] += dz;
            axpy(dz, top, &mut g[vh.w..vh.w + vh.inp]);
            axpy(dz, &self.data[vh.w..vh.w + vh.inp], &mut dh);

            for l in (0..hidden).rev() {
                let d = self.layers[l];
                let inp = &cache.inputs[l];
                let mut dprev = vec![0.0; d.inp];
                for o in 0..d.out {
                    if cache.pre[l][o] <= 0.0 {
                        continue;
                    }
                    let m = masks.map_or(1.0, |m| m[l][o]);
                    let dz = dh[o] * m;
                    if dz == 0.0 {
                        continue;
                    }
                    g[d.b + o] += dz;
                    axpy(dz, inp, &mut g[d.w + o * d.inp..d.w + (o + 1) * d.inp]);
                    if l > 0 {
                        axpy(dz, &self.data[d.w + o * d.inp..d.w + (o + 1) * d.inp], &mut dprev);
                    }
                }
                dh = dprev;
            }
        }
        if l2 != 0.0 {
            for d in &self.layers {
                for k in d.w..d.b {
                    g[k] += 2.0 * l2 * self.data[k];
                }
            }
        }
        let reg = l2 * self.weight_norm_sq();
        let (lp, lv) = (lp * scale, lv * scale);
        Ok((
            g,
            LossParts {
                total: lp + lv + reg,
                policy: lp,
                value: lv,
                regularization: reg,
            },
        ))
    }

    const MAGIC: &'static [u8; 8] = b"AHERNET\0";
    const VERSION: u32 = 1;

    /// Binary checkpoint: magic, version, architecture, parameters and the
    /// optimizer state, all little-endian.
    pub fn save(&self, opt: &Adam, path: &Path) -> Result<()> {
        let mut buf = Vec::new();
        buf.extend_from_slice(Self::MAGIC);
        buf.extend_from_slice(&Self::VERSION.to_le_bytes());
        let put_u64 = |buf: &mut Vec<u8>, v: u64| buf.extend_from_slice(&v.to_le_bytes());
        let put_f64s = |buf: &mut Vec<u8>, v: &[f64]| {
            for x in v {
                buf.extend_from_slice(&x.to_le_bytes());
            }
        };
        put_u64(&mut buf, self.arch.input as u64);
        put_u64(&mut buf, self.arch.actions as u64);
        put_u64(&mut buf, self.arch.hidden.len() as u64);
        for &h in &self.arch.hidden {
            put_u64(&mut buf, h as u64);
        }
        put_f64s(&mut buf, &[self.arch.dropout]);
        put_u64(&mut buf, self.data.len() as u64);
        put_f64s(&mut buf, &self.data);
        let h = opt.hyper;
        put_f64s(&mut buf, &[h.lr, h.beta1, h.beta2, h.eps]);
        put_u64(&mut buf, opt.t);
        put_f64s(&mut buf, &opt.m);
        put_f64s(&mut buf, &opt.v);
        std::fs::File::create(path)?.write_all(&buf)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<(NetParams, Adam)> {
        let mut bytes = Vec::new();
        std::fs::File::open(path)?.read_to_end(&mut bytes)?;
        let mut r = Reader { bytes: &bytes, pos: 0 };
        if r.take(8)? != Self::MAGIC {
            return Err(Error::Model("not a checkpoint file".into()));
        }
        let version = u32::from_le_bytes(r.take(4)?.try_into().unwrap());
        if version != Self::VERSION {
            return Err(Error::Model(format!("unsupported checkpoint version {version}")));
        }
        let input = r.u64()? as usize;
        let actions = r.u64()? as usize;
        let hidden: Vec<usize> = (0..r.u64()?).map(|_| r.u64().map(|v| v as usize)).collect::<Result<_>>()?;
        let dropout = r.f64()?;
        let arch = Architecture {
            input,
            hidden,
            actions,
            dropout,
        };
        let mut params = NetParams::zeros(&arch)?;
        let n = r.u64()? as usize;
        if n != params.len() {
            return Err(Error::Model("checkpoint parameter count mismatch".into()));
        }
        for v in params.data.iter_mut() {
            *v = r.f64()?;
        }
        let hyper = AdamHyper {
            lr: r.f64()?,
            beta1: r.f64()?,
            beta2: r.f64()?,
            eps: r.f64()?,
        };
        let mut opt = Adam::new(n, hyper);
        opt.t = r.u64()?;
        for v in opt.m.iter_mut() {
            *v = r.f64()?;
        }
        for v in opt.v.iter_mut() {
            *v = r.f64()?;
        }
        if r.pos != bytes.len() {
            return Err(Error::Model("trailing bytes in checkpoint".into()));
        }
        Ok((params, opt))
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl Reader<'_> {
    fn take(&mut self, n: usize) -> Result<&[u8]> {
        let end = self.pos + n;
        let s = self
            .bytes
            .get(self.pos..end)
            .ok_or_else(|| Error::Model("truncated checkpoint".into()))?;
        self.pos = end;
        Ok(s)
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamHyper {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamHyper {
    fn default() -> Self {
        AdamHyper {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Adam {
    pub hyper: AdamHyper,
    t: u64,
    m: Vec<f64>,
    v: Vec<f64>,
}

impl Adam {
    pub fn new(n: usize, hyper: AdamHyper) -> Self {
        Adam {
            hyper,
            t: 0,
            m: vec![0.0; n],
            v: vec![0.0; n],
        }
    }

    pub fn steps(&self) -> u64 {
        self.t
    }

    /// Bias-corrected adaptive-moment update. Non-finite gradients are
    /// rejected before any state changes.
    pub fn step(&mut self, params: &mut NetParams, grads: &[f64]) -> Result<()> {
        if grads.len() != params.data.len() || self.m.len() != grads.len() {
            return Err(Error::Model("gradient shape mismatch".into()));
        }
        if let Some(i) = grads.iter().position(|g| !g.is_finite()) {
            return Err(Error::Model(format!("non-finite gradient at index {i}")));
        }
        let AdamHyper {
            lr,
            beta1,
            beta2,
            eps,
        } = self.hyper;
        self.t += 1;
        let c1 = 1.0 - beta1.powi(self.t as i32);
        let c2 = 1.0 - beta2.powi(self.t as i32);
        for (((p, &g), m), v) in params
            .data
            .iter_mut()
            .zip(grads)
            .zip(self.m.iter_mut())
            .zip(self.v.iter_mut())
        {
            *m = beta1 * *m + (1.0 - beta1) * g;
            *v = beta2 * *v + (1.0 - beta2) * g * g;
            let mhat = *m / c1;
            let vhat = *v / c2;
            *p -= lr * mhat / (vhat.sqrt() + eps);
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn tiny(dropout: f64) -> (Architecture, NetParams) {
        let mut arch = Architecture::new(4, &[8, 8, 8], 3);
        arch.dropout = dropout;
        let p = NetParams::init(&arch, &mut ChaCha8Rng::seed_from_u64(7)).unwrap();
        (arch, p)
    }

    fn random_batch(rows: usize, seed: u64) -> TrainBatch {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut b = TrainBatch::new(4, 3);
        for _ in 0..rows {
            let f: Vec<f64> = (0..4).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let mut mask = vec![true; 3];
            if rng.gen_bool(0.3) {
                mask[rng.gen_range(0..3)] = false;
            }
            let raw: Vec<f64> = mask.iter().map(|&m| if m { rng.gen::<f64>() } else { 0.0 }).collect();
            let s: f64 = raw.iter().sum();
            let pi: Vec<f64> = raw.iter().map(|v| v / s).collect();
            b.push(&f, &pi, rng.gen_range(-1.0..1.0), &mask);
        }
        b
    }

    #[test]
    fn zero_params_give_uniform_policy() {
        let arch = Architecture::new(4, &[8, 8, 8], 4);
        let p = NetParams::zeros(&arch).unwrap();
        let out = p.forward(&[1.0, 2.0, 3.0, 4.0], &[true, false, true, true], None).unwrap();
        assert_eq!(out.value, 0.0);
        for (a, &q) in out.policy.iter().enumerate() {
            assert_eq!(q, if a == 1 { 0.0 } else { 1.0 / 3.0 });
        }
    }

    #[test]
    fn seeded_init_is_reproducible() {
        let (arch, a) = tiny(0.3);
        let b = NetParams::init(&arch, &mut ChaCha8Rng::seed_from_u64(7)).unwrap();
        assert_eq!(a, b);
        let limit = (6.0f64 / 12.0).sqrt();
        let (w, bias) = a.layer_ranges()[0].clone();
        assert!(a.as_slice()[w].iter().all(|v| v.abs() <= limit));
        assert!(a.as_slice()[bias].iter().all(|&v| v == 0.0));
    }

    #[test]
    fn shape_errors() {
        let (_, p) = tiny(0.0);
        assert!(p.forward(&[1.0; 5], &[true; 3], None).is_err());
        assert!(p.forward(&[1.0; 4], &[true; 2], None).is_err());
        assert!(p.forward(&[1.0; 4], &[false; 3], None).is_err());
    }

    #[test]
    fn single_legal_action_is_one_hot() {
        let (_, p) = tiny(0.3);
        let out = p.forward(&[0.3, -1.0, 2.0, 0.1], &[false, true, false], None).unwrap();
        assert_eq!(out.policy, vec![0.0, 1.0, 0.0]);
    }

    #[test]
    fn inference_is_deterministic_training_is_not() {
        let (_, p) = tiny(0.3);
        let x = [0.3, -1.0, 2.0, 0.1];
        let a = p.forward(&x, &[true; 3], None).unwrap();
        let b = p.forward(&x, &[true; 3], None).unwrap();
        assert_eq!(a, b);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let outs: Vec<_> = (0..20).map(|_| p.forward(&x, &[true; 3], Some(&mut rng)).unwrap()).collect();
        assert!(outs.iter().any(|o| o != &a));
    }

    #[test]
    fn loss_at_cross_entropy_floor() {
        let arch = Architecture::new(2, &[3], 3);
        let p = NetParams::zeros(&arch).unwrap();
        let mut b = TrainBatch::new(2, 3);
        let third = 1.0 / 3.0;
        b.push(&[1.0, 0.0], &[third; 3], 0.0, &[true; 3]);
        let l = p.loss(&b, 1e-4).unwrap();
        assert!((l.total - 3f64.ln()).abs() < 1e-12);
        assert_eq!(l.value, 0.0);

        let (g, _) = p.grad_with_dropout(&b, 0.0, None).unwrap();
        let (_, vb) = p.layer_ranges()[2].clone();
        assert_eq!(g[vb.start], 0.0, "value head gradient at its target");
    }

    #[test]
    fn one_hot_target_costs_minus_log_p() {
        let (_, p) = tiny(0.0);
        let x = [0.1, 0.2, 0.3, 0.4];
        let out = p.forward(&x, &[true; 3], None).unwrap();
        let mut b = TrainBatch::new(4, 3);
        b.push(&x, &[0.0, 1.0, 0.0], out.value, &[true; 3]);
        let l = p.loss(&b, 0.0).unwrap();
        assert!((l.policy + out.policy[1].ln()).abs() < 1e-12);
        assert!(l.value.abs() < 1e-24);
    }

    #[test]
    fn batch_errors() {
        let (_, p) = tiny(0.0);
        assert!(p.loss(&TrainBatch::new(4, 3), 0.0).is_err());
        let mut b = TrainBatch::new(4, 3);
        b.push(&[0.0; 4], &[0.5, 0.5, 0.0], 0.0, &[true, false, true]);
        assert!(p.loss(&b, 0.0).is_err(), "mass on a masked action");
    }

    #[test]
    fn regularization_gradient() {
        let (_, p) = tiny(0.0);
        let b = random_batch(3, 1);
        let (g0, _) = p.grad_with_dropout(&b, 0.0, None).unwrap();
        let (g1, _) = p.grad_with_dropout(&b, 0.5, None).unwrap();
        let weights: Vec<usize> = (0..p.len()).filter(|&i| p.is_weight(i)).collect();
        for i in 0..p.len() {
            let expect = if weights.contains(&i) { 2.0 * 0.5 * p.as_slice()[i] } else { 0.0 };
            assert!((g1[i] - g0[i] - expect).abs() < 1e-12);
        }
    }

    #[test]
    fn adam_first_step_closed_form() {
        let arch = Architecture::new(2, &[2], 2);
        let mut p = NetParams::zeros(&arch).unwrap();
        let mut opt = Adam::new(p.len(), AdamHyper::default());
        let g: Vec<f64> = (0..p.len()).map(|i| (i as f64 - 4.0) * 0.1).collect();
        opt.step(&mut p, &g).unwrap();
        for (w, gi) in p.as_slice().iter().zip(&g) {
            let expect = -1e-3 * gi / (gi.abs() + 1e-8);
            assert!((w - expect).abs() < 1e-15);
        }
    }

    #[test]
    fn adam_zero_gradient_and_nan() {
        let (_, mut p) = tiny(0.0);
        let before = p.clone();
        let mut opt = Adam::new(p.len(), AdamHyper::default());
        let zeros = vec![0.0; p.len()];
        opt.step(&mut p, &zeros).unwrap();
        assert_eq!(p, before);
        let mut g = vec![0.0; p.len()];
        g[3] = f64::NAN;
        assert!(opt.step(&mut p, &g).is_err());
        assert_eq!(p, before);
    }

    #[test]
    fn checkpoint_round_trip() {
        let (_, mut p) = tiny(0.3);
        let mut opt = Adam::new(p.len(), AdamHyper::default());
        let b = random_batch(4, 2);
        let (g, _) = p.grad(&b, 1e-4, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        opt.step(&mut p, &g).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("net.ckpt");
        p.save(&opt, &path).unwrap();
        let (q, opt2) = NetParams::load(&path).unwrap();
        assert_eq!(q, p);
        assert_eq!(opt2, opt);
        let x = [0.5, 0.25, -1.0, 3.0];
        let a = p.forward(&x, &[true; 3], None).unwrap();
        let c = q.forward(&x, &[true; 3], None).unwrap();
        assert_eq!(a.value.to_bits(), c.value.to_bits());
        for (u, v) in a.policy.iter().zip(&c.policy) {
            assert_eq!(u.to_bits(), v.to_bits());
        }
        std::fs::write(&path, b"garbage").unwrap();
        assert!(NetParams::load(&path).is_err());
    }

    #[test]
    fn overfits_fixed_batch() {
        let (_, mut p) = tiny(0.0);
        let b = random_batch(16, 5);
        let mut opt = Adam::new(p.len(), AdamHyper { lr: 1e-2, ..Default::default() });
        let start = p.loss(&b, 1e-4).unwrap().total;
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        for _ in 0..200 {
            let (g, _) = p.grad(&b, 1e-4, &mut rng).unwrap();
            opt.step(&mut p, &g).unwrap();
        }
        let end = p.loss(&b, 1e-4).unwrap().total;
        // The policy cross-entropy is floored by target entropy; compare the
        // reducible part.
        let floor: f64 = (0..b.len())
            .map(|i| {
                -TrainBatch::row(&b.policy_targets, 3, i)
                    .iter()
                    .filter(|&&t| t > 0.0)
                    .map(|t| t * t.ln())
                    .sum::<f64>()
            })
            .sum::<f64>()
            / b.len() as f64;
        assert!(end - floor <= 0.5 * (start - floor), "start {start}, end {end}, floor {floor}");
    }

    #[test]
    fn dropout_preserves_expectation() {
        let (_, p) = tiny(0.3);
        let x = [0.4, -0.2, 0.9, 0.1];
        let clean = p.run(&x, &[true; 3], None).unwrap();
        // Second hidden layer pre-activation depends linearly on the dropped
        // first-layer activations.
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let n = 10_000;
        let unit = (0..8).find(|&o| clean.pre[1][o].abs() > 1e-3).unwrap();
        let samples: Vec<f64> = (0..n)
            .map(|_| {
                let m = p.sample_dropout(1, &mut rng);
                p.run(&x, &[true; 3], Some(&m.per_sample[0])).unwrap().pre[1][unit]
            })
            .collect();
        let mean = samples.iter().sum::<f64>() / n as f64;
        let var = samples.iter().map(|s| (s - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
        let se = (var / n as f64).sqrt();
        assert!((mean - clean.pre[1][unit]).abs() <= 3.0 * se, "mean {mean} vs {} (se {se})", clean.pre[1][unit]);
    }

    #[test]
    fn gradient_matches_central_differences() {
        let (_, p) = tiny(0.3);
        let b = random_batch(6, 9);
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let masks = p.sample_dropout(b.len(), &mut rng);
        let (g, _) = p.grad_with_dropout(&b, 1e-4, Some(&masks)).unwrap();
        let h = 1e-4;
        for (w, bias) in p.layer_ranges() {
            let coords: Vec<usize> = w.chain(bias).collect();
            for _ in 0..64 {
                let i = coords[rng.gen_range(0..coords.len())];
                let mut q = p.clone();
                q.as_mut_slice()[i] += h;
                let up = q.loss_with_dropout(&b, 1e-4, &masks).unwrap().total;
                q.as_mut_slice()[i] -= 2.0 * h;
                let down = q.loss_with_dropout(&b, 1e-4, &masks).unwrap().total;
                let num = (up - down) / (2.0 * h);
                let rel = (num - g[i]).abs() / num.abs().max(g[i].abs()).max(1e-8);
                assert!(rel <= 1e-4, "coordinate {i}: analytic {} numeric {num}", g[i]);
            }
        }
    }
}
